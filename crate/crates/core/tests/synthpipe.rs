use vlscene_core::geometry::iou;
use vlscene_core::synthpipe::{
    clean_caption, generate_scene, generate_scenes, mock_similarity, synth_pipeline, Captioner, ObjectView,
    PipelineConfig, RejectReason, SceneConfig, TagSimilarity, TemplateCaptioner,
};

#[test]
fn scenes_are_reproducible_and_well_formed() {
    let cfg = SceneConfig::default();
    let a = generate_scene(&cfg, "s", 42, 5).unwrap();
    let b = generate_scene(&cfg, "s", 42, 5).unwrap();
    assert_eq!(a, b);
    assert_ne!(a, generate_scene(&cfg, "s", 43, 5).unwrap());
    assert_eq!(a.cloud.aux_dim(), cfg.aux_dim());
    assert_eq!(a.descriptions.len(), a.objects.len());
    for (i, o) in a.objects.iter().enumerate() {
        assert!(o.mask.len() >= cfg.min_points);
        assert_eq!(o.instance_id as usize, i + 1);
        for p in &a.objects[i + 1..] {
            assert_eq!(iou(&o.aabb, &p.aabb), 0.0);
            assert!((o.semantic_class, o.color, o.size) != (p.semantic_class, p.color, p.size));
        }
    }
}

#[test]
fn clean_descriptions_name_the_target_and_a_neighbour() {
    let cfg = SceneConfig::default();
    let s = generate_scene(&cfg, "s", 3, 4).unwrap();
    for (i, d) in s.descriptions.iter().enumerate() {
        assert_eq!(d.target, s.objects[i].instance_id);
        assert_eq!(d.text, clean_caption(&cfg, &s.objects, i));
        assert!(d.text.starts_with("the "));
        assert!(d.text.contains(&cfg.classes[s.objects[i].semantic_class].name));
        assert!(d.text.contains(" next to the "));
    }
    let alone = generate_scene(&cfg, "s", 3, 1).unwrap();
    assert!(!alone.descriptions[0].text.contains("next to"));
}

#[test]
fn too_many_objects_is_an_error() {
    let cfg = SceneConfig::default();
    assert!(generate_scene(&cfg, "s", 0, 1000).is_err());
    let mut bad = cfg.clone();
    bad.classes.clear();
    assert!(bad.validate().is_err());
}

fn view() -> ObjectView {
    ObjectView {
        instance_id: 1,
        class_name: "chair".into(),
        color: "red".into(),
        size: "small".into(),
        neighbor_class: Some("table".into()),
        visible_points: 50,
    }
}

#[test]
fn noiseless_captions_score_one() {
    let cfg = SceneConfig::default();
    let cap = TemplateCaptioner::new(&cfg, 0.0);
    let text = cap.caption(&view(), 9);
    assert_eq!(text, "a red small chair next to a table");
    assert_eq!(mock_similarity(&view(), &text), 1.0);
    assert!(mock_similarity(&view(), "a blue large bed") < 0.3);
}

#[test]
fn threshold_and_noise_control_the_yield() {
    let cfg = SceneConfig::default();
    let scenes = generate_scenes(&cfg, "p", 5, 6, 5).unwrap();
    let clean = PipelineConfig {
        caption_noise: 0.0,
        ..PipelineConfig::default()
    };
    let out = synth_pipeline(&cfg, &clean, &scenes, &TemplateCaptioner::new(&cfg, 0.0), &TagSimilarity).unwrap();
    assert_eq!(out.stats.filtered_similarity, 0);
    assert!(out.pairs.iter().all(|p| p.similarity == 1.0));

    let strict = PipelineConfig {
        sim_threshold: 1.0,
        caption_noise: 1.0,
        ..PipelineConfig::default()
    };
    let out = synth_pipeline(&cfg, &strict, &scenes, &TemplateCaptioner::new(&cfg, 1.0), &TagSimilarity).unwrap();
    assert!(out.stats.is_conserved());
    assert!(out.rejected.iter().all(|r| r.reason == RejectReason::LowSimilarity || r.reason == RejectReason::EmptyCrop));
    assert!(out.pairs.iter().all(|p| p.similarity >= 1.0));
}

#[test]
fn pairs_point_at_their_target_mask() {
    let cfg = SceneConfig::default();
    let scenes = generate_scenes(&cfg, "p", 8, 3, 5).unwrap();
    let out = synth_pipeline(&cfg, &PipelineConfig::default(), &scenes, &TemplateCaptioner::new(&cfg, 0.3), &TagSimilarity).unwrap();
    assert!(!out.pairs.is_empty());
    for p in &out.pairs {
        let m = &p.masks[p.target];
        assert_eq!(m.instance_id, p.source.instance_id);
        assert_eq!(m.semantic_class, p.semantic_class);
        m.validate(&p.cloud).unwrap();
        assert!(p.source.rank < 3);
    }
}
