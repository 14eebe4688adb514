//! Procedural scene generator and the synthetic caption-pair factory.
//!
//! Scenes are rooms of tagged boxes (class, color, size) with surface points.
//! Clean reference descriptions come from noise-free templates; synthetic
//! pairs come from frustum crops of simulated camera frames, a noisy template
//! captioner and a tag-overlap similarity filter.

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::geometry::{frustum_crop, Aabb, CameraPose, GeometryError, InstanceMask, Intrinsics, PointCloud};
use crate::textproc::tokenize;

#[derive(Debug, Error)]
pub enum SynthError {
    #[error("a scene needs at least one object")]
    NoObjects,
    #[error("{requested} objects requested but only {available} distinct tag combinations exist")]
    TooManyObjects { requested: usize, available: usize },
    #[error("could not place {0} objects without overlap")]
    Placement(usize),
    #[error("invalid synth config: field `{field}`: {message}")]
    Config { field: &'static str, message: String },
    #[error(transparent)]
    Geometry(#[from] GeometryError),
}

/// Deterministic 64-bit mixing of seed components.
pub fn derive_seed(parts: &[u64]) -> u64 {
    let mut h = 0x9E37_79B9_7F4A_7C15u64;
    for &p in parts {
        let mut z = h ^ p.wrapping_add(0x9E37_79B9_7F4A_7C15);
        z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
        z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
        h = z ^ (z >> 31);
    }
    h
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ObjectClass {
    pub name: String,
    /// Medium-size extent in metres.
    pub extent: [f64; 3],
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ColorTag {
    pub name: String,
    pub rgb: [f64; 3],
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SizeTag {
    pub name: String,
    pub scale: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SceneConfig {
    pub classes: Vec<ObjectClass>,
    pub colors: Vec<ColorTag>,
    pub sizes: Vec<SizeTag>,
    pub room: [f64; 3],
    /// Surface samples per square metre of box surface.
    pub point_density: f64,
    pub min_points: usize,
    pub floor_points: usize,
    /// Probability that a point's class channel names a random class.
    pub class_noise: f64,
    pub color_jitter: f64,
    /// Minimum gap between object footprints.
    pub gap: f64,
}

impl Default for SceneConfig {
    fn default() -> Self {
        let class = |name: &str, extent: [f64; 3]| ObjectClass {
            name: name.into(),
            extent,
        };
        let color = |name: &str, rgb: [f64; 3]| ColorTag { name: name.into(), rgb };
        let size = |name: &str, scale: f64| SizeTag { name: name.into(), scale };
        Self {
            classes: vec![
                class("chair", [0.5, 0.5, 0.9]),
                class("table", [1.2, 0.8, 0.75]),
                class("cabinet", [0.6, 0.5, 1.2]),
                class("bed", [1.0, 1.9, 0.5]),
                class("sofa", [1.8, 0.8, 0.8]),
                class("lamp", [0.3, 0.3, 1.5]),
            ],
            colors: vec![
                color("red", [0.85, 0.12, 0.1]),
                color("green", [0.1, 0.7, 0.2]),
                color("blue", [0.1, 0.2, 0.85]),
                color("white", [0.95, 0.95, 0.95]),
                color("black", [0.05, 0.05, 0.05]),
                color("yellow", [0.9, 0.85, 0.1]),
            ],
            sizes: vec![size("small", 0.7), size("large", 1.3)],
            room: [6.0, 6.0, 3.0],
            point_density: 40.0,
            min_points: 30,
            floor_points: 200,
            class_noise: 0.1,
            color_jitter: 0.05,
            gap: 0.1,
        }
    }
}

impl SceneConfig {
    pub fn n_classes(&self) -> usize {
        self.classes.len()
    }

    /// Width of the per-point auxiliary features: rgb, normal, class scores.
    pub fn aux_dim(&self) -> usize {
        6 + self.classes.len()
    }

    pub fn class_names(&self) -> Vec<String> {
        self.classes.iter().map(|c| c.name.clone()).collect()
    }

    pub fn validate(&self) -> Result<(), SynthError> {
        let bad = |field, message: &str| {
            Err(SynthError::Config {
                field,
                message: message.into(),
            })
        };
        if self.classes.is_empty() {
            return bad("classes", "at least one class is required");
        }
        if self.colors.is_empty() {
            return bad("colors", "at least one color is required");
        }
        if self.sizes.is_empty() {
            return bad("sizes", "at least one size is required");
        }
        let words = self
            .classes
            .iter()
            .map(|c| &c.name)
            .chain(self.colors.iter().map(|c| &c.name))
            .chain(self.sizes.iter().map(|s| &s.name));
        for w in words {
            if tokenize(w) != [w.clone()] {
                return bad("classes", &format!("tag `{w}` must be a single lowercase word"));
            }
        }
        if self.classes.iter().any(|c| c.extent.iter().any(|&e| !(e > 0.0))) {
            return bad("classes", "extents must be positive");
        }
        if self.sizes.iter().any(|s| !(s.scale > 0.0)) {
            return bad("sizes", "scales must be positive");
        }
        if self.room.iter().any(|&r| !(r > 0.0)) {
            return bad("room", "extent must be positive");
        }
        if self.min_points < 1 {
            return bad("min_points", "must be at least 1");
        }
        if !(0.0..=1.0).contains(&self.class_noise) {
            return bad("class_noise", "must lie in [0, 1]");
        }
        Ok(())
    }

    /// Sentences covering every word the caption templates can produce.
    pub fn template_corpus(&self) -> Vec<String> {
        let mut out = vec!["the a next to".to_string()];
        out.extend(self.classes.iter().map(|c| c.name.clone()));
        out.extend(self.colors.iter().map(|c| c.name.clone()));
        out.extend(self.sizes.iter().map(|s| s.name.clone()));
        out
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SceneObject {
    pub instance_id: u32,
    pub semantic_class: usize,
    pub color: usize,
    pub size: usize,
    pub aabb: Aabb,
    pub mask: InstanceMask,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Description {
    pub target: u32,
    pub text: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Scene {
    pub scene_id: String,
    pub seed: u64,
    pub room: [f64; 3],
    pub cloud: PointCloud,
    pub objects: Vec<SceneObject>,
    pub descriptions: Vec<Description>,
}

impl Scene {
    pub fn masks(&self) -> Vec<InstanceMask> {
        self.objects.iter().map(|o| o.mask.clone()).collect()
    }

    pub fn object(&self, instance_id: u32) -> Option<&SceneObject> {
        self.objects.iter().find(|o| o.instance_id == instance_id)
    }

    pub fn object_index(&self, instance_id: u32) -> Option<usize> {
        self.objects.iter().position(|o| o.instance_id == instance_id)
    }
}

fn footprint_overlaps(a: &Aabb, b: &Aabb, gap: f64) -> bool {
    (0..2).all(|k| a.min[k] < b.max[k] + gap && b.min[k] < a.max[k] + gap)
}

fn distance_xy(a: &Aabb, b: &Aabb) -> f64 {
    let (ca, cb) = (a.center(), b.center());
    ((ca[0] - cb[0]).powi(2) + (ca[1] - cb[1]).powi(2)).sqrt()
}

/// Index of the object nearest to `objects[i]` by footprint-centre distance,
/// restricted to `candidates`; ties go to the earliest candidate.
fn nearest_neighbor(objects: &[SceneObject], i: usize, candidates: &[usize]) -> Option<usize> {
    let mut best: Option<(usize, f64)> = None;
    for &j in candidates {
        if j == i {
            continue;
        }
        let d = distance_xy(&objects[i].aabb, &objects[j].aabb);
        if best.is_none_or(|(_, bd)| d < bd) {
            best = Some((j, d));
        }
    }
    best.map(|(j, _)| j)
}

/// The clean reference description of `objects[i]`.
pub fn clean_caption(config: &SceneConfig, objects: &[SceneObject], i: usize) -> String {
    let o = &objects[i];
    let all: Vec<usize> = (0..objects.len()).collect();
    let head = format!(
        "the {} {} {}",
        config.colors[o.color].name, config.sizes[o.size].name, config.classes[o.semantic_class].name
    );
    match nearest_neighbor(objects, i, &all) {
        Some(j) => format!("{head} next to the {}", config.classes[objects[j].semantic_class].name),
        None => head,
    }
}

fn sample_box_surface(rng: &mut ChaCha8Rng, b: &Aabb) -> ([f64; 3], [f64; 3]) {
    let e = b.extent();
    let areas = [e[1] * e[2], e[1] * e[2], e[0] * e[2], e[0] * e[2], e[0] * e[1], e[0] * e[1]];
    let total: f64 = areas.iter().sum();
    let mut pick = rng.gen_range(0.0..total);
    let mut face = 5;
    for (f, a) in areas.iter().enumerate() {
        if pick < *a {
            face = f;
            break;
        }
        pick -= a;
    }
    let axis = face / 2;
    let mut p = [0.0; 3];
    for (k, v) in p.iter_mut().enumerate() {
        *v = if k == axis {
            if face % 2 == 0 {
                b.min[k]
            } else {
                b.max[k]
            }
        } else {
            rng.gen_range(b.min[k]..=b.max[k])
        };
    }
    let mut n = [0.0; 3];
    n[axis] = if face % 2 == 0 { -1.0 } else { 1.0 };
    (p, n)
}

/// Deterministic scene with `n_objects` boxes carrying distinct tag triples.
pub fn generate_scene(config: &SceneConfig, scene_id: &str, seed: u64, n_objects: usize) -> Result<Scene, SynthError> {
    config.validate()?;
    if n_objects == 0 {
        return Err(SynthError::NoObjects);
    }
    let combos = config.classes.len() * config.colors.len() * config.sizes.len();
    if n_objects > combos {
        return Err(SynthError::TooManyObjects {
            requested: n_objects,
            available: combos,
        });
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut all_tags: Vec<(usize, usize, usize)> = (0..config.classes.len())
        .flat_map(|c| (0..config.colors.len()).flat_map(move |k| (0..config.sizes.len()).map(move |s| (c, k, s))))
        .collect();
    all_tags.shuffle(&mut rng);

    let mut boxes: Vec<Aabb> = Vec::with_capacity(n_objects);
    let mut tags = Vec::with_capacity(n_objects);
    for &(class, color, size) in &all_tags {
        if tags.len() == n_objects {
            break;
        }
        let scale = config.sizes[size].scale;
        let mut ext = config.classes[class].extent.map(|e| e * scale);
        if rng.gen_bool(0.5) {
            ext.swap(0, 1);
        }
        if ext[0] >= config.room[0] || ext[1] >= config.room[1] {
            continue;
        }
        let mut placed = None;
        for _ in 0..200 {
            let x = rng.gen_range(0.0..config.room[0] - ext[0]);
            let y = rng.gen_range(0.0..config.room[1] - ext[1]);
            let candidate = Aabb::new([x, y, 0.0], [x + ext[0], y + ext[1], ext[2]])?;
            if boxes.iter().all(|b| !footprint_overlaps(b, &candidate, config.gap)) {
                placed = Some(candidate);
                break;
            }
        }
        if let Some(b) = placed {
            boxes.push(b);
            tags.push((class, color, size));
        }
    }
    if tags.len() < n_objects {
        return Err(SynthError::Placement(n_objects));
    }

    let k = config.n_classes();
    let mut cloud = PointCloud::empty(config.aux_dim());
    let mut objects = Vec::with_capacity(n_objects);
    for (i, (b, &(class, color, size))) in boxes.iter().zip(&tags).enumerate() {
        let e = b.extent();
        let area = 2.0 * (e[0] * e[1] + e[1] * e[2] + e[0] * e[2]);
        let n_points = ((area * config.point_density).round() as usize).max(config.min_points);
        let start = cloud.len();
        for _ in 0..n_points {
            let (p, normal) = sample_box_surface(&mut rng, b);
            let mut aux = Vec::with_capacity(config.aux_dim());
            for c in config.colors[color].rgb {
                let j = if config.color_jitter > 0.0 {
                    rng.gen_range(-config.color_jitter..=config.color_jitter)
                } else {
                    0.0
                };
                aux.push((c + j).clamp(0.0, 1.0));
            }
            aux.extend(normal);
            let mut scores = vec![0.0; k];
            let label = if rng.gen_bool(config.class_noise) { rng.gen_range(0..k) } else { class };
            scores[label] = 1.0;
            aux.extend(scores);
            cloud.push(p, &aux);
        }
        objects.push(SceneObject {
            instance_id: i as u32 + 1,
            semantic_class: class,
            color,
            size,
            aabb: *b,
            mask: InstanceMask::new(i as u32 + 1, class, (start..cloud.len()).collect()),
        });
    }
    for _ in 0..config.floor_points {
        let p = [rng.gen_range(0.0..config.room[0]), rng.gen_range(0.0..config.room[1]), 0.0];
        let mut aux = vec![0.5, 0.5, 0.5, 0.0, 0.0, 1.0];
        aux.extend(std::iter::repeat_n(0.0, k));
        cloud.push(p, &aux);
    }
    let descriptions = (0..objects.len())
        .map(|i| Description {
            target: objects[i].instance_id,
            text: clean_caption(config, &objects, i),
        })
        .collect();
    Ok(Scene {
        scene_id: scene_id.to_string(),
        seed,
        room: config.room,
        cloud,
        objects,
        descriptions,
    })
}

/// Fixed pinhole rig orbiting the room centre.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct CameraRig {
    pub fx: f64,
    pub fy: f64,
    pub width: u32,
    pub height: u32,
    pub near: f64,
    pub far: f64,
    pub orbit_radius: f64,
    pub height_m: f64,
    /// Number of frames per full revolution.
    pub frames_per_orbit: usize,
}

impl Default for CameraRig {
    fn default() -> Self {
        Self {
            fx: 300.0,
            fy: 300.0,
            width: 320,
            height: 240,
            near: 0.1,
            far: 8.0,
            orbit_radius: 2.6,
            height_m: 1.6,
            frames_per_orbit: 100,
        }
    }
}

impl CameraRig {
    /// Camera for frame `index`, looking across the room through its centre.
    pub fn pose(&self, room: [f64; 3], index: usize) -> Result<CameraPose, GeometryError> {
        let theta = 2.0 * std::f64::consts::PI * index as f64 / self.frames_per_orbit.max(1) as f64;
        let (cx, cy) = (room[0] / 2.0, room[1] / 2.0);
        let eye = [
            cx + self.orbit_radius * theta.cos(),
            cy + self.orbit_radius * theta.sin(),
            self.height_m,
        ];
        let target = [cx - 0.5 * self.orbit_radius * theta.cos(), cy - 0.5 * self.orbit_radius * theta.sin(), 0.3];
        let intr = Intrinsics {
            fx: self.fx,
            fy: self.fy,
            cx: self.width as f64 / 2.0,
            cy: self.height as f64 / 2.0,
        };
        CameraPose::look_at(eye, target, [0.0, 0.0, 1.0], intr, (self.width, self.height), (self.near, self.far))
    }
}

/// One camera frame: its pose and the visible part of every instance.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FrameRecord {
    pub frame_index: usize,
    pub pose: CameraPose,
    /// Masks over the scene cloud restricted to points in view; empty ones omitted.
    pub masks: Vec<InstanceMask>,
}

pub fn frame_record(scene: &Scene, rig: &CameraRig, frame_index: usize) -> Result<FrameRecord, GeometryError> {
    let pose = rig.pose(scene.room, frame_index)?;
    let masks = scene
        .objects
        .iter()
        .filter_map(|o| {
            let seen: Vec<usize> = o
                .mask
                .point_indices
                .iter()
                .copied()
                .filter(|&i| pose.sees(scene.cloud.xyz(i)))
                .collect();
            (!seen.is_empty()).then(|| InstanceMask::new(o.instance_id, o.semantic_class, seen))
        })
        .collect();
    Ok(FrameRecord {
        frame_index,
        pose,
        masks,
    })
}

/// What a captioner or scorer may inspect about one object in one frame.
#[derive(Debug, Clone, PartialEq)]
pub struct ObjectView {
    pub instance_id: u32,
    pub class_name: String,
    pub color: String,
    pub size: String,
    /// Class of the nearest other object visible in the same frame.
    pub neighbor_class: Option<String>,
    pub visible_points: usize,
}

pub trait Captioner {
    fn caption(&self, view: &ObjectView, seed: u64) -> String;
}

pub trait SimilarityScorer {
    /// Image-text agreement in `[-1, 1]`.
    fn score(&self, view: &ObjectView, caption: &str) -> f64;
}

/// Template captioner that corrupts 1 to 3 of the (color, size, class)
/// slots with probability `noise`.
#[derive(Debug, Clone)]
pub struct TemplateCaptioner {
    pub noise: f64,
    pub classes: Vec<String>,
    pub colors: Vec<String>,
    pub sizes: Vec<String>,
}

impl TemplateCaptioner {
    pub fn new(config: &SceneConfig, noise: f64) -> Self {
        Self {
            noise,
            classes: config.class_names(),
            colors: config.colors.iter().map(|c| c.name.clone()).collect(),
            sizes: config.sizes.iter().map(|s| s.name.clone()).collect(),
        }
    }

    fn replace(rng: &mut ChaCha8Rng, current: &str, pool: &[String]) -> String {
        let others: Vec<&String> = pool.iter().filter(|w| *w != current).collect();
        match others.choose(rng) {
            Some(w) => (*w).clone(),
            None => current.to_string(),
        }
    }
}

impl Captioner for TemplateCaptioner {
    fn caption(&self, view: &ObjectView, seed: u64) -> String {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut slots = [view.color.clone(), view.size.clone(), view.class_name.clone()];
        if rng.gen_bool(self.noise.clamp(0.0, 1.0)) {
            let n = rng.gen_range(1..=3);
            let mut which = [0usize, 1, 2];
            which.shuffle(&mut rng);
            for &s in &which[..n] {
                let pool = [&self.colors, &self.sizes, &self.classes][s];
                slots[s] = Self::replace(&mut rng, &slots[s], pool);
            }
        }
        let head = format!("a {} {} {}", slots[0], slots[1], slots[2]);
        match &view.neighbor_class {
            Some(n) => format!("{head} next to a {n}"),
            None => head,
        }
    }
}

/// Fraction of the object's three tags present in the caption's head phrase
/// (the part before any "next to" relation).
#[derive(Debug, Clone, Copy, Default)]
pub struct TagSimilarity;

impl SimilarityScorer for TagSimilarity {
    fn score(&self, view: &ObjectView, caption: &str) -> f64 {
        mock_similarity(view, caption)
    }
}

pub fn mock_similarity(view: &ObjectView, caption: &str) -> f64 {
    let tokens = tokenize(caption);
    let cut = tokens
        .windows(2)
        .position(|w| w[0] == "next" && w[1] == "to")
        .unwrap_or(tokens.len());
    let head = &tokens[..cut];
    let hits = [&view.color, &view.size, &view.class_name]
        .iter()
        .filter(|tag| head.iter().any(|t| t == **tag))
        .count();
    hits as f64 / 3.0
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PipelineConfig {
    pub n_frames: usize,
    pub frame_stride: usize,
    pub top_k: usize,
    pub sim_threshold: f64,
    pub caption_noise: f64,
    pub seed: u64,
    #[serde(default)]
    pub rig: CameraRig,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        Self {
            n_frames: 100,
            frame_stride: 20,
            top_k: 3,
            sim_threshold: 0.3,
            caption_noise: 0.3,
            seed: 0,
            rig: CameraRig::default(),
        }
    }
}

impl PipelineConfig {
    pub fn validate(&self) -> Result<(), SynthError> {
        if self.frame_stride == 0 {
            return Err(SynthError::Config {
                field: "frame_stride",
                message: "must be at least 1".into(),
            });
        }
        if !(0.0..=1.0).contains(&self.sim_threshold) {
            return Err(SynthError::Config {
                field: "sim_threshold",
                message: "must lie in [0, 1]".into(),
            });
        }
        if !(0.0..=1.0).contains(&self.caption_noise) {
            return Err(SynthError::Config {
                field: "caption_noise",
                message: "must lie in [0, 1]".into(),
            });
        }
        Ok(())
    }

    /// Frame indices the pipeline visits.
    pub fn processed_frames(&self) -> Vec<usize> {
        (0..self.n_frames).step_by(self.frame_stride.max(1)).collect()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PairSource {
    pub scene_id: String,
    pub frame_index: usize,
    pub instance_id: u32,
    pub rank: usize,
}

/// A frustum-cropped cloud with a caption for one of its objects.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SynthPair {
    pub source: PairSource,
    pub caption: String,
    pub similarity: f64,
    pub pose: CameraPose,
    pub cloud: PointCloud,
    /// Scene masks re-indexed into `cloud`, in scene order; empty ones dropped.
    pub masks: Vec<InstanceMask>,
    /// Index into `masks` of the captioned object.
    pub target: usize,
    pub semantic_class: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RejectReason {
    LowSimilarity,
    EmptyCrop,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RejectedPair {
    pub source: PairSource,
    pub caption: String,
    pub similarity: f64,
    pub reason: RejectReason,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct DatasetStats {
    pub scenes: usize,
    pub frames_processed: usize,
    pub attempted: usize,
    pub emitted: usize,
    pub filtered_similarity: usize,
    pub dropped_empty_crop: usize,
}

impl DatasetStats {
    pub fn is_conserved(&self) -> bool {
        self.emitted + self.filtered_similarity + self.dropped_empty_crop == self.attempted
    }

    fn absorb(&mut self, other: &DatasetStats) {
        self.scenes += other.scenes;
        self.frames_processed += other.frames_processed;
        self.attempted += other.attempted;
        self.emitted += other.emitted;
        self.filtered_similarity += other.filtered_similarity;
        self.dropped_empty_crop += other.dropped_empty_crop;
    }
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct PipelineOutput {
    pub pairs: Vec<SynthPair>,
    pub rejected: Vec<RejectedPair>,
    pub stats: DatasetStats,
}

fn object_view(config: &SceneConfig, scene: &Scene, frame: &FrameRecord, instance_id: u32) -> Option<ObjectView> {
    let i = scene.object_index(instance_id)?;
    let o = &scene.objects[i];
    let visible: Vec<usize> = frame.masks.iter().filter_map(|m| scene.object_index(m.instance_id)).collect();
    let neighbor = nearest_neighbor(&scene.objects, i, &visible);
    Some(ObjectView {
        instance_id,
        class_name: config.classes[o.semantic_class].name.clone(),
        color: config.colors[o.color].name.clone(),
        size: config.sizes[o.size].name.clone(),
        neighbor_class: neighbor.map(|j| config.classes[scene.objects[j].semantic_class].name.clone()),
        visible_points: frame
            .masks
            .iter()
            .find(|m| m.instance_id == instance_id)
            .map_or(0, |m| m.len()),
    })
}

/// Runs caption, score and crop for the dominant objects of one frame.
///
/// A pair is rejected for low similarity first; otherwise it is dropped when
/// the frustum crop keeps none of the captioned object's points.
pub fn process_frame(
    config: &SceneConfig,
    pipeline: &PipelineConfig,
    scene: &Scene,
    frame: &FrameRecord,
    captioner: &dyn Captioner,
    scorer: &dyn SimilarityScorer,
) -> Result<PipelineOutput, SynthError> {
    let mut out = PipelineOutput::default();
    out.stats.frames_processed = 1;
    let selected = crate::geometry::dominant_objects(&frame.masks, pipeline.top_k);
    let mut crop = None;
    for (rank, &instance_id) in selected.iter().enumerate() {
        let Some(view) = object_view(config, scene, frame, instance_id) else {
            continue;
        };
        out.stats.attempted += 1;
        let seed = derive_seed(&[pipeline.seed, scene.seed, frame.frame_index as u64, rank as u64]);
        let caption = captioner.caption(&view, seed);
        let similarity = scorer.score(&view, &caption);
        let source = PairSource {
            scene_id: scene.scene_id.clone(),
            frame_index: frame.frame_index,
            instance_id,
            rank,
        };
        let reject = |reason| RejectedPair {
            source: source.clone(),
            caption: caption.clone(),
            similarity,
            reason,
        };
        if similarity < pipeline.sim_threshold {
            out.stats.filtered_similarity += 1;
            out.rejected.push(reject(RejectReason::LowSimilarity));
            continue;
        }
        if crop.is_none() {
            crop = Some(frustum_crop(&scene.cloud, &frame.pose)?);
        }
        let c = crop.as_ref().expect("crop computed above");
        let masks: Vec<InstanceMask> = scene
            .objects
            .iter()
            .filter_map(|o| c.remap_mask(&o.mask, scene.cloud.len()))
            .collect();
        let Some(target) = masks.iter().position(|m| m.instance_id == instance_id) else {
            out.stats.dropped_empty_crop += 1;
            out.rejected.push(reject(RejectReason::EmptyCrop));
            continue;
        };
        out.stats.emitted += 1;
        out.pairs.push(SynthPair {
            source,
            caption,
            similarity,
            pose: frame.pose,
            cloud: c.cloud.clone(),
            semantic_class: masks[target].semantic_class,
            masks,
            target,
        });
    }
    Ok(out)
}

/// Full pipeline over `scenes` in order, frames `0, stride, 2*stride, ...`.
pub fn synth_pipeline(
    config: &SceneConfig,
    pipeline: &PipelineConfig,
    scenes: &[Scene],
    captioner: &dyn Captioner,
    scorer: &dyn SimilarityScorer,
) -> Result<PipelineOutput, SynthError> {
    pipeline.validate()?;
    let mut out = PipelineOutput::default();
    for scene in scenes {
        out.stats.scenes += 1;
        for f in pipeline.processed_frames() {
            let frame = frame_record(scene, &pipeline.rig, f)?;
            let part = process_frame(config, pipeline, scene, &frame, captioner, scorer)?;
            out.pairs.extend(part.pairs);
            out.rejected.extend(part.rejected);
            out.stats.absorb(&part.stats);
        }
    }
    Ok(out)
}

pub fn dataset_stats(output: &PipelineOutput) -> DatasetStats {
    output.stats
}

/// Scenes `prefix-0000 ...` with seeds derived from `seed`.
pub fn generate_scenes(
    config: &SceneConfig,
    prefix: &str,
    seed: u64,
    count: usize,
    n_objects: usize,
) -> Result<Vec<Scene>, SynthError> {
    (0..count)
        .map(|i| generate_scene(config, &format!("{prefix}-{i:04}"), derive_seed(&[seed, i as u64]), n_objects))
        .collect()
}
