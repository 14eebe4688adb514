//! Point clouds, axis-aligned boxes, IoU, camera-frustum cropping and
//! instance-mask utilities.

use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum GeometryError {
    #[error("empty instance")]
    EmptyInstance,
    #[error("instance {instance_id}: point index {index} out of range for cloud of {len} points")]
    IndexOutOfRange {
        instance_id: u32,
        index: usize,
        len: usize,
    },
    #[error("instance {instance_id}: duplicate point index {index}")]
    DuplicateIndex { instance_id: u32, index: usize },
    #[error("invalid box: {0}")]
    InvalidBox(String),
    #[error("invalid camera pose: {0}")]
    InvalidPose(String),
    #[error("invalid point cloud: {0}")]
    InvalidCloud(String),
}

/// N points with xyz coordinates (meters) and `aux_dim` auxiliary channels each.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PointCloud {
    aux_dim: usize,
    xyz: Vec<[f64; 3]>,
    aux: Vec<f64>,
}

impl PointCloud {
    pub fn new(aux_dim: usize, xyz: Vec<[f64; 3]>, aux: Vec<f64>) -> Result<Self, GeometryError> {
        if aux.len() != xyz.len() * aux_dim {
            return Err(GeometryError::InvalidCloud(format!(
                "{} aux values for {} points with {} channels",
                aux.len(),
                xyz.len(),
                aux_dim
            )));
        }
        if xyz.iter().flatten().chain(aux.iter()).any(|v| !v.is_finite()) {
            return Err(GeometryError::InvalidCloud("non-finite value".into()));
        }
        Ok(Self { aux_dim, xyz, aux })
    }

    pub fn empty(aux_dim: usize) -> Self {
        Self {
            aux_dim,
            xyz: Vec::new(),
            aux: Vec::new(),
        }
    }

    pub fn len(&self) -> usize {
        self.xyz.len()
    }

    pub fn is_empty(&self) -> bool {
        self.xyz.is_empty()
    }

    pub fn aux_dim(&self) -> usize {
        self.aux_dim
    }

    /// Width of a full per-point feature row (xyz followed by aux).
    pub fn feature_dim(&self) -> usize {
        3 + self.aux_dim
    }

    pub fn xyz(&self, i: usize) -> [f64; 3] {
        self.xyz[i]
    }

    pub fn aux(&self, i: usize) -> &[f64] {
        &self.aux[i * self.aux_dim..(i + 1) * self.aux_dim]
    }

    pub fn positions(&self) -> &[[f64; 3]] {
        &self.xyz
    }

    pub fn push(&mut self, xyz: [f64; 3], aux: &[f64]) {
        assert_eq!(aux.len(), self.aux_dim, "aux width mismatch");
        self.xyz.push(xyz);
        self.aux.extend_from_slice(aux);
    }

    /// New cloud holding the points at `indices`, in that order.
    pub fn select(&self, indices: &[usize]) -> PointCloud {
        let mut out = PointCloud {
            aux_dim: self.aux_dim,
            xyz: Vec::with_capacity(indices.len()),
            aux: Vec::with_capacity(indices.len() * self.aux_dim),
        };
        for &i in indices {
            out.xyz.push(self.xyz[i]);
            out.aux.extend_from_slice(self.aux(i));
        }
        out
    }
}

/// Points of one object instance.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct InstanceMask {
    pub instance_id: u32,
    pub semantic_class: usize,
    pub point_indices: Vec<usize>,
}

impl InstanceMask {
    pub fn new(instance_id: u32, semantic_class: usize, point_indices: Vec<usize>) -> Self {
        Self {
            instance_id,
            semantic_class,
            point_indices,
        }
    }

    pub fn len(&self) -> usize {
        self.point_indices.len()
    }

    pub fn is_empty(&self) -> bool {
        self.point_indices.is_empty()
    }

    pub fn validate(&self, cloud: &PointCloud) -> Result<(), GeometryError> {
        if self.point_indices.is_empty() {
            return Err(GeometryError::EmptyInstance);
        }
        let mut seen = vec![false; cloud.len()];
        for &index in &self.point_indices {
            if index >= cloud.len() {
                return Err(GeometryError::IndexOutOfRange {
                    instance_id: self.instance_id,
                    index,
                    len: cloud.len(),
                });
            }
            if std::mem::replace(&mut seen[index], true) {
                return Err(GeometryError::DuplicateIndex {
                    instance_id: self.instance_id,
                    index,
                });
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Aabb {
    pub min: [f64; 3],
    pub max: [f64; 3],
}

impl Aabb {
    pub fn new(min: [f64; 3], max: [f64; 3]) -> Result<Self, GeometryError> {
        if min.iter().chain(max.iter()).any(|v| !v.is_finite()) {
            return Err(GeometryError::InvalidBox("non-finite corner".into()));
        }
        if (0..3).any(|k| min[k] > max[k]) {
            return Err(GeometryError::InvalidBox(format!("min {min:?} exceeds max {max:?}")));
        }
        Ok(Self { min, max })
    }

    pub fn from_center_size(center: [f64; 3], size: [f64; 3]) -> Result<Self, GeometryError> {
        let min = [0, 1, 2].map(|k| center[k] - size[k] / 2.0);
        let max = [0, 1, 2].map(|k| center[k] + size[k] / 2.0);
        Self::new(min, max)
    }

    pub fn extent(&self) -> [f64; 3] {
        [0, 1, 2].map(|k| self.max[k] - self.min[k])
    }

    pub fn center(&self) -> [f64; 3] {
        [0, 1, 2].map(|k| 0.5 * (self.min[k] + self.max[k]))
    }

    pub fn volume(&self) -> f64 {
        let e = self.extent();
        e[0] * e[1] * e[2]
    }

    pub fn contains(&self, p: [f64; 3]) -> bool {
        (0..3).all(|k| self.min[k] <= p[k] && p[k] <= self.max[k])
    }

    pub fn translated(&self, offset: [f64; 3]) -> Aabb {
        Aabb {
            min: [0, 1, 2].map(|k| self.min[k] + offset[k]),
            max: [0, 1, 2].map(|k| self.max[k] + offset[k]),
        }
    }
}

/// Tight box around the masked points.
pub fn aabb_from_mask(cloud: &PointCloud, mask: &InstanceMask) -> Result<Aabb, GeometryError> {
    let (&first, rest) = mask
        .point_indices
        .split_first()
        .ok_or(GeometryError::EmptyInstance)?;
    let check = |index: usize| {
        if index < cloud.len() {
            Ok(cloud.xyz(index))
        } else {
            Err(GeometryError::IndexOutOfRange {
                instance_id: mask.instance_id,
                index,
                len: cloud.len(),
            })
        }
    };
    let p0 = check(first)?;
    let (mut min, mut max) = (p0, p0);
    for &index in rest {
        let p = check(index)?;
        for k in 0..3 {
            min[k] = min[k].min(p[k]);
            max[k] = max[k].max(p[k]);
        }
    }
    Ok(Aabb { min, max })
}

/// Volume IoU of two axis-aligned boxes.
///
/// Identical boxes score 1 even when degenerate; distinct zero-volume boxes score 0.
pub fn iou(a: &Aabb, b: &Aabb) -> f64 {
    if a == b {
        return 1.0;
    }
    let mut inter = 1.0;
    for k in 0..3 {
        let lo = a.min[k].max(b.min[k]);
        let hi = a.max[k].min(b.max[k]);
        if hi <= lo {
            return 0.0;
        }
        inter *= hi - lo;
    }
    let union = a.volume() + b.volume() - inter;
    if union <= 0.0 {
        return 0.0;
    }
    (inter / union).clamp(0.0, 1.0)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Intrinsics {
    pub fx: f64,
    pub fy: f64,
    pub cx: f64,
    pub cy: f64,
}

/// Pinhole camera. Camera space is x right, y down, z forward (depth).
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CameraPose {
    pub intrinsics: Intrinsics,
    /// Row-major rigid transform taking world points into camera space.
    pub world_to_camera: [[f64; 4]; 4],
    pub width: u32,
    pub height: u32,
    pub near: f64,
    pub far: f64,
}

impl CameraPose {
    /// Camera at `eye` looking at `target`; `up` is the world up direction.
    pub fn look_at(
        eye: [f64; 3],
        target: [f64; 3],
        up: [f64; 3],
        intrinsics: Intrinsics,
        (width, height): (u32, u32),
        (near, far): (f64, f64),
    ) -> Result<Self, GeometryError> {
        let forward = normalize(sub(target, eye))
            .ok_or_else(|| GeometryError::InvalidPose("eye equals target".into()))?;
        // camera y points down, so right = forward x up
        let right = normalize(cross(forward, up))
            .ok_or_else(|| GeometryError::InvalidPose("up parallel to view direction".into()))?;
        let down = cross(forward, right);
        let rows = [right, down, forward];
        let mut m = [[0.0; 4]; 4];
        for (r, axis) in rows.iter().enumerate() {
            m[r][..3].copy_from_slice(axis);
            m[r][3] = -dot(*axis, eye);
        }
        m[3][3] = 1.0;
        let pose = Self {
            intrinsics,
            world_to_camera: m,
            width,
            height,
            near,
            far,
        };
        pose.validate()?;
        Ok(pose)
    }

    pub fn validate(&self) -> Result<(), GeometryError> {
        let k = &self.intrinsics;
        if !(k.fx > 0.0 && k.fy > 0.0) {
            return Err(GeometryError::InvalidPose("focal lengths must be positive".into()));
        }
        if !(self.near > 0.0) {
            return Err(GeometryError::InvalidPose("near must be positive".into()));
        }
        if !(self.far > self.near) {
            return Err(GeometryError::InvalidPose("far must exceed near".into()));
        }
        if self.width == 0 || self.height == 0 {
            return Err(GeometryError::InvalidPose("empty image".into()));
        }
        let m = &self.world_to_camera;
        if m.iter().flatten().any(|v| !v.is_finite()) {
            return Err(GeometryError::InvalidPose("non-finite transform".into()));
        }
        if m[3] != [0.0, 0.0, 0.0, 1.0] {
            return Err(GeometryError::InvalidPose("last row must be [0, 0, 0, 1]".into()));
        }
        let r = |i: usize| [m[i][0], m[i][1], m[i][2]];
        for i in 0..3 {
            for j in 0..3 {
                let expected = if i == j { 1.0 } else { 0.0 };
                if (dot(r(i), r(j)) - expected).abs() > 1e-9 {
                    return Err(GeometryError::InvalidPose("rotation is not orthonormal".into()));
                }
            }
        }
        if (dot(cross(r(0), r(1)), r(2)) - 1.0).abs() > 1e-9 {
            return Err(GeometryError::InvalidPose("rotation determinant is not +1".into()));
        }
        Ok(())
    }

    pub fn to_camera(&self, p: [f64; 3]) -> [f64; 3] {
        let m = &self.world_to_camera;
        [0, 1, 2].map(|r| m[r][0] * p[0] + m[r][1] * p[1] + m[r][2] * p[2] + m[r][3])
    }

    /// Frustum membership: depth in `[near, far]`, pixel in `[0, w) x [0, h)`.
    pub fn sees(&self, p: [f64; 3]) -> bool {
        let [x, y, z] = self.to_camera(p);
        if !(self.near <= z && z <= self.far) {
            return false;
        }
        let u = self.intrinsics.fx * x / z + self.intrinsics.cx;
        let v = self.intrinsics.fy * y / z + self.intrinsics.cy;
        (0.0..self.width as f64).contains(&u) && (0.0..self.height as f64).contains(&v)
    }
}

/// Result of cropping a cloud to a camera frustum.
#[derive(Debug, Clone, PartialEq)]
pub struct FrustumCrop {
    pub cloud: PointCloud,
    /// Source index of every retained point, ascending.
    pub kept: Vec<usize>,
}

impl FrustumCrop {
    pub fn is_empty(&self) -> bool {
        self.kept.is_empty()
    }

    /// Re-index `mask` into the cropped cloud; `None` when none of its points survive.
    pub fn remap_mask(&self, mask: &InstanceMask, source_len: usize) -> Option<InstanceMask> {
        let mut lookup = vec![usize::MAX; source_len];
        for (new, &old) in self.kept.iter().enumerate() {
            lookup[old] = new;
        }
        let indices: Vec<usize> = mask
            .point_indices
            .iter()
            .filter_map(|&i| lookup.get(i).copied().filter(|&j| j != usize::MAX))
            .collect();
        (!indices.is_empty()).then(|| InstanceMask::new(mask.instance_id, mask.semantic_class, indices))
    }
}

pub fn frustum_crop(cloud: &PointCloud, cam: &CameraPose) -> Result<FrustumCrop, GeometryError> {
    cam.validate()?;
    let kept: Vec<usize> = (0..cloud.len()).filter(|&i| cam.sees(cloud.xyz(i))).collect();
    Ok(FrustumCrop {
        cloud: cloud.select(&kept),
        kept,
    })
}

/// Instance ids of the `top_k` largest masks, largest first; ties go to the smaller id.
pub fn dominant_objects(masks: &[InstanceMask], top_k: usize) -> Vec<u32> {
    let mut order: Vec<&InstanceMask> = masks.iter().collect();
    order.sort_by(|a, b| b.len().cmp(&a.len()).then(a.instance_id.cmp(&b.instance_id)));
    order.into_iter().take(top_k).map(|m| m.instance_id).collect()
}

pub(crate) fn sub(a: [f64; 3], b: [f64; 3]) -> [f64; 3] {
    [a[0] - b[0], a[1] - b[1], a[2] - b[2]]
}

pub(crate) fn dot(a: [f64; 3], b: [f64; 3]) -> f64 {
    a[0] * b[0] + a[1] * b[1] + a[2] * b[2]
}

fn cross(a: [f64; 3], b: [f64; 3]) -> [f64; 3] {
    [
        a[1] * b[2] - a[2] * b[1],
        a[2] * b[0] - a[0] * b[2],
        a[0] * b[1] - a[1] * b[0],
    ]
}

fn normalize(a: [f64; 3]) -> Option<[f64; 3]> {
    let n = dot(a, a).sqrt();
    (n > 1e-12).then(|| a.map(|v| v / n))
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn cloud_of(points: &[[f64; 3]]) -> PointCloud {
        PointCloud::new(0, points.to_vec(), Vec::new()).unwrap()
    }

    fn bx(min: [f64; 3], max: [f64; 3]) -> Aabb {
        Aabb::new(min, max).unwrap()
    }

    fn test_camera() -> CameraPose {
        CameraPose::look_at(
            [0.0, 0.0, 1.0],
            [0.0, 5.0, 1.0],
            [0.0, 0.0, 1.0],
            Intrinsics {
                fx: 100.0,
                fy: 100.0,
                cx: 80.0,
                cy: 60.0,
            },
            (160, 120),
            (0.5, 6.0),
        )
        .unwrap()
    }

    #[test]
    fn aabb_of_single_point_is_degenerate() {
        let cloud = cloud_of(&[[1.0, 2.0, 3.0]]);
        let b = aabb_from_mask(&cloud, &InstanceMask::new(0, 0, vec![0])).unwrap();
        assert_eq!(b, bx([1.0, 2.0, 3.0], [1.0, 2.0, 3.0]));
    }

    #[test]
    fn aabb_takes_componentwise_extremes() {
        let cloud = cloud_of(&[[0.0, 0.0, 0.0], [2.0, 1.0, 3.0]]);
        let b = aabb_from_mask(&cloud, &InstanceMask::new(0, 0, vec![0, 1])).unwrap();
        assert_eq!(b, bx([0.0, 0.0, 0.0], [2.0, 1.0, 3.0]));
    }

    #[test]
    fn aabb_matches_per_axis_scan() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let pts: Vec<[f64; 3]> = (0..10)
            .map(|_| [rng.gen_range(-5.0..5.0), rng.gen_range(-5.0..5.0), rng.gen_range(-5.0..5.0)])
            .collect();
        let cloud = cloud_of(&pts);
        let b = aabb_from_mask(&cloud, &InstanceMask::new(0, 0, (0..10).collect())).unwrap();
        for k in 0..3 {
            let mut lo = f64::INFINITY;
            let mut hi = f64::NEG_INFINITY;
            for p in &pts {
                if p[k] < lo {
                    lo = p[k];
                }
                if p[k] > hi {
                    hi = p[k];
                }
            }
            assert_eq!(b.min[k], lo);
            assert_eq!(b.max[k], hi);
        }
    }

    #[test]
    fn empty_mask_is_an_error() {
        let cloud = cloud_of(&[[0.0; 3]]);
        let err = aabb_from_mask(&cloud, &InstanceMask::new(3, 0, vec![])).unwrap_err();
        assert_eq!(err.to_string(), "empty instance");
        assert!(InstanceMask::new(3, 0, vec![0, 0]).validate(&cloud).is_err());
        assert!(InstanceMask::new(3, 0, vec![1]).validate(&cloud).is_err());
    }

    #[test]
    fn iou_examples() {
        let a = bx([0.0; 3], [2.0; 3]);
        assert_eq!(iou(&a, &a), 1.0);
        assert_eq!(iou(&bx([0.0; 3], [1.0; 3]), &bx([5.0; 3], [6.0; 3])), 0.0);
        let b = bx([1.0; 3], [3.0; 3]);
        assert!((iou(&a, &b) - 1.0 / 15.0).abs() < 1e-15);
    }

    #[test]
    fn degenerate_boxes_follow_limit_convention() {
        let p = bx([1.0; 3], [1.0; 3]);
        let q = bx([2.0; 3], [2.0; 3]);
        assert_eq!(iou(&p, &p), 1.0);
        assert_eq!(iou(&p, &q), 0.0);
        let flat = bx([0.0, 0.0, 0.0], [1.0, 1.0, 0.0]);
        assert_eq!(iou(&flat, &bx([0.0; 3], [1.0; 3])), 0.0);
    }

    #[test]
    fn frustum_keeps_axis_point_and_drops_behind() {
        let cam = test_camera();
        let cloud = cloud_of(&[[0.0, 3.25, 1.0], [0.0, -2.0, 1.0]]);
        let crop = frustum_crop(&cloud, &cam).unwrap();
        assert_eq!(crop.kept, vec![0]);
        assert!(cam.to_camera([0.0, -2.0, 1.0])[2] < 0.0);
    }

    #[test]
    fn frustum_crop_matches_projection_oracle() {
        let cam = test_camera();
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let pts: Vec<[f64; 3]> = (0..2000)
            .map(|_| [rng.gen_range(-6.0..6.0), rng.gen_range(-3.0..9.0), rng.gen_range(-2.0..4.0)])
            .collect();
        let cloud = cloud_of(&pts);
        let crop = frustum_crop(&cloud, &cam).unwrap();
        // independent oracle: explicit camera basis, no matrix
        let eye = [0.0, 0.0, 1.0];
        let expected: Vec<usize> = pts
            .iter()
            .enumerate()
            .filter(|(_, p)| {
                let rel = [p[0] - eye[0], p[1] - eye[1], p[2] - eye[2]];
                let (x, y, z) = (rel[0], -rel[2], rel[1]);
                let u = 100.0 * x / z + 80.0;
                let v = 100.0 * y / z + 60.0;
                (0.5..=6.0).contains(&z) && (0.0..160.0).contains(&u) && (0.0..120.0).contains(&v)
            })
            .map(|(i, _)| i)
            .collect();
        assert!(!expected.is_empty());
        assert_eq!(crop.kept, expected);
        assert_eq!(crop.cloud.len(), expected.len());
        let twice = frustum_crop(&crop.cloud, &cam).unwrap();
        assert_eq!(twice.cloud, crop.cloud);
    }

    #[test]
    fn empty_crop_is_flagged() {
        let crop = frustum_crop(&cloud_of(&[[0.0, -4.0, 1.0]]), &test_camera()).unwrap();
        assert!(crop.is_empty());
    }

    #[test]
    fn invalid_poses_are_rejected() {
        let mut cam = test_camera();
        cam.near = 0.0;
        assert!(cam.validate().is_err());
        let mut cam = test_camera();
        cam.world_to_camera[0][0] = 2.0;
        assert!(cam.validate().is_err());
        let mut cam = test_camera();
        // reflection: det = -1
        for c in 0..4 {
            cam.world_to_camera[0][c] = -cam.world_to_camera[0][c];
        }
        assert!(cam.validate().is_err());
    }

    #[test]
    fn dominant_objects_examples() {
        let m = |id: u32, n: usize| InstanceMask::new(id, 0, (0..n).collect());
        assert_eq!(dominant_objects(&[m(0, 5), m(1, 9), m(2, 7)], 3), vec![1, 2, 0]);
        let five: Vec<_> = (0..5).map(|i| m(i, 3 + i as usize)).collect();
        assert_eq!(dominant_objects(&five, 3).len(), 3);
        assert_eq!(dominant_objects(&[m(4, 4), m(2, 4)], 1), vec![2]);
    }

    fn arb_box() -> impl Strategy<Value = Aabb> {
        (prop::array::uniform3(-10.0..10.0f64), prop::array::uniform3(0.01..5.0f64))
            .prop_map(|(lo, e)| Aabb::new(lo, [lo[0] + e[0], lo[1] + e[1], lo[2] + e[2]]).unwrap())
    }

    proptest! {
        #[test]
        fn iou_symmetric_and_bounded(a in arb_box(), b in arb_box()) {
            let ab = iou(&a, &b);
            prop_assert_eq!(ab, iou(&b, &a));
            prop_assert!((0.0..=1.0).contains(&ab));
            prop_assert_eq!(iou(&a, &a), 1.0);
        }

        #[test]
        fn iou_translation_invariant(a in arb_box(), b in arb_box(), t in prop::array::uniform3(-20.0..20.0f64)) {
            let moved = iou(&a.translated(t), &b.translated(t));
            prop_assert!((moved - iou(&a, &b)).abs() <= 1e-9);
        }

        #[test]
        fn mask_box_contains_points(pts in prop::collection::vec(prop::array::uniform3(-50.0..50.0f64), 1..40)) {
            let cloud = cloud_of(&pts);
            let b = aabb_from_mask(&cloud, &InstanceMask::new(0, 0, (0..pts.len()).collect())).unwrap();
            for p in &pts {
                prop_assert!(b.contains(*p));
            }
        }
    }
}
