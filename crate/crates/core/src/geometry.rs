//! Point clouds, the viewpoint rig, ray-sampled candidates and output assembly.

use alloc::format;
use alloc::vec::Vec;

use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng;

pub type Point3 = [f64; 3];

/// Distance of each face plane from the rig center, in normalized units.
pub const FACE_OFFSET: f64 = 0.75;
/// Distance of each viewpoint from the rig center.
pub const VIEWPOINT_OFFSET: f64 = 1.5;
pub const DEFAULT_SPREAD: f64 = 0.25;
pub const DEFAULT_THRESHOLD: f64 = 0.5;

const FRAME_TOL: f64 = 1e-9;

pub(crate) mod v3 {
    use super::Point3;

    #[inline]
    pub fn add(a: Point3, b: Point3) -> Point3 {
        [a[0] + b[0], a[1] + b[1], a[2] + b[2]]
    }
    #[inline]
    pub fn sub(a: Point3, b: Point3) -> Point3 {
        [a[0] - b[0], a[1] - b[1], a[2] - b[2]]
    }
    #[inline]
    pub fn scale(a: Point3, s: f64) -> Point3 {
        [a[0] * s, a[1] * s, a[2] * s]
    }
    #[inline]
    pub fn dot(a: Point3, b: Point3) -> f64 {
        a[0] * b[0] + a[1] * b[1] + a[2] * b[2]
    }
    #[inline]
    pub fn cross(a: Point3, b: Point3) -> Point3 {
        [
            a[1] * b[2] - a[2] * b[1],
            a[2] * b[0] - a[0] * b[2],
            a[0] * b[1] - a[1] * b[0],
        ]
    }
    #[inline]
    pub fn norm(a: Point3) -> f64 {
        libm::sqrt(dot(a, a))
    }
    #[inline]
    pub fn dist_sq(a: Point3, b: Point3) -> f64 {
        let d = sub(a, b);
        d[0] * d[0] + d[1] * d[1] + d[2] * d[2]
    }
    pub fn normalize(a: Point3) -> Point3 {
        scale(a, 1.0 / norm(a))
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum CloudRole {
    Input,
    GroundTruth,
    Candidate,
    Output,
    Predicted,
}

/// A flat list of finite 3D points tagged with the role it plays in the pipeline.
#[derive(Clone, Debug, PartialEq)]
pub struct PointCloud {
    points: Vec<Point3>,
    role: CloudRole,
}

impl PointCloud {
    pub fn new(points: Vec<Point3>, role: CloudRole) -> Result<Self> {
        if let Some(i) = points.iter().position(|p| !p.iter().all(|c| c.is_finite())) {
            return Err(Error::NonFinite(i));
        }
        Ok(Self { points, role })
    }

    pub fn empty(role: CloudRole) -> Self {
        Self {
            points: Vec::new(),
            role,
        }
    }

    pub fn points(&self) -> &[Point3] {
        &self.points
    }

    pub fn into_points(self) -> Vec<Point3> {
        self.points
    }

    pub fn role(&self) -> CloudRole {
        self.role
    }

    pub fn with_role(mut self, role: CloudRole) -> Self {
        self.role = role;
        self
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    pub fn bounding_box(&self) -> Option<Aabb> {
        let first = *self.points.first()?;
        let mut bb = Aabb {
            min: first,
            max: first,
        };
        for p in &self.points[1..] {
            for k in 0..3 {
                bb.min[k] = bb.min[k].min(p[k]);
                bb.max[k] = bb.max[k].max(p[k]);
            }
        }
        Some(bb)
    }
}

/// Axis-aligned bounding box.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Aabb {
    pub min: Point3,
    pub max: Point3,
}

impl Aabb {
    pub fn center(&self) -> Point3 {
        v3::scale(v3::add(self.min, self.max), 0.5)
    }

    pub fn max_side(&self) -> f64 {
        (0..3)
            .map(|k| self.max[k] - self.min[k])
            .fold(0.0, f64::max)
    }

    /// Entry and exit parameters of the ray `origin + t * dir`, `t >= 0`.
    pub fn intersect_ray(&self, origin: Point3, dir: Point3) -> Option<(f64, f64)> {
        let mut t0 = f64::NEG_INFINITY;
        let mut t1 = f64::INFINITY;
        for k in 0..3 {
            if dir[k].abs() < 1e-15 {
                if origin[k] < self.min[k] || origin[k] > self.max[k] {
                    return None;
                }
            } else {
                let inv = 1.0 / dir[k];
                let a = (self.min[k] - origin[k]) * inv;
                let b = (self.max[k] - origin[k]) * inv;
                let (lo, hi) = if a <= b { (a, b) } else { (b, a) };
                t0 = t0.max(lo);
                t1 = t1.min(hi);
            }
        }
        if t0 > t1 || t1 < 0.0 {
            None
        } else {
            Some((t0.max(0.0), t1))
        }
    }
}

/// Maps points into the unit frame: `(p - center) * scale`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct NormalizeTransform {
    pub center: Point3,
    pub scale: f64,
}

impl NormalizeTransform {
    pub const IDENTITY: Self = Self {
        center: [0.0; 3],
        scale: 1.0,
    };

    pub fn apply(&self, p: Point3) -> Point3 {
        v3::scale(v3::sub(p, self.center), self.scale)
    }

    pub fn invert(&self, p: Point3) -> Point3 {
        v3::add(v3::scale(p, 1.0 / self.scale), self.center)
    }

    pub fn apply_cloud(&self, cloud: &PointCloud) -> PointCloud {
        PointCloud {
            points: cloud.points.iter().map(|&p| self.apply(p)).collect(),
            role: cloud.role,
        }
    }

    pub fn invert_cloud(&self, cloud: &PointCloud) -> PointCloud {
        PointCloud {
            points: cloud.points.iter().map(|&p| self.invert(p)).collect(),
            role: cloud.role,
        }
    }
}

/// Centers the cloud on its bounding-box center and scales it so the longest
/// bounding-box side is 1. A zero-size box keeps scale 1.
pub fn normalize_cloud(cloud: &PointCloud) -> Result<(PointCloud, NormalizeTransform)> {
    let bb = cloud.bounding_box().ok_or(Error::EmptyCloud)?;
    let side = bb.max_side();
    let transform = NormalizeTransform {
        center: bb.center(),
        scale: if side > 0.0 { 1.0 / side } else { 1.0 },
    };
    Ok((transform.apply_cloud(cloud), transform))
}

/// One virtual camera and the square face it looks through.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct FaceFrame {
    pub viewpoint: Point3,
    pub face_origin: Point3,
    pub u_axis: Point3,
    pub v_axis: Point3,
    pub normal: Point3,
    pub half_extent: f64,
}

impl FaceFrame {
    fn validate(&self) -> Result<()> {
        let axes = [self.u_axis, self.v_axis, self.normal];
        let unit = axes.iter().all(|&a| (v3::norm(a) - 1.0).abs() < FRAME_TOL);
        let orthogonal = v3::dot(self.u_axis, self.v_axis).abs() < FRAME_TOL
            && v3::dot(self.u_axis, self.normal).abs() < FRAME_TOL
            && v3::dot(self.v_axis, self.normal).abs() < FRAME_TOL;
        let handed = v3::norm(v3::sub(v3::cross(self.u_axis, self.v_axis), self.normal)) < 1e-6;
        if !(unit && orthogonal && handed) {
            return Err(Error::UnsupportedRig(
                "face axes must form a right-handed orthonormal triad".into(),
            ));
        }
        if v3::dot(v3::sub([0.0; 3], self.face_origin), self.normal) <= 0.0 {
            return Err(Error::UnsupportedRig(
                "face normal must point toward the rig center".into(),
            ));
        }
        if !(self.half_extent > 0.0 && self.half_extent.is_finite()) {
            return Err(Error::UnsupportedRig("half extent must be positive".into()));
        }
        Ok(())
    }

    /// Center of grid cell `(i, j)` of an `r x r` grid; `i` runs along `u_axis`.
    pub fn cell_center(&self, i: usize, j: usize, r: usize) -> Point3 {
        let a = ((i as f64 + 0.5) / r as f64 * 2.0 - 1.0) * self.half_extent;
        let b = ((j as f64 + 0.5) / r as f64 * 2.0 - 1.0) * self.half_extent;
        v3::add(
            self.face_origin,
            v3::add(v3::scale(self.u_axis, a), v3::scale(self.v_axis, b)),
        )
    }
}

/// The V faces surrounding the object plus the per-face grid resolution.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ViewRig {
    faces: Vec<FaceFrame>,
    grid_resolution: usize,
    gaussian_spread: f64,
}

/// Builds the standard hexahedral rig. Only `v_count == 6` is supported here;
/// other layouts go through [`ViewRig::from_faces`].
pub fn build_view_rig(v_count: usize, r: usize, spread: f64) -> Result<ViewRig> {
    if v_count != 6 {
        return Err(Error::UnsupportedRig(format!(
            "no built-in layout for {v_count} viewpoints"
        )));
    }
    let mut faces = Vec::with_capacity(6);
    for axis in 0..3 {
        let (b, c) = ((axis + 1) % 3, (axis + 2) % 3);
        for sign in [1.0, -1.0] {
            let mut e_a = [0.0; 3];
            e_a[axis] = 1.0;
            let mut e_b = [0.0; 3];
            e_b[b] = 1.0;
            let mut e_c = [0.0; 3];
            e_c[c] = 1.0;
            // e_b x e_c = e_a, so swapping the pair flips handedness.
            let (u_axis, v_axis) = if sign > 0.0 { (e_c, e_b) } else { (e_b, e_c) };
            faces.push(FaceFrame {
                viewpoint: v3::scale(e_a, sign * VIEWPOINT_OFFSET),
                face_origin: v3::scale(e_a, sign * FACE_OFFSET),
                u_axis,
                v_axis,
                normal: v3::scale(e_a, -sign),
                half_extent: FACE_OFFSET,
            });
        }
    }
    ViewRig::from_faces(faces, r, spread)
}

impl ViewRig {
    pub fn from_faces(faces: Vec<FaceFrame>, r: usize, spread: f64) -> Result<Self> {
        if faces.is_empty() {
            return Err(Error::UnsupportedRig("rig needs at least one face".into()));
        }
        if r == 0 {
            return Err(Error::InvalidArgument(
                "grid resolution must be >= 1".into(),
            ));
        }
        if !(spread > 0.0 && spread <= 1.0) {
            return Err(Error::InvalidArgument(format!(
                "gaussian spread must be in (0, 1], got {spread}"
            )));
        }
        for f in &faces {
            f.validate()?;
        }
        Ok(Self {
            faces,
            grid_resolution: r,
            gaussian_spread: spread,
        })
    }

    /// Same faces and spread at a different grid resolution.
    pub fn with_resolution(&self, r: usize) -> Result<Self> {
        Self::from_faces(self.faces.clone(), r, self.gaussian_spread)
    }

    pub fn faces(&self) -> &[FaceFrame] {
        &self.faces
    }

    pub fn v_count(&self) -> usize {
        self.faces.len()
    }

    pub fn grid_resolution(&self) -> usize {
        self.grid_resolution
    }

    pub fn gaussian_spread(&self) -> f64 {
        self.gaussian_spread
    }

    /// Number of candidates the rig produces: `V * R^2`.
    pub fn capacity(&self) -> usize {
        self.faces.len() * self.grid_resolution * self.grid_resolution
    }

    /// Box spanned by all face squares; rays are clamped to its interior.
    pub fn bounds(&self) -> Aabb {
        let mut bb = Aabb {
            min: [f64::INFINITY; 3],
            max: [f64::NEG_INFINITY; 3],
        };
        for f in &self.faces {
            for (su, sv) in [(-1.0, -1.0), (-1.0, 1.0), (1.0, -1.0), (1.0, 1.0)] {
                let corner = v3::add(
                    f.face_origin,
                    v3::add(
                        v3::scale(f.u_axis, su * f.half_extent),
                        v3::scale(f.v_axis, sv * f.half_extent),
                    ),
                );
                for k in 0..3 {
                    bb.min[k] = bb.min[k].min(corner[k]);
                    bb.max[k] = bb.max[k].max(corner[k]);
                }
            }
        }
        bb
    }
}

/// Orthonormal frame attached to one candidate; `z` runs along the sampling ray.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LocalFrame {
    pub x: Point3,
    pub y: Point3,
    pub z: Point3,
}

impl LocalFrame {
    /// `z` is the ray direction; `x` and `y` are the face axes made orthogonal to it.
    pub fn from_ray(dir: Point3, u_axis: Point3) -> Self {
        let x = v3::normalize(v3::sub(u_axis, v3::scale(dir, v3::dot(u_axis, dir))));
        let y = v3::cross(dir, x);
        Self { x, y, z: dir }
    }

    pub fn to_world(&self, local: Point3) -> Point3 {
        v3::add(
            v3::add(v3::scale(self.x, local[0]), v3::scale(self.y, local[1])),
            v3::scale(self.z, local[2]),
        )
    }

    pub fn identity() -> Self {
        Self {
            x: [1.0, 0.0, 0.0],
            y: [0.0, 1.0, 0.0],
            z: [0.0, 0.0, 1.0],
        }
    }
}

/// The `M = V * R^2` ray-sampled candidate points, grouped by viewpoint.
/// Candidate `m` of face `v` at grid cell `(i, j)` sits at index
/// `v * R^2 + i * R + j`.
#[derive(Clone, Debug, PartialEq)]
pub struct CandidateSet {
    pub points: Vec<Point3>,
    pub view_index: Vec<usize>,
    pub grid_coords: Vec<(usize, usize)>,
    pub ray_origin: Vec<Point3>,
    pub ray_dir: Vec<Point3>,
    /// Sampled ray parameter of each point.
    pub depth: Vec<f64>,
    /// Mean of the depth distribution each point was drawn from.
    pub depth_mean: Vec<f64>,
    pub local_frames: Vec<LocalFrame>,
    pub v_count: usize,
    pub grid_resolution: usize,
}

impl CandidateSet {
    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    pub fn group_len(&self) -> usize {
        self.grid_resolution * self.grid_resolution
    }

    /// Row of the candidate inside its viewpoint's `R x R` grid.
    pub fn slot_index(&self, m: usize) -> usize {
        let (i, j) = self.grid_coords[m];
        i * self.grid_resolution + j
    }

    /// `p_m + o_x * x + o_y * y + o_z * z` in world coordinates.
    pub fn local_to_world(&self, m: usize, offset: Point3) -> Point3 {
        v3::add(self.points[m], self.local_frames[m].to_world(offset))
    }

    pub fn to_cloud(&self) -> PointCloud {
        PointCloud {
            points: self.points.clone(),
            role: CloudRole::Candidate,
        }
    }
}

/// Casts one ray per grid cell of every face and samples a single depth per ray.
///
/// The depth is Gaussian with its mean halfway between the face plane and the
/// ray's first hit on the input's bounding box (or the plane through the rig
/// center when the box is missed), and a standard deviation of `spread` times
/// that gap. Samples are clamped between the face and the far rig boundary.
pub fn generate_candidates(rig: &ViewRig, input: &PointCloud, seed: u64) -> CandidateSet {
    let r = rig.grid_resolution;
    let m = rig.capacity();
    let bbox = input.bounding_box();
    let rig_bounds = rig.bounds();

    let mut out = CandidateSet {
        points: Vec::with_capacity(m),
        view_index: Vec::with_capacity(m),
        grid_coords: Vec::with_capacity(m),
        ray_origin: Vec::with_capacity(m),
        ray_dir: Vec::with_capacity(m),
        depth: Vec::with_capacity(m),
        depth_mean: Vec::with_capacity(m),
        local_frames: Vec::with_capacity(m),
        v_count: rig.v_count(),
        grid_resolution: r,
    };

    for (v, face) in rig.faces.iter().enumerate() {
        for i in 0..r {
            for j in 0..r {
                let origin = face.viewpoint;
                let to_cell = v3::sub(face.cell_center(i, j, r), origin);
                let t_face = v3::norm(to_cell);
                let dir = v3::scale(to_cell, 1.0 / t_face);

                let t_far = rig_bounds
                    .intersect_ray(origin, dir)
                    .map_or(t_face, |(_, exit)| exit.max(t_face));
                let hit = bbox.and_then(|bb| bb.intersect_ray(origin, dir));
                let t_anchor = match hit {
                    Some((entry, _)) => entry.max(t_face),
                    None => {
                        let along = v3::dot(dir, face.normal);
                        if along > 0.0 {
                            (-v3::dot(origin, face.normal) / along).max(t_face)
                        } else {
                            t_face
                        }
                    }
                };
                // Oblique rays can leave the rig before reaching the far anchor.
                let t_anchor = t_anchor.min(t_far);
                let mean = 0.5 * (t_face + t_anchor);
                let std_dev = rig.gaussian_spread * (t_anchor - t_face);

                let mut rng = rng::rng_for(seed, &[v as u64, i as u64, j as u64]);
                let z: f64 = StandardNormal.sample(&mut rng);
                let t = (mean + std_dev * z).clamp(t_face, t_far);

                out.points.push(v3::add(origin, v3::scale(dir, t)));
                out.view_index.push(v);
                out.grid_coords.push((i, j));
                out.ray_origin.push(origin);
                out.ray_dir.push(dir);
                out.depth.push(t);
                out.depth_mean.push(mean);
                out.local_frames
                    .push(LocalFrame::from_ray(dir, face.u_axis));
            }
        }
    }
    out
}

/// Per-candidate offsets (local frame) and opacities.
#[derive(Clone, Debug, PartialEq)]
pub struct Prediction {
    pub offsets: Vec<Point3>,
    pub opacities: Vec<f64>,
}

impl Prediction {
    pub fn new(offsets: Vec<Point3>, opacities: Vec<f64>) -> Result<Self> {
        if offsets.len() != opacities.len() {
            return Err(Error::shape(
                "prediction",
                &[offsets.len(), 3],
                &[opacities.len()],
            ));
        }
        if offsets.iter().flatten().any(|c| !c.is_finite()) {
            return Err(Error::InvalidArgument("offsets must be finite".into()));
        }
        if opacities.iter().any(|s| !(0.0..=1.0).contains(s)) {
            return Err(Error::InvalidArgument(
                "opacities must lie in [0, 1]".into(),
            ));
        }
        Ok(Self { offsets, opacities })
    }

    pub fn len(&self) -> usize {
        self.opacities.len()
    }

    pub fn is_empty(&self) -> bool {
        self.opacities.is_empty()
    }
}

/// Indices whose opacity is at least `threshold`, in order.
pub fn kept_indices(opacities: &[f64], threshold: f64) -> Vec<usize> {
    opacities
        .iter()
        .enumerate()
        .filter(|(_, &s)| s >= threshold)
        .map(|(i, _)| i)
        .collect()
}

/// Refined world positions `p_m + o_m` of the candidates with `sigma_m >= threshold`.
pub fn assemble_output(
    candidates: &CandidateSet,
    pred: &Prediction,
    threshold: f64,
) -> Result<PointCloud> {
    if !(0.0..=1.0).contains(&threshold) {
        return Err(Error::InvalidArgument(format!(
            "threshold must be in [0, 1], got {threshold}"
        )));
    }
    if pred.len() != candidates.len() {
        return Err(Error::shape(
            "assemble_output",
            &[candidates.len()],
            &[pred.len()],
        ));
    }
    let points = kept_indices(&pred.opacities, threshold)
        .into_iter()
        .map(|m| candidates.local_to_world(m, pred.offsets[m]))
        .collect();
    PointCloud::new(points, CloudRole::Output)
}

/// `P^I ∪ P^out` as a multiset: the input points followed by the output points.
pub fn union_prediction(input: &PointCloud, missing: &PointCloud) -> PointCloud {
    let mut points = Vec::with_capacity(input.len() + missing.len());
    points.extend_from_slice(&input.points);
    points.extend_from_slice(&missing.points);
    PointCloud {
        points,
        role: CloudRole::Predicted,
    }
}
