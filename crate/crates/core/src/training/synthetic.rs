//! Parametric shape categories with uniform surface sampling and a
//! single-viewpoint occlusion cut.

use alloc::string::{String, ToString};
use alloc::vec::Vec;
use core::f64::consts::{PI, TAU};
use core::fmt;
use core::str::FromStr;

use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{v3, CloudRole, Point3, PointCloud};
use crate::rng::{self, Rng as ChaCha};

pub const MIN_POINTS_PER_SHAPE: usize = 256;
/// Removed fraction of the complete cloud, drawn uniformly from this range.
pub const REMOVAL_RANGE: (f64, f64) = (0.25, 0.5);
/// Longest bounding-box side of a complete shape, drawn from this range.
pub const SCALE_RANGE: (f64, f64) = (0.7, 1.0);

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Category {
    Sphere,
    Cuboid,
    Cylinder,
    Cone,
    Torus,
}

impl Category {
    pub const ALL: [Category; 5] = [
        Category::Sphere,
        Category::Cuboid,
        Category::Cylinder,
        Category::Cone,
        Category::Torus,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Category::Sphere => "sphere",
            Category::Cuboid => "cuboid",
            Category::Cylinder => "cylinder",
            Category::Cone => "cone",
            Category::Torus => "torus",
        }
    }
}

impl fmt::Display for Category {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Category {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Category::ALL
            .into_iter()
            .find(|c| c.name() == s)
            .ok_or_else(|| Error::Category(s.to_string()))
    }
}

/// How a sample was generated; enough to regenerate it.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ShapeMeta {
    pub category: Category,
    /// Raw shape dimensions before scaling: sphere `[radius]`, cuboid half
    /// extents, cylinder `[radius, half_height]`, cone `[radius, height]`,
    /// torus `[major, minor]`.
    pub dims: Vec<f64>,
    /// Source axis feeding each output axis.
    pub axis_perm: [usize; 3],
    /// Uniform factor from raw to dataset coordinates.
    pub scale: f64,
    /// Offset added after scaling so the bounding box is centered.
    pub shift: Point3,
    pub view_dir: Point3,
    pub removed_fraction: f64,
    pub seed: u64,
}

/// One training or evaluation example in the dataset frame, where complete
/// shapes are centered with longest side at most 1.
#[derive(Clone, Debug, PartialEq)]
pub struct Sample {
    pub partial: PointCloud,
    pub complete: PointCloud,
    pub label: usize,
    pub category_name: String,
    pub meta: ShapeMeta,
}

fn unit_vector(r: &mut ChaCha) -> Point3 {
    loop {
        let v: Point3 = [
            StandardNormal.sample(r),
            StandardNormal.sample(r),
            StandardNormal.sample(r),
        ];
        let n = v3::norm(v);
        if n > 1e-9 {
            return v3::scale(v, 1.0 / n);
        }
    }
}

/// Picks an index with probability proportional to `weights`.
fn pick(r: &mut ChaCha, weights: &[f64]) -> usize {
    let total: f64 = weights.iter().sum();
    let mut u = r.random::<f64>() * total;
    for (i, &w) in weights.iter().enumerate() {
        if u < w {
            return i;
        }
        u -= w;
    }
    weights.len() - 1
}

fn disk(r: &mut ChaCha, radius: f64) -> (f64, f64) {
    let rho = radius * libm::sqrt(r.random::<f64>());
    let phi = TAU * r.random::<f64>();
    (rho * libm::cos(phi), rho * libm::sin(phi))
}

fn sample_surface(cat: Category, dims: &[f64], r: &mut ChaCha) -> Point3 {
    match cat {
        Category::Sphere => v3::scale(unit_vector(r), dims[0]),
        Category::Cuboid => {
            let [a, b, c] = [dims[0], dims[1], dims[2]];
            let face = pick(r, &[b * c, b * c, a * c, a * c, a * b, a * b]);
            let (axis, sign) = (face / 2, if face.is_multiple_of(2) { 1.0 } else { -1.0 });
            let mut p = [
                r.random_range(-a..=a),
                r.random_range(-b..=b),
                r.random_range(-c..=c),
            ];
            p[axis] = sign * dims[axis];
            p
        }
        Category::Cylinder => {
            let (rad, h) = (dims[0], dims[1]);
            match pick(
                r,
                &[2.0 * PI * rad * 2.0 * h, PI * rad * rad, PI * rad * rad],
            ) {
                0 => {
                    let phi = TAU * r.random::<f64>();
                    [
                        rad * libm::cos(phi),
                        rad * libm::sin(phi),
                        r.random_range(-h..=h),
                    ]
                }
                cap => {
                    let (x, y) = disk(r, rad);
                    [x, y, if cap == 1 { h } else { -h }]
                }
            }
        }
        Category::Cone => {
            // Apex at z = height, base disk at z = 0.
            let (rad, height) = (dims[0], dims[1]);
            let slant = libm::sqrt(rad * rad + height * height);
            if pick(r, &[PI * rad * slant, PI * rad * rad]) == 0 {
                let s = libm::sqrt(r.random::<f64>());
                let phi = TAU * r.random::<f64>();
                [
                    s * rad * libm::cos(phi),
                    s * rad * libm::sin(phi),
                    height * (1.0 - s),
                ]
            } else {
                let (x, y) = disk(r, rad);
                [x, y, 0.0]
            }
        }
        Category::Torus => {
            let (big, small) = (dims[0], dims[1]);
            // Area element is proportional to big + small * cos(theta).
            let theta = loop {
                let t = TAU * r.random::<f64>();
                if r.random::<f64>() * (big + small) <= big + small * libm::cos(t) {
                    break t;
                }
            };
            let phi = TAU * r.random::<f64>();
            let ring = big + small * libm::cos(theta);
            [
                ring * libm::cos(phi),
                ring * libm::sin(phi),
                small * libm::sin(theta),
            ]
        }
    }
}

fn random_dims(cat: Category, r: &mut ChaCha) -> Vec<f64> {
    match cat {
        Category::Sphere => alloc::vec![1.0],
        Category::Cuboid => (0..3).map(|_| r.random_range(0.3..=1.0)).collect(),
        Category::Cylinder => alloc::vec![r.random_range(0.3..=0.6), r.random_range(0.3..=1.0)],
        Category::Cone => alloc::vec![r.random_range(0.3..=0.7), r.random_range(0.6..=1.5)],
        Category::Torus => alloc::vec![1.0, r.random_range(0.2..=0.4)],
    }
}

fn random_perm(r: &mut ChaCha) -> [usize; 3] {
    const PERMS: [[usize; 3]; 6] = [
        [0, 1, 2],
        [0, 2, 1],
        [1, 0, 2],
        [1, 2, 0],
        [2, 0, 1],
        [2, 1, 0],
    ];
    PERMS[r.random_range(0..6)]
}

/// Generates one sample of `cat` from its own seed.
pub fn generate_sample(
    cat: Category,
    label: usize,
    points_per_shape: usize,
    seed: u64,
) -> Result<Sample> {
    if points_per_shape < MIN_POINTS_PER_SHAPE {
        return Err(Error::InvalidArgument(alloc::format!(
            "points_per_shape must be at least {MIN_POINTS_PER_SHAPE}, got {points_per_shape}"
        )));
    }
    let mut r = rng::rng_for(seed, &[]);
    let dims = random_dims(cat, &mut r);
    let axis_perm = match cat {
        Category::Cylinder | Category::Cone | Category::Torus => random_perm(&mut r),
        Category::Sphere | Category::Cuboid => [0, 1, 2],
    };
    let target_side = r.random_range(SCALE_RANGE.0..=SCALE_RANGE.1);

    let raw: Vec<Point3> = (0..points_per_shape)
        .map(|_| {
            let p = sample_surface(cat, &dims, &mut r);
            [p[axis_perm[0]], p[axis_perm[1]], p[axis_perm[2]]]
        })
        .collect();
    // Analytic extents keep the sphere radius exact regardless of sampling.
    let (lo, hi) = analytic_bounds(cat, &dims, axis_perm);
    let side = (0..3).map(|k| hi[k] - lo[k]).fold(0.0, f64::max);
    let scale = target_side / side;
    let shift = v3::scale(v3::add(lo, hi), -0.5 * scale);
    let points: Vec<Point3> = raw
        .iter()
        .map(|&p| v3::add(v3::scale(p, scale), shift))
        .collect();

    let view_dir = unit_vector(&mut r);
    let removed_fraction = r.random_range(REMOVAL_RANGE.0..=REMOVAL_RANGE.1);
    let remove = libm::ceil(removed_fraction * points.len() as f64) as usize;
    let mut order: Vec<usize> = (0..points.len()).collect();
    order.sort_by(|&a, &b| {
        v3::dot(points[b], view_dir)
            .total_cmp(&v3::dot(points[a], view_dir))
            .then(a.cmp(&b))
    });
    let mut keep = alloc::vec![true; points.len()];
    for &i in &order[..remove.clamp(1, points.len() - 1)] {
        keep[i] = false;
    }
    let partial: Vec<Point3> = points
        .iter()
        .zip(&keep)
        .filter(|(_, &k)| k)
        .map(|(p, _)| *p)
        .collect();

    Ok(Sample {
        partial: PointCloud::new(partial, CloudRole::Input)?,
        complete: PointCloud::new(points, CloudRole::GroundTruth)?,
        label,
        category_name: cat.name().to_string(),
        meta: ShapeMeta {
            category: cat,
            dims,
            axis_perm,
            scale,
            shift,
            view_dir,
            removed_fraction,
            seed,
        },
    })
}

fn analytic_bounds(cat: Category, dims: &[f64], perm: [usize; 3]) -> (Point3, Point3) {
    let (lo, hi): (Point3, Point3) = match cat {
        Category::Sphere => ([-dims[0]; 3], [dims[0]; 3]),
        Category::Cuboid => ([-dims[0], -dims[1], -dims[2]], [dims[0], dims[1], dims[2]]),
        Category::Cylinder => ([-dims[0], -dims[0], -dims[1]], [dims[0], dims[0], dims[1]]),
        Category::Cone => ([-dims[0], -dims[0], 0.0], [dims[0], dims[0], dims[1]]),
        Category::Torus => {
            let out = dims[0] + dims[1];
            ([-out, -out, -dims[1]], [out, out, dims[1]])
        }
    };
    (
        [lo[perm[0]], lo[perm[1]], lo[perm[2]]],
        [hi[perm[0]], hi[perm[1]], hi[perm[2]]],
    )
}

/// `n_per_class` samples for each named category; labels follow the order
/// of `categories`. Deterministic in `seed`.
pub fn generate_synthetic_dataset<S: AsRef<str>>(
    n_per_class: usize,
    categories: &[S],
    points_per_shape: usize,
    seed: u64,
) -> Result<Vec<Sample>> {
    let cats = categories
        .iter()
        .map(|c| c.as_ref().parse::<Category>())
        .collect::<Result<Vec<_>>>()?;
    let mut out = Vec::with_capacity(n_per_class * cats.len());
    for (label, &cat) in cats.iter().enumerate() {
        for k in 0..n_per_class {
            let s = rng::derive_seed(seed, &[label as u64, k as u64]);
            out.push(generate_sample(cat, label, points_per_shape, s)?);
        }
    }
    Ok(out)
}
