//! Completion metrics: Chamfer distance, density-aware Chamfer distance,
//! F-score at a distance threshold, and input noise injection.

mod nn;

pub use nn::{nn_distance, NnIndex, DEFAULT_LEAF_SIZE};

use alloc::vec;
use alloc::vec::Vec;

use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{Point3, PointCloud};
use crate::rng;

pub const DEFAULT_DCD_ALPHA: f64 = 1000.0;
/// F-score threshold: 1% of the unit-normalized extent.
pub const DEFAULT_F1_TAU: f64 = 0.01;
/// Tables print Chamfer values multiplied by this factor.
pub const REPORT_SCALE: f64 = 1000.0;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum ChamferVariant {
    /// Euclidean nearest-neighbor distances.
    L1,
    /// Squared Euclidean distances.
    L2,
}

/// Nearest-neighbor index and squared distance for every point of `from` in `to`.
pub fn nearest_all(from: &[Point3], to: &NnIndex) -> Result<Vec<(usize, f64)>> {
    from.iter().map(|&p| to.nearest(p)).collect()
}

fn directed_mean(from: &[Point3], to: &NnIndex, variant: ChamferVariant) -> Result<f64> {
    let mut sum = 0.0;
    for &p in from {
        let (_, d2) = to.nearest(p)?;
        sum += match variant {
            ChamferVariant::L1 => libm::sqrt(d2),
            ChamferVariant::L2 => d2,
        };
    }
    Ok(sum / from.len() as f64)
}

fn non_empty(a: &PointCloud, b: &PointCloud) -> Result<()> {
    if a.is_empty() || b.is_empty() {
        Err(Error::EmptyCloud)
    } else {
        Ok(())
    }
}

/// Symmetric Chamfer distance: the average of both directed mean
/// nearest-neighbor distances.
pub fn chamfer(a: &PointCloud, b: &PointCloud, variant: ChamferVariant) -> Result<f64> {
    non_empty(a, b)?;
    let ia = NnIndex::new(a.points());
    let ib = NnIndex::new(b.points());
    chamfer_indexed(a.points(), &ia, b.points(), &ib, variant)
}

fn chamfer_indexed(
    a: &[Point3],
    ia: &NnIndex,
    b: &[Point3],
    ib: &NnIndex,
    variant: ChamferVariant,
) -> Result<f64> {
    let forward = directed_mean(a, ib, variant)?;
    let backward = directed_mean(b, ia, variant)?;
    Ok(0.5 * (forward + backward))
}

fn dcd_directed(from: &[Point3], to: &NnIndex, alpha: f64) -> Result<f64> {
    let hits = nearest_all(from, to)?;
    let mut counts = vec![0usize; to.len()];
    for &(j, _) in &hits {
        counts[j] += 1;
    }
    let sum: f64 = hits
        .iter()
        .map(|&(j, d2)| 1.0 - crate::math::exp(-alpha * d2) / counts[j] as f64)
        .sum();
    Ok(sum / from.len() as f64)
}

/// Density-aware Chamfer distance. Each point contributes
/// `1 - exp(-alpha * d^2) / n`, where `d` is the distance to its nearest
/// neighbor in the other cloud and `n` counts how many points picked that
/// same neighbor. The result lies in `[0, 1]`.
pub fn density_aware_cd(a: &PointCloud, b: &PointCloud, alpha: f64) -> Result<f64> {
    non_empty(a, b)?;
    if !(alpha > 0.0) {
        return Err(Error::InvalidArgument("alpha must be positive".into()));
    }
    let ia = NnIndex::new(a.points());
    let ib = NnIndex::new(b.points());
    dcd_indexed(a.points(), &ia, b.points(), &ib, alpha)
}

fn dcd_indexed(a: &[Point3], ia: &NnIndex, b: &[Point3], ib: &NnIndex, alpha: f64) -> Result<f64> {
    Ok(0.5 * (dcd_directed(a, ib, alpha)? + dcd_directed(b, ia, alpha)?))
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct FScore {
    pub f1: f64,
    pub precision: f64,
    pub recall: f64,
}

fn fraction_within(from: &[Point3], to: &NnIndex, tau: f64) -> Result<f64> {
    let tau2 = tau * tau;
    let mut hits = 0usize;
    for &p in from {
        if to.nearest(p)?.1 < tau2 {
            hits += 1;
        }
    }
    Ok(hits as f64 / from.len() as f64)
}

/// Precision, recall and their harmonic mean at distance threshold `tau`.
pub fn f1_at_threshold(pred: &PointCloud, gt: &PointCloud, tau: f64) -> Result<FScore> {
    non_empty(pred, gt)?;
    if !(tau > 0.0) {
        return Err(Error::InvalidArgument("tau must be positive".into()));
    }
    let ip = NnIndex::new(pred.points());
    let ig = NnIndex::new(gt.points());
    f1_indexed(pred.points(), &ip, gt.points(), &ig, tau)
}

fn f1_indexed(p: &[Point3], ip: &NnIndex, g: &[Point3], ig: &NnIndex, tau: f64) -> Result<FScore> {
    let precision = fraction_within(p, ig, tau)?;
    let recall = fraction_within(g, ip, tau)?;
    let f1 = if precision + recall > 0.0 {
        2.0 * precision * recall / (precision + recall)
    } else {
        0.0
    };
    Ok(FScore {
        f1,
        precision,
        recall,
    })
}

/// Adds independent zero-mean Gaussian noise of std-dev `sigma` to every coordinate.
pub fn add_gaussian_noise(cloud: &PointCloud, sigma: f64, seed: u64) -> Result<PointCloud> {
    let normal = Normal::new(0.0, sigma)
        .ok()
        .filter(|_| sigma >= 0.0)
        .ok_or_else(|| Error::InvalidArgument("noise sigma must be finite and >= 0".into()))?;
    let mut rng = rng::rng_for(seed, &[0x6e6f697365]);
    let points = cloud
        .points()
        .iter()
        .map(|p| {
            let mut q = *p;
            for c in &mut q {
                *c += normal.sample(&mut rng);
            }
            q
        })
        .collect();
    PointCloud::new(points, cloud.role())
}

/// Knobs for [`MetricReport::compute`].
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct MetricOptions {
    pub dcd_alpha: f64,
    pub f1_tau: f64,
}

impl Default for MetricOptions {
    fn default() -> Self {
        Self {
            dcd_alpha: DEFAULT_DCD_ALPHA,
            f1_tau: DEFAULT_F1_TAU,
        }
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    pub cd_l1: f64,
    pub cd_l2: f64,
    pub dcd: f64,
    pub f1: f64,
    pub precision: f64,
    pub recall: f64,
}

impl MetricReport {
    /// All metrics of `pred` against `gt`, sharing one index per cloud.
    pub fn compute(pred: &PointCloud, gt: &PointCloud, opts: &MetricOptions) -> Result<Self> {
        non_empty(pred, gt)?;
        let (p, g) = (pred.points(), gt.points());
        let ip = NnIndex::new(p);
        let ig = NnIndex::new(g);
        let f = f1_indexed(p, &ip, g, &ig, opts.f1_tau)?;
        Ok(Self {
            cd_l1: chamfer_indexed(p, &ip, g, &ig, ChamferVariant::L1)?,
            cd_l2: chamfer_indexed(p, &ip, g, &ig, ChamferVariant::L2)?,
            dcd: dcd_indexed(p, &ip, g, &ig, opts.dcd_alpha)?,
            f1: f.f1,
            precision: f.precision,
            recall: f.recall,
        })
    }

    /// Elementwise mean; `None` for an empty list.
    pub fn mean(reports: &[MetricReport]) -> Option<Self> {
        if reports.is_empty() {
            return None;
        }
        let n = reports.len() as f64;
        let mut acc = Self::default();
        for r in reports {
            acc.cd_l1 += r.cd_l1;
            acc.cd_l2 += r.cd_l2;
            acc.dcd += r.dcd;
            acc.f1 += r.f1;
            acc.precision += r.precision;
            acc.recall += r.recall;
        }
        Some(Self {
            cd_l1: acc.cd_l1 / n,
            cd_l2: acc.cd_l2 / n,
            dcd: acc.dcd / n,
            f1: acc.f1 / n,
            precision: acc.precision / n,
            recall: acc.recall / n,
        })
    }

    /// Chamfer columns multiplied by [`REPORT_SCALE`]; the rest unchanged.
    pub fn paper_scaled(&self) -> Self {
        Self {
            cd_l1: self.cd_l1 * REPORT_SCALE,
            cd_l2: self.cd_l2 * REPORT_SCALE,
            ..*self
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::CloudRole;
    use alloc::vec;

    fn cloud(points: Vec<Point3>) -> PointCloud {
        PointCloud::new(points, CloudRole::Input).unwrap()
    }

    #[test]
    fn chamfer_examples() {
        let a = cloud(vec![[0.0; 3]]);
        let b = cloud(vec![[1.0, 0.0, 0.0]]);
        assert_eq!(chamfer(&a, &b, ChamferVariant::L1).unwrap(), 1.0);
        assert_eq!(chamfer(&a, &b, ChamferVariant::L2).unwrap(), 1.0);
        let a = cloud(vec![[0.0; 3], [2.0, 0.0, 0.0]]);
        assert_eq!(chamfer(&a, &b, ChamferVariant::L1).unwrap(), 1.0);
        assert_eq!(chamfer(&a, &a, ChamferVariant::L2).unwrap(), 0.0);
        let empty = PointCloud::empty(CloudRole::Input);
        assert_eq!(
            chamfer(&a, &empty, ChamferVariant::L1),
            Err(Error::EmptyCloud)
        );
    }

    #[test]
    fn dcd_duplicate_penalty() {
        let a = cloud(vec![[0.0; 3], [0.0; 3]]);
        let b = cloud(vec![[0.0; 3]]);
        assert_eq!(density_aware_cd(&a, &b, 1000.0).unwrap(), 0.25);
        assert_eq!(density_aware_cd(&b, &b, 1000.0).unwrap(), 0.0);
        assert!(density_aware_cd(&a, &b, 0.0).is_err());
    }

    #[test]
    fn f1_examples() {
        let pred = cloud(vec![[0.0; 3], [5.0, 0.0, 0.0]]);
        let gt = cloud(vec![[0.0; 3]]);
        let f = f1_at_threshold(&pred, &gt, 0.01).unwrap();
        assert_eq!(f.precision, 0.5);
        assert_eq!(f.recall, 1.0);
        assert!((f.f1 - 2.0 / 3.0).abs() < 1e-15);
        let far = cloud(vec![[3.0, 0.0, 0.0]]);
        let f = f1_at_threshold(&far, &gt, 0.01).unwrap();
        assert_eq!((f.f1, f.precision, f.recall), (0.0, 0.0, 0.0));
    }

    #[test]
    fn noise_contract() {
        let c = cloud((0..100).map(|i| [i as f64 * 0.01, 0.0, 1.0]).collect());
        assert_eq!(add_gaussian_noise(&c, 0.0, 3).unwrap(), c);
        assert_eq!(
            add_gaussian_noise(&c, 0.05, 3).unwrap(),
            add_gaussian_noise(&c, 0.05, 3).unwrap()
        );
        assert_ne!(add_gaussian_noise(&c, 0.05, 3).unwrap(), c);
        assert!(add_gaussian_noise(&c, -1.0, 3).is_err());
    }

    #[test]
    fn noise_std_dev() {
        let c = cloud(vec![[0.1, -0.2, 0.3]; 10_000]);
        let noisy = add_gaussian_noise(&c, 0.01, 17).unwrap();
        let deltas: Vec<f64> = noisy
            .points()
            .iter()
            .zip(c.points())
            .flat_map(|(p, q)| (0..3).map(move |k| p[k] - q[k]))
            .collect();
        let n = deltas.len() as f64;
        let mean = deltas.iter().sum::<f64>() / n;
        let var = deltas.iter().map(|d| (d - mean) * (d - mean)).sum::<f64>() / (n - 1.0);
        assert!((libm::sqrt(var) - 0.01).abs() < 0.05 * 0.01);
    }

    #[test]
    fn report_identity_and_scaling() {
        let a = cloud((0..30).map(|i| [i as f64, 0.5 * i as f64, 0.0]).collect());
        let r = MetricReport::compute(&a, &a, &MetricOptions::default()).unwrap();
        assert_eq!(
            r,
            MetricReport {
                cd_l1: 0.0,
                cd_l2: 0.0,
                dcd: 0.0,
                f1: 1.0,
                precision: 1.0,
                recall: 1.0
            }
        );
        let s = MetricReport {
            cd_l1: 0.00646,
            ..r
        }
        .paper_scaled();
        assert!((s.cd_l1 - 6.46).abs() < 1e-12);
        assert_eq!(MetricReport::mean(&[]), None);
    }
}
