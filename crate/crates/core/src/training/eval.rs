//! Held-out evaluation and the noise and density benches.

use alloc::vec::Vec;

use rand::seq::index;
use rand::Rng;
use serde::{Deserialize, Serialize};

use super::synthetic::Sample;
use crate::error::{Error, Result};
use crate::geometry::{build_view_rig, CloudRole, PointCloud, ViewRig, DEFAULT_THRESHOLD};
use crate::metrics::{add_gaussian_noise, MetricOptions, MetricReport};
use crate::model::{complete, Ablation, ModelParams};
use crate::rng;

/// Noise levels (standard deviation, normalized units) of the noise bench.
pub const DEFAULT_NOISE_LEVELS: [f64; 4] = [0.0, 0.005, 0.01, 0.02];

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalOptions {
    /// Opacity threshold of the output filter.
    pub threshold: f64,
    pub metrics: MetricOptions,
    pub seed: u64,
}

impl Default for EvalOptions {
    fn default() -> Self {
        Self {
            threshold: DEFAULT_THRESHOLD,
            metrics: MetricOptions::default(),
            seed: 0,
        }
    }
}

/// Metrics of one completed sample.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct SampleEval {
    pub index: usize,
    pub label: usize,
    pub predicted_label: usize,
    pub output_count: usize,
    pub report: MetricReport,
}

/// Per-sample results with their means.
#[derive(Clone, Debug, PartialEq)]
pub struct Evaluation {
    pub samples: Vec<SampleEval>,
    pub mean: MetricReport,
    pub accuracy: f64,
    pub mean_output_count: f64,
    pub max_output_count: usize,
}

fn eval_seed(seed: u64, index: usize) -> u64 {
    rng::derive_seed(seed, &[0x6576_616c, index as u64])
}

/// Completes `sample.partial` and scores the union of input and output
/// against the complete cloud, in the dataset frame.
pub fn evaluate_sample(
    params: &ModelParams,
    ablation: Ablation,
    rig: &ViewRig,
    sample: &Sample,
    index: usize,
    opts: &EvalOptions,
) -> Result<SampleEval> {
    let done = complete(
        params,
        rig,
        &sample.partial,
        ablation,
        opts.threshold,
        eval_seed(opts.seed, index),
    )?;
    Ok(SampleEval {
        index,
        label: sample.label,
        predicted_label: done.class.argmax(),
        output_count: done.output.len(),
        report: MetricReport::compute(&done.predicted, &sample.complete, &opts.metrics)?,
    })
}

/// Means over per-sample results, which must be non-empty.
pub fn aggregate(samples: Vec<SampleEval>) -> Result<Evaluation> {
    let reports: Vec<MetricReport> = samples.iter().map(|s| s.report).collect();
    let mean = MetricReport::mean(&reports).ok_or(Error::InvalidArgument(
        "cannot aggregate an empty evaluation".into(),
    ))?;
    let n = samples.len() as f64;
    let correct = samples
        .iter()
        .filter(|s| s.label == s.predicted_label)
        .count();
    let counts = samples.iter().map(|s| s.output_count);
    Ok(Evaluation {
        mean,
        accuracy: correct as f64 / n,
        mean_output_count: counts.clone().sum::<usize>() as f64 / n,
        max_output_count: counts.max().unwrap_or(0),
        samples,
    })
}

pub fn evaluate(
    params: &ModelParams,
    ablation: Ablation,
    dataset: &[Sample],
    rig: &ViewRig,
    opts: &EvalOptions,
) -> Result<Evaluation> {
    let samples = dataset
        .iter()
        .enumerate()
        .map(|(i, s)| evaluate_sample(params, ablation, rig, s, i, opts))
        .collect::<Result<Vec<_>>>()?;
    aggregate(samples)
}

/// Metrics of the partial cloud alone against the complete cloud.
pub fn baseline_report(sample: &Sample, metrics: &MetricOptions) -> Result<MetricReport> {
    MetricReport::compute(&sample.partial, &sample.complete, metrics)
}

/// Copies of the dataset with Gaussian noise on every partial coordinate.
/// Each sample reuses one noise stream across levels, so levels differ only
/// in scale and level 0 leaves the data untouched.
pub fn noisy_dataset(dataset: &[Sample], sigma: f64, seed: u64) -> Result<Vec<Sample>> {
    dataset
        .iter()
        .enumerate()
        .map(|(i, s)| {
            let partial = add_gaussian_noise(
                &s.partial,
                sigma,
                rng::derive_seed(seed, &[0x6e6f_6973_65, i as u64]),
            )?;
            Ok(Sample {
                partial,
                ..s.clone()
            })
        })
        .collect()
}

/// Exactly `n` points of `cloud`: a subset without replacement when the cloud
/// is large enough, otherwise every point plus random repeats.
pub fn resample_input(cloud: &PointCloud, n: usize, seed: u64) -> Result<PointCloud> {
    if cloud.is_empty() || n == 0 {
        return Err(Error::EmptyCloud);
    }
    let pts = cloud.points();
    let mut r = rng::rng_for(seed, &[0x7265_7361_6d70]);
    let mut out = Vec::with_capacity(n);
    if n <= pts.len() {
        let mut picked = index::sample(&mut r, pts.len(), n).into_vec();
        picked.sort_unstable();
        out.extend(picked.into_iter().map(|i| pts[i]));
    } else {
        out.extend_from_slice(pts);
        out.extend((pts.len()..n).map(|_| pts[r.random_range(0..pts.len())]));
    }
    PointCloud::new(out, CloudRole::Input)
}

/// Copies of the dataset with every partial resampled to `n` points.
pub fn resampled_dataset(dataset: &[Sample], n: usize, seed: u64) -> Result<Vec<Sample>> {
    dataset
        .iter()
        .enumerate()
        .map(|(i, s)| {
            Ok(Sample {
                partial: resample_input(&s.partial, n, rng::derive_seed(seed, &[i as u64]))?,
                ..s.clone()
            })
        })
        .collect()
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct NoiseRow {
    pub sigma: f64,
    pub cd_l1: f64,
    pub cd_l2: f64,
    pub dcd: f64,
    pub f1: f64,
}

impl NoiseRow {
    pub fn new(sigma: f64, eval: &Evaluation) -> Self {
        Self {
            sigma,
            cd_l1: eval.mean.cd_l1,
            cd_l2: eval.mean.cd_l2,
            dcd: eval.mean.dcd,
            f1: eval.mean.f1,
        }
    }
}

/// One evaluation per noise level.
pub fn noise_bench(
    params: &ModelParams,
    ablation: Ablation,
    dataset: &[Sample],
    rig: &ViewRig,
    opts: &EvalOptions,
    sigmas: &[f64],
) -> Result<Vec<NoiseRow>> {
    sigmas
        .iter()
        .map(|&sigma| {
            let noisy = noisy_dataset(dataset, sigma, opts.seed)?;
            let eval = evaluate(params, ablation, &noisy, rig, opts)?;
            Ok(NoiseRow::new(sigma, &eval))
        })
        .collect()
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct DensityRow {
    pub r: usize,
    pub n: usize,
    pub cd_l1: f64,
    pub mean_output_count: f64,
    pub max_output_count: usize,
}

impl DensityRow {
    pub fn new(r: usize, n: usize, eval: &Evaluation) -> Self {
        Self {
            r,
            n,
            cd_l1: eval.mean.cd_l1,
            mean_output_count: eval.mean_output_count,
            max_output_count: eval.max_output_count,
        }
    }
}

/// Rig for a bench row at grid resolution `r`.
pub fn bench_rig(params: &ModelParams, r: usize, spread: f64) -> Result<ViewRig> {
    build_view_rig(params.config().v_count, r, spread)
}

/// One evaluation per `(R', N)` pair: inputs resampled to `N` points and the
/// rig rebuilt at `R'` with the trained weights unchanged.
#[allow(clippy::too_many_arguments)]
pub fn density_bench(
    params: &ModelParams,
    ablation: Ablation,
    dataset: &[Sample],
    spread: f64,
    opts: &EvalOptions,
    r_values: &[usize],
    n_values: &[usize],
) -> Result<Vec<DensityRow>> {
    let mut rows = Vec::with_capacity(r_values.len() * n_values.len());
    for &r in r_values {
        let rig = bench_rig(params, r, spread)?;
        for &n in n_values {
            let data = resampled_dataset(dataset, n, opts.seed)?;
            let eval = evaluate(params, ablation, &data, &rig, opts)?;
            rows.push(DensityRow::new(r, n, &eval));
        }
    }
    Ok(rows)
}
