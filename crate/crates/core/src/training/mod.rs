//! Losses, the training loop, synthetic data, and evaluation harnesses.

mod eval;
mod synthetic;

use alloc::format;
use alloc::vec::Vec;

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

pub use eval::{
    aggregate, baseline_report, bench_rig, density_bench, evaluate, evaluate_sample, noise_bench,
    noisy_dataset, resample_input, resampled_dataset, DensityRow, EvalOptions, Evaluation,
    NoiseRow, SampleEval, DEFAULT_NOISE_LEVELS,
};
pub use synthetic::{
    generate_sample, generate_synthetic_dataset, Category, Sample, ShapeMeta, MIN_POINTS_PER_SHAPE,
    REMOVAL_RANGE, SCALE_RANGE,
};

use crate::autodiff::{adam_step, AdamConfig, Graph, OptimizerState, Tensor, Var};
use crate::error::{Error, Result};
use crate::geometry::{
    build_view_rig, generate_candidates, normalize_cloud, CandidateSet, Point3, PointCloud,
    ViewRig, DEFAULT_SPREAD,
};
use crate::metrics::NnIndex;
use crate::model::{forward_graph, Ablation, BoundParams, ModelConfig, ModelParams};
use crate::rng;

/// Positive-class weight of the opacity term. Only a few candidates per
/// sample land within `opacity_tau` of the ground truth; unweighted, the
/// optimum keeps every opacity below the output threshold.
pub const DEFAULT_OPACITY_POS_WEIGHT: f64 = 20.0;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    /// Weight of the completion terms against the classification term.
    pub lambda: f64,
    /// A refined candidate is an opacity positive when its nearest
    /// ground-truth point is closer than this.
    pub opacity_tau: f64,
    /// Weight of the opacity term inside the completion terms.
    pub opacity_beta: f64,
    /// Weight of positive targets inside the opacity term.
    pub opacity_pos_weight: f64,
    pub lr: f64,
    pub epochs: usize,
    /// Samples whose gradients are averaged into one optimizer step.
    pub batch_size: usize,
    pub seed: u64,
    /// Depth spread of candidate sampling, relative to the ray gap.
    pub spread: f64,
    pub use_classification: bool,
    pub use_face_attention: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            lambda: 0.9,
            opacity_tau: 0.03,
            opacity_beta: 1.0,
            opacity_pos_weight: DEFAULT_OPACITY_POS_WEIGHT,
            lr: 1e-3,
            epochs: 30,
            batch_size: 1,
            seed: 0,
            spread: DEFAULT_SPREAD,
            use_classification: true,
            use_face_attention: true,
        }
    }
}

impl TrainConfig {
    /// Checks ranges; messages start with the offending field name.
    pub fn validate(&self) -> Result<()> {
        let bad = |field: &str, msg: &str| Err(Error::InvalidArgument(format!("{field}: {msg}")));
        if !(0.0..=1.0).contains(&self.lambda) {
            return bad("lambda", "must lie in [0, 1]");
        }
        if !(self.opacity_tau > 0.0 && self.opacity_tau.is_finite()) {
            return bad("opacity_tau", "must be positive");
        }
        if !(self.opacity_beta >= 0.0 && self.opacity_beta.is_finite()) {
            return bad("opacity_beta", "must be non-negative");
        }
        if !(self.opacity_pos_weight > 0.0 && self.opacity_pos_weight.is_finite()) {
            return bad("opacity_pos_weight", "must be positive");
        }
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return bad("lr", "must be positive");
        }
        if self.batch_size == 0 {
            return bad("batch_size", "must be at least 1");
        }
        if !(self.spread >= 0.0 && self.spread.is_finite()) {
            return bad("spread", "must be non-negative");
        }
        Ok(())
    }

    pub fn ablation(&self) -> Ablation {
        Ablation {
            use_classification: self.use_classification,
            use_face_attention: self.use_face_attention,
        }
    }
}

/// Symmetric Chamfer (Euclidean) between predicted rows and the ground truth.
pub fn completion_loss(g: &mut Graph, pred: Var, gt: &PointCloud) -> Result<Var> {
    g.chamfer_l1(pred, gt.points())
}

/// 1 for refined points within `tau` of the ground truth, else 0.
pub fn opacity_targets(refined: &[Point3], gt: &NnIndex, tau: f64) -> Result<Vec<f64>> {
    let tau2 = tau * tau;
    refined
        .iter()
        .map(|&p| {
            gt.nearest(p)
                .map(|(_, d2)| if d2 < tau2 { 1.0 } else { 0.0 })
        })
        .collect()
}

/// Mean binary cross-entropy of opacities against fixed targets, positives
/// weighted by `pos_weight`.
pub fn opacity_loss(g: &mut Graph, opacity: Var, targets: &[f64], pos_weight: f64) -> Result<Var> {
    g.bce_weighted(opacity, targets, pos_weight)
}

/// `-ln p[label]` with the probability floored.
pub fn classification_loss(g: &mut Graph, p_cls: Var, label: usize) -> Result<Var> {
    g.nll(p_cls, label)
}

/// `lambda * (cd + beta * op) + (1 - lambda) * cls`; without a class term the
/// completion terms get full weight.
pub fn total_loss(
    g: &mut Graph,
    l_cd: Var,
    l_op: Var,
    l_cls: Option<Var>,
    cfg: &TrainConfig,
) -> Result<Var> {
    let op = g.scale(l_op, cfg.opacity_beta);
    let completion = g.add(l_cd, op)?;
    match l_cls {
        Some(cls) => {
            let a = g.scale(completion, cfg.lambda);
            let b = g.scale(cls, 1.0 - cfg.lambda);
            g.add(a, b)
        }
        None => Ok(completion),
    }
}

/// Scalar form of [`total_loss`].
pub fn total_loss_value(l_cd: f64, l_op: f64, l_cls: Option<f64>, cfg: &TrainConfig) -> f64 {
    let completion = l_cd + cfg.opacity_beta * l_op;
    match l_cls {
        Some(cls) => cfg.lambda * completion + (1.0 - cfg.lambda) * cls,
        None => completion,
    }
}

/// Loss terms of one sample, recorded on a graph.
#[derive(Clone, Copy, Debug)]
pub struct StepLosses {
    pub total: Var,
    pub cd: Var,
    pub opacity: Var,
    pub class_probs: Var,
}

/// Builds the training objective for one sample whose `input`, `gt` and
/// `candidates` share the normalized frame.
///
/// Refined candidates are `p_m + frame_m(o_m)`. Candidates within `tau` of
/// the ground truth are opacity positives and, together with the input,
/// form the cloud the Chamfer term is measured on.
pub fn sample_objective(
    g: &mut Graph,
    p: &BoundParams<'_>,
    input: &PointCloud,
    gt: &PointCloud,
    gt_index: &NnIndex,
    candidates: &CandidateSet,
    label: usize,
    cfg: &TrainConfig,
) -> Result<StepLosses> {
    let c = p.config().c;
    if label >= c {
        return Err(Error::Label { label, classes: c });
    }
    let out = forward_graph(g, p, input, candidates, cfg.ablation())?;
    let anchors: Vec<f64> = candidates.points.iter().flatten().copied().collect();
    let anchors = g.constant(Tensor::matrix(candidates.len(), 3, anchors)?);
    let moved = g.frame_transform(out.offsets, &candidates.local_frames)?;
    let refined = g.add(anchors, moved)?;

    let refined_pts: Vec<Point3> = g
        .value(refined)
        .data()
        .chunks_exact(3)
        .map(|r| [r[0], r[1], r[2]])
        .collect();
    let targets = opacity_targets(&refined_pts, gt_index, cfg.opacity_tau)?;
    let positives: Vec<usize> = (0..targets.len()).filter(|&m| targets[m] == 1.0).collect();

    let input_rows: Vec<f64> = input.points().iter().flatten().copied().collect();
    let input_rows = g.constant(Tensor::matrix(input.len(), 3, input_rows)?);
    let pred = if positives.is_empty() {
        input_rows
    } else {
        let kept = g.gather_rows(refined, &positives)?;
        g.concat_rows(&[input_rows, kept])?
    };
    let cd = completion_loss(g, pred, gt)?;
    let opacity = opacity_loss(g, out.opacity, &targets, cfg.opacity_pos_weight)?;
    let cls = if cfg.use_classification {
        Some(classification_loss(g, out.class_probs, label)?)
    } else {
        None
    };
    let total = total_loss(g, cd, opacity, cls, cfg)?;
    Ok(StepLosses {
        total,
        cd,
        opacity,
        class_probs: out.class_probs,
    })
}

/// Per-epoch training averages.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochStats {
    pub epoch: usize,
    pub loss: f64,
    pub cd: f64,
    pub cls_accuracy: f64,
}

/// A sample moved to the frame of its normalized partial cloud.
struct Prepared {
    input: PointCloud,
    gt: PointCloud,
    gt_index: NnIndex,
    label: usize,
}

fn prepare(sample: &Sample) -> Result<Prepared> {
    let (input, t) = normalize_cloud(&sample.partial)?;
    let gt = t.apply_cloud(&sample.complete);
    let gt_index = NnIndex::new(gt.points());
    Ok(Prepared {
        input,
        gt,
        gt_index,
        label: sample.label,
    })
}

/// Candidate seed of one sample visit during training.
pub fn train_candidate_seed(seed: u64, epoch: usize, sample: usize) -> u64 {
    rng::derive_seed(seed, &[0x7472_6169_6e, epoch as u64, sample as u64])
}

/// The parameters training starts from.
pub fn initial_params(model_cfg: &ModelConfig, cfg: &TrainConfig) -> Result<ModelParams> {
    ModelParams::init(model_cfg, rng::derive_seed(cfg.seed, &[0x696e6974]))
}

/// Trains from scratch, reporting each epoch to `on_epoch`.
pub fn train_with<F>(
    dataset: &[Sample],
    model_cfg: &ModelConfig,
    cfg: &TrainConfig,
    mut on_epoch: F,
) -> Result<(ModelParams, Vec<EpochStats>)>
where
    F: FnMut(&EpochStats),
{
    cfg.validate()?;
    model_cfg.validate()?;
    if dataset.is_empty() {
        return Err(Error::InvalidArgument("dataset is empty".into()));
    }
    if let Some(s) = dataset.iter().find(|s| s.label >= model_cfg.c) {
        return Err(Error::Label {
            label: s.label,
            classes: model_cfg.c,
        });
    }
    let rig: ViewRig = build_view_rig(model_cfg.v_count, model_cfg.r, cfg.spread)?;
    let prepared = dataset.iter().map(prepare).collect::<Result<Vec<_>>>()?;
    let mut params = initial_params(model_cfg, cfg)?;
    let mut opt = OptimizerState::new(AdamConfig {
        lr: cfg.lr,
        ..AdamConfig::default()
    });
    let mut history = Vec::with_capacity(cfg.epochs);
    let mut order: Vec<usize> = (0..prepared.len()).collect();

    for epoch in 0..cfg.epochs {
        order.shuffle(&mut rng::rng_for(cfg.seed, &[0x7368_7566, epoch as u64]));
        let (mut loss_sum, mut cd_sum, mut correct) = (0.0, 0.0, 0usize);
        for batch in order.chunks(cfg.batch_size) {
            let mut grads: Vec<Tensor> = params
                .tensors()
                .iter()
                .map(|t| Tensor::zeros(t.shape()))
                .collect();
            for &i in batch {
                let s = &prepared[i];
                let cands =
                    generate_candidates(&rig, &s.input, train_candidate_seed(cfg.seed, epoch, i));
                let mut g = Graph::new();
                let p = params.bind(&mut g, true);
                let l = sample_objective(
                    &mut g,
                    &p,
                    &s.input,
                    &s.gt,
                    &s.gt_index,
                    &cands,
                    s.label,
                    cfg,
                )?;
                loss_sum += g.value(l.total).item();
                cd_sum += g.value(l.cd).item();
                if predicted_label(g.value(l.class_probs).data()) == s.label {
                    correct += 1;
                }
                let vars = p.vars().to_vec();
                g.backward(l.total)?;
                let inv = 1.0 / batch.len() as f64;
                for (acc, v) in grads.iter_mut().zip(vars) {
                    let gv = g.grad(v).expect("parameters require gradients");
                    for (a, &d) in acc.data_mut().iter_mut().zip(gv.data()) {
                        *a += d * inv;
                    }
                }
            }
            let mut refs: Vec<&mut Tensor> = params.tensors_mut().iter_mut().collect();
            adam_step(&mut refs, &grads, &mut opt)?;
        }
        let n = prepared.len() as f64;
        let stats = EpochStats {
            epoch,
            loss: loss_sum / n,
            cd: cd_sum / n,
            cls_accuracy: correct as f64 / n,
        };
        if !(stats.loss.is_finite() && params.tensors().iter().all(Tensor::is_finite)) {
            return Err(Error::InvalidArgument(format!(
                "training diverged in epoch {epoch}"
            )));
        }
        on_epoch(&stats);
        history.push(stats);
    }
    Ok((params, history))
}

/// [`train_with`] without progress reporting.
pub fn train(
    dataset: &[Sample],
    model_cfg: &ModelConfig,
    cfg: &TrainConfig,
) -> Result<(ModelParams, Vec<EpochStats>)> {
    train_with(dataset, model_cfg, cfg, |_| {})
}

/// Index of the largest probability; ties go to the lowest index.
pub fn predicted_label(probs: &[f64]) -> usize {
    let mut best = 0;
    for (i, &p) in probs.iter().enumerate() {
        if p > probs[best] {
            best = i;
        }
    }
    best
}
