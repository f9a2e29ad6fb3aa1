//! Subcommand implementations.

use std::ffi::OsString;
use std::path::{Path, PathBuf};

use clap::Parser;
use rayon::prelude::*;

use dance_core::geometry::{build_view_rig, ViewRig};
use dance_core::metrics::MetricReport;
use dance_core::model::{complete, Ablation, ModelParams};
use dance_core::training::{
    aggregate, evaluate_sample, generate_synthetic_dataset, noisy_dataset, resampled_dataset,
    train_with, DensityRow, EvalOptions, Evaluation, NoiseRow, Sample,
};
use dance_core::CloudRole;

use crate::args::{
    Cli, Command, Common, CompleteArgs, DensityBenchArgs, EvalArgs, GenDataArgs, InferenceArgs,
    NoiseBenchArgs, TrainArgs,
};
use crate::checkpoint::Checkpoint;
use crate::config::RunConfig;
use crate::dataset::{read_dataset, write_dataset, StoredSample};
use crate::error::{CliError, Result, EXIT_USAGE};
use crate::formats::{read_cloud, write_cloud, PlyEncoding};
use crate::report::{write_density_csv, write_history_csv, write_metric_csv, write_noise_csv};
use crate::threads::worker_pool;

/// Parses `argv` (program name first), runs the subcommand and returns the
/// process exit code. Errors are printed to stderr.
pub fn run<I, T>(argv: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(argv) {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { EXIT_USAGE } else { 0 };
            let _ = e.print();
            return code;
        }
    };
    match dispatch(cli.command) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            e.exit_code()
        }
    }
}

pub fn dispatch(command: Command) -> Result<()> {
    let pool = worker_pool()?;
    pool.install(|| match command {
        Command::GenData(a) => gen_data(a),
        Command::Train(a) => train(a),
        Command::Complete(a) => complete_cmd(a),
        Command::Eval(a) => eval(a),
        Command::NoiseBench(a) => noise_bench(a),
        Command::DensityBench(a) => density_bench(a),
    })
}

fn load_config(common: &Common) -> Result<RunConfig> {
    match &common.config {
        Some(path) => RunConfig::load(path),
        None => Ok(RunConfig::default()),
    }
}

fn gen_data(a: GenDataArgs) -> Result<()> {
    let mut cfg = load_config(&a.common)?;
    if let Some(n) = a.n_per_class {
        cfg.data.n_per_class = n;
    }
    if let Some(c) = a.categories {
        cfg.data.categories = c;
    }
    if let Some(p) = a.points {
        cfg.data.points_per_shape = p;
    }
    if let Some(s) = a.common.seed {
        cfg.data.seed = s;
    }
    cfg.validate()?;
    let out = a.out.unwrap_or_else(|| cfg.paths.data.clone());
    let d = &cfg.data;
    let samples =
        generate_synthetic_dataset(d.n_per_class, &d.categories, d.points_per_shape, d.seed)?;
    write_dataset(&out, &samples)?;
    println!("wrote {} samples to {}", samples.len(), out.display());
    Ok(())
}

fn samples_of(stored: &[StoredSample]) -> Vec<Sample> {
    stored.iter().map(|s| s.sample.clone()).collect()
}

fn train(a: TrainArgs) -> Result<()> {
    let mut cfg = load_config(&a.common)?;
    if let Some(e) = a.epochs {
        cfg.train.epochs = e;
    }
    if let Some(s) = a.common.seed {
        cfg.train.seed = s;
    }
    cfg.validate()?;
    let data = a.data.unwrap_or_else(|| cfg.paths.data.clone());
    let ckpt = a.ckpt.unwrap_or_else(|| cfg.paths.checkpoint.clone());
    let history_path = a.history.unwrap_or_else(|| cfg.paths.history.clone());
    let samples = samples_of(&read_dataset(&data)?);

    let quiet = a.quiet;
    let (params, history) = train_with(&samples, &cfg.model, &cfg.train, |e| {
        if !quiet {
            eprintln!(
                "epoch {:>3}: loss {:.6} cd {:.6} cls_accuracy {:.3}",
                e.epoch, e.loss, e.cd, e.cls_accuracy
            );
        }
    })?;
    Checkpoint::new(cfg, params)?.save(&ckpt)?;
    write_history_csv(&history_path, &history)?;
    println!(
        "trained on {} samples; checkpoint {}, history {}",
        samples.len(),
        ckpt.display(),
        history_path.display()
    );
    Ok(())
}

/// Checkpoint plus the effective run configuration for inference.
struct Inference {
    params: ModelParams,
    cfg: RunConfig,
}

impl Inference {
    fn load(a: &InferenceArgs) -> Result<Self> {
        let base = match &a.common.config {
            Some(path) => Some(RunConfig::load(path)?),
            None => None,
        };
        let ckpt_path = a.ckpt.clone().unwrap_or_else(|| {
            base.as_ref()
                .map(|c| c.paths.checkpoint.clone())
                .unwrap_or_else(|| RunConfig::default().paths.checkpoint)
        });
        let ckpt = Checkpoint::load(&ckpt_path)?;
        let mut cfg = ckpt.config;
        if let Some(base) = base {
            cfg.eval = base.eval;
            cfg.paths = base.paths;
        }
        if let Some(t) = a.threshold {
            cfg.eval.threshold = t;
        }
        if let Some(r) = a.r {
            cfg.eval.r = Some(r);
        }
        if let Some(s) = a.common.seed {
            cfg.eval.seed = s;
        }
        cfg.validate()?;
        Ok(Self {
            params: ckpt.params,
            cfg,
        })
    }

    fn ablation(&self) -> Ablation {
        self.cfg.train.ablation()
    }

    fn rig(&self, r: usize) -> Result<ViewRig> {
        Ok(build_view_rig(
            self.cfg.model.v_count,
            r,
            self.cfg.train.spread,
        )?)
    }

    fn options(&self) -> EvalOptions {
        self.cfg.eval.options()
    }

    fn dataset(&self, flag: Option<PathBuf>) -> Result<Vec<StoredSample>> {
        read_dataset(&flag.unwrap_or_else(|| self.cfg.paths.data.clone()))
    }
}

/// [`dance_core::training::evaluate`] with samples spread over the worker
/// pool; results match the sequential version exactly.
pub fn evaluate_parallel(
    params: &ModelParams,
    ablation: Ablation,
    samples: &[Sample],
    rig: &ViewRig,
    opts: &EvalOptions,
) -> Result<Evaluation> {
    let evals = samples
        .par_iter()
        .enumerate()
        .map(|(i, s)| evaluate_sample(params, ablation, rig, s, i, opts))
        .collect::<dance_core::Result<Vec<_>>>()?;
    Ok(aggregate(evals)?)
}

fn sibling(path: &Path, suffix: &str, ext: &str) -> PathBuf {
    let stem = path
        .file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_default();
    path.with_file_name(format!("{stem}{suffix}.{ext}"))
}

fn complete_cmd(a: CompleteArgs) -> Result<()> {
    let inf = Inference::load(&a.inference)?;
    let input = read_cloud(&a.input, CloudRole::Input)?;
    let rig = inf.rig(inf.cfg.inference_r())?;
    let done = complete(
        &inf.params,
        &rig,
        &input,
        inf.ablation(),
        inf.cfg.eval.threshold,
        inf.cfg.eval.seed,
    )?;
    let encoding = if a.ascii {
        PlyEncoding::Ascii
    } else {
        PlyEncoding::BinaryLittleEndian
    };
    let ext = a
        .out
        .extension()
        .map(|e| e.to_string_lossy().into_owned())
        .unwrap_or_else(|| "ply".into());
    let out_points = a
        .out_points
        .unwrap_or_else(|| sibling(&a.out, "_out", &ext));
    write_cloud(&a.out, done.predicted.points(), encoding)?;
    write_cloud(&out_points, done.output.points(), encoding)?;
    println!(
        "input {} points, completed {} points (capacity {}), class {}; wrote {} and {}",
        input.len(),
        done.output.len(),
        rig.capacity(),
        done.class.argmax(),
        a.out.display(),
        out_points.display()
    );
    Ok(())
}

fn eval(a: EvalArgs) -> Result<()> {
    let summary = a
        .summary
        .clone()
        .unwrap_or_else(|| sibling(&a.out, "_summary", "csv"));
    if let (Some(pred), Some(gt)) = (&a.pred, &a.gt) {
        return eval_files(&a, pred, gt, &summary);
    }
    let inf = Inference::load(&a.inference)?;
    let stored = inf.dataset(a.data.clone())?;
    let samples = samples_of(&stored);
    let rig = inf.rig(inf.cfg.inference_r())?;
    let ev = evaluate_parallel(&inf.params, inf.ablation(), &samples, &rig, &inf.options())?;
    let rows: Vec<(String, MetricReport)> = stored
        .iter()
        .zip(&ev.samples)
        .map(|(s, e)| (s.id.clone(), e.report))
        .collect();
    write_metric_csv(&a.out, &rows, a.paper_scale)?;
    write_metric_csv(&summary, &[("mean".into(), ev.mean)], a.paper_scale)?;
    println!(
        "{} samples: cd_l1 {:.6} dcd {:.4} f1 {:.4} accuracy {:.3} mean output {:.1}",
        samples.len(),
        ev.mean.cd_l1,
        ev.mean.dcd,
        ev.mean.f1,
        ev.accuracy,
        ev.mean_output_count
    );
    Ok(())
}

/// Scores one predicted cloud against its ground truth; metric settings come
/// from `--config` or the defaults.
fn eval_files(a: &EvalArgs, pred: &Path, gt: &Path, summary: &Path) -> Result<()> {
    let inf = &a.inference;
    if inf.ckpt.is_some() || inf.threshold.is_some() || inf.r.is_some() {
        return Err(CliError::Usage(
            "--pred/--gt scoring takes no --ckpt, --threshold or --r".into(),
        ));
    }
    let cfg = load_config(&inf.common)?;
    let p = read_cloud(pred, CloudRole::Output)?;
    let g = read_cloud(gt, CloudRole::GroundTruth)?;
    let report = MetricReport::compute(&p, &g, &cfg.eval.metrics)?;
    let id = pred
        .file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_else(|| "pred".into());
    write_metric_csv(&a.out, &[(id, report)], a.paper_scale)?;
    write_metric_csv(summary, &[("mean".into(), report)], a.paper_scale)?;
    println!(
        "cd_l1 {:.6} cd_l2 {:.6} dcd {:.4} f1 {:.4}",
        report.cd_l1, report.cd_l2, report.dcd, report.f1
    );
    Ok(())
}

fn noise_bench(a: NoiseBenchArgs) -> Result<()> {
    let inf = Inference::load(&a.inference)?;
    let samples = samples_of(&inf.dataset(a.data)?);
    let sigmas = a.sigmas.unwrap_or_else(|| inf.cfg.eval.noise_levels.clone());
    if let Some(s) = sigmas.iter().find(|s| !(**s >= 0.0 && s.is_finite())) {
        return Err(CliError::Usage(format!(
            "--sigmas: {s} is not a non-negative level"
        )));
    }
    let rig = inf.rig(inf.cfg.inference_r())?;
    let opts = inf.options();
    let mut rows = Vec::with_capacity(sigmas.len());
    for &sigma in &sigmas {
        let noisy = noisy_dataset(&samples, sigma, opts.seed)?;
        let ev = evaluate_parallel(&inf.params, inf.ablation(), &noisy, &rig, &opts)?;
        rows.push(NoiseRow::new(sigma, &ev));
        println!("sigma {sigma}: cd_l1 {:.6} f1 {:.4}", ev.mean.cd_l1, ev.mean.f1);
    }
    write_noise_csv(&a.out, &rows, a.paper_scale)
}

fn density_bench(a: DensityBenchArgs) -> Result<()> {
    if a.inference.r.is_some() {
        return Err(CliError::Usage(
            "density-bench takes --r-values rather than --r".into(),
        ));
    }
    let inf = Inference::load(&a.inference)?;
    let samples = samples_of(&inf.dataset(a.data)?);
    let r_values = a.r_values.unwrap_or_else(|| inf.cfg.eval.density_r.clone());
    let n_values = a.n_values.unwrap_or_else(|| inf.cfg.eval.density_n.clone());
    if r_values.contains(&0) || n_values.contains(&0) {
        return Err(CliError::Usage(
            "--r-values and --n-values must be at least 1".into(),
        ));
    }
    let opts = inf.options();
    let mut rows = Vec::with_capacity(r_values.len() * n_values.len());
    for &r in &r_values {
        let rig = inf.rig(r)?;
        for &n in &n_values {
            let data = resampled_dataset(&samples, n, opts.seed)?;
            let ev = evaluate_parallel(&inf.params, inf.ablation(), &data, &rig, &opts)?;
            let row = DensityRow::new(r, n, &ev);
            println!(
                "R {r} N {n}: cd_l1 {:.6} mean output {:.1} max output {} (capacity {})",
                row.cd_l1,
                row.mean_output_count,
                row.max_output_count,
                rig.capacity()
            );
            rows.push(row);
        }
    }
    write_density_csv(&a.out, &rows, a.paper_scale)
}
