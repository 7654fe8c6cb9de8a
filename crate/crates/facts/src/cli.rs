//! Command-line interface. Flags given explicitly override values from
//! `--config`, which override built-in defaults.

use std::path::{Path, PathBuf};

use anyhow::{bail, Context};
use clap::{Args, Parser, Subcommand};
use facts_core::amplify::{Architecture, TrainHyper};
use facts_core::dataset::Split;
use facts_core::slicing::{CovarianceKind, DeltaMode, SliceHyper};
use facts_core::synth::{self, SynthConfig};
use serde_json::Value;

use crate::artifacts;
use crate::dataio::{self, read_json, write_json};
use crate::eval;
use crate::pipeline::{self, AmplifyConfig, PipelineConfig, SliceConfig, WdSchedule};
use crate::render;

#[derive(Debug, Parser)]
#[command(name = "facts", version, about = "Discover bias-conflicting slices by amplifying and clustering correlations")]
pub struct Cli {
    /// Root random seed.
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// Output path (directory, or file for `eval` and `report`).
    #[arg(long, global = true)]
    pub out: Option<PathBuf>,
    /// JSON configuration for the subcommand.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// Worker threads; 1 guarantees bit-identical outputs.
    #[arg(long, global = true)]
    pub threads: Option<usize>,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate a synthetic dataset with planted correlations.
    Synth(SynthArgs),
    /// Train the weight-decay sweep and keep the most amplified model.
    Amplify(AmplifyArgs),
    /// Fit per-class mixtures and write the ranked slice report.
    Slice(SliceArgs),
    /// Choose slicing hyperparameters by silhouette, then slice.
    Tune(TuneArgs),
    /// Score a slice report against ground-truth annotations.
    Eval(EvalArgs),
    /// Render a Markdown summary of a slice report.
    Report(ReportArgs),
    /// Run every stage end to end.
    Pipeline,
}

#[derive(Debug, Args)]
pub struct SynthArgs {
    /// Built-in configuration: nico95 or waterbirds.
    #[arg(long)]
    pub preset: Option<String>,
    #[arg(long)]
    pub correlation: Option<f64>,
}

#[derive(Debug, Args)]
pub struct AmplifyArgs {
    #[arg(long)]
    pub manifest: PathBuf,
    /// Comma-separated weight-decay grid.
    #[arg(long, value_delimiter = ',')]
    pub lambdas: Option<Vec<f64>>,
    /// `linear` or `mlp:<hidden width>`.
    #[arg(long)]
    pub arch: Option<String>,
    #[arg(long)]
    pub epochs: Option<usize>,
    #[arg(long)]
    pub lr: Option<f64>,
    #[arg(long)]
    pub batch_size: Option<usize>,
    #[arg(long)]
    pub momentum: Option<f64>,
    /// Train once with a decaying weight decay instead of sweeping.
    #[arg(long)]
    pub wd_schedule: bool,
    #[arg(long)]
    pub wd_from: Option<f64>,
    #[arg(long)]
    pub wd_to: Option<f64>,
}

#[derive(Debug, Args)]
pub struct SliceFlags {
    #[arg(long)]
    pub manifest: PathBuf,
    /// Model directory; without it the manifest's logits block is used.
    #[arg(long)]
    pub model: Option<PathBuf>,
    #[arg(long)]
    pub fit_split: Option<String>,
    #[arg(long)]
    pub assign_split: Option<String>,
    #[arg(long)]
    pub top_k: Option<usize>,
}

#[derive(Debug, Args)]
pub struct SliceArgs {
    #[command(flatten)]
    pub common: SliceFlags,
    /// Slices per class.
    #[arg(long)]
    pub k: Option<usize>,
    #[arg(long)]
    pub alpha: Option<f64>,
    #[arg(long)]
    pub delta_p: Option<f64>,
    /// full, diagonal or tied.
    #[arg(long)]
    pub cov: Option<String>,
    /// floor or additive.
    #[arg(long)]
    pub delta_mode: Option<String>,
    #[arg(long)]
    pub max_em_steps: Option<usize>,
}

#[derive(Debug, Args)]
pub struct TuneArgs {
    #[command(flatten)]
    pub common: SliceFlags,
    /// JSON grid: a list of hyperparameter objects, or an object mapping
    /// field names to value lists (Cartesian product).
    #[arg(long)]
    pub grid: PathBuf,
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    /// Manifest with ground-truth annotations.
    #[arg(long)]
    pub gt: PathBuf,
    /// Slice report (`report.json` or its directory).
    #[arg(long)]
    pub pred: PathBuf,
    #[arg(long, default_value_t = 10)]
    pub k: usize,
}

#[derive(Debug, Args)]
pub struct ReportArgs {
    #[arg(long)]
    pub report: PathBuf,
    #[arg(long)]
    pub metrics: Option<PathBuf>,
    /// Slices shown per class.
    #[arg(long, default_value_t = facts_core::slicing::DEFAULT_REPORT_DEPTH)]
    pub depth: usize,
}

fn parse_split(s: &str) -> anyhow::Result<Split> {
    Split::parse(s).with_context(|| format!("unknown split {s:?} (expected train, val or test)"))
}

pub fn parse_arch(s: &str) -> anyhow::Result<Architecture> {
    if s == "linear" {
        return Ok(Architecture::Linear);
    }
    if let Some(w) = s.strip_prefix("mlp:") {
        let hidden = w.parse().with_context(|| format!("invalid mlp width {w:?}"))?;
        return Ok(Architecture::Mlp { hidden });
    }
    bail!("unknown architecture {s:?} (expected linear or mlp:<width>)")
}

fn config_or_default<T: serde::de::DeserializeOwned + Default>(path: Option<&Path>) -> anyhow::Result<T> {
    match path {
        Some(p) => Ok(read_json(p)?),
        None => Ok(T::default()),
    }
}

fn out_dir(cli: &Cli, default: &str) -> PathBuf {
    cli.out.clone().unwrap_or_else(|| PathBuf::from(default))
}

/// Expands a grid document into hyperparameter points over `base`.
pub fn parse_grid(doc: &Value, base: &SliceHyper) -> anyhow::Result<Vec<SliceHyper>> {
    let base_value = serde_json::to_value(base)?;
    let merge = |overrides: &serde_json::Map<String, Value>| -> anyhow::Result<SliceHyper> {
        let mut v = base_value.clone();
        let obj = v.as_object_mut().expect("struct serializes to an object");
        for (k, val) in overrides {
            if !obj.contains_key(k) {
                bail!("unknown slicing hyperparameter {k:?} in grid");
            }
            obj.insert(k.clone(), val.clone());
        }
        Ok(serde_json::from_value(v)?)
    };
    match doc {
        Value::Array(points) => points
            .iter()
            .map(|p| merge(p.as_object().context("grid points must be objects")?))
            .collect(),
        Value::Object(axes) => {
            let mut points = vec![serde_json::Map::new()];
            for (k, values) in axes {
                let values = values.as_array().with_context(|| format!("grid axis {k:?} must be a list"))?;
                points = points
                    .into_iter()
                    .flat_map(|p| {
                        values.iter().map(move |v| {
                            let mut q = p.clone();
                            q.insert(k.clone(), v.clone());
                            q
                        })
                    })
                    .collect();
            }
            points.iter().map(merge).collect()
        }
        _ => bail!("grid must be a list of points or an object of axes"),
    }
}

pub fn run(cli: Cli) -> anyhow::Result<()> {
    if let Some(n) = cli.threads {
        if n == 0 {
            bail!("--threads must be positive");
        }
        // Ignore the error when a pool already exists (e.g. repeated in-process calls).
        let _ = rayon::ThreadPoolBuilder::new().num_threads(n).build_global();
    }
    match &cli.command {
        Command::Synth(a) => synth_cmd(&cli, a),
        Command::Amplify(a) => amplify_cmd(&cli, a),
        Command::Slice(a) => slice_cmd(&cli, a),
        Command::Tune(a) => tune_cmd(&cli, a),
        Command::Eval(a) => eval_cmd(&cli, a),
        Command::Report(a) => report_cmd(&cli, a),
        Command::Pipeline => pipeline_cmd(&cli),
    }
}

fn synth_cmd(cli: &Cli, a: &SynthArgs) -> anyhow::Result<()> {
    let seed = cli.seed.unwrap_or(0);
    let mut cfg: SynthConfig = match (&cli.config, a.preset.as_deref()) {
        (Some(p), _) => read_json(p)?,
        (None, None | Some("nico95")) => SynthConfig::nico95_like(seed),
        (None, Some("waterbirds")) => SynthConfig::waterbirds_like(seed),
        (None, Some(other)) => bail!("unknown preset {other:?} (expected nico95 or waterbirds)"),
    };
    if let Some(s) = cli.seed {
        cfg.seed = s;
    }
    if let Some(c) = a.correlation {
        cfg.correlation = c;
    }
    let ds = synth::generate(&cfg)?;
    let path = dataio::save_dataset(&ds, &out_dir(cli, "data"))?;
    println!("{}", path.display());
    Ok(())
}

fn amplify_cmd(cli: &Cli, a: &AmplifyArgs) -> anyhow::Result<()> {
    let mut cfg: AmplifyConfig = config_or_default(cli.config.as_deref())?;
    let h: &mut TrainHyper = &mut cfg.hyper;
    if let Some(s) = cli.seed {
        h.seed = s;
    }
    if let Some(arch) = &a.arch {
        h.architecture = parse_arch(arch)?;
    }
    if let Some(v) = a.epochs {
        h.max_epochs = v;
    }
    if let Some(v) = a.lr {
        h.learning_rate = v;
    }
    if let Some(v) = a.batch_size {
        h.batch_size = v;
    }
    if let Some(v) = a.momentum {
        h.momentum = v;
    }
    if let Some(l) = &a.lambdas {
        cfg.lambdas = l.clone();
    }
    if a.wd_schedule || a.wd_from.is_some() || a.wd_to.is_some() {
        let d = cfg.schedule.unwrap_or_default();
        cfg.schedule = Some(WdSchedule {
            wd_from: a.wd_from.unwrap_or(d.wd_from),
            wd_to: a.wd_to.unwrap_or(d.wd_to),
        });
    }
    let ds = dataio::load_dataset(&a.manifest)?;
    let model = pipeline::amplify_dataset(&ds, &cfg)?;
    let dir = out_dir(cli, "model");
    artifacts::save_model(&dir, &model)?;
    for e in &model.sweep_log {
        match (&e.sigma_amco, &e.error) {
            (_, Some(err)) => println!("lambda {:<8} failed: {err}", e.lambda),
            (s, None) => println!(
                "lambda {:<8} epoch {:>3} train_acc {:.4} sigma {}",
                e.lambda,
                e.peak_epoch.unwrap_or(0),
                e.train_accuracy.unwrap_or(f64::NAN),
                s.map_or_else(|| "n/a".into(), |s| format!("{s:.6}"))
            ),
        }
    }
    println!("selected lambda {} -> {}", model.lambda_star, dir.display());
    Ok(())
}

fn slice_config(cli: &Cli, c: &SliceFlags) -> anyhow::Result<SliceConfig> {
    let mut cfg = SliceConfig::default();
    if let Some(s) = &c.fit_split {
        cfg.fit_split = parse_split(s)?;
    }
    if let Some(s) = &c.assign_split {
        cfg.assign_split = parse_split(s)?;
    }
    if let Some(k) = c.top_k {
        cfg.top_k = k;
    }
    if let Some(s) = cli.seed {
        cfg.hyper.seed = s;
    }
    Ok(cfg)
}

fn run_slicing(cli: &Cli, c: &SliceFlags, cfg: &SliceConfig) -> anyhow::Result<()> {
    let ds = dataio::load_dataset(&c.manifest)?;
    let model = c.model.as_deref().map(artifacts::load_model).transpose()?;
    let logits = pipeline::logits_for(&ds, model.as_ref())?;
    let outcome = pipeline::slice_dataset(&ds, &logits, cfg)?;
    let dir = out_dir(cli, "slices");
    artifacts::save_mixtures(&dir, &outcome.mixtures)?;
    let (json, csv) = artifacts::save_report(&dir, &outcome.report)?;
    if let Some(t) = &outcome.tune {
        write_json(&dir.join("tune.json"), t)?;
        println!("selected grid point {}: {}", t.chosen_index, serde_json::to_string(&t.chosen)?);
    }
    println!("{}\n{}", json.display(), csv.display());
    Ok(())
}

fn slice_cmd(cli: &Cli, a: &SliceArgs) -> anyhow::Result<()> {
    let mut cfg = slice_config(cli, &a.common)?;
    let mut h: SliceHyper = config_or_default(cli.config.as_deref())?;
    h.seed = cfg.hyper.seed;
    if let Some(v) = a.k {
        h.k_hat = v;
    }
    if let Some(v) = a.alpha {
        h.alpha = v;
    }
    if let Some(v) = a.delta_p {
        h.delta_p = v;
    }
    if let Some(v) = &a.cov {
        h.cov_p = CovarianceKind::parse(v).with_context(|| format!("unknown covariance {v:?}"))?;
    }
    if let Some(v) = &a.delta_mode {
        h.delta_mode = match v.as_str() {
            "floor" => DeltaMode::Floor,
            "additive" => DeltaMode::Additive,
            other => bail!("unknown delta mode {other:?} (expected floor or additive)"),
        };
    }
    if let Some(v) = a.max_em_steps {
        h.max_em_steps = v;
    }
    cfg.hyper = h;
    run_slicing(cli, &a.common, &cfg)
}

fn tune_cmd(cli: &Cli, a: &TuneArgs) -> anyhow::Result<()> {
    let mut cfg = slice_config(cli, &a.common)?;
    let mut base: SliceHyper = config_or_default(cli.config.as_deref())?;
    base.seed = cfg.hyper.seed;
    let doc: Value = read_json(&a.grid)?;
    cfg.tune_grid = Some(parse_grid(&doc, &base)?);
    cfg.hyper = base;
    run_slicing(cli, &a.common, &cfg)
}

fn eval_cmd(cli: &Cli, a: &EvalArgs) -> anyhow::Result<()> {
    let ds = dataio::load_dataset(&a.gt)?;
    let report = artifacts::load_report(&a.pred)?;
    let m = eval::evaluate(&ds, &report, a.k, &eval::DEFAULT_CURVE_KS)?;
    let out = out_dir(cli, "metrics.json");
    write_json(&out, &m)?;
    println!("precision_at_{} {:.4}", a.k, m.precision_at_k);
    println!("{}", out.display());
    Ok(())
}

fn report_cmd(cli: &Cli, a: &ReportArgs) -> anyhow::Result<()> {
    let report = artifacts::load_report(&a.report)?;
    let metrics: Option<eval::EvalMetrics> = a.metrics.as_deref().map(read_json).transpose()?;
    let md = render::render_markdown(&report, metrics.as_ref(), a.depth);
    match &cli.out {
        Some(p) => std::fs::write(p, md).with_context(|| format!("writing {}", p.display()))?,
        None => print!("{md}"),
    }
    Ok(())
}

fn pipeline_cmd(cli: &Cli) -> anyhow::Result<()> {
    let mut cfg: PipelineConfig = config_or_default(cli.config.as_deref())?;
    if let Some(s) = cli.seed {
        cfg.seed = s;
    }
    if let Some(o) = &cli.out {
        cfg.output_dir = o.clone();
    }
    let outcome = pipeline::run_pipeline(&cfg)?;
    if let Some(m) = &outcome.metrics {
        println!("precision_at_{} {:.4}", m.k, m.precision_at_k);
        if let Some(a) = &m.amplification {
            println!("lambda_star {} gt_acc_gap {:.4}", a.lambda_star, a.gt_acc_gap);
        }
    }
    println!("{}", cfg.output_dir.display());
    Ok(())
}
