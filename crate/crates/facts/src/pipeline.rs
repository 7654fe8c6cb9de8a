//! Stage wiring shared by the subcommands and the end-to-end pipeline:
//! synthesize or load → amplify → slice (optionally tuned) → evaluate →
//! report.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::time::Instant;

use facts_core::amplify::{
    self, AmplifiedModel, SweepEntry, TrainHyper, DEFAULT_LAMBDA_GRID, DEFAULT_WD_FROM, DEFAULT_WD_TO,
};
use facts_core::dataset::{Dataset, Split};
use facts_core::linalg::{argmax, Matrix};
use facts_core::seed;
use facts_core::slicing::{
    self, assign_all, rank_and_report, ClassView, SliceAssignment, SliceHyper, SliceMixture, SliceReport, TuneOutcome,
    DEFAULT_REPORT_DEPTH, DEFAULT_TOP_K,
};
use facts_core::synth::{self, SynthConfig};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::artifacts;
use crate::dataio::{self, create_dir, write_json};
use crate::error::{Error, Result};
use crate::eval::{self, AmplificationMetrics, EvalMetrics, DEFAULT_CURVE_KS};
use crate::render;

/// Learning rate used by the pipeline unless configured otherwise; suited
/// to standardized features of the synthetic family.
pub const PIPELINE_LEARNING_RATE: f64 = 0.05;
pub const PIPELINE_EPOCHS: usize = 30;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum InputConfig {
    Synth(SynthConfig),
    Manifest(PathBuf),
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct WdSchedule {
    pub wd_from: f64,
    pub wd_to: f64,
}

impl Default for WdSchedule {
    fn default() -> Self {
        Self {
            wd_from: DEFAULT_WD_FROM,
            wd_to: DEFAULT_WD_TO,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct AmplifyConfig {
    pub hyper: TrainHyper,
    pub lambdas: Vec<f64>,
    /// Replaces the sweep by one run with a decaying weight decay.
    pub schedule: Option<WdSchedule>,
}

impl Default for AmplifyConfig {
    fn default() -> Self {
        Self {
            hyper: TrainHyper {
                learning_rate: PIPELINE_LEARNING_RATE,
                max_epochs: PIPELINE_EPOCHS,
                ..TrainHyper::default()
            },
            lambdas: DEFAULT_LAMBDA_GRID.to_vec(),
            schedule: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SliceConfig {
    pub hyper: SliceHyper,
    /// When set, the slice hyperparameters are chosen from this grid by
    /// silhouette on the fit split.
    pub tune_grid: Option<Vec<SliceHyper>>,
    pub fit_split: Split,
    pub assign_split: Split,
    pub top_k: usize,
}

impl Default for SliceConfig {
    fn default() -> Self {
        Self {
            hyper: SliceHyper::default(),
            tune_grid: None,
            fit_split: Split::Val,
            assign_split: Split::Test,
            top_k: DEFAULT_TOP_K,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct EvalConfig {
    pub k: usize,
    pub curve_ks: Vec<usize>,
    pub report_depth: usize,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self {
            k: 10,
            curve_ks: DEFAULT_CURVE_KS.to_vec(),
            report_depth: DEFAULT_REPORT_DEPTH,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PipelineConfig {
    /// Root seed; every stage seed is derived from it.
    pub seed: u64,
    pub input: InputConfig,
    /// `None` uses the manifest's logits block instead of training.
    pub amplify: Option<AmplifyConfig>,
    pub slice: SliceConfig,
    pub eval: EvalConfig,
    pub output_dir: PathBuf,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            input: InputConfig::Synth(SynthConfig::nico95_like(0)),
            amplify: Some(AmplifyConfig::default()),
            slice: SliceConfig::default(),
            eval: EvalConfig::default(),
            output_dir: PathBuf::from("facts_out"),
        }
    }
}

impl PipelineConfig {
    /// Copy with every stage seed derived from the root seed.
    pub fn resolved(&self) -> Self {
        let mut c = self.clone();
        if let InputConfig::Synth(s) = &mut c.input {
            s.seed = seed::derive(self.seed, "synth");
        }
        if let Some(a) = &mut c.amplify {
            a.hyper.seed = seed::derive(self.seed, "amplify");
        }
        let slice_seed = seed::derive(self.seed, "slice");
        c.slice.hyper.seed = slice_seed;
        if let Some(grid) = &mut c.slice.tune_grid {
            grid.iter_mut().for_each(|h| h.seed = slice_seed);
        }
        c
    }
}

/// Trains the λ sweep (in parallel over λ) or the weight-decay schedule on
/// the train split.
pub fn amplify_dataset(dataset: &Dataset, cfg: &AmplifyConfig) -> Result<AmplifiedModel> {
    let train = dataset.labeled(Split::Train)?;
    if let Some(s) = cfg.schedule {
        let snapshot = amplify::train_wd_schedule(&train, &cfg.hyper, s.wd_from, s.wd_to)?;
        return Ok(AmplifiedModel {
            lambda_star: snapshot.lambda,
            sweep_log: vec![SweepEntry {
                lambda: snapshot.lambda,
                peak_epoch: Some(snapshot.epoch),
                train_accuracy: Some(snapshot.train_accuracy),
                sigma_amco: snapshot.sigma_amco,
                error: None,
            }],
            snapshot,
        });
    }
    let runs: Vec<_> = cfg
        .lambdas
        .par_iter()
        .map(|&l| (l, amplify::sweep_point(&train, &cfg.hyper, l)))
        .collect();
    for (l, r) in &runs {
        match r {
            Ok(s) => log::info!("lambda {l}: epoch {} train acc {:.4} sigma {:?}", s.epoch, s.train_accuracy, s.sigma_amco),
            Err(e) => log::warn!("lambda {l} failed: {e}"),
        }
    }
    Ok(amplify::select_by_sigma(runs)?)
}

/// Logits for every sample in dataset order.
pub fn logits_for(dataset: &Dataset, model: Option<&AmplifiedModel>) -> Result<Matrix> {
    let n = dataset.samples.len();
    match model {
        Some(m) => {
            let snap = &m.snapshot;
            if dataset.feature_dim() != snap.input_dim() {
                return Err(facts_core::Error::DimensionMismatch {
                    what: "model input",
                    expected: snap.input_dim(),
                    got: dataset.feature_dim(),
                }
                .into());
            }
            let rows: Vec<Vec<f64>> = dataset
                .samples
                .par_iter()
                .map(|s| snap.logits(&s.features.iter().map(|&v| f64::from(v)).collect::<Vec<_>>()))
                .collect();
            Ok(Matrix::from_vec(n, snap.num_classes(), rows.concat()))
        }
        None => {
            let dim = dataset.logit_dim().ok_or_else(|| Error::MissingBlock(dataio::LOGITS.into()))?;
            let mut data = Vec::with_capacity(n * dim);
            for s in &dataset.samples {
                data.extend(s.logits.as_ref().expect("validated").iter().map(|&v| f64::from(v)));
            }
            Ok(Matrix::from_vec(n, dim, data))
        }
    }
}

/// Per-class views of one split, pairing `logits` rows (dataset order)
/// with the embedding block.
pub fn class_views(dataset: &Dataset, split: Split, logits: &Matrix) -> Result<Vec<ClassView>> {
    if dataset.embed_dim() == 0 {
        return Err(Error::MissingBlock(dataio::EMBEDDING.into()));
    }
    let idx = dataset.split_indices(split);
    if idx.is_empty() {
        return Err(Error::Invalid(format!("split {split} is empty")));
    }
    let ids: Vec<String> = idx.iter().map(|&i| dataset.samples[i].id.clone()).collect();
    let labels: Vec<usize> = idx.iter().map(|&i| dataset.samples[i].label).collect();
    let emb_rows: Vec<Vec<f64>> = idx
        .iter()
        .map(|&i| dataset.samples[i].embedding.iter().map(|&v| f64::from(v)).collect())
        .collect();
    let embeddings = Matrix::from_rows(&emb_rows);
    Ok(ClassView::partition(&ids, &labels, &logits.select_rows(&idx), &embeddings, dataset.num_classes))
}

/// Whether the logits' argmax matches the label, for every sample.
pub fn correctness(dataset: &Dataset, logits: &Matrix) -> BTreeMap<String, bool> {
    dataset
        .samples
        .iter()
        .enumerate()
        .map(|(i, s)| (s.id.clone(), argmax(logits.row(i)) == s.label))
        .collect()
}

/// Fits one mixture per class view, in parallel over classes.
pub fn fit_classes(views: &[ClassView], hyper: &SliceHyper) -> Result<Vec<SliceMixture>> {
    let fits: Vec<_> = views.par_iter().map(|v| slicing::fit_mixture(v, hyper)).collect();
    Ok(fits.into_iter().collect::<std::result::Result<Vec<_>, _>>()?)
}

/// Silhouette selection over `grid`, fitting grid points in parallel.
pub fn tune_slices(views: &[ClassView], grid: &[SliceHyper]) -> Result<TuneOutcome> {
    if grid.is_empty() {
        return Err(facts_core::Error::Empty("tuning grid").into());
    }
    let results: Vec<_> = grid
        .par_iter()
        .map(|h| {
            let mixtures = fit_classes(views, h).map_err(|e| match e {
                Error::Core(c) => c,
                other => facts_core::Error::InvalidConfig(other.to_string()),
            })?;
            let assignments = assign_all(&mixtures, views)?;
            slicing::silhouette_score(views, &assignments)
        })
        .collect();
    Ok(slicing::select_by_silhouette(grid, results)?)
}

#[derive(Debug, Clone)]
pub struct SliceOutcome {
    pub hyper: SliceHyper,
    pub tune: Option<TuneOutcome>,
    pub mixtures: Vec<SliceMixture>,
    pub assignments: Vec<SliceAssignment>,
    pub report: SliceReport,
}

/// Fits mixtures on the fit split, assigns the assignment split and ranks
/// the resulting slices by the model's accuracy on them.
pub fn slice_dataset(dataset: &Dataset, logits: &Matrix, cfg: &SliceConfig) -> Result<SliceOutcome> {
    let fit_views = class_views(dataset, cfg.fit_split, logits)?;
    let tune = match &cfg.tune_grid {
        Some(grid) => {
            let t = tune_slices(&fit_views, grid)?;
            for w in &t.warnings {
                log::warn!("{w}");
            }
            Some(t)
        }
        None => None,
    };
    let hyper = tune.as_ref().map_or_else(|| cfg.hyper.clone(), |t| t.chosen.clone());
    let mixtures = fit_classes(&fit_views, &hyper)?;
    let assign_views = if cfg.assign_split == cfg.fit_split {
        fit_views
    } else {
        class_views(dataset, cfg.assign_split, logits)?
    };
    let assignments = assign_all(&mixtures, &assign_views)?;
    let report = rank_and_report(&assignments, &correctness(dataset, logits), cfg.top_k)?;
    Ok(SliceOutcome {
        hyper,
        tune,
        mixtures,
        assignments,
        report,
    })
}

/// Ranking quality and accuracy gap of an amplified model.
pub fn amplification_metrics(dataset: &Dataset, model: &AmplifiedModel, cfg: &SliceConfig) -> Result<AmplificationMetrics> {
    let fit = dataset.labeled(cfg.fit_split)?;
    let assign = dataset.labeled(cfg.assign_split)?;
    Ok(AmplificationMetrics {
        lambda_star: model.lambda_star,
        ranking_avg_ap: amplify::ranking_avg_ap(&model.snapshot, &fit)?,
        gt_acc_gap: amplify::gt_acc_gap(&model.snapshot, &assign)?,
    })
}

#[derive(Debug, Clone, Serialize)]
pub struct Versions {
    pub facts: &'static str,
    pub format: u32,
}

#[derive(Debug, Clone, Serialize)]
pub struct RunRecord {
    pub config: PipelineConfig,
    pub versions: Versions,
    pub threads: usize,
    pub timings_ms: BTreeMap<String, u128>,
    pub slice_hyper: SliceHyper,
}

#[derive(Debug, Clone)]
pub struct PipelineOutcome {
    pub config: PipelineConfig,
    pub dataset: Dataset,
    pub model: Option<AmplifiedModel>,
    pub slices: SliceOutcome,
    pub metrics: Option<EvalMetrics>,
    pub timings_ms: BTreeMap<String, u128>,
}

pub fn load_input(input: &InputConfig) -> Result<Dataset> {
    match input {
        InputConfig::Synth(cfg) => Ok(synth::generate(cfg)?),
        InputConfig::Manifest(path) => dataio::load_dataset(path),
    }
}

/// Runs every stage and writes `data/`, `model/`, `slices/`,
/// `metrics.json`, `report.md` and `run.json` under the output directory.
pub fn run_pipeline(config: &PipelineConfig) -> Result<PipelineOutcome> {
    let config = config.resolved();
    let out = config.output_dir.clone();
    create_dir(&out)?;
    let mut timings = BTreeMap::new();
    let mut clock = Instant::now();
    let mut lap = |name: &str, timings: &mut BTreeMap<String, u128>| {
        timings.insert(name.to_string(), clock.elapsed().as_millis());
        clock = Instant::now();
    };

    let dataset = load_input(&config.input)?;
    if matches!(config.input, InputConfig::Synth(_)) {
        dataio::save_dataset(&dataset, &out.join("data"))?;
    }
    lap("input", &mut timings);

    let model = match &config.amplify {
        Some(a) => {
            let m = amplify_dataset(&dataset, a)?;
            artifacts::save_model(&out.join("model"), &m)?;
            log::info!("selected lambda {}", m.lambda_star);
            Some(m)
        }
        None => None,
    };
    lap("amplify", &mut timings);

    let logits = logits_for(&dataset, model.as_ref())?;
    let slices = slice_dataset(&dataset, &logits, &config.slice)?;
    let slice_dir = out.join("slices");
    artifacts::save_mixtures(&slice_dir, &slices.mixtures)?;
    artifacts::save_report(&slice_dir, &slices.report)?;
    if let Some(t) = &slices.tune {
        write_json(&slice_dir.join("tune.json"), t)?;
    }
    lap("slice", &mut timings);

    let metrics = if dataset.has_attributes() && dataset.mapping.is_some() {
        let mut m = eval::evaluate(&dataset, &slices.report, config.eval.k, &config.eval.curve_ks)?;
        if let Some(model) = &model {
            m.amplification = Some(amplification_metrics(&dataset, model, &config.slice)?);
        }
        write_json(&out.join("metrics.json"), &m)?;
        Some(m)
    } else {
        log::warn!("dataset has no attribute annotations; skipping evaluation");
        None
    };
    lap("eval", &mut timings);

    let md = render::render_markdown(&slices.report, metrics.as_ref(), config.eval.report_depth);
    std::fs::write(out.join("report.md"), md).map_err(Error::io(out.join("report.md")))?;
    write_run_record(&out, &config, &timings, &slices.hyper)?;

    Ok(PipelineOutcome {
        config,
        dataset,
        model,
        slices,
        metrics,
        timings_ms: timings,
    })
}

fn write_run_record(out: &Path, config: &PipelineConfig, timings: &BTreeMap<String, u128>, hyper: &SliceHyper) -> Result<()> {
    let record = RunRecord {
        config: config.clone(),
        versions: Versions {
            facts: env!("CARGO_PKG_VERSION"),
            format: dataio::MANIFEST_VERSION,
        },
        threads: rayon::current_num_threads(),
        timings_ms: timings.clone(),
        slice_hyper: hyper.clone(),
    };
    write_json(&out.join("run.json"), &record)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small_config(dir: &Path) -> PipelineConfig {
        PipelineConfig {
            seed: 4,
            input: InputConfig::Synth(SynthConfig {
                num_classes: 2,
                num_attributes: 2,
                class_sizes: vec![150, 150],
                correlation: 0.9,
                feature_dim: 6,
                embed_dim: 4,
                test_per_cell: 15,
                ..SynthConfig::nico95_like(0)
            }),
            amplify: Some(AmplifyConfig {
                lambdas: vec![0.01, 0.1],
                hyper: TrainHyper {
                    learning_rate: PIPELINE_LEARNING_RATE,
                    max_epochs: 5,
                    ..TrainHyper::default()
                },
                schedule: None,
            }),
            slice: SliceConfig {
                hyper: SliceHyper {
                    k_hat: 4,
                    ..SliceHyper::default()
                },
                ..SliceConfig::default()
            },
            eval: EvalConfig::default(),
            output_dir: dir.to_path_buf(),
        }
    }

    #[test]
    fn resolved_derives_distinct_stage_seeds() {
        let mut cfg = small_config(Path::new("unused"));
        cfg.slice.tune_grid = Some(vec![SliceHyper::default(); 2]);
        let r = cfg.resolved();
        let InputConfig::Synth(s) = &r.input else { unreachable!() };
        let a = r.amplify.as_ref().unwrap().hyper.seed;
        assert_ne!(s.seed, a);
        assert_ne!(a, r.slice.hyper.seed);
        assert!(r.slice.tune_grid.as_ref().unwrap().iter().all(|h| h.seed == r.slice.hyper.seed));
        assert_eq!(cfg.resolved(), r.clone().resolved());
    }

    #[test]
    fn pipeline_writes_every_artifact() {
        let dir = tempfile::tempdir().unwrap();
        let out = run_pipeline(&small_config(dir.path())).unwrap();
        for f in ["data/manifest.json", "model/model.json", "slices/report.csv", "slices/mixtures.json", "metrics.json", "report.md", "run.json"] {
            assert!(dir.path().join(f).exists(), "missing {f}");
        }
        let m = out.metrics.unwrap();
        assert!(m.amplification.is_some());
        assert_eq!(out.slices.mixtures.len(), 2);
        // Every assigned sample belongs to the test split.
        let test: std::collections::BTreeSet<&str> = out
            .dataset
            .samples
            .iter()
            .filter(|s| s.split == Split::Test)
            .map(|s| s.id.as_str())
            .collect();
        assert!(out.slices.report.slices.iter().flat_map(|s| &s.members).all(|id| test.contains(id.as_str())));
    }

    #[test]
    fn missing_logits_without_training_is_named() {
        let dir = tempfile::tempdir().unwrap();
        let mut cfg = small_config(&dir.path().join("out"));
        let InputConfig::Synth(s) = &cfg.input else { unreachable!() };
        let manifest = dataio::save_dataset(&synth::generate(s).unwrap(), &dir.path().join("data")).unwrap();
        cfg.input = InputConfig::Manifest(manifest);
        cfg.amplify = None;
        assert!(matches!(run_pipeline(&cfg), Err(Error::MissingBlock(b)) if b == dataio::LOGITS));
    }

    #[test]
    fn correctness_uses_argmax() {
        let cfg = small_config(Path::new("unused"));
        let InputConfig::Synth(s) = &cfg.input else { unreachable!() };
        let ds = synth::generate(s).unwrap();
        let n = ds.samples.len();
        // Constant logits favouring class 1.
        let logits = Matrix::from_vec(n, 2, [0.0, 1.0].repeat(n));
        let c = correctness(&ds, &logits);
        assert!(ds.samples.iter().all(|x| c[&x.id] == (x.label == 1)));
    }
}
