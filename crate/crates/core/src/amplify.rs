//! Correlation amplification: heavily weight-decayed classifiers trained with
//! class-balanced sampling, checkpointed at peak train accuracy, with the
//! decay strength picked by the per-class variance of the true-class
//! likelihood.

use alloc::collections::BTreeSet;
use alloc::format;
use alloc::string::{String, ToString};
use alloc::vec;
use alloc::vec::Vec;
use serde::{Deserialize, Serialize};

use crate::dataset::LabeledSplit;
use crate::error::{Error, Result};
use crate::linalg::{argmax, dot, log_sum_exp, softmax_in_place, Matrix};
use crate::metrics;
use crate::rng::Rng;

/// Weight-decay grid swept when none is given.
pub const DEFAULT_LAMBDA_GRID: [f64; 5] = [1e-3, 1e-2, 1e-1, 1.0, 2.0];

/// Endpoints of the decaying weight-decay schedule.
pub const DEFAULT_WD_FROM: f64 = 2.0;
pub const DEFAULT_WD_TO: f64 = 1e-3;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Architecture {
    Linear,
    Mlp { hidden: usize },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainHyper {
    pub lambda: f64,
    pub learning_rate: f64,
    pub momentum: f64,
    pub batch_size: usize,
    pub max_epochs: usize,
    pub architecture: Architecture,
    pub seed: u64,
}

impl Default for TrainHyper {
    fn default() -> Self {
        Self {
            lambda: 0.0,
            learning_rate: 1e-5,
            momentum: 0.9,
            batch_size: 64,
            max_epochs: 50,
            architecture: Architecture::Linear,
            seed: 0,
        }
    }
}

impl TrainHyper {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::InvalidConfig(m));
        if !(self.lambda >= 0.0) || !self.lambda.is_finite() {
            return bad(format!("lambda must be a nonnegative number, got {}", self.lambda));
        }
        if !(self.learning_rate > 0.0) {
            return bad(format!("learning_rate must be positive, got {}", self.learning_rate));
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return bad(format!("momentum must lie in [0, 1), got {}", self.momentum));
        }
        if self.batch_size == 0 || self.max_epochs == 0 {
            return bad("batch_size and max_epochs must be positive".into());
        }
        if let Architecture::Mlp { hidden: 0 } = self.architecture {
            return bad("mlp hidden width must be positive".into());
        }
        Ok(())
    }
}

/// Fully connected layer, `weight` is `outputs x inputs` row-major.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DenseLayer {
    pub inputs: usize,
    pub outputs: usize,
    pub weight: Vec<f32>,
    pub bias: Vec<f32>,
}

/// Classifier weights at one checkpoint. Weights are stored in single
/// precision so the on-disk form is exact.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelSnapshot {
    pub architecture: Architecture,
    pub layers: Vec<DenseLayer>,
    pub lambda: f64,
    pub epoch: usize,
    pub train_accuracy: f64,
    pub sigma_amco: Option<f64>,
    pub seed: u64,
}

impl ModelSnapshot {
    pub fn input_dim(&self) -> usize {
        self.layers.first().map_or(0, |l| l.inputs)
    }

    pub fn num_classes(&self) -> usize {
        self.layers.last().map_or(0, |l| l.outputs)
    }

    pub fn logits(&self, x: &[f64]) -> Vec<f64> {
        let mut h: Vec<f64> = x.to_vec();
        let last = self.layers.len().saturating_sub(1);
        for (li, layer) in self.layers.iter().enumerate() {
            let mut out = vec![0.0; layer.outputs];
            for (o, v) in out.iter_mut().enumerate() {
                let row = &layer.weight[o * layer.inputs..(o + 1) * layer.inputs];
                *v = f64::from(layer.bias[o])
                    + row.iter().zip(&h).map(|(&w, &xi)| f64::from(w) * xi).sum::<f64>();
                if li < last && *v < 0.0 {
                    *v = 0.0;
                }
            }
            h = out;
        }
        h
    }

    pub fn logits_matrix(&self, x: &Matrix) -> Matrix {
        let k = self.num_classes();
        let mut out = Matrix::zeros(x.rows(), k);
        for i in 0..x.rows() {
            out.row_mut(i).copy_from_slice(&self.logits(x.row(i)));
        }
        out
    }

    pub fn predict(&self, x: &[f64]) -> usize {
        argmax(&self.logits(x))
    }

    pub fn accuracy(&self, data: &LabeledSplit) -> f64 {
        if data.is_empty() {
            return 0.0;
        }
        let correct = (0..data.len())
            .filter(|&i| self.predict(data.x.row(i)) == data.y[i])
            .count();
        correct as f64 / data.len() as f64
    }

    /// Euclidean norm over every weight-decayed parameter.
    pub fn decayed_norm(&self) -> f64 {
        let last = self.layers.len().saturating_sub(1);
        let mut s = 0.0;
        for (li, l) in self.layers.iter().enumerate() {
            s += l.weight.iter().map(|&w| f64::from(w) * f64::from(w)).sum::<f64>();
            if li < last {
                s += l.bias.iter().map(|&b| f64::from(b) * f64::from(b)).sum::<f64>();
            }
        }
        libm::sqrt(s)
    }
}

/// `softmax(h(x))[y]`.
pub fn likelihood(snapshot: &ModelSnapshot, x: &[f64], y: usize) -> Result<f64> {
    if y >= snapshot.num_classes() {
        return Err(Error::InvalidConfig(format!(
            "label {y} outside {} classes",
            snapshot.num_classes()
        )));
    }
    if x.len() != snapshot.input_dim() {
        return Err(Error::DimensionMismatch {
            what: "model input",
            expected: snapshot.input_dim(),
            got: x.len(),
        });
    }
    let logits = snapshot.logits(x);
    likelihood_from_logits(&logits, y)
}

pub fn likelihood_from_logits(logits: &[f64], y: usize) -> Result<f64> {
    if !logits.iter().all(|v| v.is_finite()) {
        return Err(Error::NonFiniteLogits);
    }
    let lse = log_sum_exp(logits);
    Ok(libm::exp(logits[y] - lse))
}

fn true_class_likelihoods(snapshot: &ModelSnapshot, data: &LabeledSplit) -> Result<Vec<f64>> {
    (0..data.len())
        .map(|i| likelihood(snapshot, data.x.row(i), data.y[i]))
        .collect()
}

/// Mean over classes of the population variance of the true-class
/// likelihood within each class.
pub fn sigma_amco(snapshot: &ModelSnapshot, data: &LabeledSplit) -> Result<f64> {
    let lik = true_class_likelihoods(snapshot, data)?;
    sigma_from_likelihoods(&lik, &data.y, data.num_classes)
}

pub fn sigma_from_likelihoods(lik: &[f64], labels: &[usize], num_classes: usize) -> Result<f64> {
    let mut total = 0.0;
    for c in 0..num_classes {
        let vals: Vec<f64> = lik
            .iter()
            .zip(labels)
            .filter(|(_, &y)| y == c)
            .map(|(&l, _)| l)
            .collect();
        if vals.is_empty() {
            return Err(Error::EmptyClass(c));
        }
        let n = vals.len() as f64;
        let mean = vals.iter().sum::<f64>() / n;
        total += vals.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
    }
    Ok(total / num_classes as f64)
}

/// Draws sample indices so that every present class is equally likely,
/// then a member uniformly within the class (with replacement).
#[derive(Debug, Clone)]
pub struct BalancedSampler {
    by_class: Vec<Vec<usize>>,
}

impl BalancedSampler {
    pub fn new(labels: &[usize], num_classes: usize) -> Self {
        let mut by_class = vec![Vec::new(); num_classes];
        for (i, &y) in labels.iter().enumerate() {
            by_class[y].push(i);
        }
        by_class.retain(|m| !m.is_empty());
        Self { by_class }
    }

    pub fn present_classes(&self) -> usize {
        self.by_class.len()
    }

    pub fn draw(&self, rng: &mut Rng) -> usize {
        let members = &self.by_class[rng.below(self.by_class.len())];
        members[rng.below(members.len())]
    }

    pub fn batch(&self, rng: &mut Rng, size: usize) -> Vec<usize> {
        (0..size).map(|_| self.draw(rng)).collect()
    }
}

#[derive(Debug, Clone, PartialEq)]
struct Layer64 {
    inputs: usize,
    outputs: usize,
    w: Vec<f64>,
    b: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq)]
struct Params {
    layers: Vec<Layer64>,
}

impl Params {
    fn init(arch: Architecture, inputs: usize, classes: usize, rng: &mut Rng) -> Self {
        let zero = |i: usize, o: usize| Layer64 {
            inputs: i,
            outputs: o,
            w: vec![0.0; i * o],
            b: vec![0.0; o],
        };
        let layers = match arch {
            Architecture::Linear => vec![zero(inputs, classes)],
            Architecture::Mlp { hidden } => {
                let mut l1 = zero(inputs, hidden);
                let s1 = libm::sqrt(2.0 / inputs.max(1) as f64);
                l1.w.iter_mut().for_each(|w| *w = s1 * rng.normal());
                let mut l2 = zero(hidden, classes);
                let s2 = libm::sqrt(1.0 / hidden as f64);
                l2.w.iter_mut().for_each(|w| *w = s2 * rng.normal());
                vec![l1, l2]
            }
        };
        Self { layers }
    }

    fn zeros_like(&self) -> Self {
        Self {
            layers: self
                .layers
                .iter()
                .map(|l| Layer64 {
                    inputs: l.inputs,
                    outputs: l.outputs,
                    w: vec![0.0; l.w.len()],
                    b: vec![0.0; l.b.len()],
                })
                .collect(),
        }
    }

    /// Forward pass keeping every layer's activation (input first).
    fn forward(&self, x: &[f64]) -> Vec<Vec<f64>> {
        let mut acts = vec![x.to_vec()];
        let last = self.layers.len() - 1;
        for (li, l) in self.layers.iter().enumerate() {
            let h = acts.last().unwrap();
            let out: Vec<f64> = (0..l.outputs)
                .map(|o| {
                    let v = l.b[o] + dot(&l.w[o * l.inputs..(o + 1) * l.inputs], h);
                    if li < last && v < 0.0 {
                        0.0
                    } else {
                        v
                    }
                })
                .collect();
            acts.push(out);
        }
        acts
    }

    fn decay_norm_sq(&self) -> f64 {
        let last = self.layers.len() - 1;
        self.layers
            .iter()
            .enumerate()
            .map(|(li, l)| {
                l.w.iter().map(|w| w * w).sum::<f64>()
                    + if li < last { l.b.iter().map(|b| b * b).sum::<f64>() } else { 0.0 }
            })
            .sum()
    }

    fn snapshot(&self, arch: Architecture, lambda: f64, epoch: usize, seed: u64) -> ModelSnapshot {
        ModelSnapshot {
            architecture: arch,
            layers: self
                .layers
                .iter()
                .map(|l| DenseLayer {
                    inputs: l.inputs,
                    outputs: l.outputs,
                    weight: l.w.iter().map(|&v| v as f32).collect(),
                    bias: l.b.iter().map(|&v| v as f32).collect(),
                })
                .collect(),
            lambda,
            epoch,
            train_accuracy: 0.0,
            sigma_amco: None,
            seed,
        }
    }

    fn is_finite(&self) -> bool {
        self.layers
            .iter()
            .all(|l| l.w.iter().chain(&l.b).all(|v| v.is_finite()))
    }
}

/// Accumulates the mean cross-entropy gradient over `batch` into `grad`
/// and returns the mean cross-entropy.
fn accumulate_gradient(params: &Params, grad: &mut Params, data: &LabeledSplit, batch: &[usize]) -> f64 {
    let last = params.layers.len() - 1;
    let scale = 1.0 / batch.len() as f64;
    let mut loss = 0.0;
    for &i in batch {
        let acts = params.forward(data.x.row(i));
        let logits = &acts[last + 1];
        let y = data.y[i];
        loss += log_sum_exp(logits) - logits[y];
        let mut delta = logits.clone();
        softmax_in_place(&mut delta);
        delta[y] -= 1.0;
        for li in (0..=last).rev() {
            let l = &params.layers[li];
            let input = &acts[li];
            let g = &mut grad.layers[li];
            for o in 0..l.outputs {
                let d = delta[o] * scale;
                if d == 0.0 {
                    continue;
                }
                g.b[o] += d;
                let row = &mut g.w[o * l.inputs..(o + 1) * l.inputs];
                for (gw, &xi) in row.iter_mut().zip(input) {
                    *gw += d * xi;
                }
            }
            if li > 0 {
                let mut prev = vec![0.0; l.inputs];
                for o in 0..l.outputs {
                    let row = &l.w[o * l.inputs..(o + 1) * l.inputs];
                    for (p, &w) in prev.iter_mut().zip(row) {
                        *p += delta[o] * w;
                    }
                }
                // ReLU derivative on the hidden activation.
                for (p, &a) in prev.iter_mut().zip(input) {
                    if a <= 0.0 {
                        *p = 0.0;
                    }
                }
                delta = prev;
            }
        }
    }
    loss * scale
}

/// What a training run keeps as its result.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Checkpoint {
    /// First epoch attaining the highest full-train accuracy.
    PeakAccuracy,
    /// First epoch attaining the highest σ on the train split.
    MaxSigma,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub lambda: f64,
    pub mean_loss: f64,
    pub train_accuracy: f64,
    pub sigma_amco: Option<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainRun {
    pub snapshot: ModelSnapshot,
    pub history: Vec<EpochRecord>,
}

/// SGD with momentum on cross-entropy + `λ_e ‖W‖²` where `λ_e` is
/// `lambda_at(epoch)`.
pub fn train_with_schedule(
    data: &LabeledSplit,
    hyper: &TrainHyper,
    lambda_at: impl Fn(usize) -> f64,
    checkpoint: Checkpoint,
) -> Result<TrainRun> {
    hyper.validate()?;
    if data.is_empty() {
        return Err(Error::Empty("train split"));
    }
    let classes = data.distinct_classes();
    if classes < 2 {
        return Err(Error::SingleClass(classes));
    }
    let mut rng = Rng::new(hyper.seed);
    let mut params = Params::init(hyper.architecture, data.x.cols(), data.num_classes, &mut rng);
    let mut velocity = params.zeros_like();
    let sampler = BalancedSampler::new(&data.y, data.num_classes);
    let batches = data.len().div_ceil(hyper.batch_size);
    let last = params.layers.len() - 1;

    let mut best: Option<(f64, ModelSnapshot)> = None;
    let mut history = Vec::with_capacity(hyper.max_epochs);
    for epoch in 0..hyper.max_epochs {
        let lambda = lambda_at(epoch);
        let mut loss_sum = 0.0;
        for _ in 0..batches {
            let batch = sampler.batch(&mut rng, hyper.batch_size);
            let mut grad = params.zeros_like();
            let ce = accumulate_gradient(&params, &mut grad, data, &batch);
            let loss = ce + lambda * params.decay_norm_sq();
            if !loss.is_finite() {
                return Err(Error::Diverged { epoch });
            }
            loss_sum += loss;
            for (li, (p, (g, v))) in params
                .layers
                .iter_mut()
                .zip(grad.layers.iter().zip(velocity.layers.iter_mut()))
                .enumerate()
            {
                for ((w, &gw), vw) in p.w.iter_mut().zip(&g.w).zip(v.w.iter_mut()) {
                    *vw = hyper.momentum * *vw + gw + 2.0 * lambda * *w;
                    *w -= hyper.learning_rate * *vw;
                }
                let decay_bias = li < last;
                for ((b, &gb), vb) in p.b.iter_mut().zip(&g.b).zip(v.b.iter_mut()) {
                    let reg = if decay_bias { 2.0 * lambda * *b } else { 0.0 };
                    *vb = hyper.momentum * *vb + gb + reg;
                    *b -= hyper.learning_rate * *vb;
                }
            }
        }
        if !params.is_finite() {
            return Err(Error::Diverged { epoch });
        }
        let mut snap = params.snapshot(hyper.architecture, lambda, epoch, hyper.seed);
        snap.train_accuracy = snap.accuracy(data);
        let sigma = sigma_amco(&snap, data).ok();
        snap.sigma_amco = sigma;
        history.push(EpochRecord {
            epoch,
            lambda,
            mean_loss: loss_sum / batches as f64,
            train_accuracy: snap.train_accuracy,
            sigma_amco: sigma,
        });
        let score = match checkpoint {
            Checkpoint::PeakAccuracy => snap.train_accuracy,
            Checkpoint::MaxSigma => match sigma {
                Some(s) => s,
                None => return Err(Error::EmptyClass(first_empty_class(data))),
            },
        };
        if best.as_ref().is_none_or(|(b, _)| score > *b) {
            best = Some((score, snap));
        }
    }
    let (_, snapshot) = best.expect("max_epochs >= 1");
    Ok(TrainRun { snapshot, history })
}

fn first_empty_class(data: &LabeledSplit) -> usize {
    (0..data.num_classes)
        .find(|&c| !data.y.contains(&c))
        .unwrap_or(0)
}

/// Trains at a fixed `hyper.lambda` and returns the peak-train-accuracy
/// checkpoint (earliest on ties), with its σ filled in.
pub fn train_regularized(data: &LabeledSplit, hyper: &TrainHyper) -> Result<ModelSnapshot> {
    train_regularized_traced(data, hyper).map(|r| r.snapshot)
}

pub fn train_regularized_traced(data: &LabeledSplit, hyper: &TrainHyper) -> Result<TrainRun> {
    let lambda = hyper.lambda;
    train_with_schedule(data, hyper, |_| lambda, Checkpoint::PeakAccuracy)
}

/// Per-epoch weight decay decaying exponentially from `from` to `to`.
pub fn wd_schedule(from: f64, to: f64, epochs: usize) -> Vec<f64> {
    if epochs <= 1 {
        return vec![from; epochs];
    }
    let ratio = to / from;
    (0..epochs)
        .map(|e| {
            if e == epochs - 1 {
                to
            } else {
                from * libm::pow(ratio, e as f64 / (epochs - 1) as f64)
            }
        })
        .collect()
}

/// Single run with a decaying weight decay, keeping the epoch with the
/// highest σ.
pub fn train_wd_schedule(data: &LabeledSplit, hyper: &TrainHyper, wd_from: f64, wd_to: f64) -> Result<ModelSnapshot> {
    if !(wd_to > 0.0 && wd_from > wd_to) {
        return Err(Error::InvalidConfig(format!(
            "weight-decay schedule needs wd_from > wd_to > 0, got {wd_from} -> {wd_to}"
        )));
    }
    let schedule = wd_schedule(wd_from, wd_to, hyper.max_epochs);
    train_with_schedule(data, hyper, |e| schedule[e], Checkpoint::MaxSigma).map(|r| r.snapshot)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepEntry {
    pub lambda: f64,
    pub peak_epoch: Option<usize>,
    pub train_accuracy: Option<f64>,
    pub sigma_amco: Option<f64>,
    pub error: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AmplifiedModel {
    pub snapshot: ModelSnapshot,
    pub lambda_star: f64,
    pub sweep_log: Vec<SweepEntry>,
}

/// One sweep point: train at `lambda` and score the checkpoint.
pub fn sweep_point(data: &LabeledSplit, base: &TrainHyper, lambda: f64) -> Result<ModelSnapshot> {
    let hyper = TrainHyper {
        lambda,
        ..base.clone()
    };
    let mut snap = train_regularized(data, &hyper)?;
    snap.sigma_amco = Some(sigma_amco(&snap, data)?);
    Ok(snap)
}

/// Picks the run with the largest σ (first on ties). Failed runs are kept
/// in the log; if every run failed the errors are aggregated.
pub fn select_by_sigma(runs: Vec<(f64, Result<ModelSnapshot>)>) -> Result<AmplifiedModel> {
    if runs.is_empty() {
        return Err(Error::Empty("lambda grid"));
    }
    let mut log = Vec::with_capacity(runs.len());
    let mut best: Option<ModelSnapshot> = None;
    let mut errors = Vec::new();
    for (lambda, run) in runs {
        match run {
            Ok(snap) => {
                let sigma = snap.sigma_amco.unwrap_or(f64::NEG_INFINITY);
                log.push(SweepEntry {
                    lambda,
                    peak_epoch: Some(snap.epoch),
                    train_accuracy: Some(snap.train_accuracy),
                    sigma_amco: snap.sigma_amco,
                    error: None,
                });
                let better = best
                    .as_ref()
                    .is_none_or(|b| sigma > b.sigma_amco.unwrap_or(f64::NEG_INFINITY));
                if better {
                    best = Some(snap);
                }
            }
            Err(e) => {
                errors.push(format!("lambda {lambda}: {e}"));
                log.push(SweepEntry {
                    lambda,
                    peak_epoch: None,
                    train_accuracy: None,
                    sigma_amco: None,
                    error: Some(e.to_string()),
                });
            }
        }
    }
    match best {
        Some(snapshot) => Ok(AmplifiedModel {
            lambda_star: snapshot.lambda,
            snapshot,
            sweep_log: log,
        }),
        None => Err(Error::AllFailed(errors)),
    }
}

pub fn sweep_lambda(data: &LabeledSplit, base: &TrainHyper, lambdas: &[f64]) -> Result<AmplifiedModel> {
    let runs = lambdas
        .iter()
        .map(|&l| (l, sweep_point(data, base, l)))
        .collect();
    select_by_sigma(runs)
}

/// Ids of `class` members in ascending true-class likelihood (ties by id).
pub fn rank_bias_conflicting(snapshot: &ModelSnapshot, data: &LabeledSplit, class: usize) -> Result<Vec<String>> {
    let idx = data.class_indices(class);
    if idx.is_empty() {
        return Err(Error::EmptyClass(class));
    }
    let mut scored = idx
        .into_iter()
        .map(|i| likelihood(snapshot, data.x.row(i), class).map(|l| (l, i)))
        .collect::<Result<Vec<_>>>()?;
    scored.sort_by(|a, b| a.0.total_cmp(&b.0).then_with(|| data.ids[a.1].cmp(&data.ids[b.1])));
    Ok(scored.into_iter().map(|(_, i)| data.ids[i].clone()).collect())
}

/// Avg-AP of the likelihood ranking against the bias-conflicting
/// annotations, over classes that contain a conflicting sample.
pub fn ranking_avg_ap(snapshot: &ModelSnapshot, data: &LabeledSplit) -> Result<f64> {
    let mut per_class = Vec::new();
    for c in 0..data.num_classes {
        let positives: BTreeSet<String> = data
            .class_indices(c)
            .into_iter()
            .map(|i| match data.bias_conflicting[i] {
                Some(bc) => Ok((bc, i)),
                None => Err(Error::MissingAnnotations("bias_conflicting")),
            })
            .collect::<Result<Vec<_>>>()?
            .into_iter()
            .filter(|(bc, _)| *bc)
            .map(|(_, i)| data.ids[i].clone())
            .collect();
        if positives.is_empty() {
            continue;
        }
        per_class.push((rank_bias_conflicting(snapshot, data, c)?, positives));
    }
    metrics::avg_ap(&per_class)
}

/// Mean over classes of (bias-aligned accuracy − bias-conflicting
/// accuracy); classes lacking either population are skipped.
pub fn gt_acc_gap(snapshot: &ModelSnapshot, data: &LabeledSplit) -> Result<f64> {
    let mut gaps = Vec::new();
    for c in 0..data.num_classes {
        let (mut aligned, mut conflicting) = ((0usize, 0usize), (0usize, 0usize));
        for i in data.class_indices(c) {
            let bc = data.bias_conflicting[i].ok_or(Error::MissingAnnotations("bias_conflicting"))?;
            let correct = usize::from(snapshot.predict(data.x.row(i)) == c);
            let bucket = if bc { &mut conflicting } else { &mut aligned };
            bucket.0 += correct;
            bucket.1 += 1;
        }
        if aligned.1 > 0 && conflicting.1 > 0 {
            gaps.push(aligned.0 as f64 / aligned.1 as f64 - conflicting.0 as f64 / conflicting.1 as f64);
        }
    }
    if gaps.is_empty() {
        return Err(Error::UndefinedMetric("no class has both aligned and conflicting samples"));
    }
    Ok(gaps.iter().sum::<f64>() / gaps.len() as f64)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn linear(weight: Vec<f32>, bias: Vec<f32>, inputs: usize) -> ModelSnapshot {
        let outputs = bias.len();
        ModelSnapshot {
            architecture: Architecture::Linear,
            layers: vec![DenseLayer {
                inputs,
                outputs,
                weight,
                bias,
            }],
            lambda: 0.0,
            epoch: 0,
            train_accuracy: 0.0,
            sigma_amco: None,
            seed: 0,
        }
    }

    fn split(x: Vec<[f64; 1]>, y: Vec<usize>, k: usize) -> LabeledSplit {
        LabeledSplit {
            ids: (0..y.len()).map(|i| format!("id{i:03}")).collect(),
            x: Matrix::from_rows(&x),
            bias_conflicting: vec![None; y.len()],
            y,
            num_classes: k,
        }
    }

    #[test]
    fn likelihood_closed_forms() {
        let uniform = linear(vec![0.0; 4], vec![0.0; 4], 1);
        assert!((likelihood(&uniform, &[3.0], 2).unwrap() - 0.25).abs() < 1e-15);
        let two = linear(vec![0.0, 0.0], vec![2.0, 0.0], 1);
        let e2 = libm::exp(2.0);
        assert!((likelihood(&two, &[1.0], 0).unwrap() - e2 / (e2 + 1.0)).abs() < 1e-12);
        assert!((likelihood(&two, &[1.0], 0).unwrap() - 0.88080).abs() < 1e-5);
        assert!(likelihood(&two, &[1.0], 2).is_err());
        assert!(likelihood_from_logits(&[f64::NAN, 0.0], 0).is_err());
    }

    #[test]
    fn sigma_hand_values() {
        assert_eq!(sigma_from_likelihoods(&[1.0, 0.0], &[0, 0], 1).unwrap(), 0.25);
        // Per-class variances 0.25 ({1, 0}) and 0.09 ({0.8, 0.2}).
        let s = sigma_from_likelihoods(&[1.0, 0.0, 0.8, 0.2], &[0, 0, 1, 1], 2).unwrap();
        assert!((s - 0.17).abs() < 1e-12);
        assert_eq!(sigma_from_likelihoods(&[0.3, 0.3], &[0, 1], 2).unwrap(), 0.0);
        assert_eq!(sigma_from_likelihoods(&[0.3], &[0], 2), Err(Error::EmptyClass(1)));
    }

    #[test]
    fn schedule_endpoints() {
        let s = wd_schedule(2.0, 1e-3, 10);
        assert_eq!(s[0], 2.0);
        assert_eq!(s[9], 1e-3);
        assert!(s.windows(2).all(|w| w[1] < w[0]));
        let data = split(vec![[0.0], [1.0]], vec![0, 1], 2);
        assert!(train_wd_schedule(&data, &TrainHyper::default(), 1e-3, 2.0).is_err());
        assert!(train_wd_schedule(&data, &TrainHyper::default(), 1.0, 1.0).is_err());
    }

    #[test]
    fn single_class_rejected() {
        let data = split(vec![[0.0], [1.0]], vec![1, 1], 2);
        assert_eq!(train_regularized(&data, &TrainHyper::default()), Err(Error::SingleClass(1)));
    }

    #[test]
    fn divergence_reports_epoch() {
        let data = split(vec![[1e3], [-1e3], [2e3], [-2e3]], vec![0, 1, 0, 1], 2);
        let hyper = TrainHyper {
            learning_rate: 1e6,
            lambda: 1e6,
            batch_size: 2,
            ..TrainHyper::default()
        };
        assert!(matches!(train_regularized(&data, &hyper), Err(Error::Diverged { .. })));
    }

    #[test]
    fn ranking_ties_by_id() {
        let uniform = linear(vec![0.0; 2], vec![0.0; 2], 1);
        let data = split(vec![[0.3], [0.1], [0.2]], vec![0, 0, 1], 2);
        assert_eq!(rank_bias_conflicting(&uniform, &data, 0).unwrap(), vec!["id000", "id001"]);
        assert_eq!(rank_bias_conflicting(&uniform, &data, 1).unwrap().len(), 1);
    }

    #[test]
    fn gap_of_perfectly_biased_model() {
        // Predicts class 0 for x < 0, class 1 otherwise; conflicting samples
        // sit on the wrong side.
        let model = linear(vec![-1.0, 1.0], vec![0.0, 0.0], 1);
        let mut data = split(vec![[-1.0], [1.0], [1.0], [-1.0]], vec![0, 0, 1, 1], 2);
        data.bias_conflicting = vec![Some(false), Some(true), Some(false), Some(true)];
        assert_eq!(gt_acc_gap(&model, &data).unwrap(), 1.0);
        data.bias_conflicting[0] = None;
        assert!(gt_acc_gap(&model, &data).is_err());
    }

    #[test]
    fn select_prefers_largest_sigma_and_aggregates_failures() {
        let mut a = linear(vec![0.0; 2], vec![0.0; 2], 1);
        a.sigma_amco = Some(0.1);
        a.lambda = 0.1;
        let mut b = a.clone();
        b.sigma_amco = Some(0.2);
        b.lambda = 1.0;
        let m = select_by_sigma(vec![(0.1, Ok(a)), (1.0, Ok(b)), (2.0, Err(Error::Diverged { epoch: 3 }))]).unwrap();
        assert_eq!(m.lambda_star, 1.0);
        assert_eq!(m.sweep_log.len(), 3);
        assert!(m.sweep_log[2].error.is_some());
        let all_bad = select_by_sigma(vec![(1.0, Err(Error::Diverged { epoch: 0 }))]);
        assert!(matches!(all_bad, Err(Error::AllFailed(v)) if v.len() == 1));
    }
}
