//! Correlation-aware slicing: one mixture per class over two views of each
//! sample, the amplified model's logits `b` and a semantic embedding `z`.
//!
//! The fitted objective is
//!
//! ```text
//! l(φ) = Σ_i log Σ_j p_j · N(z_i; μc_j, diag σc_j) · N(b_i; μp_j, Σp_j)^α
//! ```
//!
//! E-steps and `l` use the tempered logit density; M-steps are weighted
//! maximum-likelihood updates with the eigenvalues of `Σp` held at or above
//! `δp` and the embedding variances at or above [`SIGMA_C_FLOOR`]. Both
//! bounds are exact constrained maximizers, so `l` never decreases. The
//! additive `Σp + δp I` regularizer is available as [`DeltaMode::Additive`]
//! but does not carry that guarantee.

use alloc::collections::{BTreeMap, BTreeSet};
use alloc::format;
use alloc::string::{String, ToString};
use alloc::vec;
use alloc::vec::Vec;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::{
    argmax, chol_log_det, cholesky, forward_substitute, log_sum_exp, symmetric_eigen, Matrix,
};
use crate::metrics;

/// Lower bound on every embedding-view variance.
pub const SIGMA_C_FLOOR: f64 = 1e-6;
/// Components whose total responsibility drops below this are frozen.
pub const EMPTY_COMPONENT: f64 = 1e-10;
/// Slices shown per class in reports.
pub const DEFAULT_REPORT_DEPTH: usize = 6;
pub const DEFAULT_TOP_K: usize = 10;

const LN_2PI: f64 = 1.837_877_066_409_345_3;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum CovarianceKind {
    Full,
    Diagonal,
    Tied,
}

impl CovarianceKind {
    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "full" => Some(Self::Full),
            "diagonal" | "diag" => Some(Self::Diagonal),
            "tied" => Some(Self::Tied),
            _ => None,
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            Self::Full => "full",
            Self::Diagonal => "diagonal",
            Self::Tied => "tied",
        }
    }
}

/// How `δp` regularizes the logit-view covariance.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DeltaMode {
    /// Eigenvalues below `δp` are raised to `δp`.
    #[default]
    Floor,
    /// `δp` is added to the diagonal.
    Additive,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SliceHyper {
    pub k_hat: usize,
    pub alpha: f64,
    pub delta_p: f64,
    pub cov_p: CovarianceKind,
    pub delta_mode: DeltaMode,
    pub max_em_steps: usize,
    pub ll_tol: f64,
    /// Recorded with the fit; initialization and EM are deterministic.
    pub seed: u64,
}

impl Default for SliceHyper {
    fn default() -> Self {
        Self {
            k_hat: 36,
            alpha: 25.0,
            delta_p: 1e-3,
            cov_p: CovarianceKind::Full,
            delta_mode: DeltaMode::Floor,
            max_em_steps: 100,
            ll_tol: 1e-7,
            seed: 0,
        }
    }
}

impl SliceHyper {
    pub fn validate(&self) -> Result<()> {
        if self.k_hat < 1 {
            return Err(Error::InvalidConfig("k_hat must be >= 1".into()));
        }
        if !(self.alpha >= 0.0) || !self.alpha.is_finite() {
            return Err(Error::InvalidConfig(format!("alpha must be nonnegative, got {}", self.alpha)));
        }
        if !(self.delta_p >= 0.0) {
            return Err(Error::InvalidConfig(format!("delta_p must be nonnegative, got {}", self.delta_p)));
        }
        if self.max_em_steps == 0 || !(self.ll_tol > 0.0) {
            return Err(Error::InvalidConfig("max_em_steps and ll_tol must be positive".into()));
        }
        Ok(())
    }
}

/// The samples of one class in both views; row `i` of each matrix is `ids[i]`.
#[derive(Debug, Clone, PartialEq)]
pub struct ClassView {
    pub class_label: usize,
    pub ids: Vec<String>,
    pub logits: Matrix,
    pub embeddings: Matrix,
}

impl ClassView {
    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }

    pub fn predictions(&self) -> Vec<usize> {
        self.logits.iter_rows().map(argmax).collect()
    }

    /// Splits rows by label; classes without samples are omitted.
    pub fn partition(ids: &[String], labels: &[usize], logits: &Matrix, embeddings: &Matrix, num_classes: usize) -> Vec<ClassView> {
        (0..num_classes)
            .filter_map(|c| {
                let idx: Vec<usize> = (0..labels.len()).filter(|&i| labels[i] == c).collect();
                if idx.is_empty() {
                    return None;
                }
                Some(ClassView {
                    class_label: c,
                    ids: idx.iter().map(|&i| ids[i].clone()).collect(),
                    logits: logits.select_rows(&idx),
                    embeddings: embeddings.select_rows(&idx),
                })
            })
            .collect()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Component {
    pub mu_p: Vec<f64>,
    pub sigma_p: Matrix,
    pub mu_c: Vec<f64>,
    pub sigma_c_diag: Vec<f64>,
    /// Set once the component's responsibility mass vanished.
    pub frozen: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SliceMixture {
    pub class_label: usize,
    pub alpha: f64,
    pub cov_p: CovarianceKind,
    pub weights: Vec<f64>,
    pub components: Vec<Component>,
    pub fit_log: Vec<f64>,
    pub converged: bool,
}

/// Per-component quantities needed to evaluate densities.
struct Prepared {
    log_weight: f64,
    chol_p: Matrix,
    log_det_p: f64,
    log_det_c: f64,
}

impl SliceMixture {
    pub fn k_hat(&self) -> usize {
        self.components.len()
    }

    pub fn logit_dim(&self) -> usize {
        self.components.first().map_or(0, |c| c.mu_p.len())
    }

    pub fn embed_dim(&self) -> usize {
        self.components.first().map_or(0, |c| c.mu_c.len())
    }

    fn prepare(&self) -> Result<Vec<Option<Prepared>>> {
        self.components
            .iter()
            .zip(&self.weights)
            .enumerate()
            .map(|(j, (c, &w))| {
                if w <= 0.0 {
                    return Ok(None);
                }
                let chol_p = cholesky(&c.sigma_p).ok_or(Error::NotPositiveDefinite { component: j })?;
                Ok(Some(Prepared {
                    log_weight: libm::log(w),
                    log_det_p: chol_log_det(&chol_p),
                    chol_p,
                    log_det_c: c.sigma_c_diag.iter().map(|&v| libm::log(v)).sum(),
                }))
            })
            .collect()
    }

    /// `log p_j + log N(z) + α log N(b)` for every component, `-inf` for
    /// components with zero weight.
    fn joint_log_densities(&self, prepared: &[Option<Prepared>], b: &[f64], z: &[f64], out: &mut [f64], scratch: &mut Vec<f64>) {
        let dp = b.len() as f64;
        let dc = z.len() as f64;
        for (j, (c, prep)) in self.components.iter().zip(prepared).enumerate() {
            let Some(prep) = prep else {
                out[j] = f64::NEG_INFINITY;
                continue;
            };
            scratch.clear();
            scratch.extend(b.iter().zip(&c.mu_p).map(|(x, m)| x - m));
            forward_substitute(&prep.chol_p, scratch);
            let maha_p: f64 = scratch.iter().map(|v| v * v).sum();
            let log_np = -0.5 * (dp * LN_2PI + prep.log_det_p + maha_p);
            let maha_c: f64 = z
                .iter()
                .zip(&c.mu_c)
                .zip(&c.sigma_c_diag)
                .map(|((x, m), v)| (x - m) * (x - m) / v)
                .sum();
            let log_nc = -0.5 * (dc * LN_2PI + prep.log_det_c + maha_c);
            out[j] = prep.log_weight + log_nc + self.alpha * log_np;
        }
    }

    /// Joint log densities for every row of a view (`n x k_hat`).
    pub fn log_density_matrix(&self, view: &ClassView) -> Result<Matrix> {
        self.check_dims(view)?;
        let prepared = self.prepare()?;
        let mut out = Matrix::zeros(view.len(), self.k_hat());
        let mut scratch = Vec::new();
        for i in 0..view.len() {
            self.joint_log_densities(&prepared, view.logits.row(i), view.embeddings.row(i), out.row_mut(i), &mut scratch);
        }
        Ok(out)
    }

    /// The tempered log-likelihood `l(φ)` of a view.
    pub fn log_likelihood(&self, view: &ClassView) -> Result<f64> {
        let dens = self.log_density_matrix(view)?;
        Ok(dens.iter_rows().map(log_sum_exp).sum())
    }

    fn check_dims(&self, view: &ClassView) -> Result<()> {
        if view.logits.cols() != self.logit_dim() {
            return Err(Error::DimensionMismatch {
                what: "logit view",
                expected: self.logit_dim(),
                got: view.logits.cols(),
            });
        }
        if view.embeddings.cols() != self.embed_dim() {
            return Err(Error::DimensionMismatch {
                what: "embedding view",
                expected: self.embed_dim(),
                got: view.embeddings.cols(),
            });
        }
        Ok(())
    }
}

/// Initial hard assignment: one group per predicted label, then the
/// largest groups are halved along the principal direction of their logits
/// until `k_hat` groups exist (or no group has two members). With more
/// distinct predictions than `k_hat`, the smallest groups share the last
/// component.
pub fn init_slices(logits: &Matrix, predictions: &[usize], k_hat: usize) -> Result<Vec<usize>> {
    if k_hat < 1 {
        return Err(Error::InvalidConfig("k_hat must be >= 1".into()));
    }
    if predictions.is_empty() {
        return Err(Error::Empty("class samples"));
    }
    if predictions.len() != logits.rows() {
        return Err(Error::DimensionMismatch {
            what: "predictions",
            expected: logits.rows(),
            got: predictions.len(),
        });
    }
    let mut by_pred: BTreeMap<usize, Vec<usize>> = BTreeMap::new();
    for (i, &p) in predictions.iter().enumerate() {
        by_pred.entry(p).or_default().push(i);
    }
    let mut groups: Vec<Vec<usize>> = by_pred.into_values().collect();
    if groups.len() > k_hat {
        groups.sort_by_key(|g| core::cmp::Reverse(g.len()));
        let mut rest: Vec<usize> = groups.drain(k_hat - 1..).flatten().collect();
        rest.sort_unstable();
        groups.push(rest);
    }
    while groups.len() < k_hat {
        let Some(g) = (0..groups.len())
            .filter(|&g| groups[g].len() >= 2)
            .max_by(|&a, &b| groups[a].len().cmp(&groups[b].len()).then(b.cmp(&a)))
        else {
            break;
        };
        let upper = split_on_principal_direction(logits, &mut groups[g]);
        groups.push(upper);
    }
    let mut assignment = vec![0usize; predictions.len()];
    for (g, members) in groups.iter().enumerate() {
        for &i in members {
            assignment[i] = g;
        }
    }
    Ok(assignment)
}

/// Sorts `members` by their projection on the top principal axis of their
/// logits (ties by index), keeps the lower half and returns the upper half.
fn split_on_principal_direction(logits: &Matrix, members: &mut Vec<usize>) -> Vec<usize> {
    let d = logits.cols();
    let n = members.len() as f64;
    let mut mean = vec![0.0; d];
    for &i in members.iter() {
        for (m, v) in mean.iter_mut().zip(logits.row(i)) {
            *m += v / n;
        }
    }
    let mut cov = Matrix::zeros(d, d);
    for &i in members.iter() {
        let r = logits.row(i);
        for a in 0..d {
            for b in 0..d {
                cov[(a, b)] += (r[a] - mean[a]) * (r[b] - mean[b]) / n;
            }
        }
    }
    let (_, vecs) = symmetric_eigen(&cov);
    let axis: Vec<f64> = (0..d).map(|r| vecs[(r, 0)]).collect();
    let mut proj: Vec<(f64, usize)> = members
        .iter()
        .map(|&i| {
            let p: f64 = logits.row(i).iter().zip(&mean).zip(&axis).map(|((x, m), a)| (x - m) * a).sum();
            (p, i)
        })
        .collect();
    proj.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
    let keep = proj.len() / 2;
    let mut lower: Vec<usize> = proj[..keep].iter().map(|&(_, i)| i).collect();
    let mut upper: Vec<usize> = proj[keep..].iter().map(|&(_, i)| i).collect();
    lower.sort_unstable();
    upper.sort_unstable();
    *members = lower;
    upper
}

/// Weighted maximum-likelihood update from responsibilities (`n x k`).
/// Components with mass below [`EMPTY_COMPONENT`] keep their previous
/// parameters (or the pooled estimate on the first step) and get weight 0.
fn m_step(view: &ClassView, resp: &Matrix, hyper: &SliceHyper, previous: Option<&[Component]>) -> (Vec<f64>, Vec<Component>) {
    let n = view.len();
    let k = resp.cols();
    let dp = view.logits.cols();
    let dc = view.embeddings.cols();
    let mass: Vec<f64> = (0..k).map(|j| (0..n).map(|i| resp[(i, j)]).sum()).collect();
    let active: Vec<bool> = mass.iter().map(|&m| m >= EMPTY_COMPONENT).collect();

    let pooled = || {
        let ones = Matrix::from_vec(n, 1, vec![1.0; n]);
        weighted_moments(view, &ones, 0, n as f64)
    };
    let mut scatter_p: Vec<Matrix> = Vec::with_capacity(k);
    let mut components: Vec<Component> = Vec::with_capacity(k);
    for j in 0..k {
        if !active[j] {
            let frozen = match previous {
                Some(prev) => Component {
                    frozen: true,
                    ..prev[j].clone()
                },
                None => {
                    let (mu_p, s_p, mu_c, var_c) = pooled();
                    Component {
                        mu_p,
                        sigma_p: regularize(s_p, hyper),
                        mu_c,
                        sigma_c_diag: var_c.into_iter().map(|v| v.max(SIGMA_C_FLOOR)).collect(),
                        frozen: true,
                    }
                }
            };
            scatter_p.push(Matrix::zeros(dp, dp));
            components.push(frozen);
            continue;
        }
        let (mu_p, s_p, mu_c, var_c) = weighted_moments(view, resp, j, mass[j]);
        scatter_p.push(s_p);
        components.push(Component {
            mu_p,
            sigma_p: Matrix::zeros(dp, dp),
            mu_c,
            sigma_c_diag: var_c.into_iter().map(|v| v.max(SIGMA_C_FLOOR)).collect(),
            frozen: false,
        });
    }
    let _ = dc;

    let tied = if hyper.cov_p == CovarianceKind::Tied {
        let mut s = Matrix::zeros(dp, dp);
        for j in (0..k).filter(|&j| active[j]) {
            for (t, v) in s.as_mut_slice().iter_mut().zip(scatter_p[j].as_slice()) {
                *t += v * mass[j] / n as f64;
            }
        }
        Some(regularize(s, hyper))
    } else {
        None
    };
    for j in (0..k).filter(|&j| active[j]) {
        let s = core::mem::replace(&mut scatter_p[j], Matrix::zeros(0, 0));
        components[j].sigma_p = match hyper.cov_p {
            CovarianceKind::Full => regularize(s, hyper),
            CovarianceKind::Diagonal => {
                let mut d = Matrix::zeros(dp, dp);
                for a in 0..dp {
                    d[(a, a)] = s[(a, a)];
                }
                regularize(d, hyper)
            }
            CovarianceKind::Tied => tied.clone().expect("tied covariance"),
        };
    }

    let total: f64 = (0..k).filter(|&j| active[j]).map(|j| mass[j]).sum();
    let weights = (0..k)
        .map(|j| if active[j] { mass[j] / total } else { 0.0 })
        .collect();
    (weights, components)
}

fn regularize(mut s: Matrix, hyper: &SliceHyper) -> Matrix {
    let delta = hyper.delta_p;
    let d = s.rows();
    match hyper.delta_mode {
        DeltaMode::Additive => {
            for a in 0..d {
                s[(a, a)] += delta;
            }
        }
        DeltaMode::Floor => {
            let diagonal = (0..d).all(|a| (0..d).all(|b| a == b || s[(a, b)] == 0.0));
            if diagonal {
                for a in 0..d {
                    s[(a, a)] = s[(a, a)].max(delta);
                }
            } else {
                let (vals, vecs) = symmetric_eigen(&s);
                let mut out = Matrix::zeros(d, d);
                for (k, &v) in vals.iter().enumerate() {
                    let v = v.max(delta);
                    for a in 0..d {
                        let va = v * vecs[(a, k)];
                        for b in 0..d {
                            out[(a, b)] += va * vecs[(b, k)];
                        }
                    }
                }
                s = out;
            }
        }
    }
    // Exact symmetry for the Cholesky factorization.
    for a in 0..d {
        for b in 0..a {
            let v = 0.5 * (s[(a, b)] + s[(b, a)]);
            s[(a, b)] = v;
            s[(b, a)] = v;
        }
    }
    s
}

/// Weighted mean and covariance (logit view) and weighted mean and
/// per-dimension variance (embedding view) for column `j` of `resp`.
fn weighted_moments(view: &ClassView, resp: &Matrix, j: usize, mass: f64) -> (Vec<f64>, Matrix, Vec<f64>, Vec<f64>) {
    let n = view.len();
    let dp = view.logits.cols();
    let dc = view.embeddings.cols();
    let mut mu_p = vec![0.0; dp];
    let mut mu_c = vec![0.0; dc];
    for i in 0..n {
        let r = resp[(i, j)];
        if r == 0.0 {
            continue;
        }
        for (m, v) in mu_p.iter_mut().zip(view.logits.row(i)) {
            *m += r * v;
        }
        for (m, v) in mu_c.iter_mut().zip(view.embeddings.row(i)) {
            *m += r * v;
        }
    }
    mu_p.iter_mut().for_each(|m| *m /= mass);
    mu_c.iter_mut().for_each(|m| *m /= mass);
    let mut s_p = Matrix::zeros(dp, dp);
    let mut var_c = vec![0.0; dc];
    let mut diff = vec![0.0; dp];
    for i in 0..n {
        let r = resp[(i, j)];
        if r == 0.0 {
            continue;
        }
        for (d, (x, m)) in diff.iter_mut().zip(view.logits.row(i).iter().zip(&mu_p)) {
            *d = x - m;
        }
        for a in 0..dp {
            let ra = r * diff[a];
            for b in 0..=a {
                s_p[(a, b)] += ra * diff[b];
            }
        }
        for (v, (x, m)) in var_c.iter_mut().zip(view.embeddings.row(i).iter().zip(&mu_c)) {
            *v += r * (x - m) * (x - m);
        }
    }
    for a in 0..dp {
        for b in 0..=a {
            let v = s_p[(a, b)] / mass;
            s_p[(a, b)] = v;
            s_p[(b, a)] = v;
        }
    }
    var_c.iter_mut().for_each(|v| *v /= mass);
    (mu_p, s_p, mu_c, var_c)
}

/// E-step: responsibilities and `l(φ)`.
fn e_step(mixture: &SliceMixture, view: &ClassView, iteration: usize) -> Result<(Matrix, f64)> {
    let mut dens = mixture.log_density_matrix(view)?;
    let mut ll = 0.0;
    for i in 0..view.len() {
        let row = dens.row_mut(i);
        let lse = log_sum_exp(row);
        if !lse.is_finite() {
            return Err(Error::NonFiniteLikelihood(iteration));
        }
        ll += lse;
        for v in row.iter_mut() {
            *v = libm::exp(*v - lse);
        }
    }
    if !ll.is_finite() {
        return Err(Error::NonFiniteLikelihood(iteration));
    }
    Ok((dens, ll))
}

/// Fits a class mixture starting from the prediction-grouped
/// initialization.
pub fn fit_mixture(view: &ClassView, hyper: &SliceHyper) -> Result<SliceMixture> {
    hyper.validate()?;
    let init = init_slices(&view.logits, &view.predictions(), hyper.k_hat)?;
    fit_mixture_from(view, &init, hyper)
}

/// Fits a class mixture from a hard initial assignment (`init[i] < k_hat`).
pub fn fit_mixture_from(view: &ClassView, init: &[usize], hyper: &SliceHyper) -> Result<SliceMixture> {
    hyper.validate()?;
    if view.is_empty() {
        return Err(Error::Empty("class samples"));
    }
    if init.len() != view.len() {
        return Err(Error::DimensionMismatch {
            what: "initial assignment",
            expected: view.len(),
            got: init.len(),
        });
    }
    if !view.logits.is_finite() || !view.embeddings.is_finite() {
        return Err(Error::InvalidConfig("class view has non-finite values".into()));
    }
    let k = hyper.k_hat;
    let mut resp = Matrix::zeros(view.len(), k);
    for (i, &j) in init.iter().enumerate() {
        if j >= k {
            return Err(Error::InvalidConfig(format!("initial component {j} >= k_hat {k}")));
        }
        resp[(i, j)] = 1.0;
    }
    let (weights, components) = m_step(view, &resp, hyper, None);
    let mut mixture = SliceMixture {
        class_label: view.class_label,
        alpha: hyper.alpha,
        cov_p: hyper.cov_p,
        weights,
        components,
        fit_log: Vec::new(),
        converged: false,
    };
    for iteration in 0..=hyper.max_em_steps {
        let (r, ll) = e_step(&mixture, view, iteration)?;
        if let Some(&prev) = mixture.fit_log.last() {
            if ll - prev < hyper.ll_tol {
                mixture.fit_log.push(ll);
                mixture.converged = true;
                break;
            }
        }
        mixture.fit_log.push(ll);
        if iteration == hyper.max_em_steps {
            break;
        }
        let (weights, components) = m_step(view, &r, hyper, Some(&mixture.components));
        mixture.weights = weights;
        mixture.components = components;
    }
    Ok(mixture)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AssignedSample {
    pub id: String,
    pub slice_id: usize,
    pub log_density: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SliceAssignment {
    pub class_label: usize,
    pub samples: Vec<AssignedSample>,
    /// `members[j]`: ids in slice `j` by decreasing density (ties by id).
    pub members: Vec<Vec<String>>,
}

/// Hard assignment to the component of highest joint log density.
pub fn assign(mixture: &SliceMixture, view: &ClassView) -> Result<SliceAssignment> {
    let dens = mixture.log_density_matrix(view)?;
    let mut samples = Vec::with_capacity(view.len());
    let mut buckets: Vec<Vec<(f64, usize)>> = vec![Vec::new(); mixture.k_hat()];
    for i in 0..view.len() {
        let row = dens.row(i);
        let j = argmax(row);
        buckets[j].push((row[j], i));
        samples.push(AssignedSample {
            id: view.ids[i].clone(),
            slice_id: j,
            log_density: row[j],
        });
    }
    let members = buckets
        .into_iter()
        .map(|mut b| {
            b.sort_by(|x, y| y.0.total_cmp(&x.0).then_with(|| view.ids[x.1].cmp(&view.ids[y.1])));
            b.into_iter().map(|(_, i)| view.ids[i].clone()).collect()
        })
        .collect();
    Ok(SliceAssignment {
        class_label: mixture.class_label,
        samples,
        members,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReportedSlice {
    pub class_label: usize,
    pub slice_id: usize,
    pub rank: usize,
    pub accuracy: f64,
    pub size: usize,
    pub top_k: Vec<String>,
    /// Every member by decreasing density.
    pub members: Vec<String>,
    pub predicted_bias_conflicting: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SliceReport {
    pub top_k: usize,
    pub slices: Vec<ReportedSlice>,
}

impl SliceReport {
    /// Slices of one class in report order.
    pub fn class_slices(&self, class: usize) -> impl Iterator<Item = &ReportedSlice> {
        self.slices.iter().filter(move |s| s.class_label == class)
    }

    pub fn orderings(&self) -> Vec<&[String]> {
        self.slices.iter().map(|s| s.members.as_slice()).collect()
    }
}

/// Orders nonempty slices by ascending accuracy, then descending size,
/// class and slice id. A slice is flagged bias-conflicting when the model
/// is wrong on the majority of its members.
pub fn rank_and_report(assignments: &[SliceAssignment], correctness: &BTreeMap<String, bool>, top_k: usize) -> Result<SliceReport> {
    let mut slices = Vec::new();
    for a in assignments {
        for (j, members) in a.members.iter().enumerate() {
            if members.is_empty() {
                continue;
            }
            let correct = members
                .iter()
                .map(|id| {
                    correctness
                        .get(id)
                        .copied()
                        .ok_or_else(|| Error::InvalidConfig(format!("no correctness entry for sample {id}")))
                })
                .collect::<Result<Vec<bool>>>()?
                .into_iter()
                .filter(|&c| c)
                .count();
            let accuracy = correct as f64 / members.len() as f64;
            slices.push(ReportedSlice {
                class_label: a.class_label,
                slice_id: j,
                rank: 0,
                accuracy,
                size: members.len(),
                top_k: members.iter().take(top_k).cloned().collect(),
                members: members.clone(),
                predicted_bias_conflicting: accuracy < 0.5,
            });
        }
    }
    if slices.is_empty() {
        return Err(Error::Empty("slice list"));
    }
    slices.sort_by(|a, b| {
        a.accuracy
            .total_cmp(&b.accuracy)
            .then(b.size.cmp(&a.size))
            .then(a.class_label.cmp(&b.class_label))
            .then(a.slice_id.cmp(&b.slice_id))
    });
    for (r, s) in slices.iter_mut().enumerate() {
        s.rank = r;
    }
    Ok(SliceReport { top_k, slices })
}

/// Slice ranking AP of a report against ground-truth conflicting ids.
pub fn report_slice_ranking_ap(report: &SliceReport, conflicting: &BTreeSet<String>) -> Result<f64> {
    let tops: Vec<&[String]> = report.slices.iter().map(|s| s.members.as_slice()).collect();
    metrics::slice_ranking_ap(&tops, conflicting)
}

/// Fits every class view, then assigns `assign_views` with the mixture of
/// the same class.
pub fn fit_and_assign(fit_views: &[ClassView], assign_views: &[ClassView], hyper: &SliceHyper) -> Result<(Vec<SliceMixture>, Vec<SliceAssignment>)> {
    let mixtures = fit_views
        .iter()
        .map(|v| fit_mixture(v, hyper))
        .collect::<Result<Vec<_>>>()?;
    let assignments = assign_all(&mixtures, assign_views)?;
    Ok((mixtures, assignments))
}

pub fn assign_all(mixtures: &[SliceMixture], views: &[ClassView]) -> Result<Vec<SliceAssignment>> {
    views
        .iter()
        .filter_map(|v| {
            mixtures
                .iter()
                .find(|m| m.class_label == v.class_label)
                .map(|m| assign(m, v))
        })
        .collect()
}

/// Mean of the silhouette coefficients of the assignments, taken in the
/// embedding view and in the logit view of every class. A class whose
/// samples fall in a single slice contributes 0.
pub fn silhouette_score(views: &[ClassView], assignments: &[SliceAssignment]) -> Result<f64> {
    let mut total = 0.0;
    let mut count = 0usize;
    for (v, a) in views.iter().zip(assignments) {
        let labels: Vec<usize> = a.samples.iter().map(|s| s.slice_id).collect();
        for points in [&v.embeddings, &v.logits] {
            total += match metrics::silhouette(points, &labels) {
                Ok(s) => s,
                Err(Error::UndefinedMetric(_)) => 0.0,
                Err(e) => return Err(e),
            };
            count += 1;
        }
    }
    if count == 0 {
        return Err(Error::Empty("class views"));
    }
    Ok(total / count as f64)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TuneOutcome {
    pub chosen: SliceHyper,
    pub chosen_index: usize,
    pub scores: Vec<Option<f64>>,
    pub warnings: Vec<String>,
}

/// Picks the grid point whose fitted slices on `views` have the highest
/// mean silhouette (first on ties). Failing grid points are skipped.
pub fn silhouette_tune(views: &[ClassView], grid: &[SliceHyper]) -> Result<TuneOutcome> {
    if grid.is_empty() {
        return Err(Error::Empty("tuning grid"));
    }
    let results: Vec<Result<f64>> = grid
        .iter()
        .map(|h| {
            let (_, assignments) = fit_and_assign(views, views, h)?;
            silhouette_score(views, &assignments)
        })
        .collect();
    select_by_silhouette(grid, results)
}

pub fn select_by_silhouette(grid: &[SliceHyper], results: Vec<Result<f64>>) -> Result<TuneOutcome> {
    let mut scores = Vec::with_capacity(grid.len());
    let mut warnings = Vec::new();
    let mut best: Option<(usize, f64)> = None;
    for (i, r) in results.into_iter().enumerate() {
        match r {
            Ok(s) => {
                scores.push(Some(s));
                if best.is_none_or(|(_, b)| s > b) {
                    best = Some((i, s));
                }
            }
            Err(e) => {
                warnings.push(format!("grid point {i} skipped: {e}"));
                scores.push(None);
            }
        }
    }
    match best {
        Some((i, _)) => Ok(TuneOutcome {
            chosen: grid[i].clone(),
            chosen_index: i,
            scores,
            warnings,
        }),
        None => Err(Error::AllFailed(warnings.iter().map(|w| w.to_string()).collect())),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::Rng;

    fn view(logits: Vec<Vec<f64>>, emb: Vec<Vec<f64>>) -> ClassView {
        ClassView {
            class_label: 0,
            ids: (0..logits.len()).map(|i| format!("x{i:04}")).collect(),
            logits: Matrix::from_rows(&logits),
            embeddings: Matrix::from_rows(&emb),
        }
    }

    fn random_view(rng: &mut Rng, n: usize, dp: usize, dc: usize) -> ClassView {
        let logits = (0..n).map(|_| (0..dp).map(|_| rng.normal()).collect()).collect();
        let emb = (0..n).map(|_| (0..dc).map(|_| rng.normal()).collect()).collect();
        view(logits, emb)
    }

    #[test]
    fn init_two_predictions_two_groups() {
        let logits = Matrix::from_rows(&[[2.0, 0.0], [1.5, 0.1], [0.0, 2.0], [0.2, 1.0]]);
        let preds = vec![0, 0, 1, 1];
        assert_eq!(init_slices(&logits, &preds, 2).unwrap(), vec![0, 0, 1, 1]);
        assert_eq!(init_slices(&logits, &[0, 0, 0, 0], 1).unwrap(), vec![0, 0, 0, 0]);
        assert!(init_slices(&logits, &preds, 0).is_err());
    }

    #[test]
    fn init_merges_when_k_hat_is_small() {
        let logits = Matrix::from_rows(&[[0.0], [0.0], [0.0], [0.0]]);
        let a = init_slices(&logits, &[0, 1, 1, 2], 2).unwrap();
        assert_eq!(a, vec![1, 0, 0, 1]);
    }

    #[test]
    fn k1_means_are_sample_means() {
        let mut rng = Rng::new(5);
        let v = random_view(&mut rng, 40, 3, 4);
        let hyper = SliceHyper {
            k_hat: 1,
            ..SliceHyper::default()
        };
        let m = fit_mixture(&v, &hyper).unwrap();
        for d in 0..3 {
            let mean = (0..40).map(|i| v.logits[(i, d)]).sum::<f64>() / 40.0;
            assert_eq!(m.components[0].mu_p[d], mean);
        }
        for d in 0..4 {
            let mean = (0..40).map(|i| v.embeddings[(i, d)]).sum::<f64>() / 40.0;
            assert_eq!(m.components[0].mu_c[d], mean);
        }
        assert_eq!(m.weights, vec![1.0]);
    }

    #[test]
    fn degenerate_inputs_fit() {
        // Constant embedding coordinate and duplicated rows.
        let logits: Vec<Vec<f64>> = (0..20).map(|i| vec![(i % 2) as f64, 1.0]).collect();
        let emb: Vec<Vec<f64>> = (0..20).map(|i| vec![3.0, (i % 2) as f64]).collect();
        let m = fit_mixture(&view(logits, emb), &SliceHyper { k_hat: 4, ..Default::default() }).unwrap();
        assert!(m.components.iter().all(|c| c.sigma_c_diag.iter().all(|&v| v >= SIGMA_C_FLOOR)));
        assert!(m.fit_log.iter().all(|v| v.is_finite()));
    }

    #[test]
    fn zero_delta_on_duplicates_is_not_pd() {
        let logits: Vec<Vec<f64>> = (0..6).map(|_| vec![1.0, 2.0]).collect();
        let emb: Vec<Vec<f64>> = (0..6).map(|i| vec![i as f64]).collect();
        let hyper = SliceHyper {
            k_hat: 1,
            delta_p: 0.0,
            ..Default::default()
        };
        assert!(matches!(fit_mixture(&view(logits, emb), &hyper), Err(Error::NotPositiveDefinite { .. })));
    }

    #[test]
    fn weights_sum_to_one() {
        let mut rng = Rng::new(9);
        let v = random_view(&mut rng, 60, 3, 2);
        let m = fit_mixture(&v, &SliceHyper { k_hat: 5, ..Default::default() }).unwrap();
        assert!((m.weights.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        assert!(m.weights.iter().all(|&w| w >= 0.0));
        assert!(m.components.iter().all(|c| c.sigma_p.is_symmetric(0.0)));
    }

    #[test]
    fn dimension_mismatch_on_assign() {
        let mut rng = Rng::new(2);
        let v = random_view(&mut rng, 10, 2, 2);
        let m = fit_mixture(&v, &SliceHyper { k_hat: 2, ..Default::default() }).unwrap();
        let w = random_view(&mut rng, 4, 3, 2);
        assert!(matches!(assign(&m, &w), Err(Error::DimensionMismatch { .. })));
    }

    #[test]
    fn report_orders_and_flags() {
        let a = SliceAssignment {
            class_label: 0,
            samples: vec![],
            members: vec![
                vec!["a".into(), "b".into()],
                vec!["c".into()],
                vec![],
                vec!["d".into(), "e".into(), "f".into()],
            ],
        };
        let correctness: BTreeMap<String, bool> = [("a", true), ("b", true), ("c", false), ("d", false), ("e", true), ("f", false)]
            .into_iter()
            .map(|(k, v)| (k.to_string(), v))
            .collect();
        let r = rank_and_report(&[a], &correctness, 2).unwrap();
        let order: Vec<usize> = r.slices.iter().map(|s| s.slice_id).collect();
        assert_eq!(order, vec![1, 3, 0]);
        assert!(r.slices[0].predicted_bias_conflicting);
        assert_eq!(r.slices[2].accuracy, 1.0);
        assert_eq!(r.slices[1].top_k, vec!["d".to_string(), "e".to_string()]);
        assert!(rank_and_report(&[], &correctness, 2).is_err());
    }

    #[test]
    fn tune_single_point_and_failures() {
        let mut rng = Rng::new(4);
        let v = random_view(&mut rng, 30, 2, 2);
        let grid = vec![SliceHyper { k_hat: 3, ..Default::default() }];
        assert_eq!(silhouette_tune(core::slice::from_ref(&v), &grid).unwrap().chosen, grid[0]);
        let failing = SliceHyper {
            k_hat: 0,
            ..Default::default()
        };
        let out = silhouette_tune(core::slice::from_ref(&v), &[failing.clone(), grid[0].clone()]).unwrap();
        assert_eq!(out.chosen_index, 1);
        assert_eq!(out.warnings.len(), 1);
        assert!(silhouette_tune(&[v], &[failing]).is_err());
    }
}
