//! Scores a slice report against the planted bias-conflicting cells.

use std::collections::BTreeSet;

use facts_core::dataset::Dataset;
use facts_core::metrics;
use facts_core::slicing::SliceReport;
use facts_core::synth::ground_truth_slices;
use facts_core::Error as CoreError;
use serde::{Deserialize, Serialize};

use crate::error::Result;

pub const DEFAULT_CURVE_KS: [usize; 6] = [1, 5, 10, 20, 50, 100];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PrecisionCurve {
    pub class: usize,
    pub ks: Vec<usize>,
    pub precision: Vec<f64>,
}

/// Bias-amplification diagnostics of the model behind a report.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AmplificationMetrics {
    pub lambda_star: f64,
    /// Avg-AP of the likelihood ranking on the fit split.
    pub ranking_avg_ap: f64,
    /// Aligned minus conflicting accuracy on the assignment split.
    pub gt_acc_gap: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalMetrics {
    pub k: usize,
    pub precision_at_k: f64,
    /// Avg-AP of the per-class ranking induced by the report (slices in
    /// report order, members by density); `null` without conflicting samples.
    pub avg_ap: Option<f64>,
    pub avg_slice_recall: f64,
    pub avg_slice_ap: f64,
    /// `null` when no reported slice has 6 conflicting members in its top 10.
    pub slice_ranking_ap: Option<f64>,
    pub precision_curves: Vec<PrecisionCurve>,
    pub num_gt_slices: usize,
    pub num_pred_slices: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub amplification: Option<AmplificationMetrics>,
}

fn defined(r: std::result::Result<f64, CoreError>) -> Result<Option<f64>> {
    match r {
        Ok(v) => Ok(Some(v)),
        Err(CoreError::UndefinedMetric(_)) => Ok(None),
        Err(e) => Err(e.into()),
    }
}

/// Per-class rankings induced by the report: members of the class's slices
/// concatenated in report order.
pub fn class_rankings(report: &SliceReport) -> Vec<(usize, Vec<String>)> {
    let classes: BTreeSet<usize> = report.slices.iter().map(|s| s.class_label).collect();
    classes
        .into_iter()
        .map(|c| {
            let ranking = report.class_slices(c).flat_map(|s| s.members.iter().cloned()).collect();
            (c, ranking)
        })
        .collect()
}

/// Evaluates `report` on the samples it covers. Ground-truth slices are the
/// dataset's conflicting cells restricted to those samples.
pub fn evaluate(dataset: &Dataset, report: &SliceReport, k: usize, curve_ks: &[usize]) -> Result<EvalMetrics> {
    let universe: BTreeSet<&str> = report.slices.iter().flat_map(|s| s.members.iter().map(String::as_str)).collect();
    let gt: Vec<(usize, BTreeSet<String>)> = ground_truth_slices(dataset, None)?
        .into_iter()
        .map(|c| (c.label, c.ids.into_iter().filter(|id| universe.contains(id.as_str())).collect::<BTreeSet<_>>()))
        .filter(|(_, ids)| !ids.is_empty())
        .collect();
    let gt_sets: Vec<BTreeSet<String>> = gt.iter().map(|(_, s)| s.clone()).collect();
    let orderings = report.orderings();
    let precision_at_k = metrics::precision_at_k(&gt_sets, &orderings, k)?;
    let recall_ap = metrics::slice_match_recall_ap(&gt_sets, &orderings)?;
    let conflicting: BTreeSet<String> = gt_sets.iter().flatten().cloned().collect();
    let slice_ranking_ap = defined(metrics::slice_ranking_ap(&orderings, &conflicting))?;

    let rankings = class_rankings(report);
    let per_class: Vec<(Vec<String>, BTreeSet<String>)> = rankings
        .iter()
        .map(|(c, r)| {
            let positives = gt.iter().filter(|(l, _)| l == c).flat_map(|(_, s)| s.iter().cloned()).collect();
            (r.clone(), positives)
        })
        .collect();
    let avg_ap = defined(metrics::avg_ap(&per_class))?;
    let precision_curves = rankings
        .iter()
        .zip(&per_class)
        .map(|((c, r), (_, pos))| PrecisionCurve {
            class: *c,
            ks: curve_ks.to_vec(),
            precision: metrics::precision_curve(r, pos, curve_ks),
        })
        .collect();
    Ok(EvalMetrics {
        k,
        precision_at_k,
        avg_ap,
        avg_slice_recall: recall_ap.avg_recall,
        avg_slice_ap: recall_ap.avg_ap,
        slice_ranking_ap,
        precision_curves,
        num_gt_slices: gt_sets.len(),
        num_pred_slices: report.slices.len(),
        amplification: None,
    })
}
