//! Human-readable Markdown summary of a slice report.

use std::fmt::Write;

use facts_core::slicing::SliceReport;

use crate::eval::EvalMetrics;

/// Renders the `depth` lowest-accuracy slices of every class, followed by
/// evaluation metrics when available.
pub fn render_markdown(report: &SliceReport, metrics: Option<&EvalMetrics>, depth: usize) -> String {
    let mut out = String::new();
    let _ = writeln!(out, "# Slice report\n");
    let mut classes: Vec<usize> = report.slices.iter().map(|s| s.class_label).collect();
    classes.sort_unstable();
    classes.dedup();
    for c in classes {
        let _ = writeln!(out, "## Class {c}\n");
        let _ = writeln!(out, "| rank | slice | accuracy | size | flagged | top members |");
        let _ = writeln!(out, "|---:|---:|---:|---:|:---:|---|");
        for s in report.class_slices(c).take(depth) {
            let _ = writeln!(
                out,
                "| {} | {} | {:.3} | {} | {} | {} |",
                s.rank,
                s.slice_id,
                s.accuracy,
                s.size,
                if s.predicted_bias_conflicting { "yes" } else { "" },
                s.top_k.join(", ")
            );
        }
        out.push('\n');
    }
    if let Some(m) = metrics {
        let opt = |v: Option<f64>| v.map_or_else(|| "n/a".to_string(), |v| format!("{v:.4}"));
        let _ = writeln!(out, "## Metrics\n");
        let _ = writeln!(out, "| metric | value |");
        let _ = writeln!(out, "|---|---:|");
        let _ = writeln!(out, "| Precision@{} | {:.4} |", m.k, m.precision_at_k);
        let _ = writeln!(out, "| Avg-AP | {} |", opt(m.avg_ap));
        let _ = writeln!(out, "| Avg slice recall | {:.4} |", m.avg_slice_recall);
        let _ = writeln!(out, "| Avg slice AP | {:.4} |", m.avg_slice_ap);
        let _ = writeln!(out, "| Slice ranking AP | {} |", opt(m.slice_ranking_ap));
        if let Some(a) = &m.amplification {
            let _ = writeln!(out, "| λ* | {} |", a.lambda_star);
            let _ = writeln!(out, "| Ranking Avg-AP | {:.4} |", a.ranking_avg_ap);
            let _ = writeln!(out, "| GT accuracy gap | {:.4} |", a.gt_acc_gap);
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use facts_core::slicing::ReportedSlice;

    fn slice(class: usize, id: usize, rank: usize, accuracy: f64) -> ReportedSlice {
        ReportedSlice {
            class_label: class,
            slice_id: id,
            rank,
            accuracy,
            size: 3,
            top_k: vec!["a".into(), "b".into()],
            members: vec!["a".into(), "b".into(), "c".into()],
            predicted_bias_conflicting: accuracy < 0.5,
        }
    }

    #[test]
    fn depth_limits_rows_per_class() {
        let report = SliceReport {
            top_k: 2,
            slices: vec![slice(0, 1, 0, 0.0), slice(1, 0, 1, 0.2), slice(0, 0, 2, 0.9)],
        };
        let md = render_markdown(&report, None, 1);
        assert!(md.contains("## Class 0") && md.contains("## Class 1"));
        assert_eq!(md.matches("| a, b |").count(), 2);
        assert!(md.contains("| 0 | 1 | 0.000 | 3 | yes | a, b |"));
    }
}
