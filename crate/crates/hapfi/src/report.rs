//! Structured text for evaluation and ablation results. The CSV forms are
//! the machine-readable output; `pretty_*` renders aligned tables.

use std::fmt::Write;

use hapfi_core::dataset::{ModalityMask, Split};
use hapfi_core::trainer::{EvalReport, LossPoint, SplitReport};

pub const EVAL_HEADER: &str = "label,split,steps,action,object,receptacle,total";

fn pct(x: f64) -> String {
    format!("{x:.2}")
}

fn accuracies(r: &SplitReport) -> [String; 4] {
    [
        pct(r.action_accuracy()),
        pct(r.object_accuracy()),
        pct(r.receptacle_accuracy()),
        pct(r.total_accuracy()),
    ]
}

/// One row per split.
pub fn eval_csv(reports: &[EvalReport]) -> String {
    let mut out = String::from(EVAL_HEADER);
    out.push('\n');
    for rep in reports {
        for (split, r) in &rep.splits {
            let [a, o, rc, t] = accuracies(r);
            let _ = writeln!(out, "{},{},{},{a},{o},{rc},{t}", rep.label, split.name(), r.steps);
        }
    }
    out
}

fn mask_columns() -> Vec<&'static str> {
    ModalityMask::full().flags().iter().map(|(n, _)| *n).collect()
}

/// Header for an ablation grid over `splits`: the label, one 0/1 column per
/// modality, then action/object/receptacle/total per split.
pub fn ablation_header(splits: &[Split]) -> String {
    let mut cols: Vec<String> = vec!["label".into()];
    cols.extend(mask_columns().into_iter().map(String::from));
    for s in splits {
        for h in ["action", "object", "receptacle", "total"] {
            cols.push(format!("{}_{h}", s.name()));
        }
    }
    cols.join(",")
}

pub fn ablation_csv(reports: &[EvalReport], splits: &[Split]) -> String {
    let mut out = ablation_header(splits);
    out.push('\n');
    for rep in reports {
        let mut cols = vec![rep.label.clone()];
        cols.extend(rep.mask.flags().iter().map(|(_, on)| if *on { "1" } else { "0" }.to_string()));
        for s in splits {
            match rep.split(*s) {
                Some(r) => cols.extend(accuracies(r)),
                None => cols.extend(std::iter::repeat(String::new()).take(4)),
            }
        }
        out.push_str(&cols.join(","));
        out.push('\n');
    }
    out
}

pub fn loss_csv(points: &[LossPoint], with_header: bool) -> String {
    let mut out = String::new();
    if with_header {
        out.push_str("step,loss\n");
    }
    for p in points {
        let _ = writeln!(out, "{},{}", p.step, p.loss);
    }
    out
}

/// Renders any comma-separated table with aligned columns.
pub fn pretty(csv: &str) -> String {
    let rows: Vec<Vec<&str>> = csv.lines().map(|l| l.split(',').collect()).collect();
    let ncols = rows.iter().map(Vec::len).max().unwrap_or(0);
    let widths: Vec<usize> = (0..ncols)
        .map(|c| rows.iter().filter_map(|r| r.get(c)).map(|s| s.len()).max().unwrap_or(0))
        .collect();
    let mut out = String::new();
    for (i, r) in rows.iter().enumerate() {
        let cells: Vec<String> = r
            .iter()
            .enumerate()
            .map(|(c, s)| {
                if c == 0 {
                    format!("{s:<w$}", w = widths[c])
                } else {
                    format!("{s:>w$}", w = widths[c])
                }
            })
            .collect();
        out.push_str(cells.join("  ").trim_end());
        out.push('\n');
        if i == 0 {
            let total: usize = widths.iter().sum::<usize>() + 2 * ncols.saturating_sub(1);
            out.push_str(&"-".repeat(total));
            out.push('\n');
        }
    }
    out
}
