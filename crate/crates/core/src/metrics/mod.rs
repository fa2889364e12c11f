//! Screening metrics with abnormal as the positive class.
//!
//! Se, Sp and Score are percentages; F1 is a fraction. Zero denominators
//! report 0 and raise a flag instead of failing, so one degenerate fold does
//! not abort an experiment.

use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::datasets::BinaryLabel;
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct Confusion {
    pub tp: usize,
    pub tn: usize,
    pub fp: usize,
    #[serde(rename = "fn")]
    pub fn_: usize,
}

impl Confusion {
    pub fn total(&self) -> usize {
        self.tp + self.tn + self.fp + self.fn_
    }

    /// The same counts with normal treated as positive.
    pub fn swapped(&self) -> Self {
        Self {
            tp: self.tn,
            tn: self.tp,
            fp: self.fn_,
            fn_: self.fp,
        }
    }
}

pub fn confusion(labels: &[BinaryLabel], preds: &[BinaryLabel]) -> Result<Confusion> {
    if labels.len() != preds.len() {
        return Err(Error::invalid(format!(
            "{} labels but {} predictions",
            labels.len(),
            preds.len()
        )));
    }
    if labels.is_empty() {
        return Err(Error::invalid("no samples to score"));
    }
    let mut c = Confusion::default();
    for (&y, &p) in labels.iter().zip(preds) {
        match (y, p) {
            (BinaryLabel::Abnormal, BinaryLabel::Abnormal) => c.tp += 1,
            (BinaryLabel::Normal, BinaryLabel::Normal) => c.tn += 1,
            (BinaryLabel::Normal, BinaryLabel::Abnormal) => c.fp += 1,
            (BinaryLabel::Abnormal, BinaryLabel::Normal) => c.fn_ += 1,
        }
    }
    Ok(c)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Metrics {
    pub se: f64,
    pub sp: f64,
    pub score: f64,
    pub f1: f64,
    /// Some denominator was zero and the affected metric was set to 0.
    pub degenerate: bool,
}

fn ratio(num: usize, den: usize, degenerate: &mut bool) -> f64 {
    if den == 0 {
        *degenerate = true;
        0.0
    } else {
        num as f64 / den as f64
    }
}

pub fn compute_metrics(c: &Confusion) -> Result<Metrics> {
    if c.total() == 0 {
        return Err(Error::invalid("all-zero confusion counts"));
    }
    let mut degenerate = false;
    let se = 100.0 * ratio(c.tp, c.tp + c.fn_, &mut degenerate);
    let sp = 100.0 * ratio(c.tn, c.tn + c.fp, &mut degenerate);
    let f1 = ratio(2 * c.tp, 2 * c.tp + c.fp + c.fn_, &mut degenerate);
    Ok(Metrics {
        se,
        sp,
        score: (se + sp) / 2.0,
        f1,
        degenerate,
    })
}

/// Unweighted mean of the per-class F1 values.
pub fn macro_f1(c: &Confusion) -> Result<f64> {
    Ok((compute_metrics(c)?.f1 + compute_metrics(&c.swapped())?.f1) / 2.0)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Aggregate {
    pub mean: f64,
    /// Sample standard deviation (n - 1 denominator).
    pub sd: f64,
    /// Only one value was aggregated; `sd` is reported as 0.
    pub single: bool,
}

pub fn aggregate(values: &[f64]) -> Result<Aggregate> {
    let n = values.len();
    if n == 0 {
        return Err(Error::invalid("nothing to aggregate"));
    }
    let mean = values.iter().sum::<f64>() / n as f64;
    if n == 1 {
        return Ok(Aggregate {
            mean,
            sd: 0.0,
            single: true,
        });
    }
    let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1) as f64;
    Ok(Aggregate {
        mean,
        sd: var.sqrt(),
        single: false,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FoldResult {
    pub fold: usize,
    pub confusion: Confusion,
    pub metrics: Metrics,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub macro_f1: Option<f64>,
}

impl FoldResult {
    pub fn new(fold: usize, confusion: Confusion, with_macro_f1: bool) -> Result<Self> {
        Ok(Self {
            fold,
            metrics: compute_metrics(&confusion)?,
            macro_f1: if with_macro_f1 { Some(macro_f1(&confusion)?) } else { None },
            confusion,
        })
    }
}

/// Per-fold results and their mean ± SD for one setup.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub setup: u8,
    pub title: String,
    pub folds: Vec<FoldResult>,
    pub se: Aggregate,
    pub sp: Aggregate,
    pub score: Aggregate,
    pub f1: Aggregate,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub macro_f1: Option<Aggregate>,
    /// Echo of the configuration that produced the report.
    #[serde(default)]
    pub config: serde_json::Value,
}

impl MetricsReport {
    pub fn from_folds(
        setup: u8,
        title: impl Into<String>,
        folds: Vec<FoldResult>,
        config: serde_json::Value,
    ) -> Result<Self> {
        let col = |f: fn(&FoldResult) -> f64| -> Result<Aggregate> {
            aggregate(&folds.iter().map(f).collect::<Vec<_>>())
        };
        let macro_f1 = if folds.iter().all(|f| f.macro_f1.is_some()) && !folds.is_empty() {
            Some(col(|f| f.macro_f1.unwrap_or(0.0))?)
        } else {
            None
        };
        Ok(Self {
            setup,
            title: title.into(),
            se: col(|f| f.metrics.se)?,
            sp: col(|f| f.metrics.sp)?,
            score: col(|f| f.metrics.score)?,
            f1: col(|f| f.metrics.f1)?,
            macro_f1,
            folds,
            config,
        })
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub fn from_json(text: &str) -> Result<Self> {
        Ok(serde_json::from_str(text)?)
    }
}

/// Plain-text table with one row per report: `Method | SP (%) | SE (%) | Score (%) | F1 Score`.
pub fn render_table(reports: &[MetricsReport]) -> String {
    let pm = |a: &Aggregate, d: usize| format!("{:.d$} ± {:.d$}", a.mean, a.sd);
    let rows: Vec<[String; 5]> = reports
        .iter()
        .map(|r| {
            [
                r.title.clone(),
                pm(&r.sp, 2),
                pm(&r.se, 2),
                pm(&r.score, 2),
                pm(&r.f1, 4),
            ]
        })
        .collect();
    let header = ["Method", "SP (%)", "SE (%)", "Score (%)", "F1 Score"];
    let widths: Vec<usize> = (0..5)
        .map(|c| {
            rows.iter()
                .map(|r| r[c].chars().count())
                .chain([header[c].len()])
                .max()
                .unwrap_or(0)
        })
        .collect();
    let line = |cells: &[&str]| {
        let mut s = String::new();
        for (c, cell) in cells.iter().enumerate() {
            let pad = widths[c] - cell.chars().count();
            if c == 0 {
                write!(s, "| {cell}{} ", " ".repeat(pad)).expect("string write");
            } else {
                write!(s, "| {}{cell} ", " ".repeat(pad)).expect("string write");
            }
        }
        s.push_str("|\n");
        s
    };
    let rule: Vec<String> = widths.iter().map(|w| "-".repeat(*w)).collect();
    let mut out = line(&header);
    out.push_str(&line(&rule.iter().map(String::as_str).collect::<Vec<_>>()));
    for r in &rows {
        out.push_str(&line(&r.iter().map(String::as_str).collect::<Vec<_>>()));
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use BinaryLabel::{Abnormal as A, Normal as N};

    #[test]
    fn confusion_examples() {
        let c = confusion(&[N, N, N, A, A], &[N, N, N, A, A]).unwrap();
        assert_eq!(c, Confusion { tp: 2, tn: 3, fp: 0, fn_: 0 });
        let labels: Vec<_> = [vec![N; 185], vec![A; 74]].concat();
        let c = confusion(&labels, &vec![N; 259]).unwrap();
        assert_eq!(c, Confusion { tp: 0, tn: 185, fp: 0, fn_: 74 });
        let c = confusion(&[N, N, A, A, A], &[N, A, A, A, N]).unwrap();
        assert_eq!(c, Confusion { tp: 2, tn: 1, fp: 1, fn_: 1 });
        assert!(confusion(&[N], &[N, A]).is_err());
        assert!(confusion(&[], &[]).is_err());
    }

    #[test]
    fn metric_examples() {
        let m = compute_metrics(&Confusion { tp: 5, tn: 7, fp: 0, fn_: 0 }).unwrap();
        assert_eq!((m.se, m.sp, m.score, m.f1), (100.0, 100.0, 100.0, 1.0));
        let m = compute_metrics(&Confusion { tp: 0, tn: 185, fp: 0, fn_: 74 }).unwrap();
        assert_eq!((m.se, m.sp, m.score, m.f1), (0.0, 100.0, 50.0, 0.0));
        assert!(!m.degenerate);
        let m = compute_metrics(&Confusion { tp: 2, tn: 1, fp: 1, fn_: 1 }).unwrap();
        assert_eq!(format!("{:.2} {:.2} {:.2} {:.3}", m.se, m.sp, m.score, m.f1), "66.67 50.00 58.33 0.667");
        assert!(compute_metrics(&Confusion::default()).is_err());
    }

    #[test]
    fn zero_denominators_flag_instead_of_failing() {
        let m = compute_metrics(&Confusion { tp: 0, tn: 4, fp: 0, fn_: 0 }).unwrap();
        assert!(m.degenerate);
        assert_eq!((m.se, m.sp, m.f1), (0.0, 100.0, 0.0));
    }

    #[test]
    fn aggregate_examples() {
        let a = aggregate(&[1.0, 2.0, 3.0]).unwrap();
        assert_eq!((a.mean, a.sd), (2.0, 1.0));
        assert_eq!(aggregate(&[4.5; 5]).unwrap().sd, 0.0);
        let a = aggregate(&[80.4, 85.4, 86.9, 87.3, 77.8]).unwrap();
        // statistics.stdev in CPython gives 4.233556424567884
        assert!((a.mean - 83.56).abs() < 1e-9);
        assert!((a.sd - 4.233_556_424_567_884).abs() < 1e-9);
        let one = aggregate(&[7.0]).unwrap();
        assert!(one.single && one.sd == 0.0);
        assert!(aggregate(&[]).is_err());
    }

    #[test]
    fn report_round_trips_and_renders() {
        let folds = vec![
            FoldResult::new(0, Confusion { tp: 2, tn: 1, fp: 1, fn_: 1 }, true).unwrap(),
            FoldResult::new(1, Confusion { tp: 3, tn: 4, fp: 0, fn_: 1 }, true).unwrap(),
        ];
        let r = MetricsReport::from_folds(3, "AST (Combined w MixStyle)", folds, serde_json::json!({"seed": 1})).unwrap();
        assert!(r.macro_f1.is_some());
        let back = MetricsReport::from_json(&r.to_json().unwrap()).unwrap();
        assert_eq!(back, r);
        let table = render_table(&[r]);
        let lines: Vec<&str> = table.lines().collect();
        assert_eq!(lines.len(), 3);
        assert!(lines[0].starts_with("| Method"));
        assert!(lines[0].contains("SP (%)") && lines[0].contains("F1 Score"));
        assert!(lines[2].contains("AST (Combined w MixStyle)") && lines[2].contains(" ± "));
        let widths: Vec<usize> = lines.iter().map(|l| l.chars().count()).collect();
        assert!(widths.iter().all(|&w| w == widths[0]));
    }

    fn arb_pairs() -> impl Strategy<Value = (Vec<BinaryLabel>, Vec<BinaryLabel>)> {
        let label = prop_oneof![Just(N), Just(A)];
        (1usize..60).prop_flat_map(move |n| {
            (
                prop::collection::vec(label.clone(), n),
                prop::collection::vec(label.clone(), n),
            )
        })
    }

    proptest! {
        #[test]
        fn swapping_classes_swaps_se_and_sp((y, p) in arb_pairs()) {
            let flip = |v: &[BinaryLabel]| v.iter().map(|l| l.flipped()).collect::<Vec<_>>();
            let a = compute_metrics(&confusion(&y, &p).unwrap()).unwrap();
            let b = compute_metrics(&confusion(&flip(&y), &flip(&p)).unwrap()).unwrap();
            prop_assert_eq!(a.se, b.sp);
            prop_assert_eq!(a.sp, b.se);
            prop_assert!((a.score - b.score).abs() < 1e-12);
        }

        #[test]
        fn perfect_predictions_score_full_marks(y in prop::collection::vec(prop_oneof![Just(N), Just(A)], 2..50)) {
            prop_assume!(y.contains(&N) && y.contains(&A));
            let m = compute_metrics(&confusion(&y, &y).unwrap()).unwrap();
            prop_assert_eq!((m.se, m.sp, m.score, m.f1), (100.0, 100.0, 100.0, 1.0));
        }
    }
}
