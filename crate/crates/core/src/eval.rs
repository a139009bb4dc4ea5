//! Token-level scoring: confusion matrix, per-class and averaged P/R/F1.
//!
//! Zero denominators give 0, never NaN. Both micro and macro averages are
//! always reported; macro-F1 is the headline number.

use std::fmt;

use serde::Serialize;

use crate::document::ClassVocab;
use crate::error::{Error, Result};

/// Deltas larger than this are flagged by [`compare`].
pub const DELTA_FLAG: f64 = 0.005;

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct Prf {
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
}

impl Prf {
    fn from_counts(tp: usize, fp: usize, fn_: usize) -> Self {
        let ratio = |a: usize, b: usize| if b == 0 { 0.0 } else { a as f64 / b as f64 };
        let precision = ratio(tp, tp + fp);
        let recall = ratio(tp, tp + fn_);
        Prf {
            precision,
            recall,
            f1: harmonic(precision, recall),
        }
    }
}

fn harmonic(p: f64, r: f64) -> f64 {
    if p + r == 0.0 {
        0.0
    } else {
        2.0 * p * r / (p + r)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ClassScore {
    pub class: String,
    pub support: usize,
    #[serde(flatten)]
    pub prf: Prf,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct EvalReport {
    pub classes: Vec<String>,
    /// `confusion[gold - 1][pred - 1]`.
    pub confusion: Vec<Vec<usize>>,
    pub per_class: Vec<ClassScore>,
    pub micro: Prf,
    pub macro_avg: Prf,
    pub accuracy: f64,
    pub n: usize,
}

impl EvalReport {
    pub fn from_confusion(classes: &ClassVocab, confusion: Vec<Vec<usize>>) -> Result<Self> {
        let k = classes.len();
        if confusion.len() != k || confusion.iter().any(|r| r.len() != k) {
            return Err(Error::Shape(format!("confusion matrix must be {k}x{k}")));
        }
        let n: usize = confusion.iter().flatten().sum();
        let mut per_class = Vec::with_capacity(k);
        let (mut tp_all, mut fp_all, mut fn_all) = (0, 0, 0);
        for c in 0..k {
            let tp = confusion[c][c];
            let fp: usize = (0..k).filter(|&g| g != c).map(|g| confusion[g][c]).sum();
            let fn_: usize = (0..k).filter(|&p| p != c).map(|p| confusion[c][p]).sum();
            tp_all += tp;
            fp_all += fp;
            fn_all += fn_;
            per_class.push(ClassScore {
                class: classes.name(c + 1).unwrap_or_default().to_string(),
                support: tp + fn_,
                prf: Prf::from_counts(tp, fp, fn_),
            });
        }
        let mean = |f: fn(&Prf) -> f64| {
            if k == 0 {
                0.0
            } else {
                per_class.iter().map(|s| f(&s.prf)).sum::<f64>() / k as f64
            }
        };
        let macro_avg = Prf {
            precision: mean(|p| p.precision),
            recall: mean(|p| p.recall),
            f1: mean(|p| p.f1),
        };
        Ok(EvalReport {
            classes: classes.names().to_vec(),
            micro: Prf::from_counts(tp_all, fp_all, fn_all),
            macro_avg,
            accuracy: if n == 0 { 0.0 } else { tp_all as f64 / n as f64 },
            per_class,
            confusion,
            n,
        })
    }

    /// Macro-F1 over the classes not named in `ignore`.
    pub fn macro_f1_excluding(&self, ignore: &[&str]) -> f64 {
        let kept: Vec<f64> = self
            .per_class
            .iter()
            .filter(|s| !ignore.contains(&s.class.as_str()))
            .map(|s| s.prf.f1)
            .collect();
        if kept.is_empty() {
            0.0
        } else {
            kept.iter().sum::<f64>() / kept.len() as f64
        }
    }

    /// Report over the union of two disjoint evaluation sets.
    pub fn merge(&self, other: &EvalReport) -> Result<Self> {
        if self.classes != other.classes {
            return Err(Error::Shape("cannot merge reports over different classes".into()));
        }
        let confusion = self
            .confusion
            .iter()
            .zip(&other.confusion)
            .map(|(a, b)| a.iter().zip(b).map(|(x, y)| x + y).collect())
            .collect();
        EvalReport::from_confusion(&ClassVocab::new(self.classes.clone())?, confusion)
    }

    fn headline(&self) -> Vec<(String, f64)> {
        let mut out = vec![
            ("accuracy".to_string(), self.accuracy),
            ("macro_precision".to_string(), self.macro_avg.precision),
            ("macro_recall".to_string(), self.macro_avg.recall),
            ("macro_f1".to_string(), self.macro_avg.f1),
            ("micro_f1".to_string(), self.micro.f1),
        ];
        for s in &self.per_class {
            out.push((format!("f1[{}]", s.class), s.prf.f1));
        }
        out
    }
}

/// Scores aligned gold/predicted labels (1-based classes).
pub fn score(gold: &[usize], pred: &[usize], classes: &ClassVocab) -> Result<EvalReport> {
    if gold.len() != pred.len() {
        return Err(Error::Shape(format!("{} gold labels but {} predictions", gold.len(), pred.len())));
    }
    let k = classes.len();
    let mut confusion = vec![vec![0usize; k]; k];
    for (&g, &p) in gold.iter().zip(pred) {
        if g == 0 || g > k || p == 0 || p > k {
            return Err(Error::Shape(format!("label pair ({g}, {p}) outside 1..={k}")));
        }
        confusion[g - 1][p - 1] += 1;
    }
    EvalReport::from_confusion(classes, confusion)
}

impl fmt::Display for EvalReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let w = self.classes.iter().map(String::len).max().unwrap_or(0).max(9);
        writeln!(f, "{:<w$}  {:>9}  {:>9}  {:>9}  {:>7}", "class", "precision", "recall", "f1", "support")?;
        for s in &self.per_class {
            writeln!(
                f,
                "{:<w$}  {:>9.4}  {:>9.4}  {:>9.4}  {:>7}",
                s.class, s.prf.precision, s.prf.recall, s.prf.f1, s.support
            )?;
        }
        for (name, p) in [("macro", &self.macro_avg), ("micro", &self.micro)] {
            writeln!(
                f,
                "{:<w$}  {:>9.4}  {:>9.4}  {:>9.4}  {:>7}",
                name, p.precision, p.recall, p.f1, self.n
            )?;
        }
        write!(f, "accuracy {:.4} over {} tokens", self.accuracy, self.n)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct DeltaRow {
    pub metric: String,
    pub a: f64,
    pub b: f64,
    pub delta: f64,
    pub flagged: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct DeltaTable {
    pub rows: Vec<DeltaRow>,
}

/// Per-metric `b - a`, flagged when `|b - a| > 0.005`.
pub fn compare(a: &EvalReport, b: &EvalReport) -> Result<DeltaTable> {
    if a.classes != b.classes {
        return Err(Error::Shape("reports use different class vocabularies".into()));
    }
    let rows = a
        .headline()
        .into_iter()
        .zip(b.headline())
        .map(|((metric, va), (_, vb))| delta_row(metric, va, vb))
        .collect();
    Ok(DeltaTable { rows })
}

pub(crate) fn delta_row(metric: String, a: f64, b: f64) -> DeltaRow {
    let delta = b - a;
    DeltaRow {
        metric,
        a,
        b,
        delta,
        flagged: delta.abs() > DELTA_FLAG,
    }
}

impl fmt::Display for DeltaTable {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let w = self.rows.iter().map(|r| r.metric.len()).max().unwrap_or(0).max(6);
        write!(f, "{:<w$}  {:>8}  {:>8}  {:>8}", "metric", "a", "b", "delta")?;
        for r in &self.rows {
            write!(
                f,
                "\n{:<w$}  {:>8.4}  {:>8.4}  {:>+8.4}{}",
                r.metric,
                r.a,
                r.b,
                r.delta,
                if r.flagged { "  *" } else { "" }
            )?;
        }
        Ok(())
    }
}
