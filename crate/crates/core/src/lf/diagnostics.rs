//! Coverage, overlap and conflict statistics over a label matrix.
//!
//! Definitions follow the usual data-programming conventions:
//! coverage is the fraction of rows where an LF fired, overlap the fraction of
//! rows where at least two LFs fired, conflict the fraction of rows where the
//! fired LFs emitted at least two distinct classes.

use std::fmt;

use serde::Serialize;

use super::matrix::LabelMatrix;
use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct LfStats {
    pub id: String,
    pub class: String,
    pub coverage: f64,
    /// Precision on rows with a gold label; `None` when the LF never fired there.
    pub precision: Option<f64>,
    pub fires: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct LfDiagnostics {
    pub n_instances: usize,
    pub lfs: Vec<LfStats>,
    pub overlap: f64,
    pub conflict: f64,
    /// `pairwise_overlap[a][b]`: fraction of rows where both LF `a` and LF `b` fired.
    pub pairwise_overlap: Vec<Vec<f64>>,
}

impl LfDiagnostics {
    /// Ids of LFs that never fired.
    pub fn silent_lfs(&self) -> Vec<&str> {
        self.lfs.iter().filter(|s| s.fires == 0).map(|s| s.id.as_str()).collect()
    }
}

fn frac(num: usize, den: usize) -> f64 {
    if den == 0 {
        0.0
    } else {
        num as f64 / den as f64
    }
}

/// `gold`, when given, must align with the matrix rows; rows whose gold is
/// `None` are left out of the precision estimate.
pub fn diagnostics(matrix: &LabelMatrix, gold: Option<&[Option<usize>]>) -> Result<LfDiagnostics> {
    let n = matrix.n_instances();
    let m = matrix.n_lfs();
    if let Some(g) = gold {
        if g.len() != n {
            return Err(Error::Shape(format!("{} gold labels for {n} matrix rows", g.len())));
        }
    }

    let mut fires = vec![0usize; m];
    let mut gold_fires = vec![0usize; m];
    let mut correct = vec![0usize; m];
    let mut both = vec![vec![0usize; m]; m];
    let (mut overlapping, mut conflicting) = (0usize, 0usize);

    for i in 0..n {
        let row = matrix.row(i);
        let fired: Vec<usize> = (0..m).filter(|&j| row[j] != 0).collect();
        for &a in &fired {
            fires[a] += 1;
            for &b in &fired {
                both[a][b] += 1;
            }
            if let Some(Some(y)) = gold.map(|g| g[i]) {
                gold_fires[a] += 1;
                if y == row[a] {
                    correct[a] += 1;
                }
            }
        }
        if fired.len() >= 2 {
            overlapping += 1;
            if fired.iter().any(|&j| row[j] != row[fired[0]]) {
                conflicting += 1;
            }
        }
    }

    let lfs = (0..m)
        .map(|j| LfStats {
            id: matrix.lf_ids[j].clone(),
            class: matrix.classes.name(matrix.attached[j]).unwrap_or("?").to_string(),
            coverage: frac(fires[j], n),
            precision: (gold.is_some() && gold_fires[j] > 0).then(|| frac(correct[j], gold_fires[j])),
            fires: fires[j],
        })
        .collect();

    Ok(LfDiagnostics {
        n_instances: n,
        lfs,
        overlap: frac(overlapping, n),
        conflict: frac(conflicting, n),
        pairwise_overlap: both
            .iter()
            .map(|r| r.iter().map(|&c| frac(c, n)).collect())
            .collect(),
    })
}

impl fmt::Display for LfDiagnostics {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let id_w = self.lfs.iter().map(|s| s.id.len()).max().unwrap_or(0).max(2);
        let cls_w = self.lfs.iter().map(|s| s.class.len()).max().unwrap_or(0).max(5);
        writeln!(
            f,
            "{:<id_w$}  {:<cls_w$}  {:>8}  {:>9}  {:>6}",
            "id", "class", "coverage", "precision", "fires"
        )?;
        for s in &self.lfs {
            let p = s.precision.map_or_else(|| "-".to_string(), |p| format!("{p:.3}"));
            writeln!(
                f,
                "{:<id_w$}  {:<cls_w$}  {:>8.3}  {:>9}  {:>6}",
                s.id, s.class, s.coverage, p, s.fires
            )?;
        }
        writeln!(f, "overlap   {:.3}", self.overlap)?;
        write!(f, "conflict  {:.3}", self.conflict)
    }
}
