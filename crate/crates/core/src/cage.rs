//! Generative aggregation of LF firings.
//!
//! Each LF `j` owns one parameter per class, `θ[j][y]`. The joint over a
//! firing vector `l` and a class `y` is
//!
//! ```text
//! P(l, y) = Π_j ψ_j(l_j, y) / Z,   ψ_j(l_j, y) = exp(θ[j][y]) if l_j ≠ 0 else 1
//! Z       = Σ_y Π_j (1 + exp(θ[j][y]))
//! ```
//!
//! where `Z` sums over every class and every fire/abstain pattern. Everything
//! below is evaluated in log space (softplus and log-sum-exp), so `|θ|` in the
//! hundreds is safe.
//!
//! Classes are 1-based in the public API; internally column `y - 1`.

use serde::{Deserialize, Serialize};

use crate::document::ClassVocab;
use crate::error::{Error, Result};

/// Lower clamp on target probabilities inside the KL term.
pub const KL_TARGET_FLOOR: f64 = 1e-9;
/// Clamp on the model precision inside the quality guide.
pub const PRECISION_CLAMP: f64 = 1e-6;

pub(crate) fn softplus(x: f64) -> f64 {
    if x > 0.0 {
        x + (-x).exp().ln_1p()
    } else {
        x.exp().ln_1p()
    }
}

pub(crate) fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

pub(crate) fn log_sum_exp(xs: &[f64]) -> f64 {
    let max = xs.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if max == f64::NEG_INFINITY {
        return max;
    }
    max + xs.iter().map(|x| (x - max).exp()).sum::<f64>().ln()
}

/// Softmax of `xs`, stable for large magnitudes.
pub(crate) fn softmax(xs: &[f64]) -> Vec<f64> {
    let lse = log_sum_exp(xs);
    xs.iter().map(|x| (x - lse).exp()).collect()
}

/// The `m × K` parameter grid plus each LF's attached class.
#[derive(Debug, Clone, PartialEq)]
pub struct ThetaParams {
    n_classes: usize,
    attached: Vec<usize>,
    values: Vec<f64>,
}

impl ThetaParams {
    pub fn new(attached: Vec<usize>, n_classes: usize, values: Vec<f64>) -> Result<Self> {
        if values.len() != attached.len() * n_classes {
            return Err(Error::Shape(format!(
                "theta has {} values, expected {}x{}",
                values.len(),
                attached.len(),
                n_classes
            )));
        }
        if let Some(&k) = attached.iter().find(|&&k| k == 0 || k > n_classes) {
            return Err(Error::Shape(format!("attached class {k} outside 1..={n_classes}")));
        }
        if values.iter().any(|v| !v.is_finite()) {
            return Err(Error::Shape("theta has a non-finite entry".into()));
        }
        Ok(ThetaParams {
            n_classes,
            attached,
            values,
        })
    }

    /// `θ[j][k_j] = 1`, every other entry 0.
    pub fn initial(attached: Vec<usize>, n_classes: usize) -> Self {
        let mut values = vec![0.0; attached.len() * n_classes];
        for (j, &k) in attached.iter().enumerate() {
            values[j * n_classes + k - 1] = 1.0;
        }
        ThetaParams {
            n_classes,
            attached,
            values,
        }
    }

    pub fn n_lfs(&self) -> usize {
        self.attached.len()
    }

    pub fn n_classes(&self) -> usize {
        self.n_classes
    }

    pub fn attached(&self) -> &[usize] {
        &self.attached
    }

    /// `θ[j][y]` for 1-based class `y`.
    pub fn get(&self, j: usize, y: usize) -> f64 {
        self.values[j * self.n_classes + y - 1]
    }

    pub fn set(&mut self, j: usize, y: usize, v: f64) {
        self.values[j * self.n_classes + y - 1] = v;
    }

    /// Row-major values, LF-major.
    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn values_mut(&mut self) -> &mut [f64] {
        &mut self.values
    }

    fn raw(&self, j: usize, c: usize) -> f64 {
        self.values[j * self.n_classes + c]
    }
}

/// A probability vector over classes `1..=K` (stored at `0..K`).
#[derive(Debug, Clone, PartialEq, Serialize)]
#[serde(transparent)]
pub struct ClassDistribution {
    probs: Vec<f64>,
}

impl ClassDistribution {
    pub fn new(probs: Vec<f64>) -> Result<Self> {
        let sum: f64 = probs.iter().sum();
        if probs.is_empty() || probs.iter().any(|&p| !(p >= 0.0)) || (sum - 1.0).abs() > 1e-9 {
            return Err(Error::Shape(format!("not a probability vector: {probs:?}")));
        }
        Ok(ClassDistribution { probs })
    }

    /// Normalized exponentials of unnormalized log weights.
    pub fn from_logits(logits: &[f64]) -> Self {
        ClassDistribution {
            probs: softmax(logits),
        }
    }

    pub fn uniform(k: usize) -> Self {
        ClassDistribution {
            probs: vec![1.0 / k as f64; k],
        }
    }

    pub fn probs(&self) -> &[f64] {
        &self.probs
    }

    /// Probability of 1-based class `y`.
    pub fn prob(&self, y: usize) -> f64 {
        self.probs[y - 1]
    }

    /// 1-based argmax; ties go to the lowest class.
    pub fn argmax(&self) -> usize {
        let mut best = 0;
        for (c, &p) in self.probs.iter().enumerate() {
            if p > self.probs[best] {
                best = c;
            }
        }
        best + 1
    }

    /// Elementwise mean of two distributions.
    pub fn average(&self, other: &ClassDistribution) -> ClassDistribution {
        ClassDistribution {
            probs: self.probs.iter().zip(&other.probs).map(|(a, b)| (a + b) / 2.0).collect(),
        }
    }
}

/// Per-LF precision beliefs `q_j`, clamped to `[eps, 1 - eps]`.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct QualityBeliefs {
    q: Vec<f64>,
}

impl QualityBeliefs {
    pub const DEFAULT_EPS: f64 = 1e-3;

    pub fn new(values: Vec<f64>, eps: f64) -> Self {
        QualityBeliefs {
            q: values.into_iter().map(|v| v.clamp(eps, 1.0 - eps)).collect(),
        }
    }

    pub fn values(&self) -> &[f64] {
        &self.q
    }
}

/// `ψ_j(l_ij, y)`.
pub fn potential(theta: &ThetaParams, j: usize, l_ij: usize, y: usize) -> f64 {
    if l_ij != 0 {
        theta.get(j, y).exp()
    } else {
        1.0
    }
}

/// Per-class log of `Π_j (1 + exp θ[j][y])`.
fn class_log_masses(theta: &ThetaParams) -> Vec<f64> {
    (0..theta.n_classes)
        .map(|c| (0..theta.n_lfs()).map(|j| softplus(theta.raw(j, c))).sum())
        .collect()
}

/// `log Z`.
pub fn log_partition(theta: &ThetaParams) -> f64 {
    log_sum_exp(&class_log_masses(theta))
}

/// Per-class score `Σ_{j fired} θ[j][y]` for a firing vector.
fn fired_scores(theta: &ThetaParams, l: &[usize]) -> Vec<f64> {
    let mut s = vec![0.0; theta.n_classes];
    for (j, &v) in l.iter().enumerate() {
        if v != 0 {
            for (c, sc) in s.iter_mut().enumerate() {
                *sc += theta.raw(j, c);
            }
        }
    }
    s
}

/// `log P(l, y)`.
pub fn log_joint(theta: &ThetaParams, l: &[usize], y: usize) -> f64 {
    fired_scores(theta, l)[y - 1] - log_partition(theta)
}

/// `P(l, y)`.
pub fn joint_prob(theta: &ThetaParams, l: &[usize], y: usize) -> f64 {
    log_joint(theta, l, y).exp()
}

/// `P(y | l)`. Only fired LFs matter; the normalizer cancels.
pub fn posterior(theta: &ThetaParams, l: &[usize]) -> ClassDistribution {
    ClassDistribution::from_logits(&fired_scores(theta, l))
}

/// Result of [`nll_unsupervised`]; `rows == 0` flags an empty input.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct UnsupervisedNll {
    pub loss: f64,
    pub rows: usize,
}

impl UnsupervisedNll {
    pub fn is_empty(&self) -> bool {
        self.rows == 0
    }
}

/// `-Σ_i log Σ_y P(l_i, y)` over rows with at least one firing; all-ABSTAIN
/// rows are skipped.
pub fn nll_unsupervised<'a, I>(theta: &ThetaParams, rows: I) -> UnsupervisedNll
where
    I: IntoIterator<Item = &'a [usize]>,
{
    let log_z = log_partition(theta);
    let mut loss = 0.0;
    let mut n = 0;
    for l in rows {
        if l.iter().all(|&v| v == 0) {
            continue;
        }
        loss += log_z - log_sum_exp(&fired_scores(theta, l));
        n += 1;
    }
    UnsupervisedNll { loss, rows: n }
}

/// Log of the per-class weights used by [`lf_precision_model`]:
/// `a_y = θ[j][y] + Σ_{j'≠j} softplus θ[j'][y]`.
fn precision_logits(theta: &ThetaParams, masses: &[f64], j: usize) -> Vec<f64> {
    (0..theta.n_classes)
        .map(|c| {
            let t = theta.raw(j, c);
            t + masses[c] - softplus(t)
        })
        .collect()
}

/// Model precision of LF `j`: `P(y = k_j | l_j fired)`, marginalizing over all
/// other LFs.
pub fn lf_precision_model(theta: &ThetaParams, j: usize) -> f64 {
    let masses = class_log_masses(theta);
    let a = precision_logits(theta, &masses, j);
    (a[theta.attached[j] - 1] - log_sum_exp(&a)).exp()
}

/// `R(θ | q) = Σ_j q_j log p_j + (1 - q_j) log(1 - p_j)` with `p_j` the model
/// precision clamped to `[1e-6, 1 - 1e-6]`. Always `≤ 0`.
pub fn quality_guide(theta: &ThetaParams, beliefs: &QualityBeliefs) -> f64 {
    (0..theta.n_lfs())
        .map(|j| {
            let p = lf_precision_model(theta, j).clamp(PRECISION_CLAMP, 1.0 - PRECISION_CLAMP);
            let q = beliefs.q[j];
            q * p.ln() + (1.0 - q) * (1.0 - p).ln()
        })
        .sum()
}

/// Term weights for [`grad_theta`].
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ThetaObjective {
    pub nll: f64,
    pub guide: f64,
}

impl Default for ThetaObjective {
    fn default() -> Self {
        ThetaObjective { nll: 1.0, guide: 1.0 }
    }
}

/// Quantities that depend on θ alone, shared by every gradient term of a step.
pub struct ThetaCache {
    masses: Vec<f64>,
    /// `softmax(masses)`, i.e. `∂ log Z / ∂ masses`.
    class_share: Vec<f64>,
    /// `sigmoid(θ)`, row-major.
    sig: Vec<f64>,
}

impl ThetaCache {
    pub fn new(theta: &ThetaParams) -> Self {
        let masses = class_log_masses(theta);
        let class_share = softmax(&masses);
        ThetaCache {
            masses,
            class_share,
            sig: theta.values.iter().map(|&v| sigmoid(v)).collect(),
        }
    }
}

/// Adds `scale · ∂NLL/∂θ` for the given rows into `grad` and returns the NLL
/// of the fired rows together with their count.
pub fn accumulate_nll_grad<'a, I>(
    theta: &ThetaParams,
    cache: &ThetaCache,
    rows: I,
    scale: f64,
    grad: &mut [f64],
) -> UnsupervisedNll
where
    I: IntoIterator<Item = &'a [usize]>,
{
    let k = theta.n_classes;
    let log_z = log_sum_exp(&cache.masses);
    let mut loss = 0.0;
    let mut n = 0usize;
    for l in rows {
        if l.iter().all(|&v| v == 0) {
            continue;
        }
        n += 1;
        let s = fired_scores(theta, l);
        loss += log_z - log_sum_exp(&s);
        let post = softmax(&s);
        for (j, &v) in l.iter().enumerate() {
            if v != 0 {
                for c in 0..k {
                    grad[j * k + c] -= scale * post[c];
                }
            }
        }
    }
    if n > 0 {
        // ∂ log Z / ∂θ[j][y] = share_y · σ(θ[j][y]), once per fired row
        for j in 0..theta.n_lfs() {
            for c in 0..k {
                grad[j * k + c] += scale * n as f64 * cache.class_share[c] * cache.sig[j * k + c];
            }
        }
    }
    UnsupervisedNll { loss, rows: n }
}

/// Adds `scale · ∂R/∂θ` into `grad` and returns `R`.
pub fn accumulate_guide_grad(
    theta: &ThetaParams,
    cache: &ThetaCache,
    beliefs: &QualityBeliefs,
    scale: f64,
    grad: &mut [f64],
) -> f64 {
    let k = theta.n_classes;
    let m = theta.n_lfs();
    // g[j][y] = ∂R_j / ∂a^{(j)}_y
    let mut g = vec![0.0; m * k];
    let mut total = 0.0;
    for j in 0..m {
        let a = precision_logits(theta, &cache.masses, j);
        let r = softmax(&a);
        let kj = theta.attached[j] - 1;
        let p_raw = r[kj];
        let p = p_raw.clamp(PRECISION_CLAMP, 1.0 - PRECISION_CLAMP);
        let q = beliefs.q[j];
        total += q * p.ln() + (1.0 - q) * (1.0 - p).ln();
        if p != p_raw {
            continue;
        }
        let coef = (q - p) / (1.0 - p);
        for c in 0..k {
            let delta = if c == kj { 1.0 } else { 0.0 };
            g[j * k + c] = coef * (delta - r[c]);
        }
    }
    // ∂a^{(j)}_y / ∂θ[i][y] is σ(θ[i][y]) for i ≠ j and 1 for i = j.
    for c in 0..k {
        let col: f64 = (0..m).map(|j| g[j * k + c]).sum();
        for i in 0..m {
            let s = cache.sig[i * k + c];
            grad[i * k + c] += scale * (s * col + g[i * k + c] * (1.0 - s));
        }
    }
    total
}

/// Adds `scale · ∂/∂θ KL(p ‖ P(·|l))` into `grad` for a fixed feature-model
/// distribution `p`, and returns the KL value (target floored at 1e-9).
pub fn accumulate_kl_grad(theta: &ThetaParams, l: &[usize], p: &[f64], scale: f64, grad: &mut [f64]) -> f64 {
    let k = theta.n_classes;
    let t = posterior(theta, l);
    let kl = kl_divergence(p, t.probs());
    for (j, &v) in l.iter().enumerate() {
        if v != 0 {
            for c in 0..k {
                grad[j * k + c] += scale * (t.probs[c] - p[c]);
            }
        }
    }
    kl
}

/// `Σ_y p_y log(p_y / t_y)` with `t` floored at [`KL_TARGET_FLOOR`]; terms
/// with `p_y = 0` contribute 0.
pub fn kl_divergence(p: &[f64], t: &[f64]) -> f64 {
    p.iter()
        .zip(t)
        .filter(|(&pi, _)| pi > 0.0)
        .map(|(&pi, &ti)| pi * (pi.ln() - ti.max(KL_TARGET_FLOOR).ln()))
        .sum()
}

/// Analytic gradient of `w.nll · NLL(rows) - w.guide · R(θ | q)`.
pub fn grad_theta<'a, I>(theta: &ThetaParams, rows: I, beliefs: &QualityBeliefs, w: ThetaObjective) -> Vec<f64>
where
    I: IntoIterator<Item = &'a [usize]>,
{
    let cache = ThetaCache::new(theta);
    let mut grad = vec![0.0; theta.values.len()];
    accumulate_nll_grad(theta, &cache, rows, w.nll, &mut grad);
    accumulate_guide_grad(theta, &cache, beliefs, -w.guide, &mut grad);
    grad
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LfRef {
    pub id: String,
    pub class: String,
}

/// On-disk form of θ.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ThetaSnapshot {
    pub classes: Vec<String>,
    pub lfs: Vec<LfRef>,
    pub theta: Vec<Vec<f64>>,
    pub version: u32,
}

pub const SNAPSHOT_VERSION: u32 = 1;

impl ThetaSnapshot {
    pub fn capture(theta: &ThetaParams, lf_ids: &[String], classes: &ClassVocab) -> Self {
        ThetaSnapshot {
            classes: classes.names().to_vec(),
            lfs: lf_ids
                .iter()
                .zip(&theta.attached)
                .map(|(id, &k)| LfRef {
                    id: id.clone(),
                    class: classes.name(k).unwrap_or_default().to_string(),
                })
                .collect(),
            theta: theta.values.chunks(theta.n_classes.max(1)).map(<[f64]>::to_vec).collect(),
            version: SNAPSHOT_VERSION,
        }
    }

    /// Validates the snapshot against an LF suite (ids and classes, in order).
    pub fn restore(&self, lfs: &[(String, usize)], classes: &ClassVocab) -> Result<ThetaParams> {
        if self.classes != classes.names() {
            return Err(Error::Shape("theta snapshot class list differs from the corpus".into()));
        }
        if self.lfs.len() != lfs.len() || self.theta.len() != lfs.len() {
            return Err(Error::Shape(format!(
                "theta snapshot has {} LFs, suite has {}",
                self.lfs.len(),
                lfs.len()
            )));
        }
        for (snap, (id, k)) in self.lfs.iter().zip(lfs) {
            if &snap.id != id || classes.index_of(&snap.class) != Some(*k) {
                return Err(Error::Shape(format!("theta snapshot LF `{}` does not match suite LF `{id}`", snap.id)));
            }
        }
        if self.theta.iter().any(|r| r.len() != classes.len()) {
            return Err(Error::Shape("theta snapshot row length differs from class count".into()));
        }
        ThetaParams::new(
            lfs.iter().map(|(_, k)| *k).collect(),
            classes.len(),
            self.theta.concat(),
        )
    }
}
