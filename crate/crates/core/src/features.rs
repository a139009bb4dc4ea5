//! Token featurizer and the linear softmax classifier trained on top of it.
//!
//! A feature vector has a fixed dense block and a sparse block of hashed
//! indicator features. Hashing is 64-bit FNV-1a keyed with a fixed seed per
//! feature family, reduced modulo `H = 2^hash_bits`.

use std::hash::Hasher;

use fnv::FnvHasher;
use serde::{Deserialize, Serialize};

use crate::cage::{kl_divergence, softmax, ClassDistribution, KL_TARGET_FLOOR};
use crate::document::{ClassVocab, Corpus};
use crate::error::{Error, Result};
use crate::lf::{context_of, ContextParams, ContextToken, Direction, PageLayout};

/// `[center x, center y, width, height, ln(1 + chars), digit, uppercase, punctuation fractions]`
pub const DENSE_DIM: usize = 8;
pub const DEFAULT_HASH_BITS: u32 = 18;

const SEED_TOKEN: u64 = 0x9e37_79b9_7f4a_7c15;
const SEED_SHAPE: u64 = 0xc2b2_ae3d_27d4_eb4f;
const SEED_TRIGRAM: u64 = 0x1656_67b1_9e37_79f9;
const SEED_LEFT: u64 = 0x27d4_eb2f_1656_67c5;
const SEED_RIGHT: u64 = 0x94d0_49bb_1331_11eb;

const NO_NEIGHBOR: &str = "\u{0}none";

#[derive(Debug, Clone, PartialEq)]
pub struct FeatureVector {
    pub dense: [f64; DENSE_DIM],
    /// Sorted, deduplicated hashed indices, each `< H`.
    pub sparse: Vec<u32>,
}

/// Letters become `x`/`X`, digits `9`, anything else `#`; runs collapse.
pub fn word_shape(text: &str) -> String {
    let mut out = String::new();
    for ch in text.chars() {
        let s = if ch.is_uppercase() {
            'X'
        } else if ch.is_alphabetic() {
            'x'
        } else if ch.is_numeric() {
            '9'
        } else {
            '#'
        };
        if !out.ends_with(s) {
            out.push(s);
        }
    }
    out
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Featurizer {
    hash_bits: u32,
}

impl Default for Featurizer {
    fn default() -> Self {
        Featurizer {
            hash_bits: DEFAULT_HASH_BITS,
        }
    }
}

impl Featurizer {
    pub fn new(hash_bits: u32) -> Result<Self> {
        if !(1..=24).contains(&hash_bits) {
            return Err(Error::Config(format!("hash_bits {hash_bits} outside 1..=24")));
        }
        Ok(Featurizer { hash_bits })
    }

    pub fn hash_bits(&self) -> u32 {
        self.hash_bits
    }

    pub fn hash_space(&self) -> usize {
        1 << self.hash_bits
    }

    fn hash(&self, seed: u64, text: &str) -> u32 {
        let mut h = FnvHasher::with_key(seed);
        h.write(text.as_bytes());
        (h.finish() & (self.hash_space() as u64 - 1)) as u32
    }

    pub fn featurize(&self, page: &PageLayout<'_>, token: usize, context: &[ContextToken]) -> FeatureVector {
        let tok = &page.doc.tokens[token];
        let nb = &page.norm[token];
        let (cx, cy) = nb.center();
        let chars: Vec<char> = tok.text.chars().collect();
        let n = chars.len().max(1) as f64;
        let count = |f: fn(&char) -> bool| chars.iter().filter(|c| f(c)).count() as f64 / n;
        let dense = [
            cx,
            cy,
            nb.width(),
            nb.height(),
            (chars.len() as f64).ln_1p(),
            count(|c| c.is_numeric()),
            count(|c| c.is_uppercase()),
            count(|c| !c.is_alphanumeric() && !c.is_whitespace()),
        ];

        let lower = tok.text.to_lowercase();
        let mut sparse = vec![self.hash(SEED_TOKEN, &lower), self.hash(SEED_SHAPE, &word_shape(&tok.text))];
        let padded: Vec<char> = std::iter::once('^').chain(lower.chars()).chain(std::iter::once('$')).collect();
        for w in padded.windows(3) {
            sparse.push(self.hash(SEED_TRIGRAM, &w.iter().collect::<String>()));
        }
        let neighbor = |dir: Direction| {
            context
                .iter()
                .find(|c| c.direction == dir)
                .map(|c| page.doc.tokens[c.index].text.to_lowercase())
                .unwrap_or_else(|| NO_NEIGHBOR.to_string())
        };
        sparse.push(self.hash(SEED_LEFT, &neighbor(Direction::Left)));
        sparse.push(self.hash(SEED_RIGHT, &neighbor(Direction::Right)));
        sparse.sort_unstable();
        sparse.dedup();
        FeatureVector { dense, sparse }
    }

    /// Features for every instance, aligned with [`Corpus::instances`].
    pub fn featurize_corpus(&self, corpus: &Corpus, params: &ContextParams) -> Result<Vec<FeatureVector>> {
        let mut out = Vec::with_capacity(corpus.n_tokens());
        for doc in &corpus.documents {
            let page = PageLayout::new(doc)?;
            for &t in &page.order {
                let ctx = context_of(&page, t, params);
                out.push(self.featurize(&page, t, &ctx));
            }
        }
        Ok(out)
    }
}

/// Weights of the `(DENSE_DIM + H) × K` linear layer plus a bias per class.
#[derive(Debug, Clone, PartialEq)]
pub struct PhiParams {
    hash_bits: u32,
    n_classes: usize,
    /// Row-major: feature row, then class.
    pub weights: Vec<f64>,
    pub bias: Vec<f64>,
}

impl PhiParams {
    pub fn zeros(hash_bits: u32, n_classes: usize) -> Self {
        let rows = DENSE_DIM + (1usize << hash_bits);
        PhiParams {
            hash_bits,
            n_classes,
            weights: vec![0.0; rows * n_classes],
            bias: vec![0.0; n_classes],
        }
    }

    /// A zeroed buffer of the same shape, for gradients and optimizer moments.
    pub fn zeros_like(&self) -> Self {
        PhiParams::zeros(self.hash_bits, self.n_classes)
    }

    pub fn n_classes(&self) -> usize {
        self.n_classes
    }

    pub fn hash_bits(&self) -> u32 {
        self.hash_bits
    }

    pub fn n_rows(&self) -> usize {
        DENSE_DIM + (1usize << self.hash_bits)
    }

    pub fn check(&self, fv: &FeatureVector) -> Result<()> {
        let h = 1u32 << self.hash_bits;
        if let Some(&bad) = fv.sparse.iter().find(|&&s| s >= h) {
            return Err(Error::Shape(format!("sparse index {bad} outside hash space {h}")));
        }
        Ok(())
    }

    /// Unnormalized class scores. Indices are assumed checked.
    pub fn logits(&self, fv: &FeatureVector) -> Vec<f64> {
        let k = self.n_classes;
        let mut z = self.bias.clone();
        for (d, &x) in fv.dense.iter().enumerate() {
            if x != 0.0 {
                for (c, zc) in z.iter_mut().enumerate() {
                    *zc += x * self.weights[d * k + c];
                }
            }
        }
        for &s in &fv.sparse {
            let row = (DENSE_DIM + s as usize) * k;
            for (c, zc) in z.iter_mut().enumerate() {
                *zc += self.weights[row + c];
            }
        }
        z
    }

    /// Adds `scale · dL/dlogits` back-propagated through `fv` into this buffer.
    pub fn add_logit_grad(&mut self, fv: &FeatureVector, dlogits: &[f64], scale: f64) {
        let k = self.n_classes;
        for (c, &g) in dlogits.iter().enumerate() {
            self.bias[c] += scale * g;
        }
        for (d, &x) in fv.dense.iter().enumerate() {
            if x != 0.0 {
                for (c, &g) in dlogits.iter().enumerate() {
                    self.weights[d * k + c] += scale * x * g;
                }
            }
        }
        for &s in &fv.sparse {
            let row = (DENSE_DIM + s as usize) * k;
            for (c, &g) in dlogits.iter().enumerate() {
                self.weights[row + c] += scale * g;
            }
        }
    }

    fn l2_norm_sq(&self) -> f64 {
        self.weights.iter().map(|w| w * w).sum()
    }
}

/// `P(y | x)` under the feature model.
pub fn forward(phi: &PhiParams, fv: &FeatureVector) -> Result<ClassDistribution> {
    phi.check(fv)?;
    Ok(ClassDistribution::from_logits(&phi.logits(fv)))
}

/// 1-based argmax of [`forward`]; ties go to the lowest class.
pub fn predict(phi: &PhiParams, fv: &FeatureVector) -> Result<usize> {
    Ok(forward(phi, fv)?.argmax())
}

/// Adds `scale · ∇` of the mean cross-entropy over `batch` plus
/// `l2/2 · ‖W‖²` (bias excluded) into `grad`; returns that loss.
pub fn accumulate_ce(
    phi: &PhiParams,
    batch: &[(&FeatureVector, usize)],
    l2: f64,
    scale: f64,
    grad: &mut PhiParams,
) -> Result<f64> {
    if batch.is_empty() {
        return Err(Error::Empty("cross-entropy batch".into()));
    }
    let k = phi.n_classes;
    let inv = 1.0 / batch.len() as f64;
    let mut loss = 0.0;
    for &(fv, gold) in batch {
        phi.check(fv)?;
        if gold == 0 || gold > k {
            return Err(Error::Shape(format!("gold class {gold} outside 1..={k}")));
        }
        let mut p = softmax(&phi.logits(fv));
        loss -= p[gold - 1].max(f64::MIN_POSITIVE).ln() * inv;
        p[gold - 1] -= 1.0;
        grad.add_logit_grad(fv, &p, scale * inv);
    }
    if l2 != 0.0 {
        loss += 0.5 * l2 * phi.l2_norm_sq();
        for (g, w) in grad.weights.iter_mut().zip(&phi.weights) {
            *g += scale * l2 * w;
        }
    }
    Ok(loss)
}

/// Mean cross-entropy (with L2 on the weights) and its gradient.
pub fn ce_loss_and_grad(phi: &PhiParams, batch: &[(&FeatureVector, usize)], l2: f64) -> Result<(f64, PhiParams)> {
    let mut grad = phi.zeros_like();
    let loss = accumulate_ce(phi, batch, l2, 1.0, &mut grad)?;
    Ok((loss, grad))
}

/// `KL(P_φ(·|x) ‖ target)` and its gradient with respect to the logits.
pub fn kl_grad_and_value(phi: &PhiParams, fv: &FeatureVector, target: &ClassDistribution) -> (f64, Vec<f64>) {
    let p = softmax(&phi.logits(fv));
    kl_logit_grad(&p, target.probs())
}

/// For `p = softmax(z)`: `∂/∂z_k Σ_y p_y log(p_y/t_y) = p_k (d_k - Σ_y p_y d_y)`
/// with `d_y = log p_y - log t_y`.
pub(crate) fn kl_logit_grad(p: &[f64], t: &[f64]) -> (f64, Vec<f64>) {
    let d: Vec<f64> = p
        .iter()
        .zip(t)
        .map(|(&pi, &ti)| if pi > 0.0 { pi.ln() - ti.max(KL_TARGET_FLOOR).ln() } else { 0.0 })
        .collect();
    let mean: f64 = p.iter().zip(&d).map(|(pi, di)| pi * di).sum();
    let grad = p.iter().zip(&d).map(|(pi, di)| pi * (di - mean)).collect();
    (kl_divergence(p, t), grad)
}

/// On-disk form of φ; only non-zero weight rows are stored.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PhiSnapshot {
    pub hash_bits: u32,
    pub dense_dim: usize,
    pub classes: Vec<String>,
    pub weights: Vec<(usize, Vec<f64>)>,
    pub bias: Vec<f64>,
    pub version: u32,
}

impl PhiSnapshot {
    pub fn capture(phi: &PhiParams, classes: &ClassVocab) -> Self {
        let k = phi.n_classes;
        let weights = phi
            .weights
            .chunks(k)
            .enumerate()
            .filter(|(_, row)| row.iter().any(|&w| w != 0.0))
            .map(|(i, row)| (i, row.to_vec()))
            .collect();
        PhiSnapshot {
            hash_bits: phi.hash_bits,
            dense_dim: DENSE_DIM,
            classes: classes.names().to_vec(),
            weights,
            bias: phi.bias.clone(),
            version: crate::cage::SNAPSHOT_VERSION,
        }
    }

    pub fn restore(&self, classes: &ClassVocab) -> Result<PhiParams> {
        if self.dense_dim != DENSE_DIM {
            return Err(Error::Shape(format!("phi dense_dim {} != {DENSE_DIM}", self.dense_dim)));
        }
        if self.classes != classes.names() || self.bias.len() != classes.len() {
            return Err(Error::Shape("phi snapshot class list differs from the corpus".into()));
        }
        Featurizer::new(self.hash_bits)?;
        let mut phi = PhiParams::zeros(self.hash_bits, classes.len());
        let k = classes.len();
        for (row, vals) in &self.weights {
            if *row >= phi.n_rows() || vals.len() != k {
                return Err(Error::Shape(format!("phi snapshot row {row} is out of shape")));
            }
            phi.weights[row * k..(row + 1) * k].copy_from_slice(vals);
        }
        phi.bias.copy_from_slice(&self.bias);
        Ok(phi)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::document::{BBox, Document, Token};

    fn page_doc(texts: &[&str]) -> Document {
        Document {
            doc_id: "d".into(),
            page_width: 1000.0,
            page_height: 1000.0,
            tokens: texts
                .iter()
                .enumerate()
                .map(|(i, t)| Token {
                    text: t.to_string(),
                    bbox: BBox::new(10.0 + 100.0 * i as f64, 10.0, 80.0 + 100.0 * i as f64, 30.0),
                    gold: None,
                })
                .collect(),
        }
    }

    fn fv_of(texts: &[&str], t: usize) -> FeatureVector {
        let d = page_doc(texts);
        let page = PageLayout::new(&d).unwrap();
        let p = ContextParams::default();
        let ctx = context_of(&page, t, &p);
        Featurizer::new(10).unwrap().featurize(&page, t, &ctx)
    }

    #[test]
    fn character_statistics() {
        let fv = fv_of(&["TOTAL:"], 0);
        assert!((fv.dense[6] - 5.0 / 6.0).abs() < 1e-15);
        assert_eq!(fv.dense[5], 0.0);
        assert_eq!(word_shape("TOTAL:"), "X#");
        let fv = fv_of(&["12.50"], 0);
        assert!((fv.dense[5] - 0.8).abs() < 1e-15);
        assert_eq!(word_shape("12.50"), "9#9");
        assert_eq!(word_shape("Hello"), "Xx");
    }

    #[test]
    fn deterministic_features() {
        assert_eq!(fv_of(&["tea", "2.50"], 0), fv_of(&["tea", "2.50"], 0));
        assert_ne!(fv_of(&["tea", "2.50"], 0), fv_of(&["tea", "3.50"], 0));
    }

    #[test]
    fn zero_phi_is_uniform() {
        let phi = PhiParams::zeros(10, 4);
        let p = forward(&phi, &fv_of(&["x"], 0)).unwrap();
        assert!(p.probs().iter().all(|&v| (v - 0.25).abs() < 1e-15));
        assert_eq!(predict(&phi, &fv_of(&["x"], 0)).unwrap(), 1);
    }

    #[test]
    fn bias_shift_is_invisible() {
        let mut phi = PhiParams::zeros(10, 3);
        phi.bias = vec![0.3, -1.0, 2.0];
        let fv = fv_of(&["x"], 0);
        let a = forward(&phi, &fv).unwrap();
        phi.bias.iter_mut().for_each(|b| *b += 7.5);
        let b = forward(&phi, &fv).unwrap();
        for (x, y) in a.probs().iter().zip(b.probs()) {
            assert!((x - y).abs() < 1e-12);
        }
        assert_eq!(a.argmax(), b.argmax());
    }

    #[test]
    fn shape_mismatch_is_reported() {
        let phi = PhiParams::zeros(4, 2);
        let fv = FeatureVector {
            dense: [0.0; DENSE_DIM],
            sparse: vec![100],
        };
        assert!(forward(&phi, &fv).is_err());
    }

    #[test]
    fn ce_examples() {
        let phi = PhiParams::zeros(10, 3);
        let fv = fv_of(&["x"], 0);
        let (loss, _) = ce_loss_and_grad(&phi, &[(&fv, 2)], 0.0).unwrap();
        assert!((loss - 3f64.ln()).abs() < 1e-12);
        let mut sure = PhiParams::zeros(10, 3);
        sure.bias = vec![0.0, 800.0, 0.0];
        let (loss, _) = ce_loss_and_grad(&sure, &[(&fv, 2)], 0.0).unwrap();
        assert_eq!(loss, 0.0);
        assert!(ce_loss_and_grad(&phi, &[], 0.0).is_err());
    }

    #[test]
    fn kl_to_self_is_zero() {
        let mut phi = PhiParams::zeros(10, 3);
        phi.bias = vec![0.5, -0.2, 0.1];
        let fv = fv_of(&["x"], 0);
        let target = forward(&phi, &fv).unwrap();
        let (kl, g) = kl_grad_and_value(&phi, &fv, &target);
        assert!(kl.abs() < 1e-15);
        assert!(g.iter().all(|v| v.abs() < 1e-15));
    }

    #[test]
    fn snapshot_round_trip() {
        let classes = ClassVocab::new(vec!["A".into(), "B".into()]).unwrap();
        let mut phi = PhiParams::zeros(6, 2);
        phi.weights[3] = 0.5;
        phi.weights[40] = -2.25;
        phi.bias = vec![0.1, 0.2];
        let snap = PhiSnapshot::capture(&phi, &classes);
        assert_eq!(snap.weights.len(), 2);
        assert_eq!(snap.restore(&classes).unwrap(), phi);
    }
}
