//! Joint training of the feature model (φ) and the generative label model (θ).
//!
//! Per step the objective is
//!
//! ```text
//! w_ce · CE(batch_L) + w_gm · NLL(batch_U ∩ U) + w_kl · KL(P_φ ‖ P_θ)(batch_U) − w_qg · R(θ | q)
//! ```
//!
//! where each data term is a mean over its batch rows and `batch_U` is drawn
//! from labeled and unlabeled rows with at least one LF firing. Gradients of
//! the KL term flow into both φ and θ.
//!
//! Batching: every step takes one batch from each stream. An epoch has
//! `⌈max(|L|, |U_fired|) / batch_size⌉` steps. The longer stream is walked in
//! order (its last batch may be short); the shorter one is cycled with
//! wrap-around. At the start of every epoch the RNG (seeded once from
//! `config.seed`) shuffles the L order, then the U order.

mod adam;
mod config;

pub use adam::{warmup_lr, AdamHyper, AdamState};
pub use config::TrainConfig;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::cage::{
    accumulate_guide_grad, accumulate_kl_grad, accumulate_nll_grad, posterior, ClassDistribution, QualityBeliefs,
    ThetaCache, ThetaParams,
};
use crate::cage::softmax;
use crate::document::{ClassVocab, CorpusSplit};
use crate::error::{Error, Result};
use crate::eval;
use crate::features::{accumulate_ce, kl_logit_grad, FeatureVector, PhiParams};
use crate::lf::LabelMatrix;

/// `q_j` = precision of LF `j` on the validation rows; LFs that never fire
/// there get 0.5. Everything is clamped to `[eps, 1 - eps]`.
pub fn estimate_quality_beliefs(matrix_v: &LabelMatrix, gold_v: &[Option<usize>], eps: f64) -> Result<QualityBeliefs> {
    if matrix_v.n_instances() == 0 {
        return Err(Error::Empty("validation split".into()));
    }
    if gold_v.len() != matrix_v.n_instances() {
        return Err(Error::Shape(format!(
            "{} validation labels for {} rows",
            gold_v.len(),
            matrix_v.n_instances()
        )));
    }
    let q = (0..matrix_v.n_lfs())
        .map(|j| {
            let (mut fired, mut right) = (0usize, 0usize);
            for (i, g) in gold_v.iter().enumerate() {
                let v = matrix_v.get(i, j);
                if let (true, Some(g)) = (v != 0, g) {
                    fired += 1;
                    right += usize::from(*g == v);
                }
            }
            if fired == 0 {
                0.5
            } else {
                right as f64 / fired as f64
            }
        })
        .collect();
    Ok(QualityBeliefs::new(q, eps))
}

/// Loss components of one step (or their per-epoch means).
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize)]
pub struct LossBreakdown {
    pub ce: f64,
    pub gm: f64,
    pub kl: f64,
    /// `−R(θ | q)`, the quantity minimized.
    pub qg: f64,
    pub total: f64,
}

/// A row of the unsupervised stream.
#[derive(Debug, Clone, Copy)]
pub struct FiredRow<'a> {
    pub features: &'a FeatureVector,
    pub firings: &'a [usize],
    /// Row belongs to U, so it also enters the generative NLL.
    pub unlabeled: bool,
}

/// Mutable optimization state owned by the trainer.
pub struct TrainerState {
    pub phi: PhiParams,
    pub theta: ThetaParams,
    pub adam: AdamState,
    phi_grad: PhiParams,
    theta_grad: Vec<f64>,
}

impl TrainerState {
    pub fn new(phi: PhiParams, theta: ThetaParams) -> Self {
        let adam = AdamState::new(&phi, &theta);
        let phi_grad = phi.zeros_like();
        let theta_grad = vec![0.0; theta.values().len()];
        TrainerState {
            phi,
            theta,
            adam,
            phi_grad,
            theta_grad,
        }
    }
}

/// One ADAM step on the joint objective at learning rate `lr`.
pub fn joint_step(
    state: &mut TrainerState,
    batch_l: &[(&FeatureVector, usize)],
    batch_u: &[FiredRow<'_>],
    beliefs: &QualityBeliefs,
    config: &TrainConfig,
    lr: f64,
) -> Result<LossBreakdown> {
    if batch_l.is_empty() && batch_u.is_empty() {
        return Err(Error::Empty("both training batches are empty".into()));
    }
    state.phi_grad.weights.fill(0.0);
    state.phi_grad.bias.fill(0.0);
    state.theta_grad.fill(0.0);
    let (phi, theta) = (&state.phi, &state.theta);
    let mut out = LossBreakdown::default();

    if !batch_l.is_empty() && config.w_ce > 0.0 {
        out.ce = accumulate_ce(phi, batch_l, config.l2, config.w_ce, &mut state.phi_grad)?;
    }

    let cache = ThetaCache::new(theta);
    if config.w_gm > 0.0 {
        let n_u = batch_u.iter().filter(|r| r.unlabeled).count();
        if n_u > 0 {
            let rows = batch_u.iter().filter(|r| r.unlabeled).map(|r| r.firings);
            let nll = accumulate_nll_grad(theta, &cache, rows, config.w_gm / n_u as f64, &mut state.theta_grad);
            out.gm = nll.loss / n_u as f64;
        }
    }

    if config.w_kl > 0.0 && !batch_u.is_empty() {
        let scale = config.w_kl / batch_u.len() as f64;
        let mut kl_sum = 0.0;
        for row in batch_u {
            phi.check(row.features)?;
            let p = softmax(&phi.logits(row.features));
            let t = posterior(theta, row.firings);
            let (kl, dlogits) = kl_logit_grad(&p, t.probs());
            state.phi_grad.add_logit_grad(row.features, &dlogits, scale);
            accumulate_kl_grad(theta, row.firings, &p, scale, &mut state.theta_grad);
            kl_sum += kl;
        }
        out.kl = kl_sum / batch_u.len() as f64;
    }

    if config.w_qg > 0.0 {
        out.qg = -accumulate_guide_grad(theta, &cache, beliefs, -config.w_qg, &mut state.theta_grad);
    }

    out.total = config.w_ce * out.ce + config.w_gm * out.gm + config.w_kl * out.kl + config.w_qg * out.qg;

    let h = AdamHyper {
        beta1: config.adam_beta1,
        beta2: config.adam_beta2,
        eps: config.adam_eps,
    };
    state.adam.apply(
        h,
        lr,
        &mut state.phi,
        &state.phi_grad,
        &mut state.theta,
        &state.theta_grad,
    );
    Ok(out)
}

/// Everything [`train`] reads, aligned by instance row.
pub struct TrainingData<'a> {
    pub features: &'a [FeatureVector],
    pub matrix: &'a LabelMatrix,
    /// Training view of the gold labels: only labeled and validation rows
    /// carry a label (see [`CorpusSplit::training_labels`]).
    pub labels: &'a [Option<usize>],
    pub split: &'a CorpusSplit,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct EpochRecord {
    pub epoch: usize,
    #[serde(flatten)]
    pub loss: LossBreakdown,
    pub val_f1: f64,
}

#[derive(Debug, Clone)]
pub struct TrainedModel {
    pub phi: PhiParams,
    pub theta: ThetaParams,
    pub lf_ids: Vec<String>,
    pub classes: ClassVocab,
    pub config: TrainConfig,
    pub beliefs: QualityBeliefs,
    pub history: Vec<EpochRecord>,
    /// Index into `history` of the epoch whose parameters were kept.
    pub best_epoch: usize,
}

/// Indices of batch `step` over a stream of length `n` when the longest
/// stream has length `n_max`.
pub fn batch_positions(step: usize, batch_size: usize, n: usize, n_max: usize) -> Vec<usize> {
    if n == 0 {
        return Vec::new();
    }
    let start = step * batch_size;
    if n == n_max {
        (start..(start + batch_size).min(n)).collect()
    } else {
        (start..start + batch_size).map(|i| i % n).collect()
    }
}

pub fn steps_per_epoch(n_l: usize, n_u: usize, batch_size: usize) -> usize {
    n_l.max(n_u).div_ceil(batch_size)
}

/// Macro-F1 of the feature model on `rows`.
pub fn macro_f1_on(phi: &PhiParams, features: &[FeatureVector], labels: &[Option<usize>], rows: &[usize], classes: &ClassVocab) -> Result<f64> {
    let mut gold = Vec::with_capacity(rows.len());
    let mut pred = Vec::with_capacity(rows.len());
    for &i in rows {
        if let Some(g) = labels[i] {
            gold.push(g);
            pred.push(ClassDistribution::from_logits(&phi.logits(&features[i])).argmax());
        }
    }
    Ok(eval::score(&gold, &pred, classes)?.macro_avg.f1)
}

/// Full training loop with early stopping on validation macro-F1.
///
/// Stops after `max_epochs`, or once validation F1 has failed to improve for
/// more than `patience` consecutive epochs. Returns the parameters of the best
/// epoch (ties go to the earliest).
pub fn train(data: &TrainingData<'_>, config: &TrainConfig) -> Result<TrainedModel> {
    config.validate()?;
    let n = data.matrix.n_instances();
    if data.features.len() != n || data.labels.len() != n {
        return Err(Error::Shape(format!(
            "{} feature rows and {} labels for {n} matrix rows",
            data.features.len(),
            data.labels.len()
        )));
    }
    let classes = &data.matrix.classes;
    let k = classes.len();

    let labeled: Vec<(usize, usize)> = data
        .split
        .labeled
        .iter()
        .filter_map(|&i| data.labels[i].map(|g| (i, g)))
        .collect();
    if labeled.is_empty() && config.w_ce > 0.0 {
        return Err(Error::Empty("no labeled instances while w_ce > 0".into()));
    }
    let mut fired: Vec<(usize, bool)> = data
        .split
        .labeled
        .iter()
        .map(|&i| (i, false))
        .chain(data.split.unlabeled.iter().map(|&i| (i, true)))
        .filter(|&(i, _)| data.matrix.fired(i))
        .collect();
    fired.sort_unstable();

    let val_rows = &data.split.validation;
    let val_labels: Vec<Option<usize>> = val_rows.iter().map(|&i| data.labels[i]).collect();
    let beliefs = estimate_quality_beliefs(&data.matrix.select(val_rows), &val_labels, config.guide_eps)?;

    let mut state = TrainerState::new(
        PhiParams::zeros(config.hash_bits, k),
        ThetaParams::initial(data.matrix.attached.clone(), k),
    );
    for fv in data.features {
        state.phi.check(fv)?;
    }

    let (n_l, n_u) = (labeled.len(), fired.len());
    let steps = steps_per_epoch(n_l, n_u, config.batch_size);
    if steps == 0 {
        return Err(Error::Empty("nothing to train on".into()));
    }
    let total_steps = (steps * config.max_epochs) as u64;
    let n_max = n_l.max(n_u);

    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut order_l: Vec<usize> = (0..n_l).collect();
    let mut order_u: Vec<usize> = (0..n_u).collect();

    let mut history = Vec::new();
    let mut best: Option<(f64, usize, PhiParams, ThetaParams)> = None;
    let mut stale = 0usize;

    for epoch in 0..config.max_epochs {
        order_l.shuffle(&mut rng);
        order_u.shuffle(&mut rng);
        let mut sum = LossBreakdown::default();
        for s in 0..steps {
            let batch_l: Vec<(&FeatureVector, usize)> = batch_positions(s, config.batch_size, n_l, n_max)
                .into_iter()
                .map(|p| {
                    let (i, g) = labeled[order_l[p]];
                    (&data.features[i], g)
                })
                .collect();
            let batch_u: Vec<FiredRow<'_>> = batch_positions(s, config.batch_size, n_u, n_max)
                .into_iter()
                .map(|p| {
                    let (i, unlabeled) = fired[order_u[p]];
                    FiredRow {
                        features: &data.features[i],
                        firings: data.matrix.row(i),
                        unlabeled,
                    }
                })
                .collect();
            let t = state.adam.step + 1;
            let lr = warmup_lr(config.learning_rate, t, total_steps, config.warmup_fraction);
            let l = joint_step(&mut state, &batch_l, &batch_u, &beliefs, config, lr)?;
            sum.ce += l.ce;
            sum.gm += l.gm;
            sum.kl += l.kl;
            sum.qg += l.qg;
            sum.total += l.total;
        }
        let inv = 1.0 / steps as f64;
        let val_f1 = macro_f1_on(&state.phi, data.features, data.labels, val_rows, classes)?;
        history.push(EpochRecord {
            epoch,
            loss: LossBreakdown {
                ce: sum.ce * inv,
                gm: sum.gm * inv,
                kl: sum.kl * inv,
                qg: sum.qg * inv,
                total: sum.total * inv,
            },
            val_f1,
        });

        if best.as_ref().is_none_or(|b| val_f1 > b.0) {
            best = Some((val_f1, epoch, state.phi.clone(), state.theta.clone()));
            stale = 0;
        } else {
            stale += 1;
            if stale > config.patience {
                break;
            }
        }
    }

    let (_, best_epoch, phi, theta) = match best {
        Some(b) => b,
        None => (0.0, 0, state.phi, state.theta),
    };
    Ok(TrainedModel {
        phi,
        theta,
        lf_ids: data.matrix.lf_ids.clone(),
        classes: classes.clone(),
        config: config.clone(),
        beliefs,
        history,
        best_epoch,
    })
}

/// Feature-model prediction: 1-based argmax (ties to the lowest class) and
/// the full distribution.
pub fn predict_token(model: &TrainedModel, fv: &FeatureVector) -> Result<(usize, ClassDistribution)> {
    let dist = crate::features::forward(&model.phi, fv)?;
    Ok((dist.argmax(), dist))
}

/// Optional fused prediction: for rows where some LF fired, the feature and
/// generative posteriors are averaged; otherwise identical to
/// [`predict_token`].
pub fn predict_fused(model: &TrainedModel, fv: &FeatureVector, firings: &[usize]) -> Result<(usize, ClassDistribution)> {
    let (label, dist) = predict_token(model, fv)?;
    if firings.iter().all(|&v| v == 0) {
        return Ok((label, dist));
    }
    let fused = dist.average(&posterior(&model.theta, firings));
    Ok((fused.argmax(), fused))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::document::ClassVocab;
    use crate::lf::RowKey;

    fn matrix(rows: Vec<Vec<usize>>, attached: Vec<usize>) -> LabelMatrix {
        let m = attached.len();
        LabelMatrix::from_rows(
            ClassVocab::new(vec!["A".into(), "B".into()]).unwrap(),
            (0..m).map(|j| format!("lf{j}")).collect(),
            attached,
            (0..rows.len()).map(|t| RowKey { doc: "d".into(), token: t }).collect(),
            rows,
        )
        .unwrap()
    }

    #[test]
    fn beliefs_from_validation() {
        // LF0 fires 4 times, 3 correct; LF1 never fires; LF2 always right
        let m = matrix(
            vec![vec![1, 0, 0], vec![1, 0, 0], vec![1, 0, 2], vec![1, 0, 0], vec![0, 0, 2]],
            vec![1, 2, 2],
        );
        let gold = [Some(1), Some(1), Some(2), Some(1), Some(2)];
        let q = estimate_quality_beliefs(&m, &gold, 1e-3).unwrap();
        assert_eq!(q.values(), &[0.75, 0.5, 1.0 - 1e-3]);
        let empty = matrix(vec![], vec![1]);
        assert!(estimate_quality_beliefs(&empty, &[], 1e-3).is_err());
    }

    #[test]
    fn batch_schedule() {
        // longest stream: in order, short tail
        assert_eq!(batch_positions(0, 4, 10, 10), vec![0, 1, 2, 3]);
        assert_eq!(batch_positions(2, 4, 10, 10), vec![8, 9]);
        // shorter stream cycles
        assert_eq!(batch_positions(1, 4, 3, 10), vec![1, 2, 0, 1]);
        assert!(batch_positions(0, 4, 0, 10).is_empty());
        assert_eq!(steps_per_epoch(3, 10, 4), 3);
    }

    #[test]
    fn step_with_nothing_is_an_error() {
        let mut st = TrainerState::new(PhiParams::zeros(2, 2), ThetaParams::initial(vec![1], 2));
        let q = QualityBeliefs::new(vec![0.5], 1e-3);
        assert!(joint_step(&mut st, &[], &[], &q, &TrainConfig::default(), 0.1).is_err());
    }

    #[test]
    fn supervised_step_leaves_theta() {
        let mut st = TrainerState::new(PhiParams::zeros(2, 2), ThetaParams::initial(vec![1], 2));
        let theta0 = st.theta.clone();
        let fv = FeatureVector {
            dense: [0.5; crate::features::DENSE_DIM],
            sparse: vec![1],
        };
        let q = QualityBeliefs::new(vec![0.9], 1e-3);
        let firings = [1usize];
        let u = [FiredRow {
            features: &fv,
            firings: &firings,
            unlabeled: true,
        }];
        let cfg = TrainConfig::default().supervised_only();
        let l = joint_step(&mut st, &[(&fv, 2)], &u, &q, &cfg, 0.1).unwrap();
        assert_eq!(st.theta, theta0);
        assert_eq!(l.total, l.ce);
        assert!(st.phi.bias[1] > 0.0);
    }
}
