use crate::cage::ThetaParams;
use crate::features::PhiParams;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AdamHyper {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

#[derive(Debug, Clone, PartialEq, Default)]
struct Moments {
    m: Vec<f64>,
    v: Vec<f64>,
}

impl Moments {
    fn new(n: usize) -> Self {
        Moments {
            m: vec![0.0; n],
            v: vec![0.0; n],
        }
    }

    fn update(&mut self, params: &mut [f64], grad: &[f64], h: AdamHyper, lr: f64, step: u64) {
        debug_assert_eq!(params.len(), grad.len());
        let bc1 = 1.0 - h.beta1.powf(step as f64);
        let bc2 = 1.0 - h.beta2.powf(step as f64);
        for ((p, &g), (m, v)) in params
            .iter_mut()
            .zip(grad)
            .zip(self.m.iter_mut().zip(self.v.iter_mut()))
        {
            *m = h.beta1 * *m + (1.0 - h.beta1) * g;
            *v = h.beta2 * *v + (1.0 - h.beta2) * g * g;
            let m_hat = *m / bc1;
            let v_hat = *v / bc2;
            *p -= lr * m_hat / (v_hat.sqrt() + h.eps);
        }
    }
}

/// First/second moment accumulators for both parameter sets.
#[derive(Debug, Clone, PartialEq)]
pub struct AdamState {
    pub step: u64,
    phi_w: Moments,
    phi_b: Moments,
    theta: Moments,
}

impl AdamState {
    pub fn new(phi: &PhiParams, theta: &ThetaParams) -> Self {
        AdamState {
            step: 0,
            phi_w: Moments::new(phi.weights.len()),
            phi_b: Moments::new(phi.bias.len()),
            theta: Moments::new(theta.values().len()),
        }
    }

    /// One bias-corrected update of both parameter sets at learning rate `lr`.
    pub fn apply(
        &mut self,
        h: AdamHyper,
        lr: f64,
        phi: &mut PhiParams,
        phi_grad: &PhiParams,
        theta: &mut ThetaParams,
        theta_grad: &[f64],
    ) {
        self.step += 1;
        self.phi_w.update(&mut phi.weights, &phi_grad.weights, h, lr, self.step);
        self.phi_b.update(&mut phi.bias, &phi_grad.bias, h, lr, self.step);
        self.theta.update(theta.values_mut(), theta_grad, h, lr, self.step);
    }
}

/// `lr · min(1, t / max(1, ⌈warmup_fraction · total⌉))` for 1-based step `t`.
pub fn warmup_lr(base: f64, t: u64, total_steps: u64, warmup_fraction: f64) -> f64 {
    let warm = ((warmup_fraction * total_steps as f64).ceil() as u64).max(1);
    base * (t as f64 / warm as f64).min(1.0)
}
