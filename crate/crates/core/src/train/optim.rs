//! RAdam with decoupled weight decay, wrapped by Lookahead.

use ndarray::{Array2, Zip};
use serde::{Deserialize, Serialize};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RAdamConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
}

impl Default for RAdamConfig {
    fn default() -> Self {
        Self {
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
        }
    }
}

impl RAdamConfig {
    /// Maximum length of the approximated simple moving average.
    pub fn rho_inf(&self) -> f64 {
        2.0 / (1.0 - self.beta2) - 1.0
    }

    pub fn rho(&self, step: u64) -> f64 {
        let b2t = self.beta2.powf(step as f64);
        self.rho_inf() - 2.0 * step as f64 * b2t / (1.0 - b2t)
    }

    /// Variance rectification term, `None` while the variance is intractable
    /// (`ρ_t ≤ 4`) and the update falls back to plain momentum.
    pub fn rectifier(&self, step: u64) -> Option<f64> {
        let rho = self.rho(step);
        if rho <= 4.0 {
            return None;
        }
        let inf = self.rho_inf();
        Some(((rho - 4.0) * (rho - 2.0) * inf / ((inf - 4.0) * (inf - 2.0) * rho)).sqrt())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RAdamState {
    pub step: u64,
    pub first: Vec<Array2<f64>>,
    pub second: Vec<Array2<f64>>,
}

impl RAdamState {
    pub fn new(params: &[&Array2<f64>]) -> Self {
        let zeros: Vec<_> = params.iter().map(|p| Array2::zeros(p.dim())).collect();
        Self {
            step: 0,
            first: zeros.clone(),
            second: zeros,
        }
    }

    pub fn is_finite(&self) -> bool {
        self.first
            .iter()
            .chain(&self.second)
            .all(|t| t.iter().all(|v| v.is_finite()))
    }
}

/// One RAdam update. Weight decay is applied to the weights directly.
pub fn radam_step(
    state: &mut RAdamState,
    params: &mut [&mut Array2<f64>],
    grads: &[Array2<f64>],
    lr: f64,
    weight_decay: f64,
    config: &RAdamConfig,
) {
    assert_eq!(params.len(), grads.len(), "one gradient per parameter");
    assert_eq!(params.len(), state.first.len(), "optimizer state misaligned");
    state.step += 1;
    let t = state.step as f64;
    let (b1, b2) = (config.beta1, config.beta2);
    let first_correction = 1.0 - b1.powf(t);
    let second_correction = 1.0 - b2.powf(t);
    let rectifier = config.rectifier(state.step);

    for (((theta, g), m), v) in params
        .iter_mut()
        .zip(grads)
        .zip(&mut state.first)
        .zip(&mut state.second)
    {
        if weight_decay != 0.0 {
            theta.mapv_inplace(|x| x - lr * weight_decay * x);
        }
        Zip::from(&mut **m).and(g).for_each(|m, &g| *m = b1 * *m + (1.0 - b1) * g);
        Zip::from(&mut **v).and(g).for_each(|v, &g| *v = b2 * *v + (1.0 - b2) * g * g);
        match rectifier {
            Some(r) => Zip::from(&mut **theta).and(&*m).and(&*v).for_each(|x, &m, &v| {
                let m_hat = m / first_correction;
                let v_hat = (v / second_correction).sqrt();
                *x -= lr * r * m_hat / (v_hat + config.epsilon);
            }),
            None => Zip::from(&mut **theta)
                .and(&*m)
                .for_each(|x, &m| *x -= lr * m / first_correction),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct LookaheadConfig {
    /// Inner steps between synchronizations.
    pub steps: usize,
    /// Interpolation ratio of the slow weights toward the fast ones.
    pub alpha: f64,
}

impl Default for LookaheadConfig {
    fn default() -> Self {
        Self {
            steps: 5,
            alpha: 0.5,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LookaheadState {
    pub slow: Vec<Array2<f64>>,
    pub inner: usize,
}

impl LookaheadState {
    pub fn new(params: &[&Array2<f64>]) -> Self {
        Self {
            slow: params.iter().map(|p| (*p).clone()).collect(),
            inner: 0,
        }
    }
}

/// Counts one inner step; every `steps`-th call moves the slow weights toward
/// the fast ones and resets the fast weights onto them. Returns whether a
/// synchronization happened.
pub fn lookahead_step(
    state: &mut LookaheadState,
    params: &mut [&mut Array2<f64>],
    config: &LookaheadConfig,
) -> bool {
    assert_eq!(params.len(), state.slow.len(), "lookahead state misaligned");
    state.inner += 1;
    if state.inner < config.steps {
        return false;
    }
    state.inner = 0;
    for (fast, slow) in params.iter_mut().zip(&mut state.slow) {
        Zip::from(&mut *slow)
            .and(&**fast)
            .for_each(|s, &f| *s += config.alpha * (f - *s));
        fast.assign(slow);
    }
    true
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct OptimizerState {
    pub radam: RAdamState,
    pub lookahead: LookaheadState,
}

impl OptimizerState {
    pub fn new(params: &[&Array2<f64>]) -> Self {
        Self {
            radam: RAdamState::new(params),
            lookahead: LookaheadState::new(params),
        }
    }
}
