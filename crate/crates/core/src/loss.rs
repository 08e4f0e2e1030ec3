//! Cross-entropy, the bag embedding loss, and the class prototype bank.
//!
//! The bag embedding loss pulls a bag's embedding toward its class prototype
//! and pushes it away from every other class prototype whose cosine
//! similarity exceeds the margin:
//!
//! ```text
//! ½ (1 − S(b, b_c)) + 1 / (2 (|C| − 1)) · Σ_{c' ≠ c} max(0, S(b, b_c') − m)
//! ```
//!
//! Prototypes are exponential moving averages of past bag embeddings.

use ndarray::Array1;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const DEFAULT_MARGIN: f64 = 0.25;
pub const DEFAULT_UPDATE_RATIO: f64 = 0.996;
pub const DEFAULT_EPSILON: f64 = 1e-8;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct LossConfig {
    pub margin: f64,
    pub update_ratio: f64,
    pub epsilon: f64,
}

impl Default for LossConfig {
    fn default() -> Self {
        Self {
            margin: DEFAULT_MARGIN,
            update_ratio: DEFAULT_UPDATE_RATIO,
            epsilon: DEFAULT_EPSILON,
        }
    }
}

impl LossConfig {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..1.0).contains(&self.margin) {
            return Err(Error::InvalidConfig(format!("margin {} outside [0, 1)", self.margin)));
        }
        if !(0.0..1.0).contains(&self.update_ratio) {
            return Err(Error::InvalidConfig(format!(
                "update ratio {} outside [0, 1)",
                self.update_ratio
            )));
        }
        if !(self.epsilon > 0.0) {
            return Err(Error::InvalidConfig("epsilon must be positive".into()));
        }
        Ok(())
    }
}

/// `u · v / max(‖u‖ ‖v‖, ε)`.
pub fn cosine_similarity(u: &Array1<f64>, v: &Array1<f64>, epsilon: f64) -> f64 {
    assert_eq!(u.len(), v.len(), "cosine similarity of unequal widths");
    let denom = (u.dot(u).sqrt() * v.dot(v).sqrt()).max(epsilon);
    u.dot(v) / denom
}

/// Gradient of [`cosine_similarity`] with respect to `u`.
pub fn cosine_similarity_grad(u: &Array1<f64>, v: &Array1<f64>, epsilon: f64) -> Array1<f64> {
    let (nu, nv) = (u.dot(u).sqrt(), v.dot(v).sqrt());
    if nu * nv > epsilon {
        let s = u.dot(v) / (nu * nv);
        v / (nu * nv) - u * (s / (nu * nu))
    } else {
        v / epsilon
    }
}

/// Per-class EMA prototypes of bag embeddings.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PrototypeBank {
    slots: Vec<Option<Array1<f64>>>,
}

impl PrototypeBank {
    pub fn new(class_count: usize) -> Self {
        Self {
            slots: vec![None; class_count],
        }
    }

    pub fn capacity(&self) -> usize {
        self.slots.len()
    }

    pub fn filled(&self) -> usize {
        self.slots.iter().filter(|s| s.is_some()).count()
    }

    pub fn is_complete(&self) -> bool {
        self.filled() == self.capacity()
    }

    pub fn get(&self, class: usize) -> Option<&Array1<f64>> {
        self.slots.get(class).and_then(Option::as_ref)
    }

    /// Overwrites the prototype of `class`.
    pub fn set(&mut self, class: usize, embedding: Array1<f64>) {
        self.slots[class] = Some(embedding);
    }

    pub fn slots(&self) -> impl Iterator<Item = (usize, &Array1<f64>)> {
        self.slots
            .iter()
            .enumerate()
            .filter_map(|(c, s)| s.as_ref().map(|v| (c, v)))
    }

    /// Largest cosine similarity between two different class prototypes.
    pub fn max_cross_similarity(&self, epsilon: f64) -> Option<f64> {
        let filled: Vec<_> = self.slots().collect();
        let mut best: Option<f64> = None;
        for (i, (_, a)) in filled.iter().enumerate() {
            for (_, b) in &filled[i + 1..] {
                let s = cosine_similarity(a, b, epsilon);
                best = Some(best.map_or(s, |m| m.max(s)));
            }
        }
        best
    }
}

/// EMA update `b_c ← λ b_c + (1 − λ) b_new`; an empty slot takes `b_new` as is.
pub fn update_bank(bank: &mut PrototypeBank, class: usize, embedding: &Array1<f64>, update_ratio: f64) {
    match &mut bank.slots[class] {
        Some(slot) => {
            *slot *= update_ratio;
            slot.scaled_add(1.0 - update_ratio, embedding);
        }
        empty @ None => *empty = Some(embedding.clone()),
    }
}

fn check_bank(bank: &PrototypeBank, class: usize) -> Result<()> {
    if !bank.is_complete() {
        return Err(Error::IncompleteBank {
            filled: bank.filled(),
            capacity: bank.capacity(),
        });
    }
    if class >= bank.capacity() {
        return Err(Error::InvalidConfig(format!(
            "class {class} out of range for {} prototypes",
            bank.capacity()
        )));
    }
    Ok(())
}

/// Bag embedding loss of `embedding` labelled `class` against a complete bank.
pub fn bel(embedding: &Array1<f64>, class: usize, bank: &PrototypeBank, config: &LossConfig) -> Result<f64> {
    Ok(bel_with_grad(embedding, class, bank, config)?.0)
}

/// The loss and its gradient with respect to `embedding`; prototypes are constants.
pub fn bel_with_grad(
    embedding: &Array1<f64>,
    class: usize,
    bank: &PrototypeBank,
    config: &LossConfig,
) -> Result<(f64, Array1<f64>)> {
    check_bank(bank, class)?;
    if embedding.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite("bag embedding".into()));
    }
    let eps = config.epsilon;
    let own = bank.get(class).expect("complete bank");
    let pull = 0.5 * (1.0 - cosine_similarity(embedding, own, eps));
    let mut grad = cosine_similarity_grad(embedding, own, eps) * -0.5;

    let push_weight = 1.0 / (2.0 * (bank.capacity() - 1) as f64);
    let mut push = 0.0;
    for (_, proto) in bank.slots().filter(|(c, _)| *c != class) {
        let s = cosine_similarity(embedding, proto, eps);
        if s > config.margin {
            push += s - config.margin;
            grad.scaled_add(push_weight, &cosine_similarity_grad(embedding, proto, eps));
        }
    }
    Ok((pull + push_weight * push, grad))
}

/// `−ln p_c`.
pub fn cross_entropy(probs: &[f64], class: usize) -> f64 {
    -probs[class].ln()
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub cross_entropy: f64,
    pub bel: f64,
    /// Whether the bank was complete, i.e. the embedding term was evaluated.
    pub bel_active: bool,
}

impl LossBreakdown {
    pub fn total(&self) -> f64 {
        self.cross_entropy + self.bel
    }
}

/// Cross-entropy plus, once the bank is complete, the bag embedding loss.
pub fn total_loss(
    probs: &[f64],
    class: usize,
    embedding: &Array1<f64>,
    bank: &PrototypeBank,
    config: &LossConfig,
) -> Result<(f64, LossBreakdown)> {
    let ce = cross_entropy(probs, class);
    let (bel_value, bel_active) = if bank.is_complete() {
        (bel(embedding, class, bank, config)?, true)
    } else {
        (0.0, false)
    };
    let breakdown = LossBreakdown {
        cross_entropy: ce,
        bel: bel_value,
        bel_active,
    };
    Ok((breakdown.total(), breakdown))
}
