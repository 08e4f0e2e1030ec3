use ndarray::Array2;
use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use super::EncoderConfig;

/// Standard deviation of the class-token initialization.
pub const CLS_INIT_STD: f64 = 0.02;
/// Classifier weights start small so a fresh model is not confident.
pub const HEAD_INIT_STD: f64 = 0.02;

/// Affine map `x · weight + bias`; `weight` is `in × out`, `bias` is `1 × out`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Linear<T> {
    pub weight: T,
    pub bias: T,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Norm<T> {
    pub gain: T,
    pub bias: T,
}

/// One pre-norm transformer block.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Block<T> {
    pub attn_norm: Norm<T>,
    pub query: Linear<T>,
    pub key: Linear<T>,
    pub value: Linear<T>,
    pub output: Linear<T>,
    pub ffn_norm: Norm<T>,
    pub ffn_in: Linear<T>,
    pub ffn_out: Linear<T>,
}

/// Everything the model learns: encoder weights, the class token, and the
/// classifier head. Generic so the same layout can hold values, tape
/// handles, gradients, or optimizer moments.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Params<T> {
    pub input: Linear<T>,
    pub cls_token: T,
    pub blocks: Vec<Block<T>>,
    pub final_norm: Norm<T>,
    pub head: Linear<T>,
}

pub type ModelParams = Params<Array2<f64>>;

impl<T> Linear<T> {
    fn map<U>(&self, f: &mut impl FnMut(&T) -> U) -> Linear<U> {
        Linear {
            weight: f(&self.weight),
            bias: f(&self.bias),
        }
    }
}

impl<T> Norm<T> {
    fn map<U>(&self, f: &mut impl FnMut(&T) -> U) -> Norm<U> {
        Norm {
            gain: f(&self.gain),
            bias: f(&self.bias),
        }
    }
}

impl<T> Block<T> {
    fn map<U>(&self, f: &mut impl FnMut(&T) -> U) -> Block<U> {
        Block {
            attn_norm: self.attn_norm.map(f),
            query: self.query.map(f),
            key: self.key.map(f),
            value: self.value.map(f),
            output: self.output.map(f),
            ffn_norm: self.ffn_norm.map(f),
            ffn_in: self.ffn_in.map(f),
            ffn_out: self.ffn_out.map(f),
        }
    }

    fn linears() -> [&'static str; 6] {
        ["query", "key", "value", "output", "ffn_in", "ffn_out"]
    }
}

impl<T> Params<T> {
    /// Maps every tensor, visiting them in declaration order.
    pub fn map<U>(&self, mut f: impl FnMut(&T) -> U) -> Params<U> {
        let input = self.input.map(&mut f);
        let cls_token = f(&self.cls_token);
        let blocks = self.blocks.iter().map(|b| b.map(&mut f)).collect();
        let final_norm = self.final_norm.map(&mut f);
        let head = self.head.map(&mut f);
        Params {
            input,
            cls_token,
            blocks,
            final_norm,
            head,
        }
    }

    /// All tensors in declaration order.
    pub fn tensors(&self) -> Vec<&T> {
        let mut out = vec![&self.input.weight, &self.input.bias, &self.cls_token];
        for b in &self.blocks {
            out.extend([
                &b.attn_norm.gain,
                &b.attn_norm.bias,
                &b.query.weight,
                &b.query.bias,
                &b.key.weight,
                &b.key.bias,
                &b.value.weight,
                &b.value.bias,
                &b.output.weight,
                &b.output.bias,
                &b.ffn_norm.gain,
                &b.ffn_norm.bias,
                &b.ffn_in.weight,
                &b.ffn_in.bias,
                &b.ffn_out.weight,
                &b.ffn_out.bias,
            ]);
        }
        out.extend([
            &self.final_norm.gain,
            &self.final_norm.bias,
            &self.head.weight,
            &self.head.bias,
        ]);
        out
    }

    pub fn tensors_mut(&mut self) -> Vec<&mut T> {
        let mut out = vec![
            &mut self.input.weight,
            &mut self.input.bias,
            &mut self.cls_token,
        ];
        for b in &mut self.blocks {
            out.extend([
                &mut b.attn_norm.gain,
                &mut b.attn_norm.bias,
                &mut b.query.weight,
                &mut b.query.bias,
                &mut b.key.weight,
                &mut b.key.bias,
                &mut b.value.weight,
                &mut b.value.bias,
                &mut b.output.weight,
                &mut b.output.bias,
                &mut b.ffn_norm.gain,
                &mut b.ffn_norm.bias,
                &mut b.ffn_in.weight,
                &mut b.ffn_in.bias,
                &mut b.ffn_out.weight,
                &mut b.ffn_out.bias,
            ]);
        }
        out.extend([
            &mut self.final_norm.gain,
            &mut self.final_norm.bias,
            &mut self.head.weight,
            &mut self.head.bias,
        ]);
        out
    }

    /// Dotted tensor names, aligned with [`Params::tensors`].
    pub fn names(&self) -> Vec<String> {
        let mut out = vec![
            "input.weight".to_string(),
            "input.bias".to_string(),
            "cls_token".to_string(),
        ];
        for i in 0..self.blocks.len() {
            out.push(format!("blocks.{i}.attn_norm.gain"));
            out.push(format!("blocks.{i}.attn_norm.bias"));
            for name in Block::<T>::linears().into_iter().take(4) {
                out.push(format!("blocks.{i}.{name}.weight"));
                out.push(format!("blocks.{i}.{name}.bias"));
            }
            out.push(format!("blocks.{i}.ffn_norm.gain"));
            out.push(format!("blocks.{i}.ffn_norm.bias"));
            for name in Block::<T>::linears().into_iter().skip(4) {
                out.push(format!("blocks.{i}.{name}.weight"));
                out.push(format!("blocks.{i}.{name}.bias"));
            }
        }
        out.extend(
            ["final_norm.gain", "final_norm.bias", "head.weight", "head.bias"].map(String::from),
        );
        out
    }
}

impl ModelParams {
    /// Fan-in Gaussian projections, a small-scale classifier, zero biases, unit norm gains.
    pub fn init(config: &EncoderConfig, rng: &mut impl Rng) -> Self {
        let d = config.model_width;
        let linear = |fan_in: usize, fan_out: usize, rng: &mut dyn rand::RngCore| Linear {
            weight: gaussian((fan_in, fan_out), (1.0 / fan_in as f64).sqrt(), rng),
            bias: Array2::zeros((1, fan_out)),
        };
        let norm = || Norm {
            gain: Array2::ones((1, d)),
            bias: Array2::zeros((1, d)),
        };
        let input = linear(config.input_width, d, rng);
        let cls_token = gaussian((1, d), CLS_INIT_STD, rng);
        let blocks = (0..config.blocks)
            .map(|_| Block {
                attn_norm: norm(),
                query: linear(d, d, rng),
                key: linear(d, d, rng),
                value: linear(d, d, rng),
                output: linear(d, d, rng),
                ffn_norm: norm(),
                ffn_in: linear(d, config.ffn_width, rng),
                ffn_out: linear(config.ffn_width, d, rng),
            })
            .collect();
        let head = Linear {
            weight: gaussian((d, config.class_count), HEAD_INIT_STD, rng),
            bias: Array2::zeros((1, config.class_count)),
        };
        Self {
            input,
            cls_token,
            blocks,
            final_norm: norm(),
            head,
        }
    }

    pub fn parameter_count(&self) -> usize {
        self.tensors().iter().map(|t| t.len()).sum()
    }

    pub fn is_finite(&self) -> bool {
        self.tensors().iter().all(|t| t.iter().all(|v| v.is_finite()))
    }

    /// True when every tensor has the shape `config` prescribes.
    pub fn matches(&self, config: &EncoderConfig) -> bool {
        let template = Self::zeros(config);
        self.blocks.len() == template.blocks.len()
            && self
                .tensors()
                .iter()
                .zip(template.tensors())
                .all(|(a, b)| a.dim() == b.dim())
    }

    /// All-zero parameters with the shapes `config` prescribes.
    pub fn zeros(config: &EncoderConfig) -> Self {
        let d = config.model_width;
        let linear = |i: usize, o: usize| Linear {
            weight: Array2::zeros((i, o)),
            bias: Array2::zeros((1, o)),
        };
        let norm = || Norm {
            gain: Array2::zeros((1, d)),
            bias: Array2::zeros((1, d)),
        };
        Self {
            input: linear(config.input_width, d),
            cls_token: Array2::zeros((1, d)),
            blocks: (0..config.blocks)
                .map(|_| Block {
                    attn_norm: norm(),
                    query: linear(d, d),
                    key: linear(d, d),
                    value: linear(d, d),
                    output: linear(d, d),
                    ffn_norm: norm(),
                    ffn_in: linear(d, config.ffn_width),
                    ffn_out: linear(config.ffn_width, d),
                })
                .collect(),
            final_norm: norm(),
            head: linear(d, config.class_count),
        }
    }
}

fn gaussian(dim: (usize, usize), std: f64, rng: &mut dyn rand::RngCore) -> Array2<f64> {
    let normal = Normal::new(0.0, std).expect("positive std");
    Array2::from_shape_simple_fn(dim, || normal.sample(rng))
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn names_align_with_tensors() {
        let config = EncoderConfig::tiny(16, 3);
        let params = ModelParams::init(&config, &mut ChaCha8Rng::seed_from_u64(0));
        let names = params.names();
        assert_eq!(names.len(), params.tensors().len());
        assert_eq!(names[2], "cls_token");
        assert_eq!(names[5], "blocks.0.query.weight");
        assert_eq!(names.last().unwrap(), "head.bias");
        assert!(params.matches(&config));
    }

    #[test]
    fn map_preserves_order() {
        let config = EncoderConfig::tiny(4, 2);
        let params = ModelParams::zeros(&config);
        let mut counter = 0usize;
        let indexed = params.map(|_| {
            counter += 1;
            counter
        });
        let order: Vec<usize> = indexed.tensors().into_iter().copied().collect();
        assert_eq!(order, (1..=params.tensors().len()).collect::<Vec<_>>());
    }
}
