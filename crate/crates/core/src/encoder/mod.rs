//! Class-token transformer bag encoder.
//!
//! The bag's instance features are projected to the model width, a learnable
//! class token is prepended, and pre-norm self-attention blocks are applied.
//! The class token's final state feeds the classifier; the mean of the
//! instance states is the bag embedding; the class token's attention row in
//! the last block gives the per-instance weights α.

pub mod attention;
pub mod params;

use ndarray::{Array1, Array2, Axis};
use rand::RngCore;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tape::{softmax_rows, Tape, Var};
use attention::{dropout_mask, exact_on_tape, extract_attention, nystrom_on_tape, ClassRow};
pub use params::{Block, Linear, ModelParams, Norm, Params};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum AttentionMode {
    Nystrom,
    Exact,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct EncoderConfig {
    /// Instance feature width H.
    pub input_width: usize,
    /// Model width D.
    pub model_width: usize,
    pub ffn_width: usize,
    pub class_count: usize,
    pub blocks: usize,
    pub heads: usize,
    pub landmarks: usize,
    /// Newton–Schulz iterations for the landmark pseudo-inverse.
    pub pinv_iterations: usize,
    pub attention_dropout: f64,
    pub attention: AttentionMode,
}

impl Default for EncoderConfig {
    fn default() -> Self {
        Self {
            input_width: 1024,
            model_width: 512,
            ffn_width: 512,
            class_count: 3,
            blocks: 2,
            heads: 8,
            landmarks: 64,
            pinv_iterations: attention::PINV_ITERATIONS,
            attention_dropout: 0.2,
            attention: AttentionMode::Nystrom,
        }
    }
}

impl EncoderConfig {
    /// A small model for tests: D = 32, 2 blocks, 4 heads.
    pub fn tiny(input_width: usize, class_count: usize) -> Self {
        Self {
            input_width,
            model_width: 32,
            ffn_width: 32,
            class_count,
            heads: 4,
            ..Self::default()
        }
    }

    pub fn head_width(&self) -> usize {
        self.model_width / self.heads
    }

    pub fn validate(&self) -> Result<()> {
        let fail = |m: String| Err(Error::InvalidConfig(m));
        if self.input_width == 0 || self.model_width == 0 || self.ffn_width == 0 {
            return fail("widths must be positive".into());
        }
        if self.class_count < 2 {
            return fail("class_count must be >= 2".into());
        }
        if self.blocks == 0 {
            return fail("at least one block is required".into());
        }
        if self.heads == 0 || self.model_width % self.heads != 0 {
            return fail(format!(
                "model width {} is not divisible by {} heads",
                self.model_width, self.heads
            ));
        }
        if self.landmarks == 0 {
            return fail("landmark count must be >= 1".into());
        }
        if !(0.0..1.0).contains(&self.attention_dropout) {
            return fail(format!("dropout {} outside [0, 1)", self.attention_dropout));
        }
        Ok(())
    }
}

/// Encoder outputs for one bag.
#[derive(Clone, Debug)]
pub struct EncoderOutput {
    pub z_cls: Array1<f64>,
    /// One row per instance.
    pub instances: Array2<f64>,
    pub alpha: Vec<f64>,
}

/// Bag-level model outputs: class probabilities, bag embedding, attention.
#[derive(Clone, Debug)]
pub struct ForwardOutput {
    pub probs: Vec<f64>,
    pub embedding: Array1<f64>,
    pub alpha: Vec<f64>,
}

/// A forward pass recorded on a tape, ready for a backward sweep.
pub struct ForwardTrace {
    pub tape: Tape,
    pub params: Params<Var>,
    pub logits: Var,
    pub z_cls: Var,
    pub instances: Var,
    pub embedding: Var,
    pub alpha: Vec<f64>,
}

impl ForwardTrace {
    pub fn probs(&self) -> Vec<f64> {
        softmax_rows(self.tape.value(self.logits)).row(0).to_vec()
    }

    pub fn embedding(&self) -> Array1<f64> {
        self.tape.value(self.embedding).row(0).to_owned()
    }

    pub fn encoder_output(&self) -> EncoderOutput {
        EncoderOutput {
            z_cls: self.tape.value(self.z_cls).row(0).to_owned(),
            instances: self.tape.value(self.instances).clone(),
            alpha: self.alpha.clone(),
        }
    }

    pub fn forward_output(&self) -> ForwardOutput {
        ForwardOutput {
            probs: self.probs(),
            embedding: self.embedding(),
            alpha: self.alpha.clone(),
        }
    }
}

fn reborrow<'a>(rng: &'a mut Option<&mut dyn RngCore>) -> Option<&'a mut dyn RngCore> {
    match rng {
        Some(r) => Some(&mut **r),
        None => None,
    }
}

fn affine(tape: &mut Tape, x: Var, layer: &Linear<Var>) -> Var {
    let y = tape.matmul(x, layer.weight);
    tape.add_row(y, layer.bias)
}

/// Records the full forward pass. Dropout is active only when `rng` is given.
pub fn trace(
    features: &Array2<f64>,
    params: &ModelParams,
    config: &EncoderConfig,
    mut rng: Option<&mut dyn RngCore>,
) -> Result<ForwardTrace> {
    config.validate()?;
    if features.ncols() != config.input_width {
        return Err(Error::WidthMismatch {
            expected: config.input_width,
            found: features.ncols(),
        });
    }
    if features.nrows() == 0 {
        return Err(Error::Empty("bag instances"));
    }
    if !params.matches(config) {
        return Err(Error::InvalidConfig(
            "parameter shapes do not match the encoder configuration".into(),
        ));
    }

    let mut tape = Tape::new();
    let bound = params.map(|t| tape.param(t.clone()));
    let input = tape.constant(features.clone());

    let projected = affine(&mut tape, input, &bound.input);
    let mut tokens = tape.concat_rows(&[bound.cls_token, projected]);
    let seq_len = features.nrows() + 1;
    let head_width = config.head_width();
    let scale = 1.0 / (head_width as f64).sqrt();
    let mut class_rows: Vec<ClassRow> = Vec::new();

    for (index, block) in bound.blocks.iter().enumerate() {
        let last = index + 1 == bound.blocks.len();
        let h = tape.layer_norm(tokens, block.attn_norm.gain, block.attn_norm.bias);
        let q = affine(&mut tape, h, &block.query);
        let k = affine(&mut tape, h, &block.key);
        let v = affine(&mut tape, h, &block.value);
        let mut head_outputs = Vec::with_capacity(config.heads);
        for head in 0..config.heads {
            let cols = head * head_width..(head + 1) * head_width;
            let qh = tape.slice_cols(q, cols.clone());
            let kh = tape.slice_cols(k, cols.clone());
            let vh = tape.slice_cols(v, cols);
            match config.attention {
                AttentionMode::Exact => {
                    let mask = dropout_mask(
                        (seq_len, seq_len),
                        config.attention_dropout,
                        reborrow(&mut rng),
                    );
                    let (out, attn) = exact_on_tape(&mut tape, qh, kh, vh, scale, mask);
                    if last {
                        class_rows.push(ClassRow::Exact(tape.value(attn).row(0).to_owned()));
                    }
                    head_outputs.push(out);
                }
                AttentionMode::Nystrom => {
                    let landmarks = config.landmarks.min(seq_len);
                    let mask = dropout_mask(
                        (seq_len, landmarks),
                        config.attention_dropout,
                        reborrow(&mut rng),
                    );
                    let nodes = nystrom_on_tape(&mut tape, qh, kh, vh, landmarks, scale, config.pinv_iterations, mask);
                    if last {
                        class_rows.push(ClassRow::Nystrom {
                            query_landmarks: tape.value(nodes.query_landmarks).row(0).to_owned(),
                            pinv: tape.value(nodes.pinv).clone(),
                            landmark_keys: tape.value(nodes.landmark_keys).clone(),
                        });
                    }
                    head_outputs.push(nodes.output);
                }
            }
        }
        let merged = tape.concat_cols(&head_outputs);
        let attended = affine(&mut tape, merged, &block.output);
        tokens = tape.add(tokens, attended);

        let h = tape.layer_norm(tokens, block.ffn_norm.gain, block.ffn_norm.bias);
        let hidden = affine(&mut tape, h, &block.ffn_in);
        let hidden = tape.gelu(hidden);
        let ffn = affine(&mut tape, hidden, &block.ffn_out);
        tokens = tape.add(tokens, ffn);
    }

    let normed = tape.layer_norm(tokens, bound.final_norm.gain, bound.final_norm.bias);
    let z_cls = tape.slice_rows(normed, 0..1);
    let instances = tape.slice_rows(normed, 1..seq_len);
    let embedding = tape.mean_rows(instances);
    let logits = affine(&mut tape, z_cls, &bound.head);

    if tape.value(logits).iter().any(|v| !v.is_finite())
        || tape.value(normed).iter().any(|v| !v.is_finite())
    {
        return Err(Error::NonFinite("encoder activations".into()));
    }

    let mut averaged = Array1::<f64>::zeros(seq_len);
    for row in &class_rows {
        averaged += &row.reconstruct();
    }
    averaged /= class_rows.len() as f64;
    let alpha = extract_attention(&averaged);

    Ok(ForwardTrace {
        tape,
        params: bound,
        logits,
        z_cls,
        instances,
        embedding,
        alpha,
    })
}

/// Encoder outputs `z_cls`, instance states, and α.
pub fn encode(
    features: &Array2<f64>,
    params: &ModelParams,
    config: &EncoderConfig,
    rng: Option<&mut dyn RngCore>,
) -> Result<EncoderOutput> {
    Ok(trace(features, params, config, rng)?.encoder_output())
}

/// Class probabilities, bag embedding, and attention for one bag.
pub fn forward(
    features: &Array2<f64>,
    params: &ModelParams,
    config: &EncoderConfig,
    rng: Option<&mut dyn RngCore>,
) -> Result<ForwardOutput> {
    Ok(trace(features, params, config, rng)?.forward_output())
}

/// Mean of the instance states.
pub fn pool_bag_embedding(instances: &Array2<f64>) -> Array1<f64> {
    instances
        .mean_axis(Axis(0))
        .expect("at least one instance")
}

/// `softmax(z_cls · W + b)`.
pub fn classify(z_cls: &Array1<f64>, head: &Linear<Array2<f64>>) -> Vec<f64> {
    let logits = z_cls.dot(&head.weight) + head.bias.row(0);
    softmax_rows(&logits.insert_axis(Axis(0))).row(0).to_vec()
}
