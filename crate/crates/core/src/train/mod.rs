//! Gradients, the prototype-bank training loop, and cross-validation.
//!
//! Each training step runs one bag forward with attention dropout, seeds the
//! backward sweep with the cross-entropy gradient on the logits and (once the
//! bank holds every class) the embedding-loss gradient on the bag embedding,
//! updates the bank, then takes a RAdam step followed by a Lookahead step.

pub mod optim;

use std::fs;
use std::path::Path;

use ndarray::{Array1, Array2, Axis};
use rand::seq::SliceRandom;
use rand::{RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::checkpoint::Checkpoint;
use crate::data::{Dataset, DatasetManifest, FeatureBag, SplitAssignment};
use crate::encoder::{self, EncoderConfig, ModelParams};
use crate::error::{Error, Result};
use crate::loss::{bel_with_grad, cross_entropy, update_bank, LossBreakdown, LossConfig, PrototypeBank};
use crate::metrics::{accuracy, evaluate, summarize, MetricsReport, MetricsSummary, Prediction, PredictionSet};
pub use optim::{
    lookahead_step, radam_step, LookaheadConfig, LookaheadState, OptimizerState, RAdamConfig, RAdamState,
};

pub const DEFAULT_LEARNING_RATE: f64 = 2e-5;
pub const DEFAULT_WEIGHT_DECAY: f64 = 5e-5;
pub const DEFAULT_EPOCHS: usize = 100;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub weight_decay: f64,
    pub epochs: usize,
    pub seed: u64,
    pub use_bel: bool,
    pub radam: RAdamConfig,
    pub lookahead: LookaheadConfig,
    pub loss: LossConfig,
    pub encoder: EncoderConfig,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            learning_rate: DEFAULT_LEARNING_RATE,
            weight_decay: DEFAULT_WEIGHT_DECAY,
            epochs: DEFAULT_EPOCHS,
            seed: 0,
            use_bel: true,
            radam: RAdamConfig::default(),
            lookahead: LookaheadConfig::default(),
            loss: LossConfig::default(),
            encoder: EncoderConfig::default(),
        }
    }
}

impl TrainConfig {
    /// Defaults with the encoder's input width and class count taken from `manifest`.
    pub fn for_dataset(manifest: &DatasetManifest) -> Self {
        let mut config = Self::default();
        config.encoder.input_width = manifest.feature_width;
        config.encoder.class_count = manifest.class_count;
        config
    }

    pub fn validate(&self) -> Result<()> {
        let fail = |m: &str| Err(Error::InvalidConfig(m.into()));
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return fail("learning rate must be positive");
        }
        if !(self.weight_decay >= 0.0 && self.weight_decay.is_finite()) {
            return fail("weight decay must be non-negative");
        }
        if self.epochs == 0 {
            return fail("epochs must be at least 1");
        }
        let r = &self.radam;
        if !(0.0..1.0).contains(&r.beta1) || !(0.0..1.0).contains(&r.beta2) || r.epsilon <= 0.0 {
            return fail("RAdam betas must lie in [0, 1) and epsilon must be positive");
        }
        if self.lookahead.steps == 0 || !(0.0..=1.0).contains(&self.lookahead.alpha) {
            return fail("lookahead needs k ≥ 1 and α in [0, 1]");
        }
        self.loss.validate()?;
        self.encoder.validate()
    }
}

/// Losses and parameter gradients for one bag.
#[derive(Clone, Debug)]
pub struct GradientSet {
    pub loss: LossBreakdown,
    /// One tensor per parameter, in [`Params::tensors`](crate::encoder::Params::tensors) order.
    pub grads: Vec<Array2<f64>>,
    pub probs: Vec<f64>,
    pub embedding: Array1<f64>,
}

/// Gradient of cross-entropy plus, when `bank` is given and complete, the bag
/// embedding loss against it. Dropout is active only when `rng` is given.
pub fn compute_gradients(
    params: &ModelParams,
    features: &Array2<f64>,
    label: usize,
    bank: Option<&PrototypeBank>,
    loss: &LossConfig,
    encoder_config: &EncoderConfig,
    rng: Option<&mut dyn RngCore>,
) -> Result<GradientSet> {
    if label >= encoder_config.class_count {
        return Err(Error::InvalidConfig(format!(
            "label {label} out of range for {} classes",
            encoder_config.class_count
        )));
    }
    let trace = encoder::trace(features, params, encoder_config, rng)?;
    let probs = trace.probs();
    let embedding = trace.embedding();

    let mut logit_grad = Array2::from_shape_vec((1, probs.len()), probs.clone()).expect("row");
    logit_grad[[0, label]] -= 1.0;
    let mut seeds = vec![(trace.logits, logit_grad)];

    let mut breakdown = LossBreakdown {
        cross_entropy: cross_entropy(&probs, label),
        bel: 0.0,
        bel_active: false,
    };
    if let Some(bank) = bank.filter(|b| b.is_complete()) {
        let (value, grad) = bel_with_grad(&embedding, label, bank, loss)?;
        breakdown.bel = value;
        breakdown.bel_active = true;
        seeds.push((trace.embedding, grad.insert_axis(Axis(0))));
    }

    let mut gradients = trace.tape.backward(&seeds);
    let names = params.names();
    let grads = trace
        .params
        .tensors()
        .into_iter()
        .zip(params.tensors())
        .zip(names)
        .map(|((&var, value), name)| {
            let g = gradients
                .take(var)
                .unwrap_or_else(|| Array2::zeros(value.dim()));
            if g.iter().all(|v| v.is_finite()) {
                Ok(g)
            } else {
                Err(Error::NonFiniteGradient(name))
            }
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(GradientSet {
        loss: breakdown,
        grads,
        probs,
        embedding,
    })
}

/// Everything one training run owns: weights, prototypes, optimizer state and
/// the random stream used for dropout and shuffling.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainSession {
    pub config: TrainConfig,
    pub params: ModelParams,
    pub bank: PrototypeBank,
    pub optimizer: OptimizerState,
    pub epoch: usize,
    rng: ChaCha8Rng,
}

impl TrainSession {
    pub fn new(config: TrainConfig) -> Result<Self> {
        config.validate()?;
        let mut init_rng = ChaCha8Rng::seed_from_u64(config.seed);
        let params = ModelParams::init(&config.encoder, &mut init_rng);
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        rng.set_stream(1);
        Ok(Self::from_parts(config, params, rng))
    }

    /// A session starting from given weights with fresh optimizer state and bank.
    pub fn with_params(config: TrainConfig, params: ModelParams) -> Result<Self> {
        config.validate()?;
        if !params.matches(&config.encoder) {
            return Err(Error::InvalidConfig(
                "parameter shapes do not match the encoder configuration".into(),
            ));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        rng.set_stream(1);
        Ok(Self::from_parts(config, params, rng))
    }

    fn from_parts(config: TrainConfig, params: ModelParams, rng: ChaCha8Rng) -> Self {
        let optimizer = OptimizerState::new(&params.tensors());
        Self {
            bank: PrototypeBank::new(config.encoder.class_count),
            config,
            params,
            optimizer,
            epoch: 0,
            rng,
        }
    }

    /// One iteration of the training loop on a single bag.
    pub fn train_step(&mut self, bag: &FeatureBag) -> Result<LossBreakdown> {
        let bank = self.config.use_bel.then_some(&self.bank);
        let step = compute_gradients(
            &self.params,
            &bag.features_f64(),
            bag.label,
            bank,
            &self.config.loss,
            &self.config.encoder,
            Some(&mut self.rng),
        )?;

        if self.bank.is_complete() {
            update_bank(&mut self.bank, bag.label, &step.embedding, self.config.loss.update_ratio);
        } else {
            self.bank.set(bag.label, step.embedding);
        }

        let mut tensors = self.params.tensors_mut();
        radam_step(
            &mut self.optimizer.radam,
            &mut tensors,
            &step.grads,
            self.config.learning_rate,
            self.config.weight_decay,
            &self.config.radam,
        );
        lookahead_step(&mut self.optimizer.lookahead, &mut tensors, &self.config.lookahead);
        Ok(step.loss)
    }

    /// One pass over `bags` in a freshly shuffled order; returns mean losses.
    pub fn train_epoch(&mut self, bags: &[&FeatureBag]) -> Result<LossBreakdown> {
        if bags.is_empty() {
            return Err(Error::Empty("training bags"));
        }
        let mut order: Vec<usize> = (0..bags.len()).collect();
        order.shuffle(&mut self.rng);
        let mut sum = LossBreakdown::default();
        for i in order {
            let step = self.train_step(bags[i])?;
            sum.cross_entropy += step.cross_entropy;
            sum.bel += step.bel;
            sum.bel_active |= step.bel_active;
        }
        self.epoch += 1;
        let n = bags.len() as f64;
        Ok(LossBreakdown {
            cross_entropy: sum.cross_entropy / n,
            bel: sum.bel / n,
            bel_active: sum.bel_active,
        })
    }

    pub fn checkpoint(&self) -> Checkpoint {
        Checkpoint {
            config: self.config.encoder.clone(),
            params: self.params.clone(),
            bank: self.bank.clone(),
        }
    }

    /// Full-precision snapshot of the session, for exact resumption.
    pub fn save_state(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        fs::write(path, serde_json::to_vec(self)?).map_err(|e| Error::io(path, e))
    }

    pub fn load_state(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
        let session: Self = serde_json::from_slice(&bytes)?;
        session.config.validate()?;
        Ok(session)
    }
}

/// Eval-mode predictions (no dropout) with attention vectors.
pub fn predict(params: &ModelParams, config: &EncoderConfig, bags: &[&FeatureBag]) -> Result<PredictionSet> {
    let predictions = bags
        .iter()
        .map(|bag| {
            let out = encoder::forward(&bag.features_f64(), params, config, None)?;
            Ok(Prediction {
                bag_id: bag.bag_id.clone(),
                label: bag.label,
                probs: out.probs,
                attention: Some(out.alpha),
            })
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(PredictionSet {
        class_count: config.class_count,
        predictions,
    })
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    /// Mean over the epoch's bags.
    pub cross_entropy: f64,
    pub bel: f64,
    pub validation_accuracy: f64,
}

impl EpochRecord {
    pub fn train_loss(&self) -> f64 {
        self.cross_entropy + self.bel
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainReport {
    pub epochs: Vec<EpochRecord>,
    /// 1-based epoch whose weights were retained.
    pub best_epoch: usize,
    pub best_validation_accuracy: f64,
    /// Where the retained checkpoint was written, if it was.
    pub checkpoint: Option<String>,
}

#[derive(Clone, Debug)]
pub struct FoldResult {
    pub report: TrainReport,
    /// Weights and bank at the best validation epoch.
    pub best: Checkpoint,
    /// The session as it stood after the last epoch.
    pub last: TrainSession,
}

/// Trains for `config.epochs` epochs and keeps the weights with the highest
/// validation accuracy (earliest epoch on ties).
pub fn train_fold(train: &[&FeatureBag], validation: &[&FeatureBag], config: &TrainConfig) -> Result<FoldResult> {
    config.validate()?;
    if validation.is_empty() {
        return Err(Error::Empty("validation bags"));
    }
    if train.is_empty() {
        return Err(Error::Empty("training bags"));
    }
    for class in 0..config.encoder.class_count {
        if !train.iter().any(|b| b.label == class) {
            return Err(Error::MissingClass(class));
        }
    }

    let mut session = TrainSession::new(config.clone())?;
    let mut epochs = Vec::with_capacity(config.epochs);
    let mut best: Option<(usize, f64, Checkpoint)> = None;
    for _ in 0..config.epochs {
        let losses = session.train_epoch(train)?;
        let val = accuracy(&predict(&session.params, &config.encoder, validation)?)?;
        epochs.push(EpochRecord {
            epoch: session.epoch,
            cross_entropy: losses.cross_entropy,
            bel: losses.bel,
            validation_accuracy: val,
        });
        if best.as_ref().is_none_or(|(_, b, _)| val > *b) {
            best = Some((session.epoch, val, session.checkpoint()));
        }
    }
    let (best_epoch, best_validation_accuracy, checkpoint) = best.expect("at least one epoch");
    Ok(FoldResult {
        report: TrainReport {
            epochs,
            best_epoch,
            best_validation_accuracy,
            checkpoint: None,
        },
        best: checkpoint,
        last: session,
    })
}

#[derive(Clone, Debug)]
pub struct FoldRun {
    pub fold: usize,
    pub result: FoldResult,
    pub test_predictions: PredictionSet,
    pub test_metrics: MetricsReport,
}

#[derive(Clone, Debug)]
pub struct CrossValidation {
    pub folds: Vec<FoldRun>,
    pub summary: MetricsSummary,
}

/// Seed used for fold `fold` of a run seeded with `seed`.
pub fn fold_seed(seed: u64, fold: usize) -> u64 {
    seed.wrapping_add(fold as u64)
}

/// Trains every fold and evaluates each fold's best model on the shared test set.
pub fn cross_validate(dataset: &Dataset, splits: &SplitAssignment, config: &TrainConfig) -> Result<CrossValidation> {
    config.validate()?;
    if dataset.manifest.feature_width != config.encoder.input_width
        || dataset.manifest.class_count != config.encoder.class_count
    {
        return Err(Error::InvalidConfig(format!(
            "encoder expects width {} and {} classes, dataset has {} and {}",
            config.encoder.input_width,
            config.encoder.class_count,
            dataset.manifest.feature_width,
            dataset.manifest.class_count
        )));
    }
    let test = dataset.select(&splits.test_ids)?;
    if test.is_empty() {
        return Err(Error::Empty("test bags"));
    }
    let mut folds = Vec::with_capacity(splits.folds.len());
    for (index, fold) in splits.folds.iter().enumerate() {
        let fold_config = TrainConfig {
            seed: fold_seed(config.seed, index),
            ..config.clone()
        };
        let result = train_fold(
            &dataset.select(&fold.train_ids)?,
            &dataset.select(&fold.validation_ids)?,
            &fold_config,
        )?;
        let test_predictions = predict(&result.best.params, &config.encoder, &test)?;
        let test_metrics = evaluate(&test_predictions)?;
        folds.push(FoldRun {
            fold: index,
            result,
            test_predictions,
            test_metrics,
        });
    }
    let reports: Vec<_> = folds.iter().map(|f| f.test_metrics.clone()).collect();
    Ok(CrossValidation {
        summary: summarize(&reports)?,
        folds,
    })
}
