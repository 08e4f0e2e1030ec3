//! Transformer multiple-instance learning with a bag embedding loss.
//!
//! Bags of instance features go through a class-token transformer encoder
//! (exact or Nyström attention). The class token drives the classifier. The
//! mean instance state is the bag embedding, which a prototype-bank loss pulls
//! toward its own class and pushes away from the others.
//!
//! ```no_run
//! use belmil::data::{synth_generate, make_splits, SynthConfig};
//! use belmil::train::{cross_validate, TrainConfig};
//!
//! let synth = synth_generate(&SynthConfig::default(), 7)?;
//! let splits = make_splits(&synth.dataset.manifest, 0.2, 1, 7)?;
//! let config = TrainConfig::for_dataset(&synth.dataset.manifest);
//! let run = cross_validate(&synth.dataset, &splits, &config)?;
//! println!("test accuracy {:.3}", run.summary.accuracy.mean);
//! # Ok::<(), belmil::Error>(())
//! ```

pub mod checkpoint;
pub mod data;
pub mod encoder;
pub mod error;
pub mod loss;
pub mod metrics;
pub mod preprocess;
pub mod report;
pub mod tape;
pub mod train;

pub use checkpoint::Checkpoint;
pub use error::{Error, Result};
