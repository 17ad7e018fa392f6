//! Layer-wise adversarial robustness for tabular intrusion detection.
//!
//! The crate trains small MLPs on flow features, attacks them with FGSM and
//! PGD, measures how far each hidden layer's activations move under attack
//! (the layer vulnerability score) and uses those scores three ways: as a
//! learnable per-layer training penalty, as calibrated detection thresholds,
//! and through auxiliary heads that allow early exit at inference time.
//!
//! ```
//! use larar::data::{preprocess, synth_dataset, SplitSpec};
//! use larar::model::{ModelKind, NetworkParams};
//! use larar::training::{train, TrainConfig};
//! use larar::losses::LossWeights;
//!
//! let raw = synth_dataset(200, 4, 4.0, 7);
//! let splits = preprocess(&raw, &SplitSpec::default()).unwrap();
//! let cfg = TrainConfig { epochs: 2, pgd_iterations: 2, ..TrainConfig::default() };
//! let out = train(ModelKind::Larar, &splits.train, &cfg, &LossWeights::default()).unwrap();
//! assert_eq!(out.logs.len(), 2);
//! assert!(out.params.layer_weights().iter().all(|&w| w < 1.0));
//! ```

pub mod attacks;
pub mod checkpoint;
pub mod container;
pub mod data;
pub mod error;
pub mod eval;
pub mod losses;
pub mod model;
pub mod optim;
pub mod report;
pub mod training;
pub mod vulnerability;

pub use error::{LararError, Result};
pub use larar_autodiff as autodiff;
pub use larar_autodiff::Tensor;

#[cfg(doctest)]
mod guide {
    #[doc = include_str!("../../../book/src/introduction.md")]
    mod introduction {}
    #[doc = include_str!("../../../book/src/autodiff.md")]
    mod autodiff {}
    #[doc = include_str!("../../../book/src/model.md")]
    mod model {}
    #[doc = include_str!("../../../book/src/attacks.md")]
    mod attacks {}
    #[doc = include_str!("../../../book/src/vulnerability.md")]
    mod vulnerability {}
    #[doc = include_str!("../../../book/src/training.md")]
    mod training {}
    #[doc = include_str!("../../../book/src/data.md")]
    mod data {}
    #[doc = include_str!("../../../book/src/evaluation.md")]
    mod evaluation {}
    #[doc = include_str!("../../../book/src/cli.md")]
    mod cli {}
    #[doc = include_str!("../../../book/src/verification.md")]
    mod verification {}
}
