//! Learnable depth scaling for decoder-only transformers.
//!
//! The crate decomposes each weight family of a trained model in a shared
//! SVD basis, learns a map from neighbouring layers' coefficients to the
//! coefficients of an intermediate layer, and uses it to synthesise new
//! layers when growing a model. Training, evaluation and analysis of the
//! toy models used in the experiments are included.

pub mod checkpoint;
pub mod error;
pub mod lfck;
pub mod lm;
pub mod numkernel;
pub mod predictor;
pub mod svdspace;
pub mod trainpipe;
pub mod expansion;
pub mod analysis;

pub use checkpoint::{
    load_checkpoint, save_checkpoint, LayerWeights, MatrixFamily, ModelConfig, TransformerCheckpoint,
};
pub use error::{Error, Result};
pub use numkernel::{matmul, rng_normal, svd_thin, Rng, Svd, Tensor};
pub use svdspace::{concat_layers, SvdSpace};
