//! Proxy-guided perturbation of frozen encoder outputs.
//!
//! A small non-autoregressive proxy is trained on the encoder states of a
//! frozen toy encoder-decoder model to predict the sequence-level score of
//! its greedy decodings. The proxy's gradient with respect to the encoder
//! states is then used, one norm-matched step per position, to nudge the
//! decoder towards better outputs.

pub mod autodiff;
pub mod checkpoint;
pub mod error;
pub mod harness;
pub mod metrics;
pub mod nap;
pub mod params;
pub mod perturb;
pub mod search;
pub mod seq2seq;
pub mod tasks;
pub mod tensor;
pub mod vocab;

pub use autodiff::{finite_difference_check, Graph, Var};
pub use tensor::Tensor;
