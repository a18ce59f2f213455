//! Narrative action evaluation at desk scale.
//!
//! A self-contained stack for training and evaluating a prompt-guided
//! multimodal commentary model on synthetic data: a small autodiff tensor
//! core, quantile score intervals rendered as text prompts, two
//! cross-attention interaction blocks, a template-driven text decoder with a
//! tri-token attention mask, the full captioning/AQA metric suite, and a
//! reproducible CLI harness.

pub mod checkpoint;
pub mod config;
pub mod data;
pub mod evaluate;
pub mod generator;
pub mod interaction;
pub mod lexicon;
pub mod model;
pub mod nn;
pub mod optim;
pub mod params;
pub mod score_space;
pub mod tensor;
pub mod text_eval;
pub mod train;
pub mod vocab;
pub mod words;

pub use params::{ParamStore, Parameter, Session};
pub use tensor::{Tape, Tensor, TensorError, Value};
