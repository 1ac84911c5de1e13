//! Promptable 3D segmentation with a mixture of expert mask decoders.
//!
//! A shared image encoder and prompt encoder feed a general mask decoder and
//! any number of finetuned expert decoders. An attention gate scores the
//! experts; the selector fuses the Top-1 expert's mask with the general mask
//! only when the gate is confident enough.

pub mod autodiff;
pub mod checkpoint;
pub mod decoder;
pub mod encoders;
pub mod error;
pub mod eval;
pub mod gating;
pub mod losses;
pub mod model;
pub mod nn;
pub mod optim;
pub mod pipeline;
pub mod selector;
pub mod synthdata;
pub mod tensor;
pub mod training;
pub mod volume;

pub use error::{Error, Result};
