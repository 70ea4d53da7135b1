//! Metadata-routed attention and FiLM conditioning for multi-modal MRI
//! models, built on a small reverse-mode tensor engine.

pub mod checkpoint;
pub mod complexity;
pub mod error;
pub mod film;
pub mod gradcheck;
pub mod harness;
pub mod metadata;
pub mod ops;
pub mod optim;
pub mod params;
pub mod seg;
pub mod tape;
pub mod tensor;
pub mod tmax;

pub use error::{Error, Result};
pub use gradcheck::{grad_check, grad_check_many};
pub use metadata::{build_mask, ModalityId, ModalityMask, Plane};
pub use params::{Bound, ParamId, ParamStore};
pub use tape::{Gradients, Tape, Var};
pub use tensor::Tensor;
pub use film::{FilmClassifier, FilmClassifierConfig};
pub use tmax::{attention_flops, AttentionMode, TmaxBlock, TmaxConfig};
