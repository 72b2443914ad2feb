//! Unsupervised domain adaptation for dense segmentation in affinity space.
//!
//! The crate is self-contained: a small tensor library with reverse-mode
//! autodiff ([`tensor`], [`tape`], [`ops`]), the segmentation network and
//! fully-convolutional discriminator ([`nets`]), neighbourhood affinity
//! machinery ([`affinity`]), losses and pseudo-labelling ([`losses`]), a
//! synthetic two-domain benchmark ([`data`]), optimizers and training loops
//! ([`train`]) and evaluation ([`metrics`]).

pub mod affinity;
pub mod checkpoint;
pub mod data;
pub mod error;
pub mod gradcheck;
pub mod losses;
pub mod manifest;
pub mod metrics;
pub mod nets;
pub mod ops;
pub mod optim;
pub mod real;
pub mod rng;
pub mod tape;
pub mod tensor;
pub mod train;

pub use error::{Error, Result};
pub use gradcheck::finite_diff_check;
pub use real::{DType, Real};
pub use tape::{Backward, Gradients, Tape, Var};
pub use tensor::Tensor;

/// Which side of the adaptation a sample comes from.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Domain {
    Source,
    Target,
}

impl Domain {
    pub fn name(self) -> &'static str {
        match self {
            Domain::Source => "source",
            Domain::Target => "target",
        }
    }
}
