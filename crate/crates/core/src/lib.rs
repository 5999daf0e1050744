//! Video crowd counting on CPU.
//!
//! A lightweight convolutional network ([`lcn`]) turns each frame into a
//! density map at 1/8 resolution. A temporal network ([`tan`]) of chained
//! dilated residual blocks reads the maps of a `2k + 1` frame window and
//! produces fusion weights; the fused map integrates to the frame's count.
//!
//! Supporting modules cover the tensor kernels and reverse-mode
//! differentiation used for training ([`ops`], [`graph`], [`optim`]),
//! ground-truth generation ([`density`]), datasets and synthetic video
//! ([`dataio`]), and evaluation, streaming inference and timing ([`eval`],
//! [`stream`]).

pub mod checkpoint;
pub mod dataio;
pub mod density;
pub mod error;
pub mod eval;
pub mod graph;
pub mod lcn;
pub mod ops;
pub mod optim;
pub mod stream;
pub mod tan;
pub mod tensor;

pub use density::{DensityMap, HeadAnnotations, RoiMask, SigmaMode};
pub use error::{Error, Result};
pub use lcn::{LcnModel, LcnTrainConfig};
pub use tan::{FrameWindow, TanConfig, TanModel};
pub use dataio::{Dataset, SplitSpec, SynthSpec};
pub use eval::EvalReport;
pub use stream::{StreamingCounter, TimingReport};
pub use tensor::{Precision, Scalar, Tensor};
