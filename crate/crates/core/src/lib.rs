//! Context-self contrastive pre-training for dense segmentation.
//!
//! The crate covers the whole pipeline at desk scale: class-agnostic pair
//! labels from dense annotations, local cosine affinities with relative
//! positional encodings, the masked contrastive loss with analytic
//! gradients, a reduced-space path for dilated strided windows, a synthetic
//! parcel generator, a small trainable encoder and segmentation metrics.

pub mod check;
pub mod encoder;
pub mod error;
pub mod gradcheck;
pub mod io;
pub mod labels;
pub mod loss;
pub mod metrics;
pub mod nn;
pub mod rng;
pub mod similarity;
pub mod strided;
pub mod synth;
pub mod tensor;
pub mod train;
pub mod window;

pub use error::{Error, Result};
pub use labels::{LabelMap, PairLabelTensor, PairMask};
pub use loss::{LossForm, LossOutput, PretrainDiagnostics};
pub use rng::Rng;
pub use similarity::ProjectionParams;
pub use tensor::{l2_normalize_lastdim, DType, Element, Real, Tensor};
pub use window::{effective_window, PadFlags, WindowConfig};
