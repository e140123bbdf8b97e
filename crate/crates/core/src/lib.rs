//! Embedding-editing algebra for identity-consistent text-to-image generation.
//!
//! The crate works on dumped encoder outputs and scores, never on a model:
//!
//! - [`tensor`]: SVD with sign resolution, cosine, row-space projectors.
//! - [`layout`]: slicing a combined prompt embedding into identity,
//!   per-image and padding segments.
//! - [`stm`]: selective amplification and suppression of singular components.
//! - [`pad`]: padding rows as semantic containers.
//! - [`afs`]: ambiguity classification and the residual sharing plan.
//! - [`cqs`]: the harmonic Consistency Quality Score and weight sweeps.
//! - [`diagnostics`]: spectra and padding-similarity reports.
//! - [`io`]: NPY and JSON formats.

pub mod afs;
pub mod cqs;
pub mod diagnostics;
pub mod error;
pub mod io;
pub mod layout;
pub mod pad;
pub mod schedule;
pub mod stm;
pub mod tensor;

pub use error::{Error, Result};
pub use layout::{PromptManifest, SegmentId};
pub use pad::PadPolicy;
pub use schedule::StepRange;
pub use stm::{ModifyParams, StmParams};
pub use tensor::EmbeddingMatrix;
