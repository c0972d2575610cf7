//! Determined blind source separation with independent low-rank matrix
//! analysis under an isotropic complex Student's t source model.
//!
//! The pipeline runs from multichannel audio to separated source images:
//! [`stft`] analysis, the [`engine`] loop (built from [`demix`] and
//! [`source_model`]), back-projection, and [`metrics`] for evaluation.
//! [`pipeline`] wraps the whole chain for time-domain signals and [`wav`]
//! handles files. [`synth`] and [`harness`] generate and run synthetic
//! scenes; [`oracle`] checks the inequalities the monotone-convergence
//! argument rests on.

pub mod demix;
pub mod engine;
pub mod error;
pub mod harness;
pub mod linalg;
pub mod metrics;
pub mod oracle;
pub mod pipeline;
pub mod source_model;
pub mod spectrogram;
pub mod stft;
pub mod synth;
pub mod wav;

pub use error::{Error, Result};
pub use spectrogram::{ComplexSpectrogram, StftMeta};
