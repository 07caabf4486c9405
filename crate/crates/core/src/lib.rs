//! Desk-scale laboratory for classifier-guided diffusion sampling.
//!
//! The crate pairs an analytically solvable Gaussian-mixture world (exact
//! scores, exact robust/non-robust posteriors, exact denoisers) with a
//! procedurally generated sprite world driven by small trained networks.
//! On top of both sit a guided ancestral sampler with four gradient paths
//! (plain / denoised-estimate chain rule, raw / ADAM-adjusted) and the
//! diagnostics used to compare them: step-to-step cosine similarity of the
//! conditioning terms, Fréchet distance between sample sets, and guidance
//! accuracy.

pub mod analysis;
pub mod error;
pub mod gmm;
pub mod guidance;
pub mod nn;
pub mod schedule;
pub mod sprites;

pub use error::{Error, Result};
