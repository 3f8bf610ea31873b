//! Simulation library for clean-label data-poisoning security games against
//! embedding-based recognition systems.
//!
//! The library models the two-party game between users who perturb pictures
//! before uploading them ("attackers") and a model trainer who scrapes those
//! pictures to build a recognizer ("defender"). Everything runs on a synthetic
//! latent-face universe — identities are Gaussian clusters in `[0,1]^d` — so
//! whole attack/defense campaigns execute in seconds on one CPU core.
//!
//! Module map:
//!
//! - [`latentface`] — the synthetic picture universe and dataset plumbing
//! - [`extractor`] — trainable feature extractors, robust fine-tuning, weight
//!   interpolation
//! - [`attack`] — surrogate-ensemble PGD perturbation crafting and the
//!   closeness oracle
//! - [`recognizer`] — nearest-neighbor recognition, classifier heads, gated
//!   dual-model systems, perturbation detection
//! - [`game`] — static and dynamic game execution, transcripts, and the named
//!   scenario catalogue
//! - [`metrics`] — protection rate, top-k accuracy, detection metrics,
//!   cross-trial aggregation

pub mod attack;
pub mod error;
pub mod extractor;
pub mod game;
pub mod latentface;
pub mod metrics;
mod nn;
pub mod recognizer;
pub mod seeds;

pub use error::Error;
