//! cavforge: physics-based synthetic TEM cavity dataset generation,
//! detection self-regulation, and evaluation metrics.
//!
//! The pipeline turns clean experimental background micrographs into
//! labeled training images of radiation-induced cavities:
//!
//! 1. `physics`   — simulate 1D defocused contrast profiles, cache in a LUT
//! 2. `patch`     — rotate profiles into 2D patches, apply size-classed warping
//! 3. `autolabel` — pixel-precise masks via marker watershed + fringe snapping
//! 4. `detector`  — MTF frequency attenuation and DQE-scaled shot noise
//! 5. `compositor`— placement planning, intensity normalization, Poisson blending
//!
//! Downstream of a detector run, `regulation` scores whole images from
//! per-prediction confidences and filters out-of-domain images, and
//! `metrics` computes pixel confusion, P/R/F1, swelling, and aggregates.
//! `io` holds all file formats (rasters, box files, manifests, config).
//!
//! Everything is deterministic given a seed: identical inputs produce
//! bit-identical outputs. See `seed` for the substream derivation.

pub mod autolabel;
pub mod compositor;
pub mod detector;
pub mod io;
pub mod metrics;
pub mod patch;
pub mod physics;
pub mod regulation;
pub mod seed;
