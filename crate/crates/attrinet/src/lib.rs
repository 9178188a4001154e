//! Transparent multi-label image classification built on class-specific
//! counterfactual attribution maps.
//!
//! A conditional generator produces, for each (image, class) pair, a residual
//! map that, added to the image, pushes it towards the negative appearance of
//! that class; a Wasserstein critic with gradient penalty keeps those
//! counterfactuals on the data manifold, and a tiny logistic head turns the
//! downscaled map directly into the class probability. Because the head sees
//! nothing but the map, the map *is* the explanation of the prediction.
//!
//! Module layout:
//!
//! ```text
//! grad      tape-based reverse-mode autodiff (second-order capable)
//! nn        layers, initialisation, Adam
//! taskgen   task codes, conditional generator, counterfactuals
//! critic    Wasserstein critic and gradient penalty
//! head      per-class logistic head and center loss
//! training  loss assembly, the training loop, checkpoints
//! data      synthetic shape data, chest X-ray CSV loaders, splits
//! eval      AUC, thresholds, class-sensitivity and localisation scores
//! viz       attribution panels and PNG helpers
//! config    key=value run configuration
//! cli       command orchestration behind the `attrinet` binary
//! ```

pub mod cli;
pub mod config;
pub mod critic;
pub mod data;
pub mod eval;
pub mod grad;
pub mod head;
pub mod nn;
pub mod taskgen;
pub mod training;
pub mod viz;
