//! Generative 4D inbetweening between two motion states: hierarchical
//! keyframe segmentation, per-fragment dynamic Gaussian-cloud fitting with a
//! HexPlane deformation field and a differentiable splat renderer, bottom-up
//! deformation merging, and sliding-window trajectory smoothing.
//!
//! Heavy generative models stay outside the process behind file-based
//! adapters; the `synth` module provides a closed-form oracle that makes
//! every stage testable at desk scale.

pub mod deformation;
pub mod io;
pub mod optimize;
pub mod renderer;
pub mod scene;
pub mod similarity;
pub mod smoothing;
