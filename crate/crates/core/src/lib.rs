//! Facial performance solving: infer blendshape rig weights from sparse 3D
//! marker tracks with region-wise residual regressors, anchor-pose shape
//! alignment and box-constrained fitting.

pub mod demo;
pub mod error;
pub mod features;
pub mod io;
pub mod neural;
pub mod optimize;
pub mod pipeline;
pub mod rig;
pub mod synth;

pub use error::{Error, Result};
pub use io::{AnimationClip, MarkerTrack, NoiseProfile, WeightTrack};
pub use rig::{clamp_weights, load_rig, MarkerSet, Rig, WeightVector};
