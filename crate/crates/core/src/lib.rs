//! Sparse keyframe-centric motion diffusion at desk scale.
//!
//! The denoiser attends only to a keyframe subset of the frames, chosen by
//! Visvalingam-Whyatt simplification of the motion curve during training and
//! by a uniform-then-refined schedule while sampling. Non-keyframes are
//! reconstructed by linear interpolation in feature space.

pub mod config;
pub mod diffusion;
pub mod eval;
pub mod io;
pub mod keyframes;
pub mod lipschitz;
pub mod model;
pub mod motion;
pub mod parallel;
pub mod rng;
pub mod tensor;

pub use keyframes::{KeyframeMask, PriorityList};
pub use motion::{MotionSequence, SkeletonLayout};
pub use tensor::{Tape, Tensor, Var};
