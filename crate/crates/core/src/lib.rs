pub mod error;
pub mod plucker;
pub mod ot;
pub mod scene;
pub mod pose;
pub mod baselines;
pub mod autodiff;
pub mod features;
pub mod train;

pub use error::{Error, Result};
pub use plucker::{LineMotionMatrix, PluckerLine, RigidTransform};
pub mod harness;
