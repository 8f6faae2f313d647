//! Multi-view 2D/3D rigid registration.
//!
//! Renders digitally reconstructed radiographs from CT-like volumes with
//! Siddon ray tracing, scores pose estimates with local and cross-view
//! losses on SE(3), refines poses against fixed X-ray images, and evaluates
//! the result with projected landmark errors.

pub mod error;
pub mod evaluation;
pub mod imaging;
pub mod objective;
pub mod pipeline;
pub mod projector;
pub mod register;
pub mod se3;

pub use error::{Error, Result};
pub use imaging::{Image, LandmarkSet, Volume};
pub use projector::{DetectorGeometry, RenderMode};
pub use se3::{Pose, Twist, TwistDistribution};
