//! Differentiable space-time Gaussian splatting on the CPU.
//!
//! Each primitive lives at an arbitrary position and time, moves linearly with
//! its own velocity and fades in and out through a Gaussian temporal opacity.
//! The crate covers the representation, a tile-based rasterizer with an
//! analytic backward pass, the training objective, Adam optimization with
//! periodic relocation, 4D initialization from multi-view correspondences and
//! the scene/checkpoint IO used by the `ftgs` command-line tool.

pub mod appearance;
pub mod config;
pub mod error;
pub mod imagebuf;
pub mod initfit;
pub mod objective;
pub mod optimizer;
pub mod primitives;
pub mod projection;
pub mod rasterizer;
pub mod relocation;
pub mod scenedata;
pub mod train;

pub use error::{Error, Result};
pub use imagebuf::Image;
pub use primitives::{ActivatedGaussian, Field, GaussianSet, RawPrimitive};
pub use projection::Camera;
