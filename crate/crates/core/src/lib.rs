//! Single-step bridge-matching neural renderer.
//!
//! The crate is organised bottom-up:
//!
//! - [`scene`]: procedural scenes, G-buffer rasterization, direct-illumination
//!   reference rendering and the on-disk sequence format.
//! - [`bridge`]: Brownian-bridge interpolants, velocity targets and the
//!   ODE/SDE update rules.
//! - [`net`]: the conditional patch transformer with envmap, keyframe and
//!   inverse adapters.
//! - [`train`]: losses, optimizer, checkpoints and the two training stages.
//! - [`infer`]: single/multi-step, progressive and keyframe-guided inference.
//! - [`inverse`]: intrinsic decomposition on top of a frozen forward model.
//! - [`metrics`] and [`ablation`]: evaluation and the ablation runner.
//! - [`config`]: the layered run configuration used by the CLI.

pub mod ablation;
pub mod bridge;
pub mod clip;
pub mod config;
pub mod error;
pub mod infer;
pub mod inverse;
pub mod metrics;
pub mod net;
pub mod scene;
pub mod train;

pub use error::{Error, Result};
pub use ndarray;
