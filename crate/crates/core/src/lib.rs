//! Bézier-curve lane detection at desk scale: curve geometry, a small
//! reverse-mode tape, curve attention, Chamfer-IoU losses, label assignment,
//! a toy detector and a synthetic scene generator.

pub mod assign;
pub mod attention;
pub mod bezier;
pub mod camera;
pub mod diff;
mod error;
pub mod eval;
pub mod fit;
pub mod gradsuite;
pub mod lanes;
pub mod loss;
pub mod model;
mod nn;
pub mod synth;

pub use error::{Error, Result};
