//! Self-supervised depth, normal and edge estimation with
//! as-smooth-as-possible geometric regularization.

pub mod asap;
pub mod depth_normal;
pub mod edge_gt;
pub mod eigen;
pub mod error;
pub mod geometry;
pub mod gradcheck;
pub mod io;
pub mod maps;
pub mod metrics;
pub mod optimizer;
pub mod synth;
pub mod view_synthesis;

pub use error::{Error, Result};
