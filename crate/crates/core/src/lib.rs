#![allow(clippy::neg_cmp_op_on_partial_ord)] // `!(x > 0.0)` also rejects NaN.
#![allow(clippy::needless_range_loop)] // Axis loops index several arrays at once.

pub mod centroidal;
pub mod config;
pub mod error;
pub mod flex;
pub mod gait;
pub mod qp;
pub mod sim;
pub mod tube;
pub mod wholebody;

pub use error::{Error, Result};
