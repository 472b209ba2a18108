//! Reduced flexible biped simulator and the experiments run on it.

pub mod body;
pub mod identify;
pub mod plant;
pub mod profile;
pub mod scenario;
pub mod trace;
