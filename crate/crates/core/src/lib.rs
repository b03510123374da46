pub mod data;
pub mod error;
pub mod factors;
pub mod fsutil;
pub mod gram;
pub mod net;
pub mod numkit;
pub mod oracle;
pub mod pipeline;
pub mod spectral;
pub mod traj;

pub use error::{Error, Result};
