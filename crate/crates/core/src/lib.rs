pub mod bgoe;
pub mod dataset;
pub mod error;
pub mod lqr;
pub mod neural;
pub mod ode;
pub mod pipeline;
pub mod simulate;
pub mod stable_policy;
pub mod stm;
pub mod systems;

pub use error::{Error, Result};
