pub mod cbct_update;
pub mod confidence;
pub mod error;
pub mod flow;
pub mod grid;
pub mod io;
pub mod metrics;
pub mod phantom;
pub mod registration;
pub mod rigid;

pub use error::{Error, Result};
