pub mod dsp;
pub mod error;
pub mod ipe;
pub mod model;
pub mod nn;
pub mod simulate;
pub mod training;

pub use error::{Error, Result};
pub use model::{MbtfConfig, Mbtfnet};
