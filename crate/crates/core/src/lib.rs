//! Interactive FLIM workbench core: marker-learned encoders, the
//! worst-image selection criterion, a dual-encoder U-shaped network with a
//! trainable decoder, metrics and file formats.

pub mod criterion;
pub mod dataset;
pub mod error;
pub mod flim;
pub mod io;
pub mod metrics;
pub mod session;
pub mod simulate;
pub mod sunet;
pub mod tensor;
pub mod train;

pub use error::{Error, Result};
pub use tensor::{KernelBank, Volume};
