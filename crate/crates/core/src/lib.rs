pub mod analysis;
pub mod checkpoint;
pub mod cli;
pub mod data;
pub mod desk;
pub mod error;
pub mod io;
pub mod losses;
pub mod model;
pub mod restoration;
pub mod training;

pub use error::{ArgbError, Result};
pub use io::Image;
pub use model::{ArgbModel, EffectiveDecoder, Embedding, Encoder};
