pub mod config;
pub mod dcnn;
pub mod error;
pub mod eval;
pub mod gradcheck;
pub mod losses;
pub mod ops;
pub mod optim;
pub mod phantom;
pub mod pipeline;
pub mod rng;
pub mod tensor;
pub mod uncertainty;
pub mod uqt;

pub use error::{Error, Result};
pub use rng::RngStream;
pub use tensor::{LabelMap, Real, Tensor, NUM_CLASSES};
