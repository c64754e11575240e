pub mod autodiff;
pub mod dataio;
pub mod error;
pub mod eval;
pub mod kv;
pub mod netdef;
pub mod objective;
pub mod trainer;
pub mod view;

pub use error::{Error, Result};
