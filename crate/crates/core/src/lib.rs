pub mod analysis;
pub mod bitcode;
pub mod data;
pub mod decode;
pub mod diffcore;
pub mod error;
pub mod linalg;
pub mod model;
pub mod ood;
pub mod retrieval;
pub mod train;

pub use error::{Error, ErrorKind, Result};
