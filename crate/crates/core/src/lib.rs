pub mod attention;
pub mod embedding;
pub mod error;
pub mod eval;
pub mod io;
pub mod model;
pub mod numerics;
pub mod text;
pub mod training;

pub use error::{Error, Result};
