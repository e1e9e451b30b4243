pub mod backbone;
pub mod error;
pub mod harness;
pub mod objectives;
pub mod stack;
pub mod synthdata;
pub mod tensor;
pub mod tfm;

pub use error::{Error, Result};
