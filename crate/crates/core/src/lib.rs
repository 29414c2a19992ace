pub mod crm;
pub mod encoder;
pub mod error;
pub mod fusion;
pub mod harness;
pub mod head;
pub mod imaging;
pub mod numeric;

pub use error::{Error, Result};
