pub mod bench;
pub mod client;
pub mod database;
pub mod dpf;
pub mod error;
pub mod netproto;
pub mod pimsim;
pub mod server;
pub mod subresult;

pub use error::{Error, Result};
pub use subresult::Subresult;
