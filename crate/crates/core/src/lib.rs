pub mod bank;
pub mod bench;
pub mod cli;
pub mod config;
pub mod corpus;
pub mod diagnostics;
pub mod error;
pub mod fallback;
pub mod graft;
pub mod hash;
pub mod numerics;

pub use error::{Error, Result};
