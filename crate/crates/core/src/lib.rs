pub mod access;
pub mod digest;
pub mod fabric;
pub mod fsutil;
pub mod gateway;
pub mod journal;
pub mod model;
pub mod pipeline;
pub mod sim;
pub mod store;
pub mod study;
pub mod table;
pub mod time;

pub use fabric::{Fabric, OpenError};
