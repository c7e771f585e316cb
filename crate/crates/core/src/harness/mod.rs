pub mod bench;
pub mod config;
pub mod io;
pub mod metrics;
