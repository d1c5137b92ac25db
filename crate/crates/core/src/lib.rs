pub mod autodiff;
pub mod bridge;
pub mod controller;
pub mod dataset;
pub mod error;
pub mod model;
pub mod oracle;
pub mod render;
pub mod seed;
pub mod track;
pub mod trainer;
pub mod vehicle;

pub use error::{Error, Result};

#[cfg(feature = "fast-alloc")]
#[global_allocator]
static GLOBAL: mimalloc::MiMalloc = mimalloc::MiMalloc;
