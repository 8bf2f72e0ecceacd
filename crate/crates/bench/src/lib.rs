//! Benchmark-only package; see `benches/`.

pub use pooldev_core;
