//! Serverless backend for modifiable virtual environments.
//!
//! A fixed-rate game server that offloads simulated constructs and terrain
//! generation to an emulated function-as-a-service platform using
//! replicated speculative execution, and persists terrain through a cached
//! blob store.

pub mod construct;
pub mod world;
pub mod spec_exec;
pub mod terrain;
pub mod faas;
pub mod storage;
pub mod server;
pub mod bench;
pub mod workload;
pub mod settings;
