//! defog: a decentralized collective-communication runtime built around
//! partial averaging.
//!
//! The crate provides directed topologies with pull/push/doubly-stochastic
//! weight matrices, synchronous collectives (`allreduce`,
//! `neighbor_allreduce` in static and dynamic forms, hierarchical
//! variants), asynchronous window primitives with a distributed mutex,
//! reference decentralized optimization algorithms, and an experiment
//! harness. Communication runs over one of two interchangeable fabrics:
//! a deterministic in-process simulator with a virtual clock, or TCP for
//! multi-process runs launched by `dfrun`.

pub mod error;
pub mod tensor;
pub mod graph;
pub mod topology;
pub mod transport;
pub mod algorithms;
pub mod collective;
pub mod window;

pub use error::{Error, Result};
pub use graph::{
    classify_weight_matrix, dense_partial_average_oracle, MatrixClass, NeighborSets, Topology,
    WeightScheme,
};
pub use tensor::Tensor;
pub use collective::{CommConfig, CommHandle, Communicator};
