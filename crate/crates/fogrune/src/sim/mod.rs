//! Deterministic discrete-event simulation of a whole cluster.
//!
//! [`scenario`] describes a run (nodes, links, device fleets, functions,
//! fault injections), [`cluster`] executes it over the [`engine`] event
//! queue, and [`metrics`] accumulates what happened into a serializable
//! report. [`bench`] builds the micro-benchmarks on top.

pub mod bench;
pub mod cluster;
pub mod engine;
pub mod metrics;
pub mod scenario;

pub use bench::{BenchReport, MigrationBench, ScalingRow, StartupRow};
pub use cluster::Cluster;
pub use engine::EventQueue;
pub use metrics::{LatencyStats, MetricsCollector, MetricsReport, TrafficStats};
pub use scenario::{
    DeviceGroup, Injection, LinkConfig, Mobility, Mode, NodeConfig, SimConfig,
};
