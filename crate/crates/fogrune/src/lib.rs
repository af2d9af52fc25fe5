//! fogrune — context-driven serverless fog orchestration, desk-scale.
//!
//! The library models a cloud–edge cluster in which small serverless
//! functions ("fog functions") are triggered by the availability of the
//! context entities they declare interest in, placed near the data
//! producers, and migrated as producers move or nodes come and go. A
//! deterministic discrete-event harness simulates the whole cluster —
//! brokers, discovery, orchestrator, workers, devices — with virtual time,
//! link latencies and per-message byte accounting.
//!
//! Start with the runnable examples:
//!
//! ```text
//! cargo run -p fogrune --example publish_subscribe        # broker: partial updates, selectors, projection
//! cargo run -p fogrune --example content_discovery        # availability index, appear/disappear events
//! cargo run -p fogrune --example fog_functions            # function specs, grouping, task-count law
//! cargo run -p fogrune --example orchestration_walkthrough # events -> actions -> task launch, step by step
//! cargo run -p fogrune --example task_migration           # node join, overload and producer-move migrations
//! cargo run -p fogrune --example car_scenario             # cloud vs edge vs fog on the same device trace
//! cargo run -p fogrune --example benchmarks               # startup, migration and throughput measurements
//! cargo run -p fogrune --example smart_parking            # scripted multi-function scenario
//! ```
//!
//! Or the thin CLI over the same machinery: `fogrune validate`, `fogrune
//! run-scenario`, `fogrune bench`, `fogrune inspect`, `fogrune register-func`.

pub mod broker;
pub mod cli;
pub mod context;
pub mod discovery;
pub mod error;
pub mod function;
pub mod message;
pub mod operator;
pub mod orchestrator;
pub mod sim;
pub mod worker;

pub use error::{Diagnostic, FogError};
