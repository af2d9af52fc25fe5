//! Micro-benchmarks over the orchestration path.
//!
//! These run the orchestrator, discovery and workers directly, without the
//! cluster transport, so every number is a property of the components
//! themselves: task startup composition, migration overlap, launch
//! throughput scaling and raw decision latency.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::context::{geohash_encode, ContextEntity, GeoPoint, LogicalTime, Selector};
use crate::discovery::{AvailabilityRegistration, Discovery};
use crate::function::{FogFunction, GroupBy, InputSelector};
use crate::message::NotificationSink;
use crate::operator::{OperatorHost, OperatorRegistry};
use crate::orchestrator::{
    MigrationTrigger, OrchestrationAction, Orchestrator, OrchestratorConfig, PlacementPolicy,
};
use crate::sim::metrics::LatencyStats;
use crate::worker::{LaunchTimingModel, TaskState, Worker};

/// Startup of a single task under one timing model.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct StartupRow {
    pub case: String,
    pub fetch_delay_ms: u64,
    pub launch_delay_ms: u64,
    pub operator_cached: bool,
    /// Decision to Running, virtual milliseconds.
    pub measured_ms: u64,
    pub expected_ms: u64,
}

/// Live migration of one task between two warm workers.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct MigrationBench {
    pub launch_delay_ms: u64,
    pub terminate_delay_ms: u64,
    /// Plan dispatch until both the new task runs and the old one is gone.
    pub measured_ms: u64,
    pub max_phase_ms: u64,
    pub sum_phases_ms: u64,
}

/// Launch throughput for one worker-pool size.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ScalingRow {
    pub workers: u32,
    pub tasks: u32,
    pub makespan_ms: u64,
    pub throughput_per_s: f64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct BenchReport {
    pub startup: Vec<StartupRow>,
    pub migration: MigrationBench,
    pub scaling: Vec<ScalingRow>,
    /// Wall-clock decision latency; absent unless requested.
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub decision: Option<LatencyStats>,
}

pub fn run_benches(include_decision: bool) -> BenchReport {
    BenchReport {
        startup: startup_bench(),
        migration: migration_bench(),
        scaling: [1, 2, 4, 8]
            .iter()
            .map(|&w| scaling_row(w, 40, 500))
            .collect(),
        decision: if include_decision {
            decision_bench(1_000, 10)
        } else {
            None
        },
    }
}

struct NullHost;

impl OperatorHost for NullHost {
    fn query(&mut self, _selector: &Selector) -> Vec<ContextEntity> {
        Vec::new()
    }

    fn subscribe(&mut self, _selector: Selector) {}
}

fn orchestrator(migration_enabled: bool) -> Orchestrator {
    Orchestrator::new(
        OrchestratorConfig {
            policy: PlacementPolicy::Locality,
            migration_enabled,
            project_inputs: false,
            heartbeat_interval_ms: 10_000,
            sink: NotificationSink {
                node_id: "cloud".into(),
                channel: "orchestrator".into(),
            },
        },
        OperatorRegistry::with_builtins(),
    )
}

fn cell(lat: f64, lon: f64) -> String {
    geohash_encode(GeoPoint { lat, lon }, 5).expect("valid benchmark coordinates")
}

fn edge_worker(id: &str, geohash: &str, timing: LaunchTimingModel, capacity: u32) -> Worker {
    Worker::new(
        id,
        id.trim_start_matches("w@"),
        geohash,
        false,
        capacity,
        timing,
        OperatorRegistry::with_builtins(),
    )
}

fn watch_function(name: &str, entity_type: &str, operator: &str) -> FogFunction {
    let mut input = InputSelector::new(entity_type, GroupBy::PerEntityId);
    input.attribute_set = vec!["speed_kmh".into()];
    let mut f = FogFunction::new(name, operator, vec![input]);
    f.output_types = vec!["SpeedEstimate".into()];
    f
}

fn registration(
    entity_id: &str,
    entity_type: &str,
    provider: &str,
    geohash: &str,
    now: LogicalTime,
) -> AvailabilityRegistration {
    AvailabilityRegistration {
        entity_id: entity_id.into(),
        entity_type: entity_type.into(),
        attribute_names: ["speed_kmh", "location"]
            .iter()
            .map(|s| s.to_string())
            .collect(),
        provider_broker: provider.into(),
        geohash: geohash.into(),
        registered_at: now,
        ttl_s: 600,
    }
}

/// discovery.register plus the orchestrator's reaction, actions collected.
fn feed_registration(
    disc: &mut Discovery,
    orch: &mut Orchestrator,
    reg: AvailabilityRegistration,
    now: LogicalTime,
) -> Vec<OrchestrationAction> {
    let outcome = disc.register(reg);
    let mut actions = Vec::new();
    for ev in outcome.events {
        let out = orch.on_event(&ev, now);
        debug_assert!(out.value_fetches.is_empty(), "bench paths are fetch-free");
        actions.extend(out.actions);
    }
    actions
}

fn introduce(orch: &mut Orchestrator, worker: &Worker, now: LogicalTime) {
    let _ = orch.on_worker_heartbeat(worker.heartbeat(now), now);
}

/// Run one AddTask through a worker and return (task_id, running_at).
fn launch_one(
    worker: &mut Worker,
    action: &OrchestrationAction,
    now: LogicalTime,
) -> (String, LogicalTime) {
    let OrchestrationAction::AddTask { spec, .. } = action else {
        panic!("expected an AddTask, got {action:?}");
    };
    let out = worker.execute(action, now).expect("worker accepts the task");
    let ready_at = out.ready_at.expect("AddTask yields a ready time");
    let activation = worker
        .activate_task(&spec.task_id, ready_at, &mut NullHost)
        .expect("task activates");
    assert_eq!(activation.report.state, TaskState::Running);
    (spec.task_id.clone(), activation.report.at)
}

fn startup_case(
    case: &str,
    timing: LaunchTimingModel,
    prefetch: bool,
    expected_ms: u64,
) -> StartupRow {
    let fetch_delay_ms = timing.fetch_delay_ms;
    let launch_delay_ms = timing.launch_delay_ms;
    let mut orch = orchestrator(false);
    let mut disc = Discovery::new(5, 600);
    let hash = cell(52.52, 13.40);
    let mut worker = edge_worker("w@edge", &hash, timing, 8);
    if prefetch {
        worker.prefetch("speed_estimation");
    }
    let now: LogicalTime = 1_000_000;
    introduce(&mut orch, &worker, now);
    for sub in orch
        .register_function(watch_function("speed_watch", "Car", "speed_estimation"))
        .expect("valid function")
    {
        disc.subscribe_availability(sub);
    }
    let actions = feed_registration(
        &mut disc,
        &mut orch,
        registration("car-1", "Car", "broker@edge", &hash, now),
        now,
    );
    assert_eq!(actions.len(), 1, "one producer, one task");
    let (_, running_at) = launch_one(&mut worker, &actions[0], now);
    StartupRow {
        case: case.into(),
        fetch_delay_ms,
        launch_delay_ms,
        operator_cached: prefetch,
        measured_ms: (running_at - now) / 1_000,
        expected_ms,
    }
}

pub fn startup_bench() -> Vec<StartupRow> {
    vec![
        startup_case(
            "decision_only",
            LaunchTimingModel {
                fetch_delay_ms: 0,
                launch_delay_ms: 0,
                terminate_delay_ms: 0,
            },
            true,
            0,
        ),
        startup_case(
            "launch_only",
            LaunchTimingModel {
                fetch_delay_ms: 5_000,
                launch_delay_ms: 2_000,
                terminate_delay_ms: 300,
            },
            true,
            2_000,
        ),
        startup_case(
            "fetch_and_launch",
            LaunchTimingModel {
                fetch_delay_ms: 5_000,
                launch_delay_ms: 2_000,
                terminate_delay_ms: 300,
            },
            false,
            7_000,
        ),
    ]
}

/// One producer move between two warm edges: the new task launches while
/// the old one tears down, so the cost is the larger phase, not the sum.
pub fn migration_bench() -> MigrationBench {
    let timing = LaunchTimingModel {
        fetch_delay_ms: 5_000,
        launch_delay_ms: 2_000,
        terminate_delay_ms: 300,
    };
    let cell_a = cell(52.52, 13.40);
    let cell_b = cell(48.14, 11.58);
    let mut orch = orchestrator(true);
    let mut disc = Discovery::new(5, 600);
    let mut worker_a = edge_worker("w@a", &cell_a, timing.clone(), 8);
    let mut worker_b = edge_worker("w@b", &cell_b, timing.clone(), 8);
    worker_a.prefetch("speed_estimation");
    worker_b.prefetch("speed_estimation");

    let mut now: LogicalTime = 1_000_000;
    introduce(&mut orch, &worker_a, now);
    introduce(&mut orch, &worker_b, now);
    for sub in orch
        .register_function(watch_function("speed_watch", "Car", "speed_estimation"))
        .expect("valid function")
    {
        disc.subscribe_availability(sub);
    }

    let actions = feed_registration(
        &mut disc,
        &mut orch,
        registration("car-1", "Car", "broker@a", &cell_a, now),
        now,
    );
    assert_eq!(actions.len(), 1);
    assert_eq!(actions[0].worker_id(), "w@a");
    let (task_a, running_at) = launch_one(&mut worker_a, &actions[0], now);
    orch.on_task_report(&crate::worker::TaskReport {
        worker_id: "w@a".into(),
        task_id: task_a.clone(),
        state: TaskState::Running,
        inputs: vec![],
        at: running_at,
    });

    // The producer re-homes to the other edge.
    now = running_at + 5_000_000;
    let outcome = disc.register(registration("car-1", "Car", "broker@b", &cell_b, now));
    let change = outcome.change.expect("provider change surfaces");
    let plan = orch.plan_migration(&MigrationTrigger::ProducerMoved {
        entity_id: change.entity_id,
        new_geohash: change.new_geohash,
        new_provider: Some(change.new_provider),
    });
    assert_eq!(plan.pairs.len(), 1, "exactly one task follows the producer");

    let dispatch = now;
    let mut new_running_at = 0;
    let mut old_terminated_at = 0;
    for action in &plan.actions {
        match action {
            OrchestrationAction::AddTask { .. } => {
                let (_, at) = launch_one(&mut worker_b, action, dispatch);
                new_running_at = at;
            }
            OrchestrationAction::RemoveTask { .. } => {
                let out = worker_a.execute(action, dispatch).expect("task exists");
                let report = out.report.expect("RemoveTask reports Terminated");
                assert_eq!(report.state, TaskState::Terminated);
                old_terminated_at = report.at;
            }
            other => panic!("unexpected migration action {other:?}"),
        }
    }
    assert!(new_running_at > 0 && old_terminated_at > 0);

    let launch_us = timing.launch_delay_ms * 1_000;
    let term_us = timing.terminate_delay_ms * 1_000;
    MigrationBench {
        launch_delay_ms: timing.launch_delay_ms,
        terminate_delay_ms: timing.terminate_delay_ms,
        measured_ms: (new_running_at.max(old_terminated_at) - dispatch) / 1_000,
        max_phase_ms: launch_us.max(term_us) / 1_000,
        sum_phases_ms: (launch_us + term_us) / 1_000,
    }
}

/// K producers appear at once over W same-cell workers; each worker's
/// launcher is serial, so the pool's launch throughput should scale with W.
pub fn scaling_row(workers: u32, tasks: u32, launch_ms: u64) -> ScalingRow {
    let timing = LaunchTimingModel {
        fetch_delay_ms: 0,
        launch_delay_ms: launch_ms,
        terminate_delay_ms: 0,
    };
    let hash = cell(52.52, 13.40);
    let mut orch = orchestrator(false);
    let mut disc = Discovery::new(5, 600);
    let mut pool: BTreeMap<String, Worker> = BTreeMap::new();
    let now: LogicalTime = 1_000_000;
    for i in 0..workers {
        let id = format!("w@e{i}");
        let mut w = edge_worker(&id, &hash, timing.clone(), tasks);
        w.prefetch("speed_estimation");
        introduce(&mut orch, &w, now);
        pool.insert(id, w);
    }
    for sub in orch
        .register_function(watch_function("speed_watch", "Car", "speed_estimation"))
        .expect("valid function")
    {
        disc.subscribe_availability(sub);
    }

    let mut actions = Vec::new();
    for i in 0..tasks {
        actions.extend(feed_registration(
            &mut disc,
            &mut orch,
            registration(&format!("car-{i:03}"), "Car", "broker@e0", &hash, now),
            now,
        ));
    }
    assert_eq!(actions.len(), tasks as usize);

    let mut last_running: LogicalTime = now;
    for action in &actions {
        let worker = pool
            .get_mut(action.worker_id())
            .expect("placed on a pool worker");
        let (_, running_at) = launch_one(worker, action, now);
        last_running = last_running.max(running_at);
    }
    let makespan_us = last_running - now;
    ScalingRow {
        workers,
        tasks,
        makespan_ms: makespan_us / 1_000,
        throughput_per_s: tasks as f64 / (makespan_us as f64 / 1_000_000.0),
    }
}

/// Wall-clock latency of the orchestrator's availability handler at scale.
pub fn decision_bench(entities: usize, functions: usize) -> Option<LatencyStats> {
    let mut orch = orchestrator(false);
    let mut disc = Discovery::new(5, 600);
    let hash = cell(52.52, 13.40);
    let now: LogicalTime = 1_000_000;
    for i in 0..4 {
        let w = edge_worker(
            &format!("w@e{i}"),
            &hash,
            LaunchTimingModel::default(),
            entities as u32,
        );
        introduce(&mut orch, &w, now);
    }
    for k in 0..functions {
        let f = watch_function(&format!("watch-{k}"), &format!("Sensor{k}"), "dummy");
        for sub in orch.register_function(f).expect("valid function") {
            disc.subscribe_availability(sub);
        }
    }
    let mut samples = Vec::with_capacity(entities);
    for i in 0..entities {
        let ty = format!("Sensor{}", i % functions);
        let reg = registration(&format!("sensor-{i:04}"), &ty, "broker@e0", &hash, now);
        let outcome = disc.register(reg);
        for ev in outcome.events {
            let t0 = std::time::Instant::now();
            let _ = orch.on_event(&ev, now);
            samples.push(t0.elapsed().as_micros() as u64);
        }
    }
    LatencyStats::from_samples(&samples)
}
