//! Tasks move. Three triggers, shown back to back on one deployment:
//! a new edge joining pulls work down from the cloud, a roaming producer
//! drags its task along, and an overloaded worker sheds to the cloud.
//! The replacement launches while the original keeps serving, so the
//! switchover costs one launch, not launch plus teardown.

use std::collections::BTreeMap;

use fogrune::context::{geohash_encode, GeoPoint, LogicalTime};
use fogrune::discovery::{AvailabilityRegistration, Discovery};
use fogrune::function::{FogFunction, GroupBy, InputSelector};
use fogrune::message::NotificationSink;
use fogrune::operator::{NullHost, OperatorRegistry};
use fogrune::orchestrator::{
    MigrationTrigger, OrchestrationAction, Orchestrator, OrchestratorConfig, PlacementPolicy,
    WorkerRecord,
};
use fogrune::worker::{LaunchTimingModel, TaskState, Worker};

fn registration(entity: &str, broker: &str, cell: &str, now: LogicalTime) -> AvailabilityRegistration {
    AvailabilityRegistration {
        entity_id: entity.into(),
        entity_type: "Car".into(),
        attribute_names: ["speed_kmh"].iter().map(|s| s.to_string()).collect(),
        provider_broker: broker.into(),
        geohash: cell.into(),
        registered_at: now,
        ttl_s: 600,
    }
}

fn placements(orch: &Orchestrator) -> String {
    let state = orch.deployment_state();
    let mut parts = Vec::new();
    for by_key in state.functions.values() {
        for (key, inst) in by_key {
            parts.push(format!("{key} on {} ({:?})", inst.worker_id, inst.state));
        }
    }
    if parts.is_empty() { "none".into() } else { parts.join(", ") }
}

/// Dispatches one plan: launches replacements, terminates originals, and
/// reports how long the producer would have gone unserved (no time at all
/// while the original outlives the replacement's launch).
fn run_plan(
    label: &str,
    plan: fogrune::orchestrator::MigrationPlan,
    workers: &mut BTreeMap<String, Worker>,
    orch: &mut Orchestrator,
    now: LogicalTime,
) {
    println!("\n== {label}");
    for pair in &plan.pairs {
        println!(
            "   plan: {}[{}] moves {} -> {}",
            pair.function, pair.group_key, pair.from_worker, pair.to_worker
        );
    }
    let mut running_at = 0;
    let mut terminated_at = 0;
    for action in &plan.actions {
        let worker = workers.get_mut(action.worker_id()).unwrap();
        match action {
            OrchestrationAction::AddTask { spec, .. } => {
                let out = worker.execute(action, now).unwrap();
                let ready = out.ready_at.unwrap();
                let mut host = NullHost;
                let act = worker.activate_task(&spec.task_id, ready, &mut host).unwrap();
                running_at = act.report.at;
                orch.on_task_report(&act.report);
            }
            OrchestrationAction::RemoveTask { .. } => {
                let out = worker.execute(action, now).unwrap();
                let report = out.report.unwrap();
                assert_eq!(report.state, TaskState::Terminated);
                terminated_at = report.at;
                orch.on_task_report(&report);
            }
            other => {
                let out = worker.execute(other, now).unwrap();
                if let Some(report) = out.report {
                    orch.on_task_report(&report);
                }
            }
        }
    }
    if running_at > 0 && terminated_at > 0 {
        println!(
            "   replacement running after {}ms, original gone after {}ms -> switchover {}ms (phases overlap)",
            (running_at - now) / 1_000,
            (terminated_at - now) / 1_000,
            (running_at.max(terminated_at) - now) / 1_000
        );
    }
    println!("   placements: {}", placements(orch));
}

fn main() {
    let registry = OperatorRegistry::with_builtins();
    let timing = LaunchTimingModel { fetch_delay_ms: 3_000, launch_delay_ms: 800, terminate_delay_ms: 300 };
    let cloud_cell = geohash_encode(GeoPoint { lat: 50.0, lon: 10.0 }, 5).unwrap();
    let berlin = geohash_encode(GeoPoint { lat: 52.52, lon: 13.40 }, 5).unwrap();
    let munich = geohash_encode(GeoPoint { lat: 48.14, lon: 11.58 }, 5).unwrap();

    let mut workers = BTreeMap::new();
    let add_worker = |workers: &mut BTreeMap<String, Worker>, id: &str, node: &str, cell: &str, cloud: bool| {
        let mut w = Worker::new(id, node, cell, cloud, 8, timing.clone(), registry.clone());
        w.prefetch("speed_estimation");
        workers.insert(id.to_string(), w);
    };
    add_worker(&mut workers, "w@cloud", "cloud", &cloud_cell, true);

    let mut orch = Orchestrator::new(
        OrchestratorConfig {
            policy: PlacementPolicy::Locality,
            migration_enabled: true,
            project_inputs: false,
            heartbeat_interval_ms: 10_000,
            sink: NotificationSink { node_id: "mgmt".into(), channel: "orchestrator".into() },
        },
        registry.clone(),
    );
    let mut disc = Discovery::new(5, 600);
    let mut now: LogicalTime = 1_000_000;
    orch.on_worker_heartbeat(workers["w@cloud"].heartbeat(now), now);

    let mut input = InputSelector::new("Car", GroupBy::PerEntityId);
    input.attribute_set = vec!["speed_kmh".into()];
    let f = FogFunction::new("speed_watch", "speed_estimation", vec![input]);
    for sub in orch.register_function(f).unwrap() {
        disc.subscribe_availability(sub);
    }

    // With only the cloud available, the berlin car lands there.
    let out = disc.register(registration("car-1", "broker@berlin", &berlin, now));
    for ev in out.events {
        for action in orch.on_event(&ev, now).actions {
            let OrchestrationAction::AddTask { worker_id, spec } = &action else { continue };
            let worker = workers.get_mut(worker_id).unwrap();
            let launched = worker.execute(&action, now).unwrap();
            let mut host = NullHost;
            let act = worker.activate_task(&spec.task_id, launched.ready_at.unwrap(), &mut host).unwrap();
            orch.on_task_report(&act.report);
        }
    }
    println!("== initial placement (cloud is the only worker)");
    println!("   placements: {}", placements(&orch));

    // Trigger 1: an edge worker joins near the producer. The first
    // heartbeat marks it new; that is the cue to replan cloud residents.
    now += 5_000_000;
    add_worker(&mut workers, "w@berlin", "berlin", &berlin, false);
    let hb = orch.on_worker_heartbeat(workers["w@berlin"].heartbeat(now), now);
    assert!(hb.new_worker);
    let plan = orch.plan_migration(&MigrationTrigger::NodeJoined { worker_id: "w@berlin".into() });
    run_plan("edge w@berlin joins: task leaves the cloud", plan, &mut workers, &mut orch, now);

    // A second edge joins, farther from the producer. Nothing moves.
    now += 5_000_000;
    add_worker(&mut workers, "w@munich", "munich", &munich, false);
    orch.on_worker_heartbeat(workers["w@munich"].heartbeat(now), now);
    let plan = orch.plan_migration(&MigrationTrigger::NodeJoined { worker_id: "w@munich".into() });
    println!(
        "\n== edge w@munich joins: {} move(s) planned (producer is still closer to berlin)",
        plan.pairs.len()
    );

    // Trigger 2: the car re-homes to munich. Discovery reports the change,
    // the orchestrator chases the producer.
    now += 5_000_000;
    let out = disc.register(registration("car-1", "broker@munich", &munich, now));
    let change = out.change.expect("the provider changed");
    let plan = orch.plan_migration(&MigrationTrigger::ProducerMoved {
        entity_id: change.entity_id,
        new_geohash: change.new_geohash,
        new_provider: Some(change.new_provider),
    });
    run_plan("car-1 re-homes to munich: task follows", plan, &mut workers, &mut orch, now);

    // Trigger 3: the hosting worker reports overload. Relief planning is
    // always on, even with locality chasing disabled; lowest priority
    // tasks head for the cloud until the worker fits again.
    now += 5_000_000;
    let strained = WorkerRecord {
        worker_id: "w@munich".into(),
        node_id: "munich".into(),
        geohash: munich.clone(),
        is_cloud: false,
        capacity: 0,
        load: 1,
        last_heartbeat: now,
    };
    let hb = orch.on_worker_heartbeat(strained, now);
    let plan = hb.plan.expect("overload sheds work");
    run_plan("w@munich overloaded: task evacuates to the cloud", plan, &mut workers, &mut orch, now);
}
