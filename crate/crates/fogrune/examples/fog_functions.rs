//! Fog functions are declarative: an operator name plus input selectors.
//! The grouping mode decides how many task instances serve a stream of
//! entities; nothing here launches real code yet.

use fogrune::context::{Attribute, AttributeValue, ContextEntity, GeoPoint};
use fogrune::context::geohash_encode;
use fogrune::discovery::{AvailabilityRegistration, Discovery};
use fogrune::function::{validate, FogFunction, GroupBy, InputSelector};
use fogrune::message::NotificationSink;
use fogrune::operator::OperatorRegistry;
use fogrune::orchestrator::{Orchestrator, OrchestratorConfig, PlacementPolicy};
use fogrune::worker::{LaunchTimingModel, Worker};

fn orchestrator(registry: &OperatorRegistry) -> Orchestrator {
    Orchestrator::new(
        OrchestratorConfig {
            policy: PlacementPolicy::Locality,
            migration_enabled: false,
            project_inputs: false,
            heartbeat_interval_ms: 10_000,
            sink: NotificationSink { node_id: "mgmt".into(), channel: "orchestrator".into() },
        },
        registry.clone(),
    )
}

/// Registers ten sensors (three distinct zones) against a fresh
/// orchestrator and reports how many task instances the function needs.
fn deploy(f: FogFunction, registry: &OperatorRegistry) -> usize {
    let now = 1_000_000;
    let cell = geohash_encode(GeoPoint { lat: 52.52, lon: 13.40 }, 5).unwrap();
    let mut orch = orchestrator(registry);
    let mut disc = Discovery::new(5, 600);
    let worker = Worker::new(
        "w@edge", "edge", &cell, false, 64,
        LaunchTimingModel::default(), registry.clone(),
    );
    orch.on_worker_heartbeat(worker.heartbeat(now), now);
    for sub in orch.register_function(f).unwrap() {
        disc.subscribe_availability(sub);
    }
    for k in 0..10 {
        let out = disc.register(AvailabilityRegistration {
            entity_id: format!("sensor-{k}"),
            entity_type: "Sensor".into(),
            attribute_names: ["reading", "zone"].iter().map(|s| s.to_string()).collect(),
            provider_broker: "broker@edge".into(),
            geohash: cell.clone(),
            registered_at: now,
            ttl_s: 600,
        });
        for ev in out.events {
            let o = orch.on_event(&ev, now);
            for vf in o.value_fetches {
                // Grouping by attribute value needs the value itself, which
                // the index does not hold. The orchestrator asks for it and
                // we answer as the provider broker would: zones rotate k%3.
                let mut e = ContextEntity::new(format!("sensor-{k}"), "Sensor");
                e.attributes.insert(
                    "zone".into(),
                    Attribute::new("zone", AttributeValue::Text(format!("z{}", k % 3)), now, "demo"),
                );
                orch.on_value_fetched(&vf.query_id, &[e], now);
            }
        }
    }
    orch.task_count()
}

fn main() {
    let registry = OperatorRegistry::with_builtins();
    println!(
        "built-in operators: {:?}",
        registry.names().collect::<Vec<_>>()
    );

    // Validation is plain data checking: unknown operators, empty inputs
    // and malformed constraints come back as diagnostics, not panics.
    let bad = FogFunction::new("broken", "warp_drive", vec![]);
    for d in validate(&bad, &registry) {
        println!("diagnostic: {d}");
    }

    let input = |group_by| {
        let mut i = InputSelector::new("Sensor", group_by);
        i.attribute_set = vec!["reading".into()];
        i
    };

    // Same ten sensors, three grouping modes, three very different
    // deployment shapes.
    let per_id = FogFunction::new("per_id", "dummy", vec![input(GroupBy::PerEntityId)]);
    println!("\nPerEntityId      -> {} tasks (one per sensor)", deploy(per_id, &registry));

    let per_type = FogFunction::new("per_type", "dummy", vec![input(GroupBy::PerEntityType)]);
    println!("PerEntityType    -> {} task  (one for the whole stream)", deploy(per_type, &registry));

    let per_zone = FogFunction::new(
        "per_zone",
        "dummy",
        vec![input(GroupBy::PerAttributeValue { attribute: "zone".into() })],
    );
    println!("PerAttributeValue -> {} tasks (one per distinct zone)", deploy(per_zone, &registry));

    // A function can demand more than the defaults: output types for
    // chaining, a priority for overload eviction, a geo scope to pin where
    // it applies.
    let mut tuned = FogFunction::new("speed_watch", "speed_estimation", vec![{
        let mut i = InputSelector::new("Car", GroupBy::PerEntityId);
        i.attribute_set = vec!["speed_kmh".into()];
        i
    }]);
    tuned.output_types = vec!["SpeedEstimate".into()];
    tuned.priority = 80;
    println!(
        "\nspeed_watch validates clean: {}",
        validate(&tuned, &registry).is_empty()
    );
    println!("as JSON:\n{}", serde_json::to_string_pretty(&tuned).unwrap());
}
