//! The whole control loop by hand, one message at a time: a device update
//! becomes a registration, the registration becomes an availability event,
//! the event becomes a placement decision, the placed task subscribes to
//! its input and starts producing.
//!
//! The simulation harness automates exactly this exchange; stepping through
//! it once makes the later examples easier to read.

use std::collections::BTreeMap;

use fogrune::broker::Broker;
use fogrune::context::{Attribute, AttributeValue, EntityUpdate, GeoPoint, LogicalTime};
use fogrune::context::geohash_encode;
use fogrune::discovery::Discovery;
use fogrune::function::{FogFunction, GroupBy, InputSelector};
use fogrune::message::NotificationSink;
use fogrune::operator::{NullHost, OperatorRegistry};
use fogrune::orchestrator::{
    OrchestrationAction, Orchestrator, OrchestratorConfig, PlacementPolicy,
};
use fogrune::worker::{LaunchTimingModel, Worker};

fn ms(us: LogicalTime) -> f64 {
    us as f64 / 1_000.0
}

fn main() {
    let mut now: LogicalTime = 1_000_000;
    let registry = OperatorRegistry::with_builtins();
    let berlin = geohash_encode(GeoPoint { lat: 52.52, lon: 13.40 }, 5).unwrap();
    let munich = geohash_encode(GeoPoint { lat: 48.14, lon: 11.58 }, 5).unwrap();

    // The cast: one broker and one worker per edge, a discovery index and
    // an orchestrator that places by geohash proximity.
    let mut brokers = BTreeMap::from([
        ("broker@berlin".to_string(), Broker::new("broker@berlin", "berlin")),
        ("broker@munich".to_string(), Broker::new("broker@munich", "munich")),
    ]);
    let timing = LaunchTimingModel { fetch_delay_ms: 1_000, launch_delay_ms: 500, terminate_delay_ms: 200 };
    let mut workers = BTreeMap::from([
        (
            "w@berlin".to_string(),
            Worker::new("w@berlin", "berlin", &berlin, false, 8, timing.clone(), registry.clone()),
        ),
        (
            "w@munich".to_string(),
            Worker::new("w@munich", "munich", &munich, false, 8, timing.clone(), registry.clone()),
        ),
    ]);
    let mut disc = Discovery::new(5, 600);
    let mut orch = Orchestrator::new(
        OrchestratorConfig {
            policy: PlacementPolicy::Locality,
            migration_enabled: false,
            project_inputs: false,
            heartbeat_interval_ms: 10_000,
            sink: NotificationSink { node_id: "mgmt".into(), channel: "orchestrator".into() },
        },
        registry.clone(),
    );
    for w in workers.values() {
        orch.on_worker_heartbeat(w.heartbeat(now), now);
    }
    println!("== setup: workers w@berlin and w@munich announced via heartbeat");

    // Registering the function installs availability subscriptions; from
    // here on the orchestrator reacts to events, it never polls.
    let mut input = InputSelector::new("Car", GroupBy::PerEntityId);
    input.attribute_set = vec!["speed_kmh".into()];
    let mut speed_watch = FogFunction::new("speed_watch", "speed_estimation", vec![input]);
    speed_watch.output_types = vec!["SpeedEstimate".into()];
    for sub in orch.register_function(speed_watch).unwrap() {
        println!("== function registered; availability subscription {}", sub.sub_id);
        disc.subscribe_availability(sub);
    }

    // A car shows up in Berlin. The broker stores the value and hands back
    // a registration because the entity's shape is new.
    let update = EntityUpdate::new("car-1", "Car")
        .with_attribute(Attribute::new("speed_kmh", AttributeValue::Number(88.0), now, "car-1"))
        .with_location(GeoPoint { lat: 52.52, lon: 13.41 });
    let outcome = brokers.get_mut("broker@berlin").unwrap().publish(&update, now).unwrap();
    let registration = outcome.registration.expect("first publish registers");
    println!(
        "\n[t={:.0}ms] car-1 published at broker@berlin; registration carries names {:?}, cell {}",
        ms(now), registration.attribute_names, registration.geohash
    );

    // Index it. The watcher's subscription matches: one Appear event.
    let events = disc.register(registration).events;
    println!("[t={:.0}ms] discovery emits {} availability event(s)", ms(now), events.len());

    // The orchestrator turns the event into a placement. Locality picks
    // the worker whose cell shares the longest prefix with the producer.
    let mut actions: Vec<OrchestrationAction> = Vec::new();
    for ev in &events {
        actions.extend(orch.on_event(ev, now).actions);
    }
    let mut launch_queue = Vec::new();
    for action in actions {
        let OrchestrationAction::AddTask { worker_id, spec } = &action else { continue };
        println!(
            "[t={:.0}ms] decision: task {} ({}) -> {} ",
            ms(now), spec.task_id, spec.function, worker_id
        );
        let worker = workers.get_mut(worker_id).unwrap();
        let out = worker.execute(&action, now).unwrap();
        for sc in &out.subscribes {
            println!(
                "           task subscribes at {} (sub {}), notifications to {}/{}",
                sc.broker, sc.sub_id, sc.sink.node_id, sc.sink.channel
            );
            let broker = brokers.get_mut(&sc.broker).unwrap();
            let (_, initial) = broker.subscribe(Some(sc.sub_id.clone()), sc.selector.clone(), sc.sink.clone(), now);
            if let Some((sink, n)) = initial {
                // The task is still launching: the worker parks the
                // snapshot and replays it once the sandbox is up.
                let mut host = NullHost;
                worker.deliver(&sink.channel, &n, now, &mut host);
                println!("           snapshot delivered early, queued during launch");
            }
        }
        if let Some(report) = &out.report {
            orch.on_task_report(report);
            println!("           worker reports state {:?}", report.state);
        }
        if let Some(ready_at) = out.ready_at {
            println!(
                "           operator fetch + launch run until t={:.0}ms ({}ms total)",
                ms(ready_at),
                (ready_at - now) / 1_000
            );
            launch_queue.push((ready_at, worker_id.clone(), spec.task_id.clone()));
        }
    }

    // Time passes; the launch completes and the queued snapshot replays
    // through the operator, producing the first result.
    for (ready_at, worker_id, task_id) in launch_queue {
        now = ready_at;
        let mut host = NullHost;
        let worker = workers.get_mut(&worker_id).unwrap();
        let activation = worker.activate_task(&task_id, now, &mut host).unwrap();
        orch.on_task_report(&activation.report);
        println!("\n[t={:.0}ms] {} is running on {}", ms(now), task_id, worker_id);
        for (at, output) in activation.outputs {
            println!(
                "[t={:.0}ms] first output: {} {:?} (operator cost included)",
                ms(at), output.id, output.changed["speed_est"].value
            );
            brokers.get_mut("broker@berlin").unwrap().publish(&output, at).unwrap();
        }
    }

    // Steady state: a fresh device update flows broker -> subscription ->
    // sandbox -> output, no orchestrator involved.
    now += 1_000_000;
    let update = EntityUpdate::new("car-1", "Car")
        .with_attribute(Attribute::new("speed_kmh", AttributeValue::Number(104.6), now, "car-1"));
    let outcome = brokers.get_mut("broker@berlin").unwrap().publish(&update, now).unwrap();
    println!("\n[t={:.0}ms] car-1 speeds up to 104.6", ms(now));
    for (sink, n) in outcome.notifications {
        let mut host = NullHost;
        let out = workers.get_mut("w@berlin").unwrap().deliver(&sink.channel, &n, now, &mut host);
        for (at, output) in out.outputs {
            println!(
                "[t={:.0}ms] task recomputes: {} {:?}",
                ms(at), output.id, output.changed["speed_est"].value
            );
        }
    }

    // The car disappears; the orchestrator tears its task down and the
    // input subscription goes with it.
    now += 1_000_000;
    let events = disc.deregister("car-1", "broker@berlin").unwrap();
    println!("\n[t={:.0}ms] car-1 deregistered", ms(now));
    for ev in &events {
        for action in orch.on_event(ev, now).actions {
            let worker = workers.get_mut(action.worker_id()).unwrap();
            let out = worker.execute(&action, now).unwrap();
            for uc in &out.unsubscribes {
                brokers.get_mut(&uc.broker).unwrap().unsubscribe(&uc.sub_id).unwrap();
                println!("           unsubscribed {} at {}", uc.sub_id, uc.broker);
            }
            if let Some(report) = &out.report {
                orch.on_task_report(report);
                println!("           worker reports state {:?}", report.state);
            }
        }
    }
    println!(
        "\n== quiescent: {} orchestrated tasks, {} broker subscriptions",
        orch.task_count(),
        brokers.values().map(|b| b.subscription_count()).sum::<usize>()
    );
}
