//! A scripted two-function deployment on one edge: per-site forecast tasks
//! turn occupancy counts into free-spot estimates, and a per-car guidance
//! task queries those estimates to recommend where to park. Chaining needs
//! no special wiring, it is just entities: the first function publishes
//! ParkingForecast updates to the broker, the second reads them back.

use fogrune::broker::Broker;
use fogrune::context::{
    geohash_encode, Attribute, AttributeValue, ContextEntity, EntityUpdate, GeoPoint, LogicalTime,
    Selector,
};
use fogrune::discovery::Discovery;
use fogrune::function::{FogFunction, GroupBy, InputSelector};
use fogrune::message::NotificationSink;
use fogrune::operator::{OperatorHost, OperatorRegistry};
use fogrune::orchestrator::{OrchestrationAction, Orchestrator, OrchestratorConfig, PlacementPolicy};
use fogrune::worker::{LaunchTimingModel, Worker};

/// Host wired to the plaza broker: operator queries see whatever has been
/// published there so far. Extra subscriptions are not requested here.
struct BrokerHost<'a> {
    broker: &'a Broker,
}

impl OperatorHost for BrokerHost<'_> {
    fn query(&mut self, selector: &Selector) -> Vec<ContextEntity> {
        self.broker.query(selector)
    }
    fn subscribe(&mut self, _selector: Selector) {}
}

fn num(name: &str, v: f64, ts: LogicalTime, src: &str) -> Attribute {
    Attribute::new(name, AttributeValue::Number(v), ts, src)
}

fn text_of(u: &EntityUpdate, name: &str) -> String {
    match &u.changed[name].value {
        AttributeValue::Text(s) => s.clone(),
        v => format!("{v:?}"),
    }
}

fn num_of(u: &EntityUpdate, name: &str) -> f64 {
    match &u.changed[name].value {
        AttributeValue::Number(n) => *n,
        _ => f64::NAN,
    }
}

fn main() {
    let registry = OperatorRegistry::with_builtins();
    let plaza_cell = geohash_encode(GeoPoint { lat: 52.51, lon: 13.39 }, 5).unwrap();
    let mut plaza = Broker::new("broker@plaza", "plaza");
    let mut worker = Worker::new(
        "w@plaza",
        "plaza",
        &plaza_cell,
        false,
        16,
        LaunchTimingModel { fetch_delay_ms: 0, launch_delay_ms: 100, terminate_delay_ms: 50 },
        registry.clone(),
    );
    worker.prefetch("parking_prediction");
    worker.prefetch("parking_recommendation");
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
    let mut now: LogicalTime = 1_000_000;
    orch.on_worker_heartbeat(worker.heartbeat(now), now);

    let mut site_input = InputSelector::new("ParkingSite", GroupBy::PerEntityId);
    site_input.attribute_set = vec!["capacity".into(), "occupied".into()];
    let mut forecast = FogFunction::new("site_forecast", "parking_prediction", vec![site_input]);
    forecast.output_types = vec!["ParkingForecast".into()];

    let car_input = InputSelector::new("Car", GroupBy::PerEntityId);
    let mut guidance = FogFunction::new("guidance", "parking_recommendation", vec![car_input]);
    guidance.output_types = vec!["ParkingRecommendation".into()];

    for f in [forecast, guidance] {
        for sub in orch.register_function(f).unwrap() {
            disc.subscribe_availability(sub);
        }
    }

    // One publish drives the whole control loop; everything the update
    // triggers (registration, placement, subscription, invocation) runs to
    // completion before the closure returns its outputs.
    let publish = |update: EntityUpdate,
                   now: &mut LogicalTime,
                   plaza: &mut Broker,
                   worker: &mut Worker,
                   disc: &mut Discovery,
                   orch: &mut Orchestrator| {
        let outcome = plaza.publish(&update, *now).unwrap();
        // Deltas reach already-subscribed tasks; the operator runs and its
        // outputs land back on the same broker below.
        let mut produced = Vec::new();
        for (sink, n) in outcome.notifications {
            let out = {
                let mut host = BrokerHost { broker: plaza };
                worker.deliver(&sink.channel, &n, *now, &mut host)
            };
            produced.extend(out.outputs);
        }
        // A new entity shape registers with discovery, which may hand the
        // orchestrator fresh placements.
        if let Some(reg) = outcome.registration {
            for ev in disc.register(reg).events {
                for action in orch.on_event(&ev, *now).actions {
                    let OrchestrationAction::AddTask { spec, .. } = &action else { continue };
                    let task_id = spec.task_id.clone();
                    println!("   task {} ({}) placed on w@plaza", task_id, spec.function);
                    let launched = worker.execute(&action, *now).unwrap();
                    if let Some(report) = &launched.report {
                        orch.on_task_report(report);
                    }
                    for sc in &launched.subscribes {
                        let (_, initial) = plaza.subscribe(
                            Some(sc.sub_id.clone()),
                            sc.selector.clone(),
                            sc.sink.clone(),
                            *now,
                        );
                        if let Some((sink, n)) = initial {
                            let mut host = BrokerHost { broker: plaza };
                            worker.deliver(&sink.channel, &n, *now, &mut host);
                        }
                    }
                    let ready = launched.ready_at.unwrap();
                    let act = {
                        let mut host = BrokerHost { broker: plaza };
                        worker.activate_task(&task_id, ready, &mut host).unwrap()
                    };
                    orch.on_task_report(&act.report);
                    *now = ready;
                    produced.extend(act.outputs);
                }
            }
        }
        for (at, u) in &produced {
            plaza.publish(u, *at).unwrap();
            *now = (*now).max(*at);
        }
        produced
    };

    println!("== three parking sites come online");
    for (site, capacity, occupied) in [
        ("site-mall", 100.0, 96.0),
        ("site-station", 60.0, 12.0),
        ("site-riverside", 30.0, 28.0),
    ] {
        now += 100_000;
        let up = EntityUpdate::new(site, "ParkingSite")
            .with_attribute(num("capacity", capacity, now, site))
            .with_attribute(num("occupied", occupied, now, site))
            .with_location(GeoPoint { lat: 52.51, lon: 13.39 });
        for (_, u) in publish(up, &mut now, &mut plaza, &mut worker, &mut disc, &mut orch) {
            println!("   {} -> {} free spots", u.id, num_of(&u, "free_spots"));
        }
    }

    println!("\n== car-17 drives into the plaza cell");
    now += 100_000;
    let up = EntityUpdate::new("car-17", "Car")
        .with_attribute(num("speed_kmh", 31.0, now, "car-17"))
        .with_location(GeoPoint { lat: 52.512, lon: 13.391 });
    for (_, u) in publish(up, &mut now, &mut plaza, &mut worker, &mut disc, &mut orch) {
        println!(
            "   guidance: park at {} ({} spots free)",
            text_of(&u, "site"),
            num_of(&u, "free_spots")
        );
    }

    println!("\n== the station fills up while riverside empties");
    now += 60_000_000;
    for (site, occupied) in [("site-station", 59.0), ("site-riverside", 3.0)] {
        let up =
            EntityUpdate::new(site, "ParkingSite").with_attribute(num("occupied", occupied, now, site));
        for (_, u) in publish(up, &mut now, &mut plaza, &mut worker, &mut disc, &mut orch) {
            println!("   {} -> {} free spots", u.id, num_of(&u, "free_spots"));
        }
        now += 100_000;
    }

    println!("\n== car-17 moves again; the recommendation follows the data");
    now += 100_000;
    let up =
        EntityUpdate::new("car-17", "Car").with_attribute(num("speed_kmh", 14.0, now, "car-17"));
    for (_, u) in publish(up, &mut now, &mut plaza, &mut worker, &mut disc, &mut orch) {
        println!(
            "   guidance: park at {} ({} spots free)",
            text_of(&u, "site"),
            num_of(&u, "free_spots")
        );
    }

    println!(
        "\n{} tasks on w@plaza, {} subscriptions, {} entities at the broker",
        worker.task_count(),
        plaza.subscription_count(),
        plaza.entity_count()
    );
}
