//! Broker basics: partial publishes build entities, selectors find them,
//! subscriptions get a snapshot first and deltas afterwards.

use fogrune::broker::{Broker, NotificationPayload};
use fogrune::context::{
    Attribute, AttributeValue, Constraint, ConstraintOp, EntityUpdate, GeoPoint, GeoScope,
    Selector,
};
use fogrune::message::NotificationSink;

fn main() {
    let mut broker = Broker::new("broker@edge-1", "edge-1");

    // Two partial updates assemble one car. Attributes carry their own
    // timestamps; the second write only touches what changed.
    broker
        .publish(
            &EntityUpdate::new("car-7", "Car")
                .with_attribute(Attribute::new(
                    "speed_kmh",
                    AttributeValue::Number(42.0),
                    1_000,
                    "device-7",
                ))
                .with_attribute(Attribute::new(
                    "model",
                    AttributeValue::Text("vanagon".into()),
                    1_000,
                    "device-7",
                ))
                .with_location(GeoPoint { lat: 52.52, lon: 13.405 }),
            1_000,
        )
        .unwrap();
    broker
        .publish(
            &EntityUpdate::new("car-7", "Car").with_attribute(Attribute::new(
                "speed_kmh",
                AttributeValue::Number(55.0),
                2_000,
                "device-7",
            )),
            2_000,
        )
        .unwrap();

    let car = broker
        .query(&Selector::for_type("Car").with_id("car-7"))
        .pop()
        .unwrap();
    println!(
        "car-7 after two partial updates: speed={:?} model={:?}",
        car.attribute("speed_kmh").unwrap().value,
        car.attribute("model").unwrap().value,
    );

    // A stale write loses against the newer value already stored.
    broker
        .publish(
            &EntityUpdate::new("car-7", "Car").with_attribute(Attribute::new(
                "speed_kmh",
                AttributeValue::Number(9.0),
                1_500,
                "laggy-relay",
            )),
            2_500,
        )
        .unwrap();
    let car = broker
        .query(&Selector::for_type("Car").with_id("car-7"))
        .pop()
        .unwrap();
    println!(
        "after a stale replay (ts 1500 < 2000): speed={:?}",
        car.attribute("speed_kmh").unwrap().value
    );

    // Another car, parked across town.
    broker
        .publish(
            &EntityUpdate::new("car-9", "Car")
                .with_attribute(Attribute::new(
                    "speed_kmh",
                    AttributeValue::Number(0.0),
                    2_000,
                    "device-9",
                ))
                .with_location(GeoPoint { lat: 52.455, lon: 13.29 }),
            2_600,
        )
        .unwrap();

    // Constraints and geo scopes narrow queries; the attribute set trims
    // the result to the named attributes (projection).
    let mut fast = Selector::for_type("Car").with_constraint(Constraint {
        attribute: "speed_kmh".into(),
        op: ConstraintOp::Gt,
        literal: AttributeValue::Number(30.0),
    });
    fast.attribute_set = vec!["speed_kmh".into()];
    let hits = broker.query(&fast);
    println!(
        "cars over 30 km/h: {:?} (projected attrs: {:?})",
        hits.iter().map(|e| e.id.as_str()).collect::<Vec<_>>(),
        hits[0].attributes.keys().collect::<Vec<_>>(),
    );

    let mut nearby = Selector::for_type("Car");
    nearby.scope = GeoScope::Circle {
        center: GeoPoint { lat: 52.52, lon: 13.40 },
        radius_m: 2_000.0,
    };
    println!(
        "cars within 2km of Alexanderplatz: {:?}",
        broker.query(&nearby).iter().map(|e| e.id.as_str()).collect::<Vec<_>>()
    );

    // Subscriptions: the broker answers with the currently matching
    // entities as a snapshot, then pushes deltas as publishes land.
    let sink = NotificationSink {
        node_id: "edge-1".into(),
        channel: "task/demo".into(),
    };
    let (sub_id, initial) = broker.subscribe(None, Selector::for_type("Car"), sink, 3_000);
    if let Some((_, n)) = initial {
        if let NotificationPayload::Snapshot { entities } = n.payload {
            println!(
                "subscription {sub_id} got a snapshot of {} cars",
                entities.len()
            );
        }
    }

    let outcome = broker
        .publish(
            &EntityUpdate::new("car-9", "Car").with_attribute(Attribute::new(
                "speed_kmh",
                AttributeValue::Number(17.0),
                3_500,
                "device-9",
            )),
            3_500,
        )
        .unwrap();
    for (sink, n) in &outcome.notifications {
        match &n.payload {
            NotificationPayload::Delta { update } => println!(
                "delta for {} -> {} (changed: {:?})",
                update.id,
                sink.channel,
                update.changed.keys().collect::<Vec<_>>()
            ),
            NotificationPayload::Snapshot { .. } => println!("snapshot -> {}", sink.channel),
        }
    }

    broker.unsubscribe(&sub_id).unwrap();
    println!(
        "after unsubscribe: {} subscriptions, {} entities",
        broker.subscription_count(),
        broker.entity_count()
    );
}
