//! The discovery service indexes which entities exist and where, not their
//! values. Subscribers learn about appear/disappear transitions; values
//! stay at the broker that registered them.

use fogrune::context::{geohash_encode, GeoPoint, GeoScope, Selector};
use fogrune::discovery::{
    AvailabilityKind, AvailabilityRegistration, AvailabilitySubscription, Discovery,
};
use fogrune::message::NotificationSink;

fn reg(id: &str, city_cell: &str, broker: &str, now: u64) -> AvailabilityRegistration {
    AvailabilityRegistration {
        entity_id: id.into(),
        entity_type: "Camera".into(),
        attribute_names: ["fps", "status"].iter().map(|s| s.to_string()).collect(),
        provider_broker: broker.into(),
        geohash: city_cell.into(),
        registered_at: now,
        ttl_s: 30,
    }
}

fn print_events(label: &str, events: &[fogrune::discovery::AvailabilityEvent]) {
    for ev in events {
        let kind = match ev.kind {
            AvailabilityKind::Appear => "appear",
            AvailabilityKind::Disappear => "disappear",
        };
        println!(
            "  [{label}] {kind}: {} (provider {}, cell {})",
            ev.registration.entity_id, ev.registration.provider_broker, ev.registration.geohash
        );
    }
}

fn main() {
    let mut disc = Discovery::new(5, 60);
    let berlin = geohash_encode(GeoPoint { lat: 52.52, lon: 13.40 }, 5).unwrap();
    let munich = geohash_encode(GeoPoint { lat: 48.14, lon: 11.58 }, 5).unwrap();
    println!("cells: berlin={berlin} munich={munich}");

    // Two cameras exist before anyone subscribes.
    disc.register(reg("cam-1", &berlin, "broker@berlin", 0));
    disc.register(reg("cam-2", &munich, "broker@munich", 0));

    // A subscriber scoped to the berlin cell prefix. The reply is the
    // current matching set, so late subscribers miss nothing.
    let sub = AvailabilitySubscription {
        sub_id: "watch-berlin".into(),
        selector: {
            let mut s = Selector::for_type("Camera");
            s.attribute_set = vec!["fps".into()];
            s.scope = GeoScope::GeohashPrefix { prefix: berlin[..3].to_string() };
            s
        },
        sink: NotificationSink { node_id: "mgmt".into(), channel: "orchestrator".into() },
    };
    let initial = disc.subscribe_availability(sub);
    println!("initial snapshot for watch-berlin:");
    print_events("snapshot", &initial);

    // New registrations stream in as events, but only when they match.
    let out = disc.register(reg("cam-3", &berlin, "broker@berlin", 5));
    print_events("register cam-3", &out.events);
    let out = disc.register(reg("cam-4", &munich, "broker@munich", 5));
    println!("  cam-4 in munich produced {} events (out of scope)", out.events.len());

    // Re-registering an entity from a different broker is a move, not a
    // new appearance. The index records it and reports the change.
    let out = disc.register(reg("cam-3", &munich, "broker@munich", 8));
    print_events("cam-3 re-homed", &out.events);
    if let Some(change) = out.change {
        println!(
            "  change record: {} moved {} -> {} ({} -> {})",
            change.entity_id,
            change.old_provider,
            change.new_provider,
            change.old_geohash,
            change.new_geohash
        );
    }

    // Only the current provider may deregister; a stale owner is ignored.
    let events = disc.deregister("cam-1", "broker@somewhere-old").unwrap();
    println!("stale deregister of cam-1: {} events", events.len());
    let events = disc.deregister("cam-1", "broker@berlin").unwrap();
    print_events("deregister cam-1", &events);

    // Registrations expire when their TTL lapses without a refresh. Events
    // fire only for subscribers that were matching; the rest just vanish
    // from the index.
    let before = disc.registration_count();
    let expired = disc.sweep_expired(45_000_000);
    print_events("ttl sweep at t=45s", &expired);
    println!(
        "sweep dropped {} expired registrations, {} remain",
        before - disc.registration_count(),
        disc.registration_count()
    );
}
