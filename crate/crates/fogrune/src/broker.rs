//! Context broker: entity store plus content-based pub/sub.
//!
//! Brokers hold full entity state and serve queries and subscriptions with
//! value constraints and attribute projection. Toward Discovery they only
//! report availability — entity id, type, attribute *names* and the geohash
//! cell at the index precision — and only when one of those structural
//! facts changes. Value-only updates never leave the broker's node.

use std::collections::{BTreeMap, BTreeSet};

use serde::{Deserialize, Serialize};

use crate::context::{
    entity_from_update, geohash_encode, ContextEntity, EntityUpdate, LogicalTime, Selector,
};
use crate::discovery::AvailabilityRegistration;
use crate::error::FogError;
use crate::message::NotificationSink;

/// Where an entity's updates should be pushed.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Subscription {
    pub sub_id: String,
    pub selector: Selector,
    pub sink: NotificationSink,
    pub created_at: LogicalTime,
}

/// What a subscriber receives. The first delivery for an entity (and every
/// re-entry into the matching set) is a snapshot of current state; while it
/// keeps matching, deltas carry only the projected changes.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Notification {
    pub sub_id: String,
    pub payload: NotificationPayload,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum NotificationPayload {
    Snapshot { entities: Vec<ContextEntity> },
    Delta { update: EntityUpdate },
}

/// Effects of one publish: an availability (re-)registration when the
/// entity's structure changed, and the notifications to deliver.
#[derive(Debug, Default)]
pub struct PublishOutcome {
    pub created: bool,
    pub registration: Option<AvailabilityRegistration>,
    pub notifications: Vec<(NotificationSink, Notification)>,
}

#[derive(Debug, Clone, PartialEq)]
struct RegisteredShape {
    attribute_names: BTreeSet<String>,
    geohash: String,
}

/// One broker instance (one per node in the simulated cluster).
#[derive(Debug)]
pub struct Broker {
    pub broker_id: String,
    pub node_id: String,
    /// Geohash precision of the availability index.
    pub index_precision: usize,
    pub registration_ttl_s: u64,
    entities: BTreeMap<String, ContextEntity>,
    subscriptions: BTreeMap<String, Subscription>,
    /// (sub_id, entity_id) pairs currently inside the subscription's match
    /// set; membership decides snapshot vs delta.
    matched: BTreeSet<(String, String)>,
    registered: BTreeMap<String, RegisteredShape>,
    next_sub: u64,
}

impl Broker {
    pub fn new(broker_id: impl Into<String>, node_id: impl Into<String>) -> Self {
        Broker {
            broker_id: broker_id.into(),
            node_id: node_id.into(),
            index_precision: 5,
            registration_ttl_s: 30,
            entities: BTreeMap::new(),
            subscriptions: BTreeMap::new(),
            matched: BTreeSet::new(),
            registered: BTreeMap::new(),
            next_sub: 0,
        }
    }

    pub fn entity(&self, id: &str) -> Option<&ContextEntity> {
        self.entities.get(id)
    }

    pub fn entities(&self) -> impl Iterator<Item = &ContextEntity> {
        self.entities.values()
    }

    pub fn entity_count(&self) -> usize {
        self.entities.len()
    }

    pub fn subscription_count(&self) -> usize {
        self.subscriptions.len()
    }

    pub fn subscription(&self, sub_id: &str) -> Option<&Subscription> {
        self.subscriptions.get(sub_id)
    }

    fn cell_of(&self, entity: &ContextEntity) -> String {
        entity
            .location
            .and_then(|loc| geohash_encode(loc, self.index_precision).ok())
            .unwrap_or_default()
    }

    fn registration_for(&self, entity: &ContextEntity, now: LogicalTime) -> AvailabilityRegistration {
        AvailabilityRegistration {
            entity_id: entity.id.clone(),
            entity_type: entity.entity_type.clone(),
            attribute_names: entity.attributes.keys().cloned().collect(),
            provider_broker: self.broker_id.clone(),
            geohash: self.cell_of(entity),
            registered_at: now,
            ttl_s: self.registration_ttl_s,
        }
    }

    /// Apply a partial update, creating the entity on first contact.
    /// Returns the availability registration to forward (only on structural
    /// change) and the notifications owed to matching subscriptions.
    pub fn publish(
        &mut self,
        update: &EntityUpdate,
        now: LogicalTime,
    ) -> Result<PublishOutcome, FogError> {
        update.validate()?;
        let mut outcome = PublishOutcome::default();
        let merged = match self.entities.get(&update.id) {
            Some(existing) => {
                let mut e = existing.clone();
                e.apply_update(update)?;
                e
            }
            None => {
                outcome.created = true;
                entity_from_update(update)
            }
        };

        let shape = RegisteredShape {
            attribute_names: merged.attributes.keys().cloned().collect(),
            geohash: self.cell_of(&merged),
        };
        let structural = self.registered.get(&update.id) != Some(&shape);
        if structural {
            outcome.registration = Some(self.registration_for(&merged, now));
            self.registered.insert(update.id.clone(), shape);
        }

        for (sub_id, sub) in &self.subscriptions {
            let pair = (sub_id.clone(), update.id.clone());
            let was = self.matched.contains(&pair);
            let now_matches = sub.selector.matches(&merged);
            match (was, now_matches) {
                (false, true) => {
                    self.matched.insert(pair);
                    outcome.notifications.push((
                        sub.sink.clone(),
                        Notification {
                            sub_id: sub_id.clone(),
                            payload: NotificationPayload::Snapshot {
                                entities: vec![merged.project(&sub.selector.attribute_set)],
                            },
                        },
                    ));
                }
                (true, true) => {
                    let delta = update.project(&sub.selector.attribute_set);
                    if !delta.is_empty() {
                        outcome.notifications.push((
                            sub.sink.clone(),
                            Notification {
                                sub_id: sub_id.clone(),
                                payload: NotificationPayload::Delta { update: delta },
                            },
                        ));
                    }
                }
                (true, false) => {
                    // Fell out of the match set; the next re-entry snapshots.
                    self.matched.remove(&pair);
                }
                (false, false) => {}
            }
        }

        self.entities.insert(update.id.clone(), merged);
        Ok(outcome)
    }

    /// Point-in-time query: matching entities, projected, ordered by id.
    pub fn query(&self, selector: &Selector) -> Vec<ContextEntity> {
        self.entities
            .values()
            .filter(|e| selector.matches(e))
            .map(|e| e.project(&selector.attribute_set))
            .collect()
    }

    /// Register a subscription. A caller-supplied id keeps the protocol
    /// one-way; when absent the broker assigns one. The current matching
    /// entities come back as an initial snapshot notification.
    pub fn subscribe(
        &mut self,
        sub_id: Option<String>,
        selector: Selector,
        sink: NotificationSink,
        now: LogicalTime,
    ) -> (String, Option<(NotificationSink, Notification)>) {
        let sub_id = sub_id.unwrap_or_else(|| {
            self.next_sub += 1;
            format!("{}/sub-{}", self.broker_id, self.next_sub)
        });
        let snapshot: Vec<ContextEntity> = self
            .entities
            .values()
            .filter(|e| selector.matches(e))
            .map(|e| e.project(&selector.attribute_set))
            .collect();
        for e in &snapshot {
            self.matched.insert((sub_id.clone(), e.id.clone()));
        }
        let initial = (!snapshot.is_empty()).then(|| {
            (
                sink.clone(),
                Notification {
                    sub_id: sub_id.clone(),
                    payload: NotificationPayload::Snapshot { entities: snapshot },
                },
            )
        });
        self.subscriptions.insert(
            sub_id.clone(),
            Subscription {
                sub_id: sub_id.clone(),
                selector,
                sink,
                created_at: now,
            },
        );
        (sub_id, initial)
    }

    pub fn unsubscribe(&mut self, sub_id: &str) -> Result<(), FogError> {
        if self.subscriptions.remove(sub_id).is_none() {
            return Err(FogError::UnknownSubscription(sub_id.to_string()));
        }
        self.matched.retain(|(s, _)| s != sub_id);
        Ok(())
    }

    /// Drop an entity (device detached / re-homed). Returns the deregister
    /// to forward when the entity was announced to Discovery.
    pub fn remove_entity(&mut self, entity_id: &str) -> Option<(String, String)> {
        let existed = self.entities.remove(entity_id).is_some();
        self.matched.retain(|(_, e)| e != entity_id);
        let was_registered = self.registered.remove(entity_id).is_some();
        (existed && was_registered).then(|| (entity_id.to_string(), self.broker_id.clone()))
    }

    /// Transport-level cleanup when a sink node dies: its subscriptions
    /// cannot be served any more.
    pub fn purge_sinks_at(&mut self, node_id: &str) -> usize {
        let dead: Vec<String> = self
            .subscriptions
            .iter()
            .filter(|(_, s)| s.sink.node_id == node_id)
            .map(|(id, _)| id.clone())
            .collect();
        for id in &dead {
            let _ = self.unsubscribe(id);
        }
        dead.len()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::context::{Attribute, AttributeValue, Constraint, ConstraintOp, GeoPoint};

    fn sink(n: u32) -> NotificationSink {
        NotificationSink {
            node_id: format!("node-{n}"),
            channel: format!("chan-{n}"),
        }
    }

    fn car_update(id: &str, speed: f64, ts: LogicalTime) -> EntityUpdate {
        EntityUpdate::new(id, "Car").with_attribute(Attribute::new(
            "speed_kmh",
            AttributeValue::Number(speed),
            ts,
            "dev",
        ))
    }

    #[test]
    fn first_publish_registers_value_update_does_not() {
        let mut b = Broker::new("broker@e1", "e1");
        let out = b.publish(&car_update("car-1", 10.0, 1), 1).unwrap();
        assert!(out.created);
        let reg = out.registration.expect("new entity registers");
        assert_eq!(reg.entity_id, "car-1");
        assert!(reg.attribute_names.contains("speed_kmh"));

        // Same attribute names, same (absent) cell: silent toward Discovery.
        let out = b.publish(&car_update("car-1", 99.0, 2), 2).unwrap();
        assert!(out.registration.is_none());

        // A new attribute name is structural.
        let up = EntityUpdate::new("car-1", "Car").with_attribute(Attribute::new(
            "fuel",
            AttributeValue::Number(0.5),
            3,
            "dev",
        ));
        assert!(b.publish(&up, 3).unwrap().registration.is_some());
    }

    #[test]
    fn cell_change_is_structural() {
        let mut b = Broker::new("broker@e1", "e1");
        let here = GeoPoint::new(52.5200, 13.4050).unwrap();
        let up = car_update("car-1", 10.0, 1).with_location(here);
        assert!(b.publish(&up, 1).unwrap().registration.is_some());

        // Tiny move inside the same precision-5 cell: not structural.
        let nearby = GeoPoint::new(52.5201, 13.4051).unwrap();
        assert_eq!(
            geohash_encode(here, 5).unwrap(),
            geohash_encode(nearby, 5).unwrap()
        );
        let up = car_update("car-1", 11.0, 2).with_location(nearby);
        assert!(b.publish(&up, 2).unwrap().registration.is_none());

        // Different cell: re-register with the new hash.
        let away = GeoPoint::new(52.9, 13.9).unwrap();
        let up = car_update("car-1", 12.0, 3).with_location(away);
        let reg = b.publish(&up, 3).unwrap().registration.unwrap();
        assert_eq!(reg.geohash, geohash_encode(away, 5).unwrap());
    }

    #[test]
    fn matching_subscriptions_each_get_notified() {
        let mut b = Broker::new("broker@e1", "e1");
        for i in 0..3 {
            b.subscribe(None, Selector::for_type("Car"), sink(i), 0);
        }
        b.subscribe(None, Selector::for_type("Truck"), sink(9), 0);
        let out = b.publish(&car_update("car-1", 10.0, 1), 1).unwrap();
        assert_eq!(out.notifications.len(), 3);
        // Brute-force oracle: count subscriptions whose selector matches.
        let merged = b.entity("car-1").unwrap();
        let expected = b
            .subscriptions
            .values()
            .filter(|s| s.selector.matches(merged))
            .count();
        assert_eq!(expected, 3);
    }

    #[test]
    fn snapshot_then_delta_then_resnapshot() {
        let mut b = Broker::new("broker@e1", "e1");
        let fast = Selector::for_type("Car").with_constraint(Constraint {
            attribute: "speed_kmh".into(),
            op: ConstraintOp::Gt,
            literal: AttributeValue::Number(50.0),
        });
        let (sub_id, _) = b.subscribe(None, fast, sink(1), 0);

        // Below threshold: no notification at all.
        assert!(b.publish(&car_update("car-1", 30.0, 1), 1).unwrap().notifications.is_empty());

        // Crosses threshold: full snapshot.
        let out = b.publish(&car_update("car-1", 70.0, 2), 2).unwrap();
        assert_eq!(out.notifications.len(), 1);
        assert!(matches!(
            &out.notifications[0].1.payload,
            NotificationPayload::Snapshot { .. }
        ));

        // Stays above: delta.
        let out = b.publish(&car_update("car-1", 80.0, 3), 3).unwrap();
        assert!(matches!(
            &out.notifications[0].1.payload,
            NotificationPayload::Delta { .. }
        ));

        // Drops below (silent), then re-enters: snapshot again.
        assert!(b.publish(&car_update("car-1", 10.0, 4), 4).unwrap().notifications.is_empty());
        let out = b.publish(&car_update("car-1", 90.0, 5), 5).unwrap();
        assert!(matches!(
            &out.notifications[0].1.payload,
            NotificationPayload::Snapshot { .. }
        ));
        let _ = sub_id;
    }

    #[test]
    fn notifications_respect_projection() {
        let mut b = Broker::new("broker@e1", "e1");
        let sel = Selector::for_type("Car").with_attributes(&["speed_kmh"]);
        b.subscribe(None, sel, sink(1), 0);
        let up = car_update("car-1", 10.0, 1).with_attribute(Attribute::new(
            "fuel",
            AttributeValue::Number(0.9),
            1,
            "dev",
        ));
        let out = b.publish(&up, 1).unwrap();
        match &out.notifications[0].1.payload {
            NotificationPayload::Snapshot { entities } => {
                assert!(entities[0].attribute("speed_kmh").is_some());
                assert!(entities[0].attribute("fuel").is_none());
            }
            other => panic!("expected snapshot, got {other:?}"),
        }
        // Delta touching only a hidden attribute is suppressed entirely.
        let up = EntityUpdate::new("car-1", "Car").with_attribute(Attribute::new(
            "fuel",
            AttributeValue::Number(0.1),
            2,
            "dev",
        ));
        assert!(b.publish(&up, 2).unwrap().notifications.is_empty());
    }

    #[test]
    fn subscribe_delivers_initial_snapshot() {
        let mut b = Broker::new("broker@e1", "e1");
        b.publish(&car_update("car-1", 10.0, 1), 1).unwrap();
        b.publish(&car_update("car-2", 20.0, 1), 1).unwrap();
        let (_, initial) = b.subscribe(None, Selector::for_type("Car"), sink(1), 2);
        let (_, notif) = initial.expect("snapshot owed");
        match notif.payload {
            NotificationPayload::Snapshot { entities } => {
                assert_eq!(entities.len(), 2);
            }
            other => panic!("expected snapshot, got {other:?}"),
        }
        // Empty store ⇒ no initial notification.
        let mut empty = Broker::new("broker@e2", "e2");
        let (_, initial) = empty.subscribe(None, Selector::for_type("Car"), sink(1), 0);
        assert!(initial.is_none());
    }

    #[test]
    fn query_and_errors() {
        let mut b = Broker::new("broker@e1", "e1");
        assert!(b.query(&Selector::for_type("Car")).is_empty());
        b.publish(&car_update("car-1", 10.0, 1), 1).unwrap();
        let got = b.query(&Selector::for_type("Car").with_id("car-1"));
        assert_eq!(got.len(), 1);

        assert!(matches!(
            b.unsubscribe("nope"),
            Err(FogError::UnknownSubscription(_))
        ));

        // Type conflict on an existing id is rejected.
        let bad = EntityUpdate::new("car-1", "Truck");
        assert!(matches!(
            b.publish(&bad, 2),
            Err(FogError::TypeConflict { .. })
        ));
    }

    #[test]
    fn subscribe_unsubscribe_balance() {
        let mut b = Broker::new("broker@e1", "e1");
        let (id1, _) = b.subscribe(None, Selector::for_type("Car"), sink(1), 0);
        let (id2, _) = b.subscribe(None, Selector::for_type("Car"), sink(2), 0);
        assert_eq!(b.subscription_count(), 2);
        b.unsubscribe(&id1).unwrap();
        b.unsubscribe(&id2).unwrap();
        assert_eq!(b.subscription_count(), 0);
        assert!(b.matched.is_empty());
    }

    #[test]
    fn remove_entity_emits_deregister_once() {
        let mut b = Broker::new("broker@e1", "e1");
        b.publish(&car_update("car-1", 10.0, 1), 1).unwrap();
        let dereg = b.remove_entity("car-1").expect("was registered");
        assert_eq!(dereg, ("car-1".to_string(), "broker@e1".to_string()));
        assert!(b.remove_entity("car-1").is_none());
        assert_eq!(b.entity_count(), 0);
    }
}
