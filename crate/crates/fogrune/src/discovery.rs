//! Centralized availability discovery.
//!
//! Discovery never sees attribute values: a registration carries entity id,
//! type, attribute *names*, the provider broker and a geohash cell. Lookups
//! go through a type map plus a geohash trie, and subscribers get exactly
//! two kinds of events — an entity's availability Appears for their selector
//! or Disappears from it. Match-set bookkeeping guarantees the two stay
//! balanced per (subscription, entity).

use std::collections::{BTreeMap, BTreeSet};

use serde::{Deserialize, Serialize};

use crate::context::{geohash_decode_center, haversine_m, GeoScope, LogicalTime, Selector};
use crate::error::FogError;
use crate::message::NotificationSink;

/// What a broker announces about one entity. `geohash` has the index
/// precision; it is empty for entities without a location, which therefore
/// only appear in `Global`-scoped lookups.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct AvailabilityRegistration {
    pub entity_id: String,
    pub entity_type: String,
    pub attribute_names: BTreeSet<String>,
    pub provider_broker: String,
    #[serde(default)]
    pub geohash: String,
    pub registered_at: LogicalTime,
    pub ttl_s: u64,
}

impl AvailabilityRegistration {
    fn expires_at(&self) -> LogicalTime {
        self.registered_at + self.ttl_s * 1_000_000
    }

    /// Fields that decide matching (everything except freshness).
    fn match_shape(&self) -> (&str, &str, &BTreeSet<String>, &str) {
        (
            &self.entity_id,
            &self.entity_type,
            &self.attribute_names,
            &self.geohash,
        )
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AvailabilitySubscription {
    pub sub_id: String,
    pub selector: Selector,
    pub sink: NotificationSink,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AvailabilityKind {
    Appear,
    Disappear,
}

/// Pushed to an availability subscriber when an entity enters or leaves
/// its selector's match set.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AvailabilityEvent {
    pub kind: AvailabilityKind,
    pub sub_id: String,
    pub registration: AvailabilityRegistration,
}

/// A provider/cell change that did not alter any match set, surfaced so the
/// orchestration layer can follow moving producers.
#[derive(Debug, Clone, PartialEq)]
pub struct RegistrationChange {
    pub entity_id: String,
    pub old_provider: String,
    pub new_provider: String,
    pub old_geohash: String,
    pub new_geohash: String,
}

#[derive(Debug, Default)]
pub struct RegisterOutcome {
    pub events: Vec<AvailabilityEvent>,
    pub change: Option<RegistrationChange>,
}

/// Trie over geohash characters; prefix queries collect whole subtrees.
#[derive(Debug, Default)]
struct GeohashTrie {
    children: BTreeMap<u8, GeohashTrie>,
    ids: BTreeSet<String>,
}

impl GeohashTrie {
    fn insert(&mut self, hash: &str, id: &str) {
        let mut node = self;
        for b in hash.bytes() {
            node = node.children.entry(b).or_default();
        }
        node.ids.insert(id.to_string());
    }

    fn remove(&mut self, hash: &str, id: &str) {
        fn rec(node: &mut GeohashTrie, hash: &[u8], id: &str) -> bool {
            match hash.split_first() {
                None => {
                    node.ids.remove(id);
                }
                Some((b, rest)) => {
                    if let Some(child) = node.children.get_mut(b) {
                        if rec(child, rest, id) {
                            node.children.remove(b);
                        }
                    }
                }
            }
            node.ids.is_empty() && node.children.is_empty()
        }
        rec(self, hash.as_bytes(), id);
    }

    fn collect_prefix<'a>(&'a self, prefix: &str, out: &mut BTreeSet<&'a str>) {
        let mut node = self;
        for b in prefix.bytes() {
            match node.children.get(&b) {
                Some(child) => node = child,
                None => return,
            }
        }
        fn walk<'a>(node: &'a GeohashTrie, out: &mut BTreeSet<&'a str>) {
            for id in &node.ids {
                out.insert(id);
            }
            for child in node.children.values() {
                walk(child, out);
            }
        }
        walk(node, out);
    }
}

/// The centralized availability directory.
#[derive(Debug)]
pub struct Discovery {
    pub index_precision: usize,
    pub default_ttl_s: u64,
    regs: BTreeMap<String, AvailabilityRegistration>,
    by_type: BTreeMap<String, BTreeSet<String>>,
    trie: GeohashTrie,
    subs: BTreeMap<String, SubState>,
}

#[derive(Debug)]
struct SubState {
    sub: AvailabilitySubscription,
    matched: BTreeSet<String>,
}

impl Discovery {
    pub fn new(index_precision: usize, default_ttl_s: u64) -> Self {
        Discovery {
            index_precision,
            default_ttl_s,
            regs: BTreeMap::new(),
            by_type: BTreeMap::new(),
            trie: GeohashTrie::default(),
            subs: BTreeMap::new(),
        }
    }

    pub fn registration(&self, entity_id: &str) -> Option<&AvailabilityRegistration> {
        self.regs.get(entity_id)
    }

    pub fn registration_count(&self) -> usize {
        self.regs.len()
    }

    pub fn subscription_count(&self) -> usize {
        self.subs.len()
    }

    /// Availability matching: type, optional id, attribute-NAME presence
    /// for both the attribute set and the constraint attributes, and scope
    /// evaluated against the registration's cell center. Values are not
    /// known here and play no part.
    pub fn availability_matches(selector: &Selector, reg: &AvailabilityRegistration) -> bool {
        if selector.entity_type != reg.entity_type {
            return false;
        }
        if let Some(id) = &selector.entity_id {
            if *id != reg.entity_id {
                return false;
            }
        }
        if !selector
            .attribute_set
            .iter()
            .all(|a| reg.attribute_names.contains(a))
        {
            return false;
        }
        if !selector
            .constraints
            .iter()
            .all(|c| reg.attribute_names.contains(&c.attribute))
        {
            return false;
        }
        match &selector.scope {
            GeoScope::Global => true,
            _ if reg.geohash.is_empty() => false,
            GeoScope::GeohashPrefix { prefix } => reg.geohash.starts_with(prefix.as_str()),
            GeoScope::Circle { center, radius_m } => match geohash_decode_center(&reg.geohash) {
                Ok(cell_center) => haversine_m(*center, cell_center) <= *radius_m,
                Err(_) => false,
            },
        }
    }

    fn index_insert(&mut self, reg: &AvailabilityRegistration) {
        self.by_type
            .entry(reg.entity_type.clone())
            .or_default()
            .insert(reg.entity_id.clone());
        if !reg.geohash.is_empty() {
            self.trie.insert(&reg.geohash, &reg.entity_id);
        }
    }

    fn index_remove(&mut self, reg: &AvailabilityRegistration) {
        if let Some(set) = self.by_type.get_mut(&reg.entity_type) {
            set.remove(&reg.entity_id);
            if set.is_empty() {
                self.by_type.remove(&reg.entity_type);
            }
        }
        if !reg.geohash.is_empty() {
            self.trie.remove(&reg.geohash, &reg.entity_id);
        }
    }

    /// Recompute match sets for one entity and emit the owed events.
    fn reconcile(&mut self, entity_id: &str, events: &mut Vec<AvailabilityEvent>) {
        let reg = self.regs.get(entity_id).cloned();
        for (sub_id, state) in self.subs.iter_mut() {
            let was = state.matched.contains(entity_id);
            let now = reg
                .as_ref()
                .map(|r| Self::availability_matches(&state.sub.selector, r))
                .unwrap_or(false);
            match (was, now) {
                (false, true) => {
                    state.matched.insert(entity_id.to_string());
                    events.push(AvailabilityEvent {
                        kind: AvailabilityKind::Appear,
                        sub_id: sub_id.clone(),
                        registration: reg.clone().expect("present when matching"),
                    });
                }
                (true, false) => {
                    state.matched.remove(entity_id);
                    // A deregistered entity has no current registration; the
                    // Disappear echoes the last known one so consumers can
                    // still route on it.
                    let last = reg.clone().unwrap_or_else(|| AvailabilityRegistration {
                        entity_id: entity_id.to_string(),
                        entity_type: String::new(),
                        attribute_names: BTreeSet::new(),
                        provider_broker: String::new(),
                        geohash: String::new(),
                        registered_at: 0,
                        ttl_s: 0,
                    });
                    events.push(AvailabilityEvent {
                        kind: AvailabilityKind::Disappear,
                        sub_id: sub_id.clone(),
                        registration: last,
                    });
                }
                _ => {}
            }
        }
    }

    /// Insert or replace a registration. Events fire only where a match set
    /// changed; an unchanged re-registration just refreshes the TTL. A
    /// provider or cell change with stable matching is reported as a
    /// `RegistrationChange` for the orchestration layer.
    pub fn register(&mut self, reg: AvailabilityRegistration) -> RegisterOutcome {
        let mut outcome = RegisterOutcome::default();
        let old = self.regs.get(&reg.entity_id).cloned();
        if let Some(old_reg) = &old {
            if old_reg.match_shape() == reg.match_shape() {
                // Pure refresh (possibly a new timestamp).
                self.regs.insert(reg.entity_id.clone(), reg);
                return outcome;
            }
            self.index_remove(old_reg);
        }
        self.index_insert(&reg);
        let entity_id = reg.entity_id.clone();
        self.regs.insert(entity_id.clone(), reg.clone());
        self.reconcile(&entity_id, &mut outcome.events);
        if let Some(old_reg) = old {
            if old_reg.provider_broker != reg.provider_broker || old_reg.geohash != reg.geohash {
                outcome.change = Some(RegistrationChange {
                    entity_id,
                    old_provider: old_reg.provider_broker,
                    new_provider: reg.provider_broker,
                    old_geohash: old_reg.geohash,
                    new_geohash: reg.geohash,
                });
            }
        }
        outcome
    }

    /// Remove a registration. `provider_broker` guards against a stale
    /// deregister racing a re-homing: only the current owner may remove.
    pub fn deregister(
        &mut self,
        entity_id: &str,
        provider_broker: &str,
    ) -> Result<Vec<AvailabilityEvent>, FogError> {
        let reg = self
            .regs
            .get(entity_id)
            .ok_or_else(|| FogError::UnknownEntity(entity_id.to_string()))?;
        if reg.provider_broker != provider_broker {
            // A newer owner has re-registered this entity; the old broker's
            // deregister is obsolete.
            return Ok(Vec::new());
        }
        let reg = self.regs.remove(entity_id).expect("checked above");
        self.index_remove(&reg);
        let mut events = Vec::new();
        self.reconcile(entity_id, &mut events);
        // reconcile() lost the registration; restore its content on events.
        for ev in &mut events {
            ev.registration = reg.clone();
        }
        Ok(events)
    }

    /// Add an availability subscription; currently matching registrations
    /// come back immediately as Appear events.
    pub fn subscribe_availability(&mut self, sub: AvailabilitySubscription) -> Vec<AvailabilityEvent> {
        let sub_id = sub.sub_id.clone();
        let mut events = Vec::new();
        let mut matched = BTreeSet::new();
        for reg in self.regs.values() {
            if Self::availability_matches(&sub.selector, reg) {
                matched.insert(reg.entity_id.clone());
                events.push(AvailabilityEvent {
                    kind: AvailabilityKind::Appear,
                    sub_id: sub_id.clone(),
                    registration: reg.clone(),
                });
            }
        }
        self.subs.insert(sub_id, SubState { sub, matched });
        events
    }

    pub fn unsubscribe_availability(&mut self, sub_id: &str) -> Result<(), FogError> {
        self.subs
            .remove(sub_id)
            .map(|_| ())
            .ok_or_else(|| FogError::UnknownSubscription(sub_id.to_string()))
    }

    /// Indexed lookup; must agree with a linear scan of all registrations.
    pub fn query_availability(&self, selector: &Selector) -> Vec<AvailabilityRegistration> {
        let candidates: Vec<&AvailabilityRegistration> = match &selector.scope {
            GeoScope::GeohashPrefix { prefix } => {
                let mut ids = BTreeSet::new();
                self.trie.collect_prefix(prefix, &mut ids);
                ids.iter().filter_map(|id| self.regs.get(*id)).collect()
            }
            _ => match self.by_type.get(&selector.entity_type) {
                Some(ids) => ids.iter().filter_map(|id| self.regs.get(id)).collect(),
                None => Vec::new(),
            },
        };
        candidates
            .into_iter()
            .filter(|r| Self::availability_matches(selector, r))
            .cloned()
            .collect()
    }

    /// Drop registrations whose TTL elapsed; emits the owed Disappears.
    pub fn sweep_expired(&mut self, now: LogicalTime) -> Vec<AvailabilityEvent> {
        let expired: Vec<String> = self
            .regs
            .values()
            .filter(|r| r.expires_at() <= now)
            .map(|r| r.entity_id.clone())
            .collect();
        let mut events = Vec::new();
        for id in expired {
            let reg = self.regs.remove(&id).expect("listed above");
            self.index_remove(&reg);
            let before = events.len();
            self.reconcile(&id, &mut events);
            for ev in &mut events[before..] {
                ev.registration = reg.clone();
            }
        }
        events
    }

    /// A live broker vouches for all its registrations; called when any
    /// traffic from that provider reaches Discovery (heartbeat piggyback).
    pub fn refresh_provider(&mut self, provider_broker: &str, now: LogicalTime) {
        for reg in self.regs.values_mut() {
            if reg.provider_broker == provider_broker {
                reg.registered_at = now;
            }
        }
    }
}
