//! Context entities and partial updates.
//!
//! Entities are the unit of exchange everywhere: device readings, task
//! results and node resource records all share this shape. Updates are
//! partial; merging is last-writer-wins per attribute with ties going to
//! the incoming value, so replaying a notification is harmless.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::context::geo::GeoPoint;
use crate::error::FogError;

/// Logical time in microseconds. The simulation's virtual clock and all
/// attribute timestamps share this unit.
pub type LogicalTime = u64;

/// Attribute payload. Blobs serialize as base64 text.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AttributeValue {
    Number(f64),
    Text(String),
    Bool(bool),
    Geo(GeoPoint),
    Blob(#[serde(with = "blob_base64")] Vec<u8>),
}

mod blob_base64 {
    use base64::Engine as _;
    use serde::{Deserialize, Deserializer, Serializer};

    pub fn serialize<S: Serializer>(bytes: &[u8], ser: S) -> Result<S::Ok, S::Error> {
        ser.serialize_str(&base64::engine::general_purpose::STANDARD.encode(bytes))
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(de: D) -> Result<Vec<u8>, D::Error> {
        let s = String::deserialize(de)?;
        base64::engine::general_purpose::STANDARD
            .decode(s.as_bytes())
            .map_err(serde::de::Error::custom)
    }
}

impl AttributeValue {
    /// Stable string form, used as the routing key for
    /// attribute-value task grouping.
    pub fn canonical_string(&self) -> String {
        match self {
            AttributeValue::Number(n) => serde_json::Number::from_f64(*n)
                .map(|v| v.to_string())
                .unwrap_or_else(|| "null".into()),
            AttributeValue::Text(s) => s.clone(),
            AttributeValue::Bool(b) => b.to_string(),
            AttributeValue::Geo(p) => format!("{},{}", p.lat, p.lon),
            AttributeValue::Blob(b) => {
                use base64::Engine as _;
                base64::engine::general_purpose::STANDARD.encode(b)
            }
        }
    }

    pub fn as_number(&self) -> Option<f64> {
        match self {
            AttributeValue::Number(n) => Some(*n),
            _ => None,
        }
    }

    pub fn as_text(&self) -> Option<&str> {
        match self {
            AttributeValue::Text(s) => Some(s),
            _ => None,
        }
    }

    pub fn as_geo(&self) -> Option<GeoPoint> {
        match self {
            AttributeValue::Geo(p) => Some(*p),
            _ => None,
        }
    }
}

/// Named, timestamped value. `source_id` identifies the producing device or
/// task; per (entity, name, source) the timestamp must only move forward.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Attribute {
    pub name: String,
    pub value: AttributeValue,
    pub timestamp: LogicalTime,
    pub source_id: String,
}

impl Attribute {
    pub fn new(
        name: impl Into<String>,
        value: AttributeValue,
        timestamp: LogicalTime,
        source_id: impl Into<String>,
    ) -> Self {
        Attribute {
            name: name.into(),
            value,
            timestamp,
            source_id: source_id.into(),
        }
    }
}

fn is_false(b: &bool) -> bool {
    !*b
}

/// A context entity: identity, type, attribute map, optional location.
///
/// Attribute maps are ordered so the canonical JSON encoding (and therefore
/// `serialized_size`) is deterministic.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
pub struct ContextEntity {
    pub id: String,
    pub entity_type: String,
    #[serde(default)]
    pub attributes: BTreeMap<String, Attribute>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub location: Option<GeoPoint>,
    #[serde(default, skip_serializing_if = "BTreeMap::is_empty")]
    pub metadata: BTreeMap<String, String>,
}

impl ContextEntity {
    pub fn new(id: impl Into<String>, entity_type: impl Into<String>) -> Self {
        ContextEntity {
            id: id.into(),
            entity_type: entity_type.into(),
            ..Default::default()
        }
    }

    pub fn attribute(&self, name: &str) -> Option<&Attribute> {
        self.attributes.get(name)
    }

    pub fn attribute_names(&self) -> impl Iterator<Item = &str> {
        self.attributes.keys().map(|s| s.as_str())
    }

    /// Keep only the named attributes; an empty set keeps everything.
    /// Identity, type, location and metadata are always preserved.
    pub fn project(&self, attribute_set: &[String]) -> ContextEntity {
        if attribute_set.is_empty() {
            return self.clone();
        }
        let mut out = self.clone();
        out.attributes
            .retain(|name, _| attribute_set.iter().any(|a| a == name));
        out
    }

    /// Apply a partial update in place. See `merge_update`.
    pub fn apply_update(&mut self, update: &EntityUpdate) -> Result<(), FogError> {
        if update.id != self.id {
            return Err(FogError::IdMismatch {
                update_id: update.id.clone(),
                entity_id: self.id.clone(),
            });
        }
        if update.entity_type != self.entity_type {
            return Err(FogError::TypeConflict {
                id: self.id.clone(),
                update_type: update.entity_type.clone(),
                stored_type: self.entity_type.clone(),
            });
        }
        for (name, incoming) in &update.changed {
            match self.attributes.get(name) {
                // Incoming wins ties, so replaying an update is a no-op.
                Some(stored) if stored.timestamp > incoming.timestamp => {}
                _ => {
                    self.attributes.insert(name.clone(), incoming.clone());
                }
            }
        }
        for name in &update.removed {
            self.attributes.remove(name);
        }
        if let Some(loc) = update.location {
            self.location = Some(loc);
        }
        Ok(())
    }
}

/// Partial update to one entity: changed attributes, removed attribute
/// names, and optionally a new location. `changed` and `removed` must be
/// disjoint (checked by `validate`).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EntityUpdate {
    pub id: String,
    pub entity_type: String,
    #[serde(default)]
    pub changed: BTreeMap<String, Attribute>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub removed: Vec<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub location: Option<GeoPoint>,
    /// Marks an update that carries the entity's complete state (topic-style
    /// publish or re-homing attach) rather than a delta.
    #[serde(default, skip_serializing_if = "is_false")]
    pub full: bool,
}

impl EntityUpdate {
    pub fn new(id: impl Into<String>, entity_type: impl Into<String>) -> Self {
        EntityUpdate {
            id: id.into(),
            entity_type: entity_type.into(),
            changed: BTreeMap::new(),
            removed: Vec::new(),
            location: None,
            full: false,
        }
    }

    pub fn with_attribute(mut self, attr: Attribute) -> Self {
        self.changed.insert(attr.name.clone(), attr);
        self
    }

    pub fn with_location(mut self, loc: GeoPoint) -> Self {
        self.location = Some(loc);
        self
    }

    /// Snapshot of a whole entity as a full update.
    pub fn full_state(entity: &ContextEntity) -> Self {
        EntityUpdate {
            id: entity.id.clone(),
            entity_type: entity.entity_type.clone(),
            changed: entity.attributes.clone(),
            removed: Vec::new(),
            location: entity.location,
            full: true,
        }
    }

    pub fn validate(&self) -> Result<(), FogError> {
        if self.id.is_empty() {
            return Err(FogError::InvalidConfig("update with empty entity id".into()));
        }
        if self.entity_type.is_empty() {
            return Err(FogError::InvalidConfig(format!(
                "update for {} with empty entity type",
                self.id
            )));
        }
        for name in &self.removed {
            if self.changed.contains_key(name) {
                return Err(FogError::InvalidConfig(format!(
                    "update for {} both changes and removes attribute {name}",
                    self.id
                )));
            }
        }
        if let Some(loc) = self.location {
            loc.validate()?;
        }
        Ok(())
    }

    /// Restrict the update to the named attributes (empty set = all).
    /// Location and removals of projected names are kept.
    pub fn project(&self, attribute_set: &[String]) -> EntityUpdate {
        if attribute_set.is_empty() {
            return self.clone();
        }
        let mut out = self.clone();
        out.changed
            .retain(|name, _| attribute_set.iter().any(|a| a == name));
        out.removed.retain(|name| attribute_set.iter().any(|a| a == name));
        out
    }

    pub fn is_empty(&self) -> bool {
        self.changed.is_empty() && self.removed.is_empty() && self.location.is_none()
    }
}

/// Merge a partial update into an entity, returning the merged entity.
/// Per attribute the newest timestamp wins and ties go to the incoming
/// value; removed names are deleted; location is replaced only when the
/// update carries one.
pub fn merge_update(entity: &ContextEntity, update: &EntityUpdate) -> Result<ContextEntity, FogError> {
    let mut merged = entity.clone();
    merged.apply_update(update)?;
    Ok(merged)
}

/// Materialize an entity from a creation update.
pub fn entity_from_update(update: &EntityUpdate) -> ContextEntity {
    let mut e = ContextEntity::new(update.id.clone(), update.entity_type.clone());
    // apply_update cannot fail once id and type agree
    e.apply_update(update).expect("fresh entity accepts update");
    e
}

/// Canonical JSON encoding: serde_json with ordered maps and snake_case
/// field names. This single encoding defines `serialized_size` and all
/// on-wire byte accounting.
pub fn canonical_json<T: Serialize>(value: &T) -> String {
    serde_json::to_string(value).expect("canonical serialization cannot fail")
}

/// Size in bytes of the canonical JSON encoding.
pub fn serialized_size<T: Serialize>(value: &T) -> usize {
    canonical_json(value).len()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn num(v: f64) -> AttributeValue {
        AttributeValue::Number(v)
    }

    fn entity_with(ts: LogicalTime, speed: f64) -> ContextEntity {
        let mut e = ContextEntity::new("car-1", "Car");
        e.attributes
            .insert("speed".into(), Attribute::new("speed", num(speed), ts, "dev"));
        e
    }

    #[test]
    fn later_timestamp_wins() {
        let e = entity_with(5, 10.0);
        let up = EntityUpdate::new("car-1", "Car")
            .with_attribute(Attribute::new("speed", num(20.0), 9, "dev"));
        let merged = merge_update(&e, &up).unwrap();
        assert_eq!(merged.attribute("speed").unwrap().value, num(20.0));
        assert_eq!(merged.attribute("speed").unwrap().timestamp, 9);
    }

    #[test]
    fn stale_update_ignored_removals_applied() {
        let mut e = entity_with(9, 20.0);
        e.attributes
            .insert("heading".into(), Attribute::new("heading", num(90.0), 4, "dev"));
        let mut up = EntityUpdate::new("car-1", "Car")
            .with_attribute(Attribute::new("speed", num(5.0), 3, "dev"));
        up.removed.push("heading".into());
        let merged = merge_update(&e, &up).unwrap();
        assert_eq!(merged.attribute("speed").unwrap().value, num(20.0));
        assert!(merged.attribute("heading").is_none());
    }

    #[test]
    fn id_and_type_guards() {
        let e = entity_with(1, 1.0);
        let other = EntityUpdate::new("car-2", "Car");
        assert!(matches!(
            merge_update(&e, &other),
            Err(FogError::IdMismatch { .. })
        ));
        let wrong_type = EntityUpdate::new("car-1", "Truck");
        assert!(matches!(
            merge_update(&e, &wrong_type),
            Err(FogError::TypeConflict { .. })
        ));
    }

    #[test]
    fn merge_is_idempotent() {
        let e = entity_with(5, 10.0);
        let up = EntityUpdate::new("car-1", "Car")
            .with_attribute(Attribute::new("speed", num(20.0), 9, "dev"))
            .with_location(GeoPoint::new(1.0, 2.0).unwrap());
        let once = merge_update(&e, &up).unwrap();
        let twice = merge_update(&once, &up).unwrap();
        assert_eq!(once, twice);
    }

    #[test]
    fn replay_any_order_converges_when_timestamps_differ() {
        // Brute-force oracle: all orderings of up to 4 updates with distinct
        // per-attribute timestamps must land on the same entity.
        use rand::prelude::*;
        use rand::rngs::StdRng;
        let mut rng = StdRng::seed_from_u64(7);
        for _case in 0..200 {
            let k = rng.gen_range(2..=4usize);
            let mut updates = Vec::new();
            for i in 0..k {
                let mut up = EntityUpdate::new("e", "T");
                // 1-2 attributes drawn from a small pool; timestamp encodes
                // (attr, i) so no two updates share a timestamp per attribute.
                for attr_idx in 0..rng.gen_range(1..=2usize) {
                    let name = format!("a{}", rng.gen_range(0..3u8));
                    let ts = (i as u64 + 1) * 10 + attr_idx as u64;
                    up.changed.insert(
                        name.clone(),
                        Attribute::new(name, num(rng.gen_range(0.0..100.0)), ts, "s"),
                    );
                }
                updates.push(up);
            }
            let base = ContextEntity::new("e", "T");
            let mut finals = Vec::new();
            let mut order: Vec<usize> = (0..k).collect();
            heap_permutations(&mut order, k, &mut |perm| {
                let mut e = base.clone();
                for &i in perm {
                    e.apply_update(&updates[i]).unwrap();
                }
                finals.push(canonical_json(&e));
            });
            assert!(finals.windows(2).all(|w| w[0] == w[1]), "orderings diverged");
        }

        fn heap_permutations(items: &mut Vec<usize>, k: usize, visit: &mut impl FnMut(&[usize])) {
            if k <= 1 {
                visit(items);
                return;
            }
            for i in 0..k {
                heap_permutations(items, k - 1, visit);
                if k % 2 == 0 {
                    items.swap(i, k - 1);
                } else {
                    items.swap(0, k - 1);
                }
            }
        }
    }

    #[test]
    fn projection_keeps_identity() {
        let mut e = entity_with(5, 10.0);
        e.location = Some(GeoPoint::new(1.0, 1.0).unwrap());
        e.attributes
            .insert("fuel".into(), Attribute::new("fuel", num(0.4), 5, "dev"));
        let p = e.project(&["speed".into()]);
        assert_eq!(p.id, "car-1");
        assert_eq!(p.location, e.location);
        assert!(p.attribute("speed").is_some());
        assert!(p.attribute("fuel").is_none());
        // Empty set keeps all attributes.
        assert_eq!(e.project(&[]), e);
        // Projection never grows the encoding.
        assert!(serialized_size(&p) <= serialized_size(&e));
    }

    #[test]
    fn canonical_encoding_is_stable() {
        let e = entity_with(5, 10.0);
        assert_eq!(canonical_json(&e), canonical_json(&e.clone()));
        let up = EntityUpdate::new("car-1", "Car");
        assert_eq!(serialized_size(&up), canonical_json(&up).len());
    }

    #[test]
    fn disjoint_updates_commute() {
        let base = entity_with(1, 1.0);
        let a = EntityUpdate::new("car-1", "Car")
            .with_attribute(Attribute::new("fuel", num(0.5), 7, "dev"));
        let b = EntityUpdate::new("car-1", "Car")
            .with_attribute(Attribute::new("heading", num(270.0), 3, "dev"));
        let ab = merge_update(&merge_update(&base, &a).unwrap(), &b).unwrap();
        let ba = merge_update(&merge_update(&base, &b).unwrap(), &a).unwrap();
        assert_eq!(ab, ba);
    }

    #[test]
    fn update_validation() {
        let mut up = EntityUpdate::new("x", "T")
            .with_attribute(Attribute::new("a", num(1.0), 1, "s"));
        up.removed.push("a".into());
        assert!(up.validate().is_err());
        assert!(EntityUpdate::new("", "T").validate().is_err());
    }
}
