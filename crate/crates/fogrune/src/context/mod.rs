//! The context model: entities, partial updates, selectors, geo scopes.
//!
//! Everything the platform moves around is a [`ContextEntity`] or an
//! [`EntityUpdate`] against one. Consumers describe interest with a
//! [`Selector`]; geography is expressed as [`GeoScope`]s over geohash
//! cells so that locality comparisons reduce to string prefixes.

pub mod entity;
pub mod geo;
pub mod selector;

pub use entity::{
    canonical_json, entity_from_update, merge_update, serialized_size, Attribute, AttributeValue,
    ContextEntity, EntityUpdate, LogicalTime,
};
pub use geo::{
    common_prefix_len, geohash_decode_bounds, geohash_decode_center, geohash_encode, haversine_m,
    scope_contains, GeoPoint, GeoScope, EARTH_RADIUS_M, GEOHASH_ALPHABET, MAX_GEOHASH_PRECISION,
};
pub use selector::{matches, Constraint, ConstraintOp, Selector};
