//! Geographic primitives: points, scopes, geohash cells.
//!
//! Geohashes use the standard base-32 alphabet and bit interleaving starting
//! with longitude, so cells refine by string prefix: every extension of a
//! hash lies inside the cell named by the shorter hash.

use serde::{Deserialize, Serialize};

use crate::error::FogError;

pub const GEOHASH_ALPHABET: &[u8; 32] = b"0123456789bcdefghjkmnpqrstuvwxyz";
pub const MAX_GEOHASH_PRECISION: usize = 12;
pub const EARTH_RADIUS_M: f64 = 6_371_000.0;

/// WGS84-style coordinate. Latitude in [-90, 90], longitude in [-180, 180],
/// never NaN; construct through `new` to keep that true.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GeoPoint {
    pub lat: f64,
    pub lon: f64,
}

impl GeoPoint {
    pub fn new(lat: f64, lon: f64) -> Result<Self, FogError> {
        let p = GeoPoint { lat, lon };
        p.validate()?;
        Ok(p)
    }

    pub fn validate(&self) -> Result<(), FogError> {
        if self.lat.is_nan() || self.lon.is_nan() {
            return Err(FogError::InvalidCoordinate("NaN coordinate".into()));
        }
        if !(-90.0..=90.0).contains(&self.lat) {
            return Err(FogError::InvalidCoordinate(format!(
                "latitude {} out of [-90, 90]",
                self.lat
            )));
        }
        if !(-180.0..=180.0).contains(&self.lon) {
            return Err(FogError::InvalidCoordinate(format!(
                "longitude {} out of [-180, 180]",
                self.lon
            )));
        }
        Ok(())
    }
}

/// Great-circle distance in meters (haversine, spherical earth).
pub fn haversine_m(a: GeoPoint, b: GeoPoint) -> f64 {
    let (lat1, lon1) = (a.lat.to_radians(), a.lon.to_radians());
    let (lat2, lon2) = (b.lat.to_radians(), b.lon.to_radians());
    let dlat = lat2 - lat1;
    let dlon = lon2 - lon1;
    let h = (dlat / 2.0).sin().powi(2) + lat1.cos() * lat2.cos() * (dlon / 2.0).sin().powi(2);
    2.0 * EARTH_RADIUS_M * h.sqrt().asin()
}

/// Geographic applicability of selectors, functions and queries.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum GeoScope {
    Global,
    Circle { center: GeoPoint, radius_m: f64 },
    GeohashPrefix { prefix: String },
}

impl Default for GeoScope {
    fn default() -> Self {
        GeoScope::Global
    }
}

impl GeoScope {
    /// Point-in-scope test. Entities without a location are handled by the
    /// caller (they can only match `Global`).
    pub fn contains(&self, p: GeoPoint) -> bool {
        match self {
            GeoScope::Global => true,
            GeoScope::Circle { center, radius_m } => haversine_m(*center, p) <= *radius_m,
            GeoScope::GeohashPrefix { prefix } => match geohash_encode(p, prefix.len()) {
                Ok(h) => h == *prefix,
                Err(_) => false,
            },
        }
    }

    pub fn validate(&self) -> Result<(), FogError> {
        match self {
            GeoScope::Global => Ok(()),
            GeoScope::Circle { center, radius_m } => {
                center.validate()?;
                if !radius_m.is_finite() || *radius_m < 0.0 {
                    return Err(FogError::InvalidCoordinate(format!(
                        "circle radius {radius_m} must be finite and non-negative"
                    )));
                }
                Ok(())
            }
            GeoScope::GeohashPrefix { prefix } => {
                if prefix.is_empty() || prefix.len() > MAX_GEOHASH_PRECISION {
                    return Err(FogError::InvalidGeohash(format!(
                        "prefix length {} out of 1..=12",
                        prefix.len()
                    )));
                }
                if let Some(c) = prefix.bytes().find(|b| !GEOHASH_ALPHABET.contains(b)) {
                    return Err(FogError::InvalidGeohash(format!(
                        "character {:?} not in geohash alphabet",
                        c as char
                    )));
                }
                Ok(())
            }
        }
    }
}

/// `scope_contains(scope, p)` as a free function, mirroring `GeoScope::contains`.
pub fn scope_contains(scope: &GeoScope, p: GeoPoint) -> bool {
    scope.contains(p)
}

/// Encode a point to a geohash cell of the given precision (1..=12).
pub fn geohash_encode(p: GeoPoint, precision: usize) -> Result<String, FogError> {
    if precision == 0 || precision > MAX_GEOHASH_PRECISION {
        return Err(FogError::InvalidPrecision(precision));
    }
    p.validate()?;
    let mut lat = (-90.0f64, 90.0f64);
    let mut lon = (-180.0f64, 180.0f64);
    let mut even_bit = true; // longitude first
    let mut out = String::with_capacity(precision);
    let mut bits = 0u8;
    let mut bit_count = 0u8;
    while out.len() < precision {
        let (range, value) = if even_bit {
            (&mut lon, p.lon)
        } else {
            (&mut lat, p.lat)
        };
        let mid = (range.0 + range.1) / 2.0;
        bits <<= 1;
        if value >= mid {
            bits |= 1;
            range.0 = mid;
        } else {
            range.1 = mid;
        }
        even_bit = !even_bit;
        bit_count += 1;
        if bit_count == 5 {
            out.push(GEOHASH_ALPHABET[bits as usize] as char);
            bits = 0;
            bit_count = 0;
        }
    }
    Ok(out)
}

/// Lat/lon bounding box of a geohash cell: ((lat_min, lat_max), (lon_min, lon_max)).
pub fn geohash_decode_bounds(hash: &str) -> Result<((f64, f64), (f64, f64)), FogError> {
    if hash.is_empty() || hash.len() > MAX_GEOHASH_PRECISION {
        return Err(FogError::InvalidGeohash(format!(
            "hash length {} out of 1..=12",
            hash.len()
        )));
    }
    let mut lat = (-90.0f64, 90.0f64);
    let mut lon = (-180.0f64, 180.0f64);
    let mut even_bit = true;
    for ch in hash.bytes() {
        let idx = GEOHASH_ALPHABET
            .iter()
            .position(|b| *b == ch)
            .ok_or_else(|| {
                FogError::InvalidGeohash(format!("character {:?} not in alphabet", ch as char))
            })?;
        for shift in (0..5).rev() {
            let bit = (idx >> shift) & 1;
            let range = if even_bit { &mut lon } else { &mut lat };
            let mid = (range.0 + range.1) / 2.0;
            if bit == 1 {
                range.0 = mid;
            } else {
                range.1 = mid;
            }
            even_bit = !even_bit;
        }
    }
    Ok((lat, lon))
}

/// Center point of a geohash cell.
pub fn geohash_decode_center(hash: &str) -> Result<GeoPoint, FogError> {
    let (lat, lon) = geohash_decode_bounds(hash)?;
    Ok(GeoPoint {
        lat: (lat.0 + lat.1) / 2.0,
        lon: (lon.0 + lon.1) / 2.0,
    })
}

/// Length of the shared leading run of two geohash strings.
pub fn common_prefix_len(a: &str, b: &str) -> usize {
    a.bytes().zip(b.bytes()).take_while(|(x, y)| x == y).count()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn encode_origin_precision_one() {
        let p = GeoPoint::new(0.0, 0.0).unwrap();
        assert_eq!(geohash_encode(p, 1).unwrap(), "s");
        // Nearby points in the same quadrant share the cell.
        let q = GeoPoint::new(0.1, 0.1).unwrap();
        assert!(geohash_encode(q, 5).unwrap().starts_with('s'));
    }

    #[test]
    fn encode_known_cells() {
        // Widely published reference hashes.
        let jutland = GeoPoint::new(57.64911, 10.40744).unwrap();
        assert_eq!(geohash_encode(jutland, 11).unwrap(), "u4pruydqqvj");
        let leon = GeoPoint::new(42.6, -5.6).unwrap();
        assert_eq!(geohash_encode(leon, 5).unwrap(), "ezs42");
    }

    #[test]
    fn precision_zero_rejected() {
        let p = GeoPoint::new(10.0, 10.0).unwrap();
        assert!(matches!(
            geohash_encode(p, 0),
            Err(FogError::InvalidPrecision(0))
        ));
        assert!(matches!(
            geohash_encode(p, 13),
            Err(FogError::InvalidPrecision(13))
        ));
    }

    #[test]
    fn decode_center_close_at_high_precision() {
        let p = GeoPoint::new(48.8584, 2.2945).unwrap();
        let h = geohash_encode(p, 9).unwrap();
        let c = geohash_decode_center(&h).unwrap();
        assert!(haversine_m(p, c) < 10.0, "center drifted {}", haversine_m(p, c));
    }

    #[test]
    fn prefix_refinement() {
        let p = GeoPoint::new(-33.8688, 151.2093).unwrap();
        let full = geohash_encode(p, 12).unwrap();
        for k in 1..=12 {
            assert_eq!(geohash_encode(p, k).unwrap(), full[..k]);
        }
    }

    #[test]
    fn scope_checks() {
        let berlin = GeoPoint::new(52.52, 13.405).unwrap();
        let potsdam = GeoPoint::new(52.39, 13.06).unwrap();
        assert!(GeoScope::Global.contains(berlin));
        let circle = GeoScope::Circle {
            center: berlin,
            radius_m: 40_000.0,
        };
        assert!(circle.contains(potsdam));
        let tight = GeoScope::Circle {
            center: berlin,
            radius_m: 1_000.0,
        };
        assert!(!tight.contains(potsdam));
        let prefix = GeoScope::GeohashPrefix {
            prefix: geohash_encode(berlin, 3).unwrap(),
        };
        assert!(prefix.contains(berlin));
    }

    #[test]
    fn invalid_points_rejected() {
        assert!(GeoPoint::new(f64::NAN, 0.0).is_err());
        assert!(GeoPoint::new(91.0, 0.0).is_err());
        assert!(GeoPoint::new(0.0, 181.0).is_err());
    }
}
