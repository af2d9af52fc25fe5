//! Scenario configuration: what a simulated run looks like.
//!
//! A scenario is plain JSON (see the files under `scenarios/`): node layout,
//! device groups, functions to register, timing and fault injections. The
//! same struct doubles as the programmatic entry point; the canned fleet
//! scenario used by the examples and benchmarks is built here too.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::context::{GeoPoint, GeoScope};
use crate::error::{Diagnostic, FogError};
use crate::function::{validate as validate_function, FogFunction, GroupBy, InputSelector};
use crate::operator::OperatorRegistry;
use crate::worker::LaunchTimingModel;

/// Data-placement strategy of the run.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Mode {
    /// Updates stay at the nearest edge broker and follow moving producers;
    /// tasks are placed by locality and migrate.
    Fog,
    /// Updates live at a fixed home edge; tasks are placed by locality but
    /// never move afterwards.
    Edge,
    /// All data and all tasks go to the cloud node.
    Cloud,
}

impl Mode {
    pub fn as_str(&self) -> &'static str {
        match self {
            Mode::Fog => "fog",
            Mode::Edge => "edge",
            Mode::Cloud => "cloud",
        }
    }
}

impl std::str::FromStr for Mode {
    type Err = FogError;
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "fog" => Ok(Mode::Fog),
            "edge" => Ok(Mode::Edge),
            "cloud" => Ok(Mode::Cloud),
            other => Err(FogError::InvalidConfig(format!(
                "mode {other:?} is not one of fog, edge, cloud"
            ))),
        }
    }
}

fn default_capacity() -> u32 {
    64
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NodeConfig {
    pub node_id: String,
    #[serde(default)]
    pub is_cloud: bool,
    pub location: GeoPoint,
    #[serde(default = "default_capacity")]
    pub capacity: u32,
}

/// One-way link latencies in milliseconds. The device uplink is the access
/// network; it carries no metered backbone traffic.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct LinkConfig {
    pub device_edge_ms: u64,
    pub edge_edge_ms: u64,
    pub edge_cloud_ms: u64,
}

impl Default for LinkConfig {
    fn default() -> Self {
        LinkConfig {
            device_edge_ms: 5,
            edge_edge_ms: 20,
            edge_cloud_ms: 50,
        }
    }
}

/// Device movement. Roaming devices hop between the edge coverage areas
/// round-robin, staying `dwell_ms` in each.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Mobility {
    #[default]
    Static,
    Roam {
        dwell_ms: u64,
    },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DeviceGroup {
    pub entity_type: String,
    /// Entity ids are "{id_prefix}-{n}"; defaults to the lowercased type.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub id_prefix: Option<String>,
    pub count: u32,
    /// Size of the opaque sensor frame each update carries.
    pub payload_bytes: usize,
    pub update_interval_ms: u64,
    #[serde(default)]
    pub mobility: Mobility,
}

impl DeviceGroup {
    pub fn prefix(&self) -> String {
        self.id_prefix
            .clone()
            .unwrap_or_else(|| self.entity_type.to_lowercase())
    }
}

/// Mid-run fault or topology change.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Injection {
    /// A new node (broker + worker) comes up and starts heartbeating.
    NodeJoined { at_ms: u64, node: NodeConfig },
    /// The node's worker dies silently; detected via missed heartbeats.
    NodeFailed { at_ms: u64, node_id: String },
    /// The node's worker capacity drops, forcing evictions.
    OverloadBurst {
        at_ms: u64,
        node_id: String,
        capacity: u32,
    },
}

impl Injection {
    pub fn at_ms(&self) -> u64 {
        match self {
            Injection::NodeJoined { at_ms, .. }
            | Injection::NodeFailed { at_ms, .. }
            | Injection::OverloadBurst { at_ms, .. } => *at_ms,
        }
    }
}

fn default_heartbeat_ms() -> u64 {
    10_000
}

fn default_sweep_ms() -> u64 {
    5_000
}

fn default_precision() -> usize {
    5
}

fn default_ttl_s() -> u64 {
    30
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SimConfig {
    pub seed: u64,
    pub duration_s: u64,
    pub mode: Mode,
    pub nodes: Vec<NodeConfig>,
    #[serde(default)]
    pub links: LinkConfig,
    #[serde(default)]
    pub devices: Vec<DeviceGroup>,
    #[serde(default)]
    pub functions: Vec<FogFunction>,
    #[serde(default)]
    pub timing: LaunchTimingModel,
    #[serde(default = "default_heartbeat_ms")]
    pub heartbeat_interval_ms: u64,
    #[serde(default = "default_sweep_ms")]
    pub sweep_interval_ms: u64,
    #[serde(default = "default_precision")]
    pub index_precision: usize,
    #[serde(default = "default_ttl_s")]
    pub registration_ttl_s: u64,
    #[serde(default)]
    pub injections: Vec<Injection>,
    /// Pre-warm every worker's operator cache so launches skip the fetch.
    #[serde(default)]
    pub prefetch_operators: bool,
}

impl SimConfig {
    pub fn from_path(path: &Path) -> Result<SimConfig, FogError> {
        let text = std::fs::read_to_string(path)?;
        Ok(serde_json::from_str(&text)?)
    }

    /// Structural checks; an empty result means runnable.
    pub fn validate(&self) -> Vec<Diagnostic> {
        let mut out = Vec::new();
        let mut push = |field: &str, message: String| {
            out.push(Diagnostic {
                field: field.to_string(),
                message,
            })
        };
        if self.duration_s == 0 {
            push("duration_s", "must be positive".into());
        }
        if self.heartbeat_interval_ms == 0 {
            push("heartbeat_interval_ms", "must be positive".into());
        }
        if self.sweep_interval_ms == 0 {
            push("sweep_interval_ms", "must be positive".into());
        }
        if !(1..=12).contains(&self.index_precision) {
            push(
                "index_precision",
                format!("{} out of 1..=12", self.index_precision),
            );
        }
        if self.registration_ttl_s == 0 {
            push("registration_ttl_s", "must be positive".into());
        }

        let clouds = self.nodes.iter().filter(|n| n.is_cloud).count();
        if clouds != 1 {
            push(
                "nodes",
                format!("need exactly one cloud node (management), found {clouds}"),
            );
        }
        let mut node_ids = std::collections::BTreeSet::new();
        for (i, n) in self.nodes.iter().enumerate() {
            let field = format!("nodes[{i}]");
            if n.node_id.is_empty() {
                push(&field, "node_id must be non-empty".into());
            }
            if !node_ids.insert(n.node_id.clone()) {
                push(&field, format!("duplicate node_id {:?}", n.node_id));
            }
            if let Err(e) = n.location.validate() {
                push(&field, e.to_string());
            }
            if n.capacity == 0 {
                push(&field, "capacity must be positive".into());
            }
        }
        if self.nodes.iter().all(|n| n.is_cloud) && !self.nodes.is_empty() {
            // Cloud-only layouts are fine; locality placement just overflows.
        }

        let mut prefixes = std::collections::BTreeSet::new();
        for (i, d) in self.devices.iter().enumerate() {
            let field = format!("devices[{i}]");
            if d.entity_type.is_empty() {
                push(&field, "entity_type must be non-empty".into());
            }
            if d.count == 0 {
                push(&field, "count must be positive".into());
            }
            if d.update_interval_ms == 0 {
                push(&field, "update_interval_ms must be positive".into());
            }
            if let Mobility::Roam { dwell_ms } = d.mobility {
                if dwell_ms == 0 {
                    push(&field, "dwell_ms must be positive".into());
                }
            }
            if !prefixes.insert(d.prefix()) {
                push(&field, format!("id prefix {:?} collides", d.prefix()));
            }
        }

        let registry = OperatorRegistry::with_builtins();
        let mut fn_names = std::collections::BTreeSet::new();
        for (i, f) in self.functions.iter().enumerate() {
            let field = format!("functions[{i}]");
            if !fn_names.insert(f.name.clone()) {
                push(&field, format!("duplicate function name {:?}", f.name));
            }
            for d in validate_function(f, &registry) {
                push(&format!("{field}.{}", d.field), d.message);
            }
        }

        // Injections may only reference nodes that exist when they fire.
        for (i, inj) in self.injections.iter().enumerate() {
            let field = format!("injections[{i}]");
            if inj.at_ms() > self.duration_s * 1000 {
                push(&field, "fires after the run ends".into());
            }
            match inj {
                Injection::NodeJoined { node, .. } => {
                    if node_ids.contains(&node.node_id) {
                        push(&field, format!("node {:?} already exists", node.node_id));
                    } else {
                        node_ids.insert(node.node_id.clone());
                    }
                }
                Injection::NodeFailed { node_id, .. }
                | Injection::OverloadBurst { node_id, .. } => {
                    if !node_ids.contains(node_id) {
                        push(&field, format!("unknown node {node_id:?}"));
                    }
                }
            }
        }
        out
    }

    /// The car-fleet scenario: 100 cars spread over four metro edges plus a
    /// cloud, publishing a sensor frame of `payload_bytes` once a second
    /// into a per-car speed watcher. `mobile` makes the cars roam between
    /// the edge coverage areas.
    pub fn fleet(mode: Mode, payload_bytes: usize, mobile: bool, seed: u64) -> SimConfig {
        let mut speed_watch = FogFunction::new(
            "speed_watch",
            "speed_estimation",
            vec![{
                let mut input = InputSelector::new("Car", GroupBy::PerEntityId);
                input.attribute_set = vec!["speed_kmh".into()];
                input
            }],
        );
        speed_watch.output_types = vec!["SpeedEstimate".into()];
        speed_watch.geoscope = Some(GeoScope::Global);

        SimConfig {
            seed,
            duration_s: 60,
            mode,
            nodes: vec![
                NodeConfig {
                    node_id: "cloud".into(),
                    is_cloud: true,
                    location: GeoPoint {
                        lat: 50.0,
                        lon: 10.0,
                    },
                    capacity: 1024,
                },
                edge_node("edge-berlin", 52.52, 13.40),
                edge_node("edge-munich", 48.14, 11.58),
                edge_node("edge-frankfurt", 50.11, 8.68),
                edge_node("edge-hamburg", 53.55, 9.99),
            ],
            links: LinkConfig::default(),
            devices: vec![DeviceGroup {
                entity_type: "Car".into(),
                id_prefix: Some("car".into()),
                count: 100,
                payload_bytes,
                update_interval_ms: 1000,
                mobility: if mobile {
                    Mobility::Roam { dwell_ms: 10_000 }
                } else {
                    Mobility::Static
                },
            }],
            functions: vec![speed_watch],
            timing: LaunchTimingModel {
                fetch_delay_ms: 0,
                launch_delay_ms: 50,
                terminate_delay_ms: 30,
            },
            heartbeat_interval_ms: default_heartbeat_ms(),
            sweep_interval_ms: default_sweep_ms(),
            index_precision: default_precision(),
            registration_ttl_s: default_ttl_s(),
            injections: Vec::new(),
            prefetch_operators: true,
        }
    }
}

fn edge_node(id: &str, lat: f64, lon: f64) -> NodeConfig {
    NodeConfig {
        node_id: id.into(),
        is_cloud: false,
        location: GeoPoint { lat, lon },
        capacity: default_capacity(),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn fleet_config_is_valid() {
        for mode in [Mode::Fog, Mode::Edge, Mode::Cloud] {
            let cfg = SimConfig::fleet(mode, 126, false, 1);
            assert_eq!(cfg.validate(), Vec::new());
        }
    }

    #[test]
    fn fleet_roundtrips_through_json() {
        let cfg = SimConfig::fleet(Mode::Fog, 1682, true, 7);
        let text = serde_json::to_string_pretty(&cfg).unwrap();
        let back: SimConfig = serde_json::from_str(&text).unwrap();
        assert_eq!(back, cfg);
    }

    #[test]
    fn rejects_zero_duration_and_missing_cloud() {
        let mut cfg = SimConfig::fleet(Mode::Fog, 126, false, 1);
        cfg.duration_s = 0;
        cfg.nodes.retain(|n| !n.is_cloud);
        let diags = cfg.validate();
        assert!(diags.iter().any(|d| d.field == "duration_s"));
        assert!(diags.iter().any(|d| d.field == "nodes"));
    }

    #[test]
    fn rejects_unknown_operator() {
        let mut cfg = SimConfig::fleet(Mode::Fog, 126, false, 1);
        cfg.functions[0].operator = "nonexistent".into();
        let diags = cfg.validate();
        assert!(diags.iter().any(|d| d.field.contains("operator")));
    }

    #[test]
    fn rejects_injection_on_unknown_node() {
        let mut cfg = SimConfig::fleet(Mode::Fog, 126, false, 1);
        cfg.injections.push(Injection::NodeFailed {
            at_ms: 1000,
            node_id: "edge-ghost".into(),
        });
        let diags = cfg.validate();
        assert!(diags.iter().any(|d| d.field.starts_with("injections")));
    }

    #[test]
    fn node_joined_extends_known_nodes() {
        let mut cfg = SimConfig::fleet(Mode::Fog, 126, false, 1);
        cfg.injections.push(Injection::NodeJoined {
            at_ms: 5_000,
            node: edge_node("edge-leipzig", 51.34, 12.37),
        });
        cfg.injections.push(Injection::NodeFailed {
            at_ms: 20_000,
            node_id: "edge-leipzig".into(),
        });
        assert_eq!(cfg.validate(), Vec::new());
    }

    #[test]
    fn mode_parses_from_str() {
        assert_eq!("fog".parse::<Mode>().unwrap(), Mode::Fog);
        assert!("mist".parse::<Mode>().is_err());
    }
}
