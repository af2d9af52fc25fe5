//! The simulated cluster: nodes, devices, links and the event loop that
//! drives a whole scenario.
//!
//! Every node runs one broker and (until it fails) one worker. Discovery and
//! the orchestrator live on the cloud node, so messages between them never
//! cross a link. Devices are not nodes: they reach the nearest edge over the
//! access network, which is why device uplink bytes never appear in the
//! cross-node traffic figures.
//!
//! The three modes differ only in wiring:
//! - fog: partial updates to the nearest edge broker, re-homing on movement,
//!   locality placement with migration, projected input subscriptions.
//! - edge: full updates to a fixed home broker (forwarded from the ingress
//!   edge when the device roams), locality placement, no migration.
//! - cloud: full updates forwarded to the cloud broker, everything placed
//!   on the cloud worker.

use std::collections::{BTreeMap, BTreeSet};
use std::io::Write;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::broker::Broker;
use crate::context::{
    geohash_decode_center, geohash_encode, haversine_m, Attribute, AttributeValue, ContextEntity,
    EntityUpdate, GeoPoint, LogicalTime,
};
use crate::discovery::{AvailabilityEvent, AvailabilityRegistration, Discovery};
use crate::error::FogError;
use crate::message::{Envelope, Message, NotificationSink};
use crate::operator::{OperatorHost, OperatorRegistry};
use crate::orchestrator::{
    EventOutcome, MigrationPlan, MigrationTrigger, OrchestrationAction, Orchestrator,
    OrchestratorConfig, PlacementPolicy,
};
use crate::sim::engine::EventQueue;
use crate::sim::metrics::{fingerprint_lines, LatencyStats, MetricsCollector, MetricsReport};
use crate::sim::scenario::{Injection, Mobility, Mode, NodeConfig, SimConfig};
use crate::worker::{TaskState, Worker};

struct Node {
    node_id: String,
    location: GeoPoint,
    geohash: String,
    is_cloud: bool,
    broker: Broker,
    /// None once the node's worker has failed; the broker keeps serving.
    worker: Option<Worker>,
}

struct Device {
    id: String,
    entity_type: String,
    payload_bytes: usize,
    interval_us: u64,
    /// Hop to the next coverage area every this many ticks.
    roam_every: Option<u64>,
    anchor: usize,
    lat_off: f64,
    lon_off: f64,
    home_node: String,
    seq: u64,
    sent_full: bool,
    rng: ChaCha8Rng,
}

enum SimEvent {
    DeviceTick(usize),
    Deliver(Envelope),
    /// A launching task finished its fetch+launch window.
    TaskReady { node_id: String, task_id: String },
    /// An operator output becomes visible at its worker's local broker.
    PublishLocal {
        node_id: String,
        update: EntityUpdate,
        trace: Option<String>,
    },
    /// Fog re-homing: the device tells its previous broker to drop it.
    Detach { node_id: String, entity_id: String },
    NodeBeat { node_id: String },
    Sweep,
    Inject(usize),
}

struct PendingMigration {
    started_at: LogicalTime,
    running_at: Option<LogicalTime>,
    terminated_at: Option<LogicalTime>,
    done: bool,
}

/// Operator host backed by the task's node-local broker.
struct BrokerHost<'a> {
    broker: &'a mut Broker,
}

impl OperatorHost for BrokerHost<'_> {
    fn query(&mut self, selector: &crate::context::Selector) -> Vec<ContextEntity> {
        self.broker.query(selector)
    }

    fn subscribe(&mut self, _selector: crate::context::Selector) {
        log::debug!("operator-requested subscriptions are not wired in the simulator");
    }
}

fn mix_seed(seed: u64, id: &str) -> u64 {
    let mut h: u64 = 0xcbf29ce484222325;
    for &b in id.as_bytes() {
        h ^= b as u64;
        h = h.wrapping_mul(0x100000001b3);
    }
    seed ^ h
}

fn nearest_edge(nodes: &BTreeMap<String, Node>, p: GeoPoint) -> Option<String> {
    nodes
        .values()
        .filter(|n| !n.is_cloud)
        .map(|n| (haversine_m(n.location, p), n.node_id.clone()))
        .min_by(|a, b| a.0.total_cmp(&b.0).then_with(|| a.1.cmp(&b.1)))
        .map(|(_, id)| id)
}

pub struct Cluster {
    cfg: SimConfig,
    registry: OperatorRegistry,
    now: LogicalTime,
    queue: EventQueue<SimEvent>,
    nodes: BTreeMap<String, Node>,
    mgmt: String,
    discovery: Discovery,
    orchestrator: Orchestrator,
    devices: Vec<Device>,
    device_index: BTreeMap<String, usize>,
    /// Edge coverage anchor points (cell centers), in config order.
    anchors: Vec<(String, GeoPoint)>,
    broker_nodes: BTreeMap<String, String>,
    worker_nodes: BTreeMap<String, String>,
    metrics: MetricsCollector,
    trace_starts: BTreeMap<String, LogicalTime>,
    task_birth: BTreeMap<String, LogicalTime>,
    pending_migrations: Vec<PendingMigration>,
    migration_watch: BTreeMap<String, usize>,
    /// Wall-clock decision samples, collected only when asked.
    measure_decisions: bool,
    decision_samples: Vec<u64>,
    log: Option<Box<dyn Write>>,
}

impl Cluster {
    pub fn new(cfg: SimConfig) -> Result<Cluster, FogError> {
        let diags = cfg.validate();
        if !diags.is_empty() {
            let joined = diags
                .iter()
                .map(|d| format!("{}: {}", d.field, d.message))
                .collect::<Vec<_>>()
                .join("; ");
            return Err(FogError::InvalidConfig(joined));
        }
        let mgmt = cfg
            .nodes
            .iter()
            .find(|n| n.is_cloud)
            .expect("validated")
            .node_id
            .clone();

        let registry = OperatorRegistry::with_builtins();
        let orch_config = match cfg.mode {
            Mode::Fog => OrchestratorConfig {
                policy: PlacementPolicy::Locality,
                migration_enabled: true,
                project_inputs: true,
                heartbeat_interval_ms: cfg.heartbeat_interval_ms,
                sink: NotificationSink {
                    node_id: mgmt.clone(),
                    channel: "orchestrator".into(),
                },
            },
            Mode::Edge => OrchestratorConfig {
                policy: PlacementPolicy::Locality,
                migration_enabled: false,
                project_inputs: false,
                heartbeat_interval_ms: cfg.heartbeat_interval_ms,
                sink: NotificationSink {
                    node_id: mgmt.clone(),
                    channel: "orchestrator".into(),
                },
            },
            Mode::Cloud => OrchestratorConfig {
                policy: PlacementPolicy::CloudOnly,
                migration_enabled: false,
                project_inputs: false,
                heartbeat_interval_ms: cfg.heartbeat_interval_ms,
                sink: NotificationSink {
                    node_id: mgmt.clone(),
                    channel: "orchestrator".into(),
                },
            },
        };

        let mut cluster = Cluster {
            registry: registry.clone(),
            now: 0,
            queue: EventQueue::new(),
            nodes: BTreeMap::new(),
            mgmt: mgmt.clone(),
            discovery: Discovery::new(cfg.index_precision, cfg.registration_ttl_s),
            orchestrator: Orchestrator::new(orch_config, registry),
            devices: Vec::new(),
            device_index: BTreeMap::new(),
            anchors: Vec::new(),
            broker_nodes: BTreeMap::new(),
            worker_nodes: BTreeMap::new(),
            metrics: MetricsCollector::new(),
            trace_starts: BTreeMap::new(),
            task_birth: BTreeMap::new(),
            pending_migrations: Vec::new(),
            migration_watch: BTreeMap::new(),
            measure_decisions: false,
            decision_samples: Vec::new(),
            log: None,
            cfg,
        };

        for nc in cluster.cfg.nodes.clone() {
            cluster.add_node(&nc)?;
        }

        // Coverage anchors: the cell centers of the configured edges. With no
        // edges everything anchors at the cloud.
        for nc in cluster.cfg.nodes.clone() {
            if !nc.is_cloud {
                let cell = geohash_encode(nc.location, cluster.cfg.index_precision)?;
                cluster
                    .anchors
                    .push((nc.node_id.clone(), geohash_decode_center(&cell)?));
            }
        }
        if cluster.anchors.is_empty() {
            let c = cluster.nodes.get(&mgmt).expect("mgmt exists");
            cluster.anchors.push((mgmt.clone(), c.location));
        }

        cluster.spawn_devices();

        for f in cluster.cfg.functions.clone() {
            cluster.register_function(f)?;
        }

        // Workers introduce themselves right away so the first device
        // registrations already find a populated worker table.
        let node_ids: Vec<String> = cluster.nodes.keys().cloned().collect();
        for (i, node_id) in node_ids.iter().enumerate() {
            cluster.queue.push(
                (i as u64 + 1) * 1_000,
                SimEvent::NodeBeat {
                    node_id: node_id.clone(),
                },
            );
        }
        cluster.queue.push(
            cluster.cfg.sweep_interval_ms * 1_000,
            SimEvent::Sweep,
        );
        for (i, inj) in cluster.cfg.injections.clone().iter().enumerate() {
            cluster.queue.push(inj.at_ms() * 1_000, SimEvent::Inject(i));
        }
        Ok(cluster)
    }

    fn add_node(&mut self, nc: &NodeConfig) -> Result<(), FogError> {
        let geohash = geohash_encode(nc.location, self.cfg.index_precision)?;
        let broker_id = format!("broker@{}", nc.node_id);
        let mut broker = Broker::new(&broker_id, &nc.node_id);
        broker.index_precision = self.cfg.index_precision;
        broker.registration_ttl_s = self.cfg.registration_ttl_s;
        let worker_id = format!("w@{}", nc.node_id);
        let mut worker = Worker::new(
            &worker_id,
            &nc.node_id,
            &geohash,
            nc.is_cloud,
            nc.capacity,
            self.cfg.timing.clone(),
            self.registry.clone(),
        );
        if self.cfg.prefetch_operators {
            let names: Vec<String> = self.registry.names().map(str::to_string).collect();
            for name in names {
                worker.prefetch(&name);
            }
        }
        self.broker_nodes.insert(broker_id, nc.node_id.clone());
        self.worker_nodes.insert(worker_id, nc.node_id.clone());
        self.nodes.insert(
            nc.node_id.clone(),
            Node {
                node_id: nc.node_id.clone(),
                location: nc.location,
                geohash,
                is_cloud: nc.is_cloud,
                broker,
                worker: Some(worker),
            },
        );
        Ok(())
    }

    fn spawn_devices(&mut self) {
        let groups = self.cfg.devices.clone();
        for group in &groups {
            let prefix = group.prefix();
            for i in 0..group.count {
                let id = format!("{}-{}", prefix, i + 1);
                let anchor = i as usize % self.anchors.len();
                let mut rng = ChaCha8Rng::seed_from_u64(mix_seed(self.cfg.seed, &id));
                let lat_off = rng.gen_range(-0.002..0.002);
                let lon_off = rng.gen_range(-0.002..0.002);
                let home_node = match self.cfg.mode {
                    Mode::Cloud => self.mgmt.clone(),
                    _ => self.anchors[anchor].0.clone(),
                };
                let interval_us = group.update_interval_ms * 1_000;
                let roam_every = match group.mobility {
                    Mobility::Static => None,
                    Mobility::Roam { dwell_ms } => {
                        Some((dwell_ms / group.update_interval_ms).max(1))
                    }
                };
                let idx = self.devices.len();
                self.device_index.insert(id.clone(), idx);
                self.devices.push(Device {
                    id,
                    entity_type: group.entity_type.clone(),
                    payload_bytes: group.payload_bytes,
                    interval_us,
                    roam_every,
                    anchor,
                    lat_off,
                    lon_off,
                    home_node,
                    seq: 0,
                    sent_full: false,
                    rng,
                });
                // First ticks spread over one interval, after the workers'
                // first heartbeats have landed.
                let first = 100_000 + (i as u64 * interval_us) / group.count as u64;
                self.queue.push(first, SimEvent::DeviceTick(idx));
            }
        }
    }

    /// Register a function at the management node (orchestrator + discovery).
    pub fn register_function(&mut self, f: crate::function::FogFunction) -> Result<(), FogError> {
        let subs = self.orchestrator.register_function(f)?;
        for sub in subs {
            let events = self.discovery.subscribe_availability(sub);
            for ev in events {
                self.handle_avail_event(ev);
            }
        }
        Ok(())
    }

    pub fn log_messages_to(&mut self, sink: Box<dyn Write>) {
        self.log = Some(sink);
    }

    pub fn measure_decisions(&mut self, on: bool) {
        self.measure_decisions = on;
    }

    /// Drains the event queue. Recurring sources stop scheduling at the
    /// configured duration, so the loop ends once the tail has settled.
    pub fn run(&mut self) {
        while let Some((at, ev)) = self.queue.pop() {
            debug_assert!(at >= self.now, "virtual time went backwards");
            self.now = at;
            self.handle(ev);
        }
        let horizon = self.cfg.duration_s * 1_000_000;
        if self.now < horizon {
            self.now = horizon;
        }
    }

    pub fn now(&self) -> LogicalTime {
        self.now
    }

    pub fn orchestrator(&self) -> &Orchestrator {
        &self.orchestrator
    }

    pub fn discovery(&self) -> &Discovery {
        &self.discovery
    }

    pub fn broker(&self, node_id: &str) -> Option<&Broker> {
        self.nodes.get(node_id).map(|n| &n.broker)
    }

    pub fn worker(&self, node_id: &str) -> Option<&Worker> {
        self.nodes.get(node_id).and_then(|n| n.worker.as_ref())
    }

    pub fn node_ids(&self) -> Vec<String> {
        self.nodes.keys().cloned().collect()
    }

    /// Entities of the functions' declared output types, across all brokers.
    pub fn result_entities(&self) -> Vec<ContextEntity> {
        let result_types: BTreeSet<&str> = self
            .cfg
            .functions
            .iter()
            .flat_map(|f| f.output_types.iter().map(String::as_str))
            .collect();
        let mut out = Vec::new();
        for node in self.nodes.values() {
            for e in node.broker.entities() {
                if result_types.contains(e.entity_type.as_str()) {
                    out.push(e.clone());
                }
            }
        }
        out
    }

    fn result_fingerprint(&self) -> String {
        let lines = self
            .result_entities()
            .iter()
            .map(|e| {
                let attrs: Vec<String> = e
                    .attributes
                    .values()
                    .map(|a| format!("{}={}", a.name, a.value.canonical_string()))
                    .collect();
                format!("{}|{}|{}", e.entity_type, e.id, attrs.join(","))
            })
            .collect();
        fingerprint_lines(lines)
    }

    pub fn report(&self) -> MetricsReport {
        let mut rep = self.metrics.report(
            self.cfg.mode.as_str(),
            self.cfg.seed,
            self.cfg.duration_s,
            self.result_fingerprint(),
        );
        rep.dropped_notifications += self
            .nodes
            .values()
            .filter_map(|n| n.worker.as_ref())
            .map(|w| w.dropped_notifications())
            .sum::<u64>();
        if self.measure_decisions {
            rep.decision_latency = LatencyStats::from_samples(&self.decision_samples);
        }
        rep
    }

    // ---- transport ----------------------------------------------------

    fn link_us(&self, a: &str, b: &str) -> u64 {
        if a == b {
            return 0;
        }
        let cloudy = |id: &str| self.nodes.get(id).map(|n| n.is_cloud).unwrap_or(false);
        let ms = if cloudy(a) || cloudy(b) {
            self.cfg.links.edge_cloud_ms
        } else {
            self.cfg.links.edge_edge_ms
        };
        ms * 1_000
    }

    /// Node-to-node send: counts bytes when a boundary is crossed.
    fn send(&mut self, env: Envelope) {
        if let Some(log) = &mut self.log {
            let _ = writeln!(log, "{}", env.canonical_json());
        }
        let latency = self.link_us(&env.src, &env.dst);
        if env.src != env.dst {
            self.metrics
                .traffic
                .record(&env.src, &env.dst, env.msg.kind(), env.wire_size());
        }
        let at = env.sent_at + latency;
        self.queue.push(at, SimEvent::Deliver(env));
    }

    /// Device uplink: access network, not metered as cross-node traffic.
    fn send_from_device(&mut self, env: Envelope) {
        if let Some(log) = &mut self.log {
            let _ = writeln!(log, "{}", env.canonical_json());
        }
        let at = env.sent_at + self.cfg.links.device_edge_ms * 1_000;
        self.queue.push(at, SimEvent::Deliver(env));
    }

    // ---- management-side helpers --------------------------------------

    fn orch_on_event(&mut self, ev: &AvailabilityEvent) -> EventOutcome {
        if self.measure_decisions {
            let t0 = std::time::Instant::now();
            let out = self.orchestrator.on_event(ev, self.now);
            self.decision_samples
                .push(t0.elapsed().as_micros() as u64);
            out
        } else {
            self.orchestrator.on_event(ev, self.now)
        }
    }

    fn handle_avail_event(&mut self, ev: AvailabilityEvent) {
        let outcome = self.orch_on_event(&ev);
        self.process_event_outcome(outcome);
    }

    fn process_event_outcome(&mut self, outcome: EventOutcome) {
        self.dispatch_actions(outcome.actions);
        for vf in outcome.value_fetches {
            let Some(node) = self.broker_nodes.get(&vf.provider_broker).cloned() else {
                log::warn!("value fetch for unknown broker {}", vf.provider_broker);
                continue;
            };
            let env = Envelope::new(
                &self.mgmt.clone(),
                &node,
                self.now,
                Message::Query {
                    query_id: vf.query_id,
                    selector: vf.selector,
                },
            );
            self.send(env);
        }
    }

    fn dispatch_actions(&mut self, actions: Vec<OrchestrationAction>) {
        for action in actions {
            let worker_id = action.worker_id().to_string();
            let Some(node) = self.worker_nodes.get(&worker_id).cloned() else {
                log::warn!("action for unknown worker {worker_id}");
                continue;
            };
            if let OrchestrationAction::AddTask { spec, .. } = &action {
                self.task_birth.insert(spec.task_id.clone(), self.now);
            }
            let env = Envelope::new(
                &self.mgmt.clone(),
                &node,
                self.now,
                Message::Action { action },
            );
            self.send(env);
        }
    }

    fn apply_plan(&mut self, plan: MigrationPlan) {
        for pair in &plan.pairs {
            let idx = self.pending_migrations.len();
            self.pending_migrations.push(PendingMigration {
                started_at: self.now,
                running_at: None,
                terminated_at: None,
                done: false,
            });
            self.migration_watch.insert(pair.old_task_id.clone(), idx);
            self.migration_watch.insert(pair.new_task_id.clone(), idx);
        }
        self.dispatch_actions(plan.actions);
    }

    // ---- event handlers ------------------------------------------------

    fn handle(&mut self, ev: SimEvent) {
        match ev {
            SimEvent::DeviceTick(i) => self.handle_device_tick(i),
            SimEvent::Deliver(env) => self.handle_deliver(env),
            SimEvent::TaskReady { node_id, task_id } => self.handle_task_ready(&node_id, &task_id),
            SimEvent::PublishLocal {
                node_id,
                update,
                trace,
            } => {
                if let Some(tr) = &trace {
                    if let Some(&start) = self.trace_starts.get(tr) {
                        self.metrics
                            .record_service(tr, self.now.saturating_sub(start));
                    }
                }
                self.publish_at(&node_id, &update, trace);
            }
            SimEvent::Detach { node_id, entity_id } => self.handle_detach(&node_id, &entity_id),
            SimEvent::NodeBeat { node_id } => self.handle_node_beat(&node_id),
            SimEvent::Sweep => self.handle_sweep(),
            SimEvent::Inject(i) => self.handle_inject(i),
        }
    }

    fn handle_device_tick(&mut self, i: usize) {
        let now = self.now;
        let mode = self.cfg.mode;
        let duration_us = self.cfg.duration_s * 1_000_000;

        // Phase 1: advance the device and build its update.
        let anchors = &self.anchors;
        let d = &mut self.devices[i];
        d.seq += 1;
        if let Some(every) = d.roam_every {
            if d.seq % every == 0 && anchors.len() > 1 {
                d.anchor = (d.anchor + 1) % anchors.len();
            }
        }
        let base = anchors[d.anchor].1;
        let pos = GeoPoint {
            lat: (base.lat + d.lat_off).clamp(-90.0, 90.0),
            lon: (base.lon + d.lon_off).clamp(-180.0, 180.0),
        };
        let device_id = d.id.clone();
        let interval = d.interval_us;

        // Phase 2: mode-specific homing.
        let ingress;
        let mut detach_from = None;
        match mode {
            Mode::Fog => {
                let nearest =
                    nearest_edge(&self.nodes, pos).unwrap_or_else(|| self.mgmt.clone());
                let d = &mut self.devices[i];
                if nearest != d.home_node {
                    detach_from = Some(d.home_node.clone());
                    d.home_node = nearest.clone();
                    d.sent_full = false; // attach with a full snapshot
                }
                ingress = nearest;
            }
            Mode::Edge | Mode::Cloud => {
                ingress = nearest_edge(&self.nodes, pos).unwrap_or_else(|| self.mgmt.clone());
            }
        }

        let d = &mut self.devices[i];
        let full = !d.sent_full || !matches!(mode, Mode::Fog);
        let speed = 20.0 + (d.rng.gen::<f64>() * 110.0 * 100.0).round() / 100.0;
        let mut frame = vec![0u8; d.payload_bytes];
        d.rng.fill(&mut frame[..]);
        let mut update = EntityUpdate::new(&d.id, &d.entity_type)
            .with_attribute(Attribute::new(
                "speed_kmh",
                AttributeValue::Number(speed),
                now,
                &d.id,
            ))
            .with_attribute(Attribute::new(
                "frame",
                AttributeValue::Blob(frame),
                now,
                &d.id,
            ))
            .with_location(pos);
        if full {
            update = update.with_attribute(Attribute::new(
                "model",
                AttributeValue::Text(format!("unit-{}", 1 + (mix_seed(0, &d.id) % 7))),
                now,
                &d.id,
            ));
            update.full = true;
            d.sent_full = true;
        }
        let trace = format!("tr/{}/{}", d.id, d.seq);
        self.trace_starts.insert(trace.clone(), now);

        let env = Envelope::new(&device_id, &ingress, now, Message::Publish { update })
            .with_trace(&trace);
        self.send_from_device(env);

        if let Some(old) = detach_from {
            self.queue.push(
                now + self.cfg.links.device_edge_ms * 1_000,
                SimEvent::Detach {
                    node_id: old,
                    entity_id: device_id,
                },
            );
        }

        let next = now + interval;
        if next < duration_us {
            self.queue.push(next, SimEvent::DeviceTick(i));
        }
    }

    /// Publish an update into a node's broker, emitting the registration
    /// and notifications it produces.
    fn publish_at(&mut self, node_id: &str, update: &EntityUpdate, trace: Option<String>) {
        let now = self.now;
        let outcome = {
            let Some(node) = self.nodes.get_mut(node_id) else {
                log::warn!("publish at unknown node {node_id}");
                return;
            };
            match node.broker.publish(update, now) {
                Ok(o) => o,
                Err(e) => {
                    log::warn!("broker {node_id} refused update for {}: {e}", update.id);
                    return;
                }
            }
        };
        self.metrics.publishes += 1;
        if let Some(reg) = outcome.registration {
            let env = Envelope::new(
                node_id,
                &self.mgmt.clone(),
                now,
                Message::Register { registration: reg },
            );
            self.send(env);
        }
        for (sink, notification) in outcome.notifications {
            let mut env = Envelope::new(
                node_id,
                &sink.node_id,
                now,
                Message::Notify {
                    channel: sink.channel,
                    notification,
                },
            );
            if let Some(tr) = &trace {
                env = env.with_trace(tr);
            }
            self.send(env);
        }
    }

    fn handle_deliver(&mut self, env: Envelope) {
        let Envelope {
            src, dst, trace, msg, ..
        } = env;
        match msg {
            Message::Publish { update } => {
                // Data follows the entity's home broker; the ingress node
                // relays when it is not the home.
                if let Some(&di) = self.device_index.get(&update.id) {
                    let home = self.devices[di].home_node.clone();
                    if home != dst {
                        let mut fwd =
                            Envelope::new(&dst, &home, self.now, Message::Publish { update });
                        if let Some(tr) = &trace {
                            fwd = fwd.with_trace(tr);
                        }
                        self.send(fwd);
                        return;
                    }
                }
                self.publish_at(&dst, &update, trace);
            }
            Message::Query { query_id, selector } => {
                let entities = match self.nodes.get(&dst) {
                    Some(node) => node.broker.query(&selector),
                    None => Vec::new(),
                };
                let env = Envelope::new(
                    &dst,
                    &src,
                    self.now,
                    Message::QueryResp { query_id, entities },
                );
                self.send(env);
            }
            Message::QueryResp { query_id, entities } => {
                let outcome = self
                    .orchestrator
                    .on_value_fetched(&query_id, &entities, self.now);
                self.process_event_outcome(outcome);
            }
            Message::Subscribe {
                sub_id,
                selector,
                sink,
            } => {
                let initial = match self.nodes.get_mut(&dst) {
                    Some(node) => {
                        node.broker
                            .subscribe(Some(sub_id), selector, sink, self.now)
                            .1
                    }
                    None => None,
                };
                if let Some((sink, notification)) = initial {
                    let env = Envelope::new(
                        &dst,
                        &sink.node_id,
                        self.now,
                        Message::Notify {
                            channel: sink.channel,
                            notification,
                        },
                    );
                    self.send(env);
                }
            }
            Message::Unsubscribe { sub_id } => {
                if let Some(node) = self.nodes.get_mut(&dst) {
                    // Late unsubscribes for purged subscriptions are normal.
                    let _ = node.broker.unsubscribe(&sub_id);
                }
            }
            Message::Notify {
                channel,
                notification,
            } => {
                self.metrics.notifications += 1;
                let outputs = {
                    let Some(node) = self.nodes.get_mut(&dst) else {
                        self.metrics.dropped_notifications += 1;
                        return;
                    };
                    let Some(worker) = node.worker.as_mut() else {
                        self.metrics.dropped_notifications += 1;
                        return;
                    };
                    let mut host = BrokerHost {
                        broker: &mut node.broker,
                    };
                    worker
                        .deliver(&channel, &notification, self.now, &mut host)
                        .outputs
                };
                for (at, update) in outputs {
                    self.queue.push(
                        at,
                        SimEvent::PublishLocal {
                            node_id: dst.clone(),
                            update,
                            trace: trace.clone(),
                        },
                    );
                }
            }
            Message::Register { registration } => {
                let provider = registration.provider_broker.clone();
                let outcome = self.discovery.register(registration);
                // A provider talking to us vouches for everything it hosts.
                self.discovery.refresh_provider(&provider, self.now);
                for ev in outcome.events {
                    self.handle_avail_event(ev);
                }
                if let Some(change) = outcome.change {
                    let plan = self.orchestrator.plan_migration(&MigrationTrigger::ProducerMoved {
                        entity_id: change.entity_id,
                        new_geohash: change.new_geohash,
                        new_provider: Some(change.new_provider),
                    });
                    self.apply_plan(plan);
                }
            }
            Message::Deregister {
                entity_id,
                provider_broker,
            } => match self.discovery.deregister(&entity_id, &provider_broker) {
                Ok(events) => {
                    for ev in events {
                        self.handle_avail_event(ev);
                    }
                }
                Err(e) => log::debug!("late deregister for {entity_id}: {e}"),
            },
            Message::SubAvail { subscription } => {
                let events = self.discovery.subscribe_availability(subscription);
                for ev in events {
                    self.handle_avail_event(ev);
                }
            }
            Message::UnsubAvail { sub_id } => {
                let _ = self.discovery.unsubscribe_availability(&sub_id);
            }
            Message::AvailEvent { event } => self.handle_avail_event(event),
            Message::QueryAvail { query_id, selector } => {
                let registrations = self.discovery.query_availability(&selector);
                let env = Envelope::new(
                    &dst,
                    &src,
                    self.now,
                    Message::QueryAvailResp {
                        query_id,
                        registrations,
                    },
                );
                self.send(env);
            }
            Message::QueryAvailResp { .. } => {}
            Message::RegFunc { function } => {
                if let Err(e) = self.register_function(function) {
                    log::warn!("function registration failed: {e}");
                }
            }
            Message::Action { action } => self.handle_action(&dst, action),
            Message::TaskReport { report } => self.handle_task_report(report),
            Message::Heartbeat { record } => {
                let worker_id = record.worker_id.clone();
                let outcome = self.orchestrator.on_worker_heartbeat(record, self.now);
                if outcome.new_worker {
                    let plan = self
                        .orchestrator
                        .plan_migration(&MigrationTrigger::NodeJoined { worker_id });
                    self.apply_plan(plan);
                }
                if let Some(plan) = outcome.plan {
                    self.apply_plan(plan);
                }
                self.dispatch_actions(outcome.placements);
            }
            Message::DumpState => {
                let env = Envelope::new(
                    &dst,
                    &src,
                    self.now,
                    Message::DumpStateResp {
                        state: self.orchestrator.deployment_state(),
                    },
                );
                self.send(env);
            }
            Message::DumpStateResp { .. } => {}
        }
    }

    fn handle_action(&mut self, node_id: &str, action: OrchestrationAction) {
        let task_ready = match &action {
            OrchestrationAction::AddTask { spec, .. } => Some(spec.task_id.clone()),
            _ => None,
        };
        let out = {
            let Some(node) = self.nodes.get_mut(node_id) else {
                log::warn!("action for unknown node {node_id}");
                return;
            };
            let Some(worker) = node.worker.as_mut() else {
                log::debug!("action dropped, worker at {node_id} is down");
                return;
            };
            match worker.execute(&action, self.now) {
                Ok(out) => out,
                Err(e) => {
                    log::warn!("worker at {node_id} rejected action: {e}");
                    return;
                }
            }
        };
        for sc in out.subscribes {
            let Some(broker_node) = self.broker_nodes.get(&sc.broker).cloned() else {
                log::warn!("subscribe to unknown broker {}", sc.broker);
                continue;
            };
            let env = Envelope::new(
                node_id,
                &broker_node,
                self.now,
                Message::Subscribe {
                    sub_id: sc.sub_id,
                    selector: sc.selector,
                    sink: sc.sink,
                },
            );
            self.send(env);
        }
        for uc in out.unsubscribes {
            let Some(broker_node) = self.broker_nodes.get(&uc.broker).cloned() else {
                continue;
            };
            let env = Envelope::new(
                node_id,
                &broker_node,
                self.now,
                Message::Unsubscribe { sub_id: uc.sub_id },
            );
            self.send(env);
        }
        if let Some(report) = out.report {
            let env = Envelope::new(
                node_id,
                &self.mgmt.clone(),
                report.at,
                Message::TaskReport { report },
            );
            self.send(env);
        }
        if let (Some(ready_at), Some(task_id)) = (out.ready_at, task_ready) {
            self.queue.push(
                ready_at,
                SimEvent::TaskReady {
                    node_id: node_id.to_string(),
                    task_id,
                },
            );
        }
    }

    fn handle_task_ready(&mut self, node_id: &str, task_id: &str) {
        let activated = {
            let Some(node) = self.nodes.get_mut(node_id) else {
                return;
            };
            let Some(worker) = node.worker.as_mut() else {
                return;
            };
            let mut host = BrokerHost {
                broker: &mut node.broker,
            };
            worker.activate_task(task_id, self.now, &mut host)
        };
        let Some(outcome) = activated else { return };
        let env = Envelope::new(
            node_id,
            &self.mgmt.clone(),
            outcome.report.at,
            Message::TaskReport {
                report: outcome.report,
            },
        );
        self.send(env);
        for (at, update) in outcome.outputs {
            self.queue.push(
                at,
                SimEvent::PublishLocal {
                    node_id: node_id.to_string(),
                    update,
                    // Queued pre-activation notifications lose their traces.
                    trace: None,
                },
            );
        }
    }

    fn handle_task_report(&mut self, report: crate::worker::TaskReport) {
        match report.state {
            TaskState::Running => {
                self.metrics.tasks_launched += 1;
                if let Some(birth) = self.task_birth.remove(&report.task_id) {
                    self.metrics
                        .record_startup(report.at.saturating_sub(birth));
                }
            }
            TaskState::Terminated => self.metrics.tasks_terminated += 1,
            TaskState::Rejected => {
                self.metrics.tasks_rejected += 1;
                self.task_birth.remove(&report.task_id);
            }
            _ => {}
        }
        if let Some(&idx) = self.migration_watch.get(&report.task_id) {
            let pm = &mut self.pending_migrations[idx];
            match report.state {
                TaskState::Running => pm.running_at = Some(report.at),
                TaskState::Terminated => pm.terminated_at = Some(report.at),
                TaskState::Rejected => pm.done = true,
                _ => {}
            }
            if !pm.done {
                if let (Some(r), Some(t)) = (pm.running_at, pm.terminated_at) {
                    let sample = r.max(t).saturating_sub(pm.started_at);
                    pm.done = true;
                    self.metrics.record_migration(sample);
                }
            }
        }
        self.orchestrator.on_task_report(&report);
    }

    fn handle_detach(&mut self, node_id: &str, entity_id: &str) {
        let dereg = self
            .nodes
            .get_mut(node_id)
            .and_then(|n| n.broker.remove_entity(entity_id));
        if let Some((entity_id, provider_broker)) = dereg {
            let env = Envelope::new(
                node_id,
                &self.mgmt.clone(),
                self.now,
                Message::Deregister {
                    entity_id,
                    provider_broker,
                },
            );
            self.send(env);
        }
    }

    /// Per-node heartbeat: the broker re-vouches for its registrations and
    /// the worker (if alive) reports load to the orchestrator.
    fn handle_node_beat(&mut self, node_id: &str) {
        let now = self.now;
        let (resource_reg, heartbeat) = {
            let Some(node) = self.nodes.get(node_id) else {
                return;
            };
            let reg = AvailabilityRegistration {
                entity_id: format!("resource:{node_id}"),
                entity_type: "NodeResource".into(),
                attribute_names: ["capacity", "load"]
                    .iter()
                    .map(|s| s.to_string())
                    .collect(),
                provider_broker: node.broker.broker_id.clone(),
                geohash: node.geohash.clone(),
                registered_at: now,
                ttl_s: self.cfg.registration_ttl_s,
            };
            (reg, node.worker.as_ref().map(|w| w.heartbeat(now)))
        };
        let env = Envelope::new(
            node_id,
            &self.mgmt.clone(),
            now,
            Message::Register {
                registration: resource_reg,
            },
        );
        self.send(env);
        if let Some(record) = heartbeat {
            let env = Envelope::new(
                node_id,
                &self.mgmt.clone(),
                now,
                Message::Heartbeat { record },
            );
            self.send(env);
        }
        let next = now + self.cfg.heartbeat_interval_ms * 1_000;
        if next <= self.cfg.duration_s * 1_000_000 {
            self.queue.push(
                next,
                SimEvent::NodeBeat {
                    node_id: node_id.to_string(),
                },
            );
        }
    }

    fn handle_sweep(&mut self) {
        let now = self.now;
        let expired = self.discovery.sweep_expired(now);
        for ev in expired {
            self.handle_avail_event(ev);
        }
        let liveness = self.orchestrator.check_liveness(now);
        for worker_id in &liveness.dead_workers {
            if let Some(node_id) = self.worker_nodes.remove(worker_id) {
                if let Some(node) = self.nodes.get_mut(&node_id) {
                    node.worker = None;
                }
                for node in self.nodes.values_mut() {
                    node.broker.purge_sinks_at(&node_id);
                }
            }
        }
        self.dispatch_actions(liveness.actions);
        let next = now + self.cfg.sweep_interval_ms * 1_000;
        if next <= self.cfg.duration_s * 1_000_000 {
            self.queue.push(next, SimEvent::Sweep);
        }
    }

    fn handle_inject(&mut self, i: usize) {
        let inj = self.cfg.injections[i].clone();
        match inj {
            Injection::NodeJoined { node, .. } => {
                if self.nodes.contains_key(&node.node_id) {
                    log::warn!("joined node {} already exists", node.node_id);
                    return;
                }
                if let Err(e) = self.add_node(&node) {
                    log::warn!("node join failed: {e}");
                    return;
                }
                self.queue.push(
                    self.now,
                    SimEvent::NodeBeat {
                        node_id: node.node_id,
                    },
                );
            }
            Injection::NodeFailed { node_id, .. } => {
                if let Some(node) = self.nodes.get_mut(&node_id) {
                    node.worker = None;
                }
            }
            Injection::OverloadBurst {
                node_id, capacity, ..
            } => {
                if let Some(worker) = self
                    .nodes
                    .get_mut(&node_id)
                    .and_then(|n| n.worker.as_mut())
                {
                    worker.capacity = capacity;
                }
            }
        }
    }
}
