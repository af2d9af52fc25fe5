//! Availability-driven task orchestration.
//!
//! The orchestrator is a single logical decision loop. It consumes
//! availability events, worker heartbeats and task reports, and emits
//! orchestration actions (AddTask, RemoveTask, AddInput, RemoveInput)
//! addressed to workers. Decisions read and write only the deployment
//! state: entity values never enter this module, so decision time does not
//! depend on payload sizes.
//!
//! Placement is locality first: the edge worker sharing the longest
//! geohash prefix with the task's producer wins, capacity overflow goes to
//! the cloud, and nothing is placed twice for the same (function, group
//! key). Migration is a paired RemoveTask plus AddTask dispatched together
//! so the two run in parallel on their workers.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::context::{common_prefix_len, AttributeValue, LogicalTime, Selector};
use crate::discovery::{
    AvailabilityEvent, AvailabilityKind, AvailabilityRegistration, AvailabilitySubscription,
};
use crate::error::FogError;
use crate::function::{
    availability_selector, entity_selector, group_key, validate, FogFunction, GroupBy, Slo,
};
use crate::message::NotificationSink;
use crate::operator::OperatorRegistry;
use crate::worker::{TaskInput, TaskReport, TaskSpec, TaskState};

/// What the orchestrator knows about one worker, refreshed by heartbeats.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WorkerRecord {
    pub worker_id: String,
    pub node_id: String,
    pub geohash: String,
    pub is_cloud: bool,
    pub capacity: u32,
    pub load: u32,
    pub last_heartbeat: LogicalTime,
}

/// One deployed (or deploying) task instance.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TaskInstance {
    pub task_id: String,
    pub function: String,
    pub group_key: String,
    pub worker_id: String,
    pub inputs: Vec<TaskInput>,
    pub state: TaskState,
}

/// The four basic orchestration actions, each addressed to one worker.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "op", rename_all = "snake_case")]
pub enum OrchestrationAction {
    AddTask { worker_id: String, spec: TaskSpec },
    RemoveTask { worker_id: String, task_id: String },
    AddInput {
        worker_id: String,
        task_id: String,
        input: TaskInput,
    },
    RemoveInput {
        worker_id: String,
        task_id: String,
        selector: Selector,
    },
}

impl OrchestrationAction {
    pub fn worker_id(&self) -> &str {
        match self {
            OrchestrationAction::AddTask { worker_id, .. }
            | OrchestrationAction::RemoveTask { worker_id, .. }
            | OrchestrationAction::AddInput { worker_id, .. }
            | OrchestrationAction::RemoveInput { worker_id, .. } => worker_id,
        }
    }
}

/// Full decision-loop state, serializable for the DUMP_STATE endpoint.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DeploymentState {
    pub functions: BTreeMap<String, BTreeMap<String, TaskInstance>>,
    pub workers: BTreeMap<String, WorkerRecord>,
}

impl DeploymentState {
    /// Order-independent digest of where every task sits and what feeds it.
    /// Task ids and timestamps are allocation artifacts and stay out.
    pub fn placement_fingerprint(&self) -> String {
        let mut lines = Vec::new();
        for (fn_name, by_key) in &self.functions {
            for (key, inst) in by_key {
                let inputs: Vec<String> = inst
                    .inputs
                    .iter()
                    .map(|i| format!("{}:{}@{}", i.input_index, i.entity_id, i.provider_broker))
                    .collect();
                lines.push(format!(
                    "{fn_name}|{key}|{}|{}",
                    inst.worker_id,
                    inputs.join(",")
                ));
            }
        }
        lines.sort();
        lines.join("\n")
    }
}

/// Why a migration plan is being drawn up.
#[derive(Debug, Clone, PartialEq)]
pub enum MigrationTrigger {
    /// A new edge worker appeared; cloud-hosted tasks with a nearer
    /// producer move down to it.
    NodeJoined { worker_id: String },
    /// A worker reports more load than capacity; lowest-priority tasks
    /// move to the cloud until it fits.
    WorkerOverloaded { worker_id: String },
    /// A producer entity re-homed or changed cell; its tasks follow if a
    /// strictly closer edge exists.
    ProducerMoved {
        entity_id: String,
        new_geohash: String,
        new_provider: Option<String>,
    },
}

/// One Remove/Add pair; both actions are dispatched in the same batch so
/// the workers execute them in parallel.
#[derive(Debug, Clone, PartialEq)]
pub struct MigrationPair {
    pub function: String,
    pub group_key: String,
    pub old_task_id: String,
    pub new_task_id: String,
    pub from_worker: String,
    pub to_worker: String,
}

#[derive(Debug, Default)]
pub struct MigrationPlan {
    pub actions: Vec<OrchestrationAction>,
    pub pairs: Vec<MigrationPair>,
}

/// A broker query the caller must run to learn a keying attribute value.
#[derive(Debug, Clone, PartialEq)]
pub struct ValueFetch {
    pub query_id: String,
    pub provider_broker: String,
    pub selector: Selector,
}

#[derive(Debug, Default)]
pub struct EventOutcome {
    pub actions: Vec<OrchestrationAction>,
    pub value_fetches: Vec<ValueFetch>,
}

#[derive(Debug, Default)]
pub struct HeartbeatOutcome {
    pub new_worker: bool,
    pub plan: Option<MigrationPlan>,
    /// Deferred placements that found a worker this round.
    pub placements: Vec<OrchestrationAction>,
}

#[derive(Debug, Default)]
pub struct LivenessOutcome {
    pub dead_workers: Vec<String>,
    pub actions: Vec<OrchestrationAction>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PlacementPolicy {
    /// Longest-common-geohash-prefix edge worker, overflow to cloud.
    Locality,
    /// Everything runs on the cloud worker.
    CloudOnly,
}

#[derive(Debug, Clone)]
pub struct OrchestratorConfig {
    pub policy: PlacementPolicy,
    pub migration_enabled: bool,
    /// Subscribe task inputs with the declared attribute projection. When
    /// off, inputs subscribe to whole entities.
    pub project_inputs: bool,
    pub heartbeat_interval_ms: u64,
    /// Where availability events for this orchestrator get delivered.
    pub sink: NotificationSink,
}

impl Default for OrchestratorConfig {
    fn default() -> Self {
        OrchestratorConfig {
            policy: PlacementPolicy::Locality,
            migration_enabled: true,
            project_inputs: true,
            heartbeat_interval_ms: 10_000,
            sink: NotificationSink {
                node_id: "cloud".into(),
                channel: "orchestrator".into(),
            },
        }
    }
}

/// How one available entity routes for one (function, input) slot.
#[derive(Debug, Clone, PartialEq)]
enum PresenceKey {
    Keyed(String),
    /// Attaches to every task of the function (non-first PerEntityType
    /// inputs: reference data shared by all groups).
    Broadcast,
}

#[derive(Debug, Clone)]
struct Presence {
    key: PresenceKey,
    geohash: String,
    provider: String,
}

#[derive(Debug)]
struct PendingFetch {
    function: String,
    input_index: usize,
    registration: AvailabilityRegistration,
}

#[derive(Debug)]
struct DeferredTask {
    function: String,
    group_key: String,
    inputs: Vec<TaskInput>,
}

#[derive(Debug)]
pub struct Orchestrator {
    config: OrchestratorConfig,
    registry: OperatorRegistry,
    functions: BTreeMap<String, FogFunction>,
    workers: BTreeMap<String, WorkerRecord>,
    tasks: BTreeMap<String, TaskInstance>,
    by_key: BTreeMap<(String, String), String>,
    /// availability sub id -> (function, input index)
    subs: BTreeMap<String, (String, usize)>,
    /// (function, input index) -> entity id -> presence
    presence: BTreeMap<(String, usize), BTreeMap<String, Presence>>,
    pending_fetches: BTreeMap<String, PendingFetch>,
    /// (function, group key) -> inputs waiting for a worker
    deferred: BTreeMap<(String, String), DeferredTask>,
    dropped_events: u64,
    next_task: u64,
    next_query: u64,
}

impl Orchestrator {
    pub fn new(config: OrchestratorConfig, registry: OperatorRegistry) -> Self {
        Orchestrator {
            config,
            registry,
            functions: BTreeMap::new(),
            workers: BTreeMap::new(),
            tasks: BTreeMap::new(),
            by_key: BTreeMap::new(),
            subs: BTreeMap::new(),
            presence: BTreeMap::new(),
            pending_fetches: BTreeMap::new(),
            deferred: BTreeMap::new(),
            dropped_events: 0,
            next_task: 0,
            next_query: 0,
        }
    }

    pub fn function(&self, name: &str) -> Option<&FogFunction> {
        self.functions.get(name)
    }

    pub fn worker(&self, id: &str) -> Option<&WorkerRecord> {
        self.workers.get(id)
    }

    pub fn task_count(&self) -> usize {
        self.tasks.len()
    }

    pub fn deferred_count(&self) -> usize {
        self.deferred.len()
    }

    pub fn dropped_events(&self) -> u64 {
        self.dropped_events
    }

    pub fn deployment_state(&self) -> DeploymentState {
        let mut functions: BTreeMap<String, BTreeMap<String, TaskInstance>> = BTreeMap::new();
        for inst in self.tasks.values() {
            functions
                .entry(inst.function.clone())
                .or_default()
                .insert(inst.group_key.clone(), inst.clone());
        }
        DeploymentState {
            functions,
            workers: self.workers.clone(),
        }
    }

    /// Register a fog function and return the availability subscriptions
    /// the caller must install at Discovery, one per input selector.
    pub fn register_function(
        &mut self,
        f: FogFunction,
    ) -> Result<Vec<AvailabilitySubscription>, FogError> {
        if self.functions.contains_key(&f.name) {
            return Err(FogError::DuplicateFunction(f.name));
        }
        let diagnostics = validate(&f, &self.registry);
        if !diagnostics.is_empty() {
            return Err(FogError::InvalidFunction {
                name: f.name,
                diagnostics,
            });
        }
        let mut subs = Vec::new();
        for (idx, input) in f.inputs.iter().enumerate() {
            let sub_id = format!("af/{}/{}", f.name, idx);
            let selector = availability_selector(&f, input);
            self.subs.insert(sub_id.clone(), (f.name.clone(), idx));
            subs.push(AvailabilitySubscription {
                sub_id,
                selector,
                sink: self.config.sink.clone(),
            });
        }
        self.functions.insert(f.name.clone(), f);
        Ok(subs)
    }

    /// React to one availability event. Appear may require a value fetch
    /// first (attribute-value keying); everything else resolves to actions
    /// immediately.
    pub fn on_event(&mut self, ev: &AvailabilityEvent, now: LogicalTime) -> EventOutcome {
        let mut outcome = EventOutcome::default();
        let Some((fn_name, idx)) = self.subs.get(&ev.sub_id).cloned() else {
            log::warn!("availability event for unknown subscription {}", ev.sub_id);
            self.dropped_events += 1;
            return outcome;
        };
        let f = self.functions.get(&fn_name).expect("subs track functions").clone();
        let input = &f.inputs[idx];
        match ev.kind {
            AvailabilityKind::Appear => {
                let reg = &ev.registration;
                let need_value = matches!(input.group_by, GroupBy::PerAttributeValue { .. });
                if need_value {
                    let GroupBy::PerAttributeValue { attribute } = &input.group_by else {
                        unreachable!()
                    };
                    self.next_query += 1;
                    let query_id = format!("q-{:06}", self.next_query);
                    let mut selector = Selector::for_type(&reg.entity_type)
                        .with_id(&reg.entity_id)
                        .with_attributes(&[attribute.as_str()]);
                    selector.constraints.clear();
                    self.pending_fetches.insert(
                        query_id.clone(),
                        PendingFetch {
                            function: fn_name,
                            input_index: idx,
                            registration: reg.clone(),
                        },
                    );
                    outcome.value_fetches.push(ValueFetch {
                        query_id,
                        provider_broker: reg.provider_broker.clone(),
                        selector,
                    });
                } else {
                    let key = match &input.group_by {
                        GroupBy::PerEntityId => PresenceKey::Keyed(reg.entity_id.clone()),
                        GroupBy::PerEntityType if idx == 0 => {
                            PresenceKey::Keyed(reg.entity_type.clone())
                        }
                        GroupBy::PerEntityType => PresenceKey::Broadcast,
                        GroupBy::PerAttributeValue { .. } => unreachable!("fetched above"),
                    };
                    let actions = self.integrate_appear(
                        &f,
                        idx,
                        &reg.entity_id,
                        key,
                        &reg.geohash,
                        &reg.provider_broker,
                        now,
                    );
                    outcome.actions.extend(actions);
                }
            }
            AvailabilityKind::Disappear => {
                outcome
                    .actions
                    .extend(self.integrate_disappear(&f, idx, &ev.registration.entity_id));
            }
        }
        outcome
    }

    /// Complete an Appear whose group key needed a broker round trip.
    pub fn on_value_fetched(
        &mut self,
        query_id: &str,
        entities: &[crate::context::ContextEntity],
        now: LogicalTime,
    ) -> EventOutcome {
        let mut outcome = EventOutcome::default();
        let Some(pending) = self.pending_fetches.remove(query_id) else {
            // Disappear won the race, or a duplicate response.
            return outcome;
        };
        let f = match self.functions.get(&pending.function) {
            Some(f) => f.clone(),
            None => return outcome,
        };
        let reg = &pending.registration;
        let GroupBy::PerAttributeValue { attribute } = &f.inputs[pending.input_index].group_by
        else {
            return outcome;
        };
        let value: Option<AttributeValue> = entities
            .iter()
            .find(|e| e.id == reg.entity_id)
            .and_then(|e| e.attributes.get(attribute))
            .map(|a| a.value.clone());
        let Some(value) = value else {
            log::warn!(
                "keying attribute {attribute} missing on {}; event dropped",
                reg.entity_id
            );
            self.dropped_events += 1;
            return outcome;
        };
        let key = group_key(&f, pending.input_index, reg, Some(&value))
            .expect("hint provided")
            .key;
        let actions = self.integrate_appear(
            &f,
            pending.input_index,
            &reg.entity_id,
            PresenceKey::Keyed(key),
            &reg.geohash,
            &reg.provider_broker,
            now,
        );
        outcome.actions.extend(actions);
        outcome
    }

    fn make_input(&self, f: &FogFunction, idx: usize, entity_id: &str, provider: &str) -> TaskInput {
        let mut selector = entity_selector(f, &f.inputs[idx], entity_id);
        if !self.config.project_inputs {
            selector.attribute_set.clear();
        }
        TaskInput {
            input_index: idx,
            entity_id: entity_id.to_string(),
            selector,
            provider_broker: provider.to_string(),
        }
    }

    fn alloc_task_id(&mut self) -> String {
        self.next_task += 1;
        format!("t-{:06}", self.next_task)
    }

    /// True when an entity keyed `entity_key` on a non-first input belongs
    /// to the task grouped under `task_key`.
    fn key_compatible(entity_key: &PresenceKey, task_key: &str) -> bool {
        match entity_key {
            PresenceKey::Broadcast => true,
            PresenceKey::Keyed(k) => k == task_key,
        }
    }

    fn integrate_appear(
        &mut self,
        f: &FogFunction,
        idx: usize,
        entity_id: &str,
        key: PresenceKey,
        geohash: &str,
        provider: &str,
        now: LogicalTime,
    ) -> Vec<OrchestrationAction> {
        let slot = self
            .presence
            .entry((f.name.clone(), idx))
            .or_default();
        if slot.contains_key(entity_id) {
            // Duplicate appear (stale retry): idempotent.
            return Vec::new();
        }
        slot.insert(
            entity_id.to_string(),
            Presence {
                key: key.clone(),
                geohash: geohash.to_string(),
                provider: provider.to_string(),
            },
        );
        let input = self.make_input(f, idx, entity_id, provider);
        let mut actions = Vec::new();
        if idx == 0 {
            let PresenceKey::Keyed(task_key) = key else {
                unreachable!("first input is always keyed")
            };
            let slot_key = (f.name.clone(), task_key.clone());
            if let Some(task_id) = self.by_key.get(&slot_key).cloned() {
                let inst = self.tasks.get_mut(&task_id).expect("by_key tracks tasks");
                inst.inputs.push(input.clone());
                inst.inputs.sort_by(|a, b| {
                    (a.input_index, &a.entity_id).cmp(&(b.input_index, &b.entity_id))
                });
                actions.push(OrchestrationAction::AddInput {
                    worker_id: inst.worker_id.clone(),
                    task_id,
                    input,
                });
            } else if let Some(def) = self.deferred.get_mut(&slot_key) {
                def.inputs.push(input);
                def.inputs.sort_by(|a, b| {
                    (a.input_index, &a.entity_id).cmp(&(b.input_index, &b.entity_id))
                });
            } else {
                // New group: assemble the spec from this entity plus every
                // compatible entity already present on the other inputs.
                let mut inputs = vec![input];
                for (other_idx, _) in f.inputs.iter().enumerate().skip(1) {
                    if let Some(others) = self.presence.get(&(f.name.clone(), other_idx)) {
                        for (other_id, p) in others {
                            if Self::key_compatible(&p.key, &task_key) {
                                inputs.push(self.make_input(f, other_idx, other_id, &p.provider));
                            }
                        }
                    }
                }
                inputs.sort_by(|a, b| {
                    (a.input_index, &a.entity_id).cmp(&(b.input_index, &b.entity_id))
                });
                actions.extend(self.place_task(f, &task_key, inputs, now));
            }
            if self.config.migration_enabled {
                actions.extend(self.reconcile_placement(&f.name, |a| {
                    matches!(a, (fn_name, k) if *fn_name == f.name && *k == task_key)
                }));
            }
        } else {
            // Non-first input: attach to every compatible live task, and to
            // deferred specs so late placements carry it too.
            let attachments: Vec<(String, String)> = self
                .by_key
                .iter()
                .filter(|((fn_name, task_key), _)| {
                    *fn_name == f.name && Self::key_compatible(&key, task_key)
                })
                .map(|((_, task_key), task_id)| (task_key.clone(), task_id.clone()))
                .collect();
            for (_, task_id) in attachments {
                let inst = self.tasks.get_mut(&task_id).expect("by_key tracks tasks");
                if inst.state == TaskState::Terminating {
                    continue;
                }
                inst.inputs.push(input.clone());
                inst.inputs.sort_by(|a, b| {
                    (a.input_index, &a.entity_id).cmp(&(b.input_index, &b.entity_id))
                });
                actions.push(OrchestrationAction::AddInput {
                    worker_id: inst.worker_id.clone(),
                    task_id,
                    input: input.clone(),
                });
            }
            for ((fn_name, task_key), def) in self.deferred.iter_mut() {
                if *fn_name == f.name && Self::key_compatible(&key, task_key) {
                    def.inputs.push(input.clone());
                    def.inputs.sort_by(|a, b| {
                        (a.input_index, &a.entity_id).cmp(&(b.input_index, &b.entity_id))
                    });
                }
            }
        }
        actions
    }

    fn integrate_disappear(
        &mut self,
        f: &FogFunction,
        idx: usize,
        entity_id: &str,
    ) -> Vec<OrchestrationAction> {
        let slot_id = (f.name.clone(), idx);
        let presence = match self.presence.get_mut(&slot_id).and_then(|s| s.remove(entity_id)) {
            Some(p) => p,
            None => {
                // The appear is still waiting on its value fetch: cancel it.
                let stale: Vec<String> = self
                    .pending_fetches
                    .iter()
                    .filter(|(_, p)| {
                        p.function == f.name
                            && p.input_index == idx
                            && p.registration.entity_id == entity_id
                    })
                    .map(|(q, _)| q.clone())
                    .collect();
                for q in stale {
                    self.pending_fetches.remove(&q);
                }
                return Vec::new();
            }
        };
        let mut actions = Vec::new();
        if idx == 0 {
            let PresenceKey::Keyed(task_key) = presence.key else {
                unreachable!("first input is always keyed")
            };
            let slot_key = (f.name.clone(), task_key.clone());
            if let Some(task_id) = self.by_key.get(&slot_key).cloned() {
                let inst = self.tasks.get_mut(&task_id).expect("by_key tracks tasks");
                let remaining_first = inst
                    .inputs
                    .iter()
                    .filter(|i| i.input_index == 0 && i.entity_id != entity_id)
                    .count();
                if remaining_first > 0 {
                    if let Some(pos) = inst
                        .inputs
                        .iter()
                        .position(|i| i.input_index == 0 && i.entity_id == entity_id)
                    {
                        let removed = inst.inputs.remove(pos);
                        actions.push(OrchestrationAction::RemoveInput {
                            worker_id: inst.worker_id.clone(),
                            task_id,
                            selector: removed.selector,
                        });
                    }
                    if self.config.migration_enabled {
                        actions.extend(self.reconcile_placement(&f.name, |a| {
                            matches!(a, (fn_name, k) if *fn_name == f.name && *k == task_key)
                        }));
                    }
                } else {
                    // Last first-selector input: the task's trigger is gone.
                    inst.state = TaskState::Terminating;
                    let worker_id = inst.worker_id.clone();
                    self.by_key.remove(&slot_key);
                    actions.push(OrchestrationAction::RemoveTask { worker_id, task_id });
                }
            } else if let Some(def) = self.deferred.get_mut(&slot_key) {
                def.inputs
                    .retain(|i| !(i.input_index == 0 && i.entity_id == entity_id));
                if !def.inputs.iter().any(|i| i.input_index == 0) {
                    self.deferred.remove(&slot_key);
                }
            }
        } else {
            let task_ids: Vec<String> = self
                .tasks
                .values()
                .filter(|t| t.function == f.name)
                .map(|t| t.task_id.clone())
                .collect();
            for task_id in task_ids {
                let inst = self.tasks.get_mut(&task_id).expect("listed above");
                if inst.state == TaskState::Terminating {
                    continue;
                }
                if let Some(pos) = inst
                    .inputs
                    .iter()
                    .position(|i| i.input_index == idx && i.entity_id == entity_id)
                {
                    let removed = inst.inputs.remove(pos);
                    actions.push(OrchestrationAction::RemoveInput {
                        worker_id: inst.worker_id.clone(),
                        task_id,
                        selector: removed.selector,
                    });
                }
            }
            for def in self.deferred.values_mut() {
                def.inputs
                    .retain(|i| !(i.input_index == idx && i.entity_id == entity_id));
            }
        }
        actions
    }

    /// Tasks assigned to a worker in this table (any state still occupying
    /// a slot).
    fn assigned_load(&self, worker_id: &str) -> u32 {
        self.tasks
            .values()
            .filter(|t| t.worker_id == worker_id)
            .count() as u32
    }

    /// Load that will remain once in-flight terminations finish.
    fn live_load(&self, worker_id: &str) -> u32 {
        self.tasks
            .values()
            .filter(|t| t.worker_id == worker_id && t.state != TaskState::Terminating)
            .count() as u32
    }

    fn has_capacity(&self, w: &WorkerRecord) -> bool {
        self.assigned_load(&w.worker_id) < w.capacity
    }

    /// Deterministic worker choice. All declared SLOs currently steer the
    /// same locality rule; the parameter fixes the call shape.
    pub fn select_worker(&self, producer_geohash: &str, _slo: &Slo) -> Option<String> {
        match self.config.policy {
            PlacementPolicy::CloudOnly => self
                .workers
                .values()
                .filter(|w| w.is_cloud && self.has_capacity(w))
                .map(|w| w.worker_id.clone())
                .next(),
            PlacementPolicy::Locality => {
                let best_edge = self
                    .workers
                    .values()
                    .filter(|w| !w.is_cloud && self.has_capacity(w))
                    .map(|w| {
                        (
                            common_prefix_len(&w.geohash, producer_geohash),
                            w,
                        )
                    })
                    .max_by(|(pa, wa), (pb, wb)| {
                        // Longest prefix wins; ties prefer the lower load,
                        // then the lexicographically smaller id.
                        pa.cmp(pb)
                            .then_with(|| {
                                self.assigned_load(&wb.worker_id)
                                    .cmp(&self.assigned_load(&wa.worker_id))
                            })
                            .then_with(|| wb.worker_id.cmp(&wa.worker_id))
                    })
                    .map(|(_, w)| w.worker_id.clone());
                best_edge.or_else(|| {
                    self.workers
                        .values()
                        .filter(|w| w.is_cloud && self.has_capacity(w))
                        .map(|w| w.worker_id.clone())
                        .next()
                })
            }
        }
    }

    /// The placement anchor of a task: the cell of its smallest
    /// first-selector entity id. Independent of event arrival order.
    fn anchor_geohash(&self, inst: &TaskInstance) -> String {
        let anchor = inst
            .inputs
            .iter()
            .filter(|i| i.input_index == 0)
            .map(|i| i.entity_id.clone())
            .min();
        anchor
            .and_then(|id| {
                self.presence
                    .get(&(inst.function.clone(), 0))
                    .and_then(|s| s.get(&id))
                    .map(|p| p.geohash.clone())
            })
            .unwrap_or_default()
    }

    fn place_task(
        &mut self,
        f: &FogFunction,
        task_key: &str,
        inputs: Vec<TaskInput>,
        _now: LogicalTime,
    ) -> Vec<OrchestrationAction> {
        let anchor = inputs
            .iter()
            .filter(|i| i.input_index == 0)
            .map(|i| i.entity_id.clone())
            .min()
            .and_then(|id| {
                self.presence
                    .get(&(f.name.clone(), 0))
                    .and_then(|s| s.get(&id))
                    .map(|p| p.geohash.clone())
            })
            .unwrap_or_default();
        match self.select_worker(&anchor, &f.slo) {
            Some(worker_id) => {
                let task_id = self.alloc_task_id();
                let spec = TaskSpec {
                    task_id: task_id.clone(),
                    function: f.name.clone(),
                    group_key: task_key.to_string(),
                    operator: f.operator.clone(),
                    inputs: inputs.clone(),
                };
                self.tasks.insert(
                    task_id.clone(),
                    TaskInstance {
                        task_id: task_id.clone(),
                        function: f.name.clone(),
                        group_key: task_key.to_string(),
                        worker_id: worker_id.clone(),
                        inputs,
                        state: TaskState::Launching,
                    },
                );
                self.by_key
                    .insert((f.name.clone(), task_key.to_string()), task_id);
                vec![OrchestrationAction::AddTask { worker_id, spec }]
            }
            None => {
                log::info!(
                    "no worker available for {}/{task_key}; placement deferred",
                    f.name
                );
                self.deferred.insert(
                    (f.name.clone(), task_key.to_string()),
                    DeferredTask {
                        function: f.name.clone(),
                        group_key: task_key.to_string(),
                        inputs,
                    },
                );
                Vec::new()
            }
        }
    }

    /// Move tasks whose anchor now has a strictly closer edge than their
    /// current worker. `filter` scopes the scan.
    fn reconcile_placement<F>(&mut self, fn_name: &str, filter: F) -> Vec<OrchestrationAction>
    where
        F: Fn((&String, &String)) -> bool,
    {
        let candidates: Vec<String> = self
            .by_key
            .iter()
            .filter(|((f, k), _)| f == fn_name && filter((f, k)))
            .map(|(_, task_id)| task_id.clone())
            .collect();
        let mut actions = Vec::new();
        for task_id in candidates {
            if let Some(pair_actions) = self.maybe_migrate(&task_id).map(|p| p.0) {
                actions.extend(pair_actions);
            }
        }
        actions
    }

    /// Migrate one task if a strictly better edge exists. Returns the pair
    /// of actions (dispatched together) and the pair record.
    fn maybe_migrate(&mut self, task_id: &str) -> Option<(Vec<OrchestrationAction>, MigrationPair)> {
        let inst = self.tasks.get(task_id)?.clone();
        if inst.state == TaskState::Terminating {
            return None;
        }
        let anchor = self.anchor_geohash(&inst);
        if anchor.is_empty() {
            return None;
        }
        let current = self.workers.get(&inst.worker_id)?;
        let current_prefix = if current.is_cloud {
            0
        } else {
            common_prefix_len(&current.geohash, &anchor)
        };
        let best = self
            .workers
            .values()
            .filter(|w| {
                !w.is_cloud && w.worker_id != inst.worker_id && self.has_capacity(w)
            })
            .map(|w| (common_prefix_len(&w.geohash, &anchor), w))
            .max_by(|(pa, wa), (pb, wb)| {
                pa.cmp(pb).then_with(|| wb.worker_id.cmp(&wa.worker_id))
            });
        let (best_prefix, best_worker) = best?;
        if best_prefix <= current_prefix {
            return None;
        }
        let to_worker = best_worker.worker_id.clone();
        Some(self.migrate_task(&inst, &to_worker))
    }

    /// Build the simultaneous Remove/Add pair moving `inst` to `to_worker`.
    /// Input providers are refreshed from presence, so a migration driven
    /// by a producer move also re-points the subscriptions.
    fn migrate_task(
        &mut self,
        inst: &TaskInstance,
        to_worker: &str,
    ) -> (Vec<OrchestrationAction>, MigrationPair) {
        let f = self.functions.get(&inst.function).expect("task has function").clone();
        let new_task_id = self.alloc_task_id();
        let inputs: Vec<TaskInput> = inst
            .inputs
            .iter()
            .map(|i| {
                let provider = self
                    .presence
                    .get(&(inst.function.clone(), i.input_index))
                    .and_then(|s| s.get(&i.entity_id))
                    .map(|p| p.provider.clone())
                    .unwrap_or_else(|| i.provider_broker.clone());
                self.make_input(&f, i.input_index, &i.entity_id, &provider)
            })
            .collect();
        let spec = TaskSpec {
            task_id: new_task_id.clone(),
            function: inst.function.clone(),
            group_key: inst.group_key.clone(),
            operator: f.operator.clone(),
            inputs: inputs.clone(),
        };
        // The old task leaves the key table immediately; it keeps its slot
        // on the old worker until the Terminated report retires it.
        if let Some(old) = self.tasks.get_mut(&inst.task_id) {
            old.state = TaskState::Terminating;
        }
        self.by_key
            .insert((inst.function.clone(), inst.group_key.clone()), new_task_id.clone());
        self.tasks.insert(
            new_task_id.clone(),
            TaskInstance {
                task_id: new_task_id.clone(),
                function: inst.function.clone(),
                group_key: inst.group_key.clone(),
                worker_id: to_worker.to_string(),
                inputs,
                state: TaskState::Launching,
            },
        );
        let actions = vec![
            OrchestrationAction::RemoveTask {
                worker_id: inst.worker_id.clone(),
                task_id: inst.task_id.clone(),
            },
            OrchestrationAction::AddTask {
                worker_id: to_worker.to_string(),
                spec,
            },
        ];
        let pair = MigrationPair {
            function: inst.function.clone(),
            group_key: inst.group_key.clone(),
            old_task_id: inst.task_id.clone(),
            new_task_id,
            from_worker: inst.worker_id.clone(),
            to_worker: to_worker.to_string(),
        };
        (actions, pair)
    }

    pub fn plan_migration(&mut self, trigger: &MigrationTrigger) -> MigrationPlan {
        let mut plan = MigrationPlan::default();
        if !self.config.migration_enabled
            && !matches!(trigger, MigrationTrigger::WorkerOverloaded { .. })
        {
            // Overload relief stays on even when locality chasing is off:
            // it protects the worker, not the bandwidth.
            return plan;
        }
        match trigger {
            MigrationTrigger::NodeJoined { worker_id } => {
                let Some(new_edge) = self.workers.get(worker_id).cloned() else {
                    return plan;
                };
                if new_edge.is_cloud {
                    return plan;
                }
                let cloud_tasks: Vec<String> = self
                    .tasks
                    .values()
                    .filter(|t| {
                        t.state != TaskState::Terminating
                            && self
                                .workers
                                .get(&t.worker_id)
                                .map(|w| w.is_cloud)
                                .unwrap_or(false)
                    })
                    .map(|t| t.task_id.clone())
                    .collect();
                for task_id in cloud_tasks {
                    let inst = self.tasks.get(&task_id).expect("listed above").clone();
                    let anchor = self.anchor_geohash(&inst);
                    if anchor.is_empty() {
                        continue;
                    }
                    let target = self.workers.get(worker_id).expect("checked above");
                    if common_prefix_len(&target.geohash, &anchor) > 0 && self.has_capacity(target)
                    {
                        let (actions, pair) = self.migrate_task(&inst, worker_id);
                        plan.actions.extend(actions);
                        plan.pairs.push(pair);
                    }
                }
            }
            MigrationTrigger::WorkerOverloaded { worker_id } => {
                let Some(w) = self.workers.get(worker_id).cloned() else {
                    return plan;
                };
                if w.is_cloud {
                    return plan;
                }
                loop {
                    if self.live_load(worker_id) <= w.capacity {
                        break;
                    }
                    // Evict the lowest-priority live task; ties fall to the
                    // smallest task id.
                    let victim = self
                        .tasks
                        .values()
                        .filter(|t| t.worker_id == *worker_id && t.state != TaskState::Terminating)
                        .min_by_key(|t| {
                            let prio = self
                                .functions
                                .get(&t.function)
                                .map(|f| f.priority)
                                .unwrap_or(0);
                            (prio, t.task_id.clone())
                        })
                        .cloned();
                    let Some(victim) = victim else { break };
                    let cloud = self
                        .workers
                        .values()
                        .filter(|c| c.is_cloud && self.has_capacity(c))
                        .map(|c| c.worker_id.clone())
                        .next();
                    let Some(cloud_id) = cloud else { break };
                    let (actions, pair) = self.migrate_task(&victim, &cloud_id);
                    plan.actions.extend(actions);
                    plan.pairs.push(pair);
                }
            }
            MigrationTrigger::ProducerMoved {
                entity_id,
                new_geohash,
                new_provider,
            } => {
                // Update the producer's presence everywhere first so specs
                // built below carry fresh routing.
                let mut provider_changed = false;
                for slot in self.presence.values_mut() {
                    if let Some(p) = slot.get_mut(entity_id) {
                        p.geohash = new_geohash.clone();
                        if let Some(np) = new_provider {
                            if p.provider != *np {
                                p.provider = np.clone();
                                provider_changed = true;
                            }
                        }
                    }
                }
                let consuming: Vec<String> = self
                    .tasks
                    .values()
                    .filter(|t| {
                        t.state != TaskState::Terminating
                            && t.inputs.iter().any(|i| i.entity_id == *entity_id)
                    })
                    .map(|t| t.task_id.clone())
                    .collect();
                for task_id in consuming {
                    if let Some((actions, pair)) = self.maybe_migrate(&task_id) {
                        plan.actions.extend(actions);
                        plan.pairs.push(pair);
                    } else if provider_changed {
                        // No better placement, but the producer's home
                        // broker changed: re-point the affected inputs.
                        let inst = self.tasks.get(&task_id).expect("listed above").clone();
                        let f = self
                            .functions
                            .get(&inst.function)
                            .expect("task has function")
                            .clone();
                        for input in inst.inputs.iter().filter(|i| i.entity_id == *entity_id) {
                            let fresh = self.make_input(
                                &f,
                                input.input_index,
                                entity_id,
                                new_provider.as_deref().unwrap_or(&input.provider_broker),
                            );
                            if fresh.provider_broker == input.provider_broker {
                                continue;
                            }
                            plan.actions.push(OrchestrationAction::RemoveInput {
                                worker_id: inst.worker_id.clone(),
                                task_id: task_id.clone(),
                                selector: input.selector.clone(),
                            });
                            plan.actions.push(OrchestrationAction::AddInput {
                                worker_id: inst.worker_id.clone(),
                                task_id: task_id.clone(),
                                input: fresh.clone(),
                            });
                            if let Some(live) = self.tasks.get_mut(&task_id) {
                                if let Some(pos) = live.inputs.iter().position(|i| {
                                    i.input_index == input.input_index
                                        && i.entity_id == *entity_id
                                }) {
                                    live.inputs[pos] = fresh;
                                }
                            }
                        }
                    }
                }
            }
        }
        plan
    }

    /// Heartbeat intake: refresh the worker table, relieve overload, and
    /// retry deferred placements now that capacity may exist.
    pub fn on_worker_heartbeat(&mut self, rec: WorkerRecord, now: LogicalTime) -> HeartbeatOutcome {
        let mut outcome = HeartbeatOutcome::default();
        let worker_id = rec.worker_id.clone();
        outcome.new_worker = !self.workers.contains_key(&worker_id);
        let mut stored = rec;
        stored.last_heartbeat = now;
        self.workers.insert(worker_id.clone(), stored);

        let w = self.workers.get(&worker_id).expect("just inserted");
        if self.live_load(&worker_id) > w.capacity {
            let plan =
                self.plan_migration(&MigrationTrigger::WorkerOverloaded { worker_id });
            if !plan.actions.is_empty() {
                outcome.plan = Some(plan);
            }
        }
        outcome.placements = self.retry_deferred(now);
        outcome
    }

    /// Attempt every deferred placement, highest function priority first.
    pub fn retry_deferred(&mut self, now: LogicalTime) -> Vec<OrchestrationAction> {
        if self.deferred.is_empty() {
            return Vec::new();
        }
        let mut order: Vec<(String, String)> = self.deferred.keys().cloned().collect();
        order.sort_by_key(|(fn_name, key)| {
            let prio = self
                .functions
                .get(fn_name)
                .map(|f| f.priority)
                .unwrap_or(0);
            (std::cmp::Reverse(prio), fn_name.clone(), key.clone())
        });
        let mut actions = Vec::new();
        for slot_key in order {
            let Some(def) = self.deferred.remove(&slot_key) else {
                continue;
            };
            let f = match self.functions.get(&def.function) {
                Some(f) => f.clone(),
                None => continue,
            };
            let placed = self.place_task(&f, &def.group_key, def.inputs, now);
            // place_task re-defers on failure, so no progress is ever lost.
            actions.extend(placed);
        }
        actions
    }

    /// Mark workers dead after 3 missed heartbeat intervals and replan
    /// their tasks onto the survivors.
    pub fn check_liveness(&mut self, now: LogicalTime) -> LivenessOutcome {
        let mut outcome = LivenessOutcome::default();
        let deadline = self.config.heartbeat_interval_ms * 1_000 * 3;
        let dead: Vec<String> = self
            .workers
            .values()
            .filter(|w| now.saturating_sub(w.last_heartbeat) > deadline)
            .map(|w| w.worker_id.clone())
            .collect();
        // Drop every dead worker before replanning anything, so a replan
        // never lands on a worker that is about to be declared dead too.
        for worker_id in &dead {
            self.workers.remove(worker_id);
        }
        for worker_id in dead {
            outcome.dead_workers.push(worker_id.clone());
            let lost: Vec<String> = self
                .tasks
                .values()
                .filter(|t| t.worker_id == worker_id)
                .map(|t| t.task_id.clone())
                .collect();
            for task_id in lost {
                let inst = self.tasks.remove(&task_id).expect("listed above");
                if inst.state == TaskState::Terminating {
                    continue;
                }
                self.by_key.remove(&(inst.function.clone(), inst.group_key.clone()));
                let f = match self.functions.get(&inst.function) {
                    Some(f) => f.clone(),
                    None => continue,
                };
                outcome
                    .actions
                    .extend(self.place_task(&f, &inst.group_key, inst.inputs, now));
            }
        }
        outcome
    }

    /// Worker feedback closes the loop: Running confirms a launch,
    /// Terminated retires a slot, Rejected sends the task back through
    /// placement.
    pub fn on_task_report(&mut self, report: &TaskReport) {
        match report.state {
            TaskState::Running => {
                if let Some(inst) = self.tasks.get_mut(&report.task_id) {
                    if inst.state == TaskState::Launching {
                        inst.state = TaskState::Running;
                    }
                }
            }
            TaskState::Terminated => {
                self.tasks.remove(&report.task_id);
            }
            TaskState::Rejected => {
                if let Some(inst) = self.tasks.remove(&report.task_id) {
                    self.by_key
                        .remove(&(inst.function.clone(), inst.group_key.clone()));
                    self.deferred.insert(
                        (inst.function.clone(), inst.group_key.clone()),
                        DeferredTask {
                            function: inst.function,
                            group_key: inst.group_key,
                            inputs: inst.inputs,
                        },
                    );
                }
            }
            _ => {}
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::function::InputSelector;
    use std::collections::BTreeSet;

    fn sink() -> NotificationSink {
        NotificationSink {
            node_id: "cloud".into(),
            channel: "orchestrator".into(),
        }
    }

    fn orch() -> Orchestrator {
        Orchestrator::new(
            OrchestratorConfig {
                sink: sink(),
                ..OrchestratorConfig::default()
            },
            OperatorRegistry::with_builtins(),
        )
    }

    fn worker(id: &str, geohash: &str, is_cloud: bool, capacity: u32) -> WorkerRecord {
        WorkerRecord {
            worker_id: id.into(),
            node_id: id.into(),
            geohash: geohash.into(),
            is_cloud,
            capacity,
            load: 0,
            last_heartbeat: 0,
        }
    }

    fn reg(id: &str, ty: &str, geohash: &str, provider: &str) -> AvailabilityRegistration {
        AvailabilityRegistration {
            entity_id: id.into(),
            entity_type: ty.into(),
            attribute_names: ["location".to_string(), "speed_kmh".to_string(), "zone".to_string()]
                .into_iter()
                .collect::<BTreeSet<_>>(),
            provider_broker: provider.into(),
            geohash: geohash.into(),
            registered_at: 0,
            ttl_s: 30,
        }
    }

    fn appear(sub: &str, r: AvailabilityRegistration) -> AvailabilityEvent {
        AvailabilityEvent {
            kind: AvailabilityKind::Appear,
            sub_id: sub.into(),
            registration: r,
        }
    }

    fn disappear(sub: &str, r: AvailabilityRegistration) -> AvailabilityEvent {
        AvailabilityEvent {
            kind: AvailabilityKind::Disappear,
            sub_id: sub.into(),
            registration: r,
        }
    }

    fn car_fn(name: &str, group_by: GroupBy) -> FogFunction {
        FogFunction::new(
            name,
            "speed_estimation",
            vec![InputSelector::new("Car", group_by)],
        )
    }

    fn seed_workers(o: &mut Orchestrator) {
        for w in [
            worker("w@e1", "u3375", false, 8),
            worker("w@e2", "ezs42", false, 8),
            worker("w@cloud", "", true, 1000),
        ] {
            o.on_worker_heartbeat(w, 0);
        }
    }

    #[test]
    fn per_entity_id_spawns_one_task_per_car() {
        let mut o = orch();
        seed_workers(&mut o);
        o.register_function(car_fn("speed", GroupBy::PerEntityId)).unwrap();
        for i in 0..3 {
            let out = o.on_event(
                &appear("af/speed/0", reg(&format!("car-{i}"), "Car", "u3375", "b@e1")),
                0,
            );
            assert_eq!(out.actions.len(), 1);
            assert!(matches!(out.actions[0], OrchestrationAction::AddTask { .. }));
        }
        assert_eq!(o.task_count(), 3);

        // A duplicate appear is idempotent.
        let out = o.on_event(&appear("af/speed/0", reg("car-0", "Car", "u3375", "b@e1")), 1);
        assert!(out.actions.is_empty());
        assert_eq!(o.task_count(), 3);
    }

    #[test]
    fn appear_then_disappear_balances_to_empty() {
        let mut o = orch();
        seed_workers(&mut o);
        o.register_function(car_fn("speed", GroupBy::PerEntityId)).unwrap();
        let r = reg("car-1", "Car", "u3375", "b@e1");
        let add = o.on_event(&appear("af/speed/0", r.clone()), 0);
        assert!(matches!(add.actions[0], OrchestrationAction::AddTask { .. }));
        let rm = o.on_event(&disappear("af/speed/0", r), 1);
        assert_eq!(rm.actions.len(), 1);
        assert!(matches!(rm.actions[0], OrchestrationAction::RemoveTask { .. }));
        // Slot retires when the worker confirms.
        let task_id = match &rm.actions[0] {
            OrchestrationAction::RemoveTask { task_id, .. } => task_id.clone(),
            _ => unreachable!(),
        };
        o.on_task_report(&TaskReport {
            worker_id: "w@e1".into(),
            task_id,
            state: TaskState::Terminated,
            inputs: vec![],
            at: 2,
        });
        assert_eq!(o.task_count(), 0);
        assert!(o.deployment_state().functions.is_empty());
    }

    #[test]
    fn per_entity_type_groups_all_cars_into_one_task() {
        let mut o = orch();
        seed_workers(&mut o);
        o.register_function(car_fn("agg", GroupBy::PerEntityType)).unwrap();
        let a = o.on_event(&appear("af/agg/0", reg("car-a", "Car", "u3375", "b@e1")), 0);
        assert!(matches!(a.actions[0], OrchestrationAction::AddTask { .. }));
        let b = o.on_event(&appear("af/agg/0", reg("car-b", "Car", "u3375", "b@e1")), 1);
        assert_eq!(b.actions.len(), 1);
        assert!(matches!(b.actions[0], OrchestrationAction::AddInput { .. }));
        assert_eq!(o.task_count(), 1);

        // Losing one car keeps the task; losing the last removes it.
        let r1 = o.on_event(&disappear("af/agg/0", reg("car-a", "Car", "u3375", "b@e1")), 2);
        assert!(matches!(r1.actions[0], OrchestrationAction::RemoveInput { .. }));
        let r2 = o.on_event(&disappear("af/agg/0", reg("car-b", "Car", "u3375", "b@e1")), 3);
        assert!(matches!(r2.actions[0], OrchestrationAction::RemoveTask { .. }));
    }

    #[test]
    fn attribute_value_keying_goes_through_a_fetch() {
        use crate::context::{Attribute, ContextEntity};
        let mut o = orch();
        seed_workers(&mut o);
        let f = FogFunction::new(
            "by_zone",
            "speed_estimation",
            vec![InputSelector::new(
                "Car",
                GroupBy::PerAttributeValue {
                    attribute: "zone".into(),
                },
            )],
        );
        o.register_function(f).unwrap();
        let out = o.on_event(&appear("af/by_zone/0", reg("car-1", "Car", "u3375", "b@e1")), 0);
        assert!(out.actions.is_empty());
        assert_eq!(out.value_fetches.len(), 1);
        let fetch = &out.value_fetches[0];
        assert_eq!(fetch.provider_broker, "b@e1");

        let mut car = ContextEntity::new("car-1", "Car");
        car.attributes.insert(
            "zone".into(),
            Attribute {
                name: "zone".into(),
                value: AttributeValue::Text("north".into()),
                timestamp: 0,
                source_id: "car-1".into(),
            },
        );
        let done = o.on_value_fetched(&fetch.query_id, &[car.clone()], 1);
        assert_eq!(done.actions.len(), 1);
        match &done.actions[0] {
            OrchestrationAction::AddTask { spec, .. } => assert_eq!(spec.group_key, "north"),
            other => panic!("expected AddTask, got {other:?}"),
        }

        // Second car in the same zone joins the same task.
        let out2 = o.on_event(&appear("af/by_zone/0", reg("car-2", "Car", "u3375", "b@e1")), 2);
        let mut car2 = car;
        car2.id = "car-2".into();
        let done2 = o.on_value_fetched(&out2.value_fetches[0].query_id, &[car2], 3);
        assert!(matches!(done2.actions[0], OrchestrationAction::AddInput { .. }));
        assert_eq!(o.task_count(), 1);
    }

    #[test]
    fn fetch_race_with_disappear_is_dropped() {
        let mut o = orch();
        seed_workers(&mut o);
        let f = FogFunction::new(
            "by_zone",
            "speed_estimation",
            vec![InputSelector::new(
                "Car",
                GroupBy::PerAttributeValue {
                    attribute: "zone".into(),
                },
            )],
        );
        o.register_function(f).unwrap();
        let r = reg("car-1", "Car", "u3375", "b@e1");
        let out = o.on_event(&appear("af/by_zone/0", r.clone()), 0);
        let q = out.value_fetches[0].query_id.clone();
        // Disappear lands before the query response.
        o.on_event(&disappear("af/by_zone/0", r), 1);
        let late = o.on_value_fetched(&q, &[], 2);
        assert!(late.actions.is_empty());
        assert_eq!(o.task_count(), 0);
    }

    #[test]
    fn locality_selection_matches_stated_examples() {
        let mut o = orch();
        o.on_worker_heartbeat(worker("edgeA", "u4pru", false, 2), 0);
        o.on_worker_heartbeat(worker("cloud", "", true, 100), 0);
        assert_eq!(o.select_worker("u4pru", &Slo::None).unwrap(), "edgeA");

        // Prefix 3 vs 5: the longer prefix wins.
        o.on_worker_heartbeat(worker("edgeB", "u4p", false, 2), 0);
        assert_eq!(o.select_worker("u4pru", &Slo::None).unwrap(), "edgeA");

        // Full edge overflows to cloud.
        o.register_function(car_fn("speed", GroupBy::PerEntityId)).unwrap();
        o.on_event(&appear("af/speed/0", reg("c1", "Car", "u4pru", "b")), 0);
        o.on_event(&appear("af/speed/0", reg("c2", "Car", "u4pru", "b")), 0);
        // edgeA is now at capacity 2; next best is edgeB (prefix 3).
        assert_eq!(o.select_worker("u4pru", &Slo::None).unwrap(), "edgeB");
        o.on_event(&appear("af/speed/0", reg("c3", "Car", "u4pru", "b")), 0);
        o.on_event(&appear("af/speed/0", reg("c4", "Car", "u4pru", "b")), 0);
        assert_eq!(o.select_worker("u4pru", &Slo::None).unwrap(), "cloud");
    }

    #[test]
    fn no_worker_defers_until_heartbeat() {
        let mut o = orch();
        o.register_function(car_fn("speed", GroupBy::PerEntityId)).unwrap();
        let out = o.on_event(&appear("af/speed/0", reg("car-1", "Car", "u3375", "b@e1")), 0);
        assert!(out.actions.is_empty());
        assert_eq!(o.deferred_count(), 1);

        let hb = o.on_worker_heartbeat(worker("w@e1", "u3375", false, 4), 1_000_000);
        assert!(hb.new_worker);
        assert_eq!(hb.placements.len(), 1);
        assert!(matches!(hb.placements[0], OrchestrationAction::AddTask { .. }));
        assert_eq!(o.deferred_count(), 0);
    }

    #[test]
    fn overload_evicts_exactly_the_lowest_priority_task() {
        let mut o = orch();
        o.on_worker_heartbeat(worker("w@e1", "u3375", false, 3), 0);
        o.on_worker_heartbeat(worker("w@cloud", "", true, 100), 0);
        for (name, prio) in [("low", 10u8), ("mid", 50), ("high", 90)] {
            let mut f = car_fn(name, GroupBy::PerEntityType);
            f.priority = prio;
            o.register_function(f).unwrap();
            o.on_event(&appear(&format!("af/{name}/0"), reg("car-1", "Car", "u3375", "b")), 0);
        }
        assert_eq!(o.assigned_load("w@e1"), 3);

        // Capacity drops to 2: exactly one task must leave, the priority-10 one.
        let hb = o.on_worker_heartbeat(worker("w@e1", "u3375", false, 2), 1);
        let plan = hb.plan.expect("overload plan");
        assert_eq!(plan.pairs.len(), 1);
        assert_eq!(plan.pairs[0].function, "low");
        assert_eq!(plan.pairs[0].to_worker, "w@cloud");
        // The pair is simultaneous: one Remove and one Add in the batch.
        assert_eq!(plan.actions.len(), 2);
    }

    #[test]
    fn node_joined_pulls_cloud_tasks_to_the_near_edge() {
        let mut o = orch();
        o.on_worker_heartbeat(worker("w@cloud", "", true, 100), 0);
        o.register_function(car_fn("speed", GroupBy::PerEntityId)).unwrap();
        o.on_event(&appear("af/speed/0", reg("car-1", "Car", "u3375", "b@e1")), 0);
        let state = o.deployment_state();
        assert_eq!(state.functions["speed"]["car-1"].worker_id, "w@cloud");

        o.on_worker_heartbeat(worker("w@e1", "u3375", false, 4), 1);
        let plan = o.plan_migration(&MigrationTrigger::NodeJoined {
            worker_id: "w@e1".into(),
        });
        assert_eq!(plan.pairs.len(), 1);
        assert_eq!(plan.pairs[0].from_worker, "w@cloud");
        assert_eq!(plan.pairs[0].to_worker, "w@e1");
        let state = o.deployment_state();
        assert_eq!(state.functions["speed"]["car-1"].worker_id, "w@e1");
    }

    #[test]
    fn producer_move_within_cell_is_a_no_op() {
        let mut o = orch();
        seed_workers(&mut o);
        o.register_function(car_fn("speed", GroupBy::PerEntityId)).unwrap();
        o.on_event(&appear("af/speed/0", reg("car-1", "Car", "u3375", "b@e1")), 0);
        let plan = o.plan_migration(&MigrationTrigger::ProducerMoved {
            entity_id: "car-1".into(),
            new_geohash: "u3375".into(),
            new_provider: None,
        });
        assert!(plan.actions.is_empty());
    }

    #[test]
    fn producer_move_to_strictly_closer_edge_migrates() {
        let mut o = orch();
        seed_workers(&mut o);
        o.register_function(car_fn("speed", GroupBy::PerEntityId)).unwrap();
        o.on_event(&appear("af/speed/0", reg("car-1", "Car", "u3375", "b@e1")), 0);
        let plan = o.plan_migration(&MigrationTrigger::ProducerMoved {
            entity_id: "car-1".into(),
            new_geohash: "ezs42".into(),
            new_provider: Some("b@e2".into()),
        });
        assert_eq!(plan.pairs.len(), 1);
        assert_eq!(plan.pairs[0].from_worker, "w@e1");
        assert_eq!(plan.pairs[0].to_worker, "w@e2");
        // The migrated spec subscribes at the new home broker.
        let add = plan
            .actions
            .iter()
            .find_map(|a| match a {
                OrchestrationAction::AddTask { spec, .. } => Some(spec),
                _ => None,
            })
            .unwrap();
        assert_eq!(add.inputs[0].provider_broker, "b@e2");
    }

    #[test]
    fn provider_change_without_better_edge_repoints_inputs() {
        let mut o = orch();
        o.on_worker_heartbeat(worker("w@e1", "u3375", false, 8), 0);
        o.on_worker_heartbeat(worker("w@cloud", "", true, 100), 0);
        o.register_function(car_fn("speed", GroupBy::PerEntityId)).unwrap();
        o.on_event(&appear("af/speed/0", reg("car-1", "Car", "u3375", "b@e1")), 0);
        // Same cell coverage but a different home broker.
        let plan = o.plan_migration(&MigrationTrigger::ProducerMoved {
            entity_id: "car-1".into(),
            new_geohash: "u3376".into(),
            new_provider: Some("b@e9".into()),
        });
        assert!(plan.pairs.is_empty());
        assert_eq!(plan.actions.len(), 2);
        assert!(matches!(plan.actions[0], OrchestrationAction::RemoveInput { .. }));
        match &plan.actions[1] {
            OrchestrationAction::AddInput { input, .. } => {
                assert_eq!(input.provider_broker, "b@e9")
            }
            other => panic!("expected AddInput, got {other:?}"),
        }
    }

    #[test]
    fn missed_heartbeats_kill_the_worker_and_replan() {
        let mut o = orch();
        o.on_worker_heartbeat(worker("w@e1", "u3375", false, 8), 0);
        o.on_worker_heartbeat(worker("w@e2", "u3376", false, 8), 0);
        o.register_function(car_fn("speed", GroupBy::PerEntityId)).unwrap();
        o.on_event(&appear("af/speed/0", reg("car-1", "Car", "u3375", "b@e1")), 0);
        assert_eq!(o.assigned_load("w@e1"), 1);

        // w@e2 keeps beating, w@e1 goes silent past 3 intervals.
        let late = 40_000_000u64;
        o.on_worker_heartbeat(worker("w@e2", "u3376", false, 8), late);
        let out = o.check_liveness(late);
        assert_eq!(out.dead_workers, vec!["w@e1".to_string()]);
        assert_eq!(out.actions.len(), 1);
        match &out.actions[0] {
            OrchestrationAction::AddTask { worker_id, .. } => assert_eq!(worker_id, "w@e2"),
            other => panic!("expected AddTask, got {other:?}"),
        }
    }

    #[test]
    fn rejected_report_returns_task_to_the_deferred_queue() {
        let mut o = orch();
        o.on_worker_heartbeat(worker("w@e1", "u3375", false, 8), 0);
        o.register_function(car_fn("speed", GroupBy::PerEntityId)).unwrap();
        let out = o.on_event(&appear("af/speed/0", reg("car-1", "Car", "u3375", "b@e1")), 0);
        let task_id = match &out.actions[0] {
            OrchestrationAction::AddTask { spec, .. } => spec.task_id.clone(),
            other => panic!("expected AddTask, got {other:?}"),
        };
        o.on_task_report(&TaskReport {
            worker_id: "w@e1".into(),
            task_id,
            state: TaskState::Rejected,
            inputs: vec![],
            at: 1,
        });
        assert_eq!(o.task_count(), 0);
        assert_eq!(o.deferred_count(), 1);
        let placed = o.retry_deferred(2);
        assert_eq!(placed.len(), 1);
    }

    #[test]
    fn broadcast_side_input_attaches_to_every_group() {
        let mut o = orch();
        seed_workers(&mut o);
        let f = FogFunction::new(
            "fuse",
            "speed_estimation",
            vec![
                InputSelector::new("Car", GroupBy::PerEntityId),
                InputSelector::new("TrafficLight", GroupBy::PerEntityType),
            ],
        );
        o.register_function(f).unwrap();
        // Side input appears first: remembered, no actions yet.
        let side = o.on_event(&appear("af/fuse/1", reg("tl-1", "TrafficLight", "u3375", "b@e1")), 0);
        assert!(side.actions.is_empty());
        // First car: the new task spec carries both inputs.
        let a = o.on_event(&appear("af/fuse/0", reg("car-1", "Car", "u3375", "b@e1")), 1);
        match &a.actions[0] {
            OrchestrationAction::AddTask { spec, .. } => {
                assert_eq!(spec.inputs.len(), 2);
                assert_eq!(spec.inputs[1].entity_id, "tl-1");
            }
            other => panic!("expected AddTask, got {other:?}"),
        }
        // Second car gets its own task, side input attached at build time.
        let b = o.on_event(&appear("af/fuse/0", reg("car-2", "Car", "u3375", "b@e1")), 2);
        match &b.actions[0] {
            OrchestrationAction::AddTask { spec, .. } => assert_eq!(spec.inputs.len(), 2),
            other => panic!("expected AddTask, got {other:?}"),
        }
        // A second traffic light broadcasts into both existing tasks.
        let c = o.on_event(&appear("af/fuse/1", reg("tl-2", "TrafficLight", "u3375", "b@e1")), 3);
        assert_eq!(c.actions.len(), 2);
        assert!(c
            .actions
            .iter()
            .all(|x| matches!(x, OrchestrationAction::AddInput { .. })));
        // Side input loss trims but never kills.
        let d = o.on_event(&disappear("af/fuse/1", reg("tl-1", "TrafficLight", "u3375", "b@e1")), 4);
        assert_eq!(d.actions.len(), 2);
        assert!(d
            .actions
            .iter()
            .all(|x| matches!(x, OrchestrationAction::RemoveInput { .. })));
        assert_eq!(o.task_count(), 2);
        // Trigger loss kills even with the side input still present.
        let e = o.on_event(&disappear("af/fuse/0", reg("car-1", "Car", "u3375", "b@e1")), 5);
        assert!(matches!(e.actions[0], OrchestrationAction::RemoveTask { .. }));
    }

    #[test]
    fn quiescent_placement_ignores_event_order() {
        use rand::prelude::*;
        use rand::rngs::StdRng;
        let mut rng = StdRng::seed_from_u64(7);
        // Cells chosen so every entity has a unique best edge.
        let entities: Vec<(String, String)> = (0..8)
            .map(|i| {
                let cell = if i % 2 == 0 { "u3375" } else { "ezs42" };
                (format!("car-{i}"), cell.to_string())
            })
            .collect();
        let baseline: Option<String> = None;
        let mut expected = baseline;
        for _ in 0..40 {
            let mut order: Vec<usize> = (0..entities.len()).collect();
            order.shuffle(&mut rng);
            let mut o = orch();
            seed_workers(&mut o);
            o.register_function(car_fn("speed", GroupBy::PerEntityId)).unwrap();
            o.register_function(car_fn("agg", GroupBy::PerEntityType)).unwrap();
            for i in order {
                let (id, cell) = &entities[i];
                for sub in ["af/speed/0", "af/agg/0"] {
                    o.on_event(&appear(sub, reg(id, "Car", cell, "b@e1")), 0);
                }
            }
            let fp = o.deployment_state().placement_fingerprint();
            match &expected {
                None => expected = Some(fp),
                Some(e) => assert_eq!(&fp, e, "placement depends on event order"),
            }
        }
    }

    #[test]
    fn dump_state_roundtrips_as_json() {
        let mut o = orch();
        seed_workers(&mut o);
        o.register_function(car_fn("speed", GroupBy::PerEntityId)).unwrap();
        o.on_event(&appear("af/speed/0", reg("car-1", "Car", "u3375", "b@e1")), 0);
        let state = o.deployment_state();
        let json = serde_json::to_string(&state).unwrap();
        let back: DeploymentState = serde_json::from_str(&json).unwrap();
        assert_eq!(back, state);
        assert_eq!(back.placement_fingerprint(), state.placement_fingerprint());
    }
}
