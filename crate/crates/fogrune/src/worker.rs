//! Task execution on a fog node.
//!
//! A worker turns orchestration actions into running task sandboxes. The
//! worker itself performs no IO: executing an action yields the broker
//! subscribe/unsubscribe commands to run, a report to send back, and the
//! virtual-time instants when the task becomes ready or finishes
//! terminating. Launches are serialized per worker (one image fetch and
//! container start at a time), which is what makes fleet throughput scale
//! with worker count rather than with anything else.

use std::collections::{BTreeMap, BTreeSet, VecDeque};

use serde::{Deserialize, Serialize};

use crate::broker::{Notification, NotificationPayload};
use crate::context::{entity_from_update, ContextEntity, EntityUpdate, LogicalTime, Selector};
use crate::error::FogError;
use crate::message::NotificationSink;
use crate::operator::{OperatorContext, OperatorHost, OperatorRegistry};
use crate::orchestrator::{OrchestrationAction, WorkerRecord};

/// Simulated costs of the container lifecycle, in milliseconds of virtual
/// time. Fetch is charged only when the operator image is not cached.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct LaunchTimingModel {
    pub fetch_delay_ms: u64,
    pub launch_delay_ms: u64,
    pub terminate_delay_ms: u64,
}

impl Default for LaunchTimingModel {
    fn default() -> Self {
        LaunchTimingModel {
            fetch_delay_ms: 5000,
            launch_delay_ms: 2000,
            terminate_delay_ms: 300,
        }
    }
}

/// One subscribed input of a task.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TaskInput {
    pub input_index: usize,
    pub entity_id: String,
    pub selector: Selector,
    pub provider_broker: String,
}

/// Everything a worker needs to launch a task.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TaskSpec {
    pub task_id: String,
    pub function: String,
    pub group_key: String,
    pub operator: String,
    pub inputs: Vec<TaskInput>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TaskState {
    Launching,
    Running,
    Terminating,
    Terminated,
    Rejected,
}

/// Worker feedback to the orchestrator. `at` is the virtual time the
/// report is true (a Terminated report postdates its RemoveTask by the
/// terminate delay).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TaskReport {
    pub worker_id: String,
    pub task_id: String,
    pub state: TaskState,
    pub inputs: Vec<TaskInput>,
    pub at: LogicalTime,
}

/// Subscription the worker wants installed at a broker on behalf of a task.
#[derive(Debug, Clone, PartialEq)]
pub struct SubscribeCmd {
    pub broker: String,
    pub sub_id: String,
    pub selector: Selector,
    pub sink: NotificationSink,
}

#[derive(Debug, Clone, PartialEq)]
pub struct UnsubscribeCmd {
    pub broker: String,
    pub sub_id: String,
}

#[derive(Debug, Default)]
pub struct ExecuteOutcome {
    pub subscribes: Vec<SubscribeCmd>,
    pub unsubscribes: Vec<UnsubscribeCmd>,
    pub report: Option<TaskReport>,
    /// When an AddTask finishes launching; the caller schedules
    /// `activate_task` there.
    pub ready_at: Option<LogicalTime>,
}

/// An operator invocation's published results, stamped with the virtual
/// time they become visible (delivery time plus the operator's cost).
#[derive(Debug, Default)]
pub struct DeliverOutcome {
    pub outputs: Vec<(LogicalTime, EntityUpdate)>,
}

#[derive(Debug)]
pub struct ActivationOutcome {
    pub report: TaskReport,
    pub outputs: Vec<(LogicalTime, EntityUpdate)>,
}

/// Deterministic heart of a sandbox: merged per-entity views fed through
/// the operator. Identical notification sequences produce identical
/// outputs, which is what makes replay comparisons possible.
#[derive(Debug, Default)]
pub struct SandboxCore {
    views: BTreeMap<String, ContextEntity>,
}

impl SandboxCore {
    /// Fold one notification into the views; returns the ids whose view
    /// changed, in deterministic order.
    pub fn ingest(&mut self, payload: &NotificationPayload) -> Vec<String> {
        match payload {
            NotificationPayload::Snapshot { entities } => {
                let mut ids = Vec::new();
                for e in entities {
                    self.views.insert(e.id.clone(), e.clone());
                    ids.push(e.id.clone());
                }
                ids
            }
            NotificationPayload::Delta { update } => {
                match self.views.get_mut(&update.id) {
                    Some(view) => {
                        // Guards already held at the broker; a mismatch here
                        // means crossed wires, not bad data.
                        if view.apply_update(update).is_err() {
                            return Vec::new();
                        }
                    }
                    None => {
                        self.views.insert(update.id.clone(), entity_from_update(update));
                    }
                }
                vec![update.id.clone()]
            }
        }
    }

    pub fn view(&self, entity_id: &str) -> Option<&ContextEntity> {
        self.views.get(entity_id)
    }
}

#[derive(Debug)]
struct TaskSandbox {
    spec: TaskSpec,
    state: TaskState,
    core: SandboxCore,
    /// Notifications delivered while still launching, replayed in FIFO
    /// order at activation.
    pending: VecDeque<Notification>,
}

/// Deterministic sub id for one task input at a broker.
fn input_sub_id(task_id: &str, input: &TaskInput) -> String {
    format!("{task_id}/in{}/{}", input.input_index, input.entity_id)
}

#[derive(Debug)]
pub struct Worker {
    pub worker_id: String,
    pub node_id: String,
    pub geohash: String,
    pub is_cloud: bool,
    pub capacity: u32,
    pub timing: LaunchTimingModel,
    registry: OperatorRegistry,
    tasks: BTreeMap<String, TaskSandbox>,
    /// Operator images already fetched on this node.
    cache: BTreeSet<String>,
    /// The serial launcher: the next launch starts no earlier than this.
    launcher_busy_until: LogicalTime,
    dropped_notifications: u64,
}

impl Worker {
    pub fn new(
        worker_id: &str,
        node_id: &str,
        geohash: &str,
        is_cloud: bool,
        capacity: u32,
        timing: LaunchTimingModel,
        registry: OperatorRegistry,
    ) -> Self {
        Worker {
            worker_id: worker_id.to_string(),
            node_id: node_id.to_string(),
            geohash: geohash.to_string(),
            is_cloud,
            capacity,
            timing,
            registry,
            tasks: BTreeMap::new(),
            cache: BTreeSet::new(),
            launcher_busy_until: 0,
            dropped_notifications: 0,
        }
    }

    pub fn task_count(&self) -> usize {
        self.tasks.len()
    }

    pub fn task_state(&self, task_id: &str) -> Option<TaskState> {
        self.tasks.get(task_id).map(|t| t.state)
    }

    pub fn has_cached(&self, operator: &str) -> bool {
        self.cache.contains(operator)
    }

    /// Warm the operator cache without launching anything (benchmark knob).
    pub fn prefetch(&mut self, operator: &str) {
        self.cache.insert(operator.to_string());
    }

    pub fn dropped_notifications(&self) -> u64 {
        self.dropped_notifications
    }

    fn sink_for(&self, task_id: &str) -> NotificationSink {
        NotificationSink {
            node_id: self.node_id.clone(),
            channel: format!("task/{task_id}"),
        }
    }

    /// Perform one orchestration action addressed to this worker.
    pub fn execute(
        &mut self,
        action: &OrchestrationAction,
        now: LogicalTime,
    ) -> Result<ExecuteOutcome, FogError> {
        let mut out = ExecuteOutcome::default();
        match action {
            OrchestrationAction::AddTask { spec, .. } => {
                if self.tasks.len() as u32 >= self.capacity {
                    out.report = Some(TaskReport {
                        worker_id: self.worker_id.clone(),
                        task_id: spec.task_id.clone(),
                        state: TaskState::Rejected,
                        inputs: vec![],
                        at: now,
                    });
                    return Ok(out);
                }
                if self.registry.get(&spec.operator).is_none() {
                    return Err(FogError::UnknownOperator(spec.operator.clone()));
                }
                // One launch at a time: queue behind whatever the launcher
                // is doing, fetch the image if this node has never run the
                // operator, then start the container.
                let start = now.max(self.launcher_busy_until);
                let fetch = if self.cache.contains(&spec.operator) {
                    0
                } else {
                    self.timing.fetch_delay_ms * 1_000
                };
                self.cache.insert(spec.operator.clone());
                let ready_at = start + fetch + self.timing.launch_delay_ms * 1_000;
                self.launcher_busy_until = ready_at;

                // Subscriptions go out immediately so nothing published
                // during the launch window is missed; deliveries queue in
                // the sandbox until activation.
                for input in &spec.inputs {
                    out.subscribes.push(SubscribeCmd {
                        broker: input.provider_broker.clone(),
                        sub_id: input_sub_id(&spec.task_id, input),
                        selector: input.selector.clone(),
                        sink: self.sink_for(&spec.task_id),
                    });
                }
                self.tasks.insert(
                    spec.task_id.clone(),
                    TaskSandbox {
                        spec: spec.clone(),
                        state: TaskState::Launching,
                        core: SandboxCore::default(),
                        pending: VecDeque::new(),
                    },
                );
                out.ready_at = Some(ready_at);
            }
            OrchestrationAction::RemoveTask { task_id, .. } => {
                let sandbox = self
                    .tasks
                    .remove(task_id)
                    .ok_or_else(|| FogError::UnknownTask(task_id.clone()))?;
                for input in &sandbox.spec.inputs {
                    out.unsubscribes.push(UnsubscribeCmd {
                        broker: input.provider_broker.clone(),
                        sub_id: input_sub_id(task_id, input),
                    });
                }
                out.report = Some(TaskReport {
                    worker_id: self.worker_id.clone(),
                    task_id: task_id.clone(),
                    state: TaskState::Terminated,
                    inputs: vec![],
                    at: now + self.timing.terminate_delay_ms * 1_000,
                });
            }
            OrchestrationAction::AddInput { task_id, input, .. } => {
                let sink = self.sink_for(task_id);
                let sandbox = self
                    .tasks
                    .get_mut(task_id)
                    .ok_or_else(|| FogError::UnknownTask(task_id.clone()))?;
                if !sandbox.spec.inputs.iter().any(|i| {
                    i.input_index == input.input_index && i.entity_id == input.entity_id
                }) {
                    sandbox.spec.inputs.push(input.clone());
                    out.subscribes.push(SubscribeCmd {
                        broker: input.provider_broker.clone(),
                        sub_id: input_sub_id(task_id, input),
                        selector: input.selector.clone(),
                        sink,
                    });
                }
                out.report = Some(TaskReport {
                    worker_id: self.worker_id.clone(),
                    task_id: task_id.clone(),
                    state: sandbox.state,
                    inputs: sandbox.spec.inputs.clone(),
                    at: now,
                });
            }
            OrchestrationAction::RemoveInput { task_id, selector, .. } => {
                let sandbox = self
                    .tasks
                    .get_mut(task_id)
                    .ok_or_else(|| FogError::UnknownTask(task_id.clone()))?;
                if let Some(pos) = sandbox.spec.inputs.iter().position(|i| i.selector == *selector)
                {
                    let input = sandbox.spec.inputs.remove(pos);
                    out.unsubscribes.push(UnsubscribeCmd {
                        broker: input.provider_broker.clone(),
                        sub_id: input_sub_id(task_id, &input),
                    });
                }
                out.report = Some(TaskReport {
                    worker_id: self.worker_id.clone(),
                    task_id: task_id.clone(),
                    state: sandbox.state,
                    inputs: sandbox.spec.inputs.clone(),
                    at: now,
                });
            }
        }
        Ok(out)
    }

    /// Run one notification through the operator, charging its processing
    /// cost per invocation. Outputs carry the time they become visible;
    /// the returned instant is when the sandbox is free again.
    fn invoke(
        &mut self,
        task_id: &str,
        payload: &NotificationPayload,
        now: LogicalTime,
        host: &mut dyn OperatorHost,
    ) -> (LogicalTime, Vec<(LogicalTime, EntityUpdate)>) {
        let op_name = self.tasks[task_id].spec.operator.clone();
        let operator = self
            .registry
            .get(&op_name)
            .expect("checked at AddTask")
            .clone();
        let sandbox = self.tasks.get_mut(task_id).expect("caller checked");
        let touched = sandbox.core.ingest(payload);
        let mut outputs = Vec::new();
        let mut at = now;
        for id in touched {
            let Some(view) = sandbox.core.view(&id) else { continue };
            at += operator.cost_us;
            let mut ctx = OperatorContext::new(at, task_id, host);
            if let Some(updates) = operator.behavior.handle(view, &mut ctx) {
                for u in updates {
                    outputs.push((at, u));
                }
            }
            for u in ctx.into_outputs() {
                outputs.push((at, u));
            }
        }
        (at, outputs)
    }

    /// Launch completed: flip to Running and replay everything that queued
    /// during the launch window, FIFO.
    pub fn activate_task(
        &mut self,
        task_id: &str,
        now: LogicalTime,
        host: &mut dyn OperatorHost,
    ) -> Option<ActivationOutcome> {
        let sandbox = self.tasks.get_mut(task_id)?;
        if sandbox.state != TaskState::Launching {
            return None;
        }
        sandbox.state = TaskState::Running;
        let queued: Vec<Notification> = sandbox.pending.drain(..).collect();
        let mut outputs = Vec::new();
        let mut at = now;
        for n in queued {
            let (done, produced) = self.invoke(task_id, &n.payload, at, host);
            at = done;
            outputs.extend(produced);
        }
        Some(ActivationOutcome {
            report: TaskReport {
                worker_id: self.worker_id.clone(),
                task_id: task_id.to_string(),
                state: TaskState::Running,
                inputs: self.tasks[task_id].spec.inputs.clone(),
                at: now,
            },
            outputs,
        })
    }

    /// Notification intake for a task on this worker. `channel` is the
    /// sink channel the broker delivered to ("task/{id}").
    pub fn deliver(
        &mut self,
        channel: &str,
        notification: &Notification,
        now: LogicalTime,
        host: &mut dyn OperatorHost,
    ) -> DeliverOutcome {
        let mut out = DeliverOutcome::default();
        let Some(task_id) = channel.strip_prefix("task/").map(|s| s.to_string()) else {
            self.dropped_notifications += 1;
            return out;
        };
        match self.tasks.get_mut(&task_id) {
            Some(sandbox) => match sandbox.state {
                TaskState::Launching => {
                    sandbox.pending.push_back(notification.clone());
                }
                TaskState::Running => {
                    out.outputs = self.invoke(&task_id, &notification.payload, now, host).1;
                }
                _ => {
                    self.dropped_notifications += 1;
                }
            },
            None => {
                // Terminated or never launched here: count and move on.
                self.dropped_notifications += 1;
            }
        }
        out
    }

    pub fn heartbeat(&self, now: LogicalTime) -> WorkerRecord {
        WorkerRecord {
            worker_id: self.worker_id.clone(),
            node_id: self.node_id.clone(),
            geohash: self.geohash.clone(),
            is_cloud: self.is_cloud,
            capacity: self.capacity,
            load: self.tasks.len() as u32,
            last_heartbeat: now,
        }
    }
}
