//! Operator implementations and the registry tasks launch from.
//!
//! An operator is the code a task runs: a pure handler invoked once per
//! delivered entity view. Handlers publish results by returning updates or
//! through the context; they may also query the task's local broker and
//! add subscriptions. Determinism matters — given the same entity and the
//! same query answers, a handler must produce the same outputs, which is
//! what makes replay and migration safe.

use std::collections::BTreeMap;
use std::sync::Arc;

use crate::context::{
    geohash_encode, Attribute, AttributeValue, ContextEntity, EntityUpdate, LogicalTime, Selector,
};

/// Host services an operator may call during one invocation. The worker
/// wires these to the task's local broker; handlers never see raw sockets.
pub trait OperatorHost {
    fn query(&mut self, selector: &Selector) -> Vec<ContextEntity>;
    /// Ask for an additional input subscription for this task.
    fn subscribe(&mut self, selector: Selector);
}

/// Host that answers nothing; used in tests and replay.
pub struct NullHost;

impl OperatorHost for NullHost {
    fn query(&mut self, _selector: &Selector) -> Vec<ContextEntity> {
        Vec::new()
    }
    fn subscribe(&mut self, _selector: Selector) {}
}

/// Per-invocation context: publish/query/subscribe callbacks plus the
/// virtual timestamp of the invocation. Valid only for the call.
pub struct OperatorContext<'a> {
    pub now: LogicalTime,
    pub task_id: &'a str,
    host: &'a mut dyn OperatorHost,
    outputs: Vec<EntityUpdate>,
}

impl<'a> OperatorContext<'a> {
    pub fn new(now: LogicalTime, task_id: &'a str, host: &'a mut dyn OperatorHost) -> Self {
        OperatorContext {
            now,
            task_id,
            host,
            outputs: Vec::new(),
        }
    }

    pub fn publish(&mut self, update: EntityUpdate) {
        self.outputs.push(update);
    }

    pub fn query(&mut self, selector: &Selector) -> Vec<ContextEntity> {
        self.host.query(selector)
    }

    pub fn subscribe(&mut self, selector: Selector) {
        self.host.subscribe(selector);
    }

    /// Updates accumulated via `publish`, drained by the worker.
    pub fn into_outputs(self) -> Vec<EntityUpdate> {
        self.outputs
    }
}

/// The behavior of an operator: one invocation per delivered entity view.
pub trait OperatorBehavior: Send + Sync {
    fn handle(&self, entity: &ContextEntity, ctx: &mut OperatorContext<'_>)
        -> Option<Vec<EntityUpdate>>;
}

/// A named operator with its declared execution cost and capacity weight.
#[derive(Clone)]
pub struct Operator {
    pub name: String,
    pub behavior: Arc<dyn OperatorBehavior>,
    /// Simulated processing time per invocation, microseconds.
    pub cost_us: u64,
    /// Capacity slots one task of this operator occupies on a worker.
    pub weight: u32,
}

impl std::fmt::Debug for Operator {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Operator")
            .field("name", &self.name)
            .field("cost_us", &self.cost_us)
            .field("weight", &self.weight)
            .finish()
    }
}

/// Registry of launchable operators. Workers refuse tasks whose operator
/// is not registered, and function validation checks against it.
#[derive(Debug, Clone, Default)]
pub struct OperatorRegistry {
    ops: BTreeMap<String, Operator>,
}

impl OperatorRegistry {
    pub fn new() -> Self {
        Self::default()
    }

    /// Registry preloaded with the built-in operators.
    pub fn with_builtins() -> Self {
        let mut r = Self::new();
        r.register(Operator {
            name: "speed_estimation".into(),
            behavior: Arc::new(SpeedEstimation),
            cost_us: 2_000,
            weight: 1,
        });
        r.register(Operator {
            name: "dummy".into(),
            behavior: Arc::new(Dummy),
            cost_us: 100,
            weight: 1,
        });
        r.register(Operator {
            name: "echo".into(),
            behavior: Arc::new(Echo),
            cost_us: 500,
            weight: 1,
        });
        r.register(Operator {
            name: "parking_prediction".into(),
            behavior: Arc::new(ParkingPrediction),
            cost_us: 1_500,
            weight: 1,
        });
        r.register(Operator {
            name: "parking_recommendation".into(),
            behavior: Arc::new(ParkingRecommendation),
            cost_us: 3_000,
            weight: 1,
        });
        r
    }

    pub fn register(&mut self, op: Operator) {
        self.ops.insert(op.name.clone(), op);
    }

    pub fn get(&self, name: &str) -> Option<&Operator> {
        self.ops.get(name)
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.ops.keys().map(|s| s.as_str())
    }
}

// ---------------------------------------------------------------------------
// Built-ins

/// Publishes a `SpeedEstimate` per car update: rounded speed plus the
/// geohash zone the car is in. Stateless by design so tasks can migrate.
struct SpeedEstimation;

impl OperatorBehavior for SpeedEstimation {
    fn handle(
        &self,
        entity: &ContextEntity,
        ctx: &mut OperatorContext<'_>,
    ) -> Option<Vec<EntityUpdate>> {
        let speed = entity.attribute("speed_kmh")?.value.as_number()?;
        let mut update = EntityUpdate::new(format!("speed:{}", entity.id), "SpeedEstimate")
            .with_attribute(Attribute::new(
                "speed_est",
                AttributeValue::Number(speed.round()),
                ctx.now,
                ctx.task_id,
            ));
        if let Some(loc) = entity
            .attribute("location")
            .and_then(|a| a.value.as_geo())
            .or(entity.location)
        {
            if let Ok(zone) = geohash_encode(loc, 5) {
                update = update.with_attribute(Attribute::new(
                    "zone",
                    AttributeValue::Text(zone),
                    ctx.now,
                    ctx.task_id,
                ));
            }
            update = update.with_location(loc);
        }
        Some(vec![update])
    }
}

/// Does nothing. Stands in for workloads whose only interesting property is
/// their launch/terminate timing.
struct Dummy;

impl OperatorBehavior for Dummy {
    fn handle(&self, _: &ContextEntity, _: &mut OperatorContext<'_>) -> Option<Vec<EntityUpdate>> {
        None
    }
}

/// Republish the incoming view as an `Echo` entity. Handy in tests: the
/// output is a faithful function of the delivered state.
struct Echo;

impl OperatorBehavior for Echo {
    fn handle(
        &self,
        entity: &ContextEntity,
        ctx: &mut OperatorContext<'_>,
    ) -> Option<Vec<EntityUpdate>> {
        let mut update = EntityUpdate::new(format!("echo:{}", entity.id), "Echo");
        for attr in entity.attributes.values() {
            update.changed.insert(
                attr.name.clone(),
                Attribute::new(attr.name.clone(), attr.value.clone(), ctx.now, ctx.task_id),
            );
        }
        if let Some(loc) = entity.location {
            update = update.with_location(loc);
        }
        Some(vec![update])
    }
}

/// Estimate free spots per parking site from its occupancy figures.
struct ParkingPrediction;

impl OperatorBehavior for ParkingPrediction {
    fn handle(
        &self,
        entity: &ContextEntity,
        ctx: &mut OperatorContext<'_>,
    ) -> Option<Vec<EntityUpdate>> {
        let capacity = entity.attribute("capacity")?.value.as_number()?;
        let occupied = entity.attribute("occupied")?.value.as_number()?;
        let free = (capacity - occupied).max(0.0);
        let mut update = EntityUpdate::new(format!("forecast:{}", entity.id), "ParkingForecast")
            .with_attribute(Attribute::new(
                "free_spots",
                AttributeValue::Number(free.round()),
                ctx.now,
                ctx.task_id,
            ))
            .with_attribute(Attribute::new(
                "site",
                AttributeValue::Text(entity.id.clone()),
                ctx.now,
                ctx.task_id,
            ));
        if let Some(loc) = entity.location {
            update = update.with_location(loc);
        }
        Some(vec![update])
    }
}

/// Recommend the forecast with the most free spots, queried from the
/// task's local broker on every car update.
struct ParkingRecommendation;

impl OperatorBehavior for ParkingRecommendation {
    fn handle(
        &self,
        entity: &ContextEntity,
        ctx: &mut OperatorContext<'_>,
    ) -> Option<Vec<EntityUpdate>> {
        if entity.entity_type != "Car" {
            // Forecast updates refresh the view; recommendations are issued
            // on car movement.
            return None;
        }
        let forecasts = ctx.query(&Selector::for_type("ParkingForecast"));
        let best = forecasts
            .iter()
            .filter_map(|f| {
                let free = f.attribute("free_spots")?.value.as_number()?;
                let site = f.attribute("site")?.value.as_text()?.to_string();
                Some((site, free))
            })
            .max_by(|a, b| {
                a.1.partial_cmp(&b.1)
                    .unwrap_or(std::cmp::Ordering::Equal)
                    .then_with(|| b.0.cmp(&a.0))
            })?;
        Some(vec![EntityUpdate::new(
            format!("recommendation:{}", entity.id),
            "ParkingRecommendation",
        )
        .with_attribute(Attribute::new(
            "site",
            AttributeValue::Text(best.0),
            ctx.now,
            ctx.task_id,
        ))
        .with_attribute(Attribute::new(
            "free_spots",
            AttributeValue::Number(best.1),
            ctx.now,
            ctx.task_id,
        ))])
    }
}
