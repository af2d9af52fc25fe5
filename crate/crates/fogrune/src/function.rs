//! Fog function specifications: what to react to, how to group work,
//! where the function may run.

use serde::{Deserialize, Serialize};

use crate::context::{AttributeValue, GeoScope, Selector};
use crate::discovery::AvailabilityRegistration;
use crate::error::{Diagnostic, FogError};
use crate::operator::OperatorRegistry;

/// Task granularity: how availability events map to task instances.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum GroupBy {
    /// One task per selected entity id.
    PerEntityId,
    /// One task for the whole entity type.
    PerEntityType,
    /// One task per distinct value of the named attribute.
    PerAttributeValue { attribute: String },
}

impl GroupBy {
    /// Keyed granularities route by a string key; `PerEntityType` broadcasts.
    pub fn is_keyed(&self) -> bool {
        !matches!(self, GroupBy::PerEntityType)
    }
}

/// One input stream of a function.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct InputSelector {
    pub selected_type: String,
    /// Attributes the function needs delivered (empty = whole entity).
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub attribute_set: Vec<String>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub constraints: Vec<crate::context::Constraint>,
    pub group_by: GroupBy,
    /// When true the function's geoscope restricts this input.
    #[serde(default)]
    pub scoped: bool,
}

impl InputSelector {
    pub fn new(selected_type: impl Into<String>, group_by: GroupBy) -> Self {
        InputSelector {
            selected_type: selected_type.into(),
            attribute_set: Vec::new(),
            constraints: Vec::new(),
            group_by,
            scoped: false,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum Slo {
    MinLatency,
    MinBandwidth,
    #[default]
    None,
}

pub const DEFAULT_PRIORITY: u8 = 50;

fn default_priority() -> u8 {
    DEFAULT_PRIORITY
}

/// A deployable fog function: operator + input declarations + policy knobs.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FogFunction {
    pub name: String,
    /// Name of a registered operator implementation.
    pub operator: String,
    pub inputs: Vec<InputSelector>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub output_types: Vec<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub geoscope: Option<GeoScope>,
    /// 0..=100; higher priority tasks are evicted last under overload.
    #[serde(default = "default_priority")]
    pub priority: u8,
    #[serde(default)]
    pub slo: Slo,
}

impl FogFunction {
    pub fn new(name: impl Into<String>, operator: impl Into<String>, inputs: Vec<InputSelector>) -> Self {
        FogFunction {
            name: name.into(),
            operator: operator.into(),
            inputs,
            output_types: Vec::new(),
            geoscope: None,
            priority: DEFAULT_PRIORITY,
            slo: Slo::None,
        }
    }
}

/// Identity of a task instance: function name plus routing key.
#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
pub struct GroupKey {
    pub function: String,
    pub key: String,
}

impl std::fmt::Display for GroupKey {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "{}/{}", self.function, self.key)
    }
}

/// Structural validation of a function spec against an operator registry.
pub fn validate(f: &FogFunction, registry: &OperatorRegistry) -> Vec<Diagnostic> {
    let mut out = Vec::new();
    let mut push = |field: &str, message: String| {
        out.push(Diagnostic {
            field: field.to_string(),
            message,
        })
    };
    if f.name.is_empty() {
        push("name", "must be non-empty".into());
    }
    if f.inputs.is_empty() {
        push("inputs", "at least one input selector is required".into());
    }
    if registry.get(&f.operator).is_none() {
        push("operator", format!("operator {:?} is not registered", f.operator));
    }
    if f.priority > 100 {
        push("priority", format!("{} out of 0..=100", f.priority));
    }
    if let Some(scope) = &f.geoscope {
        if let Err(e) = scope.validate() {
            push("geoscope", e.to_string());
        }
    }
    for (i, input) in f.inputs.iter().enumerate() {
        let field = format!("inputs[{i}]");
        if input.selected_type.is_empty() {
            push(&field, "selected_type must be non-empty".into());
        }
        if let GroupBy::PerAttributeValue { attribute } = &input.group_by {
            if attribute.is_empty() {
                push(&field, "group_by attribute must be non-empty".into());
            }
        }
        for (j, c) in input.constraints.iter().enumerate() {
            if let Err(e) = c.validate() {
                push(&format!("{field}.constraints[{j}]"), e.to_string());
            }
        }
        if input.scoped && f.geoscope.is_none() {
            push(&field, "scoped input requires a function geoscope".into());
        }
    }
    out
}

/// The scope an input actually selects under: the function geoscope when the
/// input opts in and one is present, `Global` otherwise.
pub fn effective_scope(f: &FogFunction, input: &InputSelector) -> GeoScope {
    if input.scoped {
        if let Some(scope) = &f.geoscope {
            return scope.clone();
        }
    }
    GeoScope::Global
}

/// Availability-layer selector for an input (names and scope; values are
/// enforced later at the brokers).
pub fn availability_selector(f: &FogFunction, input: &InputSelector) -> Selector {
    Selector {
        entity_type: input.selected_type.clone(),
        attribute_set: input.attribute_set.clone(),
        constraints: input.constraints.clone(),
        scope: effective_scope(f, input),
        entity_id: None,
    }
}

/// Broker-layer selector for one concrete entity feeding a task.
pub fn entity_selector(f: &FogFunction, input: &InputSelector, entity_id: &str) -> Selector {
    let mut sel = availability_selector(f, input);
    sel.entity_id = Some(entity_id.to_string());
    sel
}

/// Derive the task routing key for an availability registration on the given
/// input. `PerAttributeValue` needs the current value, which the caller
/// fetches from the provider broker (`attr_value_hint`); without it the
/// event is unroutable.
pub fn group_key(
    f: &FogFunction,
    input_index: usize,
    reg: &AvailabilityRegistration,
    attr_value_hint: Option<&AttributeValue>,
) -> Result<GroupKey, FogError> {
    let input = f.inputs.get(input_index).ok_or_else(|| {
        FogError::Unroutable(format!(
            "function {} has no input {input_index}",
            f.name
        ))
    })?;
    let key = match &input.group_by {
        GroupBy::PerEntityId => reg.entity_id.clone(),
        GroupBy::PerEntityType => reg.entity_type.clone(),
        GroupBy::PerAttributeValue { attribute } => match attr_value_hint {
            Some(v) => v.canonical_string(),
            None => {
                return Err(FogError::Unroutable(format!(
                    "attribute {attribute} of {} not available for keying",
                    reg.entity_id
                )))
            }
        },
    };
    Ok(GroupKey {
        function: f.name.clone(),
        key,
    })
}
