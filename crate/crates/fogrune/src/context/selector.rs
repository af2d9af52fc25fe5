//! Content-based selection: which entities a consumer cares about.

use serde::{Deserialize, Serialize};

use crate::context::entity::{AttributeValue, ContextEntity};
use crate::context::geo::GeoScope;
use crate::error::{Diagnostic, FogError};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ConstraintOp {
    Eq,
    Ne,
    Lt,
    Le,
    Gt,
    Ge,
}

impl ConstraintOp {
    pub fn is_ordering(self) -> bool {
        !matches!(self, ConstraintOp::Eq | ConstraintOp::Ne)
    }
}

/// Value predicate on a single attribute. Ordering operators require a
/// numeric literal; equality accepts numbers and text.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Constraint {
    pub attribute: String,
    pub op: ConstraintOp,
    pub literal: AttributeValue,
}

impl Constraint {
    pub fn validate(&self) -> Result<(), FogError> {
        if self.attribute.is_empty() {
            return Err(FogError::InvalidConfig("constraint with empty attribute".into()));
        }
        match (&self.op, &self.literal) {
            (op, AttributeValue::Number(_)) if op.is_ordering() => Ok(()),
            (op, _) if op.is_ordering() => Err(FogError::InvalidConfig(format!(
                "ordering constraint on {} requires a number literal",
                self.attribute
            ))),
            (_, AttributeValue::Number(_) | AttributeValue::Text(_)) => Ok(()),
            _ => Err(FogError::InvalidConfig(format!(
                "constraint on {} must use a number or text literal",
                self.attribute
            ))),
        }
    }

    /// Evaluate against an entity. An absent attribute fails the constraint.
    pub fn holds(&self, entity: &ContextEntity) -> bool {
        let Some(attr) = entity.attribute(&self.attribute) else {
            return false;
        };
        match self.op {
            ConstraintOp::Eq => attr.value == self.literal,
            ConstraintOp::Ne => attr.value != self.literal,
            op => match (attr.value.as_number(), self.literal.as_number()) {
                (Some(a), Some(b)) => match op {
                    ConstraintOp::Lt => a < b,
                    ConstraintOp::Le => a <= b,
                    ConstraintOp::Gt => a > b,
                    ConstraintOp::Ge => a >= b,
                    _ => unreachable!(),
                },
                _ => false,
            },
        }
    }
}

/// What to select (type, optional id, value constraints, geo scope) and
/// which attributes to receive (`attribute_set`; empty means all).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Selector {
    pub entity_type: String,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub attribute_set: Vec<String>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub constraints: Vec<Constraint>,
    #[serde(default, skip_serializing_if = "is_global")]
    pub scope: GeoScope,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub entity_id: Option<String>,
}

fn is_global(scope: &GeoScope) -> bool {
    matches!(scope, GeoScope::Global)
}

impl Selector {
    pub fn for_type(entity_type: impl Into<String>) -> Self {
        Selector {
            entity_type: entity_type.into(),
            attribute_set: Vec::new(),
            constraints: Vec::new(),
            scope: GeoScope::Global,
            entity_id: None,
        }
    }

    pub fn with_id(mut self, id: impl Into<String>) -> Self {
        self.entity_id = Some(id.into());
        self
    }

    pub fn with_attributes(mut self, attrs: &[&str]) -> Self {
        self.attribute_set = attrs.iter().map(|s| s.to_string()).collect();
        self
    }

    pub fn with_scope(mut self, scope: GeoScope) -> Self {
        self.scope = scope;
        self
    }

    pub fn with_constraint(mut self, c: Constraint) -> Self {
        self.constraints.push(c);
        self
    }

    /// Full match test: type, id (when set), every constraint, and scope.
    /// An entity without a location matches only `Global` scopes.
    pub fn matches(&self, entity: &ContextEntity) -> bool {
        if entity.entity_type != self.entity_type {
            return false;
        }
        if let Some(id) = &self.entity_id {
            if *id != entity.id {
                return false;
            }
        }
        if !self.constraints.iter().all(|c| c.holds(entity)) {
            return false;
        }
        match (&self.scope, entity.location) {
            (GeoScope::Global, _) => true,
            (_, None) => false,
            (scope, Some(loc)) => scope.contains(loc),
        }
    }

    pub fn diagnostics(&self, field: &str) -> Vec<Diagnostic> {
        let mut out = Vec::new();
        if self.entity_type.is_empty() {
            out.push(Diagnostic {
                field: format!("{field}.entity_type"),
                message: "must be non-empty".into(),
            });
        }
        for (i, c) in self.constraints.iter().enumerate() {
            if let Err(e) = c.validate() {
                out.push(Diagnostic {
                    field: format!("{field}.constraints[{i}]"),
                    message: e.to_string(),
                });
            }
        }
        if let Err(e) = self.scope.validate() {
            out.push(Diagnostic {
                field: format!("{field}.scope"),
                message: e.to_string(),
            });
        }
        out
    }
}

/// Free-function form of `Selector::matches`.
pub fn matches(entity: &ContextEntity, selector: &Selector) -> bool {
    selector.matches(entity)
}
