//! Wire messages between nodes.
//!
//! Everything that crosses a link is an [`Envelope`] around one [`Message`].
//! Serialization is canonical JSON (sorted keys, no floats beyond what the
//! values carry), and [`Envelope::wire_size`] of that encoding is the byte
//! count every traffic metric uses.

use serde::{Deserialize, Serialize};

use crate::broker::Notification;
use crate::context::{ContextEntity, EntityUpdate, LogicalTime, Selector};
use crate::discovery::{AvailabilityEvent, AvailabilityRegistration, AvailabilitySubscription};
use crate::function::FogFunction;
use crate::orchestrator::{DeploymentState, OrchestrationAction, WorkerRecord};
use crate::worker::TaskReport;

/// Where notifications for a subscription get delivered: a node plus an
/// opaque channel name the node dispatches on internally.
#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
pub struct NotificationSink {
    pub node_id: String,
    pub channel: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", content = "body")]
pub enum Message {
    #[serde(rename = "PUBLISH")]
    Publish { update: EntityUpdate },
    #[serde(rename = "QUERY")]
    Query { query_id: String, selector: Selector },
    #[serde(rename = "QUERY_RESP")]
    QueryResp {
        query_id: String,
        entities: Vec<ContextEntity>,
    },
    #[serde(rename = "SUBSCRIBE")]
    Subscribe {
        sub_id: String,
        selector: Selector,
        sink: NotificationSink,
    },
    #[serde(rename = "UNSUBSCRIBE")]
    Unsubscribe { sub_id: String },
    #[serde(rename = "NOTIFY")]
    Notify {
        channel: String,
        notification: Notification,
    },
    #[serde(rename = "REGISTER")]
    Register { registration: AvailabilityRegistration },
    #[serde(rename = "DEREGISTER")]
    Deregister {
        entity_id: String,
        provider_broker: String,
    },
    #[serde(rename = "SUB_AVAIL")]
    SubAvail { subscription: AvailabilitySubscription },
    #[serde(rename = "UNSUB_AVAIL")]
    UnsubAvail { sub_id: String },
    #[serde(rename = "AVAIL_EVENT")]
    AvailEvent { event: AvailabilityEvent },
    #[serde(rename = "QUERY_AVAIL")]
    QueryAvail { query_id: String, selector: Selector },
    #[serde(rename = "QUERY_AVAIL_RESP")]
    QueryAvailResp {
        query_id: String,
        registrations: Vec<AvailabilityRegistration>,
    },
    #[serde(rename = "REG_FUNC")]
    RegFunc { function: FogFunction },
    #[serde(rename = "ACTION")]
    Action { action: OrchestrationAction },
    #[serde(rename = "HEARTBEAT")]
    Heartbeat { record: WorkerRecord },
    #[serde(rename = "TASK_REPORT")]
    TaskReport { report: TaskReport },
    #[serde(rename = "DUMP_STATE")]
    DumpState,
    #[serde(rename = "DUMP_STATE_RESP")]
    DumpStateResp { state: DeploymentState },
}

impl Message {
    /// The wire tag, for per-type traffic breakdowns.
    pub fn kind(&self) -> &'static str {
        match self {
            Message::Publish { .. } => "PUBLISH",
            Message::Query { .. } => "QUERY",
            Message::QueryResp { .. } => "QUERY_RESP",
            Message::Subscribe { .. } => "SUBSCRIBE",
            Message::Unsubscribe { .. } => "UNSUBSCRIBE",
            Message::Notify { .. } => "NOTIFY",
            Message::Register { .. } => "REGISTER",
            Message::Deregister { .. } => "DEREGISTER",
            Message::SubAvail { .. } => "SUB_AVAIL",
            Message::UnsubAvail { .. } => "UNSUB_AVAIL",
            Message::AvailEvent { .. } => "AVAIL_EVENT",
            Message::QueryAvail { .. } => "QUERY_AVAIL",
            Message::QueryAvailResp { .. } => "QUERY_AVAIL_RESP",
            Message::RegFunc { .. } => "REG_FUNC",
            Message::Action { .. } => "ACTION",
            Message::Heartbeat { .. } => "HEARTBEAT",
            Message::TaskReport { .. } => "TASK_REPORT",
            Message::DumpState => "DUMP_STATE",
            Message::DumpStateResp { .. } => "DUMP_STATE_RESP",
        }
    }
}

/// One hop on a link. `src` and `dst` are node ids; `trace` correlates a
/// message chain (device update through to result notification) for
/// end-to-end latency measurements.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Envelope {
    pub src: String,
    pub dst: String,
    pub sent_at: LogicalTime,
    #[serde(skip_serializing_if = "Option::is_none")]
    #[serde(default)]
    pub trace: Option<String>,
    pub msg: Message,
}

impl Envelope {
    pub fn new(src: &str, dst: &str, sent_at: LogicalTime, msg: Message) -> Self {
        Envelope {
            src: src.to_string(),
            dst: dst.to_string(),
            sent_at,
            trace: None,
            msg,
        }
    }

    pub fn with_trace(mut self, trace: &str) -> Self {
        self.trace = Some(trace.to_string());
        self
    }

    /// Canonical encoding; every byte metric is derived from this.
    pub fn canonical_json(&self) -> String {
        serde_json::to_string(self).expect("envelope serializes")
    }

    pub fn wire_size(&self) -> u64 {
        self.canonical_json().len() as u64
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::context::GeoScope;

    #[test]
    fn tags_are_upper_snake() {
        let env = Envelope::new(
            "e1",
            "cloud",
            42,
            Message::Query {
                query_id: "q-1".into(),
                selector: Selector::for_type("Car"),
            },
        );
        let json = env.canonical_json();
        assert!(json.contains("\"type\":\"QUERY\""), "{json}");
        assert!(json.contains("\"body\""), "{json}");

        let back: Envelope = serde_json::from_str(&json).unwrap();
        assert_eq!(back, env);
    }

    #[test]
    fn size_tracks_payload() {
        let small = Envelope::new(
            "d1",
            "e1",
            0,
            Message::Publish {
                update: EntityUpdate::new("car-1", "Car"),
            },
        );
        let big = Envelope::new(
            "d1",
            "e1",
            0,
            Message::Publish {
                update: EntityUpdate::new("car-1", "Car").with_attribute(
                    crate::context::Attribute::new(
                        "frame",
                        crate::context::AttributeValue::Blob(vec![0u8; 1000]),
                        1,
                        "d1",
                    ),
                ),
            },
        );
        assert!(big.wire_size() > small.wire_size() + 1000);
    }

    #[test]
    fn trace_field_is_omitted_when_absent() {
        let env = Envelope::new("a", "b", 0, Message::DumpState);
        assert!(!env.canonical_json().contains("trace"));
        let traced = env.with_trace("t-1");
        assert!(traced.canonical_json().contains("\"trace\":\"t-1\""));
    }

    #[test]
    fn selector_scope_roundtrips_inside_messages() {
        let sel = Selector::for_type("Car").with_scope(GeoScope::GeohashPrefix {
            prefix: "u33".into(),
        });
        let msg = Message::QueryAvail {
            query_id: "q".into(),
            selector: sel,
        };
        let json = serde_json::to_string(&msg).unwrap();
        let back: Message = serde_json::from_str(&json).unwrap();
        assert_eq!(back, msg);
        assert_eq!(back.kind(), "QUERY_AVAIL");
    }
}
