//! Event log records. One [`Event`] becomes one JSON line.

use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::comms::{Message, MsgId, Performative};
use crate::domain::ContentCategory;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EventType {
    RunStart,
    Speak,
    Deliver,
    DirectiveFailure,
    ActionStart,
    ActionResume,
    ActionEnd,
    Error,
    RhythmChange,
    AlsPhase,
    RhythmCheck,
    Shock,
    CompressorRotation,
    Warning,
    RunEnd,
}

/// Actor/target used for records that do not belong to a team member.
pub const ENGINE: &str = "engine";
pub const PATIENT: &str = "patient";
pub const ALL: &str = "all";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Event {
    pub tick: u32,
    pub event_type: EventType,
    pub actor: String,
    pub target: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub msg_id: Option<MsgId>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub performative: Option<Performative>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub category: Option<ContentCategory>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub content: Option<Value>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub reply_to: Option<MsgId>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub retransmit_of: Option<MsgId>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub outcome: Option<String>,
}

impl Event {
    pub fn new(tick: u32, event_type: EventType, actor: &str, target: &str) -> Self {
        Event {
            tick,
            event_type,
            actor: actor.to_string(),
            target: target.to_string(),
            msg_id: None,
            performative: None,
            category: None,
            content: None,
            reply_to: None,
            retransmit_of: None,
            outcome: None,
        }
    }

    /// Copies the message header fields.
    pub fn with_message(mut self, m: &Message) -> Self {
        self.msg_id = Some(m.msg_id);
        self.performative = Some(m.performative);
        self.category = Some(m.category);
        self.reply_to = m.reply_to;
        self.retransmit_of = m.retransmit_of;
        self
    }

    pub fn with_content(mut self, content: Value) -> Self {
        self.content = Some(content);
        self
    }

    pub fn with_outcome(mut self, outcome: impl Into<String>) -> Self {
        self.outcome = Some(outcome.into());
        self
    }

    pub fn with_msg_id(mut self, id: MsgId) -> Self {
        self.msg_id = Some(id);
        self
    }

    pub fn to_json_line(&self) -> String {
        // an Event has only string keys and finite numbers
        serde_json::to_string(self).expect("event serialises")
    }
}

/// Serialises a log as JSON lines, newline-terminated.
pub fn to_jsonl(events: &[Event]) -> String {
    let mut out = String::new();
    for e in events {
        out.push_str(&e.to_json_line());
        out.push('\n');
    }
    out
}
