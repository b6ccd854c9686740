//! The spoken channel: message types, the FIPA performative taxonomy, the
//! mishear model, speaker arbitration and the per-run [`Channel`] that tracks
//! acknowledgements, timeouts and retransmissions.

use std::collections::VecDeque;
use std::fmt;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::domain::{ActionId, AgentId, Catalog, ContentCategory, Drug, RhythmKind};
use crate::error::{Result, SimError};

pub type MsgId = u64;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum Performative {
    Request,
    RequestWhen,
    QueryRef,
    Inform,
    Confirm,
    Agree,
    Refuse,
    Failure,
    NotUnderstood,
}

impl Performative {
    pub const ALL: [Performative; 9] = [
        Performative::Request,
        Performative::RequestWhen,
        Performative::QueryRef,
        Performative::Inform,
        Performative::Confirm,
        Performative::Agree,
        Performative::Refuse,
        Performative::Failure,
        Performative::NotUnderstood,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            Performative::Request => "Request",
            Performative::RequestWhen => "RequestWhen",
            Performative::QueryRef => "QueryRef",
            Performative::Inform => "Inform",
            Performative::Confirm => "Confirm",
            Performative::Agree => "Agree",
            Performative::Refuse => "Refuse",
            Performative::Failure => "Failure",
            Performative::NotUnderstood => "NotUnderstood",
        }
    }

    pub fn parse(s: &str) -> Option<Performative> {
        Performative::ALL.into_iter().find(|p| p.as_str() == s)
    }

    /// Performatives that open an exchange and expect the receiver to answer.
    pub fn is_initiating(self) -> bool {
        matches!(
            self,
            Performative::Request
                | Performative::RequestWhen
                | Performative::QueryRef
                | Performative::Inform
        )
    }
}

impl fmt::Display for Performative {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

/// Aggregate FIPA category used in communication analysis.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum FipaCategory {
    PerfActions,
    RequestInfo,
    PassingInfo,
    ErrorHand,
}

impl FipaCategory {
    pub const ALL: [FipaCategory; 4] = [
        FipaCategory::PerfActions,
        FipaCategory::RequestInfo,
        FipaCategory::PassingInfo,
        FipaCategory::ErrorHand,
    ];
}

pub fn fipa_category(p: Performative) -> FipaCategory {
    match p {
        Performative::Request
        | Performative::RequestWhen
        | Performative::Agree
        | Performative::Refuse => FipaCategory::PerfActions,
        Performative::QueryRef => FipaCategory::RequestInfo,
        Performative::Inform | Performative::Confirm => FipaCategory::PassingInfo,
        Performative::Failure | Performative::NotUnderstood => FipaCategory::ErrorHand,
    }
}

/// Situation facts agents hold beliefs about.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(tag = "key", content = "dose", rename_all = "snake_case")]
pub enum BeliefKey {
    Rhythm,
    Pulse,
    PadsAttached,
    IvInstalled,
    AirwaySecured,
    DrugPrepared(u32),
    DrugGiven(u32),
    Compressor,
}

impl BeliefKey {
    pub fn category(self) -> ContentCategory {
        match self {
            BeliefKey::Rhythm | BeliefKey::Pulse => ContentCategory::PatientStatus,
            BeliefKey::PadsAttached | BeliefKey::IvInstalled => ContentCategory::EquipmentStatus,
            BeliefKey::AirwaySecured | BeliefKey::Compressor => ContentCategory::MedicalAction,
            BeliefKey::DrugPrepared(_) | BeliefKey::DrugGiven(_) => {
                ContentCategory::MedicineAdministration
            }
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(untagged)]
pub enum BeliefValue {
    Bool(bool),
    Rhythm(RhythmKind),
    Agent(AgentId),
    Unknown,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Signal {
    StandClear,
    StopResuscitation,
}

/// An action a message asks for, agrees to or reports on.
#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct ActionContent {
    pub action: ActionId,
    /// Dose number for drug actions, block number for ventilation cues.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub seq: Option<u32>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub drug: Option<Drug>,
    /// Conjunction of beliefs that must hold before a RequestWhen fires.
    #[serde(skip_serializing_if = "Vec::is_empty", default)]
    pub when: Vec<BeliefKey>,
}

impl ActionContent {
    pub fn new(action: ActionId) -> Self {
        ActionContent { action, seq: None, drug: None, when: Vec::new() }
    }

    pub fn with_seq(mut self, seq: u32) -> Self {
        self.seq = Some(seq);
        self
    }

    pub fn with_drug(mut self, drug: Drug) -> Self {
        self.drug = Some(drug);
        self
    }

    pub fn when(mut self, keys: Vec<BeliefKey>) -> Self {
        self.when = keys;
        self
    }

    /// Identity used to recognise repeated requests for the same work.
    pub fn same_work(&self, other: &ActionContent) -> bool {
        self.action == other.action && self.seq == other.seq && self.drug == other.drug
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Content {
    Action(ActionContent),
    Query(BeliefKey),
    Info { key: BeliefKey, value: BeliefValue },
    Signal(Signal),
}

impl Content {
    pub fn category(&self, catalog: &Catalog) -> ContentCategory {
        match self {
            Content::Action(a) => catalog
                .find(a.action)
                .map(|s| s.category)
                .unwrap_or(ContentCategory::MedicalAction),
            Content::Query(k) | Content::Info { key: k, .. } => k.category(),
            Content::Signal(_) => ContentCategory::MedicalAction,
        }
    }

    /// A plausible but wrong version of this content, as a listener who
    /// misheard would take it. Always differs from `self`.
    pub fn corrupted<R: Rng + ?Sized>(&self, catalog: &Catalog, rng: &mut R) -> Content {
        match self {
            Content::Action(a) => {
                let others: Vec<ActionId> = catalog
                    .specs()
                    .iter()
                    .map(|s| s.action_id)
                    .filter(|id| *id != a.action)
                    .collect();
                let mut wrong = a.clone();
                if others.is_empty() {
                    wrong.seq = Some(a.seq.map_or(0, |s| s.wrapping_add(1)));
                } else {
                    wrong.action = others[rng.gen_range(0..others.len())];
                }
                Content::Action(wrong)
            }
            Content::Info { key, value } => {
                let value = match *value {
                    BeliefValue::Bool(b) => BeliefValue::Bool(!b),
                    BeliefValue::Rhythm(k) => {
                        let others: Vec<RhythmKind> =
                            RhythmKind::ALL.into_iter().filter(|o| *o != k).collect();
                        BeliefValue::Rhythm(others[rng.gen_range(0..others.len())])
                    }
                    BeliefValue::Agent(a) => BeliefValue::Agent(AgentId((a.0 + 1) % 4)),
                    BeliefValue::Unknown => BeliefValue::Bool(true),
                };
                Content::Info { key: *key, value }
            }
            Content::Query(key) => {
                const KEYS: [BeliefKey; 5] = [
                    BeliefKey::Rhythm,
                    BeliefKey::Pulse,
                    BeliefKey::PadsAttached,
                    BeliefKey::IvInstalled,
                    BeliefKey::AirwaySecured,
                ];
                let others: Vec<BeliefKey> = KEYS.into_iter().filter(|k| k != key).collect();
                Content::Query(others[rng.gen_range(0..others.len())])
            }
            Content::Signal(Signal::StandClear) => Content::Signal(Signal::StopResuscitation),
            Content::Signal(Signal::StopResuscitation) => Content::Signal(Signal::StandClear),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Message {
    pub msg_id: MsgId,
    pub sender: AgentId,
    pub receivers: Vec<AgentId>,
    pub performative: Performative,
    pub content: Content,
    pub category: ContentCategory,
    pub reply_to: Option<MsgId>,
    /// Set on retransmissions: the original message being repeated.
    pub retransmit_of: Option<MsgId>,
    /// Tick at which the message was spoken; `None` while still queued.
    pub tick_sent: Option<u32>,
}

impl Message {
    /// Directed messages have exactly one intended receiver.
    pub fn is_directed(&self) -> bool {
        self.receivers.len() == 1
    }

    pub fn addresses(&self, agent: AgentId) -> bool {
        self.receivers.contains(&agent)
    }

    /// The exchange this message belongs to, following retransmission links.
    pub fn original_id(&self) -> MsgId {
        self.retransmit_of.unwrap_or(self.msg_id)
    }

    /// Checks the structural invariants of a message.
    pub fn validate(&self) -> Result<()> {
        if self.receivers.is_empty() {
            return Err(SimError::Argument(format!("message {} has no receivers", self.msg_id)));
        }
        if self.receivers.contains(&self.sender) {
            return Err(SimError::Argument(format!(
                "message {} lists its sender as a receiver",
                self.msg_id
            )));
        }
        if matches!(self.performative, Performative::Confirm | Performative::NotUnderstood)
            && self.reply_to.is_none()
        {
            return Err(SimError::Argument(format!(
                "{} message {} lacks reply_to",
                self.performative, self.msg_id
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ProtocolVariant {
    Baseline,
    ClosedLoop,
    LeaderMediated,
    ClosedLoopLeaderMediated,
}

impl ProtocolVariant {
    pub const ALL: [ProtocolVariant; 4] = [
        ProtocolVariant::Baseline,
        ProtocolVariant::ClosedLoop,
        ProtocolVariant::LeaderMediated,
        ProtocolVariant::ClosedLoopLeaderMediated,
    ];

    pub fn closed_loop(self) -> bool {
        matches!(self, ProtocolVariant::ClosedLoop | ProtocolVariant::ClosedLoopLeaderMediated)
    }

    pub fn leader_mediated(self) -> bool {
        matches!(
            self,
            ProtocolVariant::LeaderMediated | ProtocolVariant::ClosedLoopLeaderMediated
        )
    }

    pub fn as_str(self) -> &'static str {
        match self {
            ProtocolVariant::Baseline => "baseline",
            ProtocolVariant::ClosedLoop => "closed_loop",
            ProtocolVariant::LeaderMediated => "leader_mediated",
            ProtocolVariant::ClosedLoopLeaderMediated => "closed_loop_leader_mediated",
        }
    }

    pub fn parse(s: &str) -> Option<ProtocolVariant> {
        ProtocolVariant::ALL.into_iter().find(|v| v.as_str() == s)
    }
}

impl fmt::Display for ProtocolVariant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ProtocolConfig {
    pub variant: ProtocolVariant,
    pub base_mishear: f64,
    /// Added mishear probability per extra simultaneous speaker.
    pub noise_coefficient: f64,
    pub familiarity_bonus: f64,
    /// Seconds a closed-loop sender waits for the read-back.
    pub ack_timeout: u32,
    pub max_retransmits: u32,
    /// Whether read-backs themselves go through the mishear model.
    pub ack_mishear: bool,
    /// Seconds a sender without read-back waits for any answer before it
    /// considers the request hung and re-issues it.
    pub reply_timeout: u32,
    /// Probability that a misheard message is acted on as heard instead of
    /// prompting a request to repeat.
    pub corrupted_execution: f64,
}

impl Default for ProtocolConfig {
    fn default() -> Self {
        ProtocolConfig {
            variant: ProtocolVariant::Baseline,
            base_mishear: 0.08,
            noise_coefficient: 0.15,
            familiarity_bonus: 0.5,
            ack_timeout: 4,
            max_retransmits: 3,
            ack_mishear: true,
            reply_timeout: 10,
            corrupted_execution: 0.5,
        }
    }
}

pub const MAX_MISHEAR: f64 = 0.95;

impl ProtocolConfig {
    /// Probability that a listener misses or mishears one utterance.
    pub fn mishear_probability(&self, familiarity: f64, speakers: usize) -> f64 {
        let extra = speakers.saturating_sub(1) as f64;
        (self.base_mishear * (1.0 - self.familiarity_bonus * familiarity)
            + self.noise_coefficient * extra)
            .clamp(0.0, MAX_MISHEAR)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Reception {
    Heard,
    Misheard,
    Unheard,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct DeliveryOutcome {
    pub listener: AgentId,
    pub result: Reception,
    /// The listener is one of the intended receivers.
    pub addressed: bool,
}

impl DeliveryOutcome {
    pub fn overheard(&self) -> bool {
        !self.addressed && self.result == Reception::Heard
    }
}

/// Decides, independently for each listener, whether `msg` got through.
/// Draws exactly one uniform per listener.
pub fn deliver<R: Rng + ?Sized>(
    msg: &Message,
    listeners: &[(AgentId, f64)],
    speakers_this_tick: usize,
    cfg: &ProtocolConfig,
    rng: &mut R,
) -> Vec<DeliveryOutcome> {
    let immune = msg.performative == Performative::Confirm && !cfg.ack_mishear;
    listeners
        .iter()
        .map(|&(listener, familiarity)| {
            let u: f64 = rng.gen();
            let p_bad = if immune {
                0.0
            } else {
                cfg.mishear_probability(familiarity, speakers_this_tick.max(1))
            };
            let result = if u < p_bad / 2.0 {
                Reception::Misheard
            } else if u < p_bad {
                Reception::Unheard
            } else {
                Reception::Heard
            };
            DeliveryOutcome { listener, result, addressed: msg.addresses(listener) }
        })
        .collect()
}

/// A message about to be queued; ids are assigned by the [`Channel`].
#[derive(Debug, Clone, PartialEq)]
pub struct Draft {
    pub sender: AgentId,
    pub receivers: Vec<AgentId>,
    pub performative: Performative,
    pub content: Content,
    pub category: ContentCategory,
    pub reply_to: Option<MsgId>,
}

impl Draft {
    /// A reply from `from` to `original`'s sender.
    pub fn reply(
        from: AgentId,
        original: &Message,
        performative: Performative,
        content: Content,
        category: ContentCategory,
    ) -> Draft {
        Draft {
            sender: from,
            receivers: vec![original.sender],
            performative,
            content,
            category,
            reply_to: Some(original.msg_id),
        }
    }
}

/// Receiver-side read-back under closed-loop protocols.
pub fn closed_loop_exchange<R: Rng + ?Sized>(
    original: &Message,
    outcome: &DeliveryOutcome,
    cfg: &ProtocolConfig,
    catalog: &Catalog,
    rng: &mut R,
) -> Result<Vec<Draft>> {
    if !cfg.variant.closed_loop() {
        return Err(SimError::ProtocolMisuse(format!(
            "closed-loop read-back requested under {}",
            cfg.variant
        )));
    }
    if !outcome.addressed || !original.is_directed() {
        return Ok(Vec::new());
    }
    let echo = match outcome.result {
        Reception::Heard => original.content.clone(),
        Reception::Misheard => original.content.corrupted(catalog, rng),
        Reception::Unheard => return Ok(Vec::new()),
    };
    Ok(vec![Draft::reply(
        outcome.listener,
        original,
        Performative::Confirm,
        echo,
        original.category,
    )])
}

/// What a listener without read-back does after mishearing a directed message.
#[derive(Debug, Clone, PartialEq)]
pub enum MishearResponse {
    Nothing,
    /// Ask the sender to repeat.
    AskRepeat(Draft),
    /// Act on the corrupted content as if it were correct.
    ActOnCorrupted(Content),
}

pub fn baseline_mishear_response<R: Rng + ?Sized>(
    original: &Message,
    outcome: &DeliveryOutcome,
    cfg: &ProtocolConfig,
    catalog: &Catalog,
    rng: &mut R,
) -> Result<MishearResponse> {
    if cfg.variant.closed_loop() && original.performative != Performative::QueryRef {
        return Err(SimError::ProtocolMisuse(format!(
            "repeat-request repair used under {}",
            cfg.variant
        )));
    }
    if !outcome.addressed || outcome.result != Reception::Misheard {
        return Ok(MishearResponse::Nothing);
    }
    let u: f64 = rng.gen();
    if u < cfg.corrupted_execution {
        Ok(MishearResponse::ActOnCorrupted(original.content.corrupted(catalog, rng)))
    } else {
        Ok(MishearResponse::AskRepeat(Draft::reply(
            outcome.listener,
            original,
            Performative::NotUnderstood,
            original.content.clone(),
            original.category,
        )))
    }
}

/// Splits the queued utterances of this tick into granted and deferred.
///
/// `pending` holds at most one head-of-queue message per agent.
/// `replies_to_own` reports whether a message answers something that was
/// addressed to its sender.
pub fn arbitrate_speakers<'a>(
    pending: &[&'a Message],
    variant: ProtocolVariant,
    leader: AgentId,
    replies_to_own: impl Fn(&Message) -> bool,
) -> (Vec<&'a Message>, Vec<&'a Message>) {
    if !variant.leader_mediated() {
        return (pending.to_vec(), Vec::new());
    }
    let leader_pending = pending.iter().any(|m| m.sender == leader);
    let mut granted = Vec::new();
    let mut deferred = Vec::new();
    let mut open_floor: Option<&'a Message> = None;
    for &m in pending {
        if m.sender == leader || (m.reply_to.is_some() && replies_to_own(m)) {
            granted.push(m);
        } else if !leader_pending && open_floor.map_or(true, |o| m.msg_id < o.msg_id) {
            if let Some(prev) = open_floor.replace(m) {
                deferred.push(prev);
            }
        } else {
            deferred.push(m);
        }
    }
    if let Some(m) = open_floor {
        granted.push(m);
    }
    granted.sort_by_key(|m| m.sender);
    deferred.sort_by_key(|m| m.msg_id);
    (granted, deferred)
}

/// Outstanding exchange awaiting an answer.
#[derive(Debug, Clone, PartialEq)]
pub struct Exchange {
    pub original: MsgId,
    pub sender: AgentId,
    pub receiver: AgentId,
    pub transmissions: Vec<MsgId>,
    pub last_spoken: Option<u32>,
    pub retransmits: u32,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FailureReason {
    /// No answer before the reply timeout.
    Hung,
    /// Read-back never matched within the retransmission budget.
    RetransmitLimit,
}

#[derive(Debug, Clone, PartialEq)]
pub enum ChannelEvent {
    Delivered { original: MsgId },
    Retransmitted { original: MsgId, msg_id: MsgId },
    Failed { original: MsgId, sender: AgentId, receiver: AgentId, reason: FailureReason },
}

/// Per-run message bookkeeping: id allocation, outboxes, and exchanges.
#[derive(Debug, Clone)]
pub struct Channel {
    cfg: ProtocolConfig,
    history: Vec<Message>,
    outboxes: Vec<VecDeque<MsgId>>,
    exchanges: Vec<Exchange>,
}

impl Channel {
    pub fn new(cfg: ProtocolConfig, team_size: usize) -> Self {
        Channel {
            cfg,
            history: Vec::new(),
            outboxes: vec![VecDeque::new(); team_size],
            exchanges: Vec::new(),
        }
    }

    pub fn config(&self) -> &ProtocolConfig {
        &self.cfg
    }

    pub fn message(&self, id: MsgId) -> Option<&Message> {
        self.history.get(id as usize)
    }

    fn push(&mut self, draft: Draft, retransmit_of: Option<MsgId>, front: bool) -> MsgId {
        let msg_id = self.history.len() as MsgId;
        let sender = draft.sender;
        let is_reply = draft.reply_to.is_some();
        self.history.push(Message {
            msg_id,
            sender,
            receivers: draft.receivers,
            performative: draft.performative,
            content: draft.content,
            category: draft.category,
            reply_to: draft.reply_to,
            retransmit_of,
            tick_sent: None,
        });
        let history = &self.history;
        let q = &mut self.outboxes[sender.index()];
        if front {
            q.push_front(msg_id);
        } else if is_reply {
            // answers go out before the sender's own new topics
            let at = q
                .iter()
                .position(|id| history[*id as usize].reply_to.is_none())
                .unwrap_or(q.len());
            q.insert(at, msg_id);
        } else {
            q.push_back(msg_id);
        }
        msg_id
    }

    /// Queued replies of every agent, in agent order.
    pub fn queued_replies(&self) -> Vec<MsgId> {
        self.outboxes
            .iter()
            .flat_map(|q| q.iter().copied())
            .filter(|id| self.history[*id as usize].reply_to.is_some())
            .collect()
    }

    /// Queues a new utterance. Replies go ahead of queued new topics.
    pub fn send(&mut self, draft: Draft) -> MsgId {
        self.push(draft, None, false)
    }

    pub fn outbox_len(&self, agent: AgentId) -> usize {
        self.outboxes[agent.index()].len()
    }

    pub fn is_quiet(&self) -> bool {
        self.outboxes.iter().all(VecDeque::is_empty)
    }

    pub fn queued(&self, agent: AgentId) -> impl Iterator<Item = &Message> {
        self.outboxes[agent.index()].iter().map(|id| &self.history[*id as usize])
    }

    /// Head-of-queue message of each agent, in agent order.
    pub fn heads(&self) -> Vec<&Message> {
        self.outboxes
            .iter()
            .filter_map(|q| q.front())
            .map(|id| &self.history[*id as usize])
            .collect()
    }

    fn tracked(&self, msg: &Message) -> bool {
        if !msg.is_directed() {
            return false;
        }
        if self.cfg.variant.closed_loop() {
            matches!(
                msg.performative,
                Performative::Request | Performative::RequestWhen | Performative::Inform
            )
        } else {
            // a RequestWhen is stored silently, so there is no Agree to wait for
            msg.performative == Performative::Request
        }
    }

    /// Marks granted messages as spoken and starts their reply timers.
    pub fn mark_spoken(&mut self, ids: &[MsgId], tick: u32) {
        for &id in ids {
            let sender = self.history[id as usize].sender;
            let q = &mut self.outboxes[sender.index()];
            if let Some(pos) = q.iter().position(|x| *x == id) {
                q.remove(pos);
            }
            self.history[id as usize].tick_sent = Some(tick);
            let msg = &self.history[id as usize];
            if !self.tracked(msg) {
                continue;
            }
            let original = msg.original_id();
            if let Some(ex) = self.exchanges.iter_mut().find(|e| e.original == original) {
                ex.last_spoken = Some(tick);
            } else if msg.retransmit_of.is_none() {
                self.exchanges.push(Exchange {
                    original,
                    sender: msg.sender,
                    receiver: msg.receivers[0],
                    transmissions: vec![id],
                    last_spoken: Some(tick),
                    retransmits: 0,
                });
            }
        }
    }

    fn retransmit_or_fail(&mut self, idx: usize, reason: FailureReason) -> ChannelEvent {
        let ex = &self.exchanges[idx];
        if ex.retransmits < self.cfg.max_retransmits {
            let orig = &self.history[ex.original as usize];
            let draft = Draft {
                sender: orig.sender,
                receivers: orig.receivers.clone(),
                performative: orig.performative,
                content: orig.content.clone(),
                category: orig.category,
                reply_to: orig.reply_to,
            };
            let original = ex.original;
            let msg_id = self.push(draft, Some(original), true);
            let ex = &mut self.exchanges[idx];
            ex.retransmits += 1;
            ex.transmissions.push(msg_id);
            ex.last_spoken = None;
            ChannelEvent::Retransmitted { original, msg_id }
        } else {
            let ex = self.exchanges.remove(idx);
            ChannelEvent::Failed {
                original: ex.original,
                sender: ex.sender,
                receiver: ex.receiver,
                reason,
            }
        }
    }

    /// Sender-side handling of a heard answer. `reply` must have been heard
    /// intact or misheard into `heard_content` by the original sender.
    pub fn on_answer(&mut self, reply: &Message, heard_content: &Content) -> Option<ChannelEvent> {
        let to = reply.reply_to?;
        let idx = self
            .exchanges
            .iter()
            .position(|e| e.sender == reply.receivers[0] && e.transmissions.contains(&to))?;
        let original = self.exchanges[idx].original;
        match reply.performative {
            Performative::Confirm => {
                if *heard_content == self.history[original as usize].content {
                    self.exchanges.remove(idx);
                    Some(ChannelEvent::Delivered { original })
                } else {
                    Some(self.retransmit_or_fail(idx, FailureReason::RetransmitLimit))
                }
            }
            Performative::NotUnderstood => {
                Some(self.retransmit_or_fail(idx, FailureReason::RetransmitLimit))
            }
            _ => {
                self.exchanges.remove(idx);
                Some(ChannelEvent::Delivered { original })
            }
        }
    }

    /// Repeats an untracked message once when the receiver asks for it.
    pub fn repeat_on_request(&mut self, original: MsgId) -> Option<MsgId> {
        let orig = self.history.get(original as usize)?.clone();
        let root = orig.original_id();
        let repeats = self
            .history
            .iter()
            .filter(|m| m.retransmit_of == Some(root))
            .count() as u32;
        if repeats >= self.cfg.max_retransmits {
            return None;
        }
        let draft = Draft {
            sender: orig.sender,
            receivers: orig.receivers.clone(),
            performative: orig.performative,
            content: orig.content.clone(),
            category: orig.category,
            reply_to: orig.reply_to,
        };
        Some(self.push(draft, Some(root), true))
    }

    /// Fires timers that ran out at `tick`.
    pub fn expire(&mut self, tick: u32) -> Vec<ChannelEvent> {
        let closed_loop = self.cfg.variant.closed_loop();
        let timeout = if closed_loop { self.cfg.ack_timeout } else { self.cfg.reply_timeout };
        let mut events = Vec::new();
        let mut i = 0;
        while i < self.exchanges.len() {
            let due = self.exchanges[i]
                .last_spoken
                .is_some_and(|t| tick.saturating_sub(t) >= timeout);
            if !due {
                i += 1;
                continue;
            }
            let before = self.exchanges.len();
            let ev = if closed_loop {
                self.retransmit_or_fail(i, FailureReason::RetransmitLimit)
            } else {
                let ex = self.exchanges.remove(i);
                ChannelEvent::Failed {
                    original: ex.original,
                    sender: ex.sender,
                    receiver: ex.receiver,
                    reason: FailureReason::Hung,
                }
            };
            if self.exchanges.len() == before {
                i += 1;
            }
            events.push(ev);
        }
        events
    }

    /// Drops queued messages and open exchanges matching `pred`.
    pub fn cancel_where(&mut self, pred: impl Fn(&Message) -> bool) {
        let history = &self.history;
        for q in &mut self.outboxes {
            q.retain(|id| !pred(&history[*id as usize]));
        }
        self.exchanges.retain(|e| !pred(&history[e.original as usize]));
    }

    pub fn open_exchanges(&self) -> &[Exchange] {
        &self.exchanges
    }

    /// Whether an answer to `msg` would reply to something addressed to its sender.
    pub fn replies_to_own(&self, msg: &Message) -> bool {
        msg.reply_to
            .and_then(|id| self.message(id))
            .is_some_and(|orig| orig.addresses(msg.sender))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    const PHY: AgentId = AgentId(0);
    const P1: AgentId = AgentId(1);
    const P2: AgentId = AgentId(2);
    const P3: AgentId = AgentId(3);

    fn msg(id: MsgId, sender: AgentId, to: &[AgentId], p: Performative) -> Message {
        Message {
            msg_id: id,
            sender,
            receivers: to.to_vec(),
            performative: p,
            content: Content::Action(ActionContent::new(ActionId::ChestCompressions30)),
            category: ContentCategory::MedicalAction,
            reply_to: None,
            retransmit_of: None,
            tick_sent: Some(0),
        }
    }

    fn request_draft(from: AgentId, to: AgentId) -> Draft {
        Draft {
            sender: from,
            receivers: vec![to],
            performative: Performative::Request,
            content: Content::Action(ActionContent::new(ActionId::InstallIv)),
            category: ContentCategory::EquipmentStatus,
            reply_to: None,
        }
    }

    fn cfg(variant: ProtocolVariant) -> ProtocolConfig {
        ProtocolConfig { variant, ..ProtocolConfig::default() }
    }

    #[test]
    fn fipa_mapping() {
        use Performative::*;
        assert_eq!(fipa_category(Request), FipaCategory::PerfActions);
        assert_eq!(fipa_category(RequestWhen), FipaCategory::PerfActions);
        assert_eq!(fipa_category(Agree), FipaCategory::PerfActions);
        assert_eq!(fipa_category(Refuse), FipaCategory::PerfActions);
        assert_eq!(fipa_category(QueryRef), FipaCategory::RequestInfo);
        assert_eq!(fipa_category(Inform), FipaCategory::PassingInfo);
        assert_eq!(fipa_category(Confirm), FipaCategory::PassingInfo);
        assert_eq!(fipa_category(Failure), FipaCategory::ErrorHand);
        assert_eq!(fipa_category(NotUnderstood), FipaCategory::ErrorHand);
    }

    #[test]
    fn mishear_arithmetic() {
        let c = ProtocolConfig { base_mishear: 0.1, ..ProtocolConfig::default() };
        assert!((c.mishear_probability(1.0, 1) - 0.05).abs() < 1e-12);
        let c = ProtocolConfig { base_mishear: 0.1, familiarity_bonus: 0.0, ..c };
        assert!((c.mishear_probability(0.0, 3) - 0.4).abs() < 1e-12);
        assert_eq!(c.mishear_probability(0.0, 50), MAX_MISHEAR);
    }

    #[test]
    fn zero_mishear_is_always_heard() {
        let c = ProtocolConfig { base_mishear: 0.0, ..ProtocolConfig::default() };
        let m = msg(0, PHY, &[P1], Performative::Request);
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let listeners = [(P1, 0.2), (P2, 0.0), (P3, 1.0)];
        for _ in 0..1000 {
            let out = deliver(&m, &listeners, 1, &c, &mut rng);
            assert!(out.iter().all(|o| o.result == Reception::Heard));
            assert!(out[0].addressed && out[1].overheard());
        }
    }

    #[test]
    fn deliver_depends_only_on_arguments() {
        let c = ProtocolConfig { base_mishear: 0.4, ..ProtocolConfig::default() };
        let m = msg(0, PHY, &[P1], Performative::Request);
        let listeners = [(P1, 0.5), (P2, 0.5), (P3, 0.5)];
        let a = deliver(&m, &listeners, 2, &c, &mut ChaCha8Rng::seed_from_u64(5));
        let b = deliver(&m, &listeners, 2, &c, &mut ChaCha8Rng::seed_from_u64(5));
        assert_eq!(a, b);
    }

    #[test]
    fn read_back_echoes_or_corrupts() {
        let catalog = Catalog::default_catalog();
        let c = cfg(ProtocolVariant::ClosedLoop);
        let m = msg(3, PHY, &[P1], Performative::Request);
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let heard = DeliveryOutcome { listener: P1, result: Reception::Heard, addressed: true };
        let out = closed_loop_exchange(&m, &heard, &c, &catalog, &mut rng).unwrap();
        assert_eq!(out.len(), 1);
        assert_eq!(out[0].performative, Performative::Confirm);
        assert_eq!(out[0].reply_to, Some(3));
        assert_eq!(out[0].content, m.content);

        let mis = DeliveryOutcome { result: Reception::Misheard, ..heard };
        let out = closed_loop_exchange(&m, &mis, &c, &catalog, &mut rng).unwrap();
        assert_ne!(out[0].content, m.content);

        let lost = DeliveryOutcome { result: Reception::Unheard, ..heard };
        assert!(closed_loop_exchange(&m, &lost, &c, &catalog, &mut rng).unwrap().is_empty());

        let err = closed_loop_exchange(&m, &heard, &cfg(ProtocolVariant::Baseline), &catalog, &mut rng);
        assert!(matches!(err, Err(SimError::ProtocolMisuse(_))));
    }

    #[test]
    fn baseline_repairs() {
        let catalog = Catalog::default_catalog();
        let c = ProtocolConfig { corrupted_execution: 0.0, ..cfg(ProtocolVariant::Baseline) };
        let m = msg(7, PHY, &[P1], Performative::Request);
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mis = DeliveryOutcome { listener: P1, result: Reception::Misheard, addressed: true };
        match baseline_mishear_response(&m, &mis, &c, &catalog, &mut rng).unwrap() {
            MishearResponse::AskRepeat(d) => {
                assert_eq!(d.performative, Performative::NotUnderstood);
                assert_eq!(d.reply_to, Some(7));
            }
            other => panic!("{other:?}"),
        }
        for result in [Reception::Heard, Reception::Unheard] {
            let o = DeliveryOutcome { result, ..mis };
            assert_eq!(
                baseline_mishear_response(&m, &o, &c, &catalog, &mut rng).unwrap(),
                MishearResponse::Nothing
            );
        }
        let always = ProtocolConfig { corrupted_execution: 1.0, ..c };
        assert!(matches!(
            baseline_mishear_response(&m, &mis, &always, &catalog, &mut rng).unwrap(),
            MishearResponse::ActOnCorrupted(_)
        ));
    }

    #[test]
    fn corruption_always_differs() {
        let catalog = Catalog::default_catalog();
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let samples = [
            Content::Action(ActionContent::new(ActionId::Intubate)),
            Content::Info { key: BeliefKey::Rhythm, value: BeliefValue::Rhythm(RhythmKind::VF) },
            Content::Info { key: BeliefKey::Pulse, value: BeliefValue::Bool(false) },
            Content::Query(BeliefKey::IvInstalled),
            Content::Signal(Signal::StandClear),
        ];
        for c in &samples {
            for _ in 0..50 {
                assert_ne!(&c.corrupted(&catalog, &mut rng), c);
            }
        }
    }

    #[test]
    fn leader_mediation() {
        let phy = msg(0, PHY, &[P1], Performative::Request);
        let p1 = msg(1, P1, &[PHY], Performative::Inform);
        let (g, d) = arbitrate_speakers(&[&phy, &p1], ProtocolVariant::LeaderMediated, PHY, |_| false);
        assert_eq!(g, vec![&phy]);
        assert_eq!(d, vec![&p1]);

        let mut confirm = msg(2, P2, &[PHY], Performative::Confirm);
        confirm.reply_to = Some(0);
        let (g, d) = arbitrate_speakers(&[&confirm], ProtocolVariant::LeaderMediated, PHY, |_| true);
        assert_eq!(g.len(), 1);
        assert!(d.is_empty());

        let a = msg(5, P1, &[PHY], Performative::Inform);
        let b = msg(4, P3, &[PHY], Performative::Inform);
        let (g, d) = arbitrate_speakers(&[&a, &b], ProtocolVariant::LeaderMediated, PHY, |_| false);
        assert_eq!(g, vec![&b]);
        assert_eq!(d, vec![&a]);

        let c = msg(6, P2, &[PHY], Performative::Inform);
        let (g, d) = arbitrate_speakers(&[&phy, &a, &c], ProtocolVariant::Baseline, PHY, |_| false);
        assert_eq!(g.len(), 3);
        assert!(d.is_empty());
    }

    #[test]
    fn confirm_requires_reply_to() {
        let mut m = msg(0, P1, &[PHY], Performative::Confirm);
        assert!(m.validate().is_err());
        m.reply_to = Some(0);
        assert!(m.validate().is_ok());
        assert!(msg(1, P1, &[P1], Performative::Inform).validate().is_err());
        assert!(msg(1, P1, &[], Performative::Inform).validate().is_err());
    }

    #[test]
    fn unheard_exhausts_retransmissions() {
        let c = ProtocolConfig { max_retransmits: 2, ..cfg(ProtocolVariant::ClosedLoop) };
        let mut ch = Channel::new(c, 4);
        let id = ch.send(request_draft(PHY, P1));
        let mut tick = 1;
        ch.mark_spoken(&[id], tick);
        let mut retransmissions = 0;
        let failure = loop {
            tick += 1;
            let evs = ch.expire(tick);
            if let Some(ev) = evs.into_iter().next() {
                match ev {
                    ChannelEvent::Retransmitted { msg_id, .. } => {
                        retransmissions += 1;
                        ch.mark_spoken(&[msg_id], tick);
                    }
                    f @ ChannelEvent::Failed { .. } => break f,
                    other => panic!("{other:?}"),
                }
            }
        };
        assert_eq!(retransmissions, 2);
        assert!(matches!(failure, ChannelEvent::Failed { reason: FailureReason::RetransmitLimit, .. }));
        assert!(ch.open_exchanges().is_empty());
    }

    #[test]
    fn matching_read_back_closes_exchange() {
        let mut ch = Channel::new(cfg(ProtocolVariant::ClosedLoop), 4);
        let id = ch.send(request_draft(PHY, P1));
        ch.mark_spoken(&[id], 1);
        let orig = ch.message(id).unwrap().clone();
        let confirm_id = ch.send(Draft::reply(
            P1,
            &orig,
            Performative::Confirm,
            orig.content.clone(),
            orig.category,
        ));
        let confirm = ch.message(confirm_id).unwrap().clone();
        assert_eq!(
            ch.on_answer(&confirm, &confirm.content),
            Some(ChannelEvent::Delivered { original: id })
        );
        assert!(ch.open_exchanges().is_empty());
    }

    #[test]
    fn mismatched_read_back_retransmits() {
        let catalog = Catalog::default_catalog();
        let mut ch = Channel::new(cfg(ProtocolVariant::ClosedLoop), 4);
        let id = ch.send(request_draft(PHY, P1));
        ch.mark_spoken(&[id], 1);
        let orig = ch.message(id).unwrap().clone();
        let wrong = orig.content.corrupted(&catalog, &mut ChaCha8Rng::seed_from_u64(0));
        let cid = ch.send(Draft::reply(P1, &orig, Performative::Confirm, wrong.clone(), orig.category));
        let confirm = ch.message(cid).unwrap().clone();
        match ch.on_answer(&confirm, &wrong) {
            Some(ChannelEvent::Retransmitted { original, msg_id }) => {
                assert_eq!(original, id);
                let re = ch.message(msg_id).unwrap();
                assert_eq!(re.retransmit_of, Some(id));
                assert_eq!(re.content, orig.content);
                assert_eq!(ch.heads()[0].msg_id, msg_id);
            }
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn baseline_hangs_after_reply_timeout() {
        let c = cfg(ProtocolVariant::Baseline);
        let mut ch = Channel::new(c, 4);
        let id = ch.send(request_draft(PHY, P3));
        ch.mark_spoken(&[id], 5);
        assert!(ch.expire(5 + c.reply_timeout - 1).is_empty());
        let evs = ch.expire(5 + c.reply_timeout);
        assert!(matches!(evs[..], [ChannelEvent::Failed { reason: FailureReason::Hung, .. }]));
    }

    #[test]
    fn baseline_informs_are_not_tracked() {
        let mut ch = Channel::new(cfg(ProtocolVariant::Baseline), 4);
        let mut d = request_draft(P1, PHY);
        d.performative = Performative::Inform;
        let id = ch.send(d);
        ch.mark_spoken(&[id], 1);
        assert!(ch.open_exchanges().is_empty());
        assert!(ch.repeat_on_request(id).is_some());
    }
}
