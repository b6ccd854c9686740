//! The 1-second tick loop.
//!
//! Each tick runs seven phases in a fixed order, and every random draw comes
//! from the run's single stream in that order:
//!
//! 1. speaker arbitration (head of each outbox)
//! 2. delivery to every listener, read-backs and repair requests
//! 3. agents perceive, answer, and start or pre-empt work; the leader voices
//!    the directives the ALS machine produced last tick
//! 4. busy agents work one second; finished tasks roll for success
//! 5. patient update
//! 6. ALS clock, termination check, channel timers
//! 7. no-flow accounting

use std::collections::{BTreeMap, VecDeque};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use serde_json::json;

use crate::agents::{goal_of, AgentRuntime, Duty, Heard, RequestOutcome, Task, TaskEvent};
use crate::als::{
    check_termination, AlsOutcome, AlsPhase, AlsState, CprEvent, Directive, DirectiveKind,
    Observation, Target, BLOCK_COMPRESSIONS, BLOCK_VENTILATIONS,
};
use crate::comms::{
    arbitrate_speakers, baseline_mishear_response, closed_loop_exchange, deliver, fipa_category,
    ActionContent, BeliefKey, BeliefValue, Channel, ChannelEvent, Content, DeliveryOutcome, Draft,
    FailureReason, FipaCategory, Message, MishearResponse, MsgId, Performative, ProtocolVariant,
    Reception, Signal,
};
use crate::domain::{
    roll_success, ActionId, AgentId, ContentCategory, PatientState, RhythmKind, RhythmState, Role,
};
use crate::error::{Result, SimError};
use crate::events::{Event, EventType, ALL, ENGINE, PATIENT};
use crate::metrics::NoFlowAccumulator;
use crate::scenario::{validate_scenario, PatientDynamics, ScenarioConfig};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum RunOutcome {
    #[serde(rename = "ROSC")]
    Rosc,
    Futile,
    TickLimit,
}

impl RunOutcome {
    pub fn as_str(self) -> &'static str {
        match self {
            RunOutcome::Rosc => "ROSC",
            RunOutcome::Futile => "Futile",
            RunOutcome::TickLimit => "TickLimit",
        }
    }
}

impl From<AlsOutcome> for RunOutcome {
    fn from(o: AlsOutcome) -> Self {
        match o {
            AlsOutcome::Rosc => RunOutcome::Rosc,
            AlsOutcome::Futile => RunOutcome::Futile,
        }
    }
}

/// Per-run summary.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunResult {
    pub seed: u64,
    pub protocol: ProtocolVariant,
    pub outcome: RunOutcome,
    pub total_seconds: u32,
    pub no_flow_seconds: u32,
    pub total_messages: u64,
    pub message_counts: BTreeMap<Performative, u64>,
    pub category_counts: BTreeMap<FipaCategory, BTreeMap<ContentCategory, u64>>,
    /// Times an agent acted on misheard content.
    pub error_events: u64,
    /// Exchanges that got no usable answer and had to be re-issued.
    pub hung_directives: u64,
    pub retransmissions: u64,
    pub shocks: u32,
    pub drugs: u32,
}

impl RunResult {
    pub fn count(&self, p: Performative) -> u64 {
        self.message_counts.get(&p).copied().unwrap_or(0)
    }
}

/// One second of patient drift. `flow` is true when CPR was given this tick.
pub fn update_patient(p: &PatientState, flow: bool, d: &PatientDynamics) -> PatientState {
    let mut next = p.clone();
    let perfusing = p.pulse_present();
    next.health += if perfusing {
        d.r_rosc
    } else if flow {
        -d.d_cpr
    } else {
        -d.d_noflow
    };
    let target = if flow || perfusing { d.co2_flow_target } else { d.co2_noflow_target };
    let gap = target - p.co2;
    next.co2 += gap.clamp(-d.co2_rate, d.co2_rate);
    next.normalized()
}

#[derive(Debug, Clone, Default)]
struct Counters {
    messages: BTreeMap<Performative, u64>,
    categories: BTreeMap<FipaCategory, BTreeMap<ContentCategory, u64>>,
    total: u64,
    errors: u64,
    hung: u64,
    retransmissions: u64,
    shocks: u32,
    drugs: u32,
}

#[derive(Debug, Clone)]
struct Awaiting {
    key: BeliefKey,
    from: AgentId,
    since: u32,
    last_query: u32,
}

/// The leader's bookkeeping on top of its [`AgentRuntime`].
#[derive(Debug, Clone)]
struct LeaderMind {
    compressor: AgentId,
    directives: Vec<Directive>,
    drug_queue: VecDeque<crate::domain::Drug>,
    doses_issued: u32,
    doses: BTreeMap<u32, crate::domain::Drug>,
    pulse_since: Option<u32>,
    awaiting: Vec<Awaiting>,
}

/// Complete state of one run.
#[derive(Debug, Clone)]
pub struct World<'s> {
    sc: &'s ScenarioConfig,
    seed: u64,
    pub tick: u32,
    pub patient: PatientState,
    pub agents: Vec<AgentRuntime>,
    pub als: AlsState,
    pub channel: Channel,
    rng: ChaCha8Rng,
    log: Option<Vec<Event>>,
    leader: AgentId,
    mind: LeaderMind,
    ids: Vec<String>,
    /// `familiarity[listener][speaker]`
    familiarity: Vec<Vec<f64>>,
    pads_on: bool,
    halt_pending: bool,
    reissue: Vec<MsgId>,
    shock_this_tick: bool,
    blocks: u32,
    no_flow: NoFlowAccumulator,
    counters: Counters,
    outcome: Option<RunOutcome>,
}

fn integrity(tick: u32, e: impl std::fmt::Display) -> SimError {
    SimError::Integrity { tick, detail: e.to_string() }
}

impl<'s> World<'s> {
    /// Builds the world at tick 0. The scenario must already be valid.
    pub fn new(sc: &'s ScenarioConfig, seed: u64, keep_log: bool) -> Result<Self> {
        let violations = validate_scenario(sc);
        if !violations.is_empty() {
            return Err(SimError::InvalidScenario(violations));
        }
        let agents: Vec<AgentRuntime> = sc
            .team
            .iter()
            .enumerate()
            .map(|(i, p)| AgentRuntime::new(AgentId(i as u8), p.clone()))
            .collect();
        let ids: Vec<String> = sc.team.iter().map(|p| p.id.clone()).collect();
        let familiarity = sc
            .team
            .iter()
            .map(|l| ids.iter().map(|s| l.familiarity_with(s)).collect())
            .collect();
        let idx = |r: Role| AgentId(sc.agent_index(r).expect("validated team") as u8);
        let mut patient = sc.patient.clone();
        patient.health -= sc.patient_dynamics.d_noflow * sc.pre_arrival_no_flow as f64;
        let patient = patient.normalized();
        let mut w = World {
            sc,
            seed,
            tick: 0,
            patient,
            agents,
            als: AlsState::new(),
            channel: Channel::new(sc.protocol, sc.team.len()),
            rng: ChaCha8Rng::seed_from_u64(seed),
            log: keep_log.then(Vec::new),
            leader: idx(Role::Physician),
            mind: LeaderMind {
                compressor: idx(sc.behavior.compressor_roles[0]),
                directives: Vec::new(),
                drug_queue: VecDeque::new(),
                doses_issued: 0,
                doses: BTreeMap::new(),
                pulse_since: None,
                awaiting: Vec::new(),
            },
            ids,
            familiarity,
            pads_on: false,
            halt_pending: false,
            reissue: Vec::new(),
            shock_this_tick: false,
            blocks: 0,
            no_flow: NoFlowAccumulator::default(),
            counters: Counters::default(),
            outcome: None,
        };
        let team: Vec<_> = w
            .agents
            .iter()
            .map(|a| json!({"id": a.profile.id, "role": a.role()}))
            .collect();
        let content = json!({
            "seed": seed,
            "protocol": sc.protocol.variant,
            "rhythm": w.patient.rhythm,
            "health": w.patient.health,
            "team": team,
        });
        w.emit(|| Event::new(0, EventType::RunStart, ENGINE, ALL).with_content(content));
        Ok(w)
    }

    pub fn outcome(&self) -> Option<RunOutcome> {
        self.outcome
    }

    pub fn events(&self) -> Option<&[Event]> {
        self.log.as_deref()
    }

    pub fn take_events(&mut self) -> Option<Vec<Event>> {
        self.log.take()
    }

    pub fn no_flow_seconds(&self) -> u32 {
        self.no_flow.total()
    }

    fn emit(&mut self, f: impl FnOnce() -> Event) {
        if let Some(log) = &mut self.log {
            log.push(f());
        }
    }

    fn name(&self, id: AgentId) -> String {
        self.ids[id.index()].clone()
    }

    fn by_role(&self, role: Role) -> AgentId {
        AgentId(self.sc.agent_index(role).expect("validated team") as u8)
    }

    fn closed_loop(&self) -> bool {
        self.sc.protocol.variant.closed_loop()
    }

    fn send(&mut self, from: AgentId, to: AgentId, p: Performative, content: Content) -> MsgId {
        let category = content.category(&self.sc.catalog);
        self.channel.send(Draft { sender: from, receivers: vec![to], performative: p, content, category, reply_to: None })
    }

    fn broadcast(&mut self, from: AgentId, p: Performative, content: Content) -> MsgId {
        let category = content.category(&self.sc.catalog);
        let receivers = self.agents.iter().map(|a| a.id).filter(|id| *id != from).collect();
        self.channel.send(Draft { sender: from, receivers, performative: p, content, category, reply_to: None })
    }

    fn reply(&mut self, from: AgentId, to: &Message, p: Performative, content: Content) {
        let category = content.category(&self.sc.catalog);
        self.channel.send(Draft::reply(from, to, p, content, category));
    }

    /// Runs one tick.
    pub fn step(&mut self) -> Result<()> {
        if self.outcome.is_some() {
            return Err(SimError::ProtocolMisuse("step called on a finished run".into()));
        }
        self.tick += 1;
        self.shock_this_tick = false;
        let spoken = self.speak();
        self.deliver_all(&spoken)?;
        self.agents_act()?;
        let flow = self.work()?;
        self.patient_phase(flow);
        self.als_phase()?;
        let tick = self.tick;
        self.no_flow
            .accumulate(tick, self.patient.pulse_present(), flow)?;
        if let Some(o) = self.outcome {
            self.finish(o)?;
        } else if self.tick >= self.sc.max_ticks {
            self.outcome = Some(RunOutcome::TickLimit);
            self.end_log(RunOutcome::TickLimit);
        }
        Ok(())
    }

    // phase 1
    fn speak(&mut self) -> Vec<Message> {
        let ids: Vec<MsgId> = {
            let heads = self.channel.heads();
            let ch = &self.channel;
            let (granted, _) = arbitrate_speakers(&heads, self.sc.protocol.variant, self.leader, |m| {
                ch.replies_to_own(m)
            });
            granted.iter().map(|m| m.msg_id).collect()
        };
        self.mark_spoken(&ids)
    }

    fn mark_spoken(&mut self, ids: &[MsgId]) -> Vec<Message> {
        self.channel.mark_spoken(ids, self.tick);
        let spoken: Vec<Message> = ids
            .iter()
            .filter_map(|id| self.channel.message(*id).cloned())
            .collect();
        for m in &spoken {
            let c = &mut self.counters;
            *c.messages.entry(m.performative).or_default() += 1;
            *c.categories
                .entry(fipa_category(m.performative))
                .or_default()
                .entry(m.category)
                .or_default() += 1;
            c.total += 1;
            if m.retransmit_of.is_some() {
                c.retransmissions += 1;
            }
            let tick = self.tick;
            let actor = self.name(m.sender);
            let target = if m.is_directed() { self.name(m.receivers[0]) } else { ALL.to_string() };
            self.emit(|| {
                Event::new(tick, EventType::Speak, &actor, &target)
                    .with_message(m)
                    .with_content(serde_json::to_value(&m.content).unwrap_or_default())
            });
        }
        spoken
    }

    // phase 2
    fn deliver_all(&mut self, spoken: &[Message]) -> Result<()> {
        let speakers = spoken.len();
        for msg in spoken {
            let listeners: Vec<(AgentId, f64)> = self
                .agents
                .iter()
                .filter(|a| a.id != msg.sender)
                .map(|a| (a.id, self.familiarity[a.id.index()][msg.sender.index()]))
                .collect();
            let outcomes = deliver(msg, &listeners, speakers, &self.sc.protocol, &mut self.rng);
            for o in outcomes {
                let tick = self.tick;
                let (actor, target) = (self.name(o.listener), self.name(msg.sender));
                let label = match o.result {
                    Reception::Heard if !o.addressed => "overheard",
                    Reception::Heard => "heard",
                    Reception::Misheard => "misheard",
                    Reception::Unheard => "unheard",
                };
                self.emit(|| {
                    Event::new(tick, EventType::Deliver, &actor, &target)
                        .with_msg_id(msg.msg_id)
                        .with_outcome(label)
                });
                self.receive(msg, &o)?;
            }
        }
        Ok(())
    }

    fn receive(&mut self, msg: &Message, o: &DeliveryOutcome) -> Result<()> {
        let me = o.listener.index();
        let perf = msg.performative;
        if !o.addressed {
            if o.result == Reception::Heard && matches!(perf, Performative::Inform | Performative::Confirm) {
                self.agents[me].inbox.push(Heard {
                    msg: msg.clone(),
                    content: msg.content.clone(),
                    corrupted: false,
                    overheard: true,
                });
            }
            return Ok(());
        }
        let read_back = self.closed_loop()
            && msg.is_directed()
            && matches!(perf, Performative::Request | Performative::RequestWhen | Performative::Inform);
        match o.result {
            Reception::Unheard => {}
            Reception::Heard => {
                if msg.reply_to.is_some() {
                    self.answer(msg, &msg.content);
                }
                if read_back {
                    for d in closed_loop_exchange(msg, o, &self.sc.protocol, &self.sc.catalog, &mut self.rng)? {
                        self.channel.send(d);
                    }
                }
                self.agents[me].inbox.push(Heard {
                    msg: msg.clone(),
                    content: msg.content.clone(),
                    corrupted: false,
                    overheard: false,
                });
            }
            Reception::Misheard => {
                if perf == Performative::Confirm && msg.reply_to.is_some() {
                    let heard = msg.content.corrupted(&self.sc.catalog, &mut self.rng);
                    self.answer(msg, &heard);
                } else if read_back {
                    // the garbled read-back exposes the error; nothing is acted on
                    for d in closed_loop_exchange(msg, o, &self.sc.protocol, &self.sc.catalog, &mut self.rng)? {
                        self.channel.send(d);
                    }
                } else if msg.is_directed() && perf.is_initiating() {
                    match baseline_mishear_response(msg, o, &self.sc.protocol, &self.sc.catalog, &mut self.rng)? {
                        MishearResponse::ActOnCorrupted(content) => {
                            self.agents[me].inbox.push(Heard {
                                msg: msg.clone(),
                                content,
                                corrupted: true,
                                overheard: false,
                            });
                        }
                        MishearResponse::AskRepeat(d) => {
                            self.channel.send(d);
                        }
                        MishearResponse::Nothing => {}
                    }
                }
            }
        }
        Ok(())
    }

    /// Sender-side handling of an answer the original sender took in.
    fn answer(&mut self, reply: &Message, heard: &Content) {
        match self.channel.on_answer(reply, heard) {
            Some(ChannelEvent::Failed { original, sender, receiver, reason }) => {
                self.on_failure(original, sender, receiver, reason);
            }
            Some(_) => {}
            None => {
                if reply.performative == Performative::NotUnderstood {
                    let untracked = reply
                        .reply_to
                        .and_then(|id| self.channel.message(id))
                        .is_some_and(|m| matches!(m.performative, Performative::Inform | Performative::QueryRef));
                    if untracked {
                        self.channel.repeat_on_request(reply.reply_to.unwrap_or_default());
                    }
                }
            }
        }
    }

    fn on_failure(&mut self, original: MsgId, sender: AgentId, receiver: AgentId, reason: FailureReason) {
        let Some(msg) = self.channel.message(original).cloned() else {
            return;
        };
        if !self.still_needed(&msg) {
            return;
        }
        self.counters.hung += 1;
        let tick = self.tick;
        let (a, t) = (self.name(sender), self.name(receiver));
        let label = match reason {
            FailureReason::Hung => "hung",
            FailureReason::RetransmitLimit => "retransmit_limit",
        };
        self.emit(|| {
            Event::new(tick, EventType::DirectiveFailure, &a, &t)
                .with_message(&msg)
                .with_outcome(label)
        });
        self.reissue.push(original);
    }

    /// Whether the purpose of `msg` is still unmet from its sender's view.
    fn still_needed(&self, msg: &Message) -> bool {
        let leader = &self.agents[self.leader.index()];
        match &msg.content {
            Content::Action(a) if msg.sender == self.leader => match a.action {
                ActionId::ChestCompressions30 => {
                    self.als.cpr_running() && msg.receivers[0] == self.mind.compressor
                }
                ActionId::CheckPulse => self.als.phase == AlsPhase::PostShockPulseCheck && !self.pulse_reported(),
                ActionId::PrepareDrug | ActionId::InjectDrug => {
                    !leader.beliefs.holds(BeliefKey::DrugGiven(a.seq.unwrap_or(0)))
                }
                other => goal_of(other, a.seq).is_some_and(|g| !leader.beliefs.holds(g)),
            },
            Content::Action(a) => {
                a.action == ActionId::VentilateX2
                    && self.agents[msg.sender.index()].duty == Duty::AwaitingVentilation(a.seq.unwrap_or(0))
            }
            Content::Info { key: BeliefKey::Pulse, .. } => self.als.phase == AlsPhase::PostShockPulseCheck,
            Content::Info { .. } => true,
            Content::Query(_) | Content::Signal(_) => false,
        }
    }

    fn pulse_reported(&self) -> bool {
        let Some(since) = self.mind.pulse_since else {
            return false;
        };
        let b = &self.agents[self.leader.index()].beliefs;
        matches!(b.get(BeliefKey::Pulse), BeliefValue::Bool(_))
            && b.stamp(BeliefKey::Pulse).is_some_and(|t| t >= since)
    }

    // phase 3
    fn agents_act(&mut self) -> Result<()> {
        for i in 0..self.agents.len() {
            let inbox = std::mem::take(&mut self.agents[i].inbox);
            self.agents[i].perceive(&inbox, self.tick);
            for h in inbox {
                self.handle_heard(i, h);
            }
        }
        if self.halt_pending {
            self.halt();
        }
        for id in std::mem::take(&mut self.reissue) {
            let Some(m) = self.channel.message(id).cloned() else { continue };
            if self.still_needed(&m) {
                self.channel.send(Draft {
                    sender: m.sender,
                    receivers: m.receivers.clone(),
                    performative: m.performative,
                    content: m.content.clone(),
                    category: m.category,
                    reply_to: m.reply_to,
                });
            }
        }
        for d in std::mem::take(&mut self.mind.directives) {
            self.voice(d);
        }
        self.issue_drug();
        self.stale_queries();
        for i in 0..self.agents.len() {
            self.agents[i].activate_conditionals();
            let evs = self.agents[i].decide(&self.sc.catalog, &self.sc.duration_weights, &mut self.rng);
            for ev in evs {
                self.log_task(i, ev);
            }
        }
        Ok(())
    }

    fn log_task(&mut self, i: usize, ev: TaskEvent) {
        let tick = self.tick;
        let actor = self.name(AgentId(i as u8));
        self.emit(|| {
            let (ty, t, outcome) = match &ev {
                TaskEvent::Started(t) => (EventType::ActionStart, t, None),
                TaskEvent::Resumed(t) => (EventType::ActionResume, t, None),
                TaskEvent::Suspended(t) => (EventType::ActionEnd, t, Some("suspended")),
            };
            let e = Event::new(tick, ty, &actor, PATIENT).with_content(task_json(t));
            match outcome {
                Some(o) => e.with_outcome(o),
                None => e,
            }
        });
    }

    fn handle_heard(&mut self, i: usize, h: Heard) {
        let me = AgentId(i as u8);
        let tick = self.tick;
        if h.corrupted {
            self.counters.errors += 1;
            let actor = self.name(me);
            let target = self.name(h.msg.sender);
            let (heard, meant) = (h.content.clone(), h.msg.content.clone());
            let id = h.msg.msg_id;
            self.emit(|| {
                Event::new(tick, EventType::Error, &actor, &target)
                    .with_msg_id(id)
                    .with_content(json!({"heard": heard, "meant": meant}))
                    .with_outcome("acted_on_misheard")
            });
        }
        if h.overheard {
            return;
        }
        let perf = h.msg.performative;
        match (perf, &h.content) {
            (Performative::Request | Performative::RequestWhen, Content::Action(a)) => {
                let out = if !h.corrupted && self.stale_ventilation(a) {
                    RequestOutcome::Duplicate
                } else {
                    self.agents[i].handle_request(perf, a, &self.sc.catalog, h.corrupted)
                };
                if !h.msg.is_directed() {
                    return;
                }
                let echo = Content::Action(a.clone());
                match &out {
                    o if o.agrees() => {
                        if !self.closed_loop() && perf == Performative::Request {
                            self.reply(me, &h.msg, Performative::Agree, echo);
                        }
                    }
                    RequestOutcome::Refused(_) => self.reply(me, &h.msg, Performative::Refuse, echo),
                    RequestOutcome::Malformed => self.reply(me, &h.msg, Performative::NotUnderstood, echo),
                    _ => {}
                }
                if let RequestOutcome::AlreadyDone(goal) = out {
                    if h.msg.sender != me {
                        self.send(me, h.msg.sender, Performative::Inform, Content::Info {
                            key: goal,
                            value: BeliefValue::Bool(true),
                        });
                    }
                }
            }
            (Performative::Inform, Content::Info { key, .. }) if me == self.leader && !h.corrupted => {
                let asked = h
                    .msg
                    .reply_to
                    .and_then(|id| self.channel.message(id))
                    .is_some_and(|q| q.performative == Performative::QueryRef && q.sender == me);
                if asked {
                    self.follow_up(*key, h.msg.sender);
                }
            }
            (Performative::QueryRef, Content::Query(key)) => {
                let value = self.agents[i].beliefs.get(*key);
                self.reply(me, &h.msg, Performative::Inform, Content::Info { key: *key, value });
            }
            (Performative::Refuse, Content::Action(a)) if me == self.leader && a.action == ActionId::InjectDrug => {
                // an earlier dose is missing: the leader was wrong to think it was given
                if let Some(k) = a.seq.filter(|k| *k > 1) {
                    let missing = BeliefKey::DrugGiven(k - 1);
                    self.agents[i].beliefs.set(missing, BeliefValue::Bool(false), tick);
                    if let Some(&drug) = self.mind.doses.get(&(k - 1)) {
                        self.order_dose(k - 1, drug, h.msg.sender);
                        self.await_result(missing, h.msg.sender);
                    }
                }
                self.reissue_refused(&h.msg);
            }
            (Performative::Refuse, _) => self.reissue_refused(&h.msg),
            _ => {}
        }
    }

    fn reissue_refused(&mut self, refusal: &Message) {
        if let Some(orig) = refusal.reply_to.and_then(|id| self.channel.message(id)) {
            let root = orig.original_id();
            if let Some(m) = self.channel.message(root).cloned() {
                if self.still_needed(&m) {
                    self.reissue.push(root);
                }
            }
        }
    }

    /// Breaths for a block nobody is waiting on (already given, or the block
    /// was cut short by a rhythm check).
    fn stale_ventilation(&self, a: &ActionContent) -> bool {
        a.action == ActionId::VentilateX2
            && !self
                .agents
                .iter()
                .any(|x| x.duty == Duty::AwaitingVentilation(a.seq.unwrap_or(0)))
    }

    fn halt(&mut self) {
        self.halt_pending = false;
        for i in 0..self.agents.len() {
            if let Some(t) = self.agents[i].halt_cpr() {
                let tick = self.tick;
                let actor = self.name(AgentId(i as u8));
                self.emit(|| {
                    Event::new(tick, EventType::ActionEnd, &actor, PATIENT)
                        .with_content(task_json(&t))
                        .with_outcome("aborted")
                });
            }
        }
        self.channel.cancel_where(|m| {
            m.reply_to.is_none() && matches!(&m.content, Content::Action(a) if a.action.is_cpr())
        });
    }

    fn target(&self, t: Target) -> Option<AgentId> {
        match t {
            Target::Role(r) => Some(self.by_role(r)),
            Target::Compressor => Some(self.mind.compressor),
            Target::Broadcast => None,
        }
    }

    fn await_result(&mut self, key: BeliefKey, from: AgentId) {
        let tick = self.tick;
        if let Some(a) = self.mind.awaiting.iter_mut().find(|a| a.key == key) {
            a.from = from;
            a.since = tick;
            a.last_query = tick;
        } else {
            self.mind.awaiting.push(Awaiting { key, from, since: tick, last_query: tick });
        }
    }

    fn voice(&mut self, d: Directive) {
        let me = self.leader;
        match d.kind {
            DirectiveKind::StandClear => {
                self.broadcast(me, Performative::Request, Content::Signal(Signal::StandClear));
            }
            DirectiveKind::StopResuscitation => {
                self.broadcast(me, Performative::Request, Content::Signal(Signal::StopResuscitation));
            }
            DirectiveKind::RotateCompressor => {
                let current = self.mind.compressor;
                let (next, stuck) = crate::agents::rotate_compressor(
                    &self.agents,
                    &self.sc.behavior.compressor_roles,
                    current,
                );
                let tick = self.tick;
                let (a, from, to) = (self.name(me), self.name(current), self.name(next));
                if stuck {
                    self.emit(|| {
                        Event::new(tick, EventType::Warning, &a, &to)
                            .with_content(json!({"detail": "no other eligible compressor"}))
                    });
                }
                self.emit(|| {
                    Event::new(tick, EventType::CompressorRotation, &a, &to)
                        .with_content(json!({"from": from, "to": to}))
                });
                self.mind.compressor = next;
                let leader = &mut self.agents[me.index()];
                leader.beliefs.set(BeliefKey::Compressor, BeliefValue::Agent(next), tick);
            }
            DirectiveKind::ChargeShock => {
                self.agents[me.index()].enqueue(Task::new(ActionId::ChargeAndShock));
            }
            DirectiveKind::PrepareDrug(drug) => self.mind.drug_queue.push_back(drug),
            DirectiveKind::InjectDrug(_) => {}
            kind => {
                let Some(action) = kind.action() else { return };
                let Some(to) = self.target(d.target) else { return };
                if to == me {
                    self.agents[me.index()].enqueue(Task::new(action));
                    return;
                }
                self.send(me, to, Performative::Request, Content::Action(ActionContent::new(action)));
                if action == ActionId::CheckPulse {
                    self.mind.pulse_since = Some(self.tick);
                    self.await_result(BeliefKey::Pulse, to);
                } else if let Some(goal) = goal_of(action, None) {
                    self.await_result(goal, to);
                }
            }
        }
    }

    /// Orders the next queued dose once the previous one is known to be given.
    fn issue_drug(&mut self) {
        if self.mind.drug_queue.is_empty() {
            return;
        }
        let k = self.mind.doses_issued;
        if k > 0 && !self.agents[self.leader.index()].beliefs.holds(BeliefKey::DrugGiven(k)) {
            return;
        }
        let drug = self.mind.drug_queue.pop_front().expect("non-empty");
        let dose = k + 1;
        self.mind.doses_issued = dose;
        self.mind.doses.insert(dose, drug);
        let nurse = self.by_role(Role::Paramedic3);
        self.order_dose(dose, drug, nurse);
        self.await_result(BeliefKey::DrugGiven(dose), nurse);
    }

    fn order_dose(&mut self, dose: u32, drug: crate::domain::Drug, nurse: AgentId) {
        let me = self.leader;
        let prepare = ActionContent::new(ActionId::PrepareDrug).with_seq(dose).with_drug(drug);
        let inject = ActionContent::new(ActionId::InjectDrug)
            .with_seq(dose)
            .with_drug(drug)
            .when(vec![BeliefKey::IvInstalled, BeliefKey::DrugPrepared(dose)]);
        self.send(me, nurse, Performative::Request, Content::Action(prepare));
        self.send(me, nurse, Performative::RequestWhen, Content::Action(inject));
    }

    /// The leader asked about `key` and the answer shows the job is not done:
    /// say the directive again.
    fn follow_up(&mut self, key: BeliefKey, from: AgentId) {
        let beliefs = &self.agents[self.leader.index()].beliefs;
        let open = match key {
            BeliefKey::Pulse => self.als.phase == AlsPhase::PostShockPulseCheck && !self.pulse_reported(),
            k => !beliefs.holds(k),
        };
        if !open {
            return;
        }
        let me = self.leader;
        let action = match key {
            BeliefKey::PadsAttached => ActionId::AttachDefibPads,
            BeliefKey::IvInstalled => ActionId::InstallIv,
            BeliefKey::AirwaySecured => ActionId::Intubate,
            BeliefKey::Pulse => ActionId::CheckPulse,
            BeliefKey::DrugGiven(k) | BeliefKey::DrugPrepared(k) => {
                if let Some(&drug) = self.mind.doses.get(&k) {
                    self.order_dose(k, drug, from);
                }
                return;
            }
            _ => return,
        };
        self.send(me, from, Performative::Request, Content::Action(ActionContent::new(action)));
    }

    fn stale_queries(&mut self) {
        let polling = !self.closed_loop() || self.sc.behavior.stale_query_under_closed_loop;
        let tick = self.tick;
        let window = self.sc.behavior.staleness_window;
        let pulse_done = self.pulse_reported() || self.als.phase != AlsPhase::PostShockPulseCheck;
        let beliefs = &self.agents[self.leader.index()].beliefs;
        self.mind.awaiting.retain(|a| match a.key {
            BeliefKey::Pulse => !pulse_done,
            k => !beliefs.holds(k),
        });
        if !polling {
            return;
        }
        let due: Vec<(BeliefKey, AgentId)> = self
            .mind
            .awaiting
            .iter_mut()
            .filter(|a| tick.saturating_sub(a.last_query.max(a.since)) >= window)
            .map(|a| {
                a.last_query = tick;
                (a.key, a.from)
            })
            .collect();
        for (key, from) in due {
            self.send(self.leader, from, Performative::QueryRef, Content::Query(key));
        }
    }

    // phase 4
    fn work(&mut self) -> Result<bool> {
        let mut flow = false;
        for i in 0..self.agents.len() {
            if self.agents[i].current().is_some_and(|t| t.action.is_cpr()) {
                flow = true;
            }
            if let Some(task) = self.agents[i].work() {
                self.complete(i, task)?;
            }
        }
        Ok(flow)
    }

    fn complete(&mut self, i: usize, task: Task) -> Result<()> {
        let me = AgentId(i as u8);
        let tick = self.tick;
        let spec = self.sc.catalog.get(task.action);
        let ok = roll_success(spec, &self.patient, &self.sc.defibrillation, &mut self.rng);
        let actor = self.name(me);
        let redundant = !task.erroneous && self.stale_ventilation(&task.content());
        let label = match (redundant, ok) {
            (true, _) => "redundant",
            (false, true) => "completed",
            (false, false) => "failed",
        };
        self.emit(|| {
            Event::new(tick, EventType::ActionEnd, &actor, PATIENT)
                .with_content(task_json(&task))
                .with_outcome(label)
        });
        if task.erroneous {
            return Ok(());
        }
        let leader = self.leader;
        match task.action {
            ActionId::ChestCompressions30 => {
                if !ok {
                    return Ok(());
                }
                if self.agents[i].duty != Duty::Compressing {
                    return Err(integrity(tick, format!("{actor} finished compressions off duty")));
                }
                for _ in 0..BLOCK_COMPRESSIONS {
                    self.als = self
                        .als
                        .advance_compression_cycle(CprEvent::Compression)
                        .map_err(|e| integrity(tick, e))?;
                }
                self.agents[i].add_tiredness(self.sc.behavior.tiredness_per_block);
                self.blocks += 1;
                let block = self.blocks;
                self.agents[i].duty = Duty::AwaitingVentilation(block);
                let cue = ActionContent::new(ActionId::VentilateX2).with_seq(block);
                let ventilator = self.by_role(Role::Paramedic2);
                if ventilator == me {
                    self.agents[i].enqueue(Task::from_content(&cue, false));
                } else {
                    self.send(me, ventilator, Performative::Request, Content::Action(cue));
                }
            }
            ActionId::VentilateX2 => {
                if redundant {
                    return Ok(());
                }
                if !ok {
                    self.agents[i].enqueue(task.retry());
                    return Ok(());
                }
                for _ in 0..BLOCK_VENTILATIONS {
                    self.als = self
                        .als
                        .advance_compression_cycle(CprEvent::Ventilation)
                        .map_err(|e| integrity(tick, e))?;
                }
                let block = task.seq.unwrap_or(0);
                if let Some(c) = self
                    .agents
                    .iter_mut()
                    .find(|a| a.duty == Duty::AwaitingVentilation(block))
                {
                    c.duty = Duty::Compressing;
                }
            }
            ActionId::ChargeAndShock => {
                self.counters.shocks += 1;
                self.shock_this_tick = true;
                let n = self.counters.shocks;
                if ok {
                    self.patient.rhythm = RhythmState::new(RhythmKind::NormalSinus, self.sc.als.rosc_rate);
                    self.patient.breathing = true;
                    self.log_rhythm();
                }
                self.emit(|| {
                    Event::new(tick, EventType::Shock, &actor, PATIENT)
                        .with_content(json!({"shock": n}))
                        .with_outcome(if ok { "converted" } else { "not_converted" })
                });
            }
            action => {
                if !ok {
                    if me != leader {
                        let content = Content::Action(task.content());
                        self.send(me, leader, Performative::Failure, content);
                    }
                    self.agents[i].enqueue(task.retry());
                    return Ok(());
                }
                let (key, value) = match action {
                    ActionId::CheckPulse => (BeliefKey::Pulse, BeliefValue::Bool(self.patient.pulse_present())),
                    ActionId::AttachDefibPads => {
                        self.pads_on = true;
                        (BeliefKey::PadsAttached, BeliefValue::Bool(true))
                    }
                    ActionId::InjectDrug => {
                        self.counters.drugs += 1;
                        let k = task.seq.unwrap_or(0);
                        self.agents[i].max_given = self.agents[i].max_given.max(k);
                        (BeliefKey::DrugGiven(k), BeliefValue::Bool(true))
                    }
                    other => match goal_of(other, task.seq) {
                        Some(k) => (k, BeliefValue::Bool(true)),
                        None => return Ok(()),
                    },
                };
                self.agents[i].beliefs.set(key, value, tick);
                let report = !matches!(key, BeliefKey::DrugPrepared(_));
                if report && me != leader {
                    self.send(me, leader, Performative::Inform, Content::Info { key, value });
                } else if me == leader {
                    self.agents[i].beliefs.set(key, value, tick);
                }
            }
        }
        Ok(())
    }

    fn log_rhythm(&mut self) {
        let tick = self.tick;
        let r = self.patient.rhythm;
        self.emit(|| {
            Event::new(tick, EventType::RhythmChange, PATIENT, PATIENT).with_content(json!(r))
        });
    }

    // phase 5
    fn patient_phase(&mut self, flow: bool) {
        let next = update_patient(&self.patient, flow, &self.sc.patient_dynamics);
        let changed = next.rhythm != self.patient.rhythm;
        self.patient = next;
        if changed {
            self.log_rhythm();
        }
    }

    // phase 6
    fn als_phase(&mut self) -> Result<()> {
        let tick = self.tick;
        let leader_beliefs = &self.agents[self.leader.index()].beliefs;
        let pads_believed = leader_beliefs.holds(BeliefKey::PadsAttached);
        let pulse_check = if self.pulse_reported() {
            match leader_beliefs.get(BeliefKey::Pulse) {
                BeliefValue::Bool(b) => Some(b),
                _ => None,
            }
        } else {
            None
        };
        let obs = Observation {
            monitor: (self.pads_on && pads_believed).then_some(self.patient.rhythm),
            pads_attached: pads_believed,
            shock_delivered: self.shock_this_tick,
            pulse_check,
            breathing: self.patient.breathing,
        };
        let before = self.als.clone();
        let (directives, next) = before
            .next_directives(&obs, &self.sc.als)
            .map_err(|e| integrity(tick, e))?;
        let leader_name = self.name(self.leader);
        let checked = next.rhythm_checks > before.rhythm_checks;
        if checked {
            self.halt_pending = true;
            let clock = if before.phase == AlsPhase::CprCycle { before.cycle_clock + 1 } else { before.cycle_clock };
            let n = next.rhythm_checks;
            let seen = obs.monitor;
            self.emit(|| {
                Event::new(tick, EventType::RhythmCheck, &leader_name, PATIENT)
                    .with_content(json!({"check": n, "cycle_clock": clock, "rhythm": seen}))
            });
            if let Some(r) = seen {
                let me = self.leader;
                self.agents[me.index()]
                    .beliefs
                    .set(BeliefKey::Rhythm, BeliefValue::Rhythm(r.kind), tick);
                self.broadcast(me, Performative::Inform, Content::Info {
                    key: BeliefKey::Rhythm,
                    value: BeliefValue::Rhythm(r.kind),
                });
            }
        }
        if next.phase != before.phase || (checked && next.phase == AlsPhase::CprCycle) {
            let phase = next.phase;
            self.emit(|| {
                Event::new(tick, EventType::AlsPhase, &leader_name, ALL).with_content(json!({"phase": phase}))
            });
        }
        if next.phase == AlsPhase::PostShockPulseCheck && before.phase != AlsPhase::PostShockPulseCheck {
            self.mind.pulse_since = None;
        }
        self.mind.directives.extend(directives);
        self.als = next;
        let outcome = match self.als.outcome {
            Some(o) => Some(o),
            None => check_termination(&obs, tick, self.sc.futility_limit),
        };
        if let Some(o) = outcome {
            if self.als.phase != AlsPhase::Terminated {
                self.als.phase = AlsPhase::Terminated;
                self.als.outcome = Some(o);
                self.emit(|| {
                    Event::new(tick, EventType::AlsPhase, &leader_name, ALL)
                        .with_content(json!({"phase": AlsPhase::Terminated}))
                });
            }
            self.outcome = Some(o.into());
            return Ok(());
        }
        for ev in self.channel.expire(tick) {
            if let ChannelEvent::Failed { original, sender, receiver, reason } = ev {
                self.on_failure(original, sender, receiver, reason);
            }
        }
        Ok(())
    }

    /// Lets outstanding answers be spoken so every exchange is closed, then
    /// writes the final record.
    fn finish(&mut self, outcome: RunOutcome) -> Result<()> {
        for _ in 0..16 {
            let ids = self.channel.queued_replies();
            if ids.is_empty() {
                break;
            }
            let spoken = self.mark_spoken(&ids);
            self.deliver_all(&spoken)?;
            for a in &mut self.agents {
                a.inbox.clear();
            }
        }
        self.end_log(outcome);
        Ok(())
    }

    fn end_log(&mut self, outcome: RunOutcome) {
        let tick = self.tick;
        let nf = self.no_flow.total();
        self.emit(|| {
            Event::new(tick, EventType::RunEnd, ENGINE, ALL)
                .with_content(json!({"total_seconds": tick, "no_flow_seconds": nf}))
                .with_outcome(outcome.as_str())
        });
    }

    /// Summary of a finished run.
    pub fn result(&self) -> Result<RunResult> {
        let outcome = self
            .outcome
            .ok_or_else(|| SimError::ProtocolMisuse("run has not finished".into()))?;
        let c = &self.counters;
        Ok(RunResult {
            seed: self.seed,
            protocol: self.sc.protocol.variant,
            outcome,
            total_seconds: self.tick,
            no_flow_seconds: self.no_flow.total(),
            total_messages: c.total,
            message_counts: c.messages.clone(),
            category_counts: c.categories.clone(),
            error_events: c.errors,
            hung_directives: c.hung,
            retransmissions: c.retransmissions,
            shocks: c.shocks,
            drugs: c.drugs,
        })
    }
}

fn task_json(t: &Task) -> serde_json::Value {
    let mut v = json!({"action": t.action, "remaining": t.remaining});
    if let Some(s) = t.seq {
        v["seq"] = json!(s);
    }
    if let Some(d) = t.drug {
        v["drug"] = json!(d);
    }
    if t.erroneous {
        v["erroneous"] = json!(true);
    }
    v
}

/// Output of [`run`].
#[derive(Debug, Clone)]
pub struct RunOutput {
    pub result: RunResult,
    pub events: Option<Vec<Event>>,
}

/// Runs `scenario` from `seed` to completion.
pub fn run(scenario: &ScenarioConfig, seed: u64, keep_log: bool) -> Result<RunOutput> {
    let mut w = World::new(scenario, seed, keep_log)?;
    while w.outcome.is_none() {
        w.step()?;
    }
    Ok(RunOutput { result: w.result()?, events: w.take_events() })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn perfusing_patient_stays_at_full_health() {
        let p = PatientState {
            health: 1.0,
            breathing: true,
            rhythm: RhythmState::new(RhythmKind::NormalSinus, 80),
            co2: 40.0,
            age: 50,
        };
        let n = update_patient(&p, false, &PatientDynamics::default());
        assert_eq!(n.health, 1.0);
    }

    #[test]
    fn hundred_seconds_of_no_flow() {
        let mut p = ScenarioConfig::default().patient;
        let h0 = p.health;
        for _ in 0..100 {
            p = update_patient(&p, false, &PatientDynamics::default());
        }
        assert!((h0 - p.health - 0.10).abs() < 1e-9);
        assert!(p.co2 > 60.0);
    }

    #[test]
    fn health_zero_gives_asystole() {
        let mut p = ScenarioConfig::default().patient;
        p.health = 0.0005;
        let n = update_patient(&p, false, &PatientDynamics::default());
        assert_eq!(n.health, 0.0);
        assert_eq!(n.rhythm.kind, RhythmKind::Asystole);
    }

    #[test]
    fn step_is_deterministic_from_a_cloned_world() {
        let sc = ScenarioConfig::default();
        let mut w = World::new(&sc, 3, true).unwrap();
        for _ in 0..50 {
            w.step().unwrap();
        }
        let mut a = w.clone();
        let mut b = w.clone();
        a.step().unwrap();
        b.step().unwrap();
        assert_eq!(a.events(), b.events());
    }

    #[test]
    fn invalid_scenario_does_not_run() {
        let mut sc = ScenarioConfig::default();
        sc.team[0].stress = 2.0;
        assert!(matches!(run(&sc, 1, false), Err(SimError::InvalidScenario(_))));
    }

    #[test]
    fn finished_world_refuses_to_step() {
        let sc = ScenarioConfig::default();
        let mut w = World::new(&sc, 5, false).unwrap();
        while w.outcome().is_none() {
            w.step().unwrap();
        }
        assert!(w.step().is_err());
        let r = w.result().unwrap();
        assert!(r.no_flow_seconds <= r.total_seconds);
    }
}
