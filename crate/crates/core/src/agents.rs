//! Team members: beliefs, the task queue with pre-emption, request handling,
//! and compressor rotation.

use std::collections::BTreeMap;

use rand::Rng;

use crate::comms::{ActionContent, BeliefKey, BeliefValue, Content, Message, Performative};
use crate::domain::{
    sample_duration, ActionId, AgentId, AgentProfile, Catalog, Drug, DurationWeights, Role,
};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Belief {
    pub value: BeliefValue,
    pub tick: u32,
}

/// What one agent holds true, with the tick each fact was last updated.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct Beliefs {
    map: BTreeMap<BeliefKey, Belief>,
}

impl Beliefs {
    pub fn get(&self, key: BeliefKey) -> BeliefValue {
        self.map.get(&key).map_or(BeliefValue::Unknown, |b| b.value)
    }

    pub fn holds(&self, key: BeliefKey) -> bool {
        self.get(key) == BeliefValue::Bool(true)
    }

    pub fn stamp(&self, key: BeliefKey) -> Option<u32> {
        self.map.get(&key).map(|b| b.tick)
    }

    pub fn set(&mut self, key: BeliefKey, value: BeliefValue, tick: u32) {
        self.map.insert(key, Belief { value, tick });
    }

    pub fn iter(&self) -> impl Iterator<Item = (&BeliefKey, &Belief)> {
        self.map.iter()
    }
}

/// A unit of work an agent has accepted.
#[derive(Debug, Clone, PartialEq)]
pub struct Task {
    pub action: ActionId,
    pub seq: Option<u32>,
    pub drug: Option<Drug>,
    /// Seconds of work left; meaningful once `started`.
    pub remaining: u32,
    pub started: bool,
    /// Taken up from misheard content; has no effect when done.
    pub erroneous: bool,
}

impl Task {
    pub fn new(action: ActionId) -> Self {
        Task { action, seq: None, drug: None, remaining: 0, started: false, erroneous: false }
    }

    pub fn from_content(c: &ActionContent, erroneous: bool) -> Self {
        Task { seq: c.seq, drug: c.drug, erroneous, ..Task::new(c.action) }
    }

    pub fn same_work(&self, c: &ActionContent) -> bool {
        self.action == c.action && self.seq == c.seq && self.drug == c.drug
    }

    /// The same task, to be attempted again from scratch.
    pub fn retry(&self) -> Task {
        Task { remaining: 0, started: false, ..self.clone() }
    }

    pub fn content(&self) -> ActionContent {
        ActionContent { action: self.action, seq: self.seq, drug: self.drug, when: Vec::new() }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum Status {
    Available,
    Busy(Task),
}

/// The compressor's place in the 30:2 loop.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Duty {
    Off,
    Compressing,
    /// Block `n` is done; waiting for its ventilations.
    AwaitingVentilation(u32),
}

/// A message as one listener took it in.
#[derive(Debug, Clone, PartialEq)]
pub struct Heard {
    pub msg: Message,
    /// What the listener understood; differs from `msg.content` if misheard.
    pub content: Content,
    pub corrupted: bool,
    /// Picked up by a listener who was not addressed.
    pub overheard: bool,
}

#[derive(Debug, Clone, PartialEq)]
pub enum RequestOutcome {
    Accepted,
    /// Stored until its condition holds.
    Stored,
    /// Already queued or under way.
    Duplicate,
    /// The goal already holds; the agent re-reports it.
    AlreadyDone(BeliefKey),
    Refused(String),
    /// RequestWhen without a condition.
    Malformed,
}

impl RequestOutcome {
    pub fn agrees(&self) -> bool {
        matches!(
            self,
            RequestOutcome::Accepted
                | RequestOutcome::Stored
                | RequestOutcome::Duplicate
                | RequestOutcome::AlreadyDone(_)
        )
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum TaskEvent {
    Started(Task),
    Resumed(Task),
    Suspended(Task),
}

/// The belief an action establishes when it succeeds.
pub fn goal_of(action: ActionId, seq: Option<u32>) -> Option<BeliefKey> {
    match action {
        ActionId::AttachDefibPads => Some(BeliefKey::PadsAttached),
        ActionId::InstallIv => Some(BeliefKey::IvInstalled),
        ActionId::Intubate => Some(BeliefKey::AirwaySecured),
        ActionId::PrepareDrug => Some(BeliefKey::DrugPrepared(seq.unwrap_or(0))),
        ActionId::InjectDrug => Some(BeliefKey::DrugGiven(seq.unwrap_or(0))),
        _ => None,
    }
}

#[derive(Debug, Clone)]
pub struct AgentRuntime {
    pub id: AgentId,
    /// Static profile; `tiredness` grows during the run.
    pub profile: AgentProfile,
    pub status: Status,
    pub beliefs: Beliefs,
    pub inbox: Vec<Heard>,
    /// Accepted work, highest priority first, FIFO within a priority.
    pub queue: Vec<Task>,
    pub conditional: Vec<(Task, Vec<BeliefKey>)>,
    pub duty: Duty,
    /// Highest drug dose this agent has injected.
    pub max_given: u32,
}

impl AgentRuntime {
    pub fn new(id: AgentId, profile: AgentProfile) -> Self {
        AgentRuntime {
            id,
            profile,
            status: Status::Available,
            beliefs: Beliefs::default(),
            inbox: Vec::new(),
            queue: Vec::new(),
            conditional: Vec::new(),
            duty: Duty::Off,
            max_given: 0,
        }
    }

    pub fn role(&self) -> Role {
        self.profile.role
    }

    pub fn current(&self) -> Option<&Task> {
        match &self.status {
            Status::Busy(t) => Some(t),
            Status::Available => None,
        }
    }

    pub fn is_busy_with(&self, action: ActionId) -> bool {
        self.current().is_some_and(|t| t.action == action)
    }

    /// Updates beliefs from heard Inform and Confirm content.
    pub fn perceive(&mut self, heard: &[Heard], tick: u32) {
        for h in heard {
            if !matches!(h.msg.performative, Performative::Inform | Performative::Confirm) {
                continue;
            }
            if let Content::Info { key, value } = h.content {
                self.beliefs.set(key, value, tick);
            }
        }
    }

    fn has_work(&self, c: &ActionContent) -> bool {
        self.current().is_some_and(|t| t.same_work(c))
            || self.queue.iter().any(|t| t.same_work(c))
            || self.conditional.iter().any(|(t, _)| t.same_work(c))
    }

    pub fn enqueue(&mut self, task: Task) {
        let p = task.action.priority();
        let at = self
            .queue
            .iter()
            .position(|t| t.action.priority() < p)
            .unwrap_or(self.queue.len());
        self.queue.insert(at, task);
    }

    /// Decides how to take up a heard request for `content`.
    pub fn handle_request(
        &mut self,
        performative: Performative,
        content: &ActionContent,
        catalog: &Catalog,
        erroneous: bool,
    ) -> RequestOutcome {
        if performative == Performative::RequestWhen && content.when.is_empty() {
            return RequestOutcome::Malformed;
        }
        let Some(spec) = catalog.find(content.action) else {
            return RequestOutcome::Refused(format!("unknown action {}", content.action));
        };
        if !spec.permits(self.role()) {
            return RequestOutcome::Refused(format!("{} may not {}", self.role(), content.action));
        }
        if erroneous && (content.action.is_cpr() || content.action == ActionId::ChargeAndShock) {
            return RequestOutcome::Refused(format!("cannot start {} now", content.action));
        }
        if let Some(goal) = goal_of(content.action, content.seq) {
            let given = content.action == ActionId::InjectDrug
                && content.seq.is_some_and(|k| k <= self.max_given);
            if self.beliefs.holds(goal) || given {
                return RequestOutcome::AlreadyDone(goal);
            }
        }
        if let (ActionId::InjectDrug, Some(k), false) = (content.action, content.seq, erroneous) {
            let next = self.max_given + 1;
            let gap_covered = (next..k).all(|j| self.holds_dose_order(j));
            if k > next && !gap_covered {
                return RequestOutcome::Refused(format!("dose {next} has not been given"));
            }
        }
        if content.action == ActionId::ChestCompressions30 {
            if self.duty != Duty::Off {
                return RequestOutcome::Duplicate;
            }
            self.duty = Duty::Compressing;
            return RequestOutcome::Accepted;
        }
        if self.has_work(content) {
            return RequestOutcome::Duplicate;
        }
        let task = Task::from_content(content, erroneous);
        if performative == Performative::RequestWhen {
            self.conditional.push((task, content.when.clone()));
            RequestOutcome::Stored
        } else {
            self.enqueue(task);
            RequestOutcome::Accepted
        }
    }

    fn holds_dose_order(&self, dose: u32) -> bool {
        let is_dose = |t: &Task| t.action == ActionId::InjectDrug && t.seq == Some(dose) && !t.erroneous;
        self.current().is_some_and(is_dose)
            || self.queue.iter().any(is_dose)
            || self.conditional.iter().any(|(t, _)| is_dose(t))
    }

    /// Moves conditional requests whose conditions now hold into the queue.
    /// Doses are given strictly in order.
    pub fn activate_conditionals(&mut self) -> usize {
        let mut fired = Vec::new();
        let mut i = 0;
        while i < self.conditional.len() {
            let (task, when) = &self.conditional[i];
            let ready = when.iter().all(|k| self.beliefs.holds(*k))
                && (task.action != ActionId::InjectDrug
                    || task.seq == Some(self.max_given + 1));
            if ready {
                fired.push(self.conditional.remove(i).0);
            } else {
                i += 1;
            }
        }
        let n = fired.len();
        for t in fired {
            self.enqueue(t);
        }
        n
    }

    /// Starts, resumes or pre-empts work. Draws one uniform per fresh start.
    pub fn decide<R: Rng + ?Sized>(
        &mut self,
        catalog: &Catalog,
        weights: &DurationWeights,
        rng: &mut R,
    ) -> Vec<TaskEvent> {
        if self.duty == Duty::Compressing
            && !self.is_busy_with(ActionId::ChestCompressions30)
            && !self.queue.iter().any(|t| t.action == ActionId::ChestCompressions30)
        {
            self.enqueue(Task::new(ActionId::ChestCompressions30));
        }
        let mut out = Vec::new();
        let Some(head) = self.queue.first() else {
            return out;
        };
        if let Status::Busy(cur) = &self.status {
            let preempt = catalog.get(cur.action).interruptible
                && head.action.priority() > cur.action.priority();
            if !preempt {
                return out;
            }
            let cur = cur.clone();
            self.status = Status::Available;
            out.push(TaskEvent::Suspended(cur.clone()));
            self.enqueue(cur);
        }
        let mut task = self.queue.remove(0);
        if task.started {
            out.push(TaskEvent::Resumed(task.clone()));
        } else {
            task.remaining = sample_duration(catalog.get(task.action), &self.profile, weights, rng);
            task.started = true;
            out.push(TaskEvent::Started(task.clone()));
        }
        self.status = Status::Busy(task);
        out
    }

    /// Spends one second on the current task; returns it when finished.
    pub fn work(&mut self) -> Option<Task> {
        let Status::Busy(t) = &mut self.status else {
            return None;
        };
        t.remaining -= 1;
        if t.remaining > 0 {
            return None;
        }
        match std::mem::replace(&mut self.status, Status::Available) {
            Status::Busy(t) => Some(t),
            Status::Available => None,
        }
    }

    /// Drops all CPR work; returns the CPR task that was under way, if any.
    pub fn halt_cpr(&mut self) -> Option<Task> {
        self.duty = Duty::Off;
        self.queue.retain(|t| !t.action.is_cpr());
        self.conditional.retain(|(t, _)| !t.action.is_cpr());
        if self.current().is_some_and(|t| t.action.is_cpr()) {
            match std::mem::replace(&mut self.status, Status::Available) {
                Status::Busy(t) => return Some(t),
                Status::Available => unreachable!(),
            }
        }
        None
    }

    pub fn add_tiredness(&mut self, delta: f64) {
        self.profile.tiredness = (self.profile.tiredness + delta).clamp(0.0, 1.0);
    }
}

/// Fixed tie-break order for rotation.
const ROTATION_ORDER: [Role; 4] = [Role::Paramedic1, Role::Paramedic3, Role::Paramedic2, Role::Physician];

/// Picks the next compressor: the least tired eligible agent other than
/// `current`. The flag is set when nobody else is eligible.
pub fn rotate_compressor(team: &[AgentRuntime], pool: &[Role], current: AgentId) -> (AgentId, bool) {
    let rank = |r: Role| ROTATION_ORDER.iter().position(|x| *x == r).unwrap_or(usize::MAX);
    let best = team
        .iter()
        .filter(|a| a.id != current && pool.contains(&a.role()))
        .min_by(|a, b| {
            a.profile
                .tiredness
                .total_cmp(&b.profile.tiredness)
                .then(rank(a.role()).cmp(&rank(b.role())))
        });
    match best {
        Some(a) => (a.id, false),
        None => (current, true),
    }
}
