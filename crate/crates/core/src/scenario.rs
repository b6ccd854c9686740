//! Scenario configuration: the patient, the team, the action catalog and
//! every tunable rate, plus validation and loading.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::als::AlsConfig;
use crate::comms::ProtocolConfig;
use crate::domain::{
    ActionId, AgentProfile, Catalog, DefibrillationModel, DurationWeights, PatientState, RhythmKind,
    RhythmState, Role,
};
use crate::error::{Result, SimError};

/// Per-second patient drift.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PatientDynamics {
    /// Health lost per second while pulseless without CPR.
    pub d_noflow: f64,
    /// Health lost per second while pulseless under CPR.
    pub d_cpr: f64,
    /// Health regained per second with a perfusing rhythm.
    pub r_rosc: f64,
    pub co2_flow_target: f64,
    pub co2_noflow_target: f64,
    pub co2_rate: f64,
}

impl Default for PatientDynamics {
    fn default() -> Self {
        PatientDynamics {
            d_noflow: 0.0010,
            d_cpr: 0.0002,
            r_rosc: 0.0005,
            co2_flow_target: 35.0,
            co2_noflow_target: 80.0,
            co2_rate: 0.5,
        }
    }
}

/// Team behaviour knobs that are not part of the ALS algorithm itself.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct BehaviorConfig {
    /// Seconds after which the leader asks about an unreported result.
    pub staleness_window: u32,
    /// Tiredness added to a compressor per completed block.
    pub tiredness_per_block: f64,
    /// Roles that take turns at compressions, first entry starts.
    pub compressor_roles: Vec<Role>,
    /// Whether the leader still polls for stale results when read-back is in use.
    pub stale_query_under_closed_loop: bool,
}

impl Default for BehaviorConfig {
    fn default() -> Self {
        BehaviorConfig {
            staleness_window: 30,
            tiredness_per_block: 0.02,
            compressor_roles: vec![Role::Paramedic1, Role::Paramedic3],
            stale_query_under_closed_loop: false,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScenarioConfig {
    pub patient: PatientState,
    pub team: Vec<AgentProfile>,
    #[serde(default)]
    pub catalog: Catalog,
    #[serde(default)]
    pub protocol: ProtocolConfig,
    #[serde(default)]
    pub patient_dynamics: PatientDynamics,
    #[serde(default = "default_futility")]
    pub futility_limit: u32,
    #[serde(default = "default_max_ticks")]
    pub max_ticks: u32,
    /// No-flow seconds incurred before the team arrived. They lower the
    /// starting health but are not counted in the run's no-flow metric.
    #[serde(default)]
    pub pre_arrival_no_flow: u32,
    #[serde(default)]
    pub duration_weights: DurationWeights,
    #[serde(default)]
    pub defibrillation: DefibrillationModel,
    #[serde(default)]
    pub als: AlsConfig,
    #[serde(default)]
    pub behavior: BehaviorConfig,
}

fn default_futility() -> u32 {
    1800
}

fn default_max_ticks() -> u32 {
    3600
}

impl Default for ScenarioConfig {
    fn default() -> Self {
        let ids = ["phy", "para1", "para2", "para3"];
        let traits = [(0.3, 0.0, 0.9), (0.2, 0.1, 0.7), (0.2, 0.1, 0.7), (0.3, 0.1, 0.5)];
        let fam = [
            [0.0, 0.6, 0.5, 0.5],
            [0.6, 0.0, 0.6, 0.5],
            [0.5, 0.6, 0.0, 0.5],
            [0.5, 0.5, 0.5, 0.0],
        ];
        let team = Role::ALL
            .iter()
            .enumerate()
            .map(|(i, &role)| AgentProfile {
                id: ids[i].to_string(),
                role,
                stress: traits[i].0,
                tiredness: traits[i].1,
                experience: traits[i].2,
                familiarity: ids
                    .iter()
                    .enumerate()
                    .filter(|(j, _)| *j != i)
                    .map(|(j, other)| (other.to_string(), fam[i][j]))
                    .collect(),
            })
            .collect();
        ScenarioConfig {
            patient: PatientState {
                health: 0.8,
                breathing: false,
                rhythm: RhythmState::new(RhythmKind::VF, 140),
                co2: 60.0,
                age: 60,
            },
            team,
            catalog: Catalog::default_catalog(),
            protocol: ProtocolConfig::default(),
            patient_dynamics: PatientDynamics::default(),
            futility_limit: default_futility(),
            max_ticks: default_max_ticks(),
            pre_arrival_no_flow: 0,
            duration_weights: DurationWeights::default(),
            defibrillation: DefibrillationModel::default(),
            als: AlsConfig::default(),
            behavior: BehaviorConfig::default(),
        }
    }
}

/// One broken rule, located by a dotted path into the scenario.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Violation {
    pub path: String,
    pub message: String,
}

impl fmt::Display for Violation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}: {}", self.path, self.message)
    }
}

struct Report(Vec<Violation>);

impl Report {
    fn push(&mut self, path: impl Into<String>, message: impl Into<String>) {
        self.0.push(Violation { path: path.into(), message: message.into() });
    }

    fn unit(&mut self, path: impl Into<String>, v: f64) {
        if !(0.0..=1.0).contains(&v) {
            self.push(path, format!("{v} is outside [0, 1]"));
        }
    }

    fn half_open(&mut self, path: impl Into<String>, v: f64) {
        if !(0.0..1.0).contains(&v) {
            self.push(path, format!("{v} is outside [0, 1)"));
        }
    }

    fn non_negative(&mut self, path: impl Into<String>, v: f64) {
        if !(v >= 0.0 && v.is_finite()) {
            self.push(path, format!("{v} must be a finite non-negative number"));
        }
    }

    fn positive(&mut self, path: impl Into<String>, v: u32) {
        if v == 0 {
            self.push(path, "must be at least 1");
        }
    }
}

/// Lists every problem with `s`. An empty list means the scenario can run.
pub fn validate_scenario(s: &ScenarioConfig) -> Vec<Violation> {
    let mut r = Report(Vec::new());

    let p = &s.patient;
    r.unit("patient.health", p.health);
    if !(0.0..=100.0).contains(&p.co2) {
        r.push("patient.co2", format!("{} is outside [0, 100]", p.co2));
    }
    if !p.rhythm.is_valid() {
        r.push(
            "patient.rhythm",
            format!("{:?} at rate {} is not a valid rhythm", p.rhythm.kind, p.rhythm.rate),
        );
    }
    if p.breathing && !p.pulse_present() {
        r.push("patient.breathing", "a pulseless patient cannot be breathing");
    }

    if s.team.len() != 4 {
        r.push("team", format!("expected 4 agents, found {}", s.team.len()));
    }
    let mut roles = BTreeMap::new();
    let mut ids = BTreeSet::new();
    for (i, a) in s.team.iter().enumerate() {
        let at = format!("team[{i}]");
        if a.id.trim().is_empty() {
            r.push(format!("{at}.id"), "agent id is empty");
        } else if !ids.insert(a.id.as_str()) {
            r.push(format!("{at}.id"), format!("duplicate agent id {:?}", a.id));
        }
        if let Some(prev) = roles.insert(a.role, i) {
            r.push(
                format!("{at}.role"),
                format!("role {} already taken by team[{prev}]", a.role),
            );
        }
        r.unit(format!("{at}({}).stress", a.id), a.stress);
        r.unit(format!("{at}({}).tiredness", a.id), a.tiredness);
        r.unit(format!("{at}({}).experience", a.id), a.experience);
    }
    for (i, a) in s.team.iter().enumerate() {
        for (other, v) in &a.familiarity {
            let at = format!("team[{i}]({}).familiarity.{other}", a.id);
            if other == &a.id {
                r.push(at.clone(), "an agent has no familiarity entry for itself");
            } else if !ids.contains(other.as_str()) {
                r.push(at.clone(), "refers to an unknown agent");
            }
            r.unit(at, *v);
        }
    }
    if s.team.len() == 4 {
        for role in Role::ALL {
            if !roles.contains_key(&role) {
                r.push("team", format!("no agent has role {role}"));
            }
        }
    }

    let mut seen = BTreeSet::new();
    for (i, spec) in s.catalog.specs().iter().enumerate() {
        let at = format!("catalog[{i}]({})", spec.action_id);
        if !seen.insert(spec.action_id) {
            r.push(at.clone(), "duplicate action");
        }
        if spec.duration_min < 1 {
            r.push(format!("{at}.duration_min"), "must be at least 1 second");
        }
        if spec.duration_max < spec.duration_min {
            r.push(
                format!("{at}.duration_max"),
                format!("{} is below duration_min {}", spec.duration_max, spec.duration_min),
            );
        }
        if !(spec.base_success > 0.0 && spec.base_success <= 1.0) {
            r.push(format!("{at}.base_success"), format!("{} is outside (0, 1]", spec.base_success));
        }
    }
    for id in ActionId::ALL {
        if !seen.contains(&id) {
            r.push("catalog", format!("missing action {id}"));
        }
    }

    let c = &s.protocol;
    r.half_open("protocol.base_mishear", c.base_mishear);
    r.non_negative("protocol.noise_coefficient", c.noise_coefficient);
    r.half_open("protocol.familiarity_bonus", c.familiarity_bonus);
    r.positive("protocol.ack_timeout", c.ack_timeout);
    r.positive("protocol.max_retransmits", c.max_retransmits);
    r.positive("protocol.reply_timeout", c.reply_timeout);
    r.unit("protocol.corrupted_execution", c.corrupted_execution);

    let d = &s.patient_dynamics;
    r.non_negative("patient_dynamics.d_noflow", d.d_noflow);
    r.non_negative("patient_dynamics.d_cpr", d.d_cpr);
    r.non_negative("patient_dynamics.r_rosc", d.r_rosc);
    r.non_negative("patient_dynamics.co2_rate", d.co2_rate);
    for (name, v) in [("co2_flow_target", d.co2_flow_target), ("co2_noflow_target", d.co2_noflow_target)] {
        if !(0.0..=100.0).contains(&v) {
            r.push(format!("patient_dynamics.{name}"), format!("{v} is outside [0, 100]"));
        }
    }

    r.positive("futility_limit", s.futility_limit);
    r.positive("max_ticks", s.max_ticks);
    r.positive("als.rhythm_check_interval", s.als.rhythm_check_interval);
    r.positive("als.unshockable_adrenaline_every", s.als.unshockable_adrenaline_every);
    if s.als.rosc_rate == 0 || s.als.rosc_rate > crate::domain::MAX_RHYTHM_RATE {
        r.push("als.rosc_rate", format!("{} is outside [1, 150]", s.als.rosc_rate));
    }

    let w = &s.duration_weights;
    r.non_negative("duration_weights.stress", w.stress);
    r.non_negative("duration_weights.tiredness", w.tiredness);
    r.non_negative("duration_weights.experience", w.experience);
    let m = &s.defibrillation;
    r.non_negative("defibrillation.age_slope", m.age_slope);
    r.unit("defibrillation.age_floor", m.age_floor);
    r.unit("defibrillation.health_floor", m.health_floor);

    let b = &s.behavior;
    r.positive("behavior.staleness_window", b.staleness_window);
    r.unit("behavior.tiredness_per_block", b.tiredness_per_block);
    let mut pool = BTreeSet::new();
    for (i, role) in b.compressor_roles.iter().enumerate() {
        if !pool.insert(*role) {
            r.push(format!("behavior.compressor_roles[{i}]"), format!("duplicate role {role}"));
        }
        if let Some(spec) = s.catalog.find(ActionId::ChestCompressions30) {
            if !spec.permits(*role) {
                r.push(
                    format!("behavior.compressor_roles[{i}]"),
                    format!("{role} may not perform chest compressions"),
                );
            }
        }
    }
    if b.compressor_roles.is_empty() {
        r.push("behavior.compressor_roles", "at least one compressor role is required");
    }

    r.0
}

impl ScenarioConfig {
    /// Parses a scenario. Lines whose first non-blank characters are `//`
    /// are comments.
    pub fn from_json_str(text: &str) -> Result<Self> {
        let stripped: String = text
            .lines()
            .map(|l| if l.trim_start().starts_with("//") { "" } else { l })
            .collect::<Vec<_>>()
            .join("\n");
        Ok(serde_json::from_str(&stripped)?)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::from_json_str(&std::fs::read_to_string(path)?)
    }

    /// Fails with every violation if the scenario is not runnable.
    pub fn validated(self) -> Result<Self> {
        let v = validate_scenario(&self);
        if v.is_empty() {
            Ok(self)
        } else {
            Err(SimError::InvalidScenario(v))
        }
    }

    pub fn agent_index(&self, role: Role) -> Option<usize> {
        self.team.iter().position(|a| a.role == role)
    }
}
