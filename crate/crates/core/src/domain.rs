//! Core value types: patient, rhythm, team roles, the action catalog, and the
//! stochastic duration/success primitives used by every other module.

use std::collections::BTreeMap;
use std::fmt;

use rand::Rng;
use serde::{Deserialize, Serialize};

/// Index of an agent within its team (0..4, in scenario order).
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct AgentId(pub u8);

impl AgentId {
    pub fn index(self) -> usize {
        self.0 as usize
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum Role {
    Physician,
    Paramedic1,
    Paramedic2,
    Paramedic3,
}

impl Role {
    pub const ALL: [Role; 4] = [
        Role::Physician,
        Role::Paramedic1,
        Role::Paramedic2,
        Role::Paramedic3,
    ];
}

impl fmt::Display for Role {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        fmt::Debug::fmt(self, f)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum RhythmKind {
    NormalSinus,
    VF,
    PulselessVT,
    Asystole,
    PEA,
}

impl RhythmKind {
    pub const ALL: [RhythmKind; 5] = [
        RhythmKind::NormalSinus,
        RhythmKind::VF,
        RhythmKind::PulselessVT,
        RhythmKind::Asystole,
        RhythmKind::PEA,
    ];
}

/// Cardiac rhythm as read from the monitor. `rate` is in beats per minute.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct RhythmState {
    pub kind: RhythmKind,
    pub rate: u8,
}

pub const MAX_RHYTHM_RATE: u8 = 150;

impl RhythmState {
    pub fn new(kind: RhythmKind, rate: u8) -> Self {
        let rate = match kind {
            RhythmKind::Asystole => 0,
            _ => rate.min(MAX_RHYTHM_RATE),
        };
        RhythmState { kind, rate }
    }

    pub fn is_valid(&self) -> bool {
        self.rate <= MAX_RHYTHM_RATE && (self.kind != RhythmKind::Asystole || self.rate == 0)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Shockability {
    Shockable,
    Unshockable,
    Perfusing,
}

pub fn classify_shockability(rhythm: RhythmState) -> Shockability {
    match rhythm.kind {
        RhythmKind::VF | RhythmKind::PulselessVT => Shockability::Shockable,
        RhythmKind::Asystole | RhythmKind::PEA => Shockability::Unshockable,
        RhythmKind::NormalSinus => Shockability::Perfusing,
    }
}

/// Abstract victim physiology. The patient only reacts to what the team does.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PatientState {
    pub health: f64,
    pub breathing: bool,
    pub rhythm: RhythmState,
    pub co2: f64,
    pub age: u32,
}

impl PatientState {
    pub fn pulse_present(&self) -> bool {
        self.rhythm.kind == RhythmKind::NormalSinus
    }

    /// Clamps health and CO2 into range and enforces the health-zero asystole rule.
    pub fn normalized(mut self) -> Self {
        self.health = self.health.clamp(0.0, 1.0);
        self.co2 = self.co2.clamp(0.0, 100.0);
        if self.health <= 0.0 {
            self.rhythm = RhythmState::new(RhythmKind::Asystole, 0);
            self.breathing = false;
        }
        self
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum ContentCategory {
    MedicalAction,
    Time,
    MedicineAdministration,
    PatientStatus,
    EquipmentStatus,
}

impl ContentCategory {
    pub const ALL: [ContentCategory; 5] = [
        ContentCategory::MedicalAction,
        ContentCategory::Time,
        ContentCategory::MedicineAdministration,
        ContentCategory::PatientStatus,
        ContentCategory::EquipmentStatus,
    ];
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum Drug {
    Adrenaline,
    Amiodarone,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ActionId {
    #[serde(rename = "chest_compressions_30")]
    ChestCompressions30,
    VentilateX2,
    AttachDefibPads,
    ChargeAndShock,
    CheckPulse,
    Intubate,
    InstallIv,
    PrepareDrug,
    InjectDrug,
}

impl ActionId {
    pub const ALL: [ActionId; 9] = [
        ActionId::ChestCompressions30,
        ActionId::VentilateX2,
        ActionId::AttachDefibPads,
        ActionId::ChargeAndShock,
        ActionId::CheckPulse,
        ActionId::Intubate,
        ActionId::InstallIv,
        ActionId::PrepareDrug,
        ActionId::InjectDrug,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            ActionId::ChestCompressions30 => "chest_compressions_30",
            ActionId::VentilateX2 => "ventilate_x2",
            ActionId::AttachDefibPads => "attach_defib_pads",
            ActionId::ChargeAndShock => "charge_and_shock",
            ActionId::CheckPulse => "check_pulse",
            ActionId::Intubate => "intubate",
            ActionId::InstallIv => "install_iv",
            ActionId::PrepareDrug => "prepare_drug",
            ActionId::InjectDrug => "inject_drug",
        }
    }

    /// Compressions and ventilations are the two halves of a CPR block.
    pub fn is_cpr(self) -> bool {
        matches!(self, ActionId::ChestCompressions30 | ActionId::VentilateX2)
    }

    /// Interruption priority, higher preempts lower.
    pub fn priority(self) -> u8 {
        match self {
            ActionId::CheckPulse => 9,
            ActionId::ChestCompressions30 => 8,
            ActionId::ChargeAndShock => 7,
            ActionId::AttachDefibPads => 6,
            ActionId::VentilateX2 => 5,
            ActionId::InjectDrug => 4,
            ActionId::PrepareDrug => 3,
            ActionId::Intubate => 2,
            ActionId::InstallIv => 1,
        }
    }
}

impl fmt::Display for ActionId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

/// How an action's success probability is derived.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SuccessModel {
    #[default]
    Fixed,
    /// Scaled by the patient's age and health.
    Defibrillation,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ActionSpec {
    pub action_id: ActionId,
    /// Roles allowed to perform the action; empty means any role.
    #[serde(default)]
    pub allowed_roles: Vec<Role>,
    pub duration_min: u32,
    pub duration_max: u32,
    pub base_success: f64,
    pub category: ContentCategory,
    #[serde(default)]
    pub interruptible: bool,
    #[serde(default)]
    pub success_model: SuccessModel,
}

impl ActionSpec {
    pub fn permits(&self, role: Role) -> bool {
        self.allowed_roles.is_empty() || self.allowed_roles.contains(&role)
    }
}

/// The set of actions agents can perform, indexed by [`ActionId`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct Catalog {
    specs: Vec<ActionSpec>,
}

impl Catalog {
    pub fn new(specs: Vec<ActionSpec>) -> Self {
        Catalog { specs }
    }

    pub fn specs(&self) -> &[ActionSpec] {
        &self.specs
    }

    pub fn find(&self, id: ActionId) -> Option<&ActionSpec> {
        self.specs.iter().find(|s| s.action_id == id)
    }

    /// Looks up an action that validation guarantees to exist.
    pub fn get(&self, id: ActionId) -> &ActionSpec {
        self.find(id)
            .unwrap_or_else(|| panic!("action {id} missing from a validated catalog"))
    }

    /// The shipped default catalog. Durations in seconds; all values are
    /// tunable placeholders.
    pub fn default_catalog() -> Self {
        use ActionId::*;
        use ContentCategory::*;
        use Role::*;
        let spec = |action_id, roles: &[Role], min, max, p, category, interruptible| ActionSpec {
            action_id,
            allowed_roles: roles.to_vec(),
            duration_min: min,
            duration_max: max,
            base_success: p,
            category,
            interruptible,
            success_model: SuccessModel::Fixed,
        };
        let mut shock = spec(ChargeAndShock, &[Physician], 8, 15, 0.4, MedicalAction, false);
        shock.success_model = SuccessModel::Defibrillation;
        Catalog::new(vec![
            spec(ChestCompressions30, &[], 15, 20, 0.98, MedicalAction, true),
            spec(VentilateX2, &[Paramedic2], 3, 5, 0.95, MedicalAction, false),
            spec(AttachDefibPads, &[Paramedic1, Paramedic3], 20, 40, 0.95, EquipmentStatus, false),
            shock,
            spec(CheckPulse, &[], 5, 10, 0.9, PatientStatus, false),
            spec(Intubate, &[Paramedic2], 30, 90, 0.8, MedicalAction, true),
            spec(InstallIv, &[Paramedic1, Paramedic3], 30, 120, 0.85, EquipmentStatus, true),
            spec(PrepareDrug, &[Paramedic1, Paramedic3], 15, 40, 0.95, MedicineAdministration, true),
            spec(InjectDrug, &[Paramedic1, Paramedic3], 5, 10, 0.98, MedicineAdministration, false),
        ])
    }
}

impl Default for Catalog {
    fn default() -> Self {
        Catalog::default_catalog()
    }
}

/// Static attributes of one team member. All traits lie in [0, 1].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AgentProfile {
    pub id: String,
    pub role: Role,
    pub stress: f64,
    pub tiredness: f64,
    pub experience: f64,
    /// How well this agent knows each teammate, keyed by teammate id.
    #[serde(default)]
    pub familiarity: BTreeMap<String, f64>,
}

impl AgentProfile {
    pub fn familiarity_with(&self, other: &str) -> f64 {
        self.familiarity.get(other).copied().unwrap_or(0.0)
    }
}

/// Weights of the linear duration multiplier.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DurationWeights {
    pub stress: f64,
    pub tiredness: f64,
    pub experience: f64,
}

impl Default for DurationWeights {
    fn default() -> Self {
        DurationWeights {
            stress: 0.25,
            tiredness: 0.25,
            experience: 0.25,
        }
    }
}

impl DurationWeights {
    pub fn multiplier(&self, profile: &AgentProfile) -> f64 {
        1.0 + self.stress * profile.stress
            + self.tiredness * profile.tiredness
            + self.experience * (1.0 - profile.experience)
    }
}

/// Samples how many whole seconds `profile` needs to perform `spec`.
pub fn sample_duration<R: Rng + ?Sized>(
    spec: &ActionSpec,
    profile: &AgentProfile,
    weights: &DurationWeights,
    rng: &mut R,
) -> u32 {
    let base = if spec.duration_max > spec.duration_min {
        rng.gen_range(spec.duration_min as f64..=spec.duration_max as f64)
    } else {
        // keep one draw per call so the stream position does not depend on the range
        let _: f64 = rng.gen();
        spec.duration_min as f64
    };
    let scaled = (base * weights.multiplier(profile)).round();
    (scaled as u32).max(1)
}

/// Age/health scaling of defibrillation success.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DefibrillationModel {
    pub age_pivot: f64,
    pub age_slope: f64,
    pub age_floor: f64,
    pub health_floor: f64,
}

impl Default for DefibrillationModel {
    fn default() -> Self {
        DefibrillationModel {
            age_pivot: 40.0,
            age_slope: 0.005,
            age_floor: 0.5,
            health_floor: 0.5,
        }
    }
}

impl DefibrillationModel {
    pub fn age_factor(&self, age: u32) -> f64 {
        (1.0 - self.age_slope * (age as f64 - self.age_pivot).max(0.0)).clamp(self.age_floor, 1.0)
    }

    pub fn health_factor(&self, health: f64) -> f64 {
        (0.5 + health / 2.0).clamp(self.health_floor, 1.0)
    }
}

pub const SUCCESS_FLOOR: f64 = 0.01;

/// Effective success probability of `spec` on `patient`.
pub fn success_probability(
    spec: &ActionSpec,
    patient: &PatientState,
    defib: &DefibrillationModel,
) -> f64 {
    match spec.success_model {
        SuccessModel::Fixed => spec.base_success,
        SuccessModel::Defibrillation => (spec.base_success
            * defib.age_factor(patient.age)
            * defib.health_factor(patient.health))
        .clamp(SUCCESS_FLOOR, 1.0),
    }
}

/// Draws exactly one uniform and compares it with the effective probability.
pub fn roll_success<R: Rng + ?Sized>(
    spec: &ActionSpec,
    patient: &PatientState,
    defib: &DefibrillationModel,
    rng: &mut R,
) -> bool {
    let u: f64 = rng.gen();
    u < success_probability(spec, patient, defib)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn profile(stress: f64, tiredness: f64, experience: f64) -> AgentProfile {
        AgentProfile {
            id: "a".into(),
            role: Role::Paramedic1,
            stress,
            tiredness,
            experience,
            familiarity: BTreeMap::new(),
        }
    }

    fn ranged(min: u32, max: u32) -> ActionSpec {
        ActionSpec {
            action_id: ActionId::CheckPulse,
            allowed_roles: vec![],
            duration_min: min,
            duration_max: max,
            base_success: 1.0,
            category: ContentCategory::PatientStatus,
            interruptible: false,
            success_model: SuccessModel::Fixed,
        }
    }

    fn patient(age: u32, health: f64) -> PatientState {
        PatientState {
            health,
            breathing: false,
            rhythm: RhythmState::new(RhythmKind::VF, 140),
            co2: 40.0,
            age,
        }
    }

    #[test]
    fn shockability_table() {
        use RhythmKind::*;
        assert_eq!(classify_shockability(RhythmState::new(VF, 140)), Shockability::Shockable);
        assert_eq!(
            classify_shockability(RhythmState::new(PulselessVT, 120)),
            Shockability::Shockable
        );
        assert_eq!(classify_shockability(RhythmState::new(Asystole, 0)), Shockability::Unshockable);
        assert_eq!(classify_shockability(RhythmState::new(PEA, 40)), Shockability::Unshockable);
        assert_eq!(
            classify_shockability(RhythmState::new(NormalSinus, 72)),
            Shockability::Perfusing
        );
    }

    #[test]
    fn asystole_forces_zero_rate() {
        let r = RhythmState::new(RhythmKind::Asystole, 90);
        assert_eq!(r.rate, 0);
        assert!(r.is_valid());
        assert!(!RhythmState { kind: RhythmKind::Asystole, rate: 3 }.is_valid());
        assert_eq!(RhythmState::new(RhythmKind::VF, 200).rate, MAX_RHYTHM_RATE);
    }

    #[test]
    fn neutral_profile_stays_in_range() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let w = DurationWeights::default();
        let p = profile(0.0, 0.0, 1.0);
        assert_eq!(w.multiplier(&p), 1.0);
        for _ in 0..1000 {
            let d = sample_duration(&ranged(4, 8), &p, &w, &mut rng);
            assert!((4..=8).contains(&d));
        }
    }

    #[test]
    fn worst_profile_multiplier() {
        assert_eq!(DurationWeights::default().multiplier(&profile(1.0, 1.0, 0.0)), 1.75);
    }

    #[test]
    fn degenerate_range_is_scaled() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let d = sample_duration(
            &ranged(10, 10),
            &profile(0.4, 0.0, 1.0),
            &DurationWeights::default(),
            &mut rng,
        );
        assert_eq!(d, 11);
    }

    #[test]
    fn duration_is_at_least_one_second() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let w = DurationWeights { stress: -5.0, tiredness: 0.0, experience: 0.0 };
        assert_eq!(sample_duration(&ranged(1, 1), &profile(1.0, 0.0, 1.0), &w, &mut rng), 1);
    }

    #[test]
    fn certain_action_always_succeeds() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let spec = ranged(1, 2);
        let defib = DefibrillationModel::default();
        assert!((0..10_000).all(|_| roll_success(&spec, &patient(90, 0.0), &defib, &mut rng)));
    }

    #[test]
    fn defibrillation_factors() {
        let m = DefibrillationModel::default();
        assert_eq!(m.age_factor(40), 1.0);
        assert_eq!(m.age_factor(30), 1.0);
        assert!((m.age_factor(60) - 0.9).abs() < 1e-12);
        assert_eq!(m.age_factor(200), 0.5);
        assert_eq!(m.health_factor(0.5), 0.75);
        assert_eq!(m.health_factor(0.0), 0.5);
        assert_eq!(m.health_factor(1.0), 1.0);
        let shock = Catalog::default_catalog().get(ActionId::ChargeAndShock).clone();
        let p = success_probability(&shock, &patient(40, 0.5), &m);
        assert!((p - 0.30).abs() < 1e-12);
        let weak = ActionSpec { base_success: 0.001, ..shock };
        assert_eq!(success_probability(&weak, &patient(90, 0.0), &m), SUCCESS_FLOOR);
    }

    #[test]
    fn non_defibrillation_ignores_patient() {
        let spec = ActionSpec { base_success: 0.37, ..ranged(1, 1) };
        let m = DefibrillationModel::default();
        assert_eq!(success_probability(&spec, &patient(95, 0.0), &m), 0.37);
    }

    #[test]
    fn health_zero_forces_asystole() {
        let p = PatientState { health: -0.2, co2: 140.0, ..patient(50, 0.0) }.normalized();
        assert_eq!(p.health, 0.0);
        assert_eq!(p.co2, 100.0);
        assert_eq!(p.rhythm.kind, RhythmKind::Asystole);
        assert!(!p.pulse_present());
    }

    #[test]
    fn default_catalog_is_complete() {
        let c = Catalog::default_catalog();
        for id in ActionId::ALL {
            assert!(c.find(id).is_some(), "{id}");
        }
        assert!(!c.get(ActionId::Intubate).permits(Role::Paramedic1));
        assert!(c.get(ActionId::CheckPulse).permits(Role::Physician));
    }
}
