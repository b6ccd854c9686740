//! The ALS cardiac-arrest algorithm as a pure state machine.
//!
//! The machine never touches the world. The engine feeds it an
//! [`Observation`] once per tick and turns the returned [`Directive`]s into
//! speech and actions for the team leader.

use serde::{Deserialize, Serialize};

use crate::domain::{classify_shockability, ActionId, Drug, RhythmState, Role, Shockability};
use crate::error::{Result, SimError};

pub const BLOCK_COMPRESSIONS: u8 = 30;
pub const BLOCK_VENTILATIONS: u8 = 2;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum AlsPhase {
    AssessArrival,
    CprCycle,
    RhythmCheck,
    Charging,
    ShockDelivery,
    PostShockPulseCheck,
    Terminated,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum AlsOutcome {
    #[serde(rename = "ROSC")]
    Rosc,
    Futile,
}

/// Scenario keys consumed by the state machine.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct AlsConfig {
    /// Seconds of CPR between rhythm checks.
    pub rhythm_check_interval: u32,
    /// On the unshockable branch adrenaline is given at the first check and
    /// then every `unshockable_adrenaline_every` checks.
    pub unshockable_adrenaline_every: u32,
    /// Heart rate reported after a successful shock.
    pub rosc_rate: u8,
}

impl Default for AlsConfig {
    fn default() -> Self {
        AlsConfig {
            rhythm_check_interval: 120,
            unshockable_adrenaline_every: 2,
            rosc_rate: 80,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct AlsState {
    pub phase: AlsPhase,
    /// Seconds of CPR since the last rhythm check.
    pub cycle_clock: u32,
    pub shock_count: u32,
    pub compressions_in_block: u8,
    pub ventilations_in_block: u8,
    pub next_drug: Option<Drug>,
    pub outcome: Option<AlsOutcome>,
    /// Whether the arrival directives have been issued.
    pub briefed: bool,
    pub unshockable_checks: u32,
    pub rhythm_checks: u32,
}

impl Default for AlsState {
    fn default() -> Self {
        AlsState::new()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum DirectiveKind {
    StartCompressions,
    GiveVentilations,
    AttachPads,
    InstallIv,
    Intubate,
    ChargeShock,
    StandClear,
    CheckPulse,
    PrepareDrug(Drug),
    InjectDrug(Drug),
    RotateCompressor,
    StopResuscitation,
}

impl DirectiveKind {
    /// The catalog action a directive asks for; `None` for coordination signals.
    pub fn action(self) -> Option<ActionId> {
        match self {
            DirectiveKind::StartCompressions => Some(ActionId::ChestCompressions30),
            DirectiveKind::GiveVentilations => Some(ActionId::VentilateX2),
            DirectiveKind::AttachPads => Some(ActionId::AttachDefibPads),
            DirectiveKind::InstallIv => Some(ActionId::InstallIv),
            DirectiveKind::Intubate => Some(ActionId::Intubate),
            DirectiveKind::ChargeShock => Some(ActionId::ChargeAndShock),
            DirectiveKind::CheckPulse => Some(ActionId::CheckPulse),
            DirectiveKind::PrepareDrug(_) => Some(ActionId::PrepareDrug),
            DirectiveKind::InjectDrug(_) => Some(ActionId::InjectDrug),
            DirectiveKind::StandClear
            | DirectiveKind::RotateCompressor
            | DirectiveKind::StopResuscitation => None,
        }
    }
}

/// Who a directive is meant for.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Target {
    Role(Role),
    /// The agent currently holding the compressor role.
    Compressor,
    Broadcast,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Directive {
    pub kind: DirectiveKind,
    pub target: Target,
}

impl Directive {
    fn new(kind: DirectiveKind, target: Target) -> Self {
        Directive { kind, target }
    }
}

/// What the leader can see or has been told this tick.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct Observation {
    /// Monitor reading; `None` until the pads are on.
    pub monitor: Option<RhythmState>,
    pub pads_attached: bool,
    /// The leader's own shock completed this tick.
    pub shock_delivered: bool,
    /// Result of the pending pulse check, once reported.
    pub pulse_check: Option<bool>,
    pub breathing: bool,
}

/// Drug due after the `n`-th pulseless shock.
pub fn drug_for_shock(n: u32) -> Result<Option<Drug>> {
    match n {
        0 => Err(SimError::Argument("shock count must be at least 1".into())),
        1 | 2 => Ok(None),
        n if n % 2 == 1 => Ok(Some(Drug::Adrenaline)),
        _ => Ok(Some(Drug::Amiodarone)),
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum CprEvent {
    Compression,
    Ventilation,
}

impl AlsState {
    pub fn new() -> Self {
        AlsState {
            phase: AlsPhase::AssessArrival,
            cycle_clock: 0,
            shock_count: 0,
            compressions_in_block: 0,
            ventilations_in_block: 0,
            next_drug: None,
            outcome: None,
            briefed: false,
            unshockable_checks: 0,
            rhythm_checks: 0,
        }
    }

    /// CPR is expected to be running in this phase.
    pub fn cpr_running(&self) -> bool {
        matches!(self.phase, AlsPhase::AssessArrival | AlsPhase::CprCycle)
    }

    /// Next step of the 30:2 block.
    pub fn cpr_next(&self) -> DirectiveKind {
        if self.compressions_in_block >= BLOCK_COMPRESSIONS {
            DirectiveKind::GiveVentilations
        } else {
            DirectiveKind::StartCompressions
        }
    }

    fn terminate(&mut self, outcome: AlsOutcome) {
        self.phase = AlsPhase::Terminated;
        self.outcome = Some(outcome);
    }

    fn resume_cpr(&mut self, out: &mut Vec<Directive>) {
        self.phase = AlsPhase::CprCycle;
        self.cycle_clock = 0;
        self.compressions_in_block = 0;
        self.ventilations_in_block = 0;
        out.push(Directive::new(DirectiveKind::RotateCompressor, Target::Compressor));
        out.push(Directive::new(DirectiveKind::StartCompressions, Target::Compressor));
    }

    fn push_drug(&mut self, drug: Drug, out: &mut Vec<Directive>) {
        self.next_drug = Some(drug);
        let nurse = Target::Role(Role::Paramedic3);
        out.push(Directive::new(DirectiveKind::PrepareDrug(drug), nurse));
        out.push(Directive::new(DirectiveKind::InjectDrug(drug), nurse));
    }

    fn rhythm_check(&mut self, obs: &Observation, cfg: &AlsConfig, out: &mut Vec<Directive>) {
        self.phase = AlsPhase::RhythmCheck;
        self.cycle_clock = 0;
        self.compressions_in_block = 0;
        self.ventilations_in_block = 0;
        self.rhythm_checks += 1;
        let Some(rhythm) = obs.monitor else {
            // no reading available: keep pumping
            self.resume_cpr(out);
            return;
        };
        match classify_shockability(rhythm) {
            Shockability::Shockable => {
                self.phase = AlsPhase::Charging;
                out.push(Directive::new(
                    DirectiveKind::ChargeShock,
                    Target::Role(Role::Physician),
                ));
                out.push(Directive::new(DirectiveKind::StandClear, Target::Broadcast));
            }
            Shockability::Unshockable => {
                self.unshockable_checks += 1;
                self.resume_cpr(out);
                let every = cfg.unshockable_adrenaline_every.max(1);
                if (self.unshockable_checks - 1) % every == 0 {
                    self.push_drug(Drug::Adrenaline, out);
                }
            }
            Shockability::Perfusing => {
                self.terminate(AlsOutcome::Rosc);
                out.push(Directive::new(DirectiveKind::StopResuscitation, Target::Broadcast));
            }
        }
    }

    /// Advances the machine by one tick.
    pub fn next_directives(
        &self,
        obs: &Observation,
        cfg: &AlsConfig,
    ) -> Result<(Vec<Directive>, AlsState)> {
        let mut next = self.clone();
        let mut out = Vec::new();
        match self.phase {
            AlsPhase::Terminated => {
                return Err(SimError::ProtocolMisuse(
                    "transition requested on a terminated resuscitation".into(),
                ))
            }
            AlsPhase::AssessArrival => {
                if !next.briefed {
                    next.briefed = true;
                    out.push(Directive::new(DirectiveKind::StartCompressions, Target::Compressor));
                    out.push(Directive::new(
                        DirectiveKind::AttachPads,
                        Target::Role(Role::Paramedic3),
                    ));
                    out.push(Directive::new(
                        DirectiveKind::InstallIv,
                        Target::Role(Role::Paramedic3),
                    ));
                    out.push(Directive::new(
                        DirectiveKind::Intubate,
                        Target::Role(Role::Paramedic2),
                    ));
                } else if obs.pads_attached && obs.monitor.is_some() {
                    next.rhythm_check(obs, cfg, &mut out);
                }
            }
            AlsPhase::CprCycle => {
                next.cycle_clock += 1;
                if next.cycle_clock >= cfg.rhythm_check_interval {
                    next.rhythm_check(obs, cfg, &mut out);
                }
            }
            AlsPhase::RhythmCheck => next.rhythm_check(obs, cfg, &mut out),
            AlsPhase::Charging => {
                if obs.shock_delivered {
                    next.phase = AlsPhase::ShockDelivery;
                }
            }
            AlsPhase::ShockDelivery => {
                next.phase = AlsPhase::PostShockPulseCheck;
                out.push(Directive::new(DirectiveKind::CheckPulse, Target::Compressor));
            }
            AlsPhase::PostShockPulseCheck => match obs.pulse_check {
                None => {}
                Some(true) if obs.breathing => {
                    next.terminate(AlsOutcome::Rosc);
                    out.push(Directive::new(DirectiveKind::StopResuscitation, Target::Broadcast));
                }
                Some(_) => {
                    next.shock_count += 1;
                    next.resume_cpr(&mut out);
                    match drug_for_shock(next.shock_count)? {
                        Some(drug) => next.push_drug(drug, &mut out),
                        None => next.next_drug = None,
                    }
                }
            },
        }
        Ok((out, next))
    }

    /// Records one compression or ventilation of the current 30:2 block.
    pub fn advance_compression_cycle(&self, completed: CprEvent) -> Result<AlsState> {
        if !self.cpr_running() {
            return Err(SimError::Sequencing(format!(
                "CPR event {completed:?} while in phase {:?}",
                self.phase
            )));
        }
        let mut next = self.clone();
        match completed {
            CprEvent::Compression => {
                if next.compressions_in_block >= BLOCK_COMPRESSIONS {
                    return Err(SimError::Sequencing(
                        "compression reported while ventilations are due".into(),
                    ));
                }
                next.compressions_in_block += 1;
            }
            CprEvent::Ventilation => {
                if next.compressions_in_block < BLOCK_COMPRESSIONS {
                    return Err(SimError::Sequencing(format!(
                        "ventilation reported after only {} compressions",
                        next.compressions_in_block
                    )));
                }
                next.ventilations_in_block += 1;
                if next.ventilations_in_block >= BLOCK_VENTILATIONS {
                    next.compressions_in_block = 0;
                    next.ventilations_in_block = 0;
                }
            }
        }
        Ok(next)
    }
}

/// ROSC once the monitor shows a perfusing rhythm and breathing is reported;
/// futile once `elapsed` reaches `futility_limit`.
pub fn check_termination(
    obs: &Observation,
    elapsed: u32,
    futility_limit: u32,
) -> Option<AlsOutcome> {
    let perfusing = obs
        .monitor
        .map(|r| classify_shockability(r) == Shockability::Perfusing)
        .unwrap_or(false);
    if perfusing && obs.breathing {
        Some(AlsOutcome::Rosc)
    } else if elapsed >= futility_limit {
        Some(AlsOutcome::Futile)
    } else {
        None
    }
}
