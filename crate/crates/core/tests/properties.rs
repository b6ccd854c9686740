use alsim::comms::{
    arbitrate_speakers, deliver, ActionContent, Content, Message, Performative, ProtocolConfig,
    ProtocolVariant, Reception,
};
use alsim::domain::{
    classify_shockability, roll_success, sample_duration, ActionId, AgentId, AgentProfile, Catalog,
    ContentCategory, DefibrillationModel, DurationWeights, PatientState, RhythmKind, RhythmState, Role,
};
use alsim::metrics::{mann_whitney_u, percentages};
use alsim::update_patient;
use alsim::scenario::PatientDynamics;
use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn profile(stress: f64, tiredness: f64, experience: f64) -> AgentProfile {
    AgentProfile {
        id: "x".into(),
        role: Role::Paramedic1,
        stress,
        tiredness,
        experience,
        familiarity: Default::default(),
    }
}

fn mean_duration(action: ActionId, p: &AgentProfile, n: usize, seed: u64) -> f64 {
    let catalog = Catalog::default();
    let spec = catalog.get(action);
    let w = DurationWeights::default();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..n).map(|_| sample_duration(spec, p, &w, &mut rng) as f64).sum::<f64>() / n as f64
}

proptest! {
    #[test]
    fn durations_stay_in_the_scaled_range(
        s in 0.0..=1.0f64, t in 0.0..=1.0f64, e in 0.0..=1.0f64, seed in any::<u64>(), pick in 0usize..9,
    ) {
        let catalog = Catalog::default();
        let spec = catalog.get(ActionId::ALL[pick]);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let d = sample_duration(spec, &profile(s, t, e), &DurationWeights::default(), &mut rng);
        let hi = (spec.duration_max as f64 * 1.75).round() as u32;
        prop_assert!(d >= spec.duration_min.max(1) && d <= hi, "{d} outside [{}, {hi}]", spec.duration_min);
    }

    #[test]
    fn shockability_is_pure(k in 0usize..5, rate in 0u8..=150) {
        let r = RhythmState { kind: RhythmKind::ALL[k], rate };
        prop_assert_eq!(classify_shockability(r), classify_shockability(r));
    }

    #[test]
    fn mishear_probability_is_clamped(
        base in 0.0..1.0f64, noise in 0.0..2.0f64, bonus in 0.0..1.0f64, fam in 0.0..=1.0f64, speakers in 1usize..8,
    ) {
        let cfg = ProtocolConfig { base_mishear: base, noise_coefficient: noise, familiarity_bonus: bonus, ..Default::default() };
        let p = cfg.mishear_probability(fam, speakers);
        let raw = base * (1.0 - bonus * fam) + noise * (speakers as f64 - 1.0);
        prop_assert!((0.0..=0.95).contains(&p));
        prop_assert!((p - raw.clamp(0.0, 0.95)).abs() < 1e-12);
    }

    #[test]
    fn mann_whitney_is_symmetric(
        a in prop::collection::vec(0u8..20, 1..30), b in prop::collection::vec(0u8..20, 1..30),
    ) {
        let a: Vec<f64> = a.into_iter().map(f64::from).collect();
        let b: Vec<f64> = b.into_iter().map(f64::from).collect();
        let ab = mann_whitney_u(&a, &b).unwrap();
        let ba = mann_whitney_u(&b, &a).unwrap();
        prop_assert_eq!(ab.u_a + ab.u_b, (a.len() * b.len()) as f64);
        prop_assert_eq!(ab.u_a, ba.u_b);
        prop_assert_eq!(ab.p_value, ba.p_value);
        prop_assert!((0.0..=1.0).contains(&ab.p_value));
    }

    #[test]
    fn percentages_sum_to_one_hundred(counts in prop::collection::vec(0u64..10_000, 1..12)) {
        let p = percentages(&counts);
        let total: u64 = counts.iter().sum();
        let sum: f64 = p.iter().sum();
        if total > 0 {
            prop_assert!((sum - 100.0).abs() <= 0.01, "{sum}");
        } else {
            prop_assert_eq!(sum, 0.0);
        }
        for (c, x) in counts.iter().zip(&p) {
            let exact = *c as f64 * 100.0 / total.max(1) as f64;
            prop_assert!((x - exact).abs() <= 0.01 + 1e-9);
        }
    }

    #[test]
    fn patient_drift_is_bounded(
        health in 0.0..=1.0f64, co2 in 0.0..150.0f64, flow in any::<bool>(), k in 0usize..5, rate in 0u8..=150,
    ) {
        let d = PatientDynamics::default();
        let p = PatientState {
            health,
            breathing: false,
            rhythm: RhythmState { kind: RhythmKind::ALL[k], rate },
            co2,
            age: 60,
        }
        .normalized();
        let n = update_patient(&p, flow, &d);
        prop_assert!((n.health - p.health).abs() <= d.d_noflow.max(d.r_rosc) + 1e-12);
        prop_assert!((0.0..=1.0).contains(&n.health));
        prop_assert!((n.co2 - p.co2).abs() <= d.co2_rate + 1e-12);
        if n.health == 0.0 {
            prop_assert_eq!(n.rhythm.kind, RhythmKind::Asystole);
        }
    }

    #[test]
    fn leader_mediation_grants_one_initiator(
        senders in prop::collection::vec(0u8..4, 1..6), replies in prop::collection::vec(any::<bool>(), 6),
    ) {
        let msgs: Vec<Message> = senders
            .iter()
            .enumerate()
            .map(|(i, &s)| Message {
                msg_id: i as u64,
                sender: AgentId(s),
                receivers: vec![AgentId((s + 1) % 4)],
                performative: Performative::Inform,
                content: Content::Action(ActionContent::new(ActionId::CheckPulse)),
                category: ContentCategory::PatientStatus,
                reply_to: replies[i].then_some(100),
                retransmit_of: None,
                tick_sent: None,
            })
            .collect();
        let refs: Vec<&Message> = msgs.iter().collect();
        let (granted, deferred) =
            arbitrate_speakers(&refs, ProtocolVariant::LeaderMediated, AgentId(0), |m| m.reply_to.is_some());
        prop_assert_eq!(granted.len() + deferred.len(), msgs.len());
        // one speaker opens a new exchange; the leader may say several things in its turn
        let initiators: std::collections::BTreeSet<AgentId> =
            granted.iter().filter(|m| m.reply_to.is_none()).map(|m| m.sender).collect();
        prop_assert!(initiators.len() <= 1, "{initiators:?}");
        let (all, _) = arbitrate_speakers(&refs, ProtocolVariant::Baseline, AgentId(0), |_| false);
        prop_assert_eq!(all.len(), msgs.len());
    }
}

#[test]
fn neutral_profile_mean_is_range_midpoint() {
    let catalog = Catalog::default();
    for action in [ActionId::Intubate, ActionId::InstallIv, ActionId::ChestCompressions30] {
        let spec = catalog.get(action);
        let want = (spec.duration_min + spec.duration_max) as f64 / 2.0;
        let got = mean_duration(action, &profile(0.0, 0.0, 1.0), 100_000, 11);
        assert!((got - want).abs() <= 0.02 * want, "{action:?}: {got} vs {want}");
    }
}

#[test]
fn worse_traits_never_shorten_expected_duration() {
    let base = mean_duration(ActionId::Intubate, &profile(0.2, 0.2, 0.8), 10_000, 3);
    let variants = [profile(0.7, 0.2, 0.8), profile(0.2, 0.7, 0.8), profile(0.2, 0.2, 0.3)];
    for p in variants {
        let m = mean_duration(ActionId::Intubate, &p, 10_000, 3);
        assert!(m >= base * 0.98, "{m} < {base}");
    }
}

#[test]
fn success_frequency_matches_effective_probability() {
    let catalog = Catalog::default();
    let spec = catalog.get(ActionId::ChargeAndShock);
    let defib = DefibrillationModel::default();
    let patient = PatientState {
        health: 0.6,
        breathing: false,
        rhythm: RhythmState { kind: RhythmKind::VF, rate: 140 },
        co2: 60.0,
        age: 70,
    };
    // written out from the model definition rather than calling the library
    let age = (1.0 - 0.005 * (70.0f64 - 40.0)).clamp(0.5, 1.0);
    let health = (0.5 + 0.6 / 2.0f64).clamp(0.5, 1.0);
    let p = (spec.base_success * age * health).clamp(0.01, 1.0);
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let n = 100_000;
    let hits = (0..n).filter(|_| roll_success(spec, &patient, &defib, &mut rng)).count();
    let freq = hits as f64 / n as f64;
    let se = (p * (1.0 - p) / n as f64).sqrt();
    assert!((freq - p).abs() <= 3.0 * se, "{freq} vs {p}");
}

#[test]
fn three_speakers_mishear_rate() {
    let cfg = ProtocolConfig { base_mishear: 0.1, noise_coefficient: 0.15, familiarity_bonus: 0.5, ..Default::default() };
    let msg = Message {
        msg_id: 0,
        sender: AgentId(0),
        receivers: vec![AgentId(1)],
        performative: Performative::Request,
        content: Content::Action(ActionContent::new(ActionId::Intubate)),
        category: ContentCategory::MedicalAction,
        reply_to: None,
        retransmit_of: None,
        tick_sent: Some(1),
    };
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let n = 100_000;
    let bad = (0..n)
        .filter(|_| deliver(&msg, &[(AgentId(1), 0.0)], 3, &cfg, &mut rng)[0].result != Reception::Heard)
        .count();
    let rate = bad as f64 / n as f64;
    assert!((rate - 0.40).abs() <= 0.01, "{rate}");
}
