//! Structural invariants checked over the event logs of seeded runs.

use std::collections::{BTreeMap, BTreeSet};

use alsim::events::to_jsonl;
use alsim::{run, ProtocolVariant, ScenarioConfig, World};
use serde_json::Value;

fn scenario(v: ProtocolVariant, base_mishear: f64) -> ScenarioConfig {
    let mut sc = ScenarioConfig::default();
    sc.protocol.variant = v;
    sc.protocol.base_mishear = base_mishear;
    sc
}

fn log_of(sc: &ScenarioConfig, seed: u64) -> (alsim::RunResult, Vec<Value>) {
    let out = run(sc, seed, true).unwrap();
    let text = to_jsonl(out.events.as_deref().unwrap());
    (out.result, text.lines().map(|l| serde_json::from_str(l).unwrap()).collect())
}

fn ty(e: &Value) -> &str {
    e["event_type"].as_str().unwrap()
}

fn each_run(mut f: impl FnMut(ProtocolVariant, u64, &alsim::RunResult, &[Value])) {
    for v in ProtocolVariant::ALL {
        for seed in 0..25 {
            let (r, log) = log_of(&scenario(v, 0.15), seed);
            f(v, seed, &r, &log);
        }
    }
}

#[test]
fn ticks_are_conserved() {
    each_run(|v, seed, r, log| {
        let last = log.last().unwrap();
        assert_eq!(ty(last), "run_end");
        assert_eq!(last["tick"].as_u64().unwrap() as u32, r.total_seconds, "{v:?} {seed}");
        let mut prev = 0;
        for e in log {
            let t = e["tick"].as_u64().unwrap() as u32;
            assert!(t >= prev && t <= r.total_seconds);
            prev = t;
        }
        assert!(r.no_flow_seconds <= r.total_seconds);
    });
}

#[test]
fn counts_match_the_log() {
    each_run(|v, seed, r, log| {
        let mut by_perf: BTreeMap<String, u64> = BTreeMap::new();
        for e in log.iter().filter(|e| ty(e) == "speak") {
            *by_perf.entry(e["performative"].as_str().unwrap().to_string()).or_default() += 1;
        }
        for (p, n) in &r.message_counts {
            assert_eq!(by_perf.get(p.as_str()).copied().unwrap_or(0), *n, "{v:?} {seed} {p}");
        }
        assert_eq!(by_perf.values().sum::<u64>(), r.total_messages);
        let errors = log.iter().filter(|e| ty(e) == "error").count() as u64;
        assert_eq!(errors, r.error_events);
        let hung = log.iter().filter(|e| ty(e) == "directive_failure").count() as u64;
        assert_eq!(hung, r.hung_directives);
    });
}

#[test]
fn replies_resolve_to_spoken_originals() {
    each_run(|v, seed, _, log| {
        let mut spoken: BTreeMap<u64, &Value> = BTreeMap::new();
        for e in log.iter().filter(|e| ty(e) == "speak") {
            let id = e["msg_id"].as_u64().unwrap();
            if let Some(r) = e["reply_to"].as_u64() {
                assert!(spoken.contains_key(&r), "{v:?} {seed}: reply to unspoken {r}");
            }
            if matches!(e["performative"].as_str(), Some("Confirm" | "NotUnderstood")) {
                let mut cur = e["reply_to"].as_u64().expect("reply_to set");
                // walk to the original, which must be a directed message
                let mut hops = 0;
                while let Some(next) = spoken[&cur]["retransmit_of"].as_u64() {
                    cur = next;
                    hops += 1;
                    assert!(hops < 100);
                }
                assert_ne!(spoken[&cur]["target"], "all", "{v:?} {seed}");
            }
            spoken.insert(id, e);
        }
    });
}

#[test]
fn retransmissions_are_bounded() {
    each_run(|v, seed, _, log| {
        let mut per_original: BTreeMap<u64, u32> = BTreeMap::new();
        for e in log.iter().filter(|e| ty(e) == "speak") {
            if let Some(o) = e["retransmit_of"].as_u64() {
                *per_original.entry(o).or_default() += 1;
            }
        }
        let max = ScenarioConfig::default().protocol.max_retransmits;
        assert!(per_original.values().all(|&n| n <= max), "{v:?} {seed}: {per_original:?}");
    });
}

#[test]
fn leader_mediation_never_overlaps_initiators() {
    for v in [ProtocolVariant::LeaderMediated, ProtocolVariant::ClosedLoopLeaderMediated] {
        for seed in 0..25 {
            let (_, log) = log_of(&scenario(v, 0.15), seed);
            let mut per_tick: BTreeMap<u64, u32> = BTreeMap::new();
            for e in log.iter().filter(|e| ty(e) == "speak" && e["reply_to"].is_null()) {
                *per_tick.entry(e["tick"].as_u64().unwrap()).or_default() += 1;
            }
            assert!(per_tick.values().all(|&n| n <= 1), "{v:?} {seed}");
        }
    }
}

#[test]
fn nobody_works_on_two_tasks_at_once() {
    each_run(|v, seed, _, log| {
        let mut busy: BTreeSet<String> = BTreeSet::new();
        let mut remaining: BTreeMap<(String, String), u64> = BTreeMap::new();
        for e in log {
            let who = e["actor"].as_str().unwrap().to_string();
            let key = (who.clone(), e["content"]["action"].as_str().unwrap_or("").to_string());
            match ty(e) {
                "action_start" => assert!(busy.insert(who), "{v:?} {seed}: double start {e}"),
                "action_resume" => {
                    assert!(busy.insert(who), "{v:?} {seed}: double start {e}");
                    let left = e["content"]["remaining"].as_u64().unwrap();
                    assert_eq!(remaining.remove(&key), Some(left), "{v:?} {seed}: resume lost time");
                }
                "action_end" => {
                    assert!(busy.remove(&who), "{v:?} {seed}: end while idle {e}");
                    if e["outcome"] == "suspended" {
                        remaining.insert(key, e["content"]["remaining"].as_u64().unwrap());
                    }
                }
                _ => {}
            }
        }
    });
}

#[test]
fn drugs_follow_the_schedule() {
    each_run(|v, seed, _, log| {
        let mut shocks = 0;
        let mut given = Vec::new();
        for e in log {
            match ty(e) {
                "shock" => shocks += 1,
                "action_end"
                    if e["outcome"] == "completed"
                        && e["content"]["action"] == "inject_drug"
                        && e["content"]["erroneous"].is_null() =>
                {
                    given.push((e["content"]["drug"].as_str().unwrap().to_string(), shocks));
                }
                _ => {}
            }
        }
        let first_rhythm = log.iter().find(|e| ty(e) == "rhythm_check").map(|e| e["content"]["rhythm"]["kind"].clone());
        let shockable = matches!(first_rhythm.as_ref().and_then(|k| k.as_str()), Some("VF" | "PulselessVT"));
        if !shockable {
            return;
        }
        for (k, (drug, shocks_before)) in given.iter().enumerate() {
            let want = if k % 2 == 0 { "Adrenaline" } else { "Amiodarone" };
            assert_eq!(drug, want, "{v:?} {seed}");
            assert!(*shocks_before >= k + 3, "{v:?} {seed}: dose {} after {shocks_before} shocks", k + 1);
        }
    });
}

#[test]
fn leader_speaks_before_the_first_block() {
    let sc = ScenarioConfig::default();
    for seed in 0..100 {
        let (_, log) = log_of(&sc, seed);
        let first_block = log
            .iter()
            .position(|e| ty(e) == "action_end" && e["content"]["action"] == "chest_compressions_30")
            .unwrap();
        assert!(log[..first_block].iter().any(|e| ty(e) == "speak" && e["performative"] == "Request"), "seed {seed}");
    }
}

#[test]
fn tiredness_only_rises() {
    let sc = ScenarioConfig::default();
    let mut w = World::new(&sc, 9, false).unwrap();
    let mut last: Vec<f64> = w.agents.iter().map(|a| a.profile.tiredness).collect();
    while w.outcome().is_none() {
        w.step().unwrap();
        for (a, prev) in w.agents.iter().zip(last.iter_mut()) {
            assert!(a.profile.tiredness >= *prev && a.profile.tiredness <= 1.0);
            *prev = a.profile.tiredness;
        }
    }
}

#[test]
fn quiescent_tick_only_advances_clocks() {
    let sc = ScenarioConfig::default();
    for seed in 0..20 {
        let mut w = World::new(&sc, seed, true).unwrap();
        while w.outcome().is_none() {
            let quiet_before = w.channel.is_quiet() && w.agents.iter().all(|a| a.current().is_some());
            let before = w.events().unwrap().len();
            w.step().unwrap();
            if quiet_before {
                let new = &w.events().unwrap()[before..];
                assert!(new.iter().all(|e| e.event_type != alsim::EventType::Speak), "seed {seed}");
            }
        }
    }
}

#[test]
fn rhythm_check_lands_on_the_tick_the_clock_reaches_the_interval() {
    let sc = ScenarioConfig::default();
    let log = (0..50)
        .map(|seed| log_of(&sc, seed).1)
        .find(|log| log.iter().filter(|e| ty(e) == "rhythm_check").count() >= 2)
        .expect("some seed reaches a second rhythm check");
    let restart = log.iter().find(|e| ty(e) == "als_phase" && e["content"]["phase"] == "CprCycle").unwrap();
    let t0 = restart["tick"].as_u64().unwrap();
    let check = log.iter().filter(|e| ty(e) == "rhythm_check").nth(1).unwrap();
    assert_eq!(check["tick"].as_u64().unwrap(), t0 + 120);
    assert_eq!(check["content"]["cycle_clock"], 120);
}

#[test]
fn logging_does_not_change_results() {
    let sc = ScenarioConfig::default();
    for seed in 0..20 {
        assert_eq!(run(&sc, seed, true).unwrap().result, run(&sc, seed, false).unwrap().result);
    }
}

#[test]
fn single_run_batch_equals_the_run() {
    let sc = ScenarioConfig::default();
    let b = alsim::monte_carlo(&sc, 1, 17, 1).unwrap();
    let r = run(&sc, 17, false).unwrap().result;
    assert_eq!(b.summary.total_seconds.mean, r.total_seconds as f64);
    assert_eq!(b.summary.total_seconds.median, r.total_seconds as f64);
    assert_eq!(b.summary.total_seconds.stddev, 0.0);
    assert_eq!(b.summary.no_flow_seconds.mean, r.no_flow_seconds as f64);
    assert_eq!(b.results(), vec![r]);
}
