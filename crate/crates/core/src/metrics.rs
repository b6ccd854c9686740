//! No Flow accounting, communication distributions and arm comparison.

use std::collections::BTreeMap;
use std::io::Write;

use serde::{Deserialize, Serialize};
use statrs::distribution::{ContinuousCDF, Normal};
use statrs::statistics::{Data, Distribution, Median};

use crate::comms::{fipa_category, FipaCategory, Performative};
use crate::domain::ContentCategory;
use crate::engine::RunResult;
use crate::error::{Result, SimError};

/// Running No Flow total. Call once per tick, in tick order.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct NoFlowAccumulator {
    last_tick: Option<u32>,
    total: u32,
}

impl NoFlowAccumulator {
    /// Returns the second this tick contributes (0 or 1).
    pub fn accumulate(&mut self, tick: u32, pulse_present: bool, cpr_active: bool) -> Result<u32> {
        if self.last_tick.is_some_and(|t| tick <= t) {
            return Err(SimError::Integrity {
                tick,
                detail: format!("no-flow tick out of order after {}", self.last_tick.unwrap_or(0)),
            });
        }
        self.last_tick = Some(tick);
        let add = u32::from(!pulse_present && !cpr_active);
        self.total += add;
        Ok(add)
    }

    pub fn total(&self) -> u32 {
        self.total
    }
}

/// The subset of an event-log line the analysis needs. Unknown fields are ignored
/// and the performative is kept as text so that foreign logs can be diagnosed.
#[derive(Debug, Clone, PartialEq, Deserialize)]
pub struct LogRecord {
    pub tick: u32,
    pub event_type: String,
    #[serde(default)]
    pub actor: String,
    #[serde(default)]
    pub target: String,
    #[serde(default)]
    pub performative: Option<String>,
    #[serde(default)]
    pub category: Option<ContentCategory>,
}

/// Parses a JSON-lines log. Blank lines are skipped.
pub fn parse_log(text: &str) -> Result<Vec<LogRecord>> {
    text.lines()
        .filter(|l| !l.trim().is_empty())
        .map(|l| serde_json::from_str(l).map_err(SimError::from))
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Share {
    pub label: String,
    pub count: u64,
    pub percent: f64,
}

/// Message counts by performative, FIPA category and content category.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct DistributionReport {
    pub total: u64,
    pub performatives: Vec<Share>,
    pub fipa_categories: Vec<Share>,
    pub content_categories: Vec<Share>,
}

/// Two-decimal percentages that add up to exactly 100 when `total > 0`
/// (largest remainder on hundredths of a percent).
pub fn percentages(counts: &[u64]) -> Vec<f64> {
    let total: u64 = counts.iter().sum();
    if total == 0 {
        return vec![0.0; counts.len()];
    }
    let scaled: Vec<u128> = counts.iter().map(|&c| c as u128 * 10_000).collect();
    let mut units: Vec<u128> = scaled.iter().map(|s| s / total as u128).collect();
    let short = 10_000 - units.iter().sum::<u128>();
    let mut order: Vec<usize> = (0..counts.len()).collect();
    order.sort_by_key(|&i| std::cmp::Reverse((scaled[i] % total as u128, std::cmp::Reverse(i))));
    for &i in order.iter().take(short as usize) {
        units[i] += 1;
    }
    units.into_iter().map(|u| u as f64 / 100.0).collect()
}

fn shares<K: Copy>(keys: &[K], label: impl Fn(K) -> String, count: impl Fn(K) -> u64) -> Vec<Share> {
    let counts: Vec<u64> = keys.iter().map(|&k| count(k)).collect();
    keys.iter()
        .zip(percentages(&counts))
        .zip(&counts)
        .map(|((&k, percent), &count)| Share { label: label(k), count, percent })
        .collect()
}

fn get<K: Ord>(m: &BTreeMap<K, u64>, k: K) -> u64 {
    m.get(&k).copied().unwrap_or(0)
}

fn fipa_label(c: FipaCategory) -> String {
    match c {
        FipaCategory::PerfActions => "PerfActions",
        FipaCategory::RequestInfo => "RequestInfo",
        FipaCategory::PassingInfo => "PassingInfo",
        FipaCategory::ErrorHand => "ErrorHand",
    }
    .to_string()
}

fn content_label(c: ContentCategory) -> String {
    serde_json::to_value(c)
        .ok()
        .and_then(|v| v.as_str().map(str::to_string))
        .unwrap_or_default()
}

/// Distribution of every spoken message in `log`.
pub fn fipa_distribution(log: &[LogRecord]) -> Result<DistributionReport> {
    let mut by_perf: BTreeMap<Performative, u64> = BTreeMap::new();
    let mut by_content: BTreeMap<ContentCategory, u64> = BTreeMap::new();
    let mut bad = Vec::new();
    for (i, r) in log.iter().enumerate() {
        if r.event_type != "speak" {
            continue;
        }
        let perf = r.performative.as_deref().and_then(Performative::parse);
        match perf {
            Some(p) => {
                *by_perf.entry(p).or_default() += 1;
                if let Some(c) = r.category {
                    *by_content.entry(c).or_default() += 1;
                }
            }
            None => bad.push(format!(
                "record {} (tick {}): {:?}",
                i + 1,
                r.tick,
                r.performative.as_deref().unwrap_or("<missing>")
            )),
        }
    }
    if !bad.is_empty() {
        return Err(SimError::Argument(format!("unknown performative in {}", bad.join("; "))));
    }
    let mut by_fipa: BTreeMap<FipaCategory, u64> = BTreeMap::new();
    for (&p, &n) in &by_perf {
        *by_fipa.entry(fipa_category(p)).or_default() += n;
    }
    Ok(DistributionReport {
        total: by_perf.values().sum(),
        performatives: shares(&Performative::ALL, |p| p.as_str().to_string(), |p| get(&by_perf, p)),
        fipa_categories: shares(&FipaCategory::ALL, fipa_label, |c| get(&by_fipa, c)),
        content_categories: shares(&ContentCategory::ALL, content_label, |c| get(&by_content, c)),
    })
}

/// Writes `block,label,count,percent` rows.
pub fn write_distribution_csv<W: Write>(r: &DistributionReport, out: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record(["block", "label", "count", "percent"]).map_err(csv_err)?;
    let blocks = [
        ("performative", &r.performatives),
        ("fipa_category", &r.fipa_categories),
        ("content_category", &r.content_categories),
    ];
    for (block, rows) in blocks {
        for s in rows {
            w.write_record([block, &s.label, &s.count.to_string(), &format!("{:.2}", s.percent)])
                .map_err(csv_err)?;
        }
    }
    w.write_record(["total", "all", &r.total.to_string(), if r.total > 0 { "100.00" } else { "0.00" }])
        .map_err(csv_err)?;
    w.flush()?;
    Ok(())
}

fn csv_err(e: csv::Error) -> SimError {
    match e.into_kind() {
        csv::ErrorKind::Io(io) => SimError::Io(io),
        other => SimError::Argument(format!("csv: {other:?}")),
    }
}

/// Mean, median and sample standard deviation.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Stats {
    pub n: usize,
    pub mean: f64,
    pub median: f64,
    pub stddev: f64,
}

impl Stats {
    pub fn of(xs: &[f64]) -> Stats {
        if xs.is_empty() {
            return Stats { n: 0, mean: 0.0, median: 0.0, stddev: 0.0 };
        }
        let d = Data::new(xs.to_vec());
        let stddev = if xs.len() < 2 { 0.0 } else { d.std_dev().unwrap_or(0.0) };
        Stats { n: xs.len(), mean: d.mean().unwrap_or(0.0), median: d.median(), stddev }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct MannWhitney {
    pub u_a: f64,
    pub u_b: f64,
    /// Two-sided.
    pub p_value: f64,
    pub exact: bool,
}

/// Largest pooled size for which the exact null distribution is used.
pub const EXACT_LIMIT: usize = 16;

/// Midranks (1-based) of `pooled`, plus the tie groups' sizes.
fn midranks(pooled: &[f64]) -> (Vec<f64>, Vec<usize>) {
    let mut idx: Vec<usize> = (0..pooled.len()).collect();
    idx.sort_by(|&i, &j| pooled[i].total_cmp(&pooled[j]));
    let mut ranks = vec![0.0; pooled.len()];
    let mut ties = Vec::new();
    let mut start = 0;
    while start < idx.len() {
        let mut end = start + 1;
        while end < idx.len() && pooled[idx[end]] == pooled[idx[start]] {
            end += 1;
        }
        let rank = (start + 1 + end) as f64 / 2.0;
        for &i in &idx[start..end] {
            ranks[i] = rank;
        }
        if end - start > 1 {
            ties.push(end - start);
        }
        start = end;
    }
    (ranks, ties)
}

/// `counts[u]` = number of ways to label `n` of `n + m` distinct values as
/// sample a such that U_a = u.
fn u_null_counts(n: usize, m: usize) -> Vec<u64> {
    // f[i][j][u] built incrementally: adding the largest value to a adds j to U
    let max = n * m;
    let mut table = vec![vec![Vec::<u64>::new(); m + 1]; n + 1];
    for i in 0..=n {
        for j in 0..=m {
            let mut f = vec![0u64; i * j + 1];
            if i == 0 || j == 0 {
                f[0] = 1;
            } else {
                for (u, slot) in f.iter_mut().enumerate() {
                    let from_a = if u >= j { table[i - 1][j].get(u - j).copied().unwrap_or(0) } else { 0 };
                    let from_b = table[i][j - 1].get(u).copied().unwrap_or(0);
                    *slot = from_a + from_b;
                }
            }
            table[i][j] = f;
        }
    }
    let out = std::mem::take(&mut table[n][m]);
    debug_assert_eq!(out.len(), max + 1);
    out
}

/// Two-sided Mann-Whitney U test.
pub fn mann_whitney_u(a: &[f64], b: &[f64]) -> Result<MannWhitney> {
    if a.is_empty() || b.is_empty() {
        return Err(SimError::Argument("mann_whitney_u needs two non-empty samples".into()));
    }
    if a.iter().chain(b).any(|x| x.is_nan()) {
        return Err(SimError::Argument("mann_whitney_u samples contain NaN".into()));
    }
    let (n, m) = (a.len(), b.len());
    let pooled: Vec<f64> = a.iter().chain(b).copied().collect();
    let (ranks, ties) = midranks(&pooled);
    let r_a: f64 = ranks[..n].iter().sum();
    let r_b: f64 = ranks[n..].iter().sum();
    let u_a = r_a - (n * (n + 1)) as f64 / 2.0;
    let u_b = r_b - (m * (m + 1)) as f64 / 2.0;
    let nm = (n * m) as f64;

    if n + m <= EXACT_LIMIT && ties.is_empty() {
        let counts = u_null_counts(n, m);
        let total: u64 = counts.iter().sum();
        let u = u_a as usize;
        let lower: u64 = counts[..=u].iter().sum();
        let upper: u64 = counts[u..].iter().sum();
        let p = (2.0 * lower.min(upper) as f64 / total as f64).min(1.0);
        return Ok(MannWhitney { u_a, u_b, p_value: p, exact: true });
    }

    let big_n = (n + m) as f64;
    let tie_term: f64 = ties.iter().map(|&t| (t * t * t - t) as f64).sum::<f64>() / (big_n * (big_n - 1.0));
    let var = nm / 12.0 * ((big_n + 1.0) - tie_term);
    if var <= 0.0 {
        return Ok(MannWhitney { u_a, u_b, p_value: 1.0, exact: false });
    }
    let dev = ((u_a - nm / 2.0).abs() - 0.5).max(0.0);
    let z = dev / var.sqrt();
    let std = Normal::standard();
    let p = (2.0 * (1.0 - std.cdf(z))).min(1.0);
    Ok(MannWhitney { u_a, u_b, p_value: p, exact: false })
}

/// Metric keys accepted by [`compare_arms`].
pub const METRIC_KEYS: [&str; 6] = [
    "no_flow_seconds",
    "total_seconds",
    "error_events",
    "total_messages",
    "hung_directives",
    "retransmissions",
];

pub fn metric_value(r: &RunResult, key: &str) -> Result<f64> {
    Ok(match key {
        "no_flow_seconds" => r.no_flow_seconds as f64,
        "total_seconds" => r.total_seconds as f64,
        "error_events" => r.error_events as f64,
        "total_messages" => r.total_messages as f64,
        "hung_directives" => r.hung_directives as f64,
        "retransmissions" => r.retransmissions as f64,
        other => {
            return Err(SimError::Argument(format!(
                "unknown metric {other:?}; expected one of {}",
                METRIC_KEYS.join(", ")
            )))
        }
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum Direction {
    ALower,
    BLower,
    None,
}

impl Direction {
    pub fn as_str(self) -> &'static str {
        match self {
            Direction::ALower => "a_lower",
            Direction::BLower => "b_lower",
            Direction::None => "none",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Comparison {
    pub metric: String,
    pub a: Stats,
    pub b: Stats,
    pub test: MannWhitney,
    pub direction: Direction,
}

/// Compares one metric across two sets of raw values.
pub fn compare_samples(metric: &str, a: &[f64], b: &[f64]) -> Result<Comparison> {
    if a.len() < 2 || b.len() < 2 {
        return Err(SimError::Argument(format!(
            "compare needs at least 2 runs per arm, got {} and {}",
            a.len(),
            b.len()
        )));
    }
    let test = mann_whitney_u(a, b)?;
    let half = (a.len() * b.len()) as f64 / 2.0;
    let direction = if test.u_a < half {
        Direction::ALower
    } else if test.u_a > half {
        Direction::BLower
    } else {
        Direction::None
    };
    Ok(Comparison { metric: metric.to_string(), a: Stats::of(a), b: Stats::of(b), test, direction })
}

/// Compares `metric` between two batches of run results.
pub fn compare_arms(a: &[RunResult], b: &[RunResult], metric: &str) -> Result<Comparison> {
    let xs = a.iter().map(|r| metric_value(r, metric)).collect::<Result<Vec<_>>>()?;
    let ys = b.iter().map(|r| metric_value(r, metric)).collect::<Result<Vec<_>>>()?;
    compare_samples(metric, &xs, &ys)
}

pub const COMPARE_COLUMNS: [&str; 13] = [
    "metric", "n_a", "mean_a", "median_a", "stddev_a", "n_b", "mean_b", "median_b", "stddev_b", "u_a", "u_b",
    "p_value", "direction",
];

pub fn write_comparison_csv<W: Write>(rows: &[Comparison], out: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record(COMPARE_COLUMNS).map_err(csv_err)?;
    for c in rows {
        w.write_record([
            c.metric.clone(),
            c.a.n.to_string(),
            format!("{:.4}", c.a.mean),
            format!("{:.4}", c.a.median),
            format!("{:.4}", c.a.stddev),
            c.b.n.to_string(),
            format!("{:.4}", c.b.mean),
            format!("{:.4}", c.b.median),
            format!("{:.4}", c.b.stddev),
            format!("{:.1}", c.test.u_a),
            format!("{:.1}", c.test.u_b),
            format!("{:.6}", c.test.p_value),
            c.direction.as_str().to_string(),
        ])
        .map_err(csv_err)?;
    }
    w.flush()?;
    Ok(())
}

pub const RUN_COLUMNS: [&str; 12] = [
    "seed", "protocol", "outcome", "total_seconds", "no_flow_seconds", "total_messages", "error_events",
    "hung_directives", "retransmissions", "shocks", "drugs", "fault",
];

/// One row per seed; faulted seeds carry only the fault text.
pub fn write_runs_csv<W: Write>(runs: &[(u64, std::result::Result<RunResult, String>)], out: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record(RUN_COLUMNS).map_err(csv_err)?;
    for (seed, r) in runs {
        let row: Vec<String> = match r {
            Ok(r) => vec![
                seed.to_string(),
                r.protocol.as_str().to_string(),
                r.outcome.as_str().to_string(),
                r.total_seconds.to_string(),
                r.no_flow_seconds.to_string(),
                r.total_messages.to_string(),
                r.error_events.to_string(),
                r.hung_directives.to_string(),
                r.retransmissions.to_string(),
                r.shocks.to_string(),
                r.drugs.to_string(),
                String::new(),
            ],
            Err(e) => {
                let mut v = vec![seed.to_string()];
                v.extend(std::iter::repeat(String::new()).take(RUN_COLUMNS.len() - 2));
                v.push(e.clone());
                v
            }
        };
        w.write_record(&row).map_err(csv_err)?;
    }
    w.flush()?;
    Ok(())
}

/// Directed edge counts (sender, receiver) over spoken messages. Broadcasts
/// count once per receiver.
pub fn edge_list(events: &[crate::events::Event], team: &[String]) -> Vec<(String, String, u64)> {
    let mut edges: BTreeMap<(String, String), u64> = BTreeMap::new();
    for e in events.iter().filter(|e| e.event_type == crate::events::EventType::Speak) {
        let receivers: Vec<&String> = if e.target == crate::events::ALL {
            team.iter().filter(|t| **t != e.actor).collect()
        } else {
            vec![&e.target]
        };
        for r in receivers {
            *edges.entry((e.actor.clone(), r.clone())).or_default() += 1;
        }
    }
    edges.into_iter().map(|((s, r), n)| (s, r, n)).collect()
}

pub fn write_graph_csv<W: Write>(edges: &[(String, String, u64)], out: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record(["sender", "receiver", "count"]).map_err(csv_err)?;
    for (s, r, n) in edges {
        w.write_record([s.as_str(), r.as_str(), &n.to_string()]).map_err(csv_err)?;
    }
    w.flush()?;
    Ok(())
}
