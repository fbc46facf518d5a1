//! Suspicious-community detectors (GC_V1, GC_V2, GC_V3), the reputation-jump
//! detector, and the above-average jump/drop baselines.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::io::{BufRead, Write};

use chrono::{Months, TimeDelta};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::corpus::{PostId, SnapshotSet, UserId};
use crate::graph::InteractionGraph;
use crate::louvain::Partition;
use crate::textsim::{SimilarityMode, SimilaritySource};

#[derive(Debug, Error)]
pub enum DetectorError {
    #[error("invalid detector configuration: {0}")]
    Config(String),
    #[error("partition does not cover graph node {0}")]
    PartitionMismatch(UserId),
    #[error("edge key `{0}` is not of the form question_id/answer_id")]
    EdgeKey(String),
    #[error("post {0} is unknown to the similarity source")]
    UnknownPost(PostId),
    #[error("unknown dump label `{0}`")]
    UnknownDump(String),
    #[error("dump `{newer}` must be dated after dump `{older}`")]
    DumpOrder { newer: String, older: String },
    #[error("no active users in the window ending at dump `{0}`")]
    NoActiveUsers(String),
    #[error("mean reputation growth of active users is {0}, which must be positive for the jump score")]
    NonPositiveMean(f64),
    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),
    #[error("report line {line}: {message}")]
    Parse { line: usize, message: String },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum DetectorKind {
    #[serde(rename = "GC_V1")]
    GcV1,
    #[serde(rename = "GC_V2")]
    GcV2,
    #[serde(rename = "GC_V3")]
    GcV3,
    #[serde(rename = "JUMP")]
    Jump,
    #[serde(rename = "B_U")]
    BaselineUp,
    #[serde(rename = "B_D")]
    BaselineDown,
}

impl DetectorKind {
    pub fn name(self) -> &'static str {
        match self {
            DetectorKind::GcV1 => "GC_V1",
            DetectorKind::GcV2 => "GC_V2",
            DetectorKind::GcV3 => "GC_V3",
            DetectorKind::Jump => "JUMP",
            DetectorKind::BaselineUp => "B_U",
            DetectorKind::BaselineDown => "B_D",
        }
    }

    pub fn report_kind(self) -> ReportKind {
        match self {
            DetectorKind::GcV1 | DetectorKind::GcV2 | DetectorKind::GcV3 => ReportKind::Community,
            _ => ReportKind::User,
        }
    }
}

impl fmt::Display for DetectorKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl std::str::FromStr for DetectorKind {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.to_ascii_uppercase().replace('-', "_").as_str() {
            "GC_V1" | "V1" => Ok(DetectorKind::GcV1),
            "GC_V2" | "V2" => Ok(DetectorKind::GcV2),
            "GC_V3" | "V3" => Ok(DetectorKind::GcV3),
            "JUMP" => Ok(DetectorKind::Jump),
            "B_U" => Ok(DetectorKind::BaselineUp),
            "B_D" => Ok(DetectorKind::BaselineDown),
            _ => Err(format!("unknown detector `{s}`")),
        }
    }
}

// ---------------------------------------------------------------------------
// Community detectors

/// Thresholds for the community detectors. Which fields matter depends on the
/// detector; the rest may be left unset.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CommunityDetectorConfig {
    /// Minimum internal edge count (inclusive).
    pub tau_l: Option<u64>,
    /// Maximum answer latency in hours (inclusive).
    pub tau_t_hours: Option<f64>,
    pub tau_qb: Option<f64>,
    pub tau_qc: Option<f64>,
    pub tau_ab: Option<f64>,
    pub tau_ac: Option<f64>,
    pub similarity_mode: SimilarityMode,
    pub require_answer_similarity: bool,
    pub preset: Option<String>,
}

impl CommunityDetectorConfig {
    pub fn tau_t(&self) -> Option<TimeDelta> {
        self.tau_t_hours.map(|h| TimeDelta::milliseconds((h * 3_600_000.0).round() as i64))
    }

    /// Question and answer thresholds for the configured similarity mode.
    pub fn similarity_thresholds(&self) -> (Option<f64>, Option<f64>) {
        match self.similarity_mode {
            SimilarityMode::Body => (self.tau_qb, self.tau_ab),
            SimilarityMode::Code => (self.tau_qc, self.tau_ac),
        }
    }

    pub fn validate(&self, detector: DetectorKind) -> Result<(), DetectorError> {
        let bad = |m: String| Err(DetectorError::Config(m));
        if let Some(l) = self.tau_l {
            if l == 0 {
                return bad("tau_l must be a positive integer".into());
            }
        }
        if let Some(h) = self.tau_t_hours {
            if !(h.is_finite() && h > 0.0) {
                return bad(format!("tau_t must be a positive duration, got {h} hours"));
            }
        }
        for (name, v) in [("tau_qb", self.tau_qb), ("tau_qc", self.tau_qc), ("tau_ab", self.tau_ab), ("tau_ac", self.tau_ac)]
        {
            if let Some(v) = v {
                if !(0.0..=1.0).contains(&v) {
                    return bad(format!("{name} must lie in [0, 1], got {v}"));
                }
            }
        }
        match detector {
            DetectorKind::GcV1 => {
                if self.tau_l.is_none() || self.tau_t_hours.is_none() {
                    return bad("GC_V1 needs tau_l and tau_t".into());
                }
            }
            DetectorKind::GcV2 => {
                if self.tau_l.is_none() {
                    return bad("GC_V2 needs tau_l".into());
                }
            }
            DetectorKind::GcV3 => {
                let (q, a) = self.similarity_thresholds();
                let (qn, an) = match self.similarity_mode {
                    SimilarityMode::Body => ("tau_qb", "tau_ab"),
                    SimilarityMode::Code => ("tau_qc", "tau_ac"),
                };
                if q.is_none() {
                    return bad(format!("GC_V3 in {:?} mode needs {qn}", self.similarity_mode));
                }
                if self.require_answer_similarity && a.is_none() {
                    return bad(format!("GC_V3 with answer similarity needs {an}"));
                }
            }
            other => return bad(format!("{other} is not a community detector")),
        }
        Ok(())
    }

    /// Keeps only the fields `detector` reads and fills in the preset name
    /// when the remaining values coincide with one.
    pub fn normalized(&self, detector: DetectorKind) -> CommunityDetectorConfig {
        let mut c = CommunityDetectorConfig::default();
        match detector {
            DetectorKind::GcV1 => {
                c.tau_l = self.tau_l;
                c.tau_t_hours = self.tau_t_hours;
            }
            DetectorKind::GcV2 => c.tau_l = self.tau_l,
            _ => {
                c.similarity_mode = self.similarity_mode;
                c.require_answer_similarity = self.require_answer_similarity;
                match self.similarity_mode {
                    SimilarityMode::Body => c.tau_qb = self.tau_qb,
                    SimilarityMode::Code => c.tau_qc = self.tau_qc,
                }
                if self.require_answer_similarity {
                    match self.similarity_mode {
                        SimilarityMode::Body => c.tau_ab = self.tau_ab,
                        SimilarityMode::Code => c.tau_ac = self.tau_ac,
                    }
                }
            }
        }
        c.preset = community_presets()
            .into_iter()
            .find(|p| p.detector == detector && CommunityDetectorConfig { preset: None, ..p.config.clone() } == c)
            .map(|p| p.name.to_string());
        c
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct CommunityPreset {
    pub name: &'static str,
    pub detector: DetectorKind,
    pub config: CommunityDetectorConfig,
}

/// The twenty named community cases C1-C20.
pub fn community_presets() -> Vec<CommunityPreset> {
    let mut out = Vec::with_capacity(20);
    let names = ["C1", "C2", "C3", "C4"];
    for (name, l) in names.into_iter().zip([2, 6, 8, 10]) {
        out.push((name, DetectorKind::GcV2, CommunityDetectorConfig { tau_l: Some(l), ..Default::default() }));
    }
    let hours = [24.0, 1.0, 0.5, 0.25];
    for (names, l) in [(["C5", "C6", "C7", "C8"], 6), (["C9", "C10", "C11", "C12"], 8)] {
        for (name, h) in names.into_iter().zip(hours) {
            let config = CommunityDetectorConfig { tau_l: Some(l), tau_t_hours: Some(h), ..Default::default() };
            out.push((name, DetectorKind::GcV1, config));
        }
    }
    let similarity = [
        ("C13", SimilarityMode::Body, 0.89, false),
        ("C14", SimilarityMode::Body, 0.95, false),
        ("C15", SimilarityMode::Code, 0.80, false),
        ("C16", SimilarityMode::Code, 0.90, false),
        ("C17", SimilarityMode::Body, 0.89, true),
        ("C18", SimilarityMode::Body, 0.95, true),
        ("C19", SimilarityMode::Code, 0.80, true),
        ("C20", SimilarityMode::Code, 0.90, true),
    ];
    for (name, mode, t, answers) in similarity {
        let mut c = CommunityDetectorConfig { similarity_mode: mode, require_answer_similarity: answers, ..Default::default() };
        match mode {
            SimilarityMode::Body => {
                c.tau_qb = Some(t);
                c.tau_ab = answers.then_some(t);
            }
            SimilarityMode::Code => {
                c.tau_qc = Some(t);
                c.tau_ac = answers.then_some(t);
            }
        }
        out.push((name, DetectorKind::GcV3, c));
    }
    out.into_iter()
        .map(|(name, detector, mut config)| {
            config.preset = Some(name.to_string());
            CommunityPreset { name, detector, config }
        })
        .collect()
}

pub fn community_preset(name: &str) -> Option<CommunityPreset> {
    community_presets().into_iter().find(|p| p.name.eq_ignore_ascii_case(name))
}

/// Per-community aggregates gathered in one pass over the edges.
#[derive(Debug, Clone, PartialEq)]
pub struct CommunityStats {
    pub members: Vec<UserId>,
    pub isolated: bool,
    pub internal_edges: u64,
    pub accepted_edges: u64,
    pub max_latency: TimeDelta,
    /// Indices into `graph.edges()` of the internal edges.
    pub edge_indices: Vec<u32>,
}

pub fn community_stats(graph: &InteractionGraph, partition: &Partition) -> Result<Vec<CommunityStats>, DetectorError> {
    let communities = partition.communities();
    let dense: BTreeMap<_, usize> = communities.keys().enumerate().map(|(i, &c)| (c, i)).collect();
    let mut stats: Vec<CommunityStats> = communities
        .values()
        .map(|members| CommunityStats {
            members: members.iter().copied().collect(),
            isolated: true,
            internal_edges: 0,
            accepted_edges: 0,
            max_latency: TimeDelta::zero(),
            edge_indices: Vec::new(),
        })
        .collect();
    let mut of_node = Vec::with_capacity(graph.node_count());
    for &u in graph.nodes() {
        let c = partition.community_of(u).ok_or(DetectorError::PartitionMismatch(u))?;
        of_node.push(dense[&c]);
    }
    for (k, edge) in graph.edges().iter().enumerate() {
        let (a, b) = graph.edge_endpoints(k);
        let (ca, cb) = (of_node[a], of_node[b]);
        if ca != cb {
            stats[ca].isolated = false;
            stats[cb].isolated = false;
            continue;
        }
        let s = &mut stats[ca];
        s.internal_edges += 1;
        s.accepted_edges += u64::from(edge.attrs.e_accepted);
        s.max_latency = s.max_latency.max(edge.attrs.e_time);
        s.edge_indices.push(k as u32);
    }
    Ok(stats)
}

fn community_report(
    detector: DetectorKind,
    members: &[UserId],
    evidence: BTreeMap<String, f64>,
    config: &CommunityDetectorConfig,
) -> SuspicionReport {
    SuspicionReport {
        kind: ReportKind::Community,
        subject: Subject::Community(members.to_vec()),
        detector,
        evidence,
        config: ConfigSnapshot::Community(config.clone()),
    }
}

fn base_evidence(s: &CommunityStats) -> BTreeMap<String, f64> {
    BTreeMap::from([
        ("members".to_string(), s.members.len() as f64),
        ("isolated".to_string(), if s.isolated { 1.0 } else { 0.0 }),
        ("internal_edges".to_string(), s.internal_edges as f64),
    ])
}

fn seconds(d: TimeDelta) -> f64 {
    d.num_milliseconds() as f64 / 1000.0
}

/// Isolated communities with at least `tau_l` internal edges, every one
/// answered within `tau_t`.
pub fn detect_gc_v1(
    graph: &InteractionGraph,
    partition: &Partition,
    config: &CommunityDetectorConfig,
) -> Result<Vec<SuspicionReport>, DetectorError> {
    config.validate(DetectorKind::GcV1)?;
    let snapshot = config.normalized(DetectorKind::GcV1);
    let (tau_l, tau_t) = (config.tau_l.unwrap_or(u64::MAX), config.tau_t().unwrap_or(TimeDelta::MIN));
    let mut out = Vec::new();
    for s in community_stats(graph, partition)? {
        if s.members.len() >= 2 && s.isolated && s.internal_edges >= tau_l && s.max_latency <= tau_t {
            let mut evidence = base_evidence(&s);
            evidence.insert("max_latency_seconds".into(), seconds(s.max_latency));
            out.push(community_report(DetectorKind::GcV1, &s.members, evidence, &snapshot));
        }
    }
    sort_reports(&mut out);
    Ok(out)
}

/// Isolated communities with at least `tau_l` internal edges, all accepted.
pub fn detect_gc_v2(
    graph: &InteractionGraph,
    partition: &Partition,
    config: &CommunityDetectorConfig,
) -> Result<Vec<SuspicionReport>, DetectorError> {
    config.validate(DetectorKind::GcV2)?;
    let snapshot = config.normalized(DetectorKind::GcV2);
    let tau_l = config.tau_l.unwrap_or(u64::MAX);
    let mut out = Vec::new();
    for s in community_stats(graph, partition)? {
        if s.members.len() >= 2 && s.isolated && s.internal_edges >= tau_l && s.accepted_edges == s.internal_edges {
            let mut evidence = base_evidence(&s);
            evidence.insert("accepted_edges".into(), s.accepted_edges as f64);
            out.push(community_report(DetectorKind::GcV2, &s.members, evidence, &snapshot));
        }
    }
    sort_reports(&mut out);
    Ok(out)
}

fn split_key(key: &str) -> Result<(PostId, PostId), DetectorError> {
    let bad = || DetectorError::EdgeKey(key.to_string());
    let (q, a) = key.split_once('/').ok_or_else(bad)?;
    Ok((q.parse().map_err(|_| bad())?, a.parse().map_err(|_| bad())?))
}

/// Highest similarity over unordered pairs of distinct ids; `None` with fewer
/// than two ids.
fn max_pair_similarity(
    ids: &[PostId],
    sim: impl Fn(PostId, PostId) -> Option<f64>,
) -> Result<Option<f64>, DetectorError> {
    let mut best: Option<f64> = None;
    for (i, &a) in ids.iter().enumerate() {
        for &b in &ids[i + 1..] {
            let s = sim(a, b).ok_or(DetectorError::UnknownPost(if sim(a, a).is_none() { a } else { b }))?;
            best = Some(best.map_or(s, |x: f64| x.max(s)));
        }
    }
    Ok(best)
}

/// Isolated communities holding two distinct questions at least as similar as
/// the question threshold and, when required, two such answers too. The edge
/// count threshold plays no part here.
pub fn detect_gc_v3<S: SimilaritySource + Sync>(
    graph: &InteractionGraph,
    partition: &Partition,
    config: &CommunityDetectorConfig,
    similarity: &S,
) -> Result<Vec<SuspicionReport>, DetectorError> {
    config.validate(DetectorKind::GcV3)?;
    if similarity.mode() != config.similarity_mode {
        return Err(DetectorError::Config(format!(
            "similarity source is in {:?} mode but the detector asks for {:?}",
            similarity.mode(),
            config.similarity_mode
        )));
    }
    let snapshot = config.normalized(DetectorKind::GcV3);
    let (q_threshold, a_threshold) = config.similarity_thresholds();
    let q_threshold = q_threshold.unwrap_or(f64::INFINITY);
    let candidates: Vec<CommunityStats> = community_stats(graph, partition)?
        .into_iter()
        .filter(|s| s.members.len() >= 2 && s.isolated)
        .collect();
    let verdicts: Vec<Option<SuspicionReport>> = candidates
        .par_iter()
        .map(|s| -> Result<Option<SuspicionReport>, DetectorError> {
            let mut questions = Vec::with_capacity(s.edge_indices.len());
            let mut answers = Vec::with_capacity(s.edge_indices.len());
            for &k in &s.edge_indices {
                let (q, a) = split_key(&graph.edges()[k as usize].attrs.e_key)?;
                questions.push(q);
                answers.push(a);
            }
            questions.sort_unstable();
            questions.dedup();
            answers.sort_unstable();
            answers.dedup();
            let Some(q_best) = max_pair_similarity(&questions, |a, b| similarity.question_similarity(a, b))? else {
                return Ok(None);
            };
            let mut evidence = base_evidence(s);
            evidence.insert("distinct_questions".into(), questions.len() as f64);
            evidence.insert("max_question_similarity".into(), q_best);
            let mut flagged = q_best >= q_threshold;
            if config.require_answer_similarity {
                let a_best = max_pair_similarity(&answers, |a, b| similarity.answer_similarity(a, b))?;
                evidence.insert("distinct_answers".into(), answers.len() as f64);
                match a_best {
                    Some(v) => {
                        evidence.insert("max_answer_similarity".into(), v);
                        flagged &= v >= a_threshold.unwrap_or(f64::INFINITY);
                    }
                    None => flagged = false,
                }
            }
            Ok(flagged.then(|| community_report(DetectorKind::GcV3, &s.members, evidence, &snapshot)))
        })
        .collect::<Result<_, _>>()?;
    let mut out: Vec<SuspicionReport> = verdicts.into_iter().flatten().collect();
    sort_reports(&mut out);
    Ok(out)
}

/// Runs the community detector named by `detector`; GC_V3 needs `similarity`.
pub fn detect_communities<S: SimilaritySource + Sync>(
    detector: DetectorKind,
    graph: &InteractionGraph,
    partition: &Partition,
    config: &CommunityDetectorConfig,
    similarity: Option<&S>,
) -> Result<Vec<SuspicionReport>, DetectorError> {
    match detector {
        DetectorKind::GcV1 => detect_gc_v1(graph, partition, config),
        DetectorKind::GcV2 => detect_gc_v2(graph, partition, config),
        DetectorKind::GcV3 => {
            let sim = similarity.ok_or_else(|| DetectorError::Config("GC_V3 needs a similarity source".into()))?;
            detect_gc_v3(graph, partition, config, sim)
        }
        other => Err(DetectorError::Config(format!("{other} is not a community detector"))),
    }
}

// ---------------------------------------------------------------------------
// User detectors

/// The pair of dumps compared and the activity window.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DumpWindow {
    /// Newer dump.
    pub dump_m: String,
    /// Older dump.
    pub dump_n: String,
    /// Users whose last access at `dump_m` falls within this many months
    /// before it count as active.
    pub tau_m_months: u32,
}

pub const DEFAULT_TAU_M_MONTHS: u32 = 3;

impl DumpWindow {
    pub fn new(dump_m: impl Into<String>, dump_n: impl Into<String>) -> Self {
        DumpWindow { dump_m: dump_m.into(), dump_n: dump_n.into(), tau_m_months: DEFAULT_TAU_M_MONTHS }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct UserDetectorConfig {
    /// Flag when the normalized jump exceeds this (strictly).
    pub tau_r: f64,
    pub dump_m: String,
    pub dump_n: String,
    pub tau_m_months: u32,
    pub preset: Option<String>,
}

impl UserDetectorConfig {
    pub fn new(tau_r: f64, window: DumpWindow) -> Self {
        let mut c = UserDetectorConfig {
            tau_r,
            dump_m: window.dump_m,
            dump_n: window.dump_n,
            tau_m_months: window.tau_m_months,
            preset: None,
        };
        c.preset = jump_presets().into_iter().find(|&(_, t)| t == tau_r).map(|(n, _)| n.to_string());
        c
    }

    pub fn window(&self) -> DumpWindow {
        DumpWindow { dump_m: self.dump_m.clone(), dump_n: self.dump_n.clone(), tau_m_months: self.tau_m_months }
    }

    pub fn validate(&self) -> Result<(), DetectorError> {
        if !(self.tau_r.is_finite() && self.tau_r > 0.0) {
            return Err(DetectorError::Config(format!("tau_r must be positive, got {}", self.tau_r)));
        }
        if self.tau_m_months == 0 {
            return Err(DetectorError::Config("tau_m must be at least one month".into()));
        }
        Ok(())
    }
}

/// The three named jump cases and their thresholds.
pub fn jump_presets() -> [(&'static str, f64); 3] {
    [("C1", 28.0), ("C2", 65.0), ("C3", 130.0)]
}

pub fn jump_preset(name: &str, window: DumpWindow) -> Option<UserDetectorConfig> {
    jump_presets().into_iter().find(|(n, _)| n.eq_ignore_ascii_case(name)).map(|(_, t)| UserDetectorConfig::new(t, window))
}

/// Score changes between two dumps for users present in both.
#[derive(Debug, Clone, PartialEq)]
pub struct DeltaTable {
    /// `(user, delta, active)`, ascending by user.
    pub entries: Vec<(UserId, i64, bool)>,
    /// Users with a score at the newer dump but none at the older one.
    pub only_in_newer: usize,
}

impl DeltaTable {
    pub fn active(&self) -> impl Iterator<Item = (UserId, i64)> + '_ {
        self.entries.iter().filter(|e| e.2).map(|&(u, d, _)| (u, d))
    }
}

pub fn score_deltas(snapshots: &SnapshotSet, window: &DumpWindow) -> Result<DeltaTable, DetectorError> {
    let m = snapshots.dump(&window.dump_m).ok_or_else(|| DetectorError::UnknownDump(window.dump_m.clone()))?;
    let n = snapshots.dump(&window.dump_n).ok_or_else(|| DetectorError::UnknownDump(window.dump_n.clone()))?;
    if m.date <= n.date {
        return Err(DetectorError::DumpOrder { newer: m.label.clone(), older: n.label.clone() });
    }
    if window.tau_m_months == 0 {
        return Err(DetectorError::Config("tau_m must be at least one month".into()));
    }
    let since = m
        .date
        .checked_sub_months(Months::new(window.tau_m_months))
        .ok_or_else(|| DetectorError::Config("activity window reaches before the representable range".into()))?;
    let mut entries = Vec::new();
    let mut only_in_newer = 0;
    for (user, now) in snapshots.scores_at(&m.label) {
        let Some(before) = snapshots.score(user, &n.label) else {
            only_in_newer += 1;
            continue;
        };
        let active = snapshots.last_access(user, &m.label).is_some_and(|t| t >= since && t <= m.date);
        entries.push((user, now - before, active));
    }
    Ok(DeltaTable { entries, only_in_newer })
}

/// Output of a user-level detector.
#[derive(Debug, Clone, PartialEq)]
pub struct UserScan {
    pub reports: Vec<SuspicionReport>,
    pub compared_users: usize,
    pub active_users: usize,
    pub only_in_newer: usize,
    /// Set when the detector had nothing to compare against.
    pub note: Option<String>,
}

fn user_report(detector: DetectorKind, user: UserId, evidence: BTreeMap<String, f64>, config: ConfigSnapshot) -> SuspicionReport {
    SuspicionReport { kind: ReportKind::User, subject: Subject::User(user), detector, evidence, config }
}

/// Flags active users whose growth `δ` deviates from the active mean `ρ` by
/// more than `tau_r` times `ρ`.
pub fn detect_suspicious_users(snapshots: &SnapshotSet, config: &UserDetectorConfig) -> Result<UserScan, DetectorError> {
    config.validate()?;
    let table = score_deltas(snapshots, &config.window())?;
    let active: Vec<(UserId, i64)> = table.active().collect();
    if active.is_empty() {
        return Err(DetectorError::NoActiveUsers(config.dump_m.clone()));
    }
    let rho = active.iter().map(|&(_, d)| d as f64).sum::<f64>() / active.len() as f64;
    if rho <= 0.0 {
        return Err(DetectorError::NonPositiveMean(rho));
    }
    let snapshot = ConfigSnapshot::User(UserDetectorConfig::new(config.tau_r, config.window()));
    let mut reports = Vec::new();
    for &(user, delta) in &active {
        let phi = (delta as f64 - rho) / rho;
        if phi > config.tau_r {
            let evidence = BTreeMap::from([
                ("delta".to_string(), delta as f64),
                ("rho".to_string(), rho),
                ("phi".to_string(), phi),
            ]);
            reports.push(user_report(DetectorKind::Jump, user, evidence, snapshot.clone()));
        }
    }
    Ok(UserScan {
        reports,
        compared_users: table.entries.len(),
        active_users: active.len(),
        only_in_newer: table.only_in_newer,
        note: None,
    })
}

fn baseline(snapshots: &SnapshotSet, window: &DumpWindow, up: bool) -> Result<UserScan, DetectorError> {
    let table = score_deltas(snapshots, window)?;
    let (detector, key) = if up {
        (DetectorKind::BaselineUp, "mean_positive_delta")
    } else {
        (DetectorKind::BaselineDown, "mean_drop")
    };
    // Jump size in the direction of interest, positive when present.
    let moved: Vec<(UserId, i64, i64)> = table
        .active()
        .filter_map(|(u, d)| {
            let size = if up { d } else { -d };
            (size > 0).then_some((u, d, size))
        })
        .collect();
    let active_users = table.active().count();
    let mut scan = UserScan {
        reports: Vec::new(),
        compared_users: table.entries.len(),
        active_users,
        only_in_newer: table.only_in_newer,
        note: None,
    };
    if moved.is_empty() {
        scan.note = Some(format!("no active user {} between the dumps", if up { "gained" } else { "dropped" }));
        return Ok(scan);
    }
    let mean = moved.iter().map(|&(_, _, s)| s as f64).sum::<f64>() / moved.len() as f64;
    let snapshot = ConfigSnapshot::Window(window.clone());
    for (user, delta, size) in moved {
        if size as f64 > mean {
            let evidence = BTreeMap::from([("delta".to_string(), delta as f64), (key.to_string(), mean)]);
            scan.reports.push(user_report(detector, user, evidence, snapshot.clone()));
        }
    }
    Ok(scan)
}

/// Active users whose gain exceeds the mean gain of active users who gained.
pub fn baseline_up(snapshots: &SnapshotSet, window: &DumpWindow) -> Result<UserScan, DetectorError> {
    baseline(snapshots, window, true)
}

/// Active users whose drop exceeds the mean drop of active users who dropped.
pub fn baseline_down(snapshots: &SnapshotSet, window: &DumpWindow) -> Result<UserScan, DetectorError> {
    baseline(snapshots, window, false)
}

// ---------------------------------------------------------------------------
// Reports

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ReportKind {
    Community,
    User,
}

#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(untagged)]
pub enum Subject {
    User(UserId),
    /// Member ids, ascending.
    Community(Vec<UserId>),
}

impl Subject {
    pub fn users(&self) -> Vec<UserId> {
        match self {
            Subject::User(u) => vec![*u],
            Subject::Community(m) => m.clone(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum ConfigSnapshot {
    Community(CommunityDetectorConfig),
    User(UserDetectorConfig),
    Window(DumpWindow),
}

/// One flagged community or user with the values that triggered the flag.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SuspicionReport {
    pub kind: ReportKind,
    pub subject: Subject,
    pub detector: DetectorKind,
    pub evidence: BTreeMap<String, f64>,
    pub config: ConfigSnapshot,
}

impl SuspicionReport {
    fn ev(&self, key: &str) -> Result<f64, DetectorError> {
        self.evidence.get(key).copied().ok_or_else(|| DetectorError::Config(format!("evidence lacks `{key}`")))
    }

    /// Re-evaluates the flagging decision from the evidence and config alone.
    pub fn recheck(&self) -> Result<bool, DetectorError> {
        if self.kind != self.detector.report_kind() {
            return Ok(false);
        }
        match (&self.config, self.detector) {
            (ConfigSnapshot::Community(c), d @ (DetectorKind::GcV1 | DetectorKind::GcV2 | DetectorKind::GcV3)) => {
                c.validate(d)?;
                let group = self.ev("isolated")? == 1.0 && self.ev("members")? >= 2.0;
                Ok(group
                    && match d {
                        DetectorKind::GcV1 => {
                            let limit = c.tau_t().map(seconds).unwrap_or(f64::NEG_INFINITY);
                            self.ev("internal_edges")? >= c.tau_l.unwrap_or(u64::MAX) as f64
                                && self.ev("max_latency_seconds")? <= limit
                        }
                        DetectorKind::GcV2 => {
                            let edges = self.ev("internal_edges")?;
                            edges >= c.tau_l.unwrap_or(u64::MAX) as f64 && self.ev("accepted_edges")? == edges
                        }
                        _ => {
                            let (q, a) = c.similarity_thresholds();
                            let mut ok = self.ev("max_question_similarity")? >= q.unwrap_or(f64::INFINITY);
                            if c.require_answer_similarity {
                                ok &= self.ev("max_answer_similarity")? >= a.unwrap_or(f64::INFINITY);
                            }
                            ok
                        }
                    })
            }
            (ConfigSnapshot::User(c), DetectorKind::Jump) => {
                c.validate()?;
                let (delta, rho, phi) = (self.ev("delta")?, self.ev("rho")?, self.ev("phi")?);
                let consistent = rho > 0.0 && ((delta - rho) / rho - phi).abs() <= 1e-9 * phi.abs().max(1.0);
                Ok(consistent && phi > c.tau_r)
            }
            (ConfigSnapshot::Window(_), DetectorKind::BaselineUp) => {
                let delta = self.ev("delta")?;
                Ok(delta > 0.0 && delta > self.ev("mean_positive_delta")?)
            }
            (ConfigSnapshot::Window(_), DetectorKind::BaselineDown) => {
                let delta = self.ev("delta")?;
                Ok(delta < 0.0 && -delta > self.ev("mean_drop")?)
            }
            _ => Ok(false),
        }
    }
}

pub fn sort_reports(reports: &mut [SuspicionReport]) {
    reports.sort_by(|a, b| a.subject.cmp(&b.subject).then(a.detector.cmp(&b.detector)));
}

pub fn write_reports_jsonl<W: Write>(mut out: W, reports: &[SuspicionReport]) -> Result<(), DetectorError> {
    for r in reports {
        serde_json::to_writer(&mut out, r).map_err(std::io::Error::from)?;
        out.write_all(b"\n")?;
    }
    Ok(())
}

pub fn read_reports_jsonl<R: BufRead>(source: R) -> Result<Vec<SuspicionReport>, DetectorError> {
    let mut out = Vec::new();
    for (idx, line) in source.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        out.push(
            serde_json::from_str(&line).map_err(|e| DetectorError::Parse { line: idx + 1, message: e.to_string() })?,
        );
    }
    Ok(out)
}

/// Union of members over all reports.
pub fn flagged_users(reports: &[SuspicionReport]) -> BTreeSet<UserId> {
    reports.iter().flat_map(|r| r.subject.users()).collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::Dump;
    use crate::graph::{EdgeAttributes, GraphEdge};
    use crate::louvain::Assignment;
    use chrono::{TimeZone, Utc};

    fn edge(asker: UserId, answerer: UserId, key: u64, accepted: bool, hours: i64) -> GraphEdge {
        GraphEdge {
            asker,
            answerer,
            attrs: EdgeAttributes {
                e_key: format!("{key}/{}", key + 10_000),
                e_accepted: accepted,
                e_time: TimeDelta::hours(hours),
            },
        }
    }

    fn partition(graph: &InteractionGraph, groups: &[&[UserId]]) -> Partition {
        let assignment: Assignment =
            groups.iter().enumerate().flat_map(|(c, g)| g.iter().map(move |&u| (u, c as u32))).collect();
        Partition::from_assignment(graph, assignment).unwrap()
    }

    #[test]
    fn presets_cover_the_twenty_cases() {
        let presets = community_presets();
        assert_eq!(presets.len(), 20);
        let c9 = community_preset("c9").unwrap();
        assert_eq!(c9.detector, DetectorKind::GcV1);
        assert_eq!((c9.config.tau_l, c9.config.tau_t_hours), (Some(8), Some(24.0)));
        let c18 = community_preset("C18").unwrap();
        assert_eq!((c18.config.tau_qb, c18.config.tau_ab), (Some(0.95), Some(0.95)));
        for p in presets {
            p.config.validate(p.detector).unwrap();
            assert_eq!(p.config.normalized(p.detector), p.config);
        }
    }

    #[test]
    fn explicit_values_resolve_to_preset_name() {
        let c = CommunityDetectorConfig { tau_l: Some(8), tau_t_hours: Some(24.0), tau_qb: Some(0.3), ..Default::default() };
        let n = c.normalized(DetectorKind::GcV1);
        assert_eq!(n, community_preset("C9").unwrap().config);
        let odd = CommunityDetectorConfig { tau_l: Some(7), tau_t_hours: Some(24.0), ..Default::default() };
        assert_eq!(odd.normalized(DetectorKind::GcV1).preset, None);
    }

    #[test]
    fn v1_needs_latency_threshold() {
        let c = CommunityDetectorConfig { tau_l: Some(8), ..Default::default() };
        assert!(matches!(c.validate(DetectorKind::GcV1), Err(DetectorError::Config(_))));
        assert!(c.validate(DetectorKind::GcV2).is_ok());
    }

    #[test]
    fn latency_boundary_is_inclusive() {
        let edges = vec![edge(1, 2, 1, true, 24), edge(2, 1, 2, true, 1)];
        let g = InteractionGraph::from_edges([], edges).unwrap();
        let p = partition(&g, &[&[1, 2]]);
        let cfg = CommunityDetectorConfig { tau_l: Some(2), tau_t_hours: Some(24.0), ..Default::default() };
        let r = detect_gc_v1(&g, &p, &cfg).unwrap();
        assert_eq!(r.len(), 1);
        assert!(r[0].recheck().unwrap());
        let tight = CommunityDetectorConfig { tau_t_hours: Some(23.5), ..cfg };
        assert!(detect_gc_v1(&g, &p, &tight).unwrap().is_empty());
    }

    #[test]
    fn crossing_edge_breaks_isolation() {
        let edges = vec![edge(1, 2, 1, true, 1), edge(2, 1, 2, true, 1), edge(2, 3, 3, true, 1)];
        let g = InteractionGraph::from_edges([], edges).unwrap();
        let p = partition(&g, &[&[1, 2], &[3]]);
        let cfg = CommunityDetectorConfig { tau_l: Some(2), ..Default::default() };
        assert!(detect_gc_v2(&g, &p, &cfg).unwrap().is_empty());
        let stats = community_stats(&g, &p).unwrap();
        assert!(!stats[0].isolated && !stats[1].isolated);
        assert_eq!(stats[0].internal_edges, 2);
    }

    fn snapshots(rows: &[(UserId, i64, i64, bool)]) -> SnapshotSet {
        let n = Utc.with_ymd_and_hms(2019, 3, 1, 0, 0, 0).unwrap();
        let m = Utc.with_ymd_and_hms(2019, 6, 1, 0, 0, 0).unwrap();
        let mut s = SnapshotSet::new(vec![Dump { label: "n".into(), date: n }, Dump { label: "m".into(), date: m }])
            .unwrap();
        for &(u, before, after, active) in rows {
            let seen = if active { m - TimeDelta::days(2) } else { m - TimeDelta::days(400) };
            s.insert(u, "n", before, Some(n)).unwrap();
            s.insert(u, "m", after, Some(seen)).unwrap();
        }
        s
    }

    #[test]
    fn inactive_users_do_not_move_the_mean() {
        let s = snapshots(&[(1, 100, 110, true), (2, 100, 120, true), (3, 100, 130, true), (4, 100, 1100, false)]);
        let cfg = UserDetectorConfig::new(0.4, DumpWindow::new("m", "n"));
        let scan = detect_suspicious_users(&s, &cfg).unwrap();
        assert_eq!(scan.active_users, 3);
        assert_eq!(scan.reports.len(), 1);
        assert_eq!(scan.reports[0].subject, Subject::User(3));
        assert_eq!(scan.reports[0].evidence["rho"], 20.0);
        assert!(scan.reports[0].recheck().unwrap());
    }

    #[test]
    fn jump_aborts_on_non_positive_mean() {
        let s = snapshots(&[(1, 100, 90, true), (2, 100, 100, true)]);
        let cfg = jump_preset("C1", DumpWindow::new("m", "n")).unwrap();
        assert!(matches!(detect_suspicious_users(&s, &cfg), Err(DetectorError::NonPositiveMean(_))));
        let dead = snapshots(&[(1, 100, 200, false)]);
        assert!(matches!(detect_suspicious_users(&dead, &cfg), Err(DetectorError::NoActiveUsers(_))));
        let reversed = jump_preset("C1", DumpWindow::new("n", "m")).unwrap();
        assert!(matches!(detect_suspicious_users(&s, &reversed), Err(DetectorError::DumpOrder { .. })));
    }

    #[test]
    fn baseline_examples() {
        let w = DumpWindow::new("m", "n");
        let up = baseline_up(&snapshots(&[(1, 10, 20, true), (2, 10, 30, true), (3, 10, 70, true)]), &w).unwrap();
        assert_eq!(up.reports.iter().map(|r| r.subject.clone()).collect::<Vec<_>>(), vec![Subject::User(3)]);
        let single = baseline_up(&snapshots(&[(1, 10, 20, true), (2, 10, 5, true)]), &w).unwrap();
        assert!(single.reports.is_empty());
        let down = baseline_down(&snapshots(&[(1, 60, 55, true), (2, 60, 10, true)]), &w).unwrap();
        assert_eq!(down.reports.len(), 1);
        assert_eq!(down.reports[0].evidence["mean_drop"], 27.5);
        assert!(down.reports[0].recheck().unwrap());
        let none = baseline_down(&snapshots(&[(1, 10, 20, true)]), &w).unwrap();
        assert!(none.reports.is_empty() && none.note.is_some());
        let equal = baseline_down(&snapshots(&[(1, 20, 10, true), (2, 20, 10, true)]), &w).unwrap();
        assert!(equal.reports.is_empty() && equal.note.is_none());
    }

    #[test]
    fn report_json_round_trip() {
        let s = snapshots(&[(1, 10, 20, true), (2, 10, 30, true), (3, 10, 2000, true)]);
        let scan = detect_suspicious_users(&s, &UserDetectorConfig::new(1.0, DumpWindow::new("m", "n"))).unwrap();
        let edges = vec![edge(1, 2, 1, true, 1), edge(2, 1, 2, true, 1)];
        let g = InteractionGraph::from_edges([], edges).unwrap();
        let p = partition(&g, &[&[1, 2]]);
        let mut reports = detect_gc_v2(&g, &p, &community_preset("C1").unwrap().config).unwrap();
        reports.extend(scan.reports);
        let mut buf = Vec::new();
        write_reports_jsonl(&mut buf, &reports).unwrap();
        let back = read_reports_jsonl(buf.as_slice()).unwrap();
        assert_eq!(back, reports);
        assert!(back.iter().all(|r| r.recheck().unwrap()));
        assert_eq!(flagged_users(&back), BTreeSet::from([1, 2, 3]));
    }
}
