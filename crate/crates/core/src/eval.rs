//! Scoring detector output against ground truth.

use std::collections::{BTreeMap, BTreeSet};
use std::io::Write;

use chrono::{DateTime, TimeDelta, Utc};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use statrs::distribution::{ContinuousCDF, Normal};
use thiserror::Error;

use crate::corpus::{InteractionRecord, UserId};
use crate::detectors::{DetectorKind, Subject, SuspicionReport};
use crate::synth::{GroundTruth, RemovalEvent};

#[derive(Debug, Error)]
pub enum EvalError {
    #[error("population is empty")]
    EmptyPopulation,
    #[error("{set} contains user {user}, who is not in the population")]
    NotInPopulation { set: &'static str, user: UserId },
    #[error("sample of {requested} requested from a population of {population}")]
    SampleTooLarge { requested: usize, population: usize },
    #[error("no communities to report on")]
    NoCommunities,
    #[error("invalid sampling parameters: {0}")]
    Sampling(String),
    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),
    #[error("csv: {0}")]
    Csv(#[from] csv::Error),
    #[error("json: {0}")]
    Json(#[from] serde_json::Error),
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConfusionMatrix {
    pub tp: u64,
    pub fp: u64,
    #[serde(rename = "fn")]
    pub fn_: u64,
    pub tn: u64,
}

impl ConfusionMatrix {
    pub fn total(&self) -> u64 {
        self.tp + self.fp + self.fn_ + self.tn
    }
}

/// Counts over `population`; both sets must lie inside it.
pub fn confusion(
    flagged: &BTreeSet<UserId>,
    truth: &BTreeSet<UserId>,
    population: &BTreeSet<UserId>,
) -> Result<ConfusionMatrix, EvalError> {
    if population.is_empty() {
        return Err(EvalError::EmptyPopulation);
    }
    for (set, ids) in [("flagged set", flagged), ("truth set", truth)] {
        if let Some(&user) = ids.iter().find(|u| !population.contains(u)) {
            return Err(EvalError::NotInPopulation { set, user });
        }
    }
    let tp = flagged.intersection(truth).count() as u64;
    let fp = flagged.len() as u64 - tp;
    let fn_ = truth.len() as u64 - tp;
    let tn = population.len() as u64 - tp - fp - fn_;
    Ok(ConfusionMatrix { tp, fp, fn_, tn })
}

/// A metric value, or the reason it is undefined.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Metric {
    pub value: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub reason: Option<String>,
}

impl Metric {
    fn of(value: f64) -> Self {
        Metric { value: Some(value), reason: None }
    }

    fn null(reason: &str) -> Self {
        Metric { value: None, reason: Some(reason.to_string()) }
    }

    fn ratio(num: u64, den: u64, reason: &str) -> Self {
        if den == 0 {
            Metric::null(reason)
        } else {
            Metric::of(num as f64 / den as f64)
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Metrics {
    pub precision: Metric,
    pub recall: Metric,
    pub f1: Metric,
    pub accuracy: Metric,
}

fn f1_of(precision: &Metric, recall: &Metric) -> Metric {
    match (precision.value, recall.value) {
        (Some(p), Some(r)) if p + r > 0.0 => Metric::of(2.0 * p * r / (p + r)),
        (Some(_), Some(_)) => Metric::null("precision and recall are both zero"),
        (None, _) => Metric::null("precision is undefined"),
        (_, None) => Metric::null("recall is undefined"),
    }
}

pub fn metrics(c: &ConfusionMatrix) -> Metrics {
    let precision = Metric::ratio(c.tp, c.tp + c.fp, "nothing was flagged");
    let recall = Metric::ratio(c.tp, c.tp + c.fn_, "ground truth has no positives");
    let f1 = f1_of(&precision, &recall);
    let accuracy = Metric::ratio(c.tp + c.tn, c.total(), "population is empty");
    Metrics { precision, recall, f1, accuracy }
}

/// Finite-population sample size for estimating a proportion at the given
/// confidence level, with margin `interval` in percentage points (worst case
/// p = 0.5).
pub fn recommended_sample_size(population: usize, confidence: f64, interval: f64) -> Result<usize, EvalError> {
    if population == 0 {
        return Err(EvalError::EmptyPopulation);
    }
    if !(confidence > 0.0 && confidence < 1.0) || !(interval > 0.0 && interval < 100.0) {
        return Err(EvalError::Sampling(format!("confidence {confidence} / interval {interval}")));
    }
    let z = Normal::standard().inverse_cdf(0.5 + confidence / 2.0);
    let e = interval / 100.0;
    let n0 = z * z * 0.25 / (e * e);
    let n = n0 / (1.0 + (n0 - 1.0) / population as f64);
    Ok((n.ceil() as usize).min(population))
}

/// Seeded uniform sample without replacement.
pub fn sample_for_relative_recall(
    population: &BTreeSet<UserId>,
    sample_size: usize,
    seed: u64,
) -> Result<BTreeSet<UserId>, EvalError> {
    if sample_size > population.len() {
        return Err(EvalError::SampleTooLarge { requested: sample_size, population: population.len() });
    }
    let ids: Vec<UserId> = population.iter().copied().collect();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Ok(rand::seq::index::sample(&mut rng, ids.len(), sample_size).into_iter().map(|i| ids[i]).collect())
}

/// Recall measured only over the sampled users.
pub fn relative_recall(flagged: &BTreeSet<UserId>, truth: &BTreeSet<UserId>, sample: &BTreeSet<UserId>) -> Metric {
    let positives: BTreeSet<UserId> = truth.intersection(sample).copied().collect();
    let found = positives.intersection(flagged).count() as u64;
    Metric::ratio(found, positives.len() as u64, "sample holds no true positives")
}

/// Flagged communities scored as whole member sets against planted ones.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct CommunityMatch {
    pub exact: u64,
    pub spurious: u64,
    pub missed: u64,
}

impl CommunityMatch {
    pub fn precision(&self) -> Metric {
        Metric::ratio(self.exact, self.exact + self.spurious, "nothing was flagged")
    }

    pub fn recall(&self) -> Metric {
        Metric::ratio(self.exact, self.exact + self.missed, "no communities were planted")
    }
}

pub fn community_match(flagged: &[Vec<UserId>], planted: &[Vec<UserId>]) -> CommunityMatch {
    let norm = |c: &Vec<UserId>| c.iter().copied().collect::<BTreeSet<UserId>>();
    let flagged: BTreeSet<BTreeSet<UserId>> = flagged.iter().map(norm).collect();
    let planted: BTreeSet<BTreeSet<UserId>> = planted.iter().map(norm).collect();
    let exact = flagged.intersection(&planted).count() as u64;
    CommunityMatch { exact, spurious: flagged.len() as u64 - exact, missed: planted.len() as u64 - exact }
}

/// Percentages of flagged communities by the share of confirmed members.
/// Buckets overlap: a fully confirmed community counts in every bucket but
/// the last.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CoverageBuckets {
    pub communities_total: usize,
    pub pct_at_least_one: f64,
    pub pct_all: f64,
    pub pct_ge_75: f64,
    pub pct_ge_50: f64,
    pub pct_lt_50: f64,
}

pub fn coverage_report(communities: &[Vec<UserId>], confirmed: &BTreeSet<UserId>) -> Result<CoverageBuckets, EvalError> {
    if communities.is_empty() {
        return Err(EvalError::NoCommunities);
    }
    let mut counts = [0usize; 5];
    for c in communities {
        let members: BTreeSet<UserId> = c.iter().copied().collect();
        let (hit, size) = (members.iter().filter(|u| confirmed.contains(u)).count(), members.len());
        // Integer comparisons keep the 3/4 and 1/2 cut-offs exact.
        let flags = [hit > 0, hit == size, 4 * hit >= 3 * size, 2 * hit >= size, 2 * hit < size];
        for (n, f) in counts.iter_mut().zip(flags) {
            *n += usize::from(f);
        }
    }
    let pct = |n: usize| 100.0 * n as f64 / communities.len() as f64;
    Ok(CoverageBuckets {
        communities_total: communities.len(),
        pct_at_least_one: pct(counts[0]),
        pct_all: pct(counts[1]),
        pct_ge_75: pct(counts[2]),
        pct_ge_50: pct(counts[3]),
        pct_lt_50: pct(counts[4]),
    })
}

/// When a community formed: its first internal question and last internal answer.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct FormationTime {
    pub first_question: DateTime<Utc>,
    pub last_answer: DateTime<Utc>,
}

/// Formation window per community, from records whose asker and answerer are
/// both members. Communities without such records map to `None`.
pub fn formation_times(records: &[InteractionRecord], communities: &[Vec<UserId>]) -> Vec<Option<FormationTime>> {
    let mut owner: BTreeMap<UserId, usize> = BTreeMap::new();
    for (i, c) in communities.iter().enumerate() {
        for &u in c {
            owner.insert(u, i);
        }
    }
    let mut out: Vec<Option<FormationTime>> = vec![None; communities.len()];
    for r in records {
        let (Some(&a), Some(&b)) = (owner.get(&r.asker_id), owner.get(&r.answerer_id)) else {
            continue;
        };
        if a != b {
            continue;
        }
        let slot = &mut out[a];
        *slot = Some(match *slot {
            None => FormationTime { first_question: r.question_created_at, last_answer: r.answer_created_at },
            Some(f) => FormationTime {
                first_question: f.first_question.min(r.question_created_at),
                last_answer: f.last_answer.max(r.answer_created_at),
            },
        });
    }
    out
}

pub const PROXIMITY_DAYS: [i64; 4] = [1, 7, 14, 30];

/// Share of communities with a member's removal event in each window.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProximityReport {
    pub communities: usize,
    /// Communities left out for lack of internal interactions.
    pub excluded: usize,
    pub pct_during: f64,
    pub pct_in_1d: f64,
    pub pct_in_7d: f64,
    pub pct_in_14d: f64,
    pub pct_in_30d: f64,
    /// Raw counts behind the percentages, in the same order.
    pub counts: [usize; 5],
}

/// Windows are closed: During = [T1_Q, T1_A], In kD = [T1_Q, T1_A + k days].
/// Events before T1_Q are ignored.
pub fn proximity_report(
    communities: &[Vec<UserId>],
    events: &[RemovalEvent],
    formation: &[Option<FormationTime>],
) -> Result<ProximityReport, EvalError> {
    let mut by_user: BTreeMap<UserId, Vec<DateTime<Utc>>> = BTreeMap::new();
    for e in events {
        by_user.entry(e.user_id).or_default().push(e.timestamp);
    }
    let mut counts = [0usize; 5];
    let (mut considered, mut excluded) = (0, 0);
    for (c, f) in communities.iter().zip(formation) {
        let Some(f) = f else {
            log::warn!("community {c:?} has no internal interactions; left out of the proximity report");
            excluded += 1;
            continue;
        };
        considered += 1;
        let times: Vec<DateTime<Utc>> = c
            .iter()
            .filter_map(|u| by_user.get(u))
            .flatten()
            .copied()
            .filter(|&t| t >= f.first_question)
            .collect();
        let mut ends = vec![f.last_answer];
        ends.extend(PROXIMITY_DAYS.iter().map(|&d| f.last_answer + TimeDelta::days(d)));
        for (n, end) in counts.iter_mut().zip(ends) {
            *n += usize::from(times.iter().any(|&t| t <= end));
        }
    }
    if considered == 0 {
        return Err(EvalError::NoCommunities);
    }
    let pct = |n: usize| 100.0 * n as f64 / considered as f64;
    Ok(ProximityReport {
        communities: considered,
        excluded,
        pct_during: pct(counts[0]),
        pct_in_1d: pct(counts[1]),
        pct_in_7d: pct(counts[2]),
        pct_in_14d: pct(counts[3]),
        pct_in_30d: pct(counts[4]),
        counts,
    })
}

/// Users with at least one removal event.
pub fn confirmed_users(truth: &GroundTruth) -> BTreeSet<UserId> {
    truth.removal_events.iter().map(|e| e.user_id).collect()
}

/// Everything `evaluate` needs besides the reports themselves.
#[derive(Debug, Clone)]
pub struct EvaluationInput<'a> {
    pub detector: DetectorKind,
    pub preset: Option<String>,
    pub truth: &'a GroundTruth,
    /// Users the detector could have flagged.
    pub population: &'a BTreeSet<UserId>,
    /// Interaction records, for community formation times.
    pub records: Option<&'a [InteractionRecord]>,
    /// `(sample size, seed)` for relative recall; `None` skips it.
    pub sample: Option<(usize, u64)>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Evaluation {
    pub detector: DetectorKind,
    pub preset: Option<String>,
    pub confusion: ConfusionMatrix,
    pub metrics: Metrics,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub community_match: Option<CommunityMatch>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub coverage: Option<CoverageBuckets>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub proximity: Option<ProximityReport>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub relative_recall: Option<Metric>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub notes: Vec<String>,
}

/// Scores one detector run. Community detectors are judged against
/// `fraud_users`, user detectors against `planted_jump_users`.
pub fn evaluate(reports: &[SuspicionReport], input: &EvaluationInput<'_>) -> Result<Evaluation, EvalError> {
    let community = matches!(input.detector, DetectorKind::GcV1 | DetectorKind::GcV2 | DetectorKind::GcV3);
    let flagged: BTreeSet<UserId> = reports.iter().flat_map(|r| r.subject.users()).collect();
    let truth_users = if community { &input.truth.fraud_users } else { &input.truth.planted_jump_users };
    let mut notes = Vec::new();
    let outside = truth_users.iter().filter(|u| !input.population.contains(u)).count();
    let truth_in: BTreeSet<UserId> = truth_users.iter().copied().filter(|u| input.population.contains(u)).collect();
    if outside > 0 {
        notes.push(format!("{outside} ground-truth users are absent from the population and were ignored"));
    }
    let c = confusion(&flagged, &truth_in, input.population)?;
    let mut out = Evaluation {
        detector: input.detector,
        preset: input.preset.clone(),
        confusion: c,
        metrics: metrics(&c),
        community_match: None,
        coverage: None,
        proximity: None,
        relative_recall: None,
        notes,
    };
    if community {
        let groups: Vec<Vec<UserId>> = reports
            .iter()
            .filter_map(|r| match &r.subject {
                Subject::Community(m) => Some(m.clone()),
                Subject::User(_) => None,
            })
            .collect();
        out.community_match = Some(community_match(&groups, &input.truth.fraud_communities));
        if groups.is_empty() {
            out.notes.push("no communities flagged; coverage and proximity skipped".into());
        } else {
            out.coverage = Some(coverage_report(&groups, &confirmed_users(input.truth))?);
            if let Some(records) = input.records {
                let formation = formation_times(records, &groups);
                match proximity_report(&groups, &input.truth.removal_events, &formation) {
                    Ok(p) => out.proximity = Some(p),
                    Err(EvalError::NoCommunities) => {
                        out.notes.push("no flagged community has internal interactions; proximity skipped".into())
                    }
                    Err(e) => return Err(e),
                }
            }
        }
    }
    if let Some((size, seed)) = input.sample {
        let sample = sample_for_relative_recall(input.population, size, seed)?;
        out.relative_recall = Some(relative_recall(&flagged, &truth_in, &sample));
    }
    Ok(out)
}

pub const METRICS_HEADER: [&str; 10] = ["detector", "preset", "P", "R", "F1", "A", "tp", "fp", "fn", "tn"];

/// One row per evaluation; undefined metrics are empty cells.
pub fn write_metrics_csv<W: Write>(out: W, rows: &[Evaluation]) -> Result<(), EvalError> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record(METRICS_HEADER)?;
    let cell = |m: &Metric| m.value.map(|v| v.to_string()).unwrap_or_default();
    for e in rows {
        let m = &e.metrics;
        w.write_record([
            e.detector.name().to_string(),
            e.preset.clone().unwrap_or_default(),
            cell(&m.precision),
            cell(&m.recall),
            cell(&m.f1),
            cell(&m.accuracy),
            e.confusion.tp.to_string(),
            e.confusion.fp.to_string(),
            e.confusion.fn_.to_string(),
            e.confusion.tn.to_string(),
        ])?;
    }
    w.flush()?;
    Ok(())
}

pub fn write_report_json<W: Write>(mut out: W, rows: &[Evaluation]) -> Result<(), EvalError> {
    serde_json::to_writer_pretty(&mut out, rows)?;
    out.write_all(b"\n")?;
    Ok(())
}
