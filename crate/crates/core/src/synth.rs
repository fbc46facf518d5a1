//! Seeded synthetic forums and reputation snapshots with planted fraud.
//!
//! Honest users ask questions that are answered by other honest users picked
//! with preferential attachment, so activity concentrates on a few hubs and
//! honest users rarely end up in small isolated groups. Each ring is planted
//! as a group of users who only ever answer one another.

use std::collections::{BTreeSet, HashSet};
use std::io::{Read, Write};

use chrono::{DateTime, TimeDelta, TimeZone, Utc};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, LogNormal, Normal};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::corpus::{Dump, Post, PostId, PostKind, SnapshotError, SnapshotSet, UserId};

#[derive(Debug, Error)]
pub enum SynthError {
    #[error("invalid generator input: {0}")]
    Invalid(String),
    #[error("user id {0} is used twice")]
    IdCollision(UserId),
    #[error("duplicate planted jump user {0}")]
    DuplicatePlanted(UserId),
    #[error(transparent)]
    Snapshot(#[from] SnapshotError),
    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),
    #[error("ground truth JSON: {0}")]
    Json(#[from] serde_json::Error),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RingType {
    /// One member asks and the friends answer; pairs form a star.
    ThreadRing,
    /// Members answer one another down a chain; pairs form a path.
    SerialRing,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RingSpec {
    pub member_count: usize,
    /// Internal answers to plant.
    pub interaction_count: usize,
    pub all_accepted: bool,
    /// Upper bound on every planted answer latency.
    pub max_latency_hours: f64,
    /// Give the ring's questions (and answers) near-identical bodies.
    pub clone_questions: bool,
    pub ring_type: RingType,
    /// Explicit member ids; generated above the honest range when absent.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub member_ids: Option<Vec<UserId>>,
}

impl RingSpec {
    /// Pairs of member positions that interact.
    fn pairs(&self) -> Vec<(usize, usize)> {
        match self.ring_type {
            RingType::ThreadRing => (1..self.member_count).map(|i| (0, i)).collect(),
            RingType::SerialRing => (1..self.member_count).map(|i| (i - 1, i)).collect(),
        }
    }

    /// Every interacting pair needs an answer in each direction to be mutual,
    /// hence at least two interactions per pair.
    pub fn min_interactions(&self) -> usize {
        2 * self.member_count.saturating_sub(1)
    }

    pub fn max_latency(&self) -> TimeDelta {
        TimeDelta::seconds((self.max_latency_hours * 3600.0).floor() as i64)
    }

    pub fn validate(&self) -> Result<(), SynthError> {
        let bad = |m: String| Err(SynthError::Invalid(m));
        if !(2..=10).contains(&self.member_count) {
            return bad(format!("ring member_count must be 2..=10, got {}", self.member_count));
        }
        if self.interaction_count < self.min_interactions() {
            return bad(format!(
                "a ring of {} needs at least {} interactions to make every pair mutual, got {}",
                self.member_count,
                self.min_interactions(),
                self.interaction_count
            ));
        }
        if !(self.max_latency_hours.is_finite() && self.max_latency().num_seconds() >= 1) {
            return bad(format!("max latency must be at least one second, got {} hours", self.max_latency_hours));
        }
        if let Some(ids) = &self.member_ids {
            if ids.len() != self.member_count {
                return bad(format!("member_ids lists {} ids for {} members", ids.len(), self.member_count));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RemovalEvent {
    pub user_id: UserId,
    pub timestamp: DateTime<Utc>,
    pub score_delta: i64,
}

/// Planted fraud, written next to a synthetic corpus.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct GroundTruth {
    pub fraud_users: BTreeSet<UserId>,
    pub fraud_communities: Vec<Vec<UserId>>,
    pub planted_jump_users: BTreeSet<UserId>,
    pub removal_events: Vec<RemovalEvent>,
}

impl GroundTruth {
    pub fn write_json<W: Write>(&self, mut out: W) -> Result<(), SynthError> {
        serde_json::to_writer_pretty(&mut out, self)?;
        out.write_all(b"\n")?;
        Ok(())
    }

    pub fn read_json<R: Read>(source: R) -> Result<Self, SynthError> {
        Ok(serde_json::from_reader(source)?)
    }

    /// Combines two label files, e.g. a forum's and a snapshot run's.
    pub fn merge(mut self, other: GroundTruth) -> GroundTruth {
        self.fraud_users.extend(other.fraud_users);
        self.fraud_communities.extend(other.fraud_communities);
        self.planted_jump_users.extend(other.planted_jump_users);
        self.removal_events.extend(other.removal_events);
        self.removal_events.sort_by_key(|e| (e.timestamp, e.user_id));
        self
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ForumConfig {
    pub honest_users: usize,
    pub honest_questions: usize,
    pub rings: Vec<RingSpec>,
    pub seed: u64,
    pub start: DateTime<Utc>,
    pub span_days: u32,
    /// Each honest question gets between 0 and this many answers.
    pub max_answers: usize,
    /// Chance that an answered honest question accepts one answer.
    pub accept_probability: f64,
    /// Median honest answer latency.
    pub median_latency_hours: f64,
    /// Weight every honest user starts with in the answerer urn.
    pub attachment_base: u32,
    /// Weight added per answer given. Larger values concentrate answering
    /// on hubs.
    pub attachment_gain: u32,
    /// Chance that an honest user also receives a removal event.
    pub honest_removal_rate: f64,
}

impl ForumConfig {
    pub fn new(honest_users: usize, honest_questions: usize, rings: Vec<RingSpec>, seed: u64) -> Self {
        ForumConfig {
            honest_users,
            honest_questions,
            rings,
            seed,
            start: Utc.with_ymd_and_hms(2018, 1, 1, 0, 0, 0).unwrap(),
            span_days: 365,
            max_answers: 3,
            accept_probability: 0.6,
            median_latency_hours: 3.0,
            attachment_base: 1,
            attachment_gain: 16,
            honest_removal_rate: 0.0,
        }
    }

    fn validate(&self) -> Result<(), SynthError> {
        let bad = |m: &str| Err(SynthError::Invalid(m.to_string()));
        if self.honest_users < 2 || self.honest_questions == 0 {
            return bad("need at least two honest users and one honest question");
        }
        if self.span_days == 0 || self.max_answers == 0 || self.attachment_base == 0 {
            return bad("span_days, max_answers and attachment_base must be positive");
        }
        if !(0.0..=1.0).contains(&self.accept_probability) || !(0.0..=1.0).contains(&self.honest_removal_rate) {
            return bad("probabilities must lie in [0, 1]");
        }
        if !(self.median_latency_hours.is_finite() && self.median_latency_hours > 0.0) {
            return bad("median latency must be positive");
        }
        for r in &self.rings {
            r.validate()?;
        }
        Ok(())
    }
}

#[derive(Debug, Clone)]
pub struct Forum {
    /// Sorted by id; ids follow creation order.
    pub posts: Vec<Post>,
    pub truth: GroundTruth,
}

struct Thread {
    asker: UserId,
    at: DateTime<Utc>,
    body: String,
    /// (answerer, latency, body, accepted)
    answers: Vec<(UserId, TimeDelta, String, bool)>,
}

const PROSE_WORDS: usize = 4000;
const CODE_WORDS: usize = 600;

fn word(rng: &mut ChaCha8Rng) -> String {
    // Squaring skews draws toward low indices, giving a rough Zipf shape.
    let u: f64 = rng.random();
    format!("w{}", (u * u * PROSE_WORDS as f64) as usize)
}

fn code_word(rng: &mut ChaCha8Rng) -> String {
    format!("k{}", rng.random_range(0..CODE_WORDS))
}

fn render(prose: &[String], code: &[String]) -> String {
    let mut body = format!("<p>{}</p>", prose.join(" "));
    if !code.is_empty() {
        body.push_str(&format!("<pre><code>{}</code></pre>", code.join(" ")));
    }
    body
}

fn random_body(rng: &mut ChaCha8Rng) -> String {
    let prose: Vec<String> = (0..rng.random_range(12..40)).map(|_| word(rng)).collect();
    let code: Vec<String> =
        if rng.random_bool(0.4) { (0..rng.random_range(4..20)).map(|_| code_word(rng)).collect() } else { Vec::new() };
    render(&prose, &code)
}

/// Body of clone number `j` of a template: the same words rotated.
fn cloned_body(prose: &[String], code: &[String], j: usize) -> String {
    let mut p = prose.to_vec();
    let shift = j % p.len();
    p.rotate_left(shift);
    render(&p, code)
}

fn template(rng: &mut ChaCha8Rng, tag: &str) -> (Vec<String>, Vec<String>) {
    let mut prose: Vec<String> = (0..30).map(|i| format!("{tag}p{i}")).collect();
    prose.extend((0..10).map(|_| word(rng)));
    let code = (0..12).map(|i| format!("{tag}c{i}")).collect();
    (prose, code)
}

/// Generates posts and ground truth. Identical configs give identical output.
pub fn generate_forum(config: &ForumConfig) -> Result<Forum, SynthError> {
    config.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let span = TimeDelta::days(i64::from(config.span_days));
    let honest_max = config.honest_users as UserId;

    // Ring membership first so collisions fail before any work.
    let mut taken: HashSet<UserId> = HashSet::new();
    let mut next_id = honest_max + 1;
    let mut ring_members: Vec<Vec<UserId>> = Vec::with_capacity(config.rings.len());
    for ring in &config.rings {
        let ids: Vec<UserId> = match &ring.member_ids {
            Some(ids) => ids.clone(),
            None => {
                let ids = (0..ring.member_count).map(|k| next_id + k as UserId).collect();
                next_id += ring.member_count as UserId;
                ids
            }
        };
        for &id in &ids {
            if id == 0 || id <= honest_max || !taken.insert(id) {
                return Err(SynthError::IdCollision(id));
            }
        }
        next_id = next_id.max(ids.iter().max().copied().unwrap_or(0) + 1);
        ring_members.push(ids);
    }

    let mut threads: Vec<Thread> = Vec::with_capacity(config.honest_questions + config.rings.len() * 16);
    let latency = LogNormal::new((config.median_latency_hours * 60.0).ln(), 1.4)
        .map_err(|e| SynthError::Invalid(format!("latency distribution: {e}")))?;
    let mut urn: Vec<UserId> = (1..=honest_max)
        .flat_map(|u| std::iter::repeat_n(u, config.attachment_base as usize))
        .collect();
    for _ in 0..config.honest_questions {
        let asker = rng.random_range(1..=honest_max);
        let at = config.start + TimeDelta::seconds(rng.random_range(0..span.num_seconds()));
        let wanted = rng.random_range(0..=config.max_answers);
        let mut answerers: Vec<UserId> = Vec::with_capacity(wanted);
        let mut tries = 0;
        while answerers.len() < wanted && tries < 20 * wanted {
            tries += 1;
            let u = urn[rng.random_range(0..urn.len())];
            if u != asker && !answerers.contains(&u) {
                answerers.push(u);
            }
        }
        let accepted = if !answerers.is_empty() && rng.random_bool(config.accept_probability) {
            Some(rng.random_range(0..answerers.len()))
        } else {
            None
        };
        let answers = answerers
            .into_iter()
            .enumerate()
            .map(|(k, u)| {
                urn.extend(std::iter::repeat_n(u, config.attachment_gain as usize));
                let minutes: f64 = latency.sample(&mut rng);
                let lag = TimeDelta::seconds((minutes * 60.0).round().max(1.0) as i64);
                (u, lag, random_body(&mut rng), accepted == Some(k))
            })
            .collect();
        threads.push(Thread { asker, at, body: random_body(&mut rng), answers });
    }

    let mut truth = GroundTruth::default();
    for (r, (ring, members)) in config.rings.iter().zip(&ring_members).enumerate() {
        let pairs = ring.pairs();
        let gaps: Vec<TimeDelta> =
            (0..ring.interaction_count).map(|_| TimeDelta::minutes(rng.random_range(30..48 * 60))).collect();
        let total: TimeDelta = gaps.iter().copied().sum::<TimeDelta>() + ring.max_latency();
        let slack = (span - total).num_seconds().max(0);
        let mut at = config.start + TimeDelta::seconds(rng.random_range(0..=slack));
        let (q_template, q_code) = template(&mut rng, &format!("r{r}q"));
        let (a_template, a_code) = template(&mut rng, &format!("r{r}a"));
        let max_secs = ring.max_latency().num_seconds();
        let first_question = at;
        let mut last_answer = at;
        for (j, gap) in gaps.into_iter().enumerate() {
            let (x, y) = pairs[j % pairs.len()];
            // Alternate direction on each sweep over the pairs so every pair
            // gets answers both ways.
            let (asker, answerer) = if (j / pairs.len()) % 2 == 0 { (x, y) } else { (y, x) };
            let lag = TimeDelta::seconds(rng.random_range((max_secs / 20).max(1)..=max_secs));
            let accepted = ring.all_accepted || j % 2 == 1;
            let (q_body, a_body) = if ring.clone_questions {
                (cloned_body(&q_template, &q_code, j), cloned_body(&a_template, &a_code, j))
            } else {
                (random_body(&mut rng), random_body(&mut rng))
            };
            threads.push(Thread {
                asker: members[asker],
                at,
                body: q_body,
                answers: vec![(members[answerer], lag, a_body, accepted)],
            });
            last_answer = last_answer.max(at + lag);
            at += gap;
        }
        let mut sorted = members.clone();
        sorted.sort_unstable();
        truth.fraud_users.extend(sorted.iter().copied());
        truth.fraud_communities.push(sorted);
        let window = (last_answer - first_question + TimeDelta::days(20)).num_seconds();
        for &m in members {
            let when = first_question + TimeDelta::seconds(rng.random_range(0..=window));
            let delta = -10 * rng.random_range(1..=ring.interaction_count as i64);
            truth.removal_events.push(RemovalEvent { user_id: m, timestamp: when, score_delta: delta });
        }
    }
    for u in 1..=honest_max {
        if config.honest_removal_rate > 0.0 && rng.random_bool(config.honest_removal_rate) {
            let when = config.start + TimeDelta::seconds(rng.random_range(0..span.num_seconds()));
            truth.removal_events.push(RemovalEvent { user_id: u, timestamp: when, score_delta: -10 });
        }
    }

    // Posts take ids in question order; answers follow their question.
    threads.sort_by_key(|t| t.at);
    let mut posts = Vec::with_capacity(threads.len() * 3);
    let mut id: PostId = 1;
    for t in threads {
        let qid = id;
        id += 1;
        let mut accepted_answer_id = None;
        let mut answers = Vec::with_capacity(t.answers.len());
        for (answerer, lag, body, accepted) in t.answers {
            if accepted {
                accepted_answer_id = Some(id);
            }
            answers.push(Post {
                id,
                kind: PostKind::Answer,
                owner_id: answerer,
                parent_id: Some(qid),
                accepted_answer_id: None,
                created_at: t.at + lag,
                body,
            });
            id += 1;
        }
        posts.push(Post {
            id: qid,
            kind: PostKind::Question,
            owner_id: t.asker,
            parent_id: None,
            accepted_answer_id,
            created_at: t.at,
            body: t.body,
        });
        posts.extend(answers);
    }

    // Keep removal events inside the corpus time span.
    let first = posts.iter().map(|p| p.created_at).min().unwrap_or(config.start);
    let last = posts.iter().map(|p| p.created_at).max().unwrap_or(config.start);
    for e in &mut truth.removal_events {
        e.timestamp = e.timestamp.clamp(first, last);
    }
    truth.removal_events.sort_by_key(|e| (e.timestamp, e.user_id));
    Ok(Forum { posts, truth })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PlantedJump {
    pub user_id: UserId,
    /// Growth over the last interval as a multiple of the honest mean.
    pub multiple: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SnapshotConfig {
    pub honest_users: usize,
    /// Mean honest growth per interval (μ_s).
    pub mean_growth: f64,
    pub growth_sd: f64,
    /// Honest starting scores are drawn uniformly from `1..=max_base_score`.
    pub max_base_score: i64,
    pub planted: Vec<PlantedJump>,
    /// At least two, strictly increasing dates.
    pub dumps: Vec<Dump>,
    /// Share of honest users whose last access predates the activity window.
    pub inactive_fraction: f64,
    pub seed: u64,
}

impl SnapshotConfig {
    /// Quarterly dumps starting 2018-12-01.
    pub fn quarterly(count: usize) -> Vec<Dump> {
        (0..count)
            .map(|i| {
                let month = 12 + 3 * i as u32;
                let (y, m) = (2018 + ((month - 1) / 12) as i32, (month - 1) % 12 + 1);
                Dump { label: format!("D{}", i + 1), date: Utc.with_ymd_and_hms(y, m, 1, 0, 0, 0).unwrap() }
            })
            .collect()
    }

    pub fn new(honest_users: usize, planted: Vec<PlantedJump>, seed: u64) -> Self {
        SnapshotConfig {
            honest_users,
            mean_growth: 15.0,
            growth_sd: 15.0,
            max_base_score: 20_000,
            planted,
            dumps: Self::quarterly(2),
            inactive_fraction: 0.1,
            seed,
        }
    }
}

/// Scores at every dump. Honest users grow by a normal draw each interval;
/// planted users grow honestly until the last interval, where they gain
/// `multiple × mean_growth` and are kept active.
pub fn generate_snapshots(config: &SnapshotConfig) -> Result<(SnapshotSet, GroundTruth), SynthError> {
    if config.dumps.len() < 2 {
        return Err(SynthError::Invalid("need at least two dumps".into()));
    }
    if !(config.mean_growth.is_finite() && config.growth_sd.is_finite() && config.growth_sd >= 0.0) {
        return Err(SynthError::Invalid("growth parameters must be finite with a non-negative spread".into()));
    }
    if config.max_base_score < 1 || !(0.0..=1.0).contains(&config.inactive_fraction) {
        return Err(SynthError::Invalid("max_base_score must be positive and inactive_fraction in [0, 1]".into()));
    }
    let mut seen = HashSet::new();
    for p in &config.planted {
        if !(p.multiple.is_finite() && p.multiple > 0.0) {
            return Err(SynthError::Invalid(format!("planted multiple must be positive, got {}", p.multiple)));
        }
        if !seen.insert(p.user_id) {
            return Err(SynthError::DuplicatePlanted(p.user_id));
        }
    }
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let growth = Normal::new(config.mean_growth, config.growth_sd)
        .map_err(|e| SynthError::Invalid(format!("growth distribution: {e}")))?;
    let mut set = SnapshotSet::new(config.dumps.clone())?;
    let dumps = set.dumps().to_vec();
    let last = dumps.len() - 1;

    let mut users: Vec<UserId> = (1..=config.honest_users as UserId).collect();
    users.extend(config.planted.iter().map(|p| p.user_id).filter(|&u| u == 0 || u > config.honest_users as UserId));
    users.sort_unstable();
    users.dedup();

    let mut truth = GroundTruth::default();
    for user in users {
        let planted = config.planted.iter().find(|p| p.user_id == user);
        let active = planted.is_some() || !rng.random_bool(config.inactive_fraction);
        let mut score: i64 = rng.random_range(1..=config.max_base_score);
        for (i, dump) in dumps.iter().enumerate() {
            if i > 0 {
                let delta = match planted {
                    Some(p) if i == last => (p.multiple * config.mean_growth).round() as i64,
                    _ => growth.sample(&mut rng).round() as i64,
                };
                score = (score + delta).max(1);
            }
            let seen_at = if active {
                dump.date - TimeDelta::hours(rng.random_range(1..24 * 60))
            } else {
                dump.date - TimeDelta::days(rng.random_range(200..600))
            };
            set.insert(user, &dump.label, score, Some(seen_at))?;
        }
        if let Some(p) = planted {
            truth.planted_jump_users.insert(user);
            let (from, to) = (dumps[last - 1].date, dumps[last].date);
            let when = from + TimeDelta::seconds(rng.random_range(0..(to - from).num_seconds()));
            let removed = -((p.multiple * config.mean_growth).round() as i64);
            truth.removal_events.push(RemovalEvent { user_id: user, timestamp: when, score_delta: removed });
        }
    }
    truth.removal_events.sort_by_key(|e| (e.timestamp, e.user_id));
    Ok((set, truth))
}
