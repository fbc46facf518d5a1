//! Post ingestion, the mutual-answer interaction table, and reputation snapshots.
//!
//! Posts come either from a Stack Exchange `Posts.xml` dump (`<row .../>`
//! elements) or from a JSONL mirror with one post per line. Both readers are
//! single-pass streams: records are handed to a sink as soon as they are
//! decoded, so memory is bounded by what the caller keeps.

use std::collections::{BTreeMap, HashMap, HashSet};
use std::io::{BufRead, Read, Write};

use chrono::{DateTime, NaiveDate, NaiveDateTime, Utc};
use quick_xml::events::{BytesStart, Event};
use serde::{Deserialize, Serialize};
use thiserror::Error;

pub type UserId = u64;
pub type PostId = u64;

/// Diagnostics beyond this many are counted but not retained.
const MAX_KEPT_DIAGNOSTICS: usize = 1000;

#[derive(Debug, Error)]
pub enum CorpusError {
    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),
    #[error("malformed XML near byte {offset}: {message}")]
    Xml { offset: u64, message: String },
    #[error("failed to serialize record: {0}")]
    Serialize(#[from] serde_json::Error),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum PostKind {
    Question,
    Answer,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PostFormat {
    SeXml,
    Jsonl,
}

impl std::str::FromStr for PostFormat {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "se-xml" | "xml" => Ok(PostFormat::SeXml),
            "jsonl" => Ok(PostFormat::Jsonl),
            other => Err(format!("unknown post format `{other}` (expected se-xml or jsonl)")),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Post {
    pub id: PostId,
    pub kind: PostKind,
    pub owner_id: UserId,
    pub parent_id: Option<PostId>,
    pub accepted_answer_id: Option<PostId>,
    pub created_at: DateTime<Utc>,
    pub body: String,
}

impl Post {
    /// Checks the kind/parent pairing and that acceptance only sits on questions.
    pub fn validate(&self) -> Result<(), String> {
        match (self.kind, self.parent_id) {
            (PostKind::Answer, None) => return Err(format!("answer {} has no ParentId", self.id)),
            (PostKind::Question, Some(p)) => {
                return Err(format!("question {} carries ParentId {p}", self.id))
            }
            _ => {}
        }
        if self.kind == PostKind::Answer && self.accepted_answer_id.is_some() {
            return Err(format!("answer {} carries AcceptedAnswerId", self.id));
        }
        Ok(())
    }
}

/// Where a bad record sits in its source.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum RecordLocation {
    Line(u64),
    ByteOffset(u64),
}

impl std::fmt::Display for RecordLocation {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            RecordLocation::Line(n) => write!(f, "line {n}"),
            RecordLocation::ByteOffset(n) => write!(f, "byte {n}"),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct RecordDiagnostic {
    pub location: RecordLocation,
    pub message: String,
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize)]
pub struct ParseSummary {
    pub records_seen: u64,
    pub kept: u64,
    pub skipped_missing_owner: u64,
    /// Rows with a PostTypeId other than question/answer (wiki, tag excerpts, ...).
    pub skipped_other_type: u64,
    pub invalid: u64,
    pub diagnostics: Vec<RecordDiagnostic>,
}

impl ParseSummary {
    pub fn skipped(&self) -> u64 {
        self.skipped_missing_owner + self.skipped_other_type + self.invalid
    }

    fn invalid_record(&mut self, location: RecordLocation, message: String) {
        self.invalid += 1;
        if self.diagnostics.len() < MAX_KEPT_DIAGNOSTICS {
            self.diagnostics.push(RecordDiagnostic { location, message });
        }
    }
}

#[derive(Debug, Clone)]
pub struct ParsedPosts {
    pub posts: Vec<Post>,
    pub summary: ParseSummary,
}

/// Parses a whole post stream into memory.
pub fn parse_posts<R: BufRead>(source: R, format: PostFormat) -> Result<ParsedPosts, CorpusError> {
    let mut posts = Vec::new();
    let summary = parse_posts_with(source, format, |p| posts.push(p))?;
    Ok(ParsedPosts { posts, summary })
}

/// Streams posts to `sink` one at a time.
pub fn parse_posts_with<R, F>(source: R, format: PostFormat, sink: F) -> Result<ParseSummary, CorpusError>
where
    R: BufRead,
    F: FnMut(Post),
{
    let summary = match format {
        PostFormat::SeXml => parse_xml(source, sink)?,
        PostFormat::Jsonl => parse_jsonl(source, sink)?,
    };
    if summary.skipped() > 0 {
        log::warn!(
            "skipped {} of {} post records ({} missing owner, {} other post types, {} invalid)",
            summary.skipped(),
            summary.records_seen,
            summary.skipped_missing_owner,
            summary.skipped_other_type,
            summary.invalid
        );
    }
    Ok(summary)
}

enum RowOutcome {
    Keep(Post),
    MissingOwner,
    OtherType,
}

fn parse_xml<R: BufRead, F: FnMut(Post)>(source: R, mut sink: F) -> Result<ParseSummary, CorpusError> {
    let mut reader = quick_xml::Reader::from_reader(source);
    let mut summary = ParseSummary::default();
    let mut buf = Vec::new();
    loop {
        let offset = reader.buffer_position();
        let event = reader.read_event_into(&mut buf).map_err(|e| match e {
            quick_xml::Error::Io(io) => CorpusError::Io(std::io::Error::new(io.kind(), io.to_string())),
            other => CorpusError::Xml { offset: reader.error_position(), message: other.to_string() },
        })?;
        match event {
            Event::Empty(ref e) | Event::Start(ref e) if e.name().as_ref() == b"row" => {
                summary.records_seen += 1;
                match xml_row(e) {
                    Ok(RowOutcome::Keep(post)) => {
                        summary.kept += 1;
                        sink(post);
                    }
                    Ok(RowOutcome::MissingOwner) => summary.skipped_missing_owner += 1,
                    Ok(RowOutcome::OtherType) => summary.skipped_other_type += 1,
                    Err(msg) => summary.invalid_record(RecordLocation::ByteOffset(offset), msg),
                }
            }
            Event::Eof => break,
            _ => {}
        }
        buf.clear();
    }
    Ok(summary)
}

fn xml_row(e: &BytesStart<'_>) -> Result<RowOutcome, String> {
    let mut id = None;
    let mut post_type = None;
    let mut parent = None;
    let mut accepted = None;
    let mut created = None;
    let mut owner = None;
    let mut body = None;
    for attr in e.attributes() {
        let attr = attr.map_err(|err| format!("bad attribute: {err}"))?;
        let value = attr.unescape_value().map_err(|err| format!("bad attribute value: {err}"))?;
        match attr.key.as_ref() {
            b"Id" => id = Some(parse_id("Id", &value)?),
            b"PostTypeId" => post_type = Some(parse_id("PostTypeId", &value)?),
            b"ParentId" => parent = Some(parse_id("ParentId", &value)?),
            b"AcceptedAnswerId" => accepted = Some(parse_id("AcceptedAnswerId", &value)?),
            b"CreationDate" => created = Some(parse_timestamp(&value)?),
            b"OwnerUserId" => owner = Some(parse_id("OwnerUserId", &value)?),
            b"Body" => body = Some(value.into_owned()),
            _ => {}
        }
    }
    let id = id.ok_or("row has no Id attribute")?;
    let kind = match post_type.ok_or_else(|| format!("post {id} has no PostTypeId"))? {
        1 => PostKind::Question,
        2 => PostKind::Answer,
        _ => return Ok(RowOutcome::OtherType),
    };
    let Some(owner_id) = owner else {
        return Ok(RowOutcome::MissingOwner);
    };
    let created_at = created.ok_or_else(|| format!("post {id} has no CreationDate"))?;
    let post = Post {
        id,
        kind,
        owner_id,
        parent_id: parent,
        accepted_answer_id: accepted,
        created_at,
        body: body.unwrap_or_default(),
    };
    post.validate()?;
    Ok(RowOutcome::Keep(post))
}

fn parse_id(name: &str, value: &str) -> Result<u64, String> {
    value.trim().parse().map_err(|_| format!("{name}=`{value}` is not a non-negative integer"))
}

/// Parses an ISO-8601 instant. Values without a zone are taken as UTC.
pub fn parse_timestamp(value: &str) -> Result<DateTime<Utc>, String> {
    let v = value.trim();
    if let Ok(t) = DateTime::parse_from_rfc3339(v) {
        return Ok(t.with_timezone(&Utc));
    }
    for fmt in ["%Y-%m-%dT%H:%M:%S%.f", "%Y-%m-%d %H:%M:%S%.f"] {
        if let Ok(t) = NaiveDateTime::parse_from_str(v, fmt) {
            return Ok(t.and_utc());
        }
    }
    if let Ok(d) = NaiveDate::parse_from_str(v, "%Y-%m-%d") {
        return Ok(d.and_hms_opt(0, 0, 0).expect("midnight is valid").and_utc());
    }
    Err(format!("`{value}` is not an ISO-8601 timestamp"))
}

#[derive(Deserialize)]
struct JsonPost {
    id: Option<PostId>,
    kind: Option<PostKind>,
    owner_id: Option<UserId>,
    #[serde(default)]
    parent_id: Option<PostId>,
    #[serde(default)]
    accepted_answer_id: Option<PostId>,
    created_at: Option<String>,
    #[serde(default)]
    body: Option<String>,
}

fn parse_jsonl<R: BufRead, F: FnMut(Post)>(source: R, mut sink: F) -> Result<ParseSummary, CorpusError> {
    let mut summary = ParseSummary::default();
    for (idx, line) in source.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        summary.records_seen += 1;
        let location = RecordLocation::Line(idx as u64 + 1);
        match json_post(&line) {
            Ok(Some(post)) => {
                summary.kept += 1;
                sink(post);
            }
            Ok(None) => summary.skipped_missing_owner += 1,
            Err(msg) => summary.invalid_record(location, msg),
        }
    }
    Ok(summary)
}

fn json_post(line: &str) -> Result<Option<Post>, String> {
    let raw: JsonPost = serde_json::from_str(line).map_err(|e| format!("invalid JSON post: {e}"))?;
    let id = raw.id.ok_or("record has no id")?;
    let kind = raw.kind.ok_or_else(|| format!("post {id} has no kind"))?;
    let Some(owner_id) = raw.owner_id else {
        return Ok(None);
    };
    let created_at = parse_timestamp(&raw.created_at.ok_or_else(|| format!("post {id} has no created_at"))?)?;
    let post = Post {
        id,
        kind,
        owner_id,
        parent_id: raw.parent_id,
        accepted_answer_id: raw.accepted_answer_id,
        created_at,
        body: raw.body.unwrap_or_default(),
    };
    post.validate()?;
    Ok(Some(post))
}

/// Writes posts in the JSONL mirror format.
pub fn write_posts_jsonl<W: Write>(mut out: W, posts: &[Post]) -> Result<(), CorpusError> {
    for p in posts {
        serde_json::to_writer(&mut out, p)?;
        out.write_all(b"\n")?;
    }
    Ok(())
}

/// One answer to a question between two users who have each answered the other.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct InteractionRecord {
    pub question_id: PostId,
    pub asker_id: UserId,
    pub answer_id: PostId,
    pub answerer_id: UserId,
    pub question_created_at: DateTime<Utc>,
    pub answer_created_at: DateTime<Utc>,
    pub is_accepted: bool,
    pub question_body: String,
    pub answer_body: String,
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize)]
pub struct TableSummary {
    pub answers_seen: u64,
    pub dangling_answers: u64,
    pub self_answers: u64,
    pub negative_latency: u64,
    pub non_mutual_answers: u64,
    pub duplicate_post_ids: u64,
    /// Questions whose AcceptedAnswerId names an answer to some other question.
    pub inconsistent_acceptance: u64,
}

#[derive(Debug, Clone, Default)]
pub struct InteractionTable {
    pub records: Vec<InteractionRecord>,
    pub summary: TableSummary,
}

/// Keeps every answer whose asker/answerer pair is mutual, one record per
/// answer post, ordered by answer id.
pub fn build_interaction_table(posts: &[Post]) -> InteractionTable {
    let mut summary = TableSummary::default();
    let mut questions: HashMap<PostId, &Post> = HashMap::new();
    let mut answers: Vec<&Post> = Vec::new();
    let mut seen_ids = HashSet::with_capacity(posts.len());
    for p in posts {
        if !seen_ids.insert(p.id) {
            summary.duplicate_post_ids += 1;
            continue;
        }
        match p.kind {
            PostKind::Question => {
                questions.insert(p.id, p);
            }
            PostKind::Answer => answers.push(p),
        }
    }
    answers.sort_by_key(|a| a.id);

    let answer_parent: HashMap<PostId, PostId> =
        answers.iter().filter_map(|a| a.parent_id.map(|q| (a.id, q))).collect();
    for q in questions.values() {
        if let Some(acc) = q.accepted_answer_id {
            if answer_parent.get(&acc).is_some_and(|&parent| parent != q.id) {
                summary.inconsistent_acceptance += 1;
            }
        }
    }

    let mut candidates: Vec<(&Post, &Post)> = Vec::new();
    for a in &answers {
        summary.answers_seen += 1;
        let Some(q) = a.parent_id.and_then(|qid| questions.get(&qid)) else {
            summary.dangling_answers += 1;
            continue;
        };
        if q.owner_id == a.owner_id {
            summary.self_answers += 1;
            continue;
        }
        if a.created_at < q.created_at {
            summary.negative_latency += 1;
            continue;
        }
        candidates.push((q, a));
    }
    if summary.dangling_answers > 0 {
        log::warn!("dropped {} answers whose question is not in the corpus", summary.dangling_answers);
    }
    if summary.negative_latency > 0 {
        log::warn!("rejected {} answers created before their question", summary.negative_latency);
    }

    let directed: HashSet<(UserId, UserId)> =
        candidates.iter().map(|(q, a)| (q.owner_id, a.owner_id)).collect();
    let mut records = Vec::new();
    for (q, a) in candidates {
        if !directed.contains(&(a.owner_id, q.owner_id)) {
            summary.non_mutual_answers += 1;
            continue;
        }
        records.push(InteractionRecord {
            question_id: q.id,
            asker_id: q.owner_id,
            answer_id: a.id,
            answerer_id: a.owner_id,
            question_created_at: q.created_at,
            answer_created_at: a.created_at,
            is_accepted: q.accepted_answer_id == Some(a.id),
            question_body: q.body.clone(),
            answer_body: a.body.clone(),
        });
    }
    InteractionTable { records, summary }
}

pub fn write_table_jsonl<W: Write>(mut out: W, records: &[InteractionRecord]) -> Result<(), CorpusError> {
    for r in records {
        serde_json::to_writer(&mut out, r)?;
        out.write_all(b"\n")?;
    }
    Ok(())
}

#[derive(Debug, Error)]
pub enum TableReadError {
    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),
    #[error("line {line}: {message}")]
    Record { line: usize, message: String },
}

pub fn read_table_jsonl<R: BufRead>(source: R) -> Result<Vec<InteractionRecord>, TableReadError> {
    let mut out = Vec::new();
    for (idx, line) in source.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let rec: InteractionRecord = serde_json::from_str(&line)
            .map_err(|e| TableReadError::Record { line: idx + 1, message: e.to_string() })?;
        out.push(rec);
    }
    Ok(out)
}

// ---------------------------------------------------------------------------
// Reputation snapshots
// ---------------------------------------------------------------------------

pub const SNAPSHOT_HEADER: [&str; 5] = ["user_id", "dump_label", "dump_date", "reputation", "last_access_date"];

#[derive(Debug, Error)]
pub enum SnapshotError {
    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),
    #[error("snapshot header must be `{}`, found `{found}`", SNAPSHOT_HEADER.join(","))]
    Header { found: String },
    #[error("row {row}: {message}")]
    Row { row: u64, message: String },
    #[error("duplicate snapshot row for user {user} at dump `{label}`")]
    Duplicate { user: UserId, label: String },
    #[error("dump `{label}` is declared with two dates ({first} and {second})")]
    ConflictingDate { label: String, first: DateTime<Utc>, second: DateTime<Utc> },
    #[error("dump dates must strictly increase: `{label}` ({date}) does not follow `{previous}` ({previous_date})")]
    NonMonotone { label: String, date: DateTime<Utc>, previous: String, previous_date: DateTime<Utc> },
    #[error("unknown dump label `{0}`")]
    UnknownLabel(String),
    #[error("reputation {score} for user {user} is below the platform floor of 1")]
    BelowFloor { user: UserId, score: i64 },
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Dump {
    pub label: String,
    pub date: DateTime<Utc>,
}

/// Per-user reputation at named dump dates.
///
/// Last-access timestamps are kept per (user, dump) because every dump
/// records its own value.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct SnapshotSet {
    dumps: Vec<Dump>,
    scores: BTreeMap<(UserId, usize), i64>,
    last_access: BTreeMap<(UserId, usize), DateTime<Utc>>,
}

impl SnapshotSet {
    /// Creates an empty set; `dumps` must be in strictly increasing date order.
    pub fn new(dumps: Vec<Dump>) -> Result<Self, SnapshotError> {
        let mut set = SnapshotSet::default();
        for d in dumps {
            set.declare_dump(&d.label, d.date)?;
        }
        Ok(set)
    }

    fn declare_dump(&mut self, label: &str, date: DateTime<Utc>) -> Result<usize, SnapshotError> {
        if let Some(idx) = self.label_index(label) {
            let first = self.dumps[idx].date;
            if first != date {
                return Err(SnapshotError::ConflictingDate { label: label.to_string(), first, second: date });
            }
            return Ok(idx);
        }
        if let Some(prev) = self.dumps.last() {
            if date <= prev.date {
                return Err(SnapshotError::NonMonotone {
                    label: label.to_string(),
                    date,
                    previous: prev.label.clone(),
                    previous_date: prev.date,
                });
            }
        }
        self.dumps.push(Dump { label: label.to_string(), date });
        Ok(self.dumps.len() - 1)
    }

    pub fn insert(
        &mut self,
        user: UserId,
        label: &str,
        score: i64,
        last_access: Option<DateTime<Utc>>,
    ) -> Result<(), SnapshotError> {
        let idx = self.label_index(label).ok_or_else(|| SnapshotError::UnknownLabel(label.to_string()))?;
        self.insert_at(user, idx, score, last_access)
    }

    fn insert_at(
        &mut self,
        user: UserId,
        idx: usize,
        score: i64,
        last_access: Option<DateTime<Utc>>,
    ) -> Result<(), SnapshotError> {
        if score < 1 {
            return Err(SnapshotError::BelowFloor { user, score });
        }
        if self.scores.contains_key(&(user, idx)) {
            return Err(SnapshotError::Duplicate { user, label: self.dumps[idx].label.clone() });
        }
        self.scores.insert((user, idx), score);
        if let Some(t) = last_access {
            self.last_access.insert((user, idx), t);
        }
        Ok(())
    }

    pub fn dumps(&self) -> &[Dump] {
        &self.dumps
    }

    pub fn dump(&self, label: &str) -> Option<&Dump> {
        self.label_index(label).map(|i| &self.dumps[i])
    }

    fn label_index(&self, label: &str) -> Option<usize> {
        self.dumps.iter().position(|d| d.label == label)
    }

    pub fn score(&self, user: UserId, label: &str) -> Option<i64> {
        let idx = self.label_index(label)?;
        self.scores.get(&(user, idx)).copied()
    }

    pub fn last_access(&self, user: UserId, label: &str) -> Option<DateTime<Utc>> {
        let idx = self.label_index(label)?;
        self.last_access.get(&(user, idx)).copied()
    }

    /// Distinct users with at least one score, ascending.
    pub fn users(&self) -> Vec<UserId> {
        let mut users: Vec<UserId> = self.scores.keys().map(|(u, _)| *u).collect();
        users.dedup();
        users
    }

    pub fn user_count(&self) -> usize {
        self.users().len()
    }

    /// Scores at one dump, ascending by user.
    pub fn scores_at(&self, label: &str) -> Vec<(UserId, i64)> {
        let Some(idx) = self.label_index(label) else {
            return Vec::new();
        };
        self.scores.iter().filter(|((_, i), _)| *i == idx).map(|((u, _), s)| (*u, *s)).collect()
    }

    /// Writes the set back out as CSV, grouped by user then dump order.
    pub fn write_csv<W: Write>(&self, out: W) -> Result<(), SnapshotError> {
        let mut w = csv::Writer::from_writer(out);
        let to_io = |e: csv::Error| SnapshotError::Io(std::io::Error::other(e.to_string()));
        w.write_record(SNAPSHOT_HEADER).map_err(to_io)?;
        let mut rows: Vec<_> = self.scores.iter().collect();
        rows.sort_by_key(|((user, idx), _)| (*idx, *user));
        for ((user, idx), score) in rows {
            let dump = &self.dumps[*idx];
            let access = self.last_access.get(&(*user, *idx)).map(format_timestamp).unwrap_or_default();
            w.write_record([
                user.to_string(),
                dump.label.clone(),
                format_timestamp(&dump.date),
                score.to_string(),
                access,
            ])
            .map_err(to_io)?;
        }
        w.flush()?;
        Ok(())
    }
}

/// Renders a timestamp the way the snapshot and ground-truth files store it.
pub fn format_timestamp(t: &DateTime<Utc>) -> String {
    t.to_rfc3339_opts(chrono::SecondsFormat::AutoSi, true)
}

/// Reads `user_id,dump_label,dump_date,reputation,last_access_date` rows.
/// Dumps are ordered by date; two labels sharing a date are rejected.
pub fn load_snapshots<R: Read>(source: R) -> Result<SnapshotSet, SnapshotError> {
    struct Row {
        user: UserId,
        label: String,
        score: i64,
        access: Option<DateTime<Utc>>,
    }

    let mut reader = csv::ReaderBuilder::new().has_headers(true).trim(csv::Trim::All).from_reader(source);
    let header = reader.headers().map_err(|e| csv_error(e, 1))?.clone();
    if header.iter().collect::<Vec<_>>() != SNAPSHOT_HEADER {
        return Err(SnapshotError::Header { found: header.iter().collect::<Vec<_>>().join(",") });
    }
    let mut rows = Vec::new();
    let mut dates: BTreeMap<String, DateTime<Utc>> = BTreeMap::new();
    let mut record = csv::StringRecord::new();
    let mut row: u64 = 1;
    loop {
        row += 1;
        match reader.read_record(&mut record) {
            Ok(true) => {}
            Ok(false) => break,
            Err(e) => return Err(csv_error(e, row)),
        }
        let bad = |message: String| SnapshotError::Row { row, message };
        if record.len() != SNAPSHOT_HEADER.len() {
            return Err(bad(format!("expected {} fields, found {}", SNAPSHOT_HEADER.len(), record.len())));
        }
        let user: UserId = record[0].parse().map_err(|_| bad(format!("bad user_id `{}`", &record[0])))?;
        let label = record[1].to_string();
        if label.is_empty() {
            return Err(bad("empty dump_label".into()));
        }
        let date = parse_timestamp(&record[2]).map_err(bad)?;
        let score: i64 = record[3].parse().map_err(|_| bad(format!("bad reputation `{}`", &record[3])))?;
        let access = match &record[4] {
            "" => None,
            s => Some(parse_timestamp(s).map_err(bad)?),
        };
        match dates.get(&label) {
            Some(&first) if first != date => {
                return Err(SnapshotError::ConflictingDate { label, first, second: date });
            }
            Some(_) => {}
            None => {
                dates.insert(label.clone(), date);
            }
        }
        rows.push(Row { user, label, score, access });
    }

    let mut dumps: Vec<Dump> = dates.into_iter().map(|(label, date)| Dump { label, date }).collect();
    dumps.sort_by(|a, b| a.date.cmp(&b.date).then_with(|| a.label.cmp(&b.label)));
    let mut set = SnapshotSet::new(dumps)?;
    for r in rows {
        set.insert(r.user, &r.label, r.score, r.access)?;
    }
    Ok(set)
}

fn csv_error(e: csv::Error, row: u64) -> SnapshotError {
    if e.is_io_error() {
        match e.into_kind() {
            csv::ErrorKind::Io(io) => SnapshotError::Io(io),
            _ => unreachable!("checked is_io_error"),
        }
    } else {
        SnapshotError::Row { row, message: e.to_string() }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn ts(s: &str) -> DateTime<Utc> {
        parse_timestamp(s).unwrap()
    }

    fn question(id: PostId, owner: UserId, at: &str) -> Post {
        Post {
            id,
            kind: PostKind::Question,
            owner_id: owner,
            parent_id: None,
            accepted_answer_id: None,
            created_at: ts(at),
            body: format!("<p>question {id}</p>"),
        }
    }

    fn answer(id: PostId, parent: PostId, owner: UserId, at: &str) -> Post {
        Post {
            id,
            kind: PostKind::Answer,
            owner_id: owner,
            parent_id: Some(parent),
            accepted_answer_id: None,
            created_at: ts(at),
            body: format!("<p>answer {id}</p>"),
        }
    }

    #[test]
    fn xml_question_and_answer_rows() {
        let xml = r#"<?xml version="1.0" encoding="utf-8"?>
<posts>
  <row Id="1" PostTypeId="1" AcceptedAnswerId="2" OwnerUserId="7" CreationDate="2018-01-01T00:00:00" Body="&lt;p&gt;q&lt;/p&gt;" />
  <row Id="2" PostTypeId="2" ParentId="1" OwnerUserId="8" CreationDate="2018-01-01T01:30:00.250" Body="&lt;p&gt;a&lt;/p&gt;" />
</posts>"#;
        let parsed = parse_posts(xml.as_bytes(), PostFormat::SeXml).unwrap();
        assert_eq!(parsed.posts.len(), 2);
        let q = &parsed.posts[0];
        assert_eq!((q.id, q.kind, q.owner_id), (1, PostKind::Question, 7));
        assert_eq!(q.accepted_answer_id, Some(2));
        assert_eq!(q.body, "<p>q</p>");
        assert_eq!(q.created_at, ts("2018-01-01T00:00:00Z"));
        let a = &parsed.posts[1];
        assert_eq!((a.id, a.kind, a.parent_id), (2, PostKind::Answer, Some(1)));
        assert_eq!(parsed.summary.skipped(), 0);
    }

    #[test]
    fn xml_row_without_id_is_diagnosed_and_skipped() {
        let xml = r#"<posts>
<row PostTypeId="1" OwnerUserId="7" CreationDate="2018-01-01T00:00:00" Body="x" />
<row Id="3" PostTypeId="1" OwnerUserId="7" CreationDate="2018-01-01T00:00:00" Body="x" />
</posts>"#;
        let parsed = parse_posts(xml.as_bytes(), PostFormat::SeXml).unwrap();
        assert_eq!(parsed.posts.len(), 1);
        assert_eq!(parsed.summary.invalid, 1);
        assert_eq!(parsed.summary.skipped(), 1);
        let d = &parsed.summary.diagnostics[0];
        assert!(matches!(d.location, RecordLocation::ByteOffset(_)));
        assert!(d.message.contains("Id"), "{}", d.message);
    }

    #[test]
    fn missing_owner_and_wiki_rows_are_counted() {
        let xml = r#"<posts>
<row Id="1" PostTypeId="1" CreationDate="2018-01-01T00:00:00" Body="x" />
<row Id="2" PostTypeId="5" OwnerUserId="1" CreationDate="2018-01-01T00:00:00" Body="x" />
</posts>"#;
        let parsed = parse_posts(xml.as_bytes(), PostFormat::SeXml).unwrap();
        assert!(parsed.posts.is_empty());
        assert_eq!(parsed.summary.skipped_missing_owner, 1);
        assert_eq!(parsed.summary.skipped_other_type, 1);
    }

    #[test]
    fn broken_xml_is_an_error() {
        let xml = "<posts><row Id=\"1\" PostTypeId=\"1\" /></wrong>";
        assert!(matches!(parse_posts(xml.as_bytes(), PostFormat::SeXml), Err(CorpusError::Xml { .. })));
    }

    #[test]
    fn jsonl_diagnostics_carry_line_numbers() {
        let src = concat!(
            r#"{"id":1,"kind":"question","owner_id":7,"created_at":"2018-01-01T00:00:00Z","body":"q"}"#,
            "\n\n",
            r#"{"kind":"question","owner_id":7,"created_at":"2018-01-01T00:00:00Z"}"#,
            "\n",
            r#"{"id":3,"kind":"answer","owner_id":8,"created_at":"2018-01-01T00:00:00Z"}"#,
            "\n",
            r#"{"id":4,"kind":"answer","parent_id":1,"owner_id":null,"created_at":"2018-01-01T00:00:00Z"}"#,
            "\n",
        );
        let parsed = parse_posts(src.as_bytes(), PostFormat::Jsonl).unwrap();
        assert_eq!(parsed.posts.len(), 1);
        assert_eq!(parsed.summary.invalid, 2);
        assert_eq!(parsed.summary.skipped_missing_owner, 1);
        assert_eq!(parsed.summary.diagnostics[0].location, RecordLocation::Line(3));
        assert_eq!(parsed.summary.diagnostics[1].location, RecordLocation::Line(4));
    }

    #[test]
    fn mutual_pair_keeps_both_records() {
        let posts = vec![
            question(1, 1, "2018-01-01T00:00:00"),
            answer(2, 1, 2, "2018-01-01T01:00:00"),
            question(3, 2, "2018-01-02T00:00:00"),
            answer(4, 3, 1, "2018-01-02T02:00:00"),
        ];
        let table = build_interaction_table(&posts);
        assert_eq!(table.records.len(), 2);
        assert_eq!((table.records[0].asker_id, table.records[0].answerer_id), (1, 2));
        assert_eq!((table.records[1].asker_id, table.records[1].answerer_id), (2, 1));
    }

    #[test]
    fn one_way_pair_is_filtered() {
        let posts = vec![question(1, 4, "2018-01-01T00:00:00"), answer(2, 1, 3, "2018-01-01T01:00:00")];
        let table = build_interaction_table(&posts);
        assert!(table.records.is_empty());
        assert_eq!(table.summary.non_mutual_answers, 1);
    }

    #[test]
    fn acceptance_dangling_self_and_negative_latency() {
        let mut q1 = question(1, 1, "2018-01-01T00:00:00");
        q1.accepted_answer_id = Some(2);
        let posts = vec![
            q1,
            answer(2, 1, 2, "2018-01-01T01:00:00"),
            answer(5, 1, 2, "2018-01-01T03:00:00"),
            answer(6, 1, 1, "2018-01-01T03:00:00"),
            answer(7, 99, 2, "2018-01-01T03:00:00"),
            question(3, 2, "2018-01-02T00:00:00"),
            answer(4, 3, 1, "2018-01-02T02:00:00"),
            answer(8, 3, 1, "2018-01-01T23:00:00"),
        ];
        let table = build_interaction_table(&posts);
        let ids: Vec<_> = table.records.iter().map(|r| (r.answer_id, r.is_accepted)).collect();
        assert_eq!(ids, vec![(2, true), (4, false), (5, false)]);
        assert_eq!(table.summary.self_answers, 1);
        assert_eq!(table.summary.dangling_answers, 1);
        assert_eq!(table.summary.negative_latency, 1);
    }

    #[test]
    fn snapshots_load_and_reject_duplicates() {
        let csv = "user_id,dump_label,dump_date,reputation,last_access_date\n\
                   9,n,2018-09-01,100,2018-08-30T10:00:00\n\
                   9,m,2018-12-01,150,2018-11-30T10:00:00\n";
        let set = load_snapshots(csv.as_bytes()).unwrap();
        assert_eq!(set.score(9, "n"), Some(100));
        assert_eq!(set.score(9, "m"), Some(150));
        assert_eq!(set.dumps().len(), 2);
        assert_eq!(set.last_access(9, "m"), Some(ts("2018-11-30T10:00:00")));

        let dup = format!("{csv}9,n,2018-09-01,120,\n");
        match load_snapshots(dup.as_bytes()) {
            Err(SnapshotError::Duplicate { user, label }) => assert_eq!((user, label.as_str()), (9, "n")),
            other => panic!("expected duplicate error, got {other:?}"),
        }
    }

    #[test]
    fn header_only_is_empty_set() {
        let set = load_snapshots("user_id,dump_label,dump_date,reputation,last_access_date\n".as_bytes()).unwrap();
        assert_eq!(set.user_count(), 0);
        assert!(set.dumps().is_empty());
    }

    #[test]
    fn snapshot_validation_errors() {
        let head = "user_id,dump_label,dump_date,reputation,last_access_date\n";
        let same_date = format!("{head}1,m,2018-12-01,5,\n1,n,2018-12-01,5,\n");
        assert!(matches!(load_snapshots(same_date.as_bytes()), Err(SnapshotError::NonMonotone { .. })));
        let unordered = format!("{head}1,m,2018-12-01,5,\n1,n,2018-09-01,5,\n");
        let set = load_snapshots(unordered.as_bytes()).unwrap();
        assert_eq!(set.dumps()[0].label, "n");
        let conflicting = format!("{head}1,m,2018-12-01,5,\n2,m,2018-12-02,5,\n");
        assert!(matches!(load_snapshots(conflicting.as_bytes()), Err(SnapshotError::ConflictingDate { .. })));
        let floor = format!("{head}1,m,2018-12-01,0,\n");
        assert!(matches!(load_snapshots(floor.as_bytes()), Err(SnapshotError::BelowFloor { .. })));
        let bad = format!("{head}1,m,2018-12-01,abc,\n");
        match load_snapshots(bad.as_bytes()) {
            Err(SnapshotError::Row { row, .. }) => assert_eq!(row, 2),
            other => panic!("expected row error, got {other:?}"),
        }
        assert!(matches!(load_snapshots("a,b\n".as_bytes()), Err(SnapshotError::Header { .. })));
    }

    #[test]
    fn snapshot_csv_round_trip() {
        let csv = "user_id,dump_label,dump_date,reputation,last_access_date\n\
                   3,n,2018-09-01T00:00:00Z,10,\n\
                   3,m,2018-12-01T00:00:00Z,40,2018-11-30T10:00:00Z\n";
        let set = load_snapshots(csv.as_bytes()).unwrap();
        let mut out = Vec::new();
        set.write_csv(&mut out).unwrap();
        assert_eq!(load_snapshots(out.as_slice()).unwrap(), set);
    }
}
