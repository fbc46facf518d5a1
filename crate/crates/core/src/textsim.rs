//! Post-body preprocessing and TF-IDF cosine similarity.

use std::collections::HashMap;
use std::io::Write;
use std::sync::atomic::{AtomicU64, Ordering};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::corpus::{InteractionRecord, PostId};

#[derive(Debug, Error, PartialEq)]
pub enum TextError {
    #[error("cannot fit TF-IDF on an empty corpus")]
    EmptyCorpus,
    #[error("vectors come from different corpora ({0} vs {1})")]
    CorpusMismatch(u64, u64),
}

/// Which part of a post is compared.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SimilarityMode {
    /// Prose and code together.
    #[default]
    Body,
    /// Code blocks only.
    Code,
}

impl std::str::FromStr for SimilarityMode {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "body" => Ok(SimilarityMode::Body),
            "code" => Ok(SimilarityMode::Code),
            other => Err(format!("unknown similarity mode `{other}` (expected body or code)")),
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct DocumentParts {
    pub text: Vec<String>,
    pub code: Vec<String>,
    pub links: Vec<String>,
}

impl DocumentParts {
    pub fn tokens(&self, mode: SimilarityMode) -> Vec<String> {
        match mode {
            SimilarityMode::Body => self.text.iter().chain(&self.code).cloned().collect(),
            SimilarityMode::Code => self.code.clone(),
        }
    }

    /// Prose tokens joined back into plain text.
    pub fn render_text(&self) -> String {
        self.text.join(" ")
    }
}

/// Lowercases and splits on anything that is not alphanumeric.
pub fn tokenize(s: &str) -> Vec<String> {
    s.split(|c: char| !c.is_alphanumeric()).filter(|t| !t.is_empty()).map(str::to_lowercase).collect()
}

/// Splits raw post markup into prose, code and link targets.
///
/// `<code>` and `<pre>` contents go to `code`, `href` targets of anchors to
/// `links`, everything else outside tags to `text`. Unterminated tags are
/// read as text.
pub fn preprocess(body: &str) -> DocumentParts {
    let mut text = String::new();
    let mut code = String::new();
    let mut links = Vec::new();
    let mut code_depth = 0usize;
    let mut rest = body;
    while !rest.is_empty() {
        let Some(lt) = rest.find('<') else {
            push_text(rest, code_depth, &mut text, &mut code);
            break;
        };
        push_text(&rest[..lt], code_depth, &mut text, &mut code);
        let after = &rest[lt + 1..];
        let Some(gt) = after.find('>') else {
            push_text(&rest[lt..], code_depth, &mut text, &mut code);
            break;
        };
        let tag = &after[..gt];
        rest = &after[gt + 1..];

        let closing = tag.starts_with('/');
        let inner = tag.trim_start_matches('/');
        let name: String =
            inner.chars().take_while(|c| c.is_ascii_alphanumeric()).collect::<String>().to_ascii_lowercase();
        let self_closing = tag.trim_end().ends_with('/');
        match name.as_str() {
            "code" | "pre" if closing => code_depth = code_depth.saturating_sub(1),
            "code" | "pre" if !self_closing => code_depth += 1,
            "a" if !closing => {
                if let Some(href) = attribute(inner, "href") {
                    links.push(decode_entities(&href));
                }
            }
            _ => {}
        }
        // Tags separate words.
        if code_depth > 0 {
            code.push(' ');
        } else {
            text.push(' ');
        }
    }
    DocumentParts { text: tokenize(&text), code: tokenize(&code), links }
}

fn push_text(raw: &str, code_depth: usize, text: &mut String, code: &mut String) {
    let decoded = decode_entities(raw);
    if code_depth > 0 {
        code.push_str(&decoded);
    } else {
        text.push_str(&decoded);
    }
}

fn attribute(tag: &str, name: &str) -> Option<String> {
    let lower = tag.to_ascii_lowercase();
    let mut from = 0;
    while let Some(pos) = lower[from..].find(name) {
        let start = from + pos;
        from = start + name.len();
        let boundary = start == 0 || !lower.as_bytes()[start - 1].is_ascii_alphanumeric();
        let after = lower[from..].trim_start();
        if !boundary || !after.starts_with('=') {
            continue;
        }
        let value_start = tag.len() - after.len() + 1;
        let value = tag[value_start..].trim_start();
        return Some(match value.chars().next() {
            Some(q @ ('"' | '\'')) => value[1..].split(q).next().unwrap_or("").to_string(),
            _ => value.split(|c: char| c.is_whitespace() || c == '/').next().unwrap_or("").to_string(),
        });
    }
    None
}

fn decode_entities(s: &str) -> String {
    if !s.contains('&') {
        return s.to_string();
    }
    let mut out = String::with_capacity(s.len());
    let mut rest = s;
    while let Some(amp) = rest.find('&') {
        out.push_str(&rest[..amp]);
        rest = &rest[amp..];
        let decoded = rest[1..].find(';').filter(|&semi| semi <= 10).and_then(|semi| {
            let entity = &rest[1..1 + semi];
            let ch = match entity {
                "lt" => Some('<'),
                "gt" => Some('>'),
                "amp" => Some('&'),
                "quot" => Some('"'),
                "apos" => Some('\''),
                "nbsp" => Some(' '),
                e if e.starts_with("#x") || e.starts_with("#X") => {
                    u32::from_str_radix(&e[2..], 16).ok().and_then(char::from_u32)
                }
                e if e.starts_with('#') => e[1..].parse().ok().and_then(char::from_u32),
                _ => None,
            };
            ch.map(|c| (c, semi + 2))
        });
        match decoded {
            Some((c, len)) => {
                out.push(c);
                rest = &rest[len..];
            }
            None => {
                out.push('&');
                rest = &rest[1..];
            }
        }
    }
    out.push_str(rest);
    out
}

static NEXT_CORPUS_ID: AtomicU64 = AtomicU64::new(1);

/// A fresh id for a fitted corpus; vectors only compare within one id.
pub fn new_corpus_id() -> u64 {
    NEXT_CORPUS_ID.fetch_add(1, Ordering::Relaxed)
}

/// Sparse TF-IDF weights, sorted by term index.
#[derive(Debug, Clone, PartialEq)]
pub struct TfidfVector {
    corpus_id: u64,
    weights: Vec<(u32, f64)>,
}

impl TfidfVector {
    /// Builds a vector from raw `(term, weight)` pairs. Weights must be finite
    /// and non-negative; zero weights are dropped and duplicates summed.
    pub fn from_weights(corpus_id: u64, weights: impl IntoIterator<Item = (u32, f64)>) -> Self {
        let mut w: Vec<(u32, f64)> = weights.into_iter().filter(|&(_, x)| x != 0.0).collect();
        assert!(w.iter().all(|&(_, x)| x.is_finite() && x >= 0.0), "TF-IDF weights must be finite and non-negative");
        w.sort_by_key(|&(t, _)| t);
        let mut merged: Vec<(u32, f64)> = Vec::with_capacity(w.len());
        for (t, x) in w {
            match merged.last_mut() {
                Some(last) if last.0 == t => last.1 += x,
                _ => merged.push((t, x)),
            }
        }
        TfidfVector { corpus_id, weights: merged }
    }

    pub fn corpus_id(&self) -> u64 {
        self.corpus_id
    }

    pub fn weights(&self) -> &[(u32, f64)] {
        &self.weights
    }

    pub fn is_zero(&self) -> bool {
        self.weights.is_empty()
    }

    pub fn scaled(&self, factor: f64) -> TfidfVector {
        TfidfVector::from_weights(self.corpus_id, self.weights.iter().map(|&(t, w)| (t, w * factor)))
    }

    fn norm(&self) -> f64 {
        self.weights.iter().map(|(_, w)| w * w).sum::<f64>().sqrt()
    }
}

/// Cosine of the angle between two vectors of one corpus; 0 when either is zero.
pub fn cosine(a: &TfidfVector, b: &TfidfVector) -> Result<f64, TextError> {
    if a.corpus_id != b.corpus_id {
        return Err(TextError::CorpusMismatch(a.corpus_id, b.corpus_id));
    }
    if a.is_zero() || b.is_zero() {
        return Ok(0.0);
    }
    let (mut i, mut j) = (0, 0);
    let mut dot = 0.0;
    while i < a.weights.len() && j < b.weights.len() {
        let (ta, wa) = a.weights[i];
        let (tb, wb) = b.weights[j];
        match ta.cmp(&tb) {
            std::cmp::Ordering::Less => i += 1,
            std::cmp::Ordering::Greater => j += 1,
            std::cmp::Ordering::Equal => {
                dot += wa * wb;
                i += 1;
                j += 1;
            }
        }
    }
    Ok((dot / (a.norm() * b.norm())).clamp(0.0, 1.0))
}

/// TF-IDF fitted over one document collection.
#[derive(Debug, Clone)]
pub struct TfidfCorpus {
    id: u64,
    vocabulary: Vec<String>,
    idf: Vec<f64>,
    vectors: Vec<TfidfVector>,
}

impl TfidfCorpus {
    pub fn id(&self) -> u64 {
        self.id
    }

    pub fn vectors(&self) -> &[TfidfVector] {
        &self.vectors
    }

    pub fn vocabulary(&self) -> &[String] {
        &self.vocabulary
    }

    pub fn idf(&self, term: &str) -> Option<f64> {
        self.vocabulary.binary_search_by(|t| t.as_str().cmp(term)).ok().map(|i| self.idf[i])
    }

    /// Term → weight map of one document.
    pub fn term_weights(&self, doc: usize) -> Vec<(&str, f64)> {
        self.vectors[doc].weights.iter().map(|&(t, w)| (self.vocabulary[t as usize].as_str(), w)).collect()
    }

    /// One `{"doc": i, "weights": {term: w}}` object per line.
    pub fn write_debug_jsonl<W: Write>(&self, mut out: W) -> std::io::Result<()> {
        for doc in 0..self.vectors.len() {
            let weights: serde_json::Map<String, serde_json::Value> =
                self.term_weights(doc).into_iter().map(|(t, w)| (t.to_string(), w.into())).collect();
            serde_json::to_writer(&mut out, &serde_json::json!({ "doc": doc, "weights": weights }))?;
            out.write_all(b"\n")?;
        }
        Ok(())
    }
}

/// Raw term counts times smoothed idf `ln((1+N)/(1+df)) + 1`.
pub fn fit_tfidf(documents: &[Vec<String>]) -> Result<TfidfCorpus, TextError> {
    if documents.is_empty() {
        return Err(TextError::EmptyCorpus);
    }
    let mut df: HashMap<&str, usize> = HashMap::new();
    for doc in documents {
        let mut terms: Vec<&str> = doc.iter().map(String::as_str).collect();
        terms.sort_unstable();
        terms.dedup();
        for t in terms {
            *df.entry(t).or_insert(0) += 1;
        }
    }
    let mut vocabulary: Vec<&str> = df.keys().copied().collect();
    vocabulary.sort_unstable();
    let index: HashMap<&str, u32> = vocabulary.iter().enumerate().map(|(i, &t)| (t, i as u32)).collect();
    let n = documents.len() as f64;
    let idf: Vec<f64> = vocabulary.iter().map(|t| ((1.0 + n) / (1.0 + df[t] as f64)).ln() + 1.0).collect();

    let id = new_corpus_id();
    let vectors = documents
        .iter()
        .map(|doc| {
            let mut tf: HashMap<u32, f64> = HashMap::new();
            for t in doc {
                *tf.entry(index[t.as_str()]).or_insert(0.0) += 1.0;
            }
            TfidfVector::from_weights(id, tf.into_iter().map(|(t, c)| (t, c * idf[t as usize])))
        })
        .collect();
    Ok(TfidfCorpus { id, vocabulary: vocabulary.into_iter().map(String::from).collect(), idf, vectors })
}

/// Pairwise question and answer similarity for the community detector.
pub trait SimilaritySource {
    fn mode(&self) -> SimilarityMode;
    /// `None` when either post is unknown to the source.
    fn question_similarity(&self, a: PostId, b: PostId) -> Option<f64>;
    fn answer_similarity(&self, a: PostId, b: PostId) -> Option<f64>;
}

struct FittedPosts {
    position: HashMap<PostId, usize>,
    corpus: Option<TfidfCorpus>,
}

impl FittedPosts {
    fn fit(docs: Vec<(PostId, &str)>, mode: SimilarityMode) -> Self {
        let position = docs.iter().enumerate().map(|(i, (id, _))| (*id, i)).collect();
        let tokens: Vec<Vec<String>> = docs.iter().map(|(_, body)| preprocess(body).tokens(mode)).collect();
        FittedPosts { position, corpus: fit_tfidf(&tokens).ok() }
    }

    fn similarity(&self, a: PostId, b: PostId) -> Option<f64> {
        let corpus = self.corpus.as_ref()?;
        let va = &corpus.vectors[*self.position.get(&a)?];
        let vb = &corpus.vectors[*self.position.get(&b)?];
        cosine(va, vb).ok()
    }
}

/// TF-IDF fitted separately over all question bodies and all answer bodies
/// of an interaction table.
pub struct SimilarityIndex {
    mode: SimilarityMode,
    questions: FittedPosts,
    answers: FittedPosts,
}

impl SimilarityIndex {
    pub fn build(records: &[InteractionRecord], mode: SimilarityMode) -> Self {
        let mut questions: Vec<(PostId, &str)> =
            records.iter().map(|r| (r.question_id, r.question_body.as_str())).collect();
        questions.sort_by_key(|(id, _)| *id);
        questions.dedup_by_key(|(id, _)| *id);
        let mut answers: Vec<(PostId, &str)> = records.iter().map(|r| (r.answer_id, r.answer_body.as_str())).collect();
        answers.sort_by_key(|(id, _)| *id);
        answers.dedup_by_key(|(id, _)| *id);
        SimilarityIndex {
            mode,
            questions: FittedPosts::fit(questions, mode),
            answers: FittedPosts::fit(answers, mode),
        }
    }

    pub fn question_corpus(&self) -> Option<&TfidfCorpus> {
        self.questions.corpus.as_ref()
    }

    pub fn answer_corpus(&self) -> Option<&TfidfCorpus> {
        self.answers.corpus.as_ref()
    }
}

impl SimilaritySource for SimilarityIndex {
    fn mode(&self) -> SimilarityMode {
        self.mode
    }

    fn question_similarity(&self, a: PostId, b: PostId) -> Option<f64> {
        self.questions.similarity(a, b)
    }

    fn answer_similarity(&self, a: PostId, b: PostId) -> Option<f64> {
        self.answers.similarity(a, b)
    }
}
