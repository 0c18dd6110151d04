//! Composite reward over pluggable stance, argument-quality, and toxicity
//! scorers.
//!
//! Every scorer variant implements [`Scorer`] and is registered by name in
//! a [`ScorerRegistry`]; config/CLI select backends at runtime. Built-in
//! backends:
//!
//! * `"reference"` — deterministic rule scorers, fully specified below, so
//!   PPO tests are reproducible;
//! * `"remote"` — HTTP JSON client for plugging in real classifiers;
//! * `"constant"` — fixed score, for wiring tests and ablations.
//!
//! The total reward is the unweighted mean of the three normalized terms:
//! `((1 - pc)/2 + aq + (1 - tox)) / 3`, each term in [0, 1].

use std::collections::{BTreeMap, BTreeSet};
use std::path::PathBuf;
use std::time::Duration;

use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum RewardError {
    #[error("toxicity lexicon file {path}: {source}")]
    LexiconIo {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("word list file {path}: {source}")]
    WordListIo {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("unknown scorer backend {0:?}")]
    UnknownBackend(String),
    #[error("backend {backend:?} for {kind} needs {what}")]
    MissingConfig {
        backend: String,
        kind: ScorerKind,
        what: &'static str,
    },
    #[error("scorer set needs exactly one scorer per kind; {0} is missing or duplicated")]
    MissingKind(ScorerKind),
    #[error("{kind} scorer returned {score}, outside [{lo}, {hi}]")]
    OutOfRange {
        kind: ScorerKind,
        score: f64,
        lo: f64,
        hi: f64,
    },
    #[error("{kind} remote scorer failed after {attempts} attempts: {detail}")]
    Remote {
        kind: ScorerKind,
        attempts: u32,
        detail: String,
    },
    #[error("remote scorer response: {0}")]
    BadResponse(String),
}

/// The three reward dimensions.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ScorerKind {
    Stance,
    Quality,
    Toxicity,
}

impl ScorerKind {
    pub const ALL: [ScorerKind; 3] = [ScorerKind::Stance, ScorerKind::Quality, ScorerKind::Toxicity];

    pub fn name(self) -> &'static str {
        match self {
            ScorerKind::Stance => "stance",
            ScorerKind::Quality => "quality",
            ScorerKind::Toxicity => "toxicity",
        }
    }

    /// Documented score range.
    pub fn range(self) -> (f64, f64) {
        match self {
            ScorerKind::Stance => (-1.0, 1.0),
            ScorerKind::Quality => (0.0, 1.0),
            ScorerKind::Toxicity => (0.0, 1.0),
        }
    }
}

impl std::fmt::Display for ScorerKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

/// One reward dimension scorer. Implementations must tolerate concurrent
/// calls; the reference scorers are pure functions.
pub trait Scorer: Send + Sync {
    fn kind(&self) -> ScorerKind;
    /// Score `text` (the generated counterspeech) against `topic` (the
    /// instruction-formatted hate speech, or the raw hate speech when
    /// `score_on_raw_hs` is set).
    fn score(&self, topic: &str, text: &str) -> Result<f64, RewardError>;
}

// ---------------------------------------------------------------------------
// Tokenization shared by the reference scorers
// ---------------------------------------------------------------------------

/// Lowercase whitespace tokens with surrounding punctuation stripped.
fn scorer_tokens(text: &str) -> Vec<String> {
    text.to_lowercase()
        .split_whitespace()
        .map(|t| t.trim_matches(|c: char| !c.is_alphanumeric() && c != '\'').to_string())
        .filter(|t| !t.is_empty())
        .collect()
}

/// Exactly 50 function words; content tokens are everything else.
const STOP_WORDS: [&str; 50] = [
    "the", "a", "an", "and", "or", "but", "if", "then", "else", "when", "while", "of", "to", "in",
    "on", "at", "by", "for", "with", "from", "as", "is", "are", "was", "were", "be", "been",
    "being", "it", "its", "this", "that", "these", "those", "he", "she", "they", "them", "his",
    "her", "their", "we", "us", "our", "you", "your", "i", "me", "my", "do",
];

const NEGATION_CUES: [&str; 9] = [
    "not", "never", "no", "wrong", "false", "isnt", "arent", "dont", "shouldnt",
];

fn load_word_list(path: &PathBuf) -> Result<BTreeSet<String>, RewardError> {
    let text = std::fs::read_to_string(path).map_err(|e| RewardError::WordListIo {
        path: path.display().to_string(),
        source: e,
    })?;
    Ok(text
        .lines()
        .map(|l| l.trim().to_lowercase())
        .filter(|l| !l.is_empty())
        .collect())
}

// ---------------------------------------------------------------------------
// Reference scorers
// ---------------------------------------------------------------------------

/// Stance from content-token overlap: `score = (1 - 2*neg) * o` where `o`
/// is the fraction of the topic's content tokens present in the text and
/// `neg` flags any negation cue in the text. Empty topic content gives 0.
pub struct OverlapStance {
    stop_words: BTreeSet<String>,
    negation_cues: BTreeSet<String>,
}

impl OverlapStance {
    pub fn new() -> Self {
        OverlapStance {
            stop_words: STOP_WORDS.iter().map(|s| s.to_string()).collect(),
            negation_cues: NEGATION_CUES.iter().map(|s| s.to_string()).collect(),
        }
    }

    pub fn with_lists(
        stop_list: Option<&PathBuf>,
        negation_list: Option<&PathBuf>,
    ) -> Result<Self, RewardError> {
        let mut s = Self::new();
        if let Some(p) = stop_list {
            s.stop_words = load_word_list(p)?;
        }
        if let Some(p) = negation_list {
            s.negation_cues = load_word_list(p)?;
        }
        Ok(s)
    }

    fn content_tokens(&self, text: &str) -> BTreeSet<String> {
        scorer_tokens(text)
            .into_iter()
            .filter(|t| !self.stop_words.contains(t))
            .collect()
    }
}

impl Default for OverlapStance {
    fn default() -> Self {
        Self::new()
    }
}

impl Scorer for OverlapStance {
    fn kind(&self) -> ScorerKind {
        ScorerKind::Stance
    }

    fn score(&self, topic: &str, text: &str) -> Result<f64, RewardError> {
        let topic_content = self.content_tokens(topic);
        if topic_content.is_empty() {
            return Ok(0.0);
        }
        let text_tokens = scorer_tokens(text);
        let text_content: BTreeSet<&String> = text_tokens.iter().collect();
        let overlap = topic_content
            .iter()
            .filter(|t| text_content.contains(t))
            .count();
        let o = overlap as f64 / topic_content.len() as f64;
        // Apostrophes are dropped before the cue check so "isn't" hits "isnt".
        let neg = text_tokens
            .iter()
            .any(|t| self.negation_cues.contains(&t.replace('\'', "")));
        Ok(if neg { -o } else { o })
    }
}

/// Quality from length and lexical diversity:
/// `min(1, n/40) * (distinct/n)`, 0 for empty text. The 40-token target
/// tracks the dataset's mean counterspeech length.
pub struct LengthDiversityQuality;

impl Scorer for LengthDiversityQuality {
    fn kind(&self) -> ScorerKind {
        ScorerKind::Quality
    }

    fn score(&self, _topic: &str, text: &str) -> Result<f64, RewardError> {
        let tokens = scorer_tokens(text);
        let n = tokens.len();
        if n == 0 {
            return Ok(0.0);
        }
        let distinct = tokens.iter().collect::<BTreeSet<_>>().len();
        Ok((n as f64 / 40.0).min(1.0) * (distinct as f64 / n as f64))
    }
}

/// Toxicity as lexicon hit rate: hits / tokens, clamped to [0, 1].
pub struct LexiconToxicity {
    lexicon: BTreeSet<String>,
}

impl LexiconToxicity {
    /// The lexicon file is required: one lowercase term per line.
    pub fn from_file(path: &PathBuf) -> Result<Self, RewardError> {
        let text = std::fs::read_to_string(path).map_err(|e| RewardError::LexiconIo {
            path: path.display().to_string(),
            source: e,
        })?;
        Ok(LexiconToxicity {
            lexicon: text
                .lines()
                .map(|l| l.trim().to_lowercase())
                .filter(|l| !l.is_empty())
                .collect(),
        })
    }
}

impl Scorer for LexiconToxicity {
    fn kind(&self) -> ScorerKind {
        ScorerKind::Toxicity
    }

    fn score(&self, _topic: &str, text: &str) -> Result<f64, RewardError> {
        let tokens = scorer_tokens(text);
        if tokens.is_empty() {
            return Ok(0.0);
        }
        let hits = tokens.iter().filter(|t| self.lexicon.contains(*t)).count();
        Ok((hits as f64 / tokens.len() as f64).clamp(0.0, 1.0))
    }
}

/// Fixed-score backend for wiring tests and reward ablations.
pub struct ConstantScorer {
    kind: ScorerKind,
    value: f64,
}

impl Scorer for ConstantScorer {
    fn kind(&self) -> ScorerKind {
        self.kind
    }

    fn score(&self, _topic: &str, _text: &str) -> Result<f64, RewardError> {
        Ok(self.value)
    }
}

// ---------------------------------------------------------------------------
// Remote scorer
// ---------------------------------------------------------------------------

/// HTTP JSON scorer: POST `{"topic", "text", "kind"}`, expect
/// `{"score": f}`. Out-of-range scores are rejected, never clamped; errors
/// and timeouts are retried with exponential backoff and then surfaced as
/// structured errors. No fake score is ever substituted.
pub struct RemoteScorer {
    kind: ScorerKind,
    endpoint: String,
    timeout: Duration,
    retries: u32,
    backoff: Duration,
}

impl RemoteScorer {
    pub fn new(kind: ScorerKind, endpoint: String, timeout: Duration, retries: u32, backoff: Duration) -> Self {
        RemoteScorer {
            kind,
            endpoint,
            timeout,
            retries,
            backoff,
        }
    }

    fn request_once(&self, topic: &str, text: &str) -> Result<f64, String> {
        let agent: ureq::Agent = ureq::Agent::config_builder()
            .timeout_global(Some(self.timeout))
            .build()
            .into();
        let payload = serde_json::json!({
            "topic": topic,
            "text": text,
            "kind": self.kind.name(),
        });
        let mut resp = agent
            .post(&self.endpoint)
            .send_json(&payload)
            .map_err(|e| e.to_string())?;
        let body: serde_json::Value = resp.body_mut().read_json().map_err(|e| e.to_string())?;
        body.get("score")
            .and_then(|v| v.as_f64())
            .ok_or_else(|| format!("response missing numeric \"score\": {body}"))
    }
}

impl Scorer for RemoteScorer {
    fn kind(&self) -> ScorerKind {
        self.kind
    }

    fn score(&self, topic: &str, text: &str) -> Result<f64, RewardError> {
        let attempts = self.retries + 1;
        let mut last_err = String::new();
        for attempt in 0..attempts {
            if attempt > 0 {
                std::thread::sleep(self.backoff * 2u32.pow(attempt - 1));
            }
            match self.request_once(topic, text) {
                Ok(score) => {
                    let (lo, hi) = self.kind.range();
                    if !(lo..=hi).contains(&score) {
                        return Err(RewardError::OutOfRange {
                            kind: self.kind,
                            score,
                            lo,
                            hi,
                        });
                    }
                    return Ok(score);
                }
                Err(e) => last_err = e,
            }
        }
        Err(RewardError::Remote {
            kind: self.kind,
            attempts,
            detail: last_err,
        })
    }
}

// ---------------------------------------------------------------------------
// Registry and configuration
// ---------------------------------------------------------------------------

/// Per-kind backend selection plus backend parameters.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ScorerChoice {
    pub backend: String,
    pub endpoint: Option<String>,
    pub constant: Option<f64>,
    pub lexicon_path: Option<PathBuf>,
    pub stop_list_path: Option<PathBuf>,
    pub negation_list_path: Option<PathBuf>,
    pub timeout_secs: f64,
    pub retries: u32,
    pub backoff_secs: f64,
}

impl Default for ScorerChoice {
    fn default() -> Self {
        ScorerChoice {
            backend: "reference".to_string(),
            endpoint: None,
            constant: None,
            lexicon_path: None,
            stop_list_path: None,
            negation_list_path: None,
            timeout_secs: 10.0,
            retries: 2,
            backoff_secs: 0.5,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
#[serde(default, deny_unknown_fields)]
pub struct RewardConfig {
    pub stance: ScorerChoice,
    pub quality: ScorerChoice,
    pub toxicity: ScorerChoice,
    /// When set, scorers receive the raw hate speech as topic instead of
    /// the instruction-formatted prompt.
    pub score_on_raw_hs: bool,
}

impl RewardConfig {
    pub fn choice(&self, kind: ScorerKind) -> &ScorerChoice {
        match kind {
            ScorerKind::Stance => &self.stance,
            ScorerKind::Quality => &self.quality,
            ScorerKind::Toxicity => &self.toxicity,
        }
    }
}

pub type ScorerFactory = fn(ScorerKind, &ScorerChoice) -> Result<Box<dyn Scorer>, RewardError>;

/// Named scorer backends. `builtin()` registers "reference", "remote" and
/// "constant"; callers may add their own.
pub struct ScorerRegistry {
    factories: BTreeMap<String, ScorerFactory>,
}

fn build_reference(kind: ScorerKind, choice: &ScorerChoice) -> Result<Box<dyn Scorer>, RewardError> {
    match kind {
        ScorerKind::Stance => Ok(Box::new(OverlapStance::with_lists(
            choice.stop_list_path.as_ref(),
            choice.negation_list_path.as_ref(),
        )?)),
        ScorerKind::Quality => Ok(Box::new(LengthDiversityQuality)),
        ScorerKind::Toxicity => {
            let path = choice.lexicon_path.as_ref().ok_or(RewardError::MissingConfig {
                backend: "reference".to_string(),
                kind,
                what: "lexicon_path",
            })?;
            Ok(Box::new(LexiconToxicity::from_file(path)?))
        }
    }
}

fn build_remote(kind: ScorerKind, choice: &ScorerChoice) -> Result<Box<dyn Scorer>, RewardError> {
    let endpoint = choice.endpoint.clone().ok_or(RewardError::MissingConfig {
        backend: "remote".to_string(),
        kind,
        what: "endpoint",
    })?;
    Ok(Box::new(RemoteScorer::new(
        kind,
        endpoint,
        Duration::from_secs_f64(choice.timeout_secs),
        choice.retries,
        Duration::from_secs_f64(choice.backoff_secs),
    )))
}

fn build_constant(kind: ScorerKind, choice: &ScorerChoice) -> Result<Box<dyn Scorer>, RewardError> {
    let value = choice.constant.ok_or(RewardError::MissingConfig {
        backend: "constant".to_string(),
        kind,
        what: "constant",
    })?;
    Ok(Box::new(ConstantScorer { kind, value }))
}

impl ScorerRegistry {
    pub fn builtin() -> Self {
        let mut r = ScorerRegistry {
            factories: BTreeMap::new(),
        };
        r.register("reference", build_reference);
        r.register("remote", build_remote);
        r.register("constant", build_constant);
        r
    }

    pub fn register(&mut self, name: &str, factory: ScorerFactory) {
        self.factories.insert(name.to_string(), factory);
    }

    pub fn names(&self) -> Vec<&str> {
        self.factories.keys().map(String::as_str).collect()
    }

    pub fn build(
        &self,
        kind: ScorerKind,
        choice: &ScorerChoice,
    ) -> Result<Box<dyn Scorer>, RewardError> {
        let factory = self
            .factories
            .get(&choice.backend)
            .ok_or_else(|| RewardError::UnknownBackend(choice.backend.clone()))?;
        factory(kind, choice)
    }
}

/// One scorer per reward dimension.
pub struct ScorerSet {
    pub stance: Box<dyn Scorer>,
    pub quality: Box<dyn Scorer>,
    pub toxicity: Box<dyn Scorer>,
}

impl ScorerSet {
    pub fn from_config(registry: &ScorerRegistry, cfg: &RewardConfig) -> Result<Self, RewardError> {
        Ok(ScorerSet {
            stance: registry.build(ScorerKind::Stance, &cfg.stance)?,
            quality: registry.build(ScorerKind::Quality, &cfg.quality)?,
            toxicity: registry.build(ScorerKind::Toxicity, &cfg.toxicity)?,
        })
    }

    /// Assemble from a flat list, requiring exactly one scorer per kind.
    pub fn from_scorers(scorers: Vec<Box<dyn Scorer>>) -> Result<Self, RewardError> {
        let mut stance = None;
        let mut quality = None;
        let mut toxicity = None;
        for s in scorers {
            let slot = match s.kind() {
                ScorerKind::Stance => &mut stance,
                ScorerKind::Quality => &mut quality,
                ScorerKind::Toxicity => &mut toxicity,
            };
            if slot.replace(s).is_some() {
                return Err(RewardError::MissingKind(ScorerKind::Stance));
            }
        }
        Ok(ScorerSet {
            stance: stance.ok_or(RewardError::MissingKind(ScorerKind::Stance))?,
            quality: quality.ok_or(RewardError::MissingKind(ScorerKind::Quality))?,
            toxicity: toxicity.ok_or(RewardError::MissingKind(ScorerKind::Toxicity))?,
        })
    }
}

// ---------------------------------------------------------------------------
// Composite reward
// ---------------------------------------------------------------------------

/// Raw and normalized reward components plus the total.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RewardBreakdown {
    pub pc_raw: f64,
    pub aq_raw: f64,
    pub tox_raw: f64,
    pub pc_norm: f64,
    pub aq_term: f64,
    pub tox_term: f64,
    pub total: f64,
}

impl RewardBreakdown {
    /// Normalize raw components and take their mean. Raw values are
    /// clamped into their documented ranges first (logged when it bites).
    pub fn from_raw(pc_raw: f64, aq_raw: f64, tox_raw: f64) -> Self {
        let clamp = |v: f64, kind: ScorerKind| {
            let (lo, hi) = kind.range();
            let c = v.clamp(lo, hi);
            if c != v {
                log::warn!("{kind} score {v} clamped to {c}");
            }
            c
        };
        let pc = clamp(pc_raw, ScorerKind::Stance);
        let aq = clamp(aq_raw, ScorerKind::Quality);
        let tox = clamp(tox_raw, ScorerKind::Toxicity);
        let pc_norm = (1.0 - pc) / 2.0;
        let aq_term = aq;
        let tox_term = 1.0 - tox;
        RewardBreakdown {
            pc_raw: pc,
            aq_raw: aq,
            tox_raw: tox,
            pc_norm,
            aq_term,
            tox_term,
            total: (pc_norm + aq_term + tox_term) / 3.0,
        }
    }
}

/// Score one (prompt, response) pair through all three scorers. A scorer
/// failure is surfaced as an error, never replaced by a default reward.
pub fn composite_reward(
    topic: &str,
    text: &str,
    scorers: &ScorerSet,
) -> Result<RewardBreakdown, RewardError> {
    let pc = scorers.stance.score(topic, text)?;
    let aq = scorers.quality.score(topic, text)?;
    let tox = scorers.toxicity.score(topic, text)?;
    Ok(RewardBreakdown::from_raw(pc, aq, tox))
}
