//! Dataset schemas, byte-level tokenizer, instruction templates, the
//! multi-task mixture, and BM25 few-shot prompt construction.

use std::collections::BTreeMap;
use std::fmt;
use std::path::Path;
use std::str::FromStr;

use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::rng;

/// Padding token id.
pub const PAD: u32 = 256;
/// Beginning-of-sequence token id.
pub const BOS: u32 = 257;
/// End-of-sequence token id.
pub const EOS: u32 = 258;
/// Byte vocabulary (0-255) plus the three specials.
pub const VOCAB_SIZE: usize = 259;

#[derive(Debug, Error)]
pub enum DataError {
    #[error("io error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("mixture is missing dimension {0}")]
    MissingDimension(Dimension),
    #[error("template {0} requires an intent")]
    MissingIntent(TaskId),
    #[error("template {0} does not take an intent")]
    UnexpectedIntent(TaskId),
    #[error("BM25 corpus is empty")]
    EmptyCorpus,
    #[error("asked for {wanted} exemplars, corpus has {have}")]
    NotEnoughDocs { wanted: usize, have: usize },
    #[error("unknown task id {0:?} (expected I1..I8)")]
    UnknownTaskId(String),
    #[error("template file {path}: {detail}")]
    BadTemplateFile { path: String, detail: String },
    #[error("unknown intent {0:?} (expected INF, POS, QUE or DEN)")]
    UnknownIntent(String),
}

// ---------------------------------------------------------------------------
// Tokenizer
// ---------------------------------------------------------------------------

/// Byte-level tokenization result.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Tokenized {
    pub ids: Vec<u32>,
    /// True when the input exceeded `max_len` and was cut.
    pub truncated: bool,
}

/// Byte-level tokenizer: id = byte value. Total function; over-length
/// inputs are truncated with the flag set.
pub fn tokenize(text: &str, max_len: usize) -> Tokenized {
    let bytes = text.as_bytes();
    let truncated = bytes.len() > max_len;
    let take = bytes.len().min(max_len);
    Tokenized {
        ids: bytes[..take].iter().map(|&b| b as u32).collect(),
        truncated,
    }
}

/// Inverse of [`tokenize`]: special ids are skipped, invalid UTF-8 (possible
/// for generated sequences) is replaced.
pub fn detokenize(ids: &[u32]) -> String {
    let bytes: Vec<u8> = ids
        .iter()
        .filter(|&&id| id < 256)
        .map(|&id| id as u8)
        .collect();
    String::from_utf8_lossy(&bytes).into_owned()
}

// ---------------------------------------------------------------------------
// Records
// ---------------------------------------------------------------------------

/// Counterspeech intent category.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Intent {
    #[serde(rename = "INF")]
    Informative,
    #[serde(rename = "POS")]
    Positive,
    #[serde(rename = "QUE")]
    Questioning,
    #[serde(rename = "DEN")]
    Denouncing,
}

impl Intent {
    pub const ALL: [Intent; 4] = [
        Intent::Informative,
        Intent::Positive,
        Intent::Questioning,
        Intent::Denouncing,
    ];

    /// Dataset code, e.g. "INF".
    pub fn code(self) -> &'static str {
        match self {
            Intent::Informative => "INF",
            Intent::Positive => "POS",
            Intent::Questioning => "QUE",
            Intent::Denouncing => "DEN",
        }
    }

    /// Lowercase word used inside the I8 instruction.
    pub fn word(self) -> &'static str {
        match self {
            Intent::Informative => "informative",
            Intent::Positive => "positive",
            Intent::Questioning => "questioning",
            Intent::Denouncing => "denouncing",
        }
    }

    /// Capitalized word used in few-shot prompt headers.
    pub fn title(self) -> &'static str {
        match self {
            Intent::Informative => "Informative",
            Intent::Positive => "Positive",
            Intent::Questioning => "Questioning",
            Intent::Denouncing => "Denouncing",
        }
    }
}

impl FromStr for Intent {
    type Err = DataError;
    fn from_str(s: &str) -> Result<Self, DataError> {
        match s {
            "INF" => Ok(Intent::Informative),
            "POS" => Ok(Intent::Positive),
            "QUE" => Ok(Intent::Questioning),
            "DEN" => Ok(Intent::Denouncing),
            other => Err(DataError::UnknownIntent(other.to_string())),
        }
    }
}

impl fmt::Display for Intent {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.code())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Dev,
    Test,
}

/// One counterspeech dataset row: hate speech x, intent c, counterspeech y.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CSRecord {
    pub id: String,
    pub hate_speech: String,
    pub intent: Intent,
    pub counterspeech: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub target_group: Option<String>,
    pub split: Split,
    /// Unknown input fields, preserved verbatim.
    #[serde(flatten)]
    pub extra: BTreeMap<String, serde_json::Value>,
}

/// The seven explanation dimensions of the phase-1 auxiliary tasks.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Dimension {
    Offensiveness,
    TargetGroup,
    SpeakerIntent,
    PowerDynamics,
    Implication,
    EmotionalReaction,
    CognitiveReaction,
}

impl Dimension {
    pub const ALL: [Dimension; 7] = [
        Dimension::Offensiveness,
        Dimension::TargetGroup,
        Dimension::SpeakerIntent,
        Dimension::PowerDynamics,
        Dimension::Implication,
        Dimension::EmotionalReaction,
        Dimension::CognitiveReaction,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Dimension::Offensiveness => "offensiveness",
            Dimension::TargetGroup => "target_group",
            Dimension::SpeakerIntent => "speaker_intent",
            Dimension::PowerDynamics => "power_dynamics",
            Dimension::Implication => "implication",
            Dimension::EmotionalReaction => "emotional_reaction",
            Dimension::CognitiveReaction => "cognitive_reaction",
        }
    }

    pub fn task(self) -> TaskId {
        match self {
            Dimension::Offensiveness => TaskId::I1,
            Dimension::TargetGroup => TaskId::I2,
            Dimension::SpeakerIntent => TaskId::I3,
            Dimension::PowerDynamics => TaskId::I4,
            Dimension::Implication => TaskId::I5,
            Dimension::EmotionalReaction => TaskId::I6,
            Dimension::CognitiveReaction => TaskId::I7,
        }
    }
}

impl fmt::Display for Dimension {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

/// One explanation-dataset row for phase 1.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ExplanationRecord {
    pub statement: String,
    pub dimension: Dimension,
    pub explanation: String,
    #[serde(flatten)]
    pub extra: BTreeMap<String, serde_json::Value>,
}

// ---------------------------------------------------------------------------
// Instruction templates
// ---------------------------------------------------------------------------

/// Instruction-tuning task ids: I1-I7 are the explanation tasks, I8 the
/// intent-conditioned counterspeech task.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
pub enum TaskId {
    I1,
    I2,
    I3,
    I4,
    I5,
    I6,
    I7,
    I8,
}

impl TaskId {
    pub const ALL: [TaskId; 8] = [
        TaskId::I1,
        TaskId::I2,
        TaskId::I3,
        TaskId::I4,
        TaskId::I5,
        TaskId::I6,
        TaskId::I7,
        TaskId::I8,
    ];

    pub fn name(self) -> &'static str {
        match self {
            TaskId::I1 => "I1",
            TaskId::I2 => "I2",
            TaskId::I3 => "I3",
            TaskId::I4 => "I4",
            TaskId::I5 => "I5",
            TaskId::I6 => "I6",
            TaskId::I7 => "I7",
            TaskId::I8 => "I8",
        }
    }
}

impl fmt::Display for TaskId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for TaskId {
    type Err = DataError;
    fn from_str(s: &str) -> Result<Self, DataError> {
        TaskId::ALL
            .iter()
            .copied()
            .find(|t| t.name() == s)
            .ok_or_else(|| DataError::UnknownTaskId(s.to_string()))
    }
}

const DEFAULT_TEMPLATES: [(TaskId, &str); 8] = [
    (
        TaskId::I1,
        "Analyze the offensiveness of the statement: {HS}",
    ),
    (
        TaskId::I2,
        "Identify the group of people that the speaker is targeting or discriminating against in the offensive statement: {HS}",
    ),
    (
        TaskId::I3,
        "Analyze the speaker's intention behind writing the offensive statement: {HS}",
    ),
    (
        TaskId::I4,
        "Explain the underlying power dynamics between the speaker and the target group in the offensive statement: {HS}",
    ),
    (
        TaskId::I5,
        "Explain the implied meaning underlying the offensive statement: {HS}",
    ),
    (
        TaskId::I6,
        "Describe how the target group might feel emotionally after reading or listening to the offensive statement: {HS}",
    ),
    (
        TaskId::I7,
        "Describe how the target group might react cognitively after reading or listening to the offensive statement: {HS}",
    ),
    (
        TaskId::I8,
        "Analyze the different aspects such as offensiveness, target group, stereotype, power dynamics, implied meaning, emotional, and cognitive reactions before writing a {INT} counterspeech for the offensive statement: {HS}",
    ),
];

/// The eight instruction templates, keyed by task id. `{HS}` is replaced by
/// the hate speech, `{INT}` (I8 only) by the lowercase intent word.
#[derive(Debug, Clone)]
pub struct TemplateSet {
    templates: BTreeMap<TaskId, String>,
}

impl Default for TemplateSet {
    fn default() -> Self {
        TemplateSet {
            templates: DEFAULT_TEMPLATES
                .iter()
                .map(|&(t, s)| (t, s.to_string()))
                .collect(),
        }
    }
}

impl TemplateSet {
    /// Load overrides from a JSON object `{"I1": "...", ...}`. Tasks not in
    /// the file keep their default template. `{INT}` may appear only in I8;
    /// every template must contain `{HS}` exactly once.
    pub fn from_json_file(path: &Path) -> Result<Self, DataError> {
        let text = std::fs::read_to_string(path).map_err(|e| DataError::Io {
            path: path.display().to_string(),
            source: e,
        })?;
        let overrides: BTreeMap<String, String> =
            serde_json::from_str(&text).map_err(|e| DataError::BadTemplateFile {
                path: path.display().to_string(),
                detail: e.to_string(),
            })?;
        let mut set = TemplateSet::default();
        for (key, template) in overrides {
            let task = TaskId::from_str(&key)?;
            if template.matches("{HS}").count() != 1 {
                return Err(DataError::BadTemplateFile {
                    path: path.display().to_string(),
                    detail: format!("{key}: template must contain {{HS}} exactly once"),
                });
            }
            let has_int = template.contains("{INT}");
            if has_int != (task == TaskId::I8) {
                return Err(DataError::BadTemplateFile {
                    path: path.display().to_string(),
                    detail: format!("{key}: {{INT}} is allowed in I8 only, and required there"),
                });
            }
            set.templates.insert(task, template);
        }
        Ok(set)
    }

    pub fn template(&self, task: TaskId) -> &str {
        &self.templates[&task]
    }

    /// Substitute placeholders. An intent is required for I8 and rejected
    /// everywhere else.
    pub fn render(
        &self,
        task: TaskId,
        hate_speech: &str,
        intent: Option<Intent>,
    ) -> Result<String, DataError> {
        match (task, intent) {
            (TaskId::I8, None) => return Err(DataError::MissingIntent(task)),
            (TaskId::I8, Some(_)) => {}
            (_, Some(_)) => return Err(DataError::UnexpectedIntent(task)),
            (_, None) => {}
        }
        let mut out = self.templates[&task].replace("{HS}", hate_speech);
        if let Some(intent) = intent {
            out = out.replace("{INT}", intent.word());
        }
        Ok(out)
    }
}

/// Render through the default template set.
pub fn render_instruction(
    task: TaskId,
    hate_speech: &str,
    intent: Option<Intent>,
) -> Result<String, DataError> {
    TemplateSet::default().render(task, hate_speech, intent)
}

// ---------------------------------------------------------------------------
// Multi-task mixture
// ---------------------------------------------------------------------------

/// One rendered training sample.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PromptSample {
    pub task: TaskId,
    pub prompt: String,
    pub target: String,
}

/// How the seven explanation tasks are weighted inside one epoch.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MixtureWeighting {
    /// Every task contributes the same number of samples; smaller tasks are
    /// upsampled by cycling their records.
    #[default]
    Uniform,
    /// Every record appears exactly once, so tasks weigh in proportion to
    /// their dataset size.
    Proportional,
}

/// Render all explanation records through their task templates and shuffle
/// them into one epoch's mixture. Requires at least one record per
/// dimension so every task contributes to every epoch.
pub fn build_multitask_mixture(
    records: &[ExplanationRecord],
    templates: &TemplateSet,
    weighting: MixtureWeighting,
    seed: u64,
) -> Result<Vec<PromptSample>, DataError> {
    let mut by_dim: BTreeMap<Dimension, Vec<&ExplanationRecord>> = BTreeMap::new();
    for r in records {
        by_dim.entry(r.dimension).or_default().push(r);
    }
    for dim in Dimension::ALL {
        if !by_dim.contains_key(&dim) {
            return Err(DataError::MissingDimension(dim));
        }
    }

    let per_task = match weighting {
        MixtureWeighting::Uniform => by_dim.values().map(Vec::len).max().unwrap_or(0),
        MixtureWeighting::Proportional => 0, // unused
    };

    let mut samples = Vec::new();
    for (dim, recs) in &by_dim {
        let count = match weighting {
            MixtureWeighting::Uniform => per_task,
            MixtureWeighting::Proportional => recs.len(),
        };
        for i in 0..count {
            let r = recs[i % recs.len()];
            samples.push(PromptSample {
                task: dim.task(),
                prompt: templates.render(dim.task(), &r.statement, None)?,
                target: r.explanation.clone(),
            });
        }
    }

    let mut rng: ChaCha8Rng = rng::rng_from_seed(seed);
    rng::shuffle(&mut rng, &mut samples);
    Ok(samples)
}

// ---------------------------------------------------------------------------
// BM25 exemplar selection
// ---------------------------------------------------------------------------

const BM25_K1: f64 = 1.2;
const BM25_B: f64 = 0.75;

fn bm25_tokens(text: &str) -> Vec<String> {
    text.to_lowercase()
        .split_whitespace()
        .map(str::to_string)
        .collect()
}

/// Okapi BM25 scores of `query` against every record's hate speech, in
/// corpus order. Robertson IDF with 0.5 smoothing:
/// `idf(t) = ln((N - df + 0.5) / (df + 0.5))`.
pub fn bm25_scores(query: &str, corpus: &[CSRecord]) -> Result<Vec<f64>, DataError> {
    if corpus.is_empty() {
        return Err(DataError::EmptyCorpus);
    }
    let docs: Vec<Vec<String>> = corpus.iter().map(|r| bm25_tokens(&r.hate_speech)).collect();
    let n = docs.len() as f64;
    let avgdl = docs.iter().map(Vec::len).sum::<usize>() as f64 / n;

    let mut terms: Vec<String> = bm25_tokens(query);
    terms.sort();
    terms.dedup();

    let mut scores = vec![0.0; docs.len()];
    for term in &terms {
        let df = docs.iter().filter(|d| d.contains(term)).count() as f64;
        let idf = ((n - df + 0.5) / (df + 0.5)).ln();
        for (i, d) in docs.iter().enumerate() {
            let tf = d.iter().filter(|t| *t == term).count() as f64;
            if tf == 0.0 {
                continue;
            }
            let dl = d.len() as f64;
            let tf_norm =
                (tf * (BM25_K1 + 1.0)) / (tf + BM25_K1 * (1.0 - BM25_B + BM25_B * dl / avgdl));
            scores[i] += idf * tf_norm;
        }
    }
    Ok(scores)
}

/// Top-n records by BM25 score against the query hate speech, descending;
/// ties broken by ascending record id.
pub fn bm25_select_exemplars<'a>(
    query_hs: &str,
    corpus: &'a [CSRecord],
    n: usize,
) -> Result<Vec<&'a CSRecord>, DataError> {
    if n > corpus.len() {
        return Err(DataError::NotEnoughDocs {
            wanted: n,
            have: corpus.len(),
        });
    }
    let scores = bm25_scores(query_hs, corpus)?;
    let mut order: Vec<usize> = (0..corpus.len()).collect();
    order.sort_by(|&a, &b| {
        scores[b]
            .partial_cmp(&scores[a])
            .unwrap()
            .then_with(|| corpus[a].id.cmp(&corpus[b].id))
    });
    Ok(order[..n].iter().map(|&i| &corpus[i]).collect())
}

// ---------------------------------------------------------------------------
// Few-shot prompt
// ---------------------------------------------------------------------------

/// Preamble-Instruction-Exemplar prompt. With no exemplars the Examples
/// section is omitted entirely.
pub fn build_fewshot_prompt(
    query_hs: &str,
    intent: Intent,
    exemplars: &[&CSRecord],
    preamble: &str,
) -> String {
    let label = format!("{} Counterspeech", intent.title());
    let mut out = String::new();
    out.push_str(preamble.trim_end());
    out.push_str("\n\n»»»» Instruction »»»»\n");
    out.push_str(&format!(
        "Given a hate speech statement, generate a {label} by following the definitions given above.\n"
    ));
    if !exemplars.is_empty() {
        out.push_str("\n»»»» Examples »»»»\n");
        for ex in exemplars {
            out.push_str(&format!(
                "Statement – {}\n{label} – {}\n\n",
                ex.hate_speech, ex.counterspeech
            ));
        }
    } else {
        out.push('\n');
    }
    out.push_str(&format!("Statement – {query_hs}\n{label} –"));
    out
}

// ---------------------------------------------------------------------------
// JSONL loading and validation
// ---------------------------------------------------------------------------

/// One rejected line.
#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct LineError {
    /// 1-based line number.
    pub line: usize,
    pub message: String,
}

/// Per-line validation outcome; loading never aborts on the first failure.
#[derive(Debug, Clone, Default, Serialize)]
pub struct ValidationReport {
    pub n_records: usize,
    pub errors: Vec<LineError>,
}

impl ValidationReport {
    pub fn is_clean(&self) -> bool {
        self.errors.is_empty()
    }
}

impl fmt::Display for ValidationReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{} records, {} errors", self.n_records, self.errors.len())?;
        for e in &self.errors {
            write!(f, "\n  line {}: {}", e.line, e.message)?;
        }
        Ok(())
    }
}

fn take_string(
    obj: &mut serde_json::Map<String, serde_json::Value>,
    key: &str,
    allow_empty: bool,
) -> Result<String, String> {
    match obj.remove(key) {
        Some(serde_json::Value::String(s)) => {
            if s.is_empty() && !allow_empty {
                Err(format!("empty {key}"))
            } else {
                Ok(s)
            }
        }
        Some(other) => Err(format!("{key} must be a string, got {other}")),
        None => Err(format!("missing field {key}")),
    }
}

fn parse_cs_line(line: &str) -> Result<CSRecord, String> {
    let value: serde_json::Value =
        serde_json::from_str(line).map_err(|e| format!("malformed JSON: {e}"))?;
    let serde_json::Value::Object(mut obj) = value else {
        return Err("line is not a JSON object".to_string());
    };
    let id = take_string(&mut obj, "id", false)?;
    let hate_speech = take_string(&mut obj, "hate_speech", false)?;
    let intent_code = take_string(&mut obj, "intent", false)?;
    let intent =
        Intent::from_str(&intent_code).map_err(|_| format!("unknown intent {intent_code:?}"))?;
    let counterspeech = take_string(&mut obj, "counterspeech", false)?;
    let target_group = match obj.remove("target_group") {
        None | Some(serde_json::Value::Null) => None,
        Some(serde_json::Value::String(s)) => Some(s),
        Some(other) => return Err(format!("target_group must be a string, got {other}")),
    };
    let split_name = take_string(&mut obj, "split", false)?;
    let split = match split_name.as_str() {
        "train" => Split::Train,
        "dev" => Split::Dev,
        "test" => Split::Test,
        other => return Err(format!("unknown split {other:?}")),
    };
    Ok(CSRecord {
        id,
        hate_speech,
        intent,
        counterspeech,
        target_group,
        split,
        extra: obj.into_iter().collect(),
    })
}

fn parse_explanation_line(line: &str) -> Result<ExplanationRecord, String> {
    let value: serde_json::Value =
        serde_json::from_str(line).map_err(|e| format!("malformed JSON: {e}"))?;
    let serde_json::Value::Object(mut obj) = value else {
        return Err("line is not a JSON object".to_string());
    };
    let statement = take_string(&mut obj, "statement", false)?;
    let dim_name = take_string(&mut obj, "dimension", false)?;
    let dimension = Dimension::ALL
        .iter()
        .copied()
        .find(|d| d.name() == dim_name)
        .ok_or_else(|| format!("unknown dimension {dim_name:?}"))?;
    let explanation = take_string(&mut obj, "explanation", false)?;
    Ok(ExplanationRecord {
        statement,
        dimension,
        explanation,
        extra: obj.into_iter().collect(),
    })
}

fn load_jsonl<T>(
    path: &Path,
    parse: impl Fn(&str) -> Result<T, String>,
) -> Result<(Vec<T>, ValidationReport), DataError> {
    let text = std::fs::read_to_string(path).map_err(|e| DataError::Io {
        path: path.display().to_string(),
        source: e,
    })?;
    let mut records = Vec::new();
    let mut report = ValidationReport::default();
    for (i, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        match parse(line) {
            Ok(r) => records.push(r),
            Err(message) => report.errors.push(LineError {
                line: i + 1,
                message,
            }),
        }
    }
    report.n_records = records.len();
    Ok((records, report))
}

/// Load counterspeech records from a JSONL file, collecting per-line errors.
pub fn load_cs_jsonl(path: &Path) -> Result<(Vec<CSRecord>, ValidationReport), DataError> {
    load_jsonl(path, parse_cs_line)
}

/// Load explanation records from a JSONL file, collecting per-line errors.
pub fn load_explanations_jsonl(
    path: &Path,
) -> Result<(Vec<ExplanationRecord>, ValidationReport), DataError> {
    load_jsonl(path, parse_explanation_line)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn tokenize_ascii_bytes() {
        assert_eq!(tokenize("Hi", 256).ids, vec![72, 105]);
    }

    #[test]
    fn tokenize_truncates_and_flags() {
        let long = "x".repeat(300);
        let t = tokenize(&long, 256);
        assert_eq!(t.ids.len(), 256);
        assert!(t.truncated);
        assert!(!tokenize("short", 256).truncated);
    }

    #[test]
    fn detokenize_skips_specials() {
        let mut ids = tokenize("ok", 16).ids;
        ids.insert(0, BOS);
        ids.push(EOS);
        ids.push(PAD);
        assert_eq!(detokenize(&ids), "ok");
    }

    #[test]
    fn render_i1_matches_template() {
        let s = render_instruction(TaskId::I1, "X", None).unwrap();
        assert_eq!(s, "Analyze the offensiveness of the statement: X");
    }

    #[test]
    fn render_i8_verbalizes_intent() {
        let s = render_instruction(TaskId::I8, "X", Some(Intent::Positive)).unwrap();
        assert!(s.ends_with("before writing a positive counterspeech for the offensive statement: X"));
    }

    #[test]
    fn render_intent_arity_is_enforced() {
        assert!(matches!(
            render_instruction(TaskId::I3, "X", Some(Intent::Positive)),
            Err(DataError::UnexpectedIntent(TaskId::I3))
        ));
        assert!(matches!(
            render_instruction(TaskId::I8, "X", None),
            Err(DataError::MissingIntent(TaskId::I8))
        ));
    }

    #[test]
    fn rendered_instruction_contains_hs_exactly_once() {
        for task in TaskId::ALL {
            let intent = (task == TaskId::I8).then_some(Intent::Denouncing);
            let s = render_instruction(task, "XMARKERX", intent).unwrap();
            assert_eq!(s.matches("XMARKERX").count(), 1, "{task}");
        }
    }

    fn explanation(dim: Dimension, statement: &str) -> ExplanationRecord {
        ExplanationRecord {
            statement: statement.to_string(),
            dimension: dim,
            explanation: format!("explanation for {statement}"),
            extra: BTreeMap::new(),
        }
    }

    #[test]
    fn mixture_covers_all_tasks() {
        let records: Vec<_> = Dimension::ALL
            .iter()
            .map(|&d| explanation(d, "s"))
            .collect();
        let mix = build_multitask_mixture(
            &records,
            &TemplateSet::default(),
            MixtureWeighting::Uniform,
            7,
        )
        .unwrap();
        assert_eq!(mix.len(), 7);
        let mut tasks: Vec<_> = mix.iter().map(|s| s.task).collect();
        tasks.sort();
        tasks.dedup();
        assert_eq!(tasks.len(), 7);
    }

    #[test]
    fn mixture_same_seed_same_order() {
        let records: Vec<_> = Dimension::ALL
            .iter()
            .flat_map(|&d| (0..3).map(move |i| explanation(d, &format!("s{i}"))))
            .collect();
        let a = build_multitask_mixture(&records, &TemplateSet::default(), MixtureWeighting::Uniform, 5)
            .unwrap();
        let b = build_multitask_mixture(&records, &TemplateSet::default(), MixtureWeighting::Uniform, 5)
            .unwrap();
        assert_eq!(a, b);
        let c = build_multitask_mixture(&records, &TemplateSet::default(), MixtureWeighting::Uniform, 6)
            .unwrap();
        assert_ne!(a, c);
    }

    #[test]
    fn mixture_counts_match_input_counts() {
        // 700 balanced records: counts per task in the mixture equal input
        // counts per task as multisets of rendered samples.
        let records: Vec<_> = Dimension::ALL
            .iter()
            .flat_map(|&d| (0..100).map(move |i| explanation(d, &format!("s{i}"))))
            .collect();
        let mix = build_multitask_mixture(
            &records,
            &TemplateSet::default(),
            MixtureWeighting::Uniform,
            42,
        )
        .unwrap();
        assert_eq!(mix.len(), 700);
        let mut mixture_keys: Vec<(TaskId, String, String)> = mix
            .into_iter()
            .map(|s| (s.task, s.prompt, s.target))
            .collect();
        let templates = TemplateSet::default();
        let mut input_keys: Vec<(TaskId, String, String)> = records
            .iter()
            .map(|r| {
                (
                    r.dimension.task(),
                    templates.render(r.dimension.task(), &r.statement, None).unwrap(),
                    r.explanation.clone(),
                )
            })
            .collect();
        mixture_keys.sort();
        input_keys.sort();
        assert_eq!(mixture_keys, input_keys);
    }

    #[test]
    fn mixture_missing_dimension_errors() {
        let records: Vec<_> = Dimension::ALL[..6]
            .iter()
            .map(|&d| explanation(d, "s"))
            .collect();
        assert!(matches!(
            build_multitask_mixture(&records, &TemplateSet::default(), MixtureWeighting::Uniform, 1),
            Err(DataError::MissingDimension(Dimension::CognitiveReaction))
        ));
    }

    #[test]
    fn mixture_uniform_upsamples_smaller_tasks() {
        let mut records: Vec<_> = Dimension::ALL
            .iter()
            .map(|&d| explanation(d, "s"))
            .collect();
        records.push(explanation(Dimension::Offensiveness, "s2"));
        records.push(explanation(Dimension::Offensiveness, "s3"));
        let mix = build_multitask_mixture(
            &records,
            &TemplateSet::default(),
            MixtureWeighting::Uniform,
            1,
        )
        .unwrap();
        // Every task upsampled to 3 samples.
        assert_eq!(mix.len(), 21);
        let prop = build_multitask_mixture(
            &records,
            &TemplateSet::default(),
            MixtureWeighting::Proportional,
            1,
        )
        .unwrap();
        assert_eq!(prop.len(), 9);
    }

    fn cs(id: &str, hs: &str) -> CSRecord {
        CSRecord {
            id: id.to_string(),
            hate_speech: hs.to_string(),
            intent: Intent::Positive,
            counterspeech: format!("counter to {hs}"),
            target_group: None,
            split: Split::Train,
            extra: BTreeMap::new(),
        }
    }

    fn bm25_corpus() -> Vec<CSRecord> {
        vec![
            cs("d1", "cats sit on mats"),
            cs("d2", "dogs chase the ball"),
            cs("d3", "birds fly high above clouds"),
            cs("d4", "cats and dogs play with cats"),
            cs("d5", "fish swim in water"),
        ]
    }

    #[test]
    fn bm25_hand_table() {
        // Frozen from an independent hand computation of Okapi BM25
        // (k1=1.2, b=0.75, Robertson IDF with 0.5 smoothing, avgdl=4.6).
        let corpus = bm25_corpus();
        let scores = bm25_scores("cats dogs", &corpus).unwrap();
        let expected = [
            0.355438312589423,
            0.355438312589423,
            0.0,
            0.725387933294598,
            0.0,
        ];
        for (got, want) in scores.iter().zip(expected) {
            assert!((got - want).abs() <= 1e-9, "{got} vs {want}");
        }
    }

    #[test]
    fn bm25_identical_query_ranks_first() {
        let corpus = bm25_corpus();
        let top = bm25_select_exemplars("fish swim in water", &corpus, 2).unwrap();
        assert_eq!(top[0].id, "d5");
    }

    #[test]
    fn bm25_zero_overlap_ties_break_by_id() {
        let corpus = bm25_corpus();
        let top = bm25_select_exemplars("zzz qqq", &corpus, 3).unwrap();
        let ids: Vec<_> = top.iter().map(|r| r.id.as_str()).collect();
        assert_eq!(ids, ["d1", "d2", "d3"]);
    }

    #[test]
    fn bm25_empty_corpus_and_oversized_n_error() {
        assert!(matches!(
            bm25_scores("x", &[]),
            Err(DataError::EmptyCorpus)
        ));
        let corpus = bm25_corpus();
        assert!(matches!(
            bm25_select_exemplars("x", &corpus, 6),
            Err(DataError::NotEnoughDocs { wanted: 6, have: 5 })
        ));
    }

    #[test]
    fn bm25_monotone_in_term_frequency() {
        // Same document length, increasing query-term count. Filler docs
        // keep df below N/2 so the Robertson IDF stays positive.
        let mut corpus = vec![
            cs("a", "zeta alpha beta gamma"),
            cs("b", "zeta zeta beta gamma"),
            cs("c", "zeta zeta zeta gamma"),
        ];
        for i in 0..5 {
            corpus.push(cs(&format!("f{i}"), "delta epsilon eta theta"));
        }
        let scores = bm25_scores("zeta", &corpus).unwrap();
        assert!(scores[0] > 0.0);
        assert!(scores[0] <= scores[1] && scores[1] <= scores[2]);
    }

    #[test]
    fn fewshot_prompt_layout() {
        let corpus = bm25_corpus();
        let exemplars: Vec<&CSRecord> = corpus.iter().take(3).collect();
        let p = build_fewshot_prompt("QUERY_HS", Intent::Positive, &exemplars, "PREAMBLE");
        assert!(p.starts_with("PREAMBLE"));
        assert_eq!(p.matches("»»»» Examples »»»»").count(), 1);
        assert_eq!(p.matches("Statement – ").count(), 4); // 3 exemplars + query
        assert_eq!(p.matches("QUERY_HS").count(), 1);
        assert!(p.ends_with("Positive Counterspeech –"));

        let zero = build_fewshot_prompt("QUERY_HS", Intent::Positive, &[], "PREAMBLE");
        assert!(!zero.contains("Examples"));
        assert_eq!(zero.matches("Statement – ").count(), 1);
    }

    #[test]
    fn jsonl_round_trip_and_validation() {
        let dir = std::env::temp_dir().join(format!("coarl-data-{}", std::process::id()));
        std::fs::create_dir_all(&dir).unwrap();
        let path = dir.join("cs.jsonl");
        std::fs::write(
            &path,
            concat!(
                r#"{"id":"a","hate_speech":"h1","intent":"INF","counterspeech":"c1","split":"train","note":"kept"}"#,
                "\n",
                r#"{"id":"b","hate_speech":"h2","intent":"HUM","counterspeech":"c2","split":"train"}"#,
                "\n",
                r#"{"id":"c","hate_speech":"h3","intent":"POS","counterspeech":"","split":"dev"}"#,
                "\n",
                r#"not json at all"#,
                "\n",
                r#"{"id":"d","hate_speech":"h4","intent":"QUE","counterspeech":"c4","split":"test"}"#,
                "\n",
            ),
        )
        .unwrap();
        let (records, report) = load_cs_jsonl(&path).unwrap();
        assert_eq!(records.len(), 2);
        assert_eq!(report.n_records, 2);
        assert_eq!(report.errors.len(), 3);
        assert!(report.errors[0].message.contains("unknown intent"));
        assert_eq!(report.errors[0].line, 2);
        assert!(report.errors[1].message.contains("empty counterspeech"));
        assert!(report.errors[2].message.contains("malformed JSON"));
        assert_eq!(report.errors[2].line, 4);
        // Unknown fields preserved.
        assert_eq!(records[0].extra["note"], serde_json::json!("kept"));
        std::fs::remove_dir_all(&dir).ok();
    }

    #[test]
    fn valid_fixture_loads_clean() {
        let dir = std::env::temp_dir().join(format!("coarl-data2-{}", std::process::id()));
        std::fs::create_dir_all(&dir).unwrap();
        let path = dir.join("exp.jsonl");
        std::fs::write(
            &path,
            concat!(
                r#"{"statement":"s1","dimension":"offensiveness","explanation":"e1"}"#,
                "\n",
                r#"{"statement":"s2","dimension":"target_group","explanation":"e2"}"#,
                "\n",
                r#"{"statement":"s3","dimension":"implication","explanation":"e3"}"#,
                "\n",
            ),
        )
        .unwrap();
        let (records, report) = load_explanations_jsonl(&path).unwrap();
        assert_eq!(records.len(), 3);
        assert!(report.is_clean());
        std::fs::remove_dir_all(&dir).ok();
    }
}
