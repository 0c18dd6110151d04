//! Automated evaluation: ROUGE-1/2/L, METEOR-exact, embedding cosine
//! similarity, category accuracy, and reference-scorer stance/quality/
//! toxicity columns, aggregated per intent and overall.
//!
//! Metric tokenization is lowercase with punctuation split into separate
//! tokens. METEOR here is exact-match only (no stemming or synonyms);
//! chunks come from greedy longest-common-run tiling, which always matches
//! the clipped unigram count.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::data::{self, CSRecord, Intent, TaskId, TemplateSet};
use crate::lora::LoraAdapter;
use crate::model::{ModelError, SamplingConfig, Seq2SeqModel};
use crate::reward::{RewardError, ScorerSet};

#[derive(Debug, Error)]
pub enum EvalError {
    #[error("test set is empty")]
    EmptyTestSet,
    #[error("no generation for test id {0:?}")]
    MissingGeneration(String),
    #[error("generation id {0:?} not in the test set")]
    UnknownGeneration(String),
    #[error("duplicate generation id {0:?}")]
    DuplicateGeneration(String),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Reward(#[from] RewardError),
    #[error(transparent)]
    Data(#[from] crate::data::DataError),
    #[error("io error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
}

/// Lowercase tokens; alphanumeric runs and individual punctuation marks.
pub fn metric_tokens(text: &str) -> Vec<String> {
    let mut out = Vec::new();
    let mut current = String::new();
    for c in text.to_lowercase().chars() {
        if c.is_alphanumeric() || c == '\'' {
            current.push(c);
        } else {
            if !current.is_empty() {
                out.push(std::mem::take(&mut current));
            }
            if !c.is_whitespace() {
                out.push(c.to_string());
            }
        }
    }
    if !current.is_empty() {
        out.push(current);
    }
    out
}

fn f1(p: f64, r: f64) -> f64 {
    if p + r == 0.0 {
        0.0
    } else {
        2.0 * p * r / (p + r)
    }
}

/// ROUGE-N F1 with clipped n-gram overlap, n in {1, 2}.
pub fn rouge_n(candidate: &str, reference: &str, n: usize) -> f64 {
    let c = metric_tokens(candidate);
    let r = metric_tokens(reference);
    if c.len() < n || r.len() < n {
        return 0.0;
    }
    let grams = |toks: &[String]| -> BTreeMap<Vec<String>, usize> {
        let mut m = BTreeMap::new();
        for w in toks.windows(n) {
            *m.entry(w.to_vec()).or_insert(0) += 1;
        }
        m
    };
    let cg = grams(&c);
    let rg = grams(&r);
    let matches: usize = cg
        .iter()
        .map(|(g, &cc)| cc.min(rg.get(g).copied().unwrap_or(0)))
        .sum();
    let p = matches as f64 / (c.len() - n + 1) as f64;
    let rec = matches as f64 / (r.len() - n + 1) as f64;
    f1(p, rec)
}

/// ROUGE-L F1 from the longest common subsequence.
pub fn rouge_l(candidate: &str, reference: &str) -> f64 {
    let c = metric_tokens(candidate);
    let r = metric_tokens(reference);
    if c.is_empty() || r.is_empty() {
        return 0.0;
    }
    let mut dp = vec![0usize; r.len() + 1];
    for ci in &c {
        let mut prev = 0;
        for (j, rj) in r.iter().enumerate() {
            let cur = dp[j + 1];
            dp[j + 1] = if ci == rj {
                prev + 1
            } else {
                dp[j + 1].max(dp[j])
            };
            prev = cur;
        }
    }
    let lcs = dp[r.len()] as f64;
    f1(lcs / c.len() as f64, lcs / r.len() as f64)
}

/// Greedy longest-common-run tiling between two token lists. Returns the
/// matched token count (equal to the clipped unigram overlap) and the
/// number of tiles (chunks).
fn tile_matches(c: &[String], r: &[String]) -> (usize, usize) {
    let mut c_used = vec![false; c.len()];
    let mut r_used = vec![false; r.len()];
    let mut matched = 0usize;
    let mut chunks = 0usize;
    loop {
        let mut best_len = 0usize;
        let mut best = (0usize, 0usize);
        for i in 0..c.len() {
            if c_used[i] {
                continue;
            }
            for j in 0..r.len() {
                if r_used[j] || c[i] != r[j] {
                    continue;
                }
                let mut len = 0;
                while i + len < c.len()
                    && j + len < r.len()
                    && !c_used[i + len]
                    && !r_used[j + len]
                    && c[i + len] == r[j + len]
                {
                    len += 1;
                }
                if len > best_len {
                    best_len = len;
                    best = (i, j);
                }
            }
        }
        if best_len == 0 {
            break;
        }
        for k in 0..best_len {
            c_used[best.0 + k] = true;
            r_used[best.1 + k] = true;
        }
        matched += best_len;
        chunks += 1;
    }
    (matched, chunks)
}

/// METEOR with exact unigram matching only:
/// `F = 10PR / (R + 9P)`, `penalty = 0.5 (chunks/m)^3`, `score = F (1 - penalty)`.
pub fn meteor_simplified(candidate: &str, reference: &str) -> f64 {
    let c = metric_tokens(candidate);
    let r = metric_tokens(reference);
    if c.is_empty() || r.is_empty() {
        return 0.0;
    }
    let (m, chunks) = tile_matches(&c, &r);
    if m == 0 {
        return 0.0;
    }
    let p = m as f64 / c.len() as f64;
    let rec = m as f64 / r.len() as f64;
    let f = 10.0 * p * rec / (rec + 9.0 * p);
    let penalty = 0.5 * (chunks as f64 / m as f64).powi(3);
    f * (1.0 - penalty)
}

/// Cosine similarity of mean token-embedding vectors; 0 when either text
/// embeds to the zero vector.
pub fn cosine_sim(model: &Seq2SeqModel, text_a: &str, text_b: &str) -> f64 {
    let embed = |text: &str| -> Vec<f64> {
        let d = model.config.d_model;
        let table = model.params.get("embed.tok").expect("embed.tok").value.data();
        let ids = data::tokenize(text, model.config.max_seq_len).ids;
        let mut mean = vec![0.0; d];
        if ids.is_empty() {
            return mean;
        }
        for &id in &ids {
            let row = &table[id as usize * d..(id as usize + 1) * d];
            for (m, v) in mean.iter_mut().zip(row) {
                *m += v;
            }
        }
        mean.iter_mut().for_each(|m| *m /= ids.len() as f64);
        mean
    };
    let a = embed(text_a);
    let b = embed(text_b);
    let dot: f64 = a.iter().zip(&b).map(|(x, y)| x * y).sum();
    let na: f64 = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nb: f64 = b.iter().map(|x| x * x).sum::<f64>().sqrt();
    if na == 0.0 || nb == 0.0 {
        0.0
    } else {
        dot / (na * nb)
    }
}

/// Predicts the intent of a generated counterspeech.
pub trait IntentClassifier {
    fn classify(&self, text: &str) -> Intent;
}

/// Ordered-rule reference classifier: QUE on '?', else INF on evidential
/// cues, else DEN on denouncing cues, else POS.
pub struct RuleIntentClassifier;

const INF_CUES: [&str; 5] = ["in fact", "research", "according to", "studies", "evidence"];
const DEN_CUES: [&str; 5] = ["unacceptable", "wrong", "hateful", "harmful", "not okay"];

impl IntentClassifier for RuleIntentClassifier {
    fn classify(&self, text: &str) -> Intent {
        let lower = text.to_lowercase();
        if lower.contains('?') {
            return Intent::Questioning;
        }
        if INF_CUES.iter().any(|c| lower.contains(c)) {
            return Intent::Informative;
        }
        if DEN_CUES.iter().any(|c| lower.contains(c)) {
            return Intent::Denouncing;
        }
        Intent::Positive
    }
}

/// 1 when the classifier recovers the intended intent, else 0.
pub fn category_accuracy(
    generated: &str,
    intended: Intent,
    classifier: &dyn IntentClassifier,
) -> f64 {
    if classifier.classify(generated) == intended {
        1.0
    } else {
        0.0
    }
}

// ---------------------------------------------------------------------------
// Run evaluation
// ---------------------------------------------------------------------------

/// One generated output, keyed to a test record by id.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Generation {
    pub id: String,
    pub intent: Intent,
    pub generated: String,
}

/// Load generations from JSONL `{id, intent, generated}`.
pub fn load_generations_jsonl(path: &Path) -> Result<Vec<Generation>, EvalError> {
    let text = std::fs::read_to_string(path).map_err(|e| EvalError::Io {
        path: path.display().to_string(),
        source: e,
    })?;
    let mut out = Vec::new();
    for (i, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let g: Generation = serde_json::from_str(line).map_err(|e| EvalError::Io {
            path: format!("{}:{}", path.display(), i + 1),
            source: std::io::Error::new(std::io::ErrorKind::InvalidData, e),
        })?;
        out.push(g);
    }
    Ok(out)
}

/// Per-sample metric row.
#[derive(Debug, Clone, Serialize)]
pub struct SampleMetrics {
    pub id: String,
    pub intent: Intent,
    pub rouge1: f64,
    pub rouge2: f64,
    pub rouge_l: f64,
    pub meteor: f64,
    pub cosine: f64,
    pub category: f64,
    pub stance: f64,
    pub quality: f64,
    pub toxicity: f64,
}

/// Arithmetic means over a sample group.
#[derive(Debug, Clone, Default, Serialize)]
pub struct MetricMeans {
    pub count: usize,
    pub rouge1: f64,
    pub rouge2: f64,
    pub rouge_l: f64,
    pub meteor: f64,
    pub cosine: f64,
    pub category_accuracy: f64,
    pub stance: f64,
    pub quality: f64,
    pub toxicity: f64,
}

impl MetricMeans {
    fn from_samples(samples: &[&SampleMetrics]) -> Self {
        let n = samples.len() as f64;
        let mean = |f: fn(&SampleMetrics) -> f64| samples.iter().map(|s| f(s)).sum::<f64>() / n;
        MetricMeans {
            count: samples.len(),
            rouge1: mean(|s| s.rouge1),
            rouge2: mean(|s| s.rouge2),
            rouge_l: mean(|s| s.rouge_l),
            meteor: mean(|s| s.meteor),
            cosine: mean(|s| s.cosine),
            category_accuracy: mean(|s| s.category),
            stance: mean(|s| s.stance),
            quality: mean(|s| s.quality),
            toxicity: mean(|s| s.toxicity),
        }
    }
}

/// Full evaluation report. The stance/quality/toxicity columns come from
/// the reward module's reference scorers ("reference-scorer variants" of
/// the paper's PC/AQ/T columns), scored with the raw hate speech as topic.
#[derive(Debug, Clone, Serialize)]
pub struct MetricReport {
    pub samples: Vec<SampleMetrics>,
    pub overall: MetricMeans,
    pub per_intent: BTreeMap<Intent, MetricMeans>,
}

/// Where the generations come from: a file of prior outputs, or a model to
/// greedy-decode now.
pub enum EvalSource<'a> {
    Generations(&'a [Generation]),
    Model {
        model: &'a Seq2SeqModel,
        adapter: Option<&'a LoraAdapter>,
        templates: &'a TemplateSet,
        max_new_tokens: usize,
    },
}

/// Evaluate generations against the test set. Outputs must match test ids
/// one-to-one; any mismatch is an error.
pub fn evaluate_run(
    source: EvalSource<'_>,
    test_set: &[CSRecord],
    embedding_model: &Seq2SeqModel,
    scorers: &ScorerSet,
) -> Result<MetricReport, EvalError> {
    if test_set.is_empty() {
        return Err(EvalError::EmptyTestSet);
    }

    let generations: Vec<Generation> = match source {
        EvalSource::Generations(gs) => {
            let mut by_id: BTreeMap<&str, &Generation> = BTreeMap::new();
            for g in gs {
                if by_id.insert(g.id.as_str(), g).is_some() {
                    return Err(EvalError::DuplicateGeneration(g.id.clone()));
                }
            }
            let test_ids: BTreeMap<&str, ()> =
                test_set.iter().map(|r| (r.id.as_str(), ())).collect();
            for g in gs {
                if !test_ids.contains_key(g.id.as_str()) {
                    return Err(EvalError::UnknownGeneration(g.id.clone()));
                }
            }
            test_set
                .iter()
                .map(|r| {
                    by_id
                        .get(r.id.as_str())
                        .map(|g| (*g).clone())
                        .ok_or_else(|| EvalError::MissingGeneration(r.id.clone()))
                })
                .collect::<Result<_, _>>()?
        }
        EvalSource::Model {
            model,
            adapter,
            templates,
            max_new_tokens,
        } => {
            let sampling = SamplingConfig {
                max_new_tokens,
                ..SamplingConfig::default()
            };
            let mut out = Vec::with_capacity(test_set.len());
            for r in test_set {
                let prompt = templates.render(TaskId::I8, &r.hate_speech, Some(r.intent))?;
                let ids = data::tokenize(&prompt, model.config.max_seq_len).ids;
                let response = model.generate(&ids, &sampling, adapter)?;
                out.push(Generation {
                    id: r.id.clone(),
                    intent: r.intent,
                    generated: data::detokenize(&response),
                });
            }
            out
        }
    };

    let classifier = RuleIntentClassifier;
    let mut samples = Vec::with_capacity(test_set.len());
    for (record, generation) in test_set.iter().zip(&generations) {
        let text = &generation.generated;
        samples.push(SampleMetrics {
            id: record.id.clone(),
            intent: record.intent,
            rouge1: rouge_n(text, &record.counterspeech, 1),
            rouge2: rouge_n(text, &record.counterspeech, 2),
            rouge_l: rouge_l(text, &record.counterspeech),
            meteor: meteor_simplified(text, &record.counterspeech),
            cosine: cosine_sim(embedding_model, text, &record.counterspeech),
            category: category_accuracy(text, record.intent, &classifier),
            stance: scorers.stance.score(&record.hate_speech, text)?,
            quality: scorers.quality.score(&record.hate_speech, text)?,
            toxicity: scorers.toxicity.score(&record.hate_speech, text)?,
        });
    }

    let overall = MetricMeans::from_samples(&samples.iter().collect::<Vec<_>>());
    let mut per_intent = BTreeMap::new();
    for intent in Intent::ALL {
        let group: Vec<&SampleMetrics> =
            samples.iter().filter(|s| s.intent == intent).collect();
        if !group.is_empty() {
            per_intent.insert(intent, MetricMeans::from_samples(&group));
        }
    }
    Ok(MetricReport {
        samples,
        overall,
        per_intent,
    })
}

impl MetricReport {
    /// Aligned text table, one row per intent plus the overall row.
    pub fn render_table(&self) -> String {
        let mut out = String::new();
        let _ = writeln!(
            out,
            "{:<8} {:>5} {:>7} {:>7} {:>7} {:>7} {:>7} {:>7} {:>7} {:>7} {:>7}",
            "intent", "n", "R1", "R2", "RL", "M", "CS", "CA", "PC", "AQ", "T"
        );
        let mut row = |name: &str, m: &MetricMeans| {
            let _ = writeln!(
                out,
                "{:<8} {:>5} {:>7.4} {:>7.4} {:>7.4} {:>7.4} {:>7.4} {:>7.4} {:>7.4} {:>7.4} {:>7.4}",
                name,
                m.count,
                m.rouge1,
                m.rouge2,
                m.rouge_l,
                m.meteor,
                m.cosine,
                m.category_accuracy,
                m.stance,
                m.quality,
                m.toxicity
            );
        };
        for (intent, means) in &self.per_intent {
            row(intent.code(), means);
        }
        row("overall", &self.overall);
        out
    }

    /// CSV with the same rows as the table.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("group,count,r1,r2,rl,meteor,cosine,ca,pc,aq,toxicity\n");
        let mut row = |name: &str, m: &MetricMeans| {
            let _ = writeln!(
                out,
                "{name},{},{},{},{},{},{},{},{},{},{}",
                m.count,
                m.rouge1,
                m.rouge2,
                m.rouge_l,
                m.meteor,
                m.cosine,
                m.category_accuracy,
                m.stance,
                m.quality,
                m.toxicity
            );
        };
        for (intent, means) in &self.per_intent {
            row(intent.code(), means);
        }
        row("overall", &self.overall);
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::ModelConfig;
    use crate::reward::{LengthDiversityQuality, LexiconToxicity, OverlapStance};

    #[test]
    fn tokenizer_splits_punctuation() {
        assert_eq!(
            metric_tokens("Hello, world!"),
            vec!["hello", ",", "world", "!"]
        );
        assert_eq!(metric_tokens("it's fine"), vec!["it's", "fine"]);
    }

    #[test]
    fn rouge_identical_is_one() {
        for s in ["the cat sat", "one two three four"] {
            assert!((rouge_n(s, s, 1) - 1.0).abs() < 1e-12);
            assert!((rouge_n(s, s, 2) - 1.0).abs() < 1e-12);
            assert!((rouge_l(s, s) - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn rouge1_hand_oracle() {
        // cand "the cat sat" vs ref "the cat": P = 2/3, R = 1, F1 = 0.8.
        let f = rouge_n("the cat sat", "the cat", 1);
        assert!((f - 0.8).abs() < 1e-12, "{f}");
    }

    #[test]
    fn rouge_disjoint_is_zero() {
        assert_eq!(rouge_n("aa bb cc", "dd ee ff", 1), 0.0);
        assert_eq!(rouge_n("aa bb cc", "dd ee ff", 2), 0.0);
        assert_eq!(rouge_l("aa bb cc", "dd ee ff"), 0.0);
        assert_eq!(rouge_n("", "x", 1), 0.0);
    }

    #[test]
    fn rouge_l_subsequence_oracle() {
        // "the cat sat" vs "the sat": LCS = 2, P = 2/3, R = 1, F1 = 0.8.
        let f = rouge_l("the cat sat", "the sat");
        assert!((f - 0.8).abs() < 1e-12, "{f}");
    }

    #[test]
    fn meteor_identical_three_tokens() {
        // F = 1, chunks = 1, m = 3: penalty = 0.5/27.
        let s = meteor_simplified("one two three", "one two three");
        let expected = 1.0 - 0.5 / 27.0;
        assert!((s - expected).abs() < 1e-12, "{s} vs {expected}");
    }

    #[test]
    fn meteor_single_shared_token_is_half() {
        let s = meteor_simplified("same", "same");
        assert!((s - 0.5).abs() < 1e-12, "{s}");
    }

    #[test]
    fn meteor_zero_matches_is_zero() {
        assert_eq!(meteor_simplified("aa bb", "cc dd"), 0.0);
        assert_eq!(meteor_simplified("", "cc dd"), 0.0);
    }

    #[test]
    fn category_rule_order() {
        let c = RuleIntentClassifier;
        assert_eq!(
            category_accuracy("Why would you say that?", Intent::Questioning, &c),
            1.0
        );
        // '?' missing: INF cue fires first even when QUE was intended.
        assert_eq!(
            category_accuracy("According to studies, this is false.", Intent::Questioning, &c),
            0.0
        );
        assert_eq!(
            category_accuracy("According to studies, this is false.", Intent::Informative, &c),
            1.0
        );
        assert_eq!(
            category_accuracy("That is hateful and unacceptable.", Intent::Denouncing, &c),
            1.0
        );
        assert_eq!(
            category_accuracy("Everyone deserves kindness.", Intent::Positive, &c),
            1.0
        );
        // A question mark outranks every later cue.
        assert_eq!(c.classify("Is that according to studies?"), Intent::Questioning);
    }

    fn tiny_model() -> Seq2SeqModel {
        Seq2SeqModel::init(
            ModelConfig {
                d_model: 16,
                n_heads: 2,
                n_enc_layers: 1,
                n_dec_layers: 1,
                d_ff: 32,
                max_seq_len: 64,
                ..ModelConfig::default()
            },
            5,
        )
        .unwrap()
    }

    #[test]
    fn cosine_identity_and_symmetry() {
        let model = tiny_model();
        assert!((cosine_sim(&model, "hello world", "hello world") - 1.0).abs() <= 1e-12);
        let ab = cosine_sim(&model, "alpha beta", "gamma delta");
        let ba = cosine_sim(&model, "gamma delta", "alpha beta");
        assert_eq!(ab.to_bits(), ba.to_bits());
        assert_eq!(cosine_sim(&model, "", "x"), 0.0);
    }

    #[test]
    fn cosine_opposite_embeddings_give_minus_one() {
        let mut model = tiny_model();
        let d = model.config.d_model;
        {
            let table = model.params.get_mut("embed.tok").unwrap();
            let data = table.value.data_mut();
            for j in 0..d {
                data[b'a' as usize * d + j] = (j + 1) as f64;
                data[b'b' as usize * d + j] = -((j + 1) as f64);
            }
        }
        let sim = cosine_sim(&model, "a", "b");
        assert!((sim + 1.0).abs() <= 1e-12, "{sim}");
    }

    fn record(id: &str, intent: Intent, hs: &str, cs: &str) -> CSRecord {
        CSRecord {
            id: id.to_string(),
            hate_speech: hs.to_string(),
            intent,
            counterspeech: cs.to_string(),
            target_group: None,
            split: crate::data::Split::Test,
            extra: BTreeMap::new(),
        }
    }

    fn scorer_set() -> ScorerSet {
        let dir = tempfile::tempdir().unwrap();
        let lex = dir.path().join("lex.txt");
        std::fs::write(&lex, "vermin\nscum\n").unwrap();
        ScorerSet {
            stance: Box::new(OverlapStance::new()),
            quality: Box::new(LengthDiversityQuality),
            toxicity: Box::new(LexiconToxicity::from_file(&lex).unwrap()),
        }
    }

    #[test]
    fn evaluate_identical_outputs_maxes_lexical_metrics() {
        let model = tiny_model();
        let test = vec![
            record("a", Intent::Positive, "hs one", "kind reply one"),
            record("b", Intent::Questioning, "hs two", "why say that?"),
        ];
        let gens: Vec<Generation> = test
            .iter()
            .map(|r| Generation {
                id: r.id.clone(),
                intent: r.intent,
                generated: r.counterspeech.clone(),
            })
            .collect();
        let report =
            evaluate_run(EvalSource::Generations(&gens), &test, &model, &scorer_set()).unwrap();
        for v in [
            report.overall.rouge1,
            report.overall.rouge2,
            report.overall.rouge_l,
            report.overall.cosine,
        ] {
            assert!((v - 1.0).abs() < 1e-12);
        }
        assert!(report.overall.meteor > 0.95);
    }

    #[test]
    fn evaluate_empty_outputs_zero_lexical_and_toxicity() {
        let model = tiny_model();
        let test = vec![record("a", Intent::Positive, "hs", "reply words")];
        let gens = vec![Generation {
            id: "a".to_string(),
            intent: Intent::Positive,
            generated: String::new(),
        }];
        let report =
            evaluate_run(EvalSource::Generations(&gens), &test, &model, &scorer_set()).unwrap();
        assert_eq!(report.overall.rouge1, 0.0);
        assert_eq!(report.overall.meteor, 0.0);
        assert_eq!(report.overall.toxicity, 0.0);
    }

    #[test]
    fn report_means_match_hand_average() {
        let model = tiny_model();
        let test = vec![
            record("a", Intent::Positive, "hs one", "alpha beta gamma"),
            record("b", Intent::Positive, "hs two", "delta epsilon"),
            record("c", Intent::Denouncing, "hs three", "zeta"),
        ];
        let gens = vec![
            Generation { id: "a".into(), intent: Intent::Positive, generated: "alpha beta".into() },
            Generation { id: "b".into(), intent: Intent::Positive, generated: "epsilon".into() },
            Generation { id: "c".into(), intent: Intent::Denouncing, generated: "eta theta".into() },
        ];
        let report =
            evaluate_run(EvalSource::Generations(&gens), &test, &model, &scorer_set()).unwrap();
        // Independent per-sample averaging through the public metric fns.
        let hand_r1 = (rouge_n("alpha beta", "alpha beta gamma", 1)
            + rouge_n("epsilon", "delta epsilon", 1)
            + rouge_n("eta theta", "zeta", 1))
            / 3.0;
        assert!((report.overall.rouge1 - hand_r1).abs() < 1e-15);
        let hand_ca: f64 = [
            category_accuracy("alpha beta", Intent::Positive, &RuleIntentClassifier),
            category_accuracy("epsilon", Intent::Positive, &RuleIntentClassifier),
            category_accuracy("eta theta", Intent::Denouncing, &RuleIntentClassifier),
        ]
        .iter()
        .sum::<f64>()
            / 3.0;
        assert_eq!(report.overall.category_accuracy, hand_ca);
        assert_eq!(report.per_intent[&Intent::Positive].count, 2);
        assert!(report.render_table().contains("overall"));
        assert!(report.to_csv().starts_with("group,count"));
    }

    #[test]
    fn id_mismatch_is_an_error() {
        let model = tiny_model();
        let test = vec![record("a", Intent::Positive, "hs", "cs")];
        let wrong = vec![Generation {
            id: "zz".into(),
            intent: Intent::Positive,
            generated: "text".into(),
        }];
        assert!(matches!(
            evaluate_run(EvalSource::Generations(&wrong), &test, &model, &scorer_set()),
            Err(EvalError::UnknownGeneration(_))
        ));
        assert!(matches!(
            evaluate_run(EvalSource::Generations(&[]), &test, &model, &scorer_set()),
            Err(EvalError::MissingGeneration(_))
        ));
    }

    #[test]
    fn model_source_decodes_greedily_and_deterministically() {
        let model = tiny_model();
        let test = vec![record("a", Intent::Positive, "short hs", "cs text")];
        let run = || {
            evaluate_run(
                EvalSource::Model {
                    model: &model,
                    adapter: None,
                    templates: &TemplateSet::default(),
                    max_new_tokens: 6,
                },
                &test,
                &model,
                &scorer_set(),
            )
            .unwrap()
        };
        let a = run();
        let b = run();
        assert_eq!(a.overall.rouge1.to_bits(), b.overall.rouge1.to_bits());
    }
}
