//! End-to-end checks of the `coarl` binary: exit codes, the one-line error
//! format, run-directory layout, and rerun determinism.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

fn bin() -> Command {
    Command::new(env!("CARGO_BIN_EXE_coarl"))
}

fn fixtures() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../../fixtures")
}

fn stdout(out: &Output) -> String {
    String::from_utf8_lossy(&out.stdout).into_owned()
}

fn stderr(out: &Output) -> String {
    String::from_utf8_lossy(&out.stderr).into_owned()
}

/// Tiny model + short training so CLI runs stay fast.
fn tiny_config(dir: &Path) -> PathBuf {
    let f = fixtures();
    let cfg = serde_json::json!({
        "seed": 7,
        "model": {
            "d_model": 16, "n_heads": 2, "n_enc_layers": 1, "n_dec_layers": 1,
            "d_ff": 32, "max_seq_len": 256
        },
        "phase1": {"learning_rate": 1e-3, "batch_size": 8, "epochs": 1, "max_steps": 2},
        "phase2": {"learning_rate": 1e-3, "batch_size": 8, "epochs": 1, "max_steps": 2},
        "lora": {"rank": 4, "alpha": 8.0},
        "ppo": {
            "learning_rate": 1e-3, "batch_size": 2, "mini_batch_size": 1,
            "total_steps": 1, "ppo_epochs": 1, "max_new_tokens": 4
        },
        "reward": {"toxicity": {"lexicon_path": f.join("toxicity_lexicon.txt")}},
        "data": {
            "explanations_path": f.join("explanations.jsonl"),
            "cs_path": f.join("cs_records.jsonl")
        }
    });
    let path = dir.join("config.json");
    std::fs::write(&path, serde_json::to_string_pretty(&cfg).unwrap()).unwrap();
    path
}

#[test]
fn validate_data_accepts_the_shipped_fixture() {
    let out = bin()
        .args(["validate-data", "--input"])
        .arg(fixtures().join("cs_records.jsonl"))
        .output()
        .unwrap();
    assert!(out.status.success(), "{}", stderr(&out));
    assert!(stdout(&out).contains("12 records, 0 errors"), "{}", stdout(&out));
}

#[test]
fn validate_data_reports_line_errors_and_fails() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("bad.jsonl");
    std::fs::write(
        &path,
        concat!(
            r#"{"id":"a","hate_speech":"h","intent":"HUM","counterspeech":"c","split":"train"}"#,
            "\n",
            r#"{"id":"b","hate_speech":"h","intent":"POS","counterspeech":"c","split":"train"}"#,
            "\n",
        ),
    )
    .unwrap();
    let out = bin()
        .args(["validate-data", "--input"])
        .arg(&path)
        .output()
        .unwrap();
    assert_eq!(out.status.code(), Some(1));
    assert!(stdout(&out).contains("unknown intent"), "{}", stdout(&out));
    assert!(stderr(&out).starts_with("error[data]:"), "{}", stderr(&out));
}

#[test]
fn render_prompt_i1_matches_template() {
    let out = bin()
        .args(["render-prompt", "--task", "I1", "--hs", "X"])
        .output()
        .unwrap();
    assert!(out.status.success());
    assert_eq!(
        stdout(&out).trim_end(),
        "Analyze the offensiveness of the statement: X"
    );
}

#[test]
fn render_prompt_i8_requires_intent() {
    let out = bin()
        .args(["render-prompt", "--task", "I8", "--hs", "X"])
        .output()
        .unwrap();
    assert_eq!(out.status.code(), Some(1));
    assert!(stderr(&out).starts_with("error[data]:"), "{}", stderr(&out));
}

#[test]
fn render_prompt_fewshot_uses_bm25_exemplars() {
    let out = bin()
        .args([
            "render-prompt",
            "--fewshot",
            "--hs",
            "Robots keep stealing electricity around here.",
            "--intent",
            "POS",
            "--exemplars",
            "1",
            "--corpus",
        ])
        .arg(fixtures().join("cs_records.jsonl"))
        .output()
        .unwrap();
    assert!(out.status.success(), "{}", stderr(&out));
    let text = stdout(&out);
    assert!(text.contains("»»»» Examples »»»»"));
    // The robot exemplar wins BM25 against a robot query.
    assert!(text.contains("rust buckets"), "{text}");
    assert!(text.trim_end().ends_with("Positive Counterspeech –"), "{text}");
}

#[test]
fn phase2_without_phase1_checkpoint_names_the_missing_path() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = tiny_config(dir.path());
    let missing = dir.path().join("nope/theta_m.ckpt");
    let out = bin()
        .args(["--config"])
        .arg(&cfg)
        .args(["phase2-train", "--out-dir"])
        .arg(dir.path().join("run"))
        .args(["--checkpoint"])
        .arg(&missing)
        .output()
        .unwrap();
    assert_eq!(out.status.code(), Some(1));
    let err = stderr(&out);
    assert!(err.contains("nope/theta_m.ckpt"), "{err}");
}

#[test]
fn unknown_config_key_is_rejected_with_path() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("typo.json");
    std::fs::write(&path, r#"{"ppo": {"clip_rage": 0.1}}"#).unwrap();
    let out = bin()
        .args(["--config"])
        .arg(&path)
        .args(["render-prompt", "--task", "I1", "--hs", "X"])
        .output()
        .unwrap();
    assert_eq!(out.status.code(), Some(1));
    let err = stderr(&out);
    assert!(err.starts_with("error[config]:"), "{err}");
    assert!(err.contains("clip_rage") && err.contains("ppo"), "{err}");
}

fn dir_contents(root: &Path) -> BTreeMap<String, Vec<u8>> {
    let mut out = BTreeMap::new();
    let mut stack = vec![root.to_path_buf()];
    while let Some(dir) = stack.pop() {
        for entry in std::fs::read_dir(&dir).unwrap() {
            let path = entry.unwrap().path();
            if path.is_dir() {
                stack.push(path);
            } else {
                let rel = path.strip_prefix(root).unwrap().to_string_lossy().into_owned();
                out.insert(rel, std::fs::read(&path).unwrap());
            }
        }
    }
    out
}

#[test]
fn phase1_run_directory_layout_and_rerun_determinism() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = tiny_config(dir.path());

    let run = |out_dir: &Path| {
        let out = bin()
            .args(["--config"])
            .arg(&cfg)
            .args(["phase1-train", "--out-dir"])
            .arg(out_dir)
            .output()
            .unwrap();
        assert!(out.status.success(), "{}", stderr(&out));
    };
    let run_a = dir.path().join("a");
    let run_b = dir.path().join("b");
    run(&run_a);
    run(&run_b);

    for entry in ["config.json", "checkpoints", "metrics", "generations"] {
        assert!(run_a.join(entry).exists(), "missing {entry}");
    }
    assert!(run_a.join("checkpoints/phase1/theta_m.ckpt").is_file());
    assert!(run_a.join("metrics/phase1_metrics.csv").is_file());

    // Same config + seed: byte-identical checkpoints and metrics.
    assert_eq!(
        dir_contents(&run_a.join("checkpoints")),
        dir_contents(&run_b.join("checkpoints"))
    );
    assert_eq!(
        dir_contents(&run_a.join("metrics")),
        dir_contents(&run_b.join("metrics"))
    );

    // Re-running into a non-empty directory refuses without --force.
    let out = bin()
        .args(["--config"])
        .arg(&cfg)
        .args(["phase1-train", "--out-dir"])
        .arg(&run_a)
        .output()
        .unwrap();
    assert_eq!(out.status.code(), Some(1));
    assert!(stderr(&out).contains("--force"), "{}", stderr(&out));

    // With --force it overwrites.
    let out = bin()
        .args(["--config"])
        .arg(&cfg)
        .args(["phase1-train", "--out-dir"])
        .arg(&run_a)
        .arg("--force")
        .output()
        .unwrap();
    assert!(out.status.success(), "{}", stderr(&out));
}

#[test]
fn generate_decodes_from_a_checkpoint() {
    let dir = tempfile::tempdir().unwrap();
    let ckpt = dir.path().join("model.ckpt");
    let model = coarl_core::model::Seq2SeqModel::init(
        coarl_core::model::ModelConfig {
            d_model: 16,
            n_heads: 2,
            n_enc_layers: 1,
            n_dec_layers: 1,
            d_ff: 32,
            max_seq_len: 256,
            ..coarl_core::model::ModelConfig::default()
        },
        3,
    )
    .unwrap();
    model.save(&ckpt, "model").unwrap();

    let out = bin()
        .args(["generate", "--checkpoint"])
        .arg(&ckpt)
        .args([
            "--hs",
            "Robots are bad neighbors.",
            "--intent",
            "POS",
            "--max-new-tokens",
            "4",
        ])
        .output()
        .unwrap();
    assert!(out.status.success(), "{}", stderr(&out));

    // Greedy decoding twice prints the same bytes.
    let out2 = bin()
        .args(["generate", "--checkpoint"])
        .arg(&ckpt)
        .args([
            "--hs",
            "Robots are bad neighbors.",
            "--intent",
            "POS",
            "--max-new-tokens",
            "4",
        ])
        .output()
        .unwrap();
    assert_eq!(out.stdout, out2.stdout);
}

#[test]
fn reward_score_emits_breakdown_jsonl() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = tiny_config(dir.path());
    let input = dir.path().join("pairs.jsonl");
    std::fs::write(
        &input,
        concat!(
            r#"{"x": "robots steal power", "y": "robots steal power"}"#,
            "\n",
            r#"{"x": "robots steal power", "y": "that claim is not supported by facts"}"#,
            "\n",
        ),
    )
    .unwrap();
    let out = bin()
        .args(["--config"])
        .arg(&cfg)
        .args(["reward-score", "--input"])
        .arg(&input)
        .output()
        .unwrap();
    assert!(out.status.success(), "{}", stderr(&out));
    let text = stdout(&out);
    let lines: Vec<&str> = text.lines().collect();
    assert_eq!(lines.len(), 2);
    for line in lines {
        let v: serde_json::Value = serde_json::from_str(line).unwrap();
        let total = v["total"].as_f64().unwrap();
        assert!((0.0..=1.0).contains(&total));
    }
}

#[test]
fn evaluate_renders_a_table_from_generations() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = tiny_config(dir.path());
    // Echo the references as generations: lexical metrics hit 1.
    let gens = dir.path().join("gens.jsonl");
    let (records, _) =
        coarl_core::data::load_cs_jsonl(&fixtures().join("cs_records.jsonl")).unwrap();
    let mut lines = String::new();
    for r in records.iter().filter(|r| r.split == coarl_core::data::Split::Test) {
        lines.push_str(
            &serde_json::to_string(&serde_json::json!({
                "id": r.id, "intent": r.intent, "generated": r.counterspeech
            }))
            .unwrap(),
        );
        lines.push('\n');
    }
    std::fs::write(&gens, lines).unwrap();
    let test_only = dir.path().join("test.jsonl");
    let all = std::fs::read_to_string(fixtures().join("cs_records.jsonl")).unwrap();
    let filtered: String = all
        .lines()
        .filter(|l| l.contains(r#""split":"test""#))
        .map(|l| format!("{l}\n"))
        .collect();
    std::fs::write(&test_only, filtered).unwrap();

    let csv = dir.path().join("report.csv");
    let out = bin()
        .args(["--config"])
        .arg(&cfg)
        .args(["evaluate", "--test"])
        .arg(&test_only)
        .args(["--generations"])
        .arg(&gens)
        .args(["--csv-out"])
        .arg(&csv)
        .output()
        .unwrap();
    assert!(out.status.success(), "{}", stderr(&out));
    let table = stdout(&out);
    assert!(table.contains("overall"), "{table}");
    assert!(table.contains("1.0000"), "{table}");
    let csv_text = std::fs::read_to_string(&csv).unwrap();
    assert!(csv_text.starts_with("group,count"));
}
