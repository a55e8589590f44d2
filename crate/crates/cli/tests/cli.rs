use serde_json::Value;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

const STAGES: [&str; 8] = [
    "prepare-data",
    "pretrain-host",
    "snapshot",
    "train-dgm",
    "splice-finetune",
    "evaluate",
    "impute",
    "baseline-dropout",
];

fn corpus(dir: &Path, lines: usize) {
    let src = Path::new(env!("CARGO_MANIFEST_DIR")).join("../core/assets/toy_corpus.txt");
    let text = std::fs::read_to_string(src).unwrap();
    let head: Vec<&str> = text.lines().take(lines).collect();
    std::fs::write(dir.join("corpus.txt"), head.join("\n") + "\n").unwrap();
}

fn text_config(dir: &Path, host: &str, site: &str, policy: &str) -> PathBuf {
    corpus(dir, 160);
    let cfg = format!(
        r#"{{
  "data": {{ "corpus_path": "corpus.txt", "policy": "{policy}", "seed": 11 }},
  "host": {host},
  "dgm": {{ "dim_z": 4, "dim_w": 2, "K": 3, "hidden_width": 16, "depth": 1, "sigma_dec": 0.1,
           "dropout_rate": 0.0, "learning_rate": 0.001, "epochs": 2, "batch_size": 64 }},
  "splice": {{ "site": "{site}", "snapshot_limit": 500 }},
  "train": {{ "epochs": 1, "lr": 0.001, "batch_size": 16, "finetune_epochs": 1 }},
  "out_dir": "out"
}}"#
    );
    let p = dir.join("run.json");
    std::fs::write(&p, cfg).unwrap();
    p
}

const TINY_TRANSFORMER: &str =
    r#"{ "kind": "transformer", "hidden": 16, "heads": 2, "ffn": 32, "layers": 2, "max_len": 32, "dropout": 0.1 }"#;
const TINY_SEQ2SEQ: &str = r#"{ "kind": "seq2seq", "emb": 8, "hidden": 16, "max_len": 32 }"#;

fn dgmr(config: &Path, stage: &str, extra: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_dgmr"))
        .arg(stage)
        .arg("--config")
        .arg(config)
        .args(extra)
        .env("DGMR_THREADS", "1")
        .output()
        .unwrap()
}

fn ok(config: &Path, stage: &str, extra: &[&str]) {
    let o = dgmr(config, stage, extra);
    assert!(
        o.status.success(),
        "{stage} failed: {}",
        String::from_utf8_lossy(&o.stderr)
    );
}

fn run_all(config: &Path) {
    for s in STAGES {
        ok(config, s, &[]);
    }
}

fn eval_json(dir: &Path, site: &str) -> Value {
    let text = std::fs::read_to_string(dir.join(format!("out/eval_{site}.json"))).unwrap();
    serde_json::from_str(&text).unwrap()
}

#[test]
fn transformer_pipeline_emits_eval_report() {
    let d = tempfile::tempdir().unwrap();
    let site = "transformer.layer.1.post_attention";
    let cfg = text_config(d.path(), TINY_TRANSFORMER, site, "low");
    run_all(&cfg);
    let v = eval_json(d.path(), site);
    for m in ["baseline", "spliced"] {
        let acc = v[m]["report"]["token_accuracy"].as_f64().unwrap();
        assert!((0.0..=100.0).contains(&acc));
        assert!(v[m]["mean_entropy"].as_f64().unwrap() > 0.0);
    }
    let val_lines = std::fs::read_to_string(d.path().join("out/val.txt")).unwrap().lines().count();
    let report = std::fs::read_to_string(d.path().join(format!("out/impute_{site}.txt"))).unwrap();
    let records = report.split("\n\n").filter(|r| !r.is_empty()).count();
    assert_eq!(records, val_lines);
    assert!(report.split("\n\n").all(|r| r.trim_end().lines().count() == 3));
    assert!(d.path().join(format!("out/dropout_{site}_0.5.ckpt")).exists());
}

#[test]
fn seq2seq_option1_pipeline_runs() {
    let d = tempfile::tempdir().unwrap();
    let site = "seq2seq.decoder_hidden";
    let cfg = text_config(d.path(), TINY_SEQ2SEQ, site, "multi30k_b");
    for s in &STAGES[..6] {
        ok(&cfg, s, &[]);
    }
    let v = eval_json(d.path(), site);
    assert!(v["spliced"]["report"]["bleu"].as_f64().unwrap() >= 0.0);
}

#[test]
fn mlp_pipeline_runs_on_surrogate_images() {
    let d = tempfile::tempdir().unwrap();
    let cfg = d.path().join("mlp.json");
    std::fs::write(
        &cfg,
        r#"{
  "data": { "seed": 3, "surrogate": { "train": 64, "val": 32 } },
  "host": { "kind": "mlp", "sizes": [24, 12, 10] },
  "dgm": { "dim_z": 4, "dim_w": 2, "K": 3, "hidden_width": 16, "depth": 1, "sigma_dec": 0.5,
           "dropout_rate": 0.0, "learning_rate": 0.001, "epochs": 2, "batch_size": 32 },
  "splice": { "site": "mlp.after.1" },
  "train": { "epochs": 2, "lr": 0.01, "batch_size": 16 },
  "out_dir": "out"
}"#,
    )
    .unwrap();
    for s in ["prepare-data", "pretrain-host", "snapshot", "train-dgm", "splice-finetune", "evaluate", "baseline-dropout"] {
        ok(&cfg, s, &[]);
    }
    let v = eval_json(d.path(), "mlp.after.1");
    assert!(v["spliced"]["accuracy"].as_f64().unwrap() <= 1.0);
    let o = dgmr(&cfg, "impute", &[]);
    assert!(!o.status.success());
}

#[test]
fn same_config_and_seed_give_identical_artifacts() {
    let dirs: Vec<_> = (0..2).map(|_| tempfile::tempdir().unwrap()).collect();
    let site = "transformer.top";
    for d in &dirs {
        run_all(&text_config(d.path(), TINY_TRANSFORMER, site, "low"));
    }
    let mut names: Vec<_> = std::fs::read_dir(dirs[0].path().join("out"))
        .unwrap()
        .map(|e| e.unwrap().file_name())
        .collect();
    names.sort();
    assert!(names.len() > 10);
    for n in names {
        let a = std::fs::read(dirs[0].path().join("out").join(&n)).unwrap();
        let b = std::fs::read(dirs[1].path().join("out").join(&n)).unwrap();
        assert!(a == b, "{n:?} differs between runs");
    }
}

#[test]
fn zero_mask_corpus_with_masked_bleu_fails() {
    let d = tempfile::tempdir().unwrap();
    let site = "transformer.top";
    let cfg = text_config(d.path(), TINY_TRANSFORMER, site, "low");
    for s in &STAGES[..5] {
        ok(&cfg, s, &[]);
    }
    let masked = d.path().join("out/masked_val_low.tsv");
    let unmasked: String = std::fs::read_to_string(&masked)
        .unwrap()
        .lines()
        .map(|l| {
            let orig = l.split('\t').next().unwrap();
            format!("{orig}\t{orig}\t\n")
        })
        .collect();
    std::fs::write(&masked, unmasked).unwrap();
    let o = dgmr(&cfg, "evaluate", &[]);
    assert_eq!(o.status.code(), Some(1));
    let err = String::from_utf8(o.stderr).unwrap();
    assert_eq!(err.lines().count(), 1);
    assert!(err.starts_with("dgmr: error[undefined-metric]:"), "{err}");
    ok(&cfg, "evaluate", &["--no-masked-bleu"]);
    ok(&cfg, "impute", &[]);
    let report = std::fs::read_to_string(d.path().join(format!("out/impute_{site}.txt"))).unwrap();
    for rec in report.split("\n\n") {
        let lines: Vec<&str> = rec.lines().collect();
        assert!(lines.iter().all(|l| *l == lines[0]), "{rec}");
    }
}

#[test]
fn missing_artifact_names_the_file() {
    let d = tempfile::tempdir().unwrap();
    let cfg = text_config(d.path(), TINY_TRANSFORMER, "transformer.top", "low");
    ok(&cfg, "prepare-data", &[]);
    let o = dgmr(&cfg, "snapshot", &[]);
    assert!(!o.status.success());
    let err = String::from_utf8(o.stderr).unwrap();
    assert!(err.starts_with("dgmr: error[missing-artifact]:"), "{err}");
    assert!(err.contains("host.ckpt") && err.contains("pretrain-host"), "{err}");
}

#[test]
fn unknown_config_key_is_rejected() {
    let d = tempfile::tempdir().unwrap();
    let cfg = text_config(d.path(), TINY_TRANSFORMER, "transformer.top", "low");
    let text = std::fs::read_to_string(&cfg).unwrap().replace("\"seed\": 11", "\"seed\": 11, \"sede\": 1");
    std::fs::write(&cfg, text).unwrap();
    let o = dgmr(&cfg, "prepare-data", &[]);
    assert!(String::from_utf8(o.stderr).unwrap().starts_with("dgmr: error[config]:"));
}

#[test]
fn site_must_match_host_kind() {
    let d = tempfile::tempdir().unwrap();
    let cfg = text_config(d.path(), TINY_TRANSFORMER, "transformer.top", "low");
    let o = dgmr(&cfg, "prepare-data", &["--site", "mlp.after.2"]);
    ok(&cfg, "prepare-data", &[]);
    let o2 = dgmr(&cfg, "snapshot", &["--site", "mlp.after.2"]);
    assert!(o.status.success());
    assert!(String::from_utf8(o2.stderr).unwrap().starts_with("dgmr: error[site]:"));
}
