use std::path::Path;

use grft_core::cli::{main_with_args, resolve, Cli, RunConfig};
use grft_core::eval::{load_report, rows_from_csv, CSV_HEADER};
use grft_core::grft::{load_grft, GrftMode};
use clap::Parser;

const TINY: &str = r#"
n_entities = 8
n_relations = 2
n_facts = 16
objects_per_relation = 10
d_model = 16
n_layers = 2
n_heads = 2
max_seq = 80
fact_repeats = 3
reading_docs = 60
distracted_docs = 10
pretrain_lr = 0.01
pretrain_steps = 250
pretrain_batch = 8
pretrain_eval_every = 50
n_known = 2
n_unknown = 2
epochs = 2
layer = 0
max_new = 24
ablate_layers = [1, 0]
ablate_samples = [1, 2]
"#;

fn write_config(dir: &Path) -> String {
    let p = dir.join("tiny.toml");
    std::fs::write(&p, TINY).unwrap();
    p.to_string_lossy().into_owned()
}

fn grft(args: &[&str]) -> i32 {
    main_with_args(std::iter::once("grft").chain(args.iter().copied()))
}

#[test]
fn overrides_reach_the_resolved_config() {
    let cli = Cli::parse_from(["grft", "train", "--layer", "1", "--rank", "3", "--mode", "reft_no_gate", "--seed", "7"]);
    let cfg = resolve(&cli).unwrap();
    assert_eq!((cfg.layer, cfg.rank, cfg.mode, cfg.seed), (1, 3, GrftMode::ReftNoGate, 7));
    assert_eq!(cfg.train(cfg.mode).grft_config(64).mode, GrftMode::ReftNoGate);
    let other = resolve(&Cli::parse_from(["grft", "world", "--seed", "8"])).unwrap();
    assert_ne!(cfg.world().seed, other.world().seed);

    let bad = Cli::parse_from(["grft", "train", "--mode", "lora"]);
    let err = resolve(&bad).unwrap_err();
    assert_eq!(err.exit_code(), 2);
    assert!(err.to_string().contains("reft_no_gate"), "{err}");
    assert_eq!(grft(&["train", "--mode", "lora"]), 2);
    assert_eq!(grft(&["train", "--layer", "9"]), 2);
}

#[test]
fn config_file_round_trip_and_unknown_keys() {
    let cfg = RunConfig::from_toml(TINY).unwrap();
    assert_eq!(cfg.n_entities, 8);
    assert_eq!(cfg.rank, RunConfig::default().rank);
    assert_eq!(RunConfig::from_toml(&cfg.to_toml().unwrap()).unwrap(), cfg);
    assert!(RunConfig::from_toml("no_such_key = 1").is_err());
    assert!(RunConfig::default().to_toml().unwrap().lines().filter(|l| l.contains('=')).count() >= 40);
}

#[test]
fn missing_inputs_are_dependency_errors() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().to_string_lossy().into_owned();
    assert_eq!(grft(&["train", "--out", &out]), 3);
    assert_eq!(grft(&["eval", "--out", &out]), 3);
    assert_eq!(grft(&["probe", "--out", &out]), 3);
    assert_eq!(grft(&["world", "--config", "/definitely/missing.toml"]), 3);
}

#[test]
fn full_pipeline_is_deterministic() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path());
    let out = dir.path().join("run");
    let out_s = out.to_string_lossy().into_owned();
    assert_eq!(grft(&["all", "--config", &cfg, "--out", &out_s]), 0);
    for f in [
        "world.json",
        "base.tiny",
        "base.tiny.meta.json",
        "pretrain_report.json",
        "probe.json",
        "train.jsonl",
        "train.jsonl.meta.json",
        "test.jsonl",
        "grft_grft.bin",
        "grft_reft_no_gate.bin",
        "grft_grft_no_gate_loss.bin",
        "train_report_grft.json",
        "eval_report.json",
        "eval_report.csv",
        "eval_report.csv.meta.json",
        "gate_stats.json",
    ] {
        assert!(out.join(f).exists(), "{f} missing");
    }
    let report = load_report(&out.join("eval_report.json")).unwrap();
    assert_eq!(report.config["n_entities"], 8);
    let csv = std::fs::read_to_string(out.join("eval_report.csv")).unwrap();
    assert_eq!(csv.lines().next().unwrap(), CSV_HEADER);
    assert_eq!(rows_from_csv(&csv).unwrap(), report.rows);
    let (_, gcfg) = load_grft(&out.join("grft_reft_no_gate.bin")).unwrap();
    assert_eq!((gcfg.mode, gcfg.layer_index), (GrftMode::ReftNoGate, 0));
    let meta: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(out.join("base.tiny.meta.json")).unwrap()).unwrap();
    assert_eq!(meta["config"]["d_model"], 16);
    assert_eq!(meta["sha256"].as_str().unwrap().len(), 64);

    // refuses to overwrite, then reproduces byte-identical reports with --force
    assert_eq!(grft(&["world", "--config", &cfg, "--out", &out_s]), 5);
    let first_json = std::fs::read(out.join("eval_report.json")).unwrap();
    let first_csv = std::fs::read(out.join("eval_report.csv")).unwrap();
    assert_eq!(grft(&["all", "--config", &cfg, "--out", &out_s, "--force"]), 0);
    assert_eq!(std::fs::read(out.join("eval_report.json")).unwrap(), first_json);
    assert_eq!(std::fs::read(out.join("eval_report.csv")).unwrap(), first_csv);

    // single-stage rerun of train with a different mode writes its own file
    assert_eq!(grft(&["train", "--config", &cfg, "--out", &out_s, "--mode", "reft_no_gate", "--force"]), 0);
    assert_eq!(grft(&["ablate", "--config", &cfg, "--out", &out_s]), 0);
    let layers: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(out.join("ablation_layer.json")).unwrap()).unwrap();
    let values: Vec<u64> = layers["points"].as_array().unwrap().iter().map(|p| p["value"].as_u64().unwrap()).collect();
    assert_eq!(values, vec![0, 1]);
}
