use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use pfc_sim::cli::{read_summary, EXIT_CONFIG, EXIT_DATA};
use pfc_sim::config::ExperimentConfig;
use pfc_sim::datasynth::read_dataset;
use pfc_sim::trainer::Trainer;

const SMALL: &str = "\
[data]
num_identities = 40
min_per_identity = 6
max_per_identity = 8
dim = 8
seed = 5
[model]
hidden_dim = 16
embedding_dim = 8
[pfc]
ratio = 0.5
batch_size = 8
[schedule]
epochs = 2
[output]
eval_every = 5
";

fn pfc_sim(args: &[&str], dir: &Path) -> Output {
    Command::new(env!("CARGO_BIN_EXE_pfc-sim"))
        .args(args)
        .current_dir(dir)
        .env("PFC_SIM_THREADS", "2")
        .output()
        .unwrap()
}

fn ok(out: Output) -> String {
    assert!(
        out.status.success(),
        "status {:?}\nstdout {}\nstderr {}",
        out.status,
        String::from_utf8_lossy(&out.stdout),
        String::from_utf8_lossy(&out.stderr)
    );
    String::from_utf8(out.stdout).unwrap()
}

/// Writes `SMALL` plus `extra` and synthesizes its dataset; returns the config path.
fn setup(dir: &Path, extra: &str) -> PathBuf {
    let data = dir.join("data");
    let cfg = dir.join("run.toml");
    let text = SMALL.replace("[data]\n", &format!("[data]\npath = {:?}\n", data.join("dataset.pfcd").display().to_string()));
    fs::write(&cfg, format!("{text}{extra}")).unwrap();
    ok(pfc_sim(&["synth", "--config", cfg.to_str().unwrap(), "--out", data.to_str().unwrap()], dir));
    cfg
}

#[test]
fn synth_is_deterministic_and_echoes_config() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = setup(tmp.path(), "");
    let again = tmp.path().join("again");
    ok(pfc_sim(&["synth", "--config", cfg.to_str().unwrap(), "--out", again.to_str().unwrap()], tmp.path()));
    let first = tmp.path().join("data");
    for f in ["dataset.pfcd", "summary.json", "effective.toml"] {
        assert_eq!(fs::read(first.join(f)).unwrap(), fs::read(again.join(f)).unwrap(), "{f}");
    }
    assert_eq!(fs::read_to_string(first.join("config.toml")).unwrap(), fs::read_to_string(&cfg).unwrap());
}

#[test]
fn synth_presets_report_their_corruption() {
    let tmp = tempfile::tempdir().unwrap();
    let conflict = tmp.path().join("conflict.toml");
    fs::write(&conflict, "[data]\nkind = \"conflict\"\n").unwrap();
    let out = tmp.path().join("c");
    ok(pfc_sim(&["synth", "--config", conflict.to_str().unwrap(), "--out", out.to_str().unwrap()], tmp.path()));
    let summary: serde_json::Value = serde_json::from_str(&fs::read_to_string(out.join("summary.json")).unwrap()).unwrap();
    assert_eq!(summary["classes"], 1000);
    assert!(summary["conflicted_points"].as_u64().unwrap() > 0);

    let flip = tmp.path().join("flip.toml");
    fs::write(&flip, "[data]\nkind = \"flip\"\n").unwrap();
    let out = tmp.path().join("f");
    ok(pfc_sim(&["synth", "--config", flip.to_str().unwrap(), "--out", out.to_str().unwrap()], tmp.path()));
    let summary: serde_json::Value = serde_json::from_str(&fs::read_to_string(out.join("summary.json")).unwrap()).unwrap();
    let fraction = summary["flipped"].as_f64().unwrap() / summary["points"].as_f64().unwrap();
    assert!((fraction - 0.2).abs() < 1e-9, "{fraction}");
}

#[test]
fn missing_dataset_fails_without_creating_the_run() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = tmp.path().join("run.toml");
    fs::write(&cfg, "[data]\npath = \"nowhere/dataset.pfcd\"\n").unwrap();
    let run = tmp.path().join("run");
    let out = pfc_sim(&["train", "--config", cfg.to_str().unwrap(), "--out", run.to_str().unwrap()], tmp.path());
    assert_eq!(out.status.code(), Some(EXIT_DATA));
    assert!(!String::from_utf8_lossy(&out.stderr).is_empty());
    assert!(!run.exists());
}

#[test]
fn bad_config_and_flag_values_are_config_errors() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = tmp.path().join("bad.toml");
    fs::write(&cfg, "[pfc]\nratoi = 0.2\n").unwrap();
    let out = pfc_sim(&["train", "--config", cfg.to_str().unwrap(), "--out", "x"], tmp.path());
    assert_eq!(out.status.code(), Some(EXIT_CONFIG));
    assert!(String::from_utf8_lossy(&out.stderr).contains("ratoi"));

    let out = pfc_sim(&["train", "--margin", "softmax", "--out", "x"], tmp.path());
    assert!(!out.status.success());
}

#[test]
fn train_writes_metrics_summary_and_checkpoint() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = setup(tmp.path(), "");
    let run = tmp.path().join("run");
    ok(pfc_sim(
        &["train", "--config", cfg.to_str().unwrap(), "--r", "0.5", "--shards", "2", "--batch", "6", "--margin", "arcface-style", "--filter-threshold", "0.4", "--out", run.to_str().unwrap()],
        tmp.path(),
    ));
    for f in ["metrics.jsonl", "summary.json", "checkpoint.bin", "verdicts.jsonl", "config.toml", "effective.toml"] {
        assert!(run.join(f).is_file(), "{f}");
    }
    let s = read_summary(&run).unwrap();
    assert_eq!(s.resolved_ratio, 0.5);
    assert_eq!((s.shards, s.batch_size, s.filter_threshold), (2, 6, Some(0.4)));
    let effective = fs::read_to_string(run.join("effective.toml")).unwrap();
    assert!(effective.contains("additive-angular"), "{effective}");
    let lines = fs::read_to_string(run.join("metrics.jsonl")).unwrap();
    for line in lines.lines() {
        let v: serde_json::Value = serde_json::from_str(line).unwrap();
        assert!(v["iteration"].is_u64());
    }
}

#[test]
fn sweep_writes_one_run_per_ratio_and_a_table() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = setup(tmp.path(), "");
    let text = fs::read_to_string(&cfg).unwrap().replace("[pfc]\n", "[pfc]\nsweep = [\"batch\", 0.3, 1.0]\n");
    fs::write(&cfg, text).unwrap();
    let out = tmp.path().join("sweep");
    ok(pfc_sim(&["train", "--config", cfg.to_str().unwrap(), "--out", out.to_str().unwrap()], tmp.path()));
    for sub in ["r-batch", "r-0.3", "r-1"] {
        assert!(out.join(sub).join("summary.json").is_file(), "{sub}");
    }
    let table = fs::read_to_string(out.join("sweep.csv")).unwrap();
    assert_eq!(table.lines().count(), 4, "{table}");
    assert!(out.join("verdicts.jsonl").is_file());

    let report = ok(pfc_sim(&["report", out.to_str().unwrap()], tmp.path()));
    assert_eq!(report.lines().count(), 4, "{report}");
}

#[test]
fn report_rejects_other_schema_versions() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = setup(tmp.path(), "");
    let run = tmp.path().join("run");
    ok(pfc_sim(&["train", "--config", cfg.to_str().unwrap(), "--out", run.to_str().unwrap()], tmp.path()));
    let merged = tmp.path().join("merged");
    ok(pfc_sim(&["report", run.to_str().unwrap(), "--out", merged.to_str().unwrap()], tmp.path()));
    let csv = fs::read_to_string(merged.join("report.csv")).unwrap();
    assert_eq!(csv.lines().count(), 2);
    assert!(csv.starts_with("run,ratio,"));

    let path = run.join("summary.json");
    let text = fs::read_to_string(&path).unwrap().replace("\"schema_version\": 1", "\"schema_version\": 99");
    fs::write(&path, text).unwrap();
    let out = pfc_sim(&["report", run.to_str().unwrap()], tmp.path());
    assert!(!out.status.success());
    assert!(String::from_utf8_lossy(&out.stderr).contains("schema"));
}

#[test]
fn resume_continues_to_the_same_result() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = setup(tmp.path(), "");
    let straight = tmp.path().join("straight");
    ok(pfc_sim(&["train", "--config", cfg.to_str().unwrap(), "--out", straight.to_str().unwrap()], tmp.path()));
    let full_metrics = fs::read_to_string(straight.join("metrics.jsonl")).unwrap();

    // an interrupted run: checkpoint at step 7 and a stream that ran a little past it
    let mut exp = ExperimentConfig::load(&cfg).unwrap().0;
    let ds = read_dataset(exp.data.path.as_ref().unwrap()).unwrap();
    let mut trainer = Trainer::new(&ds, exp.train_config(exp.pfc.ratio).unwrap()).unwrap();
    trainer.run_until(7).unwrap();
    let resumed = tmp.path().join("resumed");
    fs::create_dir(&resumed).unwrap();
    fs::write(resumed.join("checkpoint.bin"), trainer.checkpoint_bytes()).unwrap();
    let partial: String = full_metrics.lines().take(3).map(|l| format!("{l}\n")).collect();
    fs::write(resumed.join("metrics.jsonl"), partial).unwrap();

    exp.output.resume = true;
    let resume_cfg = tmp.path().join("resume.toml");
    fs::write(&resume_cfg, exp.to_toml()).unwrap();
    ok(pfc_sim(&["train", "--config", resume_cfg.to_str().unwrap(), "--out", resumed.to_str().unwrap()], tmp.path()));
    assert_eq!(fs::read_to_string(resumed.join("metrics.jsonl")).unwrap(), full_metrics);
    assert_eq!(
        fs::read(resumed.join("summary.json")).unwrap(),
        fs::read(straight.join("summary.json")).unwrap()
    );
}

#[test]
fn bench_writes_scaling_table_and_live_check() {
    let tmp = tempfile::tempdir().unwrap();
    let out = tmp.path().join("bench");
    ok(pfc_sim(&["bench", "--out", out.to_str().unwrap()], tmp.path()));
    let table = fs::read_to_string(out.join("bench.csv")).unwrap();
    assert_eq!(table.lines().count(), 1 + 4 * 3);
    let live: serde_json::Value = serde_json::from_str(&fs::read_to_string(out.join("live_check.json")).unwrap()).unwrap();
    assert_eq!(live["matches"], true, "{live}");
}

#[test]
fn shipped_configs_parse() {
    let dir = Path::new(env!("CARGO_MANIFEST_DIR")).join("configs");
    let mut seen = 0;
    for entry in fs::read_dir(dir).unwrap() {
        let path = entry.unwrap().path();
        let cfg = ExperimentConfig::load(&path).unwrap().0;
        cfg.synth_config().validate().unwrap();
        cfg.scaling_spec().unwrap();
        seen += 1;
    }
    assert!(seen >= 5);
}
