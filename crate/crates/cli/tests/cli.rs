use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use serde_json::Value;

const SMALL: &str = r#"{
  "model": {"embed_dim": 8, "proj_hidden": 16, "proj_dim": 8, "shared_hidden": [16, 8]},
  "train": {"max_epochs": 12, "patience": 5}
}"#;

fn bin() -> Command {
    let mut c = Command::new(env!("CARGO_BIN_EXE_immunofuse"));
    c.env_remove("IMMUNOFUSE_WORKERS");
    c
}

fn run(args: &[&str]) -> Output {
    bin().args(args).output().expect("spawn immunofuse")
}

fn ok(args: &[&str]) {
    let out = run(args);
    assert!(
        out.status.success(),
        "{args:?} failed: {}",
        String::from_utf8_lossy(&out.stderr)
    );
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

struct Env {
    dir: tempfile::TempDir,
}

impl Env {
    fn new() -> Env {
        let dir = tempfile::tempdir().unwrap();
        std::fs::write(dir.path().join("cfg.json"), SMALL).unwrap();
        Env { dir }
    }
    fn p(&self, name: &str) -> PathBuf {
        self.dir.path().join(name)
    }
    fn cfg(&self) -> String {
        s(&self.p("cfg.json")).to_string()
    }
    fn synth(&self, name: &str, extra: &[&str]) -> PathBuf {
        let out = self.p(name);
        let cfg = self.cfg();
        let mut args = vec!["--config", &cfg, "synth", "--out", s(&out)];
        args.extend_from_slice(&["--embed-dim", "8", "--noise-sd", "0.25"]);
        args.extend_from_slice(extra);
        ok(&args);
        out
    }
}

fn json(path: &Path) -> Value {
    serde_json::from_str(&std::fs::read_to_string(path).unwrap()).unwrap()
}

fn data_rows(path: &Path) -> usize {
    std::fs::read_to_string(path).unwrap().lines().count() - 1
}

#[test]
fn synth_defaults_and_determinism() {
    let env = Env::new();
    let a = env.synth("a", &[]);
    let b = env.synth("b", &[]);
    assert_eq!(data_rows(&a.join("labels.csv")), 158);
    for f in ["labels.csv", "subjects.csv", "split.csv", "embeddings/gene.csv"] {
        assert_eq!(std::fs::read(a.join(f)).unwrap(), std::fs::read(b.join(f)).unwrap(), "{f}");
    }
    let full = env.synth("full", &["--missing-rates", "0,0,0,0"]);
    for m in ["antibody", "cell", "cytokine", "gene"] {
        assert_eq!(data_rows(&full.join(format!("embeddings/{m}.csv"))), 158);
    }
}

#[test]
fn train_replay_is_bitwise() {
    let env = Env::new();
    let data = env.synth("data", &[]);
    let cfg = env.cfg();
    let run1 = env.p("run1");
    ok(&["--config", &cfg, "train", "--data", s(&data), "--out", s(&run1)]);
    let history = json(&run1.join("history.json"));
    assert!(history["epochs"].as_array().unwrap().len() >= 1);
    let run2 = env.p("run2");
    let out = run(&["replay", "--manifest", s(&run1.join("manifest.json")), "--out", s(&run2)]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    assert_eq!(
        std::fs::read(run1.join("checkpoint.json")).unwrap(),
        std::fs::read(run2.join("checkpoint.json")).unwrap()
    );
    let manifest = json(&run1.join("manifest.json"));
    assert_eq!(manifest["seeds"]["train"], 42);
    assert!(manifest["inputs"].as_array().unwrap().len() >= 6);
}

#[test]
fn replay_detects_changed_input() {
    let env = Env::new();
    let data = env.synth("data", &[]);
    let cfg = env.cfg();
    let run1 = env.p("run1");
    ok(&["--config", &cfg, "train", "--data", s(&data), "--out", s(&run1)]);
    let labels = data.join("labels.csv");
    let mut text = std::fs::read_to_string(&labels).unwrap();
    text.push('\n');
    std::fs::write(&labels, text).unwrap();
    let out = run(&["replay", "--manifest", s(&run1.join("manifest.json")), "--out", s(&env.p("run2"))]);
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("input changed"));
}

#[test]
fn invalid_config_exits_2() {
    let env = Env::new();
    let data = env.synth("data", &[]);
    let bad = env.p("bad.json");
    std::fs::write(&bad, r#"{"train": {"patience": 70, "max_epochs": 60}}"#).unwrap();
    let out = run(&["--config", s(&bad), "train", "--data", s(&data), "--out", s(&env.p("o"))]);
    assert_eq!(out.status.code(), Some(2));
    std::fs::write(&bad, r#"{"train": {"learning_rate": 0.1}}"#).unwrap();
    let out = run(&["--config", s(&bad), "train", "--data", s(&data), "--out", s(&env.p("o"))]);
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn ingestion_errors_exit_3_with_context() {
    let env = Env::new();
    let cfg = env.cfg();
    let data = env.synth("data", &[]);
    let gene = data.join("embeddings/gene.csv");
    let original = std::fs::read_to_string(&gene).unwrap();

    std::fs::write(&gene, format!("{original}GHOST,0,0,0,0,0,0,0,0\n")).unwrap();
    let out = run(&["--config", &cfg, "train", "--data", s(&data), "--out", s(&env.p("o1"))]);
    assert_eq!(out.status.code(), Some(3));
    assert!(String::from_utf8_lossy(&out.stderr).contains("GHOST"));

    let mut lines: Vec<String> = original.lines().map(String::from).collect();
    let mut fields: Vec<&str> = lines[2].split(',').collect();
    fields[3] = "inf";
    lines[2] = fields.join(",");
    std::fs::write(&gene, lines.join("\n") + "\n").unwrap();
    let out = run(&["--config", &cfg, "train", "--data", s(&data), "--out", s(&env.p("o2"))]);
    assert_eq!(out.status.code(), Some(3));
    let err = String::from_utf8_lossy(&out.stderr);
    assert!(err.contains("line 3, column 4"), "{err}");
}

#[test]
fn shuffled_rows_give_identical_results() {
    let env = Env::new();
    let cfg = env.cfg();
    let data = env.synth("data", &[]);
    ok(&["--config", &cfg, "train", "--data", s(&data), "--out", s(&env.p("r1"))]);
    for f in ["embeddings/antibody.csv", "embeddings/cytokine.csv", "labels.csv", "subjects.csv", "split.csv"] {
        let path = data.join(f);
        let text = std::fs::read_to_string(&path).unwrap();
        let mut lines: Vec<&str> = text.lines().collect();
        lines[1..].reverse();
        std::fs::write(&path, lines.join("\n") + "\n").unwrap();
    }
    ok(&["--config", &cfg, "train", "--data", s(&data), "--out", s(&env.p("r2"))]);
    assert_eq!(
        std::fs::read(env.p("r1/checkpoint.json")).unwrap(),
        std::fs::read(env.p("r2/checkpoint.json")).unwrap()
    );
}

#[test]
fn evaluate_reports_point_and_interval_per_task() {
    let env = Env::new();
    let cfg = env.cfg();
    let data = env.synth("data", &[]);
    let tr = env.p("train");
    ok(&["--config", &cfg, "train", "--data", s(&data), "--out", s(&tr)]);
    let ev = env.p("eval");
    let ck = tr.join("checkpoint.json");
    ok(&["--config", &cfg, "evaluate", "--data", s(&data), "--checkpoint", s(&ck), "--out", s(&ev)]);
    let r = json(&ev.join("report.json"));
    for ci in ["ci_t1", "ci_t2"] {
        let c = &r["test"][ci];
        assert!(c["lo"].as_f64().unwrap() <= c["hi"].as_f64().unwrap());
        assert!(c["point"].is_number());
    }
    assert_eq!(data_rows(&ev.join("predictions.csv")), 32);

    let missing = run(&["--config", &cfg, "evaluate", "--data", s(&data), "--checkpoint", s(&env.p("nope.json")), "--out", s(&ev)]);
    assert_eq!(missing.status.code(), Some(3));

    for (cmd, file) in [("loo-koo", "loo_koo.csv"), ("degrade", "degradation.csv")] {
        let out = env.p(cmd);
        ok(&["--config", &cfg, cmd, "--data", s(&data), "--checkpoint", s(&ck), "--out", s(&out)]);
        assert!(data_rows(&out.join(file)) > 0);
    }
}

#[test]
fn permute_support_and_worker_independence() {
    let env = Env::new();
    let cfg = env.cfg();
    let data = env.synth("data", &[]);
    let mut results = Vec::new();
    for w in ["1", "8"] {
        let out = env.p(&format!("perm{w}"));
        ok(&["--config", &cfg, "permute", "--data", s(&data), "--out", s(&out), "--n", "4", "--workers", w]);
        let r = json(&out.join("report.json"));
        let p = &r["permutation"];
        for key in ["p_t1", "p_t2"] {
            let v = p[key].as_f64().unwrap();
            assert!([0.2, 0.4, 0.6, 0.8, 1.0].iter().any(|k| (k - v).abs() < 1e-12), "{key} = {v}");
        }
        results.push((p["p_t1"].clone(), p["p_t2"].clone(), p["null_t1"].clone(), p["null_t2"].clone()));
    }
    assert_eq!(results[0], results[1]);

    // the environment variable stands in for --workers
    let out = env.p("perm_env");
    let st = bin()
        .args(["--config", &cfg, "permute", "--data", s(&data), "--out", s(&out), "--n", "4"])
        .env("IMMUNOFUSE_WORKERS", "3")
        .output()
        .unwrap();
    assert!(st.status.success());
    let r = json(&out.join("report.json"));
    assert_eq!(r["config"]["permutation"]["workers"], 3);
    assert_eq!(r["permutation"]["null_t1"], results[0].2);
}

#[test]
fn ablate_and_baselines_write_tables() {
    let env = Env::new();
    let cfg = env.cfg();
    let data = env.synth("data", &[]);
    let ab = env.p("ab");
    ok(&["--config", &cfg, "ablate", "--data", s(&data), "--out", s(&ab), "--workers", "2"]);
    assert_eq!(data_rows(&ab.join("ablation.csv")), 5);
    let bl = env.p("bl");
    ok(&["--config", &cfg, "baselines", "--data", s(&data), "--out", s(&bl)]);
    assert_eq!(data_rows(&bl.join("baselines.csv")), 4);
}

/// Raw CMI-PB-shaped tables for `n` subjects.
fn write_raw(dir: &Path, n: usize, leak: bool, skip_cytokine_d1: bool) {
    std::fs::create_dir_all(dir).unwrap();
    let ids: Vec<String> = (0..n).map(|i| format!("P{i:03}")).collect();
    let mut subjects = String::from("subject_id,cohort_year,infancy_vac,sex\n");
    for (i, id) in ids.iter().enumerate() {
        let vac = if i % 2 == 0 { "wP" } else { "aP" };
        let sex = if i % 3 == 0 { "F" } else { "M" };
        subjects.push_str(&format!("{id},{},{vac},{sex}\n", 2020 + i % 3));
    }
    std::fs::write(dir.join("subjects.csv"), subjects).unwrap();
    let table = |name: &str, day: u32, features: &[&str]| {
        let mut text = format!("subject_id,{}\n", features.join(","));
        for (i, id) in ids.iter().enumerate() {
            let vals: Vec<String> = features
                .iter()
                .enumerate()
                .map(|(j, _)| {
                    let v = 1.0 + ((i * 7 + j * 3 + day as usize * 5) % 11) as f64 + 0.1 * i as f64;
                    format!("{v}")
                })
                .collect();
            text.push_str(&format!("{id},{}\n", vals.join(",")));
        }
        std::fs::write(dir.join(format!("{name}_d{day}.csv")), text).unwrap();
    };
    for day in [0, 3, 7, 14, 30, 120] {
        table("antibody", day, &["IgG-PT", "IgG1-PT", "IgG2-PT", "IgG3-PT", "IgG4-PT", "IgG-FHA", "IgG-PRN"]);
    }
    let cyto: &[&str] = if leak { &["IL6", "TNF", "IgG-PT"] } else { &["IL6", "TNF"] };
    for day in [0, 1, 7, 14] {
        if !(skip_cytokine_d1 && day == 1) {
            table("cytokine", day, cyto);
        }
    }
    for day in [0, 1, 3, 14] {
        table("cell", day, &["Monocytes", "Tcells"]);
    }
    for day in [0, 7, 14] {
        table("gene", day, &["G1", "G2", "G3", "G4", "G5"]);
    }
}

fn prepare_cfg(env: &Env) -> String {
    let p = env.p("prep.json");
    std::fs::write(&p, r#"{"prepare": {"gene_top_k": 4}}"#).unwrap();
    s(&p).to_string()
}

#[test]
fn prepare_compliant_input() {
    let env = Env::new();
    let raw = env.p("raw");
    write_raw(&raw, 20, false, false);
    let out = env.p("prepared");
    ok(&["--config", &prepare_cfg(&env), "prepare", "--raw", s(&raw), "--out", s(&out)]);
    let audit = json(&out.join("audit.json"));
    assert_eq!(audit["passed"], true);
    for m in ["antibody", "cell", "cytokine", "gene"] {
        assert!(out.join(format!("features/{m}.csv")).exists());
    }
    let header = std::fs::read_to_string(out.join("features/antibody.csv")).unwrap();
    let header = header.lines().next().unwrap();
    assert!(!header.contains("PT_d"), "{header}");
    assert!(!header.contains("_d14"));
    assert!(header.contains("IgG-FHA_d30"));
    let gene = std::fs::read_to_string(out.join("features/gene.csv")).unwrap();
    assert_eq!(gene.lines().next().unwrap().split(',').count(), 5);
    assert_eq!(data_rows(&out.join("labels.csv")), 20);

    // raw-feature baselines run on the prepared directory
    let bl = env.p("bl");
    ok(&["--config", &env.cfg(), "baselines", "--data", s(&out), "--out", s(&bl)]);
    assert!(std::fs::read_to_string(bl.join("baselines.csv")).unwrap().contains(",raw,"));
}

#[test]
fn prepare_flags_leaked_column() {
    let env = Env::new();
    let raw = env.p("raw");
    write_raw(&raw, 20, true, false);
    let out = env.p("prepared");
    let o = run(&["--config", &prepare_cfg(&env), "prepare", "--raw", s(&raw), "--out", s(&out)]);
    assert_eq!(o.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&o.stderr).contains("IgG-PT_d7"));
    let audit = json(&out.join("audit.json"));
    assert_eq!(audit["passed"], false);
    assert!(audit["findings"].to_string().contains("IgG-PT_d7"));
    assert!(!out.join("features").exists());

    let o = run(&[
        "--config",
        &prepare_cfg(&env),
        "prepare",
        "--raw",
        s(&raw),
        "--out",
        s(&env.p("forced")),
        "--allow-audit-failure",
    ]);
    assert!(o.status.success());
}

#[test]
fn prepare_missing_cytokine_day() {
    let env = Env::new();
    let raw = env.p("raw");
    write_raw(&raw, 20, false, true);
    let out = env.p("prepared");
    ok(&["--config", &prepare_cfg(&env), "prepare", "--raw", s(&raw), "--out", s(&out)]);
    let info = json(&out.join("prepare.json"));
    assert_eq!(info["excluded_per_modality"]["cytokine"], 20);
    assert_eq!(data_rows(&out.join("features/cytokine.csv")), 0);
}
