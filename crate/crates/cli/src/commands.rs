use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use immunofuse_core::data::Modality;
use immunofuse_core::eval::ablation::ablation_runner;
use immunofuse_core::eval::baselines::{run_baselines, BlockFill};
use immunofuse_core::eval::contribution::{contribution_analysis, degradation_sweep};
use immunofuse_core::eval::permutation::permutation_test;
use immunofuse_core::eval::report::{
    test_summary, write_ablation, write_baselines, write_contribution, write_degradation, write_json,
    write_permutation_null, write_predictions, EvalReport,
};
use immunofuse_core::eval::synth::{generate_synthetic_cohort, SyntheticSpec};
use immunofuse_core::eval::{evaluate, fit, Splits};
use immunofuse_core::features::prepare;
use immunofuse_core::io::{
    dataset_files, feature_path, feature_table_to_keyed, load_dataset, load_feature_dataset, read_raw_dir,
    read_subjects, write_dataset, write_keyed_matrix, write_labels, write_split, write_subjects, LoadedCohort,
    EMBEDDINGS_DIR, FEATURES_DIR, LABELS_FILE, SUBJECTS_FILE,
};
use immunofuse_core::model::{Checkpoint, ModelConfig, ModelParams};
use immunofuse_core::{Error, Result};
use serde_json::json;

use crate::cli::Command;
use crate::config::RunConfig;
use crate::manifest::{FileDigest, Manifest};

pub const CHECKPOINT_FILE: &str = "checkpoint.json";
pub const REPORT_FILE: &str = "report.json";

/// Folds command-line overrides into the configuration.
pub fn resolve(cmd: &Command, mut cfg: RunConfig) -> Result<RunConfig> {
    match cmd {
        Command::Train(a) => {
            if let Some(s) = a.seed {
                cfg.train.seed = s;
            }
        }
        Command::Bootstrap(a) => {
            if let Some(r) = a.resamples {
                cfg.bootstrap.resamples = r;
            }
            if let Some(s) = a.seed {
                cfg.bootstrap.seed = s;
            }
        }
        Command::Permute(a) => {
            if let Some(n) = a.n {
                cfg.permutation.n = n;
            }
            if let Some(w) = a.workers {
                cfg.permutation.workers = w;
                cfg.workers = w;
            }
            if let Some(s) = a.base_seed {
                cfg.permutation.base_seed = s;
            }
        }
        Command::Ablate(a) => {
            if let Some(w) = a.workers {
                cfg.workers = w;
            }
        }
        Command::Degrade(a) => {
            if let Some(r) = &a.rhos {
                cfg.degradation.rhos = r.clone();
            }
            if let Some(s) = a.mask_seed {
                cfg.degradation.mask_seed = s;
            }
        }
        _ => {}
    }
    cfg.validate()?;
    Ok(cfg)
}

fn seeds(cfg: &RunConfig) -> BTreeMap<String, u64> {
    BTreeMap::from([
        ("train".into(), cfg.train.seed),
        ("split".into(), cfg.split_seed),
        ("bootstrap".into(), cfg.bootstrap.seed),
        ("permutation_base".into(), cfg.permutation.base_seed),
        ("degradation_mask".into(), cfg.degradation.mask_seed),
        ("baselines".into(), cfg.baselines.seed),
        ("prepare_split".into(), cfg.prepare.split_seed),
    ])
}

fn config_value(cfg: &RunConfig) -> serde_json::Value {
    serde_json::to_value(cfg).unwrap_or(serde_json::Value::Null)
}

fn create_dir(dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))
}

fn load_data(dir: &Path, embed_dim: usize, cfg: &RunConfig) -> Result<LoadedCohort> {
    let loaded = load_dataset(dir, Some(embed_dim), cfg.split_seed)?;
    log::info!(
        "loaded {} subjects, missing rates {:?}",
        loaded.cohort.len(),
        loaded.cohort.missing_rates(&(0..loaded.cohort.len()).collect::<Vec<_>>())
    );
    Ok(loaded)
}

fn load_checkpoint(path: &Path) -> Result<(ModelConfig, ModelParams)> {
    Checkpoint::load(path)?.into_params()
}

/// Executes one command and writes its manifest. `cmd` must already have
/// absolute input paths.
pub fn run(cmd: &Command, cfg: &RunConfig) -> Result<()> {
    let out = cmd
        .out_dir()
        .ok_or_else(|| Error::config("command has no output directory"))?
        .clone();
    create_dir(&out)?;
    let mut inputs: Vec<PathBuf> = Vec::new();
    match cmd {
        Command::Prepare(a) => {
            let raw = read_raw_dir(&a.raw)?;
            let subjects = read_subjects(&a.raw.join(SUBJECTS_FILE))?;
            inputs.extend(raw_files(&a.raw)?);
            inputs.push(a.raw.join(SUBJECTS_FILE));
            let p = prepare(&raw, &cfg.prepare)?;
            write_json(&out.join("audit.json"), &p.audit)?;
            if !p.audit.passed {
                let cols: Vec<String> = p
                    .audit
                    .findings
                    .iter()
                    .map(|f| format!("{} {}: {}", f.modality, f.column.as_deref().unwrap_or("-"), f.reason))
                    .collect();
                if !a.allow_audit_failure {
                    return Err(Error::Audit(cols.join("; ")));
                }
                log::warn!("continuing past failed leakage audit: {}", cols.join("; "));
            }
            for t in &p.tables {
                write_keyed_matrix(&feature_path(&out, t.modality), &feature_table_to_keyed(t))?;
            }
            write_labels(&out.join(LABELS_FILE), &p.labels.rows)?;
            write_split(&out.join(immunofuse_core::io::SPLIT_FILE), &p.ids, &p.folds)?;
            write_subjects(&out.join(SUBJECTS_FILE), &subjects.into_values().collect::<Vec<_>>())?;
            let excluded: BTreeMap<String, usize> =
                p.excluded.iter().map(|(m, v)| (m.to_string(), v.len())).collect();
            write_json(
                &out.join("prepare.json"),
                &json!({
                    "peak_cutoff": p.labels.peak_cutoff,
                    "retention_cutoff": p.labels.retention_cutoff,
                    "dropped_without_peak": p.labels.dropped_without_peak,
                    "excluded_per_modality": excluded,
                    "feature_columns": p.tables.iter().map(|t| (t.modality.to_string(), t.n_cols())).collect::<BTreeMap<_, _>>(),
                }),
            )?;
        }
        Command::Synth(a) => {
            let mut spec = SyntheticSpec {
                embed_dim: cfg.model.embed_dim,
                ..SyntheticSpec::default()
            };
            if let Some(n) = a.n {
                spec.n = n;
            }
            if let Some(d) = a.embed_dim {
                spec.embed_dim = d;
            }
            if let Some(r) = &a.missing_rates {
                spec.missing_rates = r
                    .as_slice()
                    .try_into()
                    .map_err(|_| Error::config(format!("--missing-rates needs 4 values, got {}", r.len())))?;
            }
            if let Some(s) = a.signal {
                spec.signal = s;
            }
            if let Some(s) = a.noise_sd {
                spec.noise_sd = s;
            }
            if let Some(s) = a.seed {
                spec.seed = s;
            }
            let s = generate_synthetic_cohort(&spec)?;
            write_dataset(&out, &s.cohort, &s.label_rows())?;
            write_json(
                &out.join("synth.json"),
                &json!({ "spec": spec, "realized_spearman": s.realized_spearman }),
            )?;
        }
        Command::Train(a) => {
            let data = load_data(&a.data, cfg.model.embed_dim, cfg)?;
            inputs.extend(dataset_files(&a.data));
            let outcome = fit(&data.cohort, &cfg.model, &cfg.train)?;
            Checkpoint::new(&cfg.model, &outcome.params).save(&out.join(CHECKPOINT_FILE))?;
            write_json(&out.join("history.json"), &outcome.history)?;
        }
        Command::Evaluate(a) | Command::Bootstrap(crate::cli::BootstrapArgs { run: a, .. }) => {
            let (mcfg, params) = load_checkpoint(&a.checkpoint)?;
            let data = load_data(&a.data, mcfg.embed_dim, cfg)?;
            inputs.extend(dataset_files(&a.data));
            inputs.push(a.checkpoint.clone());
            let test = Splits::from_cohort(&data.cohort).test;
            let (summary, pred) = test_summary(
                &params,
                &mcfg,
                &data.cohort,
                &test,
                cfg.bootstrap.resamples,
                cfg.bootstrap.seed,
            )?;
            let mut report = EvalReport::new(config_value(cfg));
            report.test = Some(summary);
            report.write_json(&out.join(REPORT_FILE))?;
            write_predictions(&out.join("predictions.csv"), &data.cohort, &test, &pred)?;
        }
        Command::Permute(a) => {
            let data = load_data(&a.data, cfg.model.embed_dim, cfg)?;
            inputs.extend(dataset_files(&a.data));
            let outcome = fit(&data.cohort, &cfg.model, &cfg.train)?;
            let test = Splits::from_cohort(&data.cohort).test;
            let (observed, _) = evaluate(&outcome.params, &cfg.model, &data.cohort, &test, None)?;
            let result = permutation_test(&data.cohort, &cfg.model, &cfg.train, observed, &cfg.permutation)?;
            write_permutation_null(&out.join("permutation_null.csv"), &result)?;
            let mut report = EvalReport::new(config_value(cfg));
            report.permutation = Some(result);
            report.write_json(&out.join(REPORT_FILE))?;
        }
        Command::Ablate(a) => {
            let data = load_data(&a.data, cfg.model.embed_dim, cfg)?;
            inputs.extend(dataset_files(&a.data));
            let rows = ablation_runner(&data.cohort, &cfg.model, &cfg.train, cfg.bootstrap.seed, cfg.workers)?;
            write_ablation(&out.join("ablation.csv"), &rows)?;
            let mut report = EvalReport::new(config_value(cfg));
            report.ablation = Some(rows);
            report.write_json(&out.join(REPORT_FILE))?;
        }
        Command::LooKoo(a) => {
            let (mcfg, params) = load_checkpoint(&a.checkpoint)?;
            let data = load_data(&a.data, mcfg.embed_dim, cfg)?;
            inputs.extend(dataset_files(&a.data));
            inputs.push(a.checkpoint.clone());
            let test = Splits::from_cohort(&data.cohort).test;
            let r = contribution_analysis(&params, &mcfg, &data.cohort, &test)?;
            write_contribution(&out.join("loo_koo.csv"), &r)?;
            let mut report = EvalReport::new(config_value(cfg));
            report.contribution = Some(r);
            report.write_json(&out.join(REPORT_FILE))?;
        }
        Command::Degrade(a) => {
            let a = &a.run;
            let (mcfg, params) = load_checkpoint(&a.checkpoint)?;
            let data = load_data(&a.data, mcfg.embed_dim, cfg)?;
            inputs.extend(dataset_files(&a.data));
            inputs.push(a.checkpoint.clone());
            let test = Splits::from_cohort(&data.cohort).test;
            let r = degradation_sweep(
                &params,
                &mcfg,
                &data.cohort,
                &test,
                &cfg.degradation.rhos,
                cfg.degradation.mask_seed,
            )?;
            write_degradation(&out.join("degradation.csv"), &r)?;
            let mut report = EvalReport::new(config_value(cfg));
            report.degradation = Some(r);
            report.write_json(&out.join(REPORT_FILE))?;
        }
        Command::Baselines(a) => {
            inputs.extend(dataset_files(&a.data));
            let mut rows = Vec::new();
            if a.data.join(EMBEDDINGS_DIR).is_dir() {
                let d = load_dataset(&a.data, None, cfg.split_seed)?;
                let s = Splits::from_cohort(&d.cohort);
                rows.extend(run_baselines(&d.cohort, &s.train, &s.test, BlockFill::Zero, "embeddings", &cfg.baselines)?);
            }
            if a.data.join(FEATURES_DIR).is_dir() {
                let d = load_feature_dataset(&a.data, cfg.split_seed)?;
                let s = Splits::from_cohort(&d.cohort);
                rows.extend(run_baselines(&d.cohort, &s.train, &s.test, BlockFill::TrainMean, "raw", &cfg.baselines)?);
            }
            if rows.is_empty() {
                return Err(Error::data(format!(
                    "{}: neither {EMBEDDINGS_DIR}/ nor {FEATURES_DIR}/ found",
                    a.data.display()
                )));
            }
            write_baselines(&out.join("baselines.csv"), &rows)?;
            let mut report = EvalReport::new(config_value(cfg));
            report.baselines = Some(rows);
            report.write_json(&out.join(REPORT_FILE))?;
        }
        Command::Replay(_) => return Err(Error::config("replay cannot be nested")),
    }
    let mut manifest = Manifest::new(cmd.clone(), cfg.clone(), seeds(cfg));
    manifest.add_inputs(&inputs)?;
    manifest.collect_outputs(&out)?;
    manifest.save(&out)
}

fn raw_files(dir: &Path) -> Result<Vec<PathBuf>> {
    let mut files: Vec<PathBuf> = std::fs::read_dir(dir)
        .map_err(|e| Error::io(dir, e))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| {
            p.file_stem()
                .and_then(|s| s.to_str())
                .and_then(immunofuse_core::features::parse_column_name)
                .is_some_and(|(m, _)| m.parse::<Modality>().is_ok())
        })
        .collect();
    files.sort();
    Ok(files)
}

/// Differences between a recorded manifest and a re-run.
pub fn replay(manifest_path: &Path, out: &Path) -> Result<Vec<String>> {
    let recorded = Manifest::load(manifest_path)?;
    let mut diffs = Vec::new();
    for input in &recorded.inputs {
        match FileDigest::of(&input.path, input.path.clone()) {
            Ok(d) if d.sha256 == input.sha256 => {}
            Ok(_) => diffs.push(format!("input changed: {}", input.path.display())),
            Err(_) => diffs.push(format!("input missing: {}", input.path.display())),
        }
    }
    if !diffs.is_empty() {
        return Ok(diffs);
    }
    let mut cmd = recorded.command.clone();
    cmd.set_out_dir(out.to_path_buf());
    run(&cmd, &recorded.config)?;
    let fresh = Manifest::load(&out.join(crate::manifest::MANIFEST_FILE))?;
    let index = |m: &Manifest| -> BTreeMap<PathBuf, String> {
        m.outputs.iter().map(|d| (d.path.clone(), d.sha256.clone())).collect()
    };
    let (old, new) = (index(&recorded), index(&fresh));
    for (path, digest) in &old {
        match new.get(path) {
            Some(d) if d == digest => {}
            Some(_) => diffs.push(format!("output differs: {}", path.display())),
            None => diffs.push(format!("output not produced: {}", path.display())),
        }
    }
    for path in new.keys().filter(|p| !old.contains_key(*p)) {
        diffs.push(format!("unexpected output: {}", path.display()));
    }
    Ok(diffs)
}
