//! End-to-end stages (generate, pretrain, transfer, analyze), the files
//! they emit, and the manifest that makes a run reproducible.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use serde::Serialize;
use sha2::{Digest, Sha256};

use crate::analysis::{self, cca, ensemble_eval, evaluate, primary_metric, CcaSummary, Metrics, CCA_RIDGE};
use crate::config::{parse_pairs, PretrainSplit, RunConfig};
use crate::data::{derive_seed, Dataset, Split, Task};
use crate::error::{Error, Result};
use crate::models::{ArchDescriptor, ModelBundle};
use crate::partition::{pair_cases, CaseStats};
use crate::trainer::{pretrain, run_transfer, PretrainReport, TransferReport};

/// Version tag written at the top of every emitted text file.
pub const SCHEMA_VERSION: &str = "kdlab/1";
pub const MANIFEST_MAGIC: &str = "# kdlab-manifest v1";

pub fn arch_for(cfg: &RunConfig) -> ArchDescriptor {
    let d = &cfg.data;
    match d.task {
        Task::Classification => ArchDescriptor::classifier(d.dim, &cfg.hidden, d.classes),
        Task::DenseSeg => ArchDescriptor::dense(d.dim, &cfg.hidden, d.classes),
        Task::Saliency => ArchDescriptor::saliency(d.dim, &cfg.hidden),
    }
}

/// Loads the cached dataset when its [`DataSpec`] matches, else regenerates
/// (and refreshes the cache).
pub fn load_or_generate(cfg: &RunConfig) -> Result<Dataset> {
    if let Some(path) = &cfg.data_cache {
        if path.exists() {
            let cached = Dataset::load_cache(path)?;
            if cached.spec == cfg.data {
                return Ok(cached);
            }
        }
        let data = Dataset::generate(&cfg.data)?;
        data.save_cache(path)?;
        return Ok(data);
    }
    Dataset::generate(&cfg.data)
}

/// Train indices seen by model `i` during pretraining.
pub fn pretrain_indices(cfg: &RunConfig, data: &Dataset, i: usize) -> Vec<usize> {
    let train = data.split_indices(Split::Train);
    match cfg.pretrain_split {
        PretrainSplit::Shared => train,
        PretrainSplit::Disjoint => {
            let (n, k) = (train.len(), cfg.models);
            train[i * n / k..(i + 1) * n / k].to_vec()
        }
    }
}

/// Initializes and pretrains model `i` on its view and sample share.
pub fn pretrain_one(cfg: &RunConfig, data: &Dataset, i: usize) -> Result<(ModelBundle, PretrainReport)> {
    let views = cfg.views.masks(cfg.data.dim, cfg.models)?;
    let view = &views[i];
    let mut model = ModelBundle::init(format!("model{i}"), arch_for(cfg), derive_seed(cfg.seed, 100 + i as u64))?;
    let partial = view.iter().any(|&v| !v);
    if partial {
        model.restrict_inputs(view)?;
    }
    let pcfg = crate::trainer::TransferConfig {
        seed: derive_seed(cfg.seed, 200 + i as u64),
        ..cfg.pretrain.clone()
    };
    let report = pretrain(
        &mut model,
        data,
        &pretrain_indices(cfg, data, i),
        partial.then_some(view.as_slice()),
        &pcfg,
    )?;
    Ok((model, report))
}

pub fn pretrain_all(cfg: &RunConfig, data: &Dataset) -> Result<(Vec<ModelBundle>, Vec<PretrainReport>)> {
    (0..cfg.models)
        .map(|i| pretrain_one(cfg, data, i).map_err(|e| e.in_stage(format!("pretrain:{i}"))))
        .collect::<Result<Vec<_>>>()
        .map(|v| v.into_iter().unzip())
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct CcaPair {
    pub a: usize,
    pub b: usize,
    pub before: CcaSummary,
    pub after: CcaSummary,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct AnalysisReport {
    pub task: Task,
    pub metric: String,
    pub models: Vec<String>,
    /// Primary metric of the ensemble of the "before" models.
    pub ensemble: f64,
    pub before: Vec<Metrics>,
    pub after: Vec<Metrics>,
    /// Share of the ensemble headroom regained; absent when a model
    /// already matches the ensemble.
    pub recovered: Vec<Option<f64>>,
    pub cca: Vec<CcaPair>,
    pub cases_before: Option<CaseStats>,
    pub cases_after: Option<CaseStats>,
    pub case_fractions_before: Option<[f64; 4]>,
    pub case_fractions_after: Option<[f64; 4]>,
}

/// Tap features of every model on the eval split, one row per sample or pixel.
fn eval_features(models: &[ModelBundle], data: &Dataset) -> Result<Vec<crate::autodiff::Tensor>> {
    let batch = data.split_batch(Split::Eval);
    models.iter().map(|m| Ok(m.infer(&batch.x)?.1)).collect()
}

pub fn cca_between(a: &crate::autodiff::Tensor, b: &crate::autodiff::Tensor, k: usize) -> Result<CcaSummary> {
    let k = if k == 0 { a.last_dim().min(b.last_dim()) } else { k };
    cca(a, b, k, CCA_RIDGE)
}

fn cases(models: &[ModelBundle], data: &Dataset) -> Result<Option<CaseStats>> {
    if models.len() != 2 || data.task() != Task::Classification {
        return Ok(None);
    }
    let batch = data.split_batch(Split::Eval);
    let (z1, _) = models[0].infer(&batch.x)?;
    let (z2, _) = models[1].infer(&batch.x)?;
    Ok(Some(pair_cases(&z1, &z2, batch.labels()?)?))
}

/// Compares matching "before" and "after" model sets on the eval split.
pub fn analyze(cfg: &RunConfig, before: &[ModelBundle], after: &[ModelBundle], data: &Dataset) -> Result<AnalysisReport> {
    if before.len() != after.len() || before.len() < 2 {
        return Err(Error::Config(format!(
            "analysis needs two equal model sets of at least 2, got {} and {}",
            before.len(),
            after.len()
        )));
    }
    let metric = primary_metric(data.task());
    let ensemble = ensemble_eval(before, data, Split::Eval)?[metric];
    let b: Vec<Metrics> = before.iter().map(|m| evaluate(m, data, Split::Eval)).collect::<Result<_>>()?;
    let a: Vec<Metrics> = after.iter().map(|m| evaluate(m, data, Split::Eval)).collect::<Result<_>>()?;
    let recovered = b
        .iter()
        .zip(&a)
        .map(|(mb, ma)| match analysis::recovered(mb[metric], ma[metric], ensemble) {
            Ok(r) => Ok(Some(r)),
            Err(Error::Degenerate(_)) => Ok(None),
            Err(e) => Err(e),
        })
        .collect::<Result<_>>()?;
    let (fb, fa) = (eval_features(before, data)?, eval_features(after, data)?);
    let mut pairs = Vec::new();
    for i in 0..before.len() {
        for j in i + 1..before.len() {
            pairs.push(CcaPair {
                a: i,
                b: j,
                before: cca_between(&fb[i], &fb[j], cfg.cca_k)?,
                after: cca_between(&fa[i], &fa[j], cfg.cca_k)?,
            });
        }
    }
    let cases_before = cases(before, data)?;
    let cases_after = cases(after, data)?;
    Ok(AnalysisReport {
        task: data.task(),
        metric: metric.to_string(),
        models: before.iter().map(|m| m.name.clone()).collect(),
        ensemble,
        before: b,
        after: a,
        recovered,
        cca: pairs,
        case_fractions_before: cases_before.map(|c| c.fractions()),
        case_fractions_after: cases_after.map(|c| c.fractions()),
        cases_before,
        cases_after,
    })
}

/// JSON whose first line carries the schema version.
pub fn to_json<T: Serialize>(kind: &str, value: &T) -> Result<String> {
    let body = serde_json::to_string_pretty(value).map_err(|e| Error::Contract(e.to_string()))?;
    Ok(format!(
        "{{\"schema_version\": \"{SCHEMA_VERSION}/{kind}\",\n  \"{kind}\": {}\n}}\n",
        body.replace('\n', "\n  ")
    ))
}

fn metric_keys(rows: &[&Metrics]) -> Vec<String> {
    let mut keys: Vec<String> = rows.iter().flat_map(|m| m.keys().cloned()).collect();
    keys.sort();
    keys.dedup();
    keys
}

fn fmt_metrics(m: &Metrics, keys: &[String]) -> String {
    keys.iter()
        .map(|k| m.get(k).map_or(String::new(), |v| v.to_string()))
        .collect::<Vec<_>>()
        .join(",")
}

/// One row per model and epoch.
pub fn pretrain_csv(reports: &[PretrainReport]) -> String {
    let rows: Vec<&Metrics> = reports.iter().flat_map(|r| r.epochs.iter().map(|e| &e.metrics)).collect();
    let keys = metric_keys(&rows);
    let mut out = format!("# schema: {SCHEMA_VERSION}/pretrain-metrics\nmodel,epoch,train_loss,{}\n", keys.join(","));
    for r in reports {
        for e in &r.epochs {
            let _ = writeln!(out, "{},{},{},{}", r.model, e.epoch, e.train_loss, fmt_metrics(&e.metrics, &keys));
        }
    }
    out
}

/// One row per epoch and model; epoch 0 holds the baseline.
pub fn transfer_csv(report: &TransferReport) -> String {
    let mut rows: Vec<&Metrics> = report.baseline.iter().collect();
    rows.extend(report.history.iter().flat_map(|h| h.metrics.iter()));
    let keys = metric_keys(&rows);
    let mut out = format!(
        "# schema: {SCHEMA_VERSION}/transfer-metrics\nepoch,model,task_loss,dist_loss,teacher_fraction,{}\n",
        keys.join(",")
    );
    for (i, m) in report.baseline.iter().enumerate() {
        let _ = writeln!(out, "0,{},,,,{}", report.models[i], fmt_metrics(m, &keys));
    }
    for h in &report.history {
        for (i, m) in h.metrics.iter().enumerate() {
            let frac = h.teacher_fractions.get(i).map_or(String::new(), f64::to_string);
            let task = h.task_loss.get(i).map_or(String::new(), f64::to_string);
            let _ = writeln!(out, "{},{},{task},{},{frac},{}", h.epoch, report.models[i], h.dist_loss, fmt_metrics(m, &keys));
        }
    }
    out
}

pub fn sha256_file(path: &Path) -> Result<String> {
    Ok(hex::encode(Sha256::digest(std::fs::read(path)?)))
}

/// Writes `bytes` under `out` and records the artifact.
struct Writer<'a> {
    out: &'a Path,
    written: Vec<PathBuf>,
}

impl Writer<'_> {
    fn put(&mut self, rel: &str, bytes: &[u8]) -> Result<PathBuf> {
        let path = self.out.join(rel);
        if let Some(dir) = path.parent() {
            std::fs::create_dir_all(dir)?;
        }
        std::fs::write(&path, bytes)?;
        self.written.push(path.clone());
        Ok(path)
    }

    fn model(&mut self, rel: &str, m: &ModelBundle) -> Result<PathBuf> {
        self.put(rel, &m.to_container().to_bytes())
    }
}

/// `pretrain`: trains `model.count` models and writes checkpoints,
/// `metrics.csv` and `report.json` under `out/`.
pub fn cmd_pretrain(cfg: &RunConfig) -> Result<Vec<PathBuf>> {
    let data = load_or_generate(cfg)?;
    let (models, reports) = pretrain_all(cfg, &data)?;
    let mut w = Writer { out: &cfg.out, written: Vec::new() };
    for m in &models {
        w.model(&format!("{}.ckpt", m.name), m)?;
    }
    if cfg.emit_csv {
        w.put("metrics.csv", pretrain_csv(&reports).as_bytes())?;
    }
    w.put("report.json", to_json("pretrain", &reports)?.as_bytes())?;
    Ok(w.written)
}

fn load_models(paths: &[PathBuf], what: &str) -> Result<Vec<ModelBundle>> {
    if paths.is_empty() {
        return Err(Error::Config(format!("no {what} checkpoints configured")));
    }
    paths
        .iter()
        .map(|p| {
            if !p.is_file() {
                return Err(Error::Config(format!("{what}: checkpoint {} does not exist", p.display())));
            }
            ModelBundle::load(p)
        })
        .collect()
}

fn transfer_outputs(w: &mut Writer<'_>, cfg: &RunConfig, models: &[ModelBundle], report: &TransferReport) -> Result<()> {
    for m in models {
        w.model(&format!("{}.transferred.ckpt", m.name), m)?;
    }
    if cfg.emit_csv {
        w.put("metrics.csv", transfer_csv(report).as_bytes())?;
    }
    w.put("report.json", to_json("transfer", report)?.as_bytes())?;
    Ok(())
}

/// `transfer`: runs the configured method on `checkpoints.models`; the
/// input checkpoints are left untouched.
pub fn cmd_transfer(cfg: &RunConfig) -> Result<Vec<PathBuf>> {
    let models = load_models(&cfg.checkpoints, "checkpoints.models")?;
    let data = load_or_generate(cfg)?;
    let (trained, report) = run_transfer(&cfg.transfer, models, &data)?;
    let mut w = Writer { out: &cfg.out, written: Vec::new() };
    transfer_outputs(&mut w, cfg, &trained, &report)?;
    Ok(w.written)
}

/// `analyze`: compares `checkpoints.models` (before) with
/// `checkpoints.after`, writing `analysis.json`.
pub fn cmd_analyze(cfg: &RunConfig) -> Result<Vec<PathBuf>> {
    let before = load_models(&cfg.checkpoints, "checkpoints.models")?;
    let after = load_models(&cfg.after, "checkpoints.after")?;
    let data = load_or_generate(cfg)?;
    let report = analyze(cfg, &before, &after, &data)?;
    let mut w = Writer { out: &cfg.out, written: Vec::new() };
    w.put("analysis.json", to_json("analysis", &report)?.as_bytes())?;
    Ok(w.written)
}

/// Everything needed to rerun an experiment and check its outputs.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Manifest {
    pub config: BTreeMap<String, String>,
    pub stages: Vec<String>,
    /// `(path relative to the output directory, sha256)`.
    pub artifacts: Vec<(String, String)>,
}

impl Manifest {
    pub fn to_text(&self) -> String {
        let mut out = format!("{MANIFEST_MAGIC}\n[config]\n");
        for (k, v) in &self.config {
            let _ = writeln!(out, "{k}={v}");
        }
        out.push_str("[stages]\n");
        for s in &self.stages {
            let _ = writeln!(out, "{s}");
        }
        out.push_str("[artifacts]\n");
        for (p, h) in &self.artifacts {
            let _ = writeln!(out, "{h}  {p}");
        }
        out
    }

    pub fn parse(text: &str, origin: &str) -> Result<Self> {
        let bad = |detail: String| Error::Format {
            path: origin.to_string(),
            detail,
        };
        if !text.starts_with(MANIFEST_MAGIC) {
            return Err(bad("missing manifest header".into()));
        }
        let mut section = "";
        let mut config_text = String::new();
        let mut stages = Vec::new();
        let mut artifacts = Vec::new();
        for line in text.lines().skip(1) {
            match line {
                "[config]" | "[stages]" | "[artifacts]" => section = line,
                "" => {}
                _ => match section {
                    "[config]" => {
                        config_text.push_str(line);
                        config_text.push('\n');
                    }
                    "[stages]" => stages.push(line.to_string()),
                    "[artifacts]" => {
                        let (h, p) = line
                            .split_once("  ")
                            .ok_or_else(|| bad(format!("bad artifact line '{line}'")))?;
                        artifacts.push((p.to_string(), h.to_string()));
                    }
                    _ => return Err(bad(format!("line outside a section: '{line}'"))),
                },
            }
        }
        Ok(Manifest {
            config: parse_pairs(&config_text, origin)?,
            stages,
            artifacts,
        })
    }

    pub fn read(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::Config(format!("cannot read manifest {}: {e}", path.display())))?;
        Self::parse(&text, &path.display().to_string())
    }

    /// Artifacts under `out` whose current hash differs from the record.
    pub fn mismatches(&self, out: &Path) -> Result<Vec<String>> {
        let mut bad = Vec::new();
        for (p, h) in &self.artifacts {
            let path = out.join(p);
            if !path.exists() || sha256_file(&path)? != *h {
                bad.push(p.clone());
            }
        }
        Ok(bad)
    }
}

/// Stage names of a full experiment with `k` models.
pub fn stage_names(k: usize) -> Vec<String> {
    let mut s = vec!["generate".to_string()];
    s.extend((0..k).map(|i| format!("pretrain:{i}")));
    s.push("transfer".into());
    s.push("analyze".into());
    s
}

/// `experiment`: generate → pretrain × K → transfer → analyze, then
/// `manifest.txt` with every artifact's hash.
pub fn cmd_experiment(cfg: &RunConfig) -> Result<Manifest> {
    let mut w = Writer { out: &cfg.out, written: Vec::new() };
    let data = Dataset::generate(&cfg.data).map_err(|e| e.in_stage("generate"))?;
    w.put("dataset.bin", &data.to_container().to_bytes())?;

    let mut models = Vec::new();
    let mut reports = Vec::new();
    for i in 0..cfg.models {
        let stage = format!("pretrain:{i}");
        let (m, r) = pretrain_one(cfg, &data, i).map_err(|e| e.in_stage(&stage))?;
        w.model(&format!("pretrain/{}.ckpt", m.name), &m)?;
        models.push(m);
        reports.push(r);
    }
    if cfg.emit_csv {
        w.put("pretrain/metrics.csv", pretrain_csv(&reports).as_bytes())?;
    }
    w.put("pretrain/report.json", to_json("pretrain", &reports)?.as_bytes())?;

    let (trained, report) = run_transfer(&cfg.transfer, models.clone(), &data).map_err(|e| e.in_stage("transfer"))?;
    let mut tw = Writer { out: &cfg.out.join("transfer"), written: Vec::new() };
    transfer_outputs(&mut tw, cfg, &trained, &report)?;
    w.written.extend(tw.written);

    let analysis = analyze(cfg, &models, &trained, &data).map_err(|e| e.in_stage("analyze"))?;
    w.put("analyze/analysis.json", to_json("analysis", &analysis)?.as_bytes())?;

    let mut artifacts = Vec::new();
    for p in &w.written {
        let rel = p.strip_prefix(&cfg.out).unwrap_or(p).to_string_lossy().replace('\\', "/");
        artifacts.push((rel, sha256_file(p)?));
    }
    let manifest = Manifest {
        config: cfg.to_pairs().into_iter().collect(),
        stages: stage_names(cfg.models),
        artifacts,
    };
    std::fs::write(cfg.out.join("manifest.txt"), manifest.to_text())?;
    Ok(manifest)
}
