//! Run configuration: flat `section.key=value` text with command-line
//! overrides. Unknown keys are rejected; relative paths are resolved
//! against the working directory at load time.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use crate::data::{DataSpec, Task, ViewPolicy};
use crate::error::{Error, Result};
use crate::losses::KlDirection;
use crate::partition::{PartitionRule, TieRule};
use crate::trainer::{Method, TransferConfig};

/// Which training samples each model sees during pretraining.
#[derive(Clone, Copy, Debug, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum PretrainSplit {
    /// Every model trains on the whole train split.
    Shared,
    /// Model `i` of `k` trains on the `i`-th contiguous chunk.
    Disjoint,
}

impl FromStr for PretrainSplit {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "shared" => Ok(PretrainSplit::Shared),
            "disjoint" => Ok(PretrainSplit::Disjoint),
            other => Err(Error::Config(format!("unknown pretrain split '{other}'"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct RunConfig {
    pub seed: u64,
    pub out: PathBuf,
    pub data: DataSpec,
    pub data_cache: Option<PathBuf>,
    pub hidden: Vec<usize>,
    pub models: usize,
    pub views: ViewPolicy,
    pub pretrain: TransferConfig,
    pub pretrain_split: PretrainSplit,
    pub transfer: TransferConfig,
    /// Checkpoints consumed by `transfer` (and `analyze` as the "before" set).
    pub checkpoints: Vec<PathBuf>,
    /// Checkpoints `analyze` compares against `checkpoints`.
    pub after: Vec<PathBuf>,
    /// Canonical components kept; 0 keeps all.
    pub cca_k: usize,
    pub emit_csv: bool,
}

/// Every accepted key, in the order [`RunConfig::to_pairs`] writes them.
pub const KEYS: &[&str] = &[
    "run.seed",
    "run.out",
    "data.task",
    "data.seed",
    "data.n_train",
    "data.n_eval",
    "data.dim",
    "data.classes",
    "data.height",
    "data.width",
    "data.noise",
    "data.strong_margin",
    "data.weak_margin",
    "data.object_fraction",
    "data.fixations",
    "data.cache",
    "model.hidden",
    "model.count",
    "views.policy",
    "pretrain.epochs",
    "pretrain.lr",
    "pretrain.batch_size",
    "pretrain.weight_decay",
    "pretrain.split",
    "transfer.method",
    "transfer.epochs",
    "transfer.lr",
    "transfer.batch_size",
    "transfer.weight_decay",
    "transfer.temperature",
    "transfer.partition_rule",
    "transfer.tie_rule",
    "transfer.kl_direction",
    "loss.lambda_ce",
    "loss.lambda_dice",
    "loss.lambda_cls_correct",
    "loss.lambda_cls_incorrect",
    "loss.dice_eps",
    "loss.cc_floor",
    "checkpoints.models",
    "checkpoints.after",
    "analyze.cca_k",
    "emit.csv",
];

/// Parses `key=value` lines. `#` starts a comment line; a `[section]`
/// line prefixes the following bare keys.
pub fn parse_pairs(text: &str, origin: &str) -> Result<BTreeMap<String, String>> {
    let mut out = BTreeMap::new();
    let mut section = String::new();
    for (no, raw) in text.lines().enumerate() {
        let line = raw.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        if let Some(name) = line.strip_prefix('[').and_then(|l| l.strip_suffix(']')) {
            section = name.trim().to_string();
            continue;
        }
        let (k, v) = line.split_once('=').ok_or_else(|| {
            Error::Config(format!("{origin}:{}: expected key=value, got '{line}'", no + 1))
        })?;
        let key = match (section.as_str(), k.trim()) {
            ("", k) => k.to_string(),
            (s, k) => format!("{s}.{k}"),
        };
        out.insert(key, v.trim().to_string());
    }
    Ok(out)
}

fn parse<T: FromStr>(key: &str, v: &str) -> Result<T> {
    v.parse()
        .map_err(|_| Error::Config(format!("{key}: cannot parse '{v}'")))
}

fn parse_enum<T: FromStr<Err = Error>>(key: &str, v: &str) -> Result<T> {
    v.parse().map_err(|e: Error| Error::Config(format!("{key}: {e}")))
}

fn parse_list<T: FromStr>(key: &str, v: &str) -> Result<Vec<T>> {
    v.split(',')
        .map(str::trim)
        .filter(|s| !s.is_empty())
        .map(|s| parse(key, s))
        .collect()
}

fn parse_bool(key: &str, v: &str) -> Result<bool> {
    match v {
        "true" | "1" | "yes" => Ok(true),
        "false" | "0" | "no" => Ok(false),
        _ => Err(Error::Config(format!("{key}: expected true or false, got '{v}'"))),
    }
}

fn resolve(p: &str) -> Result<PathBuf> {
    Ok(std::path::absolute(Path::new(p))?)
}

fn join<T: ToString>(items: &[T]) -> String {
    items.iter().map(T::to_string).collect::<Vec<_>>().join(",")
}

impl RunConfig {
    /// Builds a config from already-merged key/value pairs.
    pub fn from_pairs(pairs: &BTreeMap<String, String>) -> Result<Self> {
        if let Some(bad) = pairs.keys().find(|k| !KEYS.contains(&k.as_str())) {
            return Err(Error::Config(format!("unknown key '{bad}'")));
        }
        let get = |k: &str| pairs.get(k).map(String::as_str);
        let seed = get("run.seed").map(|v| parse("run.seed", v)).transpose()?.unwrap_or(0);
        let task: Task = get("data.task").map(|v| parse_enum("data.task", v)).transpose()?.unwrap_or(Task::Classification);
        let data_seed = get("data.seed").map(|v| parse("data.seed", v)).transpose()?.unwrap_or(seed);
        let mut data = match task {
            Task::Classification => DataSpec::classification(data_seed),
            Task::DenseSeg => DataSpec::dense(data_seed),
            Task::Saliency => DataSpec::saliency(data_seed),
        };
        let mut pretrain = TransferConfig {
            seed,
            ..TransferConfig::pretrain()
        };
        let mut transfer = TransferConfig {
            seed,
            partition_rule: if task == Task::Classification {
                PartitionRule::Confidence
            } else {
                PartitionRule::Loss
            },
            ..TransferConfig::default()
        };
        let mut cfg = RunConfig {
            seed,
            out: resolve("kdlab-out")?,
            data: data.clone(),
            data_cache: None,
            hidden: vec![32],
            models: 2,
            views: ViewPolicy::Complementary,
            pretrain: pretrain.clone(),
            pretrain_split: PretrainSplit::Shared,
            transfer: transfer.clone(),
            checkpoints: Vec::new(),
            after: Vec::new(),
            cca_k: 0,
            emit_csv: true,
        };
        for (key, v) in pairs {
            let v = v.as_str();
            let k = key.as_str();
            match k {
                "run.seed" | "data.task" | "data.seed" => {}
                "run.out" => cfg.out = resolve(v)?,
                "data.n_train" => data.n_train = parse(k, v)?,
                "data.n_eval" => data.n_eval = parse(k, v)?,
                "data.dim" => data.dim = parse(k, v)?,
                "data.classes" => data.classes = parse(k, v)?,
                "data.height" => data.height = parse(k, v)?,
                "data.width" => data.width = parse(k, v)?,
                "data.noise" => data.noise = parse(k, v)?,
                "data.strong_margin" => data.strong_margin = parse(k, v)?,
                "data.weak_margin" => data.weak_margin = parse(k, v)?,
                "data.object_fraction" => data.object_fraction = parse(k, v)?,
                "data.fixations" => data.fixations = parse(k, v)?,
                "data.cache" => cfg.data_cache = Some(resolve(v)?),
                "model.hidden" => cfg.hidden = parse_list(k, v)?,
                "model.count" => cfg.models = parse(k, v)?,
                "views.policy" => cfg.views = parse_enum(k, v)?,
                "pretrain.epochs" => pretrain.epochs = parse(k, v)?,
                "pretrain.lr" => pretrain.lr = parse(k, v)?,
                "pretrain.batch_size" => pretrain.batch_size = parse(k, v)?,
                "pretrain.weight_decay" => pretrain.weight_decay = parse(k, v)?,
                "pretrain.split" => cfg.pretrain_split = parse_enum(k, v)?,
                "transfer.method" => transfer.method = parse_enum::<Method>(k, v)?,
                "transfer.epochs" => transfer.epochs = parse(k, v)?,
                "transfer.lr" => transfer.lr = parse(k, v)?,
                "transfer.batch_size" => transfer.batch_size = parse(k, v)?,
                "transfer.weight_decay" => transfer.weight_decay = parse(k, v)?,
                "transfer.temperature" => transfer.loss.temperature = parse(k, v)?,
                "transfer.partition_rule" => transfer.partition_rule = parse_enum::<PartitionRule>(k, v)?,
                "transfer.tie_rule" => transfer.tie_rule = parse_enum::<TieRule>(k, v)?,
                "transfer.kl_direction" => transfer.kl_direction = parse_enum::<KlDirection>(k, v)?,
                "loss.lambda_ce" => transfer.loss.lambda_ce = parse(k, v)?,
                "loss.lambda_dice" => transfer.loss.lambda_dice = parse(k, v)?,
                "loss.lambda_cls_correct" => transfer.loss.lambda_cls_correct = parse(k, v)?,
                "loss.lambda_cls_incorrect" => transfer.loss.lambda_cls_incorrect = parse(k, v)?,
                "loss.dice_eps" => transfer.loss.dice_eps = parse(k, v)?,
                "loss.cc_floor" => transfer.loss.cc_floor = parse(k, v)?,
                "checkpoints.models" => cfg.checkpoints = parse_list::<String>(k, v)?.iter().map(|p| resolve(p)).collect::<Result<_>>()?,
                "checkpoints.after" => cfg.after = parse_list::<String>(k, v)?.iter().map(|p| resolve(p)).collect::<Result<_>>()?,
                "analyze.cca_k" => cfg.cca_k = parse(k, v)?,
                "emit.csv" => cfg.emit_csv = parse_bool(k, v)?,
                _ => unreachable!("key list checked above"),
            }
        }
        // task losses are shared between the phases
        pretrain.loss = transfer.loss;
        cfg.data = data;
        cfg.pretrain = pretrain;
        cfg.transfer = transfer;
        cfg.validate()?;
        Ok(cfg)
    }

    /// Reads a config file (or the config section of a manifest) and
    /// applies `overrides` on top.
    pub fn load(path: &Path, overrides: &[(String, String)]) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| {
            Error::Config(format!("cannot read config {}: {e}", path.display()))
        })?;
        let mut pairs = if text.starts_with(crate::pipeline::MANIFEST_MAGIC) {
            crate::pipeline::Manifest::parse(&text, &path.display().to_string())?.config
        } else {
            parse_pairs(&text, &path.display().to_string())?
        };
        pairs.extend(overrides.iter().cloned());
        Self::from_pairs(&pairs)
    }

    pub fn from_overrides(overrides: &[(String, String)]) -> Result<Self> {
        Self::from_pairs(&overrides.iter().cloned().collect())
    }

    pub fn validate(&self) -> Result<()> {
        self.data.validate()?;
        if self.models == 0 {
            return Err(Error::Config("model.count must be at least 1".into()));
        }
        self.pretrain.validate_common()?;
        self.views.masks(self.data.dim, self.models)?;
        Ok(())
    }

    /// The resolved configuration as `key=value` pairs; loading them back
    /// yields an equal config.
    pub fn to_pairs(&self) -> Vec<(String, String)> {
        let d = &self.data;
        let (p, t) = (&self.pretrain, &self.transfer);
        let paths = |v: &[PathBuf]| v.iter().map(|p| p.display().to_string()).collect::<Vec<_>>().join(",");
        let mut out: Vec<(&str, String)> = vec![
            ("run.seed", self.seed.to_string()),
            ("run.out", self.out.display().to_string()),
            ("data.task", d.task.to_string()),
            ("data.n_train", d.n_train.to_string()),
            ("data.n_eval", d.n_eval.to_string()),
            ("data.dim", d.dim.to_string()),
            ("data.classes", d.classes.to_string()),
            ("data.height", d.height.to_string()),
            ("data.width", d.width.to_string()),
            ("data.noise", d.noise.to_string()),
            ("data.strong_margin", d.strong_margin.to_string()),
            ("data.weak_margin", d.weak_margin.to_string()),
            ("data.object_fraction", d.object_fraction.to_string()),
            ("data.fixations", d.fixations.to_string()),
            ("model.hidden", join(&self.hidden)),
            ("model.count", self.models.to_string()),
            ("views.policy", serde_plain(&self.views)),
            ("pretrain.epochs", p.epochs.to_string()),
            ("pretrain.lr", p.lr.to_string()),
            ("pretrain.batch_size", p.batch_size.to_string()),
            ("pretrain.weight_decay", p.weight_decay.to_string()),
            ("pretrain.split", serde_plain(&self.pretrain_split)),
            ("transfer.method", t.method.to_string()),
            ("transfer.epochs", t.epochs.to_string()),
            ("transfer.lr", t.lr.to_string()),
            ("transfer.batch_size", t.batch_size.to_string()),
            ("transfer.weight_decay", t.weight_decay.to_string()),
            ("transfer.temperature", t.loss.temperature.to_string()),
            ("transfer.partition_rule", serde_plain(&t.partition_rule)),
            ("transfer.tie_rule", serde_plain(&t.tie_rule)),
            ("transfer.kl_direction", t.kl_direction.to_string()),
            ("loss.lambda_ce", t.loss.lambda_ce.to_string()),
            ("loss.lambda_dice", t.loss.lambda_dice.to_string()),
            ("loss.lambda_cls_correct", t.loss.lambda_cls_correct.to_string()),
            ("loss.lambda_cls_incorrect", t.loss.lambda_cls_incorrect.to_string()),
            ("loss.dice_eps", t.loss.dice_eps.to_string()),
            ("loss.cc_floor", t.loss.cc_floor.to_string()),
            ("analyze.cca_k", self.cca_k.to_string()),
            ("emit.csv", self.emit_csv.to_string()),
        ];
        if d.seed != self.seed {
            out.push(("data.seed", d.seed.to_string()));
        }
        if let Some(c) = &self.data_cache {
            out.push(("data.cache", c.display().to_string()));
        }
        if !self.checkpoints.is_empty() {
            out.push(("checkpoints.models", paths(&self.checkpoints)));
        }
        if !self.after.is_empty() {
            out.push(("checkpoints.after", paths(&self.after)));
        }
        out.into_iter().map(|(k, v)| (k.to_string(), v)).collect()
    }
}

/// Kebab-case name of a unit enum variant via its serde representation.
fn serde_plain<T: serde::Serialize>(v: &T) -> String {
    match serde_json::to_value(v) {
        Ok(serde_json::Value::String(s)) => s,
        other => panic!("not a unit variant: {other:?}"),
    }
}

/// Splits `key=value` from a `--set` argument.
pub fn parse_override(arg: &str) -> Result<(String, String)> {
    let (k, v) = arg
        .split_once('=')
        .ok_or_else(|| Error::Config(format!("--set expects key=value, got '{arg}'")))?;
    Ok((k.trim().to_string(), v.trim().to_string()))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn pairs(items: &[(&str, &str)]) -> BTreeMap<String, String> {
        items.iter().map(|(k, v)| (k.to_string(), v.to_string())).collect()
    }

    #[test]
    fn sections_prefix_bare_keys() {
        let p = parse_pairs("# c\nrun.seed = 3\n[transfer]\nepochs=2\n", "t").unwrap();
        assert_eq!(p["run.seed"], "3");
        assert_eq!(p["transfer.epochs"], "2");
    }

    #[test]
    fn unknown_key_is_a_config_error() {
        let err = RunConfig::from_pairs(&pairs(&[("transfer.epoch", "3")])).unwrap_err();
        assert!(matches!(err, Error::Config(ref m) if m.contains("transfer.epoch")));
        assert_eq!(err.exit_code(), 2);
    }

    #[test]
    fn bad_value_names_the_key() {
        let err = RunConfig::from_pairs(&pairs(&[("transfer.lr", "fast")])).unwrap_err();
        assert!(err.to_string().contains("transfer.lr"));
    }

    #[test]
    fn task_selects_defaults() {
        let cfg = RunConfig::from_pairs(&pairs(&[("data.task", "dense-seg"), ("run.seed", "4")])).unwrap();
        assert_eq!(cfg.data.task, Task::DenseSeg);
        assert_eq!(cfg.data.seed, 4);
        assert_eq!(cfg.transfer.partition_rule, PartitionRule::Loss);
        assert_eq!(cfg.pretrain.lr, 1e-3);
        assert_eq!(cfg.transfer.lr, 1e-4);
    }

    #[test]
    fn round_trips_through_pairs() {
        let cfg = RunConfig::from_pairs(&pairs(&[
            ("model.hidden", "16,8"),
            ("transfer.method", "multi-kd"),
            ("model.count", "3"),
            ("views.policy", "overlapping"),
            ("checkpoints.models", "a.ckpt,b.ckpt"),
            ("data.noise", "0.1"),
        ]))
        .unwrap();
        let back = RunConfig::from_pairs(&cfg.to_pairs().into_iter().collect()).unwrap();
        assert_eq!(cfg, back);
        let listed: Vec<String> = cfg.to_pairs().into_iter().map(|(k, _)| k).collect();
        assert!(listed.iter().all(|k| KEYS.contains(&k.as_str())));
    }

    #[test]
    fn missing_file_reports_path() {
        let err = RunConfig::load(Path::new("/no/such/kdlab.cfg"), &[]).unwrap_err();
        assert_eq!(err.exit_code(), 2);
        assert!(err.to_string().contains("/no/such/kdlab.cfg"));
    }

    #[test]
    fn override_needs_equals() {
        assert!(parse_override("a.b").is_err());
        assert_eq!(parse_override("a.b = 1").unwrap(), ("a.b".into(), "1".into()));
    }
}
