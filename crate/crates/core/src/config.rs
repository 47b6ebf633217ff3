//! Run configuration: a TOML document read as flat dotted keys
//! (`model.tree_depth`, `train.initial_lr`, ...), with per-key overrides.

use std::fs;
use std::path::{Path, PathBuf};

use crate::error::{Error, Result};
use crate::loss::Distance;
use crate::model::ModelConfig;
use crate::training::TrainConfig;

/// Every setting a command needs, fully resolved.
#[derive(Clone, Debug, PartialEq)]
pub struct RunConfig {
    pub model: ModelConfig,
    /// Optimizer, schedule and loss settings.
    pub train: TrainConfig,
    /// Seed for parameter initialization; the fusion head uses `seed + 1`.
    pub seed: u64,
    pub train_manifest: Option<PathBuf>,
    pub test_manifest: Option<PathBuf>,
    pub out_dir: PathBuf,
    pub name: String,
    /// Pixels cropped from each side before scoring; defaults to the scale.
    pub eval_border: Option<usize>,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            model: ModelConfig::default(),
            train: TrainConfig::default(),
            seed: 0,
            train_manifest: None,
            test_manifest: None,
            out_dir: PathBuf::from("runs"),
            name: "run".into(),
            eval_border: None,
        }
    }
}

pub const KEYS: &[&str] = &[
    "data.test_manifest",
    "data.train_manifest",
    "eval.border",
    "loss.alpha",
    "loss.distance",
    "loss.margin",
    "loss.sigma_epsilon",
    "loss.theta",
    "loss.use_abs",
    "model.blocks_per_group",
    "model.branching",
    "model.channels",
    "model.deep_residual",
    "model.reduction",
    "model.residual_groups",
    "model.scale",
    "model.tree_depth",
    "run.name",
    "run.out_dir",
    "run.seed",
    "train.adam_eps",
    "train.batch_size",
    "train.beta1",
    "train.beta2",
    "train.clip_grad_norm",
    "train.epochs",
    "train.halve_every",
    "train.initial_lr",
    "train.lr_patch",
    "train.max_steps",
    "train.seed",
];

fn type_error(key: &str, want: &str, v: &toml::Value) -> Error {
    Error::Config(format!("{key}: expected {want}, got {v}"))
}

fn as_u64(key: &str, v: &toml::Value) -> Result<u64> {
    v.as_integer()
        .and_then(|i| u64::try_from(i).ok())
        .ok_or_else(|| type_error(key, "a nonnegative integer", v))
}

fn as_usize(key: &str, v: &toml::Value) -> Result<usize> {
    as_u64(key, v).map(|x| x as usize)
}

fn as_f64(key: &str, v: &toml::Value) -> Result<f64> {
    match v {
        toml::Value::Float(f) => Ok(*f),
        toml::Value::Integer(i) => Ok(*i as f64),
        _ => Err(type_error(key, "a number", v)),
    }
}

fn as_bool(key: &str, v: &toml::Value) -> Result<bool> {
    v.as_bool().ok_or_else(|| type_error(key, "a boolean", v))
}

fn as_str<'a>(key: &str, v: &'a toml::Value) -> Result<&'a str> {
    v.as_str().ok_or_else(|| type_error(key, "a string", v))
}

fn flatten(prefix: &str, table: &toml::Table, out: &mut Vec<(String, toml::Value)>) {
    for (k, v) in table {
        let key = if prefix.is_empty() {
            k.clone()
        } else {
            format!("{prefix}.{k}")
        };
        match v {
            toml::Value::Table(t) => flatten(&key, t, out),
            other => out.push((key, other.clone())),
        }
    }
}

impl RunConfig {
    /// Assigns one dotted key.
    pub fn set(&mut self, key: &str, v: &toml::Value) -> Result<()> {
        let t = &mut self.train;
        match key {
            "model.tree_depth" => self.model.tree_depth = as_usize(key, v)?,
            "model.branching" => self.model.branching = as_usize(key, v)?,
            "model.residual_groups" => self.model.residual_groups = as_usize(key, v)?,
            "model.blocks_per_group" => self.model.blocks_per_group = as_usize(key, v)?,
            "model.channels" => self.model.channels = as_usize(key, v)?,
            "model.scale" => self.model.scale = as_usize(key, v)?,
            "model.reduction" => self.model.reduction = as_usize(key, v)?,
            "model.deep_residual" => self.model.deep_residual = as_bool(key, v)?,
            "loss.alpha" => t.loss.alpha = as_f64(key, v)?,
            "loss.margin" => t.loss.margin = as_f64(key, v)?,
            "loss.theta" => t.loss.theta = as_f64(key, v)?,
            "loss.use_abs" => t.loss.use_abs = as_bool(key, v)?,
            "loss.sigma_epsilon" => t.loss.sigma_epsilon = as_f64(key, v)?,
            "loss.distance" => {
                let s = as_str(key, v)?;
                t.loss.distance = Distance::parse(s)
                    .ok_or_else(|| Error::Config(format!("{key}: unknown distance {s:?}")))?;
            }
            "train.batch_size" => t.batch_size = as_usize(key, v)?,
            "train.lr_patch" => t.lr_patch = as_usize(key, v)?,
            "train.initial_lr" => t.initial_lr = as_f64(key, v)?,
            "train.halve_every" => t.halve_every = as_u64(key, v)?,
            "train.beta1" => t.adam.beta1 = as_f64(key, v)?,
            "train.beta2" => t.adam.beta2 = as_f64(key, v)?,
            "train.adam_eps" => t.adam.eps = as_f64(key, v)?,
            "train.epochs" => t.epochs = as_u64(key, v)?,
            // 0 means no cap.
            "train.max_steps" => t.max_steps = Some(as_u64(key, v)?).filter(|&s| s > 0),
            "train.clip_grad_norm" => {
                let c = as_f64(key, v)?;
                t.clip_grad_norm = (c > 0.0).then_some(c);
            }
            "train.seed" => t.seed = as_u64(key, v)?,
            "run.seed" => self.seed = as_u64(key, v)?,
            "run.name" => self.name = as_str(key, v)?.to_string(),
            "run.out_dir" => self.out_dir = PathBuf::from(as_str(key, v)?),
            "data.train_manifest" => self.train_manifest = Some(PathBuf::from(as_str(key, v)?)),
            "data.test_manifest" => self.test_manifest = Some(PathBuf::from(as_str(key, v)?)),
            "eval.border" => self.eval_border = Some(as_usize(key, v)?),
            _ => return Err(Error::Config(format!("unknown key {key:?}"))),
        }
        Ok(())
    }

    /// Applies every key of a TOML document on top of `self`.
    pub fn apply_toml(&mut self, text: &str) -> Result<()> {
        let table: toml::Table = text
            .parse()
            .map_err(|e: toml::de::Error| Error::Config(e.message().to_string()))?;
        let mut flat = Vec::new();
        flatten("", &table, &mut flat);
        for (k, v) in &flat {
            self.set(k, v)?;
        }
        Ok(())
    }

    /// Applies a `key=value` override; the value is read as a TOML scalar,
    /// falling back to a bare string.
    pub fn apply_override(&mut self, spec: &str) -> Result<()> {
        let (key, raw) = spec
            .split_once('=')
            .ok_or_else(|| Error::Config(format!("override {spec:?} is not key=value")))?;
        let (key, raw) = (key.trim(), raw.trim());
        let value = format!("v = {raw}")
            .parse::<toml::Table>()
            .ok()
            .and_then(|mut t| t.remove("v"))
            .unwrap_or_else(|| toml::Value::String(raw.to_string()));
        self.set(key, &value)
    }

    pub fn from_file(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let mut cfg = RunConfig::default();
        cfg.apply_toml(&text)
            .map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        self.train.validate()?;
        if self.name.is_empty() || self.name.contains(['/', '\\']) {
            return Err(Error::Config(format!("run.name {:?} is not a plain name", self.name)));
        }
        Ok(())
    }

    pub fn border(&self) -> usize {
        self.eval_border.unwrap_or(self.model.scale)
    }

    /// Every key with its resolved value, one `key = value` line each, in
    /// [`KEYS`] order. Feeding the text back through [`Self::apply_toml`]
    /// reproduces `self`.
    pub fn echo(&self) -> String {
        let t = &self.train;
        let m = &self.model;
        let f = |x: f64| format!("{x:?}");
        let s = |x: &str| toml::Value::String(x.to_string()).to_string();
        let p = |x: &Option<PathBuf>| x.as_ref().map(|p| s(&p.to_string_lossy()));
        let mut lines = Vec::new();
        let mut put = |k: &str, v: Option<String>| {
            if let Some(v) = v {
                lines.push(format!("{k} = {v}"));
            }
        };
        put("data.test_manifest", p(&self.test_manifest));
        put("data.train_manifest", p(&self.train_manifest));
        put("eval.border", Some(self.border().to_string()));
        put("loss.alpha", Some(f(t.loss.alpha)));
        put("loss.distance", Some(s(t.loss.distance.name())));
        put("loss.margin", Some(f(t.loss.margin)));
        put("loss.sigma_epsilon", Some(f(t.loss.sigma_epsilon)));
        put("loss.theta", Some(f(t.loss.theta)));
        put("loss.use_abs", Some(t.loss.use_abs.to_string()));
        put("model.blocks_per_group", Some(m.blocks_per_group.to_string()));
        put("model.branching", Some(m.branching.to_string()));
        put("model.channels", Some(m.channels.to_string()));
        put("model.deep_residual", Some(m.deep_residual.to_string()));
        put("model.reduction", Some(m.reduction.to_string()));
        put("model.residual_groups", Some(m.residual_groups.to_string()));
        put("model.scale", Some(m.scale.to_string()));
        put("model.tree_depth", Some(m.tree_depth.to_string()));
        put("run.name", Some(s(&self.name)));
        put("run.out_dir", Some(s(&self.out_dir.to_string_lossy())));
        put("run.seed", Some(self.seed.to_string()));
        put("train.adam_eps", Some(f(t.adam.eps)));
        put("train.batch_size", Some(t.batch_size.to_string()));
        put("train.beta1", Some(f(t.adam.beta1)));
        put("train.beta2", Some(f(t.adam.beta2)));
        put("train.clip_grad_norm", Some(f(t.clip_grad_norm.unwrap_or(0.0))));
        put("train.epochs", Some(t.epochs.to_string()));
        put("train.halve_every", Some(t.halve_every.to_string()));
        put("train.initial_lr", Some(f(t.initial_lr)));
        put("train.lr_patch", Some(t.lr_patch.to_string()));
        put("train.max_steps", Some(t.max_steps.unwrap_or(0).to_string()));
        put("train.seed", Some(t.seed.to_string()));
        lines.join("\n") + "\n"
    }
}
