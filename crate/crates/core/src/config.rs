//! Run configuration in a line-oriented `key = value` format.
//!
//! ```text
//! # comment
//! include base.conf          # path relative to this file
//! model.preset = tiny
//! train.vae_epochs = 40
//! ```
//!
//! Precedence, lowest first: built-in defaults, `model.preset`, then
//! `model.ablation`, then every other key. Among sources, included files are
//! read before the lines that follow the `include`, later lines override
//! earlier ones, and command-line overrides are applied last.
//!
//! [`RunConfig::to_kv_text`] writes the fully resolved configuration; feeding
//! it back yields an identical [`RunConfig`].

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use crate::backbone::{Ablation, ModelConfig};
use crate::error::{Error, Result};
use crate::flow::FlowConfig;
use crate::vae::VaeLossWeights;

/// Epoch counts, batch size and learning rates of both stages.
#[derive(Clone, Debug, PartialEq)]
pub struct TrainSchedule {
    /// Total VAE epochs, both phases.
    pub vae_epochs: usize,
    pub fm_epochs: usize,
    pub batch_size: usize,
    pub vae_lr: f64,
    pub fm_lr: f64,
    /// Turns off the adversarial phase entirely.
    pub adversarial: bool,
    /// Write a resumable checkpoint every this many epochs (0: only at the end).
    pub checkpoint_every: usize,
    /// Optional hard cap on optimizer steps for short runs.
    pub max_steps: Option<usize>,
}

impl Default for TrainSchedule {
    fn default() -> Self {
        Self {
            vae_epochs: 290,
            fm_epochs: 250,
            batch_size: 32,
            vae_lr: 1e-4,
            fm_lr: 1e-4,
            adversarial: true,
            checkpoint_every: 10,
            max_steps: None,
        }
    }
}

impl TrainSchedule {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 {
            return Err(Error::Config("train.batch_size must be positive".into()));
        }
        for (k, v) in [("train.vae_lr", self.vae_lr), ("train.fm_lr", self.fm_lr)] {
            if !(v.is_finite() && v > 0.0) {
                return Err(Error::Config(format!("{k} must be positive, got {v}")));
            }
        }
        Ok(())
    }
}

/// Synthetic dataset generation parameters.
#[derive(Clone, Debug, PartialEq)]
pub struct DataConfig {
    pub count: usize,
    pub side: usize,
    /// Held-out scenes; one eighth of `count` when unset.
    pub test_count: Option<usize>,
}

impl DataConfig {
    pub fn resolved_test_count(&self) -> usize {
        self.test_count.unwrap_or(self.count / 8)
    }
}

impl Default for DataConfig {
    fn default() -> Self {
        Self {
            count: 576,
            side: 64,
            test_count: None,
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct Paths {
    pub data: Option<PathBuf>,
    pub out: Option<PathBuf>,
    pub vae_checkpoint: Option<PathBuf>,
    pub checkpoint: Option<PathBuf>,
    pub resume: Option<PathBuf>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct RunConfig {
    pub seed: u64,
    pub model: ModelConfig,
    pub flow: FlowConfig,
    pub vae: VaeLossWeights,
    pub train: TrainSchedule,
    pub data: DataConfig,
    pub paths: Paths,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            model: ModelConfig::tiny(),
            flow: FlowConfig::default(),
            vae: VaeLossWeights::default(),
            train: TrainSchedule::default(),
            data: DataConfig::default(),
            paths: Paths::default(),
        }
    }
}

/// Ordered key/value pairs after include expansion; later entries win.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct KvMap {
    entries: BTreeMap<String, String>,
}

impl KvMap {
    pub fn insert(&mut self, key: impl Into<String>, value: impl Into<String>) {
        self.entries.insert(key.into(), value.into());
    }

    pub fn get(&self, key: &str) -> Option<&str> {
        self.entries.get(key).map(String::as_str)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &str)> {
        self.entries.iter().map(|(k, v)| (k.as_str(), v.as_str()))
    }

    /// Parses text; `include` paths resolve against `base`.
    pub fn parse_text(&mut self, text: &str, base: Option<&Path>, depth: usize) -> Result<()> {
        if depth > 16 {
            return Err(Error::Config("include nesting too deep".into()));
        }
        for (n, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            if let Some(rest) = line.strip_prefix("include ") {
                let rel = PathBuf::from(rest.trim());
                let path = match base {
                    Some(b) if rel.is_relative() => b.join(rel),
                    _ => rel,
                };
                self.parse_file_at(&path, depth + 1)?;
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("line {}: expected key = value, got {raw:?}", n + 1)))?;
            self.insert(k.trim(), v.trim());
        }
        Ok(())
    }

    pub fn parse_file(&mut self, path: &Path) -> Result<()> {
        self.parse_file_at(path, 0)
    }

    fn parse_file_at(&mut self, path: &Path, depth: usize) -> Result<()> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::Config(format!("cannot read config {}: {e}", path.display())))?;
        self.parse_text(&text, path.parent(), depth)
    }

    /// Applies a `key=value` override.
    pub fn apply_override(&mut self, spec: &str) -> Result<()> {
        let (k, v) = spec
            .split_once('=')
            .ok_or_else(|| Error::Config(format!("override {spec:?} is not key=value")))?;
        self.insert(k.trim(), v.trim());
        Ok(())
    }
}

fn parse<T: FromStr>(key: &str, v: &str) -> Result<T> {
    v.parse()
        .map_err(|_| Error::Config(format!("{key}: cannot parse {v:?}")))
}

fn parse_bool(key: &str, v: &str) -> Result<bool> {
    match v {
        "true" | "1" | "yes" | "on" => Ok(true),
        "false" | "0" | "no" | "off" => Ok(false),
        _ => Err(Error::Config(format!("{key}: expected a boolean, got {v:?}"))),
    }
}

fn parse_list(key: &str, v: &str) -> Result<Vec<usize>> {
    if v.is_empty() || v == "none" {
        return Ok(Vec::new());
    }
    v.split(',').map(|s| parse(key, s.trim())).collect()
}

fn opt_path(v: &str) -> Option<PathBuf> {
    (!v.is_empty() && v != "none").then(|| PathBuf::from(v))
}

fn fmt_path(p: &Option<PathBuf>) -> String {
    p.as_ref().map_or_else(|| "none".to_string(), |p| p.display().to_string())
}

/// `model.*` keys of a model configuration, in a fixed order.
pub fn model_to_kv(m: &ModelConfig) -> Vec<(String, String)> {
    let list = m.attention_stages.iter().map(usize::to_string).collect::<Vec<_>>().join(",");
    [
        ("image_size", m.image_size.to_string()),
        ("latent_channels", m.latent_channels.to_string()),
        ("base_width", m.base_width.to_string()),
        ("unet_depth", m.unet_depth.to_string()),
        ("attention_stages", if list.is_empty() { "none".into() } else { list }),
        ("use_concatenation", m.use_concatenation.to_string()),
        ("time_embed_dim", m.time_embed_dim.to_string()),
        ("encoder_blocks", m.encoder_blocks.to_string()),
        ("concat_channels", m.concat_channels.to_string()),
        ("width_cap", m.width_cap.to_string()),
        ("head_dim", m.head_dim.to_string()),
        ("vae_width", m.vae_width.to_string()),
        ("disc_width", m.disc_width.to_string()),
    ]
    .into_iter()
    .map(|(k, v)| (format!("model.{k}"), v))
    .collect()
}

/// Sets one `model.*` field (without the prefix). Returns false for unknown keys.
fn set_model_field(m: &mut ModelConfig, field: &str, key: &str, v: &str) -> Result<bool> {
    match field {
        "image_size" => m.image_size = parse(key, v)?,
        "latent_channels" => m.latent_channels = parse(key, v)?,
        "base_width" => m.base_width = parse(key, v)?,
        "unet_depth" => m.unet_depth = parse(key, v)?,
        "attention_stages" => m.attention_stages = parse_list(key, v)?,
        "use_concatenation" => m.use_concatenation = parse_bool(key, v)?,
        "time_embed_dim" => m.time_embed_dim = parse(key, v)?,
        "encoder_blocks" => m.encoder_blocks = parse(key, v)?,
        "concat_channels" => m.concat_channels = parse(key, v)?,
        "width_cap" => m.width_cap = parse(key, v)?,
        "head_dim" => m.head_dim = parse(key, v)?,
        "vae_width" => m.vae_width = parse(key, v)?,
        "disc_width" => m.disc_width = parse(key, v)?,
        _ => return Ok(false),
    }
    Ok(true)
}

/// Rebuilds a model configuration from `model.*` entries, e.g. checkpoint metadata.
pub fn model_from_kv<'a>(entries: impl IntoIterator<Item = (&'a str, &'a str)>) -> Result<ModelConfig> {
    let mut m = ModelConfig::tiny();
    let mut seen = 0;
    for (k, v) in entries {
        if let Some(field) = k.strip_prefix("model.") {
            if set_model_field(&mut m, field, k, v)? {
                seen += 1;
            }
        }
    }
    if seen != model_to_kv(&m).len() {
        return Err(Error::Config(format!("incomplete model configuration ({seen} fields)")));
    }
    m.validate()?;
    Ok(m)
}

impl RunConfig {
    pub fn from_kv(kv: &KvMap) -> Result<Self> {
        let mut c = RunConfig::default();
        if let Some(p) = kv.get("model.preset") {
            c.model = ModelConfig::preset(p)?;
        }
        if let Some(a) = kv.get("model.ablation") {
            c.model = c.model.with_ablation(Ablation::parse(a)?);
        }
        for (k, v) in kv.iter() {
            match k {
                "model.preset" | "model.ablation" => {}
                "seed" => c.seed = parse(k, v)?,
                "flow.sigma_min" => c.flow.sigma_min = parse(k, v)?,
                "flow.num_steps" => c.flow.num_steps = parse(k, v)?,
                "vae.kl_weight" => c.vae.kl_weight = parse(k, v)?,
                "vae.perc_weight" => c.vae.perc_weight = parse(k, v)?,
                "vae.adv_weight" => c.vae.adv_weight = parse(k, v)?,
                "vae.adv_start_epoch" => c.vae.adv_start_epoch = parse(k, v)?,
                "train.vae_epochs" => c.train.vae_epochs = parse(k, v)?,
                "train.fm_epochs" => c.train.fm_epochs = parse(k, v)?,
                "train.batch_size" => c.train.batch_size = parse(k, v)?,
                "train.vae_lr" => c.train.vae_lr = parse(k, v)?,
                "train.fm_lr" => c.train.fm_lr = parse(k, v)?,
                "train.adversarial" => c.train.adversarial = parse_bool(k, v)?,
                "train.checkpoint_every" => c.train.checkpoint_every = parse(k, v)?,
                "train.max_steps" => {
                    c.train.max_steps = if v == "none" { None } else { Some(parse(k, v)?) }
                }
                "data.count" => c.data.count = parse(k, v)?,
                "data.side" => c.data.side = parse(k, v)?,
                "data.test_count" => {
                    c.data.test_count = if v == "none" { None } else { Some(parse(k, v)?) }
                }
                "paths.data" => c.paths.data = opt_path(v),
                "paths.out" => c.paths.out = opt_path(v),
                "paths.vae_checkpoint" => c.paths.vae_checkpoint = opt_path(v),
                "paths.checkpoint" => c.paths.checkpoint = opt_path(v),
                "paths.resume" => c.paths.resume = opt_path(v),
                _ => {
                    let known = match k.strip_prefix("model.") {
                        Some(field) => set_model_field(&mut c.model, field, k, v)?,
                        None => false,
                    };
                    if !known {
                        return Err(Error::Config(format!("unknown config key {k:?}")));
                    }
                }
            }
        }
        c.validate()?;
        Ok(c)
    }

    /// Reads a config file and applies `key=value` overrides on top.
    pub fn load(path: Option<&Path>, overrides: &[String]) -> Result<Self> {
        let mut kv = KvMap::default();
        if let Some(p) = path {
            kv.parse_file(p)?;
        }
        for o in overrides {
            kv.apply_override(o)?;
        }
        Self::from_kv(&kv)
    }

    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        self.flow.validate()?;
        self.vae.validate()?;
        self.train.validate()
    }

    /// Loss weights with the adversarial switch applied.
    pub fn effective_vae_weights(&self) -> VaeLossWeights {
        let mut w = self.vae;
        if !self.train.adversarial {
            w.adv_start_epoch = usize::MAX;
        }
        w
    }

    pub fn to_kv(&self) -> Vec<(String, String)> {
        let mut out = vec![("seed".to_string(), self.seed.to_string())];
        out.extend(model_to_kv(&self.model));
        let t = &self.train;
        let rest = [
            ("flow.sigma_min", self.flow.sigma_min.to_string()),
            ("flow.num_steps", self.flow.num_steps.to_string()),
            ("vae.kl_weight", self.vae.kl_weight.to_string()),
            ("vae.perc_weight", self.vae.perc_weight.to_string()),
            ("vae.adv_weight", self.vae.adv_weight.to_string()),
            ("vae.adv_start_epoch", self.vae.adv_start_epoch.to_string()),
            ("train.vae_epochs", t.vae_epochs.to_string()),
            ("train.fm_epochs", t.fm_epochs.to_string()),
            ("train.batch_size", t.batch_size.to_string()),
            ("train.vae_lr", t.vae_lr.to_string()),
            ("train.fm_lr", t.fm_lr.to_string()),
            ("train.adversarial", t.adversarial.to_string()),
            ("train.checkpoint_every", t.checkpoint_every.to_string()),
            ("train.max_steps", t.max_steps.map_or("none".into(), |s| s.to_string())),
            ("data.count", self.data.count.to_string()),
            ("data.side", self.data.side.to_string()),
            ("data.test_count", self.data.test_count.map_or("none".into(), |s| s.to_string())),
            ("paths.data", fmt_path(&self.paths.data)),
            ("paths.out", fmt_path(&self.paths.out)),
            ("paths.vae_checkpoint", fmt_path(&self.paths.vae_checkpoint)),
            ("paths.checkpoint", fmt_path(&self.paths.checkpoint)),
            ("paths.resume", fmt_path(&self.paths.resume)),
        ];
        out.extend(rest.into_iter().map(|(k, v)| (k.to_string(), v)));
        out
    }

    pub fn to_kv_text(&self) -> String {
        let mut s = String::from("# resolved configuration\n");
        for (k, v) in self.to_kv() {
            s.push_str(&format!("{k} = {v}\n"));
        }
        s
    }
}
