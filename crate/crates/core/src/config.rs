//! Training configuration and its `key = value` text format.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use crate::error::{Error, Result};
use crate::losses::{LossConfig, Variant};

#[derive(Debug, Clone, PartialEq)]
pub enum DataSource {
    /// Grating images generated in memory.
    Synth {
        train_count: usize,
        val_count: usize,
        side: usize,
        clusters: usize,
        seed: u64,
    },
    /// IDX files on disk; `train_count`/`val_count` cap the images used.
    Idx {
        train_images: PathBuf,
        train_labels: Option<PathBuf>,
        val_images: PathBuf,
        val_labels: Option<PathBuf>,
        train_count: usize,
        val_count: usize,
    },
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub variant: Variant,
    pub codebook_size: usize,
    pub dim: usize,
    pub patch: usize,
    pub hidden: usize,
    pub batch_size: usize,
    pub epochs: usize,
    pub learning_rate: f64,
    pub alpha: f64,
    pub beta: f64,
    pub scale: f64,
    pub margin: f64,
    pub top_k: usize,
    pub gamma0: f64,
    pub lambda: f64,
    pub seed: u64,
    pub data: DataSource,
    pub out_dir: PathBuf,
    /// Evaluate on the validation set every this many steps; 0 = only at the end.
    pub eval_every: u64,
    /// Write a checkpoint every this many steps; 0 = only at the end.
    pub checkpoint_every: u64,
    /// Only `f64` is implemented.
    pub precision: String,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            variant: Variant::Full,
            codebook_size: 512,
            dim: 64,
            patch: 4,
            hidden: 128,
            batch_size: 256,
            epochs: 10,
            learning_rate: 3e-4,
            alpha: 3e-4,
            beta: 0.25,
            scale: 10.0,
            margin: 0.1,
            top_k: 3,
            gamma0: 1.0,
            lambda: 5e-4,
            seed: 0,
            data: DataSource::Synth {
                train_count: 10_000,
                val_count: 10_000,
                side: 28,
                clusters: 10,
                seed: 7,
            },
            out_dir: PathBuf::from("runs/default"),
            eval_every: 0,
            checkpoint_every: 0,
            precision: "f64".into(),
        }
    }
}

fn parse_num<T: std::str::FromStr>(key: &str, v: &str) -> Result<T> {
    v.parse()
        .map_err(|_| Error::Config(format!("bad value '{v}' for '{key}'")))
}

impl TrainConfig {
    pub fn loss_config(&self) -> LossConfig {
        LossConfig {
            beta: self.beta,
            s: self.scale,
            m: self.margin,
            k: self.top_k,
            gamma0: self.gamma0,
            lambda: self.lambda,
            variant: self.variant,
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.loss_config().validate()?;
        let bad = |what: String| Err(Error::Config(what));
        if self.codebook_size < 1 {
            return bad("codebook_size must be >= 1".into());
        }
        if self.dim < 2 {
            return bad("dim must be >= 2".into());
        }
        if self.patch < 1 || self.hidden < 1 || self.batch_size < 1 {
            return bad("patch, hidden and batch_size must be >= 1".into());
        }
        if !(self.learning_rate > 0.0) {
            return bad("learning_rate must be > 0".into());
        }
        if !(self.alpha >= 0.0) {
            return bad("alpha must be >= 0".into());
        }
        if self.precision != "f64" {
            return bad(format!(
                "precision '{}' is not supported; only f64 is implemented",
                self.precision
            ));
        }
        if let DataSource::Synth {
            side,
            clusters,
            train_count,
            val_count,
            ..
        } = &self.data
        {
            if *clusters < 1 || *train_count < 1 || *val_count < 1 {
                return bad("synthetic data needs clusters, train_count and val_count >= 1".into());
            }
            if side % self.patch != 0 {
                return bad(format!("side {side} is not divisible by patch {}", self.patch));
            }
        }
        Ok(())
    }

    /// Applies one `key = value` setting.
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        match key {
            "variant" => self.variant = value.parse()?,
            "codebook_size" => self.codebook_size = parse_num(key, value)?,
            "dim" => self.dim = parse_num(key, value)?,
            "patch" => self.patch = parse_num(key, value)?,
            "hidden" => self.hidden = parse_num(key, value)?,
            "batch_size" => self.batch_size = parse_num(key, value)?,
            "epochs" => self.epochs = parse_num(key, value)?,
            "learning_rate" => self.learning_rate = parse_num(key, value)?,
            "alpha" => self.alpha = parse_num(key, value)?,
            "beta" => self.beta = parse_num(key, value)?,
            "scale" => self.scale = parse_num(key, value)?,
            "margin" => self.margin = parse_num(key, value)?,
            "top_k" => self.top_k = parse_num(key, value)?,
            "gamma0" => self.gamma0 = parse_num(key, value)?,
            "lambda" => self.lambda = parse_num(key, value)?,
            "seed" => self.seed = parse_num(key, value)?,
            "out_dir" => self.out_dir = PathBuf::from(value),
            "eval_every" => self.eval_every = parse_num(key, value)?,
            "checkpoint_every" => self.checkpoint_every = parse_num(key, value)?,
            "precision" => self.precision = value.to_string(),
            "data" => {
                self.data = match value {
                    "synth" => TrainConfig::default().data,
                    "idx" => DataSource::Idx {
                        train_images: PathBuf::new(),
                        train_labels: None,
                        val_images: PathBuf::new(),
                        val_labels: None,
                        train_count: usize::MAX,
                        val_count: usize::MAX,
                    },
                    _ => return Err(Error::Config(format!("unknown data source '{value}'"))),
                }
            }
            _ => return self.set_data_key(key, value),
        }
        Ok(())
    }

    fn set_data_key(&mut self, key: &str, value: &str) -> Result<()> {
        let wrong_source = || {
            Err(Error::Config(format!(
                "key '{key}' does not apply to the configured data source"
            )))
        };
        match &mut self.data {
            DataSource::Synth {
                train_count,
                val_count,
                side,
                clusters,
                seed,
            } => match key {
                "train_count" => *train_count = parse_num(key, value)?,
                "val_count" => *val_count = parse_num(key, value)?,
                "side" => *side = parse_num(key, value)?,
                "clusters" => *clusters = parse_num(key, value)?,
                "data_seed" => *seed = parse_num(key, value)?,
                "train_images" | "train_labels" | "val_images" | "val_labels" => {
                    return wrong_source()
                }
                _ => return Err(Error::Config(format!("unknown config key '{key}'"))),
            },
            DataSource::Idx {
                train_images,
                train_labels,
                val_images,
                val_labels,
                train_count,
                val_count,
            } => match key {
                "train_images" => *train_images = PathBuf::from(value),
                "train_labels" => *train_labels = Some(PathBuf::from(value)),
                "val_images" => *val_images = PathBuf::from(value),
                "val_labels" => *val_labels = Some(PathBuf::from(value)),
                "train_count" => *train_count = parse_num(key, value)?,
                "val_count" => *val_count = parse_num(key, value)?,
                "side" | "clusters" | "data_seed" => return wrong_source(),
                _ => return Err(Error::Config(format!("unknown config key '{key}'"))),
            },
        }
        Ok(())
    }

    /// Parses `key = value` lines on top of the defaults. `#` starts a
    /// comment; unknown keys are rejected. A `data` line resets the data
    /// source, so it should precede the data keys.
    pub fn parse(text: &str) -> Result<Self> {
        let mut cfg = Self::default();
        for (lineno, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (key, value) = line.split_once('=').ok_or_else(|| {
                Error::Config(format!("line {}: expected 'key = value'", lineno + 1))
            })?;
            cfg.set(key.trim(), value.trim())
                .map_err(|e| Error::Config(format!("line {}: {e}", lineno + 1)))?;
        }
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| {
            Error::Io(std::io::Error::new(
                e.kind(),
                format!("cannot read config {}: {e}", path.display()),
            ))
        })?;
        Self::parse(&text)
    }

    /// Text form that [`TrainConfig::parse`] reads back to an equal value.
    pub fn to_text(&self) -> String {
        let mut s = String::new();
        let mut kv = |k: &str, v: String| writeln!(s, "{k} = {v}").unwrap();
        kv("variant", self.variant.to_string());
        kv("codebook_size", self.codebook_size.to_string());
        kv("dim", self.dim.to_string());
        kv("patch", self.patch.to_string());
        kv("hidden", self.hidden.to_string());
        kv("batch_size", self.batch_size.to_string());
        kv("epochs", self.epochs.to_string());
        kv("learning_rate", self.learning_rate.to_string());
        kv("alpha", self.alpha.to_string());
        kv("beta", self.beta.to_string());
        kv("scale", self.scale.to_string());
        kv("margin", self.margin.to_string());
        kv("top_k", self.top_k.to_string());
        kv("gamma0", self.gamma0.to_string());
        kv("lambda", self.lambda.to_string());
        kv("seed", self.seed.to_string());
        kv("out_dir", self.out_dir.display().to_string());
        kv("eval_every", self.eval_every.to_string());
        kv("checkpoint_every", self.checkpoint_every.to_string());
        kv("precision", self.precision.clone());
        match &self.data {
            DataSource::Synth {
                train_count,
                val_count,
                side,
                clusters,
                seed,
            } => {
                kv("data", "synth".into());
                kv("train_count", train_count.to_string());
                kv("val_count", val_count.to_string());
                kv("side", side.to_string());
                kv("clusters", clusters.to_string());
                kv("data_seed", seed.to_string());
            }
            DataSource::Idx {
                train_images,
                train_labels,
                val_images,
                val_labels,
                train_count,
                val_count,
            } => {
                kv("data", "idx".into());
                kv("train_images", train_images.display().to_string());
                if let Some(p) = train_labels {
                    kv("train_labels", p.display().to_string());
                }
                kv("val_images", val_images.display().to_string());
                if let Some(p) = val_labels {
                    kv("val_labels", p.display().to_string());
                }
                kv("train_count", train_count.to_string());
                kv("val_count", val_count.to_string());
            }
        }
        s
    }
}
