//! Model and training configuration, and the flat `key = value` file format
//! shared by config files and manifests.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::Path;
use std::str::FromStr;

use crate::error::{Error, Result};
use crate::memory::IndexMode;
use crate::numerics::AdamW;

/// Byte vocabulary.
pub const VOCAB: usize = 256;

/// Parses `key value` / `key = value` lines. `#` starts a comment.
pub fn parse_flat(text: &str, origin: impl AsRef<Path>) -> Result<BTreeMap<String, String>> {
    let mut out = BTreeMap::new();
    for (lineno, raw) in text.lines().enumerate() {
        let line = raw.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let (key, value) = match line.split_once('=') {
            Some((k, v)) => (k.trim(), v.trim()),
            None => match line.split_once(char::is_whitespace) {
                Some((k, v)) => (k.trim(), v.trim()),
                None => {
                    return Err(Error::format(
                        origin,
                        format!("line {}: expected `key value`", lineno + 1),
                    ))
                }
            },
        };
        if key.is_empty() {
            return Err(Error::format(origin, format!("line {}: empty key", lineno + 1)));
        }
        out.insert(key.to_string(), value.to_string());
    }
    Ok(out)
}

/// Ablation switches.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct Ablations {
    /// Skip the state-space block (identity).
    pub no_ssm: bool,
    /// Zero the retrieved mean, skip memory writes and drop the fused-summary conditioning.
    pub no_retrieval: bool,
    /// Hold the supervisor state at zero.
    pub no_rnn: bool,
}

impl Ablations {
    pub fn set(&mut self, name: &str) -> Result<()> {
        match name {
            "no_ssm" => self.no_ssm = true,
            "no_retrieval" => self.no_retrieval = true,
            "no_rnn" => self.no_rnn = true,
            "" | "none" => {}
            other => return Err(Error::Config(format!("unknown ablation `{other}`"))),
        }
        Ok(())
    }

    fn render(&self) -> String {
        let mut parts = Vec::new();
        if self.no_ssm {
            parts.push("no_ssm");
        }
        if self.no_retrieval {
            parts.push("no_retrieval");
        }
        if self.no_rnn {
            parts.push("no_rnn");
        }
        if parts.is_empty() {
            "none".into()
        } else {
            parts.join(",")
        }
    }
}

/// Architecture hyperparameters.
#[derive(Clone, Debug, PartialEq)]
pub struct ModelConfig {
    pub chunk_size: usize,
    pub d_model: usize,
    pub d_hidden: usize,
    pub ssm_taps: usize,
    /// ZOH timestep shared by every channel.
    pub ssm_dt: f64,
    pub conv_taps: usize,
    pub dilations: Vec<usize>,
    pub top_k: usize,
    pub mem_capacity: usize,
    pub index_mode: IndexMode,
    pub ablations: Ablations,
}

impl ModelConfig {
    /// Desk-scale defaults.
    pub fn desk() -> Self {
        ModelConfig {
            chunk_size: 128,
            d_model: 128,
            d_hidden: 128,
            ssm_taps: 16,
            ssm_dt: 1.0,
            conv_taps: 3,
            dilations: vec![1, 2, 4],
            top_k: 1,
            mem_capacity: 1024,
            index_mode: IndexMode::Exact,
            ablations: Ablations::default(),
        }
    }

    /// Sizes from the full-scale experiments (not exercised by the test suite).
    pub fn full_scale() -> Self {
        ModelConfig {
            chunk_size: 1024,
            d_model: 256,
            d_hidden: 512,
            ssm_taps: 32,
            mem_capacity: 4096,
            index_mode: IndexMode::Approximate {
                n_list: 64,
                n_probe: 8,
            },
            ..Self::desk()
        }
    }

    /// Smallest configuration used by gradient checks.
    pub fn tiny() -> Self {
        ModelConfig {
            chunk_size: 8,
            d_model: 4,
            d_hidden: 4,
            ssm_taps: 4,
            ssm_dt: 1.0,
            conv_taps: 2,
            dilations: vec![1, 2],
            top_k: 1,
            mem_capacity: 64,
            index_mode: IndexMode::Exact,
            ablations: Ablations::default(),
        }
    }

    pub fn d_mem(&self) -> usize {
        self.d_model
    }

    pub fn validate(&self) -> Result<()> {
        if self.chunk_size < 2 {
            return Err(Error::Config("chunk_size must be at least 2".into()));
        }
        if self.d_model == 0 || self.d_hidden == 0 {
            return Err(Error::Config("d_model and d_hidden must be positive".into()));
        }
        if self.ssm_taps == 0 || self.ssm_taps > self.chunk_size {
            return Err(Error::Config(format!(
                "ssm_taps must be in 1..={} (chunk size), got {}",
                self.chunk_size, self.ssm_taps
            )));
        }
        if !(self.ssm_dt > 0.0) {
            return Err(Error::Config("ssm_dt must be positive".into()));
        }
        if self.conv_taps == 0 {
            return Err(Error::Config("conv_taps must be positive".into()));
        }
        crate::multires::validate_dilations(&self.dilations)?;
        if self.top_k == 0 || self.mem_capacity == 0 {
            return Err(Error::Config("top_k and mem_capacity must be positive".into()));
        }
        Ok(())
    }
}

/// Optimisation and loop settings.
#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub model: ModelConfig,
    pub lr: f64,
    pub warmup_steps: u64,
    pub max_steps: u64,
    pub adam: AdamW,
    pub batch_size: usize,
    /// Chunks per truncated-BPTT window.
    pub bptt_window: usize,
    pub clip_norm: f64,
    pub seed: u64,
    pub eval_every: u64,
    pub checkpoint_every: u64,
    /// Reshuffle sequence order every epoch.
    pub shuffle: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            model: ModelConfig::desk(),
            lr: 3e-4,
            warmup_steps: 100,
            max_steps: 1000,
            adam: AdamW::default(),
            batch_size: 8,
            bptt_window: 4,
            clip_norm: 1.0,
            seed: 0,
            eval_every: 100,
            checkpoint_every: 0,
            shuffle: true,
        }
    }
}

/// Every key accepted in a config file (and as a `--key` CLI override).
pub const CONFIG_KEYS: &[&str] = &[
    "chunk_size",
    "d_model",
    "d_hidden",
    "ssm_taps",
    "ssm_dt",
    "conv_taps",
    "dilations",
    "top_k",
    "mem_capacity",
    "index",
    "n_list",
    "n_probe",
    "ablate",
    "lr",
    "warmup_steps",
    "max_steps",
    "beta1",
    "beta2",
    "eps",
    "weight_decay",
    "batch_size",
    "bptt_window",
    "clip_norm",
    "seed",
    "eval_every",
    "checkpoint_every",
    "shuffle",
];

fn parse<T: FromStr>(key: &str, value: &str) -> Result<T>
where
    T::Err: std::fmt::Display,
{
    value
        .parse()
        .map_err(|e| Error::Config(format!("key `{key}`: cannot parse `{value}`: {e}")))
}

fn parse_list(key: &str, value: &str) -> Result<Vec<usize>> {
    value
        .trim_matches(|c| c == '[' || c == ']')
        .split(',')
        .map(str::trim)
        .filter(|s| !s.is_empty())
        .map(|s| parse(key, s))
        .collect()
}

impl TrainConfig {
    /// Applies one `key = value` setting; unknown keys are an error naming the key.
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        let m = &mut self.model;
        match key {
            "chunk_size" => m.chunk_size = parse(key, value)?,
            "d_model" => m.d_model = parse(key, value)?,
            "d_hidden" => m.d_hidden = parse(key, value)?,
            "ssm_taps" => m.ssm_taps = parse(key, value)?,
            "ssm_dt" => m.ssm_dt = parse(key, value)?,
            "conv_taps" => m.conv_taps = parse(key, value)?,
            "dilations" => m.dilations = parse_list(key, value)?,
            "top_k" => m.top_k = parse(key, value)?,
            "mem_capacity" => m.mem_capacity = parse(key, value)?,
            "index" => {
                m.index_mode = match value {
                    "exact" => IndexMode::Exact,
                    "approximate" => IndexMode::Approximate {
                        n_list: 64,
                        n_probe: 8,
                    },
                    other => return Err(Error::Config(format!("key `index`: unknown mode `{other}`"))),
                }
            }
            "n_list" | "n_probe" => {
                let v: usize = parse(key, value)?;
                let (mut n_list, mut n_probe) = match m.index_mode {
                    IndexMode::Approximate { n_list, n_probe } => (n_list, n_probe),
                    IndexMode::Exact => (64, 8),
                };
                if key == "n_list" {
                    n_list = v;
                } else {
                    n_probe = v;
                }
                m.index_mode = IndexMode::Approximate { n_list, n_probe };
            }
            "ablate" => {
                m.ablations = Ablations::default();
                for part in value.split(',') {
                    m.ablations.set(part.trim())?;
                }
            }
            "lr" => self.lr = parse(key, value)?,
            "warmup_steps" => self.warmup_steps = parse(key, value)?,
            "max_steps" => self.max_steps = parse(key, value)?,
            "beta1" => self.adam.beta1 = parse(key, value)?,
            "beta2" => self.adam.beta2 = parse(key, value)?,
            "eps" => self.adam.eps = parse(key, value)?,
            "weight_decay" => self.adam.weight_decay = parse(key, value)?,
            "batch_size" => self.batch_size = parse(key, value)?,
            "bptt_window" => self.bptt_window = parse(key, value)?,
            "clip_norm" => self.clip_norm = parse(key, value)?,
            "seed" => self.seed = parse(key, value)?,
            "eval_every" => self.eval_every = parse(key, value)?,
            "checkpoint_every" => self.checkpoint_every = parse(key, value)?,
            "shuffle" => self.shuffle = parse(key, value)?,
            other => return Err(Error::Config(format!("unknown key `{other}`"))),
        }
        Ok(())
    }

    pub fn from_text(text: &str, origin: impl AsRef<Path>) -> Result<Self> {
        let mut cfg = TrainConfig::default();
        for (k, v) in parse_flat(text, origin)? {
            cfg.set(&k, &v)?;
        }
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_text(&std::fs::read_to_string(path)?, path)
    }

    /// Renders every key; `from_text(render())` reproduces `self`.
    pub fn render(&self) -> String {
        let m = &self.model;
        let mut s = String::new();
        let mut kv = |k: &str, v: String| writeln!(s, "{k} = {v}").unwrap();
        kv("chunk_size", m.chunk_size.to_string());
        kv("d_model", m.d_model.to_string());
        kv("d_hidden", m.d_hidden.to_string());
        kv("ssm_taps", m.ssm_taps.to_string());
        kv("ssm_dt", format!("{:?}", m.ssm_dt));
        kv("conv_taps", m.conv_taps.to_string());
        kv(
            "dilations",
            m.dilations.iter().map(ToString::to_string).collect::<Vec<_>>().join(","),
        );
        kv("top_k", m.top_k.to_string());
        kv("mem_capacity", m.mem_capacity.to_string());
        match m.index_mode {
            IndexMode::Exact => kv("index", "exact".into()),
            IndexMode::Approximate { n_list, n_probe } => {
                kv("index", "approximate".into());
                kv("n_list", n_list.to_string());
                kv("n_probe", n_probe.to_string());
            }
        }
        kv("ablate", m.ablations.render());
        kv("lr", format!("{:?}", self.lr));
        kv("warmup_steps", self.warmup_steps.to_string());
        kv("max_steps", self.max_steps.to_string());
        kv("beta1", format!("{:?}", self.adam.beta1));
        kv("beta2", format!("{:?}", self.adam.beta2));
        kv("eps", format!("{:?}", self.adam.eps));
        kv("weight_decay", format!("{:?}", self.adam.weight_decay));
        kv("batch_size", self.batch_size.to_string());
        kv("bptt_window", self.bptt_window.to_string());
        kv("clip_norm", format!("{:?}", self.clip_norm));
        kv("seed", self.seed.to_string());
        kv("eval_every", self.eval_every.to_string());
        kv("checkpoint_every", self.checkpoint_every.to_string());
        kv("shuffle", self.shuffle.to_string());
        s
    }

    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        if self.bptt_window == 0 {
            return Err(Error::Config("bptt_window must be at least 1".into()));
        }
        if self.warmup_steps > self.max_steps && self.max_steps > 0 {
            return Err(Error::Config(format!(
                "warmup_steps ({}) exceeds max_steps ({})",
                self.warmup_steps, self.max_steps
            )));
        }
        if !(self.lr >= 0.0) {
            return Err(Error::Config("lr must be non-negative".into()));
        }
        if self.batch_size == 0 {
            return Err(Error::Config("batch_size must be positive".into()));
        }
        Ok(())
    }

    /// Linear warm-up to `lr`, then linear decay to zero at `max_steps`.
    pub fn lr_at(&self, step: u64) -> f64 {
        if self.warmup_steps > 0 && step <= self.warmup_steps {
            return self.lr * step as f64 / self.warmup_steps as f64;
        }
        if step >= self.max_steps {
            return 0.0;
        }
        let span = (self.max_steps - self.warmup_steps) as f64;
        self.lr * (self.max_steps - step) as f64 / span
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn render_round_trips() {
        let mut cfg = TrainConfig::default();
        cfg.set("dilations", "1,3,9").unwrap();
        cfg.set("ablate", "no_ssm,no_rnn").unwrap();
        cfg.set("n_probe", "4").unwrap();
        cfg.set("lr", "0.0123").unwrap();
        let back = TrainConfig::from_text(&cfg.render(), "mem").unwrap();
        assert_eq!(back, cfg);
    }

    #[test]
    fn unknown_key_is_named() {
        let err = TrainConfig::from_text("chunk_size = 64\nbogus = 1\n", "cfg").unwrap_err();
        assert!(err.to_string().contains("bogus"), "{err}");
        let err = TrainConfig::from_text("lr = fast\n", "cfg").unwrap_err();
        assert!(err.to_string().contains("`lr`"), "{err}");
    }

    #[test]
    fn flat_format_accepts_both_separators_and_comments() {
        let m = parse_flat("a = 1\nb 2 3 # note\n\n# c = 4\n", "x").unwrap();
        assert_eq!(m["a"], "1");
        assert_eq!(m["b"], "2 3");
        assert!(!m.contains_key("c"));
    }

    #[test]
    fn warmup_then_linear_decay() {
        let cfg = TrainConfig {
            lr: 1.0,
            warmup_steps: 10,
            max_steps: 110,
            ..TrainConfig::default()
        };
        for s in 1..=10 {
            assert_eq!(cfg.lr_at(s), s as f64 / 10.0);
        }
        assert_eq!(cfg.lr_at(60), 0.5);
        assert_eq!(cfg.lr_at(110), 0.0);
    }

    #[test]
    fn validation() {
        let mut cfg = TrainConfig::default();
        cfg.bptt_window = 0;
        assert!(cfg.validate().is_err());
        let mut cfg = TrainConfig::default();
        cfg.model.ssm_taps = 200;
        assert!(cfg.validate().is_err());
        let mut cfg = TrainConfig::default();
        cfg.warmup_steps = 5000;
        assert!(cfg.validate().is_err());
    }
}
