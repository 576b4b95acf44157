//! Run configuration: plain-text `key = value` lines, `#` comments, every
//! key defaulted, unknown keys rejected. The raw text is echoed into
//! checkpoints for provenance.

use std::collections::BTreeSet;

use crate::error::{Error, Result};
use crate::mixer::AttentionKind;
use crate::pipeline::split::{SplitMode, SplitSpec};
use crate::pipeline::train::TrainConfig;
use crate::tmm::GraphOperatorKind;

#[derive(Debug, Clone)]
pub struct RunConfig {
    /// Verbatim text this config was parsed from (checkpoint provenance).
    pub raw_text: String,
    pub seed: u64,

    // model
    pub hidden: usize,
    pub operator: String,
    pub tag_hops: usize,
    pub window: usize,
    pub cutoff: f64,
    pub heads: usize,
    pub layers: usize,
    /// 0 means "twice the hidden dim".
    pub ffn_dim: usize,
    pub dropout: f64,
    pub attention: String,
    pub block: usize,
    /// `full` or `head`.
    pub arch: String,
    pub vamp_dim: usize,
    pub eps: f64,

    // spib
    pub spib_latent: usize,
    pub spib_pseudo: usize,
    pub spib_beta: f64,
    pub spib_states: usize,
    pub spib_refine_every: usize,
    pub spib_max_refines: usize,
    pub spib_refine_tol: f64,
    pub spib_refine_patience: usize,

    // train
    pub batch: usize,
    pub lr_vamp: f64,
    pub lr_spib: f64,
    pub max_epochs: usize,
    pub val_interval: usize,
    pub val_patience: usize,
    pub train_patience: usize,

    // data
    pub stride: usize,
    pub lag_ns: f64,

    // split
    pub split_fraction: f64,
    pub split_mode: String,
    pub split_fragments: usize,
    /// 0 means "use the global seed".
    pub split_seed: u64,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            raw_text: String::new(),
            seed: 1234,
            hidden: 64,
            operator: "rggc".into(),
            tag_hops: 2,
            window: 6,
            cutoff: 10.0,
            heads: 4,
            layers: 3,
            ffn_dim: 0,
            dropout: 0.1,
            attention: "blockwise".into(),
            block: 64,
            arch: "full".into(),
            vamp_dim: 2,
            eps: 1e-6,
            spib_latent: 2,
            spib_pseudo: 10,
            spib_beta: 0.01,
            spib_states: 100,
            spib_refine_every: 5,
            spib_max_refines: 5,
            spib_refine_tol: 0.01,
            spib_refine_patience: 10,
            batch: 1000,
            lr_vamp: 5e-4,
            lr_spib: 2e-4,
            max_epochs: 5,
            val_interval: 50,
            val_patience: 10,
            train_patience: 1000,
            stride: 1,
            lag_ns: 1.0,
            split_fraction: 0.2,
            split_mode: "by_trajectory".into(),
            split_fragments: 2,
            split_seed: 0,
        }
    }
}

const KEYS: &[&str] = &[
    "seed",
    "model.hidden",
    "model.operator",
    "model.tag_hops",
    "model.window",
    "model.cutoff",
    "model.heads",
    "model.layers",
    "model.ffn_dim",
    "model.dropout",
    "model.attention",
    "model.block",
    "model.arch",
    "model.vamp_dim",
    "model.eps",
    "spib.latent",
    "spib.pseudo",
    "spib.beta",
    "spib.states",
    "spib.refine_every",
    "spib.max_refines",
    "spib.refine_tol",
    "spib.refine_patience",
    "train.batch",
    "train.lr_vamp",
    "train.lr_spib",
    "train.max_epochs",
    "train.val_interval",
    "train.val_patience",
    "train.train_patience",
    "data.stride",
    "data.lag_ns",
    "split.fraction",
    "split.mode",
    "split.fragments",
    "split.seed",
];

impl RunConfig {
    pub fn parse(text: &str) -> Result<RunConfig> {
        let mut cfg = RunConfig { raw_text: text.to_string(), ..Default::default() };
        let known: BTreeSet<&str> = KEYS.iter().copied().collect();
        for (lineno, line) in text.lines().enumerate() {
            let line = line.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let (key, value) = line.split_once('=').ok_or_else(|| {
                Error::Config(format!("line {}: expected key = value, got '{line}'", lineno + 1))
            })?;
            let key = key.trim();
            let value = value.trim();
            if !known.contains(key) {
                return Err(Error::Config(format!("line {}: unknown key '{key}'", lineno + 1)));
            }
            cfg.set(key, value).map_err(|e| {
                Error::Config(format!("line {}: {e}", lineno + 1))
            })?;
        }
        cfg.validate()?;
        Ok(cfg)
    }

    fn set(&mut self, key: &str, value: &str) -> Result<()> {
        fn num<T: std::str::FromStr>(key: &str, v: &str) -> Result<T> {
            v.parse().map_err(|_| Error::Config(format!("bad value '{v}' for {key}")))
        }
        match key {
            "seed" => self.seed = num(key, value)?,
            "model.hidden" => self.hidden = num(key, value)?,
            "model.operator" => self.operator = value.to_string(),
            "model.tag_hops" => self.tag_hops = num(key, value)?,
            "model.window" => self.window = num(key, value)?,
            "model.cutoff" => self.cutoff = num(key, value)?,
            "model.heads" => self.heads = num(key, value)?,
            "model.layers" => self.layers = num(key, value)?,
            "model.ffn_dim" => self.ffn_dim = num(key, value)?,
            "model.dropout" => self.dropout = num(key, value)?,
            "model.attention" => self.attention = value.to_string(),
            "model.block" => self.block = num(key, value)?,
            "model.arch" => self.arch = value.to_string(),
            "model.vamp_dim" => self.vamp_dim = num(key, value)?,
            "model.eps" => self.eps = num(key, value)?,
            "spib.latent" => self.spib_latent = num(key, value)?,
            "spib.pseudo" => self.spib_pseudo = num(key, value)?,
            "spib.beta" => self.spib_beta = num(key, value)?,
            "spib.states" => self.spib_states = num(key, value)?,
            "spib.refine_every" => self.spib_refine_every = num(key, value)?,
            "spib.max_refines" => self.spib_max_refines = num(key, value)?,
            "spib.refine_tol" => self.spib_refine_tol = num(key, value)?,
            "spib.refine_patience" => self.spib_refine_patience = num(key, value)?,
            "train.batch" => self.batch = num(key, value)?,
            "train.lr_vamp" => self.lr_vamp = num(key, value)?,
            "train.lr_spib" => self.lr_spib = num(key, value)?,
            "train.max_epochs" => self.max_epochs = num(key, value)?,
            "train.val_interval" => self.val_interval = num(key, value)?,
            "train.val_patience" => self.val_patience = num(key, value)?,
            "train.train_patience" => self.train_patience = num(key, value)?,
            "data.stride" => self.stride = num(key, value)?,
            "data.lag_ns" => self.lag_ns = num(key, value)?,
            "split.fraction" => self.split_fraction = num(key, value)?,
            "split.mode" => self.split_mode = value.to_string(),
            "split.fragments" => self.split_fragments = num(key, value)?,
            "split.seed" => self.split_seed = num(key, value)?,
            _ => unreachable!("key membership already checked"),
        }
        Ok(())
    }

    /// Reject contradictions before any compute.
    pub fn validate(&self) -> Result<()> {
        if self.hidden % 2 != 0 {
            return Err(Error::Config(format!(
                "model.hidden = {} must be even (sinusoidal positional encoding)",
                self.hidden
            )));
        }
        if self.window == 0 {
            return Err(Error::Config("model.window must be >= 1".into()));
        }
        if self.heads == 0 || self.hidden % self.heads != 0 {
            return Err(Error::Config(format!(
                "model.hidden = {} must be divisible by model.heads = {}",
                self.hidden, self.heads
            )));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(Error::Config(format!("model.dropout = {} outside [0, 1)", self.dropout)));
        }
        self.operator_kind()?;
        self.attention_kind()?;
        match self.arch.as_str() {
            "full" | "head" => {}
            other => return Err(Error::Config(format!("model.arch '{other}' (expected full|head)"))),
        }
        self.split_spec()?;
        if self.batch == 0 || self.val_interval == 0 {
            return Err(Error::Config("train.batch and train.val_interval must be >= 1".into()));
        }
        Ok(())
    }

    pub fn operator_kind(&self) -> Result<GraphOperatorKind> {
        GraphOperatorKind::parse(&self.operator, self.tag_hops)
    }

    pub fn attention_kind(&self) -> Result<AttentionKind> {
        AttentionKind::parse(&self.attention, self.block)
    }

    pub fn ffn_dim_effective(&self) -> usize {
        if self.ffn_dim == 0 {
            2 * self.hidden
        } else {
            self.ffn_dim
        }
    }

    pub fn split_spec(&self) -> Result<SplitSpec> {
        let mode = match self.split_mode.as_str() {
            "by_trajectory" => SplitMode::ByTrajectory,
            "temporal_fragments" => SplitMode::TemporalFragments(self.split_fragments),
            other => {
                return Err(Error::Config(format!(
                    "split.mode '{other}' (expected by_trajectory|temporal_fragments)"
                )))
            }
        };
        Ok(SplitSpec {
            fraction: self.split_fraction,
            mode,
            seed: if self.split_seed == 0 { self.seed } else { self.split_seed },
        })
    }

    pub fn train_config(&self, lr: f64) -> TrainConfig {
        TrainConfig {
            batch_size: self.batch,
            learning_rate: lr,
            max_epochs: self.max_epochs,
            val_interval: self.val_interval,
            val_patience: self.val_patience,
            train_patience: self.train_patience,
            seed: self.seed,
        }
    }

    /// Apply the FRAGMIX_SEED environment override, recording it in the
    /// echoed text so checkpoints stay self-describing.
    pub fn apply_seed_override(&mut self, env_value: Option<String>) -> Result<()> {
        if let Some(v) = env_value {
            let seed: u64 = v
                .parse()
                .map_err(|_| Error::Config(format!("FRAGMIX_SEED '{v}' is not an integer")))?;
            self.seed = seed;
            self.raw_text.push_str(&format!("\n# seed overridden by FRAGMIX_SEED\nseed = {seed}\n"));
        }
        Ok(())
    }

    /// Text listing every key at its default, the starting point users
    /// copy and edit.
    pub fn default_text() -> String {
        let d = RunConfig::default();
        format!(
            "# fragmix run configuration (defaults)\n\
             seed = {}\n\
             model.hidden = {}\n\
             model.operator = {}\n\
             model.tag_hops = {}\n\
             model.window = {}\n\
             model.cutoff = {}\n\
             model.heads = {}\n\
             model.layers = {}\n\
             model.ffn_dim = {}\n\
             model.dropout = {}\n\
             model.attention = {}\n\
             model.block = {}\n\
             model.arch = {}\n\
             model.vamp_dim = {}\n\
             model.eps = {}\n\
             spib.latent = {}\n\
             spib.pseudo = {}\n\
             spib.beta = {}\n\
             spib.states = {}\n\
             spib.refine_every = {}\n\
             spib.max_refines = {}\n\
             spib.refine_tol = {}\n\
             spib.refine_patience = {}\n\
             train.batch = {}\n\
             train.lr_vamp = {}\n\
             train.lr_spib = {}\n\
             train.max_epochs = {}\n\
             train.val_interval = {}\n\
             train.val_patience = {}\n\
             train.train_patience = {}\n\
             data.stride = {}\n\
             data.lag_ns = {}\n\
             split.fraction = {}\n\
             split.mode = {}\n\
             split.fragments = {}\n\
             split.seed = {}\n",
            d.seed,
            d.hidden,
            d.operator,
            d.tag_hops,
            d.window,
            d.cutoff,
            d.heads,
            d.layers,
            d.ffn_dim,
            d.dropout,
            d.attention,
            d.block,
            d.arch,
            d.vamp_dim,
            d.eps,
            d.spib_latent,
            d.spib_pseudo,
            d.spib_beta,
            d.spib_states,
            d.spib_refine_every,
            d.spib_max_refines,
            d.spib_refine_tol,
            d.spib_refine_patience,
            d.batch,
            d.lr_vamp,
            d.lr_spib,
            d.max_epochs,
            d.val_interval,
            d.val_patience,
            d.train_patience,
            d.stride,
            d.lag_ns,
            d.split_fraction,
            d.split_mode,
            d.split_fragments,
            d.split_seed,
        )
    }
}
