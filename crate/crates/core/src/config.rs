//! `key = value` run configuration.

use std::fmt;
use std::path::Path;
use std::str::FromStr;

use crate::data::{CorpusParams, CorruptionMix};
use crate::error::{Error, Result};
use crate::model::ModelConfig;
use crate::optim::TrainingSchedule;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Preset {
    Desk,
    Full,
    Overfit,
}

impl FromStr for Preset {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "desk" => Ok(Preset::Desk),
            "full" => Ok(Preset::Full),
            "overfit" => Ok(Preset::Overfit),
            _ => Err(Error::Config(format!(
                "unknown preset {s:?} (expected desk, full or overfit)"
            ))),
        }
    }
}

impl fmt::Display for Preset {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Preset::Desk => "desk",
            Preset::Full => "full",
            Preset::Overfit => "overfit",
        })
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct RunConfig {
    pub preset: Preset,
    pub seed: u64,
    pub data_dir: String,
    pub out_dir: String,

    pub train_size: usize,
    pub dev_size: usize,
    pub test_size: usize,
    pub repetition: f64,
    pub substitution: f64,
    pub drop: f64,
    pub min_count: usize,

    pub embed_dim: usize,
    pub hidden_dim: usize,
    pub attn_dim: usize,
    pub dc_hidden: usize,
    pub k: usize,
    pub d_v: usize,
    pub use_visual: bool,
    pub use_context_gate: bool,
    pub hard_scma: bool,
    pub fuse_dcnet: bool,

    pub batch_size: usize,
    pub xe_epochs: usize,
    pub mse_epochs: usize,
    pub scst_epochs: usize,
    /// Stop after this many optimizer steps in the XE phase; 0 means no cap.
    pub max_iterations: usize,
    pub max_decode_len: usize,
    /// Dev evaluation every this many XE epochs (and after the last); 0 disables.
    pub eval_every: usize,
    pub train_dcnet: bool,
    pub mse_on_editnet: bool,
    pub lr: f64,
    pub lr_decay: f64,
    pub lr_decay_every: usize,
    pub ss_increment: f64,
    pub ss_every: usize,
    pub ss_max: f64,
    pub scst_lr: f64,
    pub scst_anneal: f64,
}

impl RunConfig {
    pub fn preset(preset: Preset) -> Self {
        let desk = ModelConfig::desk(0);
        let schedule = TrainingSchedule::default();
        let base = RunConfig {
            preset,
            seed: 1,
            data_dir: "data".into(),
            out_dir: "run".into(),
            train_size: 2000,
            dev_size: 200,
            test_size: 200,
            repetition: 0.4,
            substitution: 0.3,
            drop: 0.2,
            min_count: 1,
            embed_dim: desk.embed_dim,
            hidden_dim: desk.hidden_dim,
            attn_dim: desk.attn_dim,
            dc_hidden: desk.dc_hidden,
            k: desk.k,
            d_v: desk.d_v,
            use_visual: true,
            use_context_gate: true,
            hard_scma: true,
            fuse_dcnet: true,
            batch_size: 16,
            xe_epochs: 12,
            mse_epochs: 1,
            scst_epochs: 0,
            max_iterations: 0,
            max_decode_len: 16,
            eval_every: 1,
            train_dcnet: true,
            mse_on_editnet: false,
            lr: 2e-3,
            lr_decay: schedule.decay_factor,
            lr_decay_every: schedule.decay_every,
            ss_increment: schedule.ss_increment,
            ss_every: schedule.ss_every,
            ss_max: schedule.ss_max,
            scst_lr: schedule.scst_lr,
            scst_anneal: schedule.scst_anneal,
        };
        match preset {
            Preset::Desk => base,
            Preset::Full => {
                let p = ModelConfig::full_dims(0);
                RunConfig {
                    embed_dim: p.embed_dim,
                    hidden_dim: p.hidden_dim,
                    attn_dim: p.attn_dim,
                    dc_hidden: p.dc_hidden,
                    k: p.k,
                    d_v: p.d_v,
                    batch_size: 80,
                    xe_epochs: 15,
                    scst_epochs: 15,
                    lr: schedule.base_lr,
                    ..base
                }
            }
            Preset::Overfit => RunConfig {
                train_size: 16,
                dev_size: 16,
                test_size: 16,
                fuse_dcnet: false,
                train_dcnet: false,
                mse_epochs: 0,
                xe_epochs: 300,
                max_iterations: 300,
                eval_every: 100,
                ss_increment: 0.0,
                lr: 1e-2,
                lr_decay: 1.0,
                ..base
            },
        }
    }

    pub fn model_config(&self, vocab_size: usize) -> ModelConfig {
        ModelConfig {
            vocab_size,
            embed_dim: self.embed_dim,
            hidden_dim: self.hidden_dim,
            attn_dim: self.attn_dim,
            dc_hidden: self.dc_hidden,
            k: self.k,
            d_v: self.d_v,
            use_visual: self.use_visual,
            use_context_gate: self.use_context_gate,
            hard_scma: self.hard_scma,
            fuse_dcnet: self.fuse_dcnet,
        }
    }

    pub fn corpus_params(&self) -> CorpusParams {
        CorpusParams {
            mix: CorruptionMix {
                repetition: self.repetition,
                substitution: self.substitution,
                drop: self.drop,
            },
            k: self.k,
            d_v: self.d_v,
            ..CorpusParams::default()
        }
    }

    pub fn schedule(&self) -> TrainingSchedule {
        TrainingSchedule {
            base_lr: self.lr,
            decay_factor: self.lr_decay,
            decay_every: self.lr_decay_every,
            ss_increment: self.ss_increment,
            ss_every: self.ss_every,
            ss_max: self.ss_max,
            scst_lr: self.scst_lr,
            scst_anneal: self.scst_anneal,
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.model_config(crate::data::UNK + 1).validate()?;
        self.corpus_params().mix.validate()?;
        self.schedule().validate()?;
        if self.batch_size == 0 {
            return Err(Error::Config("batch_size must be at least 1".into()));
        }
        if self.max_decode_len == 0 {
            return Err(Error::Config("max_decode_len must be at least 1".into()));
        }
        if self.train_size == 0 {
            return Err(Error::Config("train_size must be at least 1".into()));
        }
        Ok(())
    }

    /// Parses `key = value` lines on top of the preset named by a `preset`
    /// key (or `fallback`). Blank lines and `#` comments are ignored.
    pub fn parse(text: &str, fallback: Preset) -> Result<Self> {
        RunConfig::parse_inner(text, fallback, None)
    }

    /// As [`RunConfig::parse`], but `preset` wins over any `preset` key.
    pub fn parse_with_preset(text: &str, preset: Preset) -> Result<Self> {
        RunConfig::parse_inner(text, preset, Some(preset))
    }

    fn parse_inner(text: &str, fallback: Preset, forced: Option<Preset>) -> Result<Self> {
        let mut pairs = Vec::new();
        for (n, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("line {}: expected key = value", n + 1)))?;
            pairs.push((n + 1, k.trim().to_owned(), v.trim().to_owned()));
        }
        let preset = match (forced, pairs.iter().rev().find(|(_, k, _)| k == "preset")) {
            (Some(p), _) => p,
            (None, Some((_, _, v))) => v.parse()?,
            (None, None) => fallback,
        };
        let mut cfg = RunConfig::preset(preset);
        for (n, k, v) in &pairs {
            if k != "preset" {
                cfg.set(k, v).map_err(|e| Error::Config(format!("line {n}: {e}")))?;
            }
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path, fallback: Preset) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
        RunConfig::parse(&text, fallback)
    }

    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        fn p<T: FromStr>(key: &str, v: &str) -> Result<T> {
            v.parse()
                .map_err(|_| Error::Config(format!("cannot parse {key} = {v:?}")))
        }
        match key {
            "preset" => self.preset = value.parse()?,
            "seed" => self.seed = p(key, value)?,
            "data_dir" => self.data_dir = value.to_owned(),
            "out_dir" => self.out_dir = value.to_owned(),
            "train_size" => self.train_size = p(key, value)?,
            "dev_size" => self.dev_size = p(key, value)?,
            "test_size" => self.test_size = p(key, value)?,
            "repetition" => self.repetition = p(key, value)?,
            "substitution" => self.substitution = p(key, value)?,
            "drop" => self.drop = p(key, value)?,
            "min_count" => self.min_count = p(key, value)?,
            "embed_dim" => self.embed_dim = p(key, value)?,
            "hidden_dim" => self.hidden_dim = p(key, value)?,
            "attn_dim" => self.attn_dim = p(key, value)?,
            "dc_hidden" => self.dc_hidden = p(key, value)?,
            "k" => self.k = p(key, value)?,
            "d_v" => self.d_v = p(key, value)?,
            "use_visual" => self.use_visual = p(key, value)?,
            "use_context_gate" => self.use_context_gate = p(key, value)?,
            "hard_scma" => self.hard_scma = p(key, value)?,
            "fuse_dcnet" => self.fuse_dcnet = p(key, value)?,
            "batch_size" => self.batch_size = p(key, value)?,
            "xe_epochs" => self.xe_epochs = p(key, value)?,
            "mse_epochs" => self.mse_epochs = p(key, value)?,
            "scst_epochs" => self.scst_epochs = p(key, value)?,
            "max_iterations" => self.max_iterations = p(key, value)?,
            "max_decode_len" => self.max_decode_len = p(key, value)?,
            "eval_every" => self.eval_every = p(key, value)?,
            "train_dcnet" => self.train_dcnet = p(key, value)?,
            "mse_on_editnet" => self.mse_on_editnet = p(key, value)?,
            "lr" => self.lr = p(key, value)?,
            "lr_decay" => self.lr_decay = p(key, value)?,
            "lr_decay_every" => self.lr_decay_every = p(key, value)?,
            "ss_increment" => self.ss_increment = p(key, value)?,
            "ss_every" => self.ss_every = p(key, value)?,
            "ss_max" => self.ss_max = p(key, value)?,
            "scst_lr" => self.scst_lr = p(key, value)?,
            "scst_anneal" => self.scst_anneal = p(key, value)?,
            _ => return Err(Error::Config(format!("unknown key {key:?}"))),
        }
        Ok(())
    }
}

impl fmt::Display for RunConfig {
    /// Every key, in a form [`RunConfig::parse`] reads back.
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let c = self;
        writeln!(f, "preset = {}", c.preset)?;
        writeln!(f, "seed = {}", c.seed)?;
        writeln!(f, "data_dir = {}", c.data_dir)?;
        writeln!(f, "out_dir = {}", c.out_dir)?;
        writeln!(f, "train_size = {}", c.train_size)?;
        writeln!(f, "dev_size = {}", c.dev_size)?;
        writeln!(f, "test_size = {}", c.test_size)?;
        writeln!(f, "repetition = {:?}", c.repetition)?;
        writeln!(f, "substitution = {:?}", c.substitution)?;
        writeln!(f, "drop = {:?}", c.drop)?;
        writeln!(f, "min_count = {}", c.min_count)?;
        writeln!(f, "embed_dim = {}", c.embed_dim)?;
        writeln!(f, "hidden_dim = {}", c.hidden_dim)?;
        writeln!(f, "attn_dim = {}", c.attn_dim)?;
        writeln!(f, "dc_hidden = {}", c.dc_hidden)?;
        writeln!(f, "k = {}", c.k)?;
        writeln!(f, "d_v = {}", c.d_v)?;
        writeln!(f, "use_visual = {}", c.use_visual)?;
        writeln!(f, "use_context_gate = {}", c.use_context_gate)?;
        writeln!(f, "hard_scma = {}", c.hard_scma)?;
        writeln!(f, "fuse_dcnet = {}", c.fuse_dcnet)?;
        writeln!(f, "batch_size = {}", c.batch_size)?;
        writeln!(f, "xe_epochs = {}", c.xe_epochs)?;
        writeln!(f, "mse_epochs = {}", c.mse_epochs)?;
        writeln!(f, "scst_epochs = {}", c.scst_epochs)?;
        writeln!(f, "max_iterations = {}", c.max_iterations)?;
        writeln!(f, "max_decode_len = {}", c.max_decode_len)?;
        writeln!(f, "eval_every = {}", c.eval_every)?;
        writeln!(f, "train_dcnet = {}", c.train_dcnet)?;
        writeln!(f, "mse_on_editnet = {}", c.mse_on_editnet)?;
        writeln!(f, "lr = {:?}", c.lr)?;
        writeln!(f, "lr_decay = {:?}", c.lr_decay)?;
        writeln!(f, "lr_decay_every = {}", c.lr_decay_every)?;
        writeln!(f, "ss_increment = {:?}", c.ss_increment)?;
        writeln!(f, "ss_every = {}", c.ss_every)?;
        writeln!(f, "ss_max = {:?}", c.ss_max)?;
        writeln!(f, "scst_lr = {:?}", c.scst_lr)?;
        writeln!(f, "scst_anneal = {:?}", c.scst_anneal)
    }
}
