//! Flat `key = value` run configuration.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use crate::data::{ParallelCorpus, Split, TaskKind, TaskSpec, Vocab};
use crate::error::{Error, Result};
use crate::pruning::PruneSpec;
use crate::train::{LrRule, PipelineConfig};

#[derive(Debug, Clone, PartialEq)]
pub struct TaskConfig {
    pub kind: TaskKind,
    pub vocab: usize,
    pub len_min: usize,
    pub len_max: usize,
    pub train_pairs: usize,
    pub dev_pairs: usize,
    pub test_pairs: usize,
    pub seed: u64,
}

impl Default for TaskConfig {
    fn default() -> Self {
        TaskConfig {
            kind: TaskKind::MappedReverse,
            vocab: 64,
            len_min: 4,
            len_max: 12,
            train_pairs: 8000,
            dev_pairs: 500,
            test_pairs: 500,
            seed: 7,
        }
    }
}

impl TaskConfig {
    pub fn spec(&self) -> Result<TaskSpec> {
        TaskSpec::new(self.kind, Vocab::new(self.vocab)?, (self.len_min, self.len_max), self.seed)
    }

    pub fn corpus(&self, split: Split) -> Result<ParallelCorpus> {
        let n = match split {
            Split::Train => self.train_pairs,
            Split::Dev => self.dev_pairs,
            Split::Test => self.test_pairs,
        };
        self.spec()?.generate(split, n)
    }
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct RunConfig {
    pub task: TaskConfig,
    pub pipeline: PipelineConfig,
    pub out_dir: Option<PathBuf>,
}

fn parse<T: FromStr>(key: &str, value: &str) -> Result<T> {
    value.parse().map_err(|_| Error::Config(format!("invalid value `{value}` for `{key}`")))
}

fn parse_bool(key: &str, value: &str) -> Result<bool> {
    match value {
        "true" | "yes" | "1" => Ok(true),
        "false" | "no" | "0" => Ok(false),
        _ => Err(Error::Config(format!("invalid boolean `{value}` for `{key}`"))),
    }
}

impl RunConfig {
    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::Config(format!("cannot read config {}: {e}", path.display())))?;
        text.parse()
    }

    /// Applies one `key = value` setting.
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        let t = &mut self.task;
        let p = &mut self.pipeline;
        let m = &mut p.model;
        match key {
            "task.kind" => t.kind = value.parse()?,
            "task.vocab" => t.vocab = parse(key, value)?,
            "task.len_min" => t.len_min = parse(key, value)?,
            "task.len_max" => t.len_max = parse(key, value)?,
            "task.train_pairs" => t.train_pairs = parse(key, value)?,
            "task.dev_pairs" => t.dev_pairs = parse(key, value)?,
            "task.test_pairs" => t.test_pairs = parse(key, value)?,
            "task.seed" => t.seed = parse(key, value)?,
            "model.vocab_size" => m.vocab_size = parse(key, value)?,
            "model.d_model" => m.d_model = parse(key, value)?,
            "model.n_heads" => m.n_heads = parse(key, value)?,
            "model.ffn_dim" => m.ffn_dim = parse(key, value)?,
            "model.enc_layers" => m.enc_layers = parse(key, value)?,
            "model.dec_layers" => m.dec_layers = parse(key, value)?,
            "model.max_len" => m.max_len = parse(key, value)?,
            "model.dropout" => m.dropout = parse(key, value)?,
            "train.batch_size" => p.train.batch_size = parse(key, value)?,
            "train.lr" | "train.warmup" => {
                let LrRule::InverseSqrt { peak, warmup } = &mut p.lr else { unreachable!() };
                if key == "train.lr" {
                    *peak = parse(key, value)?;
                } else {
                    *warmup = parse(key, value)?;
                }
            }
            "train.clip" => {
                p.train.clip = match value {
                    "none" | "off" => None,
                    v => Some(parse::<f32>(key, v)?).filter(|&c| c > 0.0),
                }
            }
            "train.log_every" => p.train.log_every = parse(key, value)?,
            "phase.base.steps" => p.base_steps = parse(key, value)?,
            "phase.prutrain.steps" => p.pru_steps = parse(key, value)?,
            "phase.prutrain.ratio" => p.prune.ratio = parse(key, value)?,
            "phase.prutrain.scope" => p.prune.scope = value.parse()?,
            "phase.rejtrain.steps" => p.rej_steps = parse(key, value)?,
            "phase.rejtrain.lr_factor" => p.rej_lr_factor = parse(key, value)?,
            "rejuv.init" => p.rejuv_init = value.parse()?,
            "rejuv.rounds" => p.rounds = parse(key, value)?,
            "control.enabled" => p.control = parse_bool(key, value)?,
            "seed" => p.seed = parse(key, value)?,
            "analysis.snapshot_every" => p.snapshot_every = parse(key, value)?,
            "output.dir" => self.out_dir = Some(PathBuf::from(value)),
            _ => return Err(Error::Config(format!("unknown config key `{key}`"))),
        }
        Ok(())
    }

    pub fn validate(&self) -> Result<()> {
        let t = &self.task;
        let m = &self.pipeline.model;
        Vocab::new(t.vocab)?;
        if t.len_min == 0 || t.len_min > t.len_max {
            return Err(Error::Config(format!("invalid length range {}..={}", t.len_min, t.len_max)));
        }
        if m.vocab_size != t.vocab {
            return Err(Error::Config(format!("model.vocab_size {} does not match task.vocab {}", m.vocab_size, t.vocab)));
        }
        // Sequences gain one EOS on the encoder side and one BOS/EOS on the decoder side.
        if m.max_len < t.len_max + 1 {
            return Err(Error::Config(format!("model.max_len {} is too short for task.len_max {} plus EOS", m.max_len, t.len_max)));
        }
        PruneSpec::new(self.pipeline.prune.ratio, self.pipeline.prune.scope)?;
        self.pipeline.validate()
    }
}

impl FromStr for RunConfig {
    type Err = Error;

    /// Parses `key = value` lines; `#` starts a comment. `model.vocab_size`
    /// follows `task.vocab` unless set explicitly.
    fn from_str(text: &str) -> Result<Self> {
        let mut seen = BTreeMap::new();
        for (i, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (k, v) =
                line.split_once('=').ok_or_else(|| Error::Config(format!("line {}: expected `key = value`, got `{line}`", i + 1)))?;
            let (k, v) = (k.trim(), v.trim());
            if seen.insert(k.to_string(), v.to_string()).is_some() {
                return Err(Error::Config(format!("line {}: duplicate key `{k}`", i + 1)));
            }
        }
        let mut cfg = RunConfig::default();
        for (k, v) in &seen {
            cfg.set(k, v)?;
        }
        if seen.contains_key("task.vocab") && !seen.contains_key("model.vocab_size") {
            cfg.pipeline.model.vocab_size = cfg.task.vocab;
        }
        cfg.validate()?;
        Ok(cfg)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::pruning::Scope;
    use crate::train::RejuvInit;

    #[test]
    fn empty_text_gives_defaults() {
        let cfg: RunConfig = "# nothing\n\n".parse().unwrap();
        assert_eq!(cfg, RunConfig::default());
    }

    #[test]
    fn dotted_keys_and_comments() {
        let cfg: RunConfig = "model.d_model = 16  # smaller\nphase.prutrain.ratio = 0.3\nphase.prutrain.scope = global\n\
                              rejuv.init = external\nrejuv.rounds = 2\ncontrol.enabled = false\ntask.vocab = 20\ntrain.clip = none\n"
            .parse()
            .unwrap();
        assert_eq!(cfg.pipeline.model.d_model, 16);
        assert_eq!(cfg.pipeline.prune.ratio, 0.3);
        assert_eq!(cfg.pipeline.prune.scope, Scope::Global);
        assert_eq!(cfg.pipeline.rejuv_init, RejuvInit::External);
        assert_eq!(cfg.pipeline.rounds, 2);
        assert!(!cfg.pipeline.control);
        assert_eq!(cfg.pipeline.model.vocab_size, 20);
        assert_eq!(cfg.pipeline.train.clip, None);
    }

    #[test]
    fn rejects_bad_input() {
        for text in [
            "bogus.key = 1",
            "model.d_model = abc",
            "no equals sign",
            "seed = 1\nseed = 2",
            "phase.prutrain.ratio = 1.5",
            "model.d_model = 30",
            "rejuv.init = random",
            "task.len_max = 20",
            "model.vocab_size = 32",
        ] {
            assert!(matches!(text.parse::<RunConfig>(), Err(Error::Config(_))), "{text}");
        }
    }
}
