use std::fmt;
use std::str::FromStr;

use crate::error::{Error, Result};
use crate::pruning::PruneSpec;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum PhaseKind {
    Base,
    ConTrain,
    PruTrain,
    RejTrain,
}

impl PhaseKind {
    pub fn as_str(&self) -> &'static str {
        match self {
            PhaseKind::Base => "base",
            PhaseKind::ConTrain => "contrain",
            PhaseKind::PruTrain => "prutrain",
            PhaseKind::RejTrain => "rejtrain",
        }
    }
}

impl FromStr for PhaseKind {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "base" => Ok(PhaseKind::Base),
            "contrain" => Ok(PhaseKind::ConTrain),
            "prutrain" => Ok(PhaseKind::PruTrain),
            "rejtrain" => Ok(PhaseKind::RejTrain),
            _ => Err(Error::Config(format!("unknown phase `{s}`"))),
        }
    }
}

impl fmt::Display for PhaseKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

/// How pruned entries are refilled when the sparsity constraint is released.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum RejuvInit {
    Zero,
    /// Copy the value the Base model held at that position.
    External,
}

impl FromStr for RejuvInit {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "zero" => Ok(RejuvInit::Zero),
            "external" => Ok(RejuvInit::External),
            _ => Err(Error::Config(format!("unknown rejuvenation init `{s}` (expected zero or external)"))),
        }
    }
}

impl fmt::Display for RejuvInit {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            RejuvInit::Zero => "zero",
            RejuvInit::External => "external",
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum LrRule {
    /// Linear warmup to `peak` over `warmup` updates, then `peak * sqrt(warmup / t)`.
    /// Evaluated at the optimizer's global update count.
    InverseSqrt {
        peak: f64,
        warmup: u64,
    },
    Constant(f64),
    /// Constant at `factor` times the rate used by the previous phase's last update.
    FractionOfLast(f64),
}

impl LrRule {
    /// Rate for update number `t` (1-based, global). `last` is the rate of the
    /// preceding update, if any.
    pub fn rate(&self, t: u64, last: Option<f64>) -> Result<f64> {
        match *self {
            LrRule::InverseSqrt { peak, warmup } => {
                let t = t.max(1) as f64;
                let w = warmup.max(1) as f64;
                Ok(peak * (t / w).min((w / t).sqrt()))
            }
            LrRule::Constant(lr) => Ok(lr),
            LrRule::FractionOfLast(f) => {
                last.map(|l| f * l).ok_or_else(|| Error::Config("reduced learning rate needs a preceding phase".into()))
            }
        }
    }

    fn validate(&self) -> Result<()> {
        let ok = match *self {
            LrRule::InverseSqrt { peak, .. } => peak > 0.0,
            LrRule::Constant(lr) => lr > 0.0,
            LrRule::FractionOfLast(f) => f > 0.0,
        };
        if ok {
            Ok(())
        } else {
            Err(Error::Config(format!("learning-rate rule {self:?} must be positive")))
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct PhasePlan {
    pub kind: PhaseKind,
    pub steps: u64,
    pub prune: Option<PruneSpec>,
    pub rejuv_init: Option<RejuvInit>,
    pub lr: LrRule,
    pub seed: u64,
}

impl PhasePlan {
    pub fn validate(&self) -> Result<()> {
        if self.steps == 0 {
            return Err(Error::Config(format!("{} phase needs at least one step", self.kind)));
        }
        match (self.kind, &self.prune) {
            (PhaseKind::PruTrain, None) => return Err(Error::Config("prutrain phase needs a pruning spec".into())),
            (PhaseKind::PruTrain, Some(p)) => p.validate()?,
            (_, Some(_)) => return Err(Error::Config(format!("{} phase cannot carry a pruning spec", self.kind))),
            _ => {}
        }
        match (self.kind, self.rejuv_init) {
            (PhaseKind::RejTrain, None) => return Err(Error::Config("rejtrain phase needs an init mode".into())),
            (PhaseKind::RejTrain, Some(_)) | (_, None) => {}
            (_, Some(_)) => return Err(Error::Config(format!("{} phase cannot carry an init mode", self.kind))),
        }
        self.lr.validate()
    }
}
