use std::fs;
use std::path::{Path, PathBuf};

use super::phase::{run_phase_with, seed_for, TrainOptions, TrainState};
use super::schedule::{LrRule, PhaseKind, PhasePlan, RejuvInit};
use super::sink::CsvSink;
use crate::checkpoint::Checkpoint;
use crate::data::ParallelCorpus;
use crate::error::{Error, Result};
use crate::model::{ModelConfig, Transformer};
use crate::pruning::{PruneSpec, Scope};

#[derive(Debug, Clone, PartialEq)]
pub struct PipelineConfig {
    pub model: ModelConfig,
    pub train: TrainOptions,
    /// Rule for Base, PruTrain and ConTrain.
    pub lr: LrRule,
    pub base_steps: u64,
    pub pru_steps: u64,
    pub rej_steps: u64,
    pub prune: PruneSpec,
    pub rej_lr_factor: f64,
    pub rejuv_init: RejuvInit,
    pub rounds: u32,
    pub control: bool,
    pub seed: u64,
    /// Snapshot interval in updates for trajectory analysis; 0 disables.
    pub snapshot_every: u64,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        PipelineConfig {
            model: ModelConfig::default(),
            train: TrainOptions::default(),
            lr: LrRule::InverseSqrt { peak: 5e-3, warmup: 400 },
            base_steps: 3000,
            pru_steps: 1500,
            rej_steps: 1500,
            prune: PruneSpec { ratio: 0.5, scope: Scope::Local },
            rej_lr_factor: 0.1,
            rejuv_init: RejuvInit::Zero,
            rounds: 1,
            control: true,
            seed: 1,
            snapshot_every: 250,
        }
    }
}

impl PipelineConfig {
    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        if self.rounds == 0 {
            return Err(Error::Config("rejuv.rounds must be at least 1".into()));
        }
        for plan in self.plans() {
            plan.validate()?;
        }
        Ok(())
    }

    pub fn base_plan(&self) -> PhasePlan {
        PhasePlan {
            kind: PhaseKind::Base,
            steps: self.base_steps,
            prune: None,
            rejuv_init: None,
            lr: self.lr,
            seed: seed_for(self.seed, 11),
        }
    }

    pub fn pru_plan(&self, round: u32) -> PhasePlan {
        PhasePlan {
            kind: PhaseKind::PruTrain,
            steps: self.pru_steps,
            prune: Some(self.prune),
            rejuv_init: None,
            lr: self.lr,
            seed: seed_for(self.seed, 100 + round as u64),
        }
    }

    pub fn rej_plan(&self, round: u32) -> PhasePlan {
        PhasePlan {
            kind: PhaseKind::RejTrain,
            steps: self.rej_steps,
            prune: None,
            rejuv_init: Some(self.rejuv_init),
            lr: LrRule::FractionOfLast(self.rej_lr_factor),
            seed: seed_for(self.seed, 200 + round as u64),
        }
    }

    /// The control continues dense training for as many updates as all
    /// prune/rejuvenate rounds together.
    pub fn con_plan(&self) -> PhasePlan {
        PhasePlan {
            kind: PhaseKind::ConTrain,
            steps: self.rounds as u64 * (self.pru_steps + self.rej_steps),
            prune: None,
            rejuv_init: None,
            lr: self.lr,
            seed: seed_for(self.seed, 300),
        }
    }

    fn plans(&self) -> Vec<PhasePlan> {
        let mut out = vec![self.base_plan()];
        for r in 1..=self.rounds {
            out.push(self.pru_plan(r));
            out.push(self.rej_plan(r));
        }
        if self.control {
            out.push(self.con_plan());
        }
        out
    }

    pub fn model_seed(&self) -> u64 {
        seed_for(self.seed, 10)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct RunCheckpoint {
    pub id: String,
    pub phase: PhaseKind,
    pub step: u64,
    pub path: PathBuf,
}

#[derive(Debug, Clone, PartialEq)]
pub struct PipelineRun {
    /// Phase-end checkpoints in execution order.
    pub checkpoints: Vec<RunCheckpoint>,
    /// Intermediate snapshots ordered by (step, phase).
    pub snapshots: Vec<RunCheckpoint>,
}

impl PipelineRun {
    pub fn get(&self, id: &str) -> Option<&RunCheckpoint> {
        self.checkpoints.iter().find(|c| c.id == id)
    }
}

struct Runner<'a> {
    cfg: &'a PipelineConfig,
    data: &'a ParallelCorpus,
    out_dir: &'a Path,
    snapshots: Vec<RunCheckpoint>,
}

impl Runner<'_> {
    fn phase(
        &mut self,
        id: &str,
        parent: Option<&str>,
        start: TrainState,
        plan: &PhasePlan,
        base: Option<&Transformer>,
        sink: &mut CsvSink,
    ) -> Result<(TrainState, RunCheckpoint)> {
        let every = self.cfg.snapshot_every;
        let traj = self.out_dir.join("traj");
        let seed = self.cfg.seed;
        let mut taken = Vec::new();
        let mut hook = |local: u64, st: &TrainState| -> Result<()> {
            if every > 0 && local > 0 && local.is_multiple_of(every) {
                let mut ck = Checkpoint::from_state(id, plan.kind, st, seed, parent);
                ck.optimizer = None;
                let path = traj.join(format!("{id}_{:06}.ckpt", st.step()));
                ck.save(&path)?;
                taken.push(RunCheckpoint { id: format!("{id}_{:06}", st.step()), phase: plan.kind, step: st.step(), path });
            }
            Ok(())
        };
        let state = run_phase_with(start, plan, &self.cfg.train, self.data, base.map(|b| &b.params), sink, &mut hook)?;
        self.snapshots.extend(taken);
        let path = self.out_dir.join(format!("{id}.ckpt"));
        Checkpoint::from_state(id, plan.kind, &state, seed, parent).save(&path)?;
        let rc = RunCheckpoint { id: id.to_string(), phase: plan.kind, step: state.step(), path };
        Ok((state, rc))
    }
}

/// Base, then `rounds` x (PruTrain, RejTrain), then optionally the ConTrain
/// control from the same Base state. Writes `base.ckpt`, `pru{r}.ckpt`,
/// `rej{r}.ckpt`, `con.ckpt`, `metrics.csv`, `metrics_con.csv` and
/// trajectory snapshots under `traj/`.
pub fn run_pipeline(cfg: &PipelineConfig, data: &ParallelCorpus, out_dir: &Path) -> Result<PipelineRun> {
    cfg.validate()?;
    fs::create_dir_all(out_dir)?;
    if cfg.snapshot_every > 0 {
        fs::create_dir_all(out_dir.join("traj"))?;
    }
    let mut runner = Runner { cfg, data, out_dir, snapshots: Vec::new() };
    let mut checkpoints = Vec::new();
    let mut sink = CsvSink::create(&out_dir.join("metrics.csv"))?;

    let model = Transformer::build(cfg.model.clone(), cfg.model_seed())?;
    let (base, rc) = runner.phase("base", None, TrainState::fresh(model), &cfg.base_plan(), None, &mut sink)?;
    checkpoints.push(rc);

    let mut state = base.clone();
    let mut parent = "base".to_string();
    for r in 1..=cfg.rounds {
        let id = format!("pru{r}");
        let (s, rc) = runner.phase(&id, Some(&parent), state, &cfg.pru_plan(r), None, &mut sink)?;
        checkpoints.push(rc);
        let rid = format!("rej{r}");
        let (s, rc) = runner.phase(&rid, Some(&id), s, &cfg.rej_plan(r), Some(&base.model), &mut sink)?;
        checkpoints.push(rc);
        state = s;
        parent = rid;
    }

    if cfg.control {
        let mut con_sink = CsvSink::create(&out_dir.join("metrics_con.csv"))?;
        let (_, rc) = runner.phase("con", Some("base"), base.clone(), &cfg.con_plan(), None, &mut con_sink)?;
        checkpoints.push(rc);
    }

    let mut snapshots = runner.snapshots;
    snapshots.sort_by_key(|a| (a.step, a.phase));
    Ok(PipelineRun { checkpoints, snapshots })
}
