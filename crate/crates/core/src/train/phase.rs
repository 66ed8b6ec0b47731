use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::optim::{adam_step, clip_global_norm, mask_gradients, OptimizerState};
use super::schedule::{PhaseKind, PhasePlan, RejuvInit};
use super::sink::{LogRecord, MetricsSink};
use crate::data::{Batcher, ParallelCorpus};
use crate::error::{Error, Result};
use crate::model::{ParameterStore, Transformer};
use crate::pruning::{apply_mask, compute_mask, PruneMask};

#[derive(Debug, Clone, PartialEq)]
pub struct TrainOptions {
    pub batch_size: usize,
    /// Global-norm gradient clip; `None` disables clipping.
    pub clip: Option<f32>,
    pub log_every: u64,
}

impl Default for TrainOptions {
    fn default() -> Self {
        TrainOptions { batch_size: 32, clip: Some(1.0), log_every: 50 }
    }
}

/// Everything a phase hands to the next one.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainState {
    pub model: Transformer,
    pub mask: Option<PruneMask>,
    pub opt: OptimizerState,
    /// Rate of the most recent update.
    pub last_lr: Option<f64>,
    pub last_phase: Option<PhaseKind>,
}

impl TrainState {
    pub fn fresh(model: Transformer) -> Self {
        let opt = OptimizerState::new(&model.params);
        TrainState { model, mask: None, opt, last_lr: None, last_phase: None }
    }

    pub fn step(&self) -> u64 {
        self.opt.step
    }
}

/// Called at update boundaries so callers can snapshot weights mid-phase.
/// `local_step` 0 is the state after phase setup, before the first update.
pub trait StepHook {
    fn after_step(&mut self, local_step: u64, state: &TrainState) -> Result<()>;
}

impl<F: FnMut(u64, &TrainState) -> Result<()>> StepHook for F {
    fn after_step(&mut self, local_step: u64, state: &TrainState) -> Result<()> {
        self(local_step, state)
    }
}

pub fn seed_for(seed: u64, salt: u64) -> u64 {
    let mut z = seed ^ salt.wrapping_mul(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Fills pruned positions of `store` with the Base model's values.
fn splice_external(store: &mut ParameterStore, mask: &PruneMask, base: &ParameterStore) -> Result<()> {
    for (name, bits) in mask.iter() {
        let src = base.tensor(name)?;
        let dst = store.tensor_mut(name)?;
        if src.shape != dst.shape {
            return Err(Error::Integrity(format!("base parameter `{name}` has shape {:?}, expected {:?}", src.shape, dst.shape)));
        }
        for ((d, &s), &keep) in dst.data.iter_mut().zip(&src.data).zip(bits) {
            if !keep {
                *d = s;
            }
        }
    }
    Ok(())
}

/// Runs one phase. `base` is the Base-phase store, needed only for external
/// rejuvenation.
pub fn run_phase(
    start: TrainState,
    plan: &PhasePlan,
    opts: &TrainOptions,
    data: &ParallelCorpus,
    base: Option<&ParameterStore>,
    sink: &mut dyn MetricsSink,
) -> Result<TrainState> {
    run_phase_with(start, plan, opts, data, base, sink, &mut |_: u64, _: &TrainState| Ok(()))
}

pub fn run_phase_with(
    start: TrainState,
    plan: &PhasePlan,
    opts: &TrainOptions,
    data: &ParallelCorpus,
    base: Option<&ParameterStore>,
    sink: &mut dyn MetricsSink,
    hook: &mut dyn StepHook,
) -> Result<TrainState> {
    plan.validate()?;
    if opts.log_every == 0 {
        return Err(Error::Config("log interval must be at least 1".into()));
    }
    let mut state = start;
    state.opt.check_matches(&state.model.params)?;
    match plan.kind {
        PhaseKind::Base | PhaseKind::ConTrain => {
            if state.mask.is_some() {
                return Err(Error::Config(format!("{} phase cannot start from a masked store", plan.kind)));
            }
        }
        PhaseKind::PruTrain => {
            let spec = plan.prune.as_ref().expect("validated");
            let mask = compute_mask(&state.model.params, spec)?;
            apply_mask(&mut state.model.params, &mask)?;
            state.opt.apply_mask(&mask);
            state.mask = Some(mask);
        }
        PhaseKind::RejTrain => {
            let mask = match (state.last_phase, state.mask.take()) {
                (Some(PhaseKind::PruTrain), Some(m)) => m,
                _ => return Err(Error::Config("rejtrain must follow a prutrain phase".into())),
            };
            if plan.rejuv_init == Some(RejuvInit::External) {
                let base = base.ok_or_else(|| Error::Config("external rejuvenation requires the Base checkpoint".into()))?;
                splice_external(&mut state.model.params, &mask, base)?;
            }
        }
    }

    let batcher = Batcher::new(data, opts.batch_size, seed_for(plan.seed, 1))?;
    let mut batches = batcher.stream();
    let mut dropout = ChaCha8Rng::seed_from_u64(seed_for(plan.seed, 2));
    let carried_lr = state.last_lr;
    hook.after_step(0, &state)?;
    for local in 1..=plan.steps {
        let batch = batches.next().expect("batch stream is endless");
        let (loss, mut grads) = state.model.loss_and_grads(&batch, Some(&mut dropout))?;
        if !loss.is_finite() {
            return Err(Error::Numerical(format!("{} loss became {loss} at step {}", plan.kind, state.opt.step + 1)));
        }
        if let Some(mask) = &state.mask {
            mask_gradients(&mut grads, mask);
        }
        if let Some(c) = opts.clip {
            clip_global_norm(&mut grads, c);
        }
        let lr = plan.lr.rate(state.opt.step + 1, carried_lr)?;
        adam_step(&mut state.model.params, &grads, &mut state.opt, lr as f32, state.mask.as_ref())?;
        state.last_lr = Some(lr);
        sink.observe(state.opt.step, &state.model.params, state.mask.as_ref())?;
        if local % opts.log_every == 0 || local == plan.steps {
            sink.record(&LogRecord { step: state.opt.step, phase: plan.kind, loss, lr, nonzero_params: state.model.params.num_nonzero() })?;
        }
        hook.after_step(local, &state)?;
    }
    state.last_phase = Some(plan.kind);
    Ok(state)
}
