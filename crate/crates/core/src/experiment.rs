//! Pruning-ratio sweep over a trained Base checkpoint.

use crate::checkpoint::Checkpoint;
use crate::data::ParallelCorpus;
use crate::error::Result;
use crate::eval::corpus_bleu;
use crate::pruning::{apply_mask, compute_mask, PruneSpec};
use crate::train::{run_phase, NullSink, PipelineConfig};

pub const SWEEP_HEADER: &str = "gamma,bleu_prune,bleu_prutrain";

#[derive(Debug, Clone, PartialEq)]
pub struct SweepRow {
    pub gamma: f64,
    /// Dev BLEU right after pruning, without retraining.
    pub bleu_prune: f64,
    /// Dev BLEU after a PruTrain phase at this ratio.
    pub bleu_prutrain: f64,
}

impl SweepRow {
    pub fn csv_row(&self) -> String {
        format!("{},{},{}", self.gamma, self.bleu_prune, self.bleu_prutrain)
    }
}

/// For each ratio: prune the Base model directly and score it, then run the
/// configured PruTrain phase from Base at that ratio and score the result.
pub fn sweep_ratio(
    base: &Checkpoint,
    cfg: &PipelineConfig,
    ratios: &[f64],
    train: &ParallelCorpus,
    dev: &ParallelCorpus,
) -> Result<Vec<SweepRow>> {
    let model = base.model()?;
    let mut rows = Vec::with_capacity(ratios.len());
    for &gamma in ratios {
        let spec = PruneSpec::new(gamma, cfg.prune.scope)?;
        let mut pruned = model.clone();
        let mask = compute_mask(&pruned.params, &spec)?;
        apply_mask(&mut pruned.params, &mask)?;
        let bleu_prune = corpus_bleu(&pruned, dev)?;

        let mut plan = cfg.pru_plan(1);
        plan.prune = Some(spec);
        let state = run_phase(base.clone().into_state()?, &plan, &cfg.train, train, None, &mut NullSink)?;
        let bleu_prutrain = corpus_bleu(&state.model, dev)?;
        rows.push(SweepRow { gamma, bleu_prune, bleu_prutrain });
    }
    Ok(rows)
}
