//! BLEU-4, perplexity and the paired sign test.

use std::collections::HashMap;

use crate::data::{PaddedBatch, Pair, ParallelCorpus};
use crate::error::{Error, Result};
use crate::model::Transformer;

const EVAL_BATCH: usize = 64;

pub const RESULTS_HEADER: &str = "run_id,phase,bleu,perplexity,n_sentences";

fn ngram_counts(seq: &[u32], n: usize) -> HashMap<&[u32], usize> {
    let mut counts = HashMap::new();
    if seq.len() >= n {
        for w in seq.windows(n) {
            *counts.entry(w).or_insert(0) += 1;
        }
    }
    counts
}

/// Clipped n-gram matches and hypothesis n-gram totals for n = 1..4.
fn sentence_stats(hyp: &[u32], reference: &[u32]) -> [(usize, usize); 4] {
    let mut out = [(0, 0); 4];
    for (k, slot) in out.iter_mut().enumerate() {
        let n = k + 1;
        let h = ngram_counts(hyp, n);
        let r = ngram_counts(reference, n);
        let matched = h.iter().map(|(g, &c)| c.min(r.get(g).copied().unwrap_or(0))).sum();
        *slot = (matched, hyp.len().saturating_sub(n - 1));
    }
    out
}

fn brevity_penalty(hyp_len: usize, ref_len: usize) -> f64 {
    if hyp_len == 0 {
        0.0
    } else {
        (1.0 - ref_len as f64 / hyp_len as f64).exp().min(1.0)
    }
}

fn combine(precisions: [f64; 4], bp: f64) -> f64 {
    if precisions.iter().any(|&p| p <= 0.0) {
        return 0.0;
    }
    bp * precisions.iter().map(|p| 0.25 * p.ln()).sum::<f64>().exp()
}

/// Corpus-level BLEU-4 with uniform weights and brevity penalty, unsmoothed.
pub fn bleu4(hypotheses: &[Vec<u32>], references: &[Vec<u32>]) -> Result<f64> {
    if hypotheses.len() != references.len() {
        return Err(Error::Usage(format!("bleu4: {} hypotheses but {} references", hypotheses.len(), references.len())));
    }
    let mut matched = [0usize; 4];
    let mut total = [0usize; 4];
    let mut ref_total = [0usize; 4];
    let (mut hyp_len, mut ref_len) = (0, 0);
    for (h, r) in hypotheses.iter().zip(references) {
        for (k, (m, t)) in sentence_stats(h, r).into_iter().enumerate() {
            matched[k] += m;
            total[k] += t;
        }
        for (k, t) in ref_total.iter_mut().enumerate() {
            *t += r.len().saturating_sub(k);
        }
        hyp_len += h.len();
        ref_len += r.len();
    }
    // An order with no n-grams on either side (all sentences shorter than n)
    // counts as fully matched, so that bleu4(x, x) = 1 for every corpus.
    let p = std::array::from_fn(|k| match (total[k], ref_total[k]) {
        (0, 0) => 1.0,
        (0, _) => 0.0,
        (t, _) => matched[k] as f64 / t as f64,
    });
    Ok(combine(p, brevity_penalty(hyp_len, ref_len)))
}

/// Sentence BLEU-4 with add-one smoothing on the 2- to 4-gram precisions.
pub fn sentence_bleu(hyp: &[u32], reference: &[u32]) -> f64 {
    let stats = sentence_stats(hyp, reference);
    let p = std::array::from_fn(|k| {
        let (m, t) = stats[k];
        if k == 0 {
            if t == 0 {
                0.0
            } else {
                m as f64 / t as f64
            }
        } else {
            (m + 1) as f64 / (t + 1) as f64
        }
    });
    combine(p, brevity_penalty(hyp.len(), reference.len()))
}

/// exp of the mean target-token negative log-likelihood, dropout off.
pub fn perplexity(model: &Transformer, corpus: &ParallelCorpus) -> Result<f64> {
    if corpus.is_empty() {
        return Err(Error::Data("perplexity of an empty corpus".into()));
    }
    let (mut nll, mut count) = (0.0, 0usize);
    for chunk in corpus.pairs.chunks(EVAL_BATCH) {
        let pairs: Vec<&Pair> = chunk.iter().collect();
        let (s, n) = model.nll(&PaddedBatch::from_pairs(&pairs))?;
        nll += s;
        count += n;
    }
    Ok((nll / count as f64).exp())
}

fn ln_choose(n: u64, k: u64) -> f64 {
    let k = k.min(n - k);
    (0..k).map(|i| ((n - i) as f64).ln() - ((i + 1) as f64).ln()).sum()
}

/// Two-sided exact sign test on paired scores; ties are dropped.
pub fn sign_test(a: &[f64], b: &[f64]) -> Result<f64> {
    if a.len() != b.len() {
        return Err(Error::Usage(format!("sign_test: {} scores vs {} scores", a.len(), b.len())));
    }
    let wins = a.iter().zip(b).filter(|(x, y)| x > y).count() as u64;
    let losses = a.iter().zip(b).filter(|(x, y)| x < y).count() as u64;
    let n = wins + losses;
    if n == 0 {
        return Ok(1.0);
    }
    let (lo, hi) = (wins.min(losses), wins.max(losses));
    let pmf = |k: u64| (ln_choose(n, k) - n as f64 * std::f64::consts::LN_2).exp();
    let tail: f64 = (0..=lo).map(pmf).sum::<f64>() + (hi..=n).map(pmf).sum::<f64>();
    Ok(tail.min(1.0))
}

#[derive(Debug, Clone, PartialEq)]
pub struct EvalReport {
    pub bleu: f64,
    pub per_sentence_bleu: Vec<f64>,
    pub perplexity: f64,
    pub n_sentences: usize,
    pub hypotheses: Vec<Vec<u32>>,
}

impl EvalReport {
    pub fn to_kv(&self) -> String {
        format!("bleu={}\nperplexity={}\nn_sentences={}\n", self.bleu, self.perplexity, self.n_sentences)
    }

    pub fn csv_row(&self, run_id: &str, phase: &str) -> String {
        format!("{run_id},{phase},{},{},{}", self.bleu, self.perplexity, self.n_sentences)
    }
}

/// Greedy translations of every source sentence.
pub fn translate(model: &Transformer, corpus: &ParallelCorpus) -> Result<Vec<Vec<u32>>> {
    let sources = corpus.sources();
    let mut out = Vec::with_capacity(sources.len());
    for chunk in sources.chunks(EVAL_BATCH) {
        out.extend(model.greedy_decode_batch(chunk, model.config.max_len)?);
    }
    Ok(out)
}

pub fn evaluate(model: &Transformer, corpus: &ParallelCorpus) -> Result<EvalReport> {
    let hypotheses = translate(model, corpus)?;
    let references = corpus.targets();
    let bleu = bleu4(&hypotheses, &references)?;
    let per_sentence_bleu = hypotheses.iter().zip(&references).map(|(h, r)| sentence_bleu(h, r)).collect();
    Ok(EvalReport { bleu, per_sentence_bleu, perplexity: perplexity(model, corpus)?, n_sentences: corpus.len(), hypotheses })
}

/// BLEU only, skipping the perplexity pass.
pub fn corpus_bleu(model: &Transformer, corpus: &ParallelCorpus) -> Result<f64> {
    bleu4(&translate(model, corpus)?, &corpus.targets())
}
