//! Synthetic parallel corpora and padded batching.

use std::collections::HashSet;
use std::fmt;
use std::fs;
use std::hash::Hasher;
use std::io::Write;
use std::path::Path;
use std::str::FromStr;

use fnv::FnvHasher;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};

pub const PAD: u32 = 0;
pub const BOS: u32 = 1;
pub const EOS: u32 = 2;
pub const FIRST_CONTENT: u32 = 3;

/// Sequence spaces at or below this size are enumerated instead of sampled.
const ENUMERATE_LIMIT: u128 = 1 << 21;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Vocab {
    size: usize,
}

impl Vocab {
    pub fn new(size: usize) -> Result<Self> {
        if size < 8 {
            return Err(Error::Config(format!("vocab size {size} is below the minimum of 8")));
        }
        Ok(Vocab { size })
    }

    pub fn size(&self) -> usize {
        self.size
    }

    pub fn content_ids(&self) -> std::ops::Range<u32> {
        FIRST_CONTENT..self.size as u32
    }

    pub fn n_content(&self) -> usize {
        self.size - FIRST_CONTENT as usize
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TaskKind {
    Copy,
    Reverse,
    MappedReverse,
}

impl FromStr for TaskKind {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "copy" => Ok(TaskKind::Copy),
            "reverse" => Ok(TaskKind::Reverse),
            "mapped_reverse" => Ok(TaskKind::MappedReverse),
            other => Err(Error::Config(format!("unknown task kind `{other}`"))),
        }
    }
}

impl fmt::Display for TaskKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            TaskKind::Copy => "copy",
            TaskKind::Reverse => "reverse",
            TaskKind::MappedReverse => "mapped_reverse",
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Split {
    Train,
    Dev,
    Test,
}

impl Split {
    pub const ALL: [Split; 3] = [Split::Train, Split::Dev, Split::Test];

    /// Hash partition of sequence space: 1/20 dev, 1/20 test, rest train.
    fn of_sequence(src: &[u32]) -> Split {
        let mut h = FnvHasher::default();
        for &t in src {
            h.write_u32(t);
        }
        match h.finish() % 20 {
            0 => Split::Dev,
            1 => Split::Test,
            _ => Split::Train,
        }
    }

    fn index(self) -> u64 {
        self as u64
    }
}

impl FromStr for Split {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "train" => Ok(Split::Train),
            "dev" => Ok(Split::Dev),
            "test" => Ok(Split::Test),
            other => Err(Error::Usage(format!("unknown split `{other}`"))),
        }
    }
}

impl fmt::Display for Split {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Split::Train => "train",
            Split::Dev => "dev",
            Split::Test => "test",
        })
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Pair {
    pub src: Vec<u32>,
    pub tgt: Vec<u32>,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ParallelCorpus {
    pub split: Split,
    pub pairs: Vec<Pair>,
}

impl ParallelCorpus {
    pub fn len(&self) -> usize {
        self.pairs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.pairs.is_empty()
    }

    pub fn sources(&self) -> Vec<Vec<u32>> {
        self.pairs.iter().map(|p| p.src.clone()).collect()
    }

    pub fn targets(&self) -> Vec<Vec<u32>> {
        self.pairs.iter().map(|p| p.tgt.clone()).collect()
    }

    pub fn max_len(&self) -> usize {
        self.pairs.iter().map(|p| p.src.len().max(p.tgt.len())).max().unwrap_or(0)
    }

    /// One pair per line: `src ids<TAB>tgt ids`.
    pub fn write_tsv(&self, path: &Path) -> Result<()> {
        let mut out = Vec::new();
        for p in &self.pairs {
            writeln!(out, "{}\t{}", join_ids(&p.src), join_ids(&p.tgt))?;
        }
        fs::write(path, out)?;
        Ok(())
    }

    pub fn read_tsv(path: &Path, split: Split) -> Result<Self> {
        let text = fs::read_to_string(path)?;
        let mut pairs = Vec::new();
        for (i, line) in text.lines().enumerate() {
            if line.is_empty() {
                continue;
            }
            let (s, t) =
                line.split_once('\t').ok_or_else(|| Error::Data(format!("{}:{}: missing tab separator", path.display(), i + 1)))?;
            let parse = |field: &str| -> Result<Vec<u32>> {
                field
                    .split(' ')
                    .filter(|w| !w.is_empty())
                    .map(|w| w.parse::<u32>().map_err(|_| Error::Data(format!("{}:{}: bad token id `{w}`", path.display(), i + 1))))
                    .collect()
            };
            pairs.push(Pair { src: parse(s)?, tgt: parse(t)? });
        }
        Ok(ParallelCorpus { split, pairs })
    }
}

fn join_ids(ids: &[u32]) -> String {
    ids.iter().map(u32::to_string).collect::<Vec<_>>().join(" ")
}

/// Everything needed to regenerate a task's corpora.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TaskSpec {
    pub kind: TaskKind,
    pub vocab: Vocab,
    pub len_min: usize,
    pub len_max: usize,
    pub seed: u64,
}

impl TaskSpec {
    pub fn new(kind: TaskKind, vocab: Vocab, len_range: (usize, usize), seed: u64) -> Result<Self> {
        let (len_min, len_max) = len_range;
        if len_min == 0 || len_min > len_max {
            return Err(Error::Config(format!("invalid length range {len_min}..={len_max}")));
        }
        Ok(TaskSpec { kind, vocab, len_min, len_max, seed })
    }

    /// Seeded permutation of content ids; reserved ids map to themselves.
    pub fn permutation(&self) -> Vec<u32> {
        let mut content: Vec<u32> = self.vocab.content_ids().collect();
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed ^ 0x7065_726d);
        content.shuffle(&mut rng);
        (0..FIRST_CONTENT).chain(content).collect()
    }

    pub fn target_for(&self, src: &[u32], perm: &[u32]) -> Vec<u32> {
        match self.kind {
            TaskKind::Copy => src.to_vec(),
            TaskKind::Reverse => src.iter().rev().copied().collect(),
            TaskKind::MappedReverse => src.iter().rev().map(|&t| perm[t as usize]).collect(),
        }
    }

    fn space_size(&self) -> u128 {
        let c = self.vocab.n_content() as u128;
        (self.len_min..=self.len_max).map(|l| c.checked_pow(l as u32).unwrap_or(u128::MAX)).fold(0u128, u128::saturating_add)
    }

    /// Draws `n_pairs` distinct source sequences belonging to `split`.
    pub fn generate(&self, split: Split, n_pairs: usize) -> Result<ParallelCorpus> {
        let perm = self.permutation();
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed.wrapping_mul(0x9E37_79B9_7F4A_7C15) ^ split.index());
        let sources = if self.space_size() <= ENUMERATE_LIMIT {
            let mut all: Vec<Vec<u32>> = self.enumerate().filter(|s| Split::of_sequence(s) == split).collect();
            if all.len() < n_pairs {
                return Err(Error::Data(format!("{n_pairs} {split} pairs requested but only {} distinct sequences exist", all.len())));
            }
            all.shuffle(&mut rng);
            all.truncate(n_pairs);
            all
        } else {
            let mut seen = HashSet::with_capacity(n_pairs);
            let mut out = Vec::with_capacity(n_pairs);
            let max_attempts = 100 * n_pairs + 10_000;
            let content = self.vocab.content_ids();
            for _ in 0..max_attempts {
                if out.len() == n_pairs {
                    break;
                }
                let len = rng.gen_range(self.len_min..=self.len_max);
                let s: Vec<u32> = (0..len).map(|_| rng.gen_range(content.clone())).collect();
                if Split::of_sequence(&s) == split && seen.insert(s.clone()) {
                    out.push(s);
                }
            }
            if out.len() < n_pairs {
                return Err(Error::Data(format!("could not draw {n_pairs} distinct {split} sequences")));
            }
            out
        };
        let pairs = sources
            .into_iter()
            .map(|src| {
                let tgt = self.target_for(&src, &perm);
                Pair { src, tgt }
            })
            .collect();
        Ok(ParallelCorpus { split, pairs })
    }

    fn enumerate(&self) -> impl Iterator<Item = Vec<u32>> + '_ {
        let c = self.vocab.n_content() as u64;
        (self.len_min..=self.len_max).flat_map(move |len| {
            let count = c.pow(len as u32);
            (0..count).map(move |mut code| {
                let mut s = vec![0u32; len];
                for slot in s.iter_mut().rev() {
                    *slot = FIRST_CONTENT + (code % c) as u32;
                    code /= c;
                }
                s
            })
        })
    }
}

pub fn generate_task(
    kind: TaskKind,
    vocab: Vocab,
    n_pairs: usize,
    len_range: (usize, usize),
    seed: u64,
    split: Split,
) -> Result<ParallelCorpus> {
    TaskSpec::new(kind, vocab, len_range, seed)?.generate(split, n_pairs)
}

/// A batch in model layout: sources end with EOS, decoder inputs start with
/// BOS, decoder targets end with EOS; all rows right-padded with PAD.
#[derive(Debug, Clone, PartialEq)]
pub struct PaddedBatch {
    pub batch: usize,
    pub src_len: usize,
    pub src: Vec<usize>,
    pub src_pad: Vec<bool>,
    pub tgt_len: usize,
    pub tgt_in: Vec<usize>,
    pub tgt_out: Vec<usize>,
    pub tgt_pad: Vec<bool>,
}

impl PaddedBatch {
    pub fn from_pairs(pairs: &[&Pair]) -> Self {
        let batch = pairs.len();
        let src_len = pairs.iter().map(|p| p.src.len() + 1).max().unwrap_or(0);
        let tgt_len = pairs.iter().map(|p| p.tgt.len() + 1).max().unwrap_or(0);
        let mut b = PaddedBatch {
            batch,
            src_len,
            src: vec![PAD as usize; batch * src_len],
            src_pad: vec![true; batch * src_len],
            tgt_len,
            tgt_in: vec![PAD as usize; batch * tgt_len],
            tgt_out: vec![PAD as usize; batch * tgt_len],
            tgt_pad: vec![true; batch * tgt_len],
        };
        for (i, p) in pairs.iter().enumerate() {
            let src = p.src.iter().copied().chain([EOS]);
            for (j, t) in src.enumerate() {
                b.src[i * src_len + j] = t as usize;
                b.src_pad[i * src_len + j] = false;
            }
            let tin = [BOS].into_iter().chain(p.tgt.iter().copied());
            let tout = p.tgt.iter().copied().chain([EOS]);
            for (j, (a, o)) in tin.zip(tout).enumerate() {
                b.tgt_in[i * tgt_len + j] = a as usize;
                b.tgt_out[i * tgt_len + j] = o as usize;
                b.tgt_pad[i * tgt_len + j] = false;
            }
        }
        b
    }

    pub fn n_target_tokens(&self) -> usize {
        self.tgt_pad.iter().filter(|&&p| !p).count()
    }
}

/// Epoch-wise shuffled batching over a corpus.
#[derive(Debug, Clone)]
pub struct Batcher<'a> {
    corpus: &'a ParallelCorpus,
    batch_size: usize,
    seed: u64,
}

impl<'a> Batcher<'a> {
    pub fn new(corpus: &'a ParallelCorpus, batch_size: usize, seed: u64) -> Result<Self> {
        if batch_size == 0 {
            return Err(Error::Config("batch size must be at least 1".into()));
        }
        if corpus.is_empty() {
            return Err(Error::Data("cannot batch an empty corpus".into()));
        }
        Ok(Batcher { corpus, batch_size, seed })
    }

    pub fn epoch(&self, epoch: u64) -> impl Iterator<Item = PaddedBatch> + 'a {
        let mut order: Vec<usize> = (0..self.corpus.len()).collect();
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed ^ epoch.wrapping_mul(0xA24B_AED4_963E_E407));
        order.shuffle(&mut rng);
        let corpus = self.corpus;
        let size = self.batch_size;
        (0..order.len().div_ceil(size)).map(move |b| {
            let idx = &order[b * size..((b + 1) * size).min(order.len())];
            let pairs: Vec<&Pair> = idx.iter().map(|&i| &corpus.pairs[i]).collect();
            PaddedBatch::from_pairs(&pairs)
        })
    }

    /// Endless stream of batches, reshuffling at each epoch boundary.
    pub fn stream(&self) -> impl Iterator<Item = PaddedBatch> + 'a {
        let this = self.clone();
        (0u64..).flat_map(move |e| this.epoch(e))
    }
}

/// One shuffled epoch of padded batches.
pub fn make_batches(corpus: &ParallelCorpus, batch_size: usize, seed: u64) -> Result<Vec<PaddedBatch>> {
    Ok(Batcher::new(corpus, batch_size, seed)?.epoch(0).collect())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn spec(kind: TaskKind) -> TaskSpec {
        TaskSpec::new(kind, Vocab::new(64).unwrap(), (4, 12), 3).unwrap()
    }

    #[test]
    fn copy_and_reverse_targets() {
        let perm = spec(TaskKind::Copy).permutation();
        assert_eq!(spec(TaskKind::Copy).target_for(&[5, 7, 9], &perm), vec![5, 7, 9]);
        assert_eq!(spec(TaskKind::Reverse).target_for(&[5, 7, 9], &perm), vec![9, 7, 5]);
    }

    #[test]
    fn mapped_reverse_composes_permutation() {
        let s = spec(TaskKind::MappedReverse);
        let mut perm = s.permutation();
        perm[5] = 12;
        perm[7] = 4;
        assert_eq!(s.target_for(&[5, 7], &perm), vec![4, 12]);
    }

    #[test]
    fn permutation_is_bijection_on_content() {
        let perm = spec(TaskKind::MappedReverse).permutation();
        assert_eq!(&perm[..3], &[0, 1, 2]);
        let mut sorted = perm.clone();
        sorted.sort_unstable();
        assert_eq!(sorted, (0..64).collect::<Vec<u32>>());
    }

    #[test]
    fn splits_are_disjoint_and_regeneration_is_identical() {
        let s = spec(TaskKind::MappedReverse);
        let train = s.generate(Split::Train, 2000).unwrap();
        let dev = s.generate(Split::Dev, 200).unwrap();
        let test = s.generate(Split::Test, 200).unwrap();
        let train_set: HashSet<_> = train.pairs.iter().map(|p| p.src.clone()).collect();
        assert_eq!(train_set.len(), 2000);
        for p in dev.pairs.iter().chain(&test.pairs) {
            assert!(!train_set.contains(&p.src));
        }
        let dev_set: HashSet<_> = dev.sources().into_iter().collect();
        assert!(test.pairs.iter().all(|p| !dev_set.contains(&p.src)));
        assert_eq!(train, s.generate(Split::Train, 2000).unwrap());
        for p in &train.pairs {
            assert!((4..=12).contains(&p.src.len()));
            assert!(p.src.iter().chain(&p.tgt).all(|&t| (FIRST_CONTENT..64).contains(&t)));
        }
    }

    #[test]
    fn small_space_is_enumerated_and_exhaustion_is_a_data_error() {
        let s = TaskSpec::new(TaskKind::Copy, Vocab::new(8).unwrap(), (1, 2), 0).unwrap();
        // 5 + 25 = 30 sequences in total across all splits
        assert!(matches!(s.generate(Split::Train, 31), Err(Error::Data(_))));
        let n_train = s.enumerate().filter(|q| Split::of_sequence(q) == Split::Train).count();
        assert_eq!(s.generate(Split::Train, n_train).unwrap().len(), n_train);
    }

    #[test]
    fn vocab_minimum() {
        assert!(Vocab::new(7).is_err());
        assert!(Vocab::new(8).is_ok());
    }

    fn ten_pairs() -> ParallelCorpus {
        let pairs = (0..10u32).map(|i| Pair { src: vec![3 + i], tgt: vec![3 + i, 4] }).collect();
        ParallelCorpus { split: Split::Train, pairs }
    }

    #[test]
    fn batch_partition_sizes() {
        let sizes: Vec<usize> = make_batches(&ten_pairs(), 3, 1).unwrap().iter().map(|b| b.batch).collect();
        assert_eq!(sizes, vec![3, 3, 3, 1]);
    }

    #[test]
    fn batches_are_deterministic_and_cover_corpus() {
        let c = ten_pairs();
        let a = make_batches(&c, 4, 9).unwrap();
        assert_eq!(a, make_batches(&c, 4, 9).unwrap());
        let mut seen: Vec<usize> = a.iter().flat_map(|b| (0..b.batch).map(move |i| b.src[i * b.src_len])).collect();
        seen.sort_unstable();
        assert_eq!(seen, (3..13).collect::<Vec<_>>());
    }

    #[test]
    fn epochs_reshuffle() {
        let c = ten_pairs();
        let b = Batcher::new(&c, 10, 1).unwrap();
        let first = |e| b.epoch(e).next().unwrap().src;
        assert_ne!(first(0), first(1));
    }

    #[test]
    fn empty_corpus_is_data_error() {
        let c = ParallelCorpus { split: Split::Train, pairs: vec![] };
        assert!(matches!(make_batches(&c, 3, 0), Err(Error::Data(_))));
    }

    #[test]
    fn padded_layout() {
        let p1 = Pair { src: vec![5, 6], tgt: vec![7] };
        let p2 = Pair { src: vec![9], tgt: vec![8, 8, 8] };
        let b = PaddedBatch::from_pairs(&[&p1, &p2]);
        assert_eq!(b.src_len, 3);
        assert_eq!(b.src, vec![5, 6, 2, 9, 2, 0]);
        assert_eq!(b.src_pad, vec![false, false, false, false, false, true]);
        assert_eq!(b.tgt_in, vec![1, 7, 0, 0, 1, 8, 8, 8]);
        assert_eq!(b.tgt_out, vec![7, 2, 0, 0, 8, 8, 8, 2]);
        assert_eq!(b.n_target_tokens(), 6);
    }

    #[test]
    fn tsv_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("c.tsv");
        let c = spec(TaskKind::MappedReverse).generate(Split::Dev, 20).unwrap();
        c.write_tsv(&path).unwrap();
        let text = fs::read_to_string(&path).unwrap();
        assert!(text.lines().next().unwrap().contains('\t'));
        assert_eq!(ParallelCorpus::read_tsv(&path, Split::Dev).unwrap(), c);
    }
}
