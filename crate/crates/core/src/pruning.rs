//! Magnitude pruning: mask computation, application and sparsity bookkeeping.

use std::cmp::Ordering;
use std::collections::BTreeMap;
use std::fmt;
use std::str::FromStr;

use crate::error::{Error, Result};
use crate::model::ParameterStore;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Scope {
    /// Each prunable matrix loses the same fraction of its entries.
    Local,
    /// One ranking over every prunable entry in the model.
    Global,
}

impl FromStr for Scope {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "local" => Ok(Scope::Local),
            "global" => Ok(Scope::Global),
            _ => Err(Error::Config(format!("unknown pruning scope `{s}` (expected local or global)"))),
        }
    }
}

impl fmt::Display for Scope {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Scope::Local => "local",
            Scope::Global => "global",
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PruneSpec {
    pub ratio: f64,
    pub scope: Scope,
}

impl PruneSpec {
    pub fn new(ratio: f64, scope: Scope) -> Result<Self> {
        let spec = Self { ratio, scope };
        spec.validate()?;
        Ok(spec)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.ratio > 0.0 && self.ratio < 1.0) {
            return Err(Error::Config(format!("pruning ratio must lie in (0, 1), got {}", self.ratio)));
        }
        Ok(())
    }
}

/// `floor(n * (1 - ratio))`, nudged so that products such as `10 * (1 - 0.9)`
/// land on the integer they denote instead of just below it.
pub fn keep_count(n: usize, ratio: f64) -> usize {
    ((n as f64) * (1.0 - ratio) + 1e-9).floor() as usize
}

/// Keep bits per prunable tensor; `true` keeps the element.
#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct PruneMask {
    bits: BTreeMap<String, Vec<bool>>,
}

impl PruneMask {
    pub fn new() -> Self {
        Self::default()
    }

    /// Mask that keeps every prunable element of `store`.
    pub fn all_ones(store: &ParameterStore) -> Self {
        let bits = store.prunable().map(|(n, t)| (n.to_string(), vec![true; t.numel()])).collect();
        Self { bits }
    }

    pub fn insert(&mut self, name: impl Into<String>, bits: Vec<bool>) {
        self.bits.insert(name.into(), bits);
    }

    pub fn get(&self, name: &str) -> Option<&[bool]> {
        self.bits.get(name).map(Vec::as_slice)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &[bool])> {
        self.bits.iter().map(|(k, v)| (k.as_str(), v.as_slice()))
    }

    pub fn len(&self) -> usize {
        self.bits.len()
    }

    pub fn is_empty(&self) -> bool {
        self.bits.is_empty()
    }

    pub fn kept(&self) -> usize {
        self.bits.values().map(|b| b.iter().filter(|&&k| k).count()).sum()
    }

    pub fn total(&self) -> usize {
        self.bits.values().map(Vec::len).sum()
    }

    /// Fails unless the mask covers exactly the prunable tensors of `store`
    /// with matching element counts.
    pub fn check_matches(&self, store: &ParameterStore) -> Result<()> {
        let prunable: Vec<(&str, usize)> = store.prunable().map(|(n, t)| (n, t.numel())).collect();
        if prunable.len() != self.bits.len() {
            return Err(Error::Integrity(format!(
                "mask covers {} tensors but the store has {} prunable tensors",
                self.bits.len(),
                prunable.len()
            )));
        }
        for (name, n) in prunable {
            match self.bits.get(name) {
                None => return Err(Error::Integrity(format!("mask has no entry for `{name}`"))),
                Some(b) if b.len() != n => {
                    return Err(Error::Integrity(format!("mask for `{name}` has {} bits, tensor has {n} elements", b.len())))
                }
                Some(_) => {}
            }
        }
        Ok(())
    }
}

fn by_magnitude(a: f32, b: f32) -> Ordering {
    b.abs().total_cmp(&a.abs())
}

pub fn compute_mask(store: &ParameterStore, spec: &PruneSpec) -> Result<PruneMask> {
    spec.validate()?;
    let tensors: Vec<(&str, &[f32])> = store.prunable().map(|(n, t)| (n, t.data.as_slice())).collect();
    if tensors.is_empty() {
        return Err(Error::Config("store has no prunable tensors".into()));
    }
    let mut mask = PruneMask::new();
    match spec.scope {
        Scope::Local => {
            for (name, data) in tensors {
                let keep = keep_count(data.len(), spec.ratio).max(1);
                let mut order: Vec<usize> = (0..data.len()).collect();
                // Stable sort: equal magnitudes stay in index order.
                order.sort_by(|&i, &j| by_magnitude(data[i], data[j]));
                let mut bits = vec![false; data.len()];
                for &i in &order[..keep] {
                    bits[i] = true;
                }
                mask.insert(name, bits);
            }
        }
        Scope::Global => {
            let total: usize = tensors.iter().map(|(_, d)| d.len()).sum();
            let keep = keep_count(total, spec.ratio);
            // Tensors are visited in name order, so (tensor, index) order is
            // the flattened order and a stable sort gives the tie-break.
            let mut order: Vec<(usize, usize)> =
                tensors.iter().enumerate().flat_map(|(t, (_, d))| (0..d.len()).map(move |i| (t, i))).collect();
            order.sort_by(|&(ta, ia), &(tb, ib)| by_magnitude(tensors[ta].1[ia], tensors[tb].1[ib]));
            let mut bits: Vec<Vec<bool>> = tensors.iter().map(|(_, d)| vec![false; d.len()]).collect();
            for &(t, i) in &order[..keep] {
                bits[t][i] = true;
            }
            for ((name, _), b) in tensors.iter().zip(bits) {
                mask.insert(*name, b);
            }
        }
    }
    Ok(mask)
}

pub fn apply_mask(store: &mut ParameterStore, mask: &PruneMask) -> Result<()> {
    mask.check_matches(store)?;
    for (name, bits) in mask.iter() {
        let t = store.tensor_mut(name)?;
        for (v, &keep) in t.data.iter_mut().zip(bits) {
            if !keep {
                *v = 0.0;
            }
        }
    }
    Ok(())
}

#[derive(Debug, Clone, PartialEq)]
pub struct TensorSparsity {
    pub name: String,
    pub total: usize,
    pub kept: usize,
    pub pruned: usize,
}

impl TensorSparsity {
    pub fn ratio(&self) -> f64 {
        if self.total == 0 {
            0.0
        } else {
            self.pruned as f64 / self.total as f64
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Violation {
    pub name: String,
    pub index: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SparsityReport {
    pub tensors: Vec<TensorSparsity>,
    pub violations: Vec<Violation>,
}

impl SparsityReport {
    pub fn total(&self) -> usize {
        self.tensors.iter().map(|t| t.total).sum()
    }

    pub fn kept(&self) -> usize {
        self.tensors.iter().map(|t| t.kept).sum()
    }

    pub fn pruned(&self) -> usize {
        self.tensors.iter().map(|t| t.pruned).sum()
    }

    pub fn ratio(&self) -> f64 {
        let total = self.total();
        if total == 0 {
            0.0
        } else {
            self.pruned() as f64 / total as f64
        }
    }
}

impl fmt::Display for SparsityReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        for t in &self.tensors {
            writeln!(f, "{}\t{}\t{}\t{}\t{:.4}", t.name, t.total, t.kept, t.pruned, t.ratio())?;
        }
        writeln!(f, "total\t{}\t{}\t{}\t{:.4}", self.total(), self.kept(), self.pruned(), self.ratio())?;
        for v in &self.violations {
            writeln!(f, "violation\t{}\t{}", v.name, v.index)?;
        }
        Ok(())
    }
}

/// Counts over the prunable tensors. Without a mask, exact zeros count as
/// pruned. With a mask, the mask decides and any nonzero value sitting at a
/// pruned position (or any tensor the mask does not describe) is reported.
pub fn sparsity_report(store: &ParameterStore, mask: Option<&PruneMask>) -> SparsityReport {
    let mut tensors = Vec::new();
    let mut violations = Vec::new();
    for (name, t) in store.prunable() {
        let total = t.numel();
        let bits = mask.and_then(|m| m.get(name)).filter(|b| b.len() == total);
        let kept = match bits {
            Some(bits) => {
                for (i, (&v, &keep)) in t.data.iter().zip(bits).enumerate() {
                    if !keep && v != 0.0 {
                        violations.push(Violation { name: name.to_string(), index: i });
                    }
                }
                bits.iter().filter(|&&k| k).count()
            }
            None => {
                if mask.is_some() {
                    violations.push(Violation { name: name.to_string(), index: usize::MAX });
                }
                t.data.iter().filter(|&&v| v != 0.0).count()
            }
        };
        tensors.push(TensorSparsity { name: name.to_string(), total, kept, pruned: total - kept });
    }
    SparsityReport { tensors, violations }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autograd::Tensor;

    fn store(tensors: &[(&str, &[f32])]) -> ParameterStore {
        let mut s = ParameterStore::new();
        for (name, data) in tensors {
            s.insert(*name, Tensor::new(vec![1, data.len()], data.to_vec()).unwrap()).unwrap();
        }
        s
    }

    #[test]
    fn local_keeps_top_half() {
        let s = store(&[("w", &[0.1, -0.5, 0.3, -0.2])]);
        let m = compute_mask(&s, &PruneSpec::new(0.5, Scope::Local).unwrap()).unwrap();
        assert_eq!(m.get("w").unwrap(), &[false, true, true, false]);
    }

    #[test]
    fn global_ranks_across_tensors() {
        let s = store(&[("A", &[0.9, 0.05]), ("B", &[0.2, 0.1, 0.3])]);
        let m = compute_mask(&s, &PruneSpec::new(0.4, Scope::Global).unwrap()).unwrap();
        assert_eq!(m.get("A").unwrap(), &[true, false]);
        assert_eq!(m.get("B").unwrap(), &[true, false, true]);
    }

    #[test]
    fn ties_keep_lower_key() {
        let s = store(&[("a", &[1.0, -1.0, 1.0]), ("b", &[-1.0, 1.0, 1.0])]);
        let g = compute_mask(&s, &PruneSpec::new(0.5, Scope::Global).unwrap()).unwrap();
        assert_eq!(g.get("a").unwrap(), &[true, true, true]);
        assert_eq!(g.get("b").unwrap(), &[false, false, false]);
        let l = compute_mask(&s, &PruneSpec::new(0.5, Scope::Local).unwrap()).unwrap();
        assert_eq!(l.get("a").unwrap(), &[true, false, false]);
        assert_eq!(l.get("b").unwrap(), &[true, false, false]);
    }

    #[test]
    fn keep_count_floors_exactly() {
        assert_eq!(keep_count(5, 0.4), 3);
        assert_eq!(keep_count(10, 0.9), 1);
        assert_eq!(keep_count(10, 0.7), 3);
        assert_eq!(keep_count(7, 0.5), 3);
        assert_eq!(keep_count(1, 0.5), 0);
    }

    #[test]
    fn local_never_empties_a_tensor() {
        let s = store(&[("tiny", &[0.3, 0.2])]);
        let m = compute_mask(&s, &PruneSpec::new(0.9, Scope::Local).unwrap()).unwrap();
        assert_eq!(m.get("tiny").unwrap(), &[true, false]);
    }

    #[test]
    fn ratio_outside_open_interval_is_config_error() {
        for r in [0.0, 1.0, -0.1, 1.5, f64::NAN] {
            assert!(matches!(PruneSpec::new(r, Scope::Local), Err(Error::Config(_))));
        }
        let s = store(&[("w", &[1.0])]);
        let bad = PruneSpec { ratio: 1.0, scope: Scope::Global };
        assert!(matches!(compute_mask(&s, &bad), Err(Error::Config(_))));
    }

    #[test]
    fn biases_are_not_masked() {
        let mut s = store(&[("w", &[0.1, 0.2])]);
        s.insert("b", Tensor::from_vec(vec![0.0, 0.5])).unwrap();
        let m = compute_mask(&s, &PruneSpec::new(0.5, Scope::Global).unwrap()).unwrap();
        assert_eq!(m.len(), 1);
        assert!(m.get("b").is_none());
    }

    #[test]
    fn apply_is_idempotent_and_counts_match() {
        let s0 = store(&[("a", &[0.4, -0.1, 0.7, 0.2]), ("b", &[0.3, -0.9, 0.05, 0.6, 0.8, -0.2])]);
        let m = compute_mask(&s0, &PruneSpec::new(0.5, Scope::Local).unwrap()).unwrap();
        let mut s = s0.clone();
        apply_mask(&mut s, &m).unwrap();
        let once = s.clone();
        apply_mask(&mut s, &m).unwrap();
        assert_eq!(s, once);
        for (name, t) in s.prunable() {
            let kept = m.get(name).unwrap().iter().filter(|&&k| k).count();
            assert_eq!(t.data.iter().filter(|&&v| v != 0.0).count(), kept);
        }
        let mut ident = s0.clone();
        apply_mask(&mut ident, &PruneMask::all_ones(&s0)).unwrap();
        assert_eq!(ident, s0);
    }

    #[test]
    fn apply_rejects_mismatched_mask() {
        let mut s = store(&[("a", &[1.0, 2.0])]);
        let mut m = PruneMask::new();
        m.insert("a", vec![true]);
        assert!(matches!(apply_mask(&mut s, &m), Err(Error::Integrity(_))));
        let mut m = PruneMask::new();
        m.insert("z", vec![true, true]);
        assert!(matches!(apply_mask(&mut s, &m), Err(Error::Integrity(_))));
    }

    #[test]
    fn report_on_dense_store_is_zero() {
        let s = store(&[("a", &[1.0, 2.0]), ("b", &[3.0])]);
        let r = sparsity_report(&s, None);
        assert_eq!(r.ratio(), 0.0);
        assert!(r.violations.is_empty());
    }

    #[test]
    fn report_after_half_pruning_and_violation() {
        let s0 = store(&[("a", &[0.4, -0.1, 0.7, 0.2, 0.9]), ("b", &[0.3, -0.9, 0.05, 0.6])]);
        let m = compute_mask(&s0, &PruneSpec::new(0.5, Scope::Local).unwrap()).unwrap();
        let mut s = s0.clone();
        apply_mask(&mut s, &m).unwrap();
        let r = sparsity_report(&s, Some(&m));
        for t in &r.tensors {
            assert!((t.pruned as f64 - 0.5 * t.total as f64).abs() <= 1.0, "{t:?}");
        }
        assert!(r.violations.is_empty());
        let pruned_at = m.get("b").unwrap().iter().position(|&k| !k).unwrap();
        s.tensor_mut("b").unwrap().data[pruned_at] = 0.25;
        let r = sparsity_report(&s, Some(&m));
        assert_eq!(r.violations, vec![Violation { name: "b".into(), index: pruned_at }]);
    }
}
