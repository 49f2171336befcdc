//! Per-task binary parameter masks: generation, application, assembling,
//! pruning, and the capacity ledger that keeps task allocations disjoint.

mod io;

pub use io::{load_mask, save_mask};

use std::collections::BTreeMap;
use std::sync::Arc;

use rand::Rng;

use crate::error::{Result, VqcdError};
use crate::rng::Prng;
use crate::tensor::{ParameterStore, Tensor};

/// Packed bitset over a tensor's flattened positions.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct BitMask {
    len: usize,
    words: Vec<u64>,
}

impl BitMask {
    pub fn zeros(len: usize) -> Self {
        Self {
            len,
            words: vec![0; len.div_ceil(64)],
        }
    }

    pub fn ones(len: usize) -> Self {
        let mut m = Self::zeros(len);
        for i in 0..len {
            m.set(i, true);
        }
        m
    }

    pub fn len(&self) -> usize {
        self.len
    }

    pub fn is_empty(&self) -> bool {
        self.len == 0
    }

    pub fn get(&self, i: usize) -> bool {
        debug_assert!(i < self.len);
        (self.words[i / 64] >> (i % 64)) & 1 == 1
    }

    pub fn set(&mut self, i: usize, v: bool) {
        debug_assert!(i < self.len);
        if v {
            self.words[i / 64] |= 1 << (i % 64);
        } else {
            self.words[i / 64] &= !(1 << (i % 64));
        }
    }

    pub fn count_ones(&self) -> usize {
        self.words.iter().map(|w| w.count_ones() as usize).sum()
    }

    pub fn intersects(&self, other: &BitMask) -> bool {
        self.words
            .iter()
            .zip(&other.words)
            .any(|(a, b)| a & b != 0)
    }

    pub fn iter_ones(&self) -> impl Iterator<Item = usize> + '_ {
        (0..self.len).filter(|&i| self.get(i))
    }

    /// 0/1 gate vector for gradient-exact masked forward passes.
    pub fn gate_f32(&self) -> Vec<f32> {
        (0..self.len)
            .map(|i| if self.get(i) { 1.0 } else { 0.0 })
            .collect()
    }

    pub(crate) fn to_bytes(&self) -> Vec<u8> {
        let mut out = vec![0u8; self.len.div_ceil(8)];
        for i in 0..self.len {
            if self.get(i) {
                out[i / 8] |= 1 << (i % 8);
            }
        }
        out
    }

    pub(crate) fn from_bytes(len: usize, bytes: &[u8]) -> Result<Self> {
        if bytes.len() != len.div_ceil(8) {
            return Err(VqcdError::invariant(format!(
                "bitset length mismatch: {} bytes for {len} bits",
                bytes.len()
            )));
        }
        let mut m = Self::zeros(len);
        for i in 0..len {
            if (bytes[i / 8] >> (i % 8)) & 1 == 1 {
                m.set(i, true);
            }
        }
        Ok(m)
    }
}

/// The binary masks of one task, keyed by parameter name.
#[derive(Debug, Clone)]
pub struct TaskMask {
    pub task_id: usize,
    pub seed: u64,
    entries: BTreeMap<String, (Vec<usize>, BitMask)>,
}

impl TaskMask {
    pub fn entries(&self) -> impl Iterator<Item = (&str, &Vec<usize>, &BitMask)> {
        self.entries.iter().map(|(n, (s, m))| (n.as_str(), s, m))
    }

    pub fn bits(&self, name: &str) -> Option<&BitMask> {
        self.entries.get(name).map(|(_, m)| m)
    }

    pub fn shape(&self, name: &str) -> Option<&[usize]> {
        self.entries.get(name).map(|(s, _)| s.as_slice())
    }

    pub fn names(&self) -> Vec<String> {
        self.entries.keys().cloned().collect()
    }

    /// All-ones mask over the given shapes (identity masking).
    pub fn full(task_id: usize, shapes: &[(String, Vec<usize>)]) -> Self {
        let entries = shapes
            .iter()
            .map(|(n, s)| {
                let numel = s.iter().product();
                (n.clone(), (s.clone(), BitMask::ones(numel)))
            })
            .collect();
        Self {
            task_id,
            seed: 0,
            entries,
        }
    }

    /// Dense 0/1 gates per tensor, shared across a training run.
    pub fn gates(&self) -> BTreeMap<String, Arc<Vec<f32>>> {
        self.entries
            .iter()
            .map(|(n, (_, m))| (n.clone(), Arc::new(m.gate_f32())))
            .collect()
    }

    pub(crate) fn from_entries(
        task_id: usize,
        seed: u64,
        entries: BTreeMap<String, (Vec<usize>, BitMask)>,
    ) -> Self {
        Self {
            task_id,
            seed,
            entries,
        }
    }
}

/// Tracks unallocated mask positions per tensor across the task sequence.
#[derive(Debug, Clone)]
pub struct CapacityLedger {
    task_count: usize,
    rate: f64,
    /// name -> (shape, still-available positions)
    available: BTreeMap<String, (Vec<usize>, BitMask)>,
}

impl CapacityLedger {
    /// `rate` is the per-task fraction of every tensor; the canonical value
    /// is `1/task_count`, which exactly exhausts capacity after all tasks.
    pub fn new(shapes: &[(String, Vec<usize>)], task_count: usize, rate: f64) -> Result<Self> {
        if task_count == 0 {
            return Err(VqcdError::config("task_count must be >= 1"));
        }
        if !(rate > 0.0 && rate <= 1.0) {
            return Err(VqcdError::config(format!("mask rate {rate} out of (0,1]")));
        }
        let available = shapes
            .iter()
            .map(|(n, s)| {
                let numel = s.iter().product();
                (n.clone(), (s.clone(), BitMask::ones(numel)))
            })
            .collect();
        Ok(Self {
            task_count,
            rate,
            available,
        })
    }

    pub fn task_count(&self) -> usize {
        self.task_count
    }

    pub fn rate(&self) -> f64 {
        self.rate
    }

    fn uses_canonical_rate(&self) -> bool {
        (self.rate * self.task_count as f64 - 1.0).abs() < 1e-12
    }

    /// Positions task `task_index` (1-based) claims from a tensor of `n`
    /// entries. Under the canonical rate the remainder goes to the earliest
    /// tasks so the union over all tasks is complete.
    fn positions_for(&self, task_index: usize, n: usize) -> usize {
        if self.uses_canonical_rate() {
            let base = n / self.task_count;
            let rem = n % self.task_count;
            base + usize::from(task_index <= rem)
        } else {
            (n as f64 * self.rate).floor() as usize
        }
    }

    /// Remaining-capacity fraction per tensor, each in [0, 1].
    pub fn capacity_report(&self) -> BTreeMap<String, f64> {
        self.available
            .iter()
            .map(|(n, (_, m))| {
                let total = m.len().max(1);
                (n.clone(), m.count_ones() as f64 / total as f64)
            })
            .collect()
    }

    fn release(&mut self, name: &str, index: usize) {
        if let Some((_, avail)) = self.available.get_mut(name) {
            avail.set(index, true);
        }
    }

    /// Remove already-allocated positions from the pool (used when
    /// re-registering a mask loaded from disk). Fails if any position was
    /// already claimed by another mask.
    pub fn claim(&mut self, name: &str, bits: &BitMask) -> Result<()> {
        let (_, avail) = self
            .available
            .get_mut(name)
            .ok_or_else(|| VqcdError::invariant(format!("ledger misses tensor `{name}`")))?;
        if avail.len() != bits.len() {
            return Err(VqcdError::ShapeMismatch {
                op: "ledger_claim",
                expected: vec![avail.len()],
                got: vec![bits.len()],
            });
        }
        for i in bits.iter_ones() {
            if !avail.get(i) {
                return Err(VqcdError::MaskOverlap(name.to_string()));
            }
            avail.set(i, false);
        }
        Ok(())
    }
}

/// Draw a fresh task mask from the ledger's remaining positions.
///
/// Sampling is uniform without replacement and fully determined by
/// `(rng seed, shapes, ledger state)`. The claimed positions leave the
/// ledger, so masks from one ledger are disjoint by construction.
pub fn generate_mask(
    task_id: usize,
    task_index: usize,
    ledger: &mut CapacityLedger,
    seed: u64,
    rng: &mut Prng,
) -> Result<TaskMask> {
    let mut entries = BTreeMap::new();
    let names: Vec<String> = ledger.available.keys().cloned().collect();
    for name in names {
        let (shape, avail) = ledger.available.get(&name).cloned().expect("name exists");
        let n = avail.len();
        let want = ledger.positions_for(task_index, n);
        let mut free: Vec<usize> = avail.iter_ones().collect();
        if free.len() < want {
            return Err(VqcdError::CapacityExhausted {
                tensor: name,
                requested: want,
                remaining: free.len(),
            });
        }
        // Partial Fisher-Yates: the first `want` entries are a uniform
        // draw without replacement.
        let mut bits = BitMask::zeros(n);
        for i in 0..want {
            let j = rng.gen_range(i..free.len());
            free.swap(i, j);
            bits.set(free[i], true);
        }
        let (_, avail_mut) = ledger.available.get_mut(&name).expect("name exists");
        for &p in free[..want].iter() {
            avail_mut.set(p, false);
        }
        entries.insert(name, (shape, bits));
    }
    Ok(TaskMask::from_entries(task_id, seed, entries))
}

/// Elementwise product of a tensor with a binary mask. Masked-off entries
/// become exact positive zero.
pub fn apply_mask(w: &Tensor, m: &BitMask) -> Result<Tensor> {
    if w.numel() != m.len() {
        return Err(VqcdError::ShapeMismatch {
            op: "apply_mask",
            expected: vec![w.numel()],
            got: vec![m.len()],
        });
    }
    let mut out = Tensor::zeros(w.shape().to_vec());
    let src = w.data();
    let dst = out.data_mut();
    for i in m.iter_ones() {
        dst[i] = src[i];
    }
    Ok(out)
}

/// Apply a task's masks across a whole store, erroring on any tensor the
/// mask does not cover.
pub fn apply_task_mask(store: &ParameterStore, mask: &TaskMask) -> Result<ParameterStore> {
    let mut out = ParameterStore::new();
    for (name, tensor) in store.iter() {
        let bits = mask.bits(name).ok_or_else(|| {
            VqcdError::invariant(format!("mask for task {} misses tensor `{name}`", mask.task_id))
        })?;
        out.insert_with(name.to_string(), apply_mask(tensor, bits)?, store.is_trainable(name));
    }
    Ok(out)
}

/// Weights assembling: `W = sum_i M_i ∘ W_i`. Because masks are pairwise
/// disjoint the sum is a selection, which keeps every surviving weight
/// bit-identical to its checkpoint. Positions no mask covers stay zero.
pub fn assemble(checkpoints: &[&ParameterStore], masks: &[&TaskMask]) -> Result<ParameterStore> {
    if checkpoints.len() != masks.len() {
        return Err(VqcdError::invariant(format!(
            "assemble: {} checkpoints vs {} masks",
            checkpoints.len(),
            masks.len()
        )));
    }
    if checkpoints.is_empty() {
        return Err(VqcdError::invariant("assemble: no checkpoints"));
    }
    // Disjointness check over every tensor of every mask pair.
    for i in 0..masks.len() {
        for j in i + 1..masks.len() {
            for (name, _, bits) in masks[i].entries() {
                if let Some(other) = masks[j].bits(name) {
                    if bits.intersects(other) {
                        return Err(VqcdError::MaskOverlap(name.to_string()));
                    }
                }
            }
        }
    }
    let reference = checkpoints[0];
    let mut out = ParameterStore::new();
    for (name, tensor) in reference.iter() {
        out.insert_with(
            name.to_string(),
            Tensor::zeros(tensor.shape().to_vec()),
            reference.is_trainable(name),
        );
    }
    for (ckpt, mask) in checkpoints.iter().zip(masks) {
        for (name, _, bits) in mask.entries() {
            let src = ckpt.get(name).ok_or_else(|| {
                VqcdError::invariant(format!(
                    "assemble: checkpoint for task {} misses tensor `{name}`",
                    mask.task_id
                ))
            })?;
            let dst = out.get_mut(name).ok_or_else(|| {
                VqcdError::invariant(format!("assemble: reference store misses tensor `{name}`"))
            })?;
            if src.numel() != bits.len() {
                return Err(VqcdError::ShapeMismatch {
                    op: "assemble",
                    expected: vec![bits.len()],
                    got: vec![src.numel()],
                });
            }
            let s = src.data().to_vec();
            let d = dst.data_mut();
            for i in bits.iter_ones() {
                d[i] = s[i];
            }
        }
    }
    Ok(out)
}

/// Outcome of a pruning pass.
#[derive(Debug, Clone, PartialEq)]
pub struct PruneReport {
    /// Fraction of previously masked positions released.
    pub prune_rate: f64,
    pub released: usize,
    pub total_masked: usize,
}

/// Release mask positions whose assembled weight magnitude falls below
/// `threshold`. Released positions return to the ledger's available pool.
pub fn prune_masks(
    weights: &ParameterStore,
    masks: &mut [TaskMask],
    ledger: &mut CapacityLedger,
    threshold: f32,
) -> Result<PruneReport> {
    if threshold < 0.0 {
        return Err(VqcdError::config("prune threshold must be >= 0"));
    }
    let mut released = 0usize;
    let mut total = 0usize;
    for mask in masks.iter_mut() {
        let names = mask.names();
        for name in names {
            let w = weights.get(&name).ok_or_else(|| {
                VqcdError::invariant(format!("prune: weights miss tensor `{name}`"))
            })?;
            let data = w.data().to_vec();
            let (_, bits) = mask.entries.get_mut(&name).expect("name from mask");
            for i in 0..bits.len() {
                if bits.get(i) {
                    total += 1;
                    if data[i].abs() < threshold {
                        bits.set(i, false);
                        ledger.release(&name, i);
                        released += 1;
                    }
                }
            }
        }
    }
    Ok(PruneReport {
        prune_rate: if total == 0 {
            0.0
        } else {
            released as f64 / total as f64
        },
        released,
        total_masked: total,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::substream;

    fn shapes(spec: &[(&str, &[usize])]) -> Vec<(String, Vec<usize>)> {
        spec.iter()
            .map(|(n, s)| (n.to_string(), s.to_vec()))
            .collect()
    }

    #[test]
    fn divisible_allocation_counts() {
        let sh = shapes(&[("w", &[8])]);
        let mut ledger = CapacityLedger::new(&sh, 4, 0.25).unwrap();
        let mut union = BitMask::zeros(8);
        for task in 1..=4 {
            let mut rng = substream(9, &[task as u64]);
            let m = generate_mask(task, task, &mut ledger, 9, &mut rng).unwrap();
            let bits = m.bits("w").unwrap();
            assert_eq!(bits.count_ones(), 2, "each task gets exactly n/I");
            for i in bits.iter_ones() {
                assert!(!union.get(i), "disjointness violated at {i}");
                union.set(i, true);
            }
        }
        assert_eq!(union.count_ones(), 8, "union after I tasks is complete");
    }

    #[test]
    fn remainder_goes_to_earliest_tasks() {
        let sh = shapes(&[("w", &[10])]);
        let mut ledger = CapacityLedger::new(&sh, 4, 0.25).unwrap();
        let mut counts = Vec::new();
        for task in 1..=4 {
            let mut rng = substream(1, &[task as u64]);
            let m = generate_mask(task, task, &mut ledger, 1, &mut rng).unwrap();
            counts.push(m.bits("w").unwrap().count_ones());
        }
        assert_eq!(counts, vec![3, 3, 2, 2]);
        assert_eq!(ledger.capacity_report()["w"], 0.0);
    }

    #[test]
    fn same_seed_same_mask() {
        let sh = shapes(&[("a", &[7, 3]), ("b", &[5])]);
        let run = |seed: u64| {
            let mut ledger = CapacityLedger::new(&sh, 3, 1.0 / 3.0).unwrap();
            let mut rng = substream(seed, &[0]);
            generate_mask(1, 1, &mut ledger, seed, &mut rng).unwrap()
        };
        let (m1, m2) = (run(42), run(42));
        for (name, _, bits) in m1.entries() {
            assert_eq!(bits, m2.bits(name).unwrap());
        }
        let m3 = run(43);
        assert_ne!(m1.bits("a"), m3.bits("a"));
    }

    #[test]
    fn capacity_exhaustion_names_tensor() {
        let sh = shapes(&[("w", &[4])]);
        let mut ledger = CapacityLedger::new(&sh, 2, 0.75).unwrap();
        let mut rng = substream(5, &[1]);
        generate_mask(1, 1, &mut ledger, 5, &mut rng).unwrap();
        let err = generate_mask(2, 2, &mut ledger, 5, &mut rng).unwrap_err();
        assert!(err.to_string().contains("`w`"), "{err}");
    }

    #[test]
    fn apply_mask_matches_naive_loop() {
        let mut rng = substream(3, &[7]);
        let w = Tensor::randn(vec![6, 5], 1.0, &mut rng);
        let mut m = BitMask::zeros(30);
        for i in 0..30 {
            m.set(i, rng.gen_bool(0.5));
        }
        let out = apply_mask(&w, &m).unwrap();
        for i in 0..30 {
            let expect = w.data()[i] * if m.get(i) { 1.0 } else { 0.0 };
            assert_eq!(out.data()[i], expect);
        }
    }

    #[test]
    fn apply_mask_all_ones_and_zeros() {
        let w = Tensor::new(vec![4], vec![1.0, -2.0, 3.0, -4.0]).unwrap();
        let ones = apply_mask(&w, &BitMask::ones(4)).unwrap();
        assert_eq!(ones.data(), w.data());
        let zeros = apply_mask(&w, &BitMask::zeros(4)).unwrap();
        assert!(zeros.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn assemble_two_task_hand_case() {
        let mut c1 = ParameterStore::new();
        c1.insert("w", Tensor::new(vec![4], vec![1.0, 1.0, 1.0, 1.0]).unwrap());
        let mut c2 = ParameterStore::new();
        c2.insert("w", Tensor::new(vec![4], vec![2.0, 2.0, 2.0, 2.0]).unwrap());
        let mut b1 = BitMask::zeros(4);
        b1.set(0, true);
        b1.set(1, true);
        let mut b2 = BitMask::zeros(4);
        b2.set(2, true);
        b2.set(3, true);
        let m1 = TaskMask::from_entries(
            1,
            0,
            [("w".to_string(), (vec![4], b1))].into_iter().collect(),
        );
        let m2 = TaskMask::from_entries(
            2,
            0,
            [("w".to_string(), (vec![4], b2))].into_iter().collect(),
        );
        let w = assemble(&[&c1, &c2], &[&m1, &m2]).unwrap();
        assert_eq!(w.get("w").unwrap().data(), &[1.0, 1.0, 2.0, 2.0]);
    }

    #[test]
    fn assemble_rejects_overlap() {
        let mut c = ParameterStore::new();
        c.insert("w", Tensor::zeros(vec![2]));
        let mut b = BitMask::zeros(2);
        b.set(0, true);
        let m1 = TaskMask::from_entries(
            1,
            0,
            [("w".to_string(), (vec![2], b.clone()))].into_iter().collect(),
        );
        let m2 = TaskMask::from_entries(
            2,
            0,
            [("w".to_string(), (vec![2], b))].into_iter().collect(),
        );
        assert!(matches!(
            assemble(&[&c, &c], &[&m1, &m2]),
            Err(VqcdError::MaskOverlap(_))
        ));
    }

    #[test]
    fn single_task_full_mask_assembles_to_checkpoint() {
        let mut rng = substream(8, &[1]);
        let mut c = ParameterStore::new();
        c.insert("w", Tensor::randn(vec![9], 1.0, &mut rng));
        let mask = TaskMask::full(1, &shapes(&[("w", &[9])]));
        let w = assemble(&[&c], &[&mask]).unwrap();
        let a: Vec<u32> = w.get("w").unwrap().data().iter().map(|v| v.to_bits()).collect();
        let b: Vec<u32> = c.get("w").unwrap().data().iter().map(|v| v.to_bits()).collect();
        assert_eq!(a, b);
    }

    #[test]
    fn prune_threshold_zero_is_noop() {
        let sh = shapes(&[("w", &[6])]);
        let mut ledger = CapacityLedger::new(&sh, 2, 0.5).unwrap();
        let mut rng = substream(2, &[1]);
        let mut masks = vec![generate_mask(1, 1, &mut ledger, 2, &mut rng).unwrap()];
        let mut w = ParameterStore::new();
        w.insert("w", Tensor::new(vec![6], vec![0.0, 0.1, -0.2, 0.3, -0.4, 0.5]).unwrap());
        let before = masks[0].bits("w").unwrap().clone();
        let report = prune_masks(&w, &mut masks, &mut ledger, 0.0).unwrap();
        assert_eq!(report.prune_rate, 0.0);
        assert_eq!(masks[0].bits("w").unwrap(), &before);
    }

    #[test]
    fn prune_above_max_releases_everything() {
        let sh = shapes(&[("w", &[6])]);
        let mut ledger = CapacityLedger::new(&sh, 2, 0.5).unwrap();
        let mut rng = substream(2, &[1]);
        let mut masks = vec![generate_mask(1, 1, &mut ledger, 2, &mut rng).unwrap()];
        let mut w = ParameterStore::new();
        w.insert("w", Tensor::new(vec![6], vec![0.0, 0.1, -0.2, 0.3, -0.4, 0.5]).unwrap());
        let before_avail = ledger.capacity_report()["w"];
        let report = prune_masks(&w, &mut masks, &mut ledger, 1.0).unwrap();
        assert_eq!(report.prune_rate, 1.0);
        assert_eq!(masks[0].bits("w").unwrap().count_ones(), 0);
        assert!(ledger.capacity_report()["w"] > before_avail);
    }

    #[test]
    fn fresh_ledger_reports_full_capacity() {
        let sh = shapes(&[("a", &[3]), ("b", &[4, 4])]);
        let ledger = CapacityLedger::new(&sh, 3, 1.0 / 3.0).unwrap();
        for (_, frac) in ledger.capacity_report() {
            assert_eq!(frac, 1.0);
        }
    }
}
