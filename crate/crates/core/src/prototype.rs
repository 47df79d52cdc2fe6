//! Prototype-level alignment.
//!
//! Per batch, labeled embeddings give ground-truth-guided prototypes (plain
//! class means) and labeled/unlabeled embeddings give confidence-guided
//! prototypes (confidence-weighted class means). Labeled ground-truth-guided
//! prototypes from earlier steps are kept in a [`MemoryBank`]; its per-class
//! means are the anchors for the intra/inter alignment losses.
//!
//! Classes missing on either side of a comparison are skipped, and each loss is
//! normalized by the number of terms it actually contains.

use std::collections::VecDeque;

use serde::{Deserialize, Serialize};

use crate::error::{check_dim, Error, Result};
use crate::numerics::{axpy, dot, euclid_with_grad};

/// Read access to a per-class collection of optional prototype vectors.
pub trait PrototypeView {
    fn num_classes(&self) -> usize;
    fn prototype(&self, class: usize) -> Option<&[f64]>;
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Prototype {
    pub vector: Vec<f64>,
    pub support_count: usize,
    pub support_weight: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PrototypeSet {
    pub dim: usize,
    pub entries: Vec<Option<Prototype>>,
}

impl PrototypeSet {
    pub fn empty(num_classes: usize, dim: usize) -> Self {
        Self {
            dim,
            entries: vec![None; num_classes],
        }
    }

    pub fn present_count(&self) -> usize {
        self.entries.iter().filter(|e| e.is_some()).count()
    }
}

impl PrototypeView for PrototypeSet {
    fn num_classes(&self) -> usize {
        self.entries.len()
    }

    fn prototype(&self, class: usize) -> Option<&[f64]> {
        self.entries[class].as_ref().map(|p| p.vector.as_slice())
    }
}

/// Per-class means of the memory bank; absent where a class buffer is empty.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MeanPrototypes {
    pub dim: usize,
    pub entries: Vec<Option<Vec<f64>>>,
}

impl PrototypeView for MeanPrototypes {
    fn num_classes(&self) -> usize {
        self.entries.len()
    }

    fn prototype(&self, class: usize) -> Option<&[f64]> {
        self.entries[class].as_deref()
    }
}

/// One embedding contributing to a prototype.
#[derive(Debug, Clone, Copy)]
pub struct Member<'a> {
    pub embedding: &'a [f64],
    pub class: usize,
    /// Confidence `q_i`; ignored for ground-truth-guided prototypes.
    pub weight: f64,
}

/// Unweighted per-class means.
pub fn prototypes_gg(members: &[Member<'_>], num_classes: usize, dim: usize) -> Result<PrototypeSet> {
    let unit: Vec<Member<'_>> = members.iter().map(|m| Member { weight: 1.0, ..*m }).collect();
    weighted_means(&unit, num_classes, dim)
}

/// Confidence-weighted per-class means `Σ q_i x_i / Σ q_i`.
pub fn prototypes_cg(members: &[Member<'_>], num_classes: usize, dim: usize) -> Result<PrototypeSet> {
    for m in members {
        if !(m.weight >= 0.0 && m.weight.is_finite()) {
            return Err(Error::InvalidArgument(format!(
                "confidence weights must be finite and non-negative, got {}",
                m.weight
            )));
        }
    }
    weighted_means(members, num_classes, dim)
}

fn weighted_means(members: &[Member<'_>], num_classes: usize, dim: usize) -> Result<PrototypeSet> {
    let mut max_weight = vec![0.0f64; num_classes];
    for m in members {
        if m.class >= num_classes {
            return Err(Error::InvalidArgument(format!(
                "class {} out of range for C={num_classes}",
                m.class
            )));
        }
        check_dim("prototype member", dim, m.embedding.len())?;
        max_weight[m.class] = max_weight[m.class].max(m.weight);
    }
    let mut sums = vec![vec![0.0; dim]; num_classes];
    let mut norm = vec![0.0; num_classes];
    let mut count = vec![0usize; num_classes];
    let mut weight = vec![0.0; num_classes];
    // Weights are divided by the class maximum first, so equal weights become
    // exactly 1 and the weighted mean coincides bitwise with the plain mean.
    for m in members {
        count[m.class] += 1;
        weight[m.class] += m.weight;
        if max_weight[m.class] > 0.0 {
            let w = m.weight / max_weight[m.class];
            norm[m.class] += w;
            axpy(w, m.embedding, &mut sums[m.class]);
        }
    }
    let mut set = PrototypeSet::empty(num_classes, dim);
    for c in 0..num_classes {
        if count[c] == 0 {
            continue;
        }
        if norm[c] == 0.0 {
            return Err(Error::InvalidArgument(format!(
                "class {c} has {} members but zero total confidence",
                count[c]
            )));
        }
        let vector = sums[c].iter().map(|s| s / norm[c]).collect();
        set.entries[c] = Some(Prototype {
            vector,
            support_count: count[c],
            support_weight: weight[c],
        });
    }
    Ok(set)
}

/// Maps prototype cotangents back to the member embeddings of a plain mean.
pub fn backprop_gg(members: &[Member<'_>], set: &PrototypeSet, grad: &[Vec<f64>]) -> Vec<Vec<f64>> {
    members
        .iter()
        .map(|m| {
            let p = set.entries[m.class].as_ref().expect("member class is present");
            grad[m.class].iter().map(|g| g / p.support_count as f64).collect()
        })
        .collect()
}

/// Maps prototype cotangents back to `(dL/dx_i, dL/dq_i)` for each member of a
/// confidence-weighted mean.
pub fn backprop_cg(
    members: &[Member<'_>],
    set: &PrototypeSet,
    grad: &[Vec<f64>],
) -> Vec<(Vec<f64>, f64)> {
    members
        .iter()
        .map(|m| {
            let p = set.entries[m.class].as_ref().expect("member class is present");
            let g = &grad[m.class];
            let dx = g.iter().map(|v| v * m.weight / p.support_weight).collect();
            let centered: Vec<f64> = m.embedding.iter().zip(&p.vector).map(|(x, c)| x - c).collect();
            (dx, dot(g, &centered) / p.support_weight)
        })
        .collect()
}

/// Value of an alignment loss with dense per-class cotangents for both sides.
#[derive(Debug, Clone, PartialEq)]
pub struct AlignLoss {
    pub value: f64,
    pub grad_a: Vec<Vec<f64>>,
    pub grad_b: Vec<Vec<f64>>,
    /// Number of class terms / ordered pairs included in the normalization.
    pub terms: usize,
    /// Ordered pairs whose hinge is active (inter loss only).
    pub active: Vec<(usize, usize)>,
}

impl AlignLoss {
    fn zero(num_classes: usize, dim: usize) -> Self {
        Self {
            value: 0.0,
            grad_a: vec![vec![0.0; dim]; num_classes],
            grad_b: vec![vec![0.0; dim]; num_classes],
            terms: 0,
            active: Vec::new(),
        }
    }
}

fn check_views(a: &dyn PrototypeView, b: &dyn PrototypeView) -> Result<()> {
    check_dim("prototype sets: class count", a.num_classes(), b.num_classes())
}

/// Mean distance between same-class prototypes over classes present on both sides.
pub fn loss_intra(a: &dyn PrototypeView, b: &dyn PrototypeView, dim: usize) -> Result<AlignLoss> {
    check_views(a, b)?;
    let n = a.num_classes();
    let mut out = AlignLoss::zero(n, dim);
    let pairs: Vec<(usize, &[f64], &[f64])> = (0..n)
        .filter_map(|c| Some((c, a.prototype(c)?, b.prototype(c)?)))
        .collect();
    if pairs.is_empty() {
        return Ok(out);
    }
    let inv = 1.0 / pairs.len() as f64;
    for (c, pa, pb) in pairs {
        let (d, g) = euclid_with_grad(pa, pb)?;
        out.value += d;
        axpy(inv, &g, &mut out.grad_a[c]);
        axpy(-inv, &g, &mut out.grad_b[c]);
        out.terms += 1;
    }
    out.value *= inv;
    Ok(out)
}

/// Mean hinge `max(0, m − Φ(a_c, b_k))` over ordered pairs `c ≠ k` present on both sides.
pub fn loss_inter(
    a: &dyn PrototypeView,
    b: &dyn PrototypeView,
    margin: f64,
    dim: usize,
) -> Result<AlignLoss> {
    check_views(a, b)?;
    if !(margin > 0.0) {
        return Err(Error::InvalidArgument(format!("margin must be > 0, got {margin}")));
    }
    let n = a.num_classes();
    let mut out = AlignLoss::zero(n, dim);
    let mut pairs = Vec::new();
    for c in 0..n {
        let Some(pa) = a.prototype(c) else { continue };
        for k in (0..n).filter(|&k| k != c) {
            if let Some(pb) = b.prototype(k) {
                pairs.push((c, k, pa, pb));
            }
        }
    }
    if pairs.is_empty() {
        return Ok(out);
    }
    let inv = 1.0 / pairs.len() as f64;
    out.terms = pairs.len();
    for (c, k, pa, pb) in pairs {
        let (d, g) = euclid_with_grad(pa, pb)?;
        let hinge = margin - d;
        if hinge > 0.0 {
            out.value += hinge;
            axpy(-inv, &g, &mut out.grad_a[c]);
            axpy(inv, &g, &mut out.grad_b[k]);
            out.active.push((c, k));
        }
    }
    out.value *= inv;
    Ok(out)
}

/// Components of a memory-bank prototype alignment loss.
#[derive(Debug, Clone, PartialEq)]
pub struct PmbLoss {
    pub value: f64,
    pub intra: f64,
    pub inter_bank: f64,
    pub inter_self: f64,
    /// Cotangent on the confidence-guided prototypes; bank means are constants.
    pub grad: Vec<Vec<f64>>,
    pub active_bank: Vec<(usize, usize)>,
    pub active_self: Vec<(usize, usize)>,
}

/// `intra(M, S) + inter(M, S) + inter(S, S)` for bank means `M` and a
/// confidence-guided set `S` (labeled or pseudo-labeled).
pub fn loss_pmb(means: &MeanPrototypes, set: &PrototypeSet, margin: f64) -> Result<PmbLoss> {
    let dim = set.dim;
    let intra = loss_intra(means, set, dim)?;
    let inter_bank = loss_inter(means, set, margin, dim)?;
    let inter_self = loss_inter(set, set, margin, dim)?;
    let mut grad = vec![vec![0.0; dim]; set.num_classes()];
    for (c, g) in grad.iter_mut().enumerate() {
        axpy(1.0, &intra.grad_b[c], g);
        axpy(1.0, &inter_bank.grad_b[c], g);
        axpy(1.0, &inter_self.grad_a[c], g);
        axpy(1.0, &inter_self.grad_b[c], g);
    }
    Ok(PmbLoss {
        value: intra.value + inter_bank.value + inter_self.value,
        intra: intra.value,
        inter_bank: inter_bank.value,
        inter_self: inter_self.value,
        grad,
        active_bank: inter_bank.active,
        active_self: inter_self.active,
    })
}

/// Fixed-capacity per-class FIFO store of detached labeled prototypes.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MemoryBank {
    dim: usize,
    capacity_per_class: usize,
    buffers: Vec<VecDeque<Vec<f64>>>,
}

impl MemoryBank {
    /// Splits `total_capacity` evenly across classes (`floor(total / C)` each).
    pub fn new(num_classes: usize, dim: usize, total_capacity: usize) -> Result<Self> {
        if num_classes == 0 {
            return Err(Error::InvalidArgument("memory bank needs at least one class".into()));
        }
        let capacity_per_class = total_capacity / num_classes;
        if capacity_per_class == 0 {
            return Err(Error::InvalidArgument(format!(
                "bank capacity {total_capacity} is smaller than the class count {num_classes}"
            )));
        }
        Ok(Self {
            dim,
            capacity_per_class,
            buffers: vec![VecDeque::with_capacity(capacity_per_class); num_classes],
        })
    }

    pub fn num_classes(&self) -> usize {
        self.buffers.len()
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn capacity_per_class(&self) -> usize {
        self.capacity_per_class
    }

    pub fn len(&self, class: usize) -> usize {
        self.buffers[class].len()
    }

    pub fn is_empty(&self) -> bool {
        self.buffers.iter().all(VecDeque::is_empty)
    }

    /// Stored entries of a class, oldest first.
    pub fn entries(&self, class: usize) -> impl Iterator<Item = &[f64]> {
        self.buffers[class].iter().map(Vec::as_slice)
    }

    pub fn push_one(&mut self, class: usize, vector: &[f64]) -> Result<()> {
        check_dim("memory bank entry", self.dim, vector.len())?;
        let buf = &mut self.buffers[class];
        if buf.len() == self.capacity_per_class {
            buf.pop_front();
        }
        buf.push_back(vector.to_vec());
        Ok(())
    }

    /// Appends every present prototype of `set` to its class buffer.
    pub fn push(&mut self, set: &PrototypeSet) -> Result<()> {
        check_dim("memory bank push: class count", self.num_classes(), set.num_classes())?;
        for (c, entry) in set.entries.iter().enumerate() {
            if let Some(p) = entry {
                self.push_one(c, &p.vector)?;
            }
        }
        Ok(())
    }

    pub fn mean_prototypes(&self) -> MeanPrototypes {
        let entries = self
            .buffers
            .iter()
            .map(|buf| {
                if buf.is_empty() {
                    return None;
                }
                let mut sum = vec![0.0; self.dim];
                for v in buf {
                    axpy(1.0, v, &mut sum);
                }
                let n = buf.len() as f64;
                Some(sum.into_iter().map(|s| s / n).collect())
            })
            .collect();
        MeanPrototypes {
            dim: self.dim,
            entries,
        }
    }

    /// Rebuilds a bank from serialized buffers, validating shapes.
    pub fn from_parts(dim: usize, capacity_per_class: usize, buffers: Vec<Vec<Vec<f64>>>) -> Result<Self> {
        let mut bank = Self {
            dim,
            capacity_per_class,
            buffers: Vec::with_capacity(buffers.len()),
        };
        for buf in buffers {
            if buf.len() > capacity_per_class {
                return Err(Error::Checkpoint(format!(
                    "bank buffer holds {} entries, capacity is {capacity_per_class}",
                    buf.len()
                )));
            }
            for v in &buf {
                check_dim("memory bank entry", dim, v.len())?;
            }
            bank.buffers.push(buf.into());
        }
        Ok(bank)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::{euclid, Rng};

    fn member(x: &[f64], class: usize, weight: f64) -> Member<'_> {
        Member {
            embedding: x,
            class,
            weight,
        }
    }

    fn vec_of(set: &PrototypeSet, c: usize) -> Vec<f64> {
        set.entries[c].as_ref().unwrap().vector.clone()
    }

    #[test]
    fn gg_examples() {
        let (a, b) = ([0.0, 0.0], [2.0, 2.0]);
        let set = prototypes_gg(&[member(&a, 0, 1.0), member(&b, 0, 1.0)], 3, 2).unwrap();
        assert_eq!(vec_of(&set, 0), vec![1.0, 1.0]);
        assert!(set.entries[1].is_none() && set.entries[2].is_none());
        let one = [5.0, -3.0];
        let set = prototypes_gg(&[member(&one, 1, 1.0)], 2, 2).unwrap();
        assert_eq!(vec_of(&set, 1), one.to_vec());
        assert_eq!(set.entries[1].as_ref().unwrap().support_count, 1);
    }

    #[test]
    fn cg_examples() {
        let (a, b) = ([0.0, 0.0], [4.0, 0.0]);
        let set = prototypes_cg(&[member(&a, 0, 1.0), member(&b, 0, 3.0)], 1, 2).unwrap();
        assert_eq!(vec_of(&set, 0), vec![3.0, 0.0]);
        let set = prototypes_cg(&[member(&b, 0, 0.37)], 1, 2).unwrap();
        assert_eq!(vec_of(&set, 0), b.to_vec());
        let err = prototypes_cg(&[member(&a, 0, 0.0), member(&b, 0, 0.0)], 1, 2);
        assert!(err.is_err());
    }

    #[test]
    fn cg_with_equal_weights_is_bitwise_gg() {
        let mut rng = Rng::new(41);
        for _ in 0..200 {
            let n = 1 + rng.below(8);
            let w = rng.uniform_range(0.01, 1.0);
            let xs: Vec<Vec<f64>> = (0..n).map(|_| (0..3).map(|_| rng.normal() * 5.0).collect()).collect();
            let classes: Vec<usize> = (0..n).map(|_| rng.below(3)).collect();
            let members: Vec<Member<'_>> = xs.iter().zip(&classes).map(|(x, &c)| member(x, c, w)).collect();
            let gg = prototypes_gg(&members, 3, 3).unwrap();
            let cg = prototypes_cg(&members, 3, 3).unwrap();
            for c in 0..3 {
                assert_eq!(gg.entries[c].as_ref().map(|p| &p.vector), cg.entries[c].as_ref().map(|p| &p.vector));
            }
        }
    }

    #[test]
    fn prototypes_lie_in_bounding_box_of_members() {
        let mut rng = Rng::new(42);
        for _ in 0..200 {
            let n = 1 + rng.below(8);
            let xs: Vec<Vec<f64>> = (0..n).map(|_| (0..3).map(|_| rng.normal()).collect()).collect();
            let ws: Vec<f64> = (0..n).map(|_| rng.uniform_range(0.05, 1.0)).collect();
            let members: Vec<Member<'_>> = xs.iter().zip(&ws).map(|(x, &w)| member(x, 0, w)).collect();
            for set in [prototypes_gg(&members, 1, 3).unwrap(), prototypes_cg(&members, 1, 3).unwrap()] {
                let p = vec_of(&set, 0);
                for d in 0..3 {
                    let lo = xs.iter().map(|x| x[d]).fold(f64::INFINITY, f64::min);
                    let hi = xs.iter().map(|x| x[d]).fold(f64::NEG_INFINITY, f64::max);
                    assert!(lo - 1e-12 <= p[d] && p[d] <= hi + 1e-12);
                }
            }
        }
    }

    fn set_from(vectors: &[Option<Vec<f64>>]) -> PrototypeSet {
        PrototypeSet {
            dim: 2,
            entries: vectors
                .iter()
                .map(|v| {
                    v.clone().map(|vector| Prototype {
                        vector,
                        support_count: 1,
                        support_weight: 1.0,
                    })
                })
                .collect(),
        }
    }

    #[test]
    fn intra_examples() {
        let a = set_from(&[Some(vec![0.0, 0.0]), Some(vec![1.0, 1.0])]);
        assert_eq!(loss_intra(&a, &a, 2).unwrap().value, 0.0);
        let b = set_from(&[Some(vec![3.0, 4.0]), Some(vec![1.0, 1.0])]);
        assert_eq!(loss_intra(&a, &b, 2).unwrap().value, 2.5);
        let c = set_from(&[Some(vec![0.0, 0.0]), None]);
        let d = set_from(&[None, Some(vec![0.0, 0.0])]);
        assert_eq!(loss_intra(&c, &d, 2).unwrap().value, 0.0);
    }

    #[test]
    fn inter_examples() {
        let far = set_from(&[Some(vec![0.0, 0.0]), Some(vec![5.0, 0.0])]);
        assert_eq!(loss_inter(&far, &far, 1.0, 2).unwrap().value, 0.0);
        let coincident = set_from(&[Some(vec![1.0, 1.0]), Some(vec![1.0, 1.0])]);
        let l = loss_inter(&coincident, &coincident, 1.0, 2).unwrap();
        assert_eq!(l.value, 1.0);
        assert_eq!(l.terms, 2);
        let single = set_from(&[Some(vec![1.0, 1.0]), None]);
        assert_eq!(loss_inter(&single, &single, 1.0, 2).unwrap().value, 0.0);
        assert!(loss_inter(&far, &far, 0.0, 2).is_err());
    }

    #[test]
    fn bank_fifo_and_capacity() {
        let mut bank = MemoryBank::new(4, 1, 1024).unwrap();
        let k = bank.capacity_per_class();
        assert_eq!(k, 256);
        for i in 1..=(k + 3) {
            bank.push_one(2, &[i as f64]).unwrap();
            assert!(bank.len(2) <= k);
        }
        let kept: Vec<f64> = bank.entries(2).map(|v| v[0]).collect();
        let expected: Vec<f64> = (4..=(k + 3)).map(|i| i as f64).collect();
        assert_eq!(kept, expected);
        assert_eq!(bank.len(0), 0);
    }

    #[test]
    fn bank_push_skips_absent_classes() {
        let mut bank = MemoryBank::new(2, 2, 8).unwrap();
        bank.push(&set_from(&[None, Some(vec![1.0, 2.0])])).unwrap();
        assert_eq!(bank.len(0), 0);
        assert_eq!(bank.len(1), 1);
    }

    #[test]
    fn bank_mean_examples() {
        let mut bank = MemoryBank::new(2, 2, 8).unwrap();
        let m = bank.mean_prototypes();
        assert!(m.entries.iter().all(Option::is_none));
        bank.push_one(0, &[0.0, 0.0]).unwrap();
        assert_eq!(bank.mean_prototypes().entries[0], Some(vec![0.0, 0.0]));
        bank.push_one(0, &[2.0, 4.0]).unwrap();
        assert_eq!(bank.mean_prototypes().entries[0], Some(vec![1.0, 2.0]));
        assert!(MemoryBank::new(8, 2, 4).is_err());
    }

    #[test]
    fn bank_entries_are_snapshots() {
        let mut bank = MemoryBank::new(1, 2, 4).unwrap();
        let mut v = vec![1.0, 1.0];
        bank.push_one(0, &v).unwrap();
        v[0] = 9.0;
        assert_eq!(bank.entries(0).next().unwrap(), &[1.0, 1.0]);
    }

    #[test]
    fn pmb_examples() {
        let means = MeanPrototypes {
            dim: 2,
            entries: vec![Some(vec![0.0, 0.0]), Some(vec![3.0, 0.0])],
        };
        let matching = set_from(&[Some(vec![0.0, 0.0]), Some(vec![3.0, 0.0])]);
        assert_eq!(loss_pmb(&means, &matching, 1.0).unwrap().value, 0.0);

        let empty_bank = MeanPrototypes {
            dim: 2,
            entries: vec![None, None],
        };
        let close = set_from(&[Some(vec![0.0, 0.0]), Some(vec![0.5, 0.0])]);
        let l = loss_pmb(&empty_bank, &close, 1.0).unwrap();
        assert_eq!(l.value, loss_inter(&close, &close, 1.0, 2).unwrap().value);
        assert_eq!(l.value, 0.5);

        let none = PrototypeSet::empty(2, 2);
        assert_eq!(loss_pmb(&means, &none, 1.0).unwrap().value, 0.0);
    }

    fn check(analytic: f64, numeric: f64) {
        let scale = analytic.abs().max(numeric.abs());
        if scale < 1e-4 {
            assert!((analytic - numeric).abs() <= 1e-7, "{analytic} vs {numeric}");
        } else {
            assert!((analytic - numeric).abs() / scale <= 1e-4, "{analytic} vs {numeric}");
        }
    }

    /// Finite differences through the confidence-weighted means and the full
    /// bank alignment loss, with respect to embeddings and confidences.
    #[test]
    fn pmb_gradients_through_weighted_means() {
        let h = 1e-5;
        let mut rng = Rng::new(43);
        let (nc, dim) = (3, 2);
        for _ in 0..30 {
            let mut bank = MemoryBank::new(nc, dim, 30).unwrap();
            for _ in 0..5 {
                let c = rng.below(nc);
                bank.push_one(c, &[rng.normal(), rng.normal()]).unwrap();
            }
            let means = bank.mean_prototypes();
            let n = 6;
            let xs: Vec<Vec<f64>> = (0..n).map(|_| vec![0.6 * rng.normal(), 0.6 * rng.normal()]).collect();
            let cs: Vec<usize> = (0..n).map(|_| rng.below(nc)).collect();
            let ws: Vec<f64> = (0..n).map(|_| rng.uniform_range(0.5, 1.0)).collect();
            let f = |xs: &[Vec<f64>], ws: &[f64]| {
                let members: Vec<Member<'_>> = xs.iter().zip(&cs).zip(ws).map(|((x, &c), &w)| member(x, c, w)).collect();
                let set = prototypes_cg(&members, nc, dim).unwrap();
                loss_pmb(&means, &set, 1.0).unwrap()
            };
            let members: Vec<Member<'_>> = xs.iter().zip(&cs).zip(&ws).map(|((x, &c), &w)| member(x, c, w)).collect();
            let set = prototypes_cg(&members, nc, dim).unwrap();
            let loss = loss_pmb(&means, &set, 1.0).unwrap();
            let back = backprop_cg(&members, &set, &loss.grad);
            for i in 0..n {
                for d in 0..dim {
                    let (mut xp, mut xm) = (xs.clone(), xs.clone());
                    xp[i][d] += h;
                    xm[i][d] -= h;
                    let (lp, lm) = (f(&xp, &ws), f(&xm, &ws));
                    if lp.active_bank != loss.active_bank || lm.active_bank != loss.active_bank
                        || lp.active_self != loss.active_self || lm.active_self != loss.active_self
                    {
                        continue;
                    }
                    check(back[i].0[d], (lp.value - lm.value) / (2.0 * h));
                }
                let (mut wp, mut wm) = (ws.clone(), ws.clone());
                wp[i] += h;
                wm[i] -= h;
                check(back[i].1, (f(&xs, &wp).value - f(&xs, &wm).value) / (2.0 * h));
            }
        }
    }

    #[test]
    fn gg_backprop_matches_finite_differences() {
        let h = 1e-5;
        let mut rng = Rng::new(44);
        let xs: Vec<Vec<f64>> = (0..5).map(|_| vec![rng.normal(), rng.normal()]).collect();
        let cs = [0usize, 1, 0, 1, 1];
        let target = [vec![3.0, 1.0], vec![-2.0, 0.5]];
        let f = |xs: &[Vec<f64>]| {
            let members: Vec<Member<'_>> = xs.iter().zip(&cs).map(|(x, &c)| member(x, c, 1.0)).collect();
            let set = prototypes_gg(&members, 2, 2).unwrap();
            (0..2).map(|c| euclid(&vec_of(&set, c), &target[c]).unwrap()).sum::<f64>()
        };
        let members: Vec<Member<'_>> = xs.iter().zip(&cs).map(|(x, &c)| member(x, c, 1.0)).collect();
        let set = prototypes_gg(&members, 2, 2).unwrap();
        let grad: Vec<Vec<f64>> = (0..2)
            .map(|c| euclid_with_grad(&vec_of(&set, c), &target[c]).unwrap().1)
            .collect();
        let back = backprop_gg(&members, &set, &grad);
        for i in 0..5 {
            for d in 0..2 {
                let (mut xp, mut xm) = (xs.clone(), xs.clone());
                xp[i][d] += h;
                xm[i][d] -= h;
                check(back[i][d], (f(&xp) - f(&xm)) / (2.0 * h));
            }
        }
    }
}
