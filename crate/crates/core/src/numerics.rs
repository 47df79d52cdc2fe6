//! Dense f64 vector/matrix helpers, nonlinearities, the Euclidean metric and a
//! seeded counter-based random number generator.
//!
//! Vectors are plain `Vec<f64>` / `&[f64]`; matrices are row-major [`Mat`].

use serde::{Deserialize, Serialize};

use crate::error::{check_dim, Result};

/// Distances below this are treated as zero when differentiating the metric.
pub const DIST_EPS: f64 = 1e-12;

pub fn relu(v: &[f64]) -> Vec<f64> {
    v.iter().map(|&a| if a > 0.0 { a } else { 0.0 }).collect()
}

/// Plain (non-squared) Euclidean distance.
pub fn euclid(a: &[f64], b: &[f64]) -> Result<f64> {
    check_dim("euclid", a.len(), b.len())?;
    Ok(a.iter()
        .zip(b)
        .map(|(x, y)| (x - y) * (x - y))
        .sum::<f64>()
        .sqrt())
}

/// Distance together with its gradient with respect to `a`, `(a - b) / |a - b|`.
///
/// The gradient with respect to `b` is the negation. At coincident points the
/// subgradient 0 is returned.
pub fn euclid_with_grad(a: &[f64], b: &[f64]) -> Result<(f64, Vec<f64>)> {
    let d = euclid(a, b)?;
    if d < DIST_EPS {
        return Ok((d, vec![0.0; a.len()]));
    }
    Ok((d, a.iter().zip(b).map(|(x, y)| (x - y) / d).collect()))
}

/// Numerically stable softmax (max-subtracted).
pub fn softmax(v: &[f64]) -> Vec<f64> {
    assert!(!v.is_empty(), "softmax of an empty vector");
    let max = v.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = v.iter().map(|&a| (a - max).exp()).collect();
    let sum: f64 = exps.iter().sum();
    exps.into_iter().map(|e| e / sum).collect()
}

/// `log(sum(exp(v)))` with max subtraction. Returns `-inf` for an empty slice.
pub fn log_sum_exp(v: &[f64]) -> f64 {
    let max = v.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if max == f64::NEG_INFINITY {
        return max;
    }
    max + v.iter().map(|&a| (a - max).exp()).sum::<f64>().ln()
}

pub fn axpy(alpha: f64, x: &[f64], y: &mut [f64]) {
    debug_assert_eq!(x.len(), y.len());
    for (yi, xi) in y.iter_mut().zip(x) {
        *yi += alpha * xi;
    }
}

pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// Row-major dense matrix.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Mat {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

impl Mat {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self {
            rows,
            cols,
            data: vec![0.0; rows * cols],
        }
    }

    pub fn identity(n: usize) -> Self {
        let mut m = Self::zeros(n, n);
        for i in 0..n {
            m.data[i * n + i] = 1.0;
        }
        m
    }

    pub fn from_rows(rows: &[&[f64]]) -> Result<Self> {
        let cols = rows.first().map_or(0, |r| r.len());
        let mut data = Vec::with_capacity(rows.len() * cols);
        for r in rows {
            check_dim("Mat::from_rows", cols, r.len())?;
            data.extend_from_slice(r);
        }
        Ok(Self {
            rows: rows.len(),
            cols,
            data,
        })
    }

    pub fn from_vec(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        check_dim("Mat::from_vec", rows * cols, data.len())?;
        Ok(Self { rows, cols, data })
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.data
    }

    pub fn as_mut_slice(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn get(&self, r: usize, c: usize) -> f64 {
        self.data[r * self.cols + c]
    }

    pub fn row(&self, r: usize) -> &[f64] {
        &self.data[r * self.cols..(r + 1) * self.cols]
    }

    pub fn same_shape(&self, other: &Mat) -> bool {
        self.rows == other.rows && self.cols == other.cols
    }

    pub fn fill(&mut self, value: f64) {
        self.data.iter_mut().for_each(|v| *v = value);
    }

    pub fn scale(&mut self, s: f64) {
        self.data.iter_mut().for_each(|v| *v *= s);
    }

    /// `self · v`
    pub fn matvec(&self, v: &[f64]) -> Result<Vec<f64>> {
        check_dim("matvec", self.cols, v.len())?;
        Ok((0..self.rows).map(|r| dot(self.row(r), v)).collect())
    }

    /// `selfᵀ · v`
    pub fn matvec_t(&self, v: &[f64]) -> Result<Vec<f64>> {
        check_dim("matvec_t", self.rows, v.len())?;
        let mut out = vec![0.0; self.cols];
        for (r, &vr) in v.iter().enumerate() {
            axpy(vr, self.row(r), &mut out);
        }
        Ok(out)
    }

    /// `self += alpha · u ⊗ v`
    pub fn add_outer(&mut self, alpha: f64, u: &[f64], v: &[f64]) -> Result<()> {
        check_dim("add_outer rows", self.rows, u.len())?;
        check_dim("add_outer cols", self.cols, v.len())?;
        for (r, &ur) in u.iter().enumerate() {
            let a = alpha * ur;
            if a == 0.0 {
                continue;
            }
            let row = &mut self.data[r * self.cols..(r + 1) * self.cols];
            for (x, &vc) in row.iter_mut().zip(v) {
                *x += a * vc;
            }
        }
        Ok(())
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }
}

/// SplitMix64 generator.
///
/// The state is a single 64-bit counter advanced by the golden-ratio increment;
/// each output is the counter passed through the SplitMix64 finalizer. Streams
/// depend only on the seed and the number of draws, so they are identical on
/// every platform, and the whole state fits in one `u64` for checkpointing.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Rng {
    state: u64,
}

const GOLDEN_GAMMA: u64 = 0x9E37_79B9_7F4A_7C15;

impl Rng {
    pub fn new(seed: u64) -> Self {
        Self { state: seed }
    }

    pub fn from_state(state: u64) -> Self {
        Self { state }
    }

    pub fn state(&self) -> u64 {
        self.state
    }

    /// Independent stream derived from this seed and a stream tag, without
    /// advancing `self`.
    pub fn fork(&self, tag: u64) -> Rng {
        let mut z = self.state ^ tag.wrapping_mul(0xD1B5_4A32_D192_ED03);
        z = mix64(z.wrapping_add(GOLDEN_GAMMA));
        Rng::new(z)
    }

    pub fn next_u64(&mut self) -> u64 {
        self.state = self.state.wrapping_add(GOLDEN_GAMMA);
        mix64(self.state)
    }

    /// Uniform in `[0, 1)` with 53 bits of resolution.
    pub fn uniform(&mut self) -> f64 {
        (self.next_u64() >> 11) as f64 * (1.0 / (1u64 << 53) as f64)
    }

    pub fn uniform_range(&mut self, lo: f64, hi: f64) -> f64 {
        lo + (hi - lo) * self.uniform()
    }

    /// Standard normal via Box–Muller. Consumes exactly two draws.
    pub fn normal(&mut self) -> f64 {
        let u1 = 1.0 - self.uniform(); // (0, 1]
        let u2 = self.uniform();
        (-2.0 * u1.ln()).sqrt() * (std::f64::consts::TAU * u2).cos()
    }

    /// Uniform integer in `[0, n)` (Lemire's multiply-shift with rejection).
    pub fn below(&mut self, n: usize) -> usize {
        assert!(n > 0, "Rng::below(0)");
        let n = n as u64;
        let threshold = n.wrapping_neg() % n;
        loop {
            let m = (self.next_u64() as u128) * (n as u128);
            if (m as u64) >= threshold {
                return (m >> 64) as usize;
            }
        }
    }
}

fn mix64(mut z: u64) -> u64 {
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use crate::numerics::Rng;

    #[test]
    fn relu_examples() {
        assert_eq!(relu(&[-1.0, 0.0, 2.0]), vec![0.0, 0.0, 2.0]);
        assert_eq!(relu(&[0.0, 0.0]), vec![0.0, 0.0]);
        assert_eq!(relu(&[3.5, -0.1, -7.0]), vec![3.5, 0.0, 0.0]);
    }

    #[test]
    fn euclid_examples() {
        assert_eq!(euclid(&[0.0, 0.0], &[3.0, 4.0]).unwrap(), 5.0);
        assert_eq!(euclid(&[1.0, 2.0, 3.0], &[1.0, 2.0, 3.0]).unwrap(), 0.0);
        assert_eq!(
            euclid(&[1.0, 0.0], &[0.0, 1.0]).unwrap(),
            std::f64::consts::SQRT_2
        );
        assert!(euclid(&[1.0], &[1.0, 2.0]).is_err());
    }

    #[test]
    fn euclid_grad_at_coincidence_is_zero() {
        let (d, g) = euclid_with_grad(&[1.0, 1.0], &[1.0, 1.0]).unwrap();
        assert_eq!(d, 0.0);
        assert_eq!(g, vec![0.0, 0.0]);
    }

    #[test]
    fn softmax_examples() {
        assert_eq!(softmax(&[0.0, 0.0]), vec![0.5, 0.5]);
        for p in softmax(&[1000.0, 1000.0, 1000.0]) {
            assert!((p - 1.0 / 3.0).abs() < 1e-15);
        }
        let p = softmax(&[1f64.ln(), 3f64.ln()]);
        assert!((p[0] - 0.25).abs() < 1e-15);
        assert!((p[1] - 0.75).abs() < 1e-15);
    }

    #[test]
    fn matvec_examples() {
        assert_eq!(Mat::identity(2).matvec(&[5.0, -2.0]).unwrap(), vec![5.0, -2.0]);
        let m = Mat::from_rows(&[&[1.0, 1.0], &[0.0, 2.0]]).unwrap();
        assert_eq!(m.matvec(&[1.0, 1.0]).unwrap(), vec![2.0, 2.0]);
        assert_eq!(
            Mat::zeros(3, 2).matvec(&[7.0, -3.0]).unwrap(),
            vec![0.0, 0.0, 0.0]
        );
        assert!(Mat::zeros(3, 2).matvec(&[1.0]).is_err());
    }

    #[test]
    fn matvec_t_matches_explicit_transpose() {
        let m = Mat::from_rows(&[&[1.0, 2.0, 3.0], &[4.0, 5.0, 6.0]]).unwrap();
        let t = Mat::from_rows(&[&[1.0, 4.0], &[2.0, 5.0], &[3.0, 6.0]]).unwrap();
        assert_eq!(m.matvec_t(&[1.0, -1.0]).unwrap(), t.matvec(&[1.0, -1.0]).unwrap());
    }

    #[test]
    fn rng_streams_are_reproducible() {
        let mut a = Rng::new(42);
        let mut b = Rng::new(42);
        for _ in 0..100_000 {
            assert_eq!(a.next_u64(), b.next_u64());
        }
        assert_eq!(a, b);
    }

    #[test]
    fn rng_reference_values() {
        // SplitMix64 reference outputs for seed 1234567.
        let mut r = Rng::new(1234567);
        assert_eq!(r.next_u64(), 6457827717110365317);
        assert_eq!(r.next_u64(), 3203168211198807973);
    }

    #[test]
    fn rng_below_stays_in_range() {
        let mut r = Rng::new(9);
        let mut seen = [0usize; 7];
        for _ in 0..7000 {
            seen[r.below(7)] += 1;
        }
        assert!(seen.iter().all(|&c| c > 800));
    }

    #[test]
    fn rng_normal_moments() {
        let mut r = Rng::new(3);
        let n = 200_000;
        let xs: Vec<f64> = (0..n).map(|_| r.normal()).collect();
        let mean = xs.iter().sum::<f64>() / n as f64;
        let var = xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / n as f64;
        assert!(mean.abs() < 0.01, "mean {mean}");
        assert!((var - 1.0).abs() < 0.02, "var {var}");
    }

    proptest! {
        #[test]
        fn softmax_sums_to_one(v in prop::collection::vec(-1e3f64..1e3, 1..12)) {
            let p = softmax(&v);
            let s: f64 = p.iter().sum();
            prop_assert!((s - 1.0).abs() <= 1e-12);
            prop_assert!(p.iter().all(|&x| x >= 0.0 && x.is_finite()));
        }

        #[test]
        fn euclid_is_symmetric(a in prop::collection::vec(-10f64..10.0, 3), b in prop::collection::vec(-10f64..10.0, 3)) {
            prop_assert_eq!(euclid(&a, &b).unwrap(), euclid(&b, &a).unwrap());
        }
    }

    #[test]
    fn euclid_triangle_inequality() {
        let mut r = Rng::new(17);
        for _ in 0..2000 {
            let d = 1 + r.below(6);
            let mut pt = || (0..d).map(|_| r.uniform_range(-5.0, 5.0)).collect::<Vec<_>>();
            let (a, b, c) = (pt(), pt(), pt());
            let ab = euclid(&a, &b).unwrap();
            let bc = euclid(&b, &c).unwrap();
            let ac = euclid(&a, &c).unwrap();
            assert!(ac <= ab + bc + 1e-12);
        }
    }
}
