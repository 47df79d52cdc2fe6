//! Surrogate classification head producing per-class confidences `q = softmax(W·H + b)`
//! from raw proposal features, plus confidence-thresholded pseudo labels.

use serde::{Deserialize, Serialize};

use crate::error::{check_dim, Error, Result};
use crate::numerics::{axpy, dot, softmax, Mat, Rng};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Scorer {
    pub w: Mat,
    pub b: Vec<f64>,
    pub grad_w: Mat,
    pub grad_b: Vec<f64>,
}

/// Thresholded prediction for one unlabeled proposal.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PseudoLabel {
    pub class_id: Option<usize>,
    pub confidence: f64,
}

impl PseudoLabel {
    pub fn is_accepted(&self) -> bool {
        self.class_id.is_some()
    }
}

impl Scorer {
    pub fn zeros(num_classes: usize, d_in: usize) -> Self {
        Self {
            w: Mat::zeros(num_classes, d_in),
            b: vec![0.0; num_classes],
            grad_w: Mat::zeros(num_classes, d_in),
            grad_b: vec![0.0; num_classes],
        }
    }

    /// Fan-based uniform weights, zero bias.
    pub fn init(rng: &mut Rng, num_classes: usize, d_in: usize) -> Result<Self> {
        if num_classes < 2 || d_in == 0 {
            return Err(Error::InvalidArgument(format!(
                "scorer needs C >= 2 and d_in >= 1, got C={num_classes}, d_in={d_in}"
            )));
        }
        let mut s = Self::zeros(num_classes, d_in);
        let bound = (6.0 / (num_classes + d_in) as f64).sqrt();
        for v in s.w.as_mut_slice() {
            *v = rng.uniform_range(-bound, bound);
        }
        Ok(s)
    }

    pub fn from_params(w: Mat, b: Vec<f64>) -> Result<Self> {
        check_dim("Scorer bias", w.rows(), b.len())?;
        Ok(Self {
            grad_w: Mat::zeros(w.rows(), w.cols()),
            grad_b: vec![0.0; b.len()],
            w,
            b,
        })
    }

    pub fn num_classes(&self) -> usize {
        self.w.rows()
    }

    pub fn d_in(&self) -> usize {
        self.w.cols()
    }

    pub fn logits(&self, input: &[f64]) -> Result<Vec<f64>> {
        let mut z = self.w.matvec(input)?;
        for (zi, bi) in z.iter_mut().zip(&self.b) {
            *zi += bi;
        }
        Ok(z)
    }

    pub fn score(&self, input: &[f64]) -> Result<Vec<f64>> {
        Ok(softmax(&self.logits(input)?))
    }

    /// Cross-entropy `-log q[label]`. Accumulates `scale ·` its parameter
    /// gradient and returns the unscaled `dL/dH`.
    pub fn ce_loss_and_grad(&mut self, input: &[f64], label: usize, scale: f64) -> Result<(f64, Vec<f64>)> {
        if label >= self.num_classes() {
            return Err(Error::InvalidArgument(format!(
                "label {label} out of range for C={}",
                self.num_classes()
            )));
        }
        let q = self.score(input)?;
        let loss = -q[label].ln();
        let mut dz = q;
        dz[label] -= 1.0;
        self.accumulate_logit_grad(input, &dz, scale)?;
        Ok((loss, self.w.matvec_t(&dz)?))
    }

    /// Backpropagates a cotangent on the probability vector `q` (as returned by
    /// [`Scorer::score`] for `input`) into the parameters, scaled by `scale`.
    pub fn backward_probs(&mut self, input: &[f64], q: &[f64], d_q: &[f64], scale: f64) -> Result<()> {
        check_dim("backward_probs", self.num_classes(), d_q.len())?;
        check_dim("backward_probs q", self.num_classes(), q.len())?;
        let inner = dot(q, d_q);
        let dz: Vec<f64> = q.iter().zip(d_q).map(|(qi, gi)| qi * (gi - inner)).collect();
        self.accumulate_logit_grad(input, &dz, scale)
    }

    fn accumulate_logit_grad(&mut self, input: &[f64], dz: &[f64], scale: f64) -> Result<()> {
        self.grad_w.add_outer(scale, dz, input)?;
        axpy(scale, dz, &mut self.grad_b);
        Ok(())
    }

    pub fn zero_grad(&mut self) {
        self.grad_w.fill(0.0);
        self.grad_b.iter_mut().for_each(|g| *g = 0.0);
    }

    pub fn is_finite(&self) -> bool {
        self.w.is_finite() && self.b.iter().all(|v| v.is_finite())
    }
}

/// Index of the maximum entry; ties go to the lowest index.
pub fn argmax(v: &[f64]) -> usize {
    let mut best = 0;
    for (i, &x) in v.iter().enumerate().skip(1) {
        if x > v[best] {
            best = i;
        }
    }
    best
}

/// Pseudo label by thresholding the top confidence at `tau`.
pub fn pseudo_label(q: &[f64], tau: f64) -> PseudoLabel {
    let c = argmax(q);
    let confidence = q[c];
    PseudoLabel {
        class_id: (confidence >= tau).then_some(c),
        confidence,
    }
}
