//! Two-layer projection head `x = W2 · relu(W1 · H)` mapping proposal features
//! into the metric space, with a hand-written backward pass.

use serde::{Deserialize, Serialize};

use crate::error::{check_dim, Error, Result};
use crate::numerics::{relu, Mat, Rng};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProjectionHead {
    pub w1: Mat,
    pub w2: Mat,
    pub grad_w1: Mat,
    pub grad_w2: Mat,
}

/// Intermediates recorded by [`ProjectionHead::forward`].
#[derive(Debug, Clone, PartialEq)]
pub struct ForwardTape {
    pub input: Vec<f64>,
    pub pre_activation: Vec<f64>,
    pub hidden: Vec<f64>,
    pub output: Vec<f64>,
}

impl ProjectionHead {
    /// Fan-based uniform initialization, `U(-b, b)` with `b = sqrt(6 / (fan_in + fan_out))`.
    pub fn init(rng: &mut Rng, d_in: usize, d_hidden: usize, d_out: usize) -> Result<Self> {
        if d_in == 0 || d_hidden == 0 || d_out == 0 {
            return Err(Error::InvalidArgument(format!(
                "projection dims must be >= 1, got {d_in}/{d_hidden}/{d_out}"
            )));
        }
        let w1 = uniform_fan(rng, d_hidden, d_in);
        let w2 = uniform_fan(rng, d_out, d_hidden);
        Self::from_weights(w1, w2)
    }

    pub fn from_weights(w1: Mat, w2: Mat) -> Result<Self> {
        check_dim("ProjectionHead: W2.cols vs W1.rows", w1.rows(), w2.cols())?;
        Ok(Self {
            grad_w1: Mat::zeros(w1.rows(), w1.cols()),
            grad_w2: Mat::zeros(w2.rows(), w2.cols()),
            w1,
            w2,
        })
    }

    pub fn d_in(&self) -> usize {
        self.w1.cols()
    }

    pub fn d_hidden(&self) -> usize {
        self.w1.rows()
    }

    pub fn d_out(&self) -> usize {
        self.w2.rows()
    }

    pub fn forward(&self, input: &[f64]) -> Result<(Vec<f64>, ForwardTape)> {
        let pre_activation = self.w1.matvec(input)?;
        let hidden = relu(&pre_activation);
        let output = self.w2.matvec(&hidden)?;
        let tape = ForwardTape {
            input: input.to_vec(),
            pre_activation,
            hidden,
            output: output.clone(),
        };
        Ok((output, tape))
    }

    /// Embeds without keeping a tape.
    pub fn embed(&self, input: &[f64]) -> Result<Vec<f64>> {
        self.w2.matvec(&relu(&self.w1.matvec(input)?))
    }

    /// Accumulates parameter gradients for cotangent `d_out` and returns `dL/dH`.
    pub fn backward(&mut self, tape: &ForwardTape, d_out: &[f64]) -> Result<Vec<f64>> {
        check_dim("backward cotangent", self.d_out(), d_out.len())?;
        check_dim("backward tape hidden", self.d_hidden(), tape.hidden.len())?;
        check_dim("backward tape input", self.d_in(), tape.input.len())?;
        self.grad_w2.add_outer(1.0, d_out, &tape.hidden)?;
        let mut d_pre = self.w2.matvec_t(d_out)?;
        for (g, &a) in d_pre.iter_mut().zip(&tape.pre_activation) {
            // relu'(0) = 0
            if a <= 0.0 {
                *g = 0.0;
            }
        }
        self.grad_w1.add_outer(1.0, &d_pre, &tape.input)?;
        self.w1.matvec_t(&d_pre)
    }

    pub fn zero_grad(&mut self) {
        self.grad_w1.fill(0.0);
        self.grad_w2.fill(0.0);
    }

    pub fn is_finite(&self) -> bool {
        self.w1.is_finite() && self.w2.is_finite()
    }
}

fn uniform_fan(rng: &mut Rng, rows: usize, cols: usize) -> Mat {
    let bound = (6.0 / (rows + cols) as f64).sqrt();
    let data = (0..rows * cols)
        .map(|_| rng.uniform_range(-bound, bound))
        .collect();
    Mat::from_vec(rows, cols, data).expect("shape is consistent by construction")
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::euclid_with_grad;

    fn head(w1: &[&[f64]], w2: &[&[f64]]) -> ProjectionHead {
        ProjectionHead::from_weights(Mat::from_rows(w1).unwrap(), Mat::from_rows(w2).unwrap())
            .unwrap()
    }

    #[test]
    fn forward_examples() {
        let h = head(&[&[1.0, 0.0], &[0.0, 1.0]], &[&[1.0, 0.0], &[0.0, 1.0]]);
        assert_eq!(h.forward(&[1.0, -1.0]).unwrap().0, vec![1.0, 0.0]);

        let z = head(&[&[0.0, 0.0], &[0.0, 0.0]], &[&[3.0, -1.0], &[2.0, 5.0]]);
        assert_eq!(z.forward(&[4.0, -9.0]).unwrap().0, vec![0.0, 0.0]);

        let h = head(&[&[1.0, 0.0], &[0.0, 1.0]], &[&[2.0, 0.0], &[0.0, 3.0]]);
        assert_eq!(h.forward(&[1.0, 2.0]).unwrap().0, vec![2.0, 6.0]);
        assert!(h.forward(&[1.0]).is_err());
    }

    #[test]
    fn backward_examples() {
        let mut h = head(&[&[1.0, 0.0], &[0.0, 1.0]], &[&[1.0, 0.0], &[0.0, 1.0]]);
        let (_, tape) = h.forward(&[1.0, 1.0]).unwrap();
        let dh = h.backward(&tape, &[0.0, 0.0]).unwrap();
        assert_eq!(dh, vec![0.0, 0.0]);
        assert!(h.grad_w1.as_slice().iter().all(|&g| g == 0.0));
        assert!(h.grad_w2.as_slice().iter().all(|&g| g == 0.0));

        let dh = h.backward(&tape, &[1.0, 0.0]).unwrap();
        assert_eq!(h.grad_w2.row(0), &[1.0, 1.0]);
        assert_eq!(h.grad_w2.row(1), &[0.0, 0.0]);
        assert_eq!(dh, vec![1.0, 0.0]);
        assert!(h.backward(&tape, &[1.0]).is_err());
    }

    #[test]
    fn init_shapes_bounds_and_determinism() {
        let a = ProjectionHead::init(&mut Rng::new(5), 32, 16, 8).unwrap();
        let b = ProjectionHead::init(&mut Rng::new(5), 32, 16, 8).unwrap();
        assert_eq!(a, b);
        assert_eq!((a.w1.rows(), a.w1.cols()), (16, 32));
        assert_eq!((a.w2.rows(), a.w2.cols()), (8, 16));
        let b1 = (6.0f64 / 48.0).sqrt();
        let b2 = (6.0f64 / 24.0).sqrt();
        assert!(a.w1.as_slice().iter().all(|v| v.abs() <= b1));
        assert!(a.w2.as_slice().iter().all(|v| v.abs() <= b2));
        assert!(a.grad_w1.as_slice().iter().all(|&g| g == 0.0));
        assert!(ProjectionHead::init(&mut Rng::new(5), 0, 16, 8).is_err());
    }

    #[test]
    fn forward_is_positively_homogeneous_in_w2() {
        let mut rng = Rng::new(11);
        let h = ProjectionHead::init(&mut rng, 6, 5, 3).unwrap();
        let input: Vec<f64> = (0..6).map(|_| rng.normal()).collect();
        let x = h.embed(&input).unwrap();
        let mut scaled = h.clone();
        scaled.w2.scale(4.0);
        let xs = scaled.embed(&input).unwrap();
        for (a, b) in x.iter().zip(&xs) {
            assert_eq!(4.0 * a, *b);
        }
    }

    #[test]
    fn backward_accumulation_is_linear() {
        let mut rng = Rng::new(12);
        let mut h1 = ProjectionHead::init(&mut rng, 5, 4, 3).unwrap();
        let mut h2 = h1.clone();
        let input: Vec<f64> = (0..5).map(|_| rng.normal()).collect();
        let g1: Vec<f64> = (0..3).map(|_| rng.normal()).collect();
        let g2: Vec<f64> = (0..3).map(|_| rng.normal()).collect();
        let (_, tape) = h1.forward(&input).unwrap();
        h1.backward(&tape, &g1).unwrap();
        h1.backward(&tape, &g2).unwrap();
        let sum: Vec<f64> = g1.iter().zip(&g2).map(|(a, b)| a + b).collect();
        h2.backward(&tape, &sum).unwrap();
        for (a, b) in h1.grad_w1.as_slice().iter().zip(h2.grad_w1.as_slice()) {
            assert!((a - b).abs() <= 1e-14 * (1.0 + a.abs()));
        }
        for (a, b) in h1.grad_w2.as_slice().iter().zip(h2.grad_w2.as_slice()) {
            assert!((a - b).abs() <= 1e-14 * (1.0 + a.abs()));
        }
    }

    /// Central differences of `L(x) = ‖x − t‖` against the analytic gradients.
    #[test]
    fn backward_matches_finite_differences() {
        let step = 1e-5;
        let mut rng = Rng::new(13);
        for _ in 0..20 {
            let mut h = ProjectionHead::init(&mut rng, 6, 5, 4).unwrap();
            let input: Vec<f64> = (0..6).map(|_| rng.normal()).collect();
            let target: Vec<f64> = (0..4).map(|_| rng.normal()).collect();
            let loss = |h: &ProjectionHead, input: &[f64]| {
                crate::numerics::euclid(&h.embed(input).unwrap(), &target).unwrap()
            };
            let (x, tape) = h.forward(&input).unwrap();
            if tape.pre_activation.iter().any(|a| a.abs() < 1e-3) {
                continue;
            }
            let (_, g) = euclid_with_grad(&x, &target).unwrap();
            let d_input = h.backward(&tape, &g).unwrap();

            let check = |analytic: f64, numeric: f64| {
                let scale = analytic.abs().max(numeric.abs());
                if scale < 1e-4 {
                    assert!((analytic - numeric).abs() <= 1e-7);
                } else {
                    assert!((analytic - numeric).abs() / scale <= 1e-4, "{analytic} vs {numeric}");
                }
            };
            for i in 0..h.w1.as_slice().len() {
                let mut p = h.clone();
                p.w1.as_mut_slice()[i] += step;
                let mut m = h.clone();
                m.w1.as_mut_slice()[i] -= step;
                check(h.grad_w1.as_slice()[i], (loss(&p, &input) - loss(&m, &input)) / (2.0 * step));
            }
            for i in 0..h.w2.as_slice().len() {
                let mut p = h.clone();
                p.w2.as_mut_slice()[i] += step;
                let mut m = h.clone();
                m.w2.as_mut_slice()[i] -= step;
                check(h.grad_w2.as_slice()[i], (loss(&p, &input) - loss(&m, &input)) / (2.0 * step));
            }
            for i in 0..input.len() {
                let mut ip = input.clone();
                ip[i] += step;
                let mut im = input.clone();
                im[i] -= step;
                check(d_input[i], (loss(&h, &ip) - loss(&h, &im)) / (2.0 * step));
            }
        }
    }
}
