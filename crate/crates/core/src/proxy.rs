//! Learnable class proxies and the proxy-based proposal alignment losses.
//!
//! For an embedding `x` of class `c` with distances `d_k = ‖x − p_k‖`:
//!
//! ```text
//! as_written:   L = d_c + log Σ_{k≠c} exp(−d_k)
//! softmax_all:  L = d_c + log Σ_k   exp(−d_k)
//! ```
//!
//! The first form excludes the positive class from the denominator and is not
//! bounded below. The second is the usual proxy-NCA form and is always ≥ 0.
//! Only labeled embeddings contribute gradient to the proxies themselves.

use serde::{Deserialize, Serialize};

use crate::error::{check_dim, Error, Result};
use crate::numerics::{axpy, euclid_with_grad, log_sum_exp, Rng};
use crate::scorer::PseudoLabel;

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ProxyLossForm {
    #[default]
    AsWritten,
    SoftmaxAll,
}

impl std::str::FromStr for ProxyLossForm {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "as_written" => Ok(Self::AsWritten),
            "softmax_all" => Ok(Self::SoftmaxAll),
            other => Err(Error::Config(format!(
                "proxy_loss_form must be `as_written` or `softmax_all`, got `{other}`"
            ))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProxySet {
    pub proxies: Vec<Vec<f64>>,
    pub grads: Vec<Vec<f64>>,
    /// Proxies with a cleared flag are skipped by the optimizer.
    pub trainable: Vec<bool>,
}

struct ProxyTerms {
    loss: f64,
    /// dL/dd_k per class.
    coeffs: Vec<f64>,
    /// (x − p_k) / d_k per class.
    dirs: Vec<Vec<f64>>,
}

impl ProxySet {
    /// Standard normal entries scaled by 0.1.
    pub fn init(rng: &mut Rng, num_classes: usize, dim: usize) -> Result<Self> {
        if num_classes < 2 {
            return Err(Error::InvalidArgument(format!(
                "proxy set needs at least 2 classes, got {num_classes}"
            )));
        }
        let proxies = (0..num_classes)
            .map(|_| (0..dim).map(|_| 0.1 * rng.normal()).collect())
            .collect();
        Self::from_proxies(proxies)
    }

    pub fn from_proxies(proxies: Vec<Vec<f64>>) -> Result<Self> {
        let dim = proxies.first().map_or(0, Vec::len);
        for p in &proxies {
            check_dim("ProxySet::from_proxies", dim, p.len())?;
        }
        Ok(Self {
            grads: vec![vec![0.0; dim]; proxies.len()],
            trainable: vec![true; proxies.len()],
            proxies,
        })
    }

    pub fn num_classes(&self) -> usize {
        self.proxies.len()
    }

    pub fn dim(&self) -> usize {
        self.proxies.first().map_or(0, Vec::len)
    }

    fn terms(&self, x: &[f64], class: usize, form: ProxyLossForm) -> Result<ProxyTerms> {
        let n = self.num_classes();
        if n < 2 {
            return Err(Error::InvalidArgument(
                "proxy loss needs at least 2 classes".into(),
            ));
        }
        if class >= n {
            return Err(Error::InvalidArgument(format!(
                "class {class} out of range for C={n}"
            )));
        }
        let mut dists = Vec::with_capacity(n);
        let mut dirs = Vec::with_capacity(n);
        for p in &self.proxies {
            let (d, g) = euclid_with_grad(x, p)?;
            dists.push(d);
            dirs.push(g);
        }
        let in_denominator = |k: usize| form == ProxyLossForm::SoftmaxAll || k != class;
        let neg: Vec<f64> = (0..n).filter(|&k| in_denominator(k)).map(|k| -dists[k]).collect();
        let lse = log_sum_exp(&neg);
        let loss = dists[class] + lse;
        let coeffs = (0..n)
            .map(|k| {
                let pos = if k == class { 1.0 } else { 0.0 };
                let w = if in_denominator(k) { (-dists[k] - lse).exp() } else { 0.0 };
                pos - w
            })
            .collect();
        Ok(ProxyTerms { loss, coeffs, dirs })
    }

    /// Loss value only; nothing is accumulated.
    pub fn loss_value(&self, x: &[f64], class: usize, form: ProxyLossForm) -> Result<f64> {
        Ok(self.terms(x, class, form)?.loss)
    }

    /// Loss for a labeled embedding. Accumulates `scale ·` the proxy gradients
    /// and returns `(loss, dL/dx)` unscaled.
    pub fn loss_labeled(
        &mut self,
        x: &[f64],
        class: usize,
        form: ProxyLossForm,
        scale: f64,
    ) -> Result<(f64, Vec<f64>)> {
        let t = self.terms(x, class, form)?;
        let mut dx = vec![0.0; x.len()];
        for (k, (coeff, dir)) in t.coeffs.iter().zip(&t.dirs).enumerate() {
            axpy(*coeff, dir, &mut dx);
            axpy(-scale * coeff, dir, &mut self.grads[k]);
        }
        Ok((t.loss, dx))
    }

    /// Loss for a pseudo-labeled embedding; same value as the labeled loss, but
    /// the proxies receive no gradient. Returns `(loss, dL/dx)`.
    pub fn loss_unlabeled(
        &self,
        x: &[f64],
        label: &PseudoLabel,
        form: ProxyLossForm,
    ) -> Result<(f64, Vec<f64>)> {
        let class = label.class_id.ok_or_else(|| {
            Error::InvalidArgument("unlabeled proxy loss called with a rejected pseudo label".into())
        })?;
        let t = self.terms(x, class, form)?;
        let mut dx = vec![0.0; x.len()];
        for (coeff, dir) in t.coeffs.iter().zip(&t.dirs) {
            axpy(*coeff, dir, &mut dx);
        }
        Ok((t.loss, dx))
    }

    pub fn zero_grad(&mut self) {
        for g in &mut self.grads {
            g.iter_mut().for_each(|v| *v = 0.0);
        }
    }

    pub fn is_finite(&self) -> bool {
        self.proxies.iter().flatten().all(|v| v.is_finite())
    }
}
