//! Training loop: equal labeled/unlabeled batch sampling, ramped weighting of
//! the alignment losses, SGD with classical momentum and step decay, and the
//! memory-bank update after each step.

use serde::{Deserialize, Serialize};

use crate::error::{check_dim, Error, Result};
use crate::numerics::{Mat, Rng};
use crate::objective::{forward_backward, Audit, Batch, Model, ObjectiveSettings, StepOutcome, Terms};
use crate::prototype::MemoryBank;
use crate::proxy::ProxyLossForm;
use crate::synthgen::TrainingData;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub seed: u64,
    pub num_classes: usize,
    pub d_in: usize,
    pub d_hidden: usize,
    pub d_out: usize,
    pub tau: f64,
    pub margin: f64,
    pub bank_capacity: usize,
    /// Total proposals per step, split evenly between labeled and unlabeled.
    pub batch_size: usize,
    pub lr_main: f64,
    pub lr_proxy: f64,
    pub momentum: f64,
    pub lr_decay_factor: f64,
    pub lr_decay_every: u64,
    pub lambda_max: f64,
    pub ramp_length: u64,
    pub total_iters: u64,
    pub proxy_loss_form: ProxyLossForm,
    /// Proxy alignment of proposal embeddings. When off, proxies are still
    /// fitted to labeled embeddings as the readout, without shaping them.
    pub proposal_alignment: bool,
    /// Memory-bank prototype alignment.
    pub prototype_alignment: bool,
    /// Train the surrogate scorer only; no alignment terms are evaluated.
    pub supervised_only: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            num_classes: 4,
            d_in: 32,
            d_hidden: 16,
            d_out: 8,
            tau: 0.5,
            margin: 1.0,
            bank_capacity: 1024,
            batch_size: 8,
            lr_main: 0.005,
            lr_proxy: 0.01,
            momentum: 0.9,
            lr_decay_factor: 0.1,
            lr_decay_every: 800,
            lambda_max: 1.0,
            ramp_length: 500,
            total_iters: 2000,
            proxy_loss_form: ProxyLossForm::AsWritten,
            proposal_alignment: true,
            prototype_alignment: true,
            supervised_only: false,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let fail = |m: String| Err(Error::Config(m));
        if self.num_classes < 2 {
            return fail(format!("num_classes must be >= 2, got {}", self.num_classes));
        }
        if self.d_in == 0 || self.d_hidden == 0 || self.d_out == 0 {
            return fail("all dimensions must be >= 1".into());
        }
        if !(self.tau > 0.0 && self.tau <= 1.0) {
            return fail(format!("tau must lie in (0, 1], got {}", self.tau));
        }
        if !(self.margin > 0.0) {
            return fail(format!("margin must be > 0, got {}", self.margin));
        }
        if !(self.lr_main > 0.0 && self.lr_proxy > 0.0) {
            return fail("learning rates must be > 0".into());
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return fail(format!("momentum must lie in [0, 1), got {}", self.momentum));
        }
        if !(self.lr_decay_factor > 0.0) {
            return fail("lr_decay_factor must be > 0".into());
        }
        if self.lr_decay_every == 0 || self.ramp_length == 0 {
            return fail("lr_decay_every and ramp_length must be >= 1".into());
        }
        if self.batch_size < 2 || !self.batch_size.is_multiple_of(2) {
            return fail(format!(
                "batch_size must be even and >= 2 (equal halves), got {}",
                self.batch_size
            ));
        }
        if !(self.lambda_max >= 0.0 && self.lambda_max.is_finite()) {
            return fail("lambda_max must be finite and >= 0".into());
        }
        if self.bank_capacity < self.num_classes {
            return fail("bank_capacity must be at least num_classes".into());
        }
        Ok(())
    }

    pub fn terms(&self) -> Terms {
        if self.supervised_only {
            return Terms::SUPERVISED_ONLY;
        }
        Terms {
            supervised: true,
            proxy_labeled: true,
            proxy_unlabeled: self.proposal_alignment,
            pmb_labeled: self.prototype_alignment,
            pmb_unlabeled: self.prototype_alignment,
            proxy_embedding_grad: self.proposal_alignment,
        }
    }
}

/// `λ(t) = λ_max · exp(−5 · (1 − min(t, T)/T)²)`
pub fn lambda_ramp(t: u64, lambda_max: f64, ramp_length: u64) -> f64 {
    if t >= ramp_length {
        return lambda_max;
    }
    let phase = 1.0 - t as f64 / ramp_length as f64;
    lambda_max * (-5.0 * phase * phase).exp()
}

/// `lr0 · factor^floor(t / every)`
pub fn lr_schedule(t: u64, lr0: f64, factor: f64, every: u64) -> f64 {
    lr0 * factor.powi((t / every) as i32)
}

/// Heavy-ball momentum: `v ← μ·v + g; p ← p − lr·v`.
pub fn sgd_update(params: &mut [f64], grads: &[f64], velocity: &mut [f64], lr: f64, momentum: f64) -> Result<()> {
    check_dim("sgd_update grads", params.len(), grads.len())?;
    check_dim("sgd_update velocity", params.len(), velocity.len())?;
    for ((p, g), v) in params.iter_mut().zip(grads).zip(velocity.iter_mut()) {
        *v = momentum * *v + g;
        *p -= lr * *v;
    }
    Ok(())
}

/// Velocity buffers, one per parameter tensor.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OptimizerState {
    pub head_w1: Mat,
    pub head_w2: Mat,
    pub scorer_w: Mat,
    pub scorer_b: Vec<f64>,
    pub proxies: Vec<Vec<f64>>,
}

impl OptimizerState {
    pub fn zeros_like(model: &Model) -> Self {
        Self {
            head_w1: Mat::zeros(model.head.w1.rows(), model.head.w1.cols()),
            head_w2: Mat::zeros(model.head.w2.rows(), model.head.w2.cols()),
            scorer_w: Mat::zeros(model.scorer.w.rows(), model.scorer.w.cols()),
            scorer_b: vec![0.0; model.scorer.b.len()],
            proxies: vec![vec![0.0; model.proxies.dim()]; model.num_classes()],
        }
    }

    pub fn matches(&self, model: &Model) -> bool {
        self.head_w1.same_shape(&model.head.w1)
            && self.head_w2.same_shape(&model.head.w2)
            && self.scorer_w.same_shape(&model.scorer.w)
            && self.scorer_b.len() == model.scorer.b.len()
            && self.proxies.len() == model.num_classes()
            && self.proxies.iter().all(|v| v.len() == model.proxies.dim())
    }

    /// One update of every parameter group from the accumulated gradients.
    pub fn step(&mut self, model: &mut Model, lr_main: f64, lr_proxy: f64, momentum: f64) -> Result<()> {
        let head = &mut model.head;
        sgd_update(head.w1.as_mut_slice(), head.grad_w1.as_slice(), self.head_w1.as_mut_slice(), lr_main, momentum)?;
        sgd_update(head.w2.as_mut_slice(), head.grad_w2.as_slice(), self.head_w2.as_mut_slice(), lr_main, momentum)?;
        let scorer = &mut model.scorer;
        sgd_update(scorer.w.as_mut_slice(), scorer.grad_w.as_slice(), self.scorer_w.as_mut_slice(), lr_main, momentum)?;
        sgd_update(&mut scorer.b, &scorer.grad_b, &mut self.scorer_b, lr_main, momentum)?;
        let proxies = &mut model.proxies;
        for (k, velocity) in self.proxies.iter_mut().enumerate() {
            if proxies.trainable[k] {
                sgd_update(&mut proxies.proxies[k], &proxies.grads[k], velocity, lr_proxy, momentum)?;
            }
        }
        Ok(())
    }
}

/// One line of the metrics stream.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IterationReport {
    pub iteration: u64,
    pub lambda: f64,
    pub lr_main: f64,
    pub lr_proxy: f64,
    pub loss_supervised: f64,
    pub loss_proxy_labeled: f64,
    pub loss_proxy_unlabeled: f64,
    pub loss_pmb_labeled: f64,
    pub loss_pmb_unlabeled: f64,
    pub loss_total: f64,
    pub accepted_pseudo_labels: usize,
    pub unlabeled_in_batch: usize,
    pub classes_labeled: usize,
    pub classes_unlabeled: usize,
}

impl IterationReport {
    /// Recomputes the weighted total from the components.
    pub fn recomputed_total(&self) -> f64 {
        self.loss_supervised
            + self.lambda
                * (self.loss_proxy_labeled + self.loss_proxy_unlabeled + self.loss_pmb_labeled + self.loss_pmb_unlabeled)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Trainer {
    pub config: TrainConfig,
    pub model: Model,
    pub optimizer: OptimizerState,
    pub bank: MemoryBank,
    /// Batch sampling stream.
    pub rng: Rng,
    pub iteration: u64,
    pub audit: Audit,
}

impl Trainer {
    pub fn new(config: TrainConfig) -> Result<Self> {
        config.validate()?;
        let root = Rng::new(config.seed);
        let model = Model::init(&root, config.num_classes, config.d_in, config.d_hidden, config.d_out)?;
        Ok(Self {
            optimizer: OptimizerState::zeros_like(&model),
            bank: MemoryBank::new(config.num_classes, config.d_out, config.bank_capacity)?,
            rng: root.fork(4),
            iteration: 0,
            audit: Audit::default(),
            model,
            config,
        })
    }

    pub fn is_done(&self) -> bool {
        self.iteration >= self.config.total_iters
    }

    /// Draws `batch_size / 2` labeled and `batch_size / 2` unlabeled proposals
    /// uniformly with replacement.
    pub fn sample_batch(&mut self, data: &TrainingData) -> Result<Batch> {
        if data.labeled.is_empty() {
            return Err(Error::InvalidArgument("training data has no labeled samples".into()));
        }
        check_dim("training data d_in", self.config.d_in, data.d_in)?;
        let half = self.config.batch_size / 2;
        let labeled = (0..half)
            .map(|_| data.labeled[self.rng.below(data.labeled.len())].clone())
            .collect();
        let unlabeled = if data.unlabeled.is_empty() {
            Vec::new()
        } else {
            (0..half)
                .map(|_| data.unlabeled[self.rng.below(data.unlabeled.len())].clone())
                .collect()
        };
        Ok(Batch { labeled, unlabeled })
    }

    pub fn settings(&self, t: u64) -> ObjectiveSettings {
        ObjectiveSettings {
            lambda: lambda_ramp(t, self.config.lambda_max, self.config.ramp_length),
            tau: self.config.tau,
            margin: self.config.margin,
            form: self.config.proxy_loss_form,
            terms: self.config.terms(),
        }
    }

    /// Objective, update and bank push for one batch.
    pub fn train_step(&mut self, batch: &Batch) -> Result<IterationReport> {
        let t = self.iteration;
        let settings = self.settings(t);
        let means = self.bank.mean_prototypes();
        self.model.zero_grad();
        let outcome: StepOutcome = forward_backward(&mut self.model, batch, &means, &settings).map_err(|e| match e {
            Error::NonFinite { message, .. } => Error::NonFinite { iteration: t, message },
            other => other,
        })?;
        if !outcome.losses.total.is_finite() {
            return Err(Error::NonFinite {
                iteration: t,
                message: format!("loss is not finite: {:?}", outcome.losses),
            });
        }
        let c = &self.config;
        let lr_main = lr_schedule(t, c.lr_main, c.lr_decay_factor, c.lr_decay_every);
        let lr_proxy = lr_schedule(t, c.lr_proxy, c.lr_decay_factor, c.lr_decay_every);
        self.optimizer.step(&mut self.model, lr_main, lr_proxy, c.momentum)?;
        if !self.model.is_finite() {
            return Err(Error::NonFinite {
                iteration: t,
                message: "parameters became non-finite after the update".into(),
            });
        }
        self.bank.push(&outcome.labeled_gg)?;
        self.audit.absorb(&outcome.audit);
        self.iteration += 1;
        let l = outcome.losses;
        Ok(IterationReport {
            iteration: t,
            lambda: settings.lambda,
            lr_main,
            lr_proxy,
            loss_supervised: l.supervised,
            loss_proxy_labeled: l.proxy_labeled,
            loss_proxy_unlabeled: l.proxy_unlabeled,
            loss_pmb_labeled: l.pmb_labeled,
            loss_pmb_unlabeled: l.pmb_unlabeled,
            loss_total: l.total,
            accepted_pseudo_labels: outcome.accepted_pseudo_labels,
            unlabeled_in_batch: batch.unlabeled.len(),
            classes_labeled: outcome.classes_labeled,
            classes_unlabeled: outcome.classes_unlabeled,
        })
    }

    /// Samples and trains one step.
    pub fn step(&mut self, data: &TrainingData) -> Result<IterationReport> {
        let batch = self.sample_batch(data)?;
        self.train_step(&batch)
    }

    /// Trains until `total_iters`, handing each report to `on_report`.
    pub fn run<F>(&mut self, data: &TrainingData, mut on_report: F) -> Result<()>
    where
        F: FnMut(&IterationReport) -> Result<()>,
    {
        while !self.is_done() {
            let report = self.step(data)?;
            on_report(&report)?;
        }
        Ok(())
    }
}
