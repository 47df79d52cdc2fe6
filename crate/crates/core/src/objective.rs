//! The weighted training objective
//!
//! ```text
//! total = L_s + λ · (L_pml + L_pml' + L_pmb + L_pmb')
//! ```
//!
//! evaluated on one batch with all gradients accumulated into the model.
//!
//! Order of evaluation: scorer confidences and pseudo labels, projection of
//! every proposal, surrogate cross-entropy on labeled proposals, proxy losses,
//! per-batch prototypes and their bank alignment, then backpropagation. The
//! confidences `q_i` weighting the confidence-guided prototypes stay on the
//! graph, so prototype losses also reach the scorer through them. The
//! threshold decisions themselves are piecewise constant.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::{axpy, Rng};
use crate::projection::{ForwardTape, ProjectionHead};
use crate::prototype::{
    backprop_cg, loss_pmb, prototypes_cg, prototypes_gg, MeanPrototypes, Member, PrototypeSet,
};
use crate::proxy::{ProxyLossForm, ProxySet};
use crate::scorer::{pseudo_label, PseudoLabel, Scorer};

/// All trainable parameters.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Model {
    pub head: ProjectionHead,
    pub scorer: Scorer,
    pub proxies: ProxySet,
}

impl Model {
    /// Initializes each parameter group from its own stream derived from `rng`.
    pub fn init(rng: &Rng, num_classes: usize, d_in: usize, d_hidden: usize, d_out: usize) -> Result<Self> {
        Ok(Self {
            head: ProjectionHead::init(&mut rng.fork(1), d_in, d_hidden, d_out)?,
            scorer: Scorer::init(&mut rng.fork(2), num_classes, d_in)?,
            proxies: ProxySet::init(&mut rng.fork(3), num_classes, d_out)?,
        })
    }

    pub fn num_classes(&self) -> usize {
        self.proxies.num_classes()
    }

    pub fn zero_grad(&mut self) {
        self.head.zero_grad();
        self.scorer.zero_grad();
        self.proxies.zero_grad();
    }

    pub fn is_finite(&self) -> bool {
        self.head.is_finite() && self.scorer.is_finite() && self.proxies.is_finite()
    }

    /// Flattened parameter values in a fixed order: W1, W2, scorer W, scorer b, proxies.
    pub fn parameters(&self) -> Vec<f64> {
        let mut out = Vec::new();
        out.extend_from_slice(self.head.w1.as_slice());
        out.extend_from_slice(self.head.w2.as_slice());
        out.extend_from_slice(self.scorer.w.as_slice());
        out.extend_from_slice(&self.scorer.b);
        out.extend(self.proxies.proxies.iter().flatten());
        out
    }

    /// Flattened gradients, same order as [`Model::parameters`].
    pub fn gradients(&self) -> Vec<f64> {
        let mut out = Vec::new();
        out.extend_from_slice(self.head.grad_w1.as_slice());
        out.extend_from_slice(self.head.grad_w2.as_slice());
        out.extend_from_slice(self.scorer.grad_w.as_slice());
        out.extend_from_slice(&self.scorer.grad_b);
        out.extend(self.proxies.grads.iter().flatten());
        out
    }

    /// Mutable access to the `i`-th flattened parameter.
    pub fn parameter_mut(&mut self, mut i: usize) -> &mut f64 {
        let w1 = self.head.w1.as_slice().len();
        if i < w1 {
            return &mut self.head.w1.as_mut_slice()[i];
        }
        i -= w1;
        let w2 = self.head.w2.as_slice().len();
        if i < w2 {
            return &mut self.head.w2.as_mut_slice()[i];
        }
        i -= w2;
        let sw = self.scorer.w.as_slice().len();
        if i < sw {
            return &mut self.scorer.w.as_mut_slice()[i];
        }
        i -= sw;
        if i < self.scorer.b.len() {
            return &mut self.scorer.b[i];
        }
        i -= self.scorer.b.len();
        let d = self.proxies.dim();
        &mut self.proxies.proxies[i / d][i % d]
    }
}

/// One training batch. Unlabeled proposals carry features only.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Batch {
    pub labeled: Vec<(Vec<f64>, usize)>,
    pub unlabeled: Vec<Vec<f64>>,
}

/// Which loss families enter the objective.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Terms {
    pub supervised: bool,
    pub proxy_labeled: bool,
    pub proxy_unlabeled: bool,
    pub pmb_labeled: bool,
    pub pmb_unlabeled: bool,
    /// When false, the proxy losses fit the proxies but send no gradient into
    /// the embeddings.
    pub proxy_embedding_grad: bool,
}

impl Terms {
    pub const ALL: Terms = Terms {
        supervised: true,
        proxy_labeled: true,
        proxy_unlabeled: true,
        pmb_labeled: true,
        pmb_unlabeled: true,
        proxy_embedding_grad: true,
    };

    pub const SUPERVISED_ONLY: Terms = Terms {
        supervised: true,
        proxy_labeled: false,
        proxy_unlabeled: false,
        pmb_labeled: false,
        pmb_unlabeled: false,
        proxy_embedding_grad: false,
    };

    fn any_alignment(&self) -> bool {
        self.proxy_labeled || self.proxy_unlabeled || self.pmb_labeled || self.pmb_unlabeled
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ObjectiveSettings {
    pub lambda: f64,
    pub tau: f64,
    pub margin: f64,
    pub form: ProxyLossForm,
    pub terms: Terms,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub supervised: f64,
    pub proxy_labeled: f64,
    pub proxy_unlabeled: f64,
    pub pmb_labeled: f64,
    pub pmb_unlabeled: f64,
    pub total: f64,
}

/// Runtime audit counters; both must stay zero.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Audit {
    /// Steps on which an unlabeled-data loss changed a proxy gradient.
    pub proxy_grad_violations: u64,
    /// Rejected (below-threshold) pseudo labels that reached a loss.
    pub rejected_consumed: u64,
}

impl Audit {
    pub fn absorb(&mut self, other: &Audit) {
        self.proxy_grad_violations += other.proxy_grad_violations;
        self.rejected_consumed += other.rejected_consumed;
    }
}

/// Piecewise-constant decisions taken during one evaluation. Finite
/// differences are only meaningful when this is unchanged by the perturbation.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct DecisionTrace {
    pub relu_masks: Vec<Vec<bool>>,
    pub pseudo_labels: Vec<Option<usize>>,
    pub active_hinges: Vec<Vec<(usize, usize)>>,
}

#[derive(Debug, Clone)]
pub struct StepOutcome {
    pub losses: LossBreakdown,
    pub accepted_pseudo_labels: usize,
    pub classes_labeled: usize,
    pub classes_unlabeled: usize,
    /// Ground-truth-guided prototypes of the labeled half, for the memory bank.
    pub labeled_gg: PrototypeSet,
    pub pseudo_labels: Vec<PseudoLabel>,
    pub trace: DecisionTrace,
    pub audit: Audit,
}

fn scaled(v: &[f64], s: f64) -> Vec<f64> {
    v.iter().map(|x| x * s).collect()
}

fn one_hot_scaled(n: usize, at: usize, value: f64) -> Vec<f64> {
    let mut v = vec![0.0; n];
    v[at] = value;
    v
}

/// Evaluates the objective on `batch` and accumulates its gradients into
/// `model` (gradients are added; call [`Model::zero_grad`] first).
///
/// Bank means are constants. With `lambda == 0` the alignment terms are still
/// evaluated for reporting but contribute no gradient. Numeric failures are
/// reported as [`Error::NonFinite`] with `iteration` 0; callers fill in the step.
pub fn forward_backward(
    model: &mut Model,
    batch: &Batch,
    means: &MeanPrototypes,
    settings: &ObjectiveSettings,
) -> Result<StepOutcome> {
    let nl = batch.labeled.len();
    if nl == 0 {
        return Err(Error::InvalidArgument("batch has an empty labeled half".into()));
    }
    let num_classes = model.num_classes();
    let d_out = model.head.d_out();
    let terms = settings.terms;
    let lambda = settings.lambda;

    let q_labeled = batch
        .labeled
        .iter()
        .map(|(h, _)| model.scorer.score(h))
        .collect::<Result<Vec<_>>>()?;
    let q_unlabeled = batch
        .unlabeled
        .iter()
        .map(|h| model.scorer.score(h))
        .collect::<Result<Vec<_>>>()?;
    let underflow = batch.labeled.iter().zip(&q_labeled).any(|((_, c), q)| q.get(*c).is_some_and(|&v| v <= 0.0));
    if underflow || q_labeled.iter().chain(&q_unlabeled).flatten().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite {
            iteration: 0,
            message: "scorer confidences are non-finite or underflowed to zero".into(),
        });
    }
    let pseudo: Vec<PseudoLabel> = q_unlabeled.iter().map(|q| pseudo_label(q, settings.tau)).collect();

    let mut tapes_l: Vec<ForwardTape> = Vec::with_capacity(nl);
    for (h, c) in &batch.labeled {
        if *c >= num_classes {
            return Err(Error::InvalidArgument(format!("label {c} out of range for C={num_classes}")));
        }
        tapes_l.push(model.head.forward(h)?.1);
    }
    let tapes_u = batch
        .unlabeled
        .iter()
        .map(|h| Ok(model.head.forward(h)?.1))
        .collect::<Result<Vec<_>>>()?;

    let mut losses = LossBreakdown::default();
    let mut audit = Audit::default();
    let mut trace = DecisionTrace {
        relu_masks: tapes_l
            .iter()
            .chain(&tapes_u)
            .map(|t| t.pre_activation.iter().map(|&a| a > 0.0).collect())
            .collect(),
        pseudo_labels: pseudo.iter().map(|p| p.class_id).collect(),
        active_hinges: Vec::new(),
    };

    if terms.supervised {
        let inv = 1.0 / nl as f64;
        for (h, c) in &batch.labeled {
            losses.supervised += model.scorer.ce_loss_and_grad(h, *c, inv)?.0;
        }
        losses.supervised *= inv;
    }

    let labeled_members: Vec<Member<'_>> = batch
        .labeled
        .iter()
        .zip(&tapes_l)
        .map(|((_, c), t)| Member {
            embedding: &t.output,
            class: *c,
            weight: 1.0,
        })
        .collect();
    let labeled_gg = prototypes_gg(&labeled_members, num_classes, d_out)?;

    let accepted: Vec<usize> = (0..pseudo.len()).filter(|&j| pseudo[j].is_accepted()).collect();
    let mut outcome = StepOutcome {
        losses,
        accepted_pseudo_labels: accepted.len(),
        classes_labeled: labeled_gg.present_count(),
        classes_unlabeled: 0,
        labeled_gg,
        pseudo_labels: pseudo.clone(),
        trace: DecisionTrace::default(),
        audit,
    };
    if !terms.any_alignment() {
        outcome.losses.total = outcome.losses.supervised;
        outcome.trace = trace;
        return Ok(outcome);
    }

    let backprop = lambda != 0.0;
    let mut dx_l = vec![vec![0.0; d_out]; nl];
    let mut dx_u = vec![vec![0.0; d_out]; batch.unlabeled.len()];
    let mut dq_l = vec![0.0; nl];
    let mut dq_u = vec![0.0; batch.unlabeled.len()];

    if terms.proxy_labeled {
        let inv = 1.0 / nl as f64;
        let proxy_scale = if backprop { lambda * inv } else { 0.0 };
        for (i, ((_, c), t)) in batch.labeled.iter().zip(&tapes_l).enumerate() {
            let (loss, dx) = if backprop {
                model.proxies.loss_labeled(&t.output, *c, settings.form, proxy_scale)?
            } else {
                (model.proxies.loss_value(&t.output, *c, settings.form)?, Vec::new())
            };
            losses.proxy_labeled += loss;
            if backprop && terms.proxy_embedding_grad {
                axpy(inv, &dx, &mut dx_l[i]);
            }
        }
        losses.proxy_labeled *= inv;
    }

    // Everything below uses unlabeled data or prototypes only; proxy gradients
    // must come out of it bitwise unchanged.
    let proxy_grads_after_labeled = model.proxies.grads.clone();

    let consume = |j: usize, audit: &mut Audit| -> usize {
        let p = &pseudo[j];
        if !(p.confidence >= settings.tau) {
            audit.rejected_consumed += 1;
        }
        p.class_id.expect("only accepted pseudo labels are consumed")
    };

    if terms.proxy_unlabeled && !accepted.is_empty() {
        let inv = 1.0 / accepted.len() as f64;
        for &j in &accepted {
            consume(j, &mut audit);
            let (loss, dx) = model.proxies.loss_unlabeled(&tapes_u[j].output, &pseudo[j], settings.form)?;
            losses.proxy_unlabeled += loss;
            if terms.proxy_embedding_grad {
                axpy(inv, &dx, &mut dx_u[j]);
            }
        }
        losses.proxy_unlabeled *= inv;
    }

    if terms.pmb_labeled {
        let members: Vec<Member<'_>> = batch
            .labeled
            .iter()
            .zip(&tapes_l)
            .zip(&q_labeled)
            .map(|(((_, c), t), q)| Member {
                embedding: &t.output,
                class: *c,
                weight: q[*c],
            })
            .collect();
        let set = prototypes_cg(&members, num_classes, d_out)?;
        let pmb = loss_pmb(means, &set, settings.margin)?;
        losses.pmb_labeled = pmb.value;
        for (i, (dx, dq)) in backprop_cg(&members, &set, &pmb.grad).into_iter().enumerate() {
            axpy(1.0, &dx, &mut dx_l[i]);
            dq_l[i] += dq;
        }
        trace.active_hinges.push(pmb.active_bank);
        trace.active_hinges.push(pmb.active_self);
    }

    if terms.pmb_unlabeled {
        let mut members = Vec::with_capacity(accepted.len());
        for &j in &accepted {
            let class = consume(j, &mut audit);
            members.push(Member {
                embedding: &tapes_u[j].output,
                class,
                weight: pseudo[j].confidence,
            });
        }
        let set = prototypes_cg(&members, num_classes, d_out)?;
        outcome.classes_unlabeled = set.present_count();
        let pmb = loss_pmb(means, &set, settings.margin)?;
        losses.pmb_unlabeled = pmb.value;
        for (k, (dx, dq)) in backprop_cg(&members, &set, &pmb.grad).into_iter().enumerate() {
            let j = accepted[k];
            axpy(1.0, &dx, &mut dx_u[j]);
            dq_u[j] += dq;
        }
        trace.active_hinges.push(pmb.active_bank);
        trace.active_hinges.push(pmb.active_self);
    } else {
        let members: Vec<Member<'_>> = accepted
            .iter()
            .map(|&j| Member {
                embedding: &tapes_u[j].output,
                class: pseudo[j].class_id.expect("accepted"),
                weight: pseudo[j].confidence,
            })
            .collect();
        outcome.classes_unlabeled = prototypes_gg(&members, num_classes, d_out)?.present_count();
    }

    if backprop {
        for (i, tape) in tapes_l.iter().enumerate() {
            model.head.backward(tape, &scaled(&dx_l[i], lambda))?;
            if dq_l[i] != 0.0 {
                let c = batch.labeled[i].1;
                let d_q = one_hot_scaled(num_classes, c, dq_l[i]);
                model.scorer.backward_probs(&batch.labeled[i].0, &q_labeled[i], &d_q, lambda)?;
            }
        }
        for (j, tape) in tapes_u.iter().enumerate() {
            model.head.backward(tape, &scaled(&dx_u[j], lambda))?;
            if dq_u[j] != 0.0 {
                let c = pseudo[j].class_id.expect("only accepted proposals get confidence gradients");
                let d_q = one_hot_scaled(num_classes, c, dq_u[j]);
                model.scorer.backward_probs(&batch.unlabeled[j], &q_unlabeled[j], &d_q, lambda)?;
            }
        }
    }

    let unchanged = proxy_grads_after_labeled
        .iter()
        .flatten()
        .zip(model.proxies.grads.iter().flatten())
        .all(|(a, b)| a.to_bits() == b.to_bits());
    if !unchanged {
        audit.proxy_grad_violations += 1;
    }

    losses.total = losses.supervised
        + lambda * (losses.proxy_labeled + losses.proxy_unlabeled + losses.pmb_labeled + losses.pmb_unlabeled);
    outcome.losses = losses;
    outcome.trace = trace;
    outcome.audit = audit;
    Ok(outcome)
}
