//! Central-difference verification of every hand-derived gradient.
//!
//! Each trial draws a small random problem, computes the analytic gradient and
//! compares it coordinate by coordinate with `(L(θ+h) − L(θ−h)) / 2h`. Trials
//! whose piecewise decisions (relu masks, pseudo labels, active hinges) flip
//! under the perturbation are discarded and redrawn.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::Rng;
use crate::objective::{forward_backward, Batch, DecisionTrace, Model, ObjectiveSettings, Terms};
use crate::projection::ProjectionHead;
use crate::prototype::MeanPrototypes;
use crate::proxy::ProxyLossForm;

pub const STEP: f64 = 1e-5;
/// Coordinates whose gradient magnitude is below this are judged by absolute error.
pub const SMALL_GRAD: f64 = 1e-4;
pub const ABS_TOLERANCE: f64 = 1e-7;
const MAX_REDRAWS: usize = 200;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Family {
    Projection,
    ScorerCe,
    ProxyLabeled,
    ProxyUnlabeled,
    PmbLabeled,
    PmbUnlabeled,
    Composite,
}

impl Family {
    pub const ALL: [Family; 7] = [
        Family::Projection,
        Family::ScorerCe,
        Family::ProxyLabeled,
        Family::ProxyUnlabeled,
        Family::PmbLabeled,
        Family::PmbUnlabeled,
        Family::Composite,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Family::Projection => "projection",
            Family::ScorerCe => "scorer_ce",
            Family::ProxyLabeled => "proxy_labeled",
            Family::ProxyUnlabeled => "proxy_unlabeled",
            Family::PmbLabeled => "pmb_labeled",
            Family::PmbUnlabeled => "pmb_unlabeled",
            Family::Composite => "composite",
        }
    }

    fn terms(self) -> Terms {
        let none = Terms {
            supervised: false,
            proxy_labeled: false,
            proxy_unlabeled: false,
            pmb_labeled: false,
            pmb_unlabeled: false,
            proxy_embedding_grad: true,
        };
        match self {
            Family::Projection => none,
            Family::ScorerCe => Terms { supervised: true, ..none },
            Family::ProxyLabeled => Terms { proxy_labeled: true, ..none },
            Family::ProxyUnlabeled => Terms { proxy_unlabeled: true, ..none },
            Family::PmbLabeled => Terms { pmb_labeled: true, ..none },
            Family::PmbUnlabeled => Terms { pmb_unlabeled: true, ..none },
            Family::Composite => Terms::ALL,
        }
    }
}

impl fmt::Display for Family {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Family {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Family::ALL
            .into_iter()
            .find(|f| f.name() == s)
            .ok_or_else(|| Error::InvalidArgument(format!("unknown gradient family `{s}`")))
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GradcheckOptions {
    pub trials: usize,
    /// Relative-error tolerance.
    pub tolerance: f64,
    pub seed: u64,
    pub form: ProxyLossForm,
    pub margin: f64,
    /// Negative control: corrupt the analytic gradient of this family.
    pub inject_fault: Option<Family>,
}

impl Default for GradcheckOptions {
    fn default() -> Self {
        Self {
            trials: 50,
            tolerance: 1e-4,
            seed: 0,
            form: ProxyLossForm::AsWritten,
            margin: 1.0,
            inject_fault: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FamilyReport {
    pub family: Family,
    pub trials: usize,
    /// Trials redrawn because a decision flipped under perturbation.
    pub redrawn: usize,
    pub coordinates: usize,
    pub failed_coordinates: usize,
    pub max_relative_error: f64,
    pub max_absolute_error: f64,
    pub audit_violations: u64,
}

impl FamilyReport {
    pub fn passed(&self) -> bool {
        self.failed_coordinates == 0 && self.audit_violations == 0 && self.trials > 0
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GradcheckReport {
    pub tolerance: f64,
    pub families: Vec<FamilyReport>,
}

impl GradcheckReport {
    pub fn passed(&self) -> bool {
        self.families.iter().all(FamilyReport::passed)
    }
}

/// Relative error `|a − n| / max(|a|, |n|)`; zero when both are zero.
pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    let scale = analytic.abs().max(numeric.abs());
    if scale == 0.0 {
        0.0
    } else {
        (analytic - numeric).abs() / scale
    }
}

pub fn coordinate_passes(analytic: f64, numeric: f64, tolerance: f64) -> bool {
    relative_error(analytic, numeric) <= tolerance
        || (analytic.abs().max(numeric.abs()) < SMALL_GRAD && (analytic - numeric).abs() <= ABS_TOLERANCE)
}

#[derive(Default)]
struct Accumulator {
    coordinates: usize,
    failed: usize,
    max_rel: f64,
    max_abs: f64,
}

impl Accumulator {
    fn add(&mut self, analytic: f64, numeric: f64, tolerance: f64) {
        self.coordinates += 1;
        let rel = relative_error(analytic, numeric);
        let abs = (analytic - numeric).abs();
        if !coordinate_passes(analytic, numeric, tolerance) {
            self.failed += 1;
            self.max_rel = self.max_rel.max(rel);
        } else if analytic.abs().max(numeric.abs()) >= SMALL_GRAD {
            self.max_rel = self.max_rel.max(rel);
        }
        self.max_abs = self.max_abs.max(abs);
    }
}

fn random_vec(rng: &mut Rng, n: usize, scale: f64) -> Vec<f64> {
    (0..n).map(|_| scale * rng.normal()).collect()
}

/// A random objective instance sized so that every family has something to do.
struct Problem {
    model: Model,
    batch: Batch,
    means: MeanPrototypes,
    settings: ObjectiveSettings,
}

fn draw_problem(rng: &mut Rng, family: Family, opts: &GradcheckOptions) -> Result<Option<Problem>> {
    let c = 2 + rng.below(3);
    let d_in = 3 + rng.below(4);
    let d_h = 3 + rng.below(4);
    let d_out = 2 + rng.below(3);
    let nl = 2 + rng.below(5);
    let nu = 2 + rng.below(5);

    let tag = rng.next_u64();
    let mut model = Model::init(&rng.fork(tag), c, d_in, d_h, d_out)?;
    // Sharpen the scorer so some pseudo labels clear the threshold.
    model.scorer.w.scale(3.0);
    model.scorer.b = random_vec(rng, c, 0.5);
    model.proxies.proxies = (0..c).map(|_| random_vec(rng, d_out, 0.5)).collect();

    let batch = Batch {
        labeled: (0..nl)
            .map(|_| (random_vec(rng, d_in, 1.0), rng.below(c)))
            .collect(),
        unlabeled: (0..nu).map(|_| random_vec(rng, d_in, 1.0)).collect(),
    };

    // Threshold halfway between two observed confidences: at least one
    // proposal is accepted and at least one rejected.
    let mut conf = batch
        .unlabeled
        .iter()
        .map(|h| Ok(model.scorer.score(h)?.into_iter().fold(f64::MIN, f64::max)))
        .collect::<Result<Vec<f64>>>()?;
    conf.sort_by(f64::total_cmp);
    let cut = 1 + rng.below(nu - 1);
    if conf[cut] - conf[cut - 1] < 1e-3 {
        return Ok(None);
    }
    let tau = 0.5 * (conf[cut] + conf[cut - 1]);

    let means = MeanPrototypes {
        dim: d_out,
        entries: (0..c)
            .map(|k| (k == 0 || rng.uniform() < 0.7).then(|| random_vec(rng, d_out, 0.5)))
            .collect(),
    };
    let settings = ObjectiveSettings {
        lambda: rng.uniform_range(0.5, 2.0),
        tau,
        margin: opts.margin,
        form: opts.form,
        terms: family.terms(),
    };
    Ok(Some(Problem { model, batch, means, settings }))
}

fn evaluate(problem: &Problem, model: &mut Model, terms: Terms) -> Result<(f64, DecisionTrace)> {
    let settings = ObjectiveSettings { terms, ..problem.settings };
    let out = forward_backward(model, &problem.batch, &problem.means, &settings)?;
    Ok((out.losses.total, out.trace))
}

/// Checks the objective gradient for one drawn problem. Returns `None` when a
/// perturbation flips a decision.
fn check_objective(problem: &Problem, fault: bool, tol: f64, acc: &mut Accumulator) -> Result<Option<u64>> {
    let mut model = problem.model.clone();
    model.zero_grad();
    let terms = problem.settings.terms;
    let out = forward_backward(&mut model, &problem.batch, &problem.means, &problem.settings)?;
    let mut analytic = model.gradients();
    if fault {
        analytic.iter_mut().for_each(|g| *g *= 1.01);
    }
    let base_trace = out.trace;

    // Proxies are detached inside the unlabeled proxy term, so their reference
    // derivative excludes it.
    let proxy_start = analytic.len() - problem.model.proxies.num_classes() * problem.model.proxies.dim();
    let proxy_terms = Terms { proxy_unlabeled: false, ..terms };

    let mut pending = Vec::with_capacity(analytic.len());
    for (i, &a) in analytic.iter().enumerate() {
        let t = if i >= proxy_start { proxy_terms } else { terms };
        let mut plus = problem.model.clone();
        *plus.parameter_mut(i) += STEP;
        let (lp, tp) = evaluate(problem, &mut plus, t)?;
        let mut minus = problem.model.clone();
        *minus.parameter_mut(i) -= STEP;
        let (lm, tm) = evaluate(problem, &mut minus, t)?;
        if t == terms && (tp != base_trace || tm != base_trace) {
            return Ok(None);
        }
        pending.push((a, (lp - lm) / (2.0 * STEP)));
    }
    for (a, n) in pending {
        acc.add(a, n, tol);
    }
    Ok(Some(out.audit.proxy_grad_violations + out.audit.rejected_consumed))
}

/// Head-only check with `L = ½‖x − t‖²`, covering weights and the input.
fn check_projection(rng: &mut Rng, fault: bool, tol: f64, acc: &mut Accumulator) -> Result<bool> {
    let d_in = 2 + rng.below(5);
    let d_h = 2 + rng.below(5);
    let d_out = 2 + rng.below(4);
    let head = ProjectionHead::init(rng, d_in, d_h, d_out)?;
    let h = random_vec(rng, d_in, 1.0);
    let target = random_vec(rng, d_out, 1.0);

    let loss = |head: &ProjectionHead, h: &[f64]| -> Result<(f64, Vec<bool>)> {
        let (x, tape) = head.forward(h)?;
        let l = 0.5 * x.iter().zip(&target).map(|(a, b)| (a - b) * (a - b)).sum::<f64>();
        Ok((l, tape.pre_activation.iter().map(|&a| a > 0.0).collect()))
    };

    let mut analytic_head = head.clone();
    let (x, tape) = analytic_head.forward(&h)?;
    let d_x: Vec<f64> = x.iter().zip(&target).map(|(a, b)| a - b).collect();
    let d_h_in = analytic_head.backward(&tape, &d_x)?;
    let mask: Vec<bool> = tape.pre_activation.iter().map(|&a| a > 0.0).collect();

    let mut analytic: Vec<f64> = analytic_head.grad_w1.as_slice().to_vec();
    analytic.extend_from_slice(analytic_head.grad_w2.as_slice());
    analytic.extend_from_slice(&d_h_in);
    if fault {
        analytic.iter_mut().for_each(|g| *g *= 1.01);
    }

    let n1 = head.w1.as_slice().len();
    let n2 = head.w2.as_slice().len();
    let mut pending = Vec::with_capacity(analytic.len());
    for (i, &a) in analytic.iter().enumerate() {
        let perturbed = |delta: f64| -> Result<(f64, Vec<bool>)> {
            let mut hd = head.clone();
            let mut input = h.clone();
            if i < n1 {
                hd.w1.as_mut_slice()[i] += delta;
            } else if i < n1 + n2 {
                hd.w2.as_mut_slice()[i - n1] += delta;
            } else {
                input[i - n1 - n2] += delta;
            }
            loss(&hd, &input)
        };
        let (lp, mp) = perturbed(STEP)?;
        let (lm, mm) = perturbed(-STEP)?;
        if mp != mask || mm != mask {
            return Ok(false);
        }
        pending.push((a, (lp - lm) / (2.0 * STEP)));
    }
    for (a, n) in pending {
        acc.add(a, n, tol);
    }
    Ok(true)
}

fn check_family(family: Family, opts: &GradcheckOptions) -> Result<FamilyReport> {
    let mut rng = Rng::new(opts.seed).fork(family as u64 + 1);
    let fault = opts.inject_fault == Some(family);
    let mut acc = Accumulator::default();
    let mut redrawn = 0;
    let mut audit_violations = 0;
    let mut done = 0;
    while done < opts.trials {
        if redrawn > MAX_REDRAWS + opts.trials {
            return Err(Error::InvalidArgument(format!(
                "{family}: too many trials hit a non-differentiable point"
            )));
        }
        let ok = if family == Family::Projection {
            check_projection(&mut rng, fault, opts.tolerance, &mut acc)?
        } else {
            match draw_problem(&mut rng, family, opts)? {
                None => false,
                Some(problem) => match check_objective(&problem, fault, opts.tolerance, &mut acc)? {
                    None => false,
                    Some(v) => {
                        audit_violations += v;
                        true
                    }
                },
            }
        };
        if ok {
            done += 1;
        } else {
            redrawn += 1;
        }
    }
    Ok(FamilyReport {
        family,
        trials: done,
        redrawn,
        coordinates: acc.coordinates,
        failed_coordinates: acc.failed,
        max_relative_error: acc.max_rel,
        max_absolute_error: acc.max_abs,
        audit_violations,
    })
}

pub fn run(opts: &GradcheckOptions) -> Result<GradcheckReport> {
    if opts.trials == 0 || !(opts.tolerance > 0.0) {
        return Err(Error::InvalidArgument("trials and tolerance must be positive".into()));
    }
    let families = Family::ALL
        .into_iter()
        .map(|f| check_family(f, opts))
        .collect::<Result<Vec<_>>>()?;
    Ok(GradcheckReport {
        tolerance: opts.tolerance,
        families,
    })
}
