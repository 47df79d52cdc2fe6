use dualalign::config::RunConfig;
use dualalign::numerics::Rng;
use dualalign::objective::{forward_backward, Batch, Model, ObjectiveSettings, Terms};
use dualalign::prototype::MeanPrototypes;
use dualalign::proxy::ProxyLossForm;
use dualalign::synthgen::{generate, Split};
use dualalign::trainer::{IterationReport, Trainer};

fn small(seed: u64) -> RunConfig {
    let mut c = RunConfig::with_seed(seed);
    c.n_labeled = 200;
    c.n_unlabeled = 200;
    c.n_test = 100;
    c.n_distractors = 20;
    c.total_iters = 300;
    c
}

fn run(config: &RunConfig) -> (Trainer, Vec<IterationReport>) {
    let data = generate(&config.dataset_spec()).unwrap().training_data();
    let mut trainer = Trainer::new(config.train_config()).unwrap();
    let mut reports = Vec::new();
    trainer
        .run(&data, |r| {
            reports.push(r.clone());
            Ok(())
        })
        .unwrap();
    (trainer, reports)
}

#[test]
fn identical_configs_give_identical_runs() {
    let (a, ra) = run(&small(11));
    let (b, rb) = run(&small(11));
    assert_eq!(ra, rb);
    assert_eq!(a, b);
    let (_, rc) = run(&small(12));
    assert_ne!(ra, rc);
}

#[test]
fn zero_lambda_matches_supervised_only_bitwise() {
    let mut zero = small(4);
    zero.lambda_max = 0.0;
    let mut sup = small(4);
    sup.supervised_only = true;
    let (a, ra) = run(&zero);
    let (b, rb) = run(&sup);
    assert_eq!(a.model, b.model);
    assert_eq!(a.optimizer, b.optimizer);
    for (x, y) in ra.iter().zip(&rb) {
        assert_eq!(x.loss_supervised.to_bits(), y.loss_supervised.to_bits());
        assert_eq!(x.loss_total.to_bits(), y.loss_total.to_bits());
    }
}

#[test]
fn total_identity_and_audits_hold_every_step() {
    for form in [ProxyLossForm::AsWritten, ProxyLossForm::SoftmaxAll] {
        let mut c = small(9);
        c.proxy_loss_form = form;
        let (trainer, reports) = run(&c);
        for r in &reports {
            assert!((r.loss_total - r.recomputed_total()).abs() <= 1e-12, "{r:?}");
            assert!(r.accepted_pseudo_labels <= r.unlabeled_in_batch);
        }
        assert_eq!(trainer.audit.proxy_grad_violations, 0);
        assert_eq!(trainer.audit.rejected_consumed, 0);
    }
}

#[test]
fn unlabeled_losses_leave_proxy_velocities_untouched() {
    // From one state, a step with and without the unlabeled half must move
    // proxies and their velocities identically.
    let config = small(21);
    let data = generate(&config.dataset_spec()).unwrap().training_data();
    let mut base = Trainer::new(config.train_config()).unwrap();
    for _ in 0..50 {
        base.step(&data).unwrap();
    }
    let batch = base.clone().sample_batch(&data).unwrap();

    let mut with_unlabeled = base.clone();
    with_unlabeled.train_step(&batch).unwrap();
    let mut without = base.clone();
    let labeled_only = Batch {
        labeled: batch.labeled.clone(),
        unlabeled: Vec::new(),
    };
    without.train_step(&labeled_only).unwrap();
    assert_eq!(with_unlabeled.optimizer.proxies, without.optimizer.proxies);
    assert_eq!(with_unlabeled.model.proxies.proxies, without.model.proxies.proxies);
}

#[test]
fn hidden_labels_never_reach_training() {
    let config = small(5);
    let mut dataset = generate(&config.dataset_spec()).unwrap();
    let (a, _) = {
        let data = dataset.training_data();
        let mut t = Trainer::new(config.train_config()).unwrap();
        let mut out = Vec::new();
        t.run(&data, |r| {
            out.push(r.clone());
            Ok(())
        })
        .unwrap();
        (t, out)
    };
    // Scramble every hidden unlabeled class id.
    let mut rng = Rng::new(99);
    for s in dataset.samples.iter_mut().filter(|s| s.split == Split::Unlabeled) {
        s.true_class = Some(rng.below(config.num_classes));
    }
    let data = dataset.training_data();
    let mut b = Trainer::new(config.train_config()).unwrap();
    b.run(&data, |_| Ok(())).unwrap();
    assert_eq!(a, b);
}

#[test]
fn default_run_stays_finite() {
    let config = RunConfig::with_seed(0);
    let (trainer, reports) = run(&config);
    assert_eq!(reports.len(), 2000);
    assert!(trainer.model.is_finite());
    assert!(reports.iter().all(|r| r.loss_total.is_finite()));
}

fn finite_difference_check(model: &Model, batch: &Batch, means: &MeanPrototypes, settings: &ObjectiveSettings) {
    let h = 1e-5;
    let mut m = model.clone();
    m.zero_grad();
    let base = forward_backward(&mut m, batch, means, settings).unwrap();
    let analytic = m.gradients();
    let n_proxy = model.num_classes() * model.proxies.dim();
    let mut checked = 0;
    for (i, &a) in analytic.iter().enumerate() {
        let mut terms = settings.terms;
        if i >= analytic.len() - n_proxy {
            // Proxies are detached in the unlabeled proxy term.
            terms.proxy_unlabeled = false;
        }
        let s = ObjectiveSettings { terms, ..*settings };
        let eval = |delta: f64| {
            let mut p = model.clone();
            *p.parameter_mut(i) += delta;
            let out = forward_backward(&mut p, batch, means, &s).unwrap();
            (out.losses.total, out.trace)
        };
        let (lp, tp) = eval(h);
        let (lm, tm) = eval(-h);
        if terms == settings.terms {
            assert_eq!(tp, base.trace, "decision flipped at coordinate {i}");
            assert_eq!(tm, base.trace, "decision flipped at coordinate {i}");
        }
        let n = (lp - lm) / (2.0 * h);
        let scale = a.abs().max(n.abs());
        assert!(
            (a - n).abs() <= 1e-4 * scale || (scale < 1e-4 && (a - n).abs() <= 1e-7),
            "coordinate {i}: analytic {a}, numeric {n}"
        );
        checked += 1;
    }
    assert_eq!(checked, analytic.len());
}

fn vecs(rng: &mut Rng, n: usize, d: usize) -> Vec<Vec<f64>> {
    (0..n).map(|_| (0..d).map(|_| rng.normal()).collect()).collect()
}

#[test]
fn composite_gradient_on_small_instance() {
    let mut rng = Rng::new(2024);
    let mut model = Model::init(&Rng::new(7), 2, 4, 4, 4).unwrap();
    model.scorer.w.scale(4.0);
    let labeled: Vec<(Vec<f64>, usize)> = vecs(&mut rng, 4, 4).into_iter().zip([0, 1, 0, 1]).collect();
    let unlabeled = vecs(&mut rng, 4, 4);
    let batch = Batch { labeled, unlabeled };
    let q_max: Vec<f64> = batch
        .unlabeled
        .iter()
        .map(|h| model.scorer.score(h).unwrap().into_iter().fold(0.0, f64::max))
        .collect();
    let mut sorted = q_max.clone();
    sorted.sort_by(f64::total_cmp);
    let tau = 0.5 * (sorted[1] + sorted[2]);
    let means = MeanPrototypes {
        dim: 4,
        entries: vec![Some(vec![0.1, -0.2, 0.3, 0.0]), None],
    };
    for form in [ProxyLossForm::AsWritten, ProxyLossForm::SoftmaxAll] {
        let settings = ObjectiveSettings {
            lambda: 0.8,
            tau,
            margin: 1.0,
            form,
            terms: Terms::ALL,
        };
        finite_difference_check(&model, &batch, &means, &settings);
    }
}

#[test]
fn prototype_alignment_gradient_two_classes_six_proposals() {
    let mut rng = Rng::new(77);
    let mut model = Model::init(&Rng::new(3), 2, 5, 6, 3).unwrap();
    model.scorer.w.scale(4.0);
    let labeled: Vec<(Vec<f64>, usize)> = vecs(&mut rng, 3, 5).into_iter().zip([0, 1, 1]).collect();
    let unlabeled = vecs(&mut rng, 3, 5);
    let means = MeanPrototypes {
        dim: 3,
        entries: vec![Some(vec![0.2, 0.1, -0.1]), Some(vec![-0.3, 0.0, 0.4])],
    };
    let settings = ObjectiveSettings {
        lambda: 1.0,
        tau: 0.5,
        margin: 1.0,
        form: ProxyLossForm::AsWritten,
        terms: Terms {
            supervised: false,
            proxy_labeled: false,
            proxy_unlabeled: false,
            pmb_labeled: true,
            pmb_unlabeled: true,
            proxy_embedding_grad: true,
        },
    };
    let batch = Batch { labeled, unlabeled };
    let mut probe = model.clone();
    let out = forward_backward(&mut probe, &batch, &means, &settings).unwrap();
    assert!(out.accepted_pseudo_labels > 0, "instance should exercise the unlabeled side");
    finite_difference_check(&model, &batch, &means, &settings);
}
