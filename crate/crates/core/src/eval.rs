//! Test-split evaluation by nearest-proxy readout in the metric space.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::euclid;
use crate::objective::Model;
use crate::projection::ProjectionHead;
use crate::proxy::ProxySet;
use crate::scorer::{argmax, pseudo_label};
use crate::synthgen::{Dataset, Split};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub test_count: usize,
    /// `None` for classes without test samples.
    pub per_class_accuracy: Vec<Option<f64>>,
    pub macro_accuracy: f64,
    /// `confusion[true][predicted]`
    pub confusion: Vec<Vec<u64>>,
    /// Secondary column: the surrogate scorer's argmax on raw features.
    pub scorer_per_class_accuracy: Vec<Option<f64>>,
    pub scorer_macro_accuracy: f64,
    /// Mean distance of test embeddings to their class centroid.
    pub mean_intra_class_distance: f64,
    /// Mean distance over unordered proxy pairs.
    pub mean_inter_proxy_distance: f64,
    /// Diagnostic only; uses labels hidden from training.
    pub pseudo_label_acceptance_rate: Option<f64>,
    /// Diagnostic only; over accepted pseudo labels (accepted distractors count as wrong).
    pub pseudo_label_accuracy: Option<f64>,
}

/// Nearest proxy to the embedding of `features`; ties go to the lowest index.
pub fn classify_nearest_proxy(head: &ProjectionHead, proxies: &ProxySet, features: &[f64]) -> Result<usize> {
    let x = head.embed(features)?;
    let mut best = 0;
    let mut best_d = f64::INFINITY;
    for (k, p) in proxies.proxies.iter().enumerate() {
        let d = euclid(&x, p)?;
        if d < best_d {
            best = k;
            best_d = d;
        }
    }
    Ok(best)
}

fn per_class(confusion: &[Vec<u64>]) -> (Vec<Option<f64>>, f64) {
    let accs: Vec<Option<f64>> = confusion
        .iter()
        .enumerate()
        .map(|(c, row)| {
            let n: u64 = row.iter().sum();
            (n > 0).then(|| row[c] as f64 / n as f64)
        })
        .collect();
    let present: Vec<f64> = accs.iter().flatten().copied().collect();
    let macro_acc = present.iter().sum::<f64>() / present.len() as f64;
    (accs, macro_acc)
}

pub fn evaluate(model: &Model, tau: f64, dataset: &Dataset) -> Result<EvalReport> {
    let c = model.num_classes();
    if dataset.num_classes != c {
        return Err(Error::InvalidArgument(format!(
            "dataset has C={}, model has C={c}",
            dataset.num_classes
        )));
    }
    let test: Vec<_> = dataset.split(Split::Test).collect();
    if test.is_empty() {
        return Err(Error::InvalidArgument("dataset has an empty test split".into()));
    }

    let mut confusion = vec![vec![0u64; c]; c];
    let mut scorer_confusion = vec![vec![0u64; c]; c];
    let mut embeddings: Vec<(Vec<f64>, usize)> = Vec::with_capacity(test.len());
    for s in &test {
        let truth = s.true_class.ok_or_else(|| Error::InvalidArgument("test sample without class".into()))?;
        let pred = classify_nearest_proxy(&model.head, &model.proxies, &s.features)?;
        confusion[truth][pred] += 1;
        scorer_confusion[truth][argmax(&model.scorer.score(&s.features)?)] += 1;
        embeddings.push((model.head.embed(&s.features)?, truth));
    }
    let (per_class_accuracy, macro_accuracy) = per_class(&confusion);
    let (scorer_per_class_accuracy, scorer_macro_accuracy) = per_class(&scorer_confusion);

    let dim = model.head.d_out();
    let mut centroids = vec![vec![0.0; dim]; c];
    let mut counts = vec![0usize; c];
    for (x, k) in &embeddings {
        counts[*k] += 1;
        for (m, v) in centroids[*k].iter_mut().zip(x) {
            *m += v;
        }
    }
    for (m, &n) in centroids.iter_mut().zip(&counts) {
        if n > 0 {
            m.iter_mut().for_each(|v| *v /= n as f64);
        }
    }
    let mut intra = 0.0;
    for (x, k) in &embeddings {
        intra += euclid(x, &centroids[*k])?;
    }
    let mean_intra_class_distance = intra / embeddings.len() as f64;

    let mut inter = 0.0;
    let mut pairs = 0usize;
    for a in 0..c {
        for b in (a + 1)..c {
            inter += euclid(&model.proxies.proxies[a], &model.proxies.proxies[b])?;
            pairs += 1;
        }
    }
    let mean_inter_proxy_distance = inter / pairs as f64;

    let unlabeled: Vec<_> = dataset.split(Split::Unlabeled).collect();
    let (mut accepted, mut correct) = (0usize, 0usize);
    for s in &unlabeled {
        let pl = pseudo_label(&model.scorer.score(&s.features)?, tau);
        if let Some(k) = pl.class_id {
            accepted += 1;
            if s.true_class == Some(k) {
                correct += 1;
            }
        }
    }
    let pseudo_label_acceptance_rate = (!unlabeled.is_empty()).then(|| accepted as f64 / unlabeled.len() as f64);
    let pseudo_label_accuracy = (accepted > 0).then(|| correct as f64 / accepted as f64);

    Ok(EvalReport {
        test_count: test.len(),
        per_class_accuracy,
        macro_accuracy,
        confusion,
        scorer_per_class_accuracy,
        scorer_macro_accuracy,
        mean_intra_class_distance,
        mean_inter_proxy_distance,
        pseudo_label_acceptance_rate,
        pseudo_label_accuracy,
    })
}
