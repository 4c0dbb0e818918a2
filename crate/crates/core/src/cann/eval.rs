use rayon::prelude::*;

use super::{train, train_qat, ArchConfig, Classifier, TrainConfig};
use crate::spectra::Dataset;
use crate::{Error, Result};

#[derive(Debug, Clone, PartialEq)]
pub struct Evaluation {
    pub accuracy: f64,
    /// `confusion[true][predicted]`.
    pub confusion: Vec<Vec<usize>>,
}

impl Evaluation {
    pub fn from_predictions(num_classes: usize, pairs: impl IntoIterator<Item = (usize, usize)>) -> Self {
        let mut confusion = vec![vec![0; num_classes]; num_classes];
        let (mut n, mut hits) = (0usize, 0usize);
        for (truth, pred) in pairs {
            confusion[truth][pred] += 1;
            n += 1;
            hits += usize::from(truth == pred);
        }
        Evaluation { accuracy: if n == 0 { 0.0 } else { hits as f64 / n as f64 }, confusion }
    }
}

pub fn evaluate<M: Classifier>(model: &M, dataset: &Dataset) -> Result<Evaluation> {
    let preds = dataset
        .samples()
        .par_iter()
        .map(|s| Ok((s.label(), model.predict(s.spectrum.probs())?)))
        .collect::<Result<Vec<_>>>()?;
    Ok(Evaluation::from_predictions(model.arch().num_classes, preds))
}

fn squared_distance(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

/// Majority label of the `k` nearest training spectra (Euclidean). Distance
/// ties go to the earlier training sample, vote ties to the lowest class.
pub fn knn_predict(train_set: &Dataset, x: &[f64], k: usize) -> Result<usize> {
    if train_set.is_empty() {
        return Err(Error::arg("kNN needs a non-empty training set"));
    }
    if k == 0 {
        return Err(Error::arg("k must be at least 1"));
    }
    let mut dists: Vec<(f64, usize)> =
        train_set.samples().iter().enumerate().map(|(i, s)| (squared_distance(s.spectrum.probs(), x), i)).collect();
    let k = k.min(dists.len());
    dists.select_nth_unstable_by(k - 1, |a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
    let mut votes = vec![0usize; crate::ISOTOPES.len()];
    for &(_, i) in &dists[..k] {
        votes[train_set.samples()[i].label()] += 1;
    }
    Ok(crate::argmax_lowest(&votes).0)
}

pub fn knn_baseline(train_set: &Dataset, test_set: &Dataset, k: usize) -> Result<Evaluation> {
    let preds = test_set
        .samples()
        .par_iter()
        .map(|s| Ok((s.label(), knn_predict(train_set, s.spectrum.probs(), k)?)))
        .collect::<Result<Vec<_>>>()?;
    Ok(Evaluation::from_predictions(crate::ISOTOPES.len(), preds))
}

/// One grid point of the kernel/pool sweep.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SweepRow {
    pub kernel_size: usize,
    pub pool_size: usize,
    pub weight_count: usize,
    pub float_accuracy: f64,
    pub quantized_accuracy: f64,
}

/// Trains a float model and a QAT model per `(kernel, pool)` pair and
/// reports test accuracy of each. Rows come out in grid order.
pub fn sweep(
    train_set: &Dataset,
    test_set: &Dataset,
    kernels: &[usize],
    pools: &[usize],
    cfg: &TrainConfig,
) -> Result<Vec<SweepRow>> {
    let grid: Vec<(usize, usize)> = kernels.iter().flat_map(|&k| pools.iter().map(move |&p| (k, p))).collect();
    grid.par_iter()
        .map(|&(k, p)| {
            let arch = ArchConfig::with_kernel_pool(k, p)?;
            let float_cfg = TrainConfig { qat_enabled: false, ..*cfg };
            let qat_cfg = TrainConfig { qat_enabled: true, ..*cfg };
            let float = train(train_set, &arch, &float_cfg)?;
            let quant = train_qat(train_set, &arch, &qat_cfg)?;
            Ok(SweepRow {
                kernel_size: k,
                pool_size: p,
                weight_count: arch.weight_count(),
                float_accuracy: evaluate(&float, test_set)?.accuracy,
                quantized_accuracy: evaluate(&quant, test_set)?.accuracy,
            })
        })
        .collect()
}
