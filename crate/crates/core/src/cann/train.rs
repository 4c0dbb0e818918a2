use rand::seq::SliceRandom;
use rand::Rng;

use super::{fake_quantize, forward_raw, quantize, ArchConfig, CannModel, QuantizedModel};
use crate::rng::{derive_seed, rng_from};
use crate::spectra::Dataset;
use crate::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub momentum: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub seed: u64,
    /// Train against fake-quantized weights with a straight-through gradient.
    pub qat_enabled: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig { learning_rate: 0.005, momentum: 0.9, epochs: 40, batch_size: 32, seed: 0, qat_enabled: true }
    }
}

impl TrainConfig {
    fn validate(&self) -> Result<()> {
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::arg("learning rate must be positive"));
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return Err(Error::arg("momentum must be in [0, 1)"));
        }
        if self.epochs == 0 || self.batch_size == 0 {
            return Err(Error::arg("epochs and batch size must be positive"));
        }
        Ok(())
    }
}

/// Gradients of the softmax cross-entropy with respect to every weight.
#[derive(Debug, Clone, PartialEq)]
pub struct Gradients {
    pub conv: Vec<f64>,
    pub fc: Vec<f64>,
}

impl Gradients {
    fn zeros(arch: &ArchConfig) -> Self {
        Gradients { conv: vec![0.0; arch.conv_weight_count()], fc: vec![0.0; arch.fc_weight_count()] }
    }
}

fn softmax_xent(logits: &[f64], label: usize) -> (f64, Vec<f64>) {
    let max = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = logits.iter().map(|l| (l - max).exp()).collect();
    let z: f64 = exps.iter().sum();
    let loss = z.ln() - (logits[label] - max);
    let mut delta: Vec<f64> = exps.iter().map(|e| e / z).collect();
    delta[label] -= 1.0;
    (loss, delta)
}

/// Accumulates `dL/dw` for one sample into `grads` and returns the loss.
fn accumulate(arch: &ArchConfig, conv_w: &[f64], fc_w: &[f64], x: &[f64], label: usize, grads: &mut Gradients) -> f64 {
    let act = forward_raw(arch, conv_w, fc_w, x);
    let (loss, d_logits) = softmax_xent(&act.logits, label);
    let c = arch.num_classes;
    let (k_len, conv_len, pool, pooled) = (arch.kernel_size, arch.conv_len(), arch.pool_size, arch.pooled_per_map());

    let mut d_pool = vec![0.0; arch.pooled_len()];
    for (j, a) in act.pool.iter().enumerate() {
        let row = j * c..(j + 1) * c;
        let mut back = 0.0;
        for ((g, w), d) in grads.fc[row.clone()].iter_mut().zip(&fc_w[row]).zip(&d_logits) {
            *g += a * d;
            back += w * d;
        }
        d_pool[j] = back;
    }

    let inv_pool = 1.0 / pool as f64;
    for f in 0..arch.num_filters {
        let taps = &mut grads.conv[f * k_len..(f + 1) * k_len];
        for m in 0..pooled {
            let d = d_pool[f * pooled + m] * inv_pool;
            if d == 0.0 {
                continue;
            }
            for p in m * pool..(m + 1) * pool {
                // ReLU gate; the remainder positions past pooled*pool get no gradient
                if act.conv[f * conv_len + p] > 0.0 {
                    for (g, v) in taps.iter_mut().zip(&x[p..p + k_len]) {
                        *g += d * v;
                    }
                }
            }
        }
    }
    loss
}

/// Loss and exact gradients for a single labelled input.
pub fn loss_and_gradients(model: &CannModel, x: &[f64], label: usize) -> Result<(f64, Gradients)> {
    if x.len() != model.arch.input_len {
        return Err(Error::arg("input length does not match architecture"));
    }
    if label >= model.arch.num_classes {
        return Err(Error::arg(format!("label {label} out of range")));
    }
    let mut grads = Gradients::zeros(&model.arch);
    let loss = accumulate(&model.arch, &model.conv, &model.fc, x, label, &mut grads);
    Ok((loss, grads))
}

/// Uniform `±sqrt(6 / fan_in)` initialisation.
fn init_weights(arch: &ArchConfig, seed: u64) -> (Vec<f64>, Vec<f64>) {
    let mut rng = rng_from(seed);
    let a = (6.0 / arch.kernel_size as f64).sqrt();
    let conv = (0..arch.conv_weight_count()).map(|_| rng.random_range(-a..a)).collect();
    let b = (6.0 / arch.pooled_len() as f64).sqrt();
    let fc = (0..arch.fc_weight_count()).map(|_| rng.random_range(-b..b)).collect();
    (conv, fc)
}

struct Scored {
    accuracy: f64,
    loss: f64,
}

fn score(arch: &ArchConfig, conv: &[f64], fc: &[f64], set: &[(Vec<f64>, usize)]) -> Scored {
    let mut correct = 0usize;
    let mut loss = 0.0;
    for (x, label) in set {
        let act = forward_raw(arch, conv, fc, x);
        if crate::argmax_lowest(&act.logits).0 == *label {
            correct += 1;
        }
        loss += softmax_xent(&act.logits, *label).0;
    }
    Scored { accuracy: correct as f64 / set.len() as f64, loss: loss / set.len() as f64 }
}

/// Mini-batch SGD with momentum on softmax cross-entropy.
///
/// Inputs are multiplied by `input_len` during training so that both layers
/// see O(1) activations; the factor is folded back into the conv weights, so
/// the returned model acts on unit-sum spectra. Every tenth sample (when the
/// set has at least 20) is held out for validation and the epoch with the
/// best validation accuracy, then lowest validation loss, is returned. The
/// learning rate drops tenfold for the final quarter of the epochs.
pub fn train(dataset: &Dataset, arch: &ArchConfig, cfg: &TrainConfig) -> Result<CannModel> {
    arch.validate()?;
    cfg.validate()?;
    if dataset.is_empty() {
        return Err(Error::arg("cannot train on an empty dataset"));
    }
    let gain = arch.input_len as f64;
    let mut train_set = Vec::with_capacity(dataset.len());
    let mut val_set = Vec::new();
    let hold_out = dataset.len() >= 20;
    for (i, s) in dataset.samples().iter().enumerate() {
        if s.spectrum.len() != arch.input_len {
            return Err(Error::arg("sample length does not match architecture"));
        }
        if s.label() >= arch.num_classes {
            return Err(Error::arg(format!("label {} out of range", s.label())));
        }
        let x: Vec<f64> = s.spectrum.probs().iter().map(|v| v * gain).collect();
        if hold_out && i % 10 == 9 {
            val_set.push((x, s.label()));
        } else {
            train_set.push((x, s.label()));
        }
    }
    if !hold_out {
        val_set = train_set.clone();
    }

    let (mut conv, mut fc) = init_weights(arch, cfg.seed);
    let mut vel = Gradients::zeros(arch);
    let mut rng = rng_from(derive_seed(cfg.seed, 1));
    let mut order: Vec<usize> = (0..train_set.len()).collect();
    let mut best: Option<(Scored, Vec<f64>, Vec<f64>)> = None;
    let decay_epoch = cfg.epochs - cfg.epochs / 4;

    for epoch in 0..cfg.epochs {
        let lr = if epoch >= decay_epoch { cfg.learning_rate * 0.1 } else { cfg.learning_rate };
        order.shuffle(&mut rng);
        for batch in order.chunks(cfg.batch_size) {
            let (fwd_conv, fwd_fc) =
                if cfg.qat_enabled { (fake_quantize(&conv), fake_quantize(&fc)) } else { (conv.clone(), fc.clone()) };
            let mut grads = Gradients::zeros(arch);
            for &i in batch {
                let (x, label) = &train_set[i];
                accumulate(arch, &fwd_conv, &fwd_fc, x, *label, &mut grads);
            }
            let step = lr / batch.len() as f64;
            // straight-through: the fake-quantized gradient updates the float weights
            for (w, (v, g)) in conv.iter_mut().zip(vel.conv.iter_mut().zip(&grads.conv)) {
                *v = cfg.momentum * *v - step * g;
                *w += *v;
            }
            for (w, (v, g)) in fc.iter_mut().zip(vel.fc.iter_mut().zip(&grads.fc)) {
                *v = cfg.momentum * *v - step * g;
                *w += *v;
            }
        }
        let scored = if cfg.qat_enabled {
            score(arch, &fake_quantize(&conv), &fake_quantize(&fc), &val_set)
        } else {
            score(arch, &conv, &fc, &val_set)
        };
        let better = match &best {
            None => true,
            Some((b, _, _)) => scored.accuracy > b.accuracy || (scored.accuracy == b.accuracy && scored.loss < b.loss),
        };
        if better {
            best = Some((scored, conv.clone(), fc.clone()));
        }
    }

    let (_, conv, fc) = best.expect("at least one epoch");
    if conv.iter().chain(&fc).any(|w| !w.is_finite()) {
        return Err(Error::Degenerate("training diverged".into()));
    }
    CannModel::new(*arch, conv.into_iter().map(|w| w * gain).collect(), fc)
}

/// Quantization-aware training; returns the int8 model. With
/// `qat_enabled = false` this is post-training quantization of [`train`].
pub fn train_qat(dataset: &Dataset, arch: &ArchConfig, cfg: &TrainConfig) -> Result<QuantizedModel> {
    quantize(&train(dataset, arch, cfg)?)
}
