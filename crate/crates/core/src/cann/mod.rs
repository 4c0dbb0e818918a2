//! Frame-based convolutional network: valid 1-D convolution with ReLU,
//! non-overlapping average pooling, and a bias-free dense output layer.
//!
//! Weight layouts are shared by every downstream stage: conv weights are
//! filter-major (`conv[f * K + k]`) and dense weights are pooled-neuron-major,
//! class-minor (`fc[j * classes + c]`), with pooled neurons flattened
//! filter-major (`j = f * pooled_per_map + m`).

mod eval;
mod train;

pub use eval::{evaluate, knn_baseline, knn_predict, sweep, Evaluation, SweepRow};
pub use train::{loss_and_gradients, train, train_qat, Gradients, TrainConfig};

use crate::spectra::NormalizedSpectrum;
use crate::{Error, Result, ISOTOPES, NUM_CHANNELS};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct ArchConfig {
    pub input_len: usize,
    pub num_filters: usize,
    pub kernel_size: usize,
    pub pool_size: usize,
    pub num_classes: usize,
}

impl Default for ArchConfig {
    fn default() -> Self {
        ArchConfig {
            input_len: NUM_CHANNELS,
            num_filters: 4,
            kernel_size: 5,
            pool_size: 16,
            num_classes: ISOTOPES.len(),
        }
    }
}

impl ArchConfig {
    pub fn new(
        input_len: usize,
        num_filters: usize,
        kernel_size: usize,
        pool_size: usize,
        num_classes: usize,
    ) -> Result<Self> {
        let arch = ArchConfig { input_len, num_filters, kernel_size, pool_size, num_classes };
        arch.validate()?;
        Ok(arch)
    }

    /// Default architecture with the kernel and pool sizes replaced.
    pub fn with_kernel_pool(kernel_size: usize, pool_size: usize) -> Result<Self> {
        let d = ArchConfig::default();
        ArchConfig::new(d.input_len, d.num_filters, kernel_size, pool_size, d.num_classes)
    }

    pub fn validate(&self) -> Result<()> {
        if self.num_filters == 0 || self.kernel_size == 0 || self.pool_size == 0 {
            return Err(Error::arg("filters, kernel and pool sizes must be positive"));
        }
        if self.num_classes == 0 {
            return Err(Error::arg("need at least one class"));
        }
        if self.kernel_size > self.input_len {
            return Err(Error::arg(format!("kernel {} longer than input {}", self.kernel_size, self.input_len)));
        }
        if self.pooled_per_map() == 0 {
            return Err(Error::arg(format!("pool {} larger than conv output {}", self.pool_size, self.conv_len())));
        }
        if self.input_len > NUM_CHANNELS {
            return Err(Error::arg(format!("input longer than {NUM_CHANNELS} channels")));
        }
        Ok(())
    }

    pub fn conv_len(&self) -> usize {
        self.input_len + 1 - self.kernel_size
    }

    pub fn pooled_per_map(&self) -> usize {
        self.conv_len() / self.pool_size
    }

    /// Number of pooled neurons across all maps (the dense layer's fan-in).
    pub fn pooled_len(&self) -> usize {
        self.num_filters * self.pooled_per_map()
    }

    pub fn conv_weight_count(&self) -> usize {
        self.num_filters * self.kernel_size
    }

    pub fn fc_weight_count(&self) -> usize {
        self.pooled_len() * self.num_classes
    }

    pub fn weight_count(&self) -> usize {
        self.conv_weight_count() + self.fc_weight_count()
    }

    /// Input, conv, pooled and output neurons.
    pub fn neuron_count(&self) -> usize {
        self.input_len + self.num_filters * self.conv_len() + self.pooled_len() + self.num_classes
    }
}

/// Layer activations of one forward pass.
#[derive(Debug, Clone, PartialEq)]
pub struct Activations {
    /// `F × conv_len`, filter-major, after ReLU.
    pub conv: Vec<f64>,
    /// `F × pooled_per_map`, filter-major.
    pub pool: Vec<f64>,
    pub logits: Vec<f64>,
}

/// Forward pass on raw weight slices.
pub(crate) fn forward_raw(arch: &ArchConfig, conv_w: &[f64], fc_w: &[f64], x: &[f64]) -> Activations {
    let (k_len, conv_len, pool, pooled) = (arch.kernel_size, arch.conv_len(), arch.pool_size, arch.pooled_per_map());
    let mut conv = vec![0.0; arch.num_filters * conv_len];
    for f in 0..arch.num_filters {
        let taps = &conv_w[f * k_len..(f + 1) * k_len];
        let out = &mut conv[f * conv_len..(f + 1) * conv_len];
        for (p, slot) in out.iter_mut().enumerate() {
            let z: f64 = taps.iter().zip(&x[p..p + k_len]).map(|(w, v)| w * v).sum();
            *slot = z.max(0.0);
        }
    }
    let mut pool_act = vec![0.0; arch.pooled_len()];
    for f in 0..arch.num_filters {
        for m in 0..pooled {
            let start = f * conv_len + m * pool;
            pool_act[f * pooled + m] = conv[start..start + pool].iter().sum::<f64>() / pool as f64;
        }
    }
    let c = arch.num_classes;
    let mut logits = vec![0.0; c];
    for (j, a) in pool_act.iter().enumerate() {
        if *a == 0.0 {
            continue;
        }
        for (l, w) in logits.iter_mut().zip(&fc_w[j * c..(j + 1) * c]) {
            *l += a * w;
        }
    }
    Activations { conv, pool: pool_act, logits }
}

/// Anything that maps a spectrum to class logits.
pub trait Classifier: Sync {
    fn arch(&self) -> &ArchConfig;

    fn forward_values(&self, x: &[f64]) -> Result<Activations>;

    fn forward(&self, spectrum: &NormalizedSpectrum) -> Result<Activations> {
        self.forward_values(spectrum.probs())
    }

    /// Argmax class, lowest index on ties.
    fn predict(&self, x: &[f64]) -> Result<usize> {
        Ok(crate::argmax_lowest(&self.forward_values(x)?.logits).0)
    }
}

fn check_input(arch: &ArchConfig, x: &[f64]) -> Result<()> {
    if x.len() != arch.input_len {
        return Err(Error::arg(format!("input has {} values, architecture expects {}", x.len(), arch.input_len)));
    }
    Ok(())
}

#[derive(Debug, Clone, PartialEq)]
pub struct CannModel {
    pub arch: ArchConfig,
    pub conv: Vec<f64>,
    pub fc: Vec<f64>,
}

impl CannModel {
    pub fn new(arch: ArchConfig, conv: Vec<f64>, fc: Vec<f64>) -> Result<Self> {
        arch.validate()?;
        if conv.len() != arch.conv_weight_count() || fc.len() != arch.fc_weight_count() {
            return Err(Error::arg(format!(
                "weight shapes {}+{} do not match architecture {}+{}",
                conv.len(),
                fc.len(),
                arch.conv_weight_count(),
                arch.fc_weight_count()
            )));
        }
        if conv.iter().chain(&fc).any(|w| !w.is_finite()) {
            return Err(Error::arg("weights must be finite"));
        }
        Ok(CannModel { arch, conv, fc })
    }

    pub fn zeros(arch: ArchConfig) -> Self {
        CannModel { arch, conv: vec![0.0; arch.conv_weight_count()], fc: vec![0.0; arch.fc_weight_count()] }
    }

    pub fn weight_count(&self) -> usize {
        self.conv.len() + self.fc.len()
    }
}

impl Classifier for CannModel {
    fn arch(&self) -> &ArchConfig {
        &self.arch
    }

    fn forward_values(&self, x: &[f64]) -> Result<Activations> {
        check_input(&self.arch, x)?;
        Ok(forward_raw(&self.arch, &self.conv, &self.fc, x))
    }
}

/// Per-tensor symmetric int8 weights.
#[derive(Debug, Clone, PartialEq)]
pub struct QuantizedModel {
    pub arch: ArchConfig,
    pub conv_q: Vec<i8>,
    pub fc_q: Vec<i8>,
    pub conv_scale: f64,
    pub fc_scale: f64,
}

impl QuantizedModel {
    pub fn new(arch: ArchConfig, conv_q: Vec<i8>, fc_q: Vec<i8>, conv_scale: f64, fc_scale: f64) -> Result<Self> {
        arch.validate()?;
        if conv_q.len() != arch.conv_weight_count() || fc_q.len() != arch.fc_weight_count() {
            return Err(Error::arg("quantized weight shapes do not match architecture"));
        }
        if conv_q.iter().chain(&fc_q).any(|&q| q == i8::MIN) {
            return Err(Error::arg("quantized weights must lie in [-127, 127]"));
        }
        if !(conv_scale > 0.0 && fc_scale > 0.0 && conv_scale.is_finite() && fc_scale.is_finite()) {
            return Err(Error::arg("scales must be positive and finite"));
        }
        Ok(QuantizedModel { arch, conv_q, fc_q, conv_scale, fc_scale })
    }

    pub fn dequantize(&self) -> CannModel {
        CannModel {
            arch: self.arch,
            conv: self.conv_q.iter().map(|&q| q as f64 * self.conv_scale).collect(),
            fc: self.fc_q.iter().map(|&q| q as f64 * self.fc_scale).collect(),
        }
    }

    /// Logits computed with the raw integer weights. Equal to the dequantized
    /// logits divided by `conv_scale · fc_scale`.
    pub fn integer_forward(&self, x: &[f64]) -> Result<Activations> {
        check_input(&self.arch, x)?;
        let conv: Vec<f64> = self.conv_q.iter().map(|&q| q as f64).collect();
        let fc: Vec<f64> = self.fc_q.iter().map(|&q| q as f64).collect();
        Ok(forward_raw(&self.arch, &conv, &fc, x))
    }
}

impl Classifier for QuantizedModel {
    fn arch(&self) -> &ArchConfig {
        &self.arch
    }

    fn forward_values(&self, x: &[f64]) -> Result<Activations> {
        check_input(&self.arch, x)?;
        let m = self.dequantize();
        Ok(forward_raw(&self.arch, &m.conv, &m.fc, x))
    }
}

/// Symmetric per-tensor quantization: `scale = max|w| / 127`,
/// `q = round(w / scale)` with halves rounded away from zero. An all-zero
/// tensor gets scale 1.
pub fn quantize_tensor(weights: &[f64]) -> (Vec<i8>, f64) {
    let max = weights.iter().fold(0.0f64, |m, w| m.max(w.abs()));
    if max == 0.0 {
        return (vec![0; weights.len()], 1.0);
    }
    let scale = max / 127.0;
    let q = weights.iter().map(|w| (w / scale).round().clamp(-127.0, 127.0) as i8).collect();
    (q, scale)
}

/// Quantize → dequantize, the forward-pass weights of QAT.
pub(crate) fn fake_quantize(weights: &[f64]) -> Vec<f64> {
    let (q, scale) = quantize_tensor(weights);
    q.iter().map(|&v| v as f64 * scale).collect()
}

pub fn quantize(model: &CannModel) -> Result<QuantizedModel> {
    if model.conv.iter().chain(&model.fc).any(|w| !w.is_finite()) {
        return Err(Error::arg("cannot quantize non-finite weights"));
    }
    let (conv_q, conv_scale) = quantize_tensor(&model.conv);
    let (fc_q, fc_scale) = quantize_tensor(&model.fc);
    QuantizedModel::new(model.arch, conv_q, fc_q, conv_scale, fc_scale)
}
