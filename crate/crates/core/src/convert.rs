//! Integer spiking network from a quantized CANN.
//!
//! Weights stay the int8 values of the quantized model; the quantization
//! scales are absorbed by per-layer integer thresholds. Average pooling
//! becomes a spiking layer with unit weights and threshold `P`, so a pool
//! neuron emits one spike per `P` received.
//!
//! Rates are measured per input event. A conv neuron is only updated when
//! an event falls inside its receptive field, and a dense neuron only when a
//! pool neuron spikes, so the drive a neuron sees per membrane update is a
//! weighted mean of its weights. Thresholds are the chosen percentile of
//! that per-update drive over the calibration set, raised where needed to
//! the largest weight magnitude of the layer: single-subtraction reset keeps
//! the membrane below threshold only when no weight exceeds it.

use crate::cann::{ArchConfig, QuantizedModel};
use crate::spectra::Dataset;
use crate::{Error, Result};

/// Largest threshold for which `V + w` always fits a 16-bit membrane.
pub const MAX_THRESHOLD: i32 = 1 << 14;

pub const DEFAULT_PERCENTILE: f64 = 99.9;

/// Deepest floor the 16-bit membrane allows. A floor near `-threshold`
/// rectifies the membrane random walk of neurons with a small negative
/// drive and makes them fire where the ReLU activation is zero.
pub const DEFAULT_V_MIN: i32 = -MAX_THRESHOLD;

pub const IMAGE_MAGIC: [u8; 4] = *b"CSNN";
pub const IMAGE_VERSION: u8 = 1;
pub const IMAGE_HEADER_LEN: usize = 16;
/// Eight little-endian i32 fields after the weight payload.
pub const THRESHOLD_BLOCK_LEN: usize = 32;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct LayerParams {
    pub threshold: i32,
    pub v_min: i32,
}

impl LayerParams {
    /// Threshold with the default floor [`DEFAULT_V_MIN`].
    pub fn with_default_floor(threshold: i32) -> Self {
        LayerParams { threshold, v_min: DEFAULT_V_MIN }
    }
}

/// Conv and dense layer parameters; the pool layer is fixed by `P`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Thresholds {
    pub conv: LayerParams,
    pub fc: LayerParams,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SnnModel {
    pub arch: ArchConfig,
    /// `F × K`, filter-major.
    pub conv_w: Vec<i32>,
    /// `(F · pooled_per_map) × classes`, pooled-neuron-major.
    pub fc_w: Vec<i32>,
    pub pool_w: i32,
    pub conv: LayerParams,
    pub pool: LayerParams,
    pub fc: LayerParams,
    /// Leak per update; always zero.
    pub leak: i32,
}

fn check_layer(name: &str, params: LayerParams, weights: &[i32]) -> Result<()> {
    let LayerParams { threshold, v_min } = params;
    if threshold <= 0 || threshold > MAX_THRESHOLD {
        return Err(Error::arg(format!("{name} threshold {threshold} outside 1..={MAX_THRESHOLD}")));
    }
    if !(-MAX_THRESHOLD..=0).contains(&v_min) {
        return Err(Error::arg(format!("{name} floor {v_min} outside -{MAX_THRESHOLD}..=0")));
    }
    if let Some(w) = weights.iter().find(|w| w.abs() > threshold) {
        return Err(Error::arg(format!("{name} weight {w} exceeds threshold {threshold}")));
    }
    Ok(())
}

impl SnnModel {
    pub fn validate(&self) -> Result<()> {
        let a = &self.arch;
        a.validate()?;
        if self.conv_w.len() != a.conv_weight_count() || self.fc_w.len() != a.fc_weight_count() {
            return Err(Error::arg("spiking weight shapes do not match architecture"));
        }
        if self.pool_w <= 0 {
            return Err(Error::arg("pool weight must be positive"));
        }
        if self.pool.threshold != a.pool_size as i32 * self.pool_w {
            return Err(Error::arg(format!(
                "pool threshold {} must equal P × pool_w = {}",
                self.pool.threshold,
                a.pool_size as i32 * self.pool_w
            )));
        }
        if self.leak != 0 {
            return Err(Error::arg("leak must be zero"));
        }
        check_layer("conv", self.conv, &self.conv_w)?;
        check_layer("pool", self.pool, &[self.pool_w])?;
        check_layer("fc", self.fc, &self.fc_w)?;
        Ok(())
    }

    pub fn weight_count(&self) -> usize {
        self.conv_w.len() + self.fc_w.len()
    }

    pub fn thresholds(&self) -> Thresholds {
        Thresholds { conv: self.conv, fc: self.fc }
    }
}

/// Nearest-rank percentile of `values` (sorted in place).
fn percentile(values: &mut [f64], pct: f64) -> f64 {
    if values.is_empty() {
        return 0.0;
    }
    values.sort_by(f64::total_cmp);
    let rank = ((pct / 100.0) * values.len() as f64).ceil() as usize;
    values[rank.clamp(1, values.len()) - 1]
}

/// Per-update drive magnitudes `|Σ w·r| / Σ r` of every conv and dense
/// neuron that receives any input on `x`.
///
/// `r` is the per-event input rate of each synapse: the spectrum for conv
/// neurons, and the pool firing rates implied by integer ReLU activations
/// for dense neurons. The dense ratios do not depend on the conv threshold
/// because it scales numerator and denominator alike.
pub fn per_update_drives(qmodel: &QuantizedModel, x: &[f64]) -> Result<(Vec<f64>, Vec<f64>)> {
    let a = qmodel.arch;
    if x.len() != a.input_len {
        return Err(Error::arg("calibration sample length does not match architecture"));
    }
    let (k_len, conv_len, pool, pooled, classes) =
        (a.kernel_size, a.conv_len(), a.pool_size, a.pooled_per_map(), a.num_classes);
    let mut conv_drives = Vec::with_capacity(a.num_filters * conv_len);
    let mut pool_rates = vec![0.0; a.pooled_len()];
    for f in 0..a.num_filters {
        let taps = &qmodel.conv_q[f * k_len..(f + 1) * k_len];
        for p in 0..conv_len {
            let window = &x[p..p + k_len];
            let mass: f64 = window.iter().sum();
            let z: f64 = taps.iter().zip(window).map(|(&w, v)| w as f64 * v).sum();
            if mass > 0.0 {
                conv_drives.push(z.abs() / mass);
            }
            let m = p / pool;
            if m < pooled {
                pool_rates[f * pooled + m] += z.max(0.0) / pool as f64;
            }
        }
    }
    let mass: f64 = pool_rates.iter().sum();
    let mut fc_drives = Vec::with_capacity(classes);
    if mass > 0.0 {
        for c in 0..classes {
            let z: f64 = pool_rates.iter().enumerate().map(|(j, r)| qmodel.fc_q[j * classes + c] as f64 * r).sum();
            fc_drives.push(z.abs() / mass);
        }
    }
    Ok((conv_drives, fc_drives))
}

fn layer_threshold(drives: &mut [f64], pct: f64, weights: &[i8]) -> i32 {
    // drives are ratios of sums; absorb the last-ulp error before rounding up
    let data = (percentile(drives, pct) - 1e-9).ceil() as i32;
    let bound = weights.iter().map(|&w| (w as i32).abs()).max().unwrap_or(0);
    data.max(bound).max(1)
}

/// Data-based thresholds for the conv and dense layers.
pub fn compute_thresholds(qmodel: &QuantizedModel, calibration: &Dataset, pct: f64) -> Result<Thresholds> {
    if calibration.is_empty() {
        return Err(Error::arg("calibration set is empty"));
    }
    if !(pct > 0.0 && pct <= 100.0) {
        return Err(Error::arg(format!("percentile {pct} outside (0, 100]")));
    }
    let mut conv = Vec::new();
    let mut fc = Vec::new();
    for s in calibration.samples() {
        let (c, f) = per_update_drives(qmodel, s.spectrum.probs())?;
        conv.extend(c);
        fc.extend(f);
    }
    Ok(Thresholds {
        conv: LayerParams::with_default_floor(layer_threshold(&mut conv, pct, &qmodel.conv_q)),
        fc: LayerParams::with_default_floor(layer_threshold(&mut fc, pct, &qmodel.fc_q)),
    })
}

/// Builds the spiking model: int8 weights copied, `pool_w = 1`, pool
/// threshold `P`.
pub fn convert(qmodel: &QuantizedModel, thresholds: &Thresholds) -> Result<SnnModel> {
    let p = qmodel.arch.pool_size as i32;
    let model = SnnModel {
        arch: qmodel.arch,
        conv_w: qmodel.conv_q.iter().map(|&w| w as i32).collect(),
        fc_w: qmodel.fc_q.iter().map(|&w| w as i32).collect(),
        pool_w: 1,
        conv: thresholds.conv,
        pool: LayerParams::with_default_floor(p),
        fc: thresholds.fc,
        leak: 0,
    };
    model.validate()?;
    Ok(model)
}

/// ROM image: 16-byte header, one signed byte per weight in TDM fetch
/// order, then the threshold block.
///
/// Header: magic `CSNN`, version, F, K, P, classes, reserved zero,
/// input length (u16 LE), threshold block offset (u32 LE).
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct MemoryImage {
    bytes: Vec<u8>,
}

impl MemoryImage {
    pub fn from_bytes(bytes: Vec<u8>) -> Result<Self> {
        let image = MemoryImage { bytes };
        image.to_model()?;
        Ok(image)
    }

    pub fn as_bytes(&self) -> &[u8] {
        &self.bytes
    }

    pub fn into_bytes(self) -> Vec<u8> {
        self.bytes
    }

    pub fn header(&self) -> &[u8] {
        &self.bytes[..IMAGE_HEADER_LEN]
    }

    /// The weight bytes alone.
    pub fn payload(&self) -> &[u8] {
        let end = u32::from_le_bytes(self.bytes[12..16].try_into().unwrap()) as usize;
        &self.bytes[IMAGE_HEADER_LEN..end]
    }

    pub fn to_model(&self) -> Result<SnnModel> {
        import_memory_image(&self.bytes)
    }
}

fn byte_field(name: &str, v: usize) -> Result<u8> {
    u8::try_from(v).map_err(|_| Error::Encoding(format!("{name} = {v} does not fit one byte")))
}

fn weight_byte(w: i32) -> Result<u8> {
    i8::try_from(w).map(|b| b as u8).map_err(|_| Error::Encoding(format!("weight {w} outside [-128, 127]")))
}

pub fn export_memory_image(snn: &SnnModel) -> Result<MemoryImage> {
    snn.validate()?;
    let a = &snn.arch;
    let weights = snn.weight_count();
    let input_len =
        u16::try_from(a.input_len).map_err(|_| Error::Encoding("input length does not fit two bytes".into()))?;
    let mut bytes = Vec::with_capacity(IMAGE_HEADER_LEN + weights + THRESHOLD_BLOCK_LEN);
    bytes.extend_from_slice(&IMAGE_MAGIC);
    bytes.push(IMAGE_VERSION);
    bytes.push(byte_field("filters", a.num_filters)?);
    bytes.push(byte_field("kernel", a.kernel_size)?);
    bytes.push(byte_field("pool", a.pool_size)?);
    bytes.push(byte_field("classes", a.num_classes)?);
    bytes.push(0);
    bytes.extend_from_slice(&input_len.to_le_bytes());
    bytes.extend_from_slice(&((IMAGE_HEADER_LEN + weights) as u32).to_le_bytes());
    // filters in series, taps in order within each filter
    for &w in &snn.conv_w {
        bytes.push(weight_byte(w)?);
    }
    for &w in &snn.fc_w {
        bytes.push(weight_byte(w)?);
    }
    for v in [
        snn.conv.threshold,
        snn.conv.v_min,
        snn.pool.threshold,
        snn.pool.v_min,
        snn.fc.threshold,
        snn.fc.v_min,
        snn.pool_w,
        snn.leak,
    ] {
        bytes.extend_from_slice(&v.to_le_bytes());
    }
    Ok(MemoryImage { bytes })
}

pub fn import_memory_image(bytes: &[u8]) -> Result<SnnModel> {
    let bad = |msg: &str| Error::Encoding(format!("memory image: {msg}"));
    if bytes.len() < IMAGE_HEADER_LEN {
        return Err(bad("shorter than header"));
    }
    if bytes[..4] != IMAGE_MAGIC {
        return Err(bad("bad magic"));
    }
    if bytes[4] != IMAGE_VERSION {
        return Err(bad(&format!("unsupported version {}", bytes[4])));
    }
    let input_len = u16::from_le_bytes([bytes[10], bytes[11]]) as usize;
    let arch = ArchConfig::new(input_len, bytes[5] as usize, bytes[6] as usize, bytes[7] as usize, bytes[8] as usize)?;
    let offset = u32::from_le_bytes(bytes[12..16].try_into().unwrap()) as usize;
    let weights = arch.weight_count();
    if offset != IMAGE_HEADER_LEN + weights {
        return Err(bad("threshold offset does not match weight count"));
    }
    if bytes.len() != offset + THRESHOLD_BLOCK_LEN {
        return Err(bad(&format!("length {} (expected {})", bytes.len(), offset + THRESHOLD_BLOCK_LEN)));
    }
    let payload = &bytes[IMAGE_HEADER_LEN..offset];
    let (conv, fc) = payload.split_at(arch.conv_weight_count());
    let field = |i: usize| {
        let at = offset + 4 * i;
        i32::from_le_bytes(bytes[at..at + 4].try_into().unwrap())
    };
    let model = SnnModel {
        arch,
        conv_w: conv.iter().map(|&b| b as i8 as i32).collect(),
        fc_w: fc.iter().map(|&b| b as i8 as i32).collect(),
        conv: LayerParams { threshold: field(0), v_min: field(1) },
        pool: LayerParams { threshold: field(2), v_min: field(3) },
        fc: LayerParams { threshold: field(4), v_min: field(5) },
        pool_w: field(6),
        leak: field(7),
    };
    model.validate()?;
    Ok(model)
}
