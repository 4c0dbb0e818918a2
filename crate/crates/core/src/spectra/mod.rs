//! Synthetic gamma-ray histograms.
//!
//! A sample is produced by rendering an isotope template under a nominal
//! calibration, resampling through a perturbed calibration (gain shift),
//! mixing with background, Poisson resampling to a finite count total and
//! finally normalizing to unit sum.

mod config;
mod synth;

pub use config::{load_config, BackgroundModel, GeneratorConfig, GeneratorSettings};
pub use synth::{synthesize_dataset, Dataset, Sample};

use rand::Rng;
use rand_distr::{Distribution, Poisson};
use serde::Deserialize;

use crate::{Error, Result, NUM_CHANNELS};

/// Largest gain-shift term accepted by default.
pub const DEFAULT_GAIN_SHIFT_BOUND: f64 = 0.05;

/// Tolerance used when validating that a spectrum sums to one.
pub const NORMALIZATION_TOLERANCE: f64 = 1e-9;

const FWHM_TO_SIGMA: f64 = 0.424_660_900_144_009_5; // 1 / (2 sqrt(2 ln 2))

/// Quadratic channel-to-energy map, `energy(c) = a0 + a1 c + a2 c²` keV.
///
/// `energy(c)` is the lower edge of channel `c`; channel `c` spans
/// `[energy(c), energy(c + 1))`.
#[derive(Debug, Clone, Copy, PartialEq, Deserialize)]
pub struct Calibration {
    pub a0: f64,
    pub a1: f64,
    pub a2: f64,
}

impl Default for Calibration {
    fn default() -> Self {
        Calibration { a0: 0.0, a1: 3000.0 / NUM_CHANNELS as f64, a2: 0.0 }
    }
}

impl Calibration {
    pub fn new(a0: f64, a1: f64, a2: f64) -> Result<Self> {
        let cal = Calibration { a0, a1, a2 };
        cal.validate()?;
        Ok(cal)
    }

    pub fn validate(&self) -> Result<()> {
        if ![self.a0, self.a1, self.a2].iter().all(|v| v.is_finite()) {
            return Err(Error::arg("calibration coefficients must be finite"));
        }
        // The derivative is linear in c, so checking both ends covers the range.
        let n = NUM_CHANNELS as f64;
        if self.dispersion(0.0) <= 0.0 || self.dispersion(n) <= 0.0 {
            return Err(Error::arg("calibration must be strictly increasing over all channels"));
        }
        Ok(())
    }

    pub fn energy(&self, channel: f64) -> f64 {
        self.a0 + self.a1 * channel + self.a2 * channel * channel
    }

    /// keV per channel at fractional channel position `channel`.
    pub fn dispersion(&self, channel: f64) -> f64 {
        self.a1 + 2.0 * self.a2 * channel
    }

    /// Fractional channel position of `energy`, inverse of [`Self::energy`].
    pub fn channel_of(&self, energy: f64) -> f64 {
        if self.a2 == 0.0 {
            return (energy - self.a0) / self.a1;
        }
        // Root of a2 c² + a1 c + (a0 - E) = 0 on the increasing branch, written
        // in the cancellation-free form.
        let c = self.a0 - energy;
        let disc = (self.a1 * self.a1 - 4.0 * self.a2 * c).max(0.0);
        -2.0 * c / (self.a1 + disc.sqrt())
    }

    /// `NUM_CHANNELS + 1` bin edges in keV.
    pub fn edges(&self) -> Vec<f64> {
        (0..=NUM_CHANNELS).map(|c| self.energy(c as f64)).collect()
    }

    pub fn energy_range(&self) -> (f64, f64) {
        (self.energy(0.0), self.energy(NUM_CHANNELS as f64))
    }
}

/// One gamma line of a template.
#[derive(Debug, Clone, Copy, PartialEq, Deserialize)]
#[serde(from = "[f64; 3]")]
pub struct Peak {
    pub energy_kev: f64,
    pub relative_intensity: f64,
    pub fwhm_kev: f64,
}

impl From<[f64; 3]> for Peak {
    fn from([energy_kev, relative_intensity, fwhm_kev]: [f64; 3]) -> Self {
        Peak { energy_kev, relative_intensity, fwhm_kev }
    }
}

/// Parametric emission pattern of one isotope.
#[derive(Debug, Clone, PartialEq, Deserialize)]
pub struct IsotopeTemplate {
    pub name: String,
    pub peaks: Vec<Peak>,
    /// Area of the flat Compton floor relative to the total photopeak area.
    /// The floor extends from channel 0 up to the highest-energy peak.
    #[serde(default)]
    pub continuum_level: f64,
}

impl IsotopeTemplate {
    pub fn validate(&self) -> Result<()> {
        if self.peaks.is_empty() {
            return Err(Error::arg(format!("template {}: no peaks", self.name)));
        }
        if !(self.continuum_level >= 0.0 && self.continuum_level.is_finite()) {
            return Err(Error::arg(format!("template {}: continuum_level must be >= 0", self.name)));
        }
        let mut total = 0.0;
        for p in &self.peaks {
            if !(p.relative_intensity >= 0.0 && p.relative_intensity.is_finite()) {
                return Err(Error::arg(format!("template {}: negative intensity", self.name)));
            }
            if !(p.fwhm_kev > 0.0 && p.fwhm_kev.is_finite()) {
                return Err(Error::arg(format!("template {}: fwhm must be positive", self.name)));
            }
            if !p.energy_kev.is_finite() {
                return Err(Error::arg(format!("template {}: non-finite energy", self.name)));
            }
            total += p.relative_intensity;
        }
        if total <= 0.0 {
            return Err(Error::arg(format!("template {}: no positive intensity", self.name)));
        }
        Ok(())
    }
}

/// Acquisition tags carried alongside each histogram.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct SampleMeta {
    pub distance_cm: f64,
    pub integration_s: f64,
    pub seed: u64,
}

/// A 1,024-channel energy histogram.
#[derive(Debug, Clone, PartialEq)]
pub struct Histogram {
    counts: Vec<f64>,
    pub label: Option<usize>,
    pub meta: SampleMeta,
}

impl Histogram {
    pub fn new(counts: Vec<f64>, label: Option<usize>) -> Result<Self> {
        if counts.len() != NUM_CHANNELS {
            return Err(Error::arg(format!("histogram needs {NUM_CHANNELS} channels, got {}", counts.len())));
        }
        if let Some(c) = counts.iter().position(|v| !(*v >= 0.0 && v.is_finite())) {
            return Err(Error::arg(format!("channel {c} is negative or not finite")));
        }
        Ok(Histogram { counts, label, meta: SampleMeta::default() })
    }

    pub fn with_meta(mut self, meta: SampleMeta) -> Self {
        self.meta = meta;
        self
    }

    pub fn counts(&self) -> &[f64] {
        &self.counts
    }

    pub fn total(&self) -> f64 {
        self.counts.iter().sum()
    }

    /// Channel holding the most counts, lowest index on ties.
    pub fn peak_channel(&self) -> usize {
        crate::argmax_lowest(&self.counts).0
    }

    fn replace_counts(&self, counts: Vec<f64>) -> Histogram {
        Histogram { counts, label: self.label, meta: self.meta }
    }
}

/// Unit-sum spectrum, the network input.
#[derive(Debug, Clone, PartialEq)]
pub struct NormalizedSpectrum {
    probs: Vec<f64>,
    pub label: Option<usize>,
}

impl NormalizedSpectrum {
    /// Wraps already-normalized values; checks length, sign and unit sum.
    pub fn new(probs: Vec<f64>, label: Option<usize>) -> Result<Self> {
        Self::from_values(probs, label, NUM_CHANNELS)
    }

    /// Like [`Self::new`] for inputs of any length (toy architectures).
    pub fn from_values(probs: Vec<f64>, label: Option<usize>, len: usize) -> Result<Self> {
        if probs.len() != len {
            return Err(Error::arg(format!("spectrum needs {len} values, got {}", probs.len())));
        }
        if probs.iter().any(|v| !(*v >= 0.0 && *v <= 1.0)) {
            return Err(Error::arg("spectrum values must lie in [0, 1]"));
        }
        let sum: f64 = probs.iter().sum();
        if (sum - 1.0).abs() > NORMALIZATION_TOLERANCE {
            return Err(Error::arg(format!("spectrum sums to {sum}, not 1")));
        }
        Ok(NormalizedSpectrum { probs, label })
    }

    pub fn probs(&self) -> &[f64] {
        &self.probs
    }

    pub fn len(&self) -> usize {
        self.probs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.probs.is_empty()
    }
}

fn std_normal_cdf(x: f64) -> f64 {
    0.5 * libm::erfc(-x * std::f64::consts::FRAC_1_SQRT_2)
}

/// Renders a template into a unit-total histogram.
///
/// Each peak becomes a Gaussian in channel space, centred on the channel of
/// its energy, with the FWHM converted to channels through the local
/// dispersion, and integrated exactly over each channel. Peak areas are
/// proportional to relative intensity.
pub fn render_template(template: &IsotopeTemplate, cal: &Calibration) -> Result<Histogram> {
    template.validate()?;
    cal.validate()?;
    let (lo, hi) = cal.energy_range();
    for p in &template.peaks {
        if p.energy_kev < lo || p.energy_kev >= hi {
            return Err(Error::Range(format!(
                "{}: peak at {} keV outside calibrated range [{lo}, {hi})",
                template.name, p.energy_kev
            )));
        }
    }
    let total_intensity: f64 = template.peaks.iter().map(|p| p.relative_intensity).sum();
    let mut counts = vec![0.0; NUM_CHANNELS];
    let mut top_channel = 0.0f64;
    for p in &template.peaks {
        if p.relative_intensity == 0.0 {
            continue;
        }
        let centre = cal.channel_of(p.energy_kev);
        top_channel = top_channel.max(centre);
        let sigma = p.fwhm_kev * FWHM_TO_SIGMA / cal.dispersion(centre);
        let weight = p.relative_intensity / total_intensity;
        // Beyond 10 sigma the contribution is below 1e-23 of the peak area.
        let first = ((centre - 10.0 * sigma).floor().max(0.0)) as usize;
        let last = ((centre + 10.0 * sigma).ceil() as usize).min(NUM_CHANNELS);
        let mut lower = std_normal_cdf((first as f64 - centre) / sigma);
        for (c, slot) in counts.iter_mut().enumerate().take(last).skip(first) {
            let upper = std_normal_cdf((c as f64 + 1.0 - centre) / sigma);
            *slot += weight * (upper - lower);
            lower = upper;
        }
    }
    if template.continuum_level > 0.0 {
        let floor_channels = (top_channel.ceil() as usize).clamp(1, NUM_CHANNELS);
        let level = template.continuum_level / floor_channels as f64;
        for slot in counts.iter_mut().take(floor_channels) {
            *slot += level;
        }
    }
    let total: f64 = counts.iter().sum();
    for slot in &mut counts {
        *slot /= total;
    }
    Histogram::new(counts, None)
}

fn check_edges(edges: &[f64], what: &str) -> Result<()> {
    if edges.len() < 2 {
        return Err(Error::arg(format!("{what} edges need at least two values")));
    }
    if edges.iter().any(|e| !e.is_finite()) {
        return Err(Error::arg(format!("{what} edges must be finite")));
    }
    if edges.windows(2).any(|w| w[1] <= w[0]) {
        return Err(Error::arg(format!("{what} edges must be strictly increasing")));
    }
    Ok(())
}

/// Redistributes `counts` from `src_edges` bins onto `dst_edges` bins by
/// fractional overlap, treating counts as uniformly spread inside each
/// source bin. Mass outside the destination range is dropped.
pub fn rebin(counts: &[f64], src_edges: &[f64], dst_edges: &[f64]) -> Result<Vec<f64>> {
    check_edges(src_edges, "source")?;
    check_edges(dst_edges, "destination")?;
    if counts.len() + 1 != src_edges.len() {
        return Err(Error::arg(format!(
            "{} counts need {} source edges, got {}",
            counts.len(),
            counts.len() + 1,
            src_edges.len()
        )));
    }
    let mut out = vec![0.0; dst_edges.len() - 1];
    let (mut i, mut j) = (0, 0);
    while i < counts.len() && j < out.len() {
        let (s_lo, s_hi) = (src_edges[i], src_edges[i + 1]);
        let (d_lo, d_hi) = (dst_edges[j], dst_edges[j + 1]);
        let overlap = s_hi.min(d_hi) - s_lo.max(d_lo);
        if overlap > 0.0 {
            out[j] += counts[i] * (overlap / (s_hi - s_lo));
        }
        if s_hi <= d_hi {
            i += 1;
        } else {
            j += 1;
        }
    }
    Ok(out)
}

/// Resamples a histogram recorded under the drifted calibration
/// `energy(c)·(1 + linear_term)` back onto the nominal channel grid.
///
/// Counts pushed past the last channel are clipped.
pub fn apply_gain_shift(hist: &Histogram, cal: &Calibration, linear_term: f64, bound: f64) -> Result<Histogram> {
    if !linear_term.is_finite() || linear_term.abs() > bound {
        return Err(Error::arg(format!("gain-shift term {linear_term} exceeds bound {bound}")));
    }
    if 1.0 + linear_term <= 0.0 {
        return Err(Error::arg("gain shift makes calibration non-monotone"));
    }
    if linear_term == 0.0 {
        return Ok(hist.clone());
    }
    let nominal = cal.edges();
    let shifted: Vec<f64> = nominal.iter().map(|e| e * (1.0 + linear_term)).collect();
    let counts = rebin(hist.counts(), &shifted, &nominal)?;
    Ok(hist.replace_counts(counts))
}

/// Linear mix `f·hist + (1 − f)·background`, with the background first scaled
/// to the same total as `hist`.
pub fn add_background(hist: &Histogram, background: &Histogram, signal_fraction: f64) -> Result<Histogram> {
    if !(signal_fraction > 0.0 && signal_fraction <= 1.0) {
        return Err(Error::arg(format!("signal fraction {signal_fraction} outside (0, 1]")));
    }
    let total = hist.total();
    let bg_total = background.total();
    let bg_scale = if bg_total > 0.0 { total / bg_total } else { 0.0 };
    let counts = hist
        .counts()
        .iter()
        .zip(background.counts())
        .map(|(s, b)| signal_fraction * s + (1.0 - signal_fraction) * b * bg_scale)
        .collect();
    Ok(hist.replace_counts(counts))
}

/// Draws integer counts per channel from `Poisson(total · share)` where
/// `share` is the channel's fraction of the histogram total.
pub fn poisson_resample<R: Rng + ?Sized>(hist: &Histogram, target_total: f64, rng: &mut R) -> Result<Histogram> {
    if !(target_total > 0.0 && target_total.is_finite()) {
        return Err(Error::arg("target total must be positive"));
    }
    let total = hist.total();
    if total <= 0.0 {
        return Err(Error::Degenerate("cannot resample an empty histogram".into()));
    }
    let scale = target_total / total;
    let mut counts = Vec::with_capacity(NUM_CHANNELS);
    for &c in hist.counts() {
        let lambda = c * scale;
        let draw = if lambda > 0.0 {
            Poisson::new(lambda).map_err(|e| Error::arg(format!("poisson rate {lambda}: {e}")))?.sample(rng)
        } else {
            0.0
        };
        counts.push(draw);
    }
    Ok(hist.replace_counts(counts))
}

/// Divides by the channel sum so the result sums to one.
pub fn normalize(hist: &Histogram) -> Result<NormalizedSpectrum> {
    let total = hist.total();
    if total <= 0.0 {
        return Err(Error::Degenerate("histogram has no counts".into()));
    }
    let probs = hist.counts().iter().map(|c| c / total).collect();
    Ok(NormalizedSpectrum { probs, label: hist.label })
}
