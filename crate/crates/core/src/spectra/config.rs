use std::path::Path;

use serde::Deserialize;

use super::{Calibration, Histogram, IsotopeTemplate, DEFAULT_GAIN_SHIFT_BOUND};
use crate::{Error, Result, ISOTOPES, NUM_CHANNELS};

const DEFAULT_CONFIG: &str = include_str!("../../data/generator.toml");
const CONFIG_VERSION: u32 = 1;

/// Background shape: flat floor plus a low-energy exponential rise.
#[derive(Debug, Clone, Copy, PartialEq, Deserialize)]
pub struct BackgroundModel {
    pub flat: f64,
    pub exp_amplitude: f64,
    pub exp_scale_kev: f64,
}

impl BackgroundModel {
    pub fn render(&self, cal: &Calibration) -> Result<Histogram> {
        if !(self.flat >= 0.0 && self.exp_amplitude >= 0.0 && self.exp_scale_kev > 0.0) {
            return Err(Error::Config("background terms must be non-negative".into()));
        }
        let counts: Vec<f64> = (0..NUM_CHANNELS)
            .map(|c| {
                let e = cal.energy(c as f64 + 0.5).max(0.0);
                self.flat + self.exp_amplitude * (-e / self.exp_scale_kev).exp()
            })
            .collect();
        let total: f64 = counts.iter().sum();
        if total <= 0.0 {
            return Err(Error::Config("background is identically zero".into()));
        }
        Histogram::new(counts.into_iter().map(|c| c / total).collect(), None)
    }
}

/// Sampling knobs of the dataset generator.
#[derive(Debug, Clone, PartialEq, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GeneratorSettings {
    pub variants_per_isotope: usize,
    #[serde(default = "default_folds")]
    pub folds: u8,
    pub distances_cm: Vec<f64>,
    pub reference_distance_cm: f64,
    pub reference_rate_cps: f64,
    pub integration_time_s: f64,
    pub gain_shift_max: f64,
    pub signal_fraction: [f64; 2],
}

fn default_folds() -> u8 {
    5
}

impl GeneratorSettings {
    /// Expected count total at `distance_cm`, inverse-square scaled.
    pub fn expected_total(&self, distance_cm: f64) -> f64 {
        let r = self.reference_distance_cm / distance_cm;
        self.reference_rate_cps * r * r * self.integration_time_s
    }
}

/// Full generator configuration: calibration, templates, background and
/// sampling settings.
#[derive(Debug, Clone, PartialEq, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GeneratorConfig {
    pub version: u32,
    pub calibration: Calibration,
    pub generator: GeneratorSettings,
    pub background: BackgroundModel,
    #[serde(rename = "isotope")]
    pub isotopes: Vec<IsotopeTemplate>,
}

impl Default for GeneratorConfig {
    fn default() -> Self {
        GeneratorConfig::from_toml(DEFAULT_CONFIG).expect("shipped generator config is valid")
    }
}

impl GeneratorConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: GeneratorConfig = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        if self.version != CONFIG_VERSION {
            return Err(Error::Config(format!(
                "unsupported config version {} (expected {CONFIG_VERSION})",
                self.version
            )));
        }
        self.calibration.validate()?;
        let g = &self.generator;
        if g.variants_per_isotope == 0 {
            return Err(Error::Config("variants_per_isotope must be positive".into()));
        }
        if !(1..=5).contains(&g.folds) {
            return Err(Error::Config("folds must be between 1 and 5".into()));
        }
        if g.distances_cm.is_empty() || g.distances_cm.iter().any(|d| d.is_nan() || *d <= 0.0) {
            return Err(Error::Config("need at least one positive distance".into()));
        }
        if !(g.reference_distance_cm > 0.0 && g.reference_rate_cps > 0.0 && g.integration_time_s > 0.0) {
            return Err(Error::Config("reference distance, rate and time must be positive".into()));
        }
        if !(0.0..=DEFAULT_GAIN_SHIFT_BOUND).contains(&g.gain_shift_max) {
            return Err(Error::Config(format!("gain_shift_max must be in [0, {DEFAULT_GAIN_SHIFT_BOUND}]")));
        }
        let [lo, hi] = g.signal_fraction;
        if !(lo > 0.0 && lo <= hi && hi <= 1.0) {
            return Err(Error::Config("signal_fraction must satisfy 0 < lo <= hi <= 1".into()));
        }
        if self.isotopes.len() != ISOTOPES.len() {
            return Err(Error::Config(format!("expected {} isotopes, found {}", ISOTOPES.len(), self.isotopes.len())));
        }
        for name in ISOTOPES {
            let n = self.isotopes.iter().filter(|t| t.name == name).count();
            if n != 1 {
                return Err(Error::Config(format!("isotope {name} must appear exactly once")));
            }
        }
        for t in &self.isotopes {
            t.validate().map_err(|e| Error::Config(e.to_string()))?;
        }
        Ok(())
    }

    /// Templates ordered by class index.
    pub fn templates_by_class(&self) -> Vec<&IsotopeTemplate> {
        ISOTOPES.iter().map(|name| self.isotopes.iter().find(|t| t.name == *name).expect("validated")).collect()
    }
}

pub fn load_config(path: &Path) -> Result<GeneratorConfig> {
    GeneratorConfig::from_toml(&std::fs::read_to_string(path)?)
}
