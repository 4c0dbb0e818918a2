use rand::Rng;
use rayon::prelude::*;

use super::{
    add_background, apply_gain_shift, normalize, poisson_resample, render_template, GeneratorConfig, Histogram,
    NormalizedSpectrum, SampleMeta, DEFAULT_GAIN_SHIFT_BOUND,
};
use crate::rng::{derive_seed, rng_from};
use crate::{Error, Result, ISOTOPES};

/// A labelled, normalized spectrum with its cross-validation fold.
#[derive(Debug, Clone, PartialEq)]
pub struct Sample {
    pub spectrum: NormalizedSpectrum,
    pub fold: u8,
    pub meta: SampleMeta,
}

impl Sample {
    pub fn label(&self) -> usize {
        self.spectrum.label.expect("dataset samples are labelled")
    }
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct Dataset {
    samples: Vec<Sample>,
}

impl Dataset {
    pub fn new(samples: Vec<Sample>) -> Result<Self> {
        for (i, s) in samples.iter().enumerate() {
            match s.spectrum.label {
                Some(l) if l < ISOTOPES.len() => {}
                _ => return Err(Error::arg(format!("sample {i} lacks a valid label"))),
            }
            if s.fold > 4 {
                return Err(Error::arg(format!("sample {i} has fold {} (> 4)", s.fold)));
            }
        }
        Ok(Dataset { samples })
    }

    pub fn samples(&self) -> &[Sample] {
        &self.samples
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    /// Splits into (training, test) where test holds fold `test_fold`.
    pub fn split(&self, test_fold: u8) -> (Dataset, Dataset) {
        let (test, train): (Vec<_>, Vec<_>) = self.samples.iter().cloned().partition(|s| s.fold == test_fold);
        (Dataset { samples: train }, Dataset { samples: test })
    }

    pub fn fold(&self, fold: u8) -> Dataset {
        self.split(fold).1
    }

    pub fn class_counts(&self) -> [usize; ISOTOPES.len()] {
        let mut counts = [0; ISOTOPES.len()];
        for s in &self.samples {
            counts[s.label()] += 1;
        }
        counts
    }
}

impl FromIterator<Sample> for Dataset {
    fn from_iter<I: IntoIterator<Item = Sample>>(iter: I) -> Self {
        Dataset { samples: iter.into_iter().collect() }
    }
}

/// Generates `variants_per_isotope` samples per class.
///
/// Sample `v` of class `k` uses distance `distances[v % n]`, fold `v % folds`,
/// and an RNG seeded from `(seed, k, v)` alone, so the output depends only
/// on `(config, seed)` whatever the degree of parallelism.
pub fn synthesize_dataset(config: &GeneratorConfig, seed: u64) -> Result<Dataset> {
    config.validate()?;
    let cal = config.calibration;
    let settings = &config.generator;
    let background = config.background.render(&cal)?;
    let templates: Vec<Histogram> =
        config.templates_by_class().into_iter().map(|t| render_template(t, &cal)).collect::<Result<_>>()?;

    let per_class = settings.variants_per_isotope;
    let samples = (0..templates.len() * per_class)
        .into_par_iter()
        .map(|idx| {
            let (class, variant) = (idx / per_class, idx % per_class);
            let sample_seed = derive_seed(derive_seed(seed, class as u64), variant as u64);
            let mut rng = rng_from(sample_seed);
            let distance = settings.distances_cm[variant % settings.distances_cm.len()];
            let g = settings.gain_shift_max;
            let linear_term = if g > 0.0 { rng.random_range(-g..=g) } else { 0.0 };
            let [lo, hi] = settings.signal_fraction;
            let signal_fraction = if hi > lo { rng.random_range(lo..=hi) } else { lo };

            let shifted = apply_gain_shift(&templates[class], &cal, linear_term, DEFAULT_GAIN_SHIFT_BOUND)?;
            let mixed = add_background(&shifted, &background, signal_fraction)?;
            let counted = poisson_resample(&mixed, settings.expected_total(distance), &mut rng)?;
            let meta =
                SampleMeta { distance_cm: distance, integration_s: settings.integration_time_s, seed: sample_seed };
            let mut spectrum = normalize(&counted)?;
            spectrum.label = Some(class);
            Ok(Sample { spectrum, fold: (variant % settings.folds as usize) as u8, meta })
        })
        .collect::<Result<Vec<_>>>()?;
    Dataset::new(samples)
}
