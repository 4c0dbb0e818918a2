//! Event-driven convolutional spiking network toolchain for gamma-ray
//! isotope identification.
//!
//! The pipeline runs in five stages, each in its own module:
//!
//! - [`spectra`] synthesizes labelled 1,024-channel histograms from
//!   parametric isotope templates (render, gain shift, background, normalize).
//! - [`events`] turns a normalized spectrum into a clocked stream of AER
//!   photon events, at most one per timestep.
//! - [`cann`] trains the frame-based conv → average-pool → dense network,
//!   with optional quantization-aware training to int8 weights.
//! - [`convert`] folds the int8 network into an integrate-and-fire model and
//!   emits the ROM weight image.
//! - [`snn`] runs event-driven inference with TDM-ordered membrane updates
//!   and per-layer operation counters.
//!
//! [`harness`] wraps the engine in a framed serial protocol (driver,
//! device-side responder, batch runner), and [`io`] holds the text formats
//! for datasets, models and event streams.

pub mod cann;
pub mod convert;
pub mod error;
pub mod events;
pub mod harness;
pub mod io;
pub mod snn;
pub mod spectra;

mod rng;

pub use error::{Error, ProtocolError, Result};

/// Number of energy channels in every histogram and in the input layer.
pub const NUM_CHANNELS: usize = 1024;

/// Class labels, in class-index order.
pub const ISOTOPES: [&str; 8] = ["Am-241", "Ba-133", "Co-57", "Co-60", "Cs-137", "Eu-152", "Ra-226", "Th-232"];

/// Index of the largest value, ties going to the lowest index.
///
/// Returns `(index, tie)` where `tie` is true when the maximum is not unique.
/// An empty slice yields `(0, true)`.
pub fn argmax_lowest<T: PartialOrd + Copy>(values: &[T]) -> (usize, bool) {
    let Some(&first) = values.first() else {
        return (0, true);
    };
    let mut best = 0;
    let mut best_val = first;
    let mut tie = false;
    for (i, &v) in values.iter().enumerate().skip(1) {
        if v > best_val {
            best = i;
            best_val = v;
            tie = false;
        } else if v == best_val {
            tie = true;
        }
    }
    (best, tie)
}

#[cfg(test)]
mod tests {
    use super::argmax_lowest;

    #[test]
    fn argmax_prefers_lowest_index() {
        assert_eq!(argmax_lowest(&[1, 3, 3, 0]), (1, true));
        assert_eq!(argmax_lowest(&[5, 3, 4]), (0, false));
        assert_eq!(argmax_lowest(&[0u32; 8]), (0, true));
        assert_eq!(argmax_lowest::<u32>(&[]), (0, true));
        assert_eq!(argmax_lowest(&[1.0, 2.0, 0.5]), (1, false));
    }

    #[test]
    fn tie_only_counts_for_the_maximum() {
        assert_eq!(argmax_lowest(&[1, 1, 4]), (2, false));
    }
}
