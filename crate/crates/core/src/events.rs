//! Clocked photon-event streams.
//!
//! The detector reports at most one photon per timestep. Each timestep holds
//! an event with probability `rate`, independently, and the event's channel
//! is drawn from the normalized spectrum. Gaps between events are drawn as
//! geometric variates, which gives the same distribution as a per-timestep
//! Bernoulli trial without visiting empty timesteps.

use rand::distr::weighted::WeightedIndex;
use rand::distr::Distribution;
use rand_distr::Geometric;

use crate::rng::rng_from;
use crate::spectra::{NormalizedSpectrum, NORMALIZATION_TOLERANCE};
use crate::{Error, Result, NUM_CHANNELS};

/// Default clock of the event model: timesteps per second of acquisition.
pub const DEFAULT_TIMESTEPS_PER_SECOND: u64 = 10_000;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct PhotonEvent {
    pub timestep: u64,
    pub channel: u16,
}

#[derive(Debug, Clone, PartialEq)]
pub struct EventStream {
    events: Vec<PhotonEvent>,
    duration: u64,
    rate: f64,
    seed: u64,
}

impl EventStream {
    /// Builds a stream from explicit events, checking ordering and ranges.
    pub fn new(events: Vec<PhotonEvent>, duration: u64, rate: f64, seed: u64) -> Result<Self> {
        check_rate(rate)?;
        if let Some(w) = events.windows(2).find(|w| w[1].timestep <= w[0].timestep) {
            return Err(Error::arg(format!("event timesteps not strictly increasing at {}", w[1].timestep)));
        }
        if let Some(e) = events.iter().find(|e| e.channel as usize >= NUM_CHANNELS) {
            return Err(Error::arg(format!("event channel {} out of range", e.channel)));
        }
        if let Some(last) = events.last() {
            if last.timestep >= duration {
                return Err(Error::arg(format!("event at timestep {} beyond duration {duration}", last.timestep)));
            }
        }
        Ok(EventStream { events, duration, rate, seed })
    }

    pub fn events(&self) -> &[PhotonEvent] {
        &self.events
    }

    pub fn len(&self) -> usize {
        self.events.len()
    }

    pub fn is_empty(&self) -> bool {
        self.events.is_empty()
    }

    pub fn duration(&self) -> u64 {
        self.duration
    }

    pub fn rate(&self) -> f64 {
        self.rate
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn channels(&self) -> impl Iterator<Item = u16> + '_ {
        self.events.iter().map(|e| e.channel)
    }
}

fn check_rate(rate: f64) -> Result<()> {
    if !(rate > 0.0 && rate <= 1.0) {
        return Err(Error::arg(format!("event rate {rate} outside (0, 1]")));
    }
    Ok(())
}

/// Samples a stream of `duration` timesteps from `spectrum`.
///
/// Works for spectra of any length up to [`NUM_CHANNELS`], so toy networks
/// with short inputs can be driven the same way.
pub fn sample_events(spectrum: &NormalizedSpectrum, rate: f64, duration: u64, seed: u64) -> Result<EventStream> {
    check_rate(rate)?;
    if duration == 0 {
        return Err(Error::arg("duration must be positive"));
    }
    let probs = spectrum.probs();
    if probs.len() > NUM_CHANNELS {
        return Err(Error::arg("spectrum longer than the channel range"));
    }
    let sum: f64 = probs.iter().sum();
    if (sum - 1.0).abs() > NORMALIZATION_TOLERANCE || probs.iter().any(|p| *p < 0.0) {
        return Err(Error::arg(format!("spectrum is not normalized (sum {sum})")));
    }
    let channels = WeightedIndex::new(probs).map_err(|e| Error::arg(format!("spectrum weights: {e}")))?;
    let gaps = Geometric::new(rate).map_err(|e| Error::arg(format!("rate {rate}: {e}")))?;

    let mut rng = rng_from(seed);
    let mut events = Vec::with_capacity((duration as f64 * rate * 1.05) as usize + 16);
    let mut t = gaps.sample(&mut rng);
    while t < duration {
        events.push(PhotonEvent { timestep: t, channel: channels.sample(&mut rng) as u16 });
        t = match t.checked_add(1 + gaps.sample(&mut rng)) {
            Some(next) => next,
            None => break,
        };
    }
    Ok(EventStream { events, duration, rate, seed })
}

/// Empirical channel histogram of a stream.
pub fn stream_channel_counts(stream: &EventStream) -> Vec<u64> {
    let mut counts = vec![0u64; NUM_CHANNELS];
    for e in stream.events() {
        counts[e.channel as usize] += 1;
    }
    counts
}

/// Timesteps covering `seconds` of acquisition at `timesteps_per_second`.
pub fn duration_for_seconds(seconds: f64, timesteps_per_second: u64) -> u64 {
    (seconds * timesteps_per_second as f64).round() as u64
}
