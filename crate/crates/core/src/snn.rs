//! Event-driven integrate-and-fire inference.
//!
//! One engine emulates the TDM datapath: each AER input event updates the
//! conv neurons whose receptive field covers its channel, filter by filter
//! in series; conv spikes then update their pool neurons, and pool spikes
//! update every output neuron. Stages run breadth-first, so all conv updates
//! of an event precede its pool updates, which precede its dense updates.
//!
//! Membranes are 16-bit. Each update adds one weight, fires and subtracts the
//! threshold once if the result reaches it, and clamps to the layer floor.
//! The leak term is zero.

use std::fmt;

use crate::convert::{LayerParams, SnnModel};
use crate::events::EventStream;
use crate::{argmax_lowest, Error, Result};

/// One integrate-and-fire update: add `w`, fire with reset by subtraction
/// at `v_thr`, clamp at `v_min`.
#[inline]
pub fn neuron_update(v: i32, w: i32, v_thr: i32, v_min: i32) -> (i32, bool) {
    let v = v.saturating_add(w);
    if v >= v_thr {
        (v - v_thr, true)
    } else if v < v_min {
        (v_min, false)
    } else {
        (v, false)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Layer {
    Conv,
    Pool,
    Fc,
}

impl fmt::Display for Layer {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Layer::Conv => "conv",
            Layer::Pool => "pool",
            Layer::Fc => "fc",
        })
    }
}

/// Membrane-update tallies per layer.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub struct OpCounts {
    pub conv: u64,
    pub pool: u64,
    pub fc: u64,
}

impl OpCounts {
    pub fn total(&self) -> u64 {
        self.conv + self.pool + self.fc
    }

    fn since(&self, earlier: &OpCounts) -> OpCounts {
        OpCounts { conv: self.conv - earlier.conv, pool: self.pool - earlier.pool, fc: self.fc - earlier.fc }
    }
}

/// One membrane update, as written in trace mode.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct TraceRecord {
    pub layer: Layer,
    pub neuron: usize,
    pub weight: i32,
    pub v: i32,
    pub fired: bool,
}

impl fmt::Display for TraceRecord {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{},{},{},{},{}", self.layer, self.neuron, self.weight, self.v, u8::from(self.fired))
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct InferenceResult {
    pub class_counts: Vec<u32>,
    pub predicted: usize,
    pub tie: bool,
    pub ops: OpCounts,
    pub events_consumed: u64,
}

impl InferenceResult {
    pub fn from_counts(class_counts: Vec<u32>, ops: OpCounts, events_consumed: u64) -> Self {
        let (predicted, tie) = argmax_lowest(&class_counts);
        InferenceResult { class_counts, predicted, tie, ops, events_consumed }
    }
}

impl fmt::Display for InferenceResult {
    /// `counts=.. predicted=.. tie=.. events=.. ops_conv=.. ops_pool=.. ops_fc=.. ops_total=..`
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let counts: Vec<String> = self.class_counts.iter().map(|c| c.to_string()).collect();
        write!(
            f,
            "counts={} predicted={} tie={} events={} ops_conv={} ops_pool={} ops_fc={} ops_total={}",
            counts.join(","),
            self.predicted,
            self.tie,
            self.events_consumed,
            self.ops.conv,
            self.ops.pool,
            self.ops.fc,
            self.ops.total()
        )
    }
}

/// Mutable engine state: all membranes, output counters and op tallies.
#[derive(Debug, Clone, PartialEq)]
pub struct Engine {
    model: SnnModel,
    conv_v: Vec<i16>,
    pool_v: Vec<i16>,
    out_v: Vec<i16>,
    class_counts: Vec<u32>,
    ops: OpCounts,
    events: u64,
    conv_spikes: Vec<usize>,
    pool_spikes: Vec<usize>,
    out_spikes: Vec<usize>,
    trace: Option<Vec<TraceRecord>>,
}

#[inline]
fn update(
    membrane: &mut i16,
    w: i32,
    params: LayerParams,
    layer: Layer,
    neuron: usize,
    trace: &mut Option<Vec<TraceRecord>>,
) -> bool {
    let (v, fired) = neuron_update(*membrane as i32, w, params.threshold, params.v_min);
    debug_assert!(v >= params.v_min && v < params.threshold);
    *membrane = v as i16;
    if let Some(t) = trace {
        t.push(TraceRecord { layer, neuron, weight: w, v, fired });
    }
    fired
}

impl Engine {
    /// Fresh engine; fails if the model breaks the membrane bounds.
    pub fn new(model: SnnModel) -> Result<Self> {
        model.validate()?;
        let a = model.arch;
        Ok(Engine {
            conv_v: vec![0; a.num_filters * a.conv_len()],
            pool_v: vec![0; a.pooled_len()],
            out_v: vec![0; a.num_classes],
            class_counts: vec![0; a.num_classes],
            ops: OpCounts::default(),
            events: 0,
            conv_spikes: Vec::with_capacity(a.num_filters * a.kernel_size),
            pool_spikes: Vec::with_capacity(a.num_filters * a.kernel_size),
            out_spikes: Vec::with_capacity(a.num_classes),
            trace: None,
            model,
        })
    }

    /// Records every membrane update until [`Self::take_trace`].
    pub fn enable_trace(&mut self) {
        self.trace = Some(Vec::new());
    }

    pub fn take_trace(&mut self) -> Vec<TraceRecord> {
        self.trace.as_mut().map(std::mem::take).unwrap_or_default()
    }

    pub fn model(&self) -> &SnnModel {
        &self.model
    }

    pub fn ops(&self) -> OpCounts {
        self.ops
    }

    pub fn class_counts(&self) -> &[u32] {
        &self.class_counts
    }

    pub fn events_consumed(&self) -> u64 {
        self.events
    }

    pub fn conv_membranes(&self) -> &[i16] {
        &self.conv_v
    }

    pub fn pool_membranes(&self) -> &[i16] {
        &self.pool_v
    }

    pub fn output_membranes(&self) -> &[i16] {
        &self.out_v
    }

    /// Conv and pool spikes emitted by the most recent event, in processing
    /// order (`f * conv_len + p` and `f * pooled_per_map + m`).
    pub fn last_hidden_spikes(&self) -> (&[usize], &[usize]) {
        (&self.conv_spikes, &self.pool_spikes)
    }

    /// Zeros membranes and counters; the model is kept. Trace mode stays
    /// as it was, with the buffer cleared.
    pub fn reset(&mut self) {
        self.conv_v.fill(0);
        self.pool_v.fill(0);
        self.out_v.fill(0);
        self.class_counts.fill(0);
        self.ops = OpCounts::default();
        self.events = 0;
        self.conv_spikes.clear();
        self.pool_spikes.clear();
        self.out_spikes.clear();
        if let Some(t) = &mut self.trace {
            t.clear();
        }
    }

    /// Processes one input spike on `channel`; returns the classes whose
    /// output neuron fired.
    pub fn process_event(&mut self, channel: usize) -> Result<&[usize]> {
        let a = self.model.arch;
        if channel >= a.input_len {
            return Err(Error::arg(format!("channel {channel} outside 0..{}", a.input_len)));
        }
        let (k_len, conv_len, pool, pooled, classes) =
            (a.kernel_size, a.conv_len(), a.pool_size, a.pooled_per_map(), a.num_classes);
        self.events += 1;
        self.conv_spikes.clear();
        self.pool_spikes.clear();
        self.out_spikes.clear();

        // positions p with p <= channel <= p + K - 1
        let first = channel.saturating_sub(k_len - 1);
        let last = channel.min(conv_len - 1);
        for f in 0..a.num_filters {
            for p in first..=last {
                let neuron = f * conv_len + p;
                let w = self.model.conv_w[f * k_len + (channel - p)];
                self.ops.conv += 1;
                if update(&mut self.conv_v[neuron], w, self.model.conv, Layer::Conv, neuron, &mut self.trace) {
                    self.conv_spikes.push(neuron);
                }
            }
        }

        for &neuron in &self.conv_spikes {
            let (f, p) = (neuron / conv_len, neuron % conv_len);
            let m = p / pool;
            if m >= pooled {
                continue;
            }
            let j = f * pooled + m;
            self.ops.pool += 1;
            if update(&mut self.pool_v[j], self.model.pool_w, self.model.pool, Layer::Pool, j, &mut self.trace) {
                self.pool_spikes.push(j);
            }
        }

        for &j in &self.pool_spikes {
            let row = &self.model.fc_w[j * classes..(j + 1) * classes];
            for (c, &w) in row.iter().enumerate() {
                self.ops.fc += 1;
                if update(&mut self.out_v[c], w, self.model.fc, Layer::Fc, c, &mut self.trace) {
                    self.class_counts[c] += 1;
                    self.out_spikes.push(c);
                }
            }
        }
        Ok(&self.out_spikes)
    }

    /// Feeds every event of `stream` in timestep order.
    pub fn run(&mut self, stream: &EventStream) -> Result<()> {
        for ch in stream.channels() {
            self.process_event(ch as usize)?;
        }
        Ok(())
    }

    /// Snapshot of the counters since the last reset.
    pub fn result(&self) -> InferenceResult {
        InferenceResult::from_counts(self.class_counts.clone(), self.ops, self.events)
    }

    /// Op counts of the next event, for per-event bounds checks.
    pub fn process_event_counted(&mut self, channel: usize) -> Result<OpCounts> {
        let before = self.ops;
        self.process_event(channel)?;
        Ok(self.ops.since(&before))
    }
}

/// Fresh engine, whole stream, final counts.
pub fn run_inference(model: &SnnModel, stream: &EventStream) -> Result<InferenceResult> {
    let mut engine = Engine::new(model.clone())?;
    engine.run(stream)?;
    Ok(engine.result())
}
