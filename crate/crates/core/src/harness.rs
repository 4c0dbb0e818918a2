//! Framed serial protocol between a host driver and a device running the
//! spiking engine, plus the batch runner built on it.
//!
//! Host to device, every frame is one 16-bit big-endian word:
//!
//! ```text
//!  15 14 | 13 .. 10 | 9 .. 0
//! opcode |   0000   | payload
//! ```
//!
//! Opcode `00` is EVENT (payload = channel), `01` COLLECT, `10` RESET and
//! `11` is reserved. Control frames carry a zero payload. Only COLLECT gets
//! a reply: tag `0x52`, one little-endian `u32` count per class, then a
//! little-endian `u16` checksum equal to the byte sum of everything before
//! it, mod 65536.

use std::collections::{BTreeSet, VecDeque};
use std::fmt;
use std::io::{ErrorKind, Read, Write};
use std::net::{TcpStream, ToSocketAddrs};
use std::time::Duration;

use rayon::prelude::*;

use crate::convert::SnnModel;
use crate::error::ProtocolError;
use crate::events::{sample_events, EventStream, DEFAULT_TIMESTEPS_PER_SECOND};
use crate::rng::derive_seed;
use crate::snn::{Engine, InferenceResult, OpCounts};
use crate::spectra::{Dataset, NormalizedSpectrum};
use crate::{Error, Result, ISOTOPES, NUM_CHANNELS};

pub const RESULT_TAG: u8 = 0x52;
pub const DEFAULT_TIMEOUT: Duration = Duration::from_secs(5);

const OPCODE_SHIFT: u16 = 14;
const PADDING_MASK: u16 = 0x3c00;
const PAYLOAD_MASK: u16 = 0x03ff;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Frame {
    Event(u16),
    Collect,
    Reset,
}

pub fn encode_frame(frame: Frame) -> Result<[u8; 2]> {
    let word = match frame {
        Frame::Event(ch) if usize::from(ch) >= NUM_CHANNELS => {
            return Err(Error::arg(format!("event channel {ch} outside 0..{NUM_CHANNELS}")))
        }
        Frame::Event(ch) => ch,
        Frame::Collect => 1 << OPCODE_SHIFT,
        Frame::Reset => 2 << OPCODE_SHIFT,
    };
    Ok(word.to_be_bytes())
}

pub fn decode_frame(bytes: [u8; 2]) -> Result<Frame, ProtocolError> {
    let word = u16::from_be_bytes(bytes);
    if word & PADDING_MASK != 0 {
        return Err(ProtocolError::NonzeroPadding(word));
    }
    let payload = word & PAYLOAD_MASK;
    match word >> OPCODE_SHIFT {
        0 => Ok(Frame::Event(payload)),
        1 | 2 if payload != 0 => Err(ProtocolError::UnexpectedPayload(word)),
        1 => Ok(Frame::Collect),
        2 => Ok(Frame::Reset),
        _ => Err(ProtocolError::ReservedOpcode(word)),
    }
}

fn checksum(bytes: &[u8]) -> u16 {
    bytes.iter().fold(0u16, |acc, &b| acc.wrapping_add(u16::from(b)))
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ResultMessage {
    pub counts: Vec<u32>,
}

impl ResultMessage {
    pub fn encoded_len(num_classes: usize) -> usize {
        1 + 4 * num_classes + 2
    }

    pub fn encode(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(Self::encoded_len(self.counts.len()));
        out.push(RESULT_TAG);
        for c in &self.counts {
            out.extend_from_slice(&c.to_le_bytes());
        }
        out.extend_from_slice(&checksum(&out).to_le_bytes());
        out
    }

    pub fn decode(bytes: &[u8], num_classes: usize) -> Result<Self, ProtocolError> {
        let expected = Self::encoded_len(num_classes);
        if bytes.len() != expected {
            return Err(ProtocolError::Length { got: bytes.len(), expected });
        }
        if bytes[0] != RESULT_TAG {
            return Err(ProtocolError::BadTag(bytes[0]));
        }
        let (body, tail) = bytes.split_at(expected - 2);
        let stated = u16::from_le_bytes([tail[0], tail[1]]);
        let computed = checksum(body);
        if stated != computed {
            return Err(ProtocolError::Checksum { stated, computed });
        }
        let counts = body[1..].chunks_exact(4).map(|c| u32::from_le_bytes([c[0], c[1], c[2], c[3]])).collect();
        Ok(ResultMessage { counts })
    }
}

/// Device side of the link: reassembles frames from arbitrary byte chunks
/// and drives an engine. Invalid frames are dropped and counted.
#[derive(Debug, Clone)]
pub struct Device {
    engine: Engine,
    pending: Option<u8>,
    rejected: Vec<ProtocolError>,
}

impl Device {
    pub fn new(model: SnnModel) -> Result<Self> {
        Ok(Device { engine: Engine::new(model)?, pending: None, rejected: Vec::new() })
    }

    pub fn engine(&self) -> &Engine {
        &self.engine
    }

    /// Frames dropped so far, with the reason for each.
    pub fn rejected(&self) -> &[ProtocolError] {
        &self.rejected
    }

    /// Consumes `bytes` and returns whatever the device sends back.
    pub fn feed(&mut self, bytes: &[u8]) -> Vec<u8> {
        let mut reply = Vec::new();
        let mut rest = bytes;
        if let Some(hi) = self.pending.take() {
            match rest.split_first() {
                Some((&lo, tail)) => {
                    self.handle([hi, lo], &mut reply);
                    rest = tail;
                }
                None => {
                    self.pending = Some(hi);
                    return reply;
                }
            }
        }
        let mut words = rest.chunks_exact(2);
        for w in &mut words {
            self.handle([w[0], w[1]], &mut reply);
        }
        if let [hi] = words.remainder() {
            self.pending = Some(*hi);
        }
        reply
    }

    fn handle(&mut self, bytes: [u8; 2], reply: &mut Vec<u8>) {
        match decode_frame(bytes) {
            Ok(Frame::Event(ch)) => {
                if self.engine.process_event(usize::from(ch)).is_err() {
                    self.rejected.push(ProtocolError::ChannelOutOfRange(ch));
                }
            }
            Ok(Frame::Collect) => {
                let msg = ResultMessage { counts: self.engine.class_counts().to_vec() };
                reply.extend_from_slice(&msg.encode());
            }
            Ok(Frame::Reset) => {
                self.engine.reset();
            }
            Err(e) => self.rejected.push(e),
        }
    }
}

/// Reliable ordered byte channel from the driver's point of view.
pub trait Transport {
    fn send(&mut self, bytes: &[u8]) -> Result<(), ProtocolError>;
    /// Blocks until exactly `n` bytes arrived or the timeout expires.
    fn recv(&mut self, n: usize) -> Result<Vec<u8>, ProtocolError>;
}

impl<T: Transport + ?Sized> Transport for &mut T {
    fn send(&mut self, bytes: &[u8]) -> Result<(), ProtocolError> {
        (**self).send(bytes)
    }

    fn recv(&mut self, n: usize) -> Result<Vec<u8>, ProtocolError> {
        (**self).recv(n)
    }
}

/// In-process link to a [`Device`]. Replies are produced synchronously, so
/// a short read can never be completed and is reported as a timeout.
#[derive(Debug, Clone)]
pub struct Loopback {
    device: Device,
    rx: VecDeque<u8>,
}

impl Loopback {
    pub fn new(model: SnnModel) -> Result<Self> {
        Ok(Loopback { device: Device::new(model)?, rx: VecDeque::new() })
    }

    pub fn device(&self) -> &Device {
        &self.device
    }
}

impl Transport for Loopback {
    fn send(&mut self, bytes: &[u8]) -> Result<(), ProtocolError> {
        let reply = self.device.feed(bytes);
        self.rx.extend(reply);
        Ok(())
    }

    fn recv(&mut self, n: usize) -> Result<Vec<u8>, ProtocolError> {
        if self.rx.len() < n {
            return Err(ProtocolError::Timeout);
        }
        Ok(self.rx.drain(..n).collect())
    }
}

/// Wraps a transport and flips the low checksum bit of selected replies
/// (counted from zero in arrival order).
#[derive(Debug, Clone)]
pub struct CorruptChecksum<T> {
    inner: T,
    targets: BTreeSet<usize>,
    received: usize,
}

impl<T: Transport> CorruptChecksum<T> {
    pub fn new(inner: T, targets: impl IntoIterator<Item = usize>) -> Self {
        CorruptChecksum { inner, targets: targets.into_iter().collect(), received: 0 }
    }

    pub fn into_inner(self) -> T {
        self.inner
    }
}

impl<T: Transport> Transport for CorruptChecksum<T> {
    fn send(&mut self, bytes: &[u8]) -> Result<(), ProtocolError> {
        self.inner.send(bytes)
    }

    fn recv(&mut self, n: usize) -> Result<Vec<u8>, ProtocolError> {
        let mut bytes = self.inner.recv(n)?;
        if self.targets.contains(&self.received) {
            if let Some(last) = bytes.last_mut() {
                *last ^= 0x01;
            }
        }
        self.received += 1;
        Ok(bytes)
    }
}

/// Driver end of a TCP link to a device served by [`serve_device`].
#[derive(Debug)]
pub struct TcpTransport {
    stream: TcpStream,
}

fn transport_err(e: std::io::Error) -> ProtocolError {
    match e.kind() {
        ErrorKind::WouldBlock | ErrorKind::TimedOut => ProtocolError::Timeout,
        _ => ProtocolError::Transport(e.to_string()),
    }
}

impl TcpTransport {
    pub fn connect(addr: impl ToSocketAddrs, timeout: Duration) -> Result<Self> {
        let stream = TcpStream::connect(addr)?;
        stream.set_read_timeout(Some(timeout))?;
        stream.set_nodelay(true)?;
        Ok(TcpTransport { stream })
    }
}

impl Transport for TcpTransport {
    fn send(&mut self, bytes: &[u8]) -> Result<(), ProtocolError> {
        self.stream.write_all(bytes).map_err(transport_err)
    }

    fn recv(&mut self, n: usize) -> Result<Vec<u8>, ProtocolError> {
        let mut buf = vec![0; n];
        self.stream.read_exact(&mut buf).map_err(transport_err)?;
        Ok(buf)
    }
}

/// Runs `device` on one connection until the peer closes it.
pub fn serve_device(mut stream: TcpStream, device: &mut Device) -> Result<()> {
    stream.set_nodelay(true)?;
    let mut buf = [0u8; 8192];
    loop {
        let n = match stream.read(&mut buf) {
            Ok(0) => return Ok(()),
            Ok(n) => n,
            Err(e) if e.kind() == ErrorKind::Interrupted => continue,
            Err(e) => return Err(e.into()),
        };
        let reply = device.feed(&buf[..n]);
        if !reply.is_empty() {
            stream.write_all(&reply)?;
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Entry {
    Sample(usize),
    /// Run of consecutive EVENT frames.
    Events(u64),
    Collect,
    Result(Vec<u32>),
    Error(ProtocolError),
    Reset,
}

impl fmt::Display for Entry {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Entry::Sample(i) => write!(f, "sample {i}"),
            Entry::Events(n) => write!(f, "events {n}"),
            Entry::Collect => f.write_str("collect"),
            Entry::Result(c) => {
                let c: Vec<String> = c.iter().map(u32::to_string).collect();
                write!(f, "result {}", c.join(","))
            }
            Entry::Error(e) => write!(f, "error {e}"),
            Entry::Reset => f.write_str("reset"),
        }
    }
}

/// Ordered log of driver traffic, one line per [`Entry`] when displayed.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct Transcript {
    entries: Vec<Entry>,
}

impl Transcript {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn entries(&self) -> &[Entry] {
        &self.entries
    }

    pub fn push(&mut self, entry: Entry) {
        if let (Entry::Events(n), Some(Entry::Events(prev))) = (&entry, self.entries.last_mut()) {
            *prev += n;
            return;
        }
        self.entries.push(entry);
    }

    pub fn append(&mut self, other: Transcript) {
        for e in other.entries {
            self.push(e);
        }
    }

    /// Checks `(sample [events] (collect (result | error) | error) reset)*`.
    pub fn is_well_formed(&self) -> bool {
        let mut it = self.entries.iter().peekable();
        while let Some(first) = it.next() {
            if !matches!(first, Entry::Sample(_)) {
                return false;
            }
            if matches!(it.peek(), Some(Entry::Events(_))) {
                it.next();
            }
            match it.next() {
                Some(Entry::Collect) => {
                    if !matches!(it.next(), Some(Entry::Result(_) | Entry::Error(_))) {
                        return false;
                    }
                }
                Some(Entry::Error(_)) => {}
                _ => return false,
            }
            if it.next() != Some(&Entry::Reset) {
                return false;
            }
        }
        true
    }
}

impl fmt::Display for Transcript {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        for e in &self.entries {
            writeln!(f, "{e}")?;
        }
        Ok(())
    }
}

/// Frames sent per transport write while streaming events.
const EVENT_CHUNK: usize = 4096;

/// Streams `stream` as EVENT frames, collects the counts and resets the
/// device. Ops are not on the wire, so the result carries zero op counts.
pub fn run_sample<T: Transport + ?Sized>(
    transport: &mut T,
    stream: &EventStream,
    num_classes: usize,
    transcript: &mut Transcript,
) -> Result<InferenceResult, ProtocolError> {
    let outcome = exchange(transport, stream, num_classes, transcript);
    if let Err(e) = &outcome {
        transcript.push(Entry::Error(e.clone()));
    }
    let reset = transport.send(&frame_bytes(Frame::Reset));
    transcript.push(Entry::Reset);
    let counts = outcome?;
    reset?;
    Ok(InferenceResult::from_counts(counts, OpCounts::default(), stream.len() as u64))
}

fn frame_bytes(frame: Frame) -> [u8; 2] {
    encode_frame(frame).expect("control frames always encode")
}

fn exchange<T: Transport + ?Sized>(
    transport: &mut T,
    stream: &EventStream,
    num_classes: usize,
    transcript: &mut Transcript,
) -> Result<Vec<u32>, ProtocolError> {
    let mut buf = Vec::with_capacity(2 * EVENT_CHUNK);
    for chunk in stream.events().chunks(EVENT_CHUNK) {
        buf.clear();
        for ev in chunk {
            let bytes =
                encode_frame(Frame::Event(ev.channel)).map_err(|_| ProtocolError::ChannelOutOfRange(ev.channel))?;
            buf.extend_from_slice(&bytes);
        }
        transport.send(&buf)?;
        transcript.push(Entry::Events(chunk.len() as u64));
    }
    transport.send(&frame_bytes(Frame::Collect))?;
    transcript.push(Entry::Collect);
    let reply = transport.recv(ResultMessage::encoded_len(num_classes))?;
    let msg = ResultMessage::decode(&reply, num_classes)?;
    transcript.push(Entry::Result(msg.counts.clone()));
    Ok(msg.counts)
}

/// Event sampling parameters for a batch. Sample `i` uses stream seed
/// [`stream_seed`]`(seed, i)`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EventConfig {
    /// Bernoulli event probability per timestep.
    pub rate: f64,
    /// Timesteps per sample.
    pub duration: u64,
    pub seed: u64,
}

impl EventConfig {
    pub fn for_seconds(seconds: f64, rate: f64, seed: u64) -> Self {
        EventConfig { rate, duration: crate::events::duration_for_seconds(seconds, DEFAULT_TIMESTEPS_PER_SECOND), seed }
    }

    pub fn stream(&self, spectrum: &NormalizedSpectrum, index: usize) -> Result<EventStream> {
        sample_events(spectrum, self.rate, self.duration, stream_seed(self.seed, index))
    }
}

pub fn stream_seed(seed: u64, index: usize) -> u64 {
    derive_seed(seed, index as u64)
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct IsotopeRow {
    pub isotope: &'static str,
    pub total: usize,
    pub passed: usize,
    /// Wrong predictions plus protocol failures.
    pub failed: usize,
    pub errors: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct BatchReport {
    pub config: EventConfig,
    pub rows: Vec<IsotopeRow>,
    /// `confusion[true][predicted]`, over samples without protocol errors.
    pub confusion: Vec<Vec<usize>>,
    /// Sample index and failure, in sample order.
    pub errors: Vec<(usize, ProtocolError)>,
}

impl BatchReport {
    fn from_outcomes(
        config: EventConfig,
        labels: &[usize],
        outcomes: Vec<Result<InferenceResult, ProtocolError>>,
    ) -> Self {
        let n = ISOTOPES.len();
        let mut rows: Vec<IsotopeRow> =
            ISOTOPES.iter().map(|&isotope| IsotopeRow { isotope, total: 0, passed: 0, failed: 0, errors: 0 }).collect();
        let mut confusion = vec![vec![0; n]; n];
        let mut errors = Vec::new();
        for (i, (&label, outcome)) in labels.iter().zip(outcomes).enumerate() {
            let row = &mut rows[label];
            row.total += 1;
            match outcome {
                Ok(r) => {
                    confusion[label][r.predicted] += 1;
                    if r.predicted == label {
                        row.passed += 1;
                    } else {
                        row.failed += 1;
                    }
                }
                Err(e) => {
                    row.failed += 1;
                    row.errors += 1;
                    errors.push((i, e));
                }
            }
        }
        BatchReport { config, rows, confusion, errors }
    }

    pub fn total(&self) -> usize {
        self.rows.iter().map(|r| r.total).sum()
    }

    pub fn passed(&self) -> usize {
        self.rows.iter().map(|r| r.passed).sum()
    }

    pub fn accuracy(&self) -> f64 {
        match self.total() {
            0 => 0.0,
            t => self.passed() as f64 / t as f64,
        }
    }
}

impl fmt::Display for BatchReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let c = &self.config;
        writeln!(f, "# duration={} rate={} seed={} samples={}", c.duration, c.rate, c.seed, self.total())?;
        writeln!(f, "isotope,total,passed,failed,errors")?;
        for r in &self.rows {
            writeln!(f, "{},{},{},{},{}", r.isotope, r.total, r.passed, r.failed, r.errors)?;
        }
        let errors: usize = self.rows.iter().map(|r| r.errors).sum();
        writeln!(f, "all,{},{},{},{}", self.total(), self.passed(), self.total() - self.passed(), errors)?;
        writeln!(f, "accuracy,{:.6}", self.accuracy())?;
        writeln!(f, "confusion,{}", ISOTOPES.join(","))?;
        for (name, row) in ISOTOPES.iter().zip(&self.confusion) {
            let cells: Vec<String> = row.iter().map(usize::to_string).collect();
            writeln!(f, "{name},{}", cells.join(","))?;
        }
        for (i, e) in &self.errors {
            writeln!(f, "error,{i},{e}")?;
        }
        Ok(())
    }
}

fn check_labels(dataset: &Dataset, num_classes: usize) -> Result<Vec<usize>> {
    if num_classes != ISOTOPES.len() {
        return Err(Error::arg(format!("batch reports need {} classes, model has {num_classes}", ISOTOPES.len())));
    }
    Ok(dataset.samples().iter().map(|s| s.label()).collect())
}

fn run_range<T: Transport + ?Sized>(
    transport: &mut T,
    dataset: &Dataset,
    range: std::ops::Range<usize>,
    config: &EventConfig,
    num_classes: usize,
    transcript: &mut Transcript,
) -> Result<Vec<Result<InferenceResult, ProtocolError>>> {
    let mut out = Vec::with_capacity(range.len());
    for i in range {
        let stream = config.stream(&dataset.samples()[i].spectrum, i)?;
        transcript.push(Entry::Sample(i));
        out.push(run_sample(transport, &stream, num_classes, transcript));
    }
    Ok(out)
}

/// Runs every sample of `dataset` through `transport` in order. Protocol
/// failures mark the sample failed and the batch continues.
pub fn run_batch<T: Transport + ?Sized>(
    transport: &mut T,
    num_classes: usize,
    dataset: &Dataset,
    config: &EventConfig,
) -> Result<(BatchReport, Transcript)> {
    let labels = check_labels(dataset, num_classes)?;
    let mut transcript = Transcript::new();
    let outcomes = run_range(transport, dataset, 0..dataset.len(), config, num_classes, &mut transcript)?;
    Ok((BatchReport::from_outcomes(*config, &labels, outcomes), transcript))
}

/// [`run_batch`] over in-process loopback devices, one per worker chunk.
/// The report and transcript equal the sequential run.
pub fn run_batch_loopback(
    model: &SnnModel,
    dataset: &Dataset,
    config: &EventConfig,
) -> Result<(BatchReport, Transcript)> {
    let num_classes = model.arch.num_classes;
    let labels = check_labels(dataset, num_classes)?;
    model.validate()?;
    let chunk = dataset.len().div_ceil(rayon::current_num_threads().max(1) * 4).max(1);
    let starts: Vec<usize> = (0..dataset.len()).step_by(chunk).collect();
    let parts = starts
        .par_iter()
        .map(|&start| {
            let mut link = Loopback::new(model.clone())?;
            let mut transcript = Transcript::new();
            let end = (start + chunk).min(dataset.len());
            let outcomes = run_range(&mut link, dataset, start..end, config, num_classes, &mut transcript)?;
            Ok((outcomes, transcript))
        })
        .collect::<Result<Vec<_>>>()?;
    let mut outcomes = Vec::with_capacity(dataset.len());
    let mut transcript = Transcript::new();
    for (o, t) in parts {
        outcomes.extend(o);
        transcript.append(t);
    }
    Ok((BatchReport::from_outcomes(*config, &labels, outcomes), transcript))
}
