//! Text file formats for datasets, models and event streams, and raw
//! memory-image files.
//!
//! Every text file starts with a `# csnn-<kind> v1 key=value ...` header.
//! Floats are written in shortest round-trip form, so reading a file back
//! reproduces the values bit for bit.
//!
//! ```text
//! # csnn-dataset v1 channels=1024 classes=Am-241,Ba-133,...
//! label,fold,distance_cm,integration_s,seed,p0,...,p1023
//!
//! # csnn-model v1 kind=float input_len=1024 filters=4 kernel=5 pool=16 classes=8
//! # csnn-model v1 kind=int8 ... conv_scale=.. fc_scale=..
//! conv
//! <one line of K weights per filter>
//! fc
//! <one line of num_classes weights per pooled neuron>
//!
//! # csnn-events v1 duration=600000 rate=0.01 seed=7
//! timestep,channel
//! ```

use std::collections::BTreeMap;
use std::fmt::Display;
use std::fs;
use std::io::{BufRead, BufReader, BufWriter, Read, Write};
use std::path::Path;
use std::str::FromStr;

use crate::cann::{ArchConfig, CannModel, QuantizedModel};
use crate::convert::{MemoryImage, SnnModel};
use crate::events::{EventStream, PhotonEvent};
use crate::spectra::{Dataset, NormalizedSpectrum, Sample, SampleMeta};
use crate::{Error, Result, ISOTOPES, NUM_CHANNELS};

const VERSION: &str = "v1";

fn format_err(what: &'static str, line: usize, msg: impl Into<String>) -> Error {
    Error::Format { what, line, msg: msg.into() }
}

fn join<T: Display>(values: &[T]) -> String {
    values.iter().map(|v| v.to_string()).collect::<Vec<_>>().join(",")
}

/// Numbered, non-empty lines of a text file.
struct Lines<R> {
    inner: std::io::Lines<R>,
    what: &'static str,
    line: usize,
}

impl<R: BufRead> Lines<R> {
    fn new(reader: R, what: &'static str) -> Self {
        Lines { inner: reader.lines(), what, line: 0 }
    }

    fn next_line(&mut self) -> Result<Option<String>> {
        for l in self.inner.by_ref() {
            self.line += 1;
            let l = l?;
            let trimmed = l.trim();
            if !trimmed.is_empty() {
                return Ok(Some(trimmed.to_string()));
            }
        }
        Ok(None)
    }

    fn expect_line(&mut self) -> Result<String> {
        self.next_line()?.ok_or_else(|| self.err("unexpected end of file"))
    }

    fn err(&self, msg: impl Into<String>) -> Error {
        format_err(self.what, self.line, msg)
    }

    fn parse<T: FromStr>(&self, field: &str, name: &str) -> Result<T> {
        field.trim().parse().map_err(|_| self.err(format!("bad {name} {field:?}")))
    }

    fn parse_list<T: FromStr>(&self, line: &str, name: &str) -> Result<Vec<T>> {
        line.split(',').map(|f| self.parse(f, name)).collect()
    }

    /// Parses `# csnn-<kind> v1 k=v ...` into its key/value pairs.
    fn header(&mut self, kind: &str) -> Result<BTreeMap<String, String>> {
        let line = self.expect_line()?;
        let mut parts = line.split_whitespace();
        let tag = format!("csnn-{kind}");
        if parts.next() != Some("#") || parts.next() != Some(tag.as_str()) {
            return Err(self.err(format!("expected `# {tag}` header")));
        }
        match parts.next() {
            Some(VERSION) => {}
            other => return Err(self.err(format!("unsupported version {other:?}"))),
        }
        let mut map = BTreeMap::new();
        for kv in parts {
            let (k, v) = kv.split_once('=').ok_or_else(|| self.err(format!("bad header field {kv:?}")))?;
            map.insert(k.to_string(), v.to_string());
        }
        Ok(map)
    }

    fn field<T: FromStr>(&self, map: &BTreeMap<String, String>, key: &str) -> Result<T> {
        let v = map.get(key).ok_or_else(|| self.err(format!("header lacks {key}")))?;
        self.parse(v, key)
    }
}

pub fn write_dataset<W: Write>(dataset: &Dataset, out: W) -> Result<()> {
    let mut w = BufWriter::new(out);
    let channels = dataset.samples().first().map_or(NUM_CHANNELS, |s| s.spectrum.len());
    writeln!(w, "# csnn-dataset {VERSION} channels={channels} classes={}", ISOTOPES.join(","))?;
    for s in dataset.samples() {
        let m = &s.meta;
        writeln!(
            w,
            "{},{},{},{},{},{}",
            ISOTOPES[s.label()],
            s.fold,
            m.distance_cm,
            m.integration_s,
            m.seed,
            join(s.spectrum.probs())
        )?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_dataset<R: Read>(input: R) -> Result<Dataset> {
    let mut lines = Lines::new(BufReader::new(input), "dataset");
    let header = lines.header("dataset")?;
    let channels: usize = lines.field(&header, "channels")?;
    let classes: String = lines.field(&header, "classes")?;
    if classes != ISOTOPES.join(",") {
        return Err(lines.err(format!("unexpected class list {classes}")));
    }
    let mut samples = Vec::new();
    while let Some(line) = lines.next_line()? {
        let fields: Vec<&str> = line.split(',').collect();
        if fields.len() != 5 + channels {
            return Err(lines.err(format!("{} fields, expected {}", fields.len(), 5 + channels)));
        }
        let label = ISOTOPES
            .iter()
            .position(|&n| n == fields[0])
            .ok_or_else(|| lines.err(format!("unknown isotope {:?}", fields[0])))?;
        let fold: u8 = lines.parse(fields[1], "fold")?;
        let meta = SampleMeta {
            distance_cm: lines.parse(fields[2], "distance")?,
            integration_s: lines.parse(fields[3], "integration time")?,
            seed: lines.parse(fields[4], "seed")?,
        };
        let probs = fields[5..].iter().map(|f| lines.parse(f, "value")).collect::<Result<Vec<f64>>>()?;
        let spectrum =
            NormalizedSpectrum::from_values(probs, Some(label), channels).map_err(|e| lines.err(e.to_string()))?;
        samples.push(Sample { spectrum, fold, meta });
    }
    Dataset::new(samples).map_err(|e| lines.err(e.to_string()))
}

fn arch_header(arch: &ArchConfig) -> String {
    format!(
        "input_len={} filters={} kernel={} pool={} classes={}",
        arch.input_len, arch.num_filters, arch.kernel_size, arch.pool_size, arch.num_classes
    )
}

fn write_weights<W: Write, T: Display>(w: &mut W, arch: &ArchConfig, conv: &[T], fc: &[T]) -> Result<()> {
    writeln!(w, "conv")?;
    for row in conv.chunks(arch.kernel_size) {
        writeln!(w, "{}", join(row))?;
    }
    writeln!(w, "fc")?;
    for row in fc.chunks(arch.num_classes) {
        writeln!(w, "{}", join(row))?;
    }
    Ok(())
}

fn read_arch<R: BufRead>(lines: &Lines<R>, h: &BTreeMap<String, String>) -> Result<ArchConfig> {
    ArchConfig::new(
        lines.field(h, "input_len")?,
        lines.field(h, "filters")?,
        lines.field(h, "kernel")?,
        lines.field(h, "pool")?,
        lines.field(h, "classes")?,
    )
    .map_err(|e| lines.err(e.to_string()))
}

fn read_weights<R: BufRead, T: FromStr>(lines: &mut Lines<R>, arch: &ArchConfig) -> Result<(Vec<T>, Vec<T>)> {
    let section = |lines: &mut Lines<R>, name: &str, rows: usize, width: usize| -> Result<Vec<T>> {
        if lines.expect_line()? != name {
            return Err(lines.err(format!("expected `{name}` section")));
        }
        let mut out = Vec::with_capacity(rows * width);
        for _ in 0..rows {
            let line = lines.expect_line()?;
            let row: Vec<T> = lines.parse_list(&line, "weight")?;
            if row.len() != width {
                return Err(lines.err(format!("{} weights, expected {width}", row.len())));
            }
            out.extend(row);
        }
        Ok(out)
    };
    let conv = section(lines, "conv", arch.num_filters, arch.kernel_size)?;
    let fc = section(lines, "fc", arch.pooled_len(), arch.num_classes)?;
    if lines.next_line()?.is_some() {
        return Err(lines.err("trailing data after fc section"));
    }
    Ok((conv, fc))
}

pub fn write_float_model<W: Write>(model: &CannModel, out: W) -> Result<()> {
    let mut w = BufWriter::new(out);
    writeln!(w, "# csnn-model {VERSION} kind=float {}", arch_header(&model.arch))?;
    write_weights(&mut w, &model.arch, &model.conv, &model.fc)?;
    w.flush()?;
    Ok(())
}

pub fn write_quantized_model<W: Write>(model: &QuantizedModel, out: W) -> Result<()> {
    let mut w = BufWriter::new(out);
    writeln!(
        w,
        "# csnn-model {VERSION} kind=int8 {} conv_scale={} fc_scale={}",
        arch_header(&model.arch),
        model.conv_scale,
        model.fc_scale
    )?;
    write_weights(&mut w, &model.arch, &model.conv_q, &model.fc_q)?;
    w.flush()?;
    Ok(())
}

/// A model file of either kind.
#[derive(Debug, Clone, PartialEq)]
pub enum ModelFile {
    Float(CannModel),
    Quantized(QuantizedModel),
}

pub fn read_model<R: Read>(input: R) -> Result<ModelFile> {
    let mut lines = Lines::new(BufReader::new(input), "model");
    let h = lines.header("model")?;
    let arch = read_arch(&lines, &h)?;
    let kind: String = lines.field(&h, "kind")?;
    match kind.as_str() {
        "float" => {
            let (conv, fc) = read_weights(&mut lines, &arch)?;
            Ok(ModelFile::Float(CannModel::new(arch, conv, fc)?))
        }
        "int8" => {
            let conv_scale = lines.field(&h, "conv_scale")?;
            let fc_scale = lines.field(&h, "fc_scale")?;
            let (conv, fc) = read_weights(&mut lines, &arch)?;
            let q = QuantizedModel::new(arch, conv, fc, conv_scale, fc_scale).map_err(|e| lines.err(e.to_string()))?;
            Ok(ModelFile::Quantized(q))
        }
        other => Err(lines.err(format!("unknown model kind {other:?}"))),
    }
}

pub fn write_events<W: Write>(stream: &EventStream, out: W) -> Result<()> {
    let mut w = BufWriter::new(out);
    writeln!(
        w,
        "# csnn-events {VERSION} duration={} rate={} seed={}",
        stream.duration(),
        stream.rate(),
        stream.seed()
    )?;
    for e in stream.events() {
        writeln!(w, "{},{}", e.timestep, e.channel)?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_events<R: Read>(input: R) -> Result<EventStream> {
    let mut lines = Lines::new(BufReader::new(input), "events");
    let h = lines.header("events")?;
    let duration = lines.field(&h, "duration")?;
    let rate = lines.field(&h, "rate")?;
    let seed = lines.field(&h, "seed")?;
    let mut events = Vec::new();
    while let Some(line) = lines.next_line()? {
        let (t, c) = line.split_once(',').ok_or_else(|| lines.err("expected timestep,channel"))?;
        events.push(PhotonEvent { timestep: lines.parse(t, "timestep")?, channel: lines.parse(c, "channel")? });
    }
    EventStream::new(events, duration, rate, seed).map_err(|e| lines.err(e.to_string()))
}

pub fn save_dataset(dataset: &Dataset, path: &Path) -> Result<()> {
    write_dataset(dataset, fs::File::create(path)?)
}

pub fn load_dataset(path: &Path) -> Result<Dataset> {
    read_dataset(fs::File::open(path)?)
}

pub fn save_float_model(model: &CannModel, path: &Path) -> Result<()> {
    write_float_model(model, fs::File::create(path)?)
}

pub fn save_quantized_model(model: &QuantizedModel, path: &Path) -> Result<()> {
    write_quantized_model(model, fs::File::create(path)?)
}

pub fn load_model(path: &Path) -> Result<ModelFile> {
    read_model(fs::File::open(path)?)
}

pub fn save_events(stream: &EventStream, path: &Path) -> Result<()> {
    write_events(stream, fs::File::create(path)?)
}

pub fn load_events(path: &Path) -> Result<EventStream> {
    read_events(fs::File::open(path)?)
}

pub fn save_image(image: &MemoryImage, path: &Path) -> Result<()> {
    fs::write(path, image.as_bytes())?;
    Ok(())
}

pub fn load_image(path: &Path) -> Result<SnnModel> {
    MemoryImage::from_bytes(fs::read(path)?)?.to_model()
}
