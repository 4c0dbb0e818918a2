use std::net::TcpListener;
use std::path::PathBuf;
use std::thread;

use csnn_core::cann::ArchConfig;
use csnn_core::convert::{export_memory_image, import_memory_image, LayerParams, SnnModel};
use csnn_core::events::{sample_events, EventStream, PhotonEvent};
use csnn_core::harness::{
    encode_frame, run_batch, run_sample, serve_device, Device, Entry, EventConfig, Frame, Loopback, TcpTransport,
    Transcript, Transport, DEFAULT_TIMEOUT,
};
use csnn_core::snn::run_inference;
use csnn_core::spectra::{Dataset, NormalizedSpectrum, Sample, SampleMeta};
use csnn_core::ProtocolError;
use proptest::prelude::*;

fn toy_model(classes: usize) -> SnnModel {
    let arch = ArchConfig::new(16, 2, 3, 2, classes).unwrap();
    let fc_w = (0..arch.fc_weight_count()).map(|i| (i as i32 * 53) % 127 - 50).collect();
    SnnModel {
        arch,
        conv_w: vec![90, -30, 127, 45, 100, -60],
        fc_w,
        pool_w: 1,
        conv: LayerParams::with_default_floor(127),
        pool: LayerParams::with_default_floor(2),
        fc: LayerParams::with_default_floor(126),
        leak: 0,
    }
}

fn spectrum(values: &[f64], label: Option<usize>) -> NormalizedSpectrum {
    let total: f64 = values.iter().sum();
    NormalizedSpectrum::from_values(values.iter().map(|v| v / total).collect(), label, values.len()).unwrap()
}

fn golden(name: &str) -> PathBuf {
    PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("tests/golden").join(name)
}

fn check_golden(name: &str, text: &str) {
    let path = golden(name);
    if std::env::var_os("UPDATE_GOLDEN").is_some() {
        std::fs::write(&path, text).unwrap();
    }
    let want = std::fs::read_to_string(&path).unwrap_or_else(|e| panic!("{}: {e}", path.display()));
    assert_eq!(text, want, "{name} differs from golden file");
}

fn hex(bytes: &[u8]) -> String {
    let mut out = String::new();
    for line in bytes.chunks(16) {
        let words: Vec<String> = line.iter().map(|b| format!("{b:02x}")).collect();
        out.push_str(&words.join(" "));
        out.push('\n');
    }
    out
}

/// Records what the driver sends and receives.
struct Tap<T> {
    inner: T,
    tx: Vec<u8>,
    rx: Vec<u8>,
}

impl<T: Transport> Transport for Tap<T> {
    fn send(&mut self, bytes: &[u8]) -> Result<(), ProtocolError> {
        self.tx.extend_from_slice(bytes);
        self.inner.send(bytes)
    }

    fn recv(&mut self, n: usize) -> Result<Vec<u8>, ProtocolError> {
        let b = self.inner.recv(n)?;
        self.rx.extend_from_slice(&b);
        Ok(b)
    }
}

#[test]
fn wire_bytes_match_golden() {
    let events = [3u16, 7, 7, 12, 0, 15, 9, 9, 9, 4]
        .iter()
        .enumerate()
        .map(|(t, &channel)| PhotonEvent { timestep: 2 * t as u64, channel })
        .collect();
    let stream = EventStream::new(events, 20, 0.5, 0).unwrap();
    let mut tap = Tap { inner: Loopback::new(toy_model(8)).unwrap(), tx: Vec::new(), rx: Vec::new() };
    let mut t = Transcript::new();
    t.push(Entry::Sample(0));
    let r = run_sample(&mut tap, &stream, 8, &mut t).unwrap();
    assert_eq!(&tap.tx[..4], &[0x00, 0x03, 0x00, 0x07]);
    assert_eq!(&tap.tx[tap.tx.len() - 4..], &[0x40, 0x00, 0x80, 0x00]);
    assert_eq!(tap.rx[0], 0x52);
    check_golden(
        "toy_wire.txt",
        &format!(
            "# driver to device\n{}# device to driver\n{}# transcript\n{t}# result\n{r}\n",
            hex(&tap.tx),
            hex(&tap.rx)
        ),
    );
}

#[test]
fn memory_image_matches_golden() {
    let image = export_memory_image(&toy_model(3)).unwrap();
    check_golden("toy_image.txt", &hex(image.as_bytes()));
    assert_eq!(import_memory_image(image.as_bytes()).unwrap(), toy_model(3));
}

#[test]
fn tcp_link_matches_loopback() {
    let listener = TcpListener::bind("127.0.0.1:0").unwrap();
    let addr = listener.local_addr().unwrap();
    let model = toy_model(8);
    let server_model = model.clone();
    let server = thread::spawn(move || {
        let (conn, _) = listener.accept().unwrap();
        let mut device = Device::new(server_model).unwrap();
        serve_device(conn, &mut device).unwrap();
        device.rejected().len()
    });

    let samples: Vec<Sample> = (0..16)
        .map(|i| Sample {
            spectrum: spectrum(&(0..16).map(|c| ((c * 5 + i * 3) % 13 + 1) as f64).collect::<Vec<_>>(), Some(i % 8)),
            fold: 0,
            meta: SampleMeta::default(),
        })
        .collect();
    let ds = Dataset::new(samples).unwrap();
    let cfg = EventConfig { rate: 0.4, duration: 3_000, seed: 4 };
    let mut tcp = TcpTransport::connect(addr, DEFAULT_TIMEOUT).unwrap();
    let (over_tcp, t_tcp) = run_batch(&mut tcp, 8, &ds, &cfg).unwrap();
    drop(tcp);
    assert_eq!(server.join().unwrap(), 0);

    let (local, t_local) = run_batch(&mut Loopback::new(model).unwrap(), 8, &ds, &cfg).unwrap();
    assert_eq!(over_tcp, local);
    assert_eq!(t_tcp, t_local);
    assert!(t_tcp.is_well_formed());
}

#[test]
fn tcp_silence_times_out() {
    let listener = TcpListener::bind("127.0.0.1:0").unwrap();
    let addr = listener.local_addr().unwrap();
    // accepts but never answers
    let server = thread::spawn(move || {
        let (conn, _) = listener.accept().unwrap();
        thread::sleep(std::time::Duration::from_millis(600));
        drop(conn);
    });
    let mut tcp = TcpTransport::connect(addr, std::time::Duration::from_millis(200)).unwrap();
    tcp.send(&encode_frame(Frame::Collect).unwrap()).unwrap();
    assert_eq!(tcp.recv(11), Err(ProtocolError::Timeout));
    server.join().unwrap();
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn protocol_path_equals_direct_path(
        conv in proptest::collection::vec(-127i32..=127, 6),
        fc in proptest::collection::vec(-127i32..=127, 7 * 2 * 4),
        weights in proptest::collection::vec(0.01f64..1.0, 16),
        rate in 0.0f64..=1.0,
        duration in 0u64..3_000,
        seed in any::<u64>(),
        chunk in 1usize..7,
    ) {
        let arch = ArchConfig::new(16, 2, 3, 2, 4).unwrap();
        let thr = |w: &[i32]| w.iter().map(|v| v.abs()).max().unwrap().max(1);
        let model = SnnModel {
            arch,
            conv: LayerParams::with_default_floor(thr(&conv)),
            fc: LayerParams::with_default_floor(thr(&fc)),
            conv_w: conv,
            fc_w: fc,
            pool_w: 1,
            pool: LayerParams::with_default_floor(2),
            leak: 0,
        };
        let stream = sample_events(&spectrum(&weights, None), rate, duration, seed).unwrap();
        let direct = run_inference(&model, &stream).unwrap();
        let mut link = Loopback::new(model.clone()).unwrap();
        let mut t = Transcript::new();
        t.push(Entry::Sample(0));
        let wire = run_sample(&mut link, &stream, 4, &mut t).unwrap();
        prop_assert_eq!(&wire.class_counts, &direct.class_counts);
        prop_assert_eq!((wire.predicted, wire.tie), (direct.predicted, direct.tie));
        prop_assert!(t.is_well_formed());

        // arbitrary byte splits on the device side give the same reply
        let mut bytes = Vec::new();
        for ch in stream.channels() {
            bytes.extend_from_slice(&encode_frame(Frame::Event(ch)).unwrap());
        }
        bytes.extend_from_slice(&encode_frame(Frame::Collect).unwrap());
        let mut dev = Device::new(model).unwrap();
        let reply: Vec<u8> = bytes.chunks(chunk).flat_map(|c| dev.feed(c)).collect();
        let msg = csnn_core::harness::ResultMessage::decode(&reply, 4).unwrap();
        prop_assert_eq!(msg.counts, direct.class_counts);
    }
}
