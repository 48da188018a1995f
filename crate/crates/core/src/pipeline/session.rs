use std::net::TcpListener;
use std::time::Duration;

use super::message::{FrameCodec, Message, NackReason, SessionConfig};
use super::transport::{loopback_pair, TcpTransport, Transport};
use crate::coding::HuffmanTable;
use crate::features::FeatureSequence;
use crate::model::{DeviceOutput, SplitModel};
use crate::rvq::{Codebook, TokenFrame};
use crate::{Error, Result};

/// Device-side settings.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct DeviceOptions {
    /// Per-stage Huffman tables; entropy-coded frames when present.
    pub tables: Option<Vec<HuffmanTable>>,
    /// Frames per FRAME_BATCH message; one FRAME per frame when `None`.
    pub batch: Option<usize>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct DeviceReport {
    pub frames_sent: usize,
    pub tokens: Vec<TokenFrame>,
    /// RESULT payload from the cloud.
    pub result: Vec<f32>,
    /// Every byte the device wrote, headers included.
    pub wire_bytes: u64,
    /// Bytes of packed frame data only.
    pub payload_bytes: u64,
}

/// HELLO, wait for ACK, stream the quantized frames of `input` with
/// consecutive sequence numbers from 0, END, then wait for RESULT.
///
/// A failure after frames started flowing is reported as
/// [`Error::Frame`] carrying the number of frames already sent.
pub fn run_device_session<T: Transport>(
    input: &FeatureSequence<f32>,
    model: &SplitModel<f32>,
    cb: &Codebook<f32>,
    transport: &mut T,
    options: &DeviceOptions,
) -> Result<DeviceReport> {
    let config = SessionConfig::new(model, cb, options.tables.clone())?;
    let tokens = match model.forward_device_with(input, Some(cb))? {
        DeviceOutput::Tokens(t) => t,
        DeviceOutput::Features(_) => unreachable!(),
    };
    let codec = config.codec();
    transport.send(&Message::Hello(config))?;
    match transport.recv()? {
        Message::Ack => {}
        Message::Nack(reason) => return Err(Error::Rejected(reason.describe())),
        other => {
            return Err(Error::Protocol(format!(
                "expected ACK or NACK, got message type {:#04x}",
                other.type_byte()
            )))
        }
    }
    let mut sent = 0usize;
    let mut payload_bytes = 0u64;
    let chunk = options.batch.unwrap_or(1).max(1);
    for group in tokens.chunks(chunk) {
        let packed = codec.pack(group)?;
        payload_bytes += packed.len() as u64;
        let seq = sent as u32;
        let msg = if options.batch.is_some() {
            Message::FrameBatch {
                seq,
                count: group.len() as u32,
                packed,
            }
        } else {
            Message::Frame { seq, packed }
        };
        transport.send(&msg).map_err(|e| e.at_frame(sent))?;
        sent += group.len();
    }
    transport.send(&Message::End).map_err(|e| e.at_frame(sent))?;
    let result = match transport.recv().map_err(|e| e.at_frame(sent))? {
        Message::Result(v) => v,
        Message::Nack(reason) => return Err(Error::Rejected(reason.describe()).at_frame(sent)),
        other => {
            return Err(Error::Protocol(format!("expected RESULT, got message type {:#04x}", other.type_byte())))
        }
    };
    Ok(DeviceReport {
        frames_sent: sent,
        tokens,
        result,
        wire_bytes: transport.bytes_sent(),
        payload_bytes,
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct CloudReport {
    pub config: SessionConfig,
    pub tokens: Vec<TokenFrame>,
    /// Cloud-half output; empty when no frames arrived.
    pub prediction: FeatureSequence<f32>,
}

impl CloudReport {
    /// The RESULT payload values.
    pub fn result(&self) -> Vec<f32> {
        self.prediction.as_slice().to_vec()
    }
}

fn check_hello(cfg: &SessionConfig, model: &SplitModel<f32>, cb: &Codebook<f32>) -> Result<(), (NackReason, Error)> {
    let local_model = crate::model::model_hash(model);
    if cfg.model_hash != local_model {
        return Err((
            NackReason::ModelMismatch,
            Error::ModelMismatch {
                expected: local_model,
                found: cfg.model_hash,
            },
        ));
    }
    if cfg.codebook_hash != cb.hash() {
        return Err((
            NackReason::CodebookMismatch,
            Error::CodebookMismatch {
                expected: cb.hash(),
                found: cfg.codebook_hash,
            },
        ));
    }
    if (cfg.stages as usize, cfg.size as usize, cfg.dim as usize) != (cb.stages(), cb.size(), cb.dim()) {
        return Err((
            NackReason::ShapeMismatch,
            Error::Protocol(format!(
                "HELLO announces K={} V={} D={}, local codebook is K={} V={} D={}",
                cfg.stages,
                cfg.size,
                cfg.dim,
                cb.stages(),
                cb.size(),
                cb.dim()
            )),
        ));
    }
    Ok(())
}

/// Serves one session: validates HELLO, collects frames in sequence order,
/// and after END runs the cloud half and replies with RESULT.
pub fn run_cloud_session<T: Transport>(
    transport: &mut T,
    model: &SplitModel<f32>,
    cb: &Codebook<f32>,
) -> Result<CloudReport> {
    model.check_codebook(cb)?;
    let config = match transport.recv()? {
        Message::Hello(cfg) => cfg,
        other => {
            let _ = transport.send(&Message::Nack(NackReason::Protocol));
            return Err(Error::Protocol(format!("expected HELLO, got message type {:#04x}", other.type_byte())));
        }
    };
    if let Err((reason, err)) = check_hello(&config, model, cb) {
        transport.send(&Message::Nack(reason))?;
        return Err(err);
    }
    transport.send(&Message::Ack)?;
    let codec: FrameCodec = config.codec();
    let mut tokens: Vec<TokenFrame> = Vec::new();
    let reject = |transport: &mut T, msg: String| -> Error {
        let _ = transport.send(&Message::Nack(NackReason::Protocol));
        Error::Protocol(msg)
    };
    loop {
        let msg = match transport.recv() {
            Err(Error::Timeout(_)) => return Err(Error::Timeout("END")),
            other => other?,
        };
        let (seq, count, packed, base) = match msg {
            Message::Frame { seq, packed } => (seq, 1usize, packed, 9),
            Message::FrameBatch { seq, count, packed } => (seq, count as usize, packed, 13),
            Message::End => break,
            other => {
                return Err(reject(
                    transport,
                    format!("unexpected message type {:#04x} during a session", other.type_byte()),
                ))
            }
        };
        let expected = tokens.len();
        if seq as usize != expected {
            let kind = if (seq as usize) < expected { "duplicate" } else { "out-of-order" };
            return Err(reject(transport, format!("{kind} frame: expected seq {expected}, got {seq}")));
        }
        match codec.unpack(&packed, count, base) {
            Ok(frames) => tokens.extend(frames),
            Err(e) => {
                let _ = transport.send(&Message::Nack(NackReason::Protocol));
                return Err(e.at_frame(expected));
            }
        }
    }
    let prediction = if tokens.is_empty() {
        FeatureSequence::new(model.output_dim())
    } else {
        model.forward_cloud(&cb.dequantize_sequence(&tokens)?)?
    };
    transport.send(&Message::Result(prediction.as_slice().to_vec()))?;
    Ok(CloudReport {
        config,
        tokens,
        prediction,
    })
}

/// How [`simulate`] connects the two endpoints.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TransportKind {
    Loopback,
    /// TCP over 127.0.0.1 on an ephemeral port.
    LocalTcp,
}

/// Runs a device and a cloud endpoint on separate threads for `input`.
pub fn simulate(
    input: &FeatureSequence<f32>,
    model: &SplitModel<f32>,
    cb: &Codebook<f32>,
    kind: TransportKind,
    options: &DeviceOptions,
    timeout: Duration,
) -> Result<(DeviceReport, CloudReport)> {
    std::thread::scope(|scope| match kind {
        TransportKind::Loopback => {
            let (mut dev, mut cloud) = loopback_pair(timeout);
            let server = scope.spawn(move || run_cloud_session(&mut cloud, model, cb));
            let device = run_device_session(input, model, cb, &mut dev, options);
            let cloud = server.join().expect("cloud endpoint panicked");
            Ok((device?, cloud?))
        }
        TransportKind::LocalTcp => {
            let listener = TcpListener::bind("127.0.0.1:0")?;
            let addr = listener.local_addr()?;
            let server = scope.spawn(move || -> Result<CloudReport> {
                let (stream, _) = listener.accept()?;
                let mut t = TcpTransport::from_tcp(stream, timeout)?;
                run_cloud_session(&mut t, model, cb)
            });
            let device = TcpTransport::connect(addr, timeout)
                .and_then(|mut t| run_device_session(input, model, cb, &mut t, options));
            let cloud = server.join().expect("cloud endpoint panicked");
            Ok((device?, cloud?))
        }
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{LayerSpec, Task};
    use crate::pipeline::transport::Loopback;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn setup() -> (SplitModel<f32>, Codebook<f32>, FeatureSequence<f32>) {
        let specs: Vec<LayerSpec> = ["dense 3 4", "tanh", "dense 4 5"].iter().map(|s| s.parse().unwrap()).collect();
        let model = SplitModel::new(Task::Sequence, 3, 25.0, &specs, 2, 3).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let words = (0..2 * 8 * 4).map(|_| rng.random_range(-1.0f32..1.0)).collect();
        let cb = Codebook::from_codewords(4, 8, 2, words).unwrap();
        let data = (0..3 * 6).map(|_| rng.random_range(-2.0f32..2.0)).collect();
        (model, cb, FeatureSequence::from_vec(3, data).unwrap())
    }

    const T: Duration = Duration::from_secs(5);

    #[test]
    fn loopback_matches_local_inference() {
        let (model, cb, x) = setup();
        let local = model.forward_quantized(&x, &cb).unwrap();
        let (dev, cloud) = simulate(&x, &model, &cb, TransportKind::Loopback, &DeviceOptions::default(), T).unwrap();
        assert_eq!(dev.frames_sent, 6);
        assert_eq!(cloud.prediction, local);
        assert_eq!(dev.result, local.as_slice());
        assert_eq!(cloud.tokens, dev.tokens);
    }

    #[test]
    fn batch_and_entropy_modes_agree() {
        let (model, cb, x) = setup();
        let plain = simulate(&x, &model, &cb, TransportKind::Loopback, &DeviceOptions::default(), T).unwrap();
        let tables = vec![HuffmanTable::from_lengths(vec![3; 8]).unwrap(); 2];
        for options in [
            DeviceOptions { tables: None, batch: Some(4) },
            DeviceOptions { tables: Some(tables), batch: None },
        ] {
            let (dev, _) = simulate(&x, &model, &cb, TransportKind::Loopback, &options, T).unwrap();
            assert_eq!(dev.result, plain.0.result);
        }
    }

    #[test]
    fn empty_input_sends_no_frames() {
        let (model, cb, _) = setup();
        let x = FeatureSequence::new(3);
        let (dev, cloud) = simulate(&x, &model, &cb, TransportKind::Loopback, &DeviceOptions::default(), T).unwrap();
        assert_eq!(dev.frames_sent, 0);
        assert!(dev.result.is_empty());
        assert!(cloud.tokens.is_empty());
    }

    #[test]
    fn codebook_mismatch_is_refused_before_frames() {
        let (model, cb, x) = setup();
        let mut other = cb.clone();
        other.codewords_mut()[0] += 1.0;
        let (mut dev, mut cloud) = loopback_pair(T);
        let server = std::thread::spawn(move || {
            let r = run_cloud_session(&mut cloud, &model, &other);
            (r, cloud)
        });
        let (model, _, _) = setup();
        let err = run_device_session(&x, &model, &cb, &mut dev, &DeviceOptions::default()).unwrap_err();
        assert!(err.to_string().contains("codebook mismatch"), "{err}");
        let (r, mut cloud) = server.join().unwrap();
        assert!(matches!(r, Err(Error::CodebookMismatch { .. })));
        // Only the HELLO crossed the wire.
        drop(dev);
        assert!(cloud.recv().is_err());
    }

    fn handshake(model: &SplitModel<f32>, cb: &Codebook<f32>, dev: &mut Loopback) {
        dev.send(&Message::Hello(SessionConfig::new(model, cb, None).unwrap())).unwrap();
        assert_eq!(dev.recv().unwrap(), Message::Ack);
    }

    #[test]
    fn duplicate_and_out_of_order_sequence_numbers_are_rejected() {
        for seqs in [[0u32, 0], [0, 2]] {
            let (model, cb, _) = setup();
            let (mut dev, mut cloud) = loopback_pair(T);
            let (m2, c2) = (model.clone(), cb.clone());
            let server = std::thread::spawn(move || run_cloud_session(&mut cloud, &m2, &c2));
            handshake(&model, &cb, &mut dev);
            let codec = FrameCodec::raw(2, 8);
            for s in seqs {
                let packed = codec.pack(&[TokenFrame::new(vec![1, 2])]).unwrap();
                dev.send(&Message::Frame { seq: s, packed }).unwrap();
            }
            let err = server.join().unwrap().unwrap_err();
            assert!(matches!(err, Error::Protocol(_)), "{err}");
        }
    }

    #[test]
    fn missing_end_times_out() {
        let (model, cb, _) = setup();
        let (mut dev, mut cloud) = loopback_pair(Duration::from_millis(200));
        let (m2, c2) = (model.clone(), cb.clone());
        let server = std::thread::spawn(move || run_cloud_session(&mut cloud, &m2, &c2));
        handshake(&model, &cb, &mut dev);
        let err = server.join().unwrap().unwrap_err();
        assert!(matches!(err, Error::Timeout("END")), "{err}");
    }
}
