use crate::coding::{bits_per_index, BitReader, BitWriter, HuffmanDecoder, HuffmanTable};
use crate::model::SplitModel;
use crate::rvq::{Codebook, TokenFrame};
use crate::{Error, Result};

pub const MSG_HELLO: u8 = 0x01;
pub const MSG_ACK: u8 = 0x02;
pub const MSG_NACK: u8 = 0x03;
pub const MSG_FRAME: u8 = 0x04;
pub const MSG_END: u8 = 0x05;
pub const MSG_RESULT: u8 = 0x06;
/// Many frames in one message; payload `seq u32 | count u32 | frames`.
pub const MSG_FRAME_BATCH: u8 = 0x07;

/// Type byte plus payload length.
pub const MESSAGE_HEADER_LEN: usize = 5;
/// Largest payload accepted from a peer.
pub const MAX_PAYLOAD_LEN: usize = 64 << 20;

const HELLO_FIXED_LEN: usize = 8 + 8 + 2 + 4 + 2 + 4 + 1;
const FLAG_ENTROPY: u8 = 0x01;

/// Parameters both endpoints must agree on before frames flow.
#[derive(Debug, Clone, PartialEq)]
pub struct SessionConfig {
    pub model_hash: u64,
    pub codebook_hash: u64,
    pub stages: u16,
    pub size: u32,
    pub dim: u16,
    pub frame_rate_millihz: u32,
    /// Per-stage Huffman tables; present in entropy-coded mode.
    pub tables: Option<Vec<HuffmanTable>>,
}

impl SessionConfig {
    pub fn new(model: &SplitModel<f32>, cb: &Codebook<f32>, tables: Option<Vec<HuffmanTable>>) -> Result<Self> {
        model.check_codebook(cb)?;
        if let Some(t) = &tables {
            if t.len() != cb.stages() || t.iter().any(|t| t.alphabet_size() != cb.size()) {
                return Err(Error::InvalidArgument("Huffman tables do not match the codebook shape".into()));
            }
        }
        Ok(Self {
            model_hash: crate::model::model_hash(model),
            codebook_hash: cb.hash(),
            stages: cb.stages() as u16,
            size: cb.size() as u32,
            dim: cb.dim() as u16,
            frame_rate_millihz: (model.frame_rate() * 1000.0).round() as u32,
            tables,
        })
    }

    pub fn entropy_mode(&self) -> bool {
        self.tables.is_some()
    }

    pub fn codec(&self) -> FrameCodec {
        FrameCodec {
            stages: self.stages as usize,
            size: self.size as usize,
            tables: self.tables.clone(),
        }
    }

    fn write(&self, out: &mut Vec<u8>) {
        out.extend_from_slice(&self.model_hash.to_le_bytes());
        out.extend_from_slice(&self.codebook_hash.to_le_bytes());
        out.extend_from_slice(&self.stages.to_le_bytes());
        out.extend_from_slice(&self.size.to_le_bytes());
        out.extend_from_slice(&self.dim.to_le_bytes());
        out.extend_from_slice(&self.frame_rate_millihz.to_le_bytes());
        out.push(if self.tables.is_some() { FLAG_ENTROPY } else { 0 });
        if let Some(tables) = &self.tables {
            for t in tables {
                out.extend_from_slice(t.lengths());
            }
        }
    }

    fn parse(p: &[u8]) -> Result<Self> {
        let base = MESSAGE_HEADER_LEN;
        if p.len() < HELLO_FIXED_LEN {
            return Err(Error::framing(base + p.len(), "HELLO payload too short"));
        }
        let u64_at = |i: usize| u64::from_le_bytes(p[i..i + 8].try_into().unwrap());
        let u32_at = |i: usize| u32::from_le_bytes(p[i..i + 4].try_into().unwrap());
        let u16_at = |i: usize| u16::from_le_bytes([p[i], p[i + 1]]);
        let flags = p[28];
        if flags & !FLAG_ENTROPY != 0 {
            return Err(Error::framing(base + 28, format!("unknown HELLO flags {flags:#04x}")));
        }
        let (stages, size) = (u16_at(16), u32_at(18));
        let tables = if flags & FLAG_ENTROPY != 0 {
            let size = size as usize;
            let need = stages as usize * size;
            if p.len() != HELLO_FIXED_LEN + need {
                return Err(Error::framing(
                    base + p.len().min(HELLO_FIXED_LEN + need),
                    format!("HELLO carries {} table bytes, expected {need}", p.len() - HELLO_FIXED_LEN),
                ));
            }
            let mut tables = Vec::with_capacity(stages as usize);
            for k in 0..stages as usize {
                let at = HELLO_FIXED_LEN + k * size;
                tables.push(
                    HuffmanTable::from_lengths(p[at..at + size].to_vec())
                        .map_err(|e| Error::framing(base + at, e.to_string()))?,
                );
            }
            Some(tables)
        } else {
            if p.len() != HELLO_FIXED_LEN {
                return Err(Error::framing(base + HELLO_FIXED_LEN, "trailing bytes in HELLO"));
            }
            None
        };
        Ok(Self {
            model_hash: u64_at(0),
            codebook_hash: u64_at(8),
            stages,
            size,
            dim: u16_at(22),
            frame_rate_millihz: u32_at(24),
            tables,
        })
    }
}

/// Reason byte of a NACK.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum NackReason {
    CodebookMismatch,
    ModelMismatch,
    ShapeMismatch,
    Protocol,
    Other(u8),
}

impl NackReason {
    pub fn code(self) -> u8 {
        match self {
            NackReason::CodebookMismatch => 1,
            NackReason::ModelMismatch => 2,
            NackReason::ShapeMismatch => 3,
            NackReason::Protocol => 4,
            NackReason::Other(c) => c,
        }
    }

    pub fn from_code(code: u8) -> Self {
        match code {
            1 => NackReason::CodebookMismatch,
            2 => NackReason::ModelMismatch,
            3 => NackReason::ShapeMismatch,
            4 => NackReason::Protocol,
            c => NackReason::Other(c),
        }
    }

    pub fn describe(self) -> String {
        match self {
            NackReason::CodebookMismatch => "codebook mismatch".into(),
            NackReason::ModelMismatch => "model mismatch".into(),
            NackReason::ShapeMismatch => "codebook shape mismatch".into(),
            NackReason::Protocol => "protocol violation".into(),
            NackReason::Other(c) => format!("reason {c}"),
        }
    }
}

/// One framed wire message. Frame payloads stay packed; a [`FrameCodec`]
/// turns them into tokens.
#[derive(Debug, Clone, PartialEq)]
pub enum Message {
    Hello(SessionConfig),
    Ack,
    Nack(NackReason),
    Frame { seq: u32, packed: Vec<u8> },
    End,
    Result(Vec<f32>),
    FrameBatch { seq: u32, count: u32, packed: Vec<u8> },
}

impl Message {
    pub fn type_byte(&self) -> u8 {
        match self {
            Message::Hello(_) => MSG_HELLO,
            Message::Ack => MSG_ACK,
            Message::Nack(_) => MSG_NACK,
            Message::Frame { .. } => MSG_FRAME,
            Message::End => MSG_END,
            Message::Result(_) => MSG_RESULT,
            Message::FrameBatch { .. } => MSG_FRAME_BATCH,
        }
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut payload = Vec::new();
        match self {
            Message::Hello(cfg) => cfg.write(&mut payload),
            Message::Ack | Message::End => {}
            Message::Nack(r) => payload.push(r.code()),
            Message::Frame { seq, packed } => {
                payload.extend_from_slice(&seq.to_le_bytes());
                payload.extend_from_slice(packed);
            }
            Message::Result(values) => {
                for v in values {
                    payload.extend_from_slice(&v.to_le_bytes());
                }
            }
            Message::FrameBatch { seq, count, packed } => {
                payload.extend_from_slice(&seq.to_le_bytes());
                payload.extend_from_slice(&count.to_le_bytes());
                payload.extend_from_slice(packed);
            }
        }
        let mut out = Vec::with_capacity(MESSAGE_HEADER_LEN + payload.len());
        out.push(self.type_byte());
        out.extend_from_slice(&(payload.len() as u32).to_le_bytes());
        out.extend_from_slice(&payload);
        out
    }

    /// Payload length announced by a message header, checked against
    /// [`MAX_PAYLOAD_LEN`].
    pub fn payload_len(header: &[u8; MESSAGE_HEADER_LEN]) -> Result<usize> {
        let len = u32::from_le_bytes(header[1..5].try_into().unwrap()) as usize;
        if len > MAX_PAYLOAD_LEN {
            return Err(Error::framing(1, format!("payload length {len} exceeds the limit")));
        }
        Ok(len)
    }

    /// Parses one message from a type byte and its payload.
    pub fn from_parts(kind: u8, p: &[u8]) -> Result<Self> {
        let exact = |n: usize, what: &str| -> Result<()> {
            if p.len() != n {
                Err(Error::framing(
                    MESSAGE_HEADER_LEN + p.len().min(n),
                    format!("{what} payload is {} bytes, expected {n}", p.len()),
                ))
            } else {
                Ok(())
            }
        };
        let at_least = |n: usize, what: &str| -> Result<()> {
            if p.len() < n {
                Err(Error::framing(MESSAGE_HEADER_LEN + p.len(), format!("{what} payload too short")))
            } else {
                Ok(())
            }
        };
        Ok(match kind {
            MSG_HELLO => Message::Hello(SessionConfig::parse(p)?),
            MSG_ACK => {
                exact(0, "ACK")?;
                Message::Ack
            }
            MSG_NACK => {
                exact(1, "NACK")?;
                Message::Nack(NackReason::from_code(p[0]))
            }
            MSG_FRAME => {
                at_least(4, "FRAME")?;
                Message::Frame {
                    seq: u32::from_le_bytes(p[..4].try_into().unwrap()),
                    packed: p[4..].to_vec(),
                }
            }
            MSG_END => {
                exact(0, "END")?;
                Message::End
            }
            MSG_RESULT => {
                if !p.len().is_multiple_of(4) {
                    return Err(Error::framing(MESSAGE_HEADER_LEN + p.len(), "RESULT length is not a multiple of 4"));
                }
                Message::Result(p.chunks_exact(4).map(|c| f32::from_le_bytes(c.try_into().unwrap())).collect())
            }
            MSG_FRAME_BATCH => {
                at_least(8, "FRAME_BATCH")?;
                Message::FrameBatch {
                    seq: u32::from_le_bytes(p[..4].try_into().unwrap()),
                    count: u32::from_le_bytes(p[4..8].try_into().unwrap()),
                    packed: p[8..].to_vec(),
                }
            }
            other => return Err(Error::framing(0, format!("unknown message type {other:#04x}"))),
        })
    }

    /// Parses the message at the start of `bytes`; returns it with the
    /// number of bytes consumed.
    pub fn parse(bytes: &[u8]) -> Result<(Self, usize)> {
        if bytes.len() < MESSAGE_HEADER_LEN {
            return Err(Error::framing(bytes.len(), "truncated message header"));
        }
        let header: [u8; MESSAGE_HEADER_LEN] = bytes[..MESSAGE_HEADER_LEN].try_into().unwrap();
        let len = Self::payload_len(&header)?;
        let end = MESSAGE_HEADER_LEN + len;
        if bytes.len() < end {
            return Err(Error::framing(bytes.len(), "truncated message payload"));
        }
        Ok((Self::from_parts(header[0], &bytes[MESSAGE_HEADER_LEN..end])?, end))
    }

    /// Parses `bytes` as exactly one message.
    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let (msg, used) = Self::parse(bytes)?;
        if used != bytes.len() {
            return Err(Error::framing(used, "trailing bytes after message"));
        }
        Ok(msg)
    }

    /// Parses a concatenation of messages.
    pub fn parse_all(mut bytes: &[u8]) -> Result<Vec<Self>> {
        let mut out = Vec::new();
        let mut offset = 0;
        while !bytes.is_empty() {
            let (msg, used) = Self::parse(bytes).map_err(|e| match e {
                Error::Framing { offset: o, reason } => Error::framing(offset + o, reason),
                other => other,
            })?;
            out.push(msg);
            bytes = &bytes[used..];
            offset += used;
        }
        Ok(out)
    }
}

/// Packs token frames as raw `⌈log₂V⌉`-bit indices or with per-stage
/// Huffman codes; each message payload is padded to a whole byte.
#[derive(Debug, Clone, PartialEq)]
pub struct FrameCodec {
    pub stages: usize,
    pub size: usize,
    pub tables: Option<Vec<HuffmanTable>>,
}

impl FrameCodec {
    pub fn raw(stages: usize, size: usize) -> Self {
        Self {
            stages,
            size,
            tables: None,
        }
    }

    fn check(&self, tokens: &TokenFrame) -> Result<()> {
        if tokens.stages() != self.stages {
            return Err(Error::DimensionMismatch {
                context: "token frame stages",
                expected: self.stages,
                got: tokens.stages(),
            });
        }
        for (stage, &index) in tokens.indices.iter().enumerate() {
            if index as usize >= self.size {
                return Err(Error::IndexOutOfRange {
                    stage,
                    index,
                    size: self.size,
                    frame: None,
                });
            }
        }
        Ok(())
    }

    fn write(&self, tokens: &TokenFrame, w: &mut BitWriter) -> Result<()> {
        self.check(tokens)?;
        match &self.tables {
            None => {
                let bits = bits_per_index(self.size);
                for &i in &tokens.indices {
                    w.write(i as u64, bits);
                }
            }
            Some(tables) => {
                for (t, &i) in tables.iter().zip(&tokens.indices) {
                    t.encode(i as usize, w)?;
                }
            }
        }
        Ok(())
    }

    fn read(&self, decoders: Option<&[HuffmanDecoder]>, r: &mut BitReader<'_>) -> Result<TokenFrame> {
        let mut indices = Vec::with_capacity(self.stages);
        match decoders {
            None => {
                let bits = bits_per_index(self.size);
                for stage in 0..self.stages {
                    let index = r.read(bits)? as u32;
                    if index as usize >= self.size {
                        return Err(Error::IndexOutOfRange {
                            stage,
                            index,
                            size: self.size,
                            frame: None,
                        });
                    }
                    indices.push(index);
                }
            }
            Some(decoders) => {
                for d in decoders {
                    indices.push(d.decode(r)?);
                }
            }
        }
        Ok(TokenFrame::new(indices))
    }

    pub fn pack(&self, frames: &[TokenFrame]) -> Result<Vec<u8>> {
        let mut w = BitWriter::new();
        for f in frames {
            self.write(f, &mut w)?;
        }
        Ok(w.finish())
    }

    /// Unpacks exactly `count` frames; the padding must be shorter than a
    /// byte and zero.
    pub fn unpack(&self, packed: &[u8], count: usize, base_offset: usize) -> Result<Vec<TokenFrame>> {
        let mut r = BitReader::with_offset(packed, base_offset);
        let decoders: Option<Vec<HuffmanDecoder>> =
            self.tables.as_ref().map(|t| t.iter().map(HuffmanTable::decoder).collect());
        let frames = (0..count)
            .map(|_| self.read(decoders.as_deref(), &mut r)).collect::<Result<Vec<_>>>()?;
        if r.remaining_whole_bytes() != 0 {
            return Err(Error::framing(base_offset + r.byte_offset(), "trailing bytes after packed frames"));
        }
        while !r.bit_pos().is_multiple_of(8) {
            if r.read_bit()? != 0 {
                return Err(Error::framing(base_offset + r.byte_offset(), "non-zero padding bits"));
            }
        }
        Ok(frames)
    }
}

/// Wire bytes of one FRAME message under raw packing.
pub fn raw_frame_message_len(stages: usize, size: usize) -> usize {
    MESSAGE_HEADER_LEN + 4 + (stages * bits_per_index(size) as usize).div_ceil(8)
}

pub fn serialize_frame(seq: u32, tokens: &TokenFrame, codec: &FrameCodec) -> Result<Vec<u8>> {
    Ok(Message::Frame {
        seq,
        packed: codec.pack(std::slice::from_ref(tokens))?,
    }
    .to_bytes())
}

pub fn deserialize_frame(bytes: &[u8], codec: &FrameCodec) -> Result<(u32, TokenFrame)> {
    match Message::from_bytes(bytes)? {
        Message::Frame { seq, packed } => {
            let mut frames = codec.unpack(&packed, 1, MESSAGE_HEADER_LEN + 4)?;
            Ok((seq, frames.pop().unwrap()))
        }
        other => Err(Error::framing(0, format!("expected FRAME, got type {:#04x}", other.type_byte()))),
    }
}
