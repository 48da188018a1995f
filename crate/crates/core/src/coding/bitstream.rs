use super::{build_smoothed_huffman, BitReader, BitWriter, CodeHistogram, HuffmanTable};
use crate::coding::bits_per_index;
use crate::rvq::{Codebook, TokenFrame};
use crate::{Error, Result};

pub const STREAM_MAGIC: &[u8; 4] = b"ACOM";
pub const STREAM_VERSION: u8 = 1;
/// Fixed header bytes before the optional Huffman length tables.
pub const STREAM_HEADER_LEN: usize = 4 + 1 + 1 + 2 + 4 + 2 + 4 + 4 + 8;

const FLAG_HUFFMAN: u8 = 0x01;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum CodingMode {
    Raw,
    Huffman,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct StreamHeader {
    pub mode: CodingMode,
    pub stages: u16,
    pub size: u32,
    pub dim: u16,
    pub frame_rate_millihz: u32,
    pub num_frames: u32,
    pub codebook_hash: u64,
}

impl StreamHeader {
    pub fn frame_rate(&self) -> f64 {
        self.frame_rate_millihz as f64 / 1000.0
    }

    fn write(&self, out: &mut Vec<u8>) {
        out.extend_from_slice(STREAM_MAGIC);
        out.push(STREAM_VERSION);
        out.push(if self.mode == CodingMode::Huffman { FLAG_HUFFMAN } else { 0 });
        out.extend_from_slice(&self.stages.to_le_bytes());
        out.extend_from_slice(&self.size.to_le_bytes());
        out.extend_from_slice(&self.dim.to_le_bytes());
        out.extend_from_slice(&self.frame_rate_millihz.to_le_bytes());
        out.extend_from_slice(&self.num_frames.to_le_bytes());
        out.extend_from_slice(&self.codebook_hash.to_le_bytes());
    }

    fn parse(bytes: &[u8]) -> Result<Self> {
        if bytes.len() < STREAM_HEADER_LEN {
            return Err(Error::framing(bytes.len(), "truncated stream header"));
        }
        if &bytes[..4] != STREAM_MAGIC {
            return Err(Error::framing(0, "bad stream magic"));
        }
        if bytes[4] != STREAM_VERSION {
            return Err(Error::framing(4, format!("unsupported stream version {}", bytes[4])));
        }
        let flags = bytes[5];
        if flags & !FLAG_HUFFMAN != 0 {
            return Err(Error::framing(5, format!("unknown flag bits {flags:#04x}")));
        }
        let u16_at = |i: usize| u16::from_le_bytes([bytes[i], bytes[i + 1]]);
        let u32_at = |i: usize| u32::from_le_bytes(bytes[i..i + 4].try_into().unwrap());
        let header = Self {
            mode: if flags & FLAG_HUFFMAN != 0 {
                CodingMode::Huffman
            } else {
                CodingMode::Raw
            },
            stages: u16_at(6),
            size: u32_at(8),
            dim: u16_at(12),
            frame_rate_millihz: u32_at(14),
            num_frames: u32_at(18),
            codebook_hash: u64::from_le_bytes(bytes[22..30].try_into().unwrap()),
        };
        if header.stages == 0 || header.size == 0 || header.dim == 0 {
            return Err(Error::framing(6, "zero-sized codebook shape in header"));
        }
        Ok(header)
    }
}

/// A parsed (not yet decoded) `ACOM` stream.
#[derive(Debug, Clone, PartialEq)]
pub struct Bitstream {
    pub header: StreamHeader,
    /// Per-stage tables, present in Huffman mode.
    pub tables: Option<Vec<HuffmanTable>>,
    pub payload: Vec<u8>,
}

impl Bitstream {
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(self.header_len() + self.payload.len());
        self.header.write(&mut out);
        if let Some(tables) = &self.tables {
            for t in tables {
                out.extend_from_slice(t.lengths());
            }
        }
        out.extend_from_slice(&self.payload);
        out
    }

    pub fn header_len(&self) -> usize {
        STREAM_HEADER_LEN
            + match self.header.mode {
                CodingMode::Raw => 0,
                CodingMode::Huffman => self.header.stages as usize * self.header.size as usize,
            }
    }

    /// Splits `bytes` into header, tables and payload. Payload contents are
    /// checked by [`decode_stream`].
    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let header = StreamHeader::parse(bytes)?;
        let mut pos = STREAM_HEADER_LEN;
        let tables = match header.mode {
            CodingMode::Raw => None,
            CodingMode::Huffman => {
                let size = header.size as usize;
                let mut tables = Vec::with_capacity(header.stages as usize);
                for _ in 0..header.stages {
                    if bytes.len() < pos + size {
                        return Err(Error::framing(bytes.len(), "truncated Huffman tables"));
                    }
                    let t = HuffmanTable::from_lengths(bytes[pos..pos + size].to_vec())
                        .map_err(|e| Error::framing(pos, e.to_string()))?;
                    tables.push(t);
                    pos += size;
                }
                Some(tables)
            }
        };
        Ok(Self {
            header,
            tables,
            payload: bytes[pos..].to_vec(),
        })
    }

    /// Payload length in bytes for raw packing of `frames` frames.
    pub fn raw_payload_len(frames: usize, stages: usize, size: usize) -> usize {
        (frames * stages * bits_per_index(size) as usize).div_ceil(8)
    }
}

fn header_for(tokens: &[TokenFrame], cb: &Codebook<f32>, frame_rate: f64, mode: CodingMode) -> Result<StreamHeader> {
    if frame_rate.is_nan() || frame_rate <= 0.0 || frame_rate * 1000.0 > u32::MAX as f64 {
        return Err(Error::InvalidArgument(format!("frame rate {frame_rate} not representable")));
    }
    let num_frames = u32::try_from(tokens.len())
        .map_err(|_| Error::InvalidArgument("too many frames for one stream".into()))?;
    Ok(StreamHeader {
        mode,
        stages: cb.stages() as u16,
        size: cb.size() as u32,
        dim: cb.dim() as u16,
        frame_rate_millihz: (frame_rate * 1000.0).round() as u32,
        num_frames,
        codebook_hash: cb.hash(),
    })
}

/// Encodes `tokens` for `cb`. Huffman tables are built from the stream's own
/// histogram with unused symbols smoothed to a count of one.
pub fn encode_stream(tokens: &[TokenFrame], cb: &Codebook<f32>, frame_rate: f64, mode: CodingMode) -> Result<Bitstream> {
    match mode {
        CodingMode::Raw => encode_stream_with_tables(tokens, cb, frame_rate, None),
        CodingMode::Huffman => {
            let hist = CodeHistogram::from_tokens(cb.stages(), cb.size(), tokens)?;
            let tables = (0..cb.stages())
                .map(|k| build_smoothed_huffman(hist.stage_counts(k)))
                .collect::<Result<Vec<_>>>()?;
            encode_stream_with_tables(tokens, cb, frame_rate, Some(tables))
        }
    }
}

/// Encodes with caller-provided per-stage tables (Huffman mode) or raw
/// packing (`None`).
pub fn encode_stream_with_tables(
    tokens: &[TokenFrame],
    cb: &Codebook<f32>,
    frame_rate: f64,
    tables: Option<Vec<HuffmanTable>>,
) -> Result<Bitstream> {
    let mode = if tables.is_some() { CodingMode::Huffman } else { CodingMode::Raw };
    let header = header_for(tokens, cb, frame_rate, mode)?;
    for (i, t) in tokens.iter().enumerate() {
        cb.check_tokens(t).map_err(|e| e.at_frame(i))?;
    }
    let mut w = BitWriter::new();
    match &tables {
        None => {
            let bits = bits_per_index(cb.size());
            for t in tokens {
                for &v in &t.indices {
                    w.write(v as u64, bits);
                }
            }
        }
        Some(tables) => {
            if tables.len() != cb.stages() || tables.iter().any(|t| t.alphabet_size() != cb.size()) {
                return Err(Error::InvalidArgument(
                    "Huffman tables do not match the codebook shape".into(),
                ));
            }
            for (i, t) in tokens.iter().enumerate() {
                for (k, &v) in t.indices.iter().enumerate() {
                    tables[k].encode(v as usize, &mut w).map_err(|e| e.at_frame(i))?;
                }
            }
        }
    }
    Ok(Bitstream {
        header,
        tables,
        payload: w.finish(),
    })
}

/// Decodes a serialized stream against `cb`.
pub fn decode_stream(bytes: &[u8], cb: &Codebook<f32>) -> Result<(StreamHeader, Vec<TokenFrame>)> {
    let stream = Bitstream::from_bytes(bytes)?;
    let header = &stream.header;
    let expected = cb.hash();
    if header.codebook_hash != expected {
        return Err(Error::CodebookMismatch {
            expected,
            found: header.codebook_hash,
        });
    }
    if (header.stages as usize, header.size as usize, header.dim as usize) != (cb.stages(), cb.size(), cb.dim()) {
        return Err(Error::framing(
            6,
            format!(
                "stream shape K={} V={} D={} does not match codebook K={} V={} D={}",
                header.stages,
                header.size,
                header.dim,
                cb.stages(),
                cb.size(),
                cb.dim()
            ),
        ));
    }
    let tokens = decode_payload(&stream)?;
    Ok((stream.header, tokens))
}

/// Decodes the payload of a parsed stream using only its header shape. No
/// codebook hash check is made.
pub fn decode_payload(stream: &Bitstream) -> Result<Vec<TokenFrame>> {
    let header = &stream.header;
    let base = stream.header_len();
    let frames = header.num_frames as usize;
    let stages = header.stages as usize;
    let size = header.size as usize;
    if stages == 0 || size == 0 {
        return Err(Error::framing(6, "stream declares an empty codebook"));
    }
    let mut r = BitReader::with_offset(&stream.payload, base);
    let mut tokens = Vec::with_capacity(frames.min(stream.payload.len() * 8 + 1));
    match &stream.tables {
        None => {
            let need = Bitstream::raw_payload_len(frames, stages, size);
            if stream.payload.len() < need {
                return Err(Error::framing(base + stream.payload.len(), "payload truncated"));
            }
            let bits = bits_per_index(size);
            for _ in 0..frames {
                let mut indices = Vec::with_capacity(stages);
                for stage in 0..stages {
                    let v = r.read(bits)? as u32;
                    if v as usize >= size {
                        return Err(Error::IndexOutOfRange {
                            stage,
                            index: v,
                            size,
                            frame: Some(tokens.len()),
                        });
                    }
                    indices.push(v);
                }
                tokens.push(TokenFrame::new(indices));
            }
        }
        Some(tables) => {
            let decoders: Vec<_> = tables.iter().map(HuffmanTable::decoder).collect();
            for _ in 0..frames {
                let indices = decoders
                    .iter()
                    .map(|d| d.decode(&mut r))
                    .collect::<Result<Vec<_>>>()?;
                tokens.push(TokenFrame::new(indices));
            }
        }
    }
    if r.remaining_whole_bytes() > 0 {
        return Err(Error::framing(r.byte_offset(), "trailing bytes after payload"));
    }
    Ok(tokens)
}
