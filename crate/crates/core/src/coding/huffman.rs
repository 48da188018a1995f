use std::cmp::Reverse;
use std::collections::BinaryHeap;

use super::{BitReader, BitWriter};
use crate::{Error, Result};

/// Longest code the table can represent.
pub const MAX_CODE_LEN: u8 = 64;

/// Canonical Huffman code for one stage. A length of 0 marks a symbol that
/// cannot be coded.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct HuffmanTable {
    lengths: Vec<u8>,
    codes: Vec<u64>,
}

/// Huffman code lengths for `counts`. Symbols with a zero count get length 0;
/// a lone used symbol gets a 1-bit code.
pub fn build_huffman(counts: &[u64]) -> Result<HuffmanTable> {
    let used: Vec<usize> = (0..counts.len()).filter(|&s| counts[s] > 0).collect();
    if used.is_empty() {
        return Err(Error::InvalidArgument(
            "cannot build a Huffman code from an all-zero histogram".into(),
        ));
    }
    let mut lengths = vec![0u8; counts.len()];
    if used.len() == 1 {
        lengths[used[0]] = 1;
        return HuffmanTable::from_lengths(lengths);
    }

    // Node ids: leaves are their symbol, internal nodes follow in creation
    // order, which makes the merge order (and so the lengths) deterministic.
    let n = counts.len();
    let mut parent = vec![usize::MAX; 2 * n];
    let mut heap: BinaryHeap<Reverse<(u64, usize)>> = used.iter().map(|&s| Reverse((counts[s], s))).collect();
    let mut next = n;
    while heap.len() > 1 {
        let Reverse((wa, a)) = heap.pop().unwrap();
        let Reverse((wb, b)) = heap.pop().unwrap();
        parent[a] = next;
        parent[b] = next;
        heap.push(Reverse((wa + wb, next)));
        next += 1;
    }
    let root = next - 1;
    // Parents are always created after their children, so depths can be
    // filled from the root downwards.
    let mut depth = vec![0u32; next];
    for node in (0..root).rev().filter(|&x| x >= n) {
        depth[node] = depth[parent[node]] + 1;
    }
    for &s in &used {
        let d = depth[parent[s]] + 1;
        if d > MAX_CODE_LEN as u32 {
            return Err(Error::InvalidArgument(format!(
                "Huffman code length {d} exceeds {MAX_CODE_LEN} bits"
            )));
        }
        lengths[s] = d as u8;
    }
    HuffmanTable::from_lengths(lengths)
}

/// [`build_huffman`] after raising every zero count to 1, so that every
/// symbol of the alphabet is codable.
pub fn build_smoothed_huffman(counts: &[u64]) -> Result<HuffmanTable> {
    let smoothed: Vec<u64> = counts.iter().map(|&c| c.max(1)).collect();
    build_huffman(&smoothed)
}

impl HuffmanTable {
    /// Assigns canonical codes to `lengths`: shorter codes first, ties by
    /// symbol index.
    pub fn from_lengths(lengths: Vec<u8>) -> Result<Self> {
        if let Some(&l) = lengths.iter().find(|&&l| l > MAX_CODE_LEN) {
            return Err(Error::InvalidArgument(format!("code length {l} exceeds {MAX_CODE_LEN}")));
        }
        let mut order: Vec<usize> = (0..lengths.len()).filter(|&s| lengths[s] > 0).collect();
        if order.is_empty() {
            return Err(Error::InvalidArgument("Huffman table has no codable symbol".into()));
        }
        let kraft: f64 = order.iter().map(|&s| 0.5f64.powi(lengths[s] as i32)).sum();
        if kraft > 1.0 + 1e-12 {
            return Err(Error::InvalidArgument(format!(
                "code lengths violate the Kraft inequality (sum {kraft})"
            )));
        }
        order.sort_by_key(|&s| (lengths[s], s));
        let mut codes = vec![0u64; lengths.len()];
        let mut code: u64 = 0;
        let mut prev_len = lengths[order[0]];
        for (i, &s) in order.iter().enumerate() {
            let len = lengths[s];
            if i > 0 {
                code += 1;
                code <<= len - prev_len;
            }
            codes[s] = code;
            prev_len = len;
        }
        Ok(Self { lengths, codes })
    }

    pub fn lengths(&self) -> &[u8] {
        &self.lengths
    }

    pub fn code(&self, symbol: usize) -> (u64, u8) {
        (self.codes[symbol], self.lengths[symbol])
    }

    pub fn alphabet_size(&self) -> usize {
        self.lengths.len()
    }

    /// `Σ 2^(−len)` over codable symbols.
    pub fn kraft_sum(&self) -> f64 {
        self.lengths
            .iter()
            .filter(|&&l| l > 0)
            .map(|&l| 0.5f64.powi(l as i32))
            .sum()
    }

    /// Average code length under the empirical distribution `counts`.
    pub fn mean_length(&self, counts: &[u64]) -> f64 {
        let total: u64 = counts.iter().sum();
        let bits: u64 = counts
            .iter()
            .zip(&self.lengths)
            .map(|(&c, &l)| c * l as u64)
            .sum();
        bits as f64 / total as f64
    }

    pub fn encode(&self, symbol: usize, out: &mut BitWriter) -> Result<()> {
        match self.lengths.get(symbol) {
            Some(&len) if len > 0 => {
                out.write(self.codes[symbol], len as u32);
                Ok(())
            }
            _ => Err(Error::InvalidArgument(format!("symbol {symbol} has no Huffman code"))),
        }
    }

    pub fn decoder(&self) -> HuffmanDecoder {
        HuffmanDecoder::new(&self.lengths)
    }
}

/// Canonical decoder rebuilt from code lengths alone.
#[derive(Debug, Clone)]
pub struct HuffmanDecoder {
    /// Per length: (first code, number of codes, offset into `symbols`).
    levels: Vec<(u64, u64, usize)>,
    symbols: Vec<u32>,
}

impl HuffmanDecoder {
    pub fn new(lengths: &[u8]) -> Self {
        let max = lengths.iter().copied().max().unwrap_or(0) as usize;
        let mut symbols: Vec<u32> = (0..lengths.len() as u32).filter(|&s| lengths[s as usize] > 0).collect();
        symbols.sort_by_key(|&s| (lengths[s as usize], s));
        let mut count = vec![0u64; max + 1];
        for &l in lengths.iter().filter(|&&l| l > 0) {
            count[l as usize] += 1;
        }
        let mut levels = Vec::with_capacity(max + 1);
        levels.push((0, 0, 0));
        let mut first = 0u64;
        let mut offset = 0usize;
        for len in 1..=max {
            first = (first + count[len - 1]) << 1;
            levels.push((first, count[len], offset));
            offset += count[len] as usize;
        }
        Self { levels, symbols }
    }

    pub fn decode(&self, reader: &mut BitReader<'_>) -> Result<u32> {
        let start = reader.byte_offset();
        let mut code = 0u64;
        for &(first, count, offset) in &self.levels[1..] {
            code = (code << 1) | reader.read_bit()? as u64;
            if code.wrapping_sub(first) < count {
                return Ok(self.symbols[offset + (code - first) as usize]);
            }
        }
        Err(Error::framing(start, "invalid Huffman code"))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn three_symbol_textbook_case() {
        let t = build_huffman(&[2, 1, 1]).unwrap();
        assert_eq!(t.lengths(), &[1, 2, 2]);
        assert_eq!(t.code(0), (0b0, 1));
        assert_eq!(t.code(1), (0b10, 2));
        assert_eq!(t.code(2), (0b11, 2));
        assert!((t.mean_length(&[2, 1, 1]) - 1.5).abs() < 1e-12);
        assert_eq!(t.kraft_sum(), 1.0);
    }

    #[test]
    fn single_symbol_gets_one_bit() {
        let t = build_huffman(&[0, 0, 9, 0]).unwrap();
        assert_eq!(t.lengths(), &[0, 0, 1, 0]);
        assert_eq!(t.mean_length(&[0, 0, 9, 0]), 1.0);
        let mut w = BitWriter::new();
        t.encode(2, &mut w).unwrap();
        assert!(t.encode(0, &mut w).is_err());
        let bytes = w.finish();
        assert_eq!(t.decoder().decode(&mut BitReader::new(&bytes)).unwrap(), 2);
    }

    #[test]
    fn uniform_four_symbols() {
        let t = build_huffman(&[5, 5, 5, 5]).unwrap();
        assert_eq!(t.lengths(), &[2, 2, 2, 2]);
    }

    #[test]
    fn all_zero_rejected() {
        assert!(build_huffman(&[0, 0]).is_err());
        assert!(build_huffman(&[]).is_err());
    }

    #[test]
    fn smoothing_makes_every_symbol_codable() {
        let t = build_smoothed_huffman(&[100, 0, 0, 0, 3]).unwrap();
        assert!(t.lengths().iter().all(|&l| l > 0));
        assert!((t.kraft_sum() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn canonical_codes_from_lengths_alone() {
        let t = build_huffman(&[40, 3, 7, 1, 1, 19, 0, 2]).unwrap();
        let rebuilt = HuffmanTable::from_lengths(t.lengths().to_vec()).unwrap();
        assert_eq!(t, rebuilt);
    }

    #[test]
    fn kraft_violation_rejected() {
        assert!(HuffmanTable::from_lengths(vec![1, 1, 1]).is_err());
    }

    #[test]
    fn invalid_code_detected() {
        // only "0" is a valid code
        let t = HuffmanTable::from_lengths(vec![1, 0]).unwrap();
        let bytes = [0b1000_0000];
        assert!(matches!(
            t.decoder().decode(&mut BitReader::new(&bytes)),
            Err(Error::Framing { .. })
        ));
    }

    #[test]
    fn encode_decode_round_trip() {
        let counts = [13u64, 0, 2, 2, 7, 1, 1, 30];
        let t = build_huffman(&counts).unwrap();
        let msg: Vec<usize> = vec![0, 7, 7, 4, 2, 3, 5, 6, 7, 0];
        let mut w = BitWriter::new();
        for &s in &msg {
            t.encode(s, &mut w).unwrap();
        }
        let bytes = w.finish();
        let dec = t.decoder();
        let mut r = BitReader::new(&bytes);
        let got: Vec<usize> = msg.iter().map(|_| dec.decode(&mut r).unwrap() as usize).collect();
        assert_eq!(got, msg);
    }
}
