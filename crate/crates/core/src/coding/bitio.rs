use crate::{Error, Result};

/// MSB-first bit writer.
#[derive(Debug, Default, Clone)]
pub struct BitWriter {
    bytes: Vec<u8>,
    acc: u64,
    filled: u32,
}

impl BitWriter {
    pub fn new() -> Self {
        Self::default()
    }

    /// Appends the low `len` bits of `value`, most significant first.
    pub fn write(&mut self, value: u64, len: u32) {
        debug_assert!(len <= 64);
        if len == 0 {
            return;
        }
        let mut remaining = len;
        while remaining > 0 {
            let take = remaining.min(32);
            remaining -= take;
            let chunk = (value >> remaining) & ((1u64 << take) - 1);
            self.acc = (self.acc << take) | chunk;
            self.filled += take;
            while self.filled >= 8 {
                self.filled -= 8;
                self.bytes.push((self.acc >> self.filled) as u8);
            }
            self.acc &= (1u64 << self.filled) - 1;
        }
    }

    pub fn bit_len(&self) -> usize {
        self.bytes.len() * 8 + self.filled as usize
    }

    /// Flushes the partial byte with zero padding.
    pub fn finish(mut self) -> Vec<u8> {
        if self.filled > 0 {
            self.bytes.push((self.acc << (8 - self.filled)) as u8);
        }
        self.bytes
    }
}

/// MSB-first bit reader. `base_offset` is added to byte offsets in errors.
#[derive(Debug, Clone)]
pub struct BitReader<'a> {
    bytes: &'a [u8],
    pos: usize,
    base_offset: usize,
}

impl<'a> BitReader<'a> {
    pub fn new(bytes: &'a [u8]) -> Self {
        Self::with_offset(bytes, 0)
    }

    pub fn with_offset(bytes: &'a [u8], base_offset: usize) -> Self {
        Self {
            bytes,
            pos: 0,
            base_offset,
        }
    }

    #[inline]
    pub fn read_bit(&mut self) -> Result<u32> {
        let byte = self.pos / 8;
        if byte >= self.bytes.len() {
            return Err(Error::framing(
                self.base_offset + self.bytes.len(),
                "payload truncated",
            ));
        }
        let bit = (self.bytes[byte] >> (7 - (self.pos % 8))) & 1;
        self.pos += 1;
        Ok(bit as u32)
    }

    pub fn read(&mut self, len: u32) -> Result<u64> {
        if self.pos + len as usize > self.bytes.len() * 8 {
            return Err(Error::framing(
                self.base_offset + self.bytes.len(),
                "payload truncated",
            ));
        }
        let mut v = 0u64;
        for _ in 0..len {
            v = (v << 1) | self.read_bit()? as u64;
        }
        Ok(v)
    }

    pub fn bit_pos(&self) -> usize {
        self.pos
    }

    /// Byte offset (including the base) of the next unread bit.
    pub fn byte_offset(&self) -> usize {
        self.base_offset + self.pos / 8
    }

    /// Bytes not yet touched by any read.
    pub fn remaining_whole_bytes(&self) -> usize {
        self.bytes.len() - self.pos.div_ceil(8)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn msb_first_packing() {
        let mut w = BitWriter::new();
        w.write(1023, 10);
        w.write(0, 10);
        assert_eq!(w.bit_len(), 20);
        assert_eq!(w.finish(), vec![0xff, 0xc0, 0x00]);
    }

    #[test]
    fn round_trip_mixed_widths() {
        let mut w = BitWriter::new();
        let items = [(5u64, 3u32), (0, 1), (0x1_2345_6789, 40), (1, 1), (77, 13)];
        for &(v, n) in &items {
            w.write(v, n);
        }
        let bytes = w.finish();
        let mut r = BitReader::new(&bytes);
        for &(v, n) in &items {
            assert_eq!(r.read(n).unwrap(), v);
        }
    }

    #[test]
    fn truncation_reports_offset() {
        let bytes = [0xaa];
        let mut r = BitReader::with_offset(&bytes, 30);
        r.read(8).unwrap();
        match r.read(1) {
            Err(Error::Framing { offset: 31, .. }) => {}
            other => panic!("unexpected {other:?}"),
        }
    }
}
