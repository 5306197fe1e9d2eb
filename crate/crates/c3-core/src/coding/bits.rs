//! MSB-first bit packing for sub-byte header fields.

use crate::error::{Error, Result};

#[derive(Default)]
pub struct BitWriter {
    out: Vec<u8>,
    acc: u64,
    nbits: u32,
}

impl BitWriter {
    pub fn new() -> Self {
        BitWriter::default()
    }

    pub fn push(&mut self, value: u64, bits: u32) {
        debug_assert!(bits >= 1 && bits <= 57 && value < (1u64 << bits));
        self.acc = (self.acc << bits) | value;
        self.nbits += bits;
        while self.nbits >= 8 {
            self.nbits -= 8;
            self.out.push((self.acc >> self.nbits) as u8);
        }
    }

    /// Pads with zero bits to the next byte boundary.
    pub fn align(&mut self) {
        if self.nbits > 0 {
            self.push(0, 8 - self.nbits);
        }
    }

    pub fn into_bytes(mut self) -> Vec<u8> {
        self.align();
        self.out
    }
}

pub struct BitReader<'a> {
    buf: &'a [u8],
    pos: usize,
    acc: u64,
    nbits: u32,
}

impl<'a> BitReader<'a> {
    pub fn new(buf: &'a [u8]) -> Self {
        BitReader {
            buf,
            pos: 0,
            acc: 0,
            nbits: 0,
        }
    }

    pub fn pull(&mut self, bits: u32) -> Result<u64> {
        debug_assert!(bits <= 57);
        while self.nbits < bits {
            let b = *self
                .buf
                .get(self.pos)
                .ok_or_else(|| Error::corrupt(self.pos, "bit field past end of segment"))?;
            self.pos += 1;
            self.acc = (self.acc << 8) | b as u64;
            self.nbits += 8;
        }
        self.nbits -= bits;
        let v = (self.acc >> self.nbits) & ((1u64 << bits) - 1);
        Ok(v)
    }

    /// Discards bits up to the next byte boundary.
    pub fn align(&mut self) {
        self.nbits -= self.nbits % 8;
    }

    /// Bytes consumed so far (after an align, the exact byte offset).
    pub fn consumed(&self) -> usize {
        self.pos - (self.nbits / 8) as usize
    }
}
