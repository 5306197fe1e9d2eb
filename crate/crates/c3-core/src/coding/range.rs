//! Byte-oriented range coder with carry propagation.
//!
//! Classic low/range construction: 32-bit range, 64-bit low so pending
//! carries ride in bit 32, one cached byte plus a run length for the
//! 0xFF-propagation case. The remainder of `range / TOTAL` is absorbed by
//! the alphabet's last symbol, and the decoder mirrors that choice, so no
//! probability mass is wasted. Reads past the end of the buffer yield zero
//! bytes; a well-formed stream never depends on more than the flush tail.

use super::table::{SymbolTable, TOTAL};

const TOP: u32 = 1 << 24;

pub struct RangeEncoder {
    low: u64,
    range: u32,
    cache: u8,
    cache_size: u64,
    out: Vec<u8>,
}

impl RangeEncoder {
    pub fn new() -> Self {
        RangeEncoder {
            low: 0,
            range: u32::MAX,
            cache: 0,
            cache_size: 1,
            out: Vec::new(),
        }
    }

    pub fn encode(&mut self, table: &SymbolTable, sym: usize) {
        let (cum, freq) = table.span(sym);
        let r = self.range / TOTAL;
        self.low += (cum * r) as u64;
        if cum + freq == TOTAL {
            self.range -= cum * r;
        } else {
            self.range = freq * r;
        }
        while self.range < TOP {
            self.range <<= 8;
            self.shift_low();
        }
    }

    fn shift_low(&mut self) {
        if self.low < 0xFF00_0000 || self.low > 0xFFFF_FFFF {
            let carry = (self.low >> 32) as u8;
            self.out.push(self.cache.wrapping_add(carry));
            for _ in 1..self.cache_size {
                self.out.push(0xFFu8.wrapping_add(carry));
            }
            self.cache = (self.low >> 24) as u8;
            self.cache_size = 0;
        }
        self.cache_size += 1;
        self.low = (self.low << 8) & 0xFFFF_FFFF;
    }

    /// Flushes the remaining state. The first output byte is a placeholder
    /// the decoder skips.
    pub fn finish(mut self) -> Vec<u8> {
        for _ in 0..5 {
            self.shift_low();
        }
        self.out
    }
}

pub struct RangeDecoder<'a> {
    buf: &'a [u8],
    pos: usize,
    range: u32,
    code: u32,
}

impl<'a> RangeDecoder<'a> {
    pub fn new(buf: &'a [u8]) -> Self {
        let mut d = RangeDecoder {
            buf,
            pos: 1,
            range: u32::MAX,
            code: 0,
        };
        for _ in 0..4 {
            d.code = (d.code << 8) | d.byte() as u32;
        }
        d
    }

    fn byte(&mut self) -> u8 {
        let b = self.buf.get(self.pos).copied().unwrap_or(0);
        self.pos += 1;
        b
    }

    pub fn decode(&mut self, table: &SymbolTable) -> usize {
        let r = self.range / TOTAL;
        let dv = (self.code / r).min(TOTAL - 1);
        let sym = table.find(dv);
        let (cum, freq) = table.span(sym);
        self.code -= cum * r;
        if cum + freq == TOTAL {
            self.range -= cum * r;
        } else {
            self.range = freq * r;
        }
        while self.range < TOP {
            self.code = (self.code << 8) | self.byte() as u32;
            self.range <<= 8;
        }
        sym
    }
}
