//! LSB-first bit packing.

use crate::error::FormatError;

#[derive(Debug, Default)]
pub struct BitWriter {
    bytes: Vec<u8>,
    bit: usize,
}

impl BitWriter {
    pub fn new() -> Self {
        Self::default()
    }

    /// Appends the low `width` bits of `value`, least significant first.
    pub fn write(&mut self, value: u32, width: u8) {
        debug_assert!(width <= 32);
        debug_assert!(width == 32 || value >> width == 0);
        for i in 0..width {
            if self.bit.is_multiple_of(8) {
                self.bytes.push(0);
            }
            if value >> i & 1 == 1 {
                *self.bytes.last_mut().unwrap() |= 1 << (self.bit % 8);
            }
            self.bit += 1;
        }
    }

    pub fn bit_len(&self) -> usize {
        self.bit
    }

    /// Packed bytes; the last byte is zero-padded.
    pub fn finish(self) -> Vec<u8> {
        self.bytes
    }
}

pub struct BitReader<'a> {
    bytes: &'a [u8],
    bit: usize,
}

impl<'a> BitReader<'a> {
    pub fn new(bytes: &'a [u8]) -> Self {
        Self { bytes, bit: 0 }
    }

    pub fn read(&mut self, width: u8) -> Result<u32, FormatError> {
        if self.bit + width as usize > self.bytes.len() * 8 {
            return Err(FormatError::UnexpectedEof);
        }
        let mut v = 0u32;
        for i in 0..width {
            let byte = self.bytes[self.bit / 8];
            v |= u32::from(byte >> (self.bit % 8) & 1) << i;
            self.bit += 1;
        }
        Ok(v)
    }

    /// True when every bit after the read position is zero.
    pub fn rest_is_zero(&self) -> bool {
        (self.bit..self.bytes.len() * 8).all(|b| self.bytes[b / 8] >> (b % 8) & 1 == 0)
    }
}
