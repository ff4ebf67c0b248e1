use crate::error::{Error, Result};

#[derive(Clone, Copy, PartialEq, Eq, Debug)]
pub enum HuffmanClass {
    Dc,
    Ac,
}

/// A DHT table: `counts[l]` codes of length `l + 1`, symbols in code order.
#[derive(Clone, PartialEq, Eq, Debug)]
pub struct HuffmanTable {
    pub class: HuffmanClass,
    pub id: u8,
    pub counts: [u8; 16],
    pub symbols: Vec<u8>,
}

impl HuffmanTable {
    pub fn new(class: HuffmanClass, id: u8, counts: [u8; 16], symbols: Vec<u8>) -> Result<Self> {
        let total: usize = counts.iter().map(|&c| usize::from(c)).sum();
        if total > 256 || total != symbols.len() {
            return Err(Error::corrupt(format!(
                "huffman table declares {total} codes but lists {} symbols",
                symbols.len()
            )));
        }
        // canonical assignment must stay prefix-free within 16 bits
        let mut code: u32 = 0;
        for (l, &c) in counts.iter().enumerate() {
            code += u32::from(c);
            if code > 1 << (l + 1) {
                return Err(Error::corrupt(format!("huffman code lengths overflow at length {}", l + 1)));
            }
            code <<= 1;
        }
        Ok(Self {
            class,
            id,
            counts,
            symbols,
        })
    }

    /// (code, length) per symbol, canonical order.
    fn codes(&self) -> Vec<(u8, u16, u8)> {
        let mut out = Vec::with_capacity(self.symbols.len());
        let mut code: u16 = 0;
        let mut k = 0;
        for (l, &c) in self.counts.iter().enumerate() {
            for _ in 0..c {
                out.push((self.symbols[k], code, (l + 1) as u8));
                code += 1;
                k += 1;
            }
            code <<= 1;
        }
        out
    }

    pub(crate) fn decoder(&self) -> HuffmanDecoder {
        let mut maxcode = [-1i32; 17];
        let mut valptr = [0usize; 17];
        let mut mincode = [0i32; 17];
        let mut code = 0i32;
        let mut k = 0usize;
        for l in 1..=16 {
            let n = usize::from(self.counts[l - 1]);
            if n > 0 {
                valptr[l] = k;
                mincode[l] = code;
                code += n as i32;
                k += n;
                maxcode[l] = code - 1;
            }
            code <<= 1;
        }
        HuffmanDecoder {
            maxcode,
            valptr,
            mincode,
            symbols: self.symbols.clone(),
        }
    }

    pub(crate) fn encoder(&self) -> HuffmanEncoder {
        let mut lookup = [(0u16, 0u8); 256];
        for (sym, code, len) in self.codes() {
            lookup[usize::from(sym)] = (code, len);
        }
        HuffmanEncoder { lookup }
    }

    fn standard(class: HuffmanClass, id: u8, counts: [u8; 16], symbols: &[u8]) -> Self {
        Self::new(class, id, counts, symbols.to_vec()).expect("standard table is valid")
    }

    pub fn standard_dc_luma() -> Self {
        Self::standard(HuffmanClass::Dc, 0, DC_LUMA_COUNTS, &DC_SYMBOLS)
    }

    pub fn standard_ac_luma() -> Self {
        Self::standard(HuffmanClass::Ac, 0, AC_LUMA_COUNTS, &AC_LUMA_SYMBOLS)
    }

    pub fn standard_dc_chroma() -> Self {
        Self::standard(HuffmanClass::Dc, 1, DC_CHROMA_COUNTS, &DC_SYMBOLS)
    }

    pub fn standard_ac_chroma() -> Self {
        Self::standard(HuffmanClass::Ac, 1, AC_CHROMA_COUNTS, &AC_CHROMA_SYMBOLS)
    }
}

pub(crate) struct HuffmanDecoder {
    maxcode: [i32; 17],
    valptr: [usize; 17],
    mincode: [i32; 17],
    symbols: Vec<u8>,
}

impl HuffmanDecoder {
    pub(crate) fn decode(&self, mut next_bit: impl FnMut() -> Result<u32>) -> Result<u8> {
        let mut code = next_bit()? as i32;
        for l in 1..=16 {
            if code <= self.maxcode[l] {
                let idx = self.valptr[l] + (code - self.mincode[l]) as usize;
                return self
                    .symbols
                    .get(idx)
                    .copied()
                    .ok_or_else(|| Error::corrupt("huffman symbol index out of range"));
            }
            if l < 16 {
                code = (code << 1) | next_bit()? as i32;
            }
        }
        Err(Error::corrupt("invalid huffman code"))
    }
}

pub(crate) struct HuffmanEncoder {
    lookup: [(u16, u8); 256],
}

impl HuffmanEncoder {
    pub(crate) fn code(&self, symbol: u8) -> Option<(u16, u8)> {
        let (code, len) = self.lookup[usize::from(symbol)];
        (len > 0).then_some((code, len))
    }
}

const DC_LUMA_COUNTS: [u8; 16] = [0, 1, 5, 1, 1, 1, 1, 1, 1, 0, 0, 0, 0, 0, 0, 0];
const DC_CHROMA_COUNTS: [u8; 16] = [0, 3, 1, 1, 1, 1, 1, 1, 1, 1, 1, 0, 0, 0, 0, 0];
const DC_SYMBOLS: [u8; 12] = [0, 1, 2, 3, 4, 5, 6, 7, 8, 9, 10, 11];

const AC_LUMA_COUNTS: [u8; 16] = [0, 2, 1, 3, 3, 2, 4, 3, 5, 5, 4, 4, 0, 0, 1, 0x7d];
const AC_LUMA_SYMBOLS: [u8; 162] = [
    0x01, 0x02, 0x03, 0x00, 0x04, 0x11, 0x05, 0x12, 0x21, 0x31, 0x41, 0x06, 0x13, 0x51, 0x61,
    0x07, 0x22, 0x71, 0x14, 0x32, 0x81, 0x91, 0xa1, 0x08, 0x23, 0x42, 0xb1, 0xc1, 0x15, 0x52,
    0xd1, 0xf0, 0x24, 0x33, 0x62, 0x72, 0x82, 0x09, 0x0a, 0x16, 0x17, 0x18, 0x19, 0x1a, 0x25,
    0x26, 0x27, 0x28, 0x29, 0x2a, 0x34, 0x35, 0x36, 0x37, 0x38, 0x39, 0x3a, 0x43, 0x44, 0x45,
    0x46, 0x47, 0x48, 0x49, 0x4a, 0x53, 0x54, 0x55, 0x56, 0x57, 0x58, 0x59, 0x5a, 0x63, 0x64,
    0x65, 0x66, 0x67, 0x68, 0x69, 0x6a, 0x73, 0x74, 0x75, 0x76, 0x77, 0x78, 0x79, 0x7a, 0x83,
    0x84, 0x85, 0x86, 0x87, 0x88, 0x89, 0x8a, 0x92, 0x93, 0x94, 0x95, 0x96, 0x97, 0x98, 0x99,
    0x9a, 0xa2, 0xa3, 0xa4, 0xa5, 0xa6, 0xa7, 0xa8, 0xa9, 0xaa, 0xb2, 0xb3, 0xb4, 0xb5, 0xb6,
    0xb7, 0xb8, 0xb9, 0xba, 0xc2, 0xc3, 0xc4, 0xc5, 0xc6, 0xc7, 0xc8, 0xc9, 0xca, 0xd2, 0xd3,
    0xd4, 0xd5, 0xd6, 0xd7, 0xd8, 0xd9, 0xda, 0xe1, 0xe2, 0xe3, 0xe4, 0xe5, 0xe6, 0xe7, 0xe8,
    0xe9, 0xea, 0xf1, 0xf2, 0xf3, 0xf4, 0xf5, 0xf6, 0xf7, 0xf8, 0xf9, 0xfa,
];

const AC_CHROMA_COUNTS: [u8; 16] = [0, 2, 1, 2, 4, 4, 3, 4, 7, 5, 4, 4, 0, 1, 2, 0x77];
const AC_CHROMA_SYMBOLS: [u8; 162] = [
    0x00, 0x01, 0x02, 0x03, 0x11, 0x04, 0x05, 0x21, 0x31, 0x06, 0x12, 0x41, 0x51, 0x07, 0x61,
    0x71, 0x13, 0x22, 0x32, 0x81, 0x08, 0x14, 0x42, 0x91, 0xa1, 0xb1, 0xc1, 0x09, 0x23, 0x33,
    0x52, 0xf0, 0x15, 0x62, 0x72, 0xd1, 0x0a, 0x16, 0x24, 0x34, 0xe1, 0x25, 0xf1, 0x17, 0x18,
    0x19, 0x1a, 0x26, 0x27, 0x28, 0x29, 0x2a, 0x35, 0x36, 0x37, 0x38, 0x39, 0x3a, 0x43, 0x44,
    0x45, 0x46, 0x47, 0x48, 0x49, 0x4a, 0x53, 0x54, 0x55, 0x56, 0x57, 0x58, 0x59, 0x5a, 0x63,
    0x64, 0x65, 0x66, 0x67, 0x68, 0x69, 0x6a, 0x73, 0x74, 0x75, 0x76, 0x77, 0x78, 0x79, 0x7a,
    0x82, 0x83, 0x84, 0x85, 0x86, 0x87, 0x88, 0x89, 0x8a, 0x92, 0x93, 0x94, 0x95, 0x96, 0x97,
    0x98, 0x99, 0x9a, 0xa2, 0xa3, 0xa4, 0xa5, 0xa6, 0xa7, 0xa8, 0xa9, 0xaa, 0xb2, 0xb3, 0xb4,
    0xb5, 0xb6, 0xb7, 0xb8, 0xb9, 0xba, 0xc2, 0xc3, 0xc4, 0xc5, 0xc6, 0xc7, 0xc8, 0xc9, 0xca,
    0xd2, 0xd3, 0xd4, 0xd5, 0xd6, 0xd7, 0xd8, 0xd9, 0xda, 0xe2, 0xe3, 0xe4, 0xe5, 0xe6, 0xe7,
    0xe8, 0xe9, 0xea, 0xf2, 0xf3, 0xf4, 0xf5, 0xf6, 0xf7, 0xf8, 0xf9, 0xfa,
];
