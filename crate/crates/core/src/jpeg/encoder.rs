use super::huffman::{HuffmanEncoder, HuffmanTable};
use super::{CoeffPlane, FrameInfo, QuantMatrix, ZIGZAG};
use crate::error::{Error, Result};

/// Knobs for [`encode_jpeg_with_options`].
#[derive(Clone, Copy, Debug, Default)]
pub struct EncodeOptions {
    /// MCUs between restart markers; 0 disables them.
    pub restart_interval: u16,
}

struct BitWriter {
    out: Vec<u8>,
    acc: u32,
    nbits: u32,
}

impl BitWriter {
    fn put(&mut self, bits: u32, n: u32) {
        debug_assert!(n <= 16);
        self.acc = (self.acc << n) | (bits & ((1 << n) - 1));
        self.nbits += n;
        while self.nbits >= 8 {
            self.nbits -= 8;
            let b = (self.acc >> self.nbits) as u8;
            self.out.push(b);
            if b == 0xFF {
                self.out.push(0x00);
            }
        }
        self.acc &= (1 << self.nbits) - 1;
    }

    /// Pad the last partial byte with one bits.
    fn flush(&mut self) {
        if self.nbits > 0 {
            let pad = 8 - self.nbits;
            self.put((1 << pad) - 1, pad);
        }
    }
}

fn category(v: i32) -> u32 {
    32 - v.unsigned_abs().leading_zeros()
}

fn magnitude_bits(v: i32, size: u32) -> u32 {
    if v < 0 {
        (v - 1) as u32 & ((1 << size) - 1)
    } else {
        v as u32
    }
}

fn put_symbol(w: &mut BitWriter, table: &HuffmanEncoder, symbol: u8) -> Result<()> {
    let (code, len) = table
        .code(symbol)
        .ok_or_else(|| Error::Domain(format!("symbol 0x{symbol:02X} has no code in the standard table")))?;
    w.put(u32::from(code), u32::from(len));
    Ok(())
}

fn segment(out: &mut Vec<u8>, marker: u8, payload: &[u8]) {
    out.extend_from_slice(&[0xFF, marker]);
    out.extend_from_slice(&((payload.len() + 2) as u16).to_be_bytes());
    out.extend_from_slice(payload);
}

fn dht_payload(table: &HuffmanTable) -> Vec<u8> {
    let class = match table.class {
        super::HuffmanClass::Dc => 0u8,
        super::HuffmanClass::Ac => 1u8,
    };
    let mut p = vec![class << 4 | table.id];
    p.extend_from_slice(&table.counts);
    p.extend_from_slice(&table.symbols);
    p
}

fn validate(planes: &[CoeffPlane], qmatrices: &[QuantMatrix], frame: &FrameInfo) -> Result<()> {
    frame.validate()?;
    if frame.components.iter().any(|c| c.h_sampling != 1 || c.v_sampling != 1) {
        return Err(Error::Dimension("encoder requires 1x1 sampling factors".into()));
    }
    if planes.len() != frame.components.len() {
        return Err(Error::Dimension(format!(
            "{} planes for {} frame components",
            planes.len(),
            frame.components.len()
        )));
    }
    for (p, c) in planes.iter().zip(&frame.components) {
        if p.width_blocks != frame.width_blocks() || p.height_blocks != frame.height_blocks() {
            return Err(Error::Dimension(format!(
                "plane {}x{} blocks does not match {}x{} frame",
                p.width_blocks, p.height_blocks, frame.width, frame.height
            )));
        }
        if usize::from(c.quant_table) >= qmatrices.len() || c.quant_table > 3 {
            return Err(Error::MissingTable(format!("quantization table {}", c.quant_table)));
        }
    }
    // AC magnitude category <= 10 and DC difference category <= 11 for the standard tables
    for p in planes {
        let mut pred = 0;
        for (bi, b) in p.blocks.iter().enumerate() {
            let diff = b[0] - pred;
            if category(diff) > 11 {
                return Err(Error::CoefficientOutOfRange {
                    block: bi,
                    index: 0,
                    value: b[0],
                });
            }
            pred = b[0];
            if let Some((i, &v)) = b.iter().enumerate().skip(1).find(|(_, v)| v.unsigned_abs() > 1023) {
                return Err(Error::CoefficientOutOfRange {
                    block: bi,
                    index: i,
                    value: v,
                });
            }
        }
    }
    Ok(())
}

/// Encode quantized coefficient planes as a baseline JFIF stream using the
/// standard example Huffman tables. `qmatrices` is indexed by each
/// component's `quant_table` id. No restart markers are emitted.
pub fn encode_jpeg(planes: &[CoeffPlane], qmatrices: &[QuantMatrix], frame: &FrameInfo) -> Result<Vec<u8>> {
    encode_jpeg_with_options(planes, qmatrices, frame, EncodeOptions::default())
}

/// [`encode_jpeg`] with restart-marker emission, used to produce streams
/// that exercise the parser's restart handling.
pub fn encode_jpeg_with_options(
    planes: &[CoeffPlane],
    qmatrices: &[QuantMatrix],
    frame: &FrameInfo,
    options: EncodeOptions,
) -> Result<Vec<u8>> {
    validate(planes, qmatrices, frame)?;

    let mut out = vec![0xFF, 0xD8];
    segment(&mut out, 0xE0, b"JFIF\0\x01\x01\x00\x00\x01\x00\x01\x00\x00");

    let mut used_tables: Vec<u8> = frame.components.iter().map(|c| c.quant_table).collect();
    used_tables.sort_unstable();
    used_tables.dedup();
    for id in used_tables {
        let mut p = vec![id];
        p.extend(qmatrices[usize::from(id)].zigzag().iter().map(|&v| v as u8));
        segment(&mut out, 0xDB, &p);
    }

    let mut sof = vec![8];
    sof.extend_from_slice(&frame.height.to_be_bytes());
    sof.extend_from_slice(&frame.width.to_be_bytes());
    sof.push(frame.components.len() as u8);
    for c in &frame.components {
        sof.extend_from_slice(&[c.id, 0x11, c.quant_table]);
    }
    segment(&mut out, 0xC0, &sof);

    let luma = (HuffmanTable::standard_dc_luma(), HuffmanTable::standard_ac_luma());
    let chroma = (HuffmanTable::standard_dc_chroma(), HuffmanTable::standard_ac_chroma());
    let mut dht = dht_payload(&luma.0);
    dht.extend(dht_payload(&luma.1));
    if frame.components.len() > 1 {
        dht.extend(dht_payload(&chroma.0));
        dht.extend(dht_payload(&chroma.1));
    }
    segment(&mut out, 0xC4, &dht);

    if options.restart_interval > 0 {
        segment(&mut out, 0xDD, &options.restart_interval.to_be_bytes());
    }

    let mut sos = vec![frame.components.len() as u8];
    for (i, c) in frame.components.iter().enumerate() {
        sos.extend_from_slice(&[c.id, if i == 0 { 0x00 } else { 0x11 }]);
    }
    sos.extend_from_slice(&[0, 63, 0]);
    segment(&mut out, 0xDA, &sos);

    let encoders: Vec<(HuffmanEncoder, HuffmanEncoder)> = (0..frame.components.len())
        .map(|i| {
            let (dc, ac) = if i == 0 { &luma } else { &chroma };
            (dc.encoder(), ac.encoder())
        })
        .collect();

    let mut w = BitWriter { out, acc: 0, nbits: 0 };
    let mut preds = vec![0i32; planes.len()];
    let n_mcu = frame.width_blocks() * frame.height_blocks();
    let interval = usize::from(options.restart_interval);
    let mut rst = 0u8;
    for mcu in 0..n_mcu {
        if interval > 0 && mcu > 0 && mcu % interval == 0 {
            w.flush();
            w.out.extend_from_slice(&[0xFF, 0xD0 + rst]);
            rst = (rst + 1) % 8;
            preds.iter_mut().for_each(|p| *p = 0);
        }
        for (ci, plane) in planes.iter().enumerate() {
            let (dc_enc, ac_enc) = &encoders[ci];
            let block = &plane.blocks[mcu];
            let diff = block[0] - preds[ci];
            preds[ci] = block[0];
            let size = category(diff);
            put_symbol(&mut w, dc_enc, size as u8)?;
            if size > 0 {
                w.put(magnitude_bits(diff, size), size);
            }
            let mut run = 0u8;
            for &zi in &ZIGZAG[1..] {
                let v = block[zi];
                if v == 0 {
                    run += 1;
                    continue;
                }
                while run >= 16 {
                    put_symbol(&mut w, ac_enc, 0xF0)?;
                    run -= 16;
                }
                let size = category(v);
                put_symbol(&mut w, ac_enc, run << 4 | size as u8)?;
                w.put(magnitude_bits(v, size), size);
                run = 0;
            }
            if run > 0 {
                put_symbol(&mut w, ac_enc, 0x00)?;
            }
        }
    }
    w.flush();
    let mut out = w.out;
    out.extend_from_slice(&[0xFF, 0xD9]);
    Ok(out)
}
