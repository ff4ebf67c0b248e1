use super::huffman::{HuffmanClass, HuffmanDecoder, HuffmanTable};
use super::{Block, CoeffPlane, ComponentInfo, FrameInfo, QuantMatrix, ZIGZAG};
use crate::error::{Error, Result};

/// Output of [`parse_jpeg`]: frame header, per-component Q-matrix and
/// per-component quantized coefficients (DC predictor resolved).
#[derive(Clone, Debug)]
pub struct DecodedJpeg {
    pub frame: FrameInfo,
    pub qmatrices: Vec<QuantMatrix>,
    pub planes: Vec<CoeffPlane>,
    pub restart_interval: u16,
}

impl DecodedJpeg {
    /// Luma (first component) plane and its Q-matrix.
    pub fn luma(&self) -> (&CoeffPlane, &QuantMatrix) {
        (&self.planes[0], &self.qmatrices[0])
    }
}

struct Reader<'a> {
    data: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn u8(&mut self) -> Result<u8> {
        let b = *self
            .data
            .get(self.pos)
            .ok_or_else(|| Error::corrupt("unexpected end of data"))?;
        self.pos += 1;
        Ok(b)
    }

    fn u16(&mut self) -> Result<u16> {
        Ok(u16::from(self.u8()?) << 8 | u16::from(self.u8()?))
    }

    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.pos + n;
        let s = self
            .data
            .get(self.pos..end)
            .ok_or_else(|| Error::corrupt("truncated segment"))?;
        self.pos = end;
        Ok(s)
    }

    /// Segment payload after its 2-byte length field.
    fn segment(&mut self) -> Result<&'a [u8]> {
        let len = usize::from(self.u16()?);
        if len < 2 {
            return Err(Error::corrupt(format!("segment length {len}")));
        }
        self.take(len - 2)
    }

    fn next_marker(&mut self) -> Result<u8> {
        // tolerate fill bytes before a marker
        let mut b = self.u8()?;
        if b != 0xFF {
            return Err(Error::corrupt(format!("expected marker, found 0x{b:02X}")));
        }
        while b == 0xFF {
            b = self.u8()?;
        }
        Ok(b)
    }
}

/// Entropy-coded segment reader with byte unstuffing.
struct BitReader<'a> {
    data: &'a [u8],
    pos: usize,
    acc: u32,
    nbits: u32,
    marker: Option<u8>,
}

impl<'a> BitReader<'a> {
    fn new(data: &'a [u8], pos: usize) -> Self {
        Self {
            data,
            pos,
            acc: 0,
            nbits: 0,
            marker: None,
        }
    }

    fn fill(&mut self) -> Result<()> {
        if self.marker.is_some() {
            return Err(Error::corrupt("entropy-coded data ran into a marker"));
        }
        let b = *self
            .data
            .get(self.pos)
            .ok_or_else(|| Error::corrupt("entropy-coded data truncated"))?;
        if b == 0xFF {
            let next = *self
                .data
                .get(self.pos + 1)
                .ok_or_else(|| Error::corrupt("entropy-coded data truncated"))?;
            if next == 0x00 {
                self.pos += 2;
            } else {
                self.marker = Some(next);
                return Err(Error::corrupt("entropy-coded data ran into a marker"));
            }
        } else {
            self.pos += 1;
        }
        self.acc = (self.acc << 8) | u32::from(b);
        self.nbits += 8;
        Ok(())
    }

    fn bit(&mut self) -> Result<u32> {
        if self.nbits == 0 {
            self.fill()?;
        }
        self.nbits -= 1;
        Ok((self.acc >> self.nbits) & 1)
    }

    fn bits(&mut self, n: u32) -> Result<u32> {
        let mut v = 0;
        for _ in 0..n {
            v = (v << 1) | self.bit()?;
        }
        Ok(v)
    }

    /// Signed value of `size` magnitude bits (JPEG EXTEND).
    fn receive_extend(&mut self, size: u8) -> Result<i32> {
        if size == 0 {
            return Ok(0);
        }
        if size > 15 {
            return Err(Error::corrupt(format!("magnitude category {size}")));
        }
        let v = self.bits(u32::from(size))? as i32;
        Ok(if v < 1 << (size - 1) { v - (1 << size) + 1 } else { v })
    }

    fn decode(&mut self, table: &HuffmanDecoder) -> Result<u8> {
        table.decode(|| self.bit())
    }

    /// Drop buffered bits and consume the expected restart marker.
    fn restart(&mut self, expected: u8) -> Result<()> {
        self.nbits = 0;
        self.acc = 0;
        let m = match self.marker.take() {
            Some(m) => {
                self.pos += 2;
                m
            }
            None => {
                // padding bits already consumed; the marker must be next
                while self.data.get(self.pos) == Some(&0xFF) && self.data.get(self.pos + 1) == Some(&0xFF) {
                    self.pos += 1;
                }
                if self.data.get(self.pos) != Some(&0xFF) {
                    return Err(Error::corrupt("missing restart marker"));
                }
                let m = *self
                    .data
                    .get(self.pos + 1)
                    .ok_or_else(|| Error::corrupt("missing restart marker"))?;
                self.pos += 2;
                m
            }
        };
        if m != expected {
            return Err(Error::corrupt(format!(
                "expected RST{} marker, found 0x{m:02X}",
                expected - 0xD0
            )));
        }
        Ok(())
    }

    /// Position of the first marker after the scan data.
    fn end_of_scan(&self) -> usize {
        let mut p = self.pos;
        while p + 1 < self.data.len() {
            if self.data[p] == 0xFF && self.data[p + 1] != 0x00 && !(0xD0..=0xD7).contains(&self.data[p + 1]) {
                return p;
            }
            p += 1;
        }
        self.data.len()
    }
}

struct ScanComponent {
    index: usize,
    dc: usize,
    ac: usize,
}

fn unsupported(marker: u8, reason: &str) -> Error {
    Error::UnsupportedMarker {
        marker,
        reason: reason.into(),
    }
}

/// Parse a baseline (SOF0, Huffman, 8-bit) JPEG stream into quantized
/// coefficients and the stored Q-matrices, without dequantizing.
pub fn parse_jpeg(bytes: &[u8]) -> Result<DecodedJpeg> {
    let mut r = Reader { data: bytes, pos: 0 };
    if r.u16().ok() != Some(0xFFD8) {
        return Err(Error::corrupt("missing SOI marker"));
    }

    let mut qtables: [Option<QuantMatrix>; 4] = [None; 4];
    let mut dc_tables: [Option<HuffmanDecoder>; 4] = Default::default();
    let mut ac_tables: [Option<HuffmanDecoder>; 4] = Default::default();
    let mut frame: Option<FrameInfo> = None;
    let mut planes: Vec<CoeffPlane> = Vec::new();
    let mut frame_qmatrices: Vec<QuantMatrix> = Vec::new();
    let mut restart_interval = 0u16;
    let mut seen_scan = false;

    loop {
        let marker = r.next_marker()?;
        match marker {
            0xD8 => return Err(Error::corrupt("unexpected SOI")),
            0xD9 => break,
            0xC0 => {
                if frame.is_some() {
                    return Err(Error::corrupt("multiple frame headers"));
                }
                let f = parse_sof(r.segment()?)?;
                planes = f
                    .components
                    .iter()
                    .map(|c| CoeffPlane::zeros(c.id, f.width_blocks(), f.height_blocks()))
                    .collect();
                frame = Some(f);
            }
            0xC2 | 0xC6 | 0xCA | 0xCE => return Err(unsupported(marker, "progressive DCT")),
            0xC9..=0xCB | 0xCD..=0xCF => return Err(unsupported(marker, "arithmetic coding")),
            0xC1 => return Err(unsupported(marker, "extended sequential DCT")),
            0xC3 | 0xC5 | 0xC7 => return Err(unsupported(marker, "lossless or hierarchical mode")),
            0xCC => return Err(unsupported(marker, "arithmetic coding conditioning")),
            0xC4 => {
                for t in parse_dht(r.segment()?)? {
                    let slot = usize::from(t.id);
                    match t.class {
                        HuffmanClass::Dc => dc_tables[slot] = Some(t.decoder()),
                        HuffmanClass::Ac => ac_tables[slot] = Some(t.decoder()),
                    }
                }
            }
            0xDB => {
                for (id, q) in parse_dqt(r.segment()?)? {
                    qtables[usize::from(id)] = Some(q);
                }
            }
            0xDD => {
                let seg = r.segment()?;
                if seg.len() != 2 {
                    return Err(Error::corrupt("DRI segment length"));
                }
                restart_interval = u16::from(seg[0]) << 8 | u16::from(seg[1]);
            }
            0xDA => {
                let f = frame.as_ref().ok_or_else(|| Error::corrupt("scan before frame header"))?;
                let seg = r.segment()?;
                if frame_qmatrices.is_empty() {
                    frame_qmatrices = f
                        .components
                        .iter()
                        .map(|c| {
                            qtables[usize::from(c.quant_table)].ok_or_else(|| {
                                Error::MissingTable(format!(
                                    "quantization table {} for component {}",
                                    c.quant_table, c.id
                                ))
                            })
                        })
                        .collect::<Result<_>>()?;
                }
                let comps = parse_sos(seg, f, &dc_tables, &ac_tables)?;
                let mut bits = BitReader::new(bytes, r.pos);
                decode_scan(&mut bits, f, &comps, &dc_tables, &ac_tables, restart_interval, &mut planes)?;
                r.pos = bits.end_of_scan();
                seen_scan = true;
            }
            0xE0..=0xEF | 0xFE => {
                r.segment()?;
            }
            0xD0..=0xD7 => return Err(Error::corrupt("restart marker outside scan")),
            0x01 => {}
            other => {
                // unknown segments with a length field are skipped
                if (0xF0..=0xFD).contains(&other) || other == 0xDC || other == 0xDE || other == 0xDF {
                    r.segment()?;
                } else {
                    return Err(unsupported(other, "unknown marker"));
                }
            }
        }
    }

    let frame = frame.ok_or_else(|| Error::corrupt("no frame header"))?;
    if !seen_scan {
        return Err(Error::corrupt("no scan data"));
    }
    Ok(DecodedJpeg {
        frame,
        qmatrices: frame_qmatrices,
        planes,
        restart_interval,
    })
}

fn parse_sof(seg: &[u8]) -> Result<FrameInfo> {
    let mut r = Reader { data: seg, pos: 0 };
    let precision = r.u8()?;
    if precision != 8 {
        return Err(unsupported(0xC0, "sample precision other than 8 bits"));
    }
    let height = r.u16()?;
    let width = r.u16()?;
    if height == 0 {
        return Err(unsupported(0xDC, "height defined by DNL"));
    }
    let n = r.u8()?;
    let mut components = Vec::with_capacity(usize::from(n));
    for _ in 0..n {
        let id = r.u8()?;
        let hv = r.u8()?;
        let tq = r.u8()?;
        if tq > 3 {
            return Err(Error::corrupt(format!("quantization table id {tq}")));
        }
        components.push(ComponentInfo {
            id,
            h_sampling: hv >> 4,
            v_sampling: hv & 0x0F,
            quant_table: tq,
        });
    }
    if r.pos != seg.len() {
        return Err(Error::corrupt("SOF segment length mismatch"));
    }
    let mut frame = FrameInfo {
        width,
        height,
        components,
    };
    if frame.components.len() == 1 {
        // a lone component is always coded one block per MCU
        frame.components[0].h_sampling = 1;
        frame.components[0].v_sampling = 1;
    }
    frame.validate()?;
    Ok(frame)
}

fn parse_dqt(seg: &[u8]) -> Result<Vec<(u8, QuantMatrix)>> {
    let mut r = Reader { data: seg, pos: 0 };
    let mut out = Vec::new();
    while r.pos < seg.len() {
        let pq_tq = r.u8()?;
        let (pq, tq) = (pq_tq >> 4, pq_tq & 0x0F);
        if tq > 3 {
            return Err(Error::corrupt(format!("quantization table id {tq}")));
        }
        let mut zz = [0u16; 64];
        for v in zz.iter_mut() {
            *v = match pq {
                0 => u16::from(r.u8()?),
                1 => r.u16()?,
                _ => return Err(Error::corrupt(format!("quantization precision {pq}"))),
            };
        }
        let q = QuantMatrix::from_zigzag(&zz).map_err(|e| Error::corrupt(e.to_string()))?;
        out.push((tq, q));
    }
    Ok(out)
}

fn parse_dht(seg: &[u8]) -> Result<Vec<HuffmanTable>> {
    let mut r = Reader { data: seg, pos: 0 };
    let mut out = Vec::new();
    while r.pos < seg.len() {
        let tc_th = r.u8()?;
        let class = match tc_th >> 4 {
            0 => HuffmanClass::Dc,
            1 => HuffmanClass::Ac,
            c => return Err(Error::corrupt(format!("huffman table class {c}"))),
        };
        let id = tc_th & 0x0F;
        if id > 3 {
            return Err(Error::corrupt(format!("huffman table id {id}")));
        }
        let mut counts = [0u8; 16];
        counts.copy_from_slice(r.take(16)?);
        let total: usize = counts.iter().map(|&c| usize::from(c)).sum();
        let symbols = r.take(total)?.to_vec();
        out.push(HuffmanTable::new(class, id, counts, symbols)?);
    }
    Ok(out)
}

fn parse_sos(
    seg: &[u8],
    frame: &FrameInfo,
    dc_tables: &[Option<HuffmanDecoder>; 4],
    ac_tables: &[Option<HuffmanDecoder>; 4],
) -> Result<Vec<ScanComponent>> {
    let mut r = Reader { data: seg, pos: 0 };
    let ns = r.u8()?;
    if ns == 0 || usize::from(ns) > frame.components.len() {
        return Err(Error::corrupt(format!("scan with {ns} components")));
    }
    let mut comps = Vec::new();
    for _ in 0..ns {
        let id = r.u8()?;
        let tables = r.u8()?;
        let index = frame
            .components
            .iter()
            .position(|c| c.id == id)
            .ok_or_else(|| Error::corrupt(format!("scan references unknown component {id}")))?;
        let (dc, ac) = (usize::from(tables >> 4), usize::from(tables & 0x0F));
        if dc > 3 || dc_tables[dc].is_none() {
            return Err(Error::MissingTable(format!("DC huffman table {dc}")));
        }
        if ac > 3 || ac_tables[ac].is_none() {
            return Err(Error::MissingTable(format!("AC huffman table {ac}")));
        }
        comps.push(ScanComponent { index, dc, ac });
    }
    let ss = r.u8()?;
    let se = r.u8()?;
    let ahal = r.u8()?;
    if ss != 0 || se != 63 || ahal != 0 {
        return Err(unsupported(0xDA, "spectral selection or successive approximation"));
    }
    Ok(comps)
}

fn decode_block(
    bits: &mut BitReader<'_>,
    dc: &HuffmanDecoder,
    ac: &HuffmanDecoder,
    pred: &mut i32,
) -> Result<Block> {
    let mut block = [0i32; 64];
    let t = bits.decode(dc)?;
    if t > 11 {
        return Err(Error::corrupt(format!("DC magnitude category {t}")));
    }
    *pred += bits.receive_extend(t)?;
    block[0] = *pred;
    let mut k = 1;
    while k < 64 {
        let rs = bits.decode(ac)?;
        let (run, size) = (usize::from(rs >> 4), rs & 0x0F);
        if size == 0 {
            if run == 15 {
                k += 16;
                continue;
            }
            break;
        }
        k += run;
        if k > 63 {
            return Err(Error::corrupt("AC run past end of block"));
        }
        block[ZIGZAG[k]] = bits.receive_extend(size)?;
        k += 1;
    }
    if k > 64 {
        return Err(Error::corrupt("zero run past end of block"));
    }
    if block.iter().any(|v| i16::try_from(*v).is_err()) {
        return Err(Error::corrupt("coefficient outside 16-bit range"));
    }
    Ok(block)
}

fn decode_scan(
    bits: &mut BitReader<'_>,
    frame: &FrameInfo,
    comps: &[ScanComponent],
    dc_tables: &[Option<HuffmanDecoder>; 4],
    ac_tables: &[Option<HuffmanDecoder>; 4],
    restart_interval: u16,
    planes: &mut [CoeffPlane],
) -> Result<()> {
    // with 1x1 sampling, interleaved and non-interleaved MCUs are both one block per component
    let (wb, hb) = (frame.width_blocks(), frame.height_blocks());
    let mut preds = vec![0i32; comps.len()];
    let mut rst = 0u8;
    for mcu in 0..wb * hb {
        if restart_interval > 0 && mcu > 0 && mcu % usize::from(restart_interval) == 0 {
            bits.restart(0xD0 + rst)?;
            rst = (rst + 1) % 8;
            preds.iter_mut().for_each(|p| *p = 0);
        }
        for (ci, c) in comps.iter().enumerate() {
            let dc = dc_tables[c.dc].as_ref().expect("checked in parse_sos");
            let ac = ac_tables[c.ac].as_ref().expect("checked in parse_sos");
            planes[c.index].blocks[mcu] = decode_block(bits, dc, ac, &mut preds[ci])?;
        }
    }
    Ok(())
}
