//! JPEG marker parsing: quantization tables, frame headers and QST assembly.
//!
//! Only the marker structure is walked. Entropy-coded scan data is skipped,
//! never decoded.

use std::fmt;

use serde::{Deserialize, Deserializer, Serialize, Serializer};
use thiserror::Error;

use crate::codec::scale_default_table;

const SOI: u8 = 0xD8;
const EOI: u8 = 0xD9;
const SOS: u8 = 0xDA;
const DQT: u8 = 0xDB;
const SOF0: u8 = 0xC0;
const SOF1: u8 = 0xC1;
const SOF2: u8 = 0xC2;

/// Zig-zag scan position -> natural (row-major) index.
pub const ZIGZAG_TO_NATURAL: [usize; 64] = [
    0, 1, 8, 16, 9, 2, 3, 10, 17, 24, 32, 25, 18, 11, 4, 5, 12, 19, 26, 33, 40, 48, 41, 34, 27,
    20, 13, 6, 7, 14, 21, 28, 35, 42, 49, 56, 57, 50, 43, 36, 29, 22, 15, 23, 30, 37, 44, 51, 58,
    59, 52, 45, 38, 31, 39, 46, 53, 60, 61, 54, 47, 55, 62, 63,
];

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum JpegError {
    #[error("malformed JPEG stream: {0}")]
    MalformedStream(String),
    #[error("unsupported DQT precision value {0}")]
    UnsupportedPrecisionValue(u8),
    #[error("no SOF0/SOF2 frame header before first scan")]
    NoFrameHeader,
    #[error("chroma components bind different quantization tables")]
    MismatchedChromaTables,
    #[error("quantization table {0} is referenced but never defined")]
    MissingTable(u8),
    #[error("unsupported component count {0}")]
    UnsupportedComponents(usize),
    #[error("invalid QST: {0}")]
    InvalidQst(String),
}

fn malformed(msg: impl Into<String>) -> JpegError {
    JpegError::MalformedStream(msg.into())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub enum Precision {
    Bits8,
    Bits16,
}

/// One quantization table as defined by a DQT segment.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct QuantTable {
    /// Destination identifier, 0..=3.
    pub id: u8,
    pub precision: Precision,
    /// Steps in natural (row-major) order.
    pub steps: [u16; 64],
    /// Byte offset of the table's Pq/Tq byte within the stream.
    pub offset: usize,
}

impl QuantTable {
    pub fn new(id: u8, precision: Precision, steps: [u16; 64]) -> Result<Self, JpegError> {
        if id > 3 {
            return Err(malformed(format!("table id {id} out of range")));
        }
        if steps.contains(&0) {
            return Err(malformed("zero quantization step"));
        }
        if precision == Precision::Bits8 && steps.iter().any(|&s| s > 255) {
            return Err(malformed("8-bit table with step above 255"));
        }
        Ok(Self {
            id,
            precision,
            steps,
            offset: 0,
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub struct Component {
    pub id: u8,
    pub quant_table: u8,
    pub h_sampling: u8,
    pub v_sampling: u8,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct FrameInfo {
    pub width: u16,
    pub height: u16,
    pub components: Vec<Component>,
    pub progressive: bool,
    /// Offset of the first SOS marker, if a scan follows the frame header.
    pub first_scan_offset: Option<usize>,
}

/// Quantization steps tensor: luma table then chroma table, natural order.
#[derive(Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Qst([[u8; 64]; 2]);

impl Qst {
    pub fn new(luma: [u8; 64], chroma: [u8; 64]) -> Result<Self, JpegError> {
        if luma.iter().chain(chroma.iter()).any(|&s| s == 0) {
            return Err(JpegError::InvalidQst("zero step".into()));
        }
        Ok(Self([luma, chroma]))
    }

    pub fn uniform(step: u8) -> Result<Self, JpegError> {
        Self::new([step; 64], [step; 64])
    }

    pub fn luma(&self) -> &[u8; 64] {
        &self.0[0]
    }

    pub fn chroma(&self) -> &[u8; 64] {
        &self.0[1]
    }

    pub fn channel(&self, c: usize) -> &[u8; 64] {
        &self.0[c]
    }

    /// Step at row `i`, column `j` of channel `c`.
    pub fn step(&self, i: usize, j: usize, c: usize) -> u8 {
        self.0[c][i * 8 + j]
    }

    pub fn iter(&self) -> impl Iterator<Item = u8> + '_ {
        self.0[0].iter().chain(self.0[1].iter()).copied()
    }

    /// 128-byte serialization, channel 0 first, row-major.
    pub fn to_bytes(&self) -> [u8; 128] {
        let mut out = [0u8; 128];
        out[..64].copy_from_slice(&self.0[0]);
        out[64..].copy_from_slice(&self.0[1]);
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self, JpegError> {
        if bytes.len() != 128 {
            return Err(JpegError::InvalidQst(format!(
                "expected 128 bytes, got {}",
                bytes.len()
            )));
        }
        let mut luma = [0u8; 64];
        let mut chroma = [0u8; 64];
        luma.copy_from_slice(&bytes[..64]);
        chroma.copy_from_slice(&bytes[64..]);
        Self::new(luma, chroma)
    }
}

#[derive(Serialize, Deserialize)]
struct QstRepr {
    luma: Vec<u8>,
    chroma: Vec<u8>,
}

impl Serialize for Qst {
    fn serialize<S: Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
        QstRepr {
            luma: self.0[0].to_vec(),
            chroma: self.0[1].to_vec(),
        }
        .serialize(s)
    }
}

impl<'de> Deserialize<'de> for Qst {
    fn deserialize<D: Deserializer<'de>>(d: D) -> Result<Self, D::Error> {
        let r = QstRepr::deserialize(d)?;
        let mut bytes = r.luma;
        bytes.extend_from_slice(&r.chroma);
        Qst::from_bytes(&bytes).map_err(serde::de::Error::custom)
    }
}

impl fmt::Debug for Qst {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match classify_qst(self) {
            QstClass::DefaultQf(qf) => write!(f, "Qst(QF{qf})"),
            QstClass::NonDefault => write!(f, "Qst({:?} / {:?})", &self.0[0][..8], &self.0[1][..8]),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize)]
pub enum QstClass {
    DefaultQf(u8),
    NonDefault,
}

impl fmt::Display for QstClass {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            QstClass::DefaultQf(qf) => write!(f, "QF{qf}"),
            QstClass::NonDefault => write!(f, "Qu"),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum AssembleMode {
    Strict,
    Lenient,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct AssembledQst {
    pub qst: Qst,
    /// Set when a 16-bit table entry above 255 was clamped.
    pub clamped: bool,
}

pub fn zigzag_to_natural(zz: &[u16; 64]) -> [u16; 64] {
    let mut out = [0u16; 64];
    for (k, &v) in zz.iter().enumerate() {
        out[ZIGZAG_TO_NATURAL[k]] = v;
    }
    out
}

pub fn natural_to_zigzag(natural: &[u16; 64]) -> [u16; 64] {
    let mut out = [0u16; 64];
    for (k, slot) in out.iter_mut().enumerate() {
        *slot = natural[ZIGZAG_TO_NATURAL[k]];
    }
    out
}

/// Cursor over the marker structure of a JPEG stream.
struct Segments<'a> {
    data: &'a [u8],
    pos: usize,
    done: bool,
}

/// A marker and its payload (without the two length bytes).
struct Segment<'a> {
    marker: u8,
    offset: usize,
    payload: &'a [u8],
}

impl<'a> Segments<'a> {
    fn new(data: &'a [u8]) -> Result<Self, JpegError> {
        if data.len() < 2 || data[0] != 0xFF || data[1] != SOI {
            return Err(malformed("missing SOI marker"));
        }
        Ok(Self {
            data,
            pos: 2,
            done: false,
        })
    }

    /// Skips entropy-coded bytes that follow an SOS header.
    fn skip_scan(&mut self) {
        let d = self.data;
        while self.pos + 1 < d.len() {
            if d[self.pos] == 0xFF {
                let next = d[self.pos + 1];
                if next == 0x00 || (0xD0..=0xD7).contains(&next) || next == 0xFF {
                    self.pos += if next == 0xFF { 1 } else { 2 };
                    continue;
                }
                return;
            }
            self.pos += 1;
        }
        self.pos = d.len();
    }

    fn next_segment(&mut self) -> Option<Result<Segment<'a>, JpegError>> {
        if self.done {
            return None;
        }
        let d = self.data;
        // Fill bytes (0xFF 0xFF ...) are allowed before a marker.
        if self.pos >= d.len() {
            self.done = true;
            return Some(Err(malformed("stream ends without EOI")));
        }
        if d[self.pos] != 0xFF {
            self.done = true;
            return Some(Err(malformed(format!(
                "expected marker at offset {}",
                self.pos
            ))));
        }
        while self.pos < d.len() && d[self.pos] == 0xFF {
            self.pos += 1;
        }
        if self.pos >= d.len() {
            self.done = true;
            return Some(Err(malformed("truncated marker")));
        }
        let marker = d[self.pos];
        let offset = self.pos - 1;
        self.pos += 1;
        match marker {
            EOI => {
                self.done = true;
                return Some(Ok(Segment {
                    marker,
                    offset,
                    payload: &[],
                }));
            }
            0xD0..=0xD7 | 0x01 => {
                return Some(Ok(Segment {
                    marker,
                    offset,
                    payload: &[],
                }))
            }
            0x00 => {
                self.done = true;
                return Some(Err(malformed("stuffed zero outside scan")));
            }
            _ => {}
        }
        if self.pos + 2 > d.len() {
            self.done = true;
            return Some(Err(malformed("truncated segment length")));
        }
        let len = u16::from_be_bytes([d[self.pos], d[self.pos + 1]]) as usize;
        if len < 2 || self.pos + len > d.len() {
            self.done = true;
            return Some(Err(malformed(format!(
                "segment at offset {offset} declares length {len} beyond stream"
            ))));
        }
        let payload = &d[self.pos + 2..self.pos + len];
        self.pos += len;
        if marker == SOS {
            self.skip_scan();
        }
        Some(Ok(Segment {
            marker,
            offset,
            payload,
        }))
    }
}

impl<'a> Iterator for Segments<'a> {
    type Item = Result<Segment<'a>, JpegError>;

    fn next(&mut self) -> Option<Self::Item> {
        self.next_segment()
    }
}

fn parse_dqt(payload: &[u8], payload_offset: usize, out: &mut Vec<QuantTable>) -> Result<(), JpegError> {
    let mut i = 0;
    while i < payload.len() {
        let pqtq = payload[i];
        let pq = pqtq >> 4;
        let tq = pqtq & 0x0F;
        let precision = match pq {
            0 => Precision::Bits8,
            1 => Precision::Bits16,
            other => return Err(JpegError::UnsupportedPrecisionValue(other)),
        };
        if tq > 3 {
            return Err(malformed(format!("DQT destination {tq} out of range")));
        }
        let width = if precision == Precision::Bits8 { 1 } else { 2 };
        let body = payload
            .get(i + 1..i + 1 + 64 * width)
            .ok_or_else(|| malformed("DQT segment shorter than its tables"))?;
        let mut zz = [0u16; 64];
        for (k, v) in zz.iter_mut().enumerate() {
            *v = if width == 1 {
                body[k] as u16
            } else {
                u16::from_be_bytes([body[2 * k], body[2 * k + 1]])
            };
        }
        if zz.contains(&0) {
            return Err(malformed("zero quantization step"));
        }
        out.push(QuantTable {
            id: tq,
            precision,
            steps: zigzag_to_natural(&zz),
            offset: payload_offset + i,
        });
        i += 1 + 64 * width;
    }
    Ok(())
}

/// Every table from every DQT segment, in definition order.
pub fn parse_quant_tables(bytes: &[u8]) -> Result<Vec<QuantTable>, JpegError> {
    let mut tables = Vec::new();
    for seg in Segments::new(bytes)? {
        let seg = seg?;
        if seg.marker == DQT {
            parse_dqt(seg.payload, seg.offset + 4, &mut tables)?;
        }
    }
    Ok(tables)
}

fn parse_sof(payload: &[u8], progressive: bool) -> Result<FrameInfo, JpegError> {
    if payload.len() < 6 {
        return Err(malformed("SOF segment too short"));
    }
    let height = u16::from_be_bytes([payload[1], payload[2]]);
    let width = u16::from_be_bytes([payload[3], payload[4]]);
    let n = payload[5] as usize;
    if !(1..=4).contains(&n) {
        return Err(malformed(format!("frame declares {n} components")));
    }
    if payload.len() != 6 + 3 * n {
        return Err(malformed("SOF length inconsistent with component count"));
    }
    let components = payload[6..]
        .chunks_exact(3)
        .map(|c| {
            if c[2] > 3 {
                return Err(malformed(format!("component binds table {}", c[2])));
            }
            Ok(Component {
                id: c[0],
                quant_table: c[2],
                h_sampling: c[1] >> 4,
                v_sampling: c[1] & 0x0F,
            })
        })
        .collect::<Result<Vec<_>, _>>()?;
    Ok(FrameInfo {
        width,
        height,
        components,
        progressive,
        first_scan_offset: None,
    })
}

/// Dimensions and per-component table bindings from the first SOF0/SOF1/SOF2.
pub fn read_frame_info(bytes: &[u8]) -> Result<FrameInfo, JpegError> {
    let mut frame: Option<FrameInfo> = None;
    for seg in Segments::new(bytes)? {
        let seg = seg?;
        match seg.marker {
            SOF0 | SOF1 | SOF2 if frame.is_none() => {
                frame = Some(parse_sof(seg.payload, seg.marker == SOF2)?);
            }
            SOS => {
                let mut f = frame.ok_or(JpegError::NoFrameHeader)?;
                f.first_scan_offset = Some(seg.offset);
                return Ok(f);
            }
            _ => {}
        }
    }
    frame.ok_or(JpegError::NoFrameHeader)
}

/// Table in effect for `id` when the first scan starts.
fn table_in_effect(tables: &[QuantTable], id: u8, first_scan: Option<usize>) -> Option<&QuantTable> {
    let before = tables
        .iter().rfind(|t| t.id == id && first_scan.is_none_or(|s| t.offset < s));
    before.or_else(|| tables.iter().find(|t| t.id == id))
}

fn clamp_steps(t: &QuantTable, clamped: &mut bool) -> [u8; 64] {
    let mut out = [0u8; 64];
    for (o, &s) in out.iter_mut().zip(t.steps.iter()) {
        if s > 255 {
            *clamped = true;
        }
        *o = s.clamp(1, 255) as u8;
    }
    out
}

/// Builds the 8×8×2 QST from the tables bound to the first two components.
pub fn assemble_qst(
    tables: &[QuantTable],
    frame: &FrameInfo,
    mode: AssembleMode,
) -> Result<AssembledQst, JpegError> {
    let comps = &frame.components;
    if comps.len() != 1 && comps.len() != 3 {
        return Err(JpegError::UnsupportedComponents(comps.len()));
    }
    let lookup = |id: u8| {
        table_in_effect(tables, id, frame.first_scan_offset).ok_or(JpegError::MissingTable(id))
    };
    let luma = lookup(comps[0].quant_table)?;
    let chroma = if comps.len() == 3 {
        let cb = lookup(comps[1].quant_table)?;
        let cr = lookup(comps[2].quant_table)?;
        if mode == AssembleMode::Strict && cb.steps != cr.steps {
            return Err(JpegError::MismatchedChromaTables);
        }
        cb
    } else {
        luma
    };
    let mut clamped = false;
    let l = clamp_steps(luma, &mut clamped);
    let c = clamp_steps(chroma, &mut clamped);
    if clamped {
        log::warn!("16-bit quantization steps above 255 clamped");
    }
    Ok(AssembledQst {
        qst: Qst::new(l, c)?,
        clamped,
    })
}

/// Parses tables and frame header and assembles the QST in one go.
pub fn extract_qst(bytes: &[u8], mode: AssembleMode) -> Result<AssembledQst, JpegError> {
    let tables = parse_quant_tables(bytes)?;
    let frame = read_frame_info(bytes)?;
    assemble_qst(&tables, &frame, mode)
}

/// Exact match against the scaled default tables; the larger QF wins ties.
pub fn classify_qst(q: &Qst) -> QstClass {
    (1..=100u8)
        .rev()
        .find(|&qf| scale_default_table(qf) == Ok(*q))
        .map_or(QstClass::NonDefault, QstClass::DefaultQf)
}

/// Serialization helpers for building test streams. These emit marker
/// structure only; there is no entropy-coded image data.
pub mod synth {
    use super::*;

    pub fn dqt_segment(tables: &[QuantTable]) -> Vec<u8> {
        let mut body = Vec::new();
        for t in tables {
            let pq = match t.precision {
                Precision::Bits8 => 0u8,
                Precision::Bits16 => 1u8,
            };
            body.push((pq << 4) | t.id);
            for v in natural_to_zigzag(&t.steps) {
                match t.precision {
                    Precision::Bits8 => body.push(v as u8),
                    Precision::Bits16 => body.extend_from_slice(&v.to_be_bytes()),
                }
            }
        }
        segment(DQT, &body)
    }

    pub fn sof_segment(width: u16, height: u16, components: &[Component], progressive: bool) -> Vec<u8> {
        let mut body = vec![8u8];
        body.extend_from_slice(&height.to_be_bytes());
        body.extend_from_slice(&width.to_be_bytes());
        body.push(components.len() as u8);
        for c in components {
            body.extend_from_slice(&[c.id, (c.h_sampling << 4) | c.v_sampling, c.quant_table]);
        }
        segment(if progressive { SOF2 } else { SOF0 }, &body)
    }

    /// SOS header followed by a fake entropy-coded payload exercising byte
    /// stuffing and restart markers.
    pub fn sos_with_scan(components: &[Component]) -> Vec<u8> {
        let mut body = vec![components.len() as u8];
        for c in components {
            body.extend_from_slice(&[c.id, 0x00]);
        }
        body.extend_from_slice(&[0, 63, 0]);
        let mut out = segment(SOS, &body);
        out.extend_from_slice(&[0x12, 0xFF, 0x00, 0x34, 0xFF, 0xD0, 0x56, 0x00, 0xFF, 0xD7, 0x9A]);
        out
    }

    pub fn segment(marker: u8, body: &[u8]) -> Vec<u8> {
        let mut out = vec![0xFF, marker];
        out.extend_from_slice(&((body.len() + 2) as u16).to_be_bytes());
        out.extend_from_slice(body);
        out
    }

    /// SOI, DQT(tables), SOF0, SOS + scan, EOI.
    pub fn minimal_stream(tables: &[QuantTable], width: u16, height: u16, components: &[Component]) -> Vec<u8> {
        let mut out = vec![0xFF, SOI];
        out.extend(dqt_segment(tables));
        out.extend(sof_segment(width, height, components, false));
        out.extend(sos_with_scan(components));
        out.extend_from_slice(&[0xFF, EOI]);
        out
    }

    pub fn ycbcr_components(luma: u8, cb: u8, cr: u8) -> Vec<Component> {
        [(1, luma), (2, cb), (3, cr)]
            .iter()
            .map(|&(id, t)| Component {
                id,
                quant_table: t,
                h_sampling: 1,
                v_sampling: 1,
            })
            .collect()
    }
}
