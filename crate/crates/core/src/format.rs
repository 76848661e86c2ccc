//! Binary interchange formats for volumes (`CTV1`), label volumes (`LBL1`) and
//! probability maps (`PRB1`).
//!
//! All three share a 48-byte little-endian header:
//!
//! | offset | size | field                                             |
//! |-------:|-----:|---------------------------------------------------|
//! | 0      | 4    | magic                                             |
//! | 4      | 2    | format version (`1`)                              |
//! | 6      | 1    | unit state (0 HU, 1 windowed, 2 normalized)       |
//! | 7      | 1    | reserved                                          |
//! | 8      | 12   | `nx`, `ny`, `nz` as `u32`                         |
//! | 20     | 12   | `sx`, `sy`, `sz` as `f32`                         |
//! | 32     | 1    | element code (0 `i16`, 1 `f32`, 2 `u8`)           |
//! | 33     | 1    | class count (`LBL1`/`PRB1`), zero for `CTV1`      |
//! | 34     | 14   | reserved, zero                                    |
//!
//! The payload follows immediately. Probability maps are class-major.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use crate::error::{Error, Result};
use crate::volume::{CtVolume, Dims, LabelVolume, ProbMap, Spacing, UnitState};

pub const HEADER_LEN: usize = 48;
pub const FORMAT_VERSION: u16 = 1;

pub const MAGIC_VOLUME: [u8; 4] = *b"CTV1";
pub const MAGIC_LABELS: [u8; 4] = *b"LBL1";
pub const MAGIC_PROBS: [u8; 4] = *b"PRB1";

const ELEM_I16: u8 = 0;
const ELEM_F32: u8 = 1;
const ELEM_U8: u8 = 2;

#[derive(Debug, Clone, Copy, PartialEq)]
struct Header {
    magic: [u8; 4],
    unit_state: u8,
    dims: Dims,
    spacing: Spacing,
    element: u8,
    num_classes: u8,
}

impl Header {
    fn encode(&self) -> [u8; HEADER_LEN] {
        let mut h = [0u8; HEADER_LEN];
        h[0..4].copy_from_slice(&self.magic);
        h[4..6].copy_from_slice(&FORMAT_VERSION.to_le_bytes());
        h[6] = self.unit_state;
        for (i, d) in [self.dims.nx, self.dims.ny, self.dims.nz].into_iter().enumerate() {
            h[8 + 4 * i..12 + 4 * i].copy_from_slice(&(d as u32).to_le_bytes());
        }
        for (i, s) in [self.spacing.sx, self.spacing.sy, self.spacing.sz].into_iter().enumerate() {
            h[20 + 4 * i..24 + 4 * i].copy_from_slice(&s.to_le_bytes());
        }
        h[32] = self.element;
        h[33] = self.num_classes;
        h
    }

    fn decode(h: &[u8; HEADER_LEN], magic: [u8; 4]) -> Result<Self> {
        if h[0..4] != magic {
            return Err(Error::Format(format!(
                "bad magic {:?}, expected {:?}",
                String::from_utf8_lossy(&h[0..4]),
                String::from_utf8_lossy(&magic)
            )));
        }
        let version = u16::from_le_bytes([h[4], h[5]]);
        if version != FORMAT_VERSION {
            return Err(Error::Format(format!("unsupported format version {version}")));
        }
        let u32_at = |o: usize| u32::from_le_bytes([h[o], h[o + 1], h[o + 2], h[o + 3]]) as usize;
        let f32_at = |o: usize| f32::from_le_bytes([h[o], h[o + 1], h[o + 2], h[o + 3]]);
        let dims = Dims::new(u32_at(8), u32_at(12), u32_at(16));
        if dims.nx == 0 || dims.ny == 0 || dims.nz == 0 {
            return Err(Error::Format(format!("zero dimension in {dims}")));
        }
        let spacing = Spacing::new(f32_at(20), f32_at(24), f32_at(28));
        if ![spacing.sx, spacing.sy, spacing.sz].iter().all(|s| s.is_finite() && *s > 0.0) {
            return Err(Error::Format("spacing must be positive and finite".into()));
        }
        Ok(Self {
            magic,
            unit_state: h[6],
            dims,
            spacing,
            element: h[32],
            num_classes: h[33],
        })
    }

    fn payload_len(&self, bytes_per_voxel: usize) -> Result<usize> {
        [self.dims.nx, self.dims.ny, self.dims.nz, bytes_per_voxel]
            .into_iter()
            .try_fold(1usize, |acc, v| acc.checked_mul(v))
            .ok_or_else(|| Error::Format(format!("payload size overflows for dims {}", self.dims)))
    }
}

struct CountingWriter<'a, W: Write> {
    inner: &'a mut W,
    written: u64,
}

impl<W: Write> CountingWriter<'_, W> {
    fn put(&mut self, bytes: &[u8]) -> Result<()> {
        self.inner.write_all(bytes).map_err(|e| Error::io(self.written, e))?;
        self.written += bytes.len() as u64;
        Ok(())
    }
}

fn write_all<W: Write>(sink: &mut W, header: &Header, payload: &[u8]) -> Result<u64> {
    let mut w = CountingWriter { inner: sink, written: 0 };
    w.put(&header.encode())?;
    w.put(payload)?;
    w.inner.flush().map_err(|e| Error::io(w.written, e))?;
    Ok(w.written)
}

fn read_header<R: Read>(source: &mut R, magic: [u8; 4]) -> Result<Header> {
    let mut h = [0u8; HEADER_LEN];
    let mut got = 0;
    while got < HEADER_LEN {
        match source.read(&mut h[got..]) {
            Ok(0) => {
                return Err(Error::Truncation {
                    expected: HEADER_LEN,
                    found: got,
                })
            }
            Ok(n) => got += n,
            Err(e) if e.kind() == std::io::ErrorKind::Interrupted => {}
            Err(e) => return Err(Error::io(got as u64, e)),
        }
    }
    Header::decode(&h, magic)
}

/// Reads exactly `expected` payload bytes and checks nothing follows.
fn read_payload<R: Read>(source: &mut R, expected: usize) -> Result<Vec<u8>> {
    let mut buf = Vec::new();
    // One extra byte is enough to detect trailing data without reading it all.
    source
        .take((expected as u64).saturating_add(1))
        .read_to_end(&mut buf)
        .map_err(|e| Error::io(HEADER_LEN as u64, e))?;
    if buf.len() != expected {
        return Err(Error::Truncation {
            expected,
            found: buf.len(),
        });
    }
    Ok(buf)
}

/// Writes a `CTV1` file. Hounsfield volumes are stored as `i16`, others as `f32`.
pub fn write_volume<W: Write>(volume: &CtVolume, sink: &mut W) -> Result<u64> {
    let hu = volume.unit_state() == UnitState::Hounsfield;
    let header = Header {
        magic: MAGIC_VOLUME,
        unit_state: volume.unit_state() as u8,
        dims: volume.dims(),
        spacing: volume.spacing(),
        element: if hu { ELEM_I16 } else { ELEM_F32 },
        num_classes: 0,
    };
    let payload: Vec<u8> = if hu {
        volume.voxels().iter().flat_map(|&v| (v as i16).to_le_bytes()).collect()
    } else {
        volume.voxels().iter().flat_map(|v| v.to_le_bytes()).collect()
    };
    write_all(sink, &header, &payload)
}

pub fn read_volume<R: Read>(source: &mut R) -> Result<CtVolume> {
    let header = read_header(source, MAGIC_VOLUME)?;
    let state =
        UnitState::from_code(header.unit_state).ok_or_else(|| Error::Format(format!("unknown unit state {}", header.unit_state)))?;
    let (width, expected_elem) = match state {
        UnitState::Hounsfield => (2, ELEM_I16),
        _ => (4, ELEM_F32),
    };
    if header.element != expected_elem {
        return Err(Error::Format(format!(
            "element code {} does not match unit state {}",
            header.element,
            state.name()
        )));
    }
    if header.num_classes != 0 {
        return Err(Error::Format("CTV1 class count must be zero".into()));
    }
    let bytes = read_payload(source, header.payload_len(width)?)?;
    let voxels: Vec<f32> = if width == 2 {
        bytes.chunks_exact(2).map(|b| i16::from_le_bytes([b[0], b[1]]) as f32).collect()
    } else {
        bytes
            .chunks_exact(4)
            .map(|b| f32::from_le_bytes([b[0], b[1], b[2], b[3]]))
            .collect()
    };
    match CtVolume::new(header.dims, header.spacing, state, voxels) {
        Err(Error::Shape(msg)) => Err(Error::Format(msg)),
        other => other,
    }
}

pub fn write_labels<W: Write>(labels: &LabelVolume, sink: &mut W) -> Result<u64> {
    let header = Header {
        magic: MAGIC_LABELS,
        unit_state: 0,
        dims: labels.dims(),
        spacing: labels.spacing(),
        element: ELEM_U8,
        num_classes: labels.num_classes(),
    };
    write_all(sink, &header, labels.labels())
}

pub fn read_labels<R: Read>(source: &mut R) -> Result<LabelVolume> {
    let header = read_header(source, MAGIC_LABELS)?;
    if header.element != ELEM_U8 || header.unit_state != 0 {
        return Err(Error::Format("LBL1 requires element code 2 and unit state 0".into()));
    }
    let bytes = read_payload(source, header.payload_len(1)?)?;
    LabelVolume::new(header.dims, header.spacing, header.num_classes, bytes).map_err(|e| match e {
        Error::Shape(msg) => Error::Format(msg),
        other => other,
    })
}

pub fn write_probmap<W: Write>(map: &ProbMap, sink: &mut W) -> Result<u64> {
    let header = Header {
        magic: MAGIC_PROBS,
        unit_state: 0,
        dims: map.dims(),
        spacing: map.spacing(),
        element: ELEM_F32,
        num_classes: map.num_classes(),
    };
    let payload: Vec<u8> = map.probs().iter().flat_map(|p| p.to_le_bytes()).collect();
    write_all(sink, &header, &payload)
}

pub fn read_probmap<R: Read>(source: &mut R) -> Result<ProbMap> {
    let header = read_header(source, MAGIC_PROBS)?;
    if header.element != ELEM_F32 || header.unit_state != 0 {
        return Err(Error::Format("PRB1 requires element code 1 and unit state 0".into()));
    }
    if header.num_classes == 0 {
        return Err(Error::Format("PRB1 class count must be >= 1".into()));
    }
    let bytes = read_payload(source, header.payload_len(4 * header.num_classes as usize)?)?;
    let probs = bytes
        .chunks_exact(4)
        .map(|b| f32::from_le_bytes([b[0], b[1], b[2], b[3]]))
        .collect();
    ProbMap::new(header.dims, header.spacing, header.num_classes, probs)
}

fn create(path: &Path) -> Result<BufWriter<File>> {
    Ok(BufWriter::new(File::create(path).map_err(|e| Error::io(0, e))?))
}

fn open(path: &Path) -> Result<BufReader<File>> {
    Ok(BufReader::new(File::open(path).map_err(|e| Error::io(0, e))?))
}

pub fn save_volume(volume: &CtVolume, path: impl AsRef<Path>) -> Result<u64> {
    write_volume(volume, &mut create(path.as_ref())?)
}

pub fn load_volume(path: impl AsRef<Path>) -> Result<CtVolume> {
    read_volume(&mut open(path.as_ref())?)
}

pub fn save_labels(labels: &LabelVolume, path: impl AsRef<Path>) -> Result<u64> {
    write_labels(labels, &mut create(path.as_ref())?)
}

pub fn load_labels(path: impl AsRef<Path>) -> Result<LabelVolume> {
    read_labels(&mut open(path.as_ref())?)
}

pub fn save_probmap(map: &ProbMap, path: impl AsRef<Path>) -> Result<u64> {
    write_probmap(map, &mut create(path.as_ref())?)
}

pub fn load_probmap(path: impl AsRef<Path>) -> Result<ProbMap> {
    read_probmap(&mut open(path.as_ref())?)
}
