//! Binary file formats. All integers and floats are little-endian.
//!
//! | format | layout |
//! |--------|--------|
//! | CTRJ1  | `CTRJ` 0x01, u32 readouts, u32 samples, u32 heartbeat, f32 (kx,ky,kz) triplets readout-major, f32 dcw |
//! | CVL1   | `CVL1`, u32 dx, dy, dz, u8 dtype, data x-fastest |
//! | CMAP1  | `CMAP` 0x01, u16 coils, `coils` CVL1 complex volumes, one CVL1 mask (the support) |
//! | CKS1   | `CKS1`, u32 coils, u32 readouts, u32 samples, complex f32 interleaved, coil-major |
//!
//! CVL1 dtypes: 0 = complex binary32 interleaved (re, im), 1 = u8 boolean
//! mask, 2 = u8 labels.

use std::fs;
use std::io::Write;
use std::path::Path;

use num_complex::Complex64;
use thiserror::Error;

use crate::encoding::{CoilMaps, MultiCoilKSpace};
use crate::trajectory::Trajectory;
use crate::volume::{ComplexVolume, Dims, Mask};

pub const CTRJ_MAGIC: &[u8; 4] = b"CTRJ";
pub const CTRJ_VERSION: u8 = 1;
pub const CVL_MAGIC: &[u8; 4] = b"CVL1";
pub const CMAP_MAGIC: &[u8; 4] = b"CMAP";
pub const CMAP_VERSION: u8 = 1;
pub const CKS_MAGIC: &[u8; 4] = b"CKS1";

pub const DTYPE_COMPLEX32: u8 = 0;
pub const DTYPE_MASK: u8 = 1;
pub const DTYPE_LABELS: u8 = 2;

#[derive(Debug, Error, PartialEq)]
pub enum FormatError {
    #[error("bad magic: expected {expected:?}")]
    BadMagic { expected: &'static str },
    #[error("unsupported version {0}")]
    UnsupportedVersion(u8),
    #[error("truncated: needed {needed} bytes, {available} available")]
    Truncated { needed: usize, available: usize },
    #[error("unknown CVL1 dtype {0}")]
    UnknownDtype(u8),
    #[error("expected CVL1 dtype {expected}, found {found}")]
    WrongDtype { expected: u8, found: u8 },
    #[error("non-finite value in {0}")]
    NonFinite(&'static str),
    #[error("invalid content: {0}")]
    Invalid(String),
    #[error("{0} trailing bytes")]
    TrailingBytes(usize),
}

type FResult<T> = std::result::Result<T, FormatError>;

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn new(buf: &'a [u8]) -> Self {
        Self { buf, pos: 0 }
    }

    fn remaining(&self) -> usize {
        self.buf.len() - self.pos
    }

    fn take(&mut self, n: usize) -> FResult<&'a [u8]> {
        if self.remaining() < n {
            return Err(FormatError::Truncated { needed: n, available: self.remaining() });
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn magic(&mut self, m: &'static [u8; 4]) -> FResult<()> {
        let expected = std::str::from_utf8(m).unwrap_or("?");
        if self.remaining() < 4 || self.take(4)? != m {
            return Err(FormatError::BadMagic { expected });
        }
        Ok(())
    }

    fn u8(&mut self) -> FResult<u8> {
        Ok(self.take(1)?[0])
    }

    fn u16(&mut self) -> FResult<u16> {
        Ok(u16::from_le_bytes(self.take(2)?.try_into().unwrap()))
    }

    fn u32(&mut self) -> FResult<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn f32(&mut self) -> FResult<f32> {
        Ok(f32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    /// Reserves `count * size` bytes before any allocation happens.
    fn require(&self, count: usize, size: usize) -> FResult<()> {
        let needed = count.checked_mul(size).ok_or_else(|| FormatError::Invalid("size overflow".into()))?;
        if needed > self.remaining() {
            return Err(FormatError::Truncated { needed, available: self.remaining() });
        }
        Ok(())
    }

    fn finish(&self) -> FResult<()> {
        match self.remaining() {
            0 => Ok(()),
            n => Err(FormatError::TrailingBytes(n)),
        }
    }
}

fn put_u32(out: &mut Vec<u8>, v: usize) {
    out.extend_from_slice(&(v as u32).to_le_bytes());
}

fn put_f32(out: &mut Vec<u8>, v: f64) {
    out.extend_from_slice(&(v as f32).to_le_bytes());
}

pub fn encode_trajectory(t: &Trajectory) -> Vec<u8> {
    let mut out = Vec::with_capacity(17 + 16 * t.len());
    out.extend_from_slice(CTRJ_MAGIC);
    out.push(CTRJ_VERSION);
    put_u32(&mut out, t.readouts);
    put_u32(&mut out, t.samples);
    out.extend_from_slice(&t.heartbeat_index.to_le_bytes());
    for k in &t.coords {
        k.iter().for_each(|&v| put_f32(&mut out, v));
    }
    t.dcw.iter().for_each(|&w| put_f32(&mut out, w));
    out
}

pub fn decode_trajectory(bytes: &[u8]) -> FResult<Trajectory> {
    let mut r = Reader::new(bytes);
    r.magic(CTRJ_MAGIC)?;
    let version = r.u8()?;
    if version != CTRJ_VERSION {
        return Err(FormatError::UnsupportedVersion(version));
    }
    let readouts = r.u32()? as usize;
    let samples = r.u32()? as usize;
    let heartbeat_index = r.u32()?;
    let n = readouts.checked_mul(samples).ok_or_else(|| FormatError::Invalid("size overflow".into()))?;
    r.require(n, 16)?;
    let mut coords = Vec::with_capacity(n);
    for _ in 0..n {
        coords.push([r.f32()? as f64, r.f32()? as f64, r.f32()? as f64]);
    }
    let dcw = (0..n).map(|_| r.f32().map(f64::from)).collect::<FResult<Vec<_>>>()?;
    r.finish()?;
    let t = Trajectory { readouts, samples, coords, dcw, heartbeat_index };
    t.validate().map_err(|e| FormatError::Invalid(e.to_string()))?;
    Ok(t)
}

fn cvl_header(out: &mut Vec<u8>, dims: Dims, dtype: u8) {
    out.extend_from_slice(CVL_MAGIC);
    dims.iter().for_each(|&d| put_u32(out, d));
    out.push(dtype);
}

pub fn encode_volume(v: &ComplexVolume) -> Vec<u8> {
    let mut out = Vec::with_capacity(17 + 8 * v.len());
    cvl_header(&mut out, v.dims(), DTYPE_COMPLEX32);
    for c in v.data() {
        put_f32(&mut out, c.re);
        put_f32(&mut out, c.im);
    }
    out
}

pub fn encode_mask(m: &Mask) -> Vec<u8> {
    let mut out = Vec::with_capacity(17 + m.data.len());
    cvl_header(&mut out, m.dims, DTYPE_MASK);
    out.extend(m.data.iter().map(|&b| b as u8));
    out
}

pub fn encode_labels(dims: Dims, labels: &[u8]) -> Vec<u8> {
    let mut out = Vec::with_capacity(17 + labels.len());
    cvl_header(&mut out, dims, DTYPE_LABELS);
    out.extend_from_slice(labels);
    out
}

/// Any CVL1 payload.
#[derive(Clone, Debug, PartialEq)]
pub enum CvlData {
    Complex(ComplexVolume),
    Mask(Mask),
    Labels(Dims, Vec<u8>),
}

fn read_cvl(r: &mut Reader<'_>) -> FResult<CvlData> {
    r.magic(CVL_MAGIC)?;
    let dims: Dims = [r.u32()? as usize, r.u32()? as usize, r.u32()? as usize];
    let dtype = r.u8()?;
    if dims.iter().any(|&d| d == 0) {
        return Err(FormatError::Invalid(format!("zero dimension in {dims:?}")));
    }
    let n = dims[0]
        .checked_mul(dims[1])
        .and_then(|v| v.checked_mul(dims[2]))
        .ok_or_else(|| FormatError::Invalid("size overflow".into()))?;
    match dtype {
        DTYPE_COMPLEX32 => {
            r.require(n, 8)?;
            let mut data = Vec::with_capacity(n);
            for _ in 0..n {
                let (re, im) = (r.f32()?, r.f32()?);
                if !re.is_finite() || !im.is_finite() {
                    return Err(FormatError::NonFinite("CVL1 volume"));
                }
                data.push(Complex64::new(re as f64, im as f64));
            }
            let v = ComplexVolume::from_vec(dims, data).map_err(|e| FormatError::Invalid(e.to_string()))?;
            Ok(CvlData::Complex(v))
        }
        DTYPE_MASK => {
            let raw = r.take(n)?;
            if let Some(b) = raw.iter().find(|&&b| b > 1) {
                return Err(FormatError::Invalid(format!("mask byte {b}")));
            }
            Ok(CvlData::Mask(Mask { dims, data: raw.iter().map(|&b| b == 1).collect() }))
        }
        DTYPE_LABELS => Ok(CvlData::Labels(dims, r.take(n)?.to_vec())),
        other => Err(FormatError::UnknownDtype(other)),
    }
}

pub fn decode_cvl(bytes: &[u8]) -> FResult<CvlData> {
    let mut r = Reader::new(bytes);
    let d = read_cvl(&mut r)?;
    r.finish()?;
    Ok(d)
}

fn dtype_of(d: &CvlData) -> u8 {
    match d {
        CvlData::Complex(_) => DTYPE_COMPLEX32,
        CvlData::Mask(_) => DTYPE_MASK,
        CvlData::Labels(..) => DTYPE_LABELS,
    }
}

pub fn decode_volume(bytes: &[u8]) -> FResult<ComplexVolume> {
    match decode_cvl(bytes)? {
        CvlData::Complex(v) => Ok(v),
        other => Err(FormatError::WrongDtype { expected: DTYPE_COMPLEX32, found: dtype_of(&other) }),
    }
}

pub fn decode_mask(bytes: &[u8]) -> FResult<Mask> {
    match decode_cvl(bytes)? {
        CvlData::Mask(m) => Ok(m),
        other => Err(FormatError::WrongDtype { expected: DTYPE_MASK, found: dtype_of(&other) }),
    }
}

pub fn decode_labels(bytes: &[u8]) -> FResult<(Dims, Vec<u8>)> {
    match decode_cvl(bytes)? {
        CvlData::Labels(d, l) => Ok((d, l)),
        other => Err(FormatError::WrongDtype { expected: DTYPE_LABELS, found: dtype_of(&other) }),
    }
}

pub fn encode_coil_maps(maps: &CoilMaps) -> Vec<u8> {
    let mut out = Vec::new();
    out.extend_from_slice(CMAP_MAGIC);
    out.push(CMAP_VERSION);
    out.extend_from_slice(&(maps.n_coils() as u16).to_le_bytes());
    for m in &maps.maps {
        out.extend(encode_volume(m));
    }
    out.extend(encode_mask(&maps.support));
    out
}

pub fn decode_coil_maps(bytes: &[u8]) -> FResult<CoilMaps> {
    let mut r = Reader::new(bytes);
    r.magic(CMAP_MAGIC)?;
    let version = r.u8()?;
    if version != CMAP_VERSION {
        return Err(FormatError::UnsupportedVersion(version));
    }
    let n = r.u16()? as usize;
    if n == 0 {
        return Err(FormatError::Invalid("zero coils".into()));
    }
    let mut maps = Vec::with_capacity(n.min(64));
    for _ in 0..n {
        match read_cvl(&mut r)? {
            CvlData::Complex(v) => maps.push(v),
            other => return Err(FormatError::WrongDtype { expected: DTYPE_COMPLEX32, found: dtype_of(&other) }),
        }
    }
    let support = match read_cvl(&mut r)? {
        CvlData::Mask(m) => m,
        other => return Err(FormatError::WrongDtype { expected: DTYPE_MASK, found: dtype_of(&other) }),
    };
    r.finish()?;
    let mut cm = CoilMaps { maps, support };
    if cm.maps.iter().any(|m| m.dims() != cm.support.dims) {
        return Err(FormatError::Invalid("coil map dims differ from support".into()));
    }
    renormalize(&mut cm);
    cm.validate().map_err(|e| FormatError::Invalid(e.to_string()))?;
    Ok(cm)
}

/// Undoes binary32 rounding of the root-sum-of-squares normalization.
fn renormalize(cm: &mut CoilMaps) {
    for i in 0..cm.support.data.len() {
        if !cm.support.data[i] {
            continue;
        }
        let rss: f64 = cm.maps.iter().map(|m| m.data()[i].norm_sqr()).sum::<f64>().sqrt();
        if rss > 0.0 && (rss - 1.0).abs() < 1e-5 {
            cm.maps.iter_mut().for_each(|m| m.data_mut()[i] /= rss);
        }
    }
}

pub fn encode_kspace(y: &MultiCoilKSpace) -> Vec<u8> {
    let mut out = Vec::with_capacity(16 + 8 * y.n_coils() * y.readouts * y.samples);
    out.extend_from_slice(CKS_MAGIC);
    put_u32(&mut out, y.n_coils());
    put_u32(&mut out, y.readouts);
    put_u32(&mut out, y.samples);
    for c in y.coils.iter().flatten() {
        put_f32(&mut out, c.re);
        put_f32(&mut out, c.im);
    }
    out
}

pub fn decode_kspace(bytes: &[u8]) -> FResult<MultiCoilKSpace> {
    let mut r = Reader::new(bytes);
    r.magic(CKS_MAGIC)?;
    let coils = r.u32()? as usize;
    let readouts = r.u32()? as usize;
    let samples = r.u32()? as usize;
    let per_coil = readouts.checked_mul(samples).ok_or_else(|| FormatError::Invalid("size overflow".into()))?;
    let total = per_coil.checked_mul(coils).ok_or_else(|| FormatError::Invalid("size overflow".into()))?;
    r.require(total, 8)?;
    let mut data = Vec::with_capacity(coils);
    for _ in 0..coils {
        let mut c = Vec::with_capacity(per_coil);
        for _ in 0..per_coil {
            let (re, im) = (r.f32()?, r.f32()?);
            if !re.is_finite() || !im.is_finite() {
                return Err(FormatError::NonFinite("CKS1 samples"));
            }
            c.push(Complex64::new(re as f64, im as f64));
        }
        data.push(c);
    }
    r.finish()?;
    Ok(MultiCoilKSpace { readouts, samples, coils: data })
}

/// Writes through a temporary file and renames it into place.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> std::io::Result<()> {
    let tmp = path.with_extension(match path.extension() {
        Some(e) => format!("{}.tmp", e.to_string_lossy()),
        None => "tmp".to_string(),
    });
    {
        let mut f = fs::File::create(&tmp)?;
        f.write_all(bytes)?;
        f.sync_all()?;
    }
    fs::rename(&tmp, path)
}
