//! Zero-padded 3x3x3 convolutions on channel-last binary32 feature maps.
//!
//! Activations are kept in a buffer with a one-voxel zero border, so a
//! convolution becomes a matrix product over contiguous rows: for every
//! output row `r` (a padded voxel) and tap offset `o`, input row `r + o` is
//! the neighbour. Rows on the border produce garbage and are re-zeroed
//! afterwards, which is what keeps the convolution non-circular.

use std::ops::Range;

use num_complex::Complex64;
use rayon::prelude::*;

use super::weights::{BlockWeights, ConvWeights, IterationWeights, TAPS};
use crate::error::{Error, Result};
use crate::volume::{voxel_count, ComplexVolume, Dims};

/// Rows per work item. Large enough to amortize GEMM packing, small enough
/// to keep the im2col buffer in cache.
const CHUNK_ROWS: usize = 256;

/// Dense real feature map, channel fastest, then x, y, z.
#[derive(Clone, Debug, PartialEq)]
pub struct FeatureMap {
    dims: Dims,
    channels: usize,
    data: Vec<f32>,
}

impl FeatureMap {
    pub fn zeros(dims: Dims, channels: usize) -> Self {
        Self { dims, channels, data: vec![0.0; voxel_count(dims) * channels] }
    }

    pub fn from_vec(dims: Dims, channels: usize, data: Vec<f32>) -> Result<Self> {
        if data.len() != voxel_count(dims) * channels {
            return Err(Error::DimMismatch(format!("{} values for {dims:?} x {channels}", data.len())));
        }
        Ok(Self { dims, channels, data })
    }

    /// Real and imaginary parts as channels 0 and 1.
    pub fn from_complex(x: &ComplexVolume) -> Self {
        let data = x.data().iter().flat_map(|c| [c.re as f32, c.im as f32]).collect();
        Self { dims: x.dims(), channels: 2, data }
    }

    pub fn to_complex(&self) -> Result<ComplexVolume> {
        if self.channels != 2 {
            return Err(Error::DimMismatch(format!("{} channels cannot form a complex image", self.channels)));
        }
        let data = self.data.chunks_exact(2).map(|c| Complex64::new(c[0] as f64, c[1] as f64)).collect();
        ComplexVolume::from_vec(self.dims, data)
    }

    pub fn dims(&self) -> Dims {
        self.dims
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f32] {
        &mut self.data
    }

    pub fn get(&self, x: usize, y: usize, z: usize, c: usize) -> f32 {
        self.data[(x + self.dims[0] * (y + self.dims[1] * z)) * self.channels + c]
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }
}

/// Feature map with a one-voxel zero border.
#[derive(Clone, Debug)]
pub(crate) struct Padded {
    dims: Dims,
    channels: usize,
    data: Vec<f32>,
}

impl Padded {
    fn padded_dims(dims: Dims) -> Dims {
        dims.map(|d| d + 2)
    }

    fn zeros(dims: Dims, channels: usize) -> Self {
        Self { dims, channels, data: vec![0.0; voxel_count(Self::padded_dims(dims)) * channels] }
    }

    pub(crate) fn from_map(x: &FeatureMap) -> Self {
        let mut p = Self::zeros(x.dims, x.channels);
        let c = x.channels;
        let [nx, ny, nz] = x.dims;
        for z in 0..nz {
            for y in 0..ny {
                let src = (nx * (y + ny * z)) * c;
                let dst = p.row(1, y + 1, z + 1) * c;
                p.data[dst..dst + nx * c].copy_from_slice(&x.data[src..src + nx * c]);
            }
        }
        p
    }

    pub(crate) fn to_map(&self) -> FeatureMap {
        let c = self.channels;
        let [nx, ny, nz] = self.dims;
        let mut data = Vec::with_capacity(voxel_count(self.dims) * c);
        for z in 0..nz {
            for y in 0..ny {
                let src = self.row(1, y + 1, z + 1) * c;
                data.extend_from_slice(&self.data[src..src + nx * c]);
            }
        }
        FeatureMap { dims: self.dims, channels: c, data }
    }

    fn row(&self, x: usize, y: usize, z: usize) -> usize {
        let p = Self::padded_dims(self.dims);
        x + p[0] * (y + p[1] * z)
    }

    /// Padded rows spanning every interior voxel.
    fn interior_rows(&self) -> Range<usize> {
        let [nx, ny, nz] = self.dims;
        self.row(1, 1, 1)..self.row(nx, ny, nz) + 1
    }

    fn tap_offsets(&self) -> [isize; TAPS] {
        let p = Self::padded_dims(self.dims);
        let (px, pxy) = (p[0] as isize, (p[0] * p[1]) as isize);
        std::array::from_fn(|t| {
            let (dx, dy, dz) = ((t % 3) as isize, ((t / 3) % 3) as isize, (t / 9) as isize);
            (dz - 1) * pxy + (dy - 1) * px + (dx - 1)
        })
    }

    fn zero_border(&mut self) {
        let p = Self::padded_dims(self.dims);
        let c = self.channels;
        let row_len = p[0] * c;
        for z in 0..p[2] {
            for y in 0..p[1] {
                let start = (p[0] * (y + p[1] * z)) * c;
                let line = &mut self.data[start..start + row_len];
                if z == 0 || z == p[2] - 1 || y == 0 || y == p[1] - 1 {
                    line.fill(0.0);
                } else {
                    line[..c].fill(0.0);
                    line[row_len - c..].fill(0.0);
                }
            }
        }
    }

    fn relu(&self) -> Padded {
        Padded { dims: self.dims, channels: self.channels, data: self.data.iter().map(|v| v.max(0.0)).collect() }
    }

    fn add_assign(&mut self, other: &Padded) {
        self.data.iter_mut().zip(&other.data).for_each(|(a, b)| *a += b);
    }
}

/// `C += A B` for row-major `A (m x k)`, `B (k x n)`, `C (m x n)`.
fn gemm_acc(m: usize, k: usize, n: usize, a: &[f32], b: &[f32], c: &mut [f32]) {
    assert!(a.len() >= m * k && b.len() >= k * n && c.len() >= m * n);
    // SAFETY: the asserts bound every access made by a row-major m x k by
    // k x n product into an m x n destination.
    unsafe {
        matrixmultiply::sgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            k as isize,
            1,
            b.as_ptr(),
            n as isize,
            1,
            1.0,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

pub(crate) fn conv_padded(x: &Padded, k: &ConvWeights) -> Result<Padded> {
    if x.channels != k.cin {
        return Err(Error::DimMismatch(format!("conv expects {} input channels, got {}", k.cin, x.channels)));
    }
    let (cin, cout) = (k.cin, k.cout);
    let mut out = Padded::zeros(x.dims, cout);
    let rows = x.interior_rows();
    if k.is_zero() {
        return Ok(out);
    }
    let offsets = x.tap_offsets();
    let live: Vec<usize> = (0..TAPS).filter(|&t| k.kernel[t * cin * cout..(t + 1) * cin * cout].iter().any(|v| *v != 0.0)).collect();

    if cout < cin {
        // Narrow output: one wide product per row, then sum shifted columns.
        let wide = live.len() * cout;
        let mut wcat = vec![0.0f32; cin * wide];
        for (j, &t) in live.iter().enumerate() {
            for i in 0..cin {
                for o in 0..cout {
                    wcat[i * wide + j * cout + o] = k.kernel[(t * cin + i) * cout + o];
                }
            }
        }
        let total = x.data.len() / cin;
        let mut y = vec![0.0f32; total * wide];
        y.par_chunks_mut(CHUNK_ROWS * wide).zip(x.data.par_chunks(CHUNK_ROWS * cin)).for_each(|(yc, xc)| {
            gemm_acc(xc.len() / cin, cin, wide, xc, &wcat, yc);
        });
        out.data[rows.start * cout..rows.end * cout].par_chunks_mut(CHUNK_ROWS * cout).enumerate().for_each(|(ci, oc)| {
            let r0 = rows.start + ci * CHUNK_ROWS;
            for (r, orow) in oc.chunks_exact_mut(cout).enumerate() {
                orow.copy_from_slice(&k.bias);
                for (j, &t) in live.iter().enumerate() {
                    let src = ((r0 + r) as isize + offsets[t]) as usize * wide + j * cout;
                    for o in 0..cout {
                        orow[o] += y[src + o];
                    }
                }
            }
        });
    } else if cin >= 32 {
        // Wide input: one product per tap on shifted row ranges.
        out.data[rows.start * cout..rows.end * cout].par_chunks_mut(CHUNK_ROWS * cout).enumerate().for_each(|(ci, oc)| {
            let r0 = rows.start + ci * CHUNK_ROWS;
            let m = oc.len() / cout;
            for orow in oc.chunks_exact_mut(cout) {
                orow.copy_from_slice(&k.bias);
            }
            for &t in &live {
                let src = ((r0 as isize) + offsets[t]) as usize * cin;
                gemm_acc(m, cin, cout, &x.data[src..src + m * cin], &k.kernel[t * cin * cout..(t + 1) * cin * cout], oc);
            }
        });
    } else {
        // im2col over the live taps, one product per chunk.
        let kk = live.len() * cin;
        let wlive: Vec<f32> = live.iter().flat_map(|&t| k.kernel[t * cin * cout..(t + 1) * cin * cout].iter().copied()).collect();
        out.data[rows.start * cout..rows.end * cout].par_chunks_mut(CHUNK_ROWS * cout).enumerate().for_each(|(ci, oc)| {
            let r0 = rows.start + ci * CHUNK_ROWS;
            let m = oc.len() / cout;
            let mut col = vec![0.0f32; m * kk];
            for (r, crow) in col.chunks_exact_mut(kk).enumerate() {
                for (j, &t) in live.iter().enumerate() {
                    let src = ((r0 + r) as isize + offsets[t]) as usize * cin;
                    crow[j * cin..(j + 1) * cin].copy_from_slice(&x.data[src..src + cin]);
                }
            }
            for orow in oc.chunks_exact_mut(cout) {
                orow.copy_from_slice(&k.bias);
            }
            gemm_acc(m, kk, cout, &col, &wlive, oc);
        });
    }
    out.zero_border();
    Ok(out)
}

/// Pointwise linear map `[cin][cout]` without bias.
fn project_padded(x: &Padded, w: &[f32], cout: usize) -> Padded {
    let cin = x.channels;
    let mut out = Padded::zeros(x.dims, cout);
    if w.iter().all(|v| *v == 0.0) {
        return out;
    }
    out.data.par_chunks_mut(CHUNK_ROWS * cout).zip(x.data.par_chunks(CHUNK_ROWS * cin)).for_each(|(oc, xc)| {
        gemm_acc(xc.len() / cin, cin, cout, xc, w, oc);
    });
    out
}

/// Zero-padded, stride-1 3x3x3 convolution.
pub fn conv3d(x: &FeatureMap, k: &ConvWeights) -> Result<FeatureMap> {
    Ok(conv_padded(&Padded::from_map(x), k)?.to_map())
}

fn block_padded(x: &Padded, b: &BlockWeights, skip_proj: Option<&[f32]>) -> Result<Padded> {
    let h = conv_padded(&x.relu(), &b.conv1)?;
    let mut h = conv_padded(&h.relu(), &b.conv2)?;
    match skip_proj {
        Some(p) => {
            if p.len() != x.channels * b.conv2.cout {
                return Err(Error::DimMismatch(format!("skip projection has {} values", p.len())));
            }
            h.add_assign(&project_padded(x, p, b.conv2.cout));
        }
        None => {
            if x.channels != b.conv2.cout {
                return Err(Error::DimMismatch(format!("identity skip from {} to {} channels", x.channels, b.conv2.cout)));
            }
            h.add_assign(x);
        }
    }
    Ok(h)
}

/// Pre-activation residual block
/// `skip(x) + conv2(relu(conv1(relu(x))))`, with a pointwise projection as
/// the skip when `skip_proj` is given and the identity otherwise.
pub fn resnet_block(x: &FeatureMap, b: &BlockWeights, skip_proj: Option<&[f32]>) -> Result<FeatureMap> {
    Ok(block_padded(&Padded::from_map(x), b, skip_proj)?.to_map())
}

/// One iteration's regularizer: `x + proj(blocks(x))` on the real/imaginary
/// channel pair. The outer skip is added in binary64.
pub fn cnn(x: &ComplexVolume, it: &IterationWeights) -> Result<ComplexVolume> {
    let mut h = Padded::from_map(&FeatureMap::from_complex(x));
    for (m, b) in it.blocks.iter().enumerate() {
        h = block_padded(&h, b, (m == 0).then_some(&it.skip_proj[..]))?;
    }
    let r = conv_padded(&h, &it.proj)?.to_map();
    let mut out = x.clone();
    for (o, c) in out.data_mut().iter_mut().zip(r.data.chunks_exact(2)) {
        *o += Complex64::new(c[0] as f64, c[1] as f64);
    }
    Ok(out)
}
