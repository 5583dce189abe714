//! Dense 3D volumes, stored x-fastest (`x + nx * (y + ny * z)`).

use num_complex::Complex64;

use crate::error::{Error, Result};

pub type Dims = [usize; 3];

#[inline]
pub fn voxel_count(dims: Dims) -> usize {
    dims[0] * dims[1] * dims[2]
}

#[inline]
pub fn linear_index(dims: Dims, x: usize, y: usize, z: usize) -> usize {
    x + dims[0] * (y + dims[1] * z)
}

/// Centered coordinate of grid index `i` along an axis of length `n`; the
/// origin sits at `n / 2`.
#[inline]
pub fn centered(i: usize, n: usize) -> i64 {
    i as i64 - (n / 2) as i64
}

#[derive(Clone, Debug, PartialEq)]
pub struct ComplexVolume {
    dims: Dims,
    data: Vec<Complex64>,
}

impl ComplexVolume {
    pub fn zeros(dims: Dims) -> Self {
        Self { dims, data: vec![Complex64::new(0.0, 0.0); voxel_count(dims)] }
    }

    pub fn from_vec(dims: Dims, data: Vec<Complex64>) -> Result<Self> {
        if dims.iter().any(|&d| d == 0) {
            return Err(Error::DimMismatch(format!("zero-sized volume {dims:?}")));
        }
        if data.len() != voxel_count(dims) {
            return Err(Error::DimMismatch(format!(
                "volume {dims:?} needs {} values, got {}",
                voxel_count(dims),
                data.len()
            )));
        }
        Ok(Self { dims, data })
    }

    pub fn from_fn(dims: Dims, mut f: impl FnMut(usize, usize, usize) -> Complex64) -> Self {
        let mut data = Vec::with_capacity(voxel_count(dims));
        for z in 0..dims[2] {
            for y in 0..dims[1] {
                for x in 0..dims[0] {
                    data.push(f(x, y, z));
                }
            }
        }
        Self { dims, data }
    }

    pub fn dims(&self) -> Dims {
        self.dims
    }

    pub fn data(&self) -> &[Complex64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [Complex64] {
        &mut self.data
    }

    pub fn into_vec(self) -> Vec<Complex64> {
        self.data
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    #[inline]
    pub fn get(&self, x: usize, y: usize, z: usize) -> Complex64 {
        self.data[linear_index(self.dims, x, y, z)]
    }

    #[inline]
    pub fn set(&mut self, x: usize, y: usize, z: usize, v: Complex64) {
        let i = linear_index(self.dims, x, y, z);
        self.data[i] = v;
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|c| c.re.is_finite() && c.im.is_finite())
    }

    pub fn norm_sqr(&self) -> f64 {
        self.data.iter().map(|c| c.norm_sqr()).sum()
    }

    pub fn norm(&self) -> f64 {
        self.norm_sqr().sqrt()
    }

    pub fn max_abs(&self) -> f64 {
        self.data.iter().fold(0.0, |m, c| m.max(c.norm()))
    }

    /// `<self, other> = sum self * conj(other)`.
    pub fn inner(&self, other: &ComplexVolume) -> Complex64 {
        inner(&self.data, &other.data)
    }

    pub fn scale(&mut self, s: Complex64) {
        self.data.iter_mut().for_each(|v| *v *= s);
    }

    pub fn scaled(&self, s: Complex64) -> Self {
        let mut out = self.clone();
        out.scale(s);
        out
    }

    /// `self += a * other`
    pub fn axpy(&mut self, a: Complex64, other: &ComplexVolume) {
        for (d, s) in self.data.iter_mut().zip(&other.data) {
            *d += a * s;
        }
    }

    pub fn sub(&self, other: &ComplexVolume) -> Self {
        let data = self.data.iter().zip(&other.data).map(|(a, b)| a - b).collect();
        Self { dims: self.dims, data }
    }

    pub fn magnitude(&self) -> RealVolume {
        RealVolume { dims: self.dims, data: self.data.iter().map(|c| c.norm()).collect() }
    }

    /// Circular shift: `out(r) = self(r - shift)`.
    pub fn circshift(&self, shift: [i64; 3]) -> Self {
        let d = self.dims;
        let wrap = |i: usize, s: i64, n: usize| -> usize { (i as i64 - s).rem_euclid(n as i64) as usize };
        Self::from_fn(d, |x, y, z| self.get(wrap(x, shift[0], d[0]), wrap(y, shift[1], d[1]), wrap(z, shift[2], d[2])))
    }

    /// Extracts the centered `dims` sub-volume.
    pub fn crop_center(&self, dims: Dims) -> Result<Self> {
        let off = center_offset(self.dims, dims)?;
        Ok(Self::from_fn(dims, |x, y, z| self.get(x + off[0], y + off[1], z + off[2])))
    }

    /// Zero-pads into a larger volume, centered.
    pub fn embed_center(&self, dims: Dims) -> Result<Self> {
        let off = center_offset(dims, self.dims)?;
        let mut out = Self::zeros(dims);
        for z in 0..self.dims[2] {
            for y in 0..self.dims[1] {
                for x in 0..self.dims[0] {
                    out.set(x + off[0], y + off[1], z + off[2], self.get(x, y, z));
                }
            }
        }
        Ok(out)
    }
}

fn center_offset(outer: Dims, inner: Dims) -> Result<Dims> {
    if (0..3).any(|a| inner[a] > outer[a]) {
        return Err(Error::DimMismatch(format!("{inner:?} does not fit inside {outer:?}")));
    }
    // Keeps the centered origin (n / 2) aligned between the two grids.
    Ok([outer[0] / 2 - inner[0] / 2, outer[1] / 2 - inner[1] / 2, outer[2] / 2 - inner[2] / 2])
}

pub fn inner(a: &[Complex64], b: &[Complex64]) -> Complex64 {
    a.iter().zip(b).map(|(x, y)| x * y.conj()).sum()
}

pub fn norm(a: &[Complex64]) -> f64 {
    a.iter().map(|c| c.norm_sqr()).sum::<f64>().sqrt()
}

/// Normalized root-mean-square error, `||x - truth|| / ||truth||`.
pub fn nrmse(x: &ComplexVolume, truth: &ComplexVolume) -> f64 {
    let num: f64 = x.data.iter().zip(&truth.data).map(|(a, b)| (a - b).norm_sqr()).sum();
    (num / truth.norm_sqr()).sqrt()
}

#[derive(Clone, Debug, PartialEq)]
pub struct RealVolume {
    pub dims: Dims,
    pub data: Vec<f64>,
}

impl RealVolume {
    pub fn zeros(dims: Dims) -> Self {
        Self { dims, data: vec![0.0; voxel_count(dims)] }
    }

    #[inline]
    pub fn get(&self, x: usize, y: usize, z: usize) -> f64 {
        self.data[linear_index(self.dims, x, y, z)]
    }

    /// Value at signed coordinates, zero outside the volume.
    #[inline]
    pub fn get_or_zero(&self, x: i64, y: i64, z: i64) -> f64 {
        let d = self.dims;
        if x < 0 || y < 0 || z < 0 || x >= d[0] as i64 || y >= d[1] as i64 || z >= d[2] as i64 {
            0.0
        } else {
            self.get(x as usize, y as usize, z as usize)
        }
    }

    /// Trilinear sample at fractional coordinates, zero outside.
    pub fn sample_linear(&self, p: [f64; 3]) -> f64 {
        let base = [p[0].floor(), p[1].floor(), p[2].floor()];
        let f = [p[0] - base[0], p[1] - base[1], p[2] - base[2]];
        let b = [base[0] as i64, base[1] as i64, base[2] as i64];
        let mut acc = 0.0;
        for dz in 0..2 {
            let wz = if dz == 0 { 1.0 - f[2] } else { f[2] };
            if wz == 0.0 {
                continue;
            }
            for dy in 0..2 {
                let wy = if dy == 0 { 1.0 - f[1] } else { f[1] };
                if wy == 0.0 {
                    continue;
                }
                for dx in 0..2 {
                    let wx = if dx == 0 { 1.0 - f[0] } else { f[0] };
                    if wx == 0.0 {
                        continue;
                    }
                    acc += wx * wy * wz * self.get_or_zero(b[0] + dx, b[1] + dy, b[2] + dz);
                }
            }
        }
        acc
    }
}

/// Boolean volume, used for supports and regions of interest.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Mask {
    pub dims: Dims,
    pub data: Vec<bool>,
}

impl Mask {
    pub fn full(dims: Dims) -> Self {
        Self { dims, data: vec![true; voxel_count(dims)] }
    }

    pub fn empty(dims: Dims) -> Self {
        Self { dims, data: vec![false; voxel_count(dims)] }
    }

    /// Axis-aligned box given by its center and half-widths (inclusive).
    pub fn boxed(dims: Dims, center: [usize; 3], half: [usize; 3]) -> Self {
        let mut m = Self::empty(dims);
        for z in 0..dims[2] {
            for y in 0..dims[1] {
                for x in 0..dims[0] {
                    let p = [x, y, z];
                    if (0..3).all(|a| p[a].abs_diff(center[a]) <= half[a]) {
                        m.data[linear_index(dims, x, y, z)] = true;
                    }
                }
            }
        }
        m
    }

    #[inline]
    pub fn get(&self, x: usize, y: usize, z: usize) -> bool {
        self.data[linear_index(self.dims, x, y, z)]
    }

    pub fn count(&self) -> usize {
        self.data.iter().filter(|&&b| b).count()
    }

    /// Coordinates of the set voxels, in storage order.
    pub fn voxels(&self) -> Vec<[usize; 3]> {
        let d = self.dims;
        let mut out = Vec::with_capacity(self.count());
        for z in 0..d[2] {
            for y in 0..d[1] {
                for x in 0..d[0] {
                    if self.get(x, y, z) {
                        out.push([x, y, z]);
                    }
                }
            }
        }
        out
    }

    /// Inclusive bounding box `(lo, hi)` of the set voxels.
    pub fn bounding_box(&self) -> Option<([usize; 3], [usize; 3])> {
        let vox = self.voxels();
        let first = *vox.first()?;
        let mut lo = first;
        let mut hi = first;
        for v in &vox {
            for a in 0..3 {
                lo[a] = lo[a].min(v[a]);
                hi[a] = hi[a].max(v[a]);
            }
        }
        Some((lo, hi))
    }
}
