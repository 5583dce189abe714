//! Radix-2 Cooley-Tukey FFT, 1D and separable 3D.
//!
//! Both directions are unnormalized: `Inverse` is the exact adjoint of
//! `Forward`, so `Inverse(Forward(x)) = N x`.
//!
//! The 3D transform works in place on x-fastest volumes. The y and z passes
//! run the butterflies over whole rows/planes at once so the innermost loop is
//! always contiguous in memory; no transposes are needed. Passes can be
//! restricted to a sub-range of the other axes, which lets the NUFFT skip the
//! lines that are known to be zero (forward, zero-padded input) or that are
//! cropped away afterwards (inverse).

use std::ops::Range;

use num_complex::Complex64;

use crate::error::{Error, Result};
use crate::volume::{voxel_count, Dims};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Direction {
    /// `X[m] = sum_n x[n] exp(-2 pi i m n / N)`
    Forward,
    /// `x[n] = sum_m X[m] exp(+2 pi i m n / N)`
    Inverse,
}

#[derive(Clone, Debug)]
pub struct Radix2 {
    n: usize,
    bitrev: Vec<usize>,
    /// `exp(-2 pi i j / n)` for `j < n / 2`.
    twiddles: Vec<Complex64>,
}

impl Radix2 {
    pub fn new(n: usize) -> Result<Self> {
        if n == 0 || !n.is_power_of_two() {
            return Err(Error::InvalidConfig(format!("FFT length {n} is not a power of two")));
        }
        let bits = n.trailing_zeros();
        let bitrev = (0..n)
            .map(|i| if bits == 0 { 0 } else { i.reverse_bits() >> (usize::BITS - bits) })
            .collect();
        let twiddles = (0..n / 2)
            .map(|j| {
                let (s, c) = (-2.0 * std::f64::consts::PI * j as f64 / n as f64).sin_cos();
                Complex64::new(c, s)
            })
            .collect();
        Ok(Self { n, bitrev, twiddles })
    }

    pub fn len(&self) -> usize {
        self.n
    }

    pub fn is_empty(&self) -> bool {
        self.n == 0
    }

    #[inline]
    fn twiddle(&self, j: usize, step: usize, dir: Direction) -> Complex64 {
        let w = self.twiddles[j * step];
        match dir {
            Direction::Forward => w,
            Direction::Inverse => w.conj(),
        }
    }

    /// In-place transform of a contiguous buffer of length `n`.
    pub fn process(&self, buf: &mut [Complex64], dir: Direction) {
        let n = self.n;
        debug_assert_eq!(buf.len(), n);
        for i in 0..n {
            let j = self.bitrev[i];
            if j > i {
                buf.swap(i, j);
            }
        }
        let mut len = 2;
        while len <= n {
            let half = len / 2;
            let step = n / len;
            for start in (0..n).step_by(len) {
                let (lo, hi) = buf[start..start + len].split_at_mut(half);
                for j in 0..half {
                    let w = self.twiddle(j, step, dir);
                    let a = lo[j];
                    let b = hi[j] * w;
                    lo[j] = a + b;
                    hi[j] = a - b;
                }
            }
            len *= 2;
        }
    }

    /// Transforms `n` lines laid out at `base + i * stride`, for every offset
    /// in `runs` (relative to `base`). Every run is processed in lockstep.
    fn process_strided(&self, data: &mut [Complex64], base: usize, stride: usize, runs: &[Range<usize>], dir: Direction) {
        let n = self.n;
        for i in 0..n {
            let j = self.bitrev[i];
            if j > i {
                let (lo, hi) = data.split_at_mut(base + j * stride);
                for r in runs {
                    let a = base + i * stride;
                    lo[a + r.start..a + r.end].swap_with_slice(&mut hi[r.start..r.end]);
                }
            }
        }
        let mut len = 2;
        while len <= n {
            let half = len / 2;
            let step = n / len;
            for start in (0..n).step_by(len) {
                for j in 0..half {
                    let w = self.twiddle(j, step, dir);
                    let p = base + (start + j) * stride;
                    let q = base + (start + j + half) * stride;
                    let (lo, hi) = data.split_at_mut(q);
                    for r in runs {
                        let a = &mut lo[p + r.start..p + r.end];
                        let b = &mut hi[r.start..r.end];
                        for (u, v) in a.iter_mut().zip(b.iter_mut()) {
                            let t = *v * w;
                            *v = *u - t;
                            *u += t;
                        }
                    }
                }
            }
            len *= 2;
        }
    }
}

/// Index ranges along each axis that a pruned transform touches.
pub type AxisRanges = [Vec<Range<usize>>; 3];

pub fn full_ranges(dims: Dims) -> AxisRanges {
    [vec![0..dims[0]], vec![0..dims[1]], vec![0..dims[2]]]
}

#[derive(Clone, Debug)]
pub struct Fft3 {
    dims: Dims,
    axes: [Radix2; 3],
}

impl Fft3 {
    pub fn new(dims: Dims) -> Result<Self> {
        Ok(Self { dims, axes: [Radix2::new(dims[0])?, Radix2::new(dims[1])?, Radix2::new(dims[2])?] })
    }

    pub fn dims(&self) -> Dims {
        self.dims
    }

    pub fn forward(&self, data: &mut [Complex64]) {
        self.forward_pruned(data, &full_ranges(self.dims));
    }

    pub fn inverse(&self, data: &mut [Complex64]) {
        self.inverse_pruned(data, &full_ranges(self.dims));
    }

    /// Forward transform of data that is zero outside `support`.
    pub fn forward_pruned(&self, data: &mut [Complex64], support: &AxisRanges) {
        assert_eq!(data.len(), voxel_count(self.dims));
        let all = full_ranges(self.dims);
        let dir = Direction::Forward;
        self.pass_z(data, &support[1], &support[0], dir);
        self.pass_y(data, &all[2], &support[0], dir);
        self.pass_x(data, &all[2], &all[1], dir);
    }

    /// Inverse transform; only values inside `keep` are valid afterwards.
    pub fn inverse_pruned(&self, data: &mut [Complex64], keep: &AxisRanges) {
        assert_eq!(data.len(), voxel_count(self.dims));
        let all = full_ranges(self.dims);
        let dir = Direction::Inverse;
        self.pass_x(data, &all[2], &all[1], dir);
        self.pass_y(data, &all[2], &keep[0], dir);
        self.pass_z(data, &keep[1], &keep[0], dir);
    }

    fn pass_x(&self, data: &mut [Complex64], zs: &[Range<usize>], ys: &[Range<usize>], dir: Direction) {
        let [nx, ny, _] = self.dims;
        for z in zs.iter().cloned().flatten() {
            for y in ys.iter().cloned().flatten() {
                let start = nx * (y + ny * z);
                self.axes[0].process(&mut data[start..start + nx], dir);
            }
        }
    }

    fn pass_y(&self, data: &mut [Complex64], zs: &[Range<usize>], xs: &[Range<usize>], dir: Direction) {
        let [nx, ny, _] = self.dims;
        for z in zs.iter().cloned().flatten() {
            self.axes[1].process_strided(data, z * nx * ny, nx, xs, dir);
        }
    }

    fn pass_z(&self, data: &mut [Complex64], ys: &[Range<usize>], xs: &[Range<usize>], dir: Direction) {
        let [nx, ny, _] = self.dims;
        let mut runs = Vec::new();
        for y in ys.iter().cloned().flatten() {
            for r in xs {
                runs.push(y * nx + r.start..y * nx + r.end);
            }
        }
        self.axes[2].process_strided(data, 0, nx * ny, &runs, dir);
    }
}
