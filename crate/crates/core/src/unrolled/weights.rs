//! `UWT1` weight files.
//!
//! Layout, little-endian: magic `UWT1`; u16 version; u8 N; u8 M; u16 filter
//! depth; N f64 step sizes; then tensors until end of file, each as u8 name
//! length, name bytes, u8 rank, u32 dims[rank], f32 data (last dim fastest).
//!
//! Tensor names are 0-based: `it{k}.blk{m}.conv{1|2}.{w|b}`,
//! `it{k}.proj.{w|b}` and `it{k}.skipproj.w`. Kernels are
//! `[3][3][3][in][out]` indexed `[dz][dy][dx]`; the skip projection is
//! `[2][depth]`.

use std::collections::BTreeMap;
use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use thiserror::Error;

pub const MAGIC: &[u8; 4] = b"UWT1";
pub const VERSION: u16 = 1;
pub const TAPS: usize = 27;

#[derive(Debug, Error, PartialEq)]
pub enum WeightsError {
    #[error("bad magic")]
    BadMagic,
    #[error("unsupported version {0}")]
    UnsupportedVersion(u16),
    #[error("invalid header: {0}")]
    Header(String),
    #[error("tensor {tensor}: {detail}")]
    ShapeMismatch { tensor: String, detail: String },
    #[error("non-finite value in {tensor}")]
    NonFinite { tensor: String },
    #[error("unexpected tensor {0}")]
    UnknownTensor(String),
}

/// One 3x3x3 convolution: kernel `[27][cin][cout]` and bias `[cout]`.
#[derive(Clone, Debug, PartialEq)]
pub struct ConvWeights {
    pub cin: usize,
    pub cout: usize,
    pub kernel: Vec<f32>,
    pub bias: Vec<f32>,
}

impl ConvWeights {
    pub fn zeros(cin: usize, cout: usize) -> Self {
        Self { cin, cout, kernel: vec![0.0; TAPS * cin * cout], bias: vec![0.0; cout] }
    }

    /// Kernel entry for tap `(dx, dy, dz)` in `0..3`.
    pub fn at(&self, dx: usize, dy: usize, dz: usize, i: usize, o: usize) -> f32 {
        self.kernel[((dz * 3 + dy) * 3 + dx) * self.cin * self.cout + i * self.cout + o]
    }

    pub fn is_zero(&self) -> bool {
        self.kernel.iter().chain(&self.bias).all(|v| *v == 0.0)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct BlockWeights {
    pub conv1: ConvWeights,
    pub conv2: ConvWeights,
}

#[derive(Clone, Debug, PartialEq)]
pub struct IterationWeights {
    pub blocks: Vec<BlockWeights>,
    /// `[2][depth]` skip projection of the first block.
    pub skip_proj: Vec<f32>,
    pub proj: ConvWeights,
}

#[derive(Clone, Debug, PartialEq)]
pub struct UnrolledWeights {
    pub n_iterations: usize,
    pub blocks_per_iteration: usize,
    pub filter_depth: usize,
    pub alpha: Vec<f64>,
    pub iterations: Vec<IterationWeights>,
}

fn block_shapes(m: usize, depth: usize) -> (usize, usize) {
    if m == 0 {
        (2, depth)
    } else {
        (depth, depth)
    }
}

impl UnrolledWeights {
    /// All tensors zero: every CNN reduces to the identity and inference to
    /// plain gradient descent with steps `alpha`.
    pub fn zeros(n: usize, m: usize, depth: usize, alpha: f64) -> Self {
        let iterations = (0..n)
            .map(|_| IterationWeights {
                blocks: (0..m)
                    .map(|b| {
                        let (cin, cout) = block_shapes(b, depth);
                        BlockWeights { conv1: ConvWeights::zeros(cin, cout), conv2: ConvWeights::zeros(cout, cout) }
                    })
                    .collect(),
                skip_proj: vec![0.0; 2 * depth],
                proj: ConvWeights::zeros(depth, 2),
            })
            .collect();
        Self { n_iterations: n, blocks_per_iteration: m, filter_depth: depth, alpha: vec![alpha; n], iterations }
    }

    /// He-normal initialization scaled by `gain`, zero biases.
    pub fn random(n: usize, m: usize, depth: usize, alpha: f64, gain: f64, seed: u64) -> Self {
        let mut w = Self::zeros(n, m, depth, alpha);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut fill = |v: &mut [f32], fan_in: usize| {
            let normal = Normal::new(0.0, gain * (2.0 / fan_in as f64).sqrt()).expect("finite std");
            v.iter_mut().for_each(|x| *x = normal.sample(&mut rng) as f32);
        };
        for it in &mut w.iterations {
            for b in &mut it.blocks {
                fill(&mut b.conv1.kernel, TAPS * b.conv1.cin);
                fill(&mut b.conv2.kernel, TAPS * b.conv2.cin);
            }
            fill(&mut it.skip_proj, 2);
            fill(&mut it.proj.kernel, TAPS * depth);
        }
        w
    }

    /// Canonical tensors in file order, with their shapes.
    fn tensors(&self) -> Vec<(String, Vec<usize>, &[f32])> {
        let d = self.filter_depth;
        let mut out = Vec::new();
        for (k, it) in self.iterations.iter().enumerate() {
            for (m, b) in it.blocks.iter().enumerate() {
                for (j, c) in [(1, &b.conv1), (2, &b.conv2)] {
                    out.push((format!("it{k}.blk{m}.conv{j}.w"), vec![3, 3, 3, c.cin, c.cout], &c.kernel[..]));
                    out.push((format!("it{k}.blk{m}.conv{j}.b"), vec![c.cout], &c.bias[..]));
                }
            }
            out.push((format!("it{k}.skipproj.w"), vec![2, d], &it.skip_proj[..]));
            out.push((format!("it{k}.proj.w"), vec![3, 3, 3, d, 2], &it.proj.kernel[..]));
            out.push((format!("it{k}.proj.b"), vec![2], &it.proj.bias[..]));
        }
        out
    }

    /// Checks the architecture invariants.
    pub fn validate(&self) -> Result<(), WeightsError> {
        let (n, m, d) = (self.n_iterations, self.blocks_per_iteration, self.filter_depth);
        if n == 0 || m == 0 || d == 0 || n > 255 || m > 255 || d > 65535 {
            return Err(WeightsError::Header(format!("N={n}, M={m}, depth={d} out of range")));
        }
        if self.alpha.len() != n || self.iterations.len() != n {
            return Err(WeightsError::Header(format!("expected {n} iterations and step sizes")));
        }
        if let Some(k) = self.alpha.iter().position(|a| !a.is_finite()) {
            return Err(WeightsError::NonFinite { tensor: format!("alpha[{k}]") });
        }
        let reference = Self::zeros(n, m, d, 0.0);
        if self.iterations.iter().any(|it| it.blocks.len() != m) {
            return Err(WeightsError::Header(format!("expected {m} blocks per iteration")));
        }
        for ((name, shape, data), (_, want, want_data)) in self.tensors().into_iter().zip(reference.tensors()) {
            if shape != want || data.len() != want_data.len() {
                return Err(WeightsError::ShapeMismatch {
                    tensor: name,
                    detail: format!("expected shape {want:?}, have {} values for {shape:?}", data.len()),
                });
            }
            if data.iter().any(|v| !v.is_finite()) {
                return Err(WeightsError::NonFinite { tensor: name });
            }
        }
        Ok(())
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        out.push(self.n_iterations as u8);
        out.push(self.blocks_per_iteration as u8);
        out.extend_from_slice(&(self.filter_depth as u16).to_le_bytes());
        for a in &self.alpha {
            out.extend_from_slice(&a.to_le_bytes());
        }
        for (name, shape, data) in self.tensors() {
            out.push(name.len() as u8);
            out.extend_from_slice(name.as_bytes());
            out.push(shape.len() as u8);
            for d in shape {
                out.extend_from_slice(&(d as u32).to_le_bytes());
            }
            for v in data {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self, WeightsError> {
        let mut r = Cursor { buf: bytes, pos: 0 };
        if r.take(4) != Some(&MAGIC[..]) {
            return Err(WeightsError::BadMagic);
        }
        let header = |what: &str| WeightsError::Header(format!("truncated {what}"));
        let version = r.u16().ok_or_else(|| header("version"))?;
        if version != VERSION {
            return Err(WeightsError::UnsupportedVersion(version));
        }
        let n = r.u8().ok_or_else(|| header("header"))? as usize;
        let m = r.u8().ok_or_else(|| header("header"))? as usize;
        let depth = r.u16().ok_or_else(|| header("header"))? as usize;
        if n == 0 || m == 0 || depth == 0 {
            return Err(WeightsError::Header(format!("N={n}, M={m}, depth={depth} must all be >= 1")));
        }
        let alpha = (0..n).map(|_| r.f64()).collect::<Option<Vec<_>>>().ok_or_else(|| header("step sizes"))?;
        if let Some(k) = alpha.iter().position(|a| !a.is_finite()) {
            return Err(WeightsError::NonFinite { tensor: format!("alpha[{k}]") });
        }

        let mut w = Self::zeros(n, m, depth, 0.0);
        w.alpha = alpha;
        let expected: BTreeMap<String, Vec<usize>> = w.tensors().into_iter().map(|(n, s, _)| (n, s)).collect();
        let mut found: BTreeMap<String, Vec<f32>> = BTreeMap::new();
        while r.remaining() > 0 {
            let name_len = r.u8().unwrap() as usize;
            let name = r
                .take(name_len)
                .and_then(|b| std::str::from_utf8(b).ok())
                .ok_or_else(|| WeightsError::Header("truncated or non-UTF-8 tensor name".into()))?
                .to_string();
            let Some(want) = expected.get(&name) else {
                return Err(WeightsError::UnknownTensor(name));
            };
            if found.contains_key(&name) {
                return Err(WeightsError::ShapeMismatch { tensor: name, detail: "duplicate tensor".into() });
            }
            let mismatch = |detail: String| WeightsError::ShapeMismatch { tensor: name.clone(), detail };
            let rank = r.u8().ok_or_else(|| mismatch("truncated rank".into()))? as usize;
            let dims = (0..rank).map(|_| r.u32().map(|d| d as usize)).collect::<Option<Vec<_>>>();
            let dims = dims.ok_or_else(|| mismatch("truncated dims".into()))?;
            if &dims != want {
                return Err(mismatch(format!("expected {want:?}, found {dims:?}")));
            }
            let count: usize = dims.iter().product();
            let raw = r.take(count * 4).ok_or_else(|| mismatch(format!("truncated data, expected {count} values")))?;
            let data: Vec<f32> = raw.chunks_exact(4).map(|c| f32::from_le_bytes(c.try_into().unwrap())).collect();
            if data.iter().any(|v| !v.is_finite()) {
                return Err(WeightsError::NonFinite { tensor: name });
            }
            found.insert(name, data);
        }
        if let Some(missing) = expected.keys().find(|k| !found.contains_key(*k)) {
            return Err(WeightsError::ShapeMismatch { tensor: missing.clone(), detail: "missing from tensor table".into() });
        }
        for (k, it) in w.iterations.iter_mut().enumerate() {
            for (mi, b) in it.blocks.iter_mut().enumerate() {
                b.conv1.kernel = found.remove(&format!("it{k}.blk{mi}.conv1.w")).unwrap();
                b.conv1.bias = found.remove(&format!("it{k}.blk{mi}.conv1.b")).unwrap();
                b.conv2.kernel = found.remove(&format!("it{k}.blk{mi}.conv2.w")).unwrap();
                b.conv2.bias = found.remove(&format!("it{k}.blk{mi}.conv2.b")).unwrap();
            }
            it.skip_proj = found.remove(&format!("it{k}.skipproj.w")).unwrap();
            it.proj.kernel = found.remove(&format!("it{k}.proj.w")).unwrap();
            it.proj.bias = found.remove(&format!("it{k}.proj.b")).unwrap();
        }
        Ok(w)
    }
}

pub fn load_weights(path: &Path) -> crate::Result<UnrolledWeights> {
    let bytes = std::fs::read(path)?;
    Ok(UnrolledWeights::from_bytes(&bytes)?)
}

pub fn save_weights(w: &UnrolledWeights, path: &Path) -> crate::Result<()> {
    w.validate()?;
    crate::io::write_atomic(path, &w.to_bytes())?;
    Ok(())
}

struct Cursor<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn remaining(&self) -> usize {
        self.buf.len() - self.pos
    }

    fn take(&mut self, n: usize) -> Option<&'a [u8]> {
        if self.remaining() < n {
            return None;
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Some(s)
    }

    fn u8(&mut self) -> Option<u8> {
        self.take(1).map(|b| b[0])
    }

    fn u16(&mut self) -> Option<u16> {
        self.take(2).map(|b| u16::from_le_bytes(b.try_into().unwrap()))
    }

    fn u32(&mut self) -> Option<u32> {
        self.take(4).map(|b| u32::from_le_bytes(b.try_into().unwrap()))
    }

    fn f64(&mut self) -> Option<f64> {
        self.take(8).map(|b| f64::from_le_bytes(b.try_into().unwrap()))
    }
}
