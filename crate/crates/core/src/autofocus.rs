//! Motion-compensated reconstruction bank and per-voxel gradient-entropy
//! autofocusing.

use num_complex::Complex64;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::encoding::{CoilMaps, MultiCoilKSpace};
use crate::error::{ensure, Error, Result};
use crate::motion::MotionEstimates;
use crate::nufft::Plan;
use crate::recon::{gridding_reconstruct, ista_reconstruct, ReconConfig};
use crate::trajectory::Trajectory;
use crate::volume::{linear_index, ComplexVolume, Dims, RealVolume};

pub const DEFAULT_PATCH_RADIUS: usize = 2;

/// Multiplies every sample of heartbeat `t` by `exp(-i 2 pi k . shifts[t])`,
/// which translates the image by `+shifts[t]` voxels. `labels` gives the
/// heartbeat of each readout.
pub fn phase_modulate(y: &MultiCoilKSpace, traj: &Trajectory, labels: &[usize], shifts: &[[f64; 3]]) -> Result<MultiCoilKSpace> {
    y.validate_for(traj)?;
    if labels.len() != traj.readouts {
        return Err(Error::DimMismatch(format!("{} heartbeat labels for {} readouts", labels.len(), traj.readouts)));
    }
    if let Some(&t) = labels.iter().find(|&&t| t >= shifts.len()) {
        return Err(Error::MissingHeartbeat(t));
    }
    if shifts.iter().flatten().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite("phase modulation shift".into()));
    }
    let ns = traj.samples;
    let factors: Vec<Option<Complex64>> = (0..traj.readouts * ns)
        .map(|i| {
            let d = shifts[labels[i / ns]];
            if d == [0.0; 3] {
                return None;
            }
            let k = traj.coords[i];
            let phase = -2.0 * std::f64::consts::PI * (k[0] * d[0] + k[1] * d[1] + k[2] * d[2]);
            Some(Complex64::from_polar(1.0, phase))
        })
        .collect();
    let mut out = y.clone();
    out.coils.par_iter_mut().for_each(|c| {
        for (v, f) in c.iter_mut().zip(&factors) {
            if let Some(f) = f {
                *v *= f;
            }
        }
    });
    Ok(out)
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase", tag = "method")]
pub enum BankRecon {
    #[default]
    Gridding,
    Ista(ReconConfig),
}

#[derive(Clone, Debug, PartialEq)]
pub struct MotionBank {
    /// Member 0 corrects global motion only; member `n` adds bin `n`'s
    /// residual.
    pub members: Vec<ComplexVolume>,
}

impl MotionBank {
    pub fn new(members: Vec<ComplexVolume>) -> Result<Self> {
        ensure(!members.is_empty(), || "empty bank".into())?;
        ensure(members.len() <= u8::MAX as usize, || format!("{} bank members", members.len()))?;
        let dims = members[0].dims();
        if members.iter().any(|m| m.dims() != dims) {
            return Err(Error::DimMismatch("bank members differ in dims".into()));
        }
        Ok(Self { members })
    }

    pub fn dims(&self) -> Dims {
        self.members[0].dims()
    }
}

fn reconstruct(y: &MultiCoilKSpace, maps: &CoilMaps, traj: &Trajectory, plan: &Plan, method: &BankRecon) -> Result<ComplexVolume> {
    match method {
        BankRecon::Gridding => gridding_reconstruct(y, maps, traj, plan),
        BankRecon::Ista(cfg) => Ok(ista_reconstruct(y, maps, traj, plan, cfg)?.x),
    }
}

/// Reconstruction with every heartbeat translated back by `-shifts[t]`.
pub fn corrected_reconstruction(
    y: &MultiCoilKSpace,
    traj: &Trajectory,
    labels: &[usize],
    shifts: &[[f64; 3]],
    maps: &CoilMaps,
    plan: &Plan,
    method: &BankRecon,
) -> Result<ComplexVolume> {
    let back: Vec<[f64; 3]> = shifts.iter().map(|d| d.map(|v| -v)).collect();
    reconstruct(&phase_modulate(y, traj, labels, &back)?, maps, traj, plan, method)
}

/// One global-only reconstruction plus one per residual bin, each undoing
/// the estimated translation heartbeat by heartbeat.
pub fn build_bank(
    y: &MultiCoilKSpace,
    traj: &Trajectory,
    labels: &[usize],
    maps: &CoilMaps,
    plan: &Plan,
    est: &MotionEstimates,
    method: &BankRecon,
) -> Result<MotionBank> {
    est.validate()?;
    if let Some(&t) = labels.iter().find(|&&t| t >= est.heartbeats()) {
        return Err(Error::MissingHeartbeat(t));
    }
    let members = (0..=est.bins.len())
        .into_par_iter()
        .map(|m| {
            let shifts: Vec<[f64; 3]> = (0..est.heartbeats()).map(|t| est.total(m, t)).collect();
            corrected_reconstruction(y, traj, labels, &shifts, maps, plan, method)
        })
        .collect::<Result<Vec<_>>>()?;
    MotionBank::new(members)
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Entropy {
    pub value: f64,
    /// All gradients were zero; `value` is then 0.
    pub degenerate: bool,
}

/// `-sum h ln h` with `h = g / sum g`.
pub fn entropy_of_gradients(g: &[f64]) -> Entropy {
    let s: f64 = g.iter().sum();
    if s <= 0.0 {
        return Entropy { value: 0.0, degenerate: true };
    }
    let h: f64 = g.iter().filter(|&&v| v > 0.0).map(|&v| -(v / s) * (v / s).ln()).sum();
    Entropy { value: h.max(0.0), degenerate: false }
}

/// Centered-difference gradient magnitude with replicated edges, so a
/// constant volume has zero gradient everywhere.
pub fn gradient_magnitude(v: &RealVolume) -> RealVolume {
    let d = v.dims;
    let mut out = RealVolume::zeros(d);
    let at = |x: i64, y: i64, z: i64| {
        v.get(x.clamp(0, d[0] as i64 - 1) as usize, y.clamp(0, d[1] as i64 - 1) as usize, z.clamp(0, d[2] as i64 - 1) as usize)
    };
    for z in 0..d[2] {
        for y in 0..d[1] {
            for x in 0..d[0] {
                let (xi, yi, zi) = (x as i64, y as i64, z as i64);
                let gx = 0.5 * (at(xi + 1, yi, zi) - at(xi - 1, yi, zi));
                let gy = 0.5 * (at(xi, yi + 1, zi) - at(xi, yi - 1, zi));
                let gz = 0.5 * (at(xi, yi, zi + 1) - at(xi, yi, zi - 1));
                out.data[linear_index(d, x, y, z)] = (gx * gx + gy * gy + gz * gz).sqrt();
            }
        }
    }
    out
}

/// Gradient entropy of a real patch.
pub fn gradient_entropy(patch: &RealVolume) -> Result<Entropy> {
    ensure(!patch.data.is_empty(), || "empty patch".into())?;
    Ok(entropy_of_gradients(&gradient_magnitude(patch).data))
}

/// Box sum over `[-r, r]` along one axis, zero outside.
fn box_axis(src: &[f64], dims: Dims, axis: usize, r: usize) -> Vec<f64> {
    let stride = [1, dims[0], dims[0] * dims[1]][axis];
    let n = dims[axis];
    let mut out = vec![0.0; src.len()];
    for (i, o) in out.iter_mut().enumerate() {
        let p = (i / stride) % n;
        let lo = p.saturating_sub(r);
        let hi = (p + r).min(n - 1);
        let base = i - p * stride;
        *o = (lo..=hi).map(|q| src[base + q * stride]).sum();
    }
    out
}

fn box_sum(src: &[f64], dims: Dims, r: usize) -> Vec<f64> {
    let a = box_axis(src, dims, 0, r);
    let b = box_axis(&a, dims, 1, r);
    box_axis(&b, dims, 2, r)
}

/// Per-voxel gradient entropy over the `(2r+1)^3` window of the whole-image
/// gradient magnitude, zero-padded at the borders.
pub fn local_gradient_entropy(v: &RealVolume, patch_radius: usize) -> RealVolume {
    let g = gradient_magnitude(v);
    let glng: Vec<f64> = g.data.iter().map(|&x| if x > 0.0 { x * x.ln() } else { 0.0 }).collect();
    let s = box_sum(&g.data, v.dims, patch_radius);
    let t = box_sum(&glng, v.dims, patch_radius);
    let data = s.iter().zip(&t).map(|(&s, &t)| if s > 0.0 { (s.ln() - t / s).max(0.0) } else { 0.0 }).collect();
    RealVolume { dims: v.dims, data }
}

#[derive(Clone, Debug, PartialEq)]
pub struct AutofocusResult {
    pub image: ComplexVolume,
    /// Bank index chosen at each voxel.
    pub selection: Vec<u8>,
    pub histogram: Vec<usize>,
}

impl AutofocusResult {
    pub fn histogram_csv(&self) -> String {
        let total: usize = self.histogram.iter().sum();
        let mut s = String::from("bin,count,fraction\n");
        for (b, &c) in self.histogram.iter().enumerate() {
            s.push_str(&format!("{b},{c},{}\n", c as f64 / total as f64));
        }
        s
    }
}

/// Picks, at every voxel, the bank member with the lowest local gradient
/// entropy (lowest index on ties) and assembles the image from those voxels.
pub fn autofocus_combine(bank: &MotionBank, patch_radius: usize) -> Result<AutofocusResult> {
    ensure(patch_radius >= 1, || "patch radius must be at least 1".into())?;
    let entropies: Vec<RealVolume> = bank.members.par_iter().map(|m| local_gradient_entropy(&m.magnitude(), patch_radius)).collect();
    let dims = bank.dims();
    let n = bank.members[0].len();
    let mut selection = vec![0u8; n];
    let mut histogram = vec![0usize; bank.members.len()];
    let mut image = ComplexVolume::zeros(dims);
    for i in 0..n {
        let mut best = 0;
        for (m, e) in entropies.iter().enumerate().skip(1) {
            if e.data[i] < entropies[best].data[i] {
                best = m;
            }
        }
        selection[i] = best as u8;
        histogram[best] += 1;
        image.data_mut()[i] = bank.members[best].data()[i];
    }
    Ok(AutofocusResult { image, selection, histogram })
}
