//! Multi-coil SENSE encoding `A = F_nufft S` and its adjoint.

use num_complex::Complex64;
use rayon::prelude::*;

use crate::error::{ensure, Error, Result};
use crate::nufft::Plan;
use crate::trajectory::Trajectory;
use crate::volume::{voxel_count, ComplexVolume, Dims, Mask};

/// Relative RSS level below which voxels fall outside the estimated support.
pub const SUPPORT_THRESHOLD: f64 = 0.05;

#[derive(Clone, Debug, PartialEq)]
pub struct CoilMaps {
    pub maps: Vec<ComplexVolume>,
    pub support: Mask,
}

impl CoilMaps {
    /// Validates shapes and the root-sum-of-squares normalization.
    pub fn new(maps: Vec<ComplexVolume>, support: Mask) -> Result<Self> {
        let m = Self { maps, support };
        m.validate()?;
        Ok(m)
    }

    /// One coil with unit sensitivity everywhere.
    pub fn identity(dims: Dims) -> Self {
        let one = ComplexVolume::from_fn(dims, |_, _, _| Complex64::new(1.0, 0.0));
        Self { maps: vec![one], support: Mask::full(dims) }
    }

    /// Normalizes arbitrary sensitivity profiles so that their root sum of
    /// squares is one wherever it is nonzero.
    pub fn normalized(raw: Vec<ComplexVolume>) -> Result<Self> {
        let first = raw.first().ok_or_else(|| Error::InvalidConfig("no coils".into()))?;
        let dims = first.dims();
        let rss = rss(&raw);
        let mut support = Mask::full(dims);
        let mut maps = raw;
        for (i, r) in rss.iter().enumerate() {
            support.data[i] = *r > 0.0;
            for m in maps.iter_mut() {
                let v = &mut m.data_mut()[i];
                *v = if *r > 0.0 { *v / *r } else { Complex64::default() };
            }
        }
        Self::new(maps, support)
    }

    pub fn n_coils(&self) -> usize {
        self.maps.len()
    }

    pub fn dims(&self) -> Dims {
        self.support.dims
    }

    pub fn validate(&self) -> Result<()> {
        ensure(!self.maps.is_empty(), || "coil maps need at least one coil".into())?;
        let dims = self.support.dims;
        if self.maps.iter().any(|m| m.dims() != dims) {
            return Err(Error::DimMismatch("coil map dims differ from support".into()));
        }
        if self.maps.iter().any(|m| !m.is_finite()) {
            return Err(Error::NonFinite("coil maps".into()));
        }
        let rss = rss(&self.maps);
        for (i, r) in rss.iter().enumerate() {
            let ok = if self.support.data[i] { (r * r - 1.0).abs() <= 1e-6 } else { *r == 0.0 };
            if !ok {
                return Err(Error::InvalidConfig(format!("coil maps not normalized at voxel {i} (rss {r})")));
            }
        }
        Ok(())
    }
}

fn rss(maps: &[ComplexVolume]) -> Vec<f64> {
    let n = maps[0].len();
    (0..n).map(|i| maps.iter().map(|m| m.data()[i].norm_sqr()).sum::<f64>().sqrt()).collect()
}

#[derive(Clone, Debug, PartialEq)]
pub struct MultiCoilKSpace {
    pub readouts: usize,
    pub samples: usize,
    /// `[coil][readout * samples]`
    pub coils: Vec<Vec<Complex64>>,
}

impl MultiCoilKSpace {
    pub fn zeros(n_coils: usize, readouts: usize, samples: usize) -> Self {
        Self { readouts, samples, coils: vec![vec![Complex64::default(); readouts * samples]; n_coils] }
    }

    pub fn n_coils(&self) -> usize {
        self.coils.len()
    }

    pub fn validate_for(&self, traj: &Trajectory) -> Result<()> {
        if self.readouts != traj.readouts || self.samples != traj.samples {
            return Err(Error::DimMismatch(format!(
                "k-space {}x{} vs trajectory {}x{}",
                self.readouts, self.samples, traj.readouts, traj.samples
            )));
        }
        if self.coils.iter().any(|c| c.len() != self.readouts * self.samples) {
            return Err(Error::DimMismatch("coil sample count".into()));
        }
        if self.coils.iter().flatten().any(|c| !c.re.is_finite() || !c.im.is_finite()) {
            return Err(Error::NonFinite("k-space samples".into()));
        }
        Ok(())
    }

    pub fn norm_sqr(&self) -> f64 {
        self.coils.iter().flatten().map(|c| c.norm_sqr()).sum()
    }

    pub fn inner(&self, other: &MultiCoilKSpace) -> Complex64 {
        self.coils.iter().zip(&other.coils).map(|(a, b)| crate::volume::inner(a, b)).sum()
    }

    pub fn sub(&self, other: &MultiCoilKSpace) -> MultiCoilKSpace {
        let coils = self
            .coils
            .iter()
            .zip(&other.coils)
            .map(|(a, b)| a.iter().zip(b).map(|(x, y)| x - y).collect())
            .collect();
        MultiCoilKSpace { readouts: self.readouts, samples: self.samples, coils }
    }

    pub fn scaled(&self, s: Complex64) -> MultiCoilKSpace {
        let coils = self.coils.iter().map(|c| c.iter().map(|v| v * s).collect()).collect();
        MultiCoilKSpace { readouts: self.readouts, samples: self.samples, coils }
    }

    pub fn concat(parts: &[MultiCoilKSpace]) -> Result<Self> {
        let first = parts.first().ok_or_else(|| Error::InvalidConfig("nothing to concatenate".into()))?;
        if parts.iter().any(|p| p.samples != first.samples || p.n_coils() != first.n_coils()) {
            return Err(Error::DimMismatch("k-space parts disagree".into()));
        }
        let coils = (0..first.n_coils())
            .map(|c| parts.iter().flat_map(|p| p.coils[c].iter().copied()).collect())
            .collect();
        Ok(Self { readouts: parts.iter().map(|p| p.readouts).sum(), samples: first.samples, coils })
    }
}

fn check_dims(maps: &CoilMaps, plan: &Plan) -> Result<()> {
    if maps.dims() != plan.native_dims() {
        return Err(Error::DimMismatch(format!("maps {:?} vs plan {:?}", maps.dims(), plan.native_dims())));
    }
    Ok(())
}

pub fn sense_forward(x: &ComplexVolume, maps: &CoilMaps, traj: &Trajectory, plan: &Plan) -> Result<MultiCoilKSpace> {
    check_dims(maps, plan)?;
    if x.dims() != plan.native_dims() {
        return Err(Error::DimMismatch(format!("image {:?} vs plan {:?}", x.dims(), plan.native_dims())));
    }
    if !x.is_finite() {
        return Err(Error::NonFinite("SENSE input image".into()));
    }
    traj.validate()?;
    Ok(sense_forward_unchecked(x, maps, traj, plan))
}

pub(crate) fn sense_forward_unchecked(x: &ComplexVolume, maps: &CoilMaps, traj: &Trajectory, plan: &Plan) -> MultiCoilKSpace {
    let coils = maps
        .maps
        .par_iter()
        .map(|m| {
            let weighted: Vec<Complex64> = m.data().iter().zip(x.data()).map(|(s, v)| s * v).collect();
            plan.forward_unchecked(&weighted, &traj.coords)
        })
        .collect();
    MultiCoilKSpace { readouts: traj.readouts, samples: traj.samples, coils }
}

/// `sum_c conj(S_c) F^T y_c`, the exact transpose of [`sense_forward`].
pub fn sense_adjoint(y: &MultiCoilKSpace, maps: &CoilMaps, traj: &Trajectory, plan: &Plan) -> Result<ComplexVolume> {
    sense_adjoint_weighted(y, maps, traj, plan, false)
}

/// Multi-coil adjoint, optionally density compensated (the coil-combined
/// gridding reconstruction).
pub fn sense_adjoint_weighted(
    y: &MultiCoilKSpace,
    maps: &CoilMaps,
    traj: &Trajectory,
    plan: &Plan,
    apply_dcw: bool,
) -> Result<ComplexVolume> {
    check_dims(maps, plan)?;
    traj.validate()?;
    y.validate_for(traj)?;
    if y.n_coils() != maps.n_coils() {
        return Err(Error::DimMismatch(format!("{} coils of data vs {} maps", y.n_coils(), maps.n_coils())));
    }
    Ok(sense_adjoint_unchecked(y, maps, traj, plan, apply_dcw))
}

pub(crate) fn sense_adjoint_unchecked(
    y: &MultiCoilKSpace,
    maps: &CoilMaps,
    traj: &Trajectory,
    plan: &Plan,
    apply_dcw: bool,
) -> ComplexVolume {
    let per_coil: Vec<Vec<Complex64>> = y
        .coils
        .par_iter()
        .map(|samples| {
            if apply_dcw {
                let w: Vec<Complex64> = samples.iter().zip(&traj.dcw).map(|(s, d)| s * d).collect();
                plan.adjoint_unchecked(&w, &traj.coords)
            } else {
                plan.adjoint_unchecked(samples, &traj.coords)
            }
        })
        .collect();
    // Fixed coil order keeps the sum independent of the thread count.
    let mut out = ComplexVolume::zeros(plan.native_dims());
    for (img, m) in per_coil.iter().zip(&maps.maps) {
        for ((o, v), s) in out.data_mut().iter_mut().zip(img).zip(m.data()) {
            *o += s.conj() * v;
        }
    }
    out
}

/// Low-resolution coil sensitivity estimate from the central `cutoff` ball of
/// k-space.
///
/// Each coil's low-pass gridded image is divided by the root sum of squares
/// and referenced to the phase of a virtual coil: the sum of all coils after
/// rotating each onto the strongest one. A single coil yields a unit map,
/// identical coils yield identical real maps, and coils differing only by
/// constant phases are recovered up to those phases.
pub fn estimate_maps_lowres(calib: &MultiCoilKSpace, traj: &Trajectory, plan: &Plan, cutoff: f64) -> Result<CoilMaps> {
    ensure(cutoff > 0.0 && cutoff <= 0.5, || format!("cutoff {cutoff} must be in (0, 0.5]"))?;
    traj.validate()?;
    calib.validate_for(traj)?;
    ensure(calib.n_coils() >= 1, || "calibration needs at least one coil".into())?;
    if calib.coils.iter().flatten().all(|c| *c == Complex64::default()) {
        return Err(Error::ZeroCalibration);
    }
    let window: Vec<f64> = traj
        .coords
        .iter()
        .zip(&traj.dcw)
        .map(|(k, w)| {
            let r = (k[0] * k[0] + k[1] * k[1] + k[2] * k[2]).sqrt();
            if r <= cutoff {
                // Hann taper to limit ringing in the low-res images.
                w * 0.5 * (1.0 + (std::f64::consts::PI * r / cutoff).cos())
            } else {
                0.0
            }
        })
        .collect();
    let images: Vec<Vec<Complex64>> = calib
        .coils
        .par_iter()
        .map(|c| {
            let w: Vec<Complex64> = c.iter().zip(&window).map(|(s, w)| s * w).collect();
            plan.adjoint_unchecked(&w, &traj.coords)
        })
        .collect();

    let dims = plan.native_dims();
    let n = voxel_count(dims);
    let rss: Vec<f64> = (0..n).map(|i| images.iter().map(|m| m[i].norm_sqr()).sum::<f64>().sqrt()).collect();
    let max = rss.iter().cloned().fold(0.0, f64::max);
    if max <= 0.0 {
        return Err(Error::ZeroCalibration);
    }
    let mut support = Mask::empty(dims);
    for i in 0..n {
        support.data[i] = rss[i] >= SUPPORT_THRESHOLD * max;
    }
    // Rotate every coil onto the strongest one before summing, so the
    // reference phase does not depend on the coils' relative phases.
    let energy: Vec<f64> = images.iter().map(|m| m.iter().map(|v| v.norm_sqr()).sum()).collect();
    let strongest = (0..images.len()).fold(0, |b, c| if energy[c] > energy[b] { c } else { b });
    let align: Vec<Complex64> = images
        .iter()
        .map(|m| {
            let p: Complex64 = (0..n).filter(|&i| support.data[i]).map(|i| images[strongest][i] * m[i].conj()).sum();
            if p.norm() > 0.0 { p / p.norm() } else { Complex64::new(1.0, 0.0) }
        })
        .collect();
    let mut maps = vec![vec![Complex64::default(); n]; images.len()];
    for i in 0..n {
        if !support.data[i] {
            continue;
        }
        let sum: Complex64 = images.iter().zip(&align).map(|(m, a)| m[i] * a).sum();
        let phase = if sum.norm() > 0.0 { sum.conj() / sum.norm() } else { Complex64::new(1.0, 0.0) };
        for (map, img) in maps.iter_mut().zip(&images) {
            map[i] = img[i] * phase / rss[i];
        }
    }
    let maps = maps.into_iter().map(|m| ComplexVolume::from_vec(dims, m)).collect::<Result<Vec<_>>>()?;
    CoilMaps::new(maps, support)
}
