//! Variable-density 3D cones trajectories and density compensation.
//!
//! Each readout is an Archimedean spiral wound on a cone coaxial with the
//! S/I (z) axis. The radius is paced as `r(s) = 0.5 * s^p` for `s` in
//! `[0, 1]`, so `p > 1/3` oversamples the center of k-space relative to the
//! edge.

use serde::{Deserialize, Serialize};

use crate::error::{ensure, Error, Result};
use crate::nufft::{self, Plan};
use crate::volume::{voxel_count, Dims};

/// `180 (3 - sqrt 5)` degrees.
pub const GOLDEN_ANGLE_DEG: f64 = 137.507_764_050_037_85;

/// Largest coordinate value that survives a round trip through binary32
/// while staying below 0.5.
pub const K_MAX: f64 = 0.499_999_970_197_677_6;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum Ordering {
    Sequential,
    Phyllotaxis,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrajectoryConfig {
    pub matrix_dims: Dims,
    pub readouts_per_interleave: usize,
    pub samples_per_readout: usize,
    pub ordering: Ordering,
    /// Radial pacing exponent `p` of `r(s) = 0.5 s^p`.
    pub density_profile: f64,
    pub rotation_per_heartbeat_deg: f64,
    pub heartbeats: usize,
    /// Spiral turns per readout; `None` picks `max(matrix_dims) / 8`.
    pub spiral_turns: Option<f64>,
}

impl Default for TrajectoryConfig {
    /// 64x64x32 navigator, 32 readouts, roughly 9x undersampled.
    fn default() -> Self {
        Self {
            matrix_dims: [64, 64, 32],
            readouts_per_interleave: 32,
            samples_per_readout: 456,
            ordering: Ordering::Sequential,
            density_profile: 0.6,
            rotation_per_heartbeat_deg: 0.0,
            heartbeats: 1,
            spiral_turns: None,
        }
    }
}

impl TrajectoryConfig {
    pub fn validate(&self) -> Result<()> {
        ensure(self.matrix_dims.iter().all(|&d| d >= 4), || {
            format!("matrix dims {:?} must all be >= 4", self.matrix_dims)
        })?;
        ensure(self.readouts_per_interleave >= 1, || "need at least one readout".into())?;
        ensure(self.samples_per_readout >= 2, || {
            format!("samples_per_readout {} < 2", self.samples_per_readout)
        })?;
        ensure(self.density_profile.is_finite() && self.density_profile > 0.0, || {
            format!("density_profile {} must be > 0", self.density_profile)
        })?;
        ensure(self.rotation_per_heartbeat_deg.is_finite(), || "rotation must be finite".into())?;
        ensure(self.heartbeats >= 1, || "heartbeats must be >= 1".into())?;
        if let Some(t) = self.spiral_turns {
            ensure(t.is_finite() && t >= 0.0, || format!("spiral_turns {t} must be >= 0"))?;
        }
        Ok(())
    }

    pub fn turns(&self) -> f64 {
        self.spiral_turns
            .unwrap_or_else(|| *self.matrix_dims.iter().max().unwrap() as f64 / 8.0)
    }

    /// Cartesian Nyquist sample count over acquired sample count.
    pub fn undersampling_factor(&self) -> f64 {
        voxel_count(self.matrix_dims) as f64 / (self.readouts_per_interleave * self.samples_per_readout) as f64
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Trajectory {
    pub readouts: usize,
    pub samples: usize,
    /// `[readout][sample]`, normalized k-space units (cycles/voxel).
    pub coords: Vec<[f64; 3]>,
    pub dcw: Vec<f64>,
    pub heartbeat_index: u32,
}

impl Trajectory {
    pub fn new(readouts: usize, samples: usize, coords: Vec<[f64; 3]>, heartbeat_index: u32) -> Result<Self> {
        let n = readouts * samples;
        if coords.len() != n {
            return Err(Error::DimMismatch(format!("{readouts}x{samples} trajectory needs {n} coords, got {}", coords.len())));
        }
        let t = Self { readouts, samples, coords, dcw: vec![1.0; n], heartbeat_index };
        t.validate()?;
        Ok(t)
    }

    pub fn len(&self) -> usize {
        self.coords.len()
    }

    pub fn is_empty(&self) -> bool {
        self.coords.is_empty()
    }

    pub fn validate(&self) -> Result<()> {
        if self.coords.len() != self.readouts * self.samples || self.dcw.len() != self.coords.len() {
            return Err(Error::DimMismatch("trajectory arrays disagree with readouts x samples".into()));
        }
        for (i, c) in self.coords.iter().enumerate() {
            for &v in c {
                if !v.is_finite() {
                    return Err(Error::NonFinite(format!("trajectory coordinate {i}")));
                }
                if !(-0.5..0.5).contains(&v) {
                    return Err(Error::CoordOutOfRange { index: i, value: v });
                }
            }
        }
        if let Some(i) = self.dcw.iter().position(|w| !w.is_finite() || *w < 0.0) {
            return Err(Error::NonFinite(format!("density weight {i}")));
        }
        Ok(())
    }

    /// Every grid point of a fully sampled Cartesian acquisition, one readout
    /// per (y, z) line.
    pub fn cartesian(dims: Dims) -> Self {
        let mut coords = Vec::with_capacity(voxel_count(dims));
        for z in 0..dims[2] {
            for y in 0..dims[1] {
                for x in 0..dims[0] {
                    let p = [x, y, z];
                    coords.push(std::array::from_fn(|a| crate::volume::centered(p[a], dims[a]) as f64 / dims[a] as f64));
                }
            }
        }
        Self { readouts: dims[1] * dims[2], samples: dims[0], dcw: vec![1.0; coords.len()], coords, heartbeat_index: 0 }
    }

    /// Concatenates readouts; the heartbeat index of the first part is kept.
    pub fn concat(parts: &[Trajectory]) -> Result<Self> {
        let first = parts.first().ok_or_else(|| Error::InvalidConfig("nothing to concatenate".into()))?;
        if parts.iter().any(|p| p.samples != first.samples) {
            return Err(Error::DimMismatch("readout lengths differ".into()));
        }
        Ok(Self {
            readouts: parts.iter().map(|p| p.readouts).sum(),
            samples: first.samples,
            coords: parts.iter().flat_map(|p| p.coords.iter().copied()).collect(),
            dcw: parts.iter().flat_map(|p| p.dcw.iter().copied()).collect(),
            heartbeat_index: first.heartbeat_index,
        })
    }

    /// Splits into consecutive chunks of `readouts` readouts each.
    pub fn split(&self, readouts: &[usize]) -> Result<Vec<Trajectory>> {
        if readouts.iter().sum::<usize>() != self.readouts {
            return Err(Error::DimMismatch("split sizes do not cover the trajectory".into()));
        }
        let mut out = Vec::with_capacity(readouts.len());
        let mut start = 0;
        for &r in readouts {
            let range = start * self.samples..(start + r) * self.samples;
            out.push(Self {
                readouts: r,
                samples: self.samples,
                coords: self.coords[range.clone()].to_vec(),
                dcw: self.dcw[range].to_vec(),
                heartbeat_index: self.heartbeat_index,
            });
            start += r;
        }
        Ok(out)
    }
}

/// Polar angle and azimuth of the start direction of each readout.
///
/// Both orderings step through `cos(theta)` uniformly. Sequential advances
/// the azimuth along a single spherical spiral (Saff-Kuijlaars steps of
/// `3.6 / sqrt(n)` arc length), so consecutive readouts are neighbours;
/// phyllotaxis advances it by the golden angle.
pub fn cone_axes(n: usize, ordering: Ordering) -> Vec<(f64, f64)> {
    let golden = GOLDEN_ANGLE_DEG.to_radians();
    let tau = 2.0 * std::f64::consts::PI;
    let mut phi: f64 = 0.0;
    (0..n)
        .map(|i| {
            let cos_theta = 1.0 - (2 * i + 1) as f64 / n as f64;
            let theta = cos_theta.clamp(-1.0, 1.0).acos();
            match ordering {
                Ordering::Sequential => {
                    if i > 0 {
                        phi += 3.6 / (n as f64).sqrt() / theta.sin().max(1e-12);
                    }
                }
                Ordering::Phyllotaxis => phi = i as f64 * golden,
            }
            (theta, phi.rem_euclid(tau))
        })
        .collect()
}

#[inline]
fn clamp_coord(v: f64) -> f64 {
    v.clamp(-0.5, K_MAX)
}

pub fn gen_cones_vd(config: &TrajectoryConfig, heartbeat: u32) -> Result<Trajectory> {
    config.validate()?;
    let n = config.readouts_per_interleave;
    let s_count = config.samples_per_readout;
    let turns = config.turns();
    let p = config.density_profile;
    let mut coords = Vec::with_capacity(n * s_count);
    for (theta, phi0) in cone_axes(n, config.ordering) {
        let (st, ct) = theta.sin_cos();
        for j in 0..s_count {
            let s = j as f64 / (s_count - 1) as f64;
            let r = 0.5 * s.powf(p);
            let phi = phi0 + 2.0 * std::f64::consts::PI * turns * (r / 0.5);
            let (sp, cp) = phi.sin_cos();
            coords.push([clamp_coord(r * st * cp), clamp_coord(r * st * sp), clamp_coord(r * ct)]);
        }
    }
    let base = Trajectory { readouts: n, samples: s_count, dcw: vec![1.0; coords.len()], coords, heartbeat_index: 0 };
    let angle = (heartbeat as f64 * config.rotation_per_heartbeat_deg).rem_euclid(360.0);
    let mut traj = if config.rotation_per_heartbeat_deg == 0.0 { base } else { rotate_about_axis(&base, angle) };
    traj.heartbeat_index = heartbeat;
    Ok(traj)
}

/// Rotation about the S/I (z) axis. Density weights are carried over.
pub fn rotate_about_axis(traj: &Trajectory, angle_deg: f64) -> Trajectory {
    if angle_deg == 0.0 {
        return traj.clone();
    }
    let (s, c) = angle_deg.to_radians().sin_cos();
    let coords = traj
        .coords
        .iter()
        .map(|k| [clamp_coord(c * k[0] - s * k[1]), clamp_coord(s * k[0] + c * k[1]), k[2]])
        .collect();
    Trajectory { coords, ..traj.clone() }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct DcfOptions {
    pub iterations: usize,
    /// Stop once `max |G^T G w - 1|` falls below this.
    pub tolerance: f64,
}

impl Default for DcfOptions {
    fn default() -> Self {
        Self { iterations: 20, tolerance: 1e-3 }
    }
}

/// Iterative gridding fixed point `w <- w / (G^T G w)`.
///
/// The returned weights are scaled to approximate each sample's share of the
/// unit k-space cube, so the gridded adjoint of fully sampled data is an
/// inverse DFT.
pub fn density_compensation(traj: &Trajectory, plan: &Plan, opts: DcfOptions) -> Result<Trajectory> {
    traj.validate()?;
    ensure(opts.iterations >= 1, || "density compensation needs >= 1 iteration".into())?;
    let mut w = vec![1.0; traj.len()];
    for it in 0..opts.iterations {
        let c = plan.grid_roundtrip_real(&traj.coords, &w);
        let mut worst: f64 = 0.0;
        for (wi, ci) in w.iter_mut().zip(&c) {
            worst = worst.max((ci - 1.0).abs());
            *wi /= ci;
        }
        if w.iter().any(|v| !v.is_finite() || *v <= 0.0) {
            return Err(Error::DensityDiverged(it));
        }
        if worst < opts.tolerance {
            break;
        }
    }
    let scale = plan.kernel_volume();
    Ok(Trajectory { dcw: w.into_iter().map(|v| v * scale).collect(), ..traj.clone() })
}

/// Convenience wrapper with the default plan parameters.
pub fn density_compensation_default(traj: &Trajectory, dims: Dims) -> Result<Trajectory> {
    let plan = nufft::make_plan(dims, nufft::DEFAULT_OSF, nufft::DEFAULT_WIDTH, nufft::DEFAULT_LUT_RESOLUTION)?;
    density_compensation(traj, &plan, DcfOptions::default())
}
