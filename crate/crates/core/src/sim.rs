//! Digital phantom and motion-corrupted multi-coil cones acquisition.
//!
//! Scene JSON schema:
//!
//! ```json
//! {
//!   "dims": [64, 64, 32],
//!   "seed": 1,
//!   "primitives": [
//!     {"type": "ellipsoid", "center": [32, 32, 16], "radii": [20, 16, 9], "amplitude": [0.3, 0.0], "group": 0},
//!     {"type": "tube", "points": [[20, 30, 12], [26, 36, 16]], "radius": 1.5, "amplitude": [1.0, 0.2], "group": 1}
//!   ],
//!   "motion": {
//!     "amplitude": [0.0, 1.0, 3.0], "period": 4.0, "power": 4, "phase": 0.0,
//!     "regions": [{"group": 1, "offset": [0.0, 0.5, 1.5]}]
//!   }
//! }
//! ```
//!
//! Positions are voxel coordinates (voxel `i` is centred at `i`). Every
//! primitive moves by `amplitude * w(t)` plus the offsets of the regions
//! attached to its group, also scaled by `w(t)`, where
//! `w(t) = sin(pi (t + phase) / period)^power`.

use num_complex::Complex64;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::encoding::{self, CoilMaps, MultiCoilKSpace};
use crate::error::{ensure, Error, Result};
use crate::io::FormatError;
use crate::motion::MotionEstimates;
use crate::nufft::Plan;
use crate::trajectory::{self, Trajectory, TrajectoryConfig, GOLDEN_ANGLE_DEG};
use crate::volume::{ComplexVolume, Dims, Mask};

pub const MAX_REGIONS: usize = 5;
const SUPERSAMPLE: usize = 2;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "lowercase", deny_unknown_fields)]
pub enum Primitive {
    Ellipsoid {
        center: [f64; 3],
        radii: [f64; 3],
        amplitude: [f64; 2],
        #[serde(default)]
        group: usize,
    },
    /// Polyline with a circular cross-section.
    Tube {
        points: Vec<[f64; 3]>,
        radius: f64,
        amplitude: [f64; 2],
        #[serde(default)]
        group: usize,
    },
}

impl Primitive {
    pub fn group(&self) -> usize {
        match self {
            Primitive::Ellipsoid { group, .. } | Primitive::Tube { group, .. } => *group,
        }
    }

    fn amplitude(&self) -> Complex64 {
        match self {
            Primitive::Ellipsoid { amplitude, .. } | Primitive::Tube { amplitude, .. } => {
                Complex64::new(amplitude[0], amplitude[1])
            }
        }
    }

    fn bounds(&self) -> ([f64; 3], [f64; 3]) {
        match self {
            Primitive::Ellipsoid { center, radii, .. } => {
                (std::array::from_fn(|a| center[a] - radii[a]), std::array::from_fn(|a| center[a] + radii[a]))
            }
            Primitive::Tube { points, radius, .. } => {
                let mut lo = [f64::INFINITY; 3];
                let mut hi = [f64::NEG_INFINITY; 3];
                for p in points {
                    for a in 0..3 {
                        lo[a] = lo[a].min(p[a] - radius);
                        hi[a] = hi[a].max(p[a] + radius);
                    }
                }
                (lo, hi)
            }
        }
    }

    fn contains(&self, p: [f64; 3]) -> bool {
        match self {
            Primitive::Ellipsoid { center, radii, .. } => {
                (0..3).map(|a| ((p[a] - center[a]) / radii[a]).powi(2)).sum::<f64>() <= 1.0
            }
            Primitive::Tube { points, radius, .. } => {
                let r2 = radius * radius;
                if points.len() == 1 {
                    return dist2(p, points[0]) <= r2;
                }
                points.windows(2).any(|s| segment_dist2(p, s[0], s[1]) <= r2)
            }
        }
    }

    fn validate(&self) -> Result<()> {
        let finite = |v: &[f64]| v.iter().all(|x| x.is_finite());
        match self {
            Primitive::Ellipsoid { center, radii, amplitude, group } => {
                ensure(finite(center) && finite(amplitude), || "ellipsoid values must be finite".into())?;
                ensure(radii.iter().all(|r| r.is_finite() && *r > 0.0), || format!("ellipsoid radii {radii:?} must be > 0"))?;
                ensure(*group <= MAX_REGIONS, || format!("group {group} > {MAX_REGIONS}"))
            }
            Primitive::Tube { points, radius, amplitude, group } => {
                ensure(!points.is_empty(), || "tube needs at least one point".into())?;
                ensure(points.iter().all(|p| finite(p)) && finite(amplitude), || "tube values must be finite".into())?;
                ensure(radius.is_finite() && *radius > 0.0, || format!("tube radius {radius} must be > 0"))?;
                ensure(*group <= MAX_REGIONS, || format!("group {group} > {MAX_REGIONS}"))
            }
        }
    }
}

fn dist2(a: [f64; 3], b: [f64; 3]) -> f64 {
    (0..3).map(|i| (a[i] - b[i]).powi(2)).sum()
}

fn segment_dist2(p: [f64; 3], a: [f64; 3], b: [f64; 3]) -> f64 {
    let ab: [f64; 3] = std::array::from_fn(|i| b[i] - a[i]);
    let len2: f64 = ab.iter().map(|v| v * v).sum();
    let t = if len2 > 0.0 { ((0..3).map(|i| (p[i] - a[i]) * ab[i]).sum::<f64>() / len2).clamp(0.0, 1.0) } else { 0.0 };
    dist2(p, std::array::from_fn(|i| a[i] + t * ab[i]))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RegionalOffset {
    pub group: usize,
    pub offset: [f64; 3],
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct MotionModel {
    /// Peak global displacement in voxels (L/R, A/P, S/I).
    pub amplitude: [f64; 3],
    /// Period in heartbeats.
    pub period: f64,
    pub power: u32,
    pub phase: f64,
    pub regions: Vec<RegionalOffset>,
}

impl Default for MotionModel {
    fn default() -> Self {
        Self { amplitude: [0.0, 0.0, 3.0], period: 4.0, power: 4, phase: 0.0, regions: Vec::new() }
    }
}

impl MotionModel {
    pub fn stationary() -> Self {
        Self { amplitude: [0.0; 3], ..Self::default() }
    }

    /// Respiratory waveform in `[0, 1]`; zero at end-expiration.
    pub fn waveform(&self, t: f64) -> f64 {
        (std::f64::consts::PI * (t + self.phase) / self.period).sin().powi(self.power as i32).abs()
    }

    pub fn global(&self, t: f64) -> [f64; 3] {
        let w = self.waveform(t);
        self.amplitude.map(|a| a * w)
    }

    /// Total displacement of primitives in `group` at heartbeat `t`.
    pub fn displacement(&self, group: usize, t: f64) -> [f64; 3] {
        let w = self.waveform(t);
        let mut d = self.global(t);
        for r in self.regions.iter().filter(|r| r.group == group) {
            for a in 0..3 {
                d[a] += r.offset[a] * w;
            }
        }
        d
    }

    fn validate(&self) -> Result<()> {
        ensure(self.amplitude.iter().all(|a| a.is_finite()), || "motion amplitude must be finite".into())?;
        ensure(self.period.is_finite() && self.period > 0.0, || format!("motion period {} must be > 0", self.period))?;
        ensure(self.phase.is_finite(), || "motion phase must be finite".into())?;
        ensure(self.regions.len() <= MAX_REGIONS, || format!("at most {MAX_REGIONS} regional offsets"))?;
        ensure(self.regions.iter().all(|r| r.offset.iter().all(|v| v.is_finite())), || "regional offsets must be finite".into())
    }

    /// Largest displacement magnitude per axis over any group and phase.
    fn envelope(&self) -> [f64; 3] {
        let mut e = self.amplitude.map(f64::abs);
        let mut extra = [0.0f64; 3];
        for r in &self.regions {
            for a in 0..3 {
                extra[a] = extra[a].max(r.offset[a].abs());
            }
        }
        for a in 0..3 {
            e[a] += extra[a];
        }
        e
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PhantomScene {
    pub dims: Dims,
    pub primitives: Vec<Primitive>,
    #[serde(default)]
    pub motion: MotionModel,
    #[serde(default)]
    pub seed: u64,
}

impl PhantomScene {
    pub fn from_json(s: &str) -> Result<Self> {
        let scene: Self = serde_json::from_str(s).map_err(|e| Error::Scene(e.to_string()))?;
        scene.validate()?;
        Ok(scene)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("scene serializes")
    }

    /// Checks values and that every primitive stays inside the field of view
    /// at every motion phase.
    pub fn validate(&self) -> Result<()> {
        ensure(self.dims.iter().all(|&d| d >= 4), || format!("scene dims {:?} must all be >= 4", self.dims))?;
        self.motion.validate()?;
        let env = self.motion.envelope();
        for (i, p) in self.primitives.iter().enumerate() {
            p.validate()?;
            let (lo, hi) = p.bounds();
            for a in 0..3 {
                if lo[a] - env[a] < -0.5 || hi[a] + env[a] > self.dims[a] as f64 - 0.5 {
                    return Err(Error::Scene(format!("primitive {i} leaves the field of view along axis {a}")));
                }
            }
        }
        Ok(())
    }

    /// Chest-like scene scaled to `dims`: body, heart with two chambers,
    /// liver dome and two coronary-like vessels, with S/I-dominant breathing
    /// and regional offsets on the heart chambers and liver.
    pub fn cardiac(dims: Dims) -> Self {
        let s = |u: [f64; 3]| -> [f64; 3] { std::array::from_fn(|a| u[a] * dims[a] as f64) };
        let ellipsoid = |c: [f64; 3], r: [f64; 3], amp: [f64; 2], group: usize| Primitive::Ellipsoid {
            center: s(c),
            radii: s(r),
            amplitude: amp,
            group,
        };
        let arc = |c: [f64; 3], radius: [f64; 3], from: f64, to: f64| -> Vec<[f64; 3]> {
            (0..=12)
                .map(|i| {
                    let t = from + (to - from) * i as f64 / 12.0;
                    s([c[0] + radius[0] * t.cos(), c[1] + radius[1] * t.sin(), c[2] + radius[2] * (t - from)])
                })
                .collect()
        };
        let vessel_r = 0.02 * dims[0].min(dims[1]) as f64;
        let primitives = vec![
            ellipsoid([0.5, 0.5, 0.5], [0.40, 0.32, 0.28], [0.25, 0.0], 0),
            ellipsoid([0.35, 0.68, 0.44], [0.10, 0.08, 0.12], [0.15, 0.05], 0),
            ellipsoid([0.62, 0.68, 0.44], [0.10, 0.08, 0.12], [0.15, 0.05], 0),
            ellipsoid([0.46, 0.42, 0.52], [0.17, 0.14, 0.17], [0.45, 0.10], 1),
            ellipsoid([0.50, 0.40, 0.55], [0.07, 0.06, 0.08], [0.70, 0.15], 2),
            ellipsoid([0.38, 0.46, 0.50], [0.06, 0.05, 0.07], [0.55, 0.20], 3),
            ellipsoid([0.50, 0.50, 0.30], [0.25, 0.18, 0.08], [0.35, -0.05], 4),
            Primitive::Tube { points: arc([0.46, 0.42, 0.50], [0.19, 0.16, 0.02], 0.3, 2.2), radius: vessel_r, amplitude: [0.9, 0.1], group: 1 },
            Primitive::Tube { points: arc([0.46, 0.42, 0.56], [0.18, 0.15, -0.02], 3.4, 5.0), radius: vessel_r, amplitude: [0.9, 0.1], group: 5 },
        ];
        let motion = MotionModel {
            amplitude: [0.0, 0.04 * dims[1] as f64, 0.09 * dims[2] as f64],
            period: 4.0,
            power: 4,
            phase: 0.0,
            regions: vec![
                RegionalOffset { group: 2, offset: [0.6, 0.0, 1.2] },
                RegionalOffset { group: 3, offset: [-0.8, 0.5, 0.0] },
                RegionalOffset { group: 4, offset: [0.0, 0.0, 1.5] },
                RegionalOffset { group: 5, offset: [0.0, -1.0, -1.2] },
            ],
        };
        Self { dims, primitives, motion, seed: 1 }
    }
}

/// Box around the heart of [`PhantomScene::cardiac`] at `dims`.
pub fn heart_roi(dims: Dims) -> Mask {
    let f = |a: usize, num: usize, den: usize| dims[a] * num / den;
    Mask::boxed(dims, [f(0, 29, 64), f(1, 27, 64), f(2, 17, 32)], [f(0, 14, 64), f(1, 12, 64), f(2, 8, 32)])
}

/// Rasterizes the scene displaced by the motion model at heartbeat `t`.
pub fn render_phantom(scene: &PhantomScene, t: f64) -> ComplexVolume {
    let d: Vec<[f64; 3]> = scene.primitives.iter().map(|p| scene.motion.displacement(p.group(), t)).collect();
    render_displaced(scene, &d)
}

/// Rasterizes with an explicit displacement per primitive, using `2^3`
/// supersamples per voxel.
pub fn render_displaced(scene: &PhantomScene, displacement: &[[f64; 3]]) -> ComplexVolume {
    let dims = scene.dims;
    let mut out = ComplexVolume::zeros(dims);
    let sub: Vec<f64> = (0..SUPERSAMPLE).map(|i| (i as f64 + 0.5) / SUPERSAMPLE as f64 - 0.5).collect();
    let weight = 1.0 / (SUPERSAMPLE as f64).powi(3);
    for (p, d) in scene.primitives.iter().zip(displacement) {
        let (lo, hi) = p.bounds();
        let range = |a: usize| {
            let start = (lo[a] + d[a] - 1.0).floor().max(0.0) as usize;
            let end = ((hi[a] + d[a] + 1.0).ceil().max(0.0) as usize).min(dims[a] - 1);
            start..=end
        };
        let amp = p.amplitude() * weight;
        for z in range(2) {
            for y in range(1) {
                for x in range(0) {
                    let mut hits = 0;
                    for &oz in &sub {
                        for &oy in &sub {
                            for &ox in &sub {
                                let q = [x as f64 + ox - d[0], y as f64 + oy - d[1], z as f64 + oz - d[2]];
                                hits += p.contains(q) as u32;
                            }
                        }
                    }
                    if hits > 0 {
                        let i = x + dims[0] * (y + dims[1] * z);
                        out.data_mut()[i] += amp * hits as f64;
                    }
                }
            }
        }
    }
    out
}

/// Smooth Gaussian receive profiles placed on a ring around the field of
/// view, alternating above and below the centre slice, each with its own
/// constant phase; normalized to unit root sum of squares.
pub fn gaussian_coil_maps(dims: Dims, n_coils: usize) -> Result<CoilMaps> {
    ensure(n_coils >= 1, || "need at least one coil".into())?;
    if n_coils == 1 {
        return Ok(CoilMaps::identity(dims));
    }
    let sigma = 0.45;
    let raw = (0..n_coils)
        .map(|c| {
            let ang = 2.0 * std::f64::consts::PI * c as f64 / n_coils as f64;
            let zc = if n_coils > 4 { if c % 2 == 0 { 0.25 } else { -0.25 } } else { 0.0 };
            let center = [0.6 * ang.cos(), 0.6 * ang.sin(), zc];
            let phase = Complex64::from_polar(1.0, ang);
            ComplexVolume::from_fn(dims, |x, y, z| {
                let u = [
                    (x as f64 + 0.5) / dims[0] as f64 - 0.5,
                    (y as f64 + 0.5) / dims[1] as f64 - 0.5,
                    (z as f64 + 0.5) / dims[2] as f64 - 0.5,
                ];
                let r2: f64 = (0..3).map(|a| (u[a] - center[a]).powi(2)).sum();
                phase * (-r2 / (2.0 * sigma * sigma)).exp()
            })
        })
        .collect();
    CoilMaps::normalized(raw)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AcquisitionSpec {
    pub heartbeats: usize,
    pub coils: usize,
    /// Standard deviation of the complex noise, `E|n|^2 = sigma^2`.
    pub noise_sigma: f64,
    /// When set, overrides `noise_sigma` with the level giving this SNR
    /// against the RMS of the first heartbeat's noiseless samples.
    pub snr_db: Option<f64>,
    pub trajectory: TrajectoryConfig,
}

impl Default for AcquisitionSpec {
    fn default() -> Self {
        Self {
            heartbeats: 20,
            coils: 8,
            noise_sigma: 0.0,
            snr_db: None,
            trajectory: TrajectoryConfig { rotation_per_heartbeat_deg: GOLDEN_ANGLE_DEG, ..TrajectoryConfig::default() },
        }
    }
}

impl AcquisitionSpec {
    pub fn validate(&self) -> Result<()> {
        ensure(self.heartbeats >= 1, || "heartbeats must be >= 1".into())?;
        ensure(self.coils >= 1, || "coils must be >= 1".into())?;
        ensure(self.noise_sigma.is_finite() && self.noise_sigma >= 0.0, || format!("noise_sigma {} must be >= 0", self.noise_sigma))?;
        if let Some(s) = self.snr_db {
            ensure(s.is_finite(), || "snr_db must be finite".into())?;
        }
        self.trajectory.validate()
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct HeartbeatData {
    pub traj: Trajectory,
    pub kspace: MultiCoilKSpace,
}

/// Exact displacements used by the simulator.
#[derive(Clone, Debug, PartialEq)]
pub struct MotionTruth {
    pub global: Vec<[f64; 3]>,
    /// `[group][heartbeat]`, groups `0..=MAX_REGIONS`.
    pub groups: Vec<Vec<[f64; 3]>>,
}

impl MotionTruth {
    /// True motion relative to heartbeat `reference`, as bank estimates:
    /// group 0 drives the global series and groups `1..=MAX_REGIONS` the
    /// residual bins.
    pub fn as_estimates(&self, reference: usize, dims: Dims) -> Result<MotionEstimates> {
        ensure(reference < self.global.len(), || format!("reference {reference} out of range"))?;
        let rel = |s: &[[f64; 3]], t: usize| -> [f64; 3] { std::array::from_fn(|a| s[t][a] - s[reference][a]) };
        let base = &self.groups[0];
        let global: Vec<[f64; 3]> = (0..base.len()).map(|t| rel(base, t)).collect();
        let bins = self.groups[1..]
            .iter()
            .map(|g| (0..g.len()).map(|t| std::array::from_fn(|a| rel(g, t)[a] - global[t][a])).collect())
            .collect();
        Ok(MotionEstimates { reference_index: reference, global, bins, dims, bin_assignments: vec![0; crate::volume::voxel_count(dims)] })
    }

    pub fn to_csv(&self) -> String {
        let mut s = String::from("heartbeat,gx,gy,gz");
        for g in 0..self.groups.len() {
            s.push_str(&format!(",r{g}x,r{g}y,r{g}z"));
        }
        s.push('\n');
        for (t, g) in self.global.iter().enumerate() {
            s.push_str(&format!("{t},{},{},{}", g[0], g[1], g[2]));
            for grp in &self.groups {
                let d = grp[t];
                s.push_str(&format!(",{},{},{}", d[0], d[1], d[2]));
            }
            s.push('\n');
        }
        s
    }

    /// Parses the output of [`MotionTruth::to_csv`].
    pub fn from_csv(text: &str) -> Result<Self> {
        let bad = |line: usize, msg: String| Error::Format(FormatError::Invalid(format!("motion truth line {}: {msg}", line + 1)));
        let mut lines = text.lines().enumerate();
        let (_, header) = lines.next().ok_or_else(|| bad(0, "empty input".into()))?;
        let cols: Vec<&str> = header.split(',').collect();
        if cols.len() < 4 || (cols.len() - 4) % 3 != 0 || cols[..4] != ["heartbeat", "gx", "gy", "gz"] {
            return Err(bad(0, format!("unexpected header {header:?}")));
        }
        let n_groups = (cols.len() - 4) / 3;
        if n_groups > MAX_REGIONS + 1 {
            return Err(bad(0, format!("{n_groups} motion groups")));
        }
        for g in 0..n_groups {
            if cols[4 + 3 * g..7 + 3 * g] != [format!("r{g}x"), format!("r{g}y"), format!("r{g}z")] {
                return Err(bad(0, format!("unexpected header {header:?}")));
            }
        }
        let mut truth = MotionTruth { global: Vec::new(), groups: vec![Vec::new(); n_groups] };
        for (i, line) in lines {
            if line.is_empty() {
                continue;
            }
            let fields: Vec<&str> = line.split(',').collect();
            if fields.len() != cols.len() {
                return Err(bad(i, format!("expected {} fields, found {}", cols.len(), fields.len())));
            }
            if fields[0].parse::<usize>().ok() != Some(truth.global.len()) {
                return Err(bad(i, format!("expected heartbeat {}", truth.global.len())));
            }
            let mut vals = Vec::with_capacity(fields.len() - 1);
            for f in &fields[1..] {
                let v: f64 = f.parse().map_err(|_| bad(i, format!("bad number {f:?}")))?;
                if !v.is_finite() {
                    return Err(bad(i, format!("non-finite value {f:?}")));
                }
                vals.push(v);
            }
            truth.global.push([vals[0], vals[1], vals[2]]);
            for (g, grp) in truth.groups.iter_mut().enumerate() {
                grp.push([vals[3 + 3 * g], vals[4 + 3 * g], vals[5 + 3 * g]]);
            }
        }
        if truth.global.is_empty() {
            return Err(bad(0, "no heartbeats".into()));
        }
        Ok(truth)
    }
}

#[derive(Clone, Debug)]
pub struct Acquisition {
    pub heartbeats: Vec<HeartbeatData>,
    pub maps: CoilMaps,
    pub motion: MotionTruth,
    pub noise_sigma: f64,
}

impl Acquisition {
    /// All heartbeats as one trajectory, k-space set, and per-readout
    /// heartbeat labels.
    pub fn concatenated(&self) -> Result<(Trajectory, MultiCoilKSpace, Vec<usize>)> {
        let trajs: Vec<Trajectory> = self.heartbeats.iter().map(|h| h.traj.clone()).collect();
        let data: Vec<MultiCoilKSpace> = self.heartbeats.iter().map(|h| h.kspace.clone()).collect();
        let labels = self.heartbeats.iter().enumerate().flat_map(|(t, h)| std::iter::repeat_n(t, h.traj.readouts)).collect();
        Ok((Trajectory::concat(&trajs)?, MultiCoilKSpace::concat(&data)?, labels))
    }
}

/// Per-heartbeat noise stream derived from the scene seed.
pub fn noise_rng(seed: u64, heartbeat: usize) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(heartbeat as u64);
    rng
}

/// Adds circular complex Gaussian noise with `E|n|^2 = sigma^2`.
pub fn add_noise(samples: &mut [Complex64], sigma: f64, rng: &mut ChaCha8Rng) {
    if sigma == 0.0 {
        return;
    }
    let normal = Normal::new(0.0, sigma / std::f64::consts::SQRT_2).expect("finite sigma");
    for s in samples.iter_mut() {
        *s += Complex64::new(normal.sample(rng), normal.sample(rng));
    }
}

/// Noise level for a target SNR in dB relative to the RMS of `signal`.
pub fn sigma_for_snr(signal: &[Complex64], snr_db: f64) -> f64 {
    let rms = (signal.iter().map(|c| c.norm_sqr()).sum::<f64>() / signal.len().max(1) as f64).sqrt();
    rms / 10f64.powf(snr_db / 20.0)
}

/// Simulates every heartbeat: render the moving scene, encode it on that
/// heartbeat's rotated trajectory and add noise.
///
/// Density weights are computed once on the unrotated trajectory; rotation
/// about the S/I axis preserves the sampling density.
pub fn simulate_acquisition(scene: &PhantomScene, spec: &AcquisitionSpec) -> Result<Acquisition> {
    scene.validate()?;
    spec.validate()?;
    if spec.trajectory.matrix_dims != scene.dims {
        return Err(Error::DimMismatch(format!(
            "trajectory matrix {:?} vs scene {:?}",
            spec.trajectory.matrix_dims, scene.dims
        )));
    }
    let maps = gaussian_coil_maps(scene.dims, spec.coils)?;
    let plan = Plan::with_defaults(scene.dims)?;
    let base = trajectory::gen_cones_vd(&spec.trajectory, 0)?;
    let dcw = trajectory::density_compensation(&base, &plan, trajectory::DcfOptions::default())?.dcw;

    let clean: Vec<HeartbeatData> = (0..spec.heartbeats)
        .into_par_iter()
        .map(|t| -> Result<HeartbeatData> {
            let mut traj = trajectory::gen_cones_vd(&spec.trajectory, t as u32)?;
            traj.dcw = dcw.clone();
            let x = render_phantom(scene, t as f64);
            let kspace = encoding::sense_forward(&x, &maps, &traj, &plan)?;
            Ok(HeartbeatData { traj, kspace })
        })
        .collect::<Result<_>>()?;

    let sigma = match spec.snr_db {
        Some(snr) => {
            let all: Vec<Complex64> = clean[0].kspace.coils.iter().flatten().copied().collect();
            sigma_for_snr(&all, snr)
        }
        None => spec.noise_sigma,
    };
    let heartbeats = clean
        .into_par_iter()
        .enumerate()
        .map(|(t, mut h)| {
            let mut rng = noise_rng(scene.seed, t);
            for c in h.kspace.coils.iter_mut() {
                add_noise(c, sigma, &mut rng);
            }
            h
        })
        .collect();

    let global = (0..spec.heartbeats).map(|t| scene.motion.global(t as f64)).collect();
    let groups = (0..=MAX_REGIONS)
        .map(|g| (0..spec.heartbeats).map(|t| scene.motion.displacement(g, t as f64)).collect())
        .collect();
    Ok(Acquisition { heartbeats, maps, motion: MotionTruth { global, groups }, noise_sigma: sigma })
}
