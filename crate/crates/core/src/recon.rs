//! Iterative soft-thresholding (ISTA) with an orthonormal 3D Haar wavelet
//! sparsity prior, and the density-compensated gridding baseline.

use std::fmt::Write as _;

use num_complex::Complex64;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::encoding::{self, CoilMaps, MultiCoilKSpace};
use crate::error::{ensure, Error, Result};
use crate::nufft::Plan;
use crate::trajectory::Trajectory;
use crate::volume::{ComplexVolume, Dims};

pub const DEFAULT_LAMBDA: f64 = 0.05;
pub const DEFAULT_ITERATIONS: usize = 50;
pub const DEFAULT_WAVELET_LEVELS: usize = 2;
pub const POWER_ITERATIONS: usize = 30;
const POWER_SEED: u64 = 0x5eed;

/// Gradient step size.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "StepRepr", into = "StepRepr")]
pub enum Step {
    /// `0.99 / L`, with `L` the power-iteration estimate of `||A^T A||`.
    Auto,
    Fixed(f64),
}

#[derive(Serialize, Deserialize)]
#[serde(untagged)]
enum StepRepr {
    Num(f64),
    Name(String),
}

impl TryFrom<StepRepr> for Step {
    type Error = String;

    fn try_from(r: StepRepr) -> std::result::Result<Self, String> {
        match r {
            StepRepr::Num(v) => Ok(Step::Fixed(v)),
            StepRepr::Name(s) => s.parse(),
        }
    }
}

impl From<Step> for StepRepr {
    fn from(s: Step) -> Self {
        match s {
            Step::Auto => StepRepr::Name("auto".into()),
            Step::Fixed(v) => StepRepr::Num(v),
        }
    }
}

impl std::str::FromStr for Step {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, String> {
        if s.eq_ignore_ascii_case("auto") {
            return Ok(Step::Auto);
        }
        s.parse::<f64>().map(Step::Fixed).map_err(|_| format!("step must be `auto` or a number, got {s:?}"))
    }
}

/// Per-sample weighting of the data-consistency term.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DataWeighting {
    /// `1/2 ||Ax - y||^2`.
    Uniform,
    /// `1/2 ||W^(1/2) (Ax - y)||^2` with `W` the trajectory's density
    /// compensation weights.
    #[default]
    Density,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ReconConfig {
    pub lambda: f64,
    pub iterations: usize,
    pub step: Step,
    pub wavelet_levels: usize,
    pub weighting: DataWeighting,
}

impl Default for ReconConfig {
    fn default() -> Self {
        Self {
            lambda: DEFAULT_LAMBDA,
            iterations: DEFAULT_ITERATIONS,
            step: Step::Auto,
            wavelet_levels: DEFAULT_WAVELET_LEVELS,
            weighting: DataWeighting::default(),
        }
    }
}

impl ReconConfig {
    pub fn validate(&self) -> Result<()> {
        ensure(self.lambda.is_finite() && self.lambda >= 0.0, || format!("lambda {} must be finite and >= 0", self.lambda))?;
        ensure(self.iterations >= 1, || "iterations must be >= 1".into())?;
        ensure(self.wavelet_levels >= 1, || "wavelet_levels must be >= 1".into())?;
        if let Step::Fixed(a) = self.step {
            ensure(a.is_finite() && a > 0.0, || format!("step {a} must be > 0"))?;
        }
        Ok(())
    }
}

/// Objective value split into its two terms.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ObjectiveValue {
    pub data_term: f64,
    pub reg_term: f64,
}

impl ObjectiveValue {
    pub fn total(&self) -> f64 {
        self.data_term + self.reg_term
    }
}

#[derive(Clone, Debug)]
pub struct ObjectiveTrace {
    /// One entry per iterate, starting with `x0`.
    pub values: Vec<ObjectiveValue>,
    pub step: f64,
    pub x: ComplexVolume,
}

impl ObjectiveTrace {
    pub fn totals(&self) -> Vec<f64> {
        self.values.iter().map(ObjectiveValue::total).collect()
    }

    pub fn to_csv(&self) -> String {
        let mut s = String::from("iteration,data_term,reg_term,total\n");
        for (i, v) in self.values.iter().enumerate() {
            let _ = writeln!(s, "{i},{:.17e},{:.17e},{:.17e}", v.data_term, v.reg_term, v.total());
        }
        s
    }
}

/// Magnitude shrinkage `v * max(|v| - t, 0) / |v|`.
pub fn soft_threshold(v: &[Complex64], t: f64) -> Result<Vec<Complex64>> {
    let mut out = v.to_vec();
    soft_threshold_in_place(&mut out, t)?;
    Ok(out)
}

pub fn soft_threshold_in_place(v: &mut [Complex64], t: f64) -> Result<()> {
    ensure(t >= 0.0 && !t.is_nan(), || format!("threshold {t} must be >= 0"))?;
    for c in v.iter_mut() {
        let m = c.norm();
        *c = if m > t { *c * ((m - t) / m) } else { Complex64::default() };
    }
    Ok(())
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum WaveletDirection {
    Forward,
    Inverse,
}

fn check_wavelet_dims(dims: Dims, levels: usize) -> Result<()> {
    ensure(levels >= 1 && levels < usize::BITS as usize, || format!("invalid wavelet level count {levels}"))?;
    let f = 1usize << levels;
    ensure(dims.iter().all(|&d| d % f == 0 && d > 0), || format!("dims {dims:?} are not divisible by 2^{levels}"))
}

/// Orthonormal separable 3D Haar transform. Coefficients are stored Mallat
/// style: at each level the low band of the current subvolume is packed into
/// its first half along every axis.
pub fn wavelet3(x: &ComplexVolume, levels: usize, direction: WaveletDirection) -> Result<ComplexVolume> {
    check_wavelet_dims(x.dims(), levels)?;
    let mut out = x.clone();
    let dims = x.dims();
    match direction {
        WaveletDirection::Forward => {
            for l in 0..levels {
                let sub = dims.map(|d| d >> l);
                for axis in 0..3 {
                    haar_axis(out.data_mut(), dims, sub, axis, true);
                }
            }
        }
        WaveletDirection::Inverse => {
            for l in (0..levels).rev() {
                let sub = dims.map(|d| d >> l);
                for axis in (0..3).rev() {
                    haar_axis(out.data_mut(), dims, sub, axis, false);
                }
            }
        }
    }
    Ok(out)
}

/// One Haar analysis/synthesis pass along `axis` over the corner subvolume
/// `sub` of a volume with dims `dims`.
fn haar_axis(data: &mut [Complex64], dims: Dims, sub: Dims, axis: usize, analysis: bool) {
    let stride = [1, dims[0], dims[0] * dims[1]][axis];
    let n = sub[axis];
    let half = n / 2;
    let r = std::f64::consts::FRAC_1_SQRT_2;
    let mut line = vec![Complex64::default(); n];
    let (o1, o2) = match axis {
        0 => (1, 2),
        1 => (0, 2),
        _ => (0, 1),
    };
    let strides = [1, dims[0], dims[0] * dims[1]];
    for j in 0..sub[o2] {
        for i in 0..sub[o1] {
            let base = i * strides[o1] + j * strides[o2];
            for (t, v) in line.iter_mut().enumerate() {
                *v = data[base + t * stride];
            }
            for t in 0..half {
                let idx_lo = base + t * stride;
                let idx_hi = base + (t + half) * stride;
                if analysis {
                    let (a, b) = (line[2 * t], line[2 * t + 1]);
                    data[idx_lo] = (a + b) * r;
                    data[idx_hi] = (a - b) * r;
                } else {
                    let (lo, hi) = (line[t], line[t + half]);
                    data[base + 2 * t * stride] = (lo + hi) * r;
                    data[base + (2 * t + 1) * stride] = (lo - hi) * r;
                }
            }
        }
    }
}

fn l1(v: &[Complex64]) -> f64 {
    v.iter().map(|c| c.norm()).sum()
}

pub(crate) fn check_inputs(y: &MultiCoilKSpace, maps: &CoilMaps, traj: &Trajectory, plan: &Plan) -> Result<()> {
    if maps.dims() != plan.native_dims() {
        return Err(Error::DimMismatch(format!("maps {:?} vs plan {:?}", maps.dims(), plan.native_dims())));
    }
    traj.validate()?;
    y.validate_for(traj)?;
    if y.n_coils() != maps.n_coils() {
        return Err(Error::DimMismatch(format!("{} coils of data vs {} maps", y.n_coils(), maps.n_coils())));
    }
    Ok(())
}

pub(crate) fn sample_weights<'a>(traj: &'a Trajectory, weighting: DataWeighting) -> Option<&'a [f64]> {
    match weighting {
        DataWeighting::Uniform => None,
        DataWeighting::Density => Some(&traj.dcw),
    }
}

fn weighted_norm_sqr(r: &MultiCoilKSpace, w: Option<&[f64]>) -> f64 {
    match w {
        None => r.norm_sqr(),
        Some(w) => r.coils.iter().map(|c| c.iter().zip(w).map(|(v, wi)| wi * v.norm_sqr()).sum::<f64>()).sum(),
    }
}

pub(crate) fn apply_weights(r: &mut MultiCoilKSpace, w: Option<&[f64]>) {
    if let Some(w) = w {
        for c in r.coils.iter_mut() {
            c.iter_mut().zip(w).for_each(|(v, wi)| *v *= wi);
        }
    }
}

/// `A^T W A v`.
fn normal_op(v: &ComplexVolume, maps: &CoilMaps, traj: &Trajectory, plan: &Plan, w: Option<&[f64]>) -> ComplexVolume {
    let mut av = encoding::sense_forward_unchecked(v, maps, traj, plan);
    apply_weights(&mut av, w);
    encoding::sense_adjoint_unchecked(&av, maps, traj, plan, false)
}

/// `1/2 ||W^(1/2) (Ax - y)||^2 + lambda ||Psi x||_1`, with `W = I` for
/// uniform weighting.
#[allow(clippy::too_many_arguments)]
pub fn objective(
    x: &ComplexVolume,
    y: &MultiCoilKSpace,
    maps: &CoilMaps,
    traj: &Trajectory,
    plan: &Plan,
    lambda: f64,
    wavelet_levels: usize,
    weighting: DataWeighting,
) -> Result<f64> {
    check_inputs(y, maps, traj, plan)?;
    let ax = encoding::sense_forward(x, maps, traj, plan)?;
    let coeffs = wavelet3(x, wavelet_levels, WaveletDirection::Forward)?;
    Ok(0.5 * weighted_norm_sqr(&ax.sub(y), sample_weights(traj, weighting)) + lambda * l1(coeffs.data()))
}

/// Power-iteration estimate of the largest eigenvalue of `A^T W A`, from a
/// fixed pseudo-random start vector.
pub fn estimate_lipschitz(
    maps: &CoilMaps,
    traj: &Trajectory,
    plan: &Plan,
    weighting: DataWeighting,
    iterations: usize,
) -> Result<f64> {
    if maps.dims() != plan.native_dims() {
        return Err(Error::DimMismatch(format!("maps {:?} vs plan {:?}", maps.dims(), plan.native_dims())));
    }
    traj.validate()?;
    let w = sample_weights(traj, weighting);
    let mut rng = ChaCha8Rng::seed_from_u64(POWER_SEED);
    let mut v = ComplexVolume::from_fn(plan.native_dims(), |_, _, _| {
        Complex64::new(rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0))
    });
    v.scale(Complex64::new(1.0 / v.norm(), 0.0));
    let mut lambda = 0.0;
    for it in 0..iterations.max(1) {
        let next = normal_op(&v, maps, traj, plan, w);
        let n = next.norm();
        if !n.is_finite() {
            return Err(Error::Diverged { stage: "power iteration", iteration: it });
        }
        if n == 0.0 {
            return Ok(0.0);
        }
        lambda = n;
        v = next.scaled(Complex64::new(1.0 / n, 0.0));
    }
    Ok(lambda)
}

/// Proximal gradient descent on
/// `1/2 ||W^(1/2) (Ax - y)||^2 + lambda ||Psi x||_1`, starting from
/// `A^T W y`.
pub fn ista_reconstruct(
    y: &MultiCoilKSpace,
    maps: &CoilMaps,
    traj: &Trajectory,
    plan: &Plan,
    cfg: &ReconConfig,
) -> Result<ObjectiveTrace> {
    cfg.validate()?;
    check_inputs(y, maps, traj, plan)?;
    check_wavelet_dims(plan.native_dims(), cfg.wavelet_levels)?;
    if y.coils.iter().flatten().any(|c| !c.re.is_finite() || !c.im.is_finite()) {
        return Err(Error::NonFinite("k-space data".into()));
    }
    let w = sample_weights(traj, cfg.weighting);
    let alpha = match cfg.step {
        Step::Fixed(a) => a,
        Step::Auto => {
            let l = estimate_lipschitz(maps, traj, plan, cfg.weighting, POWER_ITERATIONS)?;
            if l > 0.0 {
                0.99 / l
            } else {
                1.0
            }
        }
    };
    let threshold = cfg.lambda * alpha;
    let levels = cfg.wavelet_levels;

    let mut wy = y.clone();
    apply_weights(&mut wy, w);
    let mut x = encoding::sense_adjoint_unchecked(&wy, maps, traj, plan, false);
    let mut values = Vec::with_capacity(cfg.iterations + 1);
    for it in 0..=cfg.iterations {
        let mut residual = encoding::sense_forward_unchecked(&x, maps, traj, plan).sub(y);
        let coeffs = wavelet3(&x, levels, WaveletDirection::Forward)?;
        let value = ObjectiveValue {
            data_term: 0.5 * weighted_norm_sqr(&residual, w),
            reg_term: cfg.lambda * l1(coeffs.data()),
        };
        if !value.total().is_finite() {
            return Err(Error::Diverged { stage: "ista", iteration: it });
        }
        values.push(value);
        if it == cfg.iterations {
            break;
        }
        apply_weights(&mut residual, w);
        let grad = encoding::sense_adjoint_unchecked(&residual, maps, traj, plan, false);
        x.axpy(Complex64::new(-alpha, 0.0), &grad);
        let mut c = wavelet3(&x, levels, WaveletDirection::Forward)?;
        soft_threshold_in_place(c.data_mut(), threshold)?;
        x = wavelet3(&c, levels, WaveletDirection::Inverse)?;
        if !x.is_finite() {
            return Err(Error::Diverged { stage: "ista", iteration: it + 1 });
        }
    }
    Ok(ObjectiveTrace { values, step: alpha, x })
}

/// Coil-combined, density-compensated adjoint.
pub fn gridding_reconstruct(y: &MultiCoilKSpace, maps: &CoilMaps, traj: &Trajectory, plan: &Plan) -> Result<ComplexVolume> {
    encoding::sense_adjoint_weighted(y, maps, traj, plan, true)
}

/// Oversized reconstruction matrix for an extended field of view, rounded
/// up to a multiple of `2^levels` along each axis.
pub fn extended_dims(native: Dims, factors: [f64; 3], levels: usize) -> Result<Dims> {
    ensure(factors.iter().all(|f| f.is_finite() && *f >= 1.0), || format!("FOV factors {factors:?} must be >= 1"))?;
    let m = 1usize << levels.min(16);
    Ok(std::array::from_fn(|a| ((native[a] as f64 * factors[a]).ceil() as usize).div_ceil(m) * m))
}
