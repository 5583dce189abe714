//! Oracles and fixtures shared by the integration tests and the acceptance
//! harness.
#![allow(dead_code)]

use conesrecon::encoding::{sense_adjoint_weighted, sense_forward, CoilMaps, MultiCoilKSpace};
use conesrecon::nufft::Plan;
use conesrecon::trajectory::Trajectory;
use conesrecon::unrolled::{ConvWeights, FeatureMap};
use conesrecon::volume::{centered, voxel_count, ComplexVolume, Dims};
use num_complex::Complex64;
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use std::f64::consts::PI;

/// Direct evaluation of `X(k) = sum_r x(r) exp(-i 2 pi k . r)` with centered
/// voxel coordinates.
pub fn direct_dft(x: &ComplexVolume, coords: &[[f64; 3]]) -> Vec<Complex64> {
    let [nx, ny, nz] = x.dims();
    coords
        .iter()
        .map(|k| {
            let ex: Vec<Complex64> = (0..nx).map(|i| Complex64::from_polar(1.0, -2.0 * PI * k[0] * centered(i, nx) as f64)).collect();
            let ey: Vec<Complex64> = (0..ny).map(|i| Complex64::from_polar(1.0, -2.0 * PI * k[1] * centered(i, ny) as f64)).collect();
            let ez: Vec<Complex64> = (0..nz).map(|i| Complex64::from_polar(1.0, -2.0 * PI * k[2] * centered(i, nz) as f64)).collect();
            let mut acc = Complex64::default();
            for z in 0..nz {
                for y in 0..ny {
                    let eyz = ey[y] * ez[z];
                    let mut row = Complex64::default();
                    for (i, e) in ex.iter().enumerate() {
                        row += x.get(i, y, z) * e;
                    }
                    acc += row * eyz;
                }
            }
            acc
        })
        .collect()
}

pub fn rel_l2(got: &[Complex64], want: &[Complex64]) -> f64 {
    let num: f64 = got.iter().zip(want).map(|(a, b)| (a - b).norm_sqr()).sum();
    let den: f64 = want.iter().map(|b| b.norm_sqr()).sum();
    (num / den).sqrt()
}

pub fn rel_vol(got: &ComplexVolume, want: &ComplexVolume) -> f64 {
    got.sub(want).norm() / want.norm()
}

pub fn cn(rng: &mut ChaCha8Rng) -> Complex64 {
    Complex64::new(rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0))
}

pub fn random_volume(dims: Dims, rng: &mut ChaCha8Rng) -> ComplexVolume {
    let data = (0..voxel_count(dims)).map(|_| cn(rng)).collect();
    ComplexVolume::from_vec(dims, data).unwrap()
}

pub fn random_samples(n: usize, rng: &mut ChaCha8Rng) -> Vec<Complex64> {
    (0..n).map(|_| cn(rng)).collect()
}

pub fn random_coords(n: usize, rng: &mut ChaCha8Rng) -> Vec<[f64; 3]> {
    (0..n).map(|_| std::array::from_fn(|_| rng.random_range(-0.5..0.5))).collect()
}

pub fn random_trajectory(readouts: usize, samples: usize, rng: &mut ChaCha8Rng) -> Trajectory {
    Trajectory::new(readouts, samples, random_coords(readouts * samples, rng), 0).unwrap()
}

pub fn random_kspace(coils: usize, readouts: usize, samples: usize, rng: &mut ChaCha8Rng) -> MultiCoilKSpace {
    let mut y = MultiCoilKSpace::zeros(coils, readouts, samples);
    y.coils.iter_mut().flatten().for_each(|v| *v = cn(rng));
    y
}

/// Random unit-norm coil maps over the full volume.
pub fn random_maps(dims: Dims, coils: usize, rng: &mut ChaCha8Rng) -> CoilMaps {
    let raw = (0..coils).map(|_| random_volume(dims, rng)).collect();
    CoilMaps::normalized(raw).unwrap()
}

/// Nested-loop 3x3x3 convolution with zero padding, in f64.
pub fn naive_conv3d(x: &FeatureMap, k: &ConvWeights) -> Vec<f64> {
    let [nx, ny, nz] = x.dims();
    let mut out = vec![0.0; voxel_count(x.dims()) * k.cout];
    for z in 0..nz {
        for y in 0..ny {
            for xx in 0..nx {
                for o in 0..k.cout {
                    let mut acc = k.bias[o] as f64;
                    for dz in 0..3 {
                        for dy in 0..3 {
                            for dx in 0..3 {
                                let s = [xx as i64 + dx as i64 - 1, y as i64 + dy as i64 - 1, z as i64 + dz as i64 - 1];
                                if s.iter().zip([nx, ny, nz]).any(|(&v, n)| v < 0 || v >= n as i64) {
                                    continue;
                                }
                                for i in 0..k.cin {
                                    acc += x.get(s[0] as usize, s[1] as usize, s[2] as usize, i) as f64 * k.at(dx, dy, dz, i, o) as f64;
                                }
                            }
                        }
                    }
                    out[(xx + nx * (y + ny * z)) * k.cout + o] = acc;
                }
            }
        }
    }
    out
}

pub fn random_conv(cin: usize, cout: usize, rng: &mut ChaCha8Rng) -> ConvWeights {
    let mut k = ConvWeights::zeros(cin, cout);
    k.kernel.iter_mut().chain(k.bias.iter_mut()).for_each(|v| *v = rng.random_range(-1.0..1.0));
    k
}

pub fn random_feature_map(dims: Dims, channels: usize, rng: &mut ChaCha8Rng) -> FeatureMap {
    let data = (0..voxel_count(dims) * channels).map(|_| rng.random_range(-1.0f32..1.0)).collect();
    FeatureMap::from_vec(dims, channels, data).unwrap()
}

pub fn rel_f32(got: &[f32], want: &[f64]) -> f64 {
    let num: f64 = got.iter().zip(want).map(|(g, w)| (*g as f64 - w).powi(2)).sum();
    let den: f64 = want.iter().map(|w| w * w).sum();
    (num / den).sqrt()
}

/// Explicit gradient descent on `1/2 ||W^(1/2)(Ax - y)||^2` from `A^T W y`.
pub fn gradient_descent(y: &MultiCoilKSpace, maps: &CoilMaps, traj: &Trajectory, plan: &Plan, alpha: &[f64], weighted: bool) -> ComplexVolume {
    let mut x = sense_adjoint_weighted(y, maps, traj, plan, weighted).unwrap();
    for a in alpha {
        let r = sense_forward(&x, maps, traj, plan).unwrap().sub(y);
        let g = sense_adjoint_weighted(&r, maps, traj, plan, weighted).unwrap();
        x.axpy((-a).into(), &g);
    }
    x
}

pub fn with_threads<T: Send>(n: usize, f: impl FnOnce() -> T + Send) -> T {
    rayon::ThreadPoolBuilder::new().num_threads(n).build().unwrap().install(f)
}

/// Fixed scanner setup for translated-phantom navigators: one cones
/// trajectory, Gaussian coils and a heart-centred ROI.
pub struct ShiftRig {
    pub scene: conesrecon::sim::PhantomScene,
    pub maps: CoilMaps,
    pub traj: Trajectory,
    pub plan: Plan,
    pub roi: conesrecon::volume::Mask,
    pub sigma: f64,
}

impl ShiftRig {
    pub fn new(dims: Dims, coils: usize, snr_db: f64) -> Self {
        use conesrecon::sim::*;
        use conesrecon::trajectory::*;
        let mut scene = PhantomScene::cardiac(dims);
        scene.motion = MotionModel::stationary();
        let maps = gaussian_coil_maps(dims, coils).unwrap();
        let plan = Plan::with_defaults(dims).unwrap();
        let cfg = TrajectoryConfig { matrix_dims: dims, ..TrajectoryConfig::default() };
        let traj = density_compensation(&gen_cones_vd(&cfg, 0).unwrap(), &plan, DcfOptions::default()).unwrap();
        let clean = sense_forward(&render_phantom(&scene, 0.0), &maps, &traj, &plan).unwrap();
        let all: Vec<Complex64> = clean.coils.iter().flatten().copied().collect();
        let sigma = sigma_for_snr(&all, snr_db);
        let roi = heart_roi(dims);
        Self { scene, maps, traj, plan, roi, sigma }
    }

    /// Gridded navigator of the phantom translated by `d`, with noise drawn
    /// from stream `stream`.
    pub fn inav(&self, d: [f64; 3], stream: usize) -> ComplexVolume {
        use conesrecon::sim::*;
        let x = render_displaced(&self.scene, &vec![d; self.scene.primitives.len()]);
        let mut y = sense_forward(&x, &self.maps, &self.traj, &self.plan).unwrap();
        let mut rng = noise_rng(self.scene.seed, stream);
        for c in y.coils.iter_mut() {
            add_noise(c, self.sigma, &mut rng);
        }
        conesrecon::recon::gridding_reconstruct(&y, &self.maps, &self.traj, &self.plan).unwrap()
    }
}

/// Twelve noisy heartbeats of displacement fields in which each ROI voxel
/// follows one of five region motions. Returns the fields, the ROI and the
/// true region of every voxel.
pub fn five_region_fields(seed: u64) -> (Vec<conesrecon::motion::DisplacementField>, conesrecon::volume::Mask, Vec<usize>) {
    use conesrecon::volume::{linear_index, Mask};
    use rand::SeedableRng;
    use rand_distr::{Distribution, Normal};
    let dims = [24, 24, 12];
    let roi = Mask::boxed(dims, [12, 12, 6], [10, 10, 5]);
    let region = |x: usize, y: usize, z: usize| -> usize { ((x * 5) / dims[0] + 2 * (y * 2 / dims[1]) + z / 8) % 5 };
    let truth = (0..voxel_count(dims)).map(|i| region(i % dims[0], (i / dims[0]) % dims[1], i / (dims[0] * dims[1]))).collect();
    let motion = [[0.0, 0.0, 1.0], [2.0, 0.0, 0.0], [0.0, -2.0, 0.0], [1.5, 1.5, -1.5], [-2.0, 2.0, 2.0]];
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let noise = Normal::new(0.0, 0.1).unwrap();
    let fields = (0..12)
        .map(|t| {
            let w = (t as f64 * 0.9).sin() + 0.3;
            let mut f = conesrecon::motion::DisplacementField::zeros(dims);
            for [x, y, z] in roi.voxels() {
                let m = motion[region(x, y, z)];
                f.vectors[linear_index(dims, x, y, z)] = std::array::from_fn(|a| m[a] * w + noise.sample(&mut rng));
            }
            f
        })
        .collect();
    (fields, roi, truth)
}

/// Fraction of ROI voxels whose cluster label agrees with the true region
/// under the best many-to-one matching.
pub fn cluster_agreement(labels: &[u8], truth: &[usize], roi: &conesrecon::volume::Mask) -> f64 {
    let regions = truth.iter().max().map_or(0, |m| m + 1);
    let mut votes = vec![vec![0usize; regions]; 256];
    for (i, &on) in roi.data.iter().enumerate() {
        if on {
            votes[labels[i] as usize][truth[i]] += 1;
        }
    }
    let agree: usize = votes.iter().map(|v| v.iter().copied().max().unwrap_or(0)).sum();
    agree as f64 / roi.count() as f64
}
