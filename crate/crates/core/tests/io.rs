mod common;

use common::*;
use conesrecon::io::*;
use conesrecon::motion::MotionEstimates;
use conesrecon::trajectory::{density_compensation_default, gen_cones_vd, TrajectoryConfig};
use conesrecon::unrolled::{load_weights, save_weights, UnrolledWeights, WeightsError};
use conesrecon::volume::{ComplexVolume, Mask};
use num_complex::Complex64;
use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn f32_exact(v: &ComplexVolume) -> ComplexVolume {
    ComplexVolume::from_vec(v.dims(), v.data().iter().map(|c| Complex64::new(c.re as f32 as f64, c.im as f32 as f64)).collect()).unwrap()
}

#[test]
fn files_round_trip_through_disk() {
    let dir = tempfile::tempdir().unwrap();
    let dims = [16, 12, 8];
    let cfg = TrajectoryConfig { matrix_dims: dims, readouts_per_interleave: 6, samples_per_readout: 50, ..TrajectoryConfig::default() };
    let traj = density_compensation_default(&gen_cones_vd(&cfg, 3).unwrap(), dims).unwrap();
    let path = dir.path().join("t.ctrj");
    write_atomic(&path, &encode_trajectory(&traj)).unwrap();
    let back = decode_trajectory(&std::fs::read(&path).unwrap()).unwrap();
    assert_eq!(back.heartbeat_index, 3);
    assert_eq!((back.readouts, back.samples), (6, 50));
    for (a, b) in back.coords.iter().zip(&traj.coords) {
        assert!((0..3).all(|i| a[i] == b[i] as f32 as f64));
    }
    assert!(!dir.path().join("t.ctrj.tmp").exists());

    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let v = random_volume(dims, &mut rng);
    let path = dir.path().join("v.cvl");
    write_atomic(&path, &encode_volume(&v)).unwrap();
    assert_eq!(decode_volume(&std::fs::read(&path).unwrap()).unwrap(), f32_exact(&v));

    let m = Mask::boxed(dims, [8, 6, 4], [3, 2, 1]);
    assert_eq!(decode_mask(&encode_mask(&m)).unwrap(), m);
    assert!(matches!(decode_volume(&encode_mask(&m)), Err(FormatError::WrongDtype { .. })));

    let maps = random_maps(dims, 3, &mut rng);
    let back = decode_coil_maps(&encode_coil_maps(&maps)).unwrap();
    for i in 0..v.len() {
        let ss: f64 = back.maps.iter().map(|m| m.data()[i].norm_sqr()).sum();
        assert!((ss - 1.0).abs() < 1e-12);
    }

    let y = random_kspace(2, 3, 7, &mut rng);
    let back = decode_kspace(&encode_kspace(&y)).unwrap();
    assert_eq!((back.n_coils(), back.readouts, back.samples), (2, 3, 7));
}

#[test]
fn weights_round_trip_through_disk() {
    let dir = tempfile::tempdir().unwrap();
    let w = UnrolledWeights::random(3, 2, 8, 0.7, 1.0, 5);
    let path = dir.path().join("w.uwt");
    save_weights(&w, &path).unwrap();
    assert_eq!(load_weights(&path).unwrap(), w);
    let bytes = std::fs::read(&path).unwrap();
    assert!(UnrolledWeights::from_bytes(&bytes[..bytes.len() - 3]).unwrap_err().to_string().contains("it2.proj.b"));
    let mut bad = w.clone();
    bad.iterations[1].blocks[0].conv2.bias.pop();
    assert!(save_weights(&bad, &path).is_err());
    assert_eq!(load_weights(&path).unwrap(), w);
    assert!(matches!(UnrolledWeights::from_bytes(b"UWT2"), Err(WeightsError::BadMagic)));
}

#[test]
fn motion_csv_round_trips() {
    let dims = [8, 8, 8];
    let mut est = MotionEstimates::global_only(vec![[0.5, -1.0, 2.0], [0.0; 3], [1.25, 0.0, -0.5]], 1, 2, dims);
    est.bins[1][2] = [0.1, 0.2, 0.3];
    let back = MotionEstimates::from_csv(&est.to_csv(), dims).unwrap();
    assert_eq!(back.reference_index, 1);
    assert_eq!(back.global, est.global);
    assert_eq!(back.bins, est.bins);
    assert!(MotionEstimates::from_csv("garbage", dims).is_err());
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(32))]

    #[test]
    fn trajectory_round_trip_is_binary32_exact(seed in any::<u64>(), readouts in 1usize..5, samples in 1usize..20, hb in any::<u32>()) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut t = random_trajectory(readouts, samples, &mut rng);
        t.heartbeat_index = hb;
        t.coords.iter_mut().flatten().for_each(|v| *v = *v as f32 as f64);
        let back = decode_trajectory(&encode_trajectory(&t)).unwrap();
        prop_assert_eq!(back, t);
    }

    #[test]
    fn volume_and_labels_round_trip(seed in any::<u64>(), nx in 1usize..6, ny in 1usize..6, nz in 1usize..6) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let v = f32_exact(&random_volume([nx, ny, nz], &mut rng));
        prop_assert_eq!(decode_volume(&encode_volume(&v)).unwrap(), v);
        let labels: Vec<u8> = (0..nx * ny * nz).map(|i| (i % 7) as u8).collect();
        prop_assert_eq!(decode_labels(&encode_labels([nx, ny, nz], &labels)).unwrap(), ([nx, ny, nz], labels));
    }

    #[test]
    fn weights_round_trip_is_bitwise(seed in any::<u64>(), n in 1usize..4, m in 1usize..3, depth in 1usize..6) {
        let w = UnrolledWeights::random(n, m, depth, 0.5, 1.0, seed);
        prop_assert_eq!(UnrolledWeights::from_bytes(&w.to_bytes()).unwrap(), w);
    }

    #[test]
    fn truncation_is_always_an_error(seed in any::<u64>(), cut in 1usize..64) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let t = random_trajectory(2, 4, &mut rng);
        let bytes = encode_trajectory(&t);
        prop_assert!(decode_trajectory(&bytes[..bytes.len() - cut.min(bytes.len())]).is_err());
        let y = encode_kspace(&random_kspace(1, 2, 3, &mut rng));
        prop_assert!(decode_kspace(&y[..y.len() - cut.min(y.len())]).is_err());
        let w = UnrolledWeights::random(1, 1, 2, 1.0, 1.0, seed).to_bytes();
        prop_assert!(UnrolledWeights::from_bytes(&w[..w.len() - cut.min(w.len())]).is_err());
    }
}
