use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use conesrecon::io::{decode_coil_maps, decode_kspace, decode_labels, decode_mask, decode_trajectory, decode_volume};
use conesrecon::motion::MotionEstimates;
use conesrecon::unrolled::{save_weights, UnrolledWeights};
use tempfile::TempDir;

fn bin() -> Command {
    let mut c = Command::new(env!("CARGO_BIN_EXE_conesrecon"));
    c.env_remove("CONESRECON_THREADS");
    c
}

fn run(args: &[&str]) -> Output {
    bin().args(args).output().unwrap()
}

fn ok(args: &[&str]) -> Output {
    let o = run(args);
    assert!(o.status.success(), "{args:?}: {}", String::from_utf8_lossy(&o.stderr));
    o
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

fn listing(dir: &Path) -> Vec<String> {
    let mut v: Vec<String> = fs::read_dir(dir).unwrap().map(|e| e.unwrap().file_name().to_string_lossy().into_owned()).collect();
    v.sort();
    v
}

/// Small simulated acquisition in `tmp/acq`.
fn acquisition(tmp: &Path) -> PathBuf {
    let cfg = tmp.join("sim.json");
    fs::write(&cfg, r#"{"heartbeats":4,"coils":2,"snr_db":20,"trajectory":{"matrix_dims":[32,32,16]}}"#).unwrap();
    let acq = tmp.join("acq");
    ok(&["--threads", "1", "simulate", "--config", s(&cfg), "--out", s(&acq)]);
    acq
}

#[test]
fn simulate_writes_a_decodable_acquisition() {
    let tmp = TempDir::new().unwrap();
    let acq = acquisition(tmp.path());
    let files = listing(&acq);
    for f in ["config.json", "maps.cmap", "motion_truth.csv", "roi.cvl", "scene.json", "hb003.ctrj", "hb003.cks", "truth003.cvl"] {
        assert!(files.contains(&f.to_string()), "missing {f}: {files:?}");
    }
    assert!(!files.contains(&"hb004.ctrj".to_string()));
    let maps = decode_coil_maps(&fs::read(acq.join("maps.cmap")).unwrap()).unwrap();
    assert_eq!(maps.dims(), [32, 32, 16]);
    let traj = decode_trajectory(&fs::read(acq.join("hb001.ctrj")).unwrap()).unwrap();
    let y = decode_kspace(&fs::read(acq.join("hb001.cks")).unwrap()).unwrap();
    y.validate_for(&traj).unwrap();
    assert_eq!(decode_mask(&fs::read(acq.join("roi.cvl")).unwrap()).unwrap().dims, [32, 32, 16]);
    // A nested partial config keeps the acquisition's rotation default.
    let sidecar: serde_json::Value = serde_json::from_str(&fs::read_to_string(acq.join("config.json")).unwrap()).unwrap();
    let rot = sidecar["config"]["acquisition"]["trajectory"]["rotation_per_heartbeat_deg"].as_f64().unwrap();
    assert!(rot > 100.0, "rotation {rot}");
}

#[test]
fn ista_recon_writes_volume_and_objective() {
    let tmp = TempDir::new().unwrap();
    let acq = acquisition(tmp.path());
    let out = tmp.path().join("x.cvl");
    ok(&[
        "recon", "--traj", s(&acq.join("hb000.ctrj")), "--input", s(&acq.join("hb000.cks")), "--maps", s(&acq.join("maps.cmap")),
        "--method", "ista", "--lambda", "0.05", "--iters", "50", "--out", s(&out),
    ]);
    let x = decode_volume(&fs::read(&out).unwrap()).unwrap();
    assert_eq!(x.dims(), [32, 32, 16]);
    let csv = fs::read_to_string(tmp.path().join("x.objective.csv")).unwrap();
    let rows: Vec<&str> = csv.lines().collect();
    assert_eq!(rows[0], "iteration,data_term,reg_term,total");
    assert_eq!(rows.len(), 52);
    let totals: Vec<f64> = rows[1..].iter().map(|r| r.rsplit(',').next().unwrap().parse().unwrap()).collect();
    assert!(totals.windows(2).all(|w| w[1] <= w[0] * (1.0 + 1e-9)));
    let cfg: serde_json::Value = serde_json::from_str(&fs::read_to_string(tmp.path().join("x.config.json")).unwrap()).unwrap();
    assert_eq!(cfg["config"]["ista"]["lambda"].as_f64(), Some(0.05));
}

#[test]
fn outputs_are_byte_identical_across_runs() {
    let tmp = TempDir::new().unwrap();
    let acq = acquisition(tmp.path());
    let again = tmp.path().join("again");
    let cfg = tmp.path().join("sim.json");
    ok(&["--threads", "1", "simulate", "--config", s(&cfg), "--out", s(&again)]);
    for f in listing(&acq) {
        assert_eq!(fs::read(acq.join(&f)).unwrap(), fs::read(again.join(&f)).unwrap(), "{f}");
    }
    let mut outs = Vec::new();
    for name in ["a.cvl", "b.cvl"] {
        let out = tmp.path().join(name);
        ok(&[
            "--threads", "1", "recon", "--traj", s(&acq.join("hb002.ctrj")), "--input", s(&acq.join("hb002.cks")),
            "--maps", s(&acq.join("maps.cmap")), "--iters", "5", "--out", s(&out),
        ]);
        outs.push(fs::read(out).unwrap());
    }
    assert_eq!(outs[0], outs[1]);
}

#[test]
fn usage_errors_exit_2_without_writing() {
    let tmp = TempDir::new().unwrap();
    let out = tmp.path().join("t.ctrj");
    assert_eq!(run(&["traj", "--out", s(&out), "--bogus"]).status.code(), Some(2));
    assert_eq!(run(&["recon", "--method", "nope", "--traj", "a", "--input", "b", "--maps", "c", "--out", s(&out)]).status.code(), Some(2));
    assert_eq!(run(&["--threads", "0", "traj", "--out", s(&out)]).status.code(), Some(2));
    let env_zero = bin().env("CONESRECON_THREADS", "0").args(["traj", "--out", s(&out)]).output().unwrap();
    assert_eq!(env_zero.status.code(), Some(2));
    assert!(listing(tmp.path()).is_empty());
    assert_eq!(run(&["--help"]).status.code(), Some(0));
}

#[test]
fn threads_fall_back_to_the_environment() {
    let tmp = TempDir::new().unwrap();
    let out = tmp.path().join("t.ctrj");
    let o = bin().env("CONESRECON_THREADS", "2").args(["traj", "--out", s(&out)]).output().unwrap();
    assert!(o.status.success());
    let cfg: serde_json::Value = serde_json::from_str(&fs::read_to_string(tmp.path().join("t.config.json")).unwrap()).unwrap();
    assert_eq!(cfg["threads"].as_u64(), Some(2));
    decode_trajectory(&fs::read(out).unwrap()).unwrap();
}

#[test]
fn runtime_failures_exit_1_and_remove_partial_outputs() {
    let tmp = TempDir::new().unwrap();
    let acq = acquisition(tmp.path());
    let out = tmp.path().join("x.cvl");
    let o = run(&[
        "recon", "--traj", s(&acq.join("missing.ctrj")), "--input", s(&acq.join("hb000.cks")), "--maps", s(&acq.join("maps.cmap")), "--out", s(&out),
    ]);
    assert_eq!(o.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&o.stderr).contains("load failed"));

    // Corrupt weights are detected after nothing has been written.
    let bad = tmp.path().join("bad.uwt");
    fs::write(&bad, b"UWT1garbage").unwrap();
    let o = run(&[
        "infer", "--traj", s(&acq.join("hb000.ctrj")), "--input", s(&acq.join("hb000.cks")), "--maps", s(&acq.join("maps.cmap")),
        "--weights", s(&bad), "--out", s(&out),
    ]);
    assert_eq!(o.status.code(), Some(1));

    // A report whose directory has no truth fails after creating its output directory.
    let report = tmp.path().join("report");
    let motion = tmp.path().join("m.csv");
    ok(&["motion", "--input", s(&acq), "--out", s(&motion)]);
    fs::remove_file(acq.join("motion_truth.csv")).unwrap();
    let o = run(&["report", "--input", s(&acq), "--motion", s(&motion), "--out", s(&report)]);
    assert_eq!(o.status.code(), Some(1));
    assert!(!report.exists());
    assert!(!out.exists());
    assert!(!tmp.path().join("x.config.json").exists());
}

#[test]
fn infer_runs_saved_weights() {
    let tmp = TempDir::new().unwrap();
    let acq = acquisition(tmp.path());
    let w = tmp.path().join("w.uwt");
    save_weights(&UnrolledWeights::random(2, 1, 4, 0.5, 0.1, 3), &w).unwrap();
    let out = tmp.path().join("net.cvl");
    ok(&[
        "infer", "--traj", s(&acq.join("hb000.ctrj")), "--input", s(&acq.join("hb000.cks")), "--maps", s(&acq.join("maps.cmap")),
        "--weights", s(&w), "--out", s(&out),
    ]);
    let x = decode_volume(&fs::read(out).unwrap()).unwrap();
    assert!(x.norm() > 0.0 && x.norm().is_finite());
}

#[test]
fn motion_autofocus_report_bench_pipeline() {
    let tmp = TempDir::new().unwrap();
    let p = tmp.path();
    let acq = acquisition(p);
    let motion = p.join("m.csv");
    ok(&["motion", "--input", s(&acq), "--bins", "2", "--out", s(&motion)]);
    let est = MotionEstimates::from_csv(&fs::read_to_string(&motion).unwrap(), [32, 32, 16]).unwrap();
    assert_eq!(est.global.len(), 4);
    assert_eq!(decode_labels(&fs::read(p.join("m.labels.cvl")).unwrap()).unwrap().0, [32, 32, 16]);

    let af = p.join("af.cvl");
    ok(&["autofocus", "--input", s(&acq), "--motion", s(&motion), "--out", s(&af)]);
    decode_volume(&fs::read(&af).unwrap()).unwrap();
    let (sel_dims, selection) = decode_labels(&fs::read(p.join("af.selection.cvl")).unwrap()).unwrap();
    assert_eq!(sel_dims, [32, 32, 16]);
    assert!(selection.iter().all(|&m| (m as usize) <= est.bins.len()));
    let hist = fs::read_to_string(p.join("af.histogram.csv")).unwrap();
    assert_eq!(hist.lines().next(), Some("bin,count,fraction"));
    let fractions: f64 = hist.lines().skip(1).map(|l| l.rsplit(',').next().unwrap().parse::<f64>().unwrap()).sum();
    assert!((fractions - 1.0).abs() < 1e-9);

    let report = p.join("report");
    ok(&["report", "--input", s(&acq), "--motion", s(&motion), "--histogram", s(&p.join("af.histogram.csv")), "--out", s(&report)]);
    assert_eq!(listing(&report), ["config.json", "correlation.csv", "histogram_long.csv", "motion_long.csv"]);
    let corr = fs::read_to_string(report.join("correlation.csv")).unwrap();
    assert_eq!(corr.lines().next(), Some("estimate,truth,axis,pearson"));

    let bench = p.join("bench.csv");
    ok(&["--threads", "1", "bench", "--input", s(&acq), "--iters", "3", "--out", s(&bench)]);
    let csv = fs::read_to_string(bench).unwrap();
    let stages: Vec<&str> = csv.lines().skip(1).map(|l| l.split(',').next().unwrap()).collect();
    assert_eq!(stages, ["dcf", "adjoint", "ista", "infer", "navigators+motion", "bank", "autofocus"]);
    for l in csv.lines().skip(1) {
        let f: Vec<&str> = l.split(',').collect();
        assert!(f[1].parse::<f64>().unwrap() >= 0.0);
        assert_eq!(f[2], "1");
    }
}
