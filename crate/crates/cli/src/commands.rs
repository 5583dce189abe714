use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use conesrecon::autofocus::{autofocus_combine, build_bank, BankRecon};
use conesrecon::encoding::{CoilMaps, MultiCoilKSpace};
use conesrecon::io::*;
use conesrecon::motion::{correlation_report, estimate_motion, MotionConfig, MotionEstimates};
use conesrecon::nufft::Plan;
use conesrecon::recon::{gridding_reconstruct, ista_reconstruct, ReconConfig};
use conesrecon::sim::{heart_roi, render_phantom, simulate_acquisition, AcquisitionSpec, MotionTruth, PhantomScene};
use conesrecon::trajectory::{density_compensation, gen_cones_vd, DcfOptions, Trajectory, TrajectoryConfig};
use conesrecon::unrolled::{load_weights, unrolled_infer, UnrolledWeights};
use conesrecon::volume::{ComplexVolume, Dims, Mask};
use rayon::prelude::*;
use serde::de::DeserializeOwned;
use serde::Serialize;
use serde_json::json;

use crate::output::{sibling, Outputs, Result, Stage};
use crate::*;

pub fn run(cli: &Cli) -> Result<()> {
    let mut out = Outputs::default();
    let r = match &cli.command {
        Command::Simulate(a) => simulate(cli, a, &mut out),
        Command::Traj(a) => traj(cli, a, &mut out),
        Command::Recon(a) => recon(cli, a, &mut out),
        Command::Infer(a) => infer(cli, a, &mut out),
        Command::Motion(a) => motion(cli, a, &mut out),
        Command::Autofocus(a) => autofocus(cli, a, &mut out),
        Command::Bench(a) => bench(cli, a, &mut out),
        Command::Report(a) => report(cli, a, &mut out),
    };
    if r.is_err() {
        out.discard();
    }
    r
}

/// Config file values layered over the defaults, nested objects included.
fn load_config<T: DeserializeOwned + Serialize + Default>(path: Option<&Path>) -> Result<T> {
    let Some(p) = path else { return Ok(T::default()) };
    let text = read_text(p, "config")?;
    let file: serde_json::Value = serde_json::from_str(&text).map_err(|e| format!("{}: {e}", p.display())).stage("config")?;
    let mut merged = serde_json::to_value(T::default()).expect("defaults serialize");
    merge(&mut merged, file);
    serde_json::from_value(merged).map_err(|e| format!("{}: {e}", p.display())).stage("config")
}

fn merge(base: &mut serde_json::Value, over: serde_json::Value) {
    match (base, over) {
        (serde_json::Value::Object(b), serde_json::Value::Object(o)) => {
            for (k, v) in o {
                match b.get_mut(&k) {
                    Some(slot) => merge(slot, v),
                    None => {
                        b.insert(k, v);
                    }
                }
            }
        }
        (slot, v) => *slot = v,
    }
}

fn read(path: &Path, stage: &'static str) -> Result<Vec<u8>> {
    fs::read(path).map_err(|e| format!("{}: {e}", path.display())).stage(stage)
}

fn read_text(path: &Path, stage: &'static str) -> Result<String> {
    fs::read_to_string(path).map_err(|e| format!("{}: {e}", path.display())).stage(stage)
}

fn decode<T, E: std::fmt::Display>(path: &Path, stage: &'static str, f: impl Fn(&[u8]) -> std::result::Result<T, E>) -> Result<T> {
    f(&read(path, stage)?).map_err(|e| format!("{}: {e}", path.display())).stage(stage)
}

/// Effective configuration echoed next to the outputs.
fn sidecar(cli: &Cli, out: &mut Outputs, path: &Path, command: &str, inputs: serde_json::Value, config: impl Serialize) -> Result<()> {
    let doc = json!({
        "command": command,
        "version": env!("CARGO_PKG_VERSION"),
        "seed": cli.seed,
        "threads": rayon::current_num_threads(),
        "inputs": inputs,
        "config": config,
    });
    out.write(path, (serde_json::to_string_pretty(&doc).expect("json") + "\n").as_bytes())
}

fn ista_config(a: &IstaArgs) -> Result<ReconConfig> {
    let mut cfg: ReconConfig = load_config(a.config.as_deref())?;
    if let Some(l) = a.lambda {
        cfg.lambda = l;
    }
    if let Some(n) = a.iters {
        cfg.iterations = n;
    }
    if let Some(s) = a.step {
        cfg.step = s;
    }
    cfg.validate().stage("config")?;
    Ok(cfg)
}

fn hb_name(t: usize, ext: &str) -> String {
    format!("hb{t:03}.{ext}")
}

/// Per-heartbeat trajectories and k-space from an acquisition directory.
fn load_acquisition(dir: &Path) -> Result<Vec<(Trajectory, MultiCoilKSpace)>> {
    let mut hbs = Vec::new();
    while dir.join(hb_name(hbs.len(), "ctrj")).exists() {
        let t = hbs.len();
        let traj = decode(&dir.join(hb_name(t, "ctrj")), "load", decode_trajectory)?;
        let y = decode(&dir.join(hb_name(t, "cks")), "load", decode_kspace)?;
        y.validate_for(&traj).map_err(|e| format!("heartbeat {t}: {e}")).stage("load")?;
        hbs.push((traj, y));
    }
    if hbs.is_empty() {
        return Err("no hb000.ctrj in acquisition directory").stage("load");
    }
    Ok(hbs)
}

fn maps_path(dir: &Path, maps: &Option<PathBuf>) -> PathBuf {
    maps.clone().unwrap_or_else(|| dir.join("maps.cmap"))
}

fn roi_path(dir: &Path, roi: &Option<PathBuf>) -> PathBuf {
    roi.clone().unwrap_or_else(|| dir.join("roi.cvl"))
}

fn load_roi(path: &Path, dims: Dims) -> Result<Mask> {
    let roi = decode(path, "load", decode_mask)?;
    if roi.dims != dims {
        return Err(format!("ROI dims {:?} differ from maps {:?}", roi.dims, dims)).stage("load");
    }
    Ok(roi)
}

fn navigators(hbs: &[(Trajectory, MultiCoilKSpace)], maps: &CoilMaps, plan: &Plan) -> Result<Vec<ComplexVolume>> {
    hbs.par_iter().map(|(t, y)| gridding_reconstruct(y, maps, t, plan)).collect::<conesrecon::Result<Vec<_>>>().stage("navigators")
}

/// All heartbeats as one trajectory with density weights recomputed on the
/// combined sampling, plus per-readout heartbeat labels.
fn concatenated(hbs: &[(Trajectory, MultiCoilKSpace)], plan: &Plan) -> Result<(Trajectory, MultiCoilKSpace, Vec<usize>)> {
    let trajs: Vec<Trajectory> = hbs.iter().map(|h| h.0.clone()).collect();
    let data: Vec<MultiCoilKSpace> = hbs.iter().map(|h| h.1.clone()).collect();
    let labels = hbs.iter().enumerate().flat_map(|(t, h)| std::iter::repeat_n(t, h.0.readouts)).collect();
    let traj = Trajectory::concat(&trajs).stage("bank")?;
    let traj = density_compensation(&traj, plan, DcfOptions::default()).stage("bank")?;
    Ok((traj, MultiCoilKSpace::concat(&data).stage("bank")?, labels))
}

fn simulate(cli: &Cli, a: &SimulateArgs, out: &mut Outputs) -> Result<()> {
    let mut spec: AcquisitionSpec = load_config(a.config.as_deref())?;
    if let Some(h) = a.heartbeats {
        spec.heartbeats = h;
    }
    if let Some(c) = a.coils {
        spec.coils = c;
    }
    if let Some(s) = a.snr {
        spec.snr_db = Some(s);
    }
    let mut scene = match &a.scene {
        Some(p) => PhantomScene::from_json(&read_text(p, "scene")?).stage("scene")?,
        None => PhantomScene::cardiac(spec.trajectory.matrix_dims),
    };
    scene.seed = cli.seed;
    spec.trajectory.matrix_dims = scene.dims;
    let acq = simulate_acquisition(&scene, &spec).stage("simulate")?;

    let dir = &a.out;
    out.dir(dir)?;
    out.write(&dir.join("scene.json"), (scene.to_json() + "\n").as_bytes())?;
    out.write(&dir.join("maps.cmap"), &encode_coil_maps(&acq.maps))?;
    out.write(&dir.join("roi.cvl"), &encode_mask(&heart_roi(scene.dims)))?;
    for (t, hb) in acq.heartbeats.iter().enumerate() {
        out.write(&dir.join(hb_name(t, "ctrj")), &encode_trajectory(&hb.traj))?;
        out.write(&dir.join(hb_name(t, "cks")), &encode_kspace(&hb.kspace))?;
        out.write(&dir.join(format!("truth{t:03}.cvl")), &encode_volume(&render_phantom(&scene, t as f64)))?;
    }
    out.write(&dir.join("motion_truth.csv"), acq.motion.to_csv().as_bytes())?;
    let inputs = json!({ "scene": a.scene, "config": a.config });
    sidecar(cli, out, &dir.join("config.json"), "simulate", inputs, json!({ "acquisition": spec, "noise_sigma": acq.noise_sigma }))
}

fn traj(cli: &Cli, a: &TrajArgs, out: &mut Outputs) -> Result<()> {
    let cfg: TrajectoryConfig = load_config(a.config.as_deref())?;
    let t = gen_cones_vd(&cfg, a.heartbeat).stage("trajectory")?;
    let plan = Plan::with_defaults(cfg.matrix_dims).stage("trajectory")?;
    let t = density_compensation(&t, &plan, DcfOptions::default()).stage("density compensation")?;
    out.write(&a.out, &encode_trajectory(&t))?;
    let config = json!({ "trajectory": cfg, "heartbeat": a.heartbeat, "undersampling": cfg.undersampling_factor() });
    sidecar(cli, out, &sibling(&a.out, "config.json"), "traj", json!({ "config": a.config }), config)
}

struct Single {
    traj: Trajectory,
    y: MultiCoilKSpace,
    maps: CoilMaps,
    plan: Plan,
}

fn load_single(traj: &Path, input: &Path, maps: &Path) -> Result<Single> {
    let traj = decode(traj, "load", decode_trajectory)?;
    let y = decode(input, "load", decode_kspace)?;
    let maps = decode(maps, "load", decode_coil_maps)?;
    let plan = Plan::with_defaults(maps.dims()).stage("load")?;
    Ok(Single { traj, y, maps, plan })
}

fn recon(cli: &Cli, a: &ReconArgs, out: &mut Outputs) -> Result<()> {
    let cfg = ista_config(&a.ista)?;
    let s = load_single(&a.traj, &a.input, &a.maps)?;
    let inputs = json!({ "traj": a.traj, "input": a.input, "maps": a.maps, "config": a.ista.config });
    match a.method {
        Method::Adjoint => {
            let x = gridding_reconstruct(&s.y, &s.maps, &s.traj, &s.plan).stage("recon")?;
            out.write(&a.out, &encode_volume(&x))?;
            sidecar(cli, out, &sibling(&a.out, "config.json"), "recon", inputs, json!({ "method": a.method }))
        }
        Method::Ista => {
            let trace = ista_reconstruct(&s.y, &s.maps, &s.traj, &s.plan, &cfg).stage("recon")?;
            out.write(&a.out, &encode_volume(&trace.x))?;
            out.write(&sibling(&a.out, "objective.csv"), trace.to_csv().as_bytes())?;
            let config = json!({ "method": a.method, "ista": cfg, "step_used": trace.step });
            sidecar(cli, out, &sibling(&a.out, "config.json"), "recon", inputs, config)
        }
    }
}

fn infer(cli: &Cli, a: &InferArgs, out: &mut Outputs) -> Result<()> {
    let s = load_single(&a.traj, &a.input, &a.maps)?;
    let w = load_weights(&a.weights).map_err(|e| format!("{}: {e}", a.weights.display())).stage("load")?;
    let x = unrolled_infer(&s.y, &s.maps, &s.traj, &s.plan, &w).stage("infer")?;
    out.write(&a.out, &encode_volume(&x))?;
    let config = json!({ "iterations": w.n_iterations, "blocks": w.blocks_per_iteration, "filter_depth": w.filter_depth, "alpha": w.alpha });
    let inputs = json!({ "traj": a.traj, "input": a.input, "maps": a.maps, "weights": a.weights });
    sidecar(cli, out, &sibling(&a.out, "config.json"), "infer", inputs, config)
}

fn motion_config(cli: &Cli, config: Option<&Path>, bins: Option<usize>) -> Result<MotionConfig> {
    let mut cfg: MotionConfig = load_config(config)?;
    if let Some(b) = bins {
        cfg.bins = b;
    }
    cfg.seed = cli.seed;
    Ok(cfg)
}

fn motion(cli: &Cli, a: &MotionArgs, out: &mut Outputs) -> Result<()> {
    let cfg = motion_config(cli, a.config.as_deref(), a.bins)?;
    let hbs = load_acquisition(&a.input)?;
    let maps_file = maps_path(&a.input, &a.maps);
    let maps = decode(&maps_file, "load", decode_coil_maps)?;
    let roi_file = roi_path(&a.input, &a.roi);
    let roi = load_roi(&roi_file, maps.dims())?;
    let plan = Plan::with_defaults(maps.dims()).stage("load")?;
    let inavs = navigators(&hbs, &maps, &plan)?;
    let est = estimate_motion(&inavs, &roi, &cfg).stage("motion")?;
    out.write(&a.out, est.to_csv().as_bytes())?;
    out.write(&sibling(&a.out, "labels.cvl"), &encode_labels(est.dims, &est.bin_assignments))?;
    let inputs = json!({ "input": a.input, "maps": maps_file, "roi": roi_file, "config": a.config });
    sidecar(cli, out, &sibling(&a.out, "config.json"), "motion", inputs, json!({ "motion": cfg, "reference_index": est.reference_index }))
}

fn bank_method(method: Method, ista: &IstaArgs) -> Result<BankRecon> {
    Ok(match method {
        Method::Adjoint => BankRecon::Gridding,
        Method::Ista => BankRecon::Ista(ista_config(ista)?),
    })
}

fn autofocus(cli: &Cli, a: &AutofocusArgs, out: &mut Outputs) -> Result<()> {
    let method = bank_method(a.method, &a.ista)?;
    let hbs = load_acquisition(&a.input)?;
    let maps_file = maps_path(&a.input, &a.maps);
    let maps = decode(&maps_file, "load", decode_coil_maps)?;
    let est = MotionEstimates::from_csv(&read_text(&a.motion, "load")?, maps.dims()).stage("load")?;
    let plan = Plan::with_defaults(maps.dims()).stage("load")?;
    let (traj, y, labels) = concatenated(&hbs, &plan)?;
    let bank = build_bank(&y, &traj, &labels, &maps, &plan, &est, &method).stage("bank")?;
    let r = autofocus_combine(&bank, a.patch_radius).stage("autofocus")?;
    out.write(&a.out, &encode_volume(&r.image))?;
    out.write(&sibling(&a.out, "selection.cvl"), &encode_labels(maps.dims(), &r.selection))?;
    out.write(&sibling(&a.out, "histogram.csv"), r.histogram_csv().as_bytes())?;
    let inputs = json!({ "input": a.input, "maps": maps_file, "motion": a.motion });
    let config = json!({ "bank": method, "patch_radius": a.patch_radius, "reference_index": est.reference_index });
    sidecar(cli, out, &sibling(&a.out, "config.json"), "autofocus", inputs, config)
}

fn bench(cli: &Cli, a: &BenchArgs, out: &mut Outputs) -> Result<()> {
    let cfg = ista_config(&a.ista)?;
    let hbs = load_acquisition(&a.input)?;
    let maps_file = maps_path(&a.input, &a.maps);
    let maps = decode(&maps_file, "load", decode_coil_maps)?;
    let weights = match &a.weights {
        Some(p) => load_weights(p).map_err(|e| format!("{}: {e}", p.display())).stage("load")?,
        None => UnrolledWeights::random(4, 2, 64, 1.0, 1.0, cli.seed),
    };
    let plan = Plan::with_defaults(maps.dims()).stage("load")?;
    let (traj, y) = &hbs[0];
    let threads = rayon::current_num_threads();
    let mut rows = vec![];
    let mut time = |stage: &str, f: &mut dyn FnMut() -> Result<()>| -> Result<()> {
        let t = Instant::now();
        f()?;
        rows.push(format!("{stage},{},{threads}", t.elapsed().as_secs_f64()));
        Ok(())
    };
    let mut dcf_traj = None;
    time("dcf", &mut || {
        dcf_traj = Some(density_compensation(traj, &plan, DcfOptions::default()).stage("dcf")?);
        Ok(())
    })?;
    time("adjoint", &mut || gridding_reconstruct(y, &maps, traj, &plan).map(drop).stage("adjoint"))?;
    time("ista", &mut || ista_reconstruct(y, &maps, traj, &plan, &cfg).map(drop).stage("ista"))?;
    time("infer", &mut || unrolled_infer(y, &maps, traj, &plan, &weights).map(drop).stage("infer"))?;
    let roi_file = roi_path(&a.input, &a.roi);
    if hbs.len() >= 2 && roi_file.exists() {
        let roi = load_roi(&roi_file, maps.dims())?;
        let mcfg = motion_config(cli, None, None)?;
        let mut est = None;
        time("navigators+motion", &mut || {
            let inavs = navigators(&hbs, &maps, &plan)?;
            est = Some(estimate_motion(&inavs, &roi, &mcfg).stage("motion")?);
            Ok(())
        })?;
        let est = est.expect("timed");
        let mut bank = None;
        time("bank", &mut || {
            let (t, k, labels) = concatenated(&hbs, &plan)?;
            bank = Some(build_bank(&k, &t, &labels, &maps, &plan, &est, &BankRecon::Gridding).stage("bank")?);
            Ok(())
        })?;
        let bank = bank.expect("timed");
        time("autofocus", &mut || autofocus_combine(&bank, conesrecon::autofocus::DEFAULT_PATCH_RADIUS).map(drop).stage("autofocus"))?;
    }
    let csv = std::iter::once("stage,seconds,threads".to_string()).chain(rows).collect::<Vec<_>>().join("\n") + "\n";
    out.write(&a.out, csv.as_bytes())?;
    let inputs = json!({ "input": a.input, "maps": maps_file, "weights": a.weights });
    let config = json!({ "ista": cfg, "network": { "iterations": weights.n_iterations, "blocks": weights.blocks_per_iteration, "filter_depth": weights.filter_depth } });
    sidecar(cli, out, &sibling(&a.out, "config.json"), "bench", inputs, config)
}

fn fmt_corr(r: Option<f64>) -> String {
    r.map(|v| v.to_string()).unwrap_or_default()
}

fn report(cli: &Cli, a: &ReportArgs, out: &mut Outputs) -> Result<()> {
    let truth = MotionTruth::from_csv(&read_text(&a.input.join("motion_truth.csv"), "load")?).stage("load")?;
    let scene = PhantomScene::from_json(&read_text(&a.input.join("scene.json"), "load")?).stage("load")?;
    let est = MotionEstimates::from_csv(&read_text(&a.motion, "load")?, scene.dims).stage("load")?;
    if est.heartbeats() != truth.global.len() {
        return Err(format!("{} estimated heartbeats vs {} simulated", est.heartbeats(), truth.global.len())).stage("report");
    }
    let reference = truth.as_estimates(est.reference_index, scene.dims).stage("report")?;
    let series = |e: &MotionEstimates, m: usize| -> Vec<[f64; 3]> { (0..e.heartbeats()).map(|t| e.total(m, t)).collect() };

    let mut corr = String::from("estimate,truth,axis,pearson\n");
    for m in 0..=est.bins.len() {
        for g in 0..=reference.bins.len() {
            let r = correlation_report(&series(&est, m), &series(&reference, g)).stage("report")?;
            for (axis, v) in ["x", "y", "z"].iter().zip(r) {
                corr.push_str(&format!("{m},{g},{axis},{}\n", fmt_corr(v)));
            }
        }
    }
    let mut long = String::from("heartbeat,source,member,axis,value\n");
    for (source, e) in [("estimate", &est), ("truth", &reference)] {
        for m in 0..=e.bins.len() {
            for (t, d) in series(e, m).iter().enumerate() {
                for (axis, v) in ["x", "y", "z"].iter().zip(d) {
                    long.push_str(&format!("{t},{source},{m},{axis},{v}\n"));
                }
            }
        }
    }
    out.dir(&a.out)?;
    out.write(&a.out.join("correlation.csv"), corr.as_bytes())?;
    out.write(&a.out.join("motion_long.csv"), long.as_bytes())?;
    if let Some(h) = &a.histogram {
        let text = read_text(h, "load")?;
        let mut lines = text.lines();
        if lines.next() != Some("bin,count,fraction") {
            return Err(format!("{}: not an autofocus histogram", h.display())).stage("report");
        }
        let mut hist = String::from("member,count,fraction\n");
        for line in lines.filter(|l| !l.is_empty()) {
            let f: Vec<&str> = line.split(',').collect();
            let ok = f.len() == 3 && f[0].parse::<usize>().is_ok() && f[1].parse::<usize>().is_ok() && f[2].parse::<f64>().is_ok();
            if !ok {
                return Err(format!("{}: bad row {line:?}", h.display())).stage("report");
            }
            hist.push_str(&format!("{},{},{}\n", f[0], f[1], f[2]));
        }
        out.write(&a.out.join("histogram_long.csv"), hist.as_bytes())?;
    }
    let inputs = json!({ "input": a.input, "motion": a.motion, "histogram": a.histogram });
    sidecar(cli, out, &a.out.join("config.json"), "report", inputs, json!({ "reference_index": est.reference_index }))
}
