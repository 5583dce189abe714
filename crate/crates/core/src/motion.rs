//! Global and binned residual motion estimation from a series of iNAVs.
//!
//! Sign convention: an estimate `d` means `frame(r + d) ~ ref(r)`, i.e. the
//! frame is the reference translated by `+d` voxels. Correction therefore
//! translates by `-d`.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{ensure, Error, Result};
use crate::volume::{linear_index, ComplexVolume, Dims, Mask, RealVolume};

pub const DEFAULT_HIST_BINS: usize = 32;
pub const DEFAULT_SEARCH_RADIUS: usize = 5;
pub const DEFAULT_BLOCK: usize = 8;
pub const DEFAULT_BLOCK_SEARCH: usize = 4;
pub const DEFAULT_BINS: usize = 5;
/// Minimum relative drop in block cost, versus no shift, for a block shift
/// to count.
pub const DEFAULT_BLOCK_GATE: f64 = 0.5;
pub const KMEANS_MAX_ITERATIONS: usize = 100;
pub const KMEANS_TOLERANCE: f64 = 1e-6;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct MutualInformation {
    /// In bits.
    pub bits: f64,
    /// Set when either image is constant over the ROI; `bits` is then 0.
    pub degenerate: bool,
}

fn roi_indices(roi: &Mask) -> Result<Vec<usize>> {
    let idx: Vec<usize> = roi.data.iter().enumerate().filter(|(_, &b)| b).map(|(i, _)| i).collect();
    if idx.is_empty() {
        return Err(Error::EmptyRoi);
    }
    Ok(idx)
}

fn check_roi(dims: Dims, roi: &Mask) -> Result<Vec<usize>> {
    if roi.dims != dims {
        return Err(Error::DimMismatch(format!("roi {:?} vs volume {dims:?}", roi.dims)));
    }
    roi_indices(roi)
}

/// Histogram bin of each ROI voxel after min-max scaling, or `None` for a
/// constant image.
fn quantize(mag: &[f64], idx: &[usize], bins: usize) -> Option<Vec<u16>> {
    let (lo, hi) = idx.iter().fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), &i| (lo.min(mag[i]), hi.max(mag[i])));
    if hi <= lo {
        return None;
    }
    let scale = bins as f64 / (hi - lo);
    Some(idx.iter().map(|&i| (((mag[i] - lo) * scale) as usize).min(bins - 1) as u16).collect())
}

fn mi_from_bins(a: &[u16], b: &[u16], bins: usize) -> f64 {
    let mut joint = vec![0u32; bins * bins];
    for (&i, &j) in a.iter().zip(b) {
        joint[i as usize * bins + j as usize] += 1;
    }
    let mut pa = vec![0u32; bins];
    let mut pb = vec![0u32; bins];
    for i in 0..bins {
        for j in 0..bins {
            pa[i] += joint[i * bins + j];
            pb[j] += joint[i * bins + j];
        }
    }
    let n = a.len() as f64;
    let mut mi = 0.0;
    for i in 0..bins {
        for j in 0..bins {
            let c = joint[i * bins + j];
            if c > 0 {
                // Symmetric in (a, b): pa[i] * pb[j] commutes.
                mi += c as f64 / n * (c as f64 * n / (pa[i] as f64 * pb[j] as f64)).log2();
            }
        }
    }
    mi.max(0.0)
}

/// Mutual information of the magnitude images over the ROI.
pub fn mutual_information(a: &ComplexVolume, b: &ComplexVolume, roi: &Mask, hist_bins: usize) -> Result<MutualInformation> {
    ensure(hist_bins >= 8, || format!("hist_bins must be at least 8, got {hist_bins}"))?;
    if a.dims() != b.dims() {
        return Err(Error::DimMismatch(format!("{:?} vs {:?}", a.dims(), b.dims())));
    }
    let idx = check_roi(a.dims(), roi)?;
    let (ma, mb) = (a.magnitude(), b.magnitude());
    match (quantize(&ma.data, &idx, hist_bins), quantize(&mb.data, &idx, hist_bins)) {
        (Some(qa), Some(qb)) => Ok(MutualInformation { bits: mi_from_bins(&qa, &qb, hist_bins), degenerate: false }),
        _ => Ok(MutualInformation { bits: 0.0, degenerate: true }),
    }
}

/// Pairwise MI matrix over frames, diagonal left at zero.
pub fn similarity_matrix(inavs: &[ComplexVolume], roi: &Mask, hist_bins: usize) -> Result<Vec<Vec<f64>>> {
    ensure(hist_bins >= 8, || format!("hist_bins must be at least 8, got {hist_bins}"))?;
    let dims = inavs.first().map(|v| v.dims()).ok_or_else(|| Error::InvalidConfig("no frames".into()))?;
    if let Some(v) = inavs.iter().find(|v| v.dims() != dims) {
        return Err(Error::DimMismatch(format!("frame {:?} vs {dims:?}", v.dims())));
    }
    let idx = check_roi(dims, roi)?;
    let q: Vec<Option<Vec<u16>>> = inavs.par_iter().map(|v| quantize(&v.magnitude().data, &idx, hist_bins)).collect();
    let n = inavs.len();
    let pairs: Vec<(usize, usize)> = (0..n).flat_map(|i| (i + 1..n).map(move |j| (i, j))).collect();
    let vals: Vec<f64> = pairs
        .par_iter()
        .map(|&(i, j)| match (&q[i], &q[j]) {
            (Some(a), Some(b)) => mi_from_bins(a, b, hist_bins),
            _ => 0.0,
        })
        .collect();
    let mut m = vec![vec![0.0; n]; n];
    for (&(i, j), v) in pairs.iter().zip(vals) {
        m[i][j] = v;
        m[j][i] = v;
    }
    Ok(m)
}

/// Frame with the largest MI row sum (diagonal excluded), lowest index on
/// ties.
pub fn select_reference(inavs: &[ComplexVolume], roi: &Mask) -> Result<usize> {
    ensure(inavs.len() >= 2, || format!("need at least 2 frames, got {}", inavs.len()))?;
    let m = similarity_matrix(inavs, roi, DEFAULT_HIST_BINS)?;
    let mut best = (0, f64::NEG_INFINITY);
    for (i, row) in m.iter().enumerate() {
        let s: f64 = row.iter().sum();
        if s > best.1 {
            best = (i, s);
        }
    }
    Ok(best.0)
}

fn shift_in_bounds(dims: Dims, p: [usize; 3], s: [i64; 3]) -> Option<usize> {
    let q = [p[0] as i64 + s[0], p[1] as i64 + s[1], p[2] as i64 + s[2]];
    if (0..3).any(|a| q[a] < 0 || q[a] >= dims[a] as i64) {
        return None;
    }
    Some(linear_index(dims, q[0] as usize, q[1] as usize, q[2] as usize))
}

/// Mean squared difference `frame(r + s) - ref(r)` over `voxels`, with the
/// number of in-bounds voxels.
fn msd(frame: &RealVolume, reference: &RealVolume, voxels: &[[usize; 3]], s: [i64; 3]) -> (f64, usize) {
    let mut acc = 0.0;
    let mut n = 0;
    for &p in voxels {
        if let Some(j) = shift_in_bounds(frame.dims, p, s) {
            let d = frame.data[j] - reference.get(p[0], p[1], p[2]);
            acc += d * d;
            n += 1;
        }
    }
    if n == 0 {
        (f64::INFINITY, 0)
    } else {
        (acc / n as f64, n)
    }
}

/// Exhaustive integer search over `[-r, r]^3`, then optional per-axis
/// parabolic refinement. Ties prefer the smaller shift.
fn search_shift(
    frame: &RealVolume,
    reference: &RealVolume,
    voxels: &[[usize; 3]],
    r: usize,
    subvoxel: bool,
    min_overlap: usize,
) -> Result<([f64; 3], f64, f64)> {
    let r = r as i64;
    let side = (2 * r + 1) as usize;
    let mut costs = vec![f64::INFINITY; side * side * side];
    let at = |s: [i64; 3]| ((s[0] + r) as usize) + side * (((s[1] + r) as usize) + side * ((s[2] + r) as usize));
    let mut best = ([0i64; 3], f64::INFINITY, i64::MAX);
    for sz in -r..=r {
        for sy in -r..=r {
            for sx in -r..=r {
                let s = [sx, sy, sz];
                let (c, n) = msd(frame, reference, voxels, s);
                if n < min_overlap {
                    return Err(Error::InsufficientOverlap(format!("{n} voxels overlap at shift {s:?}")));
                }
                costs[at(s)] = c;
                let mag = sx * sx + sy * sy + sz * sz;
                if c < best.1 || (c == best.1 && mag < best.2) {
                    best = (s, c, mag);
                }
            }
        }
    }
    let s = best.0;
    let mut out = [s[0] as f64, s[1] as f64, s[2] as f64];
    // An exact match needs no refinement; the parabola would only add bias.
    if subvoxel && best.1 > 0.0 {
        for a in 0..3 {
            if s[a].abs() == r {
                continue;
            }
            let (mut lo, mut hi) = (s, s);
            lo[a] -= 1;
            hi[a] += 1;
            let (cm, c0, cp) = (costs[at(lo)], costs[at(s)], costs[at(hi)]);
            let den = cm - 2.0 * c0 + cp;
            if den > 0.0 && den.is_finite() {
                out[a] += (0.5 * (cm - cp) / den).clamp(-0.5, 0.5);
            }
        }
    }
    Ok((out, best.1, costs[at([0; 3])]))
}

/// Translation `d` with `frame(r + d) ~ ref(r)`, found by minimizing the
/// mean squared magnitude difference over the ROI.
pub fn estimate_global_translation(
    frame: &ComplexVolume,
    reference: &ComplexVolume,
    roi: &Mask,
    search_radius: usize,
    subvoxel: bool,
) -> Result<[f64; 3]> {
    global_translation_magnitude(&frame.magnitude(), &reference.magnitude(), roi, search_radius, subvoxel)
}

pub fn global_translation_magnitude(
    frame: &RealVolume,
    reference: &RealVolume,
    roi: &Mask,
    search_radius: usize,
    subvoxel: bool,
) -> Result<[f64; 3]> {
    ensure(search_radius >= 1, || "search radius must be at least 1".into())?;
    if frame.dims != reference.dims {
        return Err(Error::DimMismatch(format!("{:?} vs {:?}", frame.dims, reference.dims)));
    }
    check_roi(frame.dims, roi)?;
    let voxels = roi.voxels();
    let min_overlap = voxels.len().div_ceil(2);
    Ok(search_shift(frame, reference, &voxels, search_radius, subvoxel, min_overlap)?.0)
}

/// Resamples `frame` so that `out(r) = frame(r + d)`, trilinear, zero
/// outside.
pub fn align(frame: &RealVolume, d: [f64; 3]) -> RealVolume {
    let [nx, ny, _] = frame.dims;
    let mut out = RealVolume::zeros(frame.dims);
    for (i, v) in out.data.iter_mut().enumerate() {
        let (x, y, z) = (i % nx, (i / nx) % ny, i / (nx * ny));
        *v = frame.sample_linear([x as f64 + d[0], y as f64 + d[1], z as f64 + d[2]]);
    }
    out
}

/// Per-voxel displacement vectors; zero outside the ROI.
#[derive(Clone, Debug, PartialEq)]
pub struct DisplacementField {
    pub dims: Dims,
    pub vectors: Vec<[f64; 3]>,
}

impl DisplacementField {
    pub fn zeros(dims: Dims) -> Self {
        Self { dims, vectors: vec![[0.0; 3]; crate::volume::voxel_count(dims)] }
    }

    pub fn at(&self, x: usize, y: usize, z: usize) -> [f64; 3] {
        self.vectors[linear_index(self.dims, x, y, z)]
    }
}

/// Block origins and sizes tiling `[lo, hi]` along one axis.
fn tiles(lo: usize, hi: usize, block: usize) -> Vec<(usize, usize)> {
    let mut out = Vec::new();
    let mut o = lo;
    while o <= hi {
        let size = block.min(hi + 1 - o);
        out.push((o, size));
        o += block;
    }
    // Fold a short trailing tile into its neighbour.
    if out.len() > 1 && out.last().unwrap().1 < block / 2 {
        let (_, s) = out.pop().unwrap();
        out.last_mut().unwrap().1 += s;
    }
    out
}

/// Linear interpolation weights between tile centers along one axis.
fn axis_weights(p: usize, centers: &[f64]) -> (usize, usize, f64) {
    let p = p as f64;
    let last = centers.len() - 1;
    if p <= centers[0] {
        return (0, 0, 0.0);
    }
    if p >= centers[last] {
        return (last, last, 0.0);
    }
    let i = centers.iter().rposition(|&c| c <= p).unwrap();
    (i, i + 1, (p - centers[i]) / (centers[i + 1] - centers[i]))
}

/// Replaces blocks that stray from the componentwise median of their 3x3x3
/// block neighbourhood by more than `OUTLIER_VOXELS` on any axis.
fn reject_outlier_blocks(shifts: &[[f64; 3]], nt: [usize; 3]) -> Vec<[f64; 3]> {
    const OUTLIER_VOXELS: f64 = 1.0;
    let mut out = Vec::with_capacity(shifts.len());
    let mut vals = Vec::with_capacity(27);
    for k in 0..nt[2] {
        for j in 0..nt[1] {
            for i in 0..nt[0] {
                let own = shifts[i + nt[0] * (j + nt[1] * k)];
                let med: [f64; 3] = std::array::from_fn(|a| {
                    vals.clear();
                    for kk in k.saturating_sub(1)..(k + 2).min(nt[2]) {
                        for jj in j.saturating_sub(1)..(j + 2).min(nt[1]) {
                            for ii in i.saturating_sub(1)..(i + 2).min(nt[0]) {
                                vals.push(shifts[ii + nt[0] * (jj + nt[1] * kk)][a]);
                            }
                        }
                    }
                    vals.sort_by(f64::total_cmp);
                    let m = vals.len();
                    if m % 2 == 1 {
                        vals[m / 2]
                    } else {
                        0.5 * (vals[m / 2 - 1] + vals[m / 2])
                    }
                });
                out.push(if (0..3).any(|a| (own[a] - med[a]).abs() > OUTLIER_VOXELS) { med } else { own });
            }
        }
    }
    out
}

/// Block-matching displacement field of an aligned frame against the
/// reference, trilinearly interpolated between block centers.
pub fn estimate_displacement_field(
    frame_aligned: &ComplexVolume,
    reference: &ComplexVolume,
    roi: &Mask,
    block: usize,
    search: usize,
) -> Result<DisplacementField> {
    displacement_field_magnitude(&frame_aligned.magnitude(), &reference.magnitude(), roi, block, search, DEFAULT_BLOCK_GATE)
}

pub fn displacement_field_magnitude(
    frame: &RealVolume,
    reference: &RealVolume,
    roi: &Mask,
    block: usize,
    search: usize,
    gate: f64,
) -> Result<DisplacementField> {
    ensure((0.0..1.0).contains(&gate), || format!("block gate {gate} must be in [0, 1)"))?;
    ensure(block >= 4, || format!("block must be at least 4, got {block}"))?;
    ensure(search >= 1, || "block search must be at least 1".into())?;
    if frame.dims != reference.dims {
        return Err(Error::DimMismatch(format!("{:?} vs {:?}", frame.dims, reference.dims)));
    }
    check_roi(frame.dims, roi)?;
    let (lo, hi) = roi.bounding_box().ok_or(Error::EmptyRoi)?;
    if (0..3).any(|a| hi[a] - lo[a] + 1 < block) {
        return Err(Error::InvalidConfig(format!("block {block} exceeds ROI extent {lo:?}..={hi:?}")));
    }
    let t: [Vec<(usize, usize)>; 3] = std::array::from_fn(|a| tiles(lo[a], hi[a], block));
    let centers: [Vec<f64>; 3] = std::array::from_fn(|a| t[a].iter().map(|&(o, s)| o as f64 + (s as f64 - 1.0) / 2.0).collect());
    let nt = [t[0].len(), t[1].len(), t[2].len()];
    let cells: Vec<[usize; 3]> =
        (0..nt[2]).flat_map(|k| (0..nt[1]).flat_map(move |j| (0..nt[0]).map(move |i| [i, j, k]))).collect();
    let shifts: Vec<[f64; 3]> = cells
        .par_iter()
        .map(|c| {
            let (o, s) = ([t[0][c[0]].0, t[1][c[1]].0, t[2][c[2]].0], [t[0][c[0]].1, t[1][c[1]].1, t[2][c[2]].1]);
            let mut voxels = Vec::with_capacity(s[0] * s[1] * s[2]);
            for z in o[2]..o[2] + s[2] {
                for y in o[1]..o[1] + s[1] {
                    for x in o[0]..o[0] + s[0] {
                        voxels.push([x, y, z]);
                    }
                }
            }
            match search_shift(frame, reference, &voxels, search, true, 1) {
                // A shift has to explain a clear share of the mismatch; otherwise
                // aliasing and noise in flat blocks pick arbitrary offsets.
                Ok((d, best, zero)) if zero - best > gate * zero => d,
                _ => [0.0; 3],
            }
        })
        .collect();
    let shifts = reject_outlier_blocks(&shifts, nt);
    let nb = [nt[0], nt[1]];
    let mut field = DisplacementField::zeros(frame.dims);
    for [x, y, z] in roi.voxels() {
        let wx = axis_weights(x, &centers[0]);
        let wy = axis_weights(y, &centers[1]);
        let wz = axis_weights(z, &centers[2]);
        let mut v = [0.0; 3];
        for (iz, fz) in [(wz.0, 1.0 - wz.2), (wz.1, wz.2)] {
            for (iy, fy) in [(wy.0, 1.0 - wy.2), (wy.1, wy.2)] {
                for (ix, fx) in [(wx.0, 1.0 - wx.2), (wx.1, wx.2)] {
                    let f = fx * fy * fz;
                    if f == 0.0 {
                        continue;
                    }
                    let s = shifts[ix + nb[0] * (iy + nb[1] * iz)];
                    for a in 0..3 {
                        v[a] += f * s[a];
                    }
                }
            }
        }
        field.vectors[linear_index(frame.dims, x, y, z)] = v;
    }
    Ok(field)
}

#[derive(Clone, Debug, PartialEq)]
pub struct Clustering {
    /// Per-voxel label in `1..=k` inside the ROI, 0 outside.
    pub labels: Vec<u8>,
    /// `[bin][heartbeat]` mean displacement; zero for empty bins.
    pub residuals: Vec<Vec<[f64; 3]>>,
    pub counts: Vec<usize>,
    /// Within-cluster sum of squares after each assignment step.
    pub wcss: Vec<f64>,
}

impl Clustering {
    /// Number of non-empty bins.
    pub fn effective_k(&self) -> usize {
        self.counts.iter().filter(|&&c| c > 0).count()
    }
}

fn sqdist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

/// k-means++ seeding. Stops early when every remaining point coincides
/// with a chosen center, so fewer than `k` distinct features collapse into
/// fewer clusters.
fn seed_centers(feat: &[f64], dim: usize, k: usize, rng: &mut ChaCha8Rng) -> Vec<Vec<f64>> {
    let n = feat.len() / dim;
    let point = |i: usize| &feat[i * dim..(i + 1) * dim];
    let mut centers = vec![point(rng.random_range(0..n)).to_vec()];
    let mut d2: Vec<f64> = (0..n).map(|i| sqdist(point(i), &centers[0])).collect();
    while centers.len() < k {
        let total: f64 = d2.iter().sum();
        if total <= 0.0 {
            break;
        }
        let mut u = rng.random::<f64>() * total;
        let mut pick = n - 1;
        for (i, &w) in d2.iter().enumerate() {
            if u < w {
                pick = i;
                break;
            }
            u -= w;
        }
        if d2[pick] == 0.0 {
            pick = d2.iter().rposition(|&w| w > 0.0).unwrap();
        }
        let c = point(pick).to_vec();
        for (i, d) in d2.iter_mut().enumerate() {
            *d = d.min(sqdist(point(i), &c));
        }
        centers.push(c);
    }
    centers
}

/// k-means on the ROI voxels' displacement trajectories (all heartbeats
/// concatenated), then per-bin mean displacement per heartbeat.
pub fn cluster_bins(fields: &[DisplacementField], roi: &Mask, k: usize, seed: u64) -> Result<Clustering> {
    ensure(k >= 1 && k <= u8::MAX as usize, || format!("k must be in 1..=255, got {k}"))?;
    let dims = fields.first().map(|f| f.dims).ok_or_else(|| Error::InvalidConfig("no displacement fields".into()))?;
    if fields.iter().any(|f| f.dims != dims) {
        return Err(Error::DimMismatch("displacement fields differ in dims".into()));
    }
    let idx = check_roi(dims, roi)?;
    let hb = fields.len();
    let dim = 3 * hb;
    let mut feat = vec![0.0; idx.len() * dim];
    for (v, &i) in idx.iter().enumerate() {
        for (t, f) in fields.iter().enumerate() {
            feat[v * dim + 3 * t..v * dim + 3 * t + 3].copy_from_slice(&f.vectors[i]);
        }
    }
    let n = idx.len();
    let point = |i: usize| &feat[i * dim..(i + 1) * dim];
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut centers = seed_centers(&feat, dim, k, &mut rng);
    let kk = centers.len();
    let mut assign = vec![0usize; n];
    let mut wcss = Vec::new();
    for _ in 0..KMEANS_MAX_ITERATIONS {
        let mut total = 0.0;
        for (i, a) in assign.iter_mut().enumerate() {
            let mut best = (0, f64::INFINITY);
            for (c, center) in centers.iter().enumerate() {
                let d = sqdist(point(i), center);
                if d < best.1 {
                    best = (c, d);
                }
            }
            *a = best.0;
            total += best.1;
        }
        wcss.push(total);
        let mut sums = vec![vec![0.0; dim]; kk];
        let mut counts = vec![0usize; kk];
        for (i, &a) in assign.iter().enumerate() {
            counts[a] += 1;
            sums[a].iter_mut().zip(point(i)).for_each(|(s, p)| *s += p);
        }
        let mut moved: f64 = 0.0;
        for c in 0..kk {
            if counts[c] == 0 {
                continue;
            }
            let new: Vec<f64> = sums[c].iter().map(|s| s / counts[c] as f64).collect();
            moved = moved.max(sqdist(&new, &centers[c]));
            centers[c] = new;
        }
        if moved < KMEANS_TOLERANCE {
            break;
        }
    }
    let mut counts = vec![0usize; k];
    let mut residuals = vec![vec![[0.0; 3]; hb]; k];
    for (i, &a) in assign.iter().enumerate() {
        counts[a] += 1;
        for t in 0..hb {
            for ax in 0..3 {
                residuals[a][t][ax] += feat[i * dim + 3 * t + ax];
            }
        }
    }
    for (r, &c) in residuals.iter_mut().zip(&counts) {
        if c > 0 {
            r.iter_mut().flatten().for_each(|v| *v /= c as f64);
        }
    }
    let mut labels = vec![0u8; crate::volume::voxel_count(dims)];
    for (&i, &a) in idx.iter().zip(&assign) {
        labels[i] = (a + 1) as u8;
    }
    Ok(Clustering { labels, residuals, counts, wcss })
}

fn pearson(a: &[f64], b: &[f64]) -> Option<f64> {
    let n = a.len() as f64;
    let (ma, mb) = (a.iter().sum::<f64>() / n, b.iter().sum::<f64>() / n);
    let (mut sab, mut saa, mut sbb) = (0.0, 0.0, 0.0);
    for (x, y) in a.iter().zip(b) {
        let (dx, dy) = (x - ma, y - mb);
        sab += dx * dy;
        saa += dx * dx;
        sbb += dy * dy;
    }
    if saa == 0.0 || sbb == 0.0 {
        return None;
    }
    Some((sab / (saa * sbb).sqrt()).clamp(-1.0, 1.0))
}

/// Pearson correlation per axis after mean subtraction; `None` marks a
/// zero-variance axis.
pub fn correlation_report(a: &[[f64; 3]], b: &[[f64; 3]]) -> Result<[Option<f64>; 3]> {
    if a.len() != b.len() {
        return Err(Error::DimMismatch(format!("series lengths {} and {}", a.len(), b.len())));
    }
    ensure(a.len() >= 3, || format!("need at least 3 samples, got {}", a.len()))?;
    Ok(std::array::from_fn(|ax| {
        let sa: Vec<f64> = a.iter().map(|v| v[ax]).collect();
        let sb: Vec<f64> = b.iter().map(|v| v[ax]).collect();
        pearson(&sa, &sb)
    }))
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct MotionConfig {
    pub hist_bins: usize,
    pub search_radius: usize,
    pub subvoxel: bool,
    pub block: usize,
    pub block_search: usize,
    pub block_gate: f64,
    pub bins: usize,
    pub seed: u64,
}

impl Default for MotionConfig {
    fn default() -> Self {
        Self {
            hist_bins: DEFAULT_HIST_BINS,
            search_radius: DEFAULT_SEARCH_RADIUS,
            subvoxel: true,
            block: DEFAULT_BLOCK,
            block_search: DEFAULT_BLOCK_SEARCH,
            block_gate: DEFAULT_BLOCK_GATE,
            bins: DEFAULT_BINS,
            seed: 0,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct MotionEstimates {
    pub reference_index: usize,
    pub global: Vec<[f64; 3]>,
    /// `[bin][heartbeat]` residual translations, not including `global`.
    pub bins: Vec<Vec<[f64; 3]>>,
    pub dims: Dims,
    /// Per-voxel bin label (1-based) inside the ROI, 0 outside.
    pub bin_assignments: Vec<u8>,
}

impl MotionEstimates {
    /// Global-only estimates with zero residuals.
    pub fn global_only(global: Vec<[f64; 3]>, reference_index: usize, n_bins: usize, dims: Dims) -> Self {
        let hb = global.len();
        Self { reference_index, global, bins: vec![vec![[0.0; 3]; hb]; n_bins], dims, bin_assignments: vec![0; crate::volume::voxel_count(dims)] }
    }

    pub fn heartbeats(&self) -> usize {
        self.global.len()
    }

    /// Total translation of bank member `m` (0 = global only) at heartbeat `t`.
    pub fn total(&self, member: usize, t: usize) -> [f64; 3] {
        let g = self.global[t];
        if member == 0 {
            return g;
        }
        let r = self.bins[member - 1][t];
        [g[0] + r[0], g[1] + r[1], g[2] + r[2]]
    }

    pub fn validate(&self) -> Result<()> {
        let hb = self.global.len();
        ensure(hb >= 1, || "no heartbeats".into())?;
        ensure(self.reference_index < hb, || format!("reference {} out of range", self.reference_index))?;
        ensure(self.bins.iter().all(|b| b.len() == hb), || "bin series length differs from global".into())?;
        let half = self.dims.map(|d| d as f64 / 2.0);
        for v in self.global.iter().chain(self.bins.iter().flatten()) {
            for a in 0..3 {
                if !v[a].is_finite() {
                    return Err(Error::NonFinite("motion estimate".into()));
                }
                ensure(v[a].abs() <= half[a], || format!("translation {v:?} exceeds half the FOV"))?;
            }
        }
        Ok(())
    }

    pub fn to_csv(&self) -> String {
        let mut s = String::from("heartbeat,gx,gy,gz");
        for b in 1..=self.bins.len() {
            s.push_str(&format!(",b{b}x,b{b}y,b{b}z"));
        }
        s.push('\n');
        for t in 0..self.global.len() {
            let g = self.global[t];
            s.push_str(&format!("{t},{},{},{}", g[0], g[1], g[2]));
            for b in &self.bins {
                s.push_str(&format!(",{},{},{}", b[t][0], b[t][1], b[t][2]));
            }
            s.push('\n');
        }
        s
    }

    /// Parses [`MotionEstimates::to_csv`] output. The reference index is the
    /// first heartbeat with an exactly zero global translation; dims and bin
    /// assignments are not part of the CSV and come from `dims`.
    pub fn from_csv(text: &str, dims: Dims) -> Result<Self> {
        let bad = |m: String| Error::InvalidConfig(format!("motion csv: {m}"));
        let mut lines = text.lines().filter(|l| !l.trim().is_empty());
        let header: Vec<&str> = lines.next().ok_or_else(|| bad("empty".into()))?.split(',').map(str::trim).collect();
        if header.len() < 4 || header[..4] != ["heartbeat", "gx", "gy", "gz"] || (header.len() - 4) % 3 != 0 {
            return Err(bad(format!("unexpected header {header:?}")));
        }
        let n_bins = (header.len() - 4) / 3;
        for b in 0..n_bins {
            let want = [format!("b{}x", b + 1), format!("b{}y", b + 1), format!("b{}z", b + 1)];
            if header[4 + 3 * b..7 + 3 * b] != want {
                return Err(bad(format!("unexpected bin columns {:?}", &header[4 + 3 * b..7 + 3 * b])));
            }
        }
        let mut global = Vec::new();
        let mut bins = vec![Vec::new(); n_bins];
        for (row, line) in lines.enumerate() {
            let cols: Vec<&str> = line.split(',').map(str::trim).collect();
            if cols.len() != header.len() {
                return Err(bad(format!("row {row} has {} columns", cols.len())));
            }
            if cols[0].parse::<usize>().ok() != Some(row) {
                return Err(bad(format!("row {row} has heartbeat {:?}", cols[0])));
            }
            let vals = cols[1..]
                .iter()
                .map(|c| c.parse::<f64>().map_err(|e| bad(format!("row {row}: {e}"))))
                .collect::<Result<Vec<f64>>>()?;
            global.push([vals[0], vals[1], vals[2]]);
            for (b, series) in bins.iter_mut().enumerate() {
                series.push([vals[3 + 3 * b], vals[4 + 3 * b], vals[5 + 3 * b]]);
            }
        }
        let reference_index = global.iter().position(|g| *g == [0.0; 3]).unwrap_or(0);
        let est = Self { reference_index, global, bins, dims, bin_assignments: vec![0; crate::volume::voxel_count(dims)] };
        est.validate()?;
        Ok(est)
    }
}

/// Full pipeline: reference selection, global translation per frame,
/// residual displacement fields after alignment, k-means bins.
pub fn estimate_motion(inavs: &[ComplexVolume], roi: &Mask, cfg: &MotionConfig) -> Result<MotionEstimates> {
    ensure(inavs.len() >= 2, || format!("need at least 2 frames, got {}", inavs.len()))?;
    let m = similarity_matrix(inavs, roi, cfg.hist_bins)?;
    let reference_index = m
        .iter()
        .map(|row| row.iter().sum::<f64>())
        .enumerate()
        .fold((0, f64::NEG_INFINITY), |best, (i, s)| if s > best.1 { (i, s) } else { best })
        .0;
    let mags: Vec<RealVolume> = inavs.par_iter().map(|v| v.magnitude()).collect();
    let reference = &mags[reference_index];
    let global = mags
        .par_iter()
        .enumerate()
        .map(|(t, f)| {
            if t == reference_index {
                Ok([0.0; 3])
            } else {
                global_translation_magnitude(f, reference, roi, cfg.search_radius, cfg.subvoxel)
            }
        })
        .collect::<Result<Vec<_>>>()?;
    let fields = mags
        .par_iter()
        .zip(&global)
        .map(|(f, g)| displacement_field_magnitude(&align(f, *g), reference, roi, cfg.block, cfg.block_search, cfg.block_gate))
        .collect::<Result<Vec<_>>>()?;
    let c = cluster_bins(&fields, roi, cfg.bins, cfg.seed)?;
    let est = MotionEstimates { reference_index, global, bins: c.residuals, dims: roi.dims, bin_assignments: c.labels };
    est.validate()?;
    Ok(est)
}
