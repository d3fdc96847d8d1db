//! Diagnostics: energy distance, network recovery, fixed points, flow
//! similarity, and in-silico knockdowns.

use nalgebra::{DMatrix, DVector};
use rand::Rng as _;
use serde::{Deserialize, Serialize};

use crate::error::{PfiError, Result};
use crate::gaussian::PointCloud;
use crate::linalg::spectral_abscissa;
use crate::par;
use crate::rng::{stream, Purpose};
use crate::srn::cle::{sde_simulate, DiffusionProcess, SdeOptions};

fn mean_pairwise(a: &PointCloud, b: &PointCloud) -> f64 {
    let rows = par::map_range(a.ncols(), |i| {
        let x = a.column(i);
        par::kahan_sum(b.column_iter().map(|y| (x - y).norm()))
    });
    par::kahan_sum(rows) / (a.ncols() * b.ncols()) as f64
}

/// Squared energy distance `2E‖X−Y‖ − E‖X−X′‖ − E‖Y−Y′‖` (all-pairs
/// V-statistic).
pub fn energy_distance_sq(a: &PointCloud, b: &PointCloud) -> f64 {
    assert!(a.ncols() > 0 && b.ncols() > 0, "clouds must be nonempty");
    assert_eq!(a.nrows(), b.nrows());
    2.0 * mean_pairwise(a, b) - mean_pairwise(a, a) - mean_pairwise(b, b)
}

pub fn energy_distance(a: &PointCloud, b: &PointCloud) -> f64 {
    energy_distance_sq(a, b).max(0.0).sqrt()
}

/// Signed adjacency: +1 activation, -1 inhibition, 0 absent; `truth[i][j]`
/// is the effect of j on i.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct GroundTruthNetwork {
    pub adjacency: Vec<Vec<i8>>,
}

impl GroundTruthNetwork {
    pub fn positives(&self) -> usize {
        self.adjacency.iter().flatten().filter(|&&v| v != 0).count()
    }

    pub fn dim(&self) -> usize {
        self.adjacency.len()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PrCurve {
    pub recall: Vec<f64>,
    pub precision: Vec<f64>,
    pub auc: f64,
    /// Set when the estimate carries no ranking information.
    pub degenerate: bool,
}

/// Ranks all d² entries by |Ĵ_ij|; a prediction is correct when the true
/// edge exists with the same sign. Tied magnitudes enter as one step.
pub fn grn_pr_auc(jac: &DMatrix<f64>, truth: &GroundTruthNetwork) -> PrCurve {
    let d = truth.dim();
    assert_eq!(jac.shape(), (d, d));
    let pos = truth.positives();
    let prevalence = pos as f64 / (d * d) as f64;
    if pos == 0 {
        return PrCurve { recall: vec![], precision: vec![], auc: f64::NAN, degenerate: true };
    }
    if jac.iter().all(|v| *v == 0.0) {
        return PrCurve { recall: vec![0.0, 1.0], precision: vec![prevalence; 2], auc: prevalence, degenerate: true };
    }
    let mut entries: Vec<(f64, bool)> = (0..d)
        .flat_map(|i| (0..d).map(move |j| (i, j)))
        .map(|(i, j)| {
            let t = truth.adjacency[i][j];
            let v = jac[(i, j)];
            let hit = t != 0 && v != 0.0 && (v > 0.0) == (t > 0);
            (v.abs(), hit)
        })
        .collect();
    entries.sort_by(|a, b| b.0.total_cmp(&a.0));
    let mut recall = Vec::new();
    let mut precision = Vec::new();
    let (mut tp, mut k) = (0usize, 0usize);
    let mut idx = 0;
    while idx < entries.len() {
        let mag = entries[idx].0;
        while idx < entries.len() && entries[idx].0 == mag {
            k += 1;
            tp += entries[idx].1 as usize;
            idx += 1;
        }
        recall.push(tp as f64 / pos as f64);
        precision.push(tp as f64 / k as f64);
    }
    let mut auc = 0.0;
    let (mut r0, mut p0) = (0.0, precision[0]);
    for (&r, &p) in recall.iter().zip(&precision) {
        auc += (r - r0) * 0.5 * (p + p0);
        r0 = r;
        p0 = p;
    }
    PrCurve { recall, precision, auc, degenerate: false }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FixedPointConfig {
    pub dt: f64,
    pub t_max: f64,
    pub tol: f64,
    /// Merge radius relative to the spread of the initial cloud.
    pub merge_rel: f64,
}

impl Default for FixedPointConfig {
    fn default() -> Self {
        FixedPointConfig { dt: 0.01, t_max: 200.0, tol: 1e-8, merge_rel: 1e-3 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FixedPoint {
    pub x: Vec<f64>,
    pub basin_count: usize,
    /// Largest real part of the Jacobian eigenvalues.
    pub max_real_eig: f64,
    pub stable: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FixedPointReport {
    pub points: Vec<FixedPoint>,
    pub nonconverged: usize,
}

fn rk4_step(v: &(dyn Fn(&DVector<f64>) -> DVector<f64> + Sync), x: &DVector<f64>, h: f64) -> DVector<f64> {
    let k1 = v(x);
    let k2 = v(&(x + &k1 * (h / 2.0)));
    let k3 = v(&(x + &k2 * (h / 2.0)));
    let k4 = v(&(x + &k3 * h));
    x + (k1 + k2 * 2.0 + k3 * 2.0 + k4) * (h / 6.0)
}

fn fd_jacobian(v: &(dyn Fn(&DVector<f64>) -> DVector<f64> + Sync), x: &DVector<f64>) -> DMatrix<f64> {
    let d = x.len();
    let mut j = DMatrix::zeros(d, d);
    for c in 0..d {
        let h = 1e-6 * (1.0 + x[c].abs());
        let mut xp = x.clone();
        let mut xm = x.clone();
        xp[c] += h;
        xm[c] -= h;
        j.set_column(c, &((v(&xp) - v(&xm)) / (2.0 * h)));
    }
    j
}

/// Integrates `dx/dt = v(x)` from every column of `init` until
/// `‖v‖ < tol`, then merges endpoints. `v` is the full deterministic
/// velocity (force including any degradation term).
pub fn find_fixed_points(
    v: &(dyn Fn(&DVector<f64>) -> DVector<f64> + Sync),
    init: &PointCloud,
    cfg: FixedPointConfig,
) -> FixedPointReport {
    let ends = par::map_range(init.ncols(), |j| {
        let mut x: DVector<f64> = init.column(j).into_owned();
        let mut t = 0.0;
        while t < cfg.t_max {
            if v(&x).norm() < cfg.tol {
                return Some(x);
            }
            x = rk4_step(v, &x, cfg.dt);
            if x.iter().any(|c| !c.is_finite()) {
                return None;
            }
            t += cfg.dt;
        }
        (v(&x).norm() < cfg.tol).then_some(x)
    });
    let nonconverged = ends.iter().filter(|e| e.is_none()).count();
    let mut pts: Vec<DVector<f64>> = ends.into_iter().flatten().collect();
    pts.sort_by(|a, b| a.iter().zip(b.iter()).map(|(x, y)| x.total_cmp(y)).find(|o| o.is_ne()).unwrap_or(std::cmp::Ordering::Equal));
    let spread = (0..init.nrows())
        .map(|i| {
            let r = init.row(i);
            r.max() - r.min()
        })
        .fold(0.0, f64::max)
        .max(1.0);
    let radius = cfg.merge_rel * spread;
    let mut clusters: Vec<(DVector<f64>, usize)> = Vec::new();
    for p in pts {
        match clusters.iter_mut().find(|(c, _)| (c.clone() - &p).norm() <= radius) {
            Some((_, n)) => *n += 1,
            None => clusters.push((p, 1)),
        }
    }
    let points = clusters
        .into_iter()
        .map(|(x, basin_count)| {
            let re = spectral_abscissa(&fd_jacobian(v, &x));
            FixedPoint { x: x.iter().copied().collect(), basin_count, max_real_eig: re, stable: re < 0.0 }
        })
        .collect();
    FixedPointReport { points, nonconverged }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CosineResult {
    pub mean: f64,
    pub excluded: usize,
}

/// Mean cosine similarity between two velocity fields on each cloud.
pub fn flowline_cosine(
    flow_a: &dyn Fn(&PointCloud) -> PointCloud,
    flow_b: &dyn Fn(&PointCloud) -> PointCloud,
    clouds: &[PointCloud],
) -> Vec<CosineResult> {
    clouds
        .iter()
        .map(|c| {
            let (va, vb) = (flow_a(c), flow_b(c));
            let mut sum = 0.0;
            let mut used = 0usize;
            for (a, b) in va.column_iter().zip(vb.column_iter()) {
                let (na, nb) = (a.norm(), b.norm());
                if na < 1e-12 || nb < 1e-12 {
                    continue;
                }
                sum += a.dot(&b) / (na * nb);
                used += 1;
            }
            CosineResult { mean: if used > 0 { sum / used as f64 } else { f64::NAN }, excluded: c.ncols() - used }
        })
        .collect()
}

/// Lloyd's algorithm with k-means++ seeding. Returns (centroids d×k, labels).
pub fn kmeans(x: &PointCloud, k: usize, seed: u64, max_iter: usize) -> (DMatrix<f64>, Vec<usize>) {
    let (d, n) = x.shape();
    assert!(k >= 1 && n >= k, "need at least k points");
    let mut rng = stream(seed, Purpose::Evaluation, 0);
    let mut cent = DMatrix::zeros(d, k);
    cent.set_column(0, &x.column(rng.gen_range(0..n)));
    let mut dist2 = vec![f64::INFINITY; n];
    for c in 1..k {
        for j in 0..n {
            dist2[j] = dist2[j].min((x.column(j) - cent.column(c - 1)).norm_squared());
        }
        let total: f64 = dist2.iter().sum();
        let mut target = rng.gen::<f64>() * total;
        let mut pick = n - 1;
        for (j, w) in dist2.iter().enumerate() {
            if target < *w {
                pick = j;
                break;
            }
            target -= w;
        }
        cent.set_column(c, &x.column(pick));
    }
    let mut labels = vec![0usize; n];
    for _ in 0..max_iter {
        let new: Vec<usize> = (0..n)
            .map(|j| {
                (0..k)
                    .min_by(|&a, &b| {
                        (x.column(j) - cent.column(a)).norm_squared().total_cmp(&(x.column(j) - cent.column(b)).norm_squared())
                    })
                    .expect("k >= 1")
            })
            .collect();
        let changed = new != labels;
        labels = new;
        for c in 0..k {
            let members: Vec<usize> = (0..n).filter(|&j| labels[j] == c).collect();
            if !members.is_empty() {
                let mut s = DVector::zeros(d);
                for &j in &members {
                    s += x.column(j);
                }
                cent.set_column(c, &(s / members.len() as f64));
            }
        }
        if !changed {
            break;
        }
    }
    (cent, labels)
}

/// Reference expression profile of one cell type.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CellTypeProfile {
    pub name: String,
    pub profile: Vec<f64>,
}

/// Clusters `cloud` with k-means and names each centroid after the lineage
/// whose marker genes it expresses most (z-scored across centroids), using
/// the one-to-one assignment with the largest total score. Clusters left
/// without a lineage are named `cluster<k>`.
pub fn reference_profiles(
    cloud: &PointCloud,
    k: usize,
    seed: u64,
    species: &[String],
    lineages: &[(&str, &[&str])],
) -> Result<Vec<CellTypeProfile>> {
    let (centroids, _) = kmeans(cloud, k, seed, 300);
    let d = centroids.nrows();
    let mut z = centroids.clone();
    for g in 0..d {
        let row = centroids.row(g);
        let mean = row.mean();
        let sd = (row.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / k as f64).sqrt().max(1e-12);
        for c in 0..k {
            z[(g, c)] = (centroids[(g, c)] - mean) / sd;
        }
    }
    let mut score = vec![vec![0.0; k]; lineages.len()];
    for (li, (_, markers)) in lineages.iter().enumerate() {
        let idx: Vec<usize> = markers
            .iter()
            .map(|m| {
                species
                    .iter()
                    .position(|s| s == m)
                    .ok_or_else(|| PfiError::InvalidParameter(format!("marker gene '{m}' not in dataset")))
            })
            .collect::<Result<_>>()?;
        for c in 0..k {
            score[li][c] = idx.iter().map(|&g| z[(g, c)]).sum::<f64>() / idx.len() as f64;
        }
    }
    // Exhaustive search over injective lineage → cluster maps (small k).
    fn search(li: usize, used: &mut Vec<bool>, cur: &mut Vec<usize>, score: &[Vec<f64>], best: &mut (f64, Vec<usize>)) {
        if li == score.len() {
            let total: f64 = cur.iter().enumerate().map(|(l, &c)| score[l][c]).sum();
            if total > best.0 {
                *best = (total, cur.clone());
            }
            return;
        }
        for c in 0..used.len() {
            if !used[c] {
                used[c] = true;
                cur.push(c);
                search(li + 1, used, cur, score, best);
                cur.pop();
                used[c] = false;
            }
        }
    }
    let mut names: Vec<String> = (0..k).map(|c| format!("cluster{c}")).collect();
    if lineages.len() <= k {
        let mut best = (f64::NEG_INFINITY, Vec::new());
        search(0, &mut vec![false; k], &mut Vec::new(), &score, &mut best);
        for (l, &c) in best.1.iter().enumerate() {
            names[c] = lineages[l].0.to_string();
        }
    }
    Ok(names
        .into_iter()
        .enumerate()
        .map(|(c, name)| CellTypeProfile { name, profile: centroids.column(c).iter().copied().collect() })
        .collect())
}

/// Index of the best-matching profile with cosine ≥ `threshold`.
pub fn assign_cell_type(x: &[f64], profiles: &[CellTypeProfile], threshold: f64) -> Option<usize> {
    let nx = x.iter().map(|v| v * v).sum::<f64>().sqrt();
    if nx < 1e-12 {
        return None;
    }
    let mut best: Option<(usize, f64)> = None;
    for (k, p) in profiles.iter().enumerate() {
        let np = p.profile.iter().map(|v| v * v).sum::<f64>().sqrt();
        let cos = x.iter().zip(&p.profile).map(|(a, b)| a * b).sum::<f64>() / (nx * np);
        if cos >= threshold && best.map_or(true, |(_, c)| cos > c) {
            best = Some((k, cos));
        }
    }
    best.map(|(k, _)| k)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct KnockdownConfig {
    pub c_values: Vec<f64>,
    /// Bounds of the uniform hypercube mixed into the initial condition.
    pub cube: (f64, f64),
    pub t_end: f64,
    pub dt: f64,
    pub threshold: f64,
    pub seed: u64,
}

impl Default for KnockdownConfig {
    fn default() -> Self {
        KnockdownConfig {
            c_values: (0..=10).map(|i| i as f64 / 10.0).collect(),
            cube: (0.25, 0.5),
            t_end: 2.0,
            dt: 1e-3,
            threshold: 0.95,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PerturbationOutcome {
    pub gene: Option<usize>,
    pub cell_types: Vec<String>,
    /// Probability of each type averaged over initial-condition schedules.
    pub probability: Vec<f64>,
    /// Per mixing coefficient c, probability of each type.
    pub per_c: Vec<(f64, Vec<f64>)>,
    /// Energy distance between the last two quarter windows (stationarity).
    pub stationarity_ed: f64,
}

/// Initial cloud `(1−c)·p* + c·u` with `u ~ U[lo,hi]^d`, pointwise per cell.
pub fn mixed_initial(base: &PointCloud, c: f64, cube: (f64, f64), seed: u64, index: u64) -> PointCloud {
    let mut rng = stream(seed, Purpose::Perturbation, index);
    base.map(|v| (1.0 - c) * v + c * (cube.0 + (cube.1 - cube.0) * rng.gen::<f64>()))
}

/// Simulates `process` with `gene` held at zero from each mixed initial
/// condition and classifies final states by cosine similarity.
pub fn knockdown_experiment(
    process: &dyn DiffusionProcess,
    gene: Option<usize>,
    base: &PointCloud,
    profiles: &[CellTypeProfile],
    cfg: &KnockdownConfig,
) -> PerturbationOutcome {
    let hook = move |x: &mut [f64]| {
        if let Some(g) = gene {
            x[g] = 0.0;
        }
    };
    let opts = SdeOptions { clamp_nonneg: true, hook: Some(&hook) };
    let kt = profiles.len();
    let mut per_c = Vec::new();
    let mut stationarity: f64 = 0.0;
    for (ci, &c) in cfg.c_values.iter().enumerate() {
        let x0 = mixed_initial(base, c, cfg.cube, cfg.seed, ci as u64);
        let times = [0.75 * cfg.t_end, cfg.t_end];
        let out = sde_simulate(process, &x0, &times, cfg.dt, cfg.seed, Purpose::Perturbation, 1_000_000 * (ci as u64 + 1), opts);
        let fin = &out.snapshots[1];
        let m = fin.ncols().min(500);
        stationarity = stationarity.max(energy_distance(
            &out.snapshots[0].columns(0, m).into_owned(),
            &fin.columns(0, m).into_owned(),
        ));
        let mut counts = vec![0usize; kt];
        for col in fin.column_iter() {
            let v: Vec<f64> = col.iter().copied().collect();
            if let Some(k) = assign_cell_type(&v, profiles, cfg.threshold) {
                counts[k] += 1;
            }
        }
        per_c.push((c, counts.iter().map(|&n| n as f64 / fin.ncols() as f64).collect::<Vec<_>>()));
    }
    let probability = (0..kt).map(|k| per_c.iter().map(|(_, p)| p[k]).sum::<f64>() / per_c.len() as f64).collect();
    PerturbationOutcome {
        gene,
        cell_types: profiles.iter().map(|p| p.name.clone()).collect(),
        probability,
        per_c,
        stationarity_ed: stationarity,
    }
}

/// Relative force error `sqrt(Σ‖f − f̂‖² / Σ‖f‖²)` over a cloud.
pub fn force_rmse(truth: &PointCloud, estimate: &PointCloud) -> f64 {
    ((truth - estimate).norm_squared() / truth.norm_squared()).sqrt()
}
