//! Time-dependent scores: analytic Gaussian scores, sliced score matching,
//! and Langevin validation.

use nalgebra::DMatrix;
use rand::seq::SliceRandom;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::autodiff::{Tape, Var};
use crate::error::{PfiError, Result};
use crate::evaluation::energy_distance;
use crate::gaussian::{ou_propagate, GaussianState, OUParams, PointCloud};
use crate::nn::{Checkpoint, FeedforwardNet, NetVars};
use crate::optim::{Adam, AdamConfig};
use crate::rng::{stream, Purpose, Rng};
use crate::srn::SnapshotDataset;

/// A score `∇ log p_t(x)` evaluated on batches (one column per sample).
pub trait ScoreFn: Sync {
    fn dim(&self) -> usize;
    fn eval(&self, x: &DMatrix<f64>, t: f64) -> DMatrix<f64>;
    /// Same map recorded on a tape; parameters enter as constants.
    fn on_tape(&self, tape: &mut Tape, x: Var, t: f64) -> Var;
}

/// Zero score (used with deterministic noise priors).
pub struct ZeroScore(pub usize);

impl ScoreFn for ZeroScore {
    fn dim(&self) -> usize {
        self.0
    }

    fn eval(&self, x: &DMatrix<f64>, _t: f64) -> DMatrix<f64> {
        DMatrix::zeros(x.nrows(), x.ncols())
    }

    fn on_tape(&self, tape: &mut Tape, x: Var, _t: f64) -> Var {
        let (r, c) = tape.shape(x);
        tape.zeros(r, c)
    }
}

fn gaussian_score_tape(tape: &mut Tape, x: Var, g: &GaussianState) -> Result<Var> {
    let prec = crate::linalg::spd_inverse(&g.cov)?;
    let neg_prec = tape.constant(-prec);
    let neg_mean = tape.constant(DMatrix::from_column_slice(g.dim(), 1, (-&g.mean).as_slice()));
    let centered = tape.add_bias(x, neg_mean);
    Ok(tape.matmul(neg_prec, centered))
}

fn gaussian_score_eval(x: &DMatrix<f64>, g: &GaussianState) -> Result<DMatrix<f64>> {
    let prec = crate::linalg::spd_inverse(&g.cov)?;
    let mut c = x.clone();
    for mut col in c.column_iter_mut() {
        col -= &g.mean;
    }
    Ok(-(prec * c))
}

/// Exact score of an OU process at any time.
pub struct OuScore {
    pub params: OUParams,
}

impl ScoreFn for OuScore {
    fn dim(&self) -> usize {
        self.params.omega.nrows()
    }

    fn eval(&self, x: &DMatrix<f64>, t: f64) -> DMatrix<f64> {
        let g = ou_propagate(&self.params, t).expect("valid OU parameters");
        gaussian_score_eval(x, &g).expect("OU covariance is SPD")
    }

    fn on_tape(&self, tape: &mut Tape, x: Var, t: f64) -> Var {
        let g = ou_propagate(&self.params, t).expect("valid OU parameters");
        gaussian_score_tape(tape, x, &g).expect("OU covariance is SPD")
    }
}

/// Score of fixed Gaussians at listed times; evaluation at other times
/// uses the nearest listed time.
pub struct PiecewiseGaussianScore {
    pub times: Vec<f64>,
    pub states: Vec<GaussianState>,
}

impl PiecewiseGaussianScore {
    fn nearest(&self, t: f64) -> &GaussianState {
        let k = self
            .times
            .iter()
            .enumerate()
            .min_by(|a, b| (a.1 - t).abs().total_cmp(&(b.1 - t).abs()))
            .map(|(k, _)| k)
            .expect("at least one time");
        &self.states[k]
    }
}

impl ScoreFn for PiecewiseGaussianScore {
    fn dim(&self) -> usize {
        self.states[0].dim()
    }

    fn eval(&self, x: &DMatrix<f64>, t: f64) -> DMatrix<f64> {
        gaussian_score_eval(x, self.nearest(t)).expect("SPD covariance")
    }

    fn on_tape(&self, tape: &mut Tape, x: Var, t: f64) -> Var {
        gaussian_score_tape(tape, x, self.nearest(t)).expect("SPD covariance")
    }
}

/// Network `s(x, t)` on the standardized input `([x; t] − shift) / scale`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NeuralScore {
    pub net: FeedforwardNet,
    /// Empty means no standardization.
    #[serde(default)]
    pub input_shift: Vec<f64>,
    #[serde(default)]
    pub input_scale: Vec<f64>,
}

impl NeuralScore {
    pub fn new(net: FeedforwardNet) -> Self {
        NeuralScore { net, input_shift: Vec::new(), input_scale: Vec::new() }
    }

    /// Per-coordinate mean and standard deviation of the pooled snapshots
    /// and of the snapshot times.
    pub fn standardization(ds: &SnapshotDataset) -> (Vec<f64>, Vec<f64>) {
        let d = ds.dim();
        let mut sum = vec![0.0; d + 1];
        let mut sq = vec![0.0; d + 1];
        let mut count = 0.0;
        for (t, c) in ds.times.iter().zip(&ds.snapshots) {
            for col in c.column_iter() {
                for i in 0..d {
                    sum[i] += col[i];
                    sq[i] += col[i] * col[i];
                }
                sum[d] += t;
                sq[d] += t * t;
                count += 1.0;
            }
        }
        let shift: Vec<f64> = sum.iter().map(|s| s / count).collect();
        let scale = sq
            .iter()
            .zip(&shift)
            .map(|(q, m)| {
                let sd = (q / count - m * m).max(0.0).sqrt();
                if sd > 1e-12 {
                    sd
                } else {
                    1.0
                }
            })
            .collect();
        (shift, scale)
    }

    fn input(&self, x: &DMatrix<f64>, t: f64) -> DMatrix<f64> {
        let (d, n) = x.shape();
        let mut m = DMatrix::from_fn(d + 1, n, |i, j| if i < d { x[(i, j)] } else { t });
        if !self.input_shift.is_empty() {
            for (i, mut row) in m.row_iter_mut().enumerate() {
                row.apply(|v| *v = (*v - self.input_shift[i]) / self.input_scale[i]);
            }
        }
        m
    }

    fn tape_forward(&self, tape: &mut Tape, vars: &NetVars, x: Var, tcol: Var) -> Var {
        let mut inp = tape.concat_rows(x, tcol);
        if !self.input_shift.is_empty() {
            let n = tape.shape(inp).1;
            let shift = tape.constant(DMatrix::from_iterator(self.input_shift.len(), 1, self.input_shift.iter().map(|v| -v)));
            let inv = tape.constant(DMatrix::from_fn(self.input_scale.len(), n, |i, _| 1.0 / self.input_scale[i]));
            let c = tape.add_bias(inp, shift);
            inp = tape.hadamard(c, inv);
        }
        FeedforwardNet::apply(tape, vars, inp)
    }

    pub fn validate(&self) -> Result<()> {
        self.net.validate()?;
        let k = self.net.input_dim();
        let ok = (self.input_shift.is_empty() && self.input_scale.is_empty())
            || (self.input_shift.len() == k && self.input_scale.len() == k && self.input_scale.iter().all(|s| *s > 0.0));
        if !ok || self.net.output_dim() + 1 != k {
            return Err(PfiError::Dimension("score network must map [x; t] in R^(d+1) to R^d".into()));
        }
        Ok(())
    }

    pub fn to_checkpoint(&self, seed: u64, dataset_hash: String) -> Result<Checkpoint> {
        let mut ck = Checkpoint::new("score", self.net.clone(), seed, dataset_hash);
        ck.extra.insert("input_shift".into(), serde_json::to_value(&self.input_shift)?);
        ck.extra.insert("input_scale".into(), serde_json::to_value(&self.input_scale)?);
        Ok(ck)
    }

    pub fn from_checkpoint(ck: &Checkpoint) -> Result<Self> {
        if ck.kind != "score" {
            return Err(PfiError::Integrity(format!("expected a score checkpoint, found '{}'", ck.kind)));
        }
        let field = |k: &str| -> Result<Vec<f64>> {
            Ok(match ck.extra.get(k) {
                Some(v) => serde_json::from_value(v.clone())?,
                None => Vec::new(),
            })
        };
        let s = NeuralScore { net: ck.net.clone(), input_shift: field("input_shift")?, input_scale: field("input_scale")? };
        s.validate()?;
        Ok(s)
    }
}

impl ScoreFn for NeuralScore {
    fn dim(&self) -> usize {
        self.net.output_dim()
    }

    fn eval(&self, x: &DMatrix<f64>, t: f64) -> DMatrix<f64> {
        self.net.forward(&self.input(x, t))
    }

    fn on_tape(&self, tape: &mut Tape, x: Var, t: f64) -> Var {
        let vars = self.net.to_tape(tape, false);
        let n = tape.shape(x).1;
        let tcol = tape.constant(DMatrix::from_element(1, n, t));
        self.tape_forward(tape, &vars, x, tcol)
    }
}

/// Distribution of the projection vectors in sliced score matching.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Projection {
    Gaussian,
    Rademacher,
}

fn projection(d: usize, n: usize, kind: Projection, rng: &mut Rng) -> DMatrix<f64> {
    DMatrix::from_fn(d, n, |_, _| match kind {
        Projection::Gaussian => StandardNormal.sample(rng),
        Projection::Rademacher => {
            if rand::Rng::gen::<bool>(rng) {
                1.0
            } else {
                -1.0
            }
        }
    })
}

/// Per-sample SSM objective `½‖s‖² + vᵀ(∂s/∂x)v`, averaged over
/// `projections` draws of `v`, recorded on the tape as a 1×n row.
pub fn ssm_rows(
    tape: &mut Tape,
    x: Var,
    s: Var,
    projections: usize,
    kind: Projection,
    rng: &mut Rng,
) -> Var {
    let (d, n) = tape.shape(x);
    let ones = tape.constant(DMatrix::from_element(1, d, 1.0));
    let sq = tape.square(s);
    let norm = tape.matmul(ones, sq);
    let mut acc = tape.scale(norm, 0.5);
    for _ in 0..projections {
        let v = tape.constant(projection(d, n, kind, rng));
        let jv = tape.jvp(x, v, s);
        let vjv = tape.hadamard(v, jv);
        let quad = tape.matmul(ones, vjv);
        let quad = tape.scale(quad, 1.0 / projections as f64);
        acc = tape.add(acc, quad);
    }
    acc
}

/// Monte-Carlo SSM loss of an arbitrary score on one cloud at time `t`.
pub fn ssm_loss(score: &dyn ScoreFn, x: &DMatrix<f64>, t: f64, projections: usize, kind: Projection, rng: &mut Rng) -> f64 {
    let mut tape = Tape::new();
    let xv = tape.constant(x.clone());
    let s = score.on_tape(&mut tape, xv, t);
    let rows = ssm_rows(&mut tape, xv, s, projections, kind, rng);
    tape.value(rows).mean()
}

/// SSM loss of a network and its parameter gradient (flat) on a batch
/// whose columns carry their own times; `weights` multiply the per-sample
/// terms before summation.
pub fn ssm_loss_and_grad(
    score: &NeuralScore,
    x: &DMatrix<f64>,
    times: &[f64],
    weights: &[f64],
    projections: usize,
    rng: &mut Rng,
) -> (f64, Vec<f64>, Vec<f64>) {
    let n = x.ncols();
    let mut tape = Tape::new();
    let vars = score.net.to_tape(&mut tape, true);
    let xv = tape.constant(x.clone());
    let tcol = tape.constant(DMatrix::from_row_slice(1, n, times));
    let s = score.tape_forward(&mut tape, &vars, xv, tcol);
    let rows = ssm_rows(&mut tape, xv, s, projections, Projection::Gaussian, rng);
    let per_sample: Vec<f64> = tape.value(rows).iter().copied().collect();
    let w = tape.constant(DMatrix::from_row_slice(1, n, weights));
    let weighted = tape.hadamard(rows, w);
    let loss = tape.sum(weighted);
    let value = tape.scalar(loss);
    let grads = tape.grad(loss, &vars.all());
    (value, FeedforwardNet::flatten_grads(&grads), per_sample)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum WeightMode {
    Fixed,
    VarianceNormalized,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScoreTrainConfig {
    pub hidden: Vec<usize>,
    pub epochs: usize,
    /// Total samples per minibatch, split evenly across snapshots.
    pub batch_size: usize,
    pub adam: AdamConfig,
    pub projections: usize,
    pub weight_mode: WeightMode,
    /// EMA factor for the per-snapshot variance estimates.
    pub ema: f64,
    pub validation_fraction: f64,
    /// Standardize network inputs with the training-data moments.
    #[serde(default)]
    pub standardize: bool,
    /// Cosine-anneal the learning rate down to `lr · lr_final_factor`
    /// (1 keeps it constant).
    #[serde(default = "one")]
    pub lr_final_factor: f64,
    /// Return the parameters of the epoch with the lowest validation loss.
    #[serde(default)]
    pub keep_best: bool,
    pub seed: u64,
}

impl Default for ScoreTrainConfig {
    fn default() -> Self {
        ScoreTrainConfig {
            hidden: vec![50, 50, 50],
            epochs: 100,
            batch_size: 512,
            adam: AdamConfig::default(),
            projections: 1,
            weight_mode: WeightMode::VarianceNormalized,
            ema: 0.99,
            validation_fraction: 0.1,
            standardize: true,
            lr_final_factor: 0.01,
            keep_best: true,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochLog {
    pub epoch: usize,
    pub train_loss: f64,
    pub validation_loss: f64,
    pub weights: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScoreTrainLog {
    pub epochs: Vec<EpochLog>,
    pub weight_mode: WeightMode,
    pub note: String,
}

fn one() -> f64 {
    1.0
}

/// Default score-network hidden layers by problem dimension.
pub fn default_hidden(d: usize) -> Vec<usize> {
    match d {
        30 => vec![100; 4],
        11 => vec![100; 6],
        5 => vec![50; 4],
        _ => vec![50; 3],
    }
}

/// Sliced score matching on all snapshots of a dataset.
pub fn train_score(ds: &SnapshotDataset, cfg: &ScoreTrainConfig) -> Result<(NeuralScore, ScoreTrainLog)> {
    if cfg.adam.lr <= 0.0 || cfg.projections == 0 || cfg.batch_size == 0 {
        return Err(PfiError::InvalidParameter("need lr > 0, projections >= 1, batch_size >= 1".into()));
    }
    let d = ds.dim();
    let kk = ds.snapshots.len();
    let mut init_rng = stream(cfg.seed, Purpose::Init, 0);
    let (shift, scale) = if cfg.standardize { NeuralScore::standardization(ds) } else { (Vec::new(), Vec::new()) };
    let mut model =
        NeuralScore { net: FeedforwardNet::new(d + 1, &cfg.hidden, d, &mut init_rng), input_shift: shift, input_scale: scale };
    let mut rng = stream(cfg.seed, Purpose::Training, 0);
    // Per-snapshot train/validation split.
    let mut train_idx = Vec::with_capacity(kk);
    let mut val_idx = Vec::with_capacity(kk);
    for s in &ds.snapshots {
        let mut idx: Vec<usize> = (0..s.ncols()).collect();
        idx.shuffle(&mut rng);
        let nv = ((s.ncols() as f64) * cfg.validation_fraction).round() as usize;
        let nv = nv.min(s.ncols().saturating_sub(1));
        val_idx.push(idx[..nv].to_vec());
        train_idx.push(idx[nv..].to_vec());
    }
    let per = (cfg.batch_size / kk).max(1);
    let steps = train_idx.iter().map(|v| v.len()).max().unwrap_or(0).div_ceil(per).max(1);
    let mut adam = Adam::new(model.net.num_params(), cfg.adam);
    let mut params = model.net.params();
    let mut var_ema: Vec<Option<f64>> = vec![None; kk];
    let mut lambda = vec![1.0; kk];
    let mut log = ScoreTrainLog {
        epochs: Vec::new(),
        weight_mode: cfg.weight_mode,
        note: "variance-normalized weights: inverse EMA of per-snapshot loss std (floor 1e-6), rescaled to mean 1".into(),
    };
    let mut best: Option<(f64, Vec<f64>)> = None;
    for epoch in 0..cfg.epochs {
        let progress = epoch as f64 / cfg.epochs.max(2).saturating_sub(1) as f64;
        let factor = cfg.lr_final_factor + (1.0 - cfg.lr_final_factor) * 0.5 * (1.0 + (std::f64::consts::PI * progress).cos());
        adam.config.lr = cfg.adam.lr * factor;
        for idx in train_idx.iter_mut() {
            idx.shuffle(&mut rng);
        }
        let mut epoch_loss = 0.0;
        for step in 0..steps {
            let mut cols: Vec<f64> = Vec::new();
            let mut times = Vec::new();
            let mut weights = Vec::new();
            let mut groups = Vec::new();
            for k in 0..kk {
                let idx = &train_idx[k];
                if idx.is_empty() {
                    continue;
                }
                let start = (step * per) % idx.len();
                let take: Vec<usize> = (0..per.min(idx.len())).map(|j| idx[(start + j) % idx.len()]).collect();
                for &j in &take {
                    cols.extend(ds.snapshots[k].column(j).iter());
                    times.push(ds.times[k]);
                    weights.push(lambda[k] / (take.len() * kk) as f64);
                    groups.push(k);
                }
            }
            let x = DMatrix::from_column_slice(d, times.len(), &cols);
            model.net.set_params(&params);
            let (loss, grad, per_sample) = ssm_loss_and_grad(&model, &x, &times, &weights, cfg.projections, &mut rng);
            if !loss.is_finite() || grad.iter().any(|g| !g.is_finite()) {
                return Err(PfiError::Diverged { step: epoch * steps + step, reason: format!("score loss {loss}") });
            }
            adam.step(&mut params, &grad);
            epoch_loss += loss;
            if cfg.weight_mode == WeightMode::VarianceNormalized {
                for (k, ema) in var_ema.iter_mut().enumerate() {
                    let vals: Vec<f64> =
                        per_sample.iter().zip(&groups).filter(|(_, g)| **g == k).map(|(v, _)| *v).collect();
                    if vals.len() < 2 {
                        continue;
                    }
                    let m = vals.iter().sum::<f64>() / vals.len() as f64;
                    let v = vals.iter().map(|x| (x - m).powi(2)).sum::<f64>() / (vals.len() - 1) as f64;
                    *ema = Some(match *ema {
                        None => v,
                        Some(prev) => cfg.ema * prev + (1.0 - cfg.ema) * v,
                    });
                }
                let inv: Vec<f64> = var_ema.iter().map(|v| 1.0 / v.unwrap_or(1.0).sqrt().max(1e-6)).collect();
                let mean = inv.iter().sum::<f64>() / kk as f64;
                lambda = inv.iter().map(|v| v / mean).collect();
            }
        }
        model.net.set_params(&params);
        let validation_loss = validation_loss(&model, ds, &val_idx, cfg.seed);
        if cfg.keep_best && validation_loss.is_finite() && best.as_ref().map_or(true, |(b, _)| validation_loss < *b) {
            best = Some((validation_loss, params.clone()));
        }
        log::debug!("score epoch {epoch}: train {:.5} val {validation_loss:.5}", epoch_loss / steps as f64);
        log.epochs.push(EpochLog { epoch, train_loss: epoch_loss / steps as f64, validation_loss, weights: lambda.clone() });
    }
    match best {
        Some((_, p)) => model.net.set_params(&p),
        None => model.net.set_params(&params),
    }
    Ok((model, log))
}

/// Uses the same projections every epoch so values are comparable.
fn validation_loss(score: &NeuralScore, ds: &SnapshotDataset, val_idx: &[Vec<usize>], seed: u64) -> f64 {
    let mut rng = stream(seed, Purpose::Evaluation, 0);
    let mut total = 0.0;
    let mut count = 0;
    for (k, idx) in val_idx.iter().enumerate() {
        if idx.is_empty() {
            continue;
        }
        let x = DMatrix::from_fn(ds.dim(), idx.len(), |i, j| ds.snapshots[k][(i, idx[j])]);
        total += ssm_loss(score, &x, ds.times[k], 1, Projection::Gaussian, &mut rng);
        count += 1;
    }
    if count == 0 {
        f64::NAN
    } else {
        total / count as f64
    }
}

/// Relative score error `sqrt(Σ‖ŝ − s‖² / Σ‖s‖²)` over clouds at times.
pub fn score_rmse(est: &dyn ScoreFn, truth: &dyn ScoreFn, clouds: &[(f64, PointCloud)]) -> f64 {
    let mut num = 0.0;
    let mut den = 0.0;
    for (t, x) in clouds {
        let a = est.eval(x, *t);
        let b = truth.eval(x, *t);
        num += (&a - &b).norm_squared();
        den += b.norm_squared();
    }
    (num / den).sqrt()
}

/// Unadjusted Langevin iterations `x ← x + (ε/2)s(x) + √ε z`.
pub fn langevin_sample(
    score: &dyn Fn(&DMatrix<f64>) -> DMatrix<f64>,
    n_steps: usize,
    eps: f64,
    x0: &DMatrix<f64>,
    rng: &mut Rng,
) -> DMatrix<f64> {
    assert!(eps > 0.0, "Langevin step must be positive");
    let mut x = x0.clone();
    let se = eps.sqrt();
    for _ in 0..n_steps {
        let s = score(&x);
        for (xi, si) in x.iter_mut().zip(s.iter()) {
            let z: f64 = StandardNormal.sample(rng);
            *xi += 0.5 * eps * si + se * z;
        }
    }
    x
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScoreValidation {
    pub times: Vec<f64>,
    /// Energy distance between Langevin samples and data at each time.
    pub energy_distance: Vec<f64>,
    /// Energy distance between two disjoint halves of the data (baseline).
    pub baseline: Vec<f64>,
}

/// Runs Langevin dynamics with the learned score at each snapshot time,
/// started from a Gaussian matched to the data, and compares clouds.
pub fn validate_score(
    score: &dyn ScoreFn,
    ds: &SnapshotDataset,
    n_samples: usize,
    n_steps: usize,
    eps: f64,
    seed: u64,
) -> Result<ScoreValidation> {
    let mut out = ScoreValidation { times: ds.times.clone(), energy_distance: Vec::new(), baseline: Vec::new() };
    for (k, (t, cloud)) in ds.times.iter().zip(&ds.snapshots).enumerate() {
        let mut rng = stream(seed, Purpose::Evaluation, k as u64);
        let n = n_samples.min(cloud.ncols());
        let fit = crate::gaussian::fit_gaussian(cloud)?;
        let x0 = fit.state.sample(n, &mut rng)?;
        let gen = langevin_sample(&|x| score.eval(x, *t), n_steps, eps, &x0, &mut rng);
        let data = cloud.columns(0, n).into_owned();
        out.energy_distance.push(energy_distance(&gen, &data));
        let half = cloud.ncols() / 2;
        let m = n.min(half);
        out.baseline.push(energy_distance(&cloud.columns(0, m).into_owned(), &cloud.columns(half, m).into_owned()));
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn ssm_loss_of_exact_standard_normal_score() {
        let d = 3;
        let n = 100_000;
        let mut rng = stream(4, Purpose::Evaluation, 0);
        let x = crate::rng::normal_mat(&mut rng, d, n);
        let mut tape = Tape::new();
        let xv = tape.constant(x.clone());
        let s = tape.neg(xv);
        let rows = ssm_rows(&mut tape, xv, s, 1, Projection::Gaussian, &mut rng);
        let vals: Vec<f64> = tape.value(rows).iter().copied().collect();
        let mean = vals.iter().sum::<f64>() / n as f64;
        let sd = (vals.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1) as f64).sqrt();
        assert!((mean + d as f64 / 2.0).abs() < 3.0 * sd / (n as f64).sqrt(), "{mean}");
        assert_eq!(ssm_loss(&ZeroScore(d), &x, 0.0, 2, Projection::Gaussian, &mut rng), 0.0);
    }

    #[test]
    fn ssm_gradient_matches_finite_differences() {
        let mut rng = stream(5, Purpose::Init, 0);
        let net = NeuralScore {
            net: FeedforwardNet::new(4, &[6, 6], 3, &mut rng),
            input_shift: vec![0.1, -0.2, 0.3, 0.25],
            input_scale: vec![1.5, 0.7, 1.0, 0.2],
        };
        let x = crate::rng::normal_mat(&mut rng, 3, 5);
        let times = vec![0.1, 0.2, 0.3, 0.4, 0.5];
        let w = vec![0.2; 5];
        let seed_rng = stream(5, Purpose::Training, 0);
        let (_, g, _) = ssm_loss_and_grad(&net, &x, &times, &w, 2, &mut seed_rng.clone());
        let p0 = net.net.params();
        let h = 1e-5;
        for k in (0..p0.len()).step_by(7) {
            let mut n2 = net.clone();
            let mut p = p0.clone();
            p[k] += h;
            n2.net.set_params(&p);
            let fp = ssm_loss_and_grad(&n2, &x, &times, &w, 2, &mut seed_rng.clone()).0;
            p[k] -= 2.0 * h;
            n2.net.set_params(&p);
            let fm = ssm_loss_and_grad(&n2, &x, &times, &w, 2, &mut seed_rng.clone()).0;
            let fd = (fp - fm) / (2.0 * h);
            assert!((g[k] - fd).abs() <= 1e-4 * fd.abs().max(1e-2), "param {k}: {} vs {fd}", g[k]);
        }
    }

    #[test]
    fn langevin_zero_score_is_random_walk() {
        let mut rng = stream(6, Purpose::Evaluation, 0);
        let x0 = DMatrix::zeros(1, 20_000);
        let x = langevin_sample(&|x| DMatrix::zeros(x.nrows(), x.ncols()), 100, 0.01, &x0, &mut rng);
        let var = x.iter().map(|v| v * v).sum::<f64>() / x.len() as f64;
        assert!((var - 1.0).abs() < 0.05, "{var}");
    }
}
