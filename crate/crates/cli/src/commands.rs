use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use clap::{Args, ValueEnum};
use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};
use serde_json::json;

use pfi::evaluation::{
    energy_distance, find_fixed_points, flowline_cosine, grn_pr_auc, knockdown_experiment, reference_profiles,
    FixedPointConfig, GroundTruthNetwork, KnockdownConfig,
};
use pfi::force::{
    distance_baseline, force_checkpoint, force_from_checkpoint, regulatory_jacobian, train_force, Distance,
    DivergenceMode, ForceModel, InferenceProblem, InferredProcess, Integrator, NoiseModel, Optimizer,
    PfiConfig,
};
use pfi::gaussian::PointCloud;
use pfi::nn::Checkpoint;
use pfi::optim::{AdamConfig, LbfgsConfig};
use pfi::ou_theory::{
    analytic_minimizer, no_regularization_family, relative_bias, theory_report, variance_estimate, IsotropicOUSpec,
    LambdaConvention,
};
use pfi::rng::{stream, Purpose};
use pfi::score::{default_hidden, train_score as fit_score, NeuralScore, ScoreFn, ScoreTrainConfig, WeightMode, ZeroScore};
use pfi::srn::circuits::{builtin, HSC_LINEAGES};
use pfi::srn::{
    load_network_json, sample_snapshots, sde_simulate, ChemicalLangevin, DiffusionProcess, InitialCondition,
    ReactionNetwork, SdeOptions, Simulator, SnapshotDataset, SnapshotPlan, SpaceTag,
};

use crate::manifest::Run;

// ---------------------------------------------------------------------------
// Shared helpers

fn load_network(spec: &str, volume: f64) -> Result<ReactionNetwork> {
    if let Some(net) = builtin(spec, volume) {
        return Ok(net);
    }
    let text = fs::read_to_string(spec)
        .with_context(|| format!("'{spec}' is neither a built-in network (mcad, hsc, toggle, cyclic) nor a readable file"))?;
    Ok(load_network_json(&text)?.with_volume(volume))
}

fn load_dataset(run: &mut Run, path: &Path) -> Result<(SnapshotDataset, String)> {
    run.input(path)?;
    let ds = SnapshotDataset::load(path).with_context(|| format!("loading dataset {}", path.display()))?;
    let hash = ds.content_hash()?;
    Ok((ds, hash))
}

fn load_checkpoint(run: &mut Run, path: &Path, dataset_hash: Option<&str>) -> Result<Checkpoint> {
    run.input(path)?;
    let ck = Checkpoint::load(path).with_context(|| format!("loading checkpoint {}", path.display()))?;
    if let Some(h) = dataset_hash {
        ck.check_dataset(h)?;
    }
    Ok(ck)
}

/// Truth network behind a dataset, when it is a built-in one.
fn dataset_network(ds: &SnapshotDataset) -> Option<ReactionNetwork> {
    builtin(&ds.meta.network, ds.meta.volume)
}

/// At most `m` evenly strided columns.
fn subsample(x: &PointCloud, m: usize) -> PointCloud {
    if x.ncols() <= m {
        return x.clone();
    }
    let stride = x.ncols() as f64 / m as f64;
    let idx: Vec<usize> = (0..m).map(|i| (i as f64 * stride) as usize).collect();
    x.select_columns(&idx)
}

fn pooled(ds: &SnapshotDataset, per_snapshot: usize) -> PointCloud {
    let parts: Vec<PointCloud> = ds.snapshots.iter().map(|s| subsample(s, per_snapshot)).collect();
    let n: usize = parts.iter().map(|p| p.ncols()).sum();
    let mut out = DMatrix::zeros(ds.dim(), n);
    let mut c = 0;
    for p in parts {
        out.columns_mut(c, p.ncols()).copy_from(&p);
        c += p.ncols();
    }
    out
}

fn check_flags(flags: &[String], waive: bool) -> Result<()> {
    if flags.is_empty() {
        return Ok(());
    }
    for f in flags {
        log::warn!("{f}");
    }
    if waive {
        eprintln!("warning: {} internal flag(s) waived: {}", flags.len(), flags.join("; "));
        Ok(())
    } else {
        bail!("internal flags exceeded their thresholds ({}); outputs were written, rerun with --waive-flags to accept them", flags.join("; "))
    }
}

// ---------------------------------------------------------------------------
// simulate

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum SimKind {
    Gillespie,
    Cle,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum SpaceArg {
    Counts,
    Concentration,
}

#[derive(Debug, Clone, Args, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub struct SimulateArgs {
    /// Built-in network (mcad, hsc, toggle, cyclic) or a network JSON file.
    #[arg(long)]
    pub network: String,
    /// Compartment volume.
    #[arg(long = "V", default_value_t = 4.0)]
    #[serde(rename = "V")]
    pub volume: f64,
    /// Samples per snapshot.
    #[arg(long, default_value_t = 1000)]
    pub n: usize,
    /// Number of intervals (K + 1 snapshots).
    #[arg(long = "K", default_value_t = 10)]
    #[serde(rename = "K")]
    pub k: usize,
    #[arg(long, default_value_t = 0.5)]
    pub dt: f64,
    #[arg(long, value_enum, default_value_t = SimKind::Gillespie)]
    pub simulator: SimKind,
    /// Euler–Maruyama step for the CLE simulator.
    #[arg(long, default_value_t = 1e-3)]
    pub dt_em: f64,
    #[arg(long, value_enum, default_value_t = SpaceArg::Concentration)]
    pub space: SpaceArg,
    /// Start every gene at this concentration.
    #[arg(long, conflicts_with = "init_box")]
    pub init_level: Option<f64>,
    /// Start every gene uniformly in `lo,hi`.
    #[arg(long, value_delimiter = ',')]
    pub init_box: Option<Vec<f64>>,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Largest tolerated fraction of clamped CLE coordinate updates.
    #[arg(long, default_value_t = 1e-3)]
    pub max_clamp_fraction: f64,
    #[arg(long)]
    pub waive_flags: bool,
    #[arg(long, default_value = "out/simulate")]
    pub out: PathBuf,
}

pub fn simulate(a: SimulateArgs) -> Result<()> {
    let mut run = Run::new("simulate", &a, &a.out)?;
    if Path::new(&a.network).exists() {
        run.input(Path::new(&a.network))?;
    }
    let net = load_network(&a.network, a.volume)?;
    let d = net.dim();
    let initial = match (&a.init_level, &a.init_box) {
        (Some(l), _) => InitialCondition::Uniform { level: *l },
        (None, Some(b)) if b.len() == 2 => InitialCondition::Box { lo: vec![b[0]; d], hi: vec![b[1]; d] },
        (None, Some(_)) => bail!("--init-box takes two values, lo,hi"),
        (None, None) => InitialCondition::default(),
    };
    let plan = SnapshotPlan {
        n: a.n,
        k: a.k,
        dt: a.dt,
        space: match a.space {
            SpaceArg::Counts => SpaceTag::Counts,
            SpaceArg::Concentration => SpaceTag::Concentration,
        },
        simulator: match a.simulator {
            SimKind::Gillespie => Simulator::Gillespie,
            SimKind::Cle => Simulator::Cle { dt_em: a.dt_em },
        },
        initial,
        seed: a.seed,
    };
    let ds = sample_snapshots(&net, &plan)?;
    let csv = ds.save(&a.out.join("dataset"))?;
    run.record(&csv)?;
    run.record(&csv.with_extension("json"))?;
    println!(
        "{}: wrote {} snapshots x {} rows ({} species) to {}",
        net.name,
        ds.times.len(),
        a.n,
        d,
        csv.display()
    );
    let mut flags = Vec::new();
    if a.simulator == SimKind::Cle {
        let updates: f64 = ds.times.iter().map(|t| (t / a.dt_em).ceil() * (a.n * d) as f64).sum();
        let frac = ds.meta.clamps as f64 / updates.max(1.0);
        if frac > a.max_clamp_fraction {
            flags.push(format!("{} CLE clamps ({frac:.2e} of updates)", ds.meta.clamps));
        }
    }
    run.finish()?;
    check_flags(&flags, a.waive_flags)
}

// ---------------------------------------------------------------------------
// train-score

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum WeightArg {
    Fixed,
    VarianceNormalized,
}

#[derive(Debug, Clone, Args, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub struct TrainScoreArgs {
    /// Dataset CSV written by `simulate`.
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long, default_value_t = 100)]
    pub epochs: usize,
    #[arg(long, default_value_t = 1e-3)]
    pub lr: f64,
    /// Hidden layer widths (default depends on the dimension).
    #[arg(long, value_delimiter = ',')]
    pub hidden: Option<Vec<usize>>,
    #[arg(long, default_value_t = 512)]
    pub batch_size: usize,
    #[arg(long, default_value_t = 1)]
    pub projections: usize,
    #[arg(long, value_enum, default_value_t = WeightArg::VarianceNormalized)]
    pub weight_mode: WeightArg,
    #[arg(long, default_value_t = 0.1)]
    pub validation_fraction: f64,
    /// Feed raw (unstandardized) inputs to the network.
    #[arg(long)]
    pub no_standardize: bool,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long, default_value = "out/score")]
    pub out: PathBuf,
}

pub fn train_score(a: TrainScoreArgs) -> Result<()> {
    let mut run = Run::new("train-score", &a, &a.out)?;
    let (ds, hash) = load_dataset(&mut run, &a.data)?;
    let cfg = ScoreTrainConfig {
        hidden: a.hidden.clone().unwrap_or_else(|| default_hidden(ds.dim())),
        epochs: a.epochs,
        batch_size: a.batch_size,
        adam: AdamConfig { lr: a.lr, ..Default::default() },
        projections: a.projections,
        weight_mode: match a.weight_mode {
            WeightArg::Fixed => WeightMode::Fixed,
            WeightArg::VarianceNormalized => WeightMode::VarianceNormalized,
        },
        validation_fraction: a.validation_fraction,
        standardize: !a.no_standardize,
        seed: a.seed,
        ..Default::default()
    };
    let (score, log) = fit_score(&ds, &cfg)?;
    let ck = score.to_checkpoint(a.seed, hash)?;
    run.write_json("score.json", &ck)?;
    run.write_json("score_log.json", &log)?;
    if let Some(last) = log.epochs.last() {
        println!("trained {} epochs: train {:.4}, validation {:.4}", log.epochs.len(), last.train_loss, last.validation_loss);
    }
    run.finish()?;
    Ok(())
}

// ---------------------------------------------------------------------------
// validate-score

#[derive(Debug, Clone, Args, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub struct ValidateScoreArgs {
    #[arg(long)]
    pub data: PathBuf,
    /// Score checkpoint written by `train-score`.
    #[arg(long)]
    pub score: PathBuf,
    /// Langevin samples per snapshot.
    #[arg(long, default_value_t = 1000)]
    pub samples: usize,
    #[arg(long, default_value_t = 1000)]
    pub steps: usize,
    #[arg(long, default_value_t = 1e-3)]
    pub eps: f64,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long, default_value = "out/validate-score")]
    pub out: PathBuf,
}

pub fn validate_score(a: ValidateScoreArgs) -> Result<()> {
    let mut run = Run::new("validate-score", &a, &a.out)?;
    let (ds, hash) = load_dataset(&mut run, &a.data)?;
    let score = NeuralScore::from_checkpoint(&load_checkpoint(&mut run, &a.score, Some(&hash))?)?;
    if score.dim() != ds.dim() {
        bail!("score dimension {} does not match the dataset ({})", score.dim(), ds.dim());
    }
    let v = pfi::score::validate_score(&score, &ds, a.samples, a.steps, a.eps, a.seed)?;
    let mut csv = String::from("time,energy_distance,baseline\n");
    for ((t, e), b) in v.times.iter().zip(&v.energy_distance).zip(&v.baseline) {
        println!("t = {t:<8} ED {e:.4}  (data split baseline {b:.4})");
        csv.push_str(&format!("{t},{e},{b}\n"));
    }
    run.write_json("score_validation.json", &v)?;
    run.write("score_validation.csv", csv.as_bytes())?;
    run.finish()?;
    Ok(())
}

// ---------------------------------------------------------------------------
// infer

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum NoiseArg {
    Cle,
    Additive,
    SqrtState,
    Deterministic,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ForceArg {
    Linear,
    Neural,
    TimeDependent,
    Potential,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum DistanceArg {
    GaussianW2,
    Sinkhorn,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum IntegratorArg {
    Euler,
    Rk4,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum OptimizerArg {
    Adam,
    Lbfgs,
}

#[derive(Debug, Clone, Args, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub struct InferArgs {
    #[arg(long)]
    pub data: PathBuf,
    /// Score checkpoint (not needed with `--noise deterministic`).
    #[arg(long)]
    pub score: Option<PathBuf>,
    #[arg(long, value_enum, default_value_t = NoiseArg::Cle)]
    pub noise: NoiseArg,
    /// Noise amplitude for the additive and sqrt-state priors.
    #[arg(long, default_value_t = 1.0)]
    pub sigma: f64,
    /// Degradation rates for the CLE prior (default: the built-in network's).
    #[arg(long, value_delimiter = ',')]
    pub ell: Option<Vec<f64>>,
    #[arg(long, value_enum, default_value_t = ForceArg::Neural)]
    pub force: ForceArg,
    #[arg(long, value_delimiter = ',', default_value = "50,50,50,50")]
    pub hidden: Vec<usize>,
    /// Build the known degradation `-ℓ∘x` into network forces.
    #[arg(long)]
    pub known_degradation: bool,
    #[arg(long, default_value_t = 1e-2)]
    pub lambda: f64,
    #[arg(long, value_enum, default_value_t = DistanceArg::Sinkhorn)]
    pub distance: DistanceArg,
    /// Sinkhorn entropic regularisation.
    #[arg(long, default_value_t = 0.1)]
    pub eps: f64,
    /// Sinkhorn iterations differentiated through (0: envelope gradient).
    #[arg(long, default_value_t = 0)]
    pub unroll: usize,
    /// Integrator substeps per snapshot interval.
    #[arg(long, default_value_t = 1)]
    pub steps: usize,
    #[arg(long, value_enum, default_value_t = IntegratorArg::Euler)]
    pub integrator: IntegratorArg,
    /// Finite-difference step for `∇·D` (default: exact derivative).
    #[arg(long)]
    pub divergence_fd: Option<f64>,
    #[arg(long, value_enum, default_value_t = OptimizerArg::Adam)]
    pub optimizer: OptimizerArg,
    #[arg(long, default_value_t = 1e-3)]
    pub lr: f64,
    #[arg(long, default_value_t = 1000)]
    pub iterations: usize,
    /// Samples per snapshot per step (default: all).
    #[arg(long)]
    pub batch_size: Option<usize>,
    #[arg(long, default_value_t = 100)]
    pub reg_samples: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long)]
    pub waive_flags: bool,
    #[arg(long, default_value = "out/infer")]
    pub out: PathBuf,
}

fn noise_model(a: &InferArgs, ds: &SnapshotDataset) -> Result<NoiseModel> {
    Ok(match a.noise {
        NoiseArg::Cle => {
            if ds.meta.space != SpaceTag::Concentration {
                bail!("the CLE prior needs a concentration-space dataset");
            }
            let ell = match &a.ell {
                Some(e) => e.clone(),
                None => dataset_network(ds)
                    .map(|n| n.degradation_rates())
                    .with_context(|| format!("network '{}' is not built in; pass --ell", ds.meta.network))?,
            };
            NoiseModel::Cle { ell, volume: ds.meta.volume }
        }
        NoiseArg::Additive => NoiseModel::Additive { sigma: a.sigma },
        NoiseArg::SqrtState => NoiseModel::SqrtState { sigma: a.sigma },
        NoiseArg::Deterministic => NoiseModel::Deterministic,
    })
}

pub fn infer(a: InferArgs) -> Result<()> {
    let mut run = Run::new("infer", &a, &a.out)?;
    let (ds, hash) = load_dataset(&mut run, &a.data)?;
    let d = ds.dim();
    let noise = noise_model(&a, &ds)?;
    let neural: Box<dyn ScoreFn>;
    let score: &dyn ScoreFn = match (&a.score, a.noise) {
        (Some(p), _) => {
            neural = Box::new(NeuralScore::from_checkpoint(&load_checkpoint(&mut run, p, Some(&hash))?)?);
            &*neural
        }
        (None, NoiseArg::Deterministic) => &ZeroScore(d),
        (None, _) => bail!("--score is required unless --noise deterministic"),
    };
    let degradation = if a.known_degradation {
        match &noise {
            NoiseModel::Cle { ell, .. } => ell.clone(),
            _ => match &a.ell {
                Some(e) => e.clone(),
                None => dataset_network(&ds).map(|n| n.degradation_rates()).context("pass --ell for --known-degradation")?,
            },
        }
    } else {
        Vec::new()
    };
    let mut rng = stream(a.seed, Purpose::Init, 0);
    let initial = match a.force {
        ForceArg::Linear => ForceModel::linear_zero(d),
        ForceArg::Neural => ForceModel::neural(d, &a.hidden, degradation, &mut rng),
        ForceArg::TimeDependent => ForceModel::neural_time_dependent(d, &a.hidden, degradation, &mut rng),
        ForceArg::Potential => ForceModel::potential(d, &a.hidden, degradation, &mut rng),
    };
    let config = PfiConfig {
        lambda: a.lambda,
        distance: match a.distance {
            DistanceArg::GaussianW2 => Distance::GaussianW2,
            DistanceArg::Sinkhorn => Distance::Sinkhorn { eps: a.eps, unroll: a.unroll },
        },
        steps: a.steps,
        integrator: match a.integrator {
            IntegratorArg::Euler => Integrator::Euler,
            IntegratorArg::Rk4 => Integrator::Rk4,
        },
        divergence: match a.divergence_fd {
            Some(h) => DivergenceMode::FiniteDifference { h },
            None => DivergenceMode::Exact,
        },
        optimizer: match a.optimizer {
            OptimizerArg::Adam => Optimizer::Adam(AdamConfig { lr: a.lr, ..Default::default() }),
            OptimizerArg::Lbfgs => Optimizer::Lbfgs(LbfgsConfig { max_iter: a.iterations, ..Default::default() }),
        },
        iterations: a.iterations,
        batch_size: a.batch_size,
        reg_samples: a.reg_samples,
        seed: a.seed,
        ..Default::default()
    };
    let problem = InferenceProblem { dataset: &ds, score, noise: noise.clone(), config };
    let baseline = distance_baseline(&ds, problem.config.distance)?;
    let (force, report) = train_force(&problem, initial)?;
    run.write_json("force.json", &force_checkpoint(&force, &noise, a.seed, hash)?)?;
    run.write_json("loss_report.json", &json!({ "report": report, "distance_baseline": baseline }))?;
    println!(
        "{} force, {} noise: loss {:.6e} after {} iterations ({})",
        report.force_kind, report.noise_kind, report.final_loss.total, report.iterations, report.stop_reason
    );
    let mut flags = Vec::new();
    if let Some(why) = &report.aborted {
        flags.push(format!("training aborted: {why}"));
    }
    if report.final_loss.sinkhorn_unconverged > 0 {
        flags.push(format!("{} Sinkhorn solves did not converge", report.final_loss.sinkhorn_unconverged));
    }
    if report.final_loss.floored_fits > 0 {
        flags.push(format!("{} Gaussian fits needed a covariance floor", report.final_loss.floored_fits));
    }
    run.finish()?;
    check_flags(&flags, a.waive_flags)
}

// ---------------------------------------------------------------------------
// analyze-ou

#[derive(Debug, Clone, Args, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub struct AnalyzeOuArgs {
    /// IsotropicOUSpec JSON (default: the reference parameter set).
    #[arg(long)]
    pub spec: Option<PathBuf>,
    /// Seed of the reference parameter set.
    #[arg(long, default_value_t = 0)]
    pub reference_seed: u64,
    /// λ̃ grid: `lo,hi,points` on a log scale.
    #[arg(long, value_delimiter = ',', default_value = "1e-3,1e2,40")]
    pub lambda_grid: Vec<f64>,
    /// Add a λ̃ = 0 row (unregularised minimiser family).
    #[arg(long)]
    pub include_zero: bool,
    /// λ̃ used for the report and the D̂ sweep.
    #[arg(long, default_value_t = 0.1)]
    pub lambda: f64,
    /// Number of D̂ values in `[0, 2D]`.
    #[arg(long, default_value_t = 21)]
    pub dhat_points: usize,
    /// Sample sizes for the variance sweep.
    #[arg(long, value_delimiter = ',', default_value = "1000,2000,4000,8000,16000")]
    pub variance_n: Vec<usize>,
    /// Snapshot spacings for the variance sweep.
    #[arg(long, value_delimiter = ',', default_value = "0.05,0.1,0.2")]
    pub variance_dt: Vec<f64>,
    /// Regularisation `λK` held fixed across the variance sweep (`λ̃ = λK`).
    #[arg(long, default_value_t = 0.2)]
    pub variance_lambda_k: f64,
    #[arg(long, default_value_t = 1000)]
    pub draws: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long, default_value = "out/analyze-ou")]
    pub out: PathBuf,
}

pub fn analyze_ou(a: AnalyzeOuArgs) -> Result<()> {
    let mut run = Run::new("analyze-ou", &a, &a.out)?;
    let spec = match &a.spec {
        Some(p) => {
            run.input(p)?;
            let s: IsotropicOUSpec = serde_json::from_str(&fs::read_to_string(p)?)?;
            s.validate()?;
            s
        }
        None => IsotropicOUSpec::reference(a.reference_seed),
    };
    let d = spec.dim();
    let dtrue = DMatrix::identity(d, d) * spec.diffusion;
    let omega = spec.omega();

    let report = theory_report(&spec, a.lambda, LambdaConvention::Continuous, &dtrue, 0.0, None)?;
    run.write_json("theory_report.json", &report)?;

    let [lo, hi, pts] = a.lambda_grid[..] else { bail!("--lambda-grid takes three values, lo,hi,points") };
    let pts = pts as usize;
    if !(lo > 0.0 && hi > lo && pts >= 2) {
        bail!("--lambda-grid needs 0 < lo < hi and at least 2 points");
    }
    let mut csv = String::from("lambda_tilde,bias,kernel_dim\n");
    if a.include_zero {
        let fam = no_regularization_family(&spec, &dtrue, 0.0);
        csv.push_str(&format!("0,{},{}\n", relative_bias(&fam.particular, &omega), fam.kernel_dim));
    }
    for i in 0..pts {
        let lt = lo * (hi / lo).powf(i as f64 / (pts - 1) as f64);
        let om = analytic_minimizer(&spec, lt, &dtrue, 0.0)?;
        csv.push_str(&format!("{lt},{},0\n", relative_bias(&om, &omega)));
    }
    run.write("bias_vs_lambda.csv", csv.as_bytes())?;

    let dh: Vec<f64> = (0..a.dhat_points).map(|i| 2.0 * spec.diffusion * i as f64 / (a.dhat_points - 1).max(1) as f64).collect();
    let biases: Vec<f64> = dh
        .iter()
        .map(|&v| analytic_minimizer(&spec, a.lambda, &(DMatrix::identity(d, d) * v), 0.0).map(|m| relative_bias(&m, &omega)))
        .collect::<pfi::Result<_>>()?;
    let argmin = biases.iter().enumerate().min_by(|x, y| x.1.total_cmp(y.1)).map(|(i, _)| i).unwrap_or(0);
    let mut csv = String::from("d_hat,bias,is_min\n");
    for (i, (v, b)) in dh.iter().zip(&biases).enumerate() {
        csv.push_str(&format!("{v},{b},{}\n", u8::from(i == argmin)));
    }
    run.write("bias_vs_dhat.csv", csv.as_bytes())?;
    println!("D̂ sweep minimum at {} (true D = {})", dh[argmin], spec.diffusion);

    let mut csv = String::from("n,dt,lambda_tilde,variance,scaled\n");
    for &dt in &a.variance_dt {
        let lt = a.variance_lambda_k;
        for &n in &a.variance_n {
            let v = variance_estimate(&spec, lt, n, dt, a.draws, a.seed)?;
            let scaled = v * n as f64 * dt * dt / omega.norm_squared();
            csv.push_str(&format!("{n},{dt},{lt},{v},{scaled}\n"));
        }
    }
    run.write("variance.csv", csv.as_bytes())?;
    run.finish()?;
    Ok(())
}

// ---------------------------------------------------------------------------
// evaluate

#[derive(Debug, Clone, Args, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub struct EvaluateArgs {
    #[arg(long)]
    pub data: PathBuf,
    /// Force checkpoint written by `infer`.
    #[arg(long)]
    pub force: PathBuf,
    /// Ground-truth network (default: the dataset's, when built in).
    #[arg(long)]
    pub truth: Option<String>,
    /// Samples per snapshot used for Jacobians and flow comparisons.
    #[arg(long, default_value_t = 300)]
    pub eval_samples: usize,
    /// Starting points for the fixed-point search.
    #[arg(long, default_value_t = 200)]
    pub fixed_point_starts: usize,
    /// Samples simulated from the inferred SDE per snapshot.
    #[arg(long, default_value_t = 500)]
    pub sim_samples: usize,
    #[arg(long, default_value_t = 1e-3)]
    pub sim_dt: f64,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long, default_value = "out/evaluate")]
    pub out: PathBuf,
}

pub fn evaluate(a: EvaluateArgs) -> Result<()> {
    let mut run = Run::new("evaluate", &a, &a.out)?;
    let (ds, hash) = load_dataset(&mut run, &a.data)?;
    let (force, noise) = force_from_checkpoint(&load_checkpoint(&mut run, &a.force, Some(&hash))?)?;
    if force.dim() != ds.dim() {
        bail!("force dimension {} does not match the dataset ({})", force.dim(), ds.dim());
    }
    let truth = match &a.truth {
        Some(t) => Some(load_network(t, ds.meta.volume)?),
        None => dataset_network(&ds),
    };
    let cloud = pooled(&ds, a.eval_samples);
    let t_mid = ds.times[ds.times.len() / 2];
    let mut report = serde_json::Map::new();

    let jac = regulatory_jacobian(&force, &cloud, t_mid);
    report.insert("regulatory_jacobian".into(), serde_json::to_value(&jac)?);
    if let Some(net) = &truth {
        let gt = GroundTruthNetwork { adjacency: net.signed_adjacency() };
        let pr = grn_pr_auc(&jac, &gt);
        println!("PR-AUC {:.3} ({} true edges)", pr.auc, gt.positives());
        report.insert("pr".into(), serde_json::to_value(&pr)?);

        let mut num = 0.0;
        let mut den = 0.0;
        let mut cos = Vec::new();
        for (t, snap) in ds.times.iter().zip(&ds.snapshots) {
            let x = subsample(snap, a.eval_samples);
            let est = force.eval(&x, *t);
            let mut tru = DMatrix::zeros(x.nrows(), x.ncols());
            for (j, col) in x.column_iter().enumerate() {
                let c: Vec<f64> = col.iter().copied().collect();
                tru.set_column(j, &DVector::from_vec(net.drift(&c)));
            }
            num += (&est - &tru).norm_squared();
            den += tru.norm_squared();
            let fa = |c: &PointCloud| force.eval(c, *t);
            let fb = |_: &PointCloud| tru.clone();
            cos.push(flowline_cosine(&fa, &fb, std::slice::from_ref(&x)).remove(0));
        }
        let rel = num / den;
        println!("force relative error {rel:.4} (sqrt {:.4})", rel.sqrt());
        report.insert("force_relative_sq_error".into(), json!(rel));
        report.insert("force_cosine".into(), serde_json::to_value(&cos)?);
    }

    let starts = subsample(ds.snapshots.last().expect("dataset has snapshots"), a.fixed_point_starts);
    let v = |x: &DVector<f64>| force.eval_point(x, t_mid);
    let fps = find_fixed_points(&v, &starts, FixedPointConfig::default());
    println!("{} fixed points ({} starts did not converge)", fps.points.len(), fps.nonconverged);
    report.insert("fixed_points".into(), serde_json::to_value(&fps)?);

    let process = InferredProcess { force: &force, noise: &noise };
    let x0 = subsample(&ds.snapshots[0], a.sim_samples);
    let sim = sde_simulate(&process, &x0, &ds.times, a.sim_dt, a.seed, Purpose::Evaluation, 0, SdeOptions { clamp_nonneg: ds.meta.space == SpaceTag::Concentration, hook: None });
    let eds: Vec<f64> =
        sim.snapshots.iter().zip(&ds.snapshots).map(|(s, d)| energy_distance(s, &subsample(d, a.sim_samples))).collect();
    println!("energy distance to data per snapshot: {}", eds.iter().map(|e| format!("{e:.3}")).collect::<Vec<_>>().join(" "));
    report.insert("energy_distance".into(), json!(eds));

    run.write_json("evaluation.json", &report)?;
    run.finish()?;
    Ok(())
}

// ---------------------------------------------------------------------------
// perturb

#[derive(Debug, Clone, Args, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub struct PerturbArgs {
    /// Reference dataset; its last snapshot is the unperturbed state.
    #[arg(long)]
    pub data: PathBuf,
    /// Inferred force checkpoint; without it the true network's CLE is used.
    #[arg(long)]
    pub force: Option<PathBuf>,
    /// Genes to knock down, by name.
    #[arg(long, value_delimiter = ',')]
    pub genes: Vec<String>,
    /// Number of cell-type clusters.
    #[arg(long, default_value_t = 4)]
    pub clusters: usize,
    /// Cells simulated per initial condition.
    #[arg(long, default_value_t = 500)]
    pub cells: usize,
    #[arg(long, default_value_t = 2.0)]
    pub t_end: f64,
    #[arg(long, default_value_t = 1e-3)]
    pub dt: f64,
    #[arg(long, default_value_t = 0.95)]
    pub threshold: f64,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long, default_value = "out/perturb")]
    pub out: PathBuf,
}

pub fn perturb(a: PerturbArgs) -> Result<()> {
    let mut run = Run::new("perturb", &a, &a.out)?;
    let (ds, hash) = load_dataset(&mut run, &a.data)?;
    let last = ds.snapshots.last().expect("dataset has snapshots");
    let lineages: &[(&str, &[&str])] = if ds.meta.network == "hsc" { &HSC_LINEAGES } else { &[] };
    let profiles = reference_profiles(last, a.clusters, a.seed, &ds.species, lineages)?;
    let base = subsample(last, a.cells);
    let genes: Vec<Option<usize>> = std::iter::once(Ok(None))
        .chain(a.genes.iter().map(|g| {
            ds.species.iter().position(|s| s == g).map(Some).with_context(|| format!("gene '{g}' not in dataset"))
        }))
        .collect::<Result<_>>()?;
    let cfg = KnockdownConfig { t_end: a.t_end, dt: a.dt, threshold: a.threshold, seed: a.seed, ..Default::default() };

    let truth_net;
    let fitted;
    let process: Box<dyn DiffusionProcess + '_> = match &a.force {
        Some(p) => {
            fitted = force_from_checkpoint(&load_checkpoint(&mut run, p, Some(&hash))?)?;
            Box::new(InferredProcess { force: &fitted.0, noise: &fitted.1 })
        }
        None => {
            truth_net = dataset_network(&ds).with_context(|| format!("network '{}' is not built in; pass --force", ds.meta.network))?;
            Box::new(ChemicalLangevin { net: &truth_net })
        }
    };
    let mut outcomes = Vec::new();
    let mut csv = String::from("gene,cell_type,probability\n");
    for g in genes {
        let o = knockdown_experiment(&*process, g, &base, &profiles, &cfg);
        let name = g.map_or("none".to_string(), |i| ds.species[i].clone());
        for (t, p) in o.cell_types.iter().zip(&o.probability) {
            csv.push_str(&format!("{name},{t},{p}\n"));
        }
        println!(
            "knockdown {name:<8} {}",
            o.cell_types.iter().zip(&o.probability).map(|(t, p)| format!("{t} {p:.3}")).collect::<Vec<_>>().join("  ")
        );
        outcomes.push(json!({ "gene_name": name, "outcome": o }));
    }
    run.write_json("profiles.json", &profiles)?;
    run.write_json("perturbation.json", &outcomes)?;
    run.write("perturbation.csv", csv.as_bytes())?;
    run.finish()?;
    Ok(())
}
