//! Force inference through the probability-flow ODE.
//!
//! Samples observed at `t_{i-1}` are pushed along
//! `dx/dt = f(x) − ∇·D(x) − D(x) s(x, t)` to `t_i` and compared with the
//! samples observed there. Every step is recorded on an [`autodiff::Tape`]
//! so the loss is differentiated through the unrolled integrator.
//!
//! Diffusion tensors follow the `dx = f dt + sqrt(2D) dW` convention.

use std::rc::Rc;

use nalgebra::{DMatrix, DVector};
use rand::seq::index::sample as sample_indices;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Tape, Var};
use crate::error::{PfiError, Result};
use crate::gaussian::{fit_gaussian, w2_gaussian, PointCloud};
use crate::linalg::{sqrtm_psd, sym_apply};
use crate::nn::{Checkpoint, FeedforwardNet, NetVars};
use crate::optim::{lbfgs, Adam, AdamConfig, LbfgsConfig};
use crate::par;
use crate::rng::{stream, Purpose, Rng};
use crate::score::ScoreFn;
use crate::srn::{DiffusionProcess, SnapshotDataset};

// ---------------------------------------------------------------------------
// Tape helpers

fn ones(tape: &mut Tape, r: usize, c: usize) -> Var {
    tape.constant(DMatrix::from_element(r, c, 1.0))
}

/// Constant `d × n` matrix whose row `i` is `v[i]`.
fn row_constant(tape: &mut Tape, v: &[f64], n: usize) -> Var {
    tape.constant(DMatrix::from_fn(v.len(), n, |i, _| v[i]))
}

fn unit_tangent(d: usize, n: usize, j: usize) -> DMatrix<f64> {
    DMatrix::from_fn(d, n, |i, _| if i == j { 1.0 } else { 0.0 })
}

/// Column `j` of every per-sample Jacobian, `d × n`.
fn jacobian_columns(tape: &mut Tape, x: Var, f: Var) -> Vec<Var> {
    let (d, n) = tape.shape(x);
    (0..d)
        .map(|j| {
            let e = tape.constant(unit_tangent(d, n, j));
            tape.jvp(x, e, f)
        })
        .collect()
}

fn stack_rows(tape: &mut Tape, rows: Vec<Var>) -> Var {
    let mut it = rows.into_iter();
    let mut acc = it.next().expect("at least one row");
    for r in it {
        acc = tape.concat_rows(acc, r);
    }
    acc
}

// ---------------------------------------------------------------------------
// Noise models

/// Prior on the diffusion tensor.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum NoiseModel {
    /// Chemical Langevin noise in concentration space. With degradation
    /// rates `ℓ` and production `p(x) = f(x) + ℓ∘x`,
    /// `D = diag(p⁺ + ℓ∘x⁺) / (2V)`.
    Cle { ell: Vec<f64>, volume: f64 },
    /// `D = σ²/2 · I`.
    Additive { sigma: f64 },
    /// `D = σ²/2 · diag(x⁺)`.
    SqrtState { sigma: f64 },
    Deterministic,
    ConstantTensor { d: DMatrix<f64> },
}

impl NoiseModel {
    pub fn validate(&self, dim: usize) -> Result<()> {
        let bad = |m: &str| Err(PfiError::InvalidParameter(m.to_string()));
        match self {
            NoiseModel::Cle { ell, volume } => {
                if ell.len() != dim {
                    return Err(PfiError::Dimension(format!("CLE needs {dim} degradation rates, got {}", ell.len())));
                }
                if !(*volume > 0.0) || ell.iter().any(|l| !(*l >= 0.0)) {
                    return bad("CLE needs volume > 0 and nonnegative degradation rates");
                }
            }
            NoiseModel::Additive { sigma } | NoiseModel::SqrtState { sigma } => {
                if !(sigma.is_finite() && *sigma >= 0.0) {
                    return bad("sigma must be finite and nonnegative");
                }
            }
            NoiseModel::Deterministic => {}
            NoiseModel::ConstantTensor { d } => {
                if d.shape() != (dim, dim) {
                    return Err(PfiError::Dimension("constant diffusion tensor".into()));
                }
                let (vals, _) = crate::linalg::sym_eigen_desc(&crate::linalg::symmetrize(d));
                if crate::linalg::relative_asymmetry(d) > 1e-12 || vals.iter().any(|v| *v < -1e-12) {
                    return Err(PfiError::NotPositiveDefinite("diffusion tensor must be symmetric PSD".into()));
                }
            }
        }
        Ok(())
    }

    pub fn name(&self) -> &'static str {
        match self {
            NoiseModel::Cle { .. } => "cle",
            NoiseModel::Additive { .. } => "additive",
            NoiseModel::SqrtState { .. } => "sqrt_state",
            NoiseModel::Deterministic => "deterministic",
            NoiseModel::ConstantTensor { .. } => "constant_tensor",
        }
    }

    /// `D(x)` at one state given the force value there.
    pub fn diffusion(&self, x: &DVector<f64>, f: &DVector<f64>) -> DMatrix<f64> {
        let d = x.len();
        match self {
            NoiseModel::Cle { ell, volume } => DMatrix::from_fn(d, d, |i, j| {
                if i != j {
                    return 0.0;
                }
                ((f[i] + ell[i] * x[i]).max(0.0) + ell[i] * x[i].max(0.0)) / (2.0 * volume)
            }),
            NoiseModel::Additive { sigma } => DMatrix::identity(d, d) * (0.5 * sigma * sigma),
            NoiseModel::SqrtState { sigma } => {
                DMatrix::from_diagonal(&x.map(|v| 0.5 * sigma * sigma * v.max(0.0)))
            }
            NoiseModel::Deterministic => DMatrix::zeros(d, d),
            NoiseModel::ConstantTensor { d: m } => m.clone(),
        }
    }
}

/// How `∇·D` is obtained for force-dependent noise.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize, Default)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum DivergenceMode {
    /// Forward-mode derivative of the force network.
    #[default]
    Exact,
    /// Central differences with step `h` (still differentiable in θ).
    FiniteDifference { h: f64 },
}

// ---------------------------------------------------------------------------
// Force models

/// Parametric force field. Network variants subtract a known linear
/// degradation `ℓ∘x` when `degradation` is nonempty.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum ForceModel {
    Linear {
        omega: DMatrix<f64>,
    },
    Neural {
        net: FeedforwardNet,
        #[serde(default)]
        degradation: Vec<f64>,
    },
    /// Network on `[x; t]`.
    NeuralTimeDependent {
        net: FeedforwardNet,
        #[serde(default)]
        degradation: Vec<f64>,
    },
    /// `f = −∇Ψ − ℓ∘x` for a scalar network `Ψ`.
    PotentialGradient {
        net: FeedforwardNet,
        #[serde(default)]
        degradation: Vec<f64>,
    },
}

/// Force checkpoint: the network (a bias-free linear layer for
/// [`ForceModel::Linear`]) plus the full model and noise prior in `extra`.
pub fn force_checkpoint(force: &ForceModel, noise: &NoiseModel, seed: u64, dataset_hash: String) -> Result<Checkpoint> {
    let net = match force {
        ForceModel::Linear { omega } => {
            let mut n = FeedforwardNet::zeros(&[omega.ncols(), omega.nrows()]);
            n.weights[0] = omega.clone();
            n
        }
        ForceModel::Neural { net, .. } | ForceModel::NeuralTimeDependent { net, .. } | ForceModel::PotentialGradient { net, .. } => {
            net.clone()
        }
    };
    let mut ck = Checkpoint::new("force", net, seed, dataset_hash);
    ck.extra.insert("force".into(), serde_json::to_value(force)?);
    ck.extra.insert("noise".into(), serde_json::to_value(noise)?);
    Ok(ck)
}

/// Inverse of [`force_checkpoint`].
pub fn force_from_checkpoint(ck: &Checkpoint) -> Result<(ForceModel, NoiseModel)> {
    if ck.kind != "force" {
        return Err(PfiError::Integrity(format!("expected a force checkpoint, found '{}'", ck.kind)));
    }
    let get = |k: &str| ck.extra.get(k).cloned().ok_or_else(|| PfiError::Parse(format!("force checkpoint lacks '{k}'")));
    let force: ForceModel = serde_json::from_value(get("force")?)?;
    let noise: NoiseModel = serde_json::from_value(get("noise")?)?;
    force.validate()?;
    noise.validate(force.dim())?;
    Ok((force, noise))
}

/// Parameters of a [`ForceModel`] placed on a tape.
#[derive(Debug, Clone)]
pub enum ForceVars {
    Linear(Var),
    Net(NetVars),
}

impl ForceVars {
    pub fn all(&self) -> Vec<Var> {
        match self {
            ForceVars::Linear(v) => vec![*v],
            ForceVars::Net(n) => n.all(),
        }
    }
}

/// `∇_x Ψ` for a scalar-output network, built from tape primitives so it
/// can be differentiated again.
fn potential_gradient(tape: &mut Tape, vars: &NetVars, x: Var) -> Var {
    let n = tape.shape(x).1;
    let last = vars.weights.len() - 1;
    let mut pre = Vec::with_capacity(last);
    let mut a = x;
    for l in 0..last {
        let z = tape.matmul(vars.weights[l], a);
        let z = tape.add_bias(z, vars.biases[l]);
        pre.push(z);
        a = tape.elu(z);
    }
    let seed = ones(tape, 1, n);
    let wt = tape.transpose(vars.weights[last]);
    let mut g = tape.matmul(wt, seed);
    for l in (0..last).rev() {
        let dz = tape.elu_deriv(pre[l], 1);
        g = tape.hadamard(g, dz);
        let wt = tape.transpose(vars.weights[l]);
        g = tape.matmul(wt, g);
    }
    g
}

impl ForceModel {
    pub fn linear_zero(d: usize) -> Self {
        ForceModel::Linear { omega: DMatrix::zeros(d, d) }
    }

    pub fn neural(d: usize, hidden: &[usize], degradation: Vec<f64>, rng: &mut Rng) -> Self {
        ForceModel::Neural { net: FeedforwardNet::new(d, hidden, d, rng), degradation }
    }

    pub fn neural_time_dependent(d: usize, hidden: &[usize], degradation: Vec<f64>, rng: &mut Rng) -> Self {
        ForceModel::NeuralTimeDependent { net: FeedforwardNet::new(d + 1, hidden, d, rng), degradation }
    }

    pub fn potential(d: usize, hidden: &[usize], degradation: Vec<f64>, rng: &mut Rng) -> Self {
        ForceModel::PotentialGradient { net: FeedforwardNet::new(d, hidden, 1, rng), degradation }
    }

    pub fn name(&self) -> &'static str {
        match self {
            ForceModel::Linear { .. } => "linear",
            ForceModel::Neural { .. } => "neural",
            ForceModel::NeuralTimeDependent { .. } => "neural_time_dependent",
            ForceModel::PotentialGradient { .. } => "potential_gradient",
        }
    }

    pub fn dim(&self) -> usize {
        match self {
            ForceModel::Linear { omega } => omega.nrows(),
            ForceModel::Neural { net, .. } | ForceModel::PotentialGradient { net, .. } => net.input_dim(),
            ForceModel::NeuralTimeDependent { net, .. } => net.output_dim(),
        }
    }

    pub fn degradation(&self) -> &[f64] {
        match self {
            ForceModel::Linear { .. } => &[],
            ForceModel::Neural { degradation, .. }
            | ForceModel::NeuralTimeDependent { degradation, .. }
            | ForceModel::PotentialGradient { degradation, .. } => degradation,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let d = self.dim();
        match self {
            ForceModel::Linear { omega } => {
                if !omega.is_square() {
                    return Err(PfiError::Dimension("linear force must be square".into()));
                }
            }
            ForceModel::Neural { net, .. } => {
                net.validate()?;
                if net.output_dim() != d {
                    return Err(PfiError::Dimension("force net must map R^d to R^d".into()));
                }
            }
            ForceModel::NeuralTimeDependent { net, .. } => {
                net.validate()?;
                if net.input_dim() != d + 1 {
                    return Err(PfiError::Dimension("time-dependent force net takes [x; t]".into()));
                }
            }
            ForceModel::PotentialGradient { net, .. } => {
                net.validate()?;
                if net.output_dim() != 1 {
                    return Err(PfiError::Dimension("potential net must be scalar".into()));
                }
            }
        }
        let deg = self.degradation();
        if !deg.is_empty() && deg.len() != d {
            return Err(PfiError::Dimension(format!("{} degradation rates for dimension {d}", deg.len())));
        }
        Ok(())
    }

    pub fn num_params(&self) -> usize {
        match self {
            ForceModel::Linear { omega } => omega.len(),
            ForceModel::Neural { net, .. }
            | ForceModel::NeuralTimeDependent { net, .. }
            | ForceModel::PotentialGradient { net, .. } => net.num_params(),
        }
    }

    pub fn params(&self) -> Vec<f64> {
        match self {
            ForceModel::Linear { omega } => omega.as_slice().to_vec(),
            ForceModel::Neural { net, .. }
            | ForceModel::NeuralTimeDependent { net, .. }
            | ForceModel::PotentialGradient { net, .. } => net.params(),
        }
    }

    pub fn set_params(&mut self, p: &[f64]) {
        match self {
            ForceModel::Linear { omega } => omega.as_mut_slice().copy_from_slice(p),
            ForceModel::Neural { net, .. }
            | ForceModel::NeuralTimeDependent { net, .. }
            | ForceModel::PotentialGradient { net, .. } => net.set_params(p),
        }
    }

    pub fn to_tape(&self, tape: &mut Tape, trainable: bool) -> ForceVars {
        match self {
            ForceModel::Linear { omega } => {
                ForceVars::Linear(if trainable { tape.variable(omega.clone()) } else { tape.constant(omega.clone()) })
            }
            ForceModel::Neural { net, .. }
            | ForceModel::NeuralTimeDependent { net, .. }
            | ForceModel::PotentialGradient { net, .. } => ForceVars::Net(net.to_tape(tape, trainable)),
        }
    }

    /// Force at every column of `x` (a tape node) at time `t`.
    pub fn apply(&self, tape: &mut Tape, vars: &ForceVars, x: Var, t: f64) -> Var {
        let n = tape.shape(x).1;
        let raw = match (self, vars) {
            (ForceModel::Linear { .. }, ForceVars::Linear(w)) => return tape.matmul(*w, x),
            (ForceModel::Neural { .. }, ForceVars::Net(v)) => FeedforwardNet::apply(tape, v, x),
            (ForceModel::NeuralTimeDependent { .. }, ForceVars::Net(v)) => {
                let tc = tape.constant(DMatrix::from_element(1, n, t));
                let inp = tape.concat_rows(x, tc);
                FeedforwardNet::apply(tape, v, inp)
            }
            (ForceModel::PotentialGradient { .. }, ForceVars::Net(v)) => {
                let g = potential_gradient(tape, v, x);
                tape.neg(g)
            }
            _ => panic!("force variables do not match the model"),
        };
        let deg = self.degradation();
        if deg.is_empty() {
            return raw;
        }
        let l = row_constant(tape, deg, n);
        let lx = tape.hadamard(l, x);
        tape.sub(raw, lx)
    }

    /// Force at every column of `x`.
    pub fn eval(&self, x: &DMatrix<f64>, t: f64) -> DMatrix<f64> {
        let mut tape = Tape::new();
        let vars = self.to_tape(&mut tape, false);
        let xv = tape.constant(x.clone());
        let f = self.apply(&mut tape, &vars, xv, t);
        tape.value(f).clone()
    }

    pub fn eval_point(&self, x: &DVector<f64>, t: f64) -> DVector<f64> {
        let m = self.eval(&DMatrix::from_column_slice(x.len(), 1, x.as_slice()), t);
        m.column(0).into_owned()
    }

    /// Exact Jacobian `∂f/∂x` at one state.
    pub fn jacobian_at(&self, x: &DVector<f64>, t: f64) -> DMatrix<f64> {
        let mut tape = Tape::new();
        let vars = self.to_tape(&mut tape, false);
        let xv = tape.constant(DMatrix::from_column_slice(x.len(), 1, x.as_slice()));
        let f = self.apply(&mut tape, &vars, xv, t);
        let cols = jacobian_columns(&mut tape, xv, f);
        let d = x.len();
        DMatrix::from_fn(d, d, |i, j| tape.value(cols[j])[(i, 0)])
    }
}

// ---------------------------------------------------------------------------
// Probability-flow right-hand side and pushforward

/// What the velocity field needs besides the force.
#[derive(Clone, Copy)]
pub struct FlowContext<'a> {
    pub noise: &'a NoiseModel,
    pub score: &'a dyn ScoreFn,
    pub divergence: DivergenceMode,
}

/// `∂f_i/∂x_i` for every sample, `d × n`.
fn jacobian_diagonal(
    tape: &mut Tape,
    force: &ForceModel,
    vars: &ForceVars,
    x: Var,
    f: Var,
    t: f64,
    mode: DivergenceMode,
) -> Var {
    let (d, n) = tape.shape(x);
    let rows = match mode {
        DivergenceMode::Exact => {
            let cols = jacobian_columns(tape, x, f);
            cols.into_iter().enumerate().map(|(j, c)| tape.slice_rows(c, j, 1)).collect()
        }
        DivergenceMode::FiniteDifference { h } => (0..d)
            .map(|j| {
                let e = tape.constant(unit_tangent(d, n, j) * h);
                let xp = tape.add(x, e);
                let xm = tape.sub(x, e);
                let fp = force.apply(tape, vars, xp, t);
                let fm = force.apply(tape, vars, xm, t);
                let diff = tape.sub(fp, fm);
                let row = tape.slice_rows(diff, j, 1);
                tape.scale(row, 0.5 / h)
            })
            .collect(),
    };
    stack_rows(tape, rows)
}

/// Probability-flow velocity `f − ∇·D − D s` on the tape.
pub fn pf_rhs_tape(tape: &mut Tape, force: &ForceModel, vars: &ForceVars, ctx: FlowContext<'_>, x: Var, t: f64) -> Var {
    let f = force.apply(tape, vars, x, t);
    let (_, n) = tape.shape(x);
    match ctx.noise {
        NoiseModel::Deterministic => f,
        NoiseModel::Additive { sigma } => {
            let s = ctx.score.on_tape(tape, x, t);
            let ds = tape.scale(s, 0.5 * sigma * sigma);
            tape.sub(f, ds)
        }
        NoiseModel::SqrtState { sigma } => {
            let c = 0.5 * sigma * sigma;
            let s = ctx.score.on_tape(tape, x, t);
            let xp = tape.relu(x);
            let ds = tape.hadamard(xp, s);
            let ds = tape.scale(ds, c);
            let div = tape.constant(tape.value(x).map(|v| if v > 0.0 { c } else { 0.0 }));
            let v = tape.sub(f, div);
            tape.sub(v, ds)
        }
        NoiseModel::ConstantTensor { d } => {
            let s = ctx.score.on_tape(tape, x, t);
            let dm = tape.constant(d.clone());
            let ds = tape.matmul(dm, s);
            tape.sub(f, ds)
        }
        NoiseModel::Cle { ell, volume } => {
            let k = 0.5 / volume;
            let l = row_constant(tape, ell, n);
            let lx = tape.hadamard(l, x);
            let prod = tape.add(f, lx);
            let on = Rc::new(tape.value(prod).map(|v| if v > 0.0 { 1.0 } else { 0.0 }));
            let prod_pos = tape.mask(prod, on.clone());
            let xp = tape.relu(x);
            let lxp = tape.hadamard(l, xp);
            let dsum = tape.add(prod_pos, lxp);
            let diag = tape.scale(dsum, k);
            let jd = jacobian_diagonal(tape, force, vars, x, f, t, ctx.divergence);
            let jdl = tape.add(jd, l);
            let dprod = tape.mask(jdl, on);
            let ddeg = tape.constant(DMatrix::from_fn(ell.len(), n, |i, j| {
                if tape.value(x)[(i, j)] > 0.0 {
                    ell[i]
                } else {
                    0.0
                }
            }));
            let div = tape.add(dprod, ddeg);
            let div = tape.scale(div, k);
            let s = ctx.score.on_tape(tape, x, t);
            let ds = tape.hadamard(diag, s);
            let v = tape.sub(f, div);
            tape.sub(v, ds)
        }
    }
}

/// Probability-flow velocity at every column of `x`.
pub fn pf_rhs(force: &ForceModel, ctx: FlowContext<'_>, x: &DMatrix<f64>, t: f64) -> DMatrix<f64> {
    let mut tape = Tape::new();
    let vars = force.to_tape(&mut tape, false);
    let xv = tape.constant(x.clone());
    let v = pf_rhs_tape(&mut tape, force, &vars, ctx, xv, t);
    tape.value(v).clone()
}

/// `(D_ii, (∇·D)_i)` of the noise prior at every column of `x`, `d × n` each.
pub fn noise_diag_and_divergence(
    force: &ForceModel,
    noise: &NoiseModel,
    x: &DMatrix<f64>,
    t: f64,
) -> (DMatrix<f64>, DMatrix<f64>) {
    let (d, n) = x.shape();
    match noise {
        NoiseModel::Cle { ell, volume } => {
            let f = force.eval(x, t);
            let diag = DMatrix::from_fn(d, n, |i, j| {
                ((f[(i, j)] + ell[i] * x[(i, j)]).max(0.0) + ell[i] * x[(i, j)].max(0.0)) / (2.0 * volume)
            });
            let jacs: Vec<DMatrix<f64>> = (0..n).map(|j| force.jacobian_at(&x.column(j).into_owned(), t)).collect();
            let div = DMatrix::from_fn(d, n, |i, j| {
                let p = f[(i, j)] + ell[i] * x[(i, j)];
                let dp = if p > 0.0 { jacs[j][(i, i)] + ell[i] } else { 0.0 };
                let dx = if x[(i, j)] > 0.0 { ell[i] } else { 0.0 };
                (dp + dx) / (2.0 * volume)
            });
            (diag, div)
        }
        NoiseModel::Additive { sigma } => (DMatrix::from_element(d, n, 0.5 * sigma * sigma), DMatrix::zeros(d, n)),
        NoiseModel::SqrtState { sigma } => {
            let c = 0.5 * sigma * sigma;
            (x.map(|v| c * v.max(0.0)), x.map(|v| if v > 0.0 { c } else { 0.0 }))
        }
        NoiseModel::Deterministic => (DMatrix::zeros(d, n), DMatrix::zeros(d, n)),
        NoiseModel::ConstantTensor { d: m } => {
            (DMatrix::from_fn(d, n, |i, _| m[(i, i)]), DMatrix::zeros(d, n))
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum Integrator {
    /// One explicit Euler step per substep.
    Euler,
    #[default]
    Rk4,
}

/// Pushes a tape cloud from `t0` to `t1` with `steps` fixed substeps.
#[allow(clippy::too_many_arguments)]
pub fn push_on_tape(
    tape: &mut Tape,
    force: &ForceModel,
    vars: &ForceVars,
    ctx: FlowContext<'_>,
    x: Var,
    t0: f64,
    t1: f64,
    steps: usize,
    integrator: Integrator,
) -> Var {
    assert!(steps >= 1, "steps must be at least 1");
    let h = (t1 - t0) / steps as f64;
    let mut x = x;
    for k in 0..steps {
        let t = t0 + k as f64 * h;
        x = match integrator {
            Integrator::Euler => {
                let v = pf_rhs_tape(tape, force, vars, ctx, x, t);
                let dx = tape.scale(v, h);
                tape.add(x, dx)
            }
            Integrator::Rk4 => {
                let k1 = pf_rhs_tape(tape, force, vars, ctx, x, t);
                let s = tape.scale(k1, h / 2.0);
                let x2 = tape.add(x, s);
                let k2 = pf_rhs_tape(tape, force, vars, ctx, x2, t + h / 2.0);
                let s = tape.scale(k2, h / 2.0);
                let x3 = tape.add(x, s);
                let k3 = pf_rhs_tape(tape, force, vars, ctx, x3, t + h / 2.0);
                let s = tape.scale(k3, h);
                let x4 = tape.add(x, s);
                let k4 = pf_rhs_tape(tape, force, vars, ctx, x4, t + h);
                let a = tape.add(k1, k4);
                let b = tape.add(k2, k3);
                let b = tape.scale(b, 2.0);
                let sum = tape.add(a, b);
                let dx = tape.scale(sum, h / 6.0);
                tape.add(x, dx)
            }
        };
    }
    x
}

fn first_nonfinite_column(m: &DMatrix<f64>) -> Option<usize> {
    m.column_iter().position(|c| c.iter().any(|v| !v.is_finite()))
}

/// Integrates the probability-flow ODE for every sample of `cloud`.
#[allow(clippy::too_many_arguments)]
pub fn push_samples(
    force: &ForceModel,
    ctx: FlowContext<'_>,
    cloud: &PointCloud,
    t0: f64,
    t1: f64,
    steps: usize,
    integrator: Integrator,
) -> Result<PointCloud> {
    if steps == 0 {
        return Err(PfiError::InvalidParameter("steps must be at least 1".into()));
    }
    let mut tape = Tape::new();
    let vars = force.to_tape(&mut tape, false);
    let xv = tape.constant(cloud.clone());
    let out = push_on_tape(&mut tape, force, &vars, ctx, xv, t0, t1, steps, integrator);
    let out = tape.value(out).clone();
    if let Some(j) = first_nonfinite_column(&out) {
        return Err(PfiError::NonFinite(format!("pushed sample {j} left the finite range")));
    }
    Ok(out)
}

// ---------------------------------------------------------------------------
// Distances

/// Squared 2-Wasserstein distance between Gaussian fits of two clouds.
/// The flag reports whether either covariance had to be floored.
pub fn gaussian_w2_empirical(a: &PointCloud, b: &PointCloud) -> Result<(f64, bool)> {
    let fa = fit_gaussian(a)?;
    let fb = fit_gaussian(b)?;
    Ok((w2_gaussian(&fa.state, &fb.state)?, fa.floored || fb.floored))
}

/// [`gaussian_w2_empirical`] as a tape node differentiable in `a`.
pub fn gaussian_w2_tape(tape: &mut Tape, a: Var, b: &PointCloud) -> Result<(Var, bool)> {
    let av = tape.value(a).clone();
    let (d, n) = av.shape();
    let fa = fit_gaussian(&av)?;
    let fb = fit_gaussian(b)?;
    let value = w2_gaussian(&fa.state, &fb.state)?;
    // ∂/∂Σa of tr Σa − 2 tr (Σb^½ Σa Σb^½)^½ is I − Σb^½ M^{-½} Σb^½.
    let rb = sqrtm_psd(&fb.state.cov)?;
    let m = crate::linalg::symmetrize(&(&rb * &fa.state.cov * &rb));
    let top = m.trace().max(f64::MIN_POSITIVE);
    let m_inv_half = sym_apply(&m, |v| 1.0 / v.max(1e-300 * top).sqrt());
    let g_cov = DMatrix::identity(d, d) - &rb * m_inv_half * &rb;
    let dm = &fa.state.mean - &fb.state.mean;
    let mut grad = DMatrix::zeros(d, n);
    for j in 0..n {
        let c = av.column(j) - &fa.state.mean;
        let col = &dm * (2.0 / n as f64) + &g_cov * c * (2.0 / (n as f64 - 1.0));
        grad.set_column(j, &col);
    }
    Ok((tape.frozen_scalar(a, value, grad), fa.floored || fb.floored))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SinkhornConfig {
    pub eps: f64,
    /// Stop when the L1 marginal violation drops below this.
    pub tol: f64,
    pub max_iter: usize,
    /// Number of final iterations differentiated through (0 = envelope gradient).
    pub unroll: usize,
}

impl SinkhornConfig {
    pub fn new(eps: f64) -> Self {
        SinkhornConfig { eps, tol: 1e-9, max_iter: 10_000, unroll: 0 }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SinkhornSolution {
    pub f: DVector<f64>,
    pub g: DVector<f64>,
    /// Entropic transport cost `⟨f, a⟩ + ⟨g, b⟩`.
    pub value: f64,
    pub violation: f64,
    pub iterations: usize,
    pub converged: bool,
}

/// Squared-Euclidean cost matrix, `n × m`.
pub fn sq_cost(a: &PointCloud, b: &PointCloud) -> DMatrix<f64> {
    let na: Vec<f64> = a.column_iter().map(|c| c.norm_squared()).collect();
    let nb: Vec<f64> = b.column_iter().map(|c| c.norm_squared()).collect();
    let cross = a.transpose() * b;
    DMatrix::from_fn(a.ncols(), b.ncols(), |i, j| (na[i] + nb[j] - 2.0 * cross[(i, j)]).max(0.0))
}

fn logsumexp(it: impl Iterator<Item = f64> + Clone) -> f64 {
    let top = it.clone().fold(f64::NEG_INFINITY, f64::max);
    if top == f64::NEG_INFINITY {
        return top;
    }
    top + it.map(|v| (v - top).exp()).sum::<f64>().ln()
}

/// Soft c-transform: `out_i = −ε log Σ_j w exp((p_j − C_ji)/ε)` with `ct`
/// holding `C` with samples of the output side in columns.
fn c_transform(ct: &DMatrix<f64>, p: &DVector<f64>, eps: f64, log_w: f64) -> DVector<f64> {
    let vals = par::map_range(ct.ncols(), |i| {
        let col = ct.column(i);
        -eps * (logsumexp((0..col.len()).map(|j| (p[j] - col[j]) / eps)) + log_w)
    });
    DVector::from_vec(vals)
}

/// L1 violation of the row marginal of the plan `exp((f_i + g_j − C_ij)/ε)/(nm)`.
fn row_violation(ct: &DMatrix<f64>, f: &DVector<f64>, g: &DVector<f64>, eps: f64) -> f64 {
    let (m, n) = ct.shape();
    let scale = 1.0 / (n * m) as f64;
    let rows = par::map_range(n, |i| {
        let col = ct.column(i);
        let r: f64 = (0..m).map(|j| ((f[i] + g[j] - col[j]) / eps).exp()).sum::<f64>() * scale;
        (r - 1.0 / n as f64).abs()
    });
    par::kahan_sum(rows)
}

const CHECK_EVERY: usize = 10;

fn anneal_start(c: &DMatrix<f64>, eps: f64) -> f64 {
    c.max().max(eps)
}

/// Log-domain Sinkhorn between uniform clouds with ε-annealing from the
/// cost diameter down to `cfg.eps`.
pub fn sinkhorn_solve(a: &PointCloud, b: &PointCloud, cfg: &SinkhornConfig) -> SinkhornSolution {
    let (n, m) = (a.ncols(), b.ncols());
    let c = sq_cost(a, b);
    let ct = c.transpose();
    let (lw_a, lw_b) = (-(n as f64).ln(), -(m as f64).ln());
    let mut f = DVector::zeros(n);
    let mut g = DVector::zeros(m);
    let mut eps = anneal_start(&c, cfg.eps);
    let mut iterations = 0;
    let mut violation = f64::INFINITY;
    while iterations < cfg.max_iter {
        iterations += 1;
        f = c_transform(&ct, &g, eps, lw_b);
        g = c_transform(&c, &f, eps, lw_a);
        if eps > cfg.eps {
            eps = (eps * 0.5).max(cfg.eps);
            continue;
        }
        // The check costs half an iteration; amortise it.
        if iterations % CHECK_EVERY != 0 && iterations < cfg.max_iter {
            continue;
        }
        violation = row_violation(&ct, &f, &g, eps);
        if violation < cfg.tol {
            break;
        }
    }
    let value = f.mean() + g.mean();
    SinkhornSolution { f, g, value, violation, iterations, converged: violation < cfg.tol }
}

/// Symmetric Sinkhorn `OT_ε(a, a)` by averaged fixed-point iteration.
pub fn sinkhorn_self(a: &PointCloud, cfg: &SinkhornConfig) -> SinkhornSolution {
    let n = a.ncols();
    let c = sq_cost(a, a);
    let lw = -(n as f64).ln();
    let mut f = DVector::zeros(n);
    let mut eps = anneal_start(&c, cfg.eps);
    let mut iterations = 0;
    let mut violation = f64::INFINITY;
    while iterations < cfg.max_iter {
        iterations += 1;
        let tf = c_transform(&c, &f, eps, lw);
        f = (&f + tf) * 0.5;
        if eps > cfg.eps {
            eps = (eps * 0.5).max(cfg.eps);
            continue;
        }
        // The check costs half an iteration; amortise it.
        if iterations % CHECK_EVERY != 0 && iterations < cfg.max_iter {
            continue;
        }
        violation = row_violation(&c, &f, &f, eps);
        if violation < cfg.tol {
            break;
        }
    }
    let value = 2.0 * f.mean();
    SinkhornSolution { g: f.clone(), f, value, violation, iterations, converged: violation < cfg.tol }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SinkhornReport {
    pub value: f64,
    pub violation: f64,
    pub converged: bool,
}

/// Debiased divergence `OT(a,b) − ½OT(a,a) − ½OT(b,b)`.
pub fn sinkhorn_divergence_empirical(a: &PointCloud, b: &PointCloud, cfg: &SinkhornConfig) -> Result<SinkhornReport> {
    check_sinkhorn(a, b, cfg)?;
    let ab = sinkhorn_solve(a, b, cfg);
    let aa = sinkhorn_self(a, cfg);
    let bb = sinkhorn_self(b, cfg);
    Ok(SinkhornReport {
        value: ab.value - 0.5 * (aa.value + bb.value),
        violation: ab.violation.max(aa.violation).max(bb.violation),
        converged: ab.converged && aa.converged && bb.converged,
    })
}

fn check_sinkhorn(a: &PointCloud, b: &PointCloud, cfg: &SinkhornConfig) -> Result<()> {
    if !(cfg.eps > 0.0) {
        return Err(PfiError::InvalidParameter(format!("Sinkhorn needs eps > 0, got {}", cfg.eps)));
    }
    if a.ncols() == 0 || b.ncols() == 0 {
        return Err(PfiError::TooFewSamples { needed: 1, got: 0 });
    }
    if a.nrows() != b.nrows() {
        return Err(PfiError::Dimension("Sinkhorn clouds differ in dimension".into()));
    }
    Ok(())
}

/// Gradient of the converged transport cost in the positions of `a`,
/// treating the potentials as fixed; `self_term` doubles the contribution
/// because `a` sits on both sides.
fn envelope_grad(a: &PointCloud, b: &PointCloud, sol: &SinkhornSolution, eps: f64, self_term: bool) -> DMatrix<f64> {
    let (n, m) = (a.ncols(), b.ncols());
    let scale = 1.0 / (n * m) as f64;
    let factor = if self_term { 4.0 } else { 2.0 };
    let cols = par::map_range(n, |i| {
        let ai = a.column(i);
        let mut mass = 0.0;
        let mut bary = DVector::zeros(a.nrows());
        for j in 0..m {
            let bj = b.column(j);
            let p = ((sol.f[i] + sol.g[j] - (ai - bj).norm_squared()) / eps).exp() * scale;
            mass += p;
            bary += bj * p;
        }
        (ai * mass - bary) * factor
    });
    DMatrix::from_columns(&cols)
}

/// Tape cost matrix between a tape cloud and a constant cloud.
fn cost_tape(tape: &mut Tape, a: Var, b: Option<&PointCloud>) -> Var {
    let (d, n) = tape.shape(a);
    let row = ones(tape, 1, d);
    let sq = tape.square(a);
    let na = tape.matmul(row, sq);
    match b {
        Some(b) => {
            let m = b.ncols();
            let na_col = tape.transpose(na);
            let r = ones(tape, 1, m);
            let a2 = tape.matmul(na_col, r);
            let nb = DMatrix::from_fn(n, m, |_, j| b.column(j).norm_squared());
            let b2 = tape.constant(nb);
            let at = tape.transpose(a);
            let bc = tape.constant(b.clone());
            let cross = tape.matmul(at, bc);
            let cross = tape.scale(cross, -2.0);
            let s = tape.add(a2, b2);
            tape.add(s, cross)
        }
        None => {
            let na_col = tape.transpose(na);
            let r = ones(tape, 1, n);
            let a2 = tape.matmul(na_col, r);
            let a2t = tape.transpose(a2);
            let at = tape.transpose(a);
            let cross = tape.matmul(at, a);
            let cross = tape.scale(cross, -2.0);
            let s = tape.add(a2, a2t);
            tape.add(s, cross)
        }
    }
}

/// `−ε lse_j((p_j − C_ij)/ε) + ε log m` for an `n × m` tape cost and a
/// potential `p` (m×1) on the tape.
fn c_transform_tape(tape: &mut Tape, c: Var, p: Var, eps: f64) -> Var {
    let (n, m) = tape.shape(c);
    let col = ones(tape, n, 1);
    let pt = tape.transpose(p);
    let pm = tape.matmul(col, pt);
    let z = tape.sub(pm, c);
    let z = tape.scale(z, 1.0 / eps);
    let l = tape.lse_rows(z);
    let l = tape.scale(l, -eps);
    tape.add_scalar(l, eps * (m as f64).ln())
}

fn column_var(tape: &mut Tape, v: &DVector<f64>) -> Var {
    tape.constant(DMatrix::from_column_slice(v.len(), 1, v.as_slice()))
}

fn mean_var(tape: &mut Tape, v: Var) -> Var {
    let n = tape.shape(v).0 as f64;
    let s = tape.sum(v);
    tape.scale(s, 1.0 / n)
}

/// Sinkhorn divergence as a tape node differentiable in `a`.
pub fn sinkhorn_tape(tape: &mut Tape, a: Var, b: &PointCloud, cfg: &SinkhornConfig) -> Result<(Var, SinkhornReport)> {
    let av = tape.value(a).clone();
    check_sinkhorn(&av, b, cfg)?;
    let ab = sinkhorn_solve(&av, b, cfg);
    let aa = sinkhorn_self(&av, cfg);
    let bb = sinkhorn_self(b, cfg);
    let value = ab.value - 0.5 * (aa.value + bb.value);
    let report = SinkhornReport {
        value,
        violation: ab.violation.max(aa.violation).max(bb.violation),
        converged: ab.converged && aa.converged && bb.converged,
    };
    if cfg.unroll == 0 {
        let grad = envelope_grad(&av, b, &ab, cfg.eps, false) - envelope_grad(&av, &av, &aa, cfg.eps, true) * 0.5;
        return Ok((tape.frozen_scalar(a, value, grad), report));
    }
    let eps = cfg.eps;
    // Cross term: restart from the converged g and replay the last iterations.
    let c = cost_tape(tape, a, Some(b));
    let ctt = tape.transpose(c);
    let mut g = column_var(tape, &ab.g);
    let mut f = column_var(tape, &ab.f);
    for _ in 0..cfg.unroll {
        f = c_transform_tape(tape, c, g, eps);
        g = c_transform_tape(tape, ctt, f, eps);
    }
    let mf = mean_var(tape, f);
    let mg = mean_var(tape, g);
    let ot_ab = tape.add(mf, mg);
    let caa = cost_tape(tape, a, None);
    let mut h = column_var(tape, &aa.f);
    for _ in 0..cfg.unroll {
        let th = c_transform_tape(tape, caa, h, eps);
        let s = tape.add(h, th);
        h = tape.scale(s, 0.5);
    }
    let mh = mean_var(tape, h);
    let ot_aa = tape.scale(mh, 2.0);
    let half = tape.scale(ot_aa, -0.5);
    let s = tape.add(ot_ab, half);
    Ok((tape.add_scalar(s, -0.5 * bb.value), report))
}

/// Distance used to compare pushed and observed clouds.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Distance {
    /// Squared W2 between Gaussian fits; suited to unimodal marginals.
    GaussianW2,
    /// Debiased Sinkhorn divergence; suited to multimodal marginals.
    Sinkhorn {
        eps: f64,
        #[serde(default)]
        unroll: usize,
    },
}

// ---------------------------------------------------------------------------
// Jacobian penalty

/// `mean_j ‖∂f/∂x(x_j)‖²_F` over the columns of a tape cloud.
pub fn jacobian_penalty_tape(tape: &mut Tape, force: &ForceModel, vars: &ForceVars, x: Var, t: f64) -> Var {
    if let ForceVars::Linear(w) = vars {
        let sq = tape.square(*w);
        return tape.sum(sq);
    }
    let n = tape.shape(x).1;
    let f = force.apply(tape, vars, x, t);
    let cols = jacobian_columns(tape, x, f);
    let mut acc: Option<Var> = None;
    for c in cols {
        let sq = tape.square(c);
        let s = tape.sum(sq);
        acc = Some(match acc {
            None => s,
            Some(a) => tape.add(a, s),
        });
    }
    tape.scale(acc.expect("dimension >= 1"), 1.0 / n as f64)
}

/// Monte-Carlo `E‖∇f‖²_F` over a cloud.
pub fn jacobian_penalty(force: &ForceModel, cloud: &PointCloud, t: f64) -> f64 {
    let mut tape = Tape::new();
    let vars = force.to_tape(&mut tape, false);
    let x = tape.constant(cloud.clone());
    let p = jacobian_penalty_tape(&mut tape, force, &vars, x, t);
    tape.scalar(p)
}

/// Mean Jacobian of the force over a cloud.
pub fn infer_jacobian(force: &ForceModel, cloud: &PointCloud, t: f64) -> DMatrix<f64> {
    let d = cloud.nrows();
    let mut tape = Tape::new();
    let vars = force.to_tape(&mut tape, false);
    let x = tape.constant(cloud.clone());
    let f = force.apply(&mut tape, &vars, x, t);
    let cols = jacobian_columns(&mut tape, x, f);
    let mut j = DMatrix::zeros(d, d);
    for (c, v) in cols.iter().enumerate() {
        j.set_column(c, &tape.value(*v).column_mean());
    }
    j
}

/// Mean Jacobian with the known degradation removed, i.e. the regulatory
/// interactions alone.
pub fn regulatory_jacobian(force: &ForceModel, cloud: &PointCloud, t: f64) -> DMatrix<f64> {
    let mut j = infer_jacobian(force, cloud, t);
    for (i, l) in force.degradation().iter().enumerate() {
        j[(i, i)] += l;
    }
    j
}

// ---------------------------------------------------------------------------
// Loss and training

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Optimizer {
    Adam(AdamConfig),
    /// Full-batch L-BFGS (deterministic objectives only).
    Lbfgs(LbfgsConfig),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PfiConfig {
    /// Jacobian penalty weight; interval `i` contributes `λ Δt_i E‖∇f‖²`.
    /// For a linear force this matches the continuous-time loss with
    /// `λ̃ = λK`.
    pub lambda: f64,
    pub distance: Distance,
    /// Integrator substeps per snapshot interval.
    pub steps: usize,
    pub integrator: Integrator,
    #[serde(default)]
    pub divergence: DivergenceMode,
    pub optimizer: Optimizer,
    pub iterations: usize,
    /// Samples per snapshot per step; `None` uses every sample.
    pub batch_size: Option<usize>,
    /// Samples per snapshot for the Jacobian penalty.
    pub reg_samples: usize,
    /// Stop once the relative loss change over `stop_window` steps falls below this.
    pub stop_rel_change: f64,
    pub stop_window: usize,
    /// L1 marginal violation at which Sinkhorn stops.
    pub sinkhorn_tol: f64,
    pub sinkhorn_max_iter: usize,
    pub seed: u64,
}

impl Default for PfiConfig {
    fn default() -> Self {
        PfiConfig {
            lambda: 1e-2,
            distance: Distance::GaussianW2,
            steps: 1,
            integrator: Integrator::Euler,
            divergence: DivergenceMode::Exact,
            optimizer: Optimizer::Adam(AdamConfig::default()),
            iterations: 1000,
            batch_size: None,
            reg_samples: 100,
            stop_rel_change: 1e-6,
            stop_window: 50,
            sinkhorn_tol: 1e-3,
            sinkhorn_max_iter: 5_000,
            seed: 0,
        }
    }
}

impl PfiConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.lambda >= 0.0) {
            return Err(PfiError::InvalidParameter("lambda must be nonnegative".into()));
        }
        if self.steps == 0 {
            return Err(PfiError::InvalidParameter("steps must be at least 1".into()));
        }
        if let Distance::Sinkhorn { eps, .. } = self.distance {
            if !(eps > 0.0) {
                return Err(PfiError::InvalidParameter("Sinkhorn eps must be positive".into()));
            }
        }
        if self.batch_size == Some(0) || self.reg_samples == 0 {
            return Err(PfiError::InvalidParameter("batch_size and reg_samples must be positive".into()));
        }
        Ok(())
    }

    fn sinkhorn(&self) -> Option<SinkhornConfig> {
        match self.distance {
            Distance::Sinkhorn { eps, unroll } => {
                Some(SinkhornConfig { eps, tol: self.sinkhorn_tol, max_iter: self.sinkhorn_max_iter, unroll })
            }
            Distance::GaussianW2 => None,
        }
    }
}

/// Everything the optimizer consumes besides the force parameters.
pub struct InferenceProblem<'a> {
    /// Snapshots in the space the force acts on (concentrations for SRNs).
    pub dataset: &'a SnapshotDataset,
    pub score: &'a dyn ScoreFn,
    pub noise: NoiseModel,
    pub config: PfiConfig,
}

impl InferenceProblem<'_> {
    pub fn validate(&self, force: &ForceModel) -> Result<()> {
        self.config.validate()?;
        force.validate()?;
        let d = self.dataset.dim();
        if force.dim() != d || self.score.dim() != d {
            return Err(PfiError::Dimension(format!(
                "dataset has dimension {d}, force {} and score {}",
                force.dim(),
                self.score.dim()
            )));
        }
        self.noise.validate(d)?;
        if self.dataset.num_intervals() == 0 {
            return Err(PfiError::TooFewSamples { needed: 2, got: 1 });
        }
        Ok(())
    }

    fn ctx(&self) -> FlowContext<'_> {
        FlowContext { noise: &self.noise, score: self.score, divergence: self.config.divergence }
    }
}

/// Column subsets used for one loss evaluation.
#[derive(Debug, Clone)]
struct Selection {
    /// Per snapshot, columns used in the distance terms.
    batch: Vec<Vec<usize>>,
    /// Per snapshot, columns used in the penalty.
    reg: Vec<Vec<usize>>,
}

fn strided(n: usize, k: usize) -> Vec<usize> {
    if k >= n {
        return (0..n).collect();
    }
    (0..k).map(|i| i * n / k).collect()
}

impl Selection {
    fn full(ds: &SnapshotDataset, reg: usize) -> Self {
        Selection {
            batch: ds.snapshots.iter().map(|s| (0..s.ncols()).collect()).collect(),
            reg: ds.snapshots.iter().map(|s| strided(s.ncols(), reg)).collect(),
        }
    }

    fn random(ds: &SnapshotDataset, batch: usize, reg: usize, rng: &mut Rng) -> Self {
        let mut pick = |n: usize, k: usize| -> Vec<usize> {
            if k >= n {
                (0..n).collect()
            } else {
                let mut v = sample_indices(rng, n, k).into_vec();
                v.sort_unstable();
                v
            }
        };
        let b: Vec<Vec<usize>> = ds.snapshots.iter().map(|s| pick(s.ncols(), batch)).collect();
        let r: Vec<Vec<usize>> = ds.snapshots.iter().map(|s| pick(s.ncols(), reg)).collect();
        Selection { batch: b, reg: r }
    }
}

fn columns(m: &PointCloud, idx: &[usize]) -> PointCloud {
    m.select_columns(idx)
}

/// Loss decomposition for one evaluation.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
pub struct LossBreakdown {
    pub total: f64,
    /// Distance between pushed and observed clouds, one per interval.
    pub distances: Vec<f64>,
    /// Raw `E‖∇f‖²_F` at each right-endpoint snapshot.
    pub penalties: Vec<f64>,
    pub floored_fits: usize,
    pub sinkhorn_unconverged: usize,
}

struct IntervalOut {
    distance: f64,
    penalty: f64,
    grad: Vec<f64>,
    floored: bool,
    unconverged: bool,
}

fn interval_loss(problem: &InferenceProblem<'_>, force: &ForceModel, sel: &Selection, i: usize) -> Result<IntervalOut> {
    let ds = problem.dataset;
    let cfg = &problem.config;
    let (t0, t1) = (ds.times[i - 1], ds.times[i]);
    let mut tape = Tape::new();
    let vars = force.to_tape(&mut tape, true);
    let x0 = tape.constant(columns(&ds.snapshots[i - 1], &sel.batch[i - 1]));
    let pushed = push_on_tape(&mut tape, force, &vars, problem.ctx(), x0, t0, t1, cfg.steps, cfg.integrator);
    if let Some(j) = first_nonfinite_column(tape.value(pushed)) {
        return Err(PfiError::NonFinite(format!("interval {i}: pushed sample {j} is not finite")));
    }
    let observed = columns(&ds.snapshots[i], &sel.batch[i]);
    let (dist, floored, unconverged) = match cfg.sinkhorn() {
        None => {
            let (v, fl) = gaussian_w2_tape(&mut tape, pushed, &observed)?;
            (v, fl, false)
        }
        Some(sc) => {
            let (v, rep) = sinkhorn_tape(&mut tape, pushed, &observed, &sc)?;
            (v, false, !rep.converged)
        }
    };
    let mut total = dist;
    let mut penalty = 0.0;
    if cfg.lambda > 0.0 {
        let xr = tape.constant(columns(&ds.snapshots[i], &sel.reg[i]));
        let p = jacobian_penalty_tape(&mut tape, force, &vars, xr, t1);
        penalty = tape.scalar(p);
        let wp = tape.scale(p, cfg.lambda * (t1 - t0));
        total = tape.add(total, wp);
    }
    let distance = tape.scalar(dist);
    let all = vars.all();
    let grads = tape.grad(total, &all);
    Ok(IntervalOut { distance, penalty, grad: FeedforwardNet::flatten_grads(&grads), floored, unconverged })
}

fn evaluate(problem: &InferenceProblem<'_>, force: &ForceModel, sel: &Selection) -> Result<(LossBreakdown, Vec<f64>)> {
    let k = problem.dataset.num_intervals();
    let outs = par::map_range(k, |i| interval_loss(problem, force, sel, i + 1));
    let mut grad = vec![0.0; force.num_params()];
    let mut br = LossBreakdown::default();
    let times = &problem.dataset.times;
    for (i, out) in outs.into_iter().enumerate() {
        let out = out?;
        let dt = times[i + 1] - times[i];
        br.total += out.distance + problem.config.lambda * dt * out.penalty;
        br.distances.push(out.distance);
        br.penalties.push(out.penalty);
        br.floored_fits += out.floored as usize;
        br.sinkhorn_unconverged += out.unconverged as usize;
        for (g, v) in grad.iter_mut().zip(&out.grad) {
            *g += v;
        }
    }
    Ok((br, grad))
}

/// Full-batch loss `Σ_i dist(push(X_{i−1}), X_i) + λ Δt_i E_{X_i}‖∇f‖²` and
/// its gradient in the flat force parameters.
pub fn total_loss(problem: &InferenceProblem<'_>, force: &ForceModel) -> Result<(LossBreakdown, Vec<f64>)> {
    problem.validate(force)?;
    evaluate(problem, force, &Selection::full(problem.dataset, problem.config.reg_samples))
}

/// Distance between two halves of each observed snapshot: the finite-sample
/// floor a perfect model cannot go below.
pub fn distance_baseline(ds: &SnapshotDataset, distance: Distance) -> Result<Vec<f64>> {
    ds.snapshots
        .iter()
        .skip(1)
        .map(|s| {
            let n = s.ncols();
            let a: Vec<usize> = (0..n).step_by(2).collect();
            let b: Vec<usize> = (1..n).step_by(2).collect();
            let (a, b) = (columns(s, &a), columns(s, &b));
            match distance {
                Distance::GaussianW2 => Ok(gaussian_w2_empirical(&a, &b)?.0),
                Distance::Sinkhorn { eps, .. } => Ok(sinkhorn_divergence_empirical(&a, &b, &SinkhornConfig::new(eps))?.value),
            }
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LossReport {
    pub force_kind: String,
    pub noise_kind: String,
    /// Loss on the full data, or on one fixed batch when training used minibatches.
    pub final_loss: LossBreakdown,
    /// `(step, loss)` pairs; minibatch values under Adam.
    pub history: Vec<(usize, f64)>,
    pub iterations: usize,
    pub stop_reason: String,
    /// Set when training hit a non-finite loss; the returned force is the
    /// last finite iterate.
    pub aborted: Option<String>,
}

/// Fits the force parameters, starting from `initial`.
pub fn train_force(problem: &InferenceProblem<'_>, initial: ForceModel) -> Result<(ForceModel, LossReport)> {
    problem.validate(&initial)?;
    let cfg = &problem.config;
    let mut force = initial;
    let mut history = Vec::new();
    let mut aborted = None;
    let stop_reason;
    let iterations;
    match cfg.optimizer {
        Optimizer::Lbfgs(lc) => {
            let sel = Selection::full(problem.dataset, cfg.reg_samples);
            let mut trial = force.clone();
            let mut count = 0usize;
            let res = lbfgs(
                |p| {
                    trial.set_params(p);
                    count += 1;
                    match evaluate(problem, &trial, &sel) {
                        Ok((br, g)) if br.total.is_finite() => {
                            history.push((count, br.total));
                            (br.total, g)
                        }
                        _ => (f64::INFINITY, vec![0.0; p.len()]),
                    }
                },
                &force.params(),
                LbfgsConfig { max_iter: lc.max_iter.min(cfg.iterations.max(1)), ..lc },
            );
            force.set_params(&res.x);
            iterations = res.iterations;
            stop_reason = if res.converged { "converged".to_string() } else { "iteration limit".to_string() };
        }
        Optimizer::Adam(ac) => {
            let mut adam = Adam::new(force.num_params(), ac);
            let mut params = force.params();
            let mut last_good = params.clone();
            let mut reason = "iteration limit".to_string();
            let mut done = 0;
            for step in 0..cfg.iterations {
                let sel = match cfg.batch_size {
                    None => Selection::full(problem.dataset, cfg.reg_samples),
                    Some(b) => {
                        let mut rng = stream(cfg.seed, Purpose::Training, step as u64);
                        Selection::random(problem.dataset, b, cfg.reg_samples, &mut rng)
                    }
                };
                force.set_params(&params);
                let outcome = evaluate(problem, &force, &sel);
                let (br, grad) = match outcome {
                    Ok(v) if v.0.total.is_finite() && v.1.iter().all(|g| g.is_finite()) => v,
                    Ok(_) => {
                        aborted = Some(format!("non-finite loss at step {step}"));
                        break;
                    }
                    Err(e) => {
                        aborted = Some(format!("step {step}: {e}"));
                        break;
                    }
                };
                last_good.clone_from(&params);
                history.push((step, br.total));
                if step % 50 == 0 {
                    log::debug!("force step {step}: loss {:.6e}", br.total);
                }
                adam.step(&mut params, &grad);
                done = step + 1;
                let w = cfg.stop_window;
                if w > 0 && history.len() > w {
                    let prev = history[history.len() - 1 - w].1;
                    if ((br.total - prev) / prev.abs().max(f64::MIN_POSITIVE)).abs() < cfg.stop_rel_change {
                        reason = "relative loss change below tolerance".into();
                        break;
                    }
                }
            }
            if aborted.is_some() {
                params = last_good;
                reason = "aborted".into();
            }
            force.set_params(&params);
            iterations = done;
            stop_reason = reason;
        }
    }
    // Minibatch runs report on one fixed batch: full-data Sinkhorn is far
    // more expensive than any training step.
    let final_sel = match cfg.batch_size {
        None => Selection::full(problem.dataset, cfg.reg_samples),
        Some(b) => Selection::random(problem.dataset, b, cfg.reg_samples, &mut stream(cfg.seed, Purpose::Evaluation, 0)),
    };
    let final_loss = match evaluate(problem, &force, &final_sel) {
        Ok((br, _)) => br,
        Err(e) => {
            aborted.get_or_insert(format!("final evaluation: {e}"));
            LossBreakdown::default()
        }
    };
    let report = LossReport {
        force_kind: force.name().into(),
        noise_kind: problem.noise.name().into(),
        final_loss,
        history,
        iterations,
        stop_reason,
        aborted,
    };
    Ok((force, report))
}

/// The SDE `dx = f̂ dt + √(2D) dW` of a fitted force under a noise prior,
/// for forward simulation of an inferred model.
pub struct InferredProcess<'a> {
    pub force: &'a ForceModel,
    pub noise: &'a NoiseModel,
}

impl DiffusionProcess for InferredProcess<'_> {
    fn dim(&self) -> usize {
        self.force.dim()
    }

    fn noise_dim(&self) -> usize {
        self.force.dim()
    }

    fn drift(&self, x: &[f64], t: f64, out: &mut [f64]) {
        let f = self.force.eval_point(&DVector::from_column_slice(x), t);
        out.copy_from_slice(f.as_slice());
    }

    fn add_noise(&self, x: &[f64], t: f64, w: &[f64], out: &mut [f64]) {
        if matches!(self.noise, NoiseModel::Deterministic) {
            return;
        }
        let xv = DVector::from_column_slice(x);
        let f = match self.noise {
            NoiseModel::Cle { .. } => self.force.eval_point(&xv, t),
            _ => DVector::zeros(x.len()),
        };
        let d = self.noise.diffusion(&xv, &f) * 2.0;
        let g = match self.noise {
            NoiseModel::ConstantTensor { .. } => sqrtm_psd(&d).expect("validated noise tensor is PSD"),
            _ => DMatrix::from_diagonal(&d.diagonal().map(|v| v.max(0.0).sqrt())),
        };
        let dw = g * DVector::from_column_slice(w);
        for (o, v) in out.iter_mut().zip(dw.iter()) {
            *o += v;
        }
    }
}

/// Relative RMSE of a fitted force against a reference over the pooled
/// snapshot clouds.
pub fn force_rmse_on(
    fitted: &ForceModel,
    truth: &(dyn Fn(&DVector<f64>) -> DVector<f64> + Sync),
    clouds: &[(f64, PointCloud)],
) -> f64 {
    let mut num = 0.0;
    let mut den = 0.0;
    for (t, c) in clouds {
        let est = fitted.eval(c, *t);
        for (j, col) in c.column_iter().enumerate() {
            let f = truth(&col.into_owned());
            num += (est.column(j) - &f).norm_squared();
            den += f.norm_squared();
        }
    }
    (num / den).sqrt()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gaussian::{GaussianState, OUParams};
    use crate::rng::normal_mat;
    use crate::score::{OuScore, ZeroScore};

    fn fd_check(f: &dyn Fn(&[f64]) -> f64, p: &[f64], g: &[f64], h: f64, tol: f64) {
        for k in 0..p.len() {
            let mut a = p.to_vec();
            let mut b = p.to_vec();
            a[k] += h;
            b[k] -= h;
            let fd = (f(&a) - f(&b)) / (2.0 * h);
            let scale = fd.abs().max(g[k].abs()).max(1e-6);
            assert!((fd - g[k]).abs() / scale < tol, "param {k}: fd {fd} vs {}", g[k]);
        }
    }

    #[test]
    fn deterministic_flow_is_the_force() {
        let mut rng = stream(1, Purpose::Init, 0);
        let force = ForceModel::neural(3, &[8], vec![], &mut rng);
        let x = normal_mat(&mut rng, 3, 6);
        let ctx = FlowContext { noise: &NoiseModel::Deterministic, score: &ZeroScore(3), divergence: DivergenceMode::Exact };
        assert_eq!(pf_rhs(&force, ctx, &x, 0.0), force.eval(&x, 0.0));
    }

    fn ou_params() -> OUParams {
        let omega = DMatrix::from_row_slice(2, 2, &[-1.0, 0.8, -0.8, -1.0]);
        let init = GaussianState::new(DVector::from_vec(vec![2.0, -1.0]), DMatrix::identity(2, 2) * 0.5).unwrap();
        OUParams::new(omega, DMatrix::identity(2, 2) * 0.3, init).unwrap()
    }

    #[test]
    fn euler_one_step_matches_discrete_update() {
        let p = ou_params();
        let force = ForceModel::Linear { omega: p.omega.clone() };
        let noise = NoiseModel::ConstantTensor { d: p.diffusion.clone() };
        let score = OuScore { params: p.clone() };
        let ctx = FlowContext { noise: &noise, score: &score, divergence: DivergenceMode::Exact };
        let mut rng = stream(2, Purpose::Evaluation, 0);
        let x = normal_mat(&mut rng, 2, 5);
        let dt = 0.1;
        let out = push_samples(&force, ctx, &x, 0.0, dt, 1, Integrator::Euler).unwrap();
        let prec = crate::linalg::spd_inverse(&p.initial.cov).unwrap();
        for j in 0..5 {
            let xj = x.column(j).into_owned();
            let expect = (DMatrix::identity(2, 2) + &p.omega * dt) * &xj + &p.diffusion * &prec * (&xj - &p.initial.mean) * dt;
            assert!((out.column(j) - expect).norm() < 1e-12);
        }
        // No force, no noise: identity map.
        let zero = ForceModel::linear_zero(2);
        let ctx0 = FlowContext { noise: &NoiseModel::Deterministic, score: &ZeroScore(2), divergence: DivergenceMode::Exact };
        assert_eq!(push_samples(&zero, ctx0, &x, 0.0, 1.0, 4, Integrator::Rk4).unwrap(), x);
    }

    #[test]
    fn cle_divergence_matches_finite_differences() {
        let mut rng = stream(3, Purpose::Init, 0);
        let ell = vec![0.7, 1.3];
        let force = ForceModel::neural(2, &[6, 6], ell.clone(), &mut rng);
        let noise = NoiseModel::Cle { ell: ell.clone(), volume: 3.0 };
        let x = DMatrix::from_row_slice(2, 3, &[0.5, 1.2, 2.0, 0.3, 0.9, 1.7]);
        // Shift the net so production is positive at every test point.
        let mut force = force;
        if let ForceModel::Neural { net, .. } = &mut force {
            let last = net.biases.len() - 1;
            net.biases[last].fill(5.0);
        }
        let (_, div) = noise_diag_and_divergence(&force, &noise, &x, 0.0);
        let h = 1e-6;
        for j in 0..3 {
            for i in 0..2 {
                let mut xp = x.column(j).into_owned();
                let mut xm = xp.clone();
                xp[i] += h;
                xm[i] -= h;
                let dp = noise.diffusion(&xp, &force.eval_point(&xp, 0.0))[(i, i)];
                let dm = noise.diffusion(&xm, &force.eval_point(&xm, 0.0))[(i, i)];
                assert!(((dp - dm) / (2.0 * h) - div[(i, j)]).abs() < 1e-6);
            }
        }
        // The tape path and the finite-difference divergence agree.
        let ctx = |m| FlowContext { noise: &noise, score: &ZeroScore(2), divergence: m };
        let a = pf_rhs(&force, ctx(DivergenceMode::Exact), &x, 0.0);
        let b = pf_rhs(&force, ctx(DivergenceMode::FiniteDifference { h: 1e-5 }), &x, 0.0);
        assert!((a - b).amax() < 1e-7);
    }

    #[test]
    fn gaussian_w2_tape_gradient() {
        let mut rng = stream(4, Purpose::Evaluation, 0);
        let a0 = normal_mat(&mut rng, 2, 7);
        let b = normal_mat(&mut rng, 2, 9).map(|v| 1.5 * v + 0.3);
        let mut tape = Tape::new();
        let a = tape.variable(a0.clone());
        let (w, _) = gaussian_w2_tape(&mut tape, a, &b).unwrap();
        assert!((tape.scalar(w) - gaussian_w2_empirical(&a0, &b).unwrap().0).abs() < 1e-14);
        let g = tape.grad(w, &[a]).remove(0);
        let f = |p: &[f64]| gaussian_w2_empirical(&DMatrix::from_column_slice(2, 7, p), &b).unwrap().0;
        fd_check(&f, a0.as_slice(), g.as_slice(), 1e-6, 1e-5);
    }

    #[test]
    fn sinkhorn_basic_values() {
        let a = DMatrix::from_row_slice(1, 3, &[0.0, 0.4, 1.1]);
        let cfg = SinkhornConfig::new(0.1);
        assert!(sinkhorn_divergence_empirical(&a, &a, &cfg).unwrap().value.abs() < 1e-10);
        let p = DMatrix::from_row_slice(1, 1, &[0.0]);
        let q = DMatrix::from_row_slice(1, 1, &[1.0]);
        for eps in [1.0, 0.1, 0.01, 0.001] {
            let s = sinkhorn_divergence_empirical(&p, &q, &SinkhornConfig::new(eps)).unwrap();
            assert!(s.converged);
            assert!((s.value - 1.0).abs() < 1e-12);
        }
        // A translation by t has divergence |t|² at every ε. The kernel is
        // nearly degenerate at small ε, so only the value is checked.
        let p = DMatrix::from_row_slice(1, 2, &[0.0, 1.0]);
        let q = DMatrix::from_row_slice(1, 2, &[0.5, 1.5]);
        for eps in [1.0, 0.3, 0.1] {
            let v = sinkhorn_divergence_empirical(&p, &q, &SinkhornConfig::new(eps)).unwrap().value;
            assert!((v - 0.25).abs() < 1e-6);
        }
        assert!(sinkhorn_divergence_empirical(&p, &q, &SinkhornConfig::new(0.0)).is_err());
    }

    #[test]
    fn sinkhorn_gradients_match_finite_differences() {
        let mut rng = stream(5, Purpose::Evaluation, 0);
        let a0 = normal_mat(&mut rng, 2, 6);
        let b = normal_mat(&mut rng, 2, 5).map(|v| v + 0.5);
        let cfg = SinkhornConfig { eps: 0.5, tol: 1e-13, max_iter: 100_000, unroll: 0 };
        let f = |p: &[f64]| sinkhorn_divergence_empirical(&DMatrix::from_column_slice(2, 6, p), &b, &cfg).unwrap().value;
        let mut tape = Tape::new();
        let a = tape.variable(a0.clone());
        let (s, _) = sinkhorn_tape(&mut tape, a, &b, &cfg).unwrap();
        let g = tape.grad(s, &[a]).remove(0);
        fd_check(&f, a0.as_slice(), g.as_slice(), 1e-5, 1e-4);
        let mut tape = Tape::new();
        let a = tape.variable(a0.clone());
        let (s2, _) = sinkhorn_tape(&mut tape, a, &b, &SinkhornConfig { unroll: 10, ..cfg }).unwrap();
        assert!((tape.scalar(s2) - f(a0.as_slice())).abs() < 1e-9);
        let g2 = tape.grad(s2, &[a]).remove(0);
        assert!((g2 - &g).amax() < 1e-6 * g.amax().max(1.0));
    }

    #[test]
    fn penalty_cases() {
        let omega = DMatrix::from_row_slice(2, 2, &[1.0, -2.0, 0.5, 3.0]);
        let lin = ForceModel::Linear { omega: omega.clone() };
        let cloud = DMatrix::from_row_slice(2, 2, &[1.0, 5.0, -3.0, 2.0]);
        assert_eq!(jacobian_penalty(&lin, &cloud, 0.0), omega.norm_squared());
        assert_eq!(infer_jacobian(&lin, &cloud, 0.0), omega);
        assert_eq!(jacobian_penalty(&ForceModel::linear_zero(2), &cloud, 0.0), 0.0);
        let mut rng = stream(6, Purpose::Init, 0);
        let net = ForceModel::neural(2, &[5, 5], vec![0.3, 0.3], &mut rng);
        let h = 1e-6;
        let fd: f64 = cloud
            .column_iter()
            .map(|c| {
                let x = c.into_owned();
                let mut s = 0.0;
                for j in 0..2 {
                    let mut xp = x.clone();
                    let mut xm = x.clone();
                    xp[j] += h;
                    xm[j] -= h;
                    s += ((net.eval_point(&xp, 0.0) - net.eval_point(&xm, 0.0)) / (2.0 * h)).norm_squared();
                }
                s
            })
            .sum::<f64>()
            / 2.0;
        assert!((jacobian_penalty(&net, &cloud, 0.0) - fd).abs() < 1e-4);
    }

    #[test]
    fn potential_force_is_negative_gradient_and_symmetric() {
        let mut rng = stream(7, Purpose::Init, 0);
        let pot = ForceModel::potential(3, &[7, 7], vec![], &mut rng);
        let ForceModel::PotentialGradient { net, .. } = &pot else { unreachable!() };
        let x = DVector::from_vec(vec![0.3, -0.2, 0.8]);
        let f = pot.eval_point(&x, 0.0);
        let h = 1e-6;
        for i in 0..3 {
            let mut xp = x.clone();
            let mut xm = x.clone();
            xp[i] += h;
            xm[i] -= h;
            let psi = |v: &DVector<f64>| net.forward(&DMatrix::from_column_slice(3, 1, v.as_slice()))[(0, 0)];
            let fd = -(psi(&xp) - psi(&xm)) / (2.0 * h);
            assert!((fd - f[i]).abs() < 1e-7);
        }
        let cloud = normal_mat(&mut rng, 3, 10);
        let j = infer_jacobian(&pot, &cloud, 0.0);
        assert!((&j - j.transpose()).amax() < 1e-8 * j.amax().max(1.0));
    }

    #[test]
    fn autonomous_flow_commutes_with_time_shift() {
        let mut rng = stream(8, Purpose::Init, 0);
        let force = ForceModel::neural(2, &[6], vec![], &mut rng);
        let x = normal_mat(&mut rng, 2, 4);
        let ctx = FlowContext { noise: &NoiseModel::Deterministic, score: &ZeroScore(2), divergence: DivergenceMode::Exact };
        let a = push_samples(&force, ctx, &x, 0.0, 0.5, 8, Integrator::Rk4).unwrap();
        let b = push_samples(&force, ctx, &x, 3.0, 3.5, 8, Integrator::Rk4).unwrap();
        assert!((a - b).amax() < 1e-14);
    }

    #[test]
    fn full_chain_gradient_cle_net() {
        let mut rng = stream(9, Purpose::Dataset, 0);
        let snaps: Vec<PointCloud> = (0..3).map(|k| normal_mat(&mut rng, 2, 8).map(|v| 1.0 + 0.3 * v + 0.1 * k as f64)).collect();
        let ds = SnapshotDataset::new(
            vec!["a".into(), "b".into()],
            vec![0.0, 0.1, 0.2],
            snaps,
            crate::srn::DatasetMeta::synthetic("toy"),
        )
        .unwrap();
        let ell = vec![1.0, 0.5];
        let score = OuScore { params: ou_params() };
        let mut irng = stream(9, Purpose::Init, 0);
        let force = ForceModel::neural(2, &[5], ell.clone(), &mut irng);
        for distance in [Distance::GaussianW2, Distance::Sinkhorn { eps: 0.5, unroll: 0 }] {
            let problem = InferenceProblem {
                dataset: &ds,
                score: &score,
                noise: NoiseModel::Cle { ell: ell.clone(), volume: 10.0 },
                config: PfiConfig { lambda: 0.1, distance, steps: 2, integrator: Integrator::Rk4, sinkhorn_tol: 1e-13, sinkhorn_max_iter: 100_000, ..Default::default() },
            };
            let (_, g) = total_loss(&problem, &force).unwrap();
            let f = |p: &[f64]| {
                let mut m = force.clone();
                m.set_params(p);
                total_loss(&problem, &m).unwrap().0.total
            };
            fd_check(&f, &force.params(), &g, 1e-6, 1e-3);
        }
    }
}
