//! Feedforward networks with ELU activations and JSON checkpoints.

use std::fs;
use std::path::Path;

use nalgebra::{DMatrix, DVector};
use rand::Rng as _;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Tape, Var};
use crate::error::{PfiError, Result};
use crate::rng::Rng;

/// Affine layers with ELU between them and a linear output layer.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FeedforwardNet {
    pub dims: Vec<usize>,
    pub weights: Vec<DMatrix<f64>>,
    pub biases: Vec<DVector<f64>>,
}

/// Tape handles of a network's parameters.
#[derive(Debug, Clone)]
pub struct NetVars {
    pub weights: Vec<Var>,
    pub biases: Vec<Var>,
}

impl NetVars {
    /// Parameter handles in the flattening order of [`FeedforwardNet::params`].
    pub fn all(&self) -> Vec<Var> {
        self.weights.iter().zip(&self.biases).flat_map(|(w, b)| [*w, *b]).collect()
    }
}

impl FeedforwardNet {
    /// `input → hidden[0] → … → output`, weights uniform in ±1/√fan_in.
    pub fn new(input: usize, hidden: &[usize], output: usize, rng: &mut Rng) -> Self {
        let mut dims = vec![input];
        dims.extend_from_slice(hidden);
        dims.push(output);
        let mut weights = Vec::new();
        let mut biases = Vec::new();
        for w in dims.windows(2) {
            let bound = 1.0 / (w[0] as f64).sqrt();
            weights.push(DMatrix::from_fn(w[1], w[0], |_, _| rng.gen_range(-bound..bound)));
            biases.push(DVector::from_fn(w[1], |_, _| rng.gen_range(-bound..bound)));
        }
        FeedforwardNet { dims, weights, biases }
    }

    /// All-zero network with the given layer sizes.
    pub fn zeros(dims: &[usize]) -> Self {
        FeedforwardNet {
            dims: dims.to_vec(),
            weights: dims.windows(2).map(|w| DMatrix::zeros(w[1], w[0])).collect(),
            biases: dims.windows(2).map(|w| DVector::zeros(w[1])).collect(),
        }
    }

    pub fn input_dim(&self) -> usize {
        self.dims[0]
    }

    pub fn output_dim(&self) -> usize {
        *self.dims.last().expect("network has layers")
    }

    pub fn num_params(&self) -> usize {
        self.weights.iter().map(|w| w.len()).sum::<usize>() + self.biases.iter().map(|b| b.len()).sum::<usize>()
    }

    pub fn validate(&self) -> Result<()> {
        if self.dims.len() < 2 || self.weights.len() != self.dims.len() - 1 || self.biases.len() != self.weights.len() {
            return Err(PfiError::Dimension("inconsistent layer lists".into()));
        }
        for (l, w) in self.dims.windows(2).enumerate() {
            if self.weights[l].shape() != (w[1], w[0]) || self.biases[l].len() != w[1] {
                return Err(PfiError::Dimension(format!("layer {l} has the wrong shape")));
            }
        }
        Ok(())
    }

    /// Evaluates on a batch (one column per sample).
    pub fn forward(&self, x: &DMatrix<f64>) -> DMatrix<f64> {
        assert_eq!(x.nrows(), self.input_dim(), "network input dimension");
        let last = self.weights.len() - 1;
        let mut a = x.clone();
        for (l, (w, b)) in self.weights.iter().zip(&self.biases).enumerate() {
            let mut z = w * &a;
            for mut col in z.column_iter_mut() {
                col += b;
            }
            a = if l < last { z.map(|v| if v > 0.0 { v } else { v.exp_m1() }) } else { z };
        }
        a
    }

    /// Places parameters on the tape, as variables or constants.
    pub fn to_tape(&self, tape: &mut Tape, trainable: bool) -> NetVars {
        let mut put = |m: DMatrix<f64>| if trainable { tape.variable(m) } else { tape.constant(m) };
        let weights = self.weights.iter().map(|w| put(w.clone())).collect();
        let biases = self.biases.iter().map(|b| put(DMatrix::from_column_slice(b.len(), 1, b.as_slice()))).collect();
        NetVars { weights, biases }
    }

    /// Tape version of [`Self::forward`].
    pub fn apply(tape: &mut Tape, vars: &NetVars, x: Var) -> Var {
        let last = vars.weights.len() - 1;
        let mut a = x;
        for (l, (&w, &b)) in vars.weights.iter().zip(&vars.biases).enumerate() {
            let z = tape.matmul(w, a);
            let z = tape.add_bias(z, b);
            a = if l < last { tape.elu(z) } else { z };
        }
        a
    }

    /// Flat parameter vector (per layer: weights column-major, then bias).
    pub fn params(&self) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.num_params());
        for (w, b) in self.weights.iter().zip(&self.biases) {
            out.extend_from_slice(w.as_slice());
            out.extend_from_slice(b.as_slice());
        }
        out
    }

    pub fn set_params(&mut self, p: &[f64]) {
        assert_eq!(p.len(), self.num_params());
        let mut k = 0;
        for (w, b) in self.weights.iter_mut().zip(self.biases.iter_mut()) {
            let n = w.len();
            w.as_mut_slice().copy_from_slice(&p[k..k + n]);
            k += n;
            let n = b.len();
            b.as_mut_slice().copy_from_slice(&p[k..k + n]);
            k += n;
        }
    }

    /// Flattens gradients returned for [`NetVars::all`].
    pub fn flatten_grads(grads: &[DMatrix<f64>]) -> Vec<f64> {
        grads.iter().flat_map(|g| g.as_slice().iter().copied()).collect()
    }
}

/// Network plus provenance, stored as JSON.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Checkpoint {
    /// `score`, `force`, or `potential`.
    pub kind: String,
    pub activation: String,
    pub seed: u64,
    /// SHA-256 of the training dataset CSV.
    pub dataset_hash: String,
    pub net: FeedforwardNet,
    #[serde(default)]
    pub extra: serde_json::Map<String, serde_json::Value>,
}

impl Checkpoint {
    pub fn new(kind: &str, net: FeedforwardNet, seed: u64, dataset_hash: String) -> Self {
        Checkpoint { kind: kind.into(), activation: "elu".into(), seed, dataset_hash, net, extra: Default::default() }
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        fs::write(path, serde_json::to_string(self)?)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let ck: Checkpoint = serde_json::from_str(&fs::read_to_string(path)?)?;
        ck.net.validate()?;
        if ck.activation != "elu" {
            return Err(PfiError::Parse(format!("unsupported activation '{}'", ck.activation)));
        }
        Ok(ck)
    }

    /// Refuses a checkpoint trained on a different dataset.
    pub fn check_dataset(&self, expected_hash: &str) -> Result<()> {
        if self.dataset_hash != expected_hash {
            return Err(PfiError::Integrity(format!(
                "checkpoint was trained on dataset {} but {} was supplied",
                short(&self.dataset_hash),
                short(expected_hash)
            )));
        }
        Ok(())
    }
}

fn short(h: &str) -> &str {
    &h[..h.len().min(12)]
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::{normal_mat, stream, Purpose};

    #[test]
    fn zero_network_outputs_zero() {
        let net = FeedforwardNet::zeros(&[3, 4, 2]);
        let mut rng = stream(0, Purpose::Init, 0);
        let x = normal_mat(&mut rng, 3, 7);
        assert_eq!(net.forward(&x), DMatrix::zeros(2, 7));
    }

    #[test]
    fn linear_layer_gradient_is_outer_product() {
        let mut rng = stream(0, Purpose::Init, 1);
        let mut net = FeedforwardNet::new(3, &[], 2, &mut rng);
        net.biases[0].fill(0.0);
        let x = normal_mat(&mut rng, 3, 1);
        let y = normal_mat(&mut rng, 2, 1);
        let mut t = Tape::new();
        let vars = net.to_tape(&mut t, true);
        let xv = t.constant(x.clone());
        let out = FeedforwardNet::apply(&mut t, &vars, xv);
        let yv = t.constant(y.clone());
        let r = t.sub(out, yv);
        let sq = t.square(r);
        let s = t.sum(sq);
        let loss = t.scale(s, 0.5);
        let g = t.grad(loss, &[vars.weights[0]]).remove(0);
        let expected = (&net.weights[0] * &x - &y) * x.transpose();
        assert!((g - expected).norm() < 1e-14);
    }

    #[test]
    fn tape_and_direct_forward_agree() {
        let mut rng = stream(0, Purpose::Init, 2);
        let net = FeedforwardNet::new(4, &[8, 8], 3, &mut rng);
        let x = normal_mat(&mut rng, 4, 5);
        let mut t = Tape::new();
        let vars = net.to_tape(&mut t, false);
        let xv = t.constant(x.clone());
        let out = FeedforwardNet::apply(&mut t, &vars, xv);
        assert_eq!(t.value(out), &net.forward(&x));
    }

    #[test]
    fn parameter_gradients_match_finite_differences() {
        let mut rng = stream(0, Purpose::Init, 3);
        let net = FeedforwardNet::new(3, &[6, 5], 2, &mut rng);
        let x = normal_mat(&mut rng, 3, 4);
        let loss_of = |n: &FeedforwardNet| n.forward(&x).map(|v| v * v).sum();
        let mut t = Tape::new();
        let vars = net.to_tape(&mut t, true);
        let xv = t.constant(x.clone());
        let out = FeedforwardNet::apply(&mut t, &vars, xv);
        let sq = t.square(out);
        let l = t.sum(sq);
        let g = FeedforwardNet::flatten_grads(&t.grad(l, &vars.all()));
        let p0 = net.params();
        let h = 1e-5;
        for k in 0..p0.len() {
            let mut np = net.clone();
            let mut p = p0.clone();
            p[k] += h;
            np.set_params(&p);
            let fp = loss_of(&np);
            p[k] -= 2.0 * h;
            np.set_params(&p);
            let fm = loss_of(&np);
            let fd = (fp - fm) / (2.0 * h);
            assert!((g[k] - fd).abs() <= 1e-5 * fd.abs().max(1e-3), "param {k}: {} vs {fd}", g[k]);
        }
    }

    #[test]
    fn checkpoint_round_trip_is_bit_identical() {
        let mut rng = stream(9, Purpose::Init, 0);
        let net = FeedforwardNet::new(3, &[7], 3, &mut rng);
        let ck = Checkpoint::new("score", net.clone(), 9, "abc".into());
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("ck.json");
        ck.save(&path).unwrap();
        let back = Checkpoint::load(&path).unwrap();
        let x = normal_mat(&mut rng, 3, 10);
        assert_eq!(back.net.forward(&x), net.forward(&x));
        assert!(back.check_dataset("abc").is_ok());
        assert!(matches!(back.check_dataset("abd"), Err(PfiError::Integrity(_))));
    }
}
