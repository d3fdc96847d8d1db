//! Reaction networks with mass-action and BoolODE regulatory propensities.

use serde::{Deserialize, Serialize};

use super::boolean;
use crate::error::{PfiError, Result};

/// Transcriptional regulation of one gene.
///
/// `alpha[mask]` is the weight of regulator configuration `mask` (bit `i`
/// set when `regulators[i]` is bound). Rules compile to 0/1 weights; the
/// toggle switch uses fractional weights.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RegulatoryGene {
    pub gene: usize,
    pub regulators: Vec<usize>,
    pub alpha: Vec<f64>,
    pub rule: String,
    pub hill_k: f64,
    pub hill_n: f64,
    pub m: f64,
    pub ell: f64,
    /// Protein-to-mRNA ratio r/ℓ_p of the quasi-steady-state reduction.
    #[serde(default = "one")]
    pub protein_ratio: f64,
}

fn one() -> f64 {
    1.0
}

impl RegulatoryGene {
    pub fn validate(&self) -> Result<()> {
        let r = self.regulators.len();
        if self.alpha.len() != 1 << r {
            return Err(PfiError::InvalidParameter(format!(
                "gene {}: {} regulators need {} alpha weights, got {}",
                self.gene,
                r,
                1 << r,
                self.alpha.len()
            )));
        }
        if self.alpha.iter().any(|a| !(0.0..=1.0).contains(a)) {
            return Err(PfiError::InvalidParameter(format!("gene {}: alpha outside [0,1]", self.gene)));
        }
        for (name, v) in [("k", self.hill_k), ("n", self.hill_n), ("m", self.m), ("protein_ratio", self.protein_ratio)] {
            if !(v > 0.0 && v.is_finite()) {
                return Err(PfiError::InvalidParameter(format!("gene {}: {name} must be positive", self.gene)));
            }
        }
        if !(self.ell >= 0.0) {
            return Err(PfiError::InvalidParameter(format!("gene {}: negative degradation", self.gene)));
        }
        Ok(())
    }

    /// Activation from the concentrations of all species.
    pub fn activation(&self, conc: &[f64]) -> f64 {
        let levels: Vec<f64> = self.regulators.iter().map(|&j| conc[j]).collect();
        boolode_activation(self, &levels)
    }

    /// Partial derivatives of the activation wrt each regulator concentration.
    pub fn activation_grad(&self, conc: &[f64]) -> Vec<f64> {
        let r = self.regulators.len();
        let mut h = vec![0.0; r];
        let mut dh = vec![0.0; r];
        for (i, &j) in self.regulators.iter().enumerate() {
            let p = (self.protein_ratio * conc[j]).max(0.0);
            let u = p / self.hill_k;
            h[i] = u.powf(self.hill_n);
            dh[i] = if p > 0.0 { self.hill_n * h[i] / p * self.protein_ratio } else { 0.0 };
        }
        let mut num = 0.0;
        let mut den = 0.0;
        let mut dnum = vec![0.0; r];
        let mut dden = vec![0.0; r];
        for mask in 0..1usize << r {
            let w = config_weight(&h, mask);
            num += self.alpha[mask] * w;
            den += w;
            for i in 0..r {
                if mask >> i & 1 == 1 {
                    let dw = config_weight_without(&h, mask, i) * dh[i];
                    dnum[i] += self.alpha[mask] * dw;
                    dden[i] += dw;
                }
            }
        }
        (0..r).map(|i| (dnum[i] * den - num * dden[i]) / (den * den)).collect()
    }
}

fn config_weight(h: &[f64], mask: usize) -> f64 {
    h.iter().enumerate().filter(|(i, _)| mask >> i & 1 == 1).map(|(_, v)| v).product()
}

fn config_weight_without(h: &[f64], mask: usize, skip: usize) -> f64 {
    h.iter()
        .enumerate()
        .filter(|&(i, _)| i != skip && mask >> i & 1 == 1)
        .map(|(_, v)| v)
        .product()
}

/// BoolODE activation `Σ_S α_S Π_{p∈S} h_p / Σ_S Π_{p∈S} h_p` with
/// `h_p = (p/k)^n`; the empty configuration contributes 1 to the sum.
/// `levels` are regulator mRNA concentrations in the order of
/// `gene.regulators`.
pub fn boolode_activation(gene: &RegulatoryGene, levels: &[f64]) -> f64 {
    let h: Vec<f64> = levels
        .iter()
        .map(|&x| ((gene.protein_ratio * x).max(0.0) / gene.hill_k).powf(gene.hill_n))
        .collect();
    let mut num = 0.0;
    let mut den = 0.0;
    for (mask, a) in gene.alpha.iter().enumerate() {
        let w = config_weight(&h, mask);
        num += a * w;
        den += w;
    }
    if den.is_finite() {
        return num / den;
    }
    // Overflowing Hill terms: redo the sums in log space.
    let lh: Vec<f64> = levels
        .iter()
        .map(|&x| gene.hill_n * ((gene.protein_ratio * x).max(0.0) / gene.hill_k).ln())
        .collect();
    let logw: Vec<f64> = (0..gene.alpha.len())
        .map(|mask| lh.iter().enumerate().filter(|(i, _)| mask >> i & 1 == 1).map(|(_, v)| v).sum())
        .collect();
    let top = logw.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let (mut num, mut den) = (0.0, 0.0);
    for (a, lw) in gene.alpha.iter().zip(&logw) {
        let w = (lw - top).exp();
        num += a * w;
        den += w;
    }
    num / den
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Propensity {
    /// `rate · V · Π_j [X_j]_(ν_j) / V^ν_j` (falling factorials for counts).
    MassAction { rate: f64, reactants: Vec<(usize, u32)> },
    /// Production `V · m · f(X/V)` of a regulated gene.
    Transcription { gene: usize },
    /// Degradation `ℓ · X` of a regulated gene.
    Degradation { gene: usize },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Reaction {
    pub stoichiometry: Vec<i32>,
    pub propensity: Propensity,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReactionNetwork {
    pub name: String,
    pub species_names: Vec<String>,
    pub volume: f64,
    pub reactions: Vec<Reaction>,
    /// Regulated genes, referenced by index from `Propensity` variants.
    pub genes: Vec<RegulatoryGene>,
    #[serde(default)]
    pub metadata: serde_json::Map<String, serde_json::Value>,
}

impl ReactionNetwork {
    pub fn dim(&self) -> usize {
        self.species_names.len()
    }

    pub fn num_reactions(&self) -> usize {
        self.reactions.len()
    }

    pub fn validate(&self) -> Result<()> {
        let d = self.dim();
        if !(self.volume > 0.0 && self.volume.is_finite()) {
            return Err(PfiError::InvalidParameter("volume must be positive".into()));
        }
        for g in &self.genes {
            g.validate()?;
            if g.gene >= d || g.regulators.iter().any(|&j| j >= d) {
                return Err(PfiError::InvalidParameter(format!("gene index out of range in '{}'", g.rule)));
            }
        }
        for (r, rx) in self.reactions.iter().enumerate() {
            if rx.stoichiometry.len() != d {
                return Err(PfiError::Dimension(format!("reaction {r}: stoichiometry length {} != {d}", rx.stoichiometry.len())));
            }
            match &rx.propensity {
                Propensity::MassAction { rate, reactants } => {
                    if !(*rate >= 0.0) {
                        return Err(PfiError::InvalidParameter(format!("reaction {r}: negative rate")));
                    }
                    if reactants.iter().any(|&(j, _)| j >= d) {
                        return Err(PfiError::InvalidParameter(format!("reaction {r}: reactant out of range")));
                    }
                    // A consumed species must be a reactant with enough order.
                    for (j, &nu) in rx.stoichiometry.iter().enumerate() {
                        if nu < 0 {
                            let order = reactants.iter().filter(|(s, _)| *s == j).map(|(_, o)| *o as i32).sum::<i32>();
                            if order < -nu {
                                return Err(PfiError::InvalidParameter(format!(
                                    "reaction {r}: consumes species {j} without matching reactant order"
                                )));
                            }
                        }
                    }
                }
                Propensity::Transcription { gene } | Propensity::Degradation { gene } => {
                    if *gene >= self.genes.len() {
                        return Err(PfiError::InvalidParameter(format!("reaction {r}: unknown gene {gene}")));
                    }
                }
            }
        }
        Ok(())
    }

    /// Propensities at integer counts (SSA semantics).
    pub fn propensities_counts(&self, x: &[i64], out: &mut [f64]) {
        let v = self.volume;
        let conc: Vec<f64> = if self.genes.is_empty() { Vec::new() } else { x.iter().map(|&c| c as f64 / v).collect() };
        for (o, rx) in out.iter_mut().zip(&self.reactions) {
            *o = match &rx.propensity {
                Propensity::MassAction { rate, reactants } => {
                    let mut a = rate * v;
                    for &(j, nu) in reactants {
                        for k in 0..nu as i64 {
                            a *= ((x[j] - k).max(0)) as f64 / v;
                        }
                    }
                    a
                }
                Propensity::Transcription { gene } => {
                    let g = &self.genes[*gene];
                    v * g.m * g.activation(&conc)
                }
                Propensity::Degradation { gene } => {
                    let g = &self.genes[*gene];
                    g.ell * x[g.gene].max(0) as f64
                }
            };
        }
    }

    /// Propensities at real-valued counts `X = V x` (diffusion-approximation
    /// semantics: plain powers instead of falling factorials).
    pub fn propensities_concentration(&self, conc: &[f64], out: &mut [f64]) {
        let v = self.volume;
        for (o, rx) in out.iter_mut().zip(&self.reactions) {
            *o = match &rx.propensity {
                Propensity::MassAction { rate, reactants } => {
                    let mut a = rate * v;
                    for &(j, nu) in reactants {
                        a *= conc[j].max(0.0).powi(nu as i32);
                    }
                    a
                }
                Propensity::Transcription { gene } => {
                    let g = &self.genes[*gene];
                    v * g.m * g.activation(conc)
                }
                Propensity::Degradation { gene } => {
                    let g = &self.genes[*gene];
                    g.ell * v * conc[g.gene].max(0.0)
                }
            };
        }
    }

    /// Macroscopic drift in concentration space, `Σ_r ν_r a_r(Vx) / V`.
    /// This is the ground-truth force of the diffusion approximation.
    pub fn drift(&self, conc: &[f64]) -> Vec<f64> {
        let mut a = vec![0.0; self.num_reactions()];
        self.propensities_concentration(conc, &mut a);
        let mut out = vec![0.0; self.dim()];
        for (rx, ar) in self.reactions.iter().zip(&a) {
            for (o, &nu) in out.iter_mut().zip(&rx.stoichiometry) {
                if nu != 0 {
                    *o += nu as f64 * ar / self.volume;
                }
            }
        }
        out
    }

    /// Diagonal of the CLE diffusion tensor in concentration space, in the
    /// `dx = f dt + √(2D) dW` convention: `D_ii = Σ_r ν_ri² a_r / (2V²)`.
    pub fn cle_diffusion_diag(&self, conc: &[f64]) -> Vec<f64> {
        let mut a = vec![0.0; self.num_reactions()];
        self.propensities_concentration(conc, &mut a);
        let v2 = self.volume * self.volume;
        let mut out = vec![0.0; self.dim()];
        for (rx, ar) in self.reactions.iter().zip(&a) {
            for (o, &nu) in out.iter_mut().zip(&rx.stoichiometry) {
                *o += (nu * nu) as f64 * ar / (2.0 * v2);
            }
        }
        out
    }

    /// Jacobian of [`Self::drift`] (row `i`, column `j` = ∂f_i/∂x_j).
    pub fn drift_jacobian(&self, conc: &[f64]) -> nalgebra::DMatrix<f64> {
        let d = self.dim();
        let v = self.volume;
        let mut jac = nalgebra::DMatrix::zeros(d, d);
        for rx in &self.reactions {
            // Gradient of the propensity in concentration units.
            let mut grad = vec![0.0; d];
            match &rx.propensity {
                Propensity::MassAction { rate, reactants } => {
                    for (idx, &(j, nu)) in reactants.iter().enumerate() {
                        let mut g = rate * v * nu as f64 * conc[j].max(0.0).powi(nu as i32 - 1);
                        for (idx2, &(j2, nu2)) in reactants.iter().enumerate() {
                            if idx2 != idx {
                                g *= conc[j2].max(0.0).powi(nu2 as i32);
                            }
                        }
                        grad[j] += g;
                    }
                }
                Propensity::Transcription { gene } => {
                    let g = &self.genes[*gene];
                    for (&j, dj) in g.regulators.iter().zip(g.activation_grad(conc)) {
                        grad[j] += v * g.m * dj;
                    }
                }
                Propensity::Degradation { gene } => {
                    let g = &self.genes[*gene];
                    grad[g.gene] += g.ell * v;
                }
            }
            for (i, &nu) in rx.stoichiometry.iter().enumerate() {
                if nu != 0 {
                    for j in 0..d {
                        jac[(i, j)] += nu as f64 * grad[j] / v;
                    }
                }
            }
        }
        jac
    }

    /// Largest first-order rate in the network (1/time).
    pub fn fastest_rate(&self) -> f64 {
        let mut r: f64 = 0.0;
        for rx in &self.reactions {
            if let Propensity::MassAction { rate, reactants } = &rx.propensity {
                if reactants.len() == 1 && reactants[0].1 == 1 {
                    r = r.max(*rate);
                }
            }
        }
        for g in &self.genes {
            r = r.max(g.ell);
        }
        r
    }

    /// Smallest degradation or first-order rate (sets the slowest timescale).
    pub fn slowest_rate(&self) -> f64 {
        let mut r = f64::INFINITY;
        for rx in &self.reactions {
            if let Propensity::MassAction { rate, reactants } = &rx.propensity {
                if reactants.len() == 1 && reactants[0].1 == 1 && *rate > 0.0 {
                    r = r.min(*rate);
                }
            }
        }
        for g in &self.genes {
            if g.ell > 0.0 {
                r = r.min(g.ell);
            }
        }
        r
    }

    /// Signed regulatory adjacency `a[i][j]` (effect of species j on the
    /// production of species i) derived from the truth tables: +1 when
    /// binding j never lowers the weight, -1 when it never raises it.
    pub fn signed_adjacency(&self) -> Vec<Vec<i8>> {
        let d = self.dim();
        let mut a = vec![vec![0i8; d]; d];
        for g in &self.genes {
            for (bit, &j) in g.regulators.iter().enumerate() {
                let mut delta = 0.0;
                for mask in 0..g.alpha.len() {
                    if mask >> bit & 1 == 0 {
                        delta += g.alpha[mask | 1 << bit] - g.alpha[mask];
                    }
                }
                a[g.gene][j] = if delta > 0.0 {
                    1
                } else if delta < 0.0 {
                    -1
                } else {
                    0
                };
            }
        }
        a
    }

    /// Linear degradation rate `ℓ_i` of each regulated gene (0 elsewhere).
    pub fn degradation_rates(&self) -> Vec<f64> {
        let mut ell = vec![0.0; self.dim()];
        for g in &self.genes {
            ell[g.gene] = g.ell;
        }
        ell
    }

    pub fn species_index(&self, name: &str) -> Option<usize> {
        self.species_names.iter().position(|s| s == name)
    }

    pub fn with_volume(mut self, volume: f64) -> Self {
        self.volume = volume;
        self
    }
}

/// Gene entry of a JSON network description.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct GeneDescription {
    pub name: String,
    pub rule: String,
    pub m: f64,
    pub ell: f64,
    pub k: f64,
    pub n: f64,
}

/// Mass-action entry of a JSON network description.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct MassActionDescription {
    pub rate: f64,
    /// Species name → order.
    #[serde(default)]
    pub reactants: Vec<(String, u32)>,
    /// Species name → net change.
    pub change: Vec<(String, i32)>,
}

/// Human-written network description: species, Boolean rules over gene
/// names, and explicit mass-action reactions.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct NetworkDescription {
    pub name: String,
    pub species: Vec<String>,
    #[serde(default = "one")]
    pub volume: f64,
    #[serde(default)]
    pub genes: Vec<GeneDescription>,
    #[serde(default)]
    pub reactions: Vec<MassActionDescription>,
}

impl NetworkDescription {
    pub fn build(&self) -> Result<ReactionNetwork> {
        let d = self.species.len();
        let idx = |name: &str| -> Result<usize> {
            self.species
                .iter()
                .position(|s| s == name)
                .ok_or_else(|| PfiError::Parse(format!("unknown species '{name}'")))
        };
        let mut net = ReactionNetwork {
            name: self.name.clone(),
            species_names: self.species.clone(),
            volume: self.volume,
            reactions: Vec::new(),
            genes: Vec::new(),
            metadata: Default::default(),
        };
        for g in &self.genes {
            let gi = idx(&g.name)?;
            let (vars, alpha) = boolean::truth_table(&g.rule)?;
            let regulators = vars.iter().map(|v| idx(v)).collect::<Result<Vec<_>>>()?;
            add_regulated_gene(
                &mut net,
                RegulatoryGene {
                    gene: gi,
                    regulators,
                    alpha,
                    rule: g.rule.clone(),
                    hill_k: g.k,
                    hill_n: g.n,
                    m: g.m,
                    ell: g.ell,
                    protein_ratio: 1.0,
                },
            );
        }
        for r in &self.reactions {
            let mut stoich = vec![0i32; d];
            for (name, c) in &r.change {
                stoich[idx(name)?] += c;
            }
            let reactants = r.reactants.iter().map(|(n, o)| Ok((idx(n)?, *o))).collect::<Result<Vec<_>>>()?;
            net.reactions.push(Reaction { stoichiometry: stoich, propensity: Propensity::MassAction { rate: r.rate, reactants } });
        }
        net.validate()?;
        Ok(net)
    }
}

/// Appends a gene together with its production and degradation reactions.
pub fn add_regulated_gene(net: &mut ReactionNetwork, gene: RegulatoryGene) {
    let d = net.dim();
    let gi = net.genes.len();
    let mut up = vec![0; d];
    up[gene.gene] = 1;
    let mut down = vec![0; d];
    down[gene.gene] = -1;
    net.genes.push(gene);
    net.reactions.push(Reaction { stoichiometry: up, propensity: Propensity::Transcription { gene: gi } });
    net.reactions.push(Reaction { stoichiometry: down, propensity: Propensity::Degradation { gene: gi } });
}

/// Loads either a full serialized [`ReactionNetwork`] or a
/// [`NetworkDescription`].
pub fn load_network_json(text: &str) -> Result<ReactionNetwork> {
    if let Ok(net) = serde_json::from_str::<ReactionNetwork>(text) {
        net.validate()?;
        return Ok(net);
    }
    let desc: NetworkDescription = serde_json::from_str(text)?;
    desc.build()
}
