//! Built-in circuits: mCAD, HSC, toggle switch, and the linear cyclic chain.

use serde::{Deserialize, Serialize};

use super::boolean;
use super::network::{add_regulated_gene, Propensity, Reaction, ReactionNetwork, RegulatoryGene};

/// Shared BoolODE kinetic parameters.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BoolOdeParams {
    pub m: f64,
    pub ell: f64,
    pub k: f64,
    pub n: f64,
    pub volume: f64,
}

impl Default for BoolOdeParams {
    /// m = 20, ℓ = 5, n = 10. The threshold k = 2 sits at half the maximal
    /// concentration m/ℓ = 4; see the README for why k = 10 is not used.
    fn default() -> Self {
        BoolOdeParams { m: 20.0, ell: 5.0, k: 2.0, n: 10.0, volume: 4.0 }
    }
}

pub const MCAD_SPECIES: [&str; 5] = ["Pax6", "Sp8", "Fgf8", "Emx2", "Coup"];

pub const MCAD_RULES: [(&str, &str); 5] = [
    ("Pax6", "!Coup & !Emx2 & Sp8"),
    ("Sp8", "Fgf8 & !Emx2"),
    ("Fgf8", "Fgf8 & Sp8 & !Emx2"),
    ("Emx2", "!Fgf8 & !Pax6 & !Sp8 & Coup"),
    ("Coup", "!Sp8 & !Fgf8"),
];

pub const HSC_SPECIES: [&str; 11] =
    ["Gata1", "Gata2", "Fog1", "EKLF", "Fli1", "Scl", "Cebpa", "Pu1", "cJun", "EgrNab", "Gfi1"];

pub const HSC_RULES: [(&str, &str); 11] = [
    ("Gata1", "(Gata1 | Gata2 | Fli1) & !Pu1"),
    ("Gata2", "Gata2 & !(Gata1 & Fog1) & !Pu1"),
    ("Fog1", "Gata1"),
    ("EKLF", "Gata1 & !Fli1"),
    ("Fli1", "Gata1 & !EKLF"),
    ("Scl", "Gata1 & !Pu1"),
    ("Cebpa", "Cebpa & !(Gata1 & Fog1 & Scl)"),
    ("Pu1", "(Cebpa | Pu1) & !(Gata1 | Gata2)"),
    ("cJun", "Pu1 & !Gfi1"),
    ("EgrNab", "(Pu1 & cJun) & !Gfi1"),
    ("Gfi1", "Cebpa & !EgrNab"),
];

/// Marker genes of the four HSC lineages (Erythrocyte, Megakaryocyte,
/// Monocyte, Granulocyte).
pub const HSC_LINEAGES: [(&str, &[&str]); 4] = [
    ("Erythrocyte", &["Gata1", "Fog1", "EKLF", "Scl"]),
    ("Megakaryocyte", &["Gata1", "Fog1", "Fli1", "Scl"]),
    ("Monocyte", &["Cebpa", "Pu1", "cJun", "EgrNab"]),
    ("Granulocyte", &["Cebpa", "Pu1", "Gfi1"]),
];

fn from_rules(name: &str, species: &[&str], rules: &[(&str, &str)], p: BoolOdeParams) -> ReactionNetwork {
    let mut net = ReactionNetwork {
        name: name.to_string(),
        species_names: species.iter().map(|s| s.to_string()).collect(),
        volume: p.volume,
        reactions: Vec::new(),
        genes: Vec::new(),
        metadata: Default::default(),
    };
    for (gene, rule) in rules {
        let (vars, alpha) = boolean::truth_table(rule).expect("built-in rule parses");
        let regulators = vars
            .iter()
            .map(|v| species.iter().position(|s| s == v).expect("built-in regulator exists"))
            .collect();
        let gi = species.iter().position(|s| s == gene).expect("built-in gene exists");
        add_regulated_gene(
            &mut net,
            RegulatoryGene {
                gene: gi,
                regulators,
                alpha,
                rule: rule.to_string(),
                hill_k: p.k,
                hill_n: p.n,
                m: p.m,
                ell: p.ell,
                protein_ratio: 1.0,
            },
        );
    }
    net.metadata.insert("params".into(), serde_json::to_value(p).expect("serializable"));
    net
}

pub fn build_mcad(p: BoolOdeParams) -> ReactionNetwork {
    from_rules("mcad", &MCAD_SPECIES, &MCAD_RULES, p)
}

pub fn build_hsc(p: BoolOdeParams) -> ReactionNetwork {
    from_rules("hsc", &HSC_SPECIES, &HSC_RULES, p)
}

/// Two self-activating, mutually repressing genes. Each gene's production
/// `a·h_self/(1+h_self) + b/(1+h_other)` is written as BoolODE weights
/// over configurations (∅, self, other, both) divided by `m = a + b`.
pub fn build_toggle_switch(volume: f64) -> ReactionNetwork {
    let (a, b, k, n, ell) = (1.0, 1.0, 1.0, 4.0, 1.0);
    let m = a + b;
    let alpha = vec![b / m, (a + b) / m, 0.0, a / m];
    let mut net = ReactionNetwork {
        name: "toggle".into(),
        species_names: vec!["x1".into(), "x2".into()],
        volume,
        reactions: Vec::new(),
        genes: Vec::new(),
        metadata: Default::default(),
    };
    for (i, j) in [(0usize, 1usize), (1, 0)] {
        let rule = format!("{} self-activation, {} repression", net.species_names[i], net.species_names[j]);
        add_regulated_gene(
            &mut net,
            RegulatoryGene {
                gene: i,
                regulators: vec![i, j],
                alpha: alpha.clone(),
                rule,
                hill_k: k,
                hill_n: n,
                m,
                ell,
                protein_ratio: 1.0,
            },
        );
    }
    net
}

/// Rate constants `0.1 · 10^{0.1 + 1.4 i/(d-1)}`, i = 0..d.
pub fn cyclic_rates(d: usize) -> Vec<f64> {
    (0..d)
        .map(|i| {
            let frac = if d > 1 { i as f64 / (d - 1) as f64 } else { 0.0 };
            0.1 * 10f64.powf(0.1 + 1.4 * frac)
        })
        .collect()
}

/// `X_i → X_{i+1}` with the last species feeding back into the first.
pub fn build_cyclic_linear(d: usize, volume: f64) -> ReactionNetwork {
    build_cyclic_with_rates(&cyclic_rates(d), volume)
}

pub fn build_cyclic_with_rates(rates: &[f64], volume: f64) -> ReactionNetwork {
    let d = rates.len();
    let reactions = rates
        .iter()
        .enumerate()
        .map(|(i, &k)| {
            let mut s = vec![0; d];
            s[i] -= 1;
            s[(i + 1) % d] += 1;
            Reaction { stoichiometry: s, propensity: Propensity::MassAction { rate: k, reactants: vec![(i, 1)] } }
        })
        .collect();
    let mut net = ReactionNetwork {
        name: "cyclic".into(),
        species_names: (1..=d).map(|i| format!("X{i}")).collect(),
        volume,
        reactions,
        genes: Vec::new(),
        metadata: Default::default(),
    };
    net.metadata.insert("closure".into(), serde_json::json!(format!("X{d} -> X1")));
    net
}

/// Built-in network by name: `mcad`, `hsc`, `toggle`, `cyclic`.
pub fn builtin(name: &str, volume: f64) -> Option<ReactionNetwork> {
    let p = BoolOdeParams { volume, ..Default::default() };
    match name {
        "mcad" => Some(build_mcad(p)),
        "hsc" => Some(build_hsc(p)),
        "toggle" => Some(build_toggle_switch(volume)),
        "cyclic" => Some(build_cyclic_linear(30, volume)),
        _ => None,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::srn::network::boolode_activation;
    use approx::assert_relative_eq;

    #[test]
    fn mcad_pax6_matches_expanded_formula() {
        let p = BoolOdeParams { k: 1.0, n: 1.0, ..Default::default() };
        let net = build_mcad(p);
        let g = &net.genes[0];
        assert_eq!(g.gene, 0);
        // Regulators in order of appearance: Coup, Emx2, Sp8.
        let (c, e, s) = (0.7, 1.3, 2.1);
        let f = boolode_activation(g, &[c, e, s]);
        let expected = s / (1.0 + c + e + s + c * e + e * s + c * s + c * s * e);
        assert_relative_eq!(f, expected, max_relative = 1e-14);
    }

    #[test]
    fn single_activator_is_half_at_threshold() {
        let g = RegulatoryGene {
            gene: 0,
            regulators: vec![0],
            alpha: vec![0.0, 1.0],
            rule: "A".into(),
            hill_k: 3.0,
            hill_n: 7.0,
            m: 1.0,
            ell: 1.0,
            protein_ratio: 1.0,
        };
        assert_relative_eq!(boolode_activation(&g, &[3.0]), 0.5, epsilon = 1e-15);
        assert_eq!(boolode_activation(&g, &[0.0]), 0.0);
        // Saturation without overflow.
        assert_relative_eq!(boolode_activation(&g, &[1e60]), 1.0, epsilon = 1e-12);
    }

    #[test]
    fn activation_gradient_matches_finite_differences() {
        let net = build_hsc(BoolOdeParams { n: 3.0, ..Default::default() });
        let x: Vec<f64> = (0..11).map(|i| 0.5 + 0.3 * i as f64).collect();
        for g in &net.genes {
            let grad = g.activation_grad(&x);
            for (bit, &j) in g.regulators.iter().enumerate() {
                let h = 1e-6;
                let mut xp = x.clone();
                let mut xm = x.clone();
                xp[j] += h;
                xm[j] -= h;
                let fd = (g.activation(&xp) - g.activation(&xm)) / (2.0 * h);
                let scale = fd.abs().max(1e-8);
                // Self-regulation appears once in the regulator list.
                assert!((grad[bit] - fd).abs() / scale < 1e-5, "gene {} reg {j}: {} vs {fd}", g.gene, grad[bit]);
            }
        }
    }

    #[test]
    fn drift_jacobian_matches_finite_differences() {
        for net in [build_mcad(BoolOdeParams { n: 2.0, ..Default::default() }), build_cyclic_linear(6, 3.0)] {
            let d = net.dim();
            let x: Vec<f64> = (0..d).map(|i| 1.0 + 0.4 * i as f64).collect();
            let jac = net.drift_jacobian(&x);
            for j in 0..d {
                let h = 1e-6;
                let mut xp = x.clone();
                let mut xm = x.clone();
                xp[j] += h;
                xm[j] -= h;
                let fp = net.drift(&xp);
                let fm = net.drift(&xm);
                for i in 0..d {
                    let fd = (fp[i] - fm[i]) / (2.0 * h);
                    assert!((jac[(i, j)] - fd).abs() < 1e-5 * (1.0 + fd.abs()));
                }
            }
        }
    }

    #[test]
    fn sizes_and_cyclic_structure() {
        assert_eq!(builtin("mcad", 4.0).unwrap().dim(), 5);
        assert_eq!(builtin("hsc", 4.0).unwrap().dim(), 11);
        let net = build_cyclic_linear(30, 4.0);
        for rx in &net.reactions {
            assert_eq!(rx.stoichiometry.iter().sum::<i32>(), 0);
        }
        let k = cyclic_rates(30);
        assert_relative_eq!(k[0], 0.1 * 10f64.powf(0.1), max_relative = 1e-14);
        assert_relative_eq!(k[29], 0.1 * 10f64.powf(1.5), max_relative = 1e-14);
        let ratios: Vec<f64> = k.windows(2).map(|w| w[1] / w[0]).collect();
        for r in &ratios {
            assert_relative_eq!(*r, ratios[0], max_relative = 1e-12);
        }
        assert_eq!(net.reactions[29].stoichiometry[0], 1);
    }

    #[test]
    fn toggle_weights_reproduce_hill_sum() {
        let net = build_toggle_switch(10.0);
        let g = &net.genes[0];
        for &(x1, x2) in &[(0.3f64, 1.7f64), (1.0, 1.0), (2.5, 0.1)] {
            let h1 = x1.powi(4);
            let h2 = x2.powi(4);
            let direct = h1 / (1.0 + h1) + 1.0 / (1.0 + h2);
            assert_relative_eq!(g.m * g.activation(&[x1, x2]), direct, max_relative = 1e-13);
        }
    }

    #[test]
    fn mcad_adjacency_signs() {
        let net = build_mcad(BoolOdeParams::default());
        let a = net.signed_adjacency();
        // Pax6 row: Sp8 activates, Coup and Emx2 repress.
        assert_eq!(a[0], vec![0, 1, 0, -1, -1]);
        // Fgf8 self-activation.
        assert_eq!(a[2][2], 1);
        let nonzero: usize = a.iter().flatten().filter(|&&v| v != 0).count();
        assert_eq!(nonzero, 3 + 2 + 3 + 4 + 2);
    }
}
