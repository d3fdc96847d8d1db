//! Euler–Maruyama integration of diffusion processes, including the
//! chemical Langevin equation of a reaction network.

use nalgebra::DMatrix;
use rand_distr::{Distribution, StandardNormal};

use super::network::ReactionNetwork;
use crate::gaussian::PointCloud;
use crate::par;
use crate::rng::{stream, Purpose, Rng};

/// An Itô process `dx = f(x,t) dt + G(x,t) dW` with `G Gᵀ = 2D`.
pub trait DiffusionProcess: Sync {
    fn dim(&self) -> usize;
    /// Number of independent Wiener components driving the process.
    fn noise_dim(&self) -> usize;
    fn drift(&self, x: &[f64], t: f64, out: &mut [f64]);
    /// Adds `G(x,t) w` to `out`; `w` already carries the `√h` factor.
    fn add_noise(&self, x: &[f64], t: f64, w: &[f64], out: &mut [f64]);
}

/// Post-step state modification (e.g. holding a gene at zero).
pub type StepHook<'a> = &'a (dyn Fn(&mut [f64]) + Sync);

#[derive(Clone, Copy, Default)]
pub struct SdeOptions<'a> {
    /// Clamp negative coordinates to zero after every step.
    pub clamp_nonneg: bool,
    pub hook: Option<StepHook<'a>>,
}

/// Chemical Langevin equation of a network in concentration space:
/// one Wiener process per reaction, `G_{i r} = ν_{ri} √a_r / V`.
pub struct ChemicalLangevin<'a> {
    pub net: &'a ReactionNetwork,
}

impl DiffusionProcess for ChemicalLangevin<'_> {
    fn dim(&self) -> usize {
        self.net.dim()
    }

    fn noise_dim(&self) -> usize {
        self.net.num_reactions()
    }

    fn drift(&self, x: &[f64], _t: f64, out: &mut [f64]) {
        out.copy_from_slice(&self.net.drift(x));
    }

    fn add_noise(&self, x: &[f64], _t: f64, w: &[f64], out: &mut [f64]) {
        let mut a = vec![0.0; self.net.num_reactions()];
        self.net.propensities_concentration(x, &mut a);
        let v = self.net.volume;
        for ((rx, ar), wr) in self.net.reactions.iter().zip(&a).zip(w) {
            let amp = ar.max(0.0).sqrt() * wr / v;
            for (o, &nu) in out.iter_mut().zip(&rx.stoichiometry) {
                if nu != 0 {
                    *o += nu as f64 * amp;
                }
            }
        }
    }
}

/// Integrates one path and returns the states at `times` (nondecreasing,
/// starting at or after 0) plus the number of clamped coordinates.
pub fn sde_path<P: DiffusionProcess + ?Sized>(
    process: &P,
    x0: &[f64],
    times: &[f64],
    dt: f64,
    rng: &mut Rng,
    opts: SdeOptions,
) -> (Vec<Vec<f64>>, u64) {
    assert!(dt > 0.0, "step size must be positive");
    let d = process.dim();
    let mut x = x0.to_vec();
    if let Some(h) = opts.hook {
        h(&mut x);
    }
    let mut drift = vec![0.0; d];
    let mut w = vec![0.0; process.noise_dim()];
    let mut t = 0.0;
    let mut clamps = 0u64;
    let mut out = Vec::with_capacity(times.len());
    for &target in times {
        let span = target - t;
        if span > 0.0 {
            let steps = (span / dt).ceil().max(1.0) as usize;
            let h = span / steps as f64;
            let sh = h.sqrt();
            for _ in 0..steps {
                process.drift(&x, t, &mut drift);
                for wi in w.iter_mut() {
                    let z: f64 = StandardNormal.sample(rng);
                    *wi = z * sh;
                }
                let mut inc: Vec<f64> = drift.iter().map(|f| f * h).collect();
                process.add_noise(&x, t, &w, &mut inc);
                for (xi, di) in x.iter_mut().zip(&inc) {
                    *xi += di;
                }
                if opts.clamp_nonneg {
                    for xi in x.iter_mut() {
                        if *xi < 0.0 {
                            *xi = 0.0;
                            clamps += 1;
                        }
                    }
                }
                if let Some(hk) = opts.hook {
                    hk(&mut x);
                }
                t += h;
            }
            t = target;
        }
        out.push(x.clone());
    }
    (out, clamps)
}

/// Result of a batched simulation: one d×n cloud per requested time.
#[derive(Debug, Clone)]
pub struct SdeBatch {
    pub snapshots: Vec<PointCloud>,
    pub clamps: u64,
}

/// Simulates every column of `x0` independently. Sample `j` uses the
/// stream `(seed, purpose, offset + j)`, so the result does not depend on
/// evaluation order or thread count.
#[allow(clippy::too_many_arguments)]
pub fn sde_simulate<P: DiffusionProcess + ?Sized>(
    process: &P,
    x0: &PointCloud,
    times: &[f64],
    dt: f64,
    seed: u64,
    purpose: Purpose,
    offset: u64,
    opts: SdeOptions,
) -> SdeBatch {
    let d = process.dim();
    let n = x0.ncols();
    let runs = par::map_range(n, |j| {
        let mut rng = stream(seed, purpose, offset + j as u64);
        let start: Vec<f64> = x0.column(j).iter().copied().collect();
        sde_path(process, &start, times, dt, &mut rng, opts)
    });
    let mut snapshots = vec![DMatrix::zeros(d, n); times.len()];
    let mut clamps = 0;
    for (j, (states, c)) in runs.into_iter().enumerate() {
        clamps += c;
        for (snap, s) in snapshots.iter_mut().zip(states) {
            snap.column_mut(j).copy_from_slice(&s);
        }
    }
    SdeBatch { snapshots, clamps }
}

#[derive(Debug, Clone)]
pub struct CleTrajectory {
    pub times: Vec<f64>,
    pub states: Vec<Vec<f64>>,
    pub clamps: u64,
    /// Set when `dt_em` exceeds a tenth of the fastest timescale.
    pub dt_warning: bool,
}

pub fn cle_dt_too_large(net: &ReactionNetwork, dt_em: f64) -> bool {
    dt_em * net.fastest_rate() > 0.1
}

/// CLE path of `net` in concentration space, recorded at `times`.
pub fn cle_simulate(
    net: &ReactionNetwork,
    x0: &[f64],
    times: &[f64],
    dt_em: f64,
    rng: &mut Rng,
    hook: Option<StepHook>,
) -> CleTrajectory {
    let dt_warning = cle_dt_too_large(net, dt_em);
    if dt_warning {
        log::warn!("CLE step {dt_em} exceeds 10% of the fastest timescale of '{}'", net.name);
    }
    let process = ChemicalLangevin { net };
    let (states, clamps) = sde_path(&process, x0, times, dt_em, rng, SdeOptions { clamp_nonneg: true, hook });
    CleTrajectory { times: times.to_vec(), states, clamps, dt_warning }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::srn::circuits::{build_mcad, BoolOdeParams};

    #[test]
    fn zero_state_without_basal_transcription_stays_zero() {
        // Without Coup, every mCAD gene except Coup has α_∅ = 0; drop Coup's
        // production by removing its reactions.
        let mut net = build_mcad(BoolOdeParams::default());
        net.reactions.truncate(8);
        let mut rng = stream(5, Purpose::Dataset, 0);
        let tr = cle_simulate(&net, &[0.0; 5], &[0.1, 0.5, 1.0], 1e-3, &mut rng, None);
        for s in &tr.states {
            assert!(s.iter().all(|&v| v == 0.0));
        }
        assert_eq!(tr.clamps, 0);
    }

    #[test]
    fn hook_holds_gene_at_zero() {
        let net = build_mcad(BoolOdeParams::default());
        let hook = |x: &mut [f64]| x[4] = 0.0;
        let mut rng = stream(5, Purpose::Perturbation, 0);
        let tr = cle_simulate(&net, &[1.0; 5], &[0.2, 0.4], 1e-3, &mut rng, Some(&hook));
        assert!(tr.states.iter().all(|s| s[4] == 0.0));
    }

    #[test]
    fn warns_on_coarse_steps() {
        let net = build_mcad(BoolOdeParams::default());
        assert!(cle_dt_too_large(&net, 0.1));
        assert!(!cle_dt_too_large(&net, 1e-3));
    }
}
