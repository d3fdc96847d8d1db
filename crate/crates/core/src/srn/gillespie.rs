//! Exact stochastic simulation (direct method).

use rand::Rng as _;
use rand_distr::{Distribution, Exp1};

use super::network::ReactionNetwork;
use crate::rng::Rng;

/// Right-continuous piecewise-constant path: `states[i]` holds on
/// `[times[i], times[i+1])`. The last entry is at `t_end`.
#[derive(Debug, Clone, PartialEq)]
pub struct Trajectory {
    pub times: Vec<f64>,
    pub states: Vec<Vec<i64>>,
    /// True when the total propensity vanished (or overflowed) before `t_end`.
    pub absorbed: bool,
}

impl Trajectory {
    /// State at time `t` (right-continuous).
    pub fn state_at(&self, t: f64) -> &[i64] {
        let idx = self.times.partition_point(|&s| s <= t);
        &self.states[idx.saturating_sub(1)]
    }
}

struct Stepper<'a> {
    net: &'a ReactionNetwork,
    a: Vec<f64>,
}

enum Step {
    Fired(f64),
    Absorbed,
}

impl<'a> Stepper<'a> {
    fn new(net: &'a ReactionNetwork) -> Self {
        Stepper { net, a: vec![0.0; net.num_reactions()] }
    }

    fn step(&mut self, x: &mut [i64], rng: &mut Rng) -> Step {
        self.net.propensities_counts(x, &mut self.a);
        let total: f64 = self.a.iter().sum();
        if !(total > 0.0) || !total.is_finite() {
            return Step::Absorbed;
        }
        let tau: f64 = Exp1.sample(rng);
        let target = rng.gen::<f64>() * total;
        let mut acc = 0.0;
        let mut chosen = self.a.len() - 1;
        for (r, &ar) in self.a.iter().enumerate() {
            acc += ar;
            if target < acc && ar > 0.0 {
                chosen = r;
                break;
            }
        }
        // Guard against round-off picking a zero-propensity tail reaction.
        while self.a[chosen] <= 0.0 {
            chosen -= 1;
        }
        for (xi, &nu) in x.iter_mut().zip(&self.net.reactions[chosen].stoichiometry) {
            *xi += nu as i64;
        }
        Step::Fired(tau / total)
    }
}

pub fn gillespie_simulate(net: &ReactionNetwork, x0: &[i64], t_end: f64, rng: &mut Rng) -> Trajectory {
    assert!(x0.iter().all(|&v| v >= 0), "initial counts must be nonnegative");
    let mut stepper = Stepper::new(net);
    let mut x = x0.to_vec();
    let mut t = 0.0;
    let mut times = vec![0.0];
    let mut states = vec![x.clone()];
    let mut absorbed = false;
    loop {
        let mut next = x.clone();
        match stepper.step(&mut next, rng) {
            Step::Absorbed => {
                absorbed = true;
                break;
            }
            Step::Fired(dt) => {
                t += dt;
                if t > t_end {
                    break;
                }
                x = next;
                times.push(t);
                states.push(x.clone());
            }
        }
    }
    times.push(t_end);
    states.push(x);
    Trajectory { times, states, absorbed }
}

/// States at the requested (nondecreasing) times without storing the path.
pub fn gillespie_at_times(net: &ReactionNetwork, x0: &[i64], times: &[f64], rng: &mut Rng) -> Vec<Vec<i64>> {
    assert!(x0.iter().all(|&v| v >= 0), "initial counts must be nonnegative");
    let mut stepper = Stepper::new(net);
    let mut x = x0.to_vec();
    let mut t = 0.0;
    let mut out = Vec::with_capacity(times.len());
    let mut k = 0;
    let t_end = times.last().copied().unwrap_or(0.0);
    while k < times.len() {
        let mut next = x.clone();
        let t_next = match stepper.step(&mut next, rng) {
            Step::Absorbed => f64::INFINITY,
            Step::Fired(dt) => t + dt,
        };
        while k < times.len() && times[k] < t_next {
            out.push(x.clone());
            k += 1;
        }
        if t_next > t_end {
            break;
        }
        t = t_next;
        x = next;
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::{stream, Purpose};
    use crate::srn::network::{Propensity, Reaction};

    fn birth_death(b: f64, ell: f64) -> ReactionNetwork {
        ReactionNetwork {
            name: "birth-death".into(),
            species_names: vec!["X".into()],
            volume: 1.0,
            reactions: vec![
                Reaction { stoichiometry: vec![1], propensity: Propensity::MassAction { rate: b, reactants: vec![] } },
                Reaction { stoichiometry: vec![-1], propensity: Propensity::MassAction { rate: ell, reactants: vec![(0, 1)] } },
            ],
            genes: vec![],
            metadata: Default::default(),
        }
    }

    #[test]
    fn zero_propensities_keep_state() {
        let net = birth_death(0.0, 0.0);
        let mut rng = stream(1, Purpose::Dataset, 0);
        let tr = gillespie_simulate(&net, &[5], 3.0, &mut rng);
        assert!(tr.absorbed);
        assert_eq!(tr.states.last().unwrap(), &vec![5]);
        assert_eq!(*tr.times.last().unwrap(), 3.0);
        assert_eq!(gillespie_at_times(&net, &[5], &[0.0, 1.0, 2.0], &mut rng), vec![vec![5]; 3]);
    }

    #[test]
    fn trajectory_and_sampler_agree_on_same_stream() {
        let net = birth_death(10.0, 1.0);
        let tr = gillespie_simulate(&net, &[0], 2.0, &mut stream(3, Purpose::Dataset, 4));
        let pts = gillespie_at_times(&net, &[0], &[0.5, 1.0, 2.0], &mut stream(3, Purpose::Dataset, 4));
        assert_eq!(pts[0], tr.state_at(0.5));
        assert_eq!(pts[1], tr.state_at(1.0));
        assert_eq!(pts[2], tr.state_at(2.0));
        assert!(tr.states.iter().all(|s| s[0] >= 0));
    }
}
