//! Parallel vs sequential execution of the main data-parallel kernels.
//!
//! `cargo bench -p pfi`; on a single-core machine both paths should be
//! within noise of each other.

use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};

use pfi::force::{sinkhorn_divergence_empirical, SinkhornConfig};
use pfi::ou_theory::{variance_estimate, IsotropicOUSpec};
use pfi::rng::{normal_mat, stream, Purpose};
use pfi::srn::circuits::build_toggle_switch;
use pfi::srn::{sample_snapshots, InitialCondition, Simulator, SnapshotPlan, SpaceTag};

fn modes() -> [(&'static str, bool); 2] {
    [("parallel", false), ("sequential", true)]
}

fn bench_gillespie(c: &mut Criterion) {
    let net = build_toggle_switch(20.0);
    let plan = SnapshotPlan {
        n: 200,
        k: 2,
        dt: 0.2,
        space: SpaceTag::Concentration,
        simulator: Simulator::Gillespie,
        initial: InitialCondition::default(),
        seed: 1,
    };
    let mut g = c.benchmark_group("gillespie_snapshots");
    for (name, seq) in modes() {
        g.bench_function(BenchmarkId::from_parameter(name), |b| {
            pfi::par::set_sequential(seq);
            b.iter(|| sample_snapshots(&net, &plan).unwrap())
        });
    }
    g.finish();
}

fn bench_sinkhorn(c: &mut Criterion) {
    let mut rng = stream(2, Purpose::Evaluation, 0);
    let a = normal_mat(&mut rng, 5, 300);
    let b = normal_mat(&mut rng, 5, 300).add_scalar(0.5);
    let cfg = SinkhornConfig { tol: 1e-4, ..SinkhornConfig::new(0.1) };
    let mut g = c.benchmark_group("sinkhorn_divergence");
    for (name, seq) in modes() {
        g.bench_function(BenchmarkId::from_parameter(name), |bch| {
            pfi::par::set_sequential(seq);
            bch.iter(|| sinkhorn_divergence_empirical(&a, &b, &cfg).unwrap())
        });
    }
    g.finish();
}

fn bench_variance(c: &mut Criterion) {
    let spec = IsotropicOUSpec::reference(0);
    let mut g = c.benchmark_group("ou_variance_estimate");
    for (name, seq) in modes() {
        g.bench_function(BenchmarkId::from_parameter(name), |b| {
            pfi::par::set_sequential(seq);
            b.iter(|| variance_estimate(&spec, 0.2, 1000, 0.05, 200, 0).unwrap())
        });
    }
    g.finish();
}

criterion_group! {
    name = benches;
    config = Criterion::default().sample_size(10);
    targets = bench_gillespie, bench_sinkhorn, bench_variance
}
criterion_main!(benches);
