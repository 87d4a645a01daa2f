//! Data-parallel core against the sequential fallback on the hot paths.

use std::hint::black_box;

use criterion::{criterion_group, criterion_main, Criterion};
use jko_icnn::analytic::InitialLaw;
use jko_icnn::divergence::sinkhorn_divergence;
use jko_icnn::functionals::{interaction_energy, FunctionalSpec, KernelFn, Term, TermKind};
use jko_icnn::icnn::{init_identity_like, init_random};
use jko_icnn::jko::{jko_step, SolverConfig};
use jko_icnn::numcore::RngStream;
use jko_icnn::par;
use ndarray::Array1;

const MODES: [(&str, bool); 2] = [("parallel", true), ("sequential", false)];

fn bench_interaction(c: &mut Criterion) {
    let law = InitialLaw::Gaussian { mean: vec![0.0], var: 1.0 };
    let pts = law.sample(2000, RngStream::new(1));
    let w = Array1::from_elem(2000, 1.0 / 2000.0);
    let mut g = c.benchmark_group("interaction_energy_n2000");
    for (name, on) in MODES {
        par::set_parallel(on);
        g.bench_function(name, |b| {
            b.iter(|| interaction_energy(black_box(pts.view()), w.view(), KernelFn::AttractRepulse))
        });
    }
    g.finish();
}

fn bench_sinkhorn(c: &mut Criterion) {
    let law = InitialLaw::Gaussian { mean: vec![0.0, 0.0], var: 1.0 };
    let a = law.sample(300, RngStream::new(2));
    let b = law.sample(300, RngStream::new(3));
    let w = Array1::from_elem(300, 1.0 / 300.0);
    let mut g = c.benchmark_group("sinkhorn_divergence_n300");
    g.sample_size(10);
    for (name, on) in MODES {
        par::set_parallel(on);
        g.bench_function(name, |bch| {
            bch.iter(|| sinkhorn_divergence(black_box(a.view()), w.view(), b.view(), w.view(), 0.05, 1e-6, 200))
        });
    }
    g.finish();
}

fn bench_hessians(c: &mut Criterion) {
    let cfg = SolverConfig::default();
    let net = init_random(&cfg.arch(2), RngStream::new(4));
    let pts = InitialLaw::Gaussian { mean: vec![0.0, 0.0], var: 1.0 }.sample(1000, RngStream::new(5));
    let mut g = c.benchmark_group("grad_hess_batch_n1000");
    for (name, on) in MODES {
        par::set_parallel(on);
        g.bench_function(name, |b| b.iter(|| net.grad_hess_batch(black_box(pts.view()))));
    }
    g.finish();
}

fn bench_jko_step(c: &mut Criterion) {
    let cfg = SolverConfig { inner_iters: 20, ..SolverConfig::default() };
    let law = InitialLaw::Gaussian { mean: vec![0.0], var: 0.25 };
    let pts = law.sample(500, RngStream::new(6));
    let l0 = Array1::from_iter(pts.rows().into_iter().map(|x| law.log_density(x)));
    let cloud = jko_icnn::cloud::ParticleCloud::new(pts).unwrap().with_log_rho0(l0).unwrap();
    let spec = FunctionalSpec::new(vec![Term::new(1.0, TermKind::NonlinearDiffusion { m: 2.0 })]);
    let mut g = c.benchmark_group("jko_step_porous_n500");
    g.sample_size(10);
    for (name, on) in MODES {
        par::set_parallel(on);
        g.bench_function(name, |b| {
            b.iter(|| {
                let init = init_identity_like(&cfg.arch(1), RngStream::new(7), cfg.init_noise);
                jko_step(&cloud, &spec, &cfg, init, 1)
            })
        });
    }
    g.finish();
}

criterion_group!(benches, bench_interaction, bench_sinkhorn, bench_hessians, bench_jko_step);
criterion_main!(benches);
