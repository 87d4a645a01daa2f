use super::*;
use crate::icnn::{init_random, quadratic_net, IcnnArch};
use crate::numcore::{finite_diff_grad, rel_err};
use ndarray::{array, Array2};
use rand::Rng;
use rand_distr::{Distribution, StandardNormal};

fn random_cloud(n: usize, d: usize, seed: u64) -> ParticleCloud {
    let mut rng = RngStream::new(seed).rng();
    let pts = Array2::from_shape_fn((n, d), |_| StandardNormal.sample(&mut rng));
    ParticleCloud::new(pts).unwrap()
}

fn fd_check<F>(net: &Icnn, node_of: F) -> f64
where
    F: Fn(&Icnn) -> LossNode,
{
    let theta = net.params.to_flat();
    let analytic = node_of(net).param_grad(net).unwrap();
    let fd = finite_diff_grad(
        |t| {
            let p = net.params.with_flat(t).unwrap();
            node_of(&Icnn::new(net.arch.clone(), p).unwrap()).value
        },
        &theta,
        1e-6,
    );
    rel_err(&analytic, &fd, 1e-8)
}

#[test]
fn potential_examples() {
    let id = quadratic_net(&[1.0, 1.0], &[0.0, 0.0]);
    let c = ParticleCloud::new(array![[1.0, 0.0], [-1.0, 0.0]]).unwrap();
    let node = potential_term(&c, &id, &PotentialFn::square(2)).unwrap();
    assert!((node.value - 1.0).abs() < 1e-14);

    let shift = quadratic_net(&[1.0, 1.0], &[0.3, -0.4]);
    let c = ParticleCloud::new(array![[0.0, 0.0]]).unwrap();
    let node = potential_term(&c, &shift, &PotentialFn::square(2)).unwrap();
    assert!((node.value - 0.25).abs() < 1e-14);
}

#[test]
fn potential_matches_resummation() {
    let net = init_random(&IcnnArch::new(2, &[6, 4]), RngStream::new(4));
    let c = random_cloud(16, 2, 5);
    let v = PotentialFn::Quadratic { center: vec![0.5, -1.0] };
    let node = potential_term(&c, &net, &v).unwrap();
    let mut direct = 0.0;
    for (i, x) in c.points.rows().into_iter().enumerate() {
        let g = net.grad_x(x).unwrap();
        direct += c.weights[i] * ((g[0] - 0.5).powi(2) + (g[1] + 1.0).powi(2));
    }
    assert!((node.value - direct).abs() < 1e-12 * direct.abs().max(1.0));
}

#[test]
fn interaction_examples() {
    let id = quadratic_net(&[1.0], &[0.0]);
    let c = ParticleCloud::new(array![[-1.0], [1.0]]).unwrap();
    let node = interaction_term(&c, &id, KernelFn::Quadratic).unwrap();
    assert!((node.value - 1.0).abs() < 1e-14);

    let single = ParticleCloud::new(array![[0.4]]).unwrap();
    assert_eq!(interaction_term(&single, &id, KernelFn::AttractRepulse).unwrap().value, 0.0);

    // ½ · 2 · ¼ · (½·4 − log 2)
    let node = interaction_term(&c, &id, KernelFn::AttractRepulse).unwrap();
    let direct = 0.25 * (2.0 - 2f64.ln());
    assert!((node.value - direct).abs() < 1e-14);
}

#[test]
fn coincident_particles_are_singular() {
    let id = quadratic_net(&[1.0], &[0.0]);
    let c = ParticleCloud::new(array![[0.5], [0.5], [1.0]]).unwrap();
    assert!(matches!(interaction_term(&c, &id, KernelFn::AttractRepulse), Err(Error::SingularKernel(_, _))));
}

#[test]
fn interaction_relabel_and_translate() {
    let c = random_cloud(12, 2, 9);
    let e = interaction_energy(c.points.view(), c.weights.view(), KernelFn::AttractRepulse).unwrap();
    let mut rev = c.points.clone();
    rev.invert_axis(ndarray::Axis(0));
    let e_rev = interaction_energy(rev.view(), c.weights.view(), KernelFn::AttractRepulse).unwrap();
    let shifted = &c.points + &array![[3.0, -2.0]];
    let e_shift = interaction_energy(shifted.view(), c.weights.view(), KernelFn::AttractRepulse).unwrap();
    assert!((e - e_rev).abs() < 1e-13);
    assert!((e - e_shift).abs() < 1e-12);
}

#[test]
fn entropy_examples() {
    let c = random_cloud(5, 2, 1);
    let cfg = LogdetConfig::exact();
    let id = quadratic_net(&[1.0, 1.0], &[0.0, 0.0]);
    let node = neg_entropy_surrogate(&c, &id, &cfg, RngStream::new(0)).unwrap();
    assert!(node.value.abs() < 1e-14);
    let two = quadratic_net(&[2.0, 2.0], &[0.0, 0.0]);
    let node = neg_entropy_surrogate(&c, &two, &cfg, RngStream::new(0)).unwrap();
    assert!((node.value + 4f64.ln()).abs() < 1e-13);
}

#[test]
fn entropy_matches_1d_second_derivative() {
    let net = init_random(&IcnnArch::new(1, &[8, 8]), RngStream::new(2));
    let c = random_cloud(10, 1, 3);
    let node = neg_entropy_surrogate(&c, &net, &LogdetConfig::exact(), RngStream::new(0)).unwrap();
    // central second difference of u
    let h = 1e-4;
    let mut direct = 0.0;
    for (i, x) in c.points.column(0).iter().enumerate() {
        let f = |t: f64| net.forward(array![t].view()).unwrap();
        let upp = (f(x + h) - 2.0 * f(*x) + f(x - h)) / (h * h);
        direct -= c.weights[i] * upp.ln();
    }
    assert!((node.value - direct).abs() < 1e-5);
}

#[test]
fn diffusion_single_particle_example() {
    let a: f64 = 1.7;
    let rho0: f64 = 0.6;
    let net = quadratic_net(&[a], &[0.0]);
    let c = ParticleCloud::new(array![[0.2]]).unwrap().with_log_rho0(array![rho0.ln()]).unwrap();
    let node = nonlinear_diffusion_surrogate(&c, &net, 2.0, &LogdetConfig::exact(), RngStream::new(0)).unwrap();
    assert!((node.value + rho0 / a * a.ln()).abs() < 1e-14);

    // d/da of the exact energy ρ₀/a is −ρ₀/a², reached through S = √a
    let g = node.param_grad(&net).unwrap();
    let ds = g[g.len() - 1];
    let da = ds / (2.0 * a.sqrt());
    assert!((da + rho0 / (a * a)).abs() < 1e-12);
}

#[test]
fn diffusion_needs_initial_density() {
    let net = quadratic_net(&[1.0], &[0.0]);
    let c = ParticleCloud::new(array![[0.2]]).unwrap();
    let r = nonlinear_diffusion_surrogate(&c, &net, 2.0, &LogdetConfig::exact(), RngStream::new(0));
    assert!(matches!(r, Err(Error::DensityUnavailable(_))));
}

#[test]
fn diffusion_identity_is_zero() {
    let id = quadratic_net(&[1.0], &[0.0]);
    let c = random_cloud(6, 1, 2);
    let n = c.len();
    let c = c.with_log_rho0(Array1::zeros(n)).unwrap();
    let node = nonlinear_diffusion_surrogate(&c, &id, 2.0, &LogdetConfig::exact(), RngStream::new(0)).unwrap();
    assert_eq!(node.value, 0.0);
}

#[test]
fn transport_examples() {
    let c = random_cloud(7, 2, 8);
    let id = quadratic_net(&[1.0, 1.0], &[0.0, 0.0]);
    assert_eq!(transport_cost(&c, &id, 0.1).unwrap().value, 0.0);
    let shift = quadratic_net(&[1.0, 1.0], &[0.3, 0.4]);
    let v = transport_cost(&c, &shift, 0.1).unwrap().value;
    assert!((v - 0.25 / 0.2).abs() < 1e-13);

    let net = init_random(&IcnnArch::new(2, &[5, 5]), RngStream::new(11));
    let v = transport_cost(&c, &net, 1e-3).unwrap().value;
    let mut direct = 0.0;
    for (i, x) in c.points.rows().into_iter().enumerate() {
        let g = net.grad_x(x).unwrap();
        direct += c.weights[i] * (&g - &x).mapv(|t| t * t).sum();
    }
    direct /= 2e-3;
    assert!((v - direct).abs() <= 1e-12 * direct);
}

#[test]
fn surrogate_gradients_match_finite_differences() {
    for d in [1, 2] {
        let net = init_random(&IcnnArch::new(d, &[5, 4]), RngStream::new(20 + d as u64));
        let c = random_cloud(16, d, 30 + d as u64);
        let n = c.len();
        let mut rng = RngStream::new(40).rng();
        let l0 = Array1::from_shape_fn(n, |_| -1.0 - rng.random::<f64>());
        let c0 = c.clone().with_log_rho0(l0).unwrap();
        let cfg = LogdetConfig::exact();
        let s = RngStream::new(0);
        let v = PotentialFn::square(d);

        let errs = [
            fd_check(&net, |u| potential_term(&c, u, &v).unwrap()),
            fd_check(&net, |u| interaction_term(&c, u, KernelFn::Quadratic).unwrap()),
            fd_check(&net, |u| interaction_term(&c, u, KernelFn::AttractRepulse).unwrap()),
            fd_check(&net, |u| neg_entropy_surrogate(&c, u, &cfg, s).unwrap()),
            fd_check(&net, |u| transport_cost(&c, u, 0.5).unwrap()),
        ];
        for (k, e) in errs.iter().enumerate() {
            assert!(*e < 1e-4, "d={d} term {k}: rel err {e}");
        }

        // the surrogate's gradient is the gradient of the exact energy
        let analytic = nonlinear_diffusion_surrogate(&c0, &net, 2.0, &cfg, s).unwrap().param_grad(&net).unwrap();
        let exact = |t: &[f64]| {
            let u = Icnn::new(net.arch.clone(), net.params.with_flat(t).unwrap()).unwrap();
            let (pf, _) = Pushforward::compute(&u, c0.points.view(), JetNeed::Hessian, &cfg, s, true, false).unwrap();
            let pushed = c0.push_forward(pf.grads().to_owned(), Some(Array1::from(pf.logdet.unwrap()).view())).unwrap();
            internal_energy_exact(&pushed, |x| x * x).unwrap()
        };
        let fd = finite_diff_grad(exact, &net.params.to_flat(), 1e-6);
        let e = rel_err(&analytic, &fd, 1e-8);
        assert!(e < 1e-4, "d={d} diffusion: rel err {e}");
    }
}

#[test]
fn stochastic_entropy_gradient_is_unbiased() {
    let net = init_random(&IcnnArch::new(3, &[6]), RngStream::new(3));
    let c = random_cloud(4, 3, 4);
    let exact =
        neg_entropy_surrogate(&c, &net, &LogdetConfig::exact(), RngStream::new(0)).unwrap().param_grad(&net).unwrap();
    let cfg = LogdetConfig::stochastic(4000);
    let est = neg_entropy_surrogate(&c, &net, &cfg, RngStream::new(7)).unwrap().param_grad(&net).unwrap();
    let e = rel_err(&est, &exact, 1e-8);
    assert!(e < 0.05, "rel err {e}");
}

#[test]
fn internal_energy_examples() {
    let n = 10_000;
    let mut rng = RngStream::new(12).rng();
    let xs: Vec<f64> = (0..n).map(|_| StandardNormal.sample(&mut rng)).collect();
    let l0 = Array1::from_iter(xs.iter().map(|x| -0.5 * x * x - 0.5 * (2.0 * std::f64::consts::PI).ln()));
    let c = ParticleCloud::new(Array2::from_shape_vec((n, 1), xs).unwrap()).unwrap().with_log_rho0(l0.clone()).unwrap();
    let est = internal_energy_exact(&c, |t| t * t.ln()).unwrap();
    let target = -0.5 * (2.0 * std::f64::consts::PI * std::f64::consts::E).ln();
    let se = (l0.mapv(|v| v * v).mean().unwrap() - l0.mean().unwrap().powi(2)).sqrt() / (n as f64).sqrt();
    assert!((est - target).abs() < 3.0 * se, "{est} vs {target} (se {se})");

    let mass = internal_energy_exact(&c, |t| t).unwrap();
    assert!((mass - 1.0).abs() < 1e-12);

    let u: Vec<f64> = (0..n).map(|_| rng.random::<f64>()).collect();
    let c = ParticleCloud::new(Array2::from_shape_vec((n, 1), u).unwrap())
        .unwrap()
        .with_log_rho0(Array1::zeros(n))
        .unwrap();
    assert!((internal_energy_exact(&c, |t| t * t).unwrap() - 1.0).abs() < 1e-12);
}

#[test]
fn objective_matches_exact_value_after_push() {
    let d = 2;
    let net = init_random(&IcnnArch::new(d, &[5]), RngStream::new(50));
    let c = random_cloud(9, d, 51);
    let n = c.len();
    let c = c.with_log_rho0(Array1::from_elem(n, -2.0)).unwrap();
    let spec = FunctionalSpec::new(vec![
        Term::new(0.7, TermKind::Potential(PotentialFn::square(d))),
        Term::new(0.3, TermKind::Interaction(KernelFn::AttractRepulse)),
        Term::new(0.2, TermKind::NegEntropy),
        Term::new(0.1, TermKind::NonlinearDiffusion { m: 2.0 }),
    ]);
    let cfg = LogdetConfig::exact();
    let (pf, _) =
        Pushforward::compute(&net, c.points.view(), spec.need(), &cfg, RngStream::new(0), true, false).unwrap();
    let tau = 0.3;
    let ev = spec.evaluate(&c, &pf, tau, &mut WarmState::default()).unwrap();
    let ld = Array1::from(pf.logdet.clone().unwrap());
    let pushed = c.push_forward(pf.grads().to_owned(), Some(ld.view())).unwrap();
    let f = spec.exact_value(&pushed).unwrap();
    let obj = ev.objective.unwrap();
    assert!((obj - f - ev.transport).abs() < 1e-12 * obj.abs().max(1.0));
}

#[test]
fn validation() {
    let bad = FunctionalSpec::new(vec![Term::new(1.0, TermKind::NonlinearDiffusion { m: 1.0 })]);
    assert!(bad.validate(1).is_err());
    let bad = FunctionalSpec::new(vec![Term::new(f64::NAN, TermKind::NegEntropy)]);
    assert!(bad.validate(1).is_err());
    let bad = FunctionalSpec::new(vec![Term::new(1.0, TermKind::Potential(PotentialFn::square(3)))]);
    assert!(matches!(bad.validate(2), Err(Error::DimMismatch { .. })));
}

#[test]
fn relu_nets_cannot_feed_entropy() {
    let arch = IcnnArch::new(2, &[4]).with_activation(crate::icnn::Activation::Relu);
    let net = init_random(&arch, RngStream::new(1));
    let c = random_cloud(3, 2, 2);
    let r = neg_entropy_surrogate(&c, &net, &LogdetConfig::exact(), RngStream::new(0));
    assert!(matches!(r, Err(Error::UnsupportedComposition(_))));
}

mod props {
    use super::*;
    use proptest::prelude::*;

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(24))]

        #[test]
        fn potential_is_nonnegative(seed in 0u64..1000, n in 1usize..10) {
            let net = init_random(&IcnnArch::new(2, &[4]), RngStream::new(seed));
            let c = random_cloud(n, 2, seed + 1);
            let v = potential_term(&c, &net, &PotentialFn::square(2)).unwrap().value;
            prop_assert!(v >= 0.0);
        }

        #[test]
        fn interaction_translation_invariant(seed in 0u64..1000, dx in -5.0f64..5.0) {
            let c = random_cloud(6, 1, seed);
            let e = interaction_energy(c.points.view(), c.weights.view(), KernelFn::Quadratic).unwrap();
            let moved = c.points.mapv(|v| v + dx);
            let e2 = interaction_energy(moved.view(), c.weights.view(), KernelFn::Quadratic).unwrap();
            prop_assert!((e - e2).abs() < 1e-10 * e.max(1.0));
        }
    }
}
