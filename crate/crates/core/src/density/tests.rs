use super::*;
use crate::analytic::InitialLaw;
use crate::functionals::{FunctionalSpec, PotentialFn, Term, TermKind};
use crate::icnn::{init_random, quadratic_net, IcnnArch};
use crate::jko::{run_flow, SolverConfig};
use crate::metrics::trapezoid;
use ndarray::array;
use rand_distr::{Distribution, StandardNormal};

#[test]
fn inverts_quadratics() {
    let id = quadratic_net(&[1.0, 1.0], &[0.0, 0.0]);
    let y = array![0.3, -1.2];
    assert_eq!(invert_map(&id, y.view(), INVERT_TOL, INVERT_MAX_ITER).unwrap(), y);
    let diag = quadratic_net(&[2.0, 4.0], &[0.0, 0.0]);
    let x = invert_map(&diag, y.view(), INVERT_TOL, INVERT_MAX_ITER).unwrap();
    assert!((x[0] - 0.15).abs() < 1e-12 && (x[1] + 0.3).abs() < 1e-12);
}

#[test]
fn random_net_round_trips() {
    let net = init_random(&IcnnArch::new(2, &[8, 6]), RngStream::new(3));
    let mut rng = RngStream::new(4).rng();
    for _ in 0..20 {
        let y: Array1<f64> = Array1::from_shape_fn(2, |_| {
            let z: f64 = StandardNormal.sample(&mut rng);
            2.0 * z
        });
        let x = invert_map(&net, y.view(), INVERT_TOL, INVERT_MAX_ITER).unwrap();
        let back = net.grad_x(x.view()).unwrap();
        assert!((&back - &y).iter().all(|v| v.abs() <= 1e-8));
        let x2: Array1<f64> = Array1::from_shape_fn(2, |_| StandardNormal.sample(&mut rng));
        let g = net.grad_x(x2.view()).unwrap();
        let inv = invert_map(&net, g.view(), INVERT_TOL, INVERT_MAX_ITER).unwrap();
        assert!((&inv - &x2).iter().all(|v| v.abs() <= 1e-6));
    }
}

#[test]
fn inversion_failure_is_reported() {
    let net = init_random(&IcnnArch::new(2, &[8, 6]), RngStream::new(3));
    let r = invert_map(&net, array![5.0, 5.0].view(), 1e-8, 0);
    assert!(matches!(r, Err(Error::NotConverged { .. })));
}

#[test]
fn empty_chain_returns_initial_density() {
    let law = InitialLaw::Gaussian { mean: vec![0.0], var: 1.0 };
    let x = array![0.7];
    let v = log_density(x.view(), &[], &law, &DensityConfig::default()).unwrap();
    assert_eq!(v, law.log_density(x.view()));
}

#[test]
fn doubling_map_gives_wider_gaussian() {
    // u(x) = x² pushes N(0, 1) to N(0, 4)
    let u = quadratic_net(&[2.0], &[0.0]);
    let law = InitialLaw::Gaussian { mean: vec![0.0], var: 1.0 };
    let target = InitialLaw::Gaussian { mean: vec![0.0], var: 4.0 };
    for i in 0..=60 {
        let x = array![-3.0 + 0.1 * i as f64];
        let v = log_density(x.view(), std::slice::from_ref(&u), &law, &DensityConfig::default()).unwrap();
        assert!((v - target.log_density(x.view())).abs() <= 1e-6);
    }
}

#[test]
fn flowed_density_is_normalized_and_matches_particles() {
    let law = InitialLaw::Gaussian { mean: vec![0.0], var: 0.25 };
    let pts = law.sample(64, RngStream::new(1));
    let l0 = Array1::from_iter(pts.rows().into_iter().map(|x| law.log_density(x)));
    let cloud = ParticleCloud::new(pts).unwrap().with_log_rho0(l0).unwrap();
    let f = FunctionalSpec::new(vec![
        Term::new(1.0, TermKind::Potential(PotentialFn::square(1))),
        Term::new(1.0, TermKind::NegEntropy),
    ]);
    let cfg =
        SolverConfig { hidden: vec![8, 8], inner_iters: 40, steps: 4, tau: 0.05, lr: 1e-2, ..SolverConfig::default() };
    let traj = run_flow(cloud, &f, &cfg).unwrap();
    let maps = traj.maps();
    assert!(traj.records.iter().filter(|r| r.accepted).count() > 1);

    let dcfg = DensityConfig::default();
    let fin = &traj.final_cloud;
    for i in 0..fin.len() {
        let e = log_density_eval(fin.points.row(i), &maps, &law, &dcfg).unwrap();
        let book = fin.log_rho0.as_ref().unwrap()[i] - fin.cum_logdet[i];
        assert!((e.log_density - book).abs() <= 1e-6, "particle {i}: {} vs {book}", e.log_density);
        assert!(e.roundtrip_error <= 1e-6);
    }

    let grid = Array1::linspace(-4.0, 4.0, 801);
    let pts = grid.clone().insert_axis(Axis(1));
    let vals = log_density_batch(pts.view(), &maps, &law, &dcfg).unwrap();
    let dens = Array1::from_iter(vals.iter().map(|e| e.log_density.exp()));
    let mass = trapezoid(grid.view(), dens.view()).unwrap();
    assert!((mass - 1.0).abs() <= 1e-3, "{mass}");
}

#[test]
fn kde_source_is_normalized() {
    let law = InitialLaw::Gaussian { mean: vec![0.0], var: 1.0 };
    let cloud = ParticleCloud::new(law.sample(200, RngStream::new(2))).unwrap();
    let src = KdeSource::from_cloud(&cloud, None);
    let grid = Array1::linspace(-8.0, 8.0, 1601);
    let dens = grid.mapv(|x| src.log_density(array![x].view()).exp());
    assert!((trapezoid(grid.view(), dens.view()).unwrap() - 1.0).abs() < 1e-6);
}
