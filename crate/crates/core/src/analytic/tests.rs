use super::*;
use ndarray::array;

/// Composite Simpson on `[a, b]` with `n` (even) intervals.
fn simpson<F: Fn(f64) -> f64>(f: F, a: f64, b: f64, n: usize) -> f64 {
    let h = (b - a) / n as f64;
    let mut acc = f(a) + f(b);
    for i in 1..n {
        acc += if i % 2 == 1 { 4.0 } else { 2.0 } * f(a + i as f64 * h);
    }
    acc * h / 3.0
}

#[test]
fn barenblatt_constants() {
    let (a, b, k) = barenblatt_exponents(2.0, 1);
    assert!((a - 1.0 / 3.0).abs() < 1e-15);
    assert!((b - 1.0 / 3.0).abs() < 1e-15);
    assert!((k - 1.0 / 12.0).abs() < 1e-15);
    assert!((barenblatt_reference_c() - 0.5724).abs() < 5e-5);
    assert_eq!(barenblatt_density(array![10.0].view(), 0.25, 2.0, barenblatt_unit_c()), 0.0);
}

#[test]
fn barenblatt_masses() {
    // closed form √(12C)·4C/3 for d = 1, m = 2
    let closed = |c: f64| (12.0 * c).sqrt() * 4.0 * c / 3.0;
    assert!((closed(barenblatt_unit_c()) - 1.0).abs() < 1e-14);
    assert!((closed(barenblatt_reference_c()) - 2.0).abs() < 1e-14);
    for t in [0.25, 0.5, 3.0] {
        let r = barenblatt_radius(t, 2.0, 1, barenblatt_unit_c());
        // piecewise quadratic on its support: Simpson is exact
        let q = simpson(|x| barenblatt_density(array![x].view(), t, 2.0, barenblatt_unit_c()), -r, r, 2000);
        assert!((q - 1.0).abs() < 1e-12, "t={t}: {q}");
        assert!((barenblatt_mass_1d(2.0, barenblatt_unit_c(), t) - 1.0).abs() < 1e-12);
    }
}

#[test]
fn fokker_planck_constant() {
    let c = fokker_planck_c(2.0, 1.0).unwrap();
    let closed = 0.5 * 1.5f64.powf(2.0 / 3.0);
    assert!((c - closed).abs() < 1e-12, "{c} vs {closed}");
    assert!((c - 0.6552).abs() < 1e-4);
    let v = PotentialFn::square(1);
    let r = (2.0 * c).sqrt();
    let q = simpson(|x| fokker_planck_steady(array![x].view(), 2.0, &v, c), -r, r, 2000);
    assert!((q - 1.0).abs() < 1e-8);
    assert_eq!(fokker_planck_steady(array![5.0].view(), 2.0, &v, c), 0.0);
    // other exponents still normalize
    let c3 = fokker_planck_c(3.0, 1.0).unwrap();
    let r3 = (1.5 * c3).sqrt();
    let q = simpson(|x| fokker_planck_steady(array![x].view(), 3.0, &v, c3), -r3, r3, 200_000);
    assert!((q - 1.0).abs() < 1e-6, "{q}");
}

#[test]
fn aggregation_profile() {
    assert!((aggregation_steady(0.0) - 2f64.sqrt() / std::f64::consts::PI).abs() < 1e-15);
    assert!((aggregation_steady(0.0) - 0.4502).abs() < 1e-4);
    assert_eq!(aggregation_steady(1.5), 0.0);
    assert_eq!(aggregation_steady(-2f64.sqrt()), 0.0);
    // x = √2 sin θ turns the integrand into (2/π) cos² θ
    let q = simpson(
        |th: f64| aggregation_steady(2f64.sqrt() * th.sin()) * 2f64.sqrt() * th.cos(),
        -std::f64::consts::FRAC_PI_2,
        std::f64::consts::FRAC_PI_2,
        2000,
    );
    assert!((q - 1.0).abs() < 1e-8);
}

#[test]
fn heat_and_advection() {
    let q = simpson(|x| x * x * heat_gaussian(x, 0.3, 0.0, 0.25), -12.0, 12.0, 20_000);
    assert!((q - 0.85).abs() < 1e-10);
    assert!(
        (heat_gaussian(0.4, 0.0, 0.1, 0.5) - (-(0.09) / 1.0f64).exp() / (std::f64::consts::PI).sqrt()).abs() < 1e-15
    );
    let x = array![1.0, -2.0];
    let x0 = array![0.5, 0.5];
    assert_eq!(advection_position(x.view(), 0.0, x0.view()), x);
    let far = advection_position(x.view(), 40.0, x0.view());
    assert!((&far - &x0).iter().all(|v| v.abs() < 1e-30));
}

#[test]
fn steady_states_have_zero_velocity() {
    // ∂ₓ(f'(ρ) + V) with f(ρ) = ρ²: f' = 2ρ
    let c = fokker_planck_c(2.0, 1.0).unwrap();
    let v = PotentialFn::square(1);
    let phi = |x: f64| 2.0 * fokker_planck_steady(array![x].view(), 2.0, &v, c) + x * x;
    let r = (2.0 * c).sqrt();
    let h = 1e-5;
    for i in 1..40 {
        let x = -r + 2.0 * r * i as f64 / 40.0;
        let d = (phi(x + h) - phi(x - h)) / (2.0 * h);
        assert!(d.abs() < 1e-4, "x={x}: {d}");
    }

    // (W' ∗ ρ)(x) = x·mass − PV∫ ρ(y)/(x − y) dy vanishes on the support
    let rr = 2f64.sqrt();
    for i in 1..20 {
        let x = -rr + 2.0 * rr * i as f64 / 20.0;
        let rho_x = aggregation_steady(x);
        let smooth = simpson(
            |th: f64| {
                let y = rr * th.sin();
                let num = aggregation_steady(y) - rho_x;
                let den = x - y;
                let v = if den.abs() < 1e-12 { 0.0 } else { num / den };
                v * rr * th.cos()
            },
            -std::f64::consts::FRAC_PI_2,
            std::f64::consts::FRAC_PI_2,
            20_000,
        );
        let pv = smooth + rho_x * ((x + rr) / (rr - x)).ln();
        assert!((x - pv).abs() < 1e-4, "x={x}: {}", x - pv);
    }
}

#[test]
fn laws_sample_and_normalize() {
    let g = InitialLaw::Gaussian { mean: vec![0.0], var: 0.2 };
    let xs = g.sample(20_000, RngStream::new(1));
    let var = xs.column(0).mapv(|v| v * v).mean().unwrap();
    assert!((var - 0.2).abs() < 0.01);
    let q = simpson(|x| g.log_density(array![x].view()).exp(), -8.0, 8.0, 4000);
    assert!((q - 1.0).abs() < 1e-10);

    let b = InitialLaw::Barenblatt { m: 2.0, c: barenblatt_unit_c(), t0: BARENBLATT_T0 };
    assert!((b.mass() - 1.0).abs() < 1e-12);
    let xs = b.sample(20_000, RngStream::new(2));
    let r = barenblatt_radius(BARENBLATT_T0, 2.0, 1, barenblatt_unit_c());
    assert!(xs.iter().all(|x| x.abs() <= r));
    // parabolic profile on [−r, r] has variance r²/5
    let var = xs.column(0).mapv(|v| v * v).mean().unwrap();
    assert!((var - r * r / 5.0).abs() < 0.03 * r * r / 5.0, "{var}");

    let mix = InitialLaw::GaussianMixture { means: vec![vec![-1.0, 0.0], vec![1.0, 0.0]], var: 0.1 };
    let xs = mix.sample(1000, RngStream::new(3));
    assert_eq!(xs.dim(), (1000, 2));
    let q = simpson(|x| simpson(|y| mix.log_density(array![x, y].view()).exp(), -4.0, 4.0, 400), -5.0, 5.0, 400);
    assert!((q - 1.0).abs() < 1e-6);
}

#[test]
fn law_validation_and_serde() {
    assert!(InitialLaw::Gaussian { mean: vec![], var: 1.0 }.validate().is_err());
    assert!(InitialLaw::Barenblatt { m: 1.0, c: 1.0, t0: 1.0 }.validate().is_err());
    let law = InitialLaw::Barenblatt { m: 2.0, c: 0.3, t0: 0.25 };
    let s = serde_json::to_string(&law).unwrap();
    assert_eq!(serde_json::from_str::<InitialLaw>(&s).unwrap(), law);
    assert!(serde_json::from_str::<InitialLaw>(r#"{"kind":"gaussian","mean":[0],"var":1,"extra":2}"#).is_err());
}
