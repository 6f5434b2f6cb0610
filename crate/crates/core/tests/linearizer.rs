use nalgebra::{DMatrix, DVector};
use num_complex::Complex64;
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use gridswing::assess::{operating_point, LoadModel};
use gridswing::case_model::*;
use gridswing::he_linearizer::*;
use gridswing::linalg::{complex_to_real_block, join_complex, max_abs, max_abs_c, split_complex};
use gridswing::qpf::qpf;
use gridswing::reference_sims::internal_voltages;
use gridswing::zip_loads::ExtendedLoadSet;

fn lin_at(case: &CaseData) -> (AugmentedNetwork, ExtendedLoadSet, DVector<Complex64>, PadeLinearization) {
    let net = case.augment().unwrap();
    let op = operating_point(case, &net, LoadModel::Zip).unwrap();
    let v_i = internal_voltages(&op.gens, &op.delta);
    let lin = linearize_at(&net, &op.loads, &v_i, 0, DEFAULT_ORDER, DEFAULT_ORDER).unwrap();
    (net, op.loads, v_i, lin)
}

#[test]
fn all_blocks_exact_at_expansion_point() {
    for name in BUILTIN_CASES {
        let (net, loads, v_i, lin) = lin_at(&builtin_case(name).unwrap());
        let sol = qpf(&net, &loads, &v_i, None).unwrap();
        let w0 = split_complex(&v_i);
        let km = max_abs_c(&(lin.km_voltages(&w0) - sol.v_km(net.n_i)));
        let p = max_abs(&(lin.p.map.value(&w0) - sol.p_inj.rows(0, net.n_i)));
        let q = max_abs(&(lin.q.map.value(&w0) - sol.q_inj.rows(0, net.n_i)));
        let xi = DVector::from_fn(net.n_i, |j, _| sol.q_inj[j] * w0[j]);
        let zeta = DVector::from_fn(net.n_i, |j, _| sol.q_inj[j] * w0[net.n_i + j]);
        let xz = max_abs(&(lin.xi.map.value(&w0) - xi)).max(max_abs(&(lin.zeta.map.value(&w0) - zeta)));
        assert!(
            km <= 1e-6 && p <= 1e-6 && q <= 1e-6 && xz <= 1e-6,
            "{name}: {km:.1e} {p:.1e} {q:.1e} {xz:.1e}"
        );
    }
}

fn unloaded(case: &CaseData, charging: bool) -> CaseData {
    let mut c = case.clone();
    c.loads.clear();
    if !charging {
        for b in c.branches.iter_mut() {
            b.line_charging = 0.0;
        }
        for b in c.buses.iter_mut() {
            b.shunt = Complex64::new(0.0, 0.0);
        }
    }
    c
}

#[test]
fn unloaded_network_map_is_exact_elimination() {
    let case = unloaded(&builtin_case("ieee9").unwrap(), true);
    let net = case.augment().unwrap();
    let loads = ExtendedLoadSet::zeros(net.n_km);
    let v_i = DVector::from_fn(net.n_i, |j, _| Complex64::from_polar(1.04, 0.15 * j as f64));
    let lin = linearize_at(&net, &loads, &v_i, 0, DEFAULT_ORDER, DEFAULT_ORDER).unwrap();
    let (ni, nk) = (net.n_i, net.n_km);
    let ykk = net.ybus.view((ni, ni), (nk, nk)).into_owned();
    let yki = net.ybus.view((ni, 0), (nk, ni)).into_owned();
    let exact = -ykk.lu().solve(&yki).unwrap();
    let diff = (&lin.km.map.mat - complex_to_real_block(&exact)).amax();
    assert!(diff <= 1e-8, "{diff}");
    assert!(lin.km.map.off.amax() <= 1e-8);
}

#[test]
fn flat_germ_reproduced_without_loads_or_shunts() {
    // unity taps, so the flat profile solves the network
    let case = unloaded(&builtin_case("ieee9").unwrap(), false);
    let net = case.augment().unwrap();
    let loads = ExtendedLoadSet::zeros(net.n_km);
    let v_i = DVector::from_element(net.n_i, Complex64::new(1.0, 0.0));
    let lin = linearize_at(&net, &loads, &v_i, 0, DEFAULT_ORDER, DEFAULT_ORDER).unwrap();
    let km = lin.km_voltages(&split_complex(&v_i));
    assert!(km.iter().all(|z| (z - Complex64::new(1.0, 0.0)).norm() <= 1e-10));
}

#[test]
fn map_rotates_with_the_internal_voltages() {
    let (net, loads, v_i, lin) = lin_at(&builtin_case("ieee9").unwrap());
    let rot = Complex64::from_polar(1.0, 0.7);
    let v_r = v_i.map(|z| z * rot);
    let lin_r = linearize_at(&net, &loads, &v_r, 0, DEFAULT_ORDER, DEFAULT_ORDER).unwrap();
    let a = lin.km_voltages(&split_complex(&v_i)).map(|z| z * rot);
    let b = lin_r.km_voltages(&split_complex(&v_r));
    assert!(max_abs_c(&(a - b)) <= 1e-9);
}

#[test]
fn taylor_exact_on_impedance_network() {
    let case = unloaded(&builtin_case("ieee9").unwrap(), true);
    let net = case.augment().unwrap();
    let loads = ExtendedLoadSet::zeros(net.n_km);
    let v_i0 = DVector::from_fn(net.n_i, |j, _| Complex64::from_polar(1.0, 0.1 * j as f64));
    let sol = qpf(&net, &loads, &v_i0, None).unwrap();
    let taylor = taylor_sensitivity(&net, &loads, &sol).unwrap();
    let v_i = DVector::from_fn(net.n_i, |j, _| Complex64::from_polar(0.9 + 0.1 * j as f64, -0.4 * j as f64));
    let truth = qpf(&net, &loads, &v_i, None).unwrap().v_km(net.n_i);
    let got = join_complex(&taylor.value(&split_complex(&v_i)));
    assert!(max_abs_c(&(got - truth)) <= 1e-8);
}

#[test]
fn pade_beats_ward_on_14_bus() {
    let case = builtin_case("ieee14").unwrap();
    let (net, loads, v_i0, lin) = lin_at(&case);
    let flow = qpf(&net, &loads, &v_i0, None).unwrap();
    let mags = flow.v_km(net.n_i).map(|z| z.norm());
    let (ward, off) = ward_reduction(&net, &loads, &mags).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(14);
    let (mut he, mut wd) = (0.0_f64, 0.0_f64);
    for _ in 0..40 {
        let v_i = v_i0.map(|z| z + Complex64::new(rng.random_range(-0.05..0.05), rng.random_range(-0.05..0.05)));
        let truth = qpf(&net, &loads, &v_i, Some(&flow.v)).unwrap().v_km(net.n_i);
        he = he.max(max_abs_c(&(lin.km_voltages(&split_complex(&v_i)) - &truth)));
        wd = wd.max(max_abs_c(&(&ward * &v_i + &off - &truth)));
    }
    assert!(he < wd, "{he:.2e} vs {wd:.2e}");
}

#[test]
fn error_grows_away_from_expansion_point() {
    let (net, loads, v_i0, lin) = lin_at(&builtin_case("ieee9").unwrap());
    let errs: Vec<f64> = [0.01, 0.05, 0.15]
        .iter()
        .map(|&d| {
            let v_i = v_i0.map(|z| z * (1.0 + d));
            let truth = qpf(&net, &loads, &v_i, None).unwrap().v_km(net.n_i);
            max_abs_c(&(lin.km_voltages(&split_complex(&v_i)) - truth))
        })
        .collect();
    assert!(errs[0] < errs[1] && errs[1] < errs[2], "{errs:?}");
}

// Taylor coefficients of N(s)/B(s) with a shared scalar denominator.
fn rational_series(seed: u64, l: usize, m: usize) -> (Vec<RealAffine>, RealAffine) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut b = vec![1.0];
    b.extend((0..m).map(|_| rng.random_range(-0.4..0.4) / m as f64));
    let numer: Vec<RealAffine> = (0..=l)
        .map(|_| RealAffine {
            mat: DMatrix::from_fn(4, 3, |_, _| rng.random_range(-1.0..1.0)),
            off: DVector::from_fn(4, |_, _| rng.random_range(-1.0..1.0)),
        })
        .collect();
    let mut a: Vec<RealAffine> = Vec::new();
    for n in 0..=l + m {
        let mut c = if n <= l { numer[n].clone() } else { RealAffine::zeros(4, 3) };
        for i in 1..=m.min(n) {
            c = c.add(&a[n - i].scaled(-b[i]));
        }
        a.push(c);
    }
    let mut at_one = RealAffine::zeros(4, 3);
    for c in &numer {
        at_one = at_one.add(c);
    }
    (a, at_one.scaled(1.0 / b.iter().sum::<f64>()))
}

proptest! {
    #![proptest_config(ProptestConfig { cases: 32, failure_persistence: None, ..ProptestConfig::default() })]

    #[test]
    fn pade_recovers_rational_maps(seed in any::<u64>(), l in 1usize..6, m in 1usize..6) {
        let (series, exact) = rational_series(seed, l, m);
        let fit = pade_fit(&series, l, m).unwrap();
        prop_assert!(fit.residual <= 1e-8 * fit.wb_norm, "{:e} {:e}", fit.residual, fit.wb_norm);
        let got = fit.value_at_one();
        prop_assert!((got.mat - exact.mat).amax() <= 1e-8);
        prop_assert!((got.off - exact.off).amax() <= 1e-8);
    }

    #[test]
    fn error_bound_covers_observed_drift(seed in any::<u64>(), scale in 1e-8f64..1e-4) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let a = DMatrix::from_fn(6, 4, |i, j| if i == j { 3.0 } else { 0.0 } + rng.random_range(-0.5..0.5));
        let b = DVector::from_fn(6, |_, _| rng.random_range(-1.0..1.0));
        let da = DMatrix::from_fn(6, 4, |_, _| scale * rng.random_range(-1.0..1.0));
        let db = DVector::from_fn(6, |_, _| scale * rng.random_range(-1.0..1.0));
        let (a2, b2) = (&a + &da, &b + &db);
        let bound = error_bound(&a, &b, &a2, &b2).unwrap();
        let x = a.clone().svd(true, true).solve(&b, 0.0).unwrap();
        let x2 = a2.svd(true, true).solve(&b2, 0.0).unwrap();
        let drift = (x2 - &x).norm() / x.norm();
        prop_assert!(drift <= bound, "{drift:e} > {bound:e}");
    }
}

#[test]
fn identical_operands_give_zero_bound() {
    let a = DMatrix::from_row_slice(3, 2, &[1.0, 0.0, 0.0, 2.0, 1.0, 1.0]);
    let b = DVector::from_vec(vec![1.0, 2.0, 0.5]);
    assert_eq!(error_bound(&a, &b, &a, &b).unwrap(), 0.0);
}
