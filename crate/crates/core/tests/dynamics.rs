use nalgebra::{DMatrix, DVector};
use num_complex::Complex64;
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use gridswing::assess::*;
use gridswing::case_model::*;
use gridswing::linalg::split_complex;
use gridswing::qpf::qpf;
use gridswing::reference_sims::*;
use gridswing::region_tracker::*;
use gridswing::swing_core::*;
use gridswing::trajectory::ExitCause;
use gridswing::zip_loads::*;

struct Start {
    post: PostFaultSystem,
    w: DVector<f64>,
    dw: DVector<f64>,
}

// post-clear state of the 9-bus Bus5-Bus7 outage
fn outage_start() -> Start {
    let case = builtin_case("ieee9").unwrap();
    let run = run_scenario(&case, &Scenario::line_outage(5, 7), EngineKind::Tds, &AssessConfig::default()).unwrap();
    let w = split_complex(&internal_voltages(&run.post.gens, &run.delta_clear));
    let dw = rotation_velocity(&w, &run.omega_clear);
    Start { post: run.post, w, dw }
}

fn consistent(s: &Start) -> ConsistentState {
    let lin = s.post.model().linearize(&s.w, &ChainConfig::default()).unwrap();
    consistent_init(&s.w, &s.dw, &lin, &s.post.gens, &s.post.net).unwrap()
}

#[test]
fn diagonal_stiffness_gives_scalar_roots() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let k: Vec<f64> = (0..4).map(|i| 0.5 + 2.0 * i as f64 + rng.random_range(0.0..0.5)).collect();
    let c: Vec<f64> = (0..4).map(|_| rng.random_range(0.1..1.5)).collect();
    let damping = DVector::from_fn(4, |i, _| c[i % 2]);
    let modes = eigen_modes(&companion(&DMatrix::from_diagonal(&DVector::from_vec(k.clone())), &damping)).unwrap();
    let mut got: Vec<Complex64> = modes.iter().map(|m| m.eigenvalue()).collect();
    let mut want = Vec::new();
    for i in 0..4 {
        let (ci, ki) = (damping[i], k[i]);
        let disc = Complex64::new(ci * ci - 4.0 * ki, 0.0).sqrt();
        let root = (Complex64::new(-ci, 0.0) + disc) / 2.0;
        want.push(if root.im < 0.0 { root.conj() } else { root });
    }
    let key = |z: &Complex64| (z.im * 1e6).round() as i64 * 1_000_000 + (z.re * 1e3).round() as i64;
    got.sort_by_key(key);
    want.sort_by_key(key);
    assert_eq!(got.len(), want.len());
    for (g, w) in got.iter().zip(&want) {
        assert!((g - w).norm() <= 1e-9, "{g} vs {w}");
    }
}

#[test]
fn oscillatory_scalar_example() {
    let modes = eigen_modes(&companion(&DMatrix::from_element(1, 1, 5.0), &DVector::from_element(1, 1.7))).unwrap();
    let lam = modes[0].eigenvalue();
    assert!(
        (lam.re + 0.85).abs() <= 1e-12 && (lam.im - (20.0f64 - 2.89).sqrt() / 2.0).abs() <= 1e-12,
        "{lam}"
    );
}

#[test]
fn decay_to_offset_iff_all_modes_decay() {
    let s = outage_start();
    let st = consistent(&s);
    let eq_gap = |sys: &SwingSystem| {
        let modes = eigensolve(sys).unwrap();
        let slowest = modes.iter().map(|m| m.eigenvalue().re).fold(f64::NEG_INFINITY, f64::max);
        let sol = solve(sys, &st.w, &st.omega, 0.0).unwrap();
        let (w, dw) = sol.evaluate(50.0 / slowest.abs());
        let eq = sys.equilibrium().unwrap();
        (slowest, (w - eq.rows(0, st.w.len())).amax().max(dw.amax()))
    };
    let (slowest, gap) = eq_gap(&st.sys);
    assert!(slowest > 0.0 && gap > 1.0, "{slowest} {gap}");

    let mut damped = st.sys.clone();
    damped.l_mat = DMatrix::from_fn(6, 6, |i, j| if i == j { 10.0 + i as f64 } else { 0.0 });
    damped.t_mat = companion(&damped.l_mat, &damped.damping);
    let (slowest, gap) = eq_gap(&damped);
    assert!(slowest < 0.0 && gap <= 1e-8, "{slowest} {gap}");
}

proptest! {
    #![proptest_config(ProptestConfig { cases: 12, failure_persistence: None, ..ProptestConfig::default() })]

    #[test]
    fn solution_starts_at_initial_state_and_solves_ode(
        dd in prop::collection::vec(-0.2f64..0.2, 3),
        speed in prop::collection::vec(-2.0f64..2.0, 3),
        t in 0.0f64..2.0,
    ) {
        let s = outage_start();
        let lin = s.post.model().linearize(&s.w, &ChainConfig::default()).unwrap();
        let n = 3;
        let w = DVector::from_fn(2 * n, |k, _| {
            let j = k % n;
            let z = Complex64::new(s.w[j], s.w[n + j]) * Complex64::from_polar(1.0, dd[j]);
            if k < n { z.re } else { z.im }
        });
        let dw = rotation_velocity(&w, &DVector::from_vec(speed));
        let st = consistent_init(&w, &dw, &lin, &s.post.gens, &s.post.net).unwrap();
        let sol = solve(&st.sys, &st.w, &st.omega, 1.0).unwrap();
        let (w0, dw0) = sol.evaluate(1.0);
        prop_assert!((w0 - &st.w).amax() <= 1e-8);
        prop_assert!((dw0 - &st.omega).amax() <= 1e-8);
        prop_assert!(ode_residual(&st.sys, &sol, 1.0 + t) <= 1e-8);
    }

    #[test]
    fn coi_angles_ignore_the_reference(
        mv in prop::collection::vec((0.01f64..1.0, -3.0f64..3.0), 2..6),
        shift in -10.0f64..10.0,
    ) {
        let m: Vec<f64> = mv.iter().map(|p| p.0).collect();
        let a = DVector::from_iterator(m.len(), mv.iter().map(|p| p.1));
        let b = a.map(|x| x + shift);
        let ca = to_coi_angles(&a, &m).unwrap();
        let cb = to_coi_angles(&b, &m).unwrap();
        prop_assert!((ca - cb).amax() <= 1e-10);
    }
}

#[test]
fn coi_of_equal_inertias_and_common_mode() {
    let c = to_coi_angles(&DVector::from_vec(vec![0.2, 0.4]), &[1.0, 1.0]).unwrap();
    assert!((c[0] + 0.1).abs() <= 1e-15 && (c[1] - 0.1).abs() <= 1e-15);
    let z = to_coi_angles(&DVector::from_element(3, 0.7), &[1.0, 2.0, 3.0]).unwrap();
    assert!(z.amax() <= 1e-15);
}

#[test]
fn projection_restores_magnitudes() {
    let s = outage_start();
    let lin = s.post.model().linearize(&s.w, &ChainConfig::default()).unwrap();
    let w = &s.w * 1.02;
    let st = consistent_init(&w, &DVector::zeros(6), &lin, &s.post.gens, &s.post.net).unwrap();
    assert!(st.residual <= 1e-8);
    for j in 0..3 {
        assert!((st.w[j].hypot(st.w[3 + j]) - s.post.gens[j].e).abs() <= 1e-10);
    }
    let again = consistent_init(&st.w, &st.omega, &lin, &s.post.gens, &s.post.net).unwrap();
    assert!(again.iterations <= 1);
    assert!((again.w - &st.w).amax() <= 1e-12);
    let e = DVector::from_iterator(3, s.post.gens.iter().map(|g| g.e));
    assert!(constraint_value(&st.w, &st.omega, &e, None).unwrap() <= 1e-10);
}

#[test]
fn infinite_tolerance_is_one_closed_form_segment() {
    let s = outage_start();
    let cfg = ChainConfig {
        eps: 1e12,
        eps_o2: 1e12,
        policy: RelinearizePolicy::Never,
        ..ChainConfig::default()
    };
    let traj = chain_segments(s.post.model(), &s.w, &s.dw, 0.0, 2.0, &cfg).unwrap();
    assert_eq!(traj.segments.len(), 1);
    assert_eq!(traj.segments[0].exit, ExitCause::Horizon);
    let lin = s.post.model().linearize(&s.w, &cfg).unwrap();
    let st = consistent_init(&s.w, &s.dw, &lin, &s.post.gens, &s.post.net).unwrap();
    let sol = solve(&st.sys, &st.w, &st.omega, 0.0).unwrap();
    for sample in &traj.samples {
        assert_eq!(sample.w, sol.evaluate(sample.t).0);
    }
}

#[test]
fn segments_respect_their_tolerance() {
    let s = outage_start();
    let mut worst = Vec::new();
    for eps in [0.01, 0.05] {
        let cfg = ChainConfig {
            eps,
            ..ChainConfig::default()
        };
        let traj = chain_segments(s.post.model(), &s.w, &s.dw, 0.0, 1.5, &cfg).unwrap();
        for seg in &traj.segments {
            assert!(seg.t_end > seg.t_start);
            assert!(seg.constraint_max <= eps * (1.0 + 1e-6), "{} > {eps}", seg.constraint_max);
            assert!(seg.reinit_residual <= 1e-8);
        }
        worst.push(traj.segments.iter().map(|r| r.constraint_max).fold(0.0, f64::max));
    }
    assert!(worst[0] <= worst[1]);
}

#[test]
fn first_boundary_crossing_is_early() {
    let s = outage_start();
    let traj = chain_segments(s.post.model(), &s.w, &s.dw, 0.0, 3.0, &ChainConfig::default()).unwrap();
    let first = traj.segments[0].t_end;
    assert!(first > 0.0 && first <= 0.15, "{first}");
}

// one machine feeding a constant-power load: rotation leaves the electrical
// power unchanged, so surplus mechanical power accelerates without bound
fn runaway_machine() -> (AugmentedNetwork, ExtendedLoadSet, Vec<GeneratorDynamic>) {
    let bus = |id, kind| BusRecord {
        id,
        kind,
        base_kv: 1.0,
        shunt: Complex64::new(0.0, 0.0),
    };
    let case = CaseData {
        base_mva: 100.0,
        buses: vec![bus(1, BusKind::Kbus), bus(2, BusKind::Mbus)],
        branches: vec![BranchRecord::from_impedance(1, 2, 0.0, 0.1, 0.0)],
        generators: vec![GeneratorDynamic {
            bus: 1,
            m: 0.05,
            d: 0.0,
            e: 1.05,
            xd_t: 0.1,
            p_mech: 0.0,
            omega0: 0.0,
        }],
        loads: vec![ZipLoadSpec::new(2, Complex64::new(0.8, 0.2), 0.0, 0.0, 1.0).unwrap()],
    };
    let net = case.augment().unwrap();
    let flat = DVector::from_element(net.n_km, Complex64::new(1.0, 0.0));
    let loads = build_extended_loads(&case.loads, &net, &flat).unwrap();
    let v_i = DVector::from_element(1, Complex64::new(1.05, 0.0));
    let pe = qpf(&net, &loads, &v_i, None).unwrap().p_inj[0];
    let mut gens = case.generators.clone();
    gens[0].p_mech = pe + 0.5;
    (net, loads, gens)
}

#[test]
fn surplus_power_exits_with_instability() {
    let (net, loads, gens) = runaway_machine();
    let model = AnalyticModel {
        net: &net,
        loads: &loads,
        gens: &gens,
    };
    let w = DVector::from_vec(vec![1.05, 0.0]);
    let traj = chain_segments(model, &w, &DVector::zeros(2), 0.0, 3.0, &ChainConfig::default()).unwrap();
    let last = traj.segments.last().unwrap();
    assert_eq!(last.exit, ExitCause::Instability);
    assert!(last.t_end < 3.0);
    let tds = tds_run(
        &net,
        &loads,
        &gens,
        &DVector::zeros(1),
        &DVector::zeros(1),
        0.0,
        &TdsConfig::default(),
    )
    .unwrap();
    assert!(tds.end_time() < 3.0);
}

#[test]
fn tds_holds_equilibrium() {
    let case = builtin_case("ieee9").unwrap();
    let net = case.augment().unwrap();
    let op = operating_point(&case, &net, LoadModel::Zip).unwrap();
    let cfg = TdsConfig {
        horizon: 1.0,
        ..TdsConfig::default()
    };
    let traj = tds_run(&net, &op.loads, &op.gens, &op.delta, &DVector::zeros(3), 0.0, &cfg).unwrap();
    let w0 = &traj.samples[0].w;
    for s in &traj.samples {
        assert!((&s.w - w0).amax() <= 1e-7);
        assert!(s.omega.amax() <= 1e-6);
    }
}

#[test]
fn heun_is_exact_for_constant_acceleration() {
    let a = 0.3;
    let (mut x, mut v) = (DVector::from_element(1, 0.1), DVector::from_element(1, -0.2));
    for _ in 0..100 {
        (x, v) = heun_step(&x, &v, 0.01, |_, _| Ok(DVector::from_element(1, a))).unwrap();
    }
    assert!((x[0] - (0.1 - 0.2 + 0.5 * a)).abs() <= 1e-12);
    assert!((v[0] - (-0.2 + a)).abs() <= 1e-12);
}

fn undamped(n: usize) -> Vec<GeneratorDynamic> {
    (0..n)
        .map(|j| GeneratorDynamic {
            bus: j + 1,
            m: 0.1 * (j + 1) as f64,
            d: 0.0,
            e: 1.0,
            xd_t: 0.1,
            p_mech: 0.0,
            omega0: 0.0,
        })
        .collect()
}

proptest! {
    #![proptest_config(ProptestConfig { cases: 32, failure_persistence: None, ..ProptestConfig::default() })]

    #[test]
    fn series_scales_with_power(seed in any::<u64>(), c in -5.0f64..5.0) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let pe: Vec<DVector<f64>> = (0..8).map(|_| DVector::from_fn(2, |_, _| rng.random_range(-1.0..1.0))).collect();
        let gens = undamped(2);
        let z = DVector::zeros(2);
        let run = |scale: f64| {
            let mut oracle = |d: &[DVector<f64>]| Ok(&pe[d.len() - 1] * scale);
            htms_coefficients(&gens, &z, &z, 0.0, 8, &mut oracle).unwrap()
        };
        let (a, b) = (run(1.0), run(c));
        for k in 1..8 {
            prop_assert!((&b.omega[k] - &a.omega[k] * c).amax() <= 1e-12);
            prop_assert!((&b.delta[k] - &a.delta[k] * c).amax() <= 1e-12);
        }
    }
}

#[test]
fn terminating_series_has_infinite_radius() {
    let gens = undamped(1);
    let z = DVector::zeros(1);
    let mut oracle = |_: &[DVector<f64>]| Ok(DVector::zeros(1));
    let st = htms_coefficients(&gens, &z, &DVector::from_element(1, 0.0), 0.0, 6, &mut oracle).unwrap();
    assert_eq!(convergence_radius(&st), f64::INFINITY);
    let frozen = htms_coefficients(&gens, &DVector::from_element(1, 0.4), &z, 2.0, 1, &mut oracle).unwrap();
    assert_eq!(frozen.delta_at(5.0)[0], 0.4);
}

#[test]
fn truncation_error_falls_with_terms() {
    // exp(t) cos(3t) = Re exp((1 + 3j) t)
    let coeff = |k: usize| {
        let mut z = Complex64::new(1.0, 0.0);
        for i in 1..=k {
            z *= Complex64::new(1.0, 3.0) / i as f64;
        }
        z.re
    };
    let t: f64 = 0.5;
    let exact = t.exp() * (3.0 * t).cos();
    let errs: Vec<f64> = [10usize, 20, 30]
        .iter()
        .map(|&m| {
            let st = McLaurinState {
                delta: (0..m).map(|k| DVector::from_element(1, coeff(k))).collect(),
                omega: (0..m).map(|_| DVector::zeros(1)).collect(),
                v: Vec::new(),
                t_tr: 0.0,
                m,
            };
            (st.delta_at(t)[0] - exact).abs()
        })
        .collect();
    assert!(errs[0] > errs[1] && errs[1] > errs[2], "{errs:?}");
}

#[test]
fn htms_tracks_tds_on_larger_cases() {
    for (name, sc) in [
        ("ieee14", Scenario::line_outage(2, 4)),
        ("ieee30", Scenario::line_outage(6, 8)),
    ] {
        let case = builtin_case(name).unwrap();
        let cfg = AssessConfig {
            horizon: 1.0,
            ..AssessConfig::default()
        };
        let cmp = compare_engines(&case, &sc, &[EngineKind::Htms], &cfg).unwrap();
        let dev = cmp.run(EngineKind::Htms).unwrap().verdict.agreement["tds"];
        assert!(dev <= 0.05, "{name}: {dev}");
    }
}
