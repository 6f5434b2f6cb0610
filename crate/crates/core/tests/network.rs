use approx::assert_relative_eq;
use nalgebra::{DMatrix, DVector};
use num_complex::Complex64;
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use gridswing::assess::{operating_point, LoadModel};
use gridswing::case_model::*;
use gridswing::qpf::*;
use gridswing::reference_sims::internal_voltages;
use gridswing::zip_loads::*;
use gridswing::Error;

const J: Complex64 = Complex64 { re: 0.0, im: 1.0 };

fn random_case(seed: u64, extra: usize) -> CaseData {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut case = builtin_case("ieee9").unwrap();
    case.branches.clear();
    let ids: Vec<usize> = case.buses.iter().map(|b| b.id).collect();
    for k in 1..ids.len() {
        let to = ids[rng.random_range(0..k)];
        case.branches.push(BranchRecord::from_impedance(
            ids[k],
            to,
            rng.random_range(0.001..0.05),
            rng.random_range(0.05..0.3),
            rng.random_range(0.0..0.3),
        ));
    }
    for _ in 0..extra {
        let a = ids[rng.random_range(0..ids.len())];
        let b = ids[rng.random_range(0..ids.len())];
        if a != b {
            case.branches
                .push(BranchRecord::from_impedance(a, b, 0.01, rng.random_range(0.05..0.3), 0.1));
        }
    }
    for bus in case.buses.iter_mut() {
        if rng.random_bool(0.3) {
            bus.shunt = Complex64::new(0.0, rng.random_range(0.0..0.2));
        }
    }
    case
}

// entry-by-entry pi-model stamping, kept separate from the library's assembly
fn hand_ybus(net: &AugmentedNetwork) -> DMatrix<Complex64> {
    let n = net.n();
    let mut y = DMatrix::zeros(n, n);
    for (k, bus) in net.buses.iter().enumerate() {
        y[(k, k)] += bus.shunt;
    }
    for br in net.branches.iter().filter(|b| b.status == BranchStatus::In) {
        let f = net.index_of(br.from).unwrap();
        let t = net.index_of(br.to).unwrap();
        let ys = br.series_admittance;
        let half = J * (br.line_charging / 2.0);
        let tap = br.tap;
        y[(f, f)] += (ys + half) / tap.norm_sqr();
        y[(t, t)] += ys + half;
        y[(f, t)] -= ys / tap.conj();
        y[(t, f)] -= ys / tap;
    }
    y
}

#[test]
fn ieee9_ybus_matches_hand_assembly() {
    let net = builtin_case("ieee9").unwrap().augment().unwrap();
    let diff = (&net.ybus - hand_ybus(&net)).map(|z| z.norm()).max();
    assert!(diff <= 1e-10, "{diff}");
}

#[test]
fn builtin_cases_augment_with_trailing_ibus_ids() {
    let case = builtin_case("ieee9").unwrap();
    let net = case.augment().unwrap();
    assert_eq!((case.buses.len(), case.branches.len(), case.generators.len()), (9, 9, 3));
    assert_eq!(net.n(), 12);
    let ibus: Vec<usize> = net.buses[..net.n_i].iter().map(|b| b.id).collect();
    assert_eq!(ibus, vec![10, 11, 12]);
    for name in BUILTIN_CASES {
        let net = builtin_case(name).unwrap().augment().unwrap();
        assert!(net.buses[..net.n_i].iter().all(|b| b.kind == BusKind::Ibus));
    }
}

#[test]
fn two_generators_on_one_bus_unsupported() {
    let mut case = builtin_case("ieee9").unwrap();
    let dup = case.generators[0].clone();
    case.generators.push(dup);
    assert!(matches!(case.augment(), Err(Error::Unsupported(_))));
}

#[test]
fn branch_to_missing_bus_is_dangling() {
    let mut case = builtin_case("ieee9").unwrap();
    case.branches.push(BranchRecord::from_impedance(1, 99, 0.0, 0.1, 0.0));
    let text = write_case(&case);
    assert!(matches!(parse_case(&text), Err(Error::DanglingBus { bus: 99, .. })));
}

#[test]
fn shipped_cases_round_trip_through_text() {
    for name in BUILTIN_CASES {
        let case = builtin_case(name).unwrap();
        let back = parse_case(&write_case(&case)).unwrap();
        let a = case.augment().unwrap();
        let b = back.augment().unwrap();
        let diff = (&a.ybus - &b.ybus).map(|z| z.norm()).max();
        assert!(diff <= 1e-9, "{name}: {diff}");
        assert_eq!(case.loads.len(), back.loads.len());
    }
}

proptest! {
    #![proptest_config(ProptestConfig { cases: 48, failure_persistence: None, ..ProptestConfig::default() })]

    #[test]
    fn assembled_networks_have_zero_ytr_rows_and_symmetry(seed in any::<u64>(), extra in 0usize..6) {
        let net = random_case(seed, extra).augment().unwrap();
        for i in 0..net.n() {
            let s: Complex64 = net.ytr.row(i).iter().sum();
            prop_assert!(s.norm() <= 1e-9);
            for j in 0..net.n() {
                prop_assert!((net.ybus[(i, j)] - net.ybus[(j, i)]).norm() <= 1e-12);
            }
        }
        let split = &net.ytr + DMatrix::from_diagonal(&net.ysh);
        prop_assert!((split - &net.ybus).map(|z| z.norm()).max() <= 1e-12);
        prop_assert!((hand_ybus(&net) - &net.ybus).map(|z| z.norm()).max() <= 1e-10);
    }

    #[test]
    fn text_round_trip_preserves_admittances(seed in any::<u64>(), extra in 0usize..4) {
        let case = random_case(seed, extra);
        let back = parse_case(&write_case(&case)).unwrap();
        let a = case.augment().unwrap();
        let b = back.augment().unwrap();
        prop_assert!((&a.ybus - &b.ybus).map(|z| z.norm()).max() <= 1e-9);
    }

    #[test]
    fn split_reconstructs_power(
        p in -2.0f64..2.0, q in -2.0f64..2.0,
        fz in 0.0f64..1.0, fi in 0.0f64..1.0,
        v0 in 0.8f64..1.2, v in 0.5f64..1.5,
    ) {
        let (fz, fi) = (fz * 0.5, fi * 0.5);
        let s0 = Complex64::new(p, q);
        let spec = ZipLoadSpec::new(6, s0, fz, fi, 1.0 - fz - fi).unwrap();
        let net = builtin_case("ieee9").unwrap().augment().unwrap();
        let mut v0s = DVector::from_element(net.n_km, Complex64::new(1.0, 0.0));
        let j = net.km_index_of(6).unwrap();
        v0s[j] = Complex64::from_polar(v0, 0.3);
        let set = build_extended_loads(std::slice::from_ref(&spec), &net, &v0s).unwrap();
        let got = set.ybus_add[j].conj() * v * v + set.p_loads[j];
        let want = s0 * (fz * v * v + spec.fp) + s0 * fi * (0.5 * v * v / v0 + 0.5 * v0);
        prop_assert!((got - want).norm() <= 1e-12 * (1.0 + s0.norm()));
    }

    #[test]
    fn error_ratio_is_reciprocal_symmetric(r in 0.05f64..20.0) {
        let a = current_load_error_ratio(r).unwrap();
        let b = current_load_error_ratio(1.0 / r).unwrap();
        prop_assert!((a - b).abs() <= 1e-12 * a);
        prop_assert!(a >= 1.0 - 1e-15);
    }
}

#[test]
fn zero_zips_give_zero_loads() {
    let net = builtin_case("ieee9").unwrap().augment().unwrap();
    let flat = DVector::from_element(net.n_km, Complex64::new(1.0, 0.0));
    let set = build_extended_loads(&[], &net, &flat).unwrap();
    assert!(set
        .ybus_add
        .iter()
        .chain(set.p_loads.iter())
        .chain(set.i0.iter())
        .all(|z| *z == Complex64::new(0.0, 0.0)));
}

#[test]
fn error_ratio_closed_forms() {
    assert_relative_eq!(current_load_error_ratio(1.0).unwrap(), 1.0);
    assert_relative_eq!(current_load_error_ratio(0.8).unwrap(), 1.025, epsilon = 1e-12);
    assert_relative_eq!(current_load_error_ratio(1.2).unwrap(), 1.0166666666666666, epsilon = 1e-12);
    assert!(current_load_error_ratio(0.0).is_err());
    assert!(decompose_current_load(Complex64::new(1.0, 0.0), -1.0).is_err());
}

fn ieee9_point() -> (AugmentedNetwork, ExtendedLoadSet, DVector<Complex64>) {
    let case = builtin_case("ieee9").unwrap();
    let net = case.augment().unwrap();
    let op = operating_point(&case, &net, LoadModel::Zip).unwrap();
    let v_i = internal_voltages(&op.gens, &op.delta);
    (net, op.loads, v_i)
}

#[test]
fn qpf_residual_certificate() {
    let (net, loads, v_i) = ieee9_point();
    let sol = qpf(&net, &loads, &v_i, None).unwrap();
    assert!(sol.mismatch <= 1e-8);
    for k in 0..net.n_i {
        assert_eq!(sol.v[k], v_i[k]);
    }
    let cur = &net.ybus * &sol.v;
    for k in 0..net.n() {
        let s = sol.v[k] * cur[k].conj();
        if k < net.n_i {
            assert!((s - Complex64::new(sol.p_inj[k], sol.q_inj[k])).norm() <= 1e-8);
        } else {
            let j = k - net.n_i;
            let vm = sol.v[k].norm();
            let consumed = loads.ybus_add[j].conj() * vm * vm + loads.p_loads[j];
            assert!((s + consumed).norm() <= 1e-8, "bus {k}: {}", (s + consumed).norm());
        }
    }
}

#[test]
fn qpf_solution_is_a_fixed_point() {
    let (net, loads, v_i) = ieee9_point();
    let sol = qpf(&net, &loads, &v_i, None).unwrap();
    let again = qpf(&net, &loads, &v_i, Some(&sol.v)).unwrap();
    assert!(again.iterations <= 2, "{}", again.iterations);
}

#[test]
fn conjugated_inputs_give_conjugated_solution() {
    let (net, loads, v_i) = ieee9_point();
    let sys = assemble_qpf(&net, &loads, &v_i).unwrap();
    let sol = solve_qpf(&sys, &flat_guess(&sys, 1.0)).unwrap();
    let csys = sys.conj();
    let csol = solve_qpf(&csys, &flat_guess(&csys, 1.0)).unwrap();
    let diff = (csol.v - sol.v.map(|z| z.conj())).map(|z| z.norm()).max();
    assert!(diff <= 1e-8, "{diff}");
}

#[test]
fn impedance_loads_solve_linearly() {
    let case = builtin_case("ieee9").unwrap();
    let net = case.augment().unwrap();
    let flat = DVector::from_element(net.n_km, Complex64::new(1.0, 0.0));
    let zips: Vec<ZipLoadSpec> = case
        .loads
        .iter()
        .map(|z| ZipLoadSpec::new(z.bus, z.s0, 1.0, 0.0, 0.0).unwrap())
        .collect();
    let loads = build_extended_loads(&zips, &net, &flat).unwrap();
    let v_i = DVector::from_fn(net.n_i, |j, _| Complex64::from_polar(1.05, 0.1 * j as f64));
    let sol = qpf(&net, &loads, &v_i, None).unwrap();

    let (ni, nk) = (net.n_i, net.n_km);
    let mut ykk = net.ybus.view((ni, ni), (nk, nk)).into_owned();
    for j in 0..nk {
        ykk[(j, j)] += loads.ybus_add[j];
    }
    let yki = net.ybus.view((ni, 0), (nk, ni)).into_owned();
    let want = -ykk.lu().solve(&(yki * &v_i)).unwrap();
    let diff = (sol.v_km(ni) - want).map(|z| z.norm()).max();
    assert!(diff <= 1e-8, "{diff}");
}

#[test]
fn augmented_9_bus_has_24_equations() {
    let (net, loads, v_i) = ieee9_point();
    let sys = assemble_qpf(&net, &loads, &v_i).unwrap();
    assert_eq!(2 * sys.n(), 24);
}
