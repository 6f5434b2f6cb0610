//! Validity regions of the linear swing ODE and their chaining.
//!
//! A segment follows the closed-form solution until the validity constraint
//! reaches `eps`; the state at the crossing is projected back onto the
//! constant-magnitude manifold and a new segment starts from there.

use log::{debug, info};
use nalgebra::DVector;
use num_complex::Complex64;

use crate::case_model::{AugmentedNetwork, GeneratorDynamic};
use crate::error::{Error, Result};
use crate::he_linearizer::{linearize_at, PadeLinearization, DEFAULT_ORDER};
use crate::swing_core::{build_swing_system, rotor_speeds, solve, AnalyticSolution, SwingSystem};
use crate::trajectory::{AngleTracker, ExitCause, PiecewiseTrajectory, Sample, SegmentRecord};
use crate::zip_loads::ExtendedLoadSet;

pub const DEFAULT_EPS: f64 = 0.01;
pub const SCAN_STEP: f64 = 1e-3;
pub const BISECTION_TOL: f64 = 1e-9;
pub const REINIT_MAX_ITER: usize = 25;
pub const REINIT_TOL: f64 = 1e-8;
/// Fraction of `eps_o2` at a region start that triggers relinearization.
pub const RELIN_FRACTION: f64 = 0.9;

/// Validity constraint: 1-norm of magnitude drift, radial velocity and,
/// optionally, generator power drift.
#[derive(Clone, Debug)]
pub struct ValidityConstraint {
    pub eps: f64,
    pub e: DVector<f64>,
    pub p_g0: Option<DVector<f64>>,
}

impl ValidityConstraint {
    pub fn new(eps: f64, e: DVector<f64>, p_g0: Option<DVector<f64>>) -> Result<Self> {
        if !(eps > 0.0) {
            return Err(Error::Config(format!("validity tolerance must be positive, got {eps}")));
        }
        if let Some(p) = &p_g0 {
            if p.iter().any(|&x| x == 0.0) {
                return Err(Error::Config(
                    "zero reference generator power leaves the power drift undefined".into(),
                ));
            }
        }
        Ok(ValidityConstraint { eps, e, p_g0 })
    }

    pub fn value(&self, w: &DVector<f64>, dw: &DVector<f64>, p_g: Option<&DVector<f64>>) -> Result<f64> {
        let p = match (&self.p_g0, p_g) {
            (Some(p0), Some(p)) => Some((p0, p)),
            (Some(_), None) => return Err(Error::Config("power drift enabled but no generator power given".into())),
            _ => None,
        };
        constraint_value(w, dw, &self.e, p)
    }
}

/// `max_j |1 - |v_j|/E_j| + |x_j x_j' + y_j y_j'| (+ |p_j/p0_j - 1|)`: the
/// 1-norm of each machine's terms, worst machine.
pub fn constraint_value(
    w: &DVector<f64>,
    dw: &DVector<f64>,
    e: &DVector<f64>,
    power: Option<(&DVector<f64>, &DVector<f64>)>,
) -> Result<f64> {
    let n = e.len();
    if w.len() != 2 * n || dw.len() != 2 * n {
        return Err(Error::Dimension("state does not match the machine count".into()));
    }
    let mut worst: f64 = 0.0;
    for j in 0..n {
        let (x, y) = (w[j], w[n + j]);
        let mut term = (1.0 - x.hypot(y) / e[j]).abs() + (x * dw[j] + y * dw[n + j]).abs();
        if let Some((p0, p)) = power {
            if p0[j] == 0.0 {
                return Err(Error::Config(format!("reference power of machine {j} is zero")));
            }
            term += (p[j] / p0[j] - 1.0).abs();
        }
        worst = worst.max(term);
    }
    Ok(worst)
}

/// Earliest `t` in `(t_start, t_max]` with `c(t) = eps`, by sampling and bisection.
pub fn find_crossing<F: FnMut(f64) -> f64>(mut c: F, eps: f64, t_start: f64, t_max: f64, step: f64) -> Result<Option<f64>> {
    let c0 = c(t_start);
    if c0 > eps {
        return Err(Error::InconsistentStart { value: c0, eps });
    }
    let mut lo = t_start;
    while lo < t_max {
        let hi = (lo + step).min(t_max);
        let v = c(hi);
        if v >= eps || !v.is_finite() {
            let (mut a, mut b) = (lo, hi);
            while b - a > BISECTION_TOL {
                let mid = 0.5 * (a + b);
                let cm = c(mid);
                if cm >= eps || !cm.is_finite() {
                    b = mid;
                } else {
                    a = mid;
                }
            }
            return Ok(Some(0.5 * (a + b)));
        }
        lo = hi;
    }
    Ok(None)
}

/// A state satisfying the swing ODE and the constant-magnitude constraints.
#[derive(Clone, Debug)]
pub struct ConsistentState {
    pub w: DVector<f64>,
    pub omega: DVector<f64>,
    pub rho: DVector<f64>,
    pub residual: f64,
    pub iterations: usize,
    pub sys: SwingSystem,
}

/// Constraint residuals `[|v_j|^2 - E_j^2; x_j x_j' + y_j y_j']`.
pub fn magnitude_residual(w: &DVector<f64>, dw: &DVector<f64>, e: &DVector<f64>) -> DVector<f64> {
    let n = e.len();
    DVector::from_fn(2 * n, |k, _| {
        if k < n {
            w[k] * w[k] + w[n + k] * w[n + k] - e[k] * e[k]
        } else {
            let j = k - n;
            w[j] * dw[j] + w[n + j] * dw[n + j]
        }
    })
}

/// Weight on velocity corrections relative to position corrections.
pub const VELOCITY_WEIGHT: f64 = 1e-2;

/// Newton projection onto the constraint set followed by `rho` from the ODE.
///
/// Each machine's `(x, y, x', y')` moves by the weighted minimum-norm Newton
/// step; velocities are cheaper to move than positions.
pub fn consistent_init(
    w_guess: &DVector<f64>,
    dw_guess: &DVector<f64>,
    lin: &PadeLinearization,
    gens: &[GeneratorDynamic],
    net: &AugmentedNetwork,
) -> Result<ConsistentState> {
    let n = gens.len();
    if w_guess.len() != 2 * n || dw_guess.len() != 2 * n {
        return Err(Error::Dimension("state does not match the machine count".into()));
    }
    let e = DVector::from_iterator(n, gens.iter().map(|g| g.e));
    let mut w = w_guess.clone();
    let mut dw = dw_guess.clone();
    let wt = [1.0, 1.0, VELOCITY_WEIGHT, VELOCITY_WEIGHT];
    let mut iterations = 0;
    loop {
        let g = magnitude_residual(&w, &dw, &e);
        let scale = e.iter().fold(1.0_f64, |a, &b| a.max(b * b));
        if g.amax() <= 1e-14 * scale {
            break;
        }
        if iterations >= REINIT_MAX_ITER {
            return Err(Error::ReinitFailure {
                iterations,
                residual: g.norm(),
            });
        }
        for j in 0..n {
            let (x, y, vx, vy) = (w[j], w[n + j], dw[j], dw[n + j]);
            let jac = [[2.0 * x, 2.0 * y, 0.0, 0.0], [vx, vy, x, y]];
            // (J W^-1 J^T) lambda = g, step = -W^-1 J^T lambda
            let mut a = [[0.0; 2]; 2];
            for r in 0..2 {
                for c in 0..2 {
                    a[r][c] = (0..4).map(|k| jac[r][k] * jac[c][k] / wt[k]).sum();
                }
            }
            let det = a[0][0] * a[1][1] - a[0][1] * a[1][0];
            if !(det.abs() > 1e-300) || !det.is_finite() {
                return Err(Error::SingularJacobian(format!("consistent initialization of machine {j}")));
            }
            let (g1, g2) = (g[j], g[n + j]);
            let l1 = (a[1][1] * g1 - a[0][1] * g2) / det;
            let l2 = (a[0][0] * g2 - a[1][0] * g1) / det;
            let step: Vec<f64> = (0..4).map(|k| -(jac[0][k] * l1 + jac[1][k] * l2) / wt[k]).collect();
            w[j] += step[0];
            w[n + j] += step[1];
            dw[j] += step[2];
            dw[n + j] += step[3];
        }
        iterations += 1;
    }
    let sys = build_swing_system(lin, gens, net, &w, &dw)?;
    let rho = sys.acceleration(&w, &dw);
    let f = sys.ode_mismatch(&w, &dw, &rho);
    let g = magnitude_residual(&w, &dw, &e);
    let residual = (f.norm_squared() + g.norm_squared()).sqrt();
    if residual > REINIT_TOL {
        return Err(Error::ReinitFailure { iterations, residual });
    }
    Ok(ConsistentState {
        w,
        omega: dw,
        rho,
        residual,
        iterations,
        sys,
    })
}

/// When a boundary crossing also rebuilds the linear maps.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum RelinearizePolicy {
    Never,
    /// `| ||w|| / ||w0|| - 1 | > eps_o2`.
    NormRatio,
    /// `||w - w0|| / ||w0|| > eps_o2`.
    Drift,
    Always,
}

impl RelinearizePolicy {
    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "never" => Ok(Self::Never),
            "norm-ratio" => Ok(Self::NormRatio),
            "drift" => Ok(Self::Drift),
            "always" => Ok(Self::Always),
            other => Err(Error::Config(format!("unknown relinearization policy '{other}'"))),
        }
    }

    /// O2 measure, `None` when the policy does not monitor it.
    pub fn measure(&self, w: &DVector<f64>, w0: &DVector<f64>) -> Option<f64> {
        let n0 = w0.norm();
        match self {
            Self::NormRatio => Some((w.norm() / n0 - 1.0).abs()),
            Self::Drift => Some((w - w0).norm() / n0),
            _ => None,
        }
    }
}

#[derive(Clone, Debug)]
pub struct ChainConfig {
    pub eps: f64,
    pub eps_o2: f64,
    pub policy: RelinearizePolicy,
    /// Include `p_G/p_G0 - 1` in the validity constraint.
    pub power_drift: bool,
    pub sample_dt: f64,
    pub scan_step: f64,
    pub l: usize,
    pub m: usize,
    pub ref_machine: usize,
}

impl Default for ChainConfig {
    fn default() -> Self {
        ChainConfig {
            eps: DEFAULT_EPS,
            eps_o2: 0.05,
            policy: RelinearizePolicy::Drift,
            power_drift: false,
            sample_dt: 5e-3,
            scan_step: SCAN_STEP,
            l: DEFAULT_ORDER,
            m: DEFAULT_ORDER,
            ref_machine: 0,
        }
    }
}

/// Network, loads and machines of the post-disturbance system.
#[derive(Clone, Copy, Debug)]
pub struct AnalyticModel<'a> {
    pub net: &'a AugmentedNetwork,
    pub loads: &'a ExtendedLoadSet,
    pub gens: &'a [GeneratorDynamic],
}

impl AnalyticModel<'_> {
    pub fn linearize(&self, w: &DVector<f64>, cfg: &ChainConfig) -> Result<PadeLinearization> {
        let v_i = crate::linalg::join_complex(w);
        linearize_at(self.net, self.loads, &v_i, cfg.ref_machine, cfg.l, cfg.m)
    }
}

/// All bus voltages for internal-node state `w` under `lin`.
pub fn bus_voltages(lin: &PadeLinearization, w: &DVector<f64>) -> DVector<Complex64> {
    let vi = crate::linalg::join_complex(w);
    let vk = lin.km_voltages(w);
    DVector::from_iterator(vi.len() + vk.len(), vi.iter().chain(vk.iter()).copied())
}

struct Segment {
    lin: PadeLinearization,
    state: ConsistentState,
    sol: AnalyticSolution,
    p_g0: Option<DVector<f64>>,
}

/// Chains analytic segments from `(w, w')` at `t0` up to `horizon`.
pub fn chain_segments(
    model: AnalyticModel<'_>,
    w_start: &DVector<f64>,
    dw_start: &DVector<f64>,
    t0: f64,
    horizon: f64,
    cfg: &ChainConfig,
) -> Result<PiecewiseTrajectory> {
    let gens = model.gens;
    let inertia: Vec<f64> = gens.iter().map(|g| g.m).collect();
    let mut traj = PiecewiseTrajectory::new(
        "analytic",
        gens.iter().map(|g| g.bus).collect(),
        inertia.clone(),
        model.net.bus_ids(),
    );
    let e = DVector::from_iterator(gens.len(), gens.iter().map(|g| g.e));
    let mut tracker = AngleTracker::new(&inertia);

    let start = (|| -> Result<Segment> {
        let lin = model.linearize(w_start, cfg)?;
        let state = consistent_init(w_start, dw_start, &lin, gens, model.net)?;
        new_segment(lin, state, t0, cfg)
    })();
    let mut seg = match start {
        Ok(s) => s,
        Err(e) => return Err(e.with_partial(traj)),
    };
    // each linearization solves the network once
    traj.qpf_solves = 1;
    let mut t_s = t0;
    let mut reinit = (seg.state.iterations, seg.state.residual);
    let mut relinearized = true;
    let mut tiny = 0;
    loop {
        let id = traj.segments.len();
        let constraint = match ValidityConstraint::new(cfg.eps, e.clone(), seg.p_g0.clone()) {
            Ok(c) => c,
            Err(err) => return Err(err.with_partial(traj)),
        };
        let lin_w0 = seg.lin.w0.clone();
        let measure = |t: f64| -> f64 {
            let (w, dw) = seg.sol.evaluate(t);
            let p = seg.p_g0.as_ref().map(|_| seg.lin.p.map.value(&w));
            let o1 = constraint.value(&w, &dw, p.as_ref()).unwrap_or(f64::INFINITY) / cfg.eps;
            let o2 = cfg.policy.measure(&w, &lin_w0).map(|v| v / cfg.eps_o2).unwrap_or(0.0);
            o1.max(o2)
        };
        let crossing = match find_crossing(measure, 1.0, t_s, horizon, cfg.scan_step) {
            Ok(c) => c,
            Err(err) => return Err(err.with_partial(traj)),
        };
        let t_end = crossing.unwrap_or(horizon);

        // sample the segment, checking for angle separation
        let mut constraint_max: f64 = 0.0;
        let mut exit = if crossing.is_some() {
            ExitCause::Boundary
        } else {
            ExitCause::Horizon
        };
        let mut t_stop = t_end;
        let n_samples = ((t_end - t_s) / cfg.sample_dt).ceil().max(1.0) as usize;
        let first = if traj.samples.is_empty() { 0 } else { 1 };
        for k in first..=n_samples {
            let t = if k == n_samples {
                t_end
            } else {
                t_s + k as f64 * cfg.sample_dt
            };
            let (w, dw) = seg.sol.evaluate(t);
            if w.iter().chain(dw.iter()).any(|x| !x.is_finite()) {
                traj.failure = Some(format!("non-finite analytic state at t = {t}"));
                exit = ExitCause::Failure;
                t_stop = t;
                break;
            }
            let p = seg.p_g0.as_ref().map(|_| seg.lin.p.map.value(&w));
            constraint_max = constraint_max.max(constraint.value(&w, &dw, p.as_ref()).unwrap_or(f64::INFINITY));
            tracker.push(&w);
            traj.samples.push(Sample {
                t,
                omega: rotor_speeds(&w, &dw),
                v: bus_voltages(&seg.lin, &w),
                w,
            });
            if tracker.unstable() {
                exit = ExitCause::Instability;
                t_stop = t;
                break;
            }
        }
        traj.segments.push(SegmentRecord {
            id,
            t_start: t_s,
            t_end: t_stop,
            exit,
            reinit_iterations: reinit.0,
            reinit_residual: reinit.1,
            relinearized,
            constraint_max,
        });
        debug!("segment {id}: [{t_s:.6}, {t_stop:.6}] exit {}", exit.as_str());
        if exit != ExitCause::Boundary {
            if exit == ExitCause::Failure {
                return Err(Error::Invalid(traj.failure.clone().unwrap_or_default()).with_partial(traj));
            }
            break;
        }

        if t_end - t_s < 1e-6 {
            tiny += 1;
            if tiny > 3 {
                let err = Error::ReinitFailure {
                    iterations: reinit.0,
                    residual: reinit.1,
                };
                return Err(err.with_partial(traj));
            }
        } else {
            tiny = 0;
        }

        let (w, dw) = seg.sol.evaluate(t_end);
        let next = (|| -> Result<(Segment, bool)> {
            let state = consistent_init(&w, &dw, &seg.lin, gens, model.net)?;
            // relinearize when the drift term is near its bound after projection
            let relin = match cfg.policy {
                RelinearizePolicy::Never => tiny > 1,
                RelinearizePolicy::Always => true,
                p => {
                    p.measure(&state.w, &seg.lin.w0)
                        .map(|v| v >= RELIN_FRACTION * cfg.eps_o2)
                        .unwrap_or(false)
                        || tiny > 1
                }
            };
            if !relin {
                return Ok((new_segment(seg.lin.clone(), state, t_end, cfg)?, false));
            }
            let lin = model.linearize(&state.w, cfg)?;
            let state = consistent_init(&state.w, &state.omega, &lin, gens, model.net)?;
            Ok((new_segment(lin, state, t_end, cfg)?, true))
        })();
        let relin;
        (seg, relin) = match next {
            Ok(s) => s,
            Err(err) => return Err(err.with_partial(traj)),
        };
        reinit = (seg.state.iterations, seg.state.residual);
        relinearized = relin;
        traj.qpf_solves += relin as usize;
        t_s = t_end;
    }
    info!(
        "analytic engine: {} segments up to t = {:.4}",
        traj.segments.len(),
        traj.end_time()
    );
    Ok(traj)
}

fn new_segment(lin: PadeLinearization, state: ConsistentState, t0: f64, cfg: &ChainConfig) -> Result<Segment> {
    let sol = solve(&state.sys, &state.w, &state.omega, t0)?;
    let p_g0 = if cfg.power_drift {
        Some(lin.p.map.value(&state.w))
    } else {
        None
    };
    Ok(Segment { lin, state, sol, p_g0 })
}
