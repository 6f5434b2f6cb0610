//! Numerical baselines: modified-Euler time-domain simulation and the
//! truncated McLaurin-series integrator with radius-guarded re-expansion.

use log::{debug, info};
use nalgebra::{DMatrix, DVector};
use num_complex::Complex64;

use crate::case_model::{AugmentedNetwork, GeneratorDynamic};
use crate::error::{Error, Result};
use crate::qpf::{assemble_qpf, qpf, QpfSolution, QuadraticFormSystem};
use crate::trajectory::{AngleTracker, ExitCause, PiecewiseTrajectory, Sample, SegmentRecord};
use crate::zip_loads::ExtendedLoadSet;

pub const DEFAULT_DT: f64 = 1e-3;
pub const DEFAULT_TERMS: usize = 25;
pub const RADIUS_GUARD: f64 = 0.5;
pub const MIN_RADIUS: f64 = 1e-4;

/// Where the damping torque acts.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum DampingMode {
    /// `D omega`.
    OnSpeed,
    /// `D (delta - delta0)`.
    OnAngle,
}

impl DampingMode {
    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "on-speed" => Ok(Self::OnSpeed),
            "on-angle" => Ok(Self::OnAngle),
            other => Err(Error::Config(format!("unknown damping mode '{other}'"))),
        }
    }
}

#[derive(Clone, Debug)]
pub struct TdsConfig {
    pub dt: f64,
    /// Absolute end time.
    pub horizon: f64,
    pub damping: DampingMode,
    /// Record every n-th step.
    pub sample_every: usize,
    pub stop_on_instability: bool,
}

impl Default for TdsConfig {
    fn default() -> Self {
        TdsConfig {
            dt: DEFAULT_DT,
            horizon: 3.0,
            damping: DampingMode::OnSpeed,
            sample_every: 5,
            stop_on_instability: true,
        }
    }
}

/// One modified-Euler (Heun) step of `x'' = f(x, x')`.
pub fn heun_step<F>(x: &DVector<f64>, v: &DVector<f64>, dt: f64, mut f: F) -> Result<(DVector<f64>, DVector<f64>)>
where
    F: FnMut(&DVector<f64>, &DVector<f64>) -> Result<DVector<f64>>,
{
    let a0 = f(x, v)?;
    let xp = x + v * dt;
    let vp = v + &a0 * dt;
    let a1 = f(&xp, &vp)?;
    Ok((x + (v + &vp) * (0.5 * dt), v + (a0 + a1) * (0.5 * dt)))
}

pub fn internal_voltages(gens: &[GeneratorDynamic], delta: &DVector<f64>) -> DVector<Complex64> {
    DVector::from_fn(gens.len(), |j, _| Complex64::from_polar(gens[j].e, delta[j]))
}

fn polar_state(gens: &[GeneratorDynamic], delta: &DVector<f64>) -> DVector<f64> {
    let n = gens.len();
    DVector::from_fn(2 * n, |k, _| {
        let j = k % n;
        if k < n {
            gens[j].e * delta[j].cos()
        } else {
            gens[j].e * delta[j].sin()
        }
    })
}

/// Modified-Euler simulation with a quasi power flow at each stage.
pub fn tds_run(
    net: &AugmentedNetwork,
    loads: &ExtendedLoadSet,
    gens: &[GeneratorDynamic],
    delta0: &DVector<f64>,
    omega0: &DVector<f64>,
    t0: f64,
    cfg: &TdsConfig,
) -> Result<PiecewiseTrajectory> {
    let n = gens.len();
    if !(cfg.dt > 0.0) {
        return Err(Error::Config(format!("time step must be positive, got {}", cfg.dt)));
    }
    if delta0.len() != n || omega0.len() != n || net.n_i != n {
        return Err(Error::Dimension("initial state does not match the machines".into()));
    }
    let inertia: Vec<f64> = gens.iter().map(|g| g.m).collect();
    let mut traj = PiecewiseTrajectory::new("tds", gens.iter().map(|g| g.bus).collect(), inertia.clone(), net.bus_ids());
    let mut tracker = AngleTracker::new(&inertia);
    let steps = ((cfg.horizon - t0) / cfg.dt - 1e-9).ceil().max(0.0) as usize;
    let pm = DVector::from_iterator(n, gens.iter().map(|g| g.p_mech));
    let m = DVector::from_iterator(n, gens.iter().map(|g| g.m));
    let d = DVector::from_iterator(n, gens.iter().map(|g| g.d));
    let delta_ref = delta0.clone();

    let mut delta = delta0.clone();
    let mut omega = omega0.clone();
    let mut guess: Option<DVector<Complex64>> = None;
    let mut solves = 0usize;
    let mut exit = ExitCause::Horizon;
    let mut t_end = t0;
    let every = cfg.sample_every.max(1);

    let solve = |delta: &DVector<f64>, guess: &mut Option<DVector<Complex64>>, solves: &mut usize| -> Result<QpfSolution> {
        let sol = qpf(net, loads, &internal_voltages(gens, delta), guess.as_ref())?;
        *solves += 1;
        *guess = Some(sol.v.clone());
        Ok(sol)
    };

    for k in 0..=steps {
        let t = if k == steps {
            cfg.horizon.max(t0)
        } else {
            t0 + k as f64 * cfg.dt
        };
        let h = if k + 1 == steps { cfg.horizon - t } else { cfg.dt };
        let sol0 = match solve(&delta, &mut guess, &mut solves) {
            Ok(s) => s,
            Err(e) => {
                traj.failure = Some(format!("QPF failed at t = {t:.6}: {e}"));
                exit = ExitCause::Failure;
                break;
            }
        };
        let w = polar_state(gens, &delta);
        tracker.push(&w);
        t_end = t;
        if k % every == 0 || k == steps {
            traj.samples.push(Sample {
                t,
                w,
                omega: omega.clone(),
                v: sol0.v.clone(),
            });
        }
        if cfg.stop_on_instability && tracker.unstable() {
            exit = ExitCause::Instability;
            if traj.samples.last().map(|s| s.t) != Some(t) {
                traj.samples.push(Sample {
                    t,
                    w: polar_state(gens, &delta),
                    omega: omega.clone(),
                    v: sol0.v.clone(),
                });
            }
            break;
        }
        if k == steps {
            break;
        }
        let pe0 = sol0.p_inj.rows(0, n).into_owned();
        let mut first = Some(pe0);
        let step = heun_step(&delta, &omega, h, |x, v| {
            let pe = match first.take() {
                Some(p) => p,
                None => solve(x, &mut guess, &mut solves)?.p_inj.rows(0, n).into_owned(),
            };
            let damp = match cfg.damping {
                DampingMode::OnSpeed => v.clone(),
                DampingMode::OnAngle => x - &delta_ref,
            };
            Ok(DVector::from_fn(n, |j, _| (pm[j] - pe[j] - d[j] * damp[j]) / m[j]))
        });
        match step {
            Ok((x1, v1)) => {
                delta = x1;
                omega = v1;
            }
            Err(e) => {
                traj.failure = Some(format!("QPF failed at t = {t:.6}: {e}"));
                exit = ExitCause::Failure;
                break;
            }
        }
    }
    traj.qpf_solves = solves;
    traj.segments.push(SegmentRecord {
        id: 0,
        t_start: t0,
        t_end,
        exit,
        reinit_iterations: 0,
        reinit_residual: 0.0,
        relinearized: false,
        constraint_max: 0.0,
    });
    info!("tds: {} steps, {solves} QPF solves, exit {}", steps, exit.as_str());
    Ok(traj)
}

/// Supplies the electrical-power coefficient of the next order.
pub trait PowerSeriesOracle {
    /// Given `delta[0..=n]`, returns `p_elec[n]` per machine.
    fn next_power(&mut self, delta: &[DVector<f64>]) -> Result<DVector<f64>>;
}

impl<F: FnMut(&[DVector<f64>]) -> Result<DVector<f64>>> PowerSeriesOracle for F {
    fn next_power(&mut self, delta: &[DVector<f64>]) -> Result<DVector<f64>> {
        self(delta)
    }
}

/// Truncated McLaurin coefficients of the rotor motion about `t_tr`.
#[derive(Clone, Debug)]
pub struct McLaurinState {
    pub delta: Vec<DVector<f64>>,
    pub omega: Vec<DVector<f64>>,
    /// Bus-voltage coefficients, empty when the oracle does not provide them.
    pub v: Vec<DVector<Complex64>>,
    pub t_tr: f64,
    pub m: usize,
}

fn horner<T>(c: &[DVector<T>], tau: f64) -> DVector<T>
where
    T: nalgebra::Scalar + Copy + std::ops::Mul<f64, Output = T> + std::ops::Add<Output = T>,
{
    let mut acc = c[c.len() - 1].clone();
    for k in (0..c.len() - 1).rev() {
        acc = DVector::from_fn(acc.len(), |i, _| acc[i] * tau + c[k][i]);
    }
    acc
}

impl McLaurinState {
    pub fn delta_at(&self, t: f64) -> DVector<f64> {
        horner(&self.delta, t - self.t_tr)
    }

    pub fn omega_at(&self, t: f64) -> DVector<f64> {
        horner(&self.omega, t - self.t_tr)
    }

    pub fn v_at(&self, t: f64) -> Option<DVector<Complex64>> {
        (!self.v.is_empty()).then(|| horner(&self.v, t - self.t_tr))
    }
}

/// Coefficient recursion of the swing equation with speed damping.
pub fn htms_coefficients<O: PowerSeriesOracle>(
    gens: &[GeneratorDynamic],
    delta0: &DVector<f64>,
    omega0: &DVector<f64>,
    t_tr: f64,
    m: usize,
    oracle: &mut O,
) -> Result<McLaurinState> {
    let n = gens.len();
    if m == 0 {
        return Err(Error::Config("series needs at least one term".into()));
    }
    if delta0.len() != n || omega0.len() != n {
        return Err(Error::Dimension("initial state does not match the machines".into()));
    }
    let mut delta = vec![delta0.clone()];
    let mut omega = vec![omega0.clone()];
    for tau in 0..m - 1 {
        let pe = oracle.next_power(&delta).map_err(|e| match e {
            Error::SeriesOracle { .. } => e,
            other => Error::SeriesOracle {
                order: tau,
                msg: other.to_string(),
            },
        })?;
        let k = (tau + 1) as f64;
        let w_next = DVector::from_fn(n, |j, _| {
            let g = &gens[j];
            let pm = if tau == 0 { g.p_mech } else { 0.0 };
            (pm - pe[j] - g.d * omega[tau][j]) / (k * g.m)
        });
        let d_next = &omega[tau] / k;
        omega.push(w_next);
        delta.push(d_next);
    }
    Ok(McLaurinState {
        delta,
        omega,
        v: Vec::new(),
        t_tr,
        m,
    })
}

/// Time-series quasi power flow: bus voltages and generator power order by order.
pub struct NetworkSeriesOracle<'a> {
    gens: &'a [GeneratorDynamic],
    sys: QuadraticFormSystem,
    lu: nalgebra::LU<f64, nalgebra::Dyn, nalgebra::Dyn>,
    /// Internal-node exponent coefficients `j delta[k]`.
    v: Vec<DVector<Complex64>>,
    cur: Vec<DVector<Complex64>>,
    /// `|v|` coefficients at the KM buses.
    mag: Vec<DVector<f64>>,
}

impl<'a> NetworkSeriesOracle<'a> {
    /// Starts from a converged quasi power flow at the expansion point.
    pub fn new(
        net: &AugmentedNetwork,
        loads: &ExtendedLoadSet,
        gens: &'a [GeneratorDynamic],
        sol0: &QpfSolution,
    ) -> Result<Self> {
        let ni = net.n_i;
        let sys = assemble_qpf(net, loads, &sol0.v.rows(0, ni).into_owned())?;
        let jac: DMatrix<f64> = sys.jacobian(&sol0.v);
        let lu = jac.lu();
        let v0 = sol0.v.clone();
        let mut cur0 = &sys.ybus * &v0;
        for j in 0..sys.n_km {
            cur0[ni + j] -= sys.i0[j];
        }
        let mag0 = DVector::from_fn(sys.n_km, |j, _| v0[ni + j].norm());
        Ok(NetworkSeriesOracle {
            gens,
            sys,
            lu,
            v: vec![v0],
            cur: vec![cur0],
            mag: vec![mag0],
        })
    }

    pub fn voltages(&self) -> &[DVector<Complex64>] {
        &self.v
    }

    fn power_coefficient(&self, n: usize) -> DVector<f64> {
        let ni = self.sys.n_i;
        DVector::from_fn(ni, |j, _| {
            (0..=n)
                .map(|i| self.v[i][j] * self.cur[n - i][j].conj())
                .sum::<Complex64>()
                .re
        })
    }

    /// Adds order `n = v.len()` given the internal-node coefficients.
    fn extend(&mut self, v_i: DVector<Complex64>) -> Result<()> {
        let n = self.v.len();
        let (ni, nk) = (self.sys.n_i, self.sys.n_km);
        let mut vn = DVector::zeros(ni + nk);
        vn.rows_mut(0, ni).copy_from(&v_i);
        let known_cur = &self.sys.ybus * &vn;
        // KM mismatch coefficient with v_KM[n] = 0
        let mut known = DVector::<Complex64>::zeros(nk);
        let mag_known = self.magnitude_coefficient(n, &vn);
        for k in 0..nk {
            let g = ni + k;
            let mut s = self.v[0][g] * known_cur[g].conj();
            for i in 1..n {
                s += self.v[i][g] * self.cur[n - i][g].conj();
            }
            known[k] = s - self.sys.s_current[k] * mag_known[k];
        }
        let rhs = DVector::from_fn(2 * nk, |i, _| if i < nk { -known[i].re } else { -known[i - nk].im });
        let u = self
            .lu
            .solve(&rhs)
            .filter(|u| u.iter().all(|x| x.is_finite()))
            .ok_or_else(|| Error::SeriesOracle {
                order: n,
                msg: "singular power-flow Jacobian".into(),
            })?;
        for k in 0..nk {
            vn[ni + k] = Complex64::new(u[k], u[nk + k]);
        }
        let cur = &self.sys.ybus * &vn;
        let mag = self.magnitude_coefficient(n, &vn);
        if vn.iter().any(|z| !z.re.is_finite() || !z.im.is_finite()) {
            return Err(Error::SeriesOracle {
                order: n,
                msg: "non-finite voltage coefficient".into(),
            });
        }
        self.v.push(vn);
        self.cur.push(cur);
        self.mag.push(mag);
        Ok(())
    }

    /// `|v|[n]` at the KM buses from `r^2 = v conj(v)`.
    fn magnitude_coefficient(&self, n: usize, vn: &DVector<Complex64>) -> DVector<f64> {
        let ni = self.sys.n_i;
        DVector::from_fn(self.sys.n_km, |k, _| {
            let g = ni + k;
            let mut q = vn[g] * self.v[0][g].conj() + self.v[0][g] * vn[g].conj();
            for i in 1..n {
                q += self.v[i][g] * self.v[n - i][g].conj();
            }
            let mut s = q.re;
            for i in 1..n {
                s -= self.mag[i][k] * self.mag[n - i][k];
            }
            s / (2.0 * self.mag[0][k])
        })
    }
}

/// Coefficients of `E exp(j delta(t))` up to the length of `delta`.
pub fn exp_series(e: &DVector<f64>, delta: &[DVector<f64>]) -> Vec<DVector<Complex64>> {
    let n = e.len();
    let mut out: Vec<DVector<Complex64>> = vec![DVector::from_fn(n, |j, _| Complex64::from_polar(e[j], delta[0][j]))];
    for order in 1..delta.len() {
        let c = DVector::from_fn(n, |j, _| {
            let mut s = Complex64::new(0.0, 0.0);
            for k in 1..=order {
                s += Complex64::new(0.0, k as f64 * delta[k][j]) * out[order - k][j];
            }
            s / order as f64
        });
        out.push(c);
    }
    out
}

impl PowerSeriesOracle for NetworkSeriesOracle<'_> {
    fn next_power(&mut self, delta: &[DVector<f64>]) -> Result<DVector<f64>> {
        let n = delta.len() - 1;
        let e = DVector::from_iterator(self.gens.len(), self.gens.iter().map(|g| g.e));
        while self.v.len() <= n {
            let order = self.v.len();
            let vi = exp_series(&e, &delta[..=order]);
            self.extend(vi[order].clone())?;
        }
        Ok(self.power_coefficient(n))
    }
}

/// `min |u[m-2] / u[m-1]|` over angles, speeds and internal-node voltages.
pub fn convergence_radius(state: &McLaurinState) -> f64 {
    let m = state.delta.len();
    if m < 2 {
        return f64::INFINITY;
    }
    let mut r = f64::INFINITY;
    let mut check = |a: f64, b: f64| {
        if b.abs() > 1e-300 {
            r = r.min((a / b).abs());
        }
    };
    let n = state.delta[0].len();
    for j in 0..n {
        check(state.delta[m - 2][j], state.delta[m - 1][j]);
        check(state.omega[m - 2][j], state.omega[m - 1][j]);
    }
    if state.v.len() >= m {
        for j in 0..n {
            check(state.v[m - 2][j].re, state.v[m - 1][j].re);
            check(state.v[m - 2][j].im, state.v[m - 1][j].im);
        }
    }
    r
}

#[derive(Clone, Debug)]
pub struct HtmsConfig {
    pub terms: usize,
    pub horizon: f64,
    pub sample_dt: f64,
    pub guard: f64,
}

impl Default for HtmsConfig {
    fn default() -> Self {
        HtmsConfig {
            terms: DEFAULT_TERMS,
            horizon: 3.0,
            sample_dt: 5e-3,
            guard: RADIUS_GUARD,
        }
    }
}

/// Series integration with re-expansion when the guarded radius expires.
pub fn htms_run(
    net: &AugmentedNetwork,
    loads: &ExtendedLoadSet,
    gens: &[GeneratorDynamic],
    delta0: &DVector<f64>,
    omega0: &DVector<f64>,
    t0: f64,
    cfg: &HtmsConfig,
) -> Result<PiecewiseTrajectory> {
    let inertia: Vec<f64> = gens.iter().map(|g| g.m).collect();
    let mut traj = PiecewiseTrajectory::new("htms", gens.iter().map(|g| g.bus).collect(), inertia.clone(), net.bus_ids());
    let mut tracker = AngleTracker::new(&inertia);
    let mut delta = delta0.clone();
    let mut omega = omega0.clone();
    let mut t = t0;
    let mut guess: Option<DVector<Complex64>> = None;
    loop {
        let id = traj.segments.len();
        let expansion = (|| -> Result<McLaurinState> {
            let sol0 = qpf(net, loads, &internal_voltages(gens, &delta), guess.as_ref())?;
            guess = Some(sol0.v.clone());
            let mut oracle = NetworkSeriesOracle::new(net, loads, gens, &sol0)?;
            let mut st = htms_coefficients(gens, &delta, &omega, t, cfg.terms, &mut oracle)?;
            // voltages up to the last angle coefficient
            oracle.next_power(&st.delta)?;
            st.v = oracle.voltages().to_vec();
            Ok(st)
        })();
        traj.qpf_solves += 1;
        let st = match expansion {
            Ok(s) => s,
            Err(err) => return Err(err.with_partial(traj)),
        };
        let radius = convergence_radius(&st);
        let h = cfg.guard * radius;
        if h < MIN_RADIUS {
            return Err(Error::RadiusCollapse { radius, t }.with_partial(traj));
        }
        let t_next = (t + h).min(cfg.horizon);
        debug!("htms expansion {id} at t = {t:.6}, radius {radius:.4e}");
        let steps = ((t_next - t) / cfg.sample_dt).ceil().max(1.0) as usize;
        let first = if traj.samples.is_empty() { 0 } else { 1 };
        let mut exit = if t_next >= cfg.horizon {
            ExitCause::Horizon
        } else {
            ExitCause::Boundary
        };
        let mut t_stop = t_next;
        for k in first..=steps {
            let ts = if k == steps { t_next } else { t + k as f64 * cfg.sample_dt };
            let d = st.delta_at(ts);
            let w = polar_state(gens, &d);
            let v = st.v_at(ts).unwrap_or_else(|| DVector::zeros(0));
            tracker.push(&w);
            traj.samples.push(Sample {
                t: ts,
                w,
                omega: st.omega_at(ts),
                v,
            });
            if tracker.unstable() {
                exit = ExitCause::Instability;
                t_stop = ts;
                break;
            }
        }
        traj.segments.push(SegmentRecord {
            id,
            t_start: t,
            t_end: t_stop,
            exit,
            reinit_iterations: 0,
            reinit_residual: 0.0,
            relinearized: true,
            constraint_max: radius,
        });
        if exit != ExitCause::Boundary {
            break;
        }
        delta = st.delta_at(t_next);
        omega = st.omega_at(t_next);
        t = t_next;
    }
    info!("htms: {} expansions", traj.segments.len());
    Ok(traj)
}
