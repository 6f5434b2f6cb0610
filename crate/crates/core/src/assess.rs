//! Disturbance scenarios, engine orchestration, verdicts and reports.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use log::{info, warn};
use nalgebra::{DMatrix, DVector};
use num_complex::Complex64;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::case_model::{AugmentedNetwork, BusId, CaseData, GeneratorDynamic};
use crate::error::{Error, Result};
use crate::he_linearizer::PadeLinearization;
use crate::linalg::{orthonormal_columns, split_complex};
use crate::qpf::{qpf, QpfSolution};
use crate::reference_sims::{htms_run, internal_voltages, tds_run, HtmsConfig, TdsConfig};
use crate::region_tracker::{chain_segments, consistent_init, AnalyticModel, ChainConfig};
use crate::swing_core::{mode_report, rotation_velocity, solve, AnalyticSolution};
use crate::trajectory::{interpolate, ExitCause, PiecewiseTrajectory};
use crate::zip_loads::{build_extended_loads, ExtendedLoadSet, ZipLoadSpec};

/// How the case's ZIP loads are represented.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum LoadModel {
    /// Fractions as given in the case.
    Zip,
    Z,
    I,
    P,
}

impl LoadModel {
    pub fn parse(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "zip" => Ok(Self::Zip),
            "z" => Ok(Self::Z),
            "i" => Ok(Self::I),
            "p" => Ok(Self::P),
            other => Err(Error::Config(format!("unknown load model '{other}'"))),
        }
    }

    pub fn as_str(&self) -> &'static str {
        match self {
            Self::Zip => "zip",
            Self::Z => "z",
            Self::I => "i",
            Self::P => "p",
        }
    }

    fn fractions(&self) -> Option<(f64, f64, f64)> {
        match self {
            Self::Zip => None,
            Self::Z => Some((1.0, 0.0, 0.0)),
            Self::I => Some((0.0, 1.0, 0.0)),
            Self::P => Some((0.0, 0.0, 1.0)),
        }
    }
}

/// Replaces the ZIP fractions by a single type, rescaled so that consumption at
/// `v_km` is unchanged.
pub fn rescale_loads(
    zips: &[ZipLoadSpec],
    net: &AugmentedNetwork,
    v_km: &DVector<Complex64>,
    model: LoadModel,
) -> Result<Vec<ZipLoadSpec>> {
    let Some((fz, fi, fp)) = model.fractions() else {
        return Ok(zips.to_vec());
    };
    zips.iter()
        .map(|z| {
            let j = net.km_index_of(z.bus).ok_or_else(|| Error::DanglingBus {
                bus: z.bus,
                context: "zip load".into(),
            })?;
            let vm = v_km[j].norm();
            let shape = fz * vm * vm + fi * vm + fp;
            ZipLoadSpec::new(z.bus, z.power_at(vm) / shape, fz, fi, fp)
        })
        .collect()
}

/// Steady state with every machine at zero speed deviation.
#[derive(Clone, Debug)]
pub struct OperatingPoint {
    pub delta: DVector<f64>,
    /// Machines with `p_mech` equal to the electrical power at the solution.
    pub gens: Vec<GeneratorDynamic>,
    pub zips: Vec<ZipLoadSpec>,
    pub loads: ExtendedLoadSet,
    pub flow: QpfSolution,
}

impl OperatingPoint {
    pub fn w(&self) -> DVector<f64> {
        split_complex(&internal_voltages(&self.gens, &self.delta))
    }
}

fn electrical_power(
    net: &AugmentedNetwork,
    loads: &ExtendedLoadSet,
    gens: &[GeneratorDynamic],
    delta: &DVector<f64>,
    guess: Option<&DVector<Complex64>>,
) -> Result<QpfSolution> {
    qpf(net, loads, &internal_voltages(gens, delta), guess)
}

/// Newton on the non-reference rotor angles so that each machine's electrical
/// power equals its mechanical power; the reference machine absorbs the losses.
pub fn solve_angles(
    net: &AugmentedNetwork,
    loads: &ExtendedLoadSet,
    gens: &[GeneratorDynamic],
    ref_machine: usize,
    delta_guess: &DVector<f64>,
) -> Result<(DVector<f64>, QpfSolution)> {
    let n = gens.len();
    let mut delta = delta_guess.clone();
    let free: Vec<usize> = (0..n).filter(|&j| j != ref_machine).collect();
    let mut sol = electrical_power(net, loads, gens, &delta, None)?;
    for _ in 0..40 {
        let mis = DVector::from_iterator(free.len(), free.iter().map(|&j| gens[j].p_mech - sol.p_inj[j]));
        if mis.amax() < 1e-10 {
            return Ok((delta, sol));
        }
        let h = 1e-6;
        let mut jac = DMatrix::zeros(free.len(), free.len());
        for (c, &k) in free.iter().enumerate() {
            let mut d = delta.clone();
            d[k] += h;
            let s = electrical_power(net, loads, gens, &d, Some(&sol.v))?;
            for (r, &j) in free.iter().enumerate() {
                jac[(r, c)] = (s.p_inj[j] - sol.p_inj[j]) / h;
            }
        }
        let step = jac
            .lu()
            .solve(&mis)
            .ok_or_else(|| Error::SingularJacobian("operating point".into()))?;
        let scale = (0.5 / step.amax()).min(1.0);
        for (c, &k) in free.iter().enumerate() {
            delta[k] += scale * step[c];
        }
        sol = electrical_power(net, loads, gens, &delta, Some(&sol.v))?;
    }
    Err(Error::QpfDivergence {
        iterations: 40,
        mismatch: free
            .iter()
            .map(|&j| (gens[j].p_mech - sol.p_inj[j]).abs())
            .fold(0.0, f64::max),
        last: Box::new(sol.v),
    })
}

/// Pre-disturbance equilibrium with current loads split at its own voltages.
pub fn operating_point(case: &CaseData, net: &AugmentedNetwork, model: LoadModel) -> Result<OperatingPoint> {
    let n = case.generators.len();
    let ones = DVector::from_element(net.n_km, Complex64::new(1.0, 0.0));
    let mut zips = case.loads.clone();
    let mut loads = build_extended_loads(&zips, net, &ones)?;
    let mut delta = DVector::zeros(n);
    let mut flow = None;
    for pass in 0..3 {
        let (d, s) = solve_angles(net, &loads, &case.generators, 0, &delta)?;
        delta = d;
        let v_km = s.v_km(net.n_i);
        if pass == 0 {
            zips = rescale_loads(&case.loads, net, &v_km, model)?;
        }
        loads = build_extended_loads(&zips, net, &v_km)?;
        flow = Some(s);
    }
    let (delta, flow) = solve_angles(net, &loads, &case.generators, 0, &delta).or_else(|_| {
        flow.clone()
            .map(|f| (delta.clone(), f))
            .ok_or_else(|| Error::Invalid("no operating point".into()))
    })?;
    let gens = case
        .generators
        .iter()
        .enumerate()
        .map(|(j, g)| GeneratorDynamic {
            p_mech: flow.p_inj[j],
            ..g.clone()
        })
        .collect();
    Ok(OperatingPoint {
        delta,
        gens,
        zips,
        loads,
        flow,
    })
}

#[derive(Clone, Debug, PartialEq)]
pub enum Disturbance {
    None,
    LineOutage { from: BusId, to: BusId },
    LoadLoss { bus: BusId, severity: f64 },
}

#[derive(Clone, Debug, PartialEq)]
pub struct Scenario {
    pub disturbance: Disturbance,
    pub t_fault: f64,
    pub t_clear: f64,
    /// Shunt admittance at the near bus while the fault is on.
    pub fault_shunt: Option<Complex64>,
    /// Treat all loads as impedances during the fault.
    pub z_loads_on_fault: bool,
}

impl Scenario {
    pub fn new(disturbance: Disturbance, t_fault: f64, t_clear: f64) -> Result<Self> {
        if t_clear < t_fault {
            return Err(Error::Config("clearing time precedes the fault".into()));
        }
        if let Disturbance::LoadLoss { severity, .. } = disturbance {
            if !(severity > 0.0 && severity <= 1.0) {
                return Err(Error::Config(format!("load-loss severity {severity} outside (0, 1]")));
            }
        }
        Ok(Scenario {
            disturbance,
            t_fault,
            t_clear,
            fault_shunt: None,
            z_loads_on_fault: false,
        })
    }

    pub fn line_outage(from: BusId, to: BusId) -> Self {
        Scenario {
            disturbance: Disturbance::LineOutage { from, to },
            t_fault: 0.0,
            t_clear: 0.0,
            fault_shunt: None,
            z_loads_on_fault: false,
        }
    }

    pub fn load_loss(bus: BusId, severity: f64) -> Result<Self> {
        Scenario::new(Disturbance::LoadLoss { bus, severity }, 0.0, 0.0)
    }

    pub fn none() -> Self {
        Scenario {
            disturbance: Disturbance::None,
            t_fault: 0.0,
            t_clear: 0.0,
            fault_shunt: None,
            z_loads_on_fault: false,
        }
    }

    pub fn label(&self) -> String {
        match &self.disturbance {
            Disturbance::None => "none".into(),
            Disturbance::LineOutage { from, to } => format!("line_outage_{from}_{to}"),
            Disturbance::LoadLoss { bus, severity } => format!("load_loss_{bus}_{:.0}pct", severity * 100.0),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum EngineKind {
    Analytic,
    Tds,
    Htms,
}

impl EngineKind {
    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "analytic" => Ok(Self::Analytic),
            "tds" => Ok(Self::Tds),
            "htms" => Ok(Self::Htms),
            other => Err(Error::Config(format!("unknown engine '{other}'"))),
        }
    }

    pub fn as_str(&self) -> &'static str {
        match self {
            Self::Analytic => "analytic",
            Self::Tds => "tds",
            Self::Htms => "htms",
        }
    }
}

#[derive(Clone, Debug)]
pub struct AssessConfig {
    pub horizon: f64,
    pub load_model: LoadModel,
    pub chain: ChainConfig,
    pub tds: TdsConfig,
    pub htms: HtmsConfig,
}

impl Default for AssessConfig {
    fn default() -> Self {
        AssessConfig {
            horizon: 3.0,
            load_model: LoadModel::Zip,
            chain: ChainConfig::default(),
            tds: TdsConfig::default(),
            htms: HtmsConfig::default(),
        }
    }
}

/// The network, loads and machines after the disturbance is cleared.
#[derive(Clone, Debug)]
pub struct PostFaultSystem {
    pub net: AugmentedNetwork,
    pub loads: ExtendedLoadSet,
    pub zips: Vec<ZipLoadSpec>,
    pub gens: Vec<GeneratorDynamic>,
}

impl PostFaultSystem {
    pub fn model(&self) -> AnalyticModel<'_> {
        AnalyticModel {
            net: &self.net,
            loads: &self.loads,
            gens: &self.gens,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum StabilityStatus {
    Stable,
    Unstable,
    Undetermined,
}

impl StabilityStatus {
    pub fn as_str(&self) -> &'static str {
        match self {
            Self::Stable => "stable",
            Self::Unstable => "unstable",
            Self::Undetermined => "undetermined-by-horizon",
        }
    }
}

#[derive(Clone, Debug)]
pub struct StabilityVerdict {
    pub status: StabilityStatus,
    pub decision_time: f64,
    pub segments: usize,
    pub max_excursion: f64,
    /// Engine name to max relative COI angle deviation from TDS.
    pub agreement: BTreeMap<String, f64>,
}

impl StabilityVerdict {
    pub fn from_trajectory(traj: &PiecewiseTrajectory, horizon: f64) -> Self {
        let last = traj.segments.last().map(|s| s.exit);
        let status = match last {
            Some(ExitCause::Instability) => StabilityStatus::Unstable,
            Some(ExitCause::Horizon) if traj.end_time() >= horizon - 1e-9 && traj.failure.is_none() => StabilityStatus::Stable,
            _ => StabilityStatus::Undetermined,
        };
        let max_excursion = traj.segments.iter().map(|s| s.constraint_max).fold(0.0, f64::max);
        StabilityVerdict {
            status,
            decision_time: traj.end_time(),
            segments: traj.segments.len(),
            max_excursion,
            agreement: BTreeMap::new(),
        }
    }

    pub fn to_text(&self) -> String {
        let mut s = String::new();
        let _ = writeln!(s, "status = {}", self.status.as_str());
        let _ = writeln!(s, "decision_time = {:.6}", self.decision_time);
        let _ = writeln!(s, "segments = {}", self.segments);
        let _ = writeln!(s, "max_excursion = {:.6e}", self.max_excursion);
        for (k, v) in &self.agreement {
            let _ = writeln!(s, "agreement_{k} = {v:.6e}");
        }
        s
    }
}

/// Everything produced by one scenario run.
#[derive(Clone, Debug)]
pub struct ScenarioRun {
    pub engine: EngineKind,
    pub pre: OperatingPoint,
    pub post: PostFaultSystem,
    pub on_fault: Option<PiecewiseTrajectory>,
    pub trajectory: PiecewiseTrajectory,
    pub verdict: StabilityVerdict,
    /// Rotor angles and speeds when the post-fault engine starts.
    pub delta_clear: DVector<f64>,
    pub omega_clear: DVector<f64>,
}

impl ScenarioRun {
    /// Closed-form solution of the first post-fault segment.
    pub fn first_solution(&self, cfg: &ChainConfig) -> Result<(PadeLinearization, AnalyticSolution)> {
        let w = split_complex(&internal_voltages(&self.post.gens, &self.delta_clear));
        let dw = rotation_velocity(&w, &self.omega_clear);
        let model = self.post.model();
        let lin = model.linearize(&w, cfg)?;
        let st = consistent_init(&w, &dw, &lin, &self.post.gens, &self.post.net)?;
        let sol = solve(&st.sys, &st.w, &st.omega, self.pre_clear_time())?;
        Ok((lin, sol))
    }

    fn pre_clear_time(&self) -> f64 {
        self.on_fault.as_ref().map(|t| t.end_time()).unwrap_or(0.0)
    }
}

fn post_fault_system(net: &AugmentedNetwork, op: &OperatingPoint, disturbance: &Disturbance) -> Result<PostFaultSystem> {
    let v_km = op.flow.v_km(net.n_i);
    match disturbance {
        Disturbance::None => Ok(PostFaultSystem {
            net: net.clone(),
            loads: op.loads.clone(),
            zips: op.zips.clone(),
            gens: op.gens.clone(),
        }),
        Disturbance::LineOutage { from, to } => {
            let idx = net
                .find_branch(*from, *to)
                .ok_or_else(|| Error::Invalid(format!("no branch between buses {from} and {to}")))?;
            Ok(PostFaultSystem {
                net: net.with_branch_out(idx)?,
                loads: op.loads.clone(),
                zips: op.zips.clone(),
                gens: op.gens.clone(),
            })
        }
        Disturbance::LoadLoss { bus, severity } => {
            if !op.zips.iter().any(|z| z.bus == *bus) {
                return Err(Error::Invalid(format!("no load at bus {bus}")));
            }
            let zips: Vec<ZipLoadSpec> = op
                .zips
                .iter()
                .map(|z| {
                    if z.bus == *bus {
                        ZipLoadSpec {
                            s0: z.s0 * (1.0 - severity),
                            ..z.clone()
                        }
                    } else {
                        z.clone()
                    }
                })
                .collect();
            Ok(PostFaultSystem {
                net: net.clone(),
                loads: build_extended_loads(&zips, net, &v_km)?,
                zips,
                gens: op.gens.clone(),
            })
        }
    }
}

/// Network and loads in force between fault and clearing.
fn on_fault_system(
    net: &AugmentedNetwork,
    op: &OperatingPoint,
    post: &PostFaultSystem,
    sc: &Scenario,
) -> Result<PostFaultSystem> {
    let mut sys = post.clone();
    if let (Some(y), Disturbance::LineOutage { to, .. }) = (sc.fault_shunt, &sc.disturbance) {
        sys.net = sys.net.with_extra_shunt(*to, y)?;
    }
    if sc.z_loads_on_fault {
        let v_km = op.flow.v_km(net.n_i);
        let zips = rescale_loads(&op.zips, net, &v_km, LoadModel::Z)?;
        sys.loads = build_extended_loads(&zips, net, &v_km)?;
    }
    Ok(sys)
}

/// Pre-fault equilibrium, on-fault TDS, then the chosen engine on the post-fault system.
pub fn run_scenario(case: &CaseData, scenario: &Scenario, engine: EngineKind, cfg: &AssessConfig) -> Result<ScenarioRun> {
    let net = case.augment()?;
    let pre = operating_point(case, &net, LoadModel::Zip)?;
    let mut post = post_fault_system(&net, &pre, &scenario.disturbance)?;
    let mut delta = pre.delta.clone();
    let mut omega = DVector::from_iterator(pre.gens.len(), pre.gens.iter().map(|g| g.omega0));
    let mut t0 = scenario.t_fault;
    let mut qpf_count = 0;
    let on_fault = if scenario.t_clear > scenario.t_fault {
        let sys = on_fault_system(&net, &pre, &post, scenario)?;
        let tcfg = TdsConfig {
            horizon: scenario.t_clear,
            stop_on_instability: false,
            ..cfg.tds.clone()
        };
        let tr = tds_run(&sys.net, &sys.loads, &sys.gens, &delta, &omega, scenario.t_fault, &tcfg)?;
        if let Some(f) = &tr.failure {
            return Err(Error::Invalid(format!("on-fault simulation failed: {f}")));
        }
        let mut tr = tr;
        tr.engine = "on_fault".into();
        let last = tr.samples.last().expect("at least one sample");
        delta = tr.rotor_angles().last().cloned().expect("at least one sample");
        omega = last.omega.clone();
        t0 = last.t;
        qpf_count = tr.qpf_solves;
        Some(tr)
    } else {
        None
    };
    if cfg.load_model != LoadModel::Zip {
        // single-type loads consume what the ZIP loads do at the post-clear voltages
        let start = qpf(
            &post.net,
            &post.loads,
            &internal_voltages(&post.gens, &delta),
            Some(&pre.flow.v),
        )?;
        let v_km = start.v_km(post.net.n_i);
        post.zips = rescale_loads(&post.zips, &post.net, &v_km, cfg.load_model)?;
        post.loads = build_extended_loads(&post.zips, &post.net, &v_km)?;
    }
    let horizon = t0 + cfg.horizon;
    let result = match engine {
        EngineKind::Analytic => {
            let w = split_complex(&internal_voltages(&post.gens, &delta));
            let dw = rotation_velocity(&w, &omega);
            chain_segments(post.model(), &w, &dw, t0, horizon, &cfg.chain)
        }
        EngineKind::Tds => {
            let tcfg = TdsConfig {
                horizon,
                ..cfg.tds.clone()
            };
            tds_run(&post.net, &post.loads, &post.gens, &delta, &omega, t0, &tcfg)
        }
        EngineKind::Htms => {
            let hcfg = HtmsConfig {
                horizon,
                ..cfg.htms.clone()
            };
            htms_run(&post.net, &post.loads, &post.gens, &delta, &omega, t0, &hcfg)
        }
    };
    let mut trajectory = match result {
        Ok(t) => t,
        Err(e) => {
            warn!("{} engine failed: {e}", engine.as_str());
            match e {
                Error::Engine { partial, source } => {
                    let mut t = *partial;
                    t.failure = Some(source.to_string());
                    t
                }
                other => return Err(other),
            }
        }
    };
    trajectory.qpf_solves += qpf_count;
    let verdict = StabilityVerdict::from_trajectory(&trajectory, horizon);
    info!(
        "{} / {}: {} after {} segments",
        scenario.label(),
        engine.as_str(),
        verdict.status.as_str(),
        verdict.segments
    );
    Ok(ScenarioRun {
        engine,
        pre,
        post,
        on_fault,
        trajectory,
        verdict,
        delta_clear: delta,
        omega_clear: omega,
    })
}

/// Max over machines of `max_t |a - b| / max_t |b|` on COI angles, `b` the reference.
pub fn relative_angle_deviation(a: &PiecewiseTrajectory, reference: &PiecewiseTrajectory) -> f64 {
    per_machine_deviation(a, reference).into_iter().fold(0.0, f64::max)
}

pub fn per_machine_deviation(a: &PiecewiseTrajectory, reference: &PiecewiseTrajectory) -> Vec<f64> {
    let ta: Vec<f64> = a.samples.iter().map(|s| s.t).collect();
    let ca = a.coi_angles();
    let cr = reference.coi_angles();
    let n = reference.n_machines();
    let mut num = vec![0.0_f64; n];
    let mut den = vec![0.0_f64; n];
    for (s, r) in reference.samples.iter().zip(&cr) {
        for j in 0..n {
            den[j] = den[j].max(r[j].abs());
        }
        if let Some(x) = interpolate(&ta, &ca, s.t) {
            for j in 0..n {
                num[j] = num[j].max((x[j] - r[j]).abs());
            }
        }
    }
    // a trajectory ending early is compared only where both exist
    (0..n).map(|j| if den[j] > 0.0 { num[j] / den[j] } else { num[j] }).collect()
}

/// Dominant oscillation period of the COI angle of the machine with the largest swing.
pub fn oscillation_period(traj: &PiecewiseTrajectory, t_from: f64) -> Option<f64> {
    let coi = traj.coi_angles();
    let idx: Vec<usize> = (0..traj.samples.len()).filter(|&k| traj.samples[k].t >= t_from).collect();
    if idx.len() < 8 {
        return None;
    }
    let n = traj.n_machines();
    let machine = (0..n).max_by(|&a, &b| {
        let var = |j: usize| {
            let mean = idx.iter().map(|&k| coi[k][j]).sum::<f64>() / idx.len() as f64;
            idx.iter().map(|&k| (coi[k][j] - mean).powi(2)).sum::<f64>()
        };
        var(a).total_cmp(&var(b))
    })?;
    let ts: Vec<f64> = idx.iter().map(|&k| traj.samples[k].t).collect();
    let ys: Vec<f64> = idx.iter().map(|&k| coi[k][machine]).collect();
    dominant_period(&ts, &ys)
}

/// Period of the strongest sinusoid in `ys(ts)`, fitted jointly with a linear trend.
pub fn dominant_period(ts: &[f64], ys: &[f64]) -> Option<f64> {
    let n = ts.len();
    if n < 8 {
        return None;
    }
    let span = ts[n - 1] - ts[0];
    if !(span > 0.0) {
        return None;
    }
    let t0 = ts[0];
    let y = DVector::from_column_slice(ys);
    let power = |f: f64| -> f64 {
        let w = std::f64::consts::TAU * f;
        let design = DMatrix::from_fn(n, 4, |i, c| {
            let t = ts[i] - t0;
            match c {
                0 => 1.0,
                1 => t / span,
                2 => (w * t).cos(),
                _ => (w * t).sin(),
            }
        });
        match design.clone().svd(true, true).solve(&y, 1e-12) {
            Ok(c) => (&design * c).norm_squared(),
            Err(_) => 0.0,
        }
    };
    let dt = span / (n - 1) as f64;
    let f_min = 1.0 / span;
    let f_max = 0.5 / dt;
    let steps = 2000;
    let mut best = (0.0, f_min);
    for k in 0..=steps {
        let f = f_min * (f_max / f_min).powf(k as f64 / steps as f64);
        let p = power(f);
        if p > best.0 {
            best = (p, f);
        }
    }
    // golden-section refinement around the grid peak
    let ratio = (f_max / f_min).powf(1.0 / steps as f64);
    let (mut a, mut b) = (best.1 / ratio, best.1 * ratio);
    let g = 0.5 * (5f64.sqrt() - 1.0);
    for _ in 0..60 {
        let c = b - g * (b - a);
        let d = a + g * (b - a);
        if power(c) > power(d) {
            b = d;
        } else {
            a = c;
        }
    }
    Some(2.0 / (a + b))
}

/// Results of running every engine on one scenario.
#[derive(Clone, Debug)]
pub struct EngineComparison {
    pub runs: Vec<ScenarioRun>,
    /// Rows per machine: engine name to max relative deviation from TDS.
    pub per_machine: Vec<(BusId, BTreeMap<String, f64>)>,
    pub errors: Vec<(String, String)>,
}

impl EngineComparison {
    pub fn run(&self, engine: EngineKind) -> Option<&ScenarioRun> {
        self.runs.iter().find(|r| r.engine == engine)
    }

    pub fn agreement_csv(&self) -> String {
        let engines: Vec<String> = self
            .per_machine
            .first()
            .map(|(_, m)| m.keys().cloned().collect())
            .unwrap_or_default();
        let mut s = String::from("machine");
        for e in &engines {
            let _ = write!(s, ",{e}_vs_tds");
        }
        s.push('\n');
        for (bus, m) in &self.per_machine {
            let _ = write!(s, "{bus}");
            for e in &engines {
                let _ = write!(s, ",{:.6e}", m[e]);
            }
            s.push('\n');
        }
        s
    }
}

/// Runs TDS and the requested engines on the same scenario and compares COI angles.
pub fn compare_engines(
    case: &CaseData,
    scenario: &Scenario,
    engines: &[EngineKind],
    cfg: &AssessConfig,
) -> Result<EngineComparison> {
    let tds = run_scenario(case, scenario, EngineKind::Tds, cfg)?;
    let mut runs = vec![];
    let mut errors = vec![];
    for &e in engines.iter().filter(|&&e| e != EngineKind::Tds) {
        match run_scenario(case, scenario, e, cfg) {
            Ok(r) => runs.push(r),
            Err(err) => errors.push((e.as_str().to_string(), err.to_string())),
        }
    }
    let gen_buses = tds.trajectory.gen_buses.clone();
    let mut per_machine: Vec<(BusId, BTreeMap<String, f64>)> = gen_buses.iter().map(|&b| (b, BTreeMap::new())).collect();
    for r in runs.iter_mut() {
        let dev = per_machine_deviation(&r.trajectory, &tds.trajectory);
        for (j, d) in dev.iter().enumerate() {
            per_machine[j].1.insert(r.engine.as_str().to_string(), *d);
        }
        r.verdict
            .agreement
            .insert("tds".into(), dev.iter().copied().fold(0.0, f64::max));
    }
    runs.insert(0, tds);
    Ok(EngineComparison {
        runs,
        per_machine,
        errors,
    })
}

/// Periods of the post-transient oscillation for Z, I and P loads.
pub fn load_type_periods(
    case: &CaseData,
    scenario: &Scenario,
    engine: EngineKind,
    cfg: &AssessConfig,
    t_from: f64,
) -> Result<Vec<(LoadModel, Option<f64>)>> {
    [LoadModel::Z, LoadModel::I, LoadModel::P]
        .iter()
        .map(|&lm| {
            let c = AssessConfig {
                load_model: lm,
                ..cfg.clone()
            };
            let run = run_scenario(case, scenario, engine, &c)?;
            Ok((lm, oscillation_period(&run.trajectory, t_from)))
        })
        .collect()
}

#[derive(Clone, Debug)]
pub struct PartitionDiagnostic {
    pub bus_ids: Vec<BusId>,
    pub theta: DMatrix<f64>,
    pub clusters: Vec<Vec<BusId>>,
    pub k: usize,
}

impl PartitionDiagnostic {
    pub fn theta_csv(&self) -> String {
        theta_csv(&self.bus_ids, &self.theta)
    }
}

pub fn theta_csv(bus_ids: &[BusId], theta: &DMatrix<f64>) -> String {
    let mut s = String::from("bus");
    for b in bus_ids {
        let _ = write!(s, ",{b}");
    }
    s.push('\n');
    for (i, b) in bus_ids.iter().enumerate() {
        let _ = write!(s, "{b}");
        for j in 0..bus_ids.len() {
            let _ = write!(s, ",{:.10}", theta[(i, j)]);
        }
        s.push('\n');
    }
    s
}

/// Reads the square matrix written by [`theta_csv`].
pub fn parse_theta_csv(text: &str) -> Result<(Vec<BusId>, DMatrix<f64>)> {
    let mut lines = text.lines().filter(|l| !l.trim().is_empty());
    let header = lines.next().ok_or_else(|| Error::Syntax {
        line: 1,
        msg: "empty theta file".into(),
    })?;
    let num = |s: &str, line: usize| -> Result<f64> {
        s.trim().parse().map_err(|_| Error::Syntax {
            line,
            msg: format!("bad number '{}'", s.trim()),
        })
    };
    let ids: Vec<BusId> = header
        .split(',')
        .skip(1)
        .map(|s| num(s, 1).map(|v| v as BusId))
        .collect::<Result<_>>()?;
    let n = ids.len();
    let mut theta = DMatrix::zeros(n, n);
    let mut rows = 0;
    for (i, line) in lines.enumerate() {
        let vals: Vec<f64> = line.split(',').skip(1).map(|s| num(s, i + 2)).collect::<Result<_>>()?;
        if i >= n || vals.len() != n {
            return Err(Error::Dimension(format!("theta row {} does not match {n} columns", i + 1)));
        }
        theta.set_row(i, &nalgebra::RowDVector::from_vec(vals));
        rows += 1;
    }
    if rows != n {
        return Err(Error::Dimension(format!("theta has {rows} rows for {n} columns")));
    }
    Ok((ids, theta))
}

/// Largest principal angle between the row spaces of `a` and `b`.
pub fn principal_angle(a: &DMatrix<f64>, b: &DMatrix<f64>) -> Option<f64> {
    let qa = orthonormal_columns(&a.transpose());
    let qb = orthonormal_columns(&b.transpose());
    if qa.ncols() == 0 || qb.ncols() == 0 {
        return None;
    }
    let sv = (qa.transpose() * &qb).svd(false, false).singular_values;
    let k = qa.ncols().min(qb.ncols());
    let smin = sv.iter().take(k).copied().fold(f64::INFINITY, f64::min).min(1.0);
    Some(smin.max(0.0).acos())
}

/// Pairwise angles between per-bus row blocks `[x_i; y_i]` of the KM map.
pub fn subspace_angles(h_km: &DMatrix<f64>, n_km: usize) -> Result<DMatrix<f64>> {
    if h_km.nrows() != 2 * n_km {
        return Err(Error::Dimension(format!("{} rows for {n_km} buses", h_km.nrows())));
    }
    let block = |i: usize| {
        let mut b = DMatrix::zeros(2, h_km.ncols());
        b.set_row(0, &h_km.row(i));
        b.set_row(1, &h_km.row(n_km + i));
        b
    };
    let blocks: Vec<DMatrix<f64>> = (0..n_km).map(block).collect();
    for (i, b) in blocks.iter().enumerate() {
        if b.iter().all(|&x| x == 0.0) {
            return Err(Error::UndefinedAngle(i));
        }
    }
    let mut theta = DMatrix::zeros(n_km, n_km);
    for i in 0..n_km {
        for j in i + 1..n_km {
            let a = principal_angle(&blocks[i], &blocks[j]).ok_or(Error::UndefinedAngle(i))?;
            theta[(i, j)] = a;
            theta[(j, i)] = a;
        }
    }
    Ok(theta)
}

pub const KMEANS_SEED: u64 = 0x5eed;
pub const KMEANS_RESTARTS: usize = 20;

/// k-means on the rows of `theta`; best of [`KMEANS_RESTARTS`] seeded k-means++ runs.
///
/// Returns cluster labels in `0..k`, renumbered by first appearance.
pub fn kmeans_partition(theta: &DMatrix<f64>, k: usize) -> Result<Vec<usize>> {
    let n = theta.nrows();
    if k < 1 || k > n {
        return Err(Error::Config(format!("cluster count {k} outside 1..={n}")));
    }
    let pts: Vec<DVector<f64>> = (0..n).map(|i| theta.row(i).transpose()).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(KMEANS_SEED);
    let mut best: Option<(f64, Vec<usize>)> = None;
    for _ in 0..KMEANS_RESTARTS {
        let (cost, labels) = lloyd(&pts, k, &mut rng);
        if best.as_ref().map(|b| cost < b.0 - 1e-12).unwrap_or(true) {
            best = Some((cost, labels));
        }
    }
    let labels = best.expect("at least one restart").1;
    let mut map = vec![usize::MAX; k];
    let mut next = 0;
    Ok(labels
        .iter()
        .map(|&l| {
            if map[l] == usize::MAX {
                map[l] = next;
                next += 1;
            }
            map[l]
        })
        .collect())
}

fn lloyd(pts: &[DVector<f64>], k: usize, rng: &mut ChaCha8Rng) -> (f64, Vec<usize>) {
    let n = pts.len();
    // k-means++ seeding
    let mut centers = vec![pts[rng.random_range(0..n)].clone()];
    while centers.len() < k {
        let d2: Vec<f64> = pts
            .iter()
            .map(|p| centers.iter().map(|c| (p - c).norm_squared()).fold(f64::INFINITY, f64::min))
            .collect();
        let total: f64 = d2.iter().sum();
        let pick = if total > 0.0 {
            let mut r = rng.random::<f64>() * total;
            let mut idx = n - 1;
            for (i, d) in d2.iter().enumerate() {
                if r < *d {
                    idx = i;
                    break;
                }
                r -= d;
            }
            idx
        } else {
            (0..n).find(|i| !centers.iter().any(|c| c == &pts[*i])).unwrap_or(0)
        };
        centers.push(pts[pick].clone());
    }
    let mut labels = vec![0; n];
    for _ in 0..100 {
        let mut changed = false;
        for (i, p) in pts.iter().enumerate() {
            let l = (0..k)
                .min_by(|&a, &b| (p - &centers[a]).norm_squared().total_cmp(&(p - &centers[b]).norm_squared()))
                .expect("k >= 1");
            if l != labels[i] {
                labels[i] = l;
                changed = true;
            }
        }
        for (c, center) in centers.iter_mut().enumerate() {
            let members: Vec<&DVector<f64>> = pts.iter().zip(&labels).filter(|(_, &l)| l == c).map(|(p, _)| p).collect();
            if !members.is_empty() {
                *center = members.iter().fold(DVector::zeros(pts[0].len()), |acc, p| acc + *p) / members.len() as f64;
            }
        }
        if !changed {
            break;
        }
    }
    let cost = pts.iter().zip(&labels).map(|(p, &l)| (p - &centers[l]).norm_squared()).sum();
    (cost, labels)
}

/// Subspace angles of the KM map at the pre-disturbance operating point, clustered.
pub fn partition_diagnostic(case: &CaseData, model: LoadModel, k: usize, cfg: &ChainConfig) -> Result<PartitionDiagnostic> {
    let net = case.augment()?;
    let op = operating_point(case, &net, model)?;
    let lin = crate::he_linearizer::linearize_at(
        &net,
        &op.loads,
        &internal_voltages(&op.gens, &op.delta),
        cfg.ref_machine,
        cfg.l,
        cfg.m,
    )?;
    let theta = subspace_angles(&lin.km.map.mat, net.n_km)?;
    let bus_ids = net.km_bus_ids();
    let labels = kmeans_partition(&theta, k)?;
    Ok(PartitionDiagnostic {
        clusters: group_labels(&bus_ids, &labels, k),
        bus_ids,
        theta,
        k,
    })
}

pub fn group_labels(bus_ids: &[BusId], labels: &[usize], k: usize) -> Vec<Vec<BusId>> {
    let mut groups = vec![Vec::new(); k];
    for (b, &l) in bus_ids.iter().zip(labels) {
        groups[l].push(*b);
    }
    groups
}

/// Writes `contents` to `dir/name` through a temporary file and a rename.
fn write_atomic(dir: &Path, name: &str, contents: &str) -> Result<PathBuf> {
    let path = dir.join(name);
    let tmp = dir.join(format!(".{name}.tmp"));
    std::fs::write(&tmp, contents)?;
    std::fs::rename(&tmp, &path)?;
    Ok(path)
}

/// Inputs of a report; every field but the trajectories is optional.
#[derive(Clone, Debug, Default)]
pub struct Report<'a> {
    pub trajectories: Vec<&'a PiecewiseTrajectory>,
    pub verdicts: Vec<(&'a str, &'a StabilityVerdict)>,
    pub modes: Option<String>,
    pub agreement: Option<String>,
    pub theta: Option<String>,
}

/// Writes trajectory CSVs, verdicts, mode report, segment logs and theta into `dir`.
pub fn emit_report(report: &Report<'_>, dir: &Path) -> Result<Vec<PathBuf>> {
    if report.trajectories.is_empty() {
        return Err(Error::Invalid("report needs at least one trajectory".into()));
    }
    std::fs::create_dir_all(dir)?;
    let mut out = Vec::new();
    for t in &report.trajectories {
        out.push(write_atomic(dir, &format!("trajectory_{}.csv", t.engine), &t.to_csv())?);
        out.push(write_atomic(
            dir,
            &format!("segments_{}.csv", t.engine),
            &t.segment_log_csv(),
        )?);
    }
    if !report.verdicts.is_empty() {
        let mut s = String::new();
        for (name, v) in &report.verdicts {
            let _ = writeln!(s, "[{name}]");
            s.push_str(&v.to_text());
        }
        out.push(write_atomic(dir, "verdict.txt", &s)?);
    }
    if let Some(m) = &report.modes {
        out.push(write_atomic(dir, "modes.csv", m)?);
    }
    if let Some(a) = &report.agreement {
        out.push(write_atomic(dir, "agreement.csv", a)?);
    }
    if let Some(t) = &report.theta {
        out.push(write_atomic(dir, "theta.csv", t)?);
    }
    Ok(out)
}

/// Mode table for the first post-fault segment of an analytic run.
pub fn scenario_modes(run: &ScenarioRun, cfg: &ChainConfig) -> Result<String> {
    let (_, sol) = run.first_solution(cfg)?;
    Ok(mode_report(&sol, &run.trajectory.gen_buses))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn principal_angle_extremes() {
        let a = DMatrix::from_row_slice(1, 3, &[1.0, 0.0, 0.0]);
        let b = DMatrix::from_row_slice(1, 3, &[0.0, 2.0, 0.0]);
        assert!(principal_angle(&a, &a).unwrap().abs() < 1e-7);
        assert!((principal_angle(&a, &b).unwrap() - std::f64::consts::FRAC_PI_2).abs() < 1e-12);
    }

    #[test]
    fn kmeans_singletons() {
        let theta = DMatrix::from_fn(4, 4, |i, j| if i == j { 0.0 } else { 1.0 + (i + j) as f64 * 0.1 });
        let labels = kmeans_partition(&theta, 4).unwrap();
        let mut l = labels.clone();
        l.sort();
        l.dedup();
        assert_eq!(l.len(), 4);
        assert!(kmeans_partition(&theta, 5).is_err());
    }

    #[test]
    fn period_of_pure_sine() {
        let ts: Vec<f64> = (0..600).map(|k| k as f64 * 0.005).collect();
        let ys: Vec<f64> = ts
            .iter()
            .map(|t| 0.3 * (std::f64::consts::TAU * t / 0.7).sin() + 0.1 * t)
            .collect();
        let p = dominant_period(&ts, &ys).unwrap();
        assert!((p - 0.7).abs() < 1e-4, "{p}");
    }
}
