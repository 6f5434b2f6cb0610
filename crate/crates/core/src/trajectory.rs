//! Sampled trajectories shared by the analytic, TDS and truncated-series engines.

use std::fmt::Write as _;

use nalgebra::DVector;
use num_complex::Complex64;

use crate::case_model::BusId;
use crate::swing_core::to_coi_angles;

#[derive(Clone, Debug)]
pub struct Sample {
    pub t: f64,
    /// Internal-node voltages `[x; y]` in the global frame.
    pub w: DVector<f64>,
    /// Speed deviations in rad/s.
    pub omega: DVector<f64>,
    /// Voltages at every bus in network order; may be empty.
    pub v: DVector<Complex64>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ExitCause {
    Boundary,
    Horizon,
    Instability,
    Failure,
}

impl ExitCause {
    pub fn as_str(&self) -> &'static str {
        match self {
            ExitCause::Boundary => "boundary",
            ExitCause::Horizon => "horizon",
            ExitCause::Instability => "instability",
            ExitCause::Failure => "failure",
        }
    }
}

#[derive(Clone, Debug)]
pub struct SegmentRecord {
    pub id: usize,
    pub t_start: f64,
    pub t_end: f64,
    pub exit: ExitCause,
    pub reinit_iterations: usize,
    pub reinit_residual: f64,
    pub relinearized: bool,
    /// Largest constraint value seen on the segment's checkpoints.
    pub constraint_max: f64,
}

#[derive(Clone, Debug, Default)]
pub struct PiecewiseTrajectory {
    pub engine: String,
    pub gen_buses: Vec<BusId>,
    pub inertia: Vec<f64>,
    pub bus_ids: Vec<BusId>,
    pub samples: Vec<Sample>,
    pub segments: Vec<SegmentRecord>,
    pub qpf_solves: usize,
    pub failure: Option<String>,
}

impl PiecewiseTrajectory {
    pub fn new(engine: &str, gen_buses: Vec<BusId>, inertia: Vec<f64>, bus_ids: Vec<BusId>) -> Self {
        PiecewiseTrajectory {
            engine: engine.to_string(),
            gen_buses,
            inertia,
            bus_ids,
            ..Default::default()
        }
    }

    pub fn n_machines(&self) -> usize {
        self.gen_buses.len()
    }

    pub fn end_time(&self) -> f64 {
        self.samples.last().map(|s| s.t).unwrap_or(0.0)
    }

    /// Rotor angles `arg(x + jy)` per sample, unwrapped along time.
    pub fn rotor_angles(&self) -> Vec<DVector<f64>> {
        let n = self.n_machines();
        let mut out: Vec<DVector<f64>> = Vec::with_capacity(self.samples.len());
        for s in &self.samples {
            let mut d = DVector::from_fn(n, |j, _| s.w[n + j].atan2(s.w[j]));
            if let Some(prev) = out.last() {
                for j in 0..n {
                    let k = ((prev[j] - d[j]) / std::f64::consts::TAU).round();
                    d[j] += k * std::f64::consts::TAU;
                }
            }
            out.push(d);
        }
        out
    }

    /// Rotor angles relative to the center of inertia.
    pub fn coi_angles(&self) -> Vec<DVector<f64>> {
        self.rotor_angles()
            .into_iter()
            .map(|d| to_coi_angles(&d, &self.inertia).expect("inertias validated at construction"))
            .collect()
    }

    /// Linear interpolation of COI angles at `t`; `None` outside the sampled span.
    pub fn coi_at(&self, t: f64) -> Option<DVector<f64>> {
        let coi = self.coi_angles();
        interpolate(&self.samples.iter().map(|s| s.t).collect::<Vec<_>>(), &coi, t)
    }

    pub fn to_csv(&self) -> String {
        let mut s = String::from("t");
        for g in &self.gen_buses {
            let _ = write!(s, ",delta_coi_{g}");
        }
        for g in &self.gen_buses {
            let _ = write!(s, ",omega_{g}");
        }
        let with_v = self.samples.first().map(|x| x.v.len() == self.bus_ids.len()).unwrap_or(false);
        if with_v {
            for b in &self.bus_ids {
                let _ = write!(s, ",vx_{b}");
            }
            for b in &self.bus_ids {
                let _ = write!(s, ",vy_{b}");
            }
        }
        s.push('\n');
        for (sample, coi) in self.samples.iter().zip(self.coi_angles()) {
            let _ = write!(s, "{:.6}", sample.t);
            for d in coi.iter() {
                let _ = write!(s, ",{d:.10e}");
            }
            for w in sample.omega.iter() {
                let _ = write!(s, ",{w:.10e}");
            }
            if with_v {
                for z in sample.v.iter() {
                    let _ = write!(s, ",{:.10e}", z.re);
                }
                for z in sample.v.iter() {
                    let _ = write!(s, ",{:.10e}", z.im);
                }
            }
            s.push('\n');
        }
        s
    }

    pub fn segment_log_csv(&self) -> String {
        let mut s = String::from("segment,t_start,t_end,exit,reinit_iterations,reinit_residual,relinearized,constraint_max\n");
        for r in &self.segments {
            let _ = writeln!(
                s,
                "{},{:.9},{:.9},{},{},{:.3e},{},{:.6e}",
                r.id,
                r.t_start,
                r.t_end,
                r.exit.as_str(),
                r.reinit_iterations,
                r.reinit_residual,
                r.relinearized,
                r.constraint_max
            );
        }
        s
    }
}

/// Incremental angle unwrapping with an instability test.
///
/// With two or more machines the system is declared unstable once the spread
/// of COI-relative angles exceeds `pi`; a lone machine is unstable once it has
/// drifted more than `pi` from its starting angle.
#[derive(Clone, Debug)]
pub struct AngleTracker {
    inertia: Vec<f64>,
    start: Option<DVector<f64>>,
    last: Option<DVector<f64>>,
}

impl AngleTracker {
    pub fn new(inertia: &[f64]) -> Self {
        AngleTracker {
            inertia: inertia.to_vec(),
            start: None,
            last: None,
        }
    }

    /// Feeds `[x; y]`, returns the unwrapped angles.
    pub fn push(&mut self, w: &DVector<f64>) -> DVector<f64> {
        let n = self.inertia.len();
        let mut d = DVector::from_fn(n, |j, _| w[n + j].atan2(w[j]));
        if let Some(prev) = &self.last {
            for j in 0..n {
                let k = ((prev[j] - d[j]) / std::f64::consts::TAU).round();
                d[j] += k * std::f64::consts::TAU;
            }
        }
        if self.start.is_none() {
            self.start = Some(d.clone());
        }
        self.last = Some(d.clone());
        d
    }

    /// Separation measure compared against `pi`.
    pub fn separation(&self) -> f64 {
        let Some(d) = &self.last else { return 0.0 };
        if d.len() == 1 {
            let s = self.start.as_ref().expect("set with last");
            return (d[0] - s[0]).abs();
        }
        let coi = to_coi_angles(d, &self.inertia).expect("inertias validated at construction");
        coi.max() - coi.min()
    }

    pub fn unstable(&self) -> bool {
        self.separation() > std::f64::consts::PI
    }
}

pub(crate) fn interpolate(ts: &[f64], ys: &[DVector<f64>], t: f64) -> Option<DVector<f64>> {
    if ts.is_empty() || t < ts[0] - 1e-12 || t > ts[ts.len() - 1] + 1e-12 {
        return None;
    }
    let k = ts.partition_point(|&x| x <= t);
    if k == 0 {
        return Some(ys[0].clone());
    }
    if k >= ts.len() {
        return Some(ys[ts.len() - 1].clone());
    }
    let (t0, t1) = (ts[k - 1], ts[k]);
    if t1 <= t0 {
        return Some(ys[k].clone());
    }
    let a = (t - t0) / (t1 - t0);
    Some(&ys[k - 1] * (1.0 - a) + &ys[k] * a)
}
