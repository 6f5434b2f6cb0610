//! Quasi power flow: internal-node voltages fixed, every KM bus a PQ bus.
//!
//! Newton iteration in rectangular coordinates on the KM unknowns. The
//! balance at KM bus `i` is `v_i conj((Y v)_i - i0_i) = S_i`, where `S_i` is the
//! injected power (the negative of the extended P load, plus a constant-current
//! term when the exact ZIP model is used).

use nalgebra::{DMatrix, DVector};
use num_complex::Complex64;

use crate::case_model::AugmentedNetwork;
use crate::error::{Error, Result};
use crate::zip_loads::ExtendedLoadSet;

pub const QPF_TOL: f64 = 1e-8;
pub const QPF_MAX_ITER: usize = 30;

#[derive(Clone, Debug)]
pub struct QuadraticFormSystem {
    /// Network admittance with Z loads on the KM diagonal.
    pub ybus: DMatrix<Complex64>,
    pub n_i: usize,
    pub n_km: usize,
    pub v_ibus: DVector<Complex64>,
    /// Constant injected power per KM bus.
    pub s_const: DVector<Complex64>,
    /// Injected power per unit |v| per KM bus.
    pub s_current: DVector<Complex64>,
    pub i0: DVector<Complex64>,
    pub tol: f64,
    pub max_iter: usize,
}

#[derive(Clone, Debug)]
pub struct QpfSolution {
    pub v: DVector<Complex64>,
    pub p_inj: DVector<f64>,
    pub q_inj: DVector<f64>,
    pub mismatch: f64,
    pub iterations: usize,
}

impl QpfSolution {
    pub fn v_km(&self, n_i: usize) -> DVector<Complex64> {
        self.v.rows(n_i, self.v.len() - n_i).into_owned()
    }
}

/// `Ybus` with the Z-load admittances added on the KM diagonal.
pub fn loaded_ybus(net: &AugmentedNetwork, loads: &ExtendedLoadSet) -> DMatrix<Complex64> {
    let mut y = net.ybus.clone();
    for j in 0..net.n_km {
        y[(net.n_i + j, net.n_i + j)] += loads.ybus_add[j];
    }
    y
}

pub fn assemble_qpf(net: &AugmentedNetwork, loads: &ExtendedLoadSet, v_ibus: &DVector<Complex64>) -> Result<QuadraticFormSystem> {
    if v_ibus.len() != net.n_i {
        return Err(Error::Dimension(format!(
            "{} internal voltages for {} machines",
            v_ibus.len(),
            net.n_i
        )));
    }
    if loads.len() != net.n_km {
        return Err(Error::Dimension(format!(
            "load set covers {} buses, network has {} KM buses",
            loads.len(),
            net.n_km
        )));
    }
    Ok(QuadraticFormSystem {
        ybus: loaded_ybus(net, loads),
        n_i: net.n_i,
        n_km: net.n_km,
        v_ibus: v_ibus.clone(),
        s_const: -&loads.p_loads,
        s_current: -&loads.s_current,
        i0: loads.i0.clone(),
        tol: QPF_TOL,
        max_iter: QPF_MAX_ITER,
    })
}

impl QuadraticFormSystem {
    pub fn n(&self) -> usize {
        self.n_i + self.n_km
    }

    /// Symmetric real matrices with `u^T M u` equal to the real and reactive
    /// injection at bus `i`, for `u = [Re v; Im v]`.
    pub fn quad_forms(&self, i: usize) -> (DMatrix<f64>, DMatrix<f64>) {
        let n = self.n();
        let mut ap = DMatrix::zeros(2 * n, 2 * n);
        let mut aq = DMatrix::zeros(2 * n, 2 * n);
        for k in 0..n {
            let g = self.ybus[(i, k)].re;
            let b = self.ybus[(i, k)].im;
            // p = x_i (G x - B y) + y_i (B x + G y)
            ap[(i, k)] += g;
            ap[(i, n + k)] -= b;
            ap[(n + i, k)] += b;
            ap[(n + i, n + k)] += g;
            // q = y_i (G x - B y) - x_i (B x + G y)
            aq[(n + i, k)] += g;
            aq[(n + i, n + k)] -= b;
            aq[(i, k)] -= b;
            aq[(i, n + k)] -= g;
        }
        let sym = |a: DMatrix<f64>| (&a + a.transpose()) * 0.5;
        (sym(ap), sym(aq))
    }

    /// Right-hand sides `(p, q)` of the quadratic rows at KM bus `j` (constant-power part).
    pub fn quad_rhs(&self, j: usize) -> (f64, f64) {
        (self.s_const[j].re, self.s_const[j].im)
    }

    pub fn conj(&self) -> Self {
        QuadraticFormSystem {
            ybus: self.ybus.map(|z| z.conj()),
            v_ibus: self.v_ibus.map(|z| z.conj()),
            s_const: self.s_const.map(|z| z.conj()),
            s_current: self.s_current.map(|z| z.conj()),
            i0: self.i0.map(|z| z.conj()),
            ..self.clone()
        }
    }

    fn currents(&self, v: &DVector<Complex64>) -> DVector<Complex64> {
        let mut cur = &self.ybus * v;
        for j in 0..self.n_km {
            cur[self.n_i + j] -= self.i0[j];
        }
        cur
    }

    /// Complex power mismatch at the KM buses.
    pub fn residual(&self, v: &DVector<Complex64>) -> DVector<Complex64> {
        let cur = self.currents(v);
        DVector::from_fn(self.n_km, |j, _| {
            let g = self.n_i + j;
            v[g] * cur[g].conj() - self.s_const[j] - self.s_current[j] * v[g].norm()
        })
    }

    /// Injections `v conj(Y v - i0)` at every bus.
    pub fn injections(&self, v: &DVector<Complex64>) -> DVector<Complex64> {
        let cur = self.currents(v);
        v.zip_map(&cur, |a, b| a * b.conj())
    }

    /// Derivatives of the KM mismatches with respect to `[x_I; y_I]`.
    pub fn ibus_jacobian(&self, v: &DVector<Complex64>) -> DMatrix<f64> {
        let nk = self.n_km;
        let ni = self.n_i;
        let j_unit = Complex64::new(0.0, 1.0);
        let mut jac = DMatrix::zeros(2 * nk, 2 * ni);
        for i in 0..nk {
            let g = ni + i;
            for k in 0..ni {
                let y = self.ybus[(g, k)];
                let dx = v[g] * y.conj();
                let dy = -j_unit * v[g] * y.conj();
                jac[(i, k)] = dx.re;
                jac[(i, ni + k)] = dy.re;
                jac[(nk + i, k)] = dx.im;
                jac[(nk + i, ni + k)] = dy.im;
            }
        }
        jac
    }

    /// Derivatives of the KM mismatches with respect to `[x_KM; y_KM]`.
    pub fn jacobian(&self, v: &DVector<Complex64>) -> DMatrix<f64> {
        let nk = self.n_km;
        let ni = self.n_i;
        let cur = self.currents(v);
        let mut jac = DMatrix::zeros(2 * nk, 2 * nk);
        let j_unit = Complex64::new(0.0, 1.0);
        for i in 0..nk {
            let g = ni + i;
            for k in 0..nk {
                let y = self.ybus[(g, ni + k)];
                let mut dx = v[g] * y.conj();
                let mut dy = -j_unit * v[g] * y.conj();
                if i == k {
                    dx += cur[g].conj();
                    dy += j_unit * cur[g].conj();
                    let vm = v[g].norm();
                    if vm > 0.0 && self.s_current[i].norm() > 0.0 {
                        dx -= self.s_current[i] * (v[g].re / vm);
                        dy -= self.s_current[i] * (v[g].im / vm);
                    }
                }
                jac[(i, k)] = dx.re;
                jac[(i, nk + k)] = dy.re;
                jac[(nk + i, k)] = dx.im;
                jac[(nk + i, nk + k)] = dy.im;
            }
        }
        jac
    }
}

fn inf_norm(r: &DVector<Complex64>) -> f64 {
    r.iter().fold(0.0_f64, |m, z| m.max(z.re.abs()).max(z.im.abs()))
}

/// Newton solve from `v_guess`; internal-node entries are replaced by the fixed inputs.
pub fn solve_qpf(sys: &QuadraticFormSystem, v_guess: &DVector<Complex64>) -> Result<QpfSolution> {
    let n = sys.n();
    if v_guess.len() != n {
        return Err(Error::Dimension(format!("guess has {} entries for {n} buses", v_guess.len())));
    }
    let mut v = v_guess.clone();
    for i in 0..sys.n_i {
        v[i] = sys.v_ibus[i];
    }
    let nk = sys.n_km;
    let mut iterations = 0;
    loop {
        let r = sys.residual(&v);
        let mismatch = inf_norm(&r);
        if !mismatch.is_finite() {
            return Err(Error::QpfDivergence {
                iterations,
                mismatch,
                last: Box::new(v),
            });
        }
        if mismatch <= sys.tol {
            let s = sys.injections(&v);
            return Ok(QpfSolution {
                p_inj: s.map(|z| z.re),
                q_inj: s.map(|z| z.im),
                v,
                mismatch,
                iterations,
            });
        }
        if iterations >= sys.max_iter {
            return Err(Error::QpfDivergence {
                iterations,
                mismatch,
                last: Box::new(v),
            });
        }
        let jac = sys.jacobian(&v);
        let rhs = DVector::from_fn(2 * nk, |i, _| if i < nk { -r[i].re } else { -r[i - nk].im });
        let step = jac
            .lu()
            .solve(&rhs)
            .filter(|s| s.iter().all(|x| x.is_finite()))
            .ok_or_else(|| Error::SingularJacobian("quasi power flow".into()))?;
        for k in 0..nk {
            v[sys.n_i + k] += Complex64::new(step[k], step[nk + k]);
        }
        iterations += 1;
    }
}

/// Flat start at `e_ref` on the KM buses.
pub fn flat_guess(sys: &QuadraticFormSystem, e_ref: f64) -> DVector<Complex64> {
    DVector::from_fn(sys.n(), |i, _| {
        if i < sys.n_i {
            sys.v_ibus[i]
        } else {
            Complex64::new(e_ref, 0.0)
        }
    })
}

/// Assemble and solve in one call; flat start when no guess is given.
pub fn qpf(
    net: &AugmentedNetwork,
    loads: &ExtendedLoadSet,
    v_ibus: &DVector<Complex64>,
    guess: Option<&DVector<Complex64>>,
) -> Result<QpfSolution> {
    let sys = assemble_qpf(net, loads, v_ibus)?;
    match guess {
        Some(g) => solve_qpf(&sys, g),
        None => {
            let e = v_ibus.iter().map(|z| z.norm()).sum::<f64>() / v_ibus.len().max(1) as f64;
            let e = if e > 0.0 { e } else { 1.0 };
            solve_qpf(&sys, &flat_guess(&sys, e))
        }
    }
}
