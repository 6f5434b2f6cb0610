//! Linearized swing equations in rectangular internal-node coordinates.
//!
//! With `v_j = x_j + j y_j = E_j e^{j delta_j}` the classical swing equation
//! becomes `w'' + diag(D/M) w' + L w + l = 0` for `w = [x; y]`, once the
//! internal-node reactive power products and the terminal voltages are replaced
//! by their linear maps. The system is solved in closed form from the
//! eigenstructure of the companion matrix `T = [[0, I], [-L, -diag(D/M)]]`.

use std::fmt::Write as _;

use log::debug;
use nalgebra::{DMatrix, DVector};
use num_complex::Complex64;

use crate::case_model::{AugmentedNetwork, GeneratorDynamic};
use crate::error::{Error, Result};
use crate::he_linearizer::PadeLinearization;
use crate::linalg::condition_number;

#[derive(Clone, Debug)]
pub struct SwingSystem {
    pub l_mat: DMatrix<f64>,
    pub l_vec: DVector<f64>,
    /// `D_j / M_j`.
    pub damping: DVector<f64>,
    pub t_mat: DMatrix<f64>,
    /// `b_jj + (M_j / E_j^2) delta_j'^2` frozen at region entry.
    pub b0: DVector<f64>,
    pub b: DVector<f64>,
    pub e: DVector<f64>,
    pub m: DVector<f64>,
    /// Rotor speeds used for `b0`.
    pub speed0: DVector<f64>,
    pub l_condition: f64,
    pub region: usize,
}

impl SwingSystem {
    pub fn n_i(&self) -> usize {
        self.e.len()
    }

    /// Equilibrium `(-L^-1 l; 0)`.
    pub fn equilibrium(&self) -> Result<DVector<f64>> {
        let n = 2 * self.n_i();
        let w = self
            .l_mat
            .clone()
            .lu()
            .solve(&(-&self.l_vec))
            .filter(|x| x.iter().all(|v| v.is_finite()))
            .ok_or(Error::SingularSystem {
                rank: crate::linalg::numerical_rank(&self.l_mat),
                dim: n,
            })?;
        let mut z = DVector::zeros(2 * n);
        z.rows_mut(0, n).copy_from(&w);
        Ok(z)
    }

    /// Acceleration `-(diag(D/M) w' + L w + l)`.
    pub fn acceleration(&self, w: &DVector<f64>, dw: &DVector<f64>) -> DVector<f64> {
        -self.ode_mismatch(w, dw, &DVector::zeros(w.len()))
    }

    /// `rho + diag(D/M) w' + L w + l`.
    pub fn ode_mismatch(&self, w: &DVector<f64>, dw: &DVector<f64>, rho: &DVector<f64>) -> DVector<f64> {
        let n = self.n_i();
        let mut damp = dw.clone();
        for j in 0..n {
            damp[j] *= self.damping[j];
            damp[n + j] *= self.damping[j];
        }
        rho + damp + &self.l_mat * w + &self.l_vec
    }
}

/// Rotor speeds `(x y' - y x') / |v|^2`.
pub fn rotor_speeds(w: &DVector<f64>, dw: &DVector<f64>) -> DVector<f64> {
    let n = w.len() / 2;
    DVector::from_fn(n, |j, _| {
        let (x, y) = (w[j], w[n + j]);
        (x * dw[n + j] - y * dw[j]) / (x * x + y * y)
    })
}

/// Velocity of a rigid rotation at speeds `omega`: `(-y omega, x omega)`.
pub fn rotation_velocity(w: &DVector<f64>, omega: &DVector<f64>) -> DVector<f64> {
    let n = w.len() / 2;
    DVector::from_fn(2 * n, |k, _| {
        if k < n {
            -w[n + k] * omega[k]
        } else {
            w[k - n] * omega[k - n]
        }
    })
}

/// Assembles `L`, `l` and `T` from the linear maps and the machine data.
pub fn build_swing_system(
    lin: &PadeLinearization,
    gens: &[GeneratorDynamic],
    net: &AugmentedNetwork,
    w: &DVector<f64>,
    dw: &DVector<f64>,
) -> Result<SwingSystem> {
    let ni = net.n_i;
    let nk = net.n_km;
    if gens.len() != ni || w.len() != 2 * ni || dw.len() != 2 * ni {
        return Err(Error::Dimension("state or machine list does not match the network".into()));
    }
    let speed = rotor_speeds(w, dw);
    let hx = lin.km.map.mat.rows(0, nk);
    let hy = lin.km.map.mat.rows(nk, nk);
    let ox = lin.km.map.off.rows(0, nk);
    let oy = lin.km.map.off.rows(nk, nk);
    let mut l_mat = DMatrix::zeros(2 * ni, 2 * ni);
    let mut l_vec = DVector::zeros(2 * ni);
    let mut b0 = DVector::zeros(ni);
    let mut b = DVector::zeros(ni);
    for (j, g) in gens.iter().enumerate() {
        let link = &net.gen_link[j];
        let k = link.k_index - ni;
        let (gl, bl) = (link.y_link.re, link.y_link.im);
        let e2 = g.e * g.e;
        let inv_m = 1.0 / g.m;
        b[j] = link.b_jj;
        b0[j] = link.b_jj + g.m / e2 * speed[j] * speed[j];
        let stiff = b0[j] * e2;
        let drive = g.p_mech - link.g_jj * e2;

        let mut row_x = -lin.xi.map.mat.row(j) - (hx.row(k) * bl + hy.row(k) * gl) * e2;
        row_x[j] += stiff;
        row_x[ni + j] += drive;
        l_mat.row_mut(j).copy_from(&(row_x * inv_m));
        l_vec[j] = -inv_m * (lin.xi.map.off[j] + e2 * (bl * ox[k] + gl * oy[k]));

        let mut row_y = -lin.zeta.map.mat.row(j) + (hx.row(k) * gl - hy.row(k) * bl) * e2;
        row_y[ni + j] += stiff;
        row_y[j] -= drive;
        l_mat.row_mut(ni + j).copy_from(&(row_y * inv_m));
        l_vec[ni + j] = inv_m * (-lin.zeta.map.off[j] + e2 * (gl * ox[k] - bl * oy[k]));
    }
    let damping = DVector::from_fn(ni, |j, _| gens[j].d / gens[j].m);
    let t_mat = companion(&l_mat, &damping);
    let l_condition = condition_number(&l_mat);
    debug!("swing matrix condition number {l_condition:.3e}");
    Ok(SwingSystem {
        l_mat,
        l_vec,
        damping,
        t_mat,
        b0,
        b,
        e: DVector::from_iterator(ni, gens.iter().map(|g| g.e)),
        m: DVector::from_iterator(ni, gens.iter().map(|g| g.m)),
        speed0: speed,
        l_condition,
        region: 0,
    })
}

/// `[[0, I], [-L, -diag(d)]]` with `d` repeated for the x and y halves.
pub fn companion(l_mat: &DMatrix<f64>, damping: &DVector<f64>) -> DMatrix<f64> {
    let n = l_mat.nrows();
    let ni = n / 2;
    let mut t = DMatrix::zeros(2 * n, 2 * n);
    for i in 0..n {
        t[(i, n + i)] = 1.0;
        t[(n + i, n + i)] = -damping[i % ni.max(1)];
    }
    t.view_mut((n, 0), (n, n)).copy_from(&(-l_mat));
    t
}

#[derive(Clone, Debug)]
pub enum Mode {
    Real {
        lambda: f64,
        vector: DVector<f64>,
    },
    /// `lambda = re + j im` with `im > 0` and eigenvector `p + j q`.
    Pair {
        re: f64,
        im: f64,
        p: DVector<f64>,
        q: DVector<f64>,
    },
}

impl Mode {
    pub fn width(&self) -> usize {
        match self {
            Mode::Real { .. } => 1,
            Mode::Pair { .. } => 2,
        }
    }

    pub fn eigenvalue(&self) -> Complex64 {
        match self {
            Mode::Real { lambda, .. } => Complex64::new(*lambda, 0.0),
            Mode::Pair { re, im, .. } => Complex64::new(*re, *im),
        }
    }

    /// Basis functions and their derivatives at elapsed time `tau`.
    fn columns(&self, tau: f64) -> Vec<(DVector<f64>, DVector<f64>)> {
        match self {
            Mode::Real { lambda, vector } => {
                let e = (lambda * tau).exp();
                vec![(vector * e, vector * (lambda * e))]
            }
            Mode::Pair { re, im, p, q } => {
                let e = (re * tau).exp();
                let (c, s) = ((im * tau).cos(), (im * tau).sin());
                // Re and Im of (p + jq) e^{(re + j im) tau}
                let u1 = (p * c - q * s) * e;
                let u2 = (p * s + q * c) * e;
                let d1 = &u1 * *re - &u2 * *im;
                let d2 = &u1 * *im + &u2 * *re;
                vec![(u1, d1), (u2, d2)]
            }
        }
    }
}

/// Eigenvalues and eigenvector modes of `T`, real modes ascending then pairs by `|Im|`.
pub fn eigensolve(sys: &SwingSystem) -> Result<Vec<Mode>> {
    eigen_modes(&sys.t_mat)
}

pub fn eigen_modes(t: &DMatrix<f64>) -> Result<Vec<Mode>> {
    let n = t.nrows();
    let scale = t.norm().max(1.0);
    let tol_cluster = 1e-7 * scale;
    let mut lambdas: Vec<Complex64> = t.clone().complex_eigenvalues().iter().copied().collect();
    lambdas.sort_by(|a, b| a.re.total_cmp(&b.re).then(a.im.total_cmp(&b.im)));

    // Clusters of numerically equal eigenvalues are handled together.
    let mut used = vec![false; lambdas.len()];
    let mut reals: Vec<Mode> = Vec::new();
    let mut pairs: Vec<Mode> = Vec::new();
    let tc = t.map(|x| Complex64::new(x, 0.0));
    for i in 0..lambdas.len() {
        if used[i] {
            continue;
        }
        let lam = lambdas[i];
        let cluster: Vec<usize> = (0..lambdas.len())
            .filter(|&k| !used[k] && (lambdas[k] - lam).norm() <= tol_cluster)
            .collect();
        let is_real = lam.im.abs() <= tol_cluster;
        if !is_real && lam.im < 0.0 {
            // handled with its conjugate partner
            continue;
        }
        let mut a = tc.clone();
        for d in 0..n {
            a[(d, d)] -= lam;
        }
        let svd = a.svd(false, true);
        let vt = svd.v_t.expect("requested V^T");
        let sv = &svd.singular_values;
        let null_tol = 1e-8 * scale;
        let null: Vec<usize> = (0..sv.len()).filter(|&k| sv[k] <= null_tol).collect();
        let mut idx: Vec<usize> = (0..sv.len()).collect();
        idx.sort_by(|&x, &y| sv[x].total_cmp(&sv[y]));
        if null.len() < cluster.len() && cluster.len() > 1 {
            return Err(Error::Defective { re: lam.re, im: lam.im });
        }
        let take = cluster.len().max(1);
        for &k in idx.iter().take(take) {
            let v = vt.row(k).adjoint().into_owned();
            if is_real {
                // rotate the vector so it is real up to round-off
                let pivot = v
                    .iter()
                    .copied()
                    .max_by(|a, b| a.norm().total_cmp(&b.norm()))
                    .unwrap_or(Complex64::new(1.0, 0.0));
                let phase = pivot.conj() / pivot.norm();
                let vr = v.map(|z| (z * phase).re);
                reals.push(Mode::Real {
                    lambda: lam.re,
                    vector: &vr / vr.norm(),
                });
            } else {
                pairs.push(Mode::Pair {
                    re: lam.re,
                    im: lam.im,
                    p: v.map(|z| z.re),
                    q: v.map(|z| z.im),
                });
            }
        }
        for &k in &cluster {
            used[k] = true;
        }
        if !is_real {
            // mark the conjugate partners
            for k in 0..lambdas.len() {
                if !used[k] && (lambdas[k] - lam.conj()).norm() <= tol_cluster {
                    used[k] = true;
                    if cluster.len() == 1 {
                        break;
                    }
                }
            }
        }
    }
    let mut modes = reals;
    pairs.sort_by(|a, b| a.eigenvalue().im.abs().total_cmp(&b.eigenvalue().im.abs()));
    modes.extend(pairs);
    let width: usize = modes.iter().map(|m| m.width()).sum();
    if width != n {
        let lam = lambdas.first().copied().unwrap_or_default();
        return Err(Error::Defective { re: lam.re, im: lam.im });
    }
    Ok(modes)
}

/// Closed-form solution `z(t) = sum beta_k phi_k(t - t0) + z_eq` for `z = [w; w']`.
#[derive(Clone, Debug)]
pub struct AnalyticSolution {
    pub modes: Vec<Mode>,
    pub beta: DVector<f64>,
    pub z_eq: DVector<f64>,
    pub t0: f64,
    pub fit_residual: f64,
}

impl AnalyticSolution {
    pub fn n_i(&self) -> usize {
        self.z_eq.len() / 4
    }

    fn basis(&self, tau: f64) -> (DMatrix<f64>, DMatrix<f64>) {
        basis_matrices(&self.modes, self.z_eq.len(), tau)
    }

    /// `(w, w')` at time `t`.
    pub fn evaluate(&self, t: f64) -> (DVector<f64>, DVector<f64>) {
        let (z, _) = self.state(t);
        let n = z.len() / 2;
        (z.rows(0, n).into_owned(), z.rows(n, n).into_owned())
    }

    /// `(z, z')` at time `t`.
    pub fn state(&self, t: f64) -> (DVector<f64>, DVector<f64>) {
        let (phi, dphi) = self.basis(t - self.t0);
        (&phi * &self.beta + &self.z_eq, &dphi * &self.beta)
    }

    /// Amplitude of each mode on each machine's `(x, y)` entries, one row per mode.
    pub fn mode_amplitudes(&self) -> Vec<(Complex64, DVector<f64>)> {
        let ni = self.n_i();
        let mut col = 0;
        let mut out = Vec::new();
        for mode in &self.modes {
            let amp = match mode {
                Mode::Real { vector, .. } => {
                    let bk = self.beta[col];
                    DVector::from_fn(ni, |j, _| bk * vector[j].hypot(vector[ni + j]).copysign(vector[j]))
                }
                Mode::Pair { p, q, .. } => {
                    let (b1, b2) = (self.beta[col], self.beta[col + 1]);
                    let c = Complex64::new(b1, -b2);
                    DVector::from_fn(ni, |j, _| {
                        let vx = Complex64::new(p[j], q[j]) * c;
                        let vy = Complex64::new(p[ni + j], q[ni + j]) * c;
                        (vx.norm_sqr() + vy.norm_sqr()).sqrt()
                    })
                }
            };
            out.push((mode.eigenvalue(), amp));
            col += mode.width();
        }
        out
    }
}

fn basis_matrices(modes: &[Mode], dim: usize, tau: f64) -> (DMatrix<f64>, DMatrix<f64>) {
    let mut phi = DMatrix::zeros(dim, dim);
    let mut dphi = DMatrix::zeros(dim, dim);
    let mut c = 0;
    for m in modes {
        for (u, du) in m.columns(tau) {
            phi.set_column(c, &u);
            dphi.set_column(c, &du);
            c += 1;
        }
    }
    (phi, dphi)
}

/// Least-squares mode coefficients reproducing `(w0, w0')` at `t0`.
pub fn fit_beta(
    modes: Vec<Mode>,
    z_eq: DVector<f64>,
    w0: &DVector<f64>,
    dw0: &DVector<f64>,
    t0: f64,
) -> Result<AnalyticSolution> {
    let dim = z_eq.len();
    let n = dim / 2;
    if w0.len() != n || dw0.len() != n {
        return Err(Error::Dimension("initial state does not match the system".into()));
    }
    let (phi, _) = basis_matrices(&modes, dim, 0.0);
    let mut rhs = DVector::zeros(dim);
    rhs.rows_mut(0, n).copy_from(&(w0 - z_eq.rows(0, n)));
    rhs.rows_mut(n, n).copy_from(dw0);
    let svd = phi.clone().svd(true, true);
    let smax = svd.singular_values.max();
    let rank = svd
        .singular_values
        .iter()
        .filter(|&&s| s > dim as f64 * f64::EPSILON * smax)
        .count();
    if rank < dim {
        return Err(Error::FitDegeneracy { rank, dim });
    }
    let beta = svd.solve(&rhs, 0.0).map_err(|_| Error::FitDegeneracy { rank, dim })?;
    let fit_residual = (&phi * &beta - &rhs).norm();
    Ok(AnalyticSolution {
        modes,
        beta,
        z_eq,
        t0,
        fit_residual,
    })
}

/// Eigen-solution of `sys` started from `(w0, w0')` at `t0`.
pub fn solve(sys: &SwingSystem, w0: &DVector<f64>, dw0: &DVector<f64>, t0: f64) -> Result<AnalyticSolution> {
    let modes = eigensolve(sys)?;
    let z_eq = sys.equilibrium()?;
    fit_beta(modes, z_eq, w0, dw0, t0)
}

/// Term-relative residual of the ODE at `t`.
pub fn ode_residual(sys: &SwingSystem, sol: &AnalyticSolution, t: f64) -> f64 {
    let (z, dz) = sol.state(t);
    let n = z.len() / 2;
    let w = z.rows(0, n).into_owned();
    let dw = z.rows(n, n).into_owned();
    let rho = dz.rows(n, n).into_owned();
    let ni = n / 2;
    let damp = DVector::from_fn(n, |k, _| dw[k] * sys.damping[k % ni]);
    let lw = &sys.l_mat * &w;
    let r = &rho + &damp + &lw + &sys.l_vec;
    let scale = rho.norm() + damp.norm() + lw.norm() + sys.l_vec.norm();
    r.norm() / scale.max(f64::MIN_POSITIVE)
}

/// Angles relative to the inertia-weighted mean.
pub fn to_coi_angles(delta: &DVector<f64>, m: &[f64]) -> Result<DVector<f64>> {
    if delta.len() != m.len() {
        return Err(Error::Dimension("angles and inertias differ in length".into()));
    }
    let total: f64 = m.iter().sum();
    if !(total > 0.0) {
        return Err(Error::Domain("total inertia must be positive".into()));
    }
    let coi = delta.iter().zip(m).map(|(d, mi)| d * mi).sum::<f64>() / total;
    Ok(delta.map(|d| d - coi))
}

/// Rotor angles `arg(x + jy)`.
pub fn rotor_angles(w: &DVector<f64>) -> DVector<f64> {
    let n = w.len() / 2;
    DVector::from_fn(n, |j, _| Complex64::new(w[j], w[n + j]).ln().im)
}

/// Text table of eigenvalues and per-machine mode amplitudes.
pub fn mode_report(sol: &AnalyticSolution, gen_buses: &[usize]) -> String {
    let mut s = String::from("mode,re,im");
    for g in gen_buses {
        let _ = write!(s, ",amp_{g}");
    }
    s.push('\n');
    for (k, (lam, amp)) in sol.mode_amplitudes().iter().enumerate() {
        let _ = write!(s, "{k},{:.6},{:.6}", lam.re, lam.im);
        for a in amp.iter() {
            let _ = write!(s, ",{a:.6e}");
        }
        s.push('\n');
    }
    s
}
