//! Holomorphic-embedding linearization of the network in the internal-node voltages.
//!
//! Internal-node voltages are embedded as `v_I(s) = E_ref + (v_I - E_ref) s`, the
//! KM voltages and reciprocal conjugates become power series in `s`, and every
//! coefficient is kept as an affine map of `w = [x_I; y_I]`. Products of two
//! such maps are linearized about the expansion point `w0`. Each output group
//! (KM voltages, P, Q, `q x`, `q y`) is summed at `s = 1` with a Padé
//! approximant whose denominator is the smallest right singular vector of the
//! stacked coefficient equations.
//!
//! Ward reduction and first-order Taylor sensitivities are provided as baselines.

use log::{debug, warn};
use nalgebra::{DMatrix, DVector};
use num_complex::Complex64;

use crate::case_model::AugmentedNetwork;
use crate::error::{Error, Result};
use crate::qpf::{assemble_qpf, loaded_ybus, QpfSolution};
use crate::zip_loads::ExtendedLoadSet;

pub const DEFAULT_ORDER: usize = 12;
const OVERFLOW: f64 = 1e100;

/// Complex rows that depend affinely on the real vector `w`.
#[derive(Clone, Debug, PartialEq)]
pub struct AffineC {
    pub coef: DMatrix<Complex64>,
    pub off: DVector<Complex64>,
}

impl AffineC {
    pub fn zeros(rows: usize, nw: usize) -> Self {
        AffineC {
            coef: DMatrix::zeros(rows, nw),
            off: DVector::zeros(rows),
        }
    }

    pub fn constant(off: DVector<Complex64>, nw: usize) -> Self {
        AffineC {
            coef: DMatrix::zeros(off.len(), nw),
            off,
        }
    }

    pub fn rows(&self) -> usize {
        self.off.len()
    }

    pub fn value(&self, w: &DVector<f64>) -> DVector<Complex64> {
        &self.coef * w.map(|x| Complex64::new(x, 0.0)) + &self.off
    }

    pub fn conj(&self) -> Self {
        AffineC {
            coef: self.coef.map(|z| z.conj()),
            off: self.off.map(|z| z.conj()),
        }
    }

    pub fn left_mul(&self, m: &DMatrix<Complex64>) -> Self {
        AffineC {
            coef: m * &self.coef,
            off: m * &self.off,
        }
    }

    pub fn scale_rows(&self, d: &DVector<Complex64>) -> Self {
        let mut out = self.clone();
        for i in 0..d.len() {
            for k in 0..out.coef.ncols() {
                out.coef[(i, k)] *= d[i];
            }
            out.off[i] *= d[i];
        }
        out
    }

    pub fn add_assign(&mut self, other: &AffineC) {
        self.coef += &other.coef;
        self.off += &other.off;
    }

    pub fn scaled(&self, c: Complex64) -> Self {
        AffineC {
            coef: &self.coef * c,
            off: &self.off * c,
        }
    }

    /// Elementwise product linearized about `w0`.
    pub fn tangent_mul(&self, other: &AffineC, w0: &DVector<f64>) -> Self {
        let fa = self.value(w0);
        let fb = other.value(w0);
        let mut coef = other.coef.clone();
        for i in 0..fa.len() {
            for k in 0..coef.ncols() {
                coef[(i, k)] = fa[i] * other.coef[(i, k)] + fb[i] * self.coef[(i, k)];
            }
        }
        let lin = &coef * w0.map(|x| Complex64::new(x, 0.0));
        let off = fa.zip_map(&fb, |a, b| a * b) - lin;
        AffineC { coef, off }
    }

    pub fn re(&self) -> RealAffine {
        RealAffine {
            mat: self.coef.map(|z| z.re),
            off: self.off.map(|z| z.re),
        }
    }

    pub fn im(&self) -> RealAffine {
        RealAffine {
            mat: self.coef.map(|z| z.im),
            off: self.off.map(|z| z.im),
        }
    }

    fn magnitude(&self) -> f64 {
        let a = self.coef.iter().fold(0.0_f64, |m, z| m.max(z.norm()));
        self.off.iter().fold(a, |m, z| m.max(z.norm()))
    }
}

/// Real rows affine in `w`: `mat * w + off`.
#[derive(Clone, Debug, PartialEq)]
pub struct RealAffine {
    pub mat: DMatrix<f64>,
    pub off: DVector<f64>,
}

impl RealAffine {
    pub fn zeros(rows: usize, nw: usize) -> Self {
        RealAffine {
            mat: DMatrix::zeros(rows, nw),
            off: DVector::zeros(rows),
        }
    }

    pub fn value(&self, w: &DVector<f64>) -> DVector<f64> {
        &self.mat * w + &self.off
    }

    pub fn tangent_mul(&self, other: &RealAffine, w0: &DVector<f64>) -> Self {
        let fa = self.value(w0);
        let fb = other.value(w0);
        let mut mat = other.mat.clone();
        for i in 0..fa.len() {
            for k in 0..mat.ncols() {
                mat[(i, k)] = fa[i] * other.mat[(i, k)] + fb[i] * self.mat[(i, k)];
            }
        }
        let off = fa.component_mul(&fb) - &mat * w0;
        RealAffine { mat, off }
    }

    pub fn add(&self, other: &RealAffine) -> Self {
        RealAffine {
            mat: &self.mat + &other.mat,
            off: &self.off + &other.off,
        }
    }

    pub fn scaled(&self, c: f64) -> Self {
        RealAffine {
            mat: &self.mat * c,
            off: &self.off * c,
        }
    }

    pub fn stack(parts: &[&RealAffine]) -> Self {
        let rows: usize = parts.iter().map(|p| p.off.len()).sum();
        let nw = parts.first().map(|p| p.mat.ncols()).unwrap_or(0);
        let mut mat = DMatrix::zeros(rows, nw);
        let mut off = DVector::zeros(rows);
        let mut r = 0;
        for p in parts {
            let n = p.off.len();
            mat.view_mut((r, 0), (n, nw)).copy_from(&p.mat);
            off.rows_mut(r, n).copy_from(&p.off);
            r += n;
        }
        RealAffine { mat, off }
    }

    /// `[mat | off]` flattened column-major.
    fn entries(&self) -> impl Iterator<Item = f64> + '_ {
        self.mat.iter().copied().chain(self.off.iter().copied())
    }
}

/// Power-series coefficients as affine maps of `w`, orders `0..=order`.
#[derive(Clone, Debug)]
pub struct HeSeries {
    pub order: usize,
    pub e_ref: f64,
    pub w0: DVector<f64>,
    pub n_i: usize,
    pub n_km: usize,
    pub v_i: Vec<AffineC>,
    pub v_km: Vec<AffineC>,
    /// Reciprocal conjugate KM voltages `1 / conj(v)`.
    pub w_conj: Vec<AffineC>,
    /// `p - jq` at the internal nodes.
    pub power: Vec<AffineC>,
}

impl HeSeries {
    pub fn km_real(&self) -> Vec<RealAffine> {
        self.v_km.iter().map(|a| RealAffine::stack(&[&a.re(), &a.im()])).collect()
    }

    pub fn p_real(&self) -> Vec<RealAffine> {
        self.power.iter().map(|a| a.re()).collect()
    }

    pub fn q_real(&self) -> Vec<RealAffine> {
        self.power.iter().map(|a| a.im().scaled(-1.0)).collect()
    }

    /// Series of `q x` and `q y` at the internal nodes.
    pub fn xi_zeta_real(&self) -> (Vec<RealAffine>, Vec<RealAffine>) {
        let ni = self.n_i;
        let nw = 2 * ni;
        let q = self.q_real();
        let mut x1 = RealAffine::zeros(ni, nw);
        let mut y1 = RealAffine::zeros(ni, nw);
        for i in 0..ni {
            x1.mat[(i, i)] = 1.0;
            x1.off[i] = -self.e_ref;
            y1.mat[(i, ni + i)] = 1.0;
        }
        let mut xi = Vec::with_capacity(q.len());
        let mut zeta = Vec::with_capacity(q.len());
        for n in 0..q.len() {
            let mut a = q[n].scaled(self.e_ref);
            let mut b = RealAffine::zeros(ni, nw);
            if n >= 1 {
                a = a.add(&x1.tangent_mul(&q[n - 1], &self.w0));
                b = y1.tangent_mul(&q[n - 1], &self.w0);
            }
            xi.push(a);
            zeta.push(b);
        }
        (xi, zeta)
    }
}

fn km_blocks(net: &AugmentedNetwork) -> (DMatrix<Complex64>, DMatrix<Complex64>) {
    let (ni, nk) = (net.n_i, net.n_km);
    (
        net.ytr.view((ni, ni), (nk, nk)).into_owned(),
        net.ytr.view((ni, 0), (nk, ni)).into_owned(),
    )
}

fn check_magnitude(a: &AffineC, n: usize) -> Result<()> {
    let m = a.magnitude();
    if !m.is_finite() || m > OVERFLOW {
        return Err(Error::OrderTruncation {
            last_stable: n.saturating_sub(1),
        });
    }
    Ok(())
}

/// Mean internal voltage magnitude, the germ value of the embedding.
pub fn reference_magnitude(v_i: &DVector<Complex64>) -> f64 {
    v_i.iter().map(|z| z.norm()).sum::<f64>() / v_i.len().max(1) as f64
}

/// Series coefficients to order `n_max` about the internal voltages `v_i`.
pub fn he_recursion(net: &AugmentedNetwork, loads: &ExtendedLoadSet, v_i: &DVector<Complex64>, n_max: usize) -> Result<HeSeries> {
    let (ni, nk) = (net.n_i, net.n_km);
    if ni == 0 {
        return Err(Error::Structural("no internal generator nodes".into()));
    }
    if n_max < 2 {
        return Err(Error::Invalid("series order must be at least 2".into()));
    }
    if v_i.len() != ni || loads.len() != nk {
        return Err(Error::Dimension("internal voltages or loads do not match the network".into()));
    }
    if loads.has_current_loads() {
        return Err(Error::Invalid("current loads must be split before linearization".into()));
    }
    let nw = 2 * ni;
    let e_ref = reference_magnitude(v_i);
    let w0 = DVector::from_fn(nw, |k, _| if k < ni { v_i[k].re } else { v_i[k - ni].im });

    let (y_kk, y_ki) = km_blocks(net);
    let lu = y_kk.clone().lu();
    let y_kk_inv = lu
        .try_inverse()
        .filter(|m| m.iter().all(|z| z.re.is_finite() && z.im.is_finite()))
        .ok_or_else(|| Error::Structural("KM transfer admittance block is singular".into()))?;
    let ysh_km = DVector::from_fn(nk, |j, _| net.ysh[ni + j] + loads.ybus_add[j]);
    let s_conj = loads.p_loads.map(|z| -z.conj());
    let e = Complex64::new(e_ref, 0.0);
    let inv_e = Complex64::new(1.0 / e_ref, 0.0);

    let mut v_i1 = AffineC::zeros(ni, nw);
    for i in 0..ni {
        v_i1.coef[(i, i)] = Complex64::new(1.0, 0.0);
        v_i1.coef[(i, ni + i)] = Complex64::new(0.0, 1.0);
        v_i1.off[i] = -e;
    }
    let v_i_series = vec![AffineC::constant(DVector::from_element(ni, e), nw), v_i1.clone()];

    let mut v_km = vec![AffineC::constant(DVector::from_element(nk, e), nw)];
    let mut w_conj = vec![AffineC::constant(DVector::from_element(nk, inv_e), nw)];

    for n in 0..n_max {
        if n >= 1 {
            let mut acc = v_km[n].conj().scaled(inv_e);
            for k in 1..n {
                acc.add_assign(&w_conj[k].tangent_mul(&v_km[n - k].conj(), &w0));
            }
            let wn = acc.scaled(-inv_e);
            check_magnitude(&wn, n)?;
            w_conj.push(wn);
        }
        let mut rhs = w_conj[n].scale_rows(&s_conj);
        rhs.add_assign(&v_km[n].scale_rows(&(-&ysh_km)));
        if n == 0 {
            rhs.add_assign(&v_i1.left_mul(&(-&y_ki)));
            rhs.off += &loads.i0;
        }
        let next = rhs.left_mul(&y_kk_inv);
        check_magnitude(&next, n + 1)?;
        v_km.push(next);
    }

    // Current and power at the internal nodes.
    let y_ii = net.ytr.view((0, 0), (ni, ni)).into_owned();
    let y_ik = net.ytr.view((0, ni), (ni, nk)).into_owned();
    let ysh_i = net.ysh.rows(0, ni).into_owned();
    let current = |n: usize| -> AffineC {
        let mut c = v_km[n].left_mul(&y_ik);
        if n < v_i_series.len() {
            c.add_assign(&v_i_series[n].left_mul(&y_ii));
        }
        if n >= 1 && n - 1 < v_i_series.len() {
            c.add_assign(&v_i_series[n - 1].scale_rows(&ysh_i));
        }
        c
    };
    let v_i1_conj = v_i1.conj();
    let mut power = Vec::with_capacity(n_max + 1);
    for n in 0..=n_max {
        let mut p = current(n).scaled(e);
        if n >= 1 {
            p.add_assign(&v_i1_conj.tangent_mul(&current(n - 1), &w0));
        }
        power.push(p);
    }

    Ok(HeSeries {
        order: n_max,
        e_ref,
        w0,
        n_i: ni,
        n_km: nk,
        v_i: v_i_series,
        v_km,
        w_conj,
        power,
    })
}

/// Padé summation of one coefficient group.
#[derive(Clone, Debug)]
pub struct PadeFit {
    pub l: usize,
    pub m: usize,
    /// Denominator coefficients `b[0..=m]`.
    pub b: DVector<f64>,
    /// Numerator coefficients `C[0..=l]`.
    pub numer: Vec<RealAffine>,
    pub sigma_min: f64,
    pub sigma_next: f64,
    /// Spectral norm of the denominator system.
    pub wb_norm: f64,
    /// `||W_b b||`.
    pub residual: f64,
    pub degenerate: bool,
    /// Series terms beyond `l` vanish; plain summation used.
    pub terminating: bool,
}

impl PadeFit {
    pub fn denom_sum(&self) -> f64 {
        self.b.sum()
    }

    pub fn value_at_one(&self) -> RealAffine {
        let mut acc = RealAffine::zeros(self.numer[0].off.len(), self.numer[0].mat.ncols());
        for c in &self.numer {
            acc = acc.add(c);
        }
        acc.scaled(1.0 / self.denom_sum())
    }

    /// Rational approximant at a general `s`.
    pub fn value_at(&self, s: f64) -> RealAffine {
        let mut acc = RealAffine::zeros(self.numer[0].off.len(), self.numer[0].mat.ncols());
        let mut p = 1.0;
        for c in &self.numer {
            acc = acc.add(&c.scaled(p));
            p *= s;
        }
        let mut den = 0.0;
        let mut p = 1.0;
        for &bk in self.b.iter() {
            den += bk * p;
            p *= s;
        }
        acc.scaled(1.0 / den)
    }
}

/// Denominator from the null space of the stacked order `l+1..=l+m` equations.
pub fn pade_fit(series: &[RealAffine], l: usize, m: usize) -> Result<PadeFit> {
    if series.len() < l + m + 1 {
        return Err(Error::Invalid(format!(
            "Padé [{l}/{m}] needs {} series terms, got {}",
            l + m + 1,
            series.len()
        )));
    }
    let width = series[0].off.len() * (series[0].mat.ncols() + 1);
    let mut wb = DMatrix::zeros(m * width, m + 1);
    for k in 1..=m {
        for j in 0..=m {
            if l + k < j {
                continue;
            }
            for (r, x) in series[l + k - j].entries().enumerate() {
                wb[((k - 1) * width + r, j)] = x;
            }
        }
    }
    let scale = series.iter().flat_map(|s| s.entries()).fold(0.0_f64, |a, x| a.max(x.abs()));

    let (b, sigma_min, sigma_next, wb_norm, terminating) = if m == 0 || wb.norm() <= 1e-13 * scale.max(f64::MIN_POSITIVE) {
        let mut b = DVector::zeros(m + 1);
        b[0] = 1.0;
        (b, 0.0, 0.0, wb.norm(), true)
    } else {
        // pad to a square-or-tall system so V is complete
        let mut sys = wb.clone();
        if sys.nrows() < m + 1 {
            sys = sys.resize_vertically(m + 1, 0.0);
        }
        let svd = sys.svd(false, true);
        let vt = svd.v_t.expect("requested V^T");
        let sv = &svd.singular_values;
        let mut order: Vec<usize> = (0..sv.len()).collect();
        order.sort_by(|&a, &b| sv[a].total_cmp(&sv[b]));
        let smax = sv.max();
        let kmin = order[0];
        let next = order.get(1).map(|&i| sv[i]).unwrap_or(f64::INFINITY);
        // Within an ambiguous null space prefer the vector closest to e0,
        // which keeps polynomial series polynomial.
        let near: Vec<usize> = order.iter().copied().filter(|&i| sv[i] - sv[kmin] <= 1e-10 * smax).collect();
        let mut b = DVector::zeros(m + 1);
        if near.len() > 1 {
            for &i in &near {
                let v = vt.row(i).transpose();
                b += &v * v[0];
            }
        }
        if b.norm() < 1e-8 {
            b = vt.row(kmin).transpose().into_owned();
        }
        if b[0].abs() > 1e-12 {
            b /= b[0];
        } else {
            b /= b.norm();
        }
        (b, sv[kmin], next, sv.max(), false)
    };

    let residual = (&wb * &b).norm();
    let degenerate =
        !terminating && sigma_next.is_finite() && (sigma_next - sigma_min) < 1e-10 * sigma_next.max(f64::MIN_POSITIVE);
    if degenerate {
        warn!("Padé denominator null space is ambiguous (sigma {sigma_min:.3e}, next {sigma_next:.3e})");
    }
    if b.sum().abs() <= 1e-12 * b.norm() {
        return Err(Error::PoleAtEvaluation { block: String::new() });
    }
    let numer = (0..=l)
        .map(|k| {
            let mut acc = RealAffine::zeros(series[0].off.len(), series[0].mat.ncols());
            for j in 0..=k.min(m) {
                acc = acc.add(&series[k - j].scaled(b[j]));
            }
            acc
        })
        .collect();
    Ok(PadeFit {
        l,
        m,
        b,
        numer,
        sigma_min,
        sigma_next,
        wb_norm,
        residual,
        degenerate,
        terminating,
    })
}

/// One summed output group.
#[derive(Clone, Debug)]
pub struct LinearBlock {
    pub name: &'static str,
    pub map: RealAffine,
    pub fit: PadeFit,
}

/// The linear map from internal-node voltages to every algebraic quantity.
///
/// Blocks are stored in the caller's (global) frame even when the series was
/// built in a rotated frame.
#[derive(Clone, Debug)]
pub struct PadeLinearization {
    pub n_i: usize,
    pub n_km: usize,
    pub e_ref: f64,
    pub l: usize,
    pub m: usize,
    /// Expansion point in the global frame.
    pub w0: DVector<f64>,
    /// Frame rotation used while building the series.
    pub rotation: f64,
    /// `[Re v_KM; Im v_KM]`.
    pub km: LinearBlock,
    pub p: LinearBlock,
    pub q: LinearBlock,
    /// `q x`.
    pub xi: LinearBlock,
    /// `q y`.
    pub zeta: LinearBlock,
}

impl PadeLinearization {
    /// `(H, h)` stacking KM, P, Q, xi, zeta.
    pub fn stacked(&self) -> RealAffine {
        RealAffine::stack(&[&self.km.map, &self.p.map, &self.q.map, &self.xi.map, &self.zeta.map])
    }

    pub fn km_voltages(&self, w: &DVector<f64>) -> DVector<Complex64> {
        let u = self.km.map.value(w);
        DVector::from_fn(self.n_km, |j, _| Complex64::new(u[j], u[self.n_km + j]))
    }

    pub fn blocks(&self) -> [&LinearBlock; 5] {
        [&self.km, &self.p, &self.q, &self.xi, &self.zeta]
    }

    /// Largest relative null-space residual over the blocks.
    pub fn worst_pade_residual(&self) -> f64 {
        self.blocks()
            .iter()
            .filter(|b| !b.fit.terminating)
            .map(|b| b.fit.residual / b.fit.wb_norm)
            .fold(0.0, f64::max)
    }
}

fn fit_block(name: &'static str, series: &[RealAffine], l: usize, m: usize) -> Result<LinearBlock> {
    let fit = pade_fit(series, l, m).map_err(|e| match e {
        Error::PoleAtEvaluation { .. } => Error::PoleAtEvaluation { block: name.into() },
        other => Error::PadeBlock {
            block: name.into(),
            source: Box::new(other),
        },
    })?;
    debug!(
        "{name}: sigma_min {:.3e} of {:.3e}, denominator sum {:.6}",
        fit.sigma_min,
        fit.wb_norm,
        fit.denom_sum()
    );
    Ok(LinearBlock {
        name,
        map: fit.value_at_one(),
        fit,
    })
}

/// Builds the linearization about `v_i0` without changing frames.
pub fn assemble_linearization(
    net: &AugmentedNetwork,
    loads: &ExtendedLoadSet,
    v_i0: &DVector<Complex64>,
    l: usize,
    m: usize,
) -> Result<PadeLinearization> {
    let series = he_recursion(net, loads, v_i0, l + m)?;
    let km = fit_block("KM", &series.km_real(), l, m)?;
    let p = fit_block("P", &series.p_real(), l, m)?;
    let q = fit_block("Q", &series.q_real(), l, m)?;
    let (xi_s, zeta_s) = series.xi_zeta_real();
    let xi = fit_block("xi", &xi_s, l, m)?;
    let zeta = fit_block("zeta", &zeta_s, l, m)?;
    Ok(PadeLinearization {
        n_i: net.n_i,
        n_km: net.n_km,
        e_ref: series.e_ref,
        l,
        m,
        w0: series.w0,
        rotation: 0.0,
        km,
        p,
        q,
        xi,
        zeta,
    })
}

/// Real matrix rotating every `(re_k, im_k)` pair of a `[re; im]` stack by `phi`.
pub fn pair_rotation(n: usize, phi: f64) -> DMatrix<f64> {
    let (c, s) = (phi.cos(), phi.sin());
    let mut r = DMatrix::zeros(2 * n, 2 * n);
    for k in 0..n {
        r[(k, k)] = c;
        r[(k, n + k)] = -s;
        r[(n + k, k)] = s;
        r[(n + k, n + k)] = c;
    }
    r
}

/// Linearization built in the frame where machine `ref_machine` has zero angle,
/// then mapped back to the caller's frame.
pub fn linearize_at(
    net: &AugmentedNetwork,
    loads: &ExtendedLoadSet,
    v_i0: &DVector<Complex64>,
    ref_machine: usize,
    l: usize,
    m: usize,
) -> Result<PadeLinearization> {
    let phi = v_i0
        .get(ref_machine)
        .ok_or_else(|| Error::Invalid(format!("reference machine {ref_machine} out of range")))?
        .arg();
    let rot = Complex64::from_polar(1.0, -phi);
    let local = v_i0.map(|z| z * rot);
    let mut lin = assemble_linearization(net, loads, &local, l, m)?;
    let ni = net.n_i;
    let nk = net.n_km;
    let r_in = pair_rotation(ni, -phi);
    let to_global = |block: &mut LinearBlock, r_out: Option<DMatrix<f64>>| {
        let mat = &block.map.mat * &r_in;
        let (mat, off) = match r_out {
            Some(r) => (&r * mat, &r * &block.map.off),
            None => (mat, block.map.off.clone()),
        };
        block.map = RealAffine { mat, off };
    };
    to_global(&mut lin.km, Some(pair_rotation(nk, phi)));
    to_global(&mut lin.p, None);
    to_global(&mut lin.q, None);
    // (xi, zeta) = q (x, y) rotates as a pair.
    let r_out = pair_rotation(ni, phi);
    let mut xz = RealAffine::stack(&[&lin.xi.map, &lin.zeta.map]);
    xz.mat = &r_out * (&xz.mat * &r_in);
    xz.off = &r_out * &xz.off;
    lin.xi.map = RealAffine {
        mat: xz.mat.rows(0, ni).into_owned(),
        off: xz.off.rows(0, ni).into_owned(),
    };
    lin.zeta.map = RealAffine {
        mat: xz.mat.rows(ni, ni).into_owned(),
        off: xz.off.rows(ni, ni).into_owned(),
    };
    lin.w0 = crate::linalg::split_complex(v_i0);
    lin.rotation = phi;
    Ok(lin)
}

/// Ward-type reduction treating P loads as impedances at the given magnitudes.
///
/// Returns `(map, offset)` with `v_KM = map v_I + offset`.
pub fn ward_reduction(
    net: &AugmentedNetwork,
    loads: &ExtendedLoadSet,
    v_km_mag: &DVector<f64>,
) -> Result<(DMatrix<Complex64>, DVector<Complex64>)> {
    let (ni, nk) = (net.n_i, net.n_km);
    if v_km_mag.len() != nk || v_km_mag.iter().any(|&v| !(v > 0.0)) {
        return Err(Error::Domain("KM voltage magnitudes must be positive".into()));
    }
    let y = loaded_ybus(net, loads);
    let mut a = y.view((ni, ni), (nk, nk)).into_owned();
    for j in 0..nk {
        let s_conj = -loads.p_loads[j].conj();
        a[(j, j)] -= s_conj / (v_km_mag[j] * v_km_mag[j]);
    }
    let inv = a
        .try_inverse()
        .ok_or_else(|| Error::ReductionFailure("reduced admittance is singular".into()))?;
    let y_ki = y.view((ni, 0), (nk, ni)).into_owned();
    Ok((-&inv * y_ki, &inv * &loads.i0))
}

/// First-order sensitivity of `[x_KM; y_KM]` to `[x_I; y_I]` at a power-flow solution.
pub fn taylor_sensitivity(net: &AugmentedNetwork, loads: &ExtendedLoadSet, v0: &QpfSolution) -> Result<RealAffine> {
    let ni = net.n_i;
    let v_i = v0.v.rows(0, ni).into_owned();
    let sys = assemble_qpf(net, loads, &v_i)?;
    if crate::linalg::max_abs_c(&sys.residual(&v0.v)) > 1e-8 {
        return Err(Error::SensitivityFailure(
            "expansion point is not a power-flow solution".into(),
        ));
    }
    let j_km = sys.jacobian(&v0.v);
    let j_i = sys.ibus_jacobian(&v0.v);
    let k = j_km
        .lu()
        .solve(&(-j_i))
        .filter(|m| m.iter().all(|x| x.is_finite()))
        .ok_or_else(|| Error::SensitivityFailure("KM Jacobian is singular".into()))?;
    let w0 = crate::linalg::split_complex(&v_i);
    let u0 = crate::linalg::split_complex(&v0.v_km(ni));
    let off = &u0 - &k * &w0;
    Ok(RealAffine { mat: k, off })
}

/// Least-squares perturbation bound for `min ||psi - Psi x||` when `(Psi, psi)` is
/// replaced by `(Psi_ext, psi_ext)`.
pub fn error_bound(
    psi_mat: &DMatrix<f64>,
    psi_vec: &DVector<f64>,
    ext_mat: &DMatrix<f64>,
    ext_vec: &DVector<f64>,
) -> Result<f64> {
    if psi_mat.shape() != ext_mat.shape() || psi_vec.len() != ext_vec.len() || psi_mat.nrows() != psi_vec.len() {
        return Err(Error::Dimension("error bound operands differ in shape".into()));
    }
    let svd = psi_mat.clone().svd(true, true);
    let smax = svd.singular_values.max();
    let smin = svd.singular_values.min();
    let vnorm = psi_vec.norm();
    if smax == 0.0 || vnorm == 0.0 {
        return Err(Error::UndefinedBound("zero matrix or right-hand side".into()));
    }
    if smin == 0.0 {
        return Err(Error::UndefinedBound("matrix is rank deficient".into()));
    }
    let d_mat = (ext_mat - psi_mat).clone().svd(false, false).singular_values.max();
    let eps = (d_mat / smax).max((ext_vec - psi_vec).norm() / vnorm);
    let x = svd.solve(psi_vec, 0.0).map_err(|e| Error::UndefinedBound(e.to_string()))?;
    let sin_theta = ((psi_vec - psi_mat * x).norm() / vnorm).min(1.0);
    let theta = sin_theta.asin();
    if theta.cos() == 0.0 {
        return Err(Error::UndefinedBound("right-hand side orthogonal to the range".into()));
    }
    let kappa = smax / smin;
    Ok(eps * (2.0 * kappa / theta.cos() + theta.tan() * kappa * kappa))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::case_model::builtin_case;
    use approx::assert_abs_diff_eq;

    fn scalar_series(vals: &[f64]) -> Vec<RealAffine> {
        vals.iter()
            .map(|&v| RealAffine {
                mat: DMatrix::zeros(1, 0),
                off: DVector::from_element(1, v),
            })
            .collect()
    }

    #[test]
    fn geometric_series_sums_exactly() {
        let s = scalar_series(&[1.0, 0.5, 0.25]);
        let fit = pade_fit(&s, 1, 1).unwrap();
        assert_abs_diff_eq!(fit.b[1] / fit.b[0], -0.5, epsilon = 1e-12);
        assert_abs_diff_eq!(fit.value_at_one().off[0], 2.0, epsilon = 1e-12);
    }

    #[test]
    fn polynomial_is_reproduced() {
        let s = scalar_series(&[1.0, 2.0, 3.0, 0.0, 0.0, 0.0, 0.0]);
        let fit = pade_fit(&s, 3, 3).unwrap();
        assert!(fit.b.rows(1, 3).iter().all(|x| x.abs() < 1e-12));
        assert_abs_diff_eq!(fit.value_at_one().off[0], 6.0, epsilon = 1e-12);
        assert_abs_diff_eq!(fit.value_at(0.5).off[0], 1.0 + 1.0 + 0.75, epsilon = 1e-12);
    }

    #[test]
    fn orders_zero_and_one() {
        let net = builtin_case("ieee9").unwrap().augment().unwrap();
        let loads = ExtendedLoadSet::zeros(net.n_km);
        let v_i = DVector::from_vec(vec![
            Complex64::from_polar(1.05, 0.0),
            Complex64::from_polar(1.04, 0.2),
            Complex64::from_polar(1.02, 0.1),
        ]);
        let s = he_recursion(&net, &loads, &v_i, 4).unwrap();
        let e = s.e_ref;
        assert!(s.v_km[0].coef.iter().all(|z| z.norm() == 0.0));
        assert!(s.v_km[0].off.iter().all(|z| (z - Complex64::new(e, 0.0)).norm() < 1e-15));
        assert!(s.w_conj[0]
            .off
            .iter()
            .all(|z| (z - Complex64::new(1.0 / e, 0.0)).norm() < 1e-15));
        let w1 = s.w_conj[1].value(&s.w0);
        let v1 = s.v_km[1].value(&s.w0);
        for j in 0..net.n_km {
            assert_abs_diff_eq!((w1[j] + v1[j].conj() / (e * e)).norm(), 0.0, epsilon = 1e-14);
        }
    }

    #[test]
    fn unloaded_series_terminates() {
        let net = builtin_case("ieee9").unwrap().augment().unwrap();
        let loads = ExtendedLoadSet::zeros(net.n_km);
        let v_i = DVector::from_vec(vec![
            Complex64::from_polar(1.05, 0.0),
            Complex64::from_polar(1.04, 0.2),
            Complex64::from_polar(1.02, 0.1),
        ]);
        // line charging lives in Ysh, so strip it for the homogeneous case
        let mut bare = net.clone();
        for b in bare.branches.iter_mut() {
            b.line_charging = 0.0;
        }
        let bare = bare.with_branches(bare.branches.clone()).unwrap();
        let s = he_recursion(&bare, &loads, &v_i, 6).unwrap();
        for n in 2..=6 {
            assert!(s.v_km[n].coef.iter().all(|z| z.norm() < 1e-13));
            assert!(s.v_km[n].off.iter().all(|z| z.norm() < 1e-13));
        }
    }

    #[test]
    fn orthogonal_condition_and_zero_bound() {
        let a = DMatrix::<f64>::identity(3, 2);
        let b = DVector::from_vec(vec![1.0, 2.0, 0.5]);
        assert_eq!(error_bound(&a, &b, &a, &b).unwrap(), 0.0);
        assert_abs_diff_eq!(crate::linalg::condition_number(&DMatrix::identity(2, 2)), 1.0);
    }
}
