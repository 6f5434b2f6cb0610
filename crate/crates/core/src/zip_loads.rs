//! ZIP loads and their extended Z + P representation.
//!
//! Loads are consumed power (positive P draws real power). A constant-impedance
//! share is embedded as a shunt admittance on the `Ybus` diagonal, and each
//! constant-current share is split into an impedance half and a power half
//! around a known voltage magnitude `|v0|`:
//!
//! `S_I(|v|) ~ (S/(2|v0|)) |v|^2 + (S/2) |v0|`.

use nalgebra::DVector;
use num_complex::Complex64;

use crate::case_model::{AugmentedNetwork, BusId};
use crate::error::{Error, Result};

/// Relative voltage drift beyond which current loads are split again.
pub const RESPLIT_THRESHOLD: f64 = 0.15;

#[derive(Clone, Debug, PartialEq)]
pub struct ZipLoadSpec {
    pub bus: BusId,
    /// Consumed power at |v| = 1.
    pub s0: Complex64,
    pub fz: f64,
    pub fi: f64,
    pub fp: f64,
}

impl ZipLoadSpec {
    pub fn new(bus: BusId, s0: Complex64, fz: f64, fi: f64, fp: f64) -> Result<Self> {
        if fz < 0.0 || fi < 0.0 || fp < 0.0 {
            return Err(Error::Domain(format!("negative ZIP fraction at bus {bus}")));
        }
        if (fz + fi + fp - 1.0).abs() > 1e-12 {
            return Err(Error::Domain(format!(
                "ZIP fractions at bus {bus} sum to {} instead of 1",
                fz + fi + fp
            )));
        }
        Ok(ZipLoadSpec { bus, s0, fz, fi, fp })
    }

    /// Exact ZIP consumption at voltage magnitude `vmag`.
    pub fn power_at(&self, vmag: f64) -> Complex64 {
        self.s0 * (self.fz * vmag * vmag + self.fi * vmag + self.fp)
    }
}

/// Loads as seen by the network solvers, indexed over KM buses.
///
/// Consumption at bus `j` is `conj(ybus_add_j)|v|^2 + p_loads_j + s_current_j |v|`.
/// After [`build_extended_loads`] the constant-current part is zero; it is kept
/// only for the exact ZIP model used as a reference.
#[derive(Clone, Debug, PartialEq)]
pub struct ExtendedLoadSet {
    pub ybus_add: DVector<Complex64>,
    pub p_loads: DVector<Complex64>,
    pub s_current: DVector<Complex64>,
    /// Designated currents; kept at zero.
    pub i0: DVector<Complex64>,
    pub v0_mag: DVector<f64>,
}

impl ExtendedLoadSet {
    pub fn zeros(n_km: usize) -> Self {
        ExtendedLoadSet {
            ybus_add: DVector::zeros(n_km),
            p_loads: DVector::zeros(n_km),
            s_current: DVector::zeros(n_km),
            i0: DVector::zeros(n_km),
            v0_mag: DVector::from_element(n_km, 1.0),
        }
    }

    pub fn len(&self) -> usize {
        self.p_loads.len()
    }

    pub fn is_empty(&self) -> bool {
        self.p_loads.is_empty()
    }

    /// Consumed power at KM bus `j` for voltage magnitude `vmag`.
    pub fn consumed_power(&self, j: usize, vmag: f64) -> Complex64 {
        self.ybus_add[j].conj() * vmag * vmag + self.p_loads[j] + self.s_current[j] * vmag
    }

    pub fn conj(&self) -> Self {
        ExtendedLoadSet {
            ybus_add: self.ybus_add.map(|z| z.conj()),
            p_loads: self.p_loads.map(|z| z.conj()),
            s_current: self.s_current.map(|z| z.conj()),
            i0: self.i0.map(|z| z.conj()),
            v0_mag: self.v0_mag.clone(),
        }
    }

    pub fn has_current_loads(&self) -> bool {
        self.s_current.iter().any(|z| z.norm() > 0.0)
    }
}

/// Impedance and power halves of a constant-current load.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct CurrentLoadSplit {
    /// Coefficient of |v|^2 in the consumed power.
    pub z_power: Complex64,
    /// Equivalent shunt admittance, `conj(z_power)`.
    pub admittance: Complex64,
    pub p_part: Complex64,
}

pub fn decompose_current_load(s0: Complex64, v0_mag: f64) -> Result<CurrentLoadSplit> {
    if !(v0_mag > 0.0) {
        return Err(Error::Domain(format!("|v0| must be positive, got {v0_mag}")));
    }
    let z_power = s0 / (2.0 * v0_mag);
    Ok(CurrentLoadSplit {
        z_power,
        admittance: z_power.conj(),
        p_part: s0 * (v0_mag / 2.0),
    })
}

/// Approximate over true power of the split current load at `r = |v|/|v0|`.
pub fn current_load_error_ratio(r: f64) -> Result<f64> {
    if !(r > 0.0) {
        return Err(Error::Domain(format!("voltage ratio must be positive, got {r}")));
    }
    Ok(0.5 * r + 0.5 / r)
}

/// `(r, ratio)` rows of the split error curve as CSV.
pub fn error_curve_csv(r_min: f64, r_max: f64, points: usize) -> Result<String> {
    let mut out = String::from("r,ratio\n");
    let n = points.max(2);
    for i in 0..n {
        let r = r_min + (r_max - r_min) * i as f64 / (n - 1) as f64;
        out.push_str(&format!("{r},{}\n", current_load_error_ratio(r)?));
    }
    Ok(out)
}

fn km_position(net: &AugmentedNetwork, bus: BusId) -> Result<usize> {
    net.km_index_of(bus).ok_or_else(|| Error::DanglingBus {
        bus,
        context: "zip load".into(),
    })
}

/// Extended Z + P loads with current loads split at `|v0|` (one entry per KM bus).
pub fn build_extended_loads(zips: &[ZipLoadSpec], net: &AugmentedNetwork, v0: &DVector<Complex64>) -> Result<ExtendedLoadSet> {
    if v0.len() != net.n_km {
        return Err(Error::Dimension(format!(
            "v0 has {} entries for {} KM buses",
            v0.len(),
            net.n_km
        )));
    }
    let mut set = ExtendedLoadSet::zeros(net.n_km);
    set.v0_mag = v0.map(|z| z.norm());
    for spec in zips {
        let j = km_position(net, spec.bus)?;
        let vm = set.v0_mag[j];
        if !(vm > 0.0) {
            return Err(Error::Domain(format!("|v0| at bus {} must be positive", spec.bus)));
        }
        let split = decompose_current_load(spec.s0 * spec.fi, vm)?;
        set.ybus_add[j] += (spec.s0 * spec.fz).conj() + split.admittance;
        set.p_loads[j] += spec.s0 * spec.fp + split.p_part;
    }
    Ok(set)
}

/// Exact ZIP model: current loads kept as a |v|-proportional term.
pub fn build_exact_zip(zips: &[ZipLoadSpec], net: &AugmentedNetwork) -> Result<ExtendedLoadSet> {
    let mut set = ExtendedLoadSet::zeros(net.n_km);
    for spec in zips {
        let j = km_position(net, spec.bus)?;
        set.ybus_add[j] += (spec.s0 * spec.fz).conj();
        set.p_loads[j] += spec.s0 * spec.fp;
        set.s_current[j] += spec.s0 * spec.fi;
    }
    Ok(set)
}

/// True when any loaded bus has drifted more than [`RESPLIT_THRESHOLD`] from its split voltage.
pub fn resplit_needed(zips: &[ZipLoadSpec], net: &AugmentedNetwork, loads: &ExtendedLoadSet, v_km: &DVector<Complex64>) -> bool {
    zips.iter().filter(|z| z.fi > 0.0).any(|z| {
        net.km_index_of(z.bus)
            .map(|j| (v_km[j].norm() / loads.v0_mag[j] - 1.0).abs() > RESPLIT_THRESHOLD)
            .unwrap_or(false)
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::case_model::builtin_case;
    use approx::assert_abs_diff_eq;

    fn c(re: f64, im: f64) -> Complex64 {
        Complex64::new(re, im)
    }

    #[test]
    fn equal_split_at_unit_voltage() {
        let s = decompose_current_load(c(0.9, 0.3), 1.0).unwrap();
        assert_abs_diff_eq!((s.z_power - c(0.45, 0.15)).norm(), 0.0, epsilon = 1e-15);
        assert_abs_diff_eq!((s.p_part - c(0.45, 0.15)).norm(), 0.0, epsilon = 1e-15);
    }

    #[test]
    fn zero_load_splits_to_zero() {
        let s = decompose_current_load(c(0.0, 0.0), 0.93).unwrap();
        assert_eq!(s.z_power, c(0.0, 0.0));
        assert_eq!(s.p_part, c(0.0, 0.0));
    }

    #[test]
    fn split_is_exact_at_v0() {
        let s0 = c(0.7, -0.2);
        let v0 = 0.95;
        let s = decompose_current_load(s0, v0).unwrap();
        let rebuilt = s.z_power * v0 * v0 + s.p_part;
        assert_abs_diff_eq!((rebuilt - s0 * v0).norm(), 0.0, epsilon = 1e-15);
    }

    #[test]
    fn nonpositive_voltage_is_domain_error() {
        assert!(decompose_current_load(c(1.0, 0.0), 0.0).is_err());
        assert!(current_load_error_ratio(-1.0).is_err());
    }

    #[test]
    fn error_ratio_values() {
        assert_eq!(current_load_error_ratio(1.0).unwrap(), 1.0);
        assert_abs_diff_eq!(current_load_error_ratio(0.8).unwrap(), 1.025, epsilon = 1e-12);
        assert_abs_diff_eq!(
            current_load_error_ratio(1.2).unwrap(),
            1.016_666_666_666_666_7,
            epsilon = 1e-12
        );
    }

    fn nine_bus() -> AugmentedNetwork {
        builtin_case("ieee9").unwrap().augment().unwrap()
    }

    #[test]
    fn pure_z_and_pure_p() {
        let net = nine_bus();
        let v0 = DVector::from_element(net.n_km, c(1.0, 0.0));
        let z = ZipLoadSpec::new(5, c(1.0, 0.0), 1.0, 0.0, 0.0).unwrap();
        let p = ZipLoadSpec::new(6, c(1.0, 0.5), 0.0, 0.0, 1.0).unwrap();
        let set = build_extended_loads(&[z, p], &net, &v0).unwrap();
        let j5 = net.km_index_of(5).unwrap();
        let j6 = net.km_index_of(6).unwrap();
        assert_eq!(set.ybus_add[j5], c(1.0, 0.0));
        assert_eq!(set.p_loads[j5], c(0.0, 0.0));
        assert_eq!(set.ybus_add[j6], c(0.0, 0.0));
        assert_eq!(set.p_loads[j6], c(1.0, 0.5));
    }

    #[test]
    fn equal_thirds() {
        let net = nine_bus();
        let v0 = DVector::from_element(net.n_km, c(1.0, 0.0));
        let spec = ZipLoadSpec::new(8, c(0.9, 0.3), 1.0 / 3.0, 1.0 / 3.0, 1.0 / 3.0).unwrap();
        let set = build_extended_loads(&[spec], &net, &v0).unwrap();
        let j = net.km_index_of(8).unwrap();
        let want_y = c(0.3, 0.1).conj() + c(0.15, 0.05).conj();
        let want_p = c(0.3, 0.1) + c(0.15, 0.05);
        assert_abs_diff_eq!((set.ybus_add[j] - want_y).norm(), 0.0, epsilon = 1e-15);
        assert_abs_diff_eq!((set.p_loads[j] - want_p).norm(), 0.0, epsilon = 1e-15);
    }

    #[test]
    fn unknown_bus_rejected() {
        let net = nine_bus();
        let v0 = DVector::from_element(net.n_km, c(1.0, 0.0));
        let spec = ZipLoadSpec::new(77, c(1.0, 0.0), 1.0, 0.0, 0.0).unwrap();
        assert!(matches!(
            build_extended_loads(&[spec], &net, &v0),
            Err(Error::DanglingBus { bus: 77, .. })
        ));
    }

    #[test]
    fn fractions_must_sum_to_one() {
        assert!(ZipLoadSpec::new(1, c(1.0, 0.0), 0.5, 0.5, 0.5).is_err());
    }
}
