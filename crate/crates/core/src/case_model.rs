//! Network cases: parsing, nodal admittance assembly and internal generator nodes.
//!
//! A case document is a sequence of `name = value;` statements where a value is
//! either a scalar or a bracketed numeric table with rows separated by `;` or
//! newlines. `%` and `#` start comments, and an optional `mpc.` prefix on table
//! names is ignored so MATPOWER files can be read with the same tokenizer.
//!
//! After augmentation the bus ordering is fixed repo-wide: the `NI` internal
//! generator nodes come first, followed by the original buses in file order.

use std::collections::{BTreeMap, HashMap, HashSet};
use std::fmt::Write as _;

use log::warn;
use nalgebra::{DMatrix, DVector};
use num_complex::Complex64;

use crate::error::{Error, Result};
use crate::zip_loads::ZipLoadSpec;

pub type BusId = usize;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum BusKind {
    /// Internal generator node behind the transient reactance.
    Ibus,
    /// Generator terminal bus.
    Kbus,
    /// Any other bus.
    Mbus,
}

#[derive(Clone, Debug, PartialEq)]
pub struct BusRecord {
    pub id: BusId,
    pub kind: BusKind,
    pub base_kv: f64,
    /// Shunt admittance in p.u.
    pub shunt: Complex64,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum BranchStatus {
    In,
    Out,
}

#[derive(Clone, Debug, PartialEq)]
pub struct BranchRecord {
    pub from: BusId,
    pub to: BusId,
    pub series_admittance: Complex64,
    /// Total line charging susceptance in p.u.
    pub line_charging: f64,
    /// Complex off-nominal ratio `t = |t| e^{j shift}`.
    pub tap: Complex64,
    pub status: BranchStatus,
}

impl BranchRecord {
    pub fn from_impedance(from: BusId, to: BusId, r: f64, x: f64, b: f64) -> Self {
        BranchRecord {
            from,
            to,
            series_admittance: Complex64::new(1.0, 0.0) / Complex64::new(r, x),
            line_charging: b,
            tap: Complex64::new(1.0, 0.0),
            status: BranchStatus::In,
        }
    }
}

/// Classical machine data.
#[derive(Clone, Debug, PartialEq)]
pub struct GeneratorDynamic {
    pub bus: BusId,
    /// Inertia constant `M = 2H / omega_s`.
    pub m: f64,
    pub d: f64,
    /// Internal voltage magnitude.
    pub e: f64,
    pub xd_t: f64,
    pub p_mech: f64,
    /// Initial speed deviation in rad/s.
    pub omega0: f64,
}

/// Everything a case document describes, in per unit.
#[derive(Clone, Debug, PartialEq)]
pub struct CaseData {
    pub base_mva: f64,
    pub buses: Vec<BusRecord>,
    pub branches: Vec<BranchRecord>,
    pub generators: Vec<GeneratorDynamic>,
    pub loads: Vec<ZipLoadSpec>,
}

/// Link between an internal node and its terminal bus, read off `Ybus`.
#[derive(Clone, Debug, PartialEq)]
pub struct GenLink {
    pub ibus: BusId,
    pub kbus: BusId,
    /// Network index of the terminal bus.
    pub k_index: usize,
    /// `Ybus(j, k)`.
    pub y_link: Complex64,
    pub y_mag: f64,
    /// `Re Ybus(j, j)`.
    pub g_jj: f64,
    /// `-Im Ybus(j, j)`.
    pub b_jj: f64,
}

#[derive(Clone, Debug)]
pub struct AugmentedNetwork {
    pub base_mva: f64,
    /// Network ordering: internal nodes first, then the original buses.
    pub buses: Vec<BusRecord>,
    /// Original branches followed by one reactance branch per machine.
    pub branches: Vec<BranchRecord>,
    pub generators: Vec<GeneratorDynamic>,
    pub ybus: DMatrix<Complex64>,
    pub ytr: DMatrix<Complex64>,
    /// Diagonal of the shunt part.
    pub ysh: DVector<Complex64>,
    pub n_i: usize,
    pub n_km: usize,
    pub gen_link: Vec<GenLink>,
    index: HashMap<BusId, usize>,
}

impl AugmentedNetwork {
    pub fn n(&self) -> usize {
        self.n_i + self.n_km
    }

    pub fn index_of(&self, id: BusId) -> Option<usize> {
        self.index.get(&id).copied()
    }

    pub fn km_index_of(&self, id: BusId) -> Option<usize> {
        self.index_of(id).and_then(|i| i.checked_sub(self.n_i))
    }

    pub fn bus_ids(&self) -> Vec<BusId> {
        self.buses.iter().map(|b| b.id).collect()
    }

    pub fn km_bus_ids(&self) -> Vec<BusId> {
        self.buses[self.n_i..].iter().map(|b| b.id).collect()
    }

    /// Number of branches that came from the case (internal reactances excluded).
    pub fn original_branch_count(&self) -> usize {
        self.branches.len() - self.n_i
    }

    /// Same network with one original branch switched out.
    pub fn with_branch_out(&self, branch: usize) -> Result<AugmentedNetwork> {
        if branch >= self.original_branch_count() {
            return Err(Error::Invalid(format!("branch index {branch} out of range")));
        }
        let mut branches = self.branches.clone();
        branches[branch].status = BranchStatus::Out;
        self.with_branches(branches)
    }

    /// Same buses and machines with a replacement branch list.
    pub fn with_branches(&self, branches: Vec<BranchRecord>) -> Result<AugmentedNetwork> {
        let (ybus, ytr, ysh) = build_ybus(&self.buses, &branches)?;
        let mut net = self.clone();
        net.branches = branches;
        net.ybus = ybus;
        net.ytr = ytr;
        net.ysh = ysh;
        net.gen_link = links(&net.buses, &net.generators, &net.ybus, &net.index, net.n_i);
        Ok(net)
    }

    /// Same network with `y` added to the shunt of bus `id`.
    pub fn with_extra_shunt(&self, id: BusId, y: Complex64) -> Result<AugmentedNetwork> {
        let k = self.index_of(id).ok_or_else(|| Error::DanglingBus {
            bus: id,
            context: "shunt".into(),
        })?;
        let mut net = self.clone();
        net.buses[k].shunt += y;
        let (ybus, ytr, ysh) = build_ybus(&net.buses, &net.branches)?;
        net.ybus = ybus;
        net.ytr = ytr;
        net.ysh = ysh;
        net.gen_link = links(&net.buses, &net.generators, &net.ybus, &net.index, net.n_i);
        Ok(net)
    }

    /// Index of the original branch joining `a` and `b` in either direction.
    pub fn find_branch(&self, a: BusId, b: BusId) -> Option<usize> {
        self.branches[..self.original_branch_count()]
            .iter()
            .position(|br| (br.from == a && br.to == b) || (br.from == b && br.to == a))
    }
}

/// Admittance matrix split into the zero-row-sum transfer part and a diagonal shunt part.
pub fn build_ybus(
    buses: &[BusRecord],
    branches: &[BranchRecord],
) -> Result<(DMatrix<Complex64>, DMatrix<Complex64>, DVector<Complex64>)> {
    let n = buses.len();
    let index = bus_index(buses)?;
    let mut y = DMatrix::<Complex64>::zeros(n, n);
    for (i, bus) in buses.iter().enumerate() {
        y[(i, i)] += bus.shunt;
    }
    for br in branches.iter().filter(|b| b.status == BranchStatus::In) {
        let f = *index.get(&br.from).ok_or_else(|| Error::DanglingBus {
            bus: br.from,
            context: "branch".into(),
        })?;
        let t = *index.get(&br.to).ok_or_else(|| Error::DanglingBus {
            bus: br.to,
            context: "branch".into(),
        })?;
        let ys = br.series_admittance;
        let half = Complex64::new(0.0, br.line_charging / 2.0);
        let tap = br.tap;
        y[(f, f)] += (ys + half) / tap.norm_sqr();
        y[(f, t)] += -ys / tap.conj();
        y[(t, f)] += -ys / tap;
        y[(t, t)] += ys + half;
    }
    let ysh = DVector::from_fn(n, |i, _| y.row(i).iter().sum::<Complex64>());
    let mut ytr = y.clone();
    for i in 0..n {
        ytr[(i, i)] -= ysh[i];
        if y.row(i).iter().all(|z| z.norm() == 0.0) {
            warn!("bus {} is isolated", buses[i].id);
        }
    }
    Ok((y, ytr, ysh))
}

fn bus_index(buses: &[BusRecord]) -> Result<HashMap<BusId, usize>> {
    let mut index = HashMap::with_capacity(buses.len());
    for (i, b) in buses.iter().enumerate() {
        if index.insert(b.id, i).is_some() {
            return Err(Error::DuplicateBus(b.id));
        }
    }
    Ok(index)
}

/// Adds one internal node per machine behind `1 / (j xd_t)`.
pub fn augment_with_ibus(
    buses: &[BusRecord],
    branches: &[BranchRecord],
    gens: &[GeneratorDynamic],
    base_mva: f64,
) -> Result<AugmentedNetwork> {
    if buses.iter().any(|b| b.kind == BusKind::Ibus) {
        return Err(Error::Unsupported("network already contains internal generator nodes".into()));
    }
    let orig_index = bus_index(buses)?;
    let mut seen = HashSet::new();
    for g in gens {
        let &k = orig_index.get(&g.bus).ok_or_else(|| Error::DanglingBus {
            bus: g.bus,
            context: "generator".into(),
        })?;
        if !seen.insert(g.bus) {
            return Err(Error::Unsupported(format!("two generators on bus {}", g.bus)));
        }
        if buses[k].kind != BusKind::Kbus {
            return Err(Error::Invalid(format!("generator on non-generator bus {}", g.bus)));
        }
        if !(g.m > 0.0 && g.e > 0.0 && g.xd_t > 0.0) {
            return Err(Error::Domain(format!("machine at bus {} needs M, E, xd_t > 0", g.bus)));
        }
    }
    for b in buses.iter().filter(|b| b.kind == BusKind::Kbus) {
        if !seen.contains(&b.id) {
            return Err(Error::Invalid(format!("generator bus {} has no machine", b.id)));
        }
    }
    let first_new = buses.iter().map(|b| b.id).max().unwrap_or(0) + 1;
    let mut all = Vec::with_capacity(buses.len() + gens.len());
    let mut new_branches = branches.to_vec();
    for (j, g) in gens.iter().enumerate() {
        let id = first_new + j;
        all.push(BusRecord {
            id,
            kind: BusKind::Ibus,
            base_kv: buses[orig_index[&g.bus]].base_kv,
            shunt: Complex64::new(0.0, 0.0),
        });
        new_branches.push(BranchRecord::from_impedance(id, g.bus, 0.0, g.xd_t, 0.0));
    }
    all.extend(buses.iter().cloned());
    let index = bus_index(&all)?;
    let (ybus, ytr, ysh) = build_ybus(&all, &new_branches)?;
    let n_i = gens.len();
    let gen_link = links(&all, gens, &ybus, &index, n_i);
    Ok(AugmentedNetwork {
        base_mva,
        n_km: buses.len(),
        buses: all,
        branches: new_branches,
        generators: gens.to_vec(),
        ybus,
        ytr,
        ysh,
        n_i,
        gen_link,
        index,
    })
}

fn links(
    buses: &[BusRecord],
    gens: &[GeneratorDynamic],
    ybus: &DMatrix<Complex64>,
    index: &HashMap<BusId, usize>,
    n_i: usize,
) -> Vec<GenLink> {
    gens.iter()
        .enumerate()
        .take(n_i)
        .map(|(j, g)| {
            let k = index[&g.bus];
            let yjj = ybus[(j, j)];
            let yjk = ybus[(j, k)];
            GenLink {
                ibus: buses[j].id,
                kbus: g.bus,
                k_index: k,
                y_link: yjk,
                y_mag: yjk.norm(),
                g_jj: yjj.re,
                b_jj: -yjj.im,
            }
        })
        .collect()
}

impl CaseData {
    pub fn augment(&self) -> Result<AugmentedNetwork> {
        augment_with_ibus(&self.buses, &self.branches, &self.generators, self.base_mva)
    }
}

// ---------------------------------------------------------------------------
// Tokenizer

#[derive(Debug, Clone)]
struct Table {
    rows: Vec<(usize, Vec<f64>)>,
    line: usize,
}

#[derive(Debug, Default)]
struct Document {
    scalars: HashMap<String, f64>,
    tables: BTreeMap<String, Table>,
}

impl Document {
    fn table(&self, name: &str) -> Option<&Table> {
        self.tables.get(name)
    }
}

fn parse_number(tok: &str, line: usize) -> Result<f64> {
    let bad = || Error::Syntax {
        line,
        msg: format!("invalid number '{tok}'"),
    };
    if let Some((a, b)) = tok.split_once('/') {
        let a: f64 = a.trim().parse().map_err(|_| bad())?;
        let b: f64 = b.trim().parse().map_err(|_| bad())?;
        if b == 0.0 {
            return Err(bad());
        }
        return Ok(a / b);
    }
    match tok.to_ascii_lowercase().as_str() {
        "inf" => Ok(f64::INFINITY),
        "-inf" => Ok(f64::NEG_INFINITY),
        _ => tok.parse().map_err(|_| bad()),
    }
}

fn strip_comment(line: &str) -> &str {
    let cut = line.find(['%', '#']).unwrap_or(line.len());
    &line[..cut]
}

fn parse_document(text: &str) -> Result<Document> {
    enum State {
        Top,
        Table { name: String, table: Table, skip: bool },
    }
    let mut doc = Document::default();
    let mut state = State::Top;

    for (ln0, raw) in text.lines().enumerate() {
        let line_no = ln0 + 1;
        let mut rest = strip_comment(raw).trim().to_string();
        loop {
            match &mut state {
                State::Top => {
                    if rest.is_empty() || rest.starts_with("function") {
                        break;
                    }
                    let Some((lhs, rhs)) = rest.split_once('=') else {
                        return Err(Error::Syntax {
                            line: line_no,
                            msg: format!("expected 'name = value', found '{rest}'"),
                        });
                    };
                    let name = lhs.trim().trim_start_matches("mpc.").to_string();
                    if name.is_empty() || !name.chars().all(|c| c.is_alphanumeric() || c == '_') {
                        return Err(Error::Syntax {
                            line: line_no,
                            msg: format!("invalid name '{}'", lhs.trim()),
                        });
                    }
                    let rhs = rhs.trim();
                    if let Some(body) = rhs.strip_prefix('[').or_else(|| rhs.strip_prefix('{')) {
                        let skip = rhs.starts_with('{');
                        state = State::Table {
                            name,
                            table: Table {
                                rows: Vec::new(),
                                line: line_no,
                            },
                            skip,
                        };
                        rest = body.to_string();
                        continue;
                    }
                    let value = rhs.trim_end_matches(';').trim();
                    if value.starts_with('\'') || value.starts_with('"') {
                        break;
                    }
                    let v = parse_number(value, line_no)?;
                    doc.scalars.insert(name, v);
                    break;
                }
                State::Table { name, table, skip } => {
                    let (body, closed) = match rest.find([']', '}']) {
                        Some(p) => (rest[..p].to_string(), Some(rest[p + 1..].to_string())),
                        None => (rest.clone(), None),
                    };
                    if !*skip {
                        for row in body.split(';') {
                            let toks: Vec<&str> = row
                                .split(|c: char| c.is_whitespace() || c == ',')
                                .filter(|t| !t.is_empty())
                                .collect();
                            if toks.is_empty() {
                                continue;
                            }
                            let vals = toks.iter().map(|t| parse_number(t, line_no)).collect::<Result<Vec<_>>>()?;
                            table.rows.push((line_no, vals));
                        }
                    }
                    match closed {
                        Some(after) => {
                            let after = after.trim().trim_start_matches(';').trim().to_string();
                            if !*skip {
                                doc.tables.insert(name.clone(), table.clone());
                            }
                            state = State::Top;
                            rest = after;
                            continue;
                        }
                        None => break,
                    }
                }
            }
        }
    }
    if let State::Table { table, .. } = state {
        return Err(Error::Syntax {
            line: table.line,
            msg: "unterminated table".into(),
        });
    }
    Ok(doc)
}

fn need_cols(table: &Table, name: &str, min: usize) -> Result<()> {
    for (line, row) in &table.rows {
        if row.len() < min {
            return Err(Error::Syntax {
                line: *line,
                msg: format!("table '{name}' needs at least {min} columns, found {}", row.len()),
            });
        }
    }
    Ok(())
}

fn as_id(v: f64, line: usize) -> Result<BusId> {
    if v < 0.0 || v.fract() != 0.0 {
        return Err(Error::Syntax {
            line,
            msg: format!("bus id must be a non-negative integer, found {v}"),
        });
    }
    Ok(v as BusId)
}

fn branch_from_row(row: &[f64], line: usize, tap_col: usize, shift_col: Option<usize>) -> Result<BranchRecord> {
    let from = as_id(row[0], line)?;
    let to = as_id(row[1], line)?;
    if from == to {
        return Err(Error::Syntax {
            line,
            msg: format!("branch connects bus {from} to itself"),
        });
    }
    let (r, x, b) = (row[2], row[3], row[4]);
    if r == 0.0 && x == 0.0 {
        return Err(Error::Syntax {
            line,
            msg: "branch has zero impedance".into(),
        });
    }
    let ratio = if row[tap_col] == 0.0 { 1.0 } else { row[tap_col] };
    let shift = shift_col.and_then(|c| row.get(c)).copied().unwrap_or(0.0).to_radians();
    let mut br = BranchRecord::from_impedance(from, to, r, x, b);
    br.tap = Complex64::from_polar(ratio, shift);
    Ok(br)
}

fn check_branch_buses(branches: &[BranchRecord], ids: &HashSet<BusId>) -> Result<()> {
    for br in branches {
        for id in [br.from, br.to] {
            if !ids.contains(&id) {
                return Err(Error::DanglingBus {
                    bus: id,
                    context: format!("branch {}-{}", br.from, br.to),
                });
            }
        }
    }
    Ok(())
}

/// Parses a native case document.
pub fn parse_case(text: &str) -> Result<CaseData> {
    let doc = parse_document(text)?;
    let base_mva = doc.scalars.get("baseMVA").copied().unwrap_or(100.0);
    if base_mva <= 0.0 {
        return Err(Error::Domain("baseMVA must be positive".into()));
    }
    let bus_t = doc.table("bus").ok_or_else(|| Error::Syntax {
        line: 0,
        msg: "missing 'bus' table".into(),
    })?;
    need_cols(bus_t, "bus", 5)?;
    let mut buses = Vec::new();
    let mut ids = HashSet::new();
    for (line, row) in &bus_t.rows {
        let id = as_id(row[0], *line)?;
        if !ids.insert(id) {
            return Err(Error::DuplicateBus(id));
        }
        let kind = match row[1] as i64 {
            1 => BusKind::Mbus,
            2 | 3 => BusKind::Kbus,
            k => {
                return Err(Error::Syntax {
                    line: *line,
                    msg: format!("unknown bus kind code {k}"),
                })
            }
        };
        buses.push(BusRecord {
            id,
            kind,
            base_kv: row[4],
            shunt: Complex64::new(row[2], row[3]) / base_mva,
        });
    }

    let mut branches = Vec::new();
    if let Some(t) = doc.table("branch") {
        need_cols(t, "branch", 7)?;
        for (line, row) in &t.rows {
            let mut br = branch_from_row(row, *line, 5, Some(7))?;
            if row[6] == 0.0 {
                br.status = BranchStatus::Out;
            }
            branches.push(br);
        }
    }
    check_branch_buses(&branches, &ids)?;

    let mut p_mech: HashMap<BusId, f64> = HashMap::new();
    let mut gen_order = Vec::new();
    if let Some(t) = doc.table("gen") {
        need_cols(t, "gen", 2)?;
        for (line, row) in &t.rows {
            let bus = as_id(row[0], *line)?;
            if !ids.contains(&bus) {
                return Err(Error::DanglingBus {
                    bus,
                    context: "generator".into(),
                });
            }
            if p_mech.insert(bus, row[1] / base_mva).is_some() {
                return Err(Error::Unsupported(format!("two generators on bus {bus}")));
            }
            gen_order.push(bus);
        }
    }
    let mut dyn_rows: HashMap<BusId, &[f64]> = HashMap::new();
    if let Some(t) = doc.table("dynamics") {
        need_cols(t, "dynamics", 6)?;
        for (line, row) in &t.rows {
            let bus = as_id(row[0], *line)?;
            if !p_mech.contains_key(&bus) {
                return Err(Error::DanglingBus {
                    bus,
                    context: "dynamics row without generator".into(),
                });
            }
            dyn_rows.insert(bus, row);
        }
    }
    let mut generators = Vec::new();
    for bus in gen_order {
        let row = dyn_rows
            .get(&bus)
            .ok_or_else(|| Error::Invalid(format!("generator at bus {bus} has no dynamics row")))?;
        generators.push(GeneratorDynamic {
            bus,
            m: row[1],
            d: row[2],
            e: row[3],
            xd_t: row[4],
            p_mech: p_mech[&bus],
            omega0: row[5],
        });
    }

    let mut loads = Vec::new();
    if let Some(t) = doc.table("zip") {
        need_cols(t, "zip", 6)?;
        for (line, row) in &t.rows {
            let bus = as_id(row[0], *line)?;
            if !ids.contains(&bus) {
                return Err(Error::DanglingBus {
                    bus,
                    context: "zip load".into(),
                });
            }
            let spec = ZipLoadSpec::new(bus, Complex64::new(row[1], row[2]) / base_mva, row[3], row[4], row[5]).map_err(|e| {
                Error::Syntax {
                    line: *line,
                    msg: e.to_string(),
                }
            })?;
            loads.push(spec);
        }
    }

    Ok(CaseData {
        base_mva,
        buses,
        branches,
        generators,
        loads,
    })
}

/// Default machine data applied when converting MATPOWER cases.
#[derive(Clone, Debug)]
pub struct ConversionDefaults {
    /// Inertia constant H in seconds on the system base.
    pub h: f64,
    /// Damping as a multiple of M.
    pub damping_ratio: f64,
    pub xd_t: f64,
    pub nominal_hz: f64,
    /// ZIP fractions applied to every load.
    pub split: (f64, f64, f64),
}

impl Default for ConversionDefaults {
    fn default() -> Self {
        ConversionDefaults {
            h: 5.0,
            damping_ratio: 0.2,
            xd_t: 0.2,
            nominal_hz: 60.0,
            split: (1.0 / 3.0, 1.0 / 3.0, 1.0 / 3.0),
        }
    }
}

/// Converts MATPOWER `bus`/`gen`/`branch` matrices into a case with classical machines.
///
/// Internal voltages are computed from the solved `Vm`, `Va`, `Pg`, `Qg` columns
/// as `E = V + j xd_t conj(S / V)`.
pub fn convert_matpower(text: &str, defaults: &ConversionDefaults) -> Result<CaseData> {
    let doc = parse_document(text)?;
    let base_mva = doc.scalars.get("baseMVA").copied().unwrap_or(100.0);
    let bus_t = doc.table("bus").ok_or_else(|| Error::Syntax {
        line: 0,
        msg: "missing 'bus' table".into(),
    })?;
    need_cols(bus_t, "bus", 13)?;
    let gen_t = doc.table("gen").ok_or_else(|| Error::Syntax {
        line: 0,
        msg: "missing 'gen' table".into(),
    })?;
    need_cols(gen_t, "gen", 8)?;

    let mut gen_rows: Vec<(BusId, f64, f64)> = Vec::new();
    for (line, row) in &gen_t.rows {
        if row[7] <= 0.0 {
            continue;
        }
        let bus = as_id(row[0], *line)?;
        if gen_rows.iter().any(|g| g.0 == bus) {
            return Err(Error::Unsupported(format!("two generators on bus {bus}")));
        }
        gen_rows.push((bus, row[1] / base_mva, row[2] / base_mva));
    }
    let gen_buses: HashSet<BusId> = gen_rows.iter().map(|g| g.0).collect();

    let mut buses = Vec::new();
    let mut ids = HashSet::new();
    let mut volt: HashMap<BusId, Complex64> = HashMap::new();
    let mut loads = Vec::new();
    let (fz, fi, fp) = defaults.split;
    for (line, row) in &bus_t.rows {
        let id = as_id(row[0], *line)?;
        if !ids.insert(id) {
            return Err(Error::DuplicateBus(id));
        }
        let kind = if gen_buses.contains(&id) {
            BusKind::Kbus
        } else {
            BusKind::Mbus
        };
        buses.push(BusRecord {
            id,
            kind,
            base_kv: row[9],
            shunt: Complex64::new(row[4], row[5]) / base_mva,
        });
        volt.insert(id, Complex64::from_polar(row[7], row[8].to_radians()));
        if row[2] != 0.0 || row[3] != 0.0 {
            loads.push(ZipLoadSpec::new(id, Complex64::new(row[2], row[3]) / base_mva, fz, fi, fp)?);
        }
    }
    for &b in &gen_buses {
        if !ids.contains(&b) {
            return Err(Error::DanglingBus {
                bus: b,
                context: "generator".into(),
            });
        }
    }

    let mut branches = Vec::new();
    if let Some(t) = doc.table("branch") {
        need_cols(t, "branch", 11)?;
        for (line, row) in &t.rows {
            let mut br = branch_from_row(row, *line, 8, Some(9))?;
            if row[10] == 0.0 {
                br.status = BranchStatus::Out;
            }
            branches.push(br);
        }
    }
    check_branch_buses(&branches, &ids)?;

    let omega_s = 2.0 * std::f64::consts::PI * defaults.nominal_hz;
    let m = 2.0 * defaults.h / omega_s;
    let generators = gen_rows
        .iter()
        .map(|&(bus, pg, qg)| {
            let v = volt[&bus];
            let s = Complex64::new(pg, qg);
            let e = v + Complex64::new(0.0, defaults.xd_t) * (s / v).conj();
            GeneratorDynamic {
                bus,
                m,
                d: defaults.damping_ratio * m,
                e: e.norm(),
                xd_t: defaults.xd_t,
                p_mech: pg,
                omega0: 0.0,
            }
        })
        .collect();

    Ok(CaseData {
        base_mva,
        buses,
        branches,
        generators,
        loads,
    })
}

/// Native text for a case, readable by [`parse_case`].
pub fn write_case(case: &CaseData) -> String {
    let base = case.base_mva;
    let mut s = String::new();
    let _ = writeln!(s, "baseMVA = {base};\n");
    let _ = writeln!(s, "% id kind Gs Bs baseKV");
    let _ = writeln!(s, "bus = [");
    for b in &case.buses {
        let code = match b.kind {
            BusKind::Kbus => 2,
            _ => 1,
        };
        let _ = writeln!(
            s,
            "  {} {} {} {} {};",
            b.id,
            code,
            b.shunt.re * base,
            b.shunt.im * base,
            b.base_kv
        );
    }
    let _ = writeln!(s, "];\n\n% from to R X B tap status shift");
    let _ = writeln!(s, "branch = [");
    for br in &case.branches {
        let z = Complex64::new(1.0, 0.0) / br.series_admittance;
        let _ = writeln!(
            s,
            "  {} {} {} {} {} {} {} {};",
            br.from,
            br.to,
            z.re,
            z.im,
            br.line_charging,
            br.tap.norm(),
            u8::from(br.status == BranchStatus::In),
            br.tap.arg().to_degrees()
        );
    }
    let _ = writeln!(s, "];\n\n% bus p_mech");
    let _ = writeln!(s, "gen = [");
    for g in &case.generators {
        let _ = writeln!(s, "  {} {};", g.bus, g.p_mech * base);
    }
    let _ = writeln!(s, "];\n\n% bus M D E xd_t omega0");
    let _ = writeln!(s, "dynamics = [");
    for g in &case.generators {
        let _ = writeln!(s, "  {} {} {} {} {} {};", g.bus, g.m, g.d, g.e, g.xd_t, g.omega0);
    }
    let _ = writeln!(s, "];\n\n% bus P0 Q0 fz fi fp");
    let _ = writeln!(s, "zip = [");
    for l in &case.loads {
        let _ = writeln!(
            s,
            "  {} {} {} {} {} {};",
            l.bus,
            l.s0.re * base,
            l.s0.im * base,
            l.fz,
            l.fi,
            l.fp
        );
    }
    let _ = writeln!(s, "];");
    s
}

/// Returns true when the document looks like a MATPOWER file rather than a native case.
pub fn is_matpower(text: &str) -> bool {
    match parse_document(text) {
        Ok(doc) => doc
            .table("bus")
            .map(|t| t.rows.first().map(|r| r.1.len() >= 13).unwrap_or(false))
            .unwrap_or(false),
        Err(_) => false,
    }
}

/// Parses either format, converting MATPOWER input with default machine data.
pub fn load_case(text: &str) -> Result<CaseData> {
    if is_matpower(text) {
        convert_matpower(text, &ConversionDefaults::default())
    } else {
        parse_case(text)
    }
}

pub const BUILTIN_CASES: [&str; 3] = ["ieee9", "ieee14", "ieee30"];

pub fn builtin_case(name: &str) -> Result<CaseData> {
    match name {
        "ieee9" => parse_case(include_str!("../data/ieee9.case")),
        "ieee14" => convert_matpower(include_str!("../data/case14.m"), &ConversionDefaults::default()),
        "ieee30" => convert_matpower(include_str!("../data/case30.m"), &ConversionDefaults::default()),
        other => Err(Error::Invalid(format!("unknown built-in case '{other}'"))),
    }
}
