//! Radial feeder description and the per-unit bus admittance matrix.
//!
//! Buses are indexed `0..N` with the substation (slack) at index 0. Every
//! electrical quantity held by [`NetworkModel`] is per-unit on the system MVA
//! base and the per-bus kV base; the file loader converts physical inputs.

use std::collections::VecDeque;
use std::path::Path;

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::inverter::{DroopCurve, InverterSpec, InverterState};
use crate::power_flow::InjectionVector;
use crate::scenario::Scenario;
use crate::{Error, Result};

/// System base used when a network file does not declare one (MVA).
pub const DEFAULT_MVA_BASE: f64 = 2.74;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum BusKind {
    Slack,
    Pq,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Bus {
    pub id: usize,
    pub kind: BusKind,
    pub base_kv: f64,
    /// Optional label from the source data, e.g. the IEEE node number.
    pub name: Option<String>,
    /// Index into [`NetworkModel::loads`].
    pub load: Option<usize>,
    /// Index into [`NetworkModel::pvs`].
    pub pv: Option<usize>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Line {
    pub from: usize,
    pub to: usize,
    pub resistance: f64,
    pub reactance: f64,
    /// Total line charging, split equally between both ends.
    pub shunt_susceptance: f64,
}

impl Line {
    /// Series admittance `1 / (r + jx)` as `(g, b)`.
    pub fn series_admittance(&self) -> (f64, f64) {
        let den = self.resistance * self.resistance + self.reactance * self.reactance;
        (self.resistance / den, -self.reactance / den)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LoadSpec {
    pub bus: usize,
    /// Real demand at nominal (p.u.).
    pub p_base: f64,
    /// Reactive demand at nominal (p.u.).
    pub q_base: f64,
}

/// A PV smart inverter together with its local Volt-Var curve.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PvSite {
    pub spec: InverterSpec,
    pub droop: DroopCurve,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NetworkModel {
    name: String,
    mva_base: f64,
    buses: Vec<Bus>,
    lines: Vec<Line>,
    loads: Vec<LoadSpec>,
    pvs: Vec<PvSite>,
}

impl NetworkModel {
    /// Assemble and validate a network. Bus attachment indices are filled in
    /// from the load and PV lists.
    pub fn new(
        name: impl Into<String>,
        mva_base: f64,
        mut buses: Vec<Bus>,
        lines: Vec<Line>,
        loads: Vec<LoadSpec>,
        pvs: Vec<PvSite>,
    ) -> Result<Self> {
        if !(mva_base > 0.0 && mva_base.is_finite()) {
            return Err(Error::Parameter(format!("MVA base must be > 0, got {mva_base}")));
        }
        validate_buses(&buses)?;
        for bus in &mut buses {
            bus.load = None;
            bus.pv = None;
        }
        for (i, load) in loads.iter().enumerate() {
            let bus = buses
                .get_mut(load.bus)
                .ok_or_else(|| Error::Parameter(format!("load {i} references unknown bus {}", load.bus)))?;
            if bus.load.replace(i).is_some() {
                return Err(Error::Parameter(format!("bus {} has more than one load", load.bus)));
            }
            if load.p_base.is_nan() || load.p_base < 0.0 || !load.q_base.is_finite() {
                return Err(Error::Parameter(format!(
                    "load at bus {} needs p_base >= 0 and finite q_base",
                    load.bus
                )));
            }
        }
        for (i, pv) in pvs.iter().enumerate() {
            pv.spec.validate()?;
            pv.droop.validate()?;
            let bus = buses
                .get_mut(pv.spec.bus)
                .ok_or_else(|| Error::Parameter(format!("pv {i} references unknown bus {}", pv.spec.bus)))?;
            if bus.pv.replace(i).is_some() {
                return Err(Error::Parameter(format!("bus {} has more than one PV", pv.spec.bus)));
            }
        }
        for line in &lines {
            validate_line(line, buses.len())?;
        }
        check_radial(buses.len(), &lines)?;
        Ok(NetworkModel {
            name: name.into(),
            mva_base,
            buses,
            lines,
            loads,
            pvs,
        })
    }

    pub fn name(&self) -> &str {
        &self.name
    }

    pub fn mva_base(&self) -> f64 {
        self.mva_base
    }

    pub fn buses(&self) -> &[Bus] {
        &self.buses
    }

    pub fn lines(&self) -> &[Line] {
        &self.lines
    }

    pub fn loads(&self) -> &[LoadSpec] {
        &self.loads
    }

    pub fn pvs(&self) -> &[PvSite] {
        &self.pvs
    }

    pub fn n_buses(&self) -> usize {
        self.buses.len()
    }

    /// Replace every inverter's droop curve.
    pub fn with_droop(mut self, curve: DroopCurve) -> Result<Self> {
        curve.validate()?;
        for pv in &mut self.pvs {
            pv.droop = curve;
        }
        Ok(self)
    }

    /// Net injections (generation minus load) for a scenario and dispatched
    /// inverter states.
    pub fn injections(&self, scenario: &Scenario, inverters: &[InverterState]) -> Result<InjectionVector> {
        if scenario.load_scale.len() != self.loads.len() {
            return Err(Error::Dimension {
                what: "scenario load multipliers",
                expected: self.loads.len(),
                got: scenario.load_scale.len(),
            });
        }
        if inverters.len() != self.pvs.len() {
            return Err(Error::Dimension {
                what: "inverter states",
                expected: self.pvs.len(),
                got: inverters.len(),
            });
        }
        let n = self.n_buses();
        let mut inj = InjectionVector::zeros(n);
        for (load, &scale) in self.loads.iter().zip(&scenario.load_scale) {
            inj.p[load.bus] -= scale * load.p_base;
            inj.q[load.bus] -= scale * load.q_base;
        }
        for (pv, st) in self.pvs.iter().zip(inverters) {
            inj.p[pv.spec.bus] += st.p_out;
            inj.q[pv.spec.bus] += st.q_cmd;
        }
        Ok(inj)
    }

    /// Total demand of a scenario (p.u.).
    pub fn total_load(&self, scenario: &Scenario) -> (f64, f64) {
        self.loads
            .iter()
            .zip(&scenario.load_scale)
            .fold((0.0, 0.0), |(p, q), (l, s)| (p + s * l.p_base, q + s * l.q_base))
    }
}

fn validate_buses(buses: &[Bus]) -> Result<()> {
    if buses.is_empty() {
        return Err(Error::Topology("network has no buses".into()));
    }
    let mut seen = vec![false; buses.len()];
    for bus in buses {
        if bus.id >= buses.len() || std::mem::replace(&mut seen[bus.id], true) {
            return Err(Error::Parameter(format!(
                "bus ids must be unique and contiguous 0..{}; offending id {}",
                buses.len(),
                bus.id
            )));
        }
        if !(bus.base_kv > 0.0 && bus.base_kv.is_finite()) {
            return Err(Error::Parameter(format!(
                "bus {} has invalid base_kv {}",
                bus.id, bus.base_kv
            )));
        }
    }
    for (i, bus) in buses.iter().enumerate() {
        if bus.id != i {
            return Err(Error::Parameter(format!(
                "bus at position {i} has id {}; list must be ordered",
                bus.id
            )));
        }
    }
    let slacks: Vec<usize> = buses
        .iter()
        .filter(|b| b.kind == BusKind::Slack)
        .map(|b| b.id)
        .collect();
    match slacks.as_slice() {
        [] => Err(Error::Topology("no slack bus".into())),
        [0] => Ok(()),
        [other] => Err(Error::Topology(format!("slack bus must be id 0, found {other}"))),
        many => Err(Error::Topology(format!(
            "exactly one slack bus allowed, found {many:?}"
        ))),
    }
}

fn validate_line(line: &Line, n: usize) -> Result<()> {
    if line.from >= n || line.to >= n {
        return Err(Error::Topology(format!(
            "line {}-{} references unknown bus",
            line.from, line.to
        )));
    }
    if line.from == line.to {
        return Err(Error::Topology(format!("line {0}-{0} is a self loop", line.from)));
    }
    let finite = line.resistance.is_finite() && line.reactance.is_finite() && line.shunt_susceptance.is_finite();
    if !finite || line.resistance < 0.0 {
        return Err(Error::Parameter(format!(
            "line {}-{}: resistance must be finite and >= 0",
            line.from, line.to
        )));
    }
    if line.reactance == 0.0 && line.resistance <= 0.0 {
        return Err(Error::Parameter(format!(
            "line {}-{} has zero impedance",
            line.from, line.to
        )));
    }
    Ok(())
}

/// A line set is radial when it has exactly `n - 1` edges and reaches every bus.
fn check_radial(n: usize, lines: &[Line]) -> Result<()> {
    let mut adj = vec![Vec::new(); n];
    for l in lines {
        adj[l.from].push(l.to);
        adj[l.to].push(l.from);
    }
    let mut seen = vec![false; n];
    let mut queue = VecDeque::from([0usize]);
    seen[0] = true;
    let mut reached = 1;
    while let Some(k) = queue.pop_front() {
        for &j in &adj[k] {
            if !seen[j] {
                seen[j] = true;
                reached += 1;
                queue.push_back(j);
            }
        }
    }
    if reached != n {
        let orphans: Vec<usize> = (0..n).filter(|&k| !seen[k]).collect();
        return Err(Error::Topology(format!(
            "network is disconnected; unreachable buses {orphans:?}"
        )));
    }
    if lines.len() != n - 1 {
        return Err(Error::Topology(format!(
            "network is not radial: {} lines for {n} buses",
            lines.len()
        )));
    }
    Ok(())
}

/// Bus admittance matrix split into conductance and susceptance parts.
#[derive(Debug, Clone, PartialEq)]
pub struct AdmittanceMatrix {
    pub g: DMatrix<f64>,
    pub b: DMatrix<f64>,
}

impl AdmittanceMatrix {
    pub fn n(&self) -> usize {
        self.g.nrows()
    }
}

/// Build `Y = G + jB` from the line list.
///
/// Off-diagonals are the negated series admittance of the connecting line;
/// each diagonal sums the series admittances of incident lines plus half of
/// their line charging.
pub fn build_admittance(network: &NetworkModel) -> Result<AdmittanceMatrix> {
    let n = network.n_buses();
    for line in network.lines() {
        validate_line(line, n)?;
    }
    check_radial(n, network.lines())?;
    let mut g = DMatrix::zeros(n, n);
    let mut b = DMatrix::zeros(n, n);
    for line in network.lines() {
        let (gs, bs) = line.series_admittance();
        let (k, j) = (line.from, line.to);
        g[(k, j)] -= gs;
        g[(j, k)] -= gs;
        b[(k, j)] -= bs;
        b[(j, k)] -= bs;
        g[(k, k)] += gs;
        g[(j, j)] += gs;
        b[(k, k)] += bs + line.shunt_susceptance / 2.0;
        b[(j, j)] += bs + line.shunt_susceptance / 2.0;
    }
    Ok(AdmittanceMatrix { g, b })
}

/// A validated network bundled with its admittance matrix, shared read-only
/// between environments and evaluation workers.
#[derive(Debug, Clone)]
pub struct Feeder {
    pub network: NetworkModel,
    pub y: AdmittanceMatrix,
}

impl Feeder {
    pub fn new(network: NetworkModel) -> Result<Self> {
        let y = build_admittance(&network)?;
        Ok(Feeder { network, y })
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Feeder::new(load_network(path)?)
    }
}

// ---------------------------------------------------------------------------
// Per-unit conversion

pub fn impedance_base(kv: f64, mva: f64) -> f64 {
    kv * kv / mva
}

pub fn ohms_to_pu(ohms: f64, kv: f64, mva: f64) -> f64 {
    ohms / impedance_base(kv, mva)
}

pub fn pu_to_ohms(pu: f64, kv: f64, mva: f64) -> f64 {
    pu * impedance_base(kv, mva)
}

pub fn siemens_to_pu(siemens: f64, kv: f64, mva: f64) -> f64 {
    siemens * impedance_base(kv, mva)
}

pub fn pu_to_siemens(pu: f64, kv: f64, mva: f64) -> f64 {
    pu / impedance_base(kv, mva)
}

/// kW, kvar or kVA to per-unit.
pub fn kilo_to_pu(kilo: f64, mva: f64) -> f64 {
    kilo / (1000.0 * mva)
}

pub fn pu_to_kilo(pu: f64, mva: f64) -> f64 {
    pu * 1000.0 * mva
}

// ---------------------------------------------------------------------------
// File format

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum Units {
    #[default]
    PerUnit,
    /// Ohms, siemens, kW, kvar and kVA on the declared bases.
    Physical,
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct NetworkFile {
    pub network: NetworkHeader,
    pub buses: Vec<BusRecord>,
    #[serde(default)]
    pub lines: Vec<LineRecord>,
    #[serde(default)]
    pub loads: Vec<LoadRecord>,
    #[serde(default)]
    pub pvs: Vec<PvRecord>,
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct NetworkHeader {
    pub name: String,
    #[serde(default)]
    pub units: Units,
    #[serde(default = "default_mva")]
    pub mva_base: f64,
}

fn default_mva() -> f64 {
    DEFAULT_MVA_BASE
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BusRecord {
    pub id: usize,
    pub kind: BusKind,
    pub base_kv: f64,
    #[serde(default)]
    pub name: Option<String>,
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LineRecord {
    pub from: usize,
    pub to: usize,
    pub r: f64,
    pub x: f64,
    #[serde(default)]
    pub b_shunt: f64,
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LoadRecord {
    pub bus: usize,
    pub p: f64,
    pub q: f64,
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PvRecord {
    pub bus: usize,
    pub s_rating: f64,
    pub dc_rating: f64,
    #[serde(default)]
    pub droop: Option<DroopCurve>,
}

/// Read and validate a network file (TOML, see `data/five_bus.toml`).
pub fn load_network(path: impl AsRef<Path>) -> Result<NetworkModel> {
    let path = path.as_ref();
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    parse_network(&text).map_err(|e| match e {
        Error::Schema { msg, .. } => Error::schema(path, msg),
        other => other,
    })
}

pub fn parse_network(text: &str) -> Result<NetworkModel> {
    let file: NetworkFile = toml::from_str(text).map_err(|e| Error::schema("<network>", e.to_string()))?;
    file.into_model()
}

impl NetworkFile {
    pub fn into_model(self) -> Result<NetworkModel> {
        let mva = self.network.mva_base;
        if !(mva > 0.0 && mva.is_finite()) {
            return Err(Error::Parameter(format!("mva_base must be > 0, got {mva}")));
        }
        let physical = self.network.units == Units::Physical;
        let mut ids: Vec<usize> = self.buses.iter().map(|b| b.id).collect();
        ids.sort_unstable();
        if let Some(w) = ids.windows(2).find(|w| w[0] == w[1]) {
            return Err(Error::Parameter(format!("duplicate bus id {}", w[0])));
        }
        let mut buses: Vec<Bus> = self
            .buses
            .into_iter()
            .map(|b| Bus {
                id: b.id,
                kind: b.kind,
                base_kv: b.base_kv,
                name: b.name,
                load: None,
                pv: None,
            })
            .collect();
        buses.sort_by_key(|b| b.id);
        validate_buses(&buses)?;

        let kv_of = |bus: usize| -> Result<f64> {
            buses
                .get(bus)
                .map(|b| b.base_kv)
                .ok_or_else(|| Error::Topology(format!("reference to unknown bus {bus}")))
        };

        let mut lines = Vec::with_capacity(self.lines.len());
        for l in self.lines {
            let (kf, kt) = (kv_of(l.from)?, kv_of(l.to)?);
            if physical && (kf - kt).abs() > 1e-9 * kf {
                return Err(Error::Parameter(format!(
                    "line {}-{} joins different kV bases ({kf} vs {kt}); transformers are not modelled",
                    l.from, l.to
                )));
            }
            let line = if physical {
                Line {
                    from: l.from,
                    to: l.to,
                    resistance: ohms_to_pu(l.r, kf, mva),
                    reactance: ohms_to_pu(l.x, kf, mva),
                    shunt_susceptance: siemens_to_pu(l.b_shunt, kf, mva),
                }
            } else {
                Line {
                    from: l.from,
                    to: l.to,
                    resistance: l.r,
                    reactance: l.x,
                    shunt_susceptance: l.b_shunt,
                }
            };
            lines.push(line);
        }

        let power = |v: f64| if physical { kilo_to_pu(v, mva) } else { v };
        let loads = self
            .loads
            .into_iter()
            .map(|l| LoadSpec {
                bus: l.bus,
                p_base: power(l.p),
                q_base: power(l.q),
            })
            .collect();
        let pvs = self
            .pvs
            .into_iter()
            .map(|p| PvSite {
                spec: InverterSpec {
                    bus: p.bus,
                    s_rating: power(p.s_rating),
                    dc_rating: power(p.dc_rating),
                },
                droop: p.droop.unwrap_or_default(),
            })
            .collect();
        NetworkModel::new(self.network.name, mva, buses, lines, loads, pvs)
    }
}
