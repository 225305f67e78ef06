//! Experiment configuration, year-long (or sliced) evaluation of the three
//! control cases, and the comparison report.

use std::fmt::{self, Write as _};
use std::io::Write;
use std::path::{Path, PathBuf};
use std::sync::Arc;

use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::ddpg::{Agent, DdpgConfig, TrainConfig, Trainer, TrainingLog};
use crate::environment::{classify_zone, GridEnv, RewardConfig, Zone, ZoneBounds};
use crate::grid_model::{load_network, Feeder, NetworkModel};
use crate::inverter::{self, DroopCurve, DroopOptions, InverterState};
use crate::power_flow::{self, PowerFlowSolution, SolverOptions};
use crate::scenario::{self, ProfileSet, Scenario, HOURS_PER_YEAR};
use crate::{Error, Result};

/// Everything an experiment needs, read from one TOML file. Relative paths
/// are resolved against the directory holding the config file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub network: PathBuf,
    /// Hourly profile CSV; when absent a synthetic year is generated from
    /// `profile_seed`.
    #[serde(default)]
    pub profiles: Option<PathBuf>,
    #[serde(default)]
    pub profile_seed: u64,
    #[serde(default)]
    pub solver: SolverOptions,
    #[serde(default)]
    pub reward: RewardConfig,
    /// Overrides the droop curve of every inverter in the network file.
    #[serde(default)]
    pub droop: Option<DroopCurve>,
    #[serde(default)]
    pub droop_solver: DroopOptions,
    #[serde(default)]
    pub agent: DdpgConfig,
    #[serde(default)]
    pub training: TrainConfig,
    #[serde(default)]
    pub evaluation: EvaluationSection,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvaluationSection {
    pub start_hour: usize,
    pub hours: usize,
}

impl Default for EvaluationSection {
    fn default() -> Self {
        EvaluationSection {
            start_hour: 0,
            hours: HOURS_PER_YEAR,
        }
    }
}

impl ExperimentConfig {
    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let base = path.parent().unwrap_or(Path::new("."));
        Self::parse(&text, base).map_err(|e| match e {
            Error::Schema { msg, .. } => Error::schema(path, msg),
            other => other,
        })
    }

    /// Like [`ExperimentConfig::load`], then apply `dotted.key=value`
    /// overrides (values in TOML syntax; bare words are taken as strings).
    pub fn load_with_overrides(path: impl AsRef<Path>, overrides: &[String]) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let mut table: toml::Table = toml::from_str(&text).map_err(|e| Error::schema(path, e.to_string()))?;
        for o in overrides {
            apply_override(&mut table, o).map_err(|msg| Error::schema(path, msg))?;
        }
        let base = path.parent().unwrap_or(Path::new("."));
        Self::from_table(table, base).map_err(|e| match e {
            Error::Schema { msg, .. } => Error::schema(path, msg),
            other => other,
        })
    }

    pub fn parse(text: &str, base_dir: &Path) -> Result<Self> {
        let table: toml::Table = toml::from_str(text).map_err(|e| Error::schema("<config>", e.to_string()))?;
        Self::from_table(table, base_dir)
    }

    fn from_table(table: toml::Table, base_dir: &Path) -> Result<Self> {
        let mut cfg: ExperimentConfig = table
            .try_into()
            .map_err(|e: toml::de::Error| Error::schema("<config>", e.to_string()))?;
        cfg.network = base_dir.join(&cfg.network);
        cfg.profiles = cfg.profiles.map(|p| base_dir.join(p));
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        self.agent.validate()?;
        self.training.scenarios.validate()?;
        if let Some(curve) = &self.droop {
            curve.validate()?;
        }
        let EvaluationSection { start_hour, hours } = self.evaluation;
        if hours == 0 || start_hour + hours > HOURS_PER_YEAR {
            return Err(Error::Parameter(format!(
                "evaluation slice {start_hour}..{} must be non-empty and within one year",
                start_hour + hours
            )));
        }
        Ok(())
    }

    /// Load the network (applying any droop override) and build its admittance.
    pub fn feeder(&self) -> Result<Arc<Feeder>> {
        let mut network = load_network(&self.network)?;
        if let Some(curve) = self.droop {
            network = network.with_droop(curve)?;
        }
        Ok(Arc::new(Feeder::new(network)?))
    }

    pub fn profiles(&self) -> Result<ProfileSet> {
        match &self.profiles {
            Some(path) => scenario::load_profiles(path),
            None => Ok(scenario::synthetic_year(self.profile_seed)),
        }
    }

    pub fn hours(&self) -> std::ops::Range<usize> {
        self.evaluation.start_hour..self.evaluation.start_hour + self.evaluation.hours
    }

    pub fn trainer(&self, feeder: Arc<Feeder>, seed: u64) -> Result<Trainer> {
        Trainer::new(
            feeder,
            self.solver,
            self.reward,
            self.agent.clone(),
            self.training.clone(),
            seed,
        )
    }
}

fn apply_override(table: &mut toml::Table, spec: &str) -> std::result::Result<(), String> {
    let (key, raw) = spec
        .split_once('=')
        .ok_or_else(|| format!("override `{spec}` is not of the form key=value"))?;
    let value = toml::from_str::<toml::Table>(&format!("v = {}", raw.trim()))
        .ok()
        .and_then(|mut t| t.remove("v"))
        .unwrap_or_else(|| toml::Value::String(raw.trim().to_string()));
    let parts: Vec<&str> = key.trim().split('.').collect();
    let (last, parents) = parts.split_last().expect("split yields at least one part");
    let mut node = table;
    for p in parents {
        node = node
            .entry(p.to_string())
            .or_insert_with(|| toml::Value::Table(toml::Table::new()))
            .as_table_mut()
            .ok_or_else(|| format!("override `{spec}`: `{p}` is not a table"))?;
    }
    node.insert(last.to_string(), value);
    Ok(())
}

/// Train an agent per the config, drawing episode scenarios from the
/// configured category mixture.
pub fn train(
    cfg: &ExperimentConfig,
    feeder: Arc<Feeder>,
    seed: u64,
    checkpoint_dir: Option<&Path>,
) -> Result<(Agent, TrainingLog)> {
    let mut trainer = cfg.trainer(feeder.clone(), seed)?;
    let scenarios = cfg.training.scenarios.clone();
    let log = trainer.train(
        |rng: &mut ChaCha8Rng| {
            let category = scenarios.sample_category(rng);
            scenario::sample_training_scenario(&feeder.network, &scenarios, category, rng)
        },
        checkpoint_dir,
    )?;
    Ok((trainer.agent, log))
}

// ---------------------------------------------------------------------------
// Evaluation

#[derive(Debug, Clone)]
pub enum CaseMode {
    /// Unity power factor.
    Baseline,
    /// Every inverter follows its local droop curve (fixed point).
    VoltVar,
    /// One deterministic actor pass on the unity-power-factor state.
    Ddpg(Arc<Agent>),
}

impl CaseMode {
    pub fn name(&self) -> &'static str {
        match self {
            CaseMode::Baseline => "Baseline",
            CaseMode::VoltVar => "Volt-Var",
            CaseMode::Ddpg(_) => "DDPG",
        }
    }
}

impl fmt::Display for CaseMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

/// Shared evaluation settings.
#[derive(Debug, Clone, Copy)]
pub struct EvalSettings {
    pub solver: SolverOptions,
    pub droop: DroopOptions,
    pub reward: RewardConfig,
}

impl From<&ExperimentConfig> for EvalSettings {
    fn from(cfg: &ExperimentConfig) -> Self {
        EvalSettings {
            solver: cfg.solver,
            droop: cfg.droop_solver,
            reward: cfg.reward,
        }
    }
}

/// Outcome of one evaluated hour. Energies are over the one-hour snapshot.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HourRecord {
    pub case: String,
    pub hour: usize,
    pub load_scale: f64,
    pub pv_norm: f64,
    pub converged: bool,
    /// Droop fixed-point iterations (Volt-Var only; 0 otherwise).
    pub droop_iterations: usize,
    /// Droop self-consistency residual in p.u. Q (Volt-Var only).
    pub droop_residual: f64,
    pub droop_converged: bool,
    pub undervoltages: usize,
    pub overvoltages: usize,
    pub min_vm: f64,
    pub max_vm: f64,
    pub pv_kwh: f64,
    pub curtailment_kwh: f64,
    pub losses_kwh: f64,
    pub q_kvar: f64,
}

fn kwh(pu: f64, network: &NetworkModel) -> f64 {
    pu * network.mva_base() * 1000.0
}

/// Evaluate one hour under `mode`.
pub fn evaluate_hour(
    feeder: &Arc<Feeder>,
    profiles: &ProfileSet,
    hour: usize,
    mode: &CaseMode,
    settings: &EvalSettings,
) -> Result<HourRecord> {
    let network = &feeder.network;
    let scenario = scenario::scenario_at(network, profiles, hour)?;
    // reference PV delivery at unity power factor
    let baseline_inverters = inverter::dispatch(network, &scenario, &vec![0.0; network.pvs().len()]);
    let baseline_pv: f64 = baseline_inverters.iter().map(|s| s.p_out).sum();

    let mut droop = (0usize, 0.0f64, true);
    let (solution, inverters): (PowerFlowSolution, Vec<InverterState>) = match mode {
        CaseMode::Baseline => {
            let inj = network.injections(&scenario, &baseline_inverters)?;
            (
                power_flow::solve(network, &feeder.y, &inj, &settings.solver)?,
                baseline_inverters,
            )
        }
        CaseMode::VoltVar => {
            let eq =
                inverter::solve_droop_equilibrium(network, &feeder.y, &scenario, &settings.solver, &settings.droop)?;
            droop = (eq.iterations, eq.residual, eq.converged);
            (eq.solution, eq.inverters)
        }
        CaseMode::Ddpg(agent) => ddpg_hour(feeder, scenario.clone(), agent, settings)?,
    };

    let bounds: &ZoneBounds = &settings.reward.bounds;
    let (mut under, mut over) = (0, 0);
    if solution.converged {
        for &v in &solution.vm {
            if classify_zone(v, bounds) != Zone::Normal {
                if v < bounds.normal_lo {
                    under += 1;
                } else {
                    over += 1;
                }
            }
        }
    }
    let pv: f64 = inverters.iter().map(|s| s.p_out).sum();
    let q: f64 = inverters.iter().map(|s| s.q_cmd).sum();
    let (min_vm, max_vm) = if solution.converged {
        solution
            .vm
            .iter()
            .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), &v| {
                (lo.min(v), hi.max(v))
            })
    } else {
        (f64::NAN, f64::NAN)
    };
    Ok(HourRecord {
        case: mode.name().to_string(),
        hour,
        load_scale: profiles.load[hour],
        pv_norm: profiles.pv[hour],
        converged: solution.converged,
        droop_iterations: droop.0,
        droop_residual: droop.1,
        droop_converged: droop.2,
        undervoltages: under,
        overvoltages: over,
        min_vm,
        max_vm,
        pv_kwh: kwh(pv, network),
        curtailment_kwh: kwh(baseline_pv - pv, network),
        losses_kwh: if solution.converged {
            kwh(solution.total_loss_p, network)
        } else {
            f64::NAN
        },
        q_kvar: kwh(q, network),
    })
}

fn ddpg_hour(
    feeder: &Arc<Feeder>,
    scenario: Scenario,
    agent: &Agent,
    settings: &EvalSettings,
) -> Result<(PowerFlowSolution, Vec<InverterState>)> {
    let mut env = GridEnv::new(feeder.clone(), settings.solver, settings.reward);
    let state = match env.reset(scenario.clone()) {
        Ok(s) => s,
        Err(Error::Contract(msg)) => {
            log::warn!("{msg}");
            let inverters = inverter::dispatch(&feeder.network, &scenario, &vec![0.0; feeder.network.pvs().len()]);
            let inj = feeder.network.injections(&scenario, &inverters)?;
            return Ok((
                power_flow::solve(&feeder.network, &feeder.y, &inj, &settings.solver)?,
                inverters,
            ));
        }
        Err(e) => return Err(e),
    };
    let action = agent.policy(&state)?;
    let out = env.step(&action)?;
    Ok((out.solution, out.inverters))
}

/// Evaluate `hours` in parallel; records come back ordered by hour.
pub fn evaluate_case(
    feeder: &Arc<Feeder>,
    profiles: &ProfileSet,
    hours: std::ops::Range<usize>,
    mode: &CaseMode,
    settings: &EvalSettings,
) -> Result<(CaseMetrics, Vec<HourRecord>)> {
    if hours.end > profiles.len() {
        return Err(Error::Parameter(format!(
            "hours {}..{} exceed the {}-hour profile",
            hours.start,
            hours.end,
            profiles.len()
        )));
    }
    let records: Vec<HourRecord> = hours
        .into_par_iter()
        .map(|h| evaluate_hour(feeder, profiles, h, mode, settings))
        .collect::<Result<_>>()?;
    let metrics = CaseMetrics::aggregate(mode.name(), &records);
    for r in records.iter().filter(|r| !r.converged) {
        log::warn!("{}: power flow did not converge at hour {}", r.case, r.hour);
    }
    Ok((metrics, records))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CaseMetrics {
    pub case: String,
    pub hours: usize,
    /// Bus-hours below the normal band.
    pub undervoltage_count: usize,
    /// Bus-hours above the normal band.
    pub overvoltage_count: usize,
    pub curtailment_kwh: f64,
    /// Sum over converged hours.
    pub losses_kwh: f64,
    pub max_vm: f64,
    pub min_vm: f64,
    pub nonconverged_hours: usize,
    pub droop_unconverged_hours: usize,
    pub max_droop_iterations: usize,
    pub max_droop_residual: f64,
}

impl CaseMetrics {
    pub fn aggregate(case: &str, records: &[HourRecord]) -> Self {
        let conv = || records.iter().filter(|r| r.converged);
        CaseMetrics {
            case: case.to_string(),
            hours: records.len(),
            undervoltage_count: records.iter().map(|r| r.undervoltages).sum(),
            overvoltage_count: records.iter().map(|r| r.overvoltages).sum(),
            curtailment_kwh: records.iter().map(|r| r.curtailment_kwh).sum(),
            losses_kwh: conv().map(|r| r.losses_kwh).sum(),
            max_vm: conv().map(|r| r.max_vm).fold(f64::NEG_INFINITY, f64::max),
            min_vm: conv().map(|r| r.min_vm).fold(f64::INFINITY, f64::min),
            nonconverged_hours: records.iter().filter(|r| !r.converged).count(),
            droop_unconverged_hours: records.iter().filter(|r| !r.droop_converged).count(),
            max_droop_iterations: records.iter().map(|r| r.droop_iterations).max().unwrap_or(0),
            max_droop_residual: records.iter().map(|r| r.droop_residual).fold(0.0, f64::max),
        }
    }

    pub fn violations(&self) -> usize {
        self.undervoltage_count + self.overvoltage_count
    }
}

/// Aligned comparison table, one row per case.
pub fn format_table(metrics: &[CaseMetrics]) -> String {
    let header = [
        "Case",
        "# Under-voltages",
        "# Over-voltages",
        "PV Curtailment (kWh)",
        "System Losses (kWh)",
        "Max V (pu)",
        "Min V (pu)",
        "Non-converged",
    ];
    let rows: Vec<[String; 8]> = metrics
        .iter()
        .map(|m| {
            [
                m.case.clone(),
                m.undervoltage_count.to_string(),
                m.overvoltage_count.to_string(),
                format!("{:.1}", m.curtailment_kwh),
                format!("{:.1}", m.losses_kwh),
                format!("{:.4}", m.max_vm),
                format!("{:.4}", m.min_vm),
                m.nonconverged_hours.to_string(),
            ]
        })
        .collect();
    let widths: Vec<usize> = (0..header.len())
        .map(|c| {
            rows.iter()
                .map(|r| r[c].len())
                .chain([header[c].len()])
                .max()
                .unwrap_or(0)
        })
        .collect();
    let mut out = String::new();
    let line = |cells: &[&str], out: &mut String| {
        for (c, (cell, w)) in cells.iter().zip(&widths).enumerate() {
            if c == 0 {
                let _ = write!(out, "{cell:<w$}");
            } else {
                let _ = write!(out, "  {cell:>w$}");
            }
        }
        out.push('\n');
    };
    line(&header, &mut out);
    out.push_str(&"-".repeat(widths.iter().sum::<usize>() + 2 * (widths.len() - 1)));
    out.push('\n');
    for r in &rows {
        line(&r.iter().map(String::as_str).collect::<Vec<_>>(), &mut out);
    }
    out
}

/// Per-hour records for every case as CSV, case by case in hour order.
pub fn write_records(records: &[Vec<HourRecord>], out: impl Write) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    for case in records {
        for r in case {
            w.serialize(r)
                .map_err(|e| Error::Contract(format!("writing records: {e}")))?;
        }
    }
    w.flush().map_err(|e| Error::io("<records>", e))
}

/// Print the table to stdout and optionally write it and the records to `dir`.
pub fn report(metrics: &[CaseMetrics], records: &[Vec<HourRecord>], dir: Option<&Path>) -> Result<String> {
    if metrics.is_empty() {
        return Err(Error::Contract("report needs at least one evaluated case".into()));
    }
    let table = format_table(metrics);
    if let Some(dir) = dir {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let p = dir.join("summary.txt");
        std::fs::write(&p, &table).map_err(|e| Error::io(&p, e))?;
        let p = dir.join("summary.json");
        let json = serde_json::to_string_pretty(metrics).map_err(|e| Error::Contract(e.to_string()))?;
        std::fs::write(&p, json).map_err(|e| Error::io(&p, e))?;
        let p = dir.join("hourly.csv");
        let f = std::fs::File::create(&p).map_err(|e| Error::io(&p, e))?;
        write_records(records, std::io::BufWriter::new(f))?;
    }
    Ok(table)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn record(case: &str, hour: usize, under: usize, over: usize, curt: f64, loss: f64, converged: bool) -> HourRecord {
        HourRecord {
            case: case.into(),
            hour,
            load_scale: 0.5,
            pv_norm: 0.5,
            converged,
            droop_iterations: 0,
            droop_residual: 0.0,
            droop_converged: true,
            undervoltages: under,
            overvoltages: over,
            min_vm: 0.97,
            max_vm: 1.03,
            pv_kwh: 0.0,
            curtailment_kwh: curt,
            losses_kwh: if converged { loss } else { f64::NAN },
            q_kvar: 0.0,
        }
    }

    #[test]
    fn aggregate_sums_hourly_records_exactly() {
        let recs = vec![
            record("x", 0, 1, 0, 0.25, 10.5, true),
            record("x", 1, 0, 3, 0.5, 11.25, true),
            record("x", 2, 0, 0, 0.0, 0.0, false),
        ];
        let m = CaseMetrics::aggregate("x", &recs);
        assert_eq!(m.undervoltage_count, 1);
        assert_eq!(m.overvoltage_count, 3);
        assert_eq!(m.violations(), 4);
        assert_eq!(m.curtailment_kwh, 0.75);
        assert_eq!(m.losses_kwh, 21.75);
        assert_eq!(m.nonconverged_hours, 1);
    }

    #[test]
    fn table_has_one_row_per_case() {
        let m = CaseMetrics::aggregate("Baseline", &[record("Baseline", 0, 0, 2, 0.0, 5.0, true)]);
        let t = format_table(std::slice::from_ref(&m));
        assert_eq!(t.lines().count(), 3);
        let names = ["Baseline", "Volt-Var", "DDPG"];
        let ms: Vec<CaseMetrics> = names
            .iter()
            .map(|n| CaseMetrics {
                case: n.to_string(),
                ..m.clone()
            })
            .collect();
        let t = format_table(&ms);
        let rows: Vec<&str> = t.lines().skip(2).collect();
        assert_eq!(rows.len(), 3);
        for (row, name) in rows.iter().zip(names) {
            assert!(row.starts_with(name));
        }
        let header = t.lines().next().unwrap();
        let order = ["Under", "Over", "Curtailment", "Losses"].map(|k| header.find(k).unwrap());
        assert!(order.windows(2).all(|w| w[0] < w[1]));
    }

    #[test]
    fn record_file_has_row_per_hour_and_case() {
        let cases: Vec<Vec<HourRecord>> = (0..3)
            .map(|c| {
                (0..7)
                    .map(|h| record(&format!("c{c}"), h, 0, 0, 0.0, 1.0, true))
                    .collect()
            })
            .collect();
        let mut buf = Vec::new();
        write_records(&cases, &mut buf).unwrap();
        let text = String::from_utf8(buf).unwrap();
        assert_eq!(text.lines().count(), 1 + 3 * 7);
    }

    #[test]
    fn config_paths_are_relative_to_the_file() {
        let text = r#"
            network = "net.toml"
            profiles = "year.csv"
            [evaluation]
            start_hour = 100
            hours = 50
            [agent]
            gamma = 0.5
            [training]
            episodes = 7
            [training.termination]
            max_iters = 40
        "#;
        let cfg = ExperimentConfig::parse(text, Path::new("/tmp/exp")).unwrap();
        assert_eq!(cfg.network, Path::new("/tmp/exp/net.toml"));
        assert_eq!(cfg.profiles.as_deref(), Some(Path::new("/tmp/exp/year.csv")));
        assert_eq!(cfg.hours(), 100..150);
        assert_eq!(cfg.agent.gamma, 0.5);
        assert_eq!(cfg.agent.tau, DdpgConfig::default().tau);
        assert_eq!(cfg.training.episodes, 7);
        assert_eq!(cfg.training.termination.max_iters, 40);
        assert_eq!(cfg.training.termination.window, 5);
    }

    #[test]
    fn overrides_reach_nested_keys() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("exp.toml");
        std::fs::write(&path, "network = \"n.toml\"\n[agent]\ngamma = 0.9\n").unwrap();
        let cfg = ExperimentConfig::load_with_overrides(
            &path,
            &[
                "agent.gamma=0.25".into(),
                "training.termination.max_iters=12".into(),
                "profiles=year.csv".into(),
                "agent.hidden=[8, 8]".into(),
            ],
        )
        .unwrap();
        assert_eq!(cfg.agent.gamma, 0.25);
        assert_eq!(cfg.agent.hidden, vec![8, 8]);
        assert_eq!(cfg.training.termination.max_iters, 12);
        assert_eq!(cfg.profiles, Some(dir.path().join("year.csv")));
        let bad = ExperimentConfig::load_with_overrides(&path, &["agent.gamma".into()]);
        assert!(matches!(bad, Err(Error::Schema { .. })));
    }

    #[test]
    fn config_rejects_bad_slices_and_keys() {
        let bad = ExperimentConfig::parse(
            "network = \"n\"\n[evaluation]\nstart_hour = 8700\nhours = 100\n",
            Path::new("."),
        );
        assert!(matches!(bad, Err(Error::Parameter(_))));
        let bad = ExperimentConfig::parse("network = \"n\"\nnetwrk = 1\n", Path::new("."));
        assert!(matches!(bad, Err(Error::Schema { .. })));
    }
}
