//! Smart-inverter capability, VAR-priority curtailment and the autonomous
//! Volt-Var droop controller.

use serde::{Deserialize, Serialize};

use crate::grid_model::{AdmittanceMatrix, NetworkModel};
use crate::power_flow::{self, PowerFlowSolution, SolverOptions};
use crate::scenario::Scenario;
use crate::{Error, Result};

/// Slack on the capability circle check.
pub const CIRCLE_TOL: f64 = 1e-12;

/// Ratings of one PV smart inverter, in per-unit of the system MVA base.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct InverterSpec {
    pub bus: usize,
    /// AC apparent-power rating `S`.
    pub s_rating: f64,
    /// Peak DC (panel) real power.
    pub dc_rating: f64,
}

impl InverterSpec {
    pub fn new(bus: usize, s_rating: f64, dc_rating: f64) -> Result<Self> {
        let spec = InverterSpec {
            bus,
            s_rating,
            dc_rating,
        };
        spec.validate()?;
        Ok(spec)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.s_rating > 0.0 && self.s_rating.is_finite()) {
            return Err(Error::Parameter(format!(
                "inverter at bus {}: s_rating must be > 0, got {}",
                self.bus, self.s_rating
            )));
        }
        if !(self.dc_rating > 0.0 && self.dc_rating.is_finite()) {
            return Err(Error::Parameter(format!(
                "inverter at bus {}: dc_rating must be > 0, got {}",
                self.bus, self.dc_rating
            )));
        }
        Ok(())
    }
}

/// Operating point of one inverter after VAR-priority dispatch.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct InverterState {
    /// Available PV power from irradiance.
    pub p_avail: f64,
    /// Reactive output, positive = injection.
    pub q_cmd: f64,
    /// Real power actually delivered.
    pub p_out: f64,
    /// `p_avail - p_out`.
    pub curtailed: f64,
    /// Set when the requested Q exceeded the rating and had to be clamped.
    pub clamped: bool,
}

impl InverterState {
    pub fn within_circle(&self, spec: &InverterSpec) -> bool {
        self.p_out * self.p_out + self.q_cmd * self.q_cmd <= spec.s_rating * spec.s_rating + CIRCLE_TOL
    }
}

/// Honour the reactive command first and curtail real power to stay inside
/// the capability circle `P^2 + Q^2 <= S^2`.
pub fn apply_var_priority(spec: &InverterSpec, p_avail: f64, q_cmd: f64) -> InverterState {
    let s = spec.s_rating;
    let clamped = q_cmd.abs() > s;
    if clamped {
        log::warn!(
            "inverter at bus {}: |Q| command {q_cmd} exceeds rating {s}, clamping",
            spec.bus
        );
    }
    let q = q_cmd.clamp(-s, s);
    let p_avail = p_avail.max(0.0);
    let headroom = (s * s - q * q).max(0.0).sqrt();
    let p_out = p_avail.min(headroom);
    InverterState {
        p_avail,
        q_cmd: q,
        p_out,
        curtailed: p_avail - p_out,
        clamped,
    }
}

/// Piecewise-linear Volt-Var characteristic.
///
/// Full injection `q_max * S` below `v1`, ramping to zero at `v2`, a deadband
/// on `[v2, v3]`, then ramping to full absorption `-q_max * S` at `v4`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DroopCurve {
    pub v1: f64,
    pub v2: f64,
    pub v3: f64,
    pub v4: f64,
    /// Saturation level as a fraction of the inverter rating.
    pub q_max: f64,
}

impl Default for DroopCurve {
    fn default() -> Self {
        DroopCurve {
            v1: 0.92,
            v2: 0.98,
            v3: 1.02,
            v4: 1.08,
            q_max: 1.0,
        }
    }
}

impl DroopCurve {
    pub fn validate(&self) -> Result<()> {
        let ok = self.v1 < self.v2
            && self.v2 <= self.v3
            && self.v3 < self.v4
            && self.q_max >= 0.0
            && self.q_max <= 1.0
            && [self.v1, self.v2, self.v3, self.v4].iter().all(|v| v.is_finite());
        if ok {
            Ok(())
        } else {
            Err(Error::Parameter(format!(
                "droop curve needs v1 < v2 <= v3 < v4 and 0 <= q_max <= 1, got {self:?}"
            )))
        }
    }
}

/// Reactive setpoint dictated by the droop curve at the local PCC voltage.
///
/// The VAR-priority mode does not make Q depend on available PV power, so
/// only the rating enters.
pub fn droop_q(curve: &DroopCurve, spec: &InverterSpec, v_local: f64) -> f64 {
    let q_lim = curve.q_max * spec.s_rating;
    if v_local <= curve.v1 {
        q_lim
    } else if v_local < curve.v2 {
        q_lim * (curve.v2 - v_local) / (curve.v2 - curve.v1)
    } else if v_local <= curve.v3 {
        0.0
    } else if v_local < curve.v4 {
        -q_lim * (v_local - curve.v3) / (curve.v4 - curve.v3)
    } else {
        -q_lim
    }
}

/// Settings for the droop/power-flow fixed point.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DroopOptions {
    /// Fraction of the droop correction applied per iteration.
    pub damping: f64,
    /// Convergence bound on `max |droop_q(v) - Q|` across inverters.
    pub tolerance: f64,
    pub max_iter: usize,
}

impl Default for DroopOptions {
    fn default() -> Self {
        DroopOptions {
            damping: 0.5,
            tolerance: 1e-6,
            max_iter: 100,
        }
    }
}

#[derive(Debug, Clone)]
pub struct DroopEquilibrium {
    pub solution: PowerFlowSolution,
    pub inverters: Vec<InverterState>,
    pub converged: bool,
    pub iterations: usize,
    /// `max |droop_q(v) - Q|` at the returned iterate.
    pub residual: f64,
}

/// Iterate power flow and local droop responses to a fixed point.
///
/// Each pass solves the flow with the current Q set, reads every inverter's
/// PCC voltage and moves Q a `damping` fraction toward the droop value.
/// Convergence is declared on the undamped residual, so a converged result
/// is self-consistent to `tolerance` without further iterations.
pub fn solve_droop_equilibrium(
    network: &NetworkModel,
    y: &AdmittanceMatrix,
    scenario: &Scenario,
    solver: &SolverOptions,
    opts: &DroopOptions,
) -> Result<DroopEquilibrium> {
    let pvs = network.pvs();
    let mut q: Vec<f64> = vec![0.0; pvs.len()];
    let mut iterations = 0;
    loop {
        let inverters = dispatch(network, scenario, &q);
        let inj = network.injections(scenario, &inverters)?;
        let solution = power_flow::solve(network, y, &inj, solver)?;
        let target: Vec<f64> = pvs
            .iter()
            .map(|pv| droop_q(&pv.droop, &pv.spec, solution.vm[pv.spec.bus]))
            .collect();
        let residual = target.iter().zip(&q).map(|(t, q)| (t - q).abs()).fold(0.0, f64::max);
        let done = solution.converged && residual <= opts.tolerance;
        if done || iterations >= opts.max_iter || !solution.converged {
            if !done {
                log::debug!(
                    "droop equilibrium stopped after {iterations} iterations, residual {residual:.3e}, flow converged {}",
                    solution.converged
                );
            }
            return Ok(DroopEquilibrium {
                solution,
                inverters,
                converged: done,
                iterations,
                residual,
            });
        }
        for (qi, ti) in q.iter_mut().zip(&target) {
            *qi += opts.damping * (ti - *qi);
        }
        iterations += 1;
    }
}

/// VAR-priority dispatch of every inverter for the given Q commands.
pub fn dispatch(network: &NetworkModel, scenario: &Scenario, q_cmd: &[f64]) -> Vec<InverterState> {
    network
        .pvs()
        .iter()
        .zip(&scenario.pv_avail)
        .zip(q_cmd)
        .map(|((pv, &p), &q)| apply_var_priority(&pv.spec, p, q))
        .collect()
}
