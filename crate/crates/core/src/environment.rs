//! Reinforcement-learning environment around the feeder.
//!
//! Within an episode the load and PV availability are frozen. Each step maps
//! a normalised reactive-power action per inverter to a new power-flow
//! solution, state vector and reward.
//!
//! State layout (dimension `D = N + 2M + 2L` for `N` buses, `M` inverters,
//! `L` loads):
//!
//! ```text
//! [ vm_0 .. vm_{N-1} | p_out_0, q_0, .., p_out_{M-1}, q_{M-1} | p_load_0, q_load_0, .. ]
//! ```

use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::grid_model::{Feeder, NetworkModel};
use crate::inverter::{self, InverterState};
use crate::power_flow::{self, PowerFlowSolution, SolverOptions};
use crate::scenario::Scenario;
use crate::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Zone {
    Normal,
    Zone1,
    Zone2,
}

/// Voltage band limits. Ties go to the milder zone.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ZoneBounds {
    pub normal_lo: f64,
    pub normal_hi: f64,
    pub zone1_lo: f64,
    pub zone1_hi: f64,
}

impl Default for ZoneBounds {
    fn default() -> Self {
        ZoneBounds {
            normal_lo: 0.95,
            normal_hi: 1.05,
            zone1_lo: 0.90,
            zone1_hi: 1.10,
        }
    }
}

pub fn classify_zone(vm: f64, bounds: &ZoneBounds) -> Zone {
    if vm >= bounds.normal_lo && vm <= bounds.normal_hi {
        Zone::Normal
    } else if vm >= bounds.zone1_lo && vm <= bounds.zone1_hi {
        Zone::Zone1
    } else {
        Zone::Zone2
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RewardConfig {
    pub zone1_penalty: f64,
    pub zone2_penalty: f64,
    /// Scale of the reactive-utilisation term, per inverter.
    pub c: f64,
    pub bounds: ZoneBounds,
    /// Per-bus penalty charged on every bus when the flow fails to converge.
    pub nonconverged_penalty: f64,
}

impl Default for RewardConfig {
    fn default() -> Self {
        RewardConfig {
            zone1_penalty: -400.0,
            zone2_penalty: -600.0,
            c: 200.0,
            bounds: ZoneBounds::default(),
            nonconverged_penalty: -600.0,
        }
    }
}

impl RewardConfig {
    fn zone_penalty(&self, zone: Zone) -> f64 {
        match zone {
            Zone::Normal => 0.0,
            Zone::Zone1 => self.zone1_penalty,
            Zone::Zone2 => self.zone2_penalty,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RewardBreakdown {
    pub r_v_total: f64,
    pub r_q: f64,
    pub r: f64,
    pub per_bus_zone: Vec<Zone>,
}

/// Voltage penalties summed over every bus (slack included) plus
/// `C * (1 - |Q_i| / S_i)` per inverter.
pub fn reward(
    network: &NetworkModel,
    solution: &PowerFlowSolution,
    inverters: &[InverterState],
    cfg: &RewardConfig,
) -> RewardBreakdown {
    let n = network.n_buses();
    if !solution.converged {
        let r = cfg.nonconverged_penalty * n as f64;
        return RewardBreakdown {
            r_v_total: r,
            r_q: 0.0,
            r,
            per_bus_zone: vec![Zone::Zone2; n],
        };
    }
    let per_bus_zone: Vec<Zone> = solution.vm.iter().map(|&v| classify_zone(v, &cfg.bounds)).collect();
    let r_v_total = per_bus_zone.iter().map(|&z| cfg.zone_penalty(z)).sum::<f64>();
    let r_q = network
        .pvs()
        .iter()
        .zip(inverters)
        .map(|(pv, st)| cfg.c * (1.0 - st.q_cmd.abs() / pv.spec.s_rating))
        .sum::<f64>();
    RewardBreakdown {
        r_v_total,
        r_q,
        r: r_v_total + r_q,
        per_bus_zone,
    }
}

pub fn state_dim(network: &NetworkModel) -> usize {
    network.n_buses() + 2 * network.pvs().len() + 2 * network.loads().len()
}

/// Flatten a solved operating point into the agent's observation.
pub fn assemble_state(
    network: &NetworkModel,
    scenario: &Scenario,
    solution: &PowerFlowSolution,
    inverters: &[InverterState],
) -> Vec<f64> {
    let mut s = Vec::with_capacity(state_dim(network));
    s.extend(solution.vm.iter().map(|&v| if v.is_finite() { v } else { 0.0 }));
    for st in inverters {
        s.push(st.p_out);
        s.push(st.q_cmd);
    }
    for (load, scale) in network.loads().iter().zip(&scenario.load_scale) {
        s.push(scale * load.p_base);
        s.push(scale * load.q_base);
    }
    s
}

/// Result of applying one action.
#[derive(Debug, Clone)]
pub struct StepOutcome {
    pub state: Vec<f64>,
    pub reward: RewardBreakdown,
    pub solution: PowerFlowSolution,
    pub inverters: Vec<InverterState>,
}

/// One environment instance; cheap to create, shares the feeder.
#[derive(Debug, Clone)]
pub struct GridEnv {
    feeder: Arc<Feeder>,
    solver: SolverOptions,
    reward: RewardConfig,
    scenario: Option<Scenario>,
}

impl GridEnv {
    pub fn new(feeder: Arc<Feeder>, solver: SolverOptions, reward: RewardConfig) -> Self {
        GridEnv {
            feeder,
            solver,
            reward,
            scenario: None,
        }
    }

    pub fn network(&self) -> &NetworkModel {
        &self.feeder.network
    }

    pub fn state_dim(&self) -> usize {
        state_dim(&self.feeder.network)
    }

    pub fn action_dim(&self) -> usize {
        self.feeder.network.pvs().len()
    }

    pub fn reward_config(&self) -> &RewardConfig {
        &self.reward
    }

    pub fn scenario(&self) -> Option<&Scenario> {
        self.scenario.as_ref()
    }

    /// Start an episode: solve the unity-power-factor flow and return the
    /// initial state.
    pub fn reset(&mut self, scenario: Scenario) -> Result<Vec<f64>> {
        scenario.validate(&self.feeder.network)?;
        self.scenario = Some(scenario);
        let out = self.evaluate(&vec![0.0; self.action_dim()])?;
        if !out.solution.converged {
            let tag = self.scenario.take().map(|s| s.tag).unwrap_or_default();
            return Err(Error::Contract(format!(
                "initial power flow for scenario `{tag}` did not converge after {} iterations (mismatch {:.3e})",
                out.solution.iterations, out.solution.max_mismatch
            )));
        }
        Ok(out.state)
    }

    /// Apply an action (clamped to `[-1, 1]`) as `Q_i = a_i S_i`.
    pub fn step(&mut self, action: &[f64]) -> Result<StepOutcome> {
        self.evaluate(action)
    }

    fn evaluate(&self, action: &[f64]) -> Result<StepOutcome> {
        let scenario = self
            .scenario
            .as_ref()
            .ok_or_else(|| Error::Contract("step called before reset".into()))?;
        let net = &self.feeder.network;
        if action.len() != net.pvs().len() {
            return Err(Error::Dimension {
                what: "action",
                expected: net.pvs().len(),
                got: action.len(),
            });
        }
        let q: Vec<f64> = net
            .pvs()
            .iter()
            .zip(action)
            .map(|(pv, &a)| {
                let a = if a.is_nan() { 0.0 } else { a.clamp(-1.0, 1.0) };
                a * pv.spec.s_rating
            })
            .collect();
        let inverters = inverter::dispatch(net, scenario, &q);
        let inj = net.injections(scenario, &inverters)?;
        let solution = match power_flow::solve(net, &self.feeder.y, &inj, &self.solver) {
            Ok(sol) => sol,
            Err(Error::SingularJacobian { iteration }) => {
                log::debug!("singular Jacobian at iteration {iteration}; treating as non-converged");
                failed_solution(net.n_buses(), iteration, &self.solver)
            }
            Err(e) => return Err(e),
        };
        let reward = reward(net, &solution, &inverters, &self.reward);
        let state = assemble_state(net, scenario, &solution, &inverters);
        Ok(StepOutcome {
            state,
            reward,
            solution,
            inverters,
        })
    }
}

fn failed_solution(n: usize, iterations: usize, opts: &SolverOptions) -> PowerFlowSolution {
    let mut vm = vec![1.0; n];
    vm[0] = opts.slack_vm;
    PowerFlowSolution {
        vm,
        va: vec![opts.slack_va; n],
        slack_p: f64::NAN,
        slack_q: f64::NAN,
        total_loss_p: f64::NAN,
        converged: false,
        iterations,
        max_mismatch: f64::INFINITY,
    }
}
