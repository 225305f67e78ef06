//! Polar Newton-Raphson AC power flow.
//!
//! Mismatch equations at every PQ bus `k`:
//!
//! ```text
//! P_k = sum_j |V_k||V_j| (G_kj cos(th_k - th_j) + B_kj sin(th_k - th_j))
//! Q_k = sum_j |V_k||V_j| (G_kj sin(th_k - th_j) - B_kj cos(th_k - th_j))
//! ```
//!
//! The slack bus (index 0) is held at the configured magnitude and angle and
//! absorbs the power imbalance.

use nalgebra::{Complex, DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::grid_model::{AdmittanceMatrix, NetworkModel};
use crate::{Error, Result};

/// Net per-unit injections (generation minus load) per bus.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct InjectionVector {
    pub p: Vec<f64>,
    pub q: Vec<f64>,
}

impl InjectionVector {
    pub fn zeros(n: usize) -> Self {
        InjectionVector {
            p: vec![0.0; n],
            q: vec![0.0; n],
        }
    }

    pub fn len(&self) -> usize {
        self.p.len()
    }

    pub fn is_empty(&self) -> bool {
        self.p.is_empty()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SolverOptions {
    /// Convergence bound on the largest P or Q mismatch (p.u.).
    pub tolerance: f64,
    pub max_iter: usize,
    pub slack_vm: f64,
    pub slack_va: f64,
}

impl Default for SolverOptions {
    fn default() -> Self {
        SolverOptions {
            tolerance: 1e-8,
            max_iter: 50,
            slack_vm: 1.0,
            slack_va: 0.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PowerFlowSolution {
    pub vm: Vec<f64>,
    /// Radians.
    pub va: Vec<f64>,
    pub slack_p: f64,
    pub slack_q: f64,
    /// Sum of real injections over all buses, i.e. network real losses.
    pub total_loss_p: f64,
    pub converged: bool,
    pub iterations: usize,
    pub max_mismatch: f64,
}

/// Computed complex power injection at every bus for the given voltages.
pub fn bus_injections(y: &AdmittanceMatrix, vm: &[f64], va: &[f64]) -> (Vec<f64>, Vec<f64>) {
    let n = y.n();
    let mut p = vec![0.0; n];
    let mut q = vec![0.0; n];
    for k in 0..n {
        let (mut pk, mut qk) = (0.0, 0.0);
        for j in 0..n {
            let (g, b) = (y.g[(k, j)], y.b[(k, j)]);
            if g == 0.0 && b == 0.0 {
                continue;
            }
            let (s, c) = (va[k] - va[j]).sin_cos();
            pk += vm[j] * (g * c + b * s);
            qk += vm[j] * (g * s - b * c);
        }
        p[k] = vm[k] * pk;
        q[k] = vm[k] * qk;
    }
    (p, q)
}

fn mismatch(inj: &InjectionVector, p: &[f64], q: &[f64]) -> (DVector<f64>, f64) {
    let m = p.len() - 1;
    let mut f = DVector::zeros(2 * m);
    let mut worst: f64 = 0.0;
    for k in 1..p.len() {
        let dp = p[k] - inj.p[k];
        let dq = q[k] - inj.q[k];
        f[k - 1] = dp;
        f[m + k - 1] = dq;
        worst = worst.max(dp.abs()).max(dq.abs());
    }
    if f.iter().any(|v| !v.is_finite()) {
        worst = f64::INFINITY;
    }
    (f, worst)
}

/// Full polar Jacobian over PQ buses, unknowns ordered `[th_1..th_n, V_1..V_n]`.
fn jacobian(y: &AdmittanceMatrix, vm: &[f64], va: &[f64], p: &[f64], q: &[f64]) -> DMatrix<f64> {
    let n = vm.len();
    let m = n - 1;
    let mut jac = DMatrix::zeros(2 * m, 2 * m);
    for k in 1..n {
        let r = k - 1;
        for j in 1..n {
            let c = j - 1;
            let (g, b) = (y.g[(k, j)], y.b[(k, j)]);
            if j == k {
                let vk = vm[k];
                jac[(r, c)] = -q[k] - b * vk * vk;
                jac[(r, m + c)] = p[k] / vk + g * vk;
                jac[(m + r, c)] = p[k] - g * vk * vk;
                jac[(m + r, m + c)] = q[k] / vk - b * vk;
            } else {
                if g == 0.0 && b == 0.0 {
                    continue;
                }
                let (s, co) = (va[k] - va[j]).sin_cos();
                let a = g * s - b * co;
                let d = g * co + b * s;
                jac[(r, c)] = vm[k] * vm[j] * a;
                jac[(r, m + c)] = vm[k] * d;
                jac[(m + r, c)] = -vm[k] * vm[j] * d;
                jac[(m + r, m + c)] = vm[k] * a;
            }
        }
    }
    jac
}

/// Solve the power flow from a flat start.
///
/// Non-convergence (iteration limit, divergence to non-finite or
/// non-positive voltages) is reported through `converged = false`; only a
/// singular Jacobian is an error.
pub fn solve(
    network: &NetworkModel,
    y: &AdmittanceMatrix,
    inj: &InjectionVector,
    opts: &SolverOptions,
) -> Result<PowerFlowSolution> {
    let n = network.n_buses();
    if y.n() != n {
        return Err(Error::Dimension {
            what: "admittance matrix",
            expected: n,
            got: y.n(),
        });
    }
    if inj.len() != n || inj.q.len() != n {
        return Err(Error::Dimension {
            what: "injection vector",
            expected: n,
            got: inj.len(),
        });
    }
    let m = n - 1;
    let mut vm = vec![1.0; n];
    let mut va = vec![opts.slack_va; n];
    vm[0] = opts.slack_vm;

    let mut iterations = 0;
    loop {
        let (p, q) = bus_injections(y, &vm, &va);
        let (f, worst) = mismatch(inj, &p, &q);
        let converged = worst <= opts.tolerance;
        let diverged = !worst.is_finite() || vm.iter().any(|&v| v.is_nan() || v <= 0.0);
        if converged || diverged || iterations >= opts.max_iter || m == 0 {
            let total_loss_p = p.iter().sum();
            return Ok(PowerFlowSolution {
                vm,
                va,
                slack_p: p[0],
                slack_q: q[0],
                total_loss_p,
                converged: converged && !diverged,
                iterations,
                max_mismatch: worst,
            });
        }
        let jac = jacobian(y, &vm, &va, &p, &q);
        let dx = jac
            .lu()
            .solve(&(-f))
            .filter(|dx| dx.iter().all(|v| v.is_finite()))
            .ok_or(Error::SingularJacobian { iteration: iterations })?;
        for k in 1..n {
            va[k] += dx[k - 1];
            vm[k] += dx[m + k - 1];
        }
        iterations += 1;
    }
}

/// Per-line flows measured at both ends.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BranchFlow {
    pub from: usize,
    pub to: usize,
    pub p_from: f64,
    pub q_from: f64,
    pub p_to: f64,
    pub q_to: f64,
    /// Series-impedance real loss `|I_series|^2 r`.
    pub loss_p: f64,
}

fn phasor(vm: f64, va: f64) -> Complex<f64> {
    Complex::from_polar(vm, va)
}

pub fn branch_flows(network: &NetworkModel, solution: &PowerFlowSolution) -> Vec<BranchFlow> {
    network
        .lines()
        .iter()
        .map(|line| {
            let (k, j) = (line.from, line.to);
            let vk = phasor(solution.vm[k], solution.va[k]);
            let vj = phasor(solution.vm[j], solution.va[j]);
            let (gs, bs) = line.series_admittance();
            let ys = Complex::new(gs, bs);
            let ysh = Complex::new(0.0, line.shunt_susceptance / 2.0);
            let i_series = ys * (vk - vj);
            let s_from = vk * (i_series + ysh * vk).conj();
            let s_to = vj * (-i_series + ysh * vj).conj();
            BranchFlow {
                from: k,
                to: j,
                p_from: s_from.re,
                q_from: s_from.im,
                p_to: s_to.re,
                q_to: s_to.im,
                loss_p: i_series.norm_sqr() * line.resistance,
            }
        })
        .collect()
}

/// Total series `I^2 R` loss of a converged solution (p.u.).
pub fn compute_losses(network: &NetworkModel, solution: &PowerFlowSolution) -> Result<f64> {
    if !solution.converged {
        return Err(Error::Contract(
            "losses requested for a non-converged power flow".into(),
        ));
    }
    if solution.vm.len() != network.n_buses() {
        return Err(Error::Dimension {
            what: "solution voltages",
            expected: network.n_buses(),
            got: solution.vm.len(),
        });
    }
    Ok(branch_flows(network, solution).iter().map(|b| b.loss_p).sum())
}
