//! Shared test oracles. Everything here works from the raw line list with
//! complex arithmetic, independent of the solver's polar formulation.
#![allow(dead_code)]

use nalgebra::Complex;
use sivolt::grid_model::{Feeder, NetworkModel};
use sivolt::inverter;
use sivolt::power_flow::{InjectionVector, PowerFlowSolution};
use sivolt::scenario::Scenario;

pub type C64 = Complex<f64>;

pub const FIXTURES: [&str; 4] = ["two_bus", "five_bus", "ieee13", "ieee37"];

pub fn feeder(name: &str) -> Feeder {
    Feeder::load(sivolt::data_dir().join(format!("{name}.toml"))).expect("bundled fixture loads")
}

/// Dense complex bus admittance matrix from the line list (pi model).
pub fn complex_ybus(net: &NetworkModel) -> Vec<Vec<C64>> {
    let n = net.n_buses();
    let mut y = vec![vec![C64::new(0.0, 0.0); n]; n];
    for l in net.lines() {
        let ys = C64::new(1.0, 0.0) / C64::new(l.resistance, l.reactance);
        let half = C64::new(0.0, l.shunt_susceptance / 2.0);
        y[l.from][l.from] += ys + half;
        y[l.to][l.to] += ys + half;
        y[l.from][l.to] -= ys;
        y[l.to][l.from] -= ys;
    }
    y
}

fn slack(net: &NetworkModel) -> usize {
    net.buses()
        .iter()
        .position(|b| b.kind == sivolt::grid_model::BusKind::Slack)
        .expect("fixture has a slack bus")
}

/// Plain Gauss-Seidel from a flat start. Returns `(vm, va)`.
pub fn gauss_seidel(net: &NetworkModel, inj: &InjectionVector, slack_vm: f64) -> (Vec<f64>, Vec<f64>) {
    let y = complex_ybus(net);
    let n = net.n_buses();
    let s0 = slack(net);
    let mut v = vec![C64::new(1.0, 0.0); n];
    v[s0] = C64::new(slack_vm, 0.0);
    for _ in 0..500_000 {
        let mut step: f64 = 0.0;
        for i in (0..n).filter(|&i| i != s0) {
            let s = C64::new(inj.p[i], -inj.q[i]);
            let mut acc = s / v[i].conj();
            for k in (0..n).filter(|&k| k != i) {
                acc -= y[i][k] * v[k];
            }
            let next = acc / y[i][i];
            step = step.max((next - v[i]).norm());
            v[i] = next;
        }
        if step < 1e-14 {
            return (
                v.iter().map(|z| z.norm()).collect(),
                v.iter().map(|z| z.arg()).collect(),
            );
        }
    }
    panic!("Gauss-Seidel oracle did not converge");
}

/// Complex power `V_i conj(sum_k Y_ik V_k)` at every bus.
pub fn computed_injections(net: &NetworkModel, vm: &[f64], va: &[f64]) -> Vec<C64> {
    let y = complex_ybus(net);
    let v: Vec<C64> = vm.iter().zip(va).map(|(&m, &a)| C64::from_polar(m, a)).collect();
    (0..v.len())
        .map(|i| {
            let i_inj: C64 = (0..v.len()).map(|k| y[i][k] * v[k]).sum();
            v[i] * i_inj.conj()
        })
        .collect()
}

/// Largest P or Q mismatch over non-slack buses.
pub fn max_residual(net: &NetworkModel, inj: &InjectionVector, sol: &PowerFlowSolution) -> f64 {
    let s0 = slack(net);
    computed_injections(net, &sol.vm, &sol.va)
        .iter()
        .enumerate()
        .filter(|(i, _)| *i != s0)
        .map(|(i, s)| (s.re - inj.p[i]).abs().max((s.im - inj.q[i]).abs()))
        .fold(0.0, f64::max)
}

/// |slack P + sum of specified P - losses|, with losses from branch flows.
pub fn power_balance_error(net: &NetworkModel, inj: &InjectionVector, sol: &PowerFlowSolution) -> f64 {
    let s0 = slack(net);
    let v: Vec<C64> = sol
        .vm
        .iter()
        .zip(&sol.va)
        .map(|(&m, &a)| C64::from_polar(m, a))
        .collect();
    let mut losses = 0.0;
    for l in net.lines() {
        let ys = C64::new(1.0, 0.0) / C64::new(l.resistance, l.reactance);
        let i = (v[l.from] - v[l.to]) * ys;
        losses += i.norm_sqr() * l.resistance;
    }
    let specified: f64 = (0..net.n_buses()).filter(|&i| i != s0).map(|i| inj.p[i]).sum();
    (sol.slack_p + specified - losses).abs()
}

/// Unity-power-factor injections for a uniform scenario.
pub fn unity_injections(net: &NetworkModel, load: f64, pv: f64) -> (Scenario, InjectionVector) {
    let sc = Scenario::uniform(net, load, pv, "test");
    let inv = inverter::dispatch(net, &sc, &vec![0.0; net.pvs().len()]);
    let inj = net.injections(&sc, &inv).expect("consistent dimensions");
    (sc, inj)
}

/// Operating points exercised on every fixture: evening peak, light-load
/// midday, shoulder.
pub const OPERATING_POINTS: [(f64, f64); 4] = [(1.0, 0.0), (0.4, 1.0), (0.6, 0.5), (0.0, 0.0)];
