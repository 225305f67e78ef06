mod common;

use std::collections::HashSet;

use common::{feeder, gauss_seidel, max_residual, power_balance_error, unity_injections, FIXTURES, OPERATING_POINTS};
use proptest::prelude::*;
use serde::Deserialize;
use sivolt::environment::state_dim;
use sivolt::grid_model::BusKind;
use sivolt::power_flow::{self, SolverOptions};

#[test]
fn fixture_inventories() {
    let cases = [
        ("two_bus", 2, 1, 1, 1),
        ("five_bus", 5, 4, 4, 2),
        ("ieee13", 13, 12, 9, 3),
        ("ieee37", 37, 36, 25, 5),
    ];
    for (name, buses, lines, loads, pvs) in cases {
        let f = feeder(name);
        let net = &f.network;
        assert_eq!(net.n_buses(), buses, "{name} buses");
        assert_eq!(net.lines().len(), lines, "{name} lines");
        assert_eq!(net.loads().len(), loads, "{name} loads");
        assert_eq!(net.pvs().len(), pvs, "{name} pvs");
        assert_eq!(net.buses()[0].kind, BusKind::Slack);
    }
}

#[test]
fn ieee37_state_dimension() {
    // 37 bus voltages, (P, Q) for 5 inverters, (P, Q) for 25 loads.
    assert_eq!(state_dim(&feeder("ieee37").network), 37 + 2 * 5 + 2 * 25);
}

#[test]
fn admittance_symmetric_and_sparsity_matches_lines() {
    for name in FIXTURES {
        let f = feeder(name);
        let n = f.network.n_buses();
        let adjacent: HashSet<(usize, usize)> = f
            .network
            .lines()
            .iter()
            .flat_map(|l| [(l.from, l.to), (l.to, l.from)])
            .collect();
        for i in 0..n {
            for k in 0..n {
                assert_eq!(f.y.g[(i, k)], f.y.g[(k, i)], "{name} G[{i},{k}]");
                assert_eq!(f.y.b[(i, k)], f.y.b[(k, i)], "{name} B[{i},{k}]");
                if i != k {
                    let nonzero = f.y.g[(i, k)] != 0.0 || f.y.b[(i, k)] != 0.0;
                    assert_eq!(nonzero, adjacent.contains(&(i, k)), "{name} sparsity at ({i},{k})");
                }
            }
        }
    }
}

#[test]
fn newton_raphson_matches_oracles_on_every_fixture() {
    let opts = SolverOptions::default();
    for name in FIXTURES {
        let f = feeder(name);
        let net = &f.network;
        for (load, pv) in OPERATING_POINTS {
            let (_, inj) = unity_injections(net, load, pv);
            let sol = power_flow::solve(net, &f.y, &inj, &opts).unwrap();
            assert!(sol.converged, "{name} at ({load}, {pv})");
            assert_eq!(sol.vm[0], opts.slack_vm);
            assert_eq!(sol.va[0], opts.slack_va);
            let residual = max_residual(net, &inj, &sol);
            assert!(residual <= 1e-8, "{name} ({load}, {pv}) residual {residual:e}");
            let balance = power_balance_error(net, &inj, &sol);
            assert!(balance <= 1e-8, "{name} ({load}, {pv}) balance {balance:e}");
            let (vm, va) = gauss_seidel(net, &inj, opts.slack_vm);
            for i in 0..net.n_buses() {
                assert!((vm[i] - sol.vm[i]).abs() <= 1e-6, "{name} bus {i} vm");
                assert!((va[i] - sol.va[i]).abs() <= 1e-6, "{name} bus {i} va");
            }
        }
    }
}

#[derive(Deserialize)]
struct GoldenScenario {
    load_scale: f64,
    pv_fraction_of_dc: f64,
}

#[derive(Deserialize)]
struct Golden {
    scenario: GoldenScenario,
    total_loss_pu: f64,
    vm: Vec<f64>,
    va_rad: Vec<f64>,
}

#[test]
fn five_bus_golden_case() {
    let text = std::fs::read_to_string(concat!(env!("CARGO_MANIFEST_DIR"), "/tests/golden/five_bus.json")).unwrap();
    let golden: Golden = serde_json::from_str(&text).unwrap();
    let f = feeder("five_bus");
    let (_, inj) = unity_injections(
        &f.network,
        golden.scenario.load_scale,
        golden.scenario.pv_fraction_of_dc,
    );
    let sol = power_flow::solve(&f.network, &f.y, &inj, &SolverOptions::default()).unwrap();
    assert!(sol.converged);
    for i in 0..5 {
        approx::assert_abs_diff_eq!(sol.vm[i], golden.vm[i], epsilon = 1e-9);
        approx::assert_abs_diff_eq!(sol.va[i], golden.va_rad[i], epsilon = 1e-9);
    }
    approx::assert_abs_diff_eq!(sol.total_loss_p, golden.total_loss_pu, epsilon = 1e-10);
}

fn leaf_buses(net: &sivolt::grid_model::NetworkModel) -> Vec<usize> {
    let mut degree = vec![0usize; net.n_buses()];
    for l in net.lines() {
        degree[l.from] += 1;
        degree[l.to] += 1;
    }
    (1..net.n_buses()).filter(|&i| degree[i] == 1).collect()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    #[test]
    fn leaf_voltage_falls_as_its_load_rises(
        fixture in 0usize..4,
        leaf_pick in 0usize..64,
        load in 0.2..1.0f64,
        pv in 0.0..1.0f64,
        extra in 0.001..0.05f64,
    ) {
        let f = feeder(FIXTURES[fixture]);
        let net = &f.network;
        let leaves = leaf_buses(net);
        let leaf = leaves[leaf_pick % leaves.len()];
        let (_, mut inj) = unity_injections(net, load, pv);
        let opts = SolverOptions::default();
        let before = power_flow::solve(net, &f.y, &inj, &opts).unwrap();
        inj.p[leaf] -= extra;
        let after = power_flow::solve(net, &f.y, &inj, &opts).unwrap();
        prop_assert!(before.converged && after.converged);
        prop_assert!(after.vm[leaf] <= before.vm[leaf]);
    }
}
