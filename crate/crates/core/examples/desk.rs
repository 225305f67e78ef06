//! Train the desk-scale agent on several seeds in parallel and print the
//! three-case comparison for each.
//!
//! cargo run -p sivolt --example desk -- [N | A..B] [key=value ...]
//!
//! `N` runs seeds `0..N`. Set `DESK_DUMP=dir` to write each seed's hourly
//! DDPG records.

use std::sync::Arc;

use rayon::prelude::*;
use sivolt::harness::{self, CaseMode, EvalSettings, ExperimentConfig};

fn main() -> sivolt::Result<()> {
    let mut args = std::env::args().skip(1);
    let seeds = match args.next() {
        Some(s) => match s.split_once("..") {
            Some((a, b)) => a.parse().expect("first seed")..b.parse().expect("end seed"),
            None => 0..s.parse().expect("seed count"),
        },
        None => 0..5,
    };
    let overrides: Vec<String> = args.collect();
    let path = sivolt::data_dir().join("desk13.toml");
    let cfg = ExperimentConfig::load_with_overrides(&path, &overrides)?;
    let feeder = cfg.feeder()?;
    let profiles = cfg.profiles()?;
    let settings = EvalSettings::from(&cfg);
    let (vv, _) = harness::evaluate_case(&feeder, &profiles, cfg.hours(), &CaseMode::VoltVar, &settings)?;
    let (base, _) = harness::evaluate_case(&feeder, &profiles, cfg.hours(), &CaseMode::Baseline, &settings)?;
    let results: Vec<_> = seeds
        .into_par_iter()
        .map(|seed| -> sivolt::Result<String> {
            let (agent, log) = harness::train(&cfg, feeder.clone(), seed, None)?;
            let r = log.mean_rewards();
            let mean = |xs: &[f64]| xs.iter().sum::<f64>() / xs.len() as f64;
            let k = 50.min(r.len() / 2);
            let first = mean(&r[..k]);
            let last = mean(&r[r.len() - k..]);
            // improvement over the first 200 episodes, and the best 50-episode window there
            let head = &r[..r.len().min(200)];
            let gain = mean(&head[head.len() - k..]) - first;
            let best = head.windows(k).map(mean).fold(f64::MIN, f64::max);
            let (m, recs) = harness::evaluate_case(&feeder, &profiles, cfg.hours(), &CaseMode::Ddpg(Arc::new(agent)), &settings)?;
            if let Ok(dir) = std::env::var("DESK_DUMP") {
                let f = std::fs::File::create(format!("{dir}/seed{seed}.csv")).expect("dump file");
                harness::write_records(&[recs], f)?;
            }
            Ok(format!(
                "seed {seed}: first {first:7.1} last {last:7.1} gain200 {gain:6.1} best200 {best:6.1} | viol {:4} (u {} o {}) curt {:7.1} ({:.2}x vv) dloss {:7.1} (vv {:7.1}) maxV {:.4}",
                m.violations(),
                m.undervoltage_count,
                m.overvoltage_count,
                m.curtailment_kwh,
                m.curtailment_kwh / vv.curtailment_kwh,
                m.losses_kwh - base.losses_kwh,
                vv.losses_kwh - base.losses_kwh,
                m.max_vm
            ))
        })
        .collect();
    println!(
        "baseline viol {} | volt-var viol {} curt {:.1}",
        base.violations(),
        vv.violations(),
        vv.curtailment_kwh
    );
    for r in results {
        println!("{}", r?);
    }
    Ok(())
}
