use std::fs::File;
use std::io::BufWriter;
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::sync::Arc;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand, ValueEnum};

use sivolt::ddpg::{load_checkpoint, save_checkpoint};
use sivolt::environment::classify_zone;
use sivolt::harness::{self, CaseMetrics, CaseMode, EvalSettings, ExperimentConfig, HourRecord};
use sivolt::inverter;
use sivolt::power_flow;
use sivolt::scenario::{self, Scenario};

/// Voltage regulation with PV smart inverters: power flow, Volt-Var and DDPG.
#[derive(Parser)]
#[command(version, about)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct ConfigArgs {
    /// Experiment config (TOML).
    #[arg(short, long)]
    config: PathBuf,
    /// Override a config key, e.g. `--set agent.gamma=0.9`. Repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    overrides: Vec<String>,
}

impl ConfigArgs {
    fn load(&self) -> Result<ExperimentConfig> {
        ExperimentConfig::load_with_overrides(&self.config, &self.overrides)
            .with_context(|| format!("loading {}", self.config.display()))
    }
}

#[derive(Clone, Copy, ValueEnum)]
enum Mode {
    Baseline,
    Voltvar,
    Ddpg,
}

#[derive(Subcommand)]
enum Command {
    /// Solve one operating point and print bus voltages.
    Powerflow {
        #[command(flatten)]
        config: ConfigArgs,
        /// Hour of the profile year to solve.
        #[arg(long, conflicts_with_all = ["load", "pv"])]
        hour: Option<usize>,
        /// Uniform load multiplier (with --pv).
        #[arg(long, requires = "pv")]
        load: Option<f64>,
        /// PV availability as a fraction of DC rating (with --load).
        #[arg(long, requires = "load")]
        pv: Option<f64>,
        /// Inverter control: baseline (unity pf) or voltvar.
        #[arg(long, value_enum, default_value = "baseline")]
        mode: Mode,
    },
    /// Train a DDPG agent; writes `train_log.jsonl` and checkpoints to --out.
    Train {
        #[command(flatten)]
        config: ConfigArgs,
        #[arg(long)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
    },
    /// Evaluate one case over the configured slice of the profile year.
    Evaluate {
        #[command(flatten)]
        config: ConfigArgs,
        #[arg(long, value_enum)]
        mode: Mode,
        /// Agent checkpoint (required for ddpg).
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        /// Directory for summary and per-hour records.
        #[arg(long)]
        out: Option<PathBuf>,
        #[arg(long)]
        allow_nonconverged: bool,
    },
    /// Evaluate Baseline, Volt-Var and DDPG and print the comparison table.
    Compare {
        #[command(flatten)]
        config: ConfigArgs,
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        out: Option<PathBuf>,
        #[arg(long)]
        allow_nonconverged: bool,
    },
    /// Write a synthetic year of hourly load/PV profiles as CSV.
    Profiles {
        #[arg(long)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
    },
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    match run(Cli::parse()) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(2)
        }
    }
}

fn run(cli: Cli) -> Result<ExitCode> {
    match cli.command {
        Command::Powerflow {
            config,
            hour,
            load,
            pv,
            mode,
        } => powerflow(&config.load()?, hour, load.zip(pv), mode),
        Command::Train { config, seed, out } => train(&config.load()?, seed, &out),
        Command::Evaluate {
            config,
            mode,
            checkpoint,
            out,
            allow_nonconverged,
        } => {
            let cfg = config.load()?;
            let case = case_mode(mode, checkpoint.as_deref())?;
            evaluate(&cfg, &[case], out.as_deref(), allow_nonconverged)
        }
        Command::Compare {
            config,
            checkpoint,
            out,
            allow_nonconverged,
        } => {
            let cfg = config.load()?;
            let cases = [Mode::Baseline, Mode::Voltvar, Mode::Ddpg]
                .into_iter()
                .map(|m| case_mode(m, Some(&checkpoint)))
                .collect::<Result<Vec<_>>>()?;
            evaluate(&cfg, &cases, out.as_deref(), allow_nonconverged)
        }
        Command::Profiles { seed, out } => {
            let year = scenario::synthetic_year(seed);
            let f = File::create(&out).with_context(|| format!("creating {}", out.display()))?;
            scenario::write_profiles(&year, BufWriter::new(f))?;
            println!("wrote {} hours to {}", year.len(), out.display());
            Ok(ExitCode::SUCCESS)
        }
    }
}

fn case_mode(mode: Mode, checkpoint: Option<&Path>) -> Result<CaseMode> {
    Ok(match mode {
        Mode::Baseline => CaseMode::Baseline,
        Mode::Voltvar => CaseMode::VoltVar,
        Mode::Ddpg => {
            let Some(path) = checkpoint else {
                bail!("--checkpoint is required for the ddpg case");
            };
            CaseMode::Ddpg(Arc::new(load_checkpoint(path)?))
        }
    })
}

fn powerflow(cfg: &ExperimentConfig, hour: Option<usize>, point: Option<(f64, f64)>, mode: Mode) -> Result<ExitCode> {
    let feeder = cfg.feeder()?;
    let net = &feeder.network;
    let sc = match (hour, point) {
        (Some(h), _) => scenario::scenario_at(net, &cfg.profiles()?, h)?,
        (None, Some((load, pv))) => Scenario::uniform(net, load, pv, "cli"),
        (None, None) => Scenario::uniform(net, 1.0, 0.0, "peak load"),
    };
    sc.validate(net)?;
    let (solution, inverters) = match mode {
        Mode::Baseline => {
            let inv = inverter::dispatch(net, &sc, &vec![0.0; net.pvs().len()]);
            let inj = net.injections(&sc, &inv)?;
            (power_flow::solve(net, &feeder.y, &inj, &cfg.solver)?, inv)
        }
        Mode::Voltvar => {
            let eq = inverter::solve_droop_equilibrium(net, &feeder.y, &sc, &cfg.solver, &cfg.droop_solver)?;
            println!(
                "droop equilibrium: converged {} after {} iterations (residual {:.2e})",
                eq.converged, eq.iterations, eq.residual
            );
            (eq.solution, eq.inverters)
        }
        Mode::Ddpg => bail!("powerflow supports baseline and voltvar only"),
    };
    println!(
        "{}: converged {} in {} iterations, max mismatch {:.2e}",
        net.name(),
        solution.converged,
        solution.iterations,
        solution.max_mismatch
    );
    println!("{:>4} {:>8} {:>10} {:>10}  zone", "bus", "name", "vm (pu)", "va (deg)");
    for (i, bus) in net.buses().iter().enumerate() {
        println!(
            "{:>4} {:>8} {:>10.5} {:>10.4}  {:?}",
            i,
            bus.name.as_deref().unwrap_or("-"),
            solution.vm[i],
            solution.va[i].to_degrees(),
            classify_zone(solution.vm[i], &cfg.reward.bounds)
        );
    }
    for (pv, st) in net.pvs().iter().zip(&inverters) {
        println!(
            "SI at bus {:>3}: P avail {:.4}  P out {:.4}  Q {:+.4}  (pu)",
            pv.spec.bus, st.p_avail, st.p_out, st.q_cmd
        );
    }
    if solution.converged {
        println!(
            "losses {:.2} kW, slack P {:.4} pu, Q {:.4} pu",
            solution.total_loss_p * net.mva_base() * 1000.0,
            solution.slack_p,
            solution.slack_q
        );
        Ok(ExitCode::SUCCESS)
    } else {
        Ok(ExitCode::FAILURE)
    }
}

fn train(cfg: &ExperimentConfig, seed: u64, out: &Path) -> Result<ExitCode> {
    std::fs::create_dir_all(out).with_context(|| format!("creating {}", out.display()))?;
    let feeder = cfg.feeder()?;
    let (agent, log) = harness::train(cfg, feeder, seed, Some(out))?;
    let log_path = out.join("train_log.jsonl");
    log.write_jsonl(BufWriter::new(File::create(&log_path)?))?;
    save_checkpoint(&agent, out.join("agent.json"))?;
    let rewards = log.mean_rewards();
    let tail = rewards.len().min(50);
    if tail > 0 {
        let mean = rewards[rewards.len() - tail..].iter().sum::<f64>() / tail as f64;
        println!(
            "trained {} episodes; mean reward over the last {tail}: {mean:.1}",
            rewards.len()
        );
    }
    println!(
        "log: {}\ncheckpoint: {}",
        log_path.display(),
        out.join("agent.json").display()
    );
    Ok(ExitCode::SUCCESS)
}

fn evaluate(
    cfg: &ExperimentConfig,
    cases: &[CaseMode],
    out: Option<&Path>,
    allow_nonconverged: bool,
) -> Result<ExitCode> {
    let feeder = cfg.feeder()?;
    let profiles = cfg.profiles()?;
    let settings = EvalSettings::from(cfg);
    let mut metrics: Vec<CaseMetrics> = Vec::new();
    let mut records: Vec<Vec<HourRecord>> = Vec::new();
    for case in cases {
        let (m, r) = harness::evaluate_case(&feeder, &profiles, cfg.hours(), case, &settings)?;
        metrics.push(m);
        records.push(r);
    }
    print!("{}", harness::report(&metrics, &records, out)?);
    if let Some(dir) = out {
        println!("records written to {}", dir.display());
    }
    let bad: usize = metrics.iter().map(|m| m.nonconverged_hours).sum();
    if bad > 0 && !allow_nonconverged {
        eprintln!("{bad} evaluation hour(s) did not converge (use --allow-nonconverged to accept)");
        return Ok(ExitCode::FAILURE);
    }
    Ok(ExitCode::SUCCESS)
}
