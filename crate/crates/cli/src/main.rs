//! Command-line harness for the microgrid Koopman-MPC toolkit.
//!
//! Exit codes: 0 success, 1 configuration error, 2 numerical failure.

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use koopgrid::error::Error;
use koopgrid::exec::Parallelism;
use koopgrid::numerics::format_float;
use koopgrid::scenario::{
    emit_identification_data, emit_plot_data, ensure_predictors, run_comparison,
    run_horizon_sweep, run_identification, run_scenario, write_predictors, write_result_csv,
    BuiltScenario, ScenarioConfig,
};

#[derive(Parser)]
#[command(
    name = "koopgrid",
    about = "Microgrid voltage control: droop plant simulation, Koopman predictor identification, distributed MPC scenarios"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Clone)]
struct CommonArgs {
    /// Scenario config file (TOML).
    #[arg(long)]
    config: Option<PathBuf>,
    /// Output directory for CSV traces, reports, and predictor files.
    #[arg(long, default_value = "out")]
    out: PathBuf,
    /// Override the scenario seed.
    #[arg(long)]
    seed: Option<u64>,
    /// Suppress progress output.
    #[arg(long)]
    quiet: bool,
}

#[derive(Subcommand)]
enum Command {
    /// Run the excitation + EDMD pipeline and write predictor files.
    Identify {
        #[command(flatten)]
        common: CommonArgs,
    },
    /// Run one closed-loop scenario by name (configs/<name>.toml) or path.
    Run {
        scenario: String,
        #[command(flatten)]
        common: CommonArgs,
    },
    /// Compare Koopman and nonlinear MPC solve times on the same plant.
    Compare {
        #[command(flatten)]
        common: CommonArgs,
    },
    /// Sweep the prediction horizon and report tracking error.
    Sweep {
        #[command(flatten)]
        common: CommonArgs,
    },
    /// Parse and validate a scenario config.
    ValidateConfig {
        #[command(flatten)]
        common: CommonArgs,
    },
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match dispatch(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            match e {
                Error::Config(_) | Error::Parse(_) => ExitCode::from(1),
                _ => ExitCode::from(2),
            }
        }
    }
}

fn load_built(common: &CommonArgs, fallback: &str) -> Result<BuiltScenario, Error> {
    let path = common
        .config
        .clone()
        .unwrap_or_else(|| Path::new("configs").join(format!("{fallback}.toml")));
    let mut cfg = ScenarioConfig::load(&path)?;
    if let Some(seed) = common.seed {
        cfg.scenario.seed = seed;
    }
    cfg.build()
}

fn dispatch(cli: Cli) -> Result<(), Error> {
    let parallelism = Parallelism::default();
    match cli.command {
        Command::Identify { common } => {
            let built = load_built(&common, "identification")?;
            let outcome = run_identification(&built, parallelism)?;
            let pred_dir = common.out.join(&built.config.controller.predictor_dir);
            write_predictors(&outcome.predictors, &pred_dir)?;
            emit_identification_data(&outcome, built.protocol.sample_dt, &common.out)?;
            if !common.quiet {
                for (i, err) in outcome.max_errors.iter().enumerate() {
                    println!(
                        "inverter {}: fit rank {}, max 0.5 s rollout error {:.4}%",
                        i + 1,
                        outcome.ranks[i],
                        err * 100.0
                    );
                }
                println!("predictors written to {}", pred_dir.display());
            }
            Ok(())
        }
        Command::Run { scenario, common } => {
            let path_like = scenario.ends_with(".toml");
            let built = if path_like && common.config.is_none() {
                let mut cfg = ScenarioConfig::load(Path::new(&scenario))?;
                if let Some(seed) = common.seed {
                    cfg.scenario.seed = seed;
                }
                cfg.build()?
            } else {
                load_built(&common, &scenario)?
            };
            let (predictors, fit_summary) = match built.config.scenario.controller {
                koopgrid::scenario::ControllerKind::KoopmanDmpc => {
                    let set = ensure_predictors(&built, parallelism, Some(&common.out))?;
                    (Some(set.predictors), set.fit_summary)
                }
                _ => (None, None),
            };
            let mut report = run_scenario(&built, parallelism, predictors)?;
            if report.prediction_error_summary.is_none() {
                report.prediction_error_summary = fit_summary;
            }
            let name = built.config.scenario.name.clone();
            let dir = common.out.join(&name);
            std::fs::create_dir_all(&dir)?;
            write_result_csv(&report.result, &dir.join("result.csv"))?;
            emit_plot_data(&report, &dir)?;
            if let Some(telemetry) = koopgrid::scenario::telemetry_csv(&report) {
                std::fs::write(dir.join("mpc_telemetry.csv"), telemetry)?;
            }
            std::fs::write(dir.join("report.txt"), report.summary_text(&name))?;
            if !common.quiet {
                print!("{}", report.summary_text(&name));
                println!("traces written to {}", dir.display());
            }
            Ok(())
        }
        Command::Compare { common } => {
            let built = load_built(&common, "comparison")?;
            let predictors = ensure_predictors(&built, parallelism, Some(&common.out))?.predictors;
            let report = run_comparison(&built, parallelism, predictors)?;
            std::fs::create_dir_all(&common.out)?;
            let mut csv = String::from("controller,cycles,mean_cycle_ms");
            for i in 1..=report.koopman_final_v.len() {
                csv.push_str(&format!(",final_v_{i}"));
            }
            csv.push('\n');
            for (name, mean, v) in [
                ("koopman", report.koopman_mean_cycle_s, &report.koopman_final_v),
                ("nonlinear", report.nonlinear_mean_cycle_s, &report.nonlinear_final_v),
            ] {
                csv.push_str(&format!("{name},{},{}", report.cycles, format_float(mean * 1e3)));
                for vi in v {
                    csv.push(',');
                    csv.push_str(&format_float(*vi));
                }
                csv.push('\n');
            }
            std::fs::write(common.out.join("comparison.csv"), &csv)?;
            if !common.quiet {
                println!(
                    "koopman   mean cycle: {:.3} ms\nnonlinear mean cycle: {:.3} ms\nratio: {:.2}x over {} cycles",
                    report.koopman_mean_cycle_s * 1e3,
                    report.nonlinear_mean_cycle_s * 1e3,
                    report.ratio,
                    report.cycles
                );
            }
            Ok(())
        }
        Command::Sweep { common } => {
            let built = load_built(&common, "comparison")?;
            let predictors = ensure_predictors(&built, parallelism, Some(&common.out))?.predictors;
            let report = run_horizon_sweep(&built, parallelism, predictors)?;
            std::fs::create_dir_all(&common.out)?;
            let mut csv = String::from("horizon,iae_v1\n");
            for row in &report.rows {
                csv.push_str(&format!("{},{}\n", row.h_p, format_float(row.iae_v1)));
            }
            std::fs::write(common.out.join("horizon_sweep.csv"), &csv)?;
            if !common.quiet {
                for row in &report.rows {
                    println!("H_p = {:>2}: IAE(v1) = {:.4} V*s", row.h_p, row.iae_v1);
                }
            }
            Ok(())
        }
        Command::ValidateConfig { common } => {
            let path = common
                .config
                .clone()
                .ok_or_else(|| Error::Config("validate-config requires --config".into()))?;
            let cfg = ScenarioConfig::load(&path)?;
            let built = cfg.build()?;
            // write the communication Laplacians for inspection
            if common.out.exists() || std::fs::create_dir_all(&common.out).is_ok() {
                for (t, graph) in built.graphs.events() {
                    let name = format!("laplacian_t{}.csv", format_float(*t));
                    graph.laplacian().write_csv(&common.out.join(name))?;
                }
            }
            if !common.quiet {
                println!(
                    "ok: scenario '{}' with {} inverters, {} lines, {} load events",
                    built.config.scenario.name,
                    built.model.n(),
                    built.model.network.lines.len(),
                    built.loads.events().len()
                );
            }
            Ok(())
        }
    }
}
