//! Scenario execution: the identification pipeline, closed-loop runs under
//! the configured controller, the Koopman-vs-nonlinear timing comparison,
//! and the prediction-horizon sweep.

use std::path::Path;

use crate::control::{AgentController, KoopmanDmpc, MpcWeights, NonlinearMpc};
use crate::error::{Error, Result};
use crate::exec::{map_indexed, Parallelism};
use crate::grid::{simulate, GridState, ScenarioResult, ZeroController};
use crate::koopman::{
    build_snapshots, fit_edmd, prediction_error, simulate_excitation, LiftedPredictor,
    NeighborAggregate, SnapshotSet,
};
use crate::numerics::eigenvalues;
use crate::scenario::config::{BuiltScenario, ControllerKind};
use crate::scenario::report::RunReport;

/// Identification outcome for the whole inverter fleet.
#[derive(Debug, Clone)]
pub struct IdentificationOutcome {
    pub predictors: Vec<LiftedPredictor>,
    /// Fit residual (Frobenius over the fit partition) per inverter.
    pub fit_residuals: Vec<f64>,
    pub ranks: Vec<usize>,
    /// Max relative rollout error per step (validation), per inverter.
    pub error_curves: Vec<Vec<f64>>,
    /// Worst rollout error per inverter over the configured horizon.
    pub max_errors: Vec<f64>,
    /// Eigenvalues of each fitted A (re, im), 4 rows per inverter.
    pub eigenvalues: Vec<Vec<(f64, f64)>>,
}

/// Generate excitation data, fit every inverter's predictor, and verify
/// the validation rollout error against the configured ceiling.
pub fn run_identification(
    built: &BuiltScenario,
    parallelism: Parallelism,
) -> Result<IdentificationOutcome> {
    let model = &built.model;
    let n = model.n();
    let protocol = &built.protocol;
    let graph = built.graphs.active_graph(0.0)?;
    let aggregate: NeighborAggregate = built.config.identification.neighbor_aggregate.into();

    // one shared set of trajectories feeds every inverter's snapshots
    let trajectories = map_indexed(parallelism, protocol.trajectories, |t| {
        simulate_excitation(model, protocol, t)
    });
    let mut sim_results = Vec::with_capacity(protocol.trajectories);
    for t in trajectories {
        sim_results.push(t?);
    }

    let horizon = built.config.identification.error_horizon;
    let ceiling = built.config.identification.error_ceiling;
    let per_agent = map_indexed(parallelism, n, |i| -> Result<_> {
        let mut sets = Vec::with_capacity(sim_results.len());
        for res in &sim_results {
            sets.push(build_snapshots(res, protocol, i, graph, aggregate, model)?);
        }
        let all = SnapshotSet::concat(&sets)?;
        let (fit_set, validation) = all.split_chronological(protocol.split)?;
        let fit = fit_edmd(&fit_set)?;
        let curve = prediction_error(&fit.predictor, &validation, horizon, model.inverters[i].v_ref)?;
        let max_err = curve.iter().cloned().fold(0.0f64, f64::max);
        let eigs = eigenvalues(&fit.predictor.a)?
            .values
            .iter()
            .map(|v| (v.re, v.im))
            .collect::<Vec<_>>();
        Ok((fit, curve, max_err, eigs))
    });

    let mut out = IdentificationOutcome {
        predictors: Vec::with_capacity(n),
        fit_residuals: Vec::with_capacity(n),
        ranks: Vec::with_capacity(n),
        error_curves: Vec::with_capacity(n),
        max_errors: Vec::with_capacity(n),
        eigenvalues: Vec::with_capacity(n),
    };
    for (i, item) in per_agent.into_iter().enumerate() {
        let (fit, curve, max_err, eigs) = item?;
        if max_err > ceiling {
            return Err(Error::Identification(format!(
                "inverter {} validation rollout error {:.4}% exceeds ceiling {:.4}%",
                i + 1,
                max_err * 100.0,
                ceiling * 100.0
            )));
        }
        out.predictors.push(fit.predictor);
        out.fit_residuals.push(fit.residual);
        out.ranks.push(fit.rank);
        out.error_curves.push(curve);
        out.max_errors.push(max_err);
        out.eigenvalues.push(eigs);
    }
    Ok(out)
}

/// Write the fitted predictors as one TOML file per inverter.
pub fn write_predictors(predictors: &[LiftedPredictor], dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir)?;
    for (i, p) in predictors.iter().enumerate() {
        p.write_toml(&dir.join(format!("predictor_{}.toml", i + 1)))?;
    }
    Ok(())
}

/// Load predictors from a directory, or None when any file is missing.
pub fn load_predictors(dir: &Path, n: usize) -> Result<Option<Vec<LiftedPredictor>>> {
    let mut out = Vec::with_capacity(n);
    for i in 0..n {
        let path = dir.join(format!("predictor_{}.toml", i + 1));
        if !path.exists() {
            return Ok(None);
        }
        out.push(LiftedPredictor::read_toml(&path)?);
    }
    Ok(Some(out))
}

/// Predictors plus the fit-quality summary when identification ran in this
/// invocation (absent when the files were loaded from disk).
#[derive(Debug, Clone)]
pub struct PredictorSet {
    pub predictors: Vec<LiftedPredictor>,
    pub fit_summary: Option<Vec<f64>>,
}

/// Predictors for a scenario: loaded from the configured directory when
/// complete, otherwise identified from scratch (and stored there).
pub fn ensure_predictors(
    built: &BuiltScenario,
    parallelism: Parallelism,
    out_root: Option<&Path>,
) -> Result<PredictorSet> {
    let dir_cfg = &built.config.controller.predictor_dir;
    let dir = match out_root {
        Some(root) => root.join(dir_cfg),
        None => Path::new(dir_cfg).to_path_buf(),
    };
    if let Some(preds) = load_predictors(&dir, built.model.n())? {
        return Ok(PredictorSet {
            predictors: preds,
            fit_summary: None,
        });
    }
    let outcome = run_identification(built, parallelism)?;
    write_predictors(&outcome.predictors, &dir)?;
    Ok(PredictorSet {
        predictors: outcome.predictors,
        fit_summary: Some(outcome.max_errors),
    })
}

fn koopman_weights(built: &BuiltScenario) -> MpcWeights {
    let c = &built.config.controller;
    MpcWeights {
        q: c.q,
        r: c.r,
        s: c.s,
        h_p: c.horizon,
        sample_time: c.sample_time_s,
        v_min: c.v_min,
        v_max: c.v_max,
        u_max: c.u_max,
    }
}

/// Assemble the distributed Koopman controller for a built scenario.
pub fn make_koopman_controller(
    built: &BuiltScenario,
    predictors: Vec<LiftedPredictor>,
    parallelism: Parallelism,
) -> Result<KoopmanDmpc> {
    let weights = koopman_weights(built);
    let graph0 = built.graphs.active_graph(0.0)?;
    let mut agents = Vec::with_capacity(built.model.n());
    for (i, p) in predictors.into_iter().enumerate() {
        agents.push(AgentController::new(
            i,
            p,
            weights.clone(),
            graph0.laplacian_row(i).to_vec(),
            built.model.inverters[i].v_ref,
        )?);
    }
    KoopmanDmpc::new(
        agents,
        built.graphs.clone(),
        built.config.identification.neighbor_aggregate.into(),
        parallelism,
    )
}

/// Run the configured closed loop end to end and build a report.
pub fn run_scenario(
    built: &BuiltScenario,
    parallelism: Parallelism,
    predictors: Option<Vec<LiftedPredictor>>,
) -> Result<RunReport> {
    let n = built.model.n();
    let initial = GridState::at_voltage(n, built.config.scenario.initial_voltage);
    let duration = built.config.scenario.duration_s;
    let dt = built.config.scenario.dt_s;
    let mut koopman_rounds = Vec::new();
    let mut nonlinear_rounds = Vec::new();
    let mut fit_summary = None;
    let result: ScenarioResult = match built.config.scenario.controller {
        ControllerKind::DroopOnly => {
            let mut ctrl = ZeroController {
                n,
                sample_time: built.config.controller.sample_time_s,
            };
            simulate(&built.model, &built.line_events, &built.loads, &mut ctrl, duration, dt, &initial)?
        }
        ControllerKind::NonlinearMpc => {
            let mut ctrl = NonlinearMpc::new(n, koopman_weights(built), parallelism)?;
            let r = simulate(&built.model, &built.line_events, &built.loads, &mut ctrl, duration, dt, &initial)?;
            nonlinear_rounds = ctrl.rounds;
            r
        }
        ControllerKind::KoopmanDmpc => {
            let preds = match predictors {
                Some(p) => p,
                None => {
                    let set = ensure_predictors(built, parallelism, None)?;
                    fit_summary = set.fit_summary;
                    set.predictors
                }
            };
            let mut ctrl = make_koopman_controller(built, preds, parallelism)?;
            let r = simulate(&built.model, &built.line_events, &built.loads, &mut ctrl, duration, dt, &initial)?;
            koopman_rounds = ctrl.rounds;
            r
        }
    };
    let mut report = RunReport::from_result(built, result);
    report.koopman_rounds = koopman_rounds;
    report.nonlinear_rounds = nonlinear_rounds;
    report.prediction_error_summary = fit_summary;
    Ok(report)
}

/// Timing comparison of the two controllers at identical settings.
#[derive(Debug, Clone)]
pub struct ComparisonReport {
    pub cycles: usize,
    pub koopman_mean_cycle_s: f64,
    pub nonlinear_mean_cycle_s: f64,
    /// nonlinear / koopman mean per-cycle solve time.
    pub ratio: f64,
    pub koopman_final_v: Vec<f64>,
    pub nonlinear_final_v: Vec<f64>,
    pub koopman_result: ScenarioResult,
    pub nonlinear_result: ScenarioResult,
}

/// Run both controllers on the same plant with the comparison tuning and
/// report mean per-cycle solve time (summed over agents) plus the final
/// steady-state voltages.
pub fn run_comparison(
    built: &BuiltScenario,
    parallelism: Parallelism,
    predictors: Vec<LiftedPredictor>,
) -> Result<ComparisonReport> {
    let cmp = &built.config.comparison;
    let n = built.model.n();
    let weights = MpcWeights {
        q: cmp.q,
        r: cmp.r,
        s: built.config.controller.s,
        h_p: cmp.horizon,
        sample_time: cmp.sample_time_s,
        v_min: cmp.v_min,
        v_max: cmp.v_max,
        u_max: built.config.controller.u_max,
    };
    let duration = cmp.cycles as f64 * cmp.sample_time_s;
    let dt = built.config.scenario.dt_s;
    let initial = GridState::at_voltage(n, built.config.scenario.initial_voltage);

    let graph0 = built.graphs.active_graph(0.0)?;
    let mut agents = Vec::with_capacity(n);
    for (i, p) in predictors.into_iter().enumerate() {
        agents.push(AgentController::new(
            i,
            p,
            weights.clone(),
            graph0.laplacian_row(i).to_vec(),
            built.model.inverters[i].v_ref,
        )?);
    }
    let mut koop = KoopmanDmpc::new(
        agents,
        built.graphs.clone(),
        built.config.identification.neighbor_aggregate.into(),
        parallelism,
    )?;
    let koop_result = simulate(&built.model, &[], &built.loads, &mut koop, duration, dt, &initial)?;

    let mut nl = NonlinearMpc::new(n, weights.clone(), parallelism)?;
    let nl_result = simulate(&built.model, &[], &built.loads, &mut nl, duration, dt, &initial)?;

    let cycle_mean = |result: &ScenarioResult| {
        let every = (weights.sample_time / dt).round() as usize;
        let mut total = 0.0;
        let mut cycles = 0usize;
        for (k, row) in result.solve_ms.iter().enumerate() {
            if k % every == 0 {
                total += row.iter().sum::<f64>() * 1e-3;
                cycles += 1;
            }
        }
        (total / cycles as f64, cycles)
    };
    let (koop_mean, cycles) = cycle_mean(&koop_result);
    let (nl_mean, _) = cycle_mean(&nl_result);
    Ok(ComparisonReport {
        cycles,
        koopman_mean_cycle_s: koop_mean,
        nonlinear_mean_cycle_s: nl_mean,
        ratio: nl_mean / koop_mean,
        koopman_final_v: koop_result.v.last().unwrap().clone(),
        nonlinear_final_v: nl_result.v.last().unwrap().clone(),
        koopman_result: koop_result,
        nonlinear_result: nl_result,
    })
}

/// Horizon sweep: closed loop per horizon, integral absolute voltage error
/// at inverter 1.
#[derive(Debug, Clone)]
pub struct SweepReport {
    pub rows: Vec<SweepRow>,
}

#[derive(Debug, Clone)]
pub struct SweepRow {
    pub h_p: usize,
    pub iae_v1: f64,
}

pub fn run_horizon_sweep(
    built: &BuiltScenario,
    parallelism: Parallelism,
    predictors: Vec<LiftedPredictor>,
) -> Result<SweepReport> {
    let sweep = &built.config.sweep;
    let cmp = &built.config.comparison;
    let n = built.model.n();
    let dt = built.config.scenario.dt_s;
    let initial = GridState::at_voltage(n, built.config.scenario.initial_voltage);
    let graph0 = built.graphs.active_graph(0.0)?;

    let runs = map_indexed(parallelism, sweep.horizons.len(), |idx| -> Result<SweepRow> {
        let h_p = sweep.horizons[idx];
        let weights = MpcWeights {
            q: cmp.q,
            r: cmp.r,
            s: built.config.controller.s,
            h_p,
            sample_time: cmp.sample_time_s,
            v_min: cmp.v_min,
            v_max: cmp.v_max,
            u_max: built.config.controller.u_max,
        };
        let mut agents = Vec::with_capacity(n);
        for (i, p) in predictors.iter().cloned().enumerate() {
            agents.push(AgentController::new(
                i,
                p,
                weights.clone(),
                graph0.laplacian_row(i).to_vec(),
                built.model.inverters[i].v_ref,
            )?);
        }
        let mut ctrl = KoopmanDmpc::new(
            agents,
            built.graphs.clone(),
            built.config.identification.neighbor_aggregate.into(),
            Parallelism::Sequential,
        )?;
        let result = simulate(
            &built.model,
            &[],
            &built.loads,
            &mut ctrl,
            sweep.duration_s,
            dt,
            &initial,
        )?;
        let v_ref = built.model.inverters[0].v_ref;
        let iae: f64 = result.v.iter().map(|row| (row[0] - v_ref).abs() * dt).sum();
        Ok(SweepRow { h_p, iae_v1: iae })
    });
    let mut rows = Vec::with_capacity(sweep.horizons.len());
    for r in runs {
        rows.push(r?);
    }
    Ok(SweepReport { rows })
}
