//! Run reports and the CSV emission behind every file the harness writes.

use std::path::Path;

use crate::error::Result;
use crate::grid::ScenarioResult;
use crate::numerics::format_float;
use crate::scenario::config::BuiltScenario;
use crate::scenario::run::IdentificationOutcome;

/// Post-run summary of one scenario.
#[derive(Debug, Clone)]
pub struct RunReport {
    pub result: ScenarioResult,
    pub v_ref: Vec<f64>,
    /// Time of the last configured disturbance (loads, lines, graphs).
    pub last_disturbance: f64,
    /// Per inverter: first time after the last disturbance from which
    /// |V - v_ref| stays below 1% of v_ref through the end of the run.
    pub settling_time: Vec<Option<f64>>,
    /// First time every voltage sits inside [0.95, 1.05] v_ref.
    pub band_entry_time: Option<f64>,
    /// Worst excursion (volts) outside the band after entry.
    pub max_band_violation: f64,
    pub mean_solve_ms: Vec<f64>,
    pub max_solve_ms: Vec<f64>,
    /// Per-inverter max validation rollout error, when identification ran
    /// as part of this invocation.
    pub prediction_error_summary: Option<Vec<f64>>,
    /// Per-round solver telemetry of the distributed controller.
    pub koopman_rounds: Vec<crate::control::RoundLog>,
    /// Per-round telemetry of the nonlinear baseline.
    pub nonlinear_rounds: Vec<crate::control::NonlinearRoundLog>,
}

/// Settling threshold relative to the reference.
pub const SETTLING_FRACTION: f64 = 0.01;

impl RunReport {
    pub fn from_result(built: &BuiltScenario, result: ScenarioResult) -> RunReport {
        let v_ref = built.model.v_ref_vec();
        let last_load = built.loads.events().iter().map(|e| e.time).fold(0.0, f64::max);
        let last_line = built.line_events.iter().map(|(t, _)| *t).fold(0.0, f64::max);
        let last_graph = built
            .graphs
            .events()
            .iter()
            .map(|(t, _)| *t)
            .fold(0.0, f64::max);
        let last_disturbance = last_load.max(last_line).max(last_graph).max(0.0);
        let settling_time = settling_times(&result, &v_ref, last_disturbance);
        let (band_entry_time, max_band_violation) = band_stats(&result, &v_ref);
        let n = result.n;
        let rows = result.solve_ms.len().max(1) as f64;
        let mean_solve_ms: Vec<f64> = (0..n)
            .map(|i| result.solve_ms.iter().map(|r| r[i]).sum::<f64>() / rows)
            .collect();
        let max_solve_ms: Vec<f64> = (0..n)
            .map(|i| result.solve_ms.iter().map(|r| r[i]).fold(0.0, f64::max))
            .collect();
        RunReport {
            result,
            v_ref,
            last_disturbance,
            settling_time,
            band_entry_time,
            max_band_violation,
            mean_solve_ms,
            max_solve_ms,
            prediction_error_summary: None,
            koopman_rounds: Vec::new(),
            nonlinear_rounds: Vec::new(),
        }
    }

    /// Largest |V_i - v_ref_i| / v_ref_i over the window (t0, t1].
    pub fn max_relative_deviation(&self, t0: f64, t1: f64) -> f64 {
        let mut worst = 0.0f64;
        for (k, &t) in self.result.t.iter().enumerate() {
            if t > t0 && t <= t1 {
                for i in 0..self.result.n {
                    let dev = (self.result.v[k][i] - self.v_ref[i]).abs() / self.v_ref[i];
                    worst = worst.max(dev);
                }
            }
        }
        worst
    }

    /// Mean measured reactive power per inverter over (t0, t1].
    pub fn mean_reactive(&self, t0: f64, t1: f64) -> Vec<f64> {
        let mut acc = vec![0.0; self.result.n];
        let mut count = 0usize;
        for (k, &t) in self.result.t.iter().enumerate() {
            if t > t0 && t <= t1 {
                for i in 0..self.result.n {
                    acc[i] += self.result.q[k][i];
                }
                count += 1;
            }
        }
        if count > 0 {
            for a in acc.iter_mut() {
                *a /= count as f64;
            }
        }
        acc
    }

    pub fn summary_text(&self, name: &str) -> String {
        let mut s = String::new();
        s.push_str(&format!("scenario: {name}\n"));
        s.push_str(&format!("samples: {}\n", self.result.len()));
        s.push_str(&format!("last_disturbance_s: {}\n", format_float(self.last_disturbance)));
        for i in 0..self.result.n {
            let settle = self.settling_time[i]
                .map(format_float)
                .unwrap_or_else(|| "unsettled".into());
            s.push_str(&format!(
                "inverter_{}: settling_s={} mean_solve_ms={:.4} max_solve_ms={:.4}\n",
                i + 1,
                settle,
                self.mean_solve_ms[i],
                self.max_solve_ms[i]
            ));
        }
        let entry = self
            .band_entry_time
            .map(format_float)
            .unwrap_or_else(|| "never".into());
        s.push_str(&format!("band_entry_s: {entry}\n"));
        s.push_str(&format!(
            "max_band_violation_v: {}\n",
            format_float(self.max_band_violation)
        ));
        if let Some(errors) = &self.prediction_error_summary {
            for (i, e) in errors.iter().enumerate() {
                s.push_str(&format!(
                    "predictor_{}_max_rollout_error: {:.6}\n",
                    i + 1,
                    e
                ));
            }
        }
        s
    }
}

fn settling_times(result: &ScenarioResult, v_ref: &[f64], after: f64) -> Vec<Option<f64>> {
    let n = result.n;
    (0..n)
        .map(|i| {
            let thresh = SETTLING_FRACTION * v_ref[i];
            // scan backwards: the settled suffix is where |V - ref| < 1%
            let mut first_ok: Option<usize> = None;
            for k in (0..result.len()).rev() {
                if (result.v[k][i] - v_ref[i]).abs() < thresh {
                    first_ok = Some(k);
                } else {
                    break;
                }
            }
            match first_ok {
                Some(k) => {
                    let t = result.t[k].max(after);
                    if t <= *result.t.last().unwrap() {
                        Some(result.t[k].max(after) - after)
                    } else {
                        None
                    }
                }
                None => None,
            }
        })
        .collect()
}

fn band_stats(result: &ScenarioResult, v_ref: &[f64]) -> (Option<f64>, f64) {
    let inside = |row: &[f64]| {
        row.iter()
            .zip(v_ref)
            .all(|(v, r)| *v >= 0.95 * r && *v <= 1.05 * r)
    };
    let entry = result
        .t
        .iter()
        .zip(&result.v)
        .find(|(_, row)| inside(row))
        .map(|(t, _)| *t);
    let mut violation = 0.0f64;
    if let Some(t0) = entry {
        for (k, &t) in result.t.iter().enumerate() {
            if t >= t0 {
                for i in 0..result.n {
                    let v = result.v[k][i];
                    let lo = 0.95 * v_ref[i];
                    let hi = 1.05 * v_ref[i];
                    violation = violation.max(lo - v).max(v - hi);
                }
            }
        }
    }
    (entry, violation.max(0.0))
}

/// The scenario trace with the pinned column set:
/// t, v_1..v_n, u_1..u_n, q_1..q_n, solve_ms_1..solve_ms_n.
pub fn result_csv(result: &ScenarioResult) -> String {
    let n = result.n;
    let mut header = String::from("t");
    for prefix in ["v", "u", "q", "solve_ms"] {
        for i in 1..=n {
            header.push_str(&format!(",{prefix}_{i}"));
        }
    }
    let mut s = header;
    s.push('\n');
    for k in 0..result.len() {
        s.push_str(&format!("{:.6}", result.t[k]));
        for series in [&result.v, &result.u, &result.q, &result.solve_ms] {
            for i in 0..n {
                s.push(',');
                s.push_str(&format_float(series[k][i]));
            }
        }
        s.push('\n');
    }
    s
}

pub fn write_result_csv(result: &ScenarioResult, path: &Path) -> Result<()> {
    std::fs::write(path, result_csv(result))?;
    Ok(())
}

/// Per-round solver telemetry: iterations, KKT residual (or convergence
/// flag for the nonlinear baseline), one row per controller round.
pub fn telemetry_csv(report: &RunReport) -> Option<String> {
    if !report.koopman_rounds.is_empty() {
        let n = report.result.n;
        let mut s = String::from("t");
        for prefix in ["iterations", "kkt_residual"] {
            for i in 1..=n {
                s.push_str(&format!(",{prefix}_{i}"));
            }
        }
        s.push('\n');
        for round in &report.koopman_rounds {
            s.push_str(&format!("{:.6}", round.t));
            for it in &round.iterations {
                s.push_str(&format!(",{it}"));
            }
            for kkt in &round.kkt_residual {
                s.push(',');
                s.push_str(&format_float(*kkt));
            }
            s.push('\n');
        }
        return Some(s);
    }
    if !report.nonlinear_rounds.is_empty() {
        let n = report.result.n;
        let mut s = String::from("t");
        for prefix in ["iterations", "converged"] {
            for i in 1..=n {
                s.push_str(&format!(",{prefix}_{i}"));
            }
        }
        s.push('\n');
        for round in &report.nonlinear_rounds {
            s.push_str(&format!("{:.6}", round.t));
            for it in &round.iterations {
                s.push_str(&format!(",{it}"));
            }
            for c in &round.converged {
                s.push_str(if *c { ",1" } else { ",0" });
            }
            s.push('\n');
        }
        return Some(s);
    }
    None
}

/// Plot-ready per-figure series: voltage traces, MPC signals, reactive
/// power. One file per family, one row per plant step.
pub fn emit_plot_data(report: &RunReport, out_dir: &Path) -> Result<()> {
    std::fs::create_dir_all(out_dir)?;
    let result = &report.result;
    let n = result.n;
    let series = |name: &str, data: &Vec<Vec<f64>>| -> String {
        let mut s = String::from("t");
        for i in 1..=n {
            s.push_str(&format!(",{name}_{i}"));
        }
        s.push('\n');
        for k in 0..result.len() {
            s.push_str(&format!("{:.6}", result.t[k]));
            for i in 0..n {
                s.push(',');
                s.push_str(&format_float(data[k][i]));
            }
            s.push('\n');
        }
        s
    };
    std::fs::write(out_dir.join("voltages.csv"), series("v", &result.v))?;
    std::fs::write(out_dir.join("mpc.csv"), series("u", &result.u))?;
    std::fs::write(out_dir.join("reactive.csv"), series("q", &result.q))?;
    Ok(())
}

/// Identification artifacts: eigenvalue table (4 rows per inverter) and the
/// per-step validation error curves.
pub fn emit_identification_data(
    outcome: &IdentificationOutcome,
    sample_dt: f64,
    out_dir: &Path,
) -> Result<()> {
    std::fs::create_dir_all(out_dir)?;
    let mut eig = String::from("inverter,re,im,magnitude\n");
    for (i, vals) in outcome.eigenvalues.iter().enumerate() {
        for (re, im) in vals {
            let mag = (re * re + im * im).sqrt();
            eig.push_str(&format!(
                "{},{},{},{}\n",
                i + 1,
                format_float(*re),
                format_float(*im),
                format_float(mag)
            ));
        }
    }
    std::fs::write(out_dir.join("eigenvalues.csv"), eig)?;

    let horizon = outcome.error_curves.first().map_or(0, |c| c.len());
    let mut err = String::from("step,t_s");
    for i in 1..=outcome.error_curves.len() {
        err.push_str(&format!(",rel_err_{i}"));
    }
    err.push('\n');
    for k in 0..horizon {
        err.push_str(&format!("{},{:.6}", k + 1, (k + 1) as f64 * sample_dt));
        for curve in &outcome.error_curves {
            err.push(',');
            err.push_str(&format_float(curve[k]));
        }
        err.push('\n');
    }
    std::fs::write(out_dir.join("prediction_error.csv"), err)?;

    let mut fit = String::from("inverter,residual_frobenius,rank,max_rel_err\n");
    for i in 0..outcome.predictors.len() {
        fit.push_str(&format!(
            "{},{},{},{}\n",
            i + 1,
            format_float(outcome.fit_residuals[i]),
            outcome.ranks[i],
            format_float(outcome.max_errors[i])
        ));
    }
    std::fs::write(out_dir.join("fit_report.csv"), fit)?;
    Ok(())
}
