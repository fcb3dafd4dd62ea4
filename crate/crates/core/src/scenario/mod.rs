//! Scenario harness: config loading, the identification pipeline, closed
//! loop runs, the controller comparison, the horizon sweep, and all file
//! outputs.

mod config;
mod report;
mod run;

pub use config::{
    AggregateKind, BuiltScenario, ComparisonSection, ControllerKind, ControllerSection,
    EventsSection, GraphSection, IdentificationSection, ModelSection, ScenarioConfig,
    ScenarioSection, SweepSection,
};
pub use report::{
    emit_identification_data, emit_plot_data, result_csv, telemetry_csv, write_result_csv,
    RunReport, SETTLING_FRACTION,
};
pub use run::{
    ensure_predictors, load_predictors, make_koopman_controller, run_comparison,
    run_horizon_sweep, run_identification, run_scenario, write_predictors, ComparisonReport,
    PredictorSet,
    IdentificationOutcome, SweepReport, SweepRow,
};
