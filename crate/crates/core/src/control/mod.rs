//! Secondary voltage control: the distributed Koopman MPC, the nonlinear
//! MPC baseline, the steady-state relation, and the Riccati stability
//! certificate.

mod certificate;
mod mpc;
mod nonlinear;
mod qp;

pub use certificate::{
    aggregate_system, AggregateSystem,
    certificate_from_predictors, continuous_bridge, stability_certificate, steady_state_input,
    verify_decrease_by_rollout, ContinuousAgent, StabilityCertificate, SteadyStateInput,
};
pub use mpc::{
    agent_step, build_qp, AgentController, AgentDecision, KoopmanDmpc, MpcWeights, QpBuild,
    RoundLog, SOFT_PENALTY,
};
pub use nonlinear::{
    nonlinear_mpc_step, NonlinearMpc, NonlinearRoundLog, NonlinearStep, SQP_MAX_ITER, SQP_TOL,
};
pub use qp::{solve_qp, KktReport, QpProblem, QpSolution};
