//! Gait synthesis and certification on the reduced dynamics of a planar
//! three-link biped.
//!
//! The crate models the robot, reduces it to two coordinates on the output
//! surface of a small network policy, trains that policy by minimizing a
//! sampled barrier loss, simulates the full-order closed loop, refits a
//! residual reduced flow from logged trajectories, and checks barrier
//! conditions by dense sampling, including a combined full-state barrier
//! built from an output-error Lyapunov certificate.

pub mod barriers;
pub mod config;
pub mod dynamics;
pub mod error;
pub mod jet;
pub mod linalg;
pub mod policy;
pub mod residual;
pub mod scalar;
pub mod simulator;
pub mod tape;
pub mod training;
pub mod verification;
pub mod zero_dynamics;

pub use barriers::{
    barrier_loss, barrier_loss_grad, barrier_loss_grid, condition_residual, continuous_residual,
    derive_seed, discrete_residual, eval_barrier, halton_region, sample_region, BarrierFunc,
    BarrierSpec, Condition, FlowModel, LossBreakdown, Region,
};
pub use config::{
    BarrierConfig, PolicyConfig, RefineSection, RegionConfig, RolloutConfig, RunConfig,
    VerifyConfig,
};
pub use dynamics::{
    dynamics_terms, forward_dynamics, guard_value, guard_velocity, impact_map, kinematics,
    momentum, relabel_config, total_energy, z2_of_speed, ImpactResult, Kinematics, ModelParams,
    RobotState,
};
pub use error::{Error, Result};
pub use policy::{Checkpoint, MlpArch, MlpParams};
pub use residual::{
    episodic_refine, estimate_zdot, fit_residual, violation_metric, EpisodeRecord, RefineConfig,
    RefineReport, ResidualFit, ResidualFitConfig, ZdotSample,
};
pub use simulator::{integrate_fixed, rollout, rollout_with_models, ControlLaw, LogRow, Outcome, RolloutResult, SegmentEnergy, SimConfig, StepStats, TrajectoryLog};
pub use training::{train_policy, write_history_csv, EpochRecord, OptimizerKind, TrainConfig, TrainResult};
pub use verification::{
    certify, combined_barrier_check, lipschitz_estimate, output_lyapunov, sigma_sweep,
    BarrierReport, CertificationReport, CombinedReport, OutputLyapunov,
};
pub use zero_dynamics::{
    omega, omega_off_manifold, phi, phi_inverse, phi_inverse_zero, zero_impact, zero_impact_full,
};
