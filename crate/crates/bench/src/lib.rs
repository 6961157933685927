//! Shared fixtures for the criterion benches.
//!
//! The policy is the seeded reference fit rather than a trained
//! checkpoint, so fixture setup stays in the millisecond range and the
//! benches measure code paths, not a particular set of weights.

use zdgait_core::config::RunConfig;
use zdgait_core::dynamics::{z2_of_speed, RobotState};
use zdgait_core::policy::MlpParams;
use zdgait_core::training::seed_policy;
use zdgait_core::zero_dynamics::{phi_inverse_zero, zero_impact};

pub struct Fixture {
    pub cfg: RunConfig,
    pub policy: MlpParams,
    pub x0: RobotState,
}

pub fn fixture() -> Fixture {
    let cfg = RunConfig::default();
    cfg.validate().expect("default config must validate");
    let policy = seed_policy(
        cfg.policy_arch(),
        cfg.policy.seed_torso,
        cfg.regions.impact_z1,
        cfg.policy.seed_fling,
        cfg.seed,
    )
    .expect("seeded reference fit");
    let pre = [cfg.regions.impact_z1, z2_of_speed(&cfg.model, cfg.rollout.init_speed)];
    let z0 = zero_impact(pre, &cfg.model, &policy).expect("post-impact image");
    let x0 = phi_inverse_zero(z0, &cfg.model, &policy).expect("manifold lift");
    Fixture { cfg, policy, x0 }
}
