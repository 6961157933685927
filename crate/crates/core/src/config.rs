//! One-file run configuration: plant models, regions, barrier constants,
//! and the per-stage settings, with validation and assembly of the barrier
//! specs used everywhere downstream.

use crate::barriers::{BarrierFunc, BarrierSpec, Condition, Region};
use crate::dynamics::{z2_of_speed, ModelParams};
use crate::error::{Error, Result};
use crate::policy::MlpArch;
use crate::residual::ResidualFitConfig;
use crate::simulator::SimConfig;
use crate::training::TrainConfig;
use serde::{Deserialize, Serialize};

/// Operating box and guard buffer on the reduced coordinates. Momentum
/// bounds are given as forward hip speeds and converted through the nominal
/// model.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RegionConfig {
    pub z1: [f64; 2],
    pub speed: [f64; 2],
    /// Nominal phase at touchdown; the guard buffer and equality slice sit
    /// here.
    pub impact_z1: f64,
    pub impact_eps: f64,
}

impl Default for RegionConfig {
    fn default() -> Self {
        Self { z1: [-0.35, 0.35], speed: [0.2, 1.2], impact_z1: 0.3, impact_eps: 0.03 }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BarrierConfig {
    pub torso_min: f64,
    pub torso_max: f64,
    /// Inset applied to the torso window during training only; see
    /// [`RunConfig::build_training_specs`].
    pub torso_train_margin: f64,
    /// Keep-out disk near the ground ahead of the stance foot. A point-foot
    /// walker with equal leg lengths cannot lift the swing foot at the
    /// instant the legs pass each other (its height there is identically
    /// zero), so the disk sits on the forward half of the step and the
    /// condition is enforced only on the forward phase window; the swing
    /// foot then has to cross early and hold in front, clear of the disk.
    pub clearance_center: [f64; 2],
    pub clearance_radius: f64,
    pub clearance_max: f64,
    /// Phase window on which the clearance condition is enforced.
    pub clearance_z1: [f64; 2],
    pub clearance_slope: f64,
    pub impact_bound: f64,
    /// Window on the phase jump: compare the sum (printed form) or the
    /// difference of pre and post values.
    pub impact_z1_sum: bool,
    pub impact_z2_sum: bool,
    /// Momentum jumps are normalized by the momentum at this hip speed.
    pub impact_scale_speed: f64,
    pub slope: f64,
    pub gamma: f64,
    pub equality_weight: f64,
}

impl Default for BarrierConfig {
    fn default() -> Self {
        Self {
            torso_min: -std::f64::consts::PI / 10.0,
            torso_max: 0.05,
            torso_train_margin: 0.05,
            clearance_center: [0.3, -0.05],
            clearance_radius: 0.07,
            clearance_max: 0.3,
            clearance_z1: [0.15, 0.35],
            clearance_slope: 6.0,
            impact_bound: 0.15,
            impact_z1_sum: true,
            impact_z2_sum: false,
            impact_scale_speed: 1.5,
            slope: 1.0,
            gamma: 0.5,
            equality_weight: 10.0,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PolicyConfig {
    pub hidden: Vec<usize>,
    pub output_shift: [f64; 2],
    pub output_scale: [f64; 2],
    /// Start from a regression onto a reference stepping motion instead of
    /// random weights. Random starts consistently settle into a no-step
    /// solution where the swing leg shadows the stance leg: the equality
    /// terms hold there and the hinge pressure of the impact window alone
    /// cannot climb back out.
    pub seeded_init: bool,
    /// Torso lean of the reference motion, same orientation as the torso
    /// window. Sits well forward of the window midpoint: the forward lean
    /// is what restores the momentum each touchdown takes away, and at the
    /// midpoint the step-to-step map loses momentum until the walker can
    /// no longer carry itself over the stance leg.
    pub seed_torso: f64,
    /// Swing-speed shaping of the reference motion; larger values move the
    /// leg swap earlier in the step. Must stay below 1/z1_max so the
    /// reference stays finite on the operating box.
    pub seed_fling: f64,
}

impl Default for PolicyConfig {
    fn default() -> Self {
        Self {
            hidden: vec![16, 16],
            output_shift: [-0.13, 0.13],
            output_scale: [0.5, 0.5],
            seeded_init: true,
            seed_torso: -0.25,
            seed_fling: 2.8,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RolloutConfig {
    /// Nominal walking speed at touchdown; rollouts start from the
    /// post-impact image of the impact point at this speed, which puts the
    /// initial state on the surface. Must be fast enough that the reduced
    /// flow carries the hip over the stance foot on the first step.
    pub init_speed: f64,
}

impl Default for RolloutConfig {
    fn default() -> Self {
        Self { init_speed: 1.15 }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RefineSection {
    pub episodes: usize,
}

impl Default for RefineSection {
    fn default() -> Self {
        Self { episodes: 3 }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct VerifyConfig {
    pub n_samples: usize,
    pub tol: f64,
    /// Gains of the linearizing output loop the combined certificate
    /// assumes; independent of the tracking gains used in simulation.
    pub lyap_kp: f64,
    pub lyap_kd: f64,
    /// Decay slope of the combined check; must not exceed half the Lyapunov
    /// decay rate at the gains above.
    pub combined_alpha: f64,
    /// Phase range the combined certificate covers. Spans the closed-loop
    /// orbit, touchdown through post-impact re-entry, and stays inside the
    /// sampling box, whose outer corners exist only to exercise the guard
    /// buffer and are never reached by the flow.
    pub combined_z1: [f64; 2],
}

impl Default for VerifyConfig {
    fn default() -> Self {
        Self {
            n_samples: 10_000,
            tol: 1e-3,
            lyap_kp: 1.0,
            lyap_kd: 2.0,
            combined_alpha: 0.25,
            combined_z1: [-0.32, 0.31],
        }
    }
}

fn default_surrogate() -> ModelParams {
    let nominal = ModelParams::default();
    ModelParams {
        torso_mass: 1.2 * nominal.torso_mass,
        leg_mass: 1.1 * nominal.leg_mass,
        joint_damping: 0.5,
        ..nominal
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub seed: u64,
    pub out_dir: std::path::PathBuf,
    pub model: ModelParams,
    /// Stand-in for hardware: same geometry, perturbed inertias and damping.
    pub surrogate: ModelParams,
    pub policy: PolicyConfig,
    pub regions: RegionConfig,
    pub barriers: BarrierConfig,
    pub train: TrainConfig,
    pub loss_threshold: f64,
    pub sim: SimConfig,
    pub rollout: RolloutConfig,
    pub residual: ResidualFitConfig,
    pub refine: RefineSection,
    pub verify: VerifyConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            out_dir: "artifacts".into(),
            model: ModelParams::default(),
            surrogate: default_surrogate(),
            policy: PolicyConfig::default(),
            regions: RegionConfig::default(),
            barriers: BarrierConfig::default(),
            train: TrainConfig::default(),
            loss_threshold: 1e-2,
            sim: SimConfig::default(),
            rollout: RolloutConfig::default(),
            residual: ResidualFitConfig::default(),
            refine: RefineSection::default(),
            verify: VerifyConfig::default(),
        }
    }
}

impl RunConfig {
    pub fn load(path: &std::path::Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        let cfg: RunConfig = serde_json::from_str(&text)?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn save(&self, path: &std::path::Path) -> Result<()> {
        std::fs::write(path, serde_json::to_string_pretty(self)?)?;
        Ok(())
    }

    pub fn validate(&self) -> Result<()> {
        self.train.validate()?;
        self.sim.validate()?;
        let r = &self.regions;
        if !(r.z1[0] < r.z1[1]) {
            return Err(Error::InvalidConfig("empty phase range".into()));
        }
        if !(0.0 < r.speed[0] && r.speed[0] < r.speed[1]) {
            return Err(Error::InvalidConfig("speed range must be positive and increasing".into()));
        }
        let lo = r.impact_z1 - r.impact_eps;
        let hi = r.impact_z1 + r.impact_eps;
        if !(r.impact_eps > 0.0 && r.z1[0] <= lo && hi <= r.z1[1]) {
            return Err(Error::InvalidConfig(format!(
                "guard buffer [{lo}, {hi}] must sit inside the phase range {:?}",
                r.z1
            )));
        }
        let b = &self.barriers;
        if !(b.torso_min < b.torso_max) {
            return Err(Error::InvalidConfig("empty torso window".into()));
        }
        if !(b.torso_train_margin >= 0.0
            && b.torso_min + b.torso_train_margin < b.torso_max - b.torso_train_margin)
        {
            return Err(Error::InvalidConfig("torso training margin swallows the window".into()));
        }
        if !(b.clearance_radius > 0.0 && b.clearance_max > 0.0 && b.clearance_slope > 0.0) {
            return Err(Error::InvalidConfig("clearance circle needs positive extents".into()));
        }
        if !(r.z1[0] <= b.clearance_z1[0] && b.clearance_z1[0] < b.clearance_z1[1] && b.clearance_z1[1] <= r.z1[1]) {
            return Err(Error::InvalidConfig("clearance phase window must sit inside the phase range".into()));
        }
        if !(self.policy.seed_fling > 0.0 && self.policy.seed_fling * r.z1[1].max(-r.z1[0]) < 1.0) {
            return Err(Error::InvalidConfig(
                "seed_fling must be positive and below 1/z1_max so the reference swing stays finite".into(),
            ));
        }
        if !(b.torso_min + b.torso_train_margin < self.policy.seed_torso
            && self.policy.seed_torso < b.torso_max - b.torso_train_margin)
        {
            return Err(Error::InvalidConfig(
                "seed_torso must lie inside the inset torso window".into(),
            ));
        }
        if !(b.impact_bound > 0.0 && b.impact_scale_speed > 0.0) {
            return Err(Error::InvalidConfig("impact window needs positive extents".into()));
        }
        if self.model.leg_length != self.surrogate.leg_length
            || self.model.torso_length != self.surrogate.torso_length
        {
            return Err(Error::InvalidConfig(
                "surrogate must keep the nominal geometry; perturb masses and damping only".into(),
            ));
        }
        if !(self.loss_threshold > 0.0) {
            return Err(Error::InvalidConfig("loss threshold must be positive".into()));
        }
        if self.verify.n_samples < 1000 {
            return Err(Error::InvalidConfig("verification needs at least 1000 samples".into()));
        }
        if !(self.verify.tol > 0.0 && self.verify.combined_alpha > 0.0) {
            return Err(Error::InvalidConfig("verification tolerances must be positive".into()));
        }
        let cz = self.verify.combined_z1;
        if !(r.z1[0] <= cz[0] && cz[0] < cz[1] && cz[1] <= r.z1[1]) {
            return Err(Error::InvalidConfig(
                "combined certificate range must be a nonempty slice of the operating box".into(),
            ));
        }
        if self.refine.episodes == 0 {
            return Err(Error::InvalidConfig("refinement needs at least one episode".into()));
        }
        self.policy_arch().validate()?;
        for spec in self.build_specs()? {
            spec.validate()?;
        }
        Ok(())
    }

    /// Momentum band corresponding to the configured speed range, through
    /// the nominal model.
    pub fn z2_band(&self) -> [f64; 2] {
        [z2_of_speed(&self.model, self.regions.speed[0]), z2_of_speed(&self.model, self.regions.speed[1])]
    }

    /// Policy architecture with input normalization derived from the
    /// operating box, so the network always sees order-one coordinates.
    pub fn policy_arch(&self) -> MlpArch {
        let z2 = self.z2_band();
        let mut arch = MlpArch::plain(2, self.policy.hidden.clone(), 2);
        arch.input_shift =
            vec![0.5 * (self.regions.z1[0] + self.regions.z1[1]), 0.5 * (z2[0] + z2[1])];
        arch.input_scale =
            vec![0.5 * (self.regions.z1[1] - self.regions.z1[0]), 0.5 * (z2[1] - z2[0])];
        arch.output_shift = self.policy.output_shift.to_vec();
        arch.output_scale = self.policy.output_scale.to_vec();
        arch
    }

    /// The five walking barriers in a fixed order: torso window on the
    /// operating box, swing clearance on the forward phase window, impact
    /// window and step symmetry on the guard buffer, touchdown height on
    /// the impact slice.
    pub fn build_specs(&self) -> Result<Vec<BarrierSpec>> {
        self.specs_with_torso(self.barriers.torso_min, self.barriers.torso_max)
    }

    /// Specs for the optimizer: the torso window is shrunk by the training
    /// margin. Directions the loss leaves flat drift until a hinge engages,
    /// which parks the surface exactly on the window boundary; training
    /// against the inset window leaves that slack to certification and to
    /// the tracking error of the closed loop.
    ///
    /// A sixth condition repeats the torso window at the combined
    /// certificate's decay slope, on the certificate's own phase range.
    /// That slope sits below the Lyapunov cap, so it is a strictly harder
    /// flow condition in the window interior; a policy trained without it
    /// satisfies the fast-decay condition yet fails the strengthened
    /// premise the full-state certificate needs. Training it on the inset
    /// window makes the true-window premise hold with slack of at least
    /// slope times the margin wherever the hinge has converged.
    pub fn build_training_specs(&self) -> Result<Vec<BarrierSpec>> {
        let m = self.barriers.torso_train_margin;
        let mut specs =
            self.specs_with_torso(self.barriers.torso_min + m, self.barriers.torso_max - m)?;
        let torso = specs[0].clone();
        specs.push(BarrierSpec {
            name: "torso_window_combined".into(),
            condition: Condition::Continuous { slope: self.verify.combined_alpha },
            region: Region::Box { z1: self.verify.combined_z1, z2: self.z2_band() },
            ..torso
        });
        Ok(specs)
    }

    /// Premise of the full-state certificate: the true torso window must
    /// decay no faster than the combined slope over the orbit's phase
    /// range. Checked against the strengthening constant by the sweep.
    pub fn combined_spec(&self) -> Result<BarrierSpec> {
        let b = &self.barriers;
        Ok(BarrierSpec {
            name: "torso_window_combined".into(),
            func: BarrierFunc::TorsoWindow { min: b.torso_min, max: b.torso_max },
            condition: Condition::Continuous { slope: self.verify.combined_alpha },
            region: Region::Box { z1: self.verify.combined_z1, z2: self.z2_band() },
        })
    }

    fn specs_with_torso(&self, torso_min: f64, torso_max: f64) -> Result<Vec<BarrierSpec>> {
        let z2 = self.z2_band();
        if !(z2[0] < z2[1]) {
            return Err(Error::InvalidConfig("degenerate momentum band".into()));
        }
        let r = &self.regions;
        let b = &self.barriers;
        let operating = Region::Box { z1: r.z1, z2 };
        let forward = Region::Box { z1: b.clearance_z1, z2 };
        let buffer = Region::Box { z1: [r.impact_z1 - r.impact_eps, r.impact_z1 + r.impact_eps], z2 };
        let slice = Region::Slice { z1: r.impact_z1, z2 };
        let specs = vec![
            BarrierSpec {
                name: "torso_window".into(),
                func: BarrierFunc::TorsoWindow { min: torso_min, max: torso_max },
                condition: Condition::Continuous { slope: b.slope },
                region: operating,
            },
            BarrierSpec {
                name: "swing_clearance".into(),
                func: BarrierFunc::SwingClearance {
                    center: b.clearance_center,
                    radius: b.clearance_radius,
                    max: b.clearance_max,
                },
                condition: Condition::Continuous { slope: b.clearance_slope },
                region: forward,
            },
            BarrierSpec {
                name: "impact_window".into(),
                func: BarrierFunc::ImpactWindow {
                    bound: b.impact_bound,
                    z1_sum: b.impact_z1_sum,
                    z2_sum: b.impact_z2_sum,
                    z2_scale: z2_of_speed(&self.model, b.impact_scale_speed),
                },
                condition: Condition::Discrete { gamma: b.gamma },
                region: buffer,
            },
            BarrierSpec {
                name: "step_symmetry".into(),
                func: BarrierFunc::StepSymmetry,
                condition: Condition::Equality { weight: b.equality_weight },
                region: buffer,
            },
            BarrierSpec {
                name: "touchdown_height".into(),
                func: BarrierFunc::TouchdownHeight,
                condition: Condition::Equality { weight: b.equality_weight },
                region: slice,
            },
        ];
        Ok(specs)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn default_config_validates_and_builds_five_specs() {
        let cfg = RunConfig::default();
        cfg.validate().unwrap();
        let specs = cfg.build_specs().unwrap();
        assert_eq!(specs.len(), 5);
        let names: Vec<&str> = specs.iter().map(|s| s.name.as_str()).collect();
        assert_eq!(
            names,
            ["torso_window", "swing_clearance", "impact_window", "step_symmetry", "touchdown_height"]
        );
        // Training adds the slow-decay torso condition on the inset window.
        let train = cfg.build_training_specs().unwrap();
        assert_eq!(train.len(), 6);
        assert_eq!(train[5].name, "torso_window_combined");
        let Condition::Continuous { slope } = train[5].condition else {
            panic!("slow-decay condition must be a flow condition")
        };
        assert_eq!(slope, cfg.verify.combined_alpha);
        assert!(slope < 1.0, "the added condition must decay slower than the window's own");
        let Region::Box { z1, .. } = train[5].region else { panic!("combined region is a box") };
        assert_eq!(z1, cfg.verify.combined_z1, "slow-decay condition trains where it certifies");
        // The certificate premise uses the true window on the same range.
        let combined = cfg.combined_spec().unwrap();
        combined.validate().unwrap();
        let BarrierFunc::TorsoWindow { min, max } = combined.func else {
            panic!("combined premise guards the torso window")
        };
        assert_eq!((min, max), (cfg.barriers.torso_min, cfg.barriers.torso_max));
        let z2 = cfg.z2_band();
        assert!(z2[0] > 0.0 && z2[0] < z2[1]);
        // Guard buffer is contained in the operating box.
        let (bz1, bz2) = specs[2].region.bounds();
        let (oz1, oz2) = specs[0].region.bounds();
        assert!(oz1[0] <= bz1[0] && bz1[1] <= oz1[1]);
        assert_eq!(bz2, oz2);
    }

    #[test]
    fn config_json_round_trips_exactly() {
        let cfg = RunConfig::default();
        let text = serde_json::to_string_pretty(&cfg).unwrap();
        let back: RunConfig = serde_json::from_str(&text).unwrap();
        assert_eq!(back, cfg);
        let text2 = serde_json::to_string_pretty(&back).unwrap();
        assert_eq!(text2, text);
    }

    #[test]
    fn unknown_fields_are_rejected() {
        let mut v: serde_json::Value =
            serde_json::to_value(RunConfig::default()).unwrap();
        v["turbo"] = serde_json::json!(true);
        let err = serde_json::from_value::<RunConfig>(v);
        assert!(err.is_err(), "unknown top-level keys must fail loudly");
    }

    #[test]
    fn misplaced_guard_buffer_is_rejected() {
        let mut cfg = RunConfig::default();
        cfg.regions.impact_z1 = 0.34;
        assert!(cfg.validate().is_err(), "buffer spills past the phase range");
    }

    #[test]
    fn geometry_perturbations_are_rejected() {
        let mut cfg = RunConfig::default();
        cfg.surrogate.leg_length = 1.1;
        assert!(cfg.validate().is_err());
    }
}
