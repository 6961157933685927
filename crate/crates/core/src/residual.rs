//! Residual correction of the reduced flow from logged rollouts.
//!
//! The reduced rate is estimated by central differences on the logged
//! coordinates, segment by segment between impacts, discarding samples next
//! to each boundary. A small network is fit to the gap between those
//! measured rates and the nominal flow, and episodic refinement alternates
//! training against the corrected flow with rollouts on the (possibly
//! different) plant.
//!
//! The violation metric judges a rollout by plant evidence alone: window
//! derivatives are contracted with measured rates, impact windows are
//! evaluated on logged pre/post pairs, and the symmetry defect on logged
//! post-impact rows. The flow model never substitutes for the data.

use crate::barriers::{
    continuous_residual_with_flow, derive_seed, impact_window_direct, BarrierFunc, BarrierSpec,
    Condition, FlowModel,
};
use crate::dynamics::ModelParams;
use crate::error::{Error, Result};
use crate::policy::{forward_core, MlpArch, MlpParams};
use crate::simulator::{
    rollout_with_models, Outcome, RolloutResult, SimConfig, TrajectoryLog,
};
use crate::tape::Tape;
use crate::training::{Optimizer, OptimizerKind, TrainConfig, TrainResult};
use crate::zero_dynamics::{omega, phi_inverse_zero};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ZdotSample {
    pub z: [f64; 2],
    pub zdot: [f64; 2],
}

/// Central-difference rate estimates from the regular rows of a log.
///
/// Runs are split at impact rows; the two samples adjacent to every run
/// boundary are discarded, so the differences never straddle a jump or lean
/// on one-sided stencils. Returns the samples and the count of runs too
/// short to use.
pub fn estimate_zdot(log: &TrajectoryLog) -> (Vec<ZdotSample>, usize) {
    let mut samples = Vec::new();
    let mut skipped = 0usize;
    let mut run: Vec<(f64, [f64; 2])> = Vec::new();
    let flush = |run: &mut Vec<(f64, [f64; 2])>, samples: &mut Vec<ZdotSample>, skipped: &mut usize| {
        if run.len() < 5 {
            if !run.is_empty() {
                *skipped += 1;
                log::warn!("discarding {}-row segment, too short to difference", run.len());
            }
        } else {
            for i in 2..run.len() - 2 {
                let (t0, z0) = run[i - 1];
                let (t1, z1) = run[i + 1];
                let dt = t1 - t0;
                samples.push(ZdotSample {
                    z: run[i].1,
                    zdot: [(z1[0] - z0[0]) / dt, (z1[1] - z0[1]) / dt],
                });
            }
        }
        run.clear();
    };
    for row in &log.rows {
        if row.event == 0 {
            run.push((row.t, row.z));
        } else {
            flush(&mut run, &mut samples, &mut skipped);
        }
    }
    flush(&mut run, &mut samples, &mut skipped);
    (samples, skipped)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ResidualFitConfig {
    pub hidden: Vec<usize>,
    pub epochs: usize,
    pub batch: usize,
    pub lr: f64,
    pub weight_decay: f64,
    /// Every n-th sample is held out for validation.
    pub holdout_every: usize,
    pub optimizer: OptimizerKind,
    pub seed: u64,
}

impl Default for ResidualFitConfig {
    fn default() -> Self {
        Self {
            hidden: vec![16],
            epochs: 300,
            batch: 4096,
            lr: 1e-2,
            weight_decay: 0.0,
            holdout_every: 5,
            optimizer: OptimizerKind::NormalizedPerNeuron,
            seed: 0,
        }
    }
}

#[derive(Clone, Debug)]
pub struct ResidualFit {
    pub params: MlpParams,
    pub train_mse: f64,
    pub holdout_mse: f64,
    /// Root-mean-square of the fitted targets; the scale the MSEs are
    /// judged against.
    pub target_rms: f64,
    pub n_train: usize,
    pub n_holdout: usize,
}

fn mse_of(params: &MlpParams, xs: &[[f64; 2]], ts: &[[f64; 2]]) -> f64 {
    if xs.is_empty() {
        return 0.0;
    }
    let mut acc = 0.0;
    for (x, t) in xs.iter().zip(ts) {
        let e = params.eval(*x);
        acc += (e[0] - t[0]).powi(2) + (e[1] - t[1]).powi(2);
    }
    acc / xs.len() as f64
}

/// Fits a residual flow to the gap between measured rates and the nominal
/// flow of `policy` under `model`.
///
/// Input normalization is copied from the policy; output normalization is
/// set to the target statistics, so the network trains on standardized
/// values while evaluating in raw units.
pub fn fit_residual(
    samples: &[ZdotSample],
    policy: &MlpParams,
    model: &ModelParams,
    cfg: &ResidualFitConfig,
) -> Result<ResidualFit> {
    if cfg.epochs == 0 || cfg.batch == 0 || cfg.holdout_every < 2 {
        return Err(Error::InvalidConfig(
            "fit needs positive epochs and batch, holdout_every >= 2".into(),
        ));
    }
    let mut train_x = Vec::new();
    let mut train_t = Vec::new();
    let mut hold_x = Vec::new();
    let mut hold_t = Vec::new();
    for (i, s) in samples.iter().enumerate() {
        let nominal = omega(s.z, model, policy, None)?;
        let target = [s.zdot[0] - nominal[0], s.zdot[1] - nominal[1]];
        if i % cfg.holdout_every == 0 {
            hold_x.push(s.z);
            hold_t.push(target);
        } else {
            train_x.push(s.z);
            train_t.push(target);
        }
    }
    if train_x.len() < 8 {
        return Err(Error::InvalidConfig(format!(
            "only {} training samples; log too sparse to fit",
            train_x.len()
        )));
    }

    // Output standardization from training-target statistics.
    let n = train_t.len() as f64;
    let mut mean = [0.0f64; 2];
    for t in &train_t {
        mean[0] += t[0];
        mean[1] += t[1];
    }
    mean[0] /= n;
    mean[1] /= n;
    let mut var = [0.0f64; 2];
    for t in &train_t {
        var[0] += (t[0] - mean[0]).powi(2);
        var[1] += (t[1] - mean[1]).powi(2);
    }
    let std = [(var[0] / n).sqrt().max(1e-9), (var[1] / n).sqrt().max(1e-9)];

    let mut arch = MlpArch::plain(2, cfg.hidden.clone(), 2);
    arch.input_shift = policy.arch.input_shift.clone();
    arch.input_scale = policy.arch.input_scale.clone();
    arch.output_shift = mean.to_vec();
    arch.output_scale = std.to_vec();
    let mut params = MlpParams::init(arch, derive_seed(cfg.seed, 0x11))?;

    let target_rms = (train_t.iter().map(|t| t[0] * t[0] + t[1] * t[1]).sum::<f64>() / n).sqrt();

    let mut opt = Optimizer::new(cfg.optimizer, &params.arch, params.w.len());
    let tape = Tape::with_capacity(1 << 18);
    let mut adj: Vec<f64> = Vec::new();
    let mut grad = vec![0.0; params.w.len()];
    let mut order: Vec<usize> = (0..train_x.len()).collect();

    for epoch in 0..cfg.epochs {
        let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(cfg.seed, 1 + epoch as u64));
        order.shuffle(&mut rng);
        for chunk in order.chunks(cfg.batch) {
            tape.clear();
            let leaves: Vec<_> = params.w.iter().map(|&v| tape.var(v)).collect();
            let mut loss = crate::tape::Var::constant(0.0);
            for &i in chunk {
                let x = [
                    crate::tape::Var::constant(train_x[i][0]),
                    crate::tape::Var::constant(train_x[i][1]),
                ];
                let mut out = [crate::tape::Var::constant(0.0); 2];
                forward_core(&params.arch, |k| leaves[k], &x, &mut out);
                for c in 0..2 {
                    let e = out[c] - crate::tape::Var::constant(train_t[i][c]);
                    loss = loss + e * e;
                }
            }
            loss = loss * crate::tape::Var::constant(1.0 / chunk.len() as f64);
            tape.gradient_into(loss, &mut adj, &mut grad);
            opt.step(&mut params.w, &grad, cfg.lr, cfg.weight_decay);
        }
    }

    Ok(ResidualFit {
        train_mse: mse_of(&params, &train_x, &train_t),
        holdout_mse: mse_of(&params, &hold_x, &hold_t),
        target_rms,
        n_train: train_x.len(),
        n_holdout: hold_x.len(),
        params,
    })
}

/// Mean condition violation of a logged rollout, judged from the data.
///
/// Continuous specs average the hinge of `grad h . zdot_measured + slope h`
/// over in-region rate samples; impact windows average the hinge of the
/// window value on logged jumps; the symmetry defect averages over logged
/// post-impact rows; touchdown height over pre-impact rows. The model enters
/// only through link geometry.
pub fn violation_metric(
    log: &TrajectoryLog,
    specs: &[BarrierSpec],
    model: &ModelParams,
    policy: &MlpParams,
) -> Result<f64> {
    let (samples, _) = estimate_zdot(log);
    let flow = FlowModel { model, policy, residual: None };
    let pre_rows: Vec<_> = log.rows.iter().filter(|r| r.event == 1).collect();
    let post_rows: Vec<_> = log.rows.iter().filter(|r| r.event == 2).collect();

    let mut total = 0.0;
    for spec in specs {
        match spec.condition {
            Condition::Continuous { .. } => {
                let mut acc = 0.0;
                let mut n = 0usize;
                for s in &samples {
                    if spec.region.contains(s.z) {
                        acc += (-continuous_residual_with_flow(spec, s.z, s.zdot, &flow)?).max(0.0);
                        n += 1;
                    }
                }
                if n > 0 {
                    total += acc / n as f64;
                }
            }
            Condition::Discrete { .. } => {
                let mut acc = 0.0;
                let mut n = 0usize;
                for (pre, post) in pre_rows.iter().zip(post_rows.iter()) {
                    acc += (-impact_window_direct(&spec.func, pre.z, post.z)?).max(0.0);
                    n += 1;
                }
                if n > 0 {
                    total += acc / n as f64;
                }
            }
            Condition::Equality { weight } => {
                let mut acc = 0.0;
                let mut n = 0usize;
                match spec.func {
                    BarrierFunc::StepSymmetry => {
                        for row in &post_rows {
                            let yd = policy.eval(row.z);
                            let d = [row.q[1] - yd[0], row.q[2] - yd[1]];
                            acc += weight * (d[0] * d[0] + d[1] * d[1]);
                            n += 1;
                        }
                    }
                    BarrierFunc::TouchdownHeight => {
                        for row in &pre_rows {
                            acc += weight * row.swing_z * row.swing_z;
                            n += 1;
                        }
                    }
                    _ => {
                        return Err(Error::InvalidConfig(format!(
                            "barrier '{}' cannot be judged from a log",
                            spec.name
                        )))
                    }
                }
                if n > 0 {
                    total += acc / n as f64;
                }
            }
        }
    }
    Ok(total)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RefineConfig {
    pub episodes: usize,
    pub train: TrainConfig,
    pub sim: SimConfig,
    pub fit: ResidualFitConfig,
    /// Touchdown line the evaluation rollouts are launched from; the start
    /// state is the post-impact image of this point, matching how steady
    /// walking re-enters each stride.
    pub impact_z1: f64,
    pub init_speed: f64,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct EpisodeRecord {
    pub episode: usize,
    pub train_best_loss: f64,
    pub train_best_epoch: usize,
    pub outcome: Outcome,
    pub steps: usize,
    pub violation: f64,
    pub fit_holdout_mse: Option<f64>,
    pub fit_target_rms: Option<f64>,
}

#[derive(Clone, Debug)]
pub struct RefineReport {
    pub episodes: Vec<EpisodeRecord>,
    pub policy: MlpParams,
    pub residual: Option<MlpParams>,
}

/// Alternates policy training against the residual-corrected flow with
/// rollouts on the plant, refitting the residual from each rollout's log.
///
/// `design` is the model the controller and the nominal flow believe in;
/// `plant` is what the rollouts integrate. Training runs against
/// `train_specs` while the violation metric judges the rollout against
/// `eval_specs`, so an optimizer-side window inset never softens the
/// reported number. The hook observes each episode's training result,
/// rollout, and fit as they complete.
pub fn episodic_refine(
    cfg: &RefineConfig,
    train_specs: &[BarrierSpec],
    eval_specs: &[BarrierSpec],
    design: &ModelParams,
    plant: &ModelParams,
    init_policy: MlpParams,
    mut on_episode: impl FnMut(&EpisodeRecord, &TrainResult, &RolloutResult, Option<&ResidualFit>) -> Result<()>,
) -> Result<RefineReport> {
    if cfg.episodes == 0 {
        return Err(Error::InvalidConfig("need at least one episode".into()));
    }
    let mut policy = init_policy;
    let mut residual: Option<MlpParams> = None;
    let mut episodes = Vec::with_capacity(cfg.episodes);

    for episode in 0..cfg.episodes {
        let mut train_cfg = cfg.train.clone();
        train_cfg.seed = derive_seed(cfg.train.seed, 0x1000 + episode as u64);
        let trained = crate::training::train_policy(
            &train_cfg,
            train_specs,
            design,
            policy,
            residual.as_ref(),
            |_| {},
        )?;
        policy = trained.params.clone();

        let pre = [cfg.impact_z1, crate::dynamics::z2_of_speed(design, cfg.init_speed)];
        let z0 = crate::zero_dynamics::zero_impact(pre, design, &policy)?;
        let x0 = phi_inverse_zero(z0, design, &policy)?;
        let run = rollout_with_models(&x0, plant, design, &policy, &cfg.sim)?;
        let violation = violation_metric(&run.log, eval_specs, design, &policy)?;

        let (samples, _) = estimate_zdot(&run.log);
        let mut fit_cfg = cfg.fit.clone();
        fit_cfg.seed = derive_seed(cfg.fit.seed, 0x2000 + episode as u64);
        let fit = if samples.len() >= 16 {
            Some(fit_residual(&samples, &policy, design, &fit_cfg)?)
        } else {
            log::warn!(
                "episode {episode}: only {} rate samples, keeping previous residual",
                samples.len()
            );
            None
        };

        let record = EpisodeRecord {
            episode,
            train_best_loss: trained.best_loss,
            train_best_epoch: trained.best_epoch,
            outcome: run.outcome.clone(),
            steps: run.steps.len(),
            violation,
            fit_holdout_mse: fit.as_ref().map(|f| f.holdout_mse),
            fit_target_rms: fit.as_ref().map(|f| f.target_rms),
        };
        on_episode(&record, &trained, &run, fit.as_ref())?;
        episodes.push(record);
        if let Some(f) = fit {
            residual = Some(f.params);
        }
    }

    Ok(RefineReport { episodes, policy, residual })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::barriers::Region;
    use crate::simulator::LogRow;
    use approx::assert_relative_eq;

    fn row(t: f64, z: [f64; 2], event: u8) -> LogRow {
        LogRow { t, q: [0.0; 3], dq: [0.0; 3], z, u: [0.0; 2], swing_z: 0.0, event }
    }

    #[test]
    fn rate_estimates_are_exact_on_quadratics() {
        // z1 = 0.3 t^2 - 0.1 t, z2 = 20 + 2 t: central differences are exact
        // for polynomials of degree two.
        let dt = 2e-3;
        let mut log = TrajectoryLog::default();
        for k in 0..40 {
            let t = k as f64 * dt;
            log.rows.push(row(t, [0.3 * t * t - 0.1 * t, 20.0 + 2.0 * t], 0));
        }
        let (samples, skipped) = estimate_zdot(&log);
        assert_eq!(skipped, 0);
        assert_eq!(samples.len(), 40 - 4);
        for (i, s) in samples.iter().enumerate() {
            let t = (i + 2) as f64 * dt;
            assert_relative_eq!(s.zdot[0], 0.6 * t - 0.1, epsilon = 1e-10);
            assert_relative_eq!(s.zdot[1], 2.0, epsilon = 1e-10);
        }
    }

    #[test]
    fn rate_estimates_respect_impact_boundaries() {
        let dt = 1e-3;
        let mut log = TrajectoryLog::default();
        // Two runs with wildly different slopes, separated by an impact
        // pair; a stencil crossing the boundary would blow the tolerance.
        for k in 0..10 {
            let t = k as f64 * dt;
            log.rows.push(row(t, [t, 30.0 - t], 0));
        }
        log.rows.push(row(10.0 * dt, [0.0105, 28.0], 1));
        log.rows.push(row(10.0 * dt, [-0.0105, 22.0], 2));
        for k in 10..20 {
            let t = k as f64 * dt;
            log.rows.push(row(t, [-5.0 * t, 22.0 + 3.0 * t], 0));
        }
        let (samples, skipped) = estimate_zdot(&log);
        assert_eq!(skipped, 0);
        assert_eq!(samples.len(), 2 * (10 - 4));
        for s in &samples[..6] {
            assert_relative_eq!(s.zdot[0], 1.0, epsilon = 1e-9);
            assert_relative_eq!(s.zdot[1], -1.0, epsilon = 1e-9);
        }
        for s in &samples[6..] {
            assert_relative_eq!(s.zdot[0], -5.0, epsilon = 1e-9);
            assert_relative_eq!(s.zdot[1], 3.0, epsilon = 1e-9);
        }
    }

    #[test]
    fn short_runs_are_skipped_not_mangled() {
        let mut log = TrajectoryLog::default();
        for k in 0..4 {
            log.rows.push(row(k as f64 * 1e-3, [0.0, 20.0], 0));
        }
        log.rows.push(row(4e-3, [0.0, 20.0], 1));
        let (samples, skipped) = estimate_zdot(&log);
        assert!(samples.is_empty());
        assert_eq!(skipped, 1);
    }

    #[test]
    fn fit_recovers_a_planted_residual() {
        let model = ModelParams::default();
        let mut policy_arch = MlpArch::plain(2, vec![8], 2);
        policy_arch.input_shift = vec![0.0, 24.0];
        policy_arch.input_scale = vec![0.35, 14.0];
        let policy = MlpParams::init(policy_arch, 40).unwrap();
        // Planted residual field with visible structure and offset.
        let mut planted_arch = MlpArch::plain(2, vec![6], 2);
        planted_arch.input_scale = vec![0.35, 30.0];
        planted_arch.output_scale = vec![0.4, 2.0];
        planted_arch.output_shift = vec![0.1, -0.5];
        let planted = MlpParams::init(planted_arch, 99).unwrap();

        let region = Region::Box { z1: [-0.3, 0.3], z2: [10.0, 38.0] };
        let samples: Vec<ZdotSample> = crate::barriers::sample_region(&region, 8, 900)
            .into_iter()
            .map(|z| {
                let nominal = omega(z, &model, &policy, None).unwrap();
                let eps = planted.eval(z);
                ZdotSample { z, zdot: [nominal[0] + eps[0], nominal[1] + eps[1]] }
            })
            .collect();

        let cfg = ResidualFitConfig {
            hidden: vec![12],
            epochs: 220,
            batch: 512,
            lr: 2e-2,
            seed: 3,
            ..ResidualFitConfig::default()
        };
        let fit = fit_residual(&samples, &policy, &model, &cfg).unwrap();
        let fit2 = fit_residual(&samples, &policy, &model, &cfg).unwrap();
        assert_eq!(fit.params.w, fit2.params.w, "fit must be deterministic");

        // Judge on fresh points against the planted field directly.
        let mut err = 0.0;
        let mut mag = 0.0;
        let fresh = crate::barriers::sample_region(&region, 77, 400);
        for z in fresh {
            let a = fit.params.eval(z);
            let b = planted.eval(z);
            err += (a[0] - b[0]).powi(2) + (a[1] - b[1]).powi(2);
            mag += b[0] * b[0] + b[1] * b[1];
        }
        let rel = (err / mag).sqrt();
        assert!(rel < 0.1, "planted-field recovery error {rel:.3} relative");
        assert!(fit.holdout_mse < fit.target_rms * fit.target_rms * 0.05);
    }

    #[test]
    fn violation_metric_reads_the_log_not_the_model() {
        let model = ModelParams::default();
        // Torso = z1 + 0.02: window [-0.1, 0.1].
        let policy = MlpParams {
            arch: MlpArch::plain(2, vec![], 2),
            w: vec![0.0, 0.0, 0.0, 0.0, 0.02, -0.4],
        };
        let spec = BarrierSpec {
            name: "torso".into(),
            func: BarrierFunc::TorsoWindow { min: -0.1, max: 0.1 },
            condition: Condition::Continuous { slope: 1.0 },
            region: Region::Box { z1: [-0.35, 0.35], z2: [5.0, 41.0] },
        };
        // Interior samples, z1 fixed safely, rates gentle: no violation.
        let mut log = TrajectoryLog::default();
        for k in 0..20 {
            log.rows.push(row(k as f64 * 2e-3, [0.01, 20.0], 0));
        }
        let v = violation_metric(&log, std::slice::from_ref(&spec), &model, &policy).unwrap();
        assert_eq!(v, 0.0);

        // Same states but racing outward at the upper boundary: h = 0.0 at
        // z1 = 0.08, and the measured rate pushes out hard.
        let mut log = TrajectoryLog::default();
        for k in 0..20 {
            let t = k as f64 * 2e-3;
            log.rows.push(row(t, [0.078 + 10.0 * t, 20.0], 0));
        }
        let v = violation_metric(&log, &[spec], &model, &policy).unwrap();
        assert!(v > 0.0, "outward racing at the boundary must register: {v}");
    }

    #[test]
    fn refine_smoke_runs_one_episode() {
        let model = ModelParams::default();
        let specs = vec![BarrierSpec {
            name: "torso".into(),
            func: BarrierFunc::TorsoWindow { min: -0.7, max: 0.7 },
            condition: Condition::Continuous { slope: 1.0 },
            region: Region::Box { z1: [-0.35, 0.35], z2: [7.0, 41.0] },
        }];
        let cfg = RefineConfig {
            episodes: 1,
            train: TrainConfig {
                epochs: 3,
                samples_per_region: 16,
                lr: 1e-3,
                lr_decay_epochs: vec![],
                ..TrainConfig::default()
            },
            sim: SimConfig { max_time: 0.3, max_steps: 2, ..SimConfig::default() },
            fit: ResidualFitConfig { epochs: 10, ..ResidualFitConfig::default() },
            impact_z1: 0.2,
            init_speed: 0.5,
        };
        let mut arch = MlpArch::plain(2, vec![6], 2);
        arch.output_shift = vec![0.1, -0.45];
        arch.output_scale = vec![0.05, 0.05];
        let init = MlpParams::init(arch, 5).unwrap();
        let mut hook_calls = 0;
        let report = episodic_refine(&cfg, &specs, &specs, &model, &model, init, |rec, _, _, _| {
            hook_calls += 1;
            assert_eq!(rec.episode, 0);
            Ok(())
        })
        .unwrap();
        assert_eq!(hook_calls, 1);
        assert_eq!(report.episodes.len(), 1);
        assert!(report.episodes[0].violation.is_finite());
    }
}
