//! Gradient descent on the sampled barrier loss.
//!
//! Every epoch draws fresh sample streams derived from the run seed, so the
//! loss is a new Monte-Carlo estimate of the same integral each time;
//! optimizer state, schedule, and draws are all deterministic given the
//! config. The loop tracks the best loss seen and returns those weights, not
//! the last ones.

use crate::barriers::{barrier_loss_grad, derive_seed, BarrierSpec, FlowModel};
use crate::dynamics::ModelParams;
use crate::error::{Error, Result};
use crate::policy::{MlpArch, MlpParams};
use serde::{Deserialize, Serialize};
use std::time::Instant;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum OptimizerKind {
    AdamW,
    /// Per-neuron unit-norm gradient steps; scale-free, suited to fitting
    /// targets whose magnitude varies wildly across the region.
    NormalizedPerNeuron,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    pub epochs: usize,
    pub samples_per_region: usize,
    pub lr: f64,
    pub weight_decay: f64,
    /// Epochs at which the learning rate is multiplied by `lr_decay_factor`.
    pub lr_decay_epochs: Vec<usize>,
    pub lr_decay_factor: f64,
    pub optimizer: OptimizerKind,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 1000,
            samples_per_region: 1024,
            // Gentle enough to keep a warm start inside the stepping
            // regime; at 1e-2 the first epochs push the weights into the
            // no-step solution and the rest of the run cannot recover.
            lr: 1e-3,
            weight_decay: 1e-4,
            lr_decay_epochs: vec![400, 800],
            lr_decay_factor: 0.1,
            optimizer: OptimizerKind::AdamW,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0 || self.samples_per_region == 0 {
            return Err(Error::InvalidConfig("epochs and samples_per_region must be positive".into()));
        }
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return Err(Error::InvalidConfig(format!("bad learning rate {}", self.lr)));
        }
        if !(self.weight_decay >= 0.0 && self.lr_decay_factor > 0.0) {
            return Err(Error::InvalidConfig("bad decay settings".into()));
        }
        Ok(())
    }

    fn lr_at(&self, epoch: usize) -> f64 {
        let hits = self.lr_decay_epochs.iter().filter(|&&e| epoch >= e).count();
        self.lr * self.lr_decay_factor.powi(hits as i32)
    }
}

pub(crate) struct AdamW {
    m: Vec<f64>,
    v: Vec<f64>,
    t: i32,
}

impl AdamW {
    const BETA1: f64 = 0.9;
    const BETA2: f64 = 0.999;
    const EPS: f64 = 1e-8;

    fn new(n: usize) -> Self {
        Self { m: vec![0.0; n], v: vec![0.0; n], t: 0 }
    }

    fn step(&mut self, w: &mut [f64], grad: &[f64], lr: f64, wd: f64) {
        self.t += 1;
        let bc1 = 1.0 - Self::BETA1.powi(self.t);
        let bc2 = 1.0 - Self::BETA2.powi(self.t);
        for i in 0..w.len() {
            self.m[i] = Self::BETA1 * self.m[i] + (1.0 - Self::BETA1) * grad[i];
            self.v[i] = Self::BETA2 * self.v[i] + (1.0 - Self::BETA2) * grad[i] * grad[i];
            let m_hat = self.m[i] / bc1;
            let v_hat = self.v[i] / bc2;
            // Decoupled decay: the regularizer bypasses the moment estimates.
            w[i] -= lr * (m_hat / (v_hat.sqrt() + Self::EPS) + wd * w[i]);
        }
    }
}

/// One row of weights plus its bias; the normalization group.
struct NeuronGroup {
    w0: usize,
    w1: usize,
    bias: usize,
}

pub(crate) struct NormalizedPerNeuron {
    groups: Vec<NeuronGroup>,
}

impl NormalizedPerNeuron {
    fn new(arch: &MlpArch) -> Self {
        let mut groups = Vec::new();
        let mut off = 0;
        for (n_in, n_out) in arch.layer_dims() {
            let bias0 = off + n_in * n_out;
            for j in 0..n_out {
                groups.push(NeuronGroup {
                    w0: off + j * n_in,
                    w1: off + (j + 1) * n_in,
                    bias: bias0 + j,
                });
            }
            off = bias0 + n_out;
        }
        Self { groups }
    }

    fn step(&self, w: &mut [f64], grad: &[f64], lr: f64, wd: f64) {
        for g in &self.groups {
            let mut sq = grad[g.bias] * grad[g.bias];
            for i in g.w0..g.w1 {
                sq += grad[i] * grad[i];
            }
            let norm = sq.sqrt();
            let scale = if norm > 1e-300 { 1.0 / norm } else { 0.0 };
            for i in (g.w0..g.w1).chain(std::iter::once(g.bias)) {
                w[i] -= lr * (grad[i] * scale + wd * w[i]);
            }
        }
    }
}

pub(crate) enum Optimizer {
    AdamW(AdamW),
    NormalizedPerNeuron(NormalizedPerNeuron),
}

impl Optimizer {
    pub(crate) fn new(kind: OptimizerKind, arch: &MlpArch, n_params: usize) -> Self {
        match kind {
            OptimizerKind::AdamW => Optimizer::AdamW(AdamW::new(n_params)),
            OptimizerKind::NormalizedPerNeuron => {
                Optimizer::NormalizedPerNeuron(NormalizedPerNeuron::new(arch))
            }
        }
    }

    pub(crate) fn step(&mut self, w: &mut [f64], grad: &[f64], lr: f64, wd: f64) {
        match self {
            Optimizer::AdamW(o) => o.step(w, grad, lr, wd),
            Optimizer::NormalizedPerNeuron(o) => o.step(w, grad, lr, wd),
        }
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub lr: f64,
    /// Loss at the weights entering this epoch, before the step.
    pub total: f64,
    pub per_spec: Vec<f64>,
}

#[derive(Clone, Debug)]
pub struct TrainResult {
    /// Weights from the best epoch, not the last one.
    pub params: MlpParams,
    pub best_epoch: usize,
    pub best_loss: f64,
    pub history: Vec<EpochRecord>,
    pub wall_seconds: f64,
}

/// Minimizes the barrier loss over the given specs starting from `init`.
///
/// `on_epoch` observes each record as it is produced (progress logging,
/// intermediate checkpoints).
pub fn train_policy(
    cfg: &TrainConfig,
    specs: &[BarrierSpec],
    model: &ModelParams,
    init: MlpParams,
    residual: Option<&MlpParams>,
    mut on_epoch: impl FnMut(&EpochRecord),
) -> Result<TrainResult> {
    cfg.validate()?;
    for spec in specs {
        spec.validate()?;
    }
    let start = Instant::now();
    let mut params = init;
    let mut grad = vec![0.0; params.w.len()];
    let mut opt = Optimizer::new(cfg.optimizer, &params.arch, params.w.len());

    let mut best_w = params.w.clone();
    let mut best_epoch = 0;
    let mut best_loss = f64::INFINITY;
    let mut history = Vec::with_capacity(cfg.epochs);

    for epoch in 0..cfg.epochs {
        let lr = cfg.lr_at(epoch);
        let seed = derive_seed(cfg.seed, epoch as u64);
        let loss = {
            let flow = FlowModel { model, policy: &params, residual };
            barrier_loss_grad(specs, &flow, cfg.samples_per_region, seed, &mut grad)?
        };
        if !loss.total.is_finite() {
            return Err(Error::NonFinite("training loss"));
        }
        if loss.total < best_loss {
            best_loss = loss.total;
            best_epoch = epoch;
            best_w.copy_from_slice(&params.w);
        }
        let record = EpochRecord { epoch, lr, total: loss.total, per_spec: loss.per_spec };
        on_epoch(&record);
        history.push(record);
        opt.step(&mut params.w, &grad, lr, cfg.weight_decay);
    }

    params.w = best_w;
    Ok(TrainResult {
        params,
        best_epoch,
        best_loss,
        history,
        wall_seconds: start.elapsed().as_secs_f64(),
    })
}

/// Desired outputs of the reference stepping motion at phase `z1`.
///
/// The swing-leg target follows the involution
/// `s(z1) = -(z1 + f a^2) / (1 + f z1)` with `a = impact_z1` and
/// `f = fling`: `s(s(z1)) = z1` and `s(±a) = ∓a` hold for every `f`, so the
/// post-impact relabeling maps the reference onto itself and the touchdown
/// geometry is exact, while `f > 0` moves the leg swap early in the step.
/// The torso target holds `torso` throughout, given in the same orientation
/// as the torso window (counterclockwise from vertical).
///
/// The involution has a pole at `-1/f`, possibly just left of the phase
/// range; the swing target is clamped so values near the pole stay bounded.
/// The clamp only engages left of the post-impact states, where no window
/// condition involves the swing target.
pub fn reference_outputs(z1: f64, torso: f64, impact_z1: f64, fling: f64) -> [f64; 2] {
    let tau = -torso;
    let sw = (-(z1 + fling * impact_z1 * impact_z1) / (1.0 + fling * z1)).clamp(-0.8, 0.8);
    [tau - z1, sw - tau]
}

/// Regresses a fresh network onto the reference motion over the box encoded
/// in the architecture's input transform. Barrier training started from the
/// result begins inside the stepping regime instead of the no-step solution
/// that random starts settle into.
pub fn seed_policy(
    arch: MlpArch,
    torso: f64,
    impact_z1: f64,
    fling: f64,
    seed: u64,
) -> Result<MlpParams> {
    use crate::policy::forward_core;
    use crate::tape::{Tape, Var};

    const GRID: usize = 24;
    const STEPS: usize = 2000;

    arch.validate()?;
    let mut xs = Vec::with_capacity(GRID * GRID);
    let mut ts = Vec::with_capacity(GRID * GRID);
    for i in 0..GRID {
        let u = (i as f64 + 0.5) / GRID as f64 * 2.0 - 1.0;
        let z1 = arch.input_shift[0] + u * arch.input_scale[0];
        for j in 0..GRID {
            let v = (j as f64 + 0.5) / GRID as f64 * 2.0 - 1.0;
            let z2 = arch.input_shift[1] + v * arch.input_scale[1];
            xs.push([z1, z2]);
            ts.push(reference_outputs(z1, torso, impact_z1, fling));
        }
    }

    let mut params = MlpParams::init(arch, derive_seed(seed, 0x5EED))?;
    let mut opt = AdamW::new(params.w.len());
    let inv_n = 1.0 / xs.len() as f64;
    for step in 0..STEPS {
        let lr = match step {
            s if s >= 1700 => 1e-4,
            s if s >= 1200 => 1e-3,
            _ => 1e-2,
        };
        let tape = Tape::with_capacity(1 << 16);
        let leaves: Vec<Var> = params.w.iter().map(|&w| tape.var(w)).collect();
        let mut loss = Var::constant(0.0);
        let mut out = [Var::constant(0.0); 2];
        for (x, t) in xs.iter().zip(ts.iter()) {
            let zin = [Var::constant(x[0]), Var::constant(x[1])];
            forward_core(&params.arch, |k| leaves[k], &zin, &mut out);
            let (d0, d1) = (out[0] - Var::constant(t[0]), out[1] - Var::constant(t[1]));
            loss = loss + (d0 * d0 + d1 * d1) * Var::constant(inv_n);
        }
        if !loss.val().is_finite() {
            return Err(Error::NonFinite("seed regression loss"));
        }
        let grad = tape.gradient(loss, leaves.len());
        opt.step(&mut params.w, &grad, lr, 0.0);
    }
    Ok(params)
}

/// Writes the history as CSV with one column per spec name.
pub fn write_history_csv(
    path: &std::path::Path,
    spec_names: &[&str],
    history: &[EpochRecord],
) -> Result<()> {
    use std::io::Write;
    let mut f = std::io::BufWriter::new(std::fs::File::create(path)?);
    write!(f, "epoch,lr,total")?;
    for name in spec_names {
        write!(f, ",{name}")?;
    }
    writeln!(f)?;
    for r in history {
        write!(f, "{},{},{}", r.epoch, r.lr, r.total)?;
        for v in &r.per_spec {
            write!(f, ",{v}")?;
        }
        writeln!(f)?;
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::barriers::{barrier_loss, BarrierFunc, Condition, Region};
    use approx::assert_relative_eq;

    fn torso_spec(min: f64, max: f64) -> BarrierSpec {
        BarrierSpec {
            name: "torso".into(),
            func: BarrierFunc::TorsoWindow { min, max },
            condition: Condition::Continuous { slope: 1.0 },
            region: Region::Box { z1: [-0.35, 0.35], z2: [7.0, 41.0] },
        }
    }

    #[test]
    fn adamw_first_step_is_signed_lr() {
        let mut o = AdamW::new(2);
        let mut w = vec![1.0, -2.0];
        o.step(&mut w, &[0.5, -3.0], 0.01, 0.0);
        // With constant gradient the bias-corrected ratio is sign(g).
        assert_relative_eq!(w[0], 1.0 - 0.01, epsilon = 1e-7);
        assert_relative_eq!(w[1], -2.0 + 0.01, epsilon = 1e-7);
    }

    #[test]
    fn adamw_decay_is_decoupled_from_moments() {
        let mut o = AdamW::new(1);
        let mut w = vec![4.0];
        o.step(&mut w, &[0.0], 0.01, 0.5);
        // Zero gradient leaves the moments at zero; only the decay acts.
        assert_relative_eq!(w[0], 4.0 * (1.0 - 0.01 * 0.5), epsilon = 1e-12);
    }

    #[test]
    fn normalized_optimizer_groups_take_unit_steps() {
        let arch = MlpArch::plain(2, vec![3], 2);
        let o = NormalizedPerNeuron::new(&arch);
        assert_eq!(o.groups.len(), 5, "3 hidden neurons + 2 output neurons");
        let n = arch.n_params();
        let mut w = vec![0.0; n];
        let mut grad = vec![0.0; n];
        // One-hot gradient in the second input weight of hidden neuron 1.
        grad[2] = -7.0;
        o.step(&mut w, &grad, 0.1, 0.0);
        assert_relative_eq!(w[2], 0.1, epsilon = 1e-12);
        assert!(w.iter().enumerate().all(|(i, &x)| i == 2 || x == 0.0));
    }

    #[test]
    fn lr_schedule_applies_at_listed_epochs() {
        let cfg = TrainConfig {
            lr: 1.0,
            lr_decay_epochs: vec![2, 4],
            lr_decay_factor: 0.5,
            ..TrainConfig::default()
        };
        let lrs: Vec<f64> = (0..5).map(|e| cfg.lr_at(e)).collect();
        assert_eq!(lrs, vec![1.0, 1.0, 0.5, 0.5, 0.25]);
    }

    #[test]
    fn training_is_deterministic_and_returns_best_epoch() {
        let model = ModelParams::default();
        let specs = vec![torso_spec(-0.05, 0.02)];
        let cfg = TrainConfig {
            epochs: 8,
            samples_per_region: 48,
            lr: 0.05,
            weight_decay: 0.0,
            lr_decay_epochs: vec![],
            optimizer: OptimizerKind::AdamW,
            seed: 5,
            ..TrainConfig::default()
        };
        let init = MlpParams::init(MlpArch::plain(2, vec![6], 2), 2).unwrap();
        let a = train_policy(&cfg, &specs, &model, init.clone(), None, |_| {}).unwrap();
        let b = train_policy(&cfg, &specs, &model, init.clone(), None, |_| {}).unwrap();
        assert_eq!(a.params.w, b.params.w, "training must be reproducible");
        assert_eq!(a.history.len(), 8);

        let min_hist = a
            .history
            .iter()
            .map(|r| r.total)
            .fold(f64::INFINITY, f64::min);
        assert_eq!(a.best_loss, min_hist);
        // Returned weights reproduce the best loss on that epoch's stream.
        let flow = FlowModel { model: &model, policy: &a.params, residual: None };
        let replay = barrier_loss(
            &specs,
            &flow,
            cfg.samples_per_region,
            derive_seed(cfg.seed, a.best_epoch as u64),
        )
        .unwrap();
        assert_eq!(replay.total.to_bits(), a.best_loss.to_bits());
    }

    #[test]
    fn training_reduces_an_infeasible_start() {
        let model = ModelParams::default();
        // Window the random initial policy violates somewhere; a few epochs
        // must strictly shrink the violation integral.
        let specs = vec![torso_spec(-0.31, 0.05)];
        let cfg = TrainConfig {
            epochs: 30,
            samples_per_region: 64,
            lr: 0.02,
            weight_decay: 1e-5,
            lr_decay_epochs: vec![],
            optimizer: OptimizerKind::AdamW,
            seed: 11,
            ..TrainConfig::default()
        };
        let init = MlpParams::init(MlpArch::plain(2, vec![8], 2), 77).unwrap();
        let r = train_policy(&cfg, &specs, &model, init, None, |_| {}).unwrap();
        let first = r.history.first().unwrap().total;
        assert!(first > 0.0, "start must be infeasible for this test to bite");
        assert!(
            r.best_loss < 0.5 * first,
            "expected at least a 2x improvement: first {first:.3e}, best {:.3e}",
            r.best_loss
        );
    }

    #[test]
    fn history_csv_roundtrips_shape() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("hist.csv");
        let history = vec![
            EpochRecord { epoch: 0, lr: 0.01, total: 1.5, per_spec: vec![1.0, 0.5] },
            EpochRecord { epoch: 1, lr: 0.01, total: 0.75, per_spec: vec![0.5, 0.25] },
        ];
        write_history_csv(&path, &["a", "b"], &history).unwrap();
        let text = std::fs::read_to_string(&path).unwrap();
        let lines: Vec<&str> = text.lines().collect();
        assert_eq!(lines[0], "epoch,lr,total,a,b");
        assert_eq!(lines.len(), 3);
        assert!(lines[1].starts_with("0,0.01,1.5,1,0.5"));
    }
}
