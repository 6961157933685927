//! Safety conditions on the reduced coordinates and the sampled loss that
//! trains them to hold.
//!
//! Each [`BarrierSpec`] couples a scalar barrier function with the condition
//! it must satisfy over a region at risk: a flow condition
//! `h_dot >= -slope * h`, a step condition `h(next) - h >= -gamma * h`
//! across the reduced impact, or an equality constraint handled as a
//! weighted squared defect. Two-sided windows are encoded as the minimum of
//! their one-sided distances, so `h >= 0` exactly on the window.
//!
//! The loss is the sum over specs of the region-volume-weighted mean of
//! `max{0, -residual}` (squared defects for equalities), a Monte-Carlo
//! estimate of the integral of condition violation. Gradients with respect
//! to the network weights run the identical generic code with tape scalars;
//! samples whose hinge is inactive are screened out by a plain pass first,
//! which is exact because the hinge subgradient at zero is zero.

use crate::dynamics::ModelParams;
use crate::error::{Error, Result};
use crate::jet::Jet;
use crate::policy::{eval_plain, MlpArch, MlpParams};
use crate::scalar::Scalar;
use crate::tape::{Tape, Var};
use crate::zero_dynamics::{desired_outputs, eval_lift_f64, reconstruct_from_outputs, zero_impact_s};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

/// splitmix64 step; used to derive independent, reproducible sample streams
/// from a base seed.
pub fn derive_seed(base: u64, stream: u64) -> u64 {
    let mut x = base ^ stream.wrapping_mul(0x9E37_79B9_7F4A_7C15);
    x = (x ^ (x >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    x = (x ^ (x >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    x ^ (x >> 31)
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, rename_all = "snake_case", tag = "shape")]
pub enum Region {
    /// Product of intervals in `(z1, z2)`.
    Box { z1: [f64; 2], z2: [f64; 2] },
    /// Fixed `z1`, interval in `z2`; measure is the interval length.
    Slice { z1: f64, z2: [f64; 2] },
}

impl Region {
    pub fn validate(&self) -> Result<()> {
        let ok = match *self {
            Region::Box { z1, z2 } => z1[0] < z1[1] && z2[0] < z2[1],
            Region::Slice { z1, z2 } => z1.is_finite() && z2[0] < z2[1],
        };
        if ok {
            Ok(())
        } else {
            Err(Error::InvalidConfig(format!("degenerate region {self:?}")))
        }
    }

    pub fn volume(&self) -> f64 {
        match *self {
            Region::Box { z1, z2 } => (z1[1] - z1[0]) * (z2[1] - z2[0]),
            Region::Slice { z2, .. } => z2[1] - z2[0],
        }
    }

    pub fn contains(&self, z: [f64; 2]) -> bool {
        match *self {
            Region::Box { z1, z2 } => {
                z[0] >= z1[0] && z[0] <= z1[1] && z[1] >= z2[0] && z[1] <= z2[1]
            }
            Region::Slice { z1, z2 } => (z[0] - z1).abs() < 1e-12 && z[1] >= z2[0] && z[1] <= z2[1],
        }
    }

    pub fn bounds(&self) -> ([f64; 2], [f64; 2]) {
        match *self {
            Region::Box { z1, z2 } => (z1, z2),
            Region::Slice { z1, z2 } => ([z1, z1], z2),
        }
    }
}

/// Uniform i.i.d. draws from the region, reproducible from the seed
/// (component order z1-then-z2 per point is part of the contract).
pub fn sample_region(region: &Region, seed: u64, n: usize) -> Vec<[f64; 2]> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = Vec::with_capacity(n);
    for _ in 0..n {
        let z = match *region {
            Region::Box { z1, z2 } => {
                let a = rng.gen_range(z1[0]..z1[1]);
                let b = rng.gen_range(z2[0]..z2[1]);
                [a, b]
            }
            Region::Slice { z1, z2 } => [z1, rng.gen_range(z2[0]..z2[1])],
        };
        out.push(z);
    }
    out
}

fn radical_inverse(base: u64, mut i: u64) -> f64 {
    let mut f = 1.0;
    let mut r = 0.0;
    while i > 0 {
        f /= base as f64;
        r += f * (i % base) as f64;
        i /= base;
    }
    r
}

/// Low-discrepancy (Halton 2,3) points in the region; deterministic.
pub fn halton_region(region: &Region, n: usize, skip: u64) -> Vec<[f64; 2]> {
    (0..n as u64)
        .map(|k| {
            let (u, v) = (radical_inverse(2, k + skip + 1), radical_inverse(3, k + skip + 1));
            match *region {
                Region::Box { z1, z2 } => {
                    [z1[0] + u * (z1[1] - z1[0]), z2[0] + v * (z2[1] - z2[0])]
                }
                Region::Slice { z1, z2 } => [z1, z2[0] + u * (z2[1] - z2[0])],
            }
        })
        .collect()
}

/// Midpoint tensor grid used by the quadrature cross-check; slices collapse
/// to a 1-D rule.
pub fn grid_region(region: &Region, n1: usize, n2: usize) -> Vec<[f64; 2]> {
    match *region {
        Region::Box { z1, z2 } => {
            let mut pts = Vec::with_capacity(n1 * n2);
            for i in 0..n1 {
                let a = z1[0] + (i as f64 + 0.5) * (z1[1] - z1[0]) / n1 as f64;
                for j in 0..n2 {
                    let b = z2[0] + (j as f64 + 0.5) * (z2[1] - z2[0]) / n2 as f64;
                    pts.push([a, b]);
                }
            }
            pts
        }
        Region::Slice { z1, z2 } => (0..n2)
            .map(|j| [z1, z2[0] + (j as f64 + 0.5) * (z2[1] - z2[0]) / n2 as f64])
            .collect(),
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, rename_all = "snake_case", tag = "kind")]
pub enum BarrierFunc {
    /// Absolute torso angle window `min <= q_u + alpha1 <= max`.
    TorsoWindow { min: f64, max: f64 },
    /// Swing foot kept outside a keep-out disk but within reach:
    /// `0 <= |p_foot - center|^2 - radius^2 <= max`.
    SwingClearance { center: [f64; 2], radius: f64, max: f64 },
    /// Reduced impact stays within a window of the mirrored point:
    /// componentwise `|delta_i| <= bound` with `delta_1` the sum or
    /// difference of phase angles and `delta_2` the momentum change scaled by
    /// a characteristic momentum.
    ImpactWindow { bound: f64, z1_sum: bool, z2_sum: bool, z2_scale: f64 },
    /// Post-impact outputs agree with the surface: `y(next) = 0`.
    StepSymmetry,
    /// Swing foot height vanishes on the touchdown slice.
    TouchdownHeight,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, rename_all = "snake_case", tag = "mode")]
pub enum Condition {
    /// `h_dot >= -slope * h` along the reduced flow.
    Continuous { slope: f64 },
    /// `h(next) - h >= -gamma * h` across the reduced impact.
    Discrete { gamma: f64 },
    /// Squared-defect penalty with this weight.
    Equality { weight: f64 },
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BarrierSpec {
    pub name: String,
    pub func: BarrierFunc,
    pub condition: Condition,
    pub region: Region,
}

impl BarrierSpec {
    pub fn validate(&self) -> Result<()> {
        self.region.validate()?;
        let func_is_eq = matches!(self.func, BarrierFunc::StepSymmetry | BarrierFunc::TouchdownHeight);
        let cond_is_eq = matches!(self.condition, Condition::Equality { .. });
        if func_is_eq != cond_is_eq {
            return Err(Error::InvalidConfig(format!(
                "barrier '{}' mixes an equality function with an inequality condition",
                self.name
            )));
        }
        match self.condition {
            Condition::Continuous { slope } if slope <= 0.0 => {
                return Err(Error::InvalidConfig(format!("barrier '{}': slope must be positive", self.name)));
            }
            Condition::Discrete { gamma } if !(0.0..=1.0).contains(&gamma) => {
                return Err(Error::InvalidConfig(format!("barrier '{}': gamma must be in [0, 1]", self.name)));
            }
            Condition::Equality { weight } if weight <= 0.0 => {
                return Err(Error::InvalidConfig(format!("barrier '{}': weight must be positive", self.name)));
            }
            _ => {}
        }
        if let BarrierFunc::ImpactWindow { bound, z2_scale, .. } = self.func {
            if bound <= 0.0 || z2_scale <= 0.0 {
                return Err(Error::InvalidConfig(format!(
                    "barrier '{}': impact window needs positive bound and scale",
                    self.name
                )));
            }
        }
        Ok(())
    }
}

/// Everything needed to evaluate conditions along the reduced flow.
#[derive(Clone, Copy)]
pub struct FlowModel<'a> {
    pub model: &'a ModelParams,
    pub policy: &'a MlpParams,
    pub residual: Option<&'a MlpParams>,
}

pub(crate) struct FlowRef<'a, SW: Scalar> {
    pub model: &'a ModelParams,
    pub arch: &'a MlpArch,
    pub w: &'a [SW],
    pub residual: Option<&'a MlpParams>,
}

impl<'a> FlowModel<'a> {
    pub(crate) fn as_ref(&self) -> FlowRef<'a, f64> {
        FlowRef {
            model: self.model,
            arch: &self.policy.arch,
            w: &self.policy.w,
            residual: self.residual,
        }
    }
}

/// Window barriers evaluated at a surface configuration `q(z)`; generic so
/// it runs on jets carrying z-tangents.
fn h_config<S: Scalar>(func: &BarrierFunc, q: [S; 3], p: &ModelParams) -> S {
    match *func {
        BarrierFunc::TorsoWindow { min, max } => {
            let torso = -(q[0] + q[1]);
            (torso - S::from_f64(min)).vmin(S::from_f64(max) - torso)
        }
        BarrierFunc::SwingClearance { center, radius, max } => {
            let f = crate::dynamics::swing_foot_s(q, p);
            let dx = f[0] - S::from_f64(center[0]);
            let dz = f[1] - S::from_f64(center[1]);
            let phi = dx * dx + dz * dz - S::from_f64(radius * radius);
            phi.vmin(S::from_f64(max) - phi)
        }
        _ => unreachable!("h_config is only defined for configuration windows"),
    }
}

fn impact_window_of_jump<SW: Scalar>(
    bound: f64,
    z1_sum: bool,
    z2_sum: bool,
    z2_scale: f64,
    z: [SW; 2],
    z_post: [SW; 2],
) -> SW {
    let d1 = if z1_sum { z_post[0] + z[0] } else { z_post[0] - z[0] };
    let d2 = (if z2_sum { z_post[1] + z[1] } else { z_post[1] - z[1] }) * SW::from_f64(1.0 / z2_scale);
    let b = SW::from_f64(bound);
    (b - d1).vmin(d1 + b).vmin((b - d2).vmin(d2 + b))
}

/// Impact-window barrier value at `z` (plain scalars; involves one reduced
/// impact).
fn h_impact<SW: Scalar>(
    bound: f64,
    z1_sum: bool,
    z2_sum: bool,
    z2_scale: f64,
    z: [SW; 2],
    f: &FlowRef<'_, SW>,
) -> Result<SW> {
    let z_post = zero_impact_s(z, f.model, f.arch, f.w)?;
    Ok(impact_window_of_jump(bound, z1_sum, z2_sum, z2_scale, z, z_post))
}

/// Impact-window value on an observed jump, bypassing the model impact map;
/// lets logged touchdowns be judged directly.
pub fn impact_window_direct(
    func: &BarrierFunc,
    z_pre: [f64; 2],
    z_post: [f64; 2],
) -> Result<f64> {
    let BarrierFunc::ImpactWindow { bound, z1_sum, z2_sum, z2_scale } = *func else {
        return Err(Error::InvalidConfig("not an impact window barrier".into()));
    };
    Ok(impact_window_of_jump(bound, z1_sum, z2_sum, z2_scale, z_pre, z_post))
}

/// Flow-condition residual with an externally supplied rate (e.g. measured
/// by differencing a log) in place of the model flow.
pub fn continuous_residual_with_flow(
    spec: &BarrierSpec,
    z: [f64; 2],
    zdot: [f64; 2],
    flow: &FlowModel,
) -> Result<f64> {
    let Condition::Continuous { slope } = spec.condition else {
        return Err(Error::InvalidConfig(format!("barrier '{}' has no flow condition", spec.name)));
    };
    let f = flow.as_ref();
    let (yd, jac) = desired_outputs(z, f.arch, f.w);
    let qj: [Jet<f64, 2>; 3] = [
        Jet::variable(z[0], 0),
        Jet { re: yd[0], du: [jac[0][0], jac[0][1]] },
        Jet { re: yd[1], du: [jac[1][0], jac[1][1]] },
    ];
    let hj = h_config(&spec.func, qj, f.model);
    Ok(hj.du[0] * zdot[0] + hj.du[1] * zdot[1] + slope * hj.re)
}

/// Flow-condition residual `h_dot + slope * h` at `z`, with `h_dot` the
/// z-gradient of the window contracted with the reduced flow. One network
/// evaluation serves both the window and the reconstruction.
pub(crate) fn continuous_residual_s<SW: Scalar>(
    func: &BarrierFunc,
    slope: f64,
    z: [SW; 2],
    f: &FlowRef<'_, SW>,
) -> Result<SW> {
    let (yd, jac) = desired_outputs(z, f.arch, f.w);
    let reco = reconstruct_from_outputs([SW::zero(); 4], z, yd, jac, f.model)?;
    let mut flow = [reco.dq[0], reco.vz2];
    if let Some(eps) = f.residual {
        let e = eval_lift_f64(eps, z);
        flow[0] = flow[0] + e[0];
        flow[1] = flow[1] + e[1];
    }
    // Configuration as a function of z, tangents reassembled from the
    // already-computed output Jacobian.
    let qj: [Jet<SW, 2>; 3] = [
        Jet::variable(z[0], 0),
        Jet { re: yd[0], du: [jac[0][0], jac[0][1]] },
        Jet { re: yd[1], du: [jac[1][0], jac[1][1]] },
    ];
    let hj = h_config(func, qj, f.model);
    Ok(hj.du[0] * flow[0] + hj.du[1] * flow[1] + SW::from_f64(slope) * hj.re)
}

/// Step-condition residual `h(next) - (1 - gamma) h` across the reduced
/// impact.
pub(crate) fn discrete_residual_s<SW: Scalar>(
    func: &BarrierFunc,
    gamma: f64,
    z: [SW; 2],
    f: &FlowRef<'_, SW>,
) -> Result<SW> {
    let BarrierFunc::ImpactWindow { bound, z1_sum, z2_sum, z2_scale } = *func else {
        return Err(Error::InvalidConfig(
            "discrete condition is only defined for the impact window".into(),
        ));
    };
    let h0 = h_impact(bound, z1_sum, z2_sum, z2_scale, z, f)?;
    let z_post = zero_impact_s(z, f.model, f.arch, f.w)?;
    let h1 = h_impact(bound, z1_sum, z2_sum, z2_scale, z_post, f)?;
    Ok(h1 - SW::from_f64(1.0 - gamma) * h0)
}

/// Equality defect vector (used squared inside the loss).
pub(crate) fn equality_defect_s<SW: Scalar>(
    func: &BarrierFunc,
    z: [SW; 2],
    f: &FlowRef<'_, SW>,
) -> Result<([SW; 2], usize)> {
    match func {
        BarrierFunc::StepSymmetry => {
            let (yd, jac) = desired_outputs(z, f.arch, f.w);
            let reco = reconstruct_from_outputs([SW::zero(); 4], z, yd, jac, f.model)?;
            let (q_post, _dq_post, _, _) =
                crate::dynamics::impact_unchecked_s(reco.q, reco.dq, f.model)?;
            let z_post = [q_post[0], crate::dynamics::momentum_s(q_post, _dq_post, f.model)];
            let yd_post = eval_plain(f.arch, f.w, z_post);
            Ok(([q_post[1] - yd_post[0], q_post[2] - yd_post[1]], 2))
        }
        BarrierFunc::TouchdownHeight => {
            let yd = eval_plain(f.arch, f.w, z);
            let q = [z[0], yd[0], yd[1]];
            Ok(([crate::dynamics::swing_foot_s(q, f.model)[1], SW::zero()], 1))
        }
        _ => Err(Error::InvalidConfig(
            "equality defect is only defined for equality barriers".into(),
        )),
    }
}

/// Integrand of the loss at one sample: hinge of the condition residual, or
/// the weighted squared defect for equalities.
pub(crate) fn term_value_s<SW: Scalar>(
    spec: &BarrierSpec,
    z: [SW; 2],
    f: &FlowRef<'_, SW>,
) -> Result<SW> {
    match spec.condition {
        Condition::Continuous { slope } => {
            Ok((-continuous_residual_s(&spec.func, slope, z, f)?).relu())
        }
        Condition::Discrete { gamma } => {
            Ok((-discrete_residual_s(&spec.func, gamma, z, f)?).relu())
        }
        Condition::Equality { weight } => {
            let (d, n) = equality_defect_s(&spec.func, z, f)?;
            let mut s = SW::zero();
            for item in d.iter().take(n) {
                s = s + *item * *item;
            }
            Ok(SW::from_f64(weight) * s)
        }
    }
}

// ------------------------------------------------------------------
// Public evaluation entry points
// ------------------------------------------------------------------

/// Barrier value at `z`. Inequality windows return the signed distance-style
/// minimum (non-negative exactly on the window); equality barriers return
/// the negated squared defect, so the sign convention "safe iff >= 0, with 0
/// exactly on satisfaction" is uniform.
pub fn eval_barrier(spec: &BarrierSpec, z: [f64; 2], flow: &FlowModel) -> Result<f64> {
    let f = flow.as_ref();
    match spec.func {
        BarrierFunc::TorsoWindow { .. } | BarrierFunc::SwingClearance { .. } => {
            let yd = flow.policy.eval(z);
            Ok(h_config(&spec.func, [z[0], yd[0], yd[1]], flow.model))
        }
        BarrierFunc::ImpactWindow { bound, z1_sum, z2_sum, z2_scale } => {
            h_impact(bound, z1_sum, z2_sum, z2_scale, z, &f)
        }
        BarrierFunc::StepSymmetry | BarrierFunc::TouchdownHeight => {
            let (d, n) = equality_defect_s(&spec.func, z, &f)?;
            Ok(-d.iter().take(n).map(|x| x * x).sum::<f64>())
        }
    }
}

pub fn continuous_residual(spec: &BarrierSpec, z: [f64; 2], flow: &FlowModel) -> Result<f64> {
    let Condition::Continuous { slope } = spec.condition else {
        return Err(Error::InvalidConfig(format!("barrier '{}' has no flow condition", spec.name)));
    };
    continuous_residual_s(&spec.func, slope, z, &flow.as_ref())
}

pub fn discrete_residual(spec: &BarrierSpec, z: [f64; 2], flow: &FlowModel) -> Result<f64> {
    let Condition::Discrete { gamma } = spec.condition else {
        return Err(Error::InvalidConfig(format!("barrier '{}' has no step condition", spec.name)));
    };
    discrete_residual_s(&spec.func, gamma, z, &flow.as_ref())
}

/// Condition residual of any spec kind; equalities report the negated
/// squared defect so "non-negative" uniformly means satisfied.
pub fn condition_residual(spec: &BarrierSpec, z: [f64; 2], flow: &FlowModel) -> Result<f64> {
    match spec.condition {
        Condition::Continuous { .. } => continuous_residual(spec, z, flow),
        Condition::Discrete { .. } => discrete_residual(spec, z, flow),
        Condition::Equality { .. } => eval_barrier(spec, z, flow),
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub total: f64,
    /// Volume-weighted mean violation per spec, in spec order.
    pub per_spec: Vec<f64>,
}

fn accumulate_loss(
    specs: &[BarrierSpec],
    flow: &FlowModel,
    points_for: impl Fn(usize, &BarrierSpec) -> Vec<[f64; 2]>,
) -> Result<LossBreakdown> {
    let f = flow.as_ref();
    let mut per_spec = Vec::with_capacity(specs.len());
    let mut total = 0.0;
    for (i, spec) in specs.iter().enumerate() {
        let pts = points_for(i, spec);
        let vol = spec.region.volume();
        let mut acc = 0.0;
        for &z in &pts {
            acc += term_value_s(spec, z, &f)?;
        }
        let contrib = vol * acc / pts.len().max(1) as f64;
        per_spec.push(contrib);
        total += contrib;
    }
    Ok(LossBreakdown { total, per_spec })
}

/// Monte-Carlo loss over freshly sampled regions. Per-spec sample streams
/// are derived from `seed`, so a fixed seed reproduces the loss bit for bit.
pub fn barrier_loss(
    specs: &[BarrierSpec],
    flow: &FlowModel,
    n_per_spec: usize,
    seed: u64,
) -> Result<LossBreakdown> {
    accumulate_loss(specs, flow, |i, spec| {
        sample_region(&spec.region, derive_seed(seed, i as u64 + 1), n_per_spec)
    })
}

/// Midpoint tensor-quadrature loss; the oracle against which the
/// Monte-Carlo estimate is cross-checked.
pub fn barrier_loss_grid(
    specs: &[BarrierSpec],
    flow: &FlowModel,
    n1: usize,
    n2: usize,
) -> Result<LossBreakdown> {
    accumulate_loss(specs, flow, |_, spec| grid_region(&spec.region, n1, n2))
}

/// Loss and its gradient with respect to the policy weights.
///
/// A plain pass computes every term value and marks the active ones; only
/// those are rebuilt on the tape and swept backward. The returned loss is
/// the plain pass's sum, which the tape pass reproduces exactly since both
/// instantiate the same generic term code.
pub fn barrier_loss_grad(
    specs: &[BarrierSpec],
    flow: &FlowModel,
    n_per_spec: usize,
    seed: u64,
    grad: &mut [f64],
) -> Result<LossBreakdown> {
    let n_params = flow.policy.w.len();
    assert_eq!(grad.len(), n_params, "gradient buffer length mismatch");
    grad.fill(0.0);

    let fref = flow.as_ref();
    let tape = Tape::with_capacity(1 << 16);
    let mut adj: Vec<f64> = Vec::new();
    let mut gbuf = vec![0.0; n_params];
    let mut leaves: Vec<Var> = Vec::with_capacity(n_params);

    let mut per_spec = Vec::with_capacity(specs.len());
    let mut total = 0.0;
    for (i, spec) in specs.iter().enumerate() {
        let pts = sample_region(&spec.region, derive_seed(seed, i as u64 + 1), n_per_spec);
        let scale = spec.region.volume() / pts.len().max(1) as f64;
        let mut acc = 0.0;
        for &z in &pts {
            let value = term_value_s(spec, z, &fref)?;
            acc += value;
            if value == 0.0 {
                continue; // inactive hinge: exact zero gradient
            }
            tape.clear();
            leaves.clear();
            leaves.extend(flow.policy.w.iter().map(|&x| tape.var(x)));
            let fvar = FlowRef {
                model: flow.model,
                arch: &flow.policy.arch,
                w: &leaves,
                residual: flow.residual,
            };
            let zv = [Var::constant(z[0]), Var::constant(z[1])];
            let node = term_value_s(spec, zv, &fvar)?;
            debug_assert!((node.val() - value).abs() <= 1e-12 * value.abs().max(1.0));
            tape.gradient_into(node, &mut adj, &mut gbuf);
            for (g, d) in grad.iter_mut().zip(gbuf.iter()) {
                *g += scale * d;
            }
        }
        let contrib = scale * acc;
        per_spec.push(contrib);
        total += contrib;
    }
    Ok(LossBreakdown { total, per_spec })
}
