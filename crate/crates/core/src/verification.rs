//! Sampled certification of trained policies.
//!
//! Certificates here are sampled evidence, not formal proofs: each condition
//! is evaluated on fresh uniform plus low-discrepancy points and the report
//! carries minimum residuals and worst-case locations at a stated tolerance.
//!
//! The combined full-state check builds a barrier `h_Z(z) - sigma V(eta)`
//! from a quadratic Lyapunov function of the output dynamics and a
//! strengthened reduced condition. Its constants come from sampled Lipschitz
//! estimates taken in box-normalized reduced coordinates; the normalization
//! cancels in the pairing `grad h . delta omega`, so the product bound is
//! valid while keeping both factors near unit scale.

use crate::barriers::{
    condition_residual, derive_seed, eval_barrier, halton_region, sample_region, BarrierSpec,
    Condition, FlowModel,
};
use crate::error::{Error, Result};
use crate::linalg::solve_in_place;
use crate::zero_dynamics::omega_off_manifold;
use serde::{Deserialize, Serialize};

/// Safety factor applied to every sampled Lipschitz estimate.
pub const LIPSCHITZ_SAFETY: f64 = 1.5;

/// Radius of the output-error ball the combined certificate covers.
pub const ETA_RADIUS: f64 = 0.2;

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct BarrierReport {
    pub name: String,
    pub condition: String,
    pub n_samples: usize,
    pub min_residual: f64,
    pub worst_z: [f64; 2],
    pub pass: bool,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct CombinedReport {
    pub barrier: String,
    pub sigma: f64,
    pub c: f64,
    pub alpha: f64,
    pub gamma_v: f64,
    pub lambda_min_p: f64,
    pub l_hz: f64,
    pub l_omega_eta: f64,
    pub n_samples: usize,
    pub worst_z: [f64; 2],
    /// Worst value of `hdot + alpha h - c` (premise with the additive
    /// strengthening, as required).
    pub margin_strengthened: f64,
    /// Worst value of `hdot + alpha h + c` (the reading in which the
    /// constant only degrades the conclusion).
    pub margin_relaxed: f64,
    pub pass: bool,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct CertificationReport {
    pub tol: f64,
    pub barriers: Vec<BarrierReport>,
    pub combined: Option<CombinedReport>,
    pub pass: bool,
}

impl CertificationReport {
    pub fn attach_combined(&mut self, block: CombinedReport) {
        self.pass = self.pass && block.pass;
        self.combined = Some(block);
    }
}

fn condition_kind(c: &Condition) -> &'static str {
    match c {
        Condition::Continuous { .. } => "continuous",
        Condition::Discrete { .. } => "discrete",
        Condition::Equality { .. } => "equality",
    }
}

/// Evaluates every condition on `n_samples` fresh points per barrier, half
/// uniform and half low-discrepancy. A barrier passes when its worst
/// residual stays above `-tol`.
pub fn certify(
    specs: &[BarrierSpec],
    flow: &FlowModel,
    n_samples: usize,
    tol: f64,
    seed: u64,
) -> Result<CertificationReport> {
    if n_samples < 1000 {
        return Err(Error::InvalidConfig(format!(
            "certification needs at least 1000 samples per barrier, got {n_samples}"
        )));
    }
    let mut barriers = Vec::with_capacity(specs.len());
    let mut pass = true;
    for (idx, spec) in specs.iter().enumerate() {
        spec.validate()?;
        let n_uni = n_samples / 2;
        let mut points = sample_region(&spec.region, derive_seed(seed, idx as u64), n_uni);
        points.extend(halton_region(&spec.region, n_samples - n_uni, 1000 * idx as u64));
        let mut min_residual = f64::INFINITY;
        let mut worst_z = points[0];
        for &z in &points {
            let r = condition_residual(spec, z, flow)?;
            if r < min_residual {
                min_residual = r;
                worst_z = z;
            }
        }
        let ok = min_residual >= -tol;
        pass = pass && ok;
        barriers.push(BarrierReport {
            name: spec.name.clone(),
            condition: condition_kind(&spec.condition).into(),
            n_samples,
            min_residual,
            worst_z,
            pass: ok,
        });
    }
    Ok(CertificationReport { tol, barriers, combined: None, pass })
}

/// Largest sampled difference quotient of `f` over the box, inflated by
/// [`LIPSCHITZ_SAFETY`]. A lower bound on the true constant before
/// inflation; pairs are drawn from one seeded stream, so estimates with
/// more pairs extend the same sample set.
pub fn lipschitz_estimate<F>(
    mut f: F,
    bounds: &[[f64; 2]],
    n_pairs: usize,
    seed: u64,
) -> Result<f64>
where
    F: FnMut(&[f64]) -> Result<Vec<f64>>,
{
    use rand::Rng;
    use rand::SeedableRng;
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
    let dim = bounds.len();
    let mut a = vec![0.0; dim];
    let mut b = vec![0.0; dim];
    let mut max_q: f64 = 0.0;
    for _ in 0..n_pairs {
        for (x, bd) in a.iter_mut().zip(bounds) {
            *x = bd[0] + rng.gen::<f64>() * (bd[1] - bd[0]);
        }
        for (x, bd) in b.iter_mut().zip(bounds) {
            *x = bd[0] + rng.gen::<f64>() * (bd[1] - bd[0]);
        }
        let dist2: f64 = a.iter().zip(&b).map(|(x, y)| (x - y) * (x - y)).sum();
        if dist2 == 0.0 {
            continue;
        }
        let fa = f(&a)?;
        let fb = f(&b)?;
        let df2: f64 = fa.iter().zip(&fb).map(|(x, y)| (x - y) * (x - y)).sum();
        let q = (df2 / dist2).sqrt();
        if !q.is_finite() {
            return Err(Error::NonFinite("lipschitz difference quotient"));
        }
        max_q = max_q.max(q);
    }
    Ok(max_q * LIPSCHITZ_SAFETY)
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct OutputLyapunov {
    pub p: [[f64; 4]; 4],
    pub gamma_v: f64,
    pub lambda_min_p: f64,
    pub lambda_max_p: f64,
}

impl OutputLyapunov {
    pub fn v(&self, eta: [f64; 4]) -> f64 {
        crate::linalg::quadratic_form(&self.p, &eta)
    }
}

/// Solves `A' P + P A = -I` for the closed-loop output dynamics
/// `ydd = -kp y - kd yd` and packages the decay rate
/// `gamma_v = 1 / lambda_max(P)`.
pub fn output_lyapunov(kp: f64, kd: f64) -> Result<OutputLyapunov> {
    if !(kp.is_finite() && kd.is_finite()) {
        return Err(Error::NonFinite("output gains"));
    }
    let mut a = [[0.0f64; 4]; 4];
    for i in 0..2 {
        a[i][2 + i] = 1.0;
        a[2 + i][i] = -kp;
        a[2 + i][2 + i] = -kd;
    }
    // Linear system for the entries of P, row e = equation at (r, c).
    let mut m = [[0.0f64; 16]; 16];
    let mut rhs = [0.0f64; 16];
    for r in 0..4 {
        for c in 0..4 {
            let e = 4 * c + r;
            for k in 0..4 {
                m[e][4 * c + k] += a[k][r];
                m[e][4 * k + r] += a[k][c];
            }
            rhs[e] = if r == c { -1.0 } else { 0.0 };
        }
    }
    solve_in_place(&mut m, &mut rhs).map_err(|_| {
        Error::Hypothesis("output dynamics have eigenvalues summing to zero; not Hurwitz".into())
    })?;
    let mut p = [[0.0f64; 4]; 4];
    for r in 0..4 {
        for c in 0..4 {
            p[r][c] = 0.5 * (rhs[4 * c + r] + rhs[4 * r + c]);
        }
    }
    let pm = nalgebra::Matrix4::from_fn(|r, c| p[r][c]);
    let eig = pm.symmetric_eigen().eigenvalues;
    let lambda_min_p = eig.iter().cloned().fold(f64::INFINITY, f64::min);
    let lambda_max_p = eig.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    if lambda_min_p <= 0.0 {
        return Err(Error::Hypothesis(format!(
            "Lyapunov solution not positive definite (lambda_min = {lambda_min_p:.3e}); \
             gains kp = {kp}, kd = {kd} do not stabilize the outputs"
        )));
    }
    Ok(OutputLyapunov { p, gamma_v: 1.0 / lambda_max_p, lambda_min_p, lambda_max_p })
}

struct CombinedInputs {
    alpha: f64,
    l_hz: f64,
    l_omega_eta: f64,
    beta2: f64,
    min_residual: f64,
    worst_z: [f64; 2],
    n_samples: usize,
}

fn combined_inputs(
    spec: &BarrierSpec,
    flow: &FlowModel,
    lyap: &OutputLyapunov,
    n_samples: usize,
    seed: u64,
) -> Result<CombinedInputs> {
    let Condition::Continuous { slope: alpha } = spec.condition else {
        return Err(Error::InvalidConfig(format!(
            "combined check needs a flow condition, '{}' has {}",
            spec.name,
            condition_kind(&spec.condition)
        )));
    };
    spec.region.validate()?;
    let (z1b, z2b) = spec.region.bounds();
    if z1b[0] >= z1b[1] {
        return Err(Error::InvalidConfig("combined check needs a full-dimensional region".into()));
    }
    if alpha > 0.5 * lyap.gamma_v {
        return Err(Error::Hypothesis(format!(
            "alpha = {alpha} exceeds gamma_v / 2 = {}",
            0.5 * lyap.gamma_v
        )));
    }

    // Box-normalized chart: zt = (z - center) / half. Gradients pick up a
    // factor of `half`, rates a factor of `1 / half`, and the pairing is
    // unchanged.
    let center = [0.5 * (z1b[0] + z1b[1]), 0.5 * (z2b[0] + z2b[1])];
    let half = [0.5 * (z1b[1] - z1b[0]), 0.5 * (z2b[1] - z2b[0])];
    let unscale = |zt: &[f64]| [center[0] + half[0] * zt[0], center[1] + half[1] * zt[1]];

    let l_hz = lipschitz_estimate(
        |zt| Ok(vec![eval_barrier(spec, unscale(zt), flow)?]),
        &[[-1.0, 1.0], [-1.0, 1.0]],
        n_samples,
        derive_seed(seed, 1),
    )?;

    let eta_bounds = [[-ETA_RADIUS, ETA_RADIUS]; 4];
    let anchors = halton_region(&spec.region, 32, 7);
    let pairs_per_anchor = (n_samples / anchors.len()).max(64);
    let mut l_omega_eta: f64 = 0.0;
    for (i, &z) in anchors.iter().enumerate() {
        let l = lipschitz_estimate(
            |eta| {
                let w = omega_off_manifold(
                    [eta[0], eta[1], eta[2], eta[3]],
                    z,
                    flow.model,
                    flow.policy,
                )?;
                Ok(vec![w[0] / half[0], w[1] / half[1]])
            },
            &eta_bounds,
            pairs_per_anchor,
            derive_seed(seed, 2 + i as u64),
        )?;
        l_omega_eta = l_omega_eta.max(l);
    }

    let n_uni = n_samples / 2;
    let mut points = sample_region(&spec.region, derive_seed(seed, 0), n_uni);
    points.extend(halton_region(&spec.region, n_samples - n_uni, 3000));
    let mut min_residual = f64::INFINITY;
    let mut worst_z = points[0];
    for &z in &points {
        let r = condition_residual(spec, z, flow)?;
        if r < min_residual {
            min_residual = r;
            worst_z = z;
        }
    }

    Ok(CombinedInputs {
        alpha,
        l_hz,
        l_omega_eta,
        beta2: 0.5 * lyap.gamma_v * lyap.lambda_min_p,
        min_residual,
        worst_z,
        n_samples,
    })
}

fn combined_report(
    spec: &BarrierSpec,
    lyap: &OutputLyapunov,
    inp: &CombinedInputs,
    sigma: f64,
    tol: f64,
) -> CombinedReport {
    let beta1 = inp.l_hz * inp.l_omega_eta;
    let c = beta1 * beta1 / (4.0 * sigma * inp.beta2);
    let margin_strengthened = inp.min_residual - c;
    CombinedReport {
        barrier: spec.name.clone(),
        sigma,
        c,
        alpha: inp.alpha,
        gamma_v: lyap.gamma_v,
        lambda_min_p: lyap.lambda_min_p,
        l_hz: inp.l_hz,
        l_omega_eta: inp.l_omega_eta,
        n_samples: inp.n_samples,
        worst_z: inp.worst_z,
        margin_strengthened,
        margin_relaxed: inp.min_residual + c,
        pass: margin_strengthened >= -tol,
    }
}

/// Checks the strengthened reduced condition `hdot >= -alpha h + c` with
/// `c = beta1^2 / (4 sigma beta2)` for the given `sigma`, where `alpha` is
/// the slope of `spec` and must not exceed half the Lyapunov decay rate.
pub fn combined_barrier_check(
    spec: &BarrierSpec,
    flow: &FlowModel,
    lyap: &OutputLyapunov,
    sigma: f64,
    n_samples: usize,
    tol: f64,
    seed: u64,
) -> Result<CombinedReport> {
    if !(sigma > 0.0) {
        return Err(Error::InvalidConfig(
            "sigma must be positive; the strengthening constant is undefined at zero".into(),
        ));
    }
    let inp = combined_inputs(spec, flow, lyap, n_samples, seed)?;
    Ok(combined_report(spec, lyap, &inp, sigma, tol))
}

/// Doubling sweep over `sigma in {2^-6 .. 2^12}`; returns the report at the
/// smallest passing `sigma`, or the failing report at the largest one. The
/// strengthening constant falls off as `1 / sigma`, so large `sigma` trades
/// a tighter certified output-error tube for a smaller premise margin.
pub fn sigma_sweep(
    spec: &BarrierSpec,
    flow: &FlowModel,
    lyap: &OutputLyapunov,
    n_samples: usize,
    tol: f64,
    seed: u64,
) -> Result<CombinedReport> {
    let inp = combined_inputs(spec, flow, lyap, n_samples, seed)?;
    let mut last = None;
    for k in -6..=12 {
        let report = combined_report(spec, lyap, &inp, (k as f64).exp2(), tol);
        if report.pass {
            return Ok(report);
        }
        last = Some(report);
    }
    Ok(last.expect("sweep range is nonempty"))
}
