//! Reduced coordinates for the controlled biped.
//!
//! Outputs are the actuated joint angles minus the network's desired values,
//! `y = (alpha1, alpha2) - y_d(z)`, with `z = (q_u, M row-1 . dq)`: the
//! unactuated angle and the angular momentum about the stance foot. The pair
//! `eta = (y, ydot)` together with `z` is a diffeomorphism of the full state
//! wherever the momentum-row solve below is regular.
//!
//! Two structural facts carry the module. First, `z2` is a state function
//! whose rate along any controlled trajectory is exactly `-dV/dq_u` (no
//! torque or damping enters through the cyclic coordinate), so `ydot`
//! computed against the estimate `(dq_u, -dV/dq_u)` is the true derivative
//! of `y`, on or off the surface `y = 0`. Second, inverting `Phi` needs only
//! one scalar linear solve: given `(eta, z)` the configuration is explicit,
//! and the momentum row is linear in the single unknown `dq_u`. The
//! derivative of that inversion is therefore the closed-form quotient rule,
//! which is what differentiating through it on the tape computes; no
//! implicit iteration is involved.

use crate::dynamics::{
    dv_dqu_s, impact_unchecked_s, mass_matrix_s, momentum_s, ModelParams, RobotState,
};
use crate::error::{Error, Result};
use crate::jet::Jet;
use crate::policy::{eval_jet_lift, forward_core, MlpArch, MlpParams};
use crate::scalar::Scalar;

/// Reconstructed full state plus the momentum rate at its configuration.
pub(crate) struct Recon<S: Scalar> {
    pub q: [S; 3],
    pub dq: [S; 3],
    pub vz2: S,
}

/// Network output and its z-Jacobian with weights of scalar kind `SW`.
pub(crate) fn desired_outputs<SW: Scalar>(
    z: [SW; 2],
    arch: &MlpArch,
    w: &[SW],
) -> ([SW; 2], [[SW; 2]; 2]) {
    let zj = [Jet::<SW, 2>::variable(z[0], 0), Jet::<SW, 2>::variable(z[1], 1)];
    let out = eval_jet_lift(arch, w, zj);
    (
        [out[0].re, out[1].re],
        [[out[0].du[0], out[0].du[1]], [out[1].du[0], out[1].du[1]]],
    )
}

pub(crate) fn eval_lift_f64<S: Scalar>(net: &MlpParams, z: [S; 2]) -> [S; 2] {
    let mut out = [S::zero(); 2];
    forward_core(&net.arch, |i| S::from_f64(net.w[i]), &z, &mut out);
    out
}

/// Inverts the coordinate change at transverse error `eta`.
pub(crate) fn reconstruct_s<SW: Scalar>(
    eta: [SW; 4],
    z: [SW; 2],
    p: &ModelParams,
    arch: &MlpArch,
    w: &[SW],
) -> Result<Recon<SW>> {
    let (yd, jac) = desired_outputs(z, arch, w);
    reconstruct_from_outputs(eta, z, yd, jac, p)
}

/// Reconstruction core for callers that already hold the network output and
/// its z-Jacobian at `z`.
pub(crate) fn reconstruct_from_outputs<SW: Scalar>(
    eta: [SW; 4],
    z: [SW; 2],
    yd: [SW; 2],
    jac: [[SW; 2]; 2],
    p: &ModelParams,
) -> Result<Recon<SW>> {
    let q = [z[0], yd[0] + eta[0], yd[1] + eta[1]];
    let vz2 = -dv_dqu_s(q, p);

    // alpha_dot = ydot + J col-1 * dq_u + J col-2 * vz2; substituting into
    // the momentum row leaves one linear equation for dq_u.
    let m = mass_matrix_s(q, p);
    let part = [eta[2] + jac[0][1] * vz2, eta[3] + jac[1][1] * vz2];
    let denom = m[0][0] + m[0][1] * jac[0][0] + m[0][2] * jac[1][0];
    if denom.value().abs() < 1e-10 {
        return Err(Error::Singular {
            ctx: "phi_inverse",
            detail: format!(
                "momentum row degenerate (denominator {:.3e} at z1 {:.4})",
                denom.value(),
                z[0].value()
            ),
        });
    }
    let dq_u = (z[1] - m[0][1] * part[0] - m[0][2] * part[1]) / denom;
    let dq = [
        dq_u,
        part[0] + jac[0][0] * dq_u,
        part[1] + jac[1][0] * dq_u,
    ];
    Ok(Recon { q, dq, vz2 })
}

/// Forward coordinate change; returns `(eta, z)`.
pub(crate) fn phi_s<SW: Scalar>(
    q: [SW; 3],
    dq: [SW; 3],
    p: &ModelParams,
    arch: &MlpArch,
    w: &[SW],
) -> ([SW; 4], [SW; 2]) {
    let z = [q[0], momentum_s(q, dq, p)];
    let (yd, jac) = desired_outputs(z, arch, w);
    let zdot = [dq[0], -dv_dqu_s(q, p)];
    let eta = [
        q[1] - yd[0],
        q[2] - yd[1],
        dq[1] - jac[0][0] * zdot[0] - jac[0][1] * zdot[1],
        dq[2] - jac[1][0] * zdot[0] - jac[1][1] * zdot[1],
    ];
    (eta, z)
}

pub(crate) fn omega_s<SW: Scalar>(
    z: [SW; 2],
    p: &ModelParams,
    arch: &MlpArch,
    w: &[SW],
    residual: Option<&MlpParams>,
) -> Result<[SW; 2]> {
    let zero = SW::zero();
    let r = reconstruct_s([zero; 4], z, p, arch, w)?;
    let mut out = [r.dq[0], r.vz2];
    if let Some(eps) = residual {
        let e = eval_lift_f64(eps, z);
        out[0] = out[0] + e[0];
        out[1] = out[1] + e[1];
    }
    Ok(out)
}

/// Reduced impact: reconstruct on the surface, apply the plastic contact and
/// relabeling, read the reduced coordinates back off. Defined on a
/// neighborhood of the guard slice, not just on it.
pub(crate) fn zero_impact_s<SW: Scalar>(
    z: [SW; 2],
    p: &ModelParams,
    arch: &MlpArch,
    w: &[SW],
) -> Result<[SW; 2]> {
    let zero = SW::zero();
    let r = reconstruct_s([zero; 4], z, p, arch, w)?;
    let (q_post, dq_post, _, _) = impact_unchecked_s(r.q, r.dq, p)?;
    Ok([q_post[0], momentum_s(q_post, dq_post, p)])
}

/// Post-impact state expressed in `(eta, z)`; the symmetry defect of the
/// surface under the impact-and-relabel map.
pub(crate) fn zero_impact_full_s<SW: Scalar>(
    z: [SW; 2],
    p: &ModelParams,
    arch: &MlpArch,
    w: &[SW],
) -> Result<([SW; 4], [SW; 2])> {
    let zero = SW::zero();
    let r = reconstruct_s([zero; 4], z, p, arch, w)?;
    let (q_post, dq_post, _, _) = impact_unchecked_s(r.q, r.dq, p)?;
    Ok(phi_s(q_post, dq_post, p, arch, w))
}

// ------------------------------------------------------------------
// Public f64 contracts
// ------------------------------------------------------------------

pub fn phi(state: &RobotState, p: &ModelParams, policy: &MlpParams) -> ([f64; 4], [f64; 2]) {
    phi_s(state.q, state.dq, p, &policy.arch, &policy.w)
}

pub fn phi_inverse(eta: [f64; 4], z: [f64; 2], p: &ModelParams, policy: &MlpParams) -> Result<RobotState> {
    if !eta.iter().chain(z.iter()).all(|x| x.is_finite()) {
        return Err(Error::NonFinite("phi_inverse"));
    }
    let r = reconstruct_s(eta, z, p, &policy.arch, &policy.w)?;
    Ok(RobotState::new(r.q, r.dq))
}

pub fn phi_inverse_zero(z: [f64; 2], p: &ModelParams, policy: &MlpParams) -> Result<RobotState> {
    phi_inverse([0.0; 4], z, p, policy)
}

/// Reduced flow on the surface, optionally corrected by a learned residual.
pub fn omega(
    z: [f64; 2],
    p: &ModelParams,
    policy: &MlpParams,
    residual: Option<&MlpParams>,
) -> Result<[f64; 2]> {
    omega_s(z, p, &policy.arch, &policy.w, residual)
}

/// Flow of the reduced coordinates at transverse error `eta`; feeds the
/// coupling-constant estimate of the combined certificate.
pub fn omega_off_manifold(
    eta: [f64; 4],
    z: [f64; 2],
    p: &ModelParams,
    policy: &MlpParams,
) -> Result<[f64; 2]> {
    let r = reconstruct_s(eta, z, p, &policy.arch, &policy.w)?;
    Ok([r.dq[0], r.vz2])
}

pub fn zero_impact(z: [f64; 2], p: &ModelParams, policy: &MlpParams) -> Result<[f64; 2]> {
    zero_impact_s(z, p, &policy.arch, &policy.w)
}

/// Reduced impact together with the post-impact transverse error; the error
/// is what the tracking loop must absorb right after touchdown.
pub fn zero_impact_full(
    z: [f64; 2],
    p: &ModelParams,
    policy: &MlpParams,
) -> Result<([f64; 4], [f64; 2])> {
    zero_impact_full_s(z, p, &policy.arch, &policy.w)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dynamics::{angular_momentum_about, swing_foot_s};
    use crate::policy::MlpArch;
    use approx::assert_relative_eq;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn test_policy() -> MlpParams {
        MlpParams::init(MlpArch::plain(2, vec![8, 8], 2), 17).unwrap()
    }

    /// Single linear layer: y_d = A z + b.
    fn linear_policy(a: [[f64; 2]; 2], b: [f64; 2]) -> MlpParams {
        MlpParams {
            arch: MlpArch::plain(2, vec![], 2),
            w: vec![a[0][0], a[0][1], a[1][0], a[1][1], b[0], b[1]],
        }
    }

    #[test]
    fn phi_inverse_roundtrips_through_phi() {
        let p = ModelParams::default();
        let policy = test_policy();
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        for _ in 0..50 {
            let z = [rng.gen_range(-0.35..0.35), rng.gen_range(5.0..40.0)];
            let eta = [
                rng.gen_range(-0.2..0.2),
                rng.gen_range(-0.2..0.2),
                rng.gen_range(-1.0..1.0),
                rng.gen_range(-1.0..1.0),
            ];
            let x = phi_inverse(eta, z, &p, &policy).unwrap();
            let (eta2, z2) = phi(&x, &p, &policy);
            for k in 0..4 {
                assert_relative_eq!(eta2[k], eta[k], epsilon = 1e-11, max_relative = 1e-11);
            }
            for k in 0..2 {
                assert_relative_eq!(z2[k], z[k], epsilon = 1e-11, max_relative = 1e-11);
            }
        }
    }

    #[test]
    fn reconstruction_matches_independent_linear_solve() {
        // For a linear desired-output map the reconstruction is the solution
        // of an explicit 3x3 system; solve it with nalgebra as an
        // independent path.
        let p = ModelParams::default();
        let a = [[0.3, 0.002], [-0.5, 0.004]];
        let policy = linear_policy(a, [0.05, -0.1]);
        let z = [0.21, 24.0];
        let x = phi_inverse_zero(z, &p, &policy).unwrap();

        let q = x.q;
        let vz2 = -crate::dynamics::gravity_s(q, &p)[0];
        let m = crate::dynamics::dynamics_terms(&RobotState::new(q, [0.0; 3]), &p)
            .unwrap()
            .mass;
        // rows: momentum row == z2; alpha_i dot - a_i0 dq_u == a_i1 * vz2
        let sys = nalgebra::Matrix3::new(
            m[0][0], m[0][1], m[0][2],
            -a[0][0], 1.0, 0.0,
            -a[1][0], 0.0, 1.0,
        );
        let rhs = nalgebra::Vector3::new(z[1], a[0][1] * vz2, a[1][1] * vz2);
        let dq = sys.lu().solve(&rhs).unwrap();
        for k in 0..3 {
            assert_relative_eq!(x.dq[k], dq[k], max_relative = 1e-12, epsilon = 1e-12);
        }
    }

    #[test]
    fn z_is_policy_independent() {
        let p = ModelParams::default();
        let s = RobotState::new([0.1, -0.2, 0.4], [1.2, -0.3, 0.5]);
        let (_, za) = phi(&s, &p, &test_policy());
        let (_, zb) = phi(&s, &p, &linear_policy([[0.2, 0.0], [0.1, 0.01]], [0.0, 0.0]));
        assert_eq!(za, zb);
    }

    #[test]
    fn momentum_coordinate_ignores_the_actuation_directions() {
        // The gradient of z2 annihilates both control vector fields
        // (0, M^-1 B e_k); this is what makes z2 a zero-dynamics coordinate.
        let p = ModelParams::default();
        let s = RobotState::new([0.15, -0.25, 0.45], [0.9, 0.2, -0.7]);
        let terms = crate::dynamics::dynamics_terms(&s, &p).unwrap();
        let minv = crate::linalg::inv3(&terms.mass).unwrap();
        for col in 0..2 {
            // g = M^-1 B e_col
            // z2 is linear in dq, so the difference quotient has no
            // truncation error and the step can be generous.
            let g = [minv[0][1 + col], minv[1][1 + col], minv[2][1 + col]];
            let h = 1e-4;
            let mut sp = s;
            let mut sm = s;
            for k in 0..3 {
                sp.dq[k] += h * g[k];
                sm.dq[k] -= h * g[k];
            }
            let dir = (crate::dynamics::momentum(&sp, &p) - crate::dynamics::momentum(&sm, &p)) / (2.0 * h);
            assert!(dir.abs() < 1e-9, "z2 responds to input direction {col}: {dir:.3e}");
        }
    }

    #[test]
    fn reduced_impact_conserves_momentum_about_touchdown() {
        let p = ModelParams::default();
        let policy = test_policy();
        let z = [0.3, 30.0];
        let x = phi_inverse_zero(z, &p, &policy).unwrap();
        let foot = swing_foot_s(x.q, &p);
        let l_pre = angular_momentum_about(&x, &p, foot);
        let z_post = zero_impact(z, &p, &policy).unwrap();
        assert_relative_eq!(z_post[1], l_pre, max_relative = 1e-10);
        // New phase variable is the pre-impact swing-leg absolute angle.
        assert_relative_eq!(z_post[0], x.q[0] + x.q[1] + x.q[2], max_relative = 1e-12);
    }

    #[test]
    fn degenerate_output_geometry_is_reported() {
        // Slopes chosen so the momentum-row denominator cancels at q = 0:
        // M11 + (M12 + M13) * s = 205/6 + (2.5 - 5/6) s = 0.
        let s = -(205.0 / 6.0) / (2.5 - 5.0 / 6.0);
        let policy = linear_policy([[s, 0.0], [s, 0.0]], [0.0, 0.0]);
        let p = ModelParams::default();
        let err = phi_inverse_zero([0.0, 10.0], &p, &policy).unwrap_err();
        assert!(matches!(err, Error::Singular { .. }), "got {err:?}");
    }

    #[test]
    fn omega_adds_the_residual_field() {
        let p = ModelParams::default();
        let policy = test_policy();
        let mut res = MlpParams::init(MlpArch::plain(2, vec![4], 2), 9).unwrap();
        res.arch.output_shift = vec![0.3, -1.7];
        let z = [0.1, 20.0];
        let base = omega(z, &p, &policy, None).unwrap();
        let with = omega(z, &p, &policy, Some(&res)).unwrap();
        let eps = res.eval(z);
        assert_relative_eq!(with[0], base[0] + eps[0], max_relative = 1e-13);
        assert_relative_eq!(with[1], base[1] + eps[1], max_relative = 1e-13);
    }

    #[test]
    fn off_manifold_flow_matches_phi_inverse_state() {
        let p = ModelParams::default();
        let policy = test_policy();
        let eta = [0.05, -0.02, 0.4, -0.3];
        let z = [0.12, 22.0];
        let w = omega_off_manifold(eta, z, &p, &policy).unwrap();
        let x = phi_inverse(eta, z, &p, &policy).unwrap();
        assert_relative_eq!(w[0], x.dq[0], max_relative = 1e-13);
        // second component is the momentum rate at the reconstructed config
        let expect = -crate::dynamics::gravity_s(x.q, &p)[0];
        assert_relative_eq!(w[1], expect, max_relative = 1e-13);
    }
}
