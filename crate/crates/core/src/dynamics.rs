//! Planar three-link biped: stance leg pinned at the ground, torso and swing
//! leg hanging off the hip, all links with distributed mass.
//!
//! Coordinates are `q = (q_u, alpha1, alpha2)`: the unactuated absolute
//! stance-leg angle, the torso angle relative to the stance leg, and the
//! swing-leg angle relative to the torso. Absolute link angles are
//! `theta = W q` with the lower-triangular accumulation matrix `W`; an angle
//! of zero points a link straight up and positive angles tip it toward +x.
//! The inertia matrix is assembled as `W^T A W` where `A` couples absolute
//! angular rates, which keeps every trigonometric coefficient a function of
//! the relative angles only.
//!
//! All kernels are generic over [`Scalar`]; the `f64` wrappers validate
//! inputs and report singular systems per the public contracts.

use crate::error::{Error, Result};
use crate::linalg::{cond3, mat_vec, quadratic_form, solve_in_place};
use crate::scalar::Scalar;
use serde::{Deserialize, Serialize};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelParams {
    pub leg_mass: f64,
    pub hip_mass: f64,
    pub torso_mass: f64,
    pub leg_length: f64,
    pub torso_length: f64,
    /// Leg center of mass as a fraction of leg length, measured from the hip.
    pub leg_com_ratio: f64,
    /// Torso center of mass as a fraction of torso length, measured from the hip.
    pub torso_com_ratio: f64,
    pub gravity: f64,
    /// Viscous damping on the two actuated joints; the unactuated coordinate
    /// is never damped so the pendulum-momentum identity stays exact.
    pub joint_damping: f64,
}

impl Default for ModelParams {
    fn default() -> Self {
        ModelParams {
            leg_mass: 5.0,
            hip_mass: 15.0,
            torso_mass: 10.0,
            leg_length: 1.0,
            torso_length: 0.5,
            leg_com_ratio: 0.5,
            torso_com_ratio: 0.5,
            gravity: 9.81,
            joint_damping: 0.0,
        }
    }
}

impl ModelParams {
    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("leg_mass", self.leg_mass),
            ("hip_mass", self.hip_mass),
            ("torso_mass", self.torso_mass),
            ("leg_length", self.leg_length),
            ("torso_length", self.torso_length),
            ("gravity", self.gravity),
        ];
        for (name, v) in positive {
            if !(v.is_finite() && v > 0.0) {
                return Err(Error::InvalidConfig(format!("{name} must be positive, got {v}")));
            }
        }
        for (name, v) in [("leg_com_ratio", self.leg_com_ratio), ("torso_com_ratio", self.torso_com_ratio)] {
            if !(v.is_finite() && v > 0.0 && v <= 1.0) {
                return Err(Error::InvalidConfig(format!("{name} must be in (0, 1], got {v}")));
            }
        }
        if !(self.joint_damping.is_finite() && self.joint_damping >= 0.0) {
            return Err(Error::InvalidConfig(format!(
                "joint_damping must be non-negative, got {}",
                self.joint_damping
            )));
        }
        Ok(())
    }

    /// Surrogate plant used for episodic refinement: heavier torso (+20%),
    /// heavier legs (+10%), and viscous joint damping the nominal model lacks.
    pub fn perturbed_surrogate(&self) -> ModelParams {
        ModelParams {
            torso_mass: self.torso_mass * 1.2,
            leg_mass: self.leg_mass * 1.1,
            joint_damping: 0.5,
            ..*self
        }
    }

    pub(crate) fn consts(&self) -> Consts {
        let a = self.leg_com_ratio * self.leg_length;
        let b = self.torso_com_ratio * self.torso_length;
        let d = (1.0 - self.leg_com_ratio) * self.leg_length;
        let i_leg = self.leg_mass * self.leg_length * self.leg_length / 12.0;
        let i_torso = self.torso_mass * self.torso_length * self.torso_length / 12.0;
        let hanging = self.hip_mass + self.torso_mass + self.leg_mass;
        Consts {
            a,
            b,
            d,
            i_leg,
            i_torso,
            k1: self.leg_mass * a + hanging * self.leg_length,
            k2: self.torso_mass * b,
            k3: self.leg_mass * d,
            m_tot: 2.0 * self.leg_mass + self.hip_mass + self.torso_mass,
        }
    }
}

/// Frequently used derived constants: COM offsets, rod inertias, and the
/// first gravity moments `k1..k3` of stance assembly, torso, and swing leg.
pub(crate) struct Consts {
    pub a: f64,
    pub b: f64,
    pub d: f64,
    pub i_leg: f64,
    pub i_torso: f64,
    pub k1: f64,
    pub k2: f64,
    pub k3: f64,
    pub m_tot: f64,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct RobotState {
    pub q: [f64; 3],
    pub dq: [f64; 3],
}

impl RobotState {
    pub fn new(q: [f64; 3], dq: [f64; 3]) -> Self {
        RobotState { q, dq }
    }

    pub fn is_finite(&self) -> bool {
        self.q.iter().chain(self.dq.iter()).all(|x| x.is_finite())
    }
}

#[derive(Clone, Debug)]
pub struct DynamicsTerms {
    pub mass: [[f64; 3]; 3],
    pub coriolis: [[f64; 3]; 3],
    pub gravity: [f64; 3],
    /// Input matrix mapping the two joint torques into generalized forces.
    pub input: [[f64; 2]; 3],
}

#[derive(Clone, Copy, Debug)]
pub struct Kinematics {
    pub swing_foot: [f64; 2],
    pub hip: [f64; 2],
    pub com: [f64; 2],
    /// Torso angle measured counterclockwise from vertical, so a forward
    /// lean in the walking direction is negative. Internal joint angles use
    /// the opposite orientation; this field reports the conventional sign.
    pub torso_angle: f64,
}

#[derive(Clone, Copy, Debug)]
pub struct ImpactResult {
    /// Post-impact state, already relabeled so the former swing leg is the
    /// new pinned stance leg.
    pub state: RobotState,
    /// Ground impulse (N s) absorbed at the touchdown point.
    pub impulse: [f64; 2],
    /// Kinetic energy dissipated by the plastic contact; non-negative.
    pub energy_loss: f64,
}

pub const INPUT_MATRIX: [[f64; 2]; 3] = [[0.0, 0.0], [1.0, 0.0], [0.0, 1.0]];

/// Relative-to-absolute rate accumulation; `theta = W q`.
pub const W_ACCUM: [[f64; 3]; 3] = [[1.0, 0.0, 0.0], [1.0, 1.0, 0.0], [1.0, 1.0, 1.0]];

/// Coordinate relabeling applied after impact, swapping leg roles. An
/// involution on both configurations and rates.
pub const RELABEL: [[f64; 3]; 3] = [[1.0, 1.0, 1.0], [0.0, 0.0, -1.0], [0.0, -1.0, 0.0]];

#[inline]
pub(crate) fn abs_angles<S: Scalar>(q: [S; 3]) -> [S; 3] {
    [q[0], q[0] + q[1], q[0] + q[1] + q[2]]
}

/// Absolute-rate coupling matrix `A` (symmetric, `A23 = 0`).
fn rate_coupling<S: Scalar>(q: [S; 3], p: &ModelParams) -> [[S; 3]; 3] {
    let c = p.consts();
    let a11 = S::from_f64(p.leg_mass * c.a * c.a + (p.hip_mass + p.torso_mass + p.leg_mass) * p.leg_length * p.leg_length + c.i_leg);
    let a22 = S::from_f64(p.torso_mass * c.b * c.b + c.i_torso);
    let a33 = S::from_f64(p.leg_mass * c.d * c.d + c.i_leg);
    let a12 = S::from_f64(p.torso_mass * p.leg_length * c.b) * q[1].cos();
    let a13 = -S::from_f64(p.leg_mass * p.leg_length * c.d) * (q[1] + q[2]).cos();
    let z = S::zero();
    [[a11, a12, a13], [a12, a22, z], [a13, z, a33]]
}

/// d(A)/d(alpha1) and d(A)/d(alpha2); only the 1-2 and 1-3 couplings move.
fn rate_coupling_partials<S: Scalar>(q: [S; 3], p: &ModelParams) -> [[[S; 3]; 3]; 2] {
    let c = p.consts();
    let s12 = -S::from_f64(p.torso_mass * p.leg_length * c.b) * q[1].sin();
    let s13 = S::from_f64(p.leg_mass * p.leg_length * c.d) * (q[1] + q[2]).sin();
    let z = S::zero();
    let mut d1 = [[z; 3]; 3];
    d1[0][1] = s12;
    d1[1][0] = s12;
    d1[0][2] = s13;
    d1[2][0] = s13;
    let mut d2 = [[z; 3]; 3];
    d2[0][2] = s13;
    d2[2][0] = s13;
    [d1, d2]
}

fn sandwich_w<S: Scalar>(a: &[[S; 3]; 3]) -> [[S; 3]; 3] {
    // W^T A W with W the unit lower-triangular accumulation matrix.
    let mut aw = [[S::zero(); 3]; 3];
    for i in 0..3 {
        for j in 0..3 {
            let mut s = S::zero();
            for k in j..3 {
                s = s + a[i][k];
            }
            aw[i][j] = s;
        }
    }
    let mut m = [[S::zero(); 3]; 3];
    for i in 0..3 {
        for j in 0..3 {
            let mut s = S::zero();
            for k in i..3 {
                s = s + aw[k][j];
            }
            m[i][j] = s;
        }
    }
    m
}

pub(crate) fn mass_matrix_s<S: Scalar>(q: [S; 3], p: &ModelParams) -> [[S; 3]; 3] {
    sandwich_w(&rate_coupling(q, p))
}

/// Coriolis matrix from Christoffel symbols of `M`; satisfies the
/// `d(M)/dt - 2C` skew-symmetry property. `M` does not depend on `q_u`, so
/// only the two relative-angle partials enter.
pub(crate) fn coriolis_s<S: Scalar>(q: [S; 3], dq: [S; 3], p: &ModelParams) -> [[S; 3]; 3] {
    let parts = rate_coupling_partials(q, p);
    let dm = [sandwich_w(&parts[0]), sandwich_w(&parts[1])];
    // dM/dq_i as a lookup; index 0 (q_u) is identically zero.
    let dm_at = |i: usize, r: usize, c: usize| -> S {
        if i == 0 {
            S::zero()
        } else {
            dm[i - 1][r][c]
        }
    };
    let half = S::from_f64(0.5);
    let mut ccor = [[S::zero(); 3]; 3];
    for k in 0..3 {
        for j in 0..3 {
            let mut s = S::zero();
            for i in 0..3 {
                s = s + (dm_at(i, k, j) + dm_at(j, k, i) - dm_at(k, i, j)) * dq[i];
            }
            ccor[k][j] = half * s;
        }
    }
    ccor
}

pub(crate) fn gravity_s<S: Scalar>(q: [S; 3], p: &ModelParams) -> [S; 3] {
    let c = p.consts();
    let th = abs_angles(q);
    let g = p.gravity;
    // dV/dtheta, then pulled back through theta = W q.
    let dv = [
        -S::from_f64(g * c.k1) * th[0].sin(),
        -S::from_f64(g * c.k2) * th[1].sin(),
        S::from_f64(g * c.k3) * th[2].sin(),
    ];
    [dv[0] + dv[1] + dv[2], dv[1] + dv[2], dv[2]]
}

pub(crate) fn potential_s<S: Scalar>(q: [S; 3], p: &ModelParams) -> S {
    let c = p.consts();
    let th = abs_angles(q);
    (S::from_f64(c.k1) * th[0].cos() + S::from_f64(c.k2) * th[1].cos() - S::from_f64(c.k3) * th[2].cos())
        * S::from_f64(p.gravity)
}

/// `dV/dq_u`. Along any controlled trajectory of this robot,
/// `d/dt (M row-1 . dq) = -dV/dq_u` exactly: the first row of the input map
/// is zero, damping skips the unactuated joint, and `M` is cyclic in `q_u`.
pub(crate) fn dv_dqu_s<S: Scalar>(q: [S; 3], p: &ModelParams) -> S {
    gravity_s(q, p)[0]
}

pub(crate) fn swing_foot_s<S: Scalar>(q: [S; 3], p: &ModelParams) -> [S; 2] {
    let th = abs_angles(q);
    let l = S::from_f64(p.leg_length);
    [l * (th[0].sin() - th[2].sin()), l * (th[0].cos() - th[2].cos())]
}

pub(crate) fn swing_foot_vel_s<S: Scalar>(q: [S; 3], dq: [S; 3], p: &ModelParams) -> [S; 2] {
    let th = abs_angles(q);
    let w = abs_angles(dq); // same accumulation applies to rates
    let l = S::from_f64(p.leg_length);
    [
        l * (th[0].cos() * w[0] - th[2].cos() * w[2]),
        l * (-th[0].sin() * w[0] + th[2].sin() * w[2]),
    ]
}

pub(crate) fn momentum_s<S: Scalar>(q: [S; 3], dq: [S; 3], p: &ModelParams) -> S {
    let m = mass_matrix_s(q, p);
    m[0][0] * dq[0] + m[0][1] * dq[1] + m[0][2] * dq[2]
}

#[derive(Clone, Copy, Debug)]
pub struct BodyState {
    pub mass: f64,
    pub inertia: f64,
    pub pos: [f64; 2],
    pub vel: [f64; 2],
    pub spin: f64,
}

/// Mass, rod inertia, COM position/velocity and angular rate for the four
/// bodies (stance leg, hip, torso, swing leg), stance foot at the origin.
pub fn body_states(state: &RobotState, p: &ModelParams) -> [BodyState; 4] {
    let c = p.consts();
    let th = abs_angles(state.q);
    let w = abs_angles(state.dq);
    let u = |t: f64| [t.sin(), t.cos()];
    let e = |t: f64| [t.cos(), -t.sin()];
    let l = p.leg_length;
    let hip = [l * th[0].sin(), l * th[0].cos()];
    let hip_v = [l * th[0].cos() * w[0], -l * th[0].sin() * w[0]];
    let lin = |base: [f64; 2], base_v: [f64; 2], r: f64, t: f64, wt: f64| {
        (
            [base[0] + r * u(t)[0], base[1] + r * u(t)[1]],
            [base_v[0] + r * e(t)[0] * wt, base_v[1] + r * e(t)[1] * wt],
        )
    };
    let (p1, v1) = lin([0.0, 0.0], [0.0, 0.0], c.a, th[0], w[0]);
    let (p2, v2) = lin(hip, hip_v, c.b, th[1], w[1]);
    let (p3, v3) = lin(hip, hip_v, -c.d, th[2], w[2]);
    [
        BodyState { mass: p.leg_mass, inertia: c.i_leg, pos: p1, vel: v1, spin: w[0] },
        BodyState { mass: p.hip_mass, inertia: 0.0, pos: hip, vel: hip_v, spin: 0.0 },
        BodyState { mass: p.torso_mass, inertia: c.i_torso, pos: p2, vel: v2, spin: w[1] },
        BodyState { mass: p.leg_mass, inertia: c.i_leg, pos: p3, vel: v3, spin: w[2] },
    ]
}

/// Angular momentum of the whole robot about `point`, with the sign
/// convention under which it equals `M row-1 . dq` when taken about the
/// stance foot.
pub fn angular_momentum_about(state: &RobotState, p: &ModelParams, point: [f64; 2]) -> f64 {
    body_states(state, p)
        .iter()
        .map(|b| {
            let rx = b.pos[0] - point[0];
            let rz = b.pos[1] - point[1];
            b.mass * (rz * b.vel[0] - rx * b.vel[1]) + b.inertia * b.spin
        })
        .sum()
}

// ------------------------------------------------------------------
// Public f64 contracts
// ------------------------------------------------------------------

pub fn dynamics_terms(state: &RobotState, p: &ModelParams) -> Result<DynamicsTerms> {
    if !state.is_finite() {
        return Err(Error::NonFinite("dynamics_terms"));
    }
    Ok(DynamicsTerms {
        mass: mass_matrix_s(state.q, p),
        coriolis: coriolis_s(state.q, state.dq, p),
        gravity: gravity_s(state.q, p),
        input: INPUT_MATRIX,
    })
}

/// Generalized damping force on the actuated joints.
pub fn damping_force(dq: [f64; 3], p: &ModelParams) -> [f64; 3] {
    [0.0, -p.joint_damping * dq[1], -p.joint_damping * dq[2]]
}

/// Joint accelerations under torque `u`. Errors on non-finite input or a
/// numerically singular inertia matrix (condition estimate above 1e12).
pub fn forward_dynamics(state: &RobotState, u: [f64; 2], p: &ModelParams) -> Result<[f64; 3]> {
    if !state.is_finite() || !u.iter().all(|x| x.is_finite()) {
        return Err(Error::NonFinite("forward_dynamics"));
    }
    let m = mass_matrix_s(state.q, p);
    let cond = cond3(&m);
    if cond > 1e12 {
        return Err(Error::Singular {
            ctx: "forward_dynamics",
            detail: format!("inertia condition estimate {cond:.3e}"),
        });
    }
    let c = coriolis_s(state.q, state.dq, p);
    let g = gravity_s(state.q, p);
    let damp = damping_force(state.dq, p);
    let cdq = mat_vec(&c, &state.dq);
    let mut rhs = [0.0; 3];
    for i in 0..3 {
        rhs[i] = INPUT_MATRIX[i][0] * u[0] + INPUT_MATRIX[i][1] * u[1] + damp[i] - cdq[i] - g[i];
    }
    let mut m_work = m;
    solve_in_place(&mut m_work, &mut rhs)?;
    Ok(rhs)
}

pub fn kinematics(q: [f64; 3], p: &ModelParams) -> Kinematics {
    let c = p.consts();
    let th = abs_angles(q);
    let l = p.leg_length;
    let hip = [l * th[0].sin(), l * th[0].cos()];
    let state = RobotState::new(q, [0.0; 3]);
    let bodies = body_states(&state, p);
    let mut com = [0.0, 0.0];
    for b in &bodies {
        com[0] += b.mass * b.pos[0];
        com[1] += b.mass * b.pos[1];
    }
    com[0] /= c.m_tot;
    com[1] /= c.m_tot;
    Kinematics {
        swing_foot: swing_foot_s(q, p),
        hip,
        com,
        torso_angle: -(q[0] + q[1]),
    }
}

pub fn kinetic_energy(state: &RobotState, p: &ModelParams) -> f64 {
    0.5 * quadratic_form(&mass_matrix_s(state.q, p), &state.dq)
}

pub fn potential_energy(q: [f64; 3], p: &ModelParams) -> f64 {
    potential_s(q, p)
}

pub fn total_energy(state: &RobotState, p: &ModelParams) -> f64 {
    kinetic_energy(state, p) + potential_s(state.q, p)
}

/// Swing-foot height; the guard surface is `guard_value = 0` crossed while
/// [`guard_velocity`] is negative.
pub fn guard_value(q: [f64; 3], p: &ModelParams) -> f64 {
    swing_foot_s(q, p)[1]
}

pub fn guard_velocity(state: &RobotState, p: &ModelParams) -> f64 {
    swing_foot_vel_s(state.q, state.dq, p)[1]
}

/// Unactuated momentum coordinate `z2 = M row-1 . dq` (angular momentum
/// about the stance foot).
pub fn momentum(state: &RobotState, p: &ModelParams) -> f64 {
    momentum_s(state.q, state.dq, p)
}

/// `z2` corresponding to a forward hip speed `v` at the upright reference
/// configuration; used to convert the speed band into momentum bounds.
pub fn z2_of_speed(p: &ModelParams, v: f64) -> f64 {
    let m = mass_matrix_s([0.0; 3], p);
    m[0][0] * v / p.leg_length
}

pub fn relabel_config(q: [f64; 3]) -> [f64; 3] {
    [q[0] + q[1] + q[2], -q[2], -q[1]]
}

pub(crate) fn relabel_config_s<S: Scalar>(q: [S; 3]) -> [S; 3] {
    [q[0] + q[1] + q[2], -q[2], -q[1]]
}

pub(crate) fn relabel_rates_s<S: Scalar>(dq: [S; 3]) -> [S; 3] {
    [dq[0] + dq[1] + dq[2], -dq[2], -dq[1]]
}

/// Plastic impact of the swing foot with the ground, followed by leg
/// relabeling. Generic so barrier terms can be differentiated through it.
///
/// Solves the 7x7 KKT system of the floating-base model (5 velocities, 2
/// contact impulses) that pins the touchdown point, then re-expresses the
/// result in pinned coordinates of the new stance leg. Returns
/// `(q_post, dq_post, impulse, energy_loss)`.
pub(crate) fn impact_unchecked_s<S: Scalar>(
    q: [S; 3],
    dq: [S; 3],
    p: &ModelParams,
) -> Result<([S; 3], [S; 3], [S; 2], S)> {
    let c = p.consts();
    let th = abs_angles(q);
    let e = |t: S| [t.cos(), -t.sin()];
    let (e1, e2, e3) = (e(th[0]), e(th[1]), e(th[2]));
    let l = S::from_f64(p.leg_length);
    let (k1, k2, k3) = (S::from_f64(c.k1), S::from_f64(c.k2), S::from_f64(c.k3));

    // Mass coupling between joint rates and base translation: column j is
    // the total linear momentum produced by unit rate of q_j.
    let s_cols: [[S; 2]; 3] = [
        [k1 * e1[0] + k2 * e2[0] - k3 * e3[0], k1 * e1[1] + k2 * e2[1] - k3 * e3[1]],
        [k2 * e2[0] - k3 * e3[0], k2 * e2[1] - k3 * e3[1]],
        [-k3 * e3[0], -k3 * e3[1]],
    ];
    // Swing-foot Jacobian including base columns.
    let jf: [[S; 2]; 3] = [
        [l * (e1[0] - e3[0]), l * (e1[1] - e3[1])],
        [-l * e3[0], -l * e3[1]],
        [-l * e3[0], -l * e3[1]],
    ];

    let m = mass_matrix_s(q, p);
    let z = S::zero();
    let mut sys = [[z; 7]; 7];
    for i in 0..3 {
        for j in 0..3 {
            sys[i][j] = m[i][j];
        }
        for k in 0..2 {
            sys[i][3 + k] = s_cols[i][k];
            sys[3 + k][i] = s_cols[i][k];
            sys[i][5 + k] = -jf[i][k];
            sys[5 + k][i] = jf[i][k];
        }
    }
    let m_tot = S::from_f64(c.m_tot);
    for k in 0..2 {
        sys[3 + k][3 + k] = m_tot;
        sys[3 + k][5 + k] = -S::one();
        sys[5 + k][3 + k] = S::one();
    }

    // Pre-impact momentum with the base at rest.
    let mdq = mat_vec(&m, &dq);
    let mut rhs = [z; 7];
    for i in 0..3 {
        rhs[i] = mdq[i];
    }
    for k in 0..2 {
        let mut s = z;
        for j in 0..3 {
            s = s + s_cols[j][k] * dq[j];
        }
        rhs[3 + k] = s;
    }

    solve_in_place(&mut sys, &mut rhs).map_err(|_| Error::Singular {
        ctx: "impact_map",
        detail: "contact system has no unique solution".to_string(),
    })?;

    let dq_post = [rhs[0], rhs[1], rhs[2]];
    let base_post = [rhs[3], rhs[4]];
    let impulse = [rhs[5], rhs[6]];

    // Dissipation measured in the floating-base metric; the pre-impact base
    // is at rest so the pre energy is the pinned kinetic energy.
    let ke = |dqv: [S; 3], base: [S; 2]| {
        let mut t = S::from_f64(0.5) * quadratic_form(&m, &dqv);
        for k in 0..2 {
            let mut cross = z;
            for j in 0..3 {
                cross = cross + s_cols[j][k] * dqv[j];
            }
            t = t + cross * base[k] + S::from_f64(0.5) * m_tot * base[k] * base[k];
        }
        t
    };
    let loss = ke(dq, [z, z]) - ke(dq_post, base_post);

    Ok((
        relabel_config_s(q),
        relabel_rates_s(dq_post),
        impulse,
        loss,
    ))
}

/// Guard-checked impact map. Preconditions: swing foot on the ground
/// (|height| < 1e-6) and descending; otherwise a guard error is returned.
pub fn impact_map(state: &RobotState, p: &ModelParams) -> Result<ImpactResult> {
    if !state.is_finite() {
        return Err(Error::NonFinite("impact_map"));
    }
    let h = guard_value(state.q, p);
    if h.abs() >= 1e-6 {
        return Err(Error::GuardPrecondition(format!(
            "swing foot height {h:.3e} not on the guard"
        )));
    }
    let hdot = guard_velocity(state, p);
    if hdot >= 0.0 {
        return Err(Error::GuardPrecondition(format!(
            "swing foot not descending (velocity {hdot:.3e})"
        )));
    }
    let (q, dq, impulse, energy_loss) = impact_unchecked_s(state.q, state.dq, p)?;
    Ok(ImpactResult {
        state: RobotState::new(q, dq),
        impulse,
        energy_loss,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    fn sample_states() -> Vec<RobotState> {
        vec![
            RobotState::new([0.0, 0.0, 0.0], [1.0, 0.0, 0.0]),
            RobotState::new([0.2, -0.3, 0.5], [0.7, -0.2, 1.1]),
            RobotState::new([-0.3, 0.1, 0.6], [1.5, 0.4, -0.9]),
            RobotState::new([0.1, -0.05, -0.4], [-0.3, 0.8, 0.2]),
        ]
    }

    #[test]
    fn mass_matrix_reference_entry() {
        // Sum of all absolute-rate couplings at the upright configuration:
        // 95/3 + 5/6 + 5/3 + (2.5 + 2.5) - (2.5 + 2.5) = 205/6.
        let p = ModelParams::default();
        let m = mass_matrix_s([0.0; 3], &p);
        assert_relative_eq!(m[0][0], 205.0 / 6.0, max_relative = 1e-14);
    }

    #[test]
    fn mass_matrix_is_symmetric_positive_definite_and_cyclic_in_qu() {
        let p = ModelParams::default();
        for s in sample_states() {
            let m = mass_matrix_s(s.q, &p);
            for i in 0..3 {
                for j in 0..3 {
                    assert_relative_eq!(m[i][j], m[j][i], max_relative = 1e-13);
                }
            }
            // positive definite via leading principal minors
            let d1 = m[0][0];
            let d2 = m[0][0] * m[1][1] - m[0][1] * m[1][0];
            let d3 = crate::linalg::inv3(&m).is_some() as i32 as f64
                * (m[0][0] * (m[1][1] * m[2][2] - m[1][2] * m[2][1])
                    - m[0][1] * (m[1][0] * m[2][2] - m[1][2] * m[2][0])
                    + m[0][2] * (m[1][0] * m[2][1] - m[1][1] * m[2][0]));
            assert!(d1 > 0.0 && d2 > 0.0 && d3 > 0.0, "not PD at {:?}", s.q);

            let mut q_shift = s.q;
            q_shift[0] += 0.37;
            let m_shift = mass_matrix_s(q_shift, &p);
            for i in 0..3 {
                for j in 0..3 {
                    assert_relative_eq!(m[i][j], m_shift[i][j], max_relative = 1e-13);
                }
            }
        }
    }

    #[test]
    fn kinetic_energy_matches_body_velocity_sum() {
        // Independent path: COM velocities and rod spins per body.
        let p = ModelParams::default();
        for s in sample_states() {
            let ke = kinetic_energy(&s, &p);
            let ke_bodies: f64 = body_states(&s, &p)
                .iter()
                .map(|b| {
                    0.5 * b.mass * (b.vel[0] * b.vel[0] + b.vel[1] * b.vel[1])
                        + 0.5 * b.inertia * b.spin * b.spin
                })
                .sum();
            assert_relative_eq!(ke, ke_bodies, max_relative = 1e-12);
        }
    }

    #[test]
    fn gravity_vector_is_gradient_of_potential() {
        let p = ModelParams::default();
        let h = 1e-6;
        for s in sample_states() {
            let g = gravity_s(s.q, &p);
            for k in 0..3 {
                let mut qp = s.q;
                let mut qm = s.q;
                qp[k] += h;
                qm[k] -= h;
                let fd = (potential_s(qp, &p) - potential_s(qm, &p)) / (2.0 * h);
                assert_relative_eq!(g[k], fd, max_relative = 1e-6, epsilon = 1e-7);
            }
        }
    }

    #[test]
    fn coriolis_satisfies_skew_symmetry() {
        // dq^T (dM/dt - 2C) dq = 0 for the Christoffel construction.
        let p = ModelParams::default();
        let h = 1e-6;
        for s in sample_states() {
            let c = coriolis_s(s.q, s.dq, &p);
            // dM/dt by finite differences along dq
            let mut qp = s.q;
            let mut qm = s.q;
            for k in 0..3 {
                qp[k] += h * s.dq[k];
                qm[k] -= h * s.dq[k];
            }
            let (mp, mm) = (mass_matrix_s(qp, &p), mass_matrix_s(qm, &p));
            let mut v = 0.0;
            for i in 0..3 {
                for j in 0..3 {
                    let mdot = (mp[i][j] - mm[i][j]) / (2.0 * h);
                    v += s.dq[i] * (mdot - 2.0 * c[i][j]) * s.dq[j];
                }
            }
            assert!(v.abs() < 1e-6, "skew defect {v:.3e} at {:?}", s.q);
        }
    }

    #[test]
    fn momentum_equals_angular_momentum_about_contact() {
        let p = ModelParams::default();
        for s in sample_states() {
            let z2 = momentum(&s, &p);
            let l = angular_momentum_about(&s, &p, [0.0, 0.0]);
            assert_relative_eq!(z2, l, max_relative = 1e-12);
        }
    }

    #[test]
    fn momentum_rate_equals_negative_potential_slope() {
        // d/dt z2 = -dV/dq_u along controlled, damped trajectories.
        let mut p = ModelParams::default();
        p.joint_damping = 0.5;
        let u = [3.0, -2.0];
        for s in sample_states() {
            let ddq = forward_dynamics(&s, u, &p).unwrap();
            let h = 1e-6;
            let step = |sign: f64| {
                let mut q = s.q;
                let mut dq = s.dq;
                for k in 0..3 {
                    q[k] += sign * h * s.dq[k];
                    dq[k] += sign * h * ddq[k];
                }
                momentum(&RobotState::new(q, dq), &p)
            };
            let z2dot_fd = (step(1.0) - step(-1.0)) / (2.0 * h);
            let expect = -dv_dqu_s(s.q, &p);
            assert_relative_eq!(z2dot_fd, expect, max_relative = 1e-5, epsilon = 1e-6);
        }
    }

    #[test]
    fn forward_dynamics_power_balance() {
        // d/dt E = u . dq_act + damping power.
        let mut p = ModelParams::default();
        p.joint_damping = 0.3;
        let u = [1.5, -0.7];
        for s in sample_states() {
            let ddq = forward_dynamics(&s, u, &p).unwrap();
            let h = 1e-6;
            let at = |sign: f64| {
                let mut q = s.q;
                let mut dq = s.dq;
                for k in 0..3 {
                    q[k] += sign * h * s.dq[k];
                    dq[k] += sign * h * ddq[k];
                }
                total_energy(&RobotState::new(q, dq), &p)
            };
            let edot_fd = (at(1.0) - at(-1.0)) / (2.0 * h);
            let power = u[0] * s.dq[1] + u[1] * s.dq[2]
                - p.joint_damping * (s.dq[1] * s.dq[1] + s.dq[2] * s.dq[2]);
            assert_relative_eq!(edot_fd, power, max_relative = 1e-5, epsilon = 1e-6);
        }
    }

    #[test]
    fn relabel_is_an_involution() {
        let q = [0.21, -0.4, 0.55];
        let q2 = relabel_config(relabel_config(q));
        for k in 0..3 {
            assert_relative_eq!(q2[k], q[k], max_relative = 1e-15, epsilon = 1e-15);
        }
        let dq = [1.3, -0.2, 0.8];
        let twice = relabel_rates_s(relabel_rates_s(dq));
        for k in 0..3 {
            assert_relative_eq!(twice[k], dq[k], max_relative = 1e-15);
        }
    }

    #[test]
    fn relabel_preserves_torso_angle_and_swaps_feet() {
        let p = ModelParams::default();
        let q = [0.3, -0.12, -0.72];
        let qr = relabel_config(q);
        // Torso absolute angle: q_u + alpha1 must be continuous across the swap.
        assert_relative_eq!(qr[0] + qr[1], q[0] + q[1], max_relative = 1e-13);
        // The old stance foot, seen from the new stance frame, is the
        // negated old swing-foot vector.
        let f_old = swing_foot_s(q, &p);
        let f_new = swing_foot_s(qr, &p);
        assert_relative_eq!(f_new[0], -f_old[0], epsilon = 1e-13);
        assert_relative_eq!(f_new[1], -f_old[1], epsilon = 1e-13);
    }

    /// A state on the guard: swing foot exactly on the ground and moving down.
    fn guard_state(p: &ModelParams) -> RobotState {
        // Mirror configuration: theta3 = -q_u puts the swing foot on the
        // ground for any torso angle.
        let q_u = 0.3;
        let alpha1 = -0.2;
        let q = [q_u, alpha1, -q_u - alpha1 - q_u];
        let dq = [1.2, -0.1, -0.6];
        let s = RobotState::new(q, dq);
        assert!(guard_value(q, p).abs() < 1e-12);
        assert!(guard_velocity(&s, p) < 0.0);
        s
    }

    #[test]
    fn impact_conserves_angular_momentum_about_touchdown() {
        let p = ModelParams::default();
        let s = guard_state(&p);
        let foot = swing_foot_s(s.q, &p);
        let l_pre = angular_momentum_about(&s, &p, foot);
        let res = impact_map(&s, &p).unwrap();
        // Post-relabel the touchdown point is the new origin.
        let l_post = momentum(&res.state, &p);
        assert_relative_eq!(l_post, l_pre, max_relative = 1e-10);
    }

    #[test]
    fn impact_dissipates_energy_and_matches_pinned_energy() {
        let p = ModelParams::default();
        let s = guard_state(&p);
        let ke_pre = kinetic_energy(&s, &p);
        let res = impact_map(&s, &p).unwrap();
        let ke_post = kinetic_energy(&res.state, &p);
        assert!(res.energy_loss >= -1e-10, "loss {}", res.energy_loss);
        // The post-impact motion is pinned at the new foot, so the extended
        // and pinned kinetic energies must agree.
        assert_relative_eq!(ke_pre - ke_post, res.energy_loss, max_relative = 1e-9);
    }

    #[test]
    fn impact_at_rest_is_a_pure_relabel() {
        let p = ModelParams::default();
        let q = [0.3, -0.2, -0.4];
        assert!(guard_value(q, &p).abs() < 1e-12);
        let (q_post, dq_post, impulse, loss) =
            impact_unchecked_s([q[0], q[1], q[2]], [0.0; 3], &p).unwrap();
        assert_eq!(q_post, relabel_config(q));
        for k in 0..3 {
            assert!(dq_post[k].abs() < 1e-12);
        }
        assert!(impulse[0].abs() < 1e-12 && impulse[1].abs() < 1e-12);
        assert!(loss.abs() < 1e-12);
        let z2_post = momentum(&RobotState::new(q_post, dq_post), &p);
        assert!(z2_post.abs() < 1e-12);
    }

    #[test]
    fn impact_rejects_states_off_the_guard() {
        let p = ModelParams::default();
        let s = RobotState::new([0.1, -0.1, 0.3], [1.0, 0.0, 0.0]);
        assert!(guard_value(s.q, &p).abs() > 1e-3);
        assert!(matches!(impact_map(&s, &p), Err(Error::GuardPrecondition(_))));
        // On the guard but ascending is also rejected.
        let mut asc = guard_state(&p);
        asc.dq = [-1.2, 0.1, 0.6];
        assert!(guard_velocity(&asc, &p) > 0.0);
        assert!(matches!(impact_map(&asc, &p), Err(Error::GuardPrecondition(_))));
    }

    #[test]
    fn surrogate_perturbs_masses_and_adds_damping() {
        let p = ModelParams::default();
        let s = p.perturbed_surrogate();
        assert_relative_eq!(s.torso_mass, 12.0);
        assert_relative_eq!(s.leg_mass, 5.5);
        assert_relative_eq!(s.joint_damping, 0.5);
        assert_eq!(s.leg_length, p.leg_length);
    }

    #[test]
    fn z2_of_speed_uses_reference_inertia() {
        let p = ModelParams::default();
        assert_relative_eq!(z2_of_speed(&p, 1.2), 41.0, max_relative = 1e-13);
        assert_relative_eq!(z2_of_speed(&p, 0.2), 41.0 / 6.0, max_relative = 1e-13);
    }

    #[test]
    fn forward_dynamics_rejects_non_finite_input() {
        let p = ModelParams::default();
        let s = RobotState::new([f64::NAN, 0.0, 0.0], [0.0; 3]);
        assert!(matches!(forward_dynamics(&s, [0.0, 0.0], &p), Err(Error::NonFinite(_))));
    }
}
