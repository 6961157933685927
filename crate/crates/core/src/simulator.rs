//! Full-order closed-loop rollout.
//!
//! Torques update on a zero-order hold at the control rate; the policy's
//! desired outputs and their Jacobian are refreshed at the (slower) policy
//! rate for the PD law. Between control ticks the continuous dynamics are
//! integrated with fixed-step RK4 on an augmented state that carries the
//! actuation and damping work integrals, so every inter-impact segment can
//! be audited against the work-energy theorem. Touchdown is located by
//! bisecting the last integration substep to `|p_z| < 1e-8`, the plastic
//! impact and relabeling are applied, and the controller is refreshed
//! immediately at the post-impact state.

use crate::dynamics::{
    dv_dqu_s, forward_dynamics, guard_value, guard_velocity, impact_map, kinematics, momentum,
    total_energy, ModelParams, RobotState,
};
use crate::error::{Error, Result};
use crate::jet::Jet;
use crate::linalg::inv3;
use crate::policy::MlpParams;
use crate::zero_dynamics::{desired_outputs, phi};
use serde::{Deserialize, Serialize};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, rename_all = "snake_case", tag = "law")]
pub enum ControlLaw {
    /// Output-space PD on `y = alpha - y_d(z)` with held policy outputs.
    Pd { kp: f64, kd: f64 },
    /// Exact input-output linearization with PD on the linearized error.
    FeedbackLinearized { kp: f64, kd: f64 },
    /// No actuation; the passive plant.
    Zero,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SimConfig {
    pub control_rate_hz: f64,
    pub policy_rate_hz: f64,
    pub integrator_step: f64,
    pub law: ControlLaw,
    /// Rollout ends after this many completed footsteps.
    pub max_steps: usize,
    pub max_time: f64,
    /// Ground contacts with less swing-foot forward progress than this are
    /// scuffs, not steps. Point feet on equal-length legs graze the ground
    /// whenever the legs pass each other, so only forward contacts count.
    pub step_gate_x: f64,
}

impl Default for SimConfig {
    fn default() -> Self {
        Self {
            control_rate_hz: 1000.0,
            policy_rate_hz: 500.0,
            integrator_step: 2e-4,
            law: ControlLaw::Pd { kp: 1600.0, kd: 80.0 },
            max_steps: 20,
            max_time: 30.0,
            step_gate_x: 0.3,
        }
    }
}

/// Integer tick layout derived from the rates; rates must nest exactly.
struct Ticks {
    n_sub: usize,
    pol_every: usize,
}

impl SimConfig {
    pub fn validate(&self) -> Result<()> {
        self.ticks()?;
        if self.max_time <= 0.0 || self.max_steps == 0 {
            return Err(Error::InvalidConfig("horizon must be positive".into()));
        }
        Ok(())
    }

    fn ticks(&self) -> Result<Ticks> {
        if !(self.control_rate_hz > 0.0 && self.policy_rate_hz > 0.0 && self.integrator_step > 0.0)
        {
            return Err(Error::InvalidConfig("rates and step must be positive".into()));
        }
        if self.control_rate_hz < self.policy_rate_hz {
            return Err(Error::InvalidConfig(
                "control rate must be at least the policy rate".into(),
            ));
        }
        let ctrl_period = 1.0 / self.control_rate_hz;
        let n_sub = (ctrl_period / self.integrator_step).round();
        if n_sub < 1.0 || (n_sub * self.integrator_step - ctrl_period).abs() > 1e-9 * ctrl_period {
            return Err(Error::InvalidConfig(format!(
                "integrator step {} must divide the control period {}",
                self.integrator_step, ctrl_period
            )));
        }
        let pol_every = (self.control_rate_hz / self.policy_rate_hz).round();
        if (pol_every * self.policy_rate_hz - self.control_rate_hz).abs() > 1e-9 * self.control_rate_hz {
            return Err(Error::InvalidConfig(
                "control rate must be an integer multiple of the policy rate".into(),
            ));
        }
        Ok(Ticks { n_sub: n_sub as usize, pol_every: pol_every as usize })
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LogRow {
    pub t: f64,
    pub q: [f64; 3],
    pub dq: [f64; 3],
    pub z: [f64; 2],
    pub u: [f64; 2],
    pub swing_z: f64,
    /// 0 regular sample, 1 pre-impact, 2 post-impact (same timestamp).
    pub event: u8,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct TrajectoryLog {
    pub rows: Vec<LogRow>,
}

pub const LOG_HEADER: &str =
    "t,q_u,alpha1,alpha2,dq_u,dalpha1,dalpha2,z1,z2,u1,u2,swing_foot_z,event";

impl TrajectoryLog {
    pub fn write_csv(&self, path: &std::path::Path) -> Result<()> {
        use std::io::Write;
        let mut f = std::io::BufWriter::new(std::fs::File::create(path)?);
        writeln!(f, "{LOG_HEADER}")?;
        for r in &self.rows {
            writeln!(
                f,
                "{},{},{},{},{},{},{},{},{},{},{},{},{}",
                r.t,
                r.q[0],
                r.q[1],
                r.q[2],
                r.dq[0],
                r.dq[1],
                r.dq[2],
                r.z[0],
                r.z[1],
                r.u[0],
                r.u[1],
                r.swing_z,
                r.event
            )?;
        }
        Ok(())
    }

    pub fn read_csv(path: &std::path::Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        let mut lines = text.lines();
        match lines.next() {
            Some(h) if h == LOG_HEADER => {}
            other => {
                return Err(Error::MalformedLog(format!(
                    "unexpected header {:?}",
                    other.unwrap_or("<empty>")
                )))
            }
        }
        let mut rows = Vec::new();
        for (i, line) in lines.enumerate() {
            let parts: Vec<&str> = line.split(',').collect();
            if parts.len() != 13 {
                return Err(Error::MalformedLog(format!(
                    "line {}: expected 13 fields, got {}",
                    i + 2,
                    parts.len()
                )));
            }
            let num = |k: usize| -> Result<f64> {
                parts[k]
                    .parse::<f64>()
                    .map_err(|e| Error::MalformedLog(format!("line {}: {}", i + 2, e)))
            };
            rows.push(LogRow {
                t: num(0)?,
                q: [num(1)?, num(2)?, num(3)?],
                dq: [num(4)?, num(5)?, num(6)?],
                z: [num(7)?, num(8)?],
                u: [num(9)?, num(10)?],
                swing_z: num(11)?,
                event: parts[12]
                    .parse::<u8>()
                    .map_err(|e| Error::MalformedLog(format!("line {}: {}", i + 2, e)))?,
            });
        }
        Ok(Self { rows })
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct StepStats {
    pub index: usize,
    pub t_touchdown: f64,
    pub duration: f64,
    /// Swing-foot advance in the stance frame at touchdown.
    pub step_length: f64,
    pub mean_speed: f64,
    pub impact_impulse: [f64; 2],
    pub impact_loss: f64,
    /// Transverse error right after impact; the jump the tracking loop
    /// absorbs.
    pub post_impact_error: [f64; 4],
}

#[derive(Clone, Copy, Debug, Serialize, Deserialize)]
pub struct SegmentEnergy {
    pub t0: f64,
    pub t1: f64,
    pub e_start: f64,
    pub e_end: f64,
    pub work_actuation: f64,
    pub work_damping: f64,
}

impl SegmentEnergy {
    /// Work-energy residual; zero up to integration error.
    pub fn defect(&self) -> f64 {
        self.e_end - self.e_start - self.work_actuation - self.work_damping
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "outcome")]
pub enum Outcome {
    Completed { steps: usize },
    TimedOut { steps: usize },
    Fell { t: f64, reason: String },
}

#[derive(Clone, Debug)]
pub struct RolloutResult {
    pub log: TrajectoryLog,
    pub steps: Vec<StepStats>,
    pub segments: Vec<SegmentEnergy>,
    pub outcome: Outcome,
}

/// Plant state plus running work integrals.
#[derive(Clone, Copy)]
struct SimState {
    rs: RobotState,
    w_u: f64,
    w_damp: f64,
}

fn deriv(s: &SimState, u: [f64; 2], p: &ModelParams) -> Result<[f64; 8]> {
    let ddq = forward_dynamics(&s.rs, u, p)?;
    let dq = s.rs.dq;
    Ok([
        dq[0],
        dq[1],
        dq[2],
        ddq[0],
        ddq[1],
        ddq[2],
        u[0] * dq[1] + u[1] * dq[2],
        -p.joint_damping * (dq[1] * dq[1] + dq[2] * dq[2]),
    ])
}

fn add_scaled(s: &SimState, k: &[f64; 8], h: f64) -> SimState {
    SimState {
        rs: RobotState::new(
            [s.rs.q[0] + h * k[0], s.rs.q[1] + h * k[1], s.rs.q[2] + h * k[2]],
            [s.rs.dq[0] + h * k[3], s.rs.dq[1] + h * k[4], s.rs.dq[2] + h * k[5]],
        ),
        w_u: s.w_u + h * k[6],
        w_damp: s.w_damp + h * k[7],
    }
}

fn rk4(s: &SimState, u: [f64; 2], h: f64, p: &ModelParams) -> Result<SimState> {
    let k1 = deriv(s, u, p)?;
    let k2 = deriv(&add_scaled(s, &k1, 0.5 * h), u, p)?;
    let k3 = deriv(&add_scaled(s, &k2, 0.5 * h), u, p)?;
    let k4 = deriv(&add_scaled(s, &k3, h), u, p)?;
    let mut k = [0.0; 8];
    for i in 0..8 {
        k[i] = (k1[i] + 2.0 * k2[i] + 2.0 * k3[i] + k4[i]) / 6.0;
    }
    Ok(add_scaled(s, &k, h))
}

/// Desired outputs held between policy ticks.
struct Held {
    yd: [f64; 2],
    jac: [[f64; 2]; 2],
}

struct Controller {
    law: ControlLaw,
    held: Held,
}

impl Controller {
    fn new(law: ControlLaw) -> Self {
        Self { law, held: Held { yd: [0.0; 2], jac: [[0.0; 2]; 2] } }
    }

    fn refresh(&mut self, x: &RobotState, p: &ModelParams, policy: &MlpParams) {
        let z = [x.q[0], momentum(x, p)];
        let (yd, jac) = desired_outputs(z, &policy.arch, &policy.w);
        self.held = Held { yd, jac };
    }

    fn control(&self, x: &RobotState, p: &ModelParams, policy: &MlpParams) -> Result<[f64; 2]> {
        match self.law {
            ControlLaw::Zero => Ok([0.0, 0.0]),
            ControlLaw::Pd { kp, kd } => {
                let zdot = [x.dq[0], -dv_dqu_s(x.q, p)];
                let mut u = [0.0; 2];
                for i in 0..2 {
                    let y = x.q[1 + i] - self.held.yd[i];
                    let ydot = x.dq[1 + i]
                        - self.held.jac[i][0] * zdot[0]
                        - self.held.jac[i][1] * zdot[1];
                    u[i] = -kp * y - kd * ydot;
                }
                Ok(u)
            }
            ControlLaw::FeedbackLinearized { kp, kd } => {
                feedback_linearized(x, p, policy, kp, kd)
            }
        }
    }
}

/// Exact linearization: cancels drift, curvature of the desired outputs, and
/// the momentum-rate coupling, then applies PD in the linear coordinates.
fn feedback_linearized(
    x: &RobotState,
    p: &ModelParams,
    policy: &MlpParams,
    kp: f64,
    kd: f64,
) -> Result<[f64; 2]> {
    let z = [x.q[0], momentum(x, p)];
    // Outputs with second derivatives: lift z as jet variables under the
    // jet-valued weights, so the Jacobian entries carry their own z-tangents.
    let zj = [Jet::<f64, 2>::variable(z[0], 0), Jet::<f64, 2>::variable(z[1], 1)];
    let wj: Vec<Jet<f64, 2>> = policy.w.iter().map(|&v| Jet::constant(v)).collect();
    let (ydj, jacj) = desired_outputs(zj, &policy.arch, &wj);

    let zdot = [x.dq[0], -dv_dqu_s(x.q, p)];
    // Momentum-rate derivative along the trajectory via configuration jets.
    let qj = [
        Jet::<f64, 3>::variable(x.q[0], 0),
        Jet::<f64, 3>::variable(x.q[1], 1),
        Jet::<f64, 3>::variable(x.q[2], 2),
    ];
    let dv = dv_dqu_s(qj, p);
    let vz2_dot = -(dv.du[0] * x.dq[0] + dv.du[1] * x.dq[1] + dv.du[2] * x.dq[2]);

    let terms = crate::dynamics::dynamics_terms(x, p)?;
    let minv = inv3(&terms.mass).ok_or(Error::Singular {
        ctx: "feedback_linearized",
        detail: "mass matrix".into(),
    })?;
    let damp = crate::dynamics::damping_force(x.dq, p);
    // Unforced acceleration M^-1 (damping - C dq - G).
    let mut rhs = [0.0; 3];
    for i in 0..3 {
        rhs[i] = damp[i] - terms.gravity[i];
        for j in 0..3 {
            rhs[i] -= terms.coriolis[i][j] * x.dq[j];
        }
    }
    let mut a_free = [0.0; 3];
    for i in 0..3 {
        for j in 0..3 {
            a_free[i] += minv[i][j] * rhs[j];
        }
    }

    let mut v = [0.0; 2];
    let mut b_free = [0.0; 2];
    let mut d = [[0.0; 2]; 2];
    for i in 0..2 {
        let jac_i = [jacj[i][0].re, jacj[i][1].re];
        let y = x.q[1 + i] - ydj[i].re;
        let ydot = x.dq[1 + i] - jac_i[0] * zdot[0] - jac_i[1] * zdot[1];
        v[i] = -kp * y - kd * ydot;
        // curvature term (d/dt J) zdot, with d/dt J = (dJ/dz) zdot
        let mut quad = 0.0;
        for j in 0..2 {
            let dj_dt = jacj[i][j].du[0] * zdot[0] + jacj[i][j].du[1] * zdot[1];
            quad += dj_dt * zdot[j];
        }
        b_free[i] = a_free[1 + i] - jac_i[0] * a_free[0] - jac_i[1] * vz2_dot - quad;
        for k in 0..2 {
            d[i][k] = minv[1 + i][1 + k] - jac_i[0] * minv[0][1 + k];
        }
    }
    let det = d[0][0] * d[1][1] - d[0][1] * d[1][0];
    let scale = d.iter().flatten().fold(0.0f64, |a, &x| a.max(x.abs()));
    if det.abs() < 1e-12 * scale.max(1.0) * scale.max(1.0) {
        return Err(Error::Singular {
            ctx: "feedback_linearized",
            detail: format!("decoupling matrix det {det:.3e}"),
        });
    }
    let r = [v[0] - b_free[0], v[1] - b_free[1]];
    Ok([
        (d[1][1] * r[0] - d[0][1] * r[1]) / det,
        (-d[1][0] * r[0] + d[0][0] * r[1]) / det,
    ])
}

/// Fixed-step RK4 under constant torque, without guard or fall handling;
/// the bare integrator for conservation checks and benchmarks.
pub fn integrate_fixed(
    x0: &RobotState,
    u: [f64; 2],
    model: &ModelParams,
    horizon: f64,
    dt: f64,
) -> Result<RobotState> {
    if !(horizon > 0.0 && dt > 0.0) {
        return Err(Error::InvalidConfig("horizon and step must be positive".into()));
    }
    let n = (horizon / dt).round() as usize;
    let mut x = SimState { rs: *x0, w_u: 0.0, w_damp: 0.0 };
    for _ in 0..n {
        x = rk4(&x, u, dt, model)?;
    }
    Ok(x.rs)
}

const GUARD_ARM_HEIGHT: f64 = 1e-3;
const GUARD_TOL: f64 = 1e-8;
const FALL_TORSO: f64 = std::f64::consts::PI / 3.0;

fn log_row(t: f64, x: &SimState, u: [f64; 2], event: u8, p: &ModelParams) -> LogRow {
    LogRow {
        t,
        q: x.rs.q,
        dq: x.rs.dq,
        z: [x.rs.q[0], momentum(&x.rs, p)],
        u,
        swing_z: guard_value(x.rs.q, p),
        event,
    }
}

/// Runs the closed loop from `x0` until completion, fall, or timeout.
pub fn rollout(
    x0: &RobotState,
    model: &ModelParams,
    policy: &MlpParams,
    cfg: &SimConfig,
) -> Result<RolloutResult> {
    rollout_with_models(x0, model, model, policy, cfg)
}

/// Closed loop with separate plant and controller models: the physics
/// integrates `plant`, while the control law, the held outputs, and the
/// logged reduced coordinates all use `ctrl_model` (the controller cannot
/// see the true plant). The models must share the link geometry.
pub fn rollout_with_models(
    x0: &RobotState,
    plant: &ModelParams,
    ctrl_model: &ModelParams,
    policy: &MlpParams,
    cfg: &SimConfig,
) -> Result<RolloutResult> {
    let ticks = cfg.ticks()?;
    if cfg.max_time <= 0.0 || cfg.max_steps == 0 {
        return Err(Error::InvalidConfig("horizon must be positive".into()));
    }
    if !x0.is_finite() {
        return Err(Error::NonFinite("rollout initial state"));
    }
    let dt = cfg.integrator_step;
    let ctrl_period = 1.0 / cfg.control_rate_hz;

    if (plant.leg_length - ctrl_model.leg_length).abs() > 1e-12
        || (plant.torso_length - ctrl_model.torso_length).abs() > 1e-12
    {
        return Err(Error::InvalidConfig(
            "plant and controller models must share link geometry".into(),
        ));
    }
    let mut x = SimState { rs: *x0, w_u: 0.0, w_damp: 0.0 };
    let mut ctl = Controller::new(cfg.law);
    let mut log = TrajectoryLog::default();
    let mut steps: Vec<StepStats> = Vec::new();
    let mut segments: Vec<SegmentEnergy> = Vec::new();

    let mut armed = guard_value(x.rs.q, plant) > GUARD_ARM_HEIGHT;
    let mut seg_t0 = 0.0;
    let mut seg_e0 = total_energy(&x.rs, plant);
    let mut seg_wu0 = 0.0;
    let mut seg_wd0 = 0.0;

    let outcome = 'outer: loop {
        for tick in 0usize.. {
            let t = tick as f64 * ctrl_period;
            if !x.rs.is_finite() || x.rs.dq.iter().any(|v| v.abs() > 1e3) {
                return Err(Error::NonFinite("rollout state"));
            }
            let kin = kinematics(x.rs.q, plant);
            if kin.torso_angle.abs() > FALL_TORSO {
                break 'outer Outcome::Fell { t, reason: "torso pitch limit".into() };
            }
            if kin.hip[1] < 0.5 * plant.leg_length {
                break 'outer Outcome::Fell { t, reason: "hip collapsed".into() };
            }
            if t >= cfg.max_time {
                break 'outer Outcome::TimedOut { steps: steps.len() };
            }
            if tick % ticks.pol_every == 0 {
                ctl.refresh(&x.rs, ctrl_model, policy);
            }
            let mut u = ctl.control(&x.rs, ctrl_model, policy)?;
            if tick % ticks.pol_every == 0 {
                log.rows.push(log_row(t, &x, u, 0, ctrl_model));
            }

            for sub in 0..ticks.n_sub {
                let t_sub = t + sub as f64 * dt;
                let x_prev = x;
                let pz_prev = guard_value(x_prev.rs.q, plant);
                x = rk4(&x_prev, u, dt, plant)?;
                let pz = guard_value(x.rs.q, plant);
                if !armed {
                    if pz > GUARD_ARM_HEIGHT {
                        armed = true;
                    }
                    continue;
                }
                if !(pz_prev > 0.0 && pz <= 0.0) {
                    continue;
                }

                // Bisect the substep down to the guard.
                let (mut lo, mut hi) = (0.0f64, 1.0f64);
                let mut x_minus = x;
                let mut pz_hit = pz;
                for _ in 0..200 {
                    if pz_hit.abs() < GUARD_TOL {
                        break;
                    }
                    let mid = 0.5 * (lo + hi);
                    let trial = rk4(&x_prev, u, mid * dt, plant)?;
                    let pz_mid = guard_value(trial.rs.q, plant);
                    if pz_mid > 0.0 {
                        lo = mid;
                    } else {
                        hi = mid;
                    }
                    x_minus = trial;
                    pz_hit = pz_mid;
                }
                if pz_hit.abs() > GUARD_TOL {
                    return Err(Error::Other(format!(
                        "guard bisection stalled at p_z {pz_hit:.3e} (t {t_sub:.4})"
                    )));
                }
                if guard_velocity(&x_minus.rs, plant) >= 0.0 {
                    // Grazing contact without approach; keep integrating.
                    armed = false;
                    continue;
                }
                if kinematics(x_minus.rs.q, plant).swing_foot[0] < cfg.step_gate_x {
                    // Scuff while the legs pass each other; not a step.
                    armed = false;
                    continue;
                }
                let lambda = 0.5 * (lo + hi);
                let t_imp = t_sub + lambda * dt;

                segments.push(SegmentEnergy {
                    t0: seg_t0,
                    t1: t_imp,
                    e_start: seg_e0,
                    e_end: total_energy(&x_minus.rs, plant),
                    work_actuation: x_minus.w_u - seg_wu0,
                    work_damping: x_minus.w_damp - seg_wd0,
                });
                log.rows.push(log_row(t_imp, &x_minus, u, 1, ctrl_model));

                let imp = impact_map(&x_minus.rs, plant)?;
                let (eta_post, _) = phi(&imp.state, ctrl_model, policy);
                steps.push(StepStats {
                    index: steps.len(),
                    t_touchdown: t_imp,
                    duration: t_imp - seg_t0,
                    step_length: kinematics(x_minus.rs.q, plant).swing_foot[0],
                    mean_speed: kinematics(x_minus.rs.q, plant).swing_foot[0]
                        / (t_imp - seg_t0).max(1e-9),
                    impact_impulse: imp.impulse,
                    impact_loss: imp.energy_loss,
                    post_impact_error: eta_post,
                });

                x = SimState { rs: imp.state, w_u: x_minus.w_u, w_damp: x_minus.w_damp };
                armed = false;
                seg_t0 = t_imp;
                seg_e0 = total_energy(&x.rs, plant);
                seg_wu0 = x.w_u;
                seg_wd0 = x.w_damp;

                // Event-triggered refresh at the post-impact state.
                ctl.refresh(&x.rs, ctrl_model, policy);
                u = ctl.control(&x.rs, ctrl_model, policy)?;
                log.rows.push(log_row(t_imp, &x, u, 2, ctrl_model));

                if steps.len() >= cfg.max_steps {
                    break 'outer Outcome::Completed { steps: steps.len() };
                }
                x = rk4(&x, u, (1.0 - lambda) * dt, plant)?;
            }
        }
        unreachable!("tick loop only exits through labeled breaks");
    };

    // Close the trailing segment so energy audits cover the whole rollout.
    if !matches!(outcome, Outcome::Completed { .. }) {
        segments.push(SegmentEnergy {
            t0: seg_t0,
            t1: log.rows.last().map_or(seg_t0, |r| r.t),
            e_start: seg_e0,
            e_end: total_energy(&x.rs, plant),
            work_actuation: x.w_u - seg_wu0,
            work_damping: x.w_damp - seg_wd0,
        });
    }

    Ok(RolloutResult { log, steps, segments, outcome })
}
