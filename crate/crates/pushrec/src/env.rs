//! Planar balance-recovery environment.
//!
//! A pinned 3-link point-mass chain (stance leg, torso, arm) plus a kinematic
//! swing leg. The chain is actuated by joint-level PD control at 50 Hz with
//! physics substeps at 200 Hz, disturbed by torso push impulses, and can brace
//! a hand against a one-sided spring-damper wall. Recovery stepping is modeled
//! as a pivot transfer: when the swing leg is planted past a tilt-dependent
//! threshold, the support point relocates.
//!
//! Dynamics are formulated in absolute link angles theta = (q1, q1+q2,
//! q1+q2+q3), where the point-mass chain has the closed forms
//!   M[j][k] = mu[max(j,k)] * l_j * l_k * cos(theta_j - theta_k)
//!   c[j]    = sum_k mu[max(j,k)] * l_j * l_k * sin(theta_j - theta_k) * w_k^2
//!   G[j]    = -g * mu[j] * l_j * sin(theta_j)
//! with mu[j] the total mass at or beyond link j. Integration is semi-implicit
//! Euler.

use std::collections::VecDeque;
use std::str::FromStr;

use rand::Rng;

#[derive(Debug, thiserror::Error)]
pub enum EnvError {
    #[error("invalid parameter `{field}`: {reason}")]
    InvalidParam { field: &'static str, reason: String },
    #[error("simulation diverged at control step {step}")]
    Diverged { step: u32 },
    #[error("unknown mismatch spec `{0}` (expected nominal|friction|latency|mass|compound)")]
    UnknownMismatch(String),
}

/// Episode horizon in seconds; 500 control steps at 50 Hz.
pub const EPISODE_SECONDS: f64 = 10.0;
/// Fall thresholds: torso tilt beyond 45 degrees or hip dropping below 0.3 m.
pub const TILT_LIMIT: f64 = 0.785;
pub const MIN_HIP_HEIGHT: f64 = 0.3;
/// Hand radius used for wall penetration.
const HAND_RADIUS: f64 = 0.02;
/// Foot contact reads zero for this long after a pivot transfer.
const FLIGHT_TIME: f64 = 0.1;
/// Regularization speed for the tangential Coulomb model.
const FRICTION_V_EPS: f64 = 0.01;
/// Tilt band that classifies a brace as harmful rather than useful.
const HARMFUL_TILT: f64 = 0.05;

#[derive(Debug, Clone, PartialEq)]
pub struct EnvParams {
    /// Link lengths: stance leg, torso, arm (m).
    pub l1: f64,
    pub l2: f64,
    pub l3: f64,
    /// Point masses at the distal end of each link (kg).
    pub m1: f64,
    pub m2: f64,
    pub m3: f64,
    pub gravity: f64,
    pub dt_phys: f64,
    pub dt_ctrl: f64,
    pub kp: f64,
    pub kd: f64,
    pub tau_max: f64,
    /// Default pose for the three dynamic joints (rad).
    pub q_def: [f64; 3],
    /// Action scale alpha (rad): joint targets are q_def + alpha * a.
    pub action_scale: f64,
    pub wall_present: bool,
    pub wall_x: f64,
    pub wall_k: f64,
    pub wall_c: f64,
    /// Wall tangential friction coefficient.
    pub friction_mu: f64,
    pub torso_mass_scale: f64,
    /// Actuation latency (s), applied as a torque-command delay queue.
    pub latency: f64,
    /// Candidate contact-region heights on the wall (m).
    pub contact_heights: Vec<f64>,
    /// Distance ceiling for contact-region observations (m).
    pub d_max: f64,
    /// Stepping: swing length, tilt threshold, swing-angle threshold,
    /// transfer cooldown, swing rate limit.
    pub l_step: f64,
    pub phi_step: f64,
    pub swing_threshold: f64,
    pub transfer_cooldown: f64,
    pub swing_rate: f64,
    /// Reset pose noise half-width (rad); 0 disables.
    pub reset_noise: f64,
    /// Training push force range (N).
    pub push_force_min: f64,
    pub push_force_max: f64,
    /// Push onset window (s).
    pub push_onset_min: f64,
    pub push_onset_max: f64,
}

impl Default for EnvParams {
    fn default() -> Self {
        EnvParams {
            l1: 0.5,
            l2: 0.5,
            l3: 0.4,
            m1: 2.0,
            m2: 4.0,
            m3: 0.5,
            gravity: 9.81,
            dt_phys: 0.005,
            dt_ctrl: 0.02,
            kp: 60.0,
            kd: 2.0,
            tau_max: 40.0,
            q_def: [0.0, 0.0, -0.3],
            action_scale: 0.25,
            wall_present: false,
            wall_x: 0.6,
            wall_k: 2000.0,
            wall_c: 50.0,
            friction_mu: 0.8,
            torso_mass_scale: 1.0,
            latency: 0.0,
            contact_heights: vec![0.4, 0.7, 1.0, 1.3],
            d_max: 3.0,
            l_step: 0.6,
            phi_step: 0.15,
            swing_threshold: 0.3,
            transfer_cooldown: 0.2,
            swing_rate: 6.0,
            reset_noise: 0.02,
            push_force_min: 10.0,
            push_force_max: 40.0,
            push_onset_min: 1.0,
            push_onset_max: 3.0,
        }
    }
}

macro_rules! require {
    ($cond:expr, $field:literal, $reason:expr) => {
        if !($cond) {
            return Err(EnvError::InvalidParam {
                field: $field,
                reason: $reason.to_string(),
            });
        }
    };
}

impl EnvParams {
    pub fn validate(&self) -> Result<(), EnvError> {
        require!(self.l1 > 0.0, "l1", "must be > 0");
        require!(self.l2 > 0.0, "l2", "must be > 0");
        require!(self.l3 > 0.0, "l3", "must be > 0");
        require!(self.m1 > 0.0, "m1", "must be > 0");
        require!(self.m2 > 0.0, "m2", "must be > 0");
        require!(self.m3 > 0.0, "m3", "must be > 0");
        require!(self.kp > 0.0, "kp", "must be > 0");
        require!(self.kd > 0.0, "kd", "must be > 0");
        require!(self.tau_max > 0.0, "tau_max", "must be > 0");
        require!(self.wall_k > 0.0, "wall_k", "must be > 0");
        require!(self.wall_c >= 0.0, "wall_c", "must be >= 0");
        require!(self.action_scale > 0.0, "action_scale", "must be > 0");
        require!(self.dt_phys > 0.0, "dt_phys", "must be > 0");
        require!(
            self.dt_ctrl >= self.dt_phys,
            "dt_ctrl",
            "must be >= dt_phys"
        );
        let ratio = self.dt_ctrl / self.dt_phys;
        require!(
            (ratio - ratio.round()).abs() < 1e-9,
            "dt_ctrl",
            "must be an integer multiple of dt_phys"
        );
        require!(self.friction_mu >= 0.0, "friction_mu", "must be >= 0");
        require!(self.latency >= 0.0, "latency", "must be >= 0");
        require!(
            self.torso_mass_scale > 0.0,
            "torso_mass_scale",
            "must be > 0"
        );
        require!(self.d_max > 0.0, "d_max", "must be > 0");
        require!(
            !self.contact_heights.is_empty(),
            "contact_heights",
            "must be non-empty"
        );
        require!(self.l_step > 0.0, "l_step", "must be > 0");
        require!(self.phi_step > 0.0, "phi_step", "must be > 0");
        require!(self.swing_threshold > 0.0, "swing_threshold", "must be > 0");
        require!(
            self.transfer_cooldown >= 0.0,
            "transfer_cooldown",
            "must be >= 0"
        );
        require!(self.swing_rate > 0.0, "swing_rate", "must be > 0");
        require!(self.reset_noise >= 0.0, "reset_noise", "must be >= 0");
        require!(
            self.push_force_min >= 0.0 && self.push_force_max >= self.push_force_min,
            "push_force_min",
            "need 0 <= push_force_min <= push_force_max"
        );
        require!(
            self.push_onset_max >= self.push_onset_min && self.push_onset_min >= 0.0,
            "push_onset_min",
            "need 0 <= push_onset_min <= push_onset_max"
        );
        Ok(())
    }

    pub fn substeps(&self) -> usize {
        (self.dt_ctrl / self.dt_phys).round() as usize
    }

    pub fn delay_queue_len(&self) -> usize {
        (self.latency / self.dt_phys).round() as usize
    }

    /// Torso point mass including the mismatch scale.
    pub fn m2_effective(&self) -> f64 {
        self.m2 * self.torso_mass_scale
    }

    pub fn episode_steps(&self) -> u32 {
        (EPISODE_SECONDS / self.dt_ctrl).round() as u32
    }

    /// Hip height in the default pose; reference for the height reward kernel.
    pub fn default_hip_height(&self) -> f64 {
        self.l1 * self.q_def[0].cos()
    }

    pub fn num_contact_regions(&self) -> usize {
        self.contact_heights.len()
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PushEvent {
    /// Magnitude (N).
    pub force: f64,
    /// Planar direction sign (+x or -x).
    pub direction: f64,
    /// Onset time (s).
    pub t_onset: f64,
    /// Duration (s).
    pub duration: f64,
}

impl PushEvent {
    pub fn none() -> Self {
        PushEvent {
            force: 0.0,
            direction: 1.0,
            t_onset: 0.0,
            duration: 0.02,
        }
    }

    pub fn validate(&self) -> Result<(), EnvError> {
        require!(self.force >= 0.0, "push.force", "must be >= 0");
        require!(self.duration > 0.0, "push.duration", "must be > 0");
        require!(self.t_onset >= 0.0, "push.t_onset", "must be >= 0");
        require!(
            self.direction == 1.0 || self.direction == -1.0,
            "push.direction",
            "must be +1 or -1"
        );
        Ok(())
    }
}

/// Sample a push event. Training pushes last one control step; evaluation
/// pushes last 0.1 s.
pub fn sample_push<R: Rng>(rng: &mut R, params: &EnvParams, eval: bool) -> PushEvent {
    let force = if params.push_force_max > params.push_force_min {
        rng.gen_range(params.push_force_min..params.push_force_max)
    } else {
        params.push_force_min
    };
    sample_push_with_force(rng, params, force, eval)
}

/// Sample direction and onset for a fixed force magnitude.
pub fn sample_push_with_force<R: Rng>(
    rng: &mut R,
    params: &EnvParams,
    force: f64,
    eval: bool,
) -> PushEvent {
    let direction = if rng.gen_range(0..2) == 0 { 1.0 } else { -1.0 };
    let t_onset = if params.push_onset_max > params.push_onset_min {
        rng.gen_range(params.push_onset_min..params.push_onset_max)
    } else {
        params.push_onset_min
    };
    PushEvent {
        force,
        direction,
        t_onset,
        duration: if eval { 0.1 } else { params.dt_ctrl },
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum MismatchSpec {
    Nominal,
    Friction,
    Latency,
    Mass,
    Compound,
}

impl MismatchSpec {
    pub const ALL: [MismatchSpec; 5] = [
        MismatchSpec::Nominal,
        MismatchSpec::Friction,
        MismatchSpec::Latency,
        MismatchSpec::Mass,
        MismatchSpec::Compound,
    ];

    pub fn name(&self) -> &'static str {
        match self {
            MismatchSpec::Nominal => "nominal",
            MismatchSpec::Friction => "friction",
            MismatchSpec::Latency => "latency",
            MismatchSpec::Mass => "mass",
            MismatchSpec::Compound => "compound",
        }
    }
}

impl FromStr for MismatchSpec {
    type Err = EnvError;
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "nominal" => Ok(MismatchSpec::Nominal),
            "friction" => Ok(MismatchSpec::Friction),
            "latency" => Ok(MismatchSpec::Latency),
            "mass" => Ok(MismatchSpec::Mass),
            "compound" => Ok(MismatchSpec::Compound),
            other => Err(EnvError::UnknownMismatch(other.to_string())),
        }
    }
}

/// Zero-shot dynamics perturbations: low friction, 30 ms latency, +25% torso
/// mass, or all three at once.
pub fn apply_mismatch(params: &EnvParams, spec: MismatchSpec) -> EnvParams {
    let mut p = params.clone();
    match spec {
        MismatchSpec::Nominal => {}
        MismatchSpec::Friction => p.friction_mu = 0.3,
        MismatchSpec::Latency => p.latency = 0.030,
        MismatchSpec::Mass => p.torso_mass_scale = 1.25,
        MismatchSpec::Compound => {
            p.friction_mu = 0.3;
            p.latency = 0.030;
            p.torso_mass_scale = 1.25;
        }
    }
    p
}

#[derive(Debug, Clone, PartialEq)]
pub struct RewardConfig {
    pub w_phi: f64,
    pub sigma_phi: f64,
    pub w_height: f64,
    pub sigma_height: f64,
    pub alive_bonus: f64,
    pub w_useful: f64,
    pub w_harmful: f64,
    pub lambda_action: f64,
    pub lambda_rate: f64,
    pub w_term: f64,
}

impl Default for RewardConfig {
    fn default() -> Self {
        RewardConfig {
            w_phi: 1.0,
            sigma_phi: 0.3,
            w_height: 0.5,
            sigma_height: 0.1,
            alive_bonus: 0.2,
            w_useful: 0.5,
            w_harmful: 0.5,
            lambda_action: 0.01,
            lambda_rate: 0.05,
            w_term: 200.0,
        }
    }
}

impl RewardConfig {
    pub fn validate(&self) -> Result<(), EnvError> {
        require!(self.w_phi >= 0.0, "w_phi", "must be >= 0");
        require!(self.sigma_phi > 0.0, "sigma_phi", "must be > 0");
        require!(self.w_height >= 0.0, "w_height", "must be >= 0");
        require!(self.sigma_height > 0.0, "sigma_height", "must be > 0");
        require!(self.alive_bonus >= 0.0, "alive_bonus", "must be >= 0");
        require!(self.w_useful >= 0.0, "w_useful", "must be >= 0");
        require!(self.w_harmful >= 0.0, "w_harmful", "must be >= 0");
        require!(self.lambda_action >= 0.0, "lambda_action", "must be >= 0");
        require!(self.lambda_rate >= 0.0, "lambda_rate", "must be >= 0");
        require!(self.w_term >= 0.0, "w_term", "must be >= 0");
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct RewardTerms {
    pub upright: f64,
    pub contact: f64,
    pub regularization: f64,
    pub termination: f64,
    pub total: f64,
}

/// Per-step reward breakdown.
#[allow(clippy::too_many_arguments)]
pub fn reward(
    phi: f64,
    hip_height: f64,
    action: &[f64; 4],
    prev_action: &[f64; 4],
    useful_contact: bool,
    harmful_contact: bool,
    terminated: bool,
    params: &EnvParams,
    cfg: &RewardConfig,
) -> RewardTerms {
    let tilt_err = phi / cfg.sigma_phi;
    let height_err = (hip_height - params.default_hip_height()) / cfg.sigma_height;
    let upright = cfg.w_phi * (-tilt_err * tilt_err).exp()
        + cfg.w_height * (-height_err * height_err).exp()
        + cfg.alive_bonus;
    let contact = cfg.w_useful * f64::from(useful_contact as u8)
        - cfg.w_harmful * f64::from(harmful_contact as u8);
    let mut a2 = 0.0;
    let mut da2 = 0.0;
    for i in 0..4 {
        a2 += action[i] * action[i];
        let d = action[i] - prev_action[i];
        da2 += d * d;
    }
    let regularization = -cfg.lambda_action * a2 - cfg.lambda_rate * da2;
    let termination = if terminated { -cfg.w_term } else { 0.0 };
    RewardTerms {
        upright,
        contact,
        regularization,
        termination,
        total: upright + contact + regularization + termination,
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ContactClass {
    None,
    Useful,
    Harmful,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct WallContact {
    /// Planar force applied at the hand.
    pub force: [f64; 2],
    pub class: ContactClass,
}

impl WallContact {
    fn none() -> Self {
        WallContact {
            force: [0.0, 0.0],
            class: ContactClass::None,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct EnvState {
    /// Support point (x, z).
    pub pivot: [f64; 2],
    /// Dynamic joint angles: q1 world angle of the stance link from vertical,
    /// q2 and q3 relative.
    pub q: [f64; 3],
    pub dq: [f64; 3],
    /// Kinematic swing-leg angle (absolute, from vertical) and its target.
    pub q4: f64,
    pub q4_target: f64,
    pub q4_vel: f64,
    pub t: f64,
    pub step_count: u32,
    /// Seconds since the last pivot transfer (infinity if none yet).
    pub time_since_transfer: f64,
    pub push: PushEvent,
    /// Delayed torque commands at physics rate.
    pub delay_queue: VecDeque<[f64; 3]>,
    pub prev_action: [f64; 4],
    /// Contact flags accumulated over the most recent control step.
    pub useful_contact: bool,
    pub harmful_contact: bool,
    /// Any nonzero wall force during the most recent control step.
    pub wall_contact_active: bool,
    pub terminated: bool,
}

#[derive(Debug, Clone, Copy)]
pub struct StepOutcome {
    pub reward: RewardTerms,
    pub terminated: bool,
    pub truncated: bool,
}

// ---------------------------------------------------------------------------
// Kinematics helpers
// ---------------------------------------------------------------------------

/// Absolute link angles from joint angles.
pub fn link_angles(q: &[f64; 3]) -> [f64; 3] {
    [q[0], q[0] + q[1], q[0] + q[1] + q[2]]
}

pub fn link_rates(dq: &[f64; 3]) -> [f64; 3] {
    [dq[0], dq[0] + dq[1], dq[0] + dq[1] + dq[2]]
}

/// World positions of the three point masses (hip, shoulder, hand).
pub fn mass_positions(pivot: &[f64; 2], q: &[f64; 3], params: &EnvParams) -> [[f64; 2]; 3] {
    let th = link_angles(q);
    let ls = [params.l1, params.l2, params.l3];
    let mut out = [[0.0; 2]; 3];
    let mut x = pivot[0];
    let mut z = pivot[1];
    for i in 0..3 {
        x += ls[i] * th[i].sin();
        z += ls[i] * th[i].cos();
        out[i] = [x, z];
    }
    out
}

pub fn mass_velocities(q: &[f64; 3], dq: &[f64; 3], params: &EnvParams) -> [[f64; 2]; 3] {
    let th = link_angles(q);
    let w = link_rates(dq);
    let ls = [params.l1, params.l2, params.l3];
    let mut out = [[0.0; 2]; 3];
    let mut vx = 0.0;
    let mut vz = 0.0;
    for i in 0..3 {
        vx += ls[i] * w[i] * th[i].cos();
        vz -= ls[i] * w[i] * th[i].sin();
        out[i] = [vx, vz];
    }
    out
}

pub fn hip_position(state: &EnvState, params: &EnvParams) -> [f64; 2] {
    [
        state.pivot[0] + params.l1 * state.q[0].sin(),
        state.pivot[1] + params.l1 * state.q[0].cos(),
    ]
}

pub fn hip_velocity(state: &EnvState, params: &EnvParams) -> [f64; 2] {
    [
        params.l1 * state.dq[0] * state.q[0].cos(),
        -params.l1 * state.dq[0] * state.q[0].sin(),
    ]
}

pub fn hand_position(state: &EnvState, params: &EnvParams) -> [f64; 2] {
    mass_positions(&state.pivot, &state.q, params)[2]
}

pub fn hand_velocity(state: &EnvState, params: &EnvParams) -> [f64; 2] {
    mass_velocities(&state.q, &state.dq, params)[2]
}

/// Torso tilt from vertical: absolute angle of the torso link.
pub fn tilt(state: &EnvState) -> f64 {
    state.q[0] + state.q[1]
}

pub fn tilt_rate(state: &EnvState) -> f64 {
    state.dq[0] + state.dq[1]
}

pub fn foot_contact(state: &EnvState) -> f64 {
    if state.time_since_transfer < FLIGHT_TIME {
        0.0
    } else {
        1.0
    }
}

// ---------------------------------------------------------------------------
// Dynamics
// ---------------------------------------------------------------------------

/// Gravity part of the generalized forces in absolute angles: dV/dtheta.
pub fn gravity_generalized(theta: &[f64; 3], params: &EnvParams) -> [f64; 3] {
    let ls = [params.l1, params.l2, params.l3];
    let ms = [params.m1, params.m2_effective(), params.m3];
    let mu = [ms[0] + ms[1] + ms[2], ms[1] + ms[2], ms[2]];
    let mut g = [0.0; 3];
    for j in 0..3 {
        g[j] = -params.gravity * mu[j] * ls[j] * theta[j].sin();
    }
    g
}

/// PD torque per actuated joint, clipped to the torque limit.
pub fn pd_torque(q_ref: &[f64; 3], q: &[f64; 3], dq: &[f64; 3], params: &EnvParams) -> [f64; 3] {
    let mut tau = [0.0; 3];
    for i in 0..3 {
        tau[i] = (params.kp * (q_ref[i] - q[i]) - params.kd * dq[i])
            .clamp(-params.tau_max, params.tau_max);
    }
    tau
}

fn solve3(m: &[[f64; 3]; 3], b: &[f64; 3]) -> [f64; 3] {
    // Gaussian elimination with partial pivoting. The mass matrix of a
    // point-mass chain with positive masses is positive definite.
    let mut a = *m;
    let mut x = *b;
    for col in 0..3 {
        let mut piv = col;
        for r in col + 1..3 {
            if a[r][col].abs() > a[piv][col].abs() {
                piv = r;
            }
        }
        assert!(a[piv][col] != 0.0, "singular mass matrix");
        if piv != col {
            a.swap(piv, col);
            x.swap(piv, col);
        }
        for r in col + 1..3 {
            let f = a[r][col] / a[col][col];
            for c in col..3 {
                a[r][c] -= f * a[col][c];
            }
            x[r] -= f * x[col];
        }
    }
    for col in (0..3).rev() {
        for r in 0..col {
            let f = a[r][col] / a[col][col];
            x[r] -= f * x[col];
        }
        x[col] /= a[col][col];
    }
    x
}

/// One semi-implicit Euler substep of the pinned chain.
///
/// `tau_rel` are relative joint torques; `f_torso` acts at the torso mass,
/// `f_hand` at the hand. Returns updated (q, dq) in joint coordinates.
pub fn dynamics_substep(
    q: &[f64; 3],
    dq: &[f64; 3],
    params: &EnvParams,
    tau_rel: &[f64; 3],
    f_torso: &[f64; 2],
    f_hand: &[f64; 2],
    dt: f64,
) -> ([f64; 3], [f64; 3]) {
    let th = link_angles(q);
    let w = link_rates(dq);
    let ls = [params.l1, params.l2, params.l3];
    let ms = [params.m1, params.m2_effective(), params.m3];
    let mu = [ms[0] + ms[1] + ms[2], ms[1] + ms[2], ms[2]];

    let mut mm = [[0.0; 3]; 3];
    for j in 0..3 {
        for k in 0..3 {
            let mjk = mu[j.max(k)];
            mm[j][k] = mjk * ls[j] * ls[k] * (th[j] - th[k]).cos();
        }
    }

    // Velocity-product forces and gravity.
    let mut rhs = [0.0; 3];
    for j in 0..3 {
        let mut cval = 0.0;
        for k in 0..3 {
            cval += mu[j.max(k)] * ls[j] * ls[k] * (th[j] - th[k]).sin() * w[k] * w[k];
        }
        rhs[j] = -cval;
    }
    let grav = gravity_generalized(&th, params);
    for j in 0..3 {
        rhs[j] -= grav[j];
    }

    // Relative joint torques map to absolute coordinates as reaction pairs.
    rhs[0] += tau_rel[0] - tau_rel[1];
    rhs[1] += tau_rel[1] - tau_rel[2];
    rhs[2] += tau_rel[2];

    // External forces via the point Jacobians.
    if f_torso[0] != 0.0 || f_torso[1] != 0.0 {
        rhs[0] += ls[0] * (th[0].cos() * f_torso[0] - th[0].sin() * f_torso[1]);
        rhs[1] += ls[1] * (th[1].cos() * f_torso[0] - th[1].sin() * f_torso[1]);
    }
    if f_hand[0] != 0.0 || f_hand[1] != 0.0 {
        for j in 0..3 {
            rhs[j] += ls[j] * (th[j].cos() * f_hand[0] - th[j].sin() * f_hand[1]);
        }
    }

    let th_acc = solve3(&mm, &rhs);

    // Semi-implicit Euler in absolute coordinates, then back to joint space.
    let w_new = [
        w[0] + dt * th_acc[0],
        w[1] + dt * th_acc[1],
        w[2] + dt * th_acc[2],
    ];
    let th_new = [
        th[0] + dt * w_new[0],
        th[1] + dt * w_new[1],
        th[2] + dt * w_new[2],
    ];
    (
        [th_new[0], th_new[1] - th_new[0], th_new[2] - th_new[1]],
        [w_new[0], w_new[1] - w_new[0], w_new[2] - w_new[1]],
    )
}

/// Wall reaction at the hand: one-sided spring-damper normal force plus
/// regularized Coulomb friction along the wall, with classification of the
/// brace as useful (opposes the fall) or harmful (brace while nearly upright).
pub fn wall_contact(state: &EnvState, params: &EnvParams) -> WallContact {
    if !params.wall_present {
        return WallContact::none();
    }
    let hand = hand_position(state, params);
    let penetration = hand[0] - (params.wall_x - HAND_RADIUS);
    if penetration <= 0.0 {
        return WallContact::none();
    }
    let v = hand_velocity(state, params);
    let fn_mag = (params.wall_k * penetration + params.wall_c * v[0]).max(0.0);
    if fn_mag == 0.0 {
        return WallContact::none();
    }
    let ft = -params.friction_mu * fn_mag * (v[1] / FRICTION_V_EPS).tanh();
    let phi = tilt(state);
    let wall_dir = if params.wall_x >= state.pivot[0] {
        1.0
    } else {
        -1.0
    };
    let class = if phi.abs() <= HARMFUL_TILT {
        ContactClass::Harmful
    } else if phi * wall_dir > 0.0 {
        ContactClass::Useful
    } else {
        ContactClass::None
    };
    WallContact {
        force: [-fn_mag, ft],
        class,
    }
}

/// Relocate the support point when the swing leg is planted past the tilt
/// threshold. The pivot moves horizontally by l_step*sin(q4) and drops or
/// rises so the hip's world position is preserved exactly; the stance and
/// swing legs swap roles.
pub fn pivot_transfer(state: &mut EnvState, params: &EnvParams) -> bool {
    let phi = tilt(state);
    if phi.abs() <= params.phi_step
        || state.q4.signum() != phi.signum()
        || state.q4.abs() <= params.swing_threshold
        || state.time_since_transfer < params.transfer_cooldown
    {
        return false;
    }

    let hip = hip_position(state, params);
    let hip_v = hip_velocity(state, params);
    let new_pivot_x = state.pivot[0] + params.l_step * state.q4.sin();
    let dx = hip[0] - new_pivot_x;
    if dx.abs() >= params.l1 {
        // swing foot landed beyond leg reach; no transfer
        return false;
    }

    let old_theta = link_angles(&state.q);
    let old_w = link_rates(&state.dq);

    let theta1 = (dx / params.l1).asin();
    let new_pivot_z = hip[1] - params.l1 * theta1.cos();
    // tangential component of the hip velocity in the new stance frame
    let w1 = (hip_v[0] * theta1.cos() - hip_v[1] * theta1.sin()) / params.l1;

    state.pivot = [new_pivot_x, new_pivot_z];
    state.q = [theta1, old_theta[1] - theta1, old_theta[2] - old_theta[1]];
    state.dq = [w1, old_w[1] - w1, old_w[2] - old_w[1]];
    // old stance leg becomes the swing leg
    state.q4 = old_theta[0];
    state.time_since_transfer = 0.0;
    true
}

// ---------------------------------------------------------------------------
// Episode API
// ---------------------------------------------------------------------------

/// Start a new episode. Joint angles get uniform noise of half-width
/// `reset_noise` around the default pose; velocities are zero; the torque
/// delay queue is filled with zeros.
pub fn env_reset<R: Rng>(params: &EnvParams, push: PushEvent, rng: &mut R) -> EnvState {
    let mut q = params.q_def;
    if params.reset_noise > 0.0 {
        for qi in &mut q {
            *qi += rng.gen_range(-params.reset_noise..params.reset_noise);
        }
    }
    let mut queue = VecDeque::with_capacity(params.delay_queue_len());
    for _ in 0..params.delay_queue_len() {
        queue.push_back([0.0; 3]);
    }
    EnvState {
        pivot: [0.0, 0.0],
        q,
        dq: [0.0; 3],
        q4: 0.0,
        q4_target: 0.0,
        q4_vel: 0.0,
        t: 0.0,
        step_count: 0,
        time_since_transfer: f64::INFINITY,
        push,
        delay_queue: queue,
        prev_action: [0.0; 4],
        useful_contact: false,
        harmful_contact: false,
        wall_contact_active: false,
        terminated: false,
    }
}

/// Seeded variant of [`env_reset`].
pub fn env_reset_seeded(params: &EnvParams, push: PushEvent, seed: u64) -> EnvState {
    use rand_chacha::rand_core::SeedableRng;
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
    env_reset(params, push, &mut rng)
}

/// Advance one control step (several physics substeps).
///
/// The action is clipped to [-1, 1]; entries 0..3 become PD targets
/// q_def + alpha*a, entry 3 sets the swing-leg target a*(pi/3).
pub fn env_step(
    state: &mut EnvState,
    params: &EnvParams,
    reward_cfg: &RewardConfig,
    action_raw: &[f64; 4],
) -> Result<StepOutcome, EnvError> {
    debug_assert!(!state.terminated, "env_step on a terminated state");
    let mut action = [0.0; 4];
    for i in 0..4 {
        action[i] = action_raw[i].clamp(-1.0, 1.0);
    }

    let mut q_ref = [0.0; 3];
    for i in 0..3 {
        q_ref[i] = params.q_def[i] + params.action_scale * action[i];
    }
    state.q4_target = action[3] * std::f64::consts::FRAC_PI_3;

    state.useful_contact = false;
    state.harmful_contact = false;
    state.wall_contact_active = false;

    for _ in 0..params.substeps() {
        let fresh = pd_torque(&q_ref, &state.q, &state.dq, params);
        let applied = if state.delay_queue.is_empty() {
            fresh
        } else {
            let out = state.delay_queue.pop_front().expect("queue non-empty");
            state.delay_queue.push_back(fresh);
            out
        };

        let push_active =
            state.t >= state.push.t_onset && state.t < state.push.t_onset + state.push.duration;
        let f_torso = if push_active && state.push.force != 0.0 {
            [state.push.direction * state.push.force, 0.0]
        } else {
            [0.0, 0.0]
        };

        let wc = wall_contact(state, params);
        if wc.force[0] != 0.0 || wc.force[1] != 0.0 {
            state.wall_contact_active = true;
        }
        match wc.class {
            ContactClass::Useful => state.useful_contact = true,
            ContactClass::Harmful => state.harmful_contact = true,
            ContactClass::None => {}
        }

        let (q_new, dq_new) = dynamics_substep(
            &state.q,
            &state.dq,
            params,
            &applied,
            &f_torso,
            &wc.force,
            params.dt_phys,
        );
        state.q = q_new;
        state.dq = dq_new;
        state.t += params.dt_phys;

        if !state.q.iter().chain(state.dq.iter()).all(|v| v.is_finite()) {
            return Err(EnvError::Diverged {
                step: state.step_count,
            });
        }
    }

    state.step_count += 1;
    state.time_since_transfer += params.dt_ctrl;
    pivot_transfer(state, params);

    // rate-limited kinematic swing motion
    let max_dq4 = params.swing_rate * params.dt_ctrl;
    let dq4 = (state.q4_target - state.q4).clamp(-max_dq4, max_dq4);
    state.q4 += dq4;
    state.q4_vel = dq4 / params.dt_ctrl;

    let phi = tilt(state);
    let hip_z = state.pivot[1] + params.l1 * state.q[0].cos();
    let terminated = phi.abs() > TILT_LIMIT || hip_z < MIN_HIP_HEIGHT;
    let truncated = !terminated && state.step_count >= params.episode_steps();

    let rew = reward(
        phi,
        hip_z,
        &action,
        &state.prev_action,
        state.useful_contact,
        state.harmful_contact,
        terminated,
        params,
        reward_cfg,
    );
    state.prev_action = action;
    state.terminated = terminated;

    Ok(StepOutcome {
        reward: rew,
        terminated,
        truncated,
    })
}
