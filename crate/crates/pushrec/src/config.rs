//! Run configuration: INI-style text with `[section]` headers and
//! `key = value` lines, merged over defaults. Unknown keys are hard errors so
//! typos surface immediately; the fully resolved config renders back to text
//! that re-parses identically.

use std::fmt::Write as _;

use crate::env::{EnvParams, RewardConfig};
use crate::learn::PpoConfig;
use crate::policy::NetConfig;

#[derive(Debug, thiserror::Error)]
pub enum ConfigError {
    #[error("line {line}: unknown key `{key}`")]
    UnknownKey { line: usize, key: String },
    #[error("line {line}: bad value for `{key}`: {reason}")]
    BadValue {
        line: usize,
        key: String,
        reason: String,
    },
    #[error("line {line}: expected `key = value` or `[section]`")]
    Syntax { line: usize },
    #[error("invalid config: {0}")]
    Invalid(String),
}

#[derive(Debug, Clone, PartialEq)]
pub struct EvalConfig {
    /// Push-force grid for the open-floor sweep (N).
    pub force_grid: Vec<f64>,
    pub episodes_per_cell: usize,
    /// Wall x-positions for the zero-shot wall sweep (m).
    pub wall_distances: Vec<f64>,
    /// Fixed force for wall and mismatch sweeps (N).
    pub wall_force: f64,
    pub mismatch_force: f64,
    /// Use action means instead of sampling.
    pub deterministic: bool,
    /// Use argmax modes instead of soft mixtures.
    pub hard_modes: bool,
}

impl Default for EvalConfig {
    fn default() -> Self {
        EvalConfig {
            force_grid: vec![5.0, 10.0, 15.0, 20.0, 25.0, 30.0],
            episodes_per_cell: 50,
            wall_distances: vec![0.3, 0.45, 0.6, 0.75, 0.9],
            wall_force: 15.0,
            mismatch_force: 15.0,
            deterministic: true,
            hard_modes: true,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct RunConfig {
    pub seed: u64,
    pub out_dir: String,
    /// Checkpoint every this many updates (the final update always saves).
    pub checkpoint_interval: u64,
    /// Worker threads; 0 uses the rayon default. Results are bitwise
    /// identical for any value.
    pub threads: usize,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            seed: 0,
            out_dir: "out".into(),
            checkpoint_interval: 100,
            threads: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct Config {
    pub env: EnvParams,
    pub reward: RewardConfig,
    pub net: NetConfig,
    pub ppo: PpoConfig,
    pub eval: EvalConfig,
    pub run: RunConfig,
}

fn parse_scalar<T: std::str::FromStr>(
    line: usize,
    key: &str,
    value: &str,
) -> Result<T, ConfigError> {
    value
        .trim()
        .parse::<T>()
        .map_err(|_| ConfigError::BadValue {
            line,
            key: key.to_string(),
            reason: format!("cannot parse `{value}`"),
        })
}

fn parse_list(line: usize, key: &str, value: &str) -> Result<Vec<f64>, ConfigError> {
    value
        .split(',')
        .map(|s| parse_scalar::<f64>(line, key, s))
        .collect()
}

fn parse_bool(line: usize, key: &str, value: &str) -> Result<bool, ConfigError> {
    match value.trim() {
        "true" | "1" | "yes" => Ok(true),
        "false" | "0" | "no" => Ok(false),
        other => Err(ConfigError::BadValue {
            line,
            key: key.to_string(),
            reason: format!("cannot parse `{other}` as bool"),
        }),
    }
}

impl Config {
    /// Parse INI text over defaults, then resolve derived keys and validate.
    pub fn parse(text: &str) -> Result<Config, ConfigError> {
        let mut cfg = Config::default();
        let mut u_min_set = false;
        let mut frame_dim_set = false;
        let mut section = String::new();

        for (idx, raw) in text.lines().enumerate() {
            let line = idx + 1;
            let stripped = match raw.find('#') {
                Some(p) => &raw[..p],
                None => raw,
            };
            let s = stripped.trim();
            if s.is_empty() {
                continue;
            }
            if let Some(name) = s.strip_prefix('[').and_then(|r| r.strip_suffix(']')) {
                section = name.trim().to_string();
                continue;
            }
            let (key, value) = s.split_once('=').ok_or(ConfigError::Syntax { line })?;
            let key = key.trim();
            let value = value.trim();
            let full = format!("{section}.{key}");
            match full.as_str() {
                // [env] physical parameters
                "env.l1" => cfg.env.l1 = parse_scalar(line, &full, value)?,
                "env.l2" => cfg.env.l2 = parse_scalar(line, &full, value)?,
                "env.l3" => cfg.env.l3 = parse_scalar(line, &full, value)?,
                "env.m1" => cfg.env.m1 = parse_scalar(line, &full, value)?,
                "env.m2" => cfg.env.m2 = parse_scalar(line, &full, value)?,
                "env.m3" => cfg.env.m3 = parse_scalar(line, &full, value)?,
                "env.gravity" => cfg.env.gravity = parse_scalar(line, &full, value)?,
                "env.dt_phys" => cfg.env.dt_phys = parse_scalar(line, &full, value)?,
                "env.dt_ctrl" => cfg.env.dt_ctrl = parse_scalar(line, &full, value)?,
                "env.kp" => cfg.env.kp = parse_scalar(line, &full, value)?,
                "env.kd" => cfg.env.kd = parse_scalar(line, &full, value)?,
                "env.tau_max" => cfg.env.tau_max = parse_scalar(line, &full, value)?,
                "env.q_def" => {
                    let v = parse_list(line, &full, value)?;
                    if v.len() != 3 {
                        return Err(ConfigError::BadValue {
                            line,
                            key: full,
                            reason: "q_def needs exactly 3 entries".into(),
                        });
                    }
                    cfg.env.q_def = [v[0], v[1], v[2]];
                }
                "env.action_scale" => cfg.env.action_scale = parse_scalar(line, &full, value)?,
                "env.wall_present" => cfg.env.wall_present = parse_bool(line, &full, value)?,
                "env.wall_x" => cfg.env.wall_x = parse_scalar(line, &full, value)?,
                "env.wall_k" => cfg.env.wall_k = parse_scalar(line, &full, value)?,
                "env.wall_c" => cfg.env.wall_c = parse_scalar(line, &full, value)?,
                "env.friction_mu" => cfg.env.friction_mu = parse_scalar(line, &full, value)?,
                "env.torso_mass_scale" => {
                    cfg.env.torso_mass_scale = parse_scalar(line, &full, value)?
                }
                "env.latency" => cfg.env.latency = parse_scalar(line, &full, value)?,
                "env.contact_heights" => cfg.env.contact_heights = parse_list(line, &full, value)?,
                "env.d_max" => cfg.env.d_max = parse_scalar(line, &full, value)?,
                "env.l_step" => cfg.env.l_step = parse_scalar(line, &full, value)?,
                "env.phi_step" => cfg.env.phi_step = parse_scalar(line, &full, value)?,
                "env.swing_threshold" => {
                    cfg.env.swing_threshold = parse_scalar(line, &full, value)?
                }
                "env.transfer_cooldown" => {
                    cfg.env.transfer_cooldown = parse_scalar(line, &full, value)?
                }
                "env.swing_rate" => cfg.env.swing_rate = parse_scalar(line, &full, value)?,
                "env.reset_noise" => cfg.env.reset_noise = parse_scalar(line, &full, value)?,
                "env.push_force_min" => cfg.env.push_force_min = parse_scalar(line, &full, value)?,
                "env.push_force_max" => cfg.env.push_force_max = parse_scalar(line, &full, value)?,
                "env.push_onset_min" => cfg.env.push_onset_min = parse_scalar(line, &full, value)?,
                "env.push_onset_max" => cfg.env.push_onset_max = parse_scalar(line, &full, value)?,
                // [env] reward keys
                "env.w_phi" => cfg.reward.w_phi = parse_scalar(line, &full, value)?,
                "env.sigma_phi" => cfg.reward.sigma_phi = parse_scalar(line, &full, value)?,
                "env.w_height" => cfg.reward.w_height = parse_scalar(line, &full, value)?,
                "env.sigma_height" => cfg.reward.sigma_height = parse_scalar(line, &full, value)?,
                "env.alive_bonus" => cfg.reward.alive_bonus = parse_scalar(line, &full, value)?,
                "env.w_useful" => cfg.reward.w_useful = parse_scalar(line, &full, value)?,
                "env.w_harmful" => cfg.reward.w_harmful = parse_scalar(line, &full, value)?,
                "env.lambda_action" => cfg.reward.lambda_action = parse_scalar(line, &full, value)?,
                "env.lambda_rate" => cfg.reward.lambda_rate = parse_scalar(line, &full, value)?,
                "env.w_term" => cfg.reward.w_term = parse_scalar(line, &full, value)?,
                // [net]
                "net.frame_dim" => {
                    cfg.net.frame_dim = parse_scalar(line, &full, value)?;
                    frame_dim_set = true;
                }
                "net.d" => cfg.net.embed_dim = parse_scalar(line, &full, value)?,
                "net.layers" => cfg.net.layers = parse_scalar(line, &full, value)?,
                "net.heads" => cfg.net.heads = parse_scalar(line, &full, value)?,
                "net.history" => cfg.net.history = parse_scalar(line, &full, value)?,
                "net.modes" => cfg.net.modes = parse_scalar(line, &full, value)?,
                "net.d_z" => cfg.net.mode_embed_dim = parse_scalar(line, &full, value)?,
                "net.k_c" => cfg.net.affordances = parse_scalar(line, &full, value)?,
                "net.action_dim" => cfg.net.action_dim = parse_scalar(line, &full, value)?,
                "net.dec_hidden1" => cfg.net.dec_hidden1 = parse_scalar(line, &full, value)?,
                "net.dec_hidden2" => cfg.net.dec_hidden2 = parse_scalar(line, &full, value)?,
                "net.tau_start" => cfg.net.tau_start = parse_scalar(line, &full, value)?,
                "net.tau_end" => cfg.net.tau_end = parse_scalar(line, &full, value)?,
                // [ppo]
                "ppo.gamma" => cfg.ppo.gamma = parse_scalar(line, &full, value)?,
                "ppo.lambda" => cfg.ppo.lambda = parse_scalar(line, &full, value)?,
                "ppo.clip_eps" => cfg.ppo.clip_eps = parse_scalar(line, &full, value)?,
                "ppo.value_coef" => cfg.ppo.value_coef = parse_scalar(line, &full, value)?,
                "ppo.entropy_coef" => cfg.ppo.entropy_coef = parse_scalar(line, &full, value)?,
                "ppo.mode_coef" => cfg.ppo.mode_coef = parse_scalar(line, &full, value)?,
                "ppo.learning_rate" => cfg.ppo.learning_rate = parse_scalar(line, &full, value)?,
                "ppo.epochs" => cfg.ppo.epochs = parse_scalar(line, &full, value)?,
                "ppo.minibatch_size" => cfg.ppo.minibatch_size = parse_scalar(line, &full, value)?,
                "ppo.rollout_len" => cfg.ppo.rollout_len = parse_scalar(line, &full, value)?,
                "ppo.num_envs" => cfg.ppo.num_envs = parse_scalar(line, &full, value)?,
                "ppo.total_steps" => cfg.ppo.total_steps = parse_scalar(line, &full, value)?,
                "ppo.grad_clip" => cfg.ppo.grad_clip = parse_scalar(line, &full, value)?,
                "ppo.u_min" => {
                    cfg.ppo.u_min = parse_scalar(line, &full, value)?;
                    u_min_set = true;
                }
                // [eval]
                "eval.force_grid" => cfg.eval.force_grid = parse_list(line, &full, value)?,
                "eval.episodes_per_cell" => {
                    cfg.eval.episodes_per_cell = parse_scalar(line, &full, value)?
                }
                "eval.wall_distances" => cfg.eval.wall_distances = parse_list(line, &full, value)?,
                "eval.wall_force" => cfg.eval.wall_force = parse_scalar(line, &full, value)?,
                "eval.mismatch_force" => {
                    cfg.eval.mismatch_force = parse_scalar(line, &full, value)?
                }
                "eval.deterministic" => cfg.eval.deterministic = parse_bool(line, &full, value)?,
                "eval.hard_modes" => cfg.eval.hard_modes = parse_bool(line, &full, value)?,
                // [run]
                "run.seed" => cfg.run.seed = parse_scalar(line, &full, value)?,
                "run.out_dir" => cfg.run.out_dir = value.to_string(),
                "run.checkpoint_interval" => {
                    cfg.run.checkpoint_interval = parse_scalar(line, &full, value)?
                }
                "run.threads" => cfg.run.threads = parse_scalar(line, &full, value)?,
                _ => return Err(ConfigError::UnknownKey { line, key: full }),
            }
        }

        if !frame_dim_set {
            cfg.net.frame_dim = crate::features::FRAME_BASE
                + cfg.env.contact_heights.len()
                + crate::features::ACTION_DIM;
        }
        if !u_min_set {
            cfg.ppo.u_min = 0.4 / cfg.net.modes as f64;
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        self.env
            .validate()
            .map_err(|e| ConfigError::Invalid(e.to_string()))?;
        self.reward
            .validate()
            .map_err(|e| ConfigError::Invalid(e.to_string()))?;
        if self.net.heads == 0 || self.net.embed_dim % self.net.heads != 0 {
            return Err(ConfigError::Invalid(format!(
                "d not divisible by H_h ({} / {})",
                self.net.embed_dim, self.net.heads
            )));
        }
        self.net
            .validate()
            .map_err(|e| ConfigError::Invalid(e.to_string()))?;
        self.ppo
            .validate(self.net.modes)
            .map_err(ConfigError::Invalid)?;
        let expect_frame = crate::features::FRAME_BASE
            + self.env.contact_heights.len()
            + crate::features::ACTION_DIM;
        if self.net.frame_dim != expect_frame {
            return Err(ConfigError::Invalid(format!(
                "net.frame_dim {} does not match the environment frame width {}",
                self.net.frame_dim, expect_frame
            )));
        }
        if self.net.affordances != self.env.contact_heights.len() {
            return Err(ConfigError::Invalid(format!(
                "net.k_c {} does not match env.contact_heights count {}",
                self.net.affordances,
                self.env.contact_heights.len()
            )));
        }
        if self.net.action_dim != 4 {
            return Err(ConfigError::Invalid(
                "net.action_dim must be 4 for the planar robot".into(),
            ));
        }
        Ok(())
    }

    /// Render the resolved config; the output re-parses to an identical
    /// `Config`.
    pub fn render(&self) -> String {
        let mut s = String::new();
        let list = |v: &[f64]| {
            v.iter()
                .map(|x| x.to_string())
                .collect::<Vec<_>>()
                .join(",")
        };
        let _ = writeln!(s, "[env]");
        let e = &self.env;
        for (k, v) in [
            ("l1", e.l1),
            ("l2", e.l2),
            ("l3", e.l3),
            ("m1", e.m1),
            ("m2", e.m2),
            ("m3", e.m3),
            ("gravity", e.gravity),
            ("dt_phys", e.dt_phys),
            ("dt_ctrl", e.dt_ctrl),
            ("kp", e.kp),
            ("kd", e.kd),
            ("tau_max", e.tau_max),
            ("action_scale", e.action_scale),
            ("wall_x", e.wall_x),
            ("wall_k", e.wall_k),
            ("wall_c", e.wall_c),
            ("friction_mu", e.friction_mu),
            ("torso_mass_scale", e.torso_mass_scale),
            ("latency", e.latency),
            ("d_max", e.d_max),
            ("l_step", e.l_step),
            ("phi_step", e.phi_step),
            ("swing_threshold", e.swing_threshold),
            ("transfer_cooldown", e.transfer_cooldown),
            ("swing_rate", e.swing_rate),
            ("reset_noise", e.reset_noise),
            ("push_force_min", e.push_force_min),
            ("push_force_max", e.push_force_max),
            ("push_onset_min", e.push_onset_min),
            ("push_onset_max", e.push_onset_max),
        ] {
            let _ = writeln!(s, "{k} = {v}");
        }
        let _ = writeln!(s, "q_def = {}", list(&e.q_def));
        let _ = writeln!(s, "wall_present = {}", e.wall_present);
        let _ = writeln!(s, "contact_heights = {}", list(&e.contact_heights));
        let r = &self.reward;
        for (k, v) in [
            ("w_phi", r.w_phi),
            ("sigma_phi", r.sigma_phi),
            ("w_height", r.w_height),
            ("sigma_height", r.sigma_height),
            ("alive_bonus", r.alive_bonus),
            ("w_useful", r.w_useful),
            ("w_harmful", r.w_harmful),
            ("lambda_action", r.lambda_action),
            ("lambda_rate", r.lambda_rate),
            ("w_term", r.w_term),
        ] {
            let _ = writeln!(s, "{k} = {v}");
        }

        let n = &self.net;
        let _ = writeln!(s, "\n[net]");
        for (k, v) in [
            ("frame_dim", n.frame_dim),
            ("d", n.embed_dim),
            ("layers", n.layers),
            ("heads", n.heads),
            ("history", n.history),
            ("modes", n.modes),
            ("d_z", n.mode_embed_dim),
            ("k_c", n.affordances),
            ("action_dim", n.action_dim),
            ("dec_hidden1", n.dec_hidden1),
            ("dec_hidden2", n.dec_hidden2),
        ] {
            let _ = writeln!(s, "{k} = {v}");
        }
        let _ = writeln!(s, "tau_start = {}", n.tau_start);
        let _ = writeln!(s, "tau_end = {}", n.tau_end);

        let p = &self.ppo;
        let _ = writeln!(s, "\n[ppo]");
        for (k, v) in [
            ("gamma", p.gamma),
            ("lambda", p.lambda),
            ("clip_eps", p.clip_eps),
            ("value_coef", p.value_coef),
            ("entropy_coef", p.entropy_coef),
            ("mode_coef", p.mode_coef),
            ("learning_rate", p.learning_rate),
            ("grad_clip", p.grad_clip),
            ("u_min", p.u_min),
        ] {
            let _ = writeln!(s, "{k} = {v}");
        }
        for (k, v) in [
            ("epochs", p.epochs),
            ("minibatch_size", p.minibatch_size),
            ("rollout_len", p.rollout_len),
            ("num_envs", p.num_envs),
        ] {
            let _ = writeln!(s, "{k} = {v}");
        }
        let _ = writeln!(s, "total_steps = {}", p.total_steps);

        let v = &self.eval;
        let _ = writeln!(s, "\n[eval]");
        let _ = writeln!(s, "force_grid = {}", list(&v.force_grid));
        let _ = writeln!(s, "episodes_per_cell = {}", v.episodes_per_cell);
        let _ = writeln!(s, "wall_distances = {}", list(&v.wall_distances));
        let _ = writeln!(s, "wall_force = {}", v.wall_force);
        let _ = writeln!(s, "mismatch_force = {}", v.mismatch_force);
        let _ = writeln!(s, "deterministic = {}", v.deterministic);
        let _ = writeln!(s, "hard_modes = {}", v.hard_modes);

        let rn = &self.run;
        let _ = writeln!(s, "\n[run]");
        let _ = writeln!(s, "seed = {}", rn.seed);
        let _ = writeln!(s, "out_dir = {}", rn.out_dir);
        let _ = writeln!(s, "checkpoint_interval = {}", rn.checkpoint_interval);
        let _ = writeln!(s, "threads = {}", rn.threads);
        s
    }
}
