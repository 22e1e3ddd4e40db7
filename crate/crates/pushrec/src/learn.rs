//! PPO training: rollout collection over a pool of environments, generalized
//! advantage estimation, the clipped surrogate with value and entropy terms,
//! the latent-mode loss, linear temperature annealing, and Adam updates with
//! global gradient-norm clipping.
//!
//! Collection steps all environments in lockstep so the policy forward runs
//! batched; each environment owns its RNG and history, so results do not
//! depend on scheduling. A single-threaded run (run.threads = 1) is the
//! determinism reference; the fixed-block parallel kernels produce bitwise
//! identical results at any thread count.

use std::io::Write as _;
use std::path::Path;

use ndarray::Array2;
use rand::seq::SliceRandom;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::checkpoint::{self, TrainerState};
use crate::config::Config;
use crate::env::{self, EnvParams, EnvState, RewardConfig};
use crate::features::{build_frame, frame_len, HistoryBuffer, RunningNorm};
use crate::policy::{self, ModeSelect, PolicyParams};
use crate::tape::{Mat, NodeId, Real, Tape};

#[derive(Debug, thiserror::Error)]
pub enum LearnError {
    #[error("non-finite input to GAE")]
    NonFiniteGae,
    #[error("non-finite loss at update {update} (last good checkpoint retained)")]
    NonFiniteLoss { update: u64 },
    #[error(transparent)]
    Env(#[from] crate::env::EnvError),
    #[error(transparent)]
    Checkpoint(#[from] crate::checkpoint::CheckpointError),
    #[error("io: {0}")]
    Io(#[from] std::io::Error),
}

#[derive(Debug, Clone, PartialEq)]
pub struct PpoConfig {
    pub gamma: f64,
    pub lambda: f64,
    pub clip_eps: f64,
    pub value_coef: f64,
    pub entropy_coef: f64,
    /// Weight of the latent-mode loss (beta).
    pub mode_coef: f64,
    pub learning_rate: f64,
    pub epochs: usize,
    pub minibatch_size: usize,
    pub rollout_len: usize,
    pub num_envs: usize,
    pub total_steps: u64,
    pub grad_clip: f64,
    /// Minimum per-mode batch usage before the utilization hinge fires.
    pub u_min: f64,
}

impl Default for PpoConfig {
    fn default() -> Self {
        PpoConfig {
            gamma: 0.99,
            lambda: 0.95,
            clip_eps: 0.2,
            value_coef: 0.5,
            entropy_coef: 0.01,
            mode_coef: 0.1,
            learning_rate: 3e-4,
            epochs: 5,
            minibatch_size: 128,
            rollout_len: 48,
            num_envs: 16,
            total_steps: 300_000,
            grad_clip: 0.5,
            u_min: 0.1,
        }
    }
}

impl PpoConfig {
    pub fn validate(&self, modes: usize) -> Result<(), String> {
        if !(self.gamma > 0.0 && self.gamma <= 1.0) {
            return Err("need 0 < gamma <= 1".into());
        }
        if !(0.0..=1.0).contains(&self.lambda) {
            return Err("need 0 <= lambda <= 1".into());
        }
        if self.clip_eps <= 0.0 {
            return Err("need clip_eps > 0".into());
        }
        if self.u_min * modes as f64 > 1.0 + 1e-12 {
            return Err(format!(
                "u_min * K = {} exceeds 1",
                self.u_min * modes as f64
            ));
        }
        if self.epochs == 0 || self.minibatch_size == 0 || self.rollout_len == 0 || self.num_envs == 0
        {
            return Err("epochs, minibatch_size, rollout_len, num_envs must be >= 1".into());
        }
        Ok(())
    }
}

/// SplitMix64 stream derivation for per-worker and per-episode seeds.
pub fn derive_seed(master: u64, stream: u64) -> u64 {
    let mut z = master ^ stream.wrapping_mul(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Linear temperature anneal over total environment steps.
pub fn anneal_tau(step: u64, total_steps: u64, start: f64, end: f64) -> f64 {
    if total_steps == 0 {
        return end;
    }
    let frac = (step as f64 / total_steps as f64).clamp(0.0, 1.0);
    (1.0 - frac) * start + frac * end
}

// ---------------------------------------------------------------------------
// GAE
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Done {
    No,
    Terminated,
    Truncated,
}

/// Core recursion with an explicit bootstrap per step.
pub fn gae_from_next_values(
    rewards: &[f64],
    values: &[f64],
    next_values: &[f64],
    dones: &[Done],
    gamma: f64,
    lambda: f64,
) -> (Vec<f64>, Vec<f64>) {
    let t_len = rewards.len();
    assert_eq!(values.len(), t_len);
    assert_eq!(next_values.len(), t_len);
    assert_eq!(dones.len(), t_len);
    let mut adv = vec![0.0; t_len];
    let mut ret = vec![0.0; t_len];
    let mut acc = 0.0;
    for t in (0..t_len).rev() {
        let delta = rewards[t] + gamma * next_values[t] - values[t];
        let carry = if dones[t] == Done::No { acc } else { 0.0 };
        acc = delta + gamma * lambda * carry;
        adv[t] = acc;
        ret[t] = acc + values[t];
    }
    (adv, ret)
}

/// Backward GAE recursion. `values` carries one bootstrap entry beyond the
/// last step; terminated steps zero their bootstrap, truncated steps use the
/// caller-supplied next value.
pub fn compute_gae(
    rewards: &[f64],
    values: &[f64],
    dones: &[Done],
    gamma: f64,
    lambda: f64,
) -> Result<(Vec<f64>, Vec<f64>), LearnError> {
    let t_len = rewards.len();
    assert_eq!(values.len(), t_len + 1, "values must include the bootstrap");
    assert_eq!(dones.len(), t_len);
    if !rewards.iter().chain(values.iter()).all(|x| x.is_finite()) {
        return Err(LearnError::NonFiniteGae);
    }
    let next_values: Vec<f64> = (0..t_len)
        .map(|t| {
            if dones[t] == Done::Terminated {
                0.0
            } else {
                values[t + 1]
            }
        })
        .collect();
    Ok(gae_from_next_values(
        rewards,
        &values[..t_len],
        &next_values,
        dones,
        gamma,
        lambda,
    ))
}

/// Standardize to mean 0, std 1 (population), with a small denominator guard.
pub fn standardize(xs: &mut [f64]) {
    if xs.len() <= 1 {
        for x in xs.iter_mut() {
            *x = 0.0;
        }
        return;
    }
    let n = xs.len() as f64;
    let mean = xs.iter().sum::<f64>() / n;
    let var = xs.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / n;
    let std = var.sqrt();
    for x in xs.iter_mut() {
        *x = (*x - mean) / (std + 1e-8);
    }
}

/// Latent-mode loss on a batch of posteriors: mean per-sample entropy plus a
/// hinge on batch-level mode usage. Minimizing drives decisive per-step modes
/// while keeping every mode's mean usage above u_min.
pub fn mode_loss(posteriors: &Array2<f64>, u_min: f64) -> f64 {
    let n = posteriors.nrows() as f64;
    let k = posteriors.ncols();
    let mut entropy_sum = 0.0;
    let mut usage = vec![0.0; k];
    for row in posteriors.rows() {
        for (j, &p) in row.iter().enumerate() {
            if p > 0.0 {
                entropy_sum -= p * p.ln();
            }
            usage[j] += p;
        }
    }
    let mut hinge = 0.0;
    for u in &usage {
        hinge += (u_min - u / n).max(0.0);
    }
    entropy_sum / n + hinge
}

// ---------------------------------------------------------------------------
// Loss graph
// ---------------------------------------------------------------------------

pub struct MiniBatch<T: Real> {
    /// Stacked normalized histories, (batch * H) x frame_dim.
    pub histories: Mat<T>,
    /// Pre-clip Gaussian samples, batch x action_dim.
    pub actions_pre: Mat<T>,
    /// Behavior log-probs, batch x 1.
    pub logp_old: Mat<T>,
    /// Standardized advantages, batch x 1.
    pub advantages: Mat<T>,
    /// Value targets, batch x 1.
    pub returns: Mat<T>,
}

#[derive(Debug, Clone, Default)]
pub struct LossStats {
    pub total: f64,
    pub surrogate: f64,
    pub value_loss: f64,
    pub entropy: f64,
    pub mode_loss: f64,
    pub ratio_mean: f64,
    pub clip_fraction: f64,
    /// Batch-mean posterior per mode (exactly as used in the loss).
    pub usage: Vec<f64>,
}

/// Build the combined PPO + mode loss graph for one minibatch. Returns the
/// loss node, parameter leaves (census order), and value-level stats.
pub fn build_loss<T: Real>(
    tape: &mut Tape<T>,
    params: &PolicyParams<T>,
    mb: &MiniBatch<T>,
    tau: T,
    cfg: &PpoConfig,
) -> (NodeId, Vec<NodeId>, LossStats) {
    let act_dim = params.cfg.action_dim;
    let fwd = policy::forward(tape, params, mb.histories.clone(), tau, ModeSelect::Soft);

    // log pi_new(a_pre | h): mirrors policy::gaussian_log_prob op for op
    let neg_log_std = tape.scale(fwd.log_std, T::of(-1.0));
    let inv_sigma = tape.exp(neg_log_std);
    let actions = tape.constant(mb.actions_pre.clone());
    let diff = tape.sub(actions, fwd.action_mean);
    let z = tape.mul_row(diff, inv_sigma);
    let z2 = tape.mul(z, z);
    let q = tape.sum_cols(z2);
    let logp_const = T::of(-(act_dim as f64) / 2.0 * (2.0 * std::f64::consts::PI).ln());
    let t1 = tape.affine(q, T::of(-0.5), logp_const);
    let sum_ls = tape.sum_all(fwd.log_std);
    let neg_sum_ls = tape.scale(sum_ls, T::of(-1.0));
    let logp_new = tape.add_bscalar(t1, neg_sum_ls);

    let logp_old = tape.constant(mb.logp_old.clone());
    let log_ratio = tape.sub(logp_new, logp_old);
    let ratio = tape.exp(log_ratio);

    let adv = tape.constant(mb.advantages.clone());
    let surr1 = tape.mul(ratio, adv);
    let clipped = tape.clamp(ratio, T::of(1.0 - cfg.clip_eps), T::of(1.0 + cfg.clip_eps));
    let surr2 = tape.mul(clipped, adv);
    let surr_min = tape.min2(surr1, surr2);
    let surr_mean = tape.mean_all(surr_min);
    let surrogate = tape.scale(surr_mean, T::of(-1.0));

    let returns = tape.constant(mb.returns.clone());
    let vdiff = tape.sub(fwd.value, returns);
    let vsq = tape.mul(vdiff, vdiff);
    let value_loss = tape.mean_all(vsq);

    // closed-form diagonal Gaussian entropy (state independent)
    let ent_const = T::of(act_dim as f64 / 2.0 * (1.0 + (2.0 * std::f64::consts::PI).ln()));
    let entropy = tape.affine(sum_ls, T::one(), ent_const);

    // mode loss: mean per-sample entropy + usage hinge
    let ent_rows = tape.entropy_rows(fwd.posterior);
    let mode_entropy = tape.mean_all(ent_rows);
    let usage = tape.mean_rows(fwd.posterior);
    let hinge_arg = tape.affine(usage, T::of(-1.0), T::of(cfg.u_min));
    let hinge = tape.relu(hinge_arg);
    let hinge_sum = tape.sum_all(hinge);
    let mode_total = tape.add(mode_entropy, hinge_sum);

    let v_term = tape.scale(value_loss, T::of(cfg.value_coef));
    let mut loss = tape.add(surrogate, v_term);
    let ent_term = tape.scale(entropy, T::of(-cfg.entropy_coef));
    loss = tape.add(loss, ent_term);
    if cfg.mode_coef != 0.0 {
        let m_term = tape.scale(mode_total, T::of(cfg.mode_coef));
        loss = tape.add(loss, m_term);
    }

    // value-level stats
    let ratios = tape.value(ratio);
    let n = ratios.nrows() as f64;
    let ratio_mean = ratios.iter().map(|r| r.f64()).sum::<f64>() / n;
    let clip_fraction = ratios
        .iter()
        .filter(|r| {
            let r = r.f64();
            r < 1.0 - cfg.clip_eps || r > 1.0 + cfg.clip_eps
        })
        .count() as f64
        / n;
    let usage_vals: Vec<f64> = tape.value(usage).iter().map(|u| u.f64()).collect();
    let stats = LossStats {
        total: tape.scalar(loss).f64(),
        surrogate: tape.scalar(surrogate).f64(),
        value_loss: tape.scalar(value_loss).f64(),
        entropy: tape.scalar(entropy).f64(),
        mode_loss: tape.scalar(mode_total).f64(),
        ratio_mean,
        clip_fraction,
        usage: usage_vals,
    };
    (loss, fwd.param_ids, stats)
}

// ---------------------------------------------------------------------------
// Optimizer
// ---------------------------------------------------------------------------

pub struct Adam<T: Real> {
    pub m: Vec<Mat<T>>,
    pub v: Vec<Mat<T>>,
    pub t: u64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl<T: Real> Adam<T> {
    pub fn new(params: &PolicyParams<T>) -> Self {
        let shapes: Vec<_> = params
            .tensors()
            .iter()
            .map(|(_, t)| Mat::zeros(t.dim()))
            .collect();
        Adam {
            m: shapes.clone(),
            v: shapes,
            t: 0,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }

    pub fn step(&mut self, params: &mut PolicyParams<T>, grads: &[Mat<T>], lr: f64) {
        self.t += 1;
        let b1 = T::of(self.beta1);
        let b2 = T::of(self.beta2);
        let one = T::one();
        let bc1 = T::of(1.0 - self.beta1.powi(self.t as i32));
        let bc2 = T::of(1.0 - self.beta2.powi(self.t as i32));
        let lr = T::of(lr);
        let eps = T::of(self.eps);
        for (i, p) in params.tensors_mut().into_iter().enumerate() {
            let g = &grads[i];
            let m = &mut self.m[i];
            let v = &mut self.v[i];
            ndarray::Zip::from(&mut *m).and(g).for_each(|m, &g| {
                *m = b1 * *m + (one - b1) * g;
            });
            ndarray::Zip::from(&mut *v).and(g).for_each(|v, &g| {
                *v = b2 * *v + (one - b2) * g * g;
            });
            ndarray::Zip::from(p).and(&*m).and(&*v).for_each(|p, &m, &v| {
                let mhat = m / bc1;
                let vhat = v / bc2;
                *p = *p - lr * mhat / (vhat.sqrt() + eps);
            });
        }
    }
}

/// Scale gradients so the global L2 norm does not exceed `max_norm`; returns
/// the pre-clip norm.
pub fn clip_global_norm<T: Real>(grads: &mut [Mat<T>], max_norm: f64) -> f64 {
    let norm2: f64 = grads
        .iter()
        .flat_map(|g| g.iter())
        .map(|x| x.f64() * x.f64())
        .sum();
    let norm = norm2.sqrt();
    if norm > max_norm && norm > 0.0 {
        let scale = T::of(max_norm / norm);
        for g in grads.iter_mut() {
            g.mapv_inplace(|x| x * scale);
        }
    }
    norm
}

// ---------------------------------------------------------------------------
// Rollout collection
// ---------------------------------------------------------------------------

/// One environment plus its episode-local state, owned by a single worker.
pub struct EnvWorker {
    pub state: EnvState,
    pub history: HistoryBuffer,
    pub rng: ChaCha8Rng,
    pub raw_frames: Vec<Vec<f64>>,
    episode_return: f64,
    episode_len: u32,
    /// Index into the current rollout where this episode began (for
    /// divergence invalidation), if it began inside the current rollout.
    episode_start: Option<usize>,
}

impl EnvWorker {
    pub fn new(
        env_params: &EnvParams,
        norm: &RunningNorm,
        history_len: usize,
        seed: u64,
    ) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let push = env::sample_push(&mut rng, env_params, false);
        let state = env::env_reset(env_params, push, &mut rng);
        let mut w = EnvWorker {
            state,
            history: HistoryBuffer::new(history_len, frame_len(env_params)),
            rng,
            raw_frames: Vec::new(),
            episode_return: 0.0,
            episode_len: 0,
            episode_start: None,
        };
        w.observe(env_params, norm);
        w
    }

    fn observe(&mut self, env_params: &EnvParams, norm: &RunningNorm) {
        let raw = build_frame(&self.state, env_params);
        let normalized = norm.apply(&raw);
        self.raw_frames.push(raw);
        self.history.push(normalized);
    }

    fn reset(&mut self, env_params: &EnvParams, norm: &RunningNorm) {
        let push = env::sample_push(&mut self.rng, env_params, false);
        self.state = env::env_reset(env_params, push, &mut self.rng);
        self.history.clear();
        self.episode_return = 0.0;
        self.episode_len = 0;
        self.observe(env_params, norm);
    }
}

#[derive(Debug, Clone, Copy)]
pub struct EpisodeStat {
    pub ret: f64,
    pub len: u32,
    pub terminated: bool,
}

/// Flattened trajectories for one update, transition index = env * T + step.
pub struct RolloutBatch<T: Real> {
    pub num_envs: usize,
    pub steps: usize,
    pub history: usize,
    pub frame_dim: usize,
    /// (num_envs * steps * H) x frame_dim
    pub histories: Mat<T>,
    pub actions_pre: Mat<T>,
    pub logp_old: Vec<T>,
    pub rewards: Vec<f64>,
    pub values: Vec<f64>,
    pub next_values: Vec<f64>,
    pub dones: Vec<Done>,
    pub posteriors: Array2<f64>,
    pub valid: Vec<bool>,
    pub advantages: Vec<f64>,
    pub returns: Vec<f64>,
    pub episodes: Vec<EpisodeStat>,
    pub divergences: u32,
    /// Raw-frame normalizer shards, one per worker, merged after collection.
    pub norm_shards: Vec<RunningNorm>,
}

impl<T: Real> RolloutBatch<T> {
    pub fn len(&self) -> usize {
        self.num_envs * self.steps
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Gather a minibatch by transition indices.
    pub fn gather(&self, idx: &[usize]) -> MiniBatch<T> {
        let h = self.history;
        let f = self.frame_dim;
        let a = self.actions_pre.ncols();
        let mut histories = Mat::<T>::zeros((idx.len() * h, f));
        let mut actions = Mat::<T>::zeros((idx.len(), a));
        let mut logp = Mat::<T>::zeros((idx.len(), 1));
        let mut adv = Mat::<T>::zeros((idx.len(), 1));
        let mut ret = Mat::<T>::zeros((idx.len(), 1));
        for (row, &n) in idx.iter().enumerate() {
            histories
                .slice_mut(ndarray::s![row * h..(row + 1) * h, ..])
                .assign(&self.histories.slice(ndarray::s![n * h..(n + 1) * h, ..]));
            actions.row_mut(row).assign(&self.actions_pre.row(n));
            logp[(row, 0)] = self.logp_old[n];
            adv[(row, 0)] = T::of(self.advantages[n]);
            ret[(row, 0)] = T::of(self.returns[n]);
        }
        MiniBatch {
            histories,
            actions_pre: actions,
            logp_old: logp,
            advantages: adv,
            returns: ret,
        }
    }
}

/// Step every worker `rollout_len` times under frozen parameters.
#[allow(clippy::too_many_arguments)]
pub fn collect_rollouts<T: Real>(
    workers: &mut [EnvWorker],
    params: &PolicyParams<T>,
    norm: &RunningNorm,
    env_params: &EnvParams,
    reward_cfg: &RewardConfig,
    cfg: &PpoConfig,
    tau: T,
) -> RolloutBatch<T> {
    let n_envs = workers.len();
    let t_roll = cfg.rollout_len;
    let h = params.cfg.history;
    let f = params.cfg.frame_dim;
    let a_dim = params.cfg.action_dim;
    let n_total = n_envs * t_roll;

    let mut batch = RolloutBatch {
        num_envs: n_envs,
        steps: t_roll,
        history: h,
        frame_dim: f,
        histories: Mat::zeros((n_total * h, f)),
        actions_pre: Mat::zeros((n_total, a_dim)),
        logp_old: vec![T::zero(); n_total],
        rewards: vec![0.0; n_total],
        values: vec![0.0; n_total],
        next_values: vec![0.0; n_total],
        dones: vec![Done::No; n_total],
        posteriors: Array2::zeros((n_total, params.cfg.modes)),
        valid: vec![true; n_total],
        advantages: vec![0.0; n_total],
        returns: vec![0.0; n_total],
        episodes: Vec::new(),
        divergences: 0,
        norm_shards: Vec::new(),
    };

    for w in workers.iter_mut() {
        w.episode_start = None;
        w.raw_frames.clear();
    }

    for step in 0..t_roll {
        // lockstep batched forward over all envs
        let mut stacked = Mat::<T>::zeros((n_envs * h, f));
        for (e, w) in workers.iter().enumerate() {
            let hist = w.history.as_matrix();
            for r in 0..h {
                for c in 0..f {
                    stacked[(e * h + r, c)] = T::of(hist[(r, c)]);
                }
            }
        }
        let mut tape = Tape::new();
        let fwd = policy::forward(&mut tape, params, stacked, tau, ModeSelect::Soft);
        let mu = tape.value(fwd.action_mean).clone();
        let vals = tape.value(fwd.value).clone();
        let post = tape.value(fwd.posterior).clone();
        let log_std: Vec<T> = params.log_std.row(0).to_vec();
        drop(tape);

        for e in 0..n_envs {
            let n = e * t_roll + step;
            let w = &mut workers[e];
            if w.episode_start.is_none() {
                w.episode_start = Some(n);
            }

            // snapshot h_t (policy input)
            let hist = w.history.as_matrix();
            for r in 0..h {
                for c in 0..f {
                    batch.histories[(n * h + r, c)] = T::of(hist[(r, c)]);
                }
            }
            for k in 0..params.cfg.modes {
                batch.posteriors[(n, k)] = post[(e, k)].f64();
            }
            batch.values[n] = vals[(e, 0)].f64();

            let mu_row: Vec<T> = mu.row(e).to_vec();
            let sampled = policy::sample_action(&mu_row, &log_std, &mut w.rng);
            for i in 0..a_dim {
                batch.actions_pre[(n, i)] = sampled.pre_clip[i];
            }
            batch.logp_old[n] = sampled.log_prob;

            let mut action = [0.0f64; 4];
            for i in 0..a_dim.min(4) {
                action[i] = sampled.action[i].f64();
            }

            match env::env_step(&mut w.state, env_params, reward_cfg, &action) {
                Ok(out) => {
                    batch.rewards[n] = out.reward.total;
                    w.episode_return += out.reward.total;
                    w.episode_len += 1;
                    w.observe(env_params, norm);

                    if out.terminated {
                        batch.dones[n] = Done::Terminated;
                        batch.next_values[n] = 0.0;
                        batch.episodes.push(EpisodeStat {
                            ret: w.episode_return,
                            len: w.episode_len,
                            terminated: true,
                        });
                        w.reset(env_params, norm);
                        w.episode_start = Some(n + 1);
                    } else if out.truncated {
                        batch.dones[n] = Done::Truncated;
                        batch.next_values[n] =
                            value_of(params, &w.history, tau).f64();
                        batch.episodes.push(EpisodeStat {
                            ret: w.episode_return,
                            len: w.episode_len,
                            terminated: false,
                        });
                        w.reset(env_params, norm);
                        w.episode_start = Some(n + 1);
                    }
                }
                Err(_) => {
                    // divergence: drop the whole episode from this rollout
                    batch.divergences += 1;
                    let start = w.episode_start.unwrap_or(n);
                    for m in start..=n {
                        batch.valid[m] = false;
                        batch.dones[m] = Done::Terminated;
                    }
                    w.reset(env_params, norm);
                    w.episode_start = Some(n + 1);
                }
            }
        }
    }

    // bootstrap values for rollout ends and interior steps
    for (e, w) in workers.iter().enumerate() {
        let last = e * t_roll + t_roll - 1;
        if batch.dones[last] == Done::No && batch.valid[last] {
            batch.next_values[last] = value_of(params, &w.history, tau).f64();
        }
    }
    for e in 0..n_envs {
        for step in 0..t_roll - 1 {
            let n = e * t_roll + step;
            if batch.dones[n] == Done::No {
                batch.next_values[n] = batch.values[n + 1];
            }
        }
    }

    // per-worker raw-frame shards for the ordered normalizer merge
    for w in workers.iter_mut() {
        let mut shard = RunningNorm::new(f);
        shard.update_batch(w.raw_frames.iter());
        batch.norm_shards.push(shard);
        w.raw_frames.clear();
    }

    batch
}

fn value_of<T: Real>(params: &PolicyParams<T>, history: &HistoryBuffer, tau: T) -> T {
    let out = policy::evaluate_single(params, &history.as_matrix(), tau, ModeSelect::Soft);
    out.value
}

/// GAE over the collected batch, then update-level advantage standardization.
pub fn compute_batch_advantages<T: Real>(batch: &mut RolloutBatch<T>, cfg: &PpoConfig) {
    for e in 0..batch.num_envs {
        let s = e * batch.steps;
        let t = batch.steps;
        let (adv, ret) = gae_from_next_values(
            &batch.rewards[s..s + t],
            &batch.values[s..s + t],
            &batch.next_values[s..s + t],
            &batch.dones[s..s + t],
            cfg.gamma,
            cfg.lambda,
        );
        batch.advantages[s..s + t].copy_from_slice(&adv);
        batch.returns[s..s + t].copy_from_slice(&ret);
    }
    // standardize over valid transitions only
    let idx: Vec<usize> = (0..batch.len()).filter(|&n| batch.valid[n]).collect();
    let mut vals: Vec<f64> = idx.iter().map(|&n| batch.advantages[n]).collect();
    standardize(&mut vals);
    for (j, &n) in idx.iter().enumerate() {
        batch.advantages[n] = vals[j];
    }
}

// ---------------------------------------------------------------------------
// Training loop
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Default)]
pub struct UpdateStats {
    pub loss: LossStats,
    pub grad_norm: f64,
    pub minibatches: usize,
}

/// One PPO update: epochs of shuffled minibatches with Adam steps.
pub fn ppo_update<T: Real>(
    params: &mut PolicyParams<T>,
    adam: &mut Adam<T>,
    batch: &RolloutBatch<T>,
    cfg: &PpoConfig,
    tau: T,
    rng: &mut ChaCha8Rng,
) -> Result<UpdateStats, LearnError> {
    let mut indices: Vec<usize> = (0..batch.len()).filter(|&n| batch.valid[n]).collect();
    let mut stats = UpdateStats::default();
    let mut usage_sum = vec![0.0; params.cfg.modes];
    let mut usage_n = 0.0;
    let mut grad_norm_sum = 0.0;
    let mut agg = LossStats::default();

    for _epoch in 0..cfg.epochs {
        indices.shuffle(rng);
        for chunk in indices.chunks(cfg.minibatch_size) {
            let mb = batch.gather(chunk);
            let mut tape = Tape::new();
            let (loss, param_ids, s) = build_loss(&mut tape, params, &mb, tau, cfg);
            if !s.total.is_finite() {
                eprintln!(
                    "non-finite loss diagnostics: surrogate {} value {} entropy {} mode {} \
                     ratio_mean {} params_finite {}",
                    s.surrogate,
                    s.value_loss,
                    s.entropy,
                    s.mode_loss,
                    s.ratio_mean,
                    params
                        .tensors()
                        .iter()
                        .all(|(_, t)| t.iter().all(|x| x.f64().is_finite()))
                );
                return Err(LearnError::NonFiniteLoss { update: adam.t });
            }
            let grads_all = tape.backward(loss);
            let mut grads: Vec<Mat<T>> = param_ids
                .iter()
                .enumerate()
                .map(|(i, &id)| match grads_all.get(id) {
                    Some(g) => g.clone(),
                    None => Mat::zeros(params.tensors()[i].1.dim()),
                })
                .collect();
            drop(tape);
            let norm = clip_global_norm(&mut grads, cfg.grad_clip);
            if !norm.is_finite() {
                return Err(LearnError::NonFiniteLoss { update: adam.t });
            }
            adam.step(params, &grads, cfg.learning_rate);

            let b = chunk.len() as f64;
            for (k, u) in s.usage.iter().enumerate() {
                usage_sum[k] += u * b;
            }
            usage_n += b;
            grad_norm_sum += norm;
            agg.total += s.total;
            agg.surrogate += s.surrogate;
            agg.value_loss += s.value_loss;
            agg.entropy += s.entropy;
            agg.mode_loss += s.mode_loss;
            agg.ratio_mean += s.ratio_mean;
            agg.clip_fraction += s.clip_fraction;
            stats.minibatches += 1;
        }
    }

    let mbs = stats.minibatches.max(1) as f64;
    agg.total /= mbs;
    agg.surrogate /= mbs;
    agg.value_loss /= mbs;
    agg.entropy /= mbs;
    agg.mode_loss /= mbs;
    agg.ratio_mean /= mbs;
    agg.clip_fraction /= mbs;
    agg.usage = usage_sum.iter().map(|u| u / usage_n.max(1.0)).collect();
    stats.loss = agg;
    stats.grad_norm = grad_norm_sum / mbs;
    Ok(stats)
}

#[derive(Debug, Clone)]
pub struct TrainReport {
    pub updates: u64,
    pub global_steps: u64,
    pub final_mean_return: f64,
    pub final_rsr_train: f64,
    pub final_usage: Vec<f64>,
    pub checkpoint_path: std::path::PathBuf,
    pub metrics_path: std::path::PathBuf,
}

/// Full training run: collect, estimate advantages, update, anneal, log, and
/// checkpoint. Writes `config.ini`, `metrics.csv`, and `checkpoint_*.rcvf` /
/// `checkpoint_final.rcvf` under `out_dir`.
pub fn train(config: &Config, out_dir: &Path) -> Result<TrainReport, LearnError> {
    std::fs::create_dir_all(out_dir)?;
    std::fs::write(out_dir.join("config.ini"), config.render())?;

    let run_inner = || train_inner(config, out_dir);
    if config.run.threads > 0 {
        let pool = rayon::ThreadPoolBuilder::new()
            .num_threads(config.run.threads)
            .build()
            .expect("failed to build thread pool");
        pool.install(run_inner)
    } else {
        run_inner()
    }
}

fn train_inner(config: &Config, out_dir: &Path) -> Result<TrainReport, LearnError> {
    let env_params = &config.env;
    let reward_cfg = &config.reward;
    let net_cfg = &config.net;
    let ppo = &config.ppo;
    let master = config.run.seed;

    let mut params = PolicyParams::<f32>::init(net_cfg, master);
    let mut adam = Adam::new(&params);
    let mut norm = RunningNorm::new(net_cfg.frame_dim);
    let mut trainer_rng = ChaCha8Rng::seed_from_u64(derive_seed(master, 0));
    let mut workers: Vec<EnvWorker> = (0..ppo.num_envs)
        .map(|e| {
            EnvWorker::new(
                env_params,
                &norm,
                net_cfg.history,
                derive_seed(master, 1000 + e as u64),
            )
        })
        .collect();

    let metrics_path = out_dir.join("metrics.csv");
    let mut metrics = std::fs::File::create(&metrics_path)?;
    let usage_cols: Vec<String> = (1..=net_cfg.modes).map(|k| format!("usage_{k}")).collect();
    writeln!(
        metrics,
        "update,step,tau,mean_return,mean_ep_len,rsr_train,episodes,divergences,loss_total,\
         loss_surrogate,loss_value,loss_mode,entropy,clip_fraction,ratio_mean,grad_norm,\
         log_std_mean,{}",
        usage_cols.join(",")
    )?;

    let mut recent: std::collections::VecDeque<EpisodeStat> =
        std::collections::VecDeque::with_capacity(100);
    let mut global_steps: u64 = 0;
    let mut update: u64 = 0;
    let mut tau = anneal_tau(0, ppo.total_steps, net_cfg.tau_start, net_cfg.tau_end);
    let final_path = out_dir.join("checkpoint_final.rcvf");
    let mut last_stats = UpdateStats::default();

    while global_steps < ppo.total_steps {
        let mut batch = collect_rollouts(
            &mut workers,
            &params,
            &norm,
            env_params,
            reward_cfg,
            ppo,
            tau as f32,
        );
        global_steps += (ppo.num_envs * ppo.rollout_len) as u64;

        // ordered shard merge into the shared normalizer
        for shard in &batch.norm_shards {
            norm.merge(shard);
        }

        compute_batch_advantages(&mut batch, ppo);
        for ep in &batch.episodes {
            if recent.len() == 100 {
                recent.pop_front();
            }
            recent.push_back(*ep);
        }

        let stats = match ppo_update(&mut params, &mut adam, &batch, ppo, tau as f32, &mut trainer_rng)
        {
            Ok(s) => s,
            Err(e) => {
                // keep whatever checkpoint was last written and bail
                return Err(e);
            }
        };

        update += 1;
        tau = anneal_tau(global_steps, ppo.total_steps, net_cfg.tau_start, net_cfg.tau_end);

        let mean_return = mean_of(recent.iter().map(|e| e.ret));
        let mean_len = mean_of(recent.iter().map(|e| e.len as f64));
        let rsr_train = if recent.is_empty() {
            0.0
        } else {
            recent.iter().filter(|e| !e.terminated).count() as f64 / recent.len() as f64
        };
        let log_std_mean = params.log_std.iter().map(|x| *x as f64).sum::<f64>()
            / params.log_std.len() as f64;
        let usage_str = stats
            .loss
            .usage
            .iter()
            .map(|u| u.to_string())
            .collect::<Vec<_>>()
            .join(",");
        writeln!(
            metrics,
            "{update},{global_steps},{tau},{mean_return},{mean_len},{rsr_train},{},{},{},{},{},{},{},{},{},{},{log_std_mean},{usage_str}",
            batch.episodes.len(),
            batch.divergences,
            stats.loss.total,
            stats.loss.surrogate,
            stats.loss.value_loss,
            stats.loss.mode_loss,
            stats.loss.entropy,
            stats.loss.clip_fraction,
            stats.loss.ratio_mean,
            stats.grad_norm,
        )?;
        println!(
            "update {update} step {global_steps} tau {tau:.3} return {mean_return:.1} \
             rsr {rsr_train:.2} loss {:.4} clip {:.3}",
            stats.loss.total, stats.loss.clip_fraction
        );

        if update % config.run.checkpoint_interval == 0 {
            let path = out_dir.join(format!("checkpoint_{update:06}.rcvf"));
            save_state(config, &params, &adam, &norm, global_steps, update, tau, &path)?;
        }
        last_stats = stats;
    }

    save_state(
        config,
        &params,
        &adam,
        &norm,
        global_steps,
        update,
        tau,
        &final_path,
    )?;

    let mean_return = mean_of(recent.iter().map(|e| e.ret));
    let rsr_train = if recent.is_empty() {
        0.0
    } else {
        recent.iter().filter(|e| !e.terminated).count() as f64 / recent.len() as f64
    };
    Ok(TrainReport {
        updates: update,
        global_steps,
        final_mean_return: mean_return,
        final_rsr_train: rsr_train,
        final_usage: last_stats.loss.usage.clone(),
        checkpoint_path: final_path,
        metrics_path,
    })
}

fn mean_of<I: Iterator<Item = f64>>(values: I) -> f64 {
    let mut sum = 0.0;
    let mut n = 0.0;
    for v in values {
        sum += v;
        n += 1.0;
    }
    if n > 0.0 {
        sum / n
    } else {
        0.0
    }
}

#[allow(clippy::too_many_arguments)]
fn save_state(
    config: &Config,
    params: &PolicyParams<f32>,
    adam: &Adam<f32>,
    norm: &RunningNorm,
    global_steps: u64,
    update: u64,
    tau: f64,
    path: &Path,
) -> Result<(), LearnError> {
    let state = TrainerState {
        config: config.clone(),
        params: params.clone(),
        adam_m: adam.m.clone(),
        adam_v: adam.v.clone(),
        adam_t: adam.t,
        norm: norm.clone(),
        global_step: global_steps,
        update,
        tau,
        seed: config.run.seed,
    };
    checkpoint::save(&state, path)?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn gae_hand_example() {
        // r = (1,1), V = (0,0,0), gamma=0.99, lambda=0.95
        let (adv, ret) = compute_gae(
            &[1.0, 1.0],
            &[0.0, 0.0, 0.0],
            &[Done::No, Done::No],
            0.99,
            0.95,
        )
        .unwrap();
        assert!((adv[0] - 1.9405).abs() < 1e-12);
        assert!((adv[1] - 1.0).abs() < 1e-12);
        assert_eq!(adv, ret);
    }

    #[test]
    fn gae_lambda_zero_is_one_step() {
        let rewards = [0.5, -1.0, 2.0];
        let values = [0.3, 0.7, -0.2, 0.4];
        let dones = [Done::No, Done::No, Done::No];
        let (adv, _) = compute_gae(&rewards, &values, &dones, 0.9, 0.0).unwrap();
        for t in 0..3 {
            let delta = rewards[t] + 0.9 * values[t + 1] - values[t];
            assert!((adv[t] - delta).abs() < 1e-12);
        }
    }

    #[test]
    fn gae_matches_bruteforce_on_random_sequences() {
        use rand::Rng;
        let mut rng = ChaCha8Rng::seed_from_u64(17);
        for _case in 0..1000 {
            let t_len = 50;
            let rewards: Vec<f64> = (0..t_len).map(|_| rng.gen_range(-2.0..2.0)).collect();
            let values: Vec<f64> = (0..=t_len).map(|_| rng.gen_range(-1.0..1.0)).collect();
            let dones: Vec<Done> = (0..t_len)
                .map(|_| match rng.gen_range(0..10) {
                    0 => Done::Terminated,
                    1 => Done::Truncated,
                    _ => Done::No,
                })
                .collect();
            let gamma = rng.gen_range(0.9..1.0);
            let lambda = rng.gen_range(0.8..1.0);
            let (adv, ret) = compute_gae(&rewards, &values, &dones, gamma, lambda).unwrap();

            // brute-force expansion of the truncated sum
            for t in 0..t_len {
                let mut expect = 0.0;
                let mut factor = 1.0;
                for l in 0..t_len - t {
                    let u = t + l;
                    let next_v = if dones[u] == Done::Terminated {
                        0.0
                    } else {
                        values[u + 1]
                    };
                    let delta = rewards[u] + gamma * next_v - values[u];
                    expect += factor * delta;
                    if dones[u] != Done::No {
                        break;
                    }
                    factor *= gamma * lambda;
                }
                let denom = expect.abs().max(1.0);
                assert!(
                    (adv[t] - expect).abs() / denom < 1e-10,
                    "t={t}: {} vs {}",
                    adv[t],
                    expect
                );
                assert!((ret[t] - (adv[t] + values[t])).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn gae_rejects_nan() {
        assert!(compute_gae(&[f64::NAN], &[0.0, 0.0], &[Done::No], 0.99, 0.95).is_err());
    }

    #[test]
    fn standardize_moments() {
        use rand::Rng;
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mut xs: Vec<f64> = (0..257).map(|_| rng.gen_range(-10.0..30.0)).collect();
        standardize(&mut xs);
        let n = xs.len() as f64;
        let mean = xs.iter().sum::<f64>() / n;
        let std = (xs.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / n).sqrt();
        assert!(mean.abs() < 1e-9);
        assert!((std - 1.0).abs() < 1e-6);
    }

    #[test]
    fn mode_loss_uniform_and_collapsed() {
        let k = 4;
        let u_min = 0.1;
        let uniform = Array2::from_elem((32, k), 0.25);
        let l = mode_loss(&uniform, u_min);
        assert!((l - (4.0f64).ln()).abs() < 1e-9);

        let mut onehot = Array2::zeros((32, k));
        for r in 0..32 {
            onehot[(r, 0)] = 1.0;
        }
        let l = mode_loss(&onehot, u_min);
        assert!((l - 0.3).abs() < 1e-9);
    }

    #[test]
    fn mode_loss_hinge_fires_iff_usage_below_umin() {
        use rand::Rng;
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        for _ in 0..200 {
            let mut p = Array2::zeros((16, 3));
            for r in 0..16 {
                let a: f64 = rng.gen_range(0.0..1.0);
                let b: f64 = rng.gen_range(0.0..1.0 - a);
                p[(r, 0)] = a;
                p[(r, 1)] = b;
                p[(r, 2)] = 1.0 - a - b;
            }
            let u_min = rng.gen_range(0.05..0.3);
            let usage: Vec<f64> = (0..3).map(|k| p.column(k).sum() / 16.0).collect();
            let entropy: f64 = p
                .rows()
                .into_iter()
                .map(|r| -r.iter().filter(|&&x| x > 0.0).map(|&x| x * x.ln()).sum::<f64>())
                .sum::<f64>()
                / 16.0;
            let hinge_expected: f64 = usage.iter().map(|&u| (u_min - u).max(0.0)).sum();
            let total = mode_loss(&p, u_min);
            assert!((total - entropy - hinge_expected).abs() < 1e-12);
            if usage.iter().all(|&u| u >= u_min) {
                assert!((total - entropy).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn anneal_endpoints_and_midpoint() {
        assert_eq!(anneal_tau(0, 1000, 1.0, 0.1), 1.0);
        assert_eq!(anneal_tau(1000, 1000, 1.0, 0.1), 0.1);
        assert!((anneal_tau(500, 1000, 1.0, 0.1) - 0.55).abs() < 1e-12);
    }

    #[test]
    fn grad_clip_bounds_norm() {
        let mut grads = vec![
            Mat::<f64>::from_elem((3, 3), 2.0),
            Mat::<f64>::from_elem((2, 1), -1.5),
        ];
        let before = clip_global_norm(&mut grads, 0.5);
        assert!(before > 0.5);
        let after: f64 = grads
            .iter()
            .flat_map(|g| g.iter())
            .map(|&x| x * x)
            .sum::<f64>()
            .sqrt();
        assert!(after <= 0.5 + 1e-9);

        // already-small gradients are untouched
        let mut grads = vec![Mat::<f64>::from_elem((2, 2), 1e-3)];
        let orig = grads[0].clone();
        clip_global_norm(&mut grads, 0.5);
        assert_eq!(grads[0], orig);
    }

    #[test]
    fn derive_seed_spreads_streams() {
        let a = derive_seed(42, 0);
        let b = derive_seed(42, 1);
        let c = derive_seed(43, 0);
        assert_ne!(a, b);
        assert_ne!(a, c);
        assert_eq!(a, derive_seed(42, 0));
    }
}
