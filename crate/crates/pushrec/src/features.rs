//! Observation frames, the causal history buffer, and running-statistics
//! normalization.
//!
//! Frame layout (length 18 + K_c):
//!
//! | index          | entry                                  |
//! |----------------|----------------------------------------|
//! | 0..4           | joint positions q1, q2, q3, q4         |
//! | 4..8           | joint velocities dq1, dq2, dq3, dq4    |
//! | 8, 9           | projected gravity sin(phi), cos(phi)   |
//! | 10             | torso angular velocity phi_dot         |
//! | 11, 12         | hip linear velocity vx, vz             |
//! | 13             | foot contact flag                      |
//! | 14..14+K_c     | hand-to-region distances (capped)      |
//! | 14+K_c..18+K_c | previous action                        |

use ndarray::Array2;

use crate::env::{self, EnvParams, EnvState};

/// Entries in a frame before the contact distances and previous action.
pub const FRAME_BASE: usize = 14;
pub const ACTION_DIM: usize = 4;

pub fn frame_len(params: &EnvParams) -> usize {
    FRAME_BASE + params.num_contact_regions() + ACTION_DIM
}

pub type ObservationFrame = Vec<f64>;

/// Assemble one raw (unnormalized) observation frame from the environment
/// state. Contact distances are Euclidean hand-to-region distances capped at
/// d_max; with no wall every distance reads the d_max sentinel.
pub fn build_frame(state: &EnvState, params: &EnvParams) -> ObservationFrame {
    let mut f = Vec::with_capacity(frame_len(params));
    f.extend_from_slice(&[state.q[0], state.q[1], state.q[2], state.q4]);
    f.extend_from_slice(&[state.dq[0], state.dq[1], state.dq[2], state.q4_vel]);
    let phi = env::tilt(state);
    f.push(phi.sin());
    f.push(phi.cos());
    f.push(env::tilt_rate(state));
    let hip_v = env::hip_velocity(state, params);
    f.push(hip_v[0]);
    f.push(hip_v[1]);
    f.push(env::foot_contact(state));
    let hand = env::hand_position(state, params);
    for &h in &params.contact_heights {
        let d = if params.wall_present {
            let dx = params.wall_x - hand[0];
            let dz = h - hand[1];
            (dx * dx + dz * dz).sqrt().min(params.d_max)
        } else {
            params.d_max
        };
        f.push(d);
    }
    f.extend_from_slice(&state.prev_action);
    f
}

/// Rolling window of the last H frames, oldest first on read-out. Slots
/// before the first H observations are zero frames.
#[derive(Debug, Clone, PartialEq)]
pub struct HistoryBuffer {
    frames: Vec<ObservationFrame>,
    head: usize,
    filled: usize,
    capacity: usize,
    frame_len: usize,
}

impl HistoryBuffer {
    pub fn new(capacity: usize, frame_len: usize) -> Self {
        assert!(capacity > 0);
        HistoryBuffer {
            frames: vec![vec![0.0; frame_len]; capacity],
            head: 0,
            filled: 0,
            capacity,
            frame_len,
        }
    }

    pub fn capacity(&self) -> usize {
        self.capacity
    }

    pub fn len(&self) -> usize {
        self.filled
    }

    pub fn is_empty(&self) -> bool {
        self.filled == 0
    }

    pub fn clear(&mut self) {
        for f in &mut self.frames {
            f.iter_mut().for_each(|x| *x = 0.0);
        }
        self.head = 0;
        self.filled = 0;
    }

    pub fn push(&mut self, frame: ObservationFrame) {
        assert_eq!(frame.len(), self.frame_len, "frame length mismatch");
        self.frames[self.head] = frame;
        self.head = (self.head + 1) % self.capacity;
        self.filled = (self.filled + 1).min(self.capacity);
    }

    /// Chronological read-out as an H x frame_len matrix (oldest first).
    pub fn as_matrix(&self) -> Array2<f64> {
        let mut out = Array2::zeros((self.capacity, self.frame_len));
        for i in 0..self.capacity {
            let src = (self.head + i) % self.capacity;
            for (c, &x) in self.frames[src].iter().enumerate() {
                out[(i, c)] = x;
            }
        }
        out
    }
}

/// Per-entry running statistics: count, mean, and uncentered second moment.
/// Frozen normalizers ignore updates (evaluation mode).
#[derive(Debug, Clone, PartialEq)]
pub struct RunningNorm {
    pub count: Vec<f64>,
    pub mean: Vec<f64>,
    /// Sum of squares per entry.
    pub sq_sum: Vec<f64>,
    pub clip: f64,
    pub eps: f64,
    pub frozen: bool,
}

impl RunningNorm {
    pub fn new(dim: usize) -> Self {
        RunningNorm {
            count: vec![0.0; dim],
            mean: vec![0.0; dim],
            sq_sum: vec![0.0; dim],
            clip: 10.0,
            eps: 1e-8,
            frozen: false,
        }
    }

    pub fn dim(&self) -> usize {
        self.mean.len()
    }

    /// Welford mean update; the second moment accumulates raw squares.
    pub fn update(&mut self, frame: &[f64]) {
        if self.frozen {
            return;
        }
        assert_eq!(frame.len(), self.dim());
        for (i, &x) in frame.iter().enumerate() {
            self.count[i] += 1.0;
            self.mean[i] += (x - self.mean[i]) / self.count[i];
            self.sq_sum[i] += x * x;
        }
    }

    pub fn update_batch<'a, I: IntoIterator<Item = &'a ObservationFrame>>(&mut self, frames: I) {
        for f in frames {
            self.update(f);
        }
    }

    pub fn variance(&self, i: usize) -> f64 {
        if self.count[i] == 0.0 {
            return 1.0;
        }
        (self.sq_sum[i] / self.count[i] - self.mean[i] * self.mean[i]).max(0.0)
    }

    /// Merge another shard into this one (fixed-order pairwise merge).
    pub fn merge(&mut self, other: &RunningNorm) {
        assert_eq!(self.dim(), other.dim());
        for i in 0..self.dim() {
            let n = self.count[i] + other.count[i];
            if n == 0.0 {
                continue;
            }
            self.mean[i] = (self.count[i] * self.mean[i] + other.count[i] * other.mean[i]) / n;
            self.sq_sum[i] += other.sq_sum[i];
            self.count[i] = n;
        }
    }

    /// (x - mean) / sqrt(var + eps), clipped. Entries with no observations
    /// yet pass through unchanged.
    pub fn apply(&self, frame: &[f64]) -> Vec<f64> {
        assert_eq!(frame.len(), self.dim());
        frame
            .iter()
            .enumerate()
            .map(|(i, &x)| {
                if self.count[i] == 0.0 {
                    return x;
                }
                let z = (x - self.mean[i]) / (self.variance(i) + self.eps).sqrt();
                z.clamp(-self.clip, self.clip)
            })
            .collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::env::{env_reset_seeded, PushEvent};

    fn quiet_params() -> EnvParams {
        EnvParams {
            reset_noise: 0.0,
            ..EnvParams::default()
        }
    }

    #[test]
    fn frame_layout_upright_rest() {
        let mut p = quiet_params();
        p.q_def = [0.0, 0.0, 0.0];
        let s = env_reset_seeded(&p, PushEvent::none(), 0);
        let f = build_frame(&s, &p);
        assert_eq!(f.len(), 22);
        assert_eq!(f[8], 0.0); // sin(phi)
        assert_eq!(f[9], 1.0); // cos(phi)
        for &v in &f[4..8] {
            assert_eq!(v, 0.0);
        }
        assert_eq!(f[10], 0.0);
        assert_eq!(f[11], 0.0);
        assert_eq!(f[12], 0.0);
        assert_eq!(f[13], 1.0); // foot planted
    }

    #[test]
    fn no_wall_distances_are_sentinel() {
        let p = quiet_params();
        let s = env_reset_seeded(&p, PushEvent::none(), 0);
        let f = build_frame(&s, &p);
        assert_eq!(&f[14..18], &[3.0, 3.0, 3.0, 3.0]);
    }

    #[test]
    fn hand_at_region_gives_zero_distance() {
        let mut p = quiet_params();
        p.wall_present = true;
        let s = env_reset_seeded(&p, PushEvent::none(), 0);
        let hand = env::hand_position(&s, &p);
        p.wall_x = hand[0];
        p.contact_heights = vec![0.4, hand[1], 1.0, 1.3];
        let f = build_frame(&s, &p);
        assert_eq!(f[15], 0.0);
    }

    #[test]
    fn sin_cos_identity_holds() {
        let p = quiet_params();
        let mut s = env_reset_seeded(&p, PushEvent::none(), 3);
        s.q = [0.3, -0.2, 0.7];
        let f = build_frame(&s, &p);
        assert!((f[8] * f[8] + f[9] * f[9] - 1.0).abs() < 1e-12);
    }

    #[test]
    fn ring_semantics_and_zero_prefill() {
        let h = 5;
        let mut buf = HistoryBuffer::new(h, 2);
        buf.push(vec![1.0, 1.0]);
        let m = buf.as_matrix();
        // H-1 zero frames then the single observation
        for i in 0..h - 1 {
            assert_eq!(m[(i, 0)], 0.0);
        }
        assert_eq!(m[(h - 1, 0)], 1.0);

        // push frames labeled 1..H+3; read-out must be 4..H+3
        let mut buf = HistoryBuffer::new(h, 2);
        for k in 1..=(h + 3) {
            buf.push(vec![k as f64, 0.0]);
        }
        let m = buf.as_matrix();
        for i in 0..h {
            assert_eq!(m[(i, 0)], (4 + i) as f64);
        }
    }

    #[test]
    fn paper_scale_history_capacity() {
        let buf = HistoryBuffer::new(50, 106);
        assert_eq!(buf.capacity(), 50);
    }

    #[test]
    fn buffer_readout_is_chronological() {
        let mut buf = HistoryBuffer::new(4, 1);
        for k in 0..11 {
            buf.push(vec![k as f64]);
            let m = buf.as_matrix();
            for i in 0..3 {
                assert!(m[(i, 0)] <= m[(i + 1, 0)] || m[(i, 0)] == 0.0);
            }
        }
    }

    #[test]
    fn norm_repeated_sample_has_zero_variance() {
        let mut n = RunningNorm::new(2);
        n.update(&[3.0, -1.0]);
        n.update(&[3.0, -1.0]);
        assert_eq!(n.mean, vec![3.0, -1.0]);
        assert_eq!(n.variance(0), 0.0);
        assert_eq!(n.variance(1), 0.0);
    }

    #[test]
    fn norm_merge_two_singletons() {
        let mut a = RunningNorm::new(1);
        a.update(&[0.0]);
        let mut b = RunningNorm::new(1);
        b.update(&[2.0]);
        a.merge(&b);
        assert_eq!(a.mean[0], 1.0);
        assert_eq!(a.variance(0), 1.0);
    }

    #[test]
    fn frozen_norm_ignores_updates() {
        let mut n = RunningNorm::new(1);
        n.update(&[1.0]);
        n.frozen = true;
        let before = n.clone();
        n.update(&[100.0]);
        assert_eq!(n, before);
    }

    #[test]
    fn apply_identity_at_zero_count_and_hand_case() {
        let n = RunningNorm::new(3);
        let x = vec![0.5, -2.0, 7.0];
        assert_eq!(n.apply(&x), x);

        // mean 5, population variance 4, input 9 -> (9-5)/2 = 2
        let mut n = RunningNorm::new(1);
        n.update(&[3.0]);
        n.update(&[7.0]);
        let z = n.apply(&[9.0]);
        assert!((z[0] - 2.0).abs() < 1e-6);

        // huge input clips at 10
        let z = n.apply(&[1e6]);
        assert_eq!(z[0], 10.0);
    }

    #[test]
    fn sequential_equals_batch_statistics() {
        use rand::Rng;
        use rand_chacha::rand_core::SeedableRng;
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(9);
        let frames: Vec<ObservationFrame> = (0..500)
            .map(|_| (0..4).map(|_| rng.gen_range(-5.0..5.0)).collect())
            .collect();

        let mut seq = RunningNorm::new(4);
        for f in &frames {
            seq.update(f);
        }
        // batch oracle: direct two-pass moments
        for i in 0..4 {
            let n = frames.len() as f64;
            let mean: f64 = frames.iter().map(|f| f[i]).sum::<f64>() / n;
            let var: f64 = frames.iter().map(|f| (f[i] - mean).powi(2)).sum::<f64>() / n;
            assert!((seq.mean[i] - mean).abs() / mean.abs().max(1.0) < 1e-10);
            assert!((seq.variance(i) - var).abs() / var.abs().max(1.0) < 1e-10);
        }
    }

    #[test]
    fn merge_is_order_insensitive_to_tolerance() {
        use rand::Rng;
        use rand_chacha::rand_core::SeedableRng;
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(10);
        let shards: Vec<RunningNorm> = (0..4)
            .map(|_| {
                let mut n = RunningNorm::new(2);
                for _ in 0..rng.gen_range(5..50) {
                    n.update(&[rng.gen_range(-2.0..2.0), rng.gen_range(0.0..9.0)]);
                }
                n
            })
            .collect();

        let mut fwd = shards[0].clone();
        for s in &shards[1..] {
            fwd.merge(s);
        }
        let mut rev = shards[3].clone();
        for s in shards[..3].iter().rev() {
            rev.merge(s);
        }
        for i in 0..2 {
            assert!((fwd.mean[i] - rev.mean[i]).abs() < 1e-12);
            assert!((fwd.variance(i) - rev.variance(i)).abs() < 1e-12);
            assert_eq!(fwd.count[i], rev.count[i]);
        }
    }

    #[test]
    fn frame_roundtrips_through_text() {
        let p = quiet_params();
        let mut s = env_reset_seeded(&p, PushEvent::none(), 5);
        s.q = [0.1234567890123, -0.9, 0.333];
        s.dq = [1.5, -2.25, 0.0625];
        let f = build_frame(&s, &p);
        let text: Vec<String> = f.iter().map(|x| format!("{x}")).collect();
        let back: Vec<f64> = text.iter().map(|t| t.parse().unwrap()).collect();
        assert_eq!(f, back);
    }
}
