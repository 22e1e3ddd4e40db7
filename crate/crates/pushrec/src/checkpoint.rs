//! Single-file binary checkpoints.
//!
//! Layout (all integers little-endian):
//!
//! ```text
//! "RCVF" magic | u32 version | u64 config-echo length | config echo (UTF-8)
//! u64 global_step | u64 update | u64 adam_t | f64 tau | u64 seed
//! u32 tensor count | per tensor: u32 name len, name, u32 rows, u32 cols,
//!                                rows*cols f32 payload
//! ```
//!
//! The tensor table covers policy parameters (census order), Adam moments
//! (`adam_m/...`, `adam_v/...`), and normalizer statistics (`norm/count`,
//! `norm/mean`, `norm/sq_sum`). Writes go to a temp file followed by an
//! atomic rename; loads refuse version mismatches and truncated payloads.

use std::io::Write;
use std::path::Path;

use crate::config::Config;
use crate::features::RunningNorm;
use crate::policy::PolicyParams;
use crate::tape::Mat;

pub const MAGIC: &[u8; 4] = b"RCVF";
pub const VERSION: u32 = 1;

#[derive(Debug, thiserror::Error)]
pub enum CheckpointError {
    #[error("io: {0}")]
    Io(#[from] std::io::Error),
    #[error("bad magic (not a checkpoint file)")]
    BadMagic,
    #[error("version mismatch: file has {found}, this build reads {expected}")]
    Version { found: u32, expected: u32 },
    #[error("payload mismatch: {0}")]
    Payload(String),
    #[error("config echo failed to parse: {0}")]
    ConfigEcho(String),
    #[error("tensor `{0}` missing from checkpoint")]
    MissingTensor(String),
    #[error("tensor `{name}` shape mismatch: file {found:?}, expected {expected:?}")]
    ShapeMismatch {
        name: String,
        found: [usize; 2],
        expected: [usize; 2],
    },
}

/// Everything the trainer persists.
#[derive(Debug, Clone)]
pub struct TrainerState {
    pub config: Config,
    pub params: PolicyParams<f32>,
    pub adam_m: Vec<Mat<f32>>,
    pub adam_v: Vec<Mat<f32>>,
    pub adam_t: u64,
    pub norm: RunningNorm,
    pub global_step: u64,
    pub update: u64,
    pub tau: f64,
    pub seed: u64,
}

fn put_u32(buf: &mut Vec<u8>, v: u32) {
    buf.extend_from_slice(&v.to_le_bytes());
}

fn put_u64(buf: &mut Vec<u8>, v: u64) {
    buf.extend_from_slice(&v.to_le_bytes());
}

fn put_f64(buf: &mut Vec<u8>, v: f64) {
    buf.extend_from_slice(&v.to_le_bytes());
}

fn put_tensor(buf: &mut Vec<u8>, name: &str, t: &Mat<f32>) {
    put_u32(buf, name.len() as u32);
    buf.extend_from_slice(name.as_bytes());
    put_u32(buf, t.nrows() as u32);
    put_u32(buf, t.ncols() as u32);
    for &x in t.iter() {
        buf.extend_from_slice(&x.to_le_bytes());
    }
}

fn vec_to_mat(v: &[f64]) -> Mat<f32> {
    Mat::from_shape_fn((1, v.len()), |(_, c)| v[c] as f32)
}

pub fn save(state: &TrainerState, path: &Path) -> Result<(), CheckpointError> {
    let mut buf = Vec::new();
    buf.extend_from_slice(MAGIC);
    put_u32(&mut buf, VERSION);
    let echo = state.config.render();
    put_u64(&mut buf, echo.len() as u64);
    buf.extend_from_slice(echo.as_bytes());
    put_u64(&mut buf, state.global_step);
    put_u64(&mut buf, state.update);
    put_u64(&mut buf, state.adam_t);
    put_f64(&mut buf, state.tau);
    put_u64(&mut buf, state.seed);

    let tensors = state.params.tensors();
    let count = tensors.len() * 3 + 3;
    put_u32(&mut buf, count as u32);
    for (name, t) in &tensors {
        put_tensor(&mut buf, name, t);
    }
    for (i, (name, _)) in tensors.iter().enumerate() {
        put_tensor(&mut buf, &format!("adam_m/{name}"), &state.adam_m[i]);
    }
    for (i, (name, _)) in tensors.iter().enumerate() {
        put_tensor(&mut buf, &format!("adam_v/{name}"), &state.adam_v[i]);
    }
    put_tensor(&mut buf, "norm/count", &vec_to_mat(&state.norm.count));
    put_tensor(&mut buf, "norm/mean", &vec_to_mat(&state.norm.mean));
    put_tensor(&mut buf, "norm/sq_sum", &vec_to_mat(&state.norm.sq_sum));

    // atomic replace-on-write
    let tmp = path.with_extension("tmp");
    {
        let mut f = std::fs::File::create(&tmp)?;
        f.write_all(&buf)?;
        f.sync_all()?;
    }
    std::fs::rename(&tmp, path)?;
    Ok(())
}

struct Cursor<'a> {
    data: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8], CheckpointError> {
        if self.pos + n > self.data.len() {
            return Err(CheckpointError::Payload(format!(
                "need {n} bytes at offset {}, file has {}",
                self.pos,
                self.data.len()
            )));
        }
        let s = &self.data[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32, CheckpointError> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn u64(&mut self) -> Result<u64, CheckpointError> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    fn f64(&mut self) -> Result<f64, CheckpointError> {
        Ok(f64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }
}

pub fn load(path: &Path) -> Result<TrainerState, CheckpointError> {
    let data = std::fs::read(path)?;
    let mut c = Cursor {
        data: &data,
        pos: 0,
    };
    if c.take(4)? != MAGIC {
        return Err(CheckpointError::BadMagic);
    }
    let version = c.u32()?;
    if version != VERSION {
        return Err(CheckpointError::Version {
            found: version,
            expected: VERSION,
        });
    }
    let echo_len = c.u64()? as usize;
    let echo = std::str::from_utf8(c.take(echo_len)?)
        .map_err(|e| CheckpointError::ConfigEcho(e.to_string()))?
        .to_string();
    let config = Config::parse(&echo).map_err(|e| CheckpointError::ConfigEcho(e.to_string()))?;
    let global_step = c.u64()?;
    let update = c.u64()?;
    let adam_t = c.u64()?;
    let tau = c.f64()?;
    let seed = c.u64()?;

    let count = c.u32()? as usize;
    let mut table: Vec<(String, Mat<f32>)> = Vec::with_capacity(count);
    for _ in 0..count {
        let name_len = c.u32()? as usize;
        let name = std::str::from_utf8(c.take(name_len)?)
            .map_err(|e| CheckpointError::Payload(e.to_string()))?
            .to_string();
        let rows = c.u32()? as usize;
        let cols = c.u32()? as usize;
        let bytes = c.take(rows * cols * 4)?;
        let mut t = Mat::<f32>::zeros((rows, cols));
        for (i, x) in t.iter_mut().enumerate() {
            *x = f32::from_le_bytes(bytes[i * 4..i * 4 + 4].try_into().unwrap());
        }
        table.push((name, t));
    }
    if c.pos != data.len() {
        return Err(CheckpointError::Payload(format!(
            "{} trailing bytes",
            data.len() - c.pos
        )));
    }

    let lookup = |name: &str| -> Result<&Mat<f32>, CheckpointError> {
        table
            .iter()
            .find(|(n, _)| n == name)
            .map(|(_, t)| t)
            .ok_or_else(|| CheckpointError::MissingTensor(name.to_string()))
    };

    // rebuild parameters over an initialized skeleton, checking shapes
    let mut params = PolicyParams::<f32>::init(&config.net, seed);
    {
        let names: Vec<String> = params.tensors().iter().map(|(n, _)| n.clone()).collect();
        for (i, t) in params.tensors_mut().into_iter().enumerate() {
            let stored = lookup(&names[i])?;
            if stored.dim() != t.dim() {
                return Err(CheckpointError::ShapeMismatch {
                    name: names[i].clone(),
                    found: [stored.nrows(), stored.ncols()],
                    expected: [t.nrows(), t.ncols()],
                });
            }
            t.assign(stored);
        }
        drop(names);
    }

    let names: Vec<String> = params.tensors().iter().map(|(n, _)| n.clone()).collect();
    let mut adam_m = Vec::with_capacity(names.len());
    let mut adam_v = Vec::with_capacity(names.len());
    for n in &names {
        adam_m.push(lookup(&format!("adam_m/{n}"))?.clone());
    }
    for n in &names {
        adam_v.push(lookup(&format!("adam_v/{n}"))?.clone());
    }

    let mut norm = RunningNorm::new(config.net.frame_dim);
    let read_vec = |name: &str| -> Result<Vec<f64>, CheckpointError> {
        let t = lookup(name)?;
        if t.len() != config.net.frame_dim {
            return Err(CheckpointError::ShapeMismatch {
                name: name.to_string(),
                found: [t.nrows(), t.ncols()],
                expected: [1, config.net.frame_dim],
            });
        }
        Ok(t.iter().map(|&x| x as f64).collect())
    };
    norm.count = read_vec("norm/count")?;
    norm.mean = read_vec("norm/mean")?;
    norm.sq_sum = read_vec("norm/sq_sum")?;

    Ok(TrainerState {
        config,
        params,
        adam_m,
        adam_v,
        adam_t,
        norm,
        global_step,
        update,
        tau,
        seed,
    })
}

/// Tensor census of a checkpoint file without loading it into a trainer:
/// (name, rows, cols) in file order, plus header fields.
pub struct Inspection {
    pub version: u32,
    pub config_echo: String,
    pub global_step: u64,
    pub update: u64,
    pub tau: f64,
    pub seed: u64,
    pub tensors: Vec<(String, usize, usize)>,
}

pub fn inspect(path: &Path) -> Result<Inspection, CheckpointError> {
    let state = load(path)?;
    let mut tensors: Vec<(String, usize, usize)> = state
        .params
        .tensors()
        .iter()
        .map(|(n, t)| (n.clone(), t.nrows(), t.ncols()))
        .collect();
    tensors.push(("norm/count".into(), 1, state.norm.count.len()));
    tensors.push(("norm/mean".into(), 1, state.norm.mean.len()));
    tensors.push(("norm/sq_sum".into(), 1, state.norm.sq_sum.len()));
    Ok(Inspection {
        version: VERSION,
        config_echo: state.config.render(),
        global_step: state.global_step,
        update: state.update,
        tau: state.tau,
        seed: state.seed,
        tensors,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::policy::ModeSelect;
    use crate::tape::Tape;

    fn small_state() -> TrainerState {
        let mut config = Config::parse("[net]\nd = 16\nlayers = 1\nheads = 2\nhistory = 4\n")
            .unwrap();
        config.run.seed = 3;
        let params = PolicyParams::<f32>::init(&config.net, 3);
        let adam = crate::learn::Adam::new(&params);
        let mut norm = RunningNorm::new(config.net.frame_dim);
        norm.update(&vec![0.5; config.net.frame_dim]);
        TrainerState {
            config,
            params,
            adam_m: adam.m,
            adam_v: adam.v,
            adam_t: 7,
            norm,
            global_step: 123,
            update: 4,
            tau: 0.77,
            seed: 3,
        }
    }

    #[test]
    fn roundtrip_preserves_forward_bitwise() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("ck.rcvf");
        let state = small_state();
        save(&state, &path).unwrap();
        let loaded = load(&path).unwrap();

        assert_eq!(loaded.global_step, 123);
        assert_eq!(loaded.update, 4);
        assert_eq!(loaded.adam_t, 7);
        assert_eq!(loaded.tau, 0.77);
        assert_eq!(loaded.params, state.params);

        // identical forward outputs on a fixed history
        let h = state.config.net.history;
        let f = state.config.net.frame_dim;
        let hist = Mat::<f32>::from_shape_fn((h, f), |(r, c)| ((r * 31 + c) as f32).sin());
        let run = |p: &PolicyParams<f32>| {
            let mut tape = Tape::new();
            let out = crate::policy::forward(&mut tape, p, hist.clone(), 0.7, ModeSelect::Soft);
            (
                tape.value(out.action_mean).clone(),
                tape.value(out.value).clone(),
                tape.value(out.posterior).clone(),
            )
        };
        let a = run(&state.params);
        let b = run(&loaded.params);
        assert_eq!(a.0, b.0);
        assert_eq!(a.1, b.1);
        assert_eq!(a.2, b.2);
    }

    #[test]
    fn truncated_file_is_refused_without_partial_state() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("ck.rcvf");
        save(&small_state(), &path).unwrap();
        let mut bytes = std::fs::read(&path).unwrap();
        bytes.truncate(bytes.len() - 37);
        let cut = dir.path().join("cut.rcvf");
        std::fs::write(&cut, &bytes).unwrap();
        match load(&cut) {
            Err(CheckpointError::Payload(_)) => {}
            other => panic!("expected payload error, got {other:?}"),
        }
    }

    #[test]
    fn version_bump_is_refused() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("ck.rcvf");
        save(&small_state(), &path).unwrap();
        let mut bytes = std::fs::read(&path).unwrap();
        bytes[4] = 99; // version field
        std::fs::write(&path, &bytes).unwrap();
        match load(&path) {
            Err(CheckpointError::Version { found: 99, .. }) => {}
            other => panic!("expected version error, got {other:?}"),
        }
    }

    #[test]
    fn bad_magic_is_refused() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("junk.rcvf");
        std::fs::write(&path, b"NOPE0000").unwrap();
        assert!(matches!(load(&path), Err(CheckpointError::BadMagic)));
    }

    #[test]
    fn config_echo_reparses() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("ck.rcvf");
        let state = small_state();
        save(&state, &path).unwrap();
        let insp = inspect(&path).unwrap();
        let cfg = Config::parse(&insp.config_echo).unwrap();
        assert_eq!(cfg, state.config);
        assert!(insp.tensors.iter().any(|(n, ..)| n == "log_std"));
    }
}
