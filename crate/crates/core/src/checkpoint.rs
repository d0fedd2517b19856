//! Versioned binary checkpoints.
//!
//! Layout (all integers little-endian):
//!
//! ```text
//! "SACN" | u32 version | 32-byte sha256 of the config text | u32 config len
//! | config text | u32 param count
//! | per param: u32 name len, name, u32 rank, u32 dims[rank], f32 values
//! | u64 optimizer step | per param: f32 m values, f32 v values
//! | u32 classes | f64 kappa_max | f64 kappa[classes]
//! | u32 history rows | rows of (u32 epoch, u32 class, f64 iou, f64 kappa)
//! | u32 next epoch | 32-byte rng seed | u128 rng word pos | u64 rng stream
//! | f64 best mean dsc | u64 global step
//! ```
//!
//! Parameter and moment values are stored as f32. A store trained in f32
//! round-trips bit-identically; save -> load -> save is byte-identical in
//! either numeric mode.

use crate::error::{Result, SacError};
use crate::losses::{KappaRecord, KappaState};
use crate::model::SacNetConfig;
use crate::nn::ParamStore;
use crate::optim::AdamWState;
use crate::tensor::{Scalar, Tensor};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use sha2::{Digest, Sha256};
use std::path::Path;

pub const CHECKPOINT_MAGIC: &[u8; 4] = b"SACN";
pub const CHECKPOINT_VERSION: u32 = 1;

/// Serializable training state, independent of the numeric mode.
#[derive(Debug, Clone)]
pub struct Checkpoint {
    pub config_text: String,
    pub params: Vec<(String, Vec<usize>, Vec<f32>)>,
    pub opt_step: u64,
    pub opt_m: Vec<Vec<f32>>,
    pub opt_v: Vec<Vec<f32>>,
    pub kappa: KappaState,
    pub next_epoch: u32,
    pub rng_seed: [u8; 32],
    pub rng_word_pos: u128,
    pub rng_stream: u64,
    pub best_mean_dsc: f64,
    pub global_step: u64,
}

impl Checkpoint {
    pub fn capture<F: Scalar>(
        config: &SacNetConfig,
        store: &ParamStore<F>,
        opt: &AdamWState<F>,
        kappa: &KappaState,
        next_epoch: usize,
        rng: &ChaCha8Rng,
        best_mean_dsc: f64,
        global_step: u64,
    ) -> Self {
        let to32 = |v: &[F]| v.iter().map(|x| x.real() as f32).collect::<Vec<f32>>();
        Checkpoint {
            config_text: config.canonical_string(),
            params: store
                .iter()
                .map(|(_, name, t)| (name.to_string(), t.shape().to_vec(), to32(t.data())))
                .collect(),
            opt_step: opt.step,
            opt_m: opt.m.iter().map(|m| to32(m)).collect(),
            opt_v: opt.v.iter().map(|v| to32(v)).collect(),
            kappa: kappa.clone(),
            next_epoch: next_epoch as u32,
            rng_seed: rng.get_seed(),
            rng_word_pos: rng.get_word_pos(),
            rng_stream: rng.get_stream(),
            best_mean_dsc,
            global_step,
        }
    }

    pub fn model_config(&self) -> Result<SacNetConfig> {
        crate::config::parse_model_config(&self.config_text)
    }

    /// Copies parameters into an existing store (widening to its mode).
    pub fn restore_params<F: Scalar>(&self, store: &mut ParamStore<F>) -> Result<()> {
        if store.len() != self.params.len() {
            return Err(SacError::InvalidArgument {
                op: "checkpoint",
                reason: format!(
                    "{} parameters in file, {} in model",
                    self.params.len(),
                    store.len()
                ),
            });
        }
        for (id, (name, shape, values)) in store
            .ids()
            .collect::<Vec<_>>()
            .into_iter()
            .zip(self.params.iter())
        {
            if store.name(id) != name || store.get(id).shape() != shape.as_slice() {
                return Err(SacError::InvalidArgument {
                    op: "checkpoint",
                    reason: format!("parameter {name} does not match the model layout"),
                });
            }
            let data: Vec<F> = values.iter().map(|&v| F::from_real(v as f64)).collect();
            *store.get_mut(id) = Tensor::new(shape.clone(), data)?.requires_grad(true);
        }
        Ok(())
    }

    pub fn restore_optimizer<F: Scalar>(&self, opt: &mut AdamWState<F>) -> Result<()> {
        if opt.m.len() != self.opt_m.len() {
            return Err(SacError::InvalidArgument {
                op: "checkpoint",
                reason: "optimizer state size mismatch".into(),
            });
        }
        opt.step = self.opt_step;
        let widen = |src: &[f32]| src.iter().map(|&v| F::from_real(v as f64)).collect::<Vec<F>>();
        for (dst, src) in opt.m.iter_mut().zip(self.opt_m.iter()) {
            *dst = widen(src);
        }
        for (dst, src) in opt.v.iter_mut().zip(self.opt_v.iter()) {
            *dst = widen(src);
        }
        Ok(())
    }

    pub fn restore_rng(&self) -> ChaCha8Rng {
        let mut rng = ChaCha8Rng::from_seed(self.rng_seed);
        rng.set_stream(self.rng_stream);
        rng.set_word_pos(self.rng_word_pos);
        rng
    }
}

struct Writer {
    buf: Vec<u8>,
}

impl Writer {
    fn u32(&mut self, v: u32) {
        self.buf.extend_from_slice(&v.to_le_bytes());
    }
    fn u64(&mut self, v: u64) {
        self.buf.extend_from_slice(&v.to_le_bytes());
    }
    fn u128(&mut self, v: u128) {
        self.buf.extend_from_slice(&v.to_le_bytes());
    }
    fn f32(&mut self, v: f32) {
        self.buf.extend_from_slice(&v.to_le_bytes());
    }
    fn f64(&mut self, v: f64) {
        self.buf.extend_from_slice(&v.to_le_bytes());
    }
    fn bytes(&mut self, v: &[u8]) {
        self.buf.extend_from_slice(v);
    }
}

pub fn save(path: &Path, ckpt: &Checkpoint) -> Result<()> {
    let mut w = Writer { buf: Vec::new() };
    w.bytes(CHECKPOINT_MAGIC);
    w.u32(CHECKPOINT_VERSION);
    let digest = Sha256::digest(ckpt.config_text.as_bytes());
    w.bytes(&digest);
    w.u32(ckpt.config_text.len() as u32);
    w.bytes(ckpt.config_text.as_bytes());

    w.u32(ckpt.params.len() as u32);
    for (name, shape, values) in &ckpt.params {
        w.u32(name.len() as u32);
        w.bytes(name.as_bytes());
        w.u32(shape.len() as u32);
        for &d in shape {
            w.u32(d as u32);
        }
        for &v in values {
            w.f32(v);
        }
    }

    w.u64(ckpt.opt_step);
    for (m, v) in ckpt.opt_m.iter().zip(&ckpt.opt_v) {
        for &x in m {
            w.f32(x);
        }
        for &x in v {
            w.f32(x);
        }
    }

    w.u32(ckpt.kappa.classes() as u32);
    w.f64(ckpt.kappa.kappa_max());
    for &k in ckpt.kappa.kappa() {
        w.f64(k);
    }
    w.u32(ckpt.kappa.history().len() as u32);
    for r in ckpt.kappa.history() {
        w.u32(r.epoch as u32);
        w.u32(r.class as u32);
        w.f64(r.iou);
        w.f64(r.kappa);
    }

    w.u32(ckpt.next_epoch);
    w.bytes(&ckpt.rng_seed);
    w.u128(ckpt.rng_word_pos);
    w.u64(ckpt.rng_stream);
    w.f64(ckpt.best_mean_dsc);
    w.u64(ckpt.global_step);

    std::fs::write(path, &w.buf).map_err(|e| SacError::io(path.display().to_string(), e))
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
    path: &'a Path,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.pos + n > self.buf.len() {
            return Err(SacError::Format {
                path: self.path.display().to_string(),
                reason: "unexpected end of file".into(),
            });
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }
    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }
    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }
    fn u128(&mut self) -> Result<u128> {
        Ok(u128::from_le_bytes(self.take(16)?.try_into().unwrap()))
    }
    fn f32(&mut self) -> Result<f32> {
        Ok(f32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }
    fn f64(&mut self) -> Result<f64> {
        Ok(f64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }
    fn fail<T>(&self, reason: impl Into<String>) -> Result<T> {
        Err(SacError::Format {
            path: self.path.display().to_string(),
            reason: reason.into(),
        })
    }
}

pub fn load(path: &Path) -> Result<Checkpoint> {
    let data = std::fs::read(path).map_err(|e| SacError::io(path.display().to_string(), e))?;
    let mut r = Reader {
        buf: &data,
        pos: 0,
        path,
    };
    if r.take(4)? != CHECKPOINT_MAGIC {
        return r.fail("bad magic, not a checkpoint");
    }
    let version = r.u32()?;
    if version != CHECKPOINT_VERSION {
        return r.fail(format!("unsupported version {version}"));
    }
    let digest: [u8; 32] = r.take(32)?.try_into().unwrap();
    let cfg_len = r.u32()? as usize;
    let config_text = String::from_utf8(r.take(cfg_len)?.to_vec())
        .map_err(|_| SacError::Format {
            path: path.display().to_string(),
            reason: "config text is not UTF-8".into(),
        })?;
    if Sha256::digest(config_text.as_bytes()).as_slice() != digest {
        return r.fail("config digest does not match the stored config");
    }

    let n_params = r.u32()? as usize;
    let mut params = Vec::with_capacity(n_params);
    for _ in 0..n_params {
        let name_len = r.u32()? as usize;
        let name = String::from_utf8(r.take(name_len)?.to_vec())
            .map_err(|_| SacError::Format {
                path: path.display().to_string(),
                reason: "parameter name is not UTF-8".into(),
            })?;
        let rank = r.u32()? as usize;
        let mut shape = Vec::with_capacity(rank);
        for _ in 0..rank {
            shape.push(r.u32()? as usize);
        }
        let n: usize = shape.iter().product();
        let mut values = Vec::with_capacity(n);
        for _ in 0..n {
            values.push(r.f32()?);
        }
        params.push((name, shape, values));
    }

    let opt_step = r.u64()?;
    let mut opt_m = Vec::with_capacity(n_params);
    let mut opt_v = Vec::with_capacity(n_params);
    for (_, shape, _) in &params {
        let n: usize = shape.iter().product();
        let mut m = Vec::with_capacity(n);
        for _ in 0..n {
            m.push(r.f32()?);
        }
        let mut v = Vec::with_capacity(n);
        for _ in 0..n {
            v.push(r.f32()?);
        }
        opt_m.push(m);
        opt_v.push(v);
    }

    let classes = r.u32()? as usize;
    let kappa_max = r.f64()?;
    let mut kappa = Vec::with_capacity(classes);
    for _ in 0..classes {
        kappa.push(r.f64()?);
    }
    let rows = r.u32()? as usize;
    let mut history = Vec::with_capacity(rows);
    for _ in 0..rows {
        history.push(KappaRecord {
            epoch: r.u32()? as usize,
            class: r.u32()? as usize,
            iou: r.f64()?,
            kappa: r.f64()?,
        });
    }

    let next_epoch = r.u32()?;
    let rng_seed: [u8; 32] = r.take(32)?.try_into().unwrap();
    let rng_word_pos = r.u128()?;
    let rng_stream = r.u64()?;
    let best_mean_dsc = r.f64()?;
    let global_step = r.u64()?;
    if r.pos != data.len() {
        return r.fail("trailing bytes after checkpoint payload");
    }

    Ok(Checkpoint {
        config_text,
        params,
        opt_step,
        opt_m,
        opt_v,
        kappa: KappaState::from_parts(kappa, kappa_max, history),
        next_epoch,
        rng_seed,
        rng_word_pos,
        rng_stream,
        best_mean_dsc,
        global_step,
    })
}

/// Errors when the checkpoint was produced for a different model config.
pub fn check_digest(ckpt: &Checkpoint, expected: &SacNetConfig) -> Result<()> {
    if ckpt.config_text != expected.canonical_string() {
        return Err(SacError::DigestMismatch);
    }
    Ok(())
}
