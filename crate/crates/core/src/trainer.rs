//! AdamW with decoupled decay, cosine learning-rate schedule, the training
//! loop, and the checkpoint file format.
//!
//! Checkpoint layout (all integers and floats little-endian):
//!
//! ```text
//! magic            8 bytes  "SCGMAE01"
//! config_len       u32
//! config           config_len bytes of TOML (canonical serialization)
//! config_sha256    32 bytes
//! weights          u64 count, f32 × count
//! translation_diag u8
//! codebook         u64 count, f32 × count
//! optim_step       u64
//! m_w, v_w         u64 count, f32 × count (each)
//! m_c, v_c         u64 count, f32 × count (each)
//! rng              32-byte seed, u64 stream, u128 word position
//! history          u64 count, then per record: u64 step, f64 × 5 (lr, recon, equ, sym, total)
//! ```

use std::f64::consts::PI;
use std::fs::{self, File, OpenOptions};
use std::io::Write;
use std::path::{Path, PathBuf};

use rand::SeedableRng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::codebook::{Codebook, GridShape, InitMode};
use crate::dataset::{sample_pair, AugConfig, Dataset, SeededRng};
use crate::error::{Error, Result};
use crate::model::{ConstraintVariant, KernelBank, ModelConfig};
use crate::objective::{batch_loss, GradientSet, LossBreakdown, ObjectiveConfig, TrainingPair};
use crate::tensor::Kernels;

pub const CHECKPOINT_MAGIC: &[u8; 8] = b"SCGMAE01";
pub const PAPER_TOTAL_STEPS: usize = 40_000;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct CodebookConfig {
    pub grid_t: usize,
    pub grid_r: usize,
    pub init: InitMode,
    pub init_noise: f64,
}

impl Default for CodebookConfig {
    fn default() -> Self {
        Self {
            grid_t: 5,
            grid_r: 16,
            init: InitMode::Identity,
            init_noise: crate::codebook::IDENTITY_INIT_NOISE,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AdamConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    /// Decoupled decay on kernel weights.
    pub weight_decay: f64,
    /// Decoupled decay on codebook matrices.
    pub codebook_weight_decay: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 0.01,
            codebook_weight_decay: 0.0,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub total_steps: usize,
    pub batch_size: usize,
    pub lr0: f64,
    pub lr_min: f64,
    pub seed: u64,
    /// Save a checkpoint every this many steps (0 disables periodic saves).
    pub checkpoint_every: usize,
    /// Loss records kept inside checkpoints.
    pub history_tail: usize,
    /// Evaluate batch pairs on the rayon pool. Reduction order is fixed, so
    /// results do not depend on this flag or the thread count.
    pub parallel: bool,
    pub objective: ObjectiveConfig,
    pub adam: AdamConfig,
    pub model: ModelConfig,
    pub codebook: CodebookConfig,
    pub aug: AugConfig,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            total_steps: 8000,
            batch_size: 32,
            lr0: 0.005,
            lr_min: 0.0,
            seed: 0,
            checkpoint_every: 1000,
            history_tail: 1000,
            parallel: true,
            objective: ObjectiveConfig::default(),
            adam: AdamConfig::default(),
            model: ModelConfig::default(),
            codebook: CodebookConfig::default(),
            aug: AugConfig::default(),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.total_steps == 0 {
            return Err(Error::Config("total_steps must be >= 1".into()));
        }
        if self.batch_size == 0 {
            return Err(Error::Config("batch_size must be >= 1".into()));
        }
        if !(self.lr0 >= 0.0 && self.lr_min >= 0.0 && self.lr_min <= self.lr0) {
            return Err(Error::Config(format!("need 0 <= lr_min ({}) <= lr0 ({})", self.lr_min, self.lr0)));
        }
        let a = &self.adam;
        if !((0.0..1.0).contains(&a.beta1) && (0.0..1.0).contains(&a.beta2) && a.eps > 0.0) {
            return Err(Error::Config("adam betas must lie in [0, 1) and eps > 0".into()));
        }
        if a.weight_decay < 0.0 || a.codebook_weight_decay < 0.0 {
            return Err(Error::Config("weight decay must be >= 0".into()));
        }
        self.objective.validate()?;
        self.model.validate()?;
        self.aug.validate()?;
        self.grid_shape().validate().map_err(|e| Error::Config(e.to_string()))
    }

    pub fn grid_shape(&self) -> GridShape {
        GridShape {
            modules: self.model.modules,
            module_len: self.model.module_len,
            grid_t: self.codebook.grid_t,
            grid_r: self.codebook.grid_r,
            stride: self.model.stride,
        }
    }

    /// Canonical text form; the checkpoint header and the config hash use it.
    pub fn canonical_text(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::Config(format!("cannot serialize config: {e}")))
    }

    pub fn from_text(text: &str) -> Result<Self> {
        toml::from_str(text).map_err(|e| Error::Config(e.to_string()))
    }

    pub fn hash(&self) -> Result<String> {
        Ok(hex::encode(Sha256::digest(self.canonical_text()?.as_bytes())))
    }
}

/// `lr_min + ½(lr0 − lr_min)(1 + cos(π·step/total))`, clamped to `lr_min`
/// past the end.
pub fn cosine_lr(step: usize, total_steps: usize, lr0: f64, lr_min: f64) -> f64 {
    if total_steps == 0 || step >= total_steps {
        return lr_min;
    }
    lr_min + 0.5 * (lr0 - lr_min) * (1.0 + (PI * step as f64 / total_steps as f64).cos())
}

/// First and second moments for one parameter block.
#[derive(Clone, Debug, PartialEq)]
pub struct Moments {
    pub m: Vec<f32>,
    pub v: Vec<f32>,
}

impl Moments {
    pub fn zeros(len: usize) -> Self {
        Self {
            m: vec![0.0; len],
            v: vec![0.0; len],
        }
    }
}

/// One AdamW update on a parameter block. `step` is the 1-based index of
/// this update (used for bias correction).
pub fn adamw_step(
    params: &mut [f32],
    grads: &[f32],
    moments: &mut Moments,
    step: u64,
    lr: f64,
    hyper: &AdamConfig,
    weight_decay: f64,
) -> Result<()> {
    if params.len() != grads.len() || moments.m.len() != params.len() || moments.v.len() != params.len() {
        return Err(Error::shape(
            "adamw_step",
            format!(
                "params {}, grads {}, moments {}/{}",
                params.len(),
                grads.len(),
                moments.m.len(),
                moments.v.len()
            ),
        ));
    }
    if !(lr >= 0.0) || step == 0 {
        return Err(Error::Precondition(format!("adamw_step needs lr >= 0 and step >= 1 (lr={lr}, step={step})")));
    }
    let (b1, b2) = (hyper.beta1, hyper.beta2);
    let c1 = 1.0 - b1.powi(step.min(i32::MAX as u64) as i32);
    let c2 = 1.0 - b2.powi(step.min(i32::MAX as u64) as i32);
    for (((p, &g), m), v) in params.iter_mut().zip(grads).zip(&mut moments.m).zip(&mut moments.v) {
        let g = g as f64;
        let mn = b1 * *m as f64 + (1.0 - b1) * g;
        let vn = b2 * *v as f64 + (1.0 - b2) * g * g;
        *m = mn as f32;
        *v = vn as f32;
        let (m_hat, v_hat) = (mn / c1, vn / c2);
        let pv = *p as f64;
        let update = lr * (m_hat / (v_hat.sqrt() + hyper.eps) + weight_decay * pv);
        *p = (pv - update) as f32;
    }
    Ok(())
}

#[derive(Clone, Debug, PartialEq)]
pub struct OptimState {
    pub step: u64,
    pub weights: Moments,
    pub codebook: Moments,
}

impl OptimState {
    pub fn new(weights: usize, codebook: usize) -> Self {
        Self {
            step: 0,
            weights: Moments::zeros(weights),
            codebook: Moments::zeros(codebook),
        }
    }

    /// Applies one update to both parameter blocks. Non-finite gradients are
    /// rejected before anything changes; non-finite results are reported
    /// after the fact, so callers that need the old state should update a copy.
    pub fn apply(
        &mut self,
        bank: &mut KernelBank<f32>,
        cb: &mut Codebook<f32>,
        grads: &GradientSet<f32>,
        lr: f64,
        hyper: &AdamConfig,
    ) -> Result<()> {
        let next = self.step + 1;
        for (name, g) in [("kernel weights", &grads.d_weights), ("codebook", &grads.d_codebook)] {
            if let Some(i) = g.iter().position(|x| !x.is_finite()) {
                return Err(Error::NonFinite(format!("gradient of {name} at step {next}, entry {i}")));
            }
        }
        adamw_step(bank.weights_mut(), &grads.d_weights, &mut self.weights, next, lr, hyper, hyper.weight_decay)?;
        adamw_step(
            cb.matrices_mut(),
            &grads.d_codebook,
            &mut self.codebook,
            next,
            lr,
            hyper,
            hyper.codebook_weight_decay,
        )?;
        self.step = next;
        for (name, p) in [("kernel weights", bank.weights()), ("codebook", cb.matrices())] {
            if let Some(i) = p.iter().position(|x| !x.is_finite()) {
                return Err(Error::NonFinite(format!("{name} after update at step {next}, entry {i}")));
            }
        }
        Ok(())
    }
}

/// Position of the pair-sampling generator.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct RngState {
    pub seed: [u8; 32],
    pub stream: u64,
    pub word_pos: u128,
}

impl RngState {
    pub fn capture(rng: &SeededRng) -> Self {
        Self {
            seed: rng.get_seed(),
            stream: rng.get_stream(),
            word_pos: rng.get_word_pos(),
        }
    }

    pub fn restore(&self) -> SeededRng {
        let mut rng = SeededRng::from_seed(self.seed);
        rng.set_stream(self.stream);
        rng.set_word_pos(self.word_pos);
        rng
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LossRecord {
    pub step: u64,
    pub lr: f64,
    pub recon: f64,
    pub equ: f64,
    pub sym: f64,
    pub total: f64,
}

impl LossRecord {
    fn new(step: u64, lr: f64, b: &LossBreakdown) -> Self {
        Self {
            step,
            lr,
            recon: b.recon,
            equ: b.equ,
            sym: b.sym,
            total: b.total,
        }
    }

    pub const CSV_HEADER: &'static str = "step,lr,recon,equ,sym,total";

    pub fn csv_row(&self) -> String {
        format!(
            "{},{:e},{:e},{:e},{:e},{:e}",
            self.step, self.lr, self.recon, self.equ, self.sym, self.total
        )
    }
}

/// Trailing moving average of the total loss.
pub fn smoothed_totals(history: &[LossRecord], window: usize) -> Vec<f64> {
    let window = window.max(1);
    let mut out = Vec::with_capacity(history.len());
    let mut acc = 0.0;
    for (i, r) in history.iter().enumerate() {
        acc += r.total;
        if i >= window {
            acc -= history[i - window].total;
        }
        out.push(acc / (i + 1).min(window) as f64);
    }
    out
}

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub config: TrainConfig,
    pub bank: KernelBank<f32>,
    pub codebook: Codebook<f32>,
    pub optim: OptimState,
    pub rng: RngState,
    pub history: Vec<LossRecord>,
}

impl Checkpoint {
    /// Fresh parameters drawn from `config.seed`.
    pub fn initialize(config: &TrainConfig) -> Result<Self> {
        config.validate()?;
        let mut init = SeededRng::seed_from_u64(config.seed);
        let bank = KernelBank::<f32>::random(&config.model, &mut init)?;
        let mut codebook = Codebook::<f32>::with_noise(config.grid_shape(), config.codebook.init, config.codebook.init_noise, &mut init)?;
        codebook.set_translation_diagonal(config.model.constraint_variant == ConstraintVariant::PerKernelTransPlusModuleTransrot);
        let mut sampler = SeededRng::seed_from_u64(config.seed);
        sampler.set_stream(config.aug.seed.wrapping_add(1));
        Ok(Self {
            optim: OptimState::new(bank.weights().len(), codebook.matrices().len()),
            config: config.clone(),
            bank,
            codebook,
            rng: RngState::capture(&sampler),
            history: Vec::new(),
        })
    }

    pub fn step(&self) -> u64 {
        self.optim.step
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let text = self.config.canonical_text()?;
        let mut out = Vec::with_capacity(64 + 4 * (self.bank.weights().len() + 3 * self.codebook.matrices().len()));
        out.extend_from_slice(CHECKPOINT_MAGIC);
        out.extend_from_slice(&(text.len() as u32).to_le_bytes());
        out.extend_from_slice(text.as_bytes());
        out.extend_from_slice(&Sha256::digest(text.as_bytes()));
        put_f32s(&mut out, self.bank.weights());
        out.push(self.codebook.translation_diagonal() as u8);
        put_f32s(&mut out, self.codebook.matrices());
        out.extend_from_slice(&self.optim.step.to_le_bytes());
        for block in [&self.optim.weights, &self.optim.codebook] {
            put_f32s(&mut out, &block.m);
            put_f32s(&mut out, &block.v);
        }
        out.extend_from_slice(&self.rng.seed);
        out.extend_from_slice(&self.rng.stream.to_le_bytes());
        out.extend_from_slice(&self.rng.word_pos.to_le_bytes());
        out.extend_from_slice(&(self.history.len() as u64).to_le_bytes());
        for r in &self.history {
            out.extend_from_slice(&r.step.to_le_bytes());
            for x in [r.lr, r.recon, r.equ, r.sym, r.total] {
                out.extend_from_slice(&x.to_le_bytes());
            }
        }
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8], path: &Path) -> Result<Self> {
        let mut r = ByteReader { bytes, pos: 0, path };
        let magic = r.take(8)?;
        if magic != CHECKPOINT_MAGIC {
            return Err(Error::format(
                path,
                format!(
                    "bad magic: expected {:?}, found {:?}",
                    String::from_utf8_lossy(CHECKPOINT_MAGIC),
                    String::from_utf8_lossy(magic)
                ),
            ));
        }
        let len = r.u32()? as usize;
        let text = std::str::from_utf8(r.take(len)?).map_err(|_| Error::format(path, "config header is not UTF-8"))?;
        let stored = r.take(32)?;
        if Sha256::digest(text.as_bytes()).as_slice() != stored {
            return Err(Error::format(path, "config header does not match its stored hash"));
        }
        let config = TrainConfig::from_text(text).map_err(|e| Error::format(path, format!("config header: {e}")))?;
        let weights = r.f32s()?;
        let diag = r.take(1)?[0] != 0;
        let matrices = r.f32s()?;
        let step = r.u64()?;
        let weights_m = Moments { m: r.f32s()?, v: r.f32s()? };
        let codebook_m = Moments { m: r.f32s()?, v: r.f32s()? };
        let seed: [u8; 32] = r.take(32)?.try_into().expect("32 bytes");
        let stream = r.u64()?;
        let word_pos = u128::from_le_bytes(r.take(16)?.try_into().expect("16 bytes"));
        let n = r.u64()? as usize;
        let mut history = Vec::with_capacity(n.min(1 << 20));
        for _ in 0..n {
            let step = r.u64()?;
            let mut v = [0.0; 5];
            for x in &mut v {
                *x = r.f64()?;
            }
            history.push(LossRecord {
                step,
                lr: v[0],
                recon: v[1],
                equ: v[2],
                sym: v[3],
                total: v[4],
            });
        }
        if r.pos != bytes.len() {
            return Err(Error::format(path, format!("{} trailing bytes", bytes.len() - r.pos)));
        }

        let model = &config.model;
        let kernels = Kernels::from_vec(model.kernel_count(), model.in_channels, model.kernel_side, weights)
            .map_err(|e| Error::format(path, format!("kernel block: {e}")))?;
        let bank = KernelBank::from_kernels(model.modules, model.module_len, model.stride, kernels)
            .map_err(|e| Error::format(path, format!("kernel block: {e}")))?;
        let codebook = Codebook::from_parts(config.grid_shape(), matrices, diag)
            .map_err(|e| Error::format(path, format!("codebook block: {e}")))?;
        if weights_m.m.len() != bank.weights().len()
            || weights_m.v.len() != bank.weights().len()
            || codebook_m.m.len() != codebook.matrices().len()
            || codebook_m.v.len() != codebook.matrices().len()
        {
            return Err(Error::format(path, "optimizer moments do not match parameter sizes"));
        }
        Ok(Self {
            config,
            bank,
            codebook,
            optim: OptimState {
                step,
                weights: weights_m,
                codebook: codebook_m,
            },
            rng: RngState { seed, stream, word_pos },
            history,
        })
    }
}

fn put_f32s(out: &mut Vec<u8>, xs: &[f32]) {
    out.extend_from_slice(&(xs.len() as u64).to_le_bytes());
    for x in xs {
        out.extend_from_slice(&x.to_le_bytes());
    }
}

struct ByteReader<'a> {
    bytes: &'a [u8],
    pos: usize,
    path: &'a Path,
}

impl<'a> ByteReader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.bytes.len() - self.pos < n {
            return Err(Error::format(
                self.path,
                format!("truncated: needed {n} bytes at offset {}, {} left", self.pos, self.bytes.len() - self.pos),
            ));
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }

    fn f64(&mut self) -> Result<f64> {
        Ok(f64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }

    fn f32s(&mut self) -> Result<Vec<f32>> {
        let n = self.u64()? as usize;
        if n > (self.bytes.len() - self.pos) / 4 {
            return Err(Error::format(self.path, format!("truncated: array of {n} floats at offset {}", self.pos)));
        }
        Ok(self
            .take(4 * n)?
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")))
            .collect())
    }
}

pub fn save_checkpoint(path: impl AsRef<Path>, cp: &Checkpoint) -> Result<()> {
    let path = path.as_ref();
    let bytes = cp.to_bytes()?;
    let tmp = path.with_extension("tmp");
    fs::write(&tmp, &bytes).map_err(|e| Error::io(&tmp, e))?;
    fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
}

pub fn load_checkpoint(path: impl AsRef<Path>) -> Result<Checkpoint> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    Checkpoint::from_bytes(&bytes, path)
}

/// Where the training loop writes its artifacts.
#[derive(Clone, Debug, Default)]
pub struct TrainOutput {
    /// Directory for periodic, final and last-good checkpoints.
    pub checkpoint_dir: Option<PathBuf>,
    /// Loss CSV path (appended to when resuming).
    pub loss_csv: Option<PathBuf>,
}

/// Runs (or resumes) training until `config.total_steps`.
///
/// On a non-finite loss or gradient the last good state is written to
/// `last_good.ckpt` (when a checkpoint directory is set) and the error names
/// the failing step.
pub fn train(
    config: &TrainConfig,
    dataset: &Dataset,
    resume: Option<Checkpoint>,
    output: &TrainOutput,
    mut progress: impl FnMut(&LossRecord),
) -> Result<Checkpoint> {
    config.validate()?;
    if dataset.is_empty() {
        return Err(Error::Precondition("training dataset is empty".into()));
    }
    if dataset.channels() != config.model.in_channels {
        return Err(Error::Config(format!(
            "dataset has {} channels but model.in_channels = {}",
            dataset.channels(),
            config.model.in_channels
        )));
    }
    let mut cp = match resume {
        Some(cp) => {
            let (current, stored) = (config.hash()?, cp.config.hash()?);
            if current != stored {
                return Err(Error::ConfigHashMismatch {
                    checkpoint: stored,
                    current,
                });
            }
            cp
        }
        None => Checkpoint::initialize(config)?,
    };
    if let Some(dir) = &output.checkpoint_dir {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    let mut csv = match &output.loss_csv {
        Some(path) => {
            let fresh = cp.step() == 0 || !path.exists();
            let mut f = if fresh { File::create(path) } else { OpenOptions::new().append(true).open(path) }
                .map_err(|e| Error::io(path, e))?;
            if fresh {
                writeln!(f, "{}", LossRecord::CSV_HEADER).map_err(|e| Error::io(path, e))?;
            }
            Some((f, path.clone()))
        }
        None => None,
    };

    let mut rng = cp.rng.restore();
    while (cp.step() as usize) < config.total_steps {
        let step = cp.step() as usize;
        let lr = cosine_lr(step, config.total_steps, config.lr0, config.lr_min);
        let pairs = (0..config.batch_size)
            .map(|_| {
                let (image, moved, delta) = sample_pair(dataset, &config.aug, &mut rng)?;
                Ok(TrainingPair { image, moved, delta })
            })
            .collect::<Result<Vec<_>>>()?;
        let outcome = batch_loss(&cp.bank, &cp.codebook, &pairs, &config.objective, config.parallel).and_then(|(b, g)| {
            if b.is_finite() {
                Ok((b, g))
            } else {
                Err(Error::NonFinite(format!("loss at step {} ({b:?})", step + 1)))
            }
        });
        let (breakdown, grads) = match outcome {
            Ok(v) => v,
            Err(e) => return Err(abort(&cp, output, e)),
        };
        let mut next_bank = cp.bank.clone();
        let mut next_cb = cp.codebook.clone();
        let mut next_optim = cp.optim.clone();
        if let Err(e) = next_optim.apply(&mut next_bank, &mut next_cb, &grads, lr, &config.adam) {
            return Err(abort(&cp, output, e));
        }
        cp.bank = next_bank;
        cp.codebook = next_cb;
        cp.optim = next_optim;
        cp.rng = RngState::capture(&rng);

        let record = LossRecord::new(cp.step(), lr, &breakdown);
        if let Some((f, path)) = &mut csv {
            writeln!(f, "{}", record.csv_row()).map_err(|e| Error::io(path.as_path(), e))?;
        }
        cp.history.push(record);
        if cp.history.len() > config.history_tail {
            let excess = cp.history.len() - config.history_tail;
            cp.history.drain(..excess);
        }
        progress(&record);

        if let Some(dir) = &output.checkpoint_dir {
            if config.checkpoint_every > 0 && cp.step() as usize % config.checkpoint_every == 0 {
                save_checkpoint(dir.join(format!("step_{:06}.ckpt", cp.step())), &cp)?;
            }
        }
    }
    if let Some(dir) = &output.checkpoint_dir {
        save_checkpoint(dir.join("final.ckpt"), &cp)?;
    }
    Ok(cp)
}

fn abort(last_good: &Checkpoint, output: &TrainOutput, err: Error) -> Error {
    if let Some(dir) = &output.checkpoint_dir {
        if let Err(save_err) = save_checkpoint(dir.join("last_good.ckpt"), last_good) {
            return Error::NonFinite(format!("{err}; saving last-good checkpoint also failed: {save_err}"));
        }
    }
    err
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Tensor3;
    use rand::Rng;

    fn hyper(wd: f64) -> AdamConfig {
        AdamConfig {
            weight_decay: wd,
            ..Default::default()
        }
    }

    #[test]
    fn cosine_schedule_endpoints() {
        assert_eq!(cosine_lr(0, 100, 0.005, 0.0), 0.005);
        assert_eq!(cosine_lr(100, 100, 0.005, 0.0), 0.0);
        assert_eq!(cosine_lr(500, 100, 0.005, 0.001), 0.001);
        assert!((cosine_lr(50, 100, 0.004, 0.002) - 0.003).abs() < 1e-15);
        let lrs: Vec<f64> = (0..=100).map(|s| cosine_lr(s, 100, 1.0, 0.0)).collect();
        assert!(lrs.windows(2).all(|w| w[1] <= w[0]));
    }

    #[test]
    fn decay_only_update() {
        let mut p = vec![1.0f32, -2.0, 0.5];
        let before = p.clone();
        let mut m = Moments::zeros(3);
        adamw_step(&mut p, &[0.0; 3], &mut m, 1, 0.1, &hyper(0.01), 0.01).unwrap();
        for (a, b) in p.iter().zip(&before) {
            assert!((*a as f64 - *b as f64 * (1.0 - 0.1 * 0.01)).abs() < 1e-7);
        }
    }

    #[test]
    fn first_step_is_normalized_gradient() {
        let mut p = vec![0.0f32; 4];
        let g = [0.3f32, -2.0, 1e-3, 5.0];
        let mut m = Moments::zeros(4);
        adamw_step(&mut p, &g, &mut m, 1, 0.01, &hyper(0.0), 0.0).unwrap();
        for (pi, gi) in p.iter().zip(g) {
            let expect = -0.01 * gi as f64 / (gi.abs() as f64 + 1e-8);
            assert!((*pi as f64 - expect).abs() < 1e-8, "{pi} vs {expect}");
        }
    }

    #[test]
    fn zero_lr_keeps_params_but_updates_moments() {
        let mut p = vec![1.0f32, 2.0];
        let mut m = Moments::zeros(2);
        adamw_step(&mut p, &[1.0, -1.0], &mut m, 1, 0.0, &hyper(0.01), 0.01).unwrap();
        assert_eq!(p, vec![1.0, 2.0]);
        assert!(m.m.iter().all(|&x| x != 0.0));
        assert!(m.v.iter().all(|&x| x > 0.0));
    }

    #[test]
    fn adamw_rejects_shape_mismatch() {
        let mut p = vec![0.0f32; 2];
        let mut m = Moments::zeros(2);
        assert!(adamw_step(&mut p, &[0.0; 3], &mut m, 1, 0.1, &hyper(0.0), 0.0).is_err());
    }

    #[test]
    fn decoupled_decay_product_law() {
        let p0 = vec![0.7f32, -1.3, 2.1];
        let mut p = p0.clone();
        let mut m = Moments::zeros(3);
        let mut factor = 1.0f64;
        for step in 1..=50u64 {
            let lr = cosine_lr(step as usize - 1, 50, 0.05, 0.0);
            adamw_step(&mut p, &[0.0; 3], &mut m, step, lr, &hyper(0.01), 0.01).unwrap();
            factor *= 1.0 - lr * 0.01;
        }
        let norm = |v: &[f32]| v.iter().map(|x| (*x as f64).powi(2)).sum::<f64>().sqrt();
        assert!((norm(&p) - norm(&p0) * factor).abs() < 1e-5);
    }

    #[test]
    fn non_finite_gradient_names_block_and_leaves_state() {
        let cfg = tiny_config();
        let mut cp = Checkpoint::initialize(&cfg).unwrap();
        let mut grads = GradientSet::zeros_like(&cp.bank, &cp.codebook);
        grads.d_codebook[3] = f32::NAN;
        let before = cp.clone();
        let err = cp.optim.apply(&mut cp.bank, &mut cp.codebook, &grads, 0.1, &cfg.adam).unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("codebook") && msg.contains("step 1"), "{msg}");
        assert_eq!(cp, before);
    }

    fn tiny_config() -> TrainConfig {
        TrainConfig {
            total_steps: 6,
            batch_size: 3,
            checkpoint_every: 2,
            model: ModelConfig {
                modules: 2,
                module_len: 2,
                kernel_side: 3,
                stride: 2,
                in_channels: 1,
                constraint_variant: ConstraintVariant::PerModuleTransrot,
            },
            codebook: CodebookConfig {
                grid_t: 3,
                grid_r: 4,
                ..Default::default()
            },
            ..Default::default()
        }
    }

    fn tiny_dataset(n: usize) -> Dataset {
        let mut rng = SeededRng::seed_from_u64(11);
        let images = (0..n)
            .map(|_| Tensor3::from_vec(1, 10, 10, (0..100).map(|_| rng.random_range(0.0..1.0)).collect()).unwrap())
            .collect();
        Dataset::new(images, vec![0; n]).unwrap()
    }

    #[test]
    fn checkpoint_roundtrip_is_byte_identical() {
        let cfg = tiny_config();
        let cp = train(&cfg, &tiny_dataset(5), None, &TrainOutput::default(), |_| {}).unwrap();
        let bytes = cp.to_bytes().unwrap();
        let back = Checkpoint::from_bytes(&bytes, Path::new("mem")).unwrap();
        assert_eq!(back, cp);
        assert_eq!(back.to_bytes().unwrap(), bytes);
    }

    #[test]
    fn corrupted_and_truncated_checkpoints_are_rejected() {
        let cp = Checkpoint::initialize(&tiny_config()).unwrap();
        let mut bytes = cp.to_bytes().unwrap();
        let cut = Checkpoint::from_bytes(&bytes[..bytes.len() - 3], Path::new("mem")).unwrap_err();
        assert!(cut.to_string().contains("truncated"), "{cut}");
        bytes[0] = b'X';
        let err = Checkpoint::from_bytes(&bytes, Path::new("mem")).unwrap_err();
        assert!(err.to_string().contains("SCGMAE01"), "{err}");
    }

    #[test]
    fn resume_matches_uninterrupted_run_and_checks_hash() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = tiny_config();
        let data = tiny_dataset(5);
        let out = TrainOutput {
            checkpoint_dir: Some(dir.path().to_path_buf()),
            loss_csv: None,
        };
        let full = train(&cfg, &data, None, &out, |_| {}).unwrap();
        let mid = load_checkpoint(dir.path().join("step_000004.ckpt")).unwrap();
        assert_eq!(mid.step(), 4);
        let resumed = train(&cfg, &data, Some(mid.clone()), &TrainOutput::default(), |_| {}).unwrap();
        assert_eq!(resumed.to_bytes().unwrap(), full.to_bytes().unwrap());

        let other = TrainConfig { lr0: 0.001, ..cfg };
        match train(&other, &data, Some(mid), &TrainOutput::default(), |_| {}).unwrap_err() {
            Error::ConfigHashMismatch { checkpoint, current } => {
                assert_ne!(checkpoint, current);
                assert_eq!(checkpoint.len(), 64);
            }
            other => panic!("unexpected {other}"),
        }
    }

    #[test]
    fn training_is_deterministic_and_parallel_agnostic() {
        let cfg = tiny_config();
        let data = tiny_dataset(7);
        let a = train(&cfg, &data, None, &TrainOutput::default(), |_| {}).unwrap();
        let b = train(&cfg, &data, None, &TrainOutput::default(), |_| {}).unwrap();
        assert_eq!(a.to_bytes().unwrap(), b.to_bytes().unwrap());
        let seq = TrainConfig { parallel: false, ..cfg };
        let c = train(&seq, &data, None, &TrainOutput::default(), |_| {}).unwrap();
        assert_eq!(a.bank, c.bank);
        assert_eq!(a.codebook, c.codebook);
    }

    #[test]
    fn ablation_leaves_codebook_bit_unchanged() {
        let cfg = TrainConfig {
            objective: ObjectiveConfig::ablation(),
            ..tiny_config()
        };
        let init = Checkpoint::initialize(&cfg).unwrap();
        let done = train(&cfg, &tiny_dataset(5), None, &TrainOutput::default(), |_| {}).unwrap();
        assert_eq!(done.codebook.matrices(), init.codebook.matrices());
        assert_ne!(done.bank.weights(), init.bank.weights());
    }

    #[test]
    fn translation_diagonal_survives_training() {
        let mut cfg = tiny_config();
        cfg.model.constraint_variant = ConstraintVariant::PerKernelTransPlusModuleTransrot;
        cfg.codebook.init = InitMode::Random;
        let done = train(&cfg, &tiny_dataset(5), None, &TrainOutput::default(), |_| {}).unwrap();
        let cb = &done.codebook;
        let l = cb.module_len();
        for node in 0..cb.shape().nodes_per_module() {
            for a in 0..l {
                for b in 0..l {
                    if cb.is_masked(node, a, b) {
                        for i in 0..cb.modules() {
                            assert_eq!(cb.matrix(i, node)[a * l + b], 0.0);
                        }
                    }
                }
            }
        }
    }

    #[test]
    fn writes_csv_and_checkpoints() {
        let dir = tempfile::tempdir().unwrap();
        let out = TrainOutput {
            checkpoint_dir: Some(dir.path().join("ckpt")),
            loss_csv: Some(dir.path().join("loss.csv")),
        };
        let cfg = tiny_config();
        let cp = train(&cfg, &tiny_dataset(4), None, &out, |_| {}).unwrap();
        let csv = fs::read_to_string(dir.path().join("loss.csv")).unwrap();
        let lines: Vec<&str> = csv.lines().collect();
        assert_eq!(lines[0], LossRecord::CSV_HEADER);
        assert_eq!(lines.len(), 1 + cfg.total_steps);
        let steps: Vec<u64> = lines[1..].iter().map(|l| l.split(',').next().unwrap().parse().unwrap()).collect();
        assert_eq!(steps, (1..=cfg.total_steps as u64).collect::<Vec<_>>());
        for s in [2, 4, 6] {
            assert!(dir.path().join(format!("ckpt/step_{s:06}.ckpt")).exists());
        }
        let loaded = load_checkpoint(dir.path().join("ckpt/final.ckpt")).unwrap();
        assert_eq!(loaded, cp);
    }

    #[test]
    fn non_finite_data_aborts_with_last_good_checkpoint() {
        let dir = tempfile::tempdir().unwrap();
        let out = TrainOutput {
            checkpoint_dir: Some(dir.path().to_path_buf()),
            loss_csv: None,
        };
        let mut cfg = tiny_config();
        cfg.lr0 = 1e30;
        cfg.adam.weight_decay = 1e10;
        let err = train(&cfg, &tiny_dataset(4), None, &out, |_| {}).unwrap_err();
        assert!(matches!(err, Error::NonFinite(_)), "{err}");
        let good = load_checkpoint(dir.path().join("last_good.ckpt")).unwrap();
        assert!(good.bank.weights().iter().all(|w| w.is_finite()));
    }

    #[test]
    fn smoothing_window() {
        let h: Vec<LossRecord> = (0..4)
            .map(|i| LossRecord {
                step: i,
                lr: 0.0,
                recon: 0.0,
                equ: 0.0,
                sym: 0.0,
                total: i as f64,
            })
            .collect();
        assert_eq!(smoothed_totals(&h, 2), vec![0.0, 0.5, 1.5, 2.5]);
    }
}
