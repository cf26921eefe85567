//! Reconstruction, equivariance and symmetry losses with hand-derived
//! gradients, and a central-difference gradient checker.
//!
//! Losses are sums over pixels and channels. For a pair `(I, I′ = L_δ I)`:
//!
//! ```text
//! recon = ‖D(E I) − I‖² + ‖D(E I′) − I′‖²
//! equ   = Σᵢ ‖f′⁽ⁱ⁾ − P_δ⁽ⁱ⁾ f⁽ⁱ⁾‖²
//! sym   = Σᵢ Σₘ Σₙ ‖eₘ − M⁽ⁱ⁾(δ*ₘₙ) eₙ‖²
//! total = recon + λ₁·equ + λ₂·sym
//! ```
//!
//! `W` enters both the encoder and the decoder, so its gradient has two
//! paths: `dW = corr(I, ∂L/∂f) + corr(R, 2f)` with `R` the residual image.

use rand::seq::index::sample;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::codebook::{Codebook, GridShape, InitMode, SymSign};
use crate::dataset::{AugConfig, SeededRng};
use crate::error::{Error, Result};
use crate::model::{KernelBank, ModelConfig, PredictionOp};
use crate::tensor::{all_finite, warp, FeatureMap, ImageTensor, Kernels, Patches, Real, Tensor3, TransformParams};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ObjectiveConfig {
    pub lambda1: f64,
    pub lambda2: f64,
    pub temperature: f64,
    pub sym_sign: SymSign,
    /// Differentiate through `δ*` instead of treating it as a constant.
    pub sym_full_gradient: bool,
}

impl Default for ObjectiveConfig {
    fn default() -> Self {
        Self {
            lambda1: 1.0,
            lambda2: 0.1,
            temperature: 0.1,
            sym_sign: SymSign::Neg,
            sym_full_gradient: false,
        }
    }
}

impl ObjectiveConfig {
    /// Reconstruction-only ablation (`λ₁ = λ₂ = 0`).
    pub fn ablation() -> Self {
        Self {
            lambda1: 0.0,
            lambda2: 0.0,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.lambda1 >= 0.0 && self.lambda2 >= 0.0) {
            return Err(Error::Config(format!(
                "loss weights must be >= 0 (lambda1={}, lambda2={})",
                self.lambda1, self.lambda2
            )));
        }
        if !(self.temperature > 0.0 && self.temperature.is_finite()) {
            return Err(Error::Config(format!("temperature {} must be > 0", self.temperature)));
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Default)]
pub struct LossBreakdown {
    pub recon: f64,
    pub equ: f64,
    pub sym: f64,
    pub total: f64,
    pub lambda1: f64,
    pub lambda2: f64,
    pub temperature: f64,
}

impl LossBreakdown {
    fn new(recon: f64, equ: f64, sym: f64, cfg: &ObjectiveConfig) -> Self {
        Self {
            recon,
            equ,
            sym,
            total: recon + cfg.lambda1 * equ + cfg.lambda2 * sym,
            lambda1: cfg.lambda1,
            lambda2: cfg.lambda2,
            temperature: cfg.temperature,
        }
    }

    pub fn is_finite(&self) -> bool {
        self.recon.is_finite() && self.equ.is_finite() && self.sym.is_finite() && self.total.is_finite()
    }
}

/// Gradients shaped exactly like the kernel weights and codebook matrices.
#[derive(Clone, Debug, PartialEq)]
pub struct GradientSet<T = f32> {
    pub d_weights: Vec<T>,
    pub d_codebook: Vec<T>,
}

impl<T: Real> GradientSet<T> {
    pub fn zeros(weights: usize, codebook: usize) -> Self {
        Self {
            d_weights: vec![T::zero(); weights],
            d_codebook: vec![T::zero(); codebook],
        }
    }

    pub fn zeros_like(bank: &KernelBank<T>, cb: &Codebook<T>) -> Self {
        Self::zeros(bank.weights().len(), cb.matrices().len())
    }

    pub fn is_finite(&self) -> bool {
        all_finite(&self.d_weights) && all_finite(&self.d_codebook)
    }
}

fn axpy<T: Real>(y: &mut [T], a: T, x: &[T]) {
    debug_assert_eq!(y.len(), x.len());
    for (d, &s) in y.iter_mut().zip(x) {
        *d = *d + a * s;
    }
}

/// Neumaier-compensated accumulator. Keeps loss values accurate enough for
/// central differences to resolve gradients far below the loss magnitude.
#[derive(Clone, Copy, Default)]
struct CompensatedSum {
    sum: f64,
    carry: f64,
}

impl CompensatedSum {
    fn add(&mut self, x: f64) {
        let t = self.sum + x;
        if self.sum.abs() >= x.abs() {
            self.carry += (self.sum - t) + x;
        } else {
            self.carry += (x - t) + self.sum;
        }
        self.sum = t;
    }

    fn value(&self) -> f64 {
        self.sum + self.carry
    }
}

fn sq_norm<T: Real>(v: &[T]) -> f64 {
    let mut acc = CompensatedSum::default();
    for x in v {
        acc.add(x.as_f64() * x.as_f64());
    }
    acc.value()
}

/// One transformed training pair.
#[derive(Clone, Debug, PartialEq)]
pub struct TrainingPair<T = f32> {
    pub image: ImageTensor<T>,
    pub moved: ImageTensor<T>,
    pub delta: TransformParams,
}

/// Per-pair loss values and gradients before batch reduction. The codebook
/// gradient is kept sparse: one `l × l` matrix per module on one stencil.
struct PairTerms<T> {
    recon: f64,
    equ: f64,
    d_weights: Vec<T>,
    mix: Option<(PredictionOp<T>, Vec<Vec<T>>)>,
}

impl<T: Real> PairTerms<T> {
    fn scatter_codebook(&self, cb: &Codebook<T>, scale: T, grad: &mut [T]) {
        if let Some((op, d_mix)) = &self.mix {
            for (module, d) in d_mix.iter().enumerate() {
                let scaled: Vec<T> = d.iter().map(|&v| v * scale).collect();
                cb.scatter_gradient(module, op.interpolation(), &scaled, grad);
            }
        }
    }
}

fn check_pair<T: Real>(bank: &KernelBank<T>, image: &ImageTensor<T>, moved: &ImageTensor<T>) -> Result<()> {
    if !image.same_shape(moved) {
        return Err(Error::shape(
            "loss",
            format!("pair shapes differ: {:?} vs {:?}", image.shape(), moved.shape()),
        ));
    }
    if image.channels() != bank.in_channels() {
        return Err(Error::shape(
            "loss",
            format!("image channels {} != bank in_channels {}", image.channels(), bank.in_channels()),
        ));
    }
    Ok(())
}

fn check_codebook<T: Real>(bank: &KernelBank<T>, cb: &Codebook<T>) -> Result<()> {
    if cb.modules() != bank.modules() || cb.module_len() != bank.module_len() || cb.shape().stride != bank.stride() {
        return Err(Error::shape(
            "loss",
            format!(
                "codebook (k={}, l={}, stride={}) does not match bank (k={}, l={}, stride={})",
                cb.modules(),
                cb.module_len(),
                cb.shape().stride,
                bank.modules(),
                bank.module_len(),
                bank.stride()
            ),
        ));
    }
    Ok(())
}

/// Shared forward/backward pass over one pair. `equ_weight` scales the
/// equivariance gradient; the equivariance value is reported whenever a
/// codebook is supplied.
fn pair_terms<T: Real>(
    bank: &KernelBank<T>,
    cb: Option<&Codebook<T>>,
    image: &ImageTensor<T>,
    moved: &ImageTensor<T>,
    delta: &TransformParams,
    recon_weight: f64,
    equ_weight: f64,
) -> Result<PairTerms<T>> {
    check_pair(bank, image, moved)?;
    let kernels = bank.kernels();
    let (k, l, stride) = (bank.modules(), bank.module_len(), bank.stride());
    let (h, w) = (image.height(), image.width());
    let patches = Patches::new(image, kernels.side(), stride)?;
    let patches_moved = Patches::new(moved, kernels.side(), stride)?;
    let f = FeatureMap::new(k, l, patches.project(kernels)?)?;
    let f_moved = FeatureMap::new(k, l, patches_moved.project(kernels)?)?;

    let mut g_f = Tensor3::<T>::zeros(k * l, f.height(), f.width());
    let mut g_f_moved = g_f.clone();
    let mut d_weights = vec![T::zero(); kernels.data().len()];

    let mut recon = 0.0;
    for (feat, img, g) in [(&f, image, &mut g_f), (&f_moved, moved, &mut g_f_moved)] {
        let residual = bank.decode_to(feat, h, w)?.sub(img)?;
        recon += sq_norm(residual.data());
        if recon_weight != 0.0 {
            let two = T::cast(2.0 * recon_weight);
            let rp = Patches::new(&residual, kernels.side(), stride)?;
            g.add_scaled(two, &rp.project(kernels)?)?;
            axpy(&mut d_weights, two, &rp.correlate(feat.tensor())?);
        }
    }

    let mut equ = 0.0;
    let mut mix = None;
    if let Some(cb) = cb {
        check_codebook(bank, cb)?;
        let op = PredictionOp::new(cb, delta, stride, f.height(), f.width());
        let (predicted, transported) = op.apply_with_transport(&f)?;
        let residual = f_moved.tensor().sub(predicted.tensor())?;
        equ = sq_norm(residual.data());
        if equ_weight != 0.0 {
            let two = T::cast(2.0 * equ_weight);
            g_f_moved.add_scaled(two, &residual)?;
            let grad_pred = FeatureMap::new(k, l, residual.scaled(-two))?;
            g_f.add_scaled(T::one(), op.apply_transpose(&grad_pred)?.tensor())?;
            let d_mix = op.mix_gradients(&transported, &grad_pred);
            mix = Some((op, d_mix));
        }
    }

    axpy(&mut d_weights, T::one(), &patches.correlate(&g_f)?);
    axpy(&mut d_weights, T::one(), &patches_moved.correlate(&g_f_moved)?);
    Ok(PairTerms {
        recon,
        equ,
        d_weights,
        mix,
    })
}

/// `‖D(E I) − I‖² + ‖D(E I′) − I′‖²` and its gradient with respect to the weights.
pub fn recon_loss<T: Real>(bank: &KernelBank<T>, image: &ImageTensor<T>, moved: &ImageTensor<T>) -> Result<(f64, Vec<T>)> {
    let terms = pair_terms(bank, None, image, moved, &TransformParams::identity(), 1.0, 0.0)?;
    Ok((terms.recon, terms.d_weights))
}

/// `Σᵢ ‖f′⁽ⁱ⁾ − P_δ⁽ⁱ⁾ f⁽ⁱ⁾‖²` with gradients for weights and codebook.
pub fn equ_loss<T: Real>(
    bank: &KernelBank<T>,
    cb: &Codebook<T>,
    image: &ImageTensor<T>,
    moved: &ImageTensor<T>,
    delta: &TransformParams,
) -> Result<(f64, GradientSet<T>)> {
    let terms = pair_terms(bank, Some(cb), image, moved, delta, 0.0, 1.0)?;
    let mut grad = GradientSet::zeros_like(bank, cb);
    grad.d_weights = terms.d_weights.clone();
    terms.scatter_codebook(cb, T::one(), &mut grad.d_codebook);
    cb.mask_gradient(&mut grad.d_codebook);
    Ok((terms.equ, grad))
}

/// `δ*ₘₙ` for every module and ordered channel pair, in `(i, m, n)` order.
pub fn sym_targets<T: Real>(cb: &Codebook<T>, cfg: &ObjectiveConfig) -> Result<Vec<TransformParams>> {
    let l = cb.module_len();
    let mut out = Vec::with_capacity(cb.modules() * l * l);
    for i in 0..cb.modules() {
        for m in 0..l {
            for n in 0..l {
                out.push(cb.soft_argmin_delta(i, m, n, cfg.temperature, cfg.sym_sign)?);
            }
        }
    }
    Ok(out)
}

/// Symmetry loss with the targets held fixed (the stop-gradient objective).
pub fn sym_loss_fixed<T: Real>(cb: &Codebook<T>, targets: &[TransformParams]) -> Result<(f64, Vec<T>)> {
    let l = cb.module_len();
    if targets.len() != cb.modules() * l * l {
        return Err(Error::shape(
            "sym_loss_fixed",
            format!("{} targets for {} entries", targets.len(), cb.modules() * l * l),
        ));
    }
    let mut grad = vec![T::zero(); cb.matrices().len()];
    let mut loss = CompensatedSum::default();
    for (idx, delta) in targets.iter().enumerate() {
        let (i, m, n) = (idx / (l * l), (idx / l) % l, idx % l);
        let interp = cb.interpolation(delta);
        let column = blended_column(cb, i, n, interp.active().map(|c| (c.node, c.weight)));
        for (a, &v) in column.iter().enumerate() {
            let r = if a == m { 1.0 - v } else { -v };
            loss.add(r * r);
            for corner in interp.active() {
                let off = cb.matrix_offset(i, corner.node) + a * l + n;
                grad[off] = grad[off] + T::cast(-2.0 * r * corner.weight);
            }
        }
    }
    cb.mask_gradient(&mut grad);
    Ok((loss.value(), grad))
}

fn blended_column<T: Real>(cb: &Codebook<T>, module: usize, n: usize, corners: impl Iterator<Item = (usize, f64)>) -> Vec<f64> {
    let l = cb.module_len();
    let mut col = vec![0.0; l];
    for (node, w) in corners {
        let m = cb.matrix(module, node);
        for (a, c) in col.iter_mut().enumerate() {
            *c += w * m[a * l + n].as_f64();
        }
    }
    col
}

/// `Σᵢ Σₘ Σₙ ‖eₘ − M⁽ⁱ⁾(δ*ₘₙ) eₙ‖²` and its codebook gradient.
pub fn sym_loss<T: Real>(cb: &Codebook<T>, cfg: &ObjectiveConfig) -> Result<(f64, Vec<T>)> {
    if !(cfg.temperature > 0.0) {
        return Err(Error::Precondition(format!("temperature {} must be > 0", cfg.temperature)));
    }
    if !cfg.sym_full_gradient {
        return sym_loss_fixed(cb, &sym_targets(cb, cfg)?);
    }
    let l = cb.module_len();
    let nodes = cb.shape().nodes_per_module();
    let mut grad = vec![0.0f64; cb.matrices().len()];
    let mut loss = CompensatedSum::default();
    let scale = cfg.sym_sign.factor() / cfg.temperature;
    for i in 0..cb.modules() {
        for m in 0..l {
            for n in 0..l {
                let sa = cb.soft_argmin(i, m, n, cfg.temperature, cfg.sym_sign)?;
                let interp = cb.interpolation(&sa.delta);
                let column = blended_column(cb, i, n, interp.active().map(|c| (c.node, c.weight)));
                let residual: Vec<f64> = column
                    .iter()
                    .enumerate()
                    .map(|(a, &v)| if a == m { 1.0 - v } else { -v })
                    .collect();
                for r in &residual {
                    loss.add(r * r);
                }

                // Direct path through the interpolated matrix.
                for corner in interp.active() {
                    let off = cb.matrix_offset(i, corner.node);
                    for (a, r) in residual.iter().enumerate() {
                        grad[off + a * l + n] += -2.0 * r * corner.weight;
                    }
                }
                // Path through δ*: dL/dδ* from the stencil derivatives ...
                let mut g_delta = [0.0f64; 3];
                for corner in interp.corners() {
                    let mat = cb.matrix(i, corner.node);
                    let proj: f64 = residual.iter().enumerate().map(|(a, r)| r * mat[a * l + n].as_f64()).sum();
                    for (g, dw) in g_delta.iter_mut().zip(corner.d_weight) {
                        *g += -2.0 * proj * dw;
                    }
                }
                // ... then through the softmax onto entry (m, n) of every node.
                let (c, s) = sa.resultant;
                let r2 = c * c + s * s;
                let rotation_live = r2.sqrt() >= crate::codebook::DEGENERATE_RESULTANT;
                let (tx, ty) = (sa.delta.t_x(), sa.delta.t_y());
                for node in 0..nodes {
                    let p = sa.weights[node];
                    if p == 0.0 {
                        continue;
                    }
                    let nd = cb.node_delta(node);
                    let mut dz = g_delta[0] * (nd.t_x() - tx) + g_delta[1] * (nd.t_y() - ty);
                    if rotation_live {
                        let (sin, cos) = nd.r_theta().sin_cos();
                        dz += g_delta[2] * (c * sin - s * cos) / r2;
                    }
                    grad[cb.matrix_offset(i, node) + m * l + n] += scale * p * dz;
                }
            }
        }
    }
    let mut grad: Vec<T> = grad.into_iter().map(T::cast).collect();
    cb.mask_gradient(&mut grad);
    Ok((loss.value(), grad))
}

/// `recon + λ₁·equ + λ₂·sym` for one pair.
pub fn total_loss<T: Real>(
    bank: &KernelBank<T>,
    cb: &Codebook<T>,
    image: &ImageTensor<T>,
    moved: &ImageTensor<T>,
    delta: &TransformParams,
    cfg: &ObjectiveConfig,
) -> Result<(LossBreakdown, GradientSet<T>)> {
    let pair = TrainingPair {
        image: image.clone(),
        moved: moved.clone(),
        delta: *delta,
    };
    batch_loss(bank, cb, std::slice::from_ref(&pair), cfg, false)
}

/// Batch objective: pair terms averaged over the batch plus `λ₂·sym` once.
///
/// With `parallel` set, pairs are evaluated on the rayon pool; reduction
/// always runs in pair order so both modes produce identical bits.
pub fn batch_loss<T: Real>(
    bank: &KernelBank<T>,
    cb: &Codebook<T>,
    pairs: &[TrainingPair<T>],
    cfg: &ObjectiveConfig,
    parallel: bool,
) -> Result<(LossBreakdown, GradientSet<T>)> {
    cfg.validate()?;
    check_codebook(bank, cb)?;
    if pairs.is_empty() {
        return Err(Error::Precondition("batch is empty".into()));
    }
    let eval = |p: &TrainingPair<T>| pair_terms(bank, Some(cb), &p.image, &p.moved, &p.delta, 1.0, cfg.lambda1);
    let terms: Vec<PairTerms<T>> = if parallel {
        pairs.par_iter().map(eval).collect::<Result<_>>()?
    } else {
        pairs.iter().map(eval).collect::<Result<_>>()?
    };

    let inv = 1.0 / pairs.len() as f64;
    let mut grad = GradientSet::zeros_like(bank, cb);
    let (mut recon, mut equ) = (0.0, 0.0);
    for t in &terms {
        recon += t.recon;
        equ += t.equ;
        axpy(&mut grad.d_weights, T::cast(inv), &t.d_weights);
        t.scatter_codebook(cb, T::cast(inv), &mut grad.d_codebook);
    }
    let mut sym = 0.0;
    if cfg.lambda2 != 0.0 {
        let (value, d_sym) = sym_loss(cb, cfg)?;
        sym = value;
        axpy(&mut grad.d_codebook, T::cast(cfg.lambda2), &d_sym);
    } else if cb.modules() > 0 {
        sym = sym_loss(cb, cfg)?.0;
    }
    cb.mask_gradient(&mut grad.d_codebook);
    Ok((LossBreakdown::new(recon * inv, equ * inv, sym, cfg), grad))
}

// ---- gradient checking -------------------------------------------------

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct GradCheckReport {
    pub max_rel_error: f64,
    pub worst_index: usize,
    pub analytic: f64,
    pub numeric: f64,
    pub checked: usize,
}

/// Central differences `(f(p+ε) − f(p−ε))/2ε` at `coords`, compared to
/// `analytic` with relative error `|a − fd| / max(|a|, |fd|, 1e-8)`.
pub fn grad_check<F>(mut loss: F, params: &[f64], analytic: &[f64], epsilon: f64, coords: &[usize]) -> Result<GradCheckReport>
where
    F: FnMut(&[f64]) -> Result<f64>,
{
    if !(epsilon > 0.0) {
        return Err(Error::Precondition(format!("epsilon {epsilon} must be > 0")));
    }
    if params.len() != analytic.len() {
        return Err(Error::shape(
            "grad_check",
            format!("{} params vs {} gradient entries", params.len(), analytic.len()),
        ));
    }
    let mut probe = params.to_vec();
    let mut report = GradCheckReport {
        max_rel_error: 0.0,
        worst_index: 0,
        analytic: 0.0,
        numeric: 0.0,
        checked: 0,
    };
    for &idx in coords {
        let base = probe[idx];
        probe[idx] = base + epsilon;
        let plus = loss(&probe)?;
        probe[idx] = base - epsilon;
        let minus = loss(&probe)?;
        probe[idx] = base;
        if !plus.is_finite() || !minus.is_finite() {
            return Err(Error::NonFinite(format!("loss while probing coordinate {idx}")));
        }
        let fd = (plus - minus) / (2.0 * epsilon);
        let a = analytic[idx];
        let rel = (a - fd).abs() / a.abs().max(fd.abs()).max(1e-8);
        if rel > report.max_rel_error || report.checked == 0 {
            report = GradCheckReport {
                max_rel_error: rel.max(report.max_rel_error),
                worst_index: idx,
                analytic: a,
                numeric: fd,
                checked: report.checked,
            };
        }
        report.checked += 1;
    }
    Ok(report)
}

/// `n` distinct coordinates out of `0..len` (all of them when `n ≥ len`).
pub fn sample_coordinates(len: usize, n: usize, rng: &mut SeededRng) -> Vec<usize> {
    if n >= len {
        return (0..len).collect();
    }
    let mut idx = sample(rng, len, n).into_vec();
    idx.sort_unstable();
    idx
}

/// Small random instance for verifying the objective's gradients.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct GradCheckConfig {
    pub modules: usize,
    pub module_len: usize,
    pub kernel_side: usize,
    pub stride: usize,
    pub image_side: usize,
    pub grid_t: usize,
    pub grid_r: usize,
    pub coordinates: usize,
    pub epsilon: f64,
    pub tolerance: f64,
    pub seed: u64,
}

impl Default for GradCheckConfig {
    fn default() -> Self {
        Self {
            modules: 2,
            module_len: 4,
            kernel_side: 3,
            stride: 2,
            image_side: 8,
            grid_t: 3,
            grid_r: 4,
            coordinates: 200,
            epsilon: 1e-3,
            tolerance: 1e-4,
            seed: 7,
        }
    }
}

/// Worst relative error per loss term.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct GradCheckSummary {
    pub recon: GradCheckReport,
    pub equ: GradCheckReport,
    pub sym: GradCheckReport,
    pub total: GradCheckReport,
}

impl GradCheckSummary {
    pub fn max_rel_error(&self) -> f64 {
        [self.recon, self.equ, self.sym, self.total]
            .iter()
            .map(|r| r.max_rel_error)
            .fold(0.0, f64::max)
    }

    pub fn rows(&self) -> [(&'static str, GradCheckReport); 4] {
        [("recon", self.recon), ("equ", self.equ), ("sym", self.sym), ("total", self.total)]
    }
}

struct Instance {
    bank: KernelBank<f64>,
    cb: Codebook<f64>,
    image: ImageTensor<f64>,
    moved: ImageTensor<f64>,
    delta: TransformParams,
}

impl Instance {
    fn build(gc: &GradCheckConfig, model: &ModelConfig, rng: &mut SeededRng) -> Result<Self> {
        use rand::Rng;
        let model = ModelConfig {
            modules: gc.modules,
            module_len: gc.module_len,
            kernel_side: gc.kernel_side,
            stride: gc.stride,
            in_channels: model.in_channels,
            constraint_variant: model.constraint_variant,
        };
        let bank = KernelBank::<f64>::random(&model, rng)?;
        let shape = GridShape {
            modules: gc.modules,
            module_len: gc.module_len,
            grid_t: gc.grid_t,
            grid_r: gc.grid_r,
            stride: gc.stride,
        };
        let mut cb = Codebook::<f64>::new(shape, InitMode::Random, rng)?;
        cb.set_translation_diagonal(matches!(
            model.constraint_variant,
            crate::model::ConstraintVariant::PerKernelTransPlusModuleTransrot
        ));
        let side = gc.image_side;
        let pixels = (0..model.in_channels * side * side).map(|_| rng.random_range(0.0..1.0)).collect();
        let image = Tensor3::from_vec(model.in_channels, side, side, pixels)?;
        let delta = AugConfig::default().sample_delta(side, rng);
        let moved = warp(&image, &delta);
        Ok(Self {
            bank,
            cb,
            image,
            moved,
            delta,
        })
    }

    fn params(&self) -> Vec<f64> {
        let mut p = self.bank.weights().to_vec();
        p.extend_from_slice(self.cb.matrices());
        p
    }

    fn unpack(&self, p: &[f64]) -> Result<(KernelBank<f64>, Codebook<f64>)> {
        let nw = self.bank.weights().len();
        let k = self.bank.kernels();
        let bank = KernelBank::from_kernels(
            self.bank.modules(),
            self.bank.module_len(),
            self.bank.stride(),
            Kernels::from_vec(k.count(), k.in_channels(), k.side(), p[..nw].to_vec())?,
        )?;
        let mut cb = self.cb.clone();
        cb.matrices_mut().copy_from_slice(&p[nw..]);
        Ok((bank, cb))
    }

    /// Coordinates to probe: weights and free (unmasked) codebook entries.
    fn coordinates(&self, n: usize, rng: &mut SeededRng) -> Vec<usize> {
        let nw = self.bank.weights().len();
        let mut coords = sample_coordinates(nw, n, rng);
        let l = self.cb.module_len();
        let nodes = self.cb.shape().nodes_per_module();
        let free: Vec<usize> = (0..self.cb.matrices().len())
            .filter(|&j| {
                let node = (j / (l * l)) % nodes;
                let e = j % (l * l);
                !self.cb.is_masked(node, e / l, e % l)
            })
            .collect();
        coords.extend(sample_coordinates(free.len(), n, rng).into_iter().map(|j| nw + free[j]));
        coords
    }
}

/// Residual vectors whose squared norms make up each loss term.
struct Residuals {
    recon: Vec<f64>,
    equ: Vec<f64>,
    sym: Vec<f64>,
}

impl Residuals {
    fn of(inst: &Instance, bank: &KernelBank<f64>, cb: &Codebook<f64>, targets: &[TransformParams]) -> Result<Self> {
        let (h, w) = (inst.image.height(), inst.image.width());
        let f = bank.encode(&inst.image)?;
        let f_moved = bank.encode(&inst.moved)?;
        let mut recon = bank.decode_to(&f, h, w)?.sub(&inst.image)?.into_data();
        recon.extend(bank.decode_to(&f_moved, h, w)?.sub(&inst.moved)?.into_data());
        let op = PredictionOp::new(cb, &inst.delta, bank.stride(), f.height(), f.width());
        let equ = f_moved.tensor().sub(op.apply(&f)?.tensor())?.into_data();
        let l = cb.module_len();
        let mut sym = Vec::with_capacity(targets.len() * l);
        for (idx, delta) in targets.iter().enumerate() {
            let (i, m, n) = (idx / (l * l), (idx / l) % l, idx % l);
            let interp = cb.interpolation(delta);
            let column = blended_column(cb, i, n, interp.active().map(|c| (c.node, c.weight)));
            sym.extend(column.iter().enumerate().map(|(a, &v)| if a == m { 1.0 - v } else { -v }));
        }
        Ok(Self { recon, equ, sym })
    }
}

/// `‖r‖² − ‖r₀‖²` evaluated as `Σ (r − r₀)(r + r₀)`, which stays accurate
/// when the change is many orders of magnitude below the loss itself.
fn loss_change(r: &[f64], r0: &[f64]) -> f64 {
    let mut acc = CompensatedSum::default();
    for (a, b) in r.iter().zip(r0) {
        acc.add((a - b) * (a + b));
    }
    acc.value()
}

/// Checks every loss term's analytic gradient against central differences
/// on a random instance. With a stopped `δ*` the symmetry targets are frozen
/// at the unperturbed codebook for the numeric side as well.
///
/// The numeric side differences the loss change relative to the unperturbed
/// parameters; it has the same derivative as the loss but avoids rounding at
/// the loss's own magnitude.
pub fn verify_gradients(gc: &GradCheckConfig, model: &ModelConfig, obj: &ObjectiveConfig) -> Result<GradCheckSummary> {
    use rand::SeedableRng;
    obj.validate()?;
    let mut rng = SeededRng::seed_from_u64(gc.seed);
    let inst = Instance::build(gc, model, &mut rng)?;
    let params = inst.params();
    let coords = inst.coordinates(gc.coordinates, &mut rng);
    let nw = inst.bank.weights().len();
    let targets = sym_targets(&inst.cb, obj)?;
    let base = Residuals::of(&inst, &inst.bank, &inst.cb, &targets)?;
    let concat = |dw: &[f64], dc: &[f64]| {
        let mut g = dw.to_vec();
        g.extend_from_slice(dc);
        g
    };
    let zeros_cb = vec![0.0; inst.cb.matrices().len()];
    let zeros_w = vec![0.0; nw];

    let residuals = |p: &[f64]| -> Result<Residuals> {
        let (bank, cb) = inst.unpack(p)?;
        if obj.sym_full_gradient {
            Residuals::of(&inst, &bank, &cb, &sym_targets(&cb, obj)?)
        } else {
            Residuals::of(&inst, &bank, &cb, &targets)
        }
    };

    let (_, d_recon) = recon_loss(&inst.bank, &inst.image, &inst.moved)?;
    let recon = grad_check(
        |p| Ok(loss_change(&residuals(p)?.recon, &base.recon)),
        &params,
        &concat(&d_recon, &zeros_cb),
        gc.epsilon,
        &coords,
    )?;

    let (_, g_equ) = equ_loss(&inst.bank, &inst.cb, &inst.image, &inst.moved, &inst.delta)?;
    let equ = grad_check(
        |p| Ok(loss_change(&residuals(p)?.equ, &base.equ)),
        &params,
        &concat(&g_equ.d_weights, &g_equ.d_codebook),
        gc.epsilon,
        &coords,
    )?;

    let (_, d_sym) = sym_loss(&inst.cb, obj)?;
    let sym = grad_check(
        |p| Ok(loss_change(&residuals(p)?.sym, &base.sym)),
        &params,
        &concat(&zeros_w, &d_sym),
        gc.epsilon,
        &coords,
    )?;

    let (_, g_total) = total_loss(&inst.bank, &inst.cb, &inst.image, &inst.moved, &inst.delta, obj)?;
    let total = grad_check(
        |p| {
            let r = residuals(p)?;
            Ok(loss_change(&r.recon, &base.recon)
                + obj.lambda1 * loss_change(&r.equ, &base.equ)
                + obj.lambda2 * loss_change(&r.sym, &base.sym))
        },
        &params,
        &concat(&g_total.d_weights, &g_total.d_codebook),
        gc.epsilon,
        &coords,
    )?;

    Ok(GradCheckSummary { recon, equ, sym, total })
}
