//! Single-layer modular autoencoder: a partitioned kernel bank used both to
//! encode (valid convolution) and to decode (the transposed convolution with
//! the same weights), plus the feature-space prediction operator `P_δ`.

use ndarray::{ArrayView2, ArrayViewMut2};
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::codebook::{Codebook, Interpolation};
use crate::dataset::SeededRng;
use crate::error::{Error, Result};
use crate::tensor::{
    conv2d, conv_output_side, deconv2d, deconv2d_to, gemm, FeatureMap, ImageTensor, Kernels, Real, SamplingPlan,
    TransformParams,
};

/// Which parts of the codebook carry the equivariance constraint.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ConstraintVariant {
    /// Each module is jointly translation + rotation equivariant.
    #[default]
    PerModuleTransrot,
    /// Additionally, every kernel is translation equivariant on its own: the
    /// rotation-free slice of each module's codebook is diagonal.
    PerKernelTransPlusModuleTransrot,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelConfig {
    pub modules: usize,
    pub module_len: usize,
    pub kernel_side: usize,
    pub stride: usize,
    pub in_channels: usize,
    pub constraint_variant: ConstraintVariant,
}

impl Default for ModelConfig {
    /// Desk-scale MNIST layout.
    fn default() -> Self {
        Self::mnist()
    }
}

impl ModelConfig {
    pub fn mnist() -> Self {
        Self {
            modules: 8,
            module_len: 8,
            kernel_side: 9,
            stride: 2,
            in_channels: 1,
            constraint_variant: ConstraintVariant::PerModuleTransrot,
        }
    }

    pub fn cifar() -> Self {
        Self {
            modules: 16,
            in_channels: 3,
            ..Self::mnist()
        }
    }

    pub fn kernel_count(&self) -> usize {
        self.modules * self.module_len
    }

    pub fn validate(&self) -> Result<()> {
        let counts = [
            ("modules", self.modules),
            ("module_len", self.module_len),
            ("kernel_side", self.kernel_side),
            ("stride", self.stride),
            ("in_channels", self.in_channels),
        ];
        for (name, v) in counts {
            if v == 0 {
                return Err(Error::Config(format!("model.{name} must be >= 1")));
            }
        }
        Ok(())
    }
}

/// Kernel set `W = [W⁽⁰⁾, …, W⁽ᵏ⁻¹⁾]`; kernel `j` belongs to module `⌊j/l⌋`.
#[derive(Clone, Debug, PartialEq)]
pub struct KernelBank<T = f32> {
    modules: usize,
    module_len: usize,
    stride: usize,
    kernels: Kernels<T>,
}

impl<T: Real> KernelBank<T> {
    /// Draws weights from `N(0, 1/(in_channels·K²))`.
    pub fn random(config: &ModelConfig, rng: &mut SeededRng) -> Result<Self> {
        config.validate()?;
        let fan_in = (config.in_channels * config.kernel_side * config.kernel_side) as f64;
        let normal = Normal::new(0.0, (1.0 / fan_in).sqrt()).expect("valid std");
        let n = config.kernel_count() * config.in_channels * config.kernel_side * config.kernel_side;
        let data = (0..n).map(|_| T::cast(normal.sample(rng))).collect();
        Self::from_kernels(
            config.modules,
            config.module_len,
            config.stride,
            Kernels::from_vec(config.kernel_count(), config.in_channels, config.kernel_side, data)?,
        )
    }

    pub fn from_kernels(modules: usize, module_len: usize, stride: usize, kernels: Kernels<T>) -> Result<Self> {
        if modules == 0 || module_len == 0 || stride == 0 {
            return Err(Error::Precondition("kernel bank counts must be >= 1".into()));
        }
        if kernels.count() != modules * module_len {
            return Err(Error::shape(
                "KernelBank::from_kernels",
                format!("kernel count {} != modules {modules} x module_len {module_len}", kernels.count()),
            ));
        }
        Ok(Self {
            modules,
            module_len,
            stride,
            kernels,
        })
    }

    pub fn modules(&self) -> usize {
        self.modules
    }

    pub fn module_len(&self) -> usize {
        self.module_len
    }

    pub fn stride(&self) -> usize {
        self.stride
    }

    pub fn kernel_side(&self) -> usize {
        self.kernels.side()
    }

    pub fn in_channels(&self) -> usize {
        self.kernels.in_channels()
    }

    pub fn kernels(&self) -> &Kernels<T> {
        &self.kernels
    }

    pub fn weights(&self) -> &[T] {
        self.kernels.data()
    }

    pub(crate) fn weights_mut(&mut self) -> &mut [T] {
        self.kernels.data_mut()
    }

    pub fn kernel(&self, module: usize, m: usize) -> &[T] {
        self.kernels.kernel(module * self.module_len + m)
    }

    pub fn cast<U: Real>(&self) -> KernelBank<U> {
        KernelBank {
            modules: self.modules,
            module_len: self.module_len,
            stride: self.stride,
            kernels: self.kernels.cast(),
        }
    }

    /// Feature-grid size for `height × width` images.
    pub fn feature_grid(&self, height: usize, width: usize) -> (usize, usize) {
        (
            conv_output_side(height, self.kernel_side(), self.stride),
            conv_output_side(width, self.kernel_side(), self.stride),
        )
    }

    pub fn encode(&self, image: &ImageTensor<T>) -> Result<FeatureMap<T>> {
        if image.channels() != self.in_channels() {
            return Err(Error::shape(
                "encode",
                format!("image channels {} != bank in_channels {}", image.channels(), self.in_channels()),
            ));
        }
        FeatureMap::new(self.modules, self.module_len, conv2d(image, &self.kernels, self.stride)?)
    }

    fn check_partition(&self, features: &FeatureMap<T>) -> Result<()> {
        if features.modules() != self.modules || features.module_len() != self.module_len {
            return Err(Error::shape(
                "decode",
                format!(
                    "feature partition {}x{} != bank partition {}x{}",
                    features.modules(),
                    features.module_len(),
                    self.modules,
                    self.module_len
                ),
            ));
        }
        Ok(())
    }

    /// Minimal-size decode, `(H′−1)·s + K` pixels per side.
    pub fn decode(&self, features: &FeatureMap<T>) -> Result<ImageTensor<T>> {
        self.check_partition(features)?;
        deconv2d(features.tensor(), &self.kernels, self.stride)
    }

    /// Decode onto an `height × width` canvas (the adjoint of encoding images
    /// of that size).
    pub fn decode_to(&self, features: &FeatureMap<T>, height: usize, width: usize) -> Result<ImageTensor<T>> {
        self.check_partition(features)?;
        deconv2d_to(features.tensor(), &self.kernels, self.stride, height, width)
    }

    /// Reconstruction `decode(encode(I))` at the input's size.
    pub fn reconstruct(&self, image: &ImageTensor<T>) -> Result<ImageTensor<T>> {
        self.decode_to(&self.encode(image)?, image.height(), image.width())
    }
}

/// All-zero feature map with a single 1.0 at `(module, m, site)`.
pub fn probe_onehot<T: Real>(
    bank: &KernelBank<T>,
    module: usize,
    m: usize,
    site: (usize, usize),
    grid: (usize, usize),
) -> Result<FeatureMap<T>> {
    let checks = [
        ("module", module, bank.modules()),
        ("channel", m, bank.module_len()),
        ("site row", site.0, grid.0),
        ("site column", site.1, grid.1),
    ];
    for (what, index, limit) in checks {
        if index >= limit {
            return Err(Error::Index { what, index, limit });
        }
    }
    let mut f = FeatureMap::zeros(bank.modules(), bank.module_len(), grid.0, grid.1);
    f.tensor_mut().set(module * bank.module_len() + m, site.0, site.1, T::one());
    Ok(f)
}

/// Splits a translation into a whole number of feature cells and a
/// sub-stride residual in `[−s/2, s/2]`.
pub fn split_translation(t: f64, stride: usize) -> (isize, f64) {
    let s = stride as f64;
    let cells = (t / s).round();
    (cells as isize, t - cells * s)
}

fn shift_plane<T: Real>(src: &[T], dst: &mut [T], height: usize, width: usize, dy: isize, dx: isize) {
    for y in 0..height {
        let sy = y as isize - dy;
        let row = &mut dst[y * width..(y + 1) * width];
        if sy < 0 || sy >= height as isize {
            row.iter_mut().for_each(|v| *v = T::zero());
            continue;
        }
        for (x, v) in row.iter_mut().enumerate() {
            let sx = x as isize - dx;
            *v = if sx < 0 || sx >= width as isize {
                T::zero()
            } else {
                src[sy as usize * width + sx as usize]
            };
        }
    }
}

/// `P_δ` realized on a feature grid: rotate every channel about the grid
/// center (bilinear), shift by the whole-cell part of the translation, then
/// mix the channels of module `i` with `M⁽ⁱ⁾(δ_res)` at every site, where
/// `δ_res` keeps the rotation and the sub-stride translation residual.
#[derive(Clone, Debug)]
pub struct PredictionOp<T = f32> {
    height: usize,
    width: usize,
    shift: (isize, isize),
    rotation: Option<SamplingPlan<T>>,
    residual: TransformParams,
    interp: Interpolation,
    mix: Vec<Vec<T>>,
}

impl<T: Real> PredictionOp<T> {
    pub fn new(cb: &Codebook<T>, delta: &TransformParams, stride: usize, height: usize, width: usize) -> Self {
        let (nx, res_x) = split_translation(delta.t_x(), stride);
        let (ny, res_y) = split_translation(delta.t_y(), stride);
        let residual = TransformParams::new(res_x, res_y, delta.r_theta());
        let rotation = (delta.r_theta() != 0.0).then(|| SamplingPlan::rotation(height, width, delta.r_theta()));
        let interp = cb.interpolation(&residual);
        let mix = (0..cb.modules()).map(|i| cb.blend(i, &interp)).collect();
        Self {
            height,
            width,
            shift: (ny, nx),
            rotation,
            residual,
            interp,
            mix,
        }
    }

    pub fn residual(&self) -> &TransformParams {
        &self.residual
    }

    pub fn interpolation(&self) -> &Interpolation {
        &self.interp
    }

    /// Whole-cell shift `(rows, columns)`.
    pub fn shift(&self) -> (isize, isize) {
        self.shift
    }

    fn check(&self, f: &FeatureMap<T>) -> Result<()> {
        if f.height() != self.height || f.width() != self.width || f.modules() != self.mix.len() {
            return Err(Error::shape(
                "predict_features",
                format!(
                    "features {}x{} with {} modules vs operator {}x{} with {} modules",
                    f.height(),
                    f.width(),
                    f.modules(),
                    self.height,
                    self.width,
                    self.mix.len()
                ),
            ));
        }
        Ok(())
    }

    /// Spatial part only (rotation then shift), before channel mixing.
    pub fn transport(&self, f: &FeatureMap<T>) -> Result<FeatureMap<T>> {
        self.check(f)?;
        let plane = self.height * self.width;
        let channels = f.tensor().channels();
        let mut rotated = vec![T::zero(); plane];
        let mut out = f.clone();
        for c in 0..channels {
            let src = f.tensor().channel(c);
            let rotated_src: &[T] = match &self.rotation {
                Some(plan) => {
                    plan.apply(src, &mut rotated);
                    &rotated
                }
                None => src,
            };
            let dst = out.tensor_mut().channel_mut(c);
            if self.shift == (0, 0) {
                dst.copy_from_slice(rotated_src);
            } else {
                shift_plane(rotated_src, dst, self.height, self.width, self.shift.0, self.shift.1);
            }
        }
        Ok(out)
    }

    fn transport_transpose(&self, grad: &FeatureMap<T>) -> FeatureMap<T> {
        let plane = self.height * self.width;
        let mut out = FeatureMap::zeros(grad.modules(), grad.module_len(), self.height, self.width);
        let mut unshifted = vec![T::zero(); plane];
        for c in 0..grad.tensor().channels() {
            let g = grad.tensor().channel(c);
            let g_unshifted: &[T] = if self.shift == (0, 0) {
                g
            } else {
                shift_plane(g, &mut unshifted, self.height, self.width, -self.shift.0, -self.shift.1);
                &unshifted
            };
            let dst = out.tensor_mut().channel_mut(c);
            match &self.rotation {
                Some(plan) => plan.apply_transpose(g_unshifted, dst),
                None => dst.copy_from_slice(g_unshifted),
            }
        }
        out
    }

    fn mix_modules(&self, f: &FeatureMap<T>, transpose: bool) -> FeatureMap<T> {
        let l = f.module_len();
        let sites = self.height * self.width;
        let mut out = FeatureMap::zeros(f.modules(), l, self.height, self.width);
        for (i, m) in self.mix.iter().enumerate() {
            let mat = ArrayView2::from_shape((l, l), m).expect("mix layout");
            let mat = if transpose { mat.t() } else { mat };
            let src = ArrayView2::from_shape((l, sites), f.module_data(i)).expect("module layout");
            let mut dst = ArrayViewMut2::from_shape((l, sites), out.module_data_mut(i)).expect("module layout");
            gemm(mat, src, &mut dst);
        }
        out
    }

    /// Full prediction; also returns the transported (pre-mix) features that
    /// the codebook gradient needs.
    pub fn apply_with_transport(&self, f: &FeatureMap<T>) -> Result<(FeatureMap<T>, FeatureMap<T>)> {
        let moved = self.transport(f)?;
        let out = self.mix_modules(&moved, false);
        Ok((out, moved))
    }

    pub fn apply(&self, f: &FeatureMap<T>) -> Result<FeatureMap<T>> {
        Ok(self.apply_with_transport(f)?.0)
    }

    /// Adjoint `P_δᵀ`.
    pub fn apply_transpose(&self, grad: &FeatureMap<T>) -> Result<FeatureMap<T>> {
        self.check(grad)?;
        Ok(self.transport_transpose(&self.mix_modules(grad, true)))
    }

    /// `∂⟨grad, P_δ f⟩/∂M⁽ⁱ⁾ = Σ_sites grad_i · moved_iᵀ` per module (`l × l`, row-major).
    pub fn mix_gradients(&self, moved: &FeatureMap<T>, grad: &FeatureMap<T>) -> Vec<Vec<T>> {
        let l = moved.module_len();
        let sites = self.height * self.width;
        (0..moved.modules())
            .map(|i| {
                let mut out = vec![T::zero(); l * l];
                let g = ArrayView2::from_shape((l, sites), grad.module_data(i)).expect("module layout");
                let h = ArrayView2::from_shape((l, sites), moved.module_data(i)).expect("module layout");
                let mut dst = ArrayViewMut2::from_shape((l, l), &mut out).expect("matrix layout");
                gemm(g, h.t(), &mut dst);
                out
            })
            .collect()
    }
}

/// Predicts the features of the transformed image from `features` and `delta`.
pub fn predict_features<T: Real>(
    bank: &KernelBank<T>,
    cb: &Codebook<T>,
    features: &FeatureMap<T>,
    delta: &TransformParams,
) -> Result<FeatureMap<T>> {
    if cb.modules() != bank.modules() || cb.module_len() != bank.module_len() {
        return Err(Error::shape(
            "predict_features",
            format!(
                "codebook partition {}x{} != bank partition {}x{}",
                cb.modules(),
                cb.module_len(),
                bank.modules(),
                bank.module_len()
            ),
        ));
    }
    PredictionOp::new(cb, delta, bank.stride(), features.height(), features.width()).apply(features)
}

/// Zeroes every channel outside `modules`.
pub fn restrict_to_modules<T: Real>(features: &FeatureMap<T>, modules: &[usize]) -> FeatureMap<T> {
    let mut out = FeatureMap::zeros(features.modules(), features.module_len(), features.height(), features.width());
    for &i in modules {
        if i < features.modules() {
            out.module_data_mut(i).copy_from_slice(features.module_data(i));
        }
    }
    out
}
