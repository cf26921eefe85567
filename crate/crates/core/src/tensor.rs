//! Dense tensors and the numeric primitives the autoencoder is built from:
//! valid convolution, its exact adjoint (transposed convolution sharing the
//! same kernels) and bilinear rotation + translation warping.
//!
//! Everything is generic over [`Real`] so the same code path runs in `f32`
//! for training and in `f64` for finite-difference verification.

use std::f64::consts::TAU;
use std::fmt::{Debug, Display};
use std::iter::Sum;

use ndarray::linalg::general_mat_mul;
use ndarray::{ArrayView2, ArrayViewMut2, LinalgScalar};
use num_traits::Float;

use crate::error::{Error, Result};

/// Scalar type usable for tensors (`f32` or `f64`).
pub trait Real:
    Float + LinalgScalar + Sum + Default + Debug + Display + Send + Sync + 'static
{
    fn cast(x: f64) -> Self;
    fn as_f64(self) -> f64;
}

impl Real for f32 {
    #[inline]
    fn cast(x: f64) -> Self {
        x as f32
    }
    #[inline]
    fn as_f64(self) -> f64 {
        self as f64
    }
}

impl Real for f64 {
    #[inline]
    fn cast(x: f64) -> Self {
        x
    }
    #[inline]
    fn as_f64(self) -> f64 {
        self
    }
}

pub(crate) fn all_finite<T: Real>(data: &[T]) -> bool {
    data.iter().all(|v| v.is_finite())
}

/// Accumulates in f64; f32 products are exact there, so only the final cast rounds.
pub(crate) fn dot<T: Real>(a: &[T], b: &[T]) -> T {
    debug_assert_eq!(a.len(), b.len());
    T::cast(a.iter().zip(b).fold(0.0f64, |acc, (&x, &y)| acc + x.as_f64() * y.as_f64()))
}

/// `c = a · b` through the blocked GEMM kernels.
pub(crate) fn gemm<T: Real>(a: ArrayView2<'_, T>, b: ArrayView2<'_, T>, c: &mut ArrayViewMut2<'_, T>) {
    general_mat_mul(T::one(), &a, &b, T::zero(), c);
}

/// Rank-3 array laid out row-major as (channel, y, x).
#[derive(Clone, Debug, PartialEq)]
pub struct Tensor3<T = f32> {
    channels: usize,
    height: usize,
    width: usize,
    data: Vec<T>,
}

/// Images are plain rank-3 tensors with pixel values in `[0, 1]`.
pub type ImageTensor<T = f32> = Tensor3<T>;

impl<T: Real> Tensor3<T> {
    /// Builds a tensor, rejecting length mismatches and non-finite values.
    pub fn from_vec(channels: usize, height: usize, width: usize, data: Vec<T>) -> Result<Self> {
        if data.len() != channels * height * width {
            return Err(Error::shape(
                "Tensor3::from_vec",
                format!(
                    "data length {} != channels {channels} x height {height} x width {width}",
                    data.len()
                ),
            ));
        }
        if !all_finite(&data) {
            return Err(Error::NonFinite("Tensor3::from_vec received NaN/Inf".into()));
        }
        Ok(Self::from_raw(channels, height, width, data))
    }

    pub(crate) fn from_raw(channels: usize, height: usize, width: usize, data: Vec<T>) -> Self {
        debug_assert_eq!(data.len(), channels * height * width);
        Self {
            channels,
            height,
            width,
            data,
        }
    }

    pub fn zeros(channels: usize, height: usize, width: usize) -> Self {
        Self::from_raw(channels, height, width, vec![T::zero(); channels * height * width])
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn shape(&self) -> (usize, usize, usize) {
        (self.channels, self.height, self.width)
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn data(&self) -> &[T] {
        &self.data
    }

    pub(crate) fn data_mut(&mut self) -> &mut [T] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<T> {
        self.data
    }

    #[inline]
    pub fn at(&self, c: usize, y: usize, x: usize) -> T {
        self.data[(c * self.height + y) * self.width + x]
    }

    /// Sets one element. Panics on non-finite values or out-of-range indices.
    pub fn set(&mut self, c: usize, y: usize, x: usize, value: T) {
        assert!(value.is_finite(), "Tensor3::set: non-finite value");
        let idx = (c * self.height + y) * self.width + x;
        self.data[idx] = value;
    }

    pub fn channel(&self, c: usize) -> &[T] {
        let plane = self.height * self.width;
        &self.data[c * plane..(c + 1) * plane]
    }

    pub(crate) fn channel_mut(&mut self, c: usize) -> &mut [T] {
        let plane = self.height * self.width;
        &mut self.data[c * plane..(c + 1) * plane]
    }

    pub fn same_shape(&self, other: &Self) -> bool {
        self.shape() == other.shape()
    }

    /// Frobenius inner product.
    pub fn inner(&self, other: &Self) -> Result<T> {
        if !self.same_shape(other) {
            return Err(Error::shape(
                "Tensor3::inner",
                format!("{:?} vs {:?}", self.shape(), other.shape()),
            ));
        }
        Ok(dot(&self.data, &other.data))
    }

    pub fn norm_sq(&self) -> T {
        dot(&self.data, &self.data)
    }

    pub fn scaled(&self, a: T) -> Self {
        Self::from_raw(
            self.channels,
            self.height,
            self.width,
            self.data.iter().map(|&v| v * a).collect(),
        )
    }

    /// `self += a * other`.
    pub fn add_scaled(&mut self, a: T, other: &Self) -> Result<()> {
        if !self.same_shape(other) {
            return Err(Error::shape(
                "Tensor3::add_scaled",
                format!("{:?} vs {:?}", self.shape(), other.shape()),
            ));
        }
        for (d, &s) in self.data.iter_mut().zip(&other.data) {
            *d = *d + a * s;
        }
        Ok(())
    }

    pub fn sub(&self, other: &Self) -> Result<Self> {
        let mut out = self.clone();
        out.add_scaled(-T::one(), other)?;
        Ok(out)
    }

    pub fn cast<U: Real>(&self) -> Tensor3<U> {
        Tensor3::from_raw(
            self.channels,
            self.height,
            self.width,
            self.data.iter().map(|v| U::cast(v.as_f64())).collect(),
        )
    }

    /// Zero-pads (or crops) each channel to `height × width`, anchored at the origin.
    pub fn resized(&self, height: usize, width: usize) -> Self {
        let mut out = Self::zeros(self.channels, height, width);
        let (h, w) = (self.height.min(height), self.width.min(width));
        for c in 0..self.channels {
            for y in 0..h {
                let src = (c * self.height + y) * self.width;
                let dst = (c * height + y) * width;
                out.data[dst..dst + w].copy_from_slice(&self.data[src..src + w]);
            }
        }
        out
    }
}

/// Feature map whose `modules · module_len` channels are partitioned into
/// contiguous modules: module `i` owns channels `[i·l, (i+1)·l)`.
#[derive(Clone, Debug, PartialEq)]
pub struct FeatureMap<T = f32> {
    modules: usize,
    module_len: usize,
    map: Tensor3<T>,
}

impl<T: Real> FeatureMap<T> {
    pub fn new(modules: usize, module_len: usize, map: Tensor3<T>) -> Result<Self> {
        if modules * module_len != map.channels() {
            return Err(Error::shape(
                "FeatureMap::new",
                format!(
                    "channels {} != modules {modules} x module_len {module_len}",
                    map.channels()
                ),
            ));
        }
        Ok(Self {
            modules,
            module_len,
            map,
        })
    }

    pub fn zeros(modules: usize, module_len: usize, height: usize, width: usize) -> Self {
        Self {
            modules,
            module_len,
            map: Tensor3::zeros(modules * module_len, height, width),
        }
    }

    pub fn modules(&self) -> usize {
        self.modules
    }

    pub fn module_len(&self) -> usize {
        self.module_len
    }

    pub fn height(&self) -> usize {
        self.map.height()
    }

    pub fn width(&self) -> usize {
        self.map.width()
    }

    pub fn tensor(&self) -> &Tensor3<T> {
        &self.map
    }

    pub(crate) fn tensor_mut(&mut self) -> &mut Tensor3<T> {
        &mut self.map
    }

    pub fn into_tensor(self) -> Tensor3<T> {
        self.map
    }

    pub fn same_layout(&self, other: &Self) -> bool {
        self.modules == other.modules
            && self.module_len == other.module_len
            && self.map.same_shape(&other.map)
    }

    /// Channels of module `i`, as one contiguous slice.
    pub fn module_data(&self, i: usize) -> &[T] {
        let span = self.module_len * self.height() * self.width();
        &self.map.data()[i * span..(i + 1) * span]
    }

    pub(crate) fn module_data_mut(&mut self, i: usize) -> &mut [T] {
        let span = self.module_len * self.height() * self.width();
        &mut self.map.data_mut()[i * span..(i + 1) * span]
    }
}

/// Stack of convolution kernels with layout (kernel, in_channel, ky, kx).
#[derive(Clone, Debug, PartialEq)]
pub struct Kernels<T = f32> {
    count: usize,
    in_channels: usize,
    side: usize,
    data: Vec<T>,
}

impl<T: Real> Kernels<T> {
    pub fn from_vec(count: usize, in_channels: usize, side: usize, data: Vec<T>) -> Result<Self> {
        if data.len() != count * in_channels * side * side {
            return Err(Error::shape(
                "Kernels::from_vec",
                format!(
                    "data length {} != count {count} x in_channels {in_channels} x side {side}^2",
                    data.len()
                ),
            ));
        }
        if !all_finite(&data) {
            return Err(Error::NonFinite("Kernels::from_vec received NaN/Inf".into()));
        }
        Ok(Self {
            count,
            in_channels,
            side,
            data,
        })
    }

    pub fn zeros(count: usize, in_channels: usize, side: usize) -> Self {
        Self {
            count,
            in_channels,
            side,
            data: vec![T::zero(); count * in_channels * side * side],
        }
    }

    pub fn count(&self) -> usize {
        self.count
    }

    pub fn in_channels(&self) -> usize {
        self.in_channels
    }

    pub fn side(&self) -> usize {
        self.side
    }

    /// Number of weights per kernel (`in_channels · side²`).
    pub fn taps(&self) -> usize {
        self.in_channels * self.side * self.side
    }

    pub fn data(&self) -> &[T] {
        &self.data
    }

    pub(crate) fn data_mut(&mut self) -> &mut [T] {
        &mut self.data
    }

    pub fn kernel(&self, j: usize) -> &[T] {
        let taps = self.taps();
        &self.data[j * taps..(j + 1) * taps]
    }

    pub fn cast<U: Real>(&self) -> Kernels<U> {
        Kernels {
            count: self.count,
            in_channels: self.in_channels,
            side: self.side,
            data: self.data.iter().map(|v| U::cast(v.as_f64())).collect(),
        }
    }

    fn matrix(&self) -> ArrayView2<'_, T> {
        ArrayView2::from_shape((self.count, self.taps()), &self.data).expect("kernel layout")
    }
}

/// Output side of a valid convolution.
pub fn conv_output_side(input: usize, kernel: usize, stride: usize) -> usize {
    (input - kernel) / stride + 1
}

/// im2col expansion of an image: one row per output site, one column per tap.
///
/// Reused for both the forward projection and the kernel gradient so the
/// expansion is paid once per image.
#[derive(Clone, Debug)]
pub struct Patches<T = f32> {
    channels: usize,
    side: usize,
    out_h: usize,
    out_w: usize,
    data: Vec<T>,
}

impl<T: Real> Patches<T> {
    pub fn new(image: &Tensor3<T>, side: usize, stride: usize) -> Result<Self> {
        if stride == 0 {
            return Err(Error::Precondition("stride must be >= 1".into()));
        }
        if side == 0 || side > image.height() || side > image.width() {
            return Err(Error::shape(
                "conv2d",
                format!(
                    "kernel side {side} does not fit image height {} / width {}",
                    image.height(),
                    image.width()
                ),
            ));
        }
        let out_h = conv_output_side(image.height(), side, stride);
        let out_w = conv_output_side(image.width(), side, stride);
        let taps = image.channels() * side * side;
        let mut data = Vec::with_capacity(out_h * out_w * taps);
        for u in 0..out_h {
            for v in 0..out_w {
                for c in 0..image.channels() {
                    for a in 0..side {
                        let row = (c * image.height() + u * stride + a) * image.width() + v * stride;
                        data.extend_from_slice(&image.data()[row..row + side]);
                    }
                }
            }
        }
        Ok(Self {
            channels: image.channels(),
            side,
            out_h,
            out_w,
            data,
        })
    }

    pub fn out_height(&self) -> usize {
        self.out_h
    }

    pub fn out_width(&self) -> usize {
        self.out_w
    }

    fn taps(&self) -> usize {
        self.channels * self.side * self.side
    }

    fn matrix(&self) -> ArrayView2<'_, T> {
        ArrayView2::from_shape((self.out_h * self.out_w, self.taps()), &self.data).expect("patch layout")
    }

    fn check_kernels(&self, kernels: &Kernels<T>) -> Result<()> {
        if kernels.in_channels() != self.channels {
            return Err(Error::shape(
                "conv2d",
                format!(
                    "kernel in_channels {} != image channels {}",
                    kernels.in_channels(),
                    self.channels
                ),
            ));
        }
        if kernels.side() != self.side {
            return Err(Error::shape(
                "conv2d",
                format!("kernel side {} != patch side {}", kernels.side(), self.side),
            ));
        }
        Ok(())
    }

    /// Valid convolution (cross-correlation) of the patched image with `kernels`.
    pub fn project(&self, kernels: &Kernels<T>) -> Result<Tensor3<T>> {
        self.check_kernels(kernels)?;
        let sites = self.out_h * self.out_w;
        let mut out = vec![T::zero(); kernels.count() * sites];
        {
            let mut c = ArrayViewMut2::from_shape((kernels.count(), sites), &mut out).expect("output layout");
            gemm(kernels.matrix(), self.matrix().t(), &mut c);
        }
        Ok(Tensor3::from_raw(kernels.count(), self.out_h, self.out_w, out))
    }

    /// Gradient of `⟨conv(image, W), grad⟩` with respect to `W`:
    /// `dW[j, c, a, b] = Σ_{u,v} grad[j, u, v] · image[c, u·s + a, v·s + b]`.
    pub fn correlate(&self, grad: &Tensor3<T>) -> Result<Vec<T>> {
        if grad.height() != self.out_h || grad.width() != self.out_w {
            return Err(Error::shape(
                "kernel gradient",
                format!(
                    "gradient grid {}x{} != output grid {}x{}",
                    grad.height(),
                    grad.width(),
                    self.out_h,
                    self.out_w
                ),
            ));
        }
        let sites = self.out_h * self.out_w;
        let mut out = vec![T::zero(); grad.channels() * self.taps()];
        {
            let g = ArrayView2::from_shape((grad.channels(), sites), grad.data()).expect("grad layout");
            let mut c = ArrayViewMut2::from_shape((grad.channels(), self.taps()), &mut out).expect("output layout");
            gemm(g, self.matrix(), &mut c);
        }
        Ok(out)
    }
}

/// Valid convolution: `out[j, u, v] = Σ_{c,a,b} image[c, u·s+a, v·s+b] · W[j, c, a, b]`.
pub fn conv2d<T: Real>(image: &Tensor3<T>, kernels: &Kernels<T>, stride: usize) -> Result<Tensor3<T>> {
    if kernels.in_channels() != image.channels() {
        return Err(Error::shape(
            "conv2d",
            format!(
                "kernel in_channels {} != image channels {}",
                kernels.in_channels(),
                image.channels()
            ),
        ));
    }
    Patches::new(image, kernels.side(), stride)?.project(kernels)
}

/// Minimal-size transposed convolution: output side `(H′−1)·s + K`.
pub fn deconv2d<T: Real>(features: &Tensor3<T>, kernels: &Kernels<T>, stride: usize) -> Result<Tensor3<T>> {
    if stride == 0 {
        return Err(Error::Precondition("stride must be >= 1".into()));
    }
    let h = (features.height().max(1) - 1) * stride + kernels.side();
    let w = (features.width().max(1) - 1) * stride + kernels.side();
    deconv2d_to(features, kernels, stride, h, w)
}

/// Transposed convolution into an `out_h × out_w` canvas. This is the exact
/// adjoint of [`conv2d`] applied to images of that size; pixels no kernel
/// placement covers stay zero.
pub fn deconv2d_to<T: Real>(
    features: &Tensor3<T>,
    kernels: &Kernels<T>,
    stride: usize,
    out_h: usize,
    out_w: usize,
) -> Result<Tensor3<T>> {
    if stride == 0 {
        return Err(Error::Precondition("stride must be >= 1".into()));
    }
    if features.channels() != kernels.count() {
        return Err(Error::shape(
            "deconv2d",
            format!(
                "feature channels {} != kernel count {}",
                features.channels(),
                kernels.count()
            ),
        ));
    }
    let (fh, fw, side) = (features.height(), features.width(), kernels.side());
    if fh == 0 || fw == 0 || (fh - 1) * stride + side > out_h || (fw - 1) * stride + side > out_w {
        return Err(Error::shape(
            "deconv2d",
            format!("feature grid {fh}x{fw} with kernel {side} stride {stride} does not fit output {out_h}x{out_w}"),
        ));
    }
    let sites = fh * fw;
    let taps = kernels.taps();
    let mut cols = vec![T::zero(); taps * sites];
    {
        let f = ArrayView2::from_shape((kernels.count(), sites), features.data()).expect("feature layout");
        let mut c = ArrayViewMut2::from_shape((taps, sites), &mut cols).expect("column layout");
        gemm(kernels.matrix().t(), f, &mut c);
    }
    let channels = kernels.in_channels();
    let mut out = vec![T::zero(); channels * out_h * out_w];
    for c in 0..channels {
        for a in 0..side {
            for b in 0..side {
                let tap = (c * side + a) * side + b;
                let col = &cols[tap * sites..(tap + 1) * sites];
                for u in 0..fh {
                    let row = (c * out_h + u * stride + a) * out_w + b;
                    for v in 0..fw {
                        let dst = &mut out[row + v * stride];
                        *dst = *dst + col[u * fw + v];
                    }
                }
            }
        }
    }
    Ok(Tensor3::from_raw(channels, out_h, out_w, out))
}

/// Wraps an angle into `[0, 2π)`.
pub fn wrap_angle(r: f64) -> f64 {
    let w = r.rem_euclid(TAU);
    if w >= TAU {
        0.0
    } else {
        w
    }
}

/// Translation (pixels) plus rotation (radians, normalized to `[0, 2π)`).
#[derive(Clone, Copy, Debug, PartialEq, Default)]
pub struct TransformParams {
    t_x: f64,
    t_y: f64,
    r_theta: f64,
}

impl TransformParams {
    /// Panics if any component is non-finite.
    pub fn new(t_x: f64, t_y: f64, r_theta: f64) -> Self {
        assert!(
            t_x.is_finite() && t_y.is_finite() && r_theta.is_finite(),
            "TransformParams must be finite"
        );
        Self {
            t_x,
            t_y,
            r_theta: wrap_angle(r_theta),
        }
    }

    pub fn identity() -> Self {
        Self::default()
    }

    pub fn t_x(&self) -> f64 {
        self.t_x
    }

    pub fn t_y(&self) -> f64 {
        self.t_y
    }

    pub fn r_theta(&self) -> f64 {
        self.r_theta
    }

    pub fn is_identity(&self) -> bool {
        self.t_x == 0.0 && self.t_y == 0.0 && self.r_theta == 0.0
    }
}

/// Precomputed bilinear resampling of an `height × width` plane under
/// "rotate about the center, then translate". Each output pixel reads at most
/// four source pixels; samples outside the plane contribute zero.
#[derive(Clone, Debug)]
pub struct SamplingPlan<T = f32> {
    height: usize,
    width: usize,
    taps: Vec<(u32, u32, T)>,
}

impl<T: Real> SamplingPlan<T> {
    pub fn new(height: usize, width: usize, rotation: f64, t_x: f64, t_y: f64) -> Self {
        let (sin, cos) = if rotation == 0.0 { (0.0, 1.0) } else { rotation.sin_cos() };
        let cx = (width as f64 - 1.0) / 2.0;
        let cy = (height as f64 - 1.0) / 2.0;
        let mut taps = Vec::with_capacity(height * width * 4);
        for y in 0..height {
            for x in 0..width {
                // Inverse map: src = c + R(−θ)·(p − c − t).
                let dx = x as f64 - cx - t_x;
                let dy = y as f64 - cy - t_y;
                let sx = cx + cos * dx + sin * dy;
                let sy = cy - sin * dx + cos * dy;
                let x0 = sx.floor();
                let y0 = sy.floor();
                let fx = sx - x0;
                let fy = sy - y0;
                let out = (y * width + x) as u32;
                for (oy, wy) in [(0.0, 1.0 - fy), (1.0, fy)] {
                    for (ox, wx) in [(0.0, 1.0 - fx), (1.0, fx)] {
                        let w = wx * wy;
                        let (px, py) = (x0 + ox, y0 + oy);
                        if w == 0.0 || px < 0.0 || py < 0.0 || px >= width as f64 || py >= height as f64 {
                            continue;
                        }
                        let src = (py as usize * width + px as usize) as u32;
                        taps.push((out, src, T::cast(w)));
                    }
                }
            }
        }
        Self { height, width, taps }
    }

    /// Plan for pure rotation about the plane center.
    pub fn rotation(height: usize, width: usize, rotation: f64) -> Self {
        Self::new(height, width, rotation, 0.0, 0.0)
    }

    pub fn plane(&self) -> usize {
        self.height * self.width
    }

    /// Resamples one plane; `dst` is overwritten.
    pub fn apply(&self, src: &[T], dst: &mut [T]) {
        debug_assert_eq!(src.len(), self.plane());
        debug_assert_eq!(dst.len(), self.plane());
        dst.iter_mut().for_each(|v| *v = T::zero());
        for &(o, s, w) in &self.taps {
            let d = &mut dst[o as usize];
            *d = *d + w * src[s as usize];
        }
    }

    /// Adjoint of [`SamplingPlan::apply`]; accumulates into `grad_src`.
    pub fn apply_transpose(&self, grad_dst: &[T], grad_src: &mut [T]) {
        debug_assert_eq!(grad_dst.len(), self.plane());
        debug_assert_eq!(grad_src.len(), self.plane());
        for &(o, s, w) in &self.taps {
            let d = &mut grad_src[s as usize];
            *d = *d + w * grad_dst[o as usize];
        }
    }
}

/// Rotates `image` by `delta.r_theta` about its center, then translates by
/// `(t_x, t_y)`; bilinear interpolation with zero exterior.
pub fn warp<T: Real>(image: &Tensor3<T>, delta: &TransformParams) -> Tensor3<T> {
    if delta.is_identity() || image.is_empty() {
        return image.clone();
    }
    let plan = SamplingPlan::new(image.height(), image.width(), delta.r_theta(), delta.t_x(), delta.t_y());
    let mut out = Tensor3::zeros(image.channels(), image.height(), image.width());
    for c in 0..image.channels() {
        plan.apply(image.channel(c), out.channel_mut(c));
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_tensor(rng: &mut ChaCha8Rng, c: usize, h: usize, w: usize) -> Tensor3<f64> {
        Tensor3::from_vec(c, h, w, (0..c * h * w).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap()
    }

    fn random_kernels(rng: &mut ChaCha8Rng, n: usize, c: usize, k: usize) -> Kernels<f64> {
        Kernels::from_vec(n, c, k, (0..n * c * k * k).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap()
    }

    #[test]
    fn zero_kernel_gives_zero_feature() {
        let img = Tensor3::<f32>::from_vec(1, 3, 3, (1..=9).map(|v| v as f32 / 9.0).collect()).unwrap();
        let k = Kernels::<f32>::zeros(1, 1, 3);
        let f = conv2d(&img, &k, 1).unwrap();
        assert_eq!(f.shape(), (1, 1, 1));
        assert_eq!(f.data()[0], 0.0);
    }

    #[test]
    fn delta_kernel_picks_center() {
        let img = Tensor3::<f32>::from_vec(1, 3, 3, (1..=9).map(|v| v as f32 / 9.0).collect()).unwrap();
        let mut w = vec![0.0f32; 9];
        w[4] = 1.0;
        let k = Kernels::from_vec(1, 1, 3, w).unwrap();
        let f = conv2d(&img, &k, 1).unwrap();
        assert_eq!(f.data()[0], img.at(0, 1, 1));
    }

    #[test]
    fn conv_shape_errors_name_the_axis() {
        let img = Tensor3::<f32>::zeros(1, 4, 4);
        let err = conv2d(&img, &Kernels::zeros(2, 1, 5), 1).unwrap_err().to_string();
        assert!(err.contains("height") && err.contains("width"), "{err}");
        let err = conv2d(&img, &Kernels::zeros(2, 3, 3), 1).unwrap_err().to_string();
        assert!(err.contains("in_channels"), "{err}");
        assert!(matches!(conv2d(&img, &Kernels::zeros(2, 1, 3), 0), Err(Error::Precondition(_))));
    }

    #[test]
    fn conv_output_follows_valid_padding_formula() {
        let img = Tensor3::<f32>::zeros(1, 28, 28);
        let f = conv2d(&img, &Kernels::zeros(3, 1, 9), 2).unwrap();
        assert_eq!(f.shape(), (3, 10, 10));
    }

    #[test]
    fn zero_features_decode_to_zero() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let k = random_kernels(&mut rng, 4, 2, 3);
        let out = deconv2d(&Tensor3::zeros(4, 3, 3), &k, 2).unwrap();
        assert_eq!(out.shape(), (2, 7, 7));
        assert!(out.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn impulse_stamps_kernel_at_strided_site() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let k = random_kernels(&mut rng, 3, 1, 3);
        let mut f = Tensor3::<f64>::zeros(3, 4, 4);
        f.set(1, 2, 3, 1.0);
        let out = deconv2d(&f, &k, 2).unwrap();
        for y in 0..out.height() {
            for x in 0..out.width() {
                let inside = (4..7).contains(&y) && (6..9).contains(&x);
                let expected = if inside { k.kernel(1)[(y - 4) * 3 + (x - 6)] } else { 0.0 };
                assert_eq!(out.at(0, y, x), expected);
            }
        }
    }

    #[test]
    fn deconv_rejects_channel_mismatch() {
        let k = Kernels::<f32>::zeros(4, 1, 3);
        assert!(deconv2d(&Tensor3::zeros(3, 2, 2), &k, 1).is_err());
        assert!(deconv2d_to(&Tensor3::zeros(4, 2, 2), &k, 1, 3, 3).is_err());
    }

    #[test]
    fn sized_deconv_is_adjoint_of_conv_on_uncovered_images() {
        // 28 px, K = 9, s = 2 leaves the last row/column uncovered.
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let img = random_tensor(&mut rng, 1, 28, 28);
        let k = random_kernels(&mut rng, 5, 1, 9);
        let f = conv2d(&img, &k, 2).unwrap();
        let g = random_tensor(&mut rng, 5, f.height(), f.width());
        let back = deconv2d_to(&g, &k, 2, 28, 28).unwrap();
        let lhs = f.inner(&g).unwrap();
        let rhs = img.inner(&back).unwrap();
        assert!((lhs - rhs).abs() <= 1e-10 * lhs.abs().max(1.0));
        assert!(back.channel(0)[27 * 28..].iter().all(|&v| v == 0.0));
    }

    #[test]
    fn warp_identity_is_bit_exact() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let img = random_tensor(&mut rng, 2, 7, 9).cast::<f32>();
        assert_eq!(warp(&img, &TransformParams::identity()), img);
        // The general path is also exact at the identity.
        let plan = SamplingPlan::<f32>::new(7, 9, 0.0, 0.0, 0.0);
        let mut out = vec![0.0; 63];
        plan.apply(img.channel(1), &mut out);
        assert_eq!(out, img.channel(1));
    }

    #[test]
    fn sampling_plan_transpose_is_adjoint() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        for _ in 0..20 {
            let plan = SamplingPlan::<f64>::new(
                6,
                8,
                rng.random_range(0.0..TAU),
                rng.random_range(-3.0..3.0),
                rng.random_range(-3.0..3.0),
            );
            let a = random_tensor(&mut rng, 1, 6, 8);
            let b = random_tensor(&mut rng, 1, 6, 8);
            let mut pa = vec![0.0; 48];
            plan.apply(a.data(), &mut pa);
            let mut tb = vec![0.0; 48];
            plan.apply_transpose(b.data(), &mut tb);
            assert!((dot(&pa, b.data()) - dot(a.data(), &tb)).abs() < 1e-12);
        }
    }

    #[test]
    fn angles_wrap_into_range() {
        assert_eq!(wrap_angle(TAU), 0.0);
        assert_eq!(wrap_angle(-1e-300), 0.0);
        assert!((wrap_angle(-1.0) - (TAU - 1.0)).abs() < 1e-15);
        let d = TransformParams::new(1.0, 2.0, 3.0 * TAU + 0.5);
        assert!((d.r_theta() - 0.5).abs() < 1e-12);
    }

    #[test]
    fn from_vec_rejects_non_finite() {
        assert!(Tensor3::<f32>::from_vec(1, 1, 2, vec![0.0, f32::NAN]).is_err());
        assert!(Tensor3::<f32>::from_vec(1, 1, 2, vec![0.0]).is_err());
        assert!(Kernels::<f32>::from_vec(1, 1, 1, vec![f32::INFINITY]).is_err());
    }
}
