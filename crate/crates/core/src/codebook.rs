//! Learnable prediction-matrix codebook.
//!
//! Each module owns a 3-D grid of `l × l` matrices indexed by
//! `(t_x, t_y, r_θ)`. Translation nodes are evenly spaced over the sub-stride
//! residual range `[−s/2, s/2]` (endpoints included, so the grid is symmetric
//! and contains `t = 0` whenever `n_t` is odd); rotation nodes sit at
//! `j·2π/n_r` and the rotation axis wraps. Lookups interpolate trilinearly.

use std::f64::consts::TAU;

use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::dataset::SeededRng;
use crate::error::{Error, Result};
use crate::tensor::{wrap_angle, Real, TransformParams};

/// Noise scale added to identity initializations.
pub const IDENTITY_INIT_NOISE: f64 = 0.01;

/// Resultant length below which the circular mean falls back to zero.
pub const DEGENERATE_RESULTANT: f64 = 1e-8;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum InitMode {
    /// `I + ε·N(0, 1)` at every node.
    Identity,
    /// `N(0, 1/l)` entries.
    Random,
}

/// Sign of the exponent in the soft-argmin weights: `Neg` uses `e^{−M/T}`.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SymSign {
    #[default]
    Neg,
    Pos,
}

impl SymSign {
    pub fn factor(self) -> f64 {
        match self {
            SymSign::Neg => -1.0,
            SymSign::Pos => 1.0,
        }
    }
}

/// Grid dimensions of a codebook.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GridShape {
    pub modules: usize,
    pub module_len: usize,
    pub grid_t: usize,
    pub grid_r: usize,
    pub stride: usize,
}

impl GridShape {
    pub fn nodes_per_module(&self) -> usize {
        self.grid_t * self.grid_t * self.grid_r
    }

    pub fn matrix_len(&self) -> usize {
        self.module_len * self.module_len
    }

    pub fn storage_len(&self) -> usize {
        self.modules * self.nodes_per_module() * self.matrix_len()
    }

    pub(crate) fn validate(&self) -> Result<()> {
        let GridShape {
            modules,
            module_len,
            grid_t,
            grid_r,
            stride,
        } = *self;
        if modules == 0 || module_len == 0 || grid_t == 0 || grid_r == 0 || stride == 0 {
            return Err(Error::Precondition(format!(
                "codebook sizes must be >= 1 (k={modules}, l={module_len}, n_t={grid_t}, n_r={grid_r}, stride={stride})"
            )));
        }
        Ok(())
    }
}

/// One grid node touched by an interpolated lookup, with its weight and the
/// weight's partial derivatives along `(t_x, t_y, r_θ)`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Corner {
    pub node: usize,
    pub weight: f64,
    pub d_weight: [f64; 3],
}

/// Trilinear stencil of a lookup: at most eight corners with non-negative
/// weights summing to one.
#[derive(Clone, Debug, PartialEq)]
pub struct Interpolation {
    corners: Vec<Corner>,
}

impl Interpolation {
    /// Corners with non-zero weight.
    pub fn active(&self) -> impl Iterator<Item = &Corner> {
        self.corners.iter().filter(|c| c.weight != 0.0)
    }

    /// All stencil corners, including zero-weight ones whose derivative may
    /// still be non-zero.
    pub fn corners(&self) -> &[Corner] {
        &self.corners
    }
}

#[derive(Clone, Copy, Debug)]
struct AxisStencil {
    idx: [usize; 2],
    weight: [f64; 2],
    d_weight: [f64; 2],
    len: usize,
}

impl AxisStencil {
    fn single() -> Self {
        Self {
            idx: [0, 0],
            weight: [1.0, 0.0],
            d_weight: [0.0, 0.0],
            len: 1,
        }
    }
}

/// Snaps positions that are within rounding distance of a node onto it, so
/// lookups at nodes are exact.
fn snap(pos: f64) -> f64 {
    let r = pos.round();
    if (pos - r).abs() <= 1e-9 * r.abs().max(1.0) {
        r
    } else {
        pos
    }
}

/// Result of the soft-argmin over a codebook entry.
#[derive(Clone, Debug)]
pub struct SoftArgmin {
    pub delta: TransformParams,
    /// Softmax weight per grid node (module-local node order).
    pub weights: Vec<f64>,
    /// Weighted resultant `(Σ p cos r, Σ p sin r)` of the rotation nodes.
    pub resultant: (f64, f64),
}

impl SoftArgmin {
    pub fn resultant_len(&self) -> f64 {
        self.resultant.0.hypot(self.resultant.1)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Codebook<T = f32> {
    shape: GridShape,
    translation_diagonal: bool,
    matrices: Vec<T>,
}

impl<T: Real> Codebook<T> {
    /// Allocates a codebook. `Identity` adds `ε·N(0,1)` noise with
    /// `ε = IDENTITY_INIT_NOISE`; `Random` draws `N(0, 1/l)`.
    pub fn new(shape: GridShape, init: InitMode, rng: &mut SeededRng) -> Result<Self> {
        Self::with_noise(shape, init, IDENTITY_INIT_NOISE, rng)
    }

    /// Like [`Codebook::new`] with an explicit identity-noise scale.
    pub fn with_noise(shape: GridShape, init: InitMode, noise: f64, rng: &mut SeededRng) -> Result<Self> {
        shape.validate()?;
        let l = shape.module_len;
        let mut matrices = Vec::with_capacity(shape.storage_len());
        match init {
            InitMode::Identity => {
                let normal = Normal::new(0.0, 1.0).expect("unit normal");
                for _ in 0..shape.modules * shape.nodes_per_module() {
                    for a in 0..l {
                        for b in 0..l {
                            let base = if a == b { 1.0 } else { 0.0 };
                            let jitter = if noise == 0.0 { 0.0 } else { noise * normal.sample(rng) };
                            matrices.push(T::cast(base + jitter));
                        }
                    }
                }
            }
            InitMode::Random => {
                let normal = Normal::new(0.0, (1.0 / l as f64).sqrt()).expect("valid std");
                matrices.extend((0..shape.storage_len()).map(|_| T::cast(normal.sample(rng))));
            }
        }
        Ok(Self {
            shape,
            translation_diagonal: false,
            matrices,
        })
    }

    /// Exact identity at every node.
    pub fn identity(shape: GridShape) -> Result<Self> {
        shape.validate()?;
        let l = shape.module_len;
        let mut matrices = vec![T::zero(); shape.storage_len()];
        for block in matrices.chunks_exact_mut(l * l) {
            for a in 0..l {
                block[a * l + a] = T::one();
            }
        }
        Ok(Self {
            shape,
            translation_diagonal: false,
            matrices,
        })
    }

    pub fn from_parts(shape: GridShape, matrices: Vec<T>, translation_diagonal: bool) -> Result<Self> {
        shape.validate()?;
        if matrices.len() != shape.storage_len() {
            return Err(Error::shape(
                "Codebook::from_parts",
                format!("{} values for storage length {}", matrices.len(), shape.storage_len()),
            ));
        }
        if !crate::tensor::all_finite(&matrices) {
            return Err(Error::NonFinite("codebook matrices".into()));
        }
        let mut cb = Self {
            shape,
            translation_diagonal: false,
            matrices,
        };
        cb.set_translation_diagonal(translation_diagonal);
        Ok(cb)
    }

    pub fn shape(&self) -> GridShape {
        self.shape
    }

    pub fn modules(&self) -> usize {
        self.shape.modules
    }

    pub fn module_len(&self) -> usize {
        self.shape.module_len
    }

    pub fn matrices(&self) -> &[T] {
        &self.matrices
    }

    pub(crate) fn matrices_mut(&mut self) -> &mut [T] {
        &mut self.matrices
    }

    pub fn cast<U: Real>(&self) -> Codebook<U> {
        Codebook {
            shape: self.shape,
            translation_diagonal: self.translation_diagonal,
            matrices: self.matrices.iter().map(|v| U::cast(v.as_f64())).collect(),
        }
    }

    /// Half-width of the translation range, `s/2` pixels.
    pub fn t_half(&self) -> f64 {
        0.5 * self.shape.stride as f64
    }

    pub fn t_node(&self, ix: usize) -> f64 {
        if self.shape.grid_t == 1 {
            return 0.0;
        }
        let spacing = 2.0 * self.t_half() / (self.shape.grid_t - 1) as f64;
        -self.t_half() + ix as f64 * spacing
    }

    pub fn r_node(&self, ir: usize) -> f64 {
        ir as f64 * TAU / self.shape.grid_r as f64
    }

    /// Module-local node index of grid position `(ix, iy, ir)`.
    pub fn node_index(&self, ix: usize, iy: usize, ir: usize) -> usize {
        (ix * self.shape.grid_t + iy) * self.shape.grid_r + ir
    }

    pub fn node_coords(&self, node: usize) -> (usize, usize, usize) {
        let ir = node % self.shape.grid_r;
        let rest = node / self.shape.grid_r;
        (rest / self.shape.grid_t, rest % self.shape.grid_t, ir)
    }

    pub fn node_delta(&self, node: usize) -> TransformParams {
        let (ix, iy, ir) = self.node_coords(node);
        TransformParams::new(self.t_node(ix), self.t_node(iy), self.r_node(ir))
    }

    /// Offset of a node's matrix inside [`Codebook::matrices`].
    pub fn matrix_offset(&self, module: usize, node: usize) -> usize {
        (module * self.shape.nodes_per_module() + node) * self.shape.matrix_len()
    }

    pub fn matrix(&self, module: usize, node: usize) -> &[T] {
        let off = self.matrix_offset(module, node);
        &self.matrices[off..off + self.shape.matrix_len()]
    }

    pub(crate) fn matrix_mut(&mut self, module: usize, node: usize) -> &mut [T] {
        let off = self.matrix_offset(module, node);
        let len = self.shape.matrix_len();
        &mut self.matrices[off..off + len]
    }

    fn check_module(&self, module: usize) -> Result<()> {
        if module >= self.shape.modules {
            return Err(Error::Index {
                what: "module",
                index: module,
                limit: self.shape.modules,
            });
        }
        Ok(())
    }

    // ---- translation-diagonal constraint -------------------------------

    pub fn translation_diagonal(&self) -> bool {
        self.translation_diagonal
    }

    /// Restricts the rotation-free slice (`r_θ = 0` nodes) of every module to
    /// diagonal matrices, i.e. each kernel is its own translation-equivariant
    /// unit. Masked entries are zeroed immediately and stay zero because their
    /// gradients are masked too.
    pub fn set_translation_diagonal(&mut self, on: bool) {
        self.translation_diagonal = on;
        if !on {
            return;
        }
        let l = self.shape.module_len;
        for module in 0..self.shape.modules {
            for ix in 0..self.shape.grid_t {
                for iy in 0..self.shape.grid_t {
                    let node = self.node_index(ix, iy, 0);
                    let m = self.matrix_mut(module, node);
                    for a in 0..l {
                        for b in 0..l {
                            if a != b {
                                m[a * l + b] = T::zero();
                            }
                        }
                    }
                }
            }
        }
    }

    /// Whether entry `(a, b)` of `node` is pinned to zero by the constraint.
    pub fn is_masked(&self, node: usize, a: usize, b: usize) -> bool {
        self.translation_diagonal && a != b && node % self.shape.grid_r == 0
    }

    /// Zeroes gradient entries the constraint pins.
    pub fn mask_gradient(&self, grad: &mut [T]) {
        if !self.translation_diagonal {
            return;
        }
        let l = self.shape.module_len;
        let nodes = self.shape.nodes_per_module();
        for (block_idx, block) in grad.chunks_exact_mut(l * l).enumerate() {
            if (block_idx % nodes) % self.shape.grid_r != 0 {
                continue;
            }
            for a in 0..l {
                for b in 0..l {
                    if a != b {
                        block[a * l + b] = T::zero();
                    }
                }
            }
        }
    }

    // ---- interpolation -------------------------------------------------

    fn t_stencil(&self, t: f64) -> AxisStencil {
        let n = self.shape.grid_t;
        if n == 1 {
            return AxisStencil::single();
        }
        let half = self.t_half();
        let spacing = 2.0 * half / (n - 1) as f64;
        let inside = t > -half && t < half;
        let pos = snap((t.clamp(-half, half) + half) / spacing);
        let i0 = (pos.floor() as usize).min(n - 2);
        let f = pos - i0 as f64;
        let d = if inside { 1.0 / spacing } else { 0.0 };
        AxisStencil {
            idx: [i0, i0 + 1],
            weight: [1.0 - f, f],
            d_weight: [-d, d],
            len: 2,
        }
    }

    fn r_stencil(&self, r: f64) -> AxisStencil {
        let n = self.shape.grid_r;
        if n == 1 {
            return AxisStencil::single();
        }
        let cell = TAU / n as f64;
        let mut pos = snap(wrap_angle(r) / cell);
        if pos >= n as f64 {
            pos -= n as f64;
        }
        let i0 = (pos.floor() as usize).min(n - 1);
        let f = pos - i0 as f64;
        let d = 1.0 / cell;
        AxisStencil {
            idx: [i0, (i0 + 1) % n],
            weight: [1.0 - f, f],
            d_weight: [-d, d],
            len: 2,
        }
    }

    /// Trilinear stencil for `delta`; translations are clamped into the grid
    /// range and the rotation wraps modulo 2π.
    pub fn interpolation(&self, delta: &TransformParams) -> Interpolation {
        let sx = self.t_stencil(delta.t_x());
        let sy = self.t_stencil(delta.t_y());
        let sr = self.r_stencil(delta.r_theta());
        let mut corners = Vec::with_capacity(8);
        for a in 0..sx.len {
            for b in 0..sy.len {
                for c in 0..sr.len {
                    let (wx, wy, wr) = (sx.weight[a], sy.weight[b], sr.weight[c]);
                    corners.push(Corner {
                        node: self.node_index(sx.idx[a], sy.idx[b], sr.idx[c]),
                        weight: wx * wy * wr,
                        d_weight: [
                            sx.d_weight[a] * wy * wr,
                            wx * sy.d_weight[b] * wr,
                            wx * wy * sr.d_weight[c],
                        ],
                    });
                }
            }
        }
        Interpolation { corners }
    }

    /// Blends module matrices with a precomputed stencil.
    pub fn blend(&self, module: usize, interp: &Interpolation) -> Vec<T> {
        let len = self.shape.matrix_len();
        let mut active = interp.active();
        let first = active.next().expect("stencil weights sum to one");
        let mut out: Vec<T> = if first.weight == 1.0 {
            self.matrix(module, first.node).to_vec()
        } else {
            let w = T::cast(first.weight);
            self.matrix(module, first.node).iter().map(|&v| w * v).collect()
        };
        for corner in active {
            let w = T::cast(corner.weight);
            let m = self.matrix(module, corner.node);
            for i in 0..len {
                out[i] = out[i] + w * m[i];
            }
        }
        out
    }

    /// Interpolated `l × l` prediction matrix (row-major) of `module` at `delta`.
    pub fn lookup(&self, module: usize, delta: &TransformParams) -> Result<Vec<T>> {
        self.check_module(module)?;
        Ok(self.blend(module, &self.interpolation(delta)))
    }

    /// Scatters a gradient with respect to a blended matrix back onto the
    /// stencil's grid nodes.
    pub fn scatter_gradient(&self, module: usize, interp: &Interpolation, d_matrix: &[T], grad: &mut [T]) {
        let len = self.shape.matrix_len();
        for corner in interp.active() {
            let w = T::cast(corner.weight);
            let off = self.matrix_offset(module, corner.node);
            for i in 0..len {
                grad[off + i] = grad[off + i] + w * d_matrix[i];
            }
        }
    }

    // ---- soft-argmin ---------------------------------------------------

    /// Softmax over all grid nodes of `sign·M_mn(δ)/T`, reduced to a
    /// transform: arithmetic mean for translations, circular mean for the
    /// rotation (zero when the resultant is degenerate).
    pub fn soft_argmin(&self, module: usize, m: usize, n: usize, temperature: f64, sign: SymSign) -> Result<SoftArgmin> {
        self.check_module(module)?;
        let l = self.shape.module_len;
        for (what, idx) in [("row", m), ("column", n)] {
            if idx >= l {
                return Err(Error::Index { what, index: idx, limit: l });
            }
        }
        if !(temperature > 0.0 && temperature.is_finite()) {
            return Err(Error::Precondition(format!("temperature {temperature} must be positive")));
        }
        let nodes = self.shape.nodes_per_module();
        let scale = sign.factor() / temperature;
        let mut weights: Vec<f64> = (0..nodes)
            .map(|node| scale * self.matrix(module, node)[m * l + n].as_f64())
            .collect();
        let max = weights.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let mut total = 0.0;
        for w in weights.iter_mut() {
            *w = (*w - max).exp();
            total += *w;
        }
        let (mut tx, mut ty, mut c, mut s) = (0.0, 0.0, 0.0, 0.0);
        for (node, w) in weights.iter_mut().enumerate() {
            *w /= total;
            let (ix, iy, ir) = self.node_coords(node);
            tx += *w * self.t_node(ix);
            ty += *w * self.t_node(iy);
            let (sin, cos) = self.r_node(ir).sin_cos();
            c += *w * cos;
            s += *w * sin;
        }
        let r = if c.hypot(s) < DEGENERATE_RESULTANT { 0.0 } else { s.atan2(c) };
        let half = self.t_half();
        Ok(SoftArgmin {
            delta: TransformParams::new(tx.clamp(-half, half), ty.clamp(-half, half), r),
            weights,
            resultant: (c, s),
        })
    }

    /// The transform `δ*_mn` most associated with entry `(m, n)` of `module`.
    pub fn soft_argmin_delta(&self, module: usize, m: usize, n: usize, temperature: f64, sign: SymSign) -> Result<TransformParams> {
        Ok(self.soft_argmin(module, m, n, temperature, sign)?.delta)
    }
}
