//! Characterization of trained models: grating tuning curves, selectivity
//! statistics, kernel mosaics, module-wise reconstructions, codebook sweeps,
//! equivariance error and image-quality metrics.

use std::f64::consts::PI;
use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::codebook::Codebook;
use crate::dataset::{contrast_plane, sample_pair, AugConfig, Dataset, SeededRng};
use crate::error::{Error, Result};
use crate::model::{predict_features, probe_onehot, restrict_to_modules, KernelBank, PredictionOp};
use crate::objective::TrainingPair;
use crate::tensor::{ImageTensor, Real, Tensor3, TransformParams};

/// Circular variance below which a kernel counts as orientation selective.
pub const SELECTIVITY_THRESHOLD: f64 = 0.6;
pub const PSNR_CAP: f64 = 100.0;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AnalysisConfig {
    pub n_orientations: usize,
    pub n_phases: usize,
    pub n_freqs: usize,
    pub selectivity_threshold: f64,
    pub equivariance_samples: usize,
    pub sweep_frames: usize,
    pub seed: u64,
}

impl Default for AnalysisConfig {
    fn default() -> Self {
        Self {
            n_orientations: 36,
            n_phases: 8,
            n_freqs: 16,
            selectivity_threshold: SELECTIVITY_THRESHOLD,
            equivariance_samples: 256,
            sweep_frames: 16,
            seed: 1,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct TuningCurve {
    pub axis: Vec<f64>,
    pub responses: Vec<f64>,
}

impl TuningCurve {
    /// Axis value of the strongest response (first one on ties).
    pub fn preferred(&self) -> f64 {
        let mut best = 0;
        for (i, &r) in self.responses.iter().enumerate() {
            if r > self.responses[best] {
                best = i;
            }
        }
        self.axis[best]
    }

    pub fn peak_index(&self) -> usize {
        let p = self.preferred();
        self.axis.iter().position(|&a| a == p).unwrap_or(0)
    }
}

/// `θⱼ = j·π/n`: gratings at θ and θ + π are the same stimulus.
pub fn orientation_axis(n: usize) -> Vec<f64> {
    (0..n).map(|j| j as f64 * PI / n as f64).collect()
}

/// `fⱼ = 0.5·(j + 1)/n` cycles per pixel.
pub fn frequency_axis(n: usize) -> Vec<f64> {
    (0..n).map(|j| 0.5 * (j + 1) as f64 / n as f64).collect()
}

fn phases(n: usize) -> Vec<f64> {
    (0..n).map(|p| 2.0 * PI * p as f64 / n as f64).collect()
}

/// `max_φ |⟨k, g_φ⟩|` against zero-mean gratings replicated over channels.
fn grating_response<T: Real>(kernel: &[T], channels: usize, side: usize, theta: f64, freq: f64, phase_list: &[f64]) -> f64 {
    let plane_len = side * side;
    let mut best = 0.0f64;
    for &phase in phase_list {
        let plane = contrast_plane(side, theta, freq, phase);
        let mut acc = 0.0;
        for c in 0..channels {
            let k = &kernel[c * plane_len..(c + 1) * plane_len];
            acc += k.iter().zip(&plane).map(|(a, b)| a.as_f64() * b).sum::<f64>();
        }
        best = best.max(acc.abs());
    }
    best
}

fn check_kernel<T>(kernel: &[T], channels: usize, side: usize) -> Result<()> {
    if kernel.len() != channels * side * side || side == 0 {
        return Err(Error::shape(
            "tuning",
            format!("kernel of {} values is not {channels}×{side}×{side}", kernel.len()),
        ));
    }
    Ok(())
}

fn check_frequency(f: f64) -> Result<()> {
    if !(f > 0.0 && f <= 0.5) {
        return Err(Error::Precondition(format!("frequency {f} outside (0, 0.5]")));
    }
    Ok(())
}

/// Orientation tuning of one `channels × side × side` kernel.
pub fn orientation_tuning<T: Real>(
    kernel: &[T],
    channels: usize,
    side: usize,
    n_orientations: usize,
    frequency: f64,
    n_phases: usize,
) -> Result<TuningCurve> {
    check_kernel(kernel, channels, side)?;
    check_frequency(frequency)?;
    if n_orientations == 0 || n_phases == 0 {
        return Err(Error::Precondition("need at least one orientation and one phase".into()));
    }
    let axis = orientation_axis(n_orientations);
    let ph = phases(n_phases);
    let responses = axis
        .iter()
        .map(|&t| grating_response(kernel, channels, side, t, frequency, &ph))
        .collect();
    Ok(TuningCurve { axis, responses })
}

/// Frequency tuning of one kernel, maximized over orientations and phases.
pub fn kernel_frequency_tuning<T: Real>(
    kernel: &[T],
    channels: usize,
    side: usize,
    n_freqs: usize,
    n_orientations: usize,
    n_phases: usize,
) -> Result<TuningCurve> {
    check_kernel(kernel, channels, side)?;
    if n_freqs == 0 || n_orientations == 0 || n_phases == 0 {
        return Err(Error::Precondition("tuning needs n_freqs, n_orientations, n_phases >= 1".into()));
    }
    let axis = frequency_axis(n_freqs);
    let thetas = orientation_axis(n_orientations);
    let ph = phases(n_phases);
    let responses = axis
        .iter()
        .map(|&f| {
            thetas
                .iter()
                .map(|&t| grating_response(kernel, channels, side, t, f, &ph))
                .fold(0.0, f64::max)
        })
        .collect();
    Ok(TuningCurve { axis, responses })
}

/// Per-kernel frequency curves for a module plus their mean.
pub fn frequency_tuning<T: Real>(
    kernels: &[&[T]],
    channels: usize,
    side: usize,
    n_freqs: usize,
    n_orientations: usize,
    n_phases: usize,
) -> Result<(Vec<TuningCurve>, TuningCurve)> {
    let curves = kernels
        .iter()
        .map(|k| kernel_frequency_tuning(k, channels, side, n_freqs, n_orientations, n_phases))
        .collect::<Result<Vec<_>>>()?;
    let mut mean = vec![0.0; n_freqs];
    for c in &curves {
        for (m, r) in mean.iter_mut().zip(&c.responses) {
            *m += r;
        }
    }
    if !curves.is_empty() {
        mean.iter_mut().for_each(|m| *m /= curves.len() as f64);
    }
    Ok((
        curves,
        TuningCurve {
            axis: frequency_axis(n_freqs),
            responses: mean,
        },
    ))
}

/// `1 − |Σ r(θ) e^{2iθ}| / Σ r(θ)`; an all-zero curve counts as 1.
pub fn circular_variance(curve: &TuningCurve) -> f64 {
    let total: f64 = curve.responses.iter().sum();
    if total <= 0.0 {
        return 1.0;
    }
    let (mut c, mut s) = (0.0, 0.0);
    for (&t, &r) in curve.axis.iter().zip(&curve.responses) {
        c += r * (2.0 * t).cos();
        s += r * (2.0 * t).sin();
    }
    (1.0 - (c * c + s * s).sqrt() / total).clamp(0.0, 1.0)
}

pub fn fraction_below(values: &[f64], threshold: f64) -> f64 {
    if values.is_empty() {
        return 0.0;
    }
    values.iter().filter(|&&v| v < threshold).count() as f64 / values.len() as f64
}

fn variance(xs: &[f64]) -> f64 {
    if xs.is_empty() {
        return 0.0;
    }
    let mean = xs.iter().sum::<f64>() / xs.len() as f64;
    xs.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / xs.len() as f64
}

/// Spread of module-mean preferred frequencies relative to the spread inside
/// modules: `var_i(mean_m p_im) / mean_i var_m(p_im)`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct VarianceRatio {
    pub between: f64,
    pub within: f64,
    pub ratio: f64,
}

pub fn preferred_frequency_ratio(preferred: &[Vec<f64>]) -> VarianceRatio {
    let means: Vec<f64> = preferred
        .iter()
        .map(|p| p.iter().sum::<f64>() / p.len().max(1) as f64)
        .collect();
    let between = variance(&means);
    let within = preferred.iter().map(|p| variance(p)).sum::<f64>() / preferred.len().max(1) as f64;
    let ratio = if within > 0.0 {
        between / within
    } else if between > 0.0 {
        f64::INFINITY
    } else {
        0.0
    };
    VarianceRatio { between, within, ratio }
}

/// Tuning statistics for every kernel of a bank.
#[derive(Clone, Debug, PartialEq)]
pub struct TuningSummary {
    /// `[module][kernel]` frequency curves.
    pub frequency: Vec<Vec<TuningCurve>>,
    pub module_frequency: Vec<TuningCurve>,
    /// `[module][kernel]` orientation curves at each kernel's preferred frequency.
    pub orientation: Vec<Vec<TuningCurve>>,
    pub preferred_frequency: Vec<Vec<f64>>,
    pub circular_variance: Vec<Vec<f64>>,
    pub fraction_selective: f64,
    pub frequency_ratio: VarianceRatio,
}

impl TuningSummary {
    pub fn compute<T: Real>(bank: &KernelBank<T>, cfg: &AnalysisConfig) -> Result<Self> {
        let (c, side) = (bank.in_channels(), bank.kernel_side());
        let per_module: Vec<(Vec<TuningCurve>, TuningCurve, Vec<TuningCurve>)> = (0..bank.modules())
            .into_par_iter()
            .map(|i| {
                let kernels: Vec<&[T]> = (0..bank.module_len()).map(|m| bank.kernel(i, m)).collect();
                let (freq, mean) = frequency_tuning(&kernels, c, side, cfg.n_freqs, cfg.n_orientations, cfg.n_phases)?;
                let orient = kernels
                    .iter()
                    .zip(&freq)
                    .map(|(k, fc)| orientation_tuning(k, c, side, cfg.n_orientations, fc.preferred(), cfg.n_phases))
                    .collect::<Result<Vec<_>>>()?;
                Ok((freq, mean, orient))
            })
            .collect::<Result<_>>()?;
        let mut out = Self {
            frequency: Vec::new(),
            module_frequency: Vec::new(),
            orientation: Vec::new(),
            preferred_frequency: Vec::new(),
            circular_variance: Vec::new(),
            fraction_selective: 0.0,
            frequency_ratio: VarianceRatio {
                between: 0.0,
                within: 0.0,
                ratio: 0.0,
            },
        };
        for (freq, mean, orient) in per_module {
            out.preferred_frequency.push(freq.iter().map(TuningCurve::preferred).collect());
            out.circular_variance.push(orient.iter().map(circular_variance).collect());
            out.frequency.push(freq);
            out.module_frequency.push(mean);
            out.orientation.push(orient);
        }
        let all_cv: Vec<f64> = out.circular_variance.iter().flatten().copied().collect();
        out.fraction_selective = fraction_below(&all_cv, cfg.selectivity_threshold);
        out.frequency_ratio = preferred_frequency_ratio(&out.preferred_frequency);
        Ok(out)
    }
}

// ---- images --------------------------------------------------------------

/// Linear rescale of `values` to `[0, 1]`; a constant input maps to 0.5.
pub fn min_max_normalize(values: &[f64]) -> Vec<f64> {
    let lo = values.iter().copied().fold(f64::INFINITY, f64::min);
    let hi = values.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if !(hi > lo) {
        return vec![0.5; values.len()];
    }
    values.iter().map(|v| (v - lo) / (hi - lo)).collect()
}

/// Kernel mosaic: one module per row, each kernel min-max normalized, 1-px
/// white separators around every tile.
pub fn kernel_grid_image<T: Real>(bank: &KernelBank<T>) -> ImageTensor<f32> {
    let (k, l, side, c) = (bank.modules(), bank.module_len(), bank.kernel_side(), bank.in_channels());
    let (h, w) = (k * side + k + 1, l * side + l + 1);
    let mut out = Tensor3::<f32>::from_vec(c, h, w, vec![1.0; c * h * w]).expect("grid shape");
    for i in 0..k {
        for m in 0..l {
            let vals: Vec<f64> = bank.kernel(i, m).iter().map(|v| v.as_f64()).collect();
            let norm = min_max_normalize(&vals);
            let (y0, x0) = (1 + i * (side + 1), 1 + m * (side + 1));
            for ch in 0..c {
                for y in 0..side {
                    for x in 0..side {
                        out.set(ch, y0 + y, x0 + x, norm[(ch * side + y) * side + x] as f32);
                    }
                }
            }
        }
    }
    out
}

fn to_u8(v: f64) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0).round() as u8
}

/// Writes a 1- or 3-channel image with values in `[0, 1]` as an 8-bit PNG.
pub fn write_png<T: Real>(path: impl AsRef<Path>, image: &ImageTensor<T>) -> Result<()> {
    let path = path.as_ref();
    let (c, h, w) = image.shape();
    let plane = h * w;
    let d = image.data();
    let (buf, color) = match c {
        1 => (d.iter().map(|v| to_u8(v.as_f64())).collect::<Vec<u8>>(), image::ExtendedColorType::L8),
        3 => (
            (0..plane)
                .flat_map(|p| (0..3).map(move |ch| to_u8(d[ch * plane + p].as_f64())))
                .collect(),
            image::ExtendedColorType::Rgb8,
        ),
        _ => return Err(Error::Image(format!("cannot write {c}-channel image as PNG"))),
    };
    image::save_buffer_with_format(path, &buf, w as u32, h as u32, color, image::ImageFormat::Png)
        .map_err(|e| Error::Image(format!("{}: {e}", path.display())))
}

/// Nearest-neighbour enlargement by an integer factor.
pub fn upscale<T: Real>(image: &ImageTensor<T>, factor: usize) -> ImageTensor<T> {
    let (c, h, w) = image.shape();
    let f = factor.max(1);
    let mut out = Tensor3::zeros(c, h * f, w * f);
    for ch in 0..c {
        for y in 0..h * f {
            for x in 0..w * f {
                out.set(ch, y, x, image.at(ch, y / f, x / f));
            }
        }
    }
    out
}

/// Reads an 8-bit grayscale or RGB PNG back into `[0, 1]` values.
pub fn read_png(path: impl AsRef<Path>) -> Result<ImageTensor<f32>> {
    let path = path.as_ref();
    let img = image::open(path).map_err(|e| Error::Image(format!("{}: {e}", path.display())))?;
    let (w, h) = (img.width() as usize, img.height() as usize);
    match img {
        image::DynamicImage::ImageLuma8(buf) => {
            Tensor3::from_vec(1, h, w, buf.into_raw().into_iter().map(|v| v as f32 / 255.0).collect())
        }
        other => {
            let rgb = other.to_rgb8().into_raw();
            let mut data = vec![0.0f32; 3 * h * w];
            for (p, px) in rgb.chunks_exact(3).enumerate() {
                for ch in 0..3 {
                    data[ch * h * w + p] = px[ch] as f32 / 255.0;
                }
            }
            Tensor3::from_vec(3, h, w, data)
        }
    }
}

/// Places images side by side (top-aligned) with `gap` white columns.
pub fn hstack<T: Real>(images: &[ImageTensor<T>], gap: usize) -> Result<ImageTensor<T>> {
    let Some(first) = images.first() else {
        return Err(Error::Precondition("nothing to stack".into()));
    };
    let c = first.channels();
    if images.iter().any(|i| i.channels() != c) {
        return Err(Error::shape("hstack", "channel counts differ"));
    }
    let h = images.iter().map(|i| i.height()).max().unwrap_or(0);
    let w = images.iter().map(|i| i.width()).sum::<usize>() + gap * (images.len() - 1);
    let mut out = Tensor3::from_vec(c, h, w, vec![T::one(); c * h * w])?;
    let mut x0 = 0;
    for img in images {
        for ch in 0..c {
            for y in 0..img.height() {
                for x in 0..img.width() {
                    out.set(ch, y, x0 + x, img.at(ch, y, x));
                }
            }
        }
        x0 += img.width() + gap;
    }
    Ok(out)
}

/// Stacks equally wide rows vertically with `gap` white rows.
pub fn vstack<T: Real>(rows: &[ImageTensor<T>], gap: usize) -> Result<ImageTensor<T>> {
    let Some(first) = rows.first() else {
        return Err(Error::Precondition("nothing to stack".into()));
    };
    let (c, w) = (first.channels(), first.width());
    if rows.iter().any(|r| r.channels() != c || r.width() != w) {
        return Err(Error::shape("vstack", "rows differ in channels or width"));
    }
    let h = rows.iter().map(|r| r.height()).sum::<usize>() + gap * (rows.len() - 1);
    let mut out = Tensor3::from_vec(c, h, w, vec![T::one(); c * h * w])?;
    let mut y0 = 0;
    for r in rows {
        for ch in 0..c {
            for y in 0..r.height() {
                for x in 0..w {
                    out.set(ch, y0 + y, x, r.at(ch, y, x));
                }
            }
        }
        y0 += r.height() + gap;
    }
    Ok(out)
}

/// Line plot of several curves on a white canvas: thin gray lines for
/// `curves`, a thick black line for `emphasis`. The y range is shared.
pub fn plot_curves(curves: &[Vec<f64>], emphasis: Option<&[f64]>, width: usize, height: usize) -> ImageTensor<f32> {
    let mut canvas = vec![1.0f32; width * height];
    let all = curves.iter().flatten().chain(emphasis.into_iter().flatten());
    let hi = all.copied().fold(0.0f64, f64::max);
    let scale = if hi > 0.0 { hi } else { 1.0 };
    let margin = 2usize;
    let to_px = |i: usize, n: usize, v: f64| {
        let x = margin as f64 + i as f64 * (width - 2 * margin - 1) as f64 / (n.max(2) - 1) as f64;
        let y = (height - margin - 1) as f64 - v / scale * (height - 2 * margin - 1) as f64;
        (x, y)
    };
    let mut draw = |ys: &[f64], shade: f32, thick: bool| {
        for i in 1..ys.len() {
            let (x0, y0) = to_px(i - 1, ys.len(), ys[i - 1]);
            let (x1, y1) = to_px(i, ys.len(), ys[i]);
            let steps = ((x1 - x0).abs().max((y1 - y0).abs()).ceil() as usize).max(1);
            for s in 0..=steps {
                let t = s as f64 / steps as f64;
                let (x, y) = (x0 + t * (x1 - x0), y0 + t * (y1 - y0));
                let r = if thick { 1 } else { 0 };
                for dy in -r..=r {
                    for dx in -r..=r {
                        let (px, py) = (x.round() as isize + dx, y.round() as isize + dy);
                        if px >= 0 && py >= 0 && (px as usize) < width && (py as usize) < height {
                            let cell = &mut canvas[py as usize * width + px as usize];
                            *cell = cell.min(shade);
                        }
                    }
                }
            }
        }
    };
    for c in curves {
        draw(c, 0.65, false);
    }
    if let Some(e) = emphasis {
        draw(e, 0.0, true);
    }
    Tensor3::from_vec(1, height, width, canvas).expect("canvas shape")
}

/// Writes a header row and one row per axis value: `axis,<col>,<col>,...`.
pub fn write_curve_csv(path: impl AsRef<Path>, axis: &[f64], columns: &[(String, Vec<f64>)]) -> Result<()> {
    let path = path.as_ref();
    let mut rows = Vec::with_capacity(axis.len() + 1);
    let mut header = String::from("axis");
    for (name, _) in columns {
        header.push(',');
        header.push_str(name);
    }
    rows.push(header);
    for (j, a) in axis.iter().enumerate() {
        let mut row = format!("{a}");
        for (_, vals) in columns {
            row.push_str(&format!(",{}", vals[j]));
        }
        rows.push(row);
    }
    write_lines(path, &rows)
}

pub fn write_lines(path: &Path, lines: &[String]) -> Result<()> {
    let f = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(f);
    for l in lines {
        writeln!(w, "{l}").map_err(|e| Error::io(path, e))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

// ---- reconstructions and sweeps ------------------------------------------

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct NamedGroup {
    pub name: String,
    pub modules: Vec<usize>,
}

/// Named, pairwise disjoint sets of modules (`HC0`, `HC1`, ...).
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModuleGroupSpec {
    pub groups: Vec<NamedGroup>,
}

impl ModuleGroupSpec {
    /// Consecutive runs of `per_group` modules; the last group may be shorter.
    pub fn contiguous(modules: usize, per_group: usize) -> Self {
        let per_group = per_group.max(1);
        let groups = (0..modules)
            .step_by(per_group)
            .enumerate()
            .map(|(g, start)| NamedGroup {
                name: format!("HC{g}"),
                modules: (start..(start + per_group).min(modules)).collect(),
            })
            .collect();
        Self { groups }
    }

    /// Names unique, groups non-empty, indices in range, no module in two groups.
    pub fn validate(&self, modules: usize) -> Result<()> {
        let mut owner: Vec<Option<&str>> = vec![None; modules];
        for (i, g) in self.groups.iter().enumerate() {
            if g.modules.is_empty() {
                return Err(Error::Config(format!("group {:?} is empty", g.name)));
            }
            if self.groups[..i].iter().any(|h| h.name == g.name) {
                return Err(Error::Config(format!("group name {:?} appears twice", g.name)));
            }
            for &m in &g.modules {
                let slot = owner.get_mut(m).ok_or_else(|| {
                    Error::Config(format!("group {:?} names module {m}, but there are only {modules}", g.name))
                })?;
                if let Some(prev) = slot {
                    if *prev != g.name {
                        return Err(Error::Config(format!("module {m} is in both {prev:?} and {:?}", g.name)));
                    }
                }
                *slot = Some(&g.name);
            }
        }
        Ok(())
    }

    pub fn get(&self, name: &str) -> Option<&NamedGroup> {
        self.groups.iter().find(|g| g.name == name)
    }
}

fn check_group(modules: usize, group: &[usize]) -> Result<()> {
    for &i in group {
        if i >= modules {
            return Err(Error::Index {
                what: "module",
                index: i,
                limit: modules,
            });
        }
    }
    Ok(())
}

/// Decode using only the channels of `group`; an empty group decodes to zero.
pub fn module_reconstruction<T: Real>(bank: &KernelBank<T>, image: &ImageTensor<T>, group: &[usize]) -> Result<ImageTensor<T>> {
    check_group(bank.modules(), group)?;
    let f = bank.encode(image)?;
    bank.decode_to(&restrict_to_modules(&f, group), image.height(), image.width())
}

/// Frames obtained by activating channel `m` of module `i` at the grid
/// center and transporting it through the codebook along `path`.
pub fn submanifold_sweep<T: Real>(
    bank: &KernelBank<T>,
    cb: &Codebook<T>,
    module: usize,
    m: usize,
    image_side: usize,
    path: &[TransformParams],
) -> Result<Vec<ImageTensor<T>>> {
    let grid = bank.feature_grid(image_side, image_side);
    let probe = probe_onehot(bank, module, m, (grid.0 / 2, grid.1 / 2), grid)?;
    path.iter()
        .map(|d| bank.decode_to(&predict_features(bank, cb, &probe, d)?, image_side, image_side))
        .collect()
}

/// Full-turn rotation path with `n` frames.
pub fn rotation_path(n: usize) -> Vec<TransformParams> {
    (0..n)
        .map(|j| TransformParams::new(0.0, 0.0, 2.0 * PI * j as f64 / n.max(1) as f64))
        .collect()
}

/// Pearson correlation of two equally sized images (0 when either is flat).
pub fn correlation<T: Real>(a: &ImageTensor<T>, b: &ImageTensor<T>) -> f64 {
    let (x, y) = (a.data(), b.data());
    let n = x.len().min(y.len()) as f64;
    let mx = x.iter().map(|v| v.as_f64()).sum::<f64>() / n;
    let my = y.iter().map(|v| v.as_f64()).sum::<f64>() / n;
    let (mut sxy, mut sxx, mut syy) = (0.0, 0.0, 0.0);
    for (p, q) in x.iter().zip(y) {
        let (dp, dq) = (p.as_f64() - mx, q.as_f64() - my);
        sxy += dp * dq;
        sxx += dp * dp;
        syy += dq * dq;
    }
    if sxx > 0.0 && syy > 0.0 {
        sxy / (sxx * syy).sqrt()
    } else {
        0.0
    }
}

/// Mean of `‖f′ − P_δ f‖ / max(‖f′‖, 1e-8)` over the given pairs.
pub fn equivariance_error_pairs<T: Real>(bank: &KernelBank<T>, cb: &Codebook<T>, pairs: &[TrainingPair<T>]) -> Result<f64> {
    if pairs.is_empty() {
        return Err(Error::Precondition("no pairs to evaluate".into()));
    }
    let errs = pairs
        .par_iter()
        .map(|p| {
            let f = bank.encode(&p.image)?;
            let f_moved = bank.encode(&p.moved)?;
            let pred = PredictionOp::new(cb, &p.delta, bank.stride(), f.height(), f.width()).apply(&f)?;
            let num = f_moved.tensor().sub(pred.tensor())?.norm_sq().as_f64().sqrt();
            let den = f_moved.tensor().norm_sq().as_f64().sqrt().max(1e-8);
            Ok(num / den)
        })
        .collect::<Result<Vec<f64>>>()?;
    Ok(errs.iter().sum::<f64>() / errs.len() as f64)
}

/// Draws `n` pairs from `dataset` with fresh transforms.
pub fn sample_pairs(dataset: &Dataset, aug: &AugConfig, n: usize, rng: &mut SeededRng) -> Result<Vec<TrainingPair>> {
    (0..n)
        .map(|_| {
            let (image, moved, delta) = sample_pair(dataset, aug, rng)?;
            Ok(TrainingPair { image, moved, delta })
        })
        .collect()
}

pub fn equivariance_error(
    bank: &KernelBank<f32>,
    cb: &Codebook<f32>,
    dataset: &Dataset,
    aug: &AugConfig,
    n_samples: usize,
    rng: &mut SeededRng,
) -> Result<f64> {
    equivariance_error_pairs(bank, cb, &sample_pairs(dataset, aug, n_samples, rng)?)
}

// ---- image quality -------------------------------------------------------

fn same_shape<T: Real>(op: &'static str, a: &ImageTensor<T>, b: &ImageTensor<T>) -> Result<()> {
    if !a.same_shape(b) {
        return Err(Error::shape(op, format!("{:?} vs {:?}", a.shape(), b.shape())));
    }
    Ok(())
}

/// `10·log10(max²/MSE)`, capped at 100 dB when `MSE < 1e-10`.
pub fn psnr<T: Real>(a: &ImageTensor<T>, b: &ImageTensor<T>, max_val: f64) -> Result<f64> {
    same_shape("psnr", a, b)?;
    let n = a.data().len().max(1) as f64;
    let mse = a
        .data()
        .iter()
        .zip(b.data())
        .map(|(x, y)| {
            let d = x.as_f64() - y.as_f64();
            d * d
        })
        .sum::<f64>()
        / n;
    if mse < 1e-10 {
        return Ok(PSNR_CAP);
    }
    Ok((10.0 * (max_val * max_val / mse).log10()).min(PSNR_CAP))
}

/// Luma `0.299 R + 0.587 G + 0.114 B`; single-channel images pass through.
pub fn to_gray<T: Real>(image: &ImageTensor<T>) -> Result<ImageTensor<T>> {
    match image.channels() {
        1 => Ok(image.clone()),
        3 => {
            let (r, g, b) = (image.channel(0), image.channel(1), image.channel(2));
            let data = (0..r.len())
                .map(|p| T::cast(0.299 * r[p].as_f64() + 0.587 * g[p].as_f64() + 0.114 * b[p].as_f64()))
                .collect();
            Tensor3::from_vec(1, image.height(), image.width(), data)
        }
        c => Err(Error::shape("to_gray", format!("{c} channels"))),
    }
}

pub const SSIM_WINDOW: usize = 11;
pub const SSIM_SIGMA: f64 = 1.5;

fn gaussian_window() -> Vec<f64> {
    let c = (SSIM_WINDOW / 2) as f64;
    let g: Vec<f64> = (0..SSIM_WINDOW)
        .map(|i| (-((i as f64 - c).powi(2)) / (2.0 * SSIM_SIGMA * SSIM_SIGMA)).exp())
        .collect();
    let s: f64 = g.iter().sum();
    g.into_iter().map(|v| v / s).collect()
}

/// Mean SSIM over all fully contained 11×11 Gaussian windows (σ = 1.5,
/// K1 = 0.01, K2 = 0.03, data range 1), averaged over channels.
pub fn ssim<T: Real>(a: &ImageTensor<T>, b: &ImageTensor<T>) -> Result<f64> {
    same_shape("ssim", a, b)?;
    let (c, h, w) = a.shape();
    if h < SSIM_WINDOW || w < SSIM_WINDOW {
        return Err(Error::Precondition(format!("ssim needs images of at least {SSIM_WINDOW}×{SSIM_WINDOW}, got {h}×{w}")));
    }
    let g = gaussian_window();
    let (c1, c2) = ((0.01f64).powi(2), (0.03f64).powi(2));
    let (oh, ow) = (h - SSIM_WINDOW + 1, w - SSIM_WINDOW + 1);
    let mut total = 0.0;
    for ch in 0..c {
        let (x, y) = (a.channel(ch), b.channel(ch));
        // Separable filtering: rows first, then columns.
        let filt = |f: &dyn Fn(usize) -> f64| -> Vec<f64> {
            let mut rows = vec![0.0; h * ow];
            for r in 0..h {
                for cx in 0..ow {
                    rows[r * ow + cx] = (0..SSIM_WINDOW).map(|k| g[k] * f(r * w + cx + k)).sum();
                }
            }
            let mut out = vec![0.0; oh * ow];
            for r in 0..oh {
                for cx in 0..ow {
                    out[r * ow + cx] = (0..SSIM_WINDOW).map(|k| g[k] * rows[(r + k) * ow + cx]).sum();
                }
            }
            out
        };
        let mx = filt(&|i| x[i].as_f64());
        let my = filt(&|i| y[i].as_f64());
        let mxx = filt(&|i| x[i].as_f64() * x[i].as_f64());
        let myy = filt(&|i| y[i].as_f64() * y[i].as_f64());
        let mxy = filt(&|i| x[i].as_f64() * y[i].as_f64());
        let mut acc = 0.0;
        for i in 0..oh * ow {
            let (ux, uy) = (mx[i], my[i]);
            let (vx, vy, cxy) = (mxx[i] - ux * ux, myy[i] - uy * uy, mxy[i] - ux * uy);
            acc += ((2.0 * ux * uy + c1) * (2.0 * cxy + c2)) / ((ux * ux + uy * uy + c1) * (vx + vy + c2));
        }
        total += acc / (oh * ow) as f64;
    }
    Ok(total / c as f64)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::codebook::GridShape;
    use crate::model::{ConstraintVariant, ModelConfig};
    use crate::tensor::Kernels;
    use rand::{Rng, SeedableRng};

    fn gabor(side: usize, theta: f64, freq: f64) -> Vec<f64> {
        let c = (side as f64 - 1.0) / 2.0;
        let mut k = Vec::new();
        for y in 0..side {
            for x in 0..side {
                let (xc, yc) = (x as f64 - c, y as f64 - c);
                let env = (-(xc * xc + yc * yc) / (2.0 * 2.5 * 2.5)).exp();
                k.push(env * (2.0 * PI * freq * (xc * theta.cos() + yc * theta.sin())).cos());
            }
        }
        k
    }

    #[test]
    fn upscale_repeats_pixels() {
        let img = Tensor3::from_vec(1, 1, 2, vec![0.25f32, 0.75]).unwrap();
        let big = upscale(&img, 2);
        assert_eq!(big.shape(), (1, 2, 4));
        assert_eq!(big.data(), &[0.25, 0.25, 0.75, 0.75, 0.25, 0.25, 0.75, 0.75]);
    }

    #[test]
    fn group_spec_rules() {
        let spec = ModuleGroupSpec::contiguous(5, 2);
        let mods: Vec<_> = spec.groups.iter().map(|g| g.modules.clone()).collect();
        assert_eq!(mods, vec![vec![0, 1], vec![2, 3], vec![4]]);
        assert_eq!(spec.get("HC2").unwrap().modules, vec![4]);
        assert!(spec.validate(5).is_ok());
        assert!(spec.validate(4).is_err());
        let mut overlap = spec.clone();
        overlap.groups[1].modules.push(0);
        assert!(overlap.validate(5).unwrap_err().to_string().contains("module 0"));
        let mut dup = spec.clone();
        dup.groups[1].name = "HC0".into();
        assert!(dup.validate(5).is_err());
        let mut empty = spec;
        empty.groups[0].modules.clear();
        assert!(empty.validate(5).is_err());
    }

    #[test]
    fn isotropic_kernel_has_flat_orientation_curve() {
        let side = 9;
        let c = 4.0;
        let k: Vec<f64> = (0..81)
            .map(|i| {
                let (y, x) = ((i / side) as f64 - c, (i % side) as f64 - c);
                (-(x * x + y * y) / (2.0 * 1.5 * 1.5)).exp()
            })
            .collect();
        let curve = orientation_tuning(&k, 1, side, 36, 0.15, 8).unwrap();
        let (lo, hi) = curve
            .responses
            .iter()
            .fold((f64::INFINITY, 0.0f64), |(lo, hi), &r| (lo.min(r), hi.max(r)));
        assert!((hi - lo) / hi < 0.05, "spread {}", (hi - lo) / hi);
    }

    #[test]
    fn gabor_peaks_at_its_orientation() {
        for j in [0usize, 5, 13, 27] {
            let theta = j as f64 * PI / 36.0;
            let k = gabor(9, theta, 0.2);
            let curve = orientation_tuning(&k, 1, 9, 36, 0.2, 8).unwrap();
            let peak = curve.peak_index() as isize;
            let d = (peak - j as isize).rem_euclid(36);
            assert!(d <= 1 || d >= 35, "peak {peak} vs {j}");
        }
    }

    #[test]
    fn zero_kernel_gives_zero_curves() {
        let k = vec![0.0f32; 81];
        assert!(orientation_tuning(&k, 1, 9, 36, 0.2, 8).unwrap().responses.iter().all(|&r| r == 0.0));
        let (curves, mean) = frequency_tuning(&[&k[..], &k[..]], 1, 9, 8, 12, 8).unwrap();
        assert!(curves.iter().chain([&mean]).all(|c| c.responses.iter().all(|&r| r == 0.0)));
        assert!(orientation_tuning(&k, 1, 9, 36, 0.7, 8).is_err());
    }

    #[test]
    fn sinusoid_kernel_peaks_at_its_frequency() {
        let axis = frequency_axis(16);
        for bin in [3usize, 6, 9] {
            let f = axis[bin];
            let k: Vec<f64> = contrast_plane(9, 0.3, f, 0.4);
            let (curves, _) = frequency_tuning(&[&k[..]], 1, 9, 16, 36, 8).unwrap();
            let r = &curves[0].responses;
            let peak = curves[0].peak_index();
            assert!((peak as isize - bin as isize).abs() <= 1, "peak {peak} vs {bin}");
            // One dominant lobe: the finite patch leaks into sidelobes, but
            // every other local maximum stays well below the peak.
            for i in 0..r.len() {
                let left = i == 0 || r[i] >= r[i - 1];
                let right = i + 1 == r.len() || r[i] >= r[i + 1];
                if left && right && i != peak {
                    assert!(r[i] < 0.3 * r[peak], "side lobe {i}: {} vs {}", r[i], r[peak]);
                }
            }
        }
    }

    #[test]
    fn identical_kernels_module_curve_equals_kernel_curve() {
        let k = gabor(9, 0.4, 0.25);
        let (curves, mean) = frequency_tuning(&[&k[..], &k[..], &k[..]], 1, 9, 8, 12, 8).unwrap();
        for (a, b) in mean.responses.iter().zip(&curves[0].responses) {
            assert!((a - b).abs() <= 1e-12 * b.abs().max(1.0));
        }
    }

    #[test]
    fn circular_variance_cases() {
        let axis = orientation_axis(36);
        let mut delta = vec![0.0; 36];
        delta[7] = 3.0;
        assert!(circular_variance(&TuningCurve { axis: axis.clone(), responses: delta }).abs() < 1e-12);
        let flat = TuningCurve {
            axis: axis.clone(),
            responses: vec![1.0; 36],
        };
        assert!((circular_variance(&flat) - 1.0).abs() < 1e-12);
        let mut two = vec![0.0; 36];
        two[4] = 1.0;
        two[22] = 1.0;
        assert!((circular_variance(&TuningCurve { axis: axis.clone(), responses: two }) - 1.0).abs() < 1e-12);
        let zero = TuningCurve {
            axis,
            responses: vec![0.0; 36],
        };
        assert_eq!(circular_variance(&zero), 1.0);
    }

    #[test]
    fn variance_ratio() {
        let r = preferred_frequency_ratio(&[vec![0.1, 0.1], vec![0.3, 0.3]]);
        assert_eq!(r.within, 0.0);
        assert!(r.ratio.is_infinite());
        let r = preferred_frequency_ratio(&[vec![0.1, 0.3], vec![0.1, 0.3]]);
        assert_eq!(r.between, 0.0);
        assert_eq!(r.ratio, 0.0);
        let r = preferred_frequency_ratio(&[vec![0.1, 0.2], vec![0.3, 0.4]]);
        assert!((r.between - 0.01).abs() < 1e-12 && (r.within - 0.0025).abs() < 1e-12);
        assert!((r.ratio - 4.0).abs() < 1e-9);
    }

    fn bank(k: usize, l: usize, side: usize, seed: u64) -> KernelBank<f32> {
        let cfg = ModelConfig {
            modules: k,
            module_len: l,
            kernel_side: side,
            stride: 2,
            in_channels: 1,
            constraint_variant: ConstraintVariant::PerModuleTransrot,
        };
        KernelBank::random(&cfg, &mut SeededRng::seed_from_u64(seed)).unwrap()
    }

    #[test]
    fn kernel_grid_layout_and_constant_tile() {
        let b = bank(2, 3, 9, 0);
        let img = kernel_grid_image(&b);
        assert_eq!(img.shape(), (1, 2 * 9 + 3, 3 * 9 + 4));
        let constant = KernelBank::from_kernels(1, 1, 2, Kernels::from_vec(1, 1, 3, vec![0.7f32; 9]).unwrap()).unwrap();
        let img = kernel_grid_image(&constant);
        assert_eq!(img.at(0, 2, 2), 0.5);
        assert_eq!(img.at(0, 0, 0), 1.0);
    }

    #[test]
    fn png_roundtrip_after_quantization() {
        let dir = tempfile::tempdir().unwrap();
        let img = kernel_grid_image(&bank(3, 4, 7, 1));
        let path = dir.path().join("grid.png");
        write_png(&path, &img).unwrap();
        let back = read_png(&path).unwrap();
        assert_eq!(back.shape(), img.shape());
        for (a, b) in img.data().iter().zip(back.data()) {
            assert_eq!(to_u8(*a as f64), to_u8(*b as f64));
        }
        let rgb = Tensor3::from_vec(3, 2, 2, (0..12).map(|i| i as f32 / 11.0).collect()).unwrap();
        write_png(dir.path().join("rgb.png"), &rgb).unwrap();
        let back = read_png(dir.path().join("rgb.png")).unwrap();
        for (a, b) in rgb.data().iter().zip(back.data()) {
            assert!((a - b).abs() <= 0.5 / 255.0 + 1e-6);
        }
    }

    fn image(rng: &mut SeededRng, c: usize, side: usize) -> ImageTensor<f32> {
        Tensor3::from_vec(c, side, side, (0..c * side * side).map(|_| rng.random_range(0.0..1.0)).collect()).unwrap()
    }

    #[test]
    fn module_reconstruction_cases() {
        let b = bank(3, 2, 5, 2);
        let mut rng = SeededRng::seed_from_u64(3);
        let img = image(&mut rng, 1, 16);
        assert_eq!(module_reconstruction(&b, &img, &[0, 1, 2]).unwrap(), b.reconstruct(&img).unwrap());
        assert!(module_reconstruction(&b, &img, &[]).unwrap().data().iter().all(|&v| v == 0.0));
        assert!(module_reconstruction(&b, &img, &[3]).is_err());
    }

    #[test]
    fn sweep_identity_and_translation() {
        let b = bank(2, 2, 5, 4);
        let grid = GridShape {
            modules: 2,
            module_len: 2,
            grid_t: 5,
            grid_r: 8,
            stride: 2,
        };
        let cb = Codebook::<f32>::identity(grid).unwrap();
        let frames = submanifold_sweep(&b, &cb, 1, 0, 16, &[TransformParams::identity()]).unwrap();
        let g = b.feature_grid(16, 16);
        let probe = probe_onehot(&b, 1, 0, (g.0 / 2, g.1 / 2), g).unwrap();
        assert_eq!(frames[0], b.decode_to(&probe, 16, 16).unwrap());

        let shifted = submanifold_sweep(&b, &cb, 1, 0, 16, &[TransformParams::new(2.0, -2.0, 0.0)]).unwrap();
        for y in 0..16 {
            for x in 0..16 {
                let (sy, sx) = (y as isize - 2, x as isize + 2);
                let expect = if (0..16).contains(&sy) && (0..16).contains(&sx) {
                    shifted[0].at(0, sy as usize, sx as usize)
                } else {
                    continue;
                };
                assert!((frames[0].at(0, y, x) - expect).abs() < 1e-6);
            }
        }
        assert!(submanifold_sweep(&b, &cb, 2, 0, 16, &[]).is_err());
    }

    #[test]
    fn equivariance_error_identity_zero_and_random_positive() {
        let mut rng = SeededRng::seed_from_u64(5);
        let b = bank(2, 3, 5, 5);
        let grid = GridShape {
            modules: 2,
            module_len: 3,
            grid_t: 5,
            grid_r: 8,
            stride: 2,
        };
        let images: Vec<_> = (0..6).map(|_| image(&mut rng, 1, 16)).collect();
        let pairs: Vec<_> = images
            .iter()
            .map(|i| TrainingPair {
                image: i.clone(),
                moved: i.clone(),
                delta: TransformParams::identity(),
            })
            .collect();
        let id = Codebook::<f32>::identity(grid).unwrap();
        assert_eq!(equivariance_error_pairs(&b, &id, &pairs).unwrap(), 0.0);

        let data = Dataset::new(images, vec![0; 6]).unwrap();
        let random = Codebook::<f32>::new(grid, crate::codebook::InitMode::Random, &mut rng).unwrap();
        let e = equivariance_error(&b, &random, &data, &AugConfig::default(), 16, &mut rng).unwrap();
        assert!(e > 0.1 && e < 10.0, "{e}");
    }

    #[test]
    fn psnr_cases() {
        let mut rng = SeededRng::seed_from_u64(6);
        let a = image(&mut rng, 1, 12);
        assert_eq!(psnr(&a, &a, 1.0).unwrap(), 100.0);
        let zeros = Tensor3::<f32>::zeros(1, 12, 12);
        let ones = Tensor3::from_vec(1, 12, 12, vec![1.0f32; 144]).unwrap();
        assert_eq!(psnr(&zeros, &ones, 1.0).unwrap(), 0.0);
        let b = image(&mut rng, 1, 12);
        assert_eq!(psnr(&a, &b, 1.0).unwrap(), psnr(&b, &a, 1.0).unwrap());
        assert!(psnr(&a, &Tensor3::zeros(1, 11, 12), 1.0).is_err());
    }

    #[test]
    fn ssim_identity_and_gray() {
        let mut rng = SeededRng::seed_from_u64(7);
        let a = image(&mut rng, 3, 20);
        assert!((ssim(&a, &a).unwrap() - 1.0).abs() < 1e-12);
        let b = image(&mut rng, 3, 20);
        let s = ssim(&a, &b).unwrap();
        assert!(s < 0.5 && s > -1.0);
        let g = to_gray(&a).unwrap();
        assert_eq!(g.channels(), 1);
        let p = 5 * 20 + 7;
        let expect = 0.299 * a.channel(0)[p] + 0.587 * a.channel(1)[p] + 0.114 * a.channel(2)[p];
        assert!((g.data()[p] - expect).abs() < 1e-6);
        assert!(ssim(&Tensor3::<f32>::zeros(1, 8, 8), &Tensor3::zeros(1, 8, 8)).is_err());
    }

    #[test]
    fn stacking_and_plot_shapes() {
        let a = Tensor3::<f32>::zeros(1, 4, 3);
        let b = Tensor3::<f32>::zeros(1, 6, 2);
        let row = hstack(&[a, b], 1).unwrap();
        assert_eq!(row.shape(), (1, 6, 6));
        assert_eq!(row.at(0, 5, 0), 1.0);
        let col = vstack(&[row.clone(), row], 2).unwrap();
        assert_eq!(col.shape(), (1, 14, 6));
        let plot = plot_curves(&[vec![0.0, 1.0, 0.5]], Some(&[0.2, 0.2, 0.2]), 40, 30);
        assert_eq!(plot.shape(), (1, 30, 40));
        assert!(plot.data().iter().any(|&v| v == 0.0));
    }
}
