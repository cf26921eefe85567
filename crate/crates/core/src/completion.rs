//! Pattern completion: predict the channels of every module outside a source
//! group from the group's own features, then decode the completed latent.
//!
//! The completion map is a local linear operator: each missing channel at a
//! site is a bias plus a weighted sum of all source channels in a
//! `(2w+1) × (2w+1)` neighbourhood (zero padded), i.e. a same-size
//! convolution from source channels to missing channels.

use std::fs;
use std::path::Path;

use ndarray::{ArrayView2, ArrayViewMut2};
use rand::{Rng, SeedableRng};
use serde::{Deserialize, Serialize};

use crate::analysis::{psnr, ssim, to_gray};
use crate::dataset::SeededRng;
use crate::error::{Error, Result};
use crate::model::{restrict_to_modules, KernelBank};
use crate::tensor::{gemm, FeatureMap, ImageTensor, Tensor3};
use crate::trainer::{cosine_lr, AdamConfig};

pub const COMPLETION_MAGIC: &[u8; 8] = b"SCGCMP01";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct CompletionConfig {
    pub radius: usize,
    pub steps: usize,
    pub batch_size: usize,
    pub lr0: f64,
    pub weight_decay: f64,
    /// Training images encoded once up front.
    pub train_images: usize,
    /// Held-out images used for the metrics.
    pub eval_images: usize,
    pub seed: u64,
}

impl Default for CompletionConfig {
    fn default() -> Self {
        Self {
            radius: 1,
            steps: 1500,
            batch_size: 32,
            lr0: 0.01,
            weight_decay: 0.0,
            train_images: 2000,
            eval_images: 256,
            seed: 3,
        }
    }
}

/// A feature map whose meaningful channels are those of `group`.
#[derive(Clone, Debug, PartialEq)]
pub struct PartialFeatures<T = f32> {
    pub group: Vec<usize>,
    pub features: FeatureMap<T>,
}

impl PartialFeatures<f32> {
    /// Keeps only the channels of `group`; the rest are zeroed.
    pub fn from_full(features: &FeatureMap<f32>, group: &[usize]) -> Self {
        Self {
            group: normalized_group(group),
            features: restrict_to_modules(features, group),
        }
    }
}

fn normalized_group(group: &[usize]) -> Vec<usize> {
    let mut g = group.to_vec();
    g.sort_unstable();
    g.dedup();
    g
}

#[derive(Clone, Debug, PartialEq)]
pub struct CompletionMap {
    name: String,
    group: Vec<usize>,
    modules: usize,
    module_len: usize,
    radius: usize,
    /// `[target][source][dy][dx]`.
    weights: Vec<f32>,
    bias: Vec<f32>,
}

impl CompletionMap {
    /// Zero weights and zero bias: predicts all-zero missing channels, which
    /// reproduces the zero-padded decode.
    pub fn zeros(name: &str, group: &[usize], modules: usize, module_len: usize, radius: usize) -> Result<Self> {
        let group = normalized_group(group);
        if group.is_empty() {
            return Err(Error::Precondition(format!("group {name:?} is empty")));
        }
        if let Some(&bad) = group.iter().find(|&&i| i >= modules) {
            return Err(Error::Index {
                what: "module",
                index: bad,
                limit: modules,
            });
        }
        if group.len() == modules {
            return Err(Error::Precondition(format!("group {name:?} covers every module; nothing to complete")));
        }
        let mut map = Self {
            name: name.to_string(),
            group,
            modules,
            module_len,
            radius,
            weights: Vec::new(),
            bias: Vec::new(),
        };
        map.weights = vec![0.0; map.targets().len() * map.taps()];
        map.bias = vec![0.0; map.targets().len()];
        Ok(map)
    }

    /// A map with explicit parameters, laid out as [`Self::weights`] and
    /// [`Self::bias`] describe.
    pub fn from_parts(
        name: &str,
        group: &[usize],
        modules: usize,
        module_len: usize,
        radius: usize,
        weights: Vec<f32>,
        bias: Vec<f32>,
    ) -> Result<Self> {
        let mut map = Self::zeros(name, group, modules, module_len, radius)?;
        if weights.len() != map.weights.len() || bias.len() != map.bias.len() {
            return Err(Error::shape(
                "completion",
                format!(
                    "got {} weights and {} biases, expected {} and {}",
                    weights.len(),
                    bias.len(),
                    map.weights.len(),
                    map.bias.len()
                ),
            ));
        }
        map.weights = weights;
        map.bias = bias;
        Ok(map)
    }

    pub fn name(&self) -> &str {
        &self.name
    }

    pub fn group(&self) -> &[usize] {
        &self.group
    }

    pub fn radius(&self) -> usize {
        self.radius
    }

    /// `[target][source][dy][dx]`, targets and sources in channel order.
    pub fn weights(&self) -> &[f32] {
        &self.weights
    }

    pub fn bias(&self) -> &[f32] {
        &self.bias
    }

    /// Channel indices of the source group.
    pub fn sources(&self) -> Vec<usize> {
        let l = self.module_len;
        self.group.iter().flat_map(|&i| i * l..(i + 1) * l).collect()
    }

    /// Channel indices the map predicts.
    pub fn targets(&self) -> Vec<usize> {
        let l = self.module_len;
        (0..self.modules)
            .filter(|i| !self.group.contains(i))
            .flat_map(|i| i * l..(i + 1) * l)
            .collect()
    }

    fn window(&self) -> usize {
        2 * self.radius + 1
    }

    /// Inputs per target channel.
    fn taps(&self) -> usize {
        self.group.len() * self.module_len * self.window() * self.window()
    }

    fn check_features(&self, f: &FeatureMap<f32>) -> Result<()> {
        if f.modules() != self.modules || f.module_len() != self.module_len {
            return Err(Error::shape(
                "completion",
                format!(
                    "features are {}×{}, map expects {}×{}",
                    f.modules(),
                    f.module_len(),
                    self.modules,
                    self.module_len
                ),
            ));
        }
        Ok(())
    }

    /// Zero-padded neighbourhoods of the source channels: `[taps × (h·w)]`.
    fn patches(&self, f: &FeatureMap<f32>) -> Vec<f64> {
        let (h, w) = (f.height(), f.width());
        let win = self.window();
        let r = self.radius as isize;
        let sources = self.sources();
        let t = f.tensor();
        let mut out = vec![0.0; self.taps() * h * w];
        for (s, &ch) in sources.iter().enumerate() {
            let plane = t.channel(ch);
            for dy in 0..win {
                for dx in 0..win {
                    let row = (s * win + dy) * win + dx;
                    let dst = &mut out[row * h * w..(row + 1) * h * w];
                    for y in 0..h {
                        let sy = y as isize + dy as isize - r;
                        if sy < 0 || sy >= h as isize {
                            continue;
                        }
                        for x in 0..w {
                            let sx = x as isize + dx as isize - r;
                            if sx >= 0 && sx < w as isize {
                                dst[y * w + x] = plane[sy as usize * w + sx as usize] as f64;
                            }
                        }
                    }
                }
            }
        }
        out
    }

    fn predict_raw(&self, weights: &[f64], bias: &[f64], patches: &[f64], sites: usize) -> Vec<f64> {
        let nt = bias.len();
        let mut out = vec![0.0; nt * sites];
        let a = ArrayView2::from_shape((nt, self.taps()), weights).expect("weight shape");
        let b = ArrayView2::from_shape((self.taps(), sites), patches).expect("patch shape");
        let mut c = ArrayViewMut2::from_shape((nt, sites), &mut out).expect("output shape");
        gemm(a, b, &mut c);
        for (row, &bv) in out.chunks_exact_mut(sites).zip(bias) {
            row.iter_mut().for_each(|v| *v += bv);
        }
        out
    }

    /// Source channels copied bit-exactly; every other channel predicted.
    pub fn complete(&self, partial: &PartialFeatures<f32>) -> Result<FeatureMap<f32>> {
        if normalized_group(&partial.group) != self.group {
            return Err(Error::Precondition(format!(
                "features carry group {:?} but map {:?} was trained for {:?}",
                partial.group, self.name, self.group
            )));
        }
        let f = &partial.features;
        self.check_features(f)?;
        let sites = f.height() * f.width();
        let w64: Vec<f64> = self.weights.iter().map(|&v| v as f64).collect();
        let b64: Vec<f64> = self.bias.iter().map(|&v| v as f64).collect();
        let pred = self.predict_raw(&w64, &b64, &self.patches(f), sites);
        let mut data = vec![0.0f32; f.tensor().data().len()];
        let t = f.tensor();
        for ch in self.sources() {
            data[ch * sites..(ch + 1) * sites].copy_from_slice(t.channel(ch));
        }
        for (j, ch) in self.targets().into_iter().enumerate() {
            for (d, &p) in data[ch * sites..(ch + 1) * sites].iter_mut().zip(&pred[j * sites..(j + 1) * sites]) {
                *d = p as f32;
            }
        }
        FeatureMap::new(self.modules, self.module_len, Tensor3::from_vec(t.channels(), f.height(), f.width(), data)?)
    }

    /// Mean over `features` of `‖f_missing − C(f_group)‖²`.
    pub fn loss(&self, features: &[FeatureMap<f32>]) -> Result<f64> {
        let w64: Vec<f64> = self.weights.iter().map(|&v| v as f64).collect();
        let b64: Vec<f64> = self.bias.iter().map(|&v| v as f64).collect();
        let mut total = 0.0;
        for f in features {
            self.check_features(f)?;
            total += self.sample_loss(&w64, &b64, f, None, None);
        }
        Ok(total / features.len().max(1) as f64)
    }

    /// Loss of one sample; accumulates gradients when buffers are given.
    fn sample_loss(&self, w: &[f64], b: &[f64], f: &FeatureMap<f32>, dw: Option<&mut [f64]>, db: Option<&mut [f64]>) -> f64 {
        let sites = f.height() * f.width();
        let patches = self.patches(f);
        let mut resid = self.predict_raw(w, b, &patches, sites);
        let t = f.tensor();
        for (j, ch) in self.targets().into_iter().enumerate() {
            for (r, &v) in resid[j * sites..(j + 1) * sites].iter_mut().zip(t.channel(ch)) {
                *r -= v as f64;
            }
        }
        let loss = resid.iter().map(|r| r * r).sum();
        if let (Some(dw), Some(db)) = (dw, db) {
            let nt = b.len();
            let a = ArrayView2::from_shape((nt, sites), &resid).expect("residual shape");
            let p = ArrayView2::from_shape((self.taps(), sites), &patches).expect("patch shape");
            let mut g = vec![0.0; dw.len()];
            let mut gv = ArrayViewMut2::from_shape((nt, self.taps()), &mut g).expect("grad shape");
            gemm(a, p.t(), &mut gv);
            for (d, v) in dw.iter_mut().zip(&g) {
                *d += 2.0 * v;
            }
            for (j, row) in resid.chunks_exact(sites).enumerate() {
                db[j] += 2.0 * row.iter().sum::<f64>();
            }
        }
        loss
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(COMPLETION_MAGIC);
        out.extend_from_slice(&(self.name.len() as u32).to_le_bytes());
        out.extend_from_slice(self.name.as_bytes());
        for v in [self.modules, self.module_len, self.radius, self.group.len()] {
            out.extend_from_slice(&(v as u64).to_le_bytes());
        }
        for &g in &self.group {
            out.extend_from_slice(&(g as u64).to_le_bytes());
        }
        for block in [&self.weights, &self.bias] {
            out.extend_from_slice(&(block.len() as u64).to_le_bytes());
            for v in block.iter() {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        out
    }

    pub fn from_bytes(bytes: &[u8], path: &Path) -> Result<Self> {
        let mut cur = Cursor { bytes, pos: 0, path };
        let magic = cur.take(8)?;
        if magic != COMPLETION_MAGIC {
            return Err(Error::format(
                path,
                format!(
                    "bad magic: expected {:?}, found {:?}",
                    String::from_utf8_lossy(COMPLETION_MAGIC),
                    String::from_utf8_lossy(magic)
                ),
            ));
        }
        let name_len = u32::from_le_bytes(cur.take(4)?.try_into().expect("4 bytes")) as usize;
        let name = String::from_utf8(cur.take(name_len)?.to_vec()).map_err(|_| Error::format(path, "name is not UTF-8"))?;
        let (modules, module_len, radius, n_group) = (cur.u64()?, cur.u64()?, cur.u64()?, cur.u64()?);
        if n_group > modules {
            return Err(Error::format(path, "group larger than module count"));
        }
        let group = (0..n_group).map(|_| cur.u64()).collect::<Result<Vec<_>>>()?;
        let mut map = Self::zeros(&name, &group, modules, module_len, radius).map_err(|e| Error::format(path, e.to_string()))?;
        for block in [&mut map.weights, &mut map.bias] {
            let n = cur.u64()?;
            if n != block.len() {
                return Err(Error::format(path, format!("block of {n} values, expected {}", block.len())));
            }
            for (v, c) in block.iter_mut().zip(cur.take(4 * n)?.chunks_exact(4)) {
                *v = f32::from_le_bytes(c.try_into().expect("4 bytes"));
            }
        }
        if cur.pos != bytes.len() {
            return Err(Error::format(path, format!("{} trailing bytes", bytes.len() - cur.pos)));
        }
        Ok(map)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        fs::write(path, self.to_bytes()).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes, path)
    }
}

struct Cursor<'a> {
    bytes: &'a [u8],
    pos: usize,
    path: &'a Path,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.bytes.len() - self.pos < n {
            return Err(Error::format(self.path, format!("truncated at offset {}", self.pos)));
        }
        self.pos += n;
        Ok(&self.bytes[self.pos - n..self.pos])
    }

    fn u64(&mut self) -> Result<usize> {
        let raw = u64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes"));
        usize::try_from(raw).map_err(|_| Error::format(self.path, "length overflows usize"))
    }
}

/// Fits a completion map on pre-encoded features with AdamW and a cosine
/// schedule; `cfg.steps = 0` returns the zero map.
pub fn train_completion_features(
    name: &str,
    group: &[usize],
    features: &[FeatureMap<f32>],
    cfg: &CompletionConfig,
) -> Result<CompletionMap> {
    let first = features
        .first()
        .ok_or_else(|| Error::Precondition("no features to fit the completion map on".into()))?;
    let mut map = CompletionMap::zeros(name, group, first.modules(), first.module_len(), cfg.radius)?;
    for f in features {
        map.check_features(f)?;
    }
    if cfg.steps == 0 {
        return Ok(map);
    }
    let hyper = AdamConfig {
        weight_decay: cfg.weight_decay,
        codebook_weight_decay: 0.0,
        ..AdamConfig::default()
    };
    // Parameters are optimized in f64 and rounded once at the end.
    let mut w = vec![0.0f64; map.weights.len()];
    let mut b = vec![0.0f64; map.bias.len()];
    let (mut mw, mut vw) = (vec![0.0f64; w.len()], vec![0.0f64; w.len()]);
    let (mut mb, mut vb) = (vec![0.0f64; b.len()], vec![0.0f64; b.len()]);
    let mut rng = SeededRng::seed_from_u64(cfg.seed);
    let batch = cfg.batch_size.max(1);
    for step in 0..cfg.steps {
        let lr = cosine_lr(step, cfg.steps, cfg.lr0, 0.0);
        let mut dw = vec![0.0; w.len()];
        let mut db = vec![0.0; b.len()];
        let mut loss = 0.0;
        for _ in 0..batch {
            let f = &features[rng.random_range(0..features.len())];
            loss += map.sample_loss(&w, &b, f, Some(&mut dw), Some(&mut db));
        }
        if !loss.is_finite() {
            return Err(Error::NonFinite(format!("completion loss at step {}", step + 1)));
        }
        let inv = 1.0 / batch as f64;
        dw.iter_mut().chain(db.iter_mut()).for_each(|g| *g *= inv);
        let t = step as u64 + 1;
        adam64(&mut w, &dw, &mut mw, &mut vw, t, lr, &hyper, cfg.weight_decay);
        adam64(&mut b, &db, &mut mb, &mut vb, t, lr, &hyper, 0.0);
    }
    map.weights = w.iter().map(|&v| v as f32).collect();
    map.bias = b.iter().map(|&v| v as f32).collect();
    Ok(map)
}

/// The same update as [`crate::trainer::adamw_step`], on f64 buffers.
#[allow(clippy::too_many_arguments)]
fn adam64(p: &mut [f64], g: &[f64], m: &mut [f64], v: &mut [f64], step: u64, lr: f64, h: &AdamConfig, wd: f64) {
    let c1 = 1.0 - h.beta1.powi(step as i32);
    let c2 = 1.0 - h.beta2.powi(step as i32);
    for i in 0..p.len() {
        m[i] = h.beta1 * m[i] + (1.0 - h.beta1) * g[i];
        v[i] = h.beta2 * v[i] + (1.0 - h.beta2) * g[i] * g[i];
        p[i] -= lr * ((m[i] / c1) / ((v[i] / c2).sqrt() + h.eps) + wd * p[i]);
    }
}

/// Encodes `images` with a frozen bank and fits a completion map for `group`.
pub fn train_completion(
    bank: &KernelBank<f32>,
    images: &[ImageTensor<f32>],
    name: &str,
    group: &[usize],
    cfg: &CompletionConfig,
) -> Result<CompletionMap> {
    let features = images.iter().map(|i| bank.encode(i)).collect::<Result<Vec<_>>>()?;
    train_completion_features(name, group, &features, cfg)
}

#[derive(Clone, Debug, PartialEq)]
pub struct CompletionMetrics {
    pub group: String,
    pub psnr_gray: f64,
    pub psnr_color: f64,
    pub ssim: f64,
    pub images: usize,
}

impl CompletionMetrics {
    pub const CSV_HEADER: &'static str = "group,psnr_gray,psnr_color,ssim";

    pub fn csv_row(&self) -> String {
        format!("{},{:.4},{:.4},{:.6}", self.group, self.psnr_gray, self.psnr_color, self.ssim)
    }
}

/// Completed and zero-padded decodes of one image.
pub fn completion_views(
    map: &CompletionMap,
    bank: &KernelBank<f32>,
    image: &ImageTensor<f32>,
) -> Result<(ImageTensor<f32>, ImageTensor<f32>)> {
    let partial = PartialFeatures::from_full(&bank.encode(image)?, map.group());
    let (h, w) = (image.height(), image.width());
    let completed = bank.decode_to(&map.complete(&partial)?, h, w)?;
    let padded = bank.decode_to(&partial.features, h, w)?;
    Ok((completed, padded))
}

fn metrics(name: &str, pairs: &[(ImageTensor<f32>, &ImageTensor<f32>)]) -> Result<CompletionMetrics> {
    let n = pairs.len().max(1) as f64;
    let (mut pg, mut pc, mut s) = (0.0, 0.0, 0.0);
    for (out, orig) in pairs {
        let clamped = Tensor3::from_vec(
            out.channels(),
            out.height(),
            out.width(),
            out.data().iter().map(|v| v.clamp(0.0, 1.0)).collect(),
        )?;
        pg += psnr(&to_gray(&clamped)?, &to_gray(orig)?, 1.0)?;
        pc += psnr(&clamped, orig, 1.0)?;
        s += ssim(&clamped, orig)?;
    }
    Ok(CompletionMetrics {
        group: name.to_string(),
        psnr_gray: pg / n,
        psnr_color: pc / n,
        ssim: s / n,
        images: pairs.len(),
    })
}

/// Mean metrics of completed decodes and of zero-padded decodes (in that
/// order) against the original images. Decodes are clamped to `[0, 1]`.
pub fn evaluate_completion(
    map: &CompletionMap,
    bank: &KernelBank<f32>,
    images: &[ImageTensor<f32>],
) -> Result<(CompletionMetrics, CompletionMetrics)> {
    if images.is_empty() {
        return Err(Error::Precondition("no evaluation images".into()));
    }
    let mut completed = Vec::with_capacity(images.len());
    let mut padded = Vec::with_capacity(images.len());
    for img in images {
        let (c, p) = completion_views(map, bank, img)?;
        completed.push((c, img));
        padded.push((p, img));
    }
    Ok((metrics(map.name(), &completed)?, metrics(map.name(), &padded)?))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Kernels;

    fn random_features(rng: &mut SeededRng, k: usize, l: usize, h: usize, w: usize) -> FeatureMap<f32> {
        let data = (0..k * l * h * w).map(|_| rng.random_range(-1.0f32..1.0)).collect();
        FeatureMap::new(k, l, Tensor3::from_vec(k * l, h, w, data).unwrap()).unwrap()
    }

    /// Missing channels are an exact local linear function of the source.
    fn linear_dataset(n: usize, seed: u64) -> (Vec<FeatureMap<f32>>, CompletionMap) {
        let mut rng = SeededRng::seed_from_u64(seed);
        let mut truth = CompletionMap::zeros("synthetic", &[0], 2, 2, 1).unwrap();
        truth.weights.iter_mut().for_each(|v| *v = rng.random_range(-0.5..0.5));
        truth.bias.iter_mut().for_each(|v| *v = rng.random_range(-0.2..0.2));
        let feats = (0..n)
            .map(|_| {
                let f = random_features(&mut rng, 2, 2, 6, 6);
                truth.complete(&PartialFeatures::from_full(&f, &[0])).unwrap()
            })
            .collect();
        (feats, truth)
    }

    #[test]
    fn learns_exact_linear_dependence() {
        let (mut train, _) = linear_dataset(72, 1);
        let held = train.split_off(64);
        let cfg = CompletionConfig {
            steps: 3000,
            batch_size: 8,
            lr0: 0.02,
            ..Default::default()
        };
        let map = train_completion_features("synthetic", &[0], &train, &cfg).unwrap();
        assert!(map.loss(&train).unwrap() < 1e-4);
        for f in &held {
            let out = map.complete(&PartialFeatures::from_full(f, &[0])).unwrap();
            for (a, b) in out.tensor().data().iter().zip(f.tensor().data()) {
                assert!((a - b).abs() < 1e-3);
            }
        }
    }

    #[test]
    fn zero_sources_predict_the_bias_and_sources_pass_through() {
        let (_, truth) = linear_dataset(1, 3);
        let zero = FeatureMap::<f32>::zeros(2, 2, 5, 5);
        let out = truth.complete(&PartialFeatures::from_full(&zero, &[0])).unwrap();
        for (j, ch) in truth.targets().into_iter().enumerate() {
            assert!(out.tensor().channel(ch).iter().all(|&v| v == truth.bias()[j]));
        }
        let mut rng = SeededRng::seed_from_u64(4);
        let f = random_features(&mut rng, 2, 2, 5, 5);
        let out = truth.complete(&PartialFeatures::from_full(&f, &[0])).unwrap();
        assert_eq!(out.module_data(0), f.module_data(0));
    }

    #[test]
    fn prediction_is_linear_for_a_fixed_map() {
        let (_, mut truth) = linear_dataset(1, 5);
        truth.bias.iter_mut().for_each(|b| *b = 0.0);
        let mut rng = SeededRng::seed_from_u64(6);
        let (a, b) = (random_features(&mut rng, 2, 2, 5, 5), random_features(&mut rng, 2, 2, 5, 5));
        let sum = FeatureMap::new(2, 2, a.tensor().scaled(2.0).sub(&b.tensor().scaled(-1.0)).unwrap()).unwrap();
        let pa = truth.complete(&PartialFeatures::from_full(&a, &[0])).unwrap();
        let pb = truth.complete(&PartialFeatures::from_full(&b, &[0])).unwrap();
        let ps = truth.complete(&PartialFeatures::from_full(&sum, &[0])).unwrap();
        for ((s, x), y) in ps.module_data(1).iter().zip(pa.module_data(1)).zip(pb.module_data(1)) {
            assert!((s - (2.0 * x + y)).abs() < 1e-5);
        }
    }

    fn haar_bank() -> KernelBank<f32> {
        let k = [
            [0.5, 0.5, 0.5, 0.5],
            [0.5, 0.5, -0.5, -0.5],
            [0.5, -0.5, 0.5, -0.5],
            [0.5, -0.5, -0.5, 0.5],
        ];
        KernelBank::from_kernels(2, 2, 2, Kernels::from_vec(4, 1, 2, k.concat()).unwrap()).unwrap()
    }

    /// Images whose second Haar module is a local linear map of the first.
    fn haar_images(truth: &CompletionMap, n: usize, rng: &mut SeededRng) -> Vec<ImageTensor<f32>> {
        let bank = haar_bank();
        (0..n)
            .map(|_| {
                let mut f = FeatureMap::<f32>::zeros(2, 2, 8, 8).into_tensor();
                for y in 0..8 {
                    for x in 0..8 {
                        f.set(0, y, x, rng.random_range(0.8..1.2));
                        f.set(1, y, x, rng.random_range(-0.3..0.3));
                    }
                }
                let partial = PartialFeatures::from_full(&FeatureMap::new(2, 2, f).unwrap(), &[0]);
                bank.decode_to(&truth.complete(&partial).unwrap(), 16, 16).unwrap()
            })
            .collect()
    }

    #[test]
    fn haar_synthetic_completion_reaches_the_psnr_cap() {
        let mut rng = SeededRng::seed_from_u64(9);
        let w = (0..36).map(|_| rng.random_range(-0.01f32..0.01)).collect();
        let truth = CompletionMap::from_parts("m0", &[0], 2, 2, 1, w, vec![0.0; 2]).unwrap();
        let train = haar_images(&truth, 256, &mut rng);
        let held = haar_images(&truth, 32, &mut rng);
        assert!(held.iter().all(|i| i.data().iter().all(|&v| (0.0..=1.0).contains(&v))));
        let cfg = CompletionConfig { steps: 3000, batch_size: 16, ..Default::default() };
        let map = train_completion(&haar_bank(), &train, "m0", &[0], &cfg).unwrap();
        let (done, base) = evaluate_completion(&map, &haar_bank(), &held).unwrap();
        assert_eq!(done.psnr_gray, crate::analysis::PSNR_CAP);
        assert!(base.psnr_gray < done.psnr_gray);
    }

    #[test]
    fn group_checks() {
        assert!(CompletionMap::zeros("all", &[0, 1], 2, 2, 1).is_err());
        assert!(CompletionMap::zeros("none", &[], 2, 2, 1).is_err());
        assert!(CompletionMap::zeros("bad", &[5], 2, 2, 1).is_err());
        let map = CompletionMap::zeros("g", &[1], 3, 2, 0).unwrap();
        let f = FeatureMap::<f32>::zeros(3, 2, 4, 4);
        assert!(map.complete(&PartialFeatures::from_full(&f, &[0])).is_err());
        assert!(map.complete(&PartialFeatures::from_full(&f, &[1])).is_ok());
    }

    #[test]
    fn zero_steps_give_the_zero_map_and_baseline_metrics() {
        let mut rng = SeededRng::seed_from_u64(7);
        let bank = KernelBank::from_kernels(
            3,
            2,
            2,
            Kernels::from_vec(6, 1, 4, (0..96).map(|_| rng.random_range(-0.3f32..0.3)).collect()).unwrap(),
        )
        .unwrap();
        let images: Vec<_> = (0..4)
            .map(|_| Tensor3::from_vec(1, 16, 16, (0..256).map(|_| rng.random_range(0.0f32..1.0)).collect()).unwrap())
            .collect();
        let cfg = CompletionConfig { steps: 0, ..Default::default() };
        let map = train_completion(&bank, &images, "g", &[0], &cfg).unwrap();
        assert!(map.weights().iter().chain(map.bias()).all(|&v| v == 0.0));
        let (done, base) = evaluate_completion(&map, &bank, &images).unwrap();
        assert!((done.psnr_gray - base.psnr_gray).abs() < 0.1);
        assert_eq!(done.csv_row().split(',').count(), 4);
    }

    #[test]
    fn serialization_roundtrip_and_magic() {
        let (_, truth) = linear_dataset(1, 8);
        let bytes = truth.to_bytes();
        let back = CompletionMap::from_bytes(&bytes, Path::new("mem")).unwrap();
        assert_eq!(back, truth);
        assert_eq!(back.to_bytes(), bytes);
        let mut bad = bytes.clone();
        bad[3] = b'?';
        let err = CompletionMap::from_bytes(&bad, Path::new("mem")).unwrap_err();
        assert!(err.to_string().contains("SCGCMP01"));
        assert!(CompletionMap::from_bytes(&bytes[..bytes.len() - 1], Path::new("mem")).is_err());
    }
}
