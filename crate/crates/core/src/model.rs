//! Reference segmenter: a per-voxel multinomial linear classifier over five
//! local features, trained with the batch/augment/validate loop.

use std::collections::HashMap;
use std::io::{Read, Write};
use std::path::Path;
use std::time::Instant;

use rayon::prelude::*;

use crate::augment::{apply_policy, AugmentConfig, Mode};
use crate::dataset::{load_sample, sample_batch, FoldPlan, Manifest};
use crate::error::{Error, Result};
use crate::objective::{
    combined_value, combined_with_grad, dice_score, total_dice, AdamConfig, AdamState, ClassReduction, LossConfig, TotalDice,
};
use crate::preprocess::{
    downsample, normalize, sample_stats_with, select_slices, window, CompensatedSum, IntensityStats, SliceMode, WindowConfig,
    DEFAULT_IN_PLANE, DEFAULT_SAMPLE_FRACTION, DEFAULT_SLICES,
};
use crate::rng::{derive_seed, SeededRng};
use crate::volume::{expect_state, CtVolume, Dims, LabelVolume, ProbMap, Sample, Spacing, UnitState};

/// Version tag of the voxel feature layout produced by [`featurize`].
pub const FEATURE_VERSION: u16 = 1;
/// Features per voxel: intensity, 3x3 mean, gradient magnitude, x, y.
pub const NUM_FEATURES: usize = 5;
pub const PARAMS_MAGIC: [u8; 4] = *b"PRM1";
/// Weight initialization half-width.
pub const INIT_SCALE: f64 = 0.01;

const CHUNK: usize = 8192;

/// Anything that turns a preprocessed volume into class probabilities.
pub trait Predictor: Send + Sync {
    fn num_classes(&self) -> u8;
    fn predict(&self, volume: &CtVolume) -> Result<ProbMap>;
}

/// Per-voxel features, stored voxel-major (`data[i * num_features + f]`).
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureMatrix {
    num_features: usize,
    len: usize,
    data: Vec<f64>,
}

impl FeatureMatrix {
    pub fn new(num_features: usize, len: usize, data: Vec<f64>) -> Result<Self> {
        if num_features == 0 || data.len() != num_features * len {
            return Err(Error::Shape(format!(
                "feature buffer of {} values for {num_features} x {len}",
                data.len()
            )));
        }
        if let Some(i) = data.iter().position(|v| !v.is_finite()) {
            return Err(Error::Shape(format!("non-finite feature at flat index {i}")));
        }
        Ok(Self { num_features, len, data })
    }

    pub fn num_features(&self) -> usize {
        self.num_features
    }

    /// Number of voxels.
    pub fn len(&self) -> usize {
        self.len
    }

    pub fn is_empty(&self) -> bool {
        self.len == 0
    }

    /// Features of one voxel.
    pub fn row(&self, voxel: usize) -> &[f64] {
        &self.data[voxel * self.num_features..(voxel + 1) * self.num_features]
    }

    pub fn get(&self, voxel: usize, f: usize) -> f64 {
        self.data[voxel * self.num_features + f]
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    /// Stacks voxel sets end to end.
    pub fn concat(parts: &[&FeatureMatrix]) -> Result<Self> {
        let Some(first) = parts.first() else {
            return Err(Error::EmptyInput("feature matrices"));
        };
        let nf = first.num_features;
        if parts.iter().any(|p| p.num_features != nf) {
            return Err(Error::Shape("feature counts differ".into()));
        }
        let len: usize = parts.iter().map(|p| p.len).sum();
        let mut data = Vec::with_capacity(nf * len);
        for p in parts {
            data.extend_from_slice(&p.data);
        }
        Ok(Self {
            num_features: nf,
            len,
            data,
        })
    }
}

/// Computes the five voxel features of a normalized volume. Neighborhoods are
/// in-plane with clamped borders.
pub fn featurize(volume: &CtVolume) -> Result<FeatureMatrix> {
    expect_state(volume.unit_state(), UnitState::Normalized)?;
    let d = volume.dims();
    let n = d.len();
    let pos = |i: usize, m: usize| if m > 1 { 2.0 * i as f64 / (m - 1) as f64 - 1.0 } else { 0.0 };
    let xs: Vec<f64> = (0..d.nx).map(|x| pos(x, d.nx)).collect();
    let ys: Vec<f64> = (0..d.ny).map(|y| pos(y, d.ny)).collect();
    let slices: Vec<Vec<[f64; 3]>> = (0..d.nz)
        .into_par_iter()
        .map(|z| {
            let plane = volume.slice(z);
            let at = |x: usize, y: usize| plane[y * d.nx + x] as f64;
            let mut out = Vec::with_capacity(d.slice_len());
            for y in 0..d.ny {
                let (ym, yp) = (y.saturating_sub(1), (y + 1).min(d.ny - 1));
                for x in 0..d.nx {
                    let (xm, xp) = (x.saturating_sub(1), (x + 1).min(d.nx - 1));
                    let mut sum = 0.0;
                    for yy in [ym, y, yp] {
                        sum += at(xm, yy) + at(x, yy) + at(xp, yy);
                    }
                    let gx = (at(xp, y) - at(xm, y)) / 2.0;
                    let gy = (at(x, yp) - at(x, ym)) / 2.0;
                    out.push([at(x, y), sum / 9.0, gx.hypot(gy)]);
                }
            }
            out
        })
        .collect();
    let mut data = vec![0.0; NUM_FEATURES * n];
    for (z, plane) in slices.iter().enumerate() {
        for (j, f) in plane.iter().enumerate() {
            let i = z * d.slice_len() + j;
            let (x, y) = (j % d.nx, j / d.nx);
            data[i * NUM_FEATURES..(i + 1) * NUM_FEATURES].copy_from_slice(&[f[0], f[1], f[2], xs[x], ys[y]]);
        }
    }
    FeatureMatrix::new(NUM_FEATURES, n, data)
}

/// Weights (`num_classes x num_features`, row-major) followed by biases.
#[derive(Debug, Clone, PartialEq)]
pub struct PredictorParams {
    feature_version: u16,
    num_classes: usize,
    num_features: usize,
    theta: Vec<f64>,
}

impl PredictorParams {
    pub fn new(feature_version: u16, num_classes: usize, num_features: usize, weights: Vec<f64>, bias: Vec<f64>) -> Result<Self> {
        if num_classes < 2 || num_classes > u16::MAX as usize || num_features == 0 || num_features > u16::MAX as usize {
            return Err(Error::Shape(format!("unsupported parameter shape {num_classes} x {num_features}")));
        }
        if weights.len() != num_classes * num_features || bias.len() != num_classes {
            return Err(Error::Shape(format!(
                "expected {} weights and {num_classes} biases, got {} and {}",
                num_classes * num_features,
                weights.len(),
                bias.len()
            )));
        }
        let mut theta = weights;
        theta.extend(bias);
        if theta.iter().any(|v| !v.is_finite()) {
            return Err(Error::Weight("parameters must be finite".into()));
        }
        Ok(Self {
            feature_version,
            num_classes,
            num_features,
            theta,
        })
    }

    pub fn zeros(feature_version: u16, num_classes: usize, num_features: usize) -> Result<Self> {
        Self::new(
            feature_version,
            num_classes,
            num_features,
            vec![0.0; num_classes * num_features],
            vec![0.0; num_classes],
        )
    }

    /// Every entry uniform in `[-INIT_SCALE, INIT_SCALE]`.
    pub fn random(feature_version: u16, num_classes: usize, num_features: usize, seed: u64) -> Result<Self> {
        let mut p = Self::zeros(feature_version, num_classes, num_features)?;
        let mut rng = SeededRng::new(seed);
        for t in &mut p.theta {
            *t = rng.uniform(-INIT_SCALE, INIT_SCALE);
        }
        Ok(p)
    }

    pub fn feature_version(&self) -> u16 {
        self.feature_version
    }

    pub fn num_classes(&self) -> usize {
        self.num_classes
    }

    pub fn num_features(&self) -> usize {
        self.num_features
    }

    pub fn weights(&self) -> &[f64] {
        &self.theta[..self.num_classes * self.num_features]
    }

    pub fn bias(&self) -> &[f64] {
        &self.theta[self.num_classes * self.num_features..]
    }

    pub fn weight(&self, class: usize, feature: usize) -> f64 {
        self.theta[class * self.num_features + feature]
    }

    /// Flat parameter vector, weights then biases.
    pub fn theta(&self) -> &[f64] {
        &self.theta
    }

    pub(crate) fn theta_mut(&mut self) -> &mut [f64] {
        &mut self.theta
    }

    fn check_features(&self, x: &FeatureMatrix) -> Result<()> {
        if x.num_features != self.num_features {
            return Err(Error::Shape(format!(
                "params expect {} features, got {}",
                self.num_features, x.num_features
            )));
        }
        Ok(())
    }

    /// Softmax outputs of voxels `lo..lo + len` into `z` (class-major, stride `len`).
    fn softmax_block(&self, x: &FeatureMatrix, lo: usize, len: usize, z: &mut [f64]) {
        let rows = &x.data[lo * self.num_features..(lo + len) * self.num_features];
        match (self.num_classes, self.num_features) {
            (2, NUM_FEATURES) => softmax_fixed::<2, NUM_FEATURES>(&self.theta, rows, z),
            (3, NUM_FEATURES) => softmax_fixed::<3, NUM_FEATURES>(&self.theta, rows, z),
            (3, 6) => softmax_fixed::<3, 6>(&self.theta, rows, z),
            (3, 9) => softmax_fixed::<3, 9>(&self.theta, rows, z),
            _ => softmax_dynamic(&self.theta, self.num_classes, self.num_features, rows, z),
        }
    }

    /// Class-major softmax probabilities for every voxel of `x`.
    pub fn forward(&self, x: &FeatureMatrix) -> Result<Vec<f64>> {
        self.check_features(x)?;
        let (c_n, n) = (self.num_classes, x.len);
        let blocks: Vec<Vec<f64>> = (0..n.div_ceil(CHUNK))
            .into_par_iter()
            .map(|k| {
                let (lo, len) = (k * CHUNK, CHUNK.min(n - k * CHUNK));
                let mut z = vec![0.0; c_n * len];
                self.softmax_block(x, lo, len, &mut z);
                z
            })
            .collect();
        let mut probs = vec![0.0; c_n * n];
        for (k, z) in blocks.iter().enumerate() {
            let (lo, len) = (k * CHUNK, z.len() / c_n);
            for c in 0..c_n {
                probs[c * n + lo..c * n + lo + len].copy_from_slice(&z[c * len..(c + 1) * len]);
            }
        }
        Ok(probs)
    }

    /// Combined loss of the predictions on `x` against `truth`, without
    /// materializing the probability buffer. Agrees with
    /// [`combined_value`] over [`forward`](Self::forward) up to summation order.
    pub fn loss(&self, x: &FeatureMatrix, truth: &[u8], cfg: &LossConfig) -> Result<f64> {
        self.check_features(x)?;
        cfg.validate()?;
        let (c_n, n) = (self.num_classes, x.len);
        if truth.len() != n {
            return Err(Error::Shape(format!("{} labels for {n} voxels", truth.len())));
        }
        if n == 0 {
            return Err(Error::EmptyInput("loss over no voxels"));
        }
        if let Some(&l) = truth.iter().find(|&&l| l as usize >= c_n) {
            return Err(Error::Shape(format!("label {l} not below class count {c_n}")));
        }
        // Per chunk: (dot, pp, yy) per class, then the cross-entropy sum.
        let partials: Vec<Vec<f64>> = (0..n.div_ceil(CHUNK))
            .into_par_iter()
            .map(|k| {
                let (lo, len) = (k * CHUNK, CHUNK.min(n - k * CHUNK));
                let mut z = vec![0.0; c_n * len];
                self.softmax_block(x, lo, len, &mut z);
                let t = &truth[lo..lo + len];
                let mut acc = vec![0.0; 3 * c_n + 1];
                for c in 0..c_n {
                    let (mut dot, mut pp, mut yy) = (0.0, 0.0, 0.0);
                    for (&p, &l) in z[c * len..(c + 1) * len].iter().zip(t) {
                        pp += p * p;
                        if l as usize == c {
                            dot += p;
                            yy += 1.0;
                        }
                    }
                    acc[3 * c] = dot;
                    acc[3 * c + 1] = pp;
                    acc[3 * c + 2] = yy;
                }
                let mut ce = CompensatedSum::default();
                for (j, &l) in t.iter().enumerate() {
                    ce.add(-z[l as usize * len + j].max(cfg.prob_floor).ln());
                }
                acc[3 * c_n] = ce.value();
                acc
            })
            .collect();
        let mut sums = vec![0.0; 3 * c_n];
        let mut ce = CompensatedSum::default();
        for p in &partials {
            for (a, b) in sums.iter_mut().zip(p) {
                *a += b;
            }
            ce.add(p[3 * c_n]);
        }
        let classes = match cfg.reduction {
            ClassReduction::AllClasses => 0..c_n,
            ClassReduction::ForegroundOnly => 1..c_n,
        };
        let scale = 1.0 / classes.len() as f64;
        let tan: f64 = classes
            .map(|c| {
                let (dot, pp, yy) = (sums[3 * c], sums[3 * c + 1], sums[3 * c + 2]);
                scale * (1.0 - (dot + cfg.smooth) / (pp + yy - dot + cfg.smooth))
            })
            .sum();
        Ok(cfg.alpha * tan + cfg.beta * (ce.value() / n as f64))
    }

    /// Gradient of a loss with respect to `theta`, given the softmax outputs
    /// `probs` and the loss gradient `grad_probs` (both class-major).
    pub fn backward(&self, x: &FeatureMatrix, probs: &[f64], grad_probs: &[f64]) -> Result<Vec<f64>> {
        self.check_features(x)?;
        let (c_n, f_n, n) = (self.num_classes, self.num_features, x.len);
        if probs.len() != c_n * n || grad_probs.len() != c_n * n {
            return Err(Error::Shape("probability/gradient buffers do not match the features".into()));
        }
        let partials: Vec<Vec<f64>> = (0..n.div_ceil(CHUNK))
            .into_par_iter()
            .map(|k| {
                let (lo, hi) = (k * CHUNK, ((k + 1) * CHUNK).min(n));
                let mut g = vec![0.0; self.theta.len()];
                let mut dz = vec![0.0; c_n];
                for i in lo..hi {
                    let dot: f64 = (0..c_n).map(|c| probs[c * n + i] * grad_probs[c * n + i]).sum();
                    for (c, d) in dz.iter_mut().enumerate() {
                        *d = probs[c * n + i] * (grad_probs[c * n + i] - dot);
                    }
                    let xi = x.row(i);
                    for (c, &d) in dz.iter().enumerate() {
                        for (gf, &v) in g[c * f_n..(c + 1) * f_n].iter_mut().zip(xi) {
                            *gf += d * v;
                        }
                        g[c_n * f_n + c] += d;
                    }
                }
                g
            })
            .collect();
        let mut grad = vec![0.0; self.theta.len()];
        for p in &partials {
            for (a, b) in grad.iter_mut().zip(p) {
                *a += b;
            }
        }
        Ok(grad)
    }

    /// [`forward`](Self::forward) wrapped into a [`ProbMap`].
    pub fn predict_features(&self, x: &FeatureMatrix, dims: Dims, spacing: Spacing) -> Result<ProbMap> {
        if x.len != dims.len() {
            return Err(Error::Shape(format!("{} feature rows for dims {dims}", x.len)));
        }
        ProbMap::from_f64(dims, spacing, self.num_classes as u8, &self.forward(x)?)
    }
}

fn softmax_fixed<const C: usize, const F: usize>(theta: &[f64], rows: &[f64], z: &mut [f64]) {
    let len = rows.len() / F;
    let mut w = [[0.0; F]; C];
    let mut b = [0.0; C];
    for c in 0..C {
        w[c].copy_from_slice(&theta[c * F..(c + 1) * F]);
        b[c] = theta[C * F + c];
    }
    let (z, _) = z.split_at_mut(C * len);
    for (j, xi) in rows.chunks_exact(F).enumerate() {
        let xi: &[f64; F] = xi.try_into().expect("row of F features");
        let mut e = [0.0; C];
        let mut m = f64::NEG_INFINITY;
        for c in 0..C {
            let mut s = b[c];
            for f in 0..F {
                s += w[c][f] * xi[f];
            }
            e[c] = s;
            m = m.max(s);
        }
        let mut total = 0.0;
        for v in e.iter_mut() {
            *v = if *v == m { 1.0 } else { (*v - m).exp() };
            total += *v;
        }
        let inv = 1.0 / total;
        for c in 0..C {
            z[c * len + j] = e[c] * inv;
        }
    }
}

fn softmax_dynamic(theta: &[f64], c_n: usize, f_n: usize, rows: &[f64], z: &mut [f64]) {
    let len = rows.len() / f_n;
    let (weights, bias) = theta.split_at(c_n * f_n);
    let mut e = vec![0.0; c_n];
    for (j, xi) in rows.chunks_exact(f_n).enumerate() {
        let mut m = f64::NEG_INFINITY;
        for (c, (w, &b)) in weights.chunks_exact(f_n).zip(bias).enumerate() {
            let s = w.iter().zip(xi).fold(b, |s, (a, v)| s + a * v);
            e[c] = s;
            m = m.max(s);
        }
        let mut total = 0.0;
        for v in e.iter_mut() {
            *v = if *v == m { 1.0 } else { (*v - m).exp() };
            total += *v;
        }
        let inv = 1.0 / total;
        for (c, v) in e.iter().enumerate() {
            z[c * len + j] = v * inv;
        }
    }
}

impl Predictor for PredictorParams {
    fn num_classes(&self) -> u8 {
        self.num_classes as u8
    }

    fn predict(&self, volume: &CtVolume) -> Result<ProbMap> {
        if self.feature_version != FEATURE_VERSION || self.num_features != NUM_FEATURES {
            return Err(Error::Shape(format!(
                "params use feature spec {} with {} features; voxel prediction needs spec {FEATURE_VERSION} with {NUM_FEATURES}",
                self.feature_version, self.num_features
            )));
        }
        self.predict_features(&featurize(volume)?, volume.dims(), volume.spacing())
    }
}

/// Per-voxel argmax of class-major probabilities; ties go to the lower class.
pub fn argmax_classes(probs: &[f64], num_classes: usize) -> Vec<u8> {
    let n = probs.len() / num_classes;
    (0..n)
        .map(|i| {
            let mut best = 0;
            for c in 1..num_classes {
                if probs[c * n + i] > probs[best * n + i] {
                    best = c;
                }
            }
            best as u8
        })
        .collect()
}

pub fn write_params<W: Write>(params: &PredictorParams, sink: &mut W) -> Result<u64> {
    let mut buf = Vec::with_capacity(10 + 8 * params.theta.len());
    buf.extend_from_slice(&PARAMS_MAGIC);
    buf.extend_from_slice(&params.feature_version.to_le_bytes());
    buf.extend_from_slice(&(params.num_classes as u16).to_le_bytes());
    buf.extend_from_slice(&(params.num_features as u16).to_le_bytes());
    for v in &params.theta {
        buf.extend_from_slice(&v.to_le_bytes());
    }
    sink.write_all(&buf).map_err(|e| Error::io(0, e))?;
    Ok(buf.len() as u64)
}

pub fn read_params<R: Read>(source: &mut R) -> Result<PredictorParams> {
    let mut head = [0u8; 10];
    let mut got = 0;
    while got < head.len() {
        match source.read(&mut head[got..]) {
            Ok(0) => break,
            Ok(k) => got += k,
            Err(e) if e.kind() == std::io::ErrorKind::Interrupted => {}
            Err(e) => return Err(Error::io(got as u64, e)),
        }
    }
    if got < head.len() {
        return Err(Error::Truncation {
            expected: head.len(),
            found: got,
        });
    }
    if head[..4] != PARAMS_MAGIC {
        return Err(Error::Format(format!("bad parameter magic {:?}", &head[..4])));
    }
    let u16_at = |o: usize| u16::from_le_bytes([head[o], head[o + 1]]) as usize;
    let (version, classes, features) = (u16_at(4) as u16, u16_at(6), u16_at(8));
    let count = classes * features + classes;
    let mut payload = Vec::new();
    source
        .take(8 * count as u64 + 1)
        .read_to_end(&mut payload)
        .map_err(|e| Error::io(10, e))?;
    if payload.len() != 8 * count {
        return Err(Error::Truncation {
            expected: 8 * count,
            found: payload.len(),
        });
    }
    let values: Vec<f64> = payload
        .chunks_exact(8)
        .map(|b| f64::from_le_bytes(b.try_into().expect("8-byte chunk")))
        .collect();
    let split = classes * features;
    PredictorParams::new(version, classes, features, values[..split].to_vec(), values[split..].to_vec())
        .map_err(|e| Error::Format(e.to_string()))
}

pub fn save_params(params: &PredictorParams, path: impl AsRef<Path>) -> Result<u64> {
    let mut f = std::io::BufWriter::new(std::fs::File::create(path).map_err(|e| Error::io(0, e))?);
    let n = write_params(params, &mut f)?;
    f.flush().map_err(|e| Error::io(n, e))?;
    Ok(n)
}

pub fn load_params(path: impl AsRef<Path>) -> Result<PredictorParams> {
    let mut f = std::io::BufReader::new(std::fs::File::open(path).map_err(|e| Error::io(0, e))?);
    read_params(&mut f)
}

/// Which label set a model is trained on.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Target {
    /// Labels as stored.
    Multiclass,
    /// Every foreground class merged into class 1.
    Binary,
}

impl Target {
    pub fn name(self) -> &'static str {
        match self {
            Target::Multiclass => "multiclass",
            Target::Binary => "binary",
        }
    }

    pub fn map_labels(self, labels: &LabelVolume) -> LabelVolume {
        match self {
            Target::Multiclass => labels.clone(),
            Target::Binary => LabelVolume::from_parts(
                labels.dims(),
                labels.spacing(),
                2,
                labels.labels().iter().map(|&l| u8::from(l != 0)).collect(),
            ),
        }
    }
}

/// Deterministic preprocessing shared by validation and inference:
/// window, normalize, downsample, all slices kept.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Preprocessor {
    pub window: WindowConfig,
    pub stats: IntensityStats,
    pub in_plane: usize,
}

impl Preprocessor {
    /// Window and normalize a HOUNSFIELD volume.
    pub fn normalize(&self, volume: &CtVolume) -> Result<CtVolume> {
        normalize(&window(volume, &self.window)?, &self.stats)
    }

    pub fn prepare(&self, volume: &CtVolume, labels: Option<&LabelVolume>) -> Result<(CtVolume, Option<LabelVolume>)> {
        downsample(&self.normalize(volume)?, labels, self.in_plane)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub mode: Mode,
    pub target: Target,
    pub batch_size: usize,
    pub max_epochs: usize,
    /// Epochs without a validation improvement larger than `tolerance` before stopping.
    pub patience: usize,
    pub tolerance: f64,
    pub seed: u64,
    pub slices: usize,
    pub in_plane: usize,
    pub window: WindowConfig,
    pub stats_fraction: f64,
    /// Fixed statistics; sampled from the training volumes when `None`.
    pub stats: Option<IntensityStats>,
    /// Draw each volume's training slices once instead of every epoch.
    pub freeze_slices: bool,
    pub loss: LossConfig,
    pub augment: AugmentConfig,
    pub adam: AdamConfig,
}

impl TrainConfig {
    /// Batch size 28 in 2D mode and 1 in 3D mode.
    pub fn for_mode(mode: Mode) -> Self {
        Self {
            mode,
            target: Target::Multiclass,
            batch_size: match mode {
                Mode::TwoD => 28,
                Mode::ThreeD => 1,
            },
            max_epochs: 5000,
            patience: 10,
            tolerance: 1e-4,
            seed: 0,
            slices: DEFAULT_SLICES,
            in_plane: DEFAULT_IN_PLANE,
            window: WindowConfig::default(),
            stats_fraction: DEFAULT_SAMPLE_FRACTION,
            stats: None,
            freeze_slices: false,
            loss: LossConfig::default(),
            augment: AugmentConfig::default(),
            adam: AdamConfig::default(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 {
            return Err(Error::Config("batch_size must be >= 1".into()));
        }
        if !(self.tolerance > 0.0) {
            return Err(Error::Config("tolerance must be > 0".into()));
        }
        if self.patience == 0 {
            return Err(Error::Config("patience must be >= 1".into()));
        }
        if self.slices == 0 || self.in_plane == 0 {
            return Err(Error::Config("slices and in-plane size must be >= 1".into()));
        }
        if !(self.adam.lr >= 0.0) {
            return Err(Error::Config("learning rate must be >= 0".into()));
        }
        self.window.validate()?;
        self.loss.validate()?;
        self.augment.validate()
    }
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self::for_mode(Mode::TwoD)
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EpochRecord {
    pub epoch: usize,
    pub train_loss: f64,
    pub val_loss: f64,
    pub wall_seconds: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum StopReason {
    MaxEpochs,
    Converged,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainingLog {
    pub held_out: Option<usize>,
    pub initial_val_loss: f64,
    pub records: Vec<EpochRecord>,
    /// Epoch whose parameters were returned; `None` means the initial ones.
    pub best_epoch: Option<usize>,
    pub best_val_loss: f64,
    pub stop: StopReason,
    pub stats: IntensityStats,
}

impl TrainingLog {
    /// `#`-prefixed header lines, then `epoch, train loss, val loss, wall seconds` rows.
    pub fn to_tsv(&self) -> String {
        let mut s = String::new();
        if let Some(h) = self.held_out {
            s.push_str(&format!("# held_out_fold={h}\n"));
        }
        s.push_str("# validation_slices=all\n");
        s.push_str(&format!("# initial_val_loss={}\n", self.initial_val_loss));
        s.push_str(&format!(
            "# best_epoch={}\n",
            self.best_epoch.map_or_else(|| "initial".to_string(), |e| e.to_string())
        ));
        s.push_str(&format!("# best_val_loss={}\n", self.best_val_loss));
        s.push_str(&format!(
            "# stop={}\n",
            match self.stop {
                StopReason::MaxEpochs => "max_epochs",
                StopReason::Converged => "converged",
            }
        ));
        s.push_str("epoch\ttrain_loss\tval_loss\twall_seconds\n");
        for r in &self.records {
            s.push_str(&format!("{}\t{}\t{}\t{:.6}\n", r.epoch, r.train_loss, r.val_loss, r.wall_seconds));
        }
        s
    }
}

/// A validation volume with its features precomputed.
#[derive(Debug, Clone, PartialEq)]
pub struct PreparedVolume {
    pub features: FeatureMatrix,
    pub labels: LabelVolume,
}

impl PreparedVolume {
    pub fn new(volume: &CtVolume, labels: LabelVolume) -> Result<Self> {
        labels.matches(volume.dims())?;
        Ok(Self {
            features: featurize(volume)?,
            labels,
        })
    }
}

/// Runs the deterministic preprocessing and feature extraction on samples.
pub fn prepare_set(samples: &[Sample], prep: &Preprocessor, target: Target) -> Result<Vec<PreparedVolume>> {
    samples
        .par_iter()
        .map(|s| {
            let labels = s.labels.as_ref().ok_or(Error::EmptyInput("validation labels"))?;
            let (v, l) = prep.prepare(&s.volume, Some(&target.map_labels(labels)))?;
            PreparedVolume::new(&v, l.expect("labels passed through"))
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq)]
pub struct VolumeScore {
    pub loss: f64,
    /// Dice of classes `1..C`.
    pub class_dice: Vec<f64>,
    /// Dice of the merged foreground.
    pub foreground_dice: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Validation {
    /// Mean of the per-volume combined losses.
    pub loss: f64,
    pub volumes: Vec<VolumeScore>,
}

fn check_classes(params: &PredictorParams, labels: &LabelVolume) -> Result<()> {
    if labels.num_classes() as usize != params.num_classes {
        return Err(Error::Shape(format!(
            "labels have {} classes, params {}",
            labels.num_classes(),
            params.num_classes
        )));
    }
    Ok(())
}

/// Mean per-volume combined loss.
pub fn validation_loss(params: &PredictorParams, set: &[PreparedVolume], loss: &LossConfig) -> Result<f64> {
    if set.is_empty() {
        return Err(Error::EmptyInput("validation set"));
    }
    let losses: Vec<f64> = set
        .iter()
        .map(|v| {
            check_classes(params, &v.labels)?;
            params.loss(&v.features, v.labels.labels(), loss)
        })
        .collect::<Result<_>>()?;
    Ok(losses.iter().sum::<f64>() / losses.len() as f64)
}

/// Loss and Dice scores per prepared volume.
pub fn validate_prepared(params: &PredictorParams, set: &[PreparedVolume], loss: &LossConfig) -> Result<Validation> {
    if set.is_empty() {
        return Err(Error::EmptyInput("validation set"));
    }
    let volumes: Vec<VolumeScore> = set
        .iter()
        .map(|v| {
            check_classes(params, &v.labels)?;
            let p = params.forward(&v.features)?;
            let value = combined_value(&p, v.labels.labels(), params.num_classes, loss)?;
            let pred = LabelVolume::new(
                v.labels.dims(),
                v.labels.spacing(),
                v.labels.num_classes(),
                argmax_classes(&p, params.num_classes),
            )?;
            let class_dice = (1..params.num_classes as u8)
                .map(|c| dice_score(&pred, &v.labels, c))
                .collect::<Result<_>>()?;
            Ok(VolumeScore {
                loss: value,
                class_dice,
                foreground_dice: total_dice(&pred, &v.labels, TotalDice::PooledForeground)?,
            })
        })
        .collect::<Result<_>>()?;
    let loss = volumes.iter().map(|v| v.loss).sum::<f64>() / volumes.len() as f64;
    Ok(Validation { loss, volumes })
}

/// Validates raw HOUNSFIELD samples: deterministic preprocessing, no augmentation,
/// all slices.
pub fn validate(
    params: &PredictorParams,
    samples: &[Sample],
    prep: &Preprocessor,
    target: Target,
    loss: &LossConfig,
) -> Result<Validation> {
    if samples.is_empty() {
        return Err(Error::EmptyInput("validation set"));
    }
    validate_prepared(params, &prepare_set(samples, prep, target)?, loss)
}

/// Result of [`train_samples`].
#[derive(Debug, Clone, PartialEq)]
pub struct Trained {
    pub params: PredictorParams,
    pub log: TrainingLog,
    pub preprocessor: Preprocessor,
}

/// Trains on labeled HOUNSFIELD samples, validating on `validation` after every batch.
pub fn train_samples(train: &[(String, Sample)], validation: &[Sample], cfg: &TrainConfig) -> Result<Trained> {
    cfg.validate()?;
    if train.is_empty() {
        return Err(Error::EmptyInput("training set"));
    }
    if validation.is_empty() {
        return Err(Error::EmptyInput("validation set"));
    }
    let labels_of = |s: &Sample| s.labels.clone().ok_or(Error::EmptyInput("training labels"));
    let num_classes = cfg.target.map_labels(&labels_of(&train[0].1)?).num_classes() as usize;

    let stats = match cfg.stats {
        Some(s) => s,
        None => sample_stats_with(
            train.len(),
            |i| Ok(train[i].1.volume.clone()),
            &cfg.window,
            cfg.stats_fraction,
            derive_seed(cfg.seed, 1),
        )?,
    };
    let prep = Preprocessor {
        window: cfg.window,
        stats,
        in_plane: cfg.in_plane,
    };

    let cached: Vec<Sample> = train
        .par_iter()
        .map(|(_, s)| {
            let labels = cfg.target.map_labels(&labels_of(s)?);
            if labels.num_classes() as usize != num_classes {
                return Err(Error::Shape("training labels disagree on the class count".into()));
            }
            labels.matches(s.volume.dims())?;
            Ok(Sample::new(prep.normalize(&s.volume)?, Some(labels)))
        })
        .collect::<Result<_>>()?;
    let val_set = prepare_set(validation, &prep, cfg.target)?;

    let mut params = PredictorParams::random(FEATURE_VERSION, num_classes, NUM_FEATURES, derive_seed(cfg.seed, 2))?;
    let initial_val_loss = validation_loss(&params, &val_set, &cfg.loss)?;
    let mut log = TrainingLog {
        held_out: None,
        initial_val_loss,
        records: Vec::new(),
        best_epoch: None,
        best_val_loss: initial_val_loss,
        stop: StopReason::MaxEpochs,
        stats,
    };
    let mut best = params.clone();
    let mut reference = initial_val_loss;
    let mut stale = 0;
    let mut adam = AdamState::new(params.theta.len(), cfg.adam);

    let ids: Vec<String> = train.iter().map(|(id, _)| id.clone()).collect();
    let index: HashMap<&str, usize> = ids.iter().enumerate().map(|(i, id)| (id.as_str(), i)).collect();
    let (batch_seed, aug_seed, slice_seed) = (derive_seed(cfg.seed, 3), derive_seed(cfg.seed, 4), derive_seed(cfg.seed, 5));
    let start = Instant::now();

    for epoch in 0..cfg.max_epochs {
        let picked: Vec<usize> = sample_batch(&ids, cfg.batch_size, batch_seed, epoch as u64, 0)?
            .iter()
            .map(|id| index[id.as_str()])
            .collect();
        let batch: Vec<Sample> = picked.iter().map(|&i| cached[i].clone()).collect();
        let (augmented, _) = apply_policy(&batch, &cfg.augment, cfg.mode, epoch as u64, derive_seed(aug_seed, epoch as u64))?;
        let epoch_slices = if cfg.freeze_slices {
            slice_seed
        } else {
            derive_seed(slice_seed, epoch as u64)
        };
        let inputs: Vec<(FeatureMatrix, Vec<u8>)> = augmented
            .par_iter()
            .zip(&picked)
            .map(|(s, &i)| {
                let (v, l) = select_slices(
                    &s.volume,
                    s.labels.as_ref(),
                    cfg.slices,
                    SliceMode::Training,
                    derive_seed(epoch_slices, i as u64),
                )?;
                let (v, l) = downsample(&v, l.as_ref(), cfg.in_plane)?;
                Ok((featurize(&v)?, l.expect("training samples carry labels").labels().to_vec()))
            })
            .collect::<Result<_>>()?;
        let x = FeatureMatrix::concat(&inputs.iter().map(|(f, _)| f).collect::<Vec<_>>())?;
        let y: Vec<u8> = inputs.iter().flat_map(|(_, l)| l.iter().copied()).collect();

        let probs = params.forward(&x)?;
        let loss = combined_with_grad(&probs, &y, num_classes, &cfg.loss)?;
        if !loss.value.is_finite() || loss.grad.iter().any(|g| !g.is_finite()) {
            return Err(Error::Divergence { epoch, batch: 0 });
        }
        let grad = params.backward(&x, &probs, &loss.grad)?;
        adam_step_checked(&mut params, &grad, &mut adam, epoch)?;

        let val = validation_loss(&params, &val_set, &cfg.loss)?;
        if !val.is_finite() {
            return Err(Error::Divergence { epoch, batch: 0 });
        }
        log.records.push(EpochRecord {
            epoch,
            train_loss: loss.value,
            val_loss: val,
            wall_seconds: start.elapsed().as_secs_f64(),
        });
        if val < log.best_val_loss {
            log.best_val_loss = val;
            log.best_epoch = Some(epoch);
            best.theta.copy_from_slice(&params.theta);
        }
        if val < reference - cfg.tolerance {
            reference = val;
            stale = 0;
        } else {
            stale += 1;
            if stale >= cfg.patience {
                log.stop = StopReason::Converged;
                break;
            }
        }
    }
    Ok(Trained {
        params: best,
        log,
        preprocessor: prep,
    })
}

fn adam_step_checked(params: &mut PredictorParams, grad: &[f64], adam: &mut AdamState, epoch: usize) -> Result<()> {
    if grad.iter().any(|g| !g.is_finite()) {
        return Err(Error::Divergence { epoch, batch: 0 });
    }
    crate::objective::adam_step(params.theta_mut(), grad, adam)
}

/// Trains with every fold except `held_out`, validating on `held_out`.
pub fn train(manifest: &Manifest, plan: &FoldPlan, held_out: usize, cfg: &TrainConfig) -> Result<(PredictorParams, TrainingLog)> {
    let trained = train_fold(manifest, plan, held_out, cfg)?;
    Ok((trained.params, trained.log))
}

/// [`train`], also returning the preprocessing the model expects.
pub fn train_fold(manifest: &Manifest, plan: &FoldPlan, held_out: usize, cfg: &TrainConfig) -> Result<Trained> {
    if held_out >= plan.k() {
        return Err(Error::Fold(format!("held-out fold {held_out} outside 0..{}", plan.k())));
    }
    let load = |id: &String| -> Result<Sample> {
        let rec = manifest
            .get(id)
            .ok_or_else(|| Error::Manifest(format!("fold plan id {id:?} missing from manifest")))?;
        load_sample(rec)
    };
    let train_ids = plan.training_ids(held_out);
    if train_ids.is_empty() {
        return Err(Error::EmptyInput("training folds"));
    }
    let train: Vec<(String, Sample)> = train_ids.par_iter().map(|id| Ok((id.clone(), load(id)?))).collect::<Result<_>>()?;
    let validation: Vec<Sample> = plan.fold(held_out).par_iter().map(load).collect::<Result<_>>()?;
    let mut trained = train_samples(&train, &validation, cfg)?;
    trained.log.held_out = Some(held_out);
    Ok(trained)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn norm(dims: Dims, f: impl Fn(usize, usize, usize) -> f32) -> CtVolume {
        let mut v = Vec::with_capacity(dims.len());
        for z in 0..dims.nz {
            for y in 0..dims.ny {
                for x in 0..dims.nx {
                    v.push(f(x, y, z));
                }
            }
        }
        CtVolume::new(dims, Spacing::default(), UnitState::Normalized, v).unwrap()
    }

    #[test]
    fn constant_volume_features() {
        let f = featurize(&norm(Dims::new(5, 5, 2), |_, _, _| 0.7)).unwrap();
        for i in 0..f.len() {
            assert!((f.get(i, 1) - 0.7).abs() < 1e-6);
            assert_eq!(f.get(i, 2), 0.0);
        }
    }

    #[test]
    fn ramp_gradient_and_center_position() {
        let s = 0.25;
        let v = norm(Dims::new(7, 5, 1), |x, _, _| s * x as f32);
        let f = featurize(&v).unwrap();
        let d = v.dims();
        for y in 0..5 {
            for x in 1..6 {
                let i = d.index(x, y, 0);
                let oracle = (v.get(x + 1, y, 0) as f64 - v.get(x - 1, y, 0) as f64) / 2.0;
                assert!((f.get(i, 2) - oracle.abs()).abs() < 1e-12);
                assert!((f.get(i, 2) - s as f64).abs() < 1e-6);
            }
        }
        let c = d.index(3, 2, 0);
        assert_eq!((f.get(c, 3), f.get(c, 4)), (0.0, 0.0));
    }

    #[test]
    fn zero_params_are_uniform() {
        let v = norm(Dims::new(3, 3, 2), |x, y, z| (x + y + z) as f32);
        let p = PredictorParams::zeros(FEATURE_VERSION, 3, NUM_FEATURES).unwrap();
        let m = p.predict(&v).unwrap();
        assert!(m.probs().iter().all(|&q| (q - 1.0 / 3.0).abs() < 1e-7));
    }

    #[test]
    fn single_voxel_softmax_oracle() {
        let x = FeatureMatrix::new(2, 1, vec![0.5, -1.0]).unwrap();
        let p = PredictorParams::new(7, 2, 2, vec![1.0, 2.0, -1.0, 0.5], vec![0.1, -0.2]).unwrap();
        let z0: f64 = 0.1 + 0.5 - 2.0;
        let z1: f64 = -0.2 - 0.5 - 0.5;
        let e = z0.exp() + z1.exp();
        let probs = p.forward(&x).unwrap();
        assert!((probs[0] - z0.exp() / e).abs() < 1e-15);
        assert!((probs[1] - z1.exp() / e).abs() < 1e-15);
    }

    #[test]
    fn params_round_trip_and_truncation() {
        let p = PredictorParams::random(FEATURE_VERSION, 3, NUM_FEATURES, 9).unwrap();
        let mut buf = Vec::new();
        write_params(&p, &mut buf).unwrap();
        assert_eq!(buf.len(), 10 + 8 * 18);
        assert_eq!(read_params(&mut buf.as_slice()).unwrap(), p);
        assert!(matches!(read_params(&mut &buf[..50]), Err(Error::Truncation { .. })));
        assert!(p.theta().iter().all(|t| t.abs() <= INIT_SCALE));
    }

    #[test]
    fn fused_loss_matches_dense() {
        let mut rng = SeededRng::new(4);
        let n = 3 * CHUNK + 17;
        let x = FeatureMatrix::new(NUM_FEATURES, n, (0..NUM_FEATURES * n).map(|_| rng.uniform(-2.0, 2.0)).collect()).unwrap();
        let y: Vec<u8> = (0..n).map(|_| rng.below(3) as u8).collect();
        let p = PredictorParams::random(FEATURE_VERSION, 3, NUM_FEATURES, 8).unwrap();
        for reduction in [ClassReduction::AllClasses, ClassReduction::ForegroundOnly] {
            let cfg = LossConfig {
                reduction,
                ..LossConfig::default()
            };
            let dense = combined_value(&p.forward(&x).unwrap(), &y, 3, &cfg).unwrap();
            assert!((p.loss(&x, &y, &cfg).unwrap() - dense).abs() < 1e-12);
        }
    }

    #[test]
    fn backward_matches_finite_differences() {
        let mut rng = SeededRng::new(3);
        let n = 7;
        let x = FeatureMatrix::new(2, n, (0..2 * n).map(|_| rng.uniform(-1.0, 1.0)).collect()).unwrap();
        let y: Vec<u8> = (0..n).map(|i| (i % 3) as u8).collect();
        let mut p = PredictorParams::random(1, 3, 2, 5).unwrap();
        let cfg = LossConfig::default();
        let probs = p.forward(&x).unwrap();
        let g = p
            .backward(&x, &probs, &combined_with_grad(&probs, &y, 3, &cfg).unwrap().grad)
            .unwrap();
        for k in 0..p.theta.len() {
            let h = 1e-6;
            let orig = p.theta[k];
            p.theta[k] = orig + h;
            let up = combined_with_grad(&p.forward(&x).unwrap(), &y, 3, &cfg).unwrap().value;
            p.theta[k] = orig - h;
            let down = combined_with_grad(&p.forward(&x).unwrap(), &y, 3, &cfg).unwrap().value;
            p.theta[k] = orig;
            let fd = (up - down) / (2.0 * h);
            assert!((fd - g[k]).abs() < 1e-6 * (1.0 + fd.abs()), "{k}: {fd} vs {}", g[k]);
        }
    }
}
