//! CT-specific preprocessing: per-volume quantile windowing, z-scoring with
//! statistics drawn from a random sample of the dataset, slice reduction and
//! in-plane downsampling.

use std::fmt::Write as _;
use std::str::FromStr;

use rayon::prelude::*;

use crate::dataset::Manifest;
use crate::error::{Error, Result};
use crate::format;
use crate::rng::SeededRng;
use crate::volume::{expect_state, CtVolume, Dims, LabelVolume, Spacing, UnitState};

/// Default fixed slice depth after reduction.
pub const DEFAULT_SLICES: usize = 16;
/// Default in-plane size after downsampling.
pub const DEFAULT_IN_PLANE: usize = 128;
/// Default fraction of the dataset drawn for intensity statistics.
pub const DEFAULT_SAMPLE_FRACTION: f64 = 0.2;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum WindowPreset {
    Organ,
    Bone,
    Lung,
    Custom,
}

impl WindowPreset {
    pub fn name(self) -> &'static str {
        match self {
            Self::Organ => "organ",
            Self::Bone => "bone",
            Self::Lung => "lung",
            Self::Custom => "custom",
        }
    }
}

/// Quantile window, as fractions of the per-volume intensity distribution.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct WindowConfig {
    pub q_low: f64,
    pub q_high: f64,
    pub preset: WindowPreset,
}

impl WindowConfig {
    pub fn new(q_low: f64, q_high: f64) -> Result<Self> {
        let cfg = Self {
            q_low,
            q_high,
            preset: WindowPreset::Custom,
        };
        cfg.validate()?;
        Ok(cfg)
    }

    /// Soft-tissue window used for organ and tumor segmentation.
    pub const fn organ() -> Self {
        Self {
            q_low: 0.6,
            q_high: 0.99,
            preset: WindowPreset::Organ,
        }
    }

    /// Keeps only the dense upper tail.
    pub const fn bone() -> Self {
        Self {
            q_low: 0.9,
            q_high: 1.0,
            preset: WindowPreset::Bone,
        }
    }

    /// Keeps the low-density half, air and lung parenchyma.
    pub const fn lung() -> Self {
        Self {
            q_low: 0.0,
            q_high: 0.5,
            preset: WindowPreset::Lung,
        }
    }

    pub fn preset(name: &str) -> Option<Self> {
        match name {
            "organ" => Some(Self::organ()),
            "bone" => Some(Self::bone()),
            "lung" => Some(Self::lung()),
            _ => None,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(0.0..1.0).contains(&self.q_low) || !(self.q_high > 0.0 && self.q_high <= 1.0) || self.q_low >= self.q_high {
            return Err(Error::Config(format!(
                "window quantiles must satisfy 0 <= q_low < q_high <= 1, got ({}, {})",
                self.q_low, self.q_high
            )));
        }
        Ok(())
    }
}

impl Default for WindowConfig {
    fn default() -> Self {
        Self::organ()
    }
}

/// Linear-interpolation quantile of an ascending slice.
pub fn quantile_sorted(sorted: &[f64], q: f64) -> f64 {
    let n = sorted.len();
    let pos = q * (n - 1) as f64;
    let lo = pos.floor() as usize;
    if lo + 1 >= n {
        return sorted[n - 1];
    }
    let frac = pos - lo as f64;
    sorted[lo] + frac * (sorted[lo + 1] - sorted[lo])
}

/// Linear-interpolation quantile: with sorted values `v` and `p = q (n - 1)`,
/// returns `v[floor p] + frac(p) (v[floor p + 1] - v[floor p])`.
pub fn quantile(values: &[f32], q: f64) -> Result<f64> {
    if values.is_empty() {
        return Err(Error::EmptyInput("quantile of no values"));
    }
    if !(0.0..=1.0).contains(&q) {
        return Err(Error::Config(format!("quantile fraction {q} outside [0, 1]")));
    }
    Ok(quantile_sorted(&sorted_f64(values), q))
}

fn sorted_f64(values: &[f32]) -> Vec<f64> {
    let mut v: Vec<f64> = values.iter().map(|&x| x as f64).collect();
    v.sort_unstable_by(f64::total_cmp);
    v
}

/// Per-volume clamp bounds for a window.
pub fn window_bounds(volume: &CtVolume, cfg: &WindowConfig) -> Result<(f64, f64)> {
    cfg.validate()?;
    let sorted = sorted_f64(volume.voxels());
    Ok((quantile_sorted(&sorted, cfg.q_low), quantile_sorted(&sorted, cfg.q_high)))
}

/// Clamps every voxel into the volume's own `[q_low, q_high]` quantile range.
pub fn window(volume: &CtVolume, cfg: &WindowConfig) -> Result<CtVolume> {
    expect_state(volume.unit_state(), UnitState::Hounsfield)?;
    let (lo, hi) = window_bounds(volume, cfg)?;
    if lo == hi {
        return Err(Error::DegenerateWindow(lo));
    }
    let (lo, hi) = (lo as f32, hi as f32);
    let voxels = volume.voxels().iter().map(|v| v.clamp(lo, hi)).collect();
    Ok(volume.with_voxels(UnitState::Windowed, voxels))
}

/// Dataset-level intensity statistics used for z-scoring.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct IntensityStats {
    pub mean: f64,
    pub std: f64,
    pub sample_fraction: f64,
    pub seed: u64,
    pub n_volumes_sampled: usize,
}

impl IntensityStats {
    /// Statistics not drawn from a dataset sample, e.g. for a fixed prior.
    pub fn fixed(mean: f64, std: f64) -> Result<Self> {
        let s = Self {
            mean,
            std,
            sample_fraction: 1.0,
            seed: 0,
            n_volumes_sampled: 1,
        };
        s.validate()?;
        Ok(s)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.std > 0.0 && self.std.is_finite() && self.mean.is_finite()) {
            return Err(Error::Stats(format!("invalid mean/std ({}, {})", self.mean, self.std)));
        }
        if self.n_volumes_sampled == 0 {
            return Err(Error::Stats("no volumes sampled".into()));
        }
        Ok(())
    }

    /// `key=value` lines.
    pub fn to_text(&self) -> String {
        let mut s = String::new();
        let _ = writeln!(s, "mean={}", self.mean);
        let _ = writeln!(s, "std={}", self.std);
        let _ = writeln!(s, "sample_fraction={}", self.sample_fraction);
        let _ = writeln!(s, "seed={}", self.seed);
        let _ = writeln!(s, "n_volumes_sampled={}", self.n_volumes_sampled);
        s
    }

    pub fn from_text(text: &str) -> Result<Self> {
        let kv = crate::parse_key_values(text)?;
        let get = |key: &str| {
            kv.iter().find(|(k, _, _)| k == key).ok_or_else(|| Error::Parse {
                line: 0,
                message: format!("missing key {key}"),
            })
        };
        fn parse<T: FromStr>(entry: &(String, String, usize)) -> Result<T> {
            entry.1.parse().map_err(|_| Error::Parse {
                line: entry.2,
                message: format!("bad value {:?} for {}", entry.1, entry.0),
            })
        }
        let stats = Self {
            mean: parse(get("mean")?)?,
            std: parse(get("std")?)?,
            sample_fraction: parse(get("sample_fraction")?)?,
            seed: parse(get("seed")?)?,
            n_volumes_sampled: parse(get("n_volumes_sampled")?)?,
        };
        stats.validate()?;
        Ok(stats)
    }
}

/// Neumaier-compensated running sum.
#[derive(Debug, Default, Clone, Copy)]
pub(crate) struct CompensatedSum {
    sum: f64,
    comp: f64,
}

impl CompensatedSum {
    pub(crate) fn add(&mut self, x: f64) {
        let t = self.sum + x;
        if self.sum.abs() >= x.abs() {
            self.comp += (self.sum - t) + x;
        } else {
            self.comp += (x - t) + self.sum;
        }
        self.sum = t;
    }

    pub(crate) fn value(&self) -> f64 {
        self.sum + self.comp
    }
}

/// Pooled mean and population standard deviation over several voxel buffers.
pub fn pooled_mean_std<'a>(buffers: impl IntoIterator<Item = &'a [f32]> + Clone) -> (f64, f64, usize) {
    let mut sum = CompensatedSum::default();
    let mut count = 0usize;
    for b in buffers.clone() {
        for &v in b {
            sum.add(v as f64);
        }
        count += b.len();
    }
    if count == 0 {
        return (f64::NAN, f64::NAN, 0);
    }
    let mean = sum.value() / count as f64;
    let mut sq = CompensatedSum::default();
    for b in buffers {
        for &v in b {
            let d = v as f64 - mean;
            sq.add(d * d);
        }
    }
    (mean, (sq.value() / count as f64).sqrt(), count)
}

/// Indices of the volumes drawn for statistics: `ceil(fraction * n)` distinct
/// indices in draw order.
pub fn stats_sample_indices(n: usize, fraction: f64, seed: u64) -> Result<Vec<usize>> {
    if n == 0 {
        return Err(Error::EmptyInput("statistics over an empty dataset"));
    }
    if !(fraction > 0.0 && fraction <= 1.0) {
        return Err(Error::Config(format!("sample fraction {fraction} outside (0, 1]")));
    }
    let k = ((fraction * n as f64).ceil() as usize).clamp(1, n);
    Ok(SeededRng::new(seed).sample_distinct(n, k))
}

/// Draws a random subset of `n` volumes through `load`, windows each, and
/// returns the pooled statistics. Volumes whose window is degenerate are skipped.
pub fn sample_stats_with<F>(n: usize, load: F, cfg: &WindowConfig, fraction: f64, seed: u64) -> Result<IntensityStats>
where
    F: Fn(usize) -> Result<CtVolume> + Sync,
{
    let picks = stats_sample_indices(n, fraction, seed)?;
    let windowed: Vec<Option<CtVolume>> = picks
        .par_iter()
        .map(|&i| match window(&load(i)?, cfg) {
            Ok(v) => Ok(Some(v)),
            Err(Error::DegenerateWindow(_)) => Ok(None),
            Err(e) => Err(e),
        })
        .collect::<Result<_>>()?;
    let kept: Vec<&[f32]> = windowed.iter().flatten().map(|v| v.voxels()).collect();
    if kept.is_empty() {
        return Err(Error::Stats("every sampled volume has a degenerate window".into()));
    }
    let (mean, std, _) = pooled_mean_std(kept.iter().copied());
    if !(std > 0.0) {
        return Err(Error::Stats("sampled intensities have zero spread".into()));
    }
    Ok(IntensityStats {
        mean,
        std,
        sample_fraction: fraction,
        seed,
        n_volumes_sampled: kept.len(),
    })
}

/// [`sample_stats_with`] over the volumes listed in a manifest.
pub fn sample_stats(manifest: &Manifest, cfg: &WindowConfig, fraction: f64, seed: u64) -> Result<IntensityStats> {
    let records = manifest.records();
    sample_stats_with(records.len(), |i| format::load_volume(&records[i].volume_path), cfg, fraction, seed)
}

/// z-scores a windowed volume.
pub fn normalize(volume: &CtVolume, stats: &IntensityStats) -> Result<CtVolume> {
    expect_state(volume.unit_state(), UnitState::Windowed)?;
    stats.validate()?;
    let voxels = volume
        .voxels()
        .iter()
        .map(|&v| ((v as f64 - stats.mean) / stats.std) as f32)
        .collect();
    Ok(volume.with_voxels(UnitState::Normalized, voxels))
}

/// Training mode restricts candidates to foreground slices; inference uses all.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SliceMode {
    Training,
    Inference,
}

/// Candidate slice set for a mode.
pub fn slice_candidates(nz: usize, labels: Option<&LabelVolume>, mode: SliceMode) -> Result<Vec<usize>> {
    match mode {
        SliceMode::Inference => Ok((0..nz).collect()),
        SliceMode::Training => {
            let labels = labels.ok_or_else(|| Error::Config("training-mode slice selection needs labels".into()))?;
            let c: Vec<usize> = (0..nz).filter(|&z| labels.slice(z).iter().any(|&l| l != 0)).collect();
            if c.is_empty() {
                return Err(Error::NoForeground);
            }
            Ok(c)
        }
    }
}

/// Ascending z-indices of the `k` slices to keep: drawn without replacement
/// when there are at least `k` candidates, with replacement otherwise.
pub fn slice_indices(nz: usize, labels: Option<&LabelVolume>, k: usize, mode: SliceMode, seed: u64) -> Result<Vec<usize>> {
    if nz == 0 {
        return Err(Error::TooFewSlices("volume has no slices".into()));
    }
    if k == 0 {
        return Err(Error::Config("slice count must be >= 1".into()));
    }
    let candidates = slice_candidates(nz, labels, mode)?;
    let mut rng = SeededRng::new(seed);
    let picks = if candidates.len() >= k {
        rng.sample_distinct(candidates.len(), k)
    } else {
        rng.sample_with_replacement(candidates.len(), k)
    };
    let mut z: Vec<usize> = picks.into_iter().map(|i| candidates[i]).collect();
    z.sort_unstable();
    Ok(z)
}

/// Reduces a volume (and its labels) to `k` slices.
pub fn select_slices(
    volume: &CtVolume,
    labels: Option<&LabelVolume>,
    k: usize,
    mode: SliceMode,
    seed: u64,
) -> Result<(CtVolume, Option<LabelVolume>)> {
    if let Some(l) = labels {
        l.matches(volume.dims())?;
    }
    let z = slice_indices(volume.dims().nz, labels, k, mode, seed)?;
    Ok((volume.select_z(&z), labels.map(|l| l.select_z(&z))))
}

/// Source coordinate of output pixel `i` when resampling `n` pixels to `m`,
/// aligned on pixel centers.
fn center_coord(i: usize, n: usize, m: usize) -> f64 {
    (i as f64 + 0.5) * (n as f64 / m as f64) - 0.5
}

fn nearest_index(i: usize, n: usize, m: usize) -> usize {
    (((i as f64 + 0.5) * (n as f64 / m as f64)).floor() as usize).min(n - 1)
}

/// Bilinear sample of a row-major `nx * ny` plane with edge clamping.
pub(crate) fn bilinear(plane: &[f32], nx: usize, ny: usize, x: f64, y: f64) -> f64 {
    let x = x.clamp(0.0, (nx - 1) as f64);
    let y = y.clamp(0.0, (ny - 1) as f64);
    let x0 = x.floor() as usize;
    let y0 = y.floor() as usize;
    let x1 = (x0 + 1).min(nx - 1);
    let y1 = (y0 + 1).min(ny - 1);
    let tx = x - x0 as f64;
    let ty = y - y0 as f64;
    let p = |xx: usize, yy: usize| plane[yy * nx + xx] as f64;
    let top = p(x0, y0) * (1.0 - tx) + p(x1, y0) * tx;
    let bottom = p(x0, y1) * (1.0 - tx) + p(x1, y1) * tx;
    top * (1.0 - ty) + bottom * ty
}

/// Resamples each square slice to `target x target`: intensities bilinearly,
/// labels by nearest neighbor. Slice count is unchanged.
pub fn downsample(volume: &CtVolume, labels: Option<&LabelVolume>, target: usize) -> Result<(CtVolume, Option<LabelVolume>)> {
    let d = volume.dims();
    if let Some(l) = labels {
        l.matches(d)?;
    }
    if d.nx != d.ny {
        return Err(Error::Shape(format!("downsampling needs square slices, got {d}")));
    }
    if target == 0 {
        return Err(Error::Config("target size must be >= 1".into()));
    }
    if target > d.nx {
        return Err(Error::UpsampleRefused { target, size: d.nx });
    }
    if target == d.nx {
        return Ok((volume.clone(), labels.cloned()));
    }
    let out_dims = Dims::new(target, target, d.nz);
    let ratio = d.nx as f32 / target as f32;
    let s = volume.spacing();
    let spacing = Spacing::new(s.sx * ratio, s.sy * ratio, s.sz);
    let coords: Vec<f64> = (0..target).map(|i| center_coord(i, d.nx, target)).collect();
    let mut voxels = Vec::with_capacity(out_dims.len());
    for z in 0..d.nz {
        let plane = volume.slice(z);
        for &y in &coords {
            for &x in &coords {
                voxels.push(bilinear(plane, d.nx, d.ny, x, y) as f32);
            }
        }
    }
    let out_labels = labels.map(|l| {
        let idx: Vec<usize> = (0..target).map(|i| nearest_index(i, d.nx, target)).collect();
        let mut out = Vec::with_capacity(out_dims.len());
        for z in 0..d.nz {
            let plane = l.slice(z);
            for &y in &idx {
                for &x in &idx {
                    out.push(plane[y * d.nx + x]);
                }
            }
        }
        l.with_geometry(out_dims, spacing, out)
    });
    Ok((volume.with_geometry(out_dims, spacing, voxels), out_labels))
}
