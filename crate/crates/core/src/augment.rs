//! CT-specific augmentations and the batch-level policy that applies them.
//!
//! The chain runs noise, slice skipping, slice interpolation and rotation in
//! that order; the intensity range shift is gated separately per volume.

use std::fmt::Write as _;

use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::preprocess::bilinear;
use crate::rng::{derive_seed, SeededRng};
use crate::volume::{expect_state, CtVolume, LabelVolume, Sample, Spacing, UnitState};

/// Training input dimensionality; selects batch size and policy rate.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Mode {
    TwoD,
    ThreeD,
}

impl Mode {
    pub fn name(self) -> &'static str {
        match self {
            Self::TwoD => "2D",
            Self::ThreeD => "3D",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        match s.to_ascii_uppercase().as_str() {
            "2D" => Some(Self::TwoD),
            "3D" => Some(Self::ThreeD),
            _ => None,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AugmentConfig {
    /// Standard deviation of the additive noise map, normalized units.
    pub noise_sigma: f64,
    /// Fraction of slices removed by skipping.
    pub skip_rate: f64,
    /// Fraction of slice gaps filled by interpolation.
    pub interp_insert_rate: f64,
    /// Half-width of the uniform range shift, normalized units.
    pub shift_max: f64,
    pub rot_max_deg: f64,
    /// Probability that a 3D training batch is augmented.
    pub policy_3d: f64,
    /// Probability that a 2D training batch is augmented.
    pub policy_2d: f64,
    /// Per-volume probability of the range shift.
    pub shift_prob: f64,
}

impl Default for AugmentConfig {
    fn default() -> Self {
        Self {
            noise_sigma: 0.05,
            skip_rate: 0.1,
            interp_insert_rate: 0.1,
            shift_max: 0.1,
            rot_max_deg: 16.0,
            policy_3d: 0.8,
            policy_2d: 0.9,
            shift_prob: 0.2,
        }
    }
}

impl AugmentConfig {
    /// Every gate and magnitude zero.
    pub fn disabled() -> Self {
        Self {
            noise_sigma: 0.0,
            skip_rate: 0.0,
            interp_insert_rate: 0.0,
            shift_max: 0.0,
            rot_max_deg: 0.0,
            policy_3d: 0.0,
            policy_2d: 0.0,
            shift_prob: 0.0,
        }
    }

    pub fn policy(&self, mode: Mode) -> f64 {
        match mode {
            Mode::TwoD => self.policy_2d,
            Mode::ThreeD => self.policy_3d,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let unit = [
            ("skip_rate", self.skip_rate),
            ("interp_insert_rate", self.interp_insert_rate),
            ("policy_3d", self.policy_3d),
            ("policy_2d", self.policy_2d),
            ("shift_prob", self.shift_prob),
        ];
        for (name, v) in unit {
            if !(0.0..=1.0).contains(&v) {
                return Err(Error::Config(format!("{name}={v} outside [0, 1]")));
            }
        }
        if !(self.noise_sigma >= 0.0 && self.shift_max >= 0.0) {
            return Err(Error::Config("noise_sigma and shift_max must be >= 0".into()));
        }
        if !(0.0..=45.0).contains(&self.rot_max_deg) {
            return Err(Error::Config(format!("rot_max_deg={} outside [0, 45]", self.rot_max_deg)));
        }
        Ok(())
    }

    pub fn to_text(&self) -> String {
        let mut s = String::new();
        for (k, v) in self.entries() {
            let _ = writeln!(s, "{k}={v}");
        }
        s
    }

    fn entries(&self) -> [(&'static str, f64); 8] {
        [
            ("noise_sigma", self.noise_sigma),
            ("skip_rate", self.skip_rate),
            ("interp_insert_rate", self.interp_insert_rate),
            ("shift_max", self.shift_max),
            ("rot_max_deg", self.rot_max_deg),
            ("policy_3d", self.policy_3d),
            ("policy_2d", self.policy_2d),
            ("shift_prob", self.shift_prob),
        ]
    }

    /// Parses `key=value` lines; missing keys keep their defaults.
    pub fn from_text(text: &str) -> Result<Self> {
        let mut cfg = Self::default();
        for (key, value, line) in crate::parse_key_values(text)? {
            let v: f64 = value.parse().map_err(|_| Error::Parse {
                line,
                message: format!("bad number {value:?}"),
            })?;
            let slot = match key.as_str() {
                "noise_sigma" => &mut cfg.noise_sigma,
                "skip_rate" => &mut cfg.skip_rate,
                "interp_insert_rate" => &mut cfg.interp_insert_rate,
                "shift_max" => &mut cfg.shift_max,
                "rot_max_deg" => &mut cfg.rot_max_deg,
                "policy_3d" => &mut cfg.policy_3d,
                "policy_2d" => &mut cfg.policy_2d,
                "shift_prob" => &mut cfg.shift_prob,
                other => {
                    return Err(Error::Parse {
                        line,
                        message: format!("unknown key {other}"),
                    })
                }
            };
            *slot = v;
        }
        cfg.validate()?;
        Ok(cfg)
    }
}

/// Adds an independent `Normal(0, sigma^2)` draw to every voxel.
pub fn gaussian_noise(volume: &CtVolume, sigma: f64, seed: u64) -> Result<CtVolume> {
    expect_state(volume.unit_state(), UnitState::Normalized)?;
    if !(sigma >= 0.0) {
        return Err(Error::Config(format!("noise sigma {sigma} must be >= 0")));
    }
    if sigma == 0.0 {
        return Ok(volume.clone());
    }
    let mut rng = SeededRng::new(seed);
    let voxels = volume
        .voxels()
        .iter()
        .map(|&v| (v as f64 + sigma * rng.standard_normal()) as f32)
        .collect();
    Ok(volume.with_voxels(UnitState::Normalized, voxels))
}

fn thickness_for(spacing: Spacing, old_nz: usize, new_nz: usize) -> Spacing {
    // Keeps the physical extent between the first and last slice.
    let sz = if old_nz > 1 && new_nz > 1 {
        spacing.sz * (old_nz - 1) as f32 / (new_nz - 1) as f32
    } else {
        spacing.sz
    };
    Spacing { sz, ..spacing }
}

/// Interior slice indices removed by [`skip_slices`], ascending.
pub fn skipped_indices(nz: usize, rate: f64, seed: u64) -> Result<Vec<usize>> {
    if nz < 2 {
        return Err(Error::TooFewSlices(format!("slice skipping needs >= 2 slices, got {nz}")));
    }
    if !(0.0..=1.0).contains(&rate) {
        return Err(Error::Config(format!("skip rate {rate} outside [0, 1]")));
    }
    let count = (rate * nz as f64).floor() as usize;
    let interior = nz - 2;
    if count > interior {
        return Err(Error::TooFewSlices(format!(
            "cannot skip {count} of {nz} slices while keeping both boundary slices"
        )));
    }
    let mut removed: Vec<usize> = SeededRng::new(seed)
        .sample_distinct(interior, count)
        .into_iter()
        .map(|i| i + 1)
        .collect();
    removed.sort_unstable();
    Ok(removed)
}

/// Drops `floor(rate * nz)` randomly chosen interior slices, simulating a
/// thicker-slice acquisition.
pub fn skip_slices(volume: &CtVolume, labels: Option<&LabelVolume>, rate: f64, seed: u64) -> Result<(CtVolume, Option<LabelVolume>)> {
    let nz = volume.dims().nz;
    if let Some(l) = labels {
        l.matches(volume.dims())?;
    }
    let removed = skipped_indices(nz, rate, seed)?;
    if removed.is_empty() {
        return Ok((volume.clone(), labels.cloned()));
    }
    let keep: Vec<usize> = (0..nz).filter(|z| removed.binary_search(z).is_err()).collect();
    let spacing = thickness_for(volume.spacing(), nz, keep.len());
    let v = volume.select_z(&keep);
    let v = v.with_geometry(v.dims(), spacing, v.voxels().to_vec());
    let l = labels.map(|l| {
        let s = l.select_z(&keep);
        s.with_geometry(s.dims(), spacing, s.labels().to_vec())
    });
    Ok((v, l))
}

/// Gap indices `g` (between slices `g` and `g + 1`) filled by [`interpolate_slices`].
pub fn inserted_gaps(nz: usize, rate: f64, seed: u64) -> Result<Vec<usize>> {
    if nz < 2 {
        return Err(Error::TooFewSlices(format!("slice interpolation needs >= 2 slices, got {nz}")));
    }
    if !(0.0..=1.0).contains(&rate) {
        return Err(Error::Config(format!("insert rate {rate} outside [0, 1]")));
    }
    let count = (rate * (nz - 1) as f64).floor() as usize;
    let mut gaps = SeededRng::new(seed).sample_distinct(nz - 1, count);
    gaps.sort_unstable();
    Ok(gaps)
}

/// Inserts the voxelwise mean between randomly chosen adjacent slice pairs,
/// simulating thinner slices. The inserted label slice copies the lower slice.
pub fn interpolate_slices(
    volume: &CtVolume,
    labels: Option<&LabelVolume>,
    rate: f64,
    seed: u64,
) -> Result<(CtVolume, Option<LabelVolume>)> {
    let d = volume.dims();
    if let Some(l) = labels {
        l.matches(d)?;
    }
    let gaps = inserted_gaps(d.nz, rate, seed)?;
    if gaps.is_empty() {
        return Ok((volume.clone(), labels.cloned()));
    }
    let new_nz = d.nz + gaps.len();
    let dims = d.with_nz(new_nz);
    let spacing = thickness_for(volume.spacing(), d.nz, new_nz);
    let mut voxels = Vec::with_capacity(dims.len());
    let mut out_labels = labels.map(|_| Vec::with_capacity(dims.len()));
    for z in 0..d.nz {
        voxels.extend_from_slice(volume.slice(z));
        if let (Some(out), Some(l)) = (out_labels.as_mut(), labels) {
            out.extend_from_slice(l.slice(z));
        }
        if gaps.binary_search(&z).is_ok() {
            let (a, b) = (volume.slice(z), volume.slice(z + 1));
            voxels.extend(a.iter().zip(b).map(|(&p, &q)| ((p as f64 + q as f64) / 2.0) as f32));
            if let (Some(out), Some(l)) = (out_labels.as_mut(), labels) {
                out.extend_from_slice(l.slice(z));
            }
        }
    }
    let v = volume.with_geometry(dims, spacing, voxels);
    let l = labels.zip(out_labels).map(|(l, out)| l.with_geometry(dims, spacing, out));
    Ok((v, l))
}

/// Scalar drawn uniformly from `[-delta, delta]`.
pub fn draw_shift(delta: f64, seed: u64) -> f64 {
    if delta == 0.0 {
        return 0.0;
    }
    SeededRng::new(seed).uniform(-delta, delta)
}

/// Adds a constant to every voxel.
pub fn shift_by(volume: &CtVolume, amount: f64) -> Result<CtVolume> {
    expect_state(volume.unit_state(), UnitState::Normalized)?;
    if amount == 0.0 {
        return Ok(volume.clone());
    }
    let voxels = volume.voxels().iter().map(|&v| (v as f64 + amount) as f32).collect();
    Ok(volume.with_voxels(UnitState::Normalized, voxels))
}

/// Global intensity shift by a uniform draw from `[-delta, delta]`.
pub fn range_shift(volume: &CtVolume, delta: f64, seed: u64) -> Result<CtVolume> {
    if !(delta >= 0.0) {
        return Err(Error::Config(format!("shift magnitude {delta} must be >= 0")));
    }
    shift_by(volume, draw_shift(delta, seed))
}

/// Rotation angle in degrees, uniform on `[-max_deg, max_deg]`.
pub fn rotation_angle(max_deg: f64, seed: u64) -> Result<f64> {
    if !(0.0..=45.0).contains(&max_deg) {
        return Err(Error::Config(format!("rotation bound {max_deg} outside [0, 45]")));
    }
    if max_deg == 0.0 {
        return Ok(0.0);
    }
    Ok(SeededRng::new(seed).uniform(-max_deg, max_deg))
}

/// Rotates every slice by `angle_deg` about the slice center. Intensities are
/// sampled bilinearly and labels by nearest neighbor; samples falling outside
/// the field take the volume minimum and background respectively.
pub fn rotate_by(volume: &CtVolume, labels: Option<&LabelVolume>, angle_deg: f64) -> Result<(CtVolume, Option<LabelVolume>)> {
    let d = volume.dims();
    if let Some(l) = labels {
        l.matches(d)?;
    }
    if angle_deg == 0.0 {
        return Ok((volume.clone(), labels.cloned()));
    }
    let (sin, cos) = angle_deg.to_radians().sin_cos();
    let cx = (d.nx - 1) as f64 / 2.0;
    let cy = (d.ny - 1) as f64 / 2.0;
    let fill = volume.min_value();
    let (xmax, ymax) = ((d.nx - 1) as f64, (d.ny - 1) as f64);
    const EDGE: f64 = 1e-9;

    // Source coordinate of every output pixel, shared by all slices.
    let mut sources = Vec::with_capacity(d.slice_len());
    for y in 0..d.ny {
        for x in 0..d.nx {
            let dx = x as f64 - cx;
            let dy = y as f64 - cy;
            sources.push((cx + cos * dx + sin * dy, cy - sin * dx + cos * dy));
        }
    }

    let mut voxels = Vec::with_capacity(d.len());
    for z in 0..d.nz {
        let plane = volume.slice(z);
        for &(sx, sy) in &sources {
            let inside = sx >= -EDGE && sx <= xmax + EDGE && sy >= -EDGE && sy <= ymax + EDGE;
            voxels.push(if inside { bilinear(plane, d.nx, d.ny, sx, sy) as f32 } else { fill });
        }
    }
    let out_labels = labels.map(|l| {
        let mut out = Vec::with_capacity(d.len());
        for z in 0..d.nz {
            let plane = l.slice(z);
            for &(sx, sy) in &sources {
                let (rx, ry) = (sx.round(), sy.round());
                out.push(if rx >= 0.0 && rx <= xmax && ry >= 0.0 && ry <= ymax {
                    plane[ry as usize * d.nx + rx as usize]
                } else {
                    0
                });
            }
        }
        l.with_geometry(d, l.spacing(), out)
    });
    Ok((volume.with_voxels(volume.unit_state(), voxels), out_labels))
}

/// In-plane rotation by a random angle in `[-max_deg, max_deg]`.
pub fn rotate(volume: &CtVolume, labels: Option<&LabelVolume>, max_deg: f64, seed: u64) -> Result<(CtVolume, Option<LabelVolume>)> {
    rotate_by(volume, labels, rotation_angle(max_deg, seed)?)
}

/// What [`apply_policy`] did to one batch.
#[derive(Debug, Clone, PartialEq)]
pub struct AugmentTrace {
    pub batch_id: u64,
    /// Whether the noise/skip/interpolate/rotate chain ran.
    pub chain_applied: bool,
    /// Per volume: drawn rotation angle when the chain ran.
    pub angles: Vec<Option<f64>>,
    /// Per volume: drawn range shift when it was applied.
    pub shifts: Vec<Option<f64>>,
}

impl AugmentTrace {
    pub fn ops(&self) -> Vec<&'static str> {
        let mut ops = Vec::new();
        if self.chain_applied {
            ops.extend(["noise", "skip", "interpolate", "rotate"]);
        }
        if self.shifts.iter().any(Option::is_some) {
            ops.push("shift");
        }
        ops
    }

    /// `batch id \t ops \t angles \t shifts`; lists are comma separated, `-` marks
    /// a volume the op was not applied to.
    pub fn to_line(&self) -> String {
        let list = |v: &[Option<f64>]| {
            v.iter()
                .map(|x| x.map_or_else(|| "-".to_string(), |a| format!("{a:.6}")))
                .collect::<Vec<_>>()
                .join(",")
        };
        let ops = self.ops();
        format!(
            "{}\t{}\t{}\t{}",
            self.batch_id,
            if ops.is_empty() { "none".to_string() } else { ops.join(",") },
            list(&self.angles),
            list(&self.shifts)
        )
    }
}

/// Runs the full chain on one sample with sub-seeds split from `seed`.
/// Returns the augmented sample and the drawn rotation angle.
pub fn augment_chain(sample: &Sample, cfg: &AugmentConfig, seed: u64) -> Result<(Sample, f64)> {
    let (v, l) = (&sample.volume, sample.labels.as_ref());
    let v = gaussian_noise(v, cfg.noise_sigma, derive_seed(seed, 1))?;
    let (v, l) = if v.dims().nz >= 2 {
        let (v, l) = skip_slices(&v, l, cfg.skip_rate, derive_seed(seed, 2))?;
        interpolate_slices(&v, l.as_ref(), cfg.interp_insert_rate, derive_seed(seed, 3))?
    } else {
        (v, l.cloned())
    };
    let angle = rotation_angle(cfg.rot_max_deg, derive_seed(seed, 4))?;
    let (volume, labels) = rotate_by(&v, l.as_ref(), angle)?;
    Ok((Sample { volume, labels }, angle))
}

/// Applies the batch-level augmentation policy.
///
/// One Bernoulli draw with the mode's rate gates the chain for the whole batch;
/// each volume then gets its own range-shift draw. All randomness comes from a
/// single stream seeded by `seed`.
pub fn apply_policy(batch: &[Sample], cfg: &AugmentConfig, mode: Mode, batch_id: u64, seed: u64) -> Result<(Vec<Sample>, AugmentTrace)> {
    if batch.is_empty() {
        return Err(Error::EmptyInput("augmentation batch"));
    }
    cfg.validate()?;
    let mut rng = SeededRng::new(seed);
    let chain = rng.bernoulli(cfg.policy(mode));
    let mut trace = AugmentTrace {
        batch_id,
        chain_applied: chain,
        angles: Vec::with_capacity(batch.len()),
        shifts: Vec::with_capacity(batch.len()),
    };
    let draws: Vec<(bool, u64)> = batch
        .iter()
        .map(|_| {
            let do_shift = rng.bernoulli(cfg.shift_prob);
            (do_shift, rng.next_u64())
        })
        .collect();
    let results: Vec<(Sample, Option<f64>, Option<f64>)> = batch
        .par_iter()
        .zip(&draws)
        .map(|(sample, &(do_shift, sub))| {
            let (mut s, angle) = if chain {
                let (s, angle) = augment_chain(sample, cfg, sub)?;
                (s, Some(angle))
            } else {
                (sample.clone(), None)
            };
            let shift = if do_shift {
                let amount = draw_shift(cfg.shift_max, derive_seed(sub, 5));
                s.volume = shift_by(&s.volume, amount)?;
                Some(amount)
            } else {
                None
            };
            Ok((s, angle, shift))
        })
        .collect::<Result<_>>()?;
    let mut out = Vec::with_capacity(batch.len());
    for (s, angle, shift) in results {
        trace.angles.push(angle);
        trace.shifts.push(shift);
        out.push(s);
    }
    Ok((out, trace))
}
