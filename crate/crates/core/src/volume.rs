//! Volumetric data model: intensity volumes, label volumes and probability maps.
//!
//! Voxels are stored x-fastest, then y, then z, so every slice is a contiguous
//! `nx * ny` run of the buffer.

use crate::error::{Error, Result};

/// Lowest storable Hounsfield value.
pub const HU_MIN: f32 = -1024.0;
/// Highest storable Hounsfield value.
pub const HU_MAX: f32 = 3071.0;
/// Per-voxel tolerance on probability vectors summing to one.
pub const PROB_SUM_TOLERANCE: f64 = 1e-5;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Dims {
    pub nx: usize,
    pub ny: usize,
    pub nz: usize,
}

impl Dims {
    pub const fn new(nx: usize, ny: usize, nz: usize) -> Self {
        Self { nx, ny, nz }
    }

    pub const fn len(&self) -> usize {
        self.nx * self.ny * self.nz
    }

    pub const fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub const fn slice_len(&self) -> usize {
        self.nx * self.ny
    }

    pub const fn index(&self, x: usize, y: usize, z: usize) -> usize {
        (z * self.ny + y) * self.nx + x
    }

    pub const fn with_nz(&self, nz: usize) -> Self {
        Self { nz, ..*self }
    }

    fn validate(&self) -> Result<()> {
        if self.nx == 0 || self.ny == 0 || self.nz == 0 {
            return Err(Error::Shape(format!("dims must be >= 1, got {self}")));
        }
        Ok(())
    }
}

impl std::fmt::Display for Dims {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "{}x{}x{}", self.nx, self.ny, self.nz)
    }
}

/// Voxel spacing in millimeters; `sz` is the slice thickness.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Spacing {
    pub sx: f32,
    pub sy: f32,
    pub sz: f32,
}

impl Spacing {
    pub const fn new(sx: f32, sy: f32, sz: f32) -> Self {
        Self { sx, sy, sz }
    }

    fn validate(&self) -> Result<()> {
        let ok = |v: f32| v.is_finite() && v > 0.0;
        if !(ok(self.sx) && ok(self.sy) && ok(self.sz)) {
            return Err(Error::Shape(format!(
                "spacing must be positive, got ({}, {}, {})",
                self.sx, self.sy, self.sz
            )));
        }
        Ok(())
    }
}

impl Default for Spacing {
    fn default() -> Self {
        Self::new(1.0, 1.0, 1.0)
    }
}

/// Which units the intensities of a [`CtVolume`] are in.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
#[repr(u8)]
pub enum UnitState {
    Hounsfield = 0,
    Windowed = 1,
    Normalized = 2,
}

impl UnitState {
    pub fn from_code(code: u8) -> Option<Self> {
        match code {
            0 => Some(Self::Hounsfield),
            1 => Some(Self::Windowed),
            2 => Some(Self::Normalized),
            _ => None,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Self::Hounsfield => "HOUNSFIELD",
            Self::Windowed => "WINDOWED",
            Self::Normalized => "NORMALIZED",
        }
    }
}

pub(crate) fn expect_state(found: UnitState, expected: UnitState) -> Result<()> {
    if found != expected {
        return Err(Error::UnitState {
            expected: expected.name(),
            found: found.name(),
        });
    }
    Ok(())
}

/// A CT intensity volume.
#[derive(Debug, Clone, PartialEq)]
pub struct CtVolume {
    dims: Dims,
    spacing: Spacing,
    unit_state: UnitState,
    voxels: Vec<f32>,
}

impl CtVolume {
    /// Validating constructor. Hounsfield volumes must hold integral values in
    /// `[HU_MIN, HU_MAX]`; other states must be finite.
    pub fn new(dims: Dims, spacing: Spacing, unit_state: UnitState, voxels: Vec<f32>) -> Result<Self> {
        dims.validate()?;
        spacing.validate()?;
        if voxels.len() != dims.len() {
            return Err(Error::Shape(format!(
                "voxel buffer has {} entries, dims {dims} need {}",
                voxels.len(),
                dims.len()
            )));
        }
        match unit_state {
            UnitState::Hounsfield => {
                if let Some((index, &value)) = voxels
                    .iter()
                    .enumerate()
                    .find(|(_, v)| !(**v >= HU_MIN && **v <= HU_MAX && v.fract() == 0.0))
                {
                    return Err(Error::Range { index, value });
                }
            }
            _ => {
                if let Some(i) = voxels.iter().position(|v| !v.is_finite()) {
                    return Err(Error::Shape(format!("non-finite intensity at voxel {i}")));
                }
            }
        }
        Ok(Self {
            dims,
            spacing,
            unit_state,
            voxels,
        })
    }

    pub fn from_hounsfield(dims: Dims, spacing: Spacing, values: &[i16]) -> Result<Self> {
        Self::new(dims, spacing, UnitState::Hounsfield, values.iter().map(|&v| v as f32).collect())
    }

    /// Builds a volume that the caller guarantees is valid.
    pub(crate) fn from_parts(dims: Dims, spacing: Spacing, unit_state: UnitState, voxels: Vec<f32>) -> Self {
        debug_assert_eq!(voxels.len(), dims.len());
        Self {
            dims,
            spacing,
            unit_state,
            voxels,
        }
    }

    pub fn dims(&self) -> Dims {
        self.dims
    }

    pub fn spacing(&self) -> Spacing {
        self.spacing
    }

    pub fn unit_state(&self) -> UnitState {
        self.unit_state
    }

    pub fn voxels(&self) -> &[f32] {
        &self.voxels
    }

    pub fn into_voxels(self) -> Vec<f32> {
        self.voxels
    }

    pub fn slice(&self, z: usize) -> &[f32] {
        let n = self.dims.slice_len();
        &self.voxels[z * n..(z + 1) * n]
    }

    pub fn get(&self, x: usize, y: usize, z: usize) -> f32 {
        self.voxels[self.dims.index(x, y, z)]
    }

    pub fn min_value(&self) -> f32 {
        self.voxels.iter().copied().fold(f32::INFINITY, f32::min)
    }

    pub fn max_value(&self) -> f32 {
        self.voxels.iter().copied().fold(f32::NEG_INFINITY, f32::max)
    }

    /// New volume made of the listed slices, in the given order.
    pub fn select_z(&self, indices: &[usize]) -> Self {
        let n = self.dims.slice_len();
        let mut voxels = Vec::with_capacity(indices.len() * n);
        for &z in indices {
            voxels.extend_from_slice(self.slice(z));
        }
        Self::from_parts(self.dims.with_nz(indices.len()), self.spacing, self.unit_state, voxels)
    }

    pub(crate) fn with_voxels(&self, unit_state: UnitState, voxels: Vec<f32>) -> Self {
        Self::from_parts(self.dims, self.spacing, unit_state, voxels)
    }

    pub(crate) fn with_geometry(&self, dims: Dims, spacing: Spacing, voxels: Vec<f32>) -> Self {
        Self::from_parts(dims, spacing, self.unit_state, voxels)
    }
}

/// Per-voxel class ids co-registered with a [`CtVolume`].
#[derive(Debug, Clone, PartialEq)]
pub struct LabelVolume {
    dims: Dims,
    spacing: Spacing,
    num_classes: u8,
    labels: Vec<u8>,
}

impl LabelVolume {
    pub fn new(dims: Dims, spacing: Spacing, num_classes: u8, labels: Vec<u8>) -> Result<Self> {
        dims.validate()?;
        spacing.validate()?;
        if num_classes < 2 {
            return Err(Error::Shape(format!("num_classes must be >= 2, got {num_classes}")));
        }
        if labels.len() != dims.len() {
            return Err(Error::Shape(format!(
                "label buffer has {} entries, dims {dims} need {}",
                labels.len(),
                dims.len()
            )));
        }
        if let Some(i) = labels.iter().position(|&l| l >= num_classes) {
            return Err(Error::Shape(format!(
                "label {} at voxel {i} not below num_classes {num_classes}",
                labels[i]
            )));
        }
        Ok(Self {
            dims,
            spacing,
            num_classes,
            labels,
        })
    }

    pub(crate) fn from_parts(dims: Dims, spacing: Spacing, num_classes: u8, labels: Vec<u8>) -> Self {
        debug_assert_eq!(labels.len(), dims.len());
        Self {
            dims,
            spacing,
            num_classes,
            labels,
        }
    }

    pub fn dims(&self) -> Dims {
        self.dims
    }

    pub fn spacing(&self) -> Spacing {
        self.spacing
    }

    pub fn num_classes(&self) -> u8 {
        self.num_classes
    }

    pub fn labels(&self) -> &[u8] {
        &self.labels
    }

    pub fn slice(&self, z: usize) -> &[u8] {
        let n = self.dims.slice_len();
        &self.labels[z * n..(z + 1) * n]
    }

    pub fn get(&self, x: usize, y: usize, z: usize) -> u8 {
        self.labels[self.dims.index(x, y, z)]
    }

    pub fn select_z(&self, indices: &[usize]) -> Self {
        let n = self.dims.slice_len();
        let mut labels = Vec::with_capacity(indices.len() * n);
        for &z in indices {
            labels.extend_from_slice(self.slice(z));
        }
        Self::from_parts(self.dims.with_nz(indices.len()), self.spacing, self.num_classes, labels)
    }

    pub(crate) fn with_geometry(&self, dims: Dims, spacing: Spacing, labels: Vec<u8>) -> Self {
        Self::from_parts(dims, spacing, self.num_classes, labels)
    }

    /// Counts of each class id.
    pub fn histogram(&self) -> Vec<usize> {
        let mut counts = vec![0; self.num_classes as usize];
        for &l in &self.labels {
            counts[l as usize] += 1;
        }
        counts
    }

    /// Same geometry, different class count; labels must stay below it.
    pub fn with_num_classes(&self, num_classes: u8) -> Result<Self> {
        Self::new(self.dims, self.spacing, num_classes, self.labels.clone())
    }

    pub fn matches(&self, dims: Dims) -> Result<()> {
        if self.dims != dims {
            return Err(Error::Shape(format!("label dims {} != volume dims {dims}", self.dims)));
        }
        Ok(())
    }
}

/// Per-voxel class probabilities, stored class-major.
#[derive(Debug, Clone, PartialEq)]
pub struct ProbMap {
    dims: Dims,
    spacing: Spacing,
    num_classes: u8,
    probs: Vec<f32>,
}

impl ProbMap {
    /// Validates entries in `[0, 1]` and per-voxel sums within [`PROB_SUM_TOLERANCE`].
    pub fn new(dims: Dims, spacing: Spacing, num_classes: u8, probs: Vec<f32>) -> Result<Self> {
        dims.validate()?;
        spacing.validate()?;
        if num_classes < 1 {
            return Err(Error::Shape("num_classes must be >= 1".into()));
        }
        let n = dims.len();
        if probs.len() != n * num_classes as usize {
            return Err(Error::Shape(format!(
                "probability buffer has {} entries, expected {}",
                probs.len(),
                n * num_classes as usize
            )));
        }
        for i in 0..n {
            let mut sum = 0.0f64;
            for c in 0..num_classes as usize {
                let p = probs[c * n + i];
                if !(0.0..=1.0).contains(&p) {
                    return Err(Error::Normalization { index: i, sum: p as f64 });
                }
                sum += p as f64;
            }
            if (sum - 1.0).abs() > PROB_SUM_TOLERANCE {
                return Err(Error::Normalization { index: i, sum });
            }
        }
        Ok(Self {
            dims,
            spacing,
            num_classes,
            probs,
        })
    }

    /// Builds a map from double-precision class-major probabilities, renormalizing
    /// each voxel after rounding to single precision.
    pub fn from_f64(dims: Dims, spacing: Spacing, num_classes: u8, probs: &[f64]) -> Result<Self> {
        let n = dims.len();
        let c = num_classes as usize;
        if probs.len() != n * c {
            return Err(Error::Shape(format!(
                "probability buffer has {} entries, expected {}",
                probs.len(),
                n * c
            )));
        }
        let mut out = vec![0f32; n * c];
        for i in 0..n {
            let sum: f64 = (0..c).map(|k| probs[k * n + i]).sum();
            for k in 0..c {
                out[k * n + i] = (probs[k * n + i] / sum) as f32;
            }
        }
        Self::new(dims, spacing, num_classes, out)
    }

    pub fn dims(&self) -> Dims {
        self.dims
    }

    pub fn spacing(&self) -> Spacing {
        self.spacing
    }

    pub fn num_classes(&self) -> u8 {
        self.num_classes
    }

    pub fn probs(&self) -> &[f32] {
        &self.probs
    }

    /// Probabilities of class `c` for every voxel.
    pub fn class(&self, c: usize) -> &[f32] {
        let n = self.dims.len();
        &self.probs[c * n..(c + 1) * n]
    }

    pub fn get(&self, voxel: usize, class: usize) -> f32 {
        self.probs[class * self.dims.len() + voxel]
    }

    /// Class-major double-precision copy.
    pub fn to_f64(&self) -> Vec<f64> {
        self.probs.iter().map(|&p| p as f64).collect()
    }

    /// Per-voxel argmax; ties go to the lower class id.
    pub fn argmax(&self) -> LabelVolume {
        let n = self.dims.len();
        let c = self.num_classes as usize;
        let labels = (0..n)
            .map(|i| {
                let mut best = 0;
                for k in 1..c {
                    if self.probs[k * n + i] > self.probs[best * n + i] {
                        best = k;
                    }
                }
                best as u8
            })
            .collect();
        LabelVolume::from_parts(self.dims, self.spacing, self.num_classes.max(2), labels)
    }

    /// One-hot map of a label volume.
    pub fn one_hot(labels: &LabelVolume) -> Self {
        let n = labels.dims().len();
        let c = labels.num_classes() as usize;
        let mut probs = vec![0f32; n * c];
        for (i, &l) in labels.labels().iter().enumerate() {
            probs[l as usize * n + i] = 1.0;
        }
        Self {
            dims: labels.dims(),
            spacing: labels.spacing(),
            num_classes: labels.num_classes(),
            probs,
        }
    }
}

/// A volume with optional co-registered labels.
#[derive(Debug, Clone, PartialEq)]
pub struct Sample {
    pub volume: CtVolume,
    pub labels: Option<LabelVolume>,
}

impl Sample {
    pub fn new(volume: CtVolume, labels: Option<LabelVolume>) -> Self {
        Self { volume, labels }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn index_is_x_fastest() {
        let d = Dims::new(3, 4, 5);
        assert_eq!(d.index(1, 0, 0), 1);
        assert_eq!(d.index(0, 1, 0), 3);
        assert_eq!(d.index(0, 0, 1), 12);
    }

    #[test]
    fn hounsfield_range_enforced() {
        let d = Dims::new(2, 1, 1);
        let err = CtVolume::new(d, Spacing::default(), UnitState::Hounsfield, vec![0.0, 3072.0]);
        assert!(matches!(err, Err(Error::Range { index: 1, .. })));
        let err = CtVolume::new(d, Spacing::default(), UnitState::Hounsfield, vec![0.5, 1.0]);
        assert!(matches!(err, Err(Error::Range { index: 0, .. })));
        assert!(CtVolume::new(d, Spacing::default(), UnitState::Normalized, vec![0.5, 9999.0]).is_ok());
    }

    #[test]
    fn zero_dims_and_bad_spacing_rejected() {
        assert!(CtVolume::new(Dims::new(0, 1, 1), Spacing::default(), UnitState::Windowed, vec![]).is_err());
        assert!(CtVolume::new(Dims::new(1, 1, 1), Spacing::new(1.0, 0.0, 1.0), UnitState::Windowed, vec![0.0]).is_err());
    }

    #[test]
    fn labels_must_be_below_class_count() {
        let d = Dims::new(2, 1, 1);
        assert!(LabelVolume::new(d, Spacing::default(), 3, vec![0, 3]).is_err());
        assert!(LabelVolume::new(d, Spacing::default(), 1, vec![0, 0]).is_err());
        assert!(LabelVolume::new(d, Spacing::default(), 3, vec![0, 2]).is_ok());
    }

    #[test]
    fn probmap_normalization_checked() {
        let d = Dims::new(1, 1, 1);
        assert!(matches!(
            ProbMap::new(d, Spacing::default(), 2, vec![1.0, 0.5]),
            Err(Error::Normalization { .. })
        ));
        assert!(ProbMap::new(d, Spacing::default(), 3, vec![0.2, 0.3, 0.5]).is_ok());
    }

    #[test]
    fn argmax_breaks_ties_low() {
        let d = Dims::new(2, 1, 1);
        let p = ProbMap::new(d, Spacing::default(), 2, vec![0.5, 0.2, 0.5, 0.8]).unwrap();
        assert_eq!(p.argmax().labels(), &[0, 1]);
    }

    #[test]
    fn select_z_copies_slices() {
        let d = Dims::new(1, 1, 3);
        let v = CtVolume::new(d, Spacing::default(), UnitState::Windowed, vec![1.0, 2.0, 3.0]).unwrap();
        let s = v.select_z(&[2, 0, 0]);
        assert_eq!(s.voxels(), &[3.0, 1.0, 1.0]);
        assert_eq!(s.dims().nz, 3);
    }
}
