//! Deterministic synthetic CT phantoms with exact labels.
//!
//! A phantom is an elliptic body of soft tissue in air, a ring of rib segments
//! along the body boundary, and an organ ellipsoid (class 1) containing a tumor ellipsoid
//! (class 2). Labels depend on geometry only; Gaussian HU noise is added after.

use std::path::Path;

use crate::dataset::{Manifest, Record};
use crate::error::{Error, Result};
use crate::format;
use crate::rng::{derive_seed, SeededRng};
use crate::volume::{CtVolume, Dims, LabelVolume, ProbMap, Spacing, HU_MAX, HU_MIN};

/// Mean and per-voxel standard deviation of one tissue, in HU.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Tissue {
    pub mean: f64,
    pub std: f64,
}

impl Tissue {
    pub const fn new(mean: f64, std: f64) -> Self {
        Self { mean, std }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct PhantomConfig {
    pub dims: Dims,
    pub spacing: Spacing,
    pub air: Tissue,
    pub soft_tissue: Tissue,
    pub organ: Tissue,
    pub tumor: Tissue,
    pub bone: Tissue,
    /// Body ellipse semi-axes as fractions of `nx`, `ny`.
    pub body_axes: (f64, f64),
    /// Bone ring thickness in voxels.
    pub bone_thickness: f64,
    /// Number of bone segments (ribs) along the ring.
    pub rib_count: usize,
    /// Fraction of the ring covered by bone; 1 gives a closed ring.
    pub rib_coverage: f64,
    /// In-plane organ semi-axis range, as a fraction of `nx`/`ny`.
    pub organ_axes: (f64, f64),
    /// Through-plane organ semi-axis range, as a fraction of `nz`.
    pub organ_depth: (f64, f64),
    /// Tumor semi-axes as a fraction of the organ's.
    pub tumor_scale: (f64, f64),
    /// Additive Gaussian noise, HU.
    pub noise_std: f64,
}

impl Default for PhantomConfig {
    fn default() -> Self {
        Self {
            dims: Dims::new(64, 64, 24),
            spacing: Spacing::new(1.0, 1.0, 2.5),
            air: Tissue::new(-1000.0, 0.0),
            soft_tissue: Tissue::new(40.0, 0.0),
            organ: Tissue::new(100.0, 0.0),
            tumor: Tissue::new(55.0, 0.0),
            bone: Tissue::new(700.0, 0.0),
            body_axes: (0.42, 0.36),
            bone_thickness: 1.0,
            rib_count: 8,
            rib_coverage: 0.2,
            organ_axes: (0.12, 0.18),
            organ_depth: (0.3, 0.42),
            tumor_scale: (0.35, 0.5),
            noise_std: 12.0,
        }
    }
}

impl PhantomConfig {
    pub fn validate(&self) -> Result<()> {
        for t in [self.air, self.soft_tissue, self.organ, self.tumor, self.bone] {
            if !(t.std >= 0.0) || !(HU_MIN as f64..=HU_MAX as f64).contains(&t.mean) {
                return Err(Error::Config(format!("invalid tissue {t:?}")));
            }
        }
        if !(self.noise_std >= 0.0) {
            return Err(Error::Config("noise_std must be >= 0".into()));
        }
        let ok_range = |(lo, hi): (f64, f64)| lo > 0.0 && lo <= hi;
        if !(ok_range(self.organ_axes) && ok_range(self.organ_depth) && ok_range(self.tumor_scale)) {
            return Err(Error::Config("size ranges must satisfy 0 < lo <= hi".into()));
        }
        if self.rib_count == 0 || !(self.rib_coverage > 0.0 && self.rib_coverage <= 1.0) {
            return Err(Error::Config("ribs need a count >= 1 and coverage in (0, 1]".into()));
        }
        if !(self.bone_thickness > 0.0) {
            return Err(Error::Config("bone thickness must be > 0".into()));
        }
        if self.tumor_scale.1 >= 0.9 {
            return Err(Error::Config("tumor scale must stay below 0.9 of the organ".into()));
        }
        Ok(())
    }
}

/// Axis-aligned ellipsoid in voxel coordinates.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Ellipsoid {
    pub center: [f64; 3],
    pub axes: [f64; 3],
}

impl Ellipsoid {
    /// `sum ((p - c) / a)^2`; inside when < 1... or equal.
    pub fn level(&self, p: [f64; 3]) -> f64 {
        (0..3).map(|i| ((p[i] - self.center[i]) / self.axes[i]).powi(2)).sum()
    }

    pub fn contains(&self, p: [f64; 3]) -> bool {
        self.level(p) <= 1.0
    }
}

/// Geometry drawn for one phantom.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PhantomGeometry {
    pub body: (f64, f64),
    /// Rib pattern offset, in fractions of one rib period.
    pub rib_phase: f64,
    pub organ: Ellipsoid,
    pub tumor: Ellipsoid,
}

fn draw_geometry(cfg: &PhantomConfig, rng: &mut SeededRng) -> Result<PhantomGeometry> {
    let d = cfg.dims;
    if d.nx < 8 || d.ny < 8 {
        return Err(Error::Geometry(format!("in-plane size {}x{} below 8", d.nx, d.ny)));
    }
    let (cx, cy) = ((d.nx - 1) as f64 / 2.0, (d.ny - 1) as f64 / 2.0);
    let body = (cfg.body_axes.0 * d.nx as f64, cfg.body_axes.1 * d.ny as f64);
    let inner = (body.0 - cfg.bone_thickness - 1.0, body.1 - cfg.bone_thickness - 1.0);
    if inner.0 <= 1.0 || inner.1 <= 1.0 {
        return Err(Error::Geometry("body too small for the bone ring".into()));
    }
    let uniform = |rng: &mut SeededRng, (lo, hi): (f64, f64)| if lo == hi { lo } else { rng.uniform(lo, hi) };
    let rib_phase = rng.unit();

    for _ in 0..64 {
        let axes = [
            uniform(rng, cfg.organ_axes) * d.nx as f64,
            uniform(rng, cfg.organ_axes) * d.ny as f64,
            (uniform(rng, cfg.organ_depth) * d.nz as f64).max(0.75),
        ];
        let center = [
            cx + rng.uniform(-0.12, 0.12) * d.nx as f64,
            cy + rng.uniform(-0.1, 0.1) * d.ny as f64,
            (d.nz - 1) as f64 / 2.0 + rng.uniform(-0.08, 0.08) * d.nz as f64,
        ];
        let organ = Ellipsoid { center, axes };
        // Organ cross-section must clear the bone ring.
        let fits = (0..72).all(|k| {
            let t = k as f64 * std::f64::consts::TAU / 72.0;
            let px = center[0] + axes[0] * t.cos() - cx;
            let py = center[1] + axes[1] * t.sin() - cy;
            (px / inner.0).powi(2) + (py / inner.1).powi(2) < 1.0
        });
        if !fits {
            continue;
        }
        let s_max = cfg.tumor_scale.1;
        let scale = [
            uniform(rng, cfg.tumor_scale),
            uniform(rng, cfg.tumor_scale),
            uniform(rng, cfg.tumor_scale),
        ];
        // Offset in organ-normalized coordinates; d + s_max < 1 keeps the tumor strictly inside.
        let reach = (0.9 - s_max).max(0.0);
        let offset = rng.uniform(0.0, reach);
        let (theta, phi) = (rng.uniform(0.0, std::f64::consts::TAU), rng.uniform(-1.0, 1.0));
        let r = (1.0 - phi * phi).sqrt();
        let dir = [r * theta.cos(), r * theta.sin(), phi];
        let tumor = Ellipsoid {
            center: [0, 1, 2].map(|i| center[i] + offset * dir[i] * axes[i]),
            axes: [0, 1, 2].map(|i| scale[i] * axes[i]),
        };
        return Ok(PhantomGeometry {
            body,
            rib_phase,
            organ,
            tumor,
        });
    }
    Err(Error::Geometry(format!("no organ placement fits inside the body for {d}")))
}

/// Generates one phantom volume and its exact labels.
pub fn generate_phantom(cfg: &PhantomConfig, seed: u64) -> Result<(CtVolume, LabelVolume)> {
    let (v, l, _) = generate_phantom_with_geometry(cfg, seed)?;
    Ok((v, l))
}

/// [`generate_phantom`], also returning the drawn geometry.
pub fn generate_phantom_with_geometry(cfg: &PhantomConfig, seed: u64) -> Result<(CtVolume, LabelVolume, PhantomGeometry)> {
    cfg.validate()?;
    let d = cfg.dims;
    let mut geo_rng = SeededRng::new(derive_seed(seed, 0));
    let geo = draw_geometry(cfg, &mut geo_rng)?;
    let mut noise = SeededRng::new(derive_seed(seed, 1));
    let (cx, cy) = ((d.nx - 1) as f64 / 2.0, (d.ny - 1) as f64 / 2.0);
    let inner = (geo.body.0 - cfg.bone_thickness, geo.body.1 - cfg.bone_thickness);
    let on_rib = |u: f64, v: f64| {
        let turn = v.atan2(u) / std::f64::consts::TAU + 0.5;
        (turn * cfg.rib_count as f64 + geo.rib_phase).fract() < cfg.rib_coverage
    };

    let mut voxels = Vec::with_capacity(d.len());
    let mut labels = Vec::with_capacity(d.len());
    for z in 0..d.nz {
        for y in 0..d.ny {
            for x in 0..d.nx {
                let p = [x as f64, y as f64, z as f64];
                let (dx, dy) = (p[0] - cx, p[1] - cy);
                let outer_level = (dx / geo.body.0).powi(2) + (dy / geo.body.1).powi(2);
                let inner_level = (dx / inner.0).powi(2) + (dy / inner.1).powi(2);
                let (tissue, label) = if geo.tumor.contains(p) {
                    (cfg.tumor, 2)
                } else if geo.organ.contains(p) {
                    (cfg.organ, 1)
                } else if outer_level > 1.0 {
                    (cfg.air, 0)
                } else if inner_level > 1.0 && on_rib(dx / geo.body.0, dy / geo.body.1) {
                    (cfg.bone, 0)
                } else {
                    (cfg.soft_tissue, 0)
                };
                let sd = (tissue.std.powi(2) + cfg.noise_std.powi(2)).sqrt();
                let hu = if sd > 0.0 {
                    tissue.mean + sd * noise.standard_normal()
                } else {
                    tissue.mean
                };
                voxels.push(hu.round().clamp(HU_MIN as f64, HU_MAX as f64) as f32);
                labels.push(label);
            }
        }
    }
    if !labels.contains(&2) {
        return Err(Error::Geometry(format!("tumor covers no voxel centers in {d}")));
    }
    let volume = CtVolume::new(d, cfg.spacing, crate::volume::UnitState::Hounsfield, voxels)?;
    let labels = LabelVolume::new(d, cfg.spacing, 3, labels)?;
    Ok((volume, labels, geo))
}

/// Ranges a generated dataset is drawn from.
#[derive(Debug, Clone, PartialEq)]
pub struct DatasetSpec {
    pub n: usize,
    /// Square in-plane size range, inclusive.
    pub size: (usize, usize),
    /// Slice count range, inclusive.
    pub slices: (usize, usize),
    /// Slice thickness range in mm.
    pub thickness: (f64, f64),
    pub seed: u64,
    pub phantom: PhantomConfig,
}

impl Default for DatasetSpec {
    fn default() -> Self {
        Self {
            n: 20,
            size: (64, 64),
            slices: (16, 32),
            thickness: (1.0, 5.0),
            seed: 0,
            phantom: PhantomConfig::default(),
        }
    }
}

/// One generated manifest entry with its data.
#[derive(Debug, Clone, PartialEq)]
pub struct GeneratedCase {
    pub id: String,
    pub volume: CtVolume,
    pub labels: LabelVolume,
}

/// Generates the cases of a dataset in memory.
pub fn generate_cases(spec: &DatasetSpec) -> Result<Vec<GeneratedCase>> {
    if spec.n == 0 {
        return Err(Error::Config("dataset size must be >= 1".into()));
    }
    let ok = spec.size.0 >= 8
        && spec.size.0 <= spec.size.1
        && spec.slices.0 >= 1
        && spec.slices.0 <= spec.slices.1
        && spec.thickness.0 > 0.0
        && spec.thickness.0 <= spec.thickness.1;
    if !ok {
        return Err(Error::Config("dataset ranges must be nonempty and positive".into()));
    }
    let mut rng = SeededRng::new(spec.seed);
    let draw_int = |(lo, hi): (usize, usize), rng: &mut SeededRng| lo + rng.below(hi - lo + 1);
    (0..spec.n)
        .map(|i| {
            let size = draw_int(spec.size, &mut rng);
            let nz = draw_int(spec.slices, &mut rng);
            let thick = if spec.thickness.0 == spec.thickness.1 {
                spec.thickness.0
            } else {
                rng.uniform(spec.thickness.0, spec.thickness.1)
            };
            // Tenth-of-a-millimeter thickness so the manifest value is exact.
            let thick = ((thick * 10.0).round() / 10.0).max(0.1) as f32;
            let cfg = PhantomConfig {
                dims: Dims::new(size, size, nz),
                spacing: Spacing::new(spec.phantom.spacing.sx, spec.phantom.spacing.sy, thick),
                ..spec.phantom.clone()
            };
            let (volume, labels) = generate_phantom(&cfg, derive_seed(spec.seed, 1000 + i as u64))?;
            Ok(GeneratedCase {
                id: format!("phantom_{i:03}"),
                volume,
                labels,
            })
        })
        .collect()
}

/// Manifest record describing a generated case stored under `dir`.
pub fn case_record(case: &GeneratedCase, dir: &Path) -> Record {
    Record {
        id: case.id.clone(),
        volume_path: dir.join(format!("{}.ctv", case.id)),
        label_path: Some(dir.join(format!("{}.lbl", case.id))),
        slice_count: case.volume.dims().nz,
        slice_thickness: case.volume.spacing().sz as f64,
    }
}

/// Writes every case as `CTV1`/`LBL1` files plus `manifest.tsv` into `dir`.
pub fn generate_dataset(spec: &DatasetSpec, dir: impl AsRef<Path>) -> Result<Manifest> {
    let dir = dir.as_ref();
    std::fs::create_dir_all(dir).map_err(|e| Error::io(0, e))?;
    let cases = generate_cases(spec)?;
    let mut records = Vec::with_capacity(cases.len());
    for case in &cases {
        let rec = case_record(case, dir);
        format::save_volume(&case.volume, &rec.volume_path)?;
        format::save_labels(&case.labels, rec.label_path.as_ref().expect("generated cases carry labels"))?;
        records.push(rec);
    }
    let manifest = Manifest::new(records)?;
    // Paths in the file are relative to the manifest's directory.
    let relative = Manifest::new(
        manifest
            .records()
            .iter()
            .map(|r| Record {
                volume_path: r.volume_path.strip_prefix(dir).unwrap_or(&r.volume_path).to_path_buf(),
                label_path: r.label_path.as_ref().map(|p| p.strip_prefix(dir).unwrap_or(p).to_path_buf()),
                ..r.clone()
            })
            .collect(),
    )?;
    std::fs::write(dir.join("manifest.tsv"), relative.to_text()).map_err(|e| Error::io(0, e))?;
    Ok(manifest)
}

/// Confident probability map agreeing with `labels`: the true class gets
/// `confidence`, the rest share the remainder evenly.
pub fn oracle_probmap(labels: &LabelVolume, confidence: f64) -> Result<ProbMap> {
    let c_n = labels.num_classes() as usize;
    if c_n < 2 || !(confidence > 0.0 && confidence <= 1.0) {
        return Err(Error::Config(format!("oracle confidence {confidence} with {c_n} classes")));
    }
    let n = labels.dims().len();
    let other = (1.0 - confidence) / (c_n - 1) as f64;
    let mut probs = vec![other; n * c_n];
    for (i, &l) in labels.labels().iter().enumerate() {
        probs[l as usize * n + i] = confidence;
    }
    ProbMap::from_f64(labels.dims(), labels.spacing(), labels.num_classes(), &probs)
}

/// Mask of the voxels inside the foreground bounding box whose x coordinate
/// lies in the fraction `[lo, hi)` of the box width.
pub fn foreground_band(labels: &LabelVolume, lo: f64, hi: f64) -> Result<Vec<bool>> {
    let d = labels.dims();
    let (mut min, mut max) = ([usize::MAX; 3], [0usize; 3]);
    for z in 0..d.nz {
        for y in 0..d.ny {
            for x in 0..d.nx {
                if labels.get(x, y, z) != 0 {
                    for (k, v) in [x, y, z].into_iter().enumerate() {
                        min[k] = min[k].min(v);
                        max[k] = max[k].max(v);
                    }
                }
            }
        }
    }
    if min[0] == usize::MAX {
        return Err(Error::NoForeground);
    }
    let width = (max[0] + 1 - min[0]) as f64;
    let x_lo = min[0] as f64 + lo * width;
    let x_hi = min[0] as f64 + hi * width;
    let mut mask = vec![false; d.len()];
    for z in min[2]..=max[2] {
        for y in min[1]..=max[1] {
            for x in min[0]..=max[0] {
                let xf = x as f64;
                mask[d.index(x, y, z)] = xf >= x_lo && xf < x_hi;
            }
        }
    }
    Ok(mask)
}

/// Replaces the probabilities of masked voxels by seeded uniform draws from the simplex.
pub fn corrupt_probmap(map: &ProbMap, mask: &[bool], seed: u64) -> Result<ProbMap> {
    let n = map.dims().len();
    if mask.len() != n {
        return Err(Error::Shape(format!("mask of {} voxels for {n}", mask.len())));
    }
    let c_n = map.num_classes() as usize;
    let mut probs = map.to_f64();
    let mut rng = SeededRng::new(seed);
    let mut draw = vec![0.0; c_n];
    for i in (0..n).filter(|&i| mask[i]) {
        for d in draw.iter_mut() {
            *d = -(1.0 - rng.unit()).ln();
        }
        let total: f64 = draw.iter().sum();
        for (c, d) in draw.iter().enumerate() {
            probs[c * n + i] = d / total;
        }
    }
    ProbMap::from_f64(map.dims(), map.spacing(), map.num_classes(), &probs)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn noise_free_organ_is_exact() {
        let cfg = PhantomConfig {
            noise_std: 0.0,
            ..PhantomConfig::default()
        };
        let (v, l) = generate_phantom(&cfg, 4).unwrap();
        for (hu, &lab) in v.voxels().iter().zip(l.labels()) {
            match lab {
                1 => assert_eq!(*hu, 100.0),
                2 => assert_eq!(*hu, 55.0),
                _ => {}
            }
        }
    }

    #[test]
    fn deterministic_per_seed() {
        let cfg = PhantomConfig::default();
        assert_eq!(generate_phantom(&cfg, 3).unwrap(), generate_phantom(&cfg, 3).unwrap());
        assert_ne!(generate_phantom(&cfg, 3).unwrap().0, generate_phantom(&cfg, 4).unwrap().0);
    }

    #[test]
    fn labels_do_not_depend_on_noise() {
        let a = PhantomConfig::default();
        let b = PhantomConfig {
            noise_std: 40.0,
            ..a.clone()
        };
        assert_eq!(generate_phantom(&a, 8).unwrap().1, generate_phantom(&b, 8).unwrap().1);
    }

    #[test]
    fn class_prevalence_ordering() {
        for seed in 0..5 {
            let (_, l) = generate_phantom(&PhantomConfig::default(), seed).unwrap();
            let h = l.histogram();
            assert!(h[0] > h[1] && h[1] > h[2], "{h:?}");
        }
    }

    #[test]
    fn tiny_dims_are_infeasible() {
        let cfg = PhantomConfig {
            dims: Dims::new(4, 4, 4),
            ..PhantomConfig::default()
        };
        assert!(matches!(generate_phantom(&cfg, 0), Err(Error::Geometry(_))));
    }
}
