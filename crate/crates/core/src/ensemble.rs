//! Member selection and combination of member probability maps.
//!
//! Three combiners are available: a (weighted) mean and a stacker, which is a
//! per-voxel multinomial logistic regression over the concatenated member
//! probabilities. Binary members are embedded into the multiclass layout as
//! `(p_bg, p_fg, 0, ...)` and only ever serve as stacker inputs.

use std::fmt;
use std::path::{Path, PathBuf};

use rayon::prelude::*;

use crate::augment::Mode;
use crate::error::{Error, Result};
use crate::model::{argmax_classes, load_params, FeatureMatrix, Predictor, PredictorParams, Target, FEATURE_VERSION};
use crate::objective::{adam_step, combined_with_grad, AdamConfig, AdamState, LossConfig};
use crate::rng::SeededRng;
use crate::volume::{CtVolume, LabelVolume, ProbMap};

/// Feature spec version of stacker parameters.
pub const STACKER_FEATURE_VERSION: u16 = 2;
pub const DEFAULT_TOP_N: usize = 5;

/// A candidate model and its validation score.
#[derive(Debug, Clone, PartialEq)]
pub struct Candidate {
    pub id: String,
    pub score: f64,
}

impl Candidate {
    pub fn new(id: impl Into<String>, score: f64) -> Self {
        Self { id: id.into(), score }
    }
}

/// The `n` best candidates by descending score; ties go to the smaller id.
pub fn select_top_n(candidates: &[Candidate], n: usize) -> Result<Vec<Candidate>> {
    if candidates.is_empty() {
        return Err(Error::EmptyInput("ensemble candidates"));
    }
    if let Some(c) = candidates.iter().find(|c| !c.score.is_finite()) {
        return Err(Error::Weight(format!("candidate {:?} has non-finite score {}", c.id, c.score)));
    }
    let mut sorted = candidates.to_vec();
    sorted.sort_by(|a, b| b.score.total_cmp(&a.score).then_with(|| a.id.cmp(&b.id)));
    sorted.truncate(n);
    Ok(sorted)
}

fn check_compatible(maps: &[ProbMap]) -> Result<()> {
    let first = maps.first().ok_or(Error::EmptyInput("probability maps"))?;
    for m in &maps[1..] {
        if m.dims() != first.dims() || m.num_classes() != first.num_classes() {
            return Err(Error::Shape(format!(
                "member map {} with {} classes differs from {} with {} classes",
                m.dims(),
                m.num_classes(),
                first.dims(),
                first.num_classes()
            )));
        }
    }
    Ok(())
}

/// Per-voxel weighted mean of member maps, renormalized.
pub fn combine_mean(maps: &[ProbMap], weights: &[f64]) -> Result<ProbMap> {
    check_compatible(maps)?;
    if weights.len() != maps.len() {
        return Err(Error::Weight(format!("{} weights for {} members", weights.len(), maps.len())));
    }
    if weights.iter().any(|w| !w.is_finite() || *w < 0.0) {
        return Err(Error::Weight("weights must be finite and >= 0".into()));
    }
    let total: f64 = weights.iter().sum();
    if !(total > 0.0) {
        return Err(Error::Weight("weights sum to zero".into()));
    }
    let first = &maps[0];
    let mut acc = vec![0.0f64; first.probs().len()];
    for (m, &w) in maps.iter().zip(weights) {
        if w == 0.0 {
            continue;
        }
        for (a, &p) in acc.iter_mut().zip(m.probs()) {
            *a += w * p as f64;
        }
    }
    for a in &mut acc {
        *a /= total;
    }
    ProbMap::from_f64(first.dims(), first.spacing(), first.num_classes(), &acc)
}

/// Embeds a two-class (background, foreground) map into `num_classes` channels
/// as `(p_bg, p_fg, 0, ...)`.
pub fn map_binary_members(map: &ProbMap, num_classes: u8) -> Result<ProbMap> {
    if map.num_classes() != 2 {
        return Err(Error::Shape(format!("binary member has {} classes", map.num_classes())));
    }
    if num_classes < 2 {
        return Err(Error::Shape("target class count must be >= 2".into()));
    }
    let n = map.dims().len();
    let mut probs = vec![0.0f32; n * num_classes as usize];
    probs[..2 * n].copy_from_slice(map.probs());
    ProbMap::new(map.dims(), map.spacing(), num_classes, probs)
}

/// Concatenated member probabilities per voxel: `[m0c0, m0c1, .., m1c0, ..]`.
pub fn stack_features(maps: &[ProbMap]) -> Result<FeatureMatrix> {
    check_compatible(maps)?;
    let c_n = maps[0].num_classes() as usize;
    let n = maps[0].dims().len();
    let f_n = maps.len() * c_n;
    let mut data = vec![0.0; n * f_n];
    for (m, map) in maps.iter().enumerate() {
        for c in 0..c_n {
            for (i, &p) in map.class(c).iter().enumerate() {
                data[i * f_n + m * c_n + c] = p as f64;
            }
        }
    }
    FeatureMatrix::new(f_n, n, data)
}

/// Half-width of the seeded uniform perturbation added to the initial stacker.
pub const STACKER_INIT_JITTER: f64 = 1e-3;

/// Identity-block stacker: class `c` sums the members' class-`c` probabilities,
/// so its argmax matches the unweighted mean.
pub fn initial_stacker(num_members: usize, num_classes: usize) -> Result<PredictorParams> {
    if num_members == 0 {
        return Err(Error::EmptyInput("stacker members"));
    }
    let f_n = num_members * num_classes;
    let mut w = vec![0.0; num_classes * f_n];
    for c in 0..num_classes {
        for m in 0..num_members {
            w[c * f_n + m * num_classes + c] = 1.0;
        }
    }
    PredictorParams::new(STACKER_FEATURE_VERSION, num_classes, f_n, w, vec![0.0; num_classes])
}

/// [`initial_stacker`] with weights jittered by [`STACKER_INIT_JITTER`].
pub fn seeded_stacker(num_members: usize, num_classes: usize, seed: u64) -> Result<PredictorParams> {
    let mut p = initial_stacker(num_members, num_classes)?;
    let mut rng = SeededRng::new(seed);
    let n_w = p.weights().len();
    for w in &mut p.theta_mut()[..n_w] {
        *w += rng.uniform(-STACKER_INIT_JITTER, STACKER_INIT_JITTER);
    }
    Ok(p)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StackerConfig {
    pub epochs: usize,
    pub seed: u64,
    pub loss: LossConfig,
    pub adam: AdamConfig,
}

impl Default for StackerConfig {
    fn default() -> Self {
        Self {
            epochs: 200,
            seed: 0,
            loss: LossConfig::default(),
            adam: AdamConfig::default(),
        }
    }
}

/// Fits the stacker on member maps of held-out volumes.
///
/// `member_maps[v][m]` is member `m`'s map for volume `v`, already mapped to
/// the target class count. Training is full-batch over every voxel; the seed
/// only enters through the initial jitter.
pub fn train_stacker(member_maps: &[Vec<ProbMap>], truth: &[LabelVolume], cfg: &StackerConfig) -> Result<PredictorParams> {
    if member_maps.is_empty() || member_maps.len() != truth.len() {
        return Err(Error::Shape(format!(
            "{} member map sets for {} label volumes",
            member_maps.len(),
            truth.len()
        )));
    }
    let m_n = member_maps[0].len();
    let c_n = truth[0].num_classes() as usize;
    let mut parts = Vec::with_capacity(member_maps.len());
    let mut labels = Vec::new();
    for (maps, t) in member_maps.iter().zip(truth) {
        if maps.len() != m_n {
            return Err(Error::Shape("every volume needs the same members".into()));
        }
        if maps.iter().any(|m| m.num_classes() as usize != c_n || m.dims() != t.dims()) {
            return Err(Error::Shape("member maps must match the labels' dims and class count".into()));
        }
        parts.push(stack_features(maps)?);
        labels.extend_from_slice(t.labels());
    }
    let x = FeatureMatrix::concat(&parts.iter().collect::<Vec<_>>())?;
    let mut params = seeded_stacker(m_n, c_n, cfg.seed)?;
    let mut adam = AdamState::new(params.theta().len(), cfg.adam);
    for epoch in 0..cfg.epochs {
        let probs = params.forward(&x)?;
        let loss = combined_with_grad(&probs, &labels, c_n, &cfg.loss)?;
        if !loss.value.is_finite() {
            return Err(Error::Divergence { epoch, batch: 0 });
        }
        let grad = params.backward(&x, &probs, &loss.grad)?;
        if grad.iter().any(|g| !g.is_finite()) {
            return Err(Error::Divergence { epoch, batch: 0 });
        }
        adam_step(params.theta_mut(), &grad, &mut adam)?;
    }
    Ok(params)
}

/// Applies trained stacker parameters to member maps of one volume.
pub fn apply_stacker(params: &PredictorParams, maps: &[ProbMap]) -> Result<ProbMap> {
    check_compatible(maps)?;
    if params.feature_version() != STACKER_FEATURE_VERSION {
        return Err(Error::Shape(format!(
            "parameters use feature spec {}, stacker needs {STACKER_FEATURE_VERSION}",
            params.feature_version()
        )));
    }
    if params.num_classes() != maps[0].num_classes() as usize {
        return Err(Error::Shape("stacker class count differs from the members'".into()));
    }
    let x = stack_features(maps)?;
    params.predict_features(&x, maps[0].dims(), maps[0].spacing())
}

/// Role of an ensemble member, written `<target>-<mode>`, e.g. `binary-3d`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct MemberTag {
    pub target: Target,
    pub mode: Mode,
}

impl MemberTag {
    pub fn parse(s: &str) -> Option<Self> {
        let (t, m) = s.split_once('-')?;
        let target = match t.to_ascii_lowercase().as_str() {
            "binary" => Target::Binary,
            "multiclass" => Target::Multiclass,
            _ => return None,
        };
        Some(Self {
            target,
            mode: Mode::parse(m)?,
        })
    }
}

impl fmt::Display for MemberTag {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}-{}", self.target.name(), self.mode.name().to_ascii_lowercase())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum CombinerKind {
    Mean,
    /// Mean weighted by member validation scores.
    Weighted,
    Stacker,
}

impl CombinerKind {
    pub fn name(self) -> &'static str {
        match self {
            CombinerKind::Mean => "mean",
            CombinerKind::Weighted => "weighted",
            CombinerKind::Stacker => "stacker",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        match s.to_ascii_lowercase().as_str() {
            "mean" => Some(CombinerKind::Mean),
            "weighted" => Some(CombinerKind::Weighted),
            "stacker" => Some(CombinerKind::Stacker),
            _ => None,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct MemberSpec {
    pub path: PathBuf,
    pub tag: MemberTag,
    pub score: f64,
}

/// Ensemble description file contents.
#[derive(Debug, Clone, PartialEq)]
pub struct EnsembleSpec {
    pub members: Vec<MemberSpec>,
    pub combiner: CombinerKind,
    pub stacker: Option<PathBuf>,
}

impl EnsembleSpec {
    pub fn validate(&self) -> Result<()> {
        if self.members.is_empty() {
            return Err(Error::EmptyInput("ensemble members"));
        }
        if let Some(m) = self.members.iter().find(|m| !m.score.is_finite()) {
            return Err(Error::Weight(format!("member {} has non-finite score", m.path.display())));
        }
        if self.combiner == CombinerKind::Stacker && self.stacker.is_none() {
            return Err(Error::Config("stacker combiner needs a stacker line".into()));
        }
        if self.combiner != CombinerKind::Stacker && self.members.iter().any(|m| m.tag.target == Target::Binary) {
            return Err(Error::Config("binary members can only feed a stacker".into()));
        }
        Ok(())
    }

    /// Parses and validates an ensemble file.
    pub fn parse(text: &str, base: &Path) -> Result<Self> {
        let spec = Self::parse_unchecked(text, base)?;
        spec.validate()?;
        Ok(spec)
    }

    /// Parses `member <path> <mode> <score>`, `combiner <kind>` and
    /// `stacker <path>` lines without validating the result; relative paths
    /// are resolved against `base`.
    pub fn parse_unchecked(text: &str, base: &Path) -> Result<Self> {
        let mut members = Vec::new();
        let mut combiner = None;
        let mut stacker = None;
        let resolve = |p: &str| {
            let p = PathBuf::from(p);
            if p.is_relative() {
                base.join(p)
            } else {
                p
            }
        };
        for (i, raw) in text.lines().enumerate() {
            let line = raw.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let err = |message: String| Error::Parse { line: i + 1, message };
            let fields: Vec<&str> = line.split_whitespace().collect();
            match fields.as_slice() {
                ["member", path, tag, score] => {
                    let tag = MemberTag::parse(tag).ok_or_else(|| err(format!("unknown member mode {tag:?}")))?;
                    let score: f64 = score.parse().map_err(|_| err(format!("bad score {score:?}")))?;
                    members.push(MemberSpec {
                        path: resolve(path),
                        tag,
                        score,
                    });
                }
                ["combiner", kind] => {
                    combiner = Some(CombinerKind::parse(kind).ok_or_else(|| err(format!("unknown combiner {kind:?}")))?);
                }
                ["stacker", path] => stacker = Some(resolve(path)),
                _ => return Err(err(format!("unrecognized line {line:?}"))),
            }
        }
        Ok(Self {
            members,
            combiner: combiner.unwrap_or(CombinerKind::Mean),
            stacker,
        })
    }

    pub fn to_text(&self) -> String {
        let mut s = String::new();
        for m in &self.members {
            s.push_str(&format!("member {} {} {}\n", m.path.display(), m.tag, m.score));
        }
        s.push_str(&format!("combiner {}\n", self.combiner.name()));
        if let Some(p) = &self.stacker {
            s.push_str(&format!("stacker {}\n", p.display()));
        }
        s
    }
}

pub fn load_ensemble_spec(path: impl AsRef<Path>) -> Result<EnsembleSpec> {
    let path = path.as_ref();
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(0, e))?;
    EnsembleSpec::parse(&text, path.parent().unwrap_or(Path::new(".")))
}

/// How member maps are fused.
#[derive(Debug, Clone, PartialEq)]
pub enum Combiner {
    Mean,
    Weighted(Vec<f64>),
    Stacker(PredictorParams),
}

/// A loaded ensemble.
pub struct Ensemble {
    pub members: Vec<(Box<dyn Predictor>, MemberTag)>,
    pub combiner: Combiner,
    pub num_classes: u8,
}

impl Ensemble {
    /// Loads member and stacker parameters named by a spec.
    pub fn load(spec: &EnsembleSpec) -> Result<Self> {
        spec.validate()?;
        let mut members: Vec<(Box<dyn Predictor>, MemberTag)> = Vec::with_capacity(spec.members.len());
        for m in &spec.members {
            let p = load_params(&m.path)?;
            if p.feature_version() != FEATURE_VERSION {
                return Err(Error::Shape(format!("member {} is not a voxel model", m.path.display())));
            }
            members.push((Box::new(p), m.tag));
        }
        let num_classes = members.iter().map(|(p, _)| p.num_classes()).max().unwrap_or(2);
        let combiner = match spec.combiner {
            CombinerKind::Mean => Combiner::Mean,
            CombinerKind::Weighted => Combiner::Weighted(spec.members.iter().map(|m| m.score).collect()),
            CombinerKind::Stacker => {
                let path = spec.stacker.as_ref().expect("validated");
                Combiner::Stacker(load_params(path)?)
            }
        };
        Ok(Self {
            members,
            combiner,
            num_classes,
        })
    }

    /// Every member's map for a preprocessed volume, binary members embedded.
    pub fn member_maps(&self, volume: &CtVolume) -> Result<Vec<ProbMap>> {
        self.members
            .par_iter()
            .map(|(p, tag)| {
                let map = p.predict(volume)?;
                if map.dims() != volume.dims() {
                    return Err(Error::Shape(format!("member produced {} for {}", map.dims(), volume.dims())));
                }
                match tag.target {
                    Target::Binary if self.num_classes > 2 => map_binary_members(&map, self.num_classes),
                    _ => Ok(map),
                }
            })
            .collect()
    }

    /// Combined map and its argmax labels (ties go to the lower class).
    pub fn predict(&self, volume: &CtVolume) -> Result<(ProbMap, LabelVolume)> {
        let maps = self.member_maps(volume)?;
        let fused = combine(&self.combiner, &maps)?;
        let labels = fused.argmax();
        Ok((fused, labels))
    }
}

pub fn combine(combiner: &Combiner, maps: &[ProbMap]) -> Result<ProbMap> {
    match combiner {
        Combiner::Mean => combine_mean(maps, &vec![1.0; maps.len()]),
        Combiner::Weighted(w) => combine_mean(maps, w),
        Combiner::Stacker(p) => apply_stacker(p, maps),
    }
}

/// Loads the ensemble named by `spec` and runs it on a preprocessed volume.
pub fn stacked_predict(spec: &EnsembleSpec, volume: &CtVolume) -> Result<(ProbMap, LabelVolume)> {
    Ensemble::load(spec)?.predict(volume)
}

/// Argmax of class-major `f64` probabilities as a label volume shaped like `like`.
pub fn argmax_like(probs: &[f64], num_classes: u8, like: &LabelVolume) -> Result<LabelVolume> {
    LabelVolume::new(
        like.dims(),
        like.spacing(),
        num_classes,
        argmax_classes(probs, num_classes as usize),
    )
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::volume::{Dims, Spacing};

    fn map(probs: &[f32], classes: u8) -> ProbMap {
        let n = probs.len() / classes as usize;
        ProbMap::new(Dims::new(n, 1, 1), Spacing::default(), classes, probs.to_vec()).unwrap()
    }

    #[test]
    fn top_n_examples() {
        let c = vec![Candidate::new("b", 0.8), Candidate::new("a", 0.9), Candidate::new("c", 0.7)];
        let ids = |v: Vec<Candidate>| v.into_iter().map(|c| c.id).collect::<Vec<_>>();
        assert_eq!(ids(select_top_n(&c, 2).unwrap()), ["a", "b"]);
        assert_eq!(ids(select_top_n(&c, 10).unwrap()).len(), 3);
        let tie = vec![Candidate::new("z", 0.5), Candidate::new("y", 0.5), Candidate::new("x", 0.9)];
        assert_eq!(ids(select_top_n(&tie, 2).unwrap()), ["x", "y"]);
    }

    #[test]
    fn mean_examples() {
        let a = map(&[0.8, 0.2], 2);
        let b = map(&[0.2, 0.8], 2);
        let m = combine_mean(&[a.clone(), b.clone()], &[1.0, 1.0]).unwrap();
        assert!(m.probs().iter().all(|&p| (p - 0.5).abs() < 1e-7));
        assert_eq!(combine_mean(&[a.clone(), b.clone()], &[1.0, 0.0]).unwrap(), a);
        assert_eq!(combine_mean(&[a.clone(), a.clone()], &[0.3, 0.7]).unwrap().argmax(), a.argmax());
        assert!(matches!(combine_mean(&[a.clone(), b], &[0.0, 0.0]), Err(Error::Weight(_))));
        assert!(matches!(
            combine_mean(&[a, map(&[1.0, 0.0, 0.0], 3)], &[1.0, 1.0]),
            Err(Error::Shape(_))
        ));
    }

    #[test]
    fn binary_embedding() {
        // Voxels with p_fg = 1, 0, 0.3.
        let m = map_binary_members(&map(&[0.0, 1.0, 0.7, 1.0, 0.0, 0.3], 2), 3).unwrap();
        let at = |i: usize| (0..3).map(|c| m.get(i, c)).collect::<Vec<_>>();
        assert_eq!(at(0), [0.0, 1.0, 0.0]);
        assert_eq!(at(1), [1.0, 0.0, 0.0]);
        assert!((at(2)[0] - 0.7).abs() < 1e-7 && (at(2)[1] - 0.3).abs() < 1e-7 && at(2)[2] == 0.0);
        assert!(matches!(map_binary_members(&map(&[1.0, 0.0, 0.0], 3), 3), Err(Error::Shape(_))));
    }

    #[test]
    fn argmax_tie_goes_low() {
        assert_eq!(map(&[0.5, 0.5], 2).argmax().labels(), [0]);
    }

    #[test]
    fn untrained_stacker_follows_mean_argmax() {
        let a = map(&[0.6, 0.3, 0.1, 0.1, 0.3, 0.6, 0.3, 0.4, 0.3], 3);
        let b = map(&[0.2, 0.1, 0.6, 0.5, 0.1, 0.3, 0.3, 0.8, 0.1], 3);
        let p = initial_stacker(2, 3).unwrap();
        let stacked = apply_stacker(&p, &[a.clone(), b.clone()]).unwrap();
        assert_eq!(stacked.argmax(), combine_mean(&[a, b], &[1.0, 1.0]).unwrap().argmax());
    }

    #[test]
    fn spec_round_trip() {
        let text = "# members\nmember m1.prm binary-3d 0.91\nmember /abs/m2.prm multiclass-2d 0.88\ncombiner stacker\nstacker s.prm\n";
        let spec = EnsembleSpec::parse(text, Path::new("/base")).unwrap();
        assert_eq!(spec.members[0].path, Path::new("/base/m1.prm"));
        assert_eq!(spec.members[1].tag.to_string(), "multiclass-2d");
        assert_eq!(spec.combiner, CombinerKind::Stacker);
        assert_eq!(EnsembleSpec::parse(&spec.to_text(), Path::new("/x")).unwrap(), spec);
        assert!(matches!(
            EnsembleSpec::parse("member a b", Path::new(".")),
            Err(Error::Parse { line: 1, .. })
        ));
        assert!(EnsembleSpec::parse("combiner mean\n", Path::new(".")).is_err());
    }
}
