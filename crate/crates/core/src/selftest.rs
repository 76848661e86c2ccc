//! Quick invariant suite runnable from the command line.

use std::path::PathBuf;
use std::time::Instant;

use crate::augment::{apply_policy, AugmentConfig, Mode};
use crate::dataset::{assign_folds, fold_sort_key, Manifest, Record};
use crate::error::Result;
use crate::format;
use crate::model::{featurize, PredictorParams, FEATURE_VERSION, NUM_FEATURES};
use crate::objective::{combined_with_grad, cross_entropy_with_grad, dice_score, tanimoto, LossConfig};
use crate::preprocess::{normalize, window, IntensityStats, WindowConfig};
use crate::rng::{derive_seed, SeededRng};
use crate::synth::{generate_phantom, PhantomConfig};
use crate::volume::{CtVolume, Dims, LabelVolume, ProbMap, Sample, Spacing, UnitState};

#[derive(Debug, Clone, PartialEq)]
pub struct CheckOutcome {
    pub name: &'static str,
    pub passed: bool,
    pub detail: String,
    pub seconds: f64,
}

type Check = fn(u64) -> Result<(bool, String)>;

const CHECKS: [(&str, Check); 8] = [
    ("format-round-trip", check_formats),
    ("loss-oracles", check_losses),
    ("loss-gradients", check_loss_gradients),
    ("dice-exhaustive", check_dice),
    ("fold-protocol", check_folds),
    ("window-normalize", check_preprocess),
    ("augment-policy", check_augment),
    ("model-gradients", check_model_gradients),
];

/// Runs every check; errors count as failures.
pub fn run_selftest(seed: u64) -> Vec<CheckOutcome> {
    CHECKS
        .iter()
        .enumerate()
        .map(|(i, (name, check))| {
            let start = Instant::now();
            let (passed, detail) = match check(derive_seed(seed, i as u64)) {
                Ok(r) => r,
                Err(e) => (false, format!("error: {e}")),
            };
            CheckOutcome {
                name,
                passed,
                detail,
                seconds: start.elapsed().as_secs_f64(),
            }
        })
        .collect()
}

fn random_probs(rng: &mut SeededRng, n: usize, c: usize) -> Vec<f64> {
    let mut p = vec![0.0; n * c];
    for i in 0..n {
        let draws: Vec<f64> = (0..c).map(|_| 0.05 + rng.unit()).collect();
        let s: f64 = draws.iter().sum();
        for (k, d) in draws.iter().enumerate() {
            p[k * n + i] = d / s;
        }
    }
    p
}

fn check_formats(seed: u64) -> Result<(bool, String)> {
    let mut rng = SeededRng::new(seed);
    for _ in 0..50 {
        let dims = Dims::new(1 + rng.below(6), 1 + rng.below(6), 1 + rng.below(4));
        let spacing = Spacing::new(
            rng.uniform(0.1, 3.0) as f32,
            rng.uniform(0.1, 3.0) as f32,
            rng.uniform(0.1, 6.0) as f32,
        );
        let hu: Vec<i16> = (0..dims.len()).map(|_| rng.uniform(-1024.0, 3071.0).round() as i16).collect();
        let v = CtVolume::from_hounsfield(dims, spacing, &hu)?;
        let l = LabelVolume::new(dims, spacing, 3, (0..dims.len()).map(|_| rng.below(3) as u8).collect())?;
        let p = ProbMap::from_f64(dims, spacing, 3, &random_probs(&mut rng, dims.len(), 3))?;
        let mut buf = Vec::new();
        format::write_volume(&v, &mut buf)?;
        let v2 = format::read_volume(&mut buf.as_slice())?;
        buf.clear();
        format::write_labels(&l, &mut buf)?;
        let l2 = format::read_labels(&mut buf.as_slice())?;
        buf.clear();
        format::write_probmap(&p, &mut buf)?;
        let p2 = format::read_probmap(&mut buf.as_slice())?;
        if v2 != v || l2 != l || p2 != p {
            return Ok((false, format!("round trip changed a {dims} object")));
        }
    }
    Ok((true, "50 volume/label/probmap triples".into()))
}

fn check_losses(_seed: u64) -> Result<(bool, String)> {
    // Two voxels, two classes, prediction (0.8, 0.3) for class 1, truth (1, 0).
    let pred = [0.2, 0.7, 0.8, 0.3];
    let truth = [1u8, 0];
    let s = 1e-5;
    let t = tanimoto(&pred, &truth, 2, s)?;
    let t0 = 1.0 - (0.7 + s) / (0.04 + 0.49 + 1.0 - 0.7 + s);
    let t1 = 1.0 - (0.8 + s) / (0.64 + 0.09 + 1.0 - 0.8 + s);
    let (ce, _) = cross_entropy_with_grad(&pred, &truth, 2, 1e-12)?;
    let ce_oracle = -(0.8f64.ln() + 0.7f64.ln()) / 2.0;
    let perfect = tanimoto(&[0.0, 1.0, 1.0, 0.0], &truth, 2, s)?;
    let err = [
        (t[0] - t0).abs(),
        (t[1] - t1).abs(),
        (ce - ce_oracle).abs(),
        perfect[0].abs(),
        perfect[1].abs(),
    ]
    .into_iter()
    .fold(0.0, f64::max);
    Ok((err < 1e-10, format!("max abs error {err:.2e}")))
}

/// `max |a - b| / max(max |a|, max |b|)` over two gradient vectors.
pub fn gradient_relative_error(analytic: &[f64], numeric: &[f64]) -> f64 {
    let diff = analytic.iter().zip(numeric).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
    let scale = analytic.iter().chain(numeric).map(|v| v.abs()).fold(0.0, f64::max);
    if scale == 0.0 {
        diff
    } else {
        diff / scale
    }
}

/// Central differences of `f` at `x` with step `eps`.
pub fn central_differences(x: &[f64], eps: f64, mut f: impl FnMut(&[f64]) -> Result<f64>) -> Result<Vec<f64>> {
    let mut probe = x.to_vec();
    let mut out = Vec::with_capacity(x.len());
    for k in 0..x.len() {
        probe[k] = x[k] + eps;
        let hi = f(&probe)?;
        probe[k] = x[k] - eps;
        let lo = f(&probe)?;
        probe[k] = x[k];
        out.push((hi - lo) / (2.0 * eps));
    }
    Ok(out)
}

fn check_loss_gradients(seed: u64) -> Result<(bool, String)> {
    let mut rng = SeededRng::new(seed);
    let cfg = LossConfig::default();
    let mut worst = 0.0f64;
    for _ in 0..10 {
        let c = 2 + rng.below(2);
        let n = 1 + rng.below(12);
        let pred = random_probs(&mut rng, n, c);
        let truth: Vec<u8> = (0..n).map(|_| rng.below(c) as u8).collect();
        let g = combined_with_grad(&pred, &truth, c, &cfg)?.grad;
        let fd = central_differences(&pred, 1e-6, |p| Ok(combined_with_grad(p, &truth, c, &cfg)?.value))?;
        worst = worst.max(gradient_relative_error(&g, &fd));
    }
    Ok((worst < 1e-4, format!("max relative error {worst:.2e}")))
}

fn check_dice(_seed: u64) -> Result<(bool, String)> {
    let dims = Dims::new(2, 2, 1);
    let mask = |bits: u8| LabelVolume::new(dims, Spacing::default(), 2, (0..4).map(|i| (bits >> i) & 1).collect());
    for a in 0..16u8 {
        for b in 0..16u8 {
            let both = (a & b).count_ones() as f64;
            let size = (a.count_ones() + b.count_ones()) as f64;
            let oracle = if size == 0.0 { 1.0 } else { 2.0 * both / size };
            if dice_score(&mask(a)?, &mask(b)?, 1)? != oracle {
                return Ok((false, format!("masks {a:04b} {b:04b}")));
            }
        }
    }
    Ok((true, "256 mask pairs".into()))
}

fn check_folds(seed: u64) -> Result<(bool, String)> {
    let mut rng = SeededRng::new(seed);
    let records: Vec<Record> = (0..23)
        .map(|i| Record {
            id: format!("v{i:02}"),
            volume_path: PathBuf::from(format!("v{i:02}.ctv")),
            label_path: None,
            slice_count: 8 + rng.below(40),
            slice_thickness: 0.5 + rng.below(40) as f64 / 10.0,
        })
        .collect();
    let manifest = Manifest::new(records.clone())?;
    let plan = assign_folds(&manifest, 5)?;
    let sizes: Vec<usize> = plan.folds().iter().map(Vec::len).collect();
    let balanced = sizes.iter().max().unwrap() - sizes.iter().min().unwrap() <= 1;
    let total: usize = sizes.iter().sum();
    let key = |id: &String| fold_sort_key(manifest.get(id).unwrap());
    let ordered = plan.folds().windows(2).all(|w| {
        let max = w[0].iter().map(key).max_by(|a, b| a.partial_cmp(b).unwrap());
        let min = w[1].iter().map(key).min_by(|a, b| a.partial_cmp(b).unwrap());
        max <= min
    });
    let mut reversed = records;
    reversed.reverse();
    let permuted = assign_folds(&Manifest::new(reversed)?, 5)? == plan;
    let ok = balanced && total == 23 && ordered && permuted;
    Ok((ok, format!("fold sizes {sizes:?}")))
}

fn check_preprocess(seed: u64) -> Result<(bool, String)> {
    let cfg = PhantomConfig {
        dims: Dims::new(32, 32, 8),
        ..PhantomConfig::default()
    };
    let (v, _) = generate_phantom(&cfg, seed)?;
    let w = window(&v, &WindowConfig::default())?;
    let (lo, hi) = (w.min_value(), w.max_value());
    let monotone = v
        .voxels()
        .iter()
        .zip(w.voxels())
        .zip(v.voxels().iter().zip(w.voxels()).skip(1))
        .all(|((a, wa), (b, wb))| (a <= b) == (wa <= wb) || wa == wb);
    let (mean, std, _) = crate::preprocess::pooled_mean_std([w.voxels()]);
    let z = normalize(&w, &IntensityStats::fixed(mean, std)?)?;
    let (zm, zs, _) = crate::preprocess::pooled_mean_std([z.voxels()]);
    let ok = monotone && lo <= hi && z.unit_state() == UnitState::Normalized && zm.abs() < 1e-3 && (zs - 1.0).abs() < 1e-3;
    Ok((ok, format!("normalized mean {zm:.1e}, std {zs:.6}")))
}

fn check_augment(seed: u64) -> Result<(bool, String)> {
    let cfg = PhantomConfig {
        dims: Dims::new(32, 32, 8),
        ..PhantomConfig::default()
    };
    let (v, l) = generate_phantom(&cfg, seed)?;
    let w = window(&v, &WindowConfig::default())?;
    let (mean, std, _) = crate::preprocess::pooled_mean_std([w.voxels()]);
    let batch = [Sample::new(normalize(&w, &IntensityStats::fixed(mean, std)?)?, Some(l))];
    let aug = AugmentConfig::default();
    let trials = 200u64;
    let mut applied = 0usize;
    for t in 0..trials {
        let (_, trace) = apply_policy(&batch, &aug, Mode::ThreeD, t, derive_seed(seed, t))?;
        applied += trace.chain_applied as usize;
    }
    let n = trials as f64;
    let rate = applied as f64 / n;
    let p = aug.policy(Mode::ThreeD);
    let sigma = (p * (1.0 - p) / n).sqrt();
    Ok((
        (rate - p).abs() <= 4.0 * sigma,
        format!("3D chain rate {rate:.3} over {trials} batches"),
    ))
}

fn check_model_gradients(seed: u64) -> Result<(bool, String)> {
    let cfg = PhantomConfig {
        dims: Dims::new(32, 32, 8),
        ..PhantomConfig::default()
    };
    let (v, l) = generate_phantom(&cfg, seed)?;
    let w = window(&v, &WindowConfig::default())?;
    let (mean, std, _) = crate::preprocess::pooled_mean_std([w.voxels()]);
    let x = featurize(&normalize(&w, &IntensityStats::fixed(mean, std)?)?)?;
    let loss = LossConfig::default();
    let p = PredictorParams::random(FEATURE_VERSION, 3, NUM_FEATURES, seed)?;
    let probs = p.forward(&x)?;
    let g = p.backward(&x, &probs, &combined_with_grad(&probs, l.labels(), 3, &loss)?.grad)?;
    let value = |theta: &[f64]| -> Result<f64> {
        let q = PredictorParams::new(
            FEATURE_VERSION,
            3,
            NUM_FEATURES,
            theta[..3 * NUM_FEATURES].to_vec(),
            theta[3 * NUM_FEATURES..].to_vec(),
        )?;
        Ok(combined_with_grad(&q.forward(&x)?, l.labels(), 3, &loss)?.value)
    };
    let fd = central_differences(p.theta(), 1e-6, value)?;
    let worst = gradient_relative_error(&g, &fd);
    Ok((worst < 1e-4, format!("max relative error {worst:.2e}")))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn selftest_passes() {
        for o in run_selftest(11) {
            assert!(o.passed, "{}: {}", o.name, o.detail);
        }
    }
}
