//! Training objective and evaluation metrics.
//!
//! Loss functions work on class-major `f64` probability buffers (`pred[c * n + i]`
//! is the probability of class `c` at voxel `i`) together with integer labels,
//! which are treated as one-hot targets. All arithmetic is double precision.

use crate::error::{Error, Result};
use crate::preprocess::CompensatedSum;
use crate::volume::{LabelVolume, ProbMap};

/// How per-class Tanimoto losses are reduced to a scalar.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ClassReduction {
    /// Unweighted mean over every class, background included.
    AllClasses,
    /// Unweighted mean over classes `1..C`.
    ForegroundOnly,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossConfig {
    /// Weight of the Tanimoto term.
    pub alpha: f64,
    /// Weight of the cross-entropy term.
    pub beta: f64,
    pub smooth: f64,
    /// Lower clamp applied inside the cross-entropy logarithm.
    pub prob_floor: f64,
    pub reduction: ClassReduction,
}

impl Default for LossConfig {
    fn default() -> Self {
        Self {
            alpha: 0.6,
            beta: 0.4,
            smooth: 1e-5,
            prob_floor: 1e-12,
            reduction: ClassReduction::AllClasses,
        }
    }
}

impl LossConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.alpha + self.beta > 0.0) || self.alpha < 0.0 || self.beta < 0.0 {
            return Err(Error::Config(format!(
                "loss weights must be >= 0 with a positive sum, got ({}, {})",
                self.alpha, self.beta
            )));
        }
        if !(self.smooth > 0.0) {
            return Err(Error::Config(format!("smooth must be > 0, got {}", self.smooth)));
        }
        if !(self.prob_floor > 0.0 && self.prob_floor <= 1e-3) {
            return Err(Error::Config(format!("prob_floor {} outside (0, 1e-3]", self.prob_floor)));
        }
        Ok(())
    }
}

fn check_dense(pred: &[f64], truth: &[u8], num_classes: usize) -> Result<usize> {
    if num_classes == 0 {
        return Err(Error::Shape("num_classes must be >= 1".into()));
    }
    let n = truth.len();
    if pred.len() != n * num_classes {
        return Err(Error::Shape(format!(
            "prediction has {} entries, expected {} voxels x {num_classes} classes",
            pred.len(),
            n
        )));
    }
    if let Some(&l) = truth.iter().find(|&&l| l as usize >= num_classes) {
        return Err(Error::Shape(format!("label {l} not below class count {num_classes}")));
    }
    Ok(n)
}

fn check_maps(pred: &ProbMap, truth: &LabelVolume) -> Result<()> {
    if pred.dims() != truth.dims() {
        return Err(Error::Shape(format!(
            "prediction dims {} != truth dims {}",
            pred.dims(),
            truth.dims()
        )));
    }
    Ok(())
}

/// Sufficient statistics of one class: `<p, y>`, `|p|^2` and `|y|^2`.
fn class_sums(pred_c: &[f64], truth: &[u8], class: u8) -> (f64, f64, f64) {
    let (mut dot, mut pp, mut yy) = (0.0, 0.0, 0.0);
    for (&p, &t) in pred_c.iter().zip(truth) {
        pp += p * p;
        if t == class {
            dot += p;
            yy += 1.0;
        }
    }
    (dot, pp, yy)
}

fn tanimoto_from_sums(dot: f64, pp: f64, yy: f64, smooth: f64) -> f64 {
    1.0 - (dot + smooth) / (pp + yy - dot + smooth)
}

/// Per-class Tanimoto losses `1 - (<p,y> + s) / (|p|^2 + |y|^2 - <p,y> + s)`.
pub fn tanimoto(pred: &[f64], truth: &[u8], num_classes: usize, smooth: f64) -> Result<Vec<f64>> {
    let n = check_dense(pred, truth, num_classes)?;
    Ok((0..num_classes)
        .map(|c| {
            let (dot, pp, yy) = class_sums(&pred[c * n..(c + 1) * n], truth, c as u8);
            tanimoto_from_sums(dot, pp, yy, smooth)
        })
        .collect())
}

fn reduced_classes(num_classes: usize, reduction: ClassReduction) -> Result<std::ops::Range<usize>> {
    let r = match reduction {
        ClassReduction::AllClasses => 0..num_classes,
        ClassReduction::ForegroundOnly => 1..num_classes,
    };
    if r.is_empty() {
        return Err(Error::Config("class reduction selects no classes".into()));
    }
    Ok(r)
}

/// Tanimoto loss reduced over classes.
#[derive(Debug, Clone, PartialEq)]
pub struct TanimotoLoss {
    pub per_class: Vec<f64>,
    pub value: f64,
}

/// Reduced Tanimoto loss and its gradient with respect to every prediction entry.
pub fn tanimoto_with_grad(
    pred: &[f64],
    truth: &[u8],
    num_classes: usize,
    smooth: f64,
    reduction: ClassReduction,
) -> Result<(TanimotoLoss, Vec<f64>)> {
    let n = check_dense(pred, truth, num_classes)?;
    let classes = reduced_classes(num_classes, reduction)?;
    let scale = 1.0 / classes.len() as f64;
    let mut grad = vec![0.0; pred.len()];
    let mut per_class = Vec::with_capacity(num_classes);
    let mut value = 0.0;
    for c in 0..num_classes {
        let pc = &pred[c * n..(c + 1) * n];
        let (dot, pp, yy) = class_sums(pc, truth, c as u8);
        let l = tanimoto_from_sums(dot, pp, yy, smooth);
        per_class.push(l);
        if !classes.contains(&c) {
            continue;
        }
        value += scale * l;
        // L = 1 - N/D, N = dot + s, D = pp + yy - dot + s:
        // dL/dp_i = -(y_i D - N (2 p_i - y_i)) / D^2
        let num = dot + smooth;
        let den = pp + yy - dot + smooth;
        let inv = scale / (den * den);
        for (i, (&p, &t)) in pc.iter().zip(truth).enumerate() {
            let y = if t == c as u8 { 1.0 } else { 0.0 };
            grad[c * n + i] = -(y * den - num * (2.0 * p - y)) * inv;
        }
    }
    Ok((TanimotoLoss { per_class, value }, grad))
}

/// Tanimoto loss of a probability map against integer labels, reduced by the
/// unweighted mean over all classes.
pub fn tanimoto_loss(pred: &ProbMap, truth: &LabelVolume, smooth: f64) -> Result<TanimotoLoss> {
    check_maps(pred, truth)?;
    let per_class = tanimoto(&pred.to_f64(), truth.labels(), pred.num_classes() as usize, smooth)?;
    let value = per_class.iter().sum::<f64>() / per_class.len() as f64;
    Ok(TanimotoLoss { per_class, value })
}

/// Gradient of [`tanimoto_loss`] with respect to the class-major probabilities.
pub fn tanimoto_grad(pred: &ProbMap, truth: &LabelVolume, smooth: f64) -> Result<Vec<f64>> {
    check_maps(pred, truth)?;
    let (_, g) = tanimoto_with_grad(
        &pred.to_f64(),
        truth.labels(),
        pred.num_classes() as usize,
        smooth,
        ClassReduction::AllClasses,
    )?;
    Ok(g)
}

/// Mean over voxels of `-ln(max(p_true, floor))`, with its gradient. Entries
/// clamped by the floor get zero gradient.
pub fn cross_entropy_with_grad(pred: &[f64], truth: &[u8], num_classes: usize, floor: f64) -> Result<(f64, Vec<f64>)> {
    let n = check_dense(pred, truth, num_classes)?;
    if n == 0 {
        return Err(Error::EmptyInput("cross-entropy over no voxels"));
    }
    let inv_n = 1.0 / n as f64;
    let mut sum = CompensatedSum::default();
    let mut grad = vec![0.0; pred.len()];
    for (i, &t) in truth.iter().enumerate() {
        let k = t as usize * n + i;
        let p = pred[k];
        if p > floor {
            sum.add(-p.ln());
            grad[k] = -inv_n / p;
        } else {
            sum.add(-floor.ln());
        }
    }
    Ok((sum.value() * inv_n, grad))
}

pub fn cross_entropy(pred: &ProbMap, truth: &LabelVolume, floor: f64) -> Result<(f64, Vec<f64>)> {
    check_maps(pred, truth)?;
    cross_entropy_with_grad(&pred.to_f64(), truth.labels(), pred.num_classes() as usize, floor)
}

/// `alpha * L_tanimoto + beta * L_ce` with its gradient.
#[derive(Debug, Clone, PartialEq)]
pub struct CombinedLoss {
    pub value: f64,
    pub tanimoto: TanimotoLoss,
    pub cross_entropy: f64,
    pub grad: Vec<f64>,
}

pub fn combined_with_grad(pred: &[f64], truth: &[u8], num_classes: usize, cfg: &LossConfig) -> Result<CombinedLoss> {
    cfg.validate()?;
    let (tan, g_tan) = tanimoto_with_grad(pred, truth, num_classes, cfg.smooth, cfg.reduction)?;
    let (ce, g_ce) = cross_entropy_with_grad(pred, truth, num_classes, cfg.prob_floor)?;
    let grad = g_tan.iter().zip(&g_ce).map(|(a, b)| cfg.alpha * a + cfg.beta * b).collect();
    Ok(CombinedLoss {
        value: cfg.alpha * tan.value + cfg.beta * ce,
        tanimoto: tan,
        cross_entropy: ce,
        grad,
    })
}

/// Value of [`combined_with_grad`] without building the gradient.
pub fn combined_value(pred: &[f64], truth: &[u8], num_classes: usize, cfg: &LossConfig) -> Result<f64> {
    cfg.validate()?;
    let n = check_dense(pred, truth, num_classes)?;
    if n == 0 {
        return Err(Error::EmptyInput("cross-entropy over no voxels"));
    }
    let classes = reduced_classes(num_classes, cfg.reduction)?;
    let scale = 1.0 / classes.len() as f64;
    let mut tan = 0.0;
    for c in classes {
        let (dot, pp, yy) = class_sums(&pred[c * n..(c + 1) * n], truth, c as u8);
        tan += scale * tanimoto_from_sums(dot, pp, yy, cfg.smooth);
    }
    let mut sum = CompensatedSum::default();
    for (i, &t) in truth.iter().enumerate() {
        let p = pred[t as usize * n + i];
        sum.add(-p.max(cfg.prob_floor).ln());
    }
    Ok(cfg.alpha * tan + cfg.beta * (sum.value() * (1.0 / n as f64)))
}

pub fn combined_loss(pred: &ProbMap, truth: &LabelVolume, cfg: &LossConfig) -> Result<CombinedLoss> {
    check_maps(pred, truth)?;
    combined_with_grad(&pred.to_f64(), truth.labels(), pred.num_classes() as usize, cfg)
}

/// What to do when both masks of a class are empty.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum EmptyMask {
    /// A correctly predicted absent class scores 1.
    One,
    /// The class is left out of aggregation.
    Exclude,
}

/// How the "total" score of a multi-class segmentation is formed.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TotalDice {
    /// Binary Dice of the union of all foreground classes.
    PooledForeground,
    /// Mean of the per-class foreground Dice scores.
    MeanForeground,
}

impl TotalDice {
    pub fn name(self) -> &'static str {
        match self {
            Self::PooledForeground => "pooled-foreground",
            Self::MeanForeground => "mean-foreground",
        }
    }
}

fn dice_counts(pred: impl Iterator<Item = bool>, truth: impl Iterator<Item = bool>) -> (usize, usize, usize) {
    let (mut both, mut a, mut b) = (0, 0, 0);
    for (p, t) in pred.zip(truth) {
        a += p as usize;
        b += t as usize;
        both += (p && t) as usize;
    }
    (both, a, b)
}

fn dice_from_counts(both: usize, a: usize, b: usize, empty: EmptyMask) -> Option<f64> {
    if a + b == 0 {
        return match empty {
            EmptyMask::One => Some(1.0),
            EmptyMask::Exclude => None,
        };
    }
    Some(2.0 * both as f64 / (a + b) as f64)
}

fn check_labels(pred: &LabelVolume, truth: &LabelVolume) -> Result<()> {
    if pred.dims() != truth.dims() {
        return Err(Error::Shape(format!("dims {} != {}", pred.dims(), truth.dims())));
    }
    Ok(())
}

/// Dice of the binary masks of `class`, `None` when both are empty and
/// `empty` is [`EmptyMask::Exclude`].
pub fn dice_with(pred: &LabelVolume, truth: &LabelVolume, class: u8, empty: EmptyMask) -> Result<Option<f64>> {
    check_labels(pred, truth)?;
    let (both, a, b) = dice_counts(
        pred.labels().iter().map(|&l| l == class),
        truth.labels().iter().map(|&l| l == class),
    );
    Ok(dice_from_counts(both, a, b, empty))
}

/// `2 |P ∩ T| / (|P| + |T|)` for the masks of `class`; 1 when both are empty.
pub fn dice_score(pred: &LabelVolume, truth: &LabelVolume, class: u8) -> Result<f64> {
    Ok(dice_with(pred, truth, class, EmptyMask::One)?.unwrap_or(1.0))
}

/// Dice of the pooled foreground (`label != 0`) masks.
pub fn foreground_dice(pred: &LabelVolume, truth: &LabelVolume) -> Result<f64> {
    check_labels(pred, truth)?;
    let (both, a, b) = dice_counts(pred.labels().iter().map(|&l| l != 0), truth.labels().iter().map(|&l| l != 0));
    Ok(dice_from_counts(both, a, b, EmptyMask::One).unwrap_or(1.0))
}

pub fn total_dice(pred: &LabelVolume, truth: &LabelVolume, kind: TotalDice) -> Result<f64> {
    match kind {
        TotalDice::PooledForeground => foreground_dice(pred, truth),
        TotalDice::MeanForeground => {
            let classes = truth.num_classes().max(pred.num_classes());
            let scores = (1..classes).map(|c| dice_score(pred, truth, c)).collect::<Result<Vec<_>>>()?;
            aggregate(&scores).map(|(m, _)| m)
        }
    }
}

/// Arithmetic mean and population standard deviation.
pub fn aggregate(scores: &[f64]) -> Result<(f64, f64)> {
    if scores.is_empty() {
        return Err(Error::EmptyInput("aggregate of no scores"));
    }
    let n = scores.len() as f64;
    let mean = scores.iter().sum::<f64>() / n;
    let var = scores.iter().map(|s| (s - mean) * (s - mean)).sum::<f64>() / n;
    Ok((mean, var.sqrt()))
}

/// ADAM hyperparameters; defaults are the standard ones.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            lr: 0.001,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct AdamState {
    pub step: u64,
    pub m: Vec<f64>,
    pub v: Vec<f64>,
    pub config: AdamConfig,
}

impl AdamState {
    pub fn new(len: usize, config: AdamConfig) -> Self {
        Self {
            step: 0,
            m: vec![0.0; len],
            v: vec![0.0; len],
            config,
        }
    }
}

/// One bias-corrected ADAM update, in place.
pub fn adam_step(params: &mut [f64], grads: &[f64], state: &mut AdamState) -> Result<()> {
    if params.len() != grads.len() || params.len() != state.m.len() || params.len() != state.v.len() {
        return Err(Error::Shape(format!(
            "adam lengths differ: params {}, grads {}, state {}",
            params.len(),
            grads.len(),
            state.m.len()
        )));
    }
    let AdamConfig { lr, beta1, beta2, eps } = state.config;
    state.step += 1;
    let t = state.step as i32;
    let c1 = 1.0 - beta1.powi(t);
    let c2 = 1.0 - beta2.powi(t);
    for (((p, &g), m), v) in params.iter_mut().zip(grads).zip(&mut state.m).zip(&mut state.v) {
        *m = beta1 * *m + (1.0 - beta1) * g;
        *v = beta2 * *v + (1.0 - beta2) * g * g;
        let m_hat = *m / c1;
        let v_hat = *v / c2;
        *p -= lr * m_hat / (v_hat.sqrt() + eps);
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::volume::{Dims, Spacing};

    fn labels(dims: Dims, l: Vec<u8>, c: u8) -> LabelVolume {
        LabelVolume::new(dims, Spacing::default(), c, l).unwrap()
    }

    #[test]
    fn value_only_path_matches() {
        let mut rng = crate::rng::SeededRng::new(11);
        for n in 1..20 {
            let c = 2 + n % 2;
            let mut pred = vec![0.0; c * n];
            for i in 0..n {
                let w: Vec<f64> = (0..c).map(|_| rng.unit() + 1e-3).collect();
                let t: f64 = w.iter().sum();
                for k in 0..c {
                    pred[k * n + i] = w[k] / t;
                }
            }
            let truth: Vec<u8> = (0..n).map(|_| rng.below(c) as u8).collect();
            for reduction in [ClassReduction::AllClasses, ClassReduction::ForegroundOnly] {
                let cfg = LossConfig {
                    reduction,
                    ..LossConfig::default()
                };
                let full = combined_with_grad(&pred, &truth, c, &cfg).unwrap().value;
                assert_eq!(combined_value(&pred, &truth, c, &cfg).unwrap(), full);
            }
        }
    }

    #[test]
    fn perfect_prediction_is_zero() {
        let d = Dims::new(2, 2, 1);
        let t = labels(d, vec![0, 1, 2, 1], 3);
        let p = ProbMap::one_hot(&t);
        let tl = tanimoto_loss(&p, &t, 1e-5).unwrap();
        assert!(tl.per_class.iter().all(|&l| l == 0.0));
        let (ce, _) = cross_entropy(&p, &t, 1e-12).unwrap();
        assert_eq!(ce, 0.0);
        assert_eq!(combined_loss(&p, &t, &LossConfig::default()).unwrap().value, 0.0);
    }

    #[test]
    fn absent_class_is_smoothed_to_zero() {
        let d = Dims::new(2, 1, 1);
        let t = labels(d, vec![0, 1], 3);
        let p = ProbMap::one_hot(&t);
        let tl = tanimoto_loss(&p, &t, 1e-5).unwrap();
        assert_eq!(tl.per_class[2], 0.0);
    }

    #[test]
    fn single_voxel_scalar_oracle() {
        let per = tanimoto(&[0.5], &[0], 1, 1e-5).unwrap();
        assert!((per[0] - (1.0 - 0.50001 / 0.75001)).abs() < 1e-15);
        let c = combined_with_grad(&[0.5], &[0], 1, &LossConfig::default()).unwrap();
        let expect = 0.6 * (1.0 - 0.50001 / 0.75001) + 0.4 * 2f64.ln();
        assert!((c.value - expect).abs() < 1e-12);
        assert!((c.value - 0.47726).abs() < 1e-5);
    }

    #[test]
    fn uniform_three_class_ce_is_ln3() {
        let d = Dims::new(2, 1, 1);
        let t = labels(d, vec![0, 2], 3);
        let p = ProbMap::new(d, Spacing::default(), 3, vec![1.0 / 3.0; 6]).unwrap();
        let (ce, _) = cross_entropy(&p, &t, 1e-12).unwrap();
        assert!((ce - 3f64.ln()).abs() < 1e-6);
    }

    #[test]
    fn alpha_only_equals_tanimoto() {
        let pred = [0.7, 0.2, 0.3, 0.8];
        let truth = [0, 1];
        let cfg = LossConfig {
            alpha: 1.0,
            beta: 0.0,
            ..LossConfig::default()
        };
        let c = combined_with_grad(&pred, &truth, 2, &cfg).unwrap();
        let t = tanimoto(&pred, &truth, 2, cfg.smooth).unwrap();
        assert_eq!(c.value, (t[0] + t[1]) / 2.0);
    }

    #[test]
    fn shape_errors() {
        assert!(matches!(tanimoto(&[0.5, 0.5], &[0], 3, 1e-5), Err(Error::Shape(_))));
        assert!(matches!(tanimoto(&[0.5, 0.5], &[2], 2, 1e-5), Err(Error::Shape(_))));
        let a = labels(Dims::new(2, 1, 1), vec![0, 1], 2);
        let b = labels(Dims::new(1, 2, 1), vec![0, 1], 2);
        assert!(dice_score(&a, &b, 1).is_err());
    }

    #[test]
    fn dice_cases() {
        let d = Dims::new(4, 1, 1);
        let a = labels(d, vec![1, 1, 1, 0], 2);
        let b = labels(d, vec![0, 1, 1, 1], 2);
        assert!((dice_score(&a, &b, 1).unwrap() - 4.0 / 6.0).abs() < 1e-15);
        assert_eq!(dice_score(&a, &a, 1).unwrap(), 1.0);
        let c = labels(d, vec![0, 0, 0, 1], 2);
        let e = labels(d, vec![1, 0, 0, 0], 2);
        assert_eq!(dice_score(&c, &e, 1).unwrap(), 0.0);
        let z = labels(d, vec![0; 4], 2);
        assert_eq!(dice_score(&z, &z, 1).unwrap(), 1.0);
        assert_eq!(dice_with(&z, &z, 1, EmptyMask::Exclude).unwrap(), None);
    }

    #[test]
    fn total_dice_kinds() {
        let d = Dims::new(4, 1, 1);
        let p = labels(d, vec![1, 2, 0, 0], 3);
        let t = labels(d, vec![2, 1, 0, 0], 3);
        assert_eq!(total_dice(&p, &t, TotalDice::PooledForeground).unwrap(), 1.0);
        assert_eq!(total_dice(&p, &t, TotalDice::MeanForeground).unwrap(), 0.0);
    }

    #[test]
    fn aggregate_cases() {
        assert_eq!(aggregate(&[0.9, 0.9]).unwrap(), (0.9, 0.0));
        assert_eq!(aggregate(&[1.0]).unwrap(), (1.0, 0.0));
        let (m, s) = aggregate(&[0.8, 1.0]).unwrap();
        assert!((m - 0.9).abs() < 1e-15 && (s - 0.1).abs() < 1e-15);
        assert!(aggregate(&[]).is_err());
    }

    #[test]
    fn adam_zero_gradient_is_noop() {
        let mut p = vec![1.0, -2.0];
        let mut st = AdamState::new(2, AdamConfig::default());
        adam_step(&mut p, &[0.0, 0.0], &mut st).unwrap();
        assert_eq!(p, vec![1.0, -2.0]);
        assert_eq!(st.step, 1);
    }

    #[test]
    fn adam_first_step_closed_form() {
        // After one step m_hat = g and v_hat = g^2, so the update is lr g / (|g| + eps).
        let g = [0.3, -2.0, 1e-3];
        let mut p = vec![0.0; 3];
        let mut st = AdamState::new(3, AdamConfig::default());
        adam_step(&mut p, &g, &mut st).unwrap();
        for (pi, gi) in p.iter().zip(g) {
            let expect = -0.001 * gi / (gi.abs() + 1e-8);
            assert!((pi - expect).abs() < 1e-12, "{pi} vs {expect}");
        }
    }

    #[test]
    fn adam_zero_lr_is_identity_and_lengths_checked() {
        let mut p = vec![0.5, 0.25];
        let mut st = AdamState::new(
            2,
            AdamConfig {
                lr: 0.0,
                ..AdamConfig::default()
            },
        );
        adam_step(&mut p, &[3.0, -1.0], &mut st).unwrap();
        assert_eq!(p, vec![0.5, 0.25]);
        assert!(adam_step(&mut p, &[1.0], &mut st).is_err());
    }
}
