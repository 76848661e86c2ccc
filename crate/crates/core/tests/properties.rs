//! Property tests over the library invariants.

use std::collections::BTreeSet;
use std::path::PathBuf;

use ctseg::augment::{
    apply_policy, augment_chain, gaussian_noise, interpolate_slices, rotate_by, shift_by, skip_slices, AugmentConfig, Mode,
};
use ctseg::dataset::{assign_folds, sample_batch, FoldPlan, Manifest, Record};
use ctseg::ensemble::{combine_mean, select_top_n, Candidate, Combiner, Ensemble, MemberTag};
use ctseg::format::{read_labels, read_probmap, read_volume, write_labels, write_probmap, write_volume, HEADER_LEN};
use ctseg::model::Predictor;
use ctseg::objective::{
    adam_step, combined_with_grad, cross_entropy, dice_score, tanimoto_loss, AdamConfig, AdamState, ClassReduction, LossConfig,
};
use ctseg::preprocess::{downsample, normalize, select_slices, window, window_bounds, IntensityStats, SliceMode, WindowConfig};
use ctseg::synth::{generate_phantom, PhantomConfig};
use ctseg::{CtVolume, Dims, LabelVolume, ProbMap, Result, Sample, SeededRng, Spacing, UnitState};
use proptest::prelude::*;

fn dims_from(rng: &mut SeededRng, max_xy: usize, max_z: usize) -> Dims {
    Dims::new(1 + rng.below(max_xy), 1 + rng.below(max_xy), 1 + rng.below(max_z))
}

fn hu_volume(seed: u64, max_xy: usize, max_z: usize) -> CtVolume {
    let mut rng = SeededRng::new(seed);
    let d = dims_from(&mut rng, max_xy, max_z);
    let hu: Vec<i16> = (0..d.len()).map(|_| (rng.below(4096) as i32 - 1024) as i16).collect();
    CtVolume::from_hounsfield(d, Spacing::new(0.8, 0.8, 2.0), &hu).unwrap()
}

fn normalized_volume(seed: u64, nx: usize, nz: usize) -> CtVolume {
    let mut rng = SeededRng::new(seed);
    let d = Dims::new(nx, nx, nz);
    let v = (0..d.len()).map(|_| rng.standard_normal() as f32).collect();
    CtVolume::new(d, Spacing::new(1.0, 1.0, 2.0), UnitState::Normalized, v).unwrap()
}

fn random_labels(seed: u64, d: Dims, classes: u8) -> LabelVolume {
    let mut rng = SeededRng::new(seed);
    LabelVolume::new(
        d,
        Spacing::new(1.0, 1.0, 2.0),
        classes,
        (0..d.len()).map(|_| rng.below(classes as usize) as u8).collect(),
    )
    .unwrap()
}

fn random_probmap(seed: u64, d: Dims, classes: usize) -> ProbMap {
    let mut rng = SeededRng::new(seed);
    let n = d.len();
    let mut p = vec![0.0; n * classes];
    for i in 0..n {
        let w: Vec<f64> = (0..classes).map(|_| rng.unit() + 1e-3).collect();
        let s: f64 = w.iter().sum();
        for c in 0..classes {
            p[c * n + i] = w[c] / s;
        }
    }
    ProbMap::from_f64(d, Spacing::new(1.0, 1.0, 2.0), classes as u8, &p).unwrap()
}

fn label_set(l: &LabelVolume) -> BTreeSet<u8> {
    l.labels().iter().copied().collect()
}

fn small_phantom(seed: u64) -> (CtVolume, LabelVolume) {
    let cfg = PhantomConfig {
        dims: Dims::new(24, 24, 8),
        ..PhantomConfig::default()
    };
    generate_phantom(&cfg, seed).unwrap()
}

fn records(seed: u64, n: usize) -> Vec<Record> {
    let mut rng = SeededRng::new(seed);
    (0..n)
        .map(|i| Record {
            id: format!("r{i:03}"),
            volume_path: PathBuf::from(format!("r{i}.ctv")),
            label_path: None,
            slice_count: 1 + rng.below(6),
            slice_thickness: [1.0, 2.0, 3.0][rng.below(3)],
        })
        .collect()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn volume_round_trip_and_size(seed in any::<u64>()) {
        let v = hu_volume(seed, 12, 5);
        let mut bytes = Vec::new();
        let written = write_volume(&v, &mut bytes).unwrap();
        prop_assert_eq!(written as usize, bytes.len());
        prop_assert_eq!(bytes.len(), HEADER_LEN + 2 * v.dims().len());
        prop_assert_eq!(read_volume(&mut bytes.as_slice()).unwrap(), v);
    }

    #[test]
    fn label_and_probmap_round_trip(seed in any::<u64>(), classes in 2u8..6) {
        let mut rng = SeededRng::new(seed);
        let d = dims_from(&mut rng, 10, 4);
        let l = random_labels(seed, d, classes);
        let p = random_probmap(seed ^ 1, d, classes as usize);
        let (mut bl, mut bp) = (Vec::new(), Vec::new());
        write_labels(&l, &mut bl).unwrap();
        write_probmap(&p, &mut bp).unwrap();
        prop_assert_eq!(bl.len(), HEADER_LEN + d.len());
        prop_assert_eq!(bp.len(), HEADER_LEN + 4 * d.len() * classes as usize);
        prop_assert_eq!(read_labels(&mut bl.as_slice()).unwrap(), l);
        prop_assert_eq!(read_probmap(&mut bp.as_slice()).unwrap(), p);
    }

    #[test]
    fn readers_never_panic_on_arbitrary_bytes(bytes in proptest::collection::vec(any::<u8>(), 0..200), magic in 0usize..3) {
        let mut b = bytes;
        if b.len() >= 4 {
            b[..4].copy_from_slice([b"CTV1", b"LBL1", b"PRB1"][magic]);
        }
        let _ = read_volume(&mut b.as_slice());
        let _ = read_labels(&mut b.as_slice());
        let _ = read_probmap(&mut b.as_slice());
    }

    #[test]
    fn truncated_files_are_rejected(seed in any::<u64>(), cut in 0.0f64..1.0) {
        let v = hu_volume(seed, 8, 3);
        let mut bytes = Vec::new();
        write_volume(&v, &mut bytes).unwrap();
        let keep = (cut * bytes.len() as f64) as usize;
        prop_assert!(read_volume(&mut &bytes[..keep]).is_err());
    }

    #[test]
    fn window_is_monotone_and_clamped(seed in any::<u64>(), q_low in 0.0f64..0.5, width in 0.05f64..0.5) {
        let v = hu_volume(seed, 10, 4);
        let cfg = WindowConfig::new(q_low, (q_low + width).min(1.0)).unwrap();
        let Ok(w) = window(&v, &cfg) else { return Ok(()) };
        let (lo, hi) = window_bounds(&v, &cfg).unwrap();
        prop_assert_eq!(w.unit_state(), UnitState::Windowed);
        for (a, &x) in v.voxels().iter().zip(w.voxels()) {
            prop_assert!(x >= lo as f32 && x <= hi as f32);
            for (b, &y) in v.voxels().iter().zip(w.voxels()) {
                if a < b {
                    prop_assert!(x <= y);
                }
            }
        }
    }

    #[test]
    fn normalize_is_affine(seed in any::<u64>(), mean in -500.0f64..500.0, std in 1.0f64..400.0) {
        let v = hu_volume(seed, 8, 3);
        let w = window(&v, &WindowConfig::default()).unwrap();
        let n = normalize(&w, &IntensityStats::fixed(mean, std).unwrap()).unwrap();
        prop_assert_eq!(n.unit_state(), UnitState::Normalized);
        for (&a, &b) in w.voxels().iter().zip(n.voxels()) {
            let expected = (a as f64 - mean) / std;
            prop_assert!((b as f64 - expected).abs() <= 1e-5 * expected.abs().max(1.0));
        }
    }

    #[test]
    fn training_slices_have_foreground(seed in any::<u64>(), k in 1usize..12) {
        let (v, l) = small_phantom(seed);
        let (sv, sl) = select_slices(&v, Some(&l), k, SliceMode::Training, seed).unwrap();
        let sl = sl.unwrap();
        prop_assert_eq!(sv.dims().nz, k);
        prop_assert_eq!(sl.dims().nz, k);
        for z in 0..k {
            prop_assert!(sl.slice(z).iter().any(|&x| x != 0));
        }
    }

    #[test]
    fn downsampled_labels_are_a_subset(seed in any::<u64>(), target in 1usize..24) {
        let (v, l) = small_phantom(seed);
        let (dv, dl) = downsample(&v, Some(&l), target).unwrap();
        let dl = dl.unwrap();
        prop_assert_eq!(dv.dims(), Dims::new(target, target, 8));
        prop_assert!(label_set(&dl).is_subset(&label_set(&l)));
        prop_assert!(dv.min_value() >= v.min_value() && dv.max_value() <= v.max_value());
    }

    #[test]
    fn augmentation_is_pure_and_keeps_labels(seed in any::<u64>()) {
        let v = normalized_volume(seed, 12, 6);
        let l = random_labels(seed, v.dims(), 3);
        let sample = Sample::new(v.clone(), Some(l.clone()));
        let cfg = AugmentConfig::default();
        let (a, angle) = augment_chain(&sample, &cfg, seed).unwrap();
        let (b, angle_b) = augment_chain(&sample, &cfg, seed).unwrap();
        prop_assert_eq!(&a, &b);
        prop_assert_eq!(angle, angle_b);
        prop_assert!(angle.abs() <= cfg.rot_max_deg);
        prop_assert_eq!(&sample.volume, &v);
        let al = a.labels.unwrap();
        prop_assert_eq!(al.dims(), a.volume.dims());
        prop_assert_eq!((al.dims().nx, al.dims().ny), (12, 12));
        prop_assert!(label_set(&al).is_subset(&label_set(&l)));
    }

    #[test]
    fn zero_magnitude_augmentations_are_identity(seed in any::<u64>()) {
        let v = normalized_volume(seed, 9, 5);
        let l = random_labels(seed, v.dims(), 3);
        prop_assert_eq!(gaussian_noise(&v, 0.0, seed).unwrap(), v.clone());
        prop_assert_eq!(shift_by(&v, 0.0).unwrap(), v.clone());
        prop_assert_eq!(skip_slices(&v, Some(&l), 0.0, seed).unwrap(), (v.clone(), Some(l.clone())));
        prop_assert_eq!(interpolate_slices(&v, Some(&l), 0.0, seed).unwrap(), (v.clone(), Some(l.clone())));
        prop_assert_eq!(rotate_by(&v, Some(&l), 0.0).unwrap(), (v.clone(), Some(l.clone())));
        let batch = [Sample::new(v.clone(), Some(l.clone()))];
        let (out, trace) = apply_policy(&batch, &AugmentConfig::disabled(), Mode::ThreeD, 0, seed).unwrap();
        prop_assert!(!trace.chain_applied);
        prop_assert_eq!(&out[0], &batch[0]);
    }

    #[test]
    fn losses_vanish_on_perfect_predictions(seed in any::<u64>(), classes in 2u8..5) {
        let mut rng = SeededRng::new(seed);
        let d = dims_from(&mut rng, 6, 3);
        let l = random_labels(seed, d, classes);
        let p = ProbMap::one_hot(&l);
        prop_assert_eq!(tanimoto_loss(&p, &l, 1e-5).unwrap().value, 0.0);
        prop_assert_eq!(cross_entropy(&p, &l, 1e-12).unwrap().0, 0.0);
    }

    #[test]
    fn loss_values_stay_in_range(seed in any::<u64>(), classes in 2u8..5) {
        let mut rng = SeededRng::new(seed);
        let d = dims_from(&mut rng, 6, 3);
        let l = random_labels(seed, d, classes);
        let p = random_probmap(seed ^ 7, d, classes as usize);
        let t = tanimoto_loss(&p, &l, 1e-5).unwrap();
        prop_assert!(t.per_class.iter().all(|&x| (0.0..=1.0).contains(&x)));
        let (ce, _) = cross_entropy(&p, &l, 1e-12).unwrap();
        prop_assert!(ce >= 0.0 && ce.is_finite());
    }

    #[test]
    fn combined_loss_is_linear_in_weights(seed in any::<u64>(), a in 0.0f64..3.0, b in 0.01f64..3.0) {
        let mut rng = SeededRng::new(seed);
        let d = dims_from(&mut rng, 5, 2);
        let l = random_labels(seed, d, 3);
        let p = random_probmap(seed ^ 3, d, 3).to_f64();
        let cfg = |alpha, beta| LossConfig { alpha, beta, smooth: 1e-5, prob_floor: 1e-12, reduction: ClassReduction::AllClasses };
        let tan = combined_with_grad(&p, l.labels(), 3, &cfg(1.0, 0.0)).unwrap();
        let ce = combined_with_grad(&p, l.labels(), 3, &cfg(0.0, 1.0)).unwrap();
        let mix = combined_with_grad(&p, l.labels(), 3, &cfg(a, b)).unwrap();
        prop_assert!((mix.value - (a * tan.value + b * ce.value)).abs() <= 1e-12 * mix.value.abs().max(1.0));
        for ((m, t), c) in mix.grad.iter().zip(&tan.grad).zip(&ce.grad) {
            prop_assert!((m - (a * t + b * c)).abs() <= 1e-9 * m.abs().max(1.0));
        }
    }

    #[test]
    fn dice_is_symmetric_and_bounded(seed in any::<u64>()) {
        let mut rng = SeededRng::new(seed);
        let d = dims_from(&mut rng, 6, 3);
        let a = random_labels(seed, d, 3);
        let b = random_labels(seed ^ 9, d, 3);
        for c in 0..3u8 {
            let ab = dice_score(&a, &b, c).unwrap();
            prop_assert_eq!(ab, dice_score(&b, &a, c).unwrap());
            prop_assert!((0.0..=1.0).contains(&ab));
            prop_assert_eq!(dice_score(&a, &a, c).unwrap(), 1.0);
        }
    }

    #[test]
    fn adam_with_zero_rate_is_identity(params in proptest::collection::vec(-10.0f64..10.0, 1..20), g in -5.0f64..5.0) {
        let mut p = params.clone();
        let grads = vec![g; p.len()];
        let mut state = AdamState::new(p.len(), AdamConfig { lr: 0.0, ..AdamConfig::default() });
        for _ in 0..5 {
            adam_step(&mut p, &grads, &mut state).unwrap();
        }
        prop_assert_eq!(p, params);
        prop_assert_eq!(state.step, 5);
    }

    #[test]
    fn folds_partition_in_key_order(seed in any::<u64>(), n in 1usize..40, k in 1usize..8) {
        let recs = records(seed, n);
        let manifest = Manifest::new(recs.clone()).unwrap();
        let plan = assign_folds(&manifest, k);
        if k > n {
            prop_assert!(plan.is_err());
            return Ok(());
        }
        let plan = plan.unwrap();
        prop_assert_eq!(plan.k(), k);
        let all: Vec<String> = plan.folds().iter().flatten().cloned().collect();
        let unique: BTreeSet<&String> = all.iter().collect();
        prop_assert_eq!(all.len(), n);
        prop_assert_eq!(unique.len(), n);
        let sizes: Vec<usize> = plan.folds().iter().map(Vec::len).collect();
        prop_assert!(sizes.iter().max().unwrap() - sizes.iter().min().unwrap() <= 1);
        let slices = |id: &String| manifest.get(id).unwrap().slice_count;
        for w in plan.folds().windows(2) {
            let last = w[0].iter().map(slices).max().unwrap();
            let first = w[1].iter().map(slices).min().unwrap();
            prop_assert!(last <= first);
        }
        let mut shuffled = recs;
        shuffled.reverse();
        prop_assert_eq!(&assign_folds(&Manifest::new(shuffled).unwrap(), k).unwrap(), &plan);
        prop_assert_eq!(FoldPlan::parse(&plan.to_text()).unwrap(), plan);
    }

    #[test]
    fn batches_are_distinct_when_possible(seed in any::<u64>(), n in 1usize..20, size in 1usize..30) {
        let ids: Vec<String> = (0..n).map(|i| format!("id{i}")).collect();
        let batch = sample_batch(&ids, size, seed, 3, 0).unwrap();
        prop_assert_eq!(batch.len(), size);
        let first: BTreeSet<&String> = batch.iter().take(n).collect();
        prop_assert_eq!(first.len(), size.min(n));
        prop_assert_eq!(batch, sample_batch(&ids, size, seed, 3, 0).unwrap());
    }

    #[test]
    fn mean_combiner_is_order_invariant(seed in any::<u64>(), m in 1usize..5) {
        let d = Dims::new(4, 3, 2);
        let maps: Vec<ProbMap> = (0..m).map(|i| random_probmap(seed.wrapping_add(i as u64), d, 3)).collect();
        let weights: Vec<f64> = (0..m).map(|i| 0.5 + i as f64).collect();
        let a = combine_mean(&maps, &weights).unwrap();
        let mut rev_maps = maps.clone();
        rev_maps.reverse();
        let mut rev_w = weights.clone();
        rev_w.reverse();
        let b = combine_mean(&rev_maps, &rev_w).unwrap();
        for (x, y) in a.probs().iter().zip(b.probs()) {
            prop_assert!((x - y).abs() <= 1e-6);
        }
        prop_assert!(ProbMap::new(a.dims(), a.spacing(), 3, a.probs().to_vec()).is_ok());
    }

    #[test]
    fn top_n_keeps_the_best_scores(scores in proptest::collection::vec(-1.0f64..1.0, 1..15), n in 1usize..20) {
        let cands: Vec<Candidate> = scores.iter().enumerate().map(|(i, &s)| Candidate::new(format!("c{i:02}"), s)).collect();
        let top = select_top_n(&cands, n).unwrap();
        prop_assert_eq!(top.len(), n.min(cands.len()));
        let cutoff = top.last().unwrap().score;
        prop_assert!(top.windows(2).all(|w| w[0].score >= w[1].score));
        let kept: BTreeSet<&str> = top.iter().map(|c| c.id.as_str()).collect();
        for c in &cands {
            if !kept.contains(c.id.as_str()) {
                prop_assert!(c.score <= cutoff);
            }
        }
    }

    #[test]
    fn single_member_ensembles_reproduce_the_member(seed in any::<u64>()) {
        let v = normalized_volume(seed, 5, 2);
        let p = random_probmap(seed, v.dims(), 3);
        for combiner in [Combiner::Mean, Combiner::Weighted(vec![2.5])] {
            let e = Ensemble {
                members: vec![(Box::new(Fixed(p.clone())), MemberTag::parse("multiclass-3d").unwrap())],
                combiner,
                num_classes: 3,
            };
            let (_, labels) = e.predict(&v).unwrap();
            prop_assert_eq!(labels, p.argmax());
        }
    }

    #[test]
    fn phantoms_are_valid_and_seeded(seed in any::<u64>()) {
        let (v, l) = small_phantom(seed);
        let (v2, l2) = small_phantom(seed);
        prop_assert_eq!(&v, &v2);
        prop_assert_eq!(&l, &l2);
        prop_assert_eq!(v.unit_state(), UnitState::Hounsfield);
        prop_assert_eq!(l.num_classes(), 3);
        let h = l.histogram();
        prop_assert!(h[0] > h[1] && h[1] > h[2], "prevalence {:?}", h);
        prop_assert!(v.voxels().iter().all(|x| (-1024.0..=3071.0).contains(x)));
    }

    #[test]
    fn phantom_labels_ignore_noise(seed in any::<u64>(), noise in 0.0f64..60.0) {
        let cfg = PhantomConfig { dims: Dims::new(20, 20, 6), noise_std: noise, ..PhantomConfig::default() };
        let quiet = PhantomConfig { noise_std: 0.0, ..cfg.clone() };
        let (_, l) = generate_phantom(&cfg, seed).unwrap();
        let (_, lq) = generate_phantom(&quiet, seed).unwrap();
        prop_assert_eq!(l, lq);
    }
}

struct Fixed(ProbMap);

impl Predictor for Fixed {
    fn num_classes(&self) -> u8 {
        self.0.num_classes()
    }

    fn predict(&self, _: &CtVolume) -> Result<ProbMap> {
        Ok(self.0.clone())
    }
}
