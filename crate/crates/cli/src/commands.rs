use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use ctseg::augment::{apply_policy, AugmentConfig, Mode};
use ctseg::dataset::{assign_folds, load_manifest, load_sample, FoldPlan, Manifest, Record};
use ctseg::derive_seed;
use ctseg::ensemble::{select_top_n, train_stacker, Candidate, CombinerKind, Ensemble, EnsembleSpec, StackerConfig};
use ctseg::format::{load_labels, load_volume, save_labels, save_probmap, save_volume};
use ctseg::model::{load_params, save_params, train_fold, Predictor, Target, TrainConfig};
use ctseg::objective::{AdamConfig, ClassReduction, LossConfig, TotalDice};
use ctseg::preprocess::{downsample, normalize, sample_stats, select_slices, window, IntensityStats, SliceMode, WindowConfig};
use ctseg::report::{score_volume, EvalReport};
use ctseg::selftest::run_selftest;
use ctseg::synth::{generate_dataset, DatasetSpec};
use ctseg::{CtVolume, LabelVolume, ProbMap, Sample};

use crate::run_manifest::RunManifest;
use crate::*;

pub fn run(cli: &Cli) -> Result<u8> {
    let g = &cli.global;
    match &cli.command {
        Command::Synth(a) => synth(g, a),
        Command::Stats(a) => stats(g, a),
        Command::Preprocess(a) => preprocess(g, a),
        Command::Augment(a) => augment(g, a),
        Command::Folds(a) => folds(g, a),
        Command::Train(a) => train(g, a),
        Command::Predict(a) => predict(g, a),
        Command::Evaluate(a) => evaluate(g, a),
        Command::Stack(StackCommand::Select(a)) => stack_select(g, a),
        Command::Stack(StackCommand::Train(a)) => stack_train(g, a),
        Command::Stack(StackCommand::Predict(a)) => stack_predict(g, a),
        Command::Selftest => selftest(g),
    }
}

fn usage(msg: impl Into<String>) -> anyhow::Error {
    UsageError(msg.into()).into()
}

fn flag<T>(r: ctseg::Result<T>) -> Result<T> {
    r.map_err(|e| usage(e.to_string()))
}

fn window_cfg(a: &WindowArgs) -> Result<WindowConfig> {
    match &a.window {
        Some(name) => WindowConfig::preset(name).ok_or_else(|| usage(format!("unknown window preset {name:?}"))),
        None => flag(WindowConfig::new(a.q_low, a.q_high)),
    }
}

fn loss_cfg(a: &LossArgs) -> Result<LossConfig> {
    let cfg = LossConfig {
        alpha: a.alpha,
        beta: a.beta,
        smooth: a.smooth,
        reduction: if a.foreground_only {
            ClassReduction::ForegroundOnly
        } else {
            ClassReduction::AllClasses
        },
        ..LossConfig::default()
    };
    flag(cfg.validate())?;
    Ok(cfg)
}

fn augment_cfg(a: &AugmentFlags) -> Result<AugmentConfig> {
    if a.no_augment {
        return Ok(AugmentConfig::disabled());
    }
    let cfg = AugmentConfig {
        noise_sigma: a.noise_sigma,
        skip_rate: a.skip_rate,
        interp_insert_rate: a.interp_rate,
        shift_max: a.shift_max,
        rot_max_deg: a.rot_max,
        policy_3d: a.policy_3d,
        policy_2d: a.policy_2d,
        shift_prob: a.shift_prob,
    };
    flag(cfg.validate())?;
    Ok(cfg)
}

fn mode(m: ModeArg) -> Mode {
    match m {
        ModeArg::TwoD => Mode::TwoD,
        ModeArg::ThreeD => Mode::ThreeD,
    }
}

fn read_text(path: &Path) -> Result<String> {
    fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))
}

fn load_stats(path: &Path) -> Result<IntensityStats> {
    IntensityStats::from_text(&read_text(path)?).with_context(|| format!("parsing {}", path.display()))
}

fn load_plan(path: &Path) -> Result<FoldPlan> {
    FoldPlan::parse(&read_text(path)?).with_context(|| format!("parsing {}", path.display()))
}

fn write_text(path: &Path, text: &str) -> Result<()> {
    fs::write(path, text).with_context(|| format!("writing {}", path.display()))
}

fn ensure_dir(path: &Path) -> Result<()> {
    fs::create_dir_all(path).with_context(|| format!("creating {}", path.display()))
}

fn write_report(g: &Global, text: &str, run: &mut RunManifest) -> Result<()> {
    if let Some(p) = &g.report {
        write_text(p, text)?;
        run.output("report", p);
        println!("report: {}", p.display());
    }
    Ok(())
}

/// Manifest records selected by `--manifest` and optionally `--plan/--fold`.
fn manifest_records(manifest: &Path, plan: Option<&Path>, fold: Option<usize>) -> Result<Vec<Record>> {
    let m = load_manifest(manifest).with_context(|| format!("loading {}", manifest.display()))?;
    let Some(plan) = plan else {
        return Ok(m.records().to_vec());
    };
    let plan = load_plan(plan)?;
    let fold = fold.ok_or_else(|| usage("--plan needs --fold"))?;
    if fold >= plan.k() {
        return Err(usage(format!("fold {fold} out of range for {} folds", plan.k())));
    }
    plan.fold(fold)
        .iter()
        .map(|id| m.get(id).cloned().with_context(|| format!("plan id {id:?} missing from manifest")))
        .collect()
}

fn synth(g: &Global, a: &SynthArgs) -> Result<u8> {
    let mut spec = DatasetSpec {
        n: a.n,
        size: (a.size_min, a.size_max),
        slices: (a.slices_min, a.slices_max),
        thickness: (a.thickness_min, a.thickness_max),
        seed: g.seed,
        ..DatasetSpec::default()
    };
    spec.phantom.noise_std = a.noise;
    ensure_dir(&a.out)?;
    let mut run = RunManifest::new("synth", g.seed, g.threads);
    run.config("n", a.n)
        .config("size", format!("{}..={}", a.size_min, a.size_max))
        .config("slices", format!("{}..={}", a.slices_min, a.slices_max))
        .config("thickness", format!("{}..{}", a.thickness_min, a.thickness_max))
        .config("noise_std", a.noise);
    let manifest = generate_dataset(&spec, &a.out)?;
    let mpath = a.out.join("manifest.tsv");
    run.output("manifest", &mpath);
    println!("wrote {} phantoms and {}", manifest.len(), mpath.display());
    run.write_beside(&a.out)?;
    Ok(0)
}

fn stats(g: &Global, a: &StatsArgs) -> Result<u8> {
    let w = window_cfg(&a.window)?;
    let manifest = load_manifest(&a.manifest)?;
    let s = sample_stats(&manifest, &w, a.fraction, g.seed)?;
    write_text(&a.out, &s.to_text())?;
    let mut run = RunManifest::new("stats", g.seed, g.threads);
    run.config("q_low", w.q_low)
        .config("q_high", w.q_high)
        .config("fraction", a.fraction)
        .input("manifest", &a.manifest)
        .output("stats", &a.out);
    println!("mean={} std={} volumes={}", s.mean, s.std, s.n_volumes_sampled);
    run.write_beside(&a.out)?;
    Ok(0)
}

struct PrepFlags {
    window: WindowConfig,
    stats: IntensityStats,
    slices: Option<(usize, SliceMode)>,
    size: Option<usize>,
}

fn prepare(p: &PrepFlags, volume: &CtVolume, labels: Option<&LabelVolume>, seed: u64) -> Result<(CtVolume, Option<LabelVolume>)> {
    let v = normalize(&window(volume, &p.window)?, &p.stats)?;
    let (v, l) = match p.slices {
        Some((k, m)) => select_slices(&v, labels, k, m, seed)?,
        None => (v, labels.cloned()),
    };
    Ok(match p.size {
        Some(s) => downsample(&v, l.as_ref(), s)?,
        None => (v, l),
    })
}

fn preprocess(g: &Global, a: &PreprocessArgs) -> Result<u8> {
    let p = PrepFlags {
        window: window_cfg(&a.window)?,
        stats: load_stats(&a.stats)?,
        slices: (!a.all_slices).then_some((
            a.slices,
            match a.slice_mode {
                SliceModeArg::Training => SliceMode::Training,
                SliceModeArg::Inference => SliceMode::Inference,
            },
        )),
        size: Some(a.size),
    };
    let mut run = RunManifest::new("preprocess", g.seed, g.threads);
    run.config("q_low", p.window.q_low)
        .config("q_high", p.window.q_high)
        .config("slices", if a.all_slices { "all".to_string() } else { a.slices.to_string() })
        .config("slice_mode", format!("{:?}", a.slice_mode).to_lowercase())
        .config("size", a.size)
        .input("stats", &a.stats);
    if let Some(input) = &a.inputs.input {
        let v = load_volume(input)?;
        let l = a.inputs.labels.as_ref().map(load_labels).transpose()?;
        let (v, l) = prepare(&p, &v, l.as_ref(), g.seed)?;
        save_volume(&v, &a.out)?;
        run.input("volume", input).output("volume", &a.out);
        if let (Some(l), Some(out)) = (l, &a.labels_out) {
            save_labels(&l, out)?;
            run.output("labels", out);
        }
        println!("wrote {} ({})", a.out.display(), v.dims());
        run.write_beside(&a.out)?;
        return Ok(0);
    }
    let Some(manifest) = &a.inputs.manifest else {
        return Err(usage("preprocess needs --input or --manifest"));
    };
    let records = manifest_records(manifest, a.inputs.plan.as_deref(), a.inputs.fold)?;
    ensure_dir(&a.out)?;
    let mut out_records = Vec::with_capacity(records.len());
    for (i, r) in records.iter().enumerate() {
        let s = load_sample(r)?;
        let (v, l) =
            prepare(&p, &s.volume, s.labels.as_ref(), derive_seed(g.seed, i as u64)).with_context(|| format!("preprocessing {}", r.id))?;
        let vname = format!("{}.ctv", r.id);
        save_volume(&v, a.out.join(&vname))?;
        let lname = match l {
            Some(l) => {
                let name = format!("{}.lbl", r.id);
                save_labels(&l, a.out.join(&name))?;
                Some(PathBuf::from(name))
            }
            None => None,
        };
        out_records.push(Record {
            id: r.id.clone(),
            volume_path: PathBuf::from(vname),
            label_path: lname,
            slice_count: v.dims().nz,
            slice_thickness: r.slice_thickness,
        });
    }
    let mpath = a.out.join("manifest.tsv");
    write_text(&mpath, &Manifest::new(out_records)?.to_text())?;
    run.input("manifest", manifest).output("manifest", &mpath);
    println!("preprocessed {} volumes into {}", records.len(), a.out.display());
    run.write_beside(&a.out)?;
    Ok(0)
}

fn augment(g: &Global, a: &AugmentArgs) -> Result<u8> {
    let cfg = augment_cfg(&a.augment)?;
    let volume = load_volume(&a.input)?;
    let labels = a.labels.as_ref().map(load_labels).transpose()?;
    let batch = [Sample::new(volume, labels)];
    let (out, trace) = apply_policy(&batch, &cfg, mode(a.mode), a.batch_id, derive_seed(g.seed, a.batch_id))?;
    ensure_dir(&a.out)?;
    let mut run = RunManifest::new("augment", g.seed, g.threads);
    for (k, v) in cfg.to_text().lines().filter_map(|l| l.split_once('=')) {
        run.config(k, v);
    }
    run.config("mode", mode(a.mode).name())
        .config("batch_id", a.batch_id)
        .input("volume", &a.input);
    let s = &out[0];
    let vpath = a.out.join("augmented.ctv");
    save_volume(&s.volume, &vpath)?;
    run.output("volume", &vpath);
    if let Some(l) = &s.labels {
        let lpath = a.out.join("augmented.lbl");
        save_labels(l, &lpath)?;
        run.output("labels", &lpath);
    }
    let tpath = a.out.join("trace.tsv");
    write_text(&tpath, &format!("batch_id\tops\tangles\tshifts\n{}\n", trace.to_line()))?;
    run.output("trace", &tpath);
    println!("{}", trace.to_line());
    run.write_beside(&a.out)?;
    Ok(0)
}

fn folds(g: &Global, a: &FoldsArgs) -> Result<u8> {
    if a.k == 0 {
        return Err(usage("--k must be >= 1"));
    }
    let manifest = load_manifest(&a.manifest)?;
    let plan = assign_folds(&manifest, a.k)?;
    write_text(&a.out, &plan.to_text())?;
    let mut run = RunManifest::new("folds", g.seed, g.threads);
    run.config("k", a.k).input("manifest", &a.manifest).output("plan", &a.out);
    for (i, f) in plan.folds().iter().enumerate() {
        println!("fold {i}: {}", f.join(" "));
    }
    run.write_beside(&a.out)?;
    Ok(0)
}

fn train(g: &Global, a: &TrainArgs) -> Result<u8> {
    let m = mode(a.mode);
    let mut cfg = TrainConfig::for_mode(m);
    cfg.target = match a.target {
        TargetArg::Multiclass => Target::Multiclass,
        TargetArg::Binary => Target::Binary,
    };
    cfg.batch_size = match m {
        Mode::TwoD => a.batch_2d,
        Mode::ThreeD => a.batch_3d,
    };
    cfg.max_epochs = a.max_epochs;
    cfg.patience = a.patience;
    cfg.tolerance = a.tolerance;
    cfg.seed = g.seed;
    cfg.slices = a.slices;
    cfg.in_plane = a.size;
    cfg.window = window_cfg(&a.window)?;
    cfg.stats_fraction = a.stats_fraction;
    cfg.stats = a.stats.as_deref().map(load_stats).transpose()?;
    cfg.freeze_slices = a.freeze_slices;
    cfg.loss = loss_cfg(&a.loss)?;
    cfg.augment = augment_cfg(&a.augment)?;
    cfg.adam = AdamConfig {
        lr: a.lr,
        ..AdamConfig::default()
    };
    flag(cfg.validate())?;

    let manifest = load_manifest(&a.manifest)?;
    let plan = match &a.plan {
        Some(p) => load_plan(p)?,
        None => assign_folds(&manifest, a.k)?,
    };
    if a.fold >= plan.k() {
        return Err(usage(format!("fold {} out of range for {} folds", a.fold, plan.k())));
    }
    ensure_dir(&a.out)?;
    let mut run = RunManifest::new("train", g.seed, g.threads);
    run.config("mode", m.name())
        .config("target", cfg.target.name())
        .config("batch_size", cfg.batch_size)
        .config("max_epochs", cfg.max_epochs)
        .config("patience", cfg.patience)
        .config("tolerance", cfg.tolerance)
        .config("lr", cfg.adam.lr)
        .config("slices", cfg.slices)
        .config("size", cfg.in_plane)
        .config("q_low", cfg.window.q_low)
        .config("q_high", cfg.window.q_high)
        .config("alpha", cfg.loss.alpha)
        .config("beta", cfg.loss.beta)
        .config("smooth", cfg.loss.smooth)
        .config("fold", a.fold)
        .config("freeze_slices", cfg.freeze_slices)
        .input("manifest", &a.manifest);
    if let Some(p) = &a.plan {
        run.input("plan", p);
    }

    let trained = train_fold(&manifest, &plan, a.fold, &cfg)?;
    let params_path = a.out.join("params.prm");
    save_params(&trained.params, &params_path)?;
    let log_path = a.out.join("train_log.tsv");
    write_text(&log_path, &trained.log.to_tsv())?;
    let stats_path = a.out.join("stats.txt");
    write_text(&stats_path, &trained.log.stats.to_text())?;
    let plan_path = a.out.join("plan.tsv");
    write_text(&plan_path, &plan.to_text())?;

    let mut report = EvalReport::new(trained.params.num_classes() as u8, TotalDice::PooledForeground);
    for id in plan.fold(a.fold) {
        let r = manifest.get(id).context("held-out id missing from manifest")?;
        let s = load_sample(r)?;
        let truth = s.labels.as_ref().with_context(|| format!("{id} has no labels"))?;
        let truth = cfg.target.map_labels(truth);
        let (v, t) = trained.preprocessor.prepare(&s.volume, Some(&truth))?;
        let pred = trained.params.predict(&v)?.argmax();
        report.push(score_volume(id, &pred, &t.expect("labels given"), report.total_kind)?);
    }
    let val_path = a.out.join("validation.tsv");
    let tsv = report.to_tsv();
    write_text(&val_path, &tsv)?;
    write_report(g, &tsv, &mut run)?;
    run.output("params", &params_path)
        .output("log", &log_path)
        .output("stats", &stats_path)
        .output("plan", &plan_path)
        .output("validation", &val_path);

    let log = &trained.log;
    println!(
        "epochs={} initial_val_loss={:.6} best_val_loss={:.6} best_epoch={} stop={:?}",
        log.records.len(),
        log.initial_val_loss,
        log.best_val_loss,
        log.best_epoch.map_or_else(|| "initial".to_string(), |e| e.to_string()),
        log.stop
    );
    let total = report.total_summary()?;
    println!(
        "validation total dice {:.4} ± {:.4} over {} volumes",
        total.mean, total.std, total.count
    );
    run.write_beside(&a.out)?;
    Ok(0)
}

/// Writes one prediction per input; shared by `predict` and `stack predict`.
struct InferenceOutputs<'a> {
    out: &'a Path,
    labels_out: Option<&'a Path>,
    truth_out: Option<&'a Path>,
}

fn infer(
    g: &Global,
    inputs: &InputArgs,
    prep: &PrepFlags,
    outs: InferenceOutputs<'_>,
    num_classes: u8,
    run: &mut RunManifest,
    predict: &dyn Fn(&CtVolume) -> ctseg::Result<ProbMap>,
) -> Result<()> {
    let target = if num_classes == 2 { Target::Binary } else { Target::Multiclass };
    if let Some(input) = &inputs.input {
        let v = load_volume(input)?;
        let l = inputs.labels.as_ref().map(load_labels).transpose()?.map(|l| target.map_labels(&l));
        let (v, l) = prepare(prep, &v, l.as_ref(), g.seed)?;
        let map = predict(&v)?;
        save_probmap(&map, outs.out)?;
        run.input("volume", input).output("probmap", outs.out);
        if let Some(p) = outs.labels_out {
            save_labels(&map.argmax(), p)?;
            run.output("labels", p);
        }
        if let (Some(p), Some(l)) = (outs.truth_out, l) {
            save_labels(&l, p)?;
            run.output("truth", p);
        }
        println!("wrote {} ({}, {} classes)", outs.out.display(), map.dims(), map.num_classes());
        run.write_beside(outs.out)?;
        return Ok(());
    }
    let Some(manifest) = &inputs.manifest else {
        return Err(usage("needs --input or --manifest"));
    };
    let records = manifest_records(manifest, inputs.plan.as_deref(), inputs.fold)?;
    ensure_dir(outs.out)?;
    let mut table = String::from("id\tprobmap\tprediction\ttruth\n");
    for r in &records {
        let s = load_sample(r)?;
        let l = s.labels.as_ref().map(|l| target.map_labels(l));
        let (v, l) = prepare(prep, &s.volume, l.as_ref(), g.seed)?;
        let map = predict(&v).with_context(|| format!("predicting {}", r.id))?;
        let pm = format!("{}.pmap", r.id);
        let pred = format!("{}.pred.lbl", r.id);
        save_probmap(&map, outs.out.join(&pm))?;
        save_labels(&map.argmax(), outs.out.join(&pred))?;
        let truth = match l {
            Some(l) => {
                let name = format!("{}.truth.lbl", r.id);
                save_labels(&l, outs.out.join(&name))?;
                name
            }
            None => "-".to_string(),
        };
        table.push_str(&format!("{}\t{pm}\t{pred}\t{truth}\n", r.id));
    }
    let tpath = outs.out.join("predictions.tsv");
    write_text(&tpath, &table)?;
    run.input("manifest", manifest).output("predictions", &tpath);
    println!("predicted {} volumes into {}", records.len(), outs.out.display());
    run.write_beside(outs.out)?;
    Ok(())
}

fn inference_prep(window: &WindowArgs, stats: &Path, size: Option<usize>) -> Result<PrepFlags> {
    Ok(PrepFlags {
        window: window_cfg(window)?,
        stats: load_stats(stats)?,
        slices: None,
        size,
    })
}

fn predict(g: &Global, a: &PredictArgs) -> Result<u8> {
    let params = load_params(&a.params)?;
    let prep = inference_prep(&a.window, &a.stats, a.size)?;
    let mut run = RunManifest::new("predict", g.seed, g.threads);
    run.config("q_low", prep.window.q_low)
        .config("q_high", prep.window.q_high)
        .config("size", a.size.map_or_else(|| "native".to_string(), |s| s.to_string()))
        .input("params", &a.params)
        .input("stats", &a.stats);
    let outs = InferenceOutputs {
        out: &a.out,
        labels_out: a.labels_out.as_deref(),
        truth_out: a.truth_out.as_deref(),
    };
    infer(g, &a.inputs, &prep, outs, Predictor::num_classes(&params), &mut run, &|v| {
        params.predict(v)
    })?;
    Ok(0)
}

fn evaluate(g: &Global, a: &EvaluateArgs) -> Result<u8> {
    let kind = match a.total {
        TotalArg::Pooled => TotalDice::PooledForeground,
        TotalArg::Mean => TotalDice::MeanForeground,
    };
    let mut run = RunManifest::new("evaluate", g.seed, g.threads);
    run.config("total", kind.name());
    let mut pairs: Vec<(String, LabelVolume, LabelVolume)> = Vec::new();
    if let (Some(p), Some(t)) = (&a.pred, &a.truth) {
        let id = p
            .file_stem()
            .map_or_else(|| "volume".to_string(), |s| s.to_string_lossy().into_owned());
        pairs.push((id, load_labels(p)?, load_labels(t)?));
        run.input("prediction", p).input("truth", t);
    } else if let Some(table) = &a.predictions {
        let base = table.parent().unwrap_or(Path::new("."));
        for (i, line) in read_text(table)?.lines().enumerate() {
            if i == 0 && line.starts_with("id\t") || line.trim().is_empty() {
                continue;
            }
            let f: Vec<&str> = line.split('\t').collect();
            if f.len() != 4 {
                bail!("{}:{}: expected 4 tab-separated fields", table.display(), i + 1);
            }
            if f[3] == "-" {
                bail!("{}: volume {} has no truth labels", table.display(), f[0]);
            }
            pairs.push((f[0].to_string(), load_labels(base.join(f[2]))?, load_labels(base.join(f[3]))?));
        }
        run.input("predictions", table);
    } else {
        return Err(usage("evaluate needs --pred and --truth, or --predictions"));
    }
    if pairs.is_empty() {
        bail!("nothing to evaluate");
    }
    let classes = pairs
        .iter()
        .map(|(_, p, t)| p.num_classes().max(t.num_classes()))
        .max()
        .unwrap_or(2);
    let mut report = EvalReport::new(classes, kind);
    for (id, p, t) in &pairs {
        report.push(score_volume(id, p, t, kind).with_context(|| format!("scoring {id}"))?);
    }
    let tsv = report.to_tsv();
    print!("{tsv}");
    let out = a.out.as_ref().or(g.report.as_ref());
    match out {
        Some(p) => {
            write_text(p, &tsv)?;
            run.output("report", p);
            if g.report.as_ref() != Some(p) {
                write_report(g, &tsv, &mut run)?;
            }
            run.write_beside(p)?;
        }
        None => eprintln!("note: no --out or --report given; run manifest not written"),
    }
    Ok(0)
}

fn stack_select(g: &Global, a: &StackSelectArgs) -> Result<u8> {
    let base = a.candidates.parent().unwrap_or(Path::new("."));
    let spec = EnsembleSpec::parse_unchecked(&read_text(&a.candidates)?, base)?;
    let candidates: Vec<Candidate> = spec
        .members
        .iter()
        .map(|m| Candidate::new(m.path.display().to_string(), m.score))
        .collect();
    if a.top_n == 0 {
        return Err(usage("--top-n must be >= 1"));
    }
    let chosen = select_top_n(&candidates, a.top_n)?;
    let members = chosen
        .iter()
        .map(|c| {
            spec.members
                .iter()
                .find(|m| m.path.display().to_string() == c.id)
                .cloned()
                .expect("selected from list")
        })
        .collect();
    let out = EnsembleSpec {
        members,
        combiner: match a.combiner {
            CombinerArg::Mean => CombinerKind::Mean,
            CombinerArg::Weighted => CombinerKind::Weighted,
        },
        stacker: None,
    };
    out.validate()?;
    write_text(&a.out, &out.to_text())?;
    let mut run = RunManifest::new("stack-select", g.seed, g.threads);
    run.config("top_n", a.top_n)
        .config("combiner", out.combiner.name())
        .input("candidates", &a.candidates)
        .output("ensemble", &a.out);
    for c in &chosen {
        println!("{}\t{}", c.score, c.id);
    }
    run.write_beside(&a.out)?;
    Ok(0)
}

fn stack_train(g: &Global, a: &StackTrainArgs) -> Result<u8> {
    let base = a.spec.parent().unwrap_or(Path::new("."));
    let mut spec = EnsembleSpec::parse_unchecked(&read_text(&a.spec)?, base)?;
    spec.combiner = CombinerKind::Mean;
    spec.stacker = None;
    if spec.members.is_empty() {
        bail!("{} lists no members", a.spec.display());
    }
    // Binary members are allowed here since they only feed the stacker.
    let ensemble = Ensemble {
        members: spec
            .members
            .iter()
            .map(|m| Ok((Box::new(load_params(&m.path)?) as Box<dyn Predictor>, m.tag)))
            .collect::<ctseg::Result<_>>()?,
        combiner: ctseg::ensemble::Combiner::Mean,
        num_classes: 0,
    };
    let num_classes = ensemble.members.iter().map(|(p, _)| p.num_classes()).max().unwrap_or(2);
    let ensemble = Ensemble { num_classes, ..ensemble };
    let target = if num_classes == 2 { Target::Binary } else { Target::Multiclass };
    let prep = inference_prep(&a.window, &a.stats, a.size)?;
    let records = manifest_records(&a.manifest, a.plan.as_deref(), a.fold)?;
    let mut maps = Vec::with_capacity(records.len());
    let mut truths = Vec::with_capacity(records.len());
    for r in &records {
        let s = load_sample(r)?;
        let l = s.labels.as_ref().with_context(|| format!("{} has no labels", r.id))?;
        let (v, l) = prepare(&prep, &s.volume, Some(&target.map_labels(l)), g.seed)?;
        maps.push(ensemble.member_maps(&v)?);
        truths.push(l.expect("labels given"));
    }
    let cfg = StackerConfig {
        epochs: a.epochs,
        seed: g.seed,
        loss: loss_cfg(&a.loss)?,
        adam: AdamConfig {
            lr: a.lr,
            ..AdamConfig::default()
        },
    };
    let stacker = train_stacker(&maps, &truths, &cfg)?;
    ensure_dir(&a.out)?;
    let spath = a.out.join("stacker.prm");
    save_params(&stacker, &spath)?;
    spec.combiner = CombinerKind::Stacker;
    spec.stacker = Some(fs::canonicalize(&spath).unwrap_or(spath.clone()));
    for m in &mut spec.members {
        if let Ok(p) = fs::canonicalize(&m.path) {
            m.path = p;
        }
    }
    let epath = a.out.join("ensemble.txt");
    write_text(&epath, &spec.to_text())?;

    let trained = Ensemble {
        combiner: ctseg::ensemble::Combiner::Stacker(stacker),
        ..ensemble
    };
    let mut report = EvalReport::new(num_classes, TotalDice::PooledForeground);
    for ((r, m), t) in records.iter().zip(&maps).zip(&truths) {
        let fused = ctseg::ensemble::combine(&trained.combiner, m)?;
        report.push(score_volume(&r.id, &fused.argmax(), t, report.total_kind)?);
    }
    let mut run = RunManifest::new("stack-train", g.seed, g.threads);
    run.config("epochs", a.epochs)
        .config("lr", a.lr)
        .config("size", a.size.map_or_else(|| "native".to_string(), |s| s.to_string()))
        .input("spec", &a.spec)
        .input("manifest", &a.manifest)
        .input("stats", &a.stats)
        .output("stacker", &spath)
        .output("ensemble", &epath);
    let tsv = report.to_tsv();
    write_report(g, &tsv, &mut run)?;
    println!(
        "stacker fitted on {} volumes; in-sample total dice {:.4}",
        records.len(),
        report.total_summary()?.mean
    );
    run.write_beside(&a.out)?;
    Ok(0)
}

fn stack_predict(g: &Global, a: &StackPredictArgs) -> Result<u8> {
    let spec = ctseg::ensemble::load_ensemble_spec(&a.spec)?;
    let ensemble = Ensemble::load(&spec)?;
    let prep = inference_prep(&a.window, &a.stats, a.size)?;
    let mut run = RunManifest::new("stack-predict", g.seed, g.threads);
    run.config("combiner", spec.combiner.name())
        .config("members", spec.members.len())
        .input("spec", &a.spec)
        .input("stats", &a.stats);
    let outs = InferenceOutputs {
        out: &a.out,
        labels_out: a.labels_out.as_deref(),
        truth_out: a.truth_out.as_deref(),
    };
    infer(g, &a.inputs, &prep, outs, ensemble.num_classes, &mut run, &|v| {
        ensemble.predict(v).map(|(map, _)| map)
    })?;
    Ok(0)
}

fn selftest(g: &Global) -> Result<u8> {
    let mut run = RunManifest::new("selftest", g.seed, g.threads);
    let outcomes = run_selftest(g.seed);
    let mut text = String::new();
    for o in &outcomes {
        text.push_str(&format!(
            "{}\t{}\t{:.3}s\t{}\n",
            if o.passed { "PASS" } else { "FAIL" },
            o.name,
            o.seconds,
            o.detail
        ));
    }
    print!("{text}");
    let failed = outcomes.iter().filter(|o| !o.passed).count();
    println!("{} checks, {failed} failed", outcomes.len());
    write_report(g, &text, &mut run)?;
    if let Some(p) = &g.report {
        run.write_beside(p)?;
    }
    Ok(if failed == 0 { 0 } else { EXIT_DATA })
}
