use std::fs::{self, File, OpenOptions};
use std::io::Write;
use std::path::{Path, PathBuf};

use labelfield::checkpoint::{
    classifier_checkpoint, classifier_from_checkpoint, field_checkpoint, field_from_checkpoint, Checkpoint,
};
use labelfield::dataset::{
    format_manifest, generate_dataset, load_dataset, prior_for, DatasetConfig, LabeledImage, LabeledImageSet,
    ManifestRow, MANIFEST_FILE,
};
use labelfield::discriminators::{accuracy, pretrain_classifier, AuxClassifier, ClassifierConfig, PretrainConfig};
use labelfield::field::{ConditionalField, LatentPair, Selection};
use labelfield::geometry::{sample_pose, Intrinsics, Pose, PosePrior, Range};
use labelfield::image::encode_ppm;
use labelfield::metrics::{extract_features, frechet_distance, kid, psnr, ssim, FeatureStats};
use labelfield::nn::seeded;
use labelfield::renderer::{render_image, SamplingConfig};
use labelfield::trainer::{ablation_config, Ablation, Mode, TrainConfig, Trainer, LOG_HEADER};
use labelfield::{Error, Result};

use crate::{AblationArg, DatasetArgs, EvalArgs, LatentArg, ModeArg, PretrainArgs, RenderArgs, SweepArg, TrainArgs};

fn contract(msg: impl Into<String>) -> Error {
    Error::contract(msg)
}

fn create_dir(path: &Path) -> Result<()> {
    fs::create_dir_all(path).map_err(|e| Error::io(path, e))
}

fn write_file(path: &Path, bytes: &[u8]) -> Result<()> {
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

pub fn dataset(a: &DatasetArgs) -> Result<()> {
    let config = DatasetConfig {
        classes: a.classes,
        styles: a.styles,
        poses_per_cell: a.poses_per_cell,
        width: a.size,
        height: a.size,
        seed: a.seed,
        prior: PosePrior::with_radius(a.radius),
        ..DatasetConfig::default()
    };
    config.validate()?;
    let set = generate_dataset(&config, &a.out)?;
    println!("images\t{}", set.len());
    println!("manifest\t{}", a.out.join(MANIFEST_FILE).display());
    Ok(())
}

/// Holds out the last `fraction` of every (class, style) cell.
fn split_holdout(items: &[LabeledImage], fraction: f64) -> (Vec<LabeledImage>, Vec<LabeledImage>) {
    let mut cells: Vec<(usize, usize)> = items.iter().map(|e| (e.class, e.style)).collect();
    cells.sort_unstable();
    cells.dedup();
    let (mut train, mut held) = (Vec::new(), Vec::new());
    for cell in cells {
        let members: Vec<&LabeledImage> = items.iter().filter(|e| (e.class, e.style) == cell).collect();
        let k = ((members.len() as f64 * fraction).floor() as usize).min(members.len() - 1);
        let cut = members.len() - k;
        train.extend(members[..cut].iter().map(|&e| e.clone()));
        held.extend(members[cut..].iter().map(|&e| e.clone()));
    }
    (train, held)
}

pub fn pretrain(a: &PretrainArgs) -> Result<()> {
    if !(0.0..1.0).contains(&a.holdout) {
        return Err(contract(format!("--holdout must lie in [0, 1), got {}", a.holdout)));
    }
    let cfg = PretrainConfig {
        steps: a.steps,
        batch_size: a.batch,
        learning_rate: a.lr,
    };
    if cfg.batch_size == 0 || cfg.learning_rate <= 0.0 {
        return Err(contract("--batch must be >= 1 and --lr positive"));
    }
    let set = load_dataset(&a.data)?;
    let (m, n) = set.label_counts();
    let (train, held) = split_holdout(&set.items, a.holdout);
    let mut clf = AuxClassifier::<f32>::new(
        ClassifierConfig {
            classes: m,
            styles: n,
            resolution: a.resolution,
            widths: a.widths.clone(),
        },
        &mut seeded(a.seed),
    )?;
    let mut log = match &a.log {
        Some(p) => {
            let mut f = File::create(p).map_err(|e| Error::io(p, e))?;
            writeln!(f, "step\tloss").map_err(|e| Error::io(p, e))?;
            Some((f, p.clone()))
        }
        None => None,
    };
    let mut rng = seeded(a.seed);
    rng.set_stream(1);
    let mut io_err = None;
    let curve = pretrain_classifier(&mut clf, &train, &cfg, &mut rng, |step, loss| {
        if let Some((f, p)) = log.as_mut() {
            if let Err(e) = writeln!(f, "{step}\t{loss:.6}") {
                io_err.get_or_insert(Error::io(p.clone(), e));
            }
        }
        if step % 100 == 0 {
            eprintln!("pretrain step {step} loss {loss:.4}");
        }
    })?;
    if let Some(e) = io_err {
        return Err(e);
    }
    if curve.losses.iter().any(|v| !v.is_finite()) {
        return Err(Error::numeric("pretrain", "non-finite loss"));
    }
    let mut ck = classifier_checkpoint(&clf)?;
    ck.set("seed", a.seed);
    ck.set("steps", a.steps);
    ck.save(&a.out)?;
    if let Some(&first) = curve.losses.first() {
        let tail = &curve.losses[curve.losses.len().saturating_sub(50)..];
        println!("initial_loss\t{first:.6}");
        println!("final_loss\t{:.6}", tail.iter().sum::<f64>() / tail.len() as f64);
    }
    let (tc, ts) = accuracy(&clf, &train)?;
    println!("train_class_accuracy\t{tc:.4}");
    println!("train_style_accuracy\t{ts:.4}");
    if !held.is_empty() {
        let (hc, hs) = accuracy(&clf, &held)?;
        println!("holdout_class_accuracy\t{hc:.4}");
        println!("holdout_style_accuracy\t{hs:.4}");
    }
    Ok(())
}

/// Exclusive marker for a training output directory.
struct TrainLock(PathBuf);

impl TrainLock {
    fn acquire(dir: &Path) -> Result<Self> {
        let path = dir.join("train.lock");
        match OpenOptions::new().write(true).create_new(true).open(&path) {
            Ok(mut f) => {
                let _ = writeln!(f, "{}", std::process::id());
                Ok(Self(path))
            }
            Err(e) if e.kind() == std::io::ErrorKind::AlreadyExists => Err(Error::io(
                &path,
                std::io::Error::new(e.kind(), "another trainer holds this directory (remove the lock if stale)"),
            )),
            Err(e) => Err(Error::io(&path, e)),
        }
    }
}

impl Drop for TrainLock {
    fn drop(&mut self) {
        let _ = fs::remove_file(&self.0);
    }
}

pub fn train_config(a: &TrainArgs, classes: usize, styles: usize) -> TrainConfig {
    let base = TrainConfig::default();
    let mut c = TrainConfig {
        mode: match a.mode {
            ModeArg::Adversarial => Mode::Adversarial,
            ModeArg::Reconstruction => Mode::Reconstruction,
        },
        lambda_cls: a.lambda_cls,
        lambda_sty: a.lambda_sty,
        lambda_r1: a.lambda_r1,
        batch_size: a.batch,
        lr_generator: a.lr_g,
        lr_discriminator: a.lr_d,
        iterations: a.iterations,
        seed: a.seed,
        sampling: SamplingConfig {
            coarse: a.coarse,
            fine: a.fine,
            hierarchical: a.fine > 0,
            ..base.sampling
        },
        field: labelfield::field::FieldConfig {
            classes,
            styles,
            shape_dim: a.shape_dim,
            appearance_dim: a.appearance_dim,
            width: a.width,
            depth: a.depth,
            color_width: a.color_width,
            ..base.field.clone()
        },
        discriminator: labelfield::discriminators::PatchDiscriminatorConfig {
            patch: a.patch,
            widths: a.d_widths.clone(),
            ..base.discriminator.clone()
        },
        patch_extent: Range::new(a.extent_min, a.extent_max),
        train_classifier: a.train_classifier,
        ..base
    };
    if let Some(ab) = a.ablation {
        c = ablation_config(&c, ablation_of(ab));
    }
    c
}

fn ablation_of(a: AblationArg) -> Ablation {
    match a {
        AblationArg::NoLabelInput => Ablation::NoLabelInput,
        AblationArg::NoArrayOutput => Ablation::NoArrayOutput,
        AblationArg::NoClassifier => Ablation::NoClassifier,
    }
}

fn save_field(trainer: &Trainer, set: &LabeledImageSet, a: &TrainArgs, path: &Path) -> Result<()> {
    let cfg = trainer.config();
    let mut ck = field_checkpoint(&trainer.field)?;
    ck.set("mode", cfg.mode);
    ck.set("seed", cfg.seed);
    ck.set("iteration", trainer.iteration());
    if let Some(ab) = a.ablation {
        ck.set("ablation", ablation_of(ab).name());
    }
    let (w, h) = set.image_size().unwrap_or((64, 64));
    ck.set("image_width", w);
    ck.set("image_height", h);
    ck.set("radius", set.rows.first().map_or(4.0, |r| r.pose.radius));
    ck.set("sampling.coarse", cfg.sampling.coarse);
    ck.set("sampling.fine", cfg.sampling.fine);
    ck.set("sampling.scene_radius", cfg.sampling.scene_radius);
    // write then rename so a crash never leaves a torn checkpoint
    let tmp = path.with_extension("ckpt.tmp");
    ck.save(&tmp)?;
    fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
}

fn load_classifier(path: &Path) -> Result<AuxClassifier<f32>> {
    classifier_from_checkpoint(&Checkpoint::load(path)?)
}

pub fn train(a: &TrainArgs) -> Result<()> {
    let probe = train_config(a, 1, 1);
    probe.validate()?;
    let set = load_dataset(&a.data)?;
    let (m, n) = set.label_counts();
    let config = train_config(a, m, n);
    config.validate()?;
    let classifier = match &a.classifier {
        Some(p) => Some(load_classifier(p)?),
        None if config.uses_classifier() => {
            return Err(contract(
                "--classifier is required unless --lambda-cls and --lambda-sty are 0 or --ablation no-classifier",
            ))
        }
        None => None,
    };
    create_dir(&a.out)?;
    let _lock = TrainLock::acquire(&a.out)?;
    let mut trainer = Trainer::new(config.clone(), &set.items, prior_for(&set), classifier)?;
    let log_path = a.out.join("metrics.tsv");
    let mut log = File::create(&log_path).map_err(|e| Error::io(&log_path, e))?;
    writeln!(log, "{LOG_HEADER}").map_err(|e| Error::io(&log_path, e))?;
    let ckpt = a.out.join("field.ckpt");
    for i in 0..config.iterations {
        let report = match trainer.step(&set.items) {
            Ok(r) => r,
            Err(e @ Error::Numeric { .. }) => {
                let replay = a.out.join("replay.txt");
                write_file(&replay, trainer.replay_state().to_text().as_bytes())?;
                eprintln!("numeric abort; replay state written to {}", replay.display());
                return Err(e);
            }
            Err(e) => return Err(e),
        };
        writeln!(log, "{}", report.log_line()).map_err(|e| Error::io(&log_path, e))?;
        if i % 100 == 0 {
            eprintln!("iter {i} total {:.4}", report.total);
        }
        if a.checkpoint_every > 0 && (i + 1) % a.checkpoint_every == 0 {
            save_field(&trainer, &set, a, &ckpt)?;
        }
    }
    save_field(&trainer, &set, a, &ckpt)?;
    println!("checkpoint\t{}", ckpt.display());
    println!("metrics\t{}", log_path.display());
    Ok(())
}

struct Frame {
    sel: Selection,
    pose: Pose,
    latent: LatentPair,
    /// Sweep parameter and its value, for the sweep index.
    param: &'static str,
    value: f64,
}

fn header_or<T: std::str::FromStr>(ck: &Checkpoint, key: &str, fallback: T) -> Result<T> {
    match ck.get(key) {
        Some(_) => ck.parse(key),
        None => Ok(fallback),
    }
}

fn need_values(v: &[f64], what: &str) -> Result<()> {
    if v.is_empty() {
        return Err(contract(format!("--values is required for the {what} sweep")));
    }
    if v.iter().any(|x| !x.is_finite()) {
        return Err(contract("--values must be finite"));
    }
    Ok(())
}

fn plan_frames(a: &RenderArgs, field: &ConditionalField<f32>, base: Pose, latent: &LatentPair) -> Result<Vec<Frame>> {
    let plain = Selection::labels(a.class, a.style);
    let at = |pose: Pose, param, value| Frame {
        sel: plain,
        pose,
        latent: latent.clone(),
        param,
        value,
    };
    let posed = |r: f64, y: f64, p: f64, s: f64| Pose::new(r, y, p, s);
    let mut frames = Vec::new();
    match a.sweep {
        SweepArg::Single => frames.push(at(base, "none", 0.0)),
        SweepArg::Samples => {
            if a.frames == 0 {
                return Err(contract("--frames must be >= 1"));
            }
            let c = field.config();
            let mut rng = seeded(a.seed);
            let prior = PosePrior::with_radius(base.radius);
            for f in 0..a.frames {
                let cell = f % (c.classes * c.styles);
                let z = LatentPair::sample(c.shape_dim, c.appearance_dim, &mut rng);
                let pose = sample_pose(&prior, &mut rng)?;
                frames.push(Frame {
                    sel: Selection::labels(cell / c.styles, cell % c.styles),
                    pose,
                    latent: z,
                    param: "sample",
                    value: f as f64,
                });
            }
        }
        SweepArg::YawTurntable => {
            let yaws: Vec<f64> = if a.values.is_empty() {
                if a.frames == 0 {
                    return Err(contract("--frames must be >= 1"));
                }
                (0..a.frames).map(|i| -180.0 + 360.0 * i as f64 / a.frames as f64).collect()
            } else {
                a.values.clone()
            };
            for y in yaws {
                frames.push(at(posed(base.radius, y, base.pitch_deg, base.shift)?, "yaw", y));
            }
        }
        SweepArg::PitchSweep => {
            need_values(&a.values, "pitch")?;
            for &p in &a.values {
                frames.push(at(posed(base.radius, base.yaw_deg, p, base.shift)?, "pitch", p));
            }
        }
        SweepArg::Depth => {
            need_values(&a.values, "depth")?;
            for &r in &a.values {
                frames.push(at(posed(r, base.yaw_deg, base.pitch_deg, base.shift)?, "radius", r));
            }
        }
        SweepArg::Shift => {
            need_values(&a.values, "shift")?;
            for &d in &a.values {
                frames.push(at(posed(base.radius, base.yaw_deg, base.pitch_deg, d)?, "shift", d));
            }
        }
        SweepArg::ColorInterp | SweepArg::DensityInterp => {
            let (Some(from), Some(to)) = (a.from, a.to) else {
                return Err(contract("interpolation sweeps need --from and --to"));
            };
            if a.lambdas.is_empty() {
                return Err(contract("interpolation sweeps need --lambdas"));
            }
            for &lambda in &a.lambdas {
                if !(0.0..=1.0).contains(&lambda) {
                    return Err(contract(format!("lambda {lambda} outside [0, 1]")));
                }
                let sel = if a.sweep == SweepArg::ColorInterp {
                    Selection::ColorBlend {
                        class: a.class,
                        from,
                        to,
                        lambda,
                    }
                } else {
                    Selection::DensityBlend {
                        from,
                        to,
                        style: a.style,
                        lambda,
                    }
                };
                frames.push(Frame {
                    sel,
                    ..at(base, "lambda", lambda)
                });
            }
        }
    }
    for f in &frames {
        f.sel.validate(field.config())?;
    }
    Ok(frames)
}

fn frame_labels(sel: Selection) -> (usize, usize) {
    match sel {
        Selection::Labels { class, style } => (class, style),
        Selection::ColorBlend { class, from, .. } => (class, from),
        Selection::DensityBlend { from, style, .. } => (from, style),
    }
}

pub fn render(a: &RenderArgs) -> Result<()> {
    let ck = Checkpoint::load(&a.checkpoint)?;
    let field = field_from_checkpoint(&ck)?;
    let size = match a.size {
        Some(s) => s,
        None => header_or(&ck, "image_width", 64usize)?,
    };
    let radius = match a.radius {
        Some(r) => r,
        None => header_or(&ck, "radius", 4.0f64)?,
    };
    let sampling = SamplingConfig {
        coarse: a.coarse.map_or_else(|| header_or(&ck, "sampling.coarse", 32usize), Ok)?,
        fine: a.fine.map_or_else(|| header_or(&ck, "sampling.fine", 32usize), Ok)?,
        scene_radius: header_or(&ck, "sampling.scene_radius", SamplingConfig::default().scene_radius)?,
        jitter: false,
        ..SamplingConfig::default()
    };
    let sampling = SamplingConfig {
        hierarchical: sampling.fine > 0,
        ..sampling
    };
    sampling.validate()?;
    let k = Intrinsics::for_image(size, size)?;
    let base = Pose::new(radius, a.yaw, a.pitch, a.shift)?;
    let reconstruction = ck.get("mode") == Some("reconstruction");
    let latent = match a.latent {
        Some(LatentArg::Anchor) => field.anchor.clone(),
        Some(LatentArg::Sample) => LatentPair::sample(field.config().shape_dim, field.config().appearance_dim, &mut seeded(a.seed)),
        None if reconstruction => field.anchor.clone(),
        None => LatentPair::sample(field.config().shape_dim, field.config().appearance_dim, &mut seeded(a.seed)),
    };
    let frames = plan_frames(a, &field, base, &latent)?;
    create_dir(&a.out)?;
    let digits = frames.len().to_string().len().max(4);
    let mut rows = Vec::with_capacity(frames.len());
    let mut index = String::from("index\tparameter\tvalue\tpath\n");
    for (i, f) in frames.iter().enumerate() {
        // every frame starts from the same stream so sweeps differ only in
        // the swept quantity
        let img = render_image(&field, &f.latent, f.sel, &k, &f.pose, &sampling, &mut seeded(a.seed))?;
        let name = format!("{i:0digits$}.ppm");
        write_file(&a.out.join(&name), &encode_ppm(&img))?;
        let (class, style) = frame_labels(f.sel);
        index.push_str(&format!("{i}\t{}\t{}\t{name}\n", f.param, f.value));
        rows.push(ManifestRow {
            path: name,
            class,
            style,
            pose: f.pose,
        });
    }
    write_file(&a.out.join(MANIFEST_FILE), format_manifest(&rows).as_bytes())?;
    write_file(&a.out.join("sweep.tsv"), index.as_bytes())?;
    println!("frames\t{}", frames.len());
    println!("manifest\t{}", a.out.join(MANIFEST_FILE).display());
    Ok(())
}

pub fn eval(a: &EvalArgs) -> Result<()> {
    if a.classifier.is_none() && !a.paired {
        return Err(contract("nothing to evaluate: pass --classifier and/or --paired"));
    }
    let real = load_dataset(&a.real)?;
    let gen = load_dataset(&a.generated)?;
    if real.is_empty() || gen.is_empty() {
        return Err(contract("eval: empty image set"));
    }
    let mut lines: Vec<(String, f64)> = vec![
        ("real_images".into(), real.len() as f64),
        ("generated_images".into(), gen.len() as f64),
    ];
    if let Some(p) = &a.classifier {
        let clf = load_classifier(p)?;
        let real_imgs: Vec<_> = real.items.iter().map(|e| &e.image).collect();
        let gen_imgs: Vec<_> = gen.items.iter().map(|e| &e.image).collect();
        let fr = extract_features(&real_imgs, &clf)?;
        let fg = extract_features(&gen_imgs, &clf)?;
        let fid = frechet_distance(&FeatureStats::from_features(&fr)?, &FeatureStats::from_features(&fg)?)?;
        lines.push(("fid".into(), fid));
        lines.push(("kid".into(), kid(&fr, &fg)?));
        let (c, s) = accuracy(&clf, &gen.items)?;
        let mut both = 0usize;
        for chunk in gen.items.chunks(32) {
            let imgs: Vec<_> = chunk.iter().map(|e| &e.image).collect();
            let pred = clf.predict(&imgs)?;
            for ((e, pc), ps) in chunk.iter().zip(pred.class_ids()).zip(pred.style_ids()) {
                both += (e.class == pc && e.style == ps) as usize;
            }
        }
        lines.push(("class_agreement".into(), c));
        lines.push(("style_agreement".into(), s));
        lines.push(("label_agreement".into(), both as f64 / gen.len() as f64));
    }
    if a.paired {
        if real.len() != gen.len() {
            return Err(contract(format!(
                "--paired needs equal set sizes, got {} and {}",
                real.len(),
                gen.len()
            )));
        }
        let (mut p, mut s) = (0.0, 0.0);
        for (r, g) in real.items.iter().zip(&gen.items) {
            p += psnr(&r.image, &g.image, 1.0)?;
            s += ssim(&r.image, &g.image, 1.0)?;
        }
        lines.push(("psnr".into(), p / real.len() as f64));
        lines.push(("ssim".into(), s / real.len() as f64));
    }
    let text: String = lines.iter().map(|(k, v)| format!("{k}\t{v}\n")).collect();
    print!("{text}");
    if let Some(p) = &a.report {
        write_file(p, format!("metric\tvalue\n{text}").as_bytes())?;
    }
    Ok(())
}
