//! Adversarial patch training and posed reconstruction training.

use std::fmt;
use std::str::FromStr;
use std::time::Instant;

use rand::{Rng, SeedableRng};

use crate::autodiff::{ParamSet, Real, RmsProp, Tape, Tensor, Var};
use crate::dataset::{sample_batch, LabeledImage};
use crate::discriminators::{classifier_input, AuxClassifier, PatchDiscriminator, PatchDiscriminatorConfig};
use crate::error::{ensure, Error, Result};
use crate::field::{ConditionalField, FieldConfig, LatentPair, Selection};
use crate::geometry::{
    extract_patch, generate_patch_rays, sample_pattern, sample_pose, scene_bounds, Intrinsics, PatchPattern, Pose,
    PosePrior, Range,
};
use crate::nn::{seeded, SeededRng};
use crate::renderer::{render_rays, rows_to_chw, SamplingConfig};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Mode {
    Adversarial,
    Reconstruction,
}

impl FromStr for Mode {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "adversarial" => Ok(Mode::Adversarial),
            "reconstruction" => Ok(Mode::Reconstruction),
            _ => Err(Error::contract(format!(
                "unknown mode {s:?} (expected adversarial or reconstruction)"
            ))),
        }
    }
}

impl fmt::Display for Mode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Mode::Adversarial => "adversarial",
            Mode::Reconstruction => "reconstruction",
        })
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub mode: Mode,
    /// Weight of the class cross-entropy.
    pub lambda_cls: f64,
    /// Weight of the style cross-entropy.
    pub lambda_sty: f64,
    pub lambda_r1: f64,
    /// Step of the forward difference used for the penalty's parameter
    /// gradient.
    pub r1_epsilon: f64,
    pub batch_size: usize,
    pub lr_generator: f64,
    pub lr_discriminator: f64,
    pub iterations: usize,
    pub seed: u64,
    pub sampling: SamplingConfig,
    pub field: FieldConfig,
    /// `patch` here is also the rendered patch size in reconstruction mode.
    pub discriminator: PatchDiscriminatorConfig,
    /// Patch footprint as a fraction of the shorter image side.
    pub patch_extent: Range,
    /// Keep fitting the classifier on real images during training.
    pub train_classifier: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            mode: Mode::Adversarial,
            lambda_cls: 2.0,
            lambda_sty: 3.0,
            lambda_r1: 10.0,
            r1_epsilon: 1e-3,
            batch_size: 8,
            lr_generator: 5e-4,
            lr_discriminator: 1e-4,
            iterations: 10_000,
            seed: 0,
            sampling: SamplingConfig::default(),
            field: FieldConfig::default(),
            discriminator: PatchDiscriminatorConfig::default(),
            patch_extent: Range::new(0.125, 1.0),
            train_classifier: false,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        for (name, v) in [
            ("lambda_cls", self.lambda_cls),
            ("lambda_sty", self.lambda_sty),
            ("lambda_r1", self.lambda_r1),
        ] {
            ensure!(v.is_finite() && v >= 0.0, "train: {name} must be finite and >= 0, got {v}");
        }
        ensure!(self.batch_size >= 1, "train: batch size must be >= 1");
        ensure!(
            self.lr_generator > 0.0 && self.lr_discriminator > 0.0,
            "train: learning rates must be positive"
        );
        ensure!(
            self.r1_epsilon > 0.0 && self.r1_epsilon.is_finite(),
            "train: r1 epsilon must be positive"
        );
        ensure!(self.discriminator.patch >= 2, "train: patch size must be >= 2");
        ensure!(
            self.patch_extent.lo > 0.0 && self.patch_extent.lo <= self.patch_extent.hi && self.patch_extent.hi <= 1.0,
            "train: patch extent [{}, {}] must lie in (0, 1]",
            self.patch_extent.lo,
            self.patch_extent.hi
        );
        self.sampling.validate()?;
        self.field.validate()
    }

    pub fn patch_size(&self) -> usize {
        self.discriminator.patch
    }

    pub fn uses_classifier(&self) -> bool {
        self.lambda_cls > 0.0 || self.lambda_sty > 0.0 || self.train_classifier
    }
}

/// The three mechanism ablations.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Ablation {
    NoLabelInput,
    NoArrayOutput,
    NoClassifier,
}

impl Ablation {
    pub const ALL: [Ablation; 3] = [Ablation::NoLabelInput, Ablation::NoArrayOutput, Ablation::NoClassifier];

    pub fn name(self) -> &'static str {
        match self {
            Ablation::NoLabelInput => "no_label_input",
            Ablation::NoArrayOutput => "no_array_output",
            Ablation::NoClassifier => "no_classifier",
        }
    }
}

impl FromStr for Ablation {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        Ablation::ALL
            .into_iter()
            .find(|a| a.name() == s)
            .ok_or_else(|| Error::contract(format!("unknown ablation {s:?}")))
    }
}

/// `base` with one mechanism switched off.
pub fn ablation_config(base: &TrainConfig, which: Ablation) -> TrainConfig {
    let mut c = base.clone();
    match which {
        Ablation::NoLabelInput => c.field.label_input = false,
        Ablation::NoArrayOutput => c.field.label_arrays = false,
        Ablation::NoClassifier => {
            c.lambda_cls = 0.0;
            c.lambda_sty = 0.0;
            c.train_classifier = false;
        }
    }
    c
}

/// Losses of one iteration. In reconstruction mode `l_adv` holds the MSE
/// and `loss_d` is zero.
#[derive(Clone, Debug, PartialEq)]
pub struct StepReport {
    pub iteration: usize,
    pub l_adv: f64,
    pub l_cls: f64,
    pub l_sty: f64,
    pub r1: f64,
    pub total: f64,
    pub loss_d: f64,
    pub seconds: f64,
}

pub const LOG_HEADER: &str = "iter\tl_adv\tl_cls\tl_sty\tr1\ttotal\tseconds";

impl StepReport {
    pub fn log_line(&self) -> String {
        format!(
            "{}\t{:.6}\t{:.6}\t{:.6}\t{:.6}\t{:.6}\t{:.4}",
            self.iteration, self.l_adv, self.l_cls, self.l_sty, self.r1, self.total, self.seconds
        )
    }

    pub fn is_finite(&self) -> bool {
        [self.l_adv, self.l_cls, self.l_sty, self.r1, self.total, self.loss_d]
            .iter()
            .all(|v| v.is_finite())
    }
}

/// `log(1 + e^x)` without overflow.
pub fn softplus(x: f64) -> f64 {
    x.max(0.0) + (-x.abs()).exp().ln_1p()
}

/// Non-saturating generator loss and R1-regularized discriminator loss.
pub fn gan_losses(d_r: f64, d_f: f64, grad_norm2: f64, lambda_r1: f64) -> Result<(f64, f64)> {
    for (name, v) in [("real logit", d_r), ("fake logit", d_f), ("gradient norm", grad_norm2)] {
        if !v.is_finite() {
            return Err(Error::numeric("gan_losses", format!("{name} is {v}")));
        }
    }
    ensure!(grad_norm2 >= 0.0, "gan_losses: negative squared gradient norm {grad_norm2}");
    let loss_g = softplus(-d_f);
    let mut loss_d = softplus(d_f) + softplus(-d_r);
    if lambda_r1 != 0.0 {
        loss_d += lambda_r1 * grad_norm2;
    }
    Ok((loss_g, loss_d))
}

/// Input gradient of a batched scorer.
#[derive(Clone, Debug, PartialEq)]
pub struct InputGradient<T: Real> {
    /// `‖∇ₓD(xᵢ)‖²` per batch element.
    pub norms2: Vec<f64>,
    /// Gradient with the shape of the input.
    pub grad: Vec<T>,
}

impl<T: Real> InputGradient<T> {
    /// Mean squared norm over the batch.
    pub fn penalty(&self) -> f64 {
        self.norms2.iter().sum::<f64>() / self.norms2.len() as f64
    }

    /// `x + ε·ĝ` per element, where `ĝ` is the unit input gradient. Elements
    /// with a zero gradient are left in place.
    pub fn shifted(&self, x: &[T], eps: f64) -> Vec<T> {
        let per = x.len() / self.norms2.len();
        let mut out = x.to_vec();
        for (b, &n2) in self.norms2.iter().enumerate() {
            if n2 == 0.0 {
                continue;
            }
            let step = eps / n2.sqrt();
            for i in b * per..(b + 1) * per {
                out[i] = T::lit(x[i].as_f64() + step * self.grad[i].as_f64());
            }
        }
        out
    }
}

/// Exact squared input-gradient norms of `forward` (which must return one
/// logit per batch element) at `x`.
pub fn r1_penalty<T: Real>(
    mut forward: impl FnMut(&mut Tape<T>, Var) -> Result<Var>,
    x: &Tensor<T>,
) -> Result<InputGradient<T>> {
    let b = x.shape()[0];
    ensure!(b >= 1 && x.len() % b == 0, "r1: bad input shape {:?}", x.shape());
    let mut tape = Tape::new();
    let v = tape.variable(x.shape().to_vec(), x.values().to_vec())?;
    let d = forward(&mut tape, v)?;
    ensure!(tape.value(d).len() == b, "r1: scorer must return one logit per element");
    let s = tape.sum(d)?;
    tape.backward(s)?;
    let grad = tape.grad(v).map_or_else(|| vec![T::zero(); x.len()], <[T]>::to_vec);
    let per = x.len() / b;
    let norms2 = grad
        .chunks(per)
        .map(|g| g.iter().map(|v| v.as_f64() * v.as_f64()).sum())
        .collect();
    Ok(InputGradient { norms2, grad })
}

/// `mean(((D(x + εĝ) − D(x))/ε)²)`: matches the squared gradient norm in
/// value and, with `ĝ` held fixed, approximates its parameter gradient with
/// first-order derivatives only.
pub fn r1_surrogate<T: Real>(tape: &mut Tape<T>, d_x: Var, d_shifted: Var, eps: f64) -> Result<Var> {
    let diff = tape.sub(d_shifted, d_x)?;
    let q = tape.scale(diff, 1.0 / eps)?;
    let sq = tape.square(q)?;
    tape.mean(sq)
}

/// RNG position at the start of an iteration, enough to replay it.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ReplayState {
    pub iteration: usize,
    pub seed: [u8; 32],
    pub stream: u64,
    pub word_pos: u128,
}

impl ReplayState {
    fn capture(iteration: usize, rng: &SeededRng) -> Self {
        Self {
            iteration,
            seed: rng.get_seed(),
            stream: rng.get_stream(),
            word_pos: rng.get_word_pos(),
        }
    }

    pub fn to_text(&self) -> String {
        let seed: String = self.seed.iter().map(|b| format!("{b:02x}")).collect();
        format!(
            "iteration={}\nseed={seed}\nstream={}\nword_pos={}\n",
            self.iteration, self.stream, self.word_pos
        )
    }

    pub fn from_text(text: &str) -> Result<Self> {
        let bad = |m: &str| Error::Format(format!("replay state: {m}"));
        let get = |key: &str| -> Result<String> {
            text.lines()
                .find_map(|l| l.strip_prefix(key).and_then(|r| r.strip_prefix('=')))
                .map(str::to_string)
                .ok_or_else(|| bad(&format!("missing {key}")))
        };
        let hex = get("seed")?;
        ensure!(hex.len() == 64, "replay state: seed must be 64 hex digits");
        let mut seed = [0u8; 32];
        for (i, b) in seed.iter_mut().enumerate() {
            *b = u8::from_str_radix(&hex[2 * i..2 * i + 2], 16).map_err(|_| bad("bad seed"))?;
        }
        Ok(Self {
            iteration: get("iteration")?.parse().map_err(|_| bad("bad iteration"))?,
            seed,
            stream: get("stream")?.parse().map_err(|_| bad("bad stream"))?,
            word_pos: get("word_pos")?.parse().map_err(|_| bad("bad word_pos"))?,
        })
    }

    fn rng(&self) -> SeededRng {
        let mut r = SeededRng::from_seed(self.seed);
        r.set_stream(self.stream);
        r.set_word_pos(self.word_pos);
        r
    }
}

/// What the generator draws for one fake sample.
#[derive(Clone, Debug)]
struct Draw {
    latent: LatentPair,
    class: usize,
    style: usize,
    pose: Pose,
    pattern: PatchPattern,
}

fn numeric(what: &str, iteration: usize) -> Error {
    Error::numeric("train_step", format!("non-finite {what} at iteration {iteration}"))
}

fn grads_finite(p: &ParamSet<f32>) -> bool {
    p.iter().all(|(_, t)| t.grad().is_none_or(|g| g.iter().all(|v| v.is_finite())))
}

/// Model state plus optimizers for one training run.
pub struct Trainer {
    config: TrainConfig,
    pub field: ConditionalField<f32>,
    pub discriminator: Option<PatchDiscriminator<f32>>,
    pub classifier: Option<AuxClassifier<f32>>,
    opt_g: RmsProp<f32>,
    opt_d: RmsProp<f32>,
    opt_c: RmsProp<f32>,
    rng: SeededRng,
    iteration: usize,
    intrinsics: Intrinsics,
    prior: PosePrior,
    labels: Vec<(usize, usize)>,
    replay: ReplayState,
}

impl Trainer {
    /// `data` fixes the image size and the label pairs that get sampled.
    pub fn new(
        config: TrainConfig,
        data: &[LabeledImage],
        prior: PosePrior,
        classifier: Option<AuxClassifier<f32>>,
    ) -> Result<Self> {
        config.validate()?;
        ensure!(!data.is_empty(), "train: empty dataset");
        let (w, h) = (data[0].image.width(), data[0].image.height());
        ensure!(
            data.iter().all(|d| d.image.width() == w && d.image.height() == h),
            "train: images differ in size"
        );
        let fc = &config.field;
        let mut labels: Vec<(usize, usize)> = data.iter().map(|d| (d.class, d.style)).collect();
        labels.sort_unstable();
        labels.dedup();
        for &(c, s) in &labels {
            ensure!(
                c < fc.classes && s < fc.styles,
                "train: label ({c}, {s}) outside the field's {}x{}",
                fc.classes,
                fc.styles
            );
        }
        if config.uses_classifier() {
            let clf = classifier
                .as_ref()
                .ok_or_else(|| Error::contract("train: classifier losses enabled but no classifier given"))?;
            ensure!(clf.trained, "train: classifier has not been pretrained");
            ensure!(
                clf.config().classes == fc.classes && clf.config().styles == fc.styles,
                "train: classifier is {}x{}, field is {}x{}",
                clf.config().classes,
                clf.config().styles,
                fc.classes,
                fc.styles
            );
        }
        if config.mode == Mode::Reconstruction {
            ensure!(data.iter().all(|d| d.pose.is_some()), "train: reconstruction needs posed images");
        }
        let mut init = seeded(config.seed);
        let field = ConditionalField::new(config.field.clone(), &mut init)?;
        let discriminator = match config.mode {
            Mode::Adversarial => Some(PatchDiscriminator::new(config.discriminator.clone(), &mut init)?),
            Mode::Reconstruction => None,
        };
        let mut rng = seeded(config.seed);
        rng.set_stream(1);
        let replay = ReplayState::capture(0, &rng);
        Ok(Self {
            opt_g: RmsProp::new(config.lr_generator),
            opt_d: RmsProp::new(config.lr_discriminator),
            opt_c: RmsProp::new(config.lr_discriminator),
            intrinsics: Intrinsics::for_image(w, h)?,
            config,
            field,
            discriminator,
            classifier,
            rng,
            iteration: 0,
            prior,
            labels,
            replay,
        })
    }

    pub fn config(&self) -> &TrainConfig {
        &self.config
    }

    pub fn iteration(&self) -> usize {
        self.iteration
    }

    pub fn intrinsics(&self) -> &Intrinsics {
        &self.intrinsics
    }

    /// RNG state at the start of the most recent step.
    pub fn replay_state(&self) -> &ReplayState {
        &self.replay
    }

    /// Rewinds the step RNG, e.g. to repeat an aborted iteration.
    pub fn restore(&mut self, state: &ReplayState) {
        self.rng = state.rng();
        self.iteration = state.iteration;
    }

    pub fn rng_mut(&mut self) -> &mut SeededRng {
        &mut self.rng
    }

    /// One iteration on a batch drawn from `data`.
    pub fn step(&mut self, data: &[LabeledImage]) -> Result<StepReport> {
        self.replay = ReplayState::capture(self.iteration, &self.rng);
        let batch = sample_batch(data, self.config.batch_size, &mut self.rng)?;
        match self.config.mode {
            Mode::Adversarial => self.train_step_adversarial(&batch),
            Mode::Reconstruction => self.train_step_reconstruction(&batch),
        }
    }

    fn draw_pattern(&mut self) -> Result<PatchPattern> {
        let k = &self.intrinsics;
        sample_pattern(k.width, k.height, self.config.patch_size(), self.config.patch_extent, &mut self.rng)
    }

    /// Renders the patch of `d` as `[1, 3, K, K]` and, when `full_view`, a
    /// whole-image view at the same resolution.
    fn render_draw(&mut self, tape: &mut Tape<f32>, bound: &crate::autodiff::Bound, d: &Draw, full_view: bool) -> Result<(Var, Option<Var>)> {
        let k = self.config.patch_size();
        let (tn, tf) = scene_bounds(&d.pose, self.config.sampling.scene_radius)?;
        let mut rays = generate_patch_rays(&self.intrinsics, &d.pose, &d.pattern, tn, tf)?;
        if full_view {
            let whole = PatchPattern::full_image(self.intrinsics.width, self.intrinsics.height, k)?;
            rays.extend(generate_patch_rays(&self.intrinsics, &d.pose, &whole, tn, tf)?);
        }
        let sel = Selection::labels(d.class, d.style);
        let out = render_rays(tape, &self.field, bound, &d.latent, sel, &rays, &self.config.sampling, &mut self.rng)?;
        let n = k * k;
        let patch_rows = if full_view { tape.slice(out.rgb, 0, 0, n)? } else { out.rgb };
        let patch = rows_to_chw(tape, patch_rows, k, k)?;
        let full = if full_view {
            let rows = tape.slice(out.rgb, 0, n, n)?;
            Some(rows_to_chw(tape, rows, k, k)?)
        } else {
            None
        };
        Ok((patch, full))
    }

    /// Classifier cross-entropies of `views` `[B, 3, K, K]` against the
    /// requested labels.
    fn classifier_losses(&self, tape: &mut Tape<f32>, views: Var, classes: &[usize], styles: &[usize]) -> Result<(Var, Var)> {
        let clf = self.classifier.as_ref().expect("checked at construction");
        let r = clf.config().resolution;
        let x = tape.resize_bilinear(views, r, r)?;
        let bound = clf.params().bind_frozen(tape)?;
        let out = clf.forward(tape, &bound, x)?;
        Ok((
            tape.softmax_cross_entropy(out.class_logits, classes)?,
            tape.softmax_cross_entropy(out.style_logits, styles)?,
        ))
    }

    /// One discriminator update on fixed real and fake patches
    /// `[B, 3, K, K]`. Returns `(loss_D, exact R1 penalty)`.
    pub fn discriminator_step(&mut self, real: &[f32], fake: &[f32]) -> Result<(f64, f64)> {
        let it = self.iteration;
        let cfg = &self.config;
        let disc = self.discriminator.as_mut().ok_or_else(|| Error::contract("no discriminator in this mode"))?;
        let k = cfg.patch_size();
        let b = real.len() / (3 * k * k);
        ensure!(b >= 1 && real.len() == b * 3 * k * k && fake.len() == real.len(), "discriminator_step: bad patch buffers");
        let x_real = Tensor::new(vec![b, 3, k, k], real.to_vec())?;
        let r1 = {
            let d: &PatchDiscriminator<f32> = disc;
            r1_penalty(
                |tape, x| {
                    let bound = d.params().bind_frozen(tape)?;
                    d.forward(tape, &bound, x)
                },
                &x_real,
            )?
        };
        let use_r1 = cfg.lambda_r1 > 0.0;
        let mut input = Vec::with_capacity(real.len() * 3);
        input.extend_from_slice(real);
        input.extend_from_slice(fake);
        if use_r1 {
            input.extend(r1.shifted(real, cfg.r1_epsilon));
        }
        let parts = if use_r1 { 3 } else { 2 };
        let mut tape = Tape::new();
        let bound = disc.params().bind(&mut tape)?;
        let x = tape.constant(vec![parts * b, 3, k, k], input)?;
        let logits = disc.forward(&mut tape, &bound, x)?;
        let d_r = tape.slice(logits, 0, 0, b)?;
        let d_f = tape.slice(logits, 0, b, b)?;
        let sp_f = tape.softplus(d_f)?;
        let l_f = tape.mean(sp_f)?;
        let neg_r = tape.neg(d_r)?;
        let sp_r = tape.softplus(neg_r)?;
        let l_r = tape.mean(sp_r)?;
        let mut loss = tape.add(l_f, l_r)?;
        if use_r1 {
            let d_p = tape.slice(logits, 0, 2 * b, b)?;
            let s = r1_surrogate(&mut tape, d_r, d_p, cfg.r1_epsilon)?;
            let s = tape.scale(s, cfg.lambda_r1)?;
            loss = tape.add(loss, s)?;
        }
        let data_loss = tape.value(l_f)[0] as f64 + tape.value(l_r)[0] as f64;
        let loss_d = data_loss + cfg.lambda_r1 * r1.penalty();
        if !loss_d.is_finite() {
            return Err(numeric("discriminator loss", it));
        }
        tape.backward(loss)?;
        disc.params_mut().collect_grads(&tape, &bound)?;
        if !grads_finite(disc.params()) {
            disc.params_mut().clear_grads();
            return Err(numeric("discriminator gradient", it));
        }
        self.opt_d.step(disc.params_mut().tensors_mut())?;
        disc.update_spectral();
        Ok((loss_d, r1.penalty()))
    }

    /// Keeps the classifier fitted to real images.
    fn classifier_step(&mut self, batch: &[&LabeledImage]) -> Result<()> {
        let it = self.iteration;
        let clf = self.classifier.as_mut().expect("checked at construction");
        let r = clf.config().resolution;
        let images: Vec<_> = batch.iter().map(|e| &e.image).collect();
        let mut tape = Tape::new();
        clf.params_mut().set_trainable(true);
        let bound = clf.params().bind(&mut tape)?;
        let x = tape.constant(vec![batch.len(), 3, r, r], classifier_input(&images, r))?;
        let out = clf.forward(&mut tape, &bound, x)?;
        let cls: Vec<usize> = batch.iter().map(|e| e.class).collect();
        let sty: Vec<usize> = batch.iter().map(|e| e.style).collect();
        let lc = tape.softmax_cross_entropy(out.class_logits, &cls)?;
        let ls = tape.softmax_cross_entropy(out.style_logits, &sty)?;
        let loss = tape.add(lc, ls)?;
        if !tape.value(loss)[0].is_finite() {
            return Err(numeric("classifier loss", it));
        }
        tape.backward(loss)?;
        clf.params_mut().collect_grads(&tape, &bound)?;
        if !grads_finite(clf.params()) {
            clf.params_mut().clear_grads();
            return Err(numeric("classifier gradient", it));
        }
        self.opt_c.step(clf.params_mut().tensors_mut())
    }

    /// Discriminator step then generator step. `batch` supplies the real
    /// patches; fake labels are drawn from the dataset's label pairs.
    pub fn train_step_adversarial(&mut self, batch: &[&LabeledImage]) -> Result<StepReport> {
        ensure!(self.config.mode == Mode::Adversarial, "train: not in adversarial mode");
        ensure!(!batch.is_empty(), "train: empty batch");
        let start = Instant::now();
        let it = self.iteration;
        let b = batch.len();
        let k = self.config.patch_size();
        let fc = self.config.field.clone();

        let mut draws = Vec::with_capacity(b);
        for _ in 0..b {
            let (class, style) = self.labels[self.rng.random_range(0..self.labels.len())];
            let latent = LatentPair::sample(fc.shape_dim, fc.appearance_dim, &mut self.rng);
            let pose = sample_pose(&self.prior, &mut self.rng)?;
            let pattern = self.draw_pattern()?;
            draws.push(Draw { latent, class, style, pose, pattern });
        }
        let mut real = Vec::with_capacity(b * 3 * k * k);
        for (e, d) in batch.iter().zip(&draws) {
            real.extend(extract_patch(&e.image, &d.pattern)?.to_chw());
        }

        let use_clf = self.config.lambda_cls > 0.0 || self.config.lambda_sty > 0.0;
        let mut tape = Tape::new();
        self.field.params_mut().set_trainable(true);
        let bound = self.field.params().bind(&mut tape)?;
        let mut patches = Vec::with_capacity(b);
        let mut views = Vec::with_capacity(b);
        for d in &draws {
            let (p, v) = self.render_draw(&mut tape, &bound, d, use_clf)?;
            patches.push(p);
            views.extend(v);
        }
        let fake = tape.concat(&patches, 0)?;
        let fake_values = tape.value(fake).to_vec();
        if !fake_values.iter().all(|v| v.is_finite()) {
            return Err(numeric("rendered patch", it));
        }

        let (loss_d, r1) = self.discriminator_step(&real, &fake_values)?;
        if self.config.train_classifier {
            self.classifier_step(batch)?;
        }

        let disc = self.discriminator.as_ref().expect("adversarial mode");
        let d_bound = disc.params().bind_frozen(&mut tape)?;
        let d_f = disc.forward(&mut tape, &d_bound, fake)?;
        let neg = tape.neg(d_f)?;
        let sp = tape.softplus(neg)?;
        let l_adv = tape.mean(sp)?;
        let mut total = l_adv;
        let (mut v_cls, mut v_sty) = (0.0, 0.0);
        if use_clf {
            let views = tape.concat(&views, 0)?;
            let classes: Vec<usize> = draws.iter().map(|d| d.class).collect();
            let styles: Vec<usize> = draws.iter().map(|d| d.style).collect();
            let (lc, ls) = self.classifier_losses(&mut tape, views, &classes, &styles)?;
            v_cls = tape.value(lc)[0] as f64;
            v_sty = tape.value(ls)[0] as f64;
            let wc = tape.scale(lc, self.config.lambda_cls)?;
            let ws = tape.scale(ls, self.config.lambda_sty)?;
            total = tape.add(total, wc)?;
            total = tape.add(total, ws)?;
        }
        let v_adv = tape.value(l_adv)[0] as f64;
        self.finish_generator(tape, bound, total, v_adv, v_cls, v_sty, r1, loss_d, start)
    }

    /// Fits rendered patches of posed images at their true poses and labels
    /// using the fixed anchor latent. Only the field is updated.
    pub fn train_step_reconstruction(&mut self, batch: &[&LabeledImage]) -> Result<StepReport> {
        ensure!(self.config.mode == Mode::Reconstruction, "train: not in reconstruction mode");
        ensure!(!batch.is_empty(), "train: empty batch");
        let start = Instant::now();
        let k = self.config.patch_size();
        let use_clf = self.config.lambda_cls > 0.0 || self.config.lambda_sty > 0.0;

        let mut tape = Tape::new();
        self.field.params_mut().set_trainable(true);
        let bound = self.field.params().bind(&mut tape)?;
        let mut patches = Vec::with_capacity(batch.len());
        let mut views = Vec::new();
        let mut target = Vec::with_capacity(batch.len() * 3 * k * k);
        for e in batch {
            let pose = e.pose.ok_or_else(|| Error::contract("reconstruction: image has no pose"))?;
            let pattern = self.draw_pattern()?;
            target.extend(extract_patch(&e.image, &pattern)?.to_chw());
            let d = Draw {
                latent: self.field.anchor.clone(),
                class: e.class,
                style: e.style,
                pose,
                pattern,
            };
            let (p, v) = self.render_draw(&mut tape, &bound, &d, use_clf)?;
            patches.push(p);
            views.extend(v);
        }
        let fake = tape.concat(&patches, 0)?;
        let shape = tape.shape(fake).to_vec();
        let target = tape.constant(shape, target)?;
        let diff = tape.sub(fake, target)?;
        let sq = tape.square(diff)?;
        let mse = tape.mean(sq)?;
        let mut total = mse;
        let (mut v_cls, mut v_sty) = (0.0, 0.0);
        if use_clf {
            let views = tape.concat(&views, 0)?;
            let classes: Vec<usize> = batch.iter().map(|e| e.class).collect();
            let styles: Vec<usize> = batch.iter().map(|e| e.style).collect();
            let (lc, ls) = self.classifier_losses(&mut tape, views, &classes, &styles)?;
            v_cls = tape.value(lc)[0] as f64;
            v_sty = tape.value(ls)[0] as f64;
            let wc = tape.scale(lc, self.config.lambda_cls)?;
            let ws = tape.scale(ls, self.config.lambda_sty)?;
            total = tape.add(total, wc)?;
            total = tape.add(total, ws)?;
        }
        let v_mse = tape.value(mse)[0] as f64;
        self.finish_generator(tape, bound, total, v_mse, v_cls, v_sty, 0.0, 0.0, start)
    }

    #[allow(clippy::too_many_arguments)]
    fn finish_generator(
        &mut self,
        mut tape: Tape<f32>,
        bound: crate::autodiff::Bound,
        total: Var,
        l_adv: f64,
        l_cls: f64,
        l_sty: f64,
        r1: f64,
        loss_d: f64,
        start: Instant,
    ) -> Result<StepReport> {
        let it = self.iteration;
        let report = StepReport {
            iteration: it,
            l_adv,
            l_cls,
            l_sty,
            r1,
            total: l_adv + self.config.lambda_cls * l_cls + self.config.lambda_sty * l_sty,
            loss_d,
            seconds: 0.0,
        };
        if !report.is_finite() || !tape.value(total)[0].is_finite() {
            return Err(numeric("generator loss", it));
        }
        tape.backward(total)?;
        self.field.params_mut().collect_grads(&tape, &bound)?;
        if !grads_finite(self.field.params()) {
            self.field.params_mut().clear_grads();
            return Err(numeric("generator gradient", it));
        }
        self.opt_g.step(self.field.params_mut().tensors_mut())?;
        self.iteration += 1;
        Ok(StepReport {
            seconds: start.elapsed().as_secs_f64(),
            ..report
        })
    }
}
