//! Patch discriminator with spectral and instance normalization, and the
//! VGG-style auxiliary classifier with class and style heads.

use rand::Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::autodiff::{softmax, Bound, ParamSet, Real, RmsProp, Tape, Var};
use crate::dataset::LabeledImage;
use crate::error::{ensure, Error, Result};
use crate::image::RgbImage;
use crate::nn::{Conv2d, Linear};

const NORM_EPS: f64 = 1e-5;

/// Power-iteration state for one weight tensor viewed as a
/// `[rows, cols]` matrix (rows = output channels).
#[derive(Clone, Debug, PartialEq)]
pub struct SpectralNorm {
    pub u: Vec<f64>,
    pub v: Vec<f64>,
}

fn unit(mut x: Vec<f64>) -> Vec<f64> {
    let n = x.iter().map(|a| a * a).sum::<f64>().sqrt().max(1e-12);
    x.iter_mut().for_each(|a| *a /= n);
    x
}

impl SpectralNorm {
    pub fn new(rows: usize, cols: usize, rng: &mut impl Rng) -> Self {
        let u = unit((0..rows).map(|_| StandardNormal.sample(rng)).collect());
        Self {
            u,
            v: vec![0.0; cols],
        }
    }

    /// `n` rounds of `v ← Wᵀu/‖·‖`, `u ← Wv/‖·‖`.
    pub fn iterate<T: Real>(&mut self, w: &[T], n: usize) {
        let (rows, cols) = (self.u.len(), self.v.len());
        debug_assert_eq!(w.len(), rows * cols);
        for _ in 0..n {
            let mut v = vec![0.0; cols];
            for (r, &ur) in self.u.iter().enumerate() {
                for (vc, wv) in v.iter_mut().zip(&w[r * cols..(r + 1) * cols]) {
                    *vc += wv.as_f64() * ur;
                }
            }
            self.v = unit(v);
            let u = (0..rows)
                .map(|r| {
                    w[r * cols..(r + 1) * cols]
                        .iter()
                        .zip(&self.v)
                        .map(|(a, b)| a.as_f64() * b)
                        .sum()
                })
                .collect();
            self.u = unit(u);
        }
    }

    /// Current estimate `uᵀWv` of the largest singular value.
    pub fn sigma<T: Real>(&self, w: &[T]) -> f64 {
        let cols = self.v.len();
        self.u
            .iter()
            .enumerate()
            .map(|(r, ur)| {
                ur * w[r * cols..(r + 1) * cols]
                    .iter()
                    .zip(&self.v)
                    .map(|(a, b)| a.as_f64() * b)
                    .sum::<f64>()
            })
            .sum()
    }

    /// `W / (uᵀWv)` on the tape; gradients flow through the estimate.
    pub fn apply<T: Real>(&self, tape: &mut Tape<T>, w: Var) -> Result<Var> {
        let shape = tape.shape(w).to_vec();
        let uv: Vec<T> = self
            .u
            .iter()
            .flat_map(|&a| self.v.iter().map(move |&b| T::lit(a * b)))
            .collect();
        ensure!(uv.len() == tape.value(w).len(), "spectral norm: state does not match weight");
        let outer = tape.constant(shape, uv)?;
        let prod = tape.mul(w, outer)?;
        let sigma = tape.sum(prod)?;
        tape.div(w, sigma)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct PatchDiscriminatorConfig {
    pub patch: usize,
    pub widths: Vec<usize>,
    pub power_iterations: usize,
}

impl Default for PatchDiscriminatorConfig {
    fn default() -> Self {
        Self {
            patch: 32,
            widths: vec![64, 128, 256, 512],
            power_iterations: 1,
        }
    }
}

/// Stride-2 convolutions (kernel 4, padding 1) with spectral normalization,
/// ReLU, instance normalization after every convolution but the first (on maps of
/// at least 4×4), and a
/// linear layer to one logit.
#[derive(Clone, Debug)]
pub struct PatchDiscriminator<T: Real = f32> {
    config: PatchDiscriminatorConfig,
    params: ParamSet<T>,
    convs: Vec<Conv2d>,
    spectral: Vec<SpectralNorm>,
    head: Linear,
    /// Spatial side after the convolution stack.
    out_side: usize,
}

impl<T: Real> PatchDiscriminator<T> {
    pub fn new(config: PatchDiscriminatorConfig, rng: &mut impl Rng) -> Result<Self> {
        ensure!(config.patch >= 2, "discriminator: patch side must be >= 2");
        ensure!(!config.widths.is_empty(), "discriminator: no layers");
        let mut params = ParamSet::new();
        let mut convs = Vec::new();
        let mut spectral = Vec::new();
        let (mut cin, mut side) = (3, config.patch);
        for (l, &w) in config.widths.iter().enumerate() {
            ensure!(side >= 2, "discriminator: patch {} too small for {} layers", config.patch, config.widths.len());
            let conv = Conv2d::new(&mut params, &format!("d.conv{l}"), cin, w, 4, 2, 1, rng);
            let mut sn = SpectralNorm::new(w, cin * 16, rng);
            sn.iterate(params.get(conv.weight).values(), 5);
            convs.push(conv);
            spectral.push(sn);
            cin = w;
            side /= 2;
        }
        let fan = cin * side * side;
        let head = Linear::new(&mut params, "d.head", fan, 1, rng);
        Ok(Self {
            config,
            params,
            convs,
            spectral,
            head,
            out_side: side,
        })
    }

    pub fn config(&self) -> &PatchDiscriminatorConfig {
        &self.config
    }

    pub fn params(&self) -> &ParamSet<T> {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamSet<T> {
        &mut self.params
    }

    pub fn head(&self) -> Linear {
        self.head
    }

    pub fn convs(&self) -> &[Conv2d] {
        &self.convs
    }

    pub fn spectral(&self) -> &[SpectralNorm] {
        &self.spectral
    }

    /// Advances every power iteration by the configured number of rounds.
    pub fn update_spectral(&mut self) {
        let n = self.config.power_iterations;
        for (sn, conv) in self.spectral.iter_mut().zip(&self.convs) {
            sn.iterate(self.params.get(conv.weight).values(), n);
        }
    }

    /// Logits `[B, 1]` for patches `[B, 3, K, K]` with values in `[0, 1]`.
    pub fn forward(&self, tape: &mut Tape<T>, bound: &Bound, x: Var) -> Result<Var> {
        let k = self.config.patch;
        let shape = tape.shape(x).to_vec();
        ensure!(
            shape.len() == 4 && shape[1..] == [3, k, k],
            "discriminator: expected [B, 3, {k}, {k}], got {shape:?}"
        );
        let mut h = tape.scale(x, 2.0)?;
        h = tape.offset(h, -1.0)?;
        for (l, (conv, sn)) in self.convs.iter().zip(&self.spectral).enumerate() {
            let w = sn.apply(tape, bound[conv.weight])?;
            h = tape.conv2d(h, w, Some(bound[conv.bias]), conv.stride, conv.padding)?;
            let s = tape.shape(h);
            // on 2x2 maps the norm leaves only the sign pattern and blows up input gradients
            if l > 0 && s[2] >= 4 && s[3] >= 4 {
                h = tape.instance_norm(h, NORM_EPS)?;
            }
            h = tape.relu(h)?;
        }
        let b = shape[0];
        let fan = self.config.widths.last().unwrap() * self.out_side * self.out_side;
        h = tape.reshape(h, vec![b, fan])?;
        self.head.forward(tape, bound, h)
    }

    /// Logits for plain patch values, without gradients.
    pub fn score(&self, patches: &[T], batch: usize) -> Result<Vec<f64>> {
        let mut tape = Tape::new();
        let bound = self.params.bind_frozen(&mut tape)?;
        let k = self.config.patch;
        let x = tape.constant(vec![batch, 3, k, k], patches.to_vec())?;
        let y = self.forward(&mut tape, &bound, x)?;
        Ok(tape.value(y).iter().map(|v| v.as_f64()).collect())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ClassifierConfig {
    pub classes: usize,
    pub styles: usize,
    pub resolution: usize,
    pub widths: Vec<usize>,
}

impl Default for ClassifierConfig {
    fn default() -> Self {
        Self {
            classes: 4,
            styles: 4,
            resolution: 32,
            widths: vec![16, 32, 64, 128],
        }
    }
}

impl ClassifierConfig {
    pub fn feature_dim(&self) -> usize {
        *self.widths.last().unwrap_or(&3)
    }
}

/// VGG-style blocks of (conv3×3, ReLU, conv3×3, ReLU, max-pool), global
/// average pooling, then a class head and a style head.
#[derive(Clone, Debug)]
pub struct AuxClassifier<T: Real = f32> {
    config: ClassifierConfig,
    params: ParamSet<T>,
    blocks: Vec<[Conv2d; 2]>,
    class_head: Linear,
    style_head: Linear,
    /// Set once pretraining has run.
    pub trained: bool,
}

/// Class and style logits, `[B, M]` and `[B, N]`.
#[derive(Clone, Copy, Debug)]
pub struct ClassifierOutput {
    pub features: Var,
    pub class_logits: Var,
    pub style_logits: Var,
}

impl<T: Real> AuxClassifier<T> {
    pub fn new(config: ClassifierConfig, rng: &mut impl Rng) -> Result<Self> {
        ensure!(
            config.classes >= 1 && config.styles >= 1,
            "classifier: need at least one class and one style"
        );
        ensure!(!config.widths.is_empty(), "classifier: no blocks");
        ensure!(
            config.resolution >> config.widths.len() >= 1,
            "classifier: resolution {} too small for {} blocks",
            config.resolution,
            config.widths.len()
        );
        let mut params = ParamSet::new();
        let mut blocks = Vec::new();
        let mut cin = 3;
        for (b, &w) in config.widths.iter().enumerate() {
            let c1 = Conv2d::new(&mut params, &format!("c.block{b}.0"), cin, w, 3, 1, 1, rng);
            let c2 = Conv2d::new(&mut params, &format!("c.block{b}.1"), w, w, 3, 1, 1, rng);
            blocks.push([c1, c2]);
            cin = w;
        }
        // near-zero logits at start, so the first loss sits at ln M + ln N
        let head_bound = 0.01 * (6.0 / cin as f64).sqrt();
        let class_head = Linear::with_bound(&mut params, "c.class_head", cin, config.classes, head_bound, rng);
        let style_head = Linear::with_bound(&mut params, "c.style_head", cin, config.styles, head_bound, rng);
        Ok(Self {
            config,
            params,
            blocks,
            class_head,
            style_head,
            trained: false,
        })
    }

    pub fn config(&self) -> &ClassifierConfig {
        &self.config
    }

    pub fn params(&self) -> &ParamSet<T> {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamSet<T> {
        &mut self.params
    }

    pub fn load_params(&mut self, params: ParamSet<T>) -> Result<()> {
        ensure!(
            params.names() == self.params.names(),
            "classifier: parameter names do not match the configured architecture"
        );
        for ((name, new), (_, old)) in params.iter().zip(self.params.iter()) {
            ensure!(
                new.shape() == old.shape(),
                "classifier: parameter {name} has shape {:?}, expected {:?}",
                new.shape(),
                old.shape()
            );
        }
        self.params = params;
        Ok(())
    }

    pub fn heads(&self) -> (Linear, Linear) {
        (self.class_head, self.style_head)
    }

    /// `x: [B, 3, R, R]` with values in `[0, 1]`.
    pub fn forward(&self, tape: &mut Tape<T>, bound: &Bound, x: Var) -> Result<ClassifierOutput> {
        let r = self.config.resolution;
        let shape = tape.shape(x).to_vec();
        ensure!(
            shape.len() == 4 && shape[1..] == [3, r, r],
            "classifier: expected [B, 3, {r}, {r}], got {shape:?}"
        );
        let mut h = tape.scale(x, 2.0)?;
        h = tape.offset(h, -1.0)?;
        for block in &self.blocks {
            for conv in block {
                h = conv.forward(tape, bound, h)?;
                h = tape.relu(h)?;
            }
            h = tape.max_pool2(h)?;
        }
        let s = tape.shape(h).to_vec();
        h = tape.reshape(h, vec![s[0], s[1], s[2] * s[3]])?;
        let features = tape.mean_last_axis(h)?;
        let class_logits = self.class_head.forward(tape, bound, features)?;
        let style_logits = self.style_head.forward(tape, bound, features)?;
        Ok(ClassifierOutput {
            features,
            class_logits,
            style_logits,
        })
    }

    /// Features and softmax probabilities for images, without gradients.
    pub fn predict(&self, images: &[&RgbImage]) -> Result<Predictions> {
        ensure!(!images.is_empty(), "classifier: no images");
        let r = self.config.resolution;
        let mut tape = Tape::new();
        let bound = self.params.bind_frozen(&mut tape)?;
        let x = tape.constant(vec![images.len(), 3, r, r], classifier_input(images, r))?;
        let out = self.forward(&mut tape, &bound, x)?;
        let rows = |v: Var, n: usize| -> Vec<Vec<f64>> {
            tape.value(v)
                .chunks(n)
                .map(|row| softmax(row).into_iter().map(|p| p.as_f64()).collect())
                .collect()
        };
        let (m, n) = (self.config.classes, self.config.styles);
        let class_probs = rows(out.class_logits, m);
        let style_probs = rows(out.style_logits, n);
        let d = self.config.feature_dim();
        let features = tape
            .value(out.features)
            .chunks(d)
            .map(|row| row.iter().map(|v| v.as_f64()).collect())
            .collect();
        Ok(Predictions {
            features,
            class_probs,
            style_probs,
        })
    }
}

#[derive(Clone, Debug)]
pub struct Predictions {
    pub features: Vec<Vec<f64>>,
    pub class_probs: Vec<Vec<f64>>,
    pub style_probs: Vec<Vec<f64>>,
}

pub fn argmax(row: &[f64]) -> usize {
    row.iter()
        .enumerate()
        .fold((0, f64::NEG_INFINITY), |best, (i, &v)| if v > best.1 { (i, v) } else { best })
        .0
}

impl Predictions {
    pub fn class_ids(&self) -> Vec<usize> {
        self.class_probs.iter().map(|r| argmax(r)).collect()
    }

    pub fn style_ids(&self) -> Vec<usize> {
        self.style_probs.iter().map(|r| argmax(r)).collect()
    }
}

/// Images resized to `res × res` and packed as `[B, 3, res, res]`.
pub fn classifier_input<T: Real>(images: &[&RgbImage], res: usize) -> Vec<T> {
    images
        .iter()
        .flat_map(|img| img.resized(res, res).to_chw())
        .map(|v| T::lit(v as f64))
        .collect()
}

#[derive(Clone, Debug, PartialEq)]
pub struct PretrainConfig {
    pub steps: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
}

impl Default for PretrainConfig {
    fn default() -> Self {
        Self {
            steps: 2000,
            batch_size: 16,
            learning_rate: 1e-3,
        }
    }
}

/// Per-step mean of the class and style cross-entropies.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct PretrainCurve {
    pub losses: Vec<f64>,
}

/// Verifies every (class, style) cell has an example.
pub fn check_cells(examples: &[LabeledImage], classes: usize, styles: usize) -> Result<()> {
    let mut seen = vec![false; classes * styles];
    for e in examples {
        ensure!(
            e.class < classes && e.style < styles,
            "label ({}, {}) outside {classes}x{styles}",
            e.class,
            e.style
        );
        seen[e.class * styles + e.style] = true;
    }
    if let Some(i) = seen.iter().position(|s| !s) {
        return Err(Error::contract(format!(
            "no training example for cell (class {}, style {})",
            i / styles,
            i % styles
        )));
    }
    Ok(())
}

/// Trains both heads with softmax cross-entropy on uniformly drawn
/// minibatches. `on_step` sees the step index and its loss.
pub fn pretrain_classifier<T: Real>(
    clf: &mut AuxClassifier<T>,
    examples: &[LabeledImage],
    config: &PretrainConfig,
    rng: &mut impl Rng,
    mut on_step: impl FnMut(usize, f64),
) -> Result<PretrainCurve> {
    let (m, n, r) = (clf.config.classes, clf.config.styles, clf.config.resolution);
    ensure!(!examples.is_empty(), "pretrain: empty dataset");
    ensure!(config.batch_size >= 1, "pretrain: batch size must be >= 1");
    check_cells(examples, m, n)?;
    // resize once up front
    let inputs: Vec<Vec<T>> = examples.iter().map(|e| classifier_input(&[&e.image], r)).collect();
    let mut opt = RmsProp::new(config.learning_rate);
    clf.params.set_trainable(true);
    let mut curve = PretrainCurve::default();
    for step in 0..config.steps {
        let idx: Vec<usize> = (0..config.batch_size).map(|_| rng.random_range(0..examples.len())).collect();
        let mut tape = Tape::new();
        let bound = clf.params.bind(&mut tape)?;
        let x: Vec<T> = idx.iter().flat_map(|&i| inputs[i].iter().copied()).collect();
        let x = tape.constant(vec![idx.len(), 3, r, r], x)?;
        let out = clf.forward(&mut tape, &bound, x)?;
        let cls: Vec<usize> = idx.iter().map(|&i| examples[i].class).collect();
        let sty: Vec<usize> = idx.iter().map(|&i| examples[i].style).collect();
        let lc = tape.softmax_cross_entropy(out.class_logits, &cls)?;
        let ls = tape.softmax_cross_entropy(out.style_logits, &sty)?;
        let loss = tape.add(lc, ls)?;
        let value = tape.value(loss)[0].as_f64();
        tape.backward(loss)?;
        clf.params.collect_grads(&tape, &bound)?;
        opt.step(clf.params.tensors_mut())?;
        curve.losses.push(value);
        on_step(step, value);
    }
    clf.trained = true;
    Ok(curve)
}

/// Fraction of examples whose class and style are both predicted, and each
/// separately: `(class, style)`.
pub fn accuracy<T: Real>(clf: &AuxClassifier<T>, examples: &[LabeledImage]) -> Result<(f64, f64)> {
    ensure!(!examples.is_empty(), "accuracy: no examples");
    let (mut c_ok, mut s_ok) = (0usize, 0usize);
    for chunk in examples.chunks(32) {
        let imgs: Vec<&RgbImage> = chunk.iter().map(|e| &e.image).collect();
        let p = clf.predict(&imgs)?;
        for ((e, c), s) in chunk.iter().zip(p.class_ids()).zip(p.style_ids()) {
            c_ok += (e.class == c) as usize;
            s_ok += (e.style == s) as usize;
        }
    }
    let total = examples.len() as f64;
    Ok((c_ok as f64 / total, s_ok as f64 / total))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::seeded;
    use nalgebra::DMatrix;

    /// `U·diag(s)·Vᵀ` with random orthogonal factors.
    fn with_spectrum(rows: usize, cols: usize, s: &[f64], rng: &mut dyn rand::RngCore) -> Vec<f64> {
        let gauss = |r: usize, c: usize, rng: &mut dyn rand::RngCore| -> DMatrix<f64> {
            DMatrix::from_fn(r, c, |_, _| StandardNormal.sample(rng))
        };
        let u = gauss(rows, rows, rng).qr().q();
        let v = gauss(cols, cols, rng).qr().q();
        let mut d = DMatrix::<f64>::zeros(rows, cols);
        for (i, &x) in s.iter().enumerate() {
            d[(i, i)] = x;
        }
        let w = u * d * v.transpose();
        (0..rows).flat_map(|r| (0..cols).map(move |c| (r, c))).map(|(r, c)| w[(r, c)]).collect()
    }

    #[test]
    fn spectral_estimate_matches_svd() {
        for seed in 0..20 {
            let mut rng = seeded(seed);
            let (rows, cols) = (4, 6);
            let top = 0.5 + 4.0 * rng.random::<f64>();
            let spectrum = [top, 0.7 * top, 0.4 * top, 0.1 * top];
            let w = with_spectrum(rows, cols, &spectrum, &mut rng);
            let oracle = DMatrix::from_row_slice(rows, cols, &w).singular_values().max();
            assert!((oracle - top).abs() < 1e-9);
            let mut sn = SpectralNorm::new(rows, cols, &mut rng);
            sn.iterate(&w, 5);
            let normalized: Vec<f64> = w.iter().map(|x| x / sn.sigma(&w)).collect();
            let top_n = DMatrix::from_row_slice(rows, cols, &normalized).singular_values().max();
            assert!((top_n - 1.0).abs() < 1e-2, "seed {seed}: {top_n}");
        }
    }

    #[test]
    fn spectral_estimate_converges_on_gaussian_matrices() {
        for seed in 0..6 {
            let mut rng = seeded(seed);
            let w: Vec<f64> = (0..35).map(|_| StandardNormal.sample(&mut rng)).collect();
            let oracle = DMatrix::from_row_slice(5, 7, &w).singular_values().max();
            let mut sn = SpectralNorm::new(5, 7, &mut rng);
            sn.iterate(&w, 100);
            assert!((sn.sigma(&w) / oracle - 1.0).abs() < 1e-6, "seed {seed}");
        }
    }

    #[test]
    fn normalized_layer_is_nonexpansive() {
        let mut rng = seeded(12);
        let (rows, cols) = (6, 10);
        let w: Vec<f64> = (0..rows * cols).map(|_| StandardNormal.sample(&mut rng)).collect();
        let mut sn = SpectralNorm::new(rows, cols, &mut rng);
        sn.iterate(&w, 30);
        let s = sn.sigma(&w);
        let m = DMatrix::from_row_slice(rows, cols, &w) / s;
        for _ in 0..200 {
            let a = DMatrix::from_fn(cols, 1, |_, _| StandardNormal.sample(&mut rng));
            let b = DMatrix::from_fn(cols, 1, |_, _| StandardNormal.sample(&mut rng));
            let lhs = (&m * &a - &m * &b).norm();
            assert!(lhs <= 1.05 * (a - b).norm());
        }
    }

    #[test]
    fn spectral_norm_on_tape_matches_values() {
        let mut rng = seeded(3);
        let w: Vec<f64> = (0..12).map(|_| StandardNormal.sample(&mut rng)).collect();
        let mut sn = SpectralNorm::new(3, 4, &mut rng);
        sn.iterate(&w, 20);
        let mut tape = Tape::<f64>::new();
        let wv = tape.variable(vec![3, 4], w.clone()).unwrap();
        let out = sn.apply(&mut tape, wv).unwrap();
        let s = sn.sigma(&w);
        for (a, b) in tape.value(out).iter().zip(&w) {
            assert!((a - b / s).abs() < 1e-12);
        }
    }

    fn tiny_disc() -> PatchDiscriminator<f64> {
        let cfg = PatchDiscriminatorConfig {
            patch: 8,
            widths: vec![4, 8],
            power_iterations: 1,
        };
        PatchDiscriminator::new(cfg, &mut seeded(11)).unwrap()
    }

    #[test]
    fn zero_head_gives_zero_logit() {
        let mut d = tiny_disc();
        let w = d.head().weight;
        d.params_mut().get_mut(w).values_mut().fill(0.0);
        let mut rng = seeded(2);
        let x: Vec<f64> = (0..2 * 3 * 64).map(|_| rng.random()).collect();
        assert_eq!(d.score(&x, 2).unwrap(), vec![0.0, 0.0]);
    }

    #[test]
    fn discriminator_rejects_wrong_shape() {
        let d = tiny_disc();
        assert!(d.score(&[0.0; 3 * 49], 1).is_err());
    }

    #[test]
    fn classifier_degenerate_and_shapes() {
        let cfg = ClassifierConfig {
            classes: 1,
            styles: 1,
            resolution: 8,
            widths: vec![4, 4],
        };
        let clf = AuxClassifier::<f32>::new(cfg, &mut seeded(1)).unwrap();
        let img = RgbImage::filled(12, 12, [0.3, 0.6, 0.9]);
        let p = clf.predict(&[&img, &img]).unwrap();
        assert_eq!(p.class_probs, vec![vec![1.0], vec![1.0]]);
        assert_eq!(p.style_probs, vec![vec![1.0], vec![1.0]]);
        assert_eq!(p.features[0].len(), 4);
        assert_eq!(p.features[0], p.features[1]);
    }

    #[test]
    fn missing_cell_is_named() {
        let ex = vec![LabeledImage {
            image: RgbImage::filled(4, 4, [1.0; 3]),
            class: 0,
            style: 1,
            pose: None,
        }];
        let err = check_cells(&ex, 2, 2).unwrap_err().to_string();
        assert!(err.contains("class 0, style 0"), "{err}");
    }

    #[test]
    fn single_image_is_memorized() {
        let cfg = ClassifierConfig {
            classes: 2,
            styles: 2,
            resolution: 8,
            widths: vec![4, 8],
        };
        let mut clf = AuxClassifier::<f32>::new(cfg, &mut seeded(4)).unwrap();
        let mut ex = Vec::new();
        for (c, s, col) in [(0, 0, [1.0, 0.0, 0.0]), (0, 1, [0.0, 1.0, 0.0]), (1, 0, [0.0, 0.0, 1.0]), (1, 1, [0.5, 0.5, 0.5])] {
            ex.push(LabeledImage {
                image: RgbImage::filled(8, 8, col),
                class: c,
                style: s,
                pose: None,
            });
        }
        let pc = PretrainConfig {
            steps: 600,
            batch_size: 4,
            learning_rate: 3e-3,
        };
        let curve = pretrain_classifier(&mut clf, &ex, &pc, &mut seeded(5), |_, _| {}).unwrap();
        let tail: f64 = curve.losses[580..].iter().sum::<f64>() / 20.0;
        assert!(tail < 0.05, "final loss {tail}");
        assert!(clf.trained);
        assert_eq!(accuracy(&clf, &ex).unwrap(), (1.0, 1.0));
    }
}
