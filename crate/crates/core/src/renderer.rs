//! Point sampling along rays and differentiable alpha compositing.
//!
//! Rays are clipped to a bounding sphere of `scene_radius` around the origin
//! and positions are divided by that radius before encoding, so every
//! encoded coordinate lies in `[−1, 1]`. Rays that miss the sphere return the
//! background colour.

use rand::Rng;

use crate::autodiff::{composite_ray, Bound, Real, Tape, Var};
use crate::encoding::{encode_direction_into, encode_position_into};
use crate::error::{ensure, Result};
use crate::field::{ConditionalField, LatentPair, Selection};
use crate::geometry::{self, dot, Intrinsics, PatchPattern, Pose, Ray};
use crate::image::RgbImage;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SamplingConfig {
    pub coarse: usize,
    pub fine: usize,
    /// Second, importance-sampled pass driven by the coarse weights.
    pub hierarchical: bool,
    pub background: [f64; 3],
    /// Radius of the sphere that bounds the scene.
    pub scene_radius: f64,
    /// Random offsets inside each stratum; bin midpoints when false.
    pub jitter: bool,
}

impl Default for SamplingConfig {
    fn default() -> Self {
        Self {
            coarse: 32,
            fine: 32,
            hierarchical: true,
            background: [1.0; 3],
            scene_radius: 1.1,
            jitter: true,
        }
    }
}

impl SamplingConfig {
    pub fn validate(&self) -> Result<()> {
        ensure!(self.coarse >= 2, "sampling: need at least 2 coarse samples");
        ensure!(
            self.scene_radius > 0.0,
            "sampling: scene radius must be positive"
        );
        ensure!(
            self.background.iter().all(|c| (0.0..=1.0).contains(c)),
            "sampling: background outside [0, 1]"
        );
        Ok(())
    }

    pub fn samples_per_ray(&self) -> usize {
        if self.hierarchical {
            self.coarse + self.fine
        } else {
            self.coarse
        }
    }
}

/// `n` t-values, one per equal-width bin of `[t_near, t_far]`, at offsets
/// given by `offset(i)` in `[0, 1)`.
fn stratified_with(t_near: f64, t_far: f64, n: usize, mut offset: impl FnMut() -> f64) -> Result<Vec<f64>> {
    ensure!(n >= 2, "stratified_sample: need n >= 2, got {n}");
    ensure!(
        t_near < t_far,
        "stratified_sample: t_near {t_near} >= t_far {t_far}"
    );
    let w = (t_far - t_near) / n as f64;
    Ok((0..n)
        .map(|i| {
            let lo = t_near + i as f64 * w;
            (lo + offset() * w).min(t_near + (i + 1) as f64 * w)
        })
        .collect())
}

pub fn stratified_sample(ray: &Ray, n: usize, rng: &mut impl Rng) -> Result<Vec<f64>> {
    stratified_with(ray.t_near, ray.t_far, n, || rng.random::<f64>())
}

pub fn stratified_midpoints(ray: &Ray, n: usize) -> Result<Vec<f64>> {
    stratified_with(ray.t_near, ray.t_far, n, || 0.5)
}

/// Draws `n_fine` t-values from the piecewise-constant density proportional
/// to `weights` over the equal-width bins of `[t_near, t_far]`. All-zero
/// weights fall back to stratified sampling. The result is sorted.
pub fn hierarchical_resample(
    t_near: f64,
    t_far: f64,
    weights: &[f64],
    n_fine: usize,
    rng: &mut impl Rng,
) -> Result<Vec<f64>> {
    ensure!(!weights.is_empty(), "hierarchical_resample: no weights");
    ensure!(
        t_near < t_far,
        "hierarchical_resample: t_near {t_near} >= t_far {t_far}"
    );
    ensure!(
        weights.iter().all(|&w| w >= 0.0 && w.is_finite()),
        "hierarchical_resample: weights must be finite and nonnegative"
    );
    let total: f64 = weights.iter().sum();
    if total <= 0.0 {
        if n_fine < 2 {
            return Ok((0..n_fine).map(|_| t_near + rng.random::<f64>() * (t_far - t_near)).collect());
        }
        return stratified_with(t_near, t_far, n_fine, || rng.random::<f64>());
    }
    let w = (t_far - t_near) / weights.len() as f64;
    let mut cdf = Vec::with_capacity(weights.len() + 1);
    cdf.push(0.0);
    let mut acc = 0.0;
    for &x in weights {
        acc += x / total;
        cdf.push(acc);
    }
    let last = weights.len();
    let mut out: Vec<f64> = (0..n_fine)
        .map(|_| {
            let u = rng.random::<f64>() * acc;
            // first bin whose upper cdf exceeds u; zero-weight bins are skipped
            let k = cdf[1..].partition_point(|&c| c <= u).min(last - 1);
            let span = cdf[k + 1] - cdf[k];
            let frac = if span > 0.0 { ((u - cdf[k]) / span).clamp(0.0, 1.0) } else { 0.5 };
            t_near + (k as f64 + frac) * w
        })
        .collect();
    out.sort_by(f64::total_cmp);
    Ok(out)
}

/// Sorted union of two t-value lists, nudged to be strictly increasing.
pub fn merge_samples(a: &[f64], b: &[f64], t_near: f64, t_far: f64) -> Vec<f64> {
    let mut t: Vec<f64> = a.iter().chain(b).copied().collect();
    t.sort_by(f64::total_cmp);
    let eps = 1e-9 * (t_far - t_near);
    for i in 1..t.len() {
        if t[i] <= t[i - 1] {
            t[i] = t[i - 1] + eps;
        }
    }
    t
}

/// Spacings between consecutive samples; the last one reaches `t_far`.
pub fn deltas(t: &[f64], t_far: f64, t_near: f64) -> Vec<f64> {
    let floor = 1e-9 * (t_far - t_near);
    (0..t.len())
        .map(|i| {
            let next = if i + 1 < t.len() { t[i + 1] } else { t_far };
            (next - t[i]).max(floor)
        })
        .collect()
}

/// Per-ray compositing result on plain values.
pub fn composite(sigma: &[f64], rgb: &[[f64; 3]], delta: &[f64], background: [f64; 3]) -> Result<crate::autodiff::RayComposite<f64>> {
    ensure!(
        sigma.len() == rgb.len() && sigma.len() == delta.len(),
        "composite: lengths differ ({}, {}, {})",
        sigma.len(),
        rgb.len(),
        delta.len()
    );
    ensure!(sigma.iter().all(|&s| s >= 0.0), "composite: negative density");
    ensure!(delta.iter().all(|&d| d > 0.0), "composite: non-positive delta");
    let flat: Vec<f64> = rgb.iter().flatten().copied().collect();
    Ok(composite_ray(sigma, &flat, delta, background))
}

/// Segment of `ray` inside the sphere of `radius` around the origin,
/// intersected with the ray's own bounds.
pub fn clip_to_sphere(ray: &Ray, radius: f64) -> Option<(f64, f64)> {
    let b = dot(ray.origin, ray.direction);
    let c = dot(ray.origin, ray.origin) - radius * radius;
    let disc = b * b - c;
    if disc <= 0.0 {
        return None;
    }
    let s = disc.sqrt();
    let (lo, hi) = ((-b - s).max(ray.t_near), (-b + s).min(ray.t_far));
    (hi - lo > 1e-9 * radius).then_some((lo, hi))
}

/// Encoded inputs for the points `ray.at(t)` of each clipped ray.
struct PointBatch<T> {
    pos: Vec<T>,
    dir: Vec<T>,
    delta: Vec<T>,
    points: usize,
}

fn encode_batch<T: Real>(
    field: &ConditionalField<T>,
    rays: &[&Ray],
    ts: &[Vec<f64>],
    bounds: &[(f64, f64)],
    radius: f64,
) -> Result<PointBatch<T>> {
    let enc = field.config().encoding;
    let points: usize = ts.iter().map(Vec::len).sum();
    let mut pos = Vec::with_capacity(points * enc.position_dim());
    let mut dir = Vec::with_capacity(points * enc.direction_dim());
    let mut delta = Vec::with_capacity(points);
    let mut dir_one: Vec<T> = Vec::with_capacity(enc.direction_dim());
    for ((ray, t), &(tn, tf)) in rays.iter().zip(ts).zip(bounds) {
        dir_one.clear();
        encode_direction_into(ray.direction, enc.direction_freqs, &mut dir_one)?;
        for &ti in t {
            let p = ray.at(ti);
            encode_position_into([p[0] / radius, p[1] / radius, p[2] / radius], enc.position_freqs, &mut pos)?;
            dir.extend_from_slice(&dir_one);
        }
        delta.extend(deltas(t, tf, tn).into_iter().map(T::lit));
    }
    Ok(PointBatch {
        pos,
        dir,
        delta,
        points,
    })
}

fn blend<T: Real>(tape: &mut Tape<T>, a: Var, b: Var, lambda: f64) -> Result<Var> {
    let a = tape.scale(a, 1.0 - lambda)?;
    let b = tape.scale(b, lambda)?;
    tape.add(a, b)
}

/// Conditioned codes for each forward pass a selection needs.
fn selection_codes<T: Real>(
    tape: &mut Tape<T>,
    field: &ConditionalField<T>,
    bound: &Bound,
    latent: &LatentPair,
    sel: Selection,
) -> Result<Vec<(Var, Var)>> {
    let pairs = match sel {
        Selection::Labels { class, style } => vec![(class, style)],
        Selection::ColorBlend { class, from, to, .. } => vec![(class, from), (class, to)],
        Selection::DensityBlend { from, to, style, .. } => vec![(from, style), (to, style)],
    };
    pairs
        .into_iter()
        .map(|(c, s)| field.embed_on_tape(tape, bound, latent, c, s))
        .collect()
}

/// Selected density `[P, 1]` and colour `[P, 3]`.
fn evaluate_selection<T: Real>(
    tape: &mut Tape<T>,
    field: &ConditionalField<T>,
    bound: &Bound,
    codes: &[(Var, Var)],
    sel: Selection,
    pos: Var,
    dir: Var,
) -> Result<(Var, Var)> {
    let a = field.forward(tape, bound, pos, dir, codes[0].0, codes[0].1)?;
    match sel {
        Selection::Labels { class, style } => {
            let s = tape.slice(a.sigma, 1, field.density_slot(class), 1)?;
            let c = tape.slice(a.color, 1, 3 * field.color_slot(style), 3)?;
            Ok((s, c))
        }
        Selection::ColorBlend {
            class,
            from,
            to,
            lambda,
        } => {
            let b = field.forward(tape, bound, pos, dir, codes[1].0, codes[1].1)?;
            let s = tape.slice(a.sigma, 1, field.density_slot(class), 1)?;
            let ca = tape.slice(a.color, 1, 3 * field.color_slot(from), 3)?;
            let cb = tape.slice(b.color, 1, 3 * field.color_slot(to), 3)?;
            Ok((s, blend(tape, ca, cb, lambda)?))
        }
        Selection::DensityBlend {
            from,
            to,
            style,
            lambda,
        } => {
            let b = field.forward(tape, bound, pos, dir, codes[1].0, codes[1].1)?;
            let sa = tape.slice(a.sigma, 1, field.density_slot(from), 1)?;
            let sb = tape.slice(b.sigma, 1, field.density_slot(to), 1)?;
            let ca = tape.slice(a.color, 1, 3 * field.color_slot(style), 3)?;
            let cb = tape.slice(b.color, 1, 3 * field.color_slot(style), 3)?;
            Ok((blend(tape, sa, sb, lambda)?, blend(tape, ca, cb, lambda)?))
        }
    }
}

/// Compositing weights of the coarse samples, computed without gradients.
fn coarse_weights<T: Real>(
    field: &ConditionalField<T>,
    latent: &LatentPair,
    sel: Selection,
    rays: &[&Ray],
    ts: &[Vec<f64>],
    bounds: &[(f64, f64)],
    cfg: &SamplingConfig,
) -> Result<Vec<Vec<f64>>> {
    let mut tape = Tape::new();
    let bound = field.params().bind_frozen(&mut tape)?;
    let codes = selection_codes(&mut tape, field, &bound, latent, sel)?;
    let batch = encode_batch(field, rays, ts, bounds, cfg.scene_radius)?;
    let enc = field.config().encoding;
    let pos = tape.constant(vec![batch.points, enc.position_dim()], batch.pos)?;
    let dir = tape.constant(vec![batch.points, enc.direction_dim()], batch.dir)?;
    let (sigma, _) = evaluate_selection(&mut tape, field, &bound, &codes, sel, pos, dir)?;
    let sv = tape.value(sigma);
    let mut out = Vec::with_capacity(rays.len());
    let mut off = 0;
    let dummy = vec![0.0; 3 * cfg.coarse];
    for t in ts {
        let n = t.len();
        let s: Vec<f64> = sv[off..off + n].iter().map(|v| v.as_f64()).collect();
        let d: Vec<f64> = batch.delta[off..off + n].iter().map(|v| v.as_f64()).collect();
        out.push(composite_ray(&s, &dummy[..3 * n], &d, [0.0; 3]).weights);
        off += n;
    }
    Ok(out)
}

/// Output of [`render_rays`].
#[derive(Clone, Copy, Debug)]
pub struct Rendered {
    /// `[R, 3]` pixel colours.
    pub rgb: Var,
    /// Field queries in the differentiable pass.
    pub queries: usize,
}

/// Renders `rays` on `tape` with the given parameter binding. Gradients
/// flow into whatever `bound` made differentiable.
#[allow(clippy::too_many_arguments)]
pub fn render_rays<T: Real>(
    tape: &mut Tape<T>,
    field: &ConditionalField<T>,
    bound: &Bound,
    latent: &LatentPair,
    sel: Selection,
    rays: &[Ray],
    cfg: &SamplingConfig,
    rng: &mut impl Rng,
) -> Result<Rendered> {
    cfg.validate()?;
    sel.validate(field.config())?;
    ensure!(!rays.is_empty(), "render: no rays");
    let clipped: Vec<Option<(f64, f64)>> = rays.iter().map(|r| clip_to_sphere(r, cfg.scene_radius)).collect();
    let hit_rays: Vec<&Ray> = rays.iter().zip(&clipped).filter(|(_, c)| c.is_some()).map(|(r, _)| r).collect();
    let bounds: Vec<(f64, f64)> = clipped.iter().flatten().copied().collect();

    let mut ts = Vec::with_capacity(hit_rays.len());
    for &(tn, tf) in &bounds {
        let t = if cfg.jitter {
            stratified_with(tn, tf, cfg.coarse, || rng.random::<f64>())?
        } else {
            stratified_with(tn, tf, cfg.coarse, || 0.5)?
        };
        ts.push(t);
    }
    if cfg.hierarchical && cfg.fine > 0 && !hit_rays.is_empty() {
        let weights = coarse_weights(field, latent, sel, &hit_rays, &ts, &bounds, cfg)?;
        for ((t, w), &(tn, tf)) in ts.iter_mut().zip(&weights).zip(&bounds) {
            let fine = hierarchical_resample(tn, tf, w, cfg.fine, rng)?;
            *t = merge_samples(t, &fine, tn, tf);
        }
    }

    let bg: Vec<T> = cfg.background.iter().map(|&c| T::lit(c)).collect();
    let mut queries = 0;
    let mut hit_rgb = None;
    if !hit_rays.is_empty() {
        let batch = encode_batch(field, &hit_rays, &ts, &bounds, cfg.scene_radius)?;
        let enc = field.config().encoding;
        let codes = selection_codes(tape, field, bound, latent, sel)?;
        let pos = tape.constant(vec![batch.points, enc.position_dim()], batch.pos)?;
        let dir = tape.constant(vec![batch.points, enc.direction_dim()], batch.dir)?;
        let (sigma, color) = evaluate_selection(tape, field, bound, &codes, sel, pos, dir)?;
        let (r, s) = (hit_rays.len(), batch.points / hit_rays.len());
        let sigma = tape.reshape(sigma, vec![r, s])?;
        let color = tape.reshape(color, vec![r, s, 3])?;
        hit_rgb = Some(tape.composite(sigma, color, &batch.delta, [bg[0], bg[1], bg[2]])?);
        queries = batch.points;
    }
    let misses = rays.len() - hit_rays.len();
    let rgb = match hit_rgb {
        Some(h) if misses == 0 => h,
        _ => {
            let fill: Vec<T> = (0..misses).flat_map(|_| bg.iter().copied()).collect();
            let miss_rows = tape.constant(vec![misses, 3], fill)?;
            let all = match hit_rgb {
                Some(h) => tape.concat(&[h, miss_rows], 0)?,
                None => miss_rows,
            };
            let (mut hi, mut mi) = (0, hit_rays.len());
            let order: Vec<usize> = clipped
                .iter()
                .map(|c| {
                    let slot = if c.is_some() { &mut hi } else { &mut mi };
                    *slot += 1;
                    *slot - 1
                })
                .collect();
            tape.gather_rows(all, &order)?
        }
    };
    Ok(Rendered { rgb, queries })
}

/// Renders a patch and returns it as a `[1, 3, K, K]` image tensor.
#[allow(clippy::too_many_arguments)]
pub fn render_patch<T: Real>(
    tape: &mut Tape<T>,
    field: &ConditionalField<T>,
    bound: &Bound,
    latent: &LatentPair,
    sel: Selection,
    k: &Intrinsics,
    pose: &Pose,
    pattern: &PatchPattern,
    cfg: &SamplingConfig,
    rng: &mut impl Rng,
) -> Result<Var> {
    let (tn, tf) = geometry::scene_bounds(pose, cfg.scene_radius)?;
    let rays = geometry::generate_patch_rays(k, pose, pattern, tn, tf)?;
    let out = render_rays(tape, field, bound, latent, sel, &rays, cfg, rng)?;
    rows_to_chw(tape, out.rgb, pattern.size, pattern.size)
}

/// `[H·W, 3]` row-major pixels to a `[1, 3, H, W]` image tensor.
pub fn rows_to_chw<T: Real>(tape: &mut Tape<T>, rgb: Var, height: usize, width: usize) -> Result<Var> {
    let t = tape.transpose(rgb)?;
    tape.reshape(t, vec![1, 3, height, width])
}

/// Full image render without gradients, in chunks of rays.
pub fn render_image<T: Real>(
    field: &ConditionalField<T>,
    latent: &LatentPair,
    sel: Selection,
    k: &Intrinsics,
    pose: &Pose,
    cfg: &SamplingConfig,
    rng: &mut impl Rng,
) -> Result<RgbImage> {
    const CHUNK: usize = 2048;
    let (tn, tf) = geometry::scene_bounds(pose, cfg.scene_radius)?;
    let rays = geometry::image_rays(k, pose, tn, tf)?;
    let mut data = Vec::with_capacity(rays.len() * 3);
    for chunk in rays.chunks(CHUNK) {
        let mut tape = Tape::new();
        let bound = field.params().bind_frozen(&mut tape)?;
        let out = render_rays(&mut tape, field, &bound, latent, sel, chunk, cfg, rng)?;
        data.extend(tape.value(out.rgb).iter().map(|v| v.as_f64() as f32));
    }
    RgbImage::new(k.width, k.height, data)
}
