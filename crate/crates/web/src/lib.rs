//! Browser bindings. Images come back as RGBA bytes ready for `ImageData`.

use labelfield::autodiff::composite_ray;
use labelfield::checkpoint::{field_from_checkpoint, Checkpoint};
use labelfield::dataset::{raytrace_reference, SceneSpec};
use labelfield::field::{ConditionalField, LatentPair, Selection};
use labelfield::geometry::{pixel_ray, pose_to_camera, scene_bounds, Intrinsics, Pose, Ray};
use labelfield::image::RgbImage;
use labelfield::nn::seeded;
use labelfield::renderer::{clip_to_sphere, deltas, render_image, stratified_midpoints, SamplingConfig};
use labelfield::{Error, Result};
use wasm_bindgen::prelude::*;

fn rgba(img: &RgbImage) -> Vec<u8> {
    img.to_u8().chunks(3).flat_map(|p| [p[0], p[1], p[2], 255]).collect()
}

fn js(e: Error) -> JsError {
    JsError::new(&e.to_string())
}

/// Ground-truth render of one analytic scene.
pub fn trace_rgba(class: usize, style: usize, yaw: f64, pitch: f64, radius: f64, shift: f64, size: usize) -> Result<Vec<u8>> {
    let spec = SceneSpec::new(class, style)?;
    let k = Intrinsics::for_image(size, size)?;
    let pose = Pose::new(radius, yaw, pitch, shift)?;
    Ok(rgba(&raytrace_reference(&spec, &k, &pose)?))
}

#[wasm_bindgen]
pub fn trace_scene(class: usize, style: usize, yaw: f64, pitch: f64, radius: f64, shift: f64, size: usize) -> Result<Vec<u8>, JsError> {
    trace_rgba(class, style, yaw, pitch, radius, shift, size).map_err(js)
}

/// A field loaded from checkpoint bytes.
#[wasm_bindgen]
pub struct Model {
    field: ConditionalField<f32>,
    sampling: SamplingConfig,
    radius: f64,
}

impl Model {
    pub fn from_bytes(bytes: &[u8]) -> Result<Model> {
        let ck = Checkpoint::from_bytes(bytes)?;
        let field = field_from_checkpoint(&ck)?;
        let get = |k: &str, d: f64| ck.get(k).and_then(|v| v.parse().ok()).unwrap_or(d);
        // lighter sampling than training keeps the page responsive
        let coarse = (get("sampling.coarse", 32.0) as usize).clamp(4, 32);
        let sampling = SamplingConfig {
            coarse,
            fine: 0,
            hierarchical: false,
            jitter: false,
            scene_radius: get("sampling.scene_radius", SamplingConfig::default().scene_radius),
            ..SamplingConfig::default()
        };
        Ok(Model {
            field,
            sampling,
            radius: get("radius", 4.0),
        })
    }

    fn latent(&self, seed: u64) -> LatentPair {
        let c = self.field.config();
        if seed == 0 {
            self.field.anchor.clone()
        } else {
            LatentPair::sample(c.shape_dim, c.appearance_dim, &mut seeded(seed))
        }
    }

    /// `kind` is `labels`, `color` or `density`. For `color`, `fixed` is the
    /// class; for `density` it is the style.
    #[allow(clippy::too_many_arguments)]
    pub fn render_rgba(&self, kind: &str, fixed: usize, from: usize, to: usize, lambda: f64, yaw: f64, pitch: f64, size: usize, seed: u64) -> Result<Vec<u8>> {
        let sel = match kind {
            "labels" => Selection::labels(from, fixed),
            "color" => Selection::ColorBlend { class: fixed, from, to, lambda },
            "density" => Selection::DensityBlend { from, to, style: fixed, lambda },
            _ => return Err(Error::contract(format!("unknown render kind {kind:?}"))),
        };
        let k = Intrinsics::for_image(size, size)?;
        let pose = Pose::new(self.radius, yaw, pitch, 0.0)?;
        let img = render_image(&self.field, &self.latent(seed), sel, &k, &pose, &self.sampling, &mut seeded(seed))?;
        Ok(rgba(&img))
    }

    /// Compositing weights along the centre pixel ray, then the final
    /// transmittance as the last entry.
    pub fn profile(&self, class: usize, style: usize, yaw: f64, pitch: f64, samples: usize, seed: u64) -> Result<Vec<f64>> {
        let pose = Pose::new(self.radius, yaw, pitch, 0.0)?;
        let k = Intrinsics::for_image(33, 33)?;
        let (tn, tf) = scene_bounds(&pose, self.sampling.scene_radius)?;
        let ray = pixel_ray(&k, &pose_to_camera(&pose)?, 16.0, 16.0, tn, tf);
        let Some((a, b)) = clip_to_sphere(&ray, self.sampling.scene_radius) else {
            return Ok(vec![0.0; samples].into_iter().chain([1.0]).collect());
        };
        let clipped = Ray { t_near: a, t_far: b, ..ray };
        let t = stratified_midpoints(&clipped, samples)?;
        let r = self.sampling.scene_radius;
        let pts: Vec<[f64; 3]> = t
            .iter()
            .map(|&ti| clipped.at(ti).map(|c| c / r))
            .collect();
        let dirs = vec![ray.direction; pts.len()];
        let (zs, za) = self.field.embed(&self.latent(seed), class, style)?;
        let out = self.field.query(&pts, &dirs, &zs, &za)?;
        let ds = self.field.density_slot(class);
        let cs = self.field.color_slot(style);
        let sigma: Vec<f64> = out.iter().map(|(s, _)| s[ds] as f64).collect();
        let rgb: Vec<f64> = out.iter().flat_map(|(_, c)| c[cs].map(|v| v as f64)).collect();
        let delta = deltas(&t, b, a);
        let comp = composite_ray(&sigma, &rgb, &delta, [1.0; 3]);
        Ok(comp.weights.into_iter().chain([comp.t_final]).collect())
    }
}

#[wasm_bindgen]
impl Model {
    #[wasm_bindgen(constructor)]
    pub fn new(bytes: &[u8]) -> Result<Model, JsError> {
        Model::from_bytes(bytes).map_err(js)
    }

    pub fn classes(&self) -> usize {
        self.field.config().classes
    }

    pub fn styles(&self) -> usize {
        self.field.config().styles
    }

    /// Seed 0 renders the stored anchor latent.
    #[allow(clippy::too_many_arguments)]
    pub fn render(&self, kind: &str, fixed: usize, from: usize, to: usize, lambda: f64, yaw: f64, pitch: f64, size: usize, seed: u64) -> Result<Vec<u8>, JsError> {
        self.render_rgba(kind, fixed, from, to, lambda, yaw, pitch, size, seed).map_err(js)
    }

    pub fn ray_profile(&self, class: usize, style: usize, yaw: f64, pitch: f64, samples: usize, seed: u64) -> Result<Vec<f64>, JsError> {
        self.profile(class, style, yaw, pitch, samples, seed).map_err(js)
    }
}
