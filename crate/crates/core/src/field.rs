//! Label-conditioned radiance field.
//!
//! A single MLP maps `(γ(x), z'_s)` to a hidden code `h`, reads a density
//! array of length M (one per class) off `h`, and maps `(h, γ(d), z'_a)` to a
//! colour array of N RGB triples (one per style). Label codes enter by
//! elementwise multiplication with the latent codes.

use rand::Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::autodiff::{Bound, ParamId, ParamSet, Real, Tape, Tensor, Var};
use crate::encoding::EncodingConfig;
use crate::error::{ensure, Result};
use crate::nn::{gaussian, Linear};

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct FieldConfig {
    pub classes: usize,
    pub styles: usize,
    pub shape_dim: usize,
    pub appearance_dim: usize,
    /// Hidden width of the trunk.
    pub width: usize,
    /// Number of hidden trunk layers.
    pub depth: usize,
    pub color_width: usize,
    pub encoding: EncodingConfig,
    /// When false the latent codes bypass the embedding tables.
    pub label_input: bool,
    /// When false the heads emit a single density and a single colour.
    pub label_arrays: bool,
}

impl Default for FieldConfig {
    fn default() -> Self {
        Self {
            classes: 4,
            styles: 4,
            shape_dim: 128,
            appearance_dim: 128,
            width: 128,
            depth: 4,
            color_width: 64,
            encoding: EncodingConfig::default(),
            label_input: true,
            label_arrays: true,
        }
    }
}

impl FieldConfig {
    pub fn validate(&self) -> Result<()> {
        self.encoding.validate()?;
        ensure!(
            self.classes >= 1 && self.styles >= 1,
            "field: need at least one class and one style"
        );
        ensure!(
            self.shape_dim >= 1 && self.appearance_dim >= 1,
            "field: latent dimensions must be positive"
        );
        ensure!(
            self.width >= 1 && self.depth >= 1 && self.color_width >= 1,
            "field: layer sizes must be positive"
        );
        Ok(())
    }

    pub fn density_outputs(&self) -> usize {
        if self.label_arrays {
            self.classes
        } else {
            1
        }
    }

    pub fn color_outputs(&self) -> usize {
        if self.label_arrays {
            self.styles
        } else {
            1
        }
    }
}

/// Shape and appearance latent codes.
#[derive(Clone, Debug, PartialEq)]
pub struct LatentPair {
    pub z_s: Vec<f32>,
    pub z_a: Vec<f32>,
}

impl LatentPair {
    /// Standard normal draw per dimension.
    pub fn sample(shape_dim: usize, appearance_dim: usize, rng: &mut impl Rng) -> Self {
        let mut draw = |n: usize| -> Vec<f32> {
            (0..n)
                .map(|_| {
                    let v: f64 = StandardNormal.sample(rng);
                    v as f32
                })
                .collect()
        };
        let z_s = draw(shape_dim);
        let z_a = draw(appearance_dim);
        Self { z_s, z_a }
    }

    pub fn ones(shape_dim: usize, appearance_dim: usize) -> Self {
        Self {
            z_s: vec![1.0; shape_dim],
            z_a: vec![1.0; appearance_dim],
        }
    }

    pub fn is_finite(&self) -> bool {
        self.z_s.iter().chain(&self.z_a).all(|v| v.is_finite())
    }
}

/// `z'_s = z_s ⊙ class_row`, `z'_a = z_a ⊙ style_row`.
pub fn embed_labels(
    z: &LatentPair,
    class_row: &[f32],
    style_row: &[f32],
) -> Result<(Vec<f32>, Vec<f32>)> {
    ensure!(
        z.z_s.len() == class_row.len() && z.z_a.len() == style_row.len(),
        "embed_labels: latent dims ({}, {}) do not match table rows ({}, {})",
        z.z_s.len(),
        z.z_a.len(),
        class_row.len(),
        style_row.len()
    );
    let zs = z.z_s.iter().zip(class_row).map(|(a, b)| a * b).collect();
    let za = z.z_a.iter().zip(style_row).map(|(a, b)| a * b).collect();
    Ok((zs, za))
}

/// `(1 − λ)·c[i] + λ·c[j]`.
pub fn interpolate_color(colors: &[[f32; 3]], i: usize, j: usize, lambda: f32) -> Result<[f32; 3]> {
    check_lambda(lambda as f64)?;
    ensure!(
        i < colors.len() && j < colors.len(),
        "interpolate_color: index out of range for {} colours",
        colors.len()
    );
    let mut out = [0.0; 3];
    for c in 0..3 {
        out[c] = (1.0 - lambda) * colors[i][c] + lambda * colors[j][c];
    }
    Ok(out)
}

/// `(1 − λ)·σ[i] + λ·σ[j]`.
pub fn interpolate_density(sigmas: &[f32], i: usize, j: usize, lambda: f32) -> Result<f32> {
    check_lambda(lambda as f64)?;
    ensure!(
        i < sigmas.len() && j < sigmas.len(),
        "interpolate_density: index out of range for {} densities",
        sigmas.len()
    );
    Ok((1.0 - lambda) * sigmas[i] + lambda * sigmas[j])
}

pub(crate) fn check_lambda(lambda: f64) -> Result<()> {
    ensure!(
        (0.0..=1.0).contains(&lambda),
        "interpolation coefficient {lambda} outside [0, 1]"
    );
    Ok(())
}

/// Which slots of the output arrays a render reads.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Selection {
    Labels {
        class: usize,
        style: usize,
    },
    /// Colour blended between two styles, shape from `class`.
    ColorBlend {
        class: usize,
        from: usize,
        to: usize,
        lambda: f64,
    },
    /// Density blended between two classes, colour from `style`.
    DensityBlend {
        from: usize,
        to: usize,
        style: usize,
        lambda: f64,
    },
}

impl Selection {
    pub fn labels(class: usize, style: usize) -> Self {
        Selection::Labels { class, style }
    }

    pub fn validate(&self, config: &FieldConfig) -> Result<()> {
        let (classes, styles, lambda) = match *self {
            Selection::Labels { class, style } => (vec![class], vec![style], 0.0),
            Selection::ColorBlend {
                class,
                from,
                to,
                lambda,
            } => (vec![class], vec![from, to], lambda),
            Selection::DensityBlend {
                from,
                to,
                style,
                lambda,
            } => (vec![from, to], vec![style], lambda),
        };
        check_lambda(lambda)?;
        for c in classes {
            ensure!(
                c < config.classes,
                "class id {c} out of range (M = {})",
                config.classes
            );
        }
        for s in styles {
            ensure!(
                s < config.styles,
                "style id {s} out of range (N = {})",
                config.styles
            );
        }
        Ok(())
    }
}

/// Per-point outputs of one forward pass.
#[derive(Clone, Copy, Debug)]
pub struct FieldOutput {
    /// `[P, M]` (or `[P, 1]` without label arrays), nonnegative.
    pub sigma: Var,
    /// `[P, 3N]` (or `[P, 3]`), in `[0, 1]`.
    pub color: Var,
}

#[derive(Clone, Debug)]
pub struct ConditionalField<T: Real = f32> {
    config: FieldConfig,
    params: ParamSet<T>,
    class_table: ParamId,
    style_table: ParamId,
    input_position: Linear,
    input_shape_code: ParamId,
    hidden: Vec<Linear>,
    density_head: Linear,
    color_hidden: Linear,
    color_direction: ParamId,
    color_appearance: ParamId,
    color_out: Linear,
    /// Fixed latent pair used by reconstruction training and its renders.
    pub anchor: LatentPair,
}

impl<T: Real> ConditionalField<T> {
    pub fn new(config: FieldConfig, rng: &mut impl Rng) -> Result<Self> {
        config.validate()?;
        let mut p = ParamSet::new();
        let c = &config;
        let class_table = p.add(
            "embed.class",
            gaussian(vec![c.classes, c.shape_dim], 1.0, 0.02, rng),
        );
        let style_table = p.add(
            "embed.style",
            gaussian(vec![c.styles, c.appearance_dim], 1.0, 0.02, rng),
        );
        let pos_dim = c.encoding.position_dim();
        let in_fan = pos_dim + c.shape_dim;
        let bound = (6.0 / in_fan as f64).sqrt();
        let input_position = Linear::with_bound(&mut p, "trunk.0", pos_dim, c.width, bound, rng);
        let input_shape_code = p.add(
            "trunk.0.shape_code",
            crate::nn::uniform(vec![c.shape_dim, c.width], bound, rng),
        );
        let hidden = (1..c.depth)
            .map(|l| Linear::new(&mut p, &format!("trunk.{l}"), c.width, c.width, rng))
            .collect();
        let density_head = Linear::with_bound(
            &mut p,
            "density",
            c.width,
            c.density_outputs(),
            (3.0 / c.width as f64).sqrt(),
            rng,
        );
        let dir_dim = c.encoding.direction_dim();
        let color_fan = c.width + dir_dim + c.appearance_dim;
        let cb = (6.0 / color_fan as f64).sqrt();
        let color_hidden = Linear::with_bound(&mut p, "color.0", c.width, c.color_width, cb, rng);
        let color_direction = p.add(
            "color.0.direction",
            crate::nn::uniform(vec![dir_dim, c.color_width], cb, rng),
        );
        let color_appearance = p.add(
            "color.0.appearance_code",
            crate::nn::uniform(vec![c.appearance_dim, c.color_width], cb, rng),
        );
        let color_out = Linear::with_bound(
            &mut p,
            "color.out",
            c.color_width,
            3 * c.color_outputs(),
            (3.0 / c.color_width as f64).sqrt(),
            rng,
        );
        let anchor = LatentPair::sample(c.shape_dim, c.appearance_dim, rng);
        Ok(Self {
            config,
            params: p,
            class_table,
            style_table,
            input_position,
            input_shape_code,
            hidden,
            density_head,
            color_hidden,
            color_direction,
            color_appearance,
            color_out,
            anchor,
        })
    }

    pub fn config(&self) -> &FieldConfig {
        &self.config
    }

    pub fn params(&self) -> &ParamSet<T> {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamSet<T> {
        &mut self.params
    }

    pub fn class_table(&self) -> ParamId {
        self.class_table
    }

    pub fn style_table(&self) -> ParamId {
        self.style_table
    }

    pub fn density_head(&self) -> Linear {
        self.density_head
    }

    /// Replaces every parameter tensor; names and shapes must match.
    pub fn load_params(&mut self, params: ParamSet<T>) -> Result<()> {
        ensure!(
            params.names() == self.params.names(),
            "field: parameter names do not match the configured architecture"
        );
        for ((name, new), (_, old)) in params.iter().zip(self.params.iter()) {
            ensure!(
                new.shape() == old.shape(),
                "field: parameter {name} has shape {:?}, expected {:?}",
                new.shape(),
                old.shape()
            );
        }
        self.params = params;
        Ok(())
    }

    fn table_row(&self, table: ParamId, row: usize) -> &[T] {
        let t: &Tensor<T> = self.params.get(table);
        let dim = t.shape()[1];
        &t.values()[row * dim..(row + 1) * dim]
    }

    fn check_labels(&self, class: usize, style: usize) -> Result<()> {
        ensure!(
            class < self.config.classes,
            "class id {class} out of range (M = {})",
            self.config.classes
        );
        ensure!(
            style < self.config.styles,
            "style id {style} out of range (N = {})",
            self.config.styles
        );
        Ok(())
    }

    /// Conditioned codes as plain values.
    pub fn embed(&self, z: &LatentPair, class: usize, style: usize) -> Result<(Vec<f32>, Vec<f32>)> {
        self.check_labels(class, style)?;
        if !self.config.label_input {
            return Ok((z.z_s.clone(), z.z_a.clone()));
        }
        let row = |t, r| -> Vec<f32> {
            self.table_row(t, r).iter().map(|v| v.as_f64() as f32).collect()
        };
        embed_labels(z, &row(self.class_table, class), &row(self.style_table, style))
    }

    /// Conditioned codes on the tape, `[1, dim]` each, differentiable with
    /// respect to the selected table rows.
    pub fn embed_on_tape(
        &self,
        tape: &mut Tape<T>,
        bound: &Bound,
        z: &LatentPair,
        class: usize,
        style: usize,
    ) -> Result<(Var, Var)> {
        self.check_labels(class, style)?;
        let c = &self.config;
        ensure!(
            z.z_s.len() == c.shape_dim && z.z_a.len() == c.appearance_dim,
            "latent dims ({}, {}) do not match field ({}, {})",
            z.z_s.len(),
            z.z_a.len(),
            c.shape_dim,
            c.appearance_dim
        );
        let lit = |v: &[f32]| v.iter().map(|&x| T::lit(x as f64)).collect::<Vec<_>>();
        let zs = tape.constant(vec![1, c.shape_dim], lit(&z.z_s))?;
        let za = tape.constant(vec![1, c.appearance_dim], lit(&z.z_a))?;
        if !c.label_input {
            return Ok((zs, za));
        }
        let crow = tape.gather_rows(bound[self.class_table], &[class])?;
        let srow = tape.gather_rows(bound[self.style_table], &[style])?;
        Ok((tape.mul(zs, crow)?, tape.mul(za, srow)?))
    }

    /// Runs the network on `P` encoded points. `pos_enc: [P, 6·L_x]`,
    /// `dir_enc: [P, 4·L_d]`, `zs: [1, dim_s]`, `za: [1, dim_a]`.
    pub fn forward(
        &self,
        tape: &mut Tape<T>,
        bound: &Bound,
        pos_enc: Var,
        dir_enc: Var,
        zs: Var,
        za: Var,
    ) -> Result<FieldOutput> {
        let c = &self.config;
        let p = tape.shape(pos_enc)[0];
        ensure!(
            tape.shape(pos_enc) == [p, c.encoding.position_dim()]
                && tape.shape(dir_enc) == [p, c.encoding.direction_dim()],
            "field: encoded inputs have shapes {:?} / {:?}",
            tape.shape(pos_enc),
            tape.shape(dir_enc)
        );
        ensure!(
            tape.shape(zs) == [1, c.shape_dim] && tape.shape(za) == [1, c.appearance_dim],
            "field: latent codes have shapes {:?} / {:?}",
            tape.shape(zs),
            tape.shape(za)
        );
        let x = self.input_position.forward(tape, bound, pos_enc)?;
        let code = tape.matmul(zs, bound[self.input_shape_code])?;
        let x = tape.add(x, code)?;
        let mut h = tape.relu(x)?;
        for layer in &self.hidden {
            let y = layer.forward(tape, bound, h)?;
            h = tape.relu(y)?;
        }
        let s = self.density_head.forward(tape, bound, h)?;
        let sigma = tape.softplus(s)?;

        let y = self.color_hidden.forward(tape, bound, h)?;
        let yd = tape.matmul(dir_enc, bound[self.color_direction])?;
        let ya = tape.matmul(za, bound[self.color_appearance])?;
        let y = tape.add(y, yd)?;
        let y = tape.add(y, ya)?;
        let y = tape.relu(y)?;
        let o = self.color_out.forward(tape, bound, y)?;
        let color = tape.sigmoid(o)?;
        Ok(FieldOutput { sigma, color })
    }

    /// Slot of the density array used for `class`.
    pub fn density_slot(&self, class: usize) -> usize {
        if self.config.label_arrays {
            class
        } else {
            0
        }
    }

    pub fn color_slot(&self, style: usize) -> usize {
        if self.config.label_arrays {
            style
        } else {
            0
        }
    }

    /// Evaluates the field at single points without recording gradients.
    /// Returns the density array and colour array for each point.
    pub fn query(
        &self,
        points: &[[f64; 3]],
        directions: &[[f64; 3]],
        zs: &[f32],
        za: &[f32],
    ) -> Result<Vec<(Vec<f32>, Vec<[f32; 3]>)>> {
        ensure!(
            points.len() == directions.len(),
            "query: {} points but {} directions",
            points.len(),
            directions.len()
        );
        let c = &self.config;
        let mut pos = Vec::with_capacity(points.len() * c.encoding.position_dim());
        let mut dir = Vec::with_capacity(points.len() * c.encoding.direction_dim());
        for (x, d) in points.iter().zip(directions) {
            crate::encoding::encode_position_into(*x, c.encoding.position_freqs, &mut pos)?;
            crate::encoding::encode_direction_into(*d, c.encoding.direction_freqs, &mut dir)?;
        }
        let mut tape = Tape::new();
        let bound = self.params.bind_frozen(&mut tape)?;
        let n = points.len();
        let pos = tape.constant(vec![n, c.encoding.position_dim()], pos)?;
        let dir = tape.constant(vec![n, c.encoding.direction_dim()], dir)?;
        let lit = |v: &[f32]| v.iter().map(|&x| T::lit(x as f64)).collect::<Vec<_>>();
        ensure!(
            zs.len() == c.shape_dim && za.len() == c.appearance_dim,
            "query: latent dims do not match field"
        );
        let zs = tape.constant(vec![1, c.shape_dim], lit(zs))?;
        let za = tape.constant(vec![1, c.appearance_dim], lit(za))?;
        let out = self.forward(&mut tape, &bound, pos, dir, zs, za)?;
        let (m, nc) = (c.density_outputs(), c.color_outputs());
        let sv = tape.value(out.sigma);
        let cv = tape.value(out.color);
        Ok((0..n)
            .map(|p| {
                let sig = sv[p * m..(p + 1) * m].iter().map(|v| v.as_f64() as f32).collect();
                let col = (0..nc)
                    .map(|k| {
                        let b = p * 3 * nc + 3 * k;
                        [
                            cv[b].as_f64() as f32,
                            cv[b + 1].as_f64() as f32,
                            cv[b + 2].as_f64() as f32,
                        ]
                    })
                    .collect();
                (sig, col)
            })
            .collect())
    }
}
