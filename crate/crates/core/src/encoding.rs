//! Sinusoidal positional encoding.
//!
//! Each scalar component `p` becomes
//! `[sin(2⁰πp), cos(2⁰πp), …, sin(2^{L−1}πp), cos(2^{L−1}πp)]`; components
//! are encoded independently and concatenated. Positions use their three
//! coordinates, view directions two angles.

use std::f64::consts::PI;

use crate::autodiff::{Real, Tape, Var};
use crate::error::{ensure, Error, Result};
use crate::geometry::Vec3;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct EncodingConfig {
    pub position_freqs: usize,
    pub direction_freqs: usize,
}

impl Default for EncodingConfig {
    fn default() -> Self {
        Self {
            position_freqs: 10,
            direction_freqs: 4,
        }
    }
}

impl EncodingConfig {
    pub fn validate(&self) -> Result<()> {
        ensure!(
            self.position_freqs >= 1 && self.direction_freqs >= 1,
            "encoding: frequency counts must be at least 1"
        );
        Ok(())
    }

    pub fn position_dim(&self) -> usize {
        3 * 2 * self.position_freqs
    }

    pub fn direction_dim(&self) -> usize {
        2 * 2 * self.direction_freqs
    }
}

/// Every component has period 2 in `p`. Reducing to `[0, 2)` first makes
/// `encode(p)` and `encode(p + 2)` bitwise equal whenever `p + 2` is exact.
fn period_reduce(p: f64) -> f64 {
    p - 2.0 * (p / 2.0).floor()
}

pub fn encode(p: f64, freqs: usize) -> Result<Vec<f64>> {
    let mut out = Vec::with_capacity(2 * freqs);
    encode_into(p, freqs, &mut out)?;
    Ok(out)
}

pub fn encode_into<T: Real>(p: f64, freqs: usize, out: &mut Vec<T>) -> Result<()> {
    if !p.is_finite() {
        return Err(Error::numeric("encode", format!("non-finite input {p}")));
    }
    let p = period_reduce(p);
    let mut f = PI;
    for _ in 0..freqs {
        let (s, c) = (f * p).sin_cos();
        out.push(T::lit(s));
        out.push(T::lit(c));
        f *= 2.0;
    }
    Ok(())
}

/// `d/dp` of [`encode`], in the same layout.
pub fn encode_derivative(p: f64, freqs: usize) -> Vec<f64> {
    let p = period_reduce(p);
    let mut out = Vec::with_capacity(2 * freqs);
    let mut f = PI;
    for _ in 0..freqs {
        let (s, c) = (f * p).sin_cos();
        out.push(f * c);
        out.push(-f * s);
        f *= 2.0;
    }
    out
}

/// The two angular components of a unit direction, each in `[−1, 1]`.
pub fn direction_angles(d: Vec3) -> [f64; 2] {
    [
        d[0].atan2(d[2]) / PI,
        d[1].clamp(-1.0, 1.0).asin() / (PI / 2.0),
    ]
}

pub fn encode_position_into<T: Real>(x: Vec3, freqs: usize, out: &mut Vec<T>) -> Result<()> {
    for c in x {
        encode_into(c, freqs, out)?;
    }
    Ok(())
}

pub fn encode_direction_into<T: Real>(d: Vec3, freqs: usize, out: &mut Vec<T>) -> Result<()> {
    for c in direction_angles(d) {
        encode_into(c, freqs, out)?;
    }
    Ok(())
}

pub fn encode_position(x: Vec3, freqs: usize) -> Result<Vec<f64>> {
    let mut out = Vec::with_capacity(6 * freqs);
    encode_position_into(x, freqs, &mut out)?;
    Ok(out)
}

pub fn encode_direction(d: Vec3, freqs: usize) -> Result<Vec<f64>> {
    let mut out = Vec::with_capacity(4 * freqs);
    encode_direction_into(d, freqs, &mut out)?;
    Ok(out)
}

/// Differentiable encoding of `x: [P, C]` into `[P, C·2L]`, with the same
/// per-component layout as [`encode`].
pub fn encode_var<T: Real>(tape: &mut Tape<T>, x: Var, freqs: usize) -> Result<Var> {
    let shape = tape.shape(x).to_vec();
    ensure!(shape.len() == 2, "encode_var: expected [P, C], got {shape:?}");
    let (p, c) = (shape[0], shape[1]);
    let mut parts = Vec::with_capacity(c * 2 * freqs);
    for comp in 0..c {
        let col = tape.slice(x, 1, comp, 1)?;
        // same reduction as encode_into; a constant shift, so gradients are unchanged
        let shift: Vec<T> = tape.value(col).iter().map(|v| T::lit(-2.0 * (v.as_f64() / 2.0).floor())).collect();
        let shift = tape.constant(vec![p, 1], shift)?;
        let col = tape.add(col, shift)?;
        let mut f = PI;
        for _ in 0..freqs {
            let arg = tape.scale(col, f)?;
            parts.push(tape.sin(arg)?);
            parts.push(tape.cos(arg)?);
            f *= 2.0;
        }
    }
    let out = tape.concat(&parts, 1)?;
    debug_assert_eq!(tape.shape(out), [p, c * 2 * freqs]);
    Ok(out)
}
