//! Per-ray alpha compositing and its adjoint.

use super::Real;

/// Result of compositing one ray.
#[derive(Clone, Debug, PartialEq)]
pub struct RayComposite<T> {
    /// `Σ_i T_i α_i c_i + T_final · background`.
    pub rgb: [T; 3],
    /// Transmittance past the last sample, `Π_i (1 − α_i)`.
    pub t_final: T,
    /// Compositing weights `w_i = T_i α_i`.
    pub weights: Vec<T>,
    /// Transmittance `T_i` arriving at each sample (`T_1 = 1`).
    pub transmittance: Vec<T>,
    pub alpha: Vec<T>,
}

/// Composites one ray: `sigma` and `delta` hold one value per sample, `rgb`
/// three per sample.
pub fn composite_ray<T: Real>(
    sigma: &[T],
    rgb: &[T],
    delta: &[T],
    background: [T; 3],
) -> RayComposite<T> {
    let n = sigma.len();
    let mut out = [T::zero(); 3];
    let mut weights = Vec::with_capacity(n);
    let mut transmittance = Vec::with_capacity(n);
    let mut alpha = Vec::with_capacity(n);
    let mut t = T::one();
    for i in 0..n {
        // 1 - exp(-x) without cancellation for small x
        let a = -(-sigma[i] * delta[i]).exp_m1();
        let w = t * a;
        for c in 0..3 {
            out[c] = out[c] + w * rgb[3 * i + c];
        }
        transmittance.push(t);
        weights.push(w);
        alpha.push(a);
        t = t * (T::one() - a);
    }
    for c in 0..3 {
        out[c] = out[c] + t * background[c];
    }
    RayComposite {
        rgb: out,
        t_final: t,
        weights,
        transmittance,
        alpha,
    }
}

/// Adjoint of [`composite_ray`] for upstream gradient `g` on the pixel.
///
/// `∂C/∂c_k = w_k` and
/// `∂C/∂σ_k = δ_k (T_{k+1} c_k − Σ_{i>k} w_i c_i − T_final · bg)`.
pub(crate) fn composite_ray_backward<T: Real>(
    sigma: &[T],
    rgb: &[T],
    delta: &[T],
    background: [T; 3],
    g: &[T],
    grad_sigma: &mut [T],
    grad_rgb: &mut [T],
) {
    let fwd = composite_ray(sigma, rgb, delta, background);
    let dot = |c: &[T]| g[0] * c[0] + g[1] * c[1] + g[2] * c[2];
    let mut tail = dot(&background) * fwd.t_final;
    for k in (0..sigma.len()).rev() {
        let ck = &rgb[3 * k..3 * k + 3];
        let t_next = fwd.transmittance[k] * (T::one() - fwd.alpha[k]);
        grad_sigma[k] = grad_sigma[k] + delta[k] * (t_next * dot(ck) - tail);
        tail = tail + fwd.weights[k] * dot(ck);
        for c in 0..3 {
            grad_rgb[3 * k + c] = grad_rgb[3 * k + c] + fwd.weights[k] * g[c];
        }
    }
}
