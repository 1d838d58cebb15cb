//! Small layer helpers shared by the field and the discriminators.

use rand::Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::autodiff::{Bound, ParamId, ParamSet, Real, Tape, Tensor, Var};
use crate::error::Result;

/// Deterministic generator used everywhere a seed is accepted.
pub type SeededRng = rand_chacha::ChaCha8Rng;

pub fn seeded(seed: u64) -> SeededRng {
    rand::SeedableRng::seed_from_u64(seed)
}

/// Uniform `[-bound, bound)` tensor.
pub fn uniform<T: Real>(shape: Vec<usize>, bound: f64, rng: &mut impl Rng) -> Tensor<T> {
    let n = crate::autodiff::numel(&shape);
    let v = (0..n)
        .map(|_| T::lit(rng.random_range(-bound..bound)))
        .collect();
    Tensor::new(shape, v).expect("length matches shape")
}

pub fn gaussian<T: Real>(shape: Vec<usize>, mean: f64, std: f64, rng: &mut impl Rng) -> Tensor<T> {
    let n = crate::autodiff::numel(&shape);
    let v = (0..n)
        .map(|_| {
            let z: f64 = StandardNormal.sample(rng);
            T::lit(mean + std * z)
        })
        .collect();
    Tensor::new(shape, v).expect("length matches shape")
}

/// Fully connected layer `y = x · W + b` with `W: [fan_in, fan_out]`.
#[derive(Clone, Copy, Debug)]
pub struct Linear {
    pub weight: ParamId,
    pub bias: ParamId,
    pub fan_in: usize,
    pub fan_out: usize,
}

impl Linear {
    /// He-uniform weights, zero bias.
    pub fn new<T: Real>(
        params: &mut ParamSet<T>,
        name: &str,
        fan_in: usize,
        fan_out: usize,
        rng: &mut impl Rng,
    ) -> Self {
        let bound = (6.0 / fan_in as f64).sqrt();
        Self::with_bound(params, name, fan_in, fan_out, bound, rng)
    }

    pub fn with_bound<T: Real>(
        params: &mut ParamSet<T>,
        name: &str,
        fan_in: usize,
        fan_out: usize,
        bound: f64,
        rng: &mut impl Rng,
    ) -> Self {
        let weight = params.add(
            format!("{name}.weight"),
            uniform(vec![fan_in, fan_out], bound, rng),
        );
        let bias = params.add(format!("{name}.bias"), Tensor::zeros(vec![fan_out]));
        Self {
            weight,
            bias,
            fan_in,
            fan_out,
        }
    }

    pub fn forward<T: Real>(&self, tape: &mut Tape<T>, bound: &Bound, x: Var) -> Result<Var> {
        tape.linear(x, bound[self.weight], bound[self.bias])
    }
}

/// Square-kernel convolution with bias.
#[derive(Clone, Copy, Debug)]
pub struct Conv2d {
    pub weight: ParamId,
    pub bias: ParamId,
    pub in_channels: usize,
    pub out_channels: usize,
    pub kernel: usize,
    pub stride: usize,
    pub padding: usize,
}

impl Conv2d {
    #[allow(clippy::too_many_arguments)]
    pub fn new<T: Real>(
        params: &mut ParamSet<T>,
        name: &str,
        in_channels: usize,
        out_channels: usize,
        kernel: usize,
        stride: usize,
        padding: usize,
        rng: &mut impl Rng,
    ) -> Self {
        let fan_in = in_channels * kernel * kernel;
        let bound = (6.0 / fan_in as f64).sqrt();
        let weight = params.add(
            format!("{name}.weight"),
            uniform(vec![out_channels, in_channels, kernel, kernel], bound, rng),
        );
        let bias = params.add(format!("{name}.bias"), Tensor::zeros(vec![out_channels]));
        Self {
            weight,
            bias,
            in_channels,
            out_channels,
            kernel,
            stride,
            padding,
        }
    }

    pub fn forward<T: Real>(&self, tape: &mut Tape<T>, bound: &Bound, x: Var) -> Result<Var> {
        tape.conv2d(
            x,
            bound[self.weight],
            Some(bound[self.bias]),
            self.stride,
            self.padding,
        )
    }

    pub fn fan_in(&self) -> usize {
        self.in_channels * self.kernel * self.kernel
    }
}
