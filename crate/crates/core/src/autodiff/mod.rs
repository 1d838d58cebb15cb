//! Minimal reverse-mode automatic differentiation over dense tensors, plus
//! the RMSprop optimizer.
//!
//! Computations are recorded on a [`Tape`] and referenced through [`Var`]
//! handles. Network weights live in a [`ParamSet`] outside the tape; each
//! step binds them to a fresh tape, runs forward, calls
//! [`Tape::backward`] on a scalar loss and pulls gradients back with
//! [`ParamSet::collect_grads`].

mod ops_nn;
mod ops_volume;
mod optim;
mod params;
mod real;
mod tape;
mod tensor;

pub use ops_volume::{composite_ray, RayComposite};
pub use optim::RmsProp;
pub use params::{Bound, ParamId, ParamSet};
pub use real::Real;
pub use tape::{Tape, Var};
pub use tensor::{numel, Tensor};

pub(crate) use tape::softmax;
