use super::ops_nn::{self, ConvGeom, PoolGeom, ResizeGeom};
use super::ops_volume;
use super::tensor::numel;
use super::{Real, Tensor};
use crate::error::{ensure, Error, Result};

/// Handle to a node recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(pub(crate) usize);

impl Var {
    pub fn id(self) -> usize {
        self.0
    }
}

pub(crate) enum Op<T> {
    Leaf,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Div(Var, Var),
    Scale(Var, T),
    Offset(Var),
    MatMul(Var, Var),
    Linear(Var, Var, Var),
    Relu(Var),
    Sigmoid(Var),
    Tanh(Var),
    Exp(Var),
    Log(Var),
    Sin(Var),
    Cos(Var),
    Softplus(Var),
    Square(Var),
    Sum(Var),
    Mean(Var),
    MeanLastAxis(Var),
    Concat {
        inputs: Vec<Var>,
        axis: usize,
    },
    Slice {
        input: Var,
        axis: usize,
        start: usize,
    },
    Reshape(Var),
    Transpose(Var),
    GatherRows {
        input: Var,
        rows: Vec<usize>,
    },
    SoftmaxXent {
        logits: Var,
        probs: Vec<T>,
        targets: Vec<usize>,
    },
    Conv2d {
        x: Var,
        w: Var,
        b: Option<Var>,
        geom: ConvGeom,
    },
    MaxPool {
        x: Var,
        argmax: Vec<usize>,
    },
    InstanceNorm {
        x: Var,
        inv_std: Vec<T>,
        plane: usize,
    },
    Resize {
        x: Var,
        geom: ResizeGeom,
    },
    Composite {
        sigma: Var,
        rgb: Var,
        delta: Vec<T>,
        background: [T; 3],
        samples: usize,
    },
}

struct Node<T> {
    shape: Vec<usize>,
    value: Vec<T>,
    requires_grad: bool,
    op: Op<T>,
}

/// Reverse-mode recording of tensor operations.
///
/// Nodes are appended in evaluation order, so every op's inputs precede it.
/// [`Tape::backward`] walks the nodes once, last to first.
pub struct Tape<T: Real = f32> {
    nodes: Vec<Node<T>>,
    grads: Vec<Option<Vec<T>>>,
}

impl<T: Real> Default for Tape<T> {
    fn default() -> Self {
        Self::new()
    }
}

fn strip_leading_ones(shape: &[usize]) -> &[usize] {
    let first = shape.iter().position(|&d| d != 1).unwrap_or(shape.len());
    &shape[first..]
}

/// `small` can be tiled over `big` by repeating it along leading dimensions.
fn tiles_over(small: &[usize], big: &[usize]) -> bool {
    if numel(small) == 1 {
        return true;
    }
    let s = strip_leading_ones(small);
    s.len() <= big.len() && big[big.len() - s.len()..] == *s
}

fn accum<'a, T: Real>(grads: &'a mut [Option<Vec<T>>], v: Var, len: usize) -> &'a mut [T] {
    grads[v.0].get_or_insert_with(|| vec![T::zero(); len])
}

impl<T: Real> Tape<T> {
    pub fn new() -> Self {
        Self {
            nodes: Vec::new(),
            grads: Vec::new(),
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &[T] {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        &self.nodes[v.0].shape
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Gradient of the last `backward` root with respect to `v`, if any
    /// flowed there.
    pub fn grad(&self, v: Var) -> Option<&[T]> {
        self.grads.get(v.0).and_then(|g| g.as_deref())
    }

    pub fn to_tensor(&self, v: Var) -> Tensor<T> {
        let n = &self.nodes[v.0];
        Tensor::new(n.shape.clone(), n.value.clone()).expect("node shape consistent")
    }

    fn push(
        &mut self,
        name: &'static str,
        shape: Vec<usize>,
        value: Vec<T>,
        requires_grad: bool,
        op: Op<T>,
    ) -> Result<Var> {
        debug_assert_eq!(numel(&shape), value.len());
        if let Some(pos) = value.iter().position(|v| !v.is_finite()) {
            return Err(Error::numeric(
                name,
                format!("non-finite output at index {pos} ({})", value[pos]),
            ));
        }
        let op = if requires_grad { op } else { Op::Leaf };
        self.nodes.push(Node {
            shape,
            value,
            requires_grad,
            op,
        });
        Ok(Var(self.nodes.len() - 1))
    }

    fn rg(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Records a tensor as a leaf, honouring its `requires_grad` flag.
    pub fn leaf(&mut self, t: &Tensor<T>) -> Result<Var> {
        self.push(
            "leaf",
            t.shape().to_vec(),
            t.values().to_vec(),
            t.requires_grad(),
            Op::Leaf,
        )
    }

    pub fn constant(&mut self, shape: Vec<usize>, value: Vec<T>) -> Result<Var> {
        ensure!(
            numel(&shape) == value.len(),
            "constant: shape {shape:?} does not match {} values",
            value.len()
        );
        self.push("constant", shape, value, false, Op::Leaf)
    }

    pub fn variable(&mut self, shape: Vec<usize>, value: Vec<T>) -> Result<Var> {
        ensure!(
            numel(&shape) == value.len(),
            "variable: shape {shape:?} does not match {} values",
            value.len()
        );
        self.push("variable", shape, value, true, Op::Leaf)
    }

    /// Copy of `v` that blocks gradient flow.
    pub fn detach(&mut self, v: Var) -> Result<Var> {
        let n = &self.nodes[v.0];
        let (shape, value) = (n.shape.clone(), n.value.clone());
        self.constant(shape, value)
    }

    // ----- elementwise binary -----

    fn binary(
        &mut self,
        name: &'static str,
        a: Var,
        b: Var,
        f: impl Fn(T, T) -> T,
        op: Op<T>,
    ) -> Result<Var> {
        let (sa, sb) = (self.shape(a).to_vec(), self.shape(b).to_vec());
        let shape = if sa == sb || tiles_over(&sb, &sa) {
            sa
        } else if tiles_over(&sa, &sb) {
            sb
        } else {
            return Err(Error::contract(format!(
                "{name}: shapes {sa:?} and {sb:?} do not broadcast"
            )));
        };
        let (va, vb) = (self.value(a), self.value(b));
        let (na, nb) = (va.len(), vb.len());
        let value: Vec<T> = (0..numel(&shape))
            .map(|i| f(va[i % na], vb[i % nb]))
            .collect();
        let rg = self.rg(a) || self.rg(b);
        self.push(name, shape, value, rg, op)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary("add", a, b, |x, y| x + y, Op::Add(a, b))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary("sub", a, b, |x, y| x - y, Op::Sub(a, b))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary("mul", a, b, |x, y| x * y, Op::Mul(a, b))
    }

    pub fn div(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary("div", a, b, |x, y| x / y, Op::Div(a, b))
    }

    // ----- elementwise unary -----

    fn unary(&mut self, name: &'static str, a: Var, f: impl Fn(T) -> T, op: Op<T>) -> Result<Var> {
        let shape = self.shape(a).to_vec();
        let value = self.value(a).iter().map(|&x| f(x)).collect();
        let rg = self.rg(a);
        self.push(name, shape, value, rg, op)
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Result<Var> {
        let c = T::lit(c);
        self.unary("scale", a, |x| x * c, Op::Scale(a, c))
    }

    pub fn offset(&mut self, a: Var, c: f64) -> Result<Var> {
        let c = T::lit(c);
        self.unary("offset", a, |x| x + c, Op::Offset(a))
    }

    pub fn neg(&mut self, a: Var) -> Result<Var> {
        self.scale(a, -1.0)
    }

    pub fn relu(&mut self, a: Var) -> Result<Var> {
        self.unary("relu", a, |x| x.max(T::zero()), Op::Relu(a))
    }

    pub fn sigmoid(&mut self, a: Var) -> Result<Var> {
        self.unary("sigmoid", a, sigmoid, Op::Sigmoid(a))
    }

    pub fn tanh(&mut self, a: Var) -> Result<Var> {
        self.unary("tanh", a, T::tanh, Op::Tanh(a))
    }

    pub fn exp(&mut self, a: Var) -> Result<Var> {
        self.unary("exp", a, T::exp, Op::Exp(a))
    }

    pub fn log(&mut self, a: Var) -> Result<Var> {
        if let Some(x) = self.value(a).iter().find(|&&x| x <= T::zero()) {
            return Err(Error::contract(format!("log: input {x} outside (0, inf)")));
        }
        self.unary("log", a, T::ln, Op::Log(a))
    }

    pub fn sin(&mut self, a: Var) -> Result<Var> {
        self.unary("sin", a, T::sin, Op::Sin(a))
    }

    pub fn cos(&mut self, a: Var) -> Result<Var> {
        self.unary("cos", a, T::cos, Op::Cos(a))
    }

    /// `log(1 + exp(x))`, evaluated as `max(x, 0) + log1p(exp(-|x|))`.
    pub fn softplus(&mut self, a: Var) -> Result<Var> {
        self.unary("softplus", a, softplus, Op::Softplus(a))
    }

    pub fn square(&mut self, a: Var) -> Result<Var> {
        self.unary("square", a, |x| x * x, Op::Square(a))
    }

    // ----- linear algebra -----

    fn matrix_dims(&self, name: &str, v: Var) -> Result<(usize, usize)> {
        match self.shape(v) {
            [r, c] => Ok((*r, *c)),
            s => Err(Error::contract(format!("{name}: expected a matrix, got {s:?}"))),
        }
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (n, k) = self.matrix_dims("matmul", a)?;
        let (k2, m) = self.matrix_dims("matmul", b)?;
        ensure!(k == k2, "matmul: inner dimensions {k} and {k2} differ");
        let mut value = vec![T::zero(); n * m];
        T::gemm(n, k, m, self.value(a), false, self.value(b), false, &mut value, false);
        let rg = self.rg(a) || self.rg(b);
        self.push("matmul", vec![n, m], value, rg, Op::MatMul(a, b))
    }

    /// Fused `x · w + bias` with `x: [n, k]`, `w: [k, m]`, `bias: [m]`.
    pub fn linear(&mut self, x: Var, w: Var, bias: Var) -> Result<Var> {
        let (n, k) = self.matrix_dims("linear", x)?;
        let (k2, m) = self.matrix_dims("linear", w)?;
        ensure!(k == k2, "linear: input width {k} != weight rows {k2}");
        ensure!(
            self.value(bias).len() == m,
            "linear: bias length {} != {m}",
            self.value(bias).len()
        );
        let mut value = vec![T::zero(); n * m];
        for row in value.chunks_mut(m) {
            row.copy_from_slice(self.value(bias));
        }
        T::gemm(n, k, m, self.value(x), false, self.value(w), false, &mut value, true);
        let rg = self.rg(x) || self.rg(w) || self.rg(bias);
        self.push("linear", vec![n, m], value, rg, Op::Linear(x, w, bias))
    }

    pub fn transpose(&mut self, a: Var) -> Result<Var> {
        let (r, c) = self.matrix_dims("transpose", a)?;
        let src = self.value(a);
        let mut value = vec![T::zero(); r * c];
        for i in 0..r {
            for j in 0..c {
                value[j * r + i] = src[i * c + j];
            }
        }
        let rg = self.rg(a);
        self.push("transpose", vec![c, r], value, rg, Op::Transpose(a))
    }

    // ----- reductions -----

    pub fn sum(&mut self, a: Var) -> Result<Var> {
        let s = self.value(a).iter().copied().sum();
        let rg = self.rg(a);
        self.push("sum", Vec::new(), vec![s], rg, Op::Sum(a))
    }

    pub fn mean(&mut self, a: Var) -> Result<Var> {
        let v = self.value(a);
        ensure!(!v.is_empty(), "mean of an empty tensor");
        let s = v.iter().copied().sum::<T>() / T::lit(v.len() as f64);
        let rg = self.rg(a);
        self.push("mean", Vec::new(), vec![s], rg, Op::Mean(a))
    }

    /// Mean over the last axis: `[.., L] -> [..]`.
    pub fn mean_last_axis(&mut self, a: Var) -> Result<Var> {
        let shape = self.shape(a).to_vec();
        ensure!(!shape.is_empty(), "mean_last_axis: scalar input");
        let l = *shape.last().unwrap();
        ensure!(l > 0, "mean_last_axis: empty axis");
        let inv = T::lit(1.0 / l as f64);
        let value = self
            .value(a)
            .chunks(l)
            .map(|c| c.iter().copied().sum::<T>() * inv)
            .collect();
        let rg = self.rg(a);
        self.push(
            "mean_last_axis",
            shape[..shape.len() - 1].to_vec(),
            value,
            rg,
            Op::MeanLastAxis(a),
        )
    }

    // ----- structural -----

    pub fn reshape(&mut self, a: Var, shape: Vec<usize>) -> Result<Var> {
        ensure!(
            numel(&shape) == self.value(a).len(),
            "reshape: {:?} -> {shape:?} changes element count",
            self.shape(a)
        );
        let value = self.value(a).to_vec();
        let rg = self.rg(a);
        self.push("reshape", shape, value, rg, Op::Reshape(a))
    }

    pub fn concat(&mut self, inputs: &[Var], axis: usize) -> Result<Var> {
        ensure!(!inputs.is_empty(), "concat: no inputs");
        let first = self.shape(inputs[0]).to_vec();
        ensure!(axis < first.len(), "concat: axis {axis} out of range for {first:?}");
        let mut total = 0;
        for &v in inputs {
            let s = self.shape(v);
            ensure!(
                s.len() == first.len()
                    && s.iter()
                        .zip(&first)
                        .enumerate()
                        .all(|(d, (x, y))| d == axis || x == y),
                "concat: shape {s:?} incompatible with {first:?} on axis {axis}"
            );
            total += s[axis];
        }
        let outer: usize = first[..axis].iter().product();
        let inner: usize = first[axis + 1..].iter().product();
        let mut value = Vec::with_capacity(outer * total * inner);
        for o in 0..outer {
            for &v in inputs {
                let chunk = self.shape(v)[axis] * inner;
                value.extend_from_slice(&self.value(v)[o * chunk..(o + 1) * chunk]);
            }
        }
        let mut shape = first;
        shape[axis] = total;
        let rg = inputs.iter().any(|&v| self.rg(v));
        self.push(
            "concat",
            shape,
            value,
            rg,
            Op::Concat {
                inputs: inputs.to_vec(),
                axis,
            },
        )
    }

    pub fn slice(&mut self, a: Var, axis: usize, start: usize, len: usize) -> Result<Var> {
        let shape = self.shape(a).to_vec();
        ensure!(axis < shape.len(), "slice: axis {axis} out of range for {shape:?}");
        ensure!(
            start + len <= shape[axis],
            "slice: [{start}, {}) exceeds extent {} of axis {axis}",
            start + len,
            shape[axis]
        );
        let outer: usize = shape[..axis].iter().product();
        let inner: usize = shape[axis + 1..].iter().product();
        let src = self.value(a);
        let mut value = Vec::with_capacity(outer * len * inner);
        for o in 0..outer {
            let base = (o * shape[axis] + start) * inner;
            value.extend_from_slice(&src[base..base + len * inner]);
        }
        let mut out_shape = shape;
        out_shape[axis] = len;
        let rg = self.rg(a);
        self.push(
            "slice",
            out_shape,
            value,
            rg,
            Op::Slice {
                input: a,
                axis,
                start,
            },
        )
    }

    /// Row lookup on a matrix: `[n, k]` indexed by `rows` gives `[rows.len(), k]`.
    pub fn gather_rows(&mut self, a: Var, rows: &[usize]) -> Result<Var> {
        let (n, k) = self.matrix_dims("gather_rows", a)?;
        let mut value = Vec::with_capacity(rows.len() * k);
        for &r in rows {
            ensure!(r < n, "gather_rows: row {r} out of range 0..{n}");
            value.extend_from_slice(&self.value(a)[r * k..(r + 1) * k]);
        }
        let rg = self.rg(a);
        self.push(
            "gather_rows",
            vec![rows.len(), k],
            value,
            rg,
            Op::GatherRows {
                input: a,
                rows: rows.to_vec(),
            },
        )
    }

    /// Mean softmax cross-entropy of `logits: [B, K]` against class indices.
    pub fn softmax_cross_entropy(&mut self, logits: Var, targets: &[usize]) -> Result<Var> {
        let (b, k) = self.matrix_dims("softmax_cross_entropy", logits)?;
        ensure!(
            targets.len() == b,
            "softmax_cross_entropy: {} targets for batch {b}",
            targets.len()
        );
        let mut probs = Vec::with_capacity(b * k);
        let mut loss = T::zero();
        for (row, &t) in self.value(logits).chunks(k).zip(targets) {
            ensure!(t < k, "softmax_cross_entropy: target {t} out of range 0..{k}");
            let p = softmax(row);
            let m = row.iter().copied().fold(T::neg_infinity(), T::max);
            let lse = m + row.iter().map(|&x| (x - m).exp()).sum::<T>().ln();
            loss = loss + (lse - row[t]);
            probs.extend(p);
        }
        loss = loss / T::lit(b as f64);
        let rg = self.rg(logits);
        self.push(
            "softmax_cross_entropy",
            Vec::new(),
            vec![loss],
            rg,
            Op::SoftmaxXent {
                logits,
                probs,
                targets: targets.to_vec(),
            },
        )
    }

    // ----- image ops (NCHW) -----

    pub fn conv2d(
        &mut self,
        x: Var,
        w: Var,
        b: Option<Var>,
        stride: usize,
        padding: usize,
    ) -> Result<Var> {
        let geom = ConvGeom::new(self.shape(x), self.shape(w), stride, padding)?;
        if let Some(b) = b {
            ensure!(
                self.value(b).len() == geom.out_channels,
                "conv2d: bias length {} != {} output channels",
                self.value(b).len(),
                geom.out_channels
            );
        }
        let value = ops_nn::conv2d_forward(
            &geom,
            self.value(x),
            self.value(w),
            b.map(|b| self.value(b)),
        );
        let rg = self.rg(x) || self.rg(w) || b.is_some_and(|b| self.rg(b));
        self.push("conv2d", geom.out_shape(), value, rg, Op::Conv2d { x, w, b, geom })
    }

    /// 2x2 max pooling with stride 2; odd trailing rows/columns are dropped.
    pub fn max_pool2(&mut self, x: Var) -> Result<Var> {
        let geom = PoolGeom::new(self.shape(x))?;
        let (value, argmax) = ops_nn::max_pool_forward(&geom, self.value(x));
        let rg = self.rg(x);
        self.push("max_pool2", geom.out_shape(), value, rg, Op::MaxPool { x, argmax })
    }

    /// Per-sample, per-channel normalization over the spatial plane.
    pub fn instance_norm(&mut self, x: Var, eps: f64) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        ensure!(shape.len() == 4, "instance_norm: expected NCHW, got {shape:?}");
        let plane = shape[2] * shape[3];
        ensure!(plane > 0, "instance_norm: empty spatial plane");
        let (value, inv_std) = ops_nn::instance_norm_forward(self.value(x), plane, T::lit(eps));
        let rg = self.rg(x);
        self.push(
            "instance_norm",
            shape,
            value,
            rg,
            Op::InstanceNorm { x, inv_std, plane },
        )
    }

    /// Bilinear resampling of an NCHW tensor with corner-aligned pixel centres.
    pub fn resize_bilinear(&mut self, x: Var, out_h: usize, out_w: usize) -> Result<Var> {
        let geom = ResizeGeom::new(self.shape(x), out_h, out_w)?;
        let value = ops_nn::resize_forward(&geom, self.value(x));
        let rg = self.rg(x);
        self.push("resize_bilinear", geom.out_shape(), value, rg, Op::Resize { x, geom })
    }

    /// Alpha compositing of `samples` points per ray.
    ///
    /// `sigma: [R, S]`, `rgb: [R, S, 3]`, `delta`: R·S constant spacings.
    /// Output `[R, 3]` is `Σ_i T_i α_i c_i + T_final · background`.
    pub fn composite(
        &mut self,
        sigma: Var,
        rgb: Var,
        delta: &[T],
        background: [T; 3],
    ) -> Result<Var> {
        let (rays, samples) = self.matrix_dims("composite", sigma)?;
        ensure!(
            self.shape(rgb) == [rays, samples, 3],
            "composite: colour shape {:?} != [{rays}, {samples}, 3]",
            self.shape(rgb)
        );
        ensure!(
            delta.len() == rays * samples,
            "composite: {} deltas for {} samples",
            delta.len(),
            rays * samples
        );
        if let Some(s) = self.value(sigma).iter().find(|&&s| s < T::zero()) {
            return Err(Error::contract(format!("composite: negative density {s}")));
        }
        if let Some(d) = delta.iter().find(|&&d| d <= T::zero()) {
            return Err(Error::contract(format!("composite: non-positive delta {d}")));
        }
        let mut value = Vec::with_capacity(rays * 3);
        let (sv, cv) = (self.value(sigma), self.value(rgb));
        for r in 0..rays {
            let span = r * samples..(r + 1) * samples;
            let out = ops_volume::composite_ray(
                &sv[span.clone()],
                &cv[r * samples * 3..(r + 1) * samples * 3],
                &delta[span],
                background,
            );
            value.extend_from_slice(&out.rgb);
        }
        let rg = self.rg(sigma) || self.rg(rgb);
        self.push(
            "composite",
            vec![rays, 3],
            value,
            rg,
            Op::Composite {
                sigma,
                rgb,
                delta: delta.to_vec(),
                background,
                samples,
            },
        )
    }

    // ----- backward -----

    /// Fills gradients of the scalar `root` with respect to every node that
    /// requires one. Previous gradients are discarded.
    pub fn backward(&mut self, root: Var) -> Result<()> {
        ensure!(!self.nodes.is_empty(), "backward on an empty tape");
        ensure!(
            self.nodes[root.0].value.len() == 1,
            "backward root must be scalar, got shape {:?}",
            self.nodes[root.0].shape
        );
        self.grads = (0..self.nodes.len()).map(|_| None).collect();
        if !self.nodes[root.0].requires_grad {
            return Ok(());
        }
        self.grads[root.0] = Some(vec![T::one()]);
        for id in (0..=root.0).rev() {
            let Some(g) = self.grads[id].take() else {
                continue;
            };
            let node = &self.nodes[id];
            if node.requires_grad {
                backprop(&self.nodes, node, &g, &mut self.grads);
            }
            self.grads[id] = Some(g);
        }
        Ok(())
    }
}

pub(crate) fn sigmoid<T: Real>(x: T) -> T {
    if x >= T::zero() {
        T::one() / (T::one() + (-x).exp())
    } else {
        let e = x.exp();
        e / (T::one() + e)
    }
}

pub(crate) fn softplus<T: Real>(x: T) -> T {
    x.max(T::zero()) + (-x.abs()).exp().ln_1p()
}

pub(crate) fn softmax<T: Real>(row: &[T]) -> Vec<T> {
    let m = row.iter().copied().fold(T::neg_infinity(), T::max);
    let e: Vec<T> = row.iter().map(|&x| (x - m).exp()).collect();
    let s: T = e.iter().copied().sum();
    e.into_iter().map(|v| v / s).collect()
}

fn backprop<T: Real>(
    nodes: &[Node<T>],
    node: &Node<T>,
    g: &[T],
    grads: &mut [Option<Vec<T>>],
) {
    let val = |v: Var| -> &[T] { &nodes[v.0].value };
    let rg = |v: Var| nodes[v.0].requires_grad;
    let y = &node.value;

    // d/dx for unary ops whose derivative is a function of (x, y)
    let unary = |grads: &mut [Option<Vec<T>>], a: Var, d: &dyn Fn(T, T) -> T| {
        if !rg(a) {
            return;
        }
        let x = &nodes[a.0].value;
        let ga = accum(grads, a, x.len());
        for i in 0..x.len() {
            ga[i] = ga[i] + g[i] * d(x[i], y[i]);
        }
    };

    match &node.op {
        Op::Leaf => {}
        Op::Add(a, b) | Op::Sub(a, b) | Op::Mul(a, b) | Op::Div(a, b) => {
            let (a, b) = (*a, *b);
            let (va, vb) = (val(a), val(b));
            let (na, nb) = (va.len(), vb.len());
            let (da, db): (Box<dyn Fn(T, T) -> T>, Box<dyn Fn(T, T) -> T>) = match node.op {
                Op::Add(..) => (Box::new(|_, _| T::one()), Box::new(|_, _| T::one())),
                Op::Sub(..) => (Box::new(|_, _| T::one()), Box::new(|_, _| -T::one())),
                Op::Mul(..) => (Box::new(|_, y| y), Box::new(|x, _| x)),
                _ => (Box::new(|_, y| T::one() / y), Box::new(|x, y| -x / (y * y))),
            };
            if rg(a) {
                let ga = accum(grads, a, na);
                for i in 0..g.len() {
                    ga[i % na] = ga[i % na] + g[i] * da(va[i % na], vb[i % nb]);
                }
            }
            if rg(b) {
                let gb = accum(grads, b, nb);
                for i in 0..g.len() {
                    gb[i % nb] = gb[i % nb] + g[i] * db(va[i % na], vb[i % nb]);
                }
            }
        }
        Op::Scale(a, c) => {
            let c = *c;
            unary(grads, *a, &|_, _| c)
        }
        Op::Offset(a) => unary(grads, *a, &|_, _| T::one()),
        Op::Relu(a) => unary(grads, *a, &|x, _| if x > T::zero() { T::one() } else { T::zero() }),
        Op::Sigmoid(a) => unary(grads, *a, &|_, y| y * (T::one() - y)),
        Op::Tanh(a) => unary(grads, *a, &|_, y| T::one() - y * y),
        Op::Exp(a) => unary(grads, *a, &|_, y| y),
        Op::Log(a) => unary(grads, *a, &|x, _| T::one() / x),
        Op::Sin(a) => unary(grads, *a, &|x, _| x.cos()),
        Op::Cos(a) => unary(grads, *a, &|x, _| -x.sin()),
        Op::Softplus(a) => unary(grads, *a, &|x, _| sigmoid(x)),
        Op::Square(a) => unary(grads, *a, &|x, _| T::lit(2.0) * x),
        Op::MatMul(a, b) => {
            let (a, b) = (*a, *b);
            let (n, k) = (nodes[a.0].shape[0], nodes[a.0].shape[1]);
            let m = nodes[b.0].shape[1];
            if rg(a) {
                let ga = accum(grads, a, n * k);
                T::gemm(n, m, k, g, false, val(b), true, ga, true);
            }
            if rg(b) {
                let gb = accum(grads, b, k * m);
                T::gemm(k, n, m, val(a), true, g, false, gb, true);
            }
        }
        Op::Linear(x, w, bias) => {
            let (x, w, bias) = (*x, *w, *bias);
            let (n, k) = (nodes[x.0].shape[0], nodes[x.0].shape[1]);
            let m = nodes[w.0].shape[1];
            if rg(x) {
                let gx = accum(grads, x, n * k);
                T::gemm(n, m, k, g, false, val(w), true, gx, true);
            }
            if rg(w) {
                let gw = accum(grads, w, k * m);
                T::gemm(k, n, m, val(x), true, g, false, gw, true);
            }
            if rg(bias) {
                let gb = accum(grads, bias, m);
                for row in g.chunks(m) {
                    for (acc, &v) in gb.iter_mut().zip(row) {
                        *acc = *acc + v;
                    }
                }
            }
        }
        Op::Transpose(a) => {
            let a = *a;
            if rg(a) {
                let (r, c) = (nodes[a.0].shape[0], nodes[a.0].shape[1]);
                let ga = accum(grads, a, r * c);
                for i in 0..r {
                    for j in 0..c {
                        ga[i * c + j] = ga[i * c + j] + g[j * r + i];
                    }
                }
            }
        }
        Op::Sum(a) => {
            let a = *a;
            if rg(a) {
                let n = val(a).len();
                accum(grads, a, n).iter_mut().for_each(|v| *v = *v + g[0]);
            }
        }
        Op::Mean(a) => {
            let a = *a;
            if rg(a) {
                let n = val(a).len();
                let share = g[0] / T::lit(n as f64);
                accum(grads, a, n).iter_mut().for_each(|v| *v = *v + share);
            }
        }
        Op::MeanLastAxis(a) => {
            let a = *a;
            if rg(a) {
                let n = val(a).len();
                let l = *nodes[a.0].shape.last().unwrap();
                let inv = T::lit(1.0 / l as f64);
                let ga = accum(grads, a, n);
                for (i, v) in ga.iter_mut().enumerate() {
                    *v = *v + g[i / l] * inv;
                }
            }
        }
        Op::Reshape(a) => {
            let a = *a;
            if rg(a) {
                let ga = accum(grads, a, g.len());
                ga.iter_mut().zip(g).for_each(|(x, &y)| *x = *x + y);
            }
        }
        Op::Concat { inputs, axis } => {
            let shape = &node.shape;
            let outer: usize = shape[..*axis].iter().product();
            let inner: usize = shape[axis + 1..].iter().product();
            let mut offset = 0;
            for o in 0..outer {
                for &v in inputs {
                    let chunk = nodes[v.0].shape[*axis] * inner;
                    if rg(v) {
                        let gv = accum(grads, v, nodes[v.0].value.len());
                        for (t, &s) in gv[o * chunk..(o + 1) * chunk]
                            .iter_mut()
                            .zip(&g[offset..offset + chunk])
                        {
                            *t = *t + s;
                        }
                    }
                    offset += chunk;
                }
            }
        }
        Op::Slice { input, axis, start } => {
            let a = *input;
            if rg(a) {
                let src_shape = &nodes[a.0].shape;
                let outer: usize = src_shape[..*axis].iter().product();
                let inner: usize = src_shape[axis + 1..].iter().product();
                let len = node.shape[*axis];
                let ga = accum(grads, a, nodes[a.0].value.len());
                for o in 0..outer {
                    let base = (o * src_shape[*axis] + start) * inner;
                    let gs = &g[o * len * inner..(o + 1) * len * inner];
                    for (t, &s) in ga[base..base + len * inner].iter_mut().zip(gs) {
                        *t = *t + s;
                    }
                }
            }
        }
        Op::GatherRows { input, rows } => {
            let a = *input;
            if rg(a) {
                let k = nodes[a.0].shape[1];
                let ga = accum(grads, a, nodes[a.0].value.len());
                for (i, &r) in rows.iter().enumerate() {
                    for c in 0..k {
                        ga[r * k + c] = ga[r * k + c] + g[i * k + c];
                    }
                }
            }
        }
        Op::SoftmaxXent {
            logits,
            probs,
            targets,
        } => {
            let l = *logits;
            if rg(l) {
                let b = targets.len();
                let k = probs.len() / b;
                let scale = g[0] / T::lit(b as f64);
                let gl = accum(grads, l, probs.len());
                for (r, &t) in targets.iter().enumerate() {
                    for c in 0..k {
                        let onehot = if c == t { T::one() } else { T::zero() };
                        gl[r * k + c] = gl[r * k + c] + scale * (probs[r * k + c] - onehot);
                    }
                }
            }
        }
        Op::Conv2d { x, w, b, geom } => {
            let (x, w, b) = (*x, *w, *b);
            let mut gx = rg(x).then(|| grads[x.0].take().unwrap_or_else(|| vec![T::zero(); val(x).len()]));
            let mut gw = rg(w).then(|| grads[w.0].take().unwrap_or_else(|| vec![T::zero(); val(w).len()]));
            ops_nn::conv2d_backward(
                geom,
                val(x),
                val(w),
                g,
                gx.as_deref_mut(),
                gw.as_deref_mut(),
            );
            if let Some(gx) = gx {
                grads[x.0] = Some(gx);
            }
            if let Some(gw) = gw {
                grads[w.0] = Some(gw);
            }
            if let Some(b) = b.filter(|&b| rg(b)) {
                let gb = accum(grads, b, geom.out_channels);
                ops_nn::conv2d_bias_backward(geom, g, gb);
            }
        }
        Op::MaxPool { x, argmax } => {
            let x = *x;
            if rg(x) {
                let gx = accum(grads, x, val(x).len());
                for (&src, &v) in argmax.iter().zip(g) {
                    gx[src] = gx[src] + v;
                }
            }
        }
        Op::InstanceNorm { x, inv_std, plane } => {
            let x = *x;
            if rg(x) {
                let gx = accum(grads, x, val(x).len());
                ops_nn::instance_norm_backward(y, inv_std, *plane, g, gx);
            }
        }
        Op::Resize { x, geom } => {
            let x = *x;
            if rg(x) {
                let gx = accum(grads, x, val(x).len());
                ops_nn::resize_backward(geom, g, gx);
            }
        }
        Op::Composite {
            sigma,
            rgb,
            delta,
            background,
            samples,
        } => {
            let (sigma, rgb) = (*sigma, *rgb);
            let s = *samples;
            let rays = node.shape[0];
            let (sv, cv) = (val(sigma), val(rgb));
            let mut gs = vec![T::zero(); sv.len()];
            let mut gc = vec![T::zero(); cv.len()];
            for r in 0..rays {
                ops_volume::composite_ray_backward(
                    &sv[r * s..(r + 1) * s],
                    &cv[r * s * 3..(r + 1) * s * 3],
                    &delta[r * s..(r + 1) * s],
                    *background,
                    &g[r * 3..r * 3 + 3],
                    &mut gs[r * s..(r + 1) * s],
                    &mut gc[r * s * 3..(r + 1) * s * 3],
                );
            }
            if rg(sigma) {
                let t = accum(grads, sigma, sv.len());
                t.iter_mut().zip(&gs).for_each(|(a, &b)| *a = *a + b);
            }
            if rg(rgb) {
                let t = accum(grads, rgb, cv.len());
                t.iter_mut().zip(&gc).for_each(|(a, &b)| *a = *a + b);
            }
        }
    }
}
