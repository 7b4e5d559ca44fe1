//! Tape-based reverse-mode differentiation.
//!
//! A [`Graph`] is an append-only arena of nodes. Each operation records its
//! inputs and enough state to replay its local derivative; [`Graph::backward`]
//! walks the tape in reverse, accumulating gradients additively so values used
//! several times receive the sum of all downstream contributions. Gradients
//! are retained on every intermediate node after the pass, which lets tests
//! probe exactly which parts of a model a given loss term reaches.

use crate::{Real, Result, Tensor, TensorError};

/// Handle to a node in a [`Graph`]. Only valid for the graph that issued it.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct TensorId(usize);

impl TensorId {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug, Clone)]
enum Op<T> {
    /// Trainable input; gradients accumulate here.
    Leaf,
    /// Non-trainable input, and the result of `detach`.
    Constant,
    Add(TensorId, TensorId),
    Sub(TensorId, TensorId),
    Mul(TensorId, TensorId),
    Matmul(TensorId, TensorId),
    Transpose(TensorId),
    Scale(TensorId, T),
    Relu(TensorId),
    Softmax {
        x: TensorId,
        axis: usize,
    },
    LayerNorm {
        x: TensorId,
        gain: TensorId,
        bias: TensorId,
    },
    Concat {
        inputs: Vec<TensorId>,
        axis: usize,
    },
    Slice {
        x: TensorId,
        axis: usize,
        start: usize,
    },
    Reshape(TensorId),
    BroadcastTo(TensorId),
    MaxAxis {
        x: TensorId,
        argmax: Vec<usize>,
    },
    Sum(TensorId),
    Mean(TensorId),
    SumAxis {
        x: TensorId,
        axis: usize,
    },
    SmoothL1 {
        pred: TensorId,
        target: TensorId,
    },
    Bce {
        p: TensorId,
        y: TensorId,
    },
    Dropout {
        x: TensorId,
        mask: Vec<T>,
    },
}

impl<T> Op<T> {
    fn name(&self) -> &'static str {
        match self {
            Op::Leaf => "leaf",
            Op::Constant => "constant",
            Op::Add(..) => "add",
            Op::Sub(..) => "sub",
            Op::Mul(..) => "mul",
            Op::Matmul(..) => "matmul",
            Op::Transpose(..) => "transpose",
            Op::Scale(..) => "scale",
            Op::Relu(..) => "relu",
            Op::Softmax { .. } => "softmax",
            Op::LayerNorm { .. } => "layer_norm",
            Op::Concat { .. } => "concat",
            Op::Slice { .. } => "slice",
            Op::Reshape(..) => "reshape",
            Op::BroadcastTo(..) => "broadcast_to",
            Op::MaxAxis { .. } => "max_axis",
            Op::Sum(..) => "sum",
            Op::Mean(..) => "mean",
            Op::SumAxis { .. } => "sum_axis",
            Op::SmoothL1 { .. } => "smooth_l1",
            Op::Bce { .. } => "bce",
            Op::Dropout { .. } => "dropout",
        }
    }
}

#[derive(Debug, Clone)]
struct Node<T> {
    value: Tensor<T>,
    op: Op<T>,
    requires_grad: bool,
}

/// The epsilon used inside layer normalisation.
pub const LAYER_NORM_EPS: f64 = 1e-5;

/// Probability clamp applied inside binary cross entropy.
pub const BCE_CLAMP: f64 = 1e-7;

/// Reverse-mode autodiff tape over dense tensors.
pub struct Graph<T> {
    nodes: Vec<Node<T>>,
    grads: Vec<Option<Vec<T>>>,
}

impl<T: Real> Default for Graph<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Real> Graph<T> {
    pub fn new() -> Self {
        Graph {
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

    fn push(&mut self, value: Tensor<T>, op: Op<T>, requires_grad: bool) -> TensorId {
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        self.grads.push(None);
        TensorId(self.nodes.len() - 1)
    }

    fn needs(&self, ids: &[TensorId]) -> bool {
        ids.iter().any(|&i| self.nodes[i.0].requires_grad)
    }

    /// Register a trainable input.
    pub fn leaf(&mut self, value: Tensor<T>) -> TensorId {
        self.push(value, Op::Leaf, true)
    }

    /// Register a non-trainable input.
    pub fn constant(&mut self, value: Tensor<T>) -> TensorId {
        self.push(value, Op::Constant, false)
    }

    pub fn value(&self, id: TensorId) -> &Tensor<T> {
        &self.nodes[id.0].value
    }

    pub fn shape(&self, id: TensorId) -> &[usize] {
        self.nodes[id.0].value.shape()
    }

    pub fn requires_grad(&self, id: TensorId) -> bool {
        self.nodes[id.0].requires_grad
    }

    pub fn op_name(&self, id: TensorId) -> &'static str {
        self.nodes[id.0].op.name()
    }

    /// Gradient of the last `backward` target with respect to `id`, if one
    /// was accumulated there.
    pub fn grad(&self, id: TensorId) -> Option<Tensor<T>> {
        self.grads[id.0].as_ref().map(|g| {
            Tensor::new(self.nodes[id.0].value.shape().to_vec(), g.clone())
                .expect("gradient buffer matches value shape")
        })
    }

    /// First node (in insertion order) whose value contains a non-finite
    /// element, with the name of the operation that produced it.
    pub fn first_nan(&self) -> Option<(TensorId, &'static str)> {
        self.nodes.iter().enumerate().find_map(|(i, n)| {
            if n.value.data().iter().any(|v| !v.is_finite()) {
                Some((TensorId(i), n.op.name()))
            } else {
                None
            }
        })
    }

    /// Copy a value out of the graph as a fresh constant. The copy has no
    /// producer link, so no gradient flows through it into the original
    /// subgraph; the original node is unaffected.
    pub fn detach(&mut self, x: TensorId) -> TensorId {
        let value = self.nodes[x.0].value.clone();
        self.push(value, Op::Constant, false)
    }

    // ----- elementwise and broadcast arithmetic -------------------------

    pub fn add(&mut self, a: TensorId, b: TensorId) -> Result<TensorId> {
        self.binary_broadcast("add", a, b, |x, y| x + y, Op::Add(a, b))
    }

    pub fn sub(&mut self, a: TensorId, b: TensorId) -> Result<TensorId> {
        self.binary_broadcast("sub", a, b, |x, y| x - y, Op::Sub(a, b))
    }

    pub fn mul(&mut self, a: TensorId, b: TensorId) -> Result<TensorId> {
        self.binary_broadcast("mul", a, b, |x, y| x * y, Op::Mul(a, b))
    }

    fn binary_broadcast(
        &mut self,
        name: &'static str,
        a: TensorId,
        b: TensorId,
        f: impl Fn(T, T) -> T,
        op: Op<T>,
    ) -> Result<TensorId> {
        let (va, vb) = (&self.nodes[a.0].value, &self.nodes[b.0].value);
        let out_shape = broadcast_shape(name, va.shape(), vb.shape())?;
        let sa = padded_strides(&out_shape, va.shape());
        let sb = padded_strides(&out_shape, vb.shape());
        let numel: usize = out_shape.iter().product();
        let mut data = Vec::with_capacity(numel);
        let (da, db) = (va.data(), vb.data());
        for_each_index(&out_shape, |_, coords| {
            let ia = flat_index(coords, &sa);
            let ib = flat_index(coords, &sb);
            data.push(f(da[ia], db[ib]));
        });
        let rg = self.needs(&[a, b]);
        Ok(self.push(Tensor::new(out_shape, data)?, op, rg))
    }

    /// Multiply every element by a compile-time constant.
    pub fn scale(&mut self, x: TensorId, c: T) -> TensorId {
        let v = self.nodes[x.0].value.map_data(|e| e * c);
        let rg = self.needs(&[x]);
        self.push(v, Op::Scale(x, c), rg)
    }

    pub fn neg(&mut self, x: TensorId) -> TensorId {
        self.scale(x, -T::one())
    }

    pub fn relu(&mut self, x: TensorId) -> TensorId {
        let v = self.nodes[x.0].value.map_data(|e| e.max(T::zero()));
        let rg = self.needs(&[x]);
        self.push(v, Op::Relu(x), rg)
    }

    // ----- linear algebra ------------------------------------------------

    /// Strict 2-D matrix product.
    pub fn matmul(&mut self, a: TensorId, b: TensorId) -> Result<TensorId> {
        let (va, vb) = (&self.nodes[a.0].value, &self.nodes[b.0].value);
        if va.rank() != 2 || vb.rank() != 2 || va.shape()[1] != vb.shape()[0] {
            return Err(TensorError::ShapeMismatch {
                op: "matmul",
                lhs: va.shape().to_vec(),
                rhs: vb.shape().to_vec(),
            });
        }
        let (m, k, n) = (va.shape()[0], va.shape()[1], vb.shape()[1]);
        let out = matmul_values(va.data(), vb.data(), m, k, n);
        let rg = self.needs(&[a, b]);
        Ok(self.push(Tensor::new(vec![m, n], out)?, Op::Matmul(a, b), rg))
    }

    /// Strict 2-D transpose.
    pub fn transpose(&mut self, x: TensorId) -> Result<TensorId> {
        let v = &self.nodes[x.0].value;
        if v.rank() != 2 {
            return Err(TensorError::Invalid {
                op: "transpose",
                msg: format!("expected rank 2, got shape {:?}", v.shape()),
            });
        }
        let (m, n) = (v.shape()[0], v.shape()[1]);
        let mut data = vec![T::zero(); m * n];
        for i in 0..m {
            for j in 0..n {
                data[j * m + i] = v.data()[i * n + j];
            }
        }
        let rg = self.needs(&[x]);
        Ok(self.push(Tensor::new(vec![n, m], data)?, Op::Transpose(x), rg))
    }

    // ----- shape manipulation ---------------------------------------------

    pub fn reshape(&mut self, x: TensorId, shape: Vec<usize>) -> Result<TensorId> {
        let v = &self.nodes[x.0].value;
        let numel: usize = shape.iter().product();
        if shape.contains(&0) || numel != v.numel() {
            return Err(TensorError::Invalid {
                op: "reshape",
                msg: format!("cannot view {:?} as {:?}", v.shape(), shape),
            });
        }
        let t = Tensor::new(shape, v.data().to_vec())?;
        let rg = self.needs(&[x]);
        Ok(self.push(t, Op::Reshape(x), rg))
    }

    pub fn broadcast_to(&mut self, x: TensorId, shape: Vec<usize>) -> Result<TensorId> {
        let v = &self.nodes[x.0].value;
        let joined = broadcast_shape("broadcast_to", v.shape(), &shape)?;
        if joined != shape {
            return Err(TensorError::Invalid {
                op: "broadcast_to",
                msg: format!("cannot broadcast {:?} to {:?}", v.shape(), shape),
            });
        }
        let strides = padded_strides(&shape, v.shape());
        let numel: usize = shape.iter().product();
        let mut data = Vec::with_capacity(numel);
        let src = v.data();
        for_each_index(&shape, |_, coords| data.push(src[flat_index(coords, &strides)]));
        let rg = self.needs(&[x]);
        Ok(self.push(Tensor::new(shape, data)?, Op::BroadcastTo(x), rg))
    }

    pub fn concat(&mut self, inputs: &[TensorId], axis: usize) -> Result<TensorId> {
        if inputs.is_empty() {
            return Err(TensorError::Invalid {
                op: "concat",
                msg: "no inputs".into(),
            });
        }
        let first = self.nodes[inputs[0].0].value.shape().to_vec();
        if axis >= first.len() {
            return Err(TensorError::AxisOutOfBounds {
                op: "concat",
                axis,
                rank: first.len(),
            });
        }
        let mut axis_total = 0usize;
        for &id in inputs {
            let s = self.nodes[id.0].value.shape();
            if s.len() != first.len()
                || s.iter()
                    .zip(&first)
                    .enumerate()
                    .any(|(d, (a, b))| d != axis && a != b)
            {
                return Err(TensorError::ShapeMismatch {
                    op: "concat",
                    lhs: first.clone(),
                    rhs: s.to_vec(),
                });
            }
            axis_total += s[axis];
        }
        let mut out_shape = first.clone();
        out_shape[axis] = axis_total;
        let outer: usize = out_shape[..axis].iter().product();
        let inner: usize = out_shape[axis + 1..].iter().product();
        let mut data = vec![T::zero(); outer * axis_total * inner];
        let mut offset = 0usize;
        for &id in inputs {
            let v = &self.nodes[id.0].value;
            let extent = v.shape()[axis];
            let block = extent * inner;
            for o in 0..outer {
                let dst = o * axis_total * inner + offset * inner;
                let src = o * block;
                data[dst..dst + block].copy_from_slice(&v.data()[src..src + block]);
            }
            offset += extent;
        }
        let rg = self.needs(inputs);
        Ok(self.push(
            Tensor::new(out_shape, data)?,
            Op::Concat {
                inputs: inputs.to_vec(),
                axis,
            },
            rg,
        ))
    }

    pub fn slice(&mut self, x: TensorId, axis: usize, start: usize, len: usize) -> Result<TensorId> {
        let v = &self.nodes[x.0].value;
        let shape = v.shape();
        if axis >= shape.len() {
            return Err(TensorError::AxisOutOfBounds {
                op: "slice",
                axis,
                rank: shape.len(),
            });
        }
        if len == 0 || start + len > shape[axis] {
            return Err(TensorError::Invalid {
                op: "slice",
                msg: format!(
                    "range {start}..{} out of bounds for axis {axis} of {:?}",
                    start + len,
                    shape
                ),
            });
        }
        let mut out_shape = shape.to_vec();
        out_shape[axis] = len;
        let outer: usize = shape[..axis].iter().product();
        let inner: usize = shape[axis + 1..].iter().product();
        let full = shape[axis] * inner;
        let mut data = Vec::with_capacity(outer * len * inner);
        for o in 0..outer {
            let base = o * full + start * inner;
            data.extend_from_slice(&v.data()[base..base + len * inner]);
        }
        let rg = self.needs(&[x]);
        Ok(self.push(
            Tensor::new(out_shape, data)?,
            Op::Slice { x, axis, start },
            rg,
        ))
    }

    // ----- nonlinearities and normalisation --------------------------------

    /// Numerically stable softmax along `axis`.
    pub fn softmax(&mut self, x: TensorId, axis: usize) -> Result<TensorId> {
        let v = &self.nodes[x.0].value;
        let shape = v.shape().to_vec();
        if axis >= shape.len() {
            return Err(TensorError::AxisOutOfBounds {
                op: "softmax",
                axis,
                rank: shape.len(),
            });
        }
        let extent = shape[axis];
        let inner: usize = shape[axis + 1..].iter().product();
        let outer: usize = shape[..axis].iter().product();
        let src = v.data();
        let mut data = vec![T::zero(); src.len()];
        for o in 0..outer {
            for i in 0..inner {
                let at = |j: usize| o * extent * inner + j * inner + i;
                let mut mx = src[at(0)];
                for j in 1..extent {
                    mx = mx.max(src[at(j)]);
                }
                let mut denom = T::zero();
                for j in 0..extent {
                    let e = (src[at(j)] - mx).exp();
                    data[at(j)] = e;
                    denom += e;
                }
                for j in 0..extent {
                    data[at(j)] /= denom;
                }
            }
        }
        let rg = self.needs(&[x]);
        Ok(self.push(Tensor::new(shape, data)?, Op::Softmax { x, axis }, rg))
    }

    /// Layer normalisation over the last axis with learned gain and bias
    /// (both shaped `[last_extent]`).
    pub fn layer_norm(&mut self, x: TensorId, gain: TensorId, bias: TensorId) -> Result<TensorId> {
        let v = &self.nodes[x.0].value;
        if v.rank() == 0 {
            return Err(TensorError::Invalid {
                op: "layer_norm",
                msg: "input must have rank >= 1".into(),
            });
        }
        let n = *v.shape().last().unwrap();
        for (name, id) in [("gain", gain), ("bias", bias)] {
            let s = self.nodes[id.0].value.shape();
            if s != [n] {
                return Err(TensorError::Invalid {
                    op: "layer_norm",
                    msg: format!("{name} must have shape [{n}], got {s:?}"),
                });
            }
        }
        let shape = v.shape().to_vec();
        let rows = v.numel() / n;
        let eps = T::from_f64(LAYER_NORM_EPS);
        let g = self.nodes[gain.0].value.data().to_vec();
        let b = self.nodes[bias.0].value.data().to_vec();
        let src = self.nodes[x.0].value.data();
        let mut data = vec![T::zero(); src.len()];
        let inv_n = T::one() / T::from_f64(n as f64);
        for r in 0..rows {
            let row = &src[r * n..(r + 1) * n];
            let mut mean = T::zero();
            for &e in row {
                mean += e;
            }
            mean *= inv_n;
            let mut var = T::zero();
            for &e in row {
                let d = e - mean;
                var += d * d;
            }
            var *= inv_n;
            let inv_std = T::one() / (var + eps).sqrt();
            for j in 0..n {
                let xhat = (row[j] - mean) * inv_std;
                data[r * n + j] = g[j] * xhat + b[j];
            }
        }
        let rg = self.needs(&[x, gain, bias]);
        Ok(self.push(
            Tensor::new(shape, data)?,
            Op::LayerNorm { x, gain, bias },
            rg,
        ))
    }

    // ----- reductions -------------------------------------------------------

    /// Maximum over `axis`, removing it. Ties resolve to the lowest index,
    /// which also receives the whole gradient.
    pub fn max_axis(&mut self, x: TensorId, axis: usize) -> Result<TensorId> {
        let v = &self.nodes[x.0].value;
        let shape = v.shape();
        if axis >= shape.len() {
            return Err(TensorError::AxisOutOfBounds {
                op: "max_axis",
                axis,
                rank: shape.len(),
            });
        }
        let extent = shape[axis];
        let outer: usize = shape[..axis].iter().product();
        let inner: usize = shape[axis + 1..].iter().product();
        let src = v.data();
        let mut data = Vec::with_capacity(outer * inner);
        let mut argmax = Vec::with_capacity(outer * inner);
        for o in 0..outer {
            for i in 0..inner {
                let at = |j: usize| o * extent * inner + j * inner + i;
                let mut best = src[at(0)];
                let mut best_j = 0usize;
                for j in 1..extent {
                    if src[at(j)] > best {
                        best = src[at(j)];
                        best_j = j;
                    }
                }
                data.push(best);
                argmax.push(at(best_j));
            }
        }
        let out_shape: Vec<usize> = shape
            .iter()
            .enumerate()
            .filter(|&(d, _)| d != axis)
            .map(|(_, &e)| e)
            .collect();
        let rg = self.needs(&[x]);
        Ok(self.push(
            Tensor::new(out_shape, data)?,
            Op::MaxAxis { x, argmax },
            rg,
        ))
    }

    /// Sum of all elements, producing a scalar.
    pub fn sum(&mut self, x: TensorId) -> TensorId {
        let mut acc = T::zero();
        for &e in self.nodes[x.0].value.data() {
            acc += e;
        }
        let rg = self.needs(&[x]);
        self.push(Tensor::scalar(acc), Op::Sum(x), rg)
    }

    /// Mean of all elements, producing a scalar.
    pub fn mean(&mut self, x: TensorId) -> TensorId {
        let numel = self.nodes[x.0].value.numel();
        let mut acc = T::zero();
        for &e in self.nodes[x.0].value.data() {
            acc += e;
        }
        let v = acc / T::from_f64(numel as f64);
        let rg = self.needs(&[x]);
        self.push(Tensor::scalar(v), Op::Mean(x), rg)
    }

    /// Sum over `axis`, removing it.
    pub fn sum_axis(&mut self, x: TensorId, axis: usize) -> Result<TensorId> {
        let v = &self.nodes[x.0].value;
        let shape = v.shape();
        if axis >= shape.len() {
            return Err(TensorError::AxisOutOfBounds {
                op: "sum_axis",
                axis,
                rank: shape.len(),
            });
        }
        let extent = shape[axis];
        let outer: usize = shape[..axis].iter().product();
        let inner: usize = shape[axis + 1..].iter().product();
        let src = v.data();
        let mut data = Vec::with_capacity(outer * inner);
        for o in 0..outer {
            for i in 0..inner {
                let mut acc = T::zero();
                for j in 0..extent {
                    acc += src[o * extent * inner + j * inner + i];
                }
                data.push(acc);
            }
        }
        let out_shape: Vec<usize> = shape
            .iter()
            .enumerate()
            .filter(|&(d, _)| d != axis)
            .map(|(_, &e)| e)
            .collect();
        let rg = self.needs(&[x]);
        Ok(self.push(Tensor::new(out_shape, data)?, Op::SumAxis { x, axis }, rg))
    }

    // ----- losses -------------------------------------------------------------

    /// Elementwise smooth L1 (Huber with unit transition): for d = pred − target,
    /// 0.5·d² when |d| < 1, else |d| − 0.5.
    pub fn smooth_l1(&mut self, pred: TensorId, target: TensorId) -> Result<TensorId> {
        let (vp, vt) = (&self.nodes[pred.0].value, &self.nodes[target.0].value);
        if vp.shape() != vt.shape() {
            return Err(TensorError::ShapeMismatch {
                op: "smooth_l1",
                lhs: vp.shape().to_vec(),
                rhs: vt.shape().to_vec(),
            });
        }
        let half = T::from_f64(0.5);
        let data: Vec<T> = vp
            .data()
            .iter()
            .zip(vt.data())
            .map(|(&p, &t)| {
                let d = p - t;
                if d.abs() < T::one() {
                    half * d * d
                } else {
                    d.abs() - half
                }
            })
            .collect();
        let shape = vp.shape().to_vec();
        let rg = self.needs(&[pred, target]);
        Ok(self.push(
            Tensor::new(shape, data)?,
            Op::SmoothL1 { pred, target },
            rg,
        ))
    }

    /// Elementwise binary cross entropy −[y·ln p + (1−y)·ln(1−p)], with p
    /// clamped away from 0 and 1. Gradient flows into `p` only where the
    /// clamp is inactive; `y` is treated as a label and gets no gradient.
    pub fn bce(&mut self, p: TensorId, y: TensorId) -> Result<TensorId> {
        let (vp, vy) = (&self.nodes[p.0].value, &self.nodes[y.0].value);
        if vp.shape() != vy.shape() {
            return Err(TensorError::ShapeMismatch {
                op: "bce",
                lhs: vp.shape().to_vec(),
                rhs: vy.shape().to_vec(),
            });
        }
        let lo = T::from_f64(BCE_CLAMP);
        let hi = T::one() - lo;
        let data: Vec<T> = vp
            .data()
            .iter()
            .zip(vy.data())
            .map(|(&pv, &yv)| {
                let pc = pv.max(lo).min(hi);
                -(yv * pc.ln() + (T::one() - yv) * (T::one() - pc).ln())
            })
            .collect();
        let shape = vp.shape().to_vec();
        let rg = self.needs(&[p]);
        Ok(self.push(Tensor::new(shape, data)?, Op::Bce { p, y }, rg))
    }

    // ----- regularisation --------------------------------------------------------

    /// Inverted dropout: each element is zeroed with probability `rate` and
    /// survivors are scaled by 1/(1−rate), so the expectation is unchanged.
    pub fn dropout<R: rand::Rng + ?Sized>(
        &mut self,
        x: TensorId,
        rate: f64,
        rng: &mut R,
    ) -> Result<TensorId> {
        if !(0.0..1.0).contains(&rate) {
            return Err(TensorError::Invalid {
                op: "dropout",
                msg: format!("rate {rate} outside [0, 1)"),
            });
        }
        let v = &self.nodes[x.0].value;
        if rate == 0.0 {
            let t = v.clone();
            let mask = vec![T::one(); t.numel()];
            let rg = self.needs(&[x]);
            return Ok(self.push(t, Op::Dropout { x, mask }, rg));
        }
        let keep_scale = T::from_f64(1.0 / (1.0 - rate));
        let mask: Vec<T> = (0..v.numel())
            .map(|_| {
                if rng.gen::<f64>() < rate {
                    T::zero()
                } else {
                    keep_scale
                }
            })
            .collect();
        let data: Vec<T> = v.data().iter().zip(&mask).map(|(&e, &m)| e * m).collect();
        let shape = v.shape().to_vec();
        let rg = self.needs(&[x]);
        Ok(self.push(Tensor::new(shape, data)?, Op::Dropout { x, mask }, rg))
    }

    // ----- backward pass -----------------------------------------------------------

    /// Accumulate d`loss`/d`node` for every node that requires gradients.
    /// `loss` must be a single-element tensor produced from at least one
    /// trainable leaf.
    pub fn backward(&mut self, loss: TensorId) -> Result<()> {
        let lnode = &self.nodes[loss.0];
        if lnode.value.numel() != 1 {
            return Err(TensorError::LossNotScalar {
                shape: lnode.value.shape().to_vec(),
            });
        }
        if !lnode.requires_grad {
            return Err(TensorError::LossDetached);
        }
        for g in &mut self.grads {
            *g = None;
        }
        self.grads[loss.0] = Some(vec![T::one()]);

        let nodes = &self.nodes;
        let grads = &mut self.grads;
        for i in (0..=loss.0).rev() {
            let gy = match &grads[i] {
                Some(g) => g.clone(),
                None => continue,
            };
            match &nodes[i].op {
                Op::Leaf | Op::Constant => {}
                Op::Add(a, b) => {
                    let out_shape = nodes[i].value.shape();
                    bcast_binary_backward(nodes, grads, out_shape, &gy, *a, *b, |g| (g, g));
                }
                Op::Sub(a, b) => {
                    let out_shape = nodes[i].value.shape();
                    bcast_binary_backward(nodes, grads, out_shape, &gy, *a, *b, |g| (g, -g));
                }
                Op::Mul(a, b) => {
                    let (a, b) = (*a, *b);
                    let out_shape = nodes[i].value.shape().to_vec();
                    let sa = padded_strides(&out_shape, nodes[a.0].value.shape());
                    let sb = padded_strides(&out_shape, nodes[b.0].value.shape());
                    let da = nodes[a.0].value.data();
                    let db = nodes[b.0].value.data();
                    let (na, nb) = (nodes[a.0].requires_grad, nodes[b.0].requires_grad);
                    let mut ga = vec![T::zero(); da.len()];
                    let mut gb = vec![T::zero(); db.len()];
                    for_each_index(&out_shape, |flat, coords| {
                        let ia = flat_index(coords, &sa);
                        let ib = flat_index(coords, &sb);
                        if na {
                            ga[ia] += gy[flat] * db[ib];
                        }
                        if nb {
                            gb[ib] += gy[flat] * da[ia];
                        }
                    });
                    if na {
                        accumulate(grads, a, &ga);
                    }
                    if nb {
                        accumulate(grads, b, &gb);
                    }
                }
                Op::Matmul(a, b) => {
                    let (a, b) = (*a, *b);
                    let (m, k) = {
                        let s = nodes[a.0].value.shape();
                        (s[0], s[1])
                    };
                    let n = nodes[b.0].value.shape()[1];
                    if nodes[a.0].requires_grad {
                        // dA = dC · Bᵀ
                        let bt = transpose_values(nodes[b.0].value.data(), k, n);
                        let ga = matmul_values(&gy, &bt, m, n, k);
                        accumulate(grads, a, &ga);
                    }
                    if nodes[b.0].requires_grad {
                        // dB = Aᵀ · dC
                        let at = transpose_values(nodes[a.0].value.data(), m, k);
                        let gb = matmul_values(&at, &gy, k, m, n);
                        accumulate(grads, b, &gb);
                    }
                }
                Op::Transpose(x) => {
                    let x = *x;
                    if nodes[x.0].requires_grad {
                        let s = nodes[i].value.shape();
                        let gx = transpose_values(&gy, s[0], s[1]);
                        accumulate(grads, x, &gx);
                    }
                }
                Op::Scale(x, c) => {
                    let (x, c) = (*x, *c);
                    if nodes[x.0].requires_grad {
                        let gx: Vec<T> = gy.iter().map(|&g| g * c).collect();
                        accumulate(grads, x, &gx);
                    }
                }
                Op::Relu(x) => {
                    let x = *x;
                    if nodes[x.0].requires_grad {
                        let gx: Vec<T> = nodes[x.0]
                            .value
                            .data()
                            .iter()
                            .zip(&gy)
                            .map(|(&e, &g)| if e > T::zero() { g } else { T::zero() })
                            .collect();
                        accumulate(grads, x, &gx);
                    }
                }
                Op::Softmax { x, axis } => {
                    let (x, axis) = (*x, *axis);
                    if nodes[x.0].requires_grad {
                        let y = nodes[i].value.data();
                        let shape = nodes[i].value.shape();
                        let extent = shape[axis];
                        let outer: usize = shape[..axis].iter().product();
                        let inner: usize = shape[axis + 1..].iter().product();
                        let mut gx = vec![T::zero(); y.len()];
                        for o in 0..outer {
                            for c in 0..inner {
                                let at = |j: usize| o * extent * inner + j * inner + c;
                                let mut dot = T::zero();
                                for j in 0..extent {
                                    dot += gy[at(j)] * y[at(j)];
                                }
                                for j in 0..extent {
                                    gx[at(j)] = y[at(j)] * (gy[at(j)] - dot);
                                }
                            }
                        }
                        accumulate(grads, x, &gx);
                    }
                }
                Op::LayerNorm { x, gain, bias } => {
                    let (x, gain, bias) = (*x, *gain, *bias);
                    let src = nodes[x.0].value.data();
                    let g = nodes[gain.0].value.data();
                    let n = nodes[gain.0].value.numel();
                    let rows = src.len() / n;
                    let eps = T::from_f64(LAYER_NORM_EPS);
                    let inv_n = T::one() / T::from_f64(n as f64);
                    let mut gx = vec![T::zero(); src.len()];
                    let mut gg = vec![T::zero(); n];
                    let mut gb = vec![T::zero(); n];
                    for r in 0..rows {
                        let row = &src[r * n..(r + 1) * n];
                        let gyr = &gy[r * n..(r + 1) * n];
                        let mut mean = T::zero();
                        for &e in row {
                            mean += e;
                        }
                        mean *= inv_n;
                        let mut var = T::zero();
                        for &e in row {
                            let d = e - mean;
                            var += d * d;
                        }
                        var *= inv_n;
                        let inv_std = T::one() / (var + eps).sqrt();
                        // dxhat_j = gy_j * gain_j; dx follows the standard
                        // whitening derivative:
                        //   dx = inv_std * (dxhat - mean(dxhat) - xhat * mean(dxhat ⊙ xhat))
                        let mut mean_dxhat = T::zero();
                        let mut mean_dxhat_xhat = T::zero();
                        for j in 0..n {
                            let xhat = (row[j] - mean) * inv_std;
                            let dxhat = gyr[j] * g[j];
                            mean_dxhat += dxhat;
                            mean_dxhat_xhat += dxhat * xhat;
                            gg[j] += gyr[j] * xhat;
                            gb[j] += gyr[j];
                        }
                        mean_dxhat *= inv_n;
                        mean_dxhat_xhat *= inv_n;
                        for j in 0..n {
                            let xhat = (row[j] - mean) * inv_std;
                            let dxhat = gyr[j] * g[j];
                            gx[r * n + j] = inv_std * (dxhat - mean_dxhat - xhat * mean_dxhat_xhat);
                        }
                    }
                    if nodes[x.0].requires_grad {
                        accumulate(grads, x, &gx);
                    }
                    if nodes[gain.0].requires_grad {
                        accumulate(grads, gain, &gg);
                    }
                    if nodes[bias.0].requires_grad {
                        accumulate(grads, bias, &gb);
                    }
                }
                Op::Concat { inputs, axis } => {
                    let inputs = inputs.clone();
                    let axis = *axis;
                    let out_shape = nodes[i].value.shape();
                    let axis_total = out_shape[axis];
                    let outer: usize = out_shape[..axis].iter().product();
                    let inner: usize = out_shape[axis + 1..].iter().product();
                    let mut offset = 0usize;
                    for id in inputs {
                        let extent = nodes[id.0].value.shape()[axis];
                        let block = extent * inner;
                        if nodes[id.0].requires_grad {
                            let mut gx = vec![T::zero(); nodes[id.0].value.numel()];
                            for o in 0..outer {
                                let src = o * axis_total * inner + offset * inner;
                                let dst = o * block;
                                gx[dst..dst + block].copy_from_slice(&gy[src..src + block]);
                            }
                            accumulate(grads, id, &gx);
                        }
                        offset += extent;
                    }
                }
                Op::Slice { x, axis, start } => {
                    let (x, axis, start) = (*x, *axis, *start);
                    if nodes[x.0].requires_grad {
                        let in_shape = nodes[x.0].value.shape();
                        let len = nodes[i].value.shape()[axis];
                        let outer: usize = in_shape[..axis].iter().product();
                        let inner: usize = in_shape[axis + 1..].iter().product();
                        let full = in_shape[axis] * inner;
                        let mut gx = vec![T::zero(); nodes[x.0].value.numel()];
                        let block = len * inner;
                        for o in 0..outer {
                            let base = o * full + start * inner;
                            let src = o * block;
                            gx[base..base + block].copy_from_slice(&gy[src..src + block]);
                        }
                        accumulate(grads, x, &gx);
                    }
                }
                Op::Reshape(x) => {
                    let x = *x;
                    if nodes[x.0].requires_grad {
                        accumulate(grads, x, &gy);
                    }
                }
                Op::BroadcastTo(x) => {
                    let x = *x;
                    if nodes[x.0].requires_grad {
                        let out_shape = nodes[i].value.shape().to_vec();
                        let strides = padded_strides(&out_shape, nodes[x.0].value.shape());
                        let mut gx = vec![T::zero(); nodes[x.0].value.numel()];
                        for_each_index(&out_shape, |flat, coords| {
                            gx[flat_index(coords, &strides)] += gy[flat];
                        });
                        accumulate(grads, x, &gx);
                    }
                }
                Op::MaxAxis { x, argmax, .. } => {
                    let x = *x;
                    if nodes[x.0].requires_grad {
                        let mut gx = vec![T::zero(); nodes[x.0].value.numel()];
                        for (out_i, &src_i) in argmax.iter().enumerate() {
                            gx[src_i] += gy[out_i];
                        }
                        accumulate(grads, x, &gx);
                    }
                }
                Op::Sum(x) => {
                    let x = *x;
                    if nodes[x.0].requires_grad {
                        let gx = vec![gy[0]; nodes[x.0].value.numel()];
                        accumulate(grads, x, &gx);
                    }
                }
                Op::Mean(x) => {
                    let x = *x;
                    if nodes[x.0].requires_grad {
                        let numel = nodes[x.0].value.numel();
                        let g = gy[0] / T::from_f64(numel as f64);
                        let gx = vec![g; numel];
                        accumulate(grads, x, &gx);
                    }
                }
                Op::SumAxis { x, axis } => {
                    let (x, axis) = (*x, *axis);
                    if nodes[x.0].requires_grad {
                        let in_shape = nodes[x.0].value.shape();
                        let extent = in_shape[axis];
                        let outer: usize = in_shape[..axis].iter().product();
                        let inner: usize = in_shape[axis + 1..].iter().product();
                        let mut gx = vec![T::zero(); nodes[x.0].value.numel()];
                        for o in 0..outer {
                            for c in 0..inner {
                                let g = gy[o * inner + c];
                                for j in 0..extent {
                                    gx[o * extent * inner + j * inner + c] = g;
                                }
                            }
                        }
                        accumulate(grads, x, &gx);
                    }
                }
                Op::SmoothL1 { pred, target } => {
                    let (pred, target) = (*pred, *target);
                    let vp = nodes[pred.0].value.data();
                    let vt = nodes[target.0].value.data();
                    let dloc: Vec<T> = vp
                        .iter()
                        .zip(vt)
                        .map(|(&p, &t)| {
                            let d = p - t;
                            if d.abs() < T::one() {
                                d
                            } else {
                                d.signum()
                            }
                        })
                        .collect();
                    if nodes[pred.0].requires_grad {
                        let gp: Vec<T> = dloc.iter().zip(&gy).map(|(&d, &g)| d * g).collect();
                        accumulate(grads, pred, &gp);
                    }
                    if nodes[target.0].requires_grad {
                        let gt: Vec<T> = dloc.iter().zip(&gy).map(|(&d, &g)| -d * g).collect();
                        accumulate(grads, target, &gt);
                    }
                }
                Op::Bce { p, y } => {
                    let (p, y) = (*p, *y);
                    if nodes[p.0].requires_grad {
                        let lo = T::from_f64(BCE_CLAMP);
                        let hi = T::one() - lo;
                        let gp: Vec<T> = nodes[p.0]
                            .value
                            .data()
                            .iter()
                            .zip(nodes[y.0].value.data())
                            .zip(&gy)
                            .map(|((&pv, &yv), &g)| {
                                if pv <= lo || pv >= hi {
                                    T::zero()
                                } else {
                                    g * ((T::one() - yv) / (T::one() - pv) - yv / pv)
                                }
                            })
                            .collect();
                        accumulate(grads, p, &gp);
                    }
                }
                Op::Dropout { x, mask } => {
                    let x = *x;
                    if nodes[x.0].requires_grad {
                        let gx: Vec<T> = mask.iter().zip(&gy).map(|(&m, &g)| m * g).collect();
                        accumulate(grads, x, &gx);
                    }
                }
            }
        }
        Ok(())
    }
}

fn accumulate<T: Real>(grads: &mut [Option<Vec<T>>], id: TensorId, contribution: &[T]) {
    let slot = grads[id.0].get_or_insert_with(|| vec![T::zero(); contribution.len()]);
    for (s, &c) in slot.iter_mut().zip(contribution) {
        *s += c;
    }
}

/// Shared backward for broadcast add/sub, where each output gradient element
/// maps to a (+g, ±g) pair for the two inputs.
fn bcast_binary_backward<T: Real>(
    nodes: &[Node<T>],
    grads: &mut [Option<Vec<T>>],
    out_shape: &[usize],
    gy: &[T],
    a: TensorId,
    b: TensorId,
    split: impl Fn(T) -> (T, T),
) {
    let sa = padded_strides(out_shape, nodes[a.0].value.shape());
    let sb = padded_strides(out_shape, nodes[b.0].value.shape());
    let (na, nb) = (nodes[a.0].requires_grad, nodes[b.0].requires_grad);
    let mut ga = vec![T::zero(); nodes[a.0].value.numel()];
    let mut gb = vec![T::zero(); nodes[b.0].value.numel()];
    for_each_index(out_shape, |flat, coords| {
        let (ca, cb) = split(gy[flat]);
        if na {
            ga[flat_index(coords, &sa)] += ca;
        }
        if nb {
            gb[flat_index(coords, &sb)] += cb;
        }
    });
    if na {
        accumulate(grads, a, &ga);
    }
    if nb {
        accumulate(grads, b, &gb);
    }
}

fn matmul_values<T: Real>(a: &[T], b: &[T], m: usize, k: usize, n: usize) -> Vec<T> {
    let mut out = vec![T::zero(); m * n];
    for i in 0..m {
        for p in 0..k {
            let av = a[i * k + p];
            if av == T::zero() {
                continue;
            }
            let brow = &b[p * n..(p + 1) * n];
            let orow = &mut out[i * n..(i + 1) * n];
            for j in 0..n {
                orow[j] += av * brow[j];
            }
        }
    }
    out
}

fn transpose_values<T: Real>(a: &[T], m: usize, n: usize) -> Vec<T> {
    let mut out = vec![T::zero(); m * n];
    for i in 0..m {
        for j in 0..n {
            out[j * m + i] = a[i * n + j];
        }
    }
    out
}

/// NumPy-style right-aligned broadcast of two shapes.
fn broadcast_shape(op: &'static str, a: &[usize], b: &[usize]) -> Result<Vec<usize>> {
    let rank = a.len().max(b.len());
    let mut out = vec![0usize; rank];
    for d in 0..rank {
        let ea = if d < rank - a.len() { 1 } else { a[d - (rank - a.len())] };
        let eb = if d < rank - b.len() { 1 } else { b[d - (rank - b.len())] };
        out[d] = if ea == eb || eb == 1 {
            ea
        } else if ea == 1 {
            eb
        } else {
            return Err(TensorError::ShapeMismatch {
                op,
                lhs: a.to_vec(),
                rhs: b.to_vec(),
            });
        };
    }
    Ok(out)
}

/// Strides of `in_shape` aligned to `out_shape`, with zero stride on
/// broadcast dimensions, so `flat_index(out_coords, strides)` addresses the
/// matching input element.
fn padded_strides(out_shape: &[usize], in_shape: &[usize]) -> Vec<usize> {
    let rank = out_shape.len();
    let offset = rank - in_shape.len();
    let mut real = vec![0usize; in_shape.len()];
    let mut acc = 1usize;
    for d in (0..in_shape.len()).rev() {
        real[d] = acc;
        acc *= in_shape[d];
    }
    (0..rank)
        .map(|d| {
            if d < offset || (in_shape[d - offset] == 1 && out_shape[d] != 1) {
                0
            } else {
                real[d - offset]
            }
        })
        .collect()
}

fn flat_index(coords: &[usize], strides: &[usize]) -> usize {
    coords.iter().zip(strides).map(|(&c, &s)| c * s).sum()
}

/// Visit every position of `shape` in row-major order, passing the flat index
/// and the coordinate vector.
fn for_each_index(shape: &[usize], mut f: impl FnMut(usize, &[usize])) {
    let numel: usize = shape.iter().product();
    let mut coords = vec![0usize; shape.len()];
    for flat in 0..numel {
        f(flat, &coords);
        for d in (0..shape.len()).rev() {
            coords[d] += 1;
            if coords[d] < shape[d] {
                break;
            }
            coords[d] = 0;
        }
    }
}
