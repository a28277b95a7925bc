use std::collections::HashMap;

use super::kernels::{self, Conv2dGeom, Conv3dGeom, PoolGeom};
use super::params::{ParamId, ParamStore};
use super::{numel, Scalar, Tensor};
use crate::error::{shape_err, Error, Result};

/// Handle to a node recorded in a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Debug)]
enum Op<T> {
    Leaf,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, T),
    AddScalar(Var),
    MatMul(Var, Var),
    Transpose(Var),
    Reshape(Var),
    Concat {
        inputs: Vec<Var>,
        axis: usize,
    },
    Slice {
        input: Var,
        axis: usize,
        start: usize,
    },
    Sum {
        input: Var,
        map: Vec<usize>,
    },
    Mean {
        input: Var,
        map: Vec<usize>,
        count: usize,
    },
    Max {
        input: Var,
        argmax: Vec<usize>,
    },
    Expand {
        input: Var,
        map: Vec<usize>,
    },
    BiasAdd {
        input: Var,
        bias: Var,
    },
    Relu(Var),
    Exp(Var),
    Log(Var),
    Powf(Var, T),
    Pad2d {
        input: Var,
        pad: usize,
    },
    Conv2d {
        input: Var,
        weight: Var,
        bias: Option<Var>,
        geom: Conv2dGeom,
    },
    Conv3d {
        input: Var,
        weight: Var,
        bias: Option<Var>,
        geom: Conv3dGeom,
    },
    AvgPool2d {
        input: Var,
        geom: PoolGeom,
    },
}

#[derive(Clone, Debug)]
struct Node<T> {
    value: Tensor<T>,
    op: Op<T>,
    requires_grad: bool,
}

/// A tape of tensor operations in execution order.
///
/// Nodes are appended as ops run, so inputs always precede their consumers and a single
/// reverse sweep visits each op once. Leaf gradients persist across `backward` calls
/// until [`Graph::zero_grad`].
#[derive(Debug)]
pub struct Graph<T> {
    nodes: Vec<Node<T>>,
    leaf_grads: HashMap<usize, Vec<T>>,
    params: HashMap<ParamId, Var>,
    stat_updates: Vec<(ParamId, Tensor<T>)>,
    trap_non_finite: bool,
}

impl<T: Scalar> Default for Graph<T> {
    fn default() -> Self {
        Self::new()
    }
}

fn broadcast_reduced(from: &[usize], to: &[usize]) -> Option<Vec<bool>> {
    if from.len() != to.len() {
        return None;
    }
    from.iter()
        .zip(to)
        .map(|(&f, &t)| {
            if f == t {
                Some(false)
            } else if f == 1 {
                Some(true)
            } else {
                None
            }
        })
        .collect()
}

impl<T: Scalar> Graph<T> {
    pub fn new() -> Self {
        Self {
            nodes: Vec::new(),
            leaf_grads: HashMap::new(),
            params: HashMap::new(),
            stat_updates: Vec::new(),
            trap_non_finite: false,
        }
    }

    /// Debug mode: every op output is checked and NaN/Inf becomes a numerical error.
    pub fn with_non_finite_trap(mut self, on: bool) -> Self {
        self.trap_non_finite = on;
        self
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Accumulated gradient of a leaf, if any has been computed.
    pub fn grad(&self, v: Var) -> Option<Tensor<T>> {
        self.leaf_grads
            .get(&v.0)
            .map(|g| Tensor::new(self.shape(v).to_vec(), g.clone()).expect("grad matches shape"))
    }

    pub fn zero_grad(&mut self) {
        self.leaf_grads.clear();
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>, requires_grad: bool) -> Result<Var> {
        if self.trap_non_finite && !value.all_finite() {
            return Err(Error::Numerical(format!(
                "non-finite value produced by {}",
                op_name(&op)
            )));
        }
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Ok(Var(self.nodes.len() - 1))
    }

    fn rg(&self, vars: &[Var]) -> bool {
        vars.iter().any(|v| self.nodes[v.0].requires_grad)
    }

    pub fn leaf(&mut self, value: Tensor<T>, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op: Op::Leaf,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    /// A leaf that never receives gradient.
    pub fn constant(&mut self, value: Tensor<T>) -> Var {
        self.leaf(value, false)
    }

    /// The graph node bound to a stored parameter, created on first use.
    pub fn param(&mut self, store: &ParamStore<T>, id: ParamId) -> Var {
        if let Some(&v) = self.params.get(&id) {
            return v;
        }
        let entry = store.entry(id);
        let v = self.leaf(entry.value.clone(), entry.trainable);
        self.params.insert(id, v);
        v
    }

    /// Routes `store` parameter `id` to an existing node instead of a fresh leaf.
    pub fn bind_param(&mut self, id: ParamId, v: Var) {
        self.params.insert(id, v);
    }

    /// Adds the leaf gradients of all bound parameters into the store's gradient buffers.
    pub fn accumulate_param_grads(&self, store: &mut ParamStore<T>) {
        for (&id, &v) in &self.params {
            if let Some(g) = self.leaf_grads.get(&v.0) {
                let dst = store.grad_mut(id);
                for (d, &s) in dst.data_mut().iter_mut().zip(g) {
                    *d = *d + s;
                }
            }
        }
    }

    /// Records a deferred write to a non-trainable buffer (batch-norm running statistics).
    pub fn push_stat_update(&mut self, id: ParamId, value: Tensor<T>) {
        self.stat_updates.push((id, value));
    }

    pub fn take_stat_updates(&mut self) -> Vec<(ParamId, Tensor<T>)> {
        std::mem::take(&mut self.stat_updates)
    }

    fn same_shape(&self, a: Var, b: Var, what: &str) -> Result<()> {
        if self.shape(a) != self.shape(b) {
            return shape_err(format!(
                "{what}: operand shapes {:?} and {:?} differ",
                self.shape(a),
                self.shape(b)
            ));
        }
        Ok(())
    }

    fn zip_with(&self, a: Var, b: Var, f: impl Fn(T, T) -> T) -> Tensor<T> {
        let (x, y) = (self.value(a), self.value(b));
        let data = x.data().iter().zip(y.data()).map(|(&p, &q)| f(p, q)).collect();
        Tensor::new(x.shape().to_vec(), data).unwrap()
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b, "add")?;
        let v = self.zip_with(a, b, |p, q| p + q);
        let rg = self.rg(&[a, b]);
        self.push(v, Op::Add(a, b), rg)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b, "sub")?;
        let v = self.zip_with(a, b, |p, q| p - q);
        let rg = self.rg(&[a, b]);
        self.push(v, Op::Sub(a, b), rg)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b, "mul")?;
        let v = self.zip_with(a, b, |p, q| p * q);
        let rg = self.rg(&[a, b]);
        self.push(v, Op::Mul(a, b), rg)
    }

    pub fn scale(&mut self, a: Var, c: T) -> Result<Var> {
        let v = self.value(a).map(|x| x * c);
        let rg = self.rg(&[a]);
        self.push(v, Op::Scale(a, c), rg)
    }

    pub fn add_scalar(&mut self, a: Var, c: T) -> Result<Var> {
        let v = self.value(a).map(|x| x + c);
        let rg = self.rg(&[a]);
        self.push(v, Op::AddScalar(a), rg)
    }

    /// `[m, k] × [k, n] → [m, n]`.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[0] {
            return shape_err(format!("matmul: incompatible shapes {sa:?} and {sb:?}"));
        }
        let (m, k, n) = (sa[0], sa[1], sb[1]);
        let data = kernels::matmul(self.value(a).data(), self.value(b).data(), m, k, n);
        let rg = self.rg(&[a, b]);
        self.push(Tensor::new(vec![m, n], data)?, Op::MatMul(a, b), rg)
    }

    pub fn transpose(&mut self, a: Var) -> Result<Var> {
        let s = self.shape(a);
        if s.len() != 2 {
            return shape_err(format!("transpose expects a matrix, got {s:?}"));
        }
        let (r, c) = (s[0], s[1]);
        let data = kernels::transpose(self.value(a).data(), r, c);
        let rg = self.rg(&[a]);
        self.push(Tensor::new(vec![c, r], data)?, Op::Transpose(a), rg)
    }

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Result<Var> {
        let v = self.value(a).clone().reshape(shape)?;
        let rg = self.rg(&[a]);
        self.push(v, Op::Reshape(a), rg)
    }

    pub fn concat(&mut self, inputs: &[Var], axis: usize) -> Result<Var> {
        let Some(&first) = inputs.first() else {
            return shape_err("concat of zero tensors");
        };
        let base = self.shape(first).to_vec();
        if axis >= base.len() {
            return shape_err(format!("concat axis {axis} out of range for {base:?}"));
        }
        let mut total = 0;
        for &v in inputs {
            let s = self.shape(v);
            let compatible =
                s.len() == base.len() && s.iter().zip(&base).enumerate().all(|(i, (a, b))| i == axis || a == b);
            if !compatible {
                return shape_err(format!("concat: {s:?} incompatible with {base:?} on axis {axis}"));
            }
            total += s[axis];
        }
        let outer: usize = base[..axis].iter().product();
        let inner: usize = base[axis + 1..].iter().product();
        let mut shape = base.clone();
        shape[axis] = total;
        let mut data = Vec::with_capacity(numel(&shape));
        for o in 0..outer {
            for &v in inputs {
                let chunk = self.shape(v)[axis] * inner;
                data.extend_from_slice(&self.value(v).data()[o * chunk..(o + 1) * chunk]);
            }
        }
        let rg = self.rg(inputs);
        self.push(
            Tensor::new(shape, data)?,
            Op::Concat {
                inputs: inputs.to_vec(),
                axis,
            },
            rg,
        )
    }

    pub fn slice(&mut self, a: Var, axis: usize, start: usize, len: usize) -> Result<Var> {
        let s = self.shape(a).to_vec();
        if axis >= s.len() || start + len > s[axis] {
            return shape_err(format!(
                "slice {start}..{} of axis {axis} out of range for {s:?}",
                start + len
            ));
        }
        let outer: usize = s[..axis].iter().product();
        let inner: usize = s[axis + 1..].iter().product();
        let mut shape = s.clone();
        shape[axis] = len;
        let src = self.value(a).data();
        let mut data = Vec::with_capacity(numel(&shape));
        for o in 0..outer {
            let off = (o * s[axis] + start) * inner;
            data.extend_from_slice(&src[off..off + len * inner]);
        }
        let rg = self.rg(&[a]);
        self.push(Tensor::new(shape, data)?, Op::Slice { input: a, axis, start }, rg)
    }

    fn reduced_axes(&self, a: Var, axes: &[usize]) -> Result<Vec<bool>> {
        let rank = self.shape(a).len();
        let mut mask = vec![false; rank];
        for &ax in axes {
            if ax >= rank {
                return shape_err(format!("axis {ax} out of range for {:?}", self.shape(a)));
            }
            mask[ax] = true;
        }
        Ok(mask)
    }

    /// Sum over `axes`, keeping them as size-1 axes.
    pub fn sum(&mut self, a: Var, axes: &[usize]) -> Result<Var> {
        let mask = self.reduced_axes(a, axes)?;
        let (shape, map) = kernels::reduce_map(self.shape(a), &mask);
        let mut out = vec![T::zero(); numel(&shape)];
        for (&x, &m) in self.value(a).data().iter().zip(&map) {
            out[m] = out[m] + x;
        }
        let rg = self.rg(&[a]);
        self.push(Tensor::new(shape, out)?, Op::Sum { input: a, map }, rg)
    }

    /// Sum of every element as a rank-0 tensor.
    pub fn sum_all(&mut self, a: Var) -> Result<Var> {
        let axes: Vec<usize> = (0..self.shape(a).len()).collect();
        let s = self.sum(a, &axes)?;
        self.reshape(s, &[])
    }

    /// Mean over `axes`, keeping them as size-1 axes.
    pub fn mean(&mut self, a: Var, axes: &[usize]) -> Result<Var> {
        let mask = self.reduced_axes(a, axes)?;
        let (shape, map) = kernels::reduce_map(self.shape(a), &mask);
        let count = self.value(a).len() / numel(&shape).max(1);
        if count == 0 {
            return shape_err("mean over an empty axis");
        }
        let inv = T::one() / T::from_usize(count).unwrap();
        let mut out = vec![T::zero(); numel(&shape)];
        for (&x, &m) in self.value(a).data().iter().zip(&map) {
            out[m] = out[m] + x;
        }
        out.iter_mut().for_each(|v| *v = *v * inv);
        let rg = self.rg(&[a]);
        self.push(Tensor::new(shape, out)?, Op::Mean { input: a, map, count }, rg)
    }

    /// Max over `axes`, keeping them as size-1 axes. Ties route gradient to the first maximum.
    pub fn max(&mut self, a: Var, axes: &[usize]) -> Result<Var> {
        let mask = self.reduced_axes(a, axes)?;
        let (shape, map) = kernels::reduce_map(self.shape(a), &mask);
        let n = numel(&shape);
        let mut out = vec![T::neg_infinity(); n];
        let mut argmax = vec![usize::MAX; n];
        for (i, (&x, &m)) in self.value(a).data().iter().zip(&map).enumerate() {
            if argmax[m] == usize::MAX || x > out[m] {
                out[m] = x;
                argmax[m] = i;
            }
        }
        let rg = self.rg(&[a]);
        self.push(Tensor::new(shape, out)?, Op::Max { input: a, argmax }, rg)
    }

    /// Explicit broadcast: every axis of `a` must equal the target extent or be 1.
    pub fn expand(&mut self, a: Var, shape: &[usize]) -> Result<Var> {
        let Some(mask) = broadcast_reduced(self.shape(a), shape) else {
            return shape_err(format!("cannot expand {:?} to {shape:?}", self.shape(a)));
        };
        let (_, map) = kernels::reduce_map(shape, &mask);
        let src = self.value(a).data();
        let data = map.iter().map(|&m| src[m]).collect();
        let rg = self.rg(&[a]);
        self.push(Tensor::new(shape.to_vec(), data)?, Op::Expand { input: a, map }, rg)
    }

    /// Adds a per-channel bias (length = extent of axis 1) to a tensor of rank ≥ 2.
    pub fn bias_add(&mut self, a: Var, bias: Var) -> Result<Var> {
        let s = self.shape(a).to_vec();
        let bs = self.shape(bias);
        if s.len() < 2 || bs != [s[1]] {
            return shape_err(format!("bias_add: bias {bs:?} does not match channels of {s:?}"));
        }
        let inner: usize = s[2..].iter().product();
        let b = self.value(bias).data().to_vec();
        let mut v = self.value(a).clone();
        for (i, x) in v.data_mut().iter_mut().enumerate() {
            *x = *x + b[(i / inner) % s[1]];
        }
        let rg = self.rg(&[a, bias]);
        self.push(v, Op::BiasAdd { input: a, bias }, rg)
    }

    /// max(x, 0); the gradient at exactly 0 is 0.
    pub fn relu(&mut self, a: Var) -> Result<Var> {
        let v = self.value(a).map(|x| if x > T::zero() { x } else { T::zero() });
        let rg = self.rg(&[a]);
        self.push(v, Op::Relu(a), rg)
    }

    pub fn exp(&mut self, a: Var) -> Result<Var> {
        let v = self.value(a).map(T::exp);
        let rg = self.rg(&[a]);
        self.push(v, Op::Exp(a), rg)
    }

    pub fn log(&mut self, a: Var) -> Result<Var> {
        let v = self.value(a).map(T::ln);
        let rg = self.rg(&[a]);
        self.push(v, Op::Log(a), rg)
    }

    pub fn powf(&mut self, a: Var, exponent: T) -> Result<Var> {
        let v = self.value(a).map(|x| x.powf(exponent));
        let rg = self.rg(&[a]);
        self.push(v, Op::Powf(a, exponent), rg)
    }

    /// Zero padding of the last two axes by `pad` on each side.
    pub fn pad2d(&mut self, a: Var, pad: usize) -> Result<Var> {
        let s = self.shape(a).to_vec();
        if s.len() < 2 {
            return shape_err(format!("pad2d needs rank >= 2, got {s:?}"));
        }
        let (h, w) = (s[s.len() - 2], s[s.len() - 1]);
        let planes = numel(&s[..s.len() - 2]);
        let data = kernels::pad2d_forward(self.value(a).data(), planes, h, w, pad);
        let mut shape = s.clone();
        let r = shape.len();
        shape[r - 2] += 2 * pad;
        shape[r - 1] += 2 * pad;
        let rg = self.rg(&[a]);
        self.push(Tensor::new(shape, data)?, Op::Pad2d { input: a, pad }, rg)
    }

    /// Cross-correlation of `B×C_in×H×W` with `C_out×C_in×kh×kw`, optional per-channel bias.
    pub fn conv2d(&mut self, input: Var, weight: Var, bias: Option<Var>, stride: usize, pad: usize) -> Result<Var> {
        let (xs, ws) = (self.shape(input).to_vec(), self.shape(weight).to_vec());
        if xs.len() != 4 || ws.len() != 4 {
            return shape_err(format!("conv2d expects rank-4 input and kernel, got {xs:?} and {ws:?}"));
        }
        if xs[1] != ws[1] {
            return shape_err(format!(
                "conv2d channel mismatch: input {xs:?} has {} channels, kernel {ws:?} expects {}",
                xs[1], ws[1]
            ));
        }
        if let Some(b) = bias {
            if self.shape(b) != [ws[0]] {
                return shape_err(format!("conv2d bias {:?} for {} output channels", self.shape(b), ws[0]));
            }
        }
        let (Some(oh), Some(ow)) = (
            kernels::window_out(xs[2], ws[2], pad, stride),
            kernels::window_out(xs[3], ws[3], pad, stride),
        ) else {
            return shape_err(format!("conv2d kernel {ws:?} exceeds padded input {xs:?} (pad {pad})"));
        };
        let geom = Conv2dGeom {
            batch: xs[0],
            c_in: xs[1],
            h: xs[2],
            w: xs[3],
            c_out: ws[0],
            kh: ws[2],
            kw: ws[3],
            stride,
            pad,
            oh,
            ow,
        };
        let data = kernels::conv2d_forward(
            &geom,
            self.value(input).data(),
            self.value(weight).data(),
            bias.map(|b| self.value(b).data()),
        );
        let mut deps = vec![input, weight];
        deps.extend(bias);
        let rg = self.rg(&deps);
        self.push(
            Tensor::new(vec![xs[0], ws[0], oh, ow], data)?,
            Op::Conv2d {
                input,
                weight,
                bias,
                geom,
            },
            rg,
        )
    }

    /// Spectral-only 3-D convolution of `B×C_in×D×H×W` with a `C_out×C_in×p×1×1` kernel.
    pub fn conv3d_pointwise(&mut self, input: Var, weight: Var, bias: Option<Var>) -> Result<Var> {
        let (xs, ws) = (self.shape(input).to_vec(), self.shape(weight).to_vec());
        if xs.len() != 5 || ws.len() != 5 || ws[3] != 1 || ws[4] != 1 {
            return shape_err(format!(
                "conv3d_pointwise expects B×C×D×H×W input and C_out×C_in×p×1×1 kernel, got {xs:?} and {ws:?}"
            ));
        }
        if xs[1] != ws[1] {
            return shape_err(format!("conv3d channel mismatch: input {xs:?}, kernel {ws:?}"));
        }
        if ws[2] == 0 || ws[2] > xs[2] {
            return shape_err(format!("spectral kernel {} exceeds band count {}", ws[2], xs[2]));
        }
        if let Some(b) = bias {
            if self.shape(b) != [ws[0]] {
                return shape_err(format!("conv3d bias {:?} for {} output channels", self.shape(b), ws[0]));
            }
        }
        let geom = Conv3dGeom {
            batch: xs[0],
            c_in: xs[1],
            depth: xs[2],
            plane: xs[3] * xs[4],
            c_out: ws[0],
            taps: ws[2],
            out_depth: xs[2] - ws[2] + 1,
        };
        let data = kernels::conv3d_pointwise_forward(
            &geom,
            self.value(input).data(),
            self.value(weight).data(),
            bias.map(|b| self.value(b).data()),
        );
        let mut deps = vec![input, weight];
        deps.extend(bias);
        let rg = self.rg(&deps);
        self.push(
            Tensor::new(vec![xs[0], ws[0], geom.out_depth, xs[3], xs[4]], data)?,
            Op::Conv3d {
                input,
                weight,
                bias,
                geom,
            },
            rg,
        )
    }

    /// Average pooling over the last two axes of a `B×C×H×W` tensor (padding counts as zeros).
    pub fn avg_pool2d(&mut self, input: Var, k: usize, stride: usize, pad: usize) -> Result<Var> {
        let s = self.shape(input).to_vec();
        if s.len() != 4 {
            return shape_err(format!("avg_pool2d expects B×C×H×W, got {s:?}"));
        }
        let (Some(oh), Some(ow)) = (
            kernels::window_out(s[2], k, pad, stride),
            kernels::window_out(s[3], k, pad, stride),
        ) else {
            return shape_err(format!("pool window {k} exceeds padded extent of {s:?} (pad {pad})"));
        };
        let geom = PoolGeom {
            planes: s[0] * s[1],
            h: s[2],
            w: s[3],
            k,
            stride,
            pad,
            oh,
            ow,
        };
        let data = kernels::avg_pool2d_forward(&geom, self.value(input).data());
        let rg = self.rg(&[input]);
        self.push(
            Tensor::new(vec![s[0], s[1], oh, ow], data)?,
            Op::AvgPool2d { input, geom },
            rg,
        )
    }

    /// Reverse sweep from a scalar `loss`; leaf gradients accumulate across calls.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if self.value(loss).len() != 1 {
            return Err(Error::Contract(format!(
                "backward needs a scalar loss, got shape {:?}",
                self.shape(loss)
            )));
        }
        let mut grads: Vec<Option<Vec<T>>> = vec![None; loss.0 + 1];
        grads[loss.0] = Some(vec![T::one()]);
        for i in (0..=loss.0).rev() {
            let Some(gy) = grads[i].take() else { continue };
            if !self.nodes[i].requires_grad {
                continue;
            }
            if matches!(self.nodes[i].op, Op::Leaf) {
                match self.leaf_grads.get_mut(&i) {
                    Some(acc) => acc.iter_mut().zip(&gy).for_each(|(a, &g)| *a = *a + g),
                    None => {
                        self.leaf_grads.insert(i, gy);
                    }
                }
                continue;
            }
            for (input, g) in self.local_grads(i, &gy) {
                if !self.nodes[input.0].requires_grad {
                    continue;
                }
                match &mut grads[input.0] {
                    Some(acc) => acc.iter_mut().zip(&g).for_each(|(a, &b)| *a = *a + b),
                    slot @ None => *slot = Some(g),
                }
            }
        }
        Ok(())
    }

    /// Vector-Jacobian products of node `i` for each of its inputs.
    fn local_grads(&self, i: usize, gy: &[T]) -> Vec<(Var, Vec<T>)> {
        let node = &self.nodes[i];
        let val = |v: Var| self.nodes[v.0].value.data();
        let out = node.value.data();
        match &node.op {
            Op::Leaf => vec![],
            Op::Add(a, b) => vec![(*a, gy.to_vec()), (*b, gy.to_vec())],
            Op::Sub(a, b) => vec![(*a, gy.to_vec()), (*b, gy.iter().map(|&g| -g).collect())],
            Op::Mul(a, b) => {
                let (x, y) = (val(*a), val(*b));
                vec![
                    (*a, gy.iter().zip(y).map(|(&g, &q)| g * q).collect()),
                    (*b, gy.iter().zip(x).map(|(&g, &p)| g * p).collect()),
                ]
            }
            Op::Scale(a, c) => vec![(*a, gy.iter().map(|&g| g * *c).collect())],
            Op::AddScalar(a) | Op::Reshape(a) => vec![(*a, gy.to_vec())],
            Op::MatMul(a, b) => {
                let (sa, sb) = (self.shape(*a), self.shape(*b));
                let (m, k, n) = (sa[0], sa[1], sb[1]);
                let bt = kernels::transpose(val(*b), k, n);
                let at = kernels::transpose(val(*a), m, k);
                vec![
                    (*a, kernels::matmul(gy, &bt, m, n, k)),
                    (*b, kernels::matmul(&at, gy, k, m, n)),
                ]
            }
            Op::Transpose(a) => {
                let s = self.shape(*a);
                vec![(*a, kernels::transpose(gy, s[1], s[0]))]
            }
            Op::Concat { inputs, axis } => {
                let shape = node.value.shape();
                let outer: usize = shape[..*axis].iter().product();
                let inner: usize = shape[axis + 1..].iter().product();
                let mut parts: Vec<Vec<T>> = inputs
                    .iter()
                    .map(|v| Vec::with_capacity(self.value(*v).len()))
                    .collect();
                let mut pos = 0;
                for _ in 0..outer {
                    for (p, v) in parts.iter_mut().zip(inputs) {
                        let chunk = self.shape(*v)[*axis] * inner;
                        p.extend_from_slice(&gy[pos..pos + chunk]);
                        pos += chunk;
                    }
                }
                inputs.iter().copied().zip(parts).collect()
            }
            Op::Slice { input, axis, start } => {
                let s = self.shape(*input);
                let len = node.value.shape()[*axis];
                let outer: usize = s[..*axis].iter().product();
                let inner: usize = s[axis + 1..].iter().product();
                let mut g = vec![T::zero(); numel(s)];
                for o in 0..outer {
                    let dst = (o * s[*axis] + start) * inner;
                    let src = o * len * inner;
                    g[dst..dst + len * inner].copy_from_slice(&gy[src..src + len * inner]);
                }
                vec![(*input, g)]
            }
            Op::Sum { input, map } => vec![(*input, map.iter().map(|&m| gy[m]).collect())],
            Op::Mean { input, map, count } => {
                let inv = T::one() / T::from_usize(*count).unwrap();
                vec![(*input, map.iter().map(|&m| gy[m] * inv).collect())]
            }
            Op::Max { input, argmax } => {
                let mut g = vec![T::zero(); self.value(*input).len()];
                for (&j, &up) in argmax.iter().zip(gy) {
                    g[j] = g[j] + up;
                }
                vec![(*input, g)]
            }
            Op::Expand { input, map } => {
                let mut g = vec![T::zero(); self.value(*input).len()];
                for (&m, &up) in map.iter().zip(gy) {
                    g[m] = g[m] + up;
                }
                vec![(*input, g)]
            }
            Op::BiasAdd { input, bias } => {
                let s = node.value.shape();
                let inner: usize = s[2..].iter().product();
                let mut gb = vec![T::zero(); s[1]];
                for (j, &up) in gy.iter().enumerate() {
                    let c = (j / inner) % s[1];
                    gb[c] = gb[c] + up;
                }
                vec![(*input, gy.to_vec()), (*bias, gb)]
            }
            Op::Relu(a) => vec![(
                *a,
                gy.iter()
                    .zip(val(*a))
                    .map(|(&g, &x)| if x > T::zero() { g } else { T::zero() })
                    .collect(),
            )],
            Op::Exp(a) => vec![(*a, gy.iter().zip(out).map(|(&g, &y)| g * y).collect())],
            Op::Log(a) => vec![(*a, gy.iter().zip(val(*a)).map(|(&g, &x)| g / x).collect())],
            Op::Powf(a, c) => {
                let c1 = *c - T::one();
                vec![(*a, gy.iter().zip(val(*a)).map(|(&g, &x)| g * *c * x.powf(c1)).collect())]
            }
            Op::Pad2d { input, pad } => {
                let s = self.shape(*input);
                let (h, w) = (s[s.len() - 2], s[s.len() - 1]);
                let planes = numel(&s[..s.len() - 2]);
                vec![(*input, kernels::pad2d_backward(gy, planes, h, w, *pad))]
            }
            Op::Conv2d {
                input,
                weight,
                bias,
                geom,
            } => {
                let (gx, gw, gb) = kernels::conv2d_backward(geom, val(*input), val(*weight), gy);
                let mut v = vec![(*input, gx), (*weight, gw)];
                v.extend(bias.map(|b| (b, gb)));
                v
            }
            Op::Conv3d {
                input,
                weight,
                bias,
                geom,
            } => {
                let (gx, gw, gb) = kernels::conv3d_pointwise_backward(geom, val(*input), val(*weight), gy);
                let mut v = vec![(*input, gx), (*weight, gw)];
                v.extend(bias.map(|b| (b, gb)));
                v
            }
            Op::AvgPool2d { input, geom } => vec![(*input, kernels::avg_pool2d_backward(geom, gy))],
        }
    }
}

fn op_name<T>(op: &Op<T>) -> &'static str {
    match op {
        Op::Leaf => "leaf",
        Op::Add(..) => "add",
        Op::Sub(..) => "sub",
        Op::Mul(..) => "mul",
        Op::Scale(..) => "scale",
        Op::AddScalar(..) => "add_scalar",
        Op::MatMul(..) => "matmul",
        Op::Transpose(..) => "transpose",
        Op::Reshape(..) => "reshape",
        Op::Concat { .. } => "concat",
        Op::Slice { .. } => "slice",
        Op::Sum { .. } => "sum",
        Op::Mean { .. } => "mean",
        Op::Max { .. } => "max",
        Op::Expand { .. } => "expand",
        Op::BiasAdd { .. } => "bias_add",
        Op::Relu(..) => "relu",
        Op::Exp(..) => "exp",
        Op::Log(..) => "log",
        Op::Powf(..) => "powf",
        Op::Pad2d { .. } => "pad2d",
        Op::Conv2d { .. } => "conv2d",
        Op::Conv3d { .. } => "conv3d_pointwise",
        Op::AvgPool2d { .. } => "avg_pool2d",
    }
}
