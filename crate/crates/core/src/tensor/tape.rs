use super::conv::{self, ConvGeometry};
use super::ops::{self, NormSaved};
use super::{numel, Real, Result, Tensor, TensorError};

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Backward rule of a user-defined tape operation.
pub trait Backward<T: Real> {
    /// Gradient for every input (or `None` where not needed), given the
    /// inputs, the recorded output and the upstream gradient.
    fn backward(&self, inputs: &[&Tensor<T>], output: &Tensor<T>, upstream: &[T], need: &[bool]) -> Vec<Option<Vec<T>>>;
}

enum Op<T: Real> {
    Leaf,
    Add(Var, Var),
    Mul(Var, Var),
    Scale(Var, T),
    Sum(Var),
    Conv3d {
        input: Var,
        weight: Var,
        bias: Option<Var>,
        geom: ConvGeometry,
    },
    ConvTranspose3d {
        input: Var,
        weight: Var,
        bias: Option<Var>,
        geom: ConvGeometry,
    },
    InstanceNorm {
        input: Var,
        gamma: Var,
        beta: Var,
        saved: NormSaved<T>,
    },
    LeakyRelu(Var, T),
    Softmax(Var),
    Concat(Var, Var),
    Slice {
        input: Var,
        start: usize,
        len: usize,
    },
    Custom {
        inputs: Vec<Var>,
        rule: Box<dyn Backward<T>>,
    },
}

impl<T: Real> Op<T> {
    fn name(&self) -> &'static str {
        match self {
            Op::Leaf => "leaf",
            Op::Add(..) => "add",
            Op::Mul(..) => "mul",
            Op::Scale(..) => "scale",
            Op::Sum(..) => "sum",
            Op::Conv3d { .. } => "conv3d",
            Op::ConvTranspose3d { .. } => "conv_transpose3d",
            Op::InstanceNorm { .. } => "instance_norm",
            Op::LeakyRelu(..) => "leaky_relu",
            Op::Softmax(..) => "softmax_channels",
            Op::Concat(..) => "concat_channels",
            Op::Slice { .. } => "slice_channels",
            Op::Custom { .. } => "custom",
        }
    }
}

struct Node<T: Real> {
    value: Tensor<T>,
    op: Op<T>,
    requires_grad: bool,
}

/// Ordered record of executed operations.
///
/// Operations are methods on the tape; each returns a [`Var`] naming its
/// output. [`Tape::backward`] replays the record in reverse.
pub struct Tape<T: Real> {
    nodes: Vec<Node<T>>,
    grads: Vec<Option<Vec<T>>>,
    retain_intermediate: bool,
    last_order: Vec<Var>,
}

impl<T: Real> Default for Tape<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Real> Tape<T> {
    /// A tape that keeps gradients for every node that requires them.
    pub fn new() -> Self {
        Self {
            nodes: Vec::new(),
            grads: Vec::new(),
            retain_intermediate: true,
            last_order: Vec::new(),
        }
    }

    /// A tape that only keeps gradients of leaves; intermediate gradients are
    /// released as soon as they have been propagated.
    pub fn leaf_grads_only() -> Self {
        Self {
            retain_intermediate: false,
            ..Self::new()
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Drop every recorded value, operation and gradient.
    pub fn clear(&mut self) {
        self.nodes.clear();
        self.grads.clear();
        self.last_order.clear();
    }

    /// Zero all accumulated gradients, keeping recorded values.
    pub fn zero_grads(&mut self) {
        self.grads.iter_mut().for_each(|g| *g = None);
    }

    /// Every recorded node, in recording order.
    pub fn vars(&self) -> impl Iterator<Item = Var> {
        (0..self.nodes.len()).map(Var)
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

    pub fn op_name(&self, v: Var) -> &'static str {
        self.nodes[v.0].op.name()
    }

    pub fn grad(&self, v: Var) -> Option<&[T]> {
        self.grads.get(v.0).and_then(|g| g.as_deref())
    }

    pub fn grad_tensor(&self, v: Var) -> Option<Tensor<T>> {
        self.grad(v)
            .map(|g| Tensor::new(self.shape(v), g.to_vec()).expect("grad shape matches value"))
    }

    /// Nodes visited by the most recent backward pass, in visiting order.
    pub fn backward_order(&self) -> &[Var] {
        &self.last_order
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>, requires_grad: bool) -> Var {
        let mut value = value;
        value.requires_grad = requires_grad;
        value.grad = None;
        self.nodes.push(Node { value, op, requires_grad });
        self.grads.push(None);
        Var(self.nodes.len() - 1)
    }

    fn any_grad(&self, vars: &[Var]) -> bool {
        vars.iter().any(|v| self.nodes[v.0].requires_grad)
    }

    /// Record a leaf; its `requires_grad` flag is taken from the tensor.
    pub fn leaf(&mut self, t: Tensor<T>) -> Var {
        let rg = t.requires_grad;
        self.push(t, Op::Leaf, rg)
    }

    /// Record a copy of a parameter tensor as a leaf.
    pub fn param(&mut self, t: &Tensor<T>) -> Var {
        let mut copy = Tensor::new(t.shape(), t.data().to_vec()).expect("valid tensor");
        copy.requires_grad = t.requires_grad;
        self.leaf(copy)
    }

    pub fn constant(&mut self, t: Tensor<T>) -> Var {
        self.push(t, Op::Leaf, false)
    }

    /// Add this tape's gradient for `v` into the tensor's own `grad` buffer.
    pub fn accumulate_into(&self, v: Var, target: &mut Tensor<T>) {
        if let Some(g) = self.grad(v) {
            match target.grad.as_mut() {
                Some(acc) => acc.iter_mut().zip(g).for_each(|(a, &b)| *a = *a + b),
                None => target.grad = Some(g.to_vec()),
            }
        }
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(b));
        let shape = ops::broadcast_shape("add", ta, tb)?;
        let data = ops::zip_with(ta.data(), tb.data(), numel(&shape), |x, y| x + y);
        let rg = self.any_grad(&[a, b]);
        Ok(self.push(Tensor::new(&shape, data)?, Op::Add(a, b), rg))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(b));
        let shape = ops::broadcast_shape("mul", ta, tb)?;
        let data = ops::zip_with(ta.data(), tb.data(), numel(&shape), |x, y| x * y);
        let rg = self.any_grad(&[a, b]);
        Ok(self.push(Tensor::new(&shape, data)?, Op::Mul(a, b), rg))
    }

    pub fn scale(&mut self, a: Var, k: T) -> Var {
        let t = self.value(a);
        let data = t.data().iter().map(|&v| v * k).collect();
        let value = Tensor::new(t.shape(), data).expect("same shape");
        let rg = self.any_grad(&[a]);
        self.push(value, Op::Scale(a, k), rg)
    }

    /// Sum of all elements as a rank-0 tensor.
    pub fn sum(&mut self, a: Var) -> Var {
        let s: T = self.value(a).data().iter().copied().sum();
        let rg = self.any_grad(&[a]);
        self.push(Tensor::scalar(s), Op::Sum(a), rg)
    }

    pub fn conv3d(&mut self, input: Var, weight: Var, bias: Option<Var>, geom: ConvGeometry) -> Result<Var> {
        let value = conv::conv3d_forward(self.value(input), self.value(weight), bias.map(|b| self.value(b)), geom)?;
        let mut operands = vec![input, weight];
        operands.extend(bias);
        let rg = self.any_grad(&operands);
        Ok(self.push(
            value,
            Op::Conv3d {
                input,
                weight,
                bias,
                geom,
            },
            rg,
        ))
    }

    pub fn conv_transpose3d(&mut self, input: Var, weight: Var, bias: Option<Var>, geom: ConvGeometry) -> Result<Var> {
        let value = conv::conv_transpose3d_forward(self.value(input), self.value(weight), bias.map(|b| self.value(b)), geom)?;
        let mut operands = vec![input, weight];
        operands.extend(bias);
        let rg = self.any_grad(&operands);
        Ok(self.push(
            value,
            Op::ConvTranspose3d {
                input,
                weight,
                bias,
                geom,
            },
            rg,
        ))
    }

    pub fn instance_norm(&mut self, input: Var, gamma: Var, beta: Var, eps: T) -> Result<Var> {
        let x = self.value(input);
        x.expect_rank("instance_norm", 5)?;
        let channels = x.shape()[1];
        if x.shape()[2..].iter().product::<usize>() == 0 {
            return Err(TensorError::Invalid {
                op: "instance_norm",
                msg: format!("no spatial voxels in shape {:?}", x.shape()),
            });
        }
        for p in [gamma, beta] {
            if self.shape(p) != [channels] {
                return Err(TensorError::ShapeMismatch {
                    op: "instance_norm",
                    left: x.shape().to_vec(),
                    right: self.shape(p).to_vec(),
                });
            }
        }
        let (out, saved) = ops::instance_norm(x, self.value(gamma).data(), self.value(beta).data(), eps);
        let value = Tensor::new(x.shape(), out)?;
        let rg = self.any_grad(&[input, gamma, beta]);
        Ok(self.push(
            value,
            Op::InstanceNorm {
                input,
                gamma,
                beta,
                saved,
            },
            rg,
        ))
    }

    pub fn leaky_relu(&mut self, input: Var, slope: T) -> Var {
        let x = self.value(input);
        let value = Tensor::new(x.shape(), ops::leaky_relu(x.data(), slope)).expect("same shape");
        let rg = self.any_grad(&[input]);
        self.push(value, Op::LeakyRelu(input, slope), rg)
    }

    pub fn softmax_channels(&mut self, input: Var) -> Result<Var> {
        let x = self.value(input);
        if x.rank() < 2 || x.shape()[1] == 0 {
            return Err(TensorError::Invalid {
                op: "softmax_channels",
                msg: format!("need a non-empty channel axis, got shape {:?}", x.shape()),
            });
        }
        let value = Tensor::new(x.shape(), ops::softmax_channels(x))?;
        let rg = self.any_grad(&[input]);
        Ok(self.push(value, Op::Softmax(input), rg))
    }

    pub fn concat_channels(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(b));
        let shape = ops::concat_shape(ta, tb)?;
        let value = Tensor::new(&shape, ops::concat_channels(ta, tb))?;
        let rg = self.any_grad(&[a, b]);
        Ok(self.push(value, Op::Concat(a, b), rg))
    }

    pub fn slice_channels(&mut self, input: Var, start: usize, len: usize) -> Result<Var> {
        let x = self.value(input);
        if x.rank() < 2 || start + len > x.shape()[1] {
            return Err(TensorError::Invalid {
                op: "slice_channels",
                msg: format!("channels {}..{} out of range for shape {:?}", start, start + len, x.shape()),
            });
        }
        let mut shape = x.shape().to_vec();
        shape[1] = len;
        let value = Tensor::new(&shape, ops::slice_channels(x.shape(), x.data(), start, len))?;
        let rg = self.any_grad(&[input]);
        Ok(self.push(value, Op::Slice { input, start, len }, rg))
    }

    /// Record an operation whose value was computed by the caller.
    pub fn custom(&mut self, inputs: &[Var], value: Tensor<T>, rule: impl Backward<T> + 'static) -> Var {
        let rg = self.any_grad(inputs);
        self.push(
            value,
            Op::Custom {
                inputs: inputs.to_vec(),
                rule: Box::new(rule),
            },
            rg,
        )
    }

    /// Propagate d(root)/d(node) to every node that requires a gradient.
    /// Gradients accumulate across calls until [`Tape::zero_grads`].
    pub fn backward(&mut self, root: Var) -> Result<()> {
        if self.nodes.is_empty() {
            return Err(TensorError::EmptyTape);
        }
        let rv = &self.nodes[root.0].value;
        if rv.len() != 1 {
            return Err(TensorError::NonScalarRoot(rv.shape().to_vec()));
        }
        let mut pending: Vec<Option<Vec<T>>> = (0..=root.0).map(|_| None).collect();
        pending[root.0] = Some(vec![T::one()]);
        self.last_order.clear();
        for id in (0..=root.0).rev() {
            let Some(g) = pending[id].take() else { continue };
            let node = &self.nodes[id];
            if !node.requires_grad {
                continue;
            }
            self.last_order.push(Var(id));
            let is_leaf = matches!(node.op, Op::Leaf);
            let contributions = self.local_grads(id, &g);
            if is_leaf || self.retain_intermediate {
                match self.grads[id].as_mut() {
                    Some(acc) => acc.iter_mut().zip(&g).for_each(|(a, &b)| *a = *a + b),
                    None => self.grads[id] = Some(g),
                }
            }
            for (var, grad) in contributions {
                if !self.nodes[var.0].requires_grad {
                    continue;
                }
                match pending[var.0].as_mut() {
                    Some(acc) => acc.iter_mut().zip(&grad).for_each(|(a, &b)| *a = *a + b),
                    None => pending[var.0] = Some(grad),
                }
            }
        }
        Ok(())
    }

    fn local_grads(&self, id: usize, g: &[T]) -> Vec<(Var, Vec<T>)> {
        let node = &self.nodes[id];
        let need = |v: Var| self.nodes[v.0].requires_grad;
        let mut out = Vec::new();
        match &node.op {
            Op::Leaf => {}
            Op::Add(a, b) => {
                for v in [*a, *b] {
                    if need(v) {
                        out.push((v, ops::unbroadcast(g.to_vec(), self.value(v).len())));
                    }
                }
            }
            Op::Mul(a, b) => {
                let (ta, tb) = (self.value(*a), self.value(*b));
                if need(*a) {
                    let d = ops::zip_with(g, tb.data(), g.len(), |x, y| x * y);
                    out.push((*a, ops::unbroadcast(d, ta.len())));
                }
                if need(*b) {
                    let d = ops::zip_with(g, ta.data(), g.len(), |x, y| x * y);
                    out.push((*b, ops::unbroadcast(d, tb.len())));
                }
            }
            Op::Scale(a, k) => out.push((*a, g.iter().map(|&v| v * *k).collect())),
            Op::Sum(a) => out.push((*a, vec![g[0]; self.value(*a).len()])),
            Op::Conv3d {
                input,
                weight,
                bias,
                geom,
            } => {
                let grads = conv::conv3d_backward(
                    self.value(*input),
                    self.value(*weight),
                    g,
                    node.value.shape(),
                    *geom,
                    [need(*input), need(*weight), bias.is_some_and(need)],
                );
                out.extend(grads.input.map(|d| (*input, d)));
                out.extend(grads.weight.map(|d| (*weight, d)));
                out.extend(bias.zip(grads.bias));
            }
            Op::ConvTranspose3d {
                input,
                weight,
                bias,
                geom,
            } => {
                let grads = conv::conv_transpose3d_backward(
                    self.value(*input),
                    self.value(*weight),
                    g,
                    node.value.shape(),
                    *geom,
                    [need(*input), need(*weight), bias.is_some_and(need)],
                );
                out.extend(grads.input.map(|d| (*input, d)));
                out.extend(grads.weight.map(|d| (*weight, d)));
                out.extend(bias.zip(grads.bias));
            }
            Op::InstanceNorm {
                input,
                gamma,
                beta,
                saved,
            } => {
                let grads = ops::instance_norm_backward(node.value.shape(), self.value(*gamma).data(), saved, g);
                out.push((*input, grads.input));
                out.push((*gamma, grads.gamma));
                out.push((*beta, grads.beta));
            }
            Op::LeakyRelu(x, slope) => {
                out.push((*x, ops::leaky_relu_backward(self.value(*x).data(), *slope, g)));
            }
            Op::Softmax(x) => {
                out.push((*x, ops::softmax_channels_backward(node.value.shape(), node.value.data(), g)));
            }
            Op::Concat(a, b) => {
                let ca = self.shape(*a)[1];
                let cb = self.shape(*b)[1];
                let shape = node.value.shape();
                out.push((*a, ops::slice_channels(shape, g, 0, ca)));
                out.push((*b, ops::slice_channels(shape, g, ca, cb)));
            }
            Op::Slice { input, start, len } => {
                out.push((*input, ops::unslice_channels(self.shape(*input), g, *start, *len)));
            }
            Op::Custom { inputs, rule } => {
                let values: Vec<&Tensor<T>> = inputs.iter().map(|v| self.value(*v)).collect();
                let needs: Vec<bool> = inputs.iter().map(|v| need(*v)).collect();
                let grads = rule.backward(&values, &node.value, g, &needs);
                for (v, d) in inputs.iter().zip(grads) {
                    if let Some(d) = d {
                        debug_assert_eq!(d.len(), self.value(*v).len());
                        out.push((*v, d));
                    }
                }
            }
        }
        out
    }
}
