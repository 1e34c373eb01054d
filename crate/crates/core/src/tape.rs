//! Reverse-mode automatic differentiation on a flat arena.
//!
//! Every operation appends a node holding the forward value and a rule that
//! knows how to push gradients back to its inputs. Inputs always have smaller
//! ids than outputs, so one reverse scan visits nodes in valid topological
//! order. Gradients accumulate additively, which handles tensors used by
//! multiple consumers.

use crate::error::{Error, Result};
use crate::kernels::{self, ConvGeom, SpatialAxis};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// Handle to a node on a [`GradTape`]. Only valid for the tape that issued it.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct TensorId(pub(crate) usize);

/// Whether batch normalization uses batch statistics (`Train`) or the stored
/// running statistics (`Eval`).
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    Train,
    Eval,
}

/// Pointwise nonlinearity selector.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Activation {
    Relu,
    LeakyRelu,
    Sigmoid,
}

pub const LEAKY_SLOPE: f64 = 0.01;

/// Refreshed running statistics produced by a train-mode batch norm. The
/// caller decides when to store them; the tape itself never mutates
/// parameters.
#[derive(Debug, Clone)]
pub struct BnUpdate<S: Scalar> {
    pub mean: Vec<S>,
    pub var: Vec<S>,
}

enum Rule<S: Scalar> {
    Leaf,
    Conv {
        x: TensorId,
        w: TensorId,
        b: TensorId,
        geom: ConvGeom,
    },
    ConvTranspose {
        x: TensorId,
        w: TensorId,
        b: TensorId,
        cin: usize,
        cout: usize,
        in_dims: [usize; 3],
    },
    Activation {
        x: TensorId,
        kind: Activation,
    },
    BatchNormTrain {
        x: TensorId,
        gamma: TensorId,
        beta: TensorId,
        mean: Vec<S>,
        inv_std: Vec<S>,
    },
    BatchNormEval {
        x: TensorId,
        gamma: TensorId,
        beta: TensorId,
        running_mean: Vec<S>,
        running_var: Vec<S>,
    },
    SoftmaxChannels {
        x: TensorId,
    },
    PoolMean {
        x: TensorId,
        keep: SpatialAxis,
    },
    MaxPool {
        x: TensorId,
        argmax: Vec<usize>,
    },
    Broadcast {
        x: TensorId,
        from: [usize; 5],
        to: [usize; 5],
    },
    ConcatChannels {
        xs: Vec<(TensorId, usize)>,
    },
    SliceChannel {
        x: TensorId,
        channel: usize,
    },
    Add {
        a: TensorId,
        b: TensorId,
    },
    Sub {
        a: TensorId,
        b: TensorId,
    },
    Mul {
        a: TensorId,
        b: TensorId,
    },
    Div {
        a: TensorId,
        b: TensorId,
    },
    AddScalar {
        x: TensorId,
    },
    MulScalar {
        x: TensorId,
        factor: S,
    },
    SumAll {
        x: TensorId,
    },
}

struct Node<S: Scalar> {
    value: Tensor<S>,
    rule: Rule<S>,
}

impl<S: Scalar> Node<S> {
    fn needs_grad(&self) -> bool {
        self.value.requires_grad
    }
}

/// Arena of forward values plus the recipe to differentiate them.
pub struct GradTape<S: Scalar = f32> {
    nodes: Vec<Node<S>>,
    consumed: bool,
}

impl<S: Scalar> Default for GradTape<S> {
    fn default() -> Self {
        Self::new()
    }
}

impl<S: Scalar> GradTape<S> {
    pub fn new() -> Self {
        GradTape { nodes: Vec::new(), consumed: false }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Registers an input tensor. Set `requires_grad` on the tensor before
    /// registering to receive its gradient after [`GradTape::backward`].
    pub fn leaf(&mut self, t: Tensor<S>) -> TensorId {
        self.push(t, Rule::Leaf)
    }

    pub fn value(&self, id: TensorId) -> &Tensor<S> {
        &self.nodes[id.0].value
    }

    /// Gradient of the node, if one was computed by `backward`.
    pub fn grad(&self, id: TensorId) -> Option<&[S]> {
        self.nodes[id.0].value.grad.as_deref()
    }

    fn push(&mut self, value: Tensor<S>, rule: Rule<S>) -> TensorId {
        let id = TensorId(self.nodes.len());
        self.nodes.push(Node { value, rule });
        id
    }

    fn push_op(&mut self, mut value: Tensor<S>, rule: Rule<S>, needs: bool) -> TensorId {
        value.requires_grad = needs;
        self.push(value, rule)
    }

    fn check_open(&self, op: &'static str) -> Result<()> {
        if self.consumed {
            return Err(Error::invalid(op, "tape already consumed by backward"));
        }
        Ok(())
    }

    fn needs(&self, id: TensorId) -> bool {
        self.nodes[id.0].needs_grad()
    }

    fn dims5_of(&self, op: &'static str, id: TensorId) -> Result<[usize; 5]> {
        self.nodes[id.0].value.dims5().map_err(|_| {
            Error::shape(
                op,
                format!("expected a rank-5 tensor, got shape {:?}", self.nodes[id.0].value.shape()),
            )
        })
    }

    // -- operations --------------------------------------------------------

    /// 3-d convolution with explicit stride and zero padding.
    /// `w` has shape `[cout, cin, kd, kh, kw]`, `b` shape `[cout]`.
    pub fn conv(
        &mut self,
        x: TensorId,
        w: TensorId,
        b: TensorId,
        stride: [usize; 3],
        padding: [usize; 3],
    ) -> Result<TensorId> {
        self.check_open("conv")?;
        let xs = self.dims5_of("conv", x)?;
        let ws = self.dims5_of("conv", w)?;
        let bs = self.nodes[b.0].value.shape().to_vec();
        if ws[1] != xs[1] {
            return Err(Error::shape(
                "conv",
                format!("weight expects {} input channels, tensor has {}", ws[1], xs[1]),
            ));
        }
        if bs != [ws[0]] {
            return Err(Error::shape(
                "conv",
                format!("bias shape {:?} does not match {} output channels", bs, ws[0]),
            ));
        }
        let geom = ConvGeom::new(
            xs[0],
            xs[1],
            ws[0],
            [xs[2], xs[3], xs[4]],
            [ws[2], ws[3], ws[4]],
            stride,
            padding,
        )?;
        let y = kernels::conv_forward(
            self.nodes[x.0].value.data(),
            self.nodes[w.0].value.data(),
            self.nodes[b.0].value.data(),
            &geom,
        );
        let [od, oh, ow] = geom.out_dims;
        let out = Tensor::from_vec(&[xs[0], ws[0], od, oh, ow], y)?;
        let needs = self.needs(x) || self.needs(w) || self.needs(b);
        Ok(self.push_op(out, Rule::Conv { x, w, b, geom }, needs))
    }

    /// Transposed convolution with kernel and stride 1x2x2: doubles H and W.
    /// `w` has shape `[cin, cout, 1, 2, 2]`, `b` shape `[cout]`.
    pub fn upsample_transposed_inplane(&mut self, x: TensorId, w: TensorId, b: TensorId) -> Result<TensorId> {
        self.check_open("upsample_transposed_inplane")?;
        let xs = self.dims5_of("upsample_transposed_inplane", x)?;
        let ws = self.dims5_of("upsample_transposed_inplane", w)?;
        if ws[0] != xs[1] || ws[2] != 1 || ws[3] != 2 || ws[4] != 2 {
            return Err(Error::shape(
                "upsample_transposed_inplane",
                format!("weight shape {:?} incompatible with input channels {} (want [cin, cout, 1, 2, 2])", ws, xs[1]),
            ));
        }
        let (cin, cout) = (ws[0], ws[1]);
        if self.nodes[b.0].value.shape() != [cout] {
            return Err(Error::shape(
                "upsample_transposed_inplane",
                format!("bias shape {:?} does not match {} output channels", self.nodes[b.0].value.shape(), cout),
            ));
        }
        let in_dims = [xs[2], xs[3], xs[4]];
        let y = kernels::conv_transpose_inplane_forward(
            self.nodes[x.0].value.data(),
            self.nodes[w.0].value.data(),
            self.nodes[b.0].value.data(),
            xs[0],
            cin,
            cout,
            in_dims,
        );
        let out = Tensor::from_vec(&[xs[0], cout, xs[2], 2 * xs[3], 2 * xs[4]], y)?;
        let needs = self.needs(x) || self.needs(w) || self.needs(b);
        Ok(self.push_op(out, Rule::ConvTranspose { x, w, b, cin, cout, in_dims }, needs))
    }

    pub fn activation(&mut self, x: TensorId, kind: Activation) -> Result<TensorId> {
        self.check_open("activation")?;
        let xv = &self.nodes[x.0].value;
        let slope = S::from_f64(LEAKY_SLOPE);
        let data: Vec<S> = match kind {
            Activation::Relu => xv.data().iter().map(|&v| if v > S::ZERO { v } else { S::ZERO }).collect(),
            Activation::LeakyRelu => xv
                .data()
                .iter()
                .map(|&v| if v > S::ZERO { v } else { v * slope })
                .collect(),
            Activation::Sigmoid => xv.data().iter().map(|&v| sigmoid(v)).collect(),
        };
        let out = Tensor::from_vec(xv.shape(), data)?;
        let needs = self.needs(x);
        Ok(self.push_op(out, Rule::Activation { x, kind }, needs))
    }

    /// Batch normalization over `(batch, depth, height, width)` per channel.
    /// Running statistics live outside the tape; train mode returns the
    /// blended update for the caller to apply after the step.
    pub fn batch_norm(
        &mut self,
        x: TensorId,
        gamma: TensorId,
        beta: TensorId,
        running_mean: &Tensor<S>,
        running_var: &Tensor<S>,
        mode: Mode,
    ) -> Result<(TensorId, Option<BnUpdate<S>>)> {
        self.check_open("batch_norm")?;
        let xs = self.dims5_of("batch_norm", x)?;
        let c = xs[1];
        for (name, t) in [
            ("gamma", &self.nodes[gamma.0].value),
            ("beta", &self.nodes[beta.0].value),
            ("running_mean", running_mean),
            ("running_var", running_var),
        ] {
            if t.shape() != [c] {
                return Err(Error::shape(
                    "batch_norm",
                    format!("{} shape {:?} does not match {} channels", name, t.shape(), c),
                ));
            }
        }
        let needs = self.needs(x) || self.needs(gamma) || self.needs(beta);
        match mode {
            Mode::Train => {
                let n = xs[0] * xs[2] * xs[3] * xs[4];
                if n < 2 {
                    return Err(Error::degenerate(
                        "batch_norm",
                        format!("needs at least 2 values per channel to normalize, got {}", n),
                    ));
                }
                let fwd = kernels::bn_forward_train(
                    self.nodes[x.0].value.data(),
                    xs,
                    self.nodes[gamma.0].value.data(),
                    self.nodes[beta.0].value.data(),
                );
                // Running update follows the usual convention: blend with the
                // unbiased batch variance, normalize with the biased one.
                let unbias = n as f64 / (n as f64 - 1.0);
                let mut new_mean = Vec::with_capacity(c);
                let mut new_var = Vec::with_capacity(c);
                for ci in 0..c {
                    let rm = running_mean.data()[ci].as_f64();
                    let rv = running_var.data()[ci].as_f64();
                    new_mean.push(S::from_f64(
                        (1.0 - kernels::BN_MOMENTUM) * rm + kernels::BN_MOMENTUM * fwd.mean[ci].as_f64(),
                    ));
                    new_var.push(S::from_f64(
                        (1.0 - kernels::BN_MOMENTUM) * rv
                            + kernels::BN_MOMENTUM * fwd.var[ci].as_f64() * unbias,
                    ));
                }
                let out = Tensor::from_vec(&xs, fwd.y)?;
                let id = self.push_op(
                    out,
                    Rule::BatchNormTrain { x, gamma, beta, mean: fwd.mean, inv_std: fwd.inv_std },
                    needs,
                );
                Ok((id, Some(BnUpdate { mean: new_mean, var: new_var })))
            }
            Mode::Eval => {
                let y = kernels::bn_forward_eval(
                    self.nodes[x.0].value.data(),
                    xs,
                    self.nodes[gamma.0].value.data(),
                    self.nodes[beta.0].value.data(),
                    running_mean.data(),
                    running_var.data(),
                );
                let out = Tensor::from_vec(&xs, y)?;
                let id = self.push_op(
                    out,
                    Rule::BatchNormEval {
                        x,
                        gamma,
                        beta,
                        running_mean: running_mean.data().to_vec(),
                        running_var: running_var.data().to_vec(),
                    },
                    needs,
                );
                Ok((id, None))
            }
        }
    }

    pub fn softmax_channels(&mut self, x: TensorId) -> Result<TensorId> {
        self.check_open("softmax_channels")?;
        let xs = self.dims5_of("softmax_channels", x)?;
        let y = kernels::softmax_channels_forward(self.nodes[x.0].value.data(), xs);
        let out = Tensor::from_vec(&xs, y)?;
        let needs = self.needs(x);
        Ok(self.push_op(out, Rule::SoftmaxChannels { x }, needs))
    }

    /// Mean over the two spatial axes other than `keep`.
    pub fn pool_mean_axes(&mut self, x: TensorId, keep: SpatialAxis) -> Result<TensorId> {
        self.check_open("pool_mean_axes")?;
        let xs = self.dims5_of("pool_mean_axes", x)?;
        let (y, out_shape) = kernels::pool_mean_forward(self.nodes[x.0].value.data(), xs, keep);
        let out = Tensor::from_vec(&out_shape, y)?;
        let needs = self.needs(x);
        Ok(self.push_op(out, Rule::PoolMean { x, keep }, needs))
    }

    /// 1x2x2 max pooling; requires even H and W.
    pub fn max_pool_inplane(&mut self, x: TensorId) -> Result<TensorId> {
        self.check_open("max_pool_inplane")?;
        let xs = self.dims5_of("max_pool_inplane", x)?;
        if xs[3] % 2 != 0 || xs[4] % 2 != 0 {
            return Err(Error::shape(
                "max_pool_inplane",
                format!("in-plane dims ({}, {}) must be even", xs[3], xs[4]),
            ));
        }
        let (y, argmax) = kernels::max_pool_inplane_forward(self.nodes[x.0].value.data(), xs);
        let out = Tensor::from_vec(&[xs[0], xs[1], xs[2], xs[3] / 2, xs[4] / 2], y)?;
        let needs = self.needs(x);
        Ok(self.push_op(out, Rule::MaxPool { x, argmax }, needs))
    }

    /// Repeats size-1 axes up to `target`.
    pub fn broadcast_to(&mut self, x: TensorId, target: &[usize]) -> Result<TensorId> {
        self.check_open("broadcast_to")?;
        let from = self.dims5_of("broadcast_to", x)?;
        if target.len() != 5 {
            return Err(Error::shape(
                "broadcast_to",
                format!("target shape {:?} must have rank 5", target),
            ));
        }
        let mut to = [0usize; 5];
        to.copy_from_slice(target);
        for a in 0..5 {
            if from[a] != to[a] && from[a] != 1 {
                return Err(Error::shape(
                    "broadcast_to",
                    format!("axis {}: cannot broadcast {} to {}", a, from[a], to[a]),
                ));
            }
        }
        let y = kernels::broadcast_forward(self.nodes[x.0].value.data(), from, to);
        let out = Tensor::from_vec(&to, y)?;
        let needs = self.needs(x);
        Ok(self.push_op(out, Rule::Broadcast { x, from, to }, needs))
    }

    /// Concatenates along the channel axis.
    pub fn concat_channels(&mut self, xs: &[TensorId]) -> Result<TensorId> {
        self.check_open("concat_channels")?;
        if xs.is_empty() {
            return Err(Error::invalid("concat_channels", "needs at least one input"));
        }
        let first = self.dims5_of("concat_channels", xs[0])?;
        let mut channels = Vec::with_capacity(xs.len());
        let mut total_c = 0usize;
        for &id in xs {
            let s = self.dims5_of("concat_channels", id)?;
            if [s[0], s[2], s[3], s[4]] != [first[0], first[2], first[3], first[4]] {
                return Err(Error::shape(
                    "concat_channels",
                    format!("input shape {:?} does not match {:?} outside the channel axis", s, first),
                ));
            }
            channels.push((id, s[1]));
            total_c += s[1];
        }
        let [b, _, d, h, w] = first;
        let spatial = d * h * w;
        let mut y = vec![S::ZERO; b * total_c * spatial];
        for bi in 0..b {
            let mut co = 0usize;
            for &(id, c) in &channels {
                let src = self.nodes[id.0].value.data();
                let src_blk = &src[bi * c * spatial..(bi + 1) * c * spatial];
                let dst = &mut y[(bi * total_c + co) * spatial..(bi * total_c + co + c) * spatial];
                dst.copy_from_slice(src_blk);
                co += c;
            }
        }
        let out = Tensor::from_vec(&[b, total_c, d, h, w], y)?;
        let needs = channels.iter().any(|&(id, _)| self.needs(id));
        Ok(self.push_op(out, Rule::ConcatChannels { xs: channels }, needs))
    }

    /// Extracts channel `c` as a `[b, 1, d, h, w]` tensor.
    pub fn slice_channel(&mut self, x: TensorId, channel: usize) -> Result<TensorId> {
        self.check_open("slice_channel")?;
        let xs = self.dims5_of("slice_channel", x)?;
        if channel >= xs[1] {
            return Err(Error::invalid(
                "slice_channel",
                format!("channel {} out of range for {} channels", channel, xs[1]),
            ));
        }
        let [b, c, d, h, w] = xs;
        let spatial = d * h * w;
        let src = self.nodes[x.0].value.data();
        let mut y = vec![S::ZERO; b * spatial];
        for bi in 0..b {
            y[bi * spatial..(bi + 1) * spatial]
                .copy_from_slice(&src[(bi * c + channel) * spatial..(bi * c + channel + 1) * spatial]);
        }
        let out = Tensor::from_vec(&[b, 1, d, h, w], y)?;
        let needs = self.needs(x);
        Ok(self.push_op(out, Rule::SliceChannel { x, channel }, needs))
    }

    fn binary_elementwise(
        &mut self,
        op: &'static str,
        a: TensorId,
        b: TensorId,
        f: impl Fn(S, S) -> S,
        rule: Rule<S>,
    ) -> Result<TensorId> {
        self.check_open(op)?;
        let (av, bv) = (&self.nodes[a.0].value, &self.nodes[b.0].value);
        if av.shape() != bv.shape() {
            return Err(Error::shape(
                op,
                format!("operand shapes {:?} and {:?} differ", av.shape(), bv.shape()),
            ));
        }
        let data: Vec<S> = av.data().iter().zip(bv.data()).map(|(&x, &y)| f(x, y)).collect();
        let out = Tensor::from_vec(av.shape(), data)?;
        let needs = self.needs(a) || self.needs(b);
        Ok(self.push_op(out, rule, needs))
    }

    pub fn add(&mut self, a: TensorId, b: TensorId) -> Result<TensorId> {
        self.binary_elementwise("add", a, b, |x, y| x + y, Rule::Add { a, b })
    }

    pub fn sub(&mut self, a: TensorId, b: TensorId) -> Result<TensorId> {
        self.binary_elementwise("sub", a, b, |x, y| x - y, Rule::Sub { a, b })
    }

    pub fn mul(&mut self, a: TensorId, b: TensorId) -> Result<TensorId> {
        self.binary_elementwise("mul", a, b, |x, y| x * y, Rule::Mul { a, b })
    }

    pub fn div(&mut self, a: TensorId, b: TensorId) -> Result<TensorId> {
        self.binary_elementwise("div", a, b, |x, y| x / y, Rule::Div { a, b })
    }

    pub fn add_scalar(&mut self, x: TensorId, v: S) -> Result<TensorId> {
        self.check_open("add_scalar")?;
        let xv = &self.nodes[x.0].value;
        let data: Vec<S> = xv.data().iter().map(|&e| e + v).collect();
        let out = Tensor::from_vec(xv.shape(), data)?;
        let needs = self.needs(x);
        Ok(self.push_op(out, Rule::AddScalar { x }, needs))
    }

    pub fn mul_scalar(&mut self, x: TensorId, v: S) -> Result<TensorId> {
        self.check_open("mul_scalar")?;
        let xv = &self.nodes[x.0].value;
        let data: Vec<S> = xv.data().iter().map(|&e| e * v).collect();
        let out = Tensor::from_vec(xv.shape(), data)?;
        let needs = self.needs(x);
        Ok(self.push_op(out, Rule::MulScalar { x, factor: v }, needs))
    }

    /// Sum of all elements, as a scalar tensor of shape `[1]`.
    pub fn sum_all(&mut self, x: TensorId) -> Result<TensorId> {
        self.check_open("sum_all")?;
        let acc: f64 = self.nodes[x.0].value.data().iter().map(|v| v.as_f64()).sum();
        let out = Tensor::from_vec(&[1], vec![S::from_f64(acc)])?;
        let needs = self.needs(x);
        Ok(self.push_op(out, Rule::SumAll { x }, needs))
    }

    // -- backward ----------------------------------------------------------

    /// Seeds `d(loss)/d(loss) = 1` and propagates gradients to every node
    /// with `requires_grad`. The tape accepts no further operations after.
    pub fn backward(&mut self, loss: TensorId) -> Result<()> {
        self.check_open("backward")?;
        self.consumed = true;
        let li = loss.0;
        if !self.nodes[li].value.is_scalar() {
            return Err(Error::shape(
                "backward",
                format!("loss must be a scalar, got shape {:?}", self.nodes[li].value.shape()),
            ));
        }
        {
            let buf = self.nodes[li].value.grad_buffer();
            buf[0] = S::ONE;
        }
        for i in (0..=li).rev() {
            if !self.nodes[i].needs_grad() || self.nodes[i].value.grad.is_none() {
                continue;
            }
            let (head, tail) = self.nodes.split_at_mut(i);
            let node = &tail[0];
            let dy = node.value.grad.as_deref().expect("checked above");
            propagate(head, node, dy)?;
        }
        Ok(())
    }
}

fn sigmoid<S: Scalar>(v: S) -> S {
    // Split on sign so the exponential never overflows.
    let x = v.as_f64();
    let s = if x >= 0.0 { 1.0 / (1.0 + (-x).exp()) } else { let e = x.exp(); e / (1.0 + e) };
    S::from_f64(s)
}

fn accumulate<S: Scalar>(nodes: &mut [Node<S>], id: TensorId, contrib: &[S]) {
    let buf = nodes[id.0].value.grad_buffer();
    debug_assert_eq!(buf.len(), contrib.len());
    for (g, c) in buf.iter_mut().zip(contrib) {
        *g = *g + *c;
    }
}

fn node_needs<S: Scalar>(head: &[Node<S>], id: TensorId) -> bool {
    head[id.0].needs_grad()
}

fn propagate<S: Scalar>(head: &mut [Node<S>], node: &Node<S>, dy: &[S]) -> Result<()> {
    match &node.rule {
        Rule::Leaf => {}
        Rule::Conv { x, w, b, geom } => {
            let (dx, dw, db) = {
                let xv = head[x.0].value.data();
                let wv = head[w.0].value.data();
                kernels::conv_backward(xv, wv, dy, geom, node_needs(head, *x), node_needs(head, *w), node_needs(head, *b))
            };
            if let Some(dx) = dx {
                accumulate(head, *x, &dx);
            }
            if let Some(dw) = dw {
                accumulate(head, *w, &dw);
            }
            if let Some(db) = db {
                accumulate(head, *b, &db);
            }
        }
        Rule::ConvTranspose { x, w, b, cin, cout, in_dims } => {
            let batch = head[x.0].value.shape()[0];
            let (dx, dw, db) = {
                let xv = head[x.0].value.data();
                let wv = head[w.0].value.data();
                kernels::conv_transpose_inplane_backward(
                    xv,
                    wv,
                    dy,
                    batch,
                    *cin,
                    *cout,
                    *in_dims,
                    node_needs(head, *x),
                    node_needs(head, *w),
                    node_needs(head, *b),
                )
            };
            if let Some(dx) = dx {
                accumulate(head, *x, &dx);
            }
            if let Some(dw) = dw {
                accumulate(head, *w, &dw);
            }
            if let Some(db) = db {
                accumulate(head, *b, &db);
            }
        }
        Rule::Activation { x, kind } => {
            if !node_needs(head, *x) {
                return Ok(());
            }
            // All three derivatives are recoverable from the output value.
            let y = node.value.data();
            let slope = S::from_f64(LEAKY_SLOPE);
            let dx: Vec<S> = match kind {
                Activation::Relu => y
                    .iter()
                    .zip(dy)
                    .map(|(&yv, &g)| if yv > S::ZERO { g } else { S::ZERO })
                    .collect(),
                Activation::LeakyRelu => y
                    .iter()
                    .zip(dy)
                    .map(|(&yv, &g)| if yv > S::ZERO { g } else { g * slope })
                    .collect(),
                Activation::Sigmoid => y.iter().zip(dy).map(|(&yv, &g)| g * yv * (S::ONE - yv)).collect(),
            };
            accumulate(head, *x, &dx);
        }
        Rule::BatchNormTrain { x, gamma, beta, mean, inv_std } => {
            let shape = head[x.0].value.dims5()?;
            let (dx, dgamma, dbeta) = {
                let xv = head[x.0].value.data();
                let gv = head[gamma.0].value.data();
                kernels::bn_backward_train(xv, shape, gv, dy, mean, inv_std)
            };
            if node_needs(head, *x) {
                accumulate(head, *x, &dx);
            }
            if node_needs(head, *gamma) {
                accumulate(head, *gamma, &dgamma);
            }
            if node_needs(head, *beta) {
                accumulate(head, *beta, &dbeta);
            }
        }
        Rule::BatchNormEval { x, gamma, beta, running_mean, running_var } => {
            let shape = head[x.0].value.dims5()?;
            let (dx, dgamma, dbeta) = {
                let xv = head[x.0].value.data();
                let gv = head[gamma.0].value.data();
                kernels::bn_backward_eval(xv, shape, gv, dy, running_mean, running_var)
            };
            if node_needs(head, *x) {
                accumulate(head, *x, &dx);
            }
            if node_needs(head, *gamma) {
                accumulate(head, *gamma, &dgamma);
            }
            if node_needs(head, *beta) {
                accumulate(head, *beta, &dbeta);
            }
        }
        Rule::SoftmaxChannels { x } => {
            if !node_needs(head, *x) {
                return Ok(());
            }
            let shape = node.value.dims5()?;
            let dx = kernels::softmax_channels_backward(node.value.data(), dy, shape);
            accumulate(head, *x, &dx);
        }
        Rule::PoolMean { x, keep } => {
            if !node_needs(head, *x) {
                return Ok(());
            }
            let shape = head[x.0].value.dims5()?;
            let dx = kernels::pool_mean_backward(dy, shape, *keep);
            accumulate(head, *x, &dx);
        }
        Rule::MaxPool { x, argmax } => {
            if !node_needs(head, *x) {
                return Ok(());
            }
            let in_len = head[x.0].value.numel();
            let dx = kernels::max_pool_inplane_backward(dy, argmax, in_len);
            accumulate(head, *x, &dx);
        }
        Rule::Broadcast { x, from, to } => {
            if !node_needs(head, *x) {
                return Ok(());
            }
            let dx = kernels::broadcast_backward(dy, *from, *to);
            accumulate(head, *x, &dx);
        }
        Rule::ConcatChannels { xs } => {
            let out_shape = node.value.dims5()?;
            let [b, total_c, d, h, w] = out_shape;
            let spatial = d * h * w;
            let mut co = 0usize;
            for &(id, c) in xs {
                if node_needs(head, id) {
                    let buf = head[id.0].value.grad_buffer();
                    for bi in 0..b {
                        let src = &dy[(bi * total_c + co) * spatial..(bi * total_c + co + c) * spatial];
                        let dst = &mut buf[bi * c * spatial..(bi + 1) * c * spatial];
                        for (g, v) in dst.iter_mut().zip(src) {
                            *g = *g + *v;
                        }
                    }
                }
                co += c;
            }
        }
        Rule::SliceChannel { x, channel } => {
            if !node_needs(head, *x) {
                return Ok(());
            }
            let xs = head[x.0].value.dims5()?;
            let [b, c, d, h, w] = xs;
            let spatial = d * h * w;
            let buf = head[x.0].value.grad_buffer();
            for bi in 0..b {
                let dst = &mut buf[(bi * c + channel) * spatial..(bi * c + channel + 1) * spatial];
                let src = &dy[bi * spatial..(bi + 1) * spatial];
                for (g, v) in dst.iter_mut().zip(src) {
                    *g = *g + *v;
                }
            }
        }
        Rule::Add { a, b } => {
            if node_needs(head, *a) {
                accumulate(head, *a, dy);
            }
            if node_needs(head, *b) {
                accumulate(head, *b, dy);
            }
        }
        Rule::Sub { a, b } => {
            if node_needs(head, *a) {
                accumulate(head, *a, dy);
            }
            if node_needs(head, *b) {
                let neg: Vec<S> = dy.iter().map(|&v| S::ZERO - v).collect();
                accumulate(head, *b, &neg);
            }
        }
        Rule::Mul { a, b } => {
            if node_needs(head, *a) {
                let da: Vec<S> =
                    dy.iter().zip(head[b.0].value.data()).map(|(&g, &bv)| g * bv).collect();
                accumulate(head, *a, &da);
            }
            if node_needs(head, *b) {
                let db: Vec<S> =
                    dy.iter().zip(head[a.0].value.data()).map(|(&g, &av)| g * av).collect();
                accumulate(head, *b, &db);
            }
        }
        Rule::Div { a, b } => {
            // y = a / b: da = dy / b, db = -dy * y / b.
            if node_needs(head, *a) {
                let da: Vec<S> =
                    dy.iter().zip(head[b.0].value.data()).map(|(&g, &bv)| g / bv).collect();
                accumulate(head, *a, &da);
            }
            if node_needs(head, *b) {
                let y = node.value.data();
                let db: Vec<S> = dy
                    .iter()
                    .zip(y)
                    .zip(head[b.0].value.data())
                    .map(|((&g, &yv), &bv)| S::ZERO - g * yv / bv)
                    .collect();
                accumulate(head, *b, &db);
            }
        }
        Rule::AddScalar { x } => {
            if node_needs(head, *x) {
                accumulate(head, *x, dy);
            }
        }
        Rule::MulScalar { x, factor } => {
            if node_needs(head, *x) {
                let dx: Vec<S> = dy.iter().map(|&g| g * *factor).collect();
                accumulate(head, *x, &dx);
            }
        }
        Rule::SumAll { x } => {
            if node_needs(head, *x) {
                let g = dy[0];
                let buf = head[x.0].value.grad_buffer();
                for v in buf.iter_mut() {
                    *v = *v + g;
                }
            }
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn leaf_grad(t: &mut GradTape<f64>, shape: &[usize], data: Vec<f64>) -> TensorId {
        t.leaf(Tensor::from_vec(shape, data).unwrap().with_grad())
    }

    #[test]
    fn sum_of_product_gradients() {
        // loss = sum(a * b): d loss/d a = b, d loss/d b = a.
        let mut t: GradTape<f64> = GradTape::new();
        let a = leaf_grad(&mut t, &[3], vec![1.0, 2.0, 3.0]);
        let b = leaf_grad(&mut t, &[3], vec![4.0, 5.0, 6.0]);
        let p = t.mul(a, b).unwrap();
        let loss = t.sum_all(p).unwrap();
        assert_eq!(t.value(loss).item().unwrap(), 32.0);
        t.backward(loss).unwrap();
        assert_eq!(t.grad(a).unwrap(), &[4.0, 5.0, 6.0]);
        assert_eq!(t.grad(b).unwrap(), &[1.0, 2.0, 3.0]);
    }

    #[test]
    fn reused_tensor_accumulates_both_paths() {
        // loss = sum(x + x * x): gradient 1 + 2x.
        let mut t: GradTape<f64> = GradTape::new();
        let x = leaf_grad(&mut t, &[2], vec![3.0, -1.0]);
        let sq = t.mul(x, x).unwrap();
        let s = t.add(x, sq).unwrap();
        let loss = t.sum_all(s).unwrap();
        t.backward(loss).unwrap();
        assert_eq!(t.grad(x).unwrap(), &[7.0, -1.0]);
    }

    #[test]
    fn gradient_skips_frozen_leaves() {
        let mut t: GradTape<f64> = GradTape::new();
        let a = t.leaf(Tensor::from_vec(&[2], vec![1.0, 2.0]).unwrap());
        let b = leaf_grad(&mut t, &[2], vec![3.0, 4.0]);
        let p = t.mul(a, b).unwrap();
        let loss = t.sum_all(p).unwrap();
        t.backward(loss).unwrap();
        assert!(t.grad(a).is_none());
        assert_eq!(t.grad(b).unwrap(), &[1.0, 2.0]);
    }

    #[test]
    fn backward_rejects_vector_loss() {
        let mut t: GradTape<f64> = GradTape::new();
        let a = leaf_grad(&mut t, &[2], vec![1.0, 2.0]);
        assert!(t.backward(a).is_err());
    }

    #[test]
    fn tape_rejects_ops_after_backward() {
        let mut t: GradTape<f64> = GradTape::new();
        let a = leaf_grad(&mut t, &[1], vec![2.0]);
        let loss = t.sum_all(a).unwrap();
        t.backward(loss).unwrap();
        assert!(t.add(a, a).is_err());
        assert!(t.backward(loss).is_err());
    }

    #[test]
    fn concat_then_slice_round_trips_gradient() {
        let mut t: GradTape<f64> = GradTape::new();
        let a = leaf_grad(&mut t, &[1, 1, 1, 1, 2], vec![1.0, 2.0]);
        let b = leaf_grad(&mut t, &[1, 1, 1, 1, 2], vec![3.0, 4.0]);
        let cat = t.concat_channels(&[a, b]).unwrap();
        assert_eq!(t.value(cat).shape(), &[1, 2, 1, 1, 2]);
        let s1 = t.slice_channel(cat, 1).unwrap();
        let three = t.mul_scalar(s1, 3.0).unwrap();
        let loss = t.sum_all(three).unwrap();
        t.backward(loss).unwrap();
        assert_eq!(t.grad(a).unwrap(), &[0.0, 0.0]);
        assert_eq!(t.grad(b).unwrap(), &[3.0, 3.0]);
    }

    #[test]
    fn batch_norm_train_reports_running_update() {
        let mut t: GradTape<f32> = GradTape::new();
        let x = t.leaf(Tensor::from_vec(&[2, 1, 1, 1, 1], vec![1.0, 3.0]).unwrap());
        let g = t.leaf(Tensor::from_vec(&[1], vec![1.0]).unwrap());
        let b = t.leaf(Tensor::from_vec(&[1], vec![0.0]).unwrap());
        let rm = Tensor::from_vec(&[1], vec![0.0]).unwrap();
        let rv = Tensor::from_vec(&[1], vec![1.0]).unwrap();
        let (y, upd) = t.batch_norm(x, g, b, &rm, &rv, Mode::Train).unwrap();
        let yv = t.value(y).data();
        assert!((yv[0] + 1.0).abs() < 1e-4 && (yv[1] - 1.0).abs() < 1e-4);
        let upd = upd.unwrap();
        // mean: 0.9 * 0 + 0.1 * 2 = 0.2; var: 0.9 * 1 + 0.1 * (1 * 2/1) = 1.1.
        assert!((upd.mean[0] - 0.2).abs() < 1e-6);
        assert!((upd.var[0] - 1.1).abs() < 1e-6);
    }

    #[test]
    fn batch_norm_eval_emits_no_update() {
        let mut t: GradTape<f32> = GradTape::new();
        let x = t.leaf(Tensor::from_vec(&[1, 1, 1, 1, 2], vec![0.5, -0.5]).unwrap());
        let g = t.leaf(Tensor::from_vec(&[1], vec![2.0]).unwrap());
        let b = t.leaf(Tensor::from_vec(&[1], vec![1.0]).unwrap());
        let rm = Tensor::from_vec(&[1], vec![0.0]).unwrap();
        let rv = Tensor::from_vec(&[1], vec![1.0]).unwrap();
        let (y, upd) = t.batch_norm(x, g, b, &rm, &rv, Mode::Eval).unwrap();
        assert!(upd.is_none());
        let yv = t.value(y).data();
        assert!((yv[0] - 2.0).abs() < 1e-4 && (yv[1] - 0.0).abs() < 1e-4);
    }

    #[test]
    fn conv_validates_channel_agreement() {
        let mut t: GradTape<f32> = GradTape::new();
        let x = t.leaf(Tensor::zeros(&[1, 3, 2, 4, 4]));
        let w = t.leaf(Tensor::zeros(&[4, 2, 1, 3, 3]));
        let b = t.leaf(Tensor::zeros(&[4]));
        let err = t.conv(x, w, b, [1, 1, 1], [0, 1, 1]).unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("conv"), "{}", msg);
    }

    #[test]
    fn max_pool_requires_even_inplane_dims() {
        let mut t: GradTape<f32> = GradTape::new();
        let x = t.leaf(Tensor::zeros(&[1, 1, 1, 3, 4]));
        assert!(t.max_pool_inplane(x).is_err());
    }
}
