use super::kernels::{self, gemm, ConvGeom};
use super::{strides, Precision, Tensor};
use crate::{Error, Result};

/// Batchnorm variance regulariser.
pub const BN_EPS: f64 = 1e-5;
/// Weight of the newest batch in the running-statistics update.
pub const BN_MOMENTUM: f64 = 0.1;

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum BnMode {
    Train,
    Eval,
}

/// Which elements share one set of statistics.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum BnLayout {
    /// `[B, C, ...]`: one group per channel, reduced over batch and all trailing axes.
    PerChannel,
    /// `[B, C, T, V]`: one group per (channel, joint), reduced over batch and time.
    PerChannelJoint,
}

/// Running mean/variance of one batchnorm layer. Not part of the tape.
#[derive(Clone, Debug, PartialEq)]
pub struct RunningStats {
    pub name: String,
    pub mean: Vec<f64>,
    pub var: Vec<f64>,
    /// Number of training batches folded into the statistics.
    pub tracked: u64,
    pub momentum: f64,
    pub eps: f64,
}

impl RunningStats {
    pub fn new(name: impl Into<String>, groups: usize) -> Self {
        Self {
            name: name.into(),
            mean: vec![0.0; groups],
            var: vec![1.0; groups],
            tracked: 0,
            momentum: BN_MOMENTUM,
            eps: BN_EPS,
        }
    }

    pub fn groups(&self) -> usize {
        self.mean.len()
    }
}

#[derive(Clone, Copy, Debug)]
enum Groups {
    PerChannel { c: usize, inner: usize },
    PerChannelJoint { c: usize, t: usize, v: usize },
}

impl Groups {
    fn count(&self) -> usize {
        match *self {
            Groups::PerChannel { c, .. } => c,
            Groups::PerChannelJoint { c, v, .. } => c * v,
        }
    }

    #[inline]
    fn of(&self, i: usize) -> usize {
        match *self {
            Groups::PerChannel { c, inner } => (i / inner) % c,
            Groups::PerChannelJoint { c, t, v } => ((i / (t * v)) % c) * v + i % v,
        }
    }
}

enum Op {
    Leaf,
    MatMul { a: Var, b: Var, batch: usize, m: usize, k: usize, n: usize, broadcast: bool },
    Softmax { x: Var, outer: usize, n: usize, inner: usize },
    Mish { x: Var },
    Relu { x: Var },
    TemporalConv { x: Var, w: Var, bias: Option<Var>, batch: usize, t_in: usize, stride: usize },
    BatchNorm { x: Var, gamma: Var, beta: Var, xhat: Vec<f64>, inv_std: Vec<f64>, groups: Groups, train: bool },
    ReduceMean { x: Var, axes: Vec<usize> },
    Concat { xs: Vec<Var>, axis: usize },
    Add { a: Var, b: Var },
    Sub { a: Var, b: Var },
    Mul { a: Var, b: Var },
    Scale { x: Var, c: f64 },
    AddScalar { x: Var },
    Reshape { x: Var },
    Permute { x: Var, perm: Vec<usize> },
    PairwiseDistances { x: Var },
    Gather { x: Var, idx: Vec<usize> },
    Sum { x: Var },
    Mean { x: Var },
}

struct Node {
    value: Tensor,
    op: Op,
    needs_grad: bool,
}

/// Eager Wengert tape. Every op computes its value immediately and appends a node;
/// [`Tape::backward`] replays the nodes in reverse.
pub struct Tape {
    precision: Precision,
    nodes: Vec<Node>,
}

impl Default for Tape {
    fn default() -> Self {
        Self::new(Precision::Double)
    }
}

impl Tape {
    pub fn new(precision: Precision) -> Self {
        Self { precision, nodes: Vec::new() }
    }

    pub fn precision(&self) -> Precision {
        self.precision
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Records an input. Gradients are tracked iff `tensor.requires_grad()`.
    pub fn leaf(&mut self, mut tensor: Tensor) -> Var {
        self.precision.round_slice(tensor.data_mut());
        let needs_grad = tensor.requires_grad();
        tensor.grad = None;
        self.nodes.push(Node { value: tensor, op: Op::Leaf, needs_grad });
        Var(self.nodes.len() - 1)
    }

    /// Records a trainable leaf.
    pub fn param(&mut self, tensor: Tensor) -> Var {
        self.leaf(tensor.with_requires_grad(true))
    }

    pub fn constant(&mut self, tensor: Tensor) -> Var {
        self.leaf(tensor.with_requires_grad(false))
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn grad(&self, v: Var) -> Option<&[f64]> {
        self.nodes[v.0].value.grad()
    }

    fn push(&mut self, shape: Vec<usize>, mut data: Vec<f64>, op: Op, inputs: &[Var]) -> Var {
        self.precision.round_slice(&mut data);
        debug_assert_eq!(shape.iter().product::<usize>(), data.len());
        let needs_grad = inputs.iter().any(|v| self.nodes[v.0].needs_grad);
        let value = Tensor { shape, data, requires_grad: needs_grad, grad: None };
        self.nodes.push(Node { value, op, needs_grad });
        Var(self.nodes.len() - 1)
    }

    fn data(&self, v: Var) -> &[f64] {
        self.nodes[v.0].value.data()
    }

    // ----- forward ops -------------------------------------------------------------

    /// `[..., m, k] · [k, n]` (right operand broadcast) or `[..., m, k] · [..., k, n]`.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a).to_vec(), self.shape(b).to_vec());
        if sa.len() < 2 || sb.len() < 2 {
            return Err(Error::dim(format!("matmul needs rank >= 2 operands, got {sa:?} and {sb:?}")));
        }
        let (m, k) = (sa[sa.len() - 2], sa[sa.len() - 1]);
        let (k2, n) = (sb[sb.len() - 2], sb[sb.len() - 1]);
        let a_batch = &sa[..sa.len() - 2];
        let b_batch = &sb[..sb.len() - 2];
        let broadcast = b_batch.is_empty();
        if k != k2 || (!broadcast && a_batch != b_batch) {
            return Err(Error::dim(format!("matmul shape mismatch: {sa:?} · {sb:?}")));
        }
        let batch: usize = a_batch.iter().product();
        let mut out = vec![0.0; batch * m * n];
        {
            let (ad, bd) = (self.data(a), self.data(b));
            if broadcast {
                gemm(batch * m, k, n, 1.0, ad, (k, 1), bd, (n, 1), 0.0, &mut out, (n, 1));
            } else {
                for i in 0..batch {
                    gemm(
                        m,
                        k,
                        n,
                        1.0,
                        &ad[i * m * k..],
                        (k, 1),
                        &bd[i * k * n..],
                        (n, 1),
                        0.0,
                        &mut out[i * m * n..],
                        (n, 1),
                    );
                }
            }
        }
        let mut shape = a_batch.to_vec();
        shape.extend([m, n]);
        Ok(self.push(shape, out, Op::MatMul { a, b, batch, m, k, n, broadcast }, &[a, b]))
    }

    /// Numerically stable softmax along `axis`.
    pub fn softmax(&mut self, x: Var, axis: usize) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        if axis >= shape.len() {
            return Err(Error::dim(format!("softmax axis {axis} out of range for {shape:?}")));
        }
        let outer: usize = shape[..axis].iter().product();
        let n = shape[axis];
        let inner: usize = shape[axis + 1..].iter().product();
        let xd = self.data(x);
        let mut out = vec![0.0; xd.len()];
        for o in 0..outer {
            for i in 0..inner {
                let base = o * n * inner + i;
                let mut max = f64::NEG_INFINITY;
                for j in 0..n {
                    max = max.max(xd[base + j * inner]);
                }
                let mut sum = 0.0;
                for j in 0..n {
                    let e = (xd[base + j * inner] - max).exp();
                    out[base + j * inner] = e;
                    sum += e;
                }
                for j in 0..n {
                    out[base + j * inner] /= sum;
                }
            }
        }
        Ok(self.push(shape, out, Op::Softmax { x, outer, n, inner }, &[x]))
    }

    /// `x · tanh(softplus(x))`, elementwise.
    pub fn mish(&mut self, x: Var) -> Var {
        let out = self.data(x).iter().map(|&v| kernels::mish(v)).collect();
        self.push(self.shape(x).to_vec(), out, Op::Mish { x }, &[x])
    }

    pub fn relu(&mut self, x: Var) -> Var {
        // NaN passes through so that divergence stays visible
        let out = self.data(x).iter().map(|&v| if v < 0.0 { 0.0 } else { v }).collect();
        self.push(self.shape(x).to_vec(), out, Op::Relu { x }, &[x])
    }

    /// Convolution along the frame axis of `[B, C_in, T, V]` (or `[C_in, T, V]`),
    /// applied to every joint independently, with zero padding `(L-1)/2`.
    pub fn temporal_conv(&mut self, x: Var, w: Var, bias: Option<Var>, stride: usize) -> Result<Var> {
        let sx = self.shape(x).to_vec();
        let sw = self.shape(w).to_vec();
        let (batch, c_in, t_in, joints) = match sx.as_slice() {
            &[c, t, v] => (1, c, t, v),
            &[b, c, t, v] => (b, c, t, v),
            _ => return Err(Error::dim(format!("temporal_conv input must be [B,C,T,V] or [C,T,V], got {sx:?}"))),
        };
        let &[c_out, c_in_w, kernel] = sw.as_slice() else {
            return Err(Error::dim(format!("temporal_conv weight must be [C_out,C_in,L], got {sw:?}")));
        };
        if c_in_w != c_in {
            return Err(Error::dim(format!("temporal_conv: input {sx:?} vs weight {sw:?}")));
        }
        if kernel % 2 == 0 {
            return Err(Error::dim(format!("temporal_conv kernel length must be odd, got {kernel}")));
        }
        if stride == 0 {
            return Err(Error::dim("temporal_conv stride must be positive"));
        }
        let padded = t_in + kernel - 1;
        if kernel > padded {
            return Err(Error::dim(format!("kernel {kernel} longer than padded sequence {padded}")));
        }
        if let Some(b) = bias {
            if self.shape(b) != [c_out] {
                return Err(Error::dim(format!("temporal_conv bias must be [{c_out}], got {:?}", self.shape(b))));
            }
        }
        let t_out = t_in.div_ceil(stride);
        let geom = ConvGeom { batch, c_in, c_out, t_in, t_out, joints, kernel, stride };
        let mut out = vec![0.0; batch * c_out * t_out * joints];
        let zero_bias = vec![0.0; c_out];
        let bd = bias.map(|b| self.data(b)).unwrap_or(&zero_bias);
        kernels::conv_forward(&geom, self.data(x), self.data(w), bd, &mut out);
        let shape = if sx.len() == 3 { vec![c_out, t_out, joints] } else { vec![batch, c_out, t_out, joints] };
        let mut inputs = vec![x, w];
        inputs.extend(bias);
        Ok(self.push(shape, out, Op::TemporalConv { x, w, bias, batch, t_in, stride }, &inputs))
    }

    /// Batch normalisation `gamma·(x-mean)/sqrt(var+eps)+beta`.
    ///
    /// Train mode normalises with batch statistics and folds them into `stats`;
    /// eval mode uses `stats` and fails if no batch has been recorded yet.
    pub fn batchnorm(
        &mut self,
        x: Var,
        gamma: Var,
        beta: Var,
        stats: &mut RunningStats,
        mode: BnMode,
        layout: BnLayout,
    ) -> Result<Var> {
        let sx = self.shape(x).to_vec();
        let groups = match layout {
            BnLayout::PerChannel => {
                if sx.len() < 2 {
                    return Err(Error::dim(format!("batchnorm input must be [B,C,...], got {sx:?}")));
                }
                Groups::PerChannel { c: sx[1], inner: sx[2..].iter().product() }
            }
            BnLayout::PerChannelJoint => {
                let &[_, c, t, v] = sx.as_slice() else {
                    return Err(Error::dim(format!("per-channel-joint batchnorm needs [B,C,T,V], got {sx:?}")));
                };
                Groups::PerChannelJoint { c, t, v }
            }
        };
        let g = groups.count();
        for (name, p) in [("gamma", gamma), ("beta", beta)] {
            if self.shape(p) != [g] {
                return Err(Error::dim(format!("batchnorm {name} must be [{g}], got {:?}", self.shape(p))));
            }
        }
        if stats.groups() != g {
            return Err(Error::dim(format!(
                "batchnorm `{}` tracks {} groups, input needs {g}",
                stats.name,
                stats.groups()
            )));
        }
        let xd = self.data(x);
        let count = xd.len() / g;
        let (mean, inv_std) = match mode {
            BnMode::Train => {
                if count < 2 {
                    return Err(Error::Contract(format!(
                        "batchnorm `{}`: train mode needs at least 2 values per group, got {count}",
                        stats.name
                    )));
                }
                let mut mean = vec![0.0; g];
                for (i, &v) in xd.iter().enumerate() {
                    mean[groups.of(i)] += v;
                }
                mean.iter_mut().for_each(|m| *m /= count as f64);
                let mut var = vec![0.0; g];
                for (i, &v) in xd.iter().enumerate() {
                    let gi = groups.of(i);
                    let d = v - mean[gi];
                    var[gi] += d * d;
                }
                var.iter_mut().for_each(|s| *s /= count as f64);
                let unbias = count as f64 / (count as f64 - 1.0);
                for gi in 0..g {
                    let mom = stats.momentum;
                    stats.mean[gi] = self.precision.round((1.0 - mom) * stats.mean[gi] + mom * mean[gi]);
                    stats.var[gi] = self.precision.round((1.0 - mom) * stats.var[gi] + mom * var[gi] * unbias);
                }
                stats.tracked += 1;
                let inv_std: Vec<f64> = var.iter().map(|v| 1.0 / (v + stats.eps).sqrt()).collect();
                (mean, inv_std)
            }
            BnMode::Eval => {
                if stats.tracked == 0 {
                    return Err(Error::UninitializedStats(stats.name.clone()));
                }
                let inv_std: Vec<f64> = stats.var.iter().map(|v| 1.0 / (v + stats.eps).sqrt()).collect();
                (stats.mean.clone(), inv_std)
            }
        };
        let gd = self.data(gamma);
        let bd = self.data(beta);
        let mut xhat = vec![0.0; xd.len()];
        let mut out = vec![0.0; xd.len()];
        for (i, &v) in xd.iter().enumerate() {
            let gi = groups.of(i);
            let h = (v - mean[gi]) * inv_std[gi];
            xhat[i] = h;
            out[i] = gd[gi] * h + bd[gi];
        }
        let op = Op::BatchNorm { x, gamma, beta, xhat, inv_std, groups, train: mode == BnMode::Train };
        Ok(self.push(sx, out, op, &[x, gamma, beta]))
    }

    /// Mean over `axes`; the reduced axes are dropped from the shape.
    pub fn reduce_mean(&mut self, x: Var, axes: &[usize]) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        let mut axes = axes.to_vec();
        axes.sort_unstable();
        axes.dedup();
        if axes.is_empty() || axes.iter().any(|&a| a >= shape.len()) {
            return Err(Error::dim(format!("reduce_mean axes {axes:?} invalid for {shape:?}")));
        }
        let (out_shape, map) = reduce_map(&shape, &axes);
        let n_out: usize = out_shape.iter().product();
        let scale = (self.data(x).len() / n_out) as f64;
        let mut out = vec![0.0; n_out];
        for (v, &o) in self.data(x).iter().zip(&map) {
            out[o] += v;
        }
        out.iter_mut().for_each(|v| *v /= scale);
        Ok(self.push(out_shape, out, Op::ReduceMean { x, axes }, &[x]))
    }

    pub fn concat(&mut self, xs: &[Var], axis: usize) -> Result<Var> {
        let first = xs.first().ok_or_else(|| Error::dim("concat of zero tensors"))?;
        let base = self.shape(*first).to_vec();
        if axis >= base.len() {
            return Err(Error::dim(format!("concat axis {axis} out of range for {base:?}")));
        }
        let mut total = 0;
        for &v in xs {
            let s = self.shape(v);
            let compatible = s.len() == base.len()
                && s.iter().zip(&base).enumerate().all(|(i, (a, b))| i == axis || a == b);
            if !compatible {
                return Err(Error::dim(format!("concat: {s:?} incompatible with {base:?} on axis {axis}")));
            }
            total += s[axis];
        }
        let outer: usize = base[..axis].iter().product();
        let inner: usize = base[axis + 1..].iter().product();
        let mut out = Vec::with_capacity(outer * total * inner);
        for o in 0..outer {
            for &v in xs {
                let chunk = self.shape(v)[axis] * inner;
                out.extend_from_slice(&self.data(v)[o * chunk..(o + 1) * chunk]);
            }
        }
        let mut shape = base;
        shape[axis] = total;
        Ok(self.push(shape, out, Op::Concat { xs: xs.to_vec(), axis }, xs))
    }

    fn check_broadcast(&self, a: Var, b: Var, what: &str) -> Result<()> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sb.len() > sa.len() || sa[sa.len() - sb.len()..] != *sb {
            return Err(Error::dim(format!("{what}: shape mismatch {sa:?} vs {sb:?}")));
        }
        Ok(())
    }

    fn binary(&mut self, a: Var, b: Var, f: impl Fn(f64, f64) -> f64, op: Op, what: &str) -> Result<Var> {
        self.check_broadcast(a, b, what)?;
        let bd = self.data(b);
        let out = self.data(a).iter().enumerate().map(|(i, &x)| f(x, bd[i % bd.len()])).collect();
        Ok(self.push(self.shape(a).to_vec(), out, op, &[a, b]))
    }

    /// Elementwise `a + b`; `b` may match a trailing suffix of `a`'s shape.
    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, |x, y| x + y, Op::Add { a, b }, "add")
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, |x, y| x - y, Op::Sub { a, b }, "sub")
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, |x, y| x * y, Op::Mul { a, b }, "mul")
    }

    pub fn scale(&mut self, x: Var, c: f64) -> Var {
        let out = self.data(x).iter().map(|v| v * c).collect();
        self.push(self.shape(x).to_vec(), out, Op::Scale { x, c }, &[x])
    }

    pub fn add_scalar(&mut self, x: Var, c: f64) -> Var {
        let out = self.data(x).iter().map(|v| v + c).collect();
        self.push(self.shape(x).to_vec(), out, Op::AddScalar { x }, &[x])
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let n: usize = shape.iter().product();
        if n != self.data(x).len() || shape.contains(&0) {
            return Err(Error::dim(format!("cannot reshape {:?} to {shape:?}", self.shape(x))));
        }
        let out = self.data(x).to_vec();
        Ok(self.push(shape.to_vec(), out, Op::Reshape { x }, &[x]))
    }

    /// Axis permutation: output axis `i` is input axis `perm[i]`.
    pub fn permute(&mut self, x: Var, perm: &[usize]) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        let mut seen = vec![false; shape.len()];
        if perm.len() != shape.len() || perm.iter().any(|&p| p >= shape.len() || std::mem::replace(&mut seen[p], true)) {
            return Err(Error::dim(format!("invalid permutation {perm:?} for {shape:?}")));
        }
        let out_shape: Vec<usize> = perm.iter().map(|&p| shape[p]).collect();
        let out = permute_data(self.data(x), &shape, perm);
        Ok(self.push(out_shape, out, Op::Permute { x, perm: perm.to_vec() }, &[x]))
    }

    /// Euclidean distance matrix of the rows of a `[B, D]` tensor.
    pub fn pairwise_distances(&mut self, x: Var) -> Result<Var> {
        let &[b, d] = self.shape(x) else {
            return Err(Error::dim(format!("pairwise_distances needs [B,D], got {:?}", self.shape(x))));
        };
        let xd = self.data(x);
        let mut out = vec![0.0; b * b];
        for i in 0..b {
            for j in (i + 1)..b {
                let s: f64 = (0..d).map(|c| {
                    let diff = xd[i * d + c] - xd[j * d + c];
                    diff * diff
                })
                .sum();
                let dist = s.sqrt();
                out[i * b + j] = dist;
                out[j * b + i] = dist;
            }
        }
        Ok(self.push(vec![b, b], out, Op::PairwiseDistances { x }, &[x]))
    }

    /// Picks flat elements of `x` into a rank-1 tensor.
    pub fn gather(&mut self, x: Var, idx: &[usize]) -> Result<Var> {
        let xd = self.data(x);
        if idx.is_empty() {
            return Err(Error::dim("gather with no indices"));
        }
        if let Some(&bad) = idx.iter().find(|&&i| i >= xd.len()) {
            return Err(Error::dim(format!("gather index {bad} out of range for {} elements", xd.len())));
        }
        let out = idx.iter().map(|&i| xd[i]).collect();
        Ok(self.push(vec![idx.len()], out, Op::Gather { x, idx: idx.to_vec() }, &[x]))
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let s = self.data(x).iter().sum();
        self.push(vec![], vec![s], Op::Sum { x }, &[x])
    }

    pub fn mean(&mut self, x: Var) -> Var {
        let d = self.data(x);
        let s = d.iter().sum::<f64>() / d.len() as f64;
        self.push(vec![], vec![s], Op::Mean { x }, &[x])
    }

    // ----- backward ----------------------------------------------------------------

    /// Reverse sweep from a scalar `loss`; afterwards every leaf that requires a
    /// gradient carries `d loss / d leaf`.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if self.nodes.is_empty() {
            return Err(Error::Contract("backward on an empty tape".into()));
        }
        let lv = &self.nodes[loss.0].value;
        if lv.len() != 1 {
            return Err(Error::Contract(format!("backward needs a scalar loss, got shape {:?}", lv.shape())));
        }
        let mut grads: Vec<Option<Vec<f64>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(vec![1.0]);

        for i in (0..=loss.0).rev() {
            if !self.nodes[i].needs_grad {
                continue;
            }
            let Some(mut g) = grads[i].take() else { continue };
            self.precision.round_slice(&mut g);
            if matches!(self.nodes[i].op, Op::Leaf) {
                grads[i] = Some(g);
                continue;
            }
            self.backprop_node(i, &g, &mut grads);
        }

        for (node, g) in self.nodes.iter_mut().zip(grads) {
            if matches!(node.op, Op::Leaf) && node.needs_grad {
                let n = node.value.len();
                node.value.set_grad(g.unwrap_or_else(|| vec![0.0; n]));
            }
        }
        Ok(())
    }

    fn backprop_node(&self, i: usize, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
        let nodes = &self.nodes;
        let needs = |v: Var| nodes[v.0].needs_grad;
        let val = |v: Var| nodes[v.0].value.data();
        // Returns the accumulation buffer for `v`, creating it on first use.
        fn slot<'a>(grads: &'a mut [Option<Vec<f64>>], nodes: &[Node], v: Var) -> &'a mut Vec<f64> {
            grads[v.0].get_or_insert_with(|| vec![0.0; nodes[v.0].value.len()])
        }
        let out = nodes[i].value.data();

        match &nodes[i].op {
            Op::Leaf => {}
            &Op::MatMul { a, b, batch, m, k, n, broadcast } => {
                if needs(a) {
                    let bd = val(b);
                    let da = slot(grads, nodes, a);
                    if broadcast {
                        gemm(batch * m, n, k, 1.0, g, (n, 1), bd, (1, n), 1.0, da, (k, 1));
                    } else {
                        for p in 0..batch {
                            gemm(m, n, k, 1.0, &g[p * m * n..], (n, 1), &bd[p * k * n..], (1, n), 1.0, &mut da[p * m * k..], (k, 1));
                        }
                    }
                }
                if needs(b) {
                    let ad = val(a);
                    let db = slot(grads, nodes, b);
                    if broadcast {
                        gemm(k, batch * m, n, 1.0, ad, (1, k), g, (n, 1), 1.0, db, (n, 1));
                    } else {
                        for p in 0..batch {
                            gemm(k, m, n, 1.0, &ad[p * m * k..], (1, k), &g[p * m * n..], (n, 1), 1.0, &mut db[p * k * n..], (n, 1));
                        }
                    }
                }
            }
            &Op::Softmax { x, outer, n, inner } => {
                let dx = slot(grads, nodes, x);
                for o in 0..outer {
                    for q in 0..inner {
                        let base = o * n * inner + q;
                        let dot: f64 = (0..n).map(|j| out[base + j * inner] * g[base + j * inner]).sum();
                        for j in 0..n {
                            let idx = base + j * inner;
                            dx[idx] += out[idx] * (g[idx] - dot);
                        }
                    }
                }
            }
            &Op::Mish { x } => {
                let xd = val(x);
                let dx = slot(grads, nodes, x);
                for ((d, &gv), &xv) in dx.iter_mut().zip(g).zip(xd) {
                    *d += gv * kernels::mish_grad(xv);
                }
            }
            &Op::Relu { x } => {
                let xd = val(x);
                let dx = slot(grads, nodes, x);
                for ((d, &gv), &xv) in dx.iter_mut().zip(g).zip(xd) {
                    if xv > 0.0 {
                        *d += gv;
                    }
                }
            }
            &Op::TemporalConv { x, w, bias, batch, t_in, stride } => {
                let sx = nodes[x.0].value.shape();
                let sw = nodes[w.0].value.shape();
                let joints = *sx.last().unwrap();
                let geom = ConvGeom {
                    batch,
                    c_in: sw[1],
                    c_out: sw[0],
                    t_in,
                    t_out: t_in.div_ceil(stride),
                    joints,
                    kernel: sw[2],
                    stride,
                };
                let mut dx = needs(x).then(|| grads[x.0].take().unwrap_or_else(|| vec![0.0; val(x).len()]));
                let mut dw = needs(w).then(|| grads[w.0].take().unwrap_or_else(|| vec![0.0; val(w).len()]));
                let mut db = bias
                    .filter(|&b| needs(b))
                    .map(|b| grads[b.0].take().unwrap_or_else(|| vec![0.0; val(b).len()]));
                kernels::conv_backward(&geom, val(x), val(w), g, dx.as_deref_mut(), dw.as_deref_mut(), db.as_deref_mut());
                if let Some(d) = dx {
                    grads[x.0] = Some(d);
                }
                if let Some(d) = dw {
                    grads[w.0] = Some(d);
                }
                if let (Some(b), Some(d)) = (bias, db) {
                    grads[b.0] = Some(d);
                }
            }
            Op::BatchNorm { x, gamma, beta, xhat, inv_std, groups, train } => {
                let (x, gamma, beta) = (*x, *gamma, *beta);
                let ng = groups.count();
                let count = (xhat.len() / ng) as f64;
                let mut sum_g = vec![0.0; ng];
                let mut sum_gx = vec![0.0; ng];
                for (idx, (&gv, &h)) in g.iter().zip(xhat).enumerate() {
                    let gi = groups.of(idx);
                    sum_g[gi] += gv;
                    sum_gx[gi] += gv * h;
                }
                if needs(x) {
                    let gd = val(gamma);
                    let dx = slot(grads, nodes, x);
                    for (idx, (&gv, &h)) in g.iter().zip(xhat).enumerate() {
                        let gi = groups.of(idx);
                        let scale = gd[gi] * inv_std[gi];
                        dx[idx] += if *train {
                            scale * (gv - sum_g[gi] / count - h * sum_gx[gi] / count)
                        } else {
                            scale * gv
                        };
                    }
                }
                if needs(gamma) {
                    slot(grads, nodes, gamma).iter_mut().zip(&sum_gx).for_each(|(d, s)| *d += s);
                }
                if needs(beta) {
                    slot(grads, nodes, beta).iter_mut().zip(&sum_g).for_each(|(d, s)| *d += s);
                }
            }
            Op::ReduceMean { x, axes } => {
                let x = *x;
                let (_, map) = reduce_map(nodes[x.0].value.shape(), axes);
                let scale = (val(x).len() / g.len()) as f64;
                let dx = slot(grads, nodes, x);
                for (d, &o) in dx.iter_mut().zip(&map) {
                    *d += g[o] / scale;
                }
            }
            Op::Concat { xs, axis } => {
                let base = nodes[xs[0].0].value.shape();
                let outer: usize = base[..*axis].iter().product();
                let inner: usize = base[*axis + 1..].iter().product();
                let total: usize = xs.iter().map(|v| nodes[v.0].value.shape()[*axis]).sum();
                let mut offset = 0;
                for &v in xs {
                    let chunk = nodes[v.0].value.shape()[*axis] * inner;
                    if needs(v) {
                        let dv = slot(grads, nodes, v);
                        for o in 0..outer {
                            let src = &g[o * total * inner + offset..][..chunk];
                            for (d, s) in dv[o * chunk..(o + 1) * chunk].iter_mut().zip(src) {
                                *d += s;
                            }
                        }
                    }
                    offset += chunk;
                }
            }
            &Op::Add { a, b } | &Op::Sub { a, b } => {
                let sign = if matches!(nodes[i].op, Op::Sub { .. }) { -1.0 } else { 1.0 };
                if needs(a) {
                    slot(grads, nodes, a).iter_mut().zip(g).for_each(|(d, gv)| *d += gv);
                }
                if needs(b) {
                    let db = slot(grads, nodes, b);
                    let nb = db.len();
                    for (idx, gv) in g.iter().enumerate() {
                        db[idx % nb] += sign * gv;
                    }
                }
            }
            &Op::Mul { a, b } => {
                let (ad, bd) = (val(a), val(b));
                let nb = bd.len();
                if needs(a) {
                    let da = slot(grads, nodes, a);
                    for (idx, gv) in g.iter().enumerate() {
                        da[idx] += gv * bd[idx % nb];
                    }
                }
                if needs(b) {
                    let db = slot(grads, nodes, b);
                    for (idx, gv) in g.iter().enumerate() {
                        db[idx % nb] += gv * ad[idx];
                    }
                }
            }
            &Op::Scale { x, c } => {
                slot(grads, nodes, x).iter_mut().zip(g).for_each(|(d, gv)| *d += c * gv);
            }
            &Op::AddScalar { x } | &Op::Reshape { x } => {
                slot(grads, nodes, x).iter_mut().zip(g).for_each(|(d, gv)| *d += gv);
            }
            Op::Permute { x, perm } => {
                let x = *x;
                let out_shape = nodes[i].value.shape();
                let mut inverse = vec![0; perm.len()];
                for (k, &p) in perm.iter().enumerate() {
                    inverse[p] = k;
                }
                let back = permute_data(g, out_shape, &inverse);
                slot(grads, nodes, x).iter_mut().zip(back).for_each(|(d, gv)| *d += gv);
            }
            &Op::PairwiseDistances { x } => {
                let s = nodes[x.0].value.shape();
                let (b, d) = (s[0], s[1]);
                let xd = val(x);
                let dx = slot(grads, nodes, x);
                for p in 0..b {
                    for q in 0..b {
                        let dist = out[p * b + q];
                        if p == q || dist == 0.0 {
                            continue;
                        }
                        let coef = (g[p * b + q] + g[q * b + p]) / dist;
                        if coef == 0.0 {
                            continue;
                        }
                        for c in 0..d {
                            dx[p * d + c] += coef * (xd[p * d + c] - xd[q * d + c]);
                        }
                    }
                }
            }
            Op::Gather { x, idx } => {
                let dx = slot(grads, nodes, *x);
                for (&k, gv) in idx.iter().zip(g) {
                    dx[k] += gv;
                }
            }
            &Op::Sum { x } => {
                slot(grads, nodes, x).iter_mut().for_each(|d| *d += g[0]);
            }
            &Op::Mean { x } => {
                let dx = slot(grads, nodes, x);
                let n = dx.len() as f64;
                dx.iter_mut().for_each(|d| *d += g[0] / n);
            }
        }
    }
}

/// Output shape of a reduction and, for every input element, its output slot.
fn reduce_map(shape: &[usize], axes: &[usize]) -> (Vec<usize>, Vec<usize>) {
    let out_shape: Vec<usize> = shape
        .iter()
        .enumerate()
        .filter(|(i, _)| !axes.contains(i))
        .map(|(_, &d)| d)
        .collect();
    let out_strides = strides(&out_shape);
    // stride each input axis contributes to the output offset
    let mut contrib = Vec::with_capacity(shape.len());
    let mut k = 0;
    for i in 0..shape.len() {
        if axes.contains(&i) {
            contrib.push(0);
        } else {
            contrib.push(out_strides[k]);
            k += 1;
        }
    }
    let n: usize = shape.iter().product();
    let mut map = Vec::with_capacity(n);
    let mut idx = vec![0usize; shape.len()];
    for _ in 0..n {
        map.push(idx.iter().zip(&contrib).map(|(a, b)| a * b).sum());
        for ax in (0..shape.len()).rev() {
            idx[ax] += 1;
            if idx[ax] < shape[ax] {
                break;
            }
            idx[ax] = 0;
        }
    }
    (out_shape, map)
}

fn permute_data(data: &[f64], shape: &[usize], perm: &[usize]) -> Vec<f64> {
    let in_strides = strides(shape);
    let out_shape: Vec<usize> = perm.iter().map(|&p| shape[p]).collect();
    let src_strides: Vec<usize> = perm.iter().map(|&p| in_strides[p]).collect();
    let rank = shape.len();
    let mut out = Vec::with_capacity(data.len());
    if rank == 0 {
        return data.to_vec();
    }
    // innermost output axis is walked as a strided run
    let last = rank - 1;
    let run = out_shape[last];
    let run_stride = src_strides[last];
    let mut idx = vec![0usize; rank];
    let outer: usize = out_shape[..last].iter().product();
    for _ in 0..outer {
        let base: usize = idx.iter().zip(&src_strides).map(|(a, b)| a * b).sum();
        out.extend((0..run).map(|r| data[base + r * run_stride]));
        for ax in (0..last).rev() {
            idx[ax] += 1;
            if idx[ax] < out_shape[ax] {
                break;
            }
            idx[ax] = 0;
        }
    }
    out
}
