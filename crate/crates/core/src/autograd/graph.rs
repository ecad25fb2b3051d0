use std::collections::BTreeMap;

use rand::Rng;

use super::lstm::{self, DirectionCache};
use super::{gemm, Mode, ParameterSet, Real, Tensor, TensorError};

pub const BN_EPS: f64 = 1e-5;

/// Handle to a node on a [`Graph`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

enum Op<T: Real> {
    Leaf,
    Conv2d { input: Var, weight: Var, bias: Option<Var>, cols: Vec<T> },
    BatchNorm { input: Var, gamma: Var, beta: Var, xhat: Vec<T>, inv_std: Vec<T>, train: bool },
    Relu { input: Var },
    MaxPool { input: Var, argmax: Vec<usize> },
    Dropout { input: Var, mask: Vec<T> },
    Linear { input: Var, weight: Var, bias: Var },
    Reshape { input: Var },
    PadSequences { input: Var, lengths: Vec<usize> },
    Bilstm { input: Var, weights: [Var; 6], lengths: Vec<usize>, cache: Box<[DirectionCache<T>; 2]> },
    FinalStates { input: Var, lengths: Vec<usize> },
    Mse { pred: Var, target: Vec<T> },
    Dot { input: Var, weights: Vec<T> },
    Sum { input: Var },
    Add { a: Var, b: Var },
}

struct Node<T: Real> {
    shape: Vec<usize>,
    value: Vec<T>,
    requires_grad: bool,
    op: Op<T>,
}

/// Per-channel batch statistics produced by train-mode batch norm.
#[derive(Debug, Clone, PartialEq)]
pub struct BatchStats<T: Real> {
    pub mean: Vec<T>,
    /// Biased (population) variance.
    pub var: Vec<T>,
    pub count: usize,
}

impl<T: Real> BatchStats<T> {
    /// Exponential running update; the running variance uses the unbiased
    /// estimate.
    pub fn update_running(&self, running_mean: &mut [T], running_var: &mut [T], momentum: f64) {
        let m = T::of(momentum);
        let keep = T::one() - m;
        let unbias = T::of(self.count as f64 / (self.count as f64 - 1.0).max(1.0));
        for c in 0..self.mean.len() {
            running_mean[c] = keep * running_mean[c] + m * self.mean[c];
            running_var[c] = keep * running_var[c] + m * self.var[c] * unbias;
        }
    }
}

/// Maps parameter names to the leaf nodes holding their values.
#[derive(Debug, Clone, Default)]
pub struct ParamBindings {
    vars: BTreeMap<String, Var>,
}

impl ParamBindings {
    pub fn get(&self, name: &str) -> Result<Var, TensorError> {
        self.vars.get(name).copied().ok_or_else(|| TensorError::UnknownName(name.to_string()))
    }
}

/// Recording tape for one forward pass and at most one backward pass.
pub struct Graph<T: Real = f32> {
    nodes: Vec<Node<T>>,
    grads: Vec<Option<Vec<T>>>,
    consumed: bool,
}

impl<T: Real> Default for Graph<T> {
    fn default() -> Self {
        Self::new()
    }
}

fn add_into<T: Real>(dst: &mut [T], src: &[T]) {
    for (d, &s) in dst.iter_mut().zip(src) {
        *d = *d + s;
    }
}

fn grad_slot<T: Real>(grads: &mut [Option<Vec<T>>], var: Var, len: usize) -> &mut Vec<T> {
    grads[var.0].get_or_insert_with(|| vec![T::zero(); len])
}

impl<T: Real> Graph<T> {
    pub fn new() -> Self {
        Self { nodes: Vec::new(), grads: Vec::new(), consumed: false }
    }

    fn push(&mut self, shape: Vec<usize>, value: Vec<T>, requires_grad: bool, op: Op<T>) -> Var {
        debug_assert_eq!(shape.iter().product::<usize>(), value.len());
        let op = if requires_grad { op } else { Op::Leaf };
        self.nodes.push(Node { shape, value, requires_grad, op });
        Var(self.nodes.len() - 1)
    }

    fn node(&self, v: Var) -> &Node<T> {
        &self.nodes[v.0]
    }

    fn rg(&self, vars: &[Var]) -> bool {
        vars.iter().any(|v| self.nodes[v.0].requires_grad)
    }

    /// Adds a leaf; it receives a gradient iff `tensor.requires_grad()`.
    pub fn leaf(&mut self, tensor: &Tensor<T>) -> Var {
        self.push(tensor.shape().to_vec(), tensor.data().to_vec(), tensor.requires_grad(), Op::Leaf)
    }

    /// Adds a constant leaf.
    pub fn constant(&mut self, shape: Vec<usize>, value: Vec<T>) -> Result<Var, TensorError> {
        let t = Tensor::new(shape, value)?;
        Ok(self.leaf(&t))
    }

    /// Creates one leaf per tensor of the set.
    pub fn bind(&mut self, params: &ParameterSet<T>) -> ParamBindings {
        let vars = params.iter().map(|(name, t)| (name.to_string(), self.leaf(t))).collect();
        ParamBindings { vars }
    }

    pub fn value(&self, v: Var) -> &[T] {
        &self.node(v).value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        &self.node(v).shape
    }

    /// Gradient of a leaf after [`Graph::backward`].
    pub fn grad(&self, v: Var) -> Option<&[T]> {
        self.grads.get(v.0).and_then(|g| g.as_deref())
    }

    pub fn to_tensor(&self, v: Var) -> Tensor<T> {
        let n = self.node(v);
        Tensor::new(n.shape.clone(), n.value.clone()).expect("node shapes are consistent")
    }

    /// Copies leaf gradients into the trainable tensors of `params`.
    pub fn write_grads(&self, bindings: &ParamBindings, params: &mut ParameterSet<T>) -> Result<(), TensorError> {
        for (name, tensor) in params.iter_mut() {
            if !tensor.requires_grad() {
                continue;
            }
            let var = bindings.get(name)?;
            let grad = self.grad(var).ok_or_else(|| TensorError::MissingGrad(name.to_string()))?;
            tensor.set_grad(grad.to_vec())?;
        }
        Ok(())
    }

    /// 3x3 convolution, stride 1, zero padding 1, optional per-channel bias.
    pub fn conv2d(&mut self, input: Var, weight: Var, bias: Option<Var>) -> Result<Var, TensorError> {
        let xs = self.shape(input).to_vec();
        let ws = self.shape(weight).to_vec();
        if xs.len() != 4 {
            return Err(TensorError::Shape(format!("conv2d input must be 4-d, got {xs:?}")));
        }
        if ws.len() != 4 || ws[2] != 3 || ws[3] != 3 {
            return Err(TensorError::Shape(format!("conv2d weight must be [Cout, Cin, 3, 3], got {ws:?}")));
        }
        let (b, cin, h, w) = (xs[0], xs[1], xs[2], xs[3]);
        let cout = ws[0];
        if ws[1] != cin {
            return Err(TensorError::ChannelMismatch { input: cin, weight: ws[1] });
        }
        if let Some(bias) = bias {
            if self.shape(bias) != [cout] {
                return Err(TensorError::Shape(format!("conv2d bias must be [{cout}]")));
            }
        }
        let hw = h * w;
        let cols = im2col(self.value(input), b, cin, h, w);
        let mut tmp = vec![T::zero(); cout * b * hw];
        gemm(false, false, cout, b * hw, cin * 9, T::one(), self.value(weight), &cols, T::zero(), &mut tmp);
        let zeros = vec![T::zero(); cout];
        let bv = bias.map_or(zeros.as_slice(), |b| self.value(b));
        let mut out = vec![T::zero(); b * cout * hw];
        for n in 0..b {
            for co in 0..cout {
                let src = &tmp[co * b * hw + n * hw..co * b * hw + (n + 1) * hw];
                let dst = &mut out[(n * cout + co) * hw..(n * cout + co + 1) * hw];
                for (d, &s) in dst.iter_mut().zip(src) {
                    *d = s + bv[co];
                }
            }
        }
        let mut deps = vec![input, weight];
        deps.extend(bias);
        let rg = self.rg(&deps);
        Ok(self.push(vec![b, cout, h, w], out, rg, Op::Conv2d { input, weight, bias, cols }))
    }

    fn bn_checks(&self, input: Var, gamma: Var, beta: Var) -> Result<(usize, usize, usize), TensorError> {
        let xs = self.shape(input);
        if xs.len() != 4 {
            return Err(TensorError::Shape(format!("batch norm input must be 4-d, got {xs:?}")));
        }
        let (b, c, hw) = (xs[0], xs[1], xs[2] * xs[3]);
        if self.shape(gamma) != [c] || self.shape(beta) != [c] {
            return Err(TensorError::Shape(format!("batch norm affine params must be [{c}]")));
        }
        Ok((b, c, hw))
    }

    /// Train-mode batch norm: normalizes with statistics over (B, H, W).
    ///
    /// Returns the batch statistics so the caller can update running buffers.
    pub fn batchnorm2d_train(&mut self, input: Var, gamma: Var, beta: Var) -> Result<(Var, BatchStats<T>), TensorError> {
        let (b, c, hw) = self.bn_checks(input, gamma, beta)?;
        let n = b * hw;
        if n < 2 {
            return Err(TensorError::BatchTooSmall(n));
        }
        let x = self.value(input);
        let nf = T::of(n as f64);
        let mut mean = vec![T::zero(); c];
        let mut var = vec![T::zero(); c];
        for ch in 0..c {
            let mut s = T::zero();
            for bi in 0..b {
                s = s + x[(bi * c + ch) * hw..(bi * c + ch + 1) * hw].iter().copied().sum::<T>();
            }
            let m = s / nf;
            let mut ss = T::zero();
            for bi in 0..b {
                for &v in &x[(bi * c + ch) * hw..(bi * c + ch + 1) * hw] {
                    ss = ss + (v - m) * (v - m);
                }
            }
            mean[ch] = m;
            var[ch] = ss / nf;
        }
        let eps = T::of(BN_EPS);
        let inv_std: Vec<T> = var.iter().map(|&v| T::one() / (v + eps).sqrt()).collect();
        let (out, xhat) = self.bn_apply(input, gamma, beta, &mean, &inv_std, b, c, hw);
        let rg = self.rg(&[input, gamma, beta]);
        let v = self.push(self.shape(input).to_vec(), out, rg, Op::BatchNorm { input, gamma, beta, xhat, inv_std, train: true });
        Ok((v, BatchStats { mean, var, count: n }))
    }

    /// Eval-mode batch norm with fixed running statistics.
    pub fn batchnorm2d_eval(
        &mut self,
        input: Var,
        gamma: Var,
        beta: Var,
        running_mean: &[T],
        running_var: &[T],
    ) -> Result<Var, TensorError> {
        let (b, c, hw) = self.bn_checks(input, gamma, beta)?;
        if running_mean.len() != c || running_var.len() != c {
            return Err(TensorError::Shape(format!("running statistics must have {c} channels")));
        }
        let eps = T::of(BN_EPS);
        let inv_std: Vec<T> = running_var.iter().map(|&v| T::one() / (v + eps).sqrt()).collect();
        let (out, xhat) = self.bn_apply(input, gamma, beta, running_mean, &inv_std, b, c, hw);
        let rg = self.rg(&[input, gamma, beta]);
        Ok(self.push(self.shape(input).to_vec(), out, rg, Op::BatchNorm { input, gamma, beta, xhat, inv_std, train: false }))
    }

    #[allow(clippy::too_many_arguments)]
    fn bn_apply(&self, input: Var, gamma: Var, beta: Var, mean: &[T], inv_std: &[T], b: usize, c: usize, hw: usize) -> (Vec<T>, Vec<T>) {
        let x = self.value(input);
        let g = self.value(gamma);
        let be = self.value(beta);
        let mut out = vec![T::zero(); x.len()];
        let mut xhat = vec![T::zero(); x.len()];
        for bi in 0..b {
            for ch in 0..c {
                let r = (bi * c + ch) * hw..(bi * c + ch + 1) * hw;
                for i in r {
                    let xh = (x[i] - mean[ch]) * inv_std[ch];
                    xhat[i] = xh;
                    out[i] = g[ch] * xh + be[ch];
                }
            }
        }
        (out, xhat)
    }

    pub fn relu(&mut self, input: Var) -> Var {
        let out = self.value(input).iter().map(|&v| if v > T::zero() { v } else { T::zero() }).collect();
        let rg = self.rg(&[input]);
        self.push(self.shape(input).to_vec(), out, rg, Op::Relu { input })
    }

    /// 2x2 max pooling with stride 2 in ceil mode; ties go to the first
    /// element in row-major window order.
    pub fn maxpool2d_ceil(&mut self, input: Var) -> Result<Var, TensorError> {
        let xs = self.shape(input).to_vec();
        if xs.len() != 4 {
            return Err(TensorError::Shape(format!("max pool input must be 4-d, got {xs:?}")));
        }
        let (b, c, h, w) = (xs[0], xs[1], xs[2], xs[3]);
        let (ho, wo) = (h.div_ceil(2), w.div_ceil(2));
        let x = self.value(input);
        let mut out = Vec::with_capacity(b * c * ho * wo);
        let mut argmax = Vec::with_capacity(b * c * ho * wo);
        for plane in 0..b * c {
            let base = plane * h * w;
            for oy in 0..ho {
                for ox in 0..wo {
                    let mut best = base + 2 * oy * w + 2 * ox;
                    for y in 2 * oy..(2 * oy + 2).min(h) {
                        for xx in 2 * ox..(2 * ox + 2).min(w) {
                            let i = base + y * w + xx;
                            if x[i] > x[best] {
                                best = i;
                            }
                        }
                    }
                    out.push(x[best]);
                    argmax.push(best);
                }
            }
        }
        let rg = self.rg(&[input]);
        Ok(self.push(vec![b, c, ho, wo], out, rg, Op::MaxPool { input, argmax }))
    }

    /// Inverted dropout. Identity in eval mode or when `p == 0`.
    pub fn dropout<R: Rng + ?Sized>(&mut self, input: Var, p: f64, mode: Mode, rng: &mut R) -> Result<Var, TensorError> {
        if !(0.0..1.0).contains(&p) {
            return Err(TensorError::DropoutProbability(p));
        }
        if mode == Mode::Eval || p == 0.0 {
            return Ok(input);
        }
        let scale = T::of(1.0 / (1.0 - p));
        let mask: Vec<T> = (0..self.value(input).len())
            .map(|_| if rng.gen::<f64>() < p { T::zero() } else { scale })
            .collect();
        let out = self.value(input).iter().zip(&mask).map(|(&v, &m)| v * m).collect();
        let rg = self.rg(&[input]);
        Ok(self.push(self.shape(input).to_vec(), out, rg, Op::Dropout { input, mask }))
    }

    /// Affine map over the last axis: `x W^T + b`.
    pub fn linear(&mut self, input: Var, weight: Var, bias: Var) -> Result<Var, TensorError> {
        let xs = self.shape(input).to_vec();
        let ws = self.shape(weight).to_vec();
        if ws.len() != 2 {
            return Err(TensorError::Dimension(format!("linear weight must be 2-d, got {ws:?}")));
        }
        let (dout, din) = (ws[0], ws[1]);
        if xs.last() != Some(&din) {
            return Err(TensorError::Dimension(format!("input {xs:?} does not end in {din}")));
        }
        if self.shape(bias) != [dout] {
            return Err(TensorError::Dimension(format!("bias must be [{dout}]")));
        }
        let m = self.value(input).len() / din;
        let mut out = vec![T::zero(); m * dout];
        for row in out.chunks_mut(dout) {
            row.copy_from_slice(self.value(bias));
        }
        gemm(false, true, m, dout, din, T::one(), self.value(input), self.value(weight), T::one(), &mut out);
        let mut shape = xs;
        *shape.last_mut().expect("non-empty") = dout;
        let rg = self.rg(&[input, weight, bias]);
        Ok(self.push(shape, out, rg, Op::Linear { input, weight, bias }))
    }

    pub fn reshape(&mut self, input: Var, shape: &[usize]) -> Result<Var, TensorError> {
        if shape.iter().product::<usize>() != self.value(input).len() {
            return Err(TensorError::Shape(format!("cannot reshape {:?} into {shape:?}", self.shape(input))));
        }
        let rg = self.rg(&[input]);
        Ok(self.push(shape.to_vec(), self.value(input).to_vec(), rg, Op::Reshape { input }))
    }

    /// Scatters packed rows `[sum(lengths), D]` into a zero-padded
    /// `[B, max_len, D]` batch, sequence `b` taking the next `lengths[b]` rows.
    pub fn pad_sequences(&mut self, input: Var, lengths: &[usize], max_len: usize) -> Result<Var, TensorError> {
        let xs = self.shape(input).to_vec();
        let total: usize = lengths.iter().sum();
        if xs.len() != 2 || xs[0] != total {
            return Err(TensorError::Shape(format!("pad_sequences expects [{total}, D], got {xs:?}")));
        }
        if let Some(&l) = lengths.iter().find(|&&l| l == 0 || l > max_len) {
            return Err(TensorError::SequenceLength { length: l, max: max_len });
        }
        let d = xs[1];
        let x = self.value(input);
        let mut out = vec![T::zero(); lengths.len() * max_len * d];
        let mut row = 0;
        for (b, &l) in lengths.iter().enumerate() {
            out[b * max_len * d..(b * max_len + l) * d].copy_from_slice(&x[row * d..(row + l) * d]);
            row += l;
        }
        let rg = self.rg(&[input]);
        Ok(self.push(vec![lengths.len(), max_len, d], out, rg, Op::PadSequences { input, lengths: lengths.to_vec() }))
    }

    /// Single-layer bidirectional LSTM over `input: [B, N, Din]`.
    ///
    /// `weights` holds, per direction (forward then backward), the input
    /// matrix `[4H, Din]`, the recurrent matrix `[4H, H]` and the bias `[4H]`
    /// with gate order input, forget, cell, output. `lengths[b]` is the valid
    /// prefix of sequence `b`; the backward direction runs over that prefix
    /// reversed. Output is `[B, N, 2H]` with zeros at padded steps.
    pub fn bilstm(&mut self, input: Var, weights: [Var; 6], lengths: &[usize]) -> Result<Var, TensorError> {
        let xs = self.shape(input).to_vec();
        if xs.len() != 3 {
            return Err(TensorError::Shape(format!("bilstm input must be [B, N, Din], got {xs:?}")));
        }
        let (b, n, din) = (xs[0], xs[1], xs[2]);
        if lengths.len() != b {
            return Err(TensorError::Dimension(format!("{} lengths for batch of {b}", lengths.len())));
        }
        for &l in lengths {
            if l > n || l == 0 {
                return Err(TensorError::SequenceLength { length: l, max: n });
            }
        }
        let ws = self.shape(weights[0]).to_vec();
        if ws.len() != 2 || ws[1] != din || !ws[0].is_multiple_of(4) {
            return Err(TensorError::Dimension(format!("input weight {ws:?} incompatible with Din={din}")));
        }
        let hidden = ws[0] / 4;
        for d in 0..2 {
            if self.shape(weights[3 * d]) != [4 * hidden, din]
                || self.shape(weights[3 * d + 1]) != [4 * hidden, hidden]
                || self.shape(weights[3 * d + 2]) != [4 * hidden]
            {
                return Err(TensorError::Dimension("inconsistent LSTM weight shapes".into()));
            }
        }
        let x = self.value(input);
        let dims = lstm::Dims { batch: b, steps: n, input: din, hidden };
        let fwd = lstm::forward_direction(x, dims, lengths, self.value(weights[0]), self.value(weights[1]), self.value(weights[2]), false);
        let bwd = lstm::forward_direction(x, dims, lengths, self.value(weights[3]), self.value(weights[4]), self.value(weights[5]), true);
        let mut out = vec![T::zero(); b * n * 2 * hidden];
        for row in 0..b * n {
            out[row * 2 * hidden..row * 2 * hidden + hidden].copy_from_slice(&fwd.hidden[row * hidden..(row + 1) * hidden]);
            out[row * 2 * hidden + hidden..(row + 1) * 2 * hidden].copy_from_slice(&bwd.hidden[row * hidden..(row + 1) * hidden]);
        }
        let mut all = vec![input];
        all.extend_from_slice(&weights);
        let rg = self.rg(&all);
        Ok(self.push(
            vec![b, n, 2 * hidden],
            out,
            rg,
            Op::Bilstm { input, weights, lengths: lengths.to_vec(), cache: Box::new([fwd, bwd]) },
        ))
    }

    /// Many-to-one readout of a bidirectional output `[B, N, 2H]`: the
    /// forward half at the last valid step concatenated with the backward
    /// half at step 0, giving `[B, 2H]`.
    pub fn final_states(&mut self, input: Var, lengths: &[usize]) -> Result<Var, TensorError> {
        let xs = self.shape(input).to_vec();
        if xs.len() != 3 || !xs[2].is_multiple_of(2) || lengths.len() != xs[0] {
            return Err(TensorError::Shape(format!("final_states expects [B, N, 2H] and B lengths, got {xs:?}")));
        }
        let (b, n, two_h) = (xs[0], xs[1], xs[2]);
        let h = two_h / 2;
        let x = self.value(input);
        let mut out = vec![T::zero(); b * two_h];
        for (bi, &len) in lengths.iter().enumerate() {
            if len == 0 || len > n {
                return Err(TensorError::SequenceLength { length: len, max: n });
            }
            let last = (bi * n + len - 1) * two_h;
            let first = (bi * n) * two_h;
            out[bi * two_h..bi * two_h + h].copy_from_slice(&x[last..last + h]);
            out[bi * two_h + h..(bi + 1) * two_h].copy_from_slice(&x[first + h..first + two_h]);
        }
        let rg = self.rg(&[input]);
        Ok(self.push(vec![b, two_h], out, rg, Op::FinalStates { input, lengths: lengths.to_vec() }))
    }

    /// Mean squared error against a constant target.
    pub fn mse_loss(&mut self, pred: Var, target: &[T]) -> Result<Var, TensorError> {
        let p = self.value(pred);
        if p.is_empty() || target.is_empty() {
            return Err(TensorError::EmptyBatch);
        }
        if p.len() != target.len() {
            return Err(TensorError::Dimension(format!("{} predictions for {} targets", p.len(), target.len())));
        }
        let n = T::of(p.len() as f64);
        let loss = p.iter().zip(target).map(|(&a, &b)| (a - b) * (a - b)).sum::<T>() / n;
        let rg = self.rg(&[pred]);
        Ok(self.push(vec![1], vec![loss], rg, Op::Mse { pred, target: target.to_vec() }))
    }

    /// Scalar `sum(weights * input)`.
    pub fn dot(&mut self, input: Var, weights: &[T]) -> Result<Var, TensorError> {
        if weights.len() != self.value(input).len() {
            return Err(TensorError::Dimension("dot weights length".into()));
        }
        let s = self.value(input).iter().zip(weights).map(|(&a, &b)| a * b).sum();
        let rg = self.rg(&[input]);
        Ok(self.push(vec![1], vec![s], rg, Op::Dot { input, weights: weights.to_vec() }))
    }

    /// Elementwise sum of two equally shaped nodes.
    pub fn add(&mut self, a: Var, b: Var) -> Result<Var, TensorError> {
        if self.shape(a) != self.shape(b) {
            return Err(TensorError::Shape(format!("cannot add {:?} and {:?}", self.shape(a), self.shape(b))));
        }
        let out = self.value(a).iter().zip(self.value(b)).map(|(&x, &y)| x + y).collect();
        let rg = self.rg(&[a, b]);
        Ok(self.push(self.shape(a).to_vec(), out, rg, Op::Add { a, b }))
    }

    pub fn sum(&mut self, input: Var) -> Var {
        let s = self.value(input).iter().copied().sum();
        let rg = self.rg(&[input]);
        self.push(vec![1], vec![s], rg, Op::Sum { input })
    }

    /// Reverse pass from a scalar loss. Every gradient-requiring leaf ends up
    /// with a gradient (zeros when unreachable). A graph supports one pass.
    pub fn backward(&mut self, loss: Var) -> Result<(), TensorError> {
        if self.consumed {
            return Err(TensorError::GraphConsumed);
        }
        if self.value(loss).len() != 1 {
            return Err(TensorError::NonScalarLoss(self.shape(loss).to_vec()));
        }
        self.consumed = true;
        let mut grads: Vec<Option<Vec<T>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(vec![T::one()]);
        for id in (0..=loss.0).rev() {
            let node = &self.nodes[id];
            if !node.requires_grad {
                continue;
            }
            let Some(g) = grads[id].take() else { continue };
            if matches!(node.op, Op::Leaf) {
                grads[id] = Some(g);
                continue;
            }
            self.backward_node(id, &g, &mut grads);
        }
        for (id, node) in self.nodes.iter().enumerate() {
            if matches!(node.op, Op::Leaf) && node.requires_grad && grads[id].is_none() {
                grads[id] = Some(vec![T::zero(); node.value.len()]);
            }
        }
        self.grads = grads;
        Ok(())
    }

    fn backward_node(&self, id: usize, g: &[T], grads: &mut [Option<Vec<T>>]) {
        let node = &self.nodes[id];
        let rg = |v: &Var| self.nodes[v.0].requires_grad;
        match &node.op {
            Op::Leaf => {}
            Op::Conv2d { input, weight, bias, cols } => {
                let xs = self.shape(*input);
                let (b, cin, h, w) = (xs[0], xs[1], xs[2], xs[3]);
                let cout = node.shape[1];
                let hw = h * w;
                // [B, Cout, HW] -> [Cout, B*HW]
                let mut gt = vec![T::zero(); cout * b * hw];
                for n in 0..b {
                    for co in 0..cout {
                        gt[co * b * hw + n * hw..co * b * hw + (n + 1) * hw]
                            .copy_from_slice(&g[(n * cout + co) * hw..(n * cout + co + 1) * hw]);
                    }
                }
                if let Some(bias) = bias.filter(|b| rg(b)) {
                    let gb = grad_slot(grads, bias, cout);
                    for co in 0..cout {
                        gb[co] = gb[co] + gt[co * b * hw..(co + 1) * b * hw].iter().copied().sum::<T>();
                    }
                }
                if rg(weight) {
                    let gw = grad_slot(grads, *weight, cout * cin * 9);
                    gemm(false, true, cout, cin * 9, b * hw, T::one(), &gt, cols, T::one(), gw);
                }
                if rg(input) {
                    let mut dcols = vec![T::zero(); cin * 9 * b * hw];
                    gemm(true, false, cin * 9, b * hw, cout, T::one(), self.value(*weight), &gt, T::zero(), &mut dcols);
                    let gx = grad_slot(grads, *input, b * cin * hw);
                    col2im_add(&dcols, gx, b, cin, h, w);
                }
            }
            Op::BatchNorm { input, gamma, beta, xhat, inv_std, train } => {
                let xs = self.shape(*input);
                let (b, c, hw) = (xs[0], xs[1], xs[2] * xs[3]);
                let n = T::of((b * hw) as f64);
                let gamma_v = self.value(*gamma);
                let mut sum_g = vec![T::zero(); c];
                let mut sum_gx = vec![T::zero(); c];
                for bi in 0..b {
                    for ch in 0..c {
                        for i in (bi * c + ch) * hw..(bi * c + ch + 1) * hw {
                            sum_g[ch] = sum_g[ch] + g[i];
                            sum_gx[ch] = sum_gx[ch] + g[i] * xhat[i];
                        }
                    }
                }
                if rg(gamma) {
                    add_into(grad_slot(grads, *gamma, c), &sum_gx);
                }
                if rg(beta) {
                    add_into(grad_slot(grads, *beta, c), &sum_g);
                }
                if rg(input) {
                    let gx = grad_slot(grads, *input, b * c * hw);
                    for bi in 0..b {
                        for ch in 0..c {
                            let k = gamma_v[ch] * inv_std[ch];
                            for i in (bi * c + ch) * hw..(bi * c + ch + 1) * hw {
                                let d = if *train {
                                    k * (g[i] - sum_g[ch] / n - xhat[i] * sum_gx[ch] / n)
                                } else {
                                    k * g[i]
                                };
                                gx[i] = gx[i] + d;
                            }
                        }
                    }
                }
            }
            Op::Relu { input } => {
                let x = self.value(*input);
                let gx = grad_slot(grads, *input, x.len());
                for i in 0..x.len() {
                    if x[i] > T::zero() {
                        gx[i] = gx[i] + g[i];
                    }
                }
            }
            Op::MaxPool { input, argmax } => {
                let gx = grad_slot(grads, *input, self.value(*input).len());
                for (o, &src) in argmax.iter().enumerate() {
                    gx[src] = gx[src] + g[o];
                }
            }
            Op::Dropout { input, mask } => {
                let gx = grad_slot(grads, *input, mask.len());
                for i in 0..mask.len() {
                    gx[i] = gx[i] + g[i] * mask[i];
                }
            }
            Op::Linear { input, weight, bias } => {
                let ws = self.shape(*weight);
                let (dout, din) = (ws[0], ws[1]);
                let m = g.len() / dout;
                if rg(bias) {
                    let gb = grad_slot(grads, *bias, dout);
                    for row in g.chunks(dout) {
                        add_into(gb, row);
                    }
                }
                if rg(weight) {
                    let gw = grad_slot(grads, *weight, dout * din);
                    gemm(true, false, dout, din, m, T::one(), g, self.value(*input), T::one(), gw);
                }
                if rg(input) {
                    let gx = grad_slot(grads, *input, m * din);
                    gemm(false, false, m, din, dout, T::one(), g, self.value(*weight), T::one(), gx);
                }
            }
            Op::Reshape { input } => {
                add_into(grad_slot(grads, *input, g.len()), g);
            }
            Op::PadSequences { input, lengths } => {
                let (max_len, d) = (node.shape[1], node.shape[2]);
                let total: usize = lengths.iter().sum();
                let gx = grad_slot(grads, *input, total * d);
                let mut row = 0;
                for (b, &l) in lengths.iter().enumerate() {
                    add_into(&mut gx[row * d..(row + l) * d], &g[b * max_len * d..(b * max_len + l) * d]);
                    row += l;
                }
            }
            Op::Bilstm { input, weights, lengths, cache } => {
                let xs = self.shape(*input);
                let (b, n, din) = (xs[0], xs[1], xs[2]);
                let hidden = node.shape[2] / 2;
                let dims = lstm::Dims { batch: b, steps: n, input: din, hidden };
                let x = self.value(*input);
                let mut gx = vec![T::zero(); x.len()];
                for d in 0..2 {
                    let mut dout = vec![T::zero(); b * n * hidden];
                    for row in 0..b * n {
                        let off = row * 2 * hidden + d * hidden;
                        dout[row * hidden..(row + 1) * hidden].copy_from_slice(&g[off..off + hidden]);
                    }
                    let w_ih = self.value(weights[3 * d]);
                    let w_hh = self.value(weights[3 * d + 1]);
                    let grads_d = lstm::backward_direction(&cache[d], &dout, x, dims, lengths, w_ih, w_hh, d == 1);
                    add_into(&mut gx, &grads_d.input);
                    for (k, part) in [grads_d.w_ih, grads_d.w_hh, grads_d.bias].into_iter().enumerate() {
                        let var = weights[3 * d + k];
                        if rg(&var) {
                            add_into(grad_slot(grads, var, part.len()), &part);
                        }
                    }
                }
                if rg(input) {
                    add_into(grad_slot(grads, *input, gx.len()), &gx);
                }
            }
            Op::FinalStates { input, lengths } => {
                let xs = self.shape(*input);
                let (n, two_h) = (xs[1], xs[2]);
                let h = two_h / 2;
                let gx = grad_slot(grads, *input, xs.iter().product());
                for (bi, &len) in lengths.iter().enumerate() {
                    let last = (bi * n + len - 1) * two_h;
                    let first = (bi * n) * two_h;
                    add_into(&mut gx[last..last + h], &g[bi * two_h..bi * two_h + h]);
                    add_into(&mut gx[first + h..first + two_h], &g[bi * two_h + h..(bi + 1) * two_h]);
                }
            }
            Op::Mse { pred, target } => {
                let p = self.value(*pred);
                let scale = g[0] * T::of(2.0 / p.len() as f64);
                let gp = grad_slot(grads, *pred, p.len());
                for i in 0..p.len() {
                    gp[i] = gp[i] + scale * (p[i] - target[i]);
                }
            }
            Op::Dot { input, weights } => {
                let gx = grad_slot(grads, *input, weights.len());
                for i in 0..weights.len() {
                    gx[i] = gx[i] + g[0] * weights[i];
                }
            }
            Op::Add { a, b } => {
                for v in [a, b] {
                    if rg(v) {
                        add_into(grad_slot(grads, *v, g.len()), g);
                    }
                }
            }
            Op::Sum { input } => {
                let gx = grad_slot(grads, *input, self.value(*input).len());
                for v in gx.iter_mut() {
                    *v = *v + g[0];
                }
            }
        }
    }
}

/// Unfolds 3x3 neighbourhoods: rows `(ci, ky, kx)`, columns `(b, y, x)`.
fn im2col<T: Real>(x: &[T], b: usize, cin: usize, h: usize, w: usize) -> Vec<T> {
    let hw = h * w;
    let ncol = b * hw;
    let mut cols = vec![T::zero(); cin * 9 * ncol];
    for ci in 0..cin {
        for ky in 0..3 {
            for kx in 0..3 {
                let row = (ci * 9 + ky * 3 + kx) * ncol;
                for n in 0..b {
                    let plane = &x[(n * cin + ci) * hw..(n * cin + ci + 1) * hw];
                    for y in 0..h {
                        let sy = y + ky;
                        if sy < 1 || sy > h {
                            continue;
                        }
                        let src = &plane[(sy - 1) * w..sy * w];
                        let dst = &mut cols[row + n * hw + y * w..row + n * hw + (y + 1) * w];
                        match kx {
                            0 => dst[1..].copy_from_slice(&src[..w - 1]),
                            1 => dst.copy_from_slice(src),
                            _ => dst[..w - 1].copy_from_slice(&src[1..]),
                        }
                    }
                }
            }
        }
    }
    cols
}

fn col2im_add<T: Real>(cols: &[T], gx: &mut [T], b: usize, cin: usize, h: usize, w: usize) {
    let hw = h * w;
    let ncol = b * hw;
    for ci in 0..cin {
        for ky in 0..3 {
            for kx in 0..3 {
                let row = (ci * 9 + ky * 3 + kx) * ncol;
                for n in 0..b {
                    for y in 0..h {
                        let sy = y + ky;
                        if sy < 1 || sy > h {
                            continue;
                        }
                        let src = &cols[row + n * hw + y * w..row + n * hw + (y + 1) * w];
                        let base = (n * cin + ci) * hw + (sy - 1) * w;
                        let dst = &mut gx[base..base + w];
                        match kx {
                            0 => add_into(&mut dst[..w - 1], &src[1..]),
                            1 => add_into(dst, src),
                            _ => add_into(&mut dst[1..], &src[..w - 1]),
                        }
                    }
                }
            }
        }
    }
}
