use rand::Rng;

use super::optim::{ParamId, ParamSet};
use super::{Result, Tensor, TensorError};

/// Handle to a node recorded on a [`Graph`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

#[derive(Debug)]
enum Op {
    Leaf,
    MatMul(Var, Var),
    AddBias(Var, Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    AddScalar(Var),
    Relu(Var),
    Sigmoid(Var),
    Tanh(Var),
    Exp(Var),
    Conv1d { input: Var, kernels: Var, bias: Var },
    Softmax(Var),
    Dropout(Var, Vec<f64>),
    MeanLast(Var),
    ChannelScale(Var, Var),
    SliceLast { src: Var, start: usize },
    ConcatLast(Var, Var),
    Reshape(Var),
    Sum(Var),
    Mean(Var),
    Clamp(Var, f64, f64),
    SmoothL1(Var, Var),
    Bce { pred: Var, target: Vec<f64>, weights: Vec<f64> },
}

#[derive(Debug)]
struct Node {
    shape: Vec<usize>,
    value: Vec<f64>,
    op: Op,
    requires_grad: bool,
    param: Option<ParamId>,
}

/// Gate weights of one LSTM cell. Gates are packed along the last axis in
/// the order input, forget, candidate, output.
#[derive(Debug, Clone, Copy)]
pub struct LstmWeights {
    /// `[d_in, 4 * hidden]`
    pub w_ih: Var,
    /// `[hidden, 4 * hidden]`
    pub w_hh: Var,
    /// `[4 * hidden]`
    pub bias: Var,
}

/// Recorded hidden and cell state of an LSTM, each `[batch, hidden]`.
#[derive(Debug, Clone, Copy)]
pub struct LstmState {
    pub hidden: Var,
    pub cell: Var,
}

/// Clamp bounds used by [`Graph::bce`] to keep the logarithms finite.
pub const BCE_EPS: f64 = 1e-7;

/// Operation tape for reverse-mode differentiation.
#[derive(Debug, Default)]
pub struct Graph {
    nodes: Vec<Node>,
    grads: Vec<Option<Vec<f64>>>,
}

fn shape_err<T>(msg: String) -> Result<T> {
    Err(TensorError::ShapeMismatch(msg))
}

impl Graph {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, shape: Vec<usize>, value: Vec<f64>, op: Op, requires_grad: bool) -> Var {
        debug_assert_eq!(shape.iter().product::<usize>(), value.len());
        self.nodes.push(Node {
            shape,
            value,
            op,
            requires_grad,
            param: None,
        });
        Var(self.nodes.len() - 1)
    }

    fn node(&self, v: Var) -> &Node {
        &self.nodes[v.0]
    }

    fn rg(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Records a leaf. Gradients for it are available through [`Graph::grad`].
    pub fn leaf(&mut self, t: Tensor, requires_grad: bool) -> Var {
        let rg = requires_grad || t.requires_grad();
        let shape = t.shape().to_vec();
        self.push(shape, t.into_data(), Op::Leaf, rg)
    }

    pub fn constant(&mut self, t: Tensor) -> Var {
        self.leaf(t, false)
    }

    /// Records a model parameter as a trainable leaf.
    pub fn param(&mut self, params: &ParamSet, id: ParamId) -> Var {
        let t = &params.get(id).tensor;
        let v = self.push(t.shape().to_vec(), t.data().to_vec(), Op::Leaf, true);
        self.nodes[v.0].param = Some(id);
        v
    }

    pub fn value(&self, v: Var) -> &[f64] {
        &self.node(v).value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        &self.node(v).shape
    }

    pub fn tensor(&self, v: Var) -> Tensor {
        let n = self.node(v);
        Tensor::from_vec(n.shape.clone(), n.value.clone()).expect("graph node shape is valid")
    }

    pub fn item(&self, v: Var) -> Option<f64> {
        let n = self.node(v);
        (n.value.len() == 1).then(|| n.value[0])
    }

    pub fn grad(&self, v: Var) -> Option<&[f64]> {
        self.grads.get(v.0).and_then(|g| g.as_deref())
    }

    pub(crate) fn param_grads(&self) -> impl Iterator<Item = (ParamId, &[f64])> {
        self.nodes.iter().enumerate().filter_map(|(i, n)| {
            let id = n.param?;
            let g = self.grads.get(i)?.as_deref()?;
            Some((id, g))
        })
    }

    fn unary(&mut self, a: Var, f: impl Fn(f64) -> f64, op: Op) -> Var {
        let n = self.node(a);
        let value = n.value.iter().map(|&x| f(x)).collect();
        let shape = n.shape.clone();
        let rg = n.requires_grad;
        self.push(shape, value, op, rg)
    }

    fn same_shape(&self, a: Var, b: Var, what: &str) -> Result<()> {
        if self.shape(a) != self.shape(b) {
            return shape_err(format!(
                "{what}: {:?} vs {:?}",
                self.shape(a),
                self.shape(b)
            ));
        }
        Ok(())
    }

    fn binary(&mut self, a: Var, b: Var, f: impl Fn(f64, f64) -> f64, op: Op) -> Var {
        let value = self
            .value(a)
            .iter()
            .zip(self.value(b))
            .map(|(&x, &y)| f(x, y))
            .collect();
        let shape = self.shape(a).to_vec();
        let rg = self.rg(a) || self.rg(b);
        self.push(shape, value, op, rg)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b, "add")?;
        Ok(self.binary(a, b, |x, y| x + y, Op::Add(a, b)))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b, "sub")?;
        Ok(self.binary(a, b, |x, y| x - y, Op::Sub(a, b)))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b, "mul")?;
        Ok(self.binary(a, b, |x, y| x * y, Op::Mul(a, b)))
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Var {
        self.unary(a, |x| x * c, Op::Scale(a, c))
    }

    pub fn add_scalar(&mut self, a: Var, c: f64) -> Var {
        self.unary(a, |x| x + c, Op::AddScalar(a))
    }

    /// Elementwise `max(0, x)`; the subgradient at zero is zero.
    pub fn relu(&mut self, a: Var) -> Var {
        self.unary(a, |x| x.max(0.0), Op::Relu(a))
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        self.unary(a, sigmoid, Op::Sigmoid(a))
    }

    pub fn tanh(&mut self, a: Var) -> Var {
        self.unary(a, f64::tanh, Op::Tanh(a))
    }

    pub fn exp(&mut self, a: Var) -> Var {
        self.unary(a, f64::exp, Op::Exp(a))
    }

    pub fn clamp(&mut self, a: Var, lo: f64, hi: f64) -> Var {
        self.unary(a, |x| x.clamp(lo, hi), Op::Clamp(a, lo, hi))
    }

    pub fn reshape(&mut self, a: Var, shape: Vec<usize>) -> Result<Var> {
        if shape.iter().product::<usize>() != self.value(a).len() {
            return shape_err(format!("reshape {:?} -> {shape:?}", self.shape(a)));
        }
        let value = self.value(a).to_vec();
        let rg = self.rg(a);
        Ok(self.push(shape, value, Op::Reshape(a), rg))
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let s = self.value(a).iter().sum();
        let rg = self.rg(a);
        self.push(vec![1], vec![s], Op::Sum(a), rg)
    }

    pub fn mean(&mut self, a: Var) -> Var {
        let v = self.value(a);
        let m = v.iter().sum::<f64>() / v.len() as f64;
        let rg = self.rg(a);
        self.push(vec![1], vec![m], Op::Mean(a), rg)
    }

    /// `[n, k] x [k, m] -> [n, m]`
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[0] {
            return shape_err(format!("matmul {sa:?} x {sb:?}"));
        }
        let (n, k, m) = (sa[0], sa[1], sb[1]);
        let (av, bv) = (self.value(a), self.value(b));
        let mut out = vec![0.0; n * m];
        for i in 0..n {
            let row = &mut out[i * m..(i + 1) * m];
            for p in 0..k {
                let x = av[i * k + p];
                if x == 0.0 {
                    continue;
                }
                for (o, &w) in row.iter_mut().zip(&bv[p * m..(p + 1) * m]) {
                    *o += x * w;
                }
            }
        }
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(vec![n, m], out, Op::MatMul(a, b), rg))
    }

    /// Adds `bias[m]` to every slice along the last axis of `x[..., m]`.
    pub fn add_bias(&mut self, x: Var, bias: Var) -> Result<Var> {
        let m = *self.shape(x).last().unwrap();
        if self.shape(bias) != [m] {
            return shape_err(format!(
                "bias {:?} for input {:?}",
                self.shape(bias),
                self.shape(x)
            ));
        }
        let bv = self.value(bias);
        let value = self
            .value(x)
            .iter()
            .enumerate()
            .map(|(i, &v)| v + bv[i % m])
            .collect();
        let shape = self.shape(x).to_vec();
        let rg = self.rg(x) || self.rg(bias);
        Ok(self.push(shape, value, Op::AddBias(x, bias), rg))
    }

    /// Fully connected layer: `input[batch, d_in] · weight[d_in, d_out] + bias[d_out]`.
    pub fn linear(&mut self, input: Var, weight: Var, bias: Var) -> Result<Var> {
        let y = self.matmul(input, weight)?;
        self.add_bias(y, bias)
    }

    /// Valid-mode, stride-1 convolution over `[batch, c_in, len]` with
    /// kernels `[c_out, c_in, k]`.
    pub fn conv1d(&mut self, input: Var, kernels: Var, bias: Var) -> Result<Var> {
        let (si, sk, sb) = (self.shape(input), self.shape(kernels), self.shape(bias));
        if si.len() != 3 || sk.len() != 3 || si[1] != sk[1] || sb != [sk[0]] {
            return shape_err(format!("conv1d input {si:?} kernels {sk:?} bias {sb:?}"));
        }
        let (batch, c_in, len) = (si[0], si[1], si[2]);
        let (c_out, k) = (sk[0], sk[2]);
        if k > len {
            return Err(TensorError::KernelTooLong { kernel: k, length: len });
        }
        let out_len = len - k + 1;
        let (xv, kv, bv) = (self.value(input), self.value(kernels), self.value(bias));
        let mut out = vec![0.0; batch * c_out * out_len];
        for b in 0..batch {
            for o in 0..c_out {
                let dst = &mut out[(b * c_out + o) * out_len..(b * c_out + o + 1) * out_len];
                dst.fill(bv[o]);
                for c in 0..c_in {
                    let src = &xv[(b * c_in + c) * len..(b * c_in + c + 1) * len];
                    let ker = &kv[(o * c_in + c) * k..(o * c_in + c + 1) * k];
                    for (j, &w) in ker.iter().enumerate() {
                        for (d, &x) in dst.iter_mut().zip(&src[j..j + out_len]) {
                            *d += w * x;
                        }
                    }
                }
            }
        }
        let rg = self.rg(input) || self.rg(kernels) || self.rg(bias);
        Ok(self.push(
            vec![batch, c_out, out_len],
            out,
            Op::Conv1d { input, kernels, bias },
            rg,
        ))
    }

    /// Numerically stable softmax over the last axis.
    pub fn softmax(&mut self, a: Var) -> Var {
        let n = *self.shape(a).last().unwrap();
        let mut out = self.value(a).to_vec();
        for slice in out.chunks_mut(n) {
            let max = slice.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let mut total = 0.0;
            for x in slice.iter_mut() {
                *x = (*x - max).exp();
                total += *x;
            }
            slice.iter_mut().for_each(|x| *x /= total);
        }
        let shape = self.shape(a).to_vec();
        let rg = self.rg(a);
        self.push(shape, out, Op::Softmax(a), rg)
    }

    /// Inverted dropout. Identity when `training` is false or `p == 0`.
    pub fn dropout<R: Rng + ?Sized>(
        &mut self,
        a: Var,
        p: f64,
        training: bool,
        rng: &mut R,
    ) -> Result<Var> {
        if !(0.0..1.0).contains(&p) {
            return Err(TensorError::InvalidProbability(p));
        }
        if !training || p == 0.0 {
            return Ok(a);
        }
        let keep = 1.0 / (1.0 - p);
        let mask: Vec<f64> = (0..self.value(a).len())
            .map(|_| if rng.gen::<f64>() < p { 0.0 } else { keep })
            .collect();
        let value = self.value(a).iter().zip(&mask).map(|(x, m)| x * m).collect();
        let shape = self.shape(a).to_vec();
        let rg = self.rg(a);
        Ok(self.push(shape, value, Op::Dropout(a, mask), rg))
    }

    /// Mean over the last axis: `[..., n] -> [...]`.
    pub fn mean_last(&mut self, a: Var) -> Var {
        let shape = self.shape(a);
        let n = *shape.last().unwrap();
        let mut out_shape = shape[..shape.len() - 1].to_vec();
        if out_shape.is_empty() {
            out_shape.push(1);
        }
        let value = self
            .value(a)
            .chunks(n)
            .map(|c| c.iter().sum::<f64>() / n as f64)
            .collect();
        let rg = self.rg(a);
        self.push(out_shape, value, Op::MeanLast(a), rg)
    }

    /// `x[b, c, t] * s[b, c]`.
    pub fn channel_scale(&mut self, x: Var, s: Var) -> Result<Var> {
        let sx = self.shape(x);
        if sx.len() != 3 || self.shape(s) != &sx[..2] {
            return shape_err(format!("channel scale {sx:?} by {:?}", self.shape(s)));
        }
        let len = sx[2];
        let sv = self.value(s);
        let value = self
            .value(x)
            .iter()
            .enumerate()
            .map(|(i, &v)| v * sv[i / len])
            .collect();
        let shape = sx.to_vec();
        let rg = self.rg(x) || self.rg(s);
        Ok(self.push(shape, value, Op::ChannelScale(x, s), rg))
    }

    /// Elements `start..start + len` of the last axis.
    pub fn slice_last(&mut self, src: Var, start: usize, len: usize) -> Result<Var> {
        let shape = self.shape(src);
        let n = *shape.last().unwrap();
        if len == 0 || start + len > n {
            return shape_err(format!("slice {start}..{} of axis {n}", start + len));
        }
        let value = self
            .value(src)
            .chunks(n)
            .flat_map(|c| c[start..start + len].iter().copied())
            .collect();
        let mut out_shape = shape.to_vec();
        *out_shape.last_mut().unwrap() = len;
        let rg = self.rg(src);
        Ok(self.push(out_shape, value, Op::SliceLast { src, start }, rg))
    }

    pub fn concat_last(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa.len() != sb.len() || sa[..sa.len() - 1] != sb[..sb.len() - 1] {
            return shape_err(format!("concat {sa:?} with {sb:?}"));
        }
        let (na, nb) = (*sa.last().unwrap(), *sb.last().unwrap());
        let value = self
            .value(a)
            .chunks(na)
            .zip(self.value(b).chunks(nb))
            .flat_map(|(x, y)| x.iter().chain(y).copied())
            .collect();
        let mut shape = sa.to_vec();
        *shape.last_mut().unwrap() = na + nb;
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(shape, value, Op::ConcatLast(a, b), rg))
    }

    /// Softmax channel weights for [`Graph::channel_attention`], `[batch, channels]`.
    pub fn attention_scores(&mut self, input: Var, w1: Var, w2: Var) -> Result<Var> {
        let si = self.shape(input).to_vec();
        if si.len() != 3 {
            return shape_err(format!("attention input {si:?}"));
        }
        let (s1, s2) = (self.shape(w1), self.shape(w2));
        if s1.len() != 2 || s2.len() != 2 || s1[0] != si[1] || s2 != [s1[1], si[1]] {
            return shape_err(format!("attention weights {s1:?}, {s2:?} for {si:?}"));
        }
        let pooled = self.mean_last(input);
        let pooled = self.reshape(pooled, vec![si[0], si[1]])?;
        let hidden = self.matmul(pooled, w1)?;
        let hidden = self.relu(hidden);
        let logits = self.matmul(hidden, w2)?;
        Ok(self.softmax(logits))
    }

    /// Squeeze-excitation style channel attention. Channels are rescaled by
    /// `channels * softmax(score)`, so uniform scores leave the input as is.
    pub fn channel_attention(&mut self, input: Var, w1: Var, w2: Var) -> Result<Var> {
        let channels = self.shape(input)[1];
        let scores = self.attention_scores(input, w1, w2)?;
        let scores = self.scale(scores, channels as f64);
        self.channel_scale(input, scores)
    }

    /// One LSTM cell step over a batch: `input[batch, d_in]`.
    pub fn lstm_step(&mut self, input: Var, state: LstmState, w: &LstmWeights) -> Result<LstmState> {
        let hidden = self.shape(state.hidden).to_vec();
        if hidden.len() != 2 || self.shape(state.cell) != hidden.as_slice() {
            return shape_err(format!(
                "lstm state {hidden:?} / {:?}",
                self.shape(state.cell)
            ));
        }
        let h = hidden[1];
        if self.shape(w.w_hh) != [h, 4 * h] || self.shape(w.bias) != [4 * h] {
            return shape_err(format!(
                "lstm weights w_hh {:?} bias {:?} for hidden {h}",
                self.shape(w.w_hh),
                self.shape(w.bias)
            ));
        }
        let xi = self.matmul(input, w.w_ih)?;
        let hh = self.matmul(state.hidden, w.w_hh)?;
        let gates = self.add(xi, hh)?;
        let gates = self.add_bias(gates, w.bias)?;
        let i = self.slice_last(gates, 0, h)?;
        let i = self.sigmoid(i);
        let f = self.slice_last(gates, h, h)?;
        let f = self.sigmoid(f);
        let g = self.slice_last(gates, 2 * h, h)?;
        let g = self.tanh(g);
        let o = self.slice_last(gates, 3 * h, h)?;
        let o = self.sigmoid(o);
        let keep = self.mul(f, state.cell)?;
        let write = self.mul(i, g)?;
        let cell = self.add(keep, write)?;
        let squashed = self.tanh(cell);
        let hidden = self.mul(o, squashed)?;
        Ok(LstmState { hidden, cell })
    }

    /// Mean Smooth-L1 over all elements of `pred - target`.
    pub fn smooth_l1(&mut self, pred: Var, target: Var) -> Result<Var> {
        self.same_shape(pred, target, "smooth_l1")?;
        let n = self.value(pred).len() as f64;
        let total: f64 = self
            .value(pred)
            .iter()
            .zip(self.value(target))
            .map(|(p, t)| smooth_l1(p - t))
            .sum();
        let rg = self.rg(pred) || self.rg(target);
        Ok(self.push(vec![1], vec![total / n], Op::SmoothL1(pred, target), rg))
    }

    /// Mean weighted binary cross-entropy of predictions against fixed
    /// targets. `weights` has one entry per element of the last axis.
    /// Predictions are clamped to `[BCE_EPS, 1 - BCE_EPS]`.
    pub fn bce(&mut self, pred: Var, target: &[f64], weights: &[f64]) -> Result<Var> {
        let n = self.value(pred).len();
        let last = *self.shape(pred).last().unwrap();
        if target.len() != n || weights.len() != last {
            return shape_err(format!(
                "bce prediction {:?}, {} targets, {} weights",
                self.shape(pred),
                target.len(),
                weights.len()
            ));
        }
        let total: f64 = self
            .value(pred)
            .iter()
            .zip(target)
            .enumerate()
            .map(|(i, (&p, &x))| weights[i % last] * bce_term(p, x))
            .sum();
        let rg = self.rg(pred);
        Ok(self.push(
            vec![1],
            vec![total / n as f64],
            Op::Bce {
                pred,
                target: target.to_vec(),
                weights: weights.to_vec(),
            },
            rg,
        ))
    }

    /// Reverse pass from a scalar `loss`. Gradients of earlier passes are
    /// discarded; parameter gradients accumulate in the [`ParamSet`].
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        let n = self.value(loss).len();
        if n != 1 {
            return Err(TensorError::NotScalar(n));
        }
        self.grads = vec![None; self.nodes.len()];
        if !self.rg(loss) {
            return Ok(());
        }
        self.grads[loss.0] = Some(vec![1.0]);
        for i in (0..=loss.0).rev() {
            let Some(g) = self.grads[i].take() else {
                continue;
            };
            self.propagate(i, &g);
            self.grads[i] = Some(g);
        }
        Ok(())
    }

    fn acc(&mut self, v: Var) -> Option<&mut [f64]> {
        let node = &self.nodes[v.0];
        if !node.requires_grad {
            return None;
        }
        let len = node.value.len();
        Some(self.grads[v.0].get_or_insert_with(|| vec![0.0; len]))
    }

    fn acc_elementwise(&mut self, v: Var, g: &[f64], f: impl Fn(usize, f64) -> f64) {
        if let Some(dst) = self.acc(v) {
            for (i, (d, &gi)) in dst.iter_mut().zip(g).enumerate() {
                *d += f(i, gi);
            }
        }
    }

    /// Like `acc_elementwise` for reductions, where the upstream gradient
    /// is shorter than the input.
    fn acc_indexed(&mut self, v: Var, f: impl Fn(usize) -> f64) {
        if let Some(dst) = self.acc(v) {
            for (i, d) in dst.iter_mut().enumerate() {
                *d += f(i);
            }
        }
    }

    fn propagate(&mut self, i: usize, g: &[f64]) {
        // Values needed by the rules are cloned only where the borrow of
        // `self.nodes` would otherwise overlap with the gradient buffers.
        let op = std::mem::replace(&mut self.nodes[i].op, Op::Leaf);
        match &op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                let (n, k) = (self.shape(*a)[0], self.shape(*a)[1]);
                let m = self.shape(*b)[1];
                if self.rg(*a) {
                    let bv = self.value(*b).to_vec();
                    let da = self.acc(*a).unwrap();
                    for r in 0..n {
                        for p in 0..k {
                            let brow = &bv[p * m..(p + 1) * m];
                            da[r * k + p] += g[r * m..(r + 1) * m]
                                .iter()
                                .zip(brow)
                                .map(|(x, y)| x * y)
                                .sum::<f64>();
                        }
                    }
                }
                if self.rg(*b) {
                    let av = self.value(*a).to_vec();
                    let db = self.acc(*b).unwrap();
                    for r in 0..n {
                        for p in 0..k {
                            let x = av[r * k + p];
                            if x == 0.0 {
                                continue;
                            }
                            for (d, &gv) in db[p * m..(p + 1) * m].iter_mut().zip(&g[r * m..]) {
                                *d += x * gv;
                            }
                        }
                    }
                }
            }
            Op::AddBias(x, b) => {
                self.acc_elementwise(*x, g, |_, gi| gi);
                let m = self.shape(*b)[0];
                if let Some(db) = self.acc(*b) {
                    for (j, &gi) in g.iter().enumerate() {
                        db[j % m] += gi;
                    }
                }
            }
            Op::Add(a, b) => {
                self.acc_elementwise(*a, g, |_, gi| gi);
                self.acc_elementwise(*b, g, |_, gi| gi);
            }
            Op::Sub(a, b) => {
                self.acc_elementwise(*a, g, |_, gi| gi);
                self.acc_elementwise(*b, g, |_, gi| -gi);
            }
            Op::Mul(a, b) => {
                let (av, bv) = (self.value(*a).to_vec(), self.value(*b).to_vec());
                self.acc_elementwise(*a, g, |j, gi| gi * bv[j]);
                self.acc_elementwise(*b, g, |j, gi| gi * av[j]);
            }
            Op::Scale(a, c) => {
                let c = *c;
                self.acc_elementwise(*a, g, |_, gi| gi * c);
            }
            Op::AddScalar(a) | Op::Reshape(a) => self.acc_elementwise(*a, g, |_, gi| gi),
            Op::Relu(a) => {
                let av = self.value(*a).to_vec();
                self.acc_elementwise(*a, g, |j, gi| if av[j] > 0.0 { gi } else { 0.0 });
            }
            Op::Sigmoid(a) => {
                let y = self.nodes[i].value.clone();
                self.acc_elementwise(*a, g, |j, gi| gi * y[j] * (1.0 - y[j]));
            }
            Op::Tanh(a) => {
                let y = self.nodes[i].value.clone();
                self.acc_elementwise(*a, g, |j, gi| gi * (1.0 - y[j] * y[j]));
            }
            Op::Exp(a) => {
                let y = self.nodes[i].value.clone();
                self.acc_elementwise(*a, g, |j, gi| gi * y[j]);
            }
            Op::Clamp(a, lo, hi) => {
                let av = self.value(*a).to_vec();
                let (lo, hi) = (*lo, *hi);
                self.acc_elementwise(*a, g, |j, gi| {
                    if av[j] >= lo && av[j] <= hi {
                        gi
                    } else {
                        0.0
                    }
                });
            }
            Op::Conv1d { input, kernels, bias } => {
                let si = self.shape(*input).to_vec();
                let sk = self.shape(*kernels).to_vec();
                let (batch, c_in, len) = (si[0], si[1], si[2]);
                let (c_out, k) = (sk[0], sk[2]);
                let out_len = len - k + 1;
                if self.rg(*input) {
                    let kv = self.value(*kernels).to_vec();
                    let dx = self.acc(*input).unwrap();
                    for b in 0..batch {
                        for o in 0..c_out {
                            let go = &g[(b * c_out + o) * out_len..(b * c_out + o + 1) * out_len];
                            for c in 0..c_in {
                                let ker = &kv[(o * c_in + c) * k..(o * c_in + c + 1) * k];
                                let dst = &mut dx[(b * c_in + c) * len..(b * c_in + c + 1) * len];
                                for (j, &w) in ker.iter().enumerate() {
                                    for (d, &gv) in dst[j..j + out_len].iter_mut().zip(go) {
                                        *d += w * gv;
                                    }
                                }
                            }
                        }
                    }
                }
                if self.rg(*kernels) {
                    let xv = self.value(*input).to_vec();
                    let dk = self.acc(*kernels).unwrap();
                    for b in 0..batch {
                        for o in 0..c_out {
                            let go = &g[(b * c_out + o) * out_len..(b * c_out + o + 1) * out_len];
                            for c in 0..c_in {
                                let src = &xv[(b * c_in + c) * len..(b * c_in + c + 1) * len];
                                for j in 0..k {
                                    dk[(o * c_in + c) * k + j] += src[j..j + out_len]
                                        .iter()
                                        .zip(go)
                                        .map(|(x, y)| x * y)
                                        .sum::<f64>();
                                }
                            }
                        }
                    }
                }
                if let Some(db) = self.acc(*bias) {
                    for (row, chunk) in g.chunks(out_len).enumerate() {
                        db[row % c_out] += chunk.iter().sum::<f64>();
                    }
                }
            }
            Op::Softmax(a) => {
                let y = self.nodes[i].value.clone();
                let n = *self.shape(*a).last().unwrap();
                if let Some(da) = self.acc(*a) {
                    for ((d, ys), gs) in da.chunks_mut(n).zip(y.chunks(n)).zip(g.chunks(n)) {
                        let dot: f64 = ys.iter().zip(gs).map(|(p, q)| p * q).sum();
                        for j in 0..n {
                            d[j] += ys[j] * (gs[j] - dot);
                        }
                    }
                }
            }
            Op::Dropout(a, mask) => self.acc_elementwise(*a, g, |j, gi| gi * mask[j]),
            Op::MeanLast(a) => {
                let n = *self.shape(*a).last().unwrap();
                self.acc_indexed(*a, |j| g[j / n] / n as f64);
            }
            Op::ChannelScale(x, s) => {
                let len = self.shape(*x)[2];
                let (xv, sv) = (self.value(*x).to_vec(), self.value(*s).to_vec());
                self.acc_elementwise(*x, g, |j, gi| gi * sv[j / len]);
                if let Some(ds) = self.acc(*s) {
                    for (j, (&gi, &xj)) in g.iter().zip(&xv).enumerate() {
                        ds[j / len] += gi * xj;
                    }
                }
            }
            Op::SliceLast { src, start } => {
                let n = *self.shape(*src).last().unwrap();
                let len = self.nodes[i].shape.last().copied().unwrap();
                let start = *start;
                if let Some(ds) = self.acc(*src) {
                    for (d, gs) in ds.chunks_mut(n).zip(g.chunks(len)) {
                        for (x, &y) in d[start..start + len].iter_mut().zip(gs) {
                            *x += y;
                        }
                    }
                }
            }
            Op::ConcatLast(a, b) => {
                let na = *self.shape(*a).last().unwrap();
                let nb = *self.shape(*b).last().unwrap();
                if let Some(da) = self.acc(*a) {
                    for (d, gs) in da.chunks_mut(na).zip(g.chunks(na + nb)) {
                        d.iter_mut().zip(&gs[..na]).for_each(|(x, y)| *x += y);
                    }
                }
                if let Some(db) = self.acc(*b) {
                    for (d, gs) in db.chunks_mut(nb).zip(g.chunks(na + nb)) {
                        d.iter_mut().zip(&gs[na..]).for_each(|(x, y)| *x += y);
                    }
                }
            }
            Op::Sum(a) => self.acc_indexed(*a, |_| g[0]),
            Op::Mean(a) => {
                let n = self.value(*a).len() as f64;
                self.acc_indexed(*a, |_| g[0] / n);
            }
            Op::SmoothL1(p, t) => {
                let n = self.value(*p).len() as f64;
                let diff: Vec<f64> = self
                    .value(*p)
                    .iter()
                    .zip(self.value(*t))
                    .map(|(a, b)| smooth_l1_slope(a - b) * g[0] / n)
                    .collect();
                self.acc_indexed(*p, |j| diff[j]);
                self.acc_indexed(*t, |j| -diff[j]);
            }
            Op::Bce { pred, target, weights } => {
                let pv = self.value(*pred).to_vec();
                let n = pv.len() as f64;
                let last = weights.len();
                self.acc_indexed(*pred, |j| {
                    let (p, x) = (pv[j], target[j]);
                    if !(BCE_EPS..=1.0 - BCE_EPS).contains(&p) {
                        return 0.0;
                    }
                    -weights[j % last] * (x / p - (1.0 - x) / (1.0 - p)) * g[0] / n
                });
            }
        }
        self.nodes[i].op = op;
    }
}

pub(crate) fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

pub(crate) fn smooth_l1(x: f64) -> f64 {
    if x.abs() < 1.0 {
        0.5 * x * x
    } else {
        x.abs() - 0.5
    }
}

fn smooth_l1_slope(x: f64) -> f64 {
    if x.abs() < 1.0 {
        x
    } else {
        x.signum()
    }
}

pub(crate) fn bce_term(pred: f64, target: f64) -> f64 {
    let p = pred.clamp(BCE_EPS, 1.0 - BCE_EPS);
    -(target * p.ln() + (1.0 - target) * (1.0 - p).ln())
}
