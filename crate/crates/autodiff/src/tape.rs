use crate::error::{AdError, Result};
use crate::kernels::{self, ConvGeometry};
use crate::tensor::Tensor;

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn id(self) -> usize {
        self.0
    }
}

#[derive(Clone, Debug)]
enum Op {
    Input,
    Param { offset: usize },
    MatMul(usize, usize),
    Conv2d { x: usize, w: usize, b: usize, geom: ConvGeometry },
    Add(usize, usize),
    Sub(usize, usize),
    Mul(usize, usize),
    Div(usize, usize),
    Scale(usize, f64),
    Shift(usize, f64),
    Relu(usize),
    LeakyRelu(usize, f64),
    Sigmoid(usize),
    Log(usize),
    Powf(usize, f64),
    Clamp(usize, f64, f64),
    Softmax(usize),
    LogSoftmax(usize),
    Sum(usize),
    Mean(usize),
    MeanSpatial(usize),
    Upsample { x: usize, factor: usize },
    AvgPool2(usize),
    Channel(usize, usize),
    Concat(Vec<usize>),
    Reshape(usize),
}

impl Op {
    fn inputs(&self) -> Vec<usize> {
        match *self {
            Op::Input | Op::Param { .. } => Vec::new(),
            Op::MatMul(a, b) | Op::Add(a, b) | Op::Sub(a, b) | Op::Mul(a, b) | Op::Div(a, b) => vec![a, b],
            Op::Conv2d { x, w, b, .. } => vec![x, w, b],
            Op::Scale(a, _)
            | Op::Shift(a, _)
            | Op::Relu(a)
            | Op::LeakyRelu(a, _)
            | Op::Sigmoid(a)
            | Op::Log(a)
            | Op::Powf(a, _)
            | Op::Clamp(a, _, _)
            | Op::Softmax(a)
            | Op::LogSoftmax(a)
            | Op::Sum(a)
            | Op::Mean(a)
            | Op::MeanSpatial(a)
            | Op::AvgPool2(a)
            | Op::Channel(a, _)
            | Op::Reshape(a) => vec![a],
            Op::Upsample { x, .. } => vec![x],
            Op::Concat(ref parts) => parts.clone(),
        }
    }

    fn name(&self) -> &'static str {
        match self {
            Op::Input => "input",
            Op::Param { .. } => "param",
            Op::MatMul(..) => "matmul",
            Op::Conv2d { .. } => "conv2d",
            Op::Add(..) => "add",
            Op::Sub(..) => "sub",
            Op::Mul(..) => "mul",
            Op::Div(..) => "div",
            Op::Scale(..) => "scale",
            Op::Shift(..) => "shift",
            Op::Relu(_) => "relu",
            Op::LeakyRelu(..) => "leaky_relu",
            Op::Sigmoid(_) => "sigmoid",
            Op::Log(_) => "log",
            Op::Powf(..) => "powf",
            Op::Clamp(..) => "clamp",
            Op::Softmax(_) => "softmax",
            Op::LogSoftmax(_) => "log_softmax",
            Op::Sum(_) => "sum",
            Op::Mean(_) => "mean",
            Op::MeanSpatial(_) => "mean_spatial",
            Op::Upsample { .. } => "upsample_bilinear",
            Op::AvgPool2(_) => "avg_pool2",
            Op::Channel(..) => "channel",
            Op::Concat(_) => "concat",
            Op::Reshape(_) => "reshape",
        }
    }
}

#[derive(Clone, Debug)]
struct Node {
    op: Op,
    value: Tensor,
    /// Whether any parameter leaf feeds this node.
    grad: bool,
}

/// Linear record of evaluated primitives. Nodes are appended in evaluation
/// order, so every node's inputs precede it.
#[derive(Clone, Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

/// Adjoints produced by [`Tape::backward`].
#[derive(Debug)]
pub struct Gradients {
    adjoints: Vec<Option<Tensor>>,
    params: Vec<(usize, usize)>,
    shapes: Vec<Vec<usize>>,
}

impl Gradients {
    /// Adjoint of `var`; zero when the output does not depend on it.
    pub fn wrt(&self, var: Var) -> Tensor {
        match self.adjoints.get(var.0).and_then(|a| a.as_ref()) {
            Some(t) => t.clone(),
            None => Tensor::zeros(&self.shapes[var.0]),
        }
    }

    /// Scatter every parameter leaf's adjoint into a flat vector of length
    /// `len` at the leaf's offset. Coordinates without a leaf stay zero.
    pub fn param_vector(&self, len: usize) -> Vec<f64> {
        let mut out = vec![0.0; len];
        self.accumulate_into(&mut out);
        out
    }

    pub fn accumulate_into(&self, out: &mut [f64]) {
        for &(node, offset) in &self.params {
            if let Some(adj) = &self.adjoints[node] {
                for (dst, &g) in out[offset..offset + adj.len()].iter_mut().zip(adj.data()) {
                    *dst += g;
                }
            }
        }
    }
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, var: Var) -> &Tensor {
        &self.nodes[var.0].value
    }

    /// Constant leaf; never receives a gradient in the parameter vector.
    pub fn input(&mut self, value: Tensor) -> Var {
        self.push(Op::Input, value)
    }

    /// Parameter leaf bound to `offset` in the caller's flat parameter vector.
    pub fn param(&mut self, value: Tensor, offset: usize) -> Var {
        self.push(Op::Param { offset }, value)
    }

    fn push(&mut self, op: Op, value: Tensor) -> Var {
        let grad = match op {
            Op::Input => false,
            Op::Param { .. } => true,
            _ => op.inputs().iter().any(|&i| self.nodes[i].grad),
        };
        self.nodes.push(Node { op, value, grad });
        Var(self.nodes.len() - 1)
    }

    fn check(&self, var: Var) -> Result<&Tensor> {
        self.nodes
            .get(var.0)
            .map(|n| &n.value)
            .ok_or(AdError::UnknownNode(var.0))
    }

    fn shape_err(&self, op: &'static str, detail: String) -> AdError {
        AdError::Shape {
            node: self.nodes.len(),
            op,
            detail,
        }
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let op = Op::MatMul(a.0, b.0);
        let value = self.eval(&op)?;
        Ok(self.push(op, value))
    }

    /// Same-padded stride-1 convolution: `x[ci,h,w]`, `w[co,ci,k,k]`, `b[co]`.
    pub fn conv2d(&mut self, x: Var, w: Var, b: Var, dilation: usize) -> Result<Var> {
        let (xs, ws, bs) = (
            self.check(x)?.shape().to_vec(),
            self.check(w)?.shape().to_vec(),
            self.check(b)?.shape().to_vec(),
        );
        if xs.len() != 3 || ws.len() != 4 || ws[2] != ws[3] || ws[2] % 2 == 0 || dilation == 0 {
            return Err(self.shape_err(
                "conv2d",
                format!("input {xs:?}, weight {ws:?}, dilation {dilation}: need [c,h,w], odd square [co,ci,k,k]"),
            ));
        }
        if ws[1] != xs[0] || bs != [ws[0]] {
            return Err(self.shape_err(
                "conv2d",
                format!("input channels {} vs weight {ws:?}, bias {bs:?}", xs[0]),
            ));
        }
        let geom = ConvGeometry {
            in_channels: xs[0],
            out_channels: ws[0],
            height: xs[1],
            width: xs[2],
            kernel: ws[2],
            dilation,
        };
        let op = Op::Conv2d {
            x: x.0,
            w: w.0,
            b: b.0,
            geom,
        };
        let value = self.eval(&op)?;
        Ok(self.push(op, value))
    }

    fn binary(&mut self, op: Op, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.check(a)?.shape(), self.check(b)?.shape());
        if sa != sb {
            return Err(self.shape_err(op.name(), format!("operands {sa:?} and {sb:?}")));
        }
        let value = self.eval(&op)?;
        Ok(self.push(op, value))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(Op::Add(a.0, b.0), a, b)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(Op::Sub(a.0, b.0), a, b)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(Op::Mul(a.0, b.0), a, b)
    }

    pub fn div(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(Op::Div(a.0, b.0), a, b)
    }

    fn unary(&mut self, op: Op, a: Var) -> Result<Var> {
        self.check(a)?;
        let value = self.eval(&op)?;
        Ok(self.push(op, value))
    }

    pub fn scale(&mut self, a: Var, factor: f64) -> Result<Var> {
        self.unary(Op::Scale(a.0, factor), a)
    }

    /// `a + c` elementwise.
    pub fn shift(&mut self, a: Var, c: f64) -> Result<Var> {
        self.unary(Op::Shift(a.0, c), a)
    }

    /// `c - a` elementwise.
    pub fn rsub(&mut self, c: f64, a: Var) -> Result<Var> {
        let neg = self.scale(a, -1.0)?;
        self.shift(neg, c)
    }

    pub fn relu(&mut self, a: Var) -> Result<Var> {
        self.unary(Op::Relu(a.0), a)
    }

    /// `max(x, slope·x)` for `0 ≤ slope < 1`.
    pub fn leaky_relu(&mut self, a: Var, slope: f64) -> Result<Var> {
        self.unary(Op::LeakyRelu(a.0, slope), a)
    }

    pub fn sigmoid(&mut self, a: Var) -> Result<Var> {
        self.unary(Op::Sigmoid(a.0), a)
    }

    pub fn log(&mut self, a: Var) -> Result<Var> {
        self.unary(Op::Log(a.0), a)
    }

    /// Elementwise `a^p`; integer-valued `p` is evaluated with `powi`.
    pub fn powf(&mut self, a: Var, p: f64) -> Result<Var> {
        self.unary(Op::Powf(a.0, p), a)
    }

    pub fn clamp(&mut self, a: Var, lo: f64, hi: f64) -> Result<Var> {
        self.unary(Op::Clamp(a.0, lo, hi), a)
    }

    /// Softmax over the leading axis (channels), per trailing position.
    pub fn softmax(&mut self, a: Var) -> Result<Var> {
        if self.check(a)?.shape().is_empty() {
            return Err(self.shape_err("softmax", "rank-0 operand".into()));
        }
        self.unary(Op::Softmax(a.0), a)
    }

    /// Log of [`Tape::softmax`], computed without forming the probabilities,
    /// so its gradient survives saturation.
    pub fn log_softmax(&mut self, a: Var) -> Result<Var> {
        if self.check(a)?.shape().is_empty() {
            return Err(self.shape_err("log_softmax", "rank-0 operand".into()));
        }
        self.unary(Op::LogSoftmax(a.0), a)
    }

    pub fn sum(&mut self, a: Var) -> Result<Var> {
        self.unary(Op::Sum(a.0), a)
    }

    pub fn mean(&mut self, a: Var) -> Result<Var> {
        self.unary(Op::Mean(a.0), a)
    }

    /// Global average pool: `[c,h,w] -> [c]`.
    pub fn mean_spatial(&mut self, a: Var) -> Result<Var> {
        if self.check(a)?.shape().len() != 3 {
            let s = self.check(a)?.shape().to_vec();
            return Err(self.shape_err("mean_spatial", format!("operand {s:?} is not [c,h,w]")));
        }
        self.unary(Op::MeanSpatial(a.0), a)
    }

    /// Bilinear upsampling of `[c,h,w]` by an integer factor.
    pub fn upsample_bilinear(&mut self, a: Var, factor: usize) -> Result<Var> {
        if self.check(a)?.shape().len() != 3 || factor == 0 {
            let s = self.check(a)?.shape().to_vec();
            return Err(self.shape_err("upsample_bilinear", format!("operand {s:?}, factor {factor}")));
        }
        self.unary(Op::Upsample { x: a.0, factor }, a)
    }

    pub fn avg_pool2(&mut self, a: Var) -> Result<Var> {
        let s = self.check(a)?.shape().to_vec();
        if s.len() != 3 || s[1] % 2 != 0 || s[2] % 2 != 0 {
            return Err(self.shape_err("avg_pool2", format!("operand {s:?} needs even spatial size")));
        }
        self.unary(Op::AvgPool2(a.0), a)
    }

    /// Slice channel `k` out of `[c, rest...]`, giving `[rest...]`.
    pub fn channel(&mut self, a: Var, k: usize) -> Result<Var> {
        let s = self.check(a)?.shape().to_vec();
        if s.len() < 2 || k >= s[0] {
            return Err(self.shape_err("channel", format!("channel {k} of {s:?}")));
        }
        self.unary(Op::Channel(a.0, k), a)
    }

    /// Concatenate along the leading axis; trailing shapes must agree.
    pub fn concat(&mut self, parts: &[Var]) -> Result<Var> {
        if parts.is_empty() {
            return Err(self.shape_err("concat", "no operands".into()));
        }
        let first = self.check(parts[0])?.shape()[1..].to_vec();
        for &p in parts {
            let s = self.check(p)?.shape();
            if s.is_empty() || s[1..] != first[..] {
                return Err(self.shape_err("concat", format!("trailing shape {:?} vs {first:?}", s)));
            }
        }
        let op = Op::Concat(parts.iter().map(|v| v.0).collect());
        let value = self.eval(&op)?;
        Ok(self.push(op, value))
    }

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Result<Var> {
        let value = self
            .check(a)?
            .clone()
            .reshaped(shape.to_vec())
            .map_err(|e| self.shape_err("reshape", e.to_string()))?;
        Ok(self.push(Op::Reshape(a.0), value))
    }

    /// Forward evaluation of a non-leaf op from the current node values.
    fn eval(&self, op: &Op) -> Result<Tensor> {
        let v = |i: usize| &self.nodes[i].value;
        Ok(match *op {
            Op::Input | Op::Param { .. } => unreachable!("leaves are not evaluated"),
            Op::MatMul(a, b) => {
                let (sa, sb) = (v(a).shape(), v(b).shape());
                if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[0] {
                    return Err(self.shape_err("matmul", format!("operands {sa:?} and {sb:?}")));
                }
                let out = kernels::matmul(v(a).data(), v(b).data(), sa[0], sa[1], sb[1]);
                Tensor::new(vec![sa[0], sb[1]], out)?
            }
            Op::Conv2d { x, w, b, geom } => {
                let out = kernels::conv2d(v(x).data(), v(w).data(), v(b).data(), geom);
                Tensor::new(vec![geom.out_channels, geom.height, geom.width], out)?
            }
            Op::Add(a, b) => v(a).zip(v(b), |x, y| x + y),
            Op::Sub(a, b) => v(a).zip(v(b), |x, y| x - y),
            Op::Mul(a, b) => v(a).zip(v(b), |x, y| x * y),
            Op::Div(a, b) => v(a).zip(v(b), |x, y| x / y),
            Op::Scale(a, f) => v(a).map(|x| x * f),
            Op::Shift(a, c) => v(a).map(|x| x + c),
            Op::Relu(a) => v(a).map(|x| x.max(0.0)),
            Op::LeakyRelu(a, k) => v(a).map(|x| if x > 0.0 { x } else { k * x }),
            Op::Sigmoid(a) => v(a).map(kernels::sigmoid),
            Op::Log(a) => v(a).map(f64::ln),
            Op::Powf(a, p) => v(a).map(|x| pow(x, p)),
            Op::Clamp(a, lo, hi) => v(a).map(|x| x.clamp(lo, hi)),
            Op::Softmax(a) => {
                let c = v(a).shape()[0];
                Tensor::new(v(a).shape().to_vec(), kernels::softmax_axis0(v(a).data(), c))?
            }
            Op::LogSoftmax(a) => {
                let c = v(a).shape()[0];
                Tensor::new(v(a).shape().to_vec(), kernels::log_softmax_axis0(v(a).data(), c))?
            }
            Op::Sum(a) => Tensor::scalar(v(a).data().iter().sum()),
            Op::Mean(a) => Tensor::scalar(v(a).data().iter().sum::<f64>() / v(a).len() as f64),
            Op::MeanSpatial(a) => {
                let s = v(a).shape();
                let plane = s[1] * s[2];
                let data = v(a)
                    .data()
                    .chunks(plane)
                    .map(|ch| ch.iter().sum::<f64>() / plane as f64)
                    .collect();
                Tensor::vector(data)
            }
            Op::Upsample { x, factor } => {
                let s = v(x).shape();
                let out = kernels::upsample_bilinear(v(x).data(), s[0], s[1], s[2], s[1] * factor, s[2] * factor);
                Tensor::new(vec![s[0], s[1] * factor, s[2] * factor], out)?
            }
            Op::AvgPool2(a) => {
                let s = v(a).shape();
                Tensor::new(vec![s[0], s[1] / 2, s[2] / 2], kernels::avg_pool2(v(a).data(), s[0], s[1], s[2]))?
            }
            Op::Channel(a, k) => {
                let s = v(a).shape();
                let rest: usize = s[1..].iter().product();
                Tensor::new(s[1..].to_vec(), v(a).data()[k * rest..(k + 1) * rest].to_vec())?
            }
            Op::Concat(ref parts) => {
                let mut shape = v(parts[0]).shape().to_vec();
                shape[0] = parts.iter().map(|&p| v(p).shape()[0]).sum();
                let mut data = Vec::with_capacity(shape.iter().product());
                for &p in parts {
                    data.extend_from_slice(v(p).data());
                }
                Tensor::new(shape, data)?
            }
            Op::Reshape(_) => unreachable!("reshape is evaluated at record time"),
        })
    }

    /// Recompute every non-leaf node from the leaves and report whether each
    /// value matches the recorded one bit for bit.
    pub fn replay_matches(&self) -> Result<bool> {
        let mut replayed = Tape {
            nodes: Vec::with_capacity(self.nodes.len()),
        };
        for node in &self.nodes {
            let value = match node.op {
                Op::Input | Op::Param { .. } => node.value.clone(),
                Op::Reshape(a) => replayed.nodes[a].value.clone().reshaped(node.value.shape().to_vec())?,
                _ => replayed.eval(&node.op)?,
            };
            let same = value.shape() == node.value.shape()
                && value
                    .data()
                    .iter()
                    .zip(node.value.data())
                    .all(|(a, b)| a.to_bits() == b.to_bits());
            if !same {
                return Ok(false);
            }
            replayed.nodes.push(Node {
                op: node.op.clone(),
                value,
                grad: node.grad,
            });
        }
        Ok(true)
    }

    /// Reverse sweep from `output`. A scalar output defaults to seed 1;
    /// anything else needs an explicit seed of the same shape.
    pub fn backward(&self, output: Var, seed: Option<Tensor>) -> Result<Gradients> {
        let out_val = self.check(output)?;
        let seed = match seed {
            Some(s) if s.shape() != out_val.shape() => {
                return Err(AdError::SeedShape {
                    seed: s.shape().to_vec(),
                    output: out_val.shape().to_vec(),
                })
            }
            Some(s) => s,
            None if out_val.is_scalar() => Tensor::full(out_val.shape(), 1.0),
            None => return Err(AdError::NonScalarOutput(out_val.shape().to_vec())),
        };
        let n = output.0 + 1;
        let mut adj: Vec<Option<Tensor>> = vec![None; self.nodes.len()];
        adj[output.0] = Some(seed);
        for i in (0..n).rev() {
            if !self.nodes[i].grad {
                continue;
            }
            let Some(g) = adj[i].take() else { continue };
            self.propagate(i, &g, &mut adj);
            adj[i] = Some(g);
        }
        let params = self
            .nodes
            .iter()
            .enumerate()
            .filter_map(|(i, n)| match n.op {
                Op::Param { offset } => Some((i, offset)),
                _ => None,
            })
            .collect();
        Ok(Gradients {
            adjoints: adj,
            params,
            shapes: self.nodes.iter().map(|n| n.value.shape().to_vec()).collect(),
        })
    }

    fn propagate(&self, i: usize, g: &Tensor, adj: &mut [Option<Tensor>]) {
        let node = &self.nodes[i];
        let v = |j: usize| &self.nodes[j].value;
        let nodes = &self.nodes;
        let mut acc = |j: usize, t: Tensor| {
            if !nodes[j].grad {
                return;
            }
            match &mut adj[j] {
                Some(existing) => existing.add_assign(&t),
                slot @ None => *slot = Some(t),
            }
        };
        match node.op {
            Op::Input | Op::Param { .. } => {}
            Op::MatMul(a, b) => {
                let (sa, sb) = (v(a).shape(), v(b).shape());
                let (m, k, nn) = (sa[0], sa[1], sb[1]);
                // dA = G · Bᵀ, dB = Aᵀ · G
                let bt = transpose(v(b).data(), k, nn);
                let at = transpose(v(a).data(), m, k);
                let ga = kernels::matmul(g.data(), &bt, m, nn, k);
                let gb = kernels::matmul(&at, g.data(), k, m, nn);
                acc(a, Tensor::new(sa.to_vec(), ga).expect("matmul grad"));
                acc(b, Tensor::new(sb.to_vec(), gb).expect("matmul grad"));
            }
            Op::Conv2d { x, w, b, geom } => {
                let want_input = self.nodes[x].grad;
                let (gx, gw, gb) = kernels::conv2d_backward(v(x).data(), v(w).data(), g.data(), geom, want_input);
                if want_input {
                    acc(x, Tensor::new(v(x).shape().to_vec(), gx).expect("conv grad"));
                }
                acc(w, Tensor::new(v(w).shape().to_vec(), gw).expect("conv grad"));
                acc(b, Tensor::new(v(b).shape().to_vec(), gb).expect("conv grad"));
            }
            Op::Add(a, b) => {
                acc(a, g.clone());
                acc(b, g.clone());
            }
            Op::Sub(a, b) => {
                acc(a, g.clone());
                acc(b, g.map(|x| -x));
            }
            Op::Mul(a, b) => {
                acc(a, g.zip(v(b), |gv, bv| gv * bv));
                acc(b, g.zip(v(a), |gv, av| gv * av));
            }
            Op::Div(a, b) => {
                acc(a, g.zip(v(b), |gv, bv| gv / bv));
                let gb = g.zip(&node.value, |gv, q| gv * q).zip(v(b), |t, bv| -t / bv);
                acc(b, gb);
            }
            Op::Scale(a, f) => acc(a, g.map(|x| x * f)),
            Op::Shift(a, _) => acc(a, g.clone()),
            Op::Relu(a) => acc(a, g.zip(v(a), |gv, x| if x > 0.0 { gv } else { 0.0 })),
            Op::LeakyRelu(a, k) => acc(a, g.zip(v(a), |gv, x| if x > 0.0 { gv } else { k * gv })),
            Op::Sigmoid(a) => acc(a, g.zip(&node.value, |gv, s| gv * s * (1.0 - s))),
            Op::Log(a) => acc(a, g.zip(v(a), |gv, x| gv / x)),
            Op::Powf(a, p) => acc(a, g.zip(v(a), |gv, x| gv * p * pow(x, p - 1.0))),
            Op::Clamp(a, lo, hi) => acc(
                a,
                g.zip(v(a), |gv, x| if x >= lo && x <= hi { gv } else { 0.0 }),
            ),
            Op::Softmax(a) => {
                let s = &node.value;
                let c = s.shape()[0];
                let rest = s.len() / c;
                let mut ga = vec![0.0; s.len()];
                for p in 0..rest {
                    let dot: f64 = (0..c).map(|ch| g.data()[ch * rest + p] * s.data()[ch * rest + p]).sum();
                    for ch in 0..c {
                        let idx = ch * rest + p;
                        ga[idx] = s.data()[idx] * (g.data()[idx] - dot);
                    }
                }
                acc(a, Tensor::new(s.shape().to_vec(), ga).expect("softmax grad"));
            }
            Op::LogSoftmax(a) => {
                let s = &node.value;
                let c = s.shape()[0];
                let rest = s.len() / c;
                let mut ga = vec![0.0; s.len()];
                for p in 0..rest {
                    let total: f64 = (0..c).map(|ch| g.data()[ch * rest + p]).sum();
                    for ch in 0..c {
                        let idx = ch * rest + p;
                        ga[idx] = g.data()[idx] - s.data()[idx].exp() * total;
                    }
                }
                acc(a, Tensor::new(s.shape().to_vec(), ga).expect("log_softmax grad"));
            }
            Op::Sum(a) => acc(a, Tensor::full(v(a).shape(), g.item())),
            Op::Mean(a) => acc(a, Tensor::full(v(a).shape(), g.item() / v(a).len() as f64)),
            Op::MeanSpatial(a) => {
                let s = v(a).shape();
                let plane = s[1] * s[2];
                let mut ga = Vec::with_capacity(v(a).len());
                for &gv in g.data() {
                    ga.extend(std::iter::repeat(gv / plane as f64).take(plane));
                }
                acc(a, Tensor::new(s.to_vec(), ga).expect("gap grad"));
            }
            Op::Upsample { x, factor } => {
                let s = v(x).shape();
                let gx = kernels::upsample_bilinear_backward(g.data(), s[0], s[1], s[2], s[1] * factor, s[2] * factor);
                acc(x, Tensor::new(s.to_vec(), gx).expect("upsample grad"));
            }
            Op::AvgPool2(a) => {
                let s = v(a).shape();
                let gx = kernels::avg_pool2_backward(g.data(), s[0], s[1], s[2]);
                acc(a, Tensor::new(s.to_vec(), gx).expect("pool grad"));
            }
            Op::Channel(a, k) => {
                let s = v(a).shape();
                let rest = g.len();
                let mut ga = vec![0.0; v(a).len()];
                ga[k * rest..(k + 1) * rest].copy_from_slice(g.data());
                acc(a, Tensor::new(s.to_vec(), ga).expect("channel grad"));
            }
            Op::Concat(ref parts) => {
                let mut start = 0;
                for &p in parts {
                    let len = v(p).len();
                    acc(p, Tensor::new(v(p).shape().to_vec(), g.data()[start..start + len].to_vec()).expect("concat grad"));
                    start += len;
                }
            }
            Op::Reshape(a) => acc(a, g.clone().reshaped(v(a).shape().to_vec()).expect("reshape grad")),
        }
    }
}

fn pow(x: f64, p: f64) -> f64 {
    if p.fract() == 0.0 && p.abs() < 64.0 {
        x.powi(p as i32)
    } else {
        x.powf(p)
    }
}

fn transpose(a: &[f64], rows: usize, cols: usize) -> Vec<f64> {
    let mut out = vec![0.0; a.len()];
    for r in 0..rows {
        for c in 0..cols {
            out[c * rows + r] = a[r * cols + c];
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn square_derivative() {
        let mut tape = Tape::new();
        let x = tape.param(Tensor::scalar(3.0), 0);
        let y = tape.mul(x, x).unwrap();
        let g = tape.backward(y, None).unwrap();
        assert_eq!(g.param_vector(1), vec![6.0]);
    }

    #[test]
    fn matmul_shape_algebra() {
        let mut tape = Tape::new();
        let a = tape.input(Tensor::new(vec![2, 3], vec![1.0; 6]).unwrap());
        let b = tape.input(Tensor::new(vec![3, 1], vec![1.0; 3]).unwrap());
        let c = tape.matmul(a, b).unwrap();
        assert_eq!(tape.value(c).shape(), &[2, 1]);
        let bad = tape.matmul(b, b).unwrap_err();
        assert!(matches!(bad, AdError::Shape { op: "matmul", .. }));
    }

    #[test]
    fn sigmoid_and_softmax_values() {
        let mut tape = Tape::new();
        let z = tape.input(Tensor::scalar(0.0));
        let s = tape.sigmoid(z).unwrap();
        assert_eq!(tape.value(s).item(), 0.5);
        let u = tape.input(Tensor::vector(vec![0.0, 0.0, 0.0]));
        let sm = tape.softmax(u).unwrap();
        for &p in tape.value(sm).data() {
            assert!((p - 1.0 / 3.0).abs() < 1e-15);
        }
    }

    #[test]
    fn sigmoid_bce_gradient_at_zero_logit() {
        // loss = -ln σ(z) for target 1; d/dz = σ(z) - 1 = -0.5 at z = 0.
        let mut tape = Tape::new();
        let z = tape.param(Tensor::scalar(0.0), 0);
        let p = tape.sigmoid(z).unwrap();
        let lp = tape.log(p).unwrap();
        let loss = tape.scale(lp, -1.0).unwrap();
        let g = tape.backward(loss, None).unwrap();
        assert!((g.param_vector(1)[0] + 0.5).abs() < 1e-15);
    }

    #[test]
    fn leaves_off_tape_get_zero() {
        let mut tape = Tape::new();
        let a = tape.param(Tensor::scalar(2.0), 0);
        let _unused = tape.param(Tensor::scalar(5.0), 1);
        let y = tape.mul(a, a).unwrap();
        let g = tape.backward(y, None).unwrap();
        assert_eq!(g.param_vector(3), vec![4.0, 0.0, 0.0]);
    }

    #[test]
    fn non_scalar_output_needs_seed() {
        let mut tape = Tape::new();
        let a = tape.param(Tensor::vector(vec![1.0, 2.0]), 0);
        let y = tape.mul(a, a).unwrap();
        assert!(matches!(tape.backward(y, None), Err(AdError::NonScalarOutput(_))));
        let bad_seed = tape.backward(y, Some(Tensor::scalar(1.0)));
        assert!(matches!(bad_seed, Err(AdError::SeedShape { .. })));
        let g = tape.backward(y, Some(Tensor::vector(vec![1.0, 1.0]))).unwrap();
        assert_eq!(g.param_vector(2), vec![2.0, 4.0]);
    }

    #[test]
    fn conv_shape_error_names_node() {
        let mut tape = Tape::new();
        let x = tape.input(Tensor::zeros(&[2, 4, 4]));
        let w = tape.input(Tensor::zeros(&[1, 3, 3, 3]));
        let b = tape.input(Tensor::zeros(&[1]));
        let err = tape.conv2d(x, w, b, 1).unwrap_err();
        assert!(err.to_string().contains("node 3"), "{err}");
    }

    #[test]
    fn replay_reproduces_forward() {
        let mut tape = Tape::new();
        let x = tape.input(Tensor::new(vec![1, 4, 4], (0..16).map(|v| v as f64 * 0.1).collect()).unwrap());
        let w = tape.param(Tensor::new(vec![2, 1, 3, 3], (0..18).map(|v| (v as f64 - 9.0) * 0.05).collect()).unwrap(), 0);
        let b = tape.param(Tensor::vector(vec![0.1, -0.1]), 18);
        let c = tape.conv2d(x, w, b, 2).unwrap();
        let r = tape.relu(c).unwrap();
        let up = tape.upsample_bilinear(r, 2).unwrap();
        let s = tape.softmax(up).unwrap();
        let _m = tape.mean(s).unwrap();
        assert!(tape.replay_matches().unwrap());
    }
}
