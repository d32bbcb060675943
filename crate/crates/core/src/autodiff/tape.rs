use super::conv::{self, ConvGeometry};
use super::{AutodiffError, Result, Tensor};
use crate::real::Real;

/// Handle to a node on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug, Clone)]
enum Op<T> {
    Leaf,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Div(Var, Var),
    Scale(Var, T),
    AddScalar(Var),
    ChannelBias(Var, Var),
    MatMul(Var, Var),
    Conv3d { input: Var, weight: Var, geom: ConvGeometry },
    Relu(Var),
    Abs(Var),
    Log(Var),
    Sqrt(Var),
    ClampMax(Var, T),
    ClampMin(Var, T),
    Sum(Var),
    Mean(Var),
    Dropout { input: Var, mask: Vec<T> },
    Pool(Var),
    L2Norm(Var),
    Dot(Var, Var),
    Row(Var, usize),
    Stack(Vec<Var>),
    Slice { input: Var, offset: usize },
    Upsample { input: Var, index: Vec<usize> },
    SoftmaxXent { logits: Var, probs: Vec<T>, targets: Vec<u32> },
}

#[derive(Debug, Clone)]
struct Node<T> {
    value: Tensor<T>,
    op: Op<T>,
    needs_grad: bool,
}

/// Record of one forward pass.
#[derive(Debug, Clone, Default)]
pub struct Tape<T> {
    nodes: Vec<Node<T>>,
}

/// Gradients indexed by [`Var`]; `None` for nodes off the parameter path.
#[derive(Debug, Clone)]
pub struct Gradients<T> {
    grads: Vec<Option<Vec<T>>>,
}

impl<T: Real> Gradients<T> {
    pub fn get(&self, v: Var) -> Option<&[T]> {
        self.grads.get(v.0).and_then(|g| g.as_deref())
    }

    /// Gradient of `v`, zeros when nothing flowed into it.
    pub fn get_or_zeros(&self, v: Var, len: usize) -> Vec<T> {
        self.get(v).map(<[T]>::to_vec).unwrap_or_else(|| vec![T::zero(); len])
    }
}

fn shape_err<T>(msg: String) -> Result<T> {
    Err(AutodiffError::Shape(msg))
}

impl<T: Real> Tape<T> {
    pub fn new() -> Self {
        Self { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>, inputs: &[Var]) -> Var {
        let needs_grad = inputs.iter().any(|v| self.nodes[v.0].needs_grad);
        self.nodes.push(Node { value, op, needs_grad });
        Var(self.nodes.len() - 1)
    }

    fn unary(&mut self, a: Var, op: Op<T>, f: impl Fn(T) -> T) -> Var {
        let src = &self.nodes[a.0].value;
        let data = src.data().iter().map(|&x| f(x)).collect();
        let value = Tensor::new(src.shape().to_vec(), data).expect("same shape");
        self.push(value, op, &[a])
    }

    pub fn leaf(&mut self, value: Tensor<T>, requires_grad: bool) -> Var {
        self.nodes.push(Node { value, op: Op::Leaf, needs_grad: requires_grad });
        Var(self.nodes.len() - 1)
    }

    /// Trainable leaf.
    pub fn param(&mut self, value: Tensor<T>) -> Var {
        self.leaf(value, true)
    }

    pub fn constant(&mut self, value: Tensor<T>) -> Var {
        self.leaf(value, false)
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    /// First element of `v`; meant for single-element results.
    pub fn scalar(&self, v: Var) -> T {
        self.nodes[v.0].value.data()[0]
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    /// Fails on the first node holding a NaN or infinity.
    pub fn check_finite(&self) -> Result<()> {
        match self.nodes.iter().position(|n| !n.value.is_finite()) {
            Some(i) => Err(AutodiffError::NonFinite(format!("node {i} ({})", op_name(&self.nodes[i].op)))),
            None => Ok(()),
        }
    }

    fn same_shape(&self, a: Var, b: Var, what: &str) -> Result<()> {
        if self.shape(a) != self.shape(b) {
            return shape_err(format!("{what}: {:?} vs {:?}", self.shape(a), self.shape(b)));
        }
        Ok(())
    }

    fn binary(&mut self, a: Var, b: Var, what: &str, op: Op<T>, f: impl Fn(T, T) -> T) -> Result<Var> {
        self.same_shape(a, b, what)?;
        let (x, y) = (&self.nodes[a.0].value, &self.nodes[b.0].value);
        let data = x.data().iter().zip(y.data()).map(|(&p, &q)| f(p, q)).collect();
        let value = Tensor::new(x.shape().to_vec(), data)?;
        Ok(self.push(value, op, &[a, b]))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, "add", Op::Add(a, b), |p, q| p + q)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, "sub", Op::Sub(a, b), |p, q| p - q)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, "mul", Op::Mul(a, b), |p, q| p * q)
    }

    pub fn div(&mut self, a: Var, b: Var) -> Result<Var> {
        if self.value(b).data().iter().any(|v| v.is_zero()) {
            return Err(AutodiffError::Domain("division by zero".into()));
        }
        self.binary(a, b, "div", Op::Div(a, b), |p, q| p / q)
    }

    pub fn scale(&mut self, a: Var, c: T) -> Var {
        self.unary(a, Op::Scale(a, c), |x| x * c)
    }

    pub fn add_scalar(&mut self, a: Var, c: T) -> Var {
        self.unary(a, Op::AddScalar(a), |x| x + c)
    }

    pub fn neg(&mut self, a: Var) -> Var {
        self.scale(a, -T::one())
    }

    /// Adds `bias[c]` along dimension 1 of `x` (`[N, C, ...]`).
    pub fn channel_bias(&mut self, x: Var, bias: Var) -> Result<Var> {
        let xs = self.shape(x).to_vec();
        if xs.len() < 2 || self.shape(bias) != [xs[1]] {
            return shape_err(format!("channel_bias: x {xs:?} with bias {:?}", self.shape(bias)));
        }
        let inner: usize = xs[2..].iter().product();
        let b = self.value(bias).data().to_vec();
        let mut data = self.value(x).data().to_vec();
        for (i, v) in data.iter_mut().enumerate() {
            *v = *v + b[(i / inner) % xs[1]];
        }
        let value = Tensor::new(xs, data)?;
        Ok(self.push(value, Op::ChannelBias(x, bias), &[x, bias]))
    }

    /// `[m, k] × [k, n] → [m, n]`.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a).to_vec(), self.shape(b).to_vec());
        if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[0] {
            return shape_err(format!("matmul: {sa:?} × {sb:?}"));
        }
        let (m, k, n) = (sa[0], sa[1], sb[1]);
        let out = matmul_raw(self.value(a).data(), self.value(b).data(), m, k, n);
        let value = Tensor::new(vec![m, n], out)?;
        Ok(self.push(value, Op::MatMul(a, b), &[a, b]))
    }

    /// Cubic-kernel 3D convolution, input `[N, Ci, D, H, W]`, weight
    /// `[Co, Ci, K, K, K]`, zero padding `pad` on every side.
    pub fn conv3d(&mut self, input: Var, weight: Var, stride: usize, pad: usize) -> Result<Var> {
        let (xs, ws) = (self.shape(input).to_vec(), self.shape(weight).to_vec());
        if xs.len() != 5 || ws.len() != 5 || ws[1] != xs[1] || ws[2] != ws[3] || ws[3] != ws[4] || stride == 0 {
            return shape_err(format!("conv3d: input {xs:?}, weight {ws:?}, stride {stride}"));
        }
        let k = ws[2];
        let mut output = [0; 3];
        for a in 0..3 {
            output[a] = ConvGeometry::output_extent(xs[2 + a], k, stride, pad)
                .ok_or_else(|| AutodiffError::Shape(format!("conv3d: input {xs:?} smaller than kernel {k}")))?;
        }
        let geom = ConvGeometry { n: xs[0], ci: xs[1], co: ws[0], k, stride, pad, input: [xs[2], xs[3], xs[4]], output };
        let out = conv::forward(self.value(input).data(), self.value(weight).data(), &geom);
        let value = Tensor::new(vec![geom.n, geom.co, output[0], output[1], output[2]], out)?;
        Ok(self.push(value, Op::Conv3d { input, weight, geom }, &[input, weight]))
    }

    pub fn relu(&mut self, a: Var) -> Var {
        self.unary(a, Op::Relu(a), |x| if x > T::zero() { x } else { T::zero() })
    }

    pub fn abs(&mut self, a: Var) -> Var {
        self.unary(a, Op::Abs(a), |x| x.abs())
    }

    pub fn log(&mut self, a: Var) -> Result<Var> {
        if let Some(bad) = self.value(a).data().iter().find(|&&x| !(x > T::zero())) {
            return Err(AutodiffError::Domain(format!("log of {bad}")));
        }
        Ok(self.unary(a, Op::Log(a), |x| x.ln()))
    }

    pub fn sqrt(&mut self, a: Var) -> Result<Var> {
        if let Some(bad) = self.value(a).data().iter().find(|&&x| !(x >= T::zero())) {
            return Err(AutodiffError::Domain(format!("sqrt of {bad}")));
        }
        Ok(self.unary(a, Op::Sqrt(a), |x| x.sqrt()))
    }

    pub fn clamp_max(&mut self, a: Var, c: T) -> Var {
        self.unary(a, Op::ClampMax(a, c), |x| if x < c { x } else { c })
    }

    pub fn clamp_min(&mut self, a: Var, c: T) -> Var {
        self.unary(a, Op::ClampMin(a, c), |x| if x > c { x } else { c })
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let s = self.value(a).data().iter().copied().sum();
        self.push(Tensor::scalar(s), Op::Sum(a), &[a])
    }

    pub fn mean(&mut self, a: Var) -> Var {
        let v = self.value(a);
        let s: T = v.data().iter().copied().sum();
        let m = s / T::from_usize(v.len()).unwrap();
        self.push(Tensor::scalar(m), Op::Mean(a), &[a])
    }

    /// Inverted dropout: each element survives with probability `1 - p`
    /// and survivors are scaled by `1 / (1 - p)`.
    pub fn dropout<R: rand::Rng + ?Sized>(&mut self, a: Var, p: f64, rng: &mut R) -> Result<Var> {
        if !(0.0..1.0).contains(&p) {
            return Err(AutodiffError::Domain(format!("dropout rate {p} outside [0, 1)")));
        }
        let keep = T::lit(1.0 / (1.0 - p));
        let mask: Vec<T> = (0..self.value(a).len()).map(|_| if p > 0.0 && rng.gen::<f64>() < p { T::zero() } else { keep }).collect();
        let src = self.value(a);
        let data = src.data().iter().zip(&mask).map(|(&x, &m)| x * m).collect();
        let value = Tensor::new(src.shape().to_vec(), data)?;
        Ok(self.push(value, Op::Dropout { input: a, mask }, &[a]))
    }

    /// `[N, C, D, H, W] → [N, C]` spatial mean.
    pub fn adaptive_avg_pool3d_to_1(&mut self, a: Var) -> Result<Var> {
        let s = self.shape(a).to_vec();
        if s.len() != 5 {
            return shape_err(format!("adaptive_avg_pool3d_to_1: {s:?}"));
        }
        let inner = s[2] * s[3] * s[4];
        let div = T::from_usize(inner).unwrap();
        let data = self.value(a).data().chunks_exact(inner).map(|c| c.iter().copied().sum::<T>() / div).collect();
        let value = Tensor::new(vec![s[0], s[1]], data)?;
        Ok(self.push(value, Op::Pool(a), &[a]))
    }

    /// Euclidean norm of all elements, shape `[1]`.
    pub fn l2_norm(&mut self, a: Var) -> Var {
        let s: T = self.value(a).data().iter().map(|&x| x * x).sum();
        self.push(Tensor::scalar(s.sqrt()), Op::L2Norm(a), &[a])
    }

    /// Inner product of two equally sized tensors, shape `[1]`.
    pub fn dot(&mut self, a: Var, b: Var) -> Result<Var> {
        if self.value(a).len() != self.value(b).len() {
            return shape_err(format!("dot: {:?} vs {:?}", self.shape(a), self.shape(b)));
        }
        let s = self.value(a).data().iter().zip(self.value(b).data()).map(|(&p, &q)| p * q).sum();
        Ok(self.push(Tensor::scalar(s), Op::Dot(a, b), &[a, b]))
    }

    /// Row `i` of a `[N, C]` tensor as `[C]`.
    pub fn row(&mut self, a: Var, i: usize) -> Result<Var> {
        let s = self.shape(a).to_vec();
        if s.len() != 2 || i >= s[0] {
            return shape_err(format!("row {i} of {s:?}"));
        }
        let data = self.value(a).data()[i * s[1]..(i + 1) * s[1]].to_vec();
        Ok(self.push(Tensor::vector(data), Op::Row(a, i), &[a]))
    }

    /// Concatenates single-element tensors into a vector.
    pub fn stack(&mut self, parts: &[Var]) -> Result<Var> {
        if parts.is_empty() || parts.iter().any(|&p| self.value(p).len() != 1) {
            return shape_err("stack expects one or more single-element tensors".into());
        }
        let data = parts.iter().map(|&p| self.scalar(p)).collect();
        Ok(self.push(Tensor::vector(data), Op::Stack(parts.to_vec()), parts))
    }

    /// Contiguous range of the flattened input, reshaped to `shape`.
    pub fn slice(&mut self, a: Var, offset: usize, shape: Vec<usize>) -> Result<Var> {
        let len: usize = shape.iter().product();
        if offset + len > self.value(a).len() {
            return shape_err(format!("slice {offset}+{len} of {} values", self.value(a).len()));
        }
        let data = self.value(a).data()[offset..offset + len].to_vec();
        let value = Tensor::new(shape, data)?;
        Ok(self.push(value, Op::Slice { input: a, offset }, &[a]))
    }

    /// Nearest-neighbour resize of `[N, C, D, H, W]` to spatial `size`;
    /// output voxel `o` reads input voxel `floor(o · in / out)` per axis.
    pub fn upsample_nearest(&mut self, a: Var, size: [usize; 3]) -> Result<Var> {
        let s = self.shape(a).to_vec();
        if s.len() != 5 || size.contains(&0) {
            return shape_err(format!("upsample {s:?} to {size:?}"));
        }
        let (inp, plane) = ([s[2], s[3], s[4]], s[2] * s[3] * s[4]);
        let map = |axis: usize, o: usize| o * inp[axis] / size[axis];
        let mut index = Vec::with_capacity(size.iter().product());
        for z in 0..size[0] {
            for y in 0..size[1] {
                for x in 0..size[2] {
                    index.push((map(0, z) * inp[1] + map(1, y)) * inp[2] + map(2, x));
                }
            }
        }
        let src = self.value(a).data();
        let mut data = Vec::with_capacity(s[0] * s[1] * index.len());
        for ch in src.chunks_exact(plane) {
            data.extend(index.iter().map(|&i| ch[i]));
        }
        let value = Tensor::new(vec![s[0], s[1], size[0], size[1], size[2]], data)?;
        Ok(self.push(value, Op::Upsample { input: a, index }, &[a]))
    }

    /// Mean softmax cross-entropy over every position of `logits`
    /// (`[N, K, ...]`), with one class target per `(n, position)` in
    /// row-major order.
    pub fn softmax_cross_entropy(&mut self, logits: Var, targets: &[u32]) -> Result<Var> {
        let s = self.shape(logits).to_vec();
        if s.len() < 2 {
            return shape_err(format!("cross entropy over {s:?}"));
        }
        let (n, k, inner) = (s[0], s[1], s[2..].iter().product::<usize>());
        if targets.len() != n * inner {
            return shape_err(format!("{} targets for logits {s:?}", targets.len()));
        }
        if let Some(t) = targets.iter().find(|&&t| t as usize >= k) {
            return shape_err(format!("target class {t} with {k} logits"));
        }
        let (probs, loss) = softmax_probs(self.value(logits).data(), n, k, inner, Some(targets));
        let count = T::from_usize(targets.len()).unwrap();
        let op = Op::SoftmaxXent { logits, probs, targets: targets.to_vec() };
        Ok(self.push(Tensor::scalar(loss / count), op, &[logits]))
    }

    /// Gradients of the single-element `loss` with respect to every node
    /// that depends on a parameter.
    pub fn backward(&self, loss: Var) -> Result<Gradients<T>> {
        if self.value(loss).len() != 1 {
            return shape_err(format!("backward needs a scalar, got {:?}", self.shape(loss)));
        }
        let mut grads: Vec<Option<Vec<T>>> = vec![None; loss.0 + 1];
        grads[loss.0] = Some(vec![T::one()]);
        for i in (0..=loss.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            let node = &self.nodes[i];
            if node.needs_grad {
                self.propagate(&node.op, &node.value, &g, &mut grads);
            }
            grads[i] = Some(g);
        }
        for (i, g) in grads.iter_mut().enumerate() {
            if !self.nodes[i].needs_grad {
                *g = None;
            }
        }
        Ok(Gradients { grads })
    }

    fn propagate(&self, op: &Op<T>, out: &Tensor<T>, g: &[T], grads: &mut [Option<Vec<T>>]) {
        let val = |v: Var| self.nodes[v.0].value.data();
        let mut acc = |v: Var, f: &dyn Fn(&mut [T])| {
            if !self.nodes[v.0].needs_grad {
                return;
            }
            let slot = grads[v.0].get_or_insert_with(|| vec![T::zero(); self.nodes[v.0].value.len()]);
            f(slot);
        };
        let zero = T::zero();
        match op {
            Op::Leaf => {}
            Op::Add(a, b) => {
                acc(*a, &|s| axpy(s, g, T::one()));
                acc(*b, &|s| axpy(s, g, T::one()));
            }
            Op::Sub(a, b) => {
                acc(*a, &|s| axpy(s, g, T::one()));
                acc(*b, &|s| axpy(s, g, -T::one()));
            }
            Op::Mul(a, b) => {
                let (x, y) = (val(*a), val(*b));
                acc(*a, &|s| s.iter_mut().enumerate().for_each(|(i, v)| *v = *v + g[i] * y[i]));
                acc(*b, &|s| s.iter_mut().enumerate().for_each(|(i, v)| *v = *v + g[i] * x[i]));
            }
            Op::Div(a, b) => {
                let (x, y) = (val(*a), val(*b));
                acc(*a, &|s| s.iter_mut().enumerate().for_each(|(i, v)| *v = *v + g[i] / y[i]));
                acc(*b, &|s| s.iter_mut().enumerate().for_each(|(i, v)| *v = *v - g[i] * x[i] / (y[i] * y[i])));
            }
            Op::Scale(a, c) => acc(*a, &|s| axpy(s, g, *c)),
            Op::AddScalar(a) => acc(*a, &|s| axpy(s, g, T::one())),
            Op::ChannelBias(x, b) => {
                acc(*x, &|s| axpy(s, g, T::one()));
                let shape = out.shape();
                let (c, inner) = (shape[1], shape[2..].iter().product::<usize>());
                acc(*b, &|s| {
                    for (i, &gv) in g.iter().enumerate() {
                        let ch = (i / inner) % c;
                        s[ch] = s[ch] + gv;
                    }
                });
            }
            Op::MatMul(a, b) => {
                let (sa, sb) = (self.shape(*a), self.shape(*b));
                let (m, k, n) = (sa[0], sa[1], sb[1]);
                let (x, y) = (val(*a), val(*b));
                // dA = G · Bᵀ, dB = Aᵀ · G
                acc(*a, &|s| {
                    for i in 0..m {
                        for p in 0..k {
                            let mut t = zero;
                            for j in 0..n {
                                t = t + g[i * n + j] * y[p * n + j];
                            }
                            s[i * k + p] = s[i * k + p] + t;
                        }
                    }
                });
                acc(*b, &|s| {
                    for i in 0..m {
                        for p in 0..k {
                            let xv = x[i * k + p];
                            for j in 0..n {
                                s[p * n + j] = s[p * n + j] + xv * g[i * n + j];
                            }
                        }
                    }
                });
            }
            Op::Conv3d { input, weight, geom } => {
                if self.nodes[input.0].needs_grad {
                    let gi = conv::grad_input(g, val(*weight), geom);
                    acc(*input, &|s| axpy(s, &gi, T::one()));
                }
                if self.nodes[weight.0].needs_grad {
                    let gw = conv::grad_weight(g, val(*input), geom);
                    acc(*weight, &|s| axpy(s, &gw, T::one()));
                }
            }
            Op::Relu(a) => {
                let x = val(*a);
                acc(*a, &|s| {
                    s.iter_mut().enumerate().for_each(|(i, v)| {
                        if x[i] > zero {
                            *v = *v + g[i]
                        }
                    })
                });
            }
            Op::Abs(a) => {
                let x = val(*a);
                acc(*a, &|s| {
                    s.iter_mut().enumerate().for_each(|(i, v)| {
                        if x[i] > zero {
                            *v = *v + g[i]
                        } else if x[i] < zero {
                            *v = *v - g[i]
                        }
                    })
                });
            }
            Op::Log(a) => {
                let x = val(*a);
                acc(*a, &|s| s.iter_mut().enumerate().for_each(|(i, v)| *v = *v + g[i] / x[i]));
            }
            Op::Sqrt(a) => {
                let y = out.data();
                acc(*a, &|s| {
                    s.iter_mut().enumerate().for_each(|(i, v)| {
                        if y[i] > zero {
                            *v = *v + g[i] / (y[i] + y[i])
                        }
                    })
                });
            }
            Op::ClampMax(a, c) => {
                let x = val(*a);
                acc(*a, &|s| {
                    s.iter_mut().enumerate().for_each(|(i, v)| {
                        if x[i] < *c {
                            *v = *v + g[i]
                        }
                    })
                });
            }
            Op::ClampMin(a, c) => {
                let x = val(*a);
                acc(*a, &|s| {
                    s.iter_mut().enumerate().for_each(|(i, v)| {
                        if x[i] > *c {
                            *v = *v + g[i]
                        }
                    })
                });
            }
            Op::Sum(a) => acc(*a, &|s| s.iter_mut().for_each(|v| *v = *v + g[0])),
            Op::Mean(a) => {
                let d = g[0] / T::from_usize(self.nodes[a.0].value.len()).unwrap();
                acc(*a, &|s| s.iter_mut().for_each(|v| *v = *v + d));
            }
            Op::Dropout { input, mask } => {
                acc(*input, &|s| s.iter_mut().enumerate().for_each(|(i, v)| *v = *v + g[i] * mask[i]));
            }
            Op::Pool(a) => {
                let inner = self.nodes[a.0].value.len() / out.len();
                let div = T::from_usize(inner).unwrap();
                acc(*a, &|s| s.iter_mut().enumerate().for_each(|(i, v)| *v = *v + g[i / inner] / div));
            }
            Op::L2Norm(a) => {
                let (x, norm) = (val(*a), out.data()[0]);
                if norm > zero {
                    acc(*a, &|s| s.iter_mut().enumerate().for_each(|(i, v)| *v = *v + g[0] * x[i] / norm));
                }
            }
            Op::Dot(a, b) => {
                let (x, y) = (val(*a), val(*b));
                acc(*a, &|s| s.iter_mut().enumerate().for_each(|(i, v)| *v = *v + g[0] * y[i]));
                acc(*b, &|s| s.iter_mut().enumerate().for_each(|(i, v)| *v = *v + g[0] * x[i]));
            }
            Op::Row(a, r) => {
                let c = g.len();
                acc(*a, &|s| axpy(&mut s[r * c..(r + 1) * c], g, T::one()));
            }
            Op::Stack(parts) => {
                for (i, p) in parts.iter().enumerate() {
                    acc(*p, &|s| s[0] = s[0] + g[i]);
                }
            }
            Op::Slice { input, offset } => {
                acc(*input, &|s| axpy(&mut s[*offset..*offset + g.len()], g, T::one()));
            }
            Op::Upsample { input, index } => {
                let plane_out = index.len();
                let plane_in = self.nodes[input.0].value.len() / (g.len() / plane_out);
                acc(*input, &|s| {
                    for (c, gc) in g.chunks_exact(plane_out).enumerate() {
                        let dst = &mut s[c * plane_in..(c + 1) * plane_in];
                        for (o, &i) in index.iter().enumerate() {
                            dst[i] = dst[i] + gc[o];
                        }
                    }
                });
            }
            Op::SoftmaxXent { logits, probs, targets } => {
                let shape = self.shape(*logits);
                let (k, inner) = (shape[1], shape[2..].iter().product::<usize>());
                let scale = g[0] / T::from_usize(targets.len()).unwrap();
                acc(*logits, &|s| {
                    for (i, v) in s.iter_mut().enumerate() {
                        let (n, rest) = (i / (k * inner), i % (k * inner));
                        let (c, pos) = (rest / inner, rest % inner);
                        let onehot = if targets[n * inner + pos] as usize == c { T::one() } else { zero };
                        *v = *v + scale * (probs[i] - onehot);
                    }
                });
            }
        }
    }
}

fn axpy<T: Real>(dst: &mut [T], src: &[T], a: T) {
    for (d, &s) in dst.iter_mut().zip(src) {
        *d = *d + a * s;
    }
}

pub(crate) fn matmul_raw<T: Real>(a: &[T], b: &[T], m: usize, k: usize, n: usize) -> Vec<T> {
    let mut out = vec![T::zero(); m * n];
    for i in 0..m {
        let row = &mut out[i * n..(i + 1) * n];
        for p in 0..k {
            let av = a[i * k + p];
            for (o, &bv) in row.iter_mut().zip(&b[p * n..(p + 1) * n]) {
                *o = *o + av * bv;
            }
        }
    }
    out
}

/// Channel softmax of `[N, K, inner]` logits, plus the summed negative
/// log-likelihood of `targets` when given.
pub(crate) fn softmax_probs<T: Real>(logits: &[T], n: usize, k: usize, inner: usize, targets: Option<&[u32]>) -> (Vec<T>, T) {
    let mut probs = vec![T::zero(); logits.len()];
    let mut loss = T::zero();
    for b in 0..n {
        let base = b * k * inner;
        for pos in 0..inner {
            let at = |c: usize| base + c * inner + pos;
            let mut mx = logits[at(0)];
            for c in 1..k {
                mx = mx.max(logits[at(c)]);
            }
            let mut z = T::zero();
            for c in 0..k {
                let e = (logits[at(c)] - mx).exp();
                probs[at(c)] = e;
                z = z + e;
            }
            for c in 0..k {
                probs[at(c)] = probs[at(c)] / z;
            }
            if let Some(t) = targets {
                let c = t[b * inner + pos] as usize;
                loss = loss - (logits[at(c)] - mx - z.ln());
            }
        }
    }
    (probs, loss)
}

fn op_name<T>(op: &Op<T>) -> &'static str {
    match op {
        Op::Leaf => "leaf",
        Op::Add(..) => "add",
        Op::Sub(..) => "sub",
        Op::Mul(..) => "mul",
        Op::Div(..) => "div",
        Op::Scale(..) => "scale",
        Op::AddScalar(..) => "add_scalar",
        Op::ChannelBias(..) => "channel_bias",
        Op::MatMul(..) => "matmul",
        Op::Conv3d { .. } => "conv3d",
        Op::Relu(..) => "relu",
        Op::Abs(..) => "abs",
        Op::Log(..) => "log",
        Op::Sqrt(..) => "sqrt",
        Op::ClampMax(..) => "clamp_max",
        Op::ClampMin(..) => "clamp_min",
        Op::Sum(..) => "sum",
        Op::Mean(..) => "mean",
        Op::Dropout { .. } => "dropout",
        Op::Pool(..) => "adaptive_avg_pool3d_to_1",
        Op::L2Norm(..) => "l2_norm",
        Op::Dot(..) => "dot",
        Op::Row(..) => "row",
        Op::Stack(..) => "stack",
        Op::Slice { .. } => "slice",
        Op::Upsample { .. } => "upsample_nearest",
        Op::SoftmaxXent { .. } => "softmax_cross_entropy",
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn dot_closed_form() {
        let mut t = Tape::<f64>::new();
        let u = t.param(Tensor::vector(vec![3.0, 4.0]));
        let d = t.dot(u, u).unwrap();
        let g = t.backward(d).unwrap();
        assert_eq!(t.scalar(d), 25.0);
        assert_eq!(g.get(u).unwrap(), &[6.0, 8.0]);
    }

    #[test]
    fn abs_subgradient_at_zero_is_zero() {
        let mut t = Tape::<f64>::new();
        let x = t.param(Tensor::vector(vec![0.0, -2.0, 2.0]));
        let a = t.abs(x);
        let s = t.sum(a);
        let g = t.backward(s).unwrap();
        assert_eq!(g.get(x).unwrap(), &[0.0, -1.0, 1.0]);
    }

    #[test]
    fn domain_and_shape_errors() {
        let mut t = Tape::<f64>::new();
        let x = t.param(Tensor::vector(vec![1.0, 0.0]));
        assert!(matches!(t.log(x), Err(AutodiffError::Domain(_))));
        let y = t.param(Tensor::vector(vec![1.0, 2.0, 3.0]));
        assert!(matches!(t.add(x, y), Err(AutodiffError::Shape(_))));
        assert!(matches!(t.matmul(x, y), Err(AutodiffError::Shape(_))));
    }

    #[test]
    fn constants_receive_no_gradient() {
        let mut t = Tape::<f64>::new();
        let w = t.param(Tensor::vector(vec![2.0]));
        let c = t.constant(Tensor::vector(vec![5.0]));
        let p = t.mul(w, c).unwrap();
        let g = t.backward(p).unwrap();
        assert_eq!(g.get(w).unwrap(), &[5.0]);
        assert!(g.get(c).is_none());
    }

    #[test]
    fn dropout_zero_is_identity() {
        let mut t = Tape::<f64>::new();
        let x = t.param(Tensor::vector(vec![0.5, -1.5, 2.0]));
        let mut rng = crate::rng::stream(0, 0);
        let d = t.dropout(x, 0.0, &mut rng).unwrap();
        assert_eq!(t.value(d), t.value(x));
        let s = t.sum(d);
        assert_eq!(t.backward(s).unwrap().get(x).unwrap(), &[1.0, 1.0, 1.0]);
    }

    #[test]
    fn dropout_scales_survivors() {
        let mut t = Tape::<f64>::new();
        let x = t.param(Tensor::vector(vec![1.0; 1000]));
        let mut rng = crate::rng::stream(1, 0);
        let d = t.dropout(x, 0.5, &mut rng).unwrap();
        let vals = t.value(d).data();
        assert!(vals.iter().all(|&v| v == 0.0 || v == 2.0));
        let kept = vals.iter().filter(|&&v| v > 0.0).count();
        assert!((400..600).contains(&kept));
    }

    #[test]
    fn backward_rejects_non_scalar() {
        let mut t = Tape::<f64>::new();
        let x = t.param(Tensor::vector(vec![1.0, 2.0]));
        assert!(t.backward(x).is_err());
    }
}
