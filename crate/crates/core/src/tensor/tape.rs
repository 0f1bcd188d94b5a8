//! Wengert-list tape: forward ops append nodes, `backward` walks them in
//! reverse. Node order is a topological order by construction, so a single
//! reverse sweep visits every node exactly once.

use super::kernels::{self, ConvGeom};
use super::{softmax_f64, Result, Tensor, TensorError};

/// Handle to a node on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug)]
enum Op {
    Leaf,
    Add(Var, Var),
    Mul(Var, Var),
    Scale(Var, f32),
    Sum(Var),
    Reshape(Var),
    Relu(Var),
    MatMul {
        a: Var,
        b: Var,
        m: usize,
        k: usize,
        n: usize,
    },
    Affine {
        x: Var,
        w: Var,
        b: Option<Var>,
    },
    Conv2d {
        x: Var,
        w: Var,
        b: Option<Var>,
        geom: ConvGeom,
    },
    MaxPool {
        x: Var,
        argmax: Vec<u32>,
    },
    Softmax(Var),
    CrossEntropy {
        logits: Var,
        label: usize,
        probs: Vec<f64>,
    },
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

/// Records one forward evaluation. A tape is cheap to create; build a fresh
/// one per evaluation so frozen models can be queried from many threads.
#[derive(Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

/// Gradients produced by [`Tape::backward`], indexed by [`Var`].
#[derive(Debug)]
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    /// Gradient of a leaf that requires gradients. Leaves the loss does not
    /// depend on get an all-zero tensor; other nodes return `None`.
    pub fn get(&self, v: Var) -> Option<&Tensor> {
        self.grads.get(v.0).and_then(Option::as_ref)
    }

    pub fn take(&mut self, v: Var) -> Option<Tensor> {
        self.grads.get_mut(v.0).and_then(Option::take)
    }
}

fn mismatch(op: &'static str, a: &Tensor, b: &Tensor) -> TensorError {
    TensorError::ShapeMismatch {
        op,
        left: a.shape().to_vec(),
        right: b.shape().to_vec(),
    }
}

fn invalid(op: &'static str, reason: impl Into<String>) -> TensorError {
    TensorError::InvalidArgument {
        op,
        reason: reason.into(),
    }
}

fn accumulate(slot: &mut Option<Vec<f32>>, contrib: Vec<f32>) {
    match slot {
        Some(existing) => existing.iter_mut().zip(&contrib).for_each(|(e, c)| *e += c),
        None => *slot = Some(contrib),
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

    /// Adds an input tensor; its `requires_grad` flag decides whether a
    /// gradient is reported for it.
    pub fn leaf(&mut self, t: Tensor) -> Var {
        let requires_grad = t.requires_grad();
        self.push(t, Op::Leaf, requires_grad)
    }

    pub fn constant(&mut self, t: Tensor) -> Var {
        self.push(t.with_requires_grad(false), Op::Leaf, false)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    fn push(&mut self, value: Tensor, op: Op, requires_grad: bool) -> Var {
        let op = if requires_grad { op } else { Op::Leaf };
        self.nodes.push(Node {
            value: value.with_requires_grad(requires_grad),
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn rg(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(b));
        if ta.shape() != tb.shape() {
            return Err(mismatch("add", ta, tb));
        }
        let data = ta.data().iter().zip(tb.data()).map(|(x, y)| x + y).collect();
        let out = Tensor::new(ta.shape().to_vec(), data)?;
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(out, Op::Add(a, b), rg))
    }

    /// Elementwise product of equally shaped tensors.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(b));
        if ta.shape() != tb.shape() {
            return Err(mismatch("mul", ta, tb));
        }
        let data = ta.data().iter().zip(tb.data()).map(|(x, y)| x * y).collect();
        let out = Tensor::new(ta.shape().to_vec(), data)?;
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(out, Op::Mul(a, b), rg))
    }

    pub fn scale(&mut self, a: Var, factor: f32) -> Result<Var> {
        let ta = self.value(a);
        let data = ta.data().iter().map(|x| x * factor).collect();
        let out = Tensor::new(ta.shape().to_vec(), data)?;
        let rg = self.rg(a);
        Ok(self.push(out, Op::Scale(a, factor), rg))
    }

    pub fn sum(&mut self, a: Var) -> Result<Var> {
        let total: f64 = self.value(a).data().iter().map(|&v| f64::from(v)).sum();
        let rg = self.rg(a);
        Ok(self.push(Tensor::scalar(total as f32), Op::Sum(a), rg))
    }

    pub fn reshape(&mut self, a: Var, shape: Vec<usize>) -> Result<Var> {
        let out = self.value(a).reshaped(shape)?;
        let rg = self.rg(a);
        Ok(self.push(out, Op::Reshape(a), rg))
    }

    pub fn flatten(&mut self, a: Var) -> Result<Var> {
        let n = self.value(a).len();
        self.reshape(a, vec![n])
    }

    pub fn relu(&mut self, a: Var) -> Result<Var> {
        let ta = self.value(a);
        let data = ta.data().iter().map(|&x| if x > 0.0 { x } else { 0.0 }).collect();
        let out = Tensor::new(ta.shape().to_vec(), data)?;
        let rg = self.rg(a);
        Ok(self.push(out, Op::Relu(a), rg))
    }

    /// `[m,k] x [k,n] -> [m,n]`.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(b));
        if ta.shape().len() != 2 || tb.shape().len() != 2 || ta.shape()[1] != tb.shape()[0] {
            return Err(mismatch("matmul", ta, tb));
        }
        let (m, k, n) = (ta.shape()[0], ta.shape()[1], tb.shape()[1]);
        let out = Tensor::new(vec![m, n], kernels::matmul(ta.data(), tb.data(), m, k, n))?;
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(out, Op::MatMul { a, b, m, k, n }, rg))
    }

    /// Dense layer `w . flatten(x) + b` with `w: [out, in]`, `b: [out]`.
    pub fn affine(&mut self, x: Var, w: Var, b: Option<Var>) -> Result<Var> {
        let (tx, tw) = (self.value(x), self.value(w));
        if tw.shape().len() != 2 || tw.shape()[1] != tx.len() {
            return Err(mismatch("affine", tx, tw));
        }
        let out_dim = tw.shape()[0];
        let bias = match b {
            Some(bv) => {
                let tb = self.value(bv);
                if tb.shape() != [out_dim] {
                    return Err(mismatch("affine bias", tw, tb));
                }
                Some(tb.data())
            }
            None => None,
        };
        let data = kernels::affine_forward(tx.data(), tw.data(), bias, out_dim);
        let out = Tensor::new(vec![out_dim], data)?;
        let rg = self.rg(x) || self.rg(w) || b.is_some_and(|b| self.rg(b));
        Ok(self.push(out, Op::Affine { x, w, b }, rg))
    }

    /// 2-D convolution of a `[C,H,W]` input with `[O,C,K,K]` weights and
    /// symmetric zero padding.
    pub fn conv2d(&mut self, x: Var, w: Var, b: Option<Var>, stride: usize, padding: usize) -> Result<Var> {
        let (tx, tw) = (self.value(x), self.value(w));
        if tx.shape().len() != 3
            || tw.shape().len() != 4
            || tw.shape()[1] != tx.shape()[0]
            || tw.shape()[2] != tw.shape()[3]
        {
            return Err(mismatch("conv2d", tx, tw));
        }
        if stride == 0 {
            return Err(invalid("conv2d", "stride must be at least 1"));
        }
        let (channels, height, width) = (tx.shape()[0], tx.shape()[1], tx.shape()[2]);
        let (out_channels, kernel) = (tw.shape()[0], tw.shape()[2]);
        if height + 2 * padding < kernel || width + 2 * padding < kernel || kernel == 0 {
            return Err(mismatch("conv2d", tx, tw));
        }
        let geom = ConvGeom {
            channels,
            height,
            width,
            out_channels,
            kernel,
            stride,
            padding,
            out_height: (height + 2 * padding - kernel) / stride + 1,
            out_width: (width + 2 * padding - kernel) / stride + 1,
        };
        let bias = match b {
            Some(bv) => {
                let tb = self.value(bv);
                if tb.shape() != [out_channels] {
                    return Err(mismatch("conv2d bias", tw, tb));
                }
                Some(tb.data())
            }
            None => None,
        };
        let mut data = vec![0.0; out_channels * geom.out_height * geom.out_width];
        kernels::conv2d_forward(&geom, tx.data(), tw.data(), bias, &mut data);
        let out = Tensor::new(vec![out_channels, geom.out_height, geom.out_width], data)?;
        let rg = self.rg(x) || self.rg(w) || b.is_some_and(|b| self.rg(b));
        Ok(self.push(out, Op::Conv2d { x, w, b, geom }, rg))
    }

    /// Max pooling over `[C,H,W]` with square windows and no padding.
    pub fn max_pool2d(&mut self, x: Var, kernel: usize, stride: usize) -> Result<Var> {
        let tx = self.value(x);
        if tx.shape().len() != 3 {
            return Err(invalid("max_pool2d", format!("expected [C,H,W], got {:?}", tx.shape())));
        }
        let (c, h, w) = (tx.shape()[0], tx.shape()[1], tx.shape()[2]);
        if kernel == 0 || stride == 0 || kernel > h || kernel > w {
            return Err(invalid(
                "max_pool2d",
                format!("window {kernel} stride {stride} does not fit input {:?}", tx.shape()),
            ));
        }
        let (data, argmax, oh, ow) = kernels::max_pool_forward(tx.data(), c, h, w, kernel, stride);
        let out = Tensor::new(vec![c, oh, ow], data)?;
        let rg = self.rg(x);
        Ok(self.push(out, Op::MaxPool { x, argmax }, rg))
    }

    pub fn softmax(&mut self, a: Var) -> Result<Var> {
        let ta = self.value(a);
        if ta.is_empty() {
            return Err(invalid("softmax", "empty input"));
        }
        let data = softmax_f64(ta.data()).into_iter().map(|p| p as f32).collect();
        let out = Tensor::new(ta.shape().to_vec(), data)?;
        let rg = self.rg(a);
        Ok(self.push(out, Op::Softmax(a), rg))
    }

    /// `-log softmax(logits)[label]`, evaluated with log-sum-exp in f64.
    pub fn cross_entropy(&mut self, logits: Var, label: usize) -> Result<Var> {
        let tl = self.value(logits);
        if label >= tl.len() {
            return Err(TensorError::LabelOutOfRange {
                label,
                classes: tl.len(),
            });
        }
        let max = tl.data().iter().fold(f64::NEG_INFINITY, |m, &v| m.max(f64::from(v)));
        let sum: f64 = tl.data().iter().map(|&v| (f64::from(v) - max).exp()).sum();
        let lse = max + sum.ln();
        let loss = lse - f64::from(tl.data()[label]);
        let rg = self.rg(logits);
        let probs = if rg { softmax_f64(tl.data()) } else { Vec::new() };
        Ok(self.push(
            Tensor::scalar(loss as f32),
            Op::CrossEntropy { logits, label, probs },
            rg,
        ))
    }

    /// Reverse sweep from a scalar `loss`. Every leaf flagged
    /// `requires_grad` receives a gradient (zeros when unreachable).
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        let root = &self.nodes[loss.0];
        if !root.value.is_scalar() {
            return Err(TensorError::NotScalar(root.value.shape().to_vec()));
        }
        let mut slots: Vec<Option<Vec<f32>>> = vec![None; self.nodes.len()];
        if root.requires_grad {
            slots[loss.0] = Some(vec![1.0]);
        }
        for idx in (0..=loss.0).rev() {
            let node = &self.nodes[idx];
            if matches!(node.op, Op::Leaf) {
                continue;
            }
            let Some(g) = slots[idx].take() else { continue };
            self.propagate(&node.op, &node.value, &g, &mut slots);
        }
        let grads = self
            .nodes
            .iter()
            .zip(slots)
            .map(|(node, slot)| {
                if matches!(node.op, Op::Leaf) && node.requires_grad {
                    let data = slot.unwrap_or_else(|| vec![0.0; node.value.len()]);
                    Some(Tensor::new(node.value.shape().to_vec(), data).expect("gradient matches value shape"))
                } else {
                    None
                }
            })
            .collect();
        Ok(Gradients { grads })
    }

    fn propagate(&self, op: &Op, out: &Tensor, g: &[f32], slots: &mut [Option<Vec<f32>>]) {
        match *op {
            Op::Leaf => {}
            Op::Add(a, b) => {
                if self.rg(a) {
                    accumulate(&mut slots[a.0], g.to_vec());
                }
                if self.rg(b) {
                    accumulate(&mut slots[b.0], g.to_vec());
                }
            }
            Op::Mul(a, b) => {
                let (va, vb) = (self.value(a).data(), self.value(b).data());
                if self.rg(a) {
                    accumulate(&mut slots[a.0], g.iter().zip(vb).map(|(g, y)| g * y).collect());
                }
                if self.rg(b) {
                    accumulate(&mut slots[b.0], g.iter().zip(va).map(|(g, x)| g * x).collect());
                }
            }
            Op::Scale(a, factor) => {
                accumulate(&mut slots[a.0], g.iter().map(|v| v * factor).collect());
            }
            Op::Sum(a) => {
                accumulate(&mut slots[a.0], vec![g[0]; self.value(a).len()]);
            }
            Op::Reshape(a) => accumulate(&mut slots[a.0], g.to_vec()),
            Op::Relu(a) => {
                let x = self.value(a).data();
                let d = g.iter().zip(x).map(|(&g, &x)| if x > 0.0 { g } else { 0.0 }).collect();
                accumulate(&mut slots[a.0], d);
            }
            Op::MatMul { a, b, m, k, n } => {
                if self.rg(a) {
                    let d = kernels::matmul_grad_a(g, self.value(b).data(), m, k, n);
                    accumulate(&mut slots[a.0], d);
                }
                if self.rg(b) {
                    let d = kernels::matmul_grad_b(self.value(a).data(), g, m, k, n);
                    accumulate(&mut slots[b.0], d);
                }
            }
            Op::Affine { x, w, b } => {
                let tx = self.value(x);
                if self.rg(x) {
                    let d = kernels::affine_grad_input(self.value(w).data(), g, tx.len());
                    accumulate(&mut slots[x.0], d);
                }
                if self.rg(w) {
                    accumulate(&mut slots[w.0], kernels::affine_grad_weight(tx.data(), g));
                }
                if let Some(b) = b.filter(|&b| self.rg(b)) {
                    accumulate(&mut slots[b.0], g.to_vec());
                }
            }
            Op::Conv2d { x, w, b, geom } => {
                if self.rg(x) {
                    let d = kernels::conv2d_backward_input(&geom, self.value(w).data(), g);
                    accumulate(&mut slots[x.0], d);
                }
                if self.rg(w) {
                    let d = kernels::conv2d_backward_weight(&geom, self.value(x).data(), g);
                    accumulate(&mut slots[w.0], d);
                }
                if let Some(b) = b.filter(|&b| self.rg(b)) {
                    accumulate(&mut slots[b.0], kernels::conv2d_backward_bias(&geom, g));
                }
            }
            Op::MaxPool { x, ref argmax } => {
                let mut d = vec![0.0f32; self.value(x).len()];
                for (&src, &gv) in argmax.iter().zip(g) {
                    d[src as usize] += gv;
                }
                accumulate(&mut slots[x.0], d);
            }
            Op::Softmax(a) => {
                let y = out.data();
                let dot: f64 = g.iter().zip(y).map(|(&g, &y)| f64::from(g) * f64::from(y)).sum();
                let d = g
                    .iter()
                    .zip(y)
                    .map(|(&g, &y)| (f64::from(y) * (f64::from(g) - dot)) as f32)
                    .collect();
                accumulate(&mut slots[a.0], d);
            }
            Op::CrossEntropy {
                logits,
                label,
                ref probs,
            } => {
                let scale = f64::from(g[0]);
                let d = probs
                    .iter()
                    .enumerate()
                    .map(|(i, &p)| {
                        let onehot = if i == label { 1.0 } else { 0.0 };
                        (scale * (p - onehot)) as f32
                    })
                    .collect();
                accumulate(&mut slots[logits.0], d);
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn param(shape: &[usize], data: Vec<f32>) -> Tensor {
        Tensor::new(shape.to_vec(), data).unwrap().with_requires_grad(true)
    }

    #[test]
    fn softmax_of_zeros_is_uniform() {
        let mut tape = Tape::new();
        let x = tape.constant(Tensor::vector(vec![0.0; 3]));
        let y = tape.softmax(x).unwrap();
        for &p in tape.value(y).data() {
            assert!((p - 1.0 / 3.0).abs() < 1e-7);
        }
    }

    #[test]
    fn relu_clamps_negatives() {
        let mut tape = Tape::new();
        let x = tape.constant(Tensor::vector(vec![-1.0, 2.0]));
        let y = tape.relu(x).unwrap();
        assert_eq!(tape.value(y).data(), &[0.0, 2.0]);
    }

    #[test]
    fn conv_of_ones_sums_window() {
        let mut tape = Tape::new();
        let x = tape.constant(Tensor::full(&[1, 3, 3], 1.0));
        let w = tape.constant(Tensor::full(&[1, 1, 3, 3], 1.0));
        let y = tape.conv2d(x, w, None, 1, 0).unwrap();
        assert_eq!(tape.value(y).shape(), &[1, 1, 1]);
        assert_eq!(tape.value(y).data(), &[9.0]);
    }

    #[test]
    fn cross_entropy_values() {
        let mut tape = Tape::new();
        let x = tape.constant(Tensor::vector(vec![0.0, 0.0]));
        let l = tape.cross_entropy(x, 0).unwrap();
        assert!((tape.value(l).item().unwrap() - std::f32::consts::LN_2).abs() < 1e-7);

        let x = tape.constant(Tensor::vector(vec![10.0, -10.0]));
        let l0 = tape.cross_entropy(x, 0).unwrap();
        let l1 = tape.cross_entropy(x, 1).unwrap();
        // log1p(e^-20) and 20 + log1p(e^-20), evaluated in high precision
        let small = tape.value(l0).item().unwrap();
        assert!((small - 2.061_153_6e-9).abs() < 1e-14, "{small}");
        assert!((tape.value(l1).item().unwrap() - 20.0).abs() < 1e-5);

        assert!(matches!(
            tape.cross_entropy(x, 2),
            Err(TensorError::LabelOutOfRange { label: 2, classes: 2 })
        ));
    }

    #[test]
    fn sum_gradient_is_ones() {
        let mut tape = Tape::new();
        let x = tape.leaf(param(&[2, 2], vec![1.0, -2.0, 3.0, 0.5]));
        let s = tape.sum(x).unwrap();
        let g = tape.backward(s).unwrap();
        assert_eq!(g.get(x).unwrap().data(), &[1.0; 4]);
    }

    #[test]
    fn x_plus_x_counts_twice() {
        let mut tape = Tape::new();
        let x = tape.leaf(param(&[3], vec![0.3, -1.0, 7.0]));
        let y = tape.add(x, x).unwrap();
        let s = tape.sum(y).unwrap();
        let g = tape.backward(s).unwrap();
        assert_eq!(g.get(x).unwrap().data(), &[2.0; 3]);
    }

    #[test]
    fn cross_entropy_gradient_is_softmax_minus_onehot() {
        let logits = vec![0.5, -1.25, 2.0, 0.0];
        let mut tape = Tape::new();
        let x = tape.leaf(param(&[4], logits.clone()));
        let l = tape.cross_entropy(x, 2).unwrap();
        let g = tape.backward(l).unwrap();
        let p = softmax_f64(&logits);
        for (i, &gi) in g.get(x).unwrap().data().iter().enumerate() {
            let expect = p[i] - if i == 2 { 1.0 } else { 0.0 };
            assert!((f64::from(gi) - expect).abs() < 1e-7);
        }
    }

    #[test]
    fn affine_input_gradient_closed_form() {
        // logits = W x, dJ/dx = W^T (softmax(Wx) - onehot)
        let w = vec![0.2, -0.4, 1.0, 0.1, 0.3, 0.5];
        let xv = vec![1.5, -0.5];
        let mut tape = Tape::new();
        let x = tape.leaf(param(&[2], xv.clone()));
        let wv = tape.constant(Tensor::new(vec![3, 2], w.clone()).unwrap());
        let z = tape.affine(x, wv, None).unwrap();
        let l = tape.cross_entropy(z, 1).unwrap();
        let g = tape.backward(l).unwrap();
        let logits: Vec<f32> = (0..3).map(|j| w[2 * j] * xv[0] + w[2 * j + 1] * xv[1]).collect();
        let p = softmax_f64(&logits);
        for i in 0..2 {
            let expect: f64 = (0..3)
                .map(|j| f64::from(w[2 * j + i]) * (p[j] - if j == 1 { 1.0 } else { 0.0 }))
                .sum();
            assert!((f64::from(g.get(x).unwrap().data()[i]) - expect).abs() < 1e-6);
        }
    }

    #[test]
    fn unreachable_leaf_gets_zero_gradient() {
        let mut tape = Tape::new();
        let x = tape.leaf(param(&[2], vec![1.0, 2.0]));
        let unused = tape.leaf(param(&[3], vec![1.0, 2.0, 3.0]));
        let s = tape.sum(x).unwrap();
        let g = tape.backward(s).unwrap();
        assert_eq!(g.get(unused).unwrap().data(), &[0.0; 3]);
    }

    #[test]
    fn constants_are_not_taped() {
        let mut tape = Tape::new();
        let x = tape.constant(Tensor::vector(vec![1.0, 2.0]));
        let y = tape.scale(x, 2.0).unwrap();
        let s = tape.sum(y).unwrap();
        let g = tape.backward(s).unwrap();
        assert!(g.get(x).is_none());
        assert!(!tape.value(s).requires_grad());
    }

    #[test]
    fn backward_rejects_non_scalar() {
        let mut tape = Tape::new();
        let x = tape.leaf(param(&[2], vec![1.0, 2.0]));
        assert!(matches!(tape.backward(x), Err(TensorError::NotScalar(_))));
    }

    #[test]
    fn shape_errors_name_both_shapes() {
        let mut tape = Tape::new();
        let a = tape.constant(Tensor::zeros(&[2, 3]));
        let b = tape.constant(Tensor::zeros(&[2, 3]));
        let err = tape.matmul(a, b).unwrap_err().to_string();
        assert!(err.contains("[2, 3]") && err.contains("matmul"), "{err}");
        let c = tape.constant(Tensor::zeros(&[3]));
        let err = tape.add(a, c).unwrap_err().to_string();
        assert!(err.contains("[2, 3]") && err.contains("[3]"), "{err}");
    }
}
