//! Dense f64 tensors and a define-by-run reverse-mode autodiff tape.
//!
//! The tape (`Graph`) is rebuilt on every forward pass. Nodes are stored in
//! construction order, which is a topological order by construction, and
//! `backward` walks them in exact reverse. Gradients accumulate additively,
//! so reusing a node twice doubles its gradient as expected.

use thiserror::Error;

/// Probabilities are clamped to `[PROB_EPS, 1 - PROB_EPS]` before any log.
pub const PROB_EPS: f64 = 1e-7;

#[derive(Debug, Error)]
pub enum TensorError {
    #[error("shape mismatch in {op}: {detail}")]
    ShapeMismatch { op: &'static str, detail: String },
    #[error("{op}: values length {len} does not match shape {shape:?}")]
    LengthMismatch {
        op: &'static str,
        len: usize,
        shape: Vec<usize>,
    },
    #[error("empty reduction: mask keeps no elements")]
    EmptyReduction,
    #[error("backward root must be a scalar, got shape {0:?}")]
    NonScalarRoot(Vec<usize>),
    #[error("gradient check builder bound {built} parameters, expected {expected}")]
    ParamBindingMismatch { built: usize, expected: usize },
}

pub type Result<T> = std::result::Result<T, TensorError>;

/// Dense n-dimensional value grid in row-major order with an optional
/// gradient slot of the same length.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    values: Vec<f64>,
    grad: Option<Vec<f64>>,
}

impl Tensor {
    pub fn new(shape: Vec<usize>, values: Vec<f64>) -> Result<Self> {
        let expect: usize = shape.iter().product();
        if values.len() != expect {
            return Err(TensorError::LengthMismatch {
                op: "Tensor::new",
                len: values.len(),
                shape,
            });
        }
        Ok(Self {
            shape,
            values,
            grad: None,
        })
    }

    pub fn zeros(shape: Vec<usize>) -> Self {
        let n = shape.iter().product();
        Self {
            shape,
            values: vec![0.0; n],
            grad: None,
        }
    }

    pub fn full(shape: Vec<usize>, v: f64) -> Self {
        let n = shape.iter().product();
        Self {
            shape,
            values: vec![v; n],
            grad: None,
        }
    }

    pub fn scalar(v: f64) -> Self {
        Self {
            shape: vec![1],
            values: vec![v],
            grad: None,
        }
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn values_mut(&mut self) -> &mut [f64] {
        &mut self.values
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    /// Value of a one-element tensor.
    pub fn item(&self) -> f64 {
        assert_eq!(self.values.len(), 1, "item() on non-scalar tensor");
        self.values[0]
    }

    /// View a `[C,H,W]` tensor as the single-example batch `[1,C,H,W]`.
    pub fn into_batch(mut self) -> Tensor {
        self.shape.insert(0, 1);
        self
    }

    pub fn grad(&self) -> Option<&[f64]> {
        self.grad.as_deref()
    }

    pub fn clear_grad(&mut self) {
        self.grad = None;
    }

    /// Add `delta` into the gradient slot, allocating zeros on first use.
    pub fn accumulate_grad(&mut self, delta: &[f64]) {
        assert_eq!(delta.len(), self.values.len());
        let g = self
            .grad
            .get_or_insert_with(|| vec![0.0; self.values.len()]);
        for (gi, di) in g.iter_mut().zip(delta) {
            *gi += di;
        }
    }

    pub fn all_finite(&self) -> bool {
        self.values.iter().all(|v| v.is_finite())
            && self
                .grad
                .as_ref()
                .map_or(true, |g| g.iter().all(|v| v.is_finite()))
    }
}

/// Padding mode for stride-1 cross-correlation.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Padding {
    /// Zero padding so the spatial output size equals the input size.
    Same,
    /// No padding; output is `H - kh + 1` by `W - kw + 1`.
    Valid,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
struct ConvDims {
    n: usize,
    c: usize,
    h: usize,
    w: usize,
    k: usize,
    kh: usize,
    kw: usize,
    oh: usize,
    ow: usize,
    ph: usize,
    pw: usize,
}

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    Conv2d(ConvDims),
    Relu,
    Sigmoid,
    ClampProb,
    Log,
    Add,
    Sub,
    Mul,
    Div,
    AddScalar,
    MulScalar(f64),
    SubFromScalar,
    Sum { mask: Option<Vec<bool>> },
    Mean { mask: Option<Vec<bool>>, count: usize },
}

struct Node {
    op: Op,
    inputs: Vec<NodeId>,
    shape: Vec<usize>,
    values: Vec<f64>,
    needs_grad: bool,
    grad: Option<Vec<f64>>,
}

/// Handle to a node on the tape.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct NodeId(usize);

/// Define-by-run computation tape. Construction order is topological order;
/// `backward` traverses it in exact reverse.
#[derive(Default)]
pub struct Graph {
    nodes: Vec<Node>,
    params: Vec<NodeId>,
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

    fn push(&mut self, op: Op, inputs: Vec<NodeId>, shape: Vec<usize>, values: Vec<f64>) -> NodeId {
        let needs_grad = inputs.iter().any(|id| self.nodes[id.0].needs_grad);
        self.nodes.push(Node {
            op,
            inputs,
            shape,
            values,
            needs_grad,
            grad: None,
        });
        NodeId(self.nodes.len() - 1)
    }

    /// Insert a constant leaf. No gradient is tracked through it.
    pub fn leaf(&mut self, t: &Tensor) -> NodeId {
        self.push(Op::Leaf, vec![], t.shape.clone(), t.values.clone())
    }

    /// Insert a trainable leaf; its gradient is available after `backward`.
    pub fn param(&mut self, t: &Tensor) -> NodeId {
        let id = self.push(Op::Leaf, vec![], t.shape.clone(), t.values.clone());
        self.nodes[id.0].needs_grad = true;
        self.params.push(id);
        id
    }

    /// Trainable leaves in insertion order.
    pub fn params(&self) -> &[NodeId] {
        &self.params
    }

    pub fn shape(&self, id: NodeId) -> &[usize] {
        &self.nodes[id.0].shape
    }

    pub fn values(&self, id: NodeId) -> &[f64] {
        &self.nodes[id.0].values
    }

    /// Value of a scalar node.
    pub fn scalar_value(&self, id: NodeId) -> f64 {
        assert_eq!(self.nodes[id.0].values.len(), 1);
        self.nodes[id.0].values[0]
    }

    /// Copy a node's value out as a `Tensor`.
    pub fn tensor(&self, id: NodeId) -> Tensor {
        Tensor {
            shape: self.nodes[id.0].shape.clone(),
            values: self.nodes[id.0].values.clone(),
            grad: None,
        }
    }

    pub fn grad(&self, id: NodeId) -> Option<&[f64]> {
        self.nodes[id.0].grad.as_deref()
    }

    // ---- elementwise ops ----

    fn binary(&mut self, op: Op, name: &'static str, a: NodeId, b: NodeId) -> Result<NodeId> {
        if self.nodes[a.0].shape != self.nodes[b.0].shape {
            return Err(TensorError::ShapeMismatch {
                op: name,
                detail: format!(
                    "lhs {:?} vs rhs {:?}",
                    self.nodes[a.0].shape, self.nodes[b.0].shape
                ),
            });
        }
        let av = &self.nodes[a.0].values;
        let bv = &self.nodes[b.0].values;
        let values: Vec<f64> = match op {
            Op::Add => av.iter().zip(bv).map(|(x, y)| x + y).collect(),
            Op::Sub => av.iter().zip(bv).map(|(x, y)| x - y).collect(),
            Op::Mul => av.iter().zip(bv).map(|(x, y)| x * y).collect(),
            Op::Div => av.iter().zip(bv).map(|(x, y)| x / y).collect(),
            _ => unreachable!(),
        };
        let shape = self.nodes[a.0].shape.clone();
        Ok(self.push(op, vec![a, b], shape, values))
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.binary(Op::Add, "add", a, b)
    }

    pub fn sub(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.binary(Op::Sub, "sub", a, b)
    }

    pub fn mul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.binary(Op::Mul, "mul", a, b)
    }

    pub fn div(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.binary(Op::Div, "div", a, b)
    }

    pub fn add_scalar(&mut self, x: NodeId, c: f64) -> NodeId {
        let values = self.nodes[x.0].values.iter().map(|v| v + c).collect();
        let shape = self.nodes[x.0].shape.clone();
        self.push(Op::AddScalar, vec![x], shape, values)
    }

    pub fn mul_scalar(&mut self, x: NodeId, c: f64) -> NodeId {
        let values = self.nodes[x.0].values.iter().map(|v| v * c).collect();
        let shape = self.nodes[x.0].shape.clone();
        self.push(Op::MulScalar(c), vec![x], shape, values)
    }

    /// `c - x`, elementwise.
    pub fn sub_from_scalar(&mut self, x: NodeId, c: f64) -> NodeId {
        let values = self.nodes[x.0].values.iter().map(|v| c - v).collect();
        let shape = self.nodes[x.0].shape.clone();
        self.push(Op::SubFromScalar, vec![x], shape, values)
    }

    /// Elementwise activation. Sigmoid output is clamped away from {0, 1}
    /// so downstream logs stay finite.
    pub fn relu(&mut self, x: NodeId) -> NodeId {
        let values = self.nodes[x.0].values.iter().map(|v| v.max(0.0)).collect();
        let shape = self.nodes[x.0].shape.clone();
        self.push(Op::Relu, vec![x], shape, values)
    }

    pub fn sigmoid(&mut self, x: NodeId) -> NodeId {
        let values = self.nodes[x.0]
            .values
            .iter()
            .map(|v| (1.0 / (1.0 + (-v).exp())).clamp(PROB_EPS, 1.0 - PROB_EPS))
            .collect();
        let shape = self.nodes[x.0].shape.clone();
        self.push(Op::Sigmoid, vec![x], shape, values)
    }

    /// Clamp to `[PROB_EPS, 1 - PROB_EPS]`. Gradient passes through where the
    /// input was not clamped.
    pub fn clamp_prob(&mut self, x: NodeId) -> NodeId {
        let values = self.nodes[x.0]
            .values
            .iter()
            .map(|v| v.clamp(PROB_EPS, 1.0 - PROB_EPS))
            .collect();
        let shape = self.nodes[x.0].shape.clone();
        self.push(Op::ClampProb, vec![x], shape, values)
    }

    pub fn log(&mut self, x: NodeId) -> NodeId {
        let values = self.nodes[x.0].values.iter().map(|v| v.ln()).collect();
        let shape = self.nodes[x.0].shape.clone();
        self.push(Op::Log, vec![x], shape, values)
    }

    // ---- reductions ----

    fn check_mask(&self, name: &'static str, x: NodeId, mask: Option<&[bool]>) -> Result<()> {
        if let Some(m) = mask {
            if m.len() != self.nodes[x.0].values.len() {
                return Err(TensorError::ShapeMismatch {
                    op: name,
                    detail: format!(
                        "mask length {} vs tensor length {}",
                        m.len(),
                        self.nodes[x.0].values.len()
                    ),
                });
            }
        }
        Ok(())
    }

    /// Sum of all elements, or of the unmasked elements only.
    pub fn sum(&mut self, x: NodeId, mask: Option<&[bool]>) -> Result<NodeId> {
        self.check_mask("sum", x, mask)?;
        let v = &self.nodes[x.0].values;
        let total = match mask {
            Some(m) => v
                .iter()
                .zip(m)
                .filter(|(_, keep)| **keep)
                .map(|(x, _)| x)
                .sum(),
            None => v.iter().sum(),
        };
        Ok(self.push(
            Op::Sum {
                mask: mask.map(<[bool]>::to_vec),
            },
            vec![x],
            vec![1],
            vec![total],
        ))
    }

    /// Mean over unmasked elements. Errors when nothing is kept.
    pub fn mean(&mut self, x: NodeId, mask: Option<&[bool]>) -> Result<NodeId> {
        self.check_mask("mean", x, mask)?;
        let v = &self.nodes[x.0].values;
        let count = match mask {
            Some(m) => m.iter().filter(|k| **k).count(),
            None => v.len(),
        };
        if count == 0 {
            return Err(TensorError::EmptyReduction);
        }
        let total: f64 = match mask {
            Some(m) => v
                .iter()
                .zip(m)
                .filter(|(_, keep)| **keep)
                .map(|(x, _)| x)
                .sum(),
            None => v.iter().sum(),
        };
        Ok(self.push(
            Op::Mean {
                mask: mask.map(<[bool]>::to_vec),
                count,
            },
            vec![x],
            vec![1],
            vec![total / count as f64],
        ))
    }

    // ---- convolution ----

    /// Stride-1 cross-correlation of `input [N,C,H,W]` with
    /// `kernel [K,C,kh,kw]` plus `bias [K]`.
    pub fn conv2d(
        &mut self,
        input: NodeId,
        kernel: NodeId,
        bias: NodeId,
        padding: Padding,
    ) -> Result<NodeId> {
        let ishape = self.nodes[input.0].shape.clone();
        let kshape = self.nodes[kernel.0].shape.clone();
        let bshape = self.nodes[bias.0].shape.clone();
        if ishape.len() != 4 || kshape.len() != 4 {
            return Err(TensorError::ShapeMismatch {
                op: "conv2d",
                detail: format!("input rank {:?}, kernel rank {:?}", ishape, kshape),
            });
        }
        let (n, c, h, w) = (ishape[0], ishape[1], ishape[2], ishape[3]);
        let (k, kc, kh, kw) = (kshape[0], kshape[1], kshape[2], kshape[3]);
        if kc != c {
            return Err(TensorError::ShapeMismatch {
                op: "conv2d",
                detail: format!("input channels {c} vs kernel channels {kc}"),
            });
        }
        if bshape != [k] {
            return Err(TensorError::ShapeMismatch {
                op: "conv2d",
                detail: format!("bias shape {:?}, expected [{k}]", bshape),
            });
        }
        if kh > h || kw > w {
            return Err(TensorError::ShapeMismatch {
                op: "conv2d",
                detail: format!("kernel {kh}x{kw} larger than input {h}x{w}"),
            });
        }
        let (oh, ow, ph, pw) = match padding {
            Padding::Same => (h, w, (kh - 1) / 2, (kw - 1) / 2),
            Padding::Valid => (h - kh + 1, w - kw + 1, 0, 0),
        };
        let dims = ConvDims {
            n,
            c,
            h,
            w,
            k,
            kh,
            kw,
            oh,
            ow,
            ph,
            pw,
        };
        let values = conv2d_forward(
            &self.nodes[input.0].values,
            &self.nodes[kernel.0].values,
            &self.nodes[bias.0].values,
            dims,
        );
        Ok(self.push(
            Op::Conv2d(dims),
            vec![input, kernel, bias],
            vec![n, k, oh, ow],
            values,
        ))
    }

    // ---- backward ----

    /// Reverse-mode sweep from a scalar root. Populates `grad` on every node
    /// that requires gradient, in exact reverse construction order.
    pub fn backward(&mut self, root: NodeId) -> Result<()> {
        if self.nodes[root.0].values.len() != 1 {
            return Err(TensorError::NonScalarRoot(self.nodes[root.0].shape.clone()));
        }
        for node in &mut self.nodes {
            if node.needs_grad {
                node.grad = Some(vec![0.0; node.values.len()]);
            }
        }
        if !self.nodes[root.0].needs_grad {
            // Root does not depend on any parameter; nothing to propagate.
            return Ok(());
        }
        if let Some(g) = self.nodes[root.0].grad.as_mut() {
            g[0] = 1.0;
        }
        for i in (0..=root.0).rev() {
            if !self.nodes[i].needs_grad || self.nodes[i].grad.is_none() {
                continue;
            }
            let out_grad = self.nodes[i].grad.take().expect("grad allocated");
            self.propagate(i, &out_grad);
            self.nodes[i].grad = Some(out_grad);
        }
        Ok(())
    }

    fn propagate(&mut self, idx: usize, out_grad: &[f64]) {
        let inputs = self.nodes[idx].inputs.clone();
        let op = self.nodes[idx].op.clone();
        match op {
            Op::Leaf => {}
            Op::Relu => {
                let x = inputs[0];
                if self.nodes[x.0].needs_grad {
                    let active: Vec<f64> = self.nodes[idx]
                        .values
                        .iter()
                        .zip(out_grad)
                        .map(|(y, g)| if *y > 0.0 { *g } else { 0.0 })
                        .collect();
                    self.add_grad(x, &active);
                }
            }
            Op::Sigmoid => {
                let x = inputs[0];
                if self.nodes[x.0].needs_grad {
                    let d: Vec<f64> = self.nodes[idx]
                        .values
                        .iter()
                        .zip(out_grad)
                        .map(|(p, g)| g * p * (1.0 - p))
                        .collect();
                    self.add_grad(x, &d);
                }
            }
            Op::ClampProb => {
                let x = inputs[0];
                if self.nodes[x.0].needs_grad {
                    let d: Vec<f64> = self.nodes[x.0]
                        .values
                        .iter()
                        .zip(out_grad)
                        .map(|(v, g)| {
                            if (PROB_EPS..=1.0 - PROB_EPS).contains(v) {
                                *g
                            } else {
                                0.0
                            }
                        })
                        .collect();
                    self.add_grad(x, &d);
                }
            }
            Op::Log => {
                let x = inputs[0];
                if self.nodes[x.0].needs_grad {
                    let d: Vec<f64> = self.nodes[x.0]
                        .values
                        .iter()
                        .zip(out_grad)
                        .map(|(v, g)| g / v)
                        .collect();
                    self.add_grad(x, &d);
                }
            }
            Op::Add => {
                for side in [inputs[0], inputs[1]] {
                    if self.nodes[side.0].needs_grad {
                        self.add_grad(side, out_grad);
                    }
                }
            }
            Op::Sub => {
                let (a, b) = (inputs[0], inputs[1]);
                if self.nodes[a.0].needs_grad {
                    self.add_grad(a, out_grad);
                }
                if self.nodes[b.0].needs_grad {
                    let neg: Vec<f64> = out_grad.iter().map(|g| -g).collect();
                    self.add_grad(b, &neg);
                }
            }
            Op::Mul => {
                let (a, b) = (inputs[0], inputs[1]);
                if self.nodes[a.0].needs_grad {
                    let d: Vec<f64> = out_grad
                        .iter()
                        .zip(&self.nodes[b.0].values)
                        .map(|(g, bv)| g * bv)
                        .collect();
                    self.add_grad(a, &d);
                }
                if self.nodes[b.0].needs_grad {
                    let d: Vec<f64> = out_grad
                        .iter()
                        .zip(&self.nodes[a.0].values)
                        .map(|(g, av)| g * av)
                        .collect();
                    self.add_grad(b, &d);
                }
            }
            Op::Div => {
                let (a, b) = (inputs[0], inputs[1]);
                if self.nodes[a.0].needs_grad {
                    let d: Vec<f64> = out_grad
                        .iter()
                        .zip(&self.nodes[b.0].values)
                        .map(|(g, bv)| g / bv)
                        .collect();
                    self.add_grad(a, &d);
                }
                if self.nodes[b.0].needs_grad {
                    let d: Vec<f64> = out_grad
                        .iter()
                        .zip(self.nodes[a.0].values.iter().zip(&self.nodes[b.0].values))
                        .map(|(g, (av, bv))| -g * av / (bv * bv))
                        .collect();
                    self.add_grad(b, &d);
                }
            }
            Op::AddScalar => {
                let x = inputs[0];
                if self.nodes[x.0].needs_grad {
                    self.add_grad(x, out_grad);
                }
            }
            Op::MulScalar(c) => {
                let x = inputs[0];
                if self.nodes[x.0].needs_grad {
                    let d: Vec<f64> = out_grad.iter().map(|g| g * c).collect();
                    self.add_grad(x, &d);
                }
            }
            Op::SubFromScalar => {
                let x = inputs[0];
                if self.nodes[x.0].needs_grad {
                    let d: Vec<f64> = out_grad.iter().map(|g| -g).collect();
                    self.add_grad(x, &d);
                }
            }
            Op::Sum { mask } => {
                let x = inputs[0];
                if self.nodes[x.0].needs_grad {
                    let g = out_grad[0];
                    let n = self.nodes[x.0].values.len();
                    let d: Vec<f64> = match &mask {
                        Some(m) => m.iter().map(|k| if *k { g } else { 0.0 }).collect(),
                        None => vec![g; n],
                    };
                    self.add_grad(x, &d);
                }
            }
            Op::Mean { mask, count } => {
                let x = inputs[0];
                if self.nodes[x.0].needs_grad {
                    let g = out_grad[0] / count as f64;
                    let n = self.nodes[x.0].values.len();
                    let d: Vec<f64> = match &mask {
                        Some(m) => m.iter().map(|k| if *k { g } else { 0.0 }).collect(),
                        None => vec![g; n],
                    };
                    self.add_grad(x, &d);
                }
            }
            Op::Conv2d(dims) => {
                let (input, kernel, bias) = (inputs[0], inputs[1], inputs[2]);
                if self.nodes[input.0].needs_grad {
                    let d = conv2d_backward_input(out_grad, &self.nodes[kernel.0].values, dims);
                    self.add_grad(input, &d);
                }
                if self.nodes[kernel.0].needs_grad {
                    let d = conv2d_backward_kernel(out_grad, &self.nodes[input.0].values, dims);
                    self.add_grad(kernel, &d);
                }
                if self.nodes[bias.0].needs_grad {
                    let mut d = vec![0.0; dims.k];
                    let plane = dims.oh * dims.ow;
                    for n in 0..dims.n {
                        for k in 0..dims.k {
                            let base = (n * dims.k + k) * plane;
                            d[k] += out_grad[base..base + plane].iter().sum::<f64>();
                        }
                    }
                    self.add_grad(bias, &d);
                }
            }
        }
    }

    fn add_grad(&mut self, id: NodeId, delta: &[f64]) {
        let g = self.nodes[id.0]
            .grad
            .get_or_insert_with(|| vec![0.0; delta.len()]);
        for (gi, di) in g.iter_mut().zip(delta) {
            *gi += di;
        }
    }
}

/// `dst[i] += w * src[i]`, unrolled into independent lanes so the FP adds
/// do not form one long latency chain. Summation order per element is fixed.
#[inline]
fn axpy(dst: &mut [f64], src: &[f64], w: f64) {
    let mut dc = dst.chunks_exact_mut(8);
    let mut sc = src.chunks_exact(8);
    for (d8, s8) in (&mut dc).zip(&mut sc) {
        for i in 0..8 {
            d8[i] += w * s8[i];
        }
    }
    for (d1, s1) in dc.into_remainder().iter_mut().zip(sc.remainder()) {
        *d1 += w * s1;
    }
}

/// Dot product with four independent accumulators; deterministic order.
#[inline]
fn dot(a: &[f64], b: &[f64]) -> f64 {
    let mut acc = [0.0f64; 8];
    let mut ac = a.chunks_exact(8);
    let mut bc = b.chunks_exact(8);
    for (a8, b8) in (&mut ac).zip(&mut bc) {
        for i in 0..8 {
            acc[i] += a8[i] * b8[i];
        }
    }
    let mut rest = 0.0;
    for (a1, b1) in ac.remainder().iter().zip(bc.remainder()) {
        rest += a1 * b1;
    }
    let half = (acc[0] + acc[1]) + (acc[2] + acc[3]);
    half + ((acc[4] + acc[5]) + (acc[6] + acc[7])) + rest
}

/// True when the fused single-pass 3x3 path applies.
fn is_fused_3x3(d: ConvDims) -> bool {
    d.kh == 3 && d.kw == 3 && d.ph == 1 && d.pw == 1 && d.oh == d.h && d.ow == d.w && d.w >= 2
}

/// `dst[y][x] += sum_t taps[t] * src_zeropadded[y + ti - 1][x + tj - 1]`
/// over an `h x w` plane. Each tap is a shifted row AXPY; the row stays hot
/// while all nine taps are applied, and out-of-plane taps are skipped, which
/// equals padding with zeros.
fn stencil3x3_acc(dst: &mut [f64], src: &[f64], h: usize, w: usize, t: &[f64; 9]) {
    for y in 0..h {
        let out = &mut dst[y * w..(y + 1) * w];
        for (ti, iy) in [(0usize, y.wrapping_sub(1)), (3, y), (6, y + 1)] {
            if iy >= h {
                continue;
            }
            let r = &src[iy * w..(iy + 1) * w];
            axpy(&mut out[1..], &r[..w - 1], t[ti]);
            axpy(out, r, t[ti + 1]);
            axpy(&mut out[..w - 1], &r[1..], t[ti + 2]);
        }
    }
}

fn conv2d_forward(input: &[f64], kernel: &[f64], bias: &[f64], d: ConvDims) -> Vec<f64> {
    let mut out = vec![0.0; d.n * d.k * d.oh * d.ow];
    let in_plane = d.h * d.w;
    let out_plane = d.oh * d.ow;
    let fused = is_fused_3x3(d);
    for n in 0..d.n {
        for k in 0..d.k {
            let out_base = (n * d.k + k) * out_plane;
            out[out_base..out_base + out_plane].fill(bias[k]);
            for c in 0..d.c {
                let in_base = (n * d.c + c) * in_plane;
                if fused {
                    let taps: &[f64; 9] = kernel[(k * d.c + c) * 9..(k * d.c + c) * 9 + 9]
                        .try_into()
                        .expect("3x3 kernel");
                    stencil3x3_acc(
                        &mut out[out_base..out_base + out_plane],
                        &input[in_base..in_base + in_plane],
                        d.h,
                        d.w,
                        taps,
                    );
                    continue;
                }
                for ki in 0..d.kh {
                    for kj in 0..d.kw {
                        let wgt = kernel[((k * d.c + c) * d.kh + ki) * d.kw + kj];
                        if wgt == 0.0 {
                            continue;
                        }
                        // out[y][x] += w * in[y + ki - ph][x + kj - pw]
                        for y in 0..d.oh {
                            let iy = (y + ki).wrapping_sub(d.ph);
                            if iy >= d.h {
                                continue;
                            }
                            let x_lo = d.pw.saturating_sub(kj);
                            let x_hi = (d.w + d.pw - kj).min(d.ow);
                            if x_lo >= x_hi {
                                continue;
                            }
                            let orow = out_base + y * d.ow;
                            let irow = in_base + iy * d.w + (x_lo + kj - d.pw);
                            axpy(
                                &mut out[orow + x_lo..orow + x_hi],
                                &input[irow..irow + (x_hi - x_lo)],
                                wgt,
                            );
                        }
                    }
                }
            }
        }
    }
    out
}

fn conv2d_backward_input(out_grad: &[f64], kernel: &[f64], d: ConvDims) -> Vec<f64> {
    let mut din = vec![0.0; d.n * d.c * d.h * d.w];
    let in_plane = d.h * d.w;
    let out_plane = d.oh * d.ow;
    let fused = is_fused_3x3(d);
    for n in 0..d.n {
        for k in 0..d.k {
            let out_base = (n * d.k + k) * out_plane;
            for c in 0..d.c {
                let in_base = (n * d.c + c) * in_plane;
                if fused {
                    // Input gradient is the same stencil with reversed taps.
                    let base = (k * d.c + c) * 9;
                    let kk = &kernel[base..base + 9];
                    let taps = [kk[8], kk[7], kk[6], kk[5], kk[4], kk[3], kk[2], kk[1], kk[0]];
                    stencil3x3_acc(
                        &mut din[in_base..in_base + in_plane],
                        &out_grad[out_base..out_base + out_plane],
                        d.h,
                        d.w,
                        &taps,
                    );
                    continue;
                }
                for ki in 0..d.kh {
                    for kj in 0..d.kw {
                        let wgt = kernel[((k * d.c + c) * d.kh + ki) * d.kw + kj];
                        if wgt == 0.0 {
                            continue;
                        }
                        for y in 0..d.oh {
                            let iy = (y + ki).wrapping_sub(d.ph);
                            if iy >= d.h {
                                continue;
                            }
                            let x_lo = d.pw.saturating_sub(kj);
                            let x_hi = (d.w + d.pw - kj).min(d.ow);
                            if x_lo >= x_hi {
                                continue;
                            }
                            let orow = out_base + y * d.ow;
                            let irow = in_base + iy * d.w + (x_lo + kj - d.pw);
                            axpy(
                                &mut din[irow..irow + (x_hi - x_lo)],
                                &out_grad[orow + x_lo..orow + x_hi],
                                wgt,
                            );
                        }
                    }
                }
            }
        }
    }
    din
}

fn conv2d_backward_kernel(out_grad: &[f64], input: &[f64], d: ConvDims) -> Vec<f64> {
    let mut dker = vec![0.0; d.k * d.c * d.kh * d.kw];
    let in_plane = d.h * d.w;
    let out_plane = d.oh * d.ow;
    let fused = is_fused_3x3(d);
    for n in 0..d.n {
        for k in 0..d.k {
            let out_base = (n * d.k + k) * out_plane;
            for c in 0..d.c {
                let in_base = (n * d.c + c) * in_plane;
                if fused {
                    // Nine shifted-slice dot products per row; padded columns
                    // contribute zero and are simply skipped.
                    let g_plane = &out_grad[out_base..out_base + out_plane];
                    let i_plane = &input[in_base..in_base + in_plane];
                    let (h, w) = (d.h, d.w);
                    let mut acc = [0.0f64; 9];
                    for y in 0..h {
                        let g = &g_plane[y * w..(y + 1) * w];
                        for (ti, iy) in [(0usize, y.wrapping_sub(1)), (3, y), (6, y + 1)] {
                            if iy >= h {
                                continue;
                            }
                            let r = &i_plane[iy * w..(iy + 1) * w];
                            acc[ti] += dot(&g[1..], &r[..w - 1]);
                            acc[ti + 1] += dot(g, r);
                            acc[ti + 2] += dot(&g[..w - 1], &r[1..]);
                        }
                    }
                    let base = (k * d.c + c) * 9;
                    for (t, a) in acc.iter().enumerate() {
                        dker[base + t] += a;
                    }
                    continue;
                }
                for ki in 0..d.kh {
                    for kj in 0..d.kw {
                        let mut acc = 0.0;
                        for y in 0..d.oh {
                            let iy = (y + ki).wrapping_sub(d.ph);
                            if iy >= d.h {
                                continue;
                            }
                            let x_lo = d.pw.saturating_sub(kj);
                            let x_hi = (d.w + d.pw - kj).min(d.ow);
                            if x_lo >= x_hi {
                                continue;
                            }
                            let orow = out_base + y * d.ow;
                            let irow = in_base + iy * d.w + (x_lo + kj - d.pw);
                            acc += dot(
                                &out_grad[orow + x_lo..orow + x_hi],
                                &input[irow..irow + (x_hi - x_lo)],
                            );
                        }
                        dker[((k * d.c + c) * d.kh + ki) * d.kw + kj] += acc;
                    }
                }
            }
        }
    }
    dker
}

/// Result of a finite-difference gradient check.
#[derive(Debug, Clone)]
pub struct GradCheckReport {
    /// Largest relative error over all checked parameter elements.
    pub max_rel_err: f64,
    /// Per-parameter maximum relative error, in the order checked.
    pub per_param: Vec<(String, f64)>,
    /// `(name, flat index, rel err)` for elements exceeding the tolerance.
    pub failures: Vec<(String, usize, f64)>,
}

impl GradCheckReport {
    pub fn passed(&self) -> bool {
        self.failures.is_empty()
    }
}

/// Relative error convention used by all gradient checks:
/// `|a - b| / max(|a|, |b|, 1e-8)`.
pub fn rel_err(a: f64, b: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(1e-8)
}

/// Compare autodiff gradients of a scalar-producing builder against central
/// finite differences over a set of named tensors.
///
/// The builder must bind every tensor of `params`, in order, via
/// [`Graph::param`]. It is re-invoked with perturbed copies to evaluate the
/// difference quotients, so it must be a pure function of the tensor values.
pub fn grad_check<F>(
    build: F,
    params: &[(String, Tensor)],
    step: f64,
    tol: f64,
) -> Result<GradCheckReport>
where
    F: Fn(&mut Graph, &[(String, Tensor)]) -> Result<NodeId>,
{
    assert!(step > 0.0 && tol > 0.0);
    let mut graph = Graph::new();
    let root = build(&mut graph, params)?;
    if graph.params().len() != params.len() {
        return Err(TensorError::ParamBindingMismatch {
            built: graph.params().len(),
            expected: params.len(),
        });
    }
    graph.backward(root)?;
    let auto_grads: Vec<Vec<f64>> = graph
        .params()
        .iter()
        .map(|id| graph.grad(*id).map(<[f64]>::to_vec).unwrap_or_default())
        .collect();

    let eval = |perturbed: &[(String, Tensor)]| -> Result<f64> {
        let mut g = Graph::new();
        let root = build(&mut g, perturbed)?;
        Ok(g.scalar_value(root))
    };

    let mut work: Vec<(String, Tensor)> = params.to_vec();
    let mut max_rel = 0.0f64;
    let mut per_param = Vec::with_capacity(params.len());
    let mut failures = Vec::new();
    for (pi, (name, tensor)) in params.iter().enumerate() {
        let mut param_max = 0.0f64;
        for e in 0..tensor.len() {
            let orig = tensor.values()[e];
            work[pi].1.values_mut()[e] = orig + step;
            let up = eval(&work)?;
            work[pi].1.values_mut()[e] = orig - step;
            let down = eval(&work)?;
            work[pi].1.values_mut()[e] = orig;
            let fd = (up - down) / (2.0 * step);
            let auto = auto_grads[pi].get(e).copied().unwrap_or(0.0);
            let err = rel_err(auto, fd);
            if err > param_max {
                param_max = err;
            }
            if err > tol {
                failures.push((name.clone(), e, err));
            }
        }
        max_rel = max_rel.max(param_max);
        per_param.push((name.clone(), param_max));
    }
    Ok(GradCheckReport {
        max_rel_err: max_rel,
        per_param,
        failures,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t(shape: &[usize], values: &[f64]) -> Tensor {
        Tensor::new(shape.to_vec(), values.to_vec()).unwrap()
    }

    #[test]
    fn conv2d_all_ones_valid() {
        let mut g = Graph::new();
        let input = g.leaf(&Tensor::full(vec![1, 1, 3, 3], 1.0));
        let kernel = g.leaf(&Tensor::full(vec![1, 1, 2, 2], 1.0));
        let bias = g.leaf(&Tensor::zeros(vec![1]));
        let out = g.conv2d(input, kernel, bias, Padding::Valid).unwrap();
        assert_eq!(g.shape(out), &[1, 1, 2, 2]);
        assert!(g.values(out).iter().all(|v| *v == 4.0));
    }

    #[test]
    fn conv2d_zero_kernel_gives_zero_output() {
        let mut g = Graph::new();
        let input = g.leaf(&t(&[1, 2, 4, 5], &(0..40).map(f64::from).collect::<Vec<_>>()));
        let kernel = g.leaf(&Tensor::zeros(vec![3, 2, 3, 3]));
        let bias = g.leaf(&Tensor::zeros(vec![3]));
        let out = g.conv2d(input, kernel, bias, Padding::Same).unwrap();
        assert!(g.values(out).iter().all(|v| *v == 0.0));
    }

    #[test]
    fn conv2d_shape_mismatch_is_diagnosed() {
        let mut g = Graph::new();
        let input = g.leaf(&Tensor::zeros(vec![1, 2, 4, 4]));
        let kernel = g.leaf(&Tensor::zeros(vec![1, 3, 3, 3]));
        let bias = g.leaf(&Tensor::zeros(vec![1]));
        let err = g.conv2d(input, kernel, bias, Padding::Same).unwrap_err();
        assert!(matches!(err, TensorError::ShapeMismatch { op: "conv2d", .. }));
        assert!(err.to_string().contains("channels"));
    }

    #[test]
    fn sigmoid_values_and_gradient_at_zero() {
        let mut g = Graph::new();
        let x = g.param(&Tensor::scalar(0.0));
        let y = g.sigmoid(x);
        assert_eq!(g.scalar_value(y), 0.5);
        let s = g.sum(y, None).unwrap();
        g.backward(s).unwrap();
        // sigma'(0) = 0.25
        assert!((g.grad(x).unwrap()[0] - 0.25).abs() < 1e-12);
    }

    #[test]
    fn relu_values() {
        let mut g = Graph::new();
        let x = g.leaf(&t(&[2], &[-1.0, 2.5]));
        let y = g.relu(x);
        assert_eq!(g.values(y), &[0.0, 2.5]);
    }

    #[test]
    fn sum_and_masked_mean() {
        let mut g = Graph::new();
        let x = g.param(&t(&[3], &[1.0, 2.0, 3.0]));
        let s = g.sum(x, None).unwrap();
        assert_eq!(g.scalar_value(s), 6.0);
        g.backward(s).unwrap();
        assert_eq!(g.grad(x).unwrap(), &[1.0, 1.0, 1.0]);

        let mut g = Graph::new();
        let x = g.leaf(&t(&[4], &[1.0, 2.0, 3.0, 4.0]));
        let m = g
            .mean(x, Some(&[true, false, false, true]))
            .unwrap();
        assert_eq!(g.scalar_value(m), 2.5);
    }

    #[test]
    fn mean_with_empty_mask_is_rejected() {
        let mut g = Graph::new();
        let x = g.leaf(&t(&[2], &[1.0, 2.0]));
        let err = g.mean(x, Some(&[false, false])).unwrap_err();
        assert!(matches!(err, TensorError::EmptyReduction));
    }

    #[test]
    fn masked_reduce_equals_explicit_filter() {
        // Bit-exact: same summation order as summing the filtered subsequence.
        let vals = [0.1, -2.5, 3.75, 0.0625, 9.5, -0.125];
        let mask = [true, false, true, true, false, true];
        let mut g = Graph::new();
        let x = g.leaf(&t(&[6], &vals));
        let s = g.sum(x, Some(&mask)).unwrap();
        let filtered: f64 = vals
            .iter()
            .zip(mask)
            .filter(|(_, k)| *k)
            .map(|(v, _)| *v)
            .sum();
        assert_eq!(g.scalar_value(s), filtered);
    }

    #[test]
    fn backward_square_and_reuse() {
        // root = w^2 at w=3 -> grad 6
        let mut g = Graph::new();
        let w = g.param(&Tensor::scalar(3.0));
        let sq = g.mul(w, w).unwrap();
        g.backward(sq).unwrap();
        assert_eq!(g.grad(w).unwrap(), &[6.0]);

        // root = w + w at w=1 -> grad 2 (accumulation across uses)
        let mut g = Graph::new();
        let w = g.param(&Tensor::scalar(1.0));
        let s = g.add(w, w).unwrap();
        g.backward(s).unwrap();
        assert_eq!(g.grad(w).unwrap(), &[2.0]);
    }

    #[test]
    fn backward_rejects_non_scalar_root() {
        let mut g = Graph::new();
        let x = g.param(&t(&[2], &[1.0, 2.0]));
        let y = g.relu(x);
        assert!(matches!(
            g.backward(y),
            Err(TensorError::NonScalarRoot(_))
        ));
    }

    #[test]
    fn grad_check_quadratic_is_tight() {
        let params = vec![("w".to_string(), t(&[3], &[0.5, -1.25, 2.0]))];
        let report = grad_check(
            |g, ps| {
                let w = g.param(&ps[0].1);
                let sq = g.mul(w, w)?;
                g.sum(sq, None)
            },
            &params,
            1e-5,
            1e-6,
        )
        .unwrap();
        assert!(report.passed(), "max rel err {}", report.max_rel_err);
        assert!(report.max_rel_err < 1e-6);
    }

    #[test]
    fn grad_check_constant_parameter_reports_zero() {
        let params = vec![
            ("used".to_string(), t(&[2], &[1.0, 2.0])),
            ("unused".to_string(), t(&[2], &[3.0, 4.0])),
        ];
        let report = grad_check(
            |g, ps| {
                let w = g.param(&ps[0].1);
                let _dead = g.param(&ps[1].1);
                let sq = g.mul(w, w)?;
                g.sum(sq, None)
            },
            &params,
            1e-5,
            1e-6,
        )
        .unwrap();
        assert!(report.passed());
        assert_eq!(report.per_param[1].1, 0.0);
    }

    #[test]
    fn conv2d_gradients_match_finite_differences() {
        let mut rng = crate::rng::stream(42, 0);
        let mut rand_t = |shape: &[usize]| {
            let n: usize = shape.iter().product();
            let vals: Vec<f64> = (0..n)
                .map(|_| crate::rng::uniform_in(&mut rng, -1.0, 1.0))
                .collect();
            Tensor::new(shape.to_vec(), vals).unwrap()
        };
        let input = rand_t(&[1, 2, 5, 5]);
        let params = vec![
            ("kernel".to_string(), rand_t(&[3, 2, 3, 3])),
            ("bias".to_string(), rand_t(&[3])),
            ("input".to_string(), input),
        ];
        for padding in [Padding::Same, Padding::Valid] {
            let report = grad_check(
                |g, ps| {
                    let kernel = g.param(&ps[0].1);
                    let bias = g.param(&ps[1].1);
                    let input = g.param(&ps[2].1);
                    let out = g.conv2d(input, kernel, bias, padding)?;
                    g.sum(out, None)
                },
                &params,
                1e-5,
                1e-4,
            )
            .unwrap();
            assert!(
                report.passed(),
                "{padding:?}: max rel err {}",
                report.max_rel_err
            );
        }
    }

    #[test]
    fn deep_chain_gradients_match_finite_differences() {
        // Three stacked convs with relu/sigmoid and a masked mean on top.
        let mut rng = crate::rng::stream(7, 1);
        let mut rand_t = |shape: &[usize]| {
            let n: usize = shape.iter().product();
            let vals: Vec<f64> = (0..n)
                .map(|_| crate::rng::uniform_in(&mut rng, -0.8, 0.8))
                .collect();
            Tensor::new(shape.to_vec(), vals).unwrap()
        };
        let params = vec![
            ("k1".to_string(), rand_t(&[2, 1, 3, 3])),
            ("b1".to_string(), rand_t(&[2])),
            ("k2".to_string(), rand_t(&[2, 2, 3, 3])),
            ("b2".to_string(), rand_t(&[2])),
            ("k3".to_string(), rand_t(&[1, 2, 3, 3])),
            ("b3".to_string(), rand_t(&[1])),
        ];
        let input = rand_t(&[1, 1, 6, 6]);
        let mask: Vec<bool> = (0..36).map(|i| i % 3 != 0).collect();
        let report = grad_check(
            |g, ps| {
                let k1 = g.param(&ps[0].1);
                let b1 = g.param(&ps[1].1);
                let k2 = g.param(&ps[2].1);
                let b2 = g.param(&ps[3].1);
                let k3 = g.param(&ps[4].1);
                let b3 = g.param(&ps[5].1);
                let x = g.leaf(&input);
                let h1 = g.conv2d(x, k1, b1, Padding::Same)?;
                let h1 = g.relu(h1);
                let h2 = g.conv2d(h1, k2, b2, Padding::Same)?;
                let h2 = g.relu(h2);
                let h3 = g.conv2d(h2, k3, b3, Padding::Same)?;
                let p = g.sigmoid(h3);
                g.mean(p, Some(&mask))
            },
            &params,
            1e-5,
            1e-4,
        )
        .unwrap();
        assert!(report.passed(), "max rel err {}", report.max_rel_err);
    }

    #[test]
    fn forward_and_backward_are_deterministic() {
        let run = || {
            let mut rng = crate::rng::stream(3, 0);
            let vals: Vec<f64> = (0..100)
                .map(|_| crate::rng::uniform_in(&mut rng, -1.0, 1.0))
                .collect();
            let mut g = Graph::new();
            let x = g.param(&t(&[1, 1, 10, 10], &vals));
            let k = g.leaf(&Tensor::full(vec![1, 1, 3, 3], 0.11));
            let b = g.leaf(&Tensor::zeros(vec![1]));
            let c = g.conv2d(x, k, b, Padding::Same).unwrap();
            let s = g.sigmoid(c);
            let m = g.mean(s, None).unwrap();
            g.backward(m).unwrap();
            (g.scalar_value(m), g.grad(x).unwrap().to_vec())
        };
        let (v1, g1) = run();
        let (v2, g2) = run();
        assert_eq!(v1.to_bits(), v2.to_bits());
        assert_eq!(g1, g2);
    }

    #[test]
    fn finite_inputs_stay_finite_through_op_chain() {
        let mut g = Graph::new();
        let x = g.param(&t(&[4], &[-50.0, -0.5, 0.5, 50.0]));
        let p = g.sigmoid(x);
        let lp = g.log(p);
        let q = g.sub_from_scalar(p, 1.0);
        let lq = g.log(q);
        let s1 = g.sum(lp, None).unwrap();
        let s2 = g.sum(lq, None).unwrap();
        let tot = g.add(s1, s2).unwrap();
        g.backward(tot).unwrap();
        assert!(g.values(lp).iter().all(|v| v.is_finite()));
        assert!(g.values(lq).iter().all(|v| v.is_finite()));
        assert!(g.grad(x).unwrap().iter().all(|v| v.is_finite()));
    }
}
