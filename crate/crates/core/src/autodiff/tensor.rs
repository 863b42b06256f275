//! Differentiable tensors and the primitive ops recorded on a [`Graph`].

use std::rc::Rc;

use crate::autodiff::array::{self, Array};
use crate::autodiff::error::{AdError, Result};
use crate::autodiff::graph::{Graph, Input, NodeId, Op};

#[derive(Clone)]
struct Var {
    graph: Graph,
    id: NodeId,
    generation: u64,
}

/// A value that may be recorded on a graph.
///
/// Tensors without a node are constants: they never receive gradients and
/// ops over constants only are not recorded.
#[derive(Clone)]
pub struct Tensor {
    value: Rc<Array>,
    var: Option<Var>,
}

impl std::fmt::Debug for Tensor {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Tensor")
            .field("shape", &self.value.shape())
            .field("node", &self.node_id())
            .finish()
    }
}

impl From<Array> for Tensor {
    fn from(a: Array) -> Self {
        Tensor::constant(a)
    }
}

impl Tensor {
    pub fn constant(value: Array) -> Self {
        Self {
            value: Rc::new(value),
            var: None,
        }
    }

    pub fn scalar(v: f64) -> Self {
        Self::constant(Array::scalar(v))
    }

    pub(crate) fn from_rc(value: Rc<Array>) -> Self {
        Self { value, var: None }
    }

    pub(crate) fn on_graph(value: Rc<Array>, graph: Graph, id: NodeId, generation: u64) -> Self {
        Self {
            value,
            var: Some(Var { graph, id, generation }),
        }
    }

    pub(crate) fn var(&self) -> Option<(&Graph, NodeId, u64)> {
        self.var.as_ref().map(|v| (&v.graph, v.id, v.generation))
    }

    pub fn value(&self) -> &Array {
        &self.value
    }

    pub fn shape(&self) -> &[usize] {
        self.value.shape()
    }

    pub fn data(&self) -> &[f64] {
        self.value.data()
    }

    pub fn item(&self) -> f64 {
        self.value.item()
    }

    pub fn node_id(&self) -> Option<NodeId> {
        self.var.as_ref().map(|v| v.id)
    }

    pub fn graph(&self) -> Option<&Graph> {
        self.var.as_ref().map(|v| &v.graph)
    }

    /// True when the tensor is recorded on a graph and can receive gradients.
    pub fn requires_grad(&self) -> bool {
        self.var.is_some()
    }

    /// The same value, cut off from the graph.
    pub fn detach(&self) -> Tensor {
        Tensor::from_rc(self.value.clone())
    }

    fn record(op: Op, inputs: &[&Tensor], value: Array) -> Result<Tensor> {
        let mut graph: Option<&Var> = None;
        for t in inputs {
            if let Some(v) = &t.var {
                match graph {
                    None => graph = Some(v),
                    Some(g) if !g.graph.same(&v.graph) => return Err(AdError::GraphMismatch),
                    _ => {}
                }
                if v.generation != v.graph.generation() {
                    return Err(AdError::StaleTensor);
                }
            }
        }
        let value = Rc::new(value);
        match graph {
            None => Ok(Tensor::from_rc(value)),
            Some(v) => {
                let ins = inputs
                    .iter()
                    .map(|t| Input {
                        id: t.node_id(),
                        value: t.value.clone(),
                    })
                    .collect();
                Ok(v.graph.push(op, ins, value))
            }
        }
    }

    // ---- elementwise -------------------------------------------------

    pub fn add(&self, other: &Tensor) -> Result<Tensor> {
        let v = self.value.zip_map(&other.value, "add", |a, b| a + b)?;
        Self::record(Op::Add, &[self, other], v)
    }

    pub fn sub(&self, other: &Tensor) -> Result<Tensor> {
        let v = self.value.zip_map(&other.value, "sub", |a, b| a - b)?;
        Self::record(Op::Sub, &[self, other], v)
    }

    pub fn mul(&self, other: &Tensor) -> Result<Tensor> {
        let v = self.value.zip_map(&other.value, "mul", |a, b| a * b)?;
        Self::record(Op::Mul, &[self, other], v)
    }

    /// Multiplies by a constant.
    pub fn scale(&self, c: f64) -> Result<Tensor> {
        Self::record(Op::Scale(c), &[self], self.value.map(|a| a * c))
    }

    pub fn neg(&self) -> Result<Tensor> {
        self.scale(-1.0)
    }

    pub fn add_scalar(&self, c: f64) -> Result<Tensor> {
        Self::record(Op::AddScalar, &[self], self.value.map(|a| a + c))
    }

    pub fn powf(&self, p: f64) -> Result<Tensor> {
        Self::record(Op::Powf(p), &[self], self.value.map(|a| a.powf(p)))
    }

    pub fn sqrt(&self) -> Result<Tensor> {
        self.powf(0.5)
    }

    pub fn exp(&self) -> Result<Tensor> {
        Self::record(Op::Exp, &[self], self.value.map(f64::exp))
    }

    pub fn sigmoid(&self) -> Result<Tensor> {
        Self::record(Op::Sigmoid, &[self], self.value.map(array::sigmoid))
    }

    /// `ln(1 + eˣ)`.
    pub fn softplus(&self) -> Result<Tensor> {
        Self::record(Op::Softplus, &[self], self.value.map(array::softplus))
    }

    /// Rectifier, `self` masked by its own sign.
    pub fn relu(&self) -> Result<Tensor> {
        self.masked(self)
    }

    /// Keeps `self` where `reference > 0` and zeroes it elsewhere. The mask
    /// is treated as locally constant: `reference` receives no gradient.
    pub fn masked(&self, reference: &Tensor) -> Result<Tensor> {
        let v = array::masked(&self.value, &reference.value)?;
        Self::record(Op::Masked, &[self, reference], v)
    }

    /// Multiplies by `s` broadcast to this shape (same rank, size-1 axes
    /// repeated).
    pub fn mul_bcast(&self, s: &Tensor) -> Result<Tensor> {
        if self.shape() == s.shape() {
            return self.mul(s);
        }
        let v = array::mul_bcast(&self.value, &s.value)?;
        Self::record(Op::MulBcast, &[self, s], v)
    }

    /// Adds `s` broadcast to this shape.
    pub fn add_bcast(&self, s: &Tensor) -> Result<Tensor> {
        if self.shape() == s.shape() {
            return self.add(s);
        }
        let v = array::add_bcast(&self.value, &s.value)?;
        Self::record(Op::AddBcast, &[self, s], v)
    }

    /// `self ⊙ broadcast(scale) + broadcast(shift)`; `scale` and `shift`
    /// share one shape.
    pub fn affine_bcast(&self, scale: &Tensor, shift: &Tensor) -> Result<Tensor> {
        let v = array::affine_bcast(&self.value, &scale.value, &shift.value)?;
        Self::record(Op::AffineBcast, &[self, scale, shift], v)
    }

    /// `(self ⊙ other).sum_to(shape)` in one pass.
    pub fn mul_sum_to(&self, other: &Tensor, shape: &[usize]) -> Result<Tensor> {
        if self.shape() == shape {
            return self.mul(other);
        }
        let v = array::mul_sum_to(&self.value, &other.value, shape)?;
        Self::record(Op::MulSumTo, &[self, other], v)
    }

    // ---- shape ------------------------------------------------------

    pub fn reshape(&self, shape: &[usize]) -> Result<Tensor> {
        let v = self.value.reshaped(shape)?;
        Self::record(Op::Reshape, &[self], v)
    }

    /// Repeats along axes of size 1 to reach `shape` (same rank).
    pub fn broadcast_to(&self, shape: &[usize]) -> Result<Tensor> {
        if self.shape() == shape {
            return Ok(self.clone());
        }
        let v = array::broadcast_to(&self.value, shape)?;
        Self::record(Op::BroadcastTo, &[self], v)
    }

    /// Sums over the axes where `shape` has size 1 (same rank).
    pub fn sum_to(&self, shape: &[usize]) -> Result<Tensor> {
        if self.shape() == shape {
            return Ok(self.clone());
        }
        let v = array::sum_to(&self.value, shape)?;
        Self::record(Op::SumTo, &[self], v)
    }

    /// Sum of all elements as a scalar of shape `[]`.
    pub fn sum(&self) -> Result<Tensor> {
        let ones = vec![1; self.shape().len()];
        self.sum_to(&ones)?.reshape(&[])
    }

    pub fn mean(&self) -> Result<Tensor> {
        let n = self.value.len() as f64;
        self.sum()?.scale(1.0 / n)
    }

    pub fn transpose(&self) -> Result<Tensor> {
        let v = array::transpose(&self.value)?;
        Self::record(Op::Transpose, &[self], v)
    }

    // ---- linear algebra ---------------------------------------------

    pub fn matmul(&self, other: &Tensor) -> Result<Tensor> {
        let v = array::matmul(&self.value, &other.value)?;
        Self::record(Op::Matmul, &[self, other], v)
    }

    /// 3×3 convolution with stride 1 and zero padding 1.
    ///
    /// `self`: `[batch, in, h, w]`, `kernel`: `[out, in, 3, 3]` → `[batch, out, h, w]`.
    pub fn conv2d(&self, kernel: &Tensor) -> Result<Tensor> {
        let v = array::conv2d(&self.value, &kernel.value)?;
        Self::record(Op::Conv2d, &[self, kernel], v)
    }

    /// Kernel gradient of [`Tensor::conv2d`] given the input (`self`) and the
    /// output gradient.
    pub fn conv2d_kernel_grad(&self, out_grad: &Tensor) -> Result<Tensor> {
        let v = array::conv2d_kernel_grad(&self.value, &out_grad.value)?;
        Self::record(Op::ConvKernelGrad, &[self, out_grad], v)
    }

    /// Kernel of the transposed convolution: swap channel axes, rotate taps.
    pub fn kernel_flip(&self) -> Result<Tensor> {
        let v = array::kernel_flip(&self.value)?;
        Self::record(Op::KernelFlip, &[self], v)
    }

    /// 2×2 max pooling with stride 2.
    pub fn maxpool2d(&self) -> Result<Tensor> {
        let (idx, shape) = array::maxpool2x2_indices(&self.value)?;
        self.gather_rc(Rc::new(idx), &shape)
    }

    /// Picks elements by flat offset into a tensor of shape `shape`.
    pub fn gather(&self, idx: Vec<usize>, shape: &[usize]) -> Result<Tensor> {
        self.gather_rc(Rc::new(idx), shape)
    }

    pub(crate) fn gather_rc(&self, idx: Rc<Vec<usize>>, shape: &[usize]) -> Result<Tensor> {
        let n = self.value.len();
        if shape.iter().product::<usize>() != idx.len() || idx.iter().any(|&i| i >= n) {
            return Err(AdError::InvalidShape {
                op: "gather",
                shape: shape.to_vec(),
                reason: format!("{} indices into {} elements", idx.len(), n),
            });
        }
        let v = array::gather(&self.value, &idx, shape);
        Self::record(Op::Gather(idx), &[self], v)
    }

    pub(crate) fn scatter_rc(&self, idx: Rc<Vec<usize>>, shape: &[usize]) -> Result<Tensor> {
        let v = array::scatter(&self.value, &idx, shape);
        Self::record(Op::Scatter(idx), &[self], v)
    }

    /// Row-wise log-sum-exp of a `[rows, cols]` matrix → `[rows, 1]`.
    pub fn logsumexp_rows(&self) -> Result<Tensor> {
        let v = array::logsumexp_rows(&self.value)?;
        Self::record(Op::LogSumExp, &[self], v)
    }
}
