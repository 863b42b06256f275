//! The tape: an append-only list of recorded operations, and the reverse
//! sweep that turns it into gradients.
//!
//! Every vector-Jacobian product is itself written in terms of recorded
//! tensor ops, so running the sweep with `create_graph = true` leaves the
//! returned gradients on the tape. Differentiating them again is how the
//! outer loop of a bi-level optimizer sees through inner-loop updates.

use std::cell::RefCell;
use std::collections::HashMap;
use std::rc::Rc;

use crate::autodiff::array::Array;
use crate::autodiff::error::{AdError, Result};
use crate::autodiff::tensor::Tensor;

/// Index of a node on its graph.
pub type NodeId = usize;

#[derive(Clone, Debug)]
pub(crate) enum Op {
    Leaf,
    Add,
    Sub,
    Mul,
    Scale(f64),
    AddScalar,
    Powf(f64),
    Exp,
    Sigmoid,
    Softplus,
    Matmul,
    Transpose,
    Reshape,
    BroadcastTo,
    SumTo,
    Conv2d,
    ConvKernelGrad,
    KernelFlip,
    Gather(Rc<Vec<usize>>),
    Scatter(Rc<Vec<usize>>),
    LogSumExp,
    Masked,
    MulBcast,
    AddBcast,
    MulSumTo,
    AffineBcast,
}

#[derive(Clone)]
pub(crate) struct Input {
    pub id: Option<NodeId>,
    pub value: Rc<Array>,
}

struct Node {
    op: Op,
    inputs: Vec<Input>,
    value: Rc<Array>,
}

struct Tape {
    nodes: Vec<Node>,
    generation: u64,
}

/// A computation graph. Cheap to clone; clones share the same tape.
///
/// Graphs are single-threaded: a graph and the tensors recorded on it stay
/// on the worker that created them.
#[derive(Clone)]
pub struct Graph {
    tape: Rc<RefCell<Tape>>,
}

impl Default for Graph {
    fn default() -> Self {
        Self::new()
    }
}

impl std::fmt::Debug for Graph {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        let t = self.tape.borrow();
        f.debug_struct("Graph")
            .field("nodes", &t.nodes.len())
            .field("generation", &t.generation)
            .finish()
    }
}

impl Graph {
    pub fn new() -> Self {
        Self {
            tape: Rc::new(RefCell::new(Tape {
                nodes: Vec::new(),
                generation: 0,
            })),
        }
    }

    /// Registers a differentiable leaf holding `value`.
    pub fn leaf(&self, value: Array) -> Tensor {
        self.push(Op::Leaf, Vec::new(), Rc::new(value))
    }

    pub fn len(&self) -> usize {
        self.tape.borrow().nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn generation(&self) -> u64 {
        self.tape.borrow().generation
    }

    /// Drops every recorded node. Tensors recorded before the call are
    /// rejected by later ops with [`AdError::StaleTensor`].
    pub fn clear(&self) {
        let mut t = self.tape.borrow_mut();
        t.nodes.clear();
        t.generation += 1;
    }

    pub(crate) fn same(&self, other: &Graph) -> bool {
        Rc::ptr_eq(&self.tape, &other.tape)
    }

    pub(crate) fn push(&self, op: Op, inputs: Vec<Input>, value: Rc<Array>) -> Tensor {
        let mut t = self.tape.borrow_mut();
        let id = t.nodes.len();
        let generation = t.generation;
        t.nodes.push(Node {
            op,
            inputs,
            value: value.clone(),
        });
        Tensor::on_graph(value, self.clone(), id, generation)
    }

    fn node_parts(&self, id: NodeId) -> (Op, Vec<Input>, Rc<Array>) {
        let t = self.tape.borrow();
        let n = &t.nodes[id];
        (n.op.clone(), n.inputs.clone(), n.value.clone())
    }

    fn tensor_for(&self, id: NodeId, value: Rc<Array>, attached: bool) -> Tensor {
        if attached {
            Tensor::on_graph(value, self.clone(), id, self.generation())
        } else {
            Tensor::from_rc(value)
        }
    }

    /// Gradients of the scalar `loss` with respect to arbitrary recorded
    /// tensors (leaves or intermediates). Entries are `None` for targets the
    /// loss does not depend on.
    ///
    /// Gradients flow *through* targets: if one target is an ancestor of
    /// another, its entry is the total derivative along every path.
    pub fn grad(&self, loss: &Tensor, targets: &[&Tensor], create_graph: bool) -> Result<Vec<Option<Tensor>>> {
        let loss_id = self.check_loss(loss)?;
        let mut target_ids = Vec::with_capacity(targets.len());
        for t in targets {
            target_ids.push(self.own_id(t)?);
        }
        let found = self.sweep(loss_id, &target_ids, create_graph)?;
        Ok(target_ids.iter().map(|id| id.and_then(|i| found.get(&i).cloned())).collect())
    }

    /// Gradients of the scalar `loss` with respect to every leaf it depends on.
    pub fn backward(&self, loss: &Tensor, create_graph: bool) -> Result<GradMap> {
        let loss_id = self.check_loss(loss)?;
        let leaves: Vec<Option<NodeId>> = {
            let t = self.tape.borrow();
            (0..=loss_id).filter(|&i| matches!(t.nodes[i].op, Op::Leaf)).map(Some).collect()
        };
        let grads = self.sweep(loss_id, &leaves, create_graph)?;
        Ok(GradMap { grads })
    }

    fn check_loss(&self, loss: &Tensor) -> Result<NodeId> {
        if loss.value().len() != 1 {
            return Err(AdError::NonScalarLoss(loss.shape().to_vec()));
        }
        match self.own_id(loss)? {
            Some(id) => Ok(id),
            None => Err(AdError::DetachedLoss),
        }
    }

    /// Node id of `t` if it lives on this graph; `None` for constants.
    fn own_id(&self, t: &Tensor) -> Result<Option<NodeId>> {
        match t.var() {
            None => Ok(None),
            Some((g, id, generation)) => {
                if !self.same(g) {
                    Err(AdError::GraphMismatch)
                } else if generation != self.generation() {
                    Err(AdError::StaleTensor)
                } else {
                    Ok(Some(id))
                }
            }
        }
    }

    fn sweep(&self, loss_id: NodeId, targets: &[Option<NodeId>], create_graph: bool) -> Result<HashMap<NodeId, Tensor>> {
        let mut out = HashMap::new();
        let Some(lo) = targets.iter().flatten().copied().filter(|&i| i <= loss_id).min() else {
            return Ok(out);
        };
        let span = loss_id - lo + 1;
        let mut is_target = vec![false; span];
        for &t in targets.iter().flatten() {
            if t <= loss_id {
                is_target[t - lo] = true;
            }
        }
        // needs[i]: node lo+i has some target among its ancestors (or is one)
        let mut needs = is_target.clone();
        {
            let t = self.tape.borrow();
            for i in 0..span {
                if needs[i] {
                    continue;
                }
                needs[i] = t.nodes[lo + i]
                    .inputs
                    .iter()
                    .any(|inp| matches!(inp.id, Some(j) if j >= lo && needs[j - lo]));
            }
        }
        if !needs[span - 1] {
            return Ok(out);
        }

        let mut grads: Vec<Option<Tensor>> = vec![None; span];
        let seed_shape = self.node_parts(loss_id).2.shape().to_vec();
        grads[span - 1] = Some(Tensor::constant(Array::ones(&seed_shape)));

        for i in (0..span).rev() {
            let Some(g) = grads[i].take() else { continue };
            let id = lo + i;
            if is_target[i] {
                out.insert(id, g.clone());
            }
            let (op, inputs, value) = self.node_parts(id);
            if matches!(op, Op::Leaf) {
                continue;
            }
            let wanted: Vec<bool> = inputs
                .iter()
                .map(|inp| matches!(inp.id, Some(j) if j >= lo && needs[j - lo]))
                .collect();
            if !wanted.iter().any(|&w| w) {
                continue;
            }
            let ins: Vec<Tensor> = inputs
                .iter()
                .map(|inp| match inp.id {
                    Some(j) => self.tensor_for(j, inp.value.clone(), create_graph),
                    None => Tensor::from_rc(inp.value.clone()),
                })
                .collect();
            let out_t = self.tensor_for(id, value, create_graph);
            let g = if create_graph { g } else { g.detach() };
            let contribs = vjp(&op, &out_t, &ins, &g, &wanted)?;
            for ((inp, c), w) in inputs.iter().zip(contribs).zip(&wanted) {
                if !w {
                    continue;
                }
                let (Some(j), Some(c)) = (inp.id, c) else { continue };
                let slot = &mut grads[j - lo];
                *slot = Some(match slot.take() {
                    None => c,
                    Some(prev) => prev.add(&c)?,
                });
            }
        }
        Ok(out)
    }
}

/// Vector-Jacobian products. Each returned gradient is built from recorded
/// ops so it stays differentiable when the inputs are attached.
fn vjp(op: &Op, out: &Tensor, ins: &[Tensor], g: &Tensor, wanted: &[bool]) -> Result<Vec<Option<Tensor>>> {
    let want = |i: usize| wanted.get(i).copied().unwrap_or(false);
    let r = match op {
        Op::Leaf => vec![],
        Op::Add => vec![Some(g.clone()), Some(g.clone())],
        Op::Sub => vec![Some(g.clone()), Some(g.scale(-1.0)?)],
        Op::Mul => vec![
            if want(0) { Some(g.mul(&ins[1])?) } else { None },
            if want(1) { Some(g.mul(&ins[0])?) } else { None },
        ],
        Op::Scale(c) => vec![Some(g.scale(*c)?)],
        Op::AddScalar => vec![Some(g.clone())],
        Op::Powf(p) => vec![Some(g.mul(&ins[0].powf(p - 1.0)?.scale(*p)?)?)],
        Op::Exp => vec![Some(g.mul(out)?)],
        Op::Sigmoid => {
            let slope = out.mul(&out.scale(-1.0)?.add_scalar(1.0)?)?;
            vec![Some(g.mul(&slope)?)]
        }
        Op::Softplus => vec![Some(g.mul(&ins[0].sigmoid()?)?)],
        Op::Matmul => vec![
            if want(0) { Some(g.matmul(&ins[1].transpose()?)?) } else { None },
            if want(1) { Some(ins[0].transpose()?.matmul(g)?) } else { None },
        ],
        Op::Transpose => vec![Some(g.transpose()?)],
        Op::Reshape => vec![Some(g.reshape(ins[0].shape())?)],
        Op::BroadcastTo => vec![Some(g.sum_to(ins[0].shape())?)],
        Op::SumTo => vec![Some(g.broadcast_to(ins[0].shape())?)],
        Op::Conv2d => vec![
            if want(0) { Some(g.conv2d(&ins[1].kernel_flip()?)?) } else { None },
            if want(1) { Some(ins[0].conv2d_kernel_grad(g)?) } else { None },
        ],
        Op::ConvKernelGrad => vec![
            if want(0) { Some(ins[1].conv2d(&g.kernel_flip()?)?) } else { None },
            if want(1) { Some(ins[0].conv2d(g)?) } else { None },
        ],
        Op::KernelFlip => vec![Some(g.kernel_flip()?)],
        Op::Gather(idx) => vec![Some(g.scatter_rc(idx.clone(), ins[0].shape())?)],
        Op::Scatter(idx) => vec![Some(g.gather_rc(idx.clone(), ins[0].shape())?)],
        Op::Masked => vec![Some(g.masked(&ins[1])?), None],
        Op::MulBcast => vec![
            if want(0) { Some(g.mul_bcast(&ins[1])?) } else { None },
            if want(1) {
                Some(g.mul_sum_to(&ins[0], ins[1].shape())?)
            } else {
                None
            },
        ],
        Op::AddBcast => vec![Some(g.clone()), if want(1) { Some(g.sum_to(ins[1].shape())?) } else { None }],
        Op::AffineBcast => vec![
            if want(0) { Some(g.mul_bcast(&ins[1])?) } else { None },
            if want(1) {
                Some(g.mul_sum_to(&ins[0], ins[1].shape())?)
            } else {
                None
            },
            if want(2) { Some(g.sum_to(ins[2].shape())?) } else { None },
        ],
        Op::MulSumTo => vec![
            if want(0) { Some(ins[1].mul_bcast(g)?) } else { None },
            if want(1) { Some(ins[0].mul_bcast(g)?) } else { None },
        ],
        Op::LogSumExp => {
            let z = &ins[0];
            let soft = z.sub(&out.broadcast_to(z.shape())?)?.exp()?;
            vec![Some(g.broadcast_to(z.shape())?.mul(&soft)?)]
        }
    };
    Ok(r)
}

/// Gradients keyed by the node of the tensor they belong to.
#[derive(Clone, Default)]
pub struct GradMap {
    grads: HashMap<NodeId, Tensor>,
}

impl GradMap {
    pub fn get(&self, t: &Tensor) -> Option<&Tensor> {
        t.node_id().and_then(|id| self.grads.get(&id))
    }

    pub fn len(&self) -> usize {
        self.grads.len()
    }

    pub fn is_empty(&self) -> bool {
        self.grads.is_empty()
    }
}
