use crate::error::{Result, TensorError};
use crate::ops::{self, ConvGeom, UnaryKind};
use crate::param::{ParamId, ParamStore};
use crate::tensor::Tensor;

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(pub(crate) usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug)]
pub(crate) enum BinaryKind {
    Add,
    Sub,
    Mul,
}

/// What produced a node, plus whatever the backward pass needs.
#[derive(Debug)]
pub(crate) enum Op {
    Leaf {
        param: Option<ParamId>,
    },
    Binary {
        kind: BinaryKind,
        a: Var,
        b: Var,
        /// Per-output source offsets; `None` when both operands share a shape.
        bcast: Option<Box<(Vec<usize>, Vec<usize>)>>,
    },
    Scale {
        a: Var,
        k: f64,
    },
    Offset {
        a: Var,
    },
    Unary {
        kind: UnaryKind,
        a: Var,
    },
    Clamp {
        a: Var,
        lo: f64,
        hi: f64,
    },
    MatMul {
        a: Var,
        b: Var,
        batch: usize,
        m: usize,
        k: usize,
        n: usize,
    },
    Conv2d {
        x: Var,
        w: Var,
        bias: Option<Var>,
        geom: ConvGeom,
    },
    ConvTranspose2d {
        x: Var,
        w: Var,
        bias: Option<Var>,
        geom: ConvGeom,
    },
    Softmax {
        a: Var,
        outer: usize,
        len: usize,
        inner: usize,
    },
    GroupNorm {
        x: Var,
        n: usize,
        groups: usize,
        rstd: Vec<f64>,
    },
    Sum {
        a: Var,
        scale: f64,
    },
    SumTo {
        a: Var,
        map: Vec<usize>,
    },
    Reshape {
        a: Var,
    },
    Gather {
        a: Var,
        map: Vec<usize>,
    },
    Concat {
        parts: Vec<Var>,
        outer: usize,
        inner: Vec<usize>,
    },
    Upsample {
        a: Var,
        factor: usize,
    },
    AvgPool {
        a: Var,
        k: usize,
    },
    Embedding {
        table: Var,
        labels: Vec<usize>,
        spatial: usize,
    },
    CrossEntropy {
        logits: Var,
        targets: Vec<usize>,
        probs: Vec<f64>,
        classes: usize,
        inner: usize,
    },
}

pub(crate) struct Node {
    pub(crate) value: Tensor,
    pub(crate) op: Op,
}

/// Ordered record of operations. Inputs always precede the nodes that use
/// them, so a reverse sweep visits every node after all of its consumers.
#[derive(Default)]
pub struct Tape {
    pub(crate) nodes: Vec<Node>,
}

/// Gradient slots for one backward sweep.
pub(crate) struct Grads<'a> {
    slots: &'a mut [Option<Vec<f64>>],
    nodes: &'a [Node],
}

impl<'a> Grads<'a> {
    /// Runs `f` on the gradient buffer of `v`, unless `v` is a constant.
    pub(crate) fn with(&mut self, v: Var, f: impl FnOnce(&mut [f64])) {
        let node = &self.nodes[v.0];
        if !node.value.requires_grad() {
            return;
        }
        let numel = node.value.numel();
        let slot = self.slots[v.0].get_or_insert_with(|| vec![0.0; numel]);
        f(slot);
    }

    /// Forward value of `v`, borrowed from the node table rather than `self`.
    pub(crate) fn value(&self, v: Var) -> &'a [f64] {
        let nodes: &'a [Node] = self.nodes;
        nodes[v.0].value.values()
    }

    pub(crate) fn shape(&self, v: Var) -> &'a [usize] {
        let nodes: &'a [Node] = self.nodes;
        nodes[v.0].value.shape()
    }

    pub(crate) fn wants(&self, v: Var) -> bool {
        self.nodes[v.0].value.requires_grad()
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

    /// Records a caller-provided tensor as a leaf; it is differentiated
    /// against iff `tensor.requires_grad()`.
    pub fn leaf(&mut self, tensor: Tensor) -> Var {
        self.push(tensor, Op::Leaf { param: None })
    }

    pub fn constant(&mut self, shape: &[usize], values: Vec<f64>) -> Result<Var> {
        Ok(self.leaf(Tensor::new(shape, values)?))
    }

    pub fn scalar(&mut self, value: f64) -> Var {
        self.leaf(Tensor::scalar(value))
    }

    /// Binds a stored parameter; frozen stores bind as constants.
    pub fn param(&mut self, store: &ParamStore, id: ParamId) -> Var {
        let t = store.get(id);
        let value = Tensor::new(t.shape(), t.values().to_vec())
            .expect("stored parameter is well formed")
            .with_requires_grad(!store.is_frozen());
        self.push(value, Op::Leaf { param: Some(id) })
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn values(&self, v: Var) -> &[f64] {
        self.nodes[v.0].value.values()
    }

    /// Accumulated gradient of a leaf after [`Tape::backward`].
    pub fn grad(&self, v: Var) -> Option<&[f64]> {
        self.nodes[v.0].value.grad()
    }

    pub fn zero_grad(&mut self) {
        for node in &mut self.nodes {
            node.value.zero_grad();
        }
    }

    pub(crate) fn push(&mut self, value: Tensor, op: Op) -> Var {
        self.nodes.push(Node { value, op });
        Var(self.nodes.len() - 1)
    }

    /// Pushes a derived node whose gradient flag follows its inputs.
    pub(crate) fn push_op(&mut self, shape: &[usize], values: Vec<f64>, op: Op, inputs: &[Var]) -> Var {
        let requires_grad = inputs.iter().any(|v| self.nodes[v.0].value.requires_grad());
        let value = Tensor::new(shape, values)
            .expect("op produced a consistent shape")
            .with_requires_grad(requires_grad);
        self.push(value, op)
    }

    /// Back-propagates from a single-element `loss`, adding into the
    /// gradients of every differentiable leaf. Calling it again without
    /// [`Tape::zero_grad`] accumulates.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        let root = &self.nodes[loss.0].value;
        if root.numel() != 1 {
            return Err(TensorError::NonScalarLoss(root.shape().to_vec()));
        }
        if !root.requires_grad() {
            return Ok(());
        }
        let mut slots: Vec<Option<Vec<f64>>> = vec![None; loss.0 + 1];
        slots[loss.0] = Some(vec![1.0]);
        let mut leaf_grads = Vec::new();
        for i in (0..=loss.0).rev() {
            let Some(g) = slots[i].take() else { continue };
            let (before, _) = slots.split_at_mut(i);
            let node = &self.nodes[i];
            if let Op::Leaf { .. } = node.op {
                leaf_grads.push((i, g));
                continue;
            }
            let mut grads = Grads {
                slots: before,
                nodes: &self.nodes,
            };
            ops::backward(&node.op, &node.value, &g, &mut grads);
        }
        for (i, g) in leaf_grads {
            self.nodes[i].value.accumulate_grad(&g);
        }
        Ok(())
    }

    /// Adds each bound parameter's leaf gradient into `store`.
    pub fn accumulate_into(&self, store: &mut ParamStore) {
        for node in &self.nodes {
            if let Op::Leaf { param: Some(id) } = node.op {
                if let Some(g) = node.value.grad() {
                    if store.owns(id) {
                        store.get_mut(id).accumulate_grad(g);
                    }
                }
            }
        }
    }
}
