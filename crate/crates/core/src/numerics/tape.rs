//! Reverse-mode gradient tape with custom-gradient nodes.
//!
//! Values are recorded as [`DenseVector`]s (scalars are length-1 vectors).
//! Nodes are appended in evaluation order, so node ids are already a
//! topological order and the backward pass is a single reverse sweep that
//! visits each node exactly once.
//!
//! Optimization layers (lower-level solvers, QP-backed projections, the
//! coupling-violation gradient) participate through [`CustomOp`] nodes whose
//! backward rules inject implicit Jacobians into the chain rule.

use super::{DenseMatrix, DenseVector};
use thiserror::Error;

pub type NodeId = usize;

#[derive(Debug, Error)]
pub enum TapeError {
    #[error("backward called before a root was set")]
    RootNotSet,
    #[error("root node must be scalar, got length {0}")]
    RootNotScalar(usize),
    #[error("node '{0}' has no backward rule but received a gradient")]
    MissingBackwardRule(&'static str),
    #[error("custom op '{op}' failed in backward")]
    CustomFailed {
        op: &'static str,
        #[source]
        source: Box<dyn std::error::Error + Send + Sync>,
    },
}

/// A differentiable operation with caller-supplied forward value and a
/// backward rule that maps the output cotangent to input cotangents.
pub trait CustomOp: Send {
    fn name(&self) -> &'static str;
    fn backward(
        &self,
        out_grad: &DenseVector,
        inputs: &[&DenseVector],
    ) -> Result<Vec<DenseVector>, TapeError>;
}

enum Op {
    Leaf,
    /// Forward-only value; erroring on backward realizes the
    /// missing-backward-rule contract.
    Opaque(&'static str),
    Add,
    Sub,
    Scale(f64),
    AddConst,
    Relu,
    ClampBox { lo: DenseVector, hi: DenseVector },
    Dot,
    DotConst(DenseVector),
    SqNorm,
    QuadFormConst(DenseMatrix),
    MatVecConst(DenseMatrix),
    MatVecParam { rows: usize, cols: usize },
    Gather(Vec<usize>),
    Concat,
    Custom(Box<dyn CustomOp>),
}

struct Node {
    op: Op,
    inputs: Vec<NodeId>,
    value: DenseVector,
}

#[derive(Default)]
pub struct GradTape {
    nodes: Vec<Node>,
    root: Option<NodeId>,
}

impl GradTape {
    pub fn new() -> Self {
        Self { nodes: Vec::with_capacity(64), root: None }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, id: NodeId) -> &DenseVector {
        &self.nodes[id].value
    }

    pub fn set_root(&mut self, id: NodeId) {
        self.root = Some(id);
    }

    pub fn root(&self) -> Option<NodeId> {
        self.root
    }

    fn push(&mut self, op: Op, inputs: Vec<NodeId>, value: DenseVector) -> NodeId {
        for &i in &inputs {
            debug_assert!(i < self.nodes.len(), "inputs must precede the node");
        }
        self.nodes.push(Node { op, inputs, value });
        self.nodes.len() - 1
    }

    pub fn leaf(&mut self, value: DenseVector) -> NodeId {
        self.push(Op::Leaf, vec![], value)
    }

    /// Forward-only node without a backward rule.
    pub fn opaque(&mut self, name: &'static str, inputs: Vec<NodeId>, value: DenseVector) -> NodeId {
        self.push(Op::Opaque(name), inputs, value)
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let value = self.value(a).add(self.value(b));
        self.push(Op::Add, vec![a, b], value)
    }

    pub fn sub(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let value = self.value(a).sub(self.value(b));
        self.push(Op::Sub, vec![a, b], value)
    }

    pub fn scale(&mut self, a: NodeId, c: f64) -> NodeId {
        let value = self.value(a).scale(c);
        self.push(Op::Scale(c), vec![a], value)
    }

    pub fn add_const(&mut self, a: NodeId, c: DenseVector) -> NodeId {
        let value = self.value(a).add(&c);
        self.push(Op::AddConst, vec![a], value)
    }

    pub fn relu(&mut self, a: NodeId) -> NodeId {
        let value = DenseVector::from_vec(self.value(a).iter().map(|v| v.max(0.0)).collect());
        self.push(Op::Relu, vec![a], value)
    }

    /// Entrywise clamp onto [lo, hi]. The backward subgradient is 1 inside
    /// and on the boundary, 0 strictly outside.
    pub fn clamp_box(&mut self, a: NodeId, lo: DenseVector, hi: DenseVector) -> NodeId {
        let value = DenseVector::from_vec(
            self.value(a)
                .iter()
                .zip(lo.iter().zip(hi.iter()))
                .map(|(v, (l, h))| v.max(*l).min(*h))
                .collect(),
        );
        self.push(Op::ClampBox { lo, hi }, vec![a], value)
    }

    pub fn dot(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let value = DenseVector::from_vec(vec![self.value(a).dot(self.value(b))]);
        self.push(Op::Dot, vec![a, b], value)
    }

    pub fn dot_const(&mut self, c: DenseVector, a: NodeId) -> NodeId {
        let value = DenseVector::from_vec(vec![c.dot(self.value(a))]);
        self.push(Op::DotConst(c), vec![a], value)
    }

    pub fn sq_norm(&mut self, a: NodeId) -> NodeId {
        let v = self.value(a);
        let value = DenseVector::from_vec(vec![v.dot(v)]);
        self.push(Op::SqNorm, vec![a], value)
    }

    /// ½ xᵀQx for symmetric Q.
    pub fn quad_form_const(&mut self, q: DenseMatrix, a: NodeId) -> NodeId {
        let x = self.value(a);
        let value = DenseVector::from_vec(vec![0.5 * x.dot(&q.matvec(x))]);
        self.push(Op::QuadFormConst(q), vec![a], value)
    }

    pub fn matvec_const(&mut self, m: DenseMatrix, a: NodeId) -> NodeId {
        let value = m.matvec(self.value(a));
        self.push(Op::MatVecConst(m), vec![a], value)
    }

    /// W x where W is a parameter node stored as a row-major flattened vector.
    pub fn matvec_param(&mut self, w: NodeId, rows: usize, cols: usize, x: NodeId) -> NodeId {
        let wv = self.value(w);
        let xv = self.value(x);
        debug_assert_eq!(wv.len(), rows * cols);
        debug_assert_eq!(xv.len(), cols);
        let mut out = vec![0.0; rows];
        for r in 0..rows {
            let row = &wv.as_slice()[r * cols..(r + 1) * cols];
            out[r] = row.iter().zip(xv.iter()).map(|(a, b)| a * b).sum();
        }
        self.push(Op::MatVecParam { rows, cols }, vec![w, x], DenseVector::from_vec(out))
    }

    pub fn gather(&mut self, a: NodeId, indices: Vec<usize>) -> NodeId {
        let v = self.value(a);
        let value = DenseVector::from_vec(indices.iter().map(|&i| v[i]).collect());
        self.push(Op::Gather(indices), vec![a], value)
    }

    pub fn concat(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let mut data = self.value(a).as_slice().to_vec();
        data.extend_from_slice(self.value(b).as_slice());
        self.push(Op::Concat, vec![a, b], DenseVector::from_vec(data))
    }

    /// Record a custom-gradient node with a caller-computed forward value.
    pub fn custom(&mut self, op: Box<dyn CustomOp>, inputs: Vec<NodeId>, value: DenseVector) -> NodeId {
        self.push(Op::Custom(op), inputs, value)
    }
}

/// Gradients of the root with respect to every node reachable from it.
#[derive(Debug)]
pub struct Gradients {
    grads: Vec<Option<DenseVector>>,
}

impl Gradients {
    pub fn get(&self, id: NodeId) -> Option<&DenseVector> {
        self.grads.get(id).and_then(Option::as_ref)
    }

    /// Gradient of `id` or zeros when the node does not influence the root.
    pub fn of(&self, id: NodeId, len: usize) -> DenseVector {
        self.get(id).cloned().unwrap_or_else(|| DenseVector::zeros(len))
    }
}

/// Reverse sweep from the tape's root. Each node is visited exactly once,
/// in reverse topological order.
pub fn tape_backward(tape: &GradTape) -> Result<Gradients, TapeError> {
    let root = tape.root.ok_or(TapeError::RootNotSet)?;
    let root_len = tape.nodes[root].value.len();
    if root_len != 1 {
        return Err(TapeError::RootNotScalar(root_len));
    }
    let mut grads: Vec<Option<DenseVector>> = vec![None; tape.nodes.len()];
    grads[root] = Some(DenseVector::from_vec(vec![1.0]));

    for id in (0..=root).rev() {
        let Some(g) = grads[id].take() else { continue };
        let node = &tape.nodes[id];
        let input_values: Vec<&DenseVector> =
            node.inputs.iter().map(|&i| &tape.nodes[i].value).collect();
        let input_grads = backward_one(&node.op, &g, &input_values, &node.value)?;
        debug_assert_eq!(input_grads.len(), node.inputs.len());
        for (&input, ig) in node.inputs.iter().zip(input_grads) {
            match &mut grads[input] {
                Some(acc) => acc.axpy(1.0, &ig),
                slot @ None => *slot = Some(ig),
            }
        }
        grads[id] = Some(g);
    }
    Ok(Gradients { grads })
}

fn backward_one(
    op: &Op,
    g: &DenseVector,
    inputs: &[&DenseVector],
    _value: &DenseVector,
) -> Result<Vec<DenseVector>, TapeError> {
    Ok(match op {
        Op::Leaf => vec![],
        Op::Opaque(name) => return Err(TapeError::MissingBackwardRule(name)),
        Op::Add => vec![g.clone(), g.clone()],
        Op::Sub => vec![g.clone(), g.scale(-1.0)],
        Op::Scale(c) => vec![g.scale(*c)],
        Op::AddConst => vec![g.clone()],
        Op::Relu => {
            let x = inputs[0];
            vec![DenseVector::from_vec(
                x.iter().zip(g.iter()).map(|(v, gi)| if *v >= 0.0 { *gi } else { 0.0 }).collect(),
            )]
        }
        Op::ClampBox { lo, hi } => {
            let x = inputs[0];
            vec![DenseVector::from_vec(
                x.iter()
                    .enumerate()
                    .zip(g.iter())
                    .map(|((i, v), gi)| if *v >= lo[i] && *v <= hi[i] { *gi } else { 0.0 })
                    .collect(),
            )]
        }
        Op::Dot => {
            let s = g[0];
            vec![inputs[1].scale(s), inputs[0].scale(s)]
        }
        Op::DotConst(c) => vec![c.scale(g[0])],
        Op::SqNorm => vec![inputs[0].scale(2.0 * g[0])],
        Op::QuadFormConst(q) => {
            let x = inputs[0];
            let qx = q.matvec(x);
            let qtx = q.matvec_transpose(x);
            vec![qx.add(&qtx).scale(0.5 * g[0])]
        }
        Op::MatVecConst(m) => vec![m.matvec_transpose(g)],
        Op::MatVecParam { rows, cols } => {
            let w = inputs[0];
            let x = inputs[1];
            // d/dW = g xᵀ (flattened row-major), d/dx = Wᵀ g.
            let mut dw = vec![0.0; rows * cols];
            for r in 0..*rows {
                let gr = g[r];
                if gr != 0.0 {
                    for c in 0..*cols {
                        dw[r * cols + c] = gr * x[c];
                    }
                }
            }
            let mut dx = vec![0.0; *cols];
            for r in 0..*rows {
                let gr = g[r];
                if gr != 0.0 {
                    let row = &w.as_slice()[r * cols..(r + 1) * cols];
                    for (d, wv) in dx.iter_mut().zip(row) {
                        *d += gr * wv;
                    }
                }
            }
            vec![DenseVector::from_vec(dw), DenseVector::from_vec(dx)]
        }
        Op::Gather(indices) => {
            let mut dx = DenseVector::zeros(inputs[0].len());
            for (k, &i) in indices.iter().enumerate() {
                dx[i] += g[k];
            }
            vec![dx]
        }
        Op::Concat => {
            let na = inputs[0].len();
            let ga = DenseVector::from_vec(g.as_slice()[..na].to_vec());
            let gb = DenseVector::from_vec(g.as_slice()[na..].to_vec());
            vec![ga, gb]
        }
        Op::Custom(op) => op.backward(g, inputs)?,
    })
}
