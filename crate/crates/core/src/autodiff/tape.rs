use std::collections::HashMap;

use super::{checked, Backend};
use crate::error::{precondition, Error, Result};
use crate::params::{ParamId, ParamSet};
use crate::tensor::{
    self, ConvSpec, ElemOp, FuseOp, FusionMode, NormStats, Shape, Tensor,
};

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug)]
enum Op {
    Leaf,
    Conv {
        x: Var,
        w: Var,
        b: Option<Var>,
        spec: ConvSpec,
    },
    Gelu(Var),
    Sigmoid(Var),
    LayerNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        stats: NormStats,
    },
    Add(Var, Var),
    Mul(Var, Var),
    MulBroadcast(Var, Var),
    Fuse {
        ctx: Var,
        v: Var,
        mode: FusionMode,
        op: FuseOp,
    },
    Gap(Var),
    Scale(Var, f64),
    Slice {
        x: Var,
        start: usize,
    },
    Reshape(Var),
    Matmul {
        a: Var,
        b: Var,
        ta: bool,
        tb: bool,
    },
    Softmax(Var),
    Sum(Var),
    CrossEntropy {
        logits: Var,
        labels: Vec<usize>,
        probs: Tensor,
    },
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

/// Records operations in execution order; the node list is therefore already
/// a topological order of the computation DAG.
pub struct Tape<'p> {
    params: &'p ParamSet,
    nodes: Vec<Node>,
    param_vars: HashMap<ParamId, Var>,
}

/// Gradients produced by [`Tape::backward`], kept for leaves only.
#[derive(Debug)]
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
    param_vars: HashMap<ParamId, Var>,
}

impl Gradients {
    /// Gradient of a leaf, `None` when no path reached it.
    pub fn get(&self, v: Var) -> Option<&Tensor> {
        self.grads.get(v.0).and_then(|g| g.as_ref())
    }

    pub fn param(&self, id: ParamId) -> Option<&Tensor> {
        self.param_vars.get(&id).and_then(|v| self.get(*v))
    }

    /// Gradient of a parameter, zeros when the parameter was unused or
    /// disconnected from the output.
    pub fn param_or_zeros(&self, params: &ParamSet, id: ParamId) -> Tensor {
        self.param(id)
            .cloned()
            .unwrap_or_else(|| Tensor::zeros(params.value(id).shape()))
    }
}

impl<'p> Tape<'p> {
    pub fn new(params: &'p ParamSet) -> Self {
        Self {
            params,
            nodes: Vec::new(),
            param_vars: HashMap::new(),
        }
    }

    /// A differentiable leaf that is not a parameter (e.g. a block input).
    pub fn input(&mut self, t: Tensor) -> Var {
        self.leaf(t, true)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn leaf(&mut self, t: Tensor, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value: t,
            op: Op::Leaf,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn push(&mut self, value: Tensor, op: Op, inputs: &[Var]) -> Var {
        let requires_grad = inputs.iter().any(|v| self.nodes[v.0].requires_grad);
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn rg(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Reverse sweep from `root` seeded with `seed`. Fan-out is handled by
    /// summing contributions; each node is visited once.
    pub fn backward(&self, root: Var, seed: &Tensor) -> Result<Gradients> {
        precondition!(
            seed.shape() == self.value(root).shape(),
            "seed gradient shape {:?} does not match output shape {:?}",
            seed.shape(),
            self.value(root).shape()
        );
        let mut grads: Vec<Option<Tensor>> = vec![None; self.nodes.len()];
        grads[root.0] = Some(seed.clone());
        for i in (0..=root.0).rev() {
            let node = &self.nodes[i];
            if !node.requires_grad {
                grads[i] = None;
                continue;
            }
            if matches!(node.op, Op::Leaf) {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            self.propagate(node, &g, &mut grads)?;
        }
        Ok(Gradients {
            grads,
            param_vars: self.param_vars.clone(),
        })
    }

    fn accumulate(&self, grads: &mut [Option<Tensor>], v: Var, g: Tensor) -> Result<()> {
        if !self.rg(v) {
            return Ok(());
        }
        match &mut grads[v.0] {
            Some(acc) => acc.add_assign(&g)?,
            slot @ None => *slot = Some(g),
        }
        Ok(())
    }

    fn propagate(&self, node: &Node, g: &Tensor, grads: &mut [Option<Tensor>]) -> Result<()> {
        match &node.op {
            Op::Leaf => {}
            Op::Conv { x, w, b, spec } => {
                let want = (self.rg(*x), self.rg(*w), b.is_some_and(|b| self.rg(b)));
                let cg = tensor::conv2d_backward(self.value(*x), self.value(*w), spec, g, want)?;
                if let Some(dx) = cg.input {
                    self.accumulate(grads, *x, dx)?;
                }
                if let Some(dw) = cg.weight {
                    self.accumulate(grads, *w, dw)?;
                }
                if let (Some(b), Some(db)) = (b, cg.bias) {
                    let shape = self.value(*b).shape();
                    self.accumulate(grads, *b, db.reshape(shape)?)?;
                }
            }
            Op::Gelu(x) => {
                let d = tensor::elementwise(g, &tensor::gelu_grad(self.value(*x)), ElemOp::Mul)?;
                self.accumulate(grads, *x, d)?;
            }
            Op::Sigmoid(x) => {
                let y = &node.value;
                let d = Tensor::new(
                    y.shape(),
                    y.data()
                        .iter()
                        .zip(g.data())
                        .map(|(&s, &u)| u * s * (1.0 - s))
                        .collect(),
                )?;
                self.accumulate(grads, *x, d)?;
            }
            Op::LayerNorm {
                x,
                gamma,
                beta,
                stats,
            } => {
                let (dx, dg, db) =
                    tensor::layer_norm_backward(self.value(*x), self.value(*gamma), stats, g)?;
                self.accumulate(grads, *x, dx)?;
                let gs = self.value(*gamma).shape();
                self.accumulate(grads, *gamma, dg.reshape(gs)?)?;
                let bs = self.value(*beta).shape();
                self.accumulate(grads, *beta, db.reshape(bs)?)?;
            }
            Op::Add(a, b) => {
                self.accumulate(grads, *a, g.clone())?;
                self.accumulate(grads, *b, g.clone())?;
            }
            Op::Mul(a, b) => {
                if self.rg(*a) {
                    let d = tensor::elementwise(g, self.value(*b), ElemOp::Mul)?;
                    self.accumulate(grads, *a, d)?;
                }
                if self.rg(*b) {
                    let d = tensor::elementwise(g, self.value(*a), ElemOp::Mul)?;
                    self.accumulate(grads, *b, d)?;
                }
            }
            Op::MulBroadcast(x, s) => {
                if self.rg(*x) {
                    self.accumulate(grads, *x, tensor::mul_broadcast(g, self.value(*s))?)?;
                }
                if self.rg(*s) {
                    let prod = tensor::elementwise(g, self.value(*x), ElemOp::Mul)?;
                    let shape = self.value(*s).shape();
                    self.accumulate(grads, *s, tensor::reduce_to_shape(&prod, shape)?)?;
                }
            }
            Op::Fuse { ctx, v, mode, op } => {
                let (dc, dv) =
                    tensor::fuse_backward(self.value(*ctx), self.value(*v), g, *mode, *op)?;
                self.accumulate(grads, *ctx, dc)?;
                self.accumulate(grads, *v, dv)?;
            }
            Op::Gap(x) => {
                let [_, _, h, w] = self.value(*x).shape();
                let inv = 1.0 / (h * w) as f64;
                let d = Tensor::from_fn(self.value(*x).shape(), |n, c, _, _| g.at(n, c, 0, 0) * inv);
                self.accumulate(grads, *x, d)?;
            }
            Op::Scale(x, alpha) => self.accumulate(grads, *x, g.scale(*alpha))?,
            Op::Slice { x, start } => {
                let xs = self.value(*x).shape();
                let len = g.c();
                let d = Tensor::from_fn(xs, |n, c, h, w| {
                    if c >= *start && c < start + len {
                        g.at(n, c - start, h, w)
                    } else {
                        0.0
                    }
                });
                self.accumulate(grads, *x, d)?;
            }
            Op::Reshape(x) => {
                let shape = self.value(*x).shape();
                self.accumulate(grads, *x, g.clone().reshape(shape)?)?;
            }
            Op::Matmul { a, b, ta, tb } => {
                let (av, bv) = (self.value(*a), self.value(*b));
                let mm = tensor::batched_matmul;
                if self.rg(*a) {
                    let da = match (ta, tb) {
                        (false, false) => mm(g, bv, false, true)?,
                        (true, false) => mm(bv, g, false, true)?,
                        (false, true) => mm(g, bv, false, false)?,
                        (true, true) => mm(bv, g, true, true)?,
                    };
                    self.accumulate(grads, *a, da)?;
                }
                if self.rg(*b) {
                    let db = match (ta, tb) {
                        (false, false) => mm(av, g, true, false)?,
                        (true, false) => mm(av, g, false, false)?,
                        (false, true) => mm(g, av, true, false)?,
                        (true, true) => mm(g, av, true, true)?,
                    };
                    self.accumulate(grads, *b, db)?;
                }
            }
            Op::Softmax(x) => {
                let d = tensor::softmax_backward_last(&node.value, g);
                self.accumulate(grads, *x, d)?;
            }
            Op::Sum(x) => {
                let d = Tensor::full(self.value(*x).shape(), g.item()?);
                self.accumulate(grads, *x, d)?;
            }
            Op::CrossEntropy {
                logits,
                labels,
                probs,
            } => {
                let k = probs.c();
                let scale = g.item()? / labels.len().max(1) as f64;
                let mut d = probs.clone();
                for (i, &l) in labels.iter().enumerate() {
                    d.data_mut()[i * k + l] -= 1.0;
                }
                self.accumulate(grads, *logits, d.scale(scale))?;
            }
        }
        Ok(())
    }
}

impl<'p> Backend for Tape<'p> {
    type Value = Var;

    fn get<'v>(&'v self, v: &'v Var) -> &'v Tensor {
        self.value(*v)
    }

    fn params(&self) -> &ParamSet {
        self.params
    }

    fn param(&mut self, id: ParamId) -> Var {
        if let Some(v) = self.param_vars.get(&id) {
            return *v;
        }
        let v = self.leaf(self.params.value(id).clone(), true);
        self.param_vars.insert(id, v);
        v
    }

    fn constant(&mut self, t: Tensor) -> Var {
        self.leaf(t, false)
    }

    fn conv2d(&mut self, x: &Var, w: &Var, b: Option<&Var>, spec: &ConvSpec) -> Result<Var> {
        let y = tensor::conv2d(self.value(*x), self.value(*w), b.map(|b| self.value(*b)), spec)?;
        let y = checked(y, "conv2d")?;
        let mut inputs = vec![*x, *w];
        inputs.extend(b.copied());
        Ok(self.push(
            y,
            Op::Conv {
                x: *x,
                w: *w,
                b: b.copied(),
                spec: *spec,
            },
            &inputs,
        ))
    }

    fn gelu(&mut self, x: &Var) -> Result<Var> {
        let y = checked(tensor::gelu(self.value(*x)), "gelu")?;
        Ok(self.push(y, Op::Gelu(*x), &[*x]))
    }

    fn sigmoid(&mut self, x: &Var) -> Result<Var> {
        let y = tensor::sigmoid(self.value(*x));
        Ok(self.push(y, Op::Sigmoid(*x), &[*x]))
    }

    fn layer_norm(&mut self, x: &Var, gamma: &Var, beta: &Var, eps: f64) -> Result<Var> {
        let (y, stats) =
            tensor::layer_norm_with_stats(self.value(*x), self.value(*gamma), self.value(*beta), eps)?;
        let y = checked(y, "layer_norm")?;
        Ok(self.push(
            y,
            Op::LayerNorm {
                x: *x,
                gamma: *gamma,
                beta: *beta,
                stats,
            },
            &[*x, *gamma, *beta],
        ))
    }

    fn add(&mut self, a: &Var, b: &Var) -> Result<Var> {
        let y = tensor::elementwise(self.value(*a), self.value(*b), ElemOp::Add)?;
        Ok(self.push(checked(y, "add")?, Op::Add(*a, *b), &[*a, *b]))
    }

    fn mul(&mut self, a: &Var, b: &Var) -> Result<Var> {
        let y = tensor::elementwise(self.value(*a), self.value(*b), ElemOp::Mul)?;
        Ok(self.push(checked(y, "mul")?, Op::Mul(*a, *b), &[*a, *b]))
    }

    fn mul_broadcast(&mut self, x: &Var, s: &Var) -> Result<Var> {
        let y = tensor::mul_broadcast(self.value(*x), self.value(*s))?;
        Ok(self.push(checked(y, "mul_broadcast")?, Op::MulBroadcast(*x, *s), &[*x, *s]))
    }

    fn fuse(&mut self, ctx: &Var, v: &Var, mode: FusionMode, op: FuseOp) -> Result<Var> {
        let y = tensor::fuse_with(self.value(*ctx), self.value(*v), mode, op)?;
        Ok(self.push(
            checked(y, "fuse")?,
            Op::Fuse {
                ctx: *ctx,
                v: *v,
                mode,
                op,
            },
            &[*ctx, *v],
        ))
    }

    fn global_avg_pool(&mut self, x: &Var) -> Result<Var> {
        let y = tensor::global_avg_pool(self.value(*x))?;
        Ok(self.push(y, Op::Gap(*x), &[*x]))
    }

    fn scale(&mut self, x: &Var, alpha: f64) -> Result<Var> {
        let y = checked(self.value(*x).scale(alpha), "scale")?;
        Ok(self.push(y, Op::Scale(*x, alpha), &[*x]))
    }

    fn slice_channels(&mut self, x: &Var, start: usize, len: usize) -> Result<Var> {
        let y = tensor::slice_channels(self.value(*x), start, len)?;
        Ok(self.push(y, Op::Slice { x: *x, start }, &[*x]))
    }

    fn reshape(&mut self, x: &Var, shape: Shape) -> Result<Var> {
        let y = self.value(*x).clone().reshape(shape)?;
        Ok(self.push(y, Op::Reshape(*x), &[*x]))
    }

    fn matmul(&mut self, a: &Var, b: &Var, trans_a: bool, trans_b: bool) -> Result<Var> {
        let y = tensor::batched_matmul(self.value(*a), self.value(*b), trans_a, trans_b)?;
        Ok(self.push(
            checked(y, "matmul")?,
            Op::Matmul {
                a: *a,
                b: *b,
                ta: trans_a,
                tb: trans_b,
            },
            &[*a, *b],
        ))
    }

    fn softmax_last(&mut self, x: &Var) -> Result<Var> {
        let y = checked(tensor::softmax(self.value(*x), 3)?, "softmax")?;
        Ok(self.push(y, Op::Softmax(*x), &[*x]))
    }

    fn sum(&mut self, x: &Var) -> Result<Var> {
        let y = tensor::sum_all(self.value(*x));
        Ok(self.push(y, Op::Sum(*x), &[*x]))
    }

    fn cross_entropy(&mut self, logits: &Var, labels: &[usize]) -> Result<Var> {
        let (loss, probs) = tensor::cross_entropy(self.value(*logits), labels)?;
        if !loss.is_finite() {
            return Err(Error::Numerical(format!("cross-entropy loss is {loss}")));
        }
        Ok(self.push(
            Tensor::scalar(loss),
            Op::CrossEntropy {
                logits: *logits,
                labels: labels.to_vec(),
                probs,
            },
            &[*logits],
        ))
    }
}
