//! Reverse-mode differentiation over small, fixed computation graphs.
//!
//! A [`Graph`] is built eagerly: every op computes its forward value when it
//! is added, so node order is a topological order. [`Graph::backward`] then
//! walks the nodes once in reverse. Leaves are either parameters (which
//! receive gradients) or constants (which do not).

use ndarray::{Array2, Axis, Zip};

use crate::{Error, Result};

pub type Tensor = Array2<f64>;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct NodeId(usize);

#[derive(Debug, Clone)]
enum Op {
    Param(usize),
    Const,
    /// `a · b`, or `a · bᵀ` when `transpose_b`.
    MatMul { a: NodeId, b: NodeId, transpose_b: bool },
    /// Adds a 1×k row to every row of `x`.
    AddBias { x: NodeId, bias: NodeId },
    Relu(NodeId),
    /// Elementwise product with a constant node.
    MaskMul { x: NodeId, mask: NodeId },
    Add(NodeId, NodeId),
    /// Multiplies by a 1×1 node.
    Scale { x: NodeId, s: NodeId },
    ScaleConst { x: NodeId, c: f64 },
    /// `x − c` with `c` a constant node of the same shape.
    SubConst { x: NodeId },
    /// Mean of squared differences to a constant target, as a 1×1 node.
    MseLoss { pred: NodeId, target: NodeId },
}

#[derive(Debug, Clone)]
struct Node {
    op: Op,
    value: Tensor,
    needs_grad: bool,
}

#[derive(Debug, Default, Clone)]
pub struct Graph {
    nodes: Vec<Node>,
}

fn check_finite(t: &Tensor, what: &str) -> Result<()> {
    if t.iter().all(|v| v.is_finite()) {
        Ok(())
    } else {
        Err(Error::NonFiniteValue {
            context: what.to_string(),
        })
    }
}

fn shape_err(expected: usize, got: usize) -> Error {
    Error::DimensionMismatch { expected, got }
}

impl Graph {
    pub fn new() -> Self {
        Graph::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, id: NodeId) -> &Tensor {
        &self.nodes[id.0].value
    }

    fn push(&mut self, op: Op, value: Tensor, needs_grad: bool, what: &str) -> Result<NodeId> {
        check_finite(&value, what)?;
        self.nodes.push(Node {
            op,
            value,
            needs_grad,
        });
        Ok(NodeId(self.nodes.len() - 1))
    }

    fn needs(&self, id: NodeId) -> bool {
        self.nodes[id.0].needs_grad
    }

    /// Parameter leaf; `index` is its slot in the gradient vector.
    pub fn param(&mut self, index: usize, value: Tensor) -> Result<NodeId> {
        self.push(Op::Param(index), value, true, "parameter")
    }

    pub fn constant(&mut self, value: Tensor) -> Result<NodeId> {
        self.push(Op::Const, value, false, "constant")
    }

    pub fn matmul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.matmul_impl(a, b, false)
    }

    /// `a · bᵀ`.
    pub fn matmul_t(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.matmul_impl(a, b, true)
    }

    fn matmul_impl(&mut self, a: NodeId, b: NodeId, transpose_b: bool) -> Result<NodeId> {
        let (va, vb) = (self.value(a), self.value(b));
        let vb = if transpose_b { vb.t() } else { vb.view() };
        if va.ncols() != vb.nrows() {
            return Err(shape_err(va.ncols(), vb.nrows()));
        }
        let out = va.dot(&vb);
        let needs = self.needs(a) || self.needs(b);
        self.push(Op::MatMul { a, b, transpose_b }, out, needs, "matmul")
    }

    pub fn add_bias(&mut self, x: NodeId, bias: NodeId) -> Result<NodeId> {
        let (vx, vb) = (self.value(x), self.value(bias));
        if vb.nrows() != 1 || vb.ncols() != vx.ncols() {
            return Err(shape_err(vx.ncols(), vb.len()));
        }
        let out = vx + vb;
        let needs = self.needs(x) || self.needs(bias);
        self.push(Op::AddBias { x, bias }, out, needs, "add_bias")
    }

    pub fn relu(&mut self, x: NodeId) -> Result<NodeId> {
        let out = self.value(x).mapv(|v| if v > 0.0 { v } else { 0.0 });
        let needs = self.needs(x);
        self.push(Op::Relu(x), out, needs, "relu")
    }

    pub fn mask_mul(&mut self, x: NodeId, mask: NodeId) -> Result<NodeId> {
        if self.needs(mask) {
            return Err(Error::InvalidArgument("mask must be a constant".into()));
        }
        let (vx, vm) = (self.value(x), self.value(mask));
        if vx.dim() != vm.dim() {
            return Err(shape_err(vx.len(), vm.len()));
        }
        let out = vx * vm;
        let needs = self.needs(x);
        self.push(Op::MaskMul { x, mask }, out, needs, "mask_mul")
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let (va, vb) = (self.value(a), self.value(b));
        if va.dim() != vb.dim() {
            return Err(shape_err(va.len(), vb.len()));
        }
        let out = va + vb;
        let needs = self.needs(a) || self.needs(b);
        self.push(Op::Add(a, b), out, needs, "add")
    }

    pub fn scale(&mut self, x: NodeId, s: NodeId) -> Result<NodeId> {
        let vs = self.value(s);
        if vs.dim() != (1, 1) {
            return Err(shape_err(1, vs.len()));
        }
        let out = self.value(x) * vs[[0, 0]];
        let needs = self.needs(x) || self.needs(s);
        self.push(Op::Scale { x, s }, out, needs, "scale")
    }

    pub fn scale_const(&mut self, x: NodeId, c: f64) -> Result<NodeId> {
        let out = self.value(x) * c;
        let needs = self.needs(x);
        self.push(Op::ScaleConst { x, c }, out, needs, "scale_const")
    }

    pub fn sub_const(&mut self, x: NodeId, c: NodeId) -> Result<NodeId> {
        if self.needs(c) {
            return Err(Error::InvalidArgument("subtrahend must be a constant".into()));
        }
        let (vx, vc) = (self.value(x), self.value(c));
        if vx.dim() != vc.dim() {
            return Err(shape_err(vx.len(), vc.len()));
        }
        let out = vx - vc;
        let needs = self.needs(x);
        self.push(Op::SubConst { x }, out, needs, "sub_const")
    }

    pub fn mse_loss(&mut self, pred: NodeId, target: NodeId) -> Result<NodeId> {
        if self.needs(target) {
            return Err(Error::InvalidArgument("target must be a constant".into()));
        }
        let (vp, vt) = (self.value(pred), self.value(target));
        if vp.dim() != vt.dim() {
            return Err(shape_err(vp.len(), vt.len()));
        }
        let mut acc = 0.0;
        Zip::from(vp).and(vt).for_each(|p, t| acc += (p - t) * (p - t));
        let out = Array2::from_elem((1, 1), acc / vp.len() as f64);
        let needs = self.needs(pred);
        self.push(Op::MseLoss { pred, target }, out, needs, "mse_loss")
    }

    /// Gradients of the 1×1 node `loss` with respect to every parameter leaf,
    /// indexed by parameter slot (`None` when the parameter is unused or
    /// absent). Gradients for parameters used several times are summed.
    pub fn backward(&self, loss: NodeId, n_params: usize) -> Result<Vec<Option<Tensor>>> {
        if self.value(loss).dim() != (1, 1) {
            return Err(shape_err(1, self.value(loss).len()));
        }
        let mut grads: Vec<Option<Tensor>> = vec![None; loss.0 + 1];
        grads[loss.0] = Some(Array2::ones((1, 1)));
        let mut out: Vec<Option<Tensor>> = vec![None; n_params];
        for i in (0..=loss.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            let node = &self.nodes[i];
            if !node.needs_grad {
                continue;
            }
            check_finite(&g, "gradient")?;
            match &node.op {
                Op::Param(k) => accumulate(&mut out[*k], g),
                Op::Const => {}
                Op::MatMul { a, b, transpose_b } => {
                    let (va, vb) = (self.value(*a), self.value(*b));
                    if self.needs(*a) {
                        let ga = if *transpose_b { g.dot(vb) } else { g.dot(&vb.t()) };
                        accumulate(&mut grads[a.0], ga);
                    }
                    if self.needs(*b) {
                        let gb = if *transpose_b { g.t().dot(va) } else { va.t().dot(&g) };
                        accumulate(&mut grads[b.0], gb);
                    }
                }
                Op::AddBias { x, bias } => {
                    if self.needs(*bias) {
                        let gb = g.sum_axis(Axis(0)).insert_axis(Axis(0));
                        accumulate(&mut grads[bias.0], gb);
                    }
                    if self.needs(*x) {
                        accumulate(&mut grads[x.0], g);
                    }
                }
                Op::Relu(x) => {
                    let mut gx = g;
                    Zip::from(&mut gx).and(&node.value).for_each(|gv, &v| {
                        if v <= 0.0 {
                            *gv = 0.0;
                        }
                    });
                    accumulate(&mut grads[x.0], gx);
                }
                Op::MaskMul { x, mask } => {
                    let gx = g * self.value(*mask);
                    accumulate(&mut grads[x.0], gx);
                }
                Op::Add(a, b) => {
                    if self.needs(*a) && self.needs(*b) {
                        accumulate(&mut grads[a.0], g.clone());
                        accumulate(&mut grads[b.0], g);
                    } else if self.needs(*a) {
                        accumulate(&mut grads[a.0], g);
                    } else {
                        accumulate(&mut grads[b.0], g);
                    }
                }
                Op::Scale { x, s } => {
                    if self.needs(*s) {
                        let mut acc = 0.0;
                        Zip::from(&g).and(self.value(*x)).for_each(|a, b| acc += a * b);
                        accumulate(&mut grads[s.0], Array2::from_elem((1, 1), acc));
                    }
                    if self.needs(*x) {
                        let gx = g * self.value(*s)[[0, 0]];
                        accumulate(&mut grads[x.0], gx);
                    }
                }
                Op::ScaleConst { x, c } => accumulate(&mut grads[x.0], g * *c),
                Op::SubConst { x } => accumulate(&mut grads[x.0], g),
                Op::MseLoss { pred, target } => {
                    let (vp, vt) = (self.value(*pred), self.value(*target));
                    let k = 2.0 * g[[0, 0]] / vp.len() as f64;
                    let gp = Zip::from(vp).and(vt).map_collect(|p, t| k * (p - t));
                    accumulate(&mut grads[pred.0], gp);
                }
            }
        }
        Ok(out)
    }
}

fn accumulate(slot: &mut Option<Tensor>, g: Tensor) {
    match slot {
        Some(acc) => *acc += &g,
        None => *slot = Some(g),
    }
}
