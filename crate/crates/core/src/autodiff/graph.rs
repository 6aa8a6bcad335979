//! Append-only computation graph with re-entrant reverse-mode differentiation.
//!
//! Node ids are assigned in insertion order, so the node list is always
//! topologically sorted. Backward passes append their adjoint expressions to
//! the same graph; the returned gradients are ordinary [`Var`]s and can be
//! differentiated again.

use std::cell::RefCell;
use std::rc::Rc;

use super::unary::{phi_poly_derivative, Unary};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

#[derive(Clone, Debug)]
enum Op {
    Leaf,
    Add,
    Sub,
    Mul,
    Neg,
    Scale(f64),
    AddScalar,
    Unary(Unary),
    MatMul,
    Transpose,
    SumAll,
    SumRows,
    SumCols,
    BroadcastRows,
    BroadcastCols,
    BroadcastScalar,
    Reshape,
    Gather(Rc<Vec<usize>>),
    ScatterAdd(Rc<Vec<usize>>),
}

struct Node {
    op: Op,
    parents: Vec<usize>,
    value: Rc<Tensor>,
}

#[derive(Default)]
pub struct Graph {
    nodes: RefCell<Vec<Node>>,
}

/// Handle to a node of a [`Graph`].
#[derive(Clone, Copy)]
pub struct Var<'g> {
    graph: &'g Graph,
    id: usize,
}

impl std::fmt::Debug for Var<'_> {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "Var#{}{:?}", self.id, self.value().shape())
    }
}

impl Graph {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    fn push(&self, op: Op, parents: Vec<usize>, value: Tensor) -> Var<'_> {
        let mut nodes = self.nodes.borrow_mut();
        debug_assert!(parents.iter().all(|&p| p < nodes.len()));
        nodes.push(Node { op, parents, value: Rc::new(value) });
        Var { graph: self, id: nodes.len() - 1 }
    }

    /// Adds a root node (input, parameter or constant).
    pub fn leaf(&self, value: Tensor) -> Var<'_> {
        self.push(Op::Leaf, vec![], value)
    }

    pub fn scalar(&self, v: f64) -> Var<'_> {
        self.leaf(Tensor::scalar(v))
    }

    fn value_of(&self, id: usize) -> Rc<Tensor> {
        self.nodes.borrow()[id].value.clone()
    }

    /// Reverse-mode gradient of the scalar `output` with respect to each of `wrt`.
    ///
    /// Adjoints are accumulated in reverse insertion order. The results live in
    /// this graph, so they can be fed back into `grad` for higher orders. A
    /// node that does not influence `output` gets a zero gradient.
    pub fn grad<'g>(&'g self, output: Var<'g>, wrt: &[Var<'g>]) -> Result<Vec<Var<'g>>> {
        let n_nodes = self.len();
        for w in wrt.iter().chain(std::iter::once(&output)) {
            if !std::ptr::eq(w.graph, self) || w.id >= n_nodes {
                return Err(Error::UnknownNode(w.id));
            }
        }
        if self.value_of(output.id).len() != 1 {
            return Err(Error::NotScalar(output.id));
        }
        let out = output.id;

        let mut needs = vec![false; out + 1];
        for w in wrt {
            if w.id <= out {
                needs[w.id] = true;
            }
        }
        {
            let nodes = self.nodes.borrow();
            for i in 0..=out {
                if needs[i] {
                    continue;
                }
                let node = &nodes[i];
                let passes = !matches!(node.op, Op::Unary(Unary::Step));
                needs[i] = passes && node.parents.iter().any(|&p| needs[p]);
            }
        }

        let mut adj: Vec<Option<Var<'g>>> = vec![None; out + 1];
        if needs[out] {
            let shape = self.value_of(out).shape().to_vec();
            adj[out] = Some(self.leaf(Tensor::ones(&shape)));
        }
        for i in (0..=out).rev() {
            let Some(g) = adj[i] else { continue };
            if !needs[i] {
                continue;
            }
            let (op, parents) = {
                let nodes = self.nodes.borrow();
                (nodes[i].op.clone(), nodes[i].parents.clone())
            };
            let node = Var { graph: self, id: i };
            let contributions = self.backward(&op, &parents, node, g)?;
            for (p, c) in parents.iter().zip(contributions) {
                let Some(c) = c else { continue };
                if !needs[*p] {
                    continue;
                }
                adj[*p] = Some(match adj[*p] {
                    Some(acc) => acc.add(c)?,
                    None => c,
                });
            }
        }

        Ok(wrt
            .iter()
            .map(|w| match adj.get(w.id).copied().flatten() {
                Some(g) => g,
                None => {
                    let shape = self.value_of(w.id).shape().to_vec();
                    self.leaf(Tensor::zeros(&shape))
                }
            })
            .collect())
    }

    /// Adjoint contributions to each parent of `node` given its adjoint `g`.
    fn backward<'g>(
        &'g self,
        op: &Op,
        parents: &[usize],
        node: Var<'g>,
        g: Var<'g>,
    ) -> Result<Vec<Option<Var<'g>>>> {
        let p = |k: usize| Var { graph: self, id: parents[k] };
        let shape_of = |k: usize| self.value_of(parents[k]).shape().to_vec();
        Ok(match op {
            Op::Leaf => vec![],
            Op::Add => vec![Some(g), Some(g)],
            Op::Sub => vec![Some(g), Some(g.neg())],
            Op::Mul => vec![Some(g.mul(p(1))?), Some(g.mul(p(0))?)],
            Op::Neg => vec![Some(g.neg())],
            Op::Scale(c) => vec![Some(g.scale(*c))],
            Op::AddScalar => vec![Some(g)],
            Op::Unary(u) => vec![self.unary_backward(u, p(0), node, g)?],
            Op::MatMul => vec![
                Some(g.matmul(p(1).t())?),
                Some(p(0).t().matmul(g)?),
            ],
            Op::Transpose => vec![Some(g.t())],
            Op::SumAll => vec![Some(g.broadcast_scalar(&shape_of(0)))],
            Op::SumRows => vec![Some(g.broadcast_rows(shape_of(0)[0]))],
            Op::SumCols => vec![Some(g.broadcast_cols(shape_of(0)[1]))],
            Op::BroadcastRows => vec![Some(g.sum_rows())],
            Op::BroadcastCols => vec![Some(g.sum_cols())],
            Op::BroadcastScalar => vec![Some(g.sum().reshape(&shape_of(0))?)],
            Op::Reshape => vec![Some(g.reshape(&shape_of(0))?)],
            Op::Gather(idx) => vec![Some(g.scatter_add(idx.clone(), &shape_of(0))?)],
            Op::ScatterAdd(idx) => {
                vec![Some(g.gather(idx.clone(), &shape_of(0))?)]
            }
        })
    }

    fn unary_backward<'g>(
        &'g self,
        u: &Unary,
        x: Var<'g>,
        y: Var<'g>,
        g: Var<'g>,
    ) -> Result<Option<Var<'g>>> {
        let d = match u {
            Unary::Step => return Ok(None),
            Unary::GuidedRelu => return Ok(Some(g.relu().mul(x.step())?)),
            Unary::Exp => y,
            Unary::Log => x.recip(),
            Unary::Recip => y.mul(y)?.neg(),
            Unary::Sqrt => y.recip().scale(0.5),
            Unary::Tanh => y.mul(y)?.neg().add_scalar(1.0),
            Unary::Sigmoid => y.mul(y.neg().add_scalar(1.0))?,
            Unary::Relu => x.step(),
            Unary::Square => x.scale(2.0),
            Unary::Softplus(b) => x.unary(Unary::SoftplusGrad(*b)),
            Unary::SoftplusGrad(b) => y.mul(y.neg().add_scalar(1.0))?.scale(*b),
            Unary::Gelu => x.unary(Unary::GeluGrad),
            Unary::GeluGrad => x.unary(Unary::PhiPoly(Rc::new(vec![2.0, 0.0, -1.0]))),
            Unary::PhiPoly(c) => x.unary(Unary::PhiPoly(Rc::new(phi_poly_derivative(c)))),
            Unary::Elu => x.unary(Unary::EluGrad),
            Unary::EluGrad | Unary::EluGrad2 => x.unary(Unary::EluGrad2),
        };
        Ok(Some(g.mul(d)?))
    }
}

fn shape_err(what: &str, a: &[usize], b: &[usize]) -> Error {
    Error::Shape(format!("{what}: {a:?} vs {b:?}"))
}

impl<'g> Var<'g> {
    pub fn id(&self) -> usize {
        self.id
    }

    pub fn graph(&self) -> &'g Graph {
        self.graph
    }

    pub fn value(&self) -> Rc<Tensor> {
        self.graph.value_of(self.id)
    }

    pub fn shape(&self) -> Vec<usize> {
        self.value().shape().to_vec()
    }

    /// Value of a single-element node.
    pub fn item(&self) -> f64 {
        self.value().item()
    }

    /// A new leaf holding this node's current value, cut off from its history.
    pub fn detach(&self) -> Var<'g> {
        self.graph.leaf((*self.value()).clone())
    }

    fn binary(&self, other: Var<'g>, op: Op, what: &str) -> Result<Var<'g>> {
        let (a, b) = (self.value(), other.value());
        if a.shape() != b.shape() {
            return Err(shape_err(what, a.shape(), b.shape()));
        }
        let v = match op {
            Op::Add => a.add(&b)?,
            Op::Sub => a.sub(&b)?,
            Op::Mul => a.mul(&b)?,
            _ => unreachable!(),
        };
        Ok(self.graph.push(op, vec![self.id, other.id], v))
    }

    pub fn add(&self, other: Var<'g>) -> Result<Var<'g>> {
        self.binary(other, Op::Add, "add")
    }

    pub fn sub(&self, other: Var<'g>) -> Result<Var<'g>> {
        self.binary(other, Op::Sub, "sub")
    }

    pub fn mul(&self, other: Var<'g>) -> Result<Var<'g>> {
        self.binary(other, Op::Mul, "mul")
    }

    pub fn div(&self, other: Var<'g>) -> Result<Var<'g>> {
        self.mul(other.recip())
    }

    pub fn neg(&self) -> Var<'g> {
        let v = self.value().scale(-1.0);
        self.graph.push(Op::Neg, vec![self.id], v)
    }

    pub fn scale(&self, c: f64) -> Var<'g> {
        let v = self.value().scale(c);
        self.graph.push(Op::Scale(c), vec![self.id], v)
    }

    pub fn add_scalar(&self, c: f64) -> Var<'g> {
        let v = self.value().map(|x| x + c);
        self.graph.push(Op::AddScalar, vec![self.id], v)
    }

    pub fn unary(&self, u: Unary) -> Var<'g> {
        let v = self.value().map(|x| u.eval(x));
        self.graph.push(Op::Unary(u), vec![self.id], v)
    }

    pub fn exp(&self) -> Var<'g> {
        self.unary(Unary::Exp)
    }

    pub fn ln(&self) -> Var<'g> {
        self.unary(Unary::Log)
    }

    pub fn recip(&self) -> Var<'g> {
        self.unary(Unary::Recip)
    }

    pub fn sqrt(&self) -> Var<'g> {
        self.unary(Unary::Sqrt)
    }

    pub fn tanh(&self) -> Var<'g> {
        self.unary(Unary::Tanh)
    }

    pub fn sigmoid(&self) -> Var<'g> {
        self.unary(Unary::Sigmoid)
    }

    pub fn relu(&self) -> Var<'g> {
        self.unary(Unary::Relu)
    }

    pub fn step(&self) -> Var<'g> {
        self.unary(Unary::Step)
    }

    pub fn square(&self) -> Var<'g> {
        self.unary(Unary::Square)
    }

    pub fn softplus(&self, beta: f64) -> Var<'g> {
        self.unary(Unary::Softplus(beta))
    }

    pub fn gelu(&self) -> Var<'g> {
        self.unary(Unary::Gelu)
    }

    pub fn elu(&self) -> Var<'g> {
        self.unary(Unary::Elu)
    }

    pub fn matmul(&self, other: Var<'g>) -> Result<Var<'g>> {
        let v = self.value().matmul(&other.value())?;
        Ok(self.graph.push(Op::MatMul, vec![self.id, other.id], v))
    }

    /// Matrix transpose.
    pub fn t(&self) -> Var<'g> {
        let v = self.value().transpose();
        self.graph.push(Op::Transpose, vec![self.id], v)
    }

    /// Sum of all entries, as a rank-0 node.
    pub fn sum(&self) -> Var<'g> {
        let v = Tensor::scalar(self.value().sum());
        self.graph.push(Op::SumAll, vec![self.id], v)
    }

    /// `[m, n] -> [n]`.
    pub fn sum_rows(&self) -> Var<'g> {
        let v = self.value().sum_rows();
        self.graph.push(Op::SumRows, vec![self.id], v)
    }

    /// `[m, n] -> [m]`.
    pub fn sum_cols(&self) -> Var<'g> {
        let v = self.value().sum_cols();
        self.graph.push(Op::SumCols, vec![self.id], v)
    }

    /// `[n] -> [m, n]`, repeating the vector as every row.
    pub fn broadcast_rows(&self, m: usize) -> Var<'g> {
        let src = self.value();
        let n = src.len();
        let mut data = Vec::with_capacity(m * n);
        for _ in 0..m {
            data.extend_from_slice(src.data());
        }
        self.graph.push(Op::BroadcastRows, vec![self.id], Tensor::from_parts(vec![m, n], data))
    }

    /// `[m] -> [m, n]`, repeating each entry along its row.
    pub fn broadcast_cols(&self, n: usize) -> Var<'g> {
        let src = self.value();
        let m = src.len();
        let mut data = Vec::with_capacity(m * n);
        for &v in src.data() {
            data.extend(std::iter::repeat_n(v, n));
        }
        self.graph.push(Op::BroadcastCols, vec![self.id], Tensor::from_parts(vec![m, n], data))
    }

    /// Fills a tensor of `shape` with this single-element node's value.
    pub fn broadcast_scalar(&self, shape: &[usize]) -> Var<'g> {
        let v = Tensor::full(shape, self.item());
        self.graph.push(Op::BroadcastScalar, vec![self.id], v)
    }

    pub fn reshape(&self, shape: &[usize]) -> Result<Var<'g>> {
        let v = self.value().reshape(shape)?;
        Ok(self.graph.push(Op::Reshape, vec![self.id], v))
    }

    /// `out.flat[k] = self.flat[idx[k]]`, reshaped to `shape`.
    pub fn gather(&self, idx: Rc<Vec<usize>>, shape: &[usize]) -> Result<Var<'g>> {
        let src = self.value();
        if idx.len() != shape.iter().product::<usize>() || idx.iter().any(|&i| i >= src.len()) {
            return Err(Error::Shape(format!(
                "gather of {} indices into {:?} from {:?}",
                idx.len(),
                shape,
                src.shape()
            )));
        }
        let data = idx.iter().map(|&i| src.data()[i]).collect();
        Ok(self.graph.push(Op::Gather(idx), vec![self.id], Tensor::from_parts(shape.to_vec(), data)))
    }

    /// `out.flat[idx[k]] += self.flat[k]` into zeros of `shape`.
    pub fn scatter_add(&self, idx: Rc<Vec<usize>>, shape: &[usize]) -> Result<Var<'g>> {
        let src = self.value();
        let n: usize = shape.iter().product();
        if idx.len() != src.len() || idx.iter().any(|&i| i >= n) {
            return Err(Error::Shape(format!(
                "scatter of {:?} with {} indices into {:?}",
                src.shape(),
                idx.len(),
                shape
            )));
        }
        let mut data = vec![0.0; n];
        for (k, &i) in idx.iter().enumerate() {
            data[i] += src.data()[k];
        }
        Ok(self.graph.push(Op::ScatterAdd(idx), vec![self.id], Tensor::from_parts(shape.to_vec(), data)))
    }

    // Composite operations.

    /// Adds a bias vector `[n]` to every row of `[m, n]`.
    pub fn add_row_vector(&self, bias: Var<'g>) -> Result<Var<'g>> {
        let m = self.value().rows();
        self.add(bias.broadcast_rows(m))
    }

    pub fn dot(&self, other: Var<'g>) -> Result<Var<'g>> {
        Ok(self.mul(other)?.sum())
    }

    pub fn norm_sq(&self) -> Var<'g> {
        self.square().sum()
    }

    pub fn norm(&self) -> Var<'g> {
        self.norm_sq().sqrt()
    }

    /// Row-wise log-sum-exp of `[m, n]` as `[m]`; the row maxima are held
    /// constant, which leaves every derivative exact.
    pub fn lse_rows(&self) -> Result<Var<'g>> {
        let n = self.value().cols();
        let m = self.graph.leaf(self.value().row_max());
        let shifted = self.sub(m.broadcast_cols(n))?;
        shifted.exp().sum_cols().ln().add(m)
    }

    pub fn log_softmax_rows(&self) -> Result<Var<'g>> {
        let n = self.value().cols();
        self.sub(self.lse_rows()?.broadcast_cols(n))
    }

    pub fn softmax_rows(&self) -> Result<Var<'g>> {
        let n = self.value().cols();
        let m = self.graph.leaf(self.value().row_max());
        let e = self.sub(m.broadcast_cols(n))?.exp();
        e.mul(e.sum_cols().recip().broadcast_cols(n))
    }

    /// Divides each row by its L2 norm.
    pub fn l2_normalize_rows(&self) -> Result<Var<'g>> {
        let n = self.value().cols();
        let inv = self.square().sum_cols().sqrt().recip();
        self.mul(inv.broadcast_cols(n))
    }

    /// Standardizes each row to zero mean and unit variance (no affine part).
    pub fn standardize_rows(&self, eps: f64) -> Result<Var<'g>> {
        let n = self.value().cols();
        let mean = self.sum_cols().scale(1.0 / n as f64);
        let centered = self.sub(mean.broadcast_cols(n))?;
        let var = centered.square().sum_cols().scale(1.0 / n as f64);
        let inv_std = var.add_scalar(eps).sqrt().recip();
        centered.mul(inv_std.broadcast_cols(n))
    }
}
