//! Tape of primitive operations with a single reverse gradient pass.
//!
//! Programs are built once through [`GraphBuilder`], then evaluated many
//! times against different parameter values. Nodes are stored in the order
//! they were created, which is already a topological order, so the gradient
//! pass visits each node exactly once in reverse.

use crate::autodiff::{Objective, Tensor};
use crate::error::{Error, Result};

pub type NodeId = usize;

#[derive(Debug, Clone)]
enum Op {
    /// Parameter slot, differentiated.
    Input(usize),
    /// Baked-in tensor, not differentiated.
    Const(Tensor),
    Add(NodeId, NodeId),
    Mul(NodeId, NodeId),
    MatMul(NodeId, NodeId),
    Tanh(NodeId),
    Scale(NodeId, f64),
    Gather(NodeId, Vec<usize>),
    SumSquares(NodeId),
}

#[derive(Debug, Clone)]
struct Node {
    op: Op,
    rows: usize,
    cols: usize,
}

/// Incrementally builds a [`Program`].
#[derive(Debug, Default)]
pub struct GraphBuilder {
    nodes: Vec<Node>,
    input_shapes: Vec<(usize, usize)>,
}

impl GraphBuilder {
    pub fn new() -> Self {
        GraphBuilder::default()
    }

    fn push(&mut self, op: Op, rows: usize, cols: usize) -> NodeId {
        self.nodes.push(Node { op, rows, cols });
        self.nodes.len() - 1
    }

    fn shape(&self, id: NodeId) -> Result<(usize, usize)> {
        let n = self
            .nodes
            .get(id)
            .ok_or_else(|| Error::Contract(format!("unknown node id {id}")))?;
        Ok((n.rows, n.cols))
    }

    /// Declare the next parameter slot. Parameters are numbered in the order
    /// they are declared and must be supplied in that order at evaluation.
    pub fn input(&mut self, rows: usize, cols: usize) -> NodeId {
        let index = self.input_shapes.len();
        self.input_shapes.push((rows, cols));
        self.push(Op::Input(index), rows, cols)
    }

    pub fn constant(&mut self, value: Tensor) -> NodeId {
        let (rows, cols) = value.shape();
        self.push(Op::Const(value), rows, cols)
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let (ra, ca) = self.shape(a)?;
        let (rb, cb) = self.shape(b)?;
        if (ra, ca) != (rb, cb) {
            return Err(Error::Contract(format!(
                "add shape mismatch: {ra}x{ca} vs {rb}x{cb}"
            )));
        }
        Ok(self.push(Op::Add(a, b), ra, ca))
    }

    pub fn mul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let (ra, ca) = self.shape(a)?;
        let (rb, cb) = self.shape(b)?;
        if (ra, ca) != (rb, cb) {
            return Err(Error::Contract(format!(
                "mul shape mismatch: {ra}x{ca} vs {rb}x{cb}"
            )));
        }
        Ok(self.push(Op::Mul(a, b), ra, ca))
    }

    pub fn matmul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let (ra, ca) = self.shape(a)?;
        let (rb, cb) = self.shape(b)?;
        if ca != rb {
            return Err(Error::Contract(format!(
                "matmul shape mismatch: {ra}x{ca} * {rb}x{cb}"
            )));
        }
        Ok(self.push(Op::MatMul(a, b), ra, cb))
    }

    pub fn tanh(&mut self, a: NodeId) -> Result<NodeId> {
        let (r, c) = self.shape(a)?;
        Ok(self.push(Op::Tanh(a), r, c))
    }

    pub fn scale(&mut self, a: NodeId, factor: f64) -> Result<NodeId> {
        let (r, c) = self.shape(a)?;
        Ok(self.push(Op::Scale(a, factor), r, c))
    }

    /// Column gather; indices may repeat.
    pub fn gather(&mut self, a: NodeId, indices: Vec<usize>) -> Result<NodeId> {
        let (r, c) = self.shape(a)?;
        for &i in &indices {
            if i >= c {
                return Err(Error::Contract(format!(
                    "gather index {i} out of range for {c} columns"
                )));
            }
        }
        let cols = indices.len();
        Ok(self.push(Op::Gather(a, indices), r, cols))
    }

    pub fn sum_squares(&mut self, a: NodeId) -> Result<NodeId> {
        self.shape(a)?;
        Ok(self.push(Op::SumSquares(a), 1, 1))
    }

    /// Convenience: `a - b` as `add(a, scale(b, -1))`.
    pub fn sub(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let nb = self.scale(b, -1.0)?;
        self.add(a, nb)
    }

    /// Finish the program. The output must be a scalar.
    pub fn finish(self, output: NodeId) -> Result<Program> {
        let (r, c) = self
            .nodes
            .get(output)
            .map(|n| (n.rows, n.cols))
            .ok_or_else(|| Error::Contract(format!("unknown output node {output}")))?;
        if (r, c) != (1, 1) {
            return Err(Error::Contract(format!(
                "loss must be scalar, got {r}x{c}"
            )));
        }
        Ok(Program { nodes: self.nodes, input_shapes: self.input_shapes, output })
    }
}

/// A finished scalar program, replayable against different parameter values.
#[derive(Debug, Clone)]
pub struct Program {
    nodes: Vec<Node>,
    input_shapes: Vec<(usize, usize)>,
    output: NodeId,
}

impl Program {
    pub fn n_inputs(&self) -> usize {
        self.input_shapes.len()
    }

    pub fn input_shapes(&self) -> &[(usize, usize)] {
        &self.input_shapes
    }

    fn check_params(&self, params: &[Tensor]) -> Result<()> {
        if params.len() != self.input_shapes.len() {
            return Err(Error::Contract(format!(
                "expected {} parameters, got {}",
                self.input_shapes.len(),
                params.len()
            )));
        }
        for (i, (p, want)) in params.iter().zip(&self.input_shapes).enumerate() {
            if p.shape() != *want {
                return Err(Error::Contract(format!(
                    "parameter {i} has shape {}x{}, expected {}x{}",
                    p.shape().0,
                    p.shape().1,
                    want.0,
                    want.1
                )));
            }
        }
        Ok(())
    }

    fn forward(&self, params: &[Tensor]) -> Result<Vec<Tensor>> {
        self.check_params(params)?;
        let mut values: Vec<Tensor> = Vec::with_capacity(self.nodes.len());
        for node in &self.nodes {
            let v = match &node.op {
                Op::Input(i) => params[*i].clone(),
                Op::Const(t) => t.clone(),
                Op::Add(a, b) => values[*a].add(&values[*b])?,
                Op::Mul(a, b) => values[*a].mul_elem(&values[*b])?,
                Op::MatMul(a, b) => values[*a].matmul(&values[*b])?,
                Op::Tanh(a) => values[*a].map(f64::tanh),
                Op::Scale(a, f) => values[*a].scale(*f),
                Op::Gather(a, idx) => values[*a].gather_cols(idx)?,
                Op::SumSquares(a) => Tensor::scalar(values[*a].sum_squares()),
            };
            values.push(v);
        }
        Ok(values)
    }

    /// Evaluate the scalar loss.
    pub fn eval(&self, params: &[Tensor]) -> Result<f64> {
        let values = self.forward(params)?;
        values[self.output].scalar_value()
    }

    /// Loss together with gradients for every parameter slot.
    pub fn eval_with_grad(&self, params: &[Tensor]) -> Result<(f64, Vec<Tensor>)> {
        let values = self.forward(params)?;
        let loss = values[self.output].scalar_value()?;

        let mut adjoints: Vec<Option<Tensor>> = vec![None; self.nodes.len()];
        adjoints[self.output] = Some(Tensor::scalar(1.0));

        let mut grads: Vec<Tensor> =
            self.input_shapes.iter().map(|(r, c)| Tensor::zeros(*r, *c)).collect();

        for id in (0..self.nodes.len()).rev() {
            let adj = match adjoints[id].take() {
                Some(a) => a,
                None => continue,
            };
            match &self.nodes[id].op {
                Op::Input(i) => {
                    grads[*i] = grads[*i].add(&adj)?;
                }
                Op::Const(_) => {}
                Op::Add(a, b) => {
                    accumulate(&mut adjoints, *a, adj.clone())?;
                    accumulate(&mut adjoints, *b, adj)?;
                }
                Op::Mul(a, b) => {
                    let da = adj.mul_elem(&values[*b])?;
                    let db = adj.mul_elem(&values[*a])?;
                    accumulate(&mut adjoints, *a, da)?;
                    accumulate(&mut adjoints, *b, db)?;
                }
                Op::MatMul(a, b) => {
                    let da = adj.matmul(&values[*b].transpose())?;
                    let db = values[*a].transpose().matmul(&adj)?;
                    accumulate(&mut adjoints, *a, da)?;
                    accumulate(&mut adjoints, *b, db)?;
                }
                Op::Tanh(a) => {
                    let y = &values[id];
                    let da = adj.mul_elem(&y.map(|t| 1.0 - t * t))?;
                    accumulate(&mut adjoints, *a, da)?;
                }
                Op::Scale(a, f) => {
                    accumulate(&mut adjoints, *a, adj.scale(*f))?;
                }
                Op::Gather(a, idx) => {
                    let (rows, cols) = values[*a].shape();
                    let mut da = Tensor::zeros(rows, cols);
                    for r in 0..rows {
                        for (j, &src) in idx.iter().enumerate() {
                            let v = da.get(r, src) + adj.get(r, j);
                            da.set(r, src, v);
                        }
                    }
                    accumulate(&mut adjoints, *a, da)?;
                }
                Op::SumSquares(a) => {
                    let s = adj.scalar_value()?;
                    let da = values[*a].scale(2.0 * s);
                    accumulate(&mut adjoints, *a, da)?;
                }
            }
        }
        Ok((loss, grads))
    }
}

fn accumulate(adjoints: &mut [Option<Tensor>], id: NodeId, delta: Tensor) -> Result<()> {
    adjoints[id] = Some(match adjoints[id].take() {
        Some(existing) => existing.add(&delta)?,
        None => delta,
    });
    Ok(())
}

/// Gradients of a tape program with respect to its parameters.
pub fn grad(program: &Program, params: &[Tensor]) -> Result<Vec<Tensor>> {
    Ok(program.eval_with_grad(params)?.1)
}

impl Objective for Program {
    fn value(&self, params: &[Tensor]) -> Result<f64> {
        self.eval(params)
    }

    fn value_and_grad(&self, params: &[Tensor]) -> Result<(f64, Vec<Tensor>)> {
        self.eval_with_grad(params)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::finite_difference_gradient;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn grad_of_sum_of_squares_is_2p() {
        let mut g = GraphBuilder::new();
        let p = g.input(1, 3);
        let loss = g.sum_squares(p).unwrap();
        let prog = g.finish(loss).unwrap();
        let grads = grad(&prog, &[Tensor::row(vec![1.0, 2.0, 3.0])]).unwrap();
        assert_eq!(grads[0].data(), &[2.0, 4.0, 6.0]);
    }

    #[test]
    fn grad_of_constant_loss_is_zero() {
        let mut g = GraphBuilder::new();
        let _p = g.input(1, 4);
        let c = g.constant(Tensor::row(vec![1.0, 2.0]));
        let loss = g.sum_squares(c).unwrap();
        let prog = g.finish(loss).unwrap();
        let grads = grad(&prog, &[Tensor::row(vec![5.0, 6.0, 7.0, 8.0])]).unwrap();
        assert_eq!(grads[0].data(), &[0.0; 4]);
    }

    #[test]
    fn non_scalar_loss_rejected_at_construction() {
        let mut g = GraphBuilder::new();
        let p = g.input(1, 3);
        assert!(matches!(g.finish(p), Err(Error::Contract(_))));
    }

    #[test]
    fn tanh_network_gradient_matches_finite_differences() {
        // loss = sum of squares of tanh(x W): exercises matmul + tanh chains.
        let mut rng = ChaCha8Rng::seed_from_u64(42);
        let w: Vec<f64> = (0..12).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let x: Vec<f64> = (0..4).map(|_| rng.gen_range(-1.0..1.0)).collect();

        let mut g = GraphBuilder::new();
        let xin = g.input(1, 4);
        let wc = g.constant(Tensor::new(4, 3, w).unwrap());
        let h = g.matmul(xin, wc).unwrap();
        let t = g.tanh(h).unwrap();
        let loss = g.sum_squares(t).unwrap();
        let prog = g.finish(loss).unwrap();

        let params = vec![Tensor::row(x)];
        let analytic = grad(&prog, &params).unwrap();
        let fd = finite_difference_gradient(&prog, &params, 1e-5).unwrap();
        for (a, f) in analytic[0].data().iter().zip(fd[0].data()) {
            let rel = (a - f).abs() / f.abs().max(1e-10);
            assert!(rel <= 1e-6, "rel err {rel}");
        }
    }

    #[test]
    fn every_primitive_gradient_matches_finite_differences() {
        // 100 random programs touching all primitives, checked against
        // central finite differences.
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        for case in 0..100 {
            let rows = rng.gen_range(1..3usize);
            let cols = rng.gen_range(2..5usize);
            let inner = rng.gen_range(2..4usize);

            let mut g = GraphBuilder::new();
            let a = g.input(rows, cols);
            let b = g.input(cols, inner);
            let cdata: Vec<f64> = (0..rows * cols).map(|_| rng.gen_range(-1.0..1.0)).collect();
            let c = g.constant(Tensor::new(rows, cols, cdata).unwrap());

            let scaled = g.scale(a, 0.7).unwrap();
            let summed = g.add(scaled, c).unwrap();
            let prod = g.mul(summed, a).unwrap();
            let mm = g.matmul(prod, b).unwrap();
            let act = g.tanh(mm).unwrap();
            let idx: Vec<usize> = (0..inner).map(|_| rng.gen_range(0..inner)).collect();
            let picked = g.gather(act, idx).unwrap();
            let diff = g.sub(picked, picked).unwrap(); // exercise sub too
            let both = g.add(picked, diff).unwrap();
            let loss = g.sum_squares(both).unwrap();
            let prog = g.finish(loss).unwrap();

            let params = vec![
                Tensor::new(rows, cols, (0..rows * cols).map(|_| rng.gen_range(-1.0..1.0)).collect())
                    .unwrap(),
                Tensor::new(cols, inner, (0..cols * inner).map(|_| rng.gen_range(-1.0..1.0)).collect())
                    .unwrap(),
            ];
            let analytic = grad(&prog, &params).unwrap();
            let fd = finite_difference_gradient(&prog, &params, 1e-5).unwrap();
            for (pa, pf) in analytic.iter().zip(&fd) {
                for (x, y) in pa.data().iter().zip(pf.data()) {
                    let rel = (x - y).abs() / y.abs().max(1e-6);
                    assert!(rel <= 1e-5, "case {case}: {x} vs {y} (rel {rel})");
                }
            }
        }
    }

    #[test]
    fn repeated_gradient_calls_are_deterministic() {
        let mut g = GraphBuilder::new();
        let p = g.input(2, 2);
        let t = g.tanh(p).unwrap();
        let loss = g.sum_squares(t).unwrap();
        let prog = g.finish(loss).unwrap();
        let params = vec![Tensor::new(2, 2, vec![0.3, -0.4, 0.9, 0.1]).unwrap()];
        let a = grad(&prog, &params).unwrap();
        let b = grad(&prog, &params).unwrap();
        assert_eq!(a[0].data(), b[0].data());
    }
}
