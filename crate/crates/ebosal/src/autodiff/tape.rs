//! The computation tape.
//!
//! Nodes live in one flat arena owned by the [`Tape`]; a [`NodeId`] is an
//! index into it. Since every op only refers to earlier nodes, a single
//! reverse sweep over the arena implements backpropagation. `backward` may
//! be called repeatedly; gradients accumulate until [`Tape::reset_grads`].

use crate::error::{Error, Result};

use super::tensor::Tensor;

/// Handle to a node on a tape. Only valid for the tape that produced it.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct NodeId(usize);

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    Matmul { a: NodeId, b: NodeId },
    AddBias { x: NodeId, bias: NodeId },
    Add { a: NodeId, b: NodeId },
    Sub { a: NodeId, b: NodeId },
    Mul { a: NodeId, b: NodeId },
    Scale { x: NodeId, factor: f64 },
    AddScalar { x: NodeId },
    Relu { x: NodeId },
    Sum { x: NodeId },
    Mean { x: NodeId },
    LogSumExpRows { x: NodeId },
    SoftmaxRows { x: NodeId },
    GatherCols { x: NodeId, cols: Vec<usize> },
    LnClamped { x: NodeId, floor: f64 },
    SoftmaxCrossEntropy { logits: NodeId, targets: Vec<usize> },
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    grad: Tensor,
    op: Op,
}

/// Arena of one computation graph.
#[derive(Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

/// log(sum(exp(x))) with the usual max shift; stable for any finite input.
pub(crate) fn logsumexp_slice(xs: &[f64]) -> f64 {
    let m = xs.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let s: f64 = xs.iter().map(|v| (v - m).exp()).sum();
    m + s.ln()
}

fn softmax_into(xs: &[f64], out: &mut [f64]) {
    let m = xs.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let mut s = 0.0;
    for (o, &v) in out.iter_mut().zip(xs.iter()) {
        *o = (v - m).exp();
        s += *o;
    }
    for o in out.iter_mut() {
        *o /= s;
    }
}

impl Tape {
    pub fn new() -> Self {
        Tape::default()
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

    pub fn grad(&self, id: NodeId) -> &Tensor {
        &self.nodes[id.0].grad
    }

    /// Zeroes every accumulated gradient, leaving values intact.
    pub fn reset_grads(&mut self) {
        for n in self.nodes.iter_mut() {
            n.grad = Tensor::zeros(n.value.shape());
        }
    }

    fn push(&mut self, value: Tensor, op: Op) -> NodeId {
        let grad = Tensor::zeros(value.shape());
        self.nodes.push(Node { value, grad, op });
        NodeId(self.nodes.len() - 1)
    }

    /// Inserts an input node. Leaves receive gradients but have no parents.
    pub fn leaf(&mut self, value: Tensor) -> NodeId {
        self.push(value, Op::Leaf)
    }

    /// Matrix product of two 2-D nodes, `[m,k] x [k,n] -> [m,n]`.
    pub fn matmul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let (m, ka) = self.value(a).dims2()?;
        let (kb, n) = self.value(b).dims2()?;
        if ka != kb {
            return Err(Error::Dim(format!(
                "matmul inner dims differ: {} vs {}",
                ka, kb
            )));
        }
        let out = mat_mul_nn(self.value(a).data(), self.value(b).data(), m, ka, n);
        let value = Tensor::new(vec![m, n], out)?;
        Ok(self.push(value, Op::Matmul { a, b }))
    }

    /// Adds a `[n]` bias to every row of a `[m,n]` node.
    pub fn add_bias(&mut self, x: NodeId, bias: NodeId) -> Result<NodeId> {
        let (m, n) = self.value(x).dims2()?;
        let bshape = self.value(bias).shape().to_vec();
        if bshape != [n] {
            return Err(Error::Dim(format!(
                "bias shape {:?} does not match row width {}",
                bshape, n
            )));
        }
        let xd = self.value(x).data();
        let bd = self.value(bias).data();
        let mut out = Vec::with_capacity(m * n);
        for i in 0..m {
            for j in 0..n {
                out.push(xd[i * n + j] + bd[j]);
            }
        }
        let value = Tensor::new(vec![m, n], out)?;
        Ok(self.push(value, Op::AddBias { x, bias }))
    }

    fn elementwise_pair(
        &mut self,
        a: NodeId,
        b: NodeId,
        f: impl Fn(f64, f64) -> f64,
        op: Op,
        name: &str,
    ) -> Result<NodeId> {
        if self.value(a).shape() != self.value(b).shape() {
            return Err(Error::Dim(format!(
                "{} on shapes {:?} and {:?}",
                name,
                self.value(a).shape(),
                self.value(b).shape()
            )));
        }
        let shape = self.value(a).shape().to_vec();
        let out: Vec<f64> = self
            .value(a)
            .data()
            .iter()
            .zip(self.value(b).data().iter())
            .map(|(&x, &y)| f(x, y))
            .collect();
        let value = Tensor::new(shape, out)?;
        Ok(self.push(value, op))
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.elementwise_pair(a, b, |x, y| x + y, Op::Add { a, b }, "add")
    }

    pub fn sub(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.elementwise_pair(a, b, |x, y| x - y, Op::Sub { a, b }, "sub")
    }

    pub fn mul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.elementwise_pair(a, b, |x, y| x * y, Op::Mul { a, b }, "mul")
    }

    pub fn scale(&mut self, x: NodeId, factor: f64) -> Result<NodeId> {
        if !factor.is_finite() {
            return Err(Error::NonFinite(format!("scale factor {}", factor)));
        }
        let shape = self.value(x).shape().to_vec();
        let out: Vec<f64> = self.value(x).data().iter().map(|&v| v * factor).collect();
        let value = Tensor::new(shape, out)?;
        Ok(self.push(value, Op::Scale { x, factor }))
    }

    pub fn add_scalar(&mut self, x: NodeId, shift: f64) -> Result<NodeId> {
        if !shift.is_finite() {
            return Err(Error::NonFinite(format!("shift {}", shift)));
        }
        let shape = self.value(x).shape().to_vec();
        let out: Vec<f64> = self.value(x).data().iter().map(|&v| v + shift).collect();
        let value = Tensor::new(shape, out)?;
        Ok(self.push(value, Op::AddScalar { x }))
    }

    /// max(0, x). The subgradient at 0 is taken as 0.
    pub fn relu(&mut self, x: NodeId) -> Result<NodeId> {
        let shape = self.value(x).shape().to_vec();
        let out: Vec<f64> = self.value(x).data().iter().map(|&v| v.max(0.0)).collect();
        let value = Tensor::new(shape, out)?;
        Ok(self.push(value, Op::Relu { x }))
    }

    /// Sum of all elements, yielding a scalar.
    pub fn sum(&mut self, x: NodeId) -> Result<NodeId> {
        let s: f64 = self.value(x).data().iter().sum();
        let value = Tensor::scalar(s)?;
        Ok(self.push(value, Op::Sum { x }))
    }

    /// Mean of all elements, yielding a scalar. Errors on empty input.
    pub fn mean(&mut self, x: NodeId) -> Result<NodeId> {
        let n = self.value(x).len();
        if n == 0 {
            return Err(Error::Contract("mean of an empty tensor".into()));
        }
        let s: f64 = self.value(x).data().iter().sum();
        let value = Tensor::scalar(s / n as f64)?;
        Ok(self.push(value, Op::Mean { x }))
    }

    /// Row-wise log-sum-exp of a `[m,n]` node, yielding `[m]`.
    pub fn logsumexp_rows(&mut self, x: NodeId) -> Result<NodeId> {
        let (m, n) = self.value(x).dims2()?;
        if n == 0 {
            return Err(Error::Dim("logsumexp over zero columns".into()));
        }
        let xd = self.value(x).data();
        let out: Vec<f64> = (0..m).map(|i| logsumexp_slice(&xd[i * n..(i + 1) * n])).collect();
        let value = Tensor::new(vec![m], out)?;
        Ok(self.push(value, Op::LogSumExpRows { x }))
    }

    /// Row-wise softmax of a `[m,n]` node.
    pub fn softmax_rows(&mut self, x: NodeId) -> Result<NodeId> {
        let (m, n) = self.value(x).dims2()?;
        if n == 0 {
            return Err(Error::Dim("softmax over zero columns".into()));
        }
        let xd = self.value(x).data();
        let mut out = vec![0.0; m * n];
        for i in 0..m {
            softmax_into(&xd[i * n..(i + 1) * n], &mut out[i * n..(i + 1) * n]);
        }
        let value = Tensor::new(vec![m, n], out)?;
        Ok(self.push(value, Op::SoftmaxRows { x }))
    }

    /// Picks one column per row: `out[i] = x[i, cols[i]]`, yielding `[m]`.
    pub fn gather_cols(&mut self, x: NodeId, cols: &[usize]) -> Result<NodeId> {
        let (m, n) = self.value(x).dims2()?;
        if cols.len() != m {
            return Err(Error::Dim(format!(
                "gather needs {} column picks, got {}",
                m,
                cols.len()
            )));
        }
        if let Some(bad) = cols.iter().position(|&c| c >= n) {
            return Err(Error::Index(format!(
                "gather column {} out of range for width {} (row {})",
                cols[bad], n, bad
            )));
        }
        let xd = self.value(x).data();
        let out: Vec<f64> = cols.iter().enumerate().map(|(i, &c)| xd[i * n + c]).collect();
        let value = Tensor::new(vec![m], out)?;
        Ok(self.push(
            value,
            Op::GatherCols {
                x,
                cols: cols.to_vec(),
            },
        ))
    }

    /// ln(max(x, floor)); the gradient is zero wherever the clamp is active.
    pub fn ln_clamped(&mut self, x: NodeId, floor: f64) -> Result<NodeId> {
        if !(floor.is_finite() && floor > 0.0) {
            return Err(Error::Contract(format!(
                "ln_clamped floor must be positive and finite, got {}",
                floor
            )));
        }
        let shape = self.value(x).shape().to_vec();
        let out: Vec<f64> = self.value(x).data().iter().map(|&v| v.max(floor).ln()).collect();
        let value = Tensor::new(shape, out)?;
        Ok(self.push(value, Op::LnClamped { x, floor }))
    }

    /// Mean negative log-likelihood of softmax(logits) against integer
    /// targets; computed as logsumexp(row) - row[target] per row, which never
    /// forms the probabilities explicitly.
    pub fn softmax_cross_entropy(&mut self, logits: NodeId, targets: &[usize]) -> Result<NodeId> {
        let (m, n) = self.value(logits).dims2()?;
        if targets.len() != m {
            return Err(Error::Dim(format!(
                "{} targets for {} rows",
                targets.len(),
                m
            )));
        }
        if m == 0 {
            return Err(Error::Contract("cross entropy over zero rows".into()));
        }
        if let Some(bad) = targets.iter().position(|&t| t >= n) {
            return Err(Error::Index(format!(
                "target class {} out of range for {} classes (row {})",
                targets[bad], n, bad
            )));
        }
        let xd = self.value(logits).data();
        let mut total = 0.0;
        for (i, &t) in targets.iter().enumerate() {
            let row = &xd[i * n..(i + 1) * n];
            total += logsumexp_slice(row) - row[t];
        }
        let value = Tensor::scalar(total / m as f64)?;
        Ok(self.push(
            value,
            Op::SoftmaxCrossEntropy {
                logits,
                targets: targets.to_vec(),
            },
        ))
    }

    /// Backpropagates from a scalar root, accumulating `d root / d node`
    /// into each node's gradient. Repeated calls keep accumulating.
    pub fn backward(&mut self, root: NodeId) -> Result<()> {
        if !self.value(root).is_scalar() {
            return Err(Error::Dim(format!(
                "backward root must be scalar, got shape {:?}",
                self.value(root).shape()
            )));
        }
        // Scratch adjoints for this single sweep; persistent grads only get
        // the final per-node totals so repeated backward calls stay additive.
        let mut adj: Vec<Option<Tensor>> = Vec::with_capacity(root.0 + 1);
        adj.resize_with(root.0 + 1, || None);
        adj[root.0] = Some(Tensor::scalar(1.0).expect("1 is finite"));

        for id in (0..=root.0).rev() {
            let Some(g) = adj[id].take() else { continue };
            self.propagate(id, &g, &mut adj)?;
            self.nodes[id].grad.add_assign_checked(&g)?;
        }
        Ok(())
    }

    /// Pushes the adjoint of `id` to its parents.
    fn propagate(&self, id: usize, g: &Tensor, adj: &mut [Option<Tensor>]) -> Result<()> {
        let node = &self.nodes[id];
        let gd = g.data();
        match &node.op {
            Op::Leaf => {}
            Op::Matmul { a, b } => {
                let (m, k) = self.value(*a).dims2()?;
                let (_, n) = self.value(*b).dims2()?;
                let da = mat_mul_nt(gd, self.value(*b).data(), m, n, k);
                let db = mat_mul_tn(self.value(*a).data(), gd, m, k, n);
                accumulate(adj, *a, &[m, k], &da)?;
                accumulate(adj, *b, &[k, n], &db)?;
            }
            Op::AddBias { x, bias } => {
                let (m, n) = self.value(*x).dims2()?;
                accumulate(adj, *x, &[m, n], gd)?;
                let mut db = vec![0.0; n];
                for i in 0..m {
                    for j in 0..n {
                        db[j] += gd[i * n + j];
                    }
                }
                accumulate(adj, *bias, &[n], &db)?;
            }
            Op::Add { a, b } => {
                let shape = node.value.shape().to_vec();
                accumulate(adj, *a, &shape, gd)?;
                accumulate(adj, *b, &shape, gd)?;
            }
            Op::Sub { a, b } => {
                let shape = node.value.shape().to_vec();
                accumulate(adj, *a, &shape, gd)?;
                let neg: Vec<f64> = gd.iter().map(|v| -v).collect();
                accumulate(adj, *b, &shape, &neg)?;
            }
            Op::Mul { a, b } => {
                let shape = node.value.shape().to_vec();
                let bd = self.value(*b).data();
                let ad = self.value(*a).data();
                let da: Vec<f64> = gd.iter().zip(bd).map(|(&g, &y)| g * y).collect();
                let db: Vec<f64> = gd.iter().zip(ad).map(|(&g, &x)| g * x).collect();
                accumulate(adj, *a, &shape, &da)?;
                accumulate(adj, *b, &shape, &db)?;
            }
            Op::Scale { x, factor } => {
                let shape = node.value.shape().to_vec();
                let dx: Vec<f64> = gd.iter().map(|&g| g * factor).collect();
                accumulate(adj, *x, &shape, &dx)?;
            }
            Op::AddScalar { x } => {
                let shape = node.value.shape().to_vec();
                accumulate(adj, *x, &shape, gd)?;
            }
            Op::Relu { x } => {
                let shape = node.value.shape().to_vec();
                let xd = self.value(*x).data();
                let dx: Vec<f64> = gd
                    .iter()
                    .zip(xd)
                    .map(|(&g, &v)| if v > 0.0 { g } else { 0.0 })
                    .collect();
                accumulate(adj, *x, &shape, &dx)?;
            }
            Op::Sum { x } => {
                let shape = self.value(*x).shape().to_vec();
                let dx = vec![gd[0]; self.value(*x).len()];
                accumulate(adj, *x, &shape, &dx)?;
            }
            Op::Mean { x } => {
                let shape = self.value(*x).shape().to_vec();
                let n = self.value(*x).len();
                let dx = vec![gd[0] / n as f64; n];
                accumulate(adj, *x, &shape, &dx)?;
            }
            Op::LogSumExpRows { x } => {
                let (m, n) = self.value(*x).dims2()?;
                let xd = self.value(*x).data();
                let lse = node.value.data();
                let mut dx = vec![0.0; m * n];
                for i in 0..m {
                    for j in 0..n {
                        dx[i * n + j] = gd[i] * (xd[i * n + j] - lse[i]).exp();
                    }
                }
                accumulate(adj, *x, &[m, n], &dx)?;
            }
            Op::SoftmaxRows { x } => {
                let (m, n) = self.value(*x).dims2()?;
                let p = node.value.data();
                let mut dx = vec![0.0; m * n];
                for i in 0..m {
                    let row = i * n;
                    let dot: f64 = (0..n).map(|j| gd[row + j] * p[row + j]).sum();
                    for j in 0..n {
                        dx[row + j] = p[row + j] * (gd[row + j] - dot);
                    }
                }
                accumulate(adj, *x, &[m, n], &dx)?;
            }
            Op::GatherCols { x, cols } => {
                let (m, n) = self.value(*x).dims2()?;
                let mut dx = vec![0.0; m * n];
                for (i, &c) in cols.iter().enumerate() {
                    dx[i * n + c] += gd[i];
                }
                accumulate(adj, *x, &[m, n], &dx)?;
            }
            Op::LnClamped { x, floor } => {
                let shape = node.value.shape().to_vec();
                let xd = self.value(*x).data();
                let dx: Vec<f64> = gd
                    .iter()
                    .zip(xd)
                    .map(|(&g, &v)| if v > *floor { g / v } else { 0.0 })
                    .collect();
                accumulate(adj, *x, &shape, &dx)?;
            }
            Op::SoftmaxCrossEntropy { logits, targets } => {
                let (m, n) = self.value(*logits).dims2()?;
                let xd = self.value(*logits).data();
                let scale = gd[0] / m as f64;
                let mut dx = vec![0.0; m * n];
                let mut p = vec![0.0; n];
                for (i, &t) in targets.iter().enumerate() {
                    softmax_into(&xd[i * n..(i + 1) * n], &mut p);
                    for j in 0..n {
                        let ind = if j == t { 1.0 } else { 0.0 };
                        dx[i * n + j] = scale * (p[j] - ind);
                    }
                }
                accumulate(adj, *logits, &[m, n], &dx)?;
            }
        }
        Ok(())
    }
}

fn accumulate(adj: &mut [Option<Tensor>], target: NodeId, shape: &[usize], delta: &[f64]) -> Result<()> {
    match &mut adj[target.0] {
        Some(t) => {
            for (d, s) in t.data_mut().iter_mut().zip(delta.iter()) {
                *d += s;
            }
            Ok(())
        }
        slot @ None => {
            let mut t = Tensor::zeros(shape);
            t.data_mut().copy_from_slice(delta);
            *slot = Some(t);
            Ok(())
        }
    }
}

/// out[m,n] = a[m,k] * b[k,n]
fn mat_mul_nn(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    let mut out = vec![0.0; m * n];
    for i in 0..m {
        for kk in 0..k {
            let aik = a[i * k + kk];
            if aik == 0.0 {
                continue;
            }
            let brow = kk * n;
            let orow = i * n;
            for j in 0..n {
                out[orow + j] += aik * b[brow + j];
            }
        }
    }
    out
}

/// out[m,k] = g[m,n] * b[k,n]^T
fn mat_mul_nt(g: &[f64], b: &[f64], m: usize, n: usize, k: usize) -> Vec<f64> {
    let mut out = vec![0.0; m * k];
    for i in 0..m {
        for kk in 0..k {
            let mut acc = 0.0;
            for j in 0..n {
                acc += g[i * n + j] * b[kk * n + j];
            }
            out[i * k + kk] = acc;
        }
    }
    out
}

/// out[k,n] = a[m,k]^T * g[m,n]
fn mat_mul_tn(a: &[f64], g: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    let mut out = vec![0.0; k * n];
    for i in 0..m {
        for kk in 0..k {
            let aik = a[i * k + kk];
            if aik == 0.0 {
                continue;
            }
            let grow = i * n;
            let orow = kk * n;
            for j in 0..n {
                out[orow + j] += aik * g[grow + j];
            }
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn scalar_of(t: &Tape, id: NodeId) -> f64 {
        t.value(id).item().unwrap()
    }

    #[test]
    fn matmul_identity() {
        let mut t = Tape::new();
        let a = t
            .leaf(Tensor::from_rows(&[vec![1.0, 2.0], vec![3.0, 4.0]]).unwrap());
        let eye = t.leaf(Tensor::from_rows(&[vec![1.0, 0.0], vec![0.0, 1.0]]).unwrap());
        let out = t.matmul(a, eye).unwrap();
        assert_eq!(t.value(out).data(), t.value(a).data());
    }

    #[test]
    fn matmul_1x1_grads() {
        let mut t = Tape::new();
        let a = t.leaf(Tensor::new(vec![1, 1], vec![2.0]).unwrap());
        let b = t.leaf(Tensor::new(vec![1, 1], vec![3.0]).unwrap());
        let c = t.matmul(a, b).unwrap();
        let root = t.sum(c).unwrap();
        assert_eq!(scalar_of(&t, root), 6.0);
        t.backward(root).unwrap();
        assert_eq!(t.grad(a).data(), &[3.0]);
        assert_eq!(t.grad(b).data(), &[2.0]);
    }

    #[test]
    fn matmul_shape_mismatch() {
        let mut t = Tape::new();
        let a = t.leaf(Tensor::zeros(&[2, 3]));
        let b = t.leaf(Tensor::zeros(&[4, 2]));
        assert!(matches!(t.matmul(a, b), Err(Error::Dim(_))));
    }

    #[test]
    fn relu_forward_and_kink() {
        let mut t = Tape::new();
        let x = t.leaf(Tensor::new(vec![3], vec![-1.0, 0.0, 2.0]).unwrap());
        let r = t.relu(x).unwrap();
        assert_eq!(t.value(r).data(), &[0.0, 0.0, 2.0]);
        let root = t.sum(r).unwrap();
        t.backward(root).unwrap();
        // Subgradient at exactly 0 is defined as 0.
        assert_eq!(t.grad(x).data(), &[0.0, 0.0, 1.0]);
    }

    #[test]
    fn mean_of_constants() {
        let mut t = Tape::new();
        let x = t.leaf(Tensor::new(vec![4], vec![2.5; 4]).unwrap());
        let m = t.mean(x).unwrap();
        assert_eq!(scalar_of(&t, m), 2.5);
        t.backward(m).unwrap();
        assert_eq!(t.grad(x).data(), &[0.25; 4]);
    }

    #[test]
    fn mul_with_aliased_operand() {
        // d(x*x)/dx = 2x must come out of accumulating both branches.
        let mut t = Tape::new();
        let x = t.leaf(Tensor::new(vec![1], vec![3.0]).unwrap());
        let sq = t.mul(x, x).unwrap();
        let root = t.sum(sq).unwrap();
        assert_eq!(scalar_of(&t, root), 9.0);
        t.backward(root).unwrap();
        assert_eq!(t.grad(x).data(), &[6.0]);
    }

    #[test]
    fn logsumexp_matches_direct_summation() {
        let mut t = Tape::new();
        let x = t.leaf(Tensor::from_rows(&[vec![1.0, 2.0, 3.0]]).unwrap());
        let l = t.logsumexp_rows(x).unwrap();
        let direct = (1.0f64.exp() + 2.0f64.exp() + 3.0f64.exp()).ln();
        assert!((t.value(l).data()[0] - direct).abs() < 1e-9);
    }

    #[test]
    fn logsumexp_stable_for_huge_inputs() {
        let mut t = Tape::new();
        let x = t.leaf(Tensor::from_rows(&[vec![1000.0, 1000.0]]).unwrap());
        let l = t.logsumexp_rows(x).unwrap();
        assert!((t.value(l).data()[0] - (1000.0 + 2.0f64.ln())).abs() < 1e-12);
    }

    #[test]
    fn logsumexp_zeros_is_ln_2() {
        let mut t = Tape::new();
        let x = t.leaf(Tensor::from_rows(&[vec![0.0, 0.0]]).unwrap());
        let l = t.logsumexp_rows(x).unwrap();
        assert!((t.value(l).data()[0] - 2.0f64.ln()).abs() < 1e-12);
    }

    #[test]
    fn logsumexp_shift_identity() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        for _ in 0..50 {
            let row: Vec<f64> = (0..6).map(|_| rng.random_range(-2.0..2.0)).collect();
            let c: f64 = rng.random_range(-3.0..3.0);
            let shifted: Vec<f64> = row.iter().map(|v| v + c).collect();
            let a = logsumexp_slice(&row) + c;
            let b = logsumexp_slice(&shifted);
            assert!((a - b).abs() <= 1e-12, "shift identity violated: {} vs {}", a, b);
        }
    }

    #[test]
    fn softmax_rows_sum_to_one() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let mut t = Tape::new();
        let rows: Vec<Vec<f64>> = (0..8)
            .map(|_| (0..5).map(|_| rng.random_range(-2.0..2.0)).collect())
            .collect();
        let x = t.leaf(Tensor::from_rows(&rows).unwrap());
        let p = t.softmax_rows(x).unwrap();
        for i in 0..8 {
            let s: f64 = t.value(p).data()[i * 5..(i + 1) * 5].iter().sum();
            assert!((s - 1.0).abs() <= 1e-12);
        }
    }

    #[test]
    fn cross_entropy_uniform_logits() {
        let mut t = Tape::new();
        let x = t.leaf(Tensor::from_rows(&[vec![0.0; 4]]).unwrap());
        let l = t.softmax_cross_entropy(x, &[2]).unwrap();
        assert!((scalar_of(&t, l) - 4.0f64.ln()).abs() < 1e-12);
    }

    #[test]
    fn cross_entropy_confident_limit() {
        // As the correct logit dominates, the loss goes to 0.
        let mut t = Tape::new();
        let x = t.leaf(Tensor::from_rows(&[vec![50.0, 0.0]]).unwrap());
        let l = t.softmax_cross_entropy(x, &[0]).unwrap();
        assert!(scalar_of(&t, l) >= 0.0);
        assert!(scalar_of(&t, l) < 1e-9);
    }

    #[test]
    fn cross_entropy_example_value() {
        // Direct evaluation: -ln(e^2 / (e^2 + 2)) = ln(1 + 2 e^-2).
        let mut t = Tape::new();
        let x = t.leaf(Tensor::from_rows(&[vec![2.0, 0.0, 0.0]]).unwrap());
        let l = t.softmax_cross_entropy(x, &[0]).unwrap();
        let direct = (1.0 + 2.0 * (-2.0f64).exp()).ln();
        assert!((scalar_of(&t, l) - direct).abs() < 1e-12);
    }

    #[test]
    fn cross_entropy_target_out_of_range() {
        let mut t = Tape::new();
        let x = t.leaf(Tensor::from_rows(&[vec![0.0, 0.0]]).unwrap());
        assert!(matches!(
            t.softmax_cross_entropy(x, &[2]),
            Err(Error::Index(_))
        ));
    }

    #[test]
    fn backward_root_is_one_and_disconnected_zero() {
        let mut t = Tape::new();
        let x = t.leaf(Tensor::scalar(7.0).unwrap());
        let unused = t.leaf(Tensor::scalar(1.0).unwrap());
        t.backward(x).unwrap();
        assert_eq!(t.grad(x).data(), &[1.0]);
        assert_eq!(t.grad(unused).data(), &[0.0]);
    }

    #[test]
    fn backward_requires_scalar_root() {
        let mut t = Tape::new();
        let x = t.leaf(Tensor::new(vec![2], vec![1.0, 2.0]).unwrap());
        assert!(matches!(t.backward(x), Err(Error::Dim(_))));
    }

    #[test]
    fn repeated_backward_accumulates_and_reset_restores() {
        let mut t = Tape::new();
        let x = t.leaf(Tensor::new(vec![2], vec![1.5, -0.5]).unwrap());
        let s = t.sum(x).unwrap();
        t.backward(s).unwrap();
        let first: Vec<u64> = t.grad(x).data().iter().map(|v| v.to_bits()).collect();
        t.backward(s).unwrap();
        assert_eq!(t.grad(x).data(), &[2.0, 2.0]);
        t.reset_grads();
        assert_eq!(t.grad(x).data(), &[0.0, 0.0]);
        t.backward(s).unwrap();
        let again: Vec<u64> = t.grad(x).data().iter().map(|v| v.to_bits()).collect();
        // Same graph, same sweep: bit-identical gradients.
        assert_eq!(first, again);
    }

    #[test]
    fn gather_cols_forward_backward() {
        let mut t = Tape::new();
        let x = t.leaf(Tensor::from_rows(&[vec![1.0, 2.0], vec![3.0, 4.0]]).unwrap());
        let g = t.gather_cols(x, &[1, 0]).unwrap();
        assert_eq!(t.value(g).data(), &[2.0, 3.0]);
        let root = t.sum(g).unwrap();
        t.backward(root).unwrap();
        assert_eq!(t.grad(x).data(), &[0.0, 1.0, 1.0, 0.0]);
        assert!(matches!(t.gather_cols(x, &[0, 5]), Err(Error::Index(_))));
    }

    #[test]
    fn ln_clamped_floor_zeroes_gradient() {
        let mut t = Tape::new();
        let x = t.leaf(Tensor::new(vec![2], vec![0.5, 1e-15]).unwrap());
        let l = t.ln_clamped(x, 1e-12).unwrap();
        assert!((t.value(l).data()[0] - 0.5f64.ln()).abs() < 1e-12);
        assert!((t.value(l).data()[1] - 1e-12f64.ln()).abs() < 1e-9);
        let root = t.sum(l).unwrap();
        t.backward(root).unwrap();
        assert_eq!(t.grad(x).data()[1], 0.0);
        assert!((t.grad(x).data()[0] - 2.0).abs() < 1e-12);
    }

    /// Central-difference check of one scalar-valued graph builder.
    fn fd_check(build: impl Fn(&mut Tape, NodeId) -> NodeId, x0: Tensor) {
        let h = 1e-5;
        let mut t = Tape::new();
        let x = t.leaf(x0.clone());
        let root = build(&mut t, x);
        t.backward(root).unwrap();
        let analytic = t.grad(x).data().to_vec();
        for i in 0..x0.len() {
            let eval = |delta: f64| {
                let mut shifted = x0.clone();
                shifted.data_mut()[i] += delta;
                let mut tp = Tape::new();
                let xs = tp.leaf(shifted);
                let r = build(&mut tp, xs);
                tp.value(r).item().unwrap()
            };
            let fd = (eval(h) - eval(-h)) / (2.0 * h);
            let denom = analytic[i].abs().max(fd.abs()).max(1.0);
            assert!(
                (analytic[i] - fd).abs() / denom < 1e-6,
                "entry {}: analytic {} vs fd {}",
                i,
                analytic[i],
                fd
            );
        }
    }

    #[test]
    fn fd_matmul_chain() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let w: Vec<Vec<f64>> = (0..4)
            .map(|_| (0..2).map(|_| rng.random_range(-2.0..2.0)).collect())
            .collect();
        let wt = Tensor::from_rows(&w).unwrap();
        let x0 = Tensor::new(
            vec![3, 4],
            (0..12).map(|_| rng.random_range(-2.0..2.0)).collect(),
        )
        .unwrap();
        fd_check(
            move |t, x| {
                let w = t.leaf(wt.clone());
                let y = t.matmul(x, w).unwrap();
                t.sum(y).unwrap()
            },
            x0,
        );
    }

    #[test]
    fn fd_mlp_composite() {
        // relu(x W + b) summed; exercises matmul, add_bias, relu together.
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let w: Vec<Vec<f64>> = (0..3)
            .map(|_| (0..3).map(|_| rng.random_range(-1.5..1.5)).collect())
            .collect();
        let wt = Tensor::from_rows(&w).unwrap();
        let bt = Tensor::new(vec![3], vec![0.3, -0.2, 0.6]).unwrap();
        let x0 = Tensor::new(
            vec![2, 3],
            // Kept away from relu kinks: all pre-activations end up with
            // magnitude well above the FD step.
            vec![0.9, -1.2, 0.7, 1.4, 0.5, -0.8],
        )
        .unwrap();
        fd_check(
            move |t, x| {
                let w = t.leaf(wt.clone());
                let b = t.leaf(bt.clone());
                let z = t.matmul(x, w).unwrap();
                let z = t.add_bias(z, b).unwrap();
                let a = t.relu(z).unwrap();
                t.sum(a).unwrap()
            },
            x0,
        );
    }

    #[test]
    fn fd_softmax_and_lse() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let x0 = Tensor::new(
            vec![2, 4],
            (0..8).map(|_| rng.random_range(-2.0..2.0)).collect(),
        )
        .unwrap();
        let weights = Tensor::new(vec![2, 4], (0..8).map(|i| 0.3 + 0.1 * i as f64).collect()).unwrap();
        let wc = weights.clone();
        fd_check(
            move |t, x| {
                let p = t.softmax_rows(x).unwrap();
                let w = t.leaf(wc.clone());
                let wp = t.mul(p, w).unwrap();
                t.sum(wp).unwrap()
            },
            x0.clone(),
        );
        fd_check(
            move |t, x| {
                let l = t.logsumexp_rows(x).unwrap();
                t.sum(l).unwrap()
            },
            x0,
        );
    }
}
