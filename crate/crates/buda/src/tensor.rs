//! Dense f64 tensors and reverse-mode automatic differentiation.
//!
//! A [`Tape`] records every primitive applied to node ids in construction
//! order (a Wengert list), so the list is already topologically sorted and
//! [`Tape::backward`] is a single reverse sweep. Shapes are checked when an
//! op is built; silent broadcasting is not allowed (the only broadcasts are
//! the explicit row-vector and scalar ops). Every completed forward value is
//! scanned for NaN/Inf.
//!
//! Softmax is computed with max subtraction; a fused log-softmax is provided
//! for losses. The maximum mean discrepancy over a Gaussian kernel family is
//! a fused primitive whose gradient flows only into the generated population.

use crate::{BudaError, Result};
use std::cell::Cell;

/// Probabilities are clamped to at least this before a log.
pub const LOG_CLAMP: f64 = 1e-12;

/// Dense row-major f64 array.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    pub shape: Vec<usize>,
    pub values: Vec<f64>,
    pub requires_grad: bool,
    pub grad: Option<Vec<f64>>,
}

impl Tensor {
    pub fn from_vec(shape: Vec<usize>, values: Vec<f64>) -> Result<Self> {
        let numel: usize = shape.iter().product();
        if numel != values.len() {
            return Err(BudaError::Shape(format!(
                "shape {:?} wants {} values, got {}",
                shape,
                numel,
                values.len()
            )));
        }
        Ok(Tensor { shape, values, requires_grad: false, grad: None })
    }

    pub fn zeros(shape: Vec<usize>) -> Self {
        let numel = shape.iter().product();
        Tensor { shape, values: vec![0.0; numel], requires_grad: false, grad: None }
    }

    pub fn scalar(v: f64) -> Self {
        Tensor { shape: vec![1], values: vec![v], requires_grad: false, grad: None }
    }

    pub fn with_grad(mut self) -> Self {
        self.requires_grad = true;
        self
    }

    pub fn numel(&self) -> usize {
        self.values.len()
    }

    /// Rows/cols of a 2-D tensor.
    pub fn dims2(&self) -> Result<(usize, usize)> {
        match self.shape.as_slice() {
            [r, c] => Ok((*r, *c)),
            s => Err(BudaError::Shape(format!("expected 2-D tensor, got {s:?}"))),
        }
    }
}

/// Index of a node on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct NodeId(usize);

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    Add(NodeId, NodeId),
    Sub(NodeId, NodeId),
    Mul(NodeId, NodeId),
    /// (n x d) + row vector (d), broadcast over rows.
    AddRowVec(NodeId, NodeId),
    /// x + s with s a single-element node, broadcast everywhere.
    AddScalarBc(NodeId, NodeId),
    Scale(NodeId, f64),
    MatMul(NodeId, NodeId),
    LeakyRelu(NodeId, f64),
    Sigmoid(NodeId),
    SoftmaxRows(NodeId),
    LogSoftmaxRows(NodeId),
    Exp(NodeId),
    /// ln(max(x, LOG_CLAMP)); clamped entries get zero gradient.
    LnClamped(NodeId),
    Sum(NodeId),
    Mean(NodeId),
    /// Gaussian-kernel MMD between a fixed real population and a generated
    /// one; V-statistic with self pairs, summed over bandwidths. The real
    /// side is a constant, so the gradient flows only into `gen`.
    MmdGaussian { real: Tensor, gen: NodeId, sigmas: Vec<f64> },
    /// Mean binary cross-entropy of probabilities against one fixed label.
    BceMean { probs: NodeId, label: f64 },
}

struct Node {
    shape: Vec<usize>,
    values: Vec<f64>,
    requires_grad: bool,
    grad: Option<Vec<f64>>,
    op: Op,
}

/// Records primitives and runs the reverse sweep.
pub struct Tape {
    nodes: Vec<Node>,
    clamp_events: Cell<u64>,
}

impl Default for Tape {
    fn default() -> Self {
        Self::new()
    }
}

impl Tape {
    pub fn new() -> Self {
        Tape { nodes: Vec::new(), clamp_events: Cell::new(0) }
    }

    /// Number of times a probability had to be clamped before a log.
    pub fn clamp_warnings(&self) -> u64 {
        self.clamp_events.get()
    }

    pub fn values(&self, id: NodeId) -> &[f64] {
        &self.nodes[id.0].values
    }

    pub fn shape(&self, id: NodeId) -> &[usize] {
        &self.nodes[id.0].shape
    }

    /// Copies a node's value out as a plain tensor.
    pub fn tensor(&self, id: NodeId) -> Tensor {
        let n = &self.nodes[id.0];
        Tensor { shape: n.shape.clone(), values: n.values.clone(), requires_grad: false, grad: None }
    }

    /// Gradient of the last `backward` output w.r.t. this node, if the node
    /// required one.
    pub fn grad(&self, id: NodeId) -> Option<&[f64]> {
        self.nodes[id.0].grad.as_deref()
    }

    pub fn leaf(&mut self, t: &Tensor) -> NodeId {
        self.push(t.shape.clone(), t.values.clone(), t.requires_grad, Op::Leaf)
            .expect("leaf values are caller-provided and already finite-checked")
    }

    /// Leaf that never receives a gradient.
    pub fn constant(&mut self, t: Tensor) -> NodeId {
        self.push(t.shape, t.values, false, Op::Leaf).expect("constant leaf")
    }

    fn push(&mut self, shape: Vec<usize>, values: Vec<f64>, requires_grad: bool, op: Op) -> Result<NodeId> {
        if let Some(bad) = values.iter().find(|v| !v.is_finite()) {
            return Err(BudaError::Numeric(format!("non-finite value {bad} produced by {op:?}")));
        }
        self.nodes.push(Node { shape, values, requires_grad, grad: None, op });
        Ok(NodeId(self.nodes.len() - 1))
    }

    fn rg(&self, id: NodeId) -> bool {
        self.nodes[id.0].requires_grad
    }

    fn same_shape(&self, a: NodeId, b: NodeId, what: &str) -> Result<()> {
        if self.shape(a) != self.shape(b) {
            return Err(BudaError::Shape(format!(
                "{what}: shapes {:?} vs {:?}",
                self.shape(a),
                self.shape(b)
            )));
        }
        Ok(())
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.same_shape(a, b, "add")?;
        let v: Vec<f64> =
            self.values(a).iter().zip(self.values(b)).map(|(x, y)| x + y).collect();
        self.push(self.shape(a).to_vec(), v, self.rg(a) || self.rg(b), Op::Add(a, b))
    }

    pub fn sub(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.same_shape(a, b, "sub")?;
        let v: Vec<f64> =
            self.values(a).iter().zip(self.values(b)).map(|(x, y)| x - y).collect();
        self.push(self.shape(a).to_vec(), v, self.rg(a) || self.rg(b), Op::Sub(a, b))
    }

    pub fn mul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.same_shape(a, b, "mul")?;
        let v: Vec<f64> =
            self.values(a).iter().zip(self.values(b)).map(|(x, y)| x * y).collect();
        self.push(self.shape(a).to_vec(), v, self.rg(a) || self.rg(b), Op::Mul(a, b))
    }

    /// (n x d) plus a length-d row vector, broadcast over rows.
    pub fn add_row_vec(&mut self, m: NodeId, v: NodeId) -> Result<NodeId> {
        let (rows, cols) = self.dims2_of(m)?;
        if self.shape(v) != [cols] {
            return Err(BudaError::Shape(format!(
                "add_row_vec: matrix {:?} with vector {:?}",
                self.shape(m),
                self.shape(v)
            )));
        }
        let mut out = self.values(m).to_vec();
        let vv = self.values(v);
        for r in 0..rows {
            for c in 0..cols {
                out[r * cols + c] += vv[c];
            }
        }
        self.push(vec![rows, cols], out, self.rg(m) || self.rg(v), Op::AddRowVec(m, v))
    }

    /// x plus a one-element node, broadcast to every entry.
    pub fn add_scalar_bc(&mut self, x: NodeId, s: NodeId) -> Result<NodeId> {
        if self.values(s).len() != 1 {
            return Err(BudaError::Shape(format!(
                "add_scalar_bc: scalar operand has shape {:?}",
                self.shape(s)
            )));
        }
        let sv = self.values(s)[0];
        let out: Vec<f64> = self.values(x).iter().map(|v| v + sv).collect();
        self.push(self.shape(x).to_vec(), out, self.rg(x) || self.rg(s), Op::AddScalarBc(x, s))
    }

    pub fn scale(&mut self, x: NodeId, c: f64) -> Result<NodeId> {
        let out: Vec<f64> = self.values(x).iter().map(|v| v * c).collect();
        self.push(self.shape(x).to_vec(), out, self.rg(x), Op::Scale(x, c))
    }

    fn dims2_of(&self, id: NodeId) -> Result<(usize, usize)> {
        match self.shape(id) {
            [r, c] => Ok((*r, *c)),
            s => Err(BudaError::Shape(format!("expected 2-D node, got {s:?}"))),
        }
    }

    pub fn matmul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let (n, k) = self.dims2_of(a)?;
        let (k2, m) = self.dims2_of(b)?;
        if k != k2 {
            return Err(BudaError::Shape(format!(
                "matmul: inner dims {k} vs {k2} (shapes {:?} x {:?})",
                self.shape(a),
                self.shape(b)
            )));
        }
        let out = matmul_plain(self.values(a), self.values(b), n, k, m);
        self.push(vec![n, m], out, self.rg(a) || self.rg(b), Op::MatMul(a, b))
    }

    pub fn leaky_relu(&mut self, x: NodeId, slope: f64) -> Result<NodeId> {
        let out: Vec<f64> =
            self.values(x).iter().map(|&v| if v > 0.0 { v } else { slope * v }).collect();
        self.push(self.shape(x).to_vec(), out, self.rg(x), Op::LeakyRelu(x, slope))
    }

    pub fn sigmoid(&mut self, x: NodeId) -> Result<NodeId> {
        let out: Vec<f64> = self
            .values(x)
            .iter()
            .map(|&v| {
                if v >= 0.0 {
                    1.0 / (1.0 + (-v).exp())
                } else {
                    let e = v.exp();
                    e / (1.0 + e)
                }
            })
            .collect();
        self.push(self.shape(x).to_vec(), out, self.rg(x), Op::Sigmoid(x))
    }

    pub fn softmax_rows(&mut self, x: NodeId) -> Result<NodeId> {
        let (rows, cols) = self.dims2_of(x)?;
        let mut out = self.values(x).to_vec();
        softmax_rows_in_place(&mut out, rows, cols);
        self.push(vec![rows, cols], out, self.rg(x), Op::SoftmaxRows(x))
    }

    pub fn log_softmax_rows(&mut self, x: NodeId) -> Result<NodeId> {
        let (rows, cols) = self.dims2_of(x)?;
        let xv = self.values(x);
        let mut out = vec![0.0; rows * cols];
        for r in 0..rows {
            let row = &xv[r * cols..(r + 1) * cols];
            let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let lse = row.iter().map(|v| (v - m).exp()).sum::<f64>().ln() + m;
            for c in 0..cols {
                out[r * cols + c] = row[c] - lse;
            }
        }
        self.push(vec![rows, cols], out, self.rg(x), Op::LogSoftmaxRows(x))
    }

    pub fn exp(&mut self, x: NodeId) -> Result<NodeId> {
        let out: Vec<f64> = self.values(x).iter().map(|v| v.exp()).collect();
        self.push(self.shape(x).to_vec(), out, self.rg(x), Op::Exp(x))
    }

    /// ln(max(x, LOG_CLAMP)), counting clamp events.
    pub fn ln_clamped(&mut self, x: NodeId) -> Result<NodeId> {
        let mut clamped = 0;
        let out: Vec<f64> = self
            .values(x)
            .iter()
            .map(|&v| {
                if v < LOG_CLAMP {
                    clamped += 1;
                    LOG_CLAMP.ln()
                } else {
                    v.ln()
                }
            })
            .collect();
        self.clamp_events.set(self.clamp_events.get() + clamped);
        self.push(self.shape(x).to_vec(), out, self.rg(x), Op::LnClamped(x))
    }

    pub fn sum(&mut self, x: NodeId) -> Result<NodeId> {
        let s = self.values(x).iter().sum();
        self.push(vec![1], vec![s], self.rg(x), Op::Sum(x))
    }

    pub fn mean(&mut self, x: NodeId) -> Result<NodeId> {
        let n = self.values(x).len();
        if n == 0 {
            return Err(BudaError::Contract("mean of empty tensor".into()));
        }
        let s = self.values(x).iter().sum::<f64>() / n as f64;
        self.push(vec![1], vec![s], self.rg(x), Op::Mean(x))
    }

    /// Gaussian-kernel MMD (V-statistic, self pairs included, unnormalized,
    /// summed over bandwidths) between the fixed `real` population and the
    /// generated node `gen`; both are (count x dim).
    pub fn mmd_gaussian(&mut self, real: &Tensor, gen: NodeId, sigmas: &[f64]) -> Result<NodeId> {
        let (nr, dr) = real.dims2()?;
        let (ng, dg) = self.dims2_of(gen)?;
        if nr == 0 || ng == 0 {
            return Err(BudaError::Contract("mmd: empty population".into()));
        }
        if dr != dg {
            return Err(BudaError::Shape(format!("mmd: feature dims {dr} vs {dg}")));
        }
        if sigmas.is_empty() || sigmas.iter().any(|s| *s <= 0.0) {
            return Err(BudaError::Contract("mmd: bandwidths must be positive and non-empty".into()));
        }
        let value = mmd_value(&real.values, nr, self.values(gen), ng, dr, sigmas);
        self.push(
            vec![1],
            vec![value],
            self.rg(gen),
            Op::MmdGaussian { real: real.clone(), gen, sigmas: sigmas.to_vec() },
        )
    }

    /// Mean of -label ln p - (1-label) ln(1-p) over all entries, with p
    /// clamped into [LOG_CLAMP, 1-LOG_CLAMP].
    pub fn bce_mean(&mut self, probs: NodeId, label: f64) -> Result<NodeId> {
        let pv = self.values(probs);
        if pv.is_empty() {
            return Err(BudaError::Contract("bce: empty batch".into()));
        }
        let mut clamped = 0;
        let mut total = 0.0;
        for &p in pv {
            let pc = if !(LOG_CLAMP..=1.0 - LOG_CLAMP).contains(&p) {
                clamped += 1;
                p.clamp(LOG_CLAMP, 1.0 - LOG_CLAMP)
            } else {
                p
            };
            total += -label * pc.ln() - (1.0 - label) * (1.0 - pc).ln();
        }
        self.clamp_events.set(self.clamp_events.get() + clamped);
        let mean = total / pv.len() as f64;
        self.push(vec![1], vec![mean], self.rg(probs), Op::BceMean { probs, label })
    }

    /// Reverse sweep from a scalar output. Populates gradients for every
    /// node that requires one; untouched leaves get a zero gradient.
    pub fn backward(&mut self, output: NodeId) -> Result<()> {
        if self.values(output).len() != 1 {
            return Err(BudaError::Contract(format!(
                "backward needs a scalar output, got shape {:?}",
                self.shape(output)
            )));
        }
        for node in &mut self.nodes {
            node.grad = if node.requires_grad {
                Some(vec![0.0; node.values.len()])
            } else {
                None
            };
        }
        if !self.nodes[output.0].requires_grad {
            // Nothing on the tape needs a gradient; leaves keep zero grads.
            return Ok(());
        }
        self.nodes[output.0].grad.as_mut().expect("output grad")[0] = 1.0;

        for idx in (0..=output.0).rev() {
            if !self.nodes[idx].requires_grad {
                continue;
            }
            let gout = match &self.nodes[idx].grad {
                Some(g) => g.clone(),
                None => continue,
            };
            let op = self.nodes[idx].op.clone();
            match op {
                Op::Leaf => {}
                Op::Add(a, b) => {
                    self.accum(a, |_| {}, &gout, |g, _i, go| *g += go);
                    self.accum(b, |_| {}, &gout, |g, _i, go| *g += go);
                }
                Op::Sub(a, b) => {
                    self.accum(a, |_| {}, &gout, |g, _i, go| *g += go);
                    self.accum(b, |_| {}, &gout, |g, _i, go| *g -= go);
                }
                Op::Mul(a, b) => {
                    let av = self.nodes[a.0].values.clone();
                    let bv = self.nodes[b.0].values.clone();
                    if self.rg(a) {
                        let g = self.nodes[a.0].grad.as_mut().unwrap();
                        for i in 0..g.len() {
                            g[i] += gout[i] * bv[i];
                        }
                    }
                    if self.rg(b) {
                        let g = self.nodes[b.0].grad.as_mut().unwrap();
                        for i in 0..g.len() {
                            g[i] += gout[i] * av[i];
                        }
                    }
                }
                Op::AddRowVec(m, v) => {
                    if self.rg(m) {
                        let g = self.nodes[m.0].grad.as_mut().unwrap();
                        for i in 0..g.len() {
                            g[i] += gout[i];
                        }
                    }
                    if self.rg(v) {
                        let cols = self.nodes[v.0].values.len();
                        let g = self.nodes[v.0].grad.as_mut().unwrap();
                        for (i, go) in gout.iter().enumerate() {
                            g[i % cols] += go;
                        }
                    }
                }
                Op::AddScalarBc(x, s) => {
                    if self.rg(x) {
                        let g = self.nodes[x.0].grad.as_mut().unwrap();
                        for i in 0..g.len() {
                            g[i] += gout[i];
                        }
                    }
                    if self.rg(s) {
                        let total: f64 = gout.iter().sum();
                        self.nodes[s.0].grad.as_mut().unwrap()[0] += total;
                    }
                }
                Op::Scale(x, c) => {
                    if self.rg(x) {
                        let g = self.nodes[x.0].grad.as_mut().unwrap();
                        for i in 0..g.len() {
                            g[i] += c * gout[i];
                        }
                    }
                }
                Op::MatMul(a, b) => {
                    let (n, k) = (self.nodes[a.0].shape[0], self.nodes[a.0].shape[1]);
                    let m = self.nodes[b.0].shape[1];
                    let av = self.nodes[a.0].values.clone();
                    let bv = self.nodes[b.0].values.clone();
                    if self.rg(a) {
                        // dA = G . B^T
                        let g = self.nodes[a.0].grad.as_mut().unwrap();
                        for i in 0..n {
                            for p in 0..k {
                                let mut acc = 0.0;
                                for j in 0..m {
                                    acc += gout[i * m + j] * bv[p * m + j];
                                }
                                g[i * k + p] += acc;
                            }
                        }
                    }
                    if self.rg(b) {
                        // dB = A^T . G
                        let g = self.nodes[b.0].grad.as_mut().unwrap();
                        for p in 0..k {
                            for j in 0..m {
                                let mut acc = 0.0;
                                for i in 0..n {
                                    acc += av[i * k + p] * gout[i * m + j];
                                }
                                g[p * m + j] += acc;
                            }
                        }
                    }
                }
                Op::LeakyRelu(x, slope) => {
                    if self.rg(x) {
                        let xv = self.nodes[x.0].values.clone();
                        let g = self.nodes[x.0].grad.as_mut().unwrap();
                        for i in 0..g.len() {
                            g[i] += gout[i] * if xv[i] > 0.0 { 1.0 } else { slope };
                        }
                    }
                }
                Op::Sigmoid(x) => {
                    if self.rg(x) {
                        let pv = self.nodes[idx].values.clone();
                        let g = self.nodes[x.0].grad.as_mut().unwrap();
                        for i in 0..g.len() {
                            g[i] += gout[i] * pv[i] * (1.0 - pv[i]);
                        }
                    }
                }
                Op::SoftmaxRows(x) => {
                    if self.rg(x) {
                        let p = self.nodes[idx].values.clone();
                        let cols = self.nodes[idx].shape[1];
                        let rows = self.nodes[idx].shape[0];
                        let g = self.nodes[x.0].grad.as_mut().unwrap();
                        for r in 0..rows {
                            let off = r * cols;
                            let dot: f64 =
                                (0..cols).map(|c| gout[off + c] * p[off + c]).sum();
                            for c in 0..cols {
                                g[off + c] += p[off + c] * (gout[off + c] - dot);
                            }
                        }
                    }
                }
                Op::LogSoftmaxRows(x) => {
                    if self.rg(x) {
                        let lp = self.nodes[idx].values.clone();
                        let cols = self.nodes[idx].shape[1];
                        let rows = self.nodes[idx].shape[0];
                        let g = self.nodes[x.0].grad.as_mut().unwrap();
                        for r in 0..rows {
                            let off = r * cols;
                            let gsum: f64 = (0..cols).map(|c| gout[off + c]).sum();
                            for c in 0..cols {
                                g[off + c] += gout[off + c] - lp[off + c].exp() * gsum;
                            }
                        }
                    }
                }
                Op::Exp(x) => {
                    if self.rg(x) {
                        let ev = self.nodes[idx].values.clone();
                        let g = self.nodes[x.0].grad.as_mut().unwrap();
                        for i in 0..g.len() {
                            g[i] += gout[i] * ev[i];
                        }
                    }
                }
                Op::LnClamped(x) => {
                    if self.rg(x) {
                        let xv = self.nodes[x.0].values.clone();
                        let g = self.nodes[x.0].grad.as_mut().unwrap();
                        for i in 0..g.len() {
                            if xv[i] >= LOG_CLAMP {
                                g[i] += gout[i] / xv[i];
                            }
                        }
                    }
                }
                Op::Sum(x) => {
                    if self.rg(x) {
                        let go = gout[0];
                        let g = self.nodes[x.0].grad.as_mut().unwrap();
                        for gi in g.iter_mut() {
                            *gi += go;
                        }
                    }
                }
                Op::Mean(x) => {
                    if self.rg(x) {
                        let n = self.nodes[x.0].values.len() as f64;
                        let go = gout[0] / n;
                        let g = self.nodes[x.0].grad.as_mut().unwrap();
                        for gi in g.iter_mut() {
                            *gi += go;
                        }
                    }
                }
                Op::MmdGaussian { real, gen, sigmas } => {
                    if self.rg(gen) {
                        let gv = self.nodes[gen.0].values.clone();
                        let (ng, d) = (self.nodes[gen.0].shape[0], self.nodes[gen.0].shape[1]);
                        let nr = real.shape[0];
                        let go = gout[0];
                        let g = self.nodes[gen.0].grad.as_mut().unwrap();
                        for &sigma in &sigmas {
                            let inv2s2 = 1.0 / (2.0 * sigma * sigma);
                            let invs2 = 1.0 / (sigma * sigma);
                            for i in 0..ng {
                                for l in 0..ng {
                                    let dist2 = sq_dist(&gv[i * d..], &gv[l * d..], d);
                                    let k = (-dist2 * inv2s2).exp();
                                    // d/dg_i of sum_{j,l} k(g_j, g_l): row i
                                    // appears on both sides of the pair.
                                    for c in 0..d {
                                        g[i * d + c] +=
                                            go * 2.0 * k * (gv[l * d + c] - gv[i * d + c]) * invs2;
                                    }
                                }
                                for f in 0..nr {
                                    let dist2 = sq_dist(&real.values[f * d..], &gv[i * d..], d);
                                    let k = (-dist2 * inv2s2).exp();
                                    for c in 0..d {
                                        g[i * d + c] -= go
                                            * 2.0
                                            * k
                                            * (real.values[f * d + c] - gv[i * d + c])
                                            * invs2;
                                    }
                                }
                            }
                        }
                    }
                }
                Op::BceMean { probs, label } => {
                    if self.rg(probs) {
                        let pv = self.nodes[probs.0].values.clone();
                        let n = pv.len() as f64;
                        let go = gout[0];
                        let g = self.nodes[probs.0].grad.as_mut().unwrap();
                        for i in 0..g.len() {
                            let p = pv[i];
                            if (LOG_CLAMP..=1.0 - LOG_CLAMP).contains(&p) {
                                g[i] += go * (-label / p + (1.0 - label) / (1.0 - p)) / n;
                            }
                        }
                    }
                }
            }
        }
        Ok(())
    }

    fn accum(
        &mut self,
        id: NodeId,
        _unused: impl Fn(&()),
        gout: &[f64],
        f: impl Fn(&mut f64, usize, f64),
    ) {
        if self.rg(id) {
            let g = self.nodes[id.0].grad.as_mut().unwrap();
            for (i, go) in gout.iter().enumerate() {
                f(&mut g[i], i, *go);
            }
        }
    }
}

/// (n x k) . (k x m) with a fixed accumulation order, shared by the taped op
/// and tape-free evaluation so both produce bit-identical results.
pub fn matmul_plain(av: &[f64], bv: &[f64], n: usize, k: usize, m: usize) -> Vec<f64> {
    let mut out = vec![0.0; n * m];
    for i in 0..n {
        for p in 0..k {
            let x = av[i * k + p];
            if x == 0.0 {
                continue;
            }
            let brow = &bv[p * m..(p + 1) * m];
            let orow = &mut out[i * m..(i + 1) * m];
            for (o, &bval) in orow.iter_mut().zip(brow) {
                *o += x * bval;
            }
        }
    }
    out
}

/// Row-wise softmax on a plain buffer (max-subtracted), shared with the tape op.
pub fn softmax_rows_plain(x: &mut [f64], rows: usize, cols: usize) {
    softmax_rows_in_place(x, rows, cols);
}

fn sq_dist(a: &[f64], b: &[f64], d: usize) -> f64 {
    let mut s = 0.0;
    for c in 0..d {
        let diff = a[c] - b[c];
        s += diff * diff;
    }
    s
}

/// Plain-value MMD used by the fused op (and reusable as a building block);
/// the independent test oracle is a separate double loop in test code.
fn mmd_value(real: &[f64], nr: usize, gen: &[f64], ng: usize, d: usize, sigmas: &[f64]) -> f64 {
    let mut total = 0.0;
    for &sigma in sigmas {
        let inv2s2 = 1.0 / (2.0 * sigma * sigma);
        let mut rr = 0.0;
        for i in 0..nr {
            for j in 0..nr {
                rr += (-sq_dist(&real[i * d..], &real[j * d..], d) * inv2s2).exp();
            }
        }
        let mut gg = 0.0;
        for i in 0..ng {
            for j in 0..ng {
                gg += (-sq_dist(&gen[i * d..], &gen[j * d..], d) * inv2s2).exp();
            }
        }
        let mut rg = 0.0;
        for i in 0..nr {
            for j in 0..ng {
                rg += (-sq_dist(&real[i * d..], &gen[j * d..], d) * inv2s2).exp();
            }
        }
        total += rr + gg - 2.0 * rg;
    }
    total
}

fn softmax_rows_in_place(x: &mut [f64], rows: usize, cols: usize) {
    for r in 0..rows {
        let row = &mut x[r * cols..(r + 1) * cols];
        let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let mut s = 0.0;
        for v in row.iter_mut() {
            *v = (*v - m).exp();
            s += *v;
        }
        for v in row.iter_mut() {
            *v /= s;
        }
    }
}

/// Central finite differences (f(x+h e_i) - f(x-h e_i)) / 2h per coordinate.
/// The oracle for every gradient check in the crate.
pub fn finite_diff_gradient(
    f: &mut dyn FnMut(&Tensor) -> Result<f64>,
    x: &Tensor,
    step: f64,
) -> Result<Tensor> {
    assert!(step > 0.0, "finite differences need a positive step");
    let mut grad = vec![0.0; x.numel()];
    let mut probe = x.clone();
    for i in 0..x.numel() {
        let orig = probe.values[i];
        probe.values[i] = orig + step;
        let fp = f(&probe)?;
        probe.values[i] = orig - step;
        let fm = f(&probe)?;
        probe.values[i] = orig;
        grad[i] = (fp - fm) / (2.0 * step);
    }
    Tensor::from_vec(x.shape.clone(), grad)
}

/// Worst per-component mismatch between two gradients, relative to the
/// larger magnitude with a unit floor (so near-zero components are compared
/// absolutely).
pub fn max_rel_err(a: &[f64], b: &[f64]) -> f64 {
    assert_eq!(a.len(), b.len());
    a.iter()
        .zip(b)
        .map(|(x, y)| (x - y).abs() / x.abs().max(y.abs()).max(1.0))
        .fold(0.0, f64::max)
}
