//! Reverse-mode automatic differentiation over path-differentiable
//! primitives.
//!
//! A [`Tape`] is a topologically ordered list of primitive applications on
//! vector values. The backward pass multiplies per-node local derivative
//! selections in reverse order, so at a kink the returned matrix is one
//! element of the generalized Jacobian built by composition; which element
//! is controlled by a [`SelectionPolicy`].

mod policy;

pub use policy::SelectionPolicy;

use nalgebra::DMatrix;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::{Matrix, Vector};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct NodeId(pub usize);

/// One primitive application. Operand ids always precede the node itself.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Node {
    /// Contiguous slice of the tape input vector.
    Input { start: usize, len: usize },
    Constant { values: Vec<f64> },
    Add { a: NodeId, b: NodeId },
    Sub { a: NodeId, b: NodeId },
    Mul { a: NodeId, b: NodeId },
    Div { a: NodeId, b: NodeId },
    Neg { a: NodeId },
    Scale { a: NodeId, factor: f64 },
    /// y = M v + bias (matrix stored row-major).
    Affine {
        a: NodeId,
        rows: usize,
        cols: usize,
        matrix: Vec<f64>,
        bias: Vec<f64>,
    },
    Dot { a: NodeId, b: NodeId },
    Sum { a: NodeId },
    /// Real exponent on positive inputs.
    Power { a: NodeId, exponent: f64 },
    Exp { a: NodeId },
    Log { a: NodeId },
    Tanh { a: NodeId },
    Relu { a: NodeId },
    Abs { a: NodeId },
    Sign { a: NodeId },
    Max { a: NodeId, b: NodeId },
    Min { a: NodeId, b: NodeId },
    /// Componentwise clamp to the box [lo, hi].
    Clamp { a: NodeId, lo: Vec<f64>, hi: Vec<f64> },
    /// sign(u) * max(|u| - t, 0) componentwise.
    SoftThreshold { a: NodeId, threshold: f64 },
    EuclideanNorm { a: NodeId },
    SquaredNorm { a: NodeId },
    Slice { a: NodeId, start: usize, len: usize },
    Concat { parts: Vec<NodeId> },
}

impl Node {
    fn operands(&self) -> Vec<NodeId> {
        use Node::*;
        match self {
            Input { .. } | Constant { .. } => vec![],
            Add { a, b } | Sub { a, b } | Mul { a, b } | Div { a, b } | Dot { a, b }
            | Max { a, b } | Min { a, b } => vec![*a, *b],
            Neg { a }
            | Scale { a, .. }
            | Affine { a, .. }
            | Sum { a }
            | Power { a, .. }
            | Exp { a }
            | Log { a }
            | Tanh { a }
            | Relu { a }
            | Abs { a }
            | Sign { a }
            | Clamp { a, .. }
            | SoftThreshold { a, .. }
            | EuclideanNorm { a }
            | SquaredNorm { a }
            | Slice { a, .. } => vec![*a],
            Concat { parts } => parts.clone(),
        }
    }
}

/// Per-node values retained by a forward pass.
#[derive(Debug, Clone)]
pub struct Trace {
    pub values: Vec<Vector>,
    pub output: Vector,
}

/// One element of a conservative Jacobian at a point.
#[derive(Debug, Clone)]
pub struct JacobianSelection {
    /// Dense m x n matrix.
    pub matrix: Matrix,
    pub point: Vector,
    pub policy_id: String,
}

/// Report of the almost-everywhere agreement test along a line.
#[derive(Debug, Clone)]
pub struct LineCheckReport {
    pub num_samples: usize,
    pub num_agreeing: usize,
}

impl LineCheckReport {
    pub fn agreement_fraction(&self) -> f64 {
        if self.num_samples == 0 {
            1.0
        } else {
            self.num_agreeing as f64 / self.num_samples as f64
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Tape {
    input_arity: usize,
    nodes: Vec<Node>,
    outputs: Vec<NodeId>,
}

impl Tape {
    pub fn new(input_arity: usize) -> Self {
        Tape { input_arity, nodes: Vec::new(), outputs: Vec::new() }
    }

    pub fn input_arity(&self) -> usize {
        self.input_arity
    }

    /// Total output arity (sum of output node lengths).
    pub fn output_arity(&self) -> usize {
        let lens = self.node_lens().expect("valid tape");
        self.outputs.iter().map(|o| lens[o.0]).sum()
    }

    pub fn nodes(&self) -> &[Node] {
        &self.nodes
    }

    fn push(&mut self, node: Node) -> Result<NodeId> {
        let id = NodeId(self.nodes.len());
        for op in node.operands() {
            if op.0 >= id.0 {
                return Err(Error::InvalidConfig(format!(
                    "node {} references operand {} which does not precede it",
                    id.0, op.0
                )));
            }
        }
        self.nodes.push(node);
        // recompute lengths to surface shape errors at construction
        if let Err(e) = self.node_lens() {
            self.nodes.pop();
            return Err(e);
        }
        Ok(id)
    }

    pub fn input(&mut self, start: usize, len: usize) -> Result<NodeId> {
        if start + len > self.input_arity || len == 0 {
            return Err(Error::ShapeMismatch(format!(
                "input slice {start}..{} exceeds arity {}",
                start + len,
                self.input_arity
            )));
        }
        self.push(Node::Input { start, len })
    }

    /// Input node covering the whole input vector.
    pub fn full_input(&mut self) -> Result<NodeId> {
        self.input(0, self.input_arity)
    }

    pub fn constant(&mut self, values: Vec<f64>) -> Result<NodeId> {
        if values.is_empty() {
            return Err(Error::ShapeMismatch("empty constant".into()));
        }
        self.push(Node::Constant { values })
    }

    pub fn scalar(&mut self, v: f64) -> Result<NodeId> {
        self.constant(vec![v])
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.push(Node::Add { a, b })
    }
    pub fn sub(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.push(Node::Sub { a, b })
    }
    pub fn mul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.push(Node::Mul { a, b })
    }
    pub fn div(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.push(Node::Div { a, b })
    }
    pub fn neg(&mut self, a: NodeId) -> Result<NodeId> {
        self.push(Node::Neg { a })
    }
    pub fn scale(&mut self, a: NodeId, factor: f64) -> Result<NodeId> {
        self.push(Node::Scale { a, factor })
    }

    pub fn affine(&mut self, a: NodeId, matrix: &Matrix, bias: &Vector) -> Result<NodeId> {
        if matrix.nrows() != bias.len() {
            return Err(Error::ShapeMismatch("affine: bias length != matrix rows".into()));
        }
        let mut rowmajor = Vec::with_capacity(matrix.nrows() * matrix.ncols());
        for i in 0..matrix.nrows() {
            for j in 0..matrix.ncols() {
                rowmajor.push(matrix[(i, j)]);
            }
        }
        self.push(Node::Affine {
            a,
            rows: matrix.nrows(),
            cols: matrix.ncols(),
            matrix: rowmajor,
            bias: bias.iter().cloned().collect(),
        })
    }

    pub fn dot(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.push(Node::Dot { a, b })
    }
    pub fn sum(&mut self, a: NodeId) -> Result<NodeId> {
        self.push(Node::Sum { a })
    }
    pub fn power(&mut self, a: NodeId, exponent: f64) -> Result<NodeId> {
        self.push(Node::Power { a, exponent })
    }
    pub fn exp(&mut self, a: NodeId) -> Result<NodeId> {
        self.push(Node::Exp { a })
    }
    pub fn log(&mut self, a: NodeId) -> Result<NodeId> {
        self.push(Node::Log { a })
    }
    pub fn tanh(&mut self, a: NodeId) -> Result<NodeId> {
        self.push(Node::Tanh { a })
    }
    pub fn relu(&mut self, a: NodeId) -> Result<NodeId> {
        self.push(Node::Relu { a })
    }
    pub fn abs(&mut self, a: NodeId) -> Result<NodeId> {
        self.push(Node::Abs { a })
    }
    pub fn sign(&mut self, a: NodeId) -> Result<NodeId> {
        self.push(Node::Sign { a })
    }
    pub fn max(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.push(Node::Max { a, b })
    }
    pub fn min(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.push(Node::Min { a, b })
    }

    pub fn clamp(&mut self, a: NodeId, lo: Vec<f64>, hi: Vec<f64>) -> Result<NodeId> {
        if lo.len() != hi.len() {
            return Err(Error::ShapeMismatch("clamp: lo/hi lengths differ".into()));
        }
        if lo.iter().zip(&hi).any(|(l, h)| l > h) {
            return Err(Error::InvalidConfig("clamp: lo > hi".into()));
        }
        self.push(Node::Clamp { a, lo, hi })
    }

    pub fn soft_threshold(&mut self, a: NodeId, threshold: f64) -> Result<NodeId> {
        if threshold < 0.0 {
            return Err(Error::InvalidConfig("soft_threshold: negative threshold".into()));
        }
        self.push(Node::SoftThreshold { a, threshold })
    }

    pub fn euclidean_norm(&mut self, a: NodeId) -> Result<NodeId> {
        self.push(Node::EuclideanNorm { a })
    }
    pub fn squared_norm(&mut self, a: NodeId) -> Result<NodeId> {
        self.push(Node::SquaredNorm { a })
    }
    pub fn slice(&mut self, a: NodeId, start: usize, len: usize) -> Result<NodeId> {
        self.push(Node::Slice { a, start, len })
    }
    pub fn concat(&mut self, parts: Vec<NodeId>) -> Result<NodeId> {
        if parts.is_empty() {
            return Err(Error::ShapeMismatch("empty concat".into()));
        }
        self.push(Node::Concat { parts })
    }

    pub fn set_outputs(&mut self, outputs: &[NodeId]) -> Result<()> {
        if outputs.is_empty() {
            return Err(Error::InvalidConfig("tape needs at least one output".into()));
        }
        for o in outputs {
            if o.0 >= self.nodes.len() {
                return Err(Error::InvalidConfig(format!("output node {} out of range", o.0)));
            }
        }
        self.outputs = outputs.to_vec();
        Ok(())
    }

    /// Lengths of every node value; errors on shape inconsistency.
    fn node_lens(&self) -> Result<Vec<usize>> {
        let mut lens: Vec<usize> = Vec::with_capacity(self.nodes.len());
        for (i, node) in self.nodes.iter().enumerate() {
            use Node::*;
            let same = |a: NodeId, b: NodeId, lens: &[usize]| -> Result<usize> {
                if lens[a.0] != lens[b.0] {
                    Err(Error::ShapeMismatch(format!(
                        "node {i}: operand lengths {} and {} differ",
                        lens[a.0], lens[b.0]
                    )))
                } else {
                    Ok(lens[a.0])
                }
            };
            let len = match node {
                Input { len, .. } => *len,
                Constant { values } => values.len(),
                Add { a, b } | Sub { a, b } | Mul { a, b } | Div { a, b } | Max { a, b }
                | Min { a, b } => same(*a, *b, &lens)?,
                Neg { a } | Scale { a, .. } | Power { a, .. } | Exp { a } | Log { a }
                | Tanh { a } | Relu { a } | Abs { a } | Sign { a }
                | SoftThreshold { a, .. } => lens[a.0],
                Affine { a, rows, cols, matrix, bias } => {
                    if lens[a.0] != *cols || matrix.len() != rows * cols || bias.len() != *rows {
                        return Err(Error::ShapeMismatch(format!(
                            "node {i}: affine shape mismatch"
                        )));
                    }
                    *rows
                }
                Dot { a, b } => {
                    same(*a, *b, &lens)?;
                    1
                }
                Sum { a } => {
                    let _ = lens[a.0];
                    1
                }
                Clamp { a, lo, .. } => {
                    if lens[a.0] != lo.len() {
                        return Err(Error::ShapeMismatch(format!(
                            "node {i}: clamp bounds length {} != operand length {}",
                            lo.len(),
                            lens[a.0]
                        )));
                    }
                    lens[a.0]
                }
                EuclideanNorm { .. } | SquaredNorm { .. } => 1,
                Slice { a, start, len } => {
                    if start + len > lens[a.0] || *len == 0 {
                        return Err(Error::ShapeMismatch(format!(
                            "node {i}: slice {start}..{} exceeds operand length {}",
                            start + len,
                            lens[a.0]
                        )));
                    }
                    *len
                }
                Concat { parts } => parts.iter().map(|p| lens[p.0]).sum(),
            };
            lens.push(len);
        }
        Ok(lens)
    }

    /// Structural validation, used after deserialization.
    pub fn validate(&self) -> Result<()> {
        for (i, node) in self.nodes.iter().enumerate() {
            for op in node.operands() {
                if op.0 >= i {
                    return Err(Error::InvalidConfig(format!(
                        "node {i} references operand {} which does not precede it",
                        op.0
                    )));
                }
            }
            if let Node::Input { start, len } = node {
                if start + len > self.input_arity || *len == 0 {
                    return Err(Error::ShapeMismatch(format!(
                        "node {i}: input slice out of range"
                    )));
                }
            }
        }
        let lens = self.node_lens()?;
        if self.outputs.is_empty() {
            return Err(Error::InvalidConfig("tape has no outputs".into()));
        }
        for o in &self.outputs {
            if o.0 >= self.nodes.len() || lens[o.0] == 0 {
                return Err(Error::InvalidConfig(format!("bad output node {}", o.0)));
            }
        }
        Ok(())
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub fn from_json(s: &str) -> Result<Tape> {
        let tape: Tape = serde_json::from_str(s)?;
        tape.validate()?;
        Ok(tape)
    }

    /// Forward pass, retaining per-node values for the backward pass.
    pub fn forward(&self, x: &Vector) -> Result<Trace> {
        if x.len() != self.input_arity {
            return Err(Error::ShapeMismatch(format!(
                "input length {} != tape arity {}",
                x.len(),
                self.input_arity
            )));
        }
        crate::linalg::ensure_finite_vec(x, "tape input")?;
        let mut values: Vec<Vector> = Vec::with_capacity(self.nodes.len());
        for (i, node) in self.nodes.iter().enumerate() {
            use Node::*;
            let v = match node {
                Input { start, len } => x.rows(*start, *len).into_owned(),
                Constant { values } => Vector::from_vec(values.clone()),
                Add { a, b } => &values[a.0] + &values[b.0],
                Sub { a, b } => &values[a.0] - &values[b.0],
                Mul { a, b } => values[a.0].component_mul(&values[b.0]),
                Div { a, b } => {
                    if values[b.0].iter().any(|v| *v == 0.0) {
                        return Err(Error::DomainError(format!("node {i}: division by zero")));
                    }
                    values[a.0].component_div(&values[b.0])
                }
                Neg { a } => -&values[a.0],
                Scale { a, factor } => &values[a.0] * *factor,
                Affine { a, rows, cols, matrix, bias } => {
                    let m = DMatrix::from_row_slice(*rows, *cols, matrix);
                    m * &values[a.0] + Vector::from_vec(bias.clone())
                }
                Dot { a, b } => Vector::from_vec(vec![values[a.0].dot(&values[b.0])]),
                Sum { a } => Vector::from_vec(vec![values[a.0].sum()]),
                Power { a, exponent } => {
                    if values[a.0].iter().any(|v| *v <= 0.0) {
                        return Err(Error::DomainError(format!(
                            "node {i}: power of nonpositive base"
                        )));
                    }
                    values[a.0].map(|v| v.powf(*exponent))
                }
                Exp { a } => values[a.0].map(f64::exp),
                Log { a } => {
                    if values[a.0].iter().any(|v| *v <= 0.0) {
                        return Err(Error::DomainError(format!(
                            "node {i}: log of nonpositive value"
                        )));
                    }
                    values[a.0].map(f64::ln)
                }
                Tanh { a } => values[a.0].map(f64::tanh),
                Relu { a } => values[a.0].map(|v| v.max(0.0)),
                Abs { a } => values[a.0].map(f64::abs),
                Sign { a } => values[a.0].map(|v| {
                    if v > 0.0 {
                        1.0
                    } else if v < 0.0 {
                        -1.0
                    } else {
                        0.0
                    }
                }),
                Max { a, b } => values[a.0].zip_map(&values[b.0], f64::max),
                Min { a, b } => values[a.0].zip_map(&values[b.0], f64::min),
                Clamp { a, lo, hi } => Vector::from_fn(lo.len(), |k, _| {
                    values[a.0][k].max(lo[k]).min(hi[k])
                }),
                SoftThreshold { a, threshold } => values[a.0].map(|u| {
                    u.signum() * (u.abs() - threshold).max(0.0)
                }),
                EuclideanNorm { a } => Vector::from_vec(vec![values[a.0].norm()]),
                SquaredNorm { a } => Vector::from_vec(vec![values[a.0].norm_squared()]),
                Slice { a, start, len } => values[a.0].rows(*start, *len).into_owned(),
                Concat { parts } => {
                    let total: usize = parts.iter().map(|p| values[p.0].len()).sum();
                    let mut out = Vector::zeros(total);
                    let mut off = 0;
                    for p in parts {
                        out.rows_mut(off, values[p.0].len()).copy_from(&values[p.0]);
                        off += values[p.0].len();
                    }
                    out
                }
            };
            values.push(v);
        }
        let total: usize = self.outputs.iter().map(|o| values[o.0].len()).sum();
        let mut output = Vector::zeros(total);
        let mut off = 0;
        for o in &self.outputs {
            output.rows_mut(off, values[o.0].len()).copy_from(&values[o.0]);
            off += values[o.0].len();
        }
        Ok(Trace { values, output })
    }

    /// Forward evaluation only.
    pub fn eval(&self, x: &Vector) -> Result<Vector> {
        Ok(self.forward(x)?.output)
    }

    /// One element of the conservative Jacobian at `x`, built by multiplying
    /// per-node selection derivatives in reverse topological order.
    pub fn jacobian_selection(
        &self,
        x: &Vector,
        policy: &SelectionPolicy,
    ) -> Result<JacobianSelection> {
        let trace = self.forward(x)?;
        let matrix = self.backward(&trace, policy)?;
        Ok(JacobianSelection { matrix, point: x.clone(), policy_id: policy.id.clone() })
    }

    fn backward(&self, trace: &Trace, policy: &SelectionPolicy) -> Result<Matrix> {
        let m = trace.output.len();
        let n = self.input_arity;
        let values = &trace.values;
        let mut rng: Option<ChaCha8Rng> = policy.randomize_seed.map(ChaCha8Rng::seed_from_u64);

        // adjoint[i] holds d(output)/d(value_i), an m x len_i matrix
        let mut adjoint: Vec<Matrix> =
            values.iter().map(|v| Matrix::zeros(m, v.len())).collect();
        let mut off = 0;
        for o in &self.outputs {
            let len = values[o.0].len();
            for r in 0..len {
                adjoint[o.0][(off + r, r)] += 1.0;
            }
            off += len;
        }

        let mut jac = Matrix::zeros(m, n);
        for (i, node) in self.nodes.iter().enumerate().rev() {
            let abar = adjoint[i].clone();
            if abar.iter().all(|v| *v == 0.0) {
                continue;
            }
            use Node::*;
            // scale column k of abar by d[k] and add into the operand adjoint
            let add_scaled = |target: NodeId,
                                  adjoint: &mut Vec<Matrix>,
                                  d: &Vector| {
                for k in 0..d.len() {
                    if d[k] != 0.0 {
                        let col = abar.column(k) * d[k];
                        adjoint[target.0].column_mut(k).iter_mut()
                            .zip(col.iter())
                            .for_each(|(t, s)| *t += s);
                    }
                }
            };
            match node {
                Input { start, len } => {
                    for k in 0..*len {
                        let col = abar.column(k).into_owned();
                        jac.column_mut(start + k).iter_mut()
                            .zip(col.iter())
                            .for_each(|(t, s)| *t += s);
                    }
                }
                Constant { .. } => {}
                Add { a, b } => {
                    let ones = Vector::from_element(values[a.0].len(), 1.0);
                    add_scaled(*a, &mut adjoint, &ones);
                    add_scaled(*b, &mut adjoint, &ones);
                }
                Sub { a, b } => {
                    let ones = Vector::from_element(values[a.0].len(), 1.0);
                    let negs = Vector::from_element(values[b.0].len(), -1.0);
                    add_scaled(*a, &mut adjoint, &ones);
                    add_scaled(*b, &mut adjoint, &negs);
                }
                Mul { a, b } => {
                    let va = values[a.0].clone();
                    let vb = values[b.0].clone();
                    add_scaled(*a, &mut adjoint, &vb);
                    add_scaled(*b, &mut adjoint, &va);
                }
                Div { a, b } => {
                    let va = values[a.0].clone();
                    let vb = values[b.0].clone();
                    let da = vb.map(|v| 1.0 / v);
                    let db = va.zip_map(&vb, |x, y| -x / (y * y));
                    add_scaled(*a, &mut adjoint, &da);
                    add_scaled(*b, &mut adjoint, &db);
                }
                Neg { a } => {
                    let d = Vector::from_element(values[a.0].len(), -1.0);
                    add_scaled(*a, &mut adjoint, &d);
                }
                Scale { a, factor } => {
                    let d = Vector::from_element(values[a.0].len(), *factor);
                    add_scaled(*a, &mut adjoint, &d);
                }
                Affine { a, rows, cols, matrix, .. } => {
                    let mat = DMatrix::from_row_slice(*rows, *cols, matrix);
                    let contrib = &abar * mat;
                    adjoint[a.0] += contrib;
                }
                Dot { a, b } => {
                    let va = values[a.0].clone();
                    let vb = values[b.0].clone();
                    adjoint[a.0] += abar.column(0) * vb.transpose();
                    adjoint[b.0] += abar.column(0) * va.transpose();
                }
                Sum { a } => {
                    let len = values[a.0].len();
                    adjoint[a.0] +=
                        abar.column(0) * Matrix::from_element(1, len, 1.0);
                }
                Power { a, exponent } => {
                    let d = values[a.0].map(|v| exponent * v.powf(exponent - 1.0));
                    add_scaled(*a, &mut adjoint, &d);
                }
                Exp { a } => {
                    let d = values[i].clone();
                    add_scaled(*a, &mut adjoint, &d);
                }
                Log { a } => {
                    let d = values[a.0].map(|v| 1.0 / v);
                    add_scaled(*a, &mut adjoint, &d);
                }
                Tanh { a } => {
                    let d = values[i].map(|t| 1.0 - t * t);
                    add_scaled(*a, &mut adjoint, &d);
                }
                Relu { a } => {
                    let d = values[a.0].map(|v| {
                        if v > 0.0 {
                            1.0
                        } else if v < 0.0 {
                            0.0
                        } else {
                            policy.pick(policy.relu_at_zero, 0.0, 1.0, &mut rng)
                        }
                    });
                    add_scaled(*a, &mut adjoint, &d);
                }
                Abs { a } => {
                    let d = values[a.0].map(|v| {
                        if v > 0.0 {
                            1.0
                        } else if v < 0.0 {
                            -1.0
                        } else {
                            policy.pick(policy.abs_at_zero, -1.0, 1.0, &mut rng)
                        }
                    });
                    add_scaled(*a, &mut adjoint, &d);
                }
                Sign { a } => {
                    let d = values[a.0].map(|v| {
                        if v != 0.0 {
                            0.0
                        } else {
                            policy.pick(policy.sign_at_zero, -1.0, 1.0, &mut rng)
                        }
                    });
                    add_scaled(*a, &mut adjoint, &d);
                }
                Max { a, b } => {
                    let da = values[a.0].zip_map(&values[b.0], |x, y| {
                        if x > y {
                            1.0
                        } else if x < y {
                            0.0
                        } else {
                            policy.pick(policy.max_tie_weight, 0.0, 1.0, &mut rng)
                        }
                    });
                    let db = da.map(|w| 1.0 - w);
                    add_scaled(*a, &mut adjoint, &da);
                    add_scaled(*b, &mut adjoint, &db);
                }
                Min { a, b } => {
                    let da = values[a.0].zip_map(&values[b.0], |x, y| {
                        if x < y {
                            1.0
                        } else if x > y {
                            0.0
                        } else {
                            policy.pick(policy.min_tie_weight, 0.0, 1.0, &mut rng)
                        }
                    });
                    let db = da.map(|w| 1.0 - w);
                    add_scaled(*a, &mut adjoint, &da);
                    add_scaled(*b, &mut adjoint, &db);
                }
                Clamp { a, lo, hi } => {
                    let v = &values[a.0];
                    let d = Vector::from_fn(lo.len(), |k, _| {
                        if v[k] > lo[k] && v[k] < hi[k] {
                            1.0
                        } else if v[k] == lo[k] || v[k] == hi[k] {
                            policy.pick(policy.clamp_at_boundary, 0.0, 1.0, &mut rng)
                        } else {
                            0.0
                        }
                    });
                    add_scaled(*a, &mut adjoint, &d);
                }
                SoftThreshold { a, threshold } => {
                    let t = *threshold;
                    let d = values[a.0].map(|u| {
                        if t == 0.0 {
                            1.0
                        } else if u.abs() > t {
                            1.0
                        } else if u.abs() < t {
                            0.0
                        } else {
                            policy.pick(policy.soft_threshold_at_kink, 0.0, 1.0, &mut rng)
                        }
                    });
                    add_scaled(*a, &mut adjoint, &d);
                }
                EuclideanNorm { a } => {
                    let v = &values[a.0];
                    let s = values[i][0];
                    // at the origin the zero vector is the chosen element of
                    // the unit-ball subdifferential
                    if s > 0.0 {
                        let row = (v / s).transpose();
                        adjoint[a.0] += abar.column(0) * row;
                    }
                }
                SquaredNorm { a } => {
                    let row = (values[a.0].clone() * 2.0).transpose();
                    adjoint[a.0] += abar.column(0) * row;
                }
                Slice { a, start, len } => {
                    for k in 0..*len {
                        let col = abar.column(k).into_owned();
                        adjoint[a.0].column_mut(start + k).iter_mut()
                            .zip(col.iter())
                            .for_each(|(t, s)| *t += s);
                    }
                }
                Concat { parts } => {
                    let mut off = 0;
                    for p in parts {
                        let len = values[p.0].len();
                        for k in 0..len {
                            let col = abar.column(off + k).into_owned();
                            adjoint[p.0].column_mut(k).iter_mut()
                                .zip(col.iter())
                                .for_each(|(t, s)| *t += s);
                        }
                        off += len;
                    }
                }
            }
        }
        Ok(jac)
    }

    /// Samples `num_samples` points t ~ U[0,1] along x + t v and compares the
    /// finite-difference directional derivative of the forward values against
    /// the selection times v. Returns the fraction of agreeing samples; for a
    /// conservative selection the disagreement set has measure zero.
    pub fn residual_line_check(
        &self,
        x: &Vector,
        v: &Vector,
        num_samples: usize,
        policy: &SelectionPolicy,
        seed: u64,
    ) -> Result<LineCheckReport> {
        if v.norm() == 0.0 {
            return Err(Error::InvalidConfig("line check needs a nonzero direction".into()));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let h = 1e-6;
        let mut agreeing = 0;
        for _ in 0..num_samples {
            let t: f64 = rng.gen_range(0.0..1.0);
            let p = x + v * t;
            let fp = self.eval(&(&p + v * h))?;
            let fm = self.eval(&(&p - v * h))?;
            let fd = (fp - fm) / (2.0 * h);
            let jv = &self.jacobian_selection(&p, policy)?.matrix * v;
            let ok = fd
                .iter()
                .zip(jv.iter())
                .all(|(a, b)| (a - b).abs() <= 1e-6 + 1e-5 * a.abs().max(b.abs()));
            if ok {
                agreeing += 1;
            }
        }
        Ok(LineCheckReport { num_samples, num_agreeing: agreeing })
    }

    /// Builds the tape for `outer . inner` by inlining both node lists.
    pub fn compose(outer: &Tape, inner: &Tape) -> Result<Tape> {
        inner.validate()?;
        outer.validate()?;
        if outer.input_arity != inner.output_arity() {
            return Err(Error::ShapeMismatch(format!(
                "compose: outer arity {} != inner output arity {}",
                outer.input_arity,
                inner.output_arity()
            )));
        }
        let mut tape = Tape::new(inner.input_arity);
        tape.nodes = inner.nodes.clone();
        let bridge = tape.concat(inner.outputs.clone())?;
        let offset = tape.nodes.len();
        for node in &outer.nodes {
            let remap = |id: NodeId| NodeId(id.0 + offset);
            let mapped = match node {
                Node::Input { start, len } => Node::Slice { a: bridge, start: *start, len: *len },
                other => {
                    let mut cloned = other.clone();
                    remap_operands(&mut cloned, remap);
                    cloned
                }
            };
            tape.nodes.push(mapped);
        }
        let outputs: Vec<NodeId> =
            outer.outputs.iter().map(|o| NodeId(o.0 + offset)).collect();
        tape.set_outputs(&outputs)?;
        tape.validate()?;
        Ok(tape)
    }
}

fn remap_operands(node: &mut Node, f: impl Fn(NodeId) -> NodeId) {
    use Node::*;
    match node {
        Input { .. } | Constant { .. } => {}
        Add { a, b } | Sub { a, b } | Mul { a, b } | Div { a, b } | Dot { a, b }
        | Max { a, b } | Min { a, b } => {
            *a = f(*a);
            *b = f(*b);
        }
        Neg { a }
        | Scale { a, .. }
        | Affine { a, .. }
        | Sum { a }
        | Power { a, .. }
        | Exp { a }
        | Log { a }
        | Tanh { a }
        | Relu { a }
        | Abs { a }
        | Sign { a }
        | Clamp { a, .. }
        | SoftThreshold { a, .. }
        | EuclideanNorm { a }
        | SquaredNorm { a }
        | Slice { a, .. } => *a = f(*a),
        Concat { parts } => {
            for p in parts {
                *p = f(*p);
            }
        }
    }
}

/// Central finite-difference Jacobian, the standard oracle against
/// selections away from kinks.
pub fn finite_difference_jacobian(tape: &Tape, x: &Vector, h: f64) -> Result<Matrix> {
    let n = x.len();
    let y = tape.eval(x)?;
    let mut jac = Matrix::zeros(y.len(), n);
    for j in 0..n {
        let mut xp = x.clone();
        let mut xm = x.clone();
        xp[j] += h;
        xm[j] -= h;
        let col = (tape.eval(&xp)? - tape.eval(&xm)?) / (2.0 * h);
        jac.set_column(j, &col);
    }
    Ok(jac)
}

#[cfg(test)]
mod tests;
