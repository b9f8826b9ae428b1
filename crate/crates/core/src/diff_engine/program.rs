use std::collections::HashMap;
use std::sync::OnceLock;

use super::params::{ParamId, ParameterSet};
use super::EngineError;

/// Handle to a node inside a [`Program`] or [`ProgramBuilder`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct NodeId(pub(crate) u32);

impl NodeId {
    pub(crate) fn index(self) -> usize {
        self.0 as usize
    }
}

/// The closed primitive set. Every variant has a forward-mode rule (in
/// `forward.rs`) and a reverse-mode rule (in `eval.rs`).
#[derive(Debug, Clone, PartialEq)]
pub(crate) enum Op {
    Input,
    Param(ParamId),
    Const(Vec<f64>),
    /// `W x (+ b)`, `W` row-major `rows × cols`.
    Affine {
        w: NodeId,
        x: NodeId,
        b: Option<NodeId>,
        rows: usize,
        cols: usize,
    },
    Add(NodeId, NodeId),
    Sub(NodeId, NodeId),
    Mul(NodeId, NodeId),
    /// `scale * x + shift`, elementwise.
    Scale { x: NodeId, scale: f64, shift: f64 },
    Tanh(NodeId),
    Sigmoid(NodeId),
    LeakyRelu { x: NodeId, slope: f64 },
    /// Derivative mask of the leaky rectifier: 1 where `x > 0`, else `slope`.
    LeakyReluSlope { x: NodeId, slope: f64 },
    Exp(NodeId),
    Log(NodeId),
    Recip(NodeId),
    Softmax(NodeId),
    Concat(Vec<NodeId>),
    Slice { x: NodeId, start: usize, len: usize },
    Sum(NodeId),
}

#[derive(Debug, Clone, PartialEq)]
pub(crate) struct Node {
    pub(crate) op: Op,
    pub(crate) len: usize,
    /// Matrix interpretation, present for 2-D parameters.
    pub(crate) mat: Option<(usize, usize)>,
}

/// An immutable vector-valued function `(ParameterSet, input) -> output`
/// stored as a topologically ordered node list.
#[derive(Debug)]
pub struct Program {
    pub(crate) input_dim: usize,
    pub(crate) nodes: Vec<Node>,
    pub(crate) output: NodeId,
    pub(crate) param_ids: Vec<ParamId>,
    pub(crate) jvp_cache: OnceLock<Box<Program>>,
}

impl Clone for Program {
    fn clone(&self) -> Self {
        Self {
            input_dim: self.input_dim,
            nodes: self.nodes.clone(),
            output: self.output,
            param_ids: self.param_ids.clone(),
            jvp_cache: OnceLock::new(),
        }
    }
}

impl Program {
    pub fn input_dim(&self) -> usize {
        self.input_dim
    }

    pub fn output_dim(&self) -> usize {
        self.nodes[self.output.index()].len
    }

    pub fn num_nodes(&self) -> usize {
        self.nodes.len()
    }

    /// Parameter arrays referenced by the program, sorted.
    pub fn param_ids(&self) -> &[ParamId] {
        &self.param_ids
    }

    pub(crate) fn node(&self, id: NodeId) -> &Node {
        &self.nodes[id.index()]
    }

    /// Forward-mode companion: input `[x; u]`, output `[f(x); J_f(x) u]`.
    pub fn jvp_program(&self) -> &Program {
        self.jvp_cache.get_or_init(|| {
            let n = self.input_dim;
            let mut b = ProgramBuilder::new(2 * n);
            let xu = b.input();
            let x = b.slice(xu, 0, n).expect("slice within input");
            let u = b.slice(xu, n, n).expect("slice within input");
            let (y, ydot) = b.inline_jvp(self, x, Some(u)).expect("jvp of valid program");
            let ydot = match ydot {
                Some(t) => t,
                None => b.constant(vec![0.0; self.output_dim()]),
            };
            let out = b.concat(&[y, ydot]).expect("concat");
            Box::new(b.finish(out))
        })
    }
}

/// Incremental constructor for [`Program`]s. Node 0 is always the input.
#[derive(Debug)]
pub struct ProgramBuilder {
    input_dim: usize,
    nodes: Vec<Node>,
    param_nodes: HashMap<ParamId, NodeId>,
}

fn broadcast_len(op: &'static str, a: usize, b: usize) -> Result<usize, EngineError> {
    if a == b {
        Ok(a)
    } else if a == 1 {
        Ok(b)
    } else if b == 1 {
        Ok(a)
    } else {
        Err(EngineError::ShapeMismatch {
            primitive: op,
            detail: format!("operand lengths {a} and {b}"),
        })
    }
}

impl ProgramBuilder {
    pub fn new(input_dim: usize) -> Self {
        Self {
            input_dim,
            nodes: vec![Node { op: Op::Input, len: input_dim, mat: None }],
            param_nodes: HashMap::new(),
        }
    }

    fn push(&mut self, op: Op, len: usize, mat: Option<(usize, usize)>) -> NodeId {
        let id = NodeId(self.nodes.len() as u32);
        self.nodes.push(Node { op, len, mat });
        id
    }

    pub fn len_of(&self, id: NodeId) -> usize {
        self.nodes[id.index()].len
    }

    pub fn input(&self) -> NodeId {
        NodeId(0)
    }

    /// References a parameter array; repeated calls return the same node.
    pub fn param(&mut self, params: &ParameterSet, id: ParamId) -> NodeId {
        let e = params.entry(id);
        self.param_with_shape(id, e.len, e.matrix_shape())
    }

    pub(crate) fn param_with_shape(
        &mut self,
        id: ParamId,
        len: usize,
        mat: Option<(usize, usize)>,
    ) -> NodeId {
        if let Some(n) = self.param_nodes.get(&id) {
            return *n;
        }
        let n = self.push(Op::Param(id), len, mat);
        self.param_nodes.insert(id, n);
        n
    }

    pub fn constant(&mut self, values: Vec<f64>) -> NodeId {
        let len = values.len();
        self.push(Op::Const(values), len, None)
    }

    pub fn affine(&mut self, w: NodeId, x: NodeId, b: Option<NodeId>) -> Result<NodeId, EngineError> {
        let (rows, cols) = self.nodes[w.index()].mat.ok_or_else(|| EngineError::ShapeMismatch {
            primitive: "affine",
            detail: "weight operand is not a matrix".into(),
        })?;
        if self.len_of(x) != cols {
            return Err(EngineError::ShapeMismatch {
                primitive: "affine",
                detail: format!("matrix {rows}x{cols} applied to vector of length {}", self.len_of(x)),
            });
        }
        if let Some(b) = b {
            if self.len_of(b) != rows {
                return Err(EngineError::ShapeMismatch {
                    primitive: "affine",
                    detail: format!("bias length {} for {rows} rows", self.len_of(b)),
                });
            }
        }
        Ok(self.push(Op::Affine { w, x, b, rows, cols }, rows, None))
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId, EngineError> {
        let len = broadcast_len("add", self.len_of(a), self.len_of(b))?;
        Ok(self.push(Op::Add(a, b), len, None))
    }

    pub fn sub(&mut self, a: NodeId, b: NodeId) -> Result<NodeId, EngineError> {
        let len = broadcast_len("sub", self.len_of(a), self.len_of(b))?;
        Ok(self.push(Op::Sub(a, b), len, None))
    }

    pub fn mul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId, EngineError> {
        let len = broadcast_len("mul", self.len_of(a), self.len_of(b))?;
        Ok(self.push(Op::Mul(a, b), len, None))
    }

    pub fn scale(&mut self, x: NodeId, scale: f64, shift: f64) -> NodeId {
        let len = self.len_of(x);
        self.push(Op::Scale { x, scale, shift }, len, None)
    }

    pub fn tanh(&mut self, x: NodeId) -> NodeId {
        let len = self.len_of(x);
        self.push(Op::Tanh(x), len, None)
    }

    pub fn sigmoid(&mut self, x: NodeId) -> NodeId {
        let len = self.len_of(x);
        self.push(Op::Sigmoid(x), len, None)
    }

    pub fn leaky_relu(&mut self, x: NodeId, slope: f64) -> NodeId {
        let len = self.len_of(x);
        self.push(Op::LeakyRelu { x, slope }, len, None)
    }

    pub(crate) fn leaky_relu_slope(&mut self, x: NodeId, slope: f64) -> NodeId {
        let len = self.len_of(x);
        self.push(Op::LeakyReluSlope { x, slope }, len, None)
    }

    pub fn exp(&mut self, x: NodeId) -> NodeId {
        let len = self.len_of(x);
        self.push(Op::Exp(x), len, None)
    }

    pub fn log(&mut self, x: NodeId) -> NodeId {
        let len = self.len_of(x);
        self.push(Op::Log(x), len, None)
    }

    pub fn recip(&mut self, x: NodeId) -> NodeId {
        let len = self.len_of(x);
        self.push(Op::Recip(x), len, None)
    }

    pub fn softmax(&mut self, x: NodeId) -> NodeId {
        let len = self.len_of(x);
        self.push(Op::Softmax(x), len, None)
    }

    pub fn concat(&mut self, parts: &[NodeId]) -> Result<NodeId, EngineError> {
        if parts.is_empty() {
            return Err(EngineError::ShapeMismatch {
                primitive: "concat",
                detail: "no operands".into(),
            });
        }
        if parts.len() == 1 {
            return Ok(parts[0]);
        }
        let len = parts.iter().map(|p| self.len_of(*p)).sum();
        Ok(self.push(Op::Concat(parts.to_vec()), len, None))
    }

    pub fn slice(&mut self, x: NodeId, start: usize, len: usize) -> Result<NodeId, EngineError> {
        let n = self.len_of(x);
        if start + len > n {
            return Err(EngineError::ShapeMismatch {
                primitive: "slice",
                detail: format!("range {start}..{} of length {n}", start + len),
            });
        }
        if start == 0 && len == n {
            return Ok(x);
        }
        Ok(self.push(Op::Slice { x, start, len }, len, None))
    }

    pub fn sum(&mut self, x: NodeId) -> NodeId {
        self.push(Op::Sum(x), 1, None)
    }

    /// `Σ a ⊙ b`.
    pub fn dot(&mut self, a: NodeId, b: NodeId) -> Result<NodeId, EngineError> {
        let p = self.mul(a, b)?;
        Ok(self.sum(p))
    }

    /// Copies `src` into this builder with its input bound to `x`.
    pub fn inline(&mut self, src: &Program, x: NodeId) -> Result<NodeId, EngineError> {
        if self.len_of(x) != src.input_dim {
            return Err(EngineError::ShapeMismatch {
                primitive: "input",
                detail: format!("inlined program expects {} inputs, got {}", src.input_dim, self.len_of(x)),
            });
        }
        let mut map: Vec<NodeId> = Vec::with_capacity(src.nodes.len());
        for node in &src.nodes {
            let m = |i: &NodeId| map[i.index()];
            let new = match &node.op {
                Op::Input => x,
                Op::Param(id) => self.param_with_shape(*id, node.len, node.mat),
                Op::Const(v) => self.constant(v.clone()),
                Op::Affine { w, x: xi, b, .. } => {
                    let (w, xi, b) = (m(w), m(xi), b.as_ref().map(m));
                    self.affine(w, xi, b)?
                }
                Op::Add(a, b) => {
                    let (a, b) = (m(a), m(b));
                    self.add(a, b)?
                }
                Op::Sub(a, b) => {
                    let (a, b) = (m(a), m(b));
                    self.sub(a, b)?
                }
                Op::Mul(a, b) => {
                    let (a, b) = (m(a), m(b));
                    self.mul(a, b)?
                }
                Op::Scale { x, scale, shift } => {
                    let x = m(x);
                    self.scale(x, *scale, *shift)
                }
                Op::Tanh(a) => {
                    let a = m(a);
                    self.tanh(a)
                }
                Op::Sigmoid(a) => {
                    let a = m(a);
                    self.sigmoid(a)
                }
                Op::LeakyRelu { x, slope } => {
                    let x = m(x);
                    self.leaky_relu(x, *slope)
                }
                Op::LeakyReluSlope { x, slope } => {
                    let x = m(x);
                    self.leaky_relu_slope(x, *slope)
                }
                Op::Exp(a) => {
                    let a = m(a);
                    self.exp(a)
                }
                Op::Log(a) => {
                    let a = m(a);
                    self.log(a)
                }
                Op::Recip(a) => {
                    let a = m(a);
                    self.recip(a)
                }
                Op::Softmax(a) => {
                    let a = m(a);
                    self.softmax(a)
                }
                Op::Concat(parts) => {
                    let parts: Vec<NodeId> = parts.iter().map(m).collect();
                    self.concat(&parts)?
                }
                Op::Slice { x, start, len } => {
                    let x = m(x);
                    self.slice(x, *start, *len)?
                }
                Op::Sum(a) => {
                    let a = m(a);
                    self.sum(a)
                }
            };
            map.push(new);
        }
        Ok(map[src.output.index()])
    }

    pub fn finish(self, output: NodeId) -> Program {
        let mut param_ids: Vec<ParamId> = self.param_nodes.keys().copied().collect();
        param_ids.sort();
        Program {
            input_dim: self.input_dim,
            nodes: self.nodes,
            output,
            param_ids,
            jvp_cache: OnceLock::new(),
        }
    }
}
