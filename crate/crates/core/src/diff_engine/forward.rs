//! Forward-mode differentiation as a program transformation.
//!
//! The tangent of every node is expressed with the same primitive set, so a
//! transformed program can be transformed again (nested forward mode) or run
//! through the reverse pass.

use super::program::{NodeId, Op, Program, ProgramBuilder};
use super::EngineError;

type Tangent = Option<NodeId>;

impl ProgramBuilder {
    fn broadcast_to(&mut self, t: NodeId, len: usize) -> Result<NodeId, EngineError> {
        if self.len_of(t) == len {
            Ok(t)
        } else {
            let zeros = self.constant(vec![0.0; len]);
            self.add(t, zeros)
        }
    }

    /// Inlines `src` with input `x` and input tangent `u`, returning the primal
    /// output and its tangent (`None` when the tangent is identically zero).
    pub fn inline_jvp(
        &mut self,
        src: &Program,
        x: NodeId,
        u: Tangent,
    ) -> Result<(NodeId, Tangent), EngineError> {
        if self.len_of(x) != src.input_dim {
            return Err(EngineError::ShapeMismatch {
                primitive: "input",
                detail: format!("jvp of program with {} inputs given {}", src.input_dim, self.len_of(x)),
            });
        }
        let mut primal: Vec<NodeId> = Vec::with_capacity(src.nodes.len());
        let mut tangent: Vec<Tangent> = Vec::with_capacity(src.nodes.len());
        for node in &src.nodes {
            let p = |i: &NodeId| primal[i.index()];
            let t = |i: &NodeId| tangent[i.index()];
            let (y, ydot) = match &node.op {
                Op::Input => (x, u),
                Op::Param(id) => (self.param_with_shape(*id, node.len, node.mat), None),
                Op::Const(v) => (self.constant(v.clone()), None),
                Op::Affine { w, x: xi, b, .. } => {
                    if t(w).is_some() {
                        return Err(EngineError::Unsupported(
                            "tangent through the matrix operand of affine".into(),
                        ));
                    }
                    let (wp, xp, bp) = (p(w), p(xi), b.as_ref().map(p));
                    let y = self.affine(wp, xp, bp)?;
                    let mut ydot = match t(xi) {
                        Some(xt) => Some(self.affine(wp, xt, None)?),
                        None => None,
                    };
                    if let Some(bt) = b.as_ref().and_then(t) {
                        ydot = Some(match ydot {
                            Some(d) => self.add(d, bt)?,
                            None => bt,
                        });
                    }
                    (y, ydot)
                }
                Op::Add(a, b) => {
                    let y = self.add(p(a), p(b))?;
                    let len = self.len_of(y);
                    let ydot = match (t(a), t(b)) {
                        (None, None) => None,
                        (Some(at), None) => Some(self.broadcast_to(at, len)?),
                        (None, Some(bt)) => Some(self.broadcast_to(bt, len)?),
                        (Some(at), Some(bt)) => Some(self.add(at, bt)?),
                    };
                    (y, ydot)
                }
                Op::Sub(a, b) => {
                    let y = self.sub(p(a), p(b))?;
                    let len = self.len_of(y);
                    let ydot = match (t(a), t(b)) {
                        (None, None) => None,
                        (Some(at), None) => Some(self.broadcast_to(at, len)?),
                        (None, Some(bt)) => {
                            let neg = self.scale(bt, -1.0, 0.0);
                            Some(self.broadcast_to(neg, len)?)
                        }
                        (Some(at), Some(bt)) => Some(self.sub(at, bt)?),
                    };
                    (y, ydot)
                }
                Op::Mul(a, b) => {
                    let (ap, bp) = (p(a), p(b));
                    let y = self.mul(ap, bp)?;
                    let len = self.len_of(y);
                    let left = match t(a) {
                        Some(at) => Some(self.mul(at, bp)?),
                        None => None,
                    };
                    let right = match t(b) {
                        Some(bt) => Some(self.mul(ap, bt)?),
                        None => None,
                    };
                    let ydot = match (left, right) {
                        (None, None) => None,
                        (Some(l), None) => Some(self.broadcast_to(l, len)?),
                        (None, Some(r)) => Some(self.broadcast_to(r, len)?),
                        (Some(l), Some(r)) => Some(self.add(l, r)?),
                    };
                    (y, ydot)
                }
                Op::Scale { x: xi, scale, shift } => {
                    let y = self.scale(p(xi), *scale, *shift);
                    let ydot = t(xi).map(|xt| self.scale(xt, *scale, 0.0));
                    (y, ydot)
                }
                Op::Tanh(a) => {
                    let y = self.tanh(p(a));
                    let ydot = match t(a) {
                        Some(at) => {
                            let y2 = self.mul(y, y)?;
                            let d = self.scale(y2, -1.0, 1.0);
                            Some(self.mul(d, at)?)
                        }
                        None => None,
                    };
                    (y, ydot)
                }
                Op::Sigmoid(a) => {
                    let y = self.sigmoid(p(a));
                    let ydot = match t(a) {
                        Some(at) => {
                            let one_minus = self.scale(y, -1.0, 1.0);
                            let d = self.mul(y, one_minus)?;
                            Some(self.mul(d, at)?)
                        }
                        None => None,
                    };
                    (y, ydot)
                }
                Op::LeakyRelu { x: xi, slope } => {
                    let xp = p(xi);
                    let y = self.leaky_relu(xp, *slope);
                    let ydot = match t(xi) {
                        Some(xt) => {
                            let mask = self.leaky_relu_slope(xp, *slope);
                            Some(self.mul(mask, xt)?)
                        }
                        None => None,
                    };
                    (y, ydot)
                }
                Op::LeakyReluSlope { x: xi, slope } => (self.leaky_relu_slope(p(xi), *slope), None),
                Op::Exp(a) => {
                    let y = self.exp(p(a));
                    let ydot = match t(a) {
                        Some(at) => Some(self.mul(y, at)?),
                        None => None,
                    };
                    (y, ydot)
                }
                Op::Log(a) => {
                    let ap = p(a);
                    let y = self.log(ap);
                    let ydot = match t(a) {
                        Some(at) => {
                            let r = self.recip(ap);
                            Some(self.mul(r, at)?)
                        }
                        None => None,
                    };
                    (y, ydot)
                }
                Op::Recip(a) => {
                    let y = self.recip(p(a));
                    let ydot = match t(a) {
                        Some(at) => {
                            let y2 = self.mul(y, y)?;
                            let d = self.scale(y2, -1.0, 0.0);
                            Some(self.mul(d, at)?)
                        }
                        None => None,
                    };
                    (y, ydot)
                }
                Op::Softmax(a) => {
                    let y = self.softmax(p(a));
                    let ydot = match t(a) {
                        Some(at) => {
                            let inner = self.dot(y, at)?;
                            let centered = self.sub(at, inner)?;
                            Some(self.mul(y, centered)?)
                        }
                        None => None,
                    };
                    (y, ydot)
                }
                Op::Concat(parts) => {
                    let ps: Vec<NodeId> = parts.iter().map(p).collect();
                    let y = self.concat(&ps)?;
                    let ydot = if parts.iter().all(|q| t(q).is_none()) {
                        None
                    } else {
                        let mut ts = Vec::with_capacity(parts.len());
                        for q in parts {
                            ts.push(match t(q) {
                                Some(qt) => qt,
                                None => {
                                    let len = self.len_of(p(q));
                                    self.constant(vec![0.0; len])
                                }
                            });
                        }
                        Some(self.concat(&ts)?)
                    };
                    (y, ydot)
                }
                Op::Slice { x: xi, start, len } => {
                    let y = self.slice(p(xi), *start, *len)?;
                    let ydot = match t(xi) {
                        Some(xt) => Some(self.slice(xt, *start, *len)?),
                        None => None,
                    };
                    (y, ydot)
                }
                Op::Sum(a) => {
                    let y = self.sum(p(a));
                    let ydot = t(a).map(|at| self.sum(at));
                    (y, ydot)
                }
            };
            primal.push(y);
            tangent.push(ydot);
        }
        Ok((primal[src.output.index()], tangent[src.output.index()]))
    }
}
