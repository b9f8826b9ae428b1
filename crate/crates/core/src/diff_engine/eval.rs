use std::cell::Cell;

use super::params::{ParamSubset, ParameterSet};
use super::program::{NodeId, Op, Program};
use super::EngineError;

/// Deliberate derivative-rule corruption, used to prove the gradient
/// checks can fail. Scoped to the calling thread.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum InjectedFault {
    /// Flip the sign of the reverse-mode tanh rule.
    TanhReverseSign,
}

thread_local! {
    static FAULT: Cell<Option<InjectedFault>> = const { Cell::new(None) };
}

#[doc(hidden)]
pub fn set_injected_fault(fault: Option<InjectedFault>) {
    FAULT.with(|f| f.set(fault));
}

fn fault_active(kind: InjectedFault) -> bool {
    FAULT.with(|f| f.get() == Some(kind))
}

/// Primal values of every node after a forward sweep.
pub(crate) struct Values<'a> {
    program: &'a Program,
    params: &'a ParameterSet,
    input: &'a [f64],
    slots: Vec<Vec<f64>>,
}

impl<'a> Values<'a> {
    pub(crate) fn get(&self, id: NodeId) -> &[f64] {
        match &self.program.node(id).op {
            Op::Input => self.input,
            Op::Param(p) => self.params.get(*p),
            _ => &self.slots[id.index()],
        }
    }

    pub(crate) fn into_output(mut self) -> Vec<f64> {
        let out = self.program.output;
        match &self.program.node(out).op {
            Op::Input | Op::Param(_) => self.get(out).to_vec(),
            _ => std::mem::take(&mut self.slots[out.index()]),
        }
    }
}

#[inline]
fn bcast(v: &[f64], i: usize) -> f64 {
    if v.len() == 1 {
        v[0]
    } else {
        v[i]
    }
}

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

impl Program {
    fn check_inputs(&self, params: &ParameterSet, input: &[f64]) -> Result<(), EngineError> {
        if input.len() != self.input_dim {
            return Err(EngineError::ShapeMismatch {
                primitive: "input",
                detail: format!("expected {} values, got {}", self.input_dim, input.len()),
            });
        }
        for node in &self.nodes {
            if let Op::Param(id) = node.op {
                if id.0 >= params.num_arrays() || params.entry(id).len != node.len {
                    return Err(EngineError::ShapeMismatch {
                        primitive: "param",
                        detail: format!("parameter #{} does not have {} values", id.0, node.len),
                    });
                }
            }
        }
        Ok(())
    }

    pub(crate) fn forward<'a>(
        &'a self,
        params: &'a ParameterSet,
        input: &'a [f64],
    ) -> Result<Values<'a>, EngineError> {
        self.check_inputs(params, input)?;
        let mut vals = Values {
            program: self,
            params,
            input,
            slots: Vec::with_capacity(self.nodes.len()),
        };
        for node in &self.nodes {
            let out = match &node.op {
                Op::Input | Op::Param(_) => Vec::new(),
                Op::Const(v) => v.clone(),
                Op::Affine { w, x, b, rows, cols } => {
                    let (w, x) = (vals.get(*w), vals.get(*x));
                    let mut y: Vec<f64> = match b {
                        Some(b) => vals.get(*b).to_vec(),
                        None => vec![0.0; *rows],
                    };
                    for (r, yr) in y.iter_mut().enumerate() {
                        let row = &w[r * cols..(r + 1) * cols];
                        *yr += row.iter().zip(x).map(|(a, b)| a * b).sum::<f64>();
                    }
                    y
                }
                Op::Add(a, b) => {
                    let (a, b) = (vals.get(*a), vals.get(*b));
                    (0..node.len).map(|i| bcast(a, i) + bcast(b, i)).collect()
                }
                Op::Sub(a, b) => {
                    let (a, b) = (vals.get(*a), vals.get(*b));
                    (0..node.len).map(|i| bcast(a, i) - bcast(b, i)).collect()
                }
                Op::Mul(a, b) => {
                    let (a, b) = (vals.get(*a), vals.get(*b));
                    (0..node.len).map(|i| bcast(a, i) * bcast(b, i)).collect()
                }
                Op::Scale { x, scale, shift } => vals.get(*x).iter().map(|v| scale * v + shift).collect(),
                Op::Tanh(x) => vals.get(*x).iter().map(|v| v.tanh()).collect(),
                Op::Sigmoid(x) => vals.get(*x).iter().map(|v| sigmoid(*v)).collect(),
                Op::LeakyRelu { x, slope } => vals
                    .get(*x)
                    .iter()
                    .map(|v| if *v > 0.0 { *v } else { slope * v })
                    .collect(),
                Op::LeakyReluSlope { x, slope } => vals
                    .get(*x)
                    .iter()
                    .map(|v| if *v > 0.0 { 1.0 } else { *slope })
                    .collect(),
                Op::Exp(x) => vals.get(*x).iter().map(|v| v.exp()).collect(),
                Op::Log(x) => vals.get(*x).iter().map(|v| v.ln()).collect(),
                Op::Recip(x) => vals.get(*x).iter().map(|v| 1.0 / v).collect(),
                Op::Softmax(x) => {
                    let x = vals.get(*x);
                    let m = x.iter().copied().fold(f64::NEG_INFINITY, f64::max);
                    let mut y: Vec<f64> = x.iter().map(|v| (v - m).exp()).collect();
                    let s: f64 = y.iter().sum();
                    y.iter_mut().for_each(|v| *v /= s);
                    y
                }
                Op::Concat(parts) => {
                    let mut y = Vec::with_capacity(node.len);
                    for p in parts {
                        y.extend_from_slice(vals.get(*p));
                    }
                    y
                }
                Op::Slice { x, start, len } => vals.get(*x)[*start..start + len].to_vec(),
                Op::Sum(x) => vec![vals.get(*x).iter().sum()],
            };
            vals.slots.push(out);
        }
        Ok(vals)
    }

    /// Runs the program.
    pub fn evaluate(&self, params: &ParameterSet, input: &[f64]) -> Result<Vec<f64>, EngineError> {
        Ok(self.forward(params, input)?.into_output())
    }

    /// Reverse sweep. Parameter gradients are added into `sink` (laid out by
    /// `subset`); arrays outside the subset are treated as constants. Returns
    /// the program output and the input gradient.
    pub fn vjp_accumulate(
        &self,
        params: &ParameterSet,
        input: &[f64],
        cotangent: &[f64],
        subset: &ParamSubset,
        sink: &mut [f64],
    ) -> Result<(Vec<f64>, Vec<f64>), EngineError> {
        let vals = self.forward(params, input)?;
        if cotangent.len() != self.output_dim() {
            return Err(EngineError::ShapeMismatch {
                primitive: "cotangent",
                detail: format!("expected {} values, got {}", self.output_dim(), cotangent.len()),
            });
        }
        if sink.len() != subset.len() {
            return Err(EngineError::ShapeMismatch {
                primitive: "gradient sink",
                detail: format!("sink has {} slots, subset needs {}", sink.len(), subset.len()),
            });
        }
        let input_grad = self.reverse(&vals, cotangent, subset, sink)?;
        Ok((vals.into_output(), input_grad))
    }

    /// Full gradient: parameter-shaped gradients plus the input gradient.
    pub fn gradient(
        &self,
        params: &ParameterSet,
        input: &[f64],
        cotangent: &[f64],
    ) -> Result<(ParameterSet, Vec<f64>), EngineError> {
        let subset = ParamSubset::all(params);
        let mut grads = params.zeros_like();
        let (_, gx) = self.vjp_accumulate(params, input, cotangent, &subset, grads.data_mut())?;
        Ok((grads, gx))
    }

    /// Directional derivative `J_f(input) · tangent`.
    pub fn jvp(
        &self,
        params: &ParameterSet,
        input: &[f64],
        tangent: &[f64],
    ) -> Result<Vec<f64>, EngineError> {
        if tangent.len() != input.len() {
            return Err(EngineError::ShapeMismatch {
                primitive: "tangent",
                detail: format!("tangent has {} values, input has {}", tangent.len(), input.len()),
            });
        }
        let jp = self.jvp_program();
        let mut xu = Vec::with_capacity(2 * input.len());
        xu.extend_from_slice(input);
        xu.extend_from_slice(tangent);
        let mut out = jp.evaluate(params, &xu)?;
        Ok(out.split_off(self.output_dim()))
    }

    fn reverse(
        &self,
        vals: &Values<'_>,
        cotangent: &[f64],
        subset: &ParamSubset,
        sink: &mut [f64],
    ) -> Result<Vec<f64>, EngineError> {
        let n = self.nodes.len();
        let mut adj: Vec<Option<Vec<f64>>> = vec![None; n];
        adj[self.output.index()] = Some(cotangent.to_vec());
        let mut input_grad = vec![0.0; self.input_dim];

        for i in (0..n).rev() {
            let Some(g) = adj[i].take() else { continue };
            let node = &self.nodes[i];
            let id = NodeId(i as u32);
            match &node.op {
                Op::Input => {
                    for (a, b) in input_grad.iter_mut().zip(&g) {
                        *a += b;
                    }
                }
                Op::Param(p) => {
                    if let Some(off) = subset.offset_of(*p) {
                        for (a, b) in sink[off..off + g.len()].iter_mut().zip(&g) {
                            *a += b;
                        }
                    }
                }
                Op::Const(_) | Op::LeakyReluSlope { .. } => {}
                Op::Affine { w, x, b, rows, cols } => {
                    let (wv, xv) = (vals.get(*w), vals.get(*x));
                    if let Some(slot) = slot(&mut adj, self, subset, sink, *x) {
                        for r in 0..*rows {
                            let gr = g[r];
                            if gr != 0.0 {
                                let row = &wv[r * cols..(r + 1) * cols];
                                for (s, wrc) in slot.iter_mut().zip(row) {
                                    *s += gr * wrc;
                                }
                            }
                        }
                    }
                    if let Some(slot) = slot(&mut adj, self, subset, sink, *w) {
                        for r in 0..*rows {
                            let gr = g[r];
                            if gr != 0.0 {
                                for (s, xc) in slot[r * cols..(r + 1) * cols].iter_mut().zip(xv) {
                                    *s += gr * xc;
                                }
                            }
                        }
                    }
                    if let Some(b) = b {
                        if let Some(slot) = slot(&mut adj, self, subset, sink, *b) {
                            add_into(slot, &g);
                        }
                    }
                }
                Op::Add(a, b) => {
                    if let Some(slot) = slot(&mut adj, self, subset, sink, *a) {
                        add_reduced(slot, &g, 1.0);
                    }
                    if let Some(slot) = slot(&mut adj, self, subset, sink, *b) {
                        add_reduced(slot, &g, 1.0);
                    }
                }
                Op::Sub(a, b) => {
                    if let Some(slot) = slot(&mut adj, self, subset, sink, *a) {
                        add_reduced(slot, &g, 1.0);
                    }
                    if let Some(slot) = slot(&mut adj, self, subset, sink, *b) {
                        add_reduced(slot, &g, -1.0);
                    }
                }
                Op::Mul(a, b) => {
                    let (av, bv) = (vals.get(*a), vals.get(*b));
                    if let Some(slot) = slot(&mut adj, self, subset, sink, *a) {
                        let prod: Vec<f64> = g.iter().enumerate().map(|(k, gk)| gk * bcast(bv, k)).collect();
                        add_reduced(slot, &prod, 1.0);
                    }
                    if let Some(slot) = slot(&mut adj, self, subset, sink, *b) {
                        let prod: Vec<f64> = g.iter().enumerate().map(|(k, gk)| gk * bcast(av, k)).collect();
                        add_reduced(slot, &prod, 1.0);
                    }
                }
                Op::Scale { x, scale, .. } => {
                    if let Some(slot) = slot(&mut adj, self, subset, sink, *x) {
                        add_reduced(slot, &g, *scale);
                    }
                }
                Op::Tanh(x) => {
                    let y = vals.get(id);
                    let sign = if fault_active(InjectedFault::TanhReverseSign) { -1.0 } else { 1.0 };
                    let d: Vec<f64> = g.iter().zip(y).map(|(gk, yk)| sign * gk * (1.0 - yk * yk)).collect();
                    if let Some(slot) = slot(&mut adj, self, subset, sink, *x) {
                        add_into(slot, &d);
                    }
                }
                Op::Sigmoid(x) => {
                    let y = vals.get(id);
                    let d: Vec<f64> = g.iter().zip(y).map(|(gk, yk)| gk * yk * (1.0 - yk)).collect();
                    if let Some(slot) = slot(&mut adj, self, subset, sink, *x) {
                        add_into(slot, &d);
                    }
                }
                Op::LeakyRelu { x, slope } => {
                    let xv = vals.get(*x);
                    let d: Vec<f64> = g
                        .iter()
                        .zip(xv)
                        .map(|(gk, xk)| if *xk > 0.0 { *gk } else { slope * gk })
                        .collect();
                    if let Some(slot) = slot(&mut adj, self, subset, sink, *x) {
                        add_into(slot, &d);
                    }
                }
                Op::Exp(x) => {
                    let y = vals.get(id);
                    let d: Vec<f64> = g.iter().zip(y).map(|(gk, yk)| gk * yk).collect();
                    if let Some(slot) = slot(&mut adj, self, subset, sink, *x) {
                        add_into(slot, &d);
                    }
                }
                Op::Log(x) => {
                    let xv = vals.get(*x);
                    if xv.iter().any(|v| *v <= 0.0) {
                        return Err(EngineError::NonDifferentiable { primitive: "log" });
                    }
                    let d: Vec<f64> = g.iter().zip(xv).map(|(gk, xk)| gk / xk).collect();
                    if let Some(slot) = slot(&mut adj, self, subset, sink, *x) {
                        add_into(slot, &d);
                    }
                }
                Op::Recip(x) => {
                    if vals.get(*x).contains(&0.0) {
                        return Err(EngineError::NonDifferentiable { primitive: "recip" });
                    }
                    let y = vals.get(id);
                    let d: Vec<f64> = g.iter().zip(y).map(|(gk, yk)| -gk * yk * yk).collect();
                    if let Some(slot) = slot(&mut adj, self, subset, sink, *x) {
                        add_into(slot, &d);
                    }
                }
                Op::Softmax(x) => {
                    let y = vals.get(id);
                    let inner: f64 = g.iter().zip(y).map(|(a, b)| a * b).sum();
                    let d: Vec<f64> = g.iter().zip(y).map(|(gk, yk)| yk * (gk - inner)).collect();
                    if let Some(slot) = slot(&mut adj, self, subset, sink, *x) {
                        add_into(slot, &d);
                    }
                }
                Op::Concat(parts) => {
                    let mut off = 0;
                    for p in parts {
                        let len = self.node(*p).len;
                        if let Some(slot) = slot(&mut adj, self, subset, sink, *p) {
                            add_into(slot, &g[off..off + len]);
                        }
                        off += len;
                    }
                }
                Op::Slice { x, start, len } => {
                    if let Some(slot) = slot(&mut adj, self, subset, sink, *x) {
                        add_into(&mut slot[*start..start + len], &g);
                    }
                }
                Op::Sum(x) => {
                    if let Some(slot) = slot(&mut adj, self, subset, sink, *x) {
                        slot.iter_mut().for_each(|s| *s += g[0]);
                    }
                }
            }
        }
        Ok(input_grad)
    }
}

/// Gradient destination for node `id`: the subset sink for parameters, a lazily
/// allocated adjoint buffer for interior nodes, nothing for constants.
fn slot<'s>(
    adj: &'s mut [Option<Vec<f64>>],
    program: &Program,
    subset: &ParamSubset,
    sink: &'s mut [f64],
    id: NodeId,
) -> Option<&'s mut [f64]> {
    let node = program.node(id);
    match &node.op {
        Op::Param(p) => {
            let off = subset.offset_of(*p)?;
            Some(&mut sink[off..off + node.len])
        }
        Op::Const(_) | Op::LeakyReluSlope { .. } => None,
        _ => Some(adj[id.index()].get_or_insert_with(|| vec![0.0; node.len]).as_mut_slice()),
    }
}

fn add_into(dst: &mut [f64], src: &[f64]) {
    for (d, s) in dst.iter_mut().zip(src) {
        *d += s;
    }
}

/// Adds `scale * src` into `dst`, summing `src` when `dst` is a broadcast scalar.
fn add_reduced(dst: &mut [f64], src: &[f64], scale: f64) {
    if dst.len() == 1 && src.len() != 1 {
        dst[0] += scale * src.iter().sum::<f64>();
    } else {
        for (d, s) in dst.iter_mut().zip(src) {
            *d += scale * s;
        }
    }
}
