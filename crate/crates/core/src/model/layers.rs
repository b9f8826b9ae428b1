//! Parameter creation and program fragments shared by the models.

use rand::Rng;
use rand_distr::{Distribution, Normal};

use crate::diff_engine::{EngineError, Group, NodeId, ParamId, ParameterSet, ProgramBuilder};

/// Creates `name` on a fresh set, or checks its shape on a loaded one.
pub(crate) struct ParamFactory<'a, R: Rng> {
    pub params: &'a mut ParameterSet,
    pub rng: &'a mut R,
    pub fresh: bool,
}

#[derive(Clone, Copy)]
pub(crate) enum Init {
    Zeros,
    /// Truncated normal with std `1/sqrt(fan_in)`.
    FanIn,
}

impl<R: Rng> ParamFactory<'_, R> {
    pub fn get(&mut self, name: &str, group: Group, shape: &[usize], init: Init) -> Result<ParamId, EngineError> {
        if !self.fresh {
            let id = self
                .params
                .id(name)
                .ok_or_else(|| EngineError::Unsupported(format!("checkpoint lacks parameter {name:?}")))?;
            if self.params.entry(id).shape != shape {
                return Err(EngineError::ShapeMismatch {
                    primitive: "param",
                    detail: format!("{name}: stored shape {:?}, model needs {shape:?}", self.params.entry(id).shape),
                });
            }
            return Ok(id);
        }
        let n: usize = shape.iter().product();
        let values = match init {
            Init::Zeros => vec![0.0; n],
            Init::FanIn => {
                let fan_in = *shape.last().unwrap_or(&1).max(&1);
                let std = 1.0 / (fan_in as f64).sqrt();
                let dist = Normal::new(0.0, std).expect("finite std");
                (0..n)
                    .map(|_| loop {
                        let v: f64 = dist.sample(self.rng);
                        if v.abs() <= 2.0 * std {
                            break v;
                        }
                    })
                    .collect()
            }
        };
        self.params.add(name, group, shape, values)
    }
}

/// Parameters of a gated recurrent cell with input size `i` and state size `h`.
#[derive(Debug, Clone, Copy)]
pub(crate) struct GruParams {
    pub x_zr: ParamId,
    pub h_zr: ParamId,
    pub b_zr: ParamId,
    pub x_a: ParamId,
    pub h_a: ParamId,
    pub b_a: ParamId,
    pub hidden: usize,
}

impl GruParams {
    pub fn create<R: Rng>(
        f: &mut ParamFactory<'_, R>,
        prefix: &str,
        group: Group,
        input: usize,
        hidden: usize,
    ) -> Result<Self, EngineError> {
        Ok(Self {
            x_zr: f.get(&format!("{prefix}.x_zr"), group, &[2 * hidden, input], Init::FanIn)?,
            h_zr: f.get(&format!("{prefix}.h_zr"), group, &[2 * hidden, hidden], Init::FanIn)?,
            b_zr: f.get(&format!("{prefix}.b_zr"), group, &[2 * hidden], Init::Zeros)?,
            x_a: f.get(&format!("{prefix}.x_a"), group, &[hidden, input], Init::FanIn)?,
            h_a: f.get(&format!("{prefix}.h_a"), group, &[hidden, hidden], Init::FanIn)?,
            b_a: f.get(&format!("{prefix}.b_a"), group, &[hidden], Init::Zeros)?,
            hidden,
        })
    }

    /// `z, r = σ(W x + U h + b)`, `a = tanh(W_a x + U_a (r ⊙ h) + b_a)`,
    /// `h' = (1 - z) ⊙ h + z ⊙ a`.
    pub fn cell(&self, b: &mut ProgramBuilder, params: &ParameterSet, x: NodeId, h: NodeId) -> Result<NodeId, EngineError> {
        let n = self.hidden;
        let (x_zr, h_zr, b_zr) = (b.param(params, self.x_zr), b.param(params, self.h_zr), b.param(params, self.b_zr));
        let (x_a, h_a, b_a) = (b.param(params, self.x_a), b.param(params, self.h_a), b.param(params, self.b_a));
        let gx = b.affine(x_zr, x, Some(b_zr))?;
        let gh = b.affine(h_zr, h, None)?;
        let g = b.add(gx, gh)?;
        let g = b.sigmoid(g);
        let z = b.slice(g, 0, n)?;
        let r = b.slice(g, n, n)?;
        let rh = b.mul(r, h)?;
        let ax = b.affine(x_a, x, Some(b_a))?;
        let ah = b.affine(h_a, rh, None)?;
        let a = b.add(ax, ah)?;
        let a = b.tanh(a);
        let d = b.sub(a, h)?;
        let zd = b.mul(z, d)?;
        b.add(h, zd)
    }
}

/// `depth - 1` hidden layers of width `d` with LeakyReLU, then a linear
/// output layer of width `n_out` (logits).
pub(crate) fn decoder_program<R: Rng>(
    f: &mut ParamFactory<'_, R>,
    d: usize,
    n_out: usize,
    depth: usize,
    slope: f64,
) -> Result<crate::diff_engine::Program, EngineError> {
    let mut ids = Vec::with_capacity(depth);
    for l in 0..depth {
        let rows = if l + 1 == depth { n_out } else { d };
        let w = f.get(&format!("dec.w{l}"), Group::Other, &[rows, d], Init::FanIn)?;
        let b = f.get(&format!("dec.b{l}"), Group::Other, &[rows], Init::Zeros)?;
        ids.push((w, b));
    }
    let mut b = ProgramBuilder::new(d);
    let mut x = b.input();
    for (l, &(w, bias)) in ids.iter().enumerate() {
        let (wn, bn) = (b.param(f.params, w), b.param(f.params, bias));
        x = b.affine(wn, x, Some(bn))?;
        if l + 1 < depth {
            x = b.leaky_relu(x, slope);
        }
    }
    Ok(b.finish(x))
}
