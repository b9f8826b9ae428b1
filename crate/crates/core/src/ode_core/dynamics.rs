use crate::diff_engine::{ParamSubset, ParameterSet, Program, ProgramBuilder};

use super::OdeError;

pub const MAX_TAYLOR_ORDER: usize = 3;

/// An autonomous vector field `h ↦ f(h; θ)` plus derived programs for the
/// higher time derivatives along its flow.
#[derive(Debug, Clone)]
pub struct DynamicsSpec {
    field: Program,
    /// `taylor[k-1]` maps `h` to `d^k h/dt^k`.
    taylor: Vec<Program>,
    /// `penalty[k-1]` maps `h` to `‖d^k h/dt^k‖²`.
    penalty: Vec<Program>,
}

impl DynamicsSpec {
    pub fn new(field: Program) -> Result<Self, OdeError> {
        let d = field.input_dim();
        if field.output_dim() != d {
            return Err(OdeError::Shape(format!(
                "dynamics must map R^{d} to itself, outputs {}",
                field.output_dim()
            )));
        }
        let mut taylor = vec![field.clone()];
        for _ in 1..MAX_TAYLOR_ORDER {
            let prev = taylor.last().expect("non-empty");
            let mut b = ProgramBuilder::new(d);
            let x = b.input();
            let fx = b.inline(&field, x)?;
            let (_, dt) = b.inline_jvp(prev, x, Some(fx))?;
            let out = match dt {
                Some(n) => n,
                None => b.constant(vec![0.0; d]),
            };
            taylor.push(b.finish(out));
        }
        let mut penalty = Vec::with_capacity(MAX_TAYLOR_ORDER);
        for t in &taylor {
            let mut b = ProgramBuilder::new(d);
            let x = b.input();
            let v = b.inline(t, x)?;
            let s = b.dot(v, v)?;
            penalty.push(b.finish(s));
        }
        Ok(Self { field, taylor, penalty })
    }

    pub fn dim(&self) -> usize {
        self.field.input_dim()
    }

    pub fn field(&self) -> &Program {
        &self.field
    }

    pub fn taylor_program(&self, order: usize) -> Result<&Program, OdeError> {
        check_order(order)?;
        Ok(&self.taylor[order - 1])
    }

    pub fn penalty_program(&self, order: usize) -> Result<&Program, OdeError> {
        check_order(order)?;
        Ok(&self.penalty[order - 1])
    }

    /// Parameters touched by the field (and therefore by every derived program).
    pub fn param_subset(&self, params: &ParameterSet) -> ParamSubset {
        ParamSubset::new(params, self.field.param_ids().to_vec())
    }

    pub fn eval_field(&self, params: &ParameterSet, h: &[f64], out: &mut [f64]) -> Result<(), OdeError> {
        let v = self.field.evaluate(params, h)?;
        out.copy_from_slice(&v);
        Ok(())
    }
}

pub(crate) fn check_order(order: usize) -> Result<(), OdeError> {
    if (1..=MAX_TAYLOR_ORDER).contains(&order) {
        Ok(())
    } else {
        Err(OdeError::InvalidOrder(order))
    }
}
