//! Central finite-difference verification of tape gradients.

use serde::Serialize;

use crate::graph::{GraphError, OpKind, Tape, Var};
use crate::tensor::{Gradients, ParamStore};

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct GradCheckConfig {
    /// Finite-difference half step.
    pub step: f64,
    /// Maximum allowed relative error.
    pub tolerance: f64,
    /// Lower bound on the relative-error denominator. Entries whose analytic
    /// and numeric gradients are both smaller than this are compared on an
    /// absolute scale of `floor`.
    pub floor: f64,
    /// Backward rule to corrupt on the analytic pass (negative control).
    #[serde(skip)]
    pub corrupt: Option<OpKind>,
}

impl Default for GradCheckConfig {
    fn default() -> Self {
        GradCheckConfig { step: 1e-4, tolerance: 1e-4, floor: 1e-4, corrupt: None }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct TensorCheck {
    pub name: String,
    pub entries: usize,
    pub max_rel_error: f64,
    pub max_abs_error: f64,
    pub worst_index: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct GradCheckReport {
    pub tolerance: f64,
    pub tensors: Vec<TensorCheck>,
}

impl GradCheckReport {
    pub fn max_rel_error(&self) -> f64 {
        self.tensors.iter().map(|t| t.max_rel_error).fold(0.0, f64::max)
    }

    pub fn passed(&self) -> bool {
        self.tensors.iter().all(|t| t.max_rel_error <= self.tolerance)
    }

    pub fn failures(&self) -> impl Iterator<Item = &TensorCheck> {
        self.tensors.iter().filter(move |t| t.max_rel_error > self.tolerance)
    }
}

pub fn relative_error(analytic: f64, numeric: f64, floor: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(floor)
}

/// Compares tape adjoints of the scalar built by `f` against central
/// differences, perturbing every entry of every parameter in `params`.
///
/// `f` must be deterministic and must build its output on the tape it is given.
pub fn grad_check<E, F>(params: &mut ParamStore, config: &GradCheckConfig, f: F) -> Result<GradCheckReport, E>
where
    E: From<GraphError>,
    F: Fn(&ParamStore, &mut Tape) -> Result<Var, E>,
{
    let mut tape = match config.corrupt {
        Some(kind) => Tape::with_corruption(kind),
        None => Tape::new(),
    };
    let loss = f(params, &mut tape)?;
    let mut grads = Gradients::zeros_like(params);
    tape.backward(loss, params, &mut grads)?;

    let eval = |params: &ParamStore| -> Result<f64, E> {
        let mut tape = Tape::new();
        let out = f(params, &mut tape)?;
        if out.len() != 1 {
            return Err(GraphError::NotScalar(out.len()).into());
        }
        Ok(tape.scalar(out))
    };

    let ids: Vec<_> = params.ids().collect();
    let mut tensors = Vec::with_capacity(ids.len());
    for id in ids {
        let n = params.get(id).len();
        let mut check = TensorCheck {
            name: params.name(id).to_string(),
            entries: n,
            max_rel_error: 0.0,
            max_abs_error: 0.0,
            worst_index: 0,
        };
        for k in 0..n {
            let original = params.get(id).data()[k];
            params.get_mut(id).data_mut()[k] = original + config.step;
            let plus = eval(params);
            params.get_mut(id).data_mut()[k] = original - config.step;
            let minus = eval(params);
            params.get_mut(id).data_mut()[k] = original;
            let numeric = (plus? - minus?) / (2.0 * config.step);
            let analytic = grads.get(id).data()[k];
            let rel = relative_error(analytic, numeric, config.floor);
            check.max_abs_error = check.max_abs_error.max((analytic - numeric).abs());
            if rel > check.max_rel_error || !rel.is_finite() {
                check.max_rel_error = if rel.is_finite() { rel } else { f64::INFINITY };
                check.worst_index = k;
            }
        }
        tensors.push(check);
    }
    Ok(GradCheckReport { tolerance: config.tolerance, tensors })
}
