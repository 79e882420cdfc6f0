//! Central finite-difference checking of reverse-mode gradients.
//!
//! The numerical side only ever evaluates forward values, so it shares no code
//! path with [`Tape::backward`].

use crate::autograd::{Tape, Var};
use crate::error::Result;
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy)]
pub struct GradCheckConfig {
    pub step: f64,
    /// Denominator floor of the relative error, so that gradients that are
    /// zero up to rounding do not blow the ratio up.
    pub abs_floor: f64,
    /// Check at most this many coordinates per input (evenly strided); `None` checks all.
    pub max_coords_per_input: Option<usize>,
}

impl Default for GradCheckConfig {
    fn default() -> Self {
        GradCheckConfig {
            step: 1e-5,
            abs_floor: 1e-6,
            max_coords_per_input: None,
        }
    }
}

#[derive(Debug, Clone)]
pub struct GradCheckReport {
    pub max_rel_error: f64,
    pub worst_input: usize,
    pub worst_coord: usize,
    pub analytic: f64,
    pub numeric: f64,
    pub coords_checked: usize,
}

pub fn relative_error(analytic: f64, numeric: f64, floor: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(floor)
}

/// Compares reverse-mode gradients of the scalar built by `f` against central
/// differences with respect to every tensor in `inputs`.
///
/// `f` must be deterministic: it is re-run for every perturbed coordinate.
pub fn check_gradients<F>(inputs: &[Tensor], config: GradCheckConfig, f: F) -> Result<GradCheckReport>
where
    F: Fn(&mut Tape, &[Var]) -> Result<Var>,
{
    let eval = |values: &[Tensor]| -> Result<f64> {
        let mut tape = Tape::new();
        let vars: Vec<Var> = values.iter().map(|t| tape.leaf(t.clone(), false)).collect();
        let out = f(&mut tape, &vars)?;
        tape.value(out).item()
    };

    let mut tape = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|t| tape.leaf(t.clone(), true)).collect();
    let loss = f(&mut tape, &vars)?;
    let grads = tape.backward(loss)?;

    let mut report = GradCheckReport {
        max_rel_error: 0.0,
        worst_input: 0,
        worst_coord: 0,
        analytic: 0.0,
        numeric: 0.0,
        coords_checked: 0,
    };
    let mut values = inputs.to_vec();
    for (k, var) in vars.iter().enumerate() {
        let n = inputs[k].len();
        let stride = match config.max_coords_per_input {
            Some(m) if m > 0 && n > m => n.div_ceil(m),
            _ => 1,
        };
        for i in (0..n).step_by(stride) {
            let analytic = grads.get(*var).map_or(0.0, |g| g.data()[i]);
            let orig = inputs[k].data()[i];
            values[k].data_mut()[i] = orig + config.step;
            let plus = eval(&values)?;
            values[k].data_mut()[i] = orig - config.step;
            let minus = eval(&values)?;
            values[k].data_mut()[i] = orig;
            let numeric = (plus - minus) / (2.0 * config.step);
            let err = relative_error(analytic, numeric, config.abs_floor);
            report.coords_checked += 1;
            if err > report.max_rel_error {
                report.max_rel_error = err;
                report.worst_input = k;
                report.worst_coord = i;
                report.analytic = analytic;
                report.numeric = numeric;
            }
        }
    }
    Ok(report)
}
