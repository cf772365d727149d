//! Central-difference validation of analytic gradients.

use crate::error::{Error, Result};
use crate::tensor::Tensor;

use super::{Graph, NodeId};

/// Offset applied to a coordinate whose finite-difference stencil straddles
/// a kink (abs/hinge/min/clamp switch or a bilinear cell boundary).
const KINK_NUDGE: f64 = 1e-2;
const MAX_NUDGES: usize = 8;

#[derive(Debug, Clone, PartialEq)]
pub struct GradCheckReport {
    /// Max over coordinates of `|analytic - numeric| / max(1e-8, |numeric|)`.
    pub max_rel_error: f64,
    /// Parameter and flat element index of the worst coordinate.
    pub worst: (usize, usize),
    pub worst_analytic: f64,
    pub worst_numeric: f64,
    pub coordinates: usize,
    /// Number of times a coordinate was moved off a kink.
    pub nudges: usize,
}

impl GradCheckReport {
    pub fn passes(&self, tol: f64) -> bool {
        self.max_rel_error < tol
    }
}

struct Eval {
    value: f64,
    signature: u64,
}

fn evaluate<F>(f: &F, point: &[Tensor]) -> Result<(Graph, Vec<NodeId>, NodeId)>
where
    F: Fn(&mut Graph, &[NodeId]) -> Result<NodeId>,
{
    let mut g = Graph::new();
    let params: Vec<NodeId> = point.iter().map(|t| g.parameter(t.clone())).collect();
    let loss = f(&mut g, &params)?;
    Ok((g, params, loss))
}

fn eval_value<F>(f: &F, point: &[Tensor], at: (usize, usize)) -> Result<Eval>
where
    F: Fn(&mut Graph, &[NodeId]) -> Result<NodeId>,
{
    let (g, _, loss) = evaluate(f, point).map_err(|e| match e {
        Error::NonFinite(m) => Error::NonFinite(format!("{m} at parameter {} element {}", at.0, at.1)),
        other => other,
    })?;
    let value = g.value(loss).item();
    if !value.is_finite() {
        return Err(Error::NonFinite(format!("function value {value} at parameter {} element {}", at.0, at.1)));
    }
    Ok(Eval { value, signature: g.branch_signature() })
}

fn analytic<F>(f: &F, point: &[Tensor]) -> Result<(Vec<Tensor>, u64)>
where
    F: Fn(&mut Graph, &[NodeId]) -> Result<NodeId>,
{
    let (g, params, loss) = evaluate(f, point)?;
    let grads = g.backward(loss)?;
    Ok((params.iter().map(|p| grads[p].clone()).collect(), g.branch_signature()))
}

/// Compares reverse-mode gradients of `f` with central differences at
/// `point`.
///
/// `f` records a scalar loss on a fresh graph given one parameter node per
/// tensor in `point`. When the stencil `x ± step` crosses a kink of the
/// function the coordinate is moved by 1e-2 and re-checked, so only smooth
/// pieces are compared.
pub fn finite_diff_check<F>(f: F, point: &[Tensor], step: f64) -> Result<GradCheckReport>
where
    F: Fn(&mut Graph, &[NodeId]) -> Result<NodeId>,
{
    if !(step > 0.0) {
        return Err(Error::InvalidArgument(format!("finite difference step must be > 0, got {step}")));
    }
    let mut point: Vec<Tensor> = point.to_vec();
    let (mut grads, mut sig0) = analytic(&f, &point)?;
    let mut report = GradCheckReport {
        max_rel_error: 0.0,
        worst: (0, 0),
        worst_analytic: 0.0,
        worst_numeric: 0.0,
        coordinates: 0,
        nudges: 0,
    };
    for k in 0..point.len() {
        for i in 0..point[k].data().len() {
            let mut attempt = 0;
            let numeric = loop {
                let x0 = point[k].data()[i];
                point[k].data_mut()[i] = x0 + step;
                let plus = eval_value(&f, &point, (k, i))?;
                point[k].data_mut()[i] = x0 - step;
                let minus = eval_value(&f, &point, (k, i))?;
                point[k].data_mut()[i] = x0;
                let smooth = plus.signature == sig0 && minus.signature == sig0;
                if smooth || attempt == MAX_NUDGES {
                    break (plus.value - minus.value) / (2.0 * step);
                }
                attempt += 1;
                report.nudges += 1;
                // Alternate +1, -1, +2, -2, ... nudges around the original value.
                let magnitude = attempt.div_ceil(2) as f64 * KINK_NUDGE;
                let sign = if attempt % 2 == 1 { 1.0 } else { -1.0 };
                let prev_offset = if attempt == 1 {
                    0.0
                } else {
                    let m = (attempt - 1).div_ceil(2) as f64 * KINK_NUDGE;
                    if (attempt - 1) % 2 == 1 {
                        m
                    } else {
                        -m
                    }
                };
                point[k].data_mut()[i] = x0 - prev_offset + sign * magnitude;
                let (g, s) = analytic(&f, &point)?;
                grads = g;
                sig0 = s;
            };
            let a = grads[k].data()[i];
            let rel = (a - numeric).abs() / numeric.abs().max(1e-8);
            report.coordinates += 1;
            if rel > report.max_rel_error || report.coordinates == 1 {
                report.max_rel_error = rel;
                report.worst = (k, i);
                report.worst_analytic = a;
                report.worst_numeric = numeric;
            }
        }
    }
    Ok(report)
}
