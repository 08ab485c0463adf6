//! Finite-difference gradient oracle.

use serde::Serialize;

use crate::error::{Error, Result};
use crate::model::{Model, ModelGrads};

/// Difference stencil.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub enum FdScheme {
    /// `(f(θ+h) − f(θ−h)) / 2h` with `h = rel_step·max(1, |θ|)`.
    Central { rel_step: f64 },
    /// Four-point stencil, fourth order in `h`; tolerates a larger step and
    /// therefore less cancellation in the loss difference.
    FourPoint { rel_step: f64 },
    /// Ridders' extrapolation: central differences at steps shrinking from
    /// `rel_step·max(1, |θ|)` by 1.4, extrapolated to zero step; the entry
    /// with the smallest error estimate is kept.
    Extrapolated { rel_step: f64 },
}

impl Default for FdScheme {
    fn default() -> Self {
        FdScheme::Central { rel_step: 1e-5 }
    }
}

fn four_point(eval: &mut impl FnMut(f64) -> Result<f64>, h: f64) -> Result<f64> {
    let (p1, m1, p2, m2) = (eval(h)?, eval(-h)?, eval(2.0 * h)?, eval(-2.0 * h)?);
    Ok((8.0 * (p1 - m1) - (p2 - m2)) / (12.0 * h))
}

fn ridders(eval: &mut impl FnMut(f64) -> Result<f64>, h0: f64) -> Result<f64> {
    const SHRINK: f64 = 1.4;
    const ROWS: usize = 10;
    const SAFE: f64 = 2.0;
    let central =
        |eval: &mut dyn FnMut(f64) -> Result<f64>, h: f64| -> Result<f64> { Ok((eval(h)? - eval(-h)?) / (2.0 * h)) };
    let mut table = [[0.0_f64; ROWS]; ROWS];
    let mut h = h0;
    table[0][0] = central(eval, h)?;
    let mut best = table[0][0];
    let mut err = f64::INFINITY;
    for i in 1..ROWS {
        h /= SHRINK;
        table[0][i] = central(eval, h)?;
        let mut fac = SHRINK * SHRINK;
        for j in 1..=i {
            table[j][i] = (table[j - 1][i] * fac - table[j - 1][i - 1]) / (fac - 1.0);
            fac *= SHRINK * SHRINK;
            let e = (table[j][i] - table[j - 1][i])
                .abs()
                .max((table[j][i] - table[j - 1][i - 1]).abs());
            if e <= err {
                err = e;
                best = table[j][i];
            }
        }
        if (table[i][i] - table[i - 1][i - 1]).abs() >= SAFE * err {
            break;
        }
    }
    Ok(best)
}

impl FdScheme {
    /// Derivative at `theta` of the shifted loss `eval(δ) = f(θ + δ)`.
    fn estimate(&self, theta: f64, eval: &mut impl FnMut(f64) -> Result<f64>) -> Result<f64> {
        let scale = theta.abs().max(1.0);
        match *self {
            FdScheme::Central { rel_step } => {
                let h = rel_step * scale;
                Ok((eval(h)? - eval(-h)?) / (2.0 * h))
            }
            FdScheme::FourPoint { rel_step } => four_point(eval, rel_step * scale),
            FdScheme::Extrapolated { rel_step } => ridders(eval, rel_step * scale),
        }
    }
}

/// Numerical gradient of `loss` with respect to every scalar parameter of
/// `model`, in the order of [`Model::tensors`].
pub fn finite_difference_gradients<F>(model: &Model, mut loss: F, scheme: FdScheme) -> Result<Vec<(String, Vec<f64>)>>
where
    F: FnMut(&Model) -> Result<f64>,
{
    let mut probe = model.clone();
    let shapes: Vec<(String, usize)> = model.tensors().iter().map(|(n, t)| (n.clone(), t.len())).collect();
    let mut out = Vec::with_capacity(shapes.len());
    for (t, (name, len)) in shapes.into_iter().enumerate() {
        let mut grad = Vec::with_capacity(len);
        for j in 0..len {
            let theta = model.tensors()[t].1[j];
            let mut eval = |delta: f64| -> Result<f64> {
                probe.tensors_mut()[t].1[j] = theta + delta;
                let v = loss(&probe)?;
                if !v.is_finite() {
                    return Err(Error::Numerical(format!(
                        "loss is not finite while perturbing {name}[{j}]"
                    )));
                }
                Ok(v)
            };
            let g = scheme.estimate(theta, &mut eval)?;
            probe.tensors_mut()[t].1[j] = theta;
            grad.push(g);
        }
        out.push((name, grad));
    }
    Ok(out)
}

/// Worst entry of an analytic-versus-numeric comparison.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct GradientComparison {
    pub max_rel_err: f64,
    pub worst: String,
    pub analytic: f64,
    pub numeric: f64,
    pub entries: usize,
}

/// Relative error `|a − b| / max(|a|, |b|, 1e-12)`.
pub fn relative_error(a: f64, b: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(1e-12)
}

pub fn compare_gradients(analytic: &ModelGrads, numeric: &[(String, Vec<f64>)]) -> Result<GradientComparison> {
    let an = analytic.tensors();
    if an.len() != numeric.len() {
        return Err(Error::Contract("gradient sets have different tensor counts".into()));
    }
    let mut cmp = GradientComparison {
        max_rel_err: 0.0,
        worst: String::new(),
        analytic: 0.0,
        numeric: 0.0,
        entries: 0,
    };
    for ((name, a), (nname, b)) in an.iter().zip(numeric) {
        if name != nname || a.len() != b.len() {
            return Err(Error::Contract(format!(
                "gradient tensor {name} does not line up with {nname}"
            )));
        }
        for (j, (&x, &y)) in a.iter().zip(b).enumerate() {
            let e = relative_error(x, y);
            cmp.entries += 1;
            if e > cmp.max_rel_err || cmp.worst.is_empty() {
                cmp.max_rel_err = e.max(cmp.max_rel_err);
                cmp.worst = format!("{name}[{j}]");
                cmp.analytic = x;
                cmp.numeric = y;
            }
        }
    }
    Ok(cmp)
}
