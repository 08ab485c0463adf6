//! Exact step Jacobians and their products.
//!
//! State vectors are laid out neuron by neuron, `[y_1, z_1, y_2, z_2, …]`,
//! so the Jacobian of one step is block diagonal with one 2×2 block per
//! neuron.

use crate::error::{Error, Result};
use crate::linalg::Matrix;
use crate::recurrence::{sigma_hat, LayerParams, LayerState};

use super::trace::LayerTrace;

/// `∂(y_n, z_n)/∂(y_{n−1}, z_{n−1})` of one neuron.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct JacobianBlock {
    pub yy: f64,
    pub yz: f64,
    pub zy: f64,
    pub zz: f64,
}

impl JacobianBlock {
    /// Block of a neuron with effective step `h` and stiffness
    /// `k = w·tanh'(A) + α`: `[[1 − h²k, h], [−hk, 1]]`.
    pub fn from_stiffness(h: f64, k: f64) -> Self {
        Self {
            yy: 1.0 - h * h * k,
            yz: h,
            zy: -h * k,
            zz: 1.0,
        }
    }

    pub fn det(&self) -> f64 {
        self.yy * self.zz - self.yz * self.zy
    }

    pub fn apply(&self, v: [f64; 2]) -> [f64; 2] {
        [self.yy * v[0] + self.yz * v[1], self.zy * v[0] + self.zz * v[1]]
    }
}

fn tanh_prime(a: f64) -> f64 {
    let t = a.tanh();
    1.0 - t * t
}

/// Blocks for a step from positions `y_prev` with input transform `drive`.
pub fn step_jacobian_drive(
    params: &LayerParams,
    y_prev: &[f64],
    drive: &[f64],
    h: &[f64],
    alpha: f64,
) -> Vec<JacobianBlock> {
    (0..params.hidden())
        .map(|i| {
            let a = params.w[i] * y_prev[i] + drive[i] + params.b[i];
            JacobianBlock::from_stiffness(h[i], params.w[i] * tanh_prime(a) + alpha)
        })
        .collect()
}

/// Blocks of the step taken from `state` with input `x`.
pub fn step_jacobian(
    params: &LayerParams,
    state: &LayerState,
    x: &[f64],
    dt: f64,
    alpha: f64,
) -> Result<Vec<JacobianBlock>> {
    params.validate()?;
    if state.hidden() != params.hidden() || x.len() != params.input_dim() {
        return Err(Error::Contract("state or input does not match the layer".into()));
    }
    crate::recurrence::check_dt(dt)?;
    let h: Vec<f64> = params.c.iter().map(|&c| dt * sigma_hat(c)).collect();
    Ok(step_jacobian_drive(params, &state.y, &params.v.matvec(x), &h, alpha))
}

/// Blocks of step `n ≥ 1` of a trace.
pub fn trace_jacobian(params: &LayerParams, trace: &LayerTrace, n: usize, alpha: f64) -> Vec<JacobianBlock> {
    step_jacobian_drive(params, &trace.states[n - 1].y, trace.drive.row(n - 1), &trace.h, alpha)
}

/// Dense `2m × 2m` matrix of a block-diagonal Jacobian.
pub fn blocks_to_matrix(blocks: &[JacobianBlock]) -> Matrix {
    let m = blocks.len();
    let mut out = Matrix::zeros(2 * m, 2 * m);
    for (i, b) in blocks.iter().enumerate() {
        out.set(2 * i, 2 * i, b.yy);
        out.set(2 * i, 2 * i + 1, b.yz);
        out.set(2 * i + 1, 2 * i, b.zy);
        out.set(2 * i + 1, 2 * i + 1, b.zz);
    }
    out
}

/// `∂X_n/∂X_k = J_n · J_{n−1} ⋯ J_{k+1}` as a dense `2m × 2m` product.
pub fn jacobian_chain(params: &LayerParams, trace: &LayerTrace, alpha: f64, k: usize, n: usize) -> Result<Matrix> {
    if k >= n || n > trace.steps() {
        return Err(Error::Contract(format!(
            "chain needs k < n <= {}, got k = {k}, n = {n}",
            trace.steps()
        )));
    }
    let mut prod = Matrix::identity(2 * params.hidden());
    for j in k + 1..=n {
        prod = blocks_to_matrix(&trace_jacobian(params, trace, j, alpha)).matmul(&prod);
    }
    Ok(prod)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::analysis::trace::trace_model;
    use crate::model::{Model, ModelConfig, ReadoutSite};
    use crate::recurrence::forward_step;
    use crate::testutil::{random_params, random_state, rng};
    use rand::Rng;

    #[test]
    fn shear_when_the_neuron_is_unforced() {
        let mut p = LayerParams::zeros(1, 1);
        p.c[0] = 0.0;
        let blocks = step_jacobian(&p, &LayerState::zeros(1), &[0.3], 0.2, 0.0).unwrap();
        assert_eq!(
            blocks[0],
            JacobianBlock {
                yy: 1.0,
                yz: 0.1,
                zy: 0.0,
                zz: 1.0
            }
        );
    }

    #[test]
    fn determinant_is_one() {
        let mut r = rng(1);
        for _ in 0..2000 {
            let b = JacobianBlock::from_stiffness(r.gen_range(0.0..1.0), r.gen_range(-20.0..20.0));
            assert!((b.det() - 1.0).abs() < 1e-14);
        }
    }

    #[test]
    fn matches_finite_differences_of_the_step() {
        let mut r = rng(2);
        let (m, d, dt, alpha) = (4, 3, 0.3, 0.8);
        let p = random_params(&mut r, m, d, false);
        let s = random_state(&mut r, m, 1.0);
        let x: Vec<f64> = (0..d).map(|_| r.gen_range(-1.0..1.0)).collect();
        let blocks = step_jacobian(&p, &s, &x, dt, alpha).unwrap();
        let eps = 1e-6;
        for i in 0..m {
            for (col, bump_z) in [(0, false), (1, true)] {
                let shifted = |sign: f64| {
                    let mut t = s.clone();
                    if bump_z {
                        t.z[i] += sign * eps;
                    } else {
                        t.y[i] += sign * eps;
                    }
                    forward_step(&t, &p, &x, dt, alpha).unwrap()
                };
                let (up, dn) = (shifted(1.0), shifted(-1.0));
                let dy = (up.y[i] - dn.y[i]) / (2.0 * eps);
                let dz = (up.z[i] - dn.z[i]) / (2.0 * eps);
                let b = blocks[i];
                let (ay, az) = if col == 0 { (b.yy, b.zy) } else { (b.yz, b.zz) };
                assert!((dy - ay).abs() < 1e-6 && (dz - az).abs() < 1e-6);
                // Neurons are independent: other lanes do not move.
                for j in (0..m).filter(|&j| j != i) {
                    assert!((up.y[j] - dn.y[j]).abs() < 1e-15);
                }
            }
        }
    }

    fn single_layer_trace(seed: u64, steps: usize) -> (Model, LayerTrace, Matrix) {
        let mut r = rng(seed);
        let cfg = ModelConfig::new(1, 3, 2, 3, 0.1, 1.2, ReadoutSite::PerStep).identity_readout();
        let mut model = Model::zeros(cfg).unwrap();
        model.layers[0] = random_params(&mut r, 3, 2, false);
        let u = Matrix::from_fn(steps, 2, |_, _| r.gen_range(-1.0..1.0));
        let t = trace_model(&model, &u, None).unwrap().remove(0);
        (model, t, u)
    }

    #[test]
    fn chain_of_one_step_is_the_step() {
        let (model, t, _) = single_layer_trace(3, 10);
        let p = &model.layers[0];
        let one = jacobian_chain(p, &t, 1.2, 4, 5).unwrap();
        assert_eq!(one, blocks_to_matrix(&trace_jacobian(p, &t, 5, 1.2)));
        assert!(jacobian_chain(p, &t, 1.2, 5, 5).is_err());
        assert!(jacobian_chain(p, &t, 1.2, 0, 11).is_err());
    }

    #[test]
    fn chain_preserves_volume() {
        let (model, t, _) = single_layer_trace(4, 100);
        let chain = jacobian_chain(&model.layers[0], &t, 1.2, 0, 100).unwrap();
        assert!((chain.determinant().unwrap() - 1.0).abs() < 1e-8);
    }

    #[test]
    fn chain_propagates_perturbations() {
        // Perturb the state at step k, rerun the remaining steps, and compare
        // the change at step n with the chain applied to the perturbation.
        let (model, t, u) = single_layer_trace(5, 40);
        let p = &model.layers[0];
        let (k, n) = (7, 33);
        let chain = jacobian_chain(p, &t, 1.2, k, n).unwrap();
        let delta = [1e-7, -2e-7, 0.5e-7, 1e-7, -1e-7, 3e-7];
        let mut s = t.states[k].clone();
        for i in 0..3 {
            s.y[i] += delta[2 * i];
            s.z[i] += delta[2 * i + 1];
        }
        for j in k + 1..=n {
            s = forward_step(&s, p, u.row(j - 1), 0.1, 1.2).unwrap();
        }
        let predicted = chain.matvec(&delta);
        let mut num = 0.0;
        let mut den = 0.0;
        for i in 0..3 {
            let got = [s.y[i] - t.states[n].y[i], s.z[i] - t.states[n].z[i]];
            for c in 0..2 {
                num += (got[c] - predicted[2 * i + c]).powi(2);
                den += predicted[2 * i + c].powi(2);
            }
        }
        assert!((num / den).sqrt() < 1e-5);
    }
}

#[cfg(test)]
mod props {
    use super::*;
    use proptest::prelude::*;

    proptest! {
        #[test]
        fn every_step_block_has_unit_determinant(
            w in -3.0..3.0_f64,
            v in -2.0..2.0_f64,
            b in -2.0..2.0_f64,
            c in -6.0..6.0_f64,
            y in -10.0..10.0_f64,
            z in -10.0..10.0_f64,
            x in -1.0..1.0_f64,
            dt in 0.001..0.999_f64,
            alpha in 0.0..20.0_f64,
        ) {
            let mut p = LayerParams::zeros(1, 1);
            p.w[0] = w;
            p.v.set(0, 0, v);
            p.b[0] = b;
            p.c[0] = c;
            let state = LayerState::new(vec![y], vec![z]).unwrap();
            let block = step_jacobian(&p, &state, &[x], dt, alpha).unwrap()[0];
            let scale = 1.0 + block.yy.abs() + block.yz.abs() * block.zy.abs();
            prop_assert!((block.det() - 1.0).abs() <= 1e-15 * scale, "det {}", block.det());
        }
    }
}
