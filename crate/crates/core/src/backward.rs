//! Backpropagation through time for a single layer.
//!
//! Both variants run the same adjoint recursion backwards over the sequence.
//! [`layer_backward_stored`] reads previous states from a stored
//! [`Trajectory`]; [`layer_backward_reconstructing`] starts from the final
//! state alone and rebuilds each earlier state with the exact inverse step,
//! so its hidden-state storage does not grow with the sequence length.

use serde::{Deserialize, Serialize};

use crate::error::{ensure_len, Error, Result};
use crate::linalg::{gemm, Matrix};
use crate::recurrence::{check_dt, input_transform, sigma_hat_prime, unstep_lane, LayerParams, LayerState, Trajectory};

/// Reconstructed states above this magnitude abort the backward sweep.
pub const DRIFT_LIMIT: f64 = 1e6;

/// Gradients for every tensor in [`LayerParams`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LayerGrads {
    pub w: Vec<f64>,
    pub v: Matrix,
    pub b: Vec<f64>,
    pub c: Vec<f64>,
    pub lambda: Option<Matrix>,
}

impl LayerGrads {
    pub fn zeros_like(params: &LayerParams) -> Self {
        let m = params.hidden();
        Self {
            w: vec![0.0; m],
            v: Matrix::zeros(m, params.input_dim()),
            b: vec![0.0; m],
            c: vec![0.0; m],
            lambda: params.lambda.as_ref().map(|l| Matrix::zeros(l.rows(), l.cols())),
        }
    }

    /// Named flat views in a fixed order: `w`, `V`, `b`, `c`, then `Lambda`.
    pub fn tensors(&self) -> Vec<(&'static str, &[f64])> {
        let mut out = vec![
            ("w", self.w.as_slice()),
            ("V", self.v.data()),
            ("b", self.b.as_slice()),
            ("c", self.c.as_slice()),
        ];
        if let Some(l) = &self.lambda {
            out.push(("Lambda", l.data()));
        }
        out
    }

    pub fn tensors_mut(&mut self) -> Vec<(&'static str, &mut [f64])> {
        let mut out = vec![
            ("w", self.w.as_mut_slice()),
            ("V", self.v.data_mut()),
            ("b", self.b.as_mut_slice()),
            ("c", self.c.as_mut_slice()),
        ];
        if let Some(l) = &mut self.lambda {
            out.push(("Lambda", l.data_mut()));
        }
        out
    }

    pub fn max_abs(&self) -> f64 {
        self.tensors()
            .iter()
            .flat_map(|(_, t)| t.iter())
            .fold(0.0, |m, v| m.max(v.abs()))
    }

    pub fn add_assign(&mut self, other: &LayerGrads) {
        for ((_, a), (_, b)) in self.tensors_mut().into_iter().zip(other.tensors()) {
            a.iter_mut().zip(b).for_each(|(x, y)| *x += y);
        }
    }

    pub fn scale(&mut self, s: f64) {
        for (_, t) in self.tensors_mut() {
            t.iter_mut().for_each(|x| *x *= s);
        }
    }
}

/// Result of a single-layer backward sweep.
#[derive(Debug, Clone)]
pub struct LayerBackward {
    pub grads: LayerGrads,
    /// `∂E/∂x_n` for every step, `N × d_in`, to feed the layer below.
    pub input_grad: Matrix,
}

/// Running adjoints of position and velocity during the backward sweep.
///
/// `k` counts processed steps; the sweep starts from `δ^y = ∂E/∂y_N`,
/// `δ^z = 0`.
#[derive(Debug, Clone, PartialEq)]
pub struct AdjointState {
    pub delta_y: Vec<f64>,
    pub delta_z: Vec<f64>,
    pub k: usize,
}

impl AdjointState {
    pub fn new(m: usize) -> Self {
        Self {
            delta_y: vec![0.0; m],
            delta_z: vec![0.0; m],
            k: 0,
        }
    }
}

/// Counts hidden-state floats held alive by a computation.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct StateMeter {
    current: usize,
    peak: usize,
}

impl StateMeter {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn retain(&mut self, floats: usize) {
        self.current += floats;
        self.peak = self.peak.max(self.current);
    }

    pub fn release(&mut self, floats: usize) {
        self.current = self.current.saturating_sub(floats);
    }

    pub fn current(&self) -> usize {
        self.current
    }

    pub fn peak(&self) -> usize {
        self.peak
    }
}

/// One adjoint step for a single neuron lane.
///
/// On entry `ay`, `az` hold the adjoints of `y_n`, `z_n` (upstream already
/// added); on exit they hold the adjoints of `y_{n-1}`, `z_{n-1}`. `t` is
/// `tanh(A_n)` evaluated at `y_prev`. Returns the pre-activation adjoint and
/// the contribution to the effective-step adjoint.
#[inline(always)]
#[allow(clippy::too_many_arguments)]
pub(crate) fn adjoint_lane(
    y_prev: f64,
    z_n: f64,
    t: f64,
    w: f64,
    h: f64,
    alpha: f64,
    ay: &mut f64,
    az: &mut f64,
) -> (f64, f64) {
    let az_tot = *az + h * *ay;
    let ga = -az_tot * h * (1.0 - t * t);
    let gh = *ay * z_n - az_tot * (t + alpha * y_prev);
    *ay += ga * w - az_tot * h * alpha;
    *az = az_tot;
    (ga, gh)
}

/// `∂h/∂c` for `h = dt·σ̂(c)`.
#[inline]
pub(crate) fn step_chain(dt: f64, c: f64) -> f64 {
    dt * sigma_hat_prime(c)
}

pub(crate) fn check_drift(y: f64, z: f64) -> Result<()> {
    if y.abs() <= DRIFT_LIMIT && z.abs() <= DRIFT_LIMIT {
        Ok(())
    } else {
        Err(Error::Numerical(format!(
            "reconstructed state left the trusted range (|y| = {:e}, |z| = {:e})",
            y.abs(),
            z.abs()
        )))
    }
}

fn check_upstream(upstream: &Matrix, steps: usize, m: usize) -> Result<()> {
    if upstream.rows() != steps {
        return Err(Error::Contract(format!(
            "upstream gradient has {} steps but the sequence has {steps}",
            upstream.rows()
        )));
    }
    if upstream.cols() != m {
        return Err(Error::Contract(format!(
            "upstream gradient width {} does not match hidden size {m}",
            upstream.cols()
        )));
    }
    Ok(())
}

/// Backward sweep over a stored trajectory.
///
/// `upstream.row(n)` is `∂E/∂y_{n+1}`; rows the loss does not touch are zero.
pub fn layer_backward_stored(
    traj: &Trajectory,
    upstream: &Matrix,
    params: &LayerParams,
    dt: f64,
    alpha: f64,
) -> Result<LayerBackward> {
    params.validate()?;
    check_dt(dt)?;
    let m = params.hidden();
    let steps = traj.len();
    if steps == 0 || traj.inputs.rows() != steps {
        return Err(Error::Contract(format!(
            "trajectory holds {steps} states but {} inputs",
            traj.inputs.rows()
        )));
    }
    check_upstream(upstream, steps, m)?;
    ensure_len("trajectory input width", traj.inputs.cols(), params.input_dim())?;

    let drive = input_transform(&traj.inputs, &params.v);
    let h = params.effective_steps(dt);
    let mut grads = LayerGrads::zeros_like(params);
    let mut gh = vec![0.0; m];
    let mut ga_all = Matrix::zeros(steps, m);
    let mut adj = AdjointState::new(m);

    for n in (1..=steps).rev() {
        let prev = traj.state(n - 1);
        let cur = traj.state(n);
        let up = upstream.row(n - 1);
        let d = drive.row(n - 1);
        let ga_row = ga_all.row_mut(n - 1);
        for i in 0..m {
            let yp = prev.y[i];
            let t = (params.w[i] * yp + d[i] + params.b[i]).tanh();
            let ay = &mut adj.delta_y[i];
            *ay += up[i];
            let (ga, g) = adjoint_lane(yp, cur.z[i], t, params.w[i], h[i], alpha, ay, &mut adj.delta_z[i]);
            ga_row[i] = ga;
            gh[i] += g;
            grads.w[i] += ga * yp;
            grads.b[i] += ga;
        }
        adj.k += 1;
    }
    for i in 0..m {
        grads.c[i] = gh[i] * step_chain(dt, params.c[i]);
    }
    // Input-weight gradient and input gradient as two sequence-wide products.
    let d_in = params.input_dim();
    gemm(
        m,
        steps,
        d_in,
        ga_all.data(),
        true,
        traj.inputs.data(),
        false,
        grads.v.data_mut(),
        0.0,
    );
    let mut input_grad = Matrix::zeros(steps, d_in);
    gemm(
        steps,
        m,
        d_in,
        ga_all.data(),
        false,
        params.v.data(),
        false,
        input_grad.data_mut(),
        0.0,
    );
    Ok(LayerBackward { grads, input_grad })
}

/// Backward sweep that rebuilds earlier states from `final_state` with the
/// exact inverse step instead of reading them from storage.
///
/// The input sequence (and its transform) is kept; hidden storage is one
/// state plus one adjoint regardless of `N`, as recorded in `meter`.
pub fn layer_backward_reconstructing(
    final_state: &LayerState,
    inputs: &Matrix,
    upstream: &Matrix,
    params: &LayerParams,
    dt: f64,
    alpha: f64,
    meter: &mut StateMeter,
) -> Result<LayerBackward> {
    params.validate()?;
    check_dt(dt)?;
    let m = params.hidden();
    let steps = inputs.rows();
    if steps == 0 {
        return Err(Error::Contract("input sequence is empty".into()));
    }
    check_upstream(upstream, steps, m)?;
    ensure_len("final y", final_state.y.len(), m)?;
    ensure_len("final z", final_state.z.len(), m)?;
    ensure_len("input width", inputs.cols(), params.input_dim())?;

    let drive = input_transform(inputs, &params.v);
    let h = params.effective_steps(dt);
    let d_in = params.input_dim();
    let mut grads = LayerGrads::zeros_like(params);
    let mut gh = vec![0.0; m];
    let mut input_grad = Matrix::zeros(steps, d_in);
    let mut ga = vec![0.0; m];

    let mut state = final_state.clone();
    meter.retain(2 * m);
    let mut adj = AdjointState::new(m);
    meter.retain(2 * m);

    for n in (1..=steps).rev() {
        let up = upstream.row(n - 1);
        let d = drive.row(n - 1);
        for i in 0..m {
            let (y, z) = (state.y[i], state.z[i]);
            let yp = y - h[i] * z;
            let t = (params.w[i] * yp + d[i] + params.b[i]).tanh();
            let zp = z + h[i] * (t + alpha * yp);
            check_drift(yp, zp)?;
            let ay = &mut adj.delta_y[i];
            *ay += up[i];
            let (g, gstep) = adjoint_lane(yp, z, t, params.w[i], h[i], alpha, ay, &mut adj.delta_z[i]);
            ga[i] = g;
            gh[i] += gstep;
            grads.w[i] += g * yp;
            grads.b[i] += g;
            state.y[i] = yp;
            state.z[i] = zp;
        }
        let x = inputs.row(n - 1);
        for (i, &g) in ga.iter().enumerate() {
            if g != 0.0 {
                for (gv, xv) in grads.v.row_mut(i).iter_mut().zip(x) {
                    *gv += g * xv;
                }
            }
        }
        let gx = params.v.matvec_t(&ga);
        input_grad.row_mut(n - 1).copy_from_slice(&gx);
        adj.k += 1;
    }
    for i in 0..m {
        grads.c[i] = gh[i] * step_chain(dt, params.c[i]);
    }
    meter.release(4 * m);
    Ok(LayerBackward { grads, input_grad })
}

/// Walks the inverse map from `final_state` back to the initial state.
///
/// Returns states `0..=N`, index `0` being the reconstructed initial state.
pub fn reconstruct_states(
    final_state: &LayerState,
    inputs: &Matrix,
    params: &LayerParams,
    dt: f64,
    alpha: f64,
) -> Result<Vec<LayerState>> {
    params.validate()?;
    check_dt(dt)?;
    let m = params.hidden();
    ensure_len("final y", final_state.y.len(), m)?;
    ensure_len("input width", inputs.cols(), params.input_dim())?;
    let drive = input_transform(inputs, &params.v);
    let h = params.effective_steps(dt);
    let steps = inputs.rows();
    let mut out = vec![final_state.clone()];
    let mut s = final_state.clone();
    for n in (0..steps).rev() {
        let d = drive.row(n);
        for i in 0..m {
            let (y, z) = unstep_lane(s.y[i], s.z[i], d[i], params.w[i], params.b[i], h[i], alpha);
            check_drift(y, z)?;
            s.y[i] = y;
            s.z[i] = z;
        }
        out.push(s.clone());
    }
    out.reverse();
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::recurrence::{layer_forward, sigma_hat};
    use crate::testutil::{random_params, random_state, rng};
    use rand::Rng;

    /// Loss `Σ_n ⟨g_n, y_n⟩` for a fixed weighting sequence `g`.
    fn weighted_loss(params: &LayerParams, init: &LayerState, inputs: &Matrix, g: &Matrix, dt: f64, alpha: f64) -> f64 {
        let run = layer_forward(init, inputs, params, dt, alpha, false).unwrap();
        run.outputs.data().iter().zip(g.data()).map(|(a, b)| a * b).sum()
    }

    fn central(mut f: impl FnMut(f64) -> f64, x: f64) -> f64 {
        let h = 1e-5 * x.abs().max(1.0);
        (f(x + h) - f(x - h)) / (2.0 * h)
    }

    fn rel_err(a: f64, b: f64) -> f64 {
        (a - b).abs() / a.abs().max(b.abs()).max(1e-12)
    }

    fn instance(seed: u64, m: usize, d: usize, steps: usize) -> (LayerParams, LayerState, Matrix, Matrix) {
        let mut r = rng(seed);
        let p = random_params(&mut r, m, d, false);
        let init = random_state(&mut r, m, 0.3);
        let inputs = Matrix::from_fn(steps, d, |_, _| r.gen_range(-1.0..1.0));
        let g = Matrix::from_fn(steps, m, |_, _| r.gen_range(-1.0..1.0));
        (p, init, inputs, g)
    }

    #[test]
    fn zero_upstream_gives_zero_gradients() {
        let (p, init, inputs, _) = instance(1, 4, 2, 12);
        let run = layer_forward(&init, &inputs, &p, 0.2, 1.0, true).unwrap();
        let z = Matrix::zeros(12, 4);
        let out = layer_backward_stored(run.trajectory.as_ref().unwrap(), &z, &p, 0.2, 1.0).unwrap();
        assert_eq!(out.grads.max_abs(), 0.0);
        assert_eq!(out.input_grad.max_abs(), 0.0);
        let mut meter = StateMeter::new();
        let out = layer_backward_reconstructing(&run.final_state, &inputs, &z, &p, 0.2, 1.0, &mut meter).unwrap();
        assert_eq!(out.grads.max_abs(), 0.0);
    }

    #[test]
    fn single_step_closed_form() {
        // One step from rest: y1 = -h²·tanh(V u + b), so ∂y1/∂b = -h²·σ'(V u + b)
        // and ∂y1/∂w vanishes because it is multiplied by y0 = 0.
        let p = LayerParams {
            w: vec![0.7],
            v: Matrix::from_vec(1, 1, vec![0.9]).unwrap(),
            b: vec![0.2],
            c: vec![0.4],
            lambda: None,
        };
        let (dt, u) = (0.3, 0.5);
        let inputs = Matrix::from_vec(1, 1, vec![u]).unwrap();
        let run = layer_forward(&LayerState::zeros(1), &inputs, &p, dt, 1.3, true).unwrap();
        let up = Matrix::from_vec(1, 1, vec![1.0]).unwrap();
        let g = layer_backward_stored(run.trajectory.as_ref().unwrap(), &up, &p, dt, 1.3).unwrap();
        let h = dt * sigma_hat(0.4);
        let a: f64 = 0.9 * u + 0.2;
        let want_b = -h * h * (1.0 - a.tanh().powi(2));
        assert!((g.grads.b[0] - want_b).abs() < 1e-15);
        assert_eq!(g.grads.w[0], 0.0);
        // ∂y1/∂c = -2 h tanh(A) · dt σ̂'(c)
        let want_c = -2.0 * h * a.tanh() * dt * sigma_hat_prime(0.4);
        assert!((g.grads.c[0] - want_c).abs() < 1e-15);
    }

    #[test]
    fn stored_backward_matches_finite_differences() {
        let (p, init, inputs, g) = instance(11, 6, 3, 25);
        let (dt, alpha) = (0.15, 0.9);
        let run = layer_forward(&init, &inputs, &p, dt, alpha, true).unwrap();
        let out = layer_backward_stored(run.trajectory.as_ref().unwrap(), &g, &p, dt, alpha).unwrap();
        let mut q = p.clone();
        let names = ["w", "V", "b", "c"];
        for (t, name) in names.iter().enumerate() {
            let len = out.grads.tensors()[t].1.len();
            for j in 0..len {
                let x0 = p_tensor(&p, t)[j];
                let fd = central(
                    |x| {
                        p_tensor_mut(&mut q, t)[j] = x;
                        weighted_loss(&q, &init, &inputs, &g, dt, alpha)
                    },
                    x0,
                );
                p_tensor_mut(&mut q, t)[j] = x0;
                let an = out.grads.tensors()[t].1[j];
                assert!(rel_err(an, fd) < 1e-6, "{name}[{j}]: analytic {an}, numeric {fd}");
            }
        }
        // Input gradient against perturbing the inputs.
        let mut xin = inputs.clone();
        for n in [0, 7, 24] {
            for k in 0..3 {
                let x0 = inputs.get(n, k);
                let fd = central(
                    |x| {
                        xin.set(n, k, x);
                        weighted_loss(&p, &init, &xin, &g, dt, alpha)
                    },
                    x0,
                );
                xin.set(n, k, x0);
                assert!(rel_err(out.input_grad.get(n, k), fd) < 1e-6);
            }
        }
    }

    fn p_tensor(p: &LayerParams, t: usize) -> &[f64] {
        match t {
            0 => &p.w,
            1 => p.v.data(),
            2 => &p.b,
            _ => &p.c,
        }
    }

    fn p_tensor_mut(p: &mut LayerParams, t: usize) -> &mut [f64] {
        match t {
            0 => &mut p.w,
            1 => p.v.data_mut(),
            2 => &mut p.b,
            _ => &mut p.c,
        }
    }

    #[test]
    fn reconstructing_matches_stored() {
        let (p, init, inputs, g) = instance(12, 6, 3, 25);
        let run = layer_forward(&init, &inputs, &p, 0.1, 2.0, true).unwrap();
        let a = layer_backward_stored(run.trajectory.as_ref().unwrap(), &g, &p, 0.1, 2.0).unwrap();
        let mut meter = StateMeter::new();
        let b = layer_backward_reconstructing(&run.final_state, &inputs, &g, &p, 0.1, 2.0, &mut meter).unwrap();
        for ((_, x), (_, y)) in a.grads.tensors().iter().zip(b.grads.tensors()) {
            for (u, v) in x.iter().zip(y) {
                assert!(rel_err(*u, *v) < 1e-7);
            }
        }
        for (u, v) in a.input_grad.data().iter().zip(b.input_grad.data()) {
            assert!((u - v).abs() < 1e-10);
        }
    }

    #[test]
    fn peak_state_storage_is_independent_of_length() {
        let mut peaks = Vec::new();
        for steps in [100, 1000] {
            let (p, init, inputs, g) = instance(13, 5, 2, steps);
            let run = layer_forward(&init, &inputs, &p, 0.1, 1.0, false).unwrap();
            let mut meter = StateMeter::new();
            layer_backward_reconstructing(&run.final_state, &inputs, &g, &p, 0.1, 1.0, &mut meter).unwrap();
            assert_eq!(meter.current(), 0);
            peaks.push(meter.peak());
        }
        assert_eq!(peaks[0], peaks[1]);
        assert_eq!(peaks[0], 4 * 5);
    }

    #[test]
    fn adjoint_is_linear_in_upstream() {
        let (p, init, inputs, g) = instance(14, 4, 2, 30);
        let run = layer_forward(&init, &inputs, &p, 0.2, 0.5, true).unwrap();
        let traj = run.trajectory.as_ref().unwrap();
        let a = layer_backward_stored(traj, &g, &p, 0.2, 0.5).unwrap();
        let g3 = Matrix::from_fn(30, 4, |i, j| -2.5 * g.get(i, j));
        let b = layer_backward_stored(traj, &g3, &p, 0.2, 0.5).unwrap();
        for ((_, x), (_, y)) in a.grads.tensors().iter().zip(b.grads.tensors()) {
            for (u, v) in x.iter().zip(y) {
                assert!((-2.5 * u - v).abs() <= 1e-13 * v.abs().max(1.0));
            }
        }
    }

    #[test]
    fn length_mismatch_is_a_contract_error() {
        let (p, init, inputs, _) = instance(15, 3, 2, 10);
        let run = layer_forward(&init, &inputs, &p, 0.2, 0.5, true).unwrap();
        let bad = Matrix::zeros(9, 3);
        let err = layer_backward_stored(run.trajectory.as_ref().unwrap(), &bad, &p, 0.2, 0.5);
        assert!(matches!(err, Err(Error::Contract(_))));
        let mut meter = StateMeter::new();
        let err = layer_backward_reconstructing(&run.final_state, &inputs, &bad, &p, 0.2, 0.5, &mut meter);
        assert!(matches!(err, Err(Error::Contract(_))));
    }

    #[test]
    fn runaway_reconstruction_is_reported() {
        let (p, _, inputs, g) = instance(16, 3, 2, 10);
        let wild = LayerState::new(vec![1e7; 3], vec![1e9; 3]).unwrap();
        let mut meter = StateMeter::new();
        let err = layer_backward_reconstructing(&wild, &inputs, &g, &p, 0.5, 0.5, &mut meter);
        assert!(matches!(err, Err(Error::Numerical(_))));
    }

    #[test]
    fn long_reconstruction_tracks_stored_states() {
        let (p, init, inputs, _) = instance(17, 16, 2, 1000);
        let run = layer_forward(&init, &inputs, &p, 0.1, 1.0, true).unwrap();
        let traj = run.trajectory.unwrap();
        let rebuilt = reconstruct_states(&run.final_state, &inputs, &p, 0.1, 1.0).unwrap();
        let err = (0..=1000)
            .map(|n| rebuilt[n].max_abs_diff(traj.state(n)))
            .fold(0.0, f64::max);
        assert!(err < 1e-9, "max reconstruction error {err}");
    }
}
