//! Single-layer oscillator recurrence.
//!
//! Each hidden neuron `i` is an undamped oscillator with position `y_i` and
//! velocity `z_i`, advanced by one symplectic-Euler step per input:
//!
//! ```text
//! h_i = dt · σ̂(c_i)
//! z_n = z_{n-1} - h ⊙ [tanh(w ⊙ y_{n-1} + V x_n + b) + α y_{n-1}]
//! y_n = y_{n-1} + h ⊙ z_n
//! ```
//!
//! The velocity is updated first from the old position, then the position
//! from the new velocity. Running the two lines backwards in the opposite
//! order (position first) undoes a step exactly, which is what lets the
//! backward pass rebuild hidden states instead of storing them.

use serde::{Deserialize, Serialize};

use crate::error::{ensure_len, Error, Result};
use crate::linalg::{gemm, Matrix};

/// Time-step modulation `σ̂(u) = 0.5 + 0.5·tanh(u/2)`, a logistic sigmoid.
#[inline]
pub fn sigma_hat(u: f64) -> f64 {
    0.5 + 0.5 * (0.5 * u).tanh()
}

/// Derivative of [`sigma_hat`].
#[inline]
pub fn sigma_hat_prime(u: f64) -> f64 {
    let s = sigma_hat(u);
    s * (1.0 - s)
}

/// Trainable weights of one layer.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LayerParams {
    /// Per-neuron frequency modulation.
    pub w: Vec<f64>,
    /// Input weights, `m × d_in`.
    pub v: Matrix,
    pub b: Vec<f64>,
    /// Raw (pre-sigmoid) time-step modulation.
    pub c: Vec<f64>,
    /// Residual skip weights, `m × m`, for layers fed by a skip connection.
    pub lambda: Option<Matrix>,
}

impl LayerParams {
    pub fn zeros(hidden: usize, input_dim: usize) -> Self {
        Self {
            w: vec![0.0; hidden],
            v: Matrix::zeros(hidden, input_dim),
            b: vec![0.0; hidden],
            c: vec![0.0; hidden],
            lambda: None,
        }
    }

    #[inline]
    pub fn hidden(&self) -> usize {
        self.w.len()
    }

    #[inline]
    pub fn input_dim(&self) -> usize {
        self.v.cols()
    }

    /// Checks mutual dimensions and finiteness.
    pub fn validate(&self) -> Result<()> {
        let m = self.hidden();
        if m == 0 {
            return Err(Error::Config("layer has no hidden units".into()));
        }
        ensure_len("bias b", self.b.len(), m)?;
        ensure_len("time-step vector c", self.c.len(), m)?;
        ensure_len("rows of V", self.v.rows(), m)?;
        if let Some(l) = &self.lambda {
            if l.shape() != (m, m) {
                return Err(Error::Config(format!(
                    "residual weights must be {m}x{m}, got {}x{}",
                    l.rows(),
                    l.cols()
                )));
            }
        }
        let finite = self.w.iter().chain(&self.b).chain(&self.c).all(|v| v.is_finite())
            && self.v.all_finite()
            && self.lambda.as_ref().is_none_or(Matrix::all_finite);
        if !finite {
            return Err(Error::Numerical("layer parameters contain non-finite entries".into()));
        }
        Ok(())
    }

    /// Per-neuron effective steps `dt · σ̂(c_i)`.
    pub fn effective_steps(&self, dt: f64) -> Vec<f64> {
        self.c.iter().map(|&c| dt * sigma_hat(c)).collect()
    }
}

/// Position and velocity of a layer's oscillators at one time step.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LayerState {
    pub y: Vec<f64>,
    pub z: Vec<f64>,
}

impl LayerState {
    pub fn zeros(m: usize) -> Self {
        Self {
            y: vec![0.0; m],
            z: vec![0.0; m],
        }
    }

    pub fn new(y: Vec<f64>, z: Vec<f64>) -> Result<Self> {
        ensure_len("velocity z", z.len(), y.len())?;
        Ok(Self { y, z })
    }

    #[inline]
    pub fn hidden(&self) -> usize {
        self.y.len()
    }

    pub fn is_finite(&self) -> bool {
        self.y.iter().chain(&self.z).all(|v| v.is_finite())
    }

    /// Largest componentwise distance to `other`.
    pub fn max_abs_diff(&self, other: &LayerState) -> f64 {
        self.y
            .iter()
            .zip(&other.y)
            .chain(self.z.iter().zip(&other.z))
            .fold(0.0, |m, (a, b)| m.max((a - b).abs()))
    }
}

/// A stored forward run of one layer.
///
/// `states[n]` is the state after consuming `inputs.row(n)`; `initial` is the
/// state before the first input.
#[derive(Debug, Clone, PartialEq)]
pub struct Trajectory {
    pub initial: LayerState,
    pub states: Vec<LayerState>,
    pub inputs: Matrix,
}

impl Trajectory {
    pub fn len(&self) -> usize {
        self.states.len()
    }

    pub fn is_empty(&self) -> bool {
        self.states.is_empty()
    }

    /// State at step `n` with `0` meaning the initial state.
    pub fn state(&self, n: usize) -> &LayerState {
        if n == 0 {
            &self.initial
        } else {
            &self.states[n - 1]
        }
    }
}

/// Output of [`layer_forward`].
#[derive(Debug, Clone)]
pub struct LayerRun {
    pub final_state: LayerState,
    /// Positions `y_1..y_N`, one row per step.
    pub outputs: Matrix,
    /// Present only when the run was asked to store it.
    pub trajectory: Option<Trajectory>,
}

fn check_step_dims(state: &LayerState, params: &LayerParams, x: &[f64], dt: f64) -> Result<()> {
    let m = params.hidden();
    ensure_len("state y", state.y.len(), m)?;
    ensure_len("state z", state.z.len(), m)?;
    ensure_len("input x", x.len(), params.input_dim())?;
    check_dt(dt)
}

pub(crate) fn check_dt(dt: f64) -> Result<()> {
    if dt > 0.0 && dt < 1.0 {
        Ok(())
    } else {
        Err(Error::Config(format!("time step must lie in (0, 1), got {dt}")))
    }
}

/// One symplectic-Euler step: velocity from the old position, then position
/// from the new velocity.
pub fn forward_step(prev: &LayerState, params: &LayerParams, x: &[f64], dt: f64, alpha: f64) -> Result<LayerState> {
    check_step_dims(prev, params, x, dt)?;
    let drive = params.v.matvec(x);
    let mut next = prev.clone();
    for i in 0..params.hidden() {
        let h = dt * sigma_hat(params.c[i]);
        let (y, z) = step_lane(prev.y[i], prev.z[i], drive[i], params.w[i], params.b[i], h, alpha);
        next.y[i] = y;
        next.z[i] = z;
    }
    Ok(next)
}

/// Exact inverse of [`forward_step`]: position first, then velocity.
pub fn inverse_step(next: &LayerState, params: &LayerParams, x: &[f64], dt: f64, alpha: f64) -> Result<LayerState> {
    check_step_dims(next, params, x, dt)?;
    let drive = params.v.matvec(x);
    let mut prev = next.clone();
    for i in 0..params.hidden() {
        let h = dt * sigma_hat(params.c[i]);
        let (y, z) = unstep_lane(next.y[i], next.z[i], drive[i], params.w[i], params.b[i], h, alpha);
        prev.y[i] = y;
        prev.z[i] = z;
    }
    Ok(prev)
}

#[inline(always)]
pub(crate) fn step_lane(y: f64, z: f64, drive: f64, w: f64, b: f64, h: f64, alpha: f64) -> (f64, f64) {
    let z = z - h * ((w * y + drive + b).tanh() + alpha * y);
    (y + h * z, z)
}

#[inline(always)]
pub(crate) fn unstep_lane(y: f64, z: f64, drive: f64, w: f64, b: f64, h: f64, alpha: f64) -> (f64, f64) {
    let y = y - h * z;
    (y, z + h * ((w * y + drive + b).tanh() + alpha * y))
}

/// Advances `rows` independent copies of an `m`-neuron layer by one step.
///
/// `y`, `z` and `drive` are `rows × m` row-major; `drive` already holds `V x`
/// (plus any residual term).
pub(crate) fn advance_lanes(y: &mut [f64], z: &mut [f64], drive: &[f64], w: &[f64], b: &[f64], h: &[f64], alpha: f64) {
    let m = w.len();
    for ((yr, zr), dr) in y
        .chunks_exact_mut(m)
        .zip(z.chunks_exact_mut(m))
        .zip(drive.chunks_exact(m))
    {
        for i in 0..m {
            let (yn, zn) = step_lane(yr[i], zr[i], dr[i], w[i], b[i], h[i], alpha);
            yr[i] = yn;
            zr[i] = zn;
        }
    }
}

/// Input transform for a whole sequence: `inputs · Vᵀ`, `N × m`.
pub fn input_transform(inputs: &Matrix, v: &Matrix) -> Matrix {
    let mut out = Matrix::zeros(inputs.rows(), v.rows());
    gemm(
        inputs.rows(),
        inputs.cols(),
        v.rows(),
        inputs.data(),
        false,
        v.data(),
        true,
        out.data_mut(),
        0.0,
    );
    out
}

/// Runs one layer over a whole input sequence.
///
/// The input transform is computed for all steps at once; the per-neuron
/// recurrence then walks forward in time. With `store == false` only the
/// outputs and the final state are kept.
pub fn layer_forward(
    initial: &LayerState,
    inputs: &Matrix,
    params: &LayerParams,
    dt: f64,
    alpha: f64,
    store: bool,
) -> Result<LayerRun> {
    params.validate()?;
    check_dt(dt)?;
    let m = params.hidden();
    ensure_len("initial y", initial.y.len(), m)?;
    ensure_len("initial z", initial.z.len(), m)?;
    ensure_len("input width", inputs.cols(), params.input_dim())?;
    if inputs.rows() == 0 {
        return Err(Error::Contract("input sequence is empty".into()));
    }
    let drive = input_transform(inputs, &params.v);
    let h = params.effective_steps(dt);
    let (outputs, final_state, states) = run_drive(initial, &drive, params, &h, alpha, store);
    let trajectory = states.map(|states| Trajectory {
        initial: initial.clone(),
        states,
        inputs: inputs.clone(),
    });
    Ok(LayerRun {
        final_state,
        outputs,
        trajectory,
    })
}

pub(crate) fn run_drive(
    initial: &LayerState,
    drive: &Matrix,
    params: &LayerParams,
    h: &[f64],
    alpha: f64,
    store: bool,
) -> (Matrix, LayerState, Option<Vec<LayerState>>) {
    let m = params.hidden();
    let steps = drive.rows();
    let mut y = initial.y.clone();
    let mut z = initial.z.clone();
    let mut outputs = Matrix::zeros(steps, m);
    let mut states = store.then(|| Vec::with_capacity(steps));
    for n in 0..steps {
        advance_lanes(&mut y, &mut z, drive.row(n), &params.w, &params.b, h, alpha);
        outputs.row_mut(n).copy_from_slice(&y);
        if let Some(s) = states.as_mut() {
            s.push(LayerState {
                y: y.clone(),
                z: z.clone(),
            });
        }
    }
    (outputs, LayerState { y, z }, states)
}

/// Time-dependent energy of the continuous oscillator system,
/// `α/2 ‖y‖² + 1/2 ‖z‖² + Σ_i log cosh(w_i y_i + (V x)_i + b_i) / w_i`.
///
/// Only meaningful when every `w_i` is non-zero.
pub fn hamiltonian(state: &LayerState, params: &LayerParams, x: &[f64], alpha: f64) -> Result<f64> {
    let m = params.hidden();
    ensure_len("state y", state.y.len(), m)?;
    ensure_len("state z", state.z.len(), m)?;
    ensure_len("input x", x.len(), params.input_dim())?;
    if let Some(i) = params.w.iter().position(|&w| w == 0.0) {
        return Err(Error::Domain(format!(
            "hamiltonian needs non-zero hidden weights, w[{i}] = 0"
        )));
    }
    let drive = params.v.matvec(x);
    let mut h = 0.0;
    for i in 0..m {
        let (y, z) = (state.y[i], state.z[i]);
        h += 0.5 * alpha * y * y + 0.5 * z * z;
        h += log_cosh(params.w[i] * y + drive[i] + params.b[i]) / params.w[i];
    }
    Ok(h)
}

fn log_cosh(a: f64) -> f64 {
    let a = a.abs();
    a + (-2.0 * a).exp().ln_1p() - std::f64::consts::LN_2
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::testutil::{random_params, random_state, rng};
    use rand::Rng;

    #[test]
    fn sigma_hat_values() {
        assert_eq!(sigma_hat(0.0), 0.5);
        for u in [0.3, 1.7, 12.0, -40.0] {
            assert!((sigma_hat(u) + sigma_hat(-u) - 1.0).abs() < 1e-15);
        }
        // 0.5 + 0.5·tanh(1), evaluated to 20 digits offline.
        assert!((sigma_hat(2.0) - 0.880_797_077_977_882_4).abs() < 1e-15);
        assert!(sigma_hat(-30.0) > 0.0 && sigma_hat(30.0) < 1.0 + 1e-16);
    }

    #[test]
    fn sigma_hat_prime_matches_central_difference() {
        for u in [-3.0, -0.4, 0.0, 0.9, 2.5] {
            let h = 1e-6;
            let fd = (sigma_hat(u + h) - sigma_hat(u - h)) / (2.0 * h);
            assert!((fd - sigma_hat_prime(u)).abs() < 1e-9);
        }
    }

    #[test]
    fn origin_is_fixed_without_bias_or_input() {
        let mut r = rng(1);
        let mut p = random_params(&mut r, 5, 3, false);
        p.b.iter_mut().for_each(|b| *b = 0.0);
        let s = LayerState::zeros(5);
        let next = forward_step(&s, &p, &[0.0; 3], 0.3, 1.7).unwrap();
        assert_eq!(next, s);
        assert_eq!(inverse_step(&s, &p, &[0.0; 3], 0.3, 1.7).unwrap(), s);
    }

    #[test]
    fn scalar_step_by_hand() {
        let p = LayerParams {
            w: vec![0.0],
            v: Matrix::from_vec(1, 1, vec![1.0]).unwrap(),
            b: vec![0.0],
            c: vec![0.0],
            lambda: None,
        };
        let s = forward_step(&LayerState::zeros(1), &p, &[0.5], 0.1, 0.0).unwrap();
        // z1 = -0.1·0.5·tanh(0.5), y1 = 0.1·0.5·z1
        assert!((s.z[0] - -0.023_105_857_863_000_49).abs() < 1e-15);
        assert!((s.y[0] - -0.001_155_292_893_150_024_5).abs() < 1e-16);
    }

    #[test]
    fn velocity_is_updated_before_position() {
        // With y0 = 0 and z0 = 0 the position moves only through the new
        // velocity; updating y first would leave it at zero.
        let mut p = LayerParams::zeros(1, 1);
        p.b[0] = 1.0;
        let s = forward_step(&LayerState::zeros(1), &p, &[0.0], 0.5, 0.0).unwrap();
        assert!(s.y[0] != 0.0);
        assert!((s.y[0] - 0.25 * s.z[0]).abs() < 1e-16);
    }

    #[test]
    fn inverse_undoes_forward() {
        let mut r = rng(7);
        for _ in 0..50 {
            let m = r.gen_range(1..8);
            let d = r.gen_range(1..5);
            let p = random_params(&mut r, m, d, false);
            let s = random_state(&mut r, m, 1.0);
            let x: Vec<f64> = (0..d).map(|_| r.gen_range(-1.0..1.0)).collect();
            let dt = r.gen_range(0.01..0.99);
            let alpha = r.gen_range(0.0..3.0);
            let next = forward_step(&s, &p, &x, dt, alpha).unwrap();
            let back = inverse_step(&next, &p, &x, dt, alpha).unwrap();
            assert!(back.max_abs_diff(&s) < 1e-12);
        }
    }

    #[test]
    fn dimension_mismatch_is_a_config_error() {
        let p = LayerParams::zeros(3, 2);
        let s = LayerState::zeros(3);
        assert!(matches!(
            forward_step(&s, &p, &[0.0; 3], 0.1, 0.0),
            Err(Error::Config(_))
        ));
        assert!(matches!(
            inverse_step(&LayerState::zeros(2), &p, &[0.0; 2], 0.1, 0.0),
            Err(Error::Config(_))
        ));
        assert!(matches!(
            forward_step(&s, &p, &[0.0; 2], 1.0, 0.0),
            Err(Error::Config(_))
        ));
    }

    #[test]
    fn layer_forward_matches_stepwise_loop() {
        let mut r = rng(3);
        let p = random_params(&mut r, 8, 3, false);
        let inputs = Matrix::from_fn(50, 3, |_, _| r.gen_range(-1.0..1.0));
        let init = random_state(&mut r, 8, 0.5);
        let run = layer_forward(&init, &inputs, &p, 0.2, 0.8, true).unwrap();
        let mut s = init.clone();
        for n in 0..50 {
            s = forward_step(&s, &p, inputs.row(n), 0.2, 0.8).unwrap();
            let stored = &run.trajectory.as_ref().unwrap().states[n];
            assert!(stored.max_abs_diff(&s) < 1e-14);
        }
        assert!(run.final_state.max_abs_diff(&s) < 1e-14);
    }

    #[test]
    fn store_flag_does_not_change_outputs() {
        let mut r = rng(4);
        let p = random_params(&mut r, 6, 2, false);
        let inputs = Matrix::from_fn(40, 2, |_, _| r.gen_range(-1.0..1.0));
        let a = layer_forward(&LayerState::zeros(6), &inputs, &p, 0.1, 1.0, true).unwrap();
        let b = layer_forward(&LayerState::zeros(6), &inputs, &p, 0.1, 1.0, false).unwrap();
        assert_eq!(a.outputs, b.outputs);
        assert_eq!(a.final_state, b.final_state);
        assert!(b.trajectory.is_none());
    }

    #[test]
    fn zero_inputs_keep_zero_state() {
        let mut r = rng(5);
        let mut p = random_params(&mut r, 4, 2, false);
        p.b.iter_mut().for_each(|b| *b = 0.0);
        let run = layer_forward(&LayerState::zeros(4), &Matrix::zeros(3, 2), &p, 0.4, 2.0, false).unwrap();
        assert!(run.outputs.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn empty_sequence_is_rejected() {
        let p = LayerParams::zeros(2, 1);
        let err = layer_forward(&LayerState::zeros(2), &Matrix::zeros(0, 1), &p, 0.1, 0.0, false);
        assert!(matches!(err, Err(Error::Contract(_))));
    }

    #[test]
    fn hamiltonian_values() {
        let mut p = LayerParams::zeros(1, 1);
        p.w[0] = 1.0;
        let zero = LayerState::zeros(1);
        assert_eq!(hamiltonian(&zero, &p, &[0.0], 1.0).unwrap(), 0.0);
        let kinetic = LayerState::new(vec![0.0], vec![1.0]).unwrap();
        assert!((hamiltonian(&kinetic, &p, &[0.0], 2.0).unwrap() - 0.5).abs() < 1e-15);
        p.w[0] = 2.0;
        let s = LayerState::new(vec![1.0], vec![0.0]).unwrap();
        // 0.5 + 0.5·log cosh 2
        assert!((hamiltonian(&s, &p, &[0.0], 1.0).unwrap() - 1.162_501_373_678_932_2).abs() < 1e-12);
    }

    #[test]
    fn hamiltonian_rejects_zero_weight_and_names_index() {
        let mut p = LayerParams::zeros(3, 1);
        p.w = vec![0.5, 0.0, 1.0];
        let err = hamiltonian(&LayerState::zeros(3), &p, &[0.0], 1.0).unwrap_err();
        match err {
            Error::Domain(msg) => assert!(msg.contains("w[1]")),
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn log_cosh_is_stable_for_large_arguments() {
        assert!((log_cosh(800.0) - (800.0 - std::f64::consts::LN_2)).abs() < 1e-12);
        assert!((log_cosh(0.3) - 0.3f64.cosh().ln()).abs() < 1e-15);
    }
}
