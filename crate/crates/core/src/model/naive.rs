//! Step-by-step reference implementation.
//!
//! Processes one sequence at a time, one step at a time, with a
//! matrix-vector product per layer-step and every state stored. It shares
//! no batched code with the main paths and serves as the timing baseline
//! and as an independent oracle in tests.

use super::{batch_loss, DropoutMask, Model, ModelGrads, ReadoutSite, SeqBatch, Targets};
use crate::backward::{adjoint_lane, step_chain};
use crate::error::{Error, Result};
use crate::linalg::Matrix;
use crate::recurrence::{step_lane, LayerState};

struct SeqRun {
    /// `states[l][n]`, `n = 0` being the zero initial state.
    states: Vec<Vec<LayerState>>,
    /// `drives[l][n - 1]`: input transform consumed by step `n`.
    drives: Vec<Vec<Vec<f64>>>,
    /// Masked inputs `x[l][n - 1]` and residual inputs `r[l][n - 1]`.
    x: Vec<Vec<Vec<f64>>>,
    r: Vec<Vec<Vec<f64>>>,
}

fn mask_of(masks: Option<&DropoutMask>, conn: usize) -> Option<&[f64]> {
    masks.map(|m| m.masks[conn].as_slice())
}

fn masked(y: &[f64], mask: Option<&[f64]>) -> Vec<f64> {
    match mask {
        None => y.to_vec(),
        Some(k) => y.iter().zip(k).map(|(a, b)| a * b).collect(),
    }
}

fn run_sequence(model: &Model, u: &Matrix, mask: Option<&DropoutMask>) -> SeqRun {
    let cfg = &model.config;
    let m = cfg.hidden;
    let steps = u.rows();
    let mut run = SeqRun {
        states: vec![vec![LayerState::zeros(m)]; cfg.layers],
        drives: vec![Vec::with_capacity(steps); cfg.layers],
        x: vec![Vec::with_capacity(steps); cfg.layers],
        r: vec![Vec::with_capacity(steps); cfg.layers],
    };
    for n in 1..=steps {
        for (l, p) in model.layers.iter().enumerate() {
            let x = if l == 0 {
                u.row(n - 1).to_vec()
            } else {
                masked(&run.states[l - 1][n].y, mask_of(mask, l - 1))
            };
            let mut drive = p.v.matvec(&x);
            let r = match (cfg.skip_source(l), &p.lambda) {
                (Some(src), Some(lam)) => {
                    let r = masked(&run.states[src][n].y, mask_of(mask, src));
                    drive.iter_mut().zip(lam.matvec(&r)).for_each(|(d, v)| *d += v);
                    r
                }
                _ => Vec::new(),
            };
            let prev = &run.states[l][n - 1];
            let mut next = LayerState::zeros(m);
            for i in 0..m {
                let h = cfg.dt[l] * crate::recurrence::sigma_hat(p.c[i]);
                let (y, z) = step_lane(prev.y[i], prev.z[i], drive[i], p.w[i], p.b[i], h, cfg.alpha);
                next.y[i] = y;
                next.z[i] = z;
            }
            run.states[l].push(next);
            run.drives[l].push(drive);
            run.x[l].push(x);
            run.r[l].push(r);
        }
    }
    run
}

fn readout(model: &Model, y: &[f64]) -> Vec<f64> {
    match &model.readout {
        None => y.to_vec(),
        Some(r) => r.w.matvec(y).iter().zip(&r.b).map(|(a, b)| a + b).collect(),
    }
}

/// Outputs for a batch, computed one sequence at a time.
pub fn forward(model: &Model, input: &SeqBatch, masks: Option<&[DropoutMask]>) -> Result<SeqBatch> {
    model.validate()?;
    let (_, outputs) = run_batch(model, input, masks)?;
    Ok(outputs)
}

fn run_batch(model: &Model, input: &SeqBatch, masks: Option<&[DropoutMask]>) -> Result<(Vec<SeqRun>, SeqBatch)> {
    let cfg = &model.config;
    if let Some(mk) = masks {
        if mk.len() != input.batch() {
            return Err(Error::Contract("one dropout mask per sequence is required".into()));
        }
    }
    let steps = input.steps();
    let site_steps = if cfg.site == ReadoutSite::PerStep { steps } else { 1 };
    let mut outputs = SeqBatch::zeros(site_steps, input.batch(), cfg.out_dim);
    let mut runs = Vec::with_capacity(input.batch());
    for b in 0..input.batch() {
        let run = run_sequence(model, &input.sequence(b), masks.map(|m| &m[b]));
        let top = &run.states[cfg.layers - 1];
        for s in 0..site_steps {
            let n = if site_steps == 1 { steps } else { s + 1 };
            outputs.row_mut(s, b).copy_from_slice(&readout(model, &top[n].y));
        }
        runs.push(run);
    }
    Ok((runs, outputs))
}

/// Batch-mean loss and gradients by straightforward per-step backpropagation.
pub fn loss_and_grad(
    model: &Model,
    input: &SeqBatch,
    targets: &Targets,
    masks: Option<&[DropoutMask]>,
) -> Result<(f64, ModelGrads)> {
    model.validate()?;
    let cfg = &model.config;
    let m = cfg.hidden;
    let steps = input.steps();
    let (runs, outputs) = run_batch(model, input, masks)?;
    let (loss, grad_out) = batch_loss(&outputs, targets)?;
    let mut grads = ModelGrads::zeros_like(model);
    let h: Vec<Vec<f64>> = model
        .layers
        .iter()
        .zip(&cfg.dt)
        .map(|(p, &dt)| p.effective_steps(dt))
        .collect();

    for (b, run) in runs.iter().enumerate() {
        let mask = masks.map(|mk| &mk[b]);
        let mut ay = vec![vec![0.0; m]; cfg.layers];
        let mut az = vec![vec![0.0; m]; cfg.layers];
        let mut gh = vec![vec![0.0; m]; cfg.layers];
        for n in (1..=steps).rev() {
            let site = match cfg.site {
                ReadoutSite::PerStep => Some(n - 1),
                ReadoutSite::Final if n == steps => Some(0),
                ReadoutSite::Final => None,
            };
            if let Some(s) = site {
                let go = grad_out.row(s, b);
                let ytop = &run.states[cfg.layers - 1][n].y;
                match (&model.readout, grads.readout.as_mut()) {
                    (Some(r), Some(gr)) => {
                        let up = r.w.matvec_t(go);
                        ay[cfg.layers - 1].iter_mut().zip(&up).for_each(|(a, u)| *a += u);
                        for (k, &g) in go.iter().enumerate() {
                            gr.b[k] += g;
                            for (gw, yv) in gr.w.row_mut(k).iter_mut().zip(ytop) {
                                *gw += g * yv;
                            }
                        }
                    }
                    _ => ay[cfg.layers - 1].iter_mut().zip(go).for_each(|(a, u)| *a += u),
                }
            }
            for l in (0..cfg.layers).rev() {
                let p = &model.layers[l];
                let prev = &run.states[l][n - 1];
                let cur = &run.states[l][n];
                let drive = &run.drives[l][n - 1];
                let mut ga = vec![0.0; m];
                for i in 0..m {
                    let t = (p.w[i] * prev.y[i] + drive[i] + p.b[i]).tanh();
                    let (g, gs) = adjoint_lane(
                        prev.y[i],
                        cur.z[i],
                        t,
                        p.w[i],
                        h[l][i],
                        cfg.alpha,
                        &mut ay[l][i],
                        &mut az[l][i],
                    );
                    ga[i] = g;
                    gh[l][i] += gs;
                    grads.layers[l].w[i] += g * prev.y[i];
                    grads.layers[l].b[i] += g;
                }
                let x = &run.x[l][n - 1];
                for (i, &g) in ga.iter().enumerate() {
                    for (gv, xv) in grads.layers[l].v.row_mut(i).iter_mut().zip(x) {
                        *gv += g * xv;
                    }
                }
                if let (Some(src), Some(lam)) = (cfg.skip_source(l), &p.lambda) {
                    let r = &run.r[l][n - 1];
                    let glam = grads.layers[l].lambda.as_mut().expect("shapes mirror parameters");
                    for (i, &g) in ga.iter().enumerate() {
                        for (gv, rv) in glam.row_mut(i).iter_mut().zip(r) {
                            *gv += g * rv;
                        }
                    }
                    let back = masked(&lam.matvec_t(&ga), mask_of(mask, src));
                    ay[src].iter_mut().zip(&back).for_each(|(a, v)| *a += v);
                }
                if l > 0 {
                    let back = masked(&p.v.matvec_t(&ga), mask_of(mask, l - 1));
                    ay[l - 1].iter_mut().zip(&back).for_each(|(a, v)| *a += v);
                }
            }
        }
        for (l, g) in grads.layers.iter_mut().enumerate() {
            for i in 0..m {
                g.c[i] += gh[l][i] * step_chain(cfg.dt[l], model.layers[l].c[i]);
            }
        }
    }
    Ok((loss, grads))
}
