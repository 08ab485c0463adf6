//! Step-synchronous execution that keeps only the final hidden states.
//!
//! The forward sweep advances every layer by one step before moving on, so
//! only the current state of each layer is alive. The backward sweep runs
//! the same schedule in reverse: at step `n` the layers are visited top-down,
//! each one rewinding itself with the exact inverse step while the layers
//! below still hold their step-`n` states, which are exactly the inputs it
//! needs.

use super::{fused::readout_backward, ForwardPass, Model, ModelGrads, ReadoutSite, SeqBatch};
use crate::backward::{adjoint_lane, check_drift, step_chain, StateMeter};
use crate::error::Result;
use crate::linalg::{gemm, Matrix};
use crate::recurrence::advance_lanes;

/// Final states of every layer, `batch × m` each.
pub(crate) struct FinalStates {
    y: Vec<Vec<f64>>,
    z: Vec<Vec<f64>>,
    masks: Option<Vec<Matrix>>,
}

/// Scratch buffers for one layer-step.
struct Scratch {
    x: Vec<f64>,
    r: Vec<f64>,
    drive: Vec<f64>,
}

fn masked_into(out: &mut Vec<f64>, y: &[f64], mask: Option<&Matrix>, m: usize) {
    out.clear();
    match mask {
        None => out.extend_from_slice(y),
        Some(mk) => {
            for (b, row) in y.chunks_exact(m).enumerate() {
                out.extend(row.iter().zip(mk.row(b)).map(|(v, k)| v * k));
            }
        }
    }
}

/// Input transform of layer `l` at step `n`, from the current states of the
/// layers below. Leaves the layer's (masked) inputs in `s.x` and `s.r`.
fn step_drive(
    model: &Model,
    l: usize,
    n: usize,
    input: &SeqBatch,
    y: &[Vec<f64>],
    masks: Option<&[Matrix]>,
    s: &mut Scratch,
) {
    let cfg = &model.config;
    let p = &model.layers[l];
    let (batch, m) = (input.batch(), cfg.hidden);
    if l == 0 {
        s.x.clear();
        s.x.extend_from_slice(input.step(n));
    } else {
        masked_into(&mut s.x, &y[l - 1], masks.map(|mk| &mk[l - 1]), m);
    }
    let width = cfg.layer_input_dim(l);
    gemm(batch, width, m, &s.x, false, p.v.data(), true, &mut s.drive, 0.0);
    if let (Some(src), Some(lam)) = (cfg.skip_source(l), &p.lambda) {
        masked_into(&mut s.r, &y[src], masks.map(|mk| &mk[src]), m);
        gemm(batch, m, m, &s.r, false, lam.data(), true, &mut s.drive, 1.0);
    }
}

fn readout_step(model: &Model, top: &[f64], batch: usize, out: &mut [f64]) {
    let m = model.config.hidden;
    match &model.readout {
        None => out.copy_from_slice(top),
        Some(r) => {
            let k = r.w.rows();
            for row in out.chunks_exact_mut(k) {
                row.copy_from_slice(&r.b);
            }
            gemm(batch, m, k, top, false, r.w.data(), true, out, 1.0);
        }
    }
}

pub(crate) fn forward(model: &Model, input: &SeqBatch, masks: Option<Vec<Matrix>>) -> Result<ForwardPass> {
    model.validate()?;
    let cfg = &model.config;
    let (steps, batch, m) = (input.steps(), input.batch(), cfg.hidden);
    let bm = batch * m;
    let mut meter = StateMeter::new();
    let mut y = vec![vec![0.0; bm]; cfg.layers];
    let mut z = vec![vec![0.0; bm]; cfg.layers];
    meter.retain(2 * cfg.layers * bm);
    let site_steps = match cfg.site {
        ReadoutSite::PerStep => steps,
        ReadoutSite::Final => 1,
    };
    let mut outputs = SeqBatch::zeros(site_steps, batch, cfg.out_dim);
    let mut s = Scratch {
        x: Vec::with_capacity(bm.max(batch * cfg.input_dim)),
        r: Vec::with_capacity(bm),
        drive: vec![0.0; bm],
    };
    let h: Vec<Vec<f64>> = model
        .layers
        .iter()
        .zip(&cfg.dt)
        .map(|(p, &dt)| p.effective_steps(dt))
        .collect();
    let top = cfg.layers - 1;
    for n in 0..steps {
        for (l, p) in model.layers.iter().enumerate() {
            step_drive(model, l, n, input, &y, masks.as_deref(), &mut s);
            advance_lanes(&mut y[l], &mut z[l], &s.drive, &p.w, &p.b, &h[l], cfg.alpha);
        }
        match cfg.site {
            ReadoutSite::PerStep => readout_step(model, &y[top], batch, outputs.step_mut(n)),
            ReadoutSite::Final if n + 1 == steps => readout_step(model, &y[top], batch, outputs.step_mut(0)),
            ReadoutSite::Final => {}
        }
    }
    Ok(ForwardPass {
        outputs,
        cache: super::Cache::Reconstructing(FinalStates { y, z, masks }),
        meter,
    })
}

fn add_masked(dst: &mut [f64], src: &[f64], mask: Option<&Matrix>, m: usize) {
    match mask {
        None => dst.iter_mut().zip(src).for_each(|(d, s)| *d += s),
        Some(mk) => {
            for (b, (drow, srow)) in dst.chunks_exact_mut(m).zip(src.chunks_exact(m)).enumerate() {
                for ((d, s), k) in drow.iter_mut().zip(srow).zip(mk.row(b)) {
                    *d += s * k;
                }
            }
        }
    }
}

pub(crate) fn backward(
    model: &Model,
    finals: FinalStates,
    input: &SeqBatch,
    grad_out: &SeqBatch,
    meter: &mut StateMeter,
) -> Result<ModelGrads> {
    let cfg = &model.config;
    let (steps, batch, m) = (input.steps(), input.batch(), cfg.hidden);
    let bm = batch * m;
    let FinalStates { mut y, mut z, masks } = finals;
    let masks = masks.as_deref();
    let mut grads = ModelGrads::zeros_like(model);
    let mut ay = vec![vec![0.0; bm]; cfg.layers];
    let mut az = vec![vec![0.0; bm]; cfg.layers];
    meter.retain(2 * cfg.layers * bm);
    let mut gh = vec![vec![0.0; m]; cfg.layers];
    let h: Vec<Vec<f64>> = model
        .layers
        .iter()
        .zip(&cfg.dt)
        .map(|(p, &dt)| p.effective_steps(dt))
        .collect();
    let mut s = Scratch {
        x: Vec::with_capacity(bm.max(batch * cfg.input_dim)),
        r: Vec::with_capacity(bm),
        drive: vec![0.0; bm],
    };
    let mut ga = vec![0.0; bm];
    let mut back = vec![0.0; bm];
    let top = cfg.layers - 1;

    for n in (0..steps).rev() {
        let site = match cfg.site {
            ReadoutSite::PerStep => Some(n),
            ReadoutSite::Final if n + 1 == steps => Some(0),
            ReadoutSite::Final => None,
        };
        if let Some(site) = site {
            let up = readout_backward(model, &y[top], grad_out.step(site), batch, &mut grads);
            ay[top].iter_mut().zip(&up).for_each(|(a, u)| *a += u);
        }
        for l in (0..cfg.layers).rev() {
            let p = &model.layers[l];
            step_drive(model, l, n, input, &y, masks, &mut s);
            let hl = &h[l];
            let g = &mut grads.layers[l];
            let (yl, zl) = (&mut y[l], &mut z[l]);
            let (ayl, azl) = (&mut ay[l], &mut az[l]);
            for b in 0..batch {
                let o = b * m;
                for i in 0..m {
                    let j = o + i;
                    let (yv, zv) = (yl[j], zl[j]);
                    let yp = yv - hl[i] * zv;
                    let t = (p.w[i] * yp + s.drive[j] + p.b[i]).tanh();
                    let zp = zv + hl[i] * (t + cfg.alpha * yp);
                    check_drift(yp, zp)?;
                    let (gaj, gs) = adjoint_lane(yp, zv, t, p.w[i], hl[i], cfg.alpha, &mut ayl[j], &mut azl[j]);
                    ga[j] = gaj;
                    gh[l][i] += gs;
                    g.w[i] += gaj * yp;
                    g.b[i] += gaj;
                    yl[j] = yp;
                    zl[j] = zp;
                }
            }
            let width = cfg.layer_input_dim(l);
            gemm(m, batch, width, &ga, true, &s.x, false, g.v.data_mut(), 1.0);
            if let (Some(src), Some(lam), Some(glam)) = (cfg.skip_source(l), &p.lambda, g.lambda.as_mut()) {
                gemm(m, batch, m, &ga, true, &s.r, false, glam.data_mut(), 1.0);
                gemm(batch, m, m, &ga, false, lam.data(), false, &mut back, 0.0);
                add_masked(&mut ay[src], &back, masks.map(|mk| &mk[src]), m);
            }
            if l > 0 {
                gemm(batch, m, m, &ga, false, p.v.data(), false, &mut back, 0.0);
                add_masked(&mut ay[l - 1], &back, masks.map(|mk| &mk[l - 1]), m);
            }
        }
    }
    for (l, g) in grads.layers.iter_mut().enumerate() {
        for i in 0..m {
            g.c[i] = gh[l][i] * step_chain(cfg.dt[l], model.layers[l].c[i]);
        }
    }
    meter.release(4 * cfg.layers * bm);
    Ok(grads)
}
