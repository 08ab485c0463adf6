//! Layer-at-a-time execution with whole-sequence input transforms.

use super::{Cache, ForwardPass, Model, ModelGrads, SeqBatch};
use crate::backward::{adjoint_lane, step_chain, StateMeter};
use crate::error::Result;
use crate::linalg::{gemm, Matrix};
use crate::recurrence::advance_lanes;

/// Everything the stored backward sweep reads.
pub(crate) struct StoredCache {
    /// Positions per layer, `(N·B) × m`.
    y: Vec<Matrix>,
    /// Velocities per layer.
    z: Vec<Matrix>,
    /// Input transforms per layer.
    drive: Vec<Matrix>,
    /// Masked inputs of layers `ℓ ≥ 2` when dropout masks are active.
    masked: Vec<Option<Matrix>>,
    masks: Option<Vec<Matrix>>,
}

/// Input sequence of layer `l` as a `(N·B) × width` buffer.
fn layer_input<'a>(l: usize, input: &'a SeqBatch, y: &'a [Matrix], masked: &'a [Option<Matrix>]) -> &'a [f64] {
    if l == 0 {
        input.data()
    } else if let Some(x) = &masked[l] {
        x.data()
    } else {
        y[l - 1].data()
    }
}

/// Residual input of layer `l`: the (masked) positions of layer `src`.
fn residual_input<'a>(src: usize, y: &'a [Matrix], masked: &'a [Option<Matrix>]) -> &'a [f64] {
    match masked.get(src + 1) {
        Some(Some(x)) => x.data(),
        _ => y[src].data(),
    }
}

fn apply_mask(y: &Matrix, mask: &Matrix, steps: usize, batch: usize) -> Matrix {
    let m = y.cols();
    let mut out = y.clone();
    for n in 0..steps {
        for b in 0..batch {
            let row = out.row_mut(n * batch + b);
            row.iter_mut().zip(mask.row(b)).for_each(|(v, k)| *v *= k);
        }
    }
    debug_assert_eq!(out.cols(), m);
    out
}

pub(crate) fn forward(model: &Model, input: &SeqBatch, masks: Option<&[Matrix]>, keep: bool) -> Result<ForwardPass> {
    model.validate()?;
    let cfg = &model.config;
    let (steps, batch, m) = (input.steps(), input.batch(), cfg.hidden);
    let rows = steps * batch;
    let bm = batch * m;
    let mut ys: Vec<Matrix> = Vec::with_capacity(cfg.layers);
    let mut zs: Vec<Matrix> = Vec::with_capacity(cfg.layers);
    let mut drives: Vec<Matrix> = Vec::with_capacity(cfg.layers);
    let mut masked: Vec<Option<Matrix>> = vec![None; cfg.layers];
    let mut meter = StateMeter::new();

    for (l, p) in model.layers.iter().enumerate() {
        if l > 0 {
            if let Some(mk) = masks {
                masked[l] = Some(apply_mask(&ys[l - 1], &mk[l - 1], steps, batch));
            }
        }
        let width = cfg.layer_input_dim(l);
        let mut drive = Matrix::zeros(rows, m);
        let x = layer_input(l, input, &ys, &masked);
        gemm(rows, width, m, x, false, p.v.data(), true, drive.data_mut(), 0.0);
        if let (Some(src), Some(lam)) = (cfg.skip_source(l), &p.lambda) {
            let r = residual_input(src, &ys, &masked);
            gemm(rows, m, m, r, false, lam.data(), true, drive.data_mut(), 1.0);
        }
        let h = p.effective_steps(cfg.dt[l]);
        let mut y = Matrix::zeros(rows, m);
        let mut z = Matrix::zeros(rows, m);
        for n in 0..steps {
            let (yd, zd) = (y.data_mut(), z.data_mut());
            if n > 0 {
                yd.copy_within((n - 1) * bm..n * bm, n * bm);
                zd.copy_within((n - 1) * bm..n * bm, n * bm);
            }
            advance_lanes(
                &mut yd[n * bm..(n + 1) * bm],
                &mut zd[n * bm..(n + 1) * bm],
                &drive.data()[n * bm..(n + 1) * bm],
                &p.w,
                &p.b,
                &h,
                cfg.alpha,
            );
        }
        meter.retain(2 * rows * m);
        ys.push(y);
        if keep {
            zs.push(z);
            drives.push(drive);
        } else {
            meter.release(rows * m);
        }
    }

    let outputs = readout_forward(model, ys.last().expect("at least one layer"), steps, batch);
    let cache = if keep {
        Cache::Stored(StoredCache {
            y: ys,
            z: zs,
            drive: drives,
            masked,
            masks: masks.map(<[Matrix]>::to_vec),
        })
    } else {
        Cache::None
    };
    Ok(ForwardPass { outputs, cache, meter })
}

/// Applies the readout at its configured site(s).
pub(crate) fn readout_forward(model: &Model, top: &Matrix, steps: usize, batch: usize) -> SeqBatch {
    let m = model.config.hidden;
    let (site_steps, first_row) = match model.config.site {
        super::ReadoutSite::PerStep => (steps, 0),
        super::ReadoutSite::Final => (1, (steps - 1) * batch),
    };
    let rows = site_steps * batch;
    let y = &top.data()[first_row * m..(first_row + rows) * m];
    match &model.readout {
        None => SeqBatch::from_matrix(
            site_steps,
            batch,
            Matrix::from_vec(rows, m, y.to_vec()).expect("layout"),
        ),
        Some(r) => {
            let k = r.w.rows();
            let mut out = Matrix::zeros(rows, k);
            for i in 0..rows {
                out.row_mut(i).copy_from_slice(&r.b);
            }
            gemm(rows, m, k, y, false, r.w.data(), true, out.data_mut(), 1.0);
            SeqBatch::from_matrix(site_steps, batch, out)
        }
    }
}

/// Maps output gradients at the readout sites to hidden-space gradients of
/// the top layer, accumulating the readout's own gradients.
pub(crate) fn readout_backward(
    model: &Model,
    top_sites: &[f64],
    grad_out: &[f64],
    rows: usize,
    grads: &mut ModelGrads,
) -> Vec<f64> {
    let m = model.config.hidden;
    match (&model.readout, &mut grads.readout) {
        (Some(r), Some(gr)) => {
            let k = r.w.rows();
            let mut up = vec![0.0; rows * m];
            gemm(rows, k, m, grad_out, false, r.w.data(), false, &mut up, 0.0);
            gemm(k, rows, m, grad_out, true, top_sites, false, gr.w.data_mut(), 1.0);
            for row in grad_out.chunks_exact(k) {
                gr.b.iter_mut().zip(row).for_each(|(g, v)| *g += v);
            }
            up
        }
        _ => grad_out.to_vec(),
    }
}

/// Adds `src` (optionally masked per sequence) into `dst`, both `(N·B) × m`.
fn add_masked(dst: &mut Matrix, src: &Matrix, mask: Option<&Matrix>, batch: usize) {
    match mask {
        None => dst.data_mut().iter_mut().zip(src.data()).for_each(|(d, s)| *d += s),
        Some(mk) => {
            for (i, (drow, srow)) in dst
                .data_mut()
                .chunks_exact_mut(src.cols())
                .zip(src.data().chunks_exact(src.cols()))
                .enumerate()
            {
                let k = mk.row(i % batch);
                for ((d, s), w) in drow.iter_mut().zip(srow).zip(k) {
                    *d += s * w;
                }
            }
        }
    }
}

pub(crate) fn backward(
    model: &Model,
    cache: StoredCache,
    input: &SeqBatch,
    outputs: &SeqBatch,
    grad_out: &SeqBatch,
    meter: &mut StateMeter,
) -> Result<ModelGrads> {
    let cfg = &model.config;
    let (steps, batch, m) = (input.steps(), input.batch(), cfg.hidden);
    let rows = steps * batch;
    let bm = batch * m;
    let mut grads = ModelGrads::zeros_like(model);
    let StoredCache {
        y,
        z,
        drive,
        masked,
        masks,
    } = cache;

    let top = cfg.layers - 1;
    let site_rows = outputs.steps() * batch;
    let first_row = rows - site_rows;
    let top_sites = &y[top].data()[first_row * m..];
    let up_top = readout_backward(model, top_sites, grad_out.data(), site_rows, &mut grads);
    let mut upstream: Vec<Option<Matrix>> = vec![None; cfg.layers];
    let mut u = Matrix::zeros(rows, m);
    u.data_mut()[first_row * m..].copy_from_slice(&up_top);
    upstream[top] = Some(u);

    let mut ay = vec![0.0; bm];
    let mut az = vec![0.0; bm];
    meter.retain(2 * bm);
    for l in (0..cfg.layers).rev() {
        let p = &model.layers[l];
        let u = upstream[l].take().unwrap_or_else(|| Matrix::zeros(rows, m));
        let h = p.effective_steps(cfg.dt[l]);
        let (yl, zl, dl) = (y[l].data(), z[l].data(), drive[l].data());
        let mut ga = Matrix::zeros(rows, m);
        let mut gh = vec![0.0; m];
        let g = &mut grads.layers[l];
        ay.iter_mut().for_each(|v| *v = 0.0);
        az.iter_mut().for_each(|v| *v = 0.0);
        for n in (0..steps).rev() {
            let base = n * bm;
            let ud = &u.data()[base..base + bm];
            let gad = &mut ga.data_mut()[base..base + bm];
            for b in 0..batch {
                let o = b * m;
                for i in 0..m {
                    let j = o + i;
                    let yp = if n > 0 { yl[base - bm + j] } else { 0.0 };
                    let t = (p.w[i] * yp + dl[base + j] + p.b[i]).tanh();
                    ay[j] += ud[j];
                    let (gaj, gs) = adjoint_lane(yp, zl[base + j], t, p.w[i], h[i], cfg.alpha, &mut ay[j], &mut az[j]);
                    gad[j] = gaj;
                    gh[i] += gs;
                    g.w[i] += gaj * yp;
                    g.b[i] += gaj;
                }
            }
        }
        for i in 0..m {
            g.c[i] = gh[i] * step_chain(cfg.dt[l], p.c[i]);
        }
        let width = cfg.layer_input_dim(l);
        let x = layer_input(l, input, &y, &masked);
        gemm(m, rows, width, ga.data(), true, x, false, g.v.data_mut(), 0.0);
        if let (Some(src), Some(lam), Some(glam)) = (cfg.skip_source(l), &p.lambda, g.lambda.as_mut()) {
            let r = residual_input(src, &y, &masked);
            gemm(m, rows, m, ga.data(), true, r, false, glam.data_mut(), 0.0);
            let mut gr = Matrix::zeros(rows, m);
            gemm(rows, m, m, ga.data(), false, lam.data(), false, gr.data_mut(), 0.0);
            let dst = upstream[src].get_or_insert_with(|| Matrix::zeros(rows, m));
            add_masked(dst, &gr, masks.as_ref().map(|mk| &mk[src]), batch);
        }
        if l > 0 {
            let mut gx = Matrix::zeros(rows, m);
            gemm(rows, m, m, ga.data(), false, p.v.data(), false, gx.data_mut(), 0.0);
            let dst = upstream[l - 1].get_or_insert_with(|| Matrix::zeros(rows, m));
            add_masked(dst, &gx, masks.as_ref().map(|mk| &mk[l - 1]), batch);
        }
    }
    meter.release(2 * bm);
    meter.release(2 * cfg.layers * rows * m);
    Ok(grads)
}
