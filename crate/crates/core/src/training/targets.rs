//! Frozen regression targets. Everything here is computed from plain values,
//! so nothing reaches a parameter tape.

use ndarray::{Array2, ArrayView2};

use crate::autodiff::norm_sq;
use crate::error::Result;
use crate::model::{flow_map_batch, AverageVelocity};

/// Rescales `v` so its ambient norm is at most `max`.
pub fn clip_norm(v: &mut [f64], max: f64) {
    let n = norm_sq(v).sqrt();
    if n > max {
        let k = max / n;
        v.iter_mut().for_each(|a| *a *= k);
    }
}

fn row(a: &ArrayView2<f64>, i: usize) -> Vec<f64> {
    a.row(i).to_vec()
}

/// Eulerian target `(t − s)·D_s u_{s,t}(x_s) − ∇¹_{v_s} log_{x_s} Φ_{s,t}(x_s)`.
///
/// Rows with `s = t` get the boundary target `v_s`.
pub fn eulerian_targets<A: AverageVelocity + ?Sized>(
    model: &A,
    xs: ArrayView2<f64>,
    vs: ArrayView2<f64>,
    s: &[f64],
    t: &[f64],
    derivative_clip: f64,
) -> Vec<Result<Vec<f64>>> {
    let m = model.manifold();
    let b = xs.nrows();
    let ones = vec![1.0; b];
    let zeros = vec![0.0; b];
    let jv = model.velocity_jvp(xs, vs, s, &ones, t, &zeros);
    jv.into_iter()
        .enumerate()
        .map(|(i, r)| {
            let v = row(&vs, i);
            let h = t[i] - s[i];
            if h == 0.0 {
                return Ok(v);
            }
            let (u, du) = r?;
            let x = row(&xs, i);
            let mut ds_u = m.proj(&x, &du);
            clip_norm(&mut ds_u, derivative_clip);
            let step: Vec<f64> = u.iter().map(|a| a * h).collect();
            let y = m.exp(&x, &step);
            let nabla = m.dlog_first(&x, &y, &v)?;
            Ok(ds_u.iter().zip(&nabla).map(|(a, n)| h * a - n).collect())
        })
        .collect()
}

/// Lagrangian target at a precomputed `x̂_s = Φ_{t,s}(x_t)`:
/// `d(log_{x̂_s})_{x_t}[v_t] − (t − s)·∂_t u_{s,t}(x̂_s)`.
pub fn lagrangian_targets_at<A: AverageVelocity + ?Sized>(
    model: &A,
    x_hat: ArrayView2<f64>,
    xt: ArrayView2<f64>,
    vt: ArrayView2<f64>,
    s: &[f64],
    t: &[f64],
    derivative_clip: f64,
) -> Vec<Result<Vec<f64>>> {
    let m = model.manifold();
    let b = xt.nrows();
    let ones = vec![1.0; b];
    let zeros = vec![0.0; b];
    let dx = Array2::zeros(x_hat.dim());
    let jv = model.velocity_jvp(x_hat, dx.view(), s, &zeros, t, &ones);
    jv.into_iter()
        .enumerate()
        .map(|(i, r)| {
            let v = row(&vt, i);
            let h = t[i] - s[i];
            if h == 0.0 {
                return Ok(v);
            }
            let (_, du) = r?;
            let xh = row(&x_hat, i);
            let mut dt_u = m.proj(&xh, &du);
            clip_norm(&mut dt_u, derivative_clip);
            let dl = m.dlog_second(&xh, &row(&xt, i), &v)?;
            Ok(dl.iter().zip(&dt_u).map(|(a, d)| a - h * d).collect())
        })
        .collect()
}

/// Lagrangian targets with `x̂_s` computed from the model's backward map.
/// Returns `(x̂_s, target)` per row.
pub fn lagrangian_targets<A: AverageVelocity + ?Sized>(
    model: &A,
    xt: ArrayView2<f64>,
    vt: ArrayView2<f64>,
    s: &[f64],
    t: &[f64],
    derivative_clip: f64,
) -> Vec<Result<(Vec<f64>, Vec<f64>)>> {
    let back = flow_map_batch(model, xt, t, s);
    let d = xt.ncols();
    let mut x_hat = xt.to_owned();
    for (i, r) in back.iter().enumerate() {
        if let Ok(p) = r {
            x_hat.row_mut(i).assign(&ndarray::ArrayView1::from(&p[..d]));
        }
    }
    let tg = lagrangian_targets_at(model, x_hat.view(), xt, vt, s, t, derivative_clip);
    back.into_iter()
        .zip(tg)
        .map(|(p, q)| Ok((p?, q?)))
        .collect()
}

/// Semigroup target `log_{x_s}(Φ_{r,t}(Φ_{s,r}(x_s)))/(t − s)`; `v_s` at `s = t`.
pub fn semigroup_targets<A: AverageVelocity + ?Sized>(
    model: &A,
    xs: ArrayView2<f64>,
    vs: ArrayView2<f64>,
    s: &[f64],
    r: &[f64],
    t: &[f64],
) -> Vec<Result<Vec<f64>>> {
    let m = model.manifold();
    let first = flow_map_batch(model, xs, s, r);
    let mut xr = xs.to_owned();
    for (i, p) in first.iter().enumerate() {
        if let Ok(p) = p {
            xr.row_mut(i).assign(&ndarray::ArrayView1::from(&p[..]));
        }
    }
    let second = flow_map_batch(model, xr.view(), r, t);
    first
        .into_iter()
        .zip(second)
        .enumerate()
        .map(|(i, (a, b))| {
            let h = t[i] - s[i];
            if h == 0.0 {
                return Ok(row(&vs, i));
            }
            a?;
            let y = b?;
            Ok(m.log(&row(&xs, i), &y)?.into_iter().map(|v| v / h).collect())
        })
        .collect()
}

/// `d_g(Φ_{s,t}(Φ_{t,s}(x_t)), x_t)²` row-wise.
pub fn cycle_loss<A: AverageVelocity + ?Sized>(
    model: &A,
    xt: ArrayView2<f64>,
    s: &[f64],
    t: &[f64],
) -> Vec<Result<f64>> {
    let m = model.manifold();
    let back = flow_map_batch(model, xt, t, s);
    let mut xs = xt.to_owned();
    for (i, p) in back.iter().enumerate() {
        if let Ok(p) = p {
            xs.row_mut(i).assign(&ndarray::ArrayView1::from(&p[..]));
        }
    }
    let fwd = flow_map_batch(model, xs.view(), s, t);
    back.into_iter()
        .zip(fwd)
        .enumerate()
        .map(|(i, (a, b))| {
            a?;
            Ok(m.dist_sq(&b?, &row(&xt, i)))
        })
        .collect()
}
