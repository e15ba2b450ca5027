//! Residuals of the three characterizations of the average velocity, and the
//! variance probe for the Eulerian regression target.

use ndarray::{Array2, ArrayView1, ArrayView2};
use serde::{Deserialize, Serialize};

use crate::autodiff::norm_sq;
use crate::error::{Error, Result};
use crate::model::{flow_map_batch, AverageVelocity, FlowNet};
use crate::training::{clip_norm, conditional_velocity, eulerian_targets, ObjectiveConfig, Summary, TimeDraw};

/// One certification draw: a point at time `s`, an intermediate `r` and an end `t`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ResidualSample {
    pub x: Vec<f64>,
    pub s: f64,
    pub r: f64,
    pub t: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ResidualReport {
    pub n: usize,
    pub eulerian: Summary,
    pub lagrangian: Summary,
    pub semigroup: Summary,
}

impl ResidualReport {
    pub fn max(&self) -> f64 {
        self.eulerian.max.max(self.lagrangian.max).max(self.semigroup.max)
    }

    pub fn max_mean(&self) -> f64 {
        self.eulerian.mean.max(self.lagrangian.mean).max(self.semigroup.mean)
    }
}

fn dist(a: &[f64], b: &[f64]) -> f64 {
    let d: Vec<f64> = a.iter().zip(b).map(|(p, q)| p - q).collect();
    norm_sq(&d).sqrt()
}

fn stack(rows: &[Vec<f64>]) -> Array2<f64> {
    let d = rows.first().map_or(0, |r| r.len());
    let mut out = Array2::zeros((rows.len(), d));
    for (i, r) in rows.iter().enumerate() {
        out.row_mut(i).assign(&ArrayView1::from(&r[..]));
    }
    out
}

/// Per-sample `‖LHS − RHS‖` of each of the three average-velocity
/// identities for the field `u`.
///
/// `v(x, τ)` is the instantaneous velocity and `flow(x, s, t)` the exact
/// flow; the Eulerian and Lagrangian checks take `x_t` from `flow`, never
/// from `u`. The semigroup check composes the flow maps of `u` itself.
pub fn identity_residuals<A, V, F>(u: &A, v: V, flow: F, samples: &[ResidualSample]) -> Result<ResidualReport>
where
    A: AverageVelocity + ?Sized,
    V: Fn(&[f64], f64) -> Vec<f64>,
    F: Fn(&[f64], f64, f64) -> Result<Vec<f64>>,
{
    if samples.is_empty() {
        return Err(Error::Input("identity residuals need at least one sample".into()));
    }
    if let Some(bad) = samples.iter().find(|p| p.t == p.s) {
        return Err(Error::Input(format!("residual sample needs s != t, got s = t = {}", bad.s)));
    }
    let m = u.manifold();
    let b = samples.len();
    let xs = stack(&samples.iter().map(|p| p.x.clone()).collect::<Vec<_>>());
    let s: Vec<f64> = samples.iter().map(|p| p.s).collect();
    let r: Vec<f64> = samples.iter().map(|p| p.r).collect();
    let t: Vec<f64> = samples.iter().map(|p| p.t).collect();
    let vs = stack(&samples.iter().map(|p| m.proj(&p.x, &v(&p.x, p.s))).collect::<Vec<_>>());
    let xt_rows = samples.iter().map(|p| flow(&p.x, p.s, p.t)).collect::<Result<Vec<_>>>()?;
    let vt_rows: Vec<Vec<f64>> = xt_rows.iter().zip(&t).map(|(y, &tt)| m.proj(y, &v(y, tt))).collect();
    let (ones, zeros) = (vec![1.0; b], vec![0.0; b]);

    let u_s = u.velocity(xs.view(), &s, &t);
    let d_s = u.velocity_jvp(xs.view(), vs.view(), &s, &ones, &t, &zeros);
    let dx0 = Array2::zeros(xs.dim());
    let d_t = u.velocity_jvp(xs.view(), dx0.view(), &s, &zeros, &t, &ones);
    let first = flow_map_batch(u, xs.view(), &s, &r);
    let xr = stack(&first.into_iter().collect::<Result<Vec<_>>>()?);
    let composite = flow_map_batch(u, xr.view(), &r, &t);

    let (mut e, mut l, mut g) = (Vec::with_capacity(b), Vec::with_capacity(b), Vec::with_capacity(b));
    for (i, ((uv, (ds, dt)), y)) in u_s.into_iter().zip(d_s.into_iter().zip(d_t)).zip(composite).enumerate() {
        let x = &samples[i].x;
        let h = t[i] - s[i];
        let uv = uv?;
        let xt = &xt_rows[i];
        let ds_u = m.proj(x, &ds?.1);
        let nabla = m.dlog_first(x, xt, &vs.row(i).to_vec())?;
        let rhs: Vec<f64> = ds_u.iter().zip(&nabla).map(|(a, n)| h * a - n).collect();
        e.push(dist(&uv, &rhs));
        let dt_u = m.proj(x, &dt?.1);
        let dl = m.dlog_second(x, xt, &vt_rows[i])?;
        let rhs: Vec<f64> = dl.iter().zip(&dt_u).map(|(a, d)| a - h * d).collect();
        l.push(dist(&uv, &rhs));
        let rhs: Vec<f64> = m.log(x, &y?)?.into_iter().map(|q| q / h).collect();
        g.push(dist(&uv, &rhs));
    }
    Ok(ResidualReport {
        n: b,
        eulerian: Summary::of(&e),
        lagrangian: Summary::of(&l),
        semigroup: Summary::of(&g),
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VarianceBucket {
    /// `[lo, hi)` range of `s`.
    pub lo: f64,
    pub hi: f64,
    pub count: usize,
    /// Mean and variance of `‖target‖`.
    pub target_norm: Summary,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VarianceProbe {
    pub target_norm: Summary,
    /// `‖(t − s) · clip(D_s u)‖`, the network-derivative part of the target.
    pub derivative_term: Summary,
    pub buckets: Vec<VarianceBucket>,
    pub skipped: usize,
}

/// Statistics of the Eulerian target on fixed pairs and times for a frozen net.
///
/// Pairs `(x0, x1)` are interpolated at `s`; boundary draws are included
/// as given, and rows that hit a domain error are skipped.
pub fn target_variance_probe(
    net: &FlowNet,
    cfg: &ObjectiveConfig,
    x0: ArrayView2<f64>,
    x1: ArrayView2<f64>,
    draws: &[TimeDraw],
    buckets: usize,
) -> Result<VarianceProbe> {
    let b = x0.nrows();
    if x1.nrows() != b || draws.len() != b {
        return Err(Error::Input("probe batch lengths disagree".into()));
    }
    if buckets == 0 {
        return Err(Error::Input("probe needs at least one bucket".into()));
    }
    let m = &net.manifold;
    let mut xs = Vec::with_capacity(b);
    let mut vs = Vec::with_capacity(b);
    for i in 0..b {
        let (x, v) = conditional_velocity(m, &x0.row(i).to_vec(), &x1.row(i).to_vec(), draws[i].s)?;
        xs.push(x);
        vs.push(v);
    }
    let (xa, va) = (stack(&xs), stack(&vs));
    let s: Vec<f64> = draws.iter().map(|d| d.s).collect();
    let t: Vec<f64> = draws.iter().map(|d| d.t).collect();
    let tg = eulerian_targets(net, xa.view(), va.view(), &s, &t, cfg.derivative_clip);
    let (ones, zeros) = (vec![1.0; b], vec![0.0; b]);
    let jv = net.velocity_jvp(xa.view(), va.view(), &s, &ones, &t, &zeros);
    let mut norms = Vec::with_capacity(b);
    let mut dterm = Vec::with_capacity(b);
    let mut per_bucket: Vec<Vec<f64>> = vec![Vec::new(); buckets];
    let mut skipped = 0;
    for (i, (g, j)) in tg.into_iter().zip(jv).enumerate() {
        let (Ok(g), Ok((_, du))) = (g, j) else {
            skipped += 1;
            continue;
        };
        let n = norm_sq(&g).sqrt();
        norms.push(n);
        let mut d = m.proj(&xs[i], &du);
        clip_norm(&mut d, cfg.derivative_clip);
        dterm.push((t[i] - s[i]).abs() * norm_sq(&d).sqrt());
        let k = ((s[i] * buckets as f64) as usize).min(buckets - 1);
        per_bucket[k].push(n);
    }
    Ok(VarianceProbe {
        target_norm: Summary::of(&norms),
        derivative_term: Summary::of(&dterm),
        buckets: per_bucket
            .into_iter()
            .enumerate()
            .map(|(k, v)| VarianceBucket {
                lo: k as f64 / buckets as f64,
                hi: (k + 1) as f64 / buckets as f64,
                count: v.len(),
                target_norm: Summary::of(&v),
            })
            .collect(),
        skipped,
    })
}
