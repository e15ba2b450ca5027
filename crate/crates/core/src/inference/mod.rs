//! Few-step sampling with learned flow maps, the low-noise re-noising rule
//! and reward-guided steps.

use ndarray::{Array2, ArrayView1, ArrayView2};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Real, Tape};
use crate::error::{Error, Result};
use crate::geometry::{Manifold, Point};
use crate::model::{flow_map_batch, AverageVelocity};

/// Rows per parallel work item. Fixed so results do not depend on the
/// number of threads.
const CHUNK: usize = 128;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Guidance {
    None,
    /// `ζ = ∇r(x_t)`.
    NaiveState,
    /// `ζ = Proj_{x_t} ∇_{x_t} r(Φ_{t,1}(x_t))`.
    X1Lookahead,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Stepper {
    /// `x ← Φ_{t_k, t_{k+1}}(x)`.
    FlowMap,
    /// Geodesic Euler on the instantaneous field `u_{t,t}`; the baseline sampler.
    Euler,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SamplerConfig {
    pub nfe: usize,
    /// Low-noise strength; 0 disables re-noising.
    pub eta: f64,
    pub guidance: Guidance,
    pub lambda: f64,
    pub seed: u64,
    pub stepper: Stepper,
}

impl Default for SamplerConfig {
    fn default() -> Self {
        SamplerConfig {
            nfe: 1,
            eta: 0.0,
            guidance: Guidance::None,
            lambda: 0.0,
            seed: 0,
            stepper: Stepper::FlowMap,
        }
    }
}

impl SamplerConfig {
    pub fn validate(&self) -> Result<()> {
        if self.nfe == 0 {
            return Err(Error::Input("nfe must be at least 1".into()));
        }
        if !(0.0..=1.0).contains(&self.eta) {
            return Err(Error::Input(format!("eta must lie in [0, 1], got {}", self.eta)));
        }
        if !(self.lambda >= 0.0 && self.lambda.is_finite()) {
            return Err(Error::Input(format!("lambda must be finite and >= 0, got {}", self.lambda)));
        }
        Ok(())
    }

    fn guided(&self) -> bool {
        self.guidance != Guidance::None && self.lambda != 0.0
    }
}

/// `nfe + 1` uniform knots from 0 to exactly 1.
pub fn time_grid(nfe: usize) -> Vec<f64> {
    (0..=nfe).map(|k| k as f64 / nfe as f64).collect()
}

/// A scalar reward of ambient coordinates, written once for every scalar type.
pub trait Reward: Sync {
    fn eval<R: Real>(&self, x: &[R]) -> R;
}

/// `r(x) = ⟨x, p⟩`.
#[derive(Debug, Clone, PartialEq)]
pub struct LinearReward {
    pub p: Vec<f64>,
}

impl Reward for LinearReward {
    fn eval<R: Real>(&self, x: &[R]) -> R {
        x.iter().zip(&self.p).fold(R::zero(), |acc, (&a, &b)| acc + a * b)
    }
}

/// `Σ c · Π x_j^{e_j}`.
#[derive(Debug, Clone, PartialEq)]
pub struct PolynomialReward {
    pub terms: Vec<(f64, Vec<i32>)>,
}

impl Reward for PolynomialReward {
    fn eval<R: Real>(&self, x: &[R]) -> R {
        self.terms.iter().fold(R::zero(), |acc, (c, es)| {
            let mono = x
                .iter()
                .zip(es)
                .fold(R::one(), |m, (&xi, &e)| if e == 0 { m } else { m * xi.powi(e) });
            acc + mono * *c
        })
    }
}

fn ambient_reward_grad<W: Reward + ?Sized>(x: &[f64], reward: &W) -> Vec<f64> {
    let tape = Tape::with_capacity(8 * x.len());
    let xv = tape.vars(x);
    let r = reward.eval(&xv);
    tape.gradient(r).wrt_all(&xv)
}

/// Riemannian gradient: the ambient reverse-mode gradient projected onto `T_x`.
pub fn riemannian_reward_grad<W: Reward + ?Sized>(m: &Manifold, x: &[f64], reward: &W) -> Vec<f64> {
    m.proj(x, &ambient_reward_grad(x, reward))
}

/// `Φ_{s,t}(x)` for a single point.
pub fn flow_map<A: AverageVelocity + ?Sized>(model: &A, x: &Point, s: f64, t: f64) -> Result<Point> {
    let xv = ArrayView2::from_shape((1, x.len()), x.coords()).expect("row");
    let mut out = flow_map_batch(model, xv, &[s], &[t]);
    Ok(Point::new_unchecked(out.remove(0)?))
}

/// Guidance vectors `ζ_t` for each row of `x` at time `t`.
pub fn guidance_direction<A, W>(
    model: &A,
    x: ArrayView2<f64>,
    t: f64,
    kind: Guidance,
    reward: &W,
) -> Vec<Result<Vec<f64>>>
where
    A: AverageVelocity + ?Sized,
    W: Reward + ?Sized,
{
    let m = model.manifold();
    let b = x.nrows();
    match kind {
        Guidance::None => (0..b).map(|_| Ok(vec![0.0; x.ncols()])).collect(),
        Guidance::NaiveState => (0..b)
            .map(|i| Ok(riemannian_reward_grad(m, x.row(i).as_slice().expect("row"), reward)))
            .collect(),
        Guidance::X1Lookahead => {
            let s = vec![t; b];
            let one = vec![1.0; b];
            let ends = flow_map_batch(model, x, &s, &one);
            let mut g = Array2::zeros(x.dim());
            for (i, e) in ends.iter().enumerate() {
                if let Ok(y) = e {
                    g.row_mut(i).assign(&ArrayView1::from(&ambient_reward_grad(y, reward)[..]));
                }
            }
            let pulled = model.flow_map_vjp(x, &s, &one, g.view());
            ends.into_iter()
                .zip(pulled)
                .enumerate()
                .map(|(i, (e, p))| {
                    e?;
                    Ok(m.proj(x.row(i).as_slice().expect("row"), &p?))
                })
                .collect()
        }
    }
}

/// `x_{t+Δt} = exp_{x_t}(Δt (u_{t,t+Δt}(x_t) + λ ζ_t))` row-wise.
pub fn guided_step<A, W>(
    model: &A,
    x: ArrayView2<f64>,
    t: f64,
    dt: f64,
    cfg: &SamplerConfig,
    reward: &W,
) -> Vec<Result<Vec<f64>>>
where
    A: AverageVelocity + ?Sized,
    W: Reward + ?Sized,
{
    hop(model, x, t, t + dt, t + dt, cfg, Some(reward))
}

/// One hop from `t` to `t_end` with the velocity evaluated at `(t, t_eval)`.
/// Flow-map steps use `t_eval = t_end`; Euler steps use `t_eval = t`.
fn hop<A, W>(
    model: &A,
    x: ArrayView2<f64>,
    t: f64,
    t_eval: f64,
    t_end: f64,
    cfg: &SamplerConfig,
    reward: Option<&W>,
) -> Vec<Result<Vec<f64>>>
where
    A: AverageVelocity + ?Sized,
    W: Reward + ?Sized,
{
    let m = model.manifold();
    let b = x.nrows();
    let h = t_end - t;
    let guided = cfg.guided() && reward.is_some();
    if !guided && t_eval == t_end {
        return flow_map_batch(model, x, &vec![t; b], &vec![t_end; b]);
    }
    let u = model.velocity(x, &vec![t; b], &vec![t_eval; b]);
    let zeta = match reward {
        Some(w) if guided => guidance_direction(model, x, t, cfg.guidance, w),
        _ => (0..b).map(|_| Ok(vec![0.0; x.ncols()])).collect(),
    };
    u.into_iter()
        .zip(zeta)
        .enumerate()
        .map(|(i, (u, z))| {
            let (u, z) = (u?, z?);
            let step: Vec<f64> = u.iter().zip(&z).map(|(a, c)| h * (a + cfg.lambda * c)).collect();
            Ok(m.exp(x.row(i).as_slice().expect("row"), &step))
        })
        .collect()
}

/// Re-noised point at time `t` from a predicted endpoint and a prior draw.
///
/// Euclidean: `t x̂₁ + η(1 − t) ε`. Curved: the prior draw is pulled towards
/// `x̂₁` by `1 − η` along a geodesic, then the geodesic from that anchor to
/// `x̂₁` is evaluated at `t`.
pub fn low_noise_point(m: &Manifold, x1_hat: &[f64], prior: &[f64], t: f64, eta: f64) -> Result<Vec<f64>> {
    if m.is_euclidean() {
        return Ok(x1_hat.iter().zip(prior).map(|(a, e)| t * a + eta * (1.0 - t) * e).collect());
    }
    let anchor = m.interpolate(x1_hat, prior, eta)?;
    m.interpolate(&anchor, x1_hat, t)
}

/// Per-trajectory failure recorded during sampling.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct TrajectoryFailure {
    pub index: usize,
    pub step: usize,
    pub error: String,
}

#[derive(Debug, Clone)]
pub struct SampleBatch {
    /// Final points of the trajectories that completed, in index order.
    pub points: Array2<f64>,
    pub indices: Vec<usize>,
    pub failures: Vec<TrajectoryFailure>,
    /// Network evaluations per trajectory (guidance look-ahead excluded).
    pub nfe: usize,
}

/// Draws `n` trajectories from the prior and pushes them through the grid.
pub fn sample<A, W>(model: &A, cfg: &SamplerConfig, n: usize, reward: Option<&W>) -> Result<SampleBatch>
where
    A: AverageVelocity + ?Sized,
    W: Reward + ?Sized,
{
    cfg.validate()?;
    let m = model.manifold();
    let d = m.ambient_dim();
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut x = Array2::zeros((n, d));
    for i in 0..n {
        x.row_mut(i).assign(&ArrayView1::from(m.random_point(&mut rng).coords()));
    }
    let grid = time_grid(cfg.nfe);
    let renoise = cfg.eta > 0.0 && cfg.stepper == Stepper::FlowMap;
    let mut alive: Vec<Option<TrajectoryFailure>> = vec![None; n];
    for k in 0..cfg.nfe {
        let (t0, t1) = (grid[k], grid[k + 1]);
        let last = k + 1 == cfg.nfe;
        let target = if renoise { 1.0 } else { t1 };
        let t_eval = if cfg.stepper == Stepper::Euler { t0 } else { target };
        let noise: Vec<Vec<f64>> = if renoise && !last {
            (0..n).map(|_| m.random_point(&mut rng).into_inner()).collect()
        } else {
            Vec::new()
        };
        let next = chunked(x.view(), |xc| hop(model, xc, t0, t_eval, target, cfg, reward));
        for (i, r) in next.into_iter().enumerate() {
            if alive[i].is_some() {
                continue;
            }
            let r = r.and_then(|y| {
                if !(renoise && !last) {
                    return Ok(y);
                }
                // The prior draw is arbitrary, so a draw on the cut locus of
                // x̂₁ is replaced rather than failing the trajectory.
                let mut res = low_noise_point(m, &y, &noise[i], t1, cfg.eta);
                for _ in 0..8 {
                    if !matches!(res, Err(Error::CutLocus { .. })) {
                        break;
                    }
                    let e = m.random_point(&mut rng);
                    res = low_noise_point(m, &y, &e, t1, cfg.eta);
                }
                res
            });
            match r {
                Ok(y) => x.row_mut(i).assign(&ArrayView1::from(&y[..])),
                Err(e) => {
                    alive[i] = Some(TrajectoryFailure {
                        index: i,
                        step: k,
                        error: e.to_string(),
                    })
                }
            }
        }
    }
    let indices: Vec<usize> = (0..n).filter(|&i| alive[i].is_none()).collect();
    let mut points = Array2::zeros((indices.len(), d));
    for (j, &i) in indices.iter().enumerate() {
        points.row_mut(j).assign(&x.row(i));
    }
    Ok(SampleBatch {
        points,
        indices,
        failures: alive.into_iter().flatten().collect(),
        nfe: cfg.nfe,
    })
}

/// Applies a row-wise batch operation over fixed-size chunks in parallel,
/// keeping the input order.
pub(crate) fn chunked<T, F>(x: ArrayView2<f64>, f: F) -> Vec<T>
where
    T: Send,
    F: Fn(ArrayView2<f64>) -> Vec<T> + Sync,
{
    let n = x.nrows();
    let starts: Vec<usize> = (0..n).step_by(CHUNK).collect();
    starts
        .into_par_iter()
        .map(|a| f(x.slice(ndarray::s![a..(a + CHUNK).min(n), ..])))
        .collect::<Vec<_>>()
        .into_iter()
        .flatten()
        .collect()
}

/// Header row `x0,x1,…` then one row per point.
pub fn to_csv(points: ArrayView2<f64>) -> String {
    let d = points.ncols();
    let mut out = (0..d).map(|j| format!("x{j}")).collect::<Vec<_>>().join(",");
    out.push('\n');
    for row in points.rows() {
        let line: Vec<String> = row.iter().map(|v| format!("{v:e}")).collect();
        out.push_str(&line.join(","));
        out.push('\n');
    }
    out
}

/// Parses the output of [`to_csv`]; the header is required.
pub fn from_csv(text: &str) -> Result<Array2<f64>> {
    let mut lines = text.lines().filter(|l| !l.trim().is_empty());
    let header = lines.next().ok_or_else(|| Error::Input("empty CSV".into()))?;
    let d = header.split(',').count();
    let mut data = Vec::new();
    let mut rows = 0;
    for (k, line) in lines.enumerate() {
        let vals: std::result::Result<Vec<f64>, _> = line.split(',').map(|v| v.trim().parse::<f64>()).collect();
        let vals = vals.map_err(|e| Error::Input(format!("CSV row {}: {e}", k + 1)))?;
        if vals.len() != d {
            return Err(Error::Dimension { expected: d, got: vals.len() });
        }
        data.extend(vals);
        rows += 1;
    }
    Ok(Array2::from_shape_vec((rows, d), data).expect("shape"))
}

#[cfg(test)]
mod tests;
