//! Regression targets for the average velocity and the loop that fits them.

mod targets;
mod trainer;

use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::autodiff::{jvp, Dual};
use crate::error::{Error, Result};
use crate::geometry::{Manifold, Point};
use crate::model::Parameterization;

pub use targets::{
    clip_norm, cycle_loss, eulerian_targets, lagrangian_targets, lagrangian_targets_at,
    semigroup_targets,
};
pub use trainer::{sample_batch, Adam, LossStats, Summary, Trainer};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Objective {
    Eulerian,
    Lagrangian,
    Semigroup,
    /// Boundary-only training of `u_{t,t} = v_t`; the baseline.
    FlowMatching,
}

/// Ordering of non-boundary time pairs.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TimeOrder {
    /// Sorted for Eulerian and Semigroup, unordered for Lagrangian.
    Auto,
    Sorted,
    Unordered,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ObjectiveConfig {
    pub objective: Objective,
    pub parameterization: Parameterization,
    pub adaptive_p: f64,
    pub adaptive_c: f64,
    pub x1_eps: f64,
    pub boundary_fraction: f64,
    pub time_mu: f64,
    pub time_sigma: f64,
    pub time_order: TimeOrder,
    pub cycle_weight: f64,
    pub semigroup_interval_weighting: bool,
    pub derivative_clip: f64,
    pub learning_rate: f64,
    pub grad_clip_norm: f64,
    pub ema_decay: f64,
    pub batch_size: usize,
    pub steps: usize,
}

impl Default for ObjectiveConfig {
    fn default() -> Self {
        ObjectiveConfig {
            objective: Objective::Semigroup,
            parameterization: Parameterization::X1Pred,
            adaptive_p: 0.5,
            adaptive_c: 1e-3,
            x1_eps: 0.1,
            boundary_fraction: 0.75,
            time_mu: -0.4,
            time_sigma: 1.0,
            time_order: TimeOrder::Auto,
            cycle_weight: 0.0,
            semigroup_interval_weighting: false,
            derivative_clip: 100.0,
            learning_rate: 1e-3,
            grad_clip_norm: 1.0,
            ema_decay: 0.9999,
            batch_size: 256,
            steps: 1000,
        }
    }
}

impl ObjectiveConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(Error::Input(msg));
        if !(self.adaptive_p >= 0.0) {
            return bad(format!("adaptive_p must be >= 0, got {}", self.adaptive_p));
        }
        if !(self.adaptive_c > 0.0) {
            return bad(format!("adaptive_c must be > 0, got {}", self.adaptive_c));
        }
        if !(self.x1_eps > 0.0 && self.x1_eps < 1.0) {
            return bad(format!("x1_eps must lie in (0, 1), got {}", self.x1_eps));
        }
        if !(0.0..=1.0).contains(&self.boundary_fraction) {
            return bad(format!("boundary_fraction must lie in [0, 1], got {}", self.boundary_fraction));
        }
        if !(self.time_sigma > 0.0) || !self.time_mu.is_finite() {
            return bad("time law needs finite mu and sigma > 0".into());
        }
        if !(self.cycle_weight >= 0.0) || !(self.derivative_clip > 0.0) {
            return bad("cycle_weight must be >= 0 and derivative_clip > 0".into());
        }
        if !(self.learning_rate >= 0.0) || !(self.grad_clip_norm > 0.0) {
            return bad("learning_rate must be >= 0 and grad_clip_norm > 0".into());
        }
        if !(0.0..=1.0).contains(&self.ema_decay) {
            return bad(format!("ema_decay must lie in [0, 1], got {}", self.ema_decay));
        }
        if self.batch_size == 0 {
            return bad("batch_size must be positive".into());
        }
        Ok(())
    }

    fn sorted(&self) -> bool {
        match self.time_order {
            TimeOrder::Sorted => true,
            TimeOrder::Unordered => false,
            TimeOrder::Auto => self.objective != Objective::Lagrangian,
        }
    }
}

/// Times for one training sample.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TimeDraw {
    pub s: f64,
    pub t: f64,
    /// Intermediate time of the semigroup objective.
    pub r: Option<f64>,
    /// `s = t`: the flow-matching anchor.
    pub is_boundary: bool,
}

fn logit_normal<G: Rng + ?Sized>(cfg: &ObjectiveConfig, rng: &mut G) -> f64 {
    let z = Normal::new(cfg.time_mu, cfg.time_sigma)
        .expect("validated sigma")
        .sample(rng);
    1.0 / (1.0 + (-z).exp())
}

pub fn sample_times<G: Rng + ?Sized>(cfg: &ObjectiveConfig, rng: &mut G) -> TimeDraw {
    let semigroup = cfg.objective == Objective::Semigroup;
    let boundary = cfg.objective == Objective::FlowMatching || rng.random::<f64>() < cfg.boundary_fraction;
    if boundary {
        let t = logit_normal(cfg, rng);
        return TimeDraw {
            s: t,
            t,
            r: semigroup.then_some(t),
            is_boundary: true,
        };
    }
    let a = logit_normal(cfg, rng);
    let b = logit_normal(cfg, rng);
    let (s, t) = if cfg.sorted() && b < a { (b, a) } else { (a, b) };
    let r = semigroup.then(|| s + rng.random::<f64>() * (t - s));
    TimeDraw {
        s,
        t,
        r,
        is_boundary: s == t,
    }
}

/// `(‖Δ‖² + c)^{-p}`, used as a frozen per-sample multiplier.
pub fn adaptive_weight(residual_norm_sq: f64, c: f64, p: f64) -> f64 {
    (residual_norm_sq + c).powf(-p)
}

/// `(1 − s)/max(1 − s, ε)`; multiplies the residual of x₁-prediction.
pub fn x1_time_weight(s: f64, eps: f64) -> f64 {
    (1.0 - s) / (1.0 - s).max(eps)
}

/// Independent coupling: prior draw and a uniformly chosen data row.
pub fn sample_pair<G: Rng + ?Sized>(
    m: &Manifold,
    data: &[Vec<f64>],
    rng: &mut G,
) -> Result<(Point, Point)> {
    if data.is_empty() {
        return Err(Error::Input("empty dataset".into()));
    }
    let x0 = m.random_point(rng);
    let x1 = Point::new_unchecked(data[rng.random_range(0..data.len())].clone());
    Ok((x0, x1))
}

/// Point and velocity of the geodesic interpolant from `x0` to `x1` at time `t`.
pub fn conditional_velocity(m: &Manifold, x0: &[f64], x1: &[f64], t: f64) -> Result<(Vec<f64>, Vec<f64>)> {
    let l = m.log(x0, x1)?;
    let (xt, d) = jvp(
        |tt| {
            let step: Vec<Dual> = l.iter().map(|&v| tt[0] * v).collect();
            let x0d: Vec<Dual> = x0.iter().map(|&v| Dual::constant(v)).collect();
            m.exp(&x0d, &step)
        },
        &[t],
        &[1.0],
    );
    let v = m.proj(&xt, &d);
    Ok((xt, v))
}
