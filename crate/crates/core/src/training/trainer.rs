//! Loss assembly with reverse-mode gradients, followed by a clipped Adam step.

use ndarray::{Array2, ArrayView1, ArrayView2};
use rand::Rng;
use serde::{Deserialize, Serialize};

use super::{
    adaptive_weight, conditional_velocity, eulerian_targets, lagrangian_targets_at, sample_times,
    semigroup_targets, x1_time_weight, Objective, ObjectiveConfig, TimeDraw,
};
use crate::autodiff::{norm_sq, Real, Tape, Var};
use crate::error::{Error, Result};
use crate::model::{mlp, velocity_from_raw, EmaState, FlowNet, Parameterization};

/// Adam without weight decay.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Adam {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    m: Vec<f64>,
    v: Vec<f64>,
    t: u64,
}

impl Adam {
    pub fn new(n: usize, lr: f64) -> Self {
        Adam {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            m: vec![0.0; n],
            v: vec![0.0; n],
            t: 0,
        }
    }

    pub fn step(&mut self, params: &mut [f64], grad: &[f64]) {
        self.t += 1;
        let c1 = 1.0 - self.beta1.powi(self.t as i32);
        let c2 = 1.0 - self.beta2.powi(self.t as i32);
        for i in 0..params.len() {
            self.m[i] = self.beta1 * self.m[i] + (1.0 - self.beta1) * grad[i];
            self.v[i] = self.beta2 * self.v[i] + (1.0 - self.beta2) * grad[i] * grad[i];
            let mh = self.m[i] / c1;
            let vh = self.v[i] / c2;
            params[i] -= self.lr * mh / (vh.sqrt() + self.eps);
        }
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct Summary {
    pub mean: f64,
    pub var: f64,
    pub max: f64,
}

impl Summary {
    pub fn of(xs: &[f64]) -> Self {
        if xs.is_empty() {
            return Summary::default();
        }
        let n = xs.len() as f64;
        let mean = xs.iter().sum::<f64>() / n;
        let var = xs.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / n;
        let max = xs.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        Summary { mean, var, max }
    }
}

/// Per-step diagnostics.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct LossStats {
    pub step: u64,
    /// Weighted objective, averaged over used samples.
    pub loss: f64,
    pub main_loss: f64,
    pub cycle_loss: f64,
    /// Unweighted `‖u − target‖²`.
    pub residual: Summary,
    pub target_norm: Summary,
    /// Gradient norm before clipping.
    pub grad_norm: f64,
    pub used: usize,
    pub skipped: usize,
    pub skipped_total: u64,
    pub aborted: bool,
}

#[derive(Debug, Clone)]
pub struct Trainer {
    pub net: FlowNet,
    pub ema: EmaState,
    pub adam: Adam,
    pub cfg: ObjectiveConfig,
    pub step: u64,
    pub skipped_total: u64,
    /// Consecutive steps aborted for a non-finite loss.
    pub nonfinite_streak: u32,
}

fn row(a: &ArrayView2<f64>, i: usize) -> Vec<f64> {
    a.row(i).to_vec()
}

impl Trainer {
    pub fn new(net: FlowNet, cfg: ObjectiveConfig) -> Result<Self> {
        cfg.validate()?;
        if cfg.parameterization != net.parameterization {
            return Err(Error::Input(format!(
                "config asks for {} but the network uses {}",
                cfg.parameterization, net.parameterization
            )));
        }
        Ok(Trainer {
            ema: EmaState::new(&net.params, cfg.ema_decay),
            adam: Adam::new(net.params.len(), cfg.learning_rate),
            net,
            cfg,
            step: 0,
            skipped_total: 0,
            nonfinite_streak: 0,
        })
    }

    pub fn ema_net(&self) -> FlowNet {
        self.net.with_params(self.ema.shadow.clone())
    }

    /// One optimizer step on the pairs `(x0, x1)`.
    pub fn train_step<G: Rng + ?Sized>(
        &mut self,
        x0: ArrayView2<f64>,
        x1: ArrayView2<f64>,
        rng: &mut G,
    ) -> LossStats {
        let draws: Vec<TimeDraw> = (0..x0.nrows()).map(|_| sample_times(&self.cfg, rng)).collect();
        let (mut stats, mut grad) = self.loss_and_grad(x0, x1, &draws);
        stats.step = self.step + 1;
        self.skipped_total += stats.skipped as u64;
        stats.skipped_total = self.skipped_total;
        if stats.aborted {
            self.nonfinite_streak += 1;
            return stats;
        }
        self.nonfinite_streak = 0;
        if stats.grad_norm > self.cfg.grad_clip_norm {
            let k = self.cfg.grad_clip_norm / stats.grad_norm;
            grad.iter_mut().for_each(|g| *g *= k);
        }
        self.adam.step(&mut self.net.params, &grad);
        self.ema.update(&self.net.params);
        self.step += 1;
        stats
    }

    /// Draws a batch (prior × data) and takes one step.
    pub fn step_on_data<G: Rng + ?Sized>(&mut self, data: &[Vec<f64>], rng: &mut G) -> Result<LossStats> {
        let (x0, x1) = sample_batch(&self.net, data, self.cfg.batch_size, rng)?;
        Ok(self.train_step(x0.view(), x1.view(), rng))
    }

    /// Objective value and parameter gradient for fixed pairs and times.
    /// Targets are computed from plain values and enter as constants.
    pub fn loss_and_grad(
        &self,
        x0: ArrayView2<f64>,
        x1: ArrayView2<f64>,
        draws: &[TimeDraw],
    ) -> (LossStats, Vec<f64>) {
        let cfg = &self.cfg;
        let net = &self.net;
        let m = &net.manifold;
        let (b, d) = x0.dim();
        assert_eq!(draws.len(), b, "one time draw per pair");
        let lagrangian = cfg.objective == Objective::Lagrangian;
        let s: Vec<f64> = draws.iter().map(|w| w.s).collect();
        let t: Vec<f64> = draws.iter().map(|w| w.t).collect();
        let r: Vec<f64> = draws.iter().map(|w| w.r.unwrap_or(w.s)).collect();

        // interpolant state at s (or at t for the Lagrangian objective)
        let mut ok = vec![true; b];
        let mut xi = x0.to_owned();
        let mut vi = Array2::zeros((b, d));
        for i in 0..b {
            let tau = if lagrangian { t[i] } else { s[i] };
            match conditional_velocity(m, &row(&x0, i), &row(&x1, i), tau) {
                Ok((x, v)) => {
                    xi.row_mut(i).assign(&ArrayView1::from(&x[..]));
                    vi.row_mut(i).assign(&ArrayView1::from(&v[..]));
                }
                Err(_) => ok[i] = false,
            }
        }

        // frozen targets and the points where the prediction is evaluated
        let mut back_fw = None;
        let mut pred_x = xi.clone();
        let targets: Vec<Result<Vec<f64>>> = match cfg.objective {
            Objective::FlowMatching => (0..b).map(|i| Ok(vi.row(i).to_vec())).collect(),
            Objective::Eulerian => eulerian_targets(net, xi.view(), vi.view(), &s, &t, cfg.derivative_clip),
            Objective::Semigroup => semigroup_targets(net, xi.view(), vi.view(), &s, &r, &t),
            Objective::Lagrangian => {
                let fw1 = net.raw_forward(xi.view(), &t, &s);
                for i in 0..b {
                    if s[i] == t[i] || !ok[i] {
                        continue;
                    }
                    let x = row(&xi.view(), i);
                    match velocity_from_raw(m, net.parameterization, fw1.out.row(i).as_slice().expect("row"), &x, t[i], s[i]) {
                        Ok(u) => {
                            let step: Vec<f64> = u.iter().map(|a| a * (s[i] - t[i])).collect();
                            let xh = m.exp(&x, &step);
                            pred_x.row_mut(i).assign(&ArrayView1::from(&xh[..]));
                        }
                        Err(_) => ok[i] = false,
                    }
                }
                back_fw = Some(fw1);
                lagrangian_targets_at(net, pred_x.view(), xi.view(), vi.view(), &s, &t, cfg.derivative_clip)
            }
        };

        let fw2 = net.raw_forward(pred_x.view(), &s, &t);
        let use_cycle = lagrangian && cfg.cycle_weight > 0.0;
        let mut d_raw = Array2::<f64>::zeros((b, d));
        let mut d_raw_cycle = Array2::<f64>::zeros((b, d));
        let mut g_xhat = Array2::<f64>::zeros((b, d));
        let mut cycle_rows = vec![false; b];
        let (mut main_sum, mut cycle_sum) = (0.0, 0.0);
        let mut residuals = Vec::with_capacity(b);
        let mut tnorms = Vec::with_capacity(b);
        for i in 0..b {
            if !ok[i] {
                continue;
            }
            let Ok(tgt) = &targets[i] else {
                ok[i] = false;
                continue;
            };
            let tape = Tape::new();
            let raw = tape.vars(fw2.out.row(i).as_slice().expect("row"));
            let px = row(&pred_x.view(), i);
            let pxc: Vec<Var> = px.iter().map(|&v| Var::constant(v)).collect();
            let Ok(u) = velocity_from_raw(m, net.parameterization, &raw, &pxc, Var::cst(s[i]), Var::cst(t[i])) else {
                ok[i] = false;
                continue;
            };
            let w1 = if net.parameterization == Parameterization::X1Pred {
                x1_time_weight(s[i], cfg.x1_eps)
            } else {
                1.0
            };
            let delta: Vec<Var> = u.iter().zip(tgt).map(|(&a, &k)| (a - k) * w1).collect();
            let n2 = norm_sq(&delta);
            let boundary = s[i] == t[i];
            let aw = if cfg.objective == Objective::Semigroup && boundary {
                1.0
            } else {
                adaptive_weight(n2.value(), cfg.adaptive_c, cfg.adaptive_p)
            };
            let iw = if cfg.objective == Objective::Semigroup && cfg.semigroup_interval_weighting {
                (t[i] - s[i]).powi(2)
            } else {
                1.0
            };
            let main = n2 * (aw * iw);
            let cyc = if use_cycle && !boundary {
                let xh = tape.vars(&px);
                match velocity_from_raw(m, net.parameterization, &raw, &xh, Var::cst(s[i]), Var::cst(t[i])) {
                    Ok(uc) => {
                        let step: Vec<Var> = uc.into_iter().map(|a| a * (t[i] - s[i])).collect();
                        let y = m.exp(&xh, &step);
                        let xt: Vec<Var> = xi.row(i).iter().map(|&v| Var::constant(v)).collect();
                        Some((xh, m.dist_sq(&y, &xt)))
                    }
                    Err(_) => {
                        ok[i] = false;
                        continue;
                    }
                }
            } else {
                None
            };
            if !main.value().is_finite() {
                main_sum = f64::NAN;
            }
            residuals.push(u.iter().zip(tgt).map(|(a, k)| (a.value() - k).powi(2)).sum::<f64>());
            tnorms.push(norm_sq(tgt).sqrt());
            main_sum += main.value();
            let adj = tape.gradient(main);
            for k in 0..d {
                d_raw[[i, k]] = adj.wrt(&raw[k]);
            }
            if let Some((xh, c)) = cyc {
                cycle_sum += c.value();
                let adj = tape.backward(&[(c, cfg.cycle_weight)]);
                for k in 0..d {
                    let g = adj.wrt(&raw[k]);
                    d_raw[[i, k]] += g;
                    d_raw_cycle[[i, k]] = g;
                    g_xhat[[i, k]] = adj.wrt(&xh[k]);
                }
                cycle_rows[i] = true;
            }
        }

        let used = ok.iter().filter(|&&v| v).count();
        let mut grad = vec![0.0; net.params.len()];
        let mut stats = LossStats {
            used,
            skipped: b - used,
            residual: Summary::of(&residuals),
            target_norm: Summary::of(&tnorms),
            ..LossStats::default()
        };
        if used == 0 {
            stats.aborted = true;
            stats.loss = f64::NAN;
            return (stats, grad);
        }
        let inv = 1.0 / used as f64;
        d_raw.mapv_inplace(|v| v * inv);
        mlp::backward(&net.shape, &net.params, &fw2, d_raw.view(), Some(&mut grad), false);
        if use_cycle && cycle_rows.iter().any(|&c| c) {
            d_raw_cycle.mapv_inplace(|v| v * inv);
            g_xhat.mapv_inplace(|v| v * inv);
            let gin = mlp::backward(&net.shape, &net.params, &fw2, d_raw_cycle.view(), None, true)
                .expect("input gradient");
            let fw1 = back_fw.as_ref().expect("backward-map cache");
            let mut d_raw1 = Array2::<f64>::zeros((b, d));
            for i in (0..b).filter(|&i| cycle_rows[i]) {
                let tape = Tape::new();
                let raw1 = tape.vars(fw1.out.row(i).as_slice().expect("row"));
                let xt: Vec<Var> = xi.row(i).iter().map(|&v| Var::constant(v)).collect();
                let u1 = velocity_from_raw(m, net.parameterization, &raw1, &xt, Var::cst(t[i]), Var::cst(s[i]))
                    .expect("evaluated above");
                let step: Vec<Var> = u1.into_iter().map(|a| a * (s[i] - t[i])).collect();
                let xh = m.exp(&xt, &step);
                let seeds: Vec<(Var, f64)> = (0..d).map(|k| (xh[k], g_xhat[[i, k]] + gin[[i, k]])).collect();
                let adj = tape.backward(&seeds);
                for k in 0..d {
                    d_raw1[[i, k]] = adj.wrt(&raw1[k]);
                }
            }
            mlp::backward(&net.shape, &net.params, fw1, d_raw1.view(), Some(&mut grad), false);
        }
        stats.main_loss = main_sum * inv;
        stats.cycle_loss = cycle_sum * inv;
        stats.loss = stats.main_loss + cfg.cycle_weight * stats.cycle_loss;
        stats.grad_norm = norm_sq(&grad).sqrt();
        stats.aborted = !stats.loss.is_finite() || !stats.grad_norm.is_finite();
        (stats, grad)
    }
}

/// `B` prior draws paired with `B` data rows chosen uniformly with replacement.
pub fn sample_batch<G: Rng + ?Sized>(
    net: &FlowNet,
    data: &[Vec<f64>],
    b: usize,
    rng: &mut G,
) -> Result<(Array2<f64>, Array2<f64>)> {
    let m = &net.manifold;
    let d = m.ambient_dim();
    if data.is_empty() {
        return Err(Error::Input("empty dataset".into()));
    }
    let mut x0 = Array2::zeros((b, d));
    let mut x1 = Array2::zeros((b, d));
    for i in 0..b {
        let (p, q) = super::sample_pair(m, data, rng)?;
        if q.len() != d {
            return Err(Error::Dimension { expected: d, got: q.len() });
        }
        x0.row_mut(i).assign(&ArrayView1::from(p.coords()));
        x1.row_mut(i).assign(&ArrayView1::from(q.coords()));
    }
    Ok((x0, x1))
}
