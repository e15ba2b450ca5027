//! The average-velocity predictor `u^θ_{s,t}`: an MLP conditioned on two
//! times whose raw output is mapped to a velocity by the parameterization.

mod checkpoint;
pub mod mlp;

use ndarray::{Array2, ArrayView2};
use serde::{Deserialize, Serialize};

use crate::autodiff::{seed, unzip, Dual, Real, Tape};
use crate::error::{Error, Result};
use crate::geometry::{Manifold, Point, Tangent};

pub use checkpoint::{load_checkpoint, save_checkpoint, CheckpointHeader};
pub use mlp::{forward_generic, init_params, time_embed, NetShape};

/// How raw network outputs become average velocities.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Parameterization {
    /// `u = Proj_x(raw)`.
    VPred,
    /// `u = log_x(x̂₁)/(1 − s)` with `x̂₁` the raw output mapped onto the manifold.
    X1Pred,
    /// `u = log_x(x̂_t)/(t − s)`; at `t = s` falls back to `Proj_x(raw)`.
    XtPred,
}

impl std::fmt::Display for Parameterization {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Parameterization::VPred => "v_pred",
            Parameterization::X1Pred => "x1_pred",
            Parameterization::XtPred => "xt_pred",
        })
    }
}

/// Largest first time accepted by x₁-prediction.
pub const X1_MAX_S: f64 = 1.0 - 1e-12;

/// Maps a raw head output at `(x, s, t)` to the average velocity.
///
/// Generic so that the same code yields values, forward derivatives in any of
/// `raw`, `x`, `s`, `t`, and reverse-mode pullbacks.
pub fn velocity_from_raw<R: Real>(
    m: &Manifold,
    p: Parameterization,
    raw: &[R],
    x: &[R],
    s: R,
    t: R,
) -> Result<Vec<R>> {
    match p {
        Parameterization::VPred => Ok(m.proj(x, raw)),
        Parameterization::X1Pred => {
            if s.value() >= X1_MAX_S {
                return Err(Error::Domain(format!(
                    "x1-prediction undefined at s = {}",
                    s.value()
                )));
            }
            let x1 = m.to_manifold(raw)?;
            let inv = (R::one() - s).powi(-1);
            Ok(m.log(x, &x1)?.into_iter().map(|v| v * inv).collect())
        }
        Parameterization::XtPred => {
            if t.value() == s.value() {
                return Ok(m.proj(x, raw));
            }
            let xt = m.to_manifold(raw)?;
            let l = m.log(x, &xt).map_err(|e| Error::Domain(format!("xt-prediction: {e}")))?;
            let inv = (t - s).powi(-1);
            Ok(l.into_iter().map(|v| v * inv).collect())
        }
    }
}

/// Anything that provides an average velocity `u_{s,t}(x)` on a manifold.
///
/// Batches are row-major `B × ambient_dim` arrays; times are per row.
/// Per-row failures (domain errors) are reported individually.
pub trait AverageVelocity: Sync {
    fn manifold(&self) -> &Manifold;

    fn velocity(&self, x: ArrayView2<f64>, s: &[f64], t: &[f64]) -> Vec<Result<Vec<f64>>>;

    /// `u` and its directional derivative along `(dx, ds, dt)`.
    #[allow(clippy::too_many_arguments)]
    fn velocity_jvp(
        &self,
        x: ArrayView2<f64>,
        dx: ArrayView2<f64>,
        s: &[f64],
        ds: &[f64],
        t: &[f64],
        dt: &[f64],
    ) -> Vec<Result<(Vec<f64>, Vec<f64>)>>;

    /// Pulls the ambient cotangent `g` on `Φ_{s,t}(x)` back to an ambient
    /// cotangent on `x`. The default uses one JVP per ambient direction.
    fn flow_map_vjp(
        &self,
        x: ArrayView2<f64>,
        s: &[f64],
        t: &[f64],
        g: ArrayView2<f64>,
    ) -> Vec<Result<Vec<f64>>> {
        let m = self.manifold();
        let (b, d) = x.dim();
        let zeros = vec![0.0; b];
        let mut out: Vec<Result<Vec<f64>>> = (0..b).map(|_| Ok(vec![0.0; d])).collect();
        for j in 0..d {
            let mut dx = Array2::zeros((b, d));
            dx.column_mut(j).fill(1.0);
            let jv = self.velocity_jvp(x, dx.view(), s, &zeros, t, &zeros);
            for (i, r) in jv.into_iter().enumerate() {
                let Ok(acc) = out[i].as_mut() else { continue };
                match r {
                    Ok((u, du)) => {
                        let xi = seed(x.row(i).as_slice().expect("row"), dx.row(i).as_slice().expect("row"));
                        let h = t[i] - s[i];
                        let step: Vec<Dual> = u.iter().zip(&du).map(|(&a, &b)| Dual::new(a * h, b * h)).collect();
                        let y = m.exp(&xi, &step);
                        acc[j] = y.iter().zip(g.row(i)).map(|(yk, gk)| yk.deriv * gk).sum();
                    }
                    Err(e) => out[i] = Err(e),
                }
            }
        }
        out
    }
}

/// `Φ_{s,t}(x) = exp_x((t − s) u_{s,t}(x))` row-wise.
pub fn flow_map_batch<A: AverageVelocity + ?Sized>(
    model: &A,
    x: ArrayView2<f64>,
    s: &[f64],
    t: &[f64],
) -> Vec<Result<Vec<f64>>> {
    let m = model.manifold();
    model
        .velocity(x, s, t)
        .into_iter()
        .enumerate()
        .map(|(i, u)| {
            let h = t[i] - s[i];
            if h == 0.0 {
                return Ok(x.row(i).to_vec());
            }
            let step: Vec<f64> = u?.into_iter().map(|v| v * h).collect();
            Ok(m.exp(x.row(i).as_slice().expect("row"), &step))
        })
        .collect()
}

/// A concrete network with its parameters.
#[derive(Debug, Clone, PartialEq)]
pub struct FlowNet {
    pub manifold: Manifold,
    pub shape: NetShape,
    pub parameterization: Parameterization,
    pub params: Vec<f64>,
}

impl FlowNet {
    pub fn new(
        manifold: Manifold,
        shape: NetShape,
        parameterization: Parameterization,
        params: Vec<f64>,
    ) -> Result<Self> {
        manifold.validate()?;
        shape.validate()?;
        if shape.ambient_dim != manifold.ambient_dim() {
            return Err(Error::Dimension {
                expected: manifold.ambient_dim(),
                got: shape.ambient_dim,
            });
        }
        if params.len() != shape.param_count() {
            return Err(Error::Dimension {
                expected: shape.param_count(),
                got: params.len(),
            });
        }
        Ok(FlowNet {
            manifold,
            shape,
            parameterization,
            params,
        })
    }

    /// Fresh network with variance-scaled initialization and a 0.01 head.
    pub fn init<G: rand::Rng + ?Sized>(
        manifold: Manifold,
        shape: NetShape,
        parameterization: Parameterization,
        rng: &mut G,
    ) -> Result<Self> {
        shape.validate()?;
        let params = init_params(&shape, 0.01, rng);
        Self::new(manifold, shape, parameterization, params)
    }

    pub fn with_params(&self, params: Vec<f64>) -> Self {
        assert_eq!(params.len(), self.params.len());
        FlowNet {
            params,
            ..self.clone()
        }
    }

    /// Raw head outputs with the activation cache.
    pub fn raw_forward(&self, x: ArrayView2<f64>, s: &[f64], t: &[f64]) -> mlp::Forward {
        let input = mlp::build_input(&self.shape, x, s, t);
        mlp::forward(&self.shape, &self.params, input)
    }

    /// Single-point prediction with checked types.
    pub fn predict_u(&self, x: &Point, s: f64, t: f64) -> Result<Tangent> {
        let d = self.manifold.ambient_dim();
        if x.len() != d {
            return Err(Error::Dimension {
                expected: d,
                got: x.len(),
            });
        }
        let xa = ArrayView2::from_shape((1, d), x.coords()).expect("row");
        let u = self.velocity(xa, &[s], &[t]).pop().expect("one row")?;
        Ok(Tangent {
            base: x.clone(),
            coords: u,
        })
    }

    /// Maps a raw head row to the manifold (the predicted endpoint for
    /// x₁-prediction).
    pub fn raw_to_point(&self, raw: &[f64]) -> Result<Vec<f64>> {
        self.manifold.to_manifold(raw)
    }
}

impl AverageVelocity for FlowNet {
    fn manifold(&self) -> &Manifold {
        &self.manifold
    }

    fn velocity(&self, x: ArrayView2<f64>, s: &[f64], t: &[f64]) -> Vec<Result<Vec<f64>>> {
        let fw = self.raw_forward(x, s, t);
        (0..x.nrows())
            .map(|i| {
                velocity_from_raw(
                    &self.manifold,
                    self.parameterization,
                    fw.out.row(i).as_slice().expect("row"),
                    x.row(i).as_slice().expect("row"),
                    s[i],
                    t[i],
                )
            })
            .collect()
    }

    fn velocity_jvp(
        &self,
        x: ArrayView2<f64>,
        dx: ArrayView2<f64>,
        s: &[f64],
        ds: &[f64],
        t: &[f64],
        dt: &[f64],
    ) -> Vec<Result<(Vec<f64>, Vec<f64>)>> {
        let (input, tangent) = mlp::build_input_tangent(&self.shape, x, dx, s, ds, t, dt);
        let (fw, dout) = mlp::forward_tangent(&self.shape, &self.params, input, tangent);
        (0..x.nrows())
            .map(|i| {
                let raw = seed(
                    fw.out.row(i).as_slice().expect("row"),
                    dout.row(i).as_slice().expect("row"),
                );
                let xd = seed(
                    x.row(i).as_slice().expect("row"),
                    dx.row(i).as_slice().expect("row"),
                );
                let u = velocity_from_raw(
                    &self.manifold,
                    self.parameterization,
                    &raw,
                    &xd,
                    Dual::new(s[i], ds[i]),
                    Dual::new(t[i], dt[i]),
                )?;
                Ok(unzip(&u))
            })
            .collect()
    }

    fn flow_map_vjp(
        &self,
        x: ArrayView2<f64>,
        s: &[f64],
        t: &[f64],
        g: ArrayView2<f64>,
    ) -> Vec<Result<Vec<f64>>> {
        let (b, d) = x.dim();
        let fw = self.raw_forward(x, s, t);
        let mut d_raw = Array2::zeros((b, d));
        let mut direct: Vec<Result<Vec<f64>>> = Vec::with_capacity(b);
        for i in 0..b {
            let tape = Tape::new();
            let raw = tape.vars(fw.out.row(i).as_slice().expect("row"));
            let xv = tape.vars(x.row(i).as_slice().expect("row"));
            let res = velocity_from_raw(
                &self.manifold,
                self.parameterization,
                &raw,
                &xv,
                Real::cst(s[i]),
                Real::cst(t[i]),
            );
            match res {
                Ok(u) => {
                    let h = t[i] - s[i];
                    let step: Vec<_> = u.into_iter().map(|v| v * h).collect();
                    let y = self.manifold.exp(&xv, &step);
                    let seeds: Vec<_> = y.iter().zip(g.row(i)).map(|(&yk, &gk)| (yk, gk)).collect();
                    let adj = tape.backward(&seeds);
                    for (k, r) in raw.iter().enumerate() {
                        d_raw[[i, k]] = adj.wrt(r);
                    }
                    direct.push(Ok(adj.wrt_all(&xv)));
                }
                Err(e) => direct.push(Err(e)),
            }
        }
        let gin = mlp::backward(&self.shape, &self.params, &fw, d_raw.view(), None, true)
            .expect("input gradient requested");
        direct
            .into_iter()
            .enumerate()
            .map(|(i, r)| {
                let mut gx = r?;
                for (k, v) in gx.iter_mut().enumerate() {
                    *v += gin[[i, k]];
                }
                Ok(gx)
            })
            .collect()
    }
}

/// Exponential moving average of the parameters.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EmaState {
    pub shadow: Vec<f64>,
    pub decay: f64,
}

impl EmaState {
    pub fn new(params: &[f64], decay: f64) -> Self {
        EmaState {
            shadow: params.to_vec(),
            decay,
        }
    }

    /// `shadow ← decay·shadow + (1 − decay)·params`.
    pub fn update(&mut self, params: &[f64]) {
        assert_eq!(params.len(), self.shadow.len(), "EMA shape mismatch");
        let d = self.decay;
        for (s, &p) in self.shadow.iter_mut().zip(params) {
            *s = d * *s + (1.0 - d) * p;
        }
    }
}

#[cfg(test)]
mod tests;
