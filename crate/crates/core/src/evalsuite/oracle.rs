//! Analytic average-velocity fields and a reference ODE integrator.

use ndarray::ArrayView2;
use serde::{Deserialize, Serialize};

use crate::autodiff::{dot, lift, seed, unzip, Dual, Real};
use crate::error::{Error, Result};
use crate::geometry::Manifold;
use crate::model::AverageVelocity;

fn cross<R: Real>(a: &[f64; 3], x: &[R]) -> [R; 3] {
    [
        x[2] * a[1] - x[1] * a[2],
        x[0] * a[2] - x[2] * a[0],
        x[1] * a[0] - x[0] * a[1],
    ]
}

/// Rigid rotation of S² about a fixed axis at constant angular speed.
///
/// The flow is `Φ_{s,t}(x) = R(ω(t − s)) x` and the instantaneous field is
/// `ω a × x`, independent of time.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RotationFlowOracle {
    pub axis: [f64; 3],
    pub angular_speed: f64,
    #[serde(skip, default = "sphere2")]
    manifold: Manifold,
}

fn sphere2() -> Manifold {
    Manifold::Sphere(3)
}

impl RotationFlowOracle {
    pub fn new(axis: [f64; 3], angular_speed: f64) -> Result<Self> {
        let n = dot(&axis, &axis).sqrt();
        if (n - 1.0).abs() > 1e-12 {
            return Err(Error::Input(format!("rotation axis must be a unit vector, |a| = {n}")));
        }
        if !angular_speed.is_finite() {
            return Err(Error::Input("angular speed must be finite".into()));
        }
        Ok(RotationFlowOracle {
            axis,
            angular_speed,
            manifold: sphere2(),
        })
    }

    /// Rodrigues rotation by `angle` about the axis.
    pub fn rotate<R: Real>(&self, x: &[R], angle: R) -> Vec<R> {
        let a = &self.axis;
        let (c, s) = (angle.cos(), angle.sin());
        let ax = cross(a, x);
        let ad = x[0] * a[0] + x[1] * a[1] + x[2] * a[2];
        (0..3)
            .map(|k| x[k] * c + ax[k] * s + (R::one() - c) * ad * a[k])
            .collect()
    }

    /// Exact flow `Φ_{s,t}(x)`.
    pub fn flow(&self, x: &[f64], s: f64, t: f64) -> Vec<f64> {
        self.rotate(x, self.angular_speed * (t - s))
    }

    /// Instantaneous velocity `ω a × x`.
    pub fn instantaneous(&self, x: &[f64]) -> Vec<f64> {
        cross(&self.axis, x).iter().map(|v| v * self.angular_speed).collect()
    }

    /// Average velocity at `(x, s, t)`.
    ///
    /// At `t = s` the first-order expansion in `h = t − s` is used, so forward
    /// derivatives in the times stay exact there.
    pub fn average<R: Real>(&self, x: &[R], s: R, t: R) -> Result<Vec<R>> {
        let h = t - s;
        let w = self.angular_speed;
        if h.value() == 0.0 {
            let a = &self.axis;
            let ax = cross(a, x);
            let ad = x[0] * a[0] + x[1] * a[1] + x[2] * a[2];
            return Ok((0..3)
                .map(|k| ax[k] * w + h * (ad * (x[k] * ad * -1.0 + a[k])) * (0.5 * w * w))
                .collect());
        }
        let angle = h * w;
        if angle.value().abs() >= std::f64::consts::PI {
            return Err(Error::Domain(format!(
                "rotation angle {} leaves the injectivity radius",
                angle.value()
            )));
        }
        let y = self.rotate(x, angle);
        let inv = h.powi(-1);
        Ok(self.manifold.log(x, &y)?.into_iter().map(|v| v * inv).collect())
    }
}

fn rows_map<T, F: Fn(usize) -> Result<T>>(n: usize, f: F) -> Vec<Result<T>> {
    (0..n).map(f).collect()
}

impl AverageVelocity for RotationFlowOracle {
    fn manifold(&self) -> &Manifold {
        &self.manifold
    }

    fn velocity(&self, x: ArrayView2<f64>, s: &[f64], t: &[f64]) -> Vec<Result<Vec<f64>>> {
        rows_map(x.nrows(), |i| self.average(&x.row(i).to_vec(), s[i], t[i]))
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
        rows_map(x.nrows(), |i| {
            let xd = seed(&x.row(i).to_vec(), &dx.row(i).to_vec());
            let u = self.average(&xd, Dual::new(s[i], ds[i]), Dual::new(t[i], dt[i]))?;
            Ok(unzip(&u))
        })
    }
}

/// `u + scale · Proj_x(q)`: a field that violates the identities.
#[derive(Debug, Clone)]
pub struct CorruptedField<A> {
    pub inner: A,
    pub q: Vec<f64>,
    pub scale: f64,
}

impl<A: AverageVelocity> AverageVelocity for CorruptedField<A> {
    fn manifold(&self) -> &Manifold {
        self.inner.manifold()
    }

    fn velocity(&self, x: ArrayView2<f64>, s: &[f64], t: &[f64]) -> Vec<Result<Vec<f64>>> {
        let m = self.manifold();
        self.inner
            .velocity(x, s, t)
            .into_iter()
            .enumerate()
            .map(|(i, u)| {
                let p = m.proj(&x.row(i).to_vec(), &self.q);
                Ok(u?.iter().zip(&p).map(|(a, b)| a + self.scale * b).collect())
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
        let m = self.manifold();
        let q: Vec<Dual> = lift(&self.q);
        self.inner
            .velocity_jvp(x, dx, s, ds, t, dt)
            .into_iter()
            .enumerate()
            .map(|(i, r)| {
                let (u, du) = r?;
                let xd = seed(&x.row(i).to_vec(), &dx.row(i).to_vec());
                let (p, dp) = unzip(&m.proj(&xd, &q));
                Ok((
                    u.iter().zip(&p).map(|(a, b)| a + self.scale * b).collect(),
                    du.iter().zip(&dp).map(|(a, b)| a + self.scale * b).collect(),
                ))
            })
            .collect()
    }
}

/// Time-independent field with a fixed ambient value, projected at each point.
/// On Euclidean space it is the constant flow `x + (t − s) c`.
#[derive(Debug, Clone)]
pub struct ConstantField {
    pub manifold: Manifold,
    pub c: Vec<f64>,
}

impl AverageVelocity for ConstantField {
    fn manifold(&self) -> &Manifold {
        &self.manifold
    }

    fn velocity(&self, x: ArrayView2<f64>, _s: &[f64], _t: &[f64]) -> Vec<Result<Vec<f64>>> {
        rows_map(x.nrows(), |i| Ok(self.manifold.proj(&x.row(i).to_vec(), &self.c)))
    }

    fn velocity_jvp(
        &self,
        x: ArrayView2<f64>,
        dx: ArrayView2<f64>,
        _s: &[f64],
        _ds: &[f64],
        _t: &[f64],
        _dt: &[f64],
    ) -> Vec<Result<(Vec<f64>, Vec<f64>)>> {
        let c: Vec<Dual> = lift(&self.c);
        rows_map(x.nrows(), |i| {
            let xd = seed(&x.row(i).to_vec(), &dx.row(i).to_vec());
            Ok(unzip(&self.manifold.proj(&xd, &c)))
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum OdeScheme {
    /// `x ← exp_x(h v(x, τ))`.
    Euler,
    /// Classical RK4 stages, each transported back to the current point.
    Rk4,
}

/// Integrates `dx/dτ = v(x, τ)` from `s` to `t` in `steps` geodesic substeps.
pub fn ode_reference_flow<V>(v: V, m: &Manifold, x: &[f64], s: f64, t: f64, steps: usize, scheme: OdeScheme) -> Result<Vec<f64>>
where
    V: Fn(&[f64], f64) -> Vec<f64>,
{
    if steps == 0 {
        return Err(Error::Input("ode_reference_flow needs at least one step".into()));
    }
    let h = (t - s) / steps as f64;
    let mut x = x.to_vec();
    let axpy = |a: &[f64], k: f64, b: &[f64]| -> Vec<f64> { a.iter().zip(b).map(|(p, q)| p + k * q).collect() };
    for n in 0..steps {
        let tau = s + n as f64 * h;
        let dir = match scheme {
            OdeScheme::Euler => m.proj(&x, &v(&x, tau)),
            OdeScheme::Rk4 => {
                let zero = vec![0.0; x.len()];
                let stage = |k: &[f64], c: f64| -> Result<Vec<f64>> {
                    let y = m.exp(&x, &axpy(&zero, c * h, k));
                    let ky = m.proj(&y, &v(&y, tau + c * h));
                    m.transport(&y, &x, &ky)
                };
                let k1 = m.proj(&x, &v(&x, tau));
                let k2 = stage(&k1, 0.5)?;
                let k3 = stage(&k2, 0.5)?;
                let k4 = stage(&k3, 1.0)?;
                (0..x.len())
                    .map(|j| (k1[j] + 2.0 * k2[j] + 2.0 * k3[j] + k4[j]) / 6.0)
                    .collect()
            }
        };
        let step: Vec<f64> = dir.iter().map(|d| d * h).collect();
        x = m.exp(&x, &step);
    }
    Ok(x)
}
