//! Closed-form Riemannian primitives on the supported manifolds and on
//! finite products of them.
//!
//! Every manifold is embedded in an ambient `R^n` and carries the induced
//! metric, so inner products of tangent vectors are plain ambient dot products.
//! The low-level methods on [`Manifold`] are generic over [`Real`], which lets
//! the same formulas run on `f64`, on dual numbers (for derivatives of `log`)
//! and on tape variables (for gradients through `exp`/`log`).

mod so3;
mod sphere;

use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::autodiff::{dot, norm_sq, seed, Dual, Real};
use crate::error::{Error, Result};

/// Below this squared angle the sphere and SO(3) formulas switch to series.
pub(crate) const SMALL_ANGLE_SQ: f64 = 1e-12;
/// `log` requires `cos θ > −1 + CUT_LOCUS_TOL`.
pub const CUT_LOCUS_TOL: f64 = 1e-6;
/// Tolerance of the point and tangent invariants.
pub const MEMBERSHIP_TOL: f64 = 1e-9;

#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Manifold {
    /// `R^d`.
    Euclidean(usize),
    /// Unit sphere in `R^n`; the payload is the ambient dimension `n ≥ 2`.
    Sphere(usize),
    /// Rotation matrices, row-major in `R^9`.
    So3,
    Product(Vec<Manifold>),
}

impl std::fmt::Display for Manifold {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            Manifold::Euclidean(d) => write!(f, "R^{d}"),
            Manifold::Sphere(n) => write!(f, "S^{}", n - 1),
            Manifold::So3 => write!(f, "SO3"),
            Manifold::Product(fs) => {
                for (i, m) in fs.iter().enumerate() {
                    if i > 0 {
                        write!(f, " x ")?;
                    }
                    write!(f, "{m}")?;
                }
                Ok(())
            }
        }
    }
}

/// Validated point: ambient coordinates satisfying the manifold invariants.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Point(Vec<f64>);

impl Point {
    /// Wraps coordinates without validation. Callers own the invariant.
    pub fn new_unchecked(coords: Vec<f64>) -> Self {
        Point(coords)
    }

    pub fn coords(&self) -> &[f64] {
        &self.0
    }

    pub fn into_inner(self) -> Vec<f64> {
        self.0
    }
}

impl std::ops::Deref for Point {
    type Target = [f64];
    fn deref(&self) -> &[f64] {
        &self.0
    }
}

/// Tangent vector in ambient coordinates, attached to its base point.
#[derive(Debug, Clone, PartialEq)]
pub struct Tangent {
    pub base: Point,
    pub coords: Vec<f64>,
}

impl Tangent {
    pub fn norm(&self) -> f64 {
        norm_sq(&self.coords).sqrt()
    }
}

impl std::ops::Deref for Tangent {
    type Target = [f64];
    fn deref(&self) -> &[f64] {
        &self.coords
    }
}

impl Manifold {
    /// Validates the descriptor itself.
    pub fn validate(&self) -> Result<()> {
        match self {
            Manifold::Euclidean(d) if *d == 0 => Err(Error::Input("Euclidean(0)".into())),
            Manifold::Sphere(n) if *n < 2 => Err(Error::Input(format!(
                "Sphere ambient dimension must be at least 2, got {n}"
            ))),
            Manifold::Product(fs) if fs.is_empty() => {
                Err(Error::Input("empty product manifold".into()))
            }
            Manifold::Product(fs) => fs.iter().try_for_each(Manifold::validate),
            _ => Ok(()),
        }
    }

    pub fn ambient_dim(&self) -> usize {
        match self {
            Manifold::Euclidean(d) => *d,
            Manifold::Sphere(n) => *n,
            Manifold::So3 => 9,
            Manifold::Product(fs) => fs.iter().map(Manifold::ambient_dim).sum(),
        }
    }

    pub fn intrinsic_dim(&self) -> usize {
        match self {
            Manifold::Euclidean(d) => *d,
            Manifold::Sphere(n) => n - 1,
            Manifold::So3 => 3,
            Manifold::Product(fs) => fs.iter().map(Manifold::intrinsic_dim).sum(),
        }
    }

    pub fn is_euclidean(&self) -> bool {
        matches!(self, Manifold::Euclidean(_))
    }

    /// Applies `f` per product factor on aligned slices and concatenates.
    fn factorwise<R: Real>(
        fs: &[Manifold],
        a: &[R],
        b: &[R],
        mut f: impl FnMut(&Manifold, &[R], &[R]) -> Result<Vec<R>>,
    ) -> Result<Vec<R>> {
        let mut out = Vec::with_capacity(a.len());
        let mut off = 0;
        for m in fs {
            let n = m.ambient_dim();
            out.extend(f(m, &a[off..off + n], &b[off..off + n])?);
            off += n;
        }
        Ok(out)
    }

    fn factorwise3<R: Real>(
        fs: &[Manifold],
        a: &[R],
        b: &[R],
        c: &[R],
        mut f: impl FnMut(&Manifold, &[R], &[R], &[R]) -> Result<Vec<R>>,
    ) -> Result<Vec<R>> {
        let mut out = Vec::with_capacity(a.len());
        let mut off = 0;
        for m in fs {
            let n = m.ambient_dim();
            let r = off..off + n;
            out.extend(f(m, &a[r.clone()], &b[r.clone()], &c[r])?);
            off += n;
        }
        Ok(out)
    }

    /// Orthogonal projection of an ambient vector onto `T_x M`.
    pub fn proj<R: Real>(&self, x: &[R], v: &[R]) -> Vec<R> {
        match self {
            Manifold::Euclidean(_) => v.to_vec(),
            Manifold::Sphere(_) => sphere::proj(x, v),
            Manifold::So3 => so3::proj(x, v),
            Manifold::Product(fs) => {
                Self::factorwise(fs, x, v, |m, x, v| Ok(m.proj(x, v))).expect("infallible")
            }
        }
    }

    pub fn exp<R: Real>(&self, x: &[R], v: &[R]) -> Vec<R> {
        match self {
            Manifold::Euclidean(_) => x.iter().zip(v).map(|(&a, &b)| a + b).collect(),
            Manifold::Sphere(_) => sphere::exp(x, v),
            Manifold::So3 => so3::exp(x, v),
            Manifold::Product(fs) => {
                Self::factorwise(fs, x, v, |m, x, v| Ok(m.exp(x, v))).expect("infallible")
            }
        }
    }

    pub fn log<R: Real>(&self, x: &[R], y: &[R]) -> Result<Vec<R>> {
        match self {
            Manifold::Euclidean(_) => Ok(y.iter().zip(x).map(|(&a, &b)| a - b).collect()),
            Manifold::Sphere(_) => sphere::log(x, y),
            Manifold::So3 => so3::log(x, y),
            Manifold::Product(fs) => Self::factorwise(fs, x, y, |m, x, y| m.log(x, y)),
        }
    }

    /// Squared geodesic distance. Defined everywhere, including the cut locus.
    pub fn dist_sq<R: Real>(&self, x: &[R], y: &[R]) -> R {
        match self {
            Manifold::Euclidean(_) => x
                .iter()
                .zip(y)
                .fold(R::zero(), |acc, (&a, &b)| acc + (a - b) * (a - b)),
            Manifold::Sphere(_) => sphere::dist_sq(x, y),
            Manifold::So3 => so3::dist_sq(x, y),
            Manifold::Product(fs) => {
                let mut acc = R::zero();
                let mut off = 0;
                for m in fs {
                    let n = m.ambient_dim();
                    acc = acc + m.dist_sq(&x[off..off + n], &y[off..off + n]);
                    off += n;
                }
                acc
            }
        }
    }

    pub fn dist(&self, x: &[f64], y: &[f64]) -> f64 {
        self.dist_sq(x, y).sqrt()
    }

    /// Parallel transport of `v ∈ T_x M` along the minimizing geodesic to `y`.
    pub fn transport<R: Real>(&self, x: &[R], y: &[R], v: &[R]) -> Result<Vec<R>> {
        match self {
            Manifold::Euclidean(_) => Ok(v.to_vec()),
            Manifold::Sphere(_) => sphere::transport(x, y, v),
            Manifold::So3 => so3::transport(x, y, v),
            Manifold::Product(fs) => {
                Self::factorwise3(fs, x, y, v, |m, x, y, v| m.transport(x, y, v))
            }
        }
    }

    /// `exp_{x0}(t · log_{x0}(x1))`.
    pub fn interpolate<R: Real>(&self, x0: &[R], x1: &[R], t: R) -> Result<Vec<R>> {
        let l = self.log(x0, x1)?;
        let step: Vec<R> = l.into_iter().map(|v| v * t).collect();
        Ok(self.exp(x0, &step))
    }

    /// Maps an unconstrained ambient vector onto the manifold: identity on
    /// `R^d`, normalization on spheres, polar factor with determinant sign fix
    /// on SO(3), factor-wise on products.
    pub fn to_manifold<R: Real>(&self, raw: &[R]) -> Result<Vec<R>> {
        match self {
            Manifold::Euclidean(_) => Ok(raw.to_vec()),
            Manifold::Sphere(_) => sphere::normalize(raw),
            Manifold::So3 => so3::polar(raw),
            Manifold::Product(fs) => {
                let mut out = Vec::with_capacity(raw.len());
                let mut off = 0;
                for m in fs {
                    let n = m.ambient_dim();
                    out.extend(m.to_manifold(&raw[off..off + n])?);
                    off += n;
                }
                Ok(out)
            }
        }
    }

    /// Differential of `y ↦ log_x(y)` applied to `w ∈ T_y M`, in `T_x M`.
    pub fn dlog_second(&self, x: &[f64], y: &[f64], w: &[f64]) -> Result<Vec<f64>> {
        let xd: Vec<Dual> = x.iter().map(|&v| Dual::constant(v)).collect();
        let l = self.log(&xd, &seed(y, w))?;
        let d: Vec<f64> = l.iter().map(|v| v.deriv).collect();
        Ok(self.proj(x, &d))
    }

    /// Covariant derivative of the field `z ↦ log_z(y)` at `x` along `v ∈ T_x M`.
    pub fn dlog_first(&self, x: &[f64], y: &[f64], v: &[f64]) -> Result<Vec<f64>> {
        let yd: Vec<Dual> = y.iter().map(|&v| Dual::constant(v)).collect();
        let l = self.log(&seed(x, v), &yd)?;
        let d: Vec<f64> = l.iter().map(|v| v.deriv).collect();
        Ok(self.proj(x, &d))
    }

    /// Max violation of the point invariants.
    pub fn point_error(&self, x: &[f64]) -> f64 {
        match self {
            Manifold::Euclidean(_) => {
                if x.iter().all(|v| v.is_finite()) {
                    0.0
                } else {
                    f64::INFINITY
                }
            }
            Manifold::Sphere(_) => (norm_sq(x).sqrt() - 1.0).abs(),
            Manifold::So3 => {
                so3::orthogonality_error(x).max((so3::det_of(x) - 1.0).abs())
            }
            Manifold::Product(fs) => {
                let mut off = 0;
                let mut worst = 0.0f64;
                for m in fs {
                    let n = m.ambient_dim();
                    worst = worst.max(m.point_error(&x[off..off + n]));
                    off += n;
                }
                worst
            }
        }
    }

    /// Max violation of the tangent invariants at `x`.
    pub fn tangent_error(&self, x: &[f64], v: &[f64]) -> f64 {
        match self {
            Manifold::Euclidean(_) => 0.0,
            Manifold::Sphere(_) => dot(x, v).abs(),
            Manifold::So3 => so3::skew_error(x, v),
            Manifold::Product(fs) => {
                let mut off = 0;
                let mut worst = 0.0f64;
                for m in fs {
                    let n = m.ambient_dim();
                    worst = worst.max(m.tangent_error(&x[off..off + n], &v[off..off + n]));
                    off += n;
                }
                worst
            }
        }
    }

    fn check_len(&self, v: &[f64]) -> Result<()> {
        let n = self.ambient_dim();
        if v.len() != n {
            return Err(Error::Dimension {
                expected: n,
                got: v.len(),
            });
        }
        Ok(())
    }

    /// Validates coordinates and wraps them as a [`Point`].
    pub fn point(&self, coords: Vec<f64>) -> Result<Point> {
        self.check_len(&coords)?;
        let e = self.point_error(&coords);
        if !(e <= MEMBERSHIP_TOL) {
            return Err(Error::NotOnManifold {
                manifold: self.to_string(),
                detail: format!("invariant violated by {e:e}"),
            });
        }
        Ok(Point(coords))
    }

    /// Validates coordinates as a tangent vector at `base`.
    pub fn tangent(&self, base: &Point, coords: Vec<f64>) -> Result<Tangent> {
        self.check_len(&coords)?;
        let e = self.tangent_error(base, &coords);
        if !(e <= MEMBERSHIP_TOL * (1.0 + norm_sq(&coords).sqrt())) {
            return Err(Error::NotOnManifold {
                manifold: self.to_string(),
                detail: format!("vector not tangent at base (violation {e:e})"),
            });
        }
        Ok(Tangent {
            base: base.clone(),
            coords,
        })
    }

    pub fn zero_tangent(&self, base: &Point) -> Tangent {
        Tangent {
            base: base.clone(),
            coords: vec![0.0; self.ambient_dim()],
        }
    }

    /// Prior sample: standard normal on `R^d`, uniform on spheres, Haar on SO(3).
    pub fn random_point<G: Rng + ?Sized>(&self, rng: &mut G) -> Point {
        Point(self.random_coords(rng))
    }

    fn random_coords<G: Rng + ?Sized>(&self, rng: &mut G) -> Vec<f64> {
        match self {
            Manifold::Euclidean(d) => (0..*d).map(|_| rng.sample(StandardNormal)).collect(),
            Manifold::Sphere(n) => loop {
                let g: Vec<f64> = (0..*n).map(|_| rng.sample(StandardNormal)).collect();
                let r = norm_sq(&g).sqrt();
                if r > 1e-12 {
                    break g.into_iter().map(|v| v / r).collect();
                }
            },
            Manifold::So3 => {
                let g: [[f64; 3]; 3] = std::array::from_fn(|_| {
                    std::array::from_fn(|_| rng.sample(StandardNormal))
                });
                so3::from_gaussian_columns(g)
            }
            Manifold::Product(fs) => fs.iter().flat_map(|m| m.random_coords(rng)).collect(),
        }
    }

    /// Standard Gaussian in the tangent space at `x` (ambient normal, projected).
    pub fn random_tangent<G: Rng + ?Sized>(&self, x: &[f64], rng: &mut G) -> Vec<f64> {
        let g: Vec<f64> = (0..self.ambient_dim())
            .map(|_| rng.sample(StandardNormal))
            .collect();
        self.proj(x, &g)
    }
}

// Checked, typed entry points.

pub fn proj_tangent(m: &Manifold, x: &Point, v_ambient: &[f64]) -> Result<Tangent> {
    m.check_len(x)?;
    m.check_len(v_ambient)?;
    Ok(Tangent {
        base: x.clone(),
        coords: m.proj(x, v_ambient),
    })
}

/// Alias of [`proj_tangent`] read as `D_t V = Proj_x(dV/dt)`.
pub fn covariant_deriv_projection(m: &Manifold, x: &Point, dv_ambient: &[f64]) -> Result<Tangent> {
    proj_tangent(m, x, dv_ambient)
}

pub fn exp(m: &Manifold, x: &Point, v: &Tangent) -> Result<Point> {
    m.check_len(x)?;
    m.check_len(v)?;
    Ok(Point(m.exp(x.coords(), v.coords.as_slice())))
}

pub fn log(m: &Manifold, x: &Point, y: &Point) -> Result<Tangent> {
    m.check_len(x)?;
    m.check_len(y)?;
    Ok(Tangent {
        base: x.clone(),
        coords: m.log(x.coords(), y.coords())?,
    })
}

pub fn geodesic_distance(m: &Manifold, x: &Point, y: &Point) -> f64 {
    m.dist(x, y)
}

pub fn geodesic_interpolate(m: &Manifold, x0: &Point, x1: &Point, t: f64) -> Result<Point> {
    Ok(Point(m.interpolate(x0.coords(), x1.coords(), t)?))
}

pub fn parallel_transport(m: &Manifold, x: &Point, y: &Point, v: &Tangent) -> Result<Tangent> {
    Ok(Tangent {
        base: y.clone(),
        coords: m.transport(x.coords(), y.coords(), &v.coords)?,
    })
}

pub fn dlog_second_arg(m: &Manifold, x: &Point, y: &Point, w: &Tangent) -> Result<Tangent> {
    Ok(Tangent {
        base: x.clone(),
        coords: m.dlog_second(x, y, w)?,
    })
}

pub fn dlog_first_arg(m: &Manifold, x: &Point, y: &Point, v: &Tangent) -> Result<Tangent> {
    Ok(Tangent {
        base: x.clone(),
        coords: m.dlog_first(x, y, v)?,
    })
}

pub fn random_point<G: Rng + ?Sized>(m: &Manifold, rng: &mut G) -> Point {
    m.random_point(rng)
}
