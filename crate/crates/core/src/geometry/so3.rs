//! SO(3) embedded in R^9 (row-major 3×3) with the induced Frobenius metric.
//!
//! Tangent vectors at `X` are `X·Ω` with `Ω` skew-symmetric, so
//! `‖X·hat(ω)‖_F = √2·‖ω‖` and the geodesic distance is `√2·angle(XᵀY)`.

use crate::autodiff::Real;
use crate::error::{Error, Result};

use super::{sphere::angle_over_sine, CUT_LOCUS_TOL, SMALL_ANGLE_SQ};

type M3<R> = [R; 9];

fn load<R: Real>(a: &[R]) -> M3<R> {
    std::array::from_fn(|i| a[i])
}

fn mul<R: Real>(a: &M3<R>, b: &M3<R>) -> M3<R> {
    std::array::from_fn(|k| {
        let (i, j) = (k / 3, k % 3);
        a[3 * i] * b[j] + a[3 * i + 1] * b[3 + j] + a[3 * i + 2] * b[6 + j]
    })
}

/// `aᵀ·b`.
fn mul_tn<R: Real>(a: &M3<R>, b: &M3<R>) -> M3<R> {
    std::array::from_fn(|k| {
        let (i, j) = (k / 3, k % 3);
        a[i] * b[j] + a[3 + i] * b[3 + j] + a[6 + i] * b[6 + j]
    })
}

fn transpose<R: Real>(a: &M3<R>) -> M3<R> {
    std::array::from_fn(|k| a[(k % 3) * 3 + k / 3])
}

fn identity<R: Real>() -> M3<R> {
    std::array::from_fn(|k| if k % 4 == 0 { R::one() } else { R::zero() })
}

/// Axial vector of the skew part `(A − Aᵀ)/2`.
fn vee_skew<R: Real>(a: &M3<R>) -> [R; 3] {
    [
        (a[7] - a[5]) * 0.5,
        (a[2] - a[6]) * 0.5,
        (a[3] - a[1]) * 0.5,
    ]
}

pub(crate) fn hat<R: Real>(w: [R; 3]) -> M3<R> {
    let z = R::zero();
    [z, -w[2], w[1], w[2], z, -w[0], -w[1], w[0], z]
}

fn det<R: Real>(a: &M3<R>) -> R {
    a[0] * (a[4] * a[8] - a[5] * a[7]) - a[1] * (a[3] * a[8] - a[5] * a[6])
        + a[2] * (a[3] * a[7] - a[4] * a[6])
}

/// Rodrigues: `exp(hat(w)) = I + (sin θ/θ) Ω + ((1 − cos θ)/θ²) Ω²`.
pub(crate) fn expm_hat<R: Real>(w: [R; 3]) -> M3<R> {
    let th2 = w[0] * w[0] + w[1] * w[1] + w[2] * w[2];
    let (a, b) = if th2.value() < SMALL_ANGLE_SQ {
        (
            R::one() - th2 / 6.0 + th2 * th2 / 120.0,
            R::cst(0.5) - th2 / 24.0 + th2 * th2 / 720.0,
        )
    } else {
        let th = th2.sqrt();
        (th.sin() / th, (R::one() - th.cos()) / th2)
    };
    let om = hat(w);
    let om2 = mul(&om, &om);
    let i = identity::<R>();
    std::array::from_fn(|k| i[k] + om[k] * a + om2[k] * b)
}

/// Body-frame log: `ω` with `XᵀY = exp(hat(ω))`.
fn log_body<R: Real>(x: &M3<R>, y: &M3<R>) -> Result<[R; 3]> {
    let r = mul_tn(x, y);
    let c = (r[0] + r[4] + r[8] - 1.0) * 0.5;
    if c.value() <= -1.0 + CUT_LOCUS_TOL {
        return Err(Error::CutLocus {
            detail: format!(
                "SO3 relative rotation angle too close to pi (cos = {:.9})",
                c.value()
            ),
        });
    }
    let s = vee_skew(&r);
    let s2 = s[0] * s[0] + s[1] * s[1] + s[2] * s[2];
    let f = angle_over_sine(s2, c);
    Ok([s[0] * f, s[1] * f, s[2] * f])
}

pub(super) fn proj<R: Real>(x: &[R], v: &[R]) -> Vec<R> {
    let x = load(x);
    let w = vee_skew(&mul_tn(&x, &load(v)));
    mul(&x, &hat(w)).to_vec()
}

pub(super) fn exp<R: Real>(x: &[R], v: &[R]) -> Vec<R> {
    let x = load(x);
    let w = vee_skew(&mul_tn(&x, &load(v)));
    mul(&x, &expm_hat(w)).to_vec()
}

pub(super) fn log<R: Real>(x: &[R], y: &[R]) -> Result<Vec<R>> {
    let x = load(x);
    let w = log_body(&x, &load(y))?;
    Ok(mul(&x, &hat(w)).to_vec())
}

pub(super) fn dist_sq<R: Real>(x: &[R], y: &[R]) -> R {
    let r = mul_tn(&load(x), &load(y));
    let c = (r[0] + r[4] + r[8] - 1.0) * 0.5;
    let s = vee_skew(&r);
    let s2 = s[0] * s[0] + s[1] * s[1] + s[2] * s[2];
    let th2 = if s2.value() < SMALL_ANGLE_SQ && c.value() > 0.0 {
        s2 + s2 * s2 / 3.0
    } else {
        let th = s2.sqrt().atan2(c);
        th * th
    };
    th2 * 2.0
}

/// Transport along `X·exp(tΩ)`: `V = X·A ↦ X·exp(Ω/2)·A·exp(Ω/2)`.
pub(super) fn transport<R: Real>(x: &[R], y: &[R], v: &[R]) -> Result<Vec<R>> {
    let xm = load(x);
    let w = log_body(&xm, &load(y))?;
    let half = expm_hat([w[0] * 0.5, w[1] * 0.5, w[2] * 0.5]);
    let a = mul_tn(&xm, &load(v));
    Ok(mul(&mul(&mul(&xm, &half), &a), &half).to_vec())
}

/// Orthogonal polar factor of `sign(det M)·M` by scaled Newton iteration.
pub(super) fn polar<R: Real>(raw: &[R]) -> Result<Vec<R>> {
    let m = load(raw);
    let d = det(&m);
    let fro: f64 = m.iter().map(|v| v.value() * v.value()).sum::<f64>().sqrt();
    if !fro.is_finite() || d.value().abs() < 1e-12 * fro.powi(3).max(1e-300) {
        return Err(Error::Domain(format!(
            "SO3 head is singular (det = {:e})",
            d.value()
        )));
    }
    let sign = if d.value() < 0.0 { -1.0 } else { 1.0 };
    let mut q: M3<R> = std::array::from_fn(|k| m[k] * sign);
    for _ in 0..60 {
        let dq = det(&q);
        // inverse-transpose via the cofactor matrix
        let cof: M3<R> = [
            q[4] * q[8] - q[5] * q[7],
            q[5] * q[6] - q[3] * q[8],
            q[3] * q[7] - q[4] * q[6],
            q[2] * q[7] - q[1] * q[8],
            q[0] * q[8] - q[2] * q[6],
            q[1] * q[6] - q[0] * q[7],
            q[1] * q[5] - q[2] * q[4],
            q[2] * q[3] - q[0] * q[5],
            q[0] * q[4] - q[1] * q[3],
        ];
        let inv_t: M3<R> = std::array::from_fn(|k| cof[k] / dq);
        let nq: f64 = q.iter().map(|v| v.value() * v.value()).sum::<f64>();
        let ni: f64 = inv_t.iter().map(|v| v.value() * v.value()).sum::<f64>();
        // scaling is a value-only heuristic; it does not change the fixed point
        let g = (ni / nq).sqrt().sqrt();
        let next: M3<R> = std::array::from_fn(|k| (q[k] * g + inv_t[k] / g) * 0.5);
        let delta: f64 = next
            .iter()
            .zip(&q)
            .map(|(a, b)| (a.value() - b.value()).powi(2))
            .sum::<f64>();
        q = next;
        if delta < 1e-30 {
            break;
        }
    }
    // one unscaled step makes the derivative that of the exact fixed point
    let dq = det(&q);
    let cof: M3<R> = [
        q[4] * q[8] - q[5] * q[7],
        q[5] * q[6] - q[3] * q[8],
        q[3] * q[7] - q[4] * q[6],
        q[2] * q[7] - q[1] * q[8],
        q[0] * q[8] - q[2] * q[6],
        q[1] * q[6] - q[0] * q[7],
        q[1] * q[5] - q[2] * q[4],
        q[2] * q[3] - q[0] * q[5],
        q[0] * q[4] - q[1] * q[3],
    ];
    Ok((0..9).map(|k| (q[k] + cof[k] / dq) * 0.5).collect())
}

pub(super) fn det_of(a: &[f64]) -> f64 {
    det(&load(a))
}

pub(super) fn orthogonality_error(a: &[f64]) -> f64 {
    let m = load(a);
    let g = mul_tn(&m, &m);
    let i = identity::<f64>();
    g.iter().zip(&i).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max)
}

/// Max deviation of `XᵀV` from skew-symmetry.
pub(super) fn skew_error(x: &[f64], v: &[f64]) -> f64 {
    let a = mul_tn(&load(x), &load(v));
    let t = transpose(&a);
    a.iter().zip(&t).map(|(p, q)| (p + q).abs()).fold(0.0, f64::max)
}

/// Haar-distributed rotation from three Gaussian columns via Gram–Schmidt.
pub(super) fn from_gaussian_columns(g: [[f64; 3]; 3]) -> Vec<f64> {
    let mut q = [[0.0; 3]; 3];
    for j in 0..3 {
        let mut v = g[j];
        for _ in 0..2 {
            for qk in q.iter().take(j) {
                let p: f64 = (0..3).map(|i| v[i] * qk[i]).sum();
                for i in 0..3 {
                    v[i] -= p * qk[i];
                }
            }
        }
        let n = (v.iter().map(|a| a * a).sum::<f64>()).sqrt();
        q[j] = [v[0] / n, v[1] / n, v[2] / n];
    }
    // columns -> row-major matrix
    let mut m: Vec<f64> = (0..9).map(|k| q[k % 3][k / 3]).collect();
    if det_of(&m) < 0.0 {
        for r in 0..3 {
            m[3 * r] = -m[3 * r];
        }
    }
    m
}
