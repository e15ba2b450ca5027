//! Unit hypersphere `S^{n-1} ⊂ R^n` with the round metric.

use crate::autodiff::{dot, norm_sq, Real};
use crate::error::{Error, Result};

use super::{CUT_LOCUS_TOL, SMALL_ANGLE_SQ};

pub(super) fn proj<R: Real>(x: &[R], v: &[R]) -> Vec<R> {
    let c = dot(v, x);
    v.iter().zip(x).map(|(&vi, &xi)| vi - c * xi).collect()
}

pub(super) fn exp<R: Real>(x: &[R], v: &[R]) -> Vec<R> {
    let th2 = norm_sq(v);
    let (c, sinc) = if th2.value() < SMALL_ANGLE_SQ {
        (
            R::one() - th2 * 0.5 + th2 * th2 / 24.0,
            R::one() - th2 / 6.0 + th2 * th2 / 120.0,
        )
    } else {
        let th = th2.sqrt();
        (th.cos(), th.sin() / th)
    };
    x.iter().zip(v).map(|(&xi, &vi)| xi * c + vi * sinc).collect()
}

/// `θ / sin θ` from `sin² θ` and `cos θ`, with a series branch near zero.
pub(super) fn angle_over_sine<R: Real>(s2: R, c: R) -> R {
    if s2.value() < SMALL_ANGLE_SQ && c.value() > 0.0 {
        // asin(s)/s = 1 + s²/6 + 3s⁴/40 + O(s⁶)
        R::one() + s2 / 6.0 + s2 * s2 * (3.0 / 40.0)
    } else {
        let s = s2.sqrt();
        s.atan2(c) / s
    }
}

pub(super) fn log<R: Real>(x: &[R], y: &[R]) -> Result<Vec<R>> {
    let c = dot(x, y);
    if c.value() <= -1.0 + CUT_LOCUS_TOL {
        return Err(Error::CutLocus {
            detail: format!("sphere points nearly antipodal (<x,y> = {:.9})", c.value()),
        });
    }
    let w: Vec<R> = y.iter().zip(x).map(|(&yi, &xi)| yi - c * xi).collect();
    let f = angle_over_sine(norm_sq(&w), c);
    Ok(w.into_iter().map(|wi| wi * f).collect())
}

pub(super) fn dist_sq<R: Real>(x: &[R], y: &[R]) -> R {
    let c = dot(x, y);
    let s2 = y
        .iter()
        .zip(x)
        .fold(R::zero(), |acc, (&yi, &xi)| {
            let w = yi - c * xi;
            acc + w * w
        });
    if s2.value() < SMALL_ANGLE_SQ && c.value() > 0.0 {
        // asin(s)² = s² + s⁴/3 + O(s⁶)
        s2 + s2 * s2 / 3.0
    } else {
        let th = s2.sqrt().atan2(c);
        th * th
    }
}

/// Transport along the minimizing great circle from `x` to `y`.
pub(super) fn transport<R: Real>(x: &[R], y: &[R], v: &[R]) -> Result<Vec<R>> {
    let c = dot(x, y);
    if c.value() <= -1.0 + CUT_LOCUS_TOL {
        return Err(Error::CutLocus {
            detail: format!("sphere transport between near-antipodal points (<x,y> = {:.9})", c.value()),
        });
    }
    let k = dot(y, v) / (c + 1.0);
    Ok(v
        .iter()
        .zip(x.iter().zip(y))
        .map(|(&vi, (&xi, &yi))| vi - k * (xi + yi))
        .collect())
}

pub(super) fn normalize<R: Real>(raw: &[R]) -> Result<Vec<R>> {
    let n2 = norm_sq(raw);
    if !(n2.value() > 1e-300) || !n2.value().is_finite() {
        return Err(Error::Domain(format!(
            "cannot map raw output of squared norm {:e} onto the sphere",
            n2.value()
        )));
    }
    let n = n2.sqrt();
    Ok(raw.iter().map(|&r| r / n).collect())
}
