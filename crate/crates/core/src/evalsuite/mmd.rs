//! Unbiased MMD with a geodesic RBF kernel, and the split-half noise floor.

use ndarray::{Array2, ArrayView1, ArrayView2};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::Manifold;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MmdValue {
    /// Unbiased estimate of MMD²; may be slightly negative.
    pub mmd2: f64,
    /// `sqrt(max(0, mmd2))`.
    pub mmd: f64,
}

/// `exp(−d_g(x, y)² / 2κ²)`.
pub fn geodesic_rbf(m: &Manifold, x: &[f64], y: &[f64], kappa: f64) -> f64 {
    (-m.dist_sq(x, y) / (2.0 * kappa * kappa)).exp()
}

/// Sum of `k(a_i, b_j)` over all pairs, or over `i ≠ j` when `skip_diag`.
/// Rows are reduced in parallel and combined in index order.
fn kernel_sum(m: &Manifold, a: ArrayView2<f64>, b: ArrayView2<f64>, kappa: f64, skip_diag: bool) -> f64 {
    let rows: Vec<f64> = (0..a.nrows())
        .into_par_iter()
        .map(|i| {
            let ai = a.row(i);
            let ai = ai.as_slice().expect("row");
            let mut acc = 0.0;
            for j in 0..b.nrows() {
                if skip_diag && i == j {
                    continue;
                }
                acc += geodesic_rbf(m, ai, b.row(j).as_slice().expect("row"), kappa);
            }
            acc
        })
        .collect();
    rows.iter().sum()
}

fn standard(a: ArrayView2<f64>) -> Array2<f64> {
    a.as_standard_layout().into_owned()
}

/// Unbiased two-sample MMD² between batches `a` and `b`.
pub fn mmd(m: &Manifold, a: ArrayView2<f64>, b: ArrayView2<f64>, kappa: f64) -> Result<MmdValue> {
    let (n, k) = (a.nrows(), b.nrows());
    if n < 2 || k < 2 {
        return Err(Error::Input(format!(
            "unbiased MMD needs at least 2 points per batch, got {n} and {k}"
        )));
    }
    let d = m.ambient_dim();
    if a.ncols() != d || b.ncols() != d {
        return Err(Error::Dimension {
            expected: d,
            got: if a.ncols() != d { a.ncols() } else { b.ncols() },
        });
    }
    if !(kappa > 0.0) {
        return Err(Error::Input(format!("kernel bandwidth must be positive, got {kappa}")));
    }
    let (a, b) = (standard(a), standard(b));
    let (nf, kf) = (n as f64, k as f64);
    let xx = kernel_sum(m, a.view(), a.view(), kappa, true) / (nf * (nf - 1.0));
    let yy = kernel_sum(m, b.view(), b.view(), kappa, true) / (kf * (kf - 1.0));
    let xy = kernel_sum(m, a.view(), b.view(), kappa, false) / (nf * kf);
    let mmd2 = xx + yy - 2.0 * xy;
    Ok(MmdValue {
        mmd2,
        mmd: mmd2.max(0.0).sqrt(),
    })
}

/// Rows of `data` gathered into an array.
pub fn to_array(data: &[Vec<f64>]) -> Array2<f64> {
    let d = data.first().map_or(0, |r| r.len());
    let mut out = Array2::zeros((data.len(), d));
    for (i, r) in data.iter().enumerate() {
        out.row_mut(i).assign(&ArrayView1::from(&r[..]));
    }
    out
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NoiseFloor {
    /// Points per half.
    pub half: usize,
    /// Headline MMD of each random split.
    pub values: Vec<f64>,
    pub mean: f64,
    pub median: f64,
}

/// MMD between disjoint random halves of `data`, over `splits` shuffles.
///
/// The floor is the mean headline value. The median is reported too but is
/// often exactly zero because the unbiased estimate straddles zero.
pub fn noise_floor(m: &Manifold, data: &[Vec<f64>], half: usize, splits: usize, kappa: f64, seed: u64) -> Result<NoiseFloor> {
    if 2 * half > data.len() {
        return Err(Error::Input(format!(
            "noise floor needs {} points, dataset has {}",
            2 * half,
            data.len()
        )));
    }
    if splits == 0 {
        return Err(Error::Input("noise floor needs at least one split".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut idx: Vec<usize> = (0..data.len()).collect();
    let mut values = Vec::with_capacity(splits);
    for _ in 0..splits {
        idx.shuffle(&mut rng);
        let a: Vec<Vec<f64>> = idx[..half].iter().map(|&i| data[i].clone()).collect();
        let b: Vec<Vec<f64>> = idx[half..2 * half].iter().map(|&i| data[i].clone()).collect();
        values.push(mmd(m, to_array(&a).view(), to_array(&b).view(), kappa)?.mmd);
    }
    let mean = values.iter().sum::<f64>() / values.len() as f64;
    Ok(NoiseFloor {
        half,
        median: median(&values),
        mean,
        values,
    })
}

pub fn median(xs: &[f64]) -> f64 {
    if xs.is_empty() {
        return f64::NAN;
    }
    let mut v = xs.to_vec();
    v.sort_by(|a, b| a.total_cmp(b));
    let n = v.len();
    if n % 2 == 1 {
        v[n / 2]
    } else {
        0.5 * (v[n / 2 - 1] + v[n / 2])
    }
}
