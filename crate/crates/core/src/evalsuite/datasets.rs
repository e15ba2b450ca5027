//! Synthetic datasets on spheres.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::autodiff::{dot, norm_sq};
use crate::error::{Error, Result};
use crate::geometry::Manifold;

/// Standard deviation of the tangent jitter added to helix points.
pub const HELIX_JITTER: f64 = 0.01;

/// Helix on S² embedded isometrically in S^{D−1} by a column-orthogonal `U`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HelixDataset {
    pub ambient_dim: usize,
    pub n: usize,
    pub turns: u32,
    /// `D × 3`, row-major.
    pub embed: Vec<f64>,
    pub seed: u64,
}

/// The base curve before jitter: polar angle `πτ`, azimuth `2πkτ`.
pub fn helix_point(tau: f64, turns: u32) -> [f64; 3] {
    let phi = std::f64::consts::PI * tau;
    let psi = 2.0 * std::f64::consts::PI * turns as f64 * tau;
    [phi.sin() * psi.cos(), phi.sin() * psi.sin(), phi.cos()]
}

/// Column-orthonormal `D × 3` from Gram-Schmidt (two passes) on a Gaussian.
fn orthonormal_columns<G: Rng + ?Sized>(d: usize, rng: &mut G) -> Vec<f64> {
    let mut cols: Vec<Vec<f64>> = (0..3)
        .map(|_| (0..d).map(|_| rng.sample::<f64, _>(StandardNormal)).collect())
        .collect();
    for j in 0..3 {
        for _ in 0..2 {
            for k in 0..j {
                let c = dot(&cols[j], &cols[k]);
                let prev = cols[k].clone();
                cols[j].iter_mut().zip(&prev).for_each(|(a, b)| *a -= c * b);
            }
        }
        let n = norm_sq(&cols[j]).sqrt();
        cols[j].iter_mut().for_each(|a| *a /= n);
    }
    let mut u = vec![0.0; d * 3];
    for i in 0..d {
        for j in 0..3 {
            u[i * 3 + j] = cols[j][i];
        }
    }
    u
}

impl HelixDataset {
    pub fn manifold(&self) -> Manifold {
        Manifold::Sphere(self.ambient_dim)
    }

    /// `y = U x`.
    pub fn embed_point(&self, x: &[f64]) -> Vec<f64> {
        (0..self.ambient_dim)
            .map(|i| (0..3).map(|j| self.embed[i * 3 + j] * x[j]).sum())
            .collect()
    }

    /// `x = Uᵀy / ‖Uᵀy‖`.
    pub fn project_back(&self, y: &[f64]) -> Result<Vec<f64>> {
        if y.len() != self.ambient_dim {
            return Err(Error::Dimension {
                expected: self.ambient_dim,
                got: y.len(),
            });
        }
        let mut x = [0.0; 3];
        for (i, yi) in y.iter().enumerate() {
            for (j, xj) in x.iter_mut().enumerate() {
                *xj += self.embed[i * 3 + j] * yi;
            }
        }
        let n = norm_sq(&x).sqrt();
        if n < 1e-9 {
            return Err(Error::Domain(format!(
                "degenerate projection: |U^T y| = {n:e}"
            )));
        }
        Ok(x.iter().map(|v| v / n).collect())
    }

    /// Max entry of `|UᵀU − I|`.
    pub fn orthogonality_error(&self) -> f64 {
        let mut worst = 0.0f64;
        for a in 0..3 {
            for b in 0..3 {
                let g: f64 = (0..self.ambient_dim)
                    .map(|i| self.embed[i * 3 + a] * self.embed[i * 3 + b])
                    .sum();
                let want = if a == b { 1.0 } else { 0.0 };
                worst = worst.max((g - want).abs());
            }
        }
        worst
    }
}

/// Jittered helix samples on S², embedded in S^{D−1}.
///
/// Returns the dataset descriptor and the embedded points.
pub fn make_helix(d: usize, n: usize, turns: u32, seed: u64) -> Result<(HelixDataset, Vec<Vec<f64>>)> {
    if d < 3 {
        return Err(Error::Input(format!("helix needs D >= 3, got {d}")));
    }
    if turns == 0 {
        return Err(Error::Input("helix needs at least one turn".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let ds = HelixDataset {
        ambient_dim: d,
        n,
        turns,
        embed: orthonormal_columns(d, &mut rng),
        seed,
    };
    let s2 = Manifold::Sphere(3);
    let pts = (0..n)
        .map(|_| {
            let tau: f64 = rng.random();
            let x = helix_point(tau, turns);
            let noise: Vec<f64> = (0..3)
                .map(|_| HELIX_JITTER * rng.sample::<f64, _>(StandardNormal))
                .collect();
            let x = s2.exp(&x, &s2.proj(&x, &noise));
            ds.embed_point(&x)
        })
        .collect();
    Ok((ds, pts))
}

/// Equal-weight mixture of wrapped Gaussians on S² around unit `centers`.
pub fn make_s2_mixture(centers: &[[f64; 3]], spread: f64, n: usize, seed: u64) -> Result<Vec<Vec<f64>>> {
    if centers.is_empty() {
        return Err(Error::Input("mixture needs at least one center".into()));
    }
    let m = Manifold::Sphere(3);
    for c in centers {
        m.point(c.to_vec())?;
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Ok((0..n)
        .map(|_| {
            let c = centers[rng.random_range(0..centers.len())];
            let noise: Vec<f64> = (0..3)
                .map(|_| spread * rng.sample::<f64, _>(StandardNormal))
                .collect();
            m.exp(&c, &m.proj(&c, &noise))
        })
        .collect())
}

/// Uniform draws from the manifold's prior.
pub fn uniform_samples(m: &Manifold, n: usize, seed: u64) -> Vec<Vec<f64>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..n).map(|_| m.random_point(&mut rng).into_inner()).collect()
}
