//! Batched SiLU MLP over `[x ⊕ embed(s) ⊕ embed(t − s)]` with a hand-written
//! backward pass and a tangent-forward pass, plus a scalar generic forward
//! used as a reference and for tiny-network checks.

use ndarray::linalg::general_mat_mul;
use ndarray::{Array1, Array2, ArrayView2, ArrayViewMut2, Axis};
use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::autodiff::Real;
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct NetShape {
    pub ambient_dim: usize,
    pub width: usize,
    /// Number of affine layers including the output head.
    pub layers: usize,
    /// Length of each time embedding; must be even.
    pub embed_dim: usize,
    pub omega: f64,
}

impl NetShape {
    pub fn new(ambient_dim: usize, width: usize, layers: usize) -> Self {
        NetShape {
            ambient_dim,
            width,
            layers,
            embed_dim: 16,
            omega: 0.02,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.ambient_dim == 0 || self.width == 0 || self.layers < 2 {
            return Err(Error::Input(format!("degenerate network shape {self:?}")));
        }
        if !self.embed_dim.is_multiple_of(2) {
            return Err(Error::Input(format!(
                "embed_dim must be even, got {}",
                self.embed_dim
            )));
        }
        if !(self.omega.is_finite() && self.omega > 0.0) {
            return Err(Error::Input(format!("omega must be positive, got {}", self.omega)));
        }
        Ok(())
    }

    pub fn input_dim(&self) -> usize {
        self.ambient_dim + 2 * self.embed_dim
    }

    /// `(fan_in, fan_out)` of every affine layer.
    pub fn layer_dims(&self) -> Vec<(usize, usize)> {
        (0..self.layers)
            .map(|l| {
                let i = if l == 0 { self.input_dim() } else { self.width };
                let o = if l + 1 == self.layers {
                    self.ambient_dim
                } else {
                    self.width
                };
                (i, o)
            })
            .collect()
    }

    pub fn param_count(&self) -> usize {
        self.layer_dims().iter().map(|(i, o)| i * o + o).sum()
    }

    /// Offsets of `(W, b)` for each layer; `W` is `fan_in × fan_out` row-major.
    fn offsets(&self) -> Vec<(usize, usize, usize, usize)> {
        let mut off = 0;
        self.layer_dims()
            .into_iter()
            .map(|(i, o)| {
                let w = off;
                off += i * o + o;
                (w, w + i * o, i, o)
            })
            .collect()
    }
}

/// `sin(ω2ᵏt), cos(ω2ᵏt)` interleaved for `k < embed_dim/2`.
pub fn time_embed<R: Real>(t: R, omega: f64, embed_dim: usize) -> Vec<R> {
    let mut out = Vec::with_capacity(embed_dim);
    let mut f = omega;
    for _ in 0..embed_dim / 2 {
        let a = t * f;
        out.push(a.sin());
        out.push(a.cos());
        f *= 2.0;
    }
    out
}

/// Embedding and its derivative in `t`.
pub fn time_embed_with_derivative(t: f64, omega: f64, embed_dim: usize) -> (Vec<f64>, Vec<f64>) {
    let mut val = Vec::with_capacity(embed_dim);
    let mut der = Vec::with_capacity(embed_dim);
    let mut f = omega;
    for _ in 0..embed_dim / 2 {
        let (s, c) = (t * f).sin_cos();
        val.extend([s, c]);
        der.extend([f * c, -f * s]);
        f *= 2.0;
    }
    (val, der)
}

/// Variance-scaled normal weights with zero biases; the head is further
/// scaled by `head_scale`.
pub fn init_params<G: Rng + ?Sized>(shape: &NetShape, head_scale: f64, rng: &mut G) -> Vec<f64> {
    let mut p = Vec::with_capacity(shape.param_count());
    let dims = shape.layer_dims();
    for (l, &(i, o)) in dims.iter().enumerate() {
        let mut sd = (1.0 / i as f64).sqrt();
        if l + 1 == dims.len() {
            sd *= head_scale;
        }
        for _ in 0..i * o {
            let z: f64 = rng.sample(StandardNormal);
            p.push(sd * z);
        }
        p.extend(std::iter::repeat_n(0.0, o));
    }
    p
}

#[inline]
fn sigmoid(z: f64) -> f64 {
    1.0 / (1.0 + (-z).exp())
}

#[inline]
fn silu(z: f64) -> f64 {
    z * sigmoid(z)
}

#[inline]
fn silu_prime(z: f64) -> f64 {
    let s = sigmoid(z);
    s * (1.0 + z * (1.0 - s))
}

fn silu_generic<R: Real>(z: R) -> R {
    z / ((-z).exp() + 1.0)
}

/// Network inputs for a batch; row `i` is `[x_i, embed(s_i), embed(t_i − s_i)]`.
pub fn build_input(shape: &NetShape, x: ArrayView2<f64>, s: &[f64], t: &[f64]) -> Array2<f64> {
    let (b, d) = x.dim();
    assert_eq!(d, shape.ambient_dim, "input ambient dimension");
    assert!(s.len() == b && t.len() == b, "time batch length");
    let e = shape.embed_dim;
    let mut inp = Array2::zeros((b, shape.input_dim()));
    for i in 0..b {
        let mut row = inp.row_mut(i);
        for j in 0..d {
            row[j] = x[[i, j]];
        }
        let es = time_embed(s[i], shape.omega, e);
        let eg = time_embed(t[i] - s[i], shape.omega, e);
        for k in 0..e {
            row[d + k] = es[k];
            row[d + e + k] = eg[k];
        }
    }
    inp
}

/// Inputs and their tangents for perturbation `(dx, ds, dt)` of `(x, s, t)`.
pub fn build_input_tangent(
    shape: &NetShape,
    x: ArrayView2<f64>,
    dx: ArrayView2<f64>,
    s: &[f64],
    ds: &[f64],
    t: &[f64],
    dt: &[f64],
) -> (Array2<f64>, Array2<f64>) {
    let (b, d) = x.dim();
    assert_eq!(dx.dim(), (b, d), "tangent batch shape");
    let e = shape.embed_dim;
    let mut inp = Array2::zeros((b, shape.input_dim()));
    let mut tan = Array2::zeros((b, shape.input_dim()));
    for i in 0..b {
        for j in 0..d {
            inp[[i, j]] = x[[i, j]];
            tan[[i, j]] = dx[[i, j]];
        }
        let (es, des) = time_embed_with_derivative(s[i], shape.omega, e);
        let (eg, deg) = time_embed_with_derivative(t[i] - s[i], shape.omega, e);
        let dgap = dt[i] - ds[i];
        for k in 0..e {
            inp[[i, d + k]] = es[k];
            tan[[i, d + k]] = des[k] * ds[i];
            inp[[i, d + e + k]] = eg[k];
            tan[[i, d + e + k]] = deg[k] * dgap;
        }
    }
    (inp, tan)
}

/// Activations cached by [`forward`] for [`backward`].
#[derive(Debug, Clone)]
pub struct Forward {
    /// `acts[0]` is the input; `acts[l]` feeds layer `l`.
    acts: Vec<Array2<f64>>,
    /// Pre-activations of the hidden layers.
    pre: Vec<Array2<f64>>,
    pub out: Array2<f64>,
}

fn layer_views<'a>(
    shape: &NetShape,
    params: &'a [f64],
) -> Vec<(ArrayView2<'a, f64>, ArrayView2<'a, f64>)> {
    assert_eq!(params.len(), shape.param_count(), "parameter vector length");
    shape
        .offsets()
        .into_iter()
        .map(|(w, b, i, o)| {
            (
                ArrayView2::from_shape((i, o), &params[w..w + i * o]).expect("layout"),
                ArrayView2::from_shape((1, o), &params[b..b + o]).expect("layout"),
            )
        })
        .collect()
}

fn affine(h: &Array2<f64>, w: &ArrayView2<f64>, b: &ArrayView2<f64>) -> Array2<f64> {
    let mut z = h.dot(w);
    z += b;
    z
}

pub fn forward(shape: &NetShape, params: &[f64], input: Array2<f64>) -> Forward {
    let views = layer_views(shape, params);
    let n = views.len();
    let mut acts = Vec::with_capacity(n);
    let mut pre = Vec::with_capacity(n - 1);
    acts.push(input);
    for (l, (w, b)) in views.iter().enumerate() {
        let z = affine(&acts[l], w, b);
        if l + 1 == n {
            return Forward { acts, pre, out: z };
        }
        acts.push(z.mapv(silu));
        pre.push(z);
    }
    unreachable!("network has at least two layers")
}

/// Forward pass carrying a tangent; returns the cache and `d out`.
pub fn forward_tangent(
    shape: &NetShape,
    params: &[f64],
    input: Array2<f64>,
    tangent: Array2<f64>,
) -> (Forward, Array2<f64>) {
    let views = layer_views(shape, params);
    let n = views.len();
    let mut acts = Vec::with_capacity(n);
    let mut pre = Vec::with_capacity(n - 1);
    acts.push(input);
    let mut dh = tangent;
    for (l, (w, b)) in views.iter().enumerate() {
        let z = affine(&acts[l], w, b);
        let dz = dh.dot(w);
        if l + 1 == n {
            return (Forward { acts, pre, out: z }, dz);
        }
        dh = dz;
        ndarray::Zip::from(&mut dh).and(&z).for_each(|d, &zz| *d *= silu_prime(zz));
        acts.push(z.mapv(silu));
        pre.push(z);
    }
    unreachable!("network has at least two layers")
}

/// Pulls `d_out` back through the network, accumulating parameter gradients
/// into `grad` when given and returning the input gradient when requested.
pub fn backward(
    shape: &NetShape,
    params: &[f64],
    cache: &Forward,
    d_out: ArrayView2<f64>,
    mut grad: Option<&mut [f64]>,
    want_input: bool,
) -> Option<Array2<f64>> {
    let views = layer_views(shape, params);
    let offsets = shape.offsets();
    let n = views.len();
    let mut g = d_out.to_owned();
    for l in (0..n).rev() {
        if let Some(gr) = grad.as_deref_mut() {
            let (wo, bo, i, o) = offsets[l];
            let mut gw = ArrayViewMut2::from_shape((i, o), &mut gr[wo..wo + i * o]).expect("layout");
            general_mat_mul(1.0, &cache.acts[l].t(), &g, 1.0, &mut gw);
            let gb: Array1<f64> = g.sum_axis(Axis(0));
            for (dst, v) in gr[bo..bo + o].iter_mut().zip(gb.iter()) {
                *dst += v;
            }
        }
        if l == 0 && !want_input {
            return None;
        }
        let mut gh = g.dot(&views[l].0.t());
        if l == 0 {
            return Some(gh);
        }
        ndarray::Zip::from(&mut gh)
            .and(&cache.pre[l - 1])
            .for_each(|d, &z| *d *= silu_prime(z));
        g = gh;
    }
    None
}

/// Single-sample forward over any scalar type (parameters included), used as
/// the reference implementation and to differentiate tiny networks directly.
pub fn forward_generic<R: Real>(shape: &NetShape, params: &[R], x: &[R], s: R, t: R) -> Vec<R> {
    assert_eq!(params.len(), shape.param_count(), "parameter vector length");
    let mut h: Vec<R> = x.to_vec();
    h.extend(time_embed(s, shape.omega, shape.embed_dim));
    h.extend(time_embed(t - s, shape.omega, shape.embed_dim));
    let offsets = shape.offsets();
    let n = offsets.len();
    for (l, &(wo, bo, i, o)) in offsets.iter().enumerate() {
        let mut z: Vec<R> = params[bo..bo + o].to_vec();
        for (k, &hk) in h.iter().enumerate().take(i) {
            let row = &params[wo + k * o..wo + (k + 1) * o];
            for (zj, &w) in z.iter_mut().zip(row) {
                *zj = *zj + hk * w;
            }
        }
        h = if l + 1 == n {
            z
        } else {
            z.into_iter().map(silu_generic).collect()
        };
    }
    h
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::{grad, jvp, lift, Dual};
    use ndarray::Array2;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn shape() -> NetShape {
        NetShape {
            ambient_dim: 3,
            width: 7,
            layers: 3,
            embed_dim: 4,
            omega: 0.7,
        }
    }

    fn random_batch(rng: &mut ChaCha8Rng, b: usize, d: usize) -> Array2<f64> {
        Array2::from_shape_fn((b, d), |_| rng.random_range(-1.0..1.0))
    }

    #[test]
    fn embedding_at_zero_alternates() {
        assert_eq!(time_embed(0.0, 0.02, 6), vec![0.0, 1.0, 0.0, 1.0, 0.0, 1.0]);
    }

    #[test]
    fn embedding_derivative_is_analytic() {
        let (_, der) = time_embed_with_derivative(0.37, 1.3, 8);
        let (_, d) = jvp(|t| time_embed(t[0], 1.3, 8), &[0.37], &[1.0]);
        for k in 0..4 {
            let f = 1.3 * 2f64.powi(k as i32);
            assert!((der[2 * k] - f * (0.37 * f).cos()).abs() < 1e-14);
            assert!((der[2 * k + 1] + f * (0.37 * f).sin()).abs() < 1e-14);
        }
        assert!(der.iter().zip(&d).all(|(a, b)| (a - b).abs() < 1e-14));
    }

    #[test]
    fn embedding_slope_scales_with_frequency() {
        let bound = |w: f64| w * 2f64.powi(16 / 2 - 1);
        assert!((bound(30.0) / bound(0.02) - 1500.0).abs() < 1e-9);
    }

    #[test]
    fn zero_weights_give_zero_output() {
        let sh = shape();
        let p = vec![0.0; sh.param_count()];
        let out = forward_generic(&sh, &p, &[0.3, 0.1, -0.2], 0.1, 0.8);
        assert_eq!(out, vec![0.0; 3]);
    }

    #[test]
    fn batched_forward_matches_generic() {
        let sh = shape();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let p = init_params(&sh, 1.0, &mut rng);
        let x = random_batch(&mut rng, 5, 3);
        let s: Vec<f64> = (0..5).map(|_| rng.random_range(0.0..1.0)).collect();
        let t: Vec<f64> = (0..5).map(|_| rng.random_range(0.0..1.0)).collect();
        let fw = forward(&sh, &p, build_input(&sh, x.view(), &s, &t));
        for i in 0..5 {
            let row = x.row(i).to_vec();
            let r = forward_generic(&sh, &p, &row, s[i], t[i]);
            for j in 0..3 {
                assert!((fw.out[[i, j]] - r[j]).abs() < 1e-13);
            }
        }
    }

    #[test]
    fn tangent_forward_matches_dual_reference() {
        let sh = shape();
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let p = init_params(&sh, 1.0, &mut rng);
        let x = random_batch(&mut rng, 4, 3);
        let dx = random_batch(&mut rng, 4, 3);
        let s = [0.1, 0.5, 0.9, 0.3];
        let t = [0.2, 0.4, 0.95, 0.3];
        let ds = [1.0, 0.0, -0.5, 1.0];
        let dt = [0.0, 1.0, 2.0, 0.0];
        let (inp, tan) = build_input_tangent(&sh, x.view(), dx.view(), &s, &ds, &t, &dt);
        let (fw, dout) = forward_tangent(&sh, &p, inp, tan);
        let pd: Vec<Dual> = lift(&p);
        for i in 0..4 {
            let mut inputs = x.row(i).to_vec();
            inputs.extend([s[i], t[i]]);
            let mut tangents = dx.row(i).to_vec();
            tangents.extend([ds[i], dt[i]]);
            let (v, d) = jvp(|z| forward_generic(&sh, &pd, &z[..3], z[3], z[4]), &inputs, &tangents);
            for j in 0..3 {
                assert!((fw.out[[i, j]] - v[j]).abs() < 1e-13);
                assert!((dout[[i, j]] - d[j]).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn time_jvp_matches_finite_difference() {
        let sh = shape();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let p = init_params(&sh, 1.0, &mut rng);
        let pd: Vec<Dual> = lift(&p);
        let x = [0.2, -0.4, 0.1];
        let (s, t, h) = (0.3, 0.7, 1e-6);
        let (_, d) = jvp(
            |z| forward_generic(&sh, &pd, &lift::<Dual>(&x), z[0], Dual::constant(t)),
            &[s],
            &[1.0],
        );
        let fp = forward_generic(&sh, &p, &x, s + h, t);
        let fm = forward_generic(&sh, &p, &x, s - h, t);
        for j in 0..3 {
            let fd = (fp[j] - fm[j]) / (2.0 * h);
            assert!((d[j] - fd).abs() <= 1e-5 * fd.abs().max(1e-3));
        }
    }

    #[test]
    fn backward_matches_tape_gradients() {
        let sh = shape();
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let p = init_params(&sh, 1.0, &mut rng);
        let x = random_batch(&mut rng, 3, 3);
        let s = [0.1, 0.6, 0.2];
        let t = [0.7, 0.6, 0.0];
        let g_out = random_batch(&mut rng, 3, 3);
        let fw = forward(&sh, &p, build_input(&sh, x.view(), &s, &t));
        let mut g = vec![0.0; p.len()];
        let gin = backward(&sh, &p, &fw, g_out.view(), Some(&mut g), true).unwrap();
        let mut expect = vec![0.0; p.len()];
        for i in 0..3 {
            let row = x.row(i).to_vec();
            let go = g_out.row(i).to_vec();
            let (_, gi) = grad(
                |th| {
                    let out = forward_generic(&sh, th, &lift(&row), Real::cst(s[i]), Real::cst(t[i]));
                    out.iter().zip(&go).fold(Real::zero(), |acc, (&o, &w)| acc + o * w)
                },
                &p,
            );
            expect.iter_mut().zip(&gi).for_each(|(e, v)| *e += v);
            let (_, gx) = grad(
                |xv| {
                    let pc = lift(&p);
                    let out = forward_generic(&sh, &pc, xv, Real::cst(s[i]), Real::cst(t[i]));
                    out.iter().zip(&go).fold(Real::zero(), |acc, (&o, &w)| acc + o * w)
                },
                &row,
            );
            for j in 0..3 {
                assert!((gin[[i, j]] - gx[j]).abs() < 1e-12);
            }
        }
        for (a, b) in g.iter().zip(&expect) {
            assert!((a - b).abs() < 1e-12, "{a} vs {b}");
        }
    }

    #[test]
    fn parameter_gradient_matches_finite_differences() {
        let sh = NetShape {
            ambient_dim: 2,
            width: 4,
            layers: 2,
            embed_dim: 2,
            omega: 1.0,
        };
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let p = init_params(&sh, 1.0, &mut rng);
        let loss = |th: &[f64]| {
            let o = forward_generic(&sh, th, &[0.5, -0.3], 0.2, 0.9);
            o[0] * o[0] + o[1].sin()
        };
        let fw = forward(&sh, &p, build_input(&sh, ndarray::arr2(&[[0.5, -0.3]]).view(), &[0.2], &[0.9]));
        let o = fw.out.row(0).to_vec();
        let d_out = ndarray::arr2(&[[2.0 * o[0], o[1].cos()]]);
        let mut g = vec![0.0; p.len()];
        backward(&sh, &p, &fw, d_out.view(), Some(&mut g), false);
        let h = 1e-6;
        for k in 0..p.len() {
            let mut a = p.clone();
            let mut b = p.clone();
            a[k] += h;
            b[k] -= h;
            let fd = (loss(&a) - loss(&b)) / (2.0 * h);
            assert!((g[k] - fd).abs() <= 1e-5 * fd.abs().max(1e-4), "{k}: {} vs {fd}", g[k]);
        }
    }
}
