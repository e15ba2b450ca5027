//! Forward-mode dual numbers and a reverse-mode tape behind one scalar trait.
//!
//! Forward mode carries exactly one directional derivative per pass, which is
//! all the regression targets need (`D_s u` along `(v_s, 1, 0)`, `∂_t u` along
//! `(0, 0, 1)`). Reverse mode records a fresh tape per evaluation and is used
//! for parameter gradients and reward gradients.

mod dual;
mod real;
mod tape;

pub use dual::{seed, unzip, Dual};
pub use real::{dot, lift, norm_sq, values, Real};
pub use tape::{Adjoints, Tape, Var};

/// Jacobian-vector product of `f` at `inputs` along `tangents`.
///
/// Returns `(f(inputs), J_f(inputs) · tangents)`.
pub fn jvp<F>(f: F, inputs: &[f64], tangents: &[f64]) -> (Vec<f64>, Vec<f64>)
where
    F: FnOnce(&[Dual]) -> Vec<Dual>,
{
    assert_eq!(
        inputs.len(),
        tangents.len(),
        "jvp: tangent length must match input length"
    );
    let out = f(&seed(inputs, tangents));
    unzip(&out)
}

/// Value and gradient of a scalar function of `theta` via one backward sweep.
///
/// Parameters that do not influence the output receive a zero gradient.
pub fn grad<F>(f: F, theta: &[f64]) -> (f64, Vec<f64>)
where
    F: for<'t> FnOnce(&[Var<'t>]) -> Var<'t>,
{
    let tape = Tape::with_capacity(theta.len() * 4);
    let vars = tape.vars(theta);
    let out = f(&vars);
    let adj = tape.gradient(out);
    (out.value(), adj.wrt_all(&vars))
}

/// Evaluates `f` on detached copies of `inputs`: nothing computed inside
/// contributes to any tape or carries a forward derivative.
pub fn no_grad<R: Real, T, F>(inputs: &[R], f: F) -> T
where
    F: FnOnce(&[R]) -> T,
{
    let frozen: Vec<R> = inputs.iter().map(|x| x.detach()).collect();
    f(&frozen)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn jvp_of_square() {
        let (v, d) = jvp(|x| vec![x[0] * x[0]], &[3.0], &[1.0]);
        assert_eq!(v, vec![9.0]);
        assert_eq!(d, vec![6.0]);
    }

    #[test]
    fn jvp_of_linear_map_is_the_matrix() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let a: Vec<f64> = (0..12).map(|_| rng.random_range(-1.0..1.0)).collect();
        let x: Vec<f64> = (0..4).map(|_| rng.random_range(-1.0..1.0)).collect();
        let dx: Vec<f64> = (0..4).map(|_| rng.random_range(-1.0..1.0)).collect();
        let (_, d) = jvp(
            |x| {
                (0..3)
                    .map(|i| {
                        (0..4).fold(Dual::constant(0.0), |acc, j| acc + x[j] * a[i * 4 + j])
                    })
                    .collect()
            },
            &x,
            &dx,
        );
        for i in 0..3 {
            let expect: f64 = (0..4).map(|j| a[i * 4 + j] * dx[j]).sum();
            assert!((d[i] - expect).abs() < 1e-14);
        }
    }

    #[test]
    fn grad_of_half_squared_norm_is_identity() {
        let theta = [1.0, -2.0, 0.5];
        let (v, g) = grad(|th| norm_sq(th) * 0.5, &theta);
        assert_eq!(v, 2.625);
        assert_eq!(g, theta.to_vec());
    }

    #[test]
    fn grad_of_constant_is_zero() {
        let (_, g) = grad(|_| Var::constant(7.0), &[1.0, 2.0]);
        assert_eq!(g, vec![0.0, 0.0]);
    }

    fn poly<R: Real>(x: &[R]) -> R {
        x[0] * x[1].sin() + (x[2] * x[0]).exp() - x[1].atan2(x[2] + 2.0) + x[3].tanh() * x[0]
    }

    #[test]
    fn reverse_and_forward_agree() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        for _ in 0..50 {
            let x: Vec<f64> = (0..4).map(|_| rng.random_range(-1.0..1.0)).collect();
            let d: Vec<f64> = (0..4).map(|_| rng.random_range(-1.0..1.0)).collect();
            let (_, g) = grad(|v| poly(v), &x);
            let (_, jd) = jvp(|v| vec![poly(v)], &x, &d);
            let gd: f64 = g.iter().zip(&d).map(|(a, b)| a * b).sum();
            assert!((gd - jd[0]).abs() < 1e-7, "{gd} vs {}", jd[0]);
        }
    }

    #[test]
    fn backward_replay_is_deterministic() {
        let x = [0.3, -0.7, 1.1, 0.2];
        let (_, g1) = grad(|v| poly(v), &x);
        let (_, g2) = grad(|v| poly(v), &x);
        assert_eq!(
            g1.iter().map(|v| v.to_bits()).collect::<Vec<_>>(),
            g2.iter().map(|v| v.to_bits()).collect::<Vec<_>>()
        );
    }

    #[test]
    fn no_grad_region_freezes_target() {
        // loss = θ · sg(θ)  =>  dloss/dθ = θ
        let (_, g) = grad(|th| th[0] * no_grad(th, |f| f[0]), &[2.5]);
        assert_eq!(g, vec![2.5]);
    }
}
