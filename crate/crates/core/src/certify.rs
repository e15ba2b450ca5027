//! Self-checks of the numerical core, ordered from geometry primitives up to
//! the training gradients.
//!
//! Each check reports the measured quantity next to its tolerance so the
//! CLI can print a report and the acceptance suite can assert on it.

use std::f64::consts::PI;

use ndarray::{Array2, ArrayView1};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{dot, grad, jvp, lift, norm_sq, Dual, Real, Var};
use crate::error::Result;
use crate::evalsuite::{identity_residuals, CorruptedField, ResidualReport, ResidualSample, RotationFlowOracle};
use crate::geometry::Manifold;
use crate::model::{forward_generic, init_params, velocity_from_raw, FlowNet, NetShape, Parameterization};
use crate::training::{
    adaptive_weight, conditional_velocity, eulerian_targets, lagrangian_targets, semigroup_targets, x1_time_weight,
    Objective, ObjectiveConfig, TimeDraw, Trainer,
};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Bound {
    /// Passes when the measured value is strictly below the tolerance.
    Below,
    /// Passes when the measured value is strictly above the tolerance.
    Above,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Check {
    pub stage: String,
    pub name: String,
    pub bound: Bound,
    pub tolerance: f64,
    pub measured: f64,
    pub passed: bool,
}

impl Check {
    fn new(stage: &str, name: String, bound: Bound, tolerance: f64, measured: f64) -> Self {
        let passed = match bound {
            Bound::Below => measured < tolerance,
            Bound::Above => measured > tolerance,
        };
        Check {
            stage: stage.into(),
            name,
            bound,
            tolerance,
            measured,
            passed,
        }
    }
}

/// Deliberate defects for exercising the checks themselves.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct Faults {
    pub flip_log_sign: bool,
}

/// The manifolds every geometry stage runs on.
pub fn certification_manifolds() -> Vec<Manifold> {
    vec![
        Manifold::Sphere(3),
        Manifold::Sphere(512),
        Manifold::So3,
        Manifold::Product(vec![
            Manifold::Sphere(3),
            Manifold::So3,
            Manifold::Euclidean(2),
            Manifold::Sphere(5),
        ]),
    ]
}

fn label(m: &Manifold) -> String {
    match m {
        Manifold::Euclidean(d) => format!("euclidean({d})"),
        Manifold::Sphere(d) => format!("sphere({d})"),
        Manifold::So3 => "so3".into(),
        Manifold::Product(fs) => format!("product[{}]", fs.iter().map(label).collect::<Vec<_>>().join(",")),
    }
}

fn sub_norm(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(p, q)| (p - q).powi(2)).sum::<f64>().sqrt()
}

fn scaled(v: &[f64], k: f64) -> Vec<f64> {
    v.iter().map(|a| a * k).collect()
}

fn unit(v: Vec<f64>) -> Vec<f64> {
    let n = norm_sq(&v).sqrt();
    scaled(&v, 1.0 / n)
}

/// Tangent vector whose geodesic stays inside the injectivity radius of
/// every curved factor: angles are drawn uniformly up to `reach * π`.
pub fn bounded_tangent<G: Rng + ?Sized>(m: &Manifold, x: &[f64], reach: f64, rng: &mut G) -> Vec<f64> {
    match m {
        Manifold::Euclidean(_) => scaled(&m.random_tangent(x, rng), rng.random_range(0.0..3.0)),
        Manifold::Sphere(_) => scaled(&unit(m.random_tangent(x, rng)), rng.random_range(0.0..reach) * PI),
        // a rotation by angle θ has a tangent of Frobenius norm √2·θ
        Manifold::So3 => scaled(
            &unit(m.random_tangent(x, rng)),
            rng.random_range(0.0..reach) * PI * 2f64.sqrt(),
        ),
        Manifold::Product(fs) => {
            let mut out = Vec::with_capacity(x.len());
            let mut at = 0;
            for f in fs {
                let d = f.ambient_dim();
                out.extend(bounded_tangent(f, &x[at..at + d], reach, rng));
                at += d;
            }
            out
        }
    }
}

/// Exp/log round trips and isometry of parallel transport over `draws`
/// random configurations. Also compares the norm of log with the distance.
pub fn geometry_checks(m: &Manifold, draws: usize, seed: u64, faults: Faults) -> Result<Vec<Check>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let log = |x: &[f64], y: &[f64]| -> Result<Vec<f64>> {
        let l = m.log(x, y)?;
        Ok(if faults.flip_log_sign { scaled(&l, -1.0) } else { l })
    };
    let (mut round, mut norm_gap, mut iso) = (0f64, 0f64, 0f64);
    for _ in 0..draws {
        let x = m.random_point(&mut rng).into_inner();
        let v = bounded_tangent(m, &x, 0.9, &mut rng);
        let y = m.exp(&x, &v);
        round = round.max(sub_norm(&log(&x, &y)?, &v));
        let z = m.exp(&x, &bounded_tangent(m, &x, 0.9, &mut rng));
        let l = log(&x, &z)?;
        round = round.max(sub_norm(&m.exp(&x, &l), &z));
        norm_gap = norm_gap.max((norm_sq(&l).sqrt() - m.dist(&x, &z)).abs());
        let a = unit(m.random_tangent(&x, &mut rng));
        let b = unit(m.random_tangent(&x, &mut rng));
        let ta = m.transport(&x, &z, &a)?;
        let tb = m.transport(&x, &z, &b)?;
        iso = iso
            .max((dot(&ta, &tb) - dot(&a, &b)).abs())
            .max((dot(&ta, &ta) - 1.0).abs());
    }
    let l = label(m);
    Ok(vec![
        Check::new("round_trip", format!("{l}: exp/log round trip"), Bound::Below, 1e-8, round),
        Check::new("round_trip", format!("{l}: |log| vs distance"), Bound::Below, 1e-9, norm_gap),
        Check::new("round_trip", format!("{l}: transport isometry"), Bound::Below, 1e-9, iso),
    ])
}

fn rel_err(a: &[f64], b: &[f64]) -> f64 {
    sub_norm(a, b) / norm_sq(b).sqrt().max(1e-8)
}

/// Differentials of log in either argument and the conditional velocity
/// against central differences along geodesics.
pub fn derivative_checks(m: &Manifold, draws: usize, seed: u64, h: f64) -> Result<Vec<Check>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (mut first, mut second, mut vel) = (0f64, 0f64, 0f64);
    for _ in 0..draws {
        let x = m.random_point(&mut rng).into_inner();
        let y = m.exp(&x, &bounded_tangent(m, &x, 0.8, &mut rng));

        let w = m.random_tangent(&y, &mut rng);
        let lp = m.log(&x, &m.exp(&y, &scaled(&w, h)))?;
        let lm = m.log(&x, &m.exp(&y, &scaled(&w, -h)))?;
        let fd: Vec<f64> = lp.iter().zip(&lm).map(|(a, b)| (a - b) / (2.0 * h)).collect();
        second = second.max(rel_err(&m.dlog_second(&x, &y, &w)?, &fd));

        let v = m.random_tangent(&x, &mut rng);
        let lp = m.log(&m.exp(&x, &scaled(&v, h)), &y)?;
        let lm = m.log(&m.exp(&x, &scaled(&v, -h)), &y)?;
        let fd: Vec<f64> = lp.iter().zip(&lm).map(|(a, b)| (a - b) / (2.0 * h)).collect();
        // log vectors live in different tangent spaces; compare at x
        first = first.max(rel_err(&m.dlog_first(&x, &y, &v)?, &m.proj(&x, &fd)));

        let t: f64 = rng.random_range(0.05..0.95);
        let (_, cv) = conditional_velocity(m, &x, &y, t)?;
        let xp = m.interpolate(&x, &y, t + h)?;
        let xm = m.interpolate(&x, &y, t - h)?;
        let fd: Vec<f64> = xp.iter().zip(&xm).map(|(a, b)| (a - b) / (2.0 * h)).collect();
        vel = vel.max(rel_err(&cv, &fd));
    }
    let l = label(m);
    Ok(vec![
        Check::new("derivatives", format!("{l}: dlog first argument"), Bound::Below, 1e-4, first),
        Check::new("derivatives", format!("{l}: dlog second argument"), Bound::Below, 1e-4, second),
        Check::new("derivatives", format!("{l}: conditional velocity"), Bound::Below, 1e-4, vel),
    ])
}

/// On flat space the Eulerian target is `v + (t - s) d/ds u` with the total
/// derivative taken along the straight line. Compares the trainer's target
/// with an independent forward-mode evaluation for `nets` random networks.
pub fn euclidean_reduction_check(nets: usize, seed: u64) -> Result<Check> {
    let d = 8;
    let m = Manifold::Euclidean(d);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut worst = 0f64;
    for _ in 0..nets {
        let shape = NetShape {
            omega: 1.0,
            ..NetShape::new(d, 16, 3)
        };
        let params = init_params(&shape, 1.0, &mut rng);
        let net = FlowNet::new(m.clone(), shape, Parameterization::VPred, params)?;
        let b = 4;
        let x = Array2::from_shape_fn((b, d), |_| rng.random_range(-1.0..1.0));
        let v = Array2::from_shape_fn((b, d), |_| rng.random_range(-1.0..1.0));
        let s: Vec<f64> = (0..b).map(|_| rng.random_range(0.0..0.5)).collect();
        let t: Vec<f64> = (0..b).map(|_| rng.random_range(0.5..1.0)).collect();
        let got = eulerian_targets(&net, x.view(), v.view(), &s, &t, f64::INFINITY);
        let p: Vec<Dual> = lift(&net.params);
        for i in 0..b {
            let mut inp = x.row(i).to_vec();
            inp.push(s[i]);
            let mut dir = v.row(i).to_vec();
            dir.push(1.0);
            let (_, du) = jvp(|z| forward_generic(&shape, &p, &z[..d], z[d], Dual::constant(t[i])), &inp, &dir);
            let expect: Vec<f64> = (0..d).map(|k| v[[i, k]] + (t[i] - s[i]) * du[k]).collect();
            let g = got[i].as_ref().map_err(Clone::clone)?;
            worst = worst.max(g.iter().zip(&expect).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max));
        }
    }
    Ok(Check::new(
        "euclidean_reduction",
        format!("{nets} random networks on euclidean({d})"),
        Bound::Below,
        1e-10,
        worst,
    ))
}

fn residual_samples(n: usize, seed: u64) -> Vec<ResidualSample> {
    let s2 = Manifold::Sphere(3);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..n)
        .map(|_| {
            let x = s2.random_point(&mut rng).into_inner();
            let a: f64 = rng.random();
            let b: f64 = rng.random();
            let (s, t) = if a < b { (a, b) } else { (b, a) };
            ResidualSample {
                x,
                s,
                r: s + rng.random::<f64>() * (t - s),
                t,
            }
        })
        .collect()
}

/// The exact rotation field must satisfy all three identities; a field
/// perturbed by 10% must violate at least one of them on average.
pub fn identity_checks(draws: usize, seed: u64) -> Result<(Vec<Check>, ResidualReport, ResidualReport)> {
    let o = RotationFlowOracle::new([1.0 / 3.0, 2.0 / 3.0, 2.0 / 3.0], 1.3)?;
    let samples = residual_samples(draws, seed);
    let exact = identity_residuals(&o, |x, _| o.instantaneous(x), |x, s, t| Ok(o.flow(x, s, t)), &samples)?;
    let bad = CorruptedField {
        inner: o.clone(),
        q: vec![0.3, -0.8, 0.52],
        scale: 0.1,
    };
    let corrupted = identity_residuals(&bad, |x, _| o.instantaneous(x), |x, s, t| Ok(o.flow(x, s, t)), &samples)?;
    let checks = vec![
        Check::new("identities", "oracle: eulerian residual".into(), Bound::Below, 1e-6, exact.eulerian.max),
        Check::new("identities", "oracle: lagrangian residual".into(), Bound::Below, 1e-6, exact.lagrangian.max),
        Check::new("identities", "oracle: semigroup residual".into(), Bound::Below, 1e-6, exact.semigroup.max),
        Check::new(
            "identities",
            "perturbed field: worst mean residual".into(),
            Bound::Above,
            1e-3,
            corrupted.max_mean(),
        ),
    ];
    Ok((checks, exact, corrupted))
}

fn rows(v: &[Vec<f64>]) -> Array2<f64> {
    let mut a = Array2::zeros((v.len(), v.first().map_or(0, Vec::len)));
    for (i, r) in v.iter().enumerate() {
        a.row_mut(i).assign(&ArrayView1::from(&r[..]));
    }
    a
}

/// Loss gradient with the targets supplied as plain numbers, taken on a
/// reverse-mode tape through the generic forward pass.
fn frozen_target_grad(tr: &Trainer, px: &Array2<f64>, draws: &[TimeDraw], targets: &[Vec<f64>]) -> Result<Vec<f64>> {
    let n = &tr.net;
    let c = &tr.cfg;
    let b = draws.len() as f64;
    let mut err = None;
    let (_, g) = grad(
        |th| {
            let mut acc = Var::constant(0.0);
            for (i, d) in draws.iter().enumerate() {
                let xc: Vec<Var> = lift(&px.row(i).to_vec());
                let raw = forward_generic(&n.shape, th, &xc, Var::cst(d.s), Var::cst(d.t));
                let u = match velocity_from_raw(&n.manifold, n.parameterization, &raw, &xc, Var::cst(d.s), Var::cst(d.t)) {
                    Ok(u) => u,
                    Err(e) => {
                        err = Some(e);
                        continue;
                    }
                };
                let w1 = if n.parameterization == Parameterization::X1Pred {
                    x1_time_weight(d.s, c.x1_eps)
                } else {
                    1.0
                };
                let delta: Vec<Var> = u.iter().zip(&targets[i]).map(|(&a, &k)| (a - k) * w1).collect();
                let n2 = norm_sq(&delta);
                let aw = adaptive_weight(n2.value(), c.adaptive_c, c.adaptive_p);
                acc = acc + n2 * (aw / b);
            }
            acc
        },
        &n.params,
    );
    match err {
        Some(e) => Err(e),
        None => Ok(g),
    }
}

/// Trainer gradients against gradients of the same loss with the targets
/// frozen to constants, on a 16-parameter network, for all three objectives.
pub fn stop_gradient_checks(seed: u64) -> Result<Vec<Check>> {
    let m = Manifold::Sphere(3);
    let shape = NetShape {
        ambient_dim: 3,
        width: 1,
        layers: 3,
        embed_dim: 2,
        omega: 1.0,
    };
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = Vec::new();
    for obj in [Objective::Eulerian, Objective::Lagrangian, Objective::Semigroup] {
        let mut worst = 0f64;
        for p in [Parameterization::VPred, Parameterization::X1Pred] {
            let net = FlowNet::new(m.clone(), shape, p, init_params(&shape, 1.0, &mut rng))?;
            let cfg = ObjectiveConfig {
                objective: obj,
                parameterization: p,
                ..ObjectiveConfig::default()
            };
            let tr = Trainer::new(net, cfg)?;
            let n = 8;
            let x0: Vec<Vec<f64>> = (0..n).map(|_| m.random_point(&mut rng).into_inner()).collect();
            let x1: Vec<Vec<f64>> = (0..n).map(|_| m.random_point(&mut rng).into_inner()).collect();
            let draws: Vec<TimeDraw> = (0..n)
                .map(|_| {
                    let s: f64 = rng.random_range(0.05..0.5);
                    let t: f64 = rng.random_range(0.5..0.95);
                    let (s, t) = if obj == Objective::Lagrangian { (t, s) } else { (s, t) };
                    TimeDraw {
                        s,
                        t,
                        r: Some(0.5 * (s + t)),
                        is_boundary: false,
                    }
                })
                .collect();
            let (x0a, x1a) = (rows(&x0), rows(&x1));
            let (_, g) = tr.loss_and_grad(x0a.view(), x1a.view(), &draws);
            let s: Vec<f64> = draws.iter().map(|d| d.s).collect();
            let t: Vec<f64> = draws.iter().map(|d| d.t).collect();
            let r: Vec<f64> = draws.iter().map(|d| d.r.unwrap_or(d.s)).collect();
            let tau = if obj == Objective::Lagrangian { &t } else { &s };
            let iv = (0..n)
                .map(|i| conditional_velocity(&m, &x0[i], &x1[i], tau[i]))
                .collect::<Result<Vec<_>>>()?;
            let xi = rows(&iv.iter().map(|p| p.0.clone()).collect::<Vec<_>>());
            let vi = rows(&iv.iter().map(|p| p.1.clone()).collect::<Vec<_>>());
            let clip = tr.cfg.derivative_clip;
            let (px, tg) = match obj {
                Objective::Eulerian => (xi.clone(), eulerian_targets(&tr.net, xi.view(), vi.view(), &s, &t, clip)),
                Objective::Semigroup => (xi.clone(), semigroup_targets(&tr.net, xi.view(), vi.view(), &s, &r, &t)),
                _ => {
                    let pairs = lagrangian_targets(&tr.net, xi.view(), vi.view(), &s, &t, clip)
                        .into_iter()
                        .collect::<Result<Vec<_>>>()?;
                    let px = rows(&pairs.iter().map(|p| p.0.clone()).collect::<Vec<_>>());
                    (px, pairs.into_iter().map(|p| Ok(p.1)).collect())
                }
            };
            let tg = tg.into_iter().collect::<Result<Vec<_>>>()?;
            let reference = frozen_target_grad(&tr, &px, &draws, &tg)?;
            for (a, b) in g.iter().zip(&reference) {
                worst = worst.max((a - b).abs() / b.abs().max(1.0));
            }
        }
        out.push(Check::new(
            "stop_gradient",
            format!("{obj:?}: gradient vs frozen targets").to_lowercase(),
            Bound::Below,
            1e-12,
            worst,
        ));
    }
    Ok(out)
}

/// Every stage in order. Geometry runs first so a broken primitive is
/// reported where it originates.
pub fn full_suite(seed: u64, faults: Faults) -> Result<Vec<Check>> {
    let mut out = Vec::new();
    for (i, m) in certification_manifolds().iter().enumerate() {
        out.extend(geometry_checks(m, 1000, seed + i as u64, faults)?);
    }
    for (i, m) in certification_manifolds().iter().enumerate() {
        out.extend(derivative_checks(m, 200, seed + 100 + i as u64, 1e-5)?);
    }
    out.push(euclidean_reduction_check(100, seed + 200)?);
    out.extend(identity_checks(100, seed + 300)?.0);
    out.extend(stop_gradient_checks(seed + 400)?);
    Ok(out)
}
