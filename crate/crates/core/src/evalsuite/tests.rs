use super::*;
use crate::autodiff::{dot, norm_sq};
use crate::geometry::Manifold;
use crate::model::{flow_map_batch, AverageVelocity, FlowNet, NetShape, Parameterization};
use crate::training::{ObjectiveConfig, TimeDraw};
use ndarray::{Array2, ArrayView2};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

fn s2() -> Manifold {
    Manifold::Sphere(3)
}

fn oracle() -> RotationFlowOracle {
    let a = [1.0, 2.0, 2.0];
    RotationFlowOracle::new([a[0] / 3.0, a[1] / 3.0, a[2] / 3.0], 1.3).unwrap()
}

fn one(x: &[f64]) -> ArrayView2<'_, f64> {
    ArrayView2::from_shape((1, x.len()), x).unwrap()
}

fn sub_norm(a: &[f64], b: &[f64]) -> f64 {
    let d: Vec<f64> = a.iter().zip(b).map(|(p, q)| p - q).collect();
    norm_sq(&d).sqrt()
}

#[test]
fn helix_starts_at_the_north_pole() {
    assert_eq!(helix_point(0.0, 3), [0.0, 0.0, 1.0]);
    let end = helix_point(1.0, 3);
    assert!((end[2] + 1.0).abs() < 1e-15);
}

#[test]
fn helix_embedding_is_orthonormal_and_points_are_unit() {
    for d in [3, 17, 512] {
        let (ds, pts) = make_helix(d, 200, 3, 4).unwrap();
        assert!(ds.orthogonality_error() < 1e-10, "D = {d}");
        for y in &pts {
            assert_eq!(y.len(), d);
            assert!((norm_sq(y).sqrt() - 1.0).abs() < 1e-12);
        }
    }
}

#[test]
fn helix_is_deterministic_per_seed() {
    let a = make_helix(64, 100, 3, 9).unwrap();
    let b = make_helix(64, 100, 3, 9).unwrap();
    let c = make_helix(64, 100, 3, 10).unwrap();
    assert_eq!(a, b);
    assert_ne!(a.1, c.1);
}

#[test]
fn project_back_inverts_the_embedding() {
    let (ds, pts) = make_helix(40, 300, 3, 5).unwrap();
    let x = [0.6, 0.0, 0.8];
    let back = ds.project_back(&ds.embed_point(&x)).unwrap();
    assert!(sub_norm(&back, &x) < 1e-14);
    // projected samples stay near the clean curve: within a few jitter widths
    let curve: Vec<[f64; 3]> = (0..=20_000).map(|k| helix_point(k as f64 / 20_000.0, 3)).collect();
    for y in pts.iter().take(50) {
        let p = ds.project_back(y).unwrap();
        let near = curve.iter().map(|c| sub_norm(&p, c)).fold(f64::INFINITY, f64::min);
        assert!(near < 6.0 * HELIX_JITTER, "{near}");
    }
}

#[test]
fn project_back_rejects_the_orthogonal_complement() {
    let (ds, _) = make_helix(5, 1, 3, 6).unwrap();
    // a unit vector orthogonal to all three columns
    let mut y = vec![1.0, -0.5, 0.25, 0.3, -0.7];
    for j in 0..3 {
        let col: Vec<f64> = (0..5).map(|i| ds.embed[i * 3 + j]).collect();
        let c = dot(&y, &col);
        y.iter_mut().zip(&col).for_each(|(a, b)| *a -= c * b);
    }
    let n = norm_sq(&y).sqrt();
    y.iter_mut().for_each(|a| *a /= n);
    assert!(matches!(ds.project_back(&y), Err(crate::Error::Domain(_))));
    let mut r = rng(7);
    let z = Manifold::Sphere(5).random_point(&mut r);
    let p = ds.project_back(&z).unwrap();
    assert!((norm_sq(&p) - 1.0).abs() < 1e-12);
}

#[test]
fn helix_rejects_small_ambient_dimension() {
    assert!(make_helix(2, 10, 3, 0).is_err());
}

#[test]
fn mixture_points_cluster_around_centers() {
    let c = [[0.0, 0.0, 1.0], [1.0, 0.0, 0.0]];
    let pts = make_s2_mixture(&c, 0.05, 500, 1).unwrap();
    for p in &pts {
        let d = c.iter().map(|q| s2().dist(p, q)).fold(f64::INFINITY, f64::min);
        assert!(d < 0.4);
    }
    assert!(make_s2_mixture(&[[0.0, 0.0, 2.0]], 0.1, 5, 1).is_err());
}

#[test]
fn kernel_is_one_on_the_diagonal() {
    let x = [0.0, 0.6, 0.8];
    assert_eq!(geodesic_rbf(&s2(), &x, &x, 1.0), 1.0);
}

#[test]
fn mmd_of_identical_batches_is_near_zero() {
    let pts = uniform_samples(&s2(), 400, 2);
    let a = to_array(&pts);
    let v = mmd(&s2(), a.view(), a.view(), 1.0).unwrap();
    // with a = b the unbiased estimate is −2(1 − mean off-diagonal kernel)/n
    assert!(v.mmd2.abs() < 2.0 / 400.0);
    assert!(v.mmd2 <= 0.0);
    assert_eq!(v.mmd, 0.0);
}

#[test]
fn mmd_of_antipodal_point_masses_is_closed_form() {
    let a = Array2::from_shape_fn((50, 3), |(_, j)| if j == 2 { 1.0 } else { 0.0 });
    let b = Array2::from_shape_fn((60, 3), |(_, j)| if j == 2 { -1.0 } else { 0.0 });
    let v = mmd(&s2(), a.view(), b.view(), 1.0).unwrap();
    let want = 2.0 * (1.0 - (-std::f64::consts::PI.powi(2) / 2.0).exp());
    assert!((v.mmd2 - want).abs() < 1e-12);
    assert!((v.mmd - want.sqrt()).abs() < 1e-12);
}

#[test]
fn mmd_is_symmetric_and_deterministic() {
    let a = to_array(&uniform_samples(&s2(), 120, 3));
    let b = to_array(&make_s2_mixture(&[[0.0, 0.0, 1.0]], 0.3, 90, 4).unwrap());
    let ab = mmd(&s2(), a.view(), b.view(), 1.0).unwrap();
    let ba = mmd(&s2(), b.view(), a.view(), 1.0).unwrap();
    assert!((ab.mmd2 - ba.mmd2).abs() < 1e-14);
    assert_eq!(ab, mmd(&s2(), a.view(), b.view(), 1.0).unwrap());
    assert!(ab.mmd > 0.1);
}

#[test]
fn mmd_needs_two_points_per_batch() {
    let a = Array2::from_shape_vec((1, 3), vec![0.0, 0.0, 1.0]).unwrap();
    let b = to_array(&uniform_samples(&s2(), 5, 1));
    assert!(matches!(mmd(&s2(), a.view(), b.view(), 1.0), Err(crate::Error::Input(_))));
    assert!(mmd(&s2(), b.view(), b.view(), 0.0).is_err());
}

#[test]
fn noise_floor_is_positive_and_shrinks_with_n() {
    let (ds, pts) = make_helix(3, 4096, 3, 11).unwrap();
    let m = ds.manifold();
    let floors: Vec<f64> = [256, 1024, 4096]
        .iter()
        .map(|&n| noise_floor(&m, &pts[..n], n / 2, 5, 1.0, 12).unwrap().mean)
        .collect();
    assert!(floors[0] > 0.0);
    assert!(floors[0] > floors[1] && floors[1] > floors[2], "{floors:?}");
}

#[test]
fn oracle_boundary_velocity_is_the_rotation_field() {
    let o = oracle();
    let x = [0.0, 0.6, 0.8];
    let u = o.average(&x, 0.4, 0.4).unwrap();
    assert!(sub_norm(&u, &o.instantaneous(&x)) < 1e-15);
    let on_axis = o.axis;
    let u = o.average(&on_axis, 0.1, 0.7).unwrap();
    assert!(norm_sq(&u).sqrt() < 1e-12);
}

#[test]
fn oracle_average_velocity_reproduces_the_exact_flow() {
    let o = oracle();
    let mut r = rng(13);
    for _ in 0..100 {
        let x = s2().random_point(&mut r).into_inner();
        let s: f64 = r.random();
        let t: f64 = r.random();
        let u = o.average(&x, s, t).unwrap();
        let y = o.flow(&x, s, t);
        // ‖u‖ is the arc length over the duration and (t − s) u = log_x(x_t)
        assert!((norm_sq(&u).sqrt() * (t - s).abs() - s2().dist(&x, &y)).abs() < 1e-10);
        let l = s2().log(&x, &y).unwrap();
        let su: Vec<f64> = u.iter().map(|v| v * (t - s)).collect();
        assert!(sub_norm(&su, &l) < 1e-12);
        let phi = flow_map_batch(&o, one(&x), &[s], &[t]).remove(0).unwrap();
        assert!(sub_norm(&phi, &y) < 1e-8);
    }
}

#[test]
fn oracle_rejects_angles_past_pi() {
    let o = RotationFlowOracle::new([0.0, 0.0, 1.0], 4.0).unwrap();
    assert!(matches!(o.average(&[1.0, 0.0, 0.0], 0.0, 0.9), Err(crate::Error::Domain(_))));
    assert!(RotationFlowOracle::new([0.0, 0.0, 2.0], 1.0).is_err());
}

#[test]
fn oracle_time_derivative_is_exact_at_the_diagonal() {
    let o = oracle();
    let x = [0.48, 0.6, 0.64];
    let jv = o.velocity_jvp(one(&x), Array2::zeros((1, 3)).view(), &[0.3], &[0.0], &[0.3], &[1.0]);
    let du = jv[0].as_ref().unwrap().1.clone();
    let h = 1e-4;
    let up = o.average(&x, 0.3, 0.3 + h).unwrap();
    let dn = o.average(&x, 0.3, 0.3 - h).unwrap();
    let fd: Vec<f64> = up.iter().zip(&dn).map(|(a, b)| (a - b) / (2.0 * h)).collect();
    assert!(sub_norm(&du, &fd) < 1e-7, "{du:?} vs {fd:?}");
}

fn residual_samples(n: usize, seed: u64) -> Vec<ResidualSample> {
    let mut r = rng(seed);
    (0..n)
        .map(|_| {
            let x = s2().random_point(&mut r).into_inner();
            let a: f64 = r.random();
            let b: f64 = r.random();
            let (s, t) = if a < b { (a, b) } else { (b, a) };
            ResidualSample { x, s, r: s + r.random::<f64>() * (t - s), t }
        })
        .collect()
}

#[test]
fn oracle_field_satisfies_all_three_identities() {
    let o = oracle();
    let rep = identity_residuals(&o, |x, _| o.instantaneous(x), |x, s, t| Ok(o.flow(x, s, t)), &residual_samples(100, 14)).unwrap();
    assert!(rep.max() < 1e-6, "{rep:?}");
}

#[test]
fn corrupted_field_violates_the_semigroup_identity() {
    let o = oracle();
    let bad = CorruptedField { inner: o.clone(), q: vec![0.3, -0.8, 0.52], scale: 0.1 };
    let rep = identity_residuals(&bad, |x, _| o.instantaneous(x), |x, s, t| Ok(o.flow(x, s, t)), &residual_samples(100, 15)).unwrap();
    assert!(rep.semigroup.mean > 1e-3, "{rep:?}");
}

#[test]
fn euclidean_constant_field_has_zero_residuals() {
    let m = Manifold::Euclidean(4);
    let c = vec![0.5, -1.0, 2.0, 0.25];
    let f = ConstantField { manifold: m.clone(), c: c.clone() };
    let mut r = rng(16);
    let samples: Vec<ResidualSample> = (0..20)
        .map(|_| ResidualSample { x: (0..4).map(|_| r.random::<f64>()).collect(), s: 0.2, r: 0.5, t: 0.9 })
        .collect();
    let rep = identity_residuals(
        &f,
        |_, _| c.clone(),
        |x, s, t| Ok(x.iter().zip(&c).map(|(a, b)| a + (t - s) * b).collect()),
        &samples,
    )
    .unwrap();
    assert!(rep.max() < 1e-14, "{rep:?}");
}

#[test]
fn residuals_reject_diagonal_samples() {
    let o = oracle();
    let s = vec![ResidualSample { x: vec![0.0, 0.0, 1.0], s: 0.5, r: 0.5, t: 0.5 }];
    assert!(identity_residuals(&o, |x, _| o.instantaneous(x), |x, s, t| Ok(o.flow(x, s, t)), &s).is_err());
}

#[test]
fn euler_reference_flow_converges_at_first_order() {
    let o = oracle();
    let x = [0.0, 0.6, 0.8];
    let exact = o.flow(&x, 0.0, 1.0);
    let v = |p: &[f64], _: f64| o.instantaneous(p);
    let err = |n| sub_norm(&ode_reference_flow(v, &s2(), &x, 0.0, 1.0, n, OdeScheme::Euler).unwrap(), &exact);
    assert!(err(10_000) < 1e-3);
    let ratio = err(500) / err(1000);
    assert!((1.8..2.2).contains(&ratio), "{ratio}");
    let rk = sub_norm(&ode_reference_flow(v, &s2(), &x, 0.0, 1.0, 50, OdeScheme::Rk4).unwrap(), &exact);
    assert!(rk < 1e-7, "{rk}");
    let still = ode_reference_flow(|_: &[f64], _| vec![0.0; 3], &s2(), &x, 0.0, 1.0, 7, OdeScheme::Rk4).unwrap();
    assert_eq!(still, x.to_vec());
    assert!(ode_reference_flow(v, &s2(), &x, 0.0, 1.0, 0, OdeScheme::Euler).is_err());
}

fn probe_net(omega: f64, seed: u64) -> FlowNet {
    let shape = NetShape { omega, ..NetShape::new(3, 32, 3) };
    let params = crate::model::init_params(&shape, 1.0, &mut rng(seed));
    FlowNet::new(s2(), shape, Parameterization::VPred, params).unwrap()
}

fn probe_batch(n: usize, seed: u64) -> (Array2<f64>, Array2<f64>, Vec<TimeDraw>) {
    let mut r = rng(seed);
    let x0 = to_array(&(0..n).map(|_| s2().random_point(&mut r).into_inner()).collect::<Vec<_>>());
    let x1 = to_array(&make_s2_mixture(&[[0.0, 0.0, 1.0]], 0.2, n, seed + 1).unwrap());
    let draws = (0..n)
        .map(|_| {
            let a: f64 = r.random_range(0.0..0.95);
            let b: f64 = r.random_range(0.0..0.95);
            TimeDraw { s: a.min(b), t: a.max(b), r: None, is_boundary: false }
        })
        .collect();
    (x0, x1, draws)
}

#[test]
fn variance_probe_is_deterministic_and_bucketed() {
    let net = probe_net(1.0, 17);
    let (x0, x1, d) = probe_batch(64, 18);
    let cfg = ObjectiveConfig::default();
    let a = target_variance_probe(&net, &cfg, x0.view(), x1.view(), &d, 4).unwrap();
    let b = target_variance_probe(&net, &cfg, x0.view(), x1.view(), &d, 4).unwrap();
    assert_eq!(a, b);
    assert_eq!(a.buckets.iter().map(|k| k.count).sum::<usize>() + a.skipped, 64);
    assert!(a.target_norm.var > 0.0);
}

#[test]
fn zero_network_has_no_derivative_term() {
    let net = probe_net(1.0, 19);
    let net = net.with_params(vec![0.0; net.params.len()]);
    let (x0, x1, d) = probe_batch(32, 20);
    let p = target_variance_probe(&net, &ObjectiveConfig::default(), x0.view(), x1.view(), &d, 2).unwrap();
    assert_eq!(p.derivative_term.max, 0.0);
    assert_eq!(p.derivative_term.var, 0.0);
}

#[test]
fn high_frequency_embedding_raises_target_variance() {
    let (x0, x1, d) = probe_batch(256, 21);
    let cfg = ObjectiveConfig::default();
    let lo = target_variance_probe(&probe_net(0.02, 22), &cfg, x0.view(), x1.view(), &d, 1).unwrap();
    let hi = target_variance_probe(&probe_net(30.0, 22), &cfg, x0.view(), x1.view(), &d, 1).unwrap();
    assert!(hi.target_norm.var > lo.target_norm.var, "{} vs {}", hi.target_norm.var, lo.target_norm.var);
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn oracle_defining_relation_holds(seed in 0u64..1000, s in 0.0f64..1.0, t in 0.0f64..1.0) {
        let o = oracle();
        let x = s2().random_point(&mut rng(seed)).into_inner();
        let u = o.average(&x, s, t).unwrap();
        let y = o.flow(&x, s, t);
        let l = s2().log(&x, &y).unwrap();
        let su: Vec<f64> = u.iter().map(|v| v * (t - s)).collect();
        prop_assert!(sub_norm(&su, &l) < 1e-12);
        prop_assert!(dot(&u, &x).abs() < 1e-12);
    }

    #[test]
    fn mmd_headline_is_nonnegative(seed in 0u64..200) {
        let a = to_array(&uniform_samples(&s2(), 12, seed));
        let b = to_array(&uniform_samples(&s2(), 9, seed + 1000));
        let v = mmd(&s2(), a.view(), b.view(), 1.0).unwrap();
        prop_assert!(v.mmd >= 0.0);
        prop_assert!((v.mmd * v.mmd - v.mmd2.max(0.0)).abs() < 1e-14);
    }
}
