use ndarray::Array2;
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::*;
use crate::autodiff::{dot, norm_sq};

fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

fn sphere_net(p: Parameterization, d: usize, omega: f64, seed: u64) -> FlowNet {
    let shape = NetShape {
        omega,
        ..NetShape::new(d, 32, 3)
    };
    let mut r = rng(seed);
    let mut net = FlowNet::init(Manifold::Sphere(d), shape, p, &mut r).unwrap();
    // full-scale head so outputs are not tiny
    net.params = init_params(&shape, 1.0, &mut r);
    net
}

fn points(m: &Manifold, n: usize, r: &mut ChaCha8Rng) -> Array2<f64> {
    let d = m.ambient_dim();
    let mut a = Array2::zeros((n, d));
    for i in 0..n {
        let p = m.random_point(r);
        a.row_mut(i).assign(&ndarray::ArrayView1::from(p.coords()));
    }
    a
}

fn times(n: usize, r: &mut ChaCha8Rng) -> (Vec<f64>, Vec<f64>) {
    let s: Vec<f64> = (0..n).map(|_| r.random_range(0.0..0.9)).collect();
    let t: Vec<f64> = (0..n).map(|_| r.random_range(0.0..1.0)).collect();
    (s, t)
}

#[test]
fn vpred_outputs_are_tangent() {
    let net = sphere_net(Parameterization::VPred, 3, 0.02, 1);
    let mut r = rng(2);
    let x = points(&net.manifold, 1000, &mut r);
    let (s, t) = times(1000, &mut r);
    for (i, u) in net.velocity(x.view(), &s, &t).into_iter().enumerate() {
        let u = u.unwrap();
        assert!(dot(&u, x.row(i).as_slice().unwrap()).abs() < 1e-9);
    }
}

#[test]
fn x1pred_endpoints_are_valid_points() {
    for m in [Manifold::Sphere(5), Manifold::So3, Manifold::Product(vec![Manifold::Sphere(3), Manifold::So3])] {
        let d = m.ambient_dim();
        let shape = NetShape::new(d, 16, 2);
        let mut r = rng(3);
        let net = FlowNet::new(m.clone(), shape, Parameterization::X1Pred, init_params(&shape, 1.0, &mut r)).unwrap();
        let x = points(&m, 50, &mut r);
        let (s, t) = times(50, &mut r);
        let fw = net.raw_forward(x.view(), &s, &t);
        for i in 0..50 {
            let y = net.raw_to_point(fw.out.row(i).as_slice().unwrap()).unwrap();
            assert!(m.point_error(&y) < 1e-9);
        }
    }
}

#[test]
fn x1pred_with_fixed_endpoint_is_geodesic_average_velocity() {
    let m = Manifold::Sphere(3);
    let x = [1.0, 0.0, 0.0];
    let y = [0.0, 0.6, 0.8];
    let raw = [0.0, 1.2, 1.6];
    let u0 = velocity_from_raw(&m, Parameterization::X1Pred, &raw, &x, 0.0, 0.3).unwrap();
    assert_eq!(u0, m.log(&x, &y).unwrap());
    let u = velocity_from_raw(&m, Parameterization::X1Pred, &raw, &x, 0.5, 0.9).unwrap();
    assert!(u.iter().zip(&u0).all(|(a, b)| (a - 2.0 * b).abs() < 1e-15));
    assert!(velocity_from_raw(&m, Parameterization::X1Pred, &raw, &x, 1.0, 1.0).is_err());
}

#[test]
fn xtpred_boundary_falls_back_to_projection() {
    let m = Manifold::Sphere(3);
    let x = [1.0, 0.0, 0.0];
    let raw = [0.3, 0.2, -0.1];
    let u = velocity_from_raw(&m, Parameterization::XtPred, &raw, &x, 0.4, 0.4).unwrap();
    assert_eq!(u, vec![0.0, 0.2, -0.1]);
    let u = velocity_from_raw(&m, Parameterization::XtPred, &[0.0, 1.0, 0.0], &x, 0.2, 0.7).unwrap();
    assert!((u[1] - std::f64::consts::FRAC_PI_2 / 0.5).abs() < 1e-14);
    let anti = velocity_from_raw(&m, Parameterization::XtPred, &[-1.0, 0.0, 0.0], &x, 0.2, 0.7);
    assert!(matches!(anti, Err(Error::Domain(_))));
}

#[test]
fn predictions_depend_on_both_times() {
    let net = sphere_net(Parameterization::VPred, 3, 0.02, 4);
    let x = net.manifold.point(vec![0.0, 0.0, 1.0]).unwrap();
    let a = net.predict_u(&x, 0.2, 0.5).unwrap();
    let b = net.predict_u(&x, 0.2, 0.9).unwrap();
    assert!(a.coords != b.coords);
}

#[test]
fn velocity_jvp_matches_finite_differences() {
    for p in [Parameterization::VPred, Parameterization::X1Pred, Parameterization::XtPred] {
        let net = sphere_net(p, 3, 1.0, 5);
        let mut r = rng(6);
        let x = points(&net.manifold, 8, &mut r);
        let s: Vec<f64> = (0..8).map(|_| r.random_range(0.0..0.4)).collect();
        let t: Vec<f64> = (0..8).map(|_| r.random_range(0.5..1.0)).collect();
        let mut dx = Array2::zeros((8, 3));
        for i in 0..8 {
            let v = net.manifold.random_tangent(x.row(i).as_slice().unwrap(), &mut r);
            dx.row_mut(i).assign(&ndarray::ArrayView1::from(&v[..]));
        }
        let ds = vec![1.0; 8];
        let dt = vec![0.5; 8];
        let jv = net.velocity_jvp(x.view(), dx.view(), &s, &ds, &t, &dt);
        let h = 1e-6;
        let shift = |sign: f64| {
            let xs = &x + &(&dx * (sign * h));
            let ss: Vec<f64> = s.iter().map(|v| v + sign * h).collect();
            let ts: Vec<f64> = t.iter().map(|v| v + sign * h * 0.5).collect();
            net.velocity(xs.view(), &ss, &ts)
        };
        let (up, um) = (shift(1.0), shift(-1.0));
        for i in 0..8 {
            let (_, d) = jv[i].as_ref().unwrap();
            let a = up[i].as_ref().unwrap();
            let b = um[i].as_ref().unwrap();
            let fd: Vec<f64> = a.iter().zip(b).map(|(p, q)| (p - q) / (2.0 * h)).collect();
            let err: f64 = d.iter().zip(&fd).map(|(p, q)| (p - q).powi(2)).sum::<f64>().sqrt();
            assert!(err <= 1e-5 * norm_sq(&fd).sqrt().max(1e-3), "{p}: {d:?} vs {fd:?}");
        }
    }
}

/// Uses the trait's default (JVP-based) pullback.
struct Basis<'a>(&'a FlowNet);

impl AverageVelocity for Basis<'_> {
    fn manifold(&self) -> &Manifold {
        &self.0.manifold
    }
    fn velocity(&self, x: ArrayView2<f64>, s: &[f64], t: &[f64]) -> Vec<Result<Vec<f64>>> {
        self.0.velocity(x, s, t)
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
        self.0.velocity_jvp(x, dx, s, ds, t, dt)
    }
}

#[test]
fn reverse_flow_map_pullback_matches_forward_basis() {
    for p in [Parameterization::VPred, Parameterization::X1Pred] {
        let net = sphere_net(p, 4, 1.0, 7);
        let mut r = rng(8);
        let x = points(&net.manifold, 6, &mut r);
        let s = vec![0.1; 6];
        let t = vec![1.0; 6];
        let g = Array2::from_shape_fn((6, 4), |_| r.random_range(-1.0..1.0));
        let a = net.flow_map_vjp(x.view(), &s, &t, g.view());
        let b = Basis(&net).flow_map_vjp(x.view(), &s, &t, g.view());
        for (ra, rb) in a.iter().zip(&b) {
            let (ra, rb) = (ra.as_ref().unwrap(), rb.as_ref().unwrap());
            assert!(ra.iter().zip(rb).all(|(p, q)| (p - q).abs() < 1e-10), "{ra:?} vs {rb:?}");
        }
    }
}

#[test]
fn flow_map_is_identity_at_equal_times() {
    let net = sphere_net(Parameterization::VPred, 3, 0.02, 9);
    let mut r = rng(10);
    let x = points(&net.manifold, 5, &mut r);
    let s = vec![0.3; 5];
    for (i, y) in flow_map_batch(&net, x.view(), &s, &s).into_iter().enumerate() {
        assert_eq!(y.unwrap(), x.row(i).to_vec());
    }
}

#[test]
fn low_frequency_embedding_tames_time_derivative() {
    let mut ratios = Vec::new();
    for seed in 0..3 {
        let mut r = rng(100 + seed);
        let x = points(&Manifold::Sphere(3), 256, &mut r);
        let (s, t) = times(256, &mut r);
        let dx = Array2::zeros((256, 3));
        let zeros = vec![0.0; 256];
        let ones = vec![1.0; 256];
        let max_dt = |omega: f64| {
            let net = sphere_net(Parameterization::VPred, 3, omega, seed);
            net.velocity_jvp(x.view(), dx.view(), &s, &zeros, &t, &ones)
                .into_iter()
                .map(|r| norm_sq(&r.unwrap().1).sqrt())
                .fold(0.0, f64::max)
        };
        ratios.push(max_dt(30.0) / max_dt(0.02));
    }
    assert!(ratios.iter().all(|&q| q >= 1.0), "{ratios:?}");
}

#[test]
fn ema_recursion() {
    let mut e = EmaState::new(&[1.0, 2.0], 0.0);
    e.update(&[5.0, 6.0]);
    assert_eq!(e.shadow, vec![5.0, 6.0]);
    let mut e = EmaState::new(&[1.0, 2.0], 1.0);
    e.update(&[5.0, 6.0]);
    assert_eq!(e.shadow, vec![1.0, 2.0]);
    let (s0, p0, d) = (3.0, -1.0, 0.9);
    let mut e = EmaState::new(&[s0], d);
    for _ in 0..25 {
        e.update(&[p0]);
    }
    assert!((e.shadow[0] - (p0 + d.powi(25) * (s0 - p0))).abs() < 1e-12);
}

#[test]
fn checkpoint_round_trip_and_corruption() {
    let net = sphere_net(Parameterization::X1Pred, 3, 0.02, 11);
    let dir = std::env::temp_dir().join(format!("rmflow-ckpt-{}", std::process::id()));
    std::fs::create_dir_all(&dir).unwrap();
    let path = dir.join("a.rmfckpt");
    let header = CheckpointHeader {
        manifold: net.manifold.clone(),
        shape: net.shape,
        parameterization: net.parameterization,
        seed: 11,
        kind: "params".into(),
        extra: serde_json::json!({"note": 1}),
    };
    save_checkpoint(&path, &header, &net.params).unwrap();
    let (h, p) = load_checkpoint(&path).unwrap();
    assert_eq!(h, header);
    assert_eq!(p, net.params);
    let mut bytes = std::fs::read(&path).unwrap();
    bytes.pop();
    std::fs::write(&path, &bytes).unwrap();
    assert!(matches!(load_checkpoint(&path), Err(Error::Checkpoint(_))));
    std::fs::write(&path, b"nonsense").unwrap();
    assert!(load_checkpoint(&path).is_err());
    std::fs::remove_dir_all(&dir).ok();
}

#[test]
fn shape_mismatch_is_rejected() {
    let shape = NetShape::new(3, 4, 2);
    assert!(FlowNet::new(Manifold::Sphere(4), shape, Parameterization::VPred, vec![0.0; shape.param_count()]).is_err());
    assert!(FlowNet::new(Manifold::Sphere(3), shape, Parameterization::VPred, vec![0.0; 5]).is_err());
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn vpred_tangency_on_spheres(seed in any::<u64>(), d in 2usize..9, s in 0.0f64..1.0, t in 0.0f64..1.0) {
        let net = sphere_net(Parameterization::VPred, d, 0.02, seed);
        let mut r = rng(seed ^ 1);
        let x = net.manifold.random_point(&mut r);
        let u = net.predict_u(&x, s, t).unwrap();
        prop_assert!(dot(&u, &x).abs() < 1e-9);
    }
}
