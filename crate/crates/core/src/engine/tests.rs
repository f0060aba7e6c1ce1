use super::*;
use crate::events::solve_constraints;
use ndarray::{array, Array1};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn random_triple(rows: usize, cols: usize, rng: &mut impl Rng) -> AffineTriple {
    let a = Array2::from_shape_simple_fn((rows, cols), || rng.random_range(-2.0..2.0));
    let b = Array2::from_shape_simple_fn((rows, cols), || rng.random_range(-2.0..2.0));
    let z = rng.random_range(-1.0..1.0);
    AffineTriple::from_line(a, b, z).unwrap()
}

fn naive_matmul(a: &Array2<f64>, w: &Array2<f64>) -> Array2<f64> {
    let mut out = Array2::zeros((a.nrows(), w.ncols()));
    for i in 0..a.nrows() {
        for j in 0..w.ncols() {
            let mut s = 0.0;
            for k in 0..a.ncols() {
                s += a[[i, k]] * w[[k, j]];
            }
            out[[i, j]] = s;
        }
    }
    out
}

fn max_abs_diff(a: &Array2<f64>, b: &Array2<f64>) -> f64 {
    a.iter().zip(b.iter()).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max)
}

#[test]
fn matmul_identity_and_zero_slope() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let t = random_triple(4, 3, &mut rng);
    assert_eq!(affine_matmul(&t, Array2::eye(3).view()).unwrap(), t);

    let flat = AffineTriple::from_line(t.offset.clone(), Array2::zeros((4, 3)), 0.3).unwrap();
    let w = Array2::from_shape_simple_fn((3, 5), || rng.random_range(-1.0..1.0));
    let out = affine_matmul(&flat, w.view()).unwrap();
    assert!(out.slope.iter().all(|&b| b == 0.0));
}

#[test]
fn matmul_matches_naive_oracle_on_both_backends() {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    for _ in 0..10 {
        let (n, k, m) = (rng.random_range(1..90), rng.random_range(1..150), rng.random_range(1..80));
        let t = random_triple(n, k, &mut rng);
        let w = Array2::from_shape_simple_fn((k, m), || rng.random_range(-1.0..1.0));
        for backend in Backend::all() {
            let mut out = AffineTriple::zeros(0, 0, 0.0);
            backend.matmul(&t, w.view(), &mut out);
            assert!(max_abs_diff(&out.value, &naive_matmul(&t.value, &w)) < 1e-12);
            assert!(max_abs_diff(&out.offset, &naive_matmul(&t.offset, &w)) < 1e-12);
            assert!(max_abs_diff(&out.slope, &naive_matmul(&t.slope, &w)) < 1e-12);
        }
    }
}

#[test]
fn matmul_rejects_bad_shape() {
    let t = AffineTriple::zeros(2, 3, 0.0);
    assert!(affine_matmul(&t, Array2::zeros((2, 2)).view()).is_err());
    assert!(affine_add_bias(&t, Array1::zeros(2).view()).is_err());
}

#[test]
fn add_bias_examples() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let t = random_triple(3, 2, &mut rng);
    assert_eq!(affine_add_bias(&t, Array1::zeros(2).view()).unwrap(), t);

    let s = AffineTriple::from_parts(array![[1.0]], array![[1.0]], array![[0.0]], 0.0).unwrap();
    let out = affine_add_bias(&s, array![2.0].view()).unwrap();
    assert_eq!((out.value[[0, 0]], out.offset[[0, 0]], out.slope[[0, 0]]), (3.0, 3.0, 0.0));

    for _ in 0..20 {
        let t = random_triple(5, 4, &mut rng);
        let c = Array1::from_shape_simple_fn(4, || rng.random_range(-3.0..3.0));
        let out = affine_add_bias(&t, c.view()).unwrap();
        assert!(out.consistency_gap() < 1e-12);
        assert_eq!(out.slope, t.slope);
    }
}

#[test]
fn si_relu_scalar_unit() {
    let t = AffineTriple::from_parts(array![[1.0]], array![[1.0]], array![[-2.0]], 0.0).unwrap();
    let (out, i) = si_relu(&t, Interval::new(-10.0, 10.0));
    assert_eq!(out.value[[0, 0]], 1.0);
    assert_eq!(i, Interval::new(-10.0, 0.5));
}

#[test]
fn si_relu_inactive_constant_unit() {
    let t = AffineTriple::from_parts(array![[-1.5]], array![[-1.5]], array![[0.0]], 0.0).unwrap();
    let (out, i) = si_relu(&t, Interval::new(-3.0, 4.0));
    assert_eq!(out.value[[0, 0]], 0.0);
    assert_eq!(out.offset[[0, 0]], 0.0);
    assert_eq!(i, Interval::new(-3.0, 4.0));
}

/// Brute-force half-line builder, one element at a time.
fn half_line_oracle(t: &AffineTriple) -> Interval {
    let mut lo = f64::NEG_INFINITY;
    let mut hi = f64::INFINITY;
    for ((&x, &a), &b) in t.value.iter().zip(t.offset.iter()).zip(t.slope.iter()) {
        let f = if x > 0.0 { 1.0 } else { -1.0 };
        // f (a + b z) >= 0
        if b == 0.0 {
            if f * a < 0.0 {
                return Interval::EMPTY;
            }
        } else if f * b > 0.0 {
            lo = lo.max(-a / b);
        } else {
            hi = hi.min(-a / b);
        }
    }
    Interval::new(lo, hi)
}

#[test]
fn si_relu_matches_half_line_oracle_and_fixes_pattern() {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    for _ in 0..30 {
        let t = random_triple(12, 7, &mut rng);
        let expect = half_line_oracle(&t);
        for backend in Backend::all() {
            let mut out = t.clone();
            let got = backend.si_relu(&mut out, Interval::REAL_LINE);
            assert_eq!(got, expect);
        }
        assert!(expect.contains(t.z));
        let pattern: Vec<bool> = t.value.iter().map(|&v| v > 0.0).collect();
        for _ in 0..20 {
            let lo = expect.lower.max(t.z - 50.0);
            let hi = expect.upper.min(t.z + 50.0);
            let z = rng.random_range(lo..=hi);
            if z == expect.lower || z == expect.upper {
                continue;
            }
            let probe: Vec<bool> = t.eval(z).iter().map(|&v| v > 0.0).collect();
            assert_eq!(probe, pattern);
        }
    }
}

fn network(dims: &[usize], seed: u64) -> PiecewiseLinearNetwork {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    PiecewiseLinearNetwork::random(dims, &mut rng)
}

#[test]
fn affine_only_network_keeps_interval() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let layers = vec![
        Layer::Affine {
            weight: Array2::from_shape_simple_fn((3, 4), || rng.random_range(-1.0..1.0)),
            bias: Array1::zeros(4),
        },
        Layer::Affine {
            weight: Array2::from_shape_simple_fn((4, 2), || rng.random_range(-1.0..1.0)),
            bias: Array1::ones(2),
        },
    ];
    let net = PiecewiseLinearNetwork::new(layers, 3).unwrap();
    let t = random_triple(6, 3, &mut rng);
    let mut engine = Engine::new(&net, Backend::Sequential);
    let i0 = Interval::new(-5.0, 5.0);
    let out = engine.conditioned_forward(&t, i0).unwrap();
    assert_eq!(out.interval, i0);
}

#[test]
fn saturated_active_network_is_affine() {
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let layers = vec![
        Layer::Affine {
            weight: Array2::from_shape_simple_fn((3, 4), || rng.random_range(0.0..0.1)),
            bias: Array1::from_elem(4, 100.0),
        },
        Layer::Relu,
        Layer::Affine {
            weight: Array2::from_shape_simple_fn((4, 2), || rng.random_range(0.0..0.1)),
            bias: Array1::from_elem(2, 100.0),
        },
        Layer::Relu,
    ];
    let net = PiecewiseLinearNetwork::new(layers, 3).unwrap();
    let a = Array2::from_shape_simple_fn((5, 3), || rng.random_range(-1.0..1.0));
    let b = Array2::from_shape_simple_fn((5, 3), || rng.random_range(-1.0..1.0));
    let t = AffineTriple::from_line(a.clone(), b.clone(), 0.0).unwrap();
    let i0 = Interval::new(-3.0, 3.0);
    let mut engine = Engine::new(&net, Backend::Sequential);
    let out = engine.conditioned_forward(&t, i0).unwrap();
    assert_eq!(out.interval, i0);
    for z in [-2.5, 1.7] {
        let direct = net.forward((&a + &(&b * z)).view()).unwrap();
        assert!(max_abs_diff(&direct, &out.output.eval(z)) < 1e-10);
    }
}

#[test]
fn conditioned_forward_is_faithful_and_tight() {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let net = network(&[5, 8, 6, 6, 3], 70);
    for trial in 0..10 {
        let a = Array2::from_shape_simple_fn((7, 5), || rng.random_range(-2.0..2.0));
        let b = Array2::from_shape_simple_fn((7, 5), || rng.random_range(-1.0..1.0));
        let z0 = rng.random_range(-1.0..1.0);
        let t = AffineTriple::from_line(a.clone(), b.clone(), z0).unwrap();
        let mut engine = Engine::new(&net, Backend::Sequential);
        let out = engine.conditioned_forward(&t, Interval::REAL_LINE).unwrap();
        let window = out.interval;
        assert!(window.contains(z0), "trial {trial}");
        let pattern = activation_patterns(&net, t.value.view());
        let lo = window.lower.max(z0 - 10.0);
        let hi = window.upper.min(z0 + 10.0);
        for _ in 0..50 {
            let z = rng.random_range(lo..=hi);
            let x = &a + &(&b * z);
            let direct = net.forward(x.view()).unwrap();
            assert!(max_abs_diff(&direct, &out.output.eval(z)) < 1e-8);
            if z > window.lower && z < window.upper {
                assert_eq!(activation_patterns(&net, x.view()), pattern);
            }
        }
        for edge in [window.lower - 1e-4, window.upper + 1e-4] {
            if edge.is_finite() {
                let x = &a + &(&b * edge);
                assert_ne!(activation_patterns(&net, x.view()), pattern, "trial {trial}");
            }
        }
    }
}

#[test]
fn backends_agree_and_log_reproduces_interval() {
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let net = network(&[6, 32, 32, 16, 4], 80);
    for _ in 0..5 {
        let a = Array2::from_shape_simple_fn((40, 6), || rng.random_range(-2.0..2.0));
        let b = Array2::from_shape_simple_fn((40, 6), || rng.random_range(-1.0..1.0));
        let t = AffineTriple::from_line(a, b, 0.1).unwrap();
        let mut seq = Engine::new(&net, Backend::Sequential).with_constraint_log();
        let mut par = Engine::new(&net, Backend::Parallel);
        let s = seq.conditioned_forward(&t, Interval::REAL_LINE).unwrap();
        let (s_interval, s_out) = (s.interval, s.output.clone());
        let p = par.conditioned_forward(&t, Interval::REAL_LINE).unwrap();
        assert_eq!(p.interval, s_interval);
        assert!(max_abs_diff(&p.output.value, &s_out.value) <= 1e-12);
        assert!(max_abs_diff(&p.output.slope, &s_out.slope) <= 1e-12);

        let mut all = LinearConstraintSet::new();
        for layer in seq.constraint_log().unwrap() {
            all.extend(&layer.constraints);
        }
        assert_eq!(solve_constraints(&all), s_interval);
        let json = serde_json::to_string(seq.constraint_log().unwrap()).unwrap();
        assert!(json.contains("\"coeffs\""));
    }
}

#[test]
fn tap_captures_seam() {
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let ext = network(&[4, 5, 3], 90);
    let ae = network(&[3, 2, 3], 91);
    let full = ext.chain(&ae).unwrap();
    let a = Array2::from_shape_simple_fn((6, 4), || rng.random_range(-2.0..2.0));
    let b = Array2::from_shape_simple_fn((6, 4), || rng.random_range(-1.0..1.0));
    let t = AffineTriple::from_line(a, b, 0.0).unwrap();
    let mut engine = Engine::new(&full, Backend::Sequential).with_tap(ext.layers().len());
    let out = engine.conditioned_forward(&t, Interval::REAL_LINE).unwrap();
    let tap = out.tap.unwrap();
    assert!(max_abs_diff(&tap.value, &ext.forward(t.value.view()).unwrap()) < 1e-12);
    assert!(max_abs_diff(&out.output.value, &full.forward(t.value.view()).unwrap()) < 1e-12);
}

#[test]
fn parallel_kernels_split_large_inputs_bit_exactly() {
    let mut rng = ChaCha8Rng::seed_from_u64(10);
    let (n, k, m) = (3000, 96, 80);
    let t = random_triple(n, k, &mut rng);
    let w = Array2::from_shape_simple_fn((k, m), || rng.random_range(-1.0..1.0));
    let mut seq = AffineTriple::zeros(0, 0, 0.0);
    let mut par = AffineTriple::zeros(0, 0, 0.0);
    Backend::Sequential.matmul(&t, w.view(), &mut seq);
    Backend::Parallel.matmul(&t, w.view(), &mut par);
    assert_eq!(seq, par);
    let bias = Array1::from_shape_simple_fn(m, || rng.random_range(-1.0..1.0));
    Backend::Sequential.add_bias(&mut seq, bias.view());
    Backend::Parallel.add_bias(&mut par, bias.view());
    assert_eq!(seq, par);
    let si = Backend::Sequential.si_relu(&mut seq, Interval::REAL_LINE);
    let pi = Backend::Parallel.si_relu(&mut par, Interval::REAL_LINE);
    assert_eq!(si, pi);
    assert_eq!(seq, par);
}
