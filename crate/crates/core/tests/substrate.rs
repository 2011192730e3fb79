use dualstream_core::tensor::{grad_check, ElementwiseKind, ParameterStore, Tape, Tensor, Var};
use dualstream_core::Result;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

const SEEDS: u64 = 50;
const TOL: f64 = 1e-4;
const STEP: f64 = 1e-5;

/// Contracts an arbitrary output against a fixed random weight so every
/// output entry contributes a distinct gradient.
fn contract(tape: &mut Tape, y: Var, seed: u64) -> Result<Var> {
    let n = tape.value(y).len();
    let shape = tape.shape(y).to_vec();
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0xabcdef);
    let w: Vec<f64> = (0..n).map(|_| rng.random_range(-1.0..1.0)).collect();
    let w = tape.constant(shape, w)?;
    let p = tape.mul(y, w)?;
    Ok(tape.sum(p))
}

fn check<F>(name: &str, store_of: impl Fn(&mut ChaCha8Rng) -> ParameterStore, f: F)
where
    F: Fn(&ParameterStore, &mut Tape, u64) -> Result<Var>,
{
    for seed in 0..SEEDS {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let store = store_of(&mut rng);
        let report = grad_check(&store, |s, t| f(s, t, seed), STEP, TOL).unwrap();
        assert!(report.passed(), "{name} seed {seed}: max rel error {}", report.max_rel_error());
    }
}

fn store(entries: &[(&str, &[usize])], rng: &mut ChaCha8Rng) -> ParameterStore {
    let mut s = ParameterStore::new();
    for (name, shape) in entries {
        s.insert(*name, Tensor::randn(shape, 1.0, rng));
    }
    s
}

#[test]
fn matmul_and_transpose_gradients() {
    check(
        "matmul",
        |r| store(&[("a", &[3, 4]), ("b", &[4, 2])], r),
        |s, t, seed| {
            let (a, b) = (s.bind(t, "a")?, s.bind(t, "b")?);
            let y = t.matmul(a, b)?;
            let y = t.transpose(y)?;
            contract(t, y, seed)
        },
    );
}

#[test]
fn elementwise_gradients() {
    for kind in ["add", "sub", "mul", "relu", "sigmoid"] {
        let kind: ElementwiseKind = kind.parse().unwrap();
        check(
            &format!("{kind:?}"),
            |r| store(&[("a", &[2, 5]), ("b", &[2, 5])], r),
            |s, t, seed| {
                let (a, b) = (s.bind(t, "a")?, s.bind(t, "b")?);
                let y = t.elementwise(kind, a, kind.is_binary().then_some(b))?;
                let y = t.mul(y, b)?;
                contract(t, y, seed)
            },
        );
    }
}

#[test]
fn bias_broadcast_gradient() {
    check(
        "add_bias",
        |r| store(&[("x", &[3, 4]), ("b", &[4])], r),
        |s, t, seed| {
            let (x, b) = (s.bind(t, "x")?, s.bind(t, "b")?);
            let y = t.add(x, b)?;
            contract(t, y, seed)
        },
    );
}

#[test]
fn softmax_and_masked_softmax_gradients() {
    check(
        "softmax",
        |r| store(&[("x", &[3, 5])], r),
        |s, t, seed| {
            let x = s.bind(t, "x")?;
            let a = t.softmax(x, 1)?;
            let b = t.softmax(x, 0)?;
            let mask: Vec<bool> = (0..15).map(|i| i % 5 == 1 || i == 14).collect();
            let m = t.softmax_masked(x, 1, Some(&mask))?;
            let y = t.concat(&[a, b, m], 0)?;
            contract(t, y, seed)
        },
    );
}

#[test]
fn layer_norm_gradient() {
    check(
        "layer_norm",
        |r| store(&[("x", &[4, 6]), ("g", &[6]), ("b", &[6])], r),
        |s, t, seed| {
            let (x, g, b) = (s.bind(t, "x")?, s.bind(t, "g")?, s.bind(t, "b")?);
            let y = t.layer_norm(x, g, b, 1e-5)?;
            contract(t, y, seed)
        },
    );
}

#[test]
fn structural_op_gradients() {
    check(
        "concat/slice/gather/where",
        |r| store(&[("a", &[3, 4]), ("b", &[3, 4])], r),
        |s, t, seed| {
            let (a, b) = (s.bind(t, "a")?, s.bind(t, "b")?);
            let c = t.concat(&[a, b], 1)?;
            let c = t.slice_last(c, 2, 7)?;
            let g = t.gather_rows(c, &[2, 0, 2])?;
            let w = t.where_rows(&[true, false, true], a, b)?;
            let gw = t.slice_last(w, 0, 4)?;
            let gs = t.slice_last(g, 0, 4)?;
            let y = t.mul(gs, gw)?;
            let m = t.mean(y);
            let s2 = t.scale(m, 3.0);
            let tail = contract(t, g, seed)?;
            t.add(s2, tail)
        },
    );
}

#[test]
fn fused_op_gradients() {
    check(
        "sine/box/focal/l1/giou",
        |r| store(&[("p", &[3, 2]), ("c", &[3, 2]), ("d", &[3, 4]), ("z", &[3, 6])], r),
        |s, t, seed| {
            let (p, c, d, z) = (s.bind(t, "p")?, s.bind(t, "c")?, s.bind(t, "d")?, s.bind(t, "z")?);
            let e = t.sine_encode(p, &[1.0, 2.0, 4.0])?;
            let e = contract(t, e, seed)?;
            let boxes = t.box_decode(c, d)?;
            let mut rng = ChaCha8Rng::seed_from_u64(seed + 1000);
            let target: Vec<f64> = (0..3)
                .flat_map(|_| {
                    let (x, y) = (rng.random_range(0.0..0.5), rng.random_range(0.0..0.5));
                    [x, y, x + rng.random_range(0.1..0.5), y + rng.random_range(0.1..0.5)]
                })
                .collect();
            let l1 = t.l1_loss(boxes, &target)?;
            let gi = t.giou_loss(boxes, &target)?;
            let labels: Vec<f64> = (0..18).map(|i| ((i * 7 + seed as usize) % 5 == 0) as u8 as f64).collect();
            let fo = t.sigmoid_focal(z, &labels, 0.25, 2.0)?;
            let a = t.add(e, l1)?;
            let b = t.add(gi, fo)?;
            t.add(a, b)
        },
    );
}

/// Double-double accumulation and division, standing in for a 128-bit
/// reference.
fn two_sum(a: f64, b: f64) -> (f64, f64) {
    let s = a + b;
    let bb = s - a;
    (s, (a - (s - bb)) + (b - bb))
}

fn softmax_dd(x: &[f64]) -> Vec<f64> {
    let m = x.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = x.iter().map(|v| (v - m).exp()).collect();
    let (mut hi, mut lo) = (0.0, 0.0);
    for v in &e {
        let (s, err) = two_sum(hi, *v);
        hi = s;
        lo += err;
    }
    let (hi, lo) = two_sum(hi, lo);
    e.iter()
        .map(|v| {
            let q = v / hi;
            // one Newton correction for the low word of the denominator
            q - q * lo / hi
        })
        .collect()
}

#[test]
fn softmax_matches_high_precision_oracle() {
    for seed in 0..SEEDS {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let x: Vec<f64> = (0..5).map(|_| rng.random_range(-20.0..20.0)).collect();
        let mut t = Tape::new();
        let v = t.constant(vec![5], x.clone()).unwrap();
        let y = t.softmax(v, 0).unwrap();
        let got = t.value(y);
        for (a, b) in got.iter().zip(softmax_dd(&x)) {
            assert!((a - b).abs() <= 4.0 * f64::EPSILON * b.max(1e-300) + 1e-300);
        }
        let total: f64 = got.iter().sum();
        assert!((total - 1.0).abs() < 1e-12);
    }
}

#[test]
fn layer_norm_row_statistics() {
    for seed in 0..SEEDS {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let x = Tensor::randn(&[4, 16], 3.0, &mut rng);
        let mut t = Tape::new();
        let xv = t.leaf(&x);
        let g = t.constant(vec![16], vec![1.0; 16]).unwrap();
        let b = t.constant(vec![16], vec![0.0; 16]).unwrap();
        let y = t.layer_norm(xv, g, b, 1e-5).unwrap();
        for (row_in, row) in x.values().chunks(16).zip(t.value(y).chunks(16)) {
            let mean = row.iter().sum::<f64>() / 16.0;
            let var = row.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / 16.0;
            assert!(mean.abs() < 1e-9);
            // the eps guard shrinks variance by var/(var+eps)
            let mu = row_in.iter().sum::<f64>() / 16.0;
            let v_in = row_in.iter().map(|v| (v - mu).powi(2)).sum::<f64>() / 16.0;
            assert!((var - v_in / (v_in + 1e-5)).abs() < 1e-12);
            if v_in > 10.0 {
                assert!((var - 1.0).abs() < 1e-6);
            }
        }
    }
}

#[test]
fn layer_norm_matches_direct_formula() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let x: Vec<f64> = (0..7).map(|_| rng.random_range(-2.0..2.0)).collect();
    let g: Vec<f64> = (0..7).map(|_| rng.random_range(0.5..1.5)).collect();
    let b: Vec<f64> = (0..7).map(|_| rng.random_range(-1.0..1.0)).collect();
    let mu = x.iter().sum::<f64>() / 7.0;
    let var = x.iter().map(|v| (v - mu).powi(2)).sum::<f64>() / 7.0;
    let mut t = Tape::new();
    let (xv, gv, bv) = (
        t.constant(vec![1, 7], x.clone()).unwrap(),
        t.constant(vec![7], g.clone()).unwrap(),
        t.constant(vec![7], b.clone()).unwrap(),
    );
    let y = t.layer_norm(xv, gv, bv, 1e-5).unwrap();
    for i in 0..7 {
        let want = (x[i] - mu) / (var + 1e-5).sqrt() * g[i] + b[i];
        assert!((t.value(y)[i] - want).abs() < 1e-12);
    }
}

#[test]
fn matmul_matches_triple_loop() {
    for seed in 0..SEEDS {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let a = Tensor::randn(&[3, 4], 1.0, &mut rng);
        let b = Tensor::randn(&[4, 2], 1.0, &mut rng);
        let mut t = Tape::new();
        let (av, bv) = (t.leaf(&a), t.leaf(&b));
        let c = t.matmul(av, bv).unwrap();
        for i in 0..3 {
            for j in 0..2 {
                let want: f64 = (0..4).map(|k| a.at(i, k) * b.at(k, j)).sum();
                assert!((t.value(c)[i * 2 + j] - want).abs() < 1e-12);
            }
        }
    }
}

#[test]
fn focal_with_zero_gamma_is_weighted_bce() {
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    for _ in 0..100 {
        let z: f64 = rng.random_range(-5.0..5.0);
        let label = rng.random_bool(0.5) as u8 as f64;
        let mut t = Tape::new();
        let v = t.constant(vec![1], vec![z]).unwrap();
        let f = t.sigmoid_focal(v, &[label], 0.5, 0.0).unwrap();
        let p = 1.0 / (1.0 + (-z).exp());
        let bce = -(label * p.ln() + (1.0 - label) * (1.0 - p).ln());
        assert!((t.scalar(f) - 0.5 * bce).abs() < 1e-12);
    }
}

#[test]
fn tape_giou_and_decode_agree_with_geometry() {
    use dualstream_core::geometry::{decode_box, giou, logit, Bbox};
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    for _ in 0..200 {
        let r = [rng.random_range(0.01..0.99), rng.random_range(0.01..0.99)];
        let d: [f64; 4] = std::array::from_fn(|_| rng.random_range(-3.0..3.0));
        let want = decode_box(r, d).unwrap();
        let mut t = Tape::new();
        let c = t.constant(vec![1, 2], vec![logit(r[0]), logit(r[1])]).unwrap();
        let dv = t.constant(vec![1, 4], d.to_vec()).unwrap();
        let b = t.box_decode(c, dv).unwrap();
        let got = Bbox::from_slice(t.value(b));
        assert!(got.l1(&want) < 1e-12);
        // direct formula oracle
        let s = |v: f64| 1.0 / (1.0 + (-v).exp());
        let lx = (r[0] / (1.0 - r[0])).ln();
        let (a, cc) = (s(lx - d[0]), s(lx + d[2]));
        assert!((want.x1 - a.min(cc)).abs() < 1e-12 && (want.x2 - a.max(cc)).abs() < 1e-12);

        let target = [0.2, 0.3, 0.6, 0.7];
        let g = t.giou_loss(b, &target).unwrap();
        assert!((t.scalar(g) - (1.0 - giou(&got, &Bbox::from_slice(&target)))).abs() < 1e-12);
    }
}

#[test]
fn training_step_is_bitwise_deterministic() {
    use dualstream_core::tensor::AdamW;
    let run = || {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let mut s = store(&[("w", &[4, 3]), ("g", &[3]), ("b", &[3])], &mut rng);
        let x = Tensor::randn(&[5, 4], 1.0, &mut rng);
        for _ in 0..3 {
            let mut t = Tape::new();
            let xv = t.leaf(&x);
            let (w, g, b) = (s.bind(&mut t, "w").unwrap(), s.bind(&mut t, "g").unwrap(), s.bind(&mut t, "b").unwrap());
            let h = t.matmul(xv, w).unwrap();
            let h = t.layer_norm(h, g, b, 1e-5).unwrap();
            let h = t.softmax(h, 1).unwrap();
            let l = contract(&mut t, h, 1).unwrap();
            t.backward(l).unwrap();
            s.accumulate_grads(&t).unwrap();
            s.optimizer_step(&AdamW::default()).unwrap();
        }
        s.iter().flat_map(|(_, t)| t.values().iter().map(|v| v.to_bits()).collect::<Vec<_>>()).collect::<Vec<_>>()
    };
    assert_eq!(run(), run());
}
