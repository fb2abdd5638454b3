use cgc_lora::tensor::{grad_check, Tape, Tensor, Var, DEFAULT_EPS};
use cgc_lora::Error;
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn rand_t(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor {
    let n = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| rng.gen_range(-1.5..1.5)).collect()).unwrap()
}

/// Weighted sum with fixed random weights, so every output coordinate
/// reaches the loss with a different sign and magnitude.
fn probe(tape: &mut Tape<'_>, y: Var, seed: u64) -> cgc_lora::Result<Var> {
    let shape = tape.shape(y).to_vec();
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0xFEED);
    let n = shape.iter().product();
    let w = tape.constant(&shape, (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect())?;
    let p = tape.mul(y, w)?;
    Ok(tape.sum(p))
}

fn naive_matmul(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    let mut out = vec![0.0; m * n];
    for i in 0..m {
        for j in 0..n {
            let mut s = 0.0;
            for p in 0..k {
                s += a[i * k + p] * b[p * n + j];
            }
            out[i * n + j] = s;
        }
    }
    out
}

fn eval(f: impl FnOnce(&mut Tape<'static>) -> cgc_lora::Result<Var>) -> Vec<f64> {
    let mut tape = Tape::new();
    let v = f(&mut tape).unwrap();
    tape.value(v).to_vec()
}

#[test]
fn matmul_identity_and_hand_product() {
    let out = eval(|t| {
        let i = t.constant(&[2, 2], vec![1.0, 0.0, 0.0, 1.0])?;
        let b = t.constant(&[2, 2], vec![1.0, 2.0, 3.0, 4.0])?;
        t.matmul(i, b)
    });
    assert_eq!(out, vec![1.0, 2.0, 3.0, 4.0]);
    let out = eval(|t| {
        let a = t.constant(&[1, 2], vec![1.0, 2.0])?;
        let b = t.constant(&[2, 1], vec![3.0, 4.0])?;
        t.matmul(a, b)
    });
    assert_eq!(out, vec![11.0]);
}

#[test]
fn matmul_matches_triple_loop() {
    for seed in 0..20 {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let a = rand_t(&mut rng, &[5, 3]);
        let b = rand_t(&mut rng, &[3, 4]);
        let want = naive_matmul(a.data(), b.data(), 5, 3, 4);
        let got = eval(|t| {
            let (x, y) = (t.leaf(&a), t.leaf(&b));
            t.matmul(x, y)
        });
        for (g, w) in got.iter().zip(&want) {
            assert!((g - w).abs() < 1e-12);
        }
    }
}

#[test]
fn matmul_shape_mismatch_names_both_shapes() {
    let mut t = Tape::new();
    let a = t.constant(&[2, 3], vec![0.0; 6]).unwrap();
    let b = t.constant(&[2, 3], vec![0.0; 6]).unwrap();
    let err = t.matmul(a, b).unwrap_err();
    let msg = err.to_string();
    assert!(matches!(err, Error::Dimension { .. }));
    assert!(msg.contains("[2, 3]"), "{msg}");
}

#[test]
fn softmax_examples() {
    let s = |v: Vec<f64>| {
        eval(|t| {
            let x = t.constant(&[v.len()], v)?;
            t.softmax(x)
        })
    };
    for p in s(vec![0.0, 0.0, 0.0]) {
        assert!((p - 1.0 / 3.0).abs() < 1e-15);
    }
    for c in [-700.0, -3.5, 0.0, 2.0, 1e3] {
        assert_eq!(s(vec![c, c]), vec![0.5, 0.5]);
    }
    let p = s(vec![1.0, 0.0, 0.0]);
    let e = std::f64::consts::E;
    assert!((p[0] - e / (e + 2.0)).abs() < 1e-15);
    let want = [0.57611688, 0.21194156, 0.21194156];
    for (a, b) in p.iter().zip(want) {
        assert!((a - b).abs() < 5e-9);
    }
}

#[test]
fn softmax_errors() {
    let mut t = Tape::new();
    let nan = t.constant(&[2], vec![0.0, f64::NAN]).unwrap();
    assert!(matches!(t.softmax(nan), Err(Error::Numeric(_))));
    assert!(Tensor::new(vec![0], vec![]).is_err());
}

#[test]
fn backward_examples() {
    let mut t = Tape::new();
    let x = t.leaf(&Tensor::new(vec![2, 3], vec![0.5; 6]).unwrap().with_requires_grad(true));
    let s = t.sum(x);
    let g = t.backward(s).unwrap();
    assert_eq!(g.wrt(x).unwrap(), &[1.0; 6]);

    let mut t = Tape::new();
    let x = t.leaf(&Tensor::vector(vec![1.0, 2.0, 3.0]).unwrap().with_requires_grad(true));
    let sq = t.mul(x, x).unwrap();
    let s = t.sum(sq);
    let g = t.backward(s).unwrap();
    assert_eq!(g.wrt(x).unwrap(), &[2.0, 4.0, 6.0]);
}

#[test]
fn backward_rejects_non_scalar() {
    let mut t = Tape::new();
    let x = t.leaf(&Tensor::vector(vec![1.0, 2.0]).unwrap().with_requires_grad(true));
    assert!(matches!(t.backward(x), Err(Error::Argument(_))));
}

#[test]
fn replaying_backward_doubles_gradients() {
    use cgc_lora::tensor::ParamStore;
    let mut store = ParamStore::new();
    let id = store.add("w", Tensor::vector(vec![0.3, -1.2, 2.0]).unwrap().with_requires_grad(true));
    let grads = {
        let mut t = Tape::with_params(&store);
        let w = t.param(id);
        let y = t.gelu(w);
        let l = t.mul(y, w).unwrap();
        let s = t.sum(l);
        t.backward(s).unwrap()
    };
    store.accumulate(&grads);
    let once = store.get(id).grad().unwrap().to_vec();
    store.accumulate(&grads);
    let twice = store.get(id).grad().unwrap().to_vec();
    for (a, b) in once.iter().zip(&twice) {
        assert_eq!(2.0 * a, *b);
    }
}

#[test]
fn grad_check_trivial_cases() {
    let mut p = [Tensor::vector(vec![0.7, -0.2, 1.9]).unwrap()];
    let err = grad_check(
        |t, v| {
            let sq = t.mul(v[0], v[0])?;
            Ok(t.sum(sq))
        },
        &mut p,
        DEFAULT_EPS,
    )
    .unwrap();
    assert!(err < 1e-8, "{err}");

    let err = grad_check(|t, _| t.constant(&[1], vec![4.2]), &mut p, DEFAULT_EPS).unwrap();
    assert_eq!(err, 0.0);
}

#[test]
fn grad_check_rejects_nondeterministic_f() {
    use std::cell::Cell;
    let calls = Cell::new(0.0);
    let mut p = [Tensor::vector(vec![1.0]).unwrap()];
    let r = grad_check(
        |t, v| {
            calls.set(calls.get() + 1.0);
            let c = t.constant(&[1], vec![calls.get()])?;
            let y = t.mul(v[0], c)?;
            Ok(t.sum(y))
        },
        &mut p,
        DEFAULT_EPS,
    );
    assert!(matches!(r, Err(Error::Oracle(_))));
}

#[test]
fn grad_check_rejects_bad_eps() {
    let mut p = [Tensor::vector(vec![1.0]).unwrap()];
    assert!(grad_check(|t, v| Ok(t.sum(v[0])), &mut p, 0.0).is_err());
}

type Build = fn(&mut Tape<'_>, &[Var]) -> cgc_lora::Result<Var>;

/// Affine in each argument: central differences carry no truncation error,
/// so a wide step only shrinks the roundoff term.
const MULTILINEAR_EPS: f64 = 1e-3;

/// Every primitive with random small shapes; the closure output is probed
/// with a fixed random weighting. The flag marks primitives that are
/// affine in each argument.
fn primitives() -> Vec<(&'static str, bool, Vec<Vec<usize>>, Build)> {
    vec![
        ("matmul", true, vec![vec![3, 4], vec![4, 2]], |t, v| t.matmul(v[0], v[1])),
        ("matmul_nt", true, vec![vec![3, 4], vec![5, 4]], |t, v| t.matmul_nt(v[0], v[1])),
        ("transpose", true, vec![vec![3, 5]], |t, v| t.transpose(v[0])),
        ("add", true, vec![vec![2, 3], vec![2, 3]], |t, v| t.add(v[0], v[1])),
        ("sub", true, vec![vec![2, 3], vec![2, 3]], |t, v| t.sub(v[0], v[1])),
        ("mul", true, vec![vec![4, 2], vec![4, 2]], |t, v| t.mul(v[0], v[1])),
        ("scale", true, vec![vec![3, 3]], |t, v| Ok(t.scale(v[0], -0.7))),
        ("mul_scalar", true, vec![vec![1], vec![2, 4]], |t, v| t.mul_scalar(v[0], v[1])),
        ("gelu", false, vec![vec![3, 4]], |t, v| Ok(t.gelu(v[0]))),
        ("layer_norm", false, vec![vec![3, 6]], |t, v| Ok(t.layer_norm(v[0]))),
        ("softmax_vec", false, vec![vec![6]], |t, v| t.softmax(v[0])),
        ("softmax_rows", false, vec![vec![3, 5]], |t, v| t.softmax(v[0])),
        ("causal_softmax", false, vec![vec![4, 4]], |t, v| t.causal_softmax(v[0])),
        ("gather_rows", true, vec![vec![5, 3]], |t, v| t.gather_rows(v[0], &[4, 0, 4, 2])),
        ("slice_cols", true, vec![vec![3, 6]], |t, v| t.slice_cols(v[0], 2, 3)),
        ("concat_cols", true, vec![vec![3, 2], vec![3, 4]], |t, v| t.concat_cols(&[v[0], v[1]])),
        ("concat", true, vec![vec![2, 2], vec![3]], |t, v| t.concat(&[v[0], v[1]])),
        ("select", true, vec![vec![5]], |t, v| t.select(v[0], 3)),
        ("reshape", true, vec![vec![2, 6]], |t, v| t.reshape(v[0], &[3, 4])),
        ("sum", true, vec![vec![3, 3]], |t, v| Ok(t.sum(v[0]))),
        ("mean", true, vec![vec![2, 5]], |t, v| Ok(t.mean(v[0]))),
        ("cross_entropy", false, vec![vec![4, 6]], |t, v| {
            t.cross_entropy(v[0], &[1, 5, 0, 3], &[true, false, true, true])
        }),
    ]
}

#[test]
fn every_primitive_passes_finite_differences() {
    let mut failures = Vec::new();
    for (name, multilinear, shapes, build) in primitives() {
        let eps = if multilinear { MULTILINEAR_EPS } else { DEFAULT_EPS };
        for seed in 0..20u64 {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let mut params: Vec<Tensor> = shapes.iter().map(|s| rand_t(&mut rng, s)).collect();
            let err = grad_check(
                |t, v| {
                    let y = build(t, v)?;
                    probe(t, y, seed)
                },
                &mut params,
                eps,
            )
            .unwrap();
            if err >= 1e-6 {
                failures.push(format!("{name} seed {seed}: {err:e}"));
            }
        }
    }
    assert!(failures.is_empty(), "{failures:#?}");
}

#[test]
fn shared_leaf_accumulates_across_uses() {
    let mut t = Tape::new();
    let x = t.leaf(&Tensor::vector(vec![1.0, -2.0]).unwrap().with_requires_grad(true));
    let a = t.add(x, x).unwrap();
    let b = t.add(a, x).unwrap();
    let s = t.sum(b);
    let g = t.backward(s).unwrap();
    assert_eq!(g.wrt(x).unwrap(), &[3.0, 3.0]);
}

proptest! {
    #[test]
    fn softmax_sums_to_one_and_is_shift_invariant(
        xs in prop::collection::vec(-30.0f64..30.0, 1..12),
        c in -50.0f64..50.0,
    ) {
        let p = eval(|t| { let x = t.constant(&[xs.len()], xs.clone())?; t.softmax(x) });
        let s: f64 = p.iter().sum();
        prop_assert!((s - 1.0).abs() < 1e-12);
        prop_assert!(p.iter().all(|&v| v > 0.0));
        // max-subtraction makes integer shifts of integer inputs exact
        let ints: Vec<f64> = xs.iter().map(|v| v.round()).collect();
        let shifted: Vec<f64> = ints.iter().map(|v| v + c.round()).collect();
        let a = eval(|t| { let x = t.constant(&[ints.len()], ints.clone())?; t.softmax(x) });
        let b = eval(|t| { let x = t.constant(&[shifted.len()], shifted.clone())?; t.softmax(x) });
        prop_assert_eq!(a, b);
    }

    #[test]
    fn tensor_len_matches_shape(r in 1usize..6, c in 1usize..6) {
        let t = Tensor::zeros(&[r, c]);
        prop_assert_eq!(t.len(), r * c);
        prop_assert!(Tensor::new(vec![r, c], vec![0.0; r * c + 1]).is_err());
    }

    #[test]
    fn matmul_oracle(m in 1usize..7, k in 1usize..7, n in 1usize..7, seed in any::<u64>()) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let a = rand_t(&mut rng, &[m, k]);
        let b = rand_t(&mut rng, &[k, n]);
        let want = naive_matmul(a.data(), b.data(), m, k, n);
        let got = eval(|t| { let (x, y) = (t.leaf(&a), t.leaf(&b)); t.matmul(x, y) });
        for (g, w) in got.iter().zip(&want) {
            prop_assert!((g - w).abs() < 1e-12);
        }
    }
}
