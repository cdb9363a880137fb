//! Kernels against brute-force loops on random small instances, in f32 and f64.

mod common;

use common::*;
use dualtoken::kernels::{self, ConvGeom};
use dualtoken::layers::{MultiHeadAttention, ParamBuilder};
use dualtoken::{Ctx, ParamStore, Scalar, Tensor};
use proptest::prelude::*;
use rand::Rng;
use rand_chacha::ChaCha8Rng;

const F32_TOL: f64 = 1e-6;
const F64_TOL: f64 = 1e-12;
const CASES: u64 = 24;

fn values(rng: &mut ChaCha8Rng, n: usize, scale: f64) -> Vec<f64> {
    (0..n).map(|_| rng.random_range(-scale..scale)).collect()
}

fn round_f32(v: &[f64]) -> Vec<f64> {
    v.iter().map(|&x| x as f32 as f64).collect()
}

fn to<T: Scalar>(v: &[f64]) -> Vec<T> {
    v.iter().map(|&x| T::from_f64_lossy(x)).collect()
}

fn from<T: Scalar>(v: &[T]) -> Vec<f64> {
    v.iter().map(|x| x.to_f64_lossy()).collect()
}

/// Compares `kernel` in both dtypes with `oracle`. The f32 run sees inputs
/// rounded to f32, and so does its oracle.
fn compare(
    inputs: &[Vec<f64>],
    oracle: impl Fn(&[Vec<f64>]) -> Vec<f64>,
    k32: impl Fn(&[Vec<f64>]) -> Vec<f64>,
    k64: impl Fn(&[Vec<f64>]) -> Vec<f64>,
) -> (f64, f64) {
    let lo: Vec<Vec<f64>> = inputs.iter().map(|v| round_f32(v)).collect();
    (max_abs_diff(&k32(&lo), &oracle(&lo)), max_abs_diff(&k64(inputs), &oracle(inputs)))
}

fn assert_close(name: &str, case: u64, (e32, e64): (f64, f64)) {
    assert!(e32 <= F32_TOL, "{name} case {case}: f32 error {e32:e}");
    assert!(e64 <= F64_TOL, "{name} case {case}: f64 error {e64:e}");
}

fn conv_run<T: Scalar>(v: &[Vec<f64>], g: &ConvGeom, bias: bool) -> Vec<f64> {
    let b = bias.then(|| to::<T>(&v[2]));
    from(&kernels::conv2d(&to::<T>(&v[0]), &to::<T>(&v[1]), b.as_deref(), g))
}

#[test]
fn conv2d_matches_loops() {
    let mut r = rng(1);
    for case in 0..CASES {
        let groups = [1, 2, 4][r.random_range(0..3)];
        let cin = groups * r.random_range(1..=3);
        let cout = groups * r.random_range(1..=3);
        let k = [1, 3, 5][r.random_range(0..3)];
        let h = r.random_range(k..k + 5);
        let w = r.random_range(k..k + 5);
        let stride = r.random_range(1..=2);
        let padding = r.random_range(0..=k / 2);
        let bias = r.random_bool(0.5);
        let g = ConvGeom { h, w, cin, kh: k, kw: k, cout, stride, padding, groups };
        let inputs = vec![
            values(&mut r, h * w * cin, 0.5),
            values(&mut r, k * k * (cin / groups) * cout, 0.5),
            values(&mut r, cout, 0.5),
        ];
        let oracle = |v: &[Vec<f64>]| {
            conv2d(&v[0], (h, w, cin), &v[1], (k, k, cout), bias.then_some(&v[2][..]), stride, padding, groups).0
        };
        let errs = compare(&inputs, oracle, |v| conv_run::<f32>(v, &g, bias), |v| conv_run::<f64>(v, &g, bias));
        assert_close("conv2d", case, errs);
    }
}

#[test]
fn avgpool_matches_loops() {
    let mut r = rng(2);
    for case in 0..CASES {
        let k = r.random_range(1..=4);
        let (h, w, c) = (k * r.random_range(1..=4), k * r.random_range(1..=4), r.random_range(1..=5));
        let inputs = vec![values(&mut r, h * w * c, 1.0)];
        let errs = compare(
            &inputs,
            |v| avgpool(&v[0], h, w, c, k),
            |v| from(&kernels::avgpool(&to::<f32>(&v[0]), h, w, c, k)),
            |v| from(&kernels::avgpool(&to::<f64>(&v[0]), h, w, c, k)),
        );
        assert_close("avgpool", case, errs);
    }
}

#[test]
fn matmul_matches_loops() {
    let mut r = rng(3);
    for case in 0..CASES {
        let (m, k, n) = (r.random_range(1..=9), r.random_range(1..=12), r.random_range(1..=9));
        let inputs = vec![values(&mut r, m * k, 1.0), values(&mut r, k * n, 1.0)];
        let errs = compare(
            &inputs,
            |v| matmul(&v[0], &v[1], m, k, n),
            |v| from(&kernels::matmul(&to::<f32>(&v[0]), &to::<f32>(&v[1]), m, k, n)),
            |v| from(&kernels::matmul(&to::<f64>(&v[0]), &to::<f64>(&v[1]), m, k, n)),
        );
        assert_close("matmul", case, errs);
    }
}

#[test]
fn bilinear_matches_four_weight_blend() {
    let mut r = rng(4);
    for case in 0..CASES {
        let (h, w, c) = (r.random_range(1..=6), r.random_range(1..=6), r.random_range(1..=3));
        let (oh, ow) = (r.random_range(1..=9), r.random_range(1..=9));
        let inputs = vec![values(&mut r, h * w * c, 1.0)];
        let errs = compare(
            &inputs,
            |v| bilinear(&v[0], h, w, c, oh, ow),
            |v| from(&kernels::bilinear_resize(&to::<f32>(&v[0]), h, w, c, oh, ow)),
            |v| from(&kernels::bilinear_resize(&to::<f64>(&v[0]), h, w, c, oh, ow)),
        );
        assert_close("bilinear_resize", case, errs);
    }
}

#[test]
fn layernorm_and_softmax_match_loops() {
    let mut r = rng(5);
    for case in 0..CASES {
        let (n, c) = (r.random_range(1..=6), r.random_range(2..=10));
        let inputs = vec![values(&mut r, n * c, 2.0), values(&mut r, c, 1.0), values(&mut r, c, 1.0)];
        let errs = compare(
            &inputs,
            |v| layernorm(&v[0], &v[1], &v[2], c, 1e-6),
            |v| from(&kernels::layernorm(&to::<f32>(&v[0]), &to::<f32>(&v[1]), &to::<f32>(&v[2]), c, 1e-6).0),
            |v| from(&kernels::layernorm(&to::<f64>(&v[0]), &to::<f64>(&v[1]), &to::<f64>(&v[2]), c, 1e-6).0),
        );
        assert_close("layernorm", case, errs);
        let soft = |v: &[Vec<f64>]| v[0].chunks(c).flat_map(softmax_row).collect::<Vec<_>>();
        let errs = compare(
            &inputs,
            soft,
            |v| from(&kernels::softmax(&to::<f32>(&v[0]), c)),
            |v| from(&kernels::softmax(&to::<f64>(&v[0]), c)),
        );
        assert_close("softmax", case, errs);
    }
}

#[test]
fn space_to_depth_concatenates_neighbourhoods() {
    let (h, w, c) = (4, 6, 2);
    let x: Vec<f64> = (0..h * w * c).map(|i| i as f64).collect();
    let y = kernels::space_to_depth(&x, h, w, c);
    for oy in 0..h / 2 {
        for ox in 0..w / 2 {
            let at = |y: usize, x: usize| ((y * w + x) * c) as f64;
            let base = (oy * (w / 2) + ox) * 4 * c;
            let firsts: Vec<f64> = (0..4).map(|b| y[base + b * c]).collect();
            let (ty, tx) = (2 * oy, 2 * ox);
            assert_eq!(firsts, vec![at(ty, tx), at(ty + 1, tx), at(ty, tx + 1), at(ty + 1, tx + 1)]);
        }
    }
}

struct AttnCase {
    nq: usize,
    nk: usize,
    c: usize,
    heads: usize,
}

fn attention_store(case: &AttnCase, seed: u64) -> (MultiHeadAttention, ParamStore<f64>) {
    let mut store = ParamStore::new();
    let attn = MultiHeadAttention::new(&mut ParamBuilder::new(&mut store, seed), "attn", case.c, case.heads).unwrap();
    let mut r = rng(seed);
    for t in store.tensors_mut() {
        let n = t.len();
        t.data_mut().copy_from_slice(&values(&mut r, n, 0.3));
    }
    (attn, store)
}

fn attention_run<T: Scalar>(attn: &MultiHeadAttention, store: &ParamStore<T>, q: &[f64], kv: &[f64], case: &AttnCase) -> (Vec<f64>, Vec<Vec<f64>>) {
    let mut cx = Ctx::new(store, false);
    let qv = cx.tape.constant(Tensor::new(vec![case.nq, case.c], to::<T>(q)).unwrap());
    let kvv = cx.tape.constant(Tensor::new(vec![case.nk, case.c], to::<T>(kv)).unwrap());
    let out = attn.forward(&mut cx, qv, kvv).unwrap();
    let weights = out.weights.iter().map(|&w| from(cx.tape.value(w).data())).collect();
    (from(cx.tape.value(out.output).data()), weights)
}

fn attention_oracle(store: &ParamStore<f64>, q: &[f64], kv: &[f64], case: &AttnCase, round: bool) -> (Vec<f64>, Vec<Vec<f64>>) {
    let p = |name: &str| {
        let v = store.get(store.find(&format!("attn.{name}")).unwrap()).data().to_vec();
        if round {
            round_f32(&v)
        } else {
            v
        }
    };
    let (wq, bq, wk, wv, bv, wo, bo) = (p("q.weight"), p("q.bias"), p("k.weight"), p("v.weight"), p("v.bias"), p("proj.weight"), p("proj.bias"));
    mhsa(
        q,
        kv,
        case.nq,
        case.nk,
        case.c,
        case.heads,
        &Lin { w: &wq, b: Some(&bq) },
        &Lin { w: &wk, b: None },
        &Lin { w: &wv, b: Some(&bv) },
        &Lin { w: &wo, b: Some(&bo) },
    )
}

#[test]
fn mhsa_matches_per_query_loops() {
    let mut r = rng(6);
    for case_id in 0..CASES {
        let heads = [1, 2, 4][r.random_range(0..3)];
        let case = AttnCase {
            nq: r.random_range(1..=8),
            nk: r.random_range(1..=8),
            c: heads * r.random_range(1..=16 / heads),
            heads,
        };
        let (attn, store) = attention_store(&case, 100 + case_id);
        let q = values(&mut r, case.nq * case.c, 0.5);
        let kv = values(&mut r, case.nk * case.c, 0.5);

        let (y64, w64) = attention_run(&attn, &store, &q, &kv, &case);
        let (oy, ow) = attention_oracle(&store, &q, &kv, &case, false);
        assert!(max_abs_diff(&y64, &oy) <= F64_TOL, "mhsa f64 case {case_id}");
        for (a, b) in w64.iter().zip(&ow) {
            assert!(max_abs_diff(a, b) <= F64_TOL, "mhsa f64 weights case {case_id}");
        }

        let (q32, kv32) = (round_f32(&q), round_f32(&kv));
        let (y32, w32) = attention_run(&attn, &store.cast::<f32>(), &q32, &kv32, &case);
        let (oy, ow) = attention_oracle(&store, &q32, &kv32, &case, true);
        let e = max_abs_diff(&y32, &oy);
        assert!(e <= F32_TOL, "mhsa f32 case {case_id}: {e:e}");
        for (a, b) in w32.iter().zip(&ow) {
            assert!(max_abs_diff(a, b) <= F32_TOL, "mhsa f32 weights case {case_id}");
        }
    }
}

#[test]
fn mhsa_single_key_ignores_query_content() {
    let case = AttnCase { nq: 5, nk: 1, c: 8, heads: 2 };
    let (attn, store) = attention_store(&case, 7);
    let mut r = rng(8);
    let kv = values(&mut r, case.c, 1.0);
    let (ya, _) = attention_run(&attn, &store, &values(&mut r, 40, 1.0), &kv, &case);
    let (yb, _) = attention_run(&attn, &store, &values(&mut r, 40, 1.0), &kv, &case);
    assert_eq!(ya, yb);
    assert!(ya.chunks(case.c).all(|row| row == &ya[..case.c]));
}

#[test]
fn attention_rows_sum_to_one() {
    let case = AttnCase { nq: 7, nk: 6, c: 16, heads: 4 };
    let (attn, store) = attention_store(&case, 9);
    let mut r = rng(10);
    let (q, kv) = (values(&mut r, 7 * 16, 3.0), values(&mut r, 6 * 16, 3.0));
    let (_, weights) = attention_run(&attn, &store.cast::<f32>(), &q, &kv, &case);
    for w in weights {
        for row in w.chunks(case.nk) {
            assert!((row.iter().sum::<f64>() - 1.0).abs() <= 1e-6);
        }
    }
}

#[test]
fn kernels_are_deterministic() {
    let mut r = rng(11);
    let x = to::<f32>(&values(&mut r, 6 * 6 * 4, 1.0));
    let w = to::<f32>(&values(&mut r, 9 * 4 * 4, 1.0));
    let g = ConvGeom { h: 6, w: 6, cin: 4, kh: 3, kw: 3, cout: 4, stride: 1, padding: 1, groups: 1 };
    let a = kernels::conv2d(&x, &w, None, &g);
    let b = kernels::conv2d(&x, &w, None, &g);
    assert!(a.iter().zip(&b).all(|(p, q)| p.to_bits() == q.to_bits()));
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn softmax_rows_normalised_and_shift_invariant(
        row in prop::collection::vec(-30.0f64..30.0, 1..12),
        shift in -100.0f64..100.0,
    ) {
        let n = row.len();
        let y = kernels::softmax(&row, n);
        prop_assert!((y.iter().sum::<f64>() - 1.0).abs() <= 1e-12);
        let shifted: Vec<f64> = row.iter().map(|v| v + shift).collect();
        prop_assert!(max_abs_diff(&y, &kernels::softmax(&shifted, n)) <= 1e-12);
    }

    #[test]
    fn resize_keeps_constant_fields(
        v in -5.0f64..5.0, h in 1usize..9, w in 1usize..9, oh in 1usize..17, ow in 1usize..17,
    ) {
        let x = vec![v; h * w * 2];
        prop_assert!(kernels::bilinear_resize(&x, h, w, 2, oh, ow).iter().all(|&y| y == v));
        let x32 = vec![v as f32; h * w * 2];
        prop_assert!(kernels::bilinear_resize(&x32, h, w, 2, oh, ow).iter().all(|&y| y == v as f32));
    }

    #[test]
    fn space_to_depth_is_a_permutation(hh in 1usize..5, ww in 1usize..5, c in 1usize..4) {
        let (h, w) = (2 * hh, 2 * ww);
        let x: Vec<f64> = (0..h * w * c).map(|i| i as f64).collect();
        let mut y = kernels::space_to_depth(&x, h, w, c);
        y.sort_by(f64::total_cmp);
        prop_assert_eq!(y, x);
    }
}
