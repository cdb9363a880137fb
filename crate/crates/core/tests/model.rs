//! Whole-network behaviour: stem, merging, token projection, determinism,
//! checkpoints and gradient coverage.

mod common;

use common::{layernorm, matmul, max_abs_diff};
use dualtoken::checks::random_tensor;
use dualtoken::config::toy;
use dualtoken::kernels::MERGE_ORDER;
use dualtoken::{Ctx, Error, GlobalTokens, Model, ModelConfig, Tensor};

fn param(m: &Model<f64>, name: &str) -> Vec<f64> {
    m.params.get(m.params.find(name).unwrap_or_else(|| panic!("{name}"))).data().to_vec()
}

#[test]
fn stem_reaches_stride_eight() {
    let s: Model<f32> = Model::build(&ModelConfig::preset("dualtoken_s").unwrap(), 0).unwrap();
    for side in [224, 256] {
        let out = s.stem_forward(&Tensor::zeros(vec![side, side, 3])).unwrap();
        assert_eq!(out.shape(), [side / 8, side / 8, 64]);
    }
    assert!(s.stem_forward(&Tensor::zeros(vec![100, 100, 3])).is_err());
}

#[test]
fn constant_image_gives_constant_stem_interior() {
    let m: Model<f64> = Model::build(&ModelConfig::preset("dualtoken_t").unwrap(), 1).unwrap();
    let out = m.stem_forward(&Tensor::full(vec![224, 224, 3], 0.3)).unwrap();
    let c = out.shape()[2];
    // Zero padding only reaches the first row and column; the far edges
    // line up exactly with the stride.
    let reference: Vec<f64> = (0..c).map(|k| out.at(&[1, 1, k])).collect();
    for y in 1..28 {
        for x in 1..28 {
            let px: Vec<f64> = (0..c).map(|k| out.at(&[y, x, k])).collect();
            assert_eq!(px, reference, "pixel ({y}, {x})");
        }
    }
    let corner: Vec<f64> = (0..c).map(|k| out.at(&[0, 0, k])).collect();
    assert_ne!(corner, reference);
}

#[test]
fn merge_shapes_follow_stage_widths() {
    let s: Model<f32> = Model::build(&ModelConfig::preset("dualtoken_s").unwrap(), 0).unwrap();
    let x: Tensor<f32> = random_tensor(&[28, 28, 64], 0, 1.0).cast();
    let y = s.merge_patch(0, &x).unwrap();
    assert_eq!(y.shape(), [14, 14, 128]);
    assert_eq!(s.merge_patch(1, &y).unwrap().shape(), [7, 7, 256]);
    assert!(s.merge_patch(0, &Tensor::zeros(vec![7, 7, 64])).is_err());
}

#[test]
fn merge_matches_concatenation_oracle() {
    let mut m: Model<f64> = Model::build(&toy(), 2).unwrap();
    for t in m.params.tensors_mut() {
        let n = t.len();
        *t = random_tensor(&[n], n as u64, 0.5).reshape(t.shape().to_vec()).unwrap();
    }
    let (h, w, c, co) = (6, 4, 8, 16);
    let x = random_tensor(&[h, w, c], 3, 1.0);
    let got = m.merge_patch(0, &x).unwrap();
    let mut concat = Vec::new();
    for oy in 0..h / 2 {
        for ox in 0..w / 2 {
            for (dy, dx) in MERGE_ORDER {
                for k in 0..c {
                    concat.push(x.at(&[2 * oy + dy, 2 * ox + dx, k]));
                }
            }
        }
    }
    let normed = layernorm(&concat, &param(&m, "merges.0.norm.weight"), &param(&m, "merges.0.norm.bias"), 4 * c, 1e-6);
    let mut expect = matmul(&normed, &param(&m, "merges.0.proj.weight"), h * w / 4, 4 * c, co);
    let bias = param(&m, "merges.0.proj.bias");
    for row in expect.chunks_mut(co) {
        row.iter_mut().zip(&bias).for_each(|(v, b)| *v += b);
    }
    assert_eq!(got.shape(), [h / 2, w / 2, co]);
    assert!(max_abs_diff(got.data(), &expect) < 1e-12);
}

#[test]
fn token_projection_matches_matmul() {
    let m: Model<f64> = Model::build(&toy(), 4).unwrap();
    let g = GlobalTokens::new(random_tensor(&[2, 2, 8], 5, 1.0)).unwrap();
    let got = m.project_global_tokens(0, &g).unwrap();
    assert_eq!(got.grid.shape(), [2, 2, 16]);
    let expect = matmul(g.grid.data(), &param(&m, "token_proj.0.weight"), 4, 8, 16);
    assert!(max_abs_diff(got.grid.data(), &expect) < 1e-12);
}

#[test]
fn identity_projection_keeps_tokens() {
    let mut cfg = toy();
    for s in &mut cfg.stages {
        s.channels = 8;
    }
    let mut m: Model<f64> = Model::build(&cfg, 0).unwrap();
    let id = m.token_proj[0].weight;
    *m.params.get_mut(id) = Tensor::from_fn(vec![8, 8], |i| if i / 8 == i % 8 { 1.0 } else { 0.0 });
    let g = GlobalTokens::new(random_tensor(&[2, 2, 8], 6, 1.0)).unwrap();
    assert_eq!(m.project_global_tokens(0, &g).unwrap(), g);
}

#[test]
fn imagenet_sized_logits() {
    let s: Model<f32> = Model::build(&ModelConfig::preset("dualtoken_s").unwrap(), 0).unwrap();
    let logits = s.logits(&random_tensor(&[224, 224, 3], 0, 1.0).cast()).unwrap();
    assert_eq!(logits.shape(), [1000]);
    assert!(logits.all_finite());
}

#[test]
fn toy_forward_is_finite_and_deterministic() {
    let img: Tensor<f32> = random_tensor(&[32, 32, 3], 7, 1.0).cast();
    let a = Model::<f32>::build(&toy(), 7).unwrap().logits(&img).unwrap();
    let b = Model::<f32>::build(&toy(), 7).unwrap().logits(&img).unwrap();
    assert_eq!(a.shape(), [8]);
    assert!(a.all_finite());
    assert!(a.data().iter().zip(b.data()).all(|(x, y)| x.to_bits() == y.to_bits()));
}

#[test]
fn samples_do_not_share_state() {
    let m: Model<f32> = Model::build(&toy(), 0).unwrap();
    let (p, q): (Tensor<f32>, Tensor<f32>) = (random_tensor(&[32, 32, 3], 1, 1.0).cast(), random_tensor(&[32, 32, 3], 2, 1.0).cast());
    let forward_order = [m.logits(&p).unwrap(), m.logits(&q).unwrap()];
    let reverse_order = [m.logits(&q).unwrap(), m.logits(&p).unwrap()];
    assert_eq!(forward_order[0], reverse_order[1]);
    assert_eq!(forward_order[1], reverse_order[0]);
}

#[test]
fn checkpoint_round_trip_is_bit_exact() {
    let cfg = ModelConfig::preset("dualtoken_t").unwrap();
    let m: Model<f32> = Model::build(&cfg, 3).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("t.dtvt");
    m.save_checkpoint(&path).unwrap();
    let back: Model<f32> = Model::load_checkpoint(&cfg, &path).unwrap();
    for ((na, a), (nb, b)) in m.params.iter().zip(back.params.iter()) {
        assert_eq!(na, nb);
        assert_eq!(a.shape(), b.shape());
        assert!(a.data().iter().zip(b.data()).all(|(x, y)| x.to_bits() == y.to_bits()), "{na}");
    }
}

#[test]
fn corrupted_and_truncated_files_rejected() {
    let m: Model<f32> = Model::build(&toy(), 0).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("m.dtvt");
    m.save_checkpoint(&path).unwrap();
    let good = std::fs::read(&path).unwrap();

    let mut bad = good.clone();
    bad[0] = b'X';
    std::fs::write(&path, &bad).unwrap();
    match Model::<f32>::load_checkpoint(&toy(), &path) {
        Err(Error::Format(msg)) => assert!(msg.contains("magic"), "{msg}"),
        other => panic!("expected a format error, got {other:?}"),
    }

    let mut bad = good.clone();
    bad[4] = 2;
    std::fs::write(&path, &bad).unwrap();
    assert!(matches!(Model::<f32>::load_checkpoint(&toy(), &path), Err(Error::Format(_))));

    std::fs::write(&path, &good[..good.len() - 3]).unwrap();
    assert!(matches!(Model::<f32>::load_checkpoint(&toy(), &path), Err(Error::Format(_))));
}

#[test]
fn cross_config_load_names_first_mismatch() {
    let s_cfg = ModelConfig::preset("dualtoken_s").unwrap();
    let t_cfg = ModelConfig::preset("dualtoken_t").unwrap();
    let s: Model<f32> = Model::build(&s_cfg, 0).unwrap();
    let t: Model<f32> = Model::build(&t_cfg, 0).unwrap();
    let first = t
        .params
        .iter()
        .find(|(n, tt)| s.params.find(n).map(|id| s.params.get(id).shape() != tt.shape()).unwrap_or(true))
        .map(|(n, _)| n.to_string())
        .unwrap();
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("s.dtvt");
    s.save_checkpoint(&path).unwrap();
    match Model::<f32>::load_checkpoint(&t_cfg, &path) {
        Err(Error::CheckpointShape { name, .. }) => assert_eq!(name, first),
        other => panic!("expected a shape error, got {other:?}"),
    }
}

#[test]
fn every_parameter_receives_gradient() {
    // At 64² every aggregation map holds at least four tokens, so no
    // attention collapses onto a single key.
    let mut cfg = toy();
    cfg.input_resolution = 64;
    let m: Model<f64> = Model::build(&cfg, 0).unwrap();
    let mut reached = vec![false; m.params.len()];
    for seed in 0..3u64 {
        let mut cx = Ctx::new(&m.params, true);
        let x = cx.tape.constant(random_tensor(&[64, 64, 3], seed, 1.0));
        let out = m.forward_on(&mut cx, x).unwrap();
        let loss = cx.tape.cross_entropy(out.logits, seed as usize % 8).unwrap();
        cx.tape.backward(loss).unwrap();
        for (r, g) in reached.iter_mut().zip(cx.param_grads()) {
            *r |= g.is_some_and(|g| g.data().iter().any(|&v| v != 0.0));
        }
    }
    let dead: Vec<&str> = m.params.iter().zip(&reached).filter(|(_, r)| !**r).map(|((n, _), _)| n).collect();
    assert!(dead.is_empty(), "no gradient: {dead:?}");
}

#[test]
fn parameter_enumeration_is_complete() {
    let m: Model<f32> = Model::build(&ModelConfig::preset("dualtoken_t_mix").unwrap(), 0).unwrap();
    let brute: usize = m.params.iter().map(|(_, t)| t.shape().iter().product::<usize>()).sum();
    assert_eq!(m.num_params(), brute);
    let m2: Model<f32> = Model::build(&ModelConfig::preset("dualtoken_t_mix").unwrap(), 99).unwrap();
    assert_eq!(m2.num_params(), brute);
}
