//! Finite-difference suites over primitives, block components and whole
//! models, shared by the test suite and the command line.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::block::{
    ConvEncoder, Downsample, DualTokenBlock, FeedForward, BiDimAttention, GlobalFuse, TokenMlp, WindowAttention,
};
use crate::config::{BlockConfig, DsKind, GlobalMode, LocalKind, MlpKind, ModelConfig};
use crate::error::Result;
use crate::gradcheck::{grad_check_many, GradCheckOptions, GradReport};
use crate::layers::{Conv, Ctx, Linear, MultiHeadAttention, Norm, ParamBuilder, ParamStore, LN_EPS};
use crate::model::{Head, MergePatch, Model, Stem};
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;

#[derive(Debug, Clone)]
pub struct CheckResult {
    pub name: String,
    pub report: GradReport,
}

/// Uniform(−scale, scale) entries from a seeded stream.
pub fn random_tensor(shape: &[usize], seed: u64, scale: f64) -> Tensor<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Tensor::from_fn(shape.to_vec(), |_| rng.random_range(-scale..scale))
}

/// `Σ y ⊙ w` for a fixed random `w`, so every output coordinate matters.
pub fn project(tape: &mut Tape<f64>, y: Var, seed: u64) -> Result<Var> {
    let w = tape.constant(random_tensor(tape.shape(y), seed ^ 0xA5A5, 1.0));
    let p = tape.mul(y, w)?;
    tape.sum(p)
}

type PrimFn = Box<dyn Fn(&mut Tape<f64>, &[Var]) -> Result<Var>>;

fn prim(name: &str, shapes: &[&[usize]], f: impl Fn(&mut Tape<f64>, &[Var]) -> Result<Var> + 'static) -> (String, Vec<Vec<usize>>, PrimFn) {
    (name.to_string(), shapes.iter().map(|s| s.to_vec()).collect(), Box::new(f))
}

/// Every differentiable tape operation on small random inputs.
pub fn primitive_checks(tol: f64) -> Result<Vec<CheckResult>> {
    let cases: Vec<(String, Vec<Vec<usize>>, PrimFn)> = vec![
        prim("add", &[&[3, 4], &[3, 4]], |t, v| t.add(v[0], v[1])),
        prim("sub", &[&[3, 4], &[3, 4]], |t, v| t.sub(v[0], v[1])),
        prim("mul", &[&[3, 4], &[3, 4]], |t, v| t.mul(v[0], v[1])),
        prim("scale", &[&[3, 4]], |t, v| t.scale(v[0], -1.7)),
        prim("add_scalar", &[&[3, 4]], |t, v| t.add_scalar(v[0], 0.3)),
        prim("gelu", &[&[4, 5]], |t, v| {
            let x = t.scale(v[0], 3.0)?;
            t.gelu(x)
        }),
        prim("sigmoid", &[&[4, 5]], |t, v| {
            let x = t.scale(v[0], 4.0)?;
            t.sigmoid(x)
        }),
        prim("matmul", &[&[3, 4], &[4, 5]], |t, v| t.matmul(v[0], v[1])),
        prim("transpose", &[&[3, 4]], |t, v| t.transpose(v[0])),
        prim("add_row_bias", &[&[3, 4], &[4]], |t, v| t.add_row_bias(v[0], v[1])),
        prim("scale_rows", &[&[3, 4], &[3, 1]], |t, v| t.scale_rows(v[0], v[1])),
        prim("scale_cols", &[&[3, 4], &[1, 4]], |t, v| t.scale_cols(v[0], v[1])),
        prim("reshape", &[&[2, 6]], |t, v| t.reshape(v[0], [3, 4])),
        prim("conv2d", &[&[5, 5, 4], &[3, 3, 4, 3], &[3]], |t, v| t.conv2d(v[0], v[1], Some(v[2]), 1, 1, 1)),
        prim("conv2d_stride2", &[&[6, 6, 2], &[3, 3, 2, 3], &[3]], |t, v| t.conv2d(v[0], v[1], Some(v[2]), 2, 1, 1)),
        prim("conv2d_depthwise", &[&[5, 5, 4], &[3, 3, 1, 4]], |t, v| t.conv2d(v[0], v[1], None, 1, 1, 4)),
        prim("conv2d_grouped_5x5", &[&[5, 4, 4], &[5, 5, 2, 4], &[4]], |t, v| t.conv2d(v[0], v[1], Some(v[2]), 1, 2, 2)),
        prim("avgpool", &[&[4, 6, 3]], |t, v| t.avgpool(v[0], 2)),
        prim("bilinear_up", &[&[3, 3, 2]], |t, v| t.bilinear_resize(v[0], 5, 4)),
        prim("bilinear_down", &[&[6, 6, 2]], |t, v| t.bilinear_resize(v[0], 4, 4)),
        prim("space_to_depth", &[&[4, 4, 2]], |t, v| t.space_to_depth(v[0])),
        prim("layernorm", &[&[3, 6], &[6], &[6]], |t, v| t.layernorm(v[0], v[1], v[2], LN_EPS)),
        prim("softmax", &[&[3, 5]], |t, v| {
            let x = t.scale(v[0], 3.0)?;
            t.softmax(x)
        }),
        prim("gather_rows", &[&[5, 3]], |t, v| t.gather_rows(v[0], vec![4, 0, 0, 2])),
        prim("concat_rows", &[&[2, 3], &[4, 3]], |t, v| t.concat_rows(&[v[0], v[1]])),
        prim("slice_cols", &[&[3, 6]], |t, v| t.slice_cols(v[0], 2, 3)),
        prim("concat_cols", &[&[3, 2], &[3, 4]], |t, v| t.concat_cols(&[v[0], v[1]])),
        prim("mean_rows", &[&[4, 3]], |t, v| t.mean_rows(v[0])),
        prim("mean", &[&[4, 3]], |t, v| t.mean(v[0])),
        prim("cross_entropy", &[&[6]], |t, v| {
            let x = t.scale(v[0], 2.0)?;
            t.cross_entropy(x, 2)
        }),
    ];
    let opts = GradCheckOptions::with_tol(tol);
    let mut out = Vec::new();
    for (i, (name, shapes, f)) in cases.into_iter().enumerate() {
        let inputs: Vec<Tensor<f64>> = shapes
            .iter()
            .enumerate()
            .map(|(j, s)| random_tensor(s, 100 * i as u64 + j as u64, 1.0))
            .collect();
        let seed = i as u64;
        let report = grad_check_many(
            |t, v| {
                let y = f(t, v)?;
                if t.value(y).is_scalar() {
                    Ok(y)
                } else {
                    project(t, y, seed)
                }
            },
            &inputs,
            &opts,
        )?;
        out.push(CheckResult { name, report });
    }
    Ok(out)
}

/// Gradcheck of `body` with respect to every parameter in `store` and every
/// tensor in `inputs`.
pub fn module_check<F>(store: &ParamStore<f64>, inputs: &[Tensor<f64>], opts: &GradCheckOptions, body: F) -> Result<GradReport>
where
    F: Fn(&mut Ctx<f64>, &[Var]) -> Result<Var>,
{
    let np = store.len();
    let mut all: Vec<Tensor<f64>> = store.iter().map(|(_, t)| t.clone()).collect();
    all.extend(inputs.iter().cloned());
    grad_check_many(
        |tape, vars| {
            let mut cx = Ctx::bind(std::mem::take(tape), vars[..np].to_vec());
            let r = body(&mut cx, &vars[np..]);
            *tape = cx.tape;
            r
        },
        &all,
        opts,
    )
}

/// Same store with weights redrawn at a scale where nonlinearities bend.
fn rescaled(mut store: ParamStore<f64>, seed: u64) -> ParamStore<f64> {
    for (i, t) in store.tensors_mut().enumerate() {
        let shape = t.shape().to_vec();
        *t = random_tensor(&shape, seed.wrapping_mul(31).wrapping_add(i as u64), 0.5);
    }
    store
}

fn toy_block_config() -> BlockConfig {
    crate::config::toy().block_config(0)
}

type ModuleFn = Box<dyn Fn(&mut ParamBuilder<f64>) -> Result<Box<dyn Fn(&mut Ctx<f64>, &[Var]) -> Result<Var>>>>;

fn module(
    name: &str,
    inputs: &[&[usize]],
    build: impl Fn(&mut ParamBuilder<f64>) -> Result<Box<dyn Fn(&mut Ctx<f64>, &[Var]) -> Result<Var>>> + 'static,
) -> (String, Vec<Vec<usize>>, ModuleFn) {
    (name.to_string(), inputs.iter().map(|s| s.to_vec()).collect(), Box::new(build))
}

fn block_case(name: &str, cfg: BlockConfig, x: [usize; 3]) -> (String, Vec<Vec<usize>>, ModuleFn) {
    let (r, c) = cfg.token_layout();
    let g = [r, c, cfg.channels];
    module(name, &[&x, &g], move |pb| {
        let b = DualTokenBlock::new(pb, "block", &cfg)?;
        Ok(Box::new(move |cx, v| {
            let out = b.forward(cx, v[0], v[1])?;
            let a = project(&mut cx.tape, out.output, 1)?;
            let g = project(&mut cx.tape, out.g_out, 2)?;
            cx.tape.add(a, g)
        }))
    })
}

/// Every block component plus stem, merge and head, with respect to both
/// parameters and inputs.
pub fn block_checks(tol: f64) -> Result<Vec<CheckResult>> {
    let bc = toy_block_config();
    let c = bc.channels;
    let mut cases = vec![
        module("linear", &[&[5, 6]], |pb| {
            let l = Linear::new(pb, "fc", 6, 4, true)?;
            Ok(Box::new(move |cx, v| l.forward(cx, v[0])))
        }),
        module("layernorm_affine", &[&[5, 6]], |pb| {
            let n = Norm::new(pb, "norm", 6)?;
            Ok(Box::new(move |cx, v| n.forward(cx, v[0])))
        }),
        module("conv", &[&[5, 5, 3]], |pb| {
            let k = Conv::new(pb, "conv", 3, 4, 3, 1, 1)?;
            Ok(Box::new(move |cx, v| k.forward(cx, v[0])))
        }),
        module("mhsa_cross", &[&[5, 8], &[7, 8]], |pb| {
            let a = MultiHeadAttention::new(pb, "attn", 8, 2)?;
            Ok(Box::new(move |cx, v| Ok(a.forward(cx, v[0], v[1])?.output)))
        }),
        module("conv_encoder", &[&[4, 4, c]], move |pb| {
            let e = ConvEncoder::new(pb, "enc", c, 3)?;
            Ok(Box::new(move |cx, v| e.forward(cx, v[0])))
        }),
        module("window_msa", &[&[4, 4, c]], move |pb| {
            let w = WindowAttention::new(pb, "win", c, 2, 2)?;
            Ok(Box::new(move |cx, v| w.forward(cx, v[0])))
        }),
        module("downsample_stepwise", &[&[8, 8, c]], move |pb| {
            let d = Downsample::new(pb, "ds", c, 1, 3, DsKind::StepWise)?;
            Ok(Box::new(move |cx, v| d.forward(cx, v[0])))
        }),
        module("downsample_onestep", &[&[8, 8, c]], move |pb| {
            let d = Downsample::new(pb, "ds", c, 1, 3, DsKind::OneStep)?;
            Ok(Box::new(move |cx, v| d.forward(cx, v[0])))
        }),
        module("token_mlp_normal", &[&[4, c]], move |pb| {
            let m = TokenMlp::new(pb, "mlp", c, 4, MlpKind::Normal, 1)?;
            Ok(Box::new(move |cx, v| m.forward(cx, v[0])))
        }),
        module("token_mlp_mix", &[&[4, c]], move |pb| {
            let m = TokenMlp::new(pb, "mlp", c, 4, MlpKind::Mix, 1)?;
            Ok(Box::new(move |cx, v| m.forward(cx, v[0])))
        }),
        module("fuse_weighted_sum", &[&[4, c], &[4, c]], move |pb| {
            let f = GlobalFuse::WeightedSum {
                norm: Norm::new(pb, "norm", c)?,
                mlp: TokenMlp::new(pb, "mlp", c, 4, MlpKind::Normal, 1)?,
                alpha: 0.1,
            };
            Ok(Box::new(move |cx, v| f.forward(cx, v[0], v[1])))
        }),
        module("fuse_attention", &[&[4, c], &[6, c]], move |pb| {
            let f = GlobalFuse::Attention {
                norm: Norm::new(pb, "norm", c)?,
                attn: MultiHeadAttention::new(pb, "attn", c, 2)?,
            };
            Ok(Box::new(move |cx, v| f.forward(cx, v[0], v[1])))
        }),
        module("ffn", &[&[6, c]], move |pb| {
            let f = FeedForward::new(pb, "ffn", c, 4)?;
            Ok(Box::new(move |cx, v| f.forward(cx, v[0])))
        }),
        module("bidim_attention", &[&[6, c]], move |pb| {
            let b = BiDimAttention::new(pb, "bidim", c)?;
            Ok(Box::new(move |cx, v| b.forward(cx, v[0])))
        }),
        module("stem", &[&[16, 16, 3]], |pb| {
            let s = Stem::new(pb, 4, 6)?;
            Ok(Box::new(move |cx, v| s.forward(cx, v[0])))
        }),
        module("merge_patch", &[&[4, 4, c]], move |pb| {
            let m = MergePatch::new(pb, "merge", c, 2 * c)?;
            Ok(Box::new(move |cx, v| m.forward(cx, v[0])))
        }),
        module("head", &[&[6, c]], move |pb| {
            let h = Head::new(pb, c, 12, 5)?;
            Ok(Box::new(move |cx, v| h.forward(cx, v[0])))
        }),
        block_case("dual_token_block", bc.clone(), [4, 4, c]),
        block_case("dual_token_block_interpolated", bc.clone(), [6, 6, c]),
    ];
    let mut window = bc.clone();
    window.local_kind = LocalKind::WindowMsa;
    window.window = 2;
    cases.push(block_case("dual_token_block_window_local", window, [4, 4, c]));
    let mut mix = bc.clone();
    mix.mlp_kind = MlpKind::Mix;
    cases.push(block_case("dual_token_block_mix", mix, [4, 4, c]));
    let mut normal = bc.clone();
    normal.global_mode = GlobalMode::NormalMsa;
    cases.push(block_case("dual_token_block_normal_tokens", normal, [4, 4, c]));
    let mut pa_msa = bc.clone();
    pa_msa.global_mode = GlobalMode::PositionAwareMsa;
    cases.push(block_case("dual_token_block_position_aware_msa", pa_msa, [4, 4, c]));
    let mut skip = bc.clone();
    skip.skip_local_and_ds = true;
    cases.push(block_case("dual_token_block_skip_local", skip, [2, 2, c]));

    let opts = GradCheckOptions::with_tol(tol);
    let mut out = Vec::new();
    for (i, (name, shapes, build)) in cases.into_iter().enumerate() {
        let mut store = ParamStore::new();
        let f = build(&mut ParamBuilder::new(&mut store, i as u64))?;
        let store = rescaled(store, i as u64);
        let inputs: Vec<Tensor<f64>> = shapes
            .iter()
            .enumerate()
            .map(|(j, s)| random_tensor(s, 1000 + 10 * i as u64 + j as u64, 1.0))
            .collect();
        let seed = i as u64;
        let report = module_check(&store, &inputs, &opts, |cx, v| {
            let y = f(cx, v)?;
            if cx.tape.value(y).is_scalar() {
                Ok(y)
            } else {
                project(&mut cx.tape, y, seed)
            }
        })?;
        out.push(CheckResult { name, report });
    }
    Ok(out)
}

/// Cross-entropy of the whole model on one random image, checked on a seeded
/// sample of coordinates in every parameter tensor and in the image.
pub fn model_check(cfg: &ModelConfig, seed: u64, coords_per_tensor: usize, tol: f64) -> Result<GradReport> {
    let model: Model<f64> = Model::build(cfg, seed)?;
    let store = rescaled(model.params.clone(), seed);
    let s = cfg.input_resolution;
    let image = random_tensor(&[s, s, 3], seed ^ 0x5EED, 1.0);
    let label = seed as usize % cfg.num_classes;
    let opts = GradCheckOptions {
        tol,
        ..GradCheckOptions::sampled(coords_per_tensor, seed)
    };
    module_check(&store, &[image], &opts, |cx, v| {
        let out = model.forward_on(cx, v[0])?;
        cx.tape.cross_entropy(out.logits, label)
    })
}

/// The ablation switches, each applied to a toy configuration that can host it.
pub fn ablation_configs() -> Vec<(String, ModelConfig)> {
    use crate::config::{toy, toy_224};
    let mut out = vec![("baseline".to_string(), toy())];
    let mut c = toy_224();
    c.local_kind = LocalKind::WindowMsa;
    out.push(("window_local_7".into(), c));
    out.push(("conv_local_224".into(), toy_224()));
    let mut c = toy_224();
    c.ds_kind = DsKind::OneStep;
    out.push(("onestep_downsample".into(), c));
    let mut c = toy();
    c.global_mode = GlobalMode::NormalMsa;
    c.normal_tokens = 8;
    out.push(("normal_8_tokens".into(), c));
    let mut c = toy();
    c.global_mode = GlobalMode::PositionAwareMsa;
    out.push(("position_aware_msa".into(), c));
    let mut c = toy();
    c.mlp_kind = MlpKind::Mix;
    out.push(("mix_mlp".into(), c));
    for g in 3..=8 {
        let mut c = toy();
        c.token_grid = g;
        out.push((format!("grid_{g}x{g}"), c));
    }
    out
}
