//! Cost accounting and attention-map export.

mod common;

use dualtoken::analysis::{
    count_flops, count_params, export_heatmap, extract_attention_map, read_csv, reference_costs, top_k, within, BlockSel,
    HeatmapFormat, QuerySel, FLOP_TOLERANCE, PARAM_TOLERANCE,
};
use dualtoken::checks::{ablation_configs, random_tensor};
use dualtoken::config::toy_224;
use dualtoken::layers::{Linear, MultiHeadAttention, ParamBuilder};
use dualtoken::{Ctx, Model, ModelConfig, ParamStore, Tape, Tensor, PRESETS};

#[test]
fn single_linear_counts() {
    let mut store = ParamStore::<f32>::new();
    let l = Linear::new(&mut ParamBuilder::new(&mut store, 0), "fc", 4, 3, true).unwrap();
    assert_eq!(l.param_count(), 15);
    assert_eq!(store.numel(), 15);
    let mut t = Tape::new();
    let x = t.constant(Tensor::<f32>::zeros(vec![49, 64]));
    let w = t.constant(Tensor::zeros(vec![64, 64]));
    t.matmul(x, w).unwrap();
    assert_eq!(t.macs(), 200_704);
}

#[test]
fn every_tensor_lands_in_one_entry() {
    for preset in PRESETS {
        let m: Model<f32> = Model::build(&ModelConfig::preset(preset).unwrap(), 0).unwrap();
        let r = count_params(&m);
        assert_eq!(r.total_params(), m.num_params() as u64, "{preset}");
        let mut paths: Vec<&str> = r.entries.iter().map(|e| e.path.as_str()).collect();
        let n = paths.len();
        paths.sort();
        paths.dedup();
        assert_eq!(paths.len(), n, "{preset}: duplicate entries");
        for (name, t) in m.params.iter() {
            let owners = r.entries.iter().filter(|e| name.rsplit_once('.').map_or(name, |p| p.0) == e.path).count();
            assert_eq!(owners, 1, "{name}");
            assert!(!t.is_empty());
        }
    }
}

#[test]
fn analytic_macs_equal_instrumented_counter() {
    let mut cases: Vec<(String, ModelConfig)> = PRESETS
        .iter()
        .map(|p| (p.to_string(), ModelConfig::preset(p).unwrap()))
        .collect();
    cases.extend(ablation_configs());
    for (name, cfg) in cases {
        let s = cfg.input_resolution;
        let m: Model<f32> = Model::build(&cfg, 0).unwrap();
        let (_, counted) = m.logits_with_macs(&random_tensor(&[s, s, 3], 0, 1.0).cast()).unwrap();
        assert_eq!(count_flops(&cfg, s).unwrap().total_macs(), counted, "{name}");
    }
    let cfg = ModelConfig::preset("dualtoken_t").unwrap();
    let m: Model<f32> = Model::build(&cfg, 0).unwrap();
    let (_, counted) = m.logits_with_macs(&Tensor::zeros(vec![256, 256, 3])).unwrap();
    assert_eq!(count_flops(&cfg, 256).unwrap().total_macs(), counted, "off-grid");
}

#[test]
fn published_sizes_within_tolerance() {
    for preset in ["dualtoken_t_mix", "dualtoken_s_mix", "dualtoken_s"] {
        let (p, f) = reference_costs(preset).unwrap();
        let cfg = ModelConfig::preset(preset).unwrap();
        let m: Model<f32> = Model::build(&cfg, 0).unwrap();
        let params = count_params(&m).total_params() as f64;
        let macs = count_flops(&cfg, 224).unwrap().total_macs() as f64;
        assert!(within(params, p, PARAM_TOLERANCE), "{preset} params {params}");
        assert!(within(macs, f, FLOP_TOLERANCE), "{preset} macs {macs}");
    }
    assert!(reference_costs("toy").is_none());
}

#[test]
fn doubling_resolution_scales_image_token_layers_by_four() {
    let cfg = ModelConfig::preset("dualtoken_t").unwrap();
    let lo = count_flops(&cfg, 224).unwrap();
    let hi = count_flops(&cfg, 448).unwrap();
    let macs = |r: &dualtoken::analysis::CostReport, p: &str| r.entries.iter().find(|e| e.path == p).map_or(0, |e| e.macs);
    let mut checked = 0;
    for e in &lo.entries {
        let (a, b) = (e.macs, macs(&hi, &e.path));
        let p = &e.path;
        let image_sized = p.starts_with("stem.")
            || p.starts_with("merges.")
            || [".local.", ".ffn.", ".broadcast.q", ".broadcast.proj", ".broadcast.attention", ".bidim.spatial", ".ds."]
                .iter()
                .any(|k| p.contains(k));
        let token_sized = [".fuse.", ".broadcast.k", ".broadcast.v", ".bidim.channel", "token_proj."]
            .iter()
            .any(|k| p.contains(k))
            || p.starts_with("head.");
        if a == 0 {
            continue;
        }
        if image_sized {
            assert_eq!(b, 4 * a, "{p}");
            checked += 1;
        } else if token_sized {
            assert_eq!(b, a, "{p}");
            checked += 1;
        } else {
            // Aggregation runs on a map that grows with the input.
            assert!(b > a, "{p}");
        }
    }
    assert!(checked > 50);
    let ratio = hi.total_macs() as f64 / lo.total_macs() as f64;
    assert!(ratio > 3.0 && ratio < 4.5, "{ratio}");
}

fn small_model() -> (Model<f32>, Tensor<f32>) {
    let m: Model<f32> = Model::build(&toy_224(), 5).unwrap();
    (m, random_tensor(&[224, 224, 3], 5, 1.0).cast())
}

#[test]
fn mean_map_is_average_of_query_maps() {
    let (m, img) = small_model();
    let all = extract_attention_map(&m, &img, BlockSel::Last, QuerySel::All).unwrap();
    let mean = extract_attention_map(&m, &img, BlockSel::Last, QuerySel::Mean).unwrap();
    assert_eq!(all.maps.len(), 49);
    assert_eq!(all.block, m.stages.iter().map(Vec::len).sum::<usize>() - 1);
    let mut avg = vec![0.0; 49];
    for (_, map) in &all.maps {
        assert_eq!(map.shape(), [7, 7]);
        assert!((map.sum() - 1.0).abs() <= 1e-6);
        assert!(map.data().iter().all(|&v| v >= 0.0));
        avg.iter_mut().zip(map.data()).for_each(|(a, v)| *a += v / 49.0);
    }
    let (label, map) = &mean.maps[0];
    assert_eq!(label, "mean");
    assert!(common::max_abs_diff(map.data(), &avg) < 1e-12);

    let one = extract_attention_map(&m, &img, BlockSel::Index(0), QuerySel::Index(100)).unwrap();
    assert_eq!(one.maps[0].0, "100");
    assert!(extract_attention_map(&m, &img, BlockSel::Last, QuerySel::Index(49)).is_err());
    assert!(extract_attention_map(&m, &img, BlockSel::Index(99), QuerySel::Mean).is_err());
}

#[test]
fn top_eight_matches_sort() {
    let (m, img) = small_model();
    let all = extract_attention_map(&m, &img, BlockSel::Index(1), QuerySel::All).unwrap();
    for (_, map) in all.maps.iter().take(10) {
        let mut cells: Vec<(f64, usize)> = map.data().iter().enumerate().map(|(i, &v)| (v, i)).collect();
        cells.sort_by(|a, b| b.0.partial_cmp(&a.0).unwrap().then(a.1.cmp(&b.1)));
        let expect: Vec<(usize, usize, f64)> = cells[..8].iter().map(|&(v, i)| (i / 7, i % 7, v)).collect();
        assert_eq!(top_k(map, 8), expect);
    }
}

#[test]
fn permuting_global_tokens_permutes_map_cells() {
    let mut store = ParamStore::<f64>::new();
    let attn = MultiHeadAttention::new(&mut ParamBuilder::new(&mut store, 0), "b", 16, 4).unwrap();
    for (i, t) in store.tensors_mut().enumerate() {
        *t = random_tensor(t.shape(), 70 + i as u64, 0.5);
    }
    let x = random_tensor(&[12, 16], 1, 1.0);
    let g = random_tensor(&[9, 16], 2, 1.0);
    let perm = [4, 0, 8, 2, 6, 1, 3, 7, 5];
    let gp = Tensor::from_fn(vec![9, 16], |i| g.data()[perm[i / 16] * 16 + i % 16]);
    let weights = |g: &Tensor<f64>| {
        let mut cx = Ctx::new(&store, false);
        let (xv, gv) = (cx.tape.constant(x.clone()), cx.tape.constant(g.clone()));
        let out = attn.forward(&mut cx, xv, gv).unwrap();
        dualtoken::layers::mean_attention(&cx.tape, &out.weights)
    };
    let (w, wp) = (weights(&g), weights(&gp));
    for q in 0..12 {
        for (j, &pj) in perm.iter().enumerate() {
            assert!((wp.at(&[q, j]) - w.at(&[q, pj])).abs() < 1e-12);
        }
    }
}

#[test]
fn exported_files_round_trip() {
    let (m, img) = small_model();
    let exp = extract_attention_map(&m, &img, BlockSel::Last, QuerySel::Mean).unwrap();
    let map = &exp.maps[0].1;
    let dir = tempfile::tempdir().unwrap();
    let csv = dir.path().join("m.csv");
    export_heatmap(map, &csv, HeatmapFormat::Csv).unwrap();
    assert!(read_csv(&csv).unwrap().max_abs_diff(map) <= 1e-9);
    let pgm = dir.path().join("m.pgm");
    export_heatmap(map, &pgm, HeatmapFormat::Pgm).unwrap();
    let text = std::fs::read_to_string(&pgm).unwrap();
    let mut lines = text.lines();
    assert_eq!(lines.next(), Some("P2"));
    assert_eq!(lines.next(), Some("7 7"));
    assert_eq!(lines.next(), Some("255"));
    let px: Vec<u32> = lines.flat_map(|l| l.split(' ').map(|v| v.parse::<u32>().unwrap())).collect();
    assert_eq!(px.len(), 49);
    assert_eq!(px.iter().max(), Some(&255));
    assert_eq!(px.iter().min(), Some(&0));
    assert!(export_heatmap(map, &dir.path().join("missing/x.csv"), HeatmapFormat::Csv).is_err());
}
