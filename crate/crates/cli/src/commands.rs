use std::path::Path;

use anyhow::{bail, Context, Result};
use dualtoken::analysis::{self, BlockSel, HeatmapFormat, QuerySel};
use dualtoken::checks::{self, CheckResult};
use dualtoken::data::{self, SyntheticDataset};
use dualtoken::io;
use dualtoken::train::{self, Optimizer, TrainConfig, TrainState};
use dualtoken::{DsKind, Error, GlobalMode, LocalKind, MlpKind, Model, ModelConfig, Tensor};

use crate::{
    AttnmapArgs, Command, CountArgs, DsArg, FormatArg, ForwardArgs, GenDataArgs, GradcheckArgs, LocalArg, MlpArg,
    ModelArgs, OptimizerArg, ScopeArg, TokensArg, TrainArgs,
};

pub fn run(cmd: Command) -> Result<bool> {
    match cmd {
        Command::Count(a) => count(a),
        Command::Forward(a) => forward(a),
        Command::Gradcheck(a) => gradcheck(a),
        Command::Train(a) => train(a),
        Command::Attnmap(a) => attnmap(a),
        Command::GenData(a) => gen_data(a),
        Command::DumpConfig(a) => {
            let cfg = resolve(&a, "toy")?;
            println!("{}", cfg.to_json()?);
            Ok(true)
        }
    }
}

/// One check line on stdout; returns whether it passed.
fn check(name: &str, pass: bool, expected: impl std::fmt::Display, got: impl std::fmt::Display, tol: impl std::fmt::Display) -> bool {
    let tag = if pass { "PASS" } else { "FAIL" };
    println!("{tag} {name} expected={expected} got={got} tol={tol}");
    pass
}

/// Preset or file, then flag overrides. Overrides are recorded in the name so
/// an altered preset is never compared with published numbers.
pub fn resolve(args: &ModelArgs, default_preset: &str) -> Result<ModelConfig> {
    let mut cfg = match (&args.config, &args.preset) {
        (Some(path), _) => ModelConfig::load(path).with_context(|| format!("reading {}", path.display()))?,
        (None, Some(p)) => ModelConfig::preset(p)?,
        (None, None) => ModelConfig::preset(default_preset)?,
    };
    let mut tags = Vec::new();
    if let Some(l) = args.local {
        cfg.local_kind = match l {
            LocalArg::Conv => LocalKind::ConvEncoder,
            LocalArg::Window => LocalKind::WindowMsa,
        };
        tags.push(format!("local={l:?}"));
    }
    if let Some(m) = args.mlp {
        cfg.mlp_kind = match m {
            MlpArg::Normal => MlpKind::Normal,
            MlpArg::Mix => MlpKind::Mix,
        };
        tags.push(format!("mlp={m:?}"));
    }
    if let Some(d) = args.ds {
        cfg.ds_kind = match d {
            DsArg::Stepwise => DsKind::StepWise,
            DsArg::Onestep => DsKind::OneStep,
        };
        tags.push(format!("ds={d:?}"));
    }
    if let Some(t) = args.tokens {
        cfg.global_mode = match t {
            TokensArg::Normal => GlobalMode::NormalMsa,
            TokensArg::Posaware => GlobalMode::PositionAwareSum,
        };
        tags.push(format!("tokens={t:?}"));
    }
    if let Some(g) = args.grid {
        cfg.token_grid = g as usize;
        tags.push(format!("grid={g}"));
    }
    if !tags.is_empty() {
        cfg.name = format!("{}+{}", cfg.name, tags.join(",").to_lowercase());
    }
    if let Some(r) = args.resolution {
        cfg.input_resolution = r;
    }
    cfg.validate()?;
    cfg.validate_resolution(cfg.input_resolution)?;
    eprintln!("config: {}", serde_json::to_string(&cfg)?);
    eprintln!("seed: {}", args.seed);
    Ok(cfg)
}

fn synthetic_image(cfg: &ModelConfig, seed: u64) -> Result<Tensor<f32>> {
    let classes = cfg.num_classes.clamp(2, 8);
    Ok(data::gen_synthetic(seed, 1, classes, cfg.input_resolution)?.image(0)?)
}

fn load_image(path: &Path, index: usize) -> Result<Tensor<f32>> {
    let entries = io::read_file(path)?;
    for (name, stored) in &entries {
        match (name.as_str(), stored.shape()) {
            ("image", [_, _, 3]) => return Ok(stored.to_tensor("image")?),
            ("images", [n, ..]) => {
                if index >= *n {
                    bail!("index {index} outside {n} images");
                }
                return Ok(SyntheticDataset::load(path)?.image(index)?);
            }
            _ => {}
        }
    }
    bail!("{} holds neither `image` nor `images`", path.display())
}

fn model_for(cfg: &ModelConfig, seed: u64, checkpoint: Option<&Path>) -> Result<Model<f32>> {
    Ok(match checkpoint {
        Some(p) => Model::load_checkpoint(cfg, p).with_context(|| format!("loading {}", p.display()))?,
        None => Model::build(cfg, seed)?,
    })
}

fn count(a: CountArgs) -> Result<bool> {
    let cfg = resolve(&a.model, "dualtoken_s")?;
    let res = cfg.input_resolution;
    let model: Model<f32> = Model::build(&cfg, a.model.seed)?;
    let report = analysis::cost_report(&model, res)?;
    match a.depth {
        Some(d) => println!("{}", report.grouped(d)),
        None => println!("{report}"),
    }
    let params = report.total_params();
    let macs = report.total_macs();
    println!("params {params} ({:.2}M)", params as f64 / 1e6);
    println!("macs {macs} ({:.3}G)", macs as f64 / 1e9);
    let mut ok = true;
    if !a.no_forward {
        let image = synthetic_image(&cfg, a.model.seed)?;
        let (_, counted) = model.logits_with_macs(&image)?;
        ok &= check("macs.instrumented", counted == macs, macs, counted, 0);
    }
    match analysis::reference_costs(&cfg.name) {
        Some((p, f)) if res == 224 => {
            ok &= check(
                "params.published",
                analysis::within(params as f64, p, analysis::PARAM_TOLERANCE),
                p,
                params,
                analysis::PARAM_TOLERANCE,
            );
            ok &= check(
                "flops.published",
                analysis::within(macs as f64, f, analysis::FLOP_TOLERANCE),
                f,
                macs,
                analysis::FLOP_TOLERANCE,
            );
        }
        _ => eprintln!("no published reference for {} at {res}x{res}", cfg.name),
    }
    Ok(ok)
}

fn forward(a: ForwardArgs) -> Result<bool> {
    let cfg = resolve(&a.model, "toy")?;
    let model = model_for(&cfg, a.model.seed, a.checkpoint.as_deref())?;
    let image = match &a.image {
        Some(p) => load_image(p, a.index)?,
        None => synthetic_image(&cfg, a.model.seed)?,
    };
    let (logits, acts) = model.forward(&image)?;
    let v = logits.to_f64_vec();
    let mean = v.iter().sum::<f64>() / v.len() as f64;
    let std = (v.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / v.len() as f64).sqrt();
    let max = v.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let min = v.iter().copied().fold(f64::INFINITY, f64::min);
    let interpolated = acts.iter().filter(|b| b.interpolated).count();
    println!(
        "classes={} argmax={} min={min:.6e} max={max:.6e} mean={mean:.6e} std={std:.6e} interpolated_blocks={interpolated}",
        v.len(),
        data::argmax(&logits)
    );
    let line: Vec<String> = v.iter().map(|x| format!("{x:.9e}")).collect();
    println!("logits {}", line.join(" "));
    Ok(check("logits.finite", logits.all_finite(), "finite", if logits.all_finite() { "finite" } else { "non-finite" }, 0))
}

fn print_checks(results: &[CheckResult], tol: f64) -> bool {
    let mut ok = true;
    for r in results {
        ok &= check(
            &format!("gradcheck.{}", r.name),
            r.report.pass,
            0,
            format!("{:.3e}", r.report.max_rel_err),
            tol,
        );
    }
    ok
}

fn gradcheck(a: GradcheckArgs) -> Result<bool> {
    match a.scope {
        ScopeArg::Primitives => Ok(print_checks(&checks::primitive_checks(a.tol)?, a.tol)),
        ScopeArg::Blocks => Ok(print_checks(&checks::block_checks(a.tol)?, a.tol)),
        ScopeArg::Model => {
            let cfg = resolve(&a.model, "toy")?;
            let report = checks::model_check(&cfg, a.model.seed, a.coords, a.tol)?;
            eprintln!("checked {} coordinates", report.checked);
            let r = CheckResult { name: format!("model.{}", cfg.name), report };
            Ok(print_checks(&[r], a.tol))
        }
    }
}

fn train(a: TrainArgs) -> Result<bool> {
    let cfg = resolve(&a.model, "toy")?;
    let data = match &a.data {
        Some(p) => SyntheticDataset::load(p).with_context(|| format!("reading {}", p.display()))?,
        None => data::gen_synthetic(a.model.seed, a.samples, cfg.num_classes.clamp(2, 8), cfg.input_resolution)?,
    };
    if let Some(dir) = &a.out {
        std::fs::create_dir_all(dir)?;
    }
    let state_path = a.out.as_ref().map(|d| d.join("state.dtvt"));
    let mut tc = TrainConfig {
        steps: a.steps,
        lr: a.lr,
        optimizer: match a.optimizer {
            OptimizerArg::Sgd => Optimizer::Sgd,
            OptimizerArg::Adamw => Optimizer::adamw(),
        },
        seed: a.model.seed,
        checkpoint: None,
        ..TrainConfig::default()
    };
    if let (Some(every), Some(p)) = (a.save_every, &state_path) {
        tc.checkpoint = Some((every, p.clone()));
    }
    let mut state = match &a.resume {
        Some(p) => TrainState::<f32>::load(&cfg, p).with_context(|| format!("resuming from {}", p.display()))?,
        None => TrainState::new(Model::build(&cfg, a.model.seed)?),
    };
    let log = a.log_every.max(1);
    while state.step < a.steps {
        let target = (state.step + log).min(a.steps);
        let result = state.run(&data, &TrainConfig { steps: target, ..tc.clone() });
        match result {
            Ok(()) => println!("step {} loss {:.6}", state.step, state.losses[state.step - 1]),
            Err(Error::Diverged { step }) => {
                check("train.finite_loss", false, "finite", format!("non-finite@{step}"), 0);
                return Ok(false);
            }
            Err(e) => return Err(e.into()),
        }
    }
    let l = &state.losses;
    if l.len() >= 10 {
        let first = l[..10].iter().sum::<f64>() / 10.0;
        let last = l[l.len() - 10..].iter().sum::<f64>() / 10.0;
        println!("loss_first10={first:.6} loss_last10={last:.6} reduction={:.4}", 1.0 - last / first);
    }
    let acc = train::evaluate(&state.model, &data)?;
    println!("train_accuracy={acc:.4}");
    if let Some(dir) = &a.out {
        state.save(&dir.join("state.dtvt"))?;
        state.model.save_checkpoint(&dir.join("model.dtvt"))?;
        eprintln!("wrote {}", dir.display());
    }
    Ok(true)
}

fn attnmap(a: AttnmapArgs) -> Result<bool> {
    let cfg = resolve(&a.model, "toy")?;
    let model = model_for(&cfg, a.model.seed, a.checkpoint.as_deref())?;
    let image = match &a.image {
        Some(p) => load_image(p, a.index)?,
        None => synthetic_image(&cfg, a.model.seed)?,
    };
    let query: QuerySel = a.query.parse()?;
    let block = a.block.map_or(BlockSel::Last, BlockSel::Index);
    let export = analysis::extract_attention_map(&model, &image, block, query)?;
    let format = match a.format {
        FormatArg::Csv => HeatmapFormat::Csv,
        FormatArg::Pgm => HeatmapFormat::Pgm,
    };
    std::fs::create_dir_all(&a.out)?;
    let mut ok = true;
    for (label, map) in &export.maps {
        let path = a.out.join(format!("attn_block{}_q{label}.{}", export.block, format.extension()));
        analysis::export_heatmap(map, &path, format)?;
        let sum: f64 = map.data().iter().sum();
        let top: Vec<String> = analysis::top_k(map, a.top)
            .iter()
            .map(|(r, c, v)| format!("({r},{c},{v:.6})"))
            .collect();
        println!("map block={} query={label} file={} top{}={}", export.block, path.display(), a.top, top.join(" "));
        ok &= check(&format!("attn.sum.q{label}"), (sum - 1.0).abs() <= 1e-6, 1, format!("{sum:.12}"), 1e-6);
    }
    Ok(ok)
}

fn gen_data(a: GenDataArgs) -> Result<bool> {
    eprintln!("seed: {}", a.seed);
    let d = data::gen_synthetic(a.seed, a.samples, a.classes, a.resolution)?;
    d.save(&a.out)?;
    println!(
        "wrote {} samples of {}x{}x3, {} classes, histogram {:?} to {}",
        d.len(),
        d.side,
        d.side,
        d.classes,
        d.class_histogram(),
        a.out.display()
    );
    Ok(true)
}
