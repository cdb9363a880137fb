//! Full network: stem, three stages of dual token blocks joined by patch
//! merging, global-token propagation across stages, and the classifier head.

use std::path::Path;

use crate::block::{BlockActivations, BlockVars, DualTokenBlock, GlobalTokens};
use crate::config::ModelConfig;
use crate::error::{Error, Result, ResultExt};
use crate::io::{self, Stored};
use crate::layers::{Conv, Ctx, Init, Linear, Norm, ParamBuilder, ParamId, ParamStore};
use crate::scalar::Scalar;
use crate::tape::Var;
use crate::tensor::Tensor;

/// Three stride-2 3×3 convolutions with LN + GELU between them.
#[derive(Debug, Clone)]
pub struct Stem {
    pub conv1: Conv,
    pub norm1: Norm,
    pub conv2: Conv,
    pub norm2: Norm,
    pub conv3: Conv,
}

impl Stem {
    pub fn new<T: Scalar>(pb: &mut ParamBuilder<T>, hidden: usize, out: usize) -> Result<Self> {
        let mut s = pb.scope("stem");
        Ok(Stem {
            conv1: Conv::new(&mut s, "conv1", 3, hidden, 3, 2, 1)?,
            norm1: Norm::new(&mut s, "norm1", hidden)?,
            conv2: Conv::new(&mut s, "conv2", hidden, hidden, 3, 2, 1)?,
            norm2: Norm::new(&mut s, "norm2", hidden)?,
            conv3: Conv::new(&mut s, "conv3", hidden, out, 3, 2, 1)?,
        })
    }

    pub fn forward<T: Scalar>(&self, cx: &mut Ctx<T>, image: Var) -> Result<Var> {
        let y = self.conv1.forward(cx, image)?;
        let y = self.norm1.forward(cx, y)?;
        let y = cx.tape.gelu(y)?;
        let y = self.conv2.forward(cx, y)?;
        let y = self.norm2.forward(cx, y)?;
        let y = cx.tape.gelu(y)?;
        self.conv3.forward(cx, y)
    }
}

/// 2×2 neighbourhood concatenation → LN → linear to the next width.
#[derive(Debug, Clone)]
pub struct MergePatch {
    pub norm: Norm,
    pub proj: Linear,
}

impl MergePatch {
    pub fn new<T: Scalar>(pb: &mut ParamBuilder<T>, name: &str, cin: usize, cout: usize) -> Result<Self> {
        let mut s = pb.scope(name);
        Ok(MergePatch {
            norm: Norm::new(&mut s, "norm", 4 * cin)?,
            proj: Linear::new(&mut s, "proj", 4 * cin, cout, true)?,
        })
    }

    pub fn forward<T: Scalar>(&self, cx: &mut Ctx<T>, x: Var) -> Result<Var> {
        let y = cx.tape.space_to_depth(x)?;
        let (h, w) = (cx.tape.shape(y)[0], cx.tape.shape(y)[1]);
        let y = cx.tape.reshape(y, [h * w, self.proj.cin])?;
        let y = self.norm.forward(cx, y)?;
        let y = self.proj.forward(cx, y)?;
        cx.tape.reshape(y, [h, w, self.proj.cout])
    }
}

/// LN → token mean → Linear → LN → GELU → Linear.
#[derive(Debug, Clone)]
pub struct Head {
    pub norm: Norm,
    pub fc1: Linear,
    pub norm2: Norm,
    pub fc2: Linear,
}

impl Head {
    pub fn new<T: Scalar>(pb: &mut ParamBuilder<T>, channels: usize, hidden: usize, classes: usize) -> Result<Self> {
        let mut s = pb.scope("head");
        Ok(Head {
            norm: Norm::new(&mut s, "norm", channels)?,
            fc1: Linear::new(&mut s, "fc1", channels, hidden, true)?,
            norm2: Norm::new(&mut s, "norm2", hidden)?,
            fc2: Linear::new(&mut s, "fc2", hidden, classes, true)?,
        })
    }

    pub fn forward<T: Scalar>(&self, cx: &mut Ctx<T>, tokens: Var) -> Result<Var> {
        let y = self.norm.forward(cx, tokens)?;
        let y = cx.tape.mean_rows(y)?;
        let y = self.fc1.forward(cx, y)?;
        let y = self.norm2.forward(cx, y)?;
        let y = cx.tape.gelu(y)?;
        let y = self.fc2.forward(cx, y)?;
        cx.tape.reshape(y, [self.fc2.cout])
    }
}

#[derive(Debug, Clone)]
pub struct Model<T> {
    pub cfg: ModelConfig,
    pub params: ParamStore<T>,
    pub stem: Stem,
    pub global_init: ParamId,
    pub stages: Vec<Vec<DualTokenBlock>>,
    pub merges: Vec<MergePatch>,
    /// Bias-free per-token projections of the global tokens between stages.
    pub token_proj: Vec<Linear>,
    pub head: Head,
}

/// Tape handles produced by one forward pass.
#[derive(Debug, Clone)]
pub struct ForwardVars {
    pub logits: Var,
    pub blocks: Vec<BlockVars>,
    /// Image tokens entering each stage.
    pub stage_inputs: Vec<Var>,
    pub global_tokens: Var,
}

impl<T: Scalar> Model<T> {
    /// Deterministic construction from a configuration and seed.
    pub fn build(cfg: &ModelConfig, seed: u64) -> Result<Self> {
        cfg.validate()?;
        let mut params = ParamStore::new();
        let mut pb = ParamBuilder::new(&mut params, seed);
        let c1 = cfg.stages[0].channels;
        let stem = Stem::new(&mut pb, cfg.stem_hidden, c1)?;
        let (rows, cols) = cfg.token_layout();
        let global_init = pb.add("global_tokens", &[rows, cols, c1], Init::TruncNormal(0.02))?;
        let mut stages = Vec::new();
        let mut merges = Vec::new();
        let mut token_proj = Vec::new();
        for (i, s) in cfg.stages.iter().enumerate() {
            let bc = cfg.block_config(i);
            let blocks = (0..s.blocks)
                .map(|b| DualTokenBlock::new(&mut pb, &format!("stages.{i}.blocks.{b}"), &bc))
                .collect::<Result<Vec<_>>>()?;
            stages.push(blocks);
            if let Some(next) = cfg.stages.get(i + 1) {
                merges.push(MergePatch::new(&mut pb, &format!("merges.{i}"), s.channels, next.channels)?);
                token_proj.push(Linear::new(&mut pb, &format!("token_proj.{i}"), s.channels, next.channels, false)?);
            }
        }
        let c3 = cfg.stages[2].channels;
        let head = Head::new(&mut pb, c3, cfg.head_hidden, cfg.num_classes)?;
        Ok(Model {
            cfg: cfg.clone(),
            params,
            stem,
            global_init,
            stages,
            merges,
            token_proj,
            head,
        })
    }

    pub fn num_params(&self) -> usize {
        self.params.numel()
    }

    /// Same structure with parameters converted to another element type.
    pub fn cast<U: Scalar>(&self) -> Model<U> {
        Model {
            cfg: self.cfg.clone(),
            params: self.params.cast(),
            stem: self.stem.clone(),
            global_init: self.global_init,
            stages: self.stages.clone(),
            merges: self.merges.clone(),
            token_proj: self.token_proj.clone(),
            head: self.head.clone(),
        }
    }

    pub fn check_image(&self, shape: &[usize]) -> Result<usize> {
        match *shape {
            [h, w, 3] if h == w => {
                self.cfg.validate_resolution(h)?;
                Ok(h)
            }
            _ => Err(Error::shape("forward", format!("expected S×S×3 image, got {shape:?}"))),
        }
    }

    /// Stem output for one image (`S/8 × S/8 × C1`).
    pub fn stem_forward(&self, image: &Tensor<T>) -> Result<Tensor<T>> {
        match *image.shape() {
            [h, w, 3] if h == w && h % 8 == 0 => {}
            ref s => return Err(Error::shape("stem", format!("expected S×S×3 with S divisible by 8, got {s:?}"))),
        }
        let mut cx = Ctx::new(&self.params, false);
        let x = cx.tape.constant(image.clone());
        let y = self.stem.forward(&mut cx, x)?;
        Ok(cx.tape.value(y).clone())
    }

    /// Patch merging after stage `stage` (0 or 1) on an `H×W×C` map.
    pub fn merge_patch(&self, stage: usize, x: &Tensor<T>) -> Result<Tensor<T>> {
        let merge = self
            .merges
            .get(stage)
            .ok_or(Error::OutOfRange { index: stage, len: self.merges.len() })?;
        let mut cx = Ctx::new(&self.params, false);
        let xv = cx.tape.constant(x.clone());
        let y = merge.forward(&mut cx, xv)?;
        Ok(cx.tape.value(y).clone())
    }

    /// Per-token channel projection of the global tokens after stage `stage`.
    pub fn project_global_tokens(&self, stage: usize, g: &GlobalTokens<T>) -> Result<GlobalTokens<T>> {
        let proj = self
            .token_proj
            .get(stage)
            .ok_or(Error::OutOfRange { index: stage, len: self.token_proj.len() })?;
        let mut cx = Ctx::new(&self.params, false);
        let tokens = cx.tape.constant(g.tokens());
        let y = proj.forward(&mut cx, tokens)?;
        let grid = cx.tape.value(y).clone().reshape([g.rows(), g.cols(), proj.cout])?;
        GlobalTokens::new(grid)
    }

    /// Records the whole network on `cx` for image `x` (`S×S×3`).
    pub fn forward_on(&self, cx: &mut Ctx<T>, image: Var) -> Result<ForwardVars> {
        let side = self.check_image(cx.tape.shape(image))?;
        let mut x = self.stem.forward(cx, image).context(|| "stem".into())?;
        let mut g = cx.p(self.global_init);
        let mut blocks = Vec::new();
        let mut stage_inputs = Vec::new();
        for (si, stage) in self.stages.iter().enumerate() {
            stage_inputs.push(x);
            for (bi, block) in stage.iter().enumerate() {
                let vars = block
                    .forward(cx, x, g)
                    .context(|| format!("stage {} block {}", si + 1, bi))?;
                x = vars.output;
                g = vars.g_out;
                blocks.push(vars);
            }
            if let (Some(merge), Some(proj)) = (self.merges.get(si), self.token_proj.get(si)) {
                x = merge.forward(cx, x).context(|| format!("merge after stage {}", si + 1))?;
                let (rows, cols, c) = {
                    let s = cx.tape.shape(g);
                    (s[0], s[1], s[2])
                };
                let tokens = cx.tape.reshape(g, [rows * cols, c])?;
                let projected = proj.forward(cx, tokens)?;
                g = cx.tape.reshape(projected, [rows, cols, proj.cout])?;
            }
        }
        if self.cfg.exact_grid(side) {
            if let Some(i) = blocks.iter().position(|b| b.interpolated) {
                return Err(Error::shape(
                    "forward",
                    format!("block {i} resized its aggregation map although {side}x{side} input lands on the grid"),
                ));
            }
        }
        let (h, w, c) = {
            let s = cx.tape.shape(x);
            (s[0], s[1], s[2])
        };
        let tokens = cx.tape.reshape(x, [h * w, c])?;
        let logits = self.head.forward(cx, tokens).context(|| "head".into())?;
        Ok(ForwardVars {
            logits,
            blocks,
            stage_inputs,
            global_tokens: g,
        })
    }

    /// Inference on one image; returns logits and every block's intermediates.
    pub fn forward(&self, image: &Tensor<T>) -> Result<(Tensor<T>, Vec<BlockActivations<T>>)> {
        let mut cx = Ctx::new(&self.params, false);
        let x = cx.tape.constant(image.clone());
        let out = self.forward_on(&mut cx, x)?;
        let acts = out.blocks.iter().map(|b| b.materialize(&cx.tape)).collect();
        Ok((cx.tape.value(out.logits).clone(), acts))
    }

    /// Logits only.
    pub fn logits(&self, image: &Tensor<T>) -> Result<Tensor<T>> {
        let mut cx = Ctx::new(&self.params, false);
        let x = cx.tape.constant(image.clone());
        let out = self.forward_on(&mut cx, x)?;
        Ok(cx.tape.value(out.logits).clone())
    }

    /// Logits plus the multiply-accumulates the forward pass executed.
    pub fn logits_with_macs(&self, image: &Tensor<T>) -> Result<(Tensor<T>, u64)> {
        let mut cx = Ctx::new(&self.params, false);
        let x = cx.tape.constant(image.clone());
        let out = self.forward_on(&mut cx, x)?;
        Ok((cx.tape.value(out.logits).clone(), cx.tape.macs()))
    }

    /// Global tokens leaving the last block.
    pub fn final_global_tokens(&self, image: &Tensor<T>) -> Result<GlobalTokens<T>> {
        let mut cx = Ctx::new(&self.params, false);
        let x = cx.tape.constant(image.clone());
        let out = self.forward_on(&mut cx, x)?;
        GlobalTokens::new(cx.tape.value(out.global_tokens).clone())
    }

    pub fn to_entries(&self) -> Vec<(String, Stored)> {
        self.params
            .iter()
            .map(|(n, t)| (n.to_string(), Stored::from_tensor(t)))
            .collect()
    }

    /// Replaces parameters from stored entries, checking names and shapes.
    pub fn load_entries(&mut self, entries: &[(String, Stored)]) -> Result<()> {
        let ids: Vec<ParamId> = self.params.ids().collect();
        for id in &ids {
            let name = self.params.name(*id).to_string();
            let Some((_, stored)) = entries.iter().find(|(n, _)| *n == name) else {
                return Err(Error::Format(format!("missing tensor `{name}`")));
            };
            let expected = self.params.get(*id).shape().to_vec();
            if stored.shape() != expected.as_slice() {
                return Err(Error::CheckpointShape {
                    name,
                    expected,
                    found: stored.shape().to_vec(),
                });
            }
            *self.params.get_mut(*id) = stored.to_tensor(&name)?;
        }
        Ok(())
    }

    pub fn save_checkpoint(&self, path: &Path) -> Result<()> {
        io::write_file(path, &self.to_entries())
    }

    /// Builds `cfg` and fills it from a checkpoint file.
    pub fn load_checkpoint(cfg: &ModelConfig, path: &Path) -> Result<Self> {
        let entries = io::read_file(path)?;
        let mut model = Self::build(cfg, 0)?;
        model.load_entries(&entries)?;
        Ok(model)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::config::toy;

    #[test]
    fn same_seed_same_parameters() {
        let a: Model<f32> = Model::build(&toy(), 9).unwrap();
        let b: Model<f32> = Model::build(&toy(), 9).unwrap();
        let c: Model<f32> = Model::build(&toy(), 10).unwrap();
        assert!(a.params.iter().zip(b.params.iter()).all(|(x, y)| x == y));
        assert!(a.params.iter().zip(c.params.iter()).any(|(x, y)| x.1 != y.1));
    }

    #[test]
    fn parameter_names_are_unique() {
        let m: Model<f32> = Model::build(&toy(), 0).unwrap();
        let mut names: Vec<&str> = m.params.iter().map(|(n, _)| n).collect();
        let n = names.len();
        names.sort();
        names.dedup();
        assert_eq!(names.len(), n);
        assert!(m.params.find("global_tokens").is_some());
        assert!(m.params.find("token_proj.1.weight").is_some());
        assert!(m.params.find("token_proj.0.bias").is_none());
    }

    #[test]
    fn stage_shapes_at_32() {
        let m: Model<f64> = Model::build(&toy(), 0).unwrap();
        let img = crate::checks::random_tensor(&[32, 32, 3], 0, 1.0);
        let stem = m.stem_forward(&img).unwrap();
        assert_eq!(stem.shape(), [4, 4, 8]);
        let merged = m.merge_patch(0, &stem).unwrap();
        assert_eq!(merged.shape(), [2, 2, 16]);
        assert_eq!(m.merge_patch(1, &merged).unwrap().shape(), [1, 1, 32]);
        assert!(m.merge_patch(2, &merged).is_err());
        let g = GlobalTokens::new(Tensor::ones(vec![2, 2, 8])).unwrap();
        assert_eq!(m.project_global_tokens(0, &g).unwrap().grid.shape(), [2, 2, 16]);
    }

    #[test]
    fn bad_images_rejected() {
        let m: Model<f32> = Model::build(&toy(), 0).unwrap();
        assert!(m.logits(&Tensor::zeros(vec![32, 32, 1])).is_err());
        assert!(m.logits(&Tensor::zeros(vec![32, 24, 3])).is_err());
        assert!(m.stem_forward(&Tensor::zeros(vec![20, 20, 3])).is_err());
        assert!(m.logits(&Tensor::zeros(vec![32, 32, 3])).is_ok());
    }

    #[test]
    fn missing_tensor_reported() {
        let mut m: Model<f32> = Model::build(&toy(), 0).unwrap();
        let mut entries = m.to_entries();
        entries.retain(|(n, _)| n != "head.fc2.bias");
        match m.load_entries(&entries) {
            Err(Error::Format(msg)) => assert!(msg.contains("head.fc2.bias")),
            other => panic!("unexpected {other:?}"),
        }
    }
}
