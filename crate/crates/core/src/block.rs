//! The Dual Token Block.
//!
//! One block fuses two views of the image tokens `X` (`H×W×C`):
//!
//! * a local view, `X_local = X + PW2(GELU(PW1(LN(DW(X)))))`, from a
//!   ConvNeXt-style encoder (or windowed self-attention as an ablation);
//! * a global view, built by pooling `X_local` down to the token grid,
//!   self-attending over it (`X_ga`), mixing the result with the carried
//!   global tokens (`G_new = α·MLP(G) + (1−α)·X_ga`), and broadcasting
//!   `G_new` back to every image token by cross-attention (`X_global`).
//!
//! The two are summed, passed through a pre-norm FFN and a gated
//! spatial/channel reweighting, and the carried tokens leave as `G + G_new`.

use crate::config::{BlockConfig, DsKind, GlobalMode, LocalKind, MlpKind};
use crate::error::{Error, Result, ResultExt};
use crate::layers::{mean_attention, Conv, Ctx, Linear, MultiHeadAttention, Norm, ParamBuilder, ParamStore};
use crate::scalar::Scalar;
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;

/// Global tokens kept as a `rows×cols×C` grid. Position-aware tokens use a
/// square `g×g` grid; the 1-D ablation uses `1×n`.
#[derive(Debug, Clone, PartialEq)]
pub struct GlobalTokens<T> {
    pub grid: Tensor<T>,
}

impl<T: Scalar> GlobalTokens<T> {
    pub fn new(grid: Tensor<T>) -> Result<Self> {
        if grid.rank() != 3 {
            return Err(Error::shape("global_tokens", format!("expected rows×cols×C, got {:?}", grid.shape())));
        }
        Ok(GlobalTokens { grid })
    }

    pub fn rows(&self) -> usize {
        self.grid.shape()[0]
    }

    pub fn cols(&self) -> usize {
        self.grid.shape()[1]
    }

    pub fn channels(&self) -> usize {
        self.grid.shape()[2]
    }

    pub fn count(&self) -> usize {
        self.rows() * self.cols()
    }

    /// The `count×C` token matrix view.
    pub fn tokens(&self) -> Tensor<T> {
        self.grid.reshape([self.count(), self.channels()]).expect("same size")
    }
}

fn hwc<T: Scalar>(tape: &Tape<T>, x: Var, op: &'static str) -> Result<(usize, usize, usize)> {
    match *tape.shape(x) {
        [h, w, c] => Ok((h, w, c)),
        ref s => Err(Error::shape(op, format!("expected H×W×C, got {s:?}"))),
    }
}

// ---- local attention -------------------------------------------------------

/// ConvNeXt-style residual block: `x + PW2(GELU(PW1(LN(DW(x)))))`.
#[derive(Debug, Clone)]
pub struct ConvEncoder {
    pub dw: Conv,
    pub norm: Norm,
    pub pw1: Linear,
    pub pw2: Linear,
}

impl ConvEncoder {
    pub const EXPANSION: usize = 4;

    pub fn new<T: Scalar>(pb: &mut ParamBuilder<T>, name: &str, channels: usize, kernel: usize) -> Result<Self> {
        let mut s = pb.scope(name);
        Ok(ConvEncoder {
            dw: Conv::new(&mut s, "dw", channels, channels, kernel, 1, channels)?,
            norm: Norm::new(&mut s, "norm", channels)?,
            pw1: Linear::new(&mut s, "pw1", channels, Self::EXPANSION * channels, true)?,
            pw2: Linear::new(&mut s, "pw2", Self::EXPANSION * channels, channels, true)?,
        })
    }

    pub fn forward<T: Scalar>(&self, cx: &mut Ctx<T>, x: Var) -> Result<Var> {
        let (h, w, c) = hwc(&cx.tape, x, "conv_encoder")?;
        if c != self.dw.cin {
            return Err(Error::shape("conv_encoder", format!("{c} channels, encoder built for {}", self.dw.cin)));
        }
        let y = self.dw.forward(cx, x)?;
        let y = self.norm.forward(cx, y)?;
        let y = cx.tape.reshape(y, [h * w, c])?;
        let y = self.pw1.forward(cx, y)?;
        let y = cx.tape.gelu(y)?;
        let y = self.pw2.forward(cx, y)?;
        let y = cx.tape.reshape(y, [h, w, c])?;
        cx.tape.add(x, y)
    }
}

/// Self-attention inside non-overlapping `window×window` tiles, plus residual.
#[derive(Debug, Clone)]
pub struct WindowAttention {
    pub attn: MultiHeadAttention,
    pub window: usize,
}

/// Token indices of each window in raster order of windows.
pub fn window_partition(h: usize, w: usize, window: usize) -> Vec<Vec<usize>> {
    let mut out = Vec::new();
    for wy in 0..h / window {
        for wx in 0..w / window {
            let mut idx = Vec::with_capacity(window * window);
            for dy in 0..window {
                for dx in 0..window {
                    idx.push((wy * window + dy) * w + wx * window + dx);
                }
            }
            out.push(idx);
        }
    }
    out
}

impl WindowAttention {
    pub fn new<T: Scalar>(pb: &mut ParamBuilder<T>, name: &str, channels: usize, heads: usize, window: usize) -> Result<Self> {
        Ok(WindowAttention {
            attn: MultiHeadAttention::new(pb, name, channels, heads)?,
            window,
        })
    }

    pub fn forward<T: Scalar>(&self, cx: &mut Ctx<T>, x: Var) -> Result<Var> {
        let (h, w, c) = hwc(&cx.tape, x, "window_msa")?;
        if h % self.window != 0 || w % self.window != 0 {
            return Err(Error::shape(
                "window_msa",
                format!("{h}x{w} not divisible into {0}x{0} windows", self.window),
            ));
        }
        let tokens = cx.tape.reshape(x, [h * w, c])?;
        let windows = window_partition(h, w, self.window);
        let mut outs = Vec::with_capacity(windows.len());
        let mut order = Vec::with_capacity(h * w);
        for idx in windows {
            let part = cx.tape.gather_rows(tokens, idx.clone())?;
            outs.push(self.attn.self_attention(cx, part)?.output);
            order.extend(idx);
        }
        let stacked = cx.tape.concat_rows(&outs)?;
        let mut inverse = vec![0; h * w];
        for (pos, &tok) in order.iter().enumerate() {
            inverse[tok] = pos;
        }
        let restored = cx.tape.gather_rows(stacked, inverse)?;
        let restored = cx.tape.reshape(restored, [h, w, c])?;
        cx.tape.add(x, restored)
    }
}

#[derive(Debug, Clone)]
pub enum LocalBranch {
    Conv(ConvEncoder),
    Window(WindowAttention),
}

impl LocalBranch {
    pub fn forward<T: Scalar>(&self, cx: &mut Ctx<T>, x: Var) -> Result<Var> {
        match self {
            LocalBranch::Conv(e) => e.forward(cx, x),
            LocalBranch::Window(a) => a.forward(cx, x),
        }
    }
}

// ---- position-aware token module ------------------------------------------

/// Pooling of `X_local` toward the token grid.
///
/// Step-wise: one 2× average pool, then `steps` rounds of 3×3 conv + 2× pool.
/// One-step: a single average pool with the same total reduction.
#[derive(Debug, Clone)]
pub struct Downsample {
    pub kind: DsKind,
    pub steps: usize,
    pub convs: Vec<Conv>,
}

impl Downsample {
    pub fn new<T: Scalar>(pb: &mut ParamBuilder<T>, name: &str, channels: usize, steps: usize, kernel: usize, kind: DsKind) -> Result<Self> {
        let mut s = pb.scope(name);
        let convs = match kind {
            DsKind::StepWise => (0..steps)
                .map(|i| Conv::new(&mut s, &format!("conv{i}"), channels, channels, kernel, 1, 1))
                .collect::<Result<_>>()?,
            DsKind::OneStep => Vec::new(),
        };
        Ok(Downsample { kind, steps, convs })
    }

    /// Total side reduction factor.
    pub fn factor(&self) -> usize {
        1 << (self.steps + 1)
    }

    pub fn forward<T: Scalar>(&self, cx: &mut Ctx<T>, x_local: Var) -> Result<Var> {
        let (h, w, _) = hwc(&cx.tape, x_local, "downsample")?;
        if h % self.factor() != 0 || w % self.factor() != 0 {
            return Err(Error::shape(
                "downsample",
                format!("{h}x{w} cannot be reduced by {} with {} steps", self.factor(), self.steps),
            ));
        }
        match self.kind {
            DsKind::OneStep => cx.tape.avgpool(x_local, self.factor()),
            DsKind::StepWise => {
                let mut y = cx.tape.avgpool(x_local, 2)?;
                for conv in &self.convs {
                    y = conv.forward(cx, y)?;
                    y = cx.tape.avgpool(y, 2)?;
                }
                Ok(y)
            }
        }
    }
}

/// MLP applied to the global tokens before fusion.
#[derive(Debug, Clone)]
pub enum TokenMlp {
    /// `Linear(GELU(Linear(G)))` over channels.
    Normal { fc1: Linear, fc2: Linear },
    /// `Transpose(Linear(Transpose(Linear(G))))`: channel then token mixing.
    Mix { channel: Linear, token: Linear },
}

impl TokenMlp {
    pub fn new<T: Scalar>(pb: &mut ParamBuilder<T>, name: &str, channels: usize, tokens: usize, kind: MlpKind, ratio: usize) -> Result<Self> {
        let mut s = pb.scope(name);
        Ok(match kind {
            MlpKind::Normal => TokenMlp::Normal {
                fc1: Linear::new(&mut s, "fc1", channels, ratio * channels, true)?,
                fc2: Linear::new(&mut s, "fc2", ratio * channels, channels, true)?,
            },
            MlpKind::Mix => TokenMlp::Mix {
                channel: Linear::new(&mut s, "channel", channels, channels, true)?,
                token: Linear::new(&mut s, "token", tokens, tokens, true)?,
            },
        })
    }

    pub fn forward<T: Scalar>(&self, cx: &mut Ctx<T>, g: Var) -> Result<Var> {
        match self {
            TokenMlp::Normal { fc1, fc2 } => {
                let y = fc1.forward(cx, g)?;
                let y = cx.tape.gelu(y)?;
                fc2.forward(cx, y)
            }
            TokenMlp::Mix { channel, token } => {
                let n = cx.tape.shape(g)[0];
                if n != token.cin {
                    return Err(Error::shape("token_mlp", format!("{n} tokens, token mixer built for {}", token.cin)));
                }
                let y = channel.forward(cx, g)?;
                let y = cx.tape.transpose(y)?;
                let y = token.forward(cx, y)?;
                cx.tape.transpose(y)
            }
        }
    }
}

/// How `G` and the aggregated tokens are combined into `G_new`.
#[derive(Debug, Clone)]
pub enum GlobalFuse {
    /// `α·MLP(LN(G)) + (1−α)·X_ga`.
    WeightedSum { norm: Norm, mlp: TokenMlp, alpha: f64 },
    /// `MSA(q = LN(G), kv = [LN(G); other])`.
    Attention { norm: Norm, attn: MultiHeadAttention },
}

impl GlobalFuse {
    /// `other` is `X_ga` for the position-aware modes and the image tokens for
    /// the 1-D mode.
    pub fn forward<T: Scalar>(&self, cx: &mut Ctx<T>, g: Var, other: Var) -> Result<Var> {
        match self {
            GlobalFuse::WeightedSum { norm, mlp, alpha } => {
                if cx.tape.shape(g) != cx.tape.shape(other) {
                    return Err(Error::shape(
                        "fuse",
                        format!("G {:?} vs X_ga {:?}", cx.tape.shape(g), cx.tape.shape(other)),
                    ));
                }
                let gn = norm.forward(cx, g)?;
                let m = mlp.forward(cx, gn)?;
                fuse_weighted(&mut cx.tape, m, other, T::from_f64_lossy(*alpha))
            }
            GlobalFuse::Attention { norm, attn } => {
                let gn = norm.forward(cx, g)?;
                let kv = cx.tape.concat_rows(&[gn, other])?;
                Ok(attn.forward(cx, gn, kv)?.output)
            }
        }
    }
}

/// `α·mlp_out + (1−α)·x_ga`.
pub fn fuse_weighted<T: Scalar>(tape: &mut Tape<T>, mlp_out: Var, x_ga: Var, alpha: T) -> Result<Var> {
    let a = tape.scale(mlp_out, alpha)?;
    let b = tape.scale(x_ga, T::one() - alpha)?;
    tape.add(a, b)
}

/// Elementwise sum of the local and global image tokens.
pub fn dual_token_fusion<T: Scalar>(tape: &mut Tape<T>, x_local: Var, x_global: Var) -> Result<Var> {
    tape.add(x_local, x_global)
}

// ---- channel mixing ------------------------------------------------------

/// `x + Linear(GELU(Linear(LN(x))))` on tokens.
#[derive(Debug, Clone)]
pub struct FeedForward {
    pub norm: Norm,
    pub fc1: Linear,
    pub fc2: Linear,
}

impl FeedForward {
    pub fn new<T: Scalar>(pb: &mut ParamBuilder<T>, name: &str, channels: usize, ratio: usize) -> Result<Self> {
        let mut s = pb.scope(name);
        Ok(FeedForward {
            norm: Norm::new(&mut s, "norm", channels)?,
            fc1: Linear::new(&mut s, "fc1", channels, ratio * channels, true)?,
            fc2: Linear::new(&mut s, "fc2", ratio * channels, channels, true)?,
        })
    }

    pub fn forward<T: Scalar>(&self, cx: &mut Ctx<T>, x: Var) -> Result<Var> {
        let y = self.norm.forward(cx, x)?;
        let y = self.fc1.forward(cx, y)?;
        let y = cx.tape.gelu(y)?;
        let y = self.fc2.forward(cx, y)?;
        cx.tape.add(x, y)
    }
}

/// Spatial × channel gating: `x + x ⊙ σ(x·w_s + b_s) ⊙ σ(mean(x)·W_c + b_c)`.
#[derive(Debug, Clone)]
pub struct BiDimAttention {
    pub spatial: Linear,
    pub channel: Linear,
}

impl BiDimAttention {
    pub fn new<T: Scalar>(pb: &mut ParamBuilder<T>, name: &str, channels: usize) -> Result<Self> {
        let mut s = pb.scope(name);
        Ok(BiDimAttention {
            spatial: Linear::new(&mut s, "spatial", channels, 1, true)?,
            channel: Linear::new(&mut s, "channel", channels, channels, true)?,
        })
    }

    pub fn forward<T: Scalar>(&self, cx: &mut Ctx<T>, x: Var) -> Result<Var> {
        let s = self.spatial.forward(cx, x)?;
        let s = cx.tape.sigmoid(s)?;
        let pooled = cx.tape.mean_rows(x)?;
        let c = self.channel.forward(cx, pooled)?;
        let c = cx.tape.sigmoid(c)?;
        let y = cx.tape.scale_rows(x, s)?;
        let y = cx.tape.scale_cols(y, c)?;
        cx.tape.add(x, y)
    }
}

// ---- the block -----------------------------------------------------------

#[derive(Debug, Clone)]
pub struct DualTokenBlock {
    pub cfg: BlockConfig,
    pub local: Option<LocalBranch>,
    pub downsample: Option<Downsample>,
    pub aggregate: Option<MultiHeadAttention>,
    pub fuse: GlobalFuse,
    pub broadcast: MultiHeadAttention,
    pub ffn: FeedForward,
    pub bidim: Option<BiDimAttention>,
}

/// Tape handles of one block's intermediates.
#[derive(Debug, Clone)]
pub struct BlockVars {
    pub x_local: Var,
    pub x_ds: Option<Var>,
    pub x_ga: Option<Var>,
    pub g_new: Var,
    pub x_global: Var,
    pub x_new: Var,
    pub output: Var,
    pub g_out: Var,
    pub broadcast_weights: Vec<Var>,
    /// `X_ga` had to be resized onto the token grid.
    pub interpolated: bool,
}

/// Materialised intermediates of one block.
#[derive(Debug, Clone)]
pub struct BlockActivations<T> {
    pub x_local: Tensor<T>,
    pub x_ds: Option<Tensor<T>>,
    pub x_ga: Option<Tensor<T>>,
    pub g_new: Tensor<T>,
    pub x_global: Tensor<T>,
    pub x_new: Tensor<T>,
    pub output: Tensor<T>,
    /// Head-averaged broadcast attention, image tokens × global tokens.
    pub broadcast_attention: Tensor<T>,
    pub interpolated: bool,
}

impl BlockVars {
    pub fn materialize<T: Scalar>(&self, tape: &Tape<T>) -> BlockActivations<T> {
        let v = |x: Var| tape.value(x).clone();
        BlockActivations {
            x_local: v(self.x_local),
            x_ds: self.x_ds.map(v),
            x_ga: self.x_ga.map(v),
            g_new: v(self.g_new),
            x_global: v(self.x_global),
            x_new: v(self.x_new),
            output: v(self.output),
            broadcast_attention: mean_attention(tape, &self.broadcast_weights),
            interpolated: self.interpolated,
        }
    }
}

impl DualTokenBlock {
    pub fn new<T: Scalar>(pb: &mut ParamBuilder<T>, name: &str, cfg: &BlockConfig) -> Result<Self> {
        cfg.validate()?;
        let mut s = pb.scope(name);
        let c = cfg.channels;
        let local = if cfg.skip_local_and_ds {
            None
        } else {
            Some(match cfg.local_kind {
                LocalKind::ConvEncoder => LocalBranch::Conv(ConvEncoder::new(&mut s, "local", c, cfg.dw_kernel)?),
                LocalKind::WindowMsa => LocalBranch::Window(WindowAttention::new(&mut s, "local", c, cfg.heads, cfg.window)?),
            })
        };
        let position_aware = cfg.global_mode.is_position_aware();
        let downsample = if position_aware && !cfg.skip_local_and_ds {
            Some(Downsample::new(&mut s, "ds", c, cfg.ds_steps, cfg.ds_kernel, cfg.ds_kind)?)
        } else {
            None
        };
        let aggregate = if position_aware {
            Some(MultiHeadAttention::new(&mut s, "aggregate", c, cfg.heads)?)
        } else {
            None
        };
        let (rows, cols) = cfg.token_layout();
        let fuse = match cfg.global_mode {
            GlobalMode::PositionAwareSum => GlobalFuse::WeightedSum {
                norm: Norm::new(&mut s, "fuse.norm", c)?,
                mlp: TokenMlp::new(&mut s, "fuse.mlp", c, rows * cols, cfg.mlp_kind, cfg.token_mlp_ratio)?,
                alpha: cfg.alpha,
            },
            GlobalMode::NormalMsa | GlobalMode::PositionAwareMsa => GlobalFuse::Attention {
                norm: Norm::new(&mut s, "fuse.norm", c)?,
                attn: MultiHeadAttention::new(&mut s, "fuse.attn", c, cfg.heads)?,
            },
        };
        let broadcast = MultiHeadAttention::new(&mut s, "broadcast", c, cfg.heads)?;
        let ffn = FeedForward::new(&mut s, "ffn", c, cfg.ffn_ratio)?;
        let bidim = if cfg.bidim {
            Some(BiDimAttention::new(&mut s, "bidim", c)?)
        } else {
            None
        };
        Ok(DualTokenBlock {
            cfg: cfg.clone(),
            local,
            downsample,
            aggregate,
            fuse,
            broadcast,
            ffn,
            bidim,
        })
    }

    /// Runs the block on image tokens `x` (`H×W×C`) and global tokens `g`
    /// (`rows×cols×C`).
    pub fn forward<T: Scalar>(&self, cx: &mut Ctx<T>, x: Var, g: Var) -> Result<BlockVars> {
        let (h, w, c) = hwc(&cx.tape, x, "dual_token_block")?;
        if c != self.cfg.channels {
            return Err(Error::shape("dual_token_block", format!("{c} channels, block built for {}", self.cfg.channels)));
        }
        let (rows, cols) = self.cfg.token_layout();
        if cx.tape.shape(g) != [rows, cols, c] {
            return Err(Error::shape(
                "dual_token_block",
                format!("global tokens {:?}, expected {:?}", cx.tape.shape(g), [rows, cols, c]),
            ));
        }

        let x_local = match &self.local {
            Some(l) => l.forward(cx, x).context(|| "local attention".into())?,
            None => x,
        };

        let mut x_ds = None;
        let mut x_ga = None;
        let mut interpolated = false;
        if let Some(aggregate) = &self.aggregate {
            let ds = match &self.downsample {
                Some(d) => d.forward(cx, x_local).context(|| "downsampling".into())?,
                None => x_local,
            };
            let (dh, dw, _) = hwc(&cx.tape, ds, "downsample")?;
            let tokens = cx.tape.reshape(ds, [dh * dw, c])?;
            let mut ga = aggregate
                .self_attention(cx, tokens)
                .context(|| "global aggregation".into())?
                .output;
            if (dh, dw) != (rows, cols) {
                let grid = cx.tape.reshape(ga, [dh, dw, c])?;
                let resized = cx.tape.bilinear_resize(grid, rows, cols)?;
                ga = cx.tape.reshape(resized, [rows * cols, c])?;
                interpolated = true;
            }
            x_ds = Some(ds);
            x_ga = Some(ga);
        }

        let g_tokens = cx.tape.reshape(g, [rows * cols, c])?;
        let image_tokens = cx.tape.reshape(x_local, [h * w, c])?;
        let other = x_ga.unwrap_or(image_tokens);
        let g_new = self.fuse.forward(cx, g_tokens, other).context(|| "global-token fusion".into())?;

        let bc = self
            .broadcast
            .forward(cx, image_tokens, g_new)
            .context(|| "global broadcast".into())?;
        let x_global = cx.tape.reshape(bc.output, [h, w, c])?;
        let x_new = dual_token_fusion(&mut cx.tape, x_local, x_global)?;

        let tokens = cx.tape.reshape(x_new, [h * w, c])?;
        let mut y = self.ffn.forward(cx, tokens).context(|| "ffn".into())?;
        if let Some(b) = &self.bidim {
            y = b.forward(cx, y).context(|| "bidim attention".into())?;
        }
        let output = cx.tape.reshape(y, [h, w, c])?;

        let g_sum = cx.tape.add(g_tokens, g_new)?;
        let g_out = cx.tape.reshape(g_sum, [rows, cols, c])?;

        Ok(BlockVars {
            x_local,
            x_ds,
            x_ga,
            g_new,
            x_global,
            x_new,
            output,
            g_out,
            broadcast_weights: bc.weights,
            interpolated,
        })
    }
}

/// Builds a standalone block with its own parameter store, for tests and
/// inspection.
pub fn standalone_block<T: Scalar>(cfg: &BlockConfig, seed: u64) -> Result<(DualTokenBlock, ParamStore<T>)> {
    let mut store = ParamStore::new();
    let block = DualTokenBlock::new(&mut ParamBuilder::new(&mut store, seed), "block", cfg)?;
    Ok((block, store))
}

/// Convenience wrapper: runs one block on plain tensors.
pub fn dual_token_block<T: Scalar>(
    block: &DualTokenBlock,
    store: &ParamStore<T>,
    x: &Tensor<T>,
    g: &GlobalTokens<T>,
) -> Result<(Tensor<T>, GlobalTokens<T>, BlockActivations<T>)> {
    let mut cx = Ctx::new(store, false);
    let xv = cx.tape.constant(x.clone());
    let gv = cx.tape.constant(g.grid.clone());
    let vars = block.forward(&mut cx, xv, gv)?;
    let acts = vars.materialize(&cx.tape);
    let g_out = GlobalTokens::new(cx.tape.value(vars.g_out).clone())?;
    Ok((acts.output.clone(), g_out, acts))
}
