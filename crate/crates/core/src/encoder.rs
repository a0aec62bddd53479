//! Input embedding, the hybrid causal block and the multi-scale pyramid.

use rand::Rng as _;
use serde::{Deserialize, Serialize};

use crate::attention::CausalAttention;
use crate::error::{Error, Result};
use crate::layers::{Context, LayerNorm, Linear};
use crate::rng::Rng;
use crate::ssm::CausalMamba;
use crate::tape::{ParamId, ParamStore, Tape, Var};
use crate::tensor::{Matrix, Real};

/// Which branches a hybrid block evaluates.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum Branches {
    #[default]
    Hybrid,
    AttentionOnly,
    SsmOnly,
}

impl Branches {
    pub const ALL: [Branches; 3] = [Branches::AttentionOnly, Branches::SsmOnly, Branches::Hybrid];

    pub fn attention(self) -> bool {
        self != Branches::SsmOnly
    }

    pub fn ssm(self) -> bool {
        self != Branches::AttentionOnly
    }

    pub fn label(self) -> &'static str {
        match self {
            Branches::Hybrid => "hybrid",
            Branches::AttentionOnly => "attention-only",
            Branches::SsmOnly => "ssm-only",
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EncoderConfig {
    /// Pyramid levels.
    pub levels: usize,
    /// Model width.
    pub dim: usize,
    pub heads: usize,
    /// Attention inner width; `0` means equal to `dim`.
    pub attn_inner: usize,
    /// Scan state size per channel.
    pub ssm_state: usize,
    /// Scan inner width as a multiple of `dim`.
    pub ssm_expand: usize,
    pub conv_width: usize,
    pub channel_dropout_p: f64,
    pub blocks_per_stage: usize,
    pub attention_window: Option<usize>,
    /// Chunk length for the composed scan; `None` scans sequentially.
    pub scan_chunk: Option<usize>,
    pub downsample: DownsampleKind,
    pub branches: Branches,
    pub context: Context,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum DownsampleKind {
    #[default]
    StridedConv,
    MaxPool,
}

impl Default for EncoderConfig {
    fn default() -> Self {
        Self {
            levels: 6,
            dim: 32,
            heads: 4,
            attn_inner: 0,
            ssm_state: 16,
            ssm_expand: 2,
            conv_width: 4,
            channel_dropout_p: 0.0,
            blocks_per_stage: 1,
            attention_window: None,
            scan_chunk: None,
            downsample: DownsampleKind::StridedConv,
            branches: Branches::Hybrid,
            context: Context::Bidirectional,
        }
    }
}

impl EncoderConfig {
    pub fn validate(&self) -> Result<()> {
        let inner = self.attn_inner();
        if self.levels == 0 || self.dim == 0 || self.blocks_per_stage == 0 {
            return Err(Error::Config("levels, dim and blocks_per_stage must be positive".into()));
        }
        if self.heads == 0 || !inner.is_multiple_of(self.heads) {
            return Err(Error::Config(format!("attention width {inner} not divisible by {} heads", self.heads)));
        }
        if !(0.0..1.0).contains(&self.channel_dropout_p) {
            return Err(Error::Config("channel_dropout_p must lie in [0, 1)".into()));
        }
        if self.ssm_state == 0 || self.ssm_expand == 0 || self.conv_width == 0 {
            return Err(Error::Config("scan sizes must be positive".into()));
        }
        if self.attention_window == Some(0) || self.scan_chunk == Some(0) {
            return Err(Error::Config("window and chunk sizes must be at least 1".into()));
        }
        Ok(())
    }

    pub fn attn_inner(&self) -> usize {
        if self.attn_inner == 0 {
            self.dim
        } else {
            self.attn_inner
        }
    }
}

/// Per-column factors of input channel dropout: each channel is kept with probability `1 − p`
/// and survivors are scaled by `1 / (1 − p)`.
pub fn channel_dropout_mask<S: Real>(channels: usize, p: f64, rng: &mut Rng) -> Vec<S> {
    if p <= 0.0 {
        return vec![S::one(); channels];
    }
    let keep = S::of(1.0 / (1.0 - p));
    (0..channels).map(|_| if rng.random::<f64>() < p { S::zero() } else { keep }).collect()
}

/// Residual block: `x + fuse(concat(attention(norm x), scan(norm x)))`.
#[derive(Clone, Debug)]
pub struct HybridBlock {
    pub norm: LayerNorm,
    pub attention: CausalAttention,
    pub ssm: CausalMamba,
    pub fuse: Linear,
}

impl HybridBlock {
    pub fn new<S: Real>(store: &mut ParamStore<S>, name: &str, cfg: &EncoderConfig, rng: &mut Rng) -> Result<Self> {
        let d = cfg.dim;
        let norm = LayerNorm::new(store, &format!("{name}.norm"), d);
        let attention =
            CausalAttention::new(store, &format!("{name}.attn"), d, cfg.attn_inner(), cfg.heads, cfg.attention_window, rng)?;
        let ssm = CausalMamba::new(
            store,
            &format!("{name}.ssm"),
            d,
            cfg.ssm_expand * d,
            cfg.ssm_state,
            cfg.conv_width,
            cfg.scan_chunk,
            rng,
        )?;
        let fuse = Linear::new(store, &format!("{name}.fuse"), 2 * d, d, true, rng);
        Ok(Self { norm, attention, ssm, fuse })
    }

    pub fn forward<S: Real>(
        &self,
        tape: &mut Tape<S>,
        x: Var,
        valid: usize,
        branches: Branches,
        context: Context,
    ) -> Result<Var> {
        let (rows, d) = tape.value(x).shape();
        let n = self.norm.forward(tape, x)?;
        let a = if branches.attention() {
            self.attention.forward(tape, n, valid, context)?
        } else {
            tape.constant(Matrix::zeros(rows, d))
        };
        let s = if branches.ssm() { self.ssm.forward(tape, n, valid, context)? } else { tape.constant(Matrix::zeros(rows, d)) };
        let cat = tape.concat(a, s)?;
        let f = self.fuse.forward(tape, cat)?;
        tape.add(x, f)
    }
}

/// Evaluates one block on an unpadded sequence.
pub fn hybrid_causal_block<S: Real>(
    x: &Matrix<S>,
    block: &HybridBlock,
    store: &ParamStore<S>,
    branches: Branches,
    context: Context,
) -> Result<Matrix<S>> {
    let mut tape = Tape::new(store);
    let xv = tape.constant(x.clone());
    let y = block.forward(&mut tape, xv, x.rows(), branches, context)?;
    Ok(tape.value(y).clone())
}

#[derive(Clone, Debug)]
enum Downsampler {
    Conv { w: ParamId, b: ParamId },
    Max,
}

#[derive(Clone, Debug)]
struct Stage {
    down: Option<Downsampler>,
    blocks: Vec<HybridBlock>,
    out_norm: LayerNorm,
}

/// One pyramid level on the tape.
#[derive(Clone, Copy, Debug)]
pub struct PyramidLevel {
    pub features: Var,
    /// Stride in snippets, `2^level`.
    pub stride: usize,
    /// Number of real (unpadded) rows.
    pub valid: usize,
}

/// Length of every pyramid level for an input of `len` rows.
pub fn level_lengths(len: usize, levels: usize) -> Result<Vec<usize>> {
    if levels == 0 {
        return Err(Error::Config("at least one pyramid level".into()));
    }
    if len == 0 || len < 1usize << (levels - 1) {
        return Err(Error::SequenceTooShort { len, levels });
    }
    let mut out = vec![len];
    for _ in 1..levels {
        let prev = *out.last().expect("nonempty");
        out.push(prev.div_ceil(2));
    }
    Ok(out)
}

/// Embedding stem plus hybrid blocks at every pyramid level.
#[derive(Clone, Debug)]
pub struct Encoder {
    pub cfg: EncoderConfig,
    pub input_dim: usize,
    embed: [Linear; 2],
    stages: Vec<Stage>,
}

impl Encoder {
    pub fn new<S: Real>(store: &mut ParamStore<S>, input_dim: usize, cfg: &EncoderConfig, rng: &mut Rng) -> Result<Self> {
        cfg.validate()?;
        let d = cfg.dim;
        let embed = [
            Linear::new(store, "embed.0", input_dim, d, true, rng),
            Linear::new(store, "embed.1", d, d, true, rng),
        ];
        let mut stages = Vec::with_capacity(cfg.levels);
        for l in 0..cfg.levels {
            let down = (l > 0).then(|| match cfg.downsample {
                DownsampleKind::StridedConv => {
                    let w = Matrix::from_fn(3, d, |tap, _| S::of([0.25, 0.5, 0.25][tap]));
                    Downsampler::Conv {
                        w: store.add(format!("level{l}.down.weight"), w, true),
                        b: store.add(format!("level{l}.down.bias"), Matrix::zeros(1, d), false),
                    }
                }
                DownsampleKind::MaxPool => Downsampler::Max,
            });
            let blocks = (0..cfg.blocks_per_stage)
                .map(|b| HybridBlock::new(store, &format!("level{l}.block{b}"), cfg, rng))
                .collect::<Result<Vec<_>>>()?;
            let out_norm = LayerNorm::new(store, &format!("level{l}.out_norm"), d);
            stages.push(Stage { down, blocks, out_norm });
        }
        Ok(Self { cfg: cfg.clone(), input_dim, embed, stages })
    }

    /// Two pointwise layers with ReLU mapping input features to the model width. `dropout`
    /// holds per-input-channel factors (see [`channel_dropout_mask`]).
    pub fn embed<S: Real>(&self, tape: &mut Tape<S>, features: Var, dropout: Option<Vec<S>>) -> Result<Var> {
        if tape.value(features).cols() != self.input_dim {
            return Err(Error::Shape(format!(
                "features have {} channels, encoder expects {}",
                tape.value(features).cols(),
                self.input_dim
            )));
        }
        let x = match dropout {
            Some(mask) => tape.scale_cols(features, mask)?,
            None => features,
        };
        let h = self.embed[0].forward(tape, x)?;
        let h = tape.relu(h);
        let h = self.embed[1].forward(tape, h)?;
        Ok(tape.relu(h))
    }

    /// Blocks at full resolution, then halve-and-process for every further level.
    pub fn pyramid<S: Real>(&self, tape: &mut Tape<S>, x0: Var, valid: usize) -> Result<Vec<PyramidLevel>> {
        let len = tape.value(x0).rows();
        let valid = valid.min(len);
        level_lengths(valid, self.cfg.levels)?;
        let mut out = Vec::with_capacity(self.stages.len());
        let mut x = x0;
        let mut cur_valid = valid;
        for (l, stage) in self.stages.iter().enumerate() {
            if let Some(down) = &stage.down {
                x = match down {
                    Downsampler::Conv { w, b } => {
                        let w = tape.param(*w);
                        let b = tape.param(*b);
                        tape.downsample(x, w, b, cur_valid)?
                    }
                    Downsampler::Max => tape.max_pool(x, cur_valid),
                };
                cur_valid = cur_valid.div_ceil(2);
            }
            for block in &stage.blocks {
                x = block.forward(tape, x, cur_valid, self.cfg.branches, self.cfg.context)?;
            }
            let features = stage.out_norm.forward(tape, x)?;
            out.push(PyramidLevel { features, stride: 1 << l, valid: cur_valid });
        }
        Ok(out)
    }
}
