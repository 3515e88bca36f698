//! The asymmetric encoder–decoder super-resolution network and its
//! ablation variants.
//!
//! Public entry points take channel-first tensors (`[B, C, D, H, W]`);
//! internally activations are kept channel-last (`[B, D, H, W, C]`) so that
//! linear layers act on the contiguous trailing axis and attention along `W`
//! needs no copy.
//!
//! ```text
//! x ─ embed ─ encoder STL2 ×N (alternating W/H rows) ─┐
//!   ┌──────────────────────────────────────────────────┘
//!   └ FIM ×M: TAB (depth + height pathways) → in-plane STL2
//!     → expand d→r·d → depth subpixel → project d→1
//! ```

mod checkpoint;

pub use checkpoint::{
    load_checkpoint, read_checkpoint, save_checkpoint, write_checkpoint, Checkpoint,
    CheckpointError, OptimizerSnapshot, CHECKPOINT_VERSION,
};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::attention::{BlockDims, BlockKind, Stl2Block, BIAS_HIDDEN, TAU_MIN};
use crate::nn::{
    depth_subpixel, Bound, Init, Linear, ParamBuilder, ParamSpec, ParamStore, WindowSpec,
};
use crate::tensor::{Float, Graph, Tensor, TensorError, Var};

/// Number of STL2 stages per TAB pathway.
pub const STL_PER_TAB: usize = 4;

#[derive(Debug, Error)]
pub enum ModelError {
    #[error("invalid model config: {0}")]
    Config(String),
    #[error(transparent)]
    Tensor(#[from] TensorError),
}

pub type Result<T, E = ModelError> = std::result::Result<T, E>;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Variant {
    /// Encoder, decoder with through-plane attention, subpixel head.
    Full,
    /// Decoder keeps its in-plane blocks but drops through-plane attention.
    NoTab,
    /// Encoder followed directly by the subpixel head.
    EncoderSubpixel,
    /// Pre-norm dot-product encoder attending over whole rows, subpixel head.
    VitEncoder,
}

impl Variant {
    pub const ALL: [Variant; 4] = [
        Variant::Full,
        Variant::NoTab,
        Variant::EncoderSubpixel,
        Variant::VitEncoder,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Variant::Full => "full",
            Variant::NoTab => "no_tab",
            Variant::EncoderSubpixel => "encoder_subpixel",
            Variant::VitEncoder => "vit_encoder",
        }
    }
}

impl std::str::FromStr for Variant {
    type Err = String;
    fn from_str(s: &str) -> std::result::Result<Self, String> {
        Variant::ALL
            .into_iter()
            .find(|v| v.name() == s)
            .ok_or_else(|| format!("unknown variant {s:?}"))
    }
}

impl std::fmt::Display for Variant {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelConfig {
    pub embed_dim: usize,
    pub heads: usize,
    pub encoder_depth: usize,
    pub n_fim: usize,
    pub stl_per_tab: usize,
    pub window: usize,
    /// Depth upsampling factor.
    pub r: usize,
    pub variant: Variant,
    pub tau_min: f64,
    pub mlp_ratio: usize,
    pub bias_hidden: usize,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            embed_dim: 32,
            heads: 4,
            encoder_depth: 4,
            n_fim: 2,
            stl_per_tab: STL_PER_TAB,
            window: 8,
            r: 4,
            variant: Variant::Full,
            tau_min: TAU_MIN,
            mlp_ratio: 2,
            bias_hidden: BIAS_HIDDEN,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(ModelError::Config(m));
        if self.r == 0 {
            return bad("r must be >= 1".into());
        }
        if self.embed_dim < 2 {
            return bad("embed_dim must be >= 2".into());
        }
        if self.heads == 0 || self.embed_dim % self.heads != 0 {
            return bad(format!(
                "embed_dim {} not divisible by heads {}",
                self.embed_dim, self.heads
            ));
        }
        if self.window == 0 {
            return bad("window must be >= 1".into());
        }
        if self.variant == Variant::Full && self.stl_per_tab != STL_PER_TAB {
            return bad(format!(
                "stl_per_tab must be {STL_PER_TAB} for the full variant"
            ));
        }
        if !(self.tau_min > 0.0 && self.tau_min.is_finite()) {
            return bad("tau_min must be positive".into());
        }
        if self.mlp_ratio == 0 || self.bias_hidden == 0 {
            return bad("mlp_ratio and bias_hidden must be >= 1".into());
        }
        Ok(())
    }

    fn block_dims(&self) -> BlockDims {
        BlockDims {
            dim: self.embed_dim,
            heads: self.heads,
            mlp_hidden: self.embed_dim * self.mlp_ratio,
            bias_hidden: self.bias_hidden,
            tau_min: self.tau_min,
        }
    }

    fn half_shift(&self) -> usize {
        self.window / 2
    }
}

/// Axis of a channel-last `[B, D, H, W, C]` activation used as token axis.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TokenAxis {
    Depth,
    Height,
    Width,
}

impl TokenAxis {
    /// Permutation moving the token axis next to the channels, and back.
    fn perms(self) -> Option<([usize; 5], [usize; 5])> {
        match self {
            TokenAxis::Width => None,
            TokenAxis::Height => Some(([0, 1, 3, 2, 4], [0, 1, 3, 2, 4])),
            TokenAxis::Depth => Some(([0, 2, 3, 1, 4], [0, 3, 1, 2, 4])),
        }
    }
}

/// A block applied along one axis of the volume with a fixed window spec.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AxisBlock {
    pub block: Stl2Block,
    pub axis: TokenAxis,
    pub spec: WindowSpec,
    /// Attend over the full axis regardless of `spec`.
    pub global: bool,
}

impl AxisBlock {
    pub fn forward<T: Float>(&self, g: &mut Graph<T>, p: &Bound, x: Var) -> Result<Var> {
        along_axis(g, x, self.axis, |g, seq| {
            let len = g.shape(seq)[1];
            let spec = if self.global {
                WindowSpec::new(len, 0)?
            } else {
                self.spec
            };
            self.block.forward(g, p, seq, &spec)
        })
    }
}

/// Applies a sequence map `[N, L, C] → [N, L, C]` along `axis` of a
/// channel-last volume.
pub fn along_axis<T: Float>(
    g: &mut Graph<T>,
    x: Var,
    axis: TokenAxis,
    f: impl FnOnce(&mut Graph<T>, Var) -> crate::tensor::Result<Var>,
) -> Result<Var> {
    let sh = g.shape(x).to_vec();
    if sh.len() != 5 {
        return Err(
            TensorError::spec("along_axis", format!("want [B, D, H, W, C], got {sh:?}")).into(),
        );
    }
    let Some((fwd, back)) = axis.perms() else {
        let seq = g.reshape(x, &[sh[0] * sh[1] * sh[2], sh[3], sh[4]])?;
        let y = f(g, seq)?;
        return Ok(g.reshape(y, &sh)?);
    };
    let moved = g.permute(x, &fwd)?;
    let msh: Vec<usize> = fwd.iter().map(|&a| sh[a]).collect();
    let seq = g.reshape(moved, &[msh[0] * msh[1] * msh[2], msh[3], msh[4]])?;
    let y = f(g, seq)?;
    let y = g.reshape(y, &msh)?;
    Ok(g.permute(y, &back)?)
}

/// One through-plane pathway: project, attend along one axis with four
/// stages, project back (zero-initialized).
#[derive(Debug, Clone, PartialEq)]
pub struct Pathway {
    pub axis: TokenAxis,
    pub in_proj: Linear,
    pub blocks: Vec<AxisBlock>,
    pub out_proj: Linear,
}

impl Pathway {
    fn declare(pb: &mut ParamBuilder, name: &str, axis: TokenAxis, cfg: &ModelConfig) -> Self {
        let d = cfg.embed_dim;
        let dims = cfg.block_dims();
        let in_proj = Linear::declare(pb, &format!("{name}.in_proj"), d, d, true);
        let blocks = (0..cfg.stl_per_tab)
            .map(|i| AxisBlock {
                block: Stl2Block::declare(
                    pb,
                    &format!("{name}.stl.{i}"),
                    BlockKind::PostNormCosine,
                    &dims,
                ),
                axis,
                spec: WindowSpec {
                    window: cfg.window,
                    shift: if i % 2 == 1 { cfg.half_shift() } else { 0 },
                },
                global: false,
            })
            .collect();
        let out_proj =
            Linear::declare_with(pb, &format!("{name}.out_proj"), d, d, true, Init::Zeros);
        Pathway {
            axis,
            in_proj,
            blocks,
            out_proj,
        }
    }

    /// Channel-last `[B, D, H, W, d]` → same shape.
    pub fn forward<T: Float>(&self, g: &mut Graph<T>, p: &Bound, z: Var) -> Result<Var> {
        let mut h = self.in_proj.forward(g, p, z)?;
        // Permute once, run every stage on the token sequence, permute back.
        h = along_axis(g, h, self.axis, |g, mut seq| {
            for b in &self.blocks {
                seq = b.block.forward(g, p, seq, &b.spec)?;
            }
            Ok(seq)
        })?;
        Ok(self.out_proj.forward(g, p, h)?)
    }
}

/// Through-plane attention block: `z + sag(z) + cor(z)`.
#[derive(Debug, Clone, PartialEq)]
pub struct Tab {
    pub sagittal: Pathway,
    pub coronal: Pathway,
}

impl Tab {
    fn declare(pb: &mut ParamBuilder, name: &str, cfg: &ModelConfig) -> Self {
        Tab {
            sagittal: Pathway::declare(pb, &format!("{name}.sag"), TokenAxis::Depth, cfg),
            coronal: Pathway::declare(pb, &format!("{name}.cor"), TokenAxis::Height, cfg),
        }
    }

    /// Channel-last forward.
    pub fn forward_cl<T: Float>(&self, g: &mut Graph<T>, p: &Bound, z: Var) -> Result<Var> {
        let s = self.sagittal.forward(g, p, z)?;
        let c = self.coronal.forward(g, p, z)?;
        let y = g.add(z, s)?;
        Ok(g.add(y, c)?)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Fim {
    pub tab: Option<Tab>,
    pub refine: AxisBlock,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Head {
    pub expand: Linear,
    pub project: Linear,
}

fn fan_in_init(fan_in: usize) -> Init {
    Init::TruncNormal(1.0 / (fan_in as f64).sqrt())
}

/// Parameter layout and forward logic for one [`ModelConfig`].
#[derive(Debug, Clone)]
pub struct Tvsrn {
    config: ModelConfig,
    params: ParamBuilder,
    pub embed: Linear,
    pub encoder: Vec<AxisBlock>,
    pub fims: Vec<Fim>,
    pub head: Head,
}

impl Tvsrn {
    pub fn new(config: ModelConfig) -> Result<Self> {
        config.validate()?;
        let cfg = &config;
        let d = cfg.embed_dim;
        let dims = cfg.block_dims();
        let mut pb = ParamBuilder::new();
        let embed = Linear::declare_with(&mut pb, "embed", 1, d, true, fan_in_init(1));

        let vit = cfg.variant == Variant::VitEncoder;
        let encoder = (0..cfg.encoder_depth)
            .map(|i| AxisBlock {
                block: Stl2Block::declare(
                    &mut pb,
                    &format!("encoder.{i}"),
                    if vit {
                        BlockKind::PreNormDot
                    } else {
                        BlockKind::PostNormCosine
                    },
                    &dims,
                ),
                axis: if i % 2 == 0 {
                    TokenAxis::Width
                } else {
                    TokenAxis::Height
                },
                spec: WindowSpec {
                    window: cfg.window,
                    shift: if (i / 2) % 2 == 1 {
                        cfg.half_shift()
                    } else {
                        0
                    },
                },
                global: vit,
            })
            .collect();

        let fims = match cfg.variant {
            Variant::Full | Variant::NoTab => (0..cfg.n_fim)
                .map(|i| Fim {
                    tab: (cfg.variant == Variant::Full)
                        .then(|| Tab::declare(&mut pb, &format!("fim.{i}.tab"), cfg)),
                    refine: AxisBlock {
                        block: Stl2Block::declare(
                            &mut pb,
                            &format!("fim.{i}.stl"),
                            BlockKind::PostNormCosine,
                            &dims,
                        ),
                        axis: if i % 2 == 0 {
                            TokenAxis::Width
                        } else {
                            TokenAxis::Height
                        },
                        spec: WindowSpec {
                            window: cfg.window,
                            shift: if (i / 2) % 2 == 1 {
                                cfg.half_shift()
                            } else {
                                0
                            },
                        },
                        global: false,
                    },
                })
                .collect(),
            Variant::EncoderSubpixel | Variant::VitEncoder => Vec::new(),
        };

        let head = Head {
            expand: Linear::declare_with(
                &mut pb,
                "head.expand",
                d,
                cfg.r * d,
                true,
                fan_in_init(d),
            ),
            project: Linear::declare_with(&mut pb, "head.project", d, 1, true, fan_in_init(d)),
        };
        Ok(Tvsrn {
            config,
            params: pb,
            embed,
            encoder,
            fims,
            head,
        })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn param_specs(&self) -> &[ParamSpec] {
        self.params.specs()
    }

    /// Total number of scalar parameters.
    pub fn param_count(&self) -> usize {
        self.params
            .specs()
            .iter()
            .map(|s| s.shape.iter().product::<usize>())
            .sum()
    }

    /// Seeded initialization of every declared parameter.
    pub fn init_params<T: Float>(&self, seed: u64) -> ParamStore<T> {
        self.params.init(seed)
    }

    fn check_input(
        &self,
        g: &Graph<impl Float>,
        x: Var,
        channels: usize,
        what: &str,
    ) -> Result<()> {
        let sh = g.shape(x);
        if sh.len() != 5 || sh[1] != channels {
            return Err(TensorError::spec(
                "model",
                format!("{what} must be [B, {channels}, D, H, W], got {sh:?}"),
            )
            .into());
        }
        Ok(())
    }

    /// Channel-last encoder: `[B, D, H, W]` voxels → `[B, D, H, W, d]`.
    pub fn encode_cl<T: Float>(&self, g: &mut Graph<T>, p: &Bound, x_cl: Var) -> Result<Var> {
        let mut z = self.embed.forward(g, p, x_cl)?;
        for b in &self.encoder {
            z = b.forward(g, p, z)?;
        }
        Ok(z)
    }

    /// Channel-last decoder: `[B, D, H, W, d]` → `[B, r·D, H, W, 1]`.
    pub fn decode_cl<T: Float>(&self, g: &mut Graph<T>, p: &Bound, z: Var) -> Result<Var> {
        let mut z = z;
        for fim in &self.fims {
            if let Some(tab) = &fim.tab {
                z = tab.forward_cl(g, p, z)?;
            }
            z = fim.refine.forward(g, p, z)?;
        }
        let e = self.head.expand.forward(g, p, z)?;
        let up = depth_subpixel(g, e, self.config.r)?;
        Ok(self.head.project.forward(g, p, up)?)
    }

    /// `[B, 1, D, H, W]` → latent `[B, d, D, H, W]`.
    pub fn encode<T: Float>(&self, g: &mut Graph<T>, p: &Bound, x: Var) -> Result<Var> {
        self.check_input(g, x, 1, "input")?;
        let x_cl = g.permute(x, &[0, 2, 3, 4, 1])?;
        let z = self.encode_cl(g, p, x_cl)?;
        Ok(g.permute(z, &[0, 4, 1, 2, 3])?)
    }

    /// Latent `[B, d, D, H, W]` → `[B, 1, r·D, H, W]`.
    pub fn decode<T: Float>(&self, g: &mut Graph<T>, p: &Bound, latent: Var) -> Result<Var> {
        self.check_input(g, latent, self.config.embed_dim, "latent")?;
        let z = g.permute(latent, &[0, 2, 3, 4, 1])?;
        let y = self.decode_cl(g, p, z)?;
        Ok(g.permute(y, &[0, 4, 1, 2, 3])?)
    }

    /// `[B, 1, D, H, W]` → `[B, 1, r·D, H, W]`.
    pub fn forward<T: Float>(&self, g: &mut Graph<T>, p: &Bound, x: Var) -> Result<Var> {
        self.check_input(g, x, 1, "input")?;
        // With a single channel the channel-first and channel-last layouts
        // share the same buffer order, so plain reshapes suffice.
        let sh = g.shape(x).to_vec();
        let x_cl = g.reshape(x, &[sh[0], sh[2], sh[3], sh[4], 1])?;
        let z = self.encode_cl(g, p, x_cl)?;
        let y = self.decode_cl(g, p, z)?;
        Ok(g.reshape(y, &[sh[0], 1, self.config.r * sh[2], sh[3], sh[4]])?)
    }

    /// Runs the `index`-th decoder TAB on a channel-first `[B, d, D, H, W]`.
    pub fn tab_forward<T: Float>(
        &self,
        g: &mut Graph<T>,
        p: &Bound,
        index: usize,
        z: Var,
    ) -> Result<Var> {
        let tab = self
            .fims
            .get(index)
            .and_then(|f| f.tab.as_ref())
            .ok_or_else(|| ModelError::Config(format!("no TAB at decoder stage {index}")))?;
        self.check_input(g, z, self.config.embed_dim, "TAB input")?;
        let z_cl = g.permute(z, &[0, 2, 3, 4, 1])?;
        let y = tab.forward_cl(g, p, z_cl)?;
        Ok(g.permute(y, &[0, 4, 1, 2, 3])?)
    }

    /// Convenience inference on a plain tensor with freshly bound
    /// parameters; gradients are not tracked.
    pub fn predict<T: Float>(&self, params: &ParamStore<T>, x: &Tensor<T>) -> Result<Tensor<T>> {
        let mut g = Graph::new();
        let p = params.bind(&mut g, false);
        let xv = g.leaf(x, false);
        let y = self.forward(&mut g, &p, xv)?;
        Ok(g.value(y))
    }
}

/// Mean absolute error over all voxels.
pub fn l1_loss<T: Float>(g: &mut Graph<T>, y_hat: Var, y: Var) -> crate::tensor::Result<Var> {
    if g.shape(y_hat) != g.shape(y) {
        return Err(TensorError::ShapeMismatch {
            op: "l1_loss",
            lhs: g.shape(y_hat).to_vec(),
            rhs: g.shape(y).to_vec(),
        });
    }
    let d = g.sub(y_hat, y)?;
    let a = g.abs(d)?;
    g.mean_all(a)
}
