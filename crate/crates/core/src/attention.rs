//! Windowed multi-head attention and the transformer block built on it.
//!
//! The main block ([`Stl2Block`] in [`BlockKind::PostNormCosine`] mode) uses
//! scaled cosine similarity with a learnable per-head temperature, an
//! MLP-generated relative positional bias over log-spaced offsets, and
//! normalization *after* each sublayer inside the residual branch. A plain
//! pre-norm dot-product block is provided for the global-attention baseline.
//!
//! All attention runs over 1D token sequences `[B, L, d]`; callers permute
//! the volume so the attended axis sits at position 1.

use crate::nn::{
    window_partition, window_reverse, Bound, Init, LayerNorm, Linear, Mlp, ParamBuilder,
    WindowLayout, WindowSpec,
};
use crate::tensor::{Float, Graph, Result, Tensor, TensorError, Var};

/// Floor applied to the effective temperature.
pub const TAU_MIN: f64 = 0.01;
/// Guard on query/key norms before cosine normalization.
pub const COSINE_EPS: f64 = 1e-12;
/// Hidden width of the positional-bias MLP.
pub const BIAS_HIDDEN: usize = 64;

/// Log-spaced signed relative offsets for every ordered pair of a window.
#[derive(Debug, Clone, PartialEq)]
pub struct RelativeCoordinateTable {
    window: usize,
    values: Vec<f64>,
}

impl RelativeCoordinateTable {
    /// Entry `(i, j)` is `sign(i−j)·log2(1+|i−j|) / log2(window)`, which
    /// lies in `[−1, 1]`. A window of one token yields the single entry 0.
    pub fn new(window: usize) -> Self {
        let norm = (window as f64).log2();
        let values = (0..window * window)
            .map(|ij| {
                let delta = (ij / window) as f64 - (ij % window) as f64;
                if window < 2 || delta == 0.0 {
                    0.0
                } else {
                    delta.signum() * (1.0 + delta.abs()).log2() / norm
                }
            })
            .collect();
        RelativeCoordinateTable { window, values }
    }

    pub fn window(&self) -> usize {
        self.window
    }

    pub fn value(&self, i: usize, j: usize) -> f64 {
        self.values[i * self.window + j]
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    /// `[window², 1]`, one axis per row.
    pub fn to_tensor<T: Float>(&self) -> Tensor<T> {
        Tensor::from_fn([self.window * self.window, 1], |i| {
            T::from_f64(self.values[i])
        })
    }
}

/// Two-layer MLP mapping a relative coordinate to one bias per head.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BiasMlp {
    pub fc1: Linear,
    pub fc2: Linear,
}

impl BiasMlp {
    pub fn declare(pb: &mut ParamBuilder, name: &str, hidden: usize, heads: usize) -> Self {
        BiasMlp {
            // A single scalar input: unit-scale weights spread the hidden
            // units' kinks across the coordinate range.
            fc1: Linear::declare_with(pb, &format!("{name}.fc1"), 1, hidden, true, Init::TruncNormal(1.0)),
            fc2: Linear::declare(pb, &format!("{name}.fc2"), hidden, heads, false),
        }
    }
}

/// Bias `[1, heads, w, w]` from the coordinate table through the MLP.
pub fn positional_bias<T: Float>(
    g: &mut Graph<T>,
    table: &RelativeCoordinateTable,
    mlp: &BiasMlp,
    p: &Bound,
) -> Result<Var> {
    let w = table.window();
    let coords = g.constant(&table.to_tensor());
    let h = mlp.fc1.forward(g, p, coords)?;
    let h = g.gelu(h)?;
    let per_pair = mlp.fc2.forward(g, p, h)?; // [w², heads]
    let heads = mlp.fc2.out_features;
    let by_head = g.transpose_last(per_pair)?;
    g.reshape(by_head, &[1, heads, w, w])
}

/// Result of an attention evaluation, with the softmax weights kept for
/// inspection.
#[derive(Debug, Clone, Copy)]
pub struct AttentionOutput {
    /// `[N, heads, t, head_dim]`
    pub out: Var,
    /// `[N, heads, t, t]`, rows sum to one over the last axis.
    pub weights: Var,
}

/// Effective per-head temperature `max(exp(log_tau), tau_min)`.
pub fn effective_tau<T: Float>(g: &mut Graph<T>, log_tau: Var, tau_min: f64) -> Result<Var> {
    let tau = g.exp(log_tau)?;
    g.clamp_min(tau, T::from_f64(tau_min))
}

fn unit_rows<T: Float>(g: &mut Graph<T>, x: Var) -> Result<Var> {
    let axis = g.shape(x).len() - 1;
    let n = g.l2_norm(x, axis)?;
    let n = g.clamp_min(n, T::from_f64(COSINE_EPS))?;
    g.div(x, n)
}

/// Pairwise cosine similarity `[..., t, t]` of the rows of `q` and `k`.
pub fn cosine_similarity<T: Float>(g: &mut Graph<T>, q: Var, k: Var) -> Result<Var> {
    let qn = unit_rows(g, q)?;
    let kn = unit_rows(g, k)?;
    let kt = g.transpose_last(kn)?;
    g.matmul(qn, kt)
}

/// Adds a `[nw, 1, t, t]` window mask to logits `[B·nw, h, t, t]`.
fn add_window_mask<T: Float>(g: &mut Graph<T>, logits: Var, mask: Var) -> Result<Var> {
    let ls = g.shape(logits).to_vec();
    let ms = g.shape(mask).to_vec();
    if ms.len() != 4 || ms[1] != 1 || ms[2..] != ls[2..] || ls[0] % ms[0] != 0 {
        return Err(TensorError::ShapeMismatch {
            op: "attention_mask",
            lhs: ls,
            rhs: ms,
        });
    }
    let nw = ms[0];
    let grouped = g.reshape(logits, &[ls[0] / nw, nw, ls[1], ls[2], ls[3]])?;
    let m = g.reshape(mask, &[1, nw, 1, ms[2], ms[3]])?;
    let sum = g.add(grouped, m)?;
    g.reshape(sum, &ls)
}

/// `softmax(cos(q, k)/τ + bias + mask)·v` with `q, k, v: [N, h, t, hd]`,
/// `log_tau: [h]`, `bias: [1, h, t, t]` and `mask: [nw, 1, t, t]`.
#[allow(clippy::too_many_arguments)]
pub fn scaled_cosine_attention<T: Float>(
    g: &mut Graph<T>,
    q: Var,
    k: Var,
    v: Var,
    log_tau: Var,
    tau_min: f64,
    bias: Option<Var>,
    mask: Option<Var>,
) -> Result<AttentionOutput> {
    let qs = g.shape(q).to_vec();
    if qs.len() != 4 || g.shape(k) != qs.as_slice() || g.shape(v) != qs.as_slice() {
        return Err(TensorError::ShapeMismatch {
            op: "cosine_attention",
            lhs: qs,
            rhs: g.shape(k).to_vec(),
        });
    }
    let heads = qs[1];
    if g.shape(log_tau) != [heads] {
        return Err(TensorError::ShapeMismatch {
            op: "cosine_attention",
            lhs: vec![heads],
            rhs: g.shape(log_tau).to_vec(),
        });
    }
    let cos = cosine_similarity(g, q, k)?;
    let tau = effective_tau(g, log_tau, tau_min)?;
    let inv_tau = g.recip(tau)?;
    let inv_tau = g.reshape(inv_tau, &[1, heads, 1, 1])?;
    let mut logits = g.mul(cos, inv_tau)?;
    if let Some(b) = bias {
        logits = g.add(logits, b)?;
    }
    if let Some(m) = mask {
        logits = add_window_mask(g, logits, m)?;
    }
    let weights = g.softmax(logits, 3)?;
    let out = g.matmul(weights, v)?;
    Ok(AttentionOutput { out, weights })
}

/// `softmax(q·kᵀ/√hd + mask)·v`, the conventional transformer attention.
pub fn dot_product_attention<T: Float>(
    g: &mut Graph<T>,
    q: Var,
    k: Var,
    v: Var,
    mask: Option<Var>,
) -> Result<AttentionOutput> {
    let qs = g.shape(q).to_vec();
    if qs.len() != 4 || g.shape(k) != qs.as_slice() || g.shape(v) != qs.as_slice() {
        return Err(TensorError::ShapeMismatch {
            op: "dot_attention",
            lhs: qs,
            rhs: g.shape(k).to_vec(),
        });
    }
    let kt = g.transpose_last(k)?;
    let raw = g.matmul(q, kt)?;
    let mut logits = g.scale(raw, T::from_f64(1.0 / (qs[3] as f64).sqrt()))?;
    if let Some(m) = mask {
        logits = add_window_mask(g, logits, m)?;
    }
    let weights = g.softmax(logits, 3)?;
    let out = g.matmul(weights, v)?;
    Ok(AttentionOutput { out, weights })
}

/// Similarity used inside [`WindowAttention`].
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Similarity {
    /// Scaled cosine with learnable temperature and positional bias.
    Cosine {
        log_tau: crate::nn::ParamId,
        bias: BiasMlp,
        tau_min: f64,
    },
    Dot,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct WindowAttention {
    pub qkv: Linear,
    pub proj: Linear,
    pub heads: usize,
    pub dim: usize,
    pub similarity: Similarity,
}

impl WindowAttention {
    pub fn declare_cosine(
        pb: &mut ParamBuilder,
        name: &str,
        dim: usize,
        heads: usize,
        bias_hidden: usize,
        tau_min: f64,
    ) -> Self {
        assert!(
            heads > 0 && dim % heads == 0,
            "dim {dim} not divisible by heads {heads}"
        );
        WindowAttention {
            qkv: Linear::declare(pb, &format!("{name}.qkv"), dim, 3 * dim, true),
            proj: Linear::declare(pb, &format!("{name}.proj"), dim, dim, true),
            heads,
            dim,
            similarity: Similarity::Cosine {
                // log τ = 0 so the effective temperature starts at 1
                log_tau: pb.add(format!("{name}.log_tau"), &[heads], Init::Zeros),
                bias: BiasMlp::declare(pb, &format!("{name}.bias_mlp"), bias_hidden, heads),
                tau_min,
            },
        }
    }

    pub fn declare_dot(pb: &mut ParamBuilder, name: &str, dim: usize, heads: usize) -> Self {
        assert!(
            heads > 0 && dim % heads == 0,
            "dim {dim} not divisible by heads {heads}"
        );
        WindowAttention {
            qkv: Linear::declare(pb, &format!("{name}.qkv"), dim, 3 * dim, true),
            proj: Linear::declare(pb, &format!("{name}.proj"), dim, dim, true),
            heads,
            dim,
            similarity: Similarity::Dot,
        }
    }

    /// Attention over windows `[N, w, d]`; returns the projected output and
    /// the attention weights.
    pub fn forward_windows<T: Float>(
        &self,
        g: &mut Graph<T>,
        p: &Bound,
        windows: Var,
        mask: Option<Var>,
    ) -> Result<(Var, Var)> {
        let sh = g.shape(windows).to_vec();
        if sh.len() != 3 || sh[2] != self.dim {
            return Err(TensorError::ShapeMismatch {
                op: "window_attention",
                lhs: sh,
                rhs: vec![self.dim],
            });
        }
        let (n, w, hd) = (sh[0], sh[1], self.dim / self.heads);
        let qkv = self.qkv.forward(g, p, windows)?;
        let qkv = g.reshape(qkv, &[n, w, 3, self.heads, hd])?;
        let qkv = g.permute(qkv, &[2, 0, 3, 1, 4])?;
        let mut part = |i: usize| -> Result<Var> {
            let s = g.slice(qkv, 0, i, 1)?;
            g.reshape(s, &[n, self.heads, w, hd])
        };
        let (q, k, v) = (part(0)?, part(1)?, part(2)?);
        let att = match self.similarity {
            Similarity::Cosine {
                log_tau,
                bias,
                tau_min,
            } => {
                let table = RelativeCoordinateTable::new(w);
                let b = positional_bias(g, &table, &bias, p)?;
                scaled_cosine_attention(g, q, k, v, p.var(log_tau), tau_min, Some(b), mask)?
            }
            Similarity::Dot => dot_product_attention(g, q, k, v, mask)?,
        };
        let merged = g.permute(att.out, &[0, 2, 1, 3])?;
        let merged = g.reshape(merged, &[n, w, self.dim])?;
        Ok((self.proj.forward(g, p, merged)?, att.weights))
    }

    /// Shifted-window attention over a token sequence `[B, L, d]`.
    pub fn forward<T: Float>(
        &self,
        g: &mut Graph<T>,
        p: &Bound,
        x: Var,
        spec: &WindowSpec,
    ) -> Result<Var> {
        Ok(self.forward_with_weights(g, p, x, spec)?.0)
    }

    /// Like [`WindowAttention::forward`], also returning the weights
    /// `[B·nw, heads, w, w]` and the resolved layout.
    pub fn forward_with_weights<T: Float>(
        &self,
        g: &mut Graph<T>,
        p: &Bound,
        x: Var,
        spec: &WindowSpec,
    ) -> Result<(Var, Var, WindowLayout)> {
        let (windows, layout) = window_partition(g, x, spec)?;
        let mask = layout.shift_mask::<T>().map(|m| g.constant(&m));
        let (out, weights) = self.forward_windows(g, p, windows, mask)?;
        Ok((window_reverse(g, out, &layout)?, weights, layout))
    }
}

/// Sublayer arrangement of a transformer block.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum BlockKind {
    /// `x + LN(attn(x))`, then `+ LN(mlp(·))`, with cosine attention.
    PostNormCosine,
    /// `x + attn(LN(x))`, then `+ mlp(LN(·))`, with dot-product attention.
    PreNormDot,
}

/// Attention + MLP transformer layer over `[B, L, d]` token sequences.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Stl2Block {
    pub kind: BlockKind,
    pub attn: WindowAttention,
    pub norm1: LayerNorm,
    pub mlp: Mlp,
    pub norm2: LayerNorm,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BlockDims {
    pub dim: usize,
    pub heads: usize,
    pub mlp_hidden: usize,
    pub bias_hidden: usize,
    pub tau_min: f64,
}

impl BlockDims {
    pub fn new(dim: usize, heads: usize) -> Self {
        BlockDims {
            dim,
            heads,
            mlp_hidden: 2 * dim,
            bias_hidden: BIAS_HIDDEN,
            tau_min: TAU_MIN,
        }
    }
}

/// Initial gain of post-norm LayerNorms. Normalized branch outputs start
/// at unit scale otherwise, swamping the residual stream at step 0.
pub const POST_NORM_GAIN: f64 = 0.3;

impl BlockKind {
    fn norm_gain(self) -> f64 {
        match self {
            BlockKind::PostNormCosine => POST_NORM_GAIN,
            BlockKind::PreNormDot => 1.0,
        }
    }
}

impl Stl2Block {
    pub fn declare(pb: &mut ParamBuilder, name: &str, kind: BlockKind, dims: &BlockDims) -> Self {
        let attn = match kind {
            BlockKind::PostNormCosine => WindowAttention::declare_cosine(
                pb,
                &format!("{name}.attn"),
                dims.dim,
                dims.heads,
                dims.bias_hidden,
                dims.tau_min,
            ),
            BlockKind::PreNormDot => {
                WindowAttention::declare_dot(pb, &format!("{name}.attn"), dims.dim, dims.heads)
            }
        };
        Stl2Block {
            kind,
            attn,
            norm1: LayerNorm::declare_with_gain(pb, &format!("{name}.norm1"), dims.dim, kind.norm_gain()),
            mlp: Mlp::declare(pb, &format!("{name}.mlp"), dims.dim, dims.mlp_hidden),
            norm2: LayerNorm::declare_with_gain(pb, &format!("{name}.norm2"), dims.dim, kind.norm_gain()),
        }
    }

    pub fn forward<T: Float>(
        &self,
        g: &mut Graph<T>,
        p: &Bound,
        x: Var,
        spec: &WindowSpec,
    ) -> Result<Var> {
        match self.kind {
            BlockKind::PostNormCosine => {
                let a = self.attn.forward(g, p, x, spec)?;
                let a = self.norm1.forward(g, p, a)?;
                let y = g.add(x, a)?;
                let m = self.mlp.forward(g, p, y)?;
                let m = self.norm2.forward(g, p, m)?;
                g.add(y, m)
            }
            BlockKind::PreNormDot => {
                let n = self.norm1.forward(g, p, x)?;
                let a = self.attn.forward(g, p, n, spec)?;
                let y = g.add(x, a)?;
                let n = self.norm2.forward(g, p, y)?;
                let m = self.mlp.forward(g, p, n)?;
                g.add(y, m)
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::ParamStore;

    fn rand_tensor(shape: &[usize], seed: u64) -> Tensor<f64> {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
        Tensor::from_fn(shape.to_vec(), |_| rng.gen_range(-1.0..1.0))
    }

    #[test]
    fn coordinate_table_values() {
        let t = RelativeCoordinateTable::new(4);
        assert_eq!(t.value(2, 2), 0.0);
        assert!((t.value(3, 0) - 1.0).abs() < 1e-15);
        assert!((t.value(0, 3) + 1.0).abs() < 1e-15);
        assert!((t.value(1, 0) - 0.5).abs() < 1e-15);
        assert!(t.values().iter().all(|v| v.abs() <= 1.0));
        assert_eq!(RelativeCoordinateTable::new(1).values(), &[0.0]);
    }

    #[test]
    fn bias_is_shift_equivariant_and_zero_without_weights() {
        let mut pb = ParamBuilder::new();
        let mlp = BiasMlp::declare(&mut pb, "b", 16, 2);
        let store: ParamStore<f64> = pb.init(3);
        let mut g = Graph::new();
        let p = store.bind(&mut g, false);
        let table = RelativeCoordinateTable::new(5);
        let b = positional_bias(&mut g, &table, &mlp, &p).unwrap();
        let d = g.data(b);
        for h in 0..2 {
            for i in 0..4 {
                for j in 0..4 {
                    let at = |i: usize, j: usize| d[(h * 5 + i) * 5 + j];
                    assert_eq!(at(i, j), at(i + 1, j + 1));
                }
            }
        }

        let mut zeroed = store.clone();
        for t in zeroed.tensors_mut() {
            t.data_mut().iter_mut().for_each(|v| *v = 0.0);
        }
        let mut g = Graph::new();
        let p = zeroed.bind(&mut g, false);
        let b = positional_bias(&mut g, &table, &mlp, &p).unwrap();
        assert!(g.data(b).iter().all(|&v| v == 0.0));
    }

    #[test]
    fn identical_keys_give_uniform_weights() {
        let mut g = Graph::<f64>::new();
        let q = g.leaf(&rand_tensor(&[1, 1, 3, 4], 1), false);
        let k = g.leaf(
            &Tensor::from_fn([1, 1, 3, 4], |i| (i % 4) as f64 + 1.0),
            false,
        );
        let v = g.leaf(
            &Tensor::from_fn([1, 1, 3, 4], |i| ((i % 4) as f64) * 2.0),
            false,
        );
        let lt = g.leaf(&Tensor::zeros([1]), false);
        let att = scaled_cosine_attention(&mut g, q, k, v, lt, TAU_MIN, None, None).unwrap();
        for &w in g.data(att.weights) {
            assert!((w - 1.0 / 3.0).abs() < 1e-12);
        }
        for (i, &o) in g.data(att.out).iter().enumerate() {
            assert!((o - (i % 4) as f64 * 2.0).abs() < 1e-12);
        }
    }

    #[test]
    fn matches_brute_force_three_tokens() {
        let (qt, kt, vt) = (
            rand_tensor(&[1, 1, 3, 2], 10),
            rand_tensor(&[1, 1, 3, 2], 11),
            rand_tensor(&[1, 1, 3, 2], 12),
        );
        let log_tau = 0.3f64;
        let bias = rand_tensor(&[1, 1, 3, 3], 13);
        let mut g = Graph::<f64>::new();
        let (q, k, v) = (g.leaf(&qt, false), g.leaf(&kt, false), g.leaf(&vt, false));
        let lt = g.leaf(&Tensor::scalar(log_tau), false);
        let b = g.leaf(&bias, false);
        let att = scaled_cosine_attention(&mut g, q, k, v, lt, TAU_MIN, Some(b), None).unwrap();
        let out = g.data(att.out);

        let row = |t: &Tensor<f64>, i: usize| [t.data()[2 * i], t.data()[2 * i + 1]];
        let tau = log_tau.exp().max(TAU_MIN);
        for i in 0..3 {
            let qi = row(&qt, i);
            let logits: Vec<f64> = (0..3)
                .map(|j| {
                    let kj = row(&kt, j);
                    let dot = qi[0] * kj[0] + qi[1] * kj[1];
                    let nq = (qi[0] * qi[0] + qi[1] * qi[1]).sqrt();
                    let nk = (kj[0] * kj[0] + kj[1] * kj[1]).sqrt();
                    dot / (nq * nk) / tau + bias.data()[i * 3 + j]
                })
                .collect();
            let z: f64 = logits.iter().map(|l| l.exp()).sum();
            for c in 0..2 {
                let expect: f64 = (0..3).map(|j| logits[j].exp() / z * row(&vt, j)[c]).sum();
                assert!((out[2 * i + c] - expect).abs() < 1e-6);
            }
        }
    }

    #[test]
    fn block_with_zeroed_output_projections_is_identity() {
        let mut pb = ParamBuilder::new();
        let block = Stl2Block::declare(
            &mut pb,
            "blk",
            BlockKind::PostNormCosine,
            &BlockDims::new(8, 2),
        );
        let mut store: ParamStore<f64> = pb.init(5);
        for id in [block.attn.proj.weight, block.mlp.fc2.weight] {
            store
                .get_mut(id)
                .data_mut()
                .iter_mut()
                .for_each(|v| *v = 0.0);
        }
        let mut g = Graph::new();
        let p = store.bind(&mut g, false);
        let x = g.leaf(&rand_tensor(&[2, 8, 8], 6), false);
        let y = block
            .forward(&mut g, &p, x, &WindowSpec::new(4, 2).unwrap())
            .unwrap();
        assert_eq!(g.data(y), g.data(x));
    }

    #[test]
    fn block_preserves_shape() {
        for kind in [BlockKind::PostNormCosine, BlockKind::PreNormDot] {
            for (b, l, d) in [(1, 4, 8), (2, 8, 16), (1, 16, 8), (2, 16, 16)] {
                let mut pb = ParamBuilder::new();
                let block = Stl2Block::declare(&mut pb, "blk", kind, &BlockDims::new(d, 2));
                let store: ParamStore<f32> = pb.init(0);
                let mut g = Graph::new();
                let p = store.bind(&mut g, false);
                let x = g.leaf(&rand_tensor(&[b, l, d], 1).cast(), false);
                let y = block
                    .forward(&mut g, &p, x, &WindowSpec::new(4, 2).unwrap())
                    .unwrap();
                assert_eq!(g.shape(y), &[b, l, d]);
            }
        }
    }

    #[test]
    fn shifted_windows_never_attend_across_the_seam() {
        let mut pb = ParamBuilder::new();
        let attn = WindowAttention::declare_cosine(&mut pb, "a", 4, 1, 8, TAU_MIN);
        let store: ParamStore<f64> = pb.init(2);
        let mut g = Graph::new();
        let p = store.bind(&mut g, false);
        let x = g.leaf(&rand_tensor(&[1, 8, 4], 3), false);
        let (_, w, layout) = attn
            .forward_with_weights(&mut g, &p, x, &WindowSpec::new(4, 2).unwrap())
            .unwrap();
        let mask = layout.shift_mask::<f64>().unwrap();
        for (wt, m) in g.data(w).iter().zip(mask.data()) {
            if *m != 0.0 {
                assert!(*wt < 1e-12);
            }
        }
    }
}
