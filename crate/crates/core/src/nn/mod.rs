//! Parameterized building blocks shared by the encoder and decoder.

mod params;

pub use params::{Bound, Init, ParamBuilder, ParamId, ParamSpec, ParamStore};

use crate::tensor::{Float, Graph, Result, Tensor, TensorError, Var};

/// Std of the truncated-normal weight init.
pub const WEIGHT_STD: f64 = 0.02;

/// Logit added to attention pairs that straddle a cyclic-shift seam.
pub const MASK_LOGIT: f64 = -1e9;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Linear {
    pub weight: ParamId,
    pub bias: Option<ParamId>,
    pub in_features: usize,
    pub out_features: usize,
}

impl Linear {
    pub fn declare(
        pb: &mut ParamBuilder,
        name: &str,
        in_features: usize,
        out_features: usize,
        bias: bool,
    ) -> Self {
        Self::declare_with(
            pb,
            name,
            in_features,
            out_features,
            bias,
            Init::TruncNormal(WEIGHT_STD),
        )
    }

    pub fn declare_with(
        pb: &mut ParamBuilder,
        name: &str,
        in_features: usize,
        out_features: usize,
        bias: bool,
        weight_init: Init,
    ) -> Self {
        let weight = pb.add(
            format!("{name}.weight"),
            &[out_features, in_features],
            weight_init,
        );
        let bias = bias.then(|| pb.add(format!("{name}.bias"), &[out_features], Init::Zeros));
        Linear {
            weight,
            bias,
            in_features,
            out_features,
        }
    }

    pub fn forward<T: Float>(&self, g: &mut Graph<T>, p: &Bound, x: Var) -> Result<Var> {
        g.linear(x, p.var(self.weight), self.bias.map(|b| p.var(b)))
    }
}

/// Affine map over the trailing axis.
pub fn linear<T: Float>(g: &mut Graph<T>, x: Var, layer: &Linear, p: &Bound) -> Result<Var> {
    layer.forward(g, p, x)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LayerNorm {
    pub gain: ParamId,
    pub offset: ParamId,
    pub eps: f64,
}

impl LayerNorm {
    pub fn declare(pb: &mut ParamBuilder, name: &str, dim: usize) -> Self {
        Self::declare_with_gain(pb, name, dim, 1.0)
    }

    /// Like [`LayerNorm::declare`] with every gain initialized to `gain`.
    pub fn declare_with_gain(pb: &mut ParamBuilder, name: &str, dim: usize, gain: f64) -> Self {
        LayerNorm {
            gain: pb.add(format!("{name}.gain"), &[dim], Init::Const(gain)),
            offset: pb.add(format!("{name}.offset"), &[dim], Init::Zeros),
            eps: 1e-5,
        }
    }

    /// Normalizes the trailing axis.
    pub fn forward<T: Float>(&self, g: &mut Graph<T>, p: &Bound, x: Var) -> Result<Var> {
        let axis = g.shape(x).len() - 1;
        layer_norm(g, x, self, p, axis)
    }
}

pub fn layer_norm<T: Float>(
    g: &mut Graph<T>,
    x: Var,
    params: &LayerNorm,
    p: &Bound,
    axis: usize,
) -> Result<Var> {
    if g.shape(x).get(axis).is_some_and(|&e| e < 2) {
        return Err(TensorError::spec(
            "layer_norm",
            "normalized extent must be >= 2",
        ));
    }
    g.layer_norm(
        x,
        p.var(params.gain),
        p.var(params.offset),
        axis,
        T::from_f64(params.eps),
    )
}

/// Two-layer GELU feed-forward network.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Mlp {
    pub fc1: Linear,
    pub fc2: Linear,
}

impl Mlp {
    pub fn declare(pb: &mut ParamBuilder, name: &str, dim: usize, hidden: usize) -> Self {
        Mlp {
            fc1: Linear::declare(pb, &format!("{name}.fc1"), dim, hidden, true),
            fc2: Linear::declare(pb, &format!("{name}.fc2"), hidden, dim, true),
        }
    }

    pub fn forward<T: Float>(&self, g: &mut Graph<T>, p: &Bound, x: Var) -> Result<Var> {
        let h = self.fc1.forward(g, p, x)?;
        let h = g.gelu(h)?;
        self.fc2.forward(g, p, h)
    }
}

/// Window size and cyclic shift along a token axis.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct WindowSpec {
    pub window: usize,
    pub shift: usize,
}

/// A [`WindowSpec`] resolved against a concrete sequence length.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct WindowLayout {
    pub len: usize,
    pub padded_len: usize,
    pub window: usize,
    pub shift: usize,
}

impl WindowSpec {
    pub fn new(window: usize, shift: usize) -> Result<Self> {
        if window == 0 || shift >= window {
            return Err(TensorError::spec(
                "window",
                format!("need 0 <= shift < window, got window {window} shift {shift}"),
            ));
        }
        Ok(WindowSpec { window, shift })
    }

    /// Sequences no longer than the window form a single unshifted window;
    /// longer ones are edge-padded up to a multiple of the window.
    pub fn resolve(&self, len: usize) -> Result<WindowLayout> {
        if self.window == 0 || self.shift >= self.window || len == 0 {
            return Err(TensorError::spec(
                "window",
                format!("invalid spec {self:?} for length {len}"),
            ));
        }
        if len <= self.window {
            return Ok(WindowLayout {
                len,
                padded_len: len,
                window: len,
                shift: 0,
            });
        }
        Ok(WindowLayout {
            len,
            padded_len: len.div_ceil(self.window) * self.window,
            window: self.window,
            shift: self.shift,
        })
    }
}

impl WindowLayout {
    pub fn n_windows(&self) -> usize {
        self.padded_len / self.window
    }

    /// Additive mask `[n_windows, 1, w, w]` blocking pairs that were not
    /// neighbours before the cyclic shift; `None` without a shift.
    pub fn shift_mask<T: Float>(&self) -> Option<Tensor<T>> {
        if self.shift == 0 {
            return None;
        }
        let (w, nw, lp) = (self.window, self.n_windows(), self.padded_len);
        let wrapped = |p: usize| p + self.shift >= lp;
        let neg = T::from_f64(MASK_LOGIT);
        Some(Tensor::from_fn([nw, 1, w, w], |i| {
            let win = i / (w * w);
            let (qi, ki) = ((i / w) % w, i % w);
            if wrapped(win * w + qi) == wrapped(win * w + ki) {
                T::zero()
            } else {
                neg
            }
        }))
    }
}

/// `[B, L, d]` → `[B·nw, w, d]`: edge-pad, cyclically shift left by the
/// shift size, then cut consecutive windows.
pub fn window_partition<T: Float>(
    g: &mut Graph<T>,
    x: Var,
    spec: &WindowSpec,
) -> Result<(Var, WindowLayout)> {
    let sh = g.shape(x).to_vec();
    if sh.len() != 3 {
        return Err(TensorError::spec(
            "window_partition",
            format!("want [B, L, d], got {sh:?}"),
        ));
    }
    let layout = spec.resolve(sh[1])?;
    let padded = g.pad_edge(x, 1, 0, layout.padded_len - layout.len)?;
    let rolled = g.roll(padded, 1, -(layout.shift as isize))?;
    let windows = g.reshape(rolled, &[sh[0] * layout.n_windows(), layout.window, sh[2]])?;
    Ok((windows, layout))
}

/// Inverse of [`window_partition`], dropping the padded tail.
pub fn window_reverse<T: Float>(
    g: &mut Graph<T>,
    windows: Var,
    layout: &WindowLayout,
) -> Result<Var> {
    let sh = g.shape(windows).to_vec();
    let nw = layout.n_windows();
    if sh.len() != 3 || sh[1] != layout.window || sh[0] % nw != 0 {
        return Err(TensorError::spec(
            "window_reverse",
            format!("windows {sh:?} do not match {layout:?}"),
        ));
    }
    let seq = g.reshape(windows, &[sh[0] / nw, layout.padded_len, sh[2]])?;
    let unrolled = g.roll(seq, 1, layout.shift as isize)?;
    g.slice(unrolled, 1, 0, layout.len)
}

/// `[B, D, H, W, r·c]` → `[B, r·D, H, W, c]`: channel group `k` of slice `z`
/// becomes slice `r·z + k`.
pub fn depth_subpixel<T: Float>(g: &mut Graph<T>, x: Var, r: usize) -> Result<Var> {
    let sh = g.shape(x).to_vec();
    if sh.len() != 5 || r == 0 || sh[4] % r != 0 {
        return Err(TensorError::spec(
            "depth_subpixel",
            format!("channels of {sh:?} not divisible by factor {r}"),
        ));
    }
    let (b, d, h, w, c) = (sh[0], sh[1], sh[2], sh[3], sh[4] / r);
    if r == 1 {
        return Ok(x);
    }
    let split = g.reshape(x, &[b, d, h, w, r, c])?;
    let moved = g.permute(split, &[0, 1, 4, 2, 3, 5])?;
    g.reshape(moved, &[b, r * d, h, w, c])
}

/// Inverse of [`depth_subpixel`].
pub fn depth_unsubpixel<T: Float>(g: &mut Graph<T>, x: Var, r: usize) -> Result<Var> {
    let sh = g.shape(x).to_vec();
    if sh.len() != 5 || r == 0 || sh[1] % r != 0 {
        return Err(TensorError::spec(
            "depth_unsubpixel",
            format!("depth of {sh:?} not divisible by factor {r}"),
        ));
    }
    let (b, d, h, w, c) = (sh[0], sh[1] / r, sh[2], sh[3], sh[4]);
    if r == 1 {
        return Ok(x);
    }
    let split = g.reshape(x, &[b, d, r, h, w, c])?;
    let moved = g.permute(split, &[0, 1, 3, 4, 2, 5])?;
    g.reshape(moved, &[b, d, h, w, r * c])
}

#[cfg(test)]
mod tests {
    use super::*;

    fn bound_store(pb: &ParamBuilder, g: &mut Graph<f64>, seed: u64) -> (ParamStore<f64>, Bound) {
        let store = pb.init(seed);
        let b = store.bind(g, false);
        (store, b)
    }

    #[test]
    fn linear_identity_and_hand_case() {
        let mut pb = ParamBuilder::new();
        let lin = Linear::declare(&mut pb, "l", 3, 3, true);
        let mut store: ParamStore<f64> = pb.init(0);
        *store.get_mut(lin.weight) =
            Tensor::from_fn([3, 3], |i| if i % 4 == 0 { 1.0 } else { 0.0 });
        let mut g = Graph::new();
        let p = store.bind(&mut g, false);
        let x = g.leaf(&Tensor::from_fn([2, 3], |i| i as f64 - 2.0), false);
        let y = linear(&mut g, x, &lin, &p).unwrap();
        assert_eq!(g.data(y), g.data(x));

        let mut pb = ParamBuilder::new();
        let lin = Linear::declare(&mut pb, "l", 1, 1, true);
        let mut store: ParamStore<f64> = pb.init(0);
        *store.get_mut(lin.weight) = Tensor::scalar(2.0).reshape([1, 1]).unwrap();
        *store.get_mut(lin.bias.unwrap()) = Tensor::scalar(1.0);
        let mut g = Graph::new();
        let p = store.bind(&mut g, false);
        let x = g.leaf(&Tensor::scalar(3.0), false);
        let y = lin.forward(&mut g, &p, x).unwrap();
        assert_eq!(g.data(y), &[7.0]);
        let bad = g.leaf(&Tensor::zeros([2]), false);
        assert!(lin.forward(&mut g, &p, bad).is_err());
    }

    #[test]
    fn layer_norm_constant_input_maps_to_offset() {
        let mut pb = ParamBuilder::new();
        let ln = LayerNorm::declare(&mut pb, "n", 4);
        let mut g = Graph::new();
        let (_s, p) = bound_store(&pb, &mut g, 0);
        let x = g.leaf(&Tensor::full([3, 4], 2.5), false);
        let y = ln.forward(&mut g, &p, x).unwrap();
        assert!(g.data(y).iter().all(|&v| v == 0.0));
        let z = g.leaf(&Tensor::zeros([2, 4]), false);
        let yz = ln.forward(&mut g, &p, z).unwrap();
        assert!(g.data(yz).iter().all(|&v| v == 0.0));
    }

    #[test]
    fn single_window_when_window_equals_length() {
        let mut g = Graph::<f64>::new();
        let x = g.leaf(&Tensor::from_fn([2, 5, 3], |i| i as f64), false);
        let (w, layout) = window_partition(&mut g, x, &WindowSpec::new(5, 0).unwrap()).unwrap();
        assert_eq!(layout.n_windows(), 1);
        assert_eq!(g.data(w), g.data(x));
    }

    #[test]
    fn two_windows_round_trip() {
        let mut g = Graph::<f64>::new();
        let x = g.leaf(&Tensor::from_fn([1, 8, 2], |i| i as f64), false);
        let spec = WindowSpec::new(4, 2).unwrap();
        let (w, layout) = window_partition(&mut g, x, &spec).unwrap();
        assert_eq!(g.shape(w), &[2, 4, 2]);
        let back = window_reverse(&mut g, w, &layout).unwrap();
        assert_eq!(g.data(back), g.data(x));
    }

    #[test]
    fn padded_round_trip_recovers_original_positions() {
        let mut g = Graph::<f64>::new();
        let x = g.leaf(&Tensor::from_fn([1, 7, 1], |i| i as f64 + 0.5), false);
        let (w, layout) = window_partition(&mut g, x, &WindowSpec::new(4, 0).unwrap()).unwrap();
        assert_eq!(layout.padded_len, 8);
        // edge replication: last padded token repeats position 6
        assert_eq!(g.data(w), &[0.5, 1.5, 2.5, 3.5, 4.5, 5.5, 6.5, 6.5]);
        let back = window_reverse(&mut g, w, &layout).unwrap();
        assert_eq!(g.data(back), g.data(x));
    }

    #[test]
    fn invalid_window_specs() {
        assert!(WindowSpec::new(4, 4).is_err());
        assert!(WindowSpec::new(0, 0).is_err());
    }

    #[test]
    fn shift_mask_blocks_only_wrapped_pairs() {
        let layout = WindowSpec::new(4, 2).unwrap().resolve(8).unwrap();
        let m: Tensor<f64> = layout.shift_mask().unwrap();
        assert_eq!(m.shape(), &[2, 1, 4, 4]);
        // window 0 holds original tokens 2..6: no seam
        assert!(m.data()[..16].iter().all(|&v| v == 0.0));
        // window 1 holds 6,7 | 0,1
        let w1 = &m.data()[16..];
        assert_eq!(w1[1], 0.0);
        assert_eq!(w1[2], MASK_LOGIT);
        assert_eq!(w1[3 * 4 + 2], 0.0);
        assert!(WindowSpec::new(4, 0)
            .unwrap()
            .resolve(8)
            .unwrap()
            .shift_mask::<f64>()
            .is_none());
    }

    #[test]
    fn depth_subpixel_definition_trace() {
        let mut g = Graph::<f64>::new();
        // B=1, D=2, H=W=1, r=2, c=1: slice z holds channels [a_z, b_z]
        let x = g.leaf(
            &Tensor::new([1, 2, 1, 1, 2], vec![1.0, 2.0, 3.0, 4.0]).unwrap(),
            false,
        );
        let y = depth_subpixel(&mut g, x, 2).unwrap();
        assert_eq!(g.shape(y), &[1, 4, 1, 1, 1]);
        assert_eq!(g.data(y), &[1.0, 2.0, 3.0, 4.0]);
        let id = depth_subpixel(&mut g, x, 1).unwrap();
        assert_eq!(g.data(id), g.data(x));
        let inv = depth_unsubpixel(&mut g, y, 2).unwrap();
        assert_eq!(g.data(inv), g.data(x));
        let odd = g.leaf(&Tensor::zeros([1, 1, 1, 1, 3]), false);
        assert!(depth_subpixel(&mut g, odd, 2).is_err());
    }

    #[test]
    fn depth_subpixel_interleaves_channel_groups() {
        let mut g = Graph::<f64>::new();
        let (b, d, h, w, r, c) = (1, 2, 2, 3, 3, 2);
        let x = g.leaf(&Tensor::from_fn([b, d, h, w, r * c], |i| i as f64), false);
        let y = depth_subpixel(&mut g, x, r).unwrap();
        let xd = g.data(x);
        let yd = g.data(y);
        for z in 0..d {
            for k in 0..r {
                for yy in 0..h {
                    for xx in 0..w {
                        for ch in 0..c {
                            let src = (((z * h + yy) * w + xx) * r + k) * c + ch;
                            let dst = ((((z * r + k) * h) + yy) * w + xx) * c + ch;
                            assert_eq!(yd[dst], xd[src]);
                        }
                    }
                }
            }
        }
    }
}
