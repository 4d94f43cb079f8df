//! Three-stage shifted-window transformer producing a fine-to-coarse feature
//! pyramid. Non-shifting blocks may carry a 2x2 convolution inside their
//! feed-forward network; every non-shifting block is followed by a shifting
//! one.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::{join, Init, LayerNorm, Linear, MultiHeadAttention};
use crate::numerics::{Ctx, Real, Tensor, Var};

/// Additive mask value separating shifted-window regions.
pub const MASK_NEG: f64 = -1e9;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StageConfig {
    pub num_blocks: usize,
    pub window_size: usize,
    pub heads: usize,
    pub conv_ffn_enabled: bool,
    pub dim: usize,
}

impl StageConfig {
    fn validate(&self, stage: usize) -> Result<()> {
        if self.num_blocks == 0 || !self.num_blocks.is_multiple_of(2) {
            return Err(Error::Config(format!(
                "stage {stage}: block count {} must be even and positive",
                self.num_blocks
            )));
        }
        if self.window_size == 0 || self.heads == 0 || !self.dim.is_multiple_of(self.heads) {
            return Err(Error::Config(format!(
                "stage {stage}: invalid window {} / heads {} / dim {}",
                self.window_size, self.heads, self.dim
            )));
        }
        Ok(())
    }
}

/// Default three-stage layout: more blocks at the finest scale, conv FFN in
/// stages 1 and 2.
pub fn default_stages(dim: usize, window: usize) -> Vec<StageConfig> {
    [(4, 2, true), (2, 4, true), (2, 8, false)]
        .iter()
        .enumerate()
        .map(|(i, &(num_blocks, heads, conv))| StageConfig {
            num_blocks,
            window_size: window,
            heads,
            conv_ffn_enabled: conv,
            dim: dim << i,
        })
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum BlockKind {
    NonShifting,
    Shifting,
}

/// Effective window and shift for a grid: a window that covers the grid
/// collapses to the grid and disables shifting.
pub fn window_geometry(
    h: usize,
    w: usize,
    window: usize,
    kind: BlockKind,
) -> Result<(usize, usize)> {
    let win = window.min(h).min(w);
    if win == 0 || !h.is_multiple_of(win) || !w.is_multiple_of(win) {
        return Err(Error::Config(format!(
            "grid {h}x{w} is not divisible by window {win}"
        )));
    }
    let shift = match kind {
        BlockKind::Shifting if window < h.min(w) => win / 2,
        _ => 0,
    };
    Ok((win, shift))
}

/// Flat token index (`y * w + x`) for every (window, slot) after rolling the
/// grid by `(-shift, -shift)`.
pub fn window_token_index(h: usize, w: usize, win: usize, shift: usize) -> Vec<usize> {
    let (nh, nw) = (h / win, w / win);
    let mut idx = Vec::with_capacity(h * w);
    for wy in 0..nh {
        for wx in 0..nw {
            for iy in 0..win {
                for ix in 0..win {
                    let y = (wy * win + iy + shift) % h;
                    let x = (wx * win + ix + shift) % w;
                    idx.push(y * w + x);
                }
            }
        }
    }
    idx
}

fn expand_channels(tokens: &[usize], c: usize) -> Vec<usize> {
    tokens
        .iter()
        .flat_map(|&t| (0..c).map(move |ch| t * c + ch))
        .collect()
}

fn invert(perm: &[usize]) -> Vec<usize> {
    let mut inv = vec![0; perm.len()];
    for (i, &p) in perm.iter().enumerate() {
        inv[p] = i;
    }
    inv
}

/// `[H, W, c] -> [nW, win*win, c]`, windows and slots in row-major order,
/// after a cyclic roll by `(-shift, -shift)`.
pub fn window_partition<T: Real>(
    cx: &mut Ctx<'_, T>,
    x: Var,
    win: usize,
    shift: usize,
) -> Result<Var> {
    let s = cx.g.shape(x).to_vec();
    if s.len() != 3 || win == 0 || !s[0].is_multiple_of(win) || !s[1].is_multiple_of(win) {
        return Err(Error::dim("window_partition", &s, &[win]));
    }
    let (h, w, c) = (s[0], s[1], s[2]);
    let idx = expand_channels(&window_token_index(h, w, win, shift), c);
    cx.g.gather(x, idx, &[(h / win) * (w / win), win * win, c])
}

/// Inverse of [`window_partition`] (including the roll back).
pub fn window_reverse<T: Real>(
    cx: &mut Ctx<'_, T>,
    x: Var,
    h: usize,
    w: usize,
    win: usize,
    shift: usize,
) -> Result<Var> {
    let s = cx.g.shape(x).to_vec();
    if s.len() != 3
        || win == 0
        || !h.is_multiple_of(win)
        || !w.is_multiple_of(win)
        || s[0] * s[1] != h * w
    {
        return Err(Error::dim("window_reverse", &s, &[h, w, win]));
    }
    let c = s[2];
    let inv = invert(&window_token_index(h, w, win, shift));
    cx.g.gather(x, expand_channels(&inv, c), &[h, w, c])
}

/// Additive mask `[nW, win*win, win*win]`: 0 between tokens that came from
/// the same region of the un-rolled grid, [`MASK_NEG`] otherwise.
pub fn shifted_attention_mask<T: Real>(h: usize, w: usize, win: usize, shift: usize) -> Tensor<T> {
    let n = win * win;
    let nwin = (h / win) * (w / win);
    if shift == 0 {
        return Tensor::zeros([nwin, n, n]);
    }
    let band = |v: usize, ext: usize| -> usize {
        if v < ext - win {
            0
        } else if v < ext - shift {
            1
        } else {
            2
        }
    };
    let label: Vec<usize> = (0..h * w)
        .map(|t| band(t / w, h) * 3 + band(t % w, w))
        .collect();
    let idx = window_token_index(h, w, win, shift);
    let mut data = vec![T::zero(); nwin * n * n];
    for wi in 0..nwin {
        let toks = &idx[wi * n..(wi + 1) * n];
        for i in 0..n {
            for j in 0..n {
                if label[toks[i]] != label[toks[j]] {
                    data[(wi * n + i) * n + j] = T::c(MASK_NEG);
                }
            }
        }
    }
    Tensor::new([nwin, n, n], data).expect("mask shape")
}

#[derive(Debug, Clone)]
pub enum FeedForward {
    /// `fc -> gelu -> fc`, width kept at `dim`.
    Plain { fc1: Linear, fc2: Linear },
    /// `fc -> gelu -> conv2x2 -> gelu -> fc`, width kept at `dim`.
    Conv {
        fc1: Linear,
        kernel: String,
        bias: String,
        fc2: Linear,
    },
}

impl FeedForward {
    pub fn new<R: Rng>(
        init: &mut Init<'_, R>,
        prefix: &str,
        dim: usize,
        conv: bool,
    ) -> Result<Self> {
        let fc1 = Linear::new(init, &join(prefix, "fc1"), dim, dim, true)?;
        let ffn = if conv {
            let bound = 1.0 / ((4 * dim) as f64).sqrt();
            let kernel = init.uniform(&join(prefix, "conv.weight"), &[2, 2, dim, dim], bound)?;
            let bias = init.add(&join(prefix, "conv.bias"), Tensor::zeros([dim]))?;
            let fc2 = Linear::new(init, &join(prefix, "fc2"), dim, dim, true)?;
            FeedForward::Conv {
                fc1,
                kernel,
                bias,
                fc2,
            }
        } else {
            let fc2 = Linear::new(init, &join(prefix, "fc2"), dim, dim, true)?;
            FeedForward::Plain { fc1, fc2 }
        };
        Ok(ffn)
    }

    /// `x: [H, W, dim] -> [H, W, dim]`
    pub fn forward<T: Real>(&self, cx: &mut Ctx<'_, T>, x: Var) -> Result<Var> {
        match self {
            FeedForward::Plain { fc1, fc2 } => {
                let h = fc1.forward(cx, x)?;
                let h = cx.g.gelu(h);
                fc2.forward(cx, h)
            }
            FeedForward::Conv {
                fc1,
                kernel,
                bias,
                fc2,
            } => {
                let h = fc1.forward(cx, x)?;
                let h = cx.g.gelu(h);
                let (k, b) = (cx.param(kernel)?, cx.param(bias)?);
                let h = cx.g.conv2x2(h, k, b)?;
                let h = cx.g.gelu(h);
                fc2.forward(cx, h)
            }
        }
    }
}

#[derive(Debug, Clone)]
pub struct SwinBlock {
    pub kind: BlockKind,
    pub window_size: usize,
    pub norm1: LayerNorm,
    pub attn: MultiHeadAttention,
    pub norm2: LayerNorm,
    pub ffn: FeedForward,
}

impl SwinBlock {
    pub fn new<R: Rng>(
        init: &mut Init<'_, R>,
        prefix: &str,
        cfg: &StageConfig,
        kind: BlockKind,
    ) -> Result<Self> {
        let conv = cfg.conv_ffn_enabled && kind == BlockKind::NonShifting;
        Ok(Self {
            kind,
            window_size: cfg.window_size,
            norm1: LayerNorm::new(init, &join(prefix, "norm1"), cfg.dim)?,
            attn: MultiHeadAttention::new(init, &join(prefix, "attn"), cfg.dim, cfg.heads, true)?,
            norm2: LayerNorm::new(init, &join(prefix, "norm2"), cfg.dim)?,
            ffn: FeedForward::new(init, &join(prefix, "ffn"), cfg.dim, conv)?,
        })
    }

    /// Pre-norm windowed attention and feed-forward, each with a residual.
    /// Returns the output `[H, W, dim]` and the attention weights
    /// `[nW, heads, n, n]`.
    pub fn forward<T: Real>(&self, cx: &mut Ctx<'_, T>, x: Var) -> Result<(Var, Var)> {
        let s = cx.g.shape(x).to_vec();
        if s.len() != 3 || s[2] != self.attn.dim {
            return Err(Error::dim("swin_block", &s, &[self.attn.dim]));
        }
        let (h, w) = (s[0], s[1]);
        let (win, shift) = window_geometry(h, w, self.window_size, self.kind)?;
        let hn = self.norm1.forward(cx, x)?;
        let windows = window_partition(cx, hn, win, shift)?;
        let mask = if shift > 0 {
            let m = shifted_attention_mask::<T>(h, w, win, shift);
            let n = win * win;
            let nwin = m.shape()[0];
            let m = m.reshape([nwin, 1, n, n])?;
            Some(cx.g.constant(&m))
        } else {
            None
        };
        let (a, weights) = self.attn.forward(cx, windows, windows, mask)?;
        let a = window_reverse(cx, a, h, w, win, shift)?;
        let x = cx.g.add(x, a)?;
        let hn = self.norm2.forward(cx, x)?;
        let f = self.ffn.forward(cx, hn)?;
        Ok((cx.g.add(x, f)?, weights))
    }
}

/// 2x2 neighborhood concatenation, layer norm, and a `4c -> 2c` projection.
#[derive(Debug, Clone)]
pub struct PatchMerge {
    pub norm: LayerNorm,
    pub reduction: Linear,
}

impl PatchMerge {
    pub fn new<R: Rng>(init: &mut Init<'_, R>, prefix: &str, dim: usize) -> Result<Self> {
        Ok(Self {
            norm: LayerNorm::new(init, &join(prefix, "norm"), 4 * dim)?,
            reduction: Linear::new(init, &join(prefix, "reduction"), 4 * dim, 2 * dim, false)?,
        })
    }

    pub fn forward<T: Real>(&self, cx: &mut Ctx<'_, T>, x: Var) -> Result<Var> {
        let s = cx.g.shape(x).to_vec();
        if s.len() != 3
            || !s[0].is_multiple_of(2)
            || !s[1].is_multiple_of(2)
            || s[0] == 0
            || s[1] == 0
        {
            return Err(Error::Config(format!(
                "patch merge needs an even grid, got {s:?}"
            )));
        }
        let (h, w, c) = (s[0], s[1], s[2]);
        let mut idx = Vec::with_capacity(h * w * c);
        for y in 0..h / 2 {
            for xx in 0..w / 2 {
                for (dy, dx) in [(0, 0), (1, 0), (0, 1), (1, 1)] {
                    let t = (2 * y + dy) * w + 2 * xx + dx;
                    idx.extend((0..c).map(|ch| t * c + ch));
                }
            }
        }
        let merged = cx.g.gather(x, idx, &[h / 2, w / 2, 4 * c])?;
        let merged = self.norm.forward(cx, merged)?;
        self.reduction.forward(cx, merged)
    }
}

/// Per-stage outputs, finest first.
#[derive(Debug, Clone)]
pub struct FeaturePyramid {
    pub levels: Vec<Var>,
    /// Attention weights of every block, in execution order.
    pub attention: Vec<Var>,
}

#[derive(Debug, Clone)]
pub struct Stage {
    pub blocks: Vec<SwinBlock>,
    pub merge: Option<PatchMerge>,
}

#[derive(Debug, Clone)]
pub struct Backbone {
    pub input_proj: Linear,
    pub stages: Vec<Stage>,
    pub configs: Vec<StageConfig>,
}

impl Backbone {
    pub fn new<R: Rng>(
        init: &mut Init<'_, R>,
        in_width: usize,
        configs: &[StageConfig],
    ) -> Result<Self> {
        if configs.is_empty() {
            return Err(Error::Config("backbone needs at least one stage".into()));
        }
        for (i, c) in configs.iter().enumerate() {
            c.validate(i + 1)?;
            if i > 0 && c.dim != 2 * configs[i - 1].dim {
                return Err(Error::Config(format!(
                    "stage {} width {} must double the previous {}",
                    i + 1,
                    c.dim,
                    configs[i - 1].dim
                )));
            }
        }
        let input_proj = Linear::new(init, "backbone.input_proj", in_width, configs[0].dim, true)?;
        let mut stages = Vec::with_capacity(configs.len());
        for (si, cfg) in configs.iter().enumerate() {
            let prefix = format!("backbone.stage{}", si + 1);
            let blocks = (0..cfg.num_blocks)
                .map(|bi| {
                    let kind = if bi % 2 == 0 {
                        BlockKind::NonShifting
                    } else {
                        BlockKind::Shifting
                    };
                    SwinBlock::new(init, &format!("{prefix}.block{bi}"), cfg, kind)
                })
                .collect::<Result<Vec<_>>>()?;
            let merge = if si + 1 < configs.len() {
                Some(PatchMerge::new(init, &format!("{prefix}.merge"), cfg.dim)?)
            } else {
                None
            };
            stages.push(Stage { blocks, merge });
        }
        Ok(Self {
            input_proj,
            stages,
            configs: configs.to_vec(),
        })
    }

    /// Check that a token grid survives every window and merge step.
    pub fn check_grid(&self, h: usize, w: usize) -> Result<()> {
        let (mut h, mut w) = (h, w);
        for (si, stage) in self.stages.iter().enumerate() {
            for b in &stage.blocks {
                window_geometry(h, w, b.window_size, b.kind)?;
            }
            if stage.merge.is_some() {
                if h % 2 != 0 || w % 2 != 0 {
                    return Err(Error::Config(format!(
                        "stage {} grid {h}x{w} cannot be merged",
                        si + 1
                    )));
                }
                h /= 2;
                w /= 2;
            }
        }
        Ok(())
    }

    /// `fused: [H', W', in_width]` to a pyramid of `[H'/2^i, W'/2^i, dim_i]`.
    pub fn forward<T: Real>(&self, cx: &mut Ctx<'_, T>, fused: Var) -> Result<FeaturePyramid> {
        let s = cx.g.shape(fused).to_vec();
        if s.len() != 3 || s[2] != self.input_proj.in_dim {
            return Err(Error::dim("backbone", &s, &[self.input_proj.in_dim]));
        }
        self.check_grid(s[0], s[1])?;
        let mut x = self.input_proj.forward(cx, fused)?;
        let mut levels = Vec::with_capacity(self.stages.len());
        let mut attention = Vec::new();
        for stage in &self.stages {
            for b in &stage.blocks {
                let (y, w) = b.forward(cx, x)?;
                x = y;
                attention.push(w);
            }
            levels.push(x);
            if let Some(m) = &stage.merge {
                x = m.forward(cx, x)?;
            }
        }
        Ok(FeaturePyramid { levels, attention })
    }
}

#[cfg(test)]
mod tests {
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    use super::*;
    use crate::numerics::{finite_diff_check_params, Graph, ParamStore};

    #[test]
    fn partition_single_window_is_row_major() {
        let idx = window_token_index(4, 4, 4, 0);
        assert_eq!(idx, (0..16).collect::<Vec<_>>());
    }

    #[test]
    fn partition_token_0_3_lands_in_window_1_slot_1() {
        let idx = window_token_index(4, 4, 2, 0);
        let pos = idx.iter().position(|&t| t == 3).unwrap();
        assert_eq!((pos / 4, pos % 4), (1, 1));
    }

    #[test]
    fn mask_without_shift_is_zero() {
        let m = shifted_attention_mask::<f32>(4, 4, 2, 0);
        assert!(m.data().iter().all(|&v| v == 0.0));
        assert_eq!(m.shape(), &[4, 4, 4]);
    }

    #[test]
    fn mask_rows_always_contain_self() {
        for (h, win) in [(4, 2), (8, 4), (8, 2), (6, 2)] {
            let m = shifted_attention_mask::<f32>(h, h, win, win / 2);
            let n = win * win;
            for (r, row) in m.data().chunks(n).enumerate() {
                assert_eq!(row[r % n], 0.0);
            }
        }
    }

    #[test]
    fn geometry_collapses_large_windows() {
        assert_eq!(
            window_geometry(4, 4, 8, BlockKind::Shifting).unwrap(),
            (4, 0)
        );
        assert_eq!(
            window_geometry(8, 8, 4, BlockKind::Shifting).unwrap(),
            (4, 2)
        );
        assert_eq!(
            window_geometry(8, 8, 4, BlockKind::NonShifting).unwrap(),
            (4, 0)
        );
        assert!(window_geometry(6, 6, 4, BlockKind::NonShifting).is_err());
    }

    #[test]
    fn stage_config_rejects_odd_block_counts() {
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut init = Init {
            store: &mut store,
            rng: &mut rng,
        };
        let mut cfg = default_stages(8, 2);
        cfg[0].num_blocks = 3;
        assert!(matches!(
            Backbone::new(&mut init, 4, &cfg),
            Err(Error::Config(_))
        ));
    }

    #[test]
    fn partition_round_trip_is_identity() {
        let store = ParamStore::<f32>::new();
        let mut cx = Ctx::new(&store);
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let t = Tensor::<f32>::randn([8, 8, 3], 1.0, &mut rng);
        let x = cx.g.constant(&t);
        for (win, shift) in [(2, 0), (2, 1), (4, 2), (8, 0)] {
            let p = window_partition(&mut cx, x, win, shift).unwrap();
            let r = window_reverse(&mut cx, p, 8, 8, win, shift).unwrap();
            assert_eq!(cx.g.value(r), t.data());
        }
    }

    #[test]
    fn patch_merge_shapes_and_constant_input() {
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut init = Init {
            store: &mut store,
            rng: &mut rng,
        };
        let pm = PatchMerge::new(&mut init, "m", 3).unwrap();
        // rows of the projection sum to one
        let w = store.get_mut("m.reduction.weight").unwrap();
        w.data_mut().iter_mut().for_each(|v| *v = 1.0 / 6.0);
        let mut cx = Ctx::new(&store);
        let x = cx.g.constant(&Tensor::full([2, 2, 3], 0.7f32));
        let y = pm.forward(&mut cx, x).unwrap();
        assert_eq!(cx.g.shape(y), &[1, 1, 6]);
        let x = cx.g.constant(&Tensor::full([4, 4, 3], 2.5f32));
        let y = pm.forward(&mut cx, x).unwrap();
        let v = cx.g.value(y);
        assert!(v.iter().all(|&e| (e - v[0]).abs() < 1e-6));
    }

    #[test]
    fn conv_ffn_zero_in_zero_out() {
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut init = Init {
            store: &mut store,
            rng: &mut rng,
        };
        let ffn = FeedForward::new(&mut init, "f", 4, true).unwrap();
        let mut cx = Ctx::new(&store);
        let x = cx.g.constant(&Tensor::zeros([4, 4, 4]));
        let y = ffn.forward(&mut cx, x).unwrap();
        assert_eq!(cx.g.shape(y), &[4, 4, 4]);
        assert!(cx.g.value(y).iter().all(|&v| v == 0.0));
    }

    #[test]
    fn conv_ffn_with_identity_weights_is_double_gelu() {
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut init = Init {
            store: &mut store,
            rng: &mut rng,
        };
        let d = 3;
        let ffn = FeedForward::new(&mut init, "f", d, true).unwrap();
        let eye = Tensor::from_fn([d, d], |i| if i / d == i % d { 1.0 } else { 0.0 });
        store
            .get_mut("f.fc1.weight")
            .unwrap()
            .data_mut()
            .copy_from_slice(eye.data());
        store
            .get_mut("f.fc2.weight")
            .unwrap()
            .data_mut()
            .copy_from_slice(eye.data());
        let k = store.get_mut("f.conv.weight").unwrap().data_mut();
        k.iter_mut().for_each(|v| *v = 0.0);
        for c in 0..d {
            k[c * d + c] = 1.0; // tap (0, 0)
        }
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let t = Tensor::<f32>::randn([3, 2, d], 1.0, &mut rng);
        let mut cx = Ctx::new(&store);
        let x = cx.g.constant(&t);
        let y = ffn.forward(&mut cx, x).unwrap();
        let mut g = Graph::<f32>::new();
        let xi = g.constant(&t);
        let a = g.gelu(xi);
        let b = g.gelu(a);
        for (u, v) in cx.g.value(y).iter().zip(g.value(b)) {
            assert!((u - v).abs() < 1e-6);
        }
    }

    #[test]
    fn conv_ffn_toggle_changes_param_count_by_conv_size() {
        for dim in [4usize, 8] {
            let count = |conv: bool| {
                let mut store = ParamStore::new();
                let mut rng = ChaCha8Rng::seed_from_u64(0);
                let mut init = Init {
                    store: &mut store,
                    rng: &mut rng,
                };
                FeedForward::new(&mut init, "f", dim, conv).unwrap();
                store.num_scalars()
            };
            assert_eq!(count(true) - count(false), 4 * dim * dim + dim);
        }
    }

    #[test]
    fn zero_weights_make_block_identity() {
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut init = Init {
            store: &mut store,
            rng: &mut rng,
        };
        let cfg = StageConfig {
            num_blocks: 2,
            window_size: 2,
            heads: 2,
            conv_ffn_enabled: true,
            dim: 4,
        };
        let blocks = [
            SwinBlock::new(&mut init, "b0", &cfg, BlockKind::NonShifting).unwrap(),
            SwinBlock::new(&mut init, "b1", &cfg, BlockKind::Shifting).unwrap(),
        ];
        for (name, t) in store.iter_mut() {
            if !name.contains("norm") {
                t.data_mut().iter_mut().for_each(|v| *v = 0.0);
            }
        }
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let t = Tensor::<f32>::randn([4, 4, 4], 1.0, &mut rng);
        for b in &blocks {
            let mut cx = Ctx::new(&store);
            let x = cx.g.constant(&t);
            let (y, _) = b.forward(&mut cx, x).unwrap();
            assert_eq!(cx.g.value(y), t.data());
        }
    }

    #[test]
    fn swin_block_gradients() {
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut init = Init {
            store: &mut store,
            rng: &mut rng,
        };
        let cfg = StageConfig {
            num_blocks: 2,
            window_size: 2,
            heads: 2,
            conv_ffn_enabled: true,
            dim: 4,
        };
        let b = SwinBlock::new(&mut init, "b1", &cfg, BlockKind::Shifting).unwrap();
        let store = store.cast::<f64>();
        let t = Tensor::<f64>::randn([4, 4, 4], 1.0, &mut rng);
        let w = Tensor::<f64>::randn([4, 4, 4], 1.0, &mut rng);
        let r = finite_diff_check_params(
            &store,
            &[t],
            |cx, v| {
                let (y, _) = b.forward(cx, v[0])?;
                let wv = cx.g.constant(&w);
                let p = cx.g.mul(y, wv)?;
                Ok(cx.g.sum(p))
            },
            1e-5,
        )
        .unwrap();
        assert!(r.max_rel_error < 1e-4, "{r:?}");
    }
}
