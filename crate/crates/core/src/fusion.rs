//! Per-channel patch tokenization and the fusion front-ends.
//!
//! The cross-channel (CC) front-end treats R, G, B and IR as four separate
//! modalities: each is tokenized with its own projection, then every channel
//! queries one complementary channel through cross-attention. The remaining
//! front-ends are the comparison baselines (plain concatenation, joint
//! self-attention, RGB-to-IR cross-attention, single modality).

use std::fmt;
use std::str::FromStr;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::{join, Init, LayerNorm, MultiHeadAttention};
use crate::numerics::{Ctx, Real, Tensor, Var};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum ChannelId {
    R,
    G,
    B,
    Ir,
}

impl ChannelId {
    pub const ALL: [ChannelId; 4] = [ChannelId::R, ChannelId::G, ChannelId::B, ChannelId::Ir];

    pub fn index(self) -> usize {
        self as usize
    }

    pub fn name(self) -> &'static str {
        match self {
            ChannelId::R => "r",
            ChannelId::G => "g",
            ChannelId::B => "b",
            ChannelId::Ir => "ir",
        }
    }
}

/// Query channel and its key/value partner.
pub const CC_PAIRS: [(ChannelId, ChannelId); 4] = [
    (ChannelId::R, ChannelId::G),
    (ChannelId::G, ChannelId::B),
    (ChannelId::B, ChannelId::Ir),
    (ChannelId::Ir, ChannelId::G),
];

/// Token grid `[H/s, W/s, d]` of one channel (or one modality).
#[derive(Debug, Clone, Copy)]
pub struct ChannelTokenGrid {
    pub tokens: Var,
    pub channel: Option<ChannelId>,
    pub patch_size: usize,
    pub embed_dim: usize,
    pub grid: (usize, usize),
}

/// Fusion output `[H/s, W/s, width]`.
#[derive(Debug, Clone)]
pub struct FusedGrid {
    pub tokens: Var,
    pub grid: (usize, usize),
    pub width: usize,
    /// Attention weights `[1, h, L, L]` of every attention layer used.
    pub attention: Vec<Var>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FusionVariant {
    Cc,
    Concat,
    VanillaSelf,
    VanillaCross,
    RgbOnly,
    IrOnly,
}

impl FusionVariant {
    pub const ALL: [FusionVariant; 6] = [
        FusionVariant::IrOnly,
        FusionVariant::RgbOnly,
        FusionVariant::Concat,
        FusionVariant::VanillaSelf,
        FusionVariant::VanillaCross,
        FusionVariant::Cc,
    ];

    pub fn name(self) -> &'static str {
        match self {
            FusionVariant::Cc => "cc",
            FusionVariant::Concat => "concat",
            FusionVariant::VanillaSelf => "vanilla_self",
            FusionVariant::VanillaCross => "vanilla_cross",
            FusionVariant::RgbOnly => "rgb_only",
            FusionVariant::IrOnly => "ir_only",
        }
    }

    /// Row label used in ablation tables.
    pub fn label(self) -> &'static str {
        match self {
            FusionVariant::Cc => "per-channel cross-attention",
            FusionVariant::Concat => "channel concatenation",
            FusionVariant::VanillaSelf => "self-attention over RGB and IR",
            FusionVariant::VanillaCross => "RGB queries IR",
            FusionVariant::RgbOnly => "RGB only",
            FusionVariant::IrOnly => "IR only",
        }
    }

    /// Token width handed to the backbone for per-channel width `d`.
    pub fn out_width(self, d: usize) -> usize {
        match self {
            FusionVariant::RgbOnly => 3 * d,
            FusionVariant::IrOnly => d,
            _ => 4 * d,
        }
    }
}

impl fmt::Display for FusionVariant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for FusionVariant {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        FusionVariant::ALL
            .into_iter()
            .find(|v| v.name() == s)
            .ok_or_else(|| Error::Config(format!("unknown fusion variant `{s}`")))
    }
}

/// Flat indices that cut `[H, W, C]` into `s x s` patches over `channels`,
/// giving rows of length `s*s*channels.len()` ordered `(py, px, c)`.
fn patch_index(h: usize, w: usize, c_total: usize, s: usize, channels: &[usize]) -> Vec<usize> {
    let (gh, gw) = (h / s, w / s);
    let mut idx = Vec::with_capacity(h * w * channels.len());
    for i in 0..gh {
        for j in 0..gw {
            for py in 0..s {
                for px in 0..s {
                    let base = ((i * s + py) * w + j * s + px) * c_total;
                    idx.extend(channels.iter().map(|&c| base + c));
                }
            }
        }
    }
    idx
}

/// Tokenize the selected channels of `image` (`[H, W]` or `[H, W, C]`):
/// every `s x s` patch is flattened, multiplied by `projection`
/// (`[s*s*channels, d]`) and offset by the position embedding `pos`
/// (`[H/s, W/s, d]`).
pub fn patchify<T: Real>(
    cx: &mut Ctx<'_, T>,
    image: Var,
    channels: &[usize],
    s: usize,
    projection: Var,
    pos: Option<Var>,
) -> Result<ChannelTokenGrid> {
    let shape = cx.g.shape(image).to_vec();
    let (h, w, c_total) = match shape[..] {
        [h, w] => (h, w, 1),
        [h, w, c] => (h, w, c),
        _ => return Err(Error::dim("patchify", &shape, &[s])),
    };
    if s == 0 || h % s != 0 || w % s != 0 {
        return Err(Error::Config(format!(
            "image {h}x{w} is not divisible by patch size {s}"
        )));
    }
    if channels.iter().any(|&c| c >= c_total) {
        return Err(Error::dim("patchify", &shape, channels));
    }
    let (gh, gw) = (h / s, w / s);
    let k = s * s * channels.len();
    let ps = cx.g.shape(projection).to_vec();
    if ps.len() != 2 || ps[0] != k {
        return Err(Error::dim("patchify", &[gh * gw, k], &ps));
    }
    let d = ps[1];
    let idx = patch_index(h, w, c_total, s, channels);
    let patches = cx.g.gather(image, idx, &[gh * gw, k])?;
    let mut tokens = cx.g.matmul(patches, projection)?;
    if let Some(p) = pos {
        let p = cx.g.reshape(p, &[gh * gw, d])?;
        tokens = cx.g.add(tokens, p)?;
    }
    let tokens = cx.g.reshape(tokens, &[gh, gw, d])?;
    Ok(ChannelTokenGrid {
        tokens,
        channel: None,
        patch_size: s,
        embed_dim: d,
        grid: (gh, gw),
    })
}

fn as_sequence<T: Real>(cx: &mut Ctx<'_, T>, grid: &ChannelTokenGrid) -> Result<Var> {
    let (gh, gw) = grid.grid;
    cx.g.reshape(grid.tokens, &[1, gh * gw, grid.embed_dim])
}

/// Global multi-head cross-attention: `q` supplies queries, `kv` keys and
/// values. Returns `([H/s, W/s, d], weights [1, h, L, L])`.
pub fn mha_cross<T: Real>(
    cx: &mut Ctx<'_, T>,
    q: &ChannelTokenGrid,
    kv: &ChannelTokenGrid,
    params: &MultiHeadAttention,
) -> Result<(Var, Var)> {
    if q.grid != kv.grid || q.embed_dim != kv.embed_dim {
        return Err(Error::dim(
            "mha_cross",
            &[q.grid.0, q.grid.1, q.embed_dim],
            &[kv.grid.0, kv.grid.1, kv.embed_dim],
        ));
    }
    let xq = as_sequence(cx, q)?;
    let xkv = as_sequence(cx, kv)?;
    let (out, w) = params.forward(cx, xq, xkv, None)?;
    let out = cx.g.reshape(out, &[q.grid.0, q.grid.1, q.embed_dim])?;
    Ok((out, w))
}

fn normed<T: Real>(
    cx: &mut Ctx<'_, T>,
    grid: &ChannelTokenGrid,
    ln: &LayerNorm,
) -> Result<ChannelTokenGrid> {
    Ok(ChannelTokenGrid {
        tokens: ln.forward(cx, grid.tokens)?,
        ..*grid
    })
}

/// The four cross-attention pairs with their pre-attention norms.
#[derive(Debug, Clone)]
pub struct CrossChannelAttention {
    pub norm_q: Vec<LayerNorm>,
    pub norm_kv: Vec<LayerNorm>,
    pub attn: Vec<MultiHeadAttention>,
}

impl CrossChannelAttention {
    pub fn new<R: Rng>(
        init: &mut Init<'_, R>,
        prefix: &str,
        d: usize,
        heads: usize,
    ) -> Result<Self> {
        let mut s = Self {
            norm_q: Vec::new(),
            norm_kv: Vec::new(),
            attn: Vec::new(),
        };
        for (q, kv) in CC_PAIRS {
            let p = join(prefix, &format!("{}_{}", q.name(), kv.name()));
            s.norm_q.push(LayerNorm::new(init, &join(&p, "norm_q"), d)?);
            s.norm_kv
                .push(LayerNorm::new(init, &join(&p, "norm_kv"), d)?);
            s.attn.push(MultiHeadAttention::new(
                init,
                &join(&p, "attn"),
                d,
                heads,
                false,
            )?);
        }
        Ok(s)
    }

    /// Fuse the R, G, B, IR grids (in that order). Each output channel is
    /// `query + attention(norm(query), norm(partner))`; the four results are
    /// concatenated R, G, B, IR.
    pub fn fuse<T: Real>(
        &self,
        cx: &mut Ctx<'_, T>,
        grids: &[ChannelTokenGrid; 4],
    ) -> Result<FusedGrid> {
        let first = &grids[0];
        if grids
            .iter()
            .any(|g| g.grid != first.grid || g.embed_dim != first.embed_dim)
        {
            return Err(Error::dim(
                "cc_fusion",
                &[first.grid.0, first.grid.1, first.embed_dim],
                &grids
                    .iter()
                    .flat_map(|g| [g.grid.0, g.grid.1, g.embed_dim])
                    .collect::<Vec<_>>(),
            ));
        }
        let mut outs = Vec::with_capacity(4);
        let mut attention = Vec::with_capacity(4);
        for (i, (q, kv)) in CC_PAIRS.iter().enumerate() {
            let query = &grids[q.index()];
            let partner = &grids[kv.index()];
            let nq = normed(cx, query, &self.norm_q[i])?;
            let nkv = normed(cx, partner, &self.norm_kv[i])?;
            let (a, w) = mha_cross(cx, &nq, &nkv, &self.attn[i])?;
            outs.push(cx.g.add(query.tokens, a)?);
            attention.push(w);
        }
        let tokens = cx.g.concat(&outs, 2)?;
        Ok(FusedGrid {
            tokens,
            grid: first.grid,
            width: 4 * first.embed_dim,
            attention,
        })
    }
}

/// Channel-axis concatenation of token grids, no attention.
pub fn concat_fusion<T: Real>(
    cx: &mut Ctx<'_, T>,
    grids: &[ChannelTokenGrid],
) -> Result<FusedGrid> {
    let first = grids
        .first()
        .ok_or_else(|| Error::Contract("concat_fusion of no grids".into()))?;
    if grids.iter().any(|g| g.grid != first.grid) {
        return Err(Error::dim(
            "concat_fusion",
            &[first.grid.0, first.grid.1],
            &grids
                .iter()
                .flat_map(|g| [g.grid.0, g.grid.1])
                .collect::<Vec<_>>(),
        ));
    }
    let vars: Vec<Var> = grids.iter().map(|g| g.tokens).collect();
    let tokens = cx.g.concat(&vars, 2)?;
    Ok(FusedGrid {
        tokens,
        grid: first.grid,
        width: grids.iter().map(|g| g.embed_dim).sum(),
        attention: Vec::new(),
    })
}

/// Joint self-attention over the concatenated RGB and IR embeddings, with
/// residual and no feed-forward sublayer.
#[derive(Debug, Clone)]
pub struct VanillaSelfAttention {
    pub norm: LayerNorm,
    pub attn: MultiHeadAttention,
}

impl VanillaSelfAttention {
    pub fn new<R: Rng>(
        init: &mut Init<'_, R>,
        prefix: &str,
        width: usize,
        heads: usize,
    ) -> Result<Self> {
        Ok(Self {
            norm: LayerNorm::new(init, &join(prefix, "norm"), width)?,
            attn: MultiHeadAttention::new(init, &join(prefix, "attn"), width, heads, false)?,
        })
    }

    pub fn fuse<T: Real>(
        &self,
        cx: &mut Ctx<'_, T>,
        rgb: &ChannelTokenGrid,
        ir: &ChannelTokenGrid,
    ) -> Result<FusedGrid> {
        let joint = concat_fusion(cx, &[*rgb, *ir])?;
        let grid = ChannelTokenGrid {
            tokens: joint.tokens,
            channel: None,
            patch_size: rgb.patch_size,
            embed_dim: joint.width,
            grid: joint.grid,
        };
        let n = normed(cx, &grid, &self.norm)?;
        let (a, w) = mha_cross(cx, &n, &n, &self.attn)?;
        let tokens = cx.g.add(grid.tokens, a)?;
        Ok(FusedGrid {
            tokens,
            grid: joint.grid,
            width: joint.width,
            attention: vec![w],
        })
    }
}

/// RGB queries attend to IR keys/values; the result (with residual) is
/// concatenated with the raw IR tokens so the output width matches the
/// other front-ends.
#[derive(Debug, Clone)]
pub struct VanillaCrossAttention {
    pub norm_q: LayerNorm,
    pub norm_kv: LayerNorm,
    pub attn: MultiHeadAttention,
}

impl VanillaCrossAttention {
    pub fn new<R: Rng>(
        init: &mut Init<'_, R>,
        prefix: &str,
        width: usize,
        heads: usize,
    ) -> Result<Self> {
        Ok(Self {
            norm_q: LayerNorm::new(init, &join(prefix, "norm_q"), width)?,
            norm_kv: LayerNorm::new(init, &join(prefix, "norm_kv"), width)?,
            attn: MultiHeadAttention::new(init, &join(prefix, "attn"), width, heads, false)?,
        })
    }

    pub fn fuse<T: Real>(
        &self,
        cx: &mut Ctx<'_, T>,
        rgb: &ChannelTokenGrid,
        ir: &ChannelTokenGrid,
    ) -> Result<FusedGrid> {
        let nq = normed(cx, rgb, &self.norm_q)?;
        let nkv = normed(cx, ir, &self.norm_kv)?;
        let (a, w) = mha_cross(cx, &nq, &nkv, &self.attn)?;
        let fused_rgb = cx.g.add(rgb.tokens, a)?;
        let tokens = cx.g.concat(&[fused_rgb, ir.tokens], 2)?;
        Ok(FusedGrid {
            tokens,
            grid: rgb.grid,
            width: rgb.embed_dim + ir.embed_dim,
            attention: vec![w],
        })
    }
}

#[derive(Debug, Clone)]
enum Mixer {
    Cc(CrossChannelAttention),
    Concat,
    VanillaSelf(VanillaSelfAttention),
    VanillaCross(VanillaCrossAttention),
}

/// Tokenizer plus fusion for one [`FusionVariant`], mapping an RGB image
/// `[H, W, 3]` and an IR image `[H, W]` to a [`FusedGrid`].
#[derive(Debug, Clone)]
pub struct FusionFrontEnd {
    pub variant: FusionVariant,
    pub patch_size: usize,
    pub embed_dim: usize,
    pub pos: String,
    /// Projection names; per channel for channel-level variants, per
    /// modality (RGB, IR) for the vanilla attention variants.
    pub projections: Vec<(String, Vec<usize>, Modality)>,
    mixer: Mixer,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Modality {
    Rgb,
    Ir,
}

impl FusionFrontEnd {
    pub fn new<R: Rng>(
        init: &mut Init<'_, R>,
        variant: FusionVariant,
        image_size: (usize, usize),
        patch_size: usize,
        embed_dim: usize,
        heads: usize,
    ) -> Result<Self> {
        let (h, w) = image_size;
        if patch_size == 0 || h % patch_size != 0 || w % patch_size != 0 {
            return Err(Error::Config(format!(
                "image {h}x{w} is not divisible by patch size {patch_size}"
            )));
        }
        let (gh, gw) = (h / patch_size, w / patch_size);
        let s2 = patch_size * patch_size;
        let d = embed_dim;
        let mut projections = Vec::new();
        let mut per_channel = |init: &mut Init<'_, R>, chans: &[ChannelId]| -> Result<()> {
            for &c in chans {
                let name = format!("fusion.embed.{}", c.name());
                let t = Tensor::uniform([s2, d], 1.0 / (s2 as f64).sqrt(), init.rng);
                let modality = if c == ChannelId::Ir {
                    Modality::Ir
                } else {
                    Modality::Rgb
                };
                let ch = if c == ChannelId::Ir { 0 } else { c.index() };
                projections.push((init.add(&name, t)?, vec![ch], modality));
            }
            Ok(())
        };
        let pos_width;
        let mixer = match variant {
            FusionVariant::Cc => {
                per_channel(init, &ChannelId::ALL)?;
                pos_width = d;
                Mixer::Cc(CrossChannelAttention::new(init, "fusion.cc", d, heads)?)
            }
            FusionVariant::Concat => {
                per_channel(init, &ChannelId::ALL)?;
                pos_width = d;
                Mixer::Concat
            }
            FusionVariant::RgbOnly => {
                per_channel(init, &[ChannelId::R, ChannelId::G, ChannelId::B])?;
                pos_width = d;
                Mixer::Concat
            }
            FusionVariant::IrOnly => {
                per_channel(init, &[ChannelId::Ir])?;
                pos_width = d;
                Mixer::Concat
            }
            FusionVariant::VanillaSelf | FusionVariant::VanillaCross => {
                // One embedding per modality, each 2d wide so the fused width is 4d.
                let dm = 2 * d;
                let t = Tensor::uniform([3 * s2, dm], 1.0 / ((3 * s2) as f64).sqrt(), init.rng);
                projections.push((
                    init.add("fusion.embed.rgb", t)?,
                    vec![0, 1, 2],
                    Modality::Rgb,
                ));
                let t = Tensor::uniform([s2, dm], 1.0 / (s2 as f64).sqrt(), init.rng);
                projections.push((init.add("fusion.embed.ir", t)?, vec![0], Modality::Ir));
                pos_width = dm;
                if variant == FusionVariant::VanillaSelf {
                    Mixer::VanillaSelf(VanillaSelfAttention::new(
                        init,
                        "fusion.self",
                        2 * dm,
                        heads,
                    )?)
                } else {
                    Mixer::VanillaCross(VanillaCrossAttention::new(
                        init,
                        "fusion.cross",
                        dm,
                        heads,
                    )?)
                }
            }
        };
        let pos = init.randn("fusion.pos", &[gh, gw, pos_width], 0.02)?;
        Ok(Self {
            variant,
            patch_size,
            embed_dim,
            pos,
            projections,
            mixer,
        })
    }

    pub fn out_width(&self) -> usize {
        self.variant.out_width(self.embed_dim)
    }

    /// Token grids in projection order.
    pub fn tokenize<T: Real>(
        &self,
        cx: &mut Ctx<'_, T>,
        rgb: Var,
        ir: Var,
    ) -> Result<Vec<ChannelTokenGrid>> {
        let pos = cx.param(&self.pos)?;
        let mut grids = Vec::with_capacity(self.projections.len());
        for (name, chans, modality) in &self.projections {
            let proj = cx.param(name)?;
            let src = match modality {
                Modality::Rgb => rgb,
                Modality::Ir => ir,
            };
            grids.push(patchify(cx, src, chans, self.patch_size, proj, Some(pos))?);
        }
        Ok(grids)
    }

    pub fn forward<T: Real>(&self, cx: &mut Ctx<'_, T>, rgb: Var, ir: Var) -> Result<FusedGrid> {
        let grids = self.tokenize(cx, rgb, ir)?;
        match &self.mixer {
            Mixer::Cc(cc) => {
                let arr: [ChannelTokenGrid; 4] = [grids[0], grids[1], grids[2], grids[3]];
                cc.fuse(cx, &arr)
            }
            Mixer::Concat => concat_fusion(cx, &grids),
            Mixer::VanillaSelf(m) => m.fuse(cx, &grids[0], &grids[1]),
            Mixer::VanillaCross(m) => m.fuse(cx, &grids[0], &grids[1]),
        }
    }

    pub fn cross_channel(&self) -> Option<&CrossChannelAttention> {
        match &self.mixer {
            Mixer::Cc(cc) => Some(cc),
            _ => None,
        }
    }
}
