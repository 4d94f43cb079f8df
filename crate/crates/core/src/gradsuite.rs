//! Finite-difference suite over every differentiable operation, in `f64`.
//!
//! Each case reduces the operation's output with a fixed random weighting,
//! `f(x) = sum(w * op(x))`, and compares analytic against central-difference
//! gradients for the inputs and every parameter the operation reads.

use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::backbone::{BlockKind, FeedForward, PatchMerge, StageConfig, SwinBlock};
use crate::error::Result;
use crate::eval::{BBox, GroundTruth};
use crate::fusion::{mha_cross, ChannelTokenGrid, CrossChannelAttention};
use crate::head::{assign_targets, detection_loss_node, AnchorSet, LossWeights};
use crate::nn::{Init, MultiHeadAttention};
use crate::numerics::{
    finite_diff_check, finite_diff_check_params, Ctx, FiniteDiffReport, ParamStore, Tensor, Var,
};

pub const GRAD_OPS: [&str; 11] = [
    "matmul",
    "softmax",
    "layer_norm",
    "conv2x2",
    "gelu",
    "mha_cross",
    "cc_fusion",
    "conv_ffn",
    "swin_block",
    "patch_merge",
    "detection_loss",
];

pub const FD_EPS: f64 = 1e-5;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OpReport {
    pub op: String,
    pub seeds: usize,
    pub probed: usize,
    pub max_rel_error: f64,
    /// Analytic and numeric gradient at the worst coordinate.
    pub worst: (f64, f64),
    pub seconds: f64,
}

fn weighted_sum(cx: &mut Ctx<'_, f64>, y: Var, w: &Tensor<f64>) -> Result<Var> {
    let wv = cx.g.constant(w);
    let p = cx.g.mul(y, wv)?;
    Ok(cx.g.sum(p))
}

fn grid(tokens: Var, gh: usize, gw: usize, d: usize) -> ChannelTokenGrid {
    ChannelTokenGrid {
        tokens,
        channel: None,
        patch_size: 1,
        embed_dim: d,
        grid: (gh, gw),
    }
}

/// Build parameters in `f32`, then cast and jitter them in `f64` so norms and
/// biases are not sitting at their special initial values.
fn build<M>(
    seed: u64,
    f: impl FnOnce(&mut Init<'_, ChaCha8Rng>) -> Result<M>,
) -> Result<(ParamStore<f64>, M, ChaCha8Rng)> {
    let mut store = ParamStore::new();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let m = f(&mut Init {
        store: &mut store,
        rng: &mut rng,
    })?;
    let mut store = store.cast::<f64>();
    for (_, t) in store.iter_mut() {
        for v in t.data_mut() {
            *v += rng.random_range(-0.2..0.2);
        }
    }
    Ok((store, m, rng))
}

fn check_op(op: &str, seed: u64) -> Result<FiniteDiffReport> {
    match op {
        "matmul" => {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let a = Tensor::randn([3, 4], 1.0, &mut rng);
            let b = Tensor::randn([4, 5], 1.0, &mut rng);
            let w = Tensor::randn([3, 5], 1.0, &mut rng);
            finite_diff_check(
                |g, v| {
                    let y = g.matmul(v[0], v[1])?;
                    let wv = g.constant(&w);
                    let p = g.mul(y, wv)?;
                    Ok(g.sum(p))
                },
                &[a, b],
                FD_EPS,
            )
        }
        "softmax" | "gelu" => {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let x = Tensor::randn([3, 5], 1.5, &mut rng);
            let w = Tensor::randn([3, 5], 1.0, &mut rng);
            let soft = op == "softmax";
            finite_diff_check(
                |g, v| {
                    let y = if soft {
                        g.softmax(v[0], 1)?
                    } else {
                        g.gelu(v[0])
                    };
                    let wv = g.constant(&w);
                    let p = g.mul(y, wv)?;
                    Ok(g.sum(p))
                },
                &[x],
                FD_EPS,
            )
        }
        "layer_norm" => {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let x = Tensor::randn([3, 6], 1.0, &mut rng);
            let gamma = Tensor::randn([6], 1.0, &mut rng);
            let beta = Tensor::randn([6], 1.0, &mut rng);
            let w = Tensor::randn([3, 6], 1.0, &mut rng);
            finite_diff_check(
                |g, v| {
                    let y = g.layer_norm(v[0], v[1], v[2], 1e-5)?;
                    let wv = g.constant(&w);
                    let p = g.mul(y, wv)?;
                    Ok(g.sum(p))
                },
                &[x, gamma, beta],
                FD_EPS,
            )
        }
        "conv2x2" => {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let x = Tensor::randn([3, 4, 2], 1.0, &mut rng);
            let k = Tensor::randn([2, 2, 2, 3], 1.0, &mut rng);
            let b = Tensor::randn([3], 1.0, &mut rng);
            let w = Tensor::randn([3, 4, 3], 1.0, &mut rng);
            finite_diff_check(
                |g, v| {
                    let y = g.conv2x2(v[0], v[1], v[2])?;
                    let wv = g.constant(&w);
                    let p = g.mul(y, wv)?;
                    Ok(g.sum(p))
                },
                &[x, k, b],
                FD_EPS,
            )
        }
        "mha_cross" => {
            let (store, m, mut rng) = build(seed, |init| {
                MultiHeadAttention::new(init, "attn", 4, 2, false)
            })?;
            let q = Tensor::randn([2, 3, 4], 1.0, &mut rng);
            let kv = Tensor::randn([2, 3, 4], 1.0, &mut rng);
            let w = Tensor::randn([2, 3, 4], 1.0, &mut rng);
            finite_diff_check_params(
                &store,
                &[q, kv],
                |cx, v| {
                    let (y, _) = mha_cross(cx, &grid(v[0], 2, 3, 4), &grid(v[1], 2, 3, 4), &m)?;
                    weighted_sum(cx, y, &w)
                },
                FD_EPS,
            )
        }
        "cc_fusion" => {
            let (store, c, mut rng) =
                build(seed, |init| CrossChannelAttention::new(init, "cc", 4, 2))?;
            let inputs: Vec<Tensor<f64>> = (0..4)
                .map(|_| Tensor::randn([2, 2, 4], 1.0, &mut rng))
                .collect();
            let w = Tensor::randn([2, 2, 16], 1.0, &mut rng);
            finite_diff_check_params(
                &store,
                &inputs,
                |cx, v| {
                    let g = [0, 1, 2, 3].map(|i| grid(v[i], 2, 2, 4));
                    let out = c.fuse(cx, &g)?;
                    weighted_sum(cx, out.tokens, &w)
                },
                FD_EPS,
            )
        }
        "conv_ffn" => {
            let (store, f, mut rng) = build(seed, |init| FeedForward::new(init, "ffn", 3, true))?;
            let x = Tensor::randn([3, 3, 3], 1.0, &mut rng);
            let w = Tensor::randn([3, 3, 3], 1.0, &mut rng);
            finite_diff_check_params(
                &store,
                &[x],
                |cx, v| {
                    let y = f.forward(cx, v[0])?;
                    weighted_sum(cx, y, &w)
                },
                FD_EPS,
            )
        }
        "swin_block" => {
            let kind = if seed.is_multiple_of(2) {
                BlockKind::Shifting
            } else {
                BlockKind::NonShifting
            };
            let cfg = StageConfig {
                num_blocks: 2,
                window_size: 2,
                heads: 2,
                conv_ffn_enabled: true,
                dim: 4,
            };
            let (store, b, mut rng) =
                build(seed, |init| SwinBlock::new(init, "block", &cfg, kind))?;
            let x = Tensor::randn([4, 4, 4], 1.0, &mut rng);
            let w = Tensor::randn([4, 4, 4], 1.0, &mut rng);
            finite_diff_check_params(
                &store,
                &[x],
                |cx, v| {
                    let (y, _) = b.forward(cx, v[0])?;
                    weighted_sum(cx, y, &w)
                },
                FD_EPS,
            )
        }
        "patch_merge" => {
            let (store, m, mut rng) = build(seed, |init| PatchMerge::new(init, "merge", 2))?;
            let x = Tensor::randn([4, 2, 2], 1.0, &mut rng);
            let w = Tensor::randn([2, 1, 4], 1.0, &mut rng);
            finite_diff_check_params(
                &store,
                &[x],
                |cx, v| {
                    let y = m.forward(cx, v[0])?;
                    weighted_sum(cx, y, &w)
                },
                FD_EPS,
            )
        }
        "detection_loss" => {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let anchors = AnchorSet::scaled(2);
            let grids = [(2, 2), (1, 1)];
            let classes = 2;
            let gts: Vec<GroundTruth> = (0..2)
                .map(|_| GroundTruth {
                    class_id: rng.random_range(0..classes),
                    bbox: BBox::new(
                        rng.random_range(0.2..0.8),
                        rng.random_range(0.2..0.8),
                        rng.random_range(0.04..0.2),
                        rng.random_range(0.04..0.2),
                    ),
                })
                .collect();
            let asg = assign_targets(&gts, &grids, &anchors)?;
            let ch = anchors.per_level() * (5 + classes);
            let raw: Vec<Tensor<f64>> = grids
                .iter()
                .map(|&(h, w)| Tensor::uniform([h, w, ch], 0.5, &mut rng))
                .collect();
            finite_diff_check(
                |g, v| {
                    Ok(
                        detection_loss_node(
                            g,
                            v,
                            &asg,
                            &anchors,
                            classes,
                            &LossWeights::default(),
                        )?
                        .0,
                    )
                },
                &raw,
                FD_EPS,
            )
        }
        other => Err(crate::Error::Config(format!("unknown operation `{other}`"))),
    }
}

/// Run every operation over `seeds`, keeping the worst error per operation.
pub fn run_gradsuite(seeds: &[u64]) -> Result<Vec<OpReport>> {
    GRAD_OPS
        .iter()
        .map(|&op| {
            let start = Instant::now();
            let mut max_rel_error = 0f64;
            let mut probed = 0;
            let mut worst = (0.0, 0.0);
            for &seed in seeds {
                let r = check_op(op, seed)?;
                if r.max_rel_error >= max_rel_error {
                    max_rel_error = r.max_rel_error;
                    worst = r.worst;
                }
                probed += r.probed;
            }
            Ok(OpReport {
                op: op.to_string(),
                seeds: seeds.len(),
                probed,
                max_rel_error,
                worst,
                seconds: start.elapsed().as_secs_f64(),
            })
        })
        .collect()
}
