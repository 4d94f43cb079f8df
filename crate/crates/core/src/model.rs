//! The full detector: fusion front-end, backbone and head.

use std::collections::BTreeSet;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::backbone::{Backbone, FeaturePyramid, StageConfig};
use crate::data::Sample;
use crate::error::{Error, Result};
use crate::eval::GroundTruth;
use crate::fusion::{FusedGrid, FusionFrontEnd, FusionVariant};
use crate::head::{
    assign_targets, detection_loss_node, postprocess, AnchorSet, Detection, DetectionHead,
    LossParts, LossWeights, PostProcess,
};
use crate::nn::Init;
use crate::numerics::{Ctx, ParamStore, Real, Var};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    pub image_size: usize,
    pub patch_size: usize,
    /// Per-channel token width `d`.
    pub embed_dim: usize,
    pub fusion_heads: usize,
    /// Width of the first backbone stage; doubles per stage.
    pub dim: usize,
    pub window: usize,
    pub blocks: Vec<usize>,
    pub stage_heads: Vec<usize>,
    pub anchors: AnchorSet,
    pub classes: usize,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            image_size: 128,
            patch_size: 8,
            embed_dim: 8,
            fusion_heads: 4,
            dim: 16,
            window: 4,
            blocks: vec![4, 2, 2],
            stage_heads: vec![2, 4, 8],
            anchors: AnchorSet::default(),
            classes: 4,
        }
    }
}

impl ModelConfig {
    /// Stage layout with the conv FFN enabled in the given 1-based stages.
    pub fn stages(&self, conv_ffn_stages: &BTreeSet<usize>) -> Result<Vec<StageConfig>> {
        if self.blocks.len() != self.stage_heads.len() || self.blocks.is_empty() {
            return Err(Error::Config(format!(
                "{} block counts for {} head counts",
                self.blocks.len(),
                self.stage_heads.len()
            )));
        }
        if let Some(&s) = conv_ffn_stages
            .iter()
            .find(|&&s| s == 0 || s > self.blocks.len())
        {
            return Err(Error::Config(format!("conv FFN stage {s} does not exist")));
        }
        Ok(self
            .blocks
            .iter()
            .zip(&self.stage_heads)
            .enumerate()
            .map(|(i, (&num_blocks, &heads))| StageConfig {
                num_blocks,
                window_size: self.window,
                heads,
                conv_ffn_enabled: conv_ffn_stages.contains(&(i + 1)),
                dim: self.dim << i,
            })
            .collect())
    }

    /// Token grid of every pyramid level.
    pub fn level_grids(&self) -> Vec<(usize, usize)> {
        let g = self.image_size / self.patch_size.max(1);
        (0..self.blocks.len()).map(|l| (g >> l, g >> l)).collect()
    }
}

#[derive(Debug, Clone)]
pub struct Detector {
    pub config: ModelConfig,
    pub variant: FusionVariant,
    pub conv_ffn_stages: BTreeSet<usize>,
    pub fusion: FusionFrontEnd,
    pub backbone: Backbone,
    pub head: DetectionHead,
}

pub struct DetectorOutput {
    pub fused: FusedGrid,
    pub pyramid: FeaturePyramid,
    pub raw: Vec<Var>,
}

impl Detector {
    /// Build the architecture and its freshly initialized parameters.
    pub fn new(
        config: &ModelConfig,
        variant: FusionVariant,
        conv_ffn_stages: &BTreeSet<usize>,
        seed: u64,
    ) -> Result<(Self, ParamStore<f32>)> {
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut init = Init {
            store: &mut store,
            rng: &mut rng,
        };
        let n = config.image_size;
        let fusion = FusionFrontEnd::new(
            &mut init,
            variant,
            (n, n),
            config.patch_size,
            config.embed_dim,
            config.fusion_heads,
        )?;
        let stages = config.stages(conv_ffn_stages)?;
        let backbone = Backbone::new(&mut init, fusion.out_width(), &stages)?;
        let g = n / config.patch_size;
        backbone.check_grid(g, g)?;
        let dims: Vec<usize> = stages.iter().map(|s| s.dim).collect();
        let head = DetectionHead::new(&mut init, &dims, config.anchors.clone(), config.classes)?;
        let det = Self {
            config: config.clone(),
            variant,
            conv_ffn_stages: conv_ffn_stages.clone(),
            fusion,
            backbone,
            head,
        };
        Ok((det, store))
    }

    fn check_sample(&self, s: &Sample) -> Result<()> {
        let n = self.config.image_size;
        if s.rgb.shape() != [n, n, 3] || s.ir.shape() != [n, n] {
            return Err(Error::dim("detector input", s.rgb.shape(), &[n, n, 3]));
        }
        Ok(())
    }

    pub fn forward<T: Real>(&self, cx: &mut Ctx<'_, T>, sample: &Sample) -> Result<DetectorOutput> {
        self.check_sample(sample)?;
        let rgb = cx.g.constant(&sample.rgb.cast());
        let ir = cx.g.constant(&sample.ir.cast());
        let fused = self.fusion.forward(cx, rgb, ir)?;
        let pyramid = self.backbone.forward(cx, fused.tokens)?;
        let raw = self.head.forward(cx, &pyramid)?;
        Ok(DetectorOutput {
            fused,
            pyramid,
            raw,
        })
    }

    /// Loss node of one sample.
    pub fn loss<T: Real>(
        &self,
        cx: &mut Ctx<'_, T>,
        sample: &Sample,
        weights: &LossWeights,
    ) -> Result<(Var, LossParts)> {
        if let Some(b) = sample
            .boxes
            .iter()
            .find(|b| b.class_id >= self.config.classes)
        {
            return Err(Error::Config(format!(
                "sample {} has class {} but the model has {} classes",
                sample.id, b.class_id, self.config.classes
            )));
        }
        let out = self.forward(cx, sample)?;
        let asg = assign_targets(
            &sample.boxes,
            &self.config.level_grids(),
            &self.head.anchors,
        )?;
        detection_loss_node(
            &mut cx.g,
            &out.raw,
            &asg,
            &self.head.anchors,
            self.config.classes,
            weights,
        )
    }

    pub fn predict(
        &self,
        store: &ParamStore<f32>,
        sample: &Sample,
        pp: &PostProcess,
    ) -> Result<Vec<Detection>> {
        let mut cx = Ctx::new(store);
        let out = self.forward(&mut cx, sample)?;
        let raw: Vec<_> = out.raw.iter().map(|&v| cx.g.tensor(v)).collect();
        postprocess(&raw, &self.head.anchors, self.config.classes, pp)
    }
}

/// Ground truths of a sample set, image by image.
pub fn ground_truths(samples: &[Sample]) -> Vec<Vec<GroundTruth>> {
    samples.iter().map(|s| s.boxes.clone()).collect()
}
