//! SGD with momentum, the training loop and the checkpoint format.
//!
//! Checkpoint layout: 8-byte magic, `u32` LE format version, `u64` LE length
//! of a JSON metadata block, the JSON block, then every parameter as raw
//! `f32` LE values in name order.

use std::collections::{BTreeMap, BTreeSet};
use std::fs;
use std::io::Write as _;
use std::path::{Path, PathBuf};
use std::time::Instant;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data::{augment, sample_seed, Sample};
use crate::error::{Error, Result};
use crate::fusion::FusionVariant;
use crate::head::{LossParts, LossWeights};
use crate::model::{Detector, ModelConfig};
use crate::numerics::{accumulate_grads, Ctx, ParamStore, Tensor};

pub const CHECKPOINT_MAGIC: [u8; 8] = *b"CCDETCKP";
pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub lr: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub seed: u64,
    pub fusion_variant: FusionVariant,
    /// 1-based stages whose non-shifting blocks use the conv FFN.
    pub conv_ffn_stages: BTreeSet<usize>,
    pub augment: bool,
    pub loss_weights: LossWeights,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            lr: 0.01,
            momentum: 0.937,
            weight_decay: 0.0005,
            epochs: 60,
            batch_size: 8,
            seed: 0,
            fusion_variant: FusionVariant::Cc,
            conv_ffn_stages: [1, 2].into(),
            augment: true,
            loss_weights: LossWeights::default(),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.lr >= 0.0 && self.lr.is_finite()) {
            return Err(Error::Config(format!(
                "lr must be non-negative, got {}",
                self.lr
            )));
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return Err(Error::Config(format!(
                "momentum must lie in [0, 1), got {}",
                self.momentum
            )));
        }
        if !(self.weight_decay >= 0.0) {
            return Err(Error::Config(format!(
                "weight_decay must be non-negative, got {}",
                self.weight_decay
            )));
        }
        if self.batch_size == 0 {
            return Err(Error::Config("batch_size must be positive".into()));
        }
        Ok(())
    }

    pub fn sgd(&self) -> SgdConfig {
        SgdConfig {
            lr: self.lr as f32,
            momentum: self.momentum as f32,
            weight_decay: self.weight_decay as f32,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SgdConfig {
    pub lr: f32,
    pub momentum: f32,
    pub weight_decay: f32,
}

/// Momentum buffers by parameter name.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct SgdState {
    pub velocity: BTreeMap<String, Vec<f32>>,
}

/// `v <- momentum * v + grad + wd * param; param <- param - lr * v` for every
/// parameter holding a gradient. Parameters without a gradient are left
/// untouched.
pub fn sgd_step(store: &mut ParamStore<f32>, cfg: &SgdConfig, state: &mut SgdState) {
    for (name, t) in store.iter_mut() {
        let Some(grad) = t.grad.take() else { continue };
        let v = state
            .velocity
            .entry(name.to_string())
            .or_insert_with(|| vec![0.0; grad.len()]);
        for ((p, vi), g) in t.data_mut().iter_mut().zip(v.iter_mut()).zip(&grad) {
            *vi = cfg.momentum * *vi + g + cfg.weight_decay * *p;
            *p -= cfg.lr * *vi;
        }
        t.grad = Some(grad);
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EpochLog {
    pub epoch: usize,
    pub total: f64,
    pub loc: f64,
    pub conf: f64,
    pub cls: f64,
    pub seconds: f64,
}

pub const LOG_HEADER: &str = "epoch,total,loc,conf,cls,seconds";

impl EpochLog {
    pub fn csv_row(&self) -> String {
        format!(
            "{},{:.6},{:.6},{:.6},{:.6},{:.3}",
            self.epoch, self.total, self.loc, self.conf, self.cls, self.seconds
        )
    }

    pub fn parts(&self) -> LossParts {
        LossParts {
            total: self.total,
            loc: self.loc,
            conf: self.conf,
            cls: self.cls,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CheckpointMeta {
    pub version: u32,
    pub train: TrainConfig,
    pub model: ModelConfig,
    pub epoch: usize,
    /// Mean per-image loss of the last completed epoch.
    pub loss: LossParts,
    pub best_total: f64,
    pub tensors: Vec<TensorEntry>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TensorEntry {
    pub name: String,
    pub shape: Vec<usize>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub meta: CheckpointMeta,
    pub params: ParamStore<f32>,
}

impl Checkpoint {
    pub fn new(
        train: &TrainConfig,
        model: &ModelConfig,
        epoch: usize,
        loss: LossParts,
        best_total: f64,
        params: &ParamStore<f32>,
    ) -> Self {
        let tensors = params
            .iter()
            .map(|(name, t)| TensorEntry {
                name: name.to_string(),
                shape: t.shape().to_vec(),
            })
            .collect();
        let mut params = params.clone();
        params.zero_grads();
        Self {
            meta: CheckpointMeta {
                version: CHECKPOINT_VERSION,
                train: train.clone(),
                model: model.clone(),
                epoch,
                loss,
                best_total,
                tensors,
            },
            params,
        }
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let meta = serde_json::to_vec(&self.meta)?;
        let mut out = Vec::with_capacity(20 + meta.len() + 4 * self.params.num_scalars());
        out.extend_from_slice(&CHECKPOINT_MAGIC);
        out.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
        out.extend_from_slice(&(meta.len() as u64).to_le_bytes());
        out.extend_from_slice(&meta);
        for (_, t) in self.params.iter() {
            for v in t.data() {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let header = bytes
            .get(..20)
            .ok_or_else(|| Error::Format("checkpoint shorter than its header".into()))?;
        if header[..8] != CHECKPOINT_MAGIC {
            return Err(Error::Format("bad checkpoint magic".into()));
        }
        let version = u32::from_le_bytes(header[8..12].try_into().expect("4 bytes"));
        if version != CHECKPOINT_VERSION {
            return Err(Error::Format(format!(
                "checkpoint version {version}, expected {CHECKPOINT_VERSION}"
            )));
        }
        let len = u64::from_le_bytes(header[12..20].try_into().expect("8 bytes")) as usize;
        let meta_bytes = bytes
            .get(20..20usize.saturating_add(len))
            .ok_or_else(|| Error::Format("truncated checkpoint metadata".into()))?;
        let meta: CheckpointMeta = serde_json::from_slice(meta_bytes)
            .map_err(|e| Error::Format(format!("checkpoint metadata: {e}")))?;
        let mut offset = 20 + len;
        let mut params = ParamStore::new();
        for e in &meta.tensors {
            let n: usize = e.shape.iter().product();
            let chunk = bytes
                .get(offset..offset + 4 * n)
                .ok_or_else(|| Error::Format(format!("truncated payload of `{}`", e.name)))?;
            let data = chunk
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")))
                .collect();
            params.insert(e.name.clone(), Tensor::new(e.shape.clone(), data)?)?;
            offset += 4 * n;
        }
        if offset != bytes.len() {
            return Err(Error::Format(format!(
                "{} trailing bytes after the last tensor",
                bytes.len() - offset
            )));
        }
        if params.names().zip(&meta.tensors).any(|(a, e)| a != e.name) {
            return Err(Error::Format("tensor entries are not in name order".into()));
        }
        Ok(Self { meta, params })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let bytes = self.to_bytes()?;
        let mut f = fs::File::create(path)?;
        f.write_all(&bytes)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_bytes(&fs::read(path)?)
    }

    /// Check names and shapes against a freshly built architecture.
    pub fn matches(&self, template: &ParamStore<f32>) -> Result<()> {
        let have: BTreeSet<&str> = self.params.names().collect();
        let want: BTreeSet<&str> = template.names().collect();
        let missing: Vec<String> = want.difference(&have).map(|s| s.to_string()).collect();
        let extra: Vec<String> = have.difference(&want).map(|s| s.to_string()).collect();
        if !missing.is_empty() || !extra.is_empty() {
            return Err(Error::ParameterMismatch { missing, extra });
        }
        for (name, t) in template.iter() {
            let got = self.params.require(name)?.shape();
            if got != t.shape() {
                return Err(Error::dim("checkpoint", got, t.shape()));
            }
        }
        Ok(())
    }

    /// Rebuild the detector this checkpoint was trained with.
    pub fn restore(&self) -> Result<(Detector, ParamStore<f32>)> {
        let (det, template) = Detector::new(
            &self.meta.model,
            self.meta.train.fusion_variant,
            &self.meta.train.conv_ffn_stages,
            self.meta.train.seed,
        )?;
        self.matches(&template)?;
        Ok((det, self.params.clone()))
    }
}

#[derive(Debug, Clone, Default)]
pub struct TrainOptions {
    /// Directory for `train_log.csv`, `final.ckpt` and `best.ckpt`.
    pub out_dir: Option<PathBuf>,
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub detector: Detector,
    pub params: ParamStore<f32>,
    pub log: Vec<EpochLog>,
    pub best_total: f64,
    pub final_checkpoint: Checkpoint,
}

fn first_non_finite(store: &ParamStore<f32>) -> Option<String> {
    store.iter().find_map(|(name, t)| {
        t.grad
            .as_ref()
            .filter(|g| g.iter().any(|v| !v.is_finite()))
            .map(|_| name.to_string())
    })
}

/// Seed of the augmentation of sample `index` in `epoch`.
fn augment_seed(seed: u64, epoch: usize, index: usize) -> u64 {
    sample_seed(sample_seed(seed, epoch as u64), index as u64)
}

/// Seeded shuffled mini-batch SGD over `train`. The batch objective is the
/// sum of the per-image losses; logged losses are per-image means.
pub fn train_loop(
    cfg: &TrainConfig,
    model: &ModelConfig,
    train: &[Sample],
    opts: &TrainOptions,
) -> Result<TrainOutcome> {
    cfg.validate()?;
    let (detector, mut params) =
        Detector::new(model, cfg.fusion_variant, &cfg.conv_ffn_stages, cfg.seed)?;
    let mut state = SgdState::default();
    let sgd = cfg.sgd();
    let mut rng = ChaCha8Rng::seed_from_u64(sample_seed(cfg.seed, u64::MAX));
    let mut order: Vec<usize> = (0..train.len()).collect();
    let mut log = Vec::with_capacity(cfg.epochs);
    let mut best_total = f64::INFINITY;
    let mut csv = String::from(LOG_HEADER);
    csv.push('\n');
    if let Some(dir) = &opts.out_dir {
        fs::create_dir_all(dir)?;
    }
    let mut last = LossParts::default();
    for epoch in 1..=cfg.epochs {
        let start = Instant::now();
        order.shuffle(&mut rng);
        let mut sum = LossParts::default();
        for batch in order.chunks(cfg.batch_size) {
            params.zero_grads();
            for &i in batch {
                let sample = if cfg.augment {
                    augment(&train[i], augment_seed(cfg.seed, epoch, i))
                } else {
                    train[i].clone()
                };
                let grads = {
                    let mut cx = Ctx::new(&params);
                    let (loss, parts) = detector.loss(&mut cx, &sample, &cfg.loss_weights)?;
                    sum += parts;
                    if !parts.total.is_finite() {
                        let grads = cx.param_grads(loss)?;
                        let param = grads
                            .iter()
                            .find(|(_, g)| g.iter().any(|v| !v.is_finite()))
                            .map_or_else(|| "loss".to_string(), |(n, _)| n.clone());
                        return Err(Error::NonFinite { epoch, param });
                    }
                    cx.param_grads(loss)?
                };
                accumulate_grads(&mut params, &grads)?;
            }
            if let Some(param) = first_non_finite(&params) {
                return Err(Error::NonFinite { epoch, param });
            }
            sgd_step(&mut params, &sgd, &mut state);
        }
        params.zero_grads();
        let n = train.len().max(1) as f64;
        last = sum.scaled(1.0 / n);
        let entry = EpochLog {
            epoch,
            total: last.total,
            loc: last.loc,
            conf: last.conf,
            cls: last.cls,
            seconds: start.elapsed().as_secs_f64(),
        };
        log::info!("{}", entry.csv_row());
        csv.push_str(&entry.csv_row());
        csv.push('\n');
        log.push(entry);
        if let Some(dir) = &opts.out_dir {
            fs::write(dir.join("train_log.csv"), &csv)?;
            if last.total < best_total {
                best_total = last.total;
                Checkpoint::new(cfg, model, epoch, last, best_total, &params)
                    .save(&dir.join("best.ckpt"))?;
            }
        } else {
            best_total = best_total.min(last.total);
        }
    }
    let final_checkpoint = Checkpoint::new(cfg, model, cfg.epochs, last, best_total, &params);
    if let Some(dir) = &opts.out_dir {
        final_checkpoint.save(&dir.join("final.ckpt"))?;
        if cfg.epochs == 0 {
            final_checkpoint.save(&dir.join("best.ckpt"))?;
        }
    }
    Ok(TrainOutcome {
        detector,
        params,
        log,
        best_total,
        final_checkpoint,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{gen_synthetic, SynthConfig};

    fn one(v: f32) -> ParamStore<f32> {
        let mut s = ParamStore::new();
        s.insert("w", Tensor::new([1], vec![v]).unwrap()).unwrap();
        s
    }

    fn step(s: &mut ParamStore<f32>, g: f32, cfg: &SgdConfig, st: &mut SgdState) {
        s.zero_grads();
        s.get_mut("w").unwrap().accumulate_grad(&[g]);
        sgd_step(s, cfg, st);
    }

    #[test]
    fn vanilla_step_and_fixed_point() {
        let cfg = SgdConfig {
            lr: 0.1,
            momentum: 0.0,
            weight_decay: 0.0,
        };
        let mut s = one(1.0);
        let mut st = SgdState::default();
        step(&mut s, 2.0, &cfg, &mut st);
        assert!((s.get("w").unwrap().data()[0] - 0.8).abs() < 1e-7);
        step(&mut s, 0.0, &cfg, &mut st);
        assert!((s.get("w").unwrap().data()[0] - 0.8).abs() < 1e-7);
    }

    #[test]
    fn momentum_recursion() {
        let cfg = SgdConfig {
            lr: 1.0,
            momentum: 0.9,
            weight_decay: 0.0,
        };
        let mut s = one(0.0);
        let mut st = SgdState::default();
        step(&mut s, 1.0, &cfg, &mut st);
        assert_eq!(st.velocity["w"], vec![1.0]);
        step(&mut s, 1.0, &cfg, &mut st);
        assert!((st.velocity["w"][0] - 1.9).abs() < 1e-6);
        assert!((s.get("w").unwrap().data()[0] + 2.9).abs() < 1e-6);
    }

    #[test]
    fn weight_decay_enters_velocity() {
        let cfg = SgdConfig {
            lr: 0.5,
            momentum: 0.0,
            weight_decay: 0.1,
        };
        let mut s = one(2.0);
        let mut st = SgdState::default();
        step(&mut s, 0.0, &cfg, &mut st);
        assert!((s.get("w").unwrap().data()[0] - 1.9).abs() < 1e-6);
    }

    #[test]
    fn parameters_without_gradient_stay_put() {
        let cfg = TrainConfig::default().sgd();
        let mut s = one(3.0);
        s.insert("frozen", Tensor::full([2], 5.0)).unwrap();
        let mut st = SgdState::default();
        step(&mut s, 1.0, &cfg, &mut st);
        assert_eq!(s.get("frozen").unwrap().data(), &[5.0, 5.0]);
        assert!(!st.velocity.contains_key("frozen"));
    }

    #[test]
    fn config_validation() {
        assert!(TrainConfig {
            momentum: 1.0,
            ..TrainConfig::default()
        }
        .validate()
        .is_err());
        assert!(TrainConfig {
            lr: -1.0,
            ..TrainConfig::default()
        }
        .validate()
        .is_err());
        assert!(TrainConfig {
            weight_decay: -0.1,
            ..TrainConfig::default()
        }
        .validate()
        .is_err());
        let parsed: TrainConfig =
            serde_json::from_str(r#"{"fusion_variant":"concat","epochs":3}"#).unwrap();
        assert_eq!(parsed.fusion_variant, FusionVariant::Concat);
        assert_eq!(parsed.momentum, 0.937);
        assert!(serde_json::from_str::<TrainConfig>(r#"{"epochz":3}"#).is_err());
    }

    fn tiny_model() -> ModelConfig {
        ModelConfig {
            image_size: 32,
            patch_size: 4,
            embed_dim: 4,
            fusion_heads: 2,
            dim: 8,
            window: 4,
            blocks: vec![2, 2, 2],
            stage_heads: vec![2, 2, 4],
            ..ModelConfig::default()
        }
    }

    fn tiny_data(n: usize) -> Vec<Sample> {
        gen_synthetic(
            n,
            &SynthConfig {
                image_size: 32,
                extent_min: 3,
                extent_max: 7,
                ..SynthConfig::default()
            },
        )
        .unwrap()
    }

    #[test]
    fn zero_lr_leaves_parameters_unchanged() {
        let cfg = TrainConfig {
            lr: 0.0,
            epochs: 1,
            batch_size: 4,
            ..TrainConfig::default()
        };
        let data = tiny_data(4);
        let out = train_loop(&cfg, &tiny_model(), &data, &TrainOptions::default()).unwrap();
        let (_, init) = Detector::new(
            &tiny_model(),
            cfg.fusion_variant,
            &cfg.conv_ffn_stages,
            cfg.seed,
        )
        .unwrap();
        for ((a, ta), (b, tb)) in out.params.iter().zip(init.iter()) {
            assert_eq!(a, b);
            assert_eq!(ta.data(), tb.data());
        }
    }

    #[test]
    fn checkpoint_round_trip_is_byte_identical() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = TrainConfig {
            epochs: 1,
            batch_size: 2,
            ..TrainConfig::default()
        };
        let out = train_loop(
            &cfg,
            &tiny_model(),
            &tiny_data(2),
            &TrainOptions {
                out_dir: Some(dir.path().into()),
            },
        )
        .unwrap();
        let path = dir.path().join("final.ckpt");
        let bytes = fs::read(&path).unwrap();
        let ck = Checkpoint::load(&path).unwrap();
        assert_eq!(ck.to_bytes().unwrap(), bytes);
        assert_eq!(ck.params, {
            let mut p = out.params.clone();
            p.zero_grads();
            p
        });
        let (_, restored) = ck.restore().unwrap();
        assert_eq!(restored.num_scalars(), out.params.num_scalars());
        assert!(dir.path().join("best.ckpt").exists());
        let csv = fs::read_to_string(dir.path().join("train_log.csv")).unwrap();
        assert!(csv.starts_with(LOG_HEADER));
        assert_eq!(csv.lines().count(), 2);
    }

    #[test]
    fn corrupted_and_mismatched_checkpoints_are_rejected() {
        let (_, store) =
            Detector::new(&tiny_model(), FusionVariant::Cc, &[1, 2].into(), 0).unwrap();
        let ck = Checkpoint::new(
            &TrainConfig::default(),
            &tiny_model(),
            0,
            LossParts::default(),
            0.0,
            &store,
        );
        let mut bytes = ck.to_bytes().unwrap();
        let mut bad = bytes.clone();
        bad[0] = b'X';
        assert!(matches!(
            Checkpoint::from_bytes(&bad),
            Err(Error::Format(_))
        ));
        let mut bad = bytes.clone();
        bad[8] = 9;
        assert!(matches!(
            Checkpoint::from_bytes(&bad),
            Err(Error::Format(_))
        ));
        bytes.pop();
        assert!(matches!(
            Checkpoint::from_bytes(&bytes),
            Err(Error::Format(_))
        ));
        let (_, other) =
            Detector::new(&tiny_model(), FusionVariant::Concat, &[1].into(), 0).unwrap();
        match ck.matches(&other) {
            Err(Error::ParameterMismatch { missing, extra }) => {
                assert!(missing.is_empty());
                assert!(extra.iter().any(|n| n.starts_with("fusion.cc.")));
                assert!(extra
                    .iter()
                    .any(|n| n.contains("stage2") && n.contains("conv")));
            }
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn module_outside_the_graph_is_not_updated() {
        use crate::nn::{Init, Linear};
        use crate::numerics::{accumulate_grads, Ctx};
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mut init = Init {
            store: &mut store,
            rng: &mut rng,
        };
        let used = Linear::new(&mut init, "used", 4, 3, true).unwrap();
        Linear::new(&mut init, "frozen", 4, 3, true).unwrap();
        let before = store.clone();
        let x = Tensor::<f32>::randn([2, 4], 1.0, &mut rng);
        let grads = {
            let mut cx = Ctx::new(&store);
            let xv = cx.g.constant(&x);
            let y = used.forward(&mut cx, xv).unwrap();
            let loss = cx.g.sum(y);
            cx.param_grads(loss).unwrap()
        };
        store.zero_grads();
        accumulate_grads(&mut store, &grads).unwrap();
        let mut st = SgdState::default();
        sgd_step(&mut store, &TrainConfig::default().sgd(), &mut st);
        for (name, t) in store.iter() {
            let same = t.data() == before.get(name).unwrap().data();
            assert_eq!(same, name.starts_with("frozen"), "{name}");
        }
    }

    mod props {
        use super::*;
        use proptest::prelude::*;

        proptest! {
            #[test]
            fn lr_and_grad_scaling_cancel(
                w in -4.0f32..4.0,
                g in -4.0f32..4.0,
                lr in 0.001f32..0.5,
                c in prop::sample::select(vec![0.25f32, 0.5, 2.0, 4.0, 8.0]),
            ) {
                let base = SgdConfig { lr, momentum: 0.0, weight_decay: 0.0 };
                let scaled = SgdConfig { lr: lr * c, ..base };
                let mut a = one(w);
                let mut b = one(w);
                step(&mut a, g, &base, &mut SgdState::default());
                step(&mut b, g / c, &scaled, &mut SgdState::default());
                let (a, b) = (a.get("w").unwrap().data()[0], b.get("w").unwrap().data()[0]);
                prop_assert!((a - b).abs() <= 1e-6 * (1.0 + w.abs()), "{a} vs {b}");
            }
        }
    }
}
