//! Evaluation of trained detectors and the fusion / conv-FFN ablation tables.

use std::collections::BTreeSet;
use std::fmt::Write as _;
use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::data::{Sample, SYNTH_CLASS_NAMES};
use crate::error::{Error, Result};
use crate::eval::{map50, EvalReport};
use crate::fusion::FusionVariant;
use crate::head::PostProcess;
use crate::model::{ground_truths, Detector, ModelConfig};
use crate::numerics::ParamStore;
use crate::train::{train_loop, TrainConfig, TrainOptions};

pub fn class_names(classes: usize) -> Vec<String> {
    (0..classes)
        .map(|c| {
            SYNTH_CLASS_NAMES
                .get(c)
                .map_or_else(|| format!("class{c}"), |s| s.to_string())
        })
        .collect()
}

pub fn evaluate(
    det: &Detector,
    params: &ParamStore<f32>,
    samples: &[Sample],
    pp: &PostProcess,
) -> Result<EvalReport> {
    let dets = samples
        .iter()
        .map(|s| det.predict(params, s, pp))
        .collect::<Result<Vec<_>>>()?;
    Ok(map50(
        &dets,
        &ground_truths(samples),
        &class_names(det.config.classes),
    ))
}

/// Split off the last `frac` of the samples as the evaluation set.
pub fn holdout_split(samples: &[Sample], frac: f64) -> (&[Sample], &[Sample]) {
    let n_eval = ((samples.len() as f64) * frac).round() as usize;
    samples.split_at(samples.len() - n_eval.min(samples.len()))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunResult {
    pub label: String,
    pub seed: u64,
    pub map50: f64,
    pub final_loss: f64,
    pub params: usize,
    /// Wall time; kept out of serialized tables so reruns compare equal.
    #[serde(skip)]
    pub seconds: f64,
    pub report: EvalReport,
}

pub fn run_one(
    label: &str,
    cfg: &TrainConfig,
    model: &ModelConfig,
    train: &[Sample],
    eval: &[Sample],
    opts: &TrainOptions,
) -> Result<RunResult> {
    let start = Instant::now();
    let out = train_loop(cfg, model, train, opts)?;
    let report = evaluate(&out.detector, &out.params, eval, &PostProcess::default())?;
    let seconds = start.elapsed().as_secs_f64();
    log::info!(
        "{label} seed {}: mAP50 {:.4} in {seconds:.1}s",
        cfg.seed,
        report.map50
    );
    Ok(RunResult {
        label: label.to_string(),
        seed: cfg.seed,
        map50: report.map50,
        final_loss: out.log.last().map_or(f64::NAN, |l| l.total),
        params: out.params.num_scalars(),
        seconds,
        report,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationRow {
    pub label: String,
    pub description: String,
    pub runs: Vec<RunResult>,
}

impl AblationRow {
    pub fn maps(&self) -> Vec<f64> {
        self.runs.iter().map(|r| r.map50).collect()
    }

    pub fn mean(&self) -> f64 {
        mean(&self.maps())
    }

    /// Sample standard deviation across seeds; zero for a single run.
    pub fn std(&self) -> f64 {
        sample_std(&self.maps())
    }
}

pub fn mean(xs: &[f64]) -> f64 {
    if xs.is_empty() {
        return f64::NAN;
    }
    xs.iter().sum::<f64>() / xs.len() as f64
}

pub fn sample_std(xs: &[f64]) -> f64 {
    if xs.len() < 2 {
        return 0.0;
    }
    let m = mean(xs);
    (xs.iter().map(|x| (x - m).powi(2)).sum::<f64>() / (xs.len() - 1) as f64).sqrt()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationTable {
    pub title: String,
    pub rows: Vec<AblationRow>,
}

impl AblationTable {
    pub fn row(&self, label: &str) -> Option<&AblationRow> {
        self.rows.iter().find(|r| r.label == label)
    }

    fn seeds(&self) -> Vec<u64> {
        let set: BTreeSet<u64> = self
            .rows
            .iter()
            .flat_map(|r| r.runs.iter().map(|x| x.seed))
            .collect();
        set.into_iter().collect()
    }

    pub fn to_csv(&self) -> String {
        let seeds = self.seeds();
        let mut s = String::from("variant,description,params,mAP50,std");
        for seed in &seeds {
            let _ = write!(s, ",seed{seed}");
        }
        s.push('\n');
        for r in &self.rows {
            let params = r.runs.first().map_or(0, |x| x.params);
            let _ = write!(
                s,
                "{},{},{},{:.4},{:.4}",
                r.label,
                r.description,
                params,
                r.mean(),
                r.std()
            );
            for seed in &seeds {
                match r.runs.iter().find(|x| x.seed == *seed) {
                    Some(x) => {
                        let _ = write!(s, ",{:.4}", x.map50);
                    }
                    None => s.push(','),
                }
            }
            s.push('\n');
        }
        s
    }

    pub fn to_markdown(&self) -> String {
        let lines: Vec<Vec<String>> = self
            .to_csv()
            .lines()
            .map(|l| l.split(',').map(str::to_string).collect())
            .collect();
        let cols = lines.first().map_or(0, Vec::len);
        let widths: Vec<usize> = (0..cols)
            .map(|c| {
                lines
                    .iter()
                    .map(|l| l.get(c).map_or(0, String::len))
                    .max()
                    .unwrap_or(0)
            })
            .collect();
        let fmt = |l: &[String]| {
            let cells: Vec<String> = widths
                .iter()
                .enumerate()
                .map(|(c, &w)| format!("{:<w$}", l.get(c).map_or("", String::as_str)))
                .collect();
            format!("| {} |\n", cells.join(" | "))
        };
        let mut s = format!("### {}\n\n", self.title);
        if let Some((head, body)) = lines.split_first() {
            s.push_str(&fmt(head));
            let rule: Vec<String> = widths.iter().map(|&w| "-".repeat(w.max(3))).collect();
            s.push_str(&format!("|-{}-|\n", rule.join("-|-")));
            for l in body {
                s.push_str(&fmt(l));
            }
        }
        s
    }
}

/// Train every variant in `variants` for every seed.
pub fn ablate_fusion(
    base: &TrainConfig,
    model: &ModelConfig,
    variants: &[FusionVariant],
    seeds: &[u64],
    train: &[Sample],
    eval: &[Sample],
) -> Result<AblationTable> {
    if seeds.is_empty() {
        return Err(Error::Config("at least one seed is required".into()));
    }
    let mut rows = Vec::with_capacity(variants.len());
    for &v in variants {
        let mut runs = Vec::with_capacity(seeds.len());
        for &seed in seeds {
            let cfg = TrainConfig {
                fusion_variant: v,
                seed,
                ..base.clone()
            };
            runs.push(run_one(
                v.name(),
                &cfg,
                model,
                train,
                eval,
                &TrainOptions::default(),
            )?);
        }
        rows.push(AblationRow {
            label: v.name().to_string(),
            description: v.label().to_string(),
            runs,
        });
    }
    Ok(AblationTable {
        title: "Fusion variants".into(),
        rows,
    })
}

pub fn stage_label(stages: &BTreeSet<usize>) -> String {
    if stages.is_empty() {
        return "none".into();
    }
    let parts: Vec<String> = stages.iter().map(usize::to_string).collect();
    format!("stages_{}", parts.join("_"))
}

pub fn stage_description(stages: &BTreeSet<usize>) -> String {
    if stages.is_empty() {
        return "plain FFN".into();
    }
    let parts: Vec<String> = stages.iter().map(usize::to_string).collect();
    format!("conv FFN in stage(s) {}", parts.join(" and "))
}

pub fn conv_ffn_rows() -> Vec<BTreeSet<usize>> {
    vec![BTreeSet::new(), [1].into(), [1, 2].into()]
}

pub fn ablate_convffn(
    base: &TrainConfig,
    model: &ModelConfig,
    stage_sets: &[BTreeSet<usize>],
    seeds: &[u64],
    train: &[Sample],
    eval: &[Sample],
) -> Result<AblationTable> {
    if seeds.is_empty() {
        return Err(Error::Config("at least one seed is required".into()));
    }
    let mut rows = Vec::with_capacity(stage_sets.len());
    for stages in stage_sets {
        let label = stage_label(stages);
        let mut runs = Vec::with_capacity(seeds.len());
        for &seed in seeds {
            let cfg = TrainConfig {
                conv_ffn_stages: stages.clone(),
                seed,
                ..base.clone()
            };
            runs.push(run_one(
                &label,
                &cfg,
                model,
                train,
                eval,
                &TrainOptions::default(),
            )?);
        }
        rows.push(AblationRow {
            label,
            description: stage_description(stages),
            runs,
        });
    }
    Ok(AblationTable {
        title: "Conv FFN stages".into(),
        rows,
    })
}
