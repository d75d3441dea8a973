//! Clean/degraded robustness tables and cross-domain forgetting matrices.

use std::path::Path;

use serde::{Deserialize, Serialize};

use super::degrade::{apply_degradation, DegradationSpec};
use super::metrics::{compute_metrics, Metrics};
use crate::autodiff::ParameterSet;
use crate::checkpoint::Checkpoint;
use crate::dataset::{LabeledDataset, Split};
use crate::error::{Error, Result};
use crate::imaging::ImageRgb;
use crate::model::{image_tensor, Encoder};
use crate::seed::{derive_seed, stream};

fn predict_images<'a>(
    enc: &Encoder,
    params: &ParameterSet<f64>,
    images: impl Iterator<Item = &'a ImageRgb>,
) -> Result<Vec<usize>> {
    images.map(|img| enc.predict(params, &image_tensor(img))).collect()
}

/// Metrics of `params` on one split of `ds`.
pub fn evaluate_split(enc: &Encoder, params: &ParameterSet<f64>, ds: &LabeledDataset, split: Split) -> Result<Metrics> {
    let samples = ds.split(split);
    let preds = predict_images(enc, params, samples.iter().map(|s| &*s.image))?;
    let labels: Vec<usize> = samples.iter().map(|s| s.label).collect();
    compute_metrics(&preds, &labels, ds.class_count())
}

fn check_classes(ck: &Checkpoint, ds: &LabeledDataset) -> Result<()> {
    if ck.class_names != ds.class_names() {
        return Err(Error::contract(format!(
            "checkpoint classes {:?} do not match dataset {:?} classes {:?}",
            ck.class_names,
            ds.domain_name(),
            ds.class_names()
        )));
    }
    Ok(())
}

pub fn evaluate_checkpoint(ck: &Checkpoint, ds: &LabeledDataset, split: Split) -> Result<Metrics> {
    check_classes(ck, ds)?;
    evaluate_split(&Encoder::new(ck.encoder.clone())?, &ck.params, ds, split)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RobustnessRow {
    pub spec: DegradationSpec,
    pub metrics: Metrics,
    pub delta_accuracy: f64,
    pub delta_macro_f1: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RobustnessReport {
    pub domain: String,
    pub split: Split,
    pub clean: Metrics,
    pub rows: Vec<RobustnessRow>,
}

impl RobustnessReport {
    /// Mean of `clean - degraded` accuracy over the suite; 0 for an empty
    /// suite.
    pub fn mean_accuracy_drop(&self) -> f64 {
        if self.rows.is_empty() {
            return 0.0;
        }
        -self.rows.iter().map(|r| r.delta_accuracy).sum::<f64>() / self.rows.len() as f64
    }

    /// One row per condition, clean first.
    pub fn to_csv(&self) -> Result<String> {
        let mut w = csv::Writer::from_writer(Vec::new());
        w.write_record([
            "condition",
            "kind",
            "severity",
            "accuracy",
            "macro_precision",
            "macro_recall",
            "macro_f1",
            "delta_accuracy",
            "delta_macro_f1",
        ])?;
        let row = |w: &mut csv::Writer<Vec<u8>>, cond: String, kind: String, sev: String, m: &Metrics, da: f64, df: f64| {
            w.write_record([
                cond,
                kind,
                sev,
                m.accuracy.to_string(),
                m.macro_precision.to_string(),
                m.macro_recall.to_string(),
                m.macro_f1.to_string(),
                da.to_string(),
                df.to_string(),
            ])
        };
        row(&mut w, "clean".into(), String::new(), String::new(), &self.clean, 0.0, 0.0)?;
        for r in &self.rows {
            row(
                &mut w,
                r.spec.label(),
                r.spec.kind.to_string(),
                r.spec.severity.to_string(),
                &r.metrics,
                r.delta_accuracy,
                r.delta_macro_f1,
            )?;
        }
        finish_csv(w)
    }
}

fn finish_csv(w: csv::Writer<Vec<u8>>) -> Result<String> {
    let bytes = w.into_inner().map_err(|e| Error::contract(e.to_string()))?;
    Ok(String::from_utf8(bytes).expect("csv output is utf-8"))
}

/// Evaluates the clean split and every degradation of the suite. Sample
/// `i` of the split is degraded with seed `derive_seed(seed, [i])`.
pub fn robustness_report(
    ck: &Checkpoint,
    ds: &LabeledDataset,
    split: Split,
    suite: &[DegradationSpec],
    seed: u64,
) -> Result<RobustnessReport> {
    check_classes(ck, ds)?;
    let enc = Encoder::new(ck.encoder.clone())?;
    let samples = ds.split(split);
    let labels: Vec<usize> = samples.iter().map(|s| s.label).collect();
    let clean = compute_metrics(
        &predict_images(&enc, &ck.params, samples.iter().map(|s| &*s.image))?,
        &labels,
        ds.class_count(),
    )?;
    let mut rows = Vec::with_capacity(suite.len());
    for &spec in suite {
        let degraded: Vec<ImageRgb> = samples
            .iter()
            .enumerate()
            .map(|(i, s)| apply_degradation(&s.image, spec, derive_seed(seed, &[stream::DEGRADE, i as u64])))
            .collect();
        let m = compute_metrics(&predict_images(&enc, &ck.params, degraded.iter())?, &labels, ds.class_count())?;
        rows.push(RobustnessRow {
            spec,
            delta_accuracy: m.accuracy - clean.accuracy,
            delta_macro_f1: m.macro_f1 - clean.macro_f1,
            metrics: m,
        });
    }
    Ok(RobustnessReport {
        domain: ds.domain_name().to_string(),
        split,
        clean,
        rows,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ForgettingReport {
    /// Training domain of each stage's checkpoint.
    pub stages: Vec<String>,
    pub domains: Vec<String>,
    pub split: Split,
    /// `matrix[stage][domain]`.
    pub matrix: Vec<Vec<Metrics>>,
    /// Accuracy at the final stage minus accuracy at the last stage that
    /// trained on the domain; `None` if no stage trained on it.
    pub backward_transfer: Vec<Option<f64>>,
}

/// Evaluates every checkpoint on every domain.
pub fn forgetting_report(ckpts: &[Checkpoint], domains: &[LabeledDataset], split: Split) -> Result<ForgettingReport> {
    if ckpts.is_empty() || domains.is_empty() {
        return Err(Error::contract("forgetting report needs checkpoints and domains"));
    }
    let mut matrix = Vec::with_capacity(ckpts.len());
    for ck in ckpts {
        let row = domains
            .iter()
            .map(|d| evaluate_checkpoint(ck, d, split))
            .collect::<Result<Vec<_>>>()?;
        matrix.push(row);
    }
    let stages: Vec<String> = ckpts.iter().map(|c| c.last_domain().to_string()).collect();
    let last = matrix.len() - 1;
    let backward_transfer = domains
        .iter()
        .enumerate()
        .map(|(j, d)| {
            stages
                .iter()
                .rposition(|s| s == d.domain_name())
                .map(|s| matrix[last][j].accuracy - matrix[s][j].accuracy)
        })
        .collect();
    Ok(ForgettingReport {
        stages,
        domains: domains.iter().map(|d| d.domain_name().to_string()).collect(),
        split,
        matrix,
        backward_transfer,
    })
}

impl ForgettingReport {
    /// Accuracy grid: header `stage,<domains...>`, one row per stage.
    pub fn matrix_csv(&self) -> Result<String> {
        let mut w = csv::Writer::from_writer(Vec::new());
        let mut header = vec!["stage".to_string()];
        header.extend(self.domains.iter().cloned());
        w.write_record(&header)?;
        for (i, row) in self.matrix.iter().enumerate() {
            let mut rec = vec![format!("{}:{}", i, self.stages[i])];
            rec.extend(row.iter().map(|m| m.accuracy.to_string()));
            w.write_record(&rec)?;
        }
        finish_csv(w)
    }

    /// Long form: one row per (stage, domain) with every summary metric.
    pub fn to_csv(&self) -> Result<String> {
        let mut w = csv::Writer::from_writer(Vec::new());
        w.write_record([
            "stage",
            "trained_on",
            "domain",
            "accuracy",
            "macro_precision",
            "macro_recall",
            "macro_f1",
        ])?;
        for (i, row) in self.matrix.iter().enumerate() {
            for (d, m) in self.domains.iter().zip(row) {
                w.write_record([
                    i.to_string(),
                    self.stages[i].clone(),
                    d.clone(),
                    m.accuracy.to_string(),
                    m.macro_precision.to_string(),
                    m.macro_recall.to_string(),
                    m.macro_f1.to_string(),
                ])?;
            }
        }
        finish_csv(w)
    }
}

pub fn write_text(path: &Path, text: &str) -> Result<()> {
    std::fs::write(path, text).map_err(|e| Error::io(path, e))
}
