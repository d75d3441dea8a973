//! Calibration sampling, meta-domain partitioning, and adaptation batches.
//!
//! A calibration subset of the target training split is split into `K`
//! disjoint meta-domains. Each meta-domain fits its own appearance profile
//! and derives a transform pipeline that pushes source images toward it.
//! Adaptation batches interleave those transformed source images 1:1 with
//! calibration samples.

use std::path::Path;
use std::sync::Arc;

use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::dataset::{LabeledDataset, Split};
use crate::error::{Error, Result};
use crate::imaging::{build_calibration_profile, CalibrationProfile, ImageRgb, SharpnessStats};
use crate::seed::{derive_seed, rng_for, stream};
use crate::transforms::{build_pipeline, TransformPipeline};

/// Default share of the target training split used for calibration.
pub const DEFAULT_CALIBRATION_FRACTION: f64 = 0.15;

/// Uniform sample without replacement of `max(1, round(fraction * n))`
/// training-split indices of `target`, returned in ascending order.
pub fn sample_calibration(target: &LabeledDataset, fraction: f64, seed: u64) -> Result<Vec<usize>> {
    if !(fraction > 0.0 && fraction <= 1.0) {
        return Err(Error::contract(format!(
            "calibration fraction {fraction} not in (0, 1]"
        )));
    }
    let mut train = target.split_indices(Split::Train);
    if train.is_empty() {
        return Err(Error::EmptyCalibration);
    }
    let n = ((fraction * train.len() as f64).round() as usize).clamp(1, train.len());
    train.shuffle(&mut rng_for(seed, &[stream::CALIBRATION]));
    let mut picked = train[..n].to_vec();
    picked.sort_unstable();
    Ok(picked)
}

/// Random balanced partition into `k` disjoint groups (sizes differ by at
/// most one) covering every index.
pub fn partition_meta_domains(cal: &[usize], k: usize, seed: u64) -> Result<Vec<Vec<usize>>> {
    if k == 0 {
        return Err(Error::contract("K must be >= 1"));
    }
    if cal.len() < k {
        return Err(Error::InsufficientCalibration {
            have: cal.len(),
            need: k,
        });
    }
    let mut shuffled = cal.to_vec();
    shuffled.shuffle(&mut rng_for(seed, &[stream::PARTITION]));
    let mut parts = vec![Vec::with_capacity(cal.len() / k + 1); k];
    for (i, idx) in shuffled.into_iter().enumerate() {
        parts[i % k].push(idx);
    }
    Ok(parts)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetaDomain {
    pub id: usize,
    pub calibration_member_indices: Vec<usize>,
    pub profile: CalibrationProfile,
    pub pipeline: TransformPipeline,
}

/// Fits one profile and pipeline per partition. `source_sharpness` is the
/// aggregate sharpness of the source domain, used to size the blur.
pub fn build_meta_domains(
    target: &LabeledDataset,
    partitions: &[Vec<usize>],
    source_sharpness: &SharpnessStats,
    master_seed: u64,
) -> Result<Vec<MetaDomain>> {
    let mut seen = std::collections::BTreeSet::new();
    for p in partitions {
        if p.is_empty() {
            return Err(Error::EmptyCalibration);
        }
        for &i in p {
            if i >= target.len() || !seen.insert(i) {
                return Err(Error::contract(format!(
                    "partition index {i} is out of range or repeated"
                )));
            }
        }
    }
    partitions
        .iter()
        .enumerate()
        .map(|(id, members)| {
            let profile =
                build_calibration_profile(members.iter().map(|&i| &*target.samples()[i].image))?;
            let seed = derive_seed(master_seed, &[stream::META_PIPELINE, id as u64]);
            let pipeline = build_pipeline(&profile, source_sharpness, seed)?;
            Ok(MetaDomain {
                id,
                calibration_member_indices: members.clone(),
                profile,
                pipeline,
            })
        })
        .collect()
}

pub fn save_meta_domains(path: &Path, domains: &[MetaDomain]) -> Result<()> {
    let text = serde_json::to_string_pretty(domains)?;
    std::fs::write(path, text + "\n").map_err(|e| Error::io(path, e))
}

/// Round-robin meta-domain choice.
pub fn select_meta_domain(iteration: u64, k: usize) -> usize {
    (iteration % k as u64) as usize
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub enum AdaptOrigin {
    TransformedSource { source_index: usize, meta_domain: usize },
    Calibration { target_index: usize },
}

#[derive(Clone, Debug)]
pub struct AdaptItem {
    pub image: Arc<ImageRgb>,
    pub label: usize,
    pub origin: AdaptOrigin,
}

/// One batch of the adaptation set: transformed source samples alternating
/// with calibration samples.
#[derive(Clone, Debug)]
pub struct AdaptBatch {
    pub meta_domain: usize,
    pub items: Vec<AdaptItem>,
}

impl AdaptBatch {
    pub fn len(&self) -> usize {
        self.items.len()
    }

    pub fn is_empty(&self) -> bool {
        self.items.is_empty()
    }
}

/// Builds the adaptation batch for `iteration`: the source samples at
/// `source_batch` go through the selected meta-domain's pipeline and are
/// interleaved with as many uniformly drawn calibration samples. Labels
/// must already share one label space.
pub fn assemble_adapt_batch(
    source: &LabeledDataset,
    source_batch: &[usize],
    target: &LabeledDataset,
    cal: &[usize],
    meta_domains: &[MetaDomain],
    iteration: u64,
    seed: u64,
) -> Result<AdaptBatch> {
    if cal.is_empty() {
        return Err(Error::EmptyCalibration);
    }
    if source_batch.is_empty() || meta_domains.is_empty() {
        return Err(Error::contract("adapt batch needs source samples and meta-domains"));
    }
    let j = select_meta_domain(iteration, meta_domains.len());
    let pipeline = &meta_domains[j].pipeline;
    let mut rng = rng_for(seed, &[stream::ADAPT_CAL, iteration]);
    let mut items = Vec::with_capacity(2 * source_batch.len());
    for (pos, &si) in source_batch.iter().enumerate() {
        let s = source
            .samples()
            .get(si)
            .ok_or_else(|| Error::contract(format!("source index {si} out of range")))?;
        let sample_index = (iteration << 32) | pos as u64;
        items.push(AdaptItem {
            image: Arc::new(pipeline.apply(&s.image, sample_index)),
            label: s.label,
            origin: AdaptOrigin::TransformedSource {
                source_index: si,
                meta_domain: j,
            },
        });
        let ti = cal[rng.random_range(0..cal.len())];
        let t = &target.samples()[ti];
        items.push(AdaptItem {
            image: t.image.clone(),
            label: t.label,
            origin: AdaptOrigin::Calibration { target_index: ti },
        });
    }
    Ok(AdaptBatch {
        meta_domain: j,
        items,
    })
}
