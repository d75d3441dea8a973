//! Training regimes: supervised SGD (naive, fine-tuning, fine-tuning with
//! random augmentation), contrastive pre-training, and guided-tuning.
//!
//! Every regime is plain minibatch SGD with a constant learning rate.
//! Minibatch order comes from `rng_for(seed, [SHUFFLE, epoch])` over the
//! training split, so two regimes with the same seed see the same target
//! batches and a resumed run continues the exact sequence.

use std::fmt;
use std::path::Path;
use std::str::FromStr;
use std::sync::Arc;

use rand::seq::{index, SliceRandom};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::autodiff::{accumulate, GradientMap, Graph, ParameterSet, Tensor};
use crate::checkpoint::{Checkpoint, MetricSnapshot};
use crate::dataset::{unify_labels, LabelMap, LabeledDataset, Split};
use crate::error::{Error, Result};
use crate::evaluation::evaluate_split;
use crate::imaging::{build_calibration_profile, mean_sharpness};
use crate::losses::{guided_total_loss, multi_positive_infonce, EmbeddingBatch, GuidedLossConfig, SupervisedObjective};
use crate::meta_domain::{
    assemble_adapt_batch, build_meta_domains, partition_meta_domains, sample_calibration, MetaDomain,
    DEFAULT_CALIBRATION_FRACTION,
};
use crate::model::{image_tensor, Encoder, EncoderConfig, ImageBatch};
use crate::seed::{derive_seed, rng_for, stream};
use crate::transforms::{generic_pipeline, TransformPipeline};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Regime {
    Naive,
    Finetune,
    CtPretrain,
    FinetuneRandomAugment,
    Guided,
}

impl Regime {
    pub const ALL: [Regime; 5] = [
        Regime::Naive,
        Regime::Finetune,
        Regime::CtPretrain,
        Regime::FinetuneRandomAugment,
        Regime::Guided,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            Regime::Naive => "naive",
            Regime::Finetune => "finetune",
            Regime::CtPretrain => "ct_pretrain",
            Regime::FinetuneRandomAugment => "finetune_random_augment",
            Regime::Guided => "guided",
        }
    }

    fn is_supervised(self) -> bool {
        matches!(
            self,
            Regime::Naive | Regime::Finetune | Regime::FinetuneRandomAugment
        )
    }
}

impl fmt::Display for Regime {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Regime {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Regime::ALL
            .into_iter()
            .find(|r| r.as_str() == s)
            .ok_or_else(|| Error::contract(format!("unknown regime {s:?}")))
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub regime: Regime,
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub seed: u64,
    /// Augmented views per image for contrastive pre-training.
    pub n_views: usize,
    pub temperature: f64,
    pub standard_denominator: bool,
    pub calibration_fraction: f64,
    pub guided: GuidedLossConfig,
    /// Source images per adaptation batch (each paired with one
    /// calibration image); 0 picks `max(1, batch_size / 8)`.
    pub adapt_source_per_batch: usize,
    /// Blur strength of the self-profiled pipelines used for contrastive
    /// views and random augmentation.
    pub augment_blur_sigma: f64,
    /// Evaluate validation splits after every epoch.
    pub eval_every_epoch: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            regime: Regime::Naive,
            epochs: 10,
            batch_size: 32,
            learning_rate: 0.05,
            seed: 0,
            n_views: 4,
            temperature: 0.1,
            standard_denominator: false,
            calibration_fraction: DEFAULT_CALIBRATION_FRACTION,
            guided: GuidedLossConfig::default(),
            adapt_source_per_batch: 0,
            augment_blur_sigma: 1.0,
            eval_every_epoch: true,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 {
            return Err(Error::contract("batch_size must be >= 1"));
        }
        if !(self.learning_rate >= 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::contract("learning_rate must be a finite value >= 0"));
        }
        if self.n_views == 0 || self.n_views > 255 {
            return Err(Error::contract("n_views must be in 1..=255"));
        }
        if !(self.temperature > 0.0 && self.temperature.is_finite()) {
            return Err(Error::contract("temperature must be > 0"));
        }
        if !(self.calibration_fraction > 0.0 && self.calibration_fraction <= 1.0) {
            return Err(Error::contract("calibration_fraction must be in (0, 1]"));
        }
        if !(self.augment_blur_sigma > 0.0 && self.augment_blur_sigma.is_finite()) {
            return Err(Error::contract("augment_blur_sigma must be > 0"));
        }
        self.guided.validate()
    }

    pub fn adapt_sources(&self) -> usize {
        if self.adapt_source_per_batch > 0 {
            self.adapt_source_per_batch
        } else {
            (self.batch_size / 8).max(1)
        }
    }

    /// SHA-256 of the config's JSON form.
    pub fn digest(&self) -> String {
        let json = serde_json::to_vec(self).expect("config serializes");
        hex::encode(Sha256::digest(&json))
    }

    fn expect_regime(&self, ok: impl Fn(Regime) -> bool, op: &str) -> Result<()> {
        self.validate()?;
        if ok(self.regime) {
            Ok(())
        } else {
            Err(Error::contract(format!("{op} does not run regime {}", self.regime)))
        }
    }
}

/// Starting point of a training run.
#[derive(Clone, Copy, Debug)]
pub enum Init<'a> {
    /// Fresh weights for this encoder layout; the class count is taken
    /// from the dataset.
    Random(&'a EncoderConfig),
    /// Start a new stage from a checkpoint.
    From(&'a Checkpoint),
    /// Continue the checkpoint's own stage from its stored epoch.
    Resume(&'a Checkpoint),
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalRecord {
    pub domain: String,
    pub split: Split,
    pub accuracy: f64,
    pub macro_f1: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub loss: f64,
    pub evals: Vec<EvalRecord>,
}

#[derive(Clone, Debug)]
pub struct TrainOutcome {
    pub checkpoint: Checkpoint,
    pub log: Vec<EpochRecord>,
    pub warnings: Vec<String>,
    /// Guided-tuning only: calibration indices into the target dataset.
    pub calibration: Vec<usize>,
    /// Guided-tuning only.
    pub meta_domains: Vec<MetaDomain>,
}

/// Per-epoch log as CSV with columns
/// `epoch,loss,domain,split,accuracy,macro_f1`; an epoch without
/// evaluations gets one row with empty metric fields.
pub fn write_epoch_csv(path: &Path, log: &[EpochRecord]) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    w.write_record(["epoch", "loss", "domain", "split", "accuracy", "macro_f1"])?;
    for r in log {
        if r.evals.is_empty() {
            w.write_record([r.epoch.to_string(), r.loss.to_string(), String::new(), String::new(), String::new(), String::new()])?;
        }
        for e in &r.evals {
            w.write_record([
                r.epoch.to_string(),
                r.loss.to_string(),
                e.domain.clone(),
                e.split.to_string(),
                e.accuracy.to_string(),
                e.macro_f1.to_string(),
            ])?;
        }
    }
    w.flush().map_err(|e| Error::io(path, e))
}

fn tensor_cache(ds: &LabeledDataset) -> Vec<Arc<Tensor<f64>>> {
    ds.samples().iter().map(|s| Arc::new(image_tensor(&s.image))).collect()
}

fn epoch_order(ds: &LabeledDataset, seed: u64, epoch: usize) -> Vec<usize> {
    let mut idx = ds.split_indices(Split::Train);
    idx.shuffle(&mut rng_for(seed, &[stream::SHUFFLE, epoch as u64]));
    idx
}

fn eval_record(enc: &Encoder, params: &ParameterSet<f64>, ds: &LabeledDataset, split: Split) -> Result<Option<EvalRecord>> {
    if ds.split_len(split) == 0 {
        return Ok(None);
    }
    let m = evaluate_split(enc, params, ds, split)?;
    Ok(Some(EvalRecord {
        domain: ds.domain_name().to_string(),
        split,
        accuracy: m.accuracy,
        macro_f1: m.macro_f1,
    }))
}

fn snapshot(enc: &Encoder, params: &ParameterSet<f64>, ds: &LabeledDataset) -> Result<Option<MetricSnapshot>> {
    for split in [Split::Test, Split::Val] {
        if ds.split_len(split) > 0 {
            return Ok(Some(MetricSnapshot {
                domain: ds.domain_name().to_string(),
                split,
                metrics: evaluate_split(enc, params, ds, split)?,
            }));
        }
    }
    Ok(None)
}

/// Self-profiled appearance pipeline over (up to 256 of) the dataset's
/// training images.
fn self_pipeline(ds: &LabeledDataset, cfg: &TrainConfig, stream_id: u64) -> Result<TransformPipeline> {
    let train = ds.split(Split::Train);
    let step = (train.len() / 256).max(1);
    let profile = build_calibration_profile(train.iter().step_by(step).map(|s| &*s.image))?;
    generic_pipeline(&profile, cfg.augment_blur_sigma, derive_seed(cfg.seed, &[stream_id]))
}

struct Start {
    encoder: Encoder,
    params: ParameterSet<f64>,
    history: Vec<String>,
    epoch: usize,
    warnings: Vec<String>,
}

fn resolve_init(init: Init<'_>, ds: &LabeledDataset, cfg: &TrainConfig) -> Result<Start> {
    let mut warnings = Vec::new();
    let head_seed = derive_seed(cfg.seed, &[stream::HEAD]);
    match init {
        Init::Random(enc_cfg) => {
            let encoder = Encoder::new(enc_cfg.with_class_count(ds.class_count()))?;
            let params = encoder.init_params(derive_seed(cfg.seed, &[stream::INIT]))?;
            Ok(Start {
                encoder,
                params,
                history: Vec::new(),
                epoch: 0,
                warnings,
            })
        }
        Init::From(ck) => {
            ck.validate()?;
            let mut params = ck.params.clone();
            let encoder;
            if ck.class_names == ds.class_names() {
                encoder = Encoder::new(ck.encoder.clone())?;
            } else {
                encoder = Encoder::new(ck.encoder.with_class_count(ds.class_count()))?;
                params = encoder.reinit_head(&params, head_seed)?;
                warnings.push(format!(
                    "classifier head reinitialized: checkpoint classes {:?}, dataset classes {:?}",
                    ck.class_names,
                    ds.class_names()
                ));
            }
            Ok(Start {
                encoder,
                params,
                history: ck.history.clone(),
                epoch: 0,
                warnings,
            })
        }
        Init::Resume(ck) => {
            ck.validate()?;
            if ck.class_names != ds.class_names() || ck.last_domain() != ds.domain_name() {
                return Err(Error::contract(format!(
                    "cannot resume: checkpoint was trained on {:?}, dataset is {:?}",
                    ck.last_domain(),
                    ds.domain_name()
                )));
            }
            let mut history = ck.history.clone();
            history.pop();
            Ok(Start {
                encoder: Encoder::new(ck.encoder.clone())?,
                params: ck.params.clone(),
                history,
                epoch: ck.epoch,
                warnings,
            })
        }
    }
}

fn finish(
    start: Start,
    params: ParameterSet<f64>,
    ds: &LabeledDataset,
    cfg: &TrainConfig,
    log: Vec<EpochRecord>,
) -> Result<TrainOutcome> {
    let mut history = start.history;
    history.push(ds.domain_name().to_string());
    let snap = snapshot(&start.encoder, &params, ds)?;
    let checkpoint = Checkpoint {
        params,
        encoder: start.encoder.config().clone(),
        config_digest: cfg.digest(),
        regime: cfg.regime,
        history,
        class_names: ds.class_names().to_vec(),
        epoch: cfg.epochs.max(start.epoch),
        snapshot: snap,
    };
    checkpoint.validate()?;
    Ok(TrainOutcome {
        checkpoint,
        log,
        warnings: start.warnings,
        calibration: Vec::new(),
        meta_domains: Vec::new(),
    })
}

/// Minibatch SGD on cross-entropy. `finetune_random_augment` passes each
/// training image through a self-profiled appearance pipeline first.
pub fn train_supervised(ds: &LabeledDataset, init: Init<'_>, cfg: &TrainConfig) -> Result<TrainOutcome> {
    cfg.expect_regime(Regime::is_supervised, "train_supervised")?;
    let start = resolve_init(init, ds, cfg)?;
    let tensors = tensor_cache(ds);
    let augment = match cfg.regime {
        Regime::FinetuneRandomAugment => Some(self_pipeline(ds, cfg, stream::AUGMENT)?),
        _ => None,
    };
    let lr = cfg.learning_rate;
    let mut params = start.params.clone();
    let mut log = Vec::new();
    for epoch in start.epoch..cfg.epochs {
        let order = epoch_order(ds, cfg.seed, epoch);
        let mut losses = Vec::new();
        for (b, chunk) in order.chunks(cfg.batch_size).enumerate() {
            let mut batch = ImageBatch::default();
            for (pos, &i) in chunk.iter().enumerate() {
                let x = match &augment {
                    Some(p) => {
                        let sample_index = ((epoch as u64) << 40) | ((b as u64) << 20) | pos as u64;
                        Arc::new(image_tensor(&p.apply(&ds.samples()[i].image, sample_index)))
                    }
                    None => tensors[i].clone(),
                };
                batch.inputs.push(x);
                batch.labels.push(ds.samples()[i].label);
            }
            let (loss, grad) = start.encoder.loss_and_grad(&params, &batch)?;
            params = params.sgd_step(&grad, lr)?;
            losses.push(loss);
        }
        let mut evals = Vec::new();
        if cfg.eval_every_epoch {
            evals.extend(eval_record(&start.encoder, &params, ds, Split::Val)?);
        }
        log.push(EpochRecord {
            epoch: epoch + 1,
            loss: mean(&losses),
            evals,
        });
    }
    finish(start, params, ds, cfg, log)
}

fn mean(v: &[f64]) -> f64 {
    if v.is_empty() {
        f64::NAN
    } else {
        v.iter().sum::<f64>() / v.len() as f64
    }
}

/// One contrastive step: mean multi-positive InfoNCE over the anchors in
/// `images`, where `images[i][0]` is the original and the rest its views.
/// Returns the loss and its gradient with respect to `params`.
pub fn contrastive_step(
    encoder: &Encoder,
    params: &ParameterSet<f64>,
    images: &[Vec<Arc<Tensor<f64>>>],
    temperature: f64,
    standard_denominator: bool,
) -> Result<(f64, GradientMap<f64>)> {
    if images.len() < 2 {
        return Err(Error::NoNegatives);
    }
    let mut towers = Vec::new();
    for group in images {
        for x in group {
            let mut g = Graph::new();
            let p = g.params_from(params)?;
            let input = g.constant((**x).clone());
            let f = encoder.forward(&mut g, &p, input)?;
            towers.push((g, f.embedding));
        }
    }
    let mut lg = Graph::new();
    let mut leaves = Vec::with_capacity(towers.len());
    for (k, (g, e)) in towers.iter().enumerate() {
        leaves.push(lg.param(&format!("z{k}"), g.value(*e).clone())?);
    }
    let mut originals = Vec::new();
    let mut views = Vec::new();
    let mut k = 0;
    for group in images {
        originals.push(leaves[k]);
        views.push(leaves[k + 1..k + group.len()].to_vec());
        k += group.len();
    }
    let batch = EmbeddingBatch {
        originals,
        views,
        temperature,
    };
    let terms = (0..images.len())
        .map(|i| multi_positive_infonce(&mut lg, i, &batch, standard_denominator))
        .collect::<Result<Vec<_>>>()?;
    let sum = lg.add_all(&terms)?;
    let loss = lg.scale(sum, 1.0 / images.len() as f64)?;
    let dz = lg.backward(loss)?;
    let mut grad = GradientMap::new();
    for ((mut g, e), leaf) in towers.into_iter().zip(leaves) {
        let c = g.constant(dz.wrt(leaf));
        let r = g.dot(e, c)?;
        accumulate(&mut grad, &g.backward(r)?.by_name(), 1.0);
    }
    Ok((lg.scalar_value(loss)?, grad))
}

/// Contrastive pre-training: each training image and `n_views` views from
/// a self-profiled appearance pipeline, mean multi-positive InfoNCE over
/// the anchors of each minibatch. The classifier head receives no
/// gradient and stays at its initialization. A trailing minibatch of one
/// image has no negatives and is skipped.
pub fn ct_pretrain(ds: &LabeledDataset, init: Init<'_>, cfg: &TrainConfig) -> Result<TrainOutcome> {
    cfg.expect_regime(|r| r == Regime::CtPretrain, "ct_pretrain")?;
    if ds.split_len(Split::Train) < 2 {
        return Err(Error::NoNegatives);
    }
    let start = resolve_init(init, ds, cfg)?;
    let tensors = tensor_cache(ds);
    let pipeline = self_pipeline(ds, cfg, stream::VIEWS)?;
    let mut params = start.params.clone();
    let mut log = Vec::new();
    for epoch in start.epoch..cfg.epochs {
        let order = epoch_order(ds, cfg.seed, epoch);
        let mut losses = Vec::new();
        for chunk in order.chunks(cfg.batch_size) {
            if chunk.len() < 2 {
                continue;
            }
            let images: Vec<Vec<Arc<Tensor<f64>>>> = chunk
                .iter()
                .map(|&i| {
                    let mut group = vec![tensors[i].clone()];
                    for v in 0..cfg.n_views {
                        let sample_index = ((epoch as u64) << 40) | ((i as u64) << 8) | v as u64;
                        let img = pipeline.apply(&ds.samples()[i].image, sample_index);
                        group.push(Arc::new(image_tensor(&img)));
                    }
                    group
                })
                .collect();
            let (loss, grad) = contrastive_step(
                &start.encoder,
                &params,
                &images,
                cfg.temperature,
                cfg.standard_denominator,
            )?;
            params = params.sgd_step(&grad, cfg.learning_rate)?;
            losses.push(loss);
        }
        log.push(EpochRecord {
            epoch: epoch + 1,
            loss: mean(&losses),
            evals: Vec::new(),
        });
    }
    finish(start, params, ds, cfg, log)
}

/// Everything guided-tuning derives from the target before training.
#[derive(Clone, Debug)]
pub struct GuidedSetup {
    pub source: LabeledDataset,
    pub target: LabeledDataset,
    pub calibration: Vec<usize>,
    pub meta_domains: Vec<MetaDomain>,
}

/// Unifies labels, samples the calibration subset, and builds the `K`
/// meta-domains.
pub fn guided_setup(
    class_names: &[String],
    source_ds: &LabeledDataset,
    target_ds: &LabeledDataset,
    label_map: Option<&LabelMap>,
    cfg: &TrainConfig,
) -> Result<GuidedSetup> {
    if source_ds.class_names() != class_names {
        return Err(Error::LabelMap(format!(
            "source dataset classes {:?} differ from the checkpoint's {:?}",
            source_ds.class_names(),
            class_names
        )));
    }
    let target = unify_labels(class_names, target_ds, label_map)?;
    let calibration = sample_calibration(
        &target,
        cfg.calibration_fraction,
        derive_seed(cfg.seed, &[stream::CALIBRATION]),
    )?;
    let parts = partition_meta_domains(&calibration, cfg.guided.k, derive_seed(cfg.seed, &[stream::PARTITION]))?;
    let source_train = source_ds.split(Split::Train);
    if source_train.is_empty() {
        return Err(Error::contract("source dataset has no training samples"));
    }
    let source_sharpness = mean_sharpness(source_train.iter().map(|s| &*s.image))?;
    let meta_domains = build_meta_domains(
        &target,
        &parts,
        &source_sharpness,
        derive_seed(cfg.seed, &[stream::META_PIPELINE]),
    )?;
    Ok(GuidedSetup {
        source: source_ds.clone(),
        target,
        calibration,
        meta_domains,
    })
}

impl GuidedSetup {
    /// The `K` adaptation batches for optimizer step `step`. Batch `j` uses
    /// iteration `step·K + j`, so round-robin selection gives it
    /// meta-domain `j`.
    pub fn adapt_batches(&self, step: u64, cfg: &TrainConfig) -> Result<Vec<ImageBatch<f64>>> {
        let k = cfg.guided.k as u64;
        let src = self.source.split_indices(Split::Train);
        let m = cfg.adapt_sources().min(src.len());
        (0..k)
            .map(|j| {
                let it = step * k + j;
                let mut rng = rng_for(cfg.seed, &[stream::ADAPT_SOURCE, it]);
                let picked: Vec<usize> = index::sample(&mut rng, src.len(), m)
                    .into_iter()
                    .map(|p| src[p])
                    .collect();
                let ab = assemble_adapt_batch(
                    &self.source,
                    &picked,
                    &self.target,
                    &self.calibration,
                    &self.meta_domains,
                    it,
                    derive_seed(cfg.seed, &[stream::ADAPT_CAL]),
                )?;
                Ok(ImageBatch::from_images(ab.items.iter().map(|i| (&*i.image, i.label))))
            })
            .collect()
    }
}

/// Guided-tuning from a source checkpoint: per optimizer step, one target
/// minibatch (the same sequence fine-tuning would see) and `K`
/// adaptation batches feed [`guided_total_loss`], and SGD follows its
/// gradient. Validation metrics on both domains are logged every epoch.
pub fn guided_tune(
    source_ckpt: &Checkpoint,
    source_ds: &LabeledDataset,
    target_ds: &LabeledDataset,
    label_map: Option<&LabelMap>,
    cfg: &TrainConfig,
) -> Result<TrainOutcome> {
    cfg.expect_regime(|r| r == Regime::Guided, "guided_tune")?;
    let setup = guided_setup(&source_ckpt.class_names, source_ds, target_ds, label_map, cfg)?;
    let target = &setup.target;
    let start = resolve_init(Init::From(source_ckpt), target, cfg)?;
    let tensors = tensor_cache(target);
    let mut params = start.params.clone();
    let mut log = Vec::new();
    let mut step = 0u64;
    for epoch in 0..cfg.epochs {
        let order = epoch_order(target, cfg.seed, epoch);
        let mut losses = Vec::new();
        for chunk in order.chunks(cfg.batch_size) {
            let batch = ImageBatch {
                inputs: chunk.iter().map(|&i| tensors[i].clone()).collect(),
                labels: chunk.iter().map(|&i| target.samples()[i].label).collect(),
            };
            let adapt = setup.adapt_batches(step, cfg)?;
            let gl = guided_total_loss(&start.encoder, &params, &batch, &adapt, &cfg.guided)?;
            params = params.sgd_step(&gl.gradient, cfg.learning_rate)?;
            losses.push(gl.total);
            step += 1;
        }
        let mut evals = Vec::new();
        if cfg.eval_every_epoch {
            evals.extend(eval_record(&start.encoder, &params, source_ds, Split::Val)?);
            evals.extend(eval_record(&start.encoder, &params, target, Split::Val)?);
        }
        log.push(EpochRecord {
            epoch: epoch + 1,
            loss: mean(&losses),
            evals,
        });
    }
    let mut out = finish(start, params, target, cfg, log)?;
    out.calibration = setup.calibration;
    out.meta_domains = setup.meta_domains;
    Ok(out)
}
