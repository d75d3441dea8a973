//! Subcommand implementations. Each resolves its config, validates every
//! input, then creates the output directory and writes
//! `resolved_config.toml` next to its results.

use std::path::{Path, PathBuf};

use metadomain::checkpoint::Checkpoint;
use metadomain::dataset::{load_dataset, read_manifest, LabelMap, LabeledDataset, Split};
use metadomain::evaluation::{
    default_suite, forgetting_report, generate_synthetic_benchmark, robustness_report, write_benchmark, write_text,
    DegradationKind, DegradationSpec, RobustnessReport,
};
use metadomain::imaging::{build_calibration_profile, ImageRgb};
use metadomain::meta_domain::save_meta_domains;
use metadomain::training::{ct_pretrain, guided_tune, train_supervised, write_epoch_csv, Init, Regime, TrainOutcome};
use serde::Serialize;

use crate::config::ExperimentConfig;
use crate::error::{CliError, Result};
use crate::{Command, Common, Schedule, OUT_ENV};

pub const CHECKPOINT_FILE: &str = "checkpoint.bin";
pub const EPOCHS_FILE: &str = "epochs.csv";
pub const PROFILE_FILE: &str = "calibration_profile.json";
pub const META_DOMAINS_FILE: &str = "meta_domains.json";
pub const METRICS_FILE: &str = "metrics.json";
pub const CONFUSION_FILE: &str = "confusion.csv";
pub const ROBUSTNESS_CSV: &str = "robustness.csv";
pub const ROBUSTNESS_JSON: &str = "robustness.json";
pub const FORGETTING_MATRIX: &str = "forgetting_matrix.csv";
pub const FORGETTING_CSV: &str = "forgetting.csv";
pub const FORGETTING_JSON: &str = "forgetting.json";

/// Runs `cmd` and returns its output directory.
pub fn execute(cmd: Command) -> Result<PathBuf> {
    let name = cmd.name();
    match cmd {
        Command::Synth {
            per_class,
            classes,
            size,
            common,
        } => {
            let mut cfg = base_config(&common)?;
            let syn = &mut cfg.data.synthetic;
            set(&mut syn.samples_per_class, per_class);
            set(&mut syn.classes, classes);
            set(&mut syn.size, size);
            syn.validate()?;
            let out = output_dir(&mut cfg, &common, name)?;
            let bench = generate_synthetic_benchmark(cfg.seed, &cfg.data.synthetic)?;
            write_benchmark(&bench, &out)?;
            Ok(out)
        }
        Command::Calibrate { manifest, common } => {
            let mut cfg = base_config(&common)?;
            override_list(&mut cfg.data.source, manifest);
            let images = manifest_images(&cfg.data.source)?;
            let profile = build_calibration_profile(&images)?;
            let out = output_dir(&mut cfg, &common, name)?;
            profile.save_json(&out.join(PROFILE_FILE))?;
            Ok(out)
        }
        Command::Pretrain {
            data,
            init,
            temperature,
            views,
            schedule,
            common,
        } => {
            let mut cfg = base_config(&common)?;
            override_list(&mut cfg.data.source, data);
            set(&mut cfg.contrastive.epochs, schedule.epochs);
            set(&mut cfg.contrastive.learning_rate, schedule.learning_rate);
            set(&mut cfg.contrastive.temperature, temperature);
            set(&mut cfg.contrastive.n_views, views);
            apply_batching(&mut cfg, &schedule);
            let tc = cfg.train_config(Regime::CtPretrain);
            tc.validate()?;
            let init = init.as_deref().map(load_checkpoint).transpose()?;
            let ds = subset(load_domain("--data", &cfg.data.source, None)?, &cfg)?;
            let out = output_dir(&mut cfg, &common, name)?;
            let outcome = ct_pretrain(&ds, init_from(&cfg, init.as_ref()), &tc)?;
            write_outcome(&out, &outcome)?;
            Ok(out)
        }
        Command::Train {
            regime,
            data,
            init,
            schedule,
            common,
        } => {
            let mut cfg = base_config(&common)?;
            if let Some(r) = regime {
                cfg.training.regime = r.parse()?;
            }
            let regime = cfg.training.regime;
            match (regime, &init) {
                (Regime::Naive, Some(_)) => {
                    return Err(CliError::usage("regime naive trains from random weights; drop --init or use finetune"))
                }
                (Regime::Finetune | Regime::FinetuneRandomAugment, None) => {
                    return Err(CliError::usage(format!("regime {regime} requires --init <checkpoint>")))
                }
                (Regime::CtPretrain | Regime::Guided, _) => {
                    return Err(CliError::usage(format!(
                        "train runs naive, finetune or finetune_random_augment; use `{}` for {regime}",
                        if regime == Regime::Guided { "adapt" } else { "pretrain" }
                    )))
                }
                _ => {}
            }
            override_list(&mut cfg.data.source, data);
            apply_schedule(&mut cfg, &schedule);
            let tc = cfg.train_config(regime);
            tc.validate()?;
            let init = init.as_deref().map(load_checkpoint).transpose()?;
            let ds = subset(load_domain("--data", &cfg.data.source, None)?, &cfg)?;
            let out = output_dir(&mut cfg, &common, name)?;
            let outcome = train_supervised(&ds, init_from(&cfg, init.as_ref()), &tc)?;
            write_outcome(&out, &outcome)?;
            Ok(out)
        }
        Command::Adapt {
            source_checkpoint,
            source,
            target,
            label_map,
            k,
            beta1,
            beta2,
            inner_lr,
            calibration_fraction,
            schedule,
            common,
        } => {
            let mut cfg = base_config(&common)?;
            override_list(&mut cfg.data.source, source);
            override_list(&mut cfg.data.target, target);
            if label_map.is_some() {
                cfg.data.label_map = label_map;
            }
            set(&mut cfg.guided.k, k);
            set(&mut cfg.guided.beta1, beta1);
            set(&mut cfg.guided.beta2, beta2);
            set(&mut cfg.guided.inner_lr, inner_lr);
            set(&mut cfg.guided.calibration_fraction, calibration_fraction);
            apply_schedule(&mut cfg, &schedule);
            cfg.training.regime = Regime::Guided;
            let tc = cfg.train_config(Regime::Guided);
            tc.validate()?;
            let ck = load_checkpoint(&source_checkpoint)?;
            let map = cfg.data.label_map.as_deref().map(load_label_map).transpose()?;
            let src = load_domain("--source", &cfg.data.source, Some(&ck.class_names))?;
            let tgt = subset(load_domain("--target", &cfg.data.target, None)?, &cfg)?;
            let out = output_dir(&mut cfg, &common, name)?;
            let outcome = guided_tune(&ck, &src, &tgt, map.as_ref(), &tc)?;
            write_outcome(&out, &outcome)?;
            save_meta_domains(&out.join(META_DOMAINS_FILE), &outcome.meta_domains)?;
            Ok(out)
        }
        Command::Evaluate {
            checkpoint,
            data,
            split,
            suite,
            common,
        } => {
            let mut cfg = base_config(&common)?;
            override_list(&mut cfg.data.source, data);
            let split: Split = split.parse()?;
            let suite = parse_suite(&suite)?;
            let ck = load_checkpoint(&checkpoint)?;
            let ds = load_domain("--data", &cfg.data.source, Some(&ck.class_names))?;
            if ds.split_len(split) == 0 {
                return Err(CliError::usage(format!("domain {} has no {split} samples", ds.domain_name())));
            }
            let out = output_dir(&mut cfg, &common, name)?;
            let report = robustness_report(&ck, &ds, split, &suite, cfg.seed)?;
            write_json(&out.join(METRICS_FILE), &report.clean)?;
            write_text(&out.join(CONFUSION_FILE), &report.clean.confusion_csv(&ck.class_names)?)?;
            write_text(&out.join(ROBUSTNESS_CSV), &report.to_csv()?)?;
            write_json(&out.join(ROBUSTNESS_JSON), &RobustnessSummary::new(&report))?;
            Ok(out)
        }
        Command::Report {
            checkpoints,
            domains,
            split,
            common,
        } => {
            let mut cfg = base_config(&common)?;
            if !domains.is_empty() {
                cfg.data.domains = domains.iter().map(|d| split_list(d)).collect();
            }
            if cfg.data.domains.is_empty() {
                cfg.data.domains = [&cfg.data.source, &cfg.data.target]
                    .into_iter()
                    .filter(|d| !d.is_empty())
                    .cloned()
                    .collect();
            }
            if cfg.data.domains.is_empty() {
                return Err(CliError::usage("report needs at least one --domain"));
            }
            let split: Split = split.parse()?;
            let cks = checkpoints
                .iter()
                .map(|p| load_checkpoint(p))
                .collect::<Result<Vec<_>>>()?;
            let classes = &cks[0].class_names;
            let sets = cfg
                .data
                .domains
                .iter()
                .map(|d| load_domain("--domain", d, Some(classes)))
                .collect::<Result<Vec<_>>>()?;
            let out = output_dir(&mut cfg, &common, name)?;
            let report = forgetting_report(&cks, &sets, split)?;
            write_text(&out.join(FORGETTING_MATRIX), &report.matrix_csv()?)?;
            write_text(&out.join(FORGETTING_CSV), &report.to_csv()?)?;
            write_json(&out.join(FORGETTING_JSON), &report)?;
            Ok(out)
        }
    }
}

fn set<T>(slot: &mut T, value: Option<T>) {
    if let Some(v) = value {
        *slot = v;
    }
}

fn override_list(slot: &mut Vec<PathBuf>, value: Vec<PathBuf>) {
    if !value.is_empty() {
        *slot = value;
    }
}

fn apply_batching(cfg: &mut ExperimentConfig, s: &Schedule) {
    set(&mut cfg.training.batch_size, s.batch_size);
    set(&mut cfg.training.train_fraction, s.train_fraction);
}

fn apply_schedule(cfg: &mut ExperimentConfig, s: &Schedule) {
    set(&mut cfg.training.epochs, s.epochs);
    set(&mut cfg.training.learning_rate, s.learning_rate);
    apply_batching(cfg, s);
}

fn base_config(common: &Common) -> Result<ExperimentConfig> {
    let mut cfg = match &common.config {
        Some(p) => ExperimentConfig::load(p)?,
        None => ExperimentConfig::default(),
    };
    set(&mut cfg.seed, common.seed);
    Ok(cfg)
}

/// Picks the output directory, creates it and writes the resolved config
/// into it. The stored `output_dir` is the directory actually used.
fn output_dir(cfg: &mut ExperimentConfig, common: &Common, command: &str) -> Result<PathBuf> {
    let dir = match (&common.out, &cfg.output_dir) {
        (Some(out), _) => out.clone(),
        (None, Some(root)) => root.join(command),
        (None, None) => match std::env::var_os(OUT_ENV) {
            Some(root) if !root.is_empty() => PathBuf::from(root).join(command),
            _ => PathBuf::from("runs").join(command),
        },
    };
    std::fs::create_dir_all(&dir).map_err(|e| metadomain::Error::Io {
        path: dir.clone(),
        source: e,
    })?;
    cfg.output_dir = Some(dir.clone());
    cfg.save(&dir)?;
    Ok(dir)
}

fn split_list(s: &str) -> Vec<PathBuf> {
    s.split(',').filter(|p| !p.is_empty()).map(PathBuf::from).collect()
}

/// Domain name shared by a manifest list: the first manifest's file stem
/// without a trailing `_train`, `_val` or `_test`.
pub fn domain_name(manifests: &[PathBuf]) -> String {
    let stem = manifests
        .first()
        .and_then(|m| m.file_stem())
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_default();
    ["_train", "_val", "_test"]
        .iter()
        .find_map(|suffix| stem.strip_suffix(suffix))
        .map(str::to_string)
        .unwrap_or(stem)
}

fn require_file(path: &Path) -> Result<()> {
    if path.is_file() {
        Ok(())
    } else {
        Err(CliError::MissingInput { path: path.to_path_buf() })
    }
}

fn load_domain(flag: &str, manifests: &[PathBuf], classes: Option<&[String]>) -> Result<LabeledDataset> {
    if manifests.is_empty() {
        return Err(CliError::usage(format!("no manifests given ({flag} or the config's [data] section)")));
    }
    for m in manifests {
        require_file(m)?;
    }
    Ok(load_dataset(&domain_name(manifests), manifests, classes)?)
}

/// Every image listed by `manifests`, labels ignored.
fn manifest_images(manifests: &[PathBuf]) -> Result<Vec<ImageRgb>> {
    if manifests.is_empty() {
        return Err(CliError::usage("no manifests given (--manifest or the config's [data] section)"));
    }
    let mut images = Vec::new();
    for m in manifests {
        require_file(m)?;
        let base = m.parent().unwrap_or(Path::new(""));
        for row in read_manifest(m)? {
            images.push(ImageRgb::load(&base.join(&row.path))?);
        }
    }
    if images.is_empty() {
        return Err(metadomain::Error::Manifest {
            path: manifests[0].clone(),
            msg: "no samples".into(),
        }
        .into());
    }
    Ok(images)
}

fn subset(ds: LabeledDataset, cfg: &ExperimentConfig) -> Result<LabeledDataset> {
    let f = cfg.training.train_fraction;
    if f == 1.0 {
        Ok(ds)
    } else {
        Ok(ds.with_train_fraction(f, cfg.seed)?)
    }
}

fn load_checkpoint(path: &Path) -> Result<Checkpoint> {
    require_file(path)?;
    Ok(Checkpoint::load(path)?)
}

fn load_label_map(path: &Path) -> Result<LabelMap> {
    require_file(path)?;
    let text = std::fs::read_to_string(path).map_err(|e| metadomain::Error::Io {
        path: path.to_path_buf(),
        source: e,
    })?;
    serde_json::from_str(&text).map_err(|e| CliError::Config {
        path: path.to_path_buf(),
        msg: e.to_string(),
    })
}

fn init_from<'a>(cfg: &'a ExperimentConfig, ck: Option<&'a Checkpoint>) -> Init<'a> {
    match ck {
        Some(c) => Init::From(c),
        None => Init::Random(&cfg.encoder),
    }
}

fn write_outcome(out: &Path, outcome: &TrainOutcome) -> Result<()> {
    for w in &outcome.warnings {
        eprintln!("warning: {w}");
    }
    outcome.checkpoint.save(&out.join(CHECKPOINT_FILE))?;
    write_epoch_csv(&out.join(EPOCHS_FILE), &outcome.log)?;
    Ok(())
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let text = serde_json::to_string_pretty(value).map_err(metadomain::Error::from)?;
    Ok(write_text(path, &(text + "\n"))?)
}

/// `default` (every kind at severities 1..=3), `none`, or a comma list of
/// `kind@severity` entries such as `blur@2,overexposure@1`.
pub fn parse_suite(text: &str) -> Result<Vec<DegradationSpec>> {
    match text.trim() {
        "default" => Ok(default_suite()),
        "none" | "" => Ok(Vec::new()),
        list => list
            .split(',')
            .map(|item| {
                let (kind, sev) = item
                    .trim()
                    .split_once('@')
                    .ok_or_else(|| CliError::usage(format!("suite entry {item:?} is not kind@severity")))?;
                let kind: DegradationKind = kind.parse()?;
                let sev: u8 = sev
                    .parse()
                    .map_err(|_| CliError::usage(format!("bad severity in suite entry {item:?}")))?;
                Ok(DegradationSpec::new(kind, sev)?)
            })
            .collect(),
    }
}

#[derive(Serialize)]
struct RobustnessSummary<'a> {
    mean_accuracy_drop: f64,
    report: &'a RobustnessReport,
}

impl<'a> RobustnessSummary<'a> {
    fn new(report: &'a RobustnessReport) -> Self {
        Self {
            mean_accuracy_drop: report.mean_accuracy_drop(),
            report,
        }
    }
}
