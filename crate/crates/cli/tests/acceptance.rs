//! Acceptance suite. Runs every criterion, prints one `[PASS]` or `[FAIL]`
//! line each and exits nonzero if any fails.
//!
//! `cargo test -p metadomain-cli --test acceptance`

use std::collections::BTreeSet;
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::{Path, PathBuf};
use std::process::Command;
use std::sync::Arc;
use std::time::{Duration, Instant};

use metadomain::autodiff::gradcheck::{max_relative_error, relative_error, DEFAULT_STEP};
use metadomain::autodiff::{GradientMap, Graph, ParameterSet, Tensor, Var};
use metadomain::checkpoint::Checkpoint;
use metadomain::dataset::{LabeledDataset, Split};
use metadomain::evaluation::{
    default_suite, evaluate_checkpoint, forgetting_report, generate_synthetic_benchmark, robustness_report,
    SyntheticBenchmark, SyntheticConfig,
};
use metadomain::imaging::{sharpness_stats, ImageRgb};
use metadomain::losses::{
    contrastive_loss, cross_entropy, guided_total_loss, inner_meta_step, multi_positive_infonce, EmbeddingBatch,
    GuidedLossConfig, SupervisedObjective,
};
use metadomain::meta_domain::partition_meta_domains;
use metadomain::model::{ConvBlock, Encoder, EncoderConfig, ImageBatch};
use metadomain::training::{ct_pretrain, guided_tune, train_supervised, Init, Regime, TrainConfig};
use metadomain::transforms::{color_transfer, color_transfer_unclipped, gaussian_blur};
use proptest::prelude::*;
use proptest::test_runner::{Config as PropConfig, TestRunner};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

type Check = std::result::Result<String, String>;

const FD_TOL: f64 = 1e-4;
const SEEDS: [u64; 5] = [0, 1, 2, 3, 4];

macro_rules! ensure {
    ($cond:expr, $($fmt:tt)+) => {
        let ok: bool = $cond;
        if !ok {
            return Err(format!($($fmt)+));
        }
    };
}

fn main() {
    let mut bench = Benchmarks::default();
    let results = vec![
        run(1, "gradient correctness", criterion_gradients),
        run(2, "reduction identities", criterion_reductions),
        run(3, "closed-form loss values", criterion_closed_forms),
        run(4, "color-transfer contract", criterion_color_transfer),
        run(5, "sharpness monotonicity", criterion_sharpness),
        run(6, "partition properties", criterion_partitions),
        run(7, "forgetting", || criterion_forgetting(&mut bench)),
        run(8, "robustness", || criterion_robustness(&mut bench)),
        run(9, "data efficiency", || criterion_data_efficiency(&mut bench)),
        run(10, "determinism", criterion_determinism),
    ];
    let failed = results.iter().filter(|ok| !**ok).count();
    println!("{} passed, {failed} failed", results.len() - failed);
    if failed > 0 {
        std::process::exit(1);
    }
}

fn run(n: usize, name: &str, f: impl FnOnce() -> Check) -> bool {
    let t = Instant::now();
    let res = catch_unwind(AssertUnwindSafe(f)).unwrap_or_else(|p| {
        let msg = p
            .downcast_ref::<String>()
            .cloned()
            .or_else(|| p.downcast_ref::<&str>().map(|s| s.to_string()))
            .unwrap_or_default();
        Err(format!("panicked: {msg}"))
    });
    let secs = t.elapsed().as_secs_f64();
    match &res {
        Ok(detail) => println!("[PASS] {n}. {name}: {detail} ({secs:.1}s)"),
        Err(detail) => println!("[FAIL] {n}. {name}: {detail} ({secs:.1}s)"),
    }
    res.is_ok()
}

fn rand_tensor(rng: &mut ChaCha8Rng, shape: &[usize], lo: f64, hi: f64) -> Tensor<f64> {
    let n: usize = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| rng.random_range(lo..hi)).collect()).unwrap()
}

/// Entries with magnitude in [0.05, 1.5], keeping relu kinks out of the
/// stencil.
fn away_from_zero(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor<f64> {
    let n: usize = shape.iter().product();
    let data = (0..n)
        .map(|_| {
            let m = rng.random_range(0.05..1.5);
            if rng.random::<bool>() {
                m
            } else {
                -m
            }
        })
        .collect();
    Tensor::new(shape.to_vec(), data).unwrap()
}

fn rand_vec(rng: &mut ChaCha8Rng, d: usize) -> Vec<f64> {
    loop {
        let v: Vec<f64> = (0..d).map(|_| rng.random_range(-1.0..1.0)).collect();
        if v.iter().map(|x| x * x).sum::<f64>() > 0.05 {
            return v;
        }
    }
}

fn vector(v: &[f64]) -> Tensor<f64> {
    Tensor::vector(v.to_vec()).unwrap()
}

/// `Σ w ⊙ y` with fixed random weights.
fn project(g: &mut Graph<f64>, y: Var, seed: u64) -> Var {
    let shape = g.value(y).shape().to_vec();
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5EED);
    let w = g.constant(rand_tensor(&mut rng, &shape, -1.0, 1.0));
    let p = g.mul(y, w).unwrap();
    g.sum(p).unwrap()
}

// ---------------------------------------------------------------- 1

type Build = Box<dyn Fn(&mut Graph<f64>, &[Var]) -> Var>;

struct FdCase {
    name: &'static str,
    inputs: Vec<Tensor<f64>>,
    f: Build,
}

fn case(name: &'static str, inputs: Vec<Tensor<f64>>, f: impl Fn(&mut Graph<f64>, &[Var]) -> Var + 'static) -> FdCase {
    FdCase {
        name,
        inputs,
        f: Box::new(f),
    }
}

fn primitive_cases(seed: u64) -> Vec<FdCase> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut d = |max: usize| rng.random_range(1..=max);
    let (r, c) = (d(4), d(4));
    let (m, k, n) = (d(6), d(6), d(6));
    let len = d(16);
    let shape3 = [d(3), d(4), d(4)];
    let (ci, co) = (d(3), d(3));
    let mut rng = ChaCha8Rng::seed_from_u64(seed.wrapping_add(1));
    let (h, w) = (rng.random_range(3..=7), rng.random_range(3..=7));
    let kernel = if rng.random::<bool>() { 3 } else { 2 };
    let stride = rng.random_range(1..=2);
    let padding = rng.random_range(0..=1);
    let a = rand_tensor(&mut rng, &[r, c], -2.0, 2.0);
    let b = rand_tensor(&mut rng, &[r, c], -2.0, 2.0);
    let row = rand_tensor(&mut rng, &[1, c], -2.0, 2.0);
    let s = rand_tensor(&mut rng, &[], -2.0, 2.0);
    let ma = rand_tensor(&mut rng, &[m, k], -1.0, 1.0);
    let mb = rand_tensor(&mut rng, &[k, n], -1.0, 1.0);
    let mv = rand_tensor(&mut rng, &[k], -1.0, 1.0);
    let img = rand_tensor(&mut rng, &[ci, h, w], -1.0, 1.0);
    let wt = rand_tensor(&mut rng, &[co, ci, kernel, kernel], -1.0, 1.0);
    let x = away_from_zero(&mut rng, &[len]);
    let pos = rand_tensor(&mut rng, &[len], 0.2, 3.0);
    let wide = away_from_zero(&mut rng, &[len.min(15) + 1]);
    let t3 = rand_tensor(&mut rng, &shape3, -2.0, 2.0);
    let pair_len = rng.random_range(2..=16);
    let p1 = rand_tensor(&mut rng, &[pair_len], -1.0, 1.0);
    let p2 = rand_tensor(&mut rng, &[pair_len], -1.0, 1.0);
    let terms: Vec<Tensor<f64>> = (0..rng.random_range(1..=8)).map(|_| rand_tensor(&mut rng, &[], -5.0, 5.0)).collect();
    let c0: f64 = rng.random_range(-2.0..2.0);

    let unary = |f: fn(&mut Graph<f64>, Var) -> metadomain::Result<Var>| {
        move |g: &mut Graph<f64>, v: &[Var]| {
            let y = f(g, v[0]).unwrap();
            project(g, y, seed)
        }
    };
    let binary = |f: fn(&mut Graph<f64>, Var, Var) -> metadomain::Result<Var>| {
        move |g: &mut Graph<f64>, v: &[Var]| {
            let y = f(g, v[0], v[1]).unwrap();
            project(g, y, seed)
        }
    };
    vec![
        case("add", vec![a.clone(), b.clone()], binary(Graph::add)),
        case("mul", vec![a.clone(), b.clone()], binary(Graph::mul)),
        case("sub", vec![a.clone(), b], binary(Graph::sub)),
        case("add broadcast", vec![a.clone(), row.clone()], binary(Graph::add)),
        case("mul broadcast", vec![a.clone(), row], binary(Graph::mul)),
        case("mul scalar", vec![a.clone(), s], binary(Graph::mul)),
        case("matmul", vec![ma.clone(), mb], binary(Graph::matmul)),
        case("matvec", vec![ma, mv], binary(Graph::matmul)),
        case("conv2d", vec![img, wt], move |g, v| {
            let y = g.conv2d(v[0], v[1], stride, padding).unwrap();
            project(g, y, seed)
        }),
        case("relu", vec![x.clone()], unary(Graph::relu)),
        case("exp", vec![x.clone()], unary(Graph::exp)),
        case("neg", vec![x.clone()], unary(Graph::neg)),
        case("log", vec![pos.clone()], unary(Graph::log)),
        case("reciprocal", vec![pos], unary(Graph::reciprocal)),
        case("scale", vec![a.clone()], move |g, v| {
            let y = g.scale(v[0], c0).unwrap();
            project(g, y, seed)
        }),
        case("add_scalar", vec![a], move |g, v| {
            let y = g.add_scalar(v[0], c0).unwrap();
            project(g, y, seed)
        }),
        case("norm", vec![x.clone()], |g, v| g.norm(v[0]).unwrap()),
        case("normalize", vec![wide], unary(Graph::normalize)),
        case("sum", vec![t3.clone()], |g, v| {
            let y = g.sum(v[0]).unwrap();
            g.scale(y, 1.7).unwrap()
        }),
        case("mean", vec![t3.clone()], |g, v| g.mean(v[0]).unwrap()),
        case("sum_axes", vec![t3.clone()], move |g, v| {
            let y = g.sum_axes(v[0], &[0, 2]).unwrap();
            project(g, y, seed)
        }),
        case("mean_axes", vec![t3.clone()], move |g, v| {
            let y = g.mean_axes(v[0], &[1, 2]).unwrap();
            project(g, y, seed)
        }),
        case("softmax", vec![t3], unary(Graph::softmax)),
        case("dot", vec![p1.clone(), p2.clone()], |g, v| g.dot(v[0], v[1]).unwrap()),
        case("cosine_similarity", vec![p1, p2], |g, v| g.cosine_similarity(v[0], v[1]).unwrap()),
        case("log_sum_exp", terms.clone(), |g, v| g.log_sum_exp(v).unwrap()),
        case("add_all", terms, move |g, v| {
            let y = g.add_all(v).unwrap();
            g.scale(y, 0.3).unwrap()
        }),
    ]
}

fn batch_from(vars: &[Var], n: usize, per: usize, tau: f64) -> EmbeddingBatch<f64> {
    EmbeddingBatch {
        originals: vars[..n].to_vec(),
        views: (0..n).map(|i| vars[n + i * per..n + (i + 1) * per].to_vec()).collect(),
        temperature: tau,
    }
}

fn loss_cases(seed: u64) -> Vec<FdCase> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x1055);
    let n = rng.random_range(2..=8);
    let d = rng.random_range(2..=16);
    let per = rng.random_range(1..=3);
    let tau = rng.random_range(0.1..2.0);
    let i = rng.random_range(0..n);
    let j = (i + rng.random_range(1..n)) % n;
    let emb: Vec<Tensor<f64>> = (0..n * (1 + per)).map(|_| vector(&rand_vec(&mut rng, d))).collect();
    let rows = rng.random_range(1..=8);
    let classes = rng.random_range(2..=16);
    let logits: Vec<Tensor<f64>> = (0..rows).map(|_| vector(&rand_vec(&mut rng, classes))).collect();
    let labels: Vec<usize> = (0..rows).map(|_| rng.random_range(0..classes)).collect();
    vec![
        case("pairwise contrastive", emb.clone(), move |g, v| {
            contrastive_loss(g, i, j, &batch_from(v, n, per, tau)).unwrap()
        }),
        case("multi-positive InfoNCE", emb.clone(), move |g, v| {
            multi_positive_infonce(g, i, &batch_from(v, n, per, tau), false).unwrap()
        }),
        case("InfoNCE standard denominator", emb, move |g, v| {
            multi_positive_infonce(g, i, &batch_from(v, n, per, tau), true).unwrap()
        }),
        case("cross-entropy", logits, move |g, v| cross_entropy(g, v, &labels).unwrap()),
    ]
}

fn tiny_encoder() -> Encoder {
    Encoder::new(EncoderConfig {
        input_size: 8,
        blocks: vec![ConvBlock {
            channels: 2,
            kernel: 3,
            stride: 2,
        }],
        embedding_dim: 3,
        class_count: 2,
    })
    .unwrap()
}

fn random_images(rng: &mut ChaCha8Rng, n: usize) -> ImageBatch<f64> {
    ImageBatch {
        inputs: (0..n)
            .map(|_| Arc::new(rand_tensor(rng, &[3, 8, 8], 0.0, 1.0)))
            .collect(),
        labels: (0..n).map(|i| i % 2).collect(),
    }
}

/// Central differences of the batch loss over every encoder parameter.
fn encoder_fd(enc: &Encoder, p: &ParameterSet<f64>, batch: &ImageBatch<f64>) -> GradientMap<f64> {
    let h = DEFAULT_STEP;
    let mut out = GradientMap::new();
    for (name, t) in p.iter() {
        let g = (0..t.len())
            .map(|k| {
                let bump = |d: f64| {
                    let mut data = t.data().to_vec();
                    data[k] += d;
                    let mut q = p.clone();
                    q.replace(name, Tensor::new(t.shape().to_vec(), data).unwrap()).unwrap();
                    enc.loss(&q, batch).unwrap()
                };
                (bump(h) - bump(-h)) / (2.0 * h)
            })
            .collect();
        out.insert(name.to_string(), Tensor::new(t.shape().to_vec(), g).unwrap());
    }
    out
}

fn map_rel_err(a: &GradientMap<f64>, b: &GradientMap<f64>) -> f64 {
    let flat = |m: &GradientMap<f64>| m.values().flat_map(|t| t.data().to_vec()).collect::<Vec<_>>();
    relative_error(&flat(a), &flat(b))
}

fn criterion_gradients() -> Check {
    let t = Instant::now();
    let enc = tiny_encoder();
    let mut worst = (0.0, "");
    let mut checks = 0usize;
    for seed in 0..100u64 {
        for c in primitive_cases(seed).into_iter().chain(loss_cases(seed)) {
            let e = max_relative_error(&c.inputs, DEFAULT_STEP, &|g, v| Ok((c.f)(g, v))).map_err(|e| e.to_string())?;
            ensure!(e < FD_TOL, "{} seed {seed}: relative error {e:.2e}", c.name);
            if e > worst.0 {
                worst = (e, c.name);
            }
            checks += 1;
        }
        // Supervised loss through the encoder and the outer term at θ̂.
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0xE4C);
        let p: ParameterSet<f64> = enc.init_params(seed).unwrap();
        let target = random_images(&mut rng, 2);
        let adapt = random_images(&mut rng, 2);
        let (_, g) = enc.loss_and_grad(&p, &target).unwrap();
        let e = map_rel_err(&g, &encoder_fd(&enc, &p, &target));
        ensure!(e < FD_TOL, "encoder loss seed {seed}: relative error {e:.2e}");
        let hat = inner_meta_step(&enc, &p, &adapt, 0.05).unwrap();
        let (_, gh) = enc.loss_and_grad(&hat, &target).unwrap();
        let eh = map_rel_err(&gh, &encoder_fd(&enc, &hat, &target));
        ensure!(eh < FD_TOL, "guided outer term seed {seed}: relative error {eh:.2e}");
        for (e, name) in [(e, "encoder loss"), (eh, "guided outer term")] {
            if e > worst.0 {
                worst = (e, name);
            }
        }
        checks += 2;
    }
    let el = t.elapsed();
    ensure!(el < Duration::from_secs(30), "took {:.1}s, limit 30s", el.as_secs_f64());
    Ok(format!("{checks} checks over 100 seeds, worst {:.2e} ({})", worst.0, worst.1))
}

// ---------------------------------------------------------------- 2

fn small_encoder() -> EncoderConfig {
    EncoderConfig {
        input_size: 16,
        blocks: [4, 8]
            .into_iter()
            .map(|channels| ConvBlock {
                channels,
                kernel: 3,
                stride: 2,
            })
            .collect(),
        embedding_dim: 8,
        class_count: 3,
    }
}

fn bits(p: &ParameterSet<f64>) -> Vec<(String, Vec<u64>)> {
    p.iter()
        .map(|(n, t)| (n.to_string(), t.data().iter().map(|v| v.to_bits()).collect()))
        .collect()
}

fn criterion_reductions() -> Check {
    // Objective level: guided total loss with zero betas against plain SGD.
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let enc = tiny_encoder();
    let mut p: ParameterSet<f64> = enc.init_params(4).unwrap();
    let mut q = p.clone();
    let zero = GuidedLossConfig {
        beta1: 0.0,
        beta2: 0.0,
        k: 2,
        inner_lr: 0.05,
    };
    for step in 0..10 {
        let target = random_images(&mut rng, 3);
        let adapts = vec![random_images(&mut rng, 2), random_images(&mut rng, 2)];
        let (l, g) = enc.loss_and_grad(&p, &target).unwrap();
        let out = guided_total_loss(&enc, &q, &target, &adapts, &zero).unwrap();
        ensure!(l.to_bits() == out.total.to_bits(), "step {step}: loss {l} vs {}", out.total);
        p = p.sgd_step(&g, 0.1).unwrap();
        q = q.sgd_step(&out.gradient, 0.1).unwrap();
        ensure!(bits(&p) == bits(&q), "objective-level parameters diverge at step {step}");
    }

    // Training level: one optimizer step per epoch, so each epoch count is
    // one point on the trajectory.
    let bench = generate_synthetic_benchmark(
        2,
        &SyntheticConfig {
            samples_per_class: 10,
            size: 16,
            ..SyntheticConfig::default()
        },
    )
    .map_err(|e| e.to_string())?;
    let train_len = bench.b.split_len(Split::Train);
    let base = TrainConfig {
        batch_size: train_len,
        learning_rate: 0.1,
        seed: 3,
        eval_every_epoch: false,
        ..TrainConfig::default()
    };
    let src = train_supervised(
        &bench.a,
        Init::Random(&small_encoder()),
        &TrainConfig {
            regime: Regime::Naive,
            epochs: 2,
            ..base.clone()
        },
    )
    .map_err(|e| e.to_string())?
    .checkpoint;
    for steps in 1..=10 {
        let guided = TrainConfig {
            regime: Regime::Guided,
            epochs: steps,
            guided: GuidedLossConfig {
                beta1: 0.0,
                beta2: 0.0,
                ..GuidedLossConfig::default()
            },
            ..base.clone()
        };
        let gt = guided_tune(&src, &bench.a, &bench.b, None, &guided).map_err(|e| e.to_string())?;
        let ft = train_supervised(
            &bench.b,
            Init::From(&src),
            &TrainConfig {
                regime: Regime::Finetune,
                ..guided.clone()
            },
        )
        .map_err(|e| e.to_string())?;
        ensure!(
            bits(&gt.checkpoint.params) == bits(&ft.checkpoint.params),
            "guided_tune and fine-tuning differ after step {steps}"
        );
    }

    // Zero inner step.
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let p0: ParameterSet<f64> = enc.init_params(11).unwrap();
    let same = inner_meta_step(&enc, &p0, &random_images(&mut rng, 4), 0.0).unwrap();
    ensure!(bits(&same) == bits(&p0), "inner step with zero rate changed parameters");

    // One view: two log terms, each weighted one half.
    let mut worst: f64 = 0.0;
    for seed in 0..100u64 {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let n = rng.random_range(2..=6);
        let d = rng.random_range(2..=8);
        let tau = rng.random_range(0.1..2.0);
        let z: Vec<Vec<f64>> = (0..n).map(|_| rand_vec(&mut rng, d)).collect();
        let view = rand_vec(&mut rng, d);
        let got = infonce_value(&z, &view, tau);
        let term = |a: &[f64]| {
            let pos = cos(a, &z[0]) / tau;
            let neg: Vec<f64> = z[1..].iter().map(|zj| cos(a, zj) / tau).collect();
            pos - lse(&neg)
        };
        let want = -0.5 * (term(&z[0]) + term(&view));
        worst = worst.max((got - want).abs());
    }
    ensure!(worst < 1e-12, "single-view weighting off by {worst:.2e}");
    Ok(format!(
        "10 steps bitwise at objective and training level; zero inner rate leaves θ; one-view weight ½ (max dev {worst:.1e})"
    ))
}

/// Multi-positive loss for anchor 0 with a single view; the other samples'
/// views are placeholders.
fn infonce_value(z: &[Vec<f64>], view: &[f64], tau: f64) -> f64 {
    let mut g = Graph::new();
    let originals: Vec<Var> = z.iter().map(|v| g.constant(vector(v))).collect();
    let views: Vec<Vec<Var>> = (0..z.len())
        .map(|i| {
            let v = if i == 0 { view.to_vec() } else { z[i].clone() };
            vec![g.constant(vector(&v))]
        })
        .collect();
    let b = EmbeddingBatch {
        originals,
        views,
        temperature: tau,
    };
    let l = multi_positive_infonce(&mut g, 0, &b, false).unwrap();
    g.scalar_value(l).unwrap()
}

fn cos(a: &[f64], b: &[f64]) -> f64 {
    let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
    let na = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nb = b.iter().map(|x| x * x).sum::<f64>().sqrt();
    dot / (na * nb)
}

fn lse(xs: &[f64]) -> f64 {
    let m = xs.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    m + xs.iter().map(|x| (x - m).exp()).sum::<f64>().ln()
}

// ---------------------------------------------------------------- 3

fn pairwise_value(z: &[Vec<f64>], i: usize, j: usize, tau: f64) -> f64 {
    let mut g = Graph::new();
    let originals: Vec<Var> = z.iter().map(|v| g.constant(vector(v))).collect();
    let b = EmbeddingBatch {
        originals,
        views: vec![],
        temperature: tau,
    };
    let l = contrastive_loss(&mut g, i, j, &b).unwrap();
    g.scalar_value(l).unwrap()
}

/// `L(c; θ) = ½‖θ − c‖²` on one parameter vector.
struct Quadratic;

impl SupervisedObjective<f64> for Quadratic {
    type Batch = Vec<f64>;

    fn loss_and_grad(&self, params: &ParameterSet<f64>, c: &Vec<f64>) -> metadomain::Result<(f64, GradientMap<f64>)> {
        let theta = params.get("theta").unwrap().data();
        let diff: Vec<f64> = theta.iter().zip(c).map(|(t, c)| t - c).collect();
        let loss = 0.5 * diff.iter().map(|d| d * d).sum::<f64>();
        let mut g = GradientMap::new();
        g.insert("theta".into(), vector(&diff));
        Ok((loss, g))
    }
}

fn theta(v: &[f64]) -> ParameterSet<f64> {
    let mut p = ParameterSet::new();
    p.insert("theta", vector(v)).unwrap();
    p
}

fn criterion_closed_forms() -> Check {
    let e = std::f64::consts::E;
    let mut rows: Vec<(&str, f64, f64)> = Vec::new();

    let z = vec![vec![1.0, 0.0], vec![1.0, 0.0], vec![0.0, 1.0]];
    rows.push(("pairwise, k=i in denominator", pairwise_value(&z, 0, 1, 1.0), -(e / (e + e + 1.0)).ln()));

    for n in [2usize, 5, 8] {
        let same = vec![vec![0.3, -0.4, 1.2]; n];
        rows.push(("pairwise, identical embeddings", pairwise_value(&same, 0, n - 1, 0.37), (n as f64).ln()));
    }

    let z = vec![vec![1.0, 0.0], vec![0.0, 1.0]];
    rows.push(("multi-positive, aligned view", infonce_value(&z, &[1.0, 0.0], 1.0), -1.0));
    // View aligned with the sole negative: the k=0 self term gives +1 and
    // the view term −1.
    rows.push(("multi-positive, view on the negative", infonce_value(&z, &[0.0, 1.0], 1.0), 0.0));

    let mut g = Graph::new();
    let l = g.constant(vector(&[0.0, 0.0]));
    let ce = cross_entropy(&mut g, &[l], &[1]).unwrap();
    rows.push(("cross-entropy, uniform logits", g.scalar_value(ce).unwrap(), 2f64.ln()));

    // θ = (1, −1), target c = 0, adapt c = (1, 1), α = 0.1, K = 1:
    // θ̂ = (1, −0.8); 1 + ½·0.82 + ½·1.62.
    let cfg = GuidedLossConfig {
        beta1: 0.5,
        beta2: 0.5,
        k: 1,
        inner_lr: 0.1,
    };
    let out = guided_total_loss(&Quadratic, &theta(&[1.0, -1.0]), &vec![0.0, 0.0], &[vec![1.0, 1.0]], &cfg)
        .map_err(|e| e.to_string())?;
    rows.push(("guided total, quadratic probe", out.total, 2.22));

    let th = [0.4, -1.3, 2.0];
    let t = vec![0.1, 0.2, -0.5];
    let (b1, b2) = (0.7, 1.9);
    let collapse = GuidedLossConfig {
        beta1: b1,
        beta2: b2,
        k: 3,
        inner_lr: 0.0,
    };
    let out = guided_total_loss(&Quadratic, &theta(&th), &t, &vec![t.clone(); 3], &collapse).map_err(|e| e.to_string())?;
    let plain = 0.5 * th.iter().zip(&t).map(|(a, b)| (a - b).powi(2)).sum::<f64>();
    rows.push(("guided total, θ̂ = θ collapse", out.total, (1.0 + b1 + b2) * plain));

    for (name, got, want) in &rows {
        ensure!((got - want).abs() < 1e-9, "{name}: {got} vs {want}");
    }
    Ok(format!(
        "{} values within 1e-9; view-on-negative case evaluates to 0 by the loss formula",
        rows.len()
    ))
}

// ---------------------------------------------------------------- 4

/// Reference sRGB (D65) to L*a*b*, written out independently of the
/// library conversion but with the same matrix and white point.
fn ref_lab(rgb: [f64; 3]) -> [f64; 3] {
    let lin = rgb.map(|c| {
        if c <= 0.04045 {
            c / 12.92
        } else {
            ((c + 0.055) / 1.055).powf(2.4)
        }
    });
    let x = 0.4124 * lin[0] + 0.3576 * lin[1] + 0.1805 * lin[2];
    let y = 0.2126 * lin[0] + 0.7152 * lin[1] + 0.0722 * lin[2];
    let z = 0.0193 * lin[0] + 0.1192 * lin[1] + 0.9505 * lin[2];
    let (xn, yn, zn) = (0.4124 + 0.3576 + 0.1805, 1.0, 0.0193 + 0.1192 + 0.9505);
    let f = |t: f64| {
        if t > (6.0f64 / 29.0).powi(3) {
            t.cbrt()
        } else {
            t / (3.0 * (6.0f64 / 29.0).powi(2)) + 4.0 / 29.0
        }
    };
    let (fx, fy, fz) = (f(x / xn), f(y / yn), f(z / zn));
    [116.0 * fy - 16.0, 500.0 * (fx - fy), 200.0 * (fy - fz)]
}

fn ref_stats(img: &ImageRgb) -> ([f64; 3], [f64; 3]) {
    let labs: Vec<[f64; 3]> = img.pixels().map(ref_lab).collect();
    let n = labs.len() as f64;
    let mean: [f64; 3] = std::array::from_fn(|c| labs.iter().map(|p| p[c]).sum::<f64>() / n);
    let std = std::array::from_fn(|c| (labs.iter().map(|p| (p[c] - mean[c]).powi(2)).sum::<f64>() / n).sqrt());
    (mean, std)
}

/// Smooth random texture in `[lo, hi]`: random sinusoids plus noise.
fn texture(rng: &mut ChaCha8Rng, w: usize, h: usize, lo: f64, hi: f64) -> ImageRgb {
    let waves: Vec<[f64; 4]> = (0..9)
        .map(|_| {
            [
                rng.random_range(0.1..1.5),
                rng.random_range(0.1..1.5),
                rng.random_range(0.0..6.3),
                rng.random_range(0.2..1.0),
            ]
        })
        .collect();
    let noise: Vec<f64> = (0..w * h * 3).map(|_| rng.random_range(-0.3..0.3)).collect();
    ImageRgb::from_fn(w, h, |x, y| {
        std::array::from_fn(|c| {
            let mut v = 0.0;
            for wv in &waves[3 * c..3 * c + 3] {
                v += wv[3] * (wv[0] * x as f64 + wv[1] * y as f64 + wv[2]).sin();
            }
            let t = ((v / 3.0 + noise[(y * w + x) * 3 + c]) * 0.5 + 0.5).clamp(0.0, 1.0);
            lo + (hi - lo) * t
        })
    })
    .unwrap()
}

fn criterion_color_transfer() -> Check {
    let mut checked = 0;
    let mut worst_stat: f64 = 0.0;
    let mut worst_self: f64 = 0.0;
    for seed in 0..200u64 {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let (w, h) = (rng.random_range(6..=20), rng.random_range(6..=20));
        let src = texture(&mut rng, w, h, 0.3, 0.7);
        let (w2, h2) = (rng.random_range(6..=20), rng.random_range(6..=20));
        let target_img = texture(&mut rng, w2, h2, 0.35, 0.65);
        let target = metadomain::imaging::color_stats(&metadomain::imaging::rgb_to_lab(&target_img));
        let (tm, ts) = ref_stats(&target_img);
        for c in 0..3 {
            worst_stat = worst_stat.max((tm[c] - target.mean[c]).abs().max((ts[c] - target.std[c]).abs()));
        }

        let own = metadomain::imaging::color_stats(&metadomain::imaging::rgb_to_lab(&src));
        let same = color_transfer(&src, &own);
        for (a, b) in same.data().iter().zip(src.data()) {
            worst_self = worst_self.max((a - b).abs());
        }

        if !color_transfer_unclipped(&src, &target).iter().all(|v| (0.0..=1.0).contains(v)) {
            continue;
        }
        let (gm, gs) = ref_stats(&color_transfer(&src, &target));
        for c in 0..3 {
            worst_stat = worst_stat.max((gm[c] - tm[c]).abs()).max((gs[c] - ts[c]).abs());
        }
        checked += 1;
    }
    ensure!(checked >= 100, "only {checked} non-clipping cases");
    ensure!(worst_stat < 1e-3, "LAB statistic off by {worst_stat:.2e}");
    ensure!(worst_self < 1e-6, "self-transfer moved a pixel by {worst_self:.2e}");
    Ok(format!(
        "{checked} non-clipping transfers, max stat error {worst_stat:.1e}; self-transfer max change {worst_self:.1e} over 200 images"
    ))
}

// ---------------------------------------------------------------- 5

fn criterion_sharpness() -> Check {
    let mut rng = ChaCha8Rng::seed_from_u64(2025);
    let sigmas: Vec<f64> = (0..=20).map(|i| i as f64 * 0.25).collect();
    let mut violations = 0;
    for _ in 0..50 {
        let (w, h) = (rng.random_range(12..=32), rng.random_range(12..=32));
        let img = texture(&mut rng, w, h, 0.0, 1.0);
        let mut prev = f64::INFINITY;
        for &s in &sigmas {
            let v = sharpness_stats(&gaussian_blur(&img, s)).map_err(|e| e.to_string())?.laplacian_variance;
            if v > prev {
                violations += 1;
            }
            prev = v;
        }
    }
    ensure!(violations == 0, "{violations} violations");
    Ok(format!("50 textures x {} sigmas in [0, 5], 0 violations", sigmas.len()))
}

// ---------------------------------------------------------------- 6

fn criterion_partitions() -> Check {
    let mut runner = TestRunner::new(PropConfig {
        cases: 1000,
        failure_persistence: None,
        ..PropConfig::default()
    });
    let strategy = (1usize..=8)
        .prop_flat_map(|k| (k..=1000usize, Just(k)))
        .prop_flat_map(|(n, k)| (Just(n), Just(k), any::<u64>()));
    let cases = std::cell::Cell::new(0usize);
    runner
        .run(&strategy, |(n, k, seed)| {
            cases.set(cases.get() + 1);
            let cal: Vec<usize> = (0..n).map(|i| 7 * i + 2).collect();
            let parts = partition_meta_domains(&cal, k, seed).unwrap();
            prop_assert_eq!(parts.len(), k);
            let mut seen = BTreeSet::new();
            for p in &parts {
                for &i in p {
                    prop_assert!(seen.insert(i), "index {} in two groups", i);
                }
            }
            prop_assert_eq!(seen, cal.iter().copied().collect::<BTreeSet<_>>());
            let sizes: Vec<usize> = parts.iter().map(Vec::len).collect();
            prop_assert!(sizes.iter().max().unwrap() - sizes.iter().min().unwrap() <= 1);
            Ok(())
        })
        .map_err(|e| e.to_string())?;
    Ok(format!("{} property cases", cases.get()))
}

// ---------------------------------------------------------------- 7-9

/// Source-domain models shared by the directional criteria.
#[derive(Default)]
struct Benchmarks {
    runs: Vec<(SyntheticBenchmark, Checkpoint)>,
}

fn sup_config(regime: Regime, epochs: usize, seed: u64) -> TrainConfig {
    TrainConfig {
        regime,
        epochs,
        batch_size: 16,
        learning_rate: 0.1,
        seed,
        eval_every_epoch: false,
        ..TrainConfig::default()
    }
}

const SOURCE_EPOCHS: usize = 40;
const ADAPT_EPOCHS: usize = 15;

impl Benchmarks {
    fn get(&mut self) -> std::result::Result<&[(SyntheticBenchmark, Checkpoint)], String> {
        if self.runs.is_empty() {
            for seed in SEEDS {
                let b = generate_synthetic_benchmark(seed, &SyntheticConfig::default()).map_err(|e| e.to_string())?;
                let src = train_supervised(
                    &b.a,
                    Init::Random(&EncoderConfig::default()),
                    &sup_config(Regime::Naive, SOURCE_EPOCHS, seed),
                )
                .map_err(|e| e.to_string())?
                .checkpoint;
                self.runs.push((b, src));
            }
        }
        Ok(&self.runs)
    }
}

fn accuracy(ck: &Checkpoint, d: &LabeledDataset) -> std::result::Result<f64, String> {
    evaluate_checkpoint(ck, d, Split::Test).map(|m| m.accuracy).map_err(|e| e.to_string())
}

/// Fine-tuned and guided-tuned checkpoints on `target`.
fn adapt_pair(
    b: &SyntheticBenchmark,
    src: &Checkpoint,
    target: &LabeledDataset,
) -> std::result::Result<(Checkpoint, Checkpoint), String> {
    let ft = train_supervised(target, Init::From(src), &sup_config(Regime::Finetune, ADAPT_EPOCHS, b.seed))
        .map_err(|e| e.to_string())?
        .checkpoint;
    let gt = guided_tune(src, &b.a, target, None, &sup_config(Regime::Guided, ADAPT_EPOCHS, b.seed))
        .map_err(|e| e.to_string())?
        .checkpoint;
    Ok((ft, gt))
}

fn mean(v: &[f64]) -> f64 {
    v.iter().sum::<f64>() / v.len() as f64
}

fn fmt(v: &[f64]) -> String {
    v.iter().map(|x| format!("{x:.3}")).collect::<Vec<_>>().join("/")
}

fn criterion_forgetting(bench: &mut Benchmarks) -> Check {
    let t = Instant::now();
    let runs = bench.get()?;
    let (mut naive_a, mut naive_b, mut gt_a, mut gt_b, mut bt_naive, mut bt_gt) =
        (vec![], vec![], vec![], vec![], vec![], vec![]);
    for (b, src) in runs {
        let (ft, gt) = adapt_pair(b, src, &b.b)?;
        naive_a.push(accuracy(&ft, &b.a)?);
        naive_b.push(accuracy(&ft, &b.b)?);
        gt_a.push(accuracy(&gt, &b.a)?);
        gt_b.push(accuracy(&gt, &b.b)?);
        let domains = [b.a.clone(), b.b.clone()];
        for (ck, out) in [(&ft, &mut bt_naive), (&gt, &mut bt_gt)] {
            let r = forgetting_report(&[src.clone(), ck.clone()], &domains, Split::Test).map_err(|e| e.to_string())?;
            out.push(r.backward_transfer[0].ok_or("no backward transfer for the source domain")?);
        }
    }
    let el = t.elapsed();
    let (na, ga, nb, gb) = (mean(&naive_a), mean(&gt_a), mean(&naive_b), mean(&gt_b));
    let detail = format!(
        "A acc naive {na:.3} vs GT {ga:.3} (need +0.10); B acc naive {nb:.3} vs GT {gb:.3} (need >= -0.02); \
         backward transfer on A naive {:.3} vs GT {:.3}; per-seed A naive {} GT {}",
        mean(&bt_naive),
        mean(&bt_gt),
        fmt(&naive_a),
        fmt(&gt_a)
    );
    ensure!(ga >= na + 0.10, "{detail}");
    ensure!(gb >= nb - 0.02, "{detail}");
    ensure!(el < Duration::from_secs(300), "{detail}: over 5 min");
    Ok(detail)
}

fn criterion_robustness(bench: &mut Benchmarks) -> Check {
    let suite = default_suite();
    let (mut naive, mut ct) = (vec![], vec![]);
    for (b, src) in bench.get()? {
        let seed = b.seed;
        let pre = ct_pretrain(
            &b.a,
            Init::Random(&EncoderConfig::default()),
            &TrainConfig {
                regime: Regime::CtPretrain,
                epochs: 20,
                learning_rate: 0.01,
                temperature: 0.1,
                n_views: 4,
                ..sup_config(Regime::CtPretrain, 20, seed)
            },
        )
        .map_err(|e| e.to_string())?
        .checkpoint;
        let tuned = train_supervised(&b.a, Init::From(&pre), &sup_config(Regime::Finetune, SOURCE_EPOCHS, seed))
            .map_err(|e| e.to_string())?
            .checkpoint;
        let drop = |ck: &Checkpoint| {
            robustness_report(ck, &b.a, Split::Test, &suite, seed)
                .map(|r| r.mean_accuracy_drop())
                .map_err(|e| e.to_string())
        };
        naive.push(drop(src)?);
        ct.push(drop(&tuned)?);
    }
    let (n, c) = (mean(&naive), mean(&ct));
    let detail = format!(
        "mean drop naive {n:.3} vs CT {c:.3}; per-seed naive {} CT {}",
        fmt(&naive),
        fmt(&ct)
    );
    ensure!(c < n, "{detail}");
    Ok(detail)
}

fn criterion_data_efficiency(bench: &mut Benchmarks) -> Check {
    let (mut naive, mut gt) = (vec![], vec![]);
    for (b, src) in bench.get()? {
        let quarter = b.b.with_train_fraction(0.25, b.seed).map_err(|e| e.to_string())?;
        let (ft, g) = adapt_pair(b, src, &quarter)?;
        naive.push(accuracy(&ft, &b.b)?);
        gt.push(accuracy(&g, &b.b)?);
    }
    let (n, g) = (mean(&naive), mean(&gt));
    let detail = format!(
        "B acc at 25% naive {n:.3} vs GT {g:.3}; per-seed naive {} GT {}",
        fmt(&naive),
        fmt(&gt)
    );
    ensure!(g >= n, "{detail}");
    Ok(detail)
}

// ---------------------------------------------------------------- 10

const BIN: &str = env!("CARGO_BIN_EXE_metadomain");

const SMALL: &str = r#"
seed = 5

[encoder]
input_size = 16
embedding_dim = 8
blocks = [{ channels = 4 }, { channels = 8 }]

[training]
epochs = 2
batch_size = 8
learning_rate = 0.1
eval_every_epoch = false

[guided]
k = 2

[contrastive]
epochs = 1
n_views = 2
"#;

fn pipeline(dir: &Path) -> std::result::Result<(), String> {
    std::fs::create_dir_all(dir).map_err(|e| e.to_string())?;
    std::fs::write(dir.join("small.toml"), SMALL).map_err(|e| e.to_string())?;
    let domain = |d: &str| {
        ["train", "val", "test"]
            .map(|s| format!("synth/domain_{d}_{s}.csv"))
            .join(",")
    };
    let (a, b) = (domain("a"), domain("b"));
    let cfg = ["--config", "small.toml"];
    let steps: Vec<Vec<&str>> = vec![
        vec!["synth", "--seed", "5", "--per-class", "10", "--size", "16", "--out", "synth"],
        vec!["calibrate", "--manifest", "synth/domain_b_train.csv", "--out", "profile"],
        vec!["pretrain", "--data", &a, "--out", "ct"],
        vec!["train", "--regime", "naive", "--data", &a, "--out", "src"],
        vec!["train", "--regime", "finetune", "--init", "ct/checkpoint.bin", "--data", &a, "--out", "ctft"],
        vec!["train", "--regime", "finetune", "--init", "src/checkpoint.bin", "--data", &b, "--out", "ft"],
        vec![
            "adapt",
            "--source-checkpoint",
            "src/checkpoint.bin",
            "--source",
            &a,
            "--target",
            &b,
            "--out",
            "gt",
        ],
        vec!["evaluate", "--checkpoint", "gt/checkpoint.bin", "--data", &b, "--out", "eval"],
        vec![
            "report",
            "--checkpoints",
            "src/checkpoint.bin,gt/checkpoint.bin",
            "--domain",
            &a,
            "--domain",
            &b,
            "--out",
            "report",
        ],
    ];
    for step in steps {
        let mut args = step.clone();
        if step[0] != "synth" {
            args.extend(cfg);
        }
        let out = Command::new(BIN)
            .args(&args)
            .current_dir(dir)
            .env_remove("METADOMAIN_OUT")
            .output()
            .map_err(|e| e.to_string())?;
        if !out.status.success() {
            return Err(format!("{} failed: {}", step[0], String::from_utf8_lossy(&out.stderr).trim()));
        }
    }
    Ok(())
}

fn files(root: &Path) -> Vec<PathBuf> {
    fn walk(dir: &Path, root: &Path, out: &mut Vec<PathBuf>) {
        for e in std::fs::read_dir(dir).unwrap() {
            let p = e.unwrap().path();
            if p.is_dir() {
                walk(&p, root, out);
            } else {
                out.push(p.strip_prefix(root).unwrap().to_path_buf());
            }
        }
    }
    let mut out = vec![];
    walk(root, root, &mut out);
    out.sort();
    out
}

fn criterion_determinism() -> Check {
    let tmp = tempfile::TempDir::new().map_err(|e| e.to_string())?;
    // Both runs happen at the same path so relative and absolute paths
    // recorded in outputs agree.
    let work = tmp.path().join("work");
    pipeline(&work)?;
    let first = tmp.path().join("first");
    std::fs::rename(&work, &first).map_err(|e| e.to_string())?;
    pipeline(&work)?;

    let (fa, fb) = (files(&first), files(&work));
    ensure!(fa == fb, "file sets differ");
    let mut kinds = std::collections::BTreeMap::<String, usize>::new();
    for rel in &fa {
        let x = std::fs::read(first.join(rel)).map_err(|e| e.to_string())?;
        let y = std::fs::read(work.join(rel)).map_err(|e| e.to_string())?;
        ensure!(x == y, "{} differs between runs", rel.display());
        let ext = rel.extension().map(|e| e.to_string_lossy().into_owned()).unwrap_or_default();
        *kinds.entry(ext).or_default() += 1;
    }
    for need in ["csv", "bin", "json"] {
        ensure!(kinds.contains_key(need), "no .{need} outputs produced");
    }
    let summary: Vec<String> = kinds.iter().map(|(k, n)| format!("{n} .{k}")).collect();
    Ok(format!("{} files byte-identical ({})", fa.len(), summary.join(", ")))
}
