//! Acceptance suite. Prints one PASS/FAIL line per criterion and exits
//! non-zero if any fails. Each criterion also writes a JSON artifact; the
//! last criterion reruns the others and compares those files byte for byte.

mod common;

use std::fs;
use std::path::Path;
use std::process::ExitCode;
use std::time::{Duration, Instant};

use common::{meter_walk, tape_walk};
use dtl_core::checks::{check_all, gaussian_images};
use dtl_core::data::{build, DataVariant, DatasetSpec};
use dtl_core::memory::{compare, measure, retention, sweep_m};
use dtl_core::optim::TrainConfig;
use dtl_core::petl::{adapter_params, attach, AdaptedModel, AdapterSpec};
use dtl_core::reuse::{flop_report, random_tasks, shared_prefix_infer, standalone_infer};
use dtl_core::train::{train, TrainOptions};
use dtl_core::vit::{ViT, ViTConfig};
use dtl_core::{Graph, ParamStore, Tensor};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde_json::{json, Value};

struct Outcome {
    pass: bool,
    detail: String,
    /// Deterministic record of what was computed; timings are left out.
    artifact: Value,
}

fn within(elapsed: Duration, limit_s: u64) -> bool {
    elapsed < Duration::from_secs(limit_s)
}

/// Backbone output with a linear head, read from the same parameter store.
fn backbone_logits(model: &AdaptedModel<f32>, images: &Tensor<f32>) -> Tensor<f32> {
    let probe = AdaptedModel { spec: AdapterSpec::Linear, params: ParamStore::new(), ..model.clone() };
    let mut g = Graph::inference();
    let out = probe.forward_with(&mut g, &model.params, images).unwrap();
    g.value(out).clone()
}

fn init_identity() -> Outcome {
    let t = Instant::now();
    let cfg = ViTConfig::toy();
    let mut mismatches = Vec::new();
    let mut digest = 0u64;
    for seed in 0..100u64 {
        let vit = ViT::<f32>::init(cfg.clone(), seed).unwrap();
        let images = gaussian_images(&cfg, 2, seed);
        for name in ["dtl", "dtl+"] {
            let spec = AdapterSpec::from_name(name, cfg.depth).unwrap().with_m(1);
            let model = attach(&spec, &vit, 10, seed).unwrap();
            let mut g = Graph::inference();
            let out = model.forward(&mut g, &images).unwrap();
            let reference = backbone_logits(&model, &images);
            if !g.value(out).bit_eq(&reference) {
                mismatches.push(format!("{name}@{seed}"));
            }
            digest = digest.rotate_left(7) ^ reference.data().iter().fold(0u64, |h, x| h.rotate_left(5) ^ x.to_bits() as u64);
        }
    }
    let elapsed = t.elapsed();
    Outcome {
        pass: mismatches.is_empty() && within(elapsed, 10),
        detail: format!("{} of 200 differ, {:.1}s", mismatches.len(), elapsed.as_secs_f64()),
        artifact: json!({ "mismatches": mismatches, "logit_digest": digest }),
    }
}

fn gradient_correctness() -> Outcome {
    let t = Instant::now();
    let rows = check_all(&ViTConfig::micro(), 0, 1e-5).unwrap();
    let elapsed = t.elapsed();
    let worst = rows.iter().max_by(|a, b| a.max_relative_error.total_cmp(&b.max_relative_error)).unwrap();
    let over: Vec<String> =
        rows.iter().filter(|r| r.max_relative_error > 1e-5).map(|r| format!("{} {:.2e}", r.spec, r.max_relative_error)).collect();
    Outcome {
        pass: over.is_empty() && within(elapsed, 60),
        detail: format!(
            "{} specs, worst {} {:.2e}, over 1e-5: [{}], {:.1}s",
            rows.len(),
            worst.spec,
            worst.max_relative_error,
            over.join(", "),
            elapsed.as_secs_f64()
        ),
        artifact: json!(rows.iter().map(|r| json!({ "spec": r.spec, "err": r.max_relative_error })).collect::<Vec<_>>()),
    }
}

fn prefix_isolation() -> Outcome {
    let vit = ViT::<f32>::init(ViTConfig::toy(), 0).unwrap();
    let model = attach(&AdapterSpec::from_name("dtl", 12).unwrap().with_m(7), &vit, 10, 0).unwrap();
    let report = measure(&model, 4).unwrap();
    let prefix: Vec<(usize, usize)> =
        (1..=6).map(|i| (report.retention.block(i).boundary_tensors, report.retention.block(i).interior_bytes())).collect();
    let isolated = prefix.iter().all(|&p| p == (1, 0));

    let mut g = Graph::train();
    let logits = model.forward(&mut g, &gaussian_images(&ViTConfig::toy(), 4, 0)).unwrap();
    let (meter, walk) = (meter_walk(&retention(&g, logits).unwrap()), tape_walk(&g, logits));
    Outcome {
        pass: isolated && meter == walk,
        detail: format!(
            "blocks 1-6 (boundary, interior bytes) {prefix:?}; meter {} B, tape walk {} B",
            meter.bytes, walk.bytes
        ),
        artifact: json!({ "prefix": prefix, "meter_bytes": meter.bytes, "walk_bytes": walk.bytes }),
    }
}

fn param_counts() -> Outcome {
    let base = ViTConfig::base();
    let cases = [
        ("dtl", AdapterSpec::Dtl { d_prime: 2, m: 7, beta: 100.0 }, 36_864),
        ("lora", AdapterSpec::LoRA { rank: 8 }, 294_912),
        ("linear", AdapterSpec::Linear, 0),
    ];
    let mut rows = Vec::new();
    let mut pass = true;
    for (name, spec, want) in cases.clone() {
        let closed = spec.count(&base, 10).adapter;
        let enumerated: usize = adapter_params::<f32>(&spec, &base, 10, 0)
            .iter()
            .filter(|p| !p.name.starts_with("head."))
            .map(|p| p.tensor.numel())
            .sum();
        pass &= closed == want && enumerated == want;
        rows.push(format!("{name} {closed}/{enumerated}"));
    }
    // Enumeration of a whole attached model, on the toy backbone.
    let toy = ViT::<f32>::init(ViTConfig::toy(), 0).unwrap();
    for (_, spec, _) in &cases {
        let model = attach(spec, &toy, 10, 0).unwrap();
        pass &= model.enumerate_trainable() == spec.count(&toy.config, 10);
    }
    Outcome { pass, detail: format!("closed/enumerated at d=768: {}", rows.join(", ")), artifact: json!(rows) }
}

fn unit_census() -> Outcome {
    let cfg = ViTConfig::toy();
    let got: Vec<(&str, usize)> = [("dtl", 12), ("dtl+", 13), ("lora", 24)]
        .iter()
        .map(|&(name, _)| (name, AdapterSpec::from_name(name, 12).unwrap().census(&cfg).total))
        .collect();
    let pass = got == [("dtl", 12), ("dtl+", 13), ("lora", 24)];
    Outcome { pass, detail: format!("{got:?}"), artifact: json!(got) }
}

fn memory_ordering() -> Outcome {
    let vit = ViT::<f32>::init(ViTConfig::toy(), 0).unwrap();
    let specs: Vec<AdapterSpec> = ["linear", "dtl", "dtl+", "lora", "full"].iter().map(|n| AdapterSpec::from_name(n, 12).unwrap()).collect();
    let cmp = compare(&specs, &vit, 10, 32).unwrap();
    let b: Vec<usize> = cmp.rows.iter().map(|r| r.cached_bytes).collect();
    let ratio = b[1] as f64 / b[4] as f64;
    let pass = b[0] < b[1] && b[1] < b[2] && b[2] < b[3] && b[3] <= b[4] && ratio <= 0.5;
    Outcome {
        pass,
        detail: format!("linear {} < dtl {} < dtl+ {} < lora {} <= full {}; dtl/full {ratio:.3}", b[0], b[1], b[2], b[3], b[4]),
        artifact: json!({ "cached_bytes": b, "dtl_over_full": ratio }),
    }
}

fn pearson(x: &[f64], y: &[f64]) -> f64 {
    let n = x.len() as f64;
    let (mx, my) = (x.iter().sum::<f64>() / n, y.iter().sum::<f64>() / n);
    let cov: f64 = x.iter().zip(y).map(|(a, b)| (a - mx) * (b - my)).sum();
    let vx: f64 = x.iter().map(|a| (a - mx).powi(2)).sum();
    let vy: f64 = y.iter().map(|b| (b - my).powi(2)).sum();
    cov / (vx * vy).sqrt()
}

fn sweep_trend() -> Outcome {
    let vit = ViT::<f32>::init(ViTConfig::toy(), 0).unwrap();
    let ms: Vec<usize> = (1..=13).collect();
    let bytes: Vec<usize> = sweep_m(&AdapterSpec::from_name("dtl", 12).unwrap(), &vit, 10, 32, &ms)
        .unwrap()
        .iter()
        .map(|r| r.cached_activation_bytes)
        .collect();
    let monotone = bytes.windows(2).all(|w| w[1] <= w[0]);
    let r = pearson(&ms.iter().map(|&m| m as f64).collect::<Vec<_>>(), &bytes.iter().map(|&b| b as f64).collect::<Vec<_>>());
    Outcome {
        pass: monotone && r <= -0.95,
        detail: format!("M=1 {} B .. M=13 {} B, nonincreasing {monotone}, pearson {r:.4}", bytes[0], bytes[12]),
        artifact: json!({ "bytes": bytes, "pearson": r }),
    }
}

fn feature_reuse() -> Outcome {
    let cfg = ViTConfig::toy();
    let spec = AdapterSpec::from_name("dtl", 12).unwrap().with_m(7);
    let report = flop_report(&cfg, &spec.csn_config().unwrap(), 19).unwrap();
    let vit = ViT::<f32>::init(cfg.clone(), 0).unwrap();
    let tasks = random_tasks(&vit, &spec, 19, 10, 0).unwrap();
    let images = gaussian_images(&cfg, 2, 0);
    let shared = shared_prefix_infer(&vit, &tasks, &images).unwrap();
    let alone = standalone_infer(&vit, &tasks, &images).unwrap();
    let equal = shared.logits.iter().zip(&alone.logits).all(|(a, b)| a.bit_eq(b));
    let s = report.saving_fraction;
    Outcome {
        pass: (0.45..=0.48).contains(&s) && equal,
        detail: format!(
            "saving {s:.4}, block runs {} -> {}, outputs bitwise equal {equal}",
            alone.block_runs, shared.block_runs
        ),
        artifact: json!({ "saving": s, "runs": [alone.block_runs, shared.block_runs], "equal": equal }),
    }
}

fn final_accuracy(name: &str, data_spec: &DatasetSpec, seed: u64, cfg: &TrainConfig) -> f64 {
    let vit = ViT::<f32>::init(ViTConfig::toy(), seed).unwrap();
    let data = build(data_spec, &vit, seed, Path::new(".")).unwrap();
    let mut model = attach(&AdapterSpec::from_name(name, 12).unwrap(), &vit, data_spec.n_classes, seed).unwrap();
    train(&mut model, &data, &TrainConfig { seed, ..cfg.clone() }, &TrainOptions::default()).unwrap().history.final_acc()
}

fn training_sanity() -> Outcome {
    let t = Instant::now();
    let planted = DatasetSpec {
        variant: DataVariant::SyntheticPlanted { shift_strength: 1.0 },
        n_classes: 2,
        n_train: 256,
        n_test: 256,
    };
    let linear = DatasetSpec { variant: DataVariant::SyntheticLinear, n_classes: 4, n_train: 512, n_test: 256 };
    let short = TrainConfig { lr_max: 1e-2, epochs: 20, batch_size: 16, ..TrainConfig::default() };
    let long = TrainConfig { epochs: 50, ..short.clone() };
    let mut gaps = Vec::new();
    let mut probe = Vec::new();
    for seed in 0..3 {
        let dtl = final_accuracy("dtl", &planted, seed, &short);
        let lin = final_accuracy("linear", &planted, seed, &short);
        gaps.push((dtl, lin));
        probe.push(final_accuracy("linear", &linear, seed, &long));
    }
    let elapsed = t.elapsed();
    let gap = 100.0 * gaps.iter().map(|(d, l)| d - l).sum::<f64>() / 3.0;
    let probe_mean = probe.iter().sum::<f64>() / 3.0;
    Outcome {
        pass: gap >= 10.0 && probe_mean >= 0.95 && within(elapsed, 600),
        detail: format!(
            "planted dtl-linear {gap:.1} points {gaps:.3?}, synthetic-linear probe {probe_mean:.3}, {:.0}s",
            elapsed.as_secs_f64()
        ),
        artifact: json!({ "planted": gaps, "probe": probe }),
    }
}

fn swish_redundancy() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let n = 100_000;
    let h: Vec<f64> = (0..n).map(|_| StandardNormal.sample(&mut rng)).collect();
    let mut g = Graph::inference();
    let x = g.constant(Tensor::new(vec![n], h.clone()).unwrap());
    let y = g.swish(x, 100.0).unwrap();
    let small = g.value(y).data().iter().zip(&h).filter(|(t, v)| t.abs() < 0.01 * v.abs()).count();
    let frac = small as f64 / n as f64;
    Outcome { pass: (0.40..=0.60).contains(&frac), detail: format!("fraction {frac:.4} of {n}"), artifact: json!(frac) }
}

type Criterion = (&'static str, fn() -> Outcome);

const CRITERIA: [Criterion; 10] = [
    ("init identity", init_identity),
    ("gradient correctness", gradient_correctness),
    ("frozen-prefix isolation", prefix_isolation),
    ("parameter counts", param_counts),
    ("structural-unit census", unit_census),
    ("memory ordering", memory_ordering),
    ("sweep trend", sweep_trend),
    ("feature reuse", feature_reuse),
    ("training sanity", training_sanity),
    ("swish redundancy", swish_redundancy),
];

fn report(index: usize, name: &str, pass: bool, detail: &str) {
    println!("{} {index:>2} {name}: {detail}", if pass { "PASS" } else { "FAIL" });
}

/// Runs every criterion once, writing `cNN.json` into `dir`.
fn run_all(dir: &Path, print: bool) -> Vec<bool> {
    fs::create_dir_all(dir).unwrap();
    CRITERIA
        .iter()
        .enumerate()
        .map(|(k, (name, f))| {
            let o = f();
            fs::write(dir.join(format!("c{:02}.json", k + 1)), serde_json::to_vec_pretty(&o.artifact).unwrap()).unwrap();
            if print {
                report(k + 1, name, o.pass, &o.detail);
            }
            o.pass
        })
        .collect()
}

fn main() -> ExitCode {
    let dir = tempfile::tempdir().unwrap();
    let (first, second) = (dir.path().join("first"), dir.path().join("second"));
    let mut results = run_all(&first, true);
    run_all(&second, false);
    let differ: Vec<String> = (1..=CRITERIA.len())
        .map(|k| format!("c{k:02}.json"))
        .filter(|f| fs::read(first.join(f)).unwrap() != fs::read(second.join(f)).unwrap())
        .collect();
    let same = differ.is_empty();
    report(11, "determinism", same, &format!("{} artifacts rerun, differing: {differ:?}", CRITERIA.len()));
    results.push(same);
    let failed = results.iter().filter(|&&p| !p).count();
    println!("acceptance: {} passed, {failed} failed", results.len() - failed);
    if failed == 0 {
        ExitCode::SUCCESS
    } else {
        ExitCode::FAILURE
    }
}
