//! End-to-end acceptance suite. Prints one PASS/FAIL line per criterion
//! and exits nonzero if any fails.

use std::path::Path;
use std::time::Instant;

use gilab_core::attack::{direct_attack, gi_smn_attack, AttackConfig, InitKind};
use gilab_core::defenses::{add_gaussian_noise, intercept_gradient, kept_count, prune_gradient, DefenseSpec};
use gilab_core::flsim::{client_gradient, make_attack_input};
use gilab_core::gradmatch::{
    compute_consensus, group_regularizer, group_regularizer_grad, l2_regularizer, l2_regularizer_grad,
    schedule_weights, tv_regularizer, tv_regularizer_grad, LossSchedule,
};
use gilab_core::metrics::{batch_match_metrics, psnr, psnr_from_mse, ssim, SsimParams};
use gilab_core::nnmodels::{ArchId, Generator, GeneratorConfig, PretrainOptions, TargetModel};
use gilab_core::{GradientSet, ImageBatch, ImageShape, LabelBatch, LatentBatch, NamedArray};
use gilab_harness::config::{DatasetConfig, ExperimentConfig, GeneratorSetup, ModelConfig};
use gilab_harness::{run_experiment, synth_dataset, Dataset, ExperimentRecord, SynthKind};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

struct Verdict {
    pass: bool,
    detail: String,
}

fn verdict(pass: bool, detail: String) -> Verdict {
    Verdict { pass, detail }
}

fn desk_shape() -> ImageShape {
    ImageShape::new(3, 8, 8)
}

fn desk_dataset() -> Dataset {
    synth_dataset(SynthKind::Shapes, 16, 8, 3, 0).unwrap()
}

fn desk_model() -> TargetModel {
    TargetModel::build(ArchId::ConvSmall, desk_shape(), 4, 0).unwrap()
}

fn random_values(n: usize, lo: f64, hi: f64, seed: u64) -> Vec<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..n).map(|_| rng.random_range(lo..hi)).collect()
}

fn central_diff(f: impl Fn(&[f64]) -> f64, x: &[f64], h: f64) -> Vec<f64> {
    let mut p = x.to_vec();
    (0..x.len())
        .map(|i| {
            p[i] = x[i] + h;
            let up = f(&p);
            p[i] = x[i] - h;
            let down = f(&p);
            p[i] = x[i];
            (up - down) / (2.0 * h)
        })
        .collect()
}

fn rel_err(a: &[f64], b: &[f64]) -> f64 {
    let num = a.iter().zip(b).map(|(x, y)| (x - y).powi(2)).sum::<f64>().sqrt();
    let den = b.iter().map(|y| y * y).sum::<f64>().sqrt();
    num / den.max(1e-12)
}

fn regularizer_gradients() -> Verdict {
    let shape = desk_shape();
    let x0 = random_values(2 * shape.len(), 0.1, 0.9, 11);
    let batch = |v: &[f64]| ImageBatch::new(shape, v.to_vec()).unwrap();
    let consensus = compute_consensus(&batch(&x0)).unwrap();
    let checks: [(&str, Vec<f64>, Vec<f64>); 3] = [
        (
            "tv",
            tv_regularizer_grad(&batch(&x0)),
            central_diff(|v| tv_regularizer(&batch(v)), &x0, 1e-5),
        ),
        (
            "l2",
            l2_regularizer_grad(&batch(&x0)),
            central_diff(|v| l2_regularizer(&batch(v)), &x0, 1e-5),
        ),
        (
            "group",
            group_regularizer_grad(&batch(&x0), &consensus).unwrap(),
            central_diff(|v| group_regularizer(&batch(v), &consensus).unwrap(), &x0, 1e-5),
        ),
    ];
    let errs: Vec<(&str, f64)> = checks.iter().map(|(n, a, fd)| (*n, rel_err(a, fd))).collect();
    let pass = errs.iter().all(|(_, e)| *e <= 1e-4);
    let detail = errs
        .iter()
        .map(|(n, e)| format!("{n} rel err {e:.1e}"))
        .collect::<Vec<_>>()
        .join(", ");
    verdict(pass, detail)
}

fn second_order_contract() -> Verdict {
    let shape = ImageShape::new(1, 1, 1);
    let model = TargetModel::build(ArchId::Linear, shape, 2, 4).unwrap();
    let generator = Generator::new(GeneratorConfig::default(), shape).unwrap();
    let labels = LabelBatch(vec![1]);
    let observed = client_gradient(&model, &ImageBatch::new(shape, vec![0.8]).unwrap(), &labels).unwrap();
    let dim = generator.latent_dim();
    let objective = |z: &[f64]| {
        let x = generator.generate(&LatentBatch::new(1, dim, z.to_vec()).unwrap()).unwrap();
        let g = client_gradient(&model, &x, &labels).unwrap();
        g.values().zip(observed.values()).map(|(a, b)| (a - b).powi(2)).sum::<f64>()
    };
    let z0 = gilab_core::attack::init_latents(1, dim, InitKind::Randn, 3).unwrap();
    let (x, tape) = generator.generate_taped(&z0).unwrap();
    let dg = gilab_core::flsim::client_gradient_differentiable(&model, &x, &labels).unwrap();
    let cot: Vec<f64> = dg.gradient().values().zip(observed.values()).map(|(a, b)| 2.0 * (a - b)).collect();
    let gx = dg.pullback(&dg.gradient().with_flat(&cot).unwrap()).unwrap();
    let analytic = generator.pullback(tape, &gx).unwrap();
    let fd = central_diff(objective, z0.data(), 1e-5);
    let err = rel_err(&analytic, &fd);
    verdict(
        err <= 1e-4 && model.num_parameters() == 2,
        format!("{} params, rel err {err:.1e}", model.num_parameters()),
    )
}

fn scheduler_exactness() -> Verdict {
    let schedule = LossSchedule::default();
    let params = schedule.with_total(4000);
    let mut bad = Vec::new();
    for t in 0..4000 {
        let expected = if t < 1777 {
            (schedule.alpha_grad, 0.0)
        } else {
            (schedule.alpha_grad / 2.0, schedule.alpha_aux)
        };
        if schedule_weights(t, &params).unwrap() != expected {
            bad.push(t);
        }
    }
    verdict(
        bad.is_empty() && params.transition() == 1777,
        format!("transition {}, {} mismatching iterations", params.transition(), bad.len()),
    )
}

fn defense_invariants() -> Verdict {
    let n = 1000;
    let set = |v: Vec<f64>| GradientSet::new(vec![NamedArray::new("w", vec![v.len()], v).unwrap()], 1);
    let g = set(random_values(n, -1.0, 1.0, 21));
    let mut failures = Vec::new();
    for f in [0.01, 0.1, 0.3, 0.5, 0.7, 1.0] {
        let p = prune_gradient(&g, f).unwrap();
        let k = (f * n as f64 - 1e-9).ceil() as usize;
        let kept: Vec<f64> = p.values().filter(|v| *v != 0.0).map(f64::abs).collect();
        if kept.len() != k || kept_count(f, n) != k {
            failures.push(format!("prune({f}) kept {}", kept.len()));
        }
        let mut sorted: Vec<f64> = g.values().map(f64::abs).collect();
        sorted.sort_by(|a, b| b.partial_cmp(a).unwrap());
        let threshold = sorted[k - 1];
        if p.values().zip(g.values()).any(|(a, b)| (a != 0.0 && a != b) || (a == 0.0 && b.abs() >= threshold)) {
            failures.push(format!("prune({f}) disagrees with the sort oracle"));
        }
        if prune_gradient(&p, f).unwrap().flatten() != p.flatten() {
            failures.push(format!("prune({f}) not idempotent"));
        }
        let i = intercept_gradient(&g, f).unwrap();
        let flat = i.flatten();
        if flat[..k] != g.flatten()[..k] || flat[k..].iter().any(|v| *v != 0.0) {
            failures.push(format!("intercept({f}) prefix wrong"));
        }
    }
    let sigma2 = 0.01;
    let zeros = set(vec![0.0; 100_000]);
    let noisy = add_gaussian_noise(&zeros, sigma2, &mut ChaCha8Rng::seed_from_u64(5)).unwrap();
    let m = noisy.values().sum::<f64>() / 1e5;
    let var = noisy.values().map(|v| (v - m).powi(2)).sum::<f64>() / (1e5 - 1.0);
    if (var - sigma2).abs() > 0.05 * sigma2 {
        failures.push(format!("noise variance {var:.3e}"));
    }
    let detail = if failures.is_empty() {
        format!("prune/intercept exact on 1000 entries, noise variance {var:.4e} for {sigma2:e}")
    } else {
        failures.join("; ")
    };
    verdict(failures.is_empty(), detail)
}

fn direct_attack_quality() -> Verdict {
    let ds = desk_dataset();
    let model = desk_model();
    let x = ds.images.select(&[0]).unwrap();
    let labels = LabelBatch(vec![ds.labels[0]]);
    let start = Instant::now();
    let g = client_gradient(&model, &x, &labels).unwrap();
    let input = make_attack_input(&model, g, labels).unwrap();
    let cfg = AttackConfig {
        total_iters: 2000,
        ..AttackConfig::direct()
    };
    let r = direct_attack(&input, &cfg).unwrap();
    let m = batch_match_metrics(&r.images, &x, 1.0).unwrap();
    let secs = start.elapsed().as_secs_f64();
    verdict(
        m.mean_psnr_db >= 30.0 && m.mean_ssim >= 0.9 && secs <= 120.0,
        format!("psnr {:.2} dB, ssim {:.3}, {secs:.1}s", m.mean_psnr_db, m.mean_ssim),
    )
}

/// Generator fitted to the 16 desk images and one in-range target.
struct LatentSetup {
    generator: Generator,
    target: ImageBatch,
    labels: LabelBatch,
    pretrain_s: f64,
}

fn latent_setup() -> LatentSetup {
    let ds = desk_dataset();
    let start = Instant::now();
    let fresh = Generator::new(GeneratorConfig::default(), ds.shape()).unwrap();
    let report = fresh.fit(&ds.images, &PretrainOptions::default()).unwrap();
    let pretrain_s = start.elapsed().as_secs_f64();
    let k = 0;
    let code = LatentBatch::new(1, report.codes.dim(), report.codes.code(k).to_vec()).unwrap();
    LatentSetup {
        target: report.generator.generate(&code).unwrap(),
        generator: report.generator,
        labels: LabelBatch(vec![ds.labels[k]]),
        pretrain_s,
    }
}

fn gi_smn_psnr(setup: &LatentSetup, init_kind: InitKind, seed: u64) -> f64 {
    let model = desk_model();
    let g = client_gradient(&model, &setup.target, &setup.labels).unwrap();
    let input = make_attack_input(&model, g, setup.labels.clone()).unwrap();
    let cfg = AttackConfig {
        total_iters: 2000,
        init_kind,
        seed,
        ..AttackConfig::default()
    };
    let r = gi_smn_attack(&input, &setup.generator, &cfg).unwrap();
    batch_match_metrics(&r.images, &setup.target, 1.0).unwrap().mean_psnr_db
}

fn gi_smn_quality(setup: &LatentSetup) -> Verdict {
    let start = Instant::now();
    let p = gi_smn_psnr(setup, InitKind::Randn, AttackConfig::default().seed);
    let secs = setup.pretrain_s + start.elapsed().as_secs_f64();
    verdict(
        p >= 25.0 && secs <= 300.0,
        format!("psnr {p:.2} dB, {secs:.1}s including {:.1}s pretraining", setup.pretrain_s),
    )
}

fn init_stability(setup: &LatentSetup) -> Verdict {
    let mut values = Vec::new();
    for kind in [InitKind::Randn, InitKind::Rand, InitKind::NormalImagenet] {
        for seed in [1314, 1315, 1316] {
            values.push(gi_smn_psnr(setup, kind, seed));
        }
    }
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    let std = (values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0)).sqrt();
    let cv = std / mean;
    let lo = values.iter().cloned().fold(f64::INFINITY, f64::min);
    let hi = values.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    verdict(
        cv <= 0.10,
        format!("cv {:.1}% over 9 runs, psnr {lo:.1}..{hi:.1} dB", 100.0 * cv),
    )
}

fn desk_config(out: &Path, batch_sizes: Vec<usize>, defenses: Vec<DefenseSpec>, repeats: usize) -> ExperimentConfig {
    ExperimentConfig {
        name: "desk".into(),
        dataset: DatasetConfig::Synthetic {
            kind: SynthKind::Shapes,
            n: 16,
            size: 8,
            channels: 3,
            seed: 0,
        },
        model: ModelConfig::default(),
        generator: GeneratorSetup::Identity,
        attack: AttackConfig {
            total_iters: 2000,
            ..AttackConfig::direct()
        },
        defenses,
        batch_sizes,
        repeats,
        seed: 0,
        threads: 1,
        output_dir: out.to_path_buf(),
    }
}

fn group_mean(records: &[ExperimentRecord], batch_size: usize, defense: &str) -> f64 {
    let xs: Vec<f64> = records
        .iter()
        .filter(|r| r.batch_size == batch_size && r.defense == defense)
        .map(|r| r.mean_psnr().unwrap_or(f64::NAN))
        .collect();
    xs.iter().sum::<f64>() / xs.len() as f64
}

fn batch_trend(records: &[ExperimentRecord]) -> Verdict {
    let m: Vec<f64> = [1, 2, 4].iter().map(|&b| group_mean(records, b, "none")).collect();
    verdict(
        m[0] >= m[1] && m[1] >= m[2],
        format!("B=1 {:.2}, B=2 {:.2}, B=4 {:.2} dB", m[0], m[1], m[2]),
    )
}

fn noise_trend(base: &[ExperimentRecord], defended: &[ExperimentRecord]) -> Verdict {
    let p0 = group_mean(base, 1, "none");
    let p1 = group_mean(defended, 1, &DefenseSpec::GaussianNoise { sigma2: 1e-4 }.to_string());
    let p2 = group_mean(defended, 1, &DefenseSpec::GaussianNoise { sigma2: 1e-2 }.to_string());
    let drop = 1.0 - p2 / p0;
    verdict(
        p0 >= p1 && p1 >= p2 && drop >= 0.2,
        format!("sigma2 0: {p0:.2}, 1e-4: {p1:.2}, 1e-2: {p2:.2} dB (drop {:.0}%)", 100.0 * drop),
    )
}

/// Mean PSNR of uniform random images against the private batches of `records`.
fn random_baseline(records: &[ExperimentRecord], ds: &Dataset) -> f64 {
    let mut rng = ChaCha8Rng::seed_from_u64(99);
    let mut total = 0.0;
    let mut count = 0;
    for r in records {
        for &i in &r.sample_indices {
            for _ in 0..10 {
                let noise: Vec<f64> = (0..ds.shape().len()).map(|_| rng.random::<f64>()).collect();
                total += psnr(&noise, ds.images.image(i), 1.0).unwrap();
                count += 1;
            }
        }
    }
    total / count as f64
}

fn pruning_robustness(base: &[ExperimentRecord], defended: &[ExperimentRecord]) -> Verdict {
    let p0 = group_mean(base, 1, "none");
    let keep30 = DefenseSpec::prune(0.3).to_string();
    let keep1 = DefenseSpec::prune(0.01).to_string();
    let p30 = group_mean(defended, 1, &keep30);
    let p1 = group_mean(defended, 1, &keep1);
    let extreme: Vec<ExperimentRecord> = defended.iter().filter(|r| r.defense == keep1).cloned().collect();
    let completed = extreme.iter().all(|r| r.succeeded());
    let baseline = random_baseline(&extreme, &desk_dataset());
    verdict(
        p30 >= 0.75 * p0 && completed && p1 > baseline,
        format!(
            "none {p0:.2}, keep 30% {p30:.2} (need {:.2}), keep 1% {p1:.2} vs random {baseline:.2} dB",
            0.75 * p0
        ),
    )
}

fn determinism(out: &Path) -> Verdict {
    let run = |sub: &str| {
        let cfg = desk_config(&out.join(sub), vec![1], vec![DefenseSpec::None], 1);
        run_experiment(&cfg).unwrap()[0].mean_psnr().unwrap_or(f64::NAN)
    };
    let (a, b) = (run("first"), run("second"));
    verdict((a - b).abs() < 1e-6, format!("{a:.9} vs {b:.9} dB"))
}

fn metric_exactness() -> Verdict {
    let mut failures = Vec::new();
    let p = psnr_from_mse(0.01, 1.0);
    if p != 20.0 {
        failures.push(format!("psnr(0.01) = {p}"));
    }
    let shape = desk_shape();
    let x = random_values(shape.len(), 0.0, 1.0, 31);
    let s = ssim(&x, &x, shape, &SsimParams::default()).unwrap();
    if (s - 1.0).abs() > 1e-12 {
        failures.push(format!("ssim(x, x) = {s}"));
    }
    let recon = ImageBatch::new(shape, random_values(3 * shape.len(), 0.0, 1.0, 32)).unwrap();
    let orig = ImageBatch::new(shape, random_values(3 * shape.len(), 0.0, 1.0, 33)).unwrap();
    let perms = [[0, 1, 2], [0, 2, 1], [1, 0, 2], [1, 2, 0], [2, 0, 1], [2, 1, 0]];
    let brute = perms
        .iter()
        .map(|p| (0..3).map(|i| psnr(recon.image(p[i]), orig.image(i), 1.0).unwrap()).sum::<f64>() / 3.0)
        .fold(f64::NEG_INFINITY, f64::max);
    let matched = batch_match_metrics(&recon, &orig, 1.0).unwrap().mean_psnr_db;
    if (brute - matched).abs() > 1e-12 {
        failures.push(format!("matching {matched} vs brute force {brute}"));
    }
    let detail = if failures.is_empty() {
        format!("psnr(0.01) = {p}, ssim(x, x) = {s}, B=3 matching = brute force {brute:.6} dB")
    } else {
        failures.join("; ")
    };
    verdict(failures.is_empty(), detail)
}

fn main() {
    let tmp = tempfile::tempdir().unwrap();
    let mut results: Vec<(usize, &str, Verdict)> = Vec::new();
    let mut report = |id: usize, name: &'static str, v: Verdict| {
        println!("criterion {id:>2} {}  {name}: {}", if v.pass { "PASS" } else { "FAIL" }, v.detail);
        results.push((id, name, v));
    };

    report(1, "regularizer gradients", regularizer_gradients());
    report(2, "second-order contract", second_order_contract());
    report(3, "scheduler exactness", scheduler_exactness());
    report(4, "defense invariants", defense_invariants());
    report(5, "direct attack", direct_attack_quality());
    let setup = latent_setup();
    report(6, "gi-smn attack", gi_smn_quality(&setup));

    let base = run_experiment(&desk_config(&tmp.path().join("batches"), vec![1, 2, 4], vec![DefenseSpec::None], 3)).unwrap();
    let defended = run_experiment(&desk_config(
        &tmp.path().join("defenses"),
        vec![1],
        vec![
            DefenseSpec::GaussianNoise { sigma2: 1e-4 },
            DefenseSpec::GaussianNoise { sigma2: 1e-2 },
            DefenseSpec::prune(0.3),
            DefenseSpec::prune(0.01),
        ],
        3,
    ))
    .unwrap();
    report(7, "batch-size trend", batch_trend(&base));
    report(8, "noise trend", noise_trend(&base, &defended));
    report(9, "pruning robustness", pruning_robustness(&base, &defended));
    report(10, "metric exactness", metric_exactness());
    report(11, "determinism", determinism(&tmp.path().join("determinism")));
    report(12, "initialization stability", init_stability(&setup));

    let failed: Vec<String> = results
        .iter()
        .filter(|(_, _, v)| !v.pass)
        .map(|(id, name, _)| format!("{id} ({name})"))
        .collect();
    if failed.is_empty() {
        println!("acceptance: all {} criteria pass", results.len());
    } else {
        println!("acceptance: failed {}", failed.join(", "));
        std::process::exit(1);
    }
}
