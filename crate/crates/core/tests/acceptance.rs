//! Acceptance suite. Prints one PASS/FAIL line per criterion and a summary
//! line. Failures do not fail `cargo test` unless `ACCEPTANCE_STRICT=1`, in
//! which case any FAIL exits non-zero.
//!
//! Trained weights are cached under `$CARGO_TARGET_TMPDIR/fixtures` (or
//! `$DREAMGUIDER_FIXTURES`), keyed by a hash of the training job, and are
//! trained on first use.

use std::path::{Path, PathBuf};
use std::sync::Arc;
use std::time::{Duration, Instant};

use sha2::{Digest, Sha256};

use dreamguider::diffusion::{ddpm_step, mmse_estimate, NoiseSchedule};
use dreamguider::guidance::{
    dreamguider_step, eps_gradient, initial_noise, sample, Components, DogPair, DogState, GaussianPrior,
    GuidanceConfig, Method, NoisePredictor, ScaleMode, TraceRow, INITIAL_SCALE_NUMERATOR,
};
use dreamguider::harness::gradcheck::run_gradcheck;
use dreamguider::harness::{
    build_problem, default_sweep_grid, run_classifier_job, run_denoiser_job, run_with_models, sweep, ClassifierJob,
    DenoiserJob, ExperimentConfig, ExperimentOutcome, Models, Task,
};
use dreamguider::models::{load_weights, ClassifierModel, DenoiserModel};
use dreamguider::operators::{DegradationOperator, GuidanceLoss};
use dreamguider::rng::{rng_for, standard_normal, Purpose};
use dreamguider::Tensor;

/// Fixed scale of the MGD baseline in the colorization comparison.
const MGD_SCALES: [f64; 3] = [0.1, 1.0, 10.0];

struct Line {
    id: usize,
    name: &'static str,
    pass: bool,
    detail: String,
}

fn job_hash<T: serde::Serialize>(job: &T) -> String {
    let mut v = serde_json::to_value(job).unwrap();
    let obj = v.as_object_mut().unwrap();
    obj.remove("out");
    obj.remove("curve");
    hex::encode(&Sha256::digest(serde_json::to_vec(&v).unwrap())[..8])
}

fn fixture_dir() -> PathBuf {
    std::env::var_os("DREAMGUIDER_FIXTURES")
        .map(PathBuf::from)
        .unwrap_or_else(|| Path::new(env!("CARGO_TARGET_TMPDIR")).join("fixtures"))
}

fn load_models() -> (Models, PathBuf, PathBuf) {
    let dir = fixture_dir();
    std::fs::create_dir_all(&dir).unwrap();
    let mut dj = DenoiserJob::default();
    dj.out = dir.join(format!("denoiser-{}.dgw", job_hash(&dj)));
    let mut cj = ClassifierJob::default();
    cj.out = dir.join(format!("classifier-{}.dgw", job_hash(&cj)));
    if !dj.out.exists() {
        eprintln!("training denoiser fixture -> {}", dj.out.display());
        run_denoiser_job(&dj).unwrap();
    }
    if !cj.out.exists() {
        eprintln!("training classifier fixture -> {}", cj.out.display());
        run_classifier_job(&cj).unwrap();
    }
    let denoiser: DenoiserModel = load_weights(&dj.out).unwrap().into_denoiser().unwrap();
    let classifier: ClassifierModel = load_weights(&cj.out).unwrap().into_classifier().unwrap();
    (
        Models { denoiser: Arc::new(denoiser), classifier: Some(Arc::new(classifier)) },
        dj.out,
        cj.out,
    )
}

fn config(task: Task, models: (&Path, &Path)) -> ExperimentConfig {
    ExperimentConfig {
        task,
        denoiser: models.0.to_path_buf(),
        classifier: Some(models.1.to_path_buf()),
        write_images: false,
        ..Default::default()
    }
}

fn secs(d: Duration) -> f64 {
    d.as_secs_f64()
}

fn c1_gradients() -> Line {
    let start = Instant::now();
    let rows = run_gradcheck(100, 2024).unwrap();
    let elapsed = start.elapsed();
    let worst = rows.iter().map(|r| r.max_rel_err).fold(0.0, f64::max);
    let failed: Vec<_> = rows.iter().filter(|r| !r.pass).map(|r| r.name.clone()).collect();
    Line {
        id: 1,
        name: "gradient oracle suite",
        pass: failed.is_empty() && elapsed < Duration::from_secs(60),
        detail: format!("{} checks, worst rel-err {worst:.2e} (tol 1e-4), {:.1}s, failed {failed:?}", rows.len(), secs(elapsed)),
    }
}

fn c2_fused_step() -> Line {
    let start = Instant::now();
    let sched = NoiseSchedule::default_sampling(100).unwrap();
    let shape = [3, 32, 32];
    let model = GaussianPrior { mean: Tensor::zeros(&shape), std: 0.5 };
    let mut worst: f64 = 0.0;
    for i in 0..100u64 {
        let mut rng = rng_for(i, Purpose::Validation, 7);
        let op = DegradationOperator::box_mask(32, 32, (i % 16) as usize, (i % 11) as usize, 16, 16).unwrap();
        let loss = GuidanceLoss::linear(op, standard_normal(&mut rng, &shape), 0.05).unwrap();
        let t = 1 + (i as usize * 53) % 100;
        let d = 10f64.powf(-3.0 + 4.0 * (i as f64) / 99.0);
        let x_t = standard_normal(&mut rng, &shape);
        let z = standard_normal(&mut rng, &shape);
        let mut cfg = GuidanceConfig {
            components: Components::EpsOnly,
            scale_mode: ScaleMode::Manual { c: 0.0, d },
            seed: i,
            ..Default::default()
        };
        cfg.augment.enabled = false;
        let (fused, _) = dreamguider_step(&x_t, t, &model, &loss, &sched, &cfg, &mut DogPair::default(), &z).unwrap();
        let eps = model.predict_noise(&x_t, t, &sched).unwrap();
        let g_eps = eps_gradient(&loss.grad(&mmse_estimate(&x_t, &eps, t, &sched).unwrap()).unwrap(), t, &sched);
        let mut perturbed = eps;
        perturbed.axpy(-d * sched.big_sigma(t), &g_eps).unwrap();
        let stepped = ddpm_step(&x_t, &perturbed, t, &sched, &z).unwrap();
        worst = worst.max(fused.sub(&stepped).unwrap().max_abs());
    }
    let elapsed = start.elapsed();
    Line {
        id: 2,
        name: "fused-step equivalence (eps path)",
        pass: worst <= 1e-10 && elapsed < Duration::from_secs(1),
        detail: format!("100 instances, max |diff| {worst:.2e} (tol 1e-10), {:.2}s", secs(elapsed)),
    }
}

fn c3_zero_guidance(models: &Models, cfg: &ExperimentConfig) -> Line {
    let sched = NoiseSchedule::default_sampling(cfg.steps).unwrap();
    let mut identical = 0;
    let seeds = 0..5u64;
    for seed in seeds.clone() {
        let problem = build_problem(cfg, models, seed).unwrap();
        let base = cfg.guidance_for(seed);
        let x_t = initial_noise(base.seed, &models.denoiser.arch().image_shape());
        let run = |g: GuidanceConfig| sample(models.denoiser.as_ref(), &problem.loss, &sched, &g, x_t.clone()).unwrap().x0;
        let plain = run(GuidanceConfig { method: Method::None, ..base.clone() });
        let zero = run(GuidanceConfig { scale_mode: ScaleMode::Manual { c: 0.0, d: 0.0 }, ..base.clone() });
        let mgd = run(GuidanceConfig { method: Method::Mgd, scale_mode: ScaleMode::Manual { c: 0.0, d: 0.0 }, ..base.clone() });
        let bits = |t: &Tensor| t.data().iter().map(|v| v.to_bits()).collect::<Vec<_>>();
        if bits(&plain) == bits(&zero) && bits(&plain) == bits(&mgd) {
            identical += 1;
        }
    }
    Line {
        id: 3,
        name: "zero-guidance identity",
        pass: identical == 5,
        detail: format!("{identical}/5 seeds bit-identical (T = {}, trained denoiser)", cfg.steps),
    }
}

/// Scale sequence computed directly from the definition.
fn hand_scales(f: &[f64], g: &[f64]) -> Vec<f64> {
    let Some(r) = g.iter().position(|v| *v != 0.0) else { return vec![0.0; f.len()] };
    (0..f.len())
        .map(|j| {
            if j < r {
                0.0
            } else if j == r {
                INITIAL_SCALE_NUMERATOR / (g[r] * g[r]).sqrt()
            } else {
                let num = (r + 1..=j).map(|i| (f[i] - f[r]).abs()).fold(0.0, f64::max);
                let den = (r..=j).map(|i| g[i] * g[i]).sum::<f64>().sqrt();
                num / den
            }
        })
        .collect()
}

/// Recurrence and monotonicity of both accumulators along a logged trace.
/// An accumulator must grow whenever the increment is representable in
/// `f64`: once the sum is large, `g²` below half an ulp is absorbed exactly.
fn check_trace(tr: &[TraceRow]) -> Result<(), String> {
    let rel = |a: f64, b: f64| (a - b).abs() / b.abs().max(1e-300);
    let sched = NoiseSchedule::default_sampling(tr[0].t).unwrap();
    let mut sum = 0.0;
    let mut started = false;
    for (i, r) in tr.iter().enumerate() {
        if !started && r.grad_norm > 0.0 {
            started = true;
            if rel(r.c, INITIAL_SCALE_NUMERATOR / r.grad_norm) > 1e-12 {
                return Err(format!("t={} reference scale {} vs {}", r.t, r.c, INITIAL_SCALE_NUMERATOR / r.grad_norm));
            }
        }
        if started {
            sum += r.grad_norm * r.grad_norm;
            if rel(r.c_grad_sq_sum, sum) > 1e-12 {
                return Err(format!("t={} grad_sq_sum {} vs {}", r.t, r.c_grad_sq_sum, sum));
            }
            if i > 0 && tr[i - 1].grad_norm > 0.0 && r.c_max_dist > 0.0 && rel(r.c, r.c_max_dist / r.c_grad_sq_sum.sqrt()) > 1e-12 {
                return Err(format!("t={} scale {} vs {}", r.t, r.c, r.c_max_dist / r.c_grad_sq_sum.sqrt()));
            }
        }
        if i > 0 {
            let p = &tr[i - 1];
            if r.c_max_dist < p.c_max_dist || r.d_max_dist < p.d_max_dist {
                return Err(format!("t={} max_dist decreased", r.t));
            }
            let g_eps = r.grad_norm * sched.big_sigma(r.t) / sched.alpha_bar(r.t).sqrt();
            for (name, prev, cur, g) in [
                ("c", p.c_grad_sq_sum, r.c_grad_sq_sum, r.grad_norm),
                ("d", p.d_grad_sq_sum, r.d_grad_sq_sum, g_eps),
            ] {
                let representable = prev > 0.0 && prev + g * g > prev;
                if cur < prev || (representable && cur <= prev) {
                    return Err(format!("t={} {name} grad_sq_sum {prev:e} -> {cur:e} with |g| {g:e}", r.t));
                }
            }
        }
    }
    Ok(())
}

fn c4_estimate(traces: &[&[TraceRow]]) -> Line {
    let mut worst: f64 = 0.0;
    let mut cases = 0;
    let mut check = |f: &[f64], g: &[f64]| {
        let mut st = DogState::new();
        let n = f.len();
        for (j, want) in hand_scales(f, g).into_iter().enumerate() {
            let got = st.estimate(n - j, &Tensor::scalar(f[j]), &Tensor::scalar(g[j])).unwrap();
            worst = worst.max((got - want).abs());
        }
        cases += 1;
    };
    check(&[0.0, 1.0, 3.0], &[1.0, 1.0, 1.0]);
    for i in 0..50u64 {
        let mut rng = rng_for(i, Purpose::Validation, 40);
        let f = standard_normal(&mut rng, &[100]).into_data();
        let mut g = standard_normal(&mut rng, &[100]).into_data();
        for v in g.iter_mut().take((i % 4) as usize) {
            *v = 0.0;
        }
        check(&f, &g);
    }
    let bad: Vec<String> = traces.iter().filter_map(|t| check_trace(t).err()).collect();
    Line {
        id: 4,
        name: "ESTIMATE recurrence",
        pass: worst <= 1e-12 && bad.is_empty(),
        detail: format!(
            "{cases} scalar trajectories, max |diff| {worst:.2e} (tol 1e-12); {} sampled traces, {} violations{}",
            traces.len(),
            bad.len(),
            bad.first().map(|b| format!(" (first: {b})")).unwrap_or_default()
        ),
    }
}

fn c5_inpainting(guided: &ExperimentOutcome, plain: &ExperimentOutcome, elapsed: Duration) -> Line {
    let ratio = guided.summary.residual.mean / plain.summary.residual.mean;
    let beats = guided.summary.beats_degraded;
    Line {
        id: 5,
        name: "inpainting (box 25%, T=100, K=8, auto)",
        pass: ratio <= 0.1 && beats >= 0.9 && elapsed < Duration::from_secs(600) && guided.summary.n_failed == 0,
        detail: format!(
            "residual {:.4e} vs unguided {:.4e} (ratio {ratio:.3}, need <= 0.1); PSNR {:.2} dB vs degraded {:.2} dB, beats degraded on {:.0}% (need >= 90%); {:.0}s",
            guided.summary.residual.mean,
            plain.summary.residual.mean,
            guided.summary.psnr.mean,
            guided.summary.degraded_psnr.mean,
            100.0 * beats,
            secs(elapsed)
        ),
    }
}

fn c6_colorization(dream: &ExperimentOutcome, mgd: &[(f64, ExperimentOutcome)]) -> Line {
    let best = mgd
        .iter()
        .min_by(|a, b| a.1.summary.residual.mean.total_cmp(&b.1.summary.residual.mean))
        .unwrap();
    Line {
        id: 6,
        name: "colorization: both terms (auto) vs MGD",
        pass: dream.summary.residual.mean < best.1.summary.residual.mean,
        detail: format!(
            "residual {:.4e} vs best MGD {:.4e} (scale {}; tried {:?})",
            dream.summary.residual.mean, best.1.summary.residual.mean, best.0, MGD_SCALES
        ),
    }
}

fn c7_augment(k8: &ExperimentOutcome, k1: &ExperimentOutcome) -> Line {
    Line {
        id: 7,
        name: "DiffuseAugment (colorization, T=50)",
        pass: k8.summary.psnr.mean >= k1.summary.psnr.mean,
        detail: format!("PSNR K=8 {:.3} dB vs K=1 {:.3} dB", k8.summary.psnr.mean, k1.summary.psnr.mean),
    }
}

fn c8_classifier(out: &ExperimentOutcome, plain: &ExperimentOutcome) -> Line {
    Line {
        id: 8,
        name: "nonlinear (classifier) guidance",
        pass: out.summary.hit_rate >= 0.8 && out.summary.n_ok == 50,
        detail: format!(
            "target hit rate {:.2} over {} seeds (need >= 0.80; unguided {:.2})",
            out.summary.hit_rate, out.summary.n_ok, plain.summary.hit_rate
        ),
    }
}

fn c9_auto_vs_sweep(auto: &ExperimentOutcome, rows: &[dreamguider::harness::AblationRow]) -> Line {
    let best = rows.iter().min_by(|a, b| a.residual_mean.total_cmp(&b.residual_mean)).unwrap();
    let ratio = auto.summary.residual.mean / best.residual_mean;
    Line {
        id: 9,
        name: "auto scale vs best manual (5x5 sweep)",
        pass: ratio <= 2.0,
        detail: format!(
            "auto residual {:.4e}, best manual {:.4e} at {} (ratio {ratio:.2}, need <= 2)",
            auto.summary.residual.mean, best.residual_mean, best.value
        ),
    }
}

fn c10_determinism(first: &Path, second: &Path) -> Line {
    let mut files = 0;
    let mut differing = Vec::new();
    let mut visit = |rel: PathBuf| {
        files += 1;
        if std::fs::read(first.join(&rel)).ok() != std::fs::read(second.join(&rel)).ok() {
            differing.push(rel.display().to_string());
        }
    };
    visit(PathBuf::from("results.csv"));
    let mut seeds: Vec<_> = std::fs::read_dir(first).unwrap().filter_map(|e| e.ok()).filter(|e| e.path().is_dir()).collect();
    seeds.sort_by_key(|e| e.file_name());
    for e in seeds {
        visit(Path::new(&e.file_name()).join("trace.csv"));
    }
    Line {
        id: 10,
        name: "determinism",
        pass: differing.is_empty() && files > 1,
        detail: format!("inpainting rerun: {files} CSV files compared, {} differ {differing:?}", differing.len()),
    }
}

fn main() {
    let total = Instant::now();
    let mut lines = vec![c1_gradients(), c2_fused_step()];
    let (models, dpath, cpath) = load_models();
    let paths = (dpath.as_path(), cpath.as_path());
    let scratch = tempfile::tempdir().unwrap();

    let inpaint = config(Task::Inpaint, paths);
    lines.push(c3_zero_guidance(&models, &inpaint));

    let guided_cfg = ExperimentConfig { out_dir: Some(scratch.path().join("inpaint_a")), write_images: true, ..inpaint.clone() };
    let t = Instant::now();
    let guided = run_with_models(&guided_cfg, &models).unwrap();
    let elapsed = t.elapsed();
    let mut plain_cfg = inpaint.clone();
    plain_cfg.guidance.method = Method::None;
    let plain = run_with_models(&plain_cfg, &models).unwrap();
    let c5 = c5_inpainting(&guided, &plain, elapsed);

    let colorize = config(Task::Colorize, paths);
    let dream = run_with_models(&colorize, &models).unwrap();
    let mgd: Vec<(f64, ExperimentOutcome)> = MGD_SCALES
        .iter()
        .map(|&s| {
            let cfg = ExperimentConfig { guidance: GuidanceConfig::baseline(Method::Mgd, s, 0), ..colorize.clone() };
            (s, run_with_models(&cfg, &models).unwrap())
        })
        .collect();
    let c6 = c6_colorization(&dream, &mgd);

    let k8 = run_with_models(&ExperimentConfig { steps: 50, k: 8, ..colorize.clone() }, &models).unwrap();
    let k1 = run_with_models(&ExperimentConfig { steps: 50, k: 1, ..colorize.clone() }, &models).unwrap();
    let c7 = c7_augment(&k8, &k1);

    let classify = ExperimentConfig { seeds: (0..50).collect(), ..config(Task::Classify, paths) };
    let cls = run_with_models(&classify, &models).unwrap();
    let mut cls_plain_cfg = classify.clone();
    cls_plain_cfg.guidance.method = Method::None;
    let cls_plain = run_with_models(&cls_plain_cfg, &models).unwrap();
    let c8 = c8_classifier(&cls, &cls_plain);

    let (cs, ds) = default_sweep_grid(&guided);
    let rows = sweep(&inpaint, &cs, &ds, &models).unwrap();
    let c9 = c9_auto_vs_sweep(&guided, &rows);

    let traces: Vec<&[TraceRow]> = [&guided, &dream, &k8, &k1, &cls]
        .iter()
        .flat_map(|o| o.traces.iter().map(|t| t.as_slice()))
        .collect();
    lines.push(c4_estimate(&traces));
    lines.extend([c5, c6, c7, c8, c9]);

    let rerun_cfg = ExperimentConfig { out_dir: Some(scratch.path().join("inpaint_b")), ..guided_cfg.clone() };
    run_with_models(&rerun_cfg, &models).unwrap();
    lines.push(c10_determinism(&scratch.path().join("inpaint_a"), &scratch.path().join("inpaint_b")));

    lines.sort_by_key(|l| l.id);
    println!();
    for l in &lines {
        println!("[{}] criterion {:>2}: {} -- {}", if l.pass { "PASS" } else { "FAIL" }, l.id, l.name, l.detail);
    }
    let failed = lines.iter().filter(|l| !l.pass).count();
    println!("acceptance: {} passed, {failed} failed ({:.0}s)", lines.len() - failed, total.elapsed().as_secs_f64());
    if failed > 0 && std::env::var("ACCEPTANCE_STRICT").is_ok_and(|v| v == "1") {
        std::process::exit(1);
    }
}
