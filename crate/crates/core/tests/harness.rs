use std::path::PathBuf;
use std::sync::Arc;

use dreamguider::guidance::{GuidanceConfig, Method};
use dreamguider::harness::{
    ablate, build_problem, run_with_models, AblationAxis, ExperimentConfig, Models, Task,
};
use dreamguider::models::{ClassifierArch, ClassifierModel, DenoiserArch, DenoiserModel};
use dreamguider::operators::OperatorSpec;

fn models() -> Models {
    Models {
        denoiser: Arc::new(DenoiserModel::new(DenoiserArch::default(), 0).unwrap()),
        classifier: Some(Arc::new(ClassifierModel::new(ClassifierArch::default(), 0).unwrap())),
    }
}

fn quick(task: Task) -> ExperimentConfig {
    ExperimentConfig { task, steps: 4, k: 2, seeds: vec![0, 1, 2], write_images: true, ..Default::default() }
}

#[test]
fn runs_are_reproducible_and_write_artifacts() {
    let m = models();
    let dirs = [tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap()];
    let mut csvs = Vec::new();
    for d in &dirs {
        let cfg = ExperimentConfig { out_dir: Some(d.path().to_path_buf()), ..quick(Task::Inpaint) };
        let out = run_with_models(&cfg, &m).unwrap();
        assert_eq!(out.summary.n_ok, 3);
        assert!(d.path().join("seed_0001/restored.ppm").exists());
        assert!(d.path().join("seed_0001/trace.csv").exists());
        csvs.push(std::fs::read(d.path().join("results.csv")).unwrap());
    }
    assert_eq!(csvs[0], csvs[1]);
    let text = String::from_utf8(csvs[0].clone()).unwrap();
    let hash = quick(Task::Inpaint).hash();
    assert!(text.lines().skip(1).all(|l| l.starts_with(&hash)));
}

#[test]
fn every_task_runs() {
    let m = models();
    for task in [Task::Inpaint, Task::Sr4, Task::Colorize, Task::Deblur, Task::Classify] {
        let out = run_with_models(&quick(task), &m).unwrap();
        assert_eq!(out.summary.n_ok, 3, "{task:?}: {:?}", out.records);
        if task == Task::Classify {
            assert!(out.summary.hit_rate.is_finite());
        } else {
            assert!(out.summary.psnr.mean.is_finite());
        }
    }
}

#[test]
fn seed_failures_are_recorded_and_the_run_continues() {
    let cfg = ExperimentConfig {
        operator: Some(OperatorSpec::MaskFile { path: PathBuf::from("/nonexistent/mask.pgm") }),
        ..quick(Task::Inpaint)
    };
    let out = run_with_models(&cfg, &models()).unwrap();
    assert_eq!(out.summary.n_failed, 3);
    assert!(out.records.iter().all(|r| r.status != "ok"));
}

#[test]
fn problems_are_seeded() {
    let m = models();
    let cfg = quick(Task::Inpaint);
    let a = build_problem(&cfg, &m, 5).unwrap();
    let b = build_problem(&cfg, &m, 5).unwrap();
    assert_eq!(a.truth, b.truth);
    assert_eq!(a.degraded, b.degraded);
    assert_ne!(a.truth, build_problem(&cfg, &m, 6).unwrap().truth);
}

#[test]
fn ablation_axes_produce_one_row_per_value() {
    let m = models();
    let cfg = ExperimentConfig { seeds: vec![0], steps: 2, ..quick(Task::Colorize) };
    assert_eq!(ablate(&cfg, AblationAxis::K, &m).unwrap().len(), 4);
    assert_eq!(ablate(&cfg, AblationAxis::Components, &m).unwrap().len(), 3);
}

#[test]
fn config_json_round_trip_and_defaults() {
    let cfg = ExperimentConfig {
        guidance: GuidanceConfig::baseline(Method::Mgd, 0.2, 0),
        ..Default::default()
    };
    let text = serde_json::to_string(&cfg).unwrap();
    assert!(text.contains("\"T\":100") && text.contains("\"K\":8") && text.contains("\"sigma_y\":0.05"));
    let back: ExperimentConfig = serde_json::from_str(&text).unwrap();
    assert_eq!(back, cfg);
    let partial: ExperimentConfig = serde_json::from_str(r#"{"task": "sr4", "K": 2}"#).unwrap();
    assert_eq!((partial.task, partial.k, partial.steps), (Task::Sr4, 2, 100));
}
