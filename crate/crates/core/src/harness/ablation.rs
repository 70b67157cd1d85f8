//! One-axis ablations and the manual-scale grid sweep.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::guidance::{Components, ScaleMode};
use crate::harness::experiment::{run_with_models, ExperimentConfig, ExperimentOutcome, ExperimentSummary, Models};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AblationAxis {
    K,
    T,
    Components,
    Scale,
}

impl std::str::FromStr for AblationAxis {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "k" => Ok(Self::K),
            "t" => Ok(Self::T),
            "components" => Ok(Self::Components),
            "scale" => Ok(Self::Scale),
            _ => Err(Error::InvalidParameter(format!("unknown ablation axis {s:?}"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AblationRow {
    pub axis: String,
    pub value: String,
    pub config_hash: String,
    pub n_ok: usize,
    pub n_failed: usize,
    pub psnr_mean: f64,
    pub psnr_std: f64,
    pub ssim_mean: f64,
    pub residual_mean: f64,
    pub residual_std: f64,
    pub beats_degraded: f64,
    pub hit_rate: f64,
}

impl AblationRow {
    fn new(axis: &str, value: String, s: &ExperimentSummary) -> Self {
        Self {
            axis: axis.into(),
            value,
            config_hash: s.config_hash.clone(),
            n_ok: s.n_ok,
            n_failed: s.n_failed,
            psnr_mean: s.psnr.mean,
            psnr_std: s.psnr.std,
            ssim_mean: s.ssim.mean,
            residual_mean: s.residual.mean,
            residual_std: s.residual.std,
            beats_degraded: s.beats_degraded,
            hit_rate: s.hit_rate,
        }
    }
}

pub fn write_rows_csv(rows: &[AblationRow], path: &Path) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    for r in rows {
        w.serialize(r)?;
    }
    w.flush()?;
    Ok(())
}

fn quiet(config: &ExperimentConfig) -> ExperimentConfig {
    ExperimentConfig { out_dir: None, write_images: false, ..config.clone() }
}

fn variants(config: &ExperimentConfig, axis: AblationAxis) -> Vec<(String, ExperimentConfig)> {
    let base = quiet(config);
    match axis {
        AblationAxis::K => [1, 2, 4, 8]
            .into_iter()
            .map(|k| (k.to_string(), ExperimentConfig { k, ..base.clone() }))
            .collect(),
        AblationAxis::T => [20, 50, 100]
            .into_iter()
            .map(|steps| (steps.to_string(), ExperimentConfig { steps, ..base.clone() }))
            .collect(),
        AblationAxis::Components => [
            ("xhat_only", Components::XhatOnly),
            ("eps_only", Components::EpsOnly),
            ("both", Components::Both),
        ]
        .into_iter()
        .map(|(name, components)| {
            let mut c = base.clone();
            c.guidance.components = components;
            (name.to_string(), c)
        })
        .collect(),
        AblationAxis::Scale => Vec::new(),
    }
}

/// Runs the grid along `axis`, reusing the same seeds for every value. The
/// scale axis compares auto scaling with the [`sweep`] grid.
pub fn ablate(config: &ExperimentConfig, axis: AblationAxis, models: &Models) -> Result<Vec<AblationRow>> {
    let name = match axis {
        AblationAxis::K => "K",
        AblationAxis::T => "T",
        AblationAxis::Components => "components",
        AblationAxis::Scale => "scale",
    };
    if axis == AblationAxis::Scale {
        let mut auto = quiet(config);
        auto.guidance.scale_mode = ScaleMode::Auto;
        let auto_out = run_with_models(&auto, models)?;
        let (cs, ds) = default_sweep_grid(&auto_out);
        let mut rows = vec![AblationRow::new(name, "auto".into(), &auto_out.summary)];
        rows.extend(sweep(config, &cs, &ds, models)?);
        return Ok(rows);
    }
    variants(config, axis)
        .into_iter()
        .map(|(value, cfg)| Ok(AblationRow::new(name, value, &run_with_models(&cfg, models)?.summary)))
        .collect()
}

fn median(mut v: Vec<f64>) -> Option<f64> {
    v.retain(|x| x.is_finite() && *x > 0.0);
    if v.is_empty() {
        return None;
    }
    v.sort_by(f64::total_cmp);
    Some(v[v.len() / 2])
}

/// Five log-spaced values per scale, one decade apart and centred on the
/// median scale the auto rule used while that term was active.
pub fn default_sweep_grid(auto: &ExperimentOutcome) -> (Vec<f64>, Vec<f64>) {
    let rows = || auto.traces.iter().flatten();
    let grid = |m: Option<f64>| match m {
        Some(m) => (-2..=2).map(|e| m * 10f64.powi(e)).collect(),
        None => vec![0.0],
    };
    let c = median(rows().filter(|r| r.xhat_active).map(|r| r.c).collect());
    let d = median(rows().filter(|r| r.eps_active).map(|r| r.d).collect());
    (grid(c), grid(d))
}

/// Manual `(c, d)` over the full grid `cs × ds`.
pub fn sweep(config: &ExperimentConfig, cs: &[f64], ds: &[f64], models: &Models) -> Result<Vec<AblationRow>> {
    let mut rows = Vec::with_capacity(cs.len() * ds.len());
    for &c in cs {
        for &d in ds {
            let mut cfg = quiet(config);
            cfg.guidance.scale_mode = ScaleMode::Manual { c, d };
            let out = run_with_models(&cfg, models)?;
            rows.push(AblationRow::new("scale", format!("c={c:.3e};d={d:.3e}"), &out.summary));
        }
    }
    Ok(rows)
}
