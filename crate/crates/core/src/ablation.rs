//! Trains the decomposition variants under one configuration and tabulates
//! convergence and, optionally, full-reference quality.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::decompose::DecompositionMode;
use crate::enhancer::{Checkpoint, EnhancerConfig};
use crate::error::{Result, SimiError};
use crate::evaluate::evaluate_dirs;
use crate::nn::Real;
use crate::trainer::{read_log, TrainConfig, Trainer, LOG_FILE};

pub const VARIANTS: [&str; 4] = ["bitplane", "log", "quant", "no-simm"];

/// `base` with only the input representation changed.
pub fn variant_config(base: &EnhancerConfig, variant: &str) -> Result<EnhancerConfig> {
    let with = |decomposition, self_information| EnhancerConfig { decomposition, self_information, ..base.clone() };
    Ok(match variant {
        "bitplane" => with(DecompositionMode::BitPlane, true),
        "log" => with(DecompositionMode::LogThreshold, true),
        "quant" => with(DecompositionMode::quant_default(), true),
        "no-simm" => with(DecompositionMode::BitPlane, false),
        other => return Err(SimiError::InvalidConfig(format!("unknown ablation variant {other:?}"))),
    })
}

/// Loss level whose first crossing counts as convergence.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LossThreshold {
    /// Fraction of the variant's own first-step loss.
    Relative(f64),
    Absolute(f64),
}

impl Default for LossThreshold {
    fn default() -> Self {
        Self::Relative(0.5)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct AblationOptions {
    pub variants: Vec<String>,
    pub threshold: LossThreshold,
    /// Trailing window over which per-step losses are averaged before the
    /// threshold test and for the reported final loss.
    pub window: usize,
    /// `(low_dir, ref_dir)` pairs scored after training.
    pub eval: Option<(PathBuf, PathBuf)>,
}

impl Default for AblationOptions {
    fn default() -> Self {
        Self {
            variants: VARIANTS.iter().map(|v| v.to_string()).collect(),
            threshold: LossThreshold::default(),
            window: 10,
            eval: None,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AblationRow {
    pub variant: String,
    pub parameters: usize,
    pub initial_loss: f64,
    pub final_loss: f64,
    pub threshold: f64,
    pub iterations_to_threshold: Option<u64>,
    pub mean_psnr: Option<f64>,
    pub mean_ssim: Option<f64>,
    pub checkpoint: PathBuf,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AblationReport {
    pub seed: u64,
    pub iterations: u64,
    pub window: usize,
    pub rows: Vec<AblationRow>,
}

fn trailing_means(losses: &[f64], window: usize) -> Vec<f64> {
    let window = window.max(1);
    let mut sum = 0.0;
    (0..losses.len())
        .map(|i| {
            sum += losses[i];
            if i >= window {
                sum -= losses[i - window];
            }
            sum / (i + 1).min(window) as f64
        })
        .collect()
}

fn fmt_opt(v: Option<f64>, digits: usize) -> String {
    v.map_or_else(|| "-".to_string(), |v| format!("{v:.digits$}"))
}

impl AblationReport {
    /// Aligned plain-text table, one row per variant.
    pub fn to_table(&self) -> String {
        let header = ["Variant", "Params", "PSNR↑", "SSIM↑", "Iteration↓", "Initial loss", "Final loss"];
        let rows: Vec<[String; 7]> = self
            .rows
            .iter()
            .map(|r| {
                [
                    r.variant.clone(),
                    r.parameters.to_string(),
                    fmt_opt(r.mean_psnr, 2),
                    fmt_opt(r.mean_ssim, 4),
                    r.iterations_to_threshold.map_or_else(|| "-".into(), |i| i.to_string()),
                    format!("{:.4}", r.initial_loss),
                    format!("{:.4}", r.final_loss),
                ]
            })
            .collect();
        let widths: Vec<usize> = (0..header.len())
            .map(|c| rows.iter().map(|r| r[c].chars().count()).chain([header[c].chars().count()]).max().unwrap_or(0))
            .collect();
        let mut out = String::new();
        let mut line = |cells: &[String]| {
            let padded: Vec<String> = cells.iter().zip(&widths).map(|(c, &w)| format!("{c:<w$}")).collect();
            let _ = writeln!(out, "{}", padded.join("  ").trim_end());
        };
        line(&header.map(String::from));
        line(&widths.iter().map(|&w| "-".repeat(w)).collect::<Vec<_>>());
        for r in &rows {
            line(r);
        }
        out
    }
}

/// Trains every requested variant from the same seed into
/// `out_dir/<variant>/` and writes `ablation.json` and `ablation.txt`.
pub fn run_ablation<T: Real + Send + Sync>(
    config: &TrainConfig,
    data_dir: impl AsRef<Path>,
    out_dir: impl AsRef<Path>,
    options: &AblationOptions,
) -> Result<AblationReport> {
    let out_dir = out_dir.as_ref();
    let mut rows = Vec::with_capacity(options.variants.len());
    for variant in &options.variants {
        let model = variant_config(&config.model, variant)?;
        let cfg = TrainConfig { model: model.clone(), ..config.clone() };
        let dir = out_dir.join(variant);
        let checkpoint = Trainer::<T>::new(cfg, data_dir.as_ref(), &dir)?.run()?;
        let losses: Vec<f64> = read_log(dir.join(LOG_FILE))?.into_iter().map(|(_, r)| r.total).collect();
        let smoothed = trailing_means(&losses, options.window);
        let initial_loss = losses.first().copied().unwrap_or(f64::NAN);
        let threshold = match options.threshold {
            LossThreshold::Relative(f) => f * initial_loss,
            LossThreshold::Absolute(v) => v,
        };
        let iterations_to_threshold = smoothed.iter().position(|&l| l <= threshold).map(|i| i as u64 + 1);
        let (mean_psnr, mean_ssim) = match &options.eval {
            Some((low, reference)) => {
                let report = evaluate_dirs(&Checkpoint::<T>::load(&checkpoint)?, low, reference)?;
                (Some(report.mean_psnr), Some(report.mean_ssim))
            }
            None => (None, None),
        };
        rows.push(AblationRow {
            variant: variant.clone(),
            parameters: model.parameter_count(),
            initial_loss,
            final_loss: smoothed.last().copied().unwrap_or(f64::NAN),
            threshold,
            iterations_to_threshold,
            mean_psnr,
            mean_ssim,
            checkpoint,
        });
    }
    let report = AblationReport { seed: config.seed, iterations: config.max_iterations, window: options.window, rows };
    fs::write(out_dir.join("ablation.json"), serde_json::to_string_pretty(&report)?)?;
    fs::write(out_dir.join("ablation.txt"), report.to_table())?;
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn variants_differ_only_in_representation() {
        let base = EnhancerConfig { stages: 3, seed: 5, ..Default::default() };
        for v in VARIANTS {
            let c = variant_config(&base, v).unwrap();
            assert_eq!((c.stages, c.seed, c.feature_channels), (3, 5, base.feature_channels));
        }
        assert!(!variant_config(&base, "no-simm").unwrap().self_information);
        assert_eq!(variant_config(&base, "log").unwrap().decomposition, DecompositionMode::LogThreshold);
        assert!(variant_config(&base, "sobel").is_err());
    }

    #[test]
    fn trailing_mean_window() {
        let m = trailing_means(&[4.0, 2.0, 6.0, 0.0], 2);
        assert_eq!(m, vec![4.0, 3.0, 4.0, 3.0]);
    }

    #[test]
    fn table_is_aligned() {
        let row = |v: &str, it| AblationRow {
            variant: v.into(),
            parameters: 10,
            initial_loss: 2.0,
            final_loss: 1.0,
            threshold: 1.0,
            iterations_to_threshold: it,
            mean_psnr: None,
            mean_ssim: Some(0.5),
            checkpoint: PathBuf::new(),
        };
        let report = AblationReport { seed: 0, iterations: 5, window: 1, rows: vec![row("bitplane", Some(3)), row("no-simm", None)] };
        let table = report.to_table();
        let lines: Vec<&str> = table.lines().collect();
        assert_eq!(lines.len(), 4);
        let char_col = |l: &str, pat: &str| l[..l.find(pat).unwrap()].chars().count();
        let ssim = char_col(lines[0], "SSIM");
        assert!(lines[2..].iter().all(|l| char_col(l, "0.5000") == ssim));
        assert!(lines[3].contains(" - "));
    }
}
