//! Report assembly: per-image and per-region metrics, paired tests,
//! uncertainty summaries, and rendered outputs.

use std::collections::BTreeSet;
use std::fmt::Write as _;
use std::path::Path;

use ndarray::Array2;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::image::{content_hash, write_atomic};
use crate::metrics::{
    psnr, relative_error_map, roi_psnr, ssim_default, wilcoxon_signed_rank, Alternative, Psnr,
};
use crate::phantom::LoadedItem;
use crate::plots;

/// Relative-error voxels need |reference| above this floor.
pub const REL_ERR_FLOOR: f64 = 1e-3;

/// One method's outputs over the test split, aligned with the item order.
#[derive(Debug, Clone)]
pub struct MethodRun {
    pub method: String,
    /// Denoised estimate per test item (the realization mean for stochastic
    /// methods).
    pub outputs: Vec<Array2<f32>>,
    /// Per-voxel uncertainty per item; None for deterministic methods.
    pub uncertainty: Option<Vec<Array2<f32>>>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PerImageRow {
    pub method: String,
    pub item: String,
    /// None flags a zero-MSE (identical) pair.
    pub psnr_db: Option<f64>,
    pub ssim: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PerRoiRow {
    pub method: String,
    pub roi: String,
    /// Mean over test items where the region exists and differs.
    pub mean_psnr_db: Option<f64>,
    pub mean_abs_rel_err: Option<f64>,
    pub items: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PairwiseRow {
    pub method_a: String,
    pub method_b: String,
    pub metric: String,
    /// None marks a degenerate comparison (identical samples).
    pub p_value: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct UncertaintyRow {
    pub method: String,
    /// None for deterministic methods (explicit missing marker).
    pub mean: Option<f64>,
    pub max: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MismatchRow {
    pub method: String,
    /// Mean |relative error| inside mismatch regions, over items having any.
    pub mean_abs_rel_err: Option<f64>,
    pub items: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvaluationReport {
    pub per_image: Vec<PerImageRow>,
    pub per_roi: Vec<PerRoiRow>,
    pub pairwise_tests: Vec<PairwiseRow>,
    pub uncertainty_summary: Vec<UncertaintyRow>,
    pub mismatch_bias: Vec<MismatchRow>,
    pub config_hash: String,
}

/// Evaluate every run against the shared test split and aggregate.
pub fn assemble_report(
    runs: &[MethodRun],
    items: &[LoadedItem],
    config_hash: &str,
) -> Result<EvaluationReport> {
    if runs.is_empty() {
        return Err(Error::param("runs", "need at least one method run"));
    }
    for run in runs {
        if run.outputs.len() != items.len() {
            return Err(Error::param(
                "runs",
                format!(
                    "method {} evaluated on {} items but the test split has {}",
                    run.method,
                    run.outputs.len(),
                    items.len()
                ),
            ));
        }
        if let Some(u) = &run.uncertainty {
            if u.len() != items.len() {
                return Err(Error::param("runs", "uncertainty maps must align with the test split"));
            }
        }
    }

    let mut per_image = Vec::new();
    for run in runs {
        for (item, out) in items.iter().zip(&run.outputs) {
            let p = psnr(out.view(), item.pet_clean.view(), None)?;
            let s = ssim_default(out.view(), item.pet_clean.view(), None)?;
            per_image.push(PerImageRow {
                method: run.method.clone(),
                item: item.id.clone(),
                psnr_db: p.db(),
                ssim: s,
            });
        }
    }

    // regional metrics keyed by roi name (roi_00 is the forced-hot region,
    // roi_01 the forced-cold one, so names are comparable across phantoms)
    let roi_names: BTreeSet<String> = items
        .iter()
        .flat_map(|it| it.roi_masks.iter().map(|(n, _)| n.clone()))
        .collect();
    let mut per_roi = Vec::new();
    for run in runs {
        for roi in &roi_names {
            let mut dbs = Vec::new();
            let mut errs = Vec::new();
            let mut count = 0usize;
            for (item, out) in items.iter().zip(&run.outputs) {
                let Some((_, mask)) = item.roi_masks.iter().find(|(n, _)| n == roi) else {
                    continue;
                };
                if !mask.iter().any(|&b| b) {
                    continue;
                }
                count += 1;
                let rois = roi_psnr(
                    out.view(),
                    item.pet_clean.view(),
                    &[(roi.clone(), mask.clone())],
                    None,
                )?;
                if let Some(Psnr::Db(db)) = rois[0].value {
                    dbs.push(db);
                }
                let rel = relative_error_map(out.view(), item.pet_clean.view(), REL_ERR_FLOOR)?;
                if let Some(e) = rel.mean_abs(Some(mask.view())) {
                    errs.push(e);
                }
            }
            per_roi.push(PerRoiRow {
                method: run.method.clone(),
                roi: roi.clone(),
                mean_psnr_db: mean_of(&dbs),
                mean_abs_rel_err: mean_of(&errs),
                items: count,
            });
        }
    }

    // paired tests over the test split, all unordered pairs, both metrics
    let mut pairwise = Vec::new();
    for (ia, ra) in runs.iter().enumerate() {
        for rb in runs.iter().skip(ia + 1) {
            for metric in ["psnr", "ssim"] {
                let series = |run: &MethodRun| -> Vec<f64> {
                    per_image
                        .iter()
                        .filter(|r| r.method == run.method)
                        .map(|r| match metric {
                            "psnr" => r.psnr_db.unwrap_or(f64::INFINITY),
                            _ => r.ssim,
                        })
                        .collect()
                };
                let xa = series(ra);
                let xb = series(rb);
                // degenerate comparisons and too-small splits get the
                // explicit missing marker
                let p = match wilcoxon_signed_rank(&xa, &xb, Alternative::TwoSided) {
                    Ok(p) => Some(p),
                    Err(Error::DegenerateData(_)) | Err(Error::InvalidParameter { .. }) => None,
                    Err(e) => return Err(e),
                };
                pairwise.push(PairwiseRow {
                    method_a: ra.method.clone(),
                    method_b: rb.method.clone(),
                    metric: metric.to_string(),
                    p_value: p,
                });
            }
        }
    }

    let mut uncertainty_summary = Vec::new();
    for run in runs {
        match &run.uncertainty {
            Some(maps) => {
                let mut total = 0.0f64;
                let mut count = 0usize;
                let mut max = f64::NEG_INFINITY;
                for m in maps {
                    for &v in m.iter() {
                        total += v as f64;
                        count += 1;
                        max = max.max(v as f64);
                    }
                }
                uncertainty_summary.push(UncertaintyRow {
                    method: run.method.clone(),
                    mean: Some(total / count.max(1) as f64),
                    max: Some(max),
                });
            }
            None => uncertainty_summary.push(UncertaintyRow {
                method: run.method.clone(),
                mean: None,
                max: None,
            }),
        }
    }

    let mut mismatch_bias = Vec::new();
    for run in runs {
        let mut errs = Vec::new();
        for (item, out) in items.iter().zip(&run.outputs) {
            if item.mismatch_regions.is_empty() {
                continue;
            }
            let rel = relative_error_map(out.view(), item.pet_clean.view(), REL_ERR_FLOOR)?;
            let mut union = Array2::from_elem(out.dim(), false);
            for m in &item.mismatch_regions {
                for (idx, &b) in m.indexed_iter() {
                    if b {
                        union[idx] = true;
                    }
                }
            }
            if let Some(e) = rel.mean_abs(Some(union.view())) {
                errs.push(e);
            }
        }
        mismatch_bias.push(MismatchRow {
            method: run.method.clone(),
            mean_abs_rel_err: mean_of(&errs),
            items: errs.len(),
        });
    }

    Ok(EvaluationReport {
        per_image,
        per_roi,
        pairwise_tests: pairwise,
        uncertainty_summary,
        mismatch_bias,
        config_hash: config_hash.to_string(),
    })
}

fn mean_of(v: &[f64]) -> Option<f64> {
    (!v.is_empty()).then(|| v.iter().sum::<f64>() / v.len() as f64)
}

fn sig6(v: f64) -> String {
    format!("{v:.6e}")
}

impl EvaluationReport {
    pub fn mean_psnr(&self, method: &str) -> Option<f64> {
        mean_of(
            &self
                .per_image
                .iter()
                .filter(|r| r.method == method)
                .filter_map(|r| r.psnr_db)
                .collect::<Vec<_>>(),
        )
    }

    pub fn mean_ssim(&self, method: &str) -> Option<f64> {
        mean_of(
            &self
                .per_image
                .iter()
                .filter(|r| r.method == method)
                .map(|r| r.ssim)
                .collect::<Vec<_>>(),
        )
    }

    pub fn methods(&self) -> Vec<String> {
        let mut seen = Vec::new();
        for r in &self.per_image {
            if !seen.contains(&r.method) {
                seen.push(r.method.clone());
            }
        }
        seen
    }

    /// Render the structured text tables (6 significant digits).
    pub fn to_text(&self) -> String {
        let mut s = String::new();
        let _ = writeln!(s, "evaluation report");
        let _ = writeln!(s, "config_hash: {}", self.config_hash);
        let _ = writeln!(s);
        let _ = writeln!(s, "[per_image]");
        let _ = writeln!(s, "method | item | psnr_db | ssim");
        for r in &self.per_image {
            let p = r.psnr_db.map_or("identical".to_string(), sig6);
            let _ = writeln!(s, "{} | {} | {} | {}", r.method, r.item, p, sig6(r.ssim));
        }
        let _ = writeln!(s);
        let _ = writeln!(s, "[summary]");
        let _ = writeln!(s, "method | mean_psnr_db | mean_ssim");
        for m in self.methods() {
            let _ = writeln!(
                s,
                "{} | {} | {}",
                m,
                self.mean_psnr(&m).map_or("identical".into(), sig6),
                self.mean_ssim(&m).map_or("n/a".into(), sig6)
            );
        }
        let _ = writeln!(s);
        let _ = writeln!(s, "[per_roi]");
        let _ = writeln!(s, "method | roi | mean_psnr_db | mean_abs_rel_err | items");
        for r in &self.per_roi {
            let _ = writeln!(
                s,
                "{} | {} | {} | {} | {}",
                r.method,
                r.roi,
                r.mean_psnr_db.map_or("n/a".into(), sig6),
                r.mean_abs_rel_err.map_or("n/a".into(), sig6),
                r.items
            );
        }
        let _ = writeln!(s);
        let _ = writeln!(s, "[pairwise_tests]");
        let _ = writeln!(s, "method_a | method_b | metric | p_value");
        for r in &self.pairwise_tests {
            let _ = writeln!(
                s,
                "{} | {} | {} | {}",
                r.method_a,
                r.method_b,
                r.metric,
                r.p_value.map_or("degenerate".into(), sig6)
            );
        }
        let _ = writeln!(s);
        let _ = writeln!(s, "[uncertainty]");
        let _ = writeln!(s, "method | mean | max");
        for r in &self.uncertainty_summary {
            let _ = writeln!(
                s,
                "{} | {} | {}",
                r.method,
                r.mean.map_or("n/a".into(), sig6),
                r.max.map_or("n/a".into(), sig6)
            );
        }
        let _ = writeln!(s);
        let _ = writeln!(s, "[mismatch_bias]");
        let _ = writeln!(s, "method | mean_abs_rel_err | items");
        for r in &self.mismatch_bias {
            let _ = writeln!(
                s,
                "{} | {} | {}",
                r.method,
                r.mean_abs_rel_err.map_or("n/a".into(), sig6),
                r.items
            );
        }
        s
    }

    pub fn stable_hash(&self) -> String {
        content_hash(self.to_text().as_bytes())
    }

    /// Write the text/toml tables and the chart/map files.
    pub fn render(&self, runs: &[MethodRun], items: &[LoadedItem], out_dir: &Path) -> Result<()> {
        std::fs::create_dir_all(out_dir)?;
        write_atomic(&out_dir.join("report.txt"), self.to_text().as_bytes())?;
        let toml_text = toml::to_string_pretty(self).map_err(|e| Error::Format {
            path: "report.toml".into(),
            reason: e.to_string(),
        })?;
        write_atomic(&out_dir.join("report.toml"), toml_text.as_bytes())?;

        let methods = self.methods();
        let psnr_bars: Vec<(String, f64)> = methods
            .iter()
            .filter_map(|m| self.mean_psnr(m).map(|v| (m.clone(), v)))
            .collect();
        write_atomic(
            &out_dir.join("psnr_bar.svg"),
            plots::bar_chart_svg("mean PSNR", "dB", &psnr_bars).as_bytes(),
        )?;
        let ssim_bars: Vec<(String, f64)> = methods
            .iter()
            .filter_map(|m| self.mean_ssim(m).map(|v| (m.clone(), v)))
            .collect();
        write_atomic(
            &out_dir.join("ssim_bar.svg"),
            plots::bar_chart_svg("mean SSIM", "SSIM", &ssim_bars).as_bytes(),
        )?;
        let psnr_series: Vec<(String, Vec<f64>)> = methods
            .iter()
            .map(|m| {
                (
                    m.clone(),
                    self.per_image
                        .iter()
                        .filter(|r| &r.method == m)
                        .filter_map(|r| r.psnr_db)
                        .collect(),
                )
            })
            .collect();
        write_atomic(
            &out_dir.join("psnr_box.svg"),
            plots::box_plot_svg("PSNR distribution", "dB", &psnr_series).as_bytes(),
        )?;
        let unc_bars: Vec<(String, f64)> = self
            .uncertainty_summary
            .iter()
            .filter_map(|r| r.mean.map(|v| (r.method.clone(), v)))
            .collect();
        if !unc_bars.is_empty() {
            write_atomic(
                &out_dir.join("uncertainty_bar.svg"),
                plots::bar_chart_svg("mean uncertainty", "activity", &unc_bars).as_bytes(),
            )?;
        }

        // relative-error summary image per method (first test item with
        // mismatch regions if any, else the first item), plus the flat-map
        // analogue painted per region
        for run in runs {
            let idx = items
                .iter()
                .position(|it| !it.mismatch_regions.is_empty())
                .unwrap_or(0);
            let item = &items[idx];
            let rel = relative_error_map(run.outputs[idx].view(), item.pet_clean.view(), REL_ERR_FLOOR)?;
            plots::error_map_png(
                &rel.values,
                &rel.valid,
                0.5,
                &out_dir.join(format!("relerr_{}.png", run.method)),
            )?;
            if !item.roi_masks.is_empty() {
                let values: Vec<f64> = item
                    .roi_masks
                    .iter()
                    .map(|(_, m)| rel.mean_abs(Some(m.view())).unwrap_or(0.0))
                    .collect();
                plots::roi_flat_map_png(
                    &item.roi_masks,
                    &values,
                    0.5,
                    &out_dir.join(format!("roi_relerr_{}.png", run.method)),
                )?;
            }
        }
        Ok(())
    }
}
