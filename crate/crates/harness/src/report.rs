//! Report emission. Per-image rows go to `report.csv`, per-condition wall
//! clock to `timing.csv`, and aggregate statistics to `summary.json`.
//! `report.csv` and `summary.json` carry no timestamps or timings, so a rerun
//! with the same config reproduces them byte for byte.

use std::collections::BTreeMap;
use std::io::Write as _;
use std::path::Path;

use anyhow::{Context, Result};
use rdc_core::metrics::EvalSummary;
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReportRow {
    pub image: String,
    pub condition: String,
    pub bpp: f64,
    /// Fidelity versus the clean source image.
    pub psnr_db: f64,
    pub ms_ssim: f64,
    /// Codec objective versus the encoder input (the attacked image under
    /// attack conditions), matching what the defense minimizes.
    pub rd_loss: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TimingRow {
    pub condition: String,
    pub mean_encode_ms: f64,
    pub images: usize,
}

/// One point of the K-way selection grid: the loss the K-arm encoder picks
/// for an image, with arm draws nested across K.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct KwayRow {
    pub image: String,
    pub k: usize,
    pub chosen: usize,
    pub rd_loss: f64,
}

/// One point of the vulnerability sweep (model variant x epsilon x image).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepRow {
    pub model: String,
    pub condition: String,
    pub image: String,
    pub eps: f64,
    pub bpp: f64,
    pub psnr_db: f64,
    pub ms_ssim: f64,
    pub rd_loss: f64,
}

fn fmt(v: f64) -> String {
    format!("{v:.5e}")
}

pub fn report_csv(rows: &[ReportRow]) -> String {
    let mut out = String::from("image,condition,bpp,psnr_db,ms_ssim,rd_loss\n");
    for r in rows {
        out.push_str(&format!(
            "{},{},{},{},{},{}\n",
            r.image,
            r.condition,
            fmt(r.bpp),
            fmt(r.psnr_db),
            fmt(r.ms_ssim),
            fmt(r.rd_loss)
        ));
    }
    out
}

pub fn timing_csv(rows: &[TimingRow]) -> String {
    let mut out = String::from("condition,mean_encode_ms,images\n");
    for r in rows {
        out.push_str(&format!(
            "{},{},{}\n",
            r.condition,
            fmt(r.mean_encode_ms),
            r.images
        ));
    }
    out
}

pub fn kway_csv(rows: &[KwayRow]) -> String {
    let mut out = String::from("image,k,chosen,rd_loss\n");
    for r in rows {
        out.push_str(&format!("{},{},{},{}\n", r.image, r.k, r.chosen, fmt(r.rd_loss)));
    }
    out
}

pub fn sweep_csv(rows: &[SweepRow]) -> String {
    let mut out = String::from("model,condition,image,eps,bpp,psnr_db,ms_ssim,rd_loss\n");
    for r in rows {
        out.push_str(&format!(
            "{},{},{},{},{},{},{},{}\n",
            r.model,
            r.condition,
            r.image,
            fmt(r.eps),
            fmt(r.bpp),
            fmt(r.psnr_db),
            fmt(r.ms_ssim),
            fmt(r.rd_loss)
        ));
    }
    out
}

pub fn write_report_csv(path: &Path, rows: &[ReportRow]) -> Result<()> {
    write_text(path, &report_csv(rows))
}

pub fn write_kway_csv(path: &Path, rows: &[KwayRow]) -> Result<()> {
    write_text(path, &kway_csv(rows))
}

pub fn write_sweep_csv(path: &Path, rows: &[SweepRow]) -> Result<()> {
    write_text(path, &sweep_csv(rows))
}

pub fn write_timing_csv(path: &Path, rows: &[TimingRow]) -> Result<()> {
    write_text(path, &timing_csv(rows))
}

/// Per-condition summaries keyed by condition name; BTreeMap keeps the JSON
/// key order independent of evaluation order.
pub fn write_summary_json(path: &Path, summaries: &BTreeMap<String, EvalSummary>) -> Result<()> {
    let text = serde_json::to_string_pretty(summaries)?;
    write_text(path, &text)
}

fn write_text(path: &Path, text: &str) -> Result<()> {
    if let Some(parent) = path.parent() {
        std::fs::create_dir_all(parent)
            .with_context(|| format!("creating {}", parent.display()))?;
    }
    let mut f = std::fs::File::create(path).with_context(|| format!("writing {}", path.display()))?;
    f.write_all(text.as_bytes())?;
    Ok(())
}
