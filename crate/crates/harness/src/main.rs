//! `rdc`: train the toy codec, push images through plain or randomized
//! encoding, run gradient attacks, and drive full evaluation grids.

use std::collections::BTreeMap;
use std::path::PathBuf;

use anyhow::{Context, Result};
use clap::{Args, Parser, Subcommand, ValueEnum};
use rdc_core::attack::{self, AttackConfig, AttackTarget};
use rdc_core::codec::{AdvMode, AugmentMode, CodecConfig, CodecModel, TrainConfig};
use rdc_core::defense;
use rdc_core::entropy::Bitstream;
use rdc_core::metrics::EvalSummary;
use rdc_core::seed;
use rdc_core::tensor::Tensor;
use rdc_harness::config::{parse_pixel_fraction, resolve, CliOverrides, ExperimentConfig};
use rdc_harness::dataset::{ingest_dataset, load_image, save_image};
use rdc_harness::experiment::{run_defense_eval, run_vulnerability_sweep};
use rdc_harness::report;
use serde::Serialize;

#[derive(Parser)]
#[command(
    name = "rdc",
    about = "Randomized-transform defense toolkit for a learned image codec",
    version
)]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Train a codec on a directory of images and save a checkpoint.
    Train(TrainArgs),
    /// Compress one image to a bitstream file.
    Encode(EncodeArgs),
    /// Decompress a bitstream file to a PNG.
    Decode(DecodeArgs),
    /// Craft an adversarial version of an image against a checkpoint.
    Attack(AttackArgs),
    /// Run the full evaluation grid and write reports.
    Eval(EvalArgs),
    /// Summarize a finished evaluation directory.
    Report(ReportArgs),
}

#[derive(Args)]
struct TrainArgs {
    #[arg(long)]
    dataset: PathBuf,
    #[arg(long, default_value = "model.rdsc")]
    out: PathBuf,
    #[arg(long, default_value_t = 16)]
    cmid: usize,
    #[arg(long, default_value_t = 24)]
    cy: usize,
    /// Rate-distortion tradeoff weight on MSE.
    #[arg(long, default_value_t = 100.0)]
    lambda: f32,
    #[arg(long, default_value_t = 30)]
    epochs: usize,
    #[arg(long, default_value_t = 8)]
    batch_size: usize,
    #[arg(long, default_value_t = 1e-3)]
    lr: f32,
    #[arg(long, default_value_t = 7)]
    seed: u64,
    /// Enable adversarial training with this l-inf radius (e.g. "4/255").
    #[arg(long)]
    adv_eps: Option<String>,
    /// Probability of replacing a training example with a randomly
    /// transformed copy (0 disables augmentation).
    #[arg(long, default_value_t = 0.0)]
    augment_prob: f32,
    #[arg(long)]
    center_crop: Option<u32>,
}

#[derive(Clone, Copy, PartialEq, Eq, ValueEnum)]
enum DefenseArg {
    Plain,
    Naive,
    TwoWay,
    KWay,
}

#[derive(Args)]
struct EncodeArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long)]
    input: PathBuf,
    #[arg(long)]
    out: PathBuf,
    #[arg(long, value_enum, default_value_t = DefenseArg::Plain)]
    defense: DefenseArg,
    /// Arm count when --defense k-way.
    #[arg(long, default_value_t = 4)]
    k: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long)]
    center_crop: Option<u32>,
}

#[derive(Args)]
struct DecodeArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long)]
    input: PathBuf,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Clone, Copy, ValueEnum)]
enum AttackKindArg {
    Pgd,
    Eot,
    Fda,
}

#[derive(Clone, Copy, ValueEnum)]
enum TargetArg {
    Rate,
    Distortion,
    Rd,
}

impl From<TargetArg> for AttackTarget {
    fn from(t: TargetArg) -> Self {
        match t {
            TargetArg::Rate => AttackTarget::Rate,
            TargetArg::Distortion => AttackTarget::Distortion,
            TargetArg::Rd => AttackTarget::Rd,
        }
    }
}

#[derive(Args)]
struct AttackArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long)]
    input: PathBuf,
    #[arg(long)]
    out: PathBuf,
    #[arg(long, value_enum, default_value_t = AttackKindArg::Pgd)]
    kind: AttackKindArg,
    #[arg(long, value_enum, default_value_t = TargetArg::Rd)]
    target: TargetArg,
    /// l-inf radius; accepts fractions like "4/255".
    #[arg(long, default_value = "4/255")]
    eps: String,
    /// Step size; accepts fractions like "2/255".
    #[arg(long, default_value = "2/255")]
    alpha: String,
    #[arg(long, default_value_t = 50)]
    iters: usize,
    /// Transform samples per step (EoT only).
    #[arg(long, default_value_t = 8)]
    eot_samples: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long)]
    center_crop: Option<u32>,
}

#[derive(Args)]
struct EvalArgs {
    /// TOML experiment config; wins over flags on conflicts (with warnings).
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    checkpoint: Option<PathBuf>,
    #[arg(long)]
    dataset: Option<PathBuf>,
    /// Defaults to $RDC_OUT_DIR, then "out".
    #[arg(long)]
    output_dir: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    workers: Option<usize>,
    #[arg(long)]
    center_crop: Option<u32>,
    #[arg(long)]
    max_images: Option<usize>,
    /// Also run the epsilon vulnerability sweep.
    #[arg(long)]
    sweep: bool,
    /// Write the default config TOML to this path and exit.
    #[arg(long)]
    write_default_config: Option<PathBuf>,
}

#[derive(Clone, Copy, PartialEq, Eq, ValueEnum)]
enum FormatArg {
    Csv,
    Json,
}

#[derive(Args)]
struct ReportArgs {
    /// Evaluation output directory containing summary.json.
    #[arg(long)]
    input: PathBuf,
    #[arg(long, value_enum, default_value_t = FormatArg::Csv)]
    format: FormatArg,
}

fn main() -> Result<()> {
    match Cli::parse().cmd {
        Cmd::Train(a) => cmd_train(a),
        Cmd::Encode(a) => cmd_encode(a),
        Cmd::Decode(a) => cmd_decode(a),
        Cmd::Attack(a) => cmd_attack(a),
        Cmd::Eval(a) => cmd_eval(a),
        Cmd::Report(a) => cmd_report(a),
    }
}

fn cmd_train(a: TrainArgs) -> Result<()> {
    let ds = ingest_dataset(&a.dataset, a.center_crop)?;
    for w in &ds.warnings {
        eprintln!("warning: {w}");
    }
    let images: Vec<Tensor> = ds.images.into_iter().map(|i| i.image).collect();
    let config = CodecConfig {
        cmid: a.cmid,
        cy: a.cy,
        lambda: a.lambda,
    };
    let adversarial = match &a.adv_eps {
        Some(s) => AdvMode::FgsmRandomInit {
            eps: parse_pixel_fraction(s)?,
        },
        None => AdvMode::Off,
    };
    let augment = if a.augment_prob > 0.0 {
        AugmentMode::Transforms {
            prob: a.augment_prob,
        }
    } else {
        AugmentMode::Off
    };
    let mut model = CodecModel::seeded(config, a.seed);
    let tc = TrainConfig {
        epochs: a.epochs,
        batch_size: a.batch_size,
        lr: a.lr,
        seed: a.seed,
        adversarial,
        augment,
    };
    let report = model.train(&images, &tc)?;
    model.save(&a.out)?;
    for (i, rd) in report.epoch_rd.iter().enumerate() {
        println!("epoch {:>3}: mean rd {rd:.6}", i + 1);
    }
    println!(
        "saved {} (model id {:016x}, {} params)",
        a.out.display(),
        model.model_id(),
        model.param_count()
    );
    Ok(())
}

fn cmd_encode(a: EncodeArgs) -> Result<()> {
    let model = CodecModel::load(&a.checkpoint)?;
    let x = load_image(&a.input, a.center_crop)?;
    let mut rng = seed::rng(a.seed, "cli-encode", 0);
    let (bitstream, record, theta) = match a.defense {
        DefenseArg::Plain => {
            let out = defense::encode_plain(&model, &x)?;
            (out.bitstream, out.record, out.theta)
        }
        DefenseArg::Naive => {
            let (bs, rec) = defense::encode_oneway_random(&model, &x, &mut rng)?;
            let theta = bs.transform_index;
            (bs, rec, theta)
        }
        DefenseArg::TwoWay => {
            let out = defense::encode_two_way(&model, &x, &mut rng)?;
            (out.bitstream, out.record, out.theta)
        }
        DefenseArg::KWay => {
            let out = defense::encode_k_way(&model, &x, &mut rng, a.k)?;
            (out.bitstream, out.record, out.theta)
        }
    };
    std::fs::write(&a.out, bitstream.to_bytes())
        .with_context(|| format!("writing {}", a.out.display()))?;
    println!(
        "{}: {} bytes, bpp {:.4}, psnr {:.2} dB, transform index {}",
        a.out.display(),
        bitstream.total_bytes(),
        record.rate_bpp,
        record.psnr_db,
        theta
    );
    Ok(())
}

fn cmd_decode(a: DecodeArgs) -> Result<()> {
    let model = CodecModel::load(&a.checkpoint)?;
    let bytes = std::fs::read(&a.input).with_context(|| format!("reading {}", a.input.display()))?;
    let bs = Bitstream::from_bytes(&bytes)?;
    let recon = defense::decode_any(&model, &bs)?;
    save_image(&a.out, &recon)?;
    println!(
        "{}: {}x{} (transform index {})",
        a.out.display(),
        bs.orig_h,
        bs.orig_w,
        bs.transform_index
    );
    Ok(())
}

fn cmd_attack(a: AttackArgs) -> Result<()> {
    let model = CodecModel::load(&a.checkpoint)?;
    let x = load_image(&a.input, a.center_crop)?;
    let cfg = AttackConfig {
        eps: parse_pixel_fraction(&a.eps)?,
        alpha: parse_pixel_fraction(&a.alpha)?,
        iters: a.iters,
        target: a.target.into(),
        eot_samples: match a.kind {
            AttackKindArg::Eot => a.eot_samples,
            _ => 0,
        },
        seed: a.seed,
    };
    let adv = match a.kind {
        AttackKindArg::Fda => attack::fda_lite(&model, &x, &cfg)?,
        _ => attack::pgd(&model, &x, &cfg)?,
    };
    save_image(&a.out, &adv)?;
    let clean = defense::encode_plain(&model, &x)?.record;
    let hit = defense::encode_plain(&model, &adv)?.record;
    let linf = x
        .data()
        .iter()
        .zip(adv.data())
        .map(|(a, b)| (a - b).abs())
        .fold(0.0f32, f32::max);
    println!("perturbation linf: {:.4}/255", linf * 255.0);
    println!(
        "clean: bpp {:.4}, rd {:.4} | attacked: bpp {:.4}, rd {:.4}",
        clean.rate_bpp, clean.rd_loss, hit.rate_bpp, hit.rd_loss
    );
    Ok(())
}

#[derive(Serialize)]
struct AggregateRow {
    condition: String,
    mean_bpp: f64,
    median_bpp: f64,
    mean_psnr_db: f64,
    mean_ms_ssim: f64,
    mean_rd_loss: f64,
}

fn cmd_eval(a: EvalArgs) -> Result<()> {
    if let Some(path) = &a.write_default_config {
        std::fs::write(path, ExperimentConfig::default().to_toml()?)?;
        println!("wrote default config to {}", path.display());
        return Ok(());
    }
    let file_cfg = match &a.config {
        Some(p) => Some(ExperimentConfig::load(p)?),
        None => None,
    };
    let overrides = CliOverrides {
        checkpoint: a.checkpoint,
        dataset: a.dataset,
        output_dir: a
            .output_dir
            .or_else(|| std::env::var_os("RDC_OUT_DIR").map(PathBuf::from)),
        seed: a.seed,
        workers: a.workers,
        center_crop: a.center_crop,
        max_images: a.max_images,
    };
    let (cfg, warnings) = resolve(file_cfg, &overrides);
    for w in &warnings {
        eprintln!("warning: {w}");
    }

    let out_dir = cfg.output_dir.clone();
    let result = run_defense_eval(&cfg)?;
    for w in &result.warnings {
        eprintln!("warning: {w}");
    }
    std::fs::create_dir_all(&out_dir)?;
    std::fs::write(out_dir.join("config.toml"), cfg.to_toml()?)?;
    report::write_report_csv(&out_dir.join("report.csv"), &result.rows)?;
    report::write_timing_csv(&out_dir.join("timing.csv"), &result.timing)?;
    report::write_summary_json(&out_dir.join("summary.json"), &result.summaries)?;
    if !result.kway_rows.is_empty() {
        report::write_kway_csv(&out_dir.join("kway.csv"), &result.kway_rows)?;
    }
    println!("wrote {} rows to {}", result.rows.len(), out_dir.display());
    print_summaries(&result.summaries);

    if a.sweep {
        let model = CodecModel::load(&cfg.checkpoint)?;
        let mut ds = ingest_dataset(&cfg.dataset, cfg.center_crop)?;
        if cfg.max_images > 0 {
            ds.images.truncate(cfg.max_images);
        }
        let models = vec![("main".to_string(), model)];
        let sweep = run_vulnerability_sweep(&models, &ds.images, &cfg)?;
        for w in &sweep.warnings {
            eprintln!("warning: {w}");
        }
        report::write_sweep_csv(&out_dir.join("sweep.csv"), &sweep.rows)?;
        let text = serde_json::to_string_pretty(&sweep.summaries)?;
        std::fs::write(out_dir.join("sweep_summary.json"), text)?;
        println!("sweep:");
        print_summaries(&sweep.summaries);
    }
    Ok(())
}

fn print_summaries(summaries: &BTreeMap<String, EvalSummary>) {
    println!(
        "{:<28} {:>9} {:>9} {:>9} {:>9} {:>10}",
        "condition", "mean_bpp", "med_bpp", "psnr_db", "ms_ssim", "mean_rd"
    );
    for (cond, s) in summaries {
        println!(
            "{cond:<28} {:>9.4} {:>9.4} {:>9.2} {:>9.4} {:>10.4}",
            s.mean_bpp, s.median_bpp, s.mean_psnr_db, s.mean_ms_ssim, s.mean_rd_loss
        );
    }
}

fn cmd_report(a: ReportArgs) -> Result<()> {
    let path = a.input.join("summary.json");
    let text =
        std::fs::read_to_string(&path).with_context(|| format!("reading {}", path.display()))?;
    let summaries: BTreeMap<String, EvalSummary> = serde_json::from_str(&text)?;
    anyhow::ensure!(!summaries.is_empty(), "no conditions in {}", path.display());
    print_summaries(&summaries);

    let rows: Vec<AggregateRow> = summaries
        .iter()
        .map(|(cond, s)| AggregateRow {
            condition: cond.clone(),
            mean_bpp: s.mean_bpp,
            median_bpp: s.median_bpp,
            mean_psnr_db: s.mean_psnr_db,
            mean_ms_ssim: s.mean_ms_ssim,
            mean_rd_loss: s.mean_rd_loss,
        })
        .collect();
    match a.format {
        FormatArg::Csv => {
            let mut out =
                String::from("condition,mean_bpp,median_bpp,mean_psnr_db,mean_ms_ssim,mean_rd_loss\n");
            for r in &rows {
                out.push_str(&format!(
                    "{},{:.5e},{:.5e},{:.5e},{:.5e},{:.5e}\n",
                    r.condition, r.mean_bpp, r.median_bpp, r.mean_psnr_db, r.mean_ms_ssim, r.mean_rd_loss
                ));
            }
            let dest = a.input.join("aggregate.csv");
            std::fs::write(&dest, out)?;
            println!("wrote {}", dest.display());
        }
        FormatArg::Json => {
            let dest = a.input.join("aggregate.json");
            std::fs::write(&dest, serde_json::to_string_pretty(&rows)?)?;
            println!("wrote {}", dest.display());
        }
    }
    let timing = a.input.join("timing.csv");
    if let Ok(t) = std::fs::read_to_string(&timing) {
        println!("\nencode timing ({}):", timing.display());
        print!("{t}");
    }
    Ok(())
}
