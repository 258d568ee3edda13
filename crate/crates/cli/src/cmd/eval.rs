use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use serde_json::json;
use trajdiff_net::condenc::Aggregation;
use trajdiff_net::losses::LossKind;
use trajdiff_net::{ModelConfig, Variant};

use super::mean;
use crate::cmd::deblur::{self, PsfSource};
use crate::cmd::estimate;
use crate::config::{RunDir, Snapshot, TrainSection, SNAPSHOT_FILE};
use crate::data::Dataset;
use crate::error::{CliError, Result};
use crate::{Ctx, EvalArgs, PsfKind};

pub const REPORT_FILE: &str = "report.csv";
pub const ABLATION_FILE: &str = "ablation.csv";

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ReportRow {
    pub method: String,
    pub mnc: f64,
    pub psnr: f64,
    pub ssim: f64,
    pub pairs: usize,
    pub crop_border: usize,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct AblationRow {
    pub variant: String,
    pub scales: String,
    pub loss: String,
    pub stpd: bool,
    pub mnc: f64,
    pub psnr: f64,
    pub ssim: f64,
    pub pairs: usize,
}

fn summarize(method: &str, dir: &RunDir, crop_border: usize) -> Result<ReportRow> {
    let rows = deblur::read_rows(&dir.path)?;
    Ok(ReportRow {
        method: method.to_string(),
        mnc: mean(rows.iter().map(|r| r.mnc)),
        psnr: mean(rows.iter().map(|r| r.psnr)),
        ssim: mean(rows.iter().map(|r| r.ssim)),
        pairs: rows.len(),
        crop_border,
    })
}

/// Model and train sections recorded by a `train` run.
fn read_train_run(run: &Path) -> Result<(ModelConfig, TrainSection)> {
    let file = run.join(SNAPSHOT_FILE);
    let text = std::fs::read_to_string(&file).map_err(|e| CliError::io(&file, e))?;
    let table: toml::Table = text.parse().map_err(|e: toml::de::Error| CliError::input(&file, e.message()))?;
    let get = |k: &str| table.get(k).cloned().ok_or_else(|| CliError::input(&file, format!("no [{k}] section")));
    let model: ModelConfig = get("model")?.try_into().map_err(|e: toml::de::Error| CliError::input(&file, e.message()))?;
    let train: TrainSection = get("train")?.try_into().map_err(|e: toml::de::Error| CliError::input(&file, e.message()))?;
    Ok((model, train))
}

fn scales_label(a: Aggregation) -> String {
    match a {
        Aggregation::Stepwise => "f1-f4".into(),
        Aggregation::SingleScale { stage } => format!("f{stage}"),
    }
}

fn write_csv<T: Serialize>(path: &Path, rows: &[T]) -> Result<()> {
    let mut w = csv::Writer::from_path(path).map_err(|e| CliError::input(path, e))?;
    for r in rows {
        w.serialize(r).map_err(|e| CliError::input(path, e))?;
    }
    w.flush().map_err(|e| CliError::io(path, e))
}

pub fn run(ctx: &Ctx, args: &EvalArgs) -> Result<PathBuf> {
    let data = Dataset::open(&args.data)?;
    let split = ctx.cfg.estimate.split;
    let crop = data.geometry().kernel_size;
    if args.estimates.is_empty() && args.baselines.is_empty() && args.ablation.is_empty() {
        return Err(CliError::Usage("nothing to evaluate: give --estimates, --baseline or --ablation".into()));
    }

    let mut report = Vec::new();
    let mut inputs = Vec::new();
    for spec in &args.estimates {
        let (name, dir) = spec.split_once('=').ok_or_else(|| CliError::Usage(format!("--estimates expects NAME=DIR, got `{spec}`")))?;
        let d = deblur::ensure(ctx, &data, &PsfSource::Estimated(PathBuf::from(dir)), split)?;
        report.push(summarize(name, &d, crop)?);
        inputs.push(format!("{name}={}", d.id));
    }
    for &kind in &args.baselines {
        if kind == PsfKind::Estimated {
            return Err(CliError::Usage("`estimated` is not a baseline; use --estimates NAME=DIR".into()));
        }
        let source = PsfSource::from_kind(kind, None, ctx.cfg.eval.seed)?;
        let d = deblur::ensure(ctx, &data, &source, split)?;
        let name = match kind {
            PsfKind::Truth => "ground_truth_psf",
            PsfKind::Delta => "delta_psf",
            PsfKind::Random => "random_trajectory",
            PsfKind::Estimated => unreachable!("rejected above"),
        };
        report.push(summarize(name, &d, crop)?);
        inputs.push(format!("{name}={}", d.id));
    }

    let mut ablation = Vec::new();
    for run in &args.ablation {
        let (model, train) = read_train_run(run)?;
        if ablation.iter().any(|(v, _): &(Variant, AblationRow)| *v == train.variant) {
            return Err(CliError::input(run, format!("variant {} given twice", train.variant)));
        }
        let est = estimate::ensure(ctx, &data, run, &ctx.cfg.estimate)?;
        let d = deblur::ensure(ctx, &data, &PsfSource::Estimated(est.path.clone()), split)?;
        let s = summarize(train.variant.label(), &d, crop)?;
        let (m, t) = train.variant.apply(&model, &train.train);
        ablation.push((
            train.variant,
            AblationRow {
                variant: train.variant.label().into(),
                scales: scales_label(m.encoder.aggregation),
                loss: match t.loss {
                    LossKind::Weighted => "wbce+wiou".into(),
                    LossKind::Mse => "mse".into(),
                },
                stpd: t.stpd_p > 0.0,
                mnc: s.mnc,
                psnr: s.psnr,
                ssim: s.ssim,
                pairs: s.pairs,
            },
        ));
        inputs.push(format!("ablation:{}={}", train.variant, d.id));
    }
    ablation.sort_by_key(|(v, _)| Variant::ALL.iter().position(|a| a == v));
    let ablation: Vec<AblationRow> = ablation.into_iter().map(|(_, r)| r).collect();

    let mut snap = Snapshot::new().input("data", data.digest.clone());
    for (i, s) in inputs.iter().enumerate() {
        snap = snap.input(&format!("{i:03}"), s.clone());
    }
    let dir = RunDir::new(&ctx.root, "eval", &snap);
    dir.prepare(&snap)?;
    if !report.is_empty() {
        write_csv(&dir.path.join(REPORT_FILE), &report)?;
    }
    if !ablation.is_empty() {
        write_csv(&dir.path.join(ABLATION_FILE), &ablation)?;
    }
    for r in &report {
        log::info!("{:<24} MNC {:.4}  PSNR {:.2}  SSIM {:.4}  ({} pairs)", r.method, r.mnc, r.psnr, r.ssim, r.pairs);
    }
    for r in &ablation {
        log::info!("{:<24} MNC {:.4}  PSNR {:.2}  SSIM {:.4}", r.variant, r.mnc, r.psnr, r.ssim);
    }
    dir.finish(&json!({ "report": report, "ablation": ablation, "split": split }))?;
    Ok(dir.path)
}
