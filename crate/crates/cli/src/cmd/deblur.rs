use std::collections::HashMap;
use std::path::{Path, PathBuf};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use serde_json::json;
use trajdiff_core::blursim::{simulate_fitting, PairRecord, SynthConfig};
use trajdiff_core::deblur::nonblind_deconv;
use trajdiff_core::io;
use trajdiff_core::metrics::{central_crop, mnc, psnr, ssim};
use trajdiff_core::seed::derive_seed;
use trajdiff_core::trajkit::Psf;

use super::{create_dir, mean, read_jsonl, write_jsonl};
use crate::cmd::estimate::{self, EstimateRow};
use crate::config::{RunDir, Snapshot, Split, DONE_FILE};
use crate::data::Dataset;
use crate::error::{CliError, Result};
use crate::{Ctx, DeblurArgs, PsfKind};

pub const ROWS_FILE: &str = "deblur.jsonl";

/// Where the deconvolution kernels come from.
pub enum PsfSource {
    Estimated(PathBuf),
    Truth,
    Delta,
    /// Independently drawn trajectories from this seed.
    Random(u64),
}

impl PsfSource {
    pub fn from_kind(kind: PsfKind, estimates: Option<&Path>, seed: u64) -> Result<Self> {
        Ok(match kind {
            PsfKind::Estimated => {
                PsfSource::Estimated(estimates.ok_or_else(|| CliError::Usage("--psf estimated needs --estimates DIR".into()))?.to_path_buf())
            }
            PsfKind::Truth => PsfSource::Truth,
            PsfKind::Delta => PsfSource::Delta,
            PsfKind::Random => PsfSource::Random(seed),
        })
    }

    fn describe(&self) -> Result<String> {
        Ok(match self {
            PsfSource::Estimated(dir) => format!("estimated:{}", crate::config::file_digest(&dir.join(estimate::ROWS_FILE))?),
            PsfSource::Truth => "truth".into(),
            PsfSource::Delta => "delta".into(),
            PsfSource::Random(seed) => format!("random:{seed}"),
        })
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct DeblurRow {
    pub id: usize,
    pub seed: u64,
    pub image: String,
    /// MNC of the kernel used against the true PSF.
    pub mnc: f64,
    pub psnr: f64,
    pub ssim: f64,
}

pub fn run(ctx: &Ctx, args: &DeblurArgs) -> Result<PathBuf> {
    let data = Dataset::open(&args.data)?;
    let source = PsfSource::from_kind(args.psf, args.estimates.as_deref(), ctx.cfg.eval.seed)?;
    Ok(ensure(ctx, &data, &source, ctx.cfg.estimate.split)?.path)
}

pub fn ensure(ctx: &Ctx, data: &Dataset, source: &PsfSource, split: Split) -> Result<RunDir> {
    let snap = Snapshot::new()
        .section("deblur", &ctx.cfg.deblur)?
        .section("split", &HashMap::from([("split", split)]))?
        .input("data", data.digest.clone())
        .input("psf", source.describe()?);
    let dir = RunDir::new(&ctx.root, "deblur", &snap);
    if dir.is_complete() {
        return Ok(dir);
    }
    let records = data.split(split);
    let estimated: HashMap<usize, EstimateRow> = match source {
        PsfSource::Estimated(d) => estimate::read_rows(d)?.into_iter().map(|r| (r.id, r)).collect(),
        _ => HashMap::new(),
    };
    if let PsfSource::Estimated(d) = source {
        if let Some(r) = records.iter().find(|r| !estimated.contains_key(&r.id)) {
            return Err(CliError::input(d, format!("no estimate for entry {} (seed {})", r.id, r.pair_seed)));
        }
    }
    dir.prepare(&snap)?;
    create_dir(&dir.path.join("images"))?;
    let geom = data.geometry();
    let params = ctx.cfg.deblur;
    log::info!("deblurring {} entries into {}", records.len(), dir.path.display());
    let rows: Vec<DeblurRow> = ctx.pool().install(|| {
        records
            .par_iter()
            .map(|rec| {
                let one = || -> Result<DeblurRow> {
                    let pair = data.load_pair(rec)?;
                    let psf = match source {
                        PsfSource::Estimated(d) => estimate::load_psf(d, &estimated[&rec.id])?,
                        PsfSource::Truth => pair.psf.clone(),
                        PsfSource::Delta => Psf::delta(geom.kernel_size),
                        PsfSource::Random(seed) => random_psf(&data.sim.synth, *seed, rec)?,
                    };
                    let out = nonblind_deconv(&pair.blurred, &psf, &params)?;
                    let k = geom.kernel_size;
                    let (a, b) = (central_crop(&out.image, k)?, central_crop(pair.sharp.pixels(), k)?);
                    let row = DeblurRow {
                        id: rec.id,
                        seed: rec.pair_seed,
                        image: format!("images/p{:06}.png", rec.id),
                        mnc: mnc(psf.grid(), pair.psf.grid())?,
                        psnr: psnr(&a, &b, 1.0)?,
                        ssim: ssim(&a, &b)?,
                    };
                    io::save_rgb16(&dir.path.join(&row.image), &out.image)?;
                    Ok(row)
                };
                one().map_err(|e| CliError::entry(rec.id, rec.pair_seed, e))
            })
            .collect::<Result<Vec<_>>>()
    })?;
    write_jsonl(&dir.path.join(ROWS_FILE), &rows)?;
    dir.finish(&json!({
        "entries": rows.len(),
        "mnc": mean(rows.iter().map(|r| r.mnc)),
        "psnr": mean(rows.iter().map(|r| r.psnr)),
        "ssim": mean(rows.iter().map(|r| r.ssim)),
        "crop_border": geom.kernel_size,
    }))?;
    Ok(dir)
}

/// PSF of a trajectory drawn independently of the entry's own.
pub fn random_psf(synth: &SynthConfig, seed: u64, rec: &PairRecord) -> Result<Psf> {
    let cfg = SynthConfig { seed: derive_seed(seed, "random-baseline", 0), ..synth.clone() };
    Ok(simulate_fitting(&cfg, rec.id as u64)?.3)
}

pub fn read_rows(dir: &Path) -> Result<Vec<DeblurRow>> {
    if !dir.join(DONE_FILE).is_file() {
        return Err(CliError::input(dir, "not a completed deblur run"));
    }
    read_jsonl(&dir.join(ROWS_FILE))
}
