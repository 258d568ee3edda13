use std::path::{Path, PathBuf};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use serde_json::json;
use trajdiff_core::io;
use trajdiff_core::seed::derive_seed;
use trajdiff_core::trajkit::{resample_psf, HrTrajectoryMap, Psf};
use trajdiff_net::TrajDiff;

use super::{create_dir, read_jsonl, write_jsonl};
use crate::cmd::train::checkpoint_file;
use crate::config::{file_digest, EstimateSection, RunDir, Snapshot};
use crate::data::Dataset;
use crate::error::{CliError, Result};
use crate::{Ctx, EstimateArgs};

pub const ROWS_FILE: &str = "estimates.jsonl";

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct EstimateRow {
    pub id: usize,
    pub seed: u64,
    pub map: String,
    pub psf: String,
    /// Set pixels in the estimated map.
    pub pixels: usize,
    /// No pixel was set; the PSF falls back to a centered delta.
    pub empty: bool,
}

pub fn run(ctx: &Ctx, args: &EstimateArgs) -> Result<PathBuf> {
    let data = Dataset::open(&args.data)?;
    Ok(ensure(ctx, &data, &args.checkpoint, &ctx.cfg.estimate)?.path)
}

/// Runs estimation unless an identical run is already complete.
pub fn ensure(ctx: &Ctx, data: &Dataset, checkpoint: &Path, section: &EstimateSection) -> Result<RunDir> {
    let ckpt = checkpoint_file(checkpoint)?;
    let snap = Snapshot::new()
        .section("estimate", section)?
        .input("data", data.digest.clone())
        .input("checkpoint", file_digest(&ckpt)?);
    let dir = RunDir::new(&ctx.root, "estimate", &snap);
    if dir.is_complete() {
        return Ok(dir);
    }
    dir.prepare(&snap)?;
    let (model, _) = TrajDiff::load(&ckpt)?;
    let records = data.split(section.split);
    create_dir(&dir.path.join("maps"))?;
    create_dir(&dir.path.join("psfs"))?;
    log::info!("estimating {} entries with {} steps into {}", records.len(), section.steps, dir.path.display());
    let geom = data.geometry();
    let rows: Vec<EstimateRow> = ctx.pool().install(|| {
        records
            .par_iter()
            .map(|rec| {
                let seed = derive_seed(section.seed, "estimate", rec.id as u64);
                let one = || -> Result<EstimateRow> {
                    let pair = data.load_pair(rec)?;
                    let map = model.estimate_images(&[&pair.blurred], section.steps, &[seed])?.remove(0);
                    let pixels = map.iter().filter(|&&v| v > 0).count();
                    let psf = if pixels == 0 { Psf::delta(geom.kernel_size) } else { resample_psf(&HrTrajectoryMap::new(map.clone())?, geom)? };
                    let row = EstimateRow {
                        id: rec.id,
                        seed,
                        map: format!("maps/p{:06}.png", rec.id),
                        psf: format!("psfs/p{:06}.npy", rec.id),
                        pixels,
                        empty: pixels == 0,
                    };
                    io::save_map(&dir.path.join(&row.map), &map)?;
                    io::save_psf(&dir.path.join(&row.psf), &psf)?;
                    Ok(row)
                };
                one().map_err(|e| CliError::entry(rec.id, seed, e))
            })
            .collect::<Result<Vec<_>>>()
    })?;
    write_jsonl(&dir.path.join(ROWS_FILE), &rows)?;
    let empty = rows.iter().filter(|r| r.empty).count();
    dir.finish(&json!({ "entries": rows.len(), "empty_maps": empty, "steps": section.steps }))?;
    Ok(dir)
}

pub fn read_rows(dir: &Path) -> Result<Vec<EstimateRow>> {
    if !dir.join(crate::config::DONE_FILE).is_file() {
        return Err(CliError::input(dir, "not a completed estimate run"));
    }
    read_jsonl(&dir.join(ROWS_FILE))
}

pub fn load_psf(dir: &Path, row: &EstimateRow) -> Result<Psf> {
    io::load_psf(&dir.join(&row.psf)).map_err(|e| CliError::entry(row.id, row.seed, e))
}
