use std::collections::HashMap;
use std::path::{Path, PathBuf};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use serde_json::json;
use trajdiff_core::cep::{run_trial, ShutterCode};
use trajdiff_core::io;
use trajdiff_core::seed::derive_seed;
use trajdiff_core::trajkit::{ContinuousTrajectory, HrTrajectoryMap};

use super::{mean, read_jsonl, write_jsonl};
use crate::cmd::estimate::{self, EstimateRow};
use crate::config::{file_digest, RunDir, Snapshot, DONE_FILE};
use crate::data::Dataset;
use crate::error::{CliError, Result};
use crate::{CepArgs, Ctx, PlanKind};

pub const ROWS_FILE: &str = "cep.jsonl";

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CepRow {
    pub id: usize,
    pub seed: u64,
    pub code: ShutterCode,
    /// Min-MTF of the coded and the all-open PSF of the true path.
    pub coded_score: f64,
    pub baseline_score: f64,
    pub improved: bool,
    pub psnr_coded: f64,
    pub psnr_uncoded: f64,
    pub ssim_coded: f64,
    pub ssim_uncoded: f64,
}

pub fn run(ctx: &Ctx, args: &CepArgs) -> Result<PathBuf> {
    let data = Dataset::open(&args.data)?;
    let section = &ctx.cfg.cep;
    let mut snap = Snapshot::new().section("cep", section)?.input("data", data.digest.clone());
    let estimates: Option<(PathBuf, HashMap<usize, EstimateRow>)> = match args.plan {
        PlanKind::Truth => {
            snap = snap.input("plan", "truth");
            None
        }
        PlanKind::Estimated => {
            let d = args.estimates.clone().ok_or_else(|| CliError::Usage("--plan estimated needs --estimates DIR".into()))?;
            snap = snap.input("plan", format!("estimated:{}", file_digest(&d.join(estimate::ROWS_FILE))?));
            let rows = estimate::read_rows(&d)?.into_iter().map(|r| (r.id, r)).collect();
            Some((d, rows))
        }
    };
    let dir = RunDir::new(&ctx.root, "cep", &snap);
    if dir.is_complete() {
        return Ok(dir.path);
    }
    let mut records = data.split(section.split);
    if let Some((d, rows)) = &estimates {
        records.retain(|r| rows.contains_key(&r.id));
        if records.is_empty() {
            return Err(CliError::input(d, "no estimates for the selected split"));
        }
    }
    if section.count > 0 {
        records.truncate(section.count);
    }
    dir.prepare(&snap)?;
    let geom = data.geometry();
    log::info!("running {} coded-exposure trials into {}", records.len(), dir.path.display());
    let rows: Vec<CepRow> = ctx.pool().install(|| {
        records
            .par_iter()
            .map(|rec| {
                let seed = derive_seed(section.seed, "cep", rec.id as u64);
                let one = || -> Result<CepRow> {
                    let pair = data.load_pair(rec)?;
                    let r = match &estimates {
                        None => run_trial(&pair.sharp, &pair.traj, &pair.traj, geom, &section.trial, seed)?,
                        Some((d, rows)) => {
                            let grid = io::load_map_grid(&d.join(&rows[&rec.id].map))?;
                            if grid.iter().all(|&v| v == 0) {
                                // nothing to plan on: every code scores alike
                                let still = ContinuousTrajectory::new(vec![[0.0, 0.0]])?;
                                run_trial(&pair.sharp, &pair.traj, &still, geom, &section.trial, seed)?
                            } else {
                                run_trial(&pair.sharp, &pair.traj, &HrTrajectoryMap::new(grid)?, geom, &section.trial, seed)?
                            }
                        }
                    };
                    Ok(CepRow {
                        id: rec.id,
                        seed,
                        improved: r.coded_score > r.baseline_score,
                        code: r.code,
                        coded_score: r.coded_score,
                        baseline_score: r.baseline_score,
                        psnr_coded: r.psnr_coded,
                        psnr_uncoded: r.psnr_uncoded,
                        ssim_coded: r.ssim_coded,
                        ssim_uncoded: r.ssim_uncoded,
                    })
                };
                one().map_err(|e| CliError::entry(rec.id, seed, e))
            })
            .collect::<Result<Vec<_>>>()
    })?;
    write_jsonl(&dir.path.join(ROWS_FILE), &rows)?;
    let improved = rows.iter().filter(|r| r.improved).count();
    let (pc, pu) = (mean(rows.iter().map(|r| r.psnr_coded)), mean(rows.iter().map(|r| r.psnr_uncoded)));
    dir.finish(&json!({
        "data": data.root.display().to_string(),
        "trials": rows.len(),
        "improved": improved,
        "improved_fraction": improved as f64 / rows.len().max(1) as f64,
        "psnr_coded": pc,
        "psnr_uncoded": pu,
        "psnr_gain": pc - pu,
        "ssim_coded": mean(rows.iter().map(|r| r.ssim_coded)),
        "ssim_uncoded": mean(rows.iter().map(|r| r.ssim_uncoded)),
    }))?;
    Ok(dir.path)
}

pub fn read_rows(dir: &Path) -> Result<Vec<CepRow>> {
    if !dir.join(DONE_FILE).is_file() {
        return Err(CliError::input(dir, "not a completed cep run"));
    }
    read_jsonl(&dir.join(ROWS_FILE))
}
