use std::path::{Path, PathBuf};

use serde_json::json;
use trajdiff_net::train::{self, TrainingSet, FINAL_CHECKPOINT};
use trajdiff_net::TrajDiff;

use crate::config::{RunDir, Snapshot, Split};
use crate::data::Dataset;
use crate::error::{CliError, Result};
use crate::{Ctx, TrainArgs};

pub fn run(ctx: &Ctx, args: &TrainArgs) -> Result<PathBuf> {
    let data = Dataset::open(&args.data)?;
    let section = &ctx.cfg.train;
    let (model_cfg, train_cfg) = section.variant.apply(&ctx.cfg.model, &section.train);
    let snap = Snapshot::new()
        .section("model", &model_cfg)?
        .section("train", section)?
        .input("data", data.digest.clone());
    let dir = RunDir::new(&ctx.root, "train", &snap);
    if dir.is_complete() {
        log::info!("training run {} already complete", dir.path.display());
        return Ok(dir.path);
    }
    dir.prepare(&snap)?;
    let records: Vec<_> = data.split(Split::Train).into_iter().cloned().collect();
    if records.is_empty() {
        return Err(CliError::input(&data.root, "train split is empty"));
    }
    let set = TrainingSet::load(&data.root, &records)?;
    let model = TrajDiff::new(&model_cfg)?;
    log::info!(
        "training {} ({} parameters) on {} pairs for {} iterations into {}",
        section.variant,
        model.params().num_parameters(),
        set.len(),
        train_cfg.iterations,
        dir.path.display()
    );
    let every = (train_cfg.iterations / 20).max(1);
    let rows = train::train(&model, &set, &train_cfg, Some(&dir.path), |r| {
        if r.iteration % every == 0 || r.iteration == 1 {
            log::info!("iter {:>6} loss {:.4} wbce {:.4} wiou {:.4} lr {:.2e} {:.0}s", r.iteration, r.loss, r.wbce, r.wiou, r.lr, r.wallclock);
        }
    })?;
    let last = rows.last().expect("at least one iteration");
    dir.finish(&json!({
        "variant": section.variant.label(),
        "iterations": last.iteration,
        "final_loss": last.loss,
        "seconds": last.wallclock,
        "pairs": set.len(),
    }))?;
    Ok(dir.path)
}

/// Accepts a checkpoint file or a `train` run directory.
pub fn checkpoint_file(path: &Path) -> Result<PathBuf> {
    if path.is_dir() {
        let file = path.join(FINAL_CHECKPOINT);
        if !file.is_file() {
            return Err(CliError::input(path, "run directory has no final checkpoint"));
        }
        Ok(file)
    } else {
        Ok(path.to_path_buf())
    }
}
