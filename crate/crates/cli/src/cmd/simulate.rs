use std::path::PathBuf;

use serde_json::json;
use trajdiff_core::blursim::{synthesize_dataset, SharpSource};
use trajdiff_core::seed::derive_seed;

use crate::config::{RunDir, Snapshot};
use crate::error::{CliError, Result};
use crate::{Ctx, SimulateArgs};

pub fn run(ctx: &Ctx, _args: &SimulateArgs) -> Result<PathBuf> {
    let sim = &ctx.cfg.simulate;
    let mut snap = Snapshot::new().section("simulate", sim)?;
    let sources: Vec<SharpSource> = if sim.sharp_dir.is_empty() {
        if sim.sharps == 0 {
            return Err(CliError::Config("simulate.sharps must be at least 1".into()));
        }
        (0..sim.sharps as u64)
            .map(|i| SharpSource::Procedural { seed: derive_seed(sim.synth.seed, "sharp", i), size: sim.sharp_size })
            .collect()
    } else {
        let dir = PathBuf::from(&sim.sharp_dir);
        let mut files: Vec<PathBuf> = std::fs::read_dir(&dir)
            .map_err(|e| CliError::io(&dir, e))?
            .filter_map(|e| e.ok().map(|e| e.path()))
            .filter(|p| p.extension().is_some_and(|x| x.eq_ignore_ascii_case("png")))
            .collect();
        files.sort();
        if files.is_empty() {
            return Err(CliError::input(&dir, "no PNG images"));
        }
        for f in &files {
            snap = snap.input(&f.display().to_string(), crate::config::file_digest(f)?);
        }
        files.into_iter().map(|path| SharpSource::File { path }).collect()
    };
    if !(0.0..=1.0).contains(&sim.heldout_fraction) {
        return Err(CliError::Config("simulate.heldout_fraction must lie in [0, 1]".into()));
    }
    let dir = RunDir::new(&ctx.root, "datasets", &snap);
    if dir.is_complete() {
        log::info!("dataset {} already complete", dir.path.display());
        return Ok(dir.path);
    }
    dir.prepare(&snap)?;
    log::info!("synthesizing {} sources x {} trajectories into {}", sources.len(), sim.synth.n_trajectories, dir.path.display());
    let manifest = synthesize_dataset(&sources, &sim.synth, &dir.path)?;
    dir.finish(&json!({ "pairs": manifest.entries.len(), "seed": sim.synth.seed }))?;
    Ok(dir.path)
}
