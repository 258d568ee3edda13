use std::path::{Path, PathBuf};

use candle_core::Tensor;
use ndarray::Array2;
use trajdiff_core::cep::{coded_psf, mtf, DEFAULT_ANALYSIS_SIZE};
use trajdiff_core::io;
use trajdiff_core::trajkit::resample_psf;
use trajdiff_net::condenc::channel_mean;
use trajdiff_net::nn::Ctx as NetCtx;
use trajdiff_net::train::LOG_FILE;
use trajdiff_net::TrajDiff;

use crate::cmd::train::checkpoint_file;
use crate::cmd::{cep, estimate};
use crate::data::Dataset;
use crate::error::{CliError, Result};
use crate::render::{self, binary, gray, heat, row, Panel};
use crate::{Ctx, PlotArgs, PlotKind};

pub fn run(ctx: &Ctx, args: &PlotArgs) -> Result<PathBuf> {
    let size = ctx.cfg.plot.panel;
    let panel = match &args.kind {
        PlotKind::Trajectory { data, id } => trajectory(data, *id, size)?,
        PlotKind::Estimate { data, estimates, id } => estimate_panel(data, estimates, *id, size)?,
        PlotKind::Mtf { cep, id } => mtf_panel(cep, *id, size)?,
        PlotKind::Features { data, checkpoint, id } => features(data, checkpoint, *id, size)?,
        PlotKind::Loss { run } => loss(run, size)?,
    };
    render::save(&args.out, &panel)?;
    Ok(args.out.clone())
}

fn entry<'a>(data: &'a Dataset, id: usize) -> Result<&'a trajdiff_core::blursim::PairRecord> {
    data.manifest.entries.iter().find(|r| r.id == id).ok_or_else(|| CliError::input(&data.root, format!("no entry {id}")))
}

fn trajectory(data: &Path, id: usize, size: usize) -> Result<Panel> {
    let data = Dataset::open(data)?;
    let pair = data.load_pair(entry(&data, id)?)?;
    Ok(row(&[pair.sharp.pixels().clone(), pair.blurred.clone(), binary(pair.hr_map.grid()), gray(pair.psf.grid())], size))
}

fn estimate_panel(data: &Path, estimates: &Path, id: Option<usize>, size: usize) -> Result<Panel> {
    let data = Dataset::open(data)?;
    let rows = estimate::read_rows(estimates)?;
    let est = match id {
        Some(id) => rows.iter().find(|r| r.id == id).ok_or_else(|| CliError::input(estimates, format!("no estimate for entry {id}")))?,
        None => rows.first().ok_or_else(|| CliError::input(estimates, "no estimates"))?,
    };
    let pair = data.load_pair(entry(&data, est.id)?)?;
    let map = io::load_map_grid(&estimates.join(&est.map))?;
    let psf = estimate::load_psf(estimates, est)?;
    Ok(row(&[pair.blurred.clone(), binary(pair.hr_map.grid()), binary(&map), gray(pair.psf.grid()), gray(psf.grid())], size))
}

fn mtf_panel(dir: &Path, id: Option<usize>, size: usize) -> Result<Panel> {
    let rows = cep::read_rows(dir)?;
    let summary = crate::config::RunDir { path: dir.to_path_buf(), id: String::new() }.summary()?;
    let data_root = summary["data"].as_str().ok_or_else(|| CliError::input(dir, "summary does not name the dataset"))?;
    let data = Dataset::open(Path::new(data_root))?;
    let r = match id {
        Some(id) => rows.iter().find(|r| r.id == id).ok_or_else(|| CliError::input(dir, format!("no trial for entry {id}")))?,
        None => rows.first().ok_or_else(|| CliError::input(dir, "no trials"))?,
    };
    let pair = data.load_pair(entry(&data, r.id)?)?;
    let geom = data.geometry();
    let plain = resample_psf(&pair.traj, geom)?;
    let coded = coded_psf(&pair.traj, &r.code, geom)?;
    let spectrum = |p| -> Result<Panel> { Ok(heat(&mtf(p, DEFAULT_ANALYSIS_SIZE)?.magnitudes().mapv(|m| (m + 1e-3).log10()))) };
    let top = row(&[gray(plain.grid()), spectrum(&plain)?, gray(coded.grid()), spectrum(&coded)?], size);
    let strip = render::code_strip(r.code.bits(), top.dim().1, (size / 8).max(8));
    Ok(render::column(&[top, strip]))
}

fn tensor_2d(t: &Tensor) -> Result<Array2<f64>> {
    let t = t.squeeze(0)?.to_dtype(candle_core::DType::F64)?;
    let (h, w) = t.dims2()?;
    let v = t.flatten_all()?.to_vec1::<f64>()?;
    Ok(Array2::from_shape_vec((h, w), v).expect("tensor dims match"))
}

fn features(data: &Path, checkpoint: &Path, id: usize, size: usize) -> Result<Panel> {
    let data = Dataset::open(data)?;
    let pair = data.load_pair(entry(&data, id)?)?;
    let (model, _) = TrajDiff::load(&checkpoint_file(checkpoint)?)?;
    let x = model.images_to_tensor(&[&pair.blurred])?;
    let (pyr, z1) = model.encoder.features(&x, &NetCtx::eval())?;
    let mut panels = vec![pair.blurred.clone()];
    for level in pyr.levels.iter().chain(std::iter::once(&z1)) {
        panels.push(heat(&tensor_2d(&channel_mean(level)?)?));
    }
    Ok(row(&panels, size))
}

fn loss(run: &Path, size: usize) -> Result<Panel> {
    let path = run.join(LOG_FILE);
    let mut r = csv::Reader::from_path(&path).map_err(|e| CliError::input(&path, e))?;
    let headers = r.headers().map_err(|e| CliError::input(&path, e))?.clone();
    let col = headers.iter().position(|h| h == "loss").ok_or_else(|| CliError::input(&path, "no loss column"))?;
    let mut values = Vec::new();
    for rec in r.records() {
        let rec = rec.map_err(|e| CliError::input(&path, e))?;
        values.push(rec.get(col).and_then(|v| v.parse::<f64>().ok()).unwrap_or(f64::NAN));
    }
    if values.is_empty() {
        return Err(CliError::input(&path, "empty training log"));
    }
    // a running mean makes the per-batch noise readable
    let w = (values.len() / 50).max(1);
    let smooth: Vec<f64> = (0..values.len()).map(|i| super::mean(values[i.saturating_sub(w - 1)..=i].iter().cloned())).collect();
    Ok(render::line_plot(&smooth, 4 * size, 2 * size))
}
