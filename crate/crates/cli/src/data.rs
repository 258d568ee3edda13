//! Datasets written by `simulate`.

use std::path::{Path, PathBuf};

use trajdiff_core::blursim::{BlurPair, Manifest, PairRecord};
use trajdiff_core::trajkit::PsfGeometry;

use crate::config::{file_digest, sha256_hex, Split, SimulateSection, SNAPSHOT_FILE};
use crate::error::{CliError, Result};

pub struct Dataset {
    pub root: PathBuf,
    pub manifest: Manifest,
    pub sim: SimulateSection,
    /// Digest of the manifest and the simulation snapshot.
    pub digest: String,
}

impl Dataset {
    pub fn open(root: &Path) -> Result<Self> {
        let manifest_path = root.join(Manifest::FILE_NAME);
        let manifest = Manifest::read(&manifest_path)?;
        let snap_path = root.join(SNAPSHOT_FILE);
        let text = std::fs::read_to_string(&snap_path).map_err(|e| CliError::io(&snap_path, e))?;
        let table: toml::Table = text.parse().map_err(|e: toml::de::Error| CliError::input(&snap_path, e.message()))?;
        let sim: SimulateSection = table
            .get("simulate")
            .cloned()
            .ok_or_else(|| CliError::input(&snap_path, "no [simulate] section"))?
            .try_into()
            .map_err(|e: toml::de::Error| CliError::input(&snap_path, e.message()))?;
        let digest = sha256_hex(format!("{}{}", file_digest(&manifest_path)?, text).as_bytes());
        Ok(Self { root: root.to_path_buf(), manifest, sim, digest })
    }

    /// First trajectory index of the held-out split.
    pub fn heldout_start(&self) -> usize {
        heldout_start(self.sim.synth.n_trajectories, self.sim.heldout_fraction)
    }

    pub fn split(&self, split: Split) -> Vec<&PairRecord> {
        let start = self.heldout_start();
        self.manifest
            .entries
            .iter()
            .filter(|r| match split {
                Split::Train => r.traj_index < start,
                Split::Heldout => r.traj_index >= start,
                Split::All => true,
            })
            .collect()
    }

    pub fn geometry(&self) -> PsfGeometry {
        self.sim.synth.geometry()
    }

    pub fn load_pair(&self, rec: &PairRecord) -> Result<BlurPair> {
        BlurPair::load(&self.root, rec).map_err(|e| CliError::entry(rec.id, rec.pair_seed, e))
    }
}

/// The last `ceil(fraction * n)` trajectories are held out.
pub fn heldout_start(n: usize, fraction: f64) -> usize {
    let held = (fraction * n as f64).ceil() as usize;
    n.saturating_sub(held.min(n))
}
