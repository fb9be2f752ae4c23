//! Run directory: manifest, loss log, per-epoch checkpoints, latest depth.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use anyhow::{Context, Result};
use serde::{Deserialize, Serialize};

use flowdepth::autodiff::ParamStore;
use flowdepth::depth::DepthModel;
use flowdepth::io::{self, CheckpointMeta};
use flowdepth::sceneflow::SceneFlowNet;
use flowdepth::trainer::TrainConfig;

pub const MANIFEST: &str = "manifest.json";
pub const LOSS_LOG: &str = "losses.csv";
const LOCK: &str = "run.lock";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Artifacts {
    pub checkpoint: String,
    pub losses: String,
    pub depth_dir: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub config: TrainConfig,
    pub seed: u64,
    pub dataset: PathBuf,
    /// Completed epochs.
    pub epoch: usize,
    pub step: usize,
    pub artifacts: Artifacts,
}

impl RunManifest {
    pub fn load(run: &Path) -> Result<Self> {
        let p = run.join(MANIFEST);
        let m: RunManifest = serde_json::from_slice(&fs::read(&p).with_context(|| format!("reading {}", p.display()))?)
            .with_context(|| format!("parsing {}", p.display()))?;
        for a in [&m.artifacts.checkpoint, &m.artifacts.losses, &m.artifacts.depth_dir] {
            let path = run.join(a);
            if !path.exists() {
                anyhow::bail!(flowdepth::Error::Format {
                    path,
                    msg: "artifact named in the manifest is missing".into()
                });
            }
        }
        Ok(m)
    }

    pub fn save(&self, run: &Path) -> Result<()> {
        let mut s = serde_json::to_string_pretty(self)?;
        s.push('\n');
        fs::write(run.join(MANIFEST), s)?;
        Ok(())
    }
}

pub fn checkpoint_name(epoch: usize) -> String {
    format!("checkpoints/epoch_{epoch:04}.ckpt")
}

#[derive(Debug)]
pub struct Locked(pub PathBuf);

impl std::fmt::Display for Locked {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "run directory is locked by another writer ({})", self.0.display())
    }
}

impl std::error::Error for Locked {}

/// Held for the lifetime of a writer; removes the lock file on drop.
pub struct RunLock(PathBuf);

impl RunLock {
    pub fn acquire(run: &Path) -> Result<Self> {
        fs::create_dir_all(run)?;
        let p = run.join(LOCK);
        match fs::OpenOptions::new().write(true).create_new(true).open(&p) {
            Ok(mut f) => {
                writeln!(f, "{}", std::process::id())?;
                Ok(RunLock(p))
            }
            Err(e) if e.kind() == std::io::ErrorKind::AlreadyExists => Err(Locked(p).into()),
            Err(e) => Err(e.into()),
        }
    }
}

impl Drop for RunLock {
    fn drop(&mut self) {
        let _ = fs::remove_file(&self.0);
    }
}

/// Parameters restored from a checkpoint.
pub struct Loaded {
    pub store: ParamStore,
    pub meta: CheckpointMeta,
    pub depths: DepthModel,
    pub net: Option<SceneFlowNet>,
}

pub fn load_checkpoint(path: &Path) -> Result<Loaded> {
    let (store, meta) = io::read_checkpoint(path).with_context(|| format!("reading {}", path.display()))?;
    let depths = DepthModel::from_store(&store, meta.num_frames, meta.width, meta.height)?;
    let net = match (&meta.encoding, &meta.net) {
        (Some(e), Some(n)) => Some(SceneFlowNet::from_store(&store, e.clone(), *n)?),
        _ => None,
    };
    Ok(Loaded {
        store,
        meta,
        depths,
        net,
    })
}
