//! On-disk sequence layout shared by the generator, the trainer and
//! external data:
//!
//! ```text
//! cameras.json              K, R, t, width, height per frame
//! depth/frame_NNNN.pfm      initial depth
//! flow/flow_IIII_JJJJ.flo   optical flow from frame I to frame J
//! masks/static_NNNN.pgm     optional, 255 = static
//! gt_depth/frame_NNNN.pfm   optional ground truth
//! sfm/frame_NNNN.pfm        optional sparse depth (0 = missing) for scale alignment
//! ```

use std::fs;
use std::path::Path;

use crate::error::{Error, Result};
use crate::flow::{pair_schedule, scale_alignment, FlowField, MotionMask};
use crate::geometry::CameraFrame;
use crate::io;
use crate::parallel::Execution;
use crate::raster::Raster;
use crate::sequence::Sequence;
use crate::synthetic::CubeScene;

pub fn frame_file(n: usize) -> String {
    format!("frame_{n:04}.pfm")
}

pub fn flow_file(i: usize, j: usize) -> String {
    format!("flow_{i:04}_{j:04}.flo")
}

pub fn mask_file(n: usize) -> String {
    format!("static_{n:04}.pgm")
}

#[derive(Debug, Clone)]
pub struct Dataset {
    pub frames: Vec<CameraFrame>,
    pub init_depth: Vec<Raster<f64>>,
    pub flows: Vec<FlowField>,
    pub motion_masks: Option<Vec<MotionMask>>,
    pub gt_depth: Option<Vec<Raster<f64>>>,
    pub sfm_depth: Option<Vec<Raster<f64>>>,
}

fn read_frames(dir: &Path, n: usize) -> Result<Vec<Raster<f64>>> {
    (0..n).map(|i| io::read_pfm(&dir.join(frame_file(i)))).collect()
}

fn write_frames(dir: &Path, maps: &[Raster<f64>]) -> Result<()> {
    fs::create_dir_all(dir)?;
    for (i, m) in maps.iter().enumerate() {
        io::write_pfm(&dir.join(frame_file(i)), m)?;
    }
    Ok(())
}

impl Dataset {
    pub fn from_scene(scene: &CubeScene) -> Self {
        Dataset {
            frames: scene.frames.clone(),
            init_depth: scene.init_depth.clone(),
            flows: scene.flows.values().cloned().collect(),
            motion_masks: Some(scene.motion_masks.clone()),
            gt_depth: Some(scene.gt_depth.clone()),
            sfm_depth: None,
        }
    }

    pub fn write(&self, dir: &Path) -> Result<()> {
        fs::create_dir_all(dir)?;
        io::write_cameras(&dir.join("cameras.json"), &self.frames)?;
        write_frames(&dir.join("depth"), &self.init_depth)?;
        let flow_dir = dir.join("flow");
        fs::create_dir_all(&flow_dir)?;
        for f in &self.flows {
            io::write_flo(&flow_dir.join(flow_file(f.source, f.target)), &f.vectors)?;
        }
        if let Some(masks) = &self.motion_masks {
            let mdir = dir.join("masks");
            fs::create_dir_all(&mdir)?;
            for m in masks {
                io::write_mask(&mdir.join(mask_file(m.frame)), &m.mask)?;
            }
        }
        if let Some(gt) = &self.gt_depth {
            write_frames(&dir.join("gt_depth"), gt)?;
        }
        if let Some(sfm) = &self.sfm_depth {
            write_frames(&dir.join("sfm"), sfm)?;
        }
        Ok(())
    }

    /// Reads a dataset. Flow files are looked up for every schedule pair;
    /// missing ones are skipped, but at least one pair must exist.
    pub fn read(dir: &Path) -> Result<Self> {
        let frames = io::read_cameras(&dir.join("cameras.json"))?;
        if frames.is_empty() {
            return Err(Error::format(dir.join("cameras.json"), "no cameras"));
        }
        let n = frames.len();
        let init_depth = read_frames(&dir.join("depth"), n)?;
        let mut flows = Vec::new();
        for (i, j) in pair_schedule(n) {
            let p = dir.join("flow").join(flow_file(i, j));
            if p.exists() {
                flows.push(FlowField::new(i, j, io::read_flo(&p)?)?);
            }
        }
        if flows.is_empty() {
            return Err(Error::format(dir.join("flow"), "no flow files found"));
        }
        let optional = |sub: &str| dir.join(sub).is_dir();
        let motion_masks = if optional("masks") {
            Some(
                (0..n)
                    .map(|i| {
                        Ok(MotionMask {
                            frame: i,
                            mask: io::read_mask(&dir.join("masks").join(mask_file(i)))?,
                        })
                    })
                    .collect::<Result<Vec<_>>>()?,
            )
        } else {
            None
        };
        let gt_depth = optional("gt_depth").then(|| read_frames(&dir.join("gt_depth"), n)).transpose()?;
        let sfm_depth = optional("sfm").then(|| read_frames(&dir.join("sfm"), n)).transpose()?;
        Ok(Dataset {
            frames,
            init_depth,
            flows,
            motion_masks,
            gt_depth,
            sfm_depth,
        })
    }

    /// Builds the optimizer input. With sparse depth present, camera
    /// translations are rescaled into the units of the initial depth.
    pub fn into_sequence(self, exec: Execution) -> Result<Sequence> {
        let scale = match &self.sfm_depth {
            Some(sfm) => Some(scale_alignment(&self.init_depth, sfm)?),
            None => None,
        };
        let mut seq = Sequence::new(self.frames, self.flows, self.init_depth, exec)?;
        if let Some(s) = scale {
            seq.scale_translations(s);
        }
        if let Some(m) = self.motion_masks {
            seq = seq.with_motion_masks(m)?;
        }
        if let Some(g) = self.gt_depth {
            seq = seq.with_gt_depth(g)?;
        }
        Ok(seq)
    }
}
