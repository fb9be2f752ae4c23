//! A calibrated video sequence with its precomputed flow pairs.

use std::collections::BTreeMap;

use crate::error::{Error, Result};
use crate::flow::{occlusion_mask, pair_schedule, FlowField, MotionMask, OcclusionMask};
use crate::geometry::CameraFrame;
use crate::parallel::Execution;
use crate::raster::Raster;

/// Everything the optimizer consumes: cameras, flows with their occlusion
/// masks, initial depth, and optional static-region masks and ground truth.
#[derive(Debug, Clone)]
pub struct Sequence {
    pub frames: Vec<CameraFrame>,
    pub flows: BTreeMap<(usize, usize), FlowField>,
    pub occlusion: BTreeMap<(usize, usize), OcclusionMask>,
    pub init_depth: Vec<Raster<f64>>,
    pub motion_masks: Option<Vec<MotionMask>>,
    pub gt_depth: Option<Vec<Raster<f64>>>,
}

impl Sequence {
    /// Validates shapes and derives an occlusion mask for every flow whose
    /// reverse flow is present.
    pub fn new(
        frames: Vec<CameraFrame>,
        flows: Vec<FlowField>,
        init_depth: Vec<Raster<f64>>,
        exec: Execution,
    ) -> Result<Self> {
        if frames.is_empty() {
            return Err(Error::Structural("sequence has no frames".into()));
        }
        if init_depth.len() != frames.len() {
            return Err(Error::Structural(format!(
                "{} frames but {} initial depth maps",
                frames.len(),
                init_depth.len()
            )));
        }
        let (w, h) = (frames[0].width, frames[0].height);
        for f in &frames {
            if (f.width, f.height) != (w, h) {
                return Err(Error::Structural(format!("frame {} has a different size", f.index)));
            }
        }
        for (i, d) in init_depth.iter().enumerate() {
            if (d.width(), d.height()) != (w, h) {
                return Err(Error::Structural(format!("initial depth {i} has the wrong size")));
            }
        }
        let mut map = BTreeMap::new();
        for f in flows {
            if f.source >= frames.len() || f.target >= frames.len() || f.source == f.target {
                return Err(Error::Structural(format!("flow {}->{} is out of range", f.source, f.target)));
            }
            if (f.width(), f.height()) != (w, h) {
                return Err(Error::Structural(format!("flow {}->{} has the wrong size", f.source, f.target)));
            }
            map.insert((f.source, f.target), f);
        }
        let keys: Vec<(usize, usize)> = map
            .keys()
            .copied()
            .filter(|&(i, j)| map.contains_key(&(j, i)))
            .collect();
        let masks = exec.map(&keys, |&(i, j)| occlusion_mask(&map[&(i, j)], &map[&(j, i)]));
        let occlusion = keys
            .into_iter()
            .zip(masks)
            .map(|(k, m)| m.map(|m| (k, m)))
            .collect::<Result<_>>()?;
        Ok(Sequence {
            frames,
            flows: map,
            occlusion,
            init_depth,
            motion_masks: None,
            gt_depth: None,
        })
    }

    pub fn with_motion_masks(mut self, masks: Vec<MotionMask>) -> Result<Self> {
        if masks.len() != self.frames.len() {
            return Err(Error::Structural(format!(
                "{} motion masks for {} frames",
                masks.len(),
                self.frames.len()
            )));
        }
        self.motion_masks = Some(masks);
        Ok(self)
    }

    pub fn with_gt_depth(mut self, gt: Vec<Raster<f64>>) -> Result<Self> {
        if gt.len() != self.frames.len() {
            return Err(Error::Structural("ground-truth depth count mismatch".into()));
        }
        self.gt_depth = Some(gt);
        Ok(self)
    }

    pub fn num_frames(&self) -> usize {
        self.frames.len()
    }

    pub fn width(&self) -> usize {
        self.frames[0].width
    }

    pub fn height(&self) -> usize {
        self.frames[0].height
    }

    /// Schedule pairs that have both a flow and an occlusion mask.
    pub fn pairs(&self) -> Vec<(usize, usize)> {
        pair_schedule(self.num_frames())
            .into_iter()
            .filter(|k| self.occlusion.contains_key(k))
            .collect()
    }

    pub fn flow(&self, i: usize, j: usize) -> Result<&FlowField> {
        self.flows
            .get(&(i, j))
            .ok_or_else(|| Error::Structural(format!("no flow for pair {i}->{j}")))
    }

    pub fn mask(&self, i: usize, j: usize) -> Result<&OcclusionMask> {
        self.occlusion
            .get(&(i, j))
            .ok_or_else(|| Error::Structural(format!("no occlusion mask for pair {i}->{j}")))
    }

    /// Multiplies every camera translation by `s`.
    pub fn scale_translations(&mut self, s: f64) {
        for f in &mut self.frames {
            *f = f.with_scaled_translation(s);
        }
    }
}
