//! Per-frame optimizable log-depth grids.
//!
//! Each frame owns one parameter block of log-depth values. Depth is
//! `exp(bilinear(log-depth))`, which stays positive for any finite
//! parameters.

use crate::autodiff::{ParamStore, Tape, Var};
use crate::error::{Error, Result};
use crate::geometry::Pixel;
use crate::raster::{bilinear_stencil, Raster};

/// Handle to the log-depth block of one frame.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct DepthField {
    pub frame: usize,
    pub width: usize,
    pub height: usize,
    pub block: usize,
}

/// Depth grids for a whole sequence.
#[derive(Debug, Clone, PartialEq)]
pub struct DepthModel {
    fields: Vec<DepthField>,
}

pub fn block_name(frame: usize) -> String {
    format!("depth.{frame:04}")
}

impl DepthModel {
    /// Registers one log-depth block per map, named `depth.NNNN`.
    pub fn init_from_maps(store: &mut ParamStore, maps: &[Raster<f64>]) -> Result<Self> {
        for (frame, map) in maps.iter().enumerate() {
            if let Some(k) = map.data().iter().position(|&d| !(d > 0.0) || !d.is_finite()) {
                return Err(Error::Domain(format!(
                    "frame {frame}: depth {} at pixel ({}, {}) is not positive",
                    map.data()[k],
                    k % map.width(),
                    k / map.width()
                )));
            }
        }
        let fields = maps
            .iter()
            .enumerate()
            .map(|(frame, map)| DepthField {
                frame,
                width: map.width(),
                height: map.height(),
                block: store.add_block(block_name(frame), map.data().iter().map(|d| d.ln()).collect()),
            })
            .collect();
        Ok(DepthModel { fields })
    }

    /// Re-attaches to blocks already present in `store`.
    pub fn from_store(store: &ParamStore, num_frames: usize, width: usize, height: usize) -> Result<Self> {
        let fields = (0..num_frames)
            .map(|frame| {
                let block = store
                    .find(&block_name(frame))
                    .ok_or_else(|| Error::Structural(format!("missing depth block for frame {frame}")))?;
                if store.block(block).len() != width * height {
                    return Err(Error::Structural(format!("depth block {frame} has wrong size")));
                }
                Ok(DepthField {
                    frame,
                    width,
                    height,
                    block,
                })
            })
            .collect::<Result<_>>()?;
        Ok(DepthModel { fields })
    }

    pub fn num_frames(&self) -> usize {
        self.fields.len()
    }

    pub fn field(&self, frame: usize) -> &DepthField {
        &self.fields[frame]
    }

    pub fn blocks(&self) -> impl Iterator<Item = usize> + '_ {
        self.fields.iter().map(|f| f.block)
    }

    pub fn is_depth_block(&self, block: usize) -> bool {
        self.fields.iter().any(|f| f.block == block)
    }

    /// `exp(bilinear log-depth)` at `p`.
    pub fn depth_at(&self, store: &ParamStore, frame: usize, p: Pixel) -> Result<f64> {
        let f = &self.fields[frame];
        let st = bilinear_stencil(f.width, f.height, p).ok_or(Error::OutOfBounds(p.u, p.v))?;
        let logs = store.block(f.block);
        let l = st.iter().fold(0.0, |acc, &(i, w)| acc + logs[i] * w);
        Ok(l.exp())
    }

    /// Depth at an integer pixel.
    pub fn depth_at_pixel(&self, store: &ParamStore, frame: usize, x: usize, y: usize) -> f64 {
        let f = &self.fields[frame];
        store.block(f.block)[y * f.width + x].exp()
    }

    /// Current depth map of a frame.
    pub fn depth_map(&self, store: &ParamStore, frame: usize) -> Raster<f64> {
        let f = &self.fields[frame];
        Raster::from_vec(f.width, f.height, store.block(f.block).iter().map(|l| l.exp()).collect())
            .expect("block size matches field")
    }

    /// Taped depth at `p`. Leaves are parameters when `trainable`, else
    /// constants. Returns `None` outside the raster.
    pub fn depth_var(
        &self,
        tape: &mut Tape,
        store: &ParamStore,
        frame: usize,
        p: Pixel,
        trainable: bool,
    ) -> Option<Var> {
        let f = &self.fields[frame];
        let st = bilinear_stencil(f.width, f.height, p)?;
        let logs = store.block(f.block);
        let mut acc: Option<Var> = None;
        for &(i, w) in &st {
            if w == 0.0 {
                continue;
            }
            let leaf = if trainable {
                tape.param(f.block, i, logs[i])
            } else {
                tape.constant(logs[i])
            };
            let term = if w == 1.0 { leaf } else { tape.scale(leaf, w) };
            acc = Some(match acc {
                None => term,
                Some(a) => tape.add(a, term),
            });
        }
        let l = acc.unwrap_or_else(|| tape.constant(0.0));
        Some(tape.exp(l))
    }
}
