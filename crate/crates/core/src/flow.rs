//! Optical flow pairs, forward-backward occlusion masks, static-region
//! masks and scale alignment of camera translations.

use crate::error::{Error, Result};
use crate::geometry::Pixel;
use crate::raster::Raster;

/// Frame offsets of the flow pair schedule: consecutive frames plus a few
/// wide baselines, each in both directions.
pub const PAIR_OFFSETS: [usize; 5] = [1, 2, 4, 6, 8];

/// Forward-backward residual (pixels) above which a correspondence is
/// treated as occluded or unreliable.
pub const CONSISTENCY_THRESHOLD: f64 = 1.0;

/// Ordered frame pairs `(source, target)` for a sequence of `num_frames`.
/// Pairs whose indices exceed the sequence are dropped.
pub fn pair_schedule(num_frames: usize) -> Vec<(usize, usize)> {
    let mut pairs = Vec::new();
    for k in PAIR_OFFSETS {
        for i in 0..num_frames.saturating_sub(k) {
            pairs.push((i, i + k));
            pairs.push((i + k, i));
        }
    }
    pairs
}

/// Per-pixel optical flow from frame `source` to frame `target`.
#[derive(Debug, Clone, PartialEq)]
pub struct FlowField {
    pub source: usize,
    pub target: usize,
    pub vectors: Raster<[f64; 2]>,
}

impl FlowField {
    pub fn new(source: usize, target: usize, vectors: Raster<[f64; 2]>) -> Result<Self> {
        if let Some(k) = vectors.data().iter().position(|v| !(v[0].is_finite() && v[1].is_finite())) {
            return Err(Error::Numeric(format!(
                "flow {source}->{target} has a non-finite vector at texel {k}"
            )));
        }
        Ok(FlowField {
            source,
            target,
            vectors,
        })
    }

    pub fn width(&self) -> usize {
        self.vectors.width()
    }

    pub fn height(&self) -> usize {
        self.vectors.height()
    }

    /// `x + v(x)` for an integer pixel.
    pub fn corresponding(&self, x: usize, y: usize) -> Pixel {
        let v = self.vectors.get(x, y);
        Pixel::new(x as f64 + v[0], y as f64 + v[1])
    }

    /// `p_{i->j}(x) = x + v_{i->j}(x)`; flow is read at the rounded pixel.
    pub fn corresponding_pixel(&self, x: Pixel) -> Result<Pixel> {
        let (u, v) = (x.u.round(), x.v.round());
        if !(u >= 0.0 && v >= 0.0 && u < self.width() as f64 && v < self.height() as f64) {
            return Err(Error::Domain(format!("pixel ({}, {}) outside the flow field", x.u, x.v)));
        }
        Ok(self.corresponding(u as usize, v as usize))
    }
}

/// Binary per-pixel mask.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct BinaryMask {
    width: usize,
    height: usize,
    data: Vec<bool>,
}

impl BinaryMask {
    pub fn filled(width: usize, height: usize, value: bool) -> Self {
        BinaryMask {
            width,
            height,
            data: vec![value; width * height],
        }
    }

    pub fn from_vec(width: usize, height: usize, data: Vec<bool>) -> Result<Self> {
        if data.len() != width * height {
            return Err(Error::Structural(format!(
                "mask has {} entries, expected {}x{}",
                data.len(),
                width,
                height
            )));
        }
        Ok(BinaryMask { width, height, data })
    }

    pub fn from_fn(width: usize, height: usize, mut f: impl FnMut(usize, usize) -> bool) -> Self {
        let mut data = Vec::with_capacity(width * height);
        for y in 0..height {
            for x in 0..width {
                data.push(f(x, y));
            }
        }
        BinaryMask { width, height, data }
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn get(&self, x: usize, y: usize) -> bool {
        self.data[y * self.width + x]
    }

    pub fn set(&mut self, x: usize, y: usize, v: bool) {
        self.data[y * self.width + x] = v;
    }

    pub fn data(&self) -> &[bool] {
        &self.data
    }

    pub fn count(&self) -> usize {
        self.data.iter().filter(|&&b| b).count()
    }

    pub fn inverted(&self) -> Self {
        BinaryMask {
            width: self.width,
            height: self.height,
            data: self.data.iter().map(|b| !b).collect(),
        }
    }
}

/// `true` marks pixels of frame `source` whose correspondence into `target`
/// is occluded or unreliable.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct OcclusionMask {
    pub source: usize,
    pub target: usize,
    pub mask: BinaryMask,
}

impl OcclusionMask {
    pub fn is_occluded(&self, x: usize, y: usize) -> bool {
        self.mask.get(x, y)
    }
}

/// `true` marks static pixels of frame `frame`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct MotionMask {
    pub frame: usize,
    pub mask: BinaryMask,
}

impl MotionMask {
    pub fn is_static(&self, x: usize, y: usize) -> bool {
        self.mask.get(x, y)
    }
}

/// Forward-backward consistency check with the default 1 px threshold.
pub fn occlusion_mask(fwd: &FlowField, bwd: &FlowField) -> Result<OcclusionMask> {
    occlusion_mask_with_threshold(fwd, bwd, CONSISTENCY_THRESHOLD)
}

/// Marks `x` when `|v_ij(x) + v_ji(x + v_ij(x))|_2 > threshold`, sampling
/// the backward flow bilinearly. Targets outside the raster are marked.
pub fn occlusion_mask_with_threshold(
    fwd: &FlowField,
    bwd: &FlowField,
    threshold: f64,
) -> Result<OcclusionMask> {
    if !fwd.vectors.same_shape(&bwd.vectors) {
        return Err(Error::Structural(format!(
            "flow {}->{} is {}x{} but {}->{} is {}x{}",
            fwd.source,
            fwd.target,
            fwd.width(),
            fwd.height(),
            bwd.source,
            bwd.target,
            bwd.width(),
            bwd.height()
        )));
    }
    if fwd.source != bwd.target || fwd.target != bwd.source {
        return Err(Error::Structural(format!(
            "flows {}->{} and {}->{} are not a forward/backward pair",
            fwd.source, fwd.target, bwd.source, bwd.target
        )));
    }
    let mask = BinaryMask::from_fn(fwd.width(), fwd.height(), |x, y| {
        let f = fwd.vectors.get(x, y);
        let p = fwd.corresponding(x, y);
        match bwd.vectors.sample(p) {
            Ok(b) => ((f[0] + b[0]).powi(2) + (f[1] + b[1]).powi(2)).sqrt() > threshold,
            Err(_) => true,
        }
    });
    Ok(OcclusionMask {
        source: fwd.source,
        target: fwd.target,
        mask,
    })
}

/// Median with the two central values averaged for even counts.
/// Returns `None` for an empty sample.
pub fn median(values: &mut [f64]) -> Option<f64> {
    if values.is_empty() {
        return None;
    }
    values.sort_by(f64::total_cmp);
    let n = values.len();
    Some(if n % 2 == 1 {
        values[n / 2]
    } else {
        0.5 * (values[n / 2 - 1] + values[n / 2])
    })
}

/// `s = mean_i(median_x(D_init_i / D_sfm_i))` over valid sparse samples
/// (`D_sfm > 0`). Frames without valid samples are skipped.
pub fn scale_alignment(init_depths: &[Raster<f64>], sfm_depths: &[Raster<f64>]) -> Result<f64> {
    if init_depths.len() != sfm_depths.len() {
        return Err(Error::Structural(format!(
            "{} initial depth maps but {} sparse maps",
            init_depths.len(),
            sfm_depths.len()
        )));
    }
    let mut medians = Vec::new();
    for (i, (init, sfm)) in init_depths.iter().zip(sfm_depths).enumerate() {
        if !init.same_shape(sfm) {
            return Err(Error::Structural(format!("frame {i}: depth map sizes differ")));
        }
        let mut ratios: Vec<f64> = init
            .data()
            .iter()
            .zip(sfm.data())
            .filter(|(_, &s)| s > 0.0)
            .map(|(&d, &s)| d / s)
            .collect();
        if let Some(m) = median(&mut ratios) {
            medians.push(m);
        }
    }
    if medians.is_empty() {
        return Err(Error::Domain("no frame has a valid sparse depth sample".into()));
    }
    Ok(medians.iter().sum::<f64>() / medians.len() as f64)
}
