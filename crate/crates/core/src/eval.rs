//! Depth metrics with region splits, projected scene flow and x-t slices.

use serde::{Deserialize, Serialize};

use crate::autodiff::ParamStore;
use crate::depth::DepthModel;
use crate::error::{Error, Result};
use crate::flow::{BinaryMask, MotionMask};
use crate::geometry::{CameraFrame, Pixel};
use crate::raster::Raster;
use crate::sceneflow::SceneFlowNet;

pub const DEFAULT_CUTOFF: f64 = 80.0;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum Region {
    #[default]
    All,
    Static,
    Dynamic,
}

impl std::str::FromStr for Region {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "all" => Ok(Region::All),
            "static" => Ok(Region::Static),
            "dynamic" => Ok(Region::Dynamic),
            _ => Err(Error::Config(format!("unknown region {s:?}"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EvalConfig {
    /// Ground-truth depths above this are ignored.
    pub cutoff: f64,
    pub region: Region,
    /// Single scale applied to every predicted depth map.
    pub scale: f64,
}

impl Default for EvalConfig {
    fn default() -> Self {
        EvalConfig {
            cutoff: DEFAULT_CUTOFF,
            region: Region::All,
            scale: 1.0,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DepthMetrics {
    pub l1_rel: f64,
    pub log_rmse: f64,
    pub rmse: f64,
    pub count: usize,
}

/// Metrics over every frame at once; no per-frame rescaling.
pub fn metrics(
    pred: &[Raster<f64>],
    gt: &[Raster<f64>],
    masks: Option<&[MotionMask]>,
    cfg: &EvalConfig,
) -> Result<DepthMetrics> {
    if !(cfg.cutoff > 0.0) || !(cfg.scale > 0.0) {
        return Err(Error::Config("cutoff and scale must be positive".into()));
    }
    if pred.len() != gt.len() {
        return Err(Error::Structural(format!("{} predictions for {} ground-truth maps", pred.len(), gt.len())));
    }
    if cfg.region != Region::All {
        match masks {
            Some(m) if m.len() == gt.len() => {}
            Some(_) => return Err(Error::Structural("mask count does not match frame count".into())),
            None => return Err(Error::Config("region split needs motion masks".into())),
        }
    }
    let (mut abs_rel, mut sq_log, mut sq) = (0.0, 0.0, 0.0);
    let mut count = 0usize;
    for (f, (p, g)) in pred.iter().zip(gt).enumerate() {
        if !p.same_shape(g) {
            return Err(Error::Structural(format!("frame {f}: prediction and ground truth differ in size")));
        }
        let mask = masks.map(|m| &m[f].mask);
        for (k, (&pv, &gv)) in p.data().iter().zip(g.data()).enumerate() {
            if !(gv > 0.0) || gv > cfg.cutoff {
                continue;
            }
            let keep = match (cfg.region, mask) {
                (Region::All, _) => true,
                (Region::Static, Some(m)) => m.data()[k],
                (Region::Dynamic, Some(m)) => !m.data()[k],
                _ => unreachable!("checked above"),
            };
            if !keep {
                continue;
            }
            let pv = pv * cfg.scale;
            abs_rel += (pv - gv).abs() / gv;
            sq_log += (pv.ln() - gv.ln()).powi(2);
            sq += (pv - gv).powi(2);
            count += 1;
        }
    }
    if count == 0 {
        return Err(Error::Domain("no valid pixels to evaluate".into()));
    }
    let n = count as f64;
    Ok(DepthMetrics {
        l1_rel: abs_rel / n,
        log_rmse: (sq_log / n).sqrt(),
        rmse: (sq / n).sqrt(),
        count,
    })
}

/// Scene flow of frame `i` projected into frame `i+1`:
/// `M_{i+1}(X + S) - M_{i+1}(X)`. The mask marks pixels where either
/// projection failed.
pub fn project_scene_flow(
    net: &SceneFlowNet,
    store: &ParamStore,
    depths: &DepthModel,
    frames: &[CameraFrame],
    i: usize,
) -> Result<(Raster<[f64; 2]>, BinaryMask)> {
    if i + 1 >= frames.len() {
        return Err(Error::Domain(format!("frame {i} has no successor")));
    }
    let f = &frames[i];
    let next = &frames[i + 1];
    let d = depths.depth_map(store, i);
    let mut pts = Vec::with_capacity(f.width * f.height);
    for y in 0..f.height {
        for x in 0..f.width {
            let p = f.unproject(Pixel::new(x as f64, y as f64), d.get(x, y))?;
            pts.push([p.x, p.y, p.z]);
        }
    }
    let flow = net.snapshot(store).eval(&pts, i);
    let mut bad = BinaryMask::filled(f.width, f.height, false);
    let mut out = Raster::filled(f.width, f.height, [0.0, 0.0]);
    for (k, (p, s)) in pts.iter().zip(&flow).enumerate() {
        let (x, y) = (k % f.width, k / f.width);
        let a = nalgebra::Vector3::from(*p);
        let b = a + nalgebra::Vector3::from(*s);
        match (next.project(&a), next.project(&b)) {
            (Ok(pa), Ok(pb)) => out.set(x, y, [pb.u - pa.u, pb.v - pa.v]),
            _ => bad.set(x, y, true),
        }
    }
    Ok((out, bad))
}

/// Stacks row `row` of every raster: slice row `k` is that row of frame `k`.
pub fn xt_slice(rasters: &[Raster<f64>], row: usize) -> Result<Raster<f64>> {
    let first = rasters.first().ok_or_else(|| Error::Domain("no frames to slice".into()))?;
    if row >= first.height() {
        return Err(Error::Domain(format!("row {row} outside a {}-row raster", first.height())));
    }
    if rasters.iter().any(|r| !r.same_shape(first)) {
        return Err(Error::Structural("frames differ in size".into()));
    }
    Ok(Raster::from_fn(first.width(), rasters.len(), |x, k| rasters[k].get(x, row)))
}

/// Median of `|v|` over pixels selected by `keep`.
pub fn median_magnitude(flow: &Raster<[f64; 2]>, keep: impl Fn(usize, usize) -> bool) -> Option<f64> {
    let mut mags = Vec::new();
    for y in 0..flow.height() {
        for x in 0..flow.width() {
            if keep(x, y) {
                let v = flow.get(x, y);
                mags.push(v[0].hypot(v[1]));
            }
        }
    }
    crate::flow::median(&mut mags)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn perfect_prediction_scores_zero() {
        let g = vec![Raster::from_fn(4, 3, |x, y| 1.0 + x as f64 + y as f64)];
        let m = metrics(&g, &g, None, &EvalConfig::default()).unwrap();
        assert_eq!((m.l1_rel, m.log_rmse, m.rmse, m.count), (0.0, 0.0, 0.0, 12));
    }

    #[test]
    fn double_depth_closed_form() {
        let m = metrics(
            &[Raster::filled(1, 1, 2.0)],
            &[Raster::filled(1, 1, 1.0)],
            None,
            &EvalConfig::default(),
        )
        .unwrap();
        assert_eq!(m.l1_rel, 1.0);
        assert_eq!(m.rmse, 1.0);
        assert!((m.log_rmse - 2f64.ln()).abs() < 1e-15);
    }

    #[test]
    fn cutoff_and_empty_region() {
        let gt = [Raster::filled(2, 1, 100.0)];
        assert!(matches!(
            metrics(&gt, &gt, None, &EvalConfig::default()),
            Err(Error::Domain(_))
        ));
        let cfg = EvalConfig {
            region: Region::Static,
            ..Default::default()
        };
        assert!(matches!(metrics(&gt, &gt, None, &cfg), Err(Error::Config(_))));
    }

    #[test]
    fn slice_rows_follow_frames() {
        let frames: Vec<_> = (0..3).map(|k| Raster::from_fn(4, 2, |x, y| (k * 100 + y * 10 + x) as f64)).collect();
        let s = xt_slice(&frames, 1).unwrap();
        assert_eq!((s.width(), s.height()), (4, 3));
        assert_eq!(s.get(2, 1), 112.0);
        assert!(xt_slice(&frames, 2).is_err());
        let one = xt_slice(&frames[..1], 0).unwrap();
        assert_eq!(one.data(), &frames[0].data()[..4]);
    }
}
