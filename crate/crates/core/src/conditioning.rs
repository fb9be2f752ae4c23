//! Conditioning of the three-ray system behind analytic scene flow.
//!
//! With constant velocity, the depths `d` along the rays `r0, r1, r2` that
//! follow a pixel through frames `i, i+1, i+2` solve `R d = t` with
//! `R = [r0 r1 r2]`. Nearly coplanar rays make `R` ill-conditioned.

use nalgebra::{Matrix3, Vector3};
use serde::Serialize;

use crate::flow::FlowField;
use crate::geometry::{CameraFrame, Pixel};
use crate::parallel::Execution;
use crate::sequence::Sequence;

pub const ILL_CONDITIONED: f64 = 1e4;

/// Ratio of extreme singular values and the smallest one; `+inf` when the
/// matrix is numerically rank deficient.
pub fn condition_number(m: &Matrix3<f64>) -> (f64, f64) {
    let sv = m.singular_values();
    let max = sv.max();
    let min = sv.min();
    if !(max > 0.0) || min <= max * 4.0 * f64::EPSILON {
        (f64::INFINITY, min)
    } else {
        (max / min, min)
    }
}

/// Condition number of the matrix whose columns are the normalized rays.
pub fn ray_condition(rays: [Vector3<f64>; 3]) -> (f64, f64) {
    let cols = rays.map(|r| r.normalize());
    condition_number(&Matrix3::from_columns(&cols))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct ConditioningEntry {
    pub frame: usize,
    pub x: usize,
    pub y: usize,
    pub condition: f64,
    pub min_singular: f64,
    /// `|p_{i->i+1}(x) - x|` in pixels.
    pub flow_magnitude: f64,
    pub ill: bool,
}

/// Entry for pixel `(x, y)` of frame `i`; `None` when the flow chain leaves
/// the raster.
pub fn conditioning_entry(
    frames: &[CameraFrame],
    f01: &FlowField,
    f12: &FlowField,
    x: usize,
    y: usize,
    threshold: f64,
) -> Option<ConditioningEntry> {
    let i = f01.source;
    let x1 = f01.corresponding(x, y);
    if !frames[i + 1].contains(x1) {
        return None;
    }
    let v = f12.vectors.sample(x1).ok()?;
    let x2 = Pixel::new(x1.u + v[0], x1.v + v[1]);
    if !frames[i + 2].contains(x2) {
        return None;
    }
    let rays = [
        frames[i].ray_direction(Pixel::new(x as f64, y as f64)),
        frames[i + 1].ray_direction(x1),
        frames[i + 2].ray_direction(x2),
    ];
    let (condition, min_singular) = ray_condition(rays);
    Some(ConditioningEntry {
        frame: i,
        x,
        y,
        condition,
        min_singular,
        flow_magnitude: x1.distance(Pixel::new(x as f64, y as f64)),
        ill: condition > threshold,
    })
}

#[derive(Debug, Clone, Serialize)]
pub struct ConditioningReport {
    pub threshold: f64,
    pub entries: Vec<ConditioningEntry>,
    /// Pixels whose chain left the raster.
    pub invalid: usize,
}

impl ConditioningReport {
    pub fn ill(&self) -> impl Iterator<Item = &ConditioningEntry> {
        self.entries.iter().filter(|e| e.ill)
    }

    pub fn max_condition(&self) -> f64 {
        self.entries.iter().map(|e| e.condition).fold(0.0, f64::max)
    }
}

/// Scans every frame that has a three-frame chain of flows.
pub fn conditioning_report(seq: &Sequence, threshold: f64, exec: Execution) -> ConditioningReport {
    let t = seq.num_frames();
    let frames: Vec<usize> = (0..t.saturating_sub(2))
        .filter(|&i| seq.flows.contains_key(&(i, i + 1)) && seq.flows.contains_key(&(i + 1, i + 2)))
        .collect();
    let (w, h) = (seq.width(), seq.height());
    let per_frame = exec.map(&frames, |&i| {
        let f01 = &seq.flows[&(i, i + 1)];
        let f12 = &seq.flows[&(i + 1, i + 2)];
        let mut out = Vec::new();
        let mut invalid = 0;
        for y in 0..h {
            for x in 0..w {
                match conditioning_entry(&seq.frames, f01, f12, x, y, threshold) {
                    Some(e) => out.push(e),
                    None => invalid += 1,
                }
            }
        }
        (out, invalid)
    });
    let mut report = ConditioningReport {
        threshold,
        entries: Vec::new(),
        invalid: 0,
    };
    for (e, n) in per_frame {
        report.entries.extend(e);
        report.invalid += n;
    }
    report
}
