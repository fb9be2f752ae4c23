use std::f64::consts::PI;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Positional encoding of `(x, y, z, t)` with `bands` linear frequencies.
///
/// Spatial coordinates are mapped from `[box_min, box_max]` to `[-1, 1]`
/// (points outside the box are not clamped) and the frame index is mapped
/// to `[0, 1]` by dividing by `num_frames - 1`. Each normalized scalar `u`
/// expands to `[sin(pi u), cos(pi u), ..., sin(N pi u), cos(N pi u)]`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EncodingConfig {
    pub bands: usize,
    pub box_min: [f64; 3],
    pub box_max: [f64; 3],
    pub num_frames: usize,
}

impl EncodingConfig {
    pub fn new(bands: usize, box_min: [f64; 3], box_max: [f64; 3], num_frames: usize) -> Result<Self> {
        if bands == 0 {
            return Err(Error::Config("encoding needs at least one band".into()));
        }
        if (0..3).any(|a| !(box_max[a] - box_min[a] > 0.0)) {
            return Err(Error::Config(format!(
                "normalization box {box_min:?}..{box_max:?} has an empty axis"
            )));
        }
        if num_frames == 0 {
            return Err(Error::Config("encoding needs at least one frame".into()));
        }
        Ok(EncodingConfig {
            bands,
            box_min,
            box_max,
            num_frames,
        })
    }

    /// Axis-aligned bounds of `points`, padded by 10% of the extent per side.
    pub fn fit(bands: usize, points: impl IntoIterator<Item = [f64; 3]>, num_frames: usize) -> Result<Self> {
        let mut lo = [f64::INFINITY; 3];
        let mut hi = [f64::NEG_INFINITY; 3];
        for p in points {
            for a in 0..3 {
                lo[a] = lo[a].min(p[a]);
                hi[a] = hi[a].max(p[a]);
            }
        }
        if !lo.iter().chain(&hi).all(|v| v.is_finite()) {
            return Err(Error::Config("cannot fit a normalization box to no points".into()));
        }
        for a in 0..3 {
            let pad = 0.1 * (hi[a] - lo[a]).max(1e-3);
            lo[a] -= pad;
            hi[a] += pad;
        }
        Self::new(bands, lo, hi, num_frames)
    }

    /// Encoded feature length, `2 N * 4`.
    pub fn dim(&self) -> usize {
        8 * self.bands
    }

    /// d(normalized coordinate) / d(world coordinate) per axis.
    pub fn axis_scale(&self) -> [f64; 3] {
        [0, 1, 2].map(|a| 2.0 / (self.box_max[a] - self.box_min[a]))
    }

    /// Normalized `(x, y, z, t)`.
    pub fn normalize(&self, x: [f64; 3], time: usize) -> [f64; 4] {
        let s = self.axis_scale();
        let t = if self.num_frames > 1 {
            time as f64 / (self.num_frames - 1) as f64
        } else {
            0.0
        };
        [
            (x[0] - self.box_min[0]) * s[0] - 1.0,
            (x[1] - self.box_min[1]) * s[1] - 1.0,
            (x[2] - self.box_min[2]) * s[2] - 1.0,
            t,
        ]
    }

    /// Writes the encoding of already-normalized coordinates into `out`.
    pub fn encode_normalized(&self, u: [f64; 4], out: &mut [f64]) {
        let n = self.bands;
        for (c, &uc) in u.iter().enumerate() {
            // harmonics by angle addition; drift stays near k * eps
            let (s1, c1) = (PI * uc).sin_cos();
            let (mut s, mut co) = (s1, c1);
            for k in 0..n {
                out[c * 2 * n + 2 * k] = s;
                out[c * 2 * n + 2 * k + 1] = co;
                (s, co) = (s * c1 + co * s1, co * c1 - s * s1);
            }
        }
    }

    pub fn encode(&self, x: [f64; 3], time: usize) -> Vec<f64> {
        let mut out = vec![0.0; self.dim()];
        self.encode_normalized(self.normalize(x, time), &mut out);
        out
    }

    /// Jacobian of [`EncodingConfig::encode`] w.r.t. the spatial input,
    /// one row per feature.
    pub fn encode_jacobian(&self, x: [f64; 3], time: usize) -> Vec<[f64; 3]> {
        let u = self.normalize(x, time);
        let s = self.axis_scale();
        let n = self.bands;
        let mut jac = vec![[0.0; 3]; self.dim()];
        for c in 0..3 {
            for k in 1..=n {
                let w = k as f64 * PI;
                let (sn, cs) = (w * u[c]).sin_cos();
                jac[c * 2 * n + 2 * (k - 1)][c] = w * cs * s[c];
                jac[c * 2 * n + 2 * (k - 1) + 1][c] = -w * sn * s[c];
            }
        }
        jac
    }
}
