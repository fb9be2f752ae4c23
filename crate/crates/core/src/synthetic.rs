//! Moving-cube benchmark: a cube translating at constant velocity towards a
//! camera that sways along a sine path, in front of a fronto-parallel
//! background plane. Depth, flow and masks are computed analytically.

use std::collections::BTreeMap;

use nalgebra::{Matrix3, Vector3};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::flow::{pair_schedule, BinaryMask, FlowField, MotionMask};
use crate::geometry::{CameraFrame, Pixel, MIN_DEPTH};
use crate::parallel::Execution;
use crate::raster::Raster;
use crate::sequence::Sequence;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct CubeSceneSpec {
    /// Include the cube; without it the scene is static.
    pub cube: bool,
    pub cube_edge: f64,
    /// Cube center at frame 0.
    pub cube_start: [f64; 3],
    /// World units per frame.
    pub cube_velocity: [f64; 3],
    pub frames: usize,
    pub camera_amplitude: f64,
    /// Sine periods over the whole sequence.
    pub camera_periods: f64,
    /// Unit direction of the camera sway.
    pub camera_axis: [f64; 3],
    pub camera_center: [f64; 3],
    pub focal: f64,
    pub width: usize,
    pub height: usize,
    /// World z of the background plane.
    pub plane_depth: f64,
    /// Multiplicative amplitude of the initial-depth corruption.
    pub depth_noise: f64,
    pub seed: u64,
}

impl Default for CubeSceneSpec {
    fn default() -> Self {
        CubeSceneSpec {
            cube: true,
            cube_edge: 0.3,
            cube_start: [0.0, 0.0, 2.2],
            cube_velocity: [0.0, 0.0, -0.05],
            frames: 30,
            camera_amplitude: 0.1,
            camera_periods: 1.0,
            camera_axis: [1.0, 0.0, 0.0],
            camera_center: [0.0, 0.0, 0.0],
            focal: 96.0,
            width: 96,
            height: 96,
            plane_depth: 3.0,
            depth_noise: 0.2,
            seed: 0,
        }
    }
}

impl CubeSceneSpec {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::Config(m.to_string()));
        if self.frames < 4 {
            return bad("cube scene needs at least 4 frames");
        }
        if self.width == 0 || self.height == 0 {
            return bad("raster must be non-empty");
        }
        if !(self.focal > 0.0) || !(self.plane_depth > 0.0) {
            return bad("focal length and plane depth must be positive");
        }
        if self.cube && !(self.cube_edge > 0.0) {
            return bad("cube edge must be positive");
        }
        if !(0.0..1.0).contains(&self.depth_noise) {
            return bad("depth noise must lie in [0, 1)");
        }
        let all = self
            .cube_start
            .iter()
            .chain(&self.cube_velocity)
            .chain(&self.camera_axis)
            .chain(&self.camera_center)
            .chain([&self.camera_amplitude, &self.camera_periods]);
        if all.into_iter().any(|v| !v.is_finite()) {
            return bad("non-finite scene parameter");
        }
        Ok(())
    }

    fn camera_center_at(&self, frame: usize) -> Vector3<f64> {
        let phase = 2.0 * std::f64::consts::PI * self.camera_periods * frame as f64 / (self.frames - 1) as f64;
        let axis = Vector3::from(self.camera_axis);
        let axis = if axis.norm() > 0.0 { axis.normalize() } else { axis };
        Vector3::from(self.camera_center) + axis * (self.camera_amplitude * phase.sin())
    }

    fn cube_center_at(&self, frame: usize) -> Vector3<f64> {
        Vector3::from(self.cube_start) + Vector3::from(self.cube_velocity) * frame as f64
    }
}

/// Surface hit along a pixel ray.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Surface {
    Cube,
    Plane,
}

/// Generated scene with ground truth.
#[derive(Debug, Clone)]
pub struct CubeScene {
    pub spec: CubeSceneSpec,
    pub frames: Vec<CameraFrame>,
    pub gt_depth: Vec<Raster<f64>>,
    pub init_depth: Vec<Raster<f64>>,
    /// Flows for every schedule pair, both directions.
    pub flows: BTreeMap<(usize, usize), FlowField>,
    pub motion_masks: Vec<MotionMask>,
}

/// Entry distance of a ray into an axis-aligned box, if it is hit in front
/// of the origin.
pub fn ray_box(origin: &Vector3<f64>, dir: &Vector3<f64>, lo: &Vector3<f64>, hi: &Vector3<f64>) -> Option<f64> {
    let mut near = f64::NEG_INFINITY;
    let mut far = f64::INFINITY;
    for a in 0..3 {
        if dir[a].abs() < 1e-15 {
            if origin[a] < lo[a] || origin[a] > hi[a] {
                return None;
            }
            continue;
        }
        let t1 = (lo[a] - origin[a]) / dir[a];
        let t2 = (hi[a] - origin[a]) / dir[a];
        near = near.max(t1.min(t2));
        far = far.min(t1.max(t2));
    }
    (near <= far && near > 0.0).then_some(near)
}

impl CubeScene {
    pub fn generate(spec: &CubeSceneSpec) -> Result<Self> {
        Self::generate_with(spec, Execution::default())
    }

    pub fn generate_with(spec: &CubeSceneSpec, exec: Execution) -> Result<Self> {
        spec.validate()?;
        let (cx, cy) = ((spec.width as f64 - 1.0) / 2.0, (spec.height as f64 - 1.0) / 2.0);
        let k = CameraFrame::intrinsics(spec.focal, spec.focal, cx, cy);
        let frames = (0..spec.frames)
            .map(|i| {
                CameraFrame::new(k, Matrix3::identity(), spec.camera_center_at(i), spec.width, spec.height, i)
            })
            .collect::<Result<Vec<_>>>()?;
        let mut scene = CubeScene {
            spec: spec.clone(),
            frames,
            gt_depth: Vec::new(),
            init_depth: Vec::new(),
            flows: BTreeMap::new(),
            motion_masks: Vec::new(),
        };
        let traced = exec.map_range(spec.frames, |i| scene.trace_frame(i));
        let mut masks = Vec::new();
        for (i, (depth, surf)) in traced.into_iter().enumerate() {
            let cube_px = surf.iter().filter(|s| **s == Surface::Cube).count();
            if spec.cube && cube_px == 0 {
                return Err(Error::Domain(format!("cube leaves the view in frame {i}")));
            }
            if depth.data().iter().any(|d| !(*d > MIN_DEPTH)) {
                return Err(Error::Domain(format!("frame {i} sees past the background plane")));
            }
            let mask = BinaryMask::from_vec(spec.width, spec.height, surf.iter().map(|s| *s == Surface::Plane).collect())?;
            masks.push(MotionMask { frame: i, mask });
            scene.gt_depth.push(depth);
        }
        scene.motion_masks = masks;
        scene.init_depth = exec.map_range(spec.frames, |i| scene.corrupt(i));
        let pairs = pair_schedule(spec.frames);
        let flows = exec.map(&pairs, |&(i, j)| scene.gt_flow(i, j));
        for f in flows {
            let f = f?;
            scene.flows.insert((f.source, f.target), f);
        }
        Ok(scene)
    }

    /// Depth and surface along the ray through `p` of frame `i`.
    pub fn trace(&self, i: usize, p: Pixel) -> (f64, Surface) {
        let f = &self.frames[i];
        let dir = f.ray(p);
        let origin = f.center();
        let plane = (self.spec.plane_depth - origin.z) / dir.z;
        if self.spec.cube {
            let c = self.spec.cube_center_at(i);
            let h = Vector3::repeat(self.spec.cube_edge / 2.0);
            if let Some(t) = ray_box(&origin, &dir, &(c - h), &(c + h)) {
                if t < plane {
                    return (t, Surface::Cube);
                }
            }
        }
        (plane, Surface::Plane)
    }

    fn trace_frame(&self, i: usize) -> (Raster<f64>, Vec<Surface>) {
        let (w, h) = (self.spec.width, self.spec.height);
        let mut surf = Vec::with_capacity(w * h);
        let depth = Raster::from_fn(w, h, |x, y| {
            let (d, s) = self.trace(i, Pixel::new(x as f64, y as f64));
            surf.push(s);
            d
        });
        (depth, surf)
    }

    /// World point seen at integer pixel `(x, y)` of frame `i`.
    pub fn surface_point(&self, i: usize, x: usize, y: usize) -> Vector3<f64> {
        let f = &self.frames[i];
        f.ray(Pixel::new(x as f64, y as f64)) * self.gt_depth[i].get(x, y) + f.center()
    }

    pub fn is_cube(&self, i: usize, x: usize, y: usize) -> bool {
        !self.motion_masks[i].is_static(x, y)
    }

    /// Ground-truth 3D displacement of the surface at `(x, y)` from frame
    /// `i` to `j`.
    pub fn displacement(&self, i: usize, x: usize, y: usize, j: usize) -> Vector3<f64> {
        if self.is_cube(i, x, y) {
            Vector3::from(self.spec.cube_velocity) * (j as f64 - i as f64)
        } else {
            Vector3::zeros()
        }
    }

    /// Where the surface at `(x, y)` of frame `i` lands in frame `j`, or
    /// `None` when it is behind the camera.
    pub fn moved_projection(&self, i: usize, x: usize, y: usize, j: usize) -> Option<Pixel> {
        let p = self.surface_point(i, x, y) + self.displacement(i, x, y, j);
        self.frames[j].project(&p).ok()
    }

    /// Whether the surface at `(x, y)` of frame `i` is visible in frame `j`:
    /// inside the raster and not hidden behind another surface.
    pub fn visible_in(&self, i: usize, x: usize, y: usize, j: usize) -> bool {
        let Some(p) = self.moved_projection(i, x, y, j) else {
            return false;
        };
        if !self.frames[j].contains(p) {
            return false;
        }
        let moved = self.surface_point(i, x, y) + self.displacement(i, x, y, j);
        let z = self.frames[j].to_camera(&moved).z;
        let (seen, _) = self.trace(j, p);
        (seen - z).abs() <= 1e-9 * z.max(1.0)
    }

    fn gt_flow(&self, i: usize, j: usize) -> Result<FlowField> {
        let (w, h) = (self.spec.width, self.spec.height);
        let mut bad = None;
        // measured from the reprojection in frame i rather than the pixel
        // itself, so a frozen scene gives exactly zero flow
        let v = Raster::from_fn(w, h, |x, y| match self.moved_projection(i, x, y, j) {
            Some(p) => {
                let o = self.frames[i]
                    .project(&self.surface_point(i, x, y))
                    .unwrap_or(Pixel::new(x as f64, y as f64));
                [p.u - o.u, p.v - o.v]
            }
            None => {
                bad = Some((x, y));
                [0.0, 0.0]
            }
        });
        if let Some((x, y)) = bad {
            return Err(Error::Domain(format!("pixel ({x}, {y}) of frame {i} falls behind camera {j}")));
        }
        FlowField::new(i, j, v)
    }

    /// GT depth times `1 + a n(x, y)` with `n` a smooth seeded field in
    /// [-1, 1].
    fn corrupt(&self, i: usize) -> Raster<f64> {
        let a = self.spec.depth_noise;
        let mut rng = ChaCha8Rng::seed_from_u64(self.spec.seed.wrapping_mul(0x9E37_79B9_7F4A_7C15).wrapping_add(i as u64));
        let waves: Vec<[f64; 4]> = (0..4)
            .map(|_| {
                [
                    rng.gen_range(-1.0..1.0),
                    rng.gen_range(0.3..2.0) * if rng.gen_bool(0.5) { 1.0 } else { -1.0 },
                    rng.gen_range(0.3..2.0),
                    rng.gen_range(0.0..std::f64::consts::TAU),
                ]
            })
            .collect();
        let norm: f64 = waves.iter().map(|w| w[0].abs()).sum::<f64>().max(1e-12);
        let (w, h) = (self.spec.width as f64, self.spec.height as f64);
        let gt = &self.gt_depth[i];
        Raster::from_fn(gt.width(), gt.height(), |x, y| {
            let n: f64 = waves
                .iter()
                .map(|c| c[0] * (std::f64::consts::TAU * (c[1] * x as f64 / w + c[2] * y as f64 / h) + c[3]).sin())
                .sum::<f64>()
                / norm;
            gt.get(x, y) * (1.0 + a * n)
        })
    }

    /// Optimizer input built from the generated ground truth.
    pub fn to_sequence(&self, exec: Execution) -> Result<Sequence> {
        let seq = Sequence::new(
            self.frames.clone(),
            self.flows.values().cloned().collect(),
            self.init_depth.clone(),
            exec,
        )?;
        seq.with_motion_masks(self.motion_masks.clone())?
            .with_gt_depth(self.gt_depth.clone())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small() -> CubeSceneSpec {
        CubeSceneSpec {
            frames: 6,
            width: 32,
            height: 32,
            focal: 32.0,
            ..Default::default()
        }
    }

    #[test]
    fn frozen_scene_has_zero_flow_and_equal_depths() {
        let spec = CubeSceneSpec {
            camera_amplitude: 0.0,
            cube_velocity: [0.0; 3],
            ..small()
        };
        let s = CubeScene::generate(&spec).unwrap();
        for f in s.flows.values() {
            assert!(f.vectors.data().iter().all(|v| *v == [0.0, 0.0]));
        }
        for d in &s.gt_depth[1..] {
            assert_eq!(d, &s.gt_depth[0]);
        }
    }

    #[test]
    fn center_ray_hits_front_face() {
        let spec = CubeSceneSpec {
            width: 33,
            height: 33,
            focal: 33.0,
            camera_amplitude: 0.0,
            ..small()
        };
        let s = CubeScene::generate(&spec).unwrap();
        let z = spec.cube_start[2] - spec.cube_edge / 2.0;
        assert!((s.gt_depth[0].get(16, 16) - z).abs() < 1e-12);
        assert!(s.is_cube(0, 16, 16));
        assert!((s.gt_depth[0].get(0, 0) - spec.plane_depth).abs() < 1e-12);
    }

    #[test]
    fn ray_box_cases() {
        let lo = Vector3::new(-1.0, -1.0, 2.0);
        let hi = Vector3::new(1.0, 1.0, 4.0);
        let o = Vector3::zeros();
        assert_eq!(ray_box(&o, &Vector3::new(0.0, 0.0, 1.0), &lo, &hi), Some(2.0));
        assert_eq!(ray_box(&o, &Vector3::new(0.0, 0.0, -1.0), &lo, &hi), None);
        assert_eq!(ray_box(&o, &Vector3::new(1.0, 0.0, 0.1), &lo, &hi), None);
        let t = ray_box(&o, &Vector3::new(0.4, 0.0, 1.0), &lo, &hi).unwrap();
        assert!((t - 2.0).abs() < 1e-12);
    }

    #[test]
    fn flow_matches_moved_projection() {
        let s = CubeScene::generate(&small()).unwrap();
        for (&(i, j), f) in &s.flows {
            for y in 0..32 {
                for x in 0..32 {
                    let mut p = s.frames[i].unproject(Pixel::new(x as f64, y as f64), s.gt_depth[i].get(x, y)).unwrap();
                    if s.is_cube(i, x, y) {
                        p += Vector3::from(s.spec.cube_velocity) * (j as f64 - i as f64);
                    }
                    let q = s.frames[j].project(&p).unwrap();
                    let c = f.corresponding(x, y);
                    assert!(q.distance(c) < 1e-6);
                }
            }
        }
    }

    #[test]
    fn cube_leaving_view_names_frame() {
        let spec = CubeSceneSpec {
            cube_velocity: [0.6, 0.0, 0.0],
            ..small()
        };
        match CubeScene::generate(&spec) {
            Err(Error::Domain(m)) => assert!(m.contains("frame")),
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn generation_is_deterministic() {
        let a = CubeScene::generate_with(&small(), Execution::Sequential).unwrap();
        let b = CubeScene::generate_with(&small(), Execution::Parallel).unwrap();
        assert_eq!(a.init_depth, b.init_depth);
        assert_eq!(a.flows, b.flows);
    }

    #[test]
    fn noise_stays_within_amplitude() {
        let s = CubeScene::generate(&small()).unwrap();
        for (g, n) in s.gt_depth.iter().zip(&s.init_depth) {
            for (a, b) in g.data().iter().zip(n.data()) {
                assert!((b / a - 1.0).abs() <= 0.2 + 1e-12);
            }
        }
    }
}
