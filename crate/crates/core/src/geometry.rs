//! Pinhole camera math: unprojection, projection, reprojected depth and
//! viewing rays. Pixel centers sit at integer coordinates.

use nalgebra::{Matrix3, Vector3};

use crate::autodiff::{Tape, Var, Var3};
use crate::error::{Error, Result};

/// Camera-space depth below which a point counts as behind the camera.
pub const MIN_DEPTH: f64 = 1e-4;

/// Continuous pixel position.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Pixel {
    pub u: f64,
    pub v: f64,
}

impl Pixel {
    pub fn new(u: f64, v: f64) -> Self {
        Pixel { u, v }
    }

    pub fn homogeneous(self) -> Vector3<f64> {
        Vector3::new(self.u, self.v, 1.0)
    }

    pub fn distance(self, other: Pixel) -> f64 {
        ((self.u - other.u).powi(2) + (self.v - other.v).powi(2)).sqrt()
    }
}

/// Intrinsics, world-from-camera pose, and raster size of one frame.
#[derive(Debug, Clone, PartialEq)]
pub struct CameraFrame {
    pub k: Matrix3<f64>,
    /// World-from-camera rotation.
    pub r: Matrix3<f64>,
    /// Camera center in world coordinates.
    pub t: Vector3<f64>,
    pub width: usize,
    pub height: usize,
    pub index: usize,
    k_inv: Matrix3<f64>,
    // K R^T, maps world offsets from the center to homogeneous pixels.
    kr_t: Matrix3<f64>,
    // R K^-1, maps homogeneous pixels to world ray directions (unnormalized).
    r_k_inv: Matrix3<f64>,
}

fn rows(m: &Matrix3<f64>) -> [[f64; 3]; 3] {
    [
        [m[(0, 0)], m[(0, 1)], m[(0, 2)]],
        [m[(1, 0)], m[(1, 1)], m[(1, 2)]],
        [m[(2, 0)], m[(2, 1)], m[(2, 2)]],
    ]
}

// Row-by-row product with the same zero/unit skipping as `Tape::mat3_mul`,
// so plain and taped evaluations agree bit for bit.
fn mat3_apply(m: &Matrix3<f64>, v: &Vector3<f64>) -> Vector3<f64> {
    let mut out = Vector3::zeros();
    for r in 0..3 {
        let mut acc: Option<f64> = None;
        for c in 0..3 {
            let coef = m[(r, c)];
            if coef == 0.0 {
                continue;
            }
            let term = if coef == 1.0 { v[c] } else { v[c] * coef };
            acc = Some(match acc {
                None => term,
                Some(a) => a + term,
            });
        }
        out[r] = acc.unwrap_or(0.0);
    }
    out
}

impl CameraFrame {
    pub fn new(
        k: Matrix3<f64>,
        r: Matrix3<f64>,
        t: Vector3<f64>,
        width: usize,
        height: usize,
        index: usize,
    ) -> Result<Self> {
        let orth = (r.transpose() * r - Matrix3::identity()).abs().max();
        if orth > 1e-9 || (r.determinant() - 1.0).abs() > 1e-9 {
            return Err(Error::Domain(format!(
                "frame {index}: rotation is not orthonormal with determinant +1"
            )));
        }
        if k[(1, 0)] != 0.0 || k[(2, 0)] != 0.0 || k[(2, 1)] != 0.0 {
            return Err(Error::Domain(format!("frame {index}: intrinsics not upper-triangular")));
        }
        if !(k[(0, 0)] > 0.0 && k[(1, 1)] > 0.0) || k[(2, 2)] != 1.0 {
            return Err(Error::Domain(format!("frame {index}: invalid focal entries")));
        }
        if width == 0 || height == 0 {
            return Err(Error::Domain(format!("frame {index}: empty raster")));
        }
        let k_inv = k
            .try_inverse()
            .ok_or_else(|| Error::Domain(format!("frame {index}: singular intrinsics")))?;
        Ok(CameraFrame {
            k,
            r,
            t,
            width,
            height,
            index,
            k_inv,
            kr_t: k * r.transpose(),
            r_k_inv: r * k_inv,
        })
    }

    /// Pinhole intrinsics with zero skew.
    pub fn intrinsics(fx: f64, fy: f64, cx: f64, cy: f64) -> Matrix3<f64> {
        Matrix3::new(fx, 0.0, cx, 0.0, fy, cy, 0.0, 0.0, 1.0)
    }

    pub fn k_inv(&self) -> &Matrix3<f64> {
        &self.k_inv
    }

    pub fn center(&self) -> Vector3<f64> {
        self.t
    }

    pub fn contains(&self, p: Pixel) -> bool {
        p.u >= 0.0 && p.v >= 0.0 && p.u <= (self.width - 1) as f64 && p.v <= (self.height - 1) as f64
    }

    /// Same frame with its translation scaled (scale alignment).
    pub fn with_scaled_translation(&self, s: f64) -> Self {
        let mut out = self.clone();
        out.t *= s;
        out
    }

    /// Unnormalized world direction `R K^-1 x~` through a pixel.
    pub fn ray(&self, x: Pixel) -> Vector3<f64> {
        mat3_apply(&self.r_k_inv, &x.homogeneous())
    }

    /// `R (d K^-1 x~) + t`.
    pub fn unproject(&self, x: Pixel, depth: f64) -> Result<Vector3<f64>> {
        if !(depth > 0.0) {
            return Err(Error::Domain(format!("unproject with depth {depth}")));
        }
        let dir = self.ray(x);
        Ok(dir * depth + self.t)
    }

    /// Homogeneous camera coordinates `K R^T (X - t)`.
    pub fn to_camera(&self, x: &Vector3<f64>) -> Vector3<f64> {
        mat3_apply(&self.kr_t, &(x - self.t))
    }

    /// `pi(K R^T (X - t))`.
    pub fn project(&self, x: &Vector3<f64>) -> Result<Pixel> {
        let h = self.to_camera(x);
        if !(h.z > MIN_DEPTH) {
            return Err(Error::BehindCamera(h.z));
        }
        Ok(Pixel::new(h.x / h.z, h.y / h.z))
    }

    /// Camera-space depth of `X + S`.
    pub fn reprojected_depth(&self, x: &Vector3<f64>, s: &Vector3<f64>) -> Result<f64> {
        let z = self.to_camera(&(x + s)).z;
        if !(z > MIN_DEPTH) {
            return Err(Error::BehindCamera(z));
        }
        Ok(z)
    }

    /// Unit world-space viewing ray through `x`.
    pub fn ray_direction(&self, x: Pixel) -> Vector3<f64> {
        self.ray(x).normalize()
    }

    /// Taped unprojection with a differentiable depth.
    pub fn unproject_var(&self, tape: &mut Tape, x: Pixel, depth: Var) -> Var3 {
        let dir = self.ray(x);
        let t = self.t;
        let mut out = [depth; 3];
        for a in 0..3 {
            let s = tape.scale(depth, dir[a]);
            out[a] = tape.offset(s, t[a]);
        }
        out
    }

    fn to_camera_var(&self, tape: &mut Tape, x: Var3) -> Var3 {
        let t = self.t;
        let shifted = tape.offset3(x, [-t.x, -t.y, -t.z]);
        tape.mat3_mul(&rows(&self.kr_t), shifted)
    }

    /// Taped projection; `None` when the point is behind the camera.
    pub fn project_var(&self, tape: &mut Tape, x: Var3) -> Option<[Var; 2]> {
        let h = self.to_camera_var(tape, x);
        if !(tape.value(h[2]) > MIN_DEPTH) {
            return None;
        }
        Some([tape.div(h[0], h[2]), tape.div(h[1], h[2])])
    }

    /// Taped projection together with the camera-space depth.
    pub fn project_with_depth_var(&self, tape: &mut Tape, x: Var3) -> Option<([Var; 2], Var)> {
        let h = self.to_camera_var(tape, x);
        if !(tape.value(h[2]) > MIN_DEPTH) {
            return None;
        }
        Some(([tape.div(h[0], h[2]), tape.div(h[1], h[2])], h[2]))
    }

    /// Taped camera-space depth of a world point; `None` behind the camera.
    pub fn depth_var(&self, tape: &mut Tape, x: Var3) -> Option<Var> {
        let h = self.to_camera_var(tape, x);
        (tape.value(h[2]) > MIN_DEPTH).then_some(h[2])
    }
}
