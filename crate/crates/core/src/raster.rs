//! Dense row-major rasters with bilinear sampling.

use crate::error::{Error, Result};
use crate::geometry::Pixel;

/// Texel types that can be bilinearly blended.
pub trait Texel: Copy + Default + PartialEq + std::fmt::Debug {
    fn scale(self, w: f64) -> Self;
    fn plus(self, other: Self) -> Self;
    fn is_finite(self) -> bool;
}

impl Texel for f64 {
    fn scale(self, w: f64) -> Self {
        self * w
    }
    fn plus(self, other: Self) -> Self {
        self + other
    }
    fn is_finite(self) -> bool {
        f64::is_finite(self)
    }
}

impl Texel for [f64; 2] {
    fn scale(self, w: f64) -> Self {
        [self[0] * w, self[1] * w]
    }
    fn plus(self, other: Self) -> Self {
        [self[0] + other[0], self[1] + other[1]]
    }
    fn is_finite(self) -> bool {
        self[0].is_finite() && self[1].is_finite()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Raster<T> {
    width: usize,
    height: usize,
    data: Vec<T>,
}

/// Flat indices and weights of the four texels around a position, in the
/// order (x0,y0), (x1,y0), (x0,y1), (x1,y1).
pub type Stencil = [(usize, f64); 4];

/// Bilinear stencil for `p` on a `width x height` grid, or `None` when `p`
/// lies outside `[0, w-1] x [0, h-1]`.
pub fn bilinear_stencil(width: usize, height: usize, p: Pixel) -> Option<Stencil> {
    let (w1, h1) = ((width - 1) as f64, (height - 1) as f64);
    if !(p.u >= 0.0 && p.v >= 0.0 && p.u <= w1 && p.v <= h1) {
        return None;
    }
    let cell = |c: f64, n: usize| -> (usize, usize, f64) {
        if n == 1 {
            return (0, 0, 0.0);
        }
        let i0 = (c.floor() as usize).min(n - 2);
        (i0, i0 + 1, c - i0 as f64)
    };
    let (x0, x1, fx) = cell(p.u, width);
    let (y0, y1, fy) = cell(p.v, height);
    Some([
        (y0 * width + x0, (1.0 - fx) * (1.0 - fy)),
        (y0 * width + x1, fx * (1.0 - fy)),
        (y1 * width + x0, (1.0 - fx) * fy),
        (y1 * width + x1, fx * fy),
    ])
}

impl<T: Texel> Raster<T> {
    pub fn filled(width: usize, height: usize, value: T) -> Self {
        Raster {
            width,
            height,
            data: vec![value; width * height],
        }
    }

    pub fn from_vec(width: usize, height: usize, data: Vec<T>) -> Result<Self> {
        if data.len() != width * height {
            return Err(Error::Structural(format!(
                "raster data has {} texels, expected {}x{}",
                data.len(),
                width,
                height
            )));
        }
        Ok(Raster { width, height, data })
    }

    pub fn from_fn(width: usize, height: usize, mut f: impl FnMut(usize, usize) -> T) -> Self {
        let mut data = Vec::with_capacity(width * height);
        for y in 0..height {
            for x in 0..width {
                data.push(f(x, y));
            }
        }
        Raster { width, height, data }
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn data(&self) -> &[T] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [T] {
        &mut self.data
    }

    pub fn into_vec(self) -> Vec<T> {
        self.data
    }

    pub fn get(&self, x: usize, y: usize) -> T {
        self.data[y * self.width + x]
    }

    pub fn set(&mut self, x: usize, y: usize, v: T) {
        self.data[y * self.width + x] = v;
    }

    pub fn same_shape<U>(&self, other: &Raster<U>) -> bool {
        self.width == other.width && self.height == other.height
    }

    /// Bilinear interpolation at `p`.
    pub fn sample(&self, p: Pixel) -> Result<T> {
        let st = bilinear_stencil(self.width, self.height, p).ok_or(Error::OutOfBounds(p.u, p.v))?;
        Ok(self.apply(&st))
    }

    pub fn apply(&self, st: &Stencil) -> T {
        st.iter()
            .fold(T::default(), |acc, &(i, w)| acc.plus(self.data[i].scale(w)))
    }

    pub fn map<U: Texel>(&self, f: impl Fn(T) -> U) -> Raster<U> {
        Raster {
            width: self.width,
            height: self.height,
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }
}
