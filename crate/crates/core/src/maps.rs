//! Image and per-pixel map containers, pyramids and the bilinear sampler.

use std::ops::{Deref, Index, IndexMut};

use nalgebra::Vector3;

use crate::error::{Error, Result};
use crate::geometry::PixelCoord;

/// Row-major 2D grid.
#[derive(Debug, Clone, PartialEq)]
pub struct Grid<T> {
    width: usize,
    height: usize,
    data: Vec<T>,
}

pub type ScalarMap = Grid<f64>;
pub type BoolMap = Grid<bool>;

impl<T: Clone> Grid<T> {
    pub fn filled(width: usize, height: usize, value: T) -> Self {
        Grid {
            width,
            height,
            data: vec![value; width * height],
        }
    }
}

impl<T> Grid<T> {
    pub fn from_vec(width: usize, height: usize, data: Vec<T>) -> Result<Self> {
        if data.len() != width * height {
            return Err(Error::Size(format!(
                "grid {width}x{height} needs {} entries, got {}",
                width * height,
                data.len()
            )));
        }
        Ok(Grid { width, height, data })
    }

    pub fn from_fn(width: usize, height: usize, mut f: impl FnMut(usize, usize) -> T) -> Self {
        let mut data = Vec::with_capacity(width * height);
        for y in 0..height {
            for x in 0..width {
                data.push(f(x, y));
            }
        }
        Grid { width, height, data }
    }

    #[inline]
    pub fn width(&self) -> usize {
        self.width
    }

    #[inline]
    pub fn height(&self) -> usize {
        self.height
    }

    #[inline]
    pub fn dims(&self) -> (usize, usize) {
        (self.width, self.height)
    }

    #[inline]
    pub fn len(&self) -> usize {
        self.data.len()
    }

    #[inline]
    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    #[inline]
    pub fn idx(&self, x: usize, y: usize) -> usize {
        y * self.width + x
    }

    #[inline]
    pub fn get(&self, x: usize, y: usize) -> &T {
        &self.data[y * self.width + x]
    }

    #[inline]
    pub fn get_mut(&mut self, x: usize, y: usize) -> &mut T {
        &mut self.data[y * self.width + x]
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

    pub fn map<U>(&self, f: impl FnMut(&T) -> U) -> Grid<U> {
        Grid {
            width: self.width,
            height: self.height,
            data: self.data.iter().map(f).collect(),
        }
    }

    /// Mirror left-right.
    pub fn flip_horizontal(&self) -> Grid<T>
    where
        T: Clone,
    {
        Grid::from_fn(self.width, self.height, |x, y| self.get(self.width - 1 - x, y).clone())
    }

    /// Mirror top-bottom.
    pub fn flip_vertical(&self) -> Grid<T>
    where
        T: Clone,
    {
        Grid::from_fn(self.width, self.height, |x, y| self.get(x, self.height - 1 - y).clone())
    }
}

impl<T> Index<(usize, usize)> for Grid<T> {
    type Output = T;
    #[inline]
    fn index(&self, (x, y): (usize, usize)) -> &T {
        &self.data[y * self.width + x]
    }
}

impl<T> IndexMut<(usize, usize)> for Grid<T> {
    #[inline]
    fn index_mut(&mut self, (x, y): (usize, usize)) -> &mut T {
        &mut self.data[y * self.width + x]
    }
}

impl Grid<f64> {
    pub fn zeros(width: usize, height: usize) -> Self {
        Grid::filled(width, height, 0.0)
    }

    /// `self += other * scale`.
    pub fn add_scaled(&mut self, other: &Grid<f64>, scale: f64) {
        debug_assert_eq!(self.dims(), other.dims());
        for (a, b) in self.data.iter_mut().zip(&other.data) {
            *a += b * scale;
        }
    }
}

/// Float image, `channels` ∈ {1, 3}, row-major interleaved.
#[derive(Debug, Clone, PartialEq)]
pub struct ImageF {
    width: usize,
    height: usize,
    channels: usize,
    data: Vec<f64>,
}

impl ImageF {
    pub fn new(width: usize, height: usize, channels: usize, data: Vec<f64>) -> Result<Self> {
        if channels != 1 && channels != 3 {
            return Err(Error::Size(format!("images have 1 or 3 channels, got {channels}")));
        }
        if data.len() != width * height * channels {
            return Err(Error::Size(format!(
                "image {width}x{height}x{channels} needs {} values, got {}",
                width * height * channels,
                data.len()
            )));
        }
        if let Some(bad) = data.iter().find(|v| !v.is_finite()) {
            return Err(Error::Domain(format!("non-finite intensity {bad}")));
        }
        Ok(ImageF {
            width,
            height,
            channels,
            data,
        })
    }

    pub fn constant(width: usize, height: usize, channels: usize, value: f64) -> Self {
        ImageF::new(width, height, channels, vec![value; width * height * channels]).expect("valid constant image")
    }

    pub fn from_fn(width: usize, height: usize, channels: usize, mut f: impl FnMut(usize, usize, usize) -> f64) -> Self {
        let mut data = Vec::with_capacity(width * height * channels);
        for y in 0..height {
            for x in 0..width {
                for c in 0..channels {
                    data.push(f(x, y, c));
                }
            }
        }
        ImageF::new(width, height, channels, data).expect("from_fn produced a valid image")
    }

    #[inline]
    pub fn width(&self) -> usize {
        self.width
    }
    #[inline]
    pub fn height(&self) -> usize {
        self.height
    }
    #[inline]
    pub fn channels(&self) -> usize {
        self.channels
    }
    #[inline]
    pub fn dims(&self) -> (usize, usize) {
        (self.width, self.height)
    }
    pub fn data(&self) -> &[f64] {
        &self.data
    }

    #[inline]
    pub fn at(&self, x: usize, y: usize, c: usize) -> f64 {
        self.data[(y * self.width + x) * self.channels + c]
    }

    /// Channel mean.
    pub fn luminance(&self) -> Grid<f64> {
        let inv = 1.0 / self.channels as f64;
        Grid::from_fn(self.width, self.height, |x, y| {
            (0..self.channels).map(|c| self.at(x, y, c)).sum::<f64>() * inv
        })
    }

    pub fn to_grid(&self, channel: usize) -> Grid<f64> {
        Grid::from_fn(self.width, self.height, |x, y| self.at(x, y, channel))
    }
}

/// Per-pixel depth in meters; every entry strictly positive and finite.
#[derive(Debug, Clone, PartialEq)]
pub struct DepthMap(Grid<f64>);

impl DepthMap {
    pub fn new(grid: Grid<f64>) -> Result<Self> {
        if let Some((i, d)) = grid.data().iter().enumerate().find(|(_, d)| !(**d > 0.0 && d.is_finite())) {
            return Err(Error::Domain(format!(
                "depth must be positive and finite, got {d} at ({}, {})",
                i % grid.width(),
                i / grid.width()
            )));
        }
        Ok(DepthMap(grid))
    }

    pub fn constant(width: usize, height: usize, depth: f64) -> Result<Self> {
        DepthMap::new(Grid::filled(width, height, depth))
    }

    pub fn grid(&self) -> &Grid<f64> {
        &self.0
    }

    pub fn into_grid(self) -> Grid<f64> {
        self.0
    }

    pub fn scaled(&self, s: f64) -> Result<DepthMap> {
        DepthMap::new(self.0.map(|d| d * s))
    }
}

impl Deref for DepthMap {
    type Target = Grid<f64>;
    fn deref(&self) -> &Grid<f64> {
        &self.0
    }
}

/// Tolerance on the unit-length invariant of normal maps.
pub const UNIT_TOLERANCE: f64 = 1e-6;

/// Per-pixel unit surface normals in the camera frame.
#[derive(Debug, Clone, PartialEq)]
pub struct NormalMap(Grid<Vector3<f64>>);

impl NormalMap {
    pub fn new(grid: Grid<Vector3<f64>>) -> Result<Self> {
        if let Some((i, n)) = grid
            .data()
            .iter()
            .enumerate()
            .find(|(_, n)| !((n.norm() - 1.0).abs() <= UNIT_TOLERANCE))
        {
            return Err(Error::Domain(format!(
                "normal at ({}, {}) has norm {}",
                i % grid.width(),
                i / grid.width(),
                n.norm()
            )));
        }
        Ok(NormalMap(grid))
    }

    pub fn constant(width: usize, height: usize, n: Vector3<f64>) -> Result<Self> {
        NormalMap::new(Grid::filled(width, height, n))
    }

    pub fn grid(&self) -> &Grid<Vector3<f64>> {
        &self.0
    }

    pub fn into_grid(self) -> Grid<Vector3<f64>> {
        self.0
    }
}

impl Deref for NormalMap {
    type Target = Grid<Vector3<f64>>;
    fn deref(&self) -> &Grid<Vector3<f64>> {
        &self.0
    }
}

/// Per-pixel edge strength in the open interval (0, 1).
#[derive(Debug, Clone, PartialEq)]
pub struct EdgeMap(Grid<f64>);

#[inline]
pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

impl EdgeMap {
    pub fn new(grid: Grid<f64>) -> Result<Self> {
        if let Some(e) = grid.data().iter().find(|e| !(**e > 0.0 && **e < 1.0)) {
            return Err(Error::Domain(format!("edge strength must lie in (0,1), got {e}")));
        }
        Ok(EdgeMap(grid))
    }

    /// Edge map from decoder logits through the sigmoid.
    pub fn from_logits(logits: &Grid<f64>) -> Result<Self> {
        EdgeMap::new(logits.map(|&l| sigmoid(l)))
    }

    /// Build without the open-interval check. Used by loss code that also
    /// accepts the closed limits 0 and 1 (e.g. hand-built fields in tests).
    pub fn from_grid_unchecked(grid: Grid<f64>) -> Self {
        EdgeMap(grid)
    }

    pub fn grid(&self) -> &Grid<f64> {
        &self.0
    }

    pub fn into_grid(self) -> Grid<f64> {
        self.0
    }
}

impl Deref for EdgeMap {
    type Target = Grid<f64>;
    fn deref(&self) -> &Grid<f64> {
        &self.0
    }
}

/// Result of sampling every channel at a continuous coordinate.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BilinearSample {
    pub channels: usize,
    pub value: [f64; 3],
    pub d_du: [f64; 3],
    pub d_dv: [f64; 3],
}

/// Bilinear interpolation with clamp-to-edge, plus the exact partials of the
/// blend with respect to the sample position. Outside the image the
/// coordinate is clamped and the partial along the clamped axis is zero.
pub fn bilinear_sample(img: &ImageF, p: PixelCoord) -> BilinearSample {
    let (w, h) = img.dims();
    let (uc, du_live) = clamp_axis(p.u, w);
    let (vc, dv_live) = clamp_axis(p.v, h);
    let x0 = (uc.floor() as usize).min(w.saturating_sub(2));
    let y0 = (vc.floor() as usize).min(h.saturating_sub(2));
    let x1 = (x0 + 1).min(w - 1);
    let y1 = (y0 + 1).min(h - 1);
    let fx = uc - x0 as f64;
    let fy = vc - y0 as f64;
    let mut out = BilinearSample {
        channels: img.channels(),
        value: [0.0; 3],
        d_du: [0.0; 3],
        d_dv: [0.0; 3],
    };
    for c in 0..img.channels() {
        let i00 = img.at(x0, y0, c);
        let i10 = img.at(x1, y0, c);
        let i01 = img.at(x0, y1, c);
        let i11 = img.at(x1, y1, c);
        let top = i00 + fx * (i10 - i00);
        let bottom = i01 + fx * (i11 - i01);
        out.value[c] = top + fy * (bottom - top);
        if du_live {
            out.d_du[c] = (1.0 - fy) * (i10 - i00) + fy * (i11 - i01);
        }
        if dv_live {
            out.d_dv[c] = bottom - top;
        }
    }
    out
}

#[inline]
fn clamp_axis(x: f64, n: usize) -> (f64, bool) {
    let hi = (n - 1) as f64;
    if x < 0.0 {
        (0.0, false)
    } else if x > hi {
        (hi, false)
    } else {
        (x, true)
    }
}

/// 2×2 box downsampling.
pub trait Downsample: Sized {
    fn downsample(&self) -> Result<Self>;
}

fn check_downsample(w: usize, h: usize) -> Result<()> {
    if w < 2 || h < 2 {
        return Err(Error::Size(format!("cannot downsample a {w}x{h} map")));
    }
    Ok(())
}

impl Downsample for Grid<f64> {
    fn downsample(&self) -> Result<Self> {
        check_downsample(self.width, self.height)?;
        Ok(Grid::from_fn(self.width / 2, self.height / 2, |x, y| {
            0.25 * (self.get(2 * x, 2 * y) + self.get(2 * x + 1, 2 * y) + self.get(2 * x, 2 * y + 1) + self.get(2 * x + 1, 2 * y + 1))
        }))
    }
}

impl Downsample for ImageF {
    fn downsample(&self) -> Result<Self> {
        check_downsample(self.width, self.height)?;
        Ok(ImageF::from_fn(self.width / 2, self.height / 2, self.channels, |x, y, c| {
            0.25 * (self.at(2 * x, 2 * y, c)
                + self.at(2 * x + 1, 2 * y, c)
                + self.at(2 * x, 2 * y + 1, c)
                + self.at(2 * x + 1, 2 * y + 1, c))
        }))
    }
}

impl Downsample for DepthMap {
    fn downsample(&self) -> Result<Self> {
        DepthMap::new(self.0.downsample()?)
    }
}

impl Downsample for EdgeMap {
    fn downsample(&self) -> Result<Self> {
        Ok(EdgeMap(self.0.downsample()?))
    }
}

impl Downsample for NormalMap {
    fn downsample(&self) -> Result<Self> {
        check_downsample(self.width(), self.height())?;
        let g = &self.0;
        let out = Grid::from_fn(g.width() / 2, g.height() / 2, |x, y| {
            let s = g.get(2 * x, 2 * y) + g.get(2 * x + 1, 2 * y) + g.get(2 * x, 2 * y + 1) + g.get(2 * x + 1, 2 * y + 1);
            let n = s.norm();
            if n > 1e-12 {
                s / n
            } else {
                *g.get(2 * x, 2 * y)
            }
        });
        NormalMap::new(out)
    }
}

/// Adjoint of [`Downsample`] for scalar grids: spreads each coarse gradient
/// equally over its 2×2 block. Rows/columns dropped by the floor get zero.
pub fn downsample_adjoint(coarse: &Grid<f64>, fine_width: usize, fine_height: usize) -> Grid<f64> {
    let mut fine = Grid::zeros(fine_width, fine_height);
    for y in 0..coarse.height() {
        for x in 0..coarse.width() {
            let g = 0.25 * coarse.get(x, y);
            *fine.get_mut(2 * x, 2 * y) += g;
            *fine.get_mut(2 * x + 1, 2 * y) += g;
            *fine.get_mut(2 * x, 2 * y + 1) += g;
            *fine.get_mut(2 * x + 1, 2 * y + 1) += g;
        }
    }
    fine
}

/// Multi-resolution stack; level 0 is full resolution.
#[derive(Debug, Clone, PartialEq)]
pub struct Pyramid<T> {
    pub levels: Vec<T>,
}

impl<T: Downsample + Clone> Pyramid<T> {
    pub fn build(base: T, n_levels: usize) -> Result<Self> {
        if n_levels == 0 {
            return Err(Error::Config("a pyramid needs at least one level".into()));
        }
        let mut levels = Vec::with_capacity(n_levels);
        levels.push(base);
        for _ in 1..n_levels {
            let next = levels.last().expect("non-empty").downsample()?;
            levels.push(next);
        }
        Ok(Pyramid { levels })
    }
}

impl<T> Pyramid<T> {
    pub fn len(&self) -> usize {
        self.levels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.levels.is_empty()
    }
}

/// Dimensions of pyramid level `level`: `floor(dim / 2^level)`.
pub fn level_dims(width: usize, height: usize, level: usize) -> (usize, usize) {
    (width >> level, height >> level)
}

/// Image gradients of the luminance with a 3×3 Sobel stencil normalized so a
/// unit-slope ramp has unit gradient. Along the derivative axis the interior
/// uses central differences and the border one-sided differences; across it,
/// rows (or columns) are smoothed with `[1, 2, 1]/4` using replicated borders.
pub fn sobel_gradients(img: &ImageF) -> (Grid<f64>, Grid<f64>) {
    let lum = img.luminance();
    let (w, h) = lum.dims();
    let diff = |g: &Grid<f64>, x: usize, y: usize, along_x: bool| -> f64 {
        let n = if along_x { w } else { h };
        let i = if along_x { x } else { y };
        let at = |k: usize| if along_x { *g.get(k, y) } else { *g.get(x, k) };
        if n < 2 {
            0.0
        } else if i == 0 {
            at(1) - at(0)
        } else if i == n - 1 {
            at(n - 1) - at(n - 2)
        } else {
            0.5 * (at(i + 1) - at(i - 1))
        }
    };
    let raw_x = Grid::from_fn(w, h, |x, y| diff(&lum, x, y, true));
    let raw_y = Grid::from_fn(w, h, |x, y| diff(&lum, x, y, false));
    let gx = Grid::from_fn(w, h, |x, y| {
        let up = *raw_x.get(x, y.saturating_sub(1));
        let down = *raw_x.get(x, (y + 1).min(h - 1));
        0.25 * (up + 2.0 * raw_x.get(x, y) + down)
    });
    let gy = Grid::from_fn(w, h, |x, y| {
        let left = *raw_y.get(x.saturating_sub(1), y);
        let right = *raw_y.get((x + 1).min(w - 1), y);
        0.25 * (left + 2.0 * raw_y.get(x, y) + right)
    });
    (gx, gy)
}
