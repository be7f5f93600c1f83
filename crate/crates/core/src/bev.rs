//! Bird's-eye-view gridding: the 3-channel pseudo-image and the range bands of
//! the aligned (downsampled) feature grid.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::Box3D;
use crate::lidar_sim::PointCloud;
use crate::nn::Tensor;

pub const PSEUDO_IMAGE_CHANNELS: usize = 3;

/// Grid over the detection volume. Rows run along x (forward), columns along y.
///
/// Cell counts are rounded down to a multiple of `multiple` so the aligned
/// layer divides evenly; the x extent is trimmed at the far end and the y
/// extent symmetrically.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct GridSpec {
    pub x_extent: [f64; 2],
    pub y_extent: [f64; 2],
    pub z_extent: [f64; 2],
    pub cell_size: f64,
    pub multiple: usize,
}

impl Default for GridSpec {
    fn default() -> Self {
        GridSpec {
            x_extent: [0.0, 70.4],
            y_extent: [-40.0, 40.0],
            z_extent: [-3.0, 1.0],
            cell_size: 0.55,
            multiple: 4,
        }
    }
}

impl GridSpec {
    pub fn validate(&self) -> Result<()> {
        let ok = self.cell_size > 0.0
            && self.multiple >= 1
            && self.x_extent[1] > self.x_extent[0]
            && self.y_extent[1] > self.y_extent[0]
            && self.z_extent[1] > self.z_extent[0];
        if !ok || self.rows() == 0 || self.cols() == 0 {
            return Err(Error::Config(format!("invalid grid {self:?}")));
        }
        Ok(())
    }

    fn count(&self, extent: [f64; 2]) -> usize {
        let n = ((extent[1] - extent[0]) / self.cell_size + 1e-9).floor() as usize;
        n - n % self.multiple.max(1)
    }

    /// Number of cells along x.
    pub fn rows(&self) -> usize {
        self.count(self.x_extent)
    }

    /// Number of cells along y.
    pub fn cols(&self) -> usize {
        self.count(self.y_extent)
    }

    pub fn x_min(&self) -> f64 {
        self.x_extent[0]
    }

    pub fn x_max(&self) -> f64 {
        self.x_extent[0] + self.rows() as f64 * self.cell_size
    }

    pub fn y_min(&self) -> f64 {
        0.5 * (self.y_extent[0] + self.y_extent[1]) - 0.5 * self.cols() as f64 * self.cell_size
    }

    pub fn y_max(&self) -> f64 {
        self.y_min() + self.cols() as f64 * self.cell_size
    }

    /// Dimensions of the grid after downsampling by `stride`.
    pub fn strided_dims(&self, stride: usize) -> Result<(usize, usize)> {
        if stride < 1 || !self.rows().is_multiple_of(stride) || !self.cols().is_multiple_of(stride) {
            return Err(Error::Config(format!(
                "stride {stride} does not divide the {}x{} grid",
                self.rows(),
                self.cols()
            )));
        }
        Ok((self.rows() / stride, self.cols() / stride))
    }

    /// Center of strided cell `(i, j)` in sensor coordinates.
    pub fn cell_center(&self, i: usize, j: usize, stride: usize) -> (f64, f64) {
        let cs = self.cell_size * stride as f64;
        (self.x_min() + (i as f64 + 0.5) * cs, self.y_min() + (j as f64 + 0.5) * cs)
    }

    /// Strided cell containing `(x, y)`, if inside the grid.
    pub fn locate(&self, x: f64, y: f64, stride: usize) -> Option<(usize, usize)> {
        let cs = self.cell_size * stride as f64;
        let fi = ((x - self.x_min()) / cs).floor();
        let fj = ((y - self.y_min()) / cs).floor();
        let (rows, cols) = (self.rows() / stride, self.cols() / stride);
        (fi >= 0.0 && fj >= 0.0 && (fi as usize) < rows && (fj as usize) < cols).then_some((fi as usize, fj as usize))
    }
}

/// Encodes a cloud as a `3 x H x W` pseudo-image:
/// channel 0 `min(1, ln(n + 1) / ln 64)` for `n` points in the cell,
/// channel 1 the highest point mapped affinely from the z extent to `[0, 1]`,
/// channel 2 the mean reflectance. Empty cells are zero in every channel.
pub fn encode(pc: &PointCloud, grid: &GridSpec) -> Result<Tensor> {
    grid.validate()?;
    let (h, w) = (grid.rows(), grid.cols());
    let [z0, z1] = grid.z_extent;
    let mut hits: Vec<(usize, f64, f64)> = pc
        .points
        .iter()
        .filter(|p| p.z >= z0 && p.z <= z1 && p.x.is_finite() && p.y.is_finite())
        .filter_map(|p| grid.locate(p.x, p.y, 1).map(|(i, j)| (i * w + j, p.z, p.reflectance)))
        .collect();
    // Sorting fixes the summation order, so the encoding is bitwise independent of point order.
    hits.sort_by(|a, b| a.0.cmp(&b.0).then(a.2.total_cmp(&b.2)).then(a.1.total_cmp(&b.1)));

    let mut img = Tensor::zeros(&[PSEUDO_IMAGE_CHANNELS, h, w]);
    let plane = h * w;
    let ln64 = 64f64.ln();
    let data = img.data_mut();
    let mut k = 0;
    while k < hits.len() {
        let cell = hits[k].0;
        let mut n = 0usize;
        let mut zmax = f64::NEG_INFINITY;
        let mut rsum = 0.0;
        while k < hits.len() && hits[k].0 == cell {
            n += 1;
            zmax = zmax.max(hits[k].1);
            rsum += hits[k].2;
            k += 1;
        }
        data[cell] = (((n + 1) as f64).ln() / ln64).min(1.0);
        data[plane + cell] = (zmax - z0) / (z1 - z0);
        data[2 * plane + cell] = (rsum / n as f64).clamp(0.0, 1.0);
    }
    Ok(img)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum RangeBand {
    ExcludedNear,
    Near,
    Far,
}

/// Band label of every aligned-layer cell, row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct RangeMask {
    pub rows: usize,
    pub cols: usize,
    pub bands: Vec<RangeBand>,
    pub threshold: f64,
    pub exclusion: f64,
}

impl RangeMask {
    pub fn count(&self, band: RangeBand) -> usize {
        self.bands.iter().filter(|b| **b == band).count()
    }

    pub fn len(&self) -> usize {
        self.bands.len()
    }

    pub fn is_empty(&self) -> bool {
        self.bands.is_empty()
    }
}

/// Band of a single range: strictly inside `exclusion` is excluded, up to and
/// including `threshold` is near, beyond is far.
pub fn band_of_range(range: f64, threshold: f64, exclusion: f64) -> RangeBand {
    if range < exclusion {
        RangeBand::ExcludedNear
    } else if range <= threshold {
        RangeBand::Near
    } else {
        RangeBand::Far
    }
}

/// Labels each cell of the grid downsampled by `stride` by the range of its center.
pub fn cell_range_band(grid: &GridSpec, stride: usize, threshold: f64, exclusion: f64) -> Result<RangeMask> {
    let (rows, cols) = grid.strided_dims(stride)?;
    let mut bands = Vec::with_capacity(rows * cols);
    for i in 0..rows {
        for j in 0..cols {
            let (x, y) = grid.cell_center(i, j, stride);
            bands.push(band_of_range(x.hypot(y), threshold, exclusion));
        }
    }
    Ok(RangeMask {
        rows,
        cols,
        bands,
        threshold,
        exclusion,
    })
}

/// Flat indices of the strided cells whose centers fall inside the box footprint,
/// or the single cell nearest the box center when none do.
pub fn box_to_cells(b: &Box3D, grid: &GridSpec, stride: usize) -> Result<Vec<usize>> {
    let (rows, cols) = grid.strided_dims(stride)?;
    let corners = b.bev_corners();
    let (mut xlo, mut xhi, mut ylo, mut yhi) = (f64::INFINITY, f64::NEG_INFINITY, f64::INFINITY, f64::NEG_INFINITY);
    for c in &corners {
        xlo = xlo.min(c[0]);
        xhi = xhi.max(c[0]);
        ylo = ylo.min(c[1]);
        yhi = yhi.max(c[1]);
    }
    if xhi < grid.x_min() || xlo > grid.x_max() || yhi < grid.y_min() || ylo > grid.y_max() {
        return Err(Error::EmptyRegion);
    }
    let cs = grid.cell_size * stride as f64;
    let clamp_idx = |v: f64, n: usize| (v.floor().max(0.0) as usize).min(n - 1);
    let (i0, i1) = (clamp_idx((xlo - grid.x_min()) / cs, rows), clamp_idx((xhi - grid.x_min()) / cs, rows));
    let (j0, j1) = (clamp_idx((ylo - grid.y_min()) / cs, cols), clamp_idx((yhi - grid.y_min()) / cs, cols));
    let mut cells = Vec::new();
    for i in i0..=i1 {
        for j in j0..=j1 {
            let (x, y) = grid.cell_center(i, j, stride);
            if b.footprint_contains(x, y) {
                cells.push(i * cols + j);
            }
        }
    }
    if cells.is_empty() {
        let i = clamp_idx((b.center[0] - grid.x_min()) / cs, rows);
        let j = clamp_idx((b.center[1] - grid.y_min()) / cs, cols);
        cells.push(i * cols + j);
    }
    Ok(cells)
}
