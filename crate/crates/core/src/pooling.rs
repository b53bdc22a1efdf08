//! Fixed-grid pooling of regions of interest.
//!
//! A box in image pixels is first mapped to a half-open rectangle of feature
//! cells (`floor` on the leading edge, `ceil` on the trailing edge, clamped to
//! the map, at least one cell per axis). The rectangle is then split into an
//! `m x n` grid whose row boundaries sit at `floor(i * extent / m)` (columns
//! likewise). When the extent is smaller than the grid, a cell whose window
//! would be empty takes the single source cell at its start, so neighbouring
//! grid cells may share a source cell.

use serde::{Deserialize, Serialize};

use crate::error::PoolError;
use crate::geometry::BBox;
use crate::maps::{EdgeMap, FeatureMap, LabelMap, NUM_LABEL_BINS};

/// Pooling grid: `m` rows by `n` columns.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct PoolGrid {
    pub m: usize,
    pub n: usize,
}

impl Default for PoolGrid {
    /// 12 x 5, suited to the pedestrian aspect ratio.
    fn default() -> Self {
        PoolGrid { m: 12, n: 5 }
    }
}

impl PoolGrid {
    pub fn new(m: usize, n: usize) -> Result<Self, PoolError> {
        if m == 0 || n == 0 {
            return Err(PoolError::Grid { m, n });
        }
        Ok(PoolGrid { m, n })
    }

    pub fn cells(&self) -> usize {
        self.m * self.n
    }
}

/// Half-open rectangle of feature cells.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct FeatureRect {
    pub row_start: usize,
    pub row_end: usize,
    pub col_start: usize,
    pub col_end: usize,
}

impl FeatureRect {
    pub fn rows(&self) -> usize {
        self.row_end - self.row_start
    }

    pub fn cols(&self) -> usize {
        self.col_end - self.col_start
    }

    fn check(&self, map_h: usize, map_w: usize) -> Result<(), PoolError> {
        if self.row_end <= self.row_start || self.col_end <= self.col_start || self.row_end > map_h || self.col_end > map_w {
            return Err(PoolError::DegenerateRoi { map_h, map_w });
        }
        Ok(())
    }
}

fn axis_span(start: f64, extent: f64, stride: f64, limit: usize) -> Option<(usize, usize)> {
    let lo = (start / stride).floor();
    let hi = ((start + extent) / stride).ceil();
    if hi <= 0.0 || lo >= limit as f64 {
        return None;
    }
    let lo = lo.max(0.0) as usize;
    let mut hi = (hi as usize).min(limit);
    if hi <= lo {
        hi = lo + 1;
    }
    Some((lo, hi))
}

/// Image box to feature cells at the given stride.
pub fn map_to_feature_coords(b: &BBox, stride: u32, map_h: usize, map_w: usize) -> Result<FeatureRect, PoolError> {
    if stride == 0 {
        return Err(PoolError::Stride);
    }
    let s = stride as f64;
    let degenerate = PoolError::DegenerateRoi { map_h, map_w };
    let (col_start, col_end) = axis_span(b.x(), b.w(), s, map_w).ok_or(degenerate.clone())?;
    let (row_start, row_end) = axis_span(b.y(), b.h(), s, map_h).ok_or(degenerate)?;
    Ok(FeatureRect { row_start, row_end, col_start, col_end })
}

/// Source range `[lo, hi)` covered by grid part `k` of `parts` over `extent`
/// cells starting at `start`.
#[inline]
pub fn cell_span(start: usize, extent: usize, parts: usize, k: usize) -> (usize, usize) {
    let lo = k * extent / parts;
    let hi = ((k + 1) * extent / parts).max(lo + 1);
    (start + lo, start + hi)
}

/// Max pooling of every channel; output is `C x m x n`, channel-major.
pub fn roi_max_pool(map: &FeatureMap, rect: &FeatureRect, grid: PoolGrid) -> Result<Vec<f32>, PoolError> {
    rect.check(map.height(), map.width())?;
    let (m, n) = (grid.m, grid.n);
    let w = map.width();
    let mut out = vec![f32::NEG_INFINITY; map.channels() * m * n];
    let rows: Vec<_> = (0..m).map(|i| cell_span(rect.row_start, rect.rows(), m, i)).collect();
    let cols: Vec<_> = (0..n).map(|j| cell_span(rect.col_start, rect.cols(), n, j)).collect();
    for c in 0..map.channels() {
        let plane = map.plane(c);
        let block = &mut out[c * m * n..(c + 1) * m * n];
        for (i, &(r0, r1)) in rows.iter().enumerate() {
            for (j, &(c0, c1)) in cols.iter().enumerate() {
                let mut best = f32::NEG_INFINITY;
                for r in r0..r1 {
                    for &v in &plane[r * w + c0..r * w + c1] {
                        if v > best {
                            best = v;
                        }
                    }
                }
                block[i * n + j] = best;
            }
        }
    }
    Ok(out)
}

/// How a cell's class counts are turned into a histogram.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum HistNorm {
    /// Divide by the number of pixels in the cell; every cell sums to 1.
    #[default]
    CellMass,
    /// Divide by the grid size `m * n`.
    GridSize,
}

fn histogram_pool<F: Fn(usize, usize) -> usize>(
    rect: &FeatureRect,
    grid: PoolGrid,
    bins: usize,
    norm: HistNorm,
    bin_of: F,
) -> Vec<f32> {
    let (m, n) = (grid.m, grid.n);
    let mut out = vec![0.0f32; bins * m * n];
    let mut counts = vec![0u32; bins];
    for i in 0..m {
        let (r0, r1) = cell_span(rect.row_start, rect.rows(), m, i);
        for j in 0..n {
            let (c0, c1) = cell_span(rect.col_start, rect.cols(), n, j);
            counts.iter_mut().for_each(|v| *v = 0);
            for r in r0..r1 {
                for c in c0..c1 {
                    counts[bin_of(r, c)] += 1;
                }
            }
            let denom = match norm {
                HistNorm::CellMass => ((r1 - r0) * (c1 - c0)) as f64,
                HistNorm::GridSize => (m * n) as f64,
            };
            let cell = &mut out[(i * n + j) * bins..(i * n + j + 1) * bins];
            for (dst, &k) in cell.iter_mut().zip(&counts) {
                *dst = (k as f64 / denom) as f32;
            }
        }
    }
    out
}

/// Per-cell class histograms (21 bins), concatenated cell-major.
pub fn roi_histogram_pool(labels: &LabelMap, rect: &FeatureRect, grid: PoolGrid, norm: HistNorm) -> Result<Vec<f32>, PoolError> {
    rect.check(labels.height(), labels.width())?;
    Ok(histogram_pool(rect, grid, NUM_LABEL_BINS, norm, |r, c| labels.get(r, c) as usize))
}

/// Per-cell maximum class index; the max-pooling counterpart of
/// [`roi_histogram_pool`] for label maps. Output length `m * n`.
pub fn roi_label_max_pool(labels: &LabelMap, rect: &FeatureRect, grid: PoolGrid) -> Result<Vec<f32>, PoolError> {
    rect.check(labels.height(), labels.width())?;
    let (m, n) = (grid.m, grid.n);
    let mut out = vec![0.0f32; m * n];
    for i in 0..m {
        let (r0, r1) = cell_span(rect.row_start, rect.rows(), m, i);
        for j in 0..n {
            let (c0, c1) = cell_span(rect.col_start, rect.cols(), n, j);
            let mut best = 0u8;
            for r in r0..r1 {
                for c in c0..c1 {
                    best = best.max(labels.get(r, c));
                }
            }
            out[i * n + j] = best as f32;
        }
    }
    Ok(out)
}

/// Edge channel pooling mode.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "mode")]
pub enum EdgePoolMode {
    Max,
    Hist { bins: usize },
}

impl Default for EdgePoolMode {
    fn default() -> Self {
        EdgePoolMode::Hist { bins: 16 }
    }
}

impl EdgePoolMode {
    pub fn values_per_cell(&self) -> usize {
        match self {
            EdgePoolMode::Max => 1,
            EdgePoolMode::Hist { bins } => *bins,
        }
    }
}

/// Uniform bin of an intensity in `[0, 1]`; 1.0 lands in the last bin.
#[inline]
pub fn edge_bin(v: f32, bins: usize) -> usize {
    ((v as f64 * bins as f64) as usize).min(bins - 1)
}

pub fn roi_edge_pool(edges: &EdgeMap, rect: &FeatureRect, grid: PoolGrid, mode: EdgePoolMode) -> Result<Vec<f32>, PoolError> {
    rect.check(edges.height(), edges.width())?;
    match mode {
        EdgePoolMode::Max => {
            let (m, n) = (grid.m, grid.n);
            let mut out = vec![0.0f32; m * n];
            for i in 0..m {
                let (r0, r1) = cell_span(rect.row_start, rect.rows(), m, i);
                for j in 0..n {
                    let (c0, c1) = cell_span(rect.col_start, rect.cols(), n, j);
                    let mut best = 0.0f32;
                    for r in r0..r1 {
                        for c in c0..c1 {
                            best = best.max(edges.get(r, c));
                        }
                    }
                    out[i * n + j] = best;
                }
            }
            Ok(out)
        }
        EdgePoolMode::Hist { bins } => {
            if bins < 2 {
                return Err(PoolError::Bins(bins));
            }
            Ok(histogram_pool(rect, grid, bins, HistNorm::CellMass, |r, c| edge_bin(edges.get(r, c), bins)))
        }
    }
}
