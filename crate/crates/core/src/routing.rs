//! Scale-aware routing of candidates to layer combinations and assembly of
//! fixed-length descriptors.
//!
//! For a candidate routed to a bin, each layer of the bin is max-pooled into
//! the grid; per grid cell the layers' channel vectors are concatenated in bin
//! order, projected by the bin's PCA projector to `target_dim` values, and
//! written cell-major. Optional semantic and edge blocks follow the CNN block
//! unprojected.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::BBox;
use crate::maps::{ImageRecord, NUM_LABEL_BINS};
use crate::pca::PcaProjector;
use crate::pooling::{map_to_feature_coords, roi_edge_pool, roi_histogram_pool, roi_label_max_pool, roi_max_pool, EdgePoolMode, HistNorm, PoolGrid};

/// Height interval `[min_height, max_height)` and the layers it reads.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScaleBin {
    pub min_height: f64,
    /// `None` is unbounded.
    pub max_height: Option<f64>,
    pub layers: Vec<String>,
}

impl ScaleBin {
    pub fn contains(&self, h: f64) -> bool {
        h >= self.min_height && self.max_height.is_none_or(|m| h < m)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RoutingTable {
    pub bins: Vec<ScaleBin>,
    pub grid: PoolGrid,
    /// Per-cell width of the CNN block after projection.
    pub target_dim: usize,
}

impl RoutingTable {
    /// Small `[50, 80)` on conv3 + conv4a and large `[80, inf)` on conv4a + conv5a.
    pub fn scale_aware(target_dim: usize) -> Self {
        RoutingTable {
            bins: vec![
                ScaleBin { min_height: 50.0, max_height: Some(80.0), layers: vec!["conv3".into(), "conv4a".into()] },
                ScaleBin { min_height: 80.0, max_height: None, layers: vec!["conv4a".into(), "conv5a".into()] },
            ],
            grid: PoolGrid::default(),
            target_dim,
        }
    }

    /// One bin covering every height with a fixed layer combination.
    pub fn single(layers: Vec<String>, target_dim: usize) -> Self {
        RoutingTable { bins: vec![ScaleBin { min_height: 0.0, max_height: None, layers }], grid: PoolGrid::default(), target_dim }
    }

    pub fn validate(&self) -> Result<()> {
        if self.bins.is_empty() {
            return Err(Error::Config("routing table has no bins".into()));
        }
        if self.grid.m == 0 || self.grid.n == 0 || self.target_dim == 0 {
            return Err(Error::Config("grid and target dimension must be positive".into()));
        }
        for (i, b) in self.bins.iter().enumerate() {
            if b.layers.is_empty() {
                return Err(Error::Config(format!("bin {i} has no layers")));
            }
            if b.max_height.is_some_and(|m| m <= b.min_height) {
                return Err(Error::Config(format!("bin {i} has an empty height range")));
            }
            let last = i + 1 == self.bins.len();
            match (b.max_height, last) {
                (None, true) => {}
                (None, false) => return Err(Error::Config(format!("only the last bin may be unbounded (bin {i})"))),
                (Some(_), true) => return Err(Error::Config("the last bin must be unbounded".into())),
                (Some(m), false) => {
                    if self.bins[i + 1].min_height != m {
                        return Err(Error::Config(format!("bins {i} and {} are not contiguous", i + 1)));
                    }
                }
            }
        }
        Ok(())
    }

    /// Bin whose interval contains `height`; heights below the first bin go
    /// to the first bin.
    pub fn route(&self, height: f64) -> usize {
        self.bins.iter().position(|b| b.contains(height)).unwrap_or(0)
    }

    /// Every layer named by any bin, deduplicated in first-use order.
    pub fn layers(&self) -> Vec<String> {
        let mut out: Vec<String> = Vec::new();
        for b in &self.bins {
            for l in &b.layers {
                if !out.contains(l) {
                    out.push(l.clone());
                }
            }
        }
        out
    }
}

/// Pooling applied to the semantic label channel.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "mode")]
pub enum SemanticPooling {
    Hist { norm: HistNorm },
    Max,
}

impl SemanticPooling {
    pub fn values_per_cell(&self) -> usize {
        match self {
            SemanticPooling::Hist { .. } => NUM_LABEL_BINS,
            SemanticPooling::Max => 1,
        }
    }
}

/// Extra channels appended after the CNN block.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct ChannelConfig {
    pub semantic: Option<SemanticPooling>,
    pub edge: Option<EdgePoolMode>,
}

impl ChannelConfig {
    /// Histogram-pooled semantic labels and 16-bin edge histograms.
    pub fn sam_plus() -> Self {
        ChannelConfig { semantic: Some(SemanticPooling::Hist { norm: HistNorm::CellMass }), edge: Some(EdgePoolMode::Hist { bins: 16 }) }
    }

    pub fn extra_len(&self, grid: PoolGrid) -> usize {
        let per_cell = self.semantic.map_or(0, |s| s.values_per_cell()) + self.edge.map_or(0, |e| e.values_per_cell());
        per_cell * grid.cells()
    }
}

/// Total descriptor length for a table and channel config.
pub fn descriptor_len(table: &RoutingTable, channels: &ChannelConfig) -> usize {
    table.target_dim * table.grid.cells() + channels.extra_len(table.grid)
}

/// Per-cell input width of bin `bin` for the layers in `record`.
pub fn bin_input_dim(table: &RoutingTable, bin: usize, record: &ImageRecord) -> Result<usize> {
    table.bins[bin]
        .layers
        .iter()
        .map(|l| record.layer(l).map(|m| m.channels()).ok_or_else(|| Error::MissingLayer { image_id: record.image_id.clone(), layer: l.clone() }))
        .sum()
}

#[derive(Debug, Clone, PartialEq)]
pub struct Descriptor {
    pub values: Vec<f32>,
    pub bin: usize,
}

/// Max-pools each layer and returns the concatenated per-cell channel
/// vectors, flattened cell-major (`cells x sum(C)`).
pub fn pooled_cells(record: &ImageRecord, b: &BBox, layers: &[String], grid: PoolGrid) -> Result<(Vec<f32>, usize)> {
    let mut pooled = Vec::with_capacity(layers.len());
    let mut width = 0;
    for name in layers {
        let map = record.layer(name).ok_or_else(|| Error::MissingLayer { image_id: record.image_id.clone(), layer: name.clone() })?;
        let rect = map_to_feature_coords(b, map.stride(), map.height(), map.width())?;
        width += map.channels();
        pooled.push((map.channels(), roi_max_pool(map, &rect, grid)?));
    }
    let cells = grid.cells();
    let mut out = vec![0.0f32; cells * width];
    let mut offset = 0;
    for (c, block) in &pooled {
        for ch in 0..*c {
            let src = &block[ch * cells..(ch + 1) * cells];
            for (k, &v) in src.iter().enumerate() {
                out[k * width + offset + ch] = v;
            }
        }
        offset += c;
    }
    Ok((out, width))
}

/// Semantic and edge blocks for a box, in that order.
pub fn channel_blocks(record: &ImageRecord, b: &BBox, grid: PoolGrid, channels: &ChannelConfig, out: &mut Vec<f32>) -> Result<()> {
    if let Some(sem) = channels.semantic {
        let labels = record.labels.as_ref().ok_or_else(|| Error::MissingLabels(record.image_id.clone()))?;
        let rect = map_to_feature_coords(b, 1, labels.height(), labels.width())?;
        out.extend(match sem {
            SemanticPooling::Hist { norm } => roi_histogram_pool(labels, &rect, grid, norm)?,
            SemanticPooling::Max => roi_label_max_pool(labels, &rect, grid)?,
        });
    }
    if let Some(mode) = channels.edge {
        let edges = record.edges.as_ref().ok_or_else(|| Error::MissingEdges(record.image_id.clone()))?;
        let rect = map_to_feature_coords(b, 1, edges.height(), edges.width())?;
        out.extend(roi_edge_pool(edges, &rect, grid, mode)?);
    }
    Ok(())
}

/// Routes `b` by height and builds its descriptor.
pub fn assemble_descriptor(
    record: &ImageRecord,
    b: &BBox,
    table: &RoutingTable,
    projectors: &[PcaProjector],
    channels: &ChannelConfig,
) -> Result<Descriptor> {
    let bin = table.route(b.h());
    let projector = projectors.get(bin).ok_or_else(|| Error::Config(format!("no projector for bin {bin}")))?;
    let (cells, width) = pooled_cells(record, b, &table.bins[bin].layers, table.grid)?;
    let d = table.target_dim;
    if projector.input_dim != width || projector.output_dim != d {
        return Err(Error::ProjectorMismatch { bin, input: projector.input_dim, output: projector.output_dim, expected_in: width, expected_out: d });
    }
    let ncell = table.grid.cells();
    let mut values = vec![0.0f32; ncell * d];
    let mut scratch = Vec::with_capacity(ncell * width);
    projector.project_cells_f32(&cells[..ncell * width], &mut scratch, &mut values)?;
    channel_blocks(record, b, table.grid, channels, &mut values)?;
    Ok(Descriptor { values, bin })
}
