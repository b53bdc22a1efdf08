//! In-memory tensors for CNN activations, semantic label maps and edge maps.

use std::collections::BTreeMap;

use crate::error::FormatError;

/// Largest valid semantic class index; 0 is void.
pub const MAX_LABEL: u8 = 20;
/// Length of a per-cell class histogram (void plus 20 classes).
pub const NUM_LABEL_BINS: usize = MAX_LABEL as usize + 1;

pub const VALID_STRIDES: [u32; 5] = [1, 2, 4, 8, 16];

/// One layer's activations for one image, `C x H x W`, channel-major.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureMap {
    layer_name: String,
    stride: u32,
    channels: usize,
    height: usize,
    width: usize,
    data: Vec<f32>,
}

impl FeatureMap {
    pub fn new(
        layer_name: impl Into<String>,
        stride: u32,
        channels: usize,
        height: usize,
        width: usize,
        data: Vec<f32>,
    ) -> Result<Self, FormatError> {
        let layer_name = layer_name.into();
        if layer_name.is_empty() {
            return Err(FormatError::LayerName("empty layer name".into()));
        }
        if !VALID_STRIDES.contains(&stride) {
            return Err(FormatError::Stride(stride));
        }
        if channels == 0 || height == 0 || width == 0 {
            return Err(FormatError::DimMismatch(format!(
                "layer {layer_name}: dimensions must be positive, got {channels}x{height}x{width}"
            )));
        }
        let expected = channels * height * width;
        if data.len() != expected {
            return Err(FormatError::DimMismatch(format!(
                "layer {layer_name}: {} values for {channels}x{height}x{width}",
                data.len()
            )));
        }
        if let Some(index) = data.iter().position(|v| !v.is_finite()) {
            return Err(FormatError::NonFinite { index });
        }
        Ok(FeatureMap { layer_name, stride, channels, height, width, data })
    }

    /// All-zero map.
    pub fn zeros(layer_name: impl Into<String>, stride: u32, channels: usize, height: usize, width: usize) -> Result<Self, FormatError> {
        FeatureMap::new(layer_name, stride, channels, height, width, vec![0.0; channels * height * width])
    }

    pub fn layer_name(&self) -> &str {
        &self.layer_name
    }

    pub fn stride(&self) -> u32 {
        self.stride
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    /// Row-major plane of channel `c`.
    pub fn plane(&self, c: usize) -> &[f32] {
        let n = self.height * self.width;
        &self.data[c * n..(c + 1) * n]
    }

    pub fn get(&self, c: usize, row: usize, col: usize) -> f32 {
        self.data[(c * self.height + row) * self.width + col]
    }
}

/// Per-pixel semantic class indices at image resolution.
#[derive(Debug, Clone, PartialEq)]
pub struct LabelMap {
    height: usize,
    width: usize,
    data: Vec<u8>,
}

impl LabelMap {
    pub fn new(height: usize, width: usize, data: Vec<u8>) -> Result<Self, FormatError> {
        if height == 0 || width == 0 || data.len() != height * width {
            return Err(FormatError::DimMismatch(format!("label map: {} values for {height}x{width}", data.len())));
        }
        if let Some(index) = data.iter().position(|&v| v > MAX_LABEL) {
            return Err(FormatError::LabelRange { index, value: data[index] });
        }
        Ok(LabelMap { height, width, data })
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn data(&self) -> &[u8] {
        &self.data
    }

    pub fn get(&self, row: usize, col: usize) -> u8 {
        self.data[row * self.width + col]
    }
}

/// Per-pixel edge response in `[0, 1]` at image resolution.
#[derive(Debug, Clone, PartialEq)]
pub struct EdgeMap {
    height: usize,
    width: usize,
    data: Vec<f32>,
}

impl EdgeMap {
    pub fn new(height: usize, width: usize, data: Vec<f32>) -> Result<Self, FormatError> {
        if height == 0 || width == 0 || data.len() != height * width {
            return Err(FormatError::DimMismatch(format!("edge map: {} values for {height}x{width}", data.len())));
        }
        // NaN fails the range test too
        if let Some(index) = data.iter().position(|v| !(0.0..=1.0).contains(v)) {
            return Err(FormatError::EdgeRange { index, value: data[index] });
        }
        Ok(EdgeMap { height, width, data })
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn get(&self, row: usize, col: usize) -> f32 {
        self.data[row * self.width + col]
    }
}

/// Everything the head consumes for one image.
#[derive(Debug, Clone, PartialEq)]
pub struct ImageRecord {
    pub image_id: String,
    pub image_w: usize,
    pub image_h: usize,
    pub maps: BTreeMap<String, FeatureMap>,
    pub labels: Option<LabelMap>,
    pub edges: Option<EdgeMap>,
}

impl ImageRecord {
    /// Builds a record and checks that every map covers the image.
    pub fn new(
        image_id: impl Into<String>,
        image_w: usize,
        image_h: usize,
        maps: impl IntoIterator<Item = FeatureMap>,
        labels: Option<LabelMap>,
        edges: Option<EdgeMap>,
    ) -> Result<Self, FormatError> {
        let rec = ImageRecord {
            image_id: image_id.into(),
            image_w,
            image_h,
            maps: maps.into_iter().map(|m| (m.layer_name.clone(), m)).collect(),
            labels,
            edges,
        };
        rec.validate()?;
        Ok(rec)
    }

    pub fn validate(&self) -> Result<(), FormatError> {
        if self.image_w == 0 || self.image_h == 0 {
            return Err(FormatError::Record(format!("image {} has empty extent", self.image_id)));
        }
        for m in self.maps.values() {
            let s = m.stride as usize;
            if s * m.width + s < self.image_w || s * m.height + s < self.image_h {
                return Err(FormatError::DimMismatch(format!(
                    "image {}: layer {} ({}x{} at stride {s}) does not cover {}x{}",
                    self.image_id, m.layer_name, m.height, m.width, self.image_w, self.image_h
                )));
            }
        }
        if let Some(l) = &self.labels {
            if l.width + 1 < self.image_w || l.height + 1 < self.image_h {
                return Err(FormatError::DimMismatch(format!("image {}: label map does not cover the image", self.image_id)));
            }
        }
        if let Some(e) = &self.edges {
            if e.width + 1 < self.image_w || e.height + 1 < self.image_h {
                return Err(FormatError::DimMismatch(format!("image {}: edge map does not cover the image", self.image_id)));
            }
        }
        Ok(())
    }

    pub fn layer(&self, name: &str) -> Option<&FeatureMap> {
        self.maps.get(name)
    }
}
