//! Receptive-field arithmetic over a kernel/stride/padding chain.
//!
//! Every feature-map unit of a convolutional stack sees a fixed square of
//! input pixels; this module computes that square's side, the cumulative
//! stride between neighboring units, and the input-pixel center of unit
//! (0,0) — the three numbers needed to map grid coordinates back to pixels.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct LayerGeom {
    pub kernel: usize,
    pub stride: usize,
    #[serde(default)]
    pub pad: usize,
}

impl LayerGeom {
    pub fn new(kernel: usize, stride: usize, pad: usize) -> Self {
        LayerGeom { kernel, stride, pad }
    }
}

/// A chain of square kernel/stride/pad layers applied to a square input.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NetworkGeometry {
    pub layers: Vec<LayerGeom>,
    pub input_side: usize,
}

/// Receptive-field summary at one layer of the chain.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct FieldInfo {
    /// Receptive-field side in input pixels.
    pub rf: usize,
    /// Cumulative stride: input pixels between horizontally adjacent units.
    pub stride: usize,
    /// Input-pixel center of output unit (0,0) on each axis.
    pub offset: f64,
    /// Spatial side of the feature map at this layer.
    pub out_side: usize,
}

impl NetworkGeometry {
    pub fn new(layers: Vec<LayerGeom>, input_side: usize) -> Result<Self> {
        let geom = NetworkGeometry { layers, input_side };
        geom.validate()?;
        Ok(geom)
    }

    pub fn validate(&self) -> Result<()> {
        if self.layers.is_empty() {
            return Err(Error::Config("geometry needs at least one layer".into()));
        }
        if self.input_side == 0 {
            return Err(Error::Config("geometry input side must be positive".into()));
        }
        let mut side = self.input_side;
        for (i, l) in self.layers.iter().enumerate() {
            if l.kernel < 1 || l.stride < 1 {
                return Err(Error::Config(format!(
                    "layer {i}: kernel and stride must be >= 1 (kernel {}, stride {})",
                    l.kernel, l.stride
                )));
            }
            let padded = side + 2 * l.pad;
            if l.kernel > padded {
                return Err(Error::Config(format!(
                    "layer {i}: kernel {} exceeds padded side {padded}",
                    l.kernel
                )));
            }
            side = (padded - l.kernel) / l.stride + 1;
            if side < 1 {
                return Err(Error::Config(format!("layer {i}: output side collapses to zero")));
            }
        }
        Ok(())
    }

    /// Receptive field, cumulative stride, unit-(0,0) center, and map side
    /// after the layer at `layer_index` (inclusive).
    pub fn field(&self, layer_index: usize) -> Result<FieldInfo> {
        if layer_index >= self.layers.len() {
            return Err(Error::Param(format!(
                "layer index {layer_index} out of range ({} layers)",
                self.layers.len()
            )));
        }
        let mut rf = 1usize;
        let mut jump = 1usize;
        let mut start = 0.0f64;
        let mut side = self.input_side;
        for l in &self.layers[..=layer_index] {
            rf += (l.kernel - 1) * jump;
            start += ((l.kernel as f64 - 1.0) / 2.0 - l.pad as f64) * jump as f64;
            jump *= l.stride;
            side = (side + 2 * l.pad - l.kernel) / l.stride + 1;
        }
        Ok(FieldInfo { rf, stride: jump, offset: start, out_side: side })
    }

    /// Summary at the final layer.
    pub fn output_field(&self) -> Result<FieldInfo> {
        self.field(self.layers.len() - 1)
    }

    /// Effective receptive field of a `crop_side x crop_side` block of units
    /// at the given layer: the field of one unit widened by the strides
    /// between the block's first and last units.
    pub fn crop_receptive_field(&self, layer_index: usize, crop_side: usize) -> Result<usize> {
        if crop_side < 1 {
            return Err(Error::Param("crop side must be >= 1".into()));
        }
        let f = self.field(layer_index)?;
        Ok(f.rf + f.stride * (crop_side - 1))
    }

    /// Input-pixel center of grid unit `(h, w)` of the final feature map.
    pub fn grid_to_pixel(&self, h: usize, w: usize) -> Result<(f64, f64)> {
        let f = self.output_field()?;
        Ok((
            f.offset + (f.stride * h) as f64,
            f.offset + (f.stride * w) as f64,
        ))
    }
}

/// Receptive-field side, cumulative stride, and unit-(0,0) center at one
/// layer of the chain.
pub fn receptive_field(geom: &NetworkGeometry, layer_index: usize) -> Result<(usize, usize, f64)> {
    let f = geom.field(layer_index)?;
    Ok((f.rf, f.stride, f.offset))
}

/// The conv1..conv5 kernel/stride chain of the classic seven-layer reference
/// network (convolutions and max pools, no padding): receptive field 163,
/// cumulative stride 16 at the last layer.
pub fn reference_conv5_chain(input_side: usize) -> NetworkGeometry {
    NetworkGeometry {
        layers: vec![
            LayerGeom::new(11, 4, 0), // conv1
            LayerGeom::new(3, 2, 0),  // pool1
            LayerGeom::new(5, 1, 0),  // conv2
            LayerGeom::new(3, 2, 0),  // pool2
            LayerGeom::new(3, 1, 0),  // conv3
            LayerGeom::new(3, 1, 0),  // conv4
            LayerGeom::new(3, 1, 0),  // conv5
        ],
        input_side,
    }
}
