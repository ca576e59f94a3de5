//! The "where pathway": a fully convolutional network trained to label every
//! feature-map cell with the part whose keypoint it covers, plus the
//! inference side (Gaussian smoothing and thresholded per-part argmax) and
//! the dense label-map construction that supervises it.

use serde::{Deserialize, Serialize};

use crate::data::Keypoint;
use crate::error::{Error, Result};
use crate::geometry::{LayerGeom, NetworkGeometry};
use crate::tensor::{ops, randn_scaled, NodeId, Scalar, Tape, Tensor};

/// Dense part labels for one image at the FCN output resolution.
/// Cell values are in `0..=M`, 0 meaning background.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct LabelMap {
    h: usize,
    w: usize,
    grid: Vec<u32>,
}

impl LabelMap {
    pub fn new(h: usize, w: usize, grid: Vec<u32>, num_parts: usize) -> Result<Self> {
        if grid.len() != h * w {
            return Err(Error::Dim(format!("label grid must hold {} cells, got {}", h * w, grid.len())));
        }
        if let Some(&bad) = grid.iter().find(|&&v| v as usize > num_parts) {
            return Err(Error::Annotation(format!("label {bad} out of [0..{num_parts}]")));
        }
        Ok(LabelMap { h, w, grid })
    }

    pub fn dims(&self) -> (usize, usize) {
        (self.h, self.w)
    }

    pub fn grid(&self) -> &[u32] {
        &self.grid
    }

    pub fn at(&self, h: usize, w: usize) -> u32 {
        self.grid[h * self.w + w]
    }

    /// Count of cells labeled with the given part.
    pub fn count_of(&self, part_id: usize) -> usize {
        self.grid.iter().filter(|&&v| v as usize == part_id).count()
    }
}

/// `(M+1)` per-part score maps; channel 0 is background. After construction
/// through [`FcnModel::infer_heatmap`] the channel axis is softmax-normalized
/// at every cell.
#[derive(Debug, Clone)]
pub struct HeatmapStack {
    num_parts: usize,
    scores: Tensor<f32>,
}

impl HeatmapStack {
    pub fn new(num_parts: usize, scores: Tensor<f32>) -> Result<Self> {
        let shape = scores.shape();
        if shape.len() != 3 || shape[0] != num_parts + 1 {
            return Err(Error::Dim(format!(
                "heatmap stack must be [{},H,W], got {:?}",
                num_parts + 1,
                shape
            )));
        }
        Ok(HeatmapStack { num_parts, scores })
    }

    pub fn num_parts(&self) -> usize {
        self.num_parts
    }

    pub fn dims(&self) -> (usize, usize) {
        (self.scores.shape()[1], self.scores.shape()[2])
    }

    pub fn scores(&self) -> &Tensor<f32> {
        &self.scores
    }

    pub fn channel(&self, c: usize) -> &[f32] {
        let (h, w) = self.dims();
        &self.scores.data()[c * h * w..(c + 1) * h * w]
    }
}

/// Detected grid location of every part: either a cell or missing. Part c is
/// entry c-1.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PartLocations {
    entries: Vec<Option<(usize, usize)>>,
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(untagged)]
enum PartLocJson {
    Present { id: usize, h: usize, w: usize },
    Missing { id: usize, missing: bool },
}

#[derive(Debug, Serialize, Deserialize)]
struct PartLocsJson {
    parts: Vec<PartLocJson>,
}

impl PartLocations {
    pub fn new(entries: Vec<Option<(usize, usize)>>) -> Self {
        PartLocations { entries }
    }

    pub fn all_missing(num_parts: usize) -> Self {
        PartLocations { entries: vec![None; num_parts] }
    }

    pub fn num_parts(&self) -> usize {
        self.entries.len()
    }

    /// Location of part `id` (1-based), `None` when missing.
    pub fn get(&self, id: usize) -> Option<(usize, usize)> {
        self.entries.get(id - 1).copied().flatten()
    }

    pub fn set(&mut self, id: usize, loc: Option<(usize, usize)>) {
        self.entries[id - 1] = loc;
    }

    pub fn entries(&self) -> &[Option<(usize, usize)>] {
        &self.entries
    }

    pub fn present_ids(&self) -> impl Iterator<Item = usize> + '_ {
        self.entries.iter().enumerate().filter_map(|(i, e)| e.map(|_| i + 1))
    }

    pub fn to_json(&self) -> serde_json::Value {
        let parts = self
            .entries
            .iter()
            .enumerate()
            .map(|(i, e)| match e {
                Some((h, w)) => PartLocJson::Present { id: i + 1, h: *h, w: *w },
                None => PartLocJson::Missing { id: i + 1, missing: true },
            })
            .collect();
        serde_json::to_value(PartLocsJson { parts }).expect("serializable")
    }

    pub fn from_json(value: &serde_json::Value) -> Result<Self> {
        let parsed: PartLocsJson = serde_json::from_value(value.clone())?;
        let mut entries = vec![None; parsed.parts.len()];
        for p in parsed.parts {
            match p {
                PartLocJson::Present { id, h, w } => {
                    if id == 0 || id > entries.len() {
                        return Err(Error::Input(format!("part id {id} out of range")));
                    }
                    entries[id - 1] = Some((h, w));
                }
                PartLocJson::Missing { id, .. } => {
                    if id == 0 || id > entries.len() {
                        return Err(Error::Input(format!("part id {id} out of range")));
                    }
                    entries[id - 1] = None;
                }
            }
        }
        Ok(PartLocations { entries })
    }
}

/// Label every cell of the FCN output grid with the id of its nearest
/// visible keypoint, provided the cell's receptive-field square and the
/// keypoint-centered square of the same side overlap by at least
/// `overlap_threshold`; everything else is background.
///
/// Overlap of two axis-aligned squares of side `s` whose centers differ by
/// `(dx, dy)` is `max(0, 1-|dx|/s) * max(0, 1-|dy|/s)`.
pub fn build_label_map(
    keypoints: &[Keypoint],
    num_parts: usize,
    geom: &NetworkGeometry,
    overlap_threshold: f64,
) -> Result<LabelMap> {
    if !(overlap_threshold > 0.0 && overlap_threshold <= 1.0) {
        return Err(Error::Param(format!(
            "overlap threshold must be in (0,1], got {overlap_threshold}"
        )));
    }
    let side = geom.input_side as f32;
    for k in keypoints {
        if k.id < 1 || k.id > num_parts {
            return Err(Error::Annotation(format!("part id {} out of [1..{num_parts}]", k.id)));
        }
        if k.visible && !(k.x >= 0.0 && k.x < side && k.y >= 0.0 && k.y < side) {
            return Err(Error::Annotation(format!(
                "visible keypoint {} at ({}, {}) outside {side}x{side} image",
                k.id, k.x, k.y
            )));
        }
    }
    let field = geom.output_field()?;
    let s = field.rf as f64;
    let (h, w) = (field.out_side, field.out_side);
    let mut grid = vec![0u32; h * w];
    for gy in 0..h {
        for gx in 0..w {
            let cy = field.offset + (field.stride * gy) as f64;
            let cx = field.offset + (field.stride * gx) as f64;
            // nearest visible keypoint, ties to the smallest part id
            let mut best: Option<(f64, usize, f64, f64)> = None;
            for k in keypoints.iter().filter(|k| k.visible) {
                let dy = (k.y as f64 - cy).abs();
                let dx = (k.x as f64 - cx).abs();
                let dist = (dx * dx + dy * dy).sqrt();
                let better = match &best {
                    None => true,
                    Some((bd, bid, _, _)) => dist < *bd || (dist == *bd && k.id < *bid),
                };
                if better {
                    best = Some((dist, k.id, dx, dy));
                }
            }
            if let Some((_, id, dx, dy)) = best {
                let overlap = (1.0 - dx / s).max(0.0) * (1.0 - dy / s).max(0.0);
                if overlap >= overlap_threshold {
                    grid[gy * w + gx] = id as u32;
                }
            }
        }
    }
    LabelMap::new(h, w, grid, num_parts)
}

/// Sum over all grid positions of the per-position channel-softmax negative
/// log likelihood of the labeled channel. Returns the loss and the softmax
/// probabilities. Gradients flow through [`Tape::spatial_softmax_loss`].
pub fn spatial_softmax_loss<T: Scalar>(logits: &Tensor<T>, labels: &LabelMap) -> Result<(T, Tensor<T>)> {
    let shape = logits.shape();
    if shape.len() != 3 {
        return Err(Error::Dim(format!("logits must be [C,H,W], got {shape:?}")));
    }
    let (h, w) = labels.dims();
    if shape[1] != h || shape[2] != w {
        return Err(Error::Dim(format!(
            "logits grid {}x{} does not match label map {h}x{w}",
            shape[1], shape[2]
        )));
    }
    let batched = logits.reshaped(&[1, shape[0], shape[1], shape[2]])?;
    let (loss, softmax) = ops::spatial_softmax_loss_forward(&batched, &[labels.grid()])?;
    Ok((loss, softmax.reshaped(shape)?))
}

/// Normalized truncated Gaussian on a `(2*radius+1)^2` grid, summing to 1.
pub fn gaussian_kernel(sigma: f64, radius: usize) -> Result<Vec<f64>> {
    if sigma <= 0.0 {
        return Err(Error::Param(format!("sigma must be > 0, got {sigma}")));
    }
    let side = 2 * radius + 1;
    let mut k = vec![0.0f64; side * side];
    let mut total = 0.0;
    for dy in 0..side {
        for dx in 0..side {
            let y = dy as f64 - radius as f64;
            let x = dx as f64 - radius as f64;
            let v = (-(x * x + y * y) / (2.0 * sigma * sigma)).exp();
            k[dy * side + dx] = v;
            total += v;
        }
    }
    for v in &mut k {
        *v /= total;
    }
    Ok(k)
}

/// Per-channel 2-D convolution with a normalized truncated Gaussian; output
/// has the same size via zero padding. `radius = 0` is the identity.
pub fn smooth(heat: &HeatmapStack, sigma: f64, radius: usize) -> Result<HeatmapStack> {
    let kernel = gaussian_kernel(sigma, radius)?;
    let (h, w) = heat.dims();
    let channels = heat.num_parts + 1;
    let side = 2 * radius + 1;
    let mut out = vec![0.0f32; channels * h * w];
    for c in 0..channels {
        let src = heat.channel(c);
        let dst = &mut out[c * h * w..(c + 1) * h * w];
        for y in 0..h {
            for x in 0..w {
                let mut acc = 0.0f64;
                for dy in 0..side {
                    for dx in 0..side {
                        let sy = y as isize + dy as isize - radius as isize;
                        let sx = x as isize + dx as isize - radius as isize;
                        if sy < 0 || sx < 0 || sy >= h as isize || sx >= w as isize {
                            continue;
                        }
                        acc += kernel[dy * side + dx] * src[sy as usize * w + sx as usize] as f64;
                    }
                }
                dst[y * w + x] = acc as f32;
            }
        }
    }
    HeatmapStack::new(heat.num_parts, Tensor::new(&[channels, h, w], out)?)
}

/// One detected part: grid cell plus its peak smoothed response.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PartPeak {
    pub h: usize,
    pub w: usize,
    pub score: f32,
}

/// Smooth the stack, then per part channel take the argmax cell; parts whose
/// peak response does not exceed `mu` are missing. Ties break to the
/// smallest (h, w) in row-major order. The background channel does not
/// compete.
pub fn infer_parts_scored(
    heat: &HeatmapStack,
    sigma: f64,
    radius: usize,
    mu: f64,
) -> Result<Vec<Option<PartPeak>>> {
    let smoothed = smooth(heat, sigma, radius)?;
    let (h, w) = smoothed.dims();
    let mut out = Vec::with_capacity(heat.num_parts);
    for part in 1..=heat.num_parts {
        let ch = smoothed.channel(part);
        let mut best = ch[0];
        let mut best_at = 0usize;
        for (i, &v) in ch.iter().enumerate() {
            if v > best {
                best = v;
                best_at = i;
            }
        }
        if (best as f64) > mu {
            out.push(Some(PartPeak { h: best_at / w, w: best_at % w, score: best }));
        } else {
            out.push(None);
        }
    }
    let _ = h;
    Ok(out)
}

/// [`infer_parts_scored`] without the scores.
pub fn infer_parts(heat: &HeatmapStack, sigma: f64, radius: usize, mu: f64) -> Result<PartLocations> {
    let peaks = infer_parts_scored(heat, sigma, radius, mu)?;
    Ok(PartLocations::new(peaks.into_iter().map(|p| p.map(|p| (p.h, p.w))).collect()))
}

// ---------------------------------------------------------------------------
// FCN model
// ---------------------------------------------------------------------------

/// One layer of the convolutional trunk shared by the localization and
/// classification networks.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum TrunkLayer {
    Conv { out_channels: usize, kernel: usize, stride: usize, pad: usize },
    MaxPool { kernel: usize, stride: usize },
}

/// Structure of the localization network: a conv/pool trunk ending in an
/// optional hidden 1x1 layer and a 1x1 classification layer with `M+1`
/// output channels.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FcnConfig {
    pub input_side: usize,
    pub in_channels: usize,
    pub trunk: Vec<TrunkLayer>,
    /// Channel width of the hidden 1x1 layer; `None` drops the layer.
    pub hidden_channels: Option<usize>,
    pub num_parts: usize,
}

impl FcnConfig {
    /// Desk-scale default: a four-conv chain with cumulative stride 4 that
    /// maps a 64x64 input to a 13x13 grid.
    pub fn desk_default(num_parts: usize) -> Self {
        FcnConfig {
            input_side: 64,
            in_channels: 3,
            trunk: vec![
                TrunkLayer::Conv { out_channels: 8, kernel: 5, stride: 2, pad: 2 },
                TrunkLayer::Conv { out_channels: 16, kernel: 3, stride: 1, pad: 1 },
                TrunkLayer::Conv { out_channels: 32, kernel: 3, stride: 2, pad: 0 },
                TrunkLayer::Conv { out_channels: 32, kernel: 3, stride: 1, pad: 0 },
            ],
            hidden_channels: Some(64),
            num_parts,
        }
    }

    /// Geometry of the trunk (1x1 head layers do not change it).
    pub fn geometry(&self) -> Result<NetworkGeometry> {
        let layers = self
            .trunk
            .iter()
            .map(|l| match *l {
                TrunkLayer::Conv { kernel, stride, pad, .. } => LayerGeom::new(kernel, stride, pad),
                TrunkLayer::MaxPool { kernel, stride } => LayerGeom::new(kernel, stride, 0),
            })
            .collect();
        NetworkGeometry::new(layers, self.input_side)
    }

    pub fn validate(&self) -> Result<()> {
        if self.num_parts < 1 {
            return Err(Error::Config("need at least one part".into()));
        }
        if self.in_channels < 1 {
            return Err(Error::Config("input channels must be >= 1".into()));
        }
        for (i, l) in self.trunk.iter().enumerate() {
            if let TrunkLayer::Conv { out_channels, .. } = l {
                if *out_channels < 1 {
                    return Err(Error::Config(format!("trunk layer {i} has zero channels")));
                }
            }
        }
        if self.hidden_channels == Some(0) {
            return Err(Error::Config("hidden 1x1 layer must have channels".into()));
        }
        self.geometry()?.validate()
    }

    pub fn output_side(&self) -> Result<usize> {
        Ok(self.geometry()?.output_field()?.out_side)
    }
}

#[derive(Debug, Clone)]
pub struct ConvLayer<T: Scalar> {
    pub weight: Tensor<T>,
    pub bias: Tensor<T>,
    pub stride: usize,
    pub pad: usize,
}

impl<T: Scalar> ConvLayer<T> {
    pub fn init<R: rand::Rng>(
        in_channels: usize,
        out_channels: usize,
        kernel: usize,
        stride: usize,
        pad: usize,
        rng: &mut R,
    ) -> Self {
        let fan_in = in_channels * kernel * kernel;
        ConvLayer {
            weight: randn_scaled(&[out_channels, in_channels, kernel, kernel], fan_in, rng),
            bias: Tensor::zeros(&[out_channels]),
            stride,
            pad,
        }
    }
}

#[derive(Debug, Clone)]
pub enum TrunkWeights<T: Scalar> {
    Conv(ConvLayer<T>),
    Pool { kernel: usize, stride: usize },
}

/// Localization network: trunk, optional hidden 1x1 layer, and a 1x1
/// classification layer producing `M+1` channels.
#[derive(Debug, Clone)]
pub struct FcnModel<T: Scalar> {
    pub config: FcnConfig,
    pub trunk: Vec<TrunkWeights<T>>,
    pub hidden: Option<ConvLayer<T>>,
    pub head: ConvLayer<T>,
}

/// Shared trunk builder, also used by the classification streams.
pub fn init_trunk<T: Scalar, R: rand::Rng>(
    in_channels: usize,
    trunk: &[TrunkLayer],
    rng: &mut R,
) -> (Vec<TrunkWeights<T>>, usize) {
    let mut layers = Vec::with_capacity(trunk.len());
    let mut channels = in_channels;
    for l in trunk {
        match *l {
            TrunkLayer::Conv { out_channels, kernel, stride, pad } => {
                layers.push(TrunkWeights::Conv(ConvLayer::init(
                    channels, out_channels, kernel, stride, pad, rng,
                )));
                channels = out_channels;
            }
            TrunkLayer::MaxPool { kernel, stride } => {
                layers.push(TrunkWeights::Pool { kernel, stride });
            }
        }
    }
    (layers, channels)
}

/// Run a trunk on the tape: conv layers are followed by relu, pools are max
/// pools. Parameters are bound as tape params and their ids appended to
/// `param_ids`.
pub fn trunk_forward<T: Scalar>(
    tape: &mut Tape<T>,
    layers: &[TrunkWeights<T>],
    input: NodeId,
    param_ids: &mut Vec<NodeId>,
) -> Result<NodeId> {
    let mut x = input;
    for layer in layers {
        match layer {
            TrunkWeights::Conv(conv) => {
                let w = tape.param(conv.weight.clone())?;
                let b = tape.param(conv.bias.clone())?;
                param_ids.push(w);
                param_ids.push(b);
                let c = tape.conv2d(x, w, b, conv.stride, conv.pad)?;
                x = tape.relu(c)?;
            }
            TrunkWeights::Pool { kernel, stride } => {
                x = tape.maxpool2d(x, *kernel, *stride)?;
            }
        }
    }
    Ok(x)
}

/// Inference-only trunk pass (no tape, no gradients).
pub fn trunk_infer<T: Scalar>(layers: &[TrunkWeights<T>], input: &Tensor<T>) -> Result<Tensor<T>> {
    let mut x = input.clone();
    for layer in layers {
        x = match layer {
            TrunkWeights::Conv(conv) => {
                let c = ops::conv2d_forward(&x, &conv.weight, &conv.bias, conv.stride, conv.pad)?;
                ops::relu_forward(&c)
            }
            TrunkWeights::Pool { kernel, stride } => ops::maxpool2d_forward(&x, *kernel, *stride)?.0,
        };
        x.assert_finite("trunk_infer")?;
    }
    Ok(x)
}

impl<T: Scalar> FcnModel<T> {
    pub fn init<R: rand::Rng>(config: FcnConfig, rng: &mut R) -> Result<Self> {
        config.validate()?;
        let (trunk, trunk_out) = init_trunk(config.in_channels, &config.trunk, rng);
        let (hidden, head_in) = match config.hidden_channels {
            Some(h) => (Some(ConvLayer::init(trunk_out, h, 1, 1, 0, rng)), h),
            None => (None, trunk_out),
        };
        let head = ConvLayer::init(head_in, config.num_parts + 1, 1, 1, 0, rng);
        Ok(FcnModel { config, trunk, hidden, head })
    }

    /// Forward to raw `[N, M+1, H, W]` logits on the tape, binding all
    /// parameters. Returns the logits node and the bound parameter ids in
    /// `named_tensors` order.
    pub fn forward_tape(&self, tape: &mut Tape<T>, input: NodeId) -> Result<(NodeId, Vec<NodeId>)> {
        let mut params = Vec::new();
        let mut x = trunk_forward(tape, &self.trunk, input, &mut params)?;
        if let Some(hidden) = &self.hidden {
            let w = tape.param(hidden.weight.clone())?;
            let b = tape.param(hidden.bias.clone())?;
            params.push(w);
            params.push(b);
            let c = tape.conv2d(x, w, b, 1, 0)?;
            x = tape.relu(c)?;
        }
        let w = tape.param(self.head.weight.clone())?;
        let b = tape.param(self.head.bias.clone())?;
        params.push(w);
        params.push(b);
        let logits = tape.conv2d(x, w, b, 1, 0)?;
        Ok((logits, params))
    }

    /// Raw logits for one `[C,S,S]` image, without a tape.
    pub fn infer_logits(&self, image: &Tensor<T>) -> Result<Tensor<T>> {
        let s = image.shape();
        if s.len() != 3 {
            return Err(Error::Dim(format!("image must be [C,S,S], got {s:?}")));
        }
        let batched = image.reshaped(&[1, s[0], s[1], s[2]])?;
        let mut x = trunk_infer(&self.trunk, &batched)?;
        if let Some(hidden) = &self.hidden {
            let c = ops::conv2d_forward(&x, &hidden.weight, &hidden.bias, 1, 0)?;
            x = ops::relu_forward(&c);
        }
        let logits = ops::conv2d_forward(&x, &self.head.weight, &self.head.bias, 1, 0)?;
        let shape = logits.shape().to_vec();
        logits.reshaped(&[shape[1], shape[2], shape[3]])
    }

    pub fn named_tensors(&self) -> Vec<(String, &Tensor<T>)> {
        let mut out = Vec::new();
        let mut conv_idx = 0;
        for layer in &self.trunk {
            if let TrunkWeights::Conv(c) = layer {
                conv_idx += 1;
                out.push((format!("trunk.conv{conv_idx}.weight"), &c.weight));
                out.push((format!("trunk.conv{conv_idx}.bias"), &c.bias));
            }
        }
        if let Some(h) = &self.hidden {
            out.push(("hidden.weight".to_string(), &h.weight));
            out.push(("hidden.bias".to_string(), &h.bias));
        }
        out.push(("head.weight".to_string(), &self.head.weight));
        out.push(("head.bias".to_string(), &self.head.bias));
        out
    }

    pub fn named_tensors_mut(&mut self) -> Vec<(String, &mut Tensor<T>)> {
        let mut out = Vec::new();
        let mut conv_idx = 0;
        for layer in &mut self.trunk {
            if let TrunkWeights::Conv(c) = layer {
                conv_idx += 1;
                out.push((format!("trunk.conv{conv_idx}.weight"), &mut c.weight));
                out.push((format!("trunk.conv{conv_idx}.bias"), &mut c.bias));
            }
        }
        if let Some(h) = &mut self.hidden {
            out.push(("hidden.weight".to_string(), &mut h.weight));
            out.push(("hidden.bias".to_string(), &mut h.bias));
        }
        out.push(("head.weight".to_string(), &mut self.head.weight));
        out.push(("head.bias".to_string(), &mut self.head.bias));
        out
    }
}

impl FcnModel<f32> {
    /// Softmax-normalized heatmaps for one image.
    pub fn infer_heatmap(&self, image: &Tensor<f32>) -> Result<HeatmapStack> {
        let logits = self.infer_logits(image)?;
        let shape = logits.shape().to_vec();
        let batched = logits.reshaped(&[1, shape[0], shape[1], shape[2]])?;
        let softmax = ops::spatial_softmax(&batched)?.reshaped(&shape)?;
        HeatmapStack::new(self.config.num_parts, softmax)
    }
}

/// Build the localization model from a validated config: a conv stack ending
/// in two 1x1 layers (hidden width, then `M+1` channels).
pub fn build_fcn<T: Scalar, R: rand::Rng>(config: FcnConfig, rng: &mut R) -> Result<FcnModel<T>> {
    FcnModel::init(config, rng)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn kp(id: usize, x: f32, y: f32, visible: bool) -> Keypoint {
        Keypoint { id, x, y, visible }
    }

    fn desk_geom() -> NetworkGeometry {
        FcnConfig::desk_default(5).geometry().unwrap()
    }

    #[test]
    fn desk_geometry_numbers() {
        let g = desk_geom();
        let f = g.output_field().unwrap();
        assert_eq!(f.out_side, 13);
        assert_eq!(f.stride, 4);
        assert_eq!(f.rf, 21);
        assert_eq!(f.offset, 6.0);
    }

    #[test]
    fn label_map_empty_without_visible_keypoints() {
        let geom = desk_geom();
        let m = build_label_map(&[kp(1, 30.0, 30.0, false)], 5, &geom, 0.5).unwrap();
        assert!(m.grid().iter().all(|&v| v == 0));
    }

    #[test]
    fn keypoint_at_unit_center_labels_that_unit() {
        let geom = desk_geom();
        // center of unit (3, 4): offset 6 + stride 4
        let (y, x) = (6.0 + 4.0 * 3.0, 6.0 + 4.0 * 4.0);
        let m = build_label_map(&[kp(2, x, y, true)], 5, &geom, 0.5).unwrap();
        assert_eq!(m.at(3, 4), 2);
    }

    #[test]
    fn label_map_rejects_bad_ids_and_positions() {
        let geom = desk_geom();
        assert!(build_label_map(&[kp(9, 10.0, 10.0, true)], 5, &geom, 0.5).is_err());
        assert!(build_label_map(&[kp(1, 300.0, 10.0, true)], 5, &geom, 0.5).is_err());
        assert!(build_label_map(&[kp(1, 10.0, 10.0, true)], 5, &geom, 0.0).is_err());
    }

    #[test]
    fn uniform_logits_loss_is_cells_times_log_channels() {
        let labels = LabelMap::new(3, 3, vec![0, 1, 2, 0, 1, 2, 0, 1, 2], 2).unwrap();
        let logits = Tensor::<f64>::zeros(&[3, 3, 3]);
        let (loss, softmax) = spatial_softmax_loss(&logits, &labels).unwrap();
        let expect = 9.0 * (3.0f64).ln();
        assert!((loss - expect).abs() < 1e-9, "{loss} vs {expect}");
        assert!(softmax.data().iter().all(|&p| (p - 1.0 / 3.0).abs() < 1e-12));
    }

    #[test]
    fn confident_logits_drive_loss_to_zero() {
        let labels = LabelMap::new(2, 2, vec![1, 0, 1, 0], 1).unwrap();
        let mut logits = Tensor::<f64>::zeros(&[2, 2, 2]);
        let (h, w) = labels.dims();
        for y in 0..h {
            for x in 0..w {
                let c = labels.at(y, x) as usize;
                logits.set(&[c, y, x], 50.0);
            }
        }
        let (loss, _) = spatial_softmax_loss(&logits, &labels).unwrap();
        assert!(loss < 1e-9, "loss {loss}");
    }

    #[test]
    fn smoothing_radius_zero_is_identity() {
        let heat = HeatmapStack::new(
            1,
            Tensor::from_fn(&[2, 4, 4], |i| (i as f32 * 0.33).sin().abs()),
        )
        .unwrap();
        let out = smooth(&heat, 1.0, 0).unwrap();
        assert_eq!(out.scores(), heat.scores());
    }

    #[test]
    fn smoothing_preserves_interior_spike_mass() {
        let mut scores = Tensor::<f32>::zeros(&[2, 9, 9]);
        scores.set(&[1, 4, 4], 1.0);
        let heat = HeatmapStack::new(1, scores).unwrap();
        let out = smooth(&heat, 1.0, 2).unwrap();
        let mass: f32 = out.channel(1).iter().sum();
        assert!((mass - 1.0).abs() < 0.02, "mass {mass}");
    }

    #[test]
    fn infer_finds_one_hot_peak_and_thresholds_uniform() {
        let mut scores = Tensor::<f32>::zeros(&[3, 8, 8]);
        scores.set(&[1, 3, 4], 1.0);
        // channel 2 uniform at 1/3 < mu
        for x in 0..8 {
            for y in 0..8 {
                scores.set(&[2, y, x], 1.0 / 3.0);
            }
        }
        let heat = HeatmapStack::new(2, scores).unwrap();
        let locs = infer_parts(&heat, 1.0, 0, 0.5).unwrap();
        assert_eq!(locs.get(1), Some((3, 4)));
        assert_eq!(locs.get(2), None);
    }

    #[test]
    fn part_locations_json_round_trip() {
        let locs = PartLocations::new(vec![Some((3, 4)), None, Some((0, 0))]);
        let json = locs.to_json();
        assert_eq!(
            serde_json::to_string(&json).unwrap(),
            r#"{"parts":[{"h":3,"id":1,"w":4},{"id":2,"missing":true},{"h":0,"id":3,"w":0}]}"#
        );
        assert_eq!(PartLocations::from_json(&json).unwrap(), locs);
    }

    #[test]
    fn fcn_shapes_at_desk_and_paper_scale() {
        let desk = FcnConfig::desk_default(5);
        assert_eq!(desk.output_side().unwrap(), 13);
        let model: FcnModel<f32> = build_fcn(desk, &mut crate::tests_support::rng(7)).unwrap();
        assert_eq!(model.head.weight.shape(), &[6, 64, 1, 1]);

        // M = 1 gives two output channels
        let tiny = FcnConfig { num_parts: 1, ..FcnConfig::desk_default(1) };
        let model: FcnModel<f32> = build_fcn(tiny, &mut crate::tests_support::rng(7)).unwrap();
        assert_eq!(model.head.weight.shape()[0], 2);

        // paper-scale chain: 454 input, five conv + two pool layers -> 27x27
        let paper = FcnConfig {
            input_side: 454,
            in_channels: 3,
            trunk: vec![
                TrunkLayer::Conv { out_channels: 96, kernel: 11, stride: 4, pad: 0 },
                TrunkLayer::MaxPool { kernel: 3, stride: 2 },
                TrunkLayer::Conv { out_channels: 256, kernel: 5, stride: 1, pad: 2 },
                TrunkLayer::MaxPool { kernel: 3, stride: 2 },
                TrunkLayer::Conv { out_channels: 384, kernel: 3, stride: 1, pad: 1 },
                TrunkLayer::Conv { out_channels: 384, kernel: 3, stride: 1, pad: 1 },
                TrunkLayer::Conv { out_channels: 256, kernel: 3, stride: 1, pad: 1 },
            ],
            hidden_channels: Some(512),
            num_parts: 15,
        };
        assert_eq!(paper.output_side().unwrap(), 27);
        paper.validate().unwrap();
    }

    #[test]
    fn fcn_infer_emits_normalized_heatmaps() {
        let mut rng = crate::tests_support::rng(3);
        let config = FcnConfig {
            input_side: 16,
            in_channels: 2,
            trunk: vec![TrunkLayer::Conv { out_channels: 4, kernel: 3, stride: 2, pad: 1 }],
            hidden_channels: Some(6),
            num_parts: 2,
        };
        let model: FcnModel<f32> = build_fcn(config, &mut rng).unwrap();
        let image = Tensor::from_fn(&[2, 16, 16], |i| ((i * 31 % 17) as f32) / 17.0 - 0.5);
        let heat = model.infer_heatmap(&image).unwrap();
        let (h, w) = heat.dims();
        assert_eq!((h, w), (8, 8));
        for p in 0..h * w {
            let total: f32 = (0..3).map(|c| heat.channel(c)[p]).sum();
            assert!((total - 1.0).abs() < 1e-5, "softmax sum {total}");
        }
    }
}
