//! Sample and dataset types plus the on-disk dataset layout:
//! `manifest.jsonl` (one JSON object per sample) next to an `images/`
//! directory of `PSTEN001` tensors, and P6 PPM debug dumps.

use std::io::{BufRead, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BBox {
    pub x: f32,
    pub y: f32,
    pub w: f32,
    pub h: f32,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Keypoint {
    /// Part id in `1..=M`.
    pub id: usize,
    pub x: f32,
    pub y: f32,
    pub visible: bool,
}

/// One annotated image: pixels in `[3,S,S]`, a bounding box, M keypoints
/// (one per part, invisible when occluded), and a class label.
#[derive(Debug, Clone)]
pub struct Sample {
    pub image: Tensor<f32>,
    pub bbox: BBox,
    pub keypoints: Vec<Keypoint>,
    pub label: usize,
}

impl Sample {
    pub fn visible_keypoints(&self) -> impl Iterator<Item = &Keypoint> {
        self.keypoints.iter().filter(|k| k.visible)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Test,
}

#[derive(Debug, Clone)]
pub struct Dataset {
    pub num_classes: usize,
    pub num_parts: usize,
    pub image_side: usize,
    pub samples: Vec<Sample>,
    /// Split tag per sample, parallel to `samples`.
    pub splits: Vec<Split>,
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn indices_of(&self, split: Split) -> Vec<usize> {
        (0..self.samples.len()).filter(|&i| self.splits[i] == split).collect()
    }

    pub fn validate(&self) -> Result<()> {
        for (i, s) in self.samples.iter().enumerate() {
            if s.label >= self.num_classes {
                return Err(Error::Annotation(format!(
                    "sample {i}: label {} out of range for {} classes",
                    s.label, self.num_classes
                )));
            }
            if s.keypoints.len() != self.num_parts {
                return Err(Error::Annotation(format!(
                    "sample {i}: expected {} keypoints, got {}",
                    self.num_parts,
                    s.keypoints.len()
                )));
            }
            for k in &s.keypoints {
                if k.id < 1 || k.id > self.num_parts {
                    return Err(Error::Annotation(format!(
                        "sample {i}: part id {} out of [1..{}]",
                        k.id, self.num_parts
                    )));
                }
            }
        }
        Ok(())
    }
}

#[derive(Debug, Serialize, Deserialize)]
struct ManifestHeader {
    schema: String,
    num_classes: usize,
    num_parts: usize,
    image_side: usize,
    count: usize,
}

#[derive(Debug, Serialize, Deserialize)]
struct ManifestRow {
    file: String,
    label: usize,
    split: Split,
    bbox: BBox,
    keypoints: Vec<Keypoint>,
}

const MANIFEST_SCHEMA: &str = "dataset/1";

/// Write `manifest.jsonl` + `images/*.pst` into `dir` (created if needed).
pub fn save_dataset(dataset: &Dataset, dir: &Path) -> Result<()> {
    dataset.validate()?;
    let images = dir.join("images");
    std::fs::create_dir_all(&images)?;
    let mut manifest = std::io::BufWriter::new(std::fs::File::create(dir.join("manifest.jsonl"))?);
    let header = ManifestHeader {
        schema: MANIFEST_SCHEMA.to_string(),
        num_classes: dataset.num_classes,
        num_parts: dataset.num_parts,
        image_side: dataset.image_side,
        count: dataset.samples.len(),
    };
    serde_json::to_writer(&mut manifest, &header)?;
    manifest.write_all(b"\n")?;
    for (i, sample) in dataset.samples.iter().enumerate() {
        let file = format!("images/s{i:06}.pst");
        sample.image.save(&dir.join(&file))?;
        let row = ManifestRow {
            file,
            label: sample.label,
            split: dataset.splits[i],
            bbox: sample.bbox,
            keypoints: sample.keypoints.clone(),
        };
        serde_json::to_writer(&mut manifest, &row)?;
        manifest.write_all(b"\n")?;
    }
    Ok(())
}

pub fn load_dataset(dir: &Path) -> Result<Dataset> {
    let path = dir.join("manifest.jsonl");
    let file = std::fs::File::open(&path)
        .map_err(|e| Error::Input(format!("cannot open {}: {e}", path.display())))?;
    let mut lines = std::io::BufReader::new(file).lines();
    let header_line = lines
        .next()
        .ok_or_else(|| Error::Input("empty dataset manifest".into()))??;
    let header: ManifestHeader = serde_json::from_str(&header_line)?;
    if header.schema != MANIFEST_SCHEMA {
        return Err(Error::Input(format!(
            "unsupported dataset schema {:?}, expected {MANIFEST_SCHEMA:?}",
            header.schema
        )));
    }
    let mut samples = Vec::with_capacity(header.count);
    let mut splits = Vec::with_capacity(header.count);
    for line in lines {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let row: ManifestRow = serde_json::from_str(&line)?;
        let image = Tensor::load(&dir.join(&row.file))?;
        if image.shape() != [3, header.image_side, header.image_side] {
            return Err(Error::Input(format!(
                "image {} has shape {:?}, expected [3,{},{}]",
                row.file,
                image.shape(),
                header.image_side,
                header.image_side
            )));
        }
        samples.push(Sample { image, bbox: row.bbox, keypoints: row.keypoints, label: row.label });
        splits.push(row.split);
    }
    if samples.len() != header.count {
        return Err(Error::Input(format!(
            "manifest declares {} samples, found {}",
            header.count,
            samples.len()
        )));
    }
    let dataset = Dataset {
        num_classes: header.num_classes,
        num_parts: header.num_parts,
        image_side: header.image_side,
        samples,
        splits,
    };
    dataset.validate()?;
    Ok(dataset)
}

/// Binary P6 PPM of a `[3,S,S]` float image with values clamped to [0,1].
pub fn write_ppm<W: Write>(image: &Tensor<f32>, w: &mut W) -> Result<()> {
    let shape = image.shape();
    if shape.len() != 3 || shape[0] != 3 {
        return Err(Error::Dim(format!("ppm wants [3,H,W], got {shape:?}")));
    }
    let (h, wd) = (shape[1], shape[2]);
    write!(w, "P6\n{wd} {h}\n255\n")?;
    let data = image.data();
    let plane = h * wd;
    let mut buf = Vec::with_capacity(plane * 3);
    for p in 0..plane {
        for c in 0..3 {
            let v = data[c * plane + p].clamp(0.0, 1.0);
            buf.push((v * 255.0).round() as u8);
        }
    }
    w.write_all(&buf)?;
    Ok(())
}

pub fn save_ppm(image: &Tensor<f32>, path: &Path) -> Result<()> {
    let mut f = std::io::BufWriter::new(std::fs::File::create(path)?);
    write_ppm(image, &mut f)
}

/// Pixel crop of a `[3,S,S]` image, window clamped inside the canvas.
pub fn crop_image_patch(image: &Tensor<f32>, cy: f32, cx: f32, side: usize) -> Result<Tensor<f32>> {
    let shape = image.shape();
    let (h, w) = (shape[1], shape[2]);
    if side > h || side > w {
        return Err(Error::Param(format!("patch side {side} exceeds image {h}x{w}")));
    }
    let y0 = (cy.round() as isize - side as isize / 2).clamp(0, (h - side) as isize) as usize;
    let x0 = (cx.round() as isize - side as isize / 2).clamp(0, (w - side) as isize) as usize;
    let mut out = Tensor::zeros(&[3, side, side]);
    for c in 0..3 {
        for dy in 0..side {
            for dx in 0..side {
                let v = image.at(&[c, y0 + dy, x0 + dx]);
                out.set(&[c, dy, dx], v);
            }
        }
    }
    Ok(out)
}
