//! Procedural "creature" generator. Classes share one body shape and
//! differ only through the fine texture stamped at each part anchor, so a
//! bounding-box-only classifier has little to work with at low resolution
//! while part-centered crops at full resolution stay separable.
//!
//! Each part stamp combines a part-specific envelope glyph (a shape that
//! identifies *which* part this is regardless of class — what the
//! localization network keys on) with a class-specific fill pattern (fine
//! two-tone texture with equal ink mass across patterns — what the
//! classifier keys on).

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::data::{BBox, Dataset, Keypoint, Sample, Split};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Number of distinct envelope glyphs; bounds the supported part count.
pub const MAX_PARTS: usize = 8;
/// Number of distinct fill patterns; bounds motif ids.
pub const NUM_MOTIFS: usize = 8;

const STAMP_HALF: isize = 5; // stamps are 11x11
const DARK: f32 = 0.12;
const LIGHT: f32 = 0.92;
const STROKE: f32 = 0.03;
const BODY: f32 = 0.55;
const BACKGROUND: f32 = 0.82;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PoseSpec {
    /// Maximum absolute rotation in radians.
    pub rotation: f64,
    pub scale_min: f64,
    pub scale_max: f64,
    /// Maximum absolute translation of the body center, in pixels.
    pub jitter: f64,
}

impl Default for PoseSpec {
    fn default() -> Self {
        PoseSpec { rotation: 0.25, scale_min: 0.9, scale_max: 1.1, jitter: 3.0 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CreatureSpec {
    pub num_classes: usize,
    pub num_parts: usize,
    pub image_side: usize,
    /// `motif_table[class][part]` selects the fill pattern stamped at that
    /// part's anchor.
    pub motif_table: Vec<Vec<usize>>,
    pub pose: PoseSpec,
    /// Per-part probability that the part is occluded (stamp omitted,
    /// keypoint marked invisible).
    pub occlusion_prob: f64,
}

/// Cyclic default table: class `c` stamps motif `(c + p) % NUM_MOTIFS` at
/// part `p`, so every class pair differs at every part.
pub fn default_motif_table(num_classes: usize, num_parts: usize) -> Vec<Vec<usize>> {
    (0..num_classes)
        .map(|c| (0..num_parts).map(|p| (c + p) % NUM_MOTIFS).collect())
        .collect()
}

impl CreatureSpec {
    /// Desk-scale default: 8 classes, 5 parts, 64x64 images.
    pub fn desk_default() -> Self {
        CreatureSpec {
            num_classes: 8,
            num_parts: 5,
            image_side: 64,
            motif_table: default_motif_table(8, 5),
            pose: PoseSpec::default(),
            occlusion_prob: 0.1,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.num_classes < 2 {
            return Err(Error::Config("need at least two classes".into()));
        }
        if self.num_parts < 1 || self.num_parts > MAX_PARTS {
            return Err(Error::Config(format!(
                "part count must be in [1..{MAX_PARTS}], got {}",
                self.num_parts
            )));
        }
        if self.image_side < 48 {
            return Err(Error::Config(format!(
                "image side must be >= 48 to fit the skeleton, got {}",
                self.image_side
            )));
        }
        if !(0.0..1.0).contains(&self.occlusion_prob) {
            return Err(Error::Config(format!(
                "occlusion probability must be in [0,1), got {}",
                self.occlusion_prob
            )));
        }
        let p = &self.pose;
        if !(p.scale_min > 0.0 && p.scale_min <= p.scale_max && p.rotation >= 0.0 && p.jitter >= 0.0) {
            return Err(Error::Config(format!("invalid pose ranges: {p:?}")));
        }
        if self.motif_table.len() != self.num_classes {
            return Err(Error::Config(format!(
                "motif table has {} rows for {} classes",
                self.motif_table.len(),
                self.num_classes
            )));
        }
        for (c, row) in self.motif_table.iter().enumerate() {
            if row.len() != self.num_parts {
                return Err(Error::Config(format!(
                    "motif row {c} has {} entries for {} parts",
                    row.len(),
                    self.num_parts
                )));
            }
            if let Some(&bad) = row.iter().find(|&&m| m >= NUM_MOTIFS) {
                return Err(Error::Config(format!("motif id {bad} out of [0..{NUM_MOTIFS})")));
            }
        }
        // every class pair must differ in at least one part motif
        for a in 0..self.num_classes {
            for b in a + 1..self.num_classes {
                if self.motif_table[a] == self.motif_table[b] {
                    return Err(Error::Config(format!(
                        "classes {a} and {b} have identical motifs and are indistinguishable"
                    )));
                }
            }
        }
        Ok(())
    }
}

/// splitmix64 finalizer; derives the per-sample stream from (seed, index) so
/// parallel generation cannot reorder randomness.
pub fn derive_seed(seed: u64, index: u64) -> u64 {
    let mut z = seed ^ index.wrapping_mul(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// `true` where the fill pattern paints the dark tone; all patterns use the
/// same 50% ink mass so mean luminance carries no class signal.
fn fill_is_dark(motif: usize, u: usize, v: usize) -> bool {
    match motif {
        0 => v % 2 == 0,                              // horizontal stripes, pitch 2
        1 => u % 2 == 0,                              // vertical stripes, pitch 2
        2 => (u + v) % 4 < 2,                         // diagonal bands
        3 => (u + 3 * 7 - v) % 4 < 2,                 // anti-diagonal bands
        4 => (u % 2) == (v % 2),                      // 1px checker
        5 => ((u / 2) % 2) == ((v / 2) % 2),          // 2px checker
        6 => v % 4 < 2,                               // horizontal bands, width 2
        7 => u % 4 < 2,                               // vertical bands, width 2
        _ => unreachable!("motif ids validated"),
    }
}

/// `true` where the part's envelope glyph paints its stroke, in stamp-local
/// coordinates `(du, dv)` in `[-5, 5]`.
fn envelope_is_stroke(part_index: usize, du: isize, dv: isize) -> bool {
    let (x, y) = (du as f64, dv as f64);
    let (ax, ay) = (x.abs(), y.abs());
    match part_index {
        0 => {
            let r = (x * x + y * y).sqrt();
            (4.0..=5.3).contains(&r) // ring
        }
        1 => ax.max(ay) >= 4.0,                      // square outline
        2 => {
            // triangle: apex up, base at the bottom
            let half_width = (y + 5.0).max(0.0) * 0.55;
            (ax - half_width).abs() <= 0.9 || (y >= 4.0 && ax <= half_width)
        }
        3 => ax <= 1.0 || ay <= 1.0,                 // plus
        4 => (ax - ay).abs() <= 1.0,                 // X
        5 => ay >= 4.0,                              // horizontal bars
        6 => ax >= 4.0,                              // vertical bars
        7 => (ax + ay - 5.0).abs() <= 1.0,           // diamond outline
        _ => unreachable!("part count validated"),
    }
}

struct Pose {
    theta: f64,
    scale: f64,
    cx: f64,
    cy: f64,
}

fn render_sample(spec: &CreatureSpec, class: usize, rng: &mut ChaCha8Rng) -> Sample {
    let s = spec.image_side;
    let sf = s as f64;
    let pose = Pose {
        theta: rng.random_range(-spec.pose.rotation..=spec.pose.rotation),
        scale: rng.random_range(spec.pose.scale_min..=spec.pose.scale_max),
        cx: sf / 2.0 + rng.random_range(-spec.pose.jitter..=spec.pose.jitter),
        cy: sf / 2.0 + rng.random_range(-spec.pose.jitter..=spec.pose.jitter),
    };
    let (sin_t, cos_t) = pose.theta.sin_cos();

    // body ellipse semi-axes and anchor radius scale with the canvas
    let semi_a = 0.20 * sf * pose.scale;
    let semi_b = 0.14 * sf * pose.scale;
    let anchor_r = 0.19 * sf * pose.scale;

    let mut image = Tensor::<f32>::zeros(&[3, s, s]);
    let plane = s * s;
    {
        let data = image.data_mut();
        for p in 0..plane {
            let px = (p % s) as f64 - pose.cx;
            let py = (p / s) as f64 - pose.cy;
            // rotate into body frame
            let bx = cos_t * px + sin_t * py;
            let by = -sin_t * px + cos_t * py;
            let inside = (bx / semi_a).powi(2) + (by / semi_b).powi(2) <= 1.0;
            let base = if inside { BODY } else { BACKGROUND };
            for c in 0..3 {
                data[c * plane + p] = base + rng.random_range(-0.03..0.03);
            }
        }
    }

    // part anchors on a ring around the body center, in pose frame
    let mut keypoints = Vec::with_capacity(spec.num_parts);
    let mut min_x = pose.cx - semi_a;
    let mut max_x = pose.cx + semi_a;
    let mut min_y = pose.cy - semi_b;
    let mut max_y = pose.cy + semi_b;
    for part in 0..spec.num_parts {
        let phi = -std::f64::consts::FRAC_PI_2
            + 2.0 * std::f64::consts::PI * part as f64 / spec.num_parts as f64;
        let (bx, by) = (anchor_r * phi.cos(), anchor_r * phi.sin());
        let ax = pose.cx + cos_t * bx - sin_t * by;
        let ay = pose.cy + sin_t * bx + cos_t * by;
        let occluded = rng.random_range(0.0..1.0) < spec.occlusion_prob;
        if !occluded {
            paint_stamp(&mut image, s, ax, ay, part, spec.motif_table[class][part]);
            min_x = min_x.min(ax - STAMP_HALF as f64);
            max_x = max_x.max(ax + STAMP_HALF as f64);
            min_y = min_y.min(ay - STAMP_HALF as f64);
            max_y = max_y.max(ay + STAMP_HALF as f64);
        }
        keypoints.push(Keypoint { id: part + 1, x: ax as f32, y: ay as f32, visible: !occluded });
    }

    let x0 = (min_x - 1.0).max(0.0);
    let y0 = (min_y - 1.0).max(0.0);
    let x1 = (max_x + 1.0).min(sf - 1.0);
    let y1 = (max_y + 1.0).min(sf - 1.0);
    Sample {
        image,
        bbox: BBox { x: x0 as f32, y: y0 as f32, w: (x1 - x0) as f32, h: (y1 - y0) as f32 },
        keypoints,
        label: class,
    }
}

fn paint_stamp(image: &mut Tensor<f32>, s: usize, ax: f64, ay: f64, part: usize, motif: usize) {
    let cx = ax.round() as isize;
    let cy = ay.round() as isize;
    let plane = s * s;
    let data = image.data_mut();
    for dv in -STAMP_HALF..=STAMP_HALF {
        for du in -STAMP_HALF..=STAMP_HALF {
            let px = cx + du;
            let py = cy + dv;
            if px < 0 || py < 0 || px >= s as isize || py >= s as isize {
                continue;
            }
            let mut color = None;
            if du.abs() <= 3 && dv.abs() <= 3 {
                let (u, v) = ((du + 3) as usize, (dv + 3) as usize);
                color = Some(if fill_is_dark(motif, u, v) { DARK } else { LIGHT });
            }
            if envelope_is_stroke(part, du, dv) {
                color = Some(STROKE);
            }
            if let Some(c) = color {
                let p = py as usize * s + px as usize;
                for ch in 0..3 {
                    data[ch * plane + p] = c;
                }
            }
        }
    }
}

/// Generate `n` samples, classes balanced round-robin, each sample's
/// randomness derived from `(seed, index)` so output is identical across
/// thread counts. All samples are tagged `Split::Train`; use [`split`] or
/// [`assign_splits`] afterwards.
pub fn generate(spec: &CreatureSpec, n: usize, seed: u64) -> Result<Dataset> {
    spec.validate()?;
    if n < spec.num_classes {
        return Err(Error::Param(format!(
            "need at least one sample per class: n = {n} < {} classes",
            spec.num_classes
        )));
    }
    let samples: Vec<Sample> = (0..n)
        .into_par_iter()
        .map(|i| {
            use rand::SeedableRng;
            let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, i as u64));
            render_sample(spec, i % spec.num_classes, &mut rng)
        })
        .collect();
    let dataset = Dataset {
        num_classes: spec.num_classes,
        num_parts: spec.num_parts,
        image_side: spec.image_side,
        splits: vec![Split::Train; samples.len()],
        samples,
    };
    dataset.validate()?;
    Ok(dataset)
}

/// Stratified split indices: per class, a seeded shuffle with
/// `round(train_fraction * n_c)` samples going to train.
pub fn split_indices(
    dataset: &Dataset,
    fractions: (f64, f64),
    seed: u64,
) -> Result<(Vec<usize>, Vec<usize>)> {
    let (ftrain, ftest) = fractions;
    if ftrain < 0.0 || ftest < 0.0 || (ftrain + ftest - 1.0).abs() > 1e-9 {
        return Err(Error::Param(format!(
            "split fractions must be non-negative and sum to 1, got ({ftrain}, {ftest})"
        )));
    }
    let mut per_class: Vec<Vec<usize>> = vec![Vec::new(); dataset.num_classes];
    for (i, s) in dataset.samples.iter().enumerate() {
        per_class[s.label].push(i);
    }
    if let Some(class) = per_class.iter().position(|v| v.len() < 2) {
        return Err(Error::Input(format!(
            "split error: class {class} has {} samples, need at least 2",
            per_class[class].len()
        )));
    }
    let mut train = Vec::new();
    let mut test = Vec::new();
    for (class, mut idxs) in per_class.into_iter().enumerate() {
        use rand::seq::SliceRandom;
        use rand::SeedableRng;
        let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, class as u64));
        idxs.shuffle(&mut rng);
        let n_train = (ftrain * idxs.len() as f64).round() as usize;
        train.extend_from_slice(&idxs[..n_train]);
        test.extend_from_slice(&idxs[n_train..]);
    }
    train.sort_unstable();
    test.sort_unstable();
    Ok((train, test))
}

/// Tag the dataset's samples in place with a stratified train/test split.
pub fn assign_splits(dataset: &mut Dataset, fractions: (f64, f64), seed: u64) -> Result<()> {
    let (train, test) = split_indices(dataset, fractions, seed)?;
    for &i in &train {
        dataset.splits[i] = Split::Train;
    }
    for &i in &test {
        dataset.splits[i] = Split::Test;
    }
    Ok(())
}

/// Materialize stratified train/test datasets.
pub fn split(dataset: &Dataset, fractions: (f64, f64), seed: u64) -> Result<(Dataset, Dataset)> {
    let (train_idx, test_idx) = split_indices(dataset, fractions, seed)?;
    let pick = |idxs: &[usize], tag: Split| Dataset {
        num_classes: dataset.num_classes,
        num_parts: dataset.num_parts,
        image_side: dataset.image_side,
        samples: idxs.iter().map(|&i| dataset.samples[i].clone()).collect(),
        splits: vec![tag; idxs.len()],
    };
    Ok((pick(&train_idx, Split::Train), pick(&test_idx, Split::Test)))
}
