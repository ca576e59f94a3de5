//! Keypoint localization metrics (MPK, MRK, APK) and classification
//! accuracy, plus the JSON / plain-text report emitters.
//!
//! A predicted keypoint is correct when it lies within a Euclidean distance
//! of `alpha` times the larger bounding-box side of its image's ground
//! truth, and only against the ground truth of its own part id.

use serde::{Deserialize, Serialize};

use crate::data::Sample;
use crate::error::{Error, Result};
use crate::geometry::NetworkGeometry;
use crate::localization::{PartLocations, PartPeak};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct KeypointMatchConfig {
    pub alpha: f64,
}

impl Default for KeypointMatchConfig {
    fn default() -> Self {
        KeypointMatchConfig { alpha: 0.1 }
    }
}

impl KeypointMatchConfig {
    pub fn validate(&self) -> Result<()> {
        if self.alpha <= 0.0 {
            return Err(Error::Param(format!("alpha must be > 0, got {}", self.alpha)));
        }
        Ok(())
    }
}

/// One predicted keypoint in pixel space with its confidence (the part's
/// peak heatmap response).
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PixelDetection {
    pub x: f64,
    pub y: f64,
    pub score: f64,
}

/// Per-image detections: entry `c-1` belongs to part `c`, `None` = missing.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ImageDetections {
    pub parts: Vec<Option<PixelDetection>>,
}

/// Map grid locations to the input-pixel centers of their units. Entry order
/// follows part ids; missing parts pass through as missing. Returned pairs
/// are `(x, y)` pixel coordinates (x along the w axis).
pub fn grid_to_pixels(
    locations: &PartLocations,
    geom: &NetworkGeometry,
) -> Result<Vec<Option<(f64, f64)>>> {
    locations
        .entries()
        .iter()
        .map(|entry| match entry {
            Some((h, w)) => {
                let (py, px) = geom.grid_to_pixel(*h, *w)?;
                Ok(Some((px, py)))
            }
            None => Ok(None),
        })
        .collect()
}

/// Combine scored grid peaks and the geometry into pixel-space detections.
pub fn detections_from_peaks(peaks: &[Option<PartPeak>], geom: &NetworkGeometry) -> Result<ImageDetections> {
    let parts = peaks
        .iter()
        .map(|p| match p {
            Some(peak) => {
                let (py, px) = geom.grid_to_pixel(peak.h, peak.w)?;
                Ok(Some(PixelDetection { x: px, y: py, score: peak.score as f64 }))
            }
            None => Ok(None),
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(ImageDetections { parts })
}

fn validate_aligned(predictions: &[ImageDetections], ground_truth: &[Sample]) -> Result<usize> {
    if predictions.len() != ground_truth.len() {
        return Err(Error::Input(format!(
            "{} prediction images vs {} ground-truth images",
            predictions.len(),
            ground_truth.len()
        )));
    }
    let mut num_parts = 0;
    for (i, (pred, gt)) in predictions.iter().zip(ground_truth).enumerate() {
        if pred.parts.len() > gt.keypoints.len() {
            return Err(Error::Annotation(format!(
                "image {i} predicts part {} which was never annotated ({} parts)",
                pred.parts.len(),
                gt.keypoints.len()
            )));
        }
        for p in pred.parts.iter().flatten() {
            if !p.score.is_finite() {
                return Err(Error::Input(format!("image {i}: prediction without a finite confidence")));
            }
        }
        num_parts = num_parts.max(gt.keypoints.len());
    }
    Ok(num_parts)
}

fn radius_for(sample: &Sample, cfg: &KeypointMatchConfig) -> f64 {
    cfg.alpha * f64::from(sample.bbox.w.max(sample.bbox.h))
}

fn is_correct(pred: &PixelDetection, sample: &Sample, part_id: usize, radius: f64) -> bool {
    let gt = &sample.keypoints[part_id - 1];
    if !gt.visible {
        return false;
    }
    let dx = pred.x - f64::from(gt.x);
    let dy = pred.y - f64::from(gt.y);
    (dx * dx + dy * dy).sqrt() <= radius
}

/// Mean per-image precision and recall of predicted keypoints.
///
/// Images that predict nothing contribute precision 1 when they also have no
/// visible ground truth, else 0; images without visible ground truth
/// contribute recall 1.
pub fn mpk_mrk(
    predictions: &[ImageDetections],
    ground_truth: &[Sample],
    cfg: &KeypointMatchConfig,
) -> Result<(f64, f64)> {
    cfg.validate()?;
    validate_aligned(predictions, ground_truth)?;
    if predictions.is_empty() {
        return Err(Error::Input("no images to evaluate".into()));
    }
    let mut precision_sum = 0.0;
    let mut recall_sum = 0.0;
    for (pred, gt) in predictions.iter().zip(ground_truth) {
        let radius = radius_for(gt, cfg);
        let n_gt = gt.keypoints.iter().filter(|k| k.visible).count();
        let mut n_pd = 0usize;
        let mut n_tp = 0usize;
        for (idx, p) in pred.parts.iter().enumerate() {
            if let Some(p) = p {
                n_pd += 1;
                if is_correct(p, gt, idx + 1, radius) {
                    n_tp += 1;
                }
            }
        }
        precision_sum += if n_pd == 0 {
            if n_gt == 0 {
                1.0
            } else {
                0.0
            }
        } else {
            n_tp as f64 / n_pd as f64
        };
        recall_sum += if n_gt == 0 { 1.0 } else { n_tp as f64 / n_gt as f64 };
    }
    let n = predictions.len() as f64;
    Ok((precision_sum / n, recall_sum / n))
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ApkReport {
    /// Average precision per part, entry `c-1` for part `c`.
    pub per_part: Vec<f64>,
    /// AP over all parts' predictions pooled into one ranked list.
    pub overall: f64,
}

fn average_precision(mut entries: Vec<(usize, f64, bool)>, n_gt: usize) -> f64 {
    // (image index, score, correct); rank by score desc, ties by image index
    if n_gt == 0 {
        return if entries.is_empty() { 1.0 } else { 0.0 };
    }
    entries.sort_by(|a, b| b.1.partial_cmp(&a.1).unwrap_or(std::cmp::Ordering::Equal).then(a.0.cmp(&b.0)));
    let mut tp = 0usize;
    let mut ap = 0.0;
    for (rank, (_, _, correct)) in entries.iter().enumerate() {
        if *correct {
            tp += 1;
            ap += tp as f64 / (rank + 1) as f64;
        }
    }
    ap / n_gt as f64
}

/// Average precision of keypoints, per part and pooled, ranking predictions
/// by their confidence score.
pub fn apk(
    predictions: &[ImageDetections],
    ground_truth: &[Sample],
    cfg: &KeypointMatchConfig,
) -> Result<ApkReport> {
    cfg.validate()?;
    let num_parts = validate_aligned(predictions, ground_truth)?;
    let mut per_part = Vec::with_capacity(num_parts);
    let mut pooled = Vec::new();
    let mut pooled_gt = 0usize;
    for part in 1..=num_parts {
        let mut entries = Vec::new();
        let mut n_gt = 0usize;
        for (img, (pred, gt)) in predictions.iter().zip(ground_truth).enumerate() {
            if gt.keypoints[part - 1].visible {
                n_gt += 1;
            }
            if let Some(Some(p)) = pred.parts.get(part - 1) {
                let correct = is_correct(p, gt, part, radius_for(gt, cfg));
                entries.push((img, p.score, correct));
            }
        }
        pooled_gt += n_gt;
        pooled.extend(entries.iter().map(|&(img, s, c)| (img * num_parts + part, s, c)));
        per_part.push(average_precision(entries, n_gt));
    }
    Ok(ApkReport { per_part, overall: average_precision(pooled, pooled_gt) })
}

/// Full localization metric bundle for one model variant.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct LocalizationReport {
    pub mpk: f64,
    pub mrk: f64,
    pub apk: ApkReport,
}

impl LocalizationReport {
    pub fn compute(
        predictions: &[ImageDetections],
        ground_truth: &[Sample],
        cfg: &KeypointMatchConfig,
    ) -> Result<Self> {
        let (mpk, mrk) = mpk_mrk(predictions, ground_truth, cfg)?;
        let apk = apk(predictions, ground_truth, cfg)?;
        Ok(LocalizationReport { mpk, mrk, apk })
    }

    /// Parts ordered by descending APK (ties by part id), as `(part_id, apk)`.
    pub fn parts_by_apk(&self) -> Vec<(usize, f64)> {
        let mut rows: Vec<(usize, f64)> = self
            .apk
            .per_part
            .iter()
            .enumerate()
            .map(|(i, &v)| (i + 1, v))
            .collect();
        rows.sort_by(|a, b| b.1.partial_cmp(&a.1).unwrap_or(std::cmp::Ordering::Equal).then(a.0.cmp(&b.0)));
        rows
    }
}

/// Aligned text table over model variants: one row per variant with MPK,
/// MRK, and overall APK columns.
pub fn localization_table(rows: &[(String, LocalizationReport)]) -> String {
    let name_w = rows.iter().map(|(n, _)| n.len()).max().unwrap_or(5).max("model".len());
    let mut out = format!("{:<name_w$} | {:>6} | {:>6} | {:>6}\n", "model", "MPK", "MRK", "APK");
    out.push_str(&format!("{:-<name_w$}-+--------+--------+-------\n", ""));
    for (name, rep) in rows {
        out.push_str(&format!(
            "{:<name_w$} | {:>6.3} | {:>6.3} | {:>6.3}\n",
            name, rep.mpk, rep.mrk, rep.apk.overall
        ));
    }
    out
}

/// Per-part APK table in descending order, mirroring the per-part report
/// layout, with the pooled value as the last row.
pub fn per_part_apk_table(report: &LocalizationReport) -> String {
    let mut out = format!("{:<8} | {:>6}\n{:-<8}-+-------\n", "part", "APK", "");
    for (id, v) in report.parts_by_apk() {
        out.push_str(&format!("part_{id:<3} | {v:>6.3}\n"));
    }
    out.push_str(&format!("{:<8} | {:>6.3}\n", "overall", report.apk.overall));
    out
}

/// Fraction of samples whose predicted class equals the label.
pub fn accuracy(predictions: &[usize], labels: &[usize]) -> Result<f64> {
    if predictions.len() != labels.len() {
        return Err(Error::Input(format!(
            "{} predictions vs {} labels",
            predictions.len(),
            labels.len()
        )));
    }
    if predictions.is_empty() {
        return Err(Error::Input("cannot compute accuracy of an empty set".into()));
    }
    let hits = predictions.iter().zip(labels).filter(|(p, l)| p == l).count();
    Ok(hits as f64 / predictions.len() as f64)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{BBox, Keypoint};
    use crate::geometry::{reference_conv5_chain, LayerGeom};
    use crate::tensor::Tensor;

    fn sample(bbox: (f32, f32), keypoints: Vec<Keypoint>) -> Sample {
        Sample {
            image: Tensor::zeros(&[3, 2, 2]),
            bbox: BBox { x: 0.0, y: 0.0, w: bbox.0, h: bbox.1 },
            keypoints,
            label: 0,
        }
    }

    fn kp(id: usize, x: f32, y: f32, visible: bool) -> Keypoint {
        Keypoint { id, x, y, visible }
    }

    fn det(x: f64, y: f64, score: f64) -> Option<PixelDetection> {
        Some(PixelDetection { x, y, score })
    }

    #[test]
    fn perfect_predictions_score_one() {
        let gts = vec![sample(
            (40.0, 40.0),
            vec![kp(1, 10.0, 10.0, true), kp(2, 20.0, 25.0, true)],
        )];
        let preds = vec![ImageDetections { parts: vec![det(10.0, 10.0, 0.9), det(20.0, 25.0, 0.8)] }];
        let cfg = KeypointMatchConfig::default();
        let (mpk, mrk) = mpk_mrk(&preds, &gts, &cfg).unwrap();
        assert_eq!((mpk, mrk), (1.0, 1.0));
        let rep = apk(&preds, &gts, &cfg).unwrap();
        assert_eq!(rep.per_part, vec![1.0, 1.0]);
        assert_eq!(rep.overall, 1.0);
    }

    #[test]
    fn eq4_arithmetic_example() {
        // one image, n_gt = 4, n_pd = 3, n_tp = 2 -> MPK 2/3, MRK 1/2
        let gts = vec![sample(
            (100.0, 100.0),
            vec![
                kp(1, 10.0, 10.0, true),
                kp(2, 30.0, 30.0, true),
                kp(3, 50.0, 50.0, true),
                kp(4, 70.0, 70.0, true),
            ],
        )];
        let preds = vec![ImageDetections {
            parts: vec![
                det(11.0, 10.0, 0.9), // correct (radius 10)
                det(31.0, 31.0, 0.8), // correct
                det(90.0, 90.0, 0.7), // wrong
                None,
            ],
        }];
        let (mpk, mrk) = mpk_mrk(&preds, &gts, &KeypointMatchConfig::default()).unwrap();
        assert!((mpk - 2.0 / 3.0).abs() < 1e-12);
        assert!((mrk - 0.5).abs() < 1e-12);
    }

    #[test]
    fn threshold_rule_at_alpha_radius() {
        // bbox 100x50, alpha 0.1 -> radius 10
        let gts = vec![
            sample((100.0, 50.0), vec![kp(1, 50.0, 25.0, true)]),
            sample((100.0, 50.0), vec![kp(1, 50.0, 25.0, true)]),
        ];
        let preds = vec![
            ImageDetections { parts: vec![det(59.0, 25.0, 0.9)] }, // distance 9
            ImageDetections { parts: vec![det(61.0, 25.0, 0.9)] }, // distance 11
        ];
        let (mpk, _) = mpk_mrk(&preds, &gts, &KeypointMatchConfig::default()).unwrap();
        assert!((mpk - 0.5).abs() < 1e-12);
    }

    #[test]
    fn apk_rank_example() {
        // two predictions of one part: higher-scored wrong, lower correct,
        // one ground truth -> AP = 0.5
        let gts = vec![
            sample((100.0, 100.0), vec![kp(1, 10.0, 10.0, false)]),
            sample((100.0, 100.0), vec![kp(1, 10.0, 10.0, true)]),
        ];
        let preds = vec![
            ImageDetections { parts: vec![det(90.0, 90.0, 0.9)] },
            ImageDetections { parts: vec![det(10.0, 10.0, 0.5)] },
        ];
        let rep = apk(&preds, &gts, &KeypointMatchConfig::default()).unwrap();
        assert!((rep.per_part[0] - 0.5).abs() < 1e-12);
    }

    #[test]
    fn zero_prediction_convention() {
        let gts = vec![
            sample((10.0, 10.0), vec![kp(1, 5.0, 5.0, false)]),
            sample((10.0, 10.0), vec![kp(1, 5.0, 5.0, true)]),
        ];
        let preds = vec![
            ImageDetections { parts: vec![None] }, // nothing expected: precision 1, recall 1
            ImageDetections { parts: vec![None] }, // expected but absent: precision 0, recall 0
        ];
        let (mpk, mrk) = mpk_mrk(&preds, &gts, &KeypointMatchConfig::default()).unwrap();
        assert!((mpk - 0.5).abs() < 1e-12);
        assert!((mrk - 0.5).abs() < 1e-12);
    }

    #[test]
    fn unannotated_part_is_an_error() {
        let gts = vec![sample((10.0, 10.0), vec![kp(1, 5.0, 5.0, true)])];
        let preds = vec![ImageDetections { parts: vec![det(5.0, 5.0, 0.9), det(1.0, 1.0, 0.9)] }];
        assert!(matches!(
            mpk_mrk(&preds, &gts, &KeypointMatchConfig::default()),
            Err(Error::Annotation(_))
        ));
    }

    #[test]
    fn nonfinite_confidence_is_an_input_error() {
        let gts = vec![sample((10.0, 10.0), vec![kp(1, 5.0, 5.0, true)])];
        let preds = vec![ImageDetections { parts: vec![det(5.0, 5.0, f64::NAN)] }];
        assert!(matches!(
            apk(&preds, &gts, &KeypointMatchConfig::default()),
            Err(Error::Input(_))
        ));
    }

    #[test]
    fn grid_to_pixels_reference_chain() {
        let geom = reference_conv5_chain(454);
        let locs = PartLocations::new(vec![Some((0, 0)), Some((1, 0)), None]);
        let px = grid_to_pixels(&locs, &geom).unwrap();
        assert_eq!(px[0], Some((81.0, 81.0)));
        // one stride step along the h axis moves y by the cumulative stride
        assert_eq!(px[1], Some((81.0, 97.0)));
        assert_eq!(px[2], None);
    }

    #[test]
    fn grid_to_pixels_identity_geometry() {
        let geom = crate::geometry::NetworkGeometry::new(vec![LayerGeom::new(1, 1, 0)], 16).unwrap();
        let locs = PartLocations::new(vec![Some((3, 7))]);
        let px = grid_to_pixels(&locs, &geom).unwrap();
        assert_eq!(px[0], Some((7.0, 3.0)));
    }

    #[test]
    fn tables_are_aligned_and_ordered() {
        let rep = LocalizationReport {
            mpk: 0.8,
            mrk: 0.9,
            apk: ApkReport { per_part: vec![0.5, 0.9, 0.7], overall: 0.71 },
        };
        assert_eq!(
            rep.parts_by_apk().iter().map(|&(id, _)| id).collect::<Vec<_>>(),
            vec![2, 3, 1]
        );
        let table = per_part_apk_table(&rep);
        assert!(table.contains("part_2"));
        let t2 = localization_table(&[("fcn".into(), rep)]);
        assert!(t2.lines().count() >= 3);
    }
}
