//! Brute-force counting oracles for the keypoint metrics plus the metric
//! invariants (translation invariance, radius monotonicity).

mod common;

use common::rng;
use psnet_core::data::{BBox, Keypoint, Sample};
use psnet_core::evaluation::{apk, mpk_mrk, ImageDetections, KeypointMatchConfig, PixelDetection};
use psnet_core::tensor::Tensor;
use rand::Rng;

fn random_instance(
    r: &mut rand_chacha::ChaCha8Rng,
    images: usize,
    parts: usize,
) -> (Vec<ImageDetections>, Vec<Sample>) {
    let mut gts = Vec::new();
    let mut preds = Vec::new();
    for _ in 0..images {
        let bw = r.random_range(20.0..80.0f32);
        let bh = r.random_range(20.0..80.0f32);
        let keypoints: Vec<Keypoint> = (1..=parts)
            .map(|id| Keypoint {
                id,
                x: r.random_range(0.0..bw),
                y: r.random_range(0.0..bh),
                visible: r.random_range(0..4) != 0,
            })
            .collect();
        let parts_pred: Vec<Option<PixelDetection>> = keypoints
            .iter()
            .map(|k| {
                if r.random_range(0..4) == 0 {
                    None
                } else {
                    // perturb around the true point so both hits and misses occur
                    Some(PixelDetection {
                        x: f64::from(k.x) + r.random_range(-15.0..15.0),
                        y: f64::from(k.y) + r.random_range(-15.0..15.0),
                        score: r.random_range(0.0..1.0),
                    })
                }
            })
            .collect();
        gts.push(Sample {
            image: Tensor::zeros(&[3, 2, 2]),
            bbox: BBox { x: 0.0, y: 0.0, w: bw, h: bh },
            keypoints,
            label: 0,
        });
        preds.push(ImageDetections { parts: parts_pred });
    }
    (preds, gts)
}

fn correct(p: &PixelDetection, gt: &Sample, part: usize, alpha: f64) -> bool {
    let k = &gt.keypoints[part - 1];
    if !k.visible {
        return false;
    }
    let radius = alpha * f64::from(gt.bbox.w.max(gt.bbox.h));
    let d = ((p.x - f64::from(k.x)).powi(2) + (p.y - f64::from(k.y)).powi(2)).sqrt();
    d <= radius
}

/// Exhaustive per-image counting oracle for MPK/MRK.
fn mpk_mrk_oracle(preds: &[ImageDetections], gts: &[Sample], alpha: f64) -> (f64, f64) {
    let mut psum = 0.0;
    let mut rsum = 0.0;
    for (pred, gt) in preds.iter().zip(gts) {
        let n_gt = gt.keypoints.iter().filter(|k| k.visible).count();
        let mut n_pd = 0;
        let mut n_tp = 0;
        for (i, p) in pred.parts.iter().enumerate() {
            if let Some(p) = p {
                n_pd += 1;
                if correct(p, gt, i + 1, alpha) {
                    n_tp += 1;
                }
            }
        }
        psum += match (n_pd, n_gt) {
            (0, 0) => 1.0,
            (0, _) => 0.0,
            _ => n_tp as f64 / n_pd as f64,
        };
        rsum += if n_gt == 0 { 1.0 } else { n_tp as f64 / n_gt as f64 };
    }
    (psum / preds.len() as f64, rsum / preds.len() as f64)
}

/// O(n^2) AP oracle: for each correct prediction, recount the true positives
/// in the prefix of the ranked list.
fn ap_oracle(entries: &[(usize, f64, bool)], n_gt: usize) -> f64 {
    if n_gt == 0 {
        return if entries.is_empty() { 1.0 } else { 0.0 };
    }
    let mut ranked = entries.to_vec();
    ranked.sort_by(|a, b| b.1.partial_cmp(&a.1).unwrap().then(a.0.cmp(&b.0)));
    let mut ap = 0.0;
    for k in 0..ranked.len() {
        if ranked[k].2 {
            let tp_at_k = ranked[..=k].iter().filter(|e| e.2).count();
            ap += tp_at_k as f64 / (k + 1) as f64;
        }
    }
    ap / n_gt as f64
}

fn apk_oracle(preds: &[ImageDetections], gts: &[Sample], alpha: f64, parts: usize) -> (Vec<f64>, f64) {
    let mut per_part = Vec::new();
    let mut pooled = Vec::new();
    let mut pooled_gt = 0;
    for part in 1..=parts {
        let mut entries = Vec::new();
        let mut n_gt = 0;
        for (img, (pred, gt)) in preds.iter().zip(gts).enumerate() {
            if gt.keypoints[part - 1].visible {
                n_gt += 1;
            }
            if let Some(Some(p)) = pred.parts.get(part - 1) {
                entries.push((img * parts + part, p.score, correct(p, gt, part, alpha)));
            }
        }
        per_part.push(ap_oracle(&entries, n_gt));
        pooled.extend(entries);
        pooled_gt += n_gt;
    }
    (per_part, ap_oracle(&pooled, pooled_gt))
}

#[test]
fn metrics_match_brute_force_oracles_on_200_random_micro_instances() {
    let mut r = rng(201);
    let cfg = KeypointMatchConfig { alpha: 0.1 };
    for trial in 0..200 {
        let images = r.random_range(1..=6);
        let parts = r.random_range(1..=4);
        let (preds, gts) = random_instance(&mut r, images, parts);
        let (mpk, mrk) = mpk_mrk(&preds, &gts, &cfg).unwrap();
        let (mpk_o, mrk_o) = mpk_mrk_oracle(&preds, &gts, cfg.alpha);
        assert_eq!(mpk, mpk_o, "trial {trial} MPK");
        assert_eq!(mrk, mrk_o, "trial {trial} MRK");
        let rep = apk(&preds, &gts, &cfg).unwrap();
        let (per_part_o, overall_o) = apk_oracle(&preds, &gts, cfg.alpha, parts);
        assert_eq!(rep.per_part, per_part_o, "trial {trial} per-part APK");
        assert_eq!(rep.overall, overall_o, "trial {trial} overall APK");
    }
}

#[test]
fn fifty_random_images_match_the_counting_oracle() {
    let mut r = rng(202);
    let cfg = KeypointMatchConfig { alpha: 0.1 };
    let (preds, gts) = random_instance(&mut r, 50, 5);
    let (mpk, mrk) = mpk_mrk(&preds, &gts, &cfg).unwrap();
    let (mpk_o, mrk_o) = mpk_mrk_oracle(&preds, &gts, cfg.alpha);
    assert_eq!((mpk, mrk), (mpk_o, mrk_o));
}

#[test]
fn metrics_are_translation_invariant() {
    let mut r = rng(203);
    let cfg = KeypointMatchConfig { alpha: 0.1 };
    let (preds, gts) = random_instance(&mut r, 12, 3);
    let (dx, dy) = (13.5, -7.25);
    let preds2: Vec<ImageDetections> = preds
        .iter()
        .map(|p| ImageDetections {
            parts: p
                .parts
                .iter()
                .map(|d| d.map(|d| PixelDetection { x: d.x + dx, y: d.y + dy, ..d }))
                .collect(),
        })
        .collect();
    let gts2: Vec<Sample> = gts
        .iter()
        .map(|s| {
            let mut s = s.clone();
            for k in &mut s.keypoints {
                k.x += dx as f32;
                k.y += dy as f32;
            }
            s.bbox.x += dx as f32;
            s.bbox.y += dy as f32;
            s
        })
        .collect();
    assert_eq!(mpk_mrk(&preds, &gts, &cfg).unwrap(), mpk_mrk(&preds2, &gts2, &cfg).unwrap());
    let a = apk(&preds, &gts, &cfg).unwrap();
    let b = apk(&preds2, &gts2, &cfg).unwrap();
    assert_eq!(a.per_part, b.per_part);
    assert_eq!(a.overall, b.overall);
}

#[test]
fn shrinking_alpha_never_increases_any_metric() {
    let mut r = rng(204);
    for _ in 0..20 {
        let (preds, gts) = random_instance(&mut r, 8, 3);
        let mut prev: Option<(f64, f64, f64)> = None;
        for alpha in [0.02, 0.05, 0.1, 0.2, 0.4] {
            let cfg = KeypointMatchConfig { alpha };
            let (mpk, mrk) = mpk_mrk(&preds, &gts, &cfg).unwrap();
            let rep = apk(&preds, &gts, &cfg).unwrap();
            if let Some((pm, pr, pa)) = prev {
                assert!(mpk >= pm - 1e-12, "MPK decreased as alpha grew");
                assert!(mrk >= pr - 1e-12, "MRK decreased as alpha grew");
                assert!(rep.overall >= pa - 1e-12, "APK decreased as alpha grew");
            }
            prev = Some((mpk, mrk, rep.overall));
        }
    }
}
