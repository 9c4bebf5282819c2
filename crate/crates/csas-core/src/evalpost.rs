//! Detection post-processing and quality metrics.
//!
//! Boxes come from adaptively thresholding a saliency map (twice its mean,
//! capped at 0.9), opening with a disc to drop speckle-scale regions, and
//! taking the tight extents of the surviving 8-connected components.
//! Segmentation quality uses the precision-recall area (MAP), the adaptive
//! F-measure (AFM, beta^2 = 0.3) and one minus the mean absolute error
//! (IAAE); detection quality uses greedy score-ordered matching at an IoU
//! threshold (MAP) plus the mean matched IoU (AIOU).

use serde::Serialize;

use crate::scene::GroundTruthMask;
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct DetectionBox {
    pub row0: usize,
    pub col0: usize,
    /// exclusive
    pub row1: usize,
    /// exclusive
    pub col1: usize,
    /// Mean saliency inside the box.
    pub score: f64,
}

impl DetectionBox {
    pub fn area(&self) -> usize {
        (self.row1 - self.row0) * (self.col1 - self.col0)
    }

    pub fn iou(&self, other: &DetectionBox) -> f64 {
        let r0 = self.row0.max(other.row0);
        let c0 = self.col0.max(other.col0);
        let r1 = self.row1.min(other.row1);
        let c1 = self.col1.min(other.col1);
        if r1 <= r0 || c1 <= c0 {
            return 0.0;
        }
        let inter = ((r1 - r0) * (c1 - c0)) as f64;
        let union = (self.area() + other.area()) as f64 - inter;
        inter / union
    }
}

/// Adaptive threshold used for both box extraction and the F-measure
/// operating point: twice the map mean, capped at 0.9.
pub fn adaptive_threshold(map: &Tensor) -> f64 {
    (2.0 * map.mean()).min(0.9)
}

/// Binary opening with a disc structuring element.
fn open_disc(mask: &[bool], h: usize, w: usize, radius: usize) -> Vec<bool> {
    if radius == 0 {
        return mask.to_vec();
    }
    let offsets: Vec<(isize, isize)> = {
        let r = radius as isize;
        let mut v = Vec::new();
        for dy in -r..=r {
            for dx in -r..=r {
                if dy * dy + dx * dx <= r * r {
                    v.push((dy, dx));
                }
            }
        }
        v
    };
    let inside = |y: isize, x: isize| y >= 0 && y < h as isize && x >= 0 && x < w as isize;
    // erode
    let mut eroded = vec![false; h * w];
    for y in 0..h as isize {
        for x in 0..w as isize {
            let all = offsets.iter().all(|&(dy, dx)| {
                let (ny, nx) = (y + dy, x + dx);
                inside(ny, nx) && mask[ny as usize * w + nx as usize]
            });
            eroded[y as usize * w + x as usize] = all;
        }
    }
    // dilate
    let mut opened = vec![false; h * w];
    for y in 0..h as isize {
        for x in 0..w as isize {
            if !eroded[y as usize * w + x as usize] {
                continue;
            }
            for &(dy, dx) in &offsets {
                let (ny, nx) = (y + dy, x + dx);
                if inside(ny, nx) {
                    opened[ny as usize * w + nx as usize] = true;
                }
            }
        }
    }
    opened
}

/// 8-connected components of a binary mask; returns a label per pixel
/// (usize::MAX = background) and the component count.
fn components8(mask: &[bool], h: usize, w: usize) -> (Vec<usize>, usize) {
    let mut labels = vec![usize::MAX; h * w];
    let mut count = 0;
    let mut stack = Vec::new();
    for start in 0..h * w {
        if !mask[start] || labels[start] != usize::MAX {
            continue;
        }
        let id = count;
        count += 1;
        labels[start] = id;
        stack.push(start);
        while let Some(p) = stack.pop() {
            let (y, x) = ((p / w) as isize, (p % w) as isize);
            for dy in -1..=1isize {
                for dx in -1..=1isize {
                    if dy == 0 && dx == 0 {
                        continue;
                    }
                    let (ny, nx) = (y + dy, x + dx);
                    if ny < 0 || ny >= h as isize || nx < 0 || nx >= w as isize {
                        continue;
                    }
                    let np = ny as usize * w + nx as usize;
                    if mask[np] && labels[np] == usize::MAX {
                        labels[np] = id;
                        stack.push(np);
                    }
                }
            }
        }
    }
    (labels, count)
}

/// Adaptive threshold, disc opening, small-region removal, tight boxes.
pub fn extract_boxes(map: &Tensor, min_area_frac: f64, morph_radius: usize) -> Vec<DetectionBox> {
    let (h, w) = (map.shape()[0], map.shape()[1]);
    let t = adaptive_threshold(map);
    let binary: Vec<bool> = map.data().iter().map(|&v| v > t).collect();
    let opened = open_disc(&binary, h, w, morph_radius);
    let (labels, count) = components8(&opened, h, w);
    let min_area = (min_area_frac * (h * w) as f64).ceil() as usize;
    let mut boxes = Vec::new();
    for id in 0..count {
        let mut r0 = usize::MAX;
        let mut c0 = usize::MAX;
        let mut r1 = 0usize;
        let mut c1 = 0usize;
        let mut area = 0usize;
        let mut score = 0.0;
        for y in 0..h {
            for x in 0..w {
                if labels[y * w + x] == id {
                    r0 = r0.min(y);
                    c0 = c0.min(x);
                    r1 = r1.max(y + 1);
                    c1 = c1.max(x + 1);
                    area += 1;
                    score += map.data()[y * w + x];
                }
            }
        }
        if area < min_area {
            continue;
        }
        boxes.push(DetectionBox {
            row0: r0,
            col0: c0,
            row1: r1,
            col1: c1,
            score: score / area as f64,
        });
    }
    boxes.sort_by(|a, b| b.score.partial_cmp(&a.score).unwrap());
    boxes
}

/// Tight boxes of the ground-truth mask components.
pub fn truth_boxes(mask: &GroundTruthMask) -> Vec<DetectionBox> {
    let binary: Vec<bool> = mask.data.iter().map(|&v| v == 1).collect();
    let (labels, count) = components8(&binary, mask.height, mask.width);
    let (h, w) = (mask.height, mask.width);
    let mut boxes = Vec::new();
    for id in 0..count {
        let mut r0 = usize::MAX;
        let mut c0 = usize::MAX;
        let mut r1 = 0usize;
        let mut c1 = 0usize;
        for y in 0..h {
            for x in 0..w {
                if labels[y * w + x] == id {
                    r0 = r0.min(y);
                    c0 = c0.min(x);
                    r1 = r1.max(y + 1);
                    c1 = c1.max(x + 1);
                }
            }
        }
        boxes.push(DetectionBox {
            row0: r0,
            col0: c0,
            row1: r1,
            col1: c1,
            score: 1.0,
        });
    }
    boxes
}

#[derive(Clone, Copy, Debug, Default, Serialize)]
pub struct SegmentationMetrics {
    /// Area under the precision-recall curve over 256 uniform thresholds;
    /// None when the truth has no positives.
    pub map: Option<f64>,
    /// F-measure (beta^2 = 0.3) at the adaptive threshold.
    pub afm: Option<f64>,
    /// 1 - mean absolute error.
    pub iaae: f64,
}

const F_BETA_SQ: f64 = 0.3;

/// Segmentation quality of a saliency map against a binary mask.
pub fn segmentation_metrics(pred: &Tensor, truth: &GroundTruthMask) -> SegmentationMetrics {
    assert_eq!(
        pred.len(),
        truth.data.len(),
        "prediction/truth size mismatch"
    );
    let n = pred.len() as f64;
    let mae = pred
        .data()
        .iter()
        .zip(&truth.data)
        .map(|(&p, &t)| (p - t as f64).abs())
        .sum::<f64>()
        / n;
    let iaae = 1.0 - mae;

    let positives: f64 = truth.data.iter().map(|&t| t as f64).sum();
    if positives == 0.0 {
        return SegmentationMetrics {
            map: None,
            afm: None,
            iaae,
        };
    }

    // precision-recall curve over 256 uniform thresholds, integrated with
    // the interpolated-precision envelope (max precision at recall >= r)
    let mut curve: Vec<(f64, f64)> = Vec::with_capacity(256);
    for step in 0..256 {
        let t = step as f64 / 255.0;
        let (mut tp, mut fp) = (0.0, 0.0);
        for (&p, &tr) in pred.data().iter().zip(&truth.data) {
            if p >= t {
                if tr == 1 {
                    tp += 1.0;
                } else {
                    fp += 1.0;
                }
            }
        }
        let recall = tp / positives;
        let precision = if tp + fp > 0.0 { tp / (tp + fp) } else { 1.0 };
        curve.push((recall, precision));
    }
    curve.sort_by(|a, b| a.0.partial_cmp(&b.0).unwrap());
    for i in (0..curve.len().saturating_sub(1)).rev() {
        curve[i].1 = curve[i].1.max(curve[i + 1].1);
    }
    let mut map = 0.0;
    let mut prev_r = 0.0;
    for &(r, p) in &curve {
        map += (r - prev_r) * p;
        prev_r = r;
    }

    // adaptive F-measure
    let t = adaptive_threshold(pred);
    let (mut tp, mut fp, mut fne) = (0.0, 0.0, 0.0);
    for (&p, &tr) in pred.data().iter().zip(&truth.data) {
        match (p > t, tr == 1) {
            (true, true) => tp += 1.0,
            (true, false) => fp += 1.0,
            (false, true) => fne += 1.0,
            _ => {}
        }
    }
    let precision = if tp + fp > 0.0 { tp / (tp + fp) } else { 0.0 };
    let recall = if tp + fne > 0.0 { tp / (tp + fne) } else { 0.0 };
    let afm = if precision + recall > 0.0 {
        (1.0 + F_BETA_SQ) * precision * recall / (F_BETA_SQ * precision + recall)
    } else {
        0.0
    };

    SegmentationMetrics {
        map: Some(map),
        afm: Some(afm),
        iaae,
    }
}

#[derive(Clone, Copy, Debug, Default, Serialize)]
pub struct DetectionMetrics {
    /// Average precision of the score-ranked list at the IoU threshold.
    pub map: f64,
    /// Mean IoU over greedily matched pairs (0 when truths exist unmatched).
    pub aiou: f64,
}

/// Greedy one-to-one matching by descending score at `iou_threshold`.
pub fn detection_metrics(
    boxes: &[DetectionBox],
    truths: &[DetectionBox],
    iou_threshold: f64,
) -> DetectionMetrics {
    if truths.is_empty() {
        return DetectionMetrics {
            map: if boxes.is_empty() { 1.0 } else { 0.0 },
            aiou: if boxes.is_empty() { 1.0 } else { 0.0 },
        };
    }
    let mut order: Vec<usize> = (0..boxes.len()).collect();
    order.sort_by(|&a, &b| boxes[b].score.partial_cmp(&boxes[a].score).unwrap());
    let mut matched_truth = vec![false; truths.len()];
    let mut matches: Vec<f64> = Vec::new();
    let mut tp_flags = Vec::with_capacity(boxes.len());
    for &bi in &order {
        let mut best: Option<(usize, f64)> = None;
        for (ti, t) in truths.iter().enumerate() {
            if matched_truth[ti] {
                continue;
            }
            let iou = boxes[bi].iou(t);
            if iou >= iou_threshold && best.map(|(_, b)| iou > b).unwrap_or(true) {
                best = Some((ti, iou));
            }
        }
        match best {
            Some((ti, iou)) => {
                matched_truth[ti] = true;
                matches.push(iou);
                tp_flags.push(true);
            }
            None => tp_flags.push(false),
        }
    }
    let aiou = if matches.is_empty() {
        0.0
    } else {
        matches.iter().sum::<f64>() / matches.len() as f64
    };
    // average precision over the ranked list
    let total_truth = truths.len() as f64;
    let mut tp = 0.0;
    let mut ap = 0.0;
    for (rank, &is_tp) in tp_flags.iter().enumerate() {
        if is_tp {
            tp += 1.0;
            ap += tp / (rank as f64 + 1.0);
        }
    }
    DetectionMetrics {
        map: ap / total_truth,
        aiou,
    }
}

/// Aggregate report combining segmentation and detection statistics.
#[derive(Clone, Debug, Default, Serialize)]
pub struct MetricsReport {
    pub map_seg: Option<f64>,
    pub afm: Option<f64>,
    pub iaae: f64,
    pub map_det: f64,
    pub aiou: f64,
    pub images: usize,
}

/// Average per-image metrics; images whose truth is empty are excluded from
/// the precision-based segmentation means but still count toward IAAE.
pub fn aggregate_reports(per_image: &[(SegmentationMetrics, DetectionMetrics)]) -> MetricsReport {
    let n = per_image.len();
    let mut report = MetricsReport {
        images: n,
        ..Default::default()
    };
    if n == 0 {
        return report;
    }
    let defined: Vec<&SegmentationMetrics> = per_image
        .iter()
        .map(|(s, _)| s)
        .filter(|s| s.map.is_some())
        .collect();
    if !defined.is_empty() {
        report.map_seg = Some(
            defined.iter().map(|s| s.map.unwrap()).sum::<f64>() / defined.len() as f64,
        );
        report.afm = Some(
            defined.iter().map(|s| s.afm.unwrap()).sum::<f64>() / defined.len() as f64,
        );
    }
    report.iaae = per_image.iter().map(|(s, _)| s.iaae).sum::<f64>() / n as f64;
    report.map_det = per_image.iter().map(|(_, d)| d.map).sum::<f64>() / n as f64;
    report.aiou = per_image.iter().map(|(_, d)| d.aiou).sum::<f64>() / n as f64;
    report
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha20Rng;

    fn mask_from(h: usize, w: usize, ones: &[(usize, usize)]) -> GroundTruthMask {
        let mut m = GroundTruthMask::zeros(h, w);
        for &(y, x) in ones {
            m.data[y * w + x] = 1;
        }
        m
    }

    #[test]
    fn all_zero_map_yields_no_boxes() {
        let map = Tensor::zeros(&[16, 16]);
        assert!(extract_boxes(&map, 0.0, 0).is_empty());
    }

    #[test]
    fn constant_map_below_half_threshold_yields_no_boxes() {
        // T = min(2c, 0.9); for c <= 0.45 nothing exceeds T
        for c in [0.1, 0.3, 0.45] {
            let map = Tensor::full(&[8, 8], c);
            assert!(extract_boxes(&map, 0.0, 0).is_empty(), "c = {c}");
        }
        // above 0.45 the cap at 0.9 lets the whole map through
        let map = Tensor::full(&[8, 8], 0.95);
        let boxes = extract_boxes(&map, 0.0, 0);
        assert_eq!(boxes.len(), 1);
        assert_eq!((boxes[0].row0, boxes[0].col1), (0, 8));
    }

    #[test]
    fn two_separated_blobs_give_exact_extents() {
        let mut map = Tensor::zeros(&[32, 32]);
        for y in 2..12 {
            for x in 3..13 {
                map.data_mut()[y * 32 + x] = 1.0;
            }
        }
        for y in 18..28 {
            for x in 20..30 {
                map.data_mut()[y * 32 + x] = 0.8;
            }
        }
        let boxes = extract_boxes(&map, 0.0, 0);
        assert_eq!(boxes.len(), 2);
        // sorted by score: the 1.0 blob first
        assert_eq!(
            (boxes[0].row0, boxes[0].col0, boxes[0].row1, boxes[0].col1),
            (2, 3, 12, 13)
        );
        assert_eq!(
            (boxes[1].row0, boxes[1].col0, boxes[1].row1, boxes[1].col1),
            (18, 20, 28, 30)
        );
    }

    #[test]
    fn morphology_removes_speckle_and_area_filter_small_components() {
        let mut map = Tensor::zeros(&[32, 32]);
        for y in 4..14 {
            for x in 4..14 {
                map.data_mut()[y * 32 + x] = 1.0;
            }
        }
        map.data_mut()[20 * 32 + 20] = 1.0; // single-pixel speckle
        let boxes = extract_boxes(&map, 0.0, 1);
        assert_eq!(boxes.len(), 1, "opening must remove the lone pixel");
        let boxes = extract_boxes(&map, 0.01, 0);
        assert_eq!(boxes.len(), 1, "area filter must drop the lone pixel");
    }

    #[test]
    fn perfect_prediction_scores_one_everywhere() {
        let truth = mask_from(8, 8, &[(2, 2), (2, 3), (3, 2), (3, 3)]);
        let pred = truth.to_tensor();
        let seg = segmentation_metrics(&pred, &truth);
        assert!((seg.map.unwrap() - 1.0).abs() < 1e-9);
        assert!((seg.afm.unwrap() - 1.0).abs() < 1e-9);
        assert!((seg.iaae - 1.0).abs() < 1e-12);
        let tb = truth_boxes(&truth);
        let det = detection_metrics(&tb, &tb, 0.5);
        assert_eq!(det.map, 1.0);
        assert_eq!(det.aiou, 1.0);
    }

    #[test]
    fn complement_prediction_has_zero_iaae() {
        let truth = mask_from(8, 8, &[(1, 1), (1, 2)]);
        let pred = truth.to_tensor().map(|v| 1.0 - v);
        let seg = segmentation_metrics(&pred, &truth);
        assert!(seg.iaae.abs() < 1e-12);
    }

    #[test]
    fn iaae_matches_positive_fraction_for_zero_prediction() {
        // pred = 0, truth fraction p = 0.1 -> IAAE = 0.9
        let (h, w) = (10usize, 10usize);
        let ones: Vec<(usize, usize)> = (0..10).map(|i| (i / 10, i % 10)).collect();
        let truth = mask_from(h, w, &ones);
        assert!((truth.positive_fraction() - 0.1).abs() < 1e-12);
        let seg = segmentation_metrics(&Tensor::zeros(&[h, w]), &truth);
        assert!((seg.iaae - 0.9).abs() < 1e-12);
    }

    #[test]
    fn iaae_complement_identity_for_binary_truth() {
        let mut rng = ChaCha20Rng::seed_from_u64(80);
        let truth = mask_from(6, 6, &[(0, 0), (2, 3), (5, 5)]);
        let pred = Tensor::from_vec(&[6, 6], (0..36).map(|_| rng.gen_range(0.0..1.0)).collect());
        let a = segmentation_metrics(&pred, &truth).iaae;
        let b = segmentation_metrics(&pred.map(|v| 1.0 - v), &truth).iaae;
        assert!((a + b - 1.0).abs() < 1e-9);
    }

    #[test]
    fn empty_truth_reports_undefined_precision_metrics() {
        let truth = GroundTruthMask::zeros(8, 8);
        let seg = segmentation_metrics(&Tensor::full(&[8, 8], 0.2), &truth);
        assert!(seg.map.is_none() && seg.afm.is_none());
        assert!((seg.iaae - 0.8).abs() < 1e-9);
    }

    #[test]
    fn disjoint_boxes_score_zero() {
        let a = DetectionBox { row0: 0, col0: 0, row1: 4, col1: 4, score: 1.0 };
        let b = DetectionBox { row0: 10, col0: 10, row1: 14, col1: 14, score: 1.0 };
        assert_eq!(a.iou(&b), 0.0);
        let det = detection_metrics(&[a], &[b], 0.5);
        assert_eq!(det.aiou, 0.0);
        assert_eq!(det.map, 0.0);
    }

    #[test]
    fn half_overlap_in_one_axis_gives_iou_one_third() {
        // identical extent in rows, 50% linear overlap in columns
        let a = DetectionBox { row0: 0, col0: 0, row1: 4, col1: 8, score: 1.0 };
        let b = DetectionBox { row0: 0, col0: 4, row1: 4, col1: 12, score: 1.0 };
        assert!((a.iou(&b) - 1.0 / 3.0).abs() < 1e-12);
    }

    #[test]
    fn metrics_invariant_under_horizontal_flip() {
        let mut rng = ChaCha20Rng::seed_from_u64(81);
        let (h, w) = (12usize, 16usize);
        let mut truth = GroundTruthMask::zeros(h, w);
        for y in 3..7 {
            for x in 2..8 {
                truth.data[y * w + x] = 1;
            }
        }
        let pred = Tensor::from_vec(
            &[h, w],
            (0..h * w).map(|_| rng.gen_range(0.0..1.0)).collect(),
        );
        let flip_t = |t: &Tensor| -> Tensor {
            let mut out = t.clone();
            for y in 0..h {
                for x in 0..w {
                    out.data_mut()[y * w + x] = t.data()[y * w + (w - 1 - x)];
                }
            }
            out
        };
        let mut flip_m = GroundTruthMask::zeros(h, w);
        for y in 0..h {
            for x in 0..w {
                flip_m.data[y * w + x] = truth.data[y * w + (w - 1 - x)];
            }
        }
        let a = segmentation_metrics(&pred, &truth);
        let b = segmentation_metrics(&flip_t(&pred), &flip_m);
        assert!((a.map.unwrap() - b.map.unwrap()).abs() < 1e-12);
        assert!((a.afm.unwrap() - b.afm.unwrap()).abs() < 1e-12);
        assert!((a.iaae - b.iaae).abs() < 1e-12);
    }

    #[test]
    fn all_metric_outputs_stay_in_unit_interval() {
        let mut rng = ChaCha20Rng::seed_from_u64(82);
        for _ in 0..20 {
            let (h, w) = (10usize, 10usize);
            let mut truth = GroundTruthMask::zeros(h, w);
            for i in 0..h * w {
                truth.data[i] = u8::from(rng.gen_bool(0.2));
            }
            let pred = Tensor::from_vec(
                &[h, w],
                (0..h * w).map(|_| rng.gen_range(0.0..1.0)).collect(),
            );
            let seg = segmentation_metrics(&pred, &truth);
            if let Some(m) = seg.map {
                assert!((0.0..=1.0).contains(&m));
            }
            if let Some(f) = seg.afm {
                assert!((0.0..=1.0).contains(&f));
            }
            assert!((0.0..=1.0).contains(&seg.iaae));
            let boxes = extract_boxes(&pred, 0.01, 1);
            let tb = truth_boxes(&truth);
            let det = detection_metrics(&boxes, &tb, 0.5);
            assert!((0.0..=1.0).contains(&det.map));
            assert!((0.0..=1.0).contains(&det.aiou));
        }
    }
}
