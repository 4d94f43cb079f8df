//! Boxes, IoU, per-class average precision and mAP at IoU 0.5.

use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::head::Detection;

/// Axis-aligned box `(cx, cy, w, h)` in normalized image units.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BBox {
    pub cx: f32,
    pub cy: f32,
    pub w: f32,
    pub h: f32,
}

impl BBox {
    pub fn new(cx: f32, cy: f32, w: f32, h: f32) -> Self {
        Self { cx, cy, w, h }
    }

    pub fn from_corners(x1: f32, y1: f32, x2: f32, y2: f32) -> Self {
        Self {
            cx: 0.5 * (x1 + x2),
            cy: 0.5 * (y1 + y2),
            w: x2 - x1,
            h: y2 - y1,
        }
    }

    /// `(x1, y1, x2, y2)`.
    pub fn corners(&self) -> (f32, f32, f32, f32) {
        (
            self.cx - 0.5 * self.w,
            self.cy - 0.5 * self.h,
            self.cx + 0.5 * self.w,
            self.cy + 0.5 * self.h,
        )
    }

    pub fn area(&self) -> f32 {
        self.w.max(0.0) * self.h.max(0.0)
    }

    /// Clip to the unit square, keeping the corner form.
    pub fn clipped(&self) -> Self {
        let (x1, y1, x2, y2) = self.corners();
        Self::from_corners(
            x1.clamp(0.0, 1.0),
            y1.clamp(0.0, 1.0),
            x2.clamp(0.0, 1.0),
            y2.clamp(0.0, 1.0),
        )
    }

    pub fn is_normalized(&self) -> bool {
        let (x1, y1, x2, y2) = self.corners();
        let eps = 1e-6;
        [self.cx, self.cy, self.w, self.h]
            .iter()
            .all(|v| v.is_finite())
            && x1 >= -eps
            && y1 >= -eps
            && x2 <= 1.0 + eps
            && y2 <= 1.0 + eps
            && self.w > 0.0
            && self.h > 0.0
    }
}

pub fn iou(a: &BBox, b: &BBox) -> f32 {
    let (ax1, ay1, ax2, ay2) = a.corners();
    let (bx1, by1, bx2, by2) = b.corners();
    let iw = (ax2.min(bx2) - ax1.max(bx1)).max(0.0);
    let ih = (ay2.min(by2) - ay1.max(by1)).max(0.0);
    let inter = iw * ih;
    let union = a.area() + b.area() - inter;
    if union <= 0.0 {
        0.0
    } else {
        (inter / union).clamp(0.0, 1.0)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GroundTruth {
    pub class_id: usize,
    pub bbox: BBox,
}

/// All-point interpolated AP of one class. Detections of every image are
/// ranked by score (ties by image, then input order) and each is matched to
/// the unmatched ground truth of its image with the highest IoU, if that IoU
/// reaches `iou_thresh`.
pub fn average_precision(
    dets_by_image: &[Vec<Detection>],
    gts_by_image: &[Vec<GroundTruth>],
    class_id: usize,
    iou_thresh: f32,
) -> f64 {
    let mut ranked: Vec<(f32, usize, usize)> = Vec::new();
    for (img, dets) in dets_by_image.iter().enumerate() {
        for (k, d) in dets.iter().enumerate() {
            if d.class_id == class_id {
                ranked.push((d.score, img, k));
            }
        }
    }
    ranked.sort_by(|a, b| b.0.total_cmp(&a.0));

    let gts: Vec<Vec<&GroundTruth>> = gts_by_image
        .iter()
        .map(|g| g.iter().filter(|g| g.class_id == class_id).collect())
        .collect();
    let n_gt: usize = gts.iter().map(Vec::len).sum();
    if n_gt == 0 {
        return 0.0;
    }
    let mut matched: Vec<Vec<bool>> = gts.iter().map(|g| vec![false; g.len()]).collect();
    let mut hits = Vec::with_capacity(ranked.len());
    for &(_, img, k) in &ranked {
        let det = &dets_by_image[img][k];
        let candidates = gts.get(img).map(Vec::as_slice).unwrap_or(&[]);
        let mut best: Option<(usize, f32)> = None;
        for (gi, g) in candidates.iter().enumerate() {
            if matched[img][gi] {
                continue;
            }
            let v = iou(&det.bbox, &g.bbox);
            if best.is_none_or(|(_, b)| v > b) {
                best = Some((gi, v));
            }
        }
        match best {
            Some((gi, v)) if v >= iou_thresh => {
                matched[img][gi] = true;
                hits.push(true);
            }
            _ => hits.push(false),
        }
    }
    ap_from_hits(&hits, n_gt)
}

/// AP from a ranked true/false-positive sequence: area under the precision
/// envelope, which only steps at true positives.
pub fn ap_from_hits(hits: &[bool], n_gt: usize) -> f64 {
    if n_gt == 0 {
        return 0.0;
    }
    let mut tp = 0usize;
    let precision: Vec<f64> = hits
        .iter()
        .enumerate()
        .map(|(k, &h)| {
            tp += usize::from(h);
            tp as f64 / (k + 1) as f64
        })
        .collect();
    let mut envelope = 0.0f64;
    let mut area = 0.0f64;
    for k in (0..hits.len()).rev() {
        envelope = envelope.max(precision[k]);
        if hits[k] {
            area += envelope;
        }
    }
    area / n_gt as f64
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClassAp {
    pub class_id: usize,
    pub name: String,
    pub ap50: f64,
    pub num_gt: usize,
    pub num_det: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub per_class: Vec<ClassAp>,
    /// Mean AP over classes with at least one ground truth.
    pub map50: f64,
    pub num_images: usize,
    pub num_gt: usize,
    pub num_det: usize,
}

impl EvalReport {
    pub fn to_csv(&self) -> String {
        let mut s = String::from("class_id,class,ap50,num_gt,num_det\n");
        for c in &self.per_class {
            let _ = writeln!(
                s,
                "{},{},{:.6},{},{}",
                c.class_id, c.name, c.ap50, c.num_gt, c.num_det
            );
        }
        let _ = writeln!(s, ",all,{:.6},{},{}", self.map50, self.num_gt, self.num_det);
        s
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).unwrap_or_default()
    }
}

pub fn map50(
    dets_by_image: &[Vec<Detection>],
    gts_by_image: &[Vec<GroundTruth>],
    class_names: &[String],
) -> EvalReport {
    let mut per_class = Vec::with_capacity(class_names.len());
    let mut sum = 0.0;
    let mut counted = 0usize;
    for (c, name) in class_names.iter().enumerate() {
        let num_gt = gts_by_image
            .iter()
            .flatten()
            .filter(|g| g.class_id == c)
            .count();
        let num_det = dets_by_image
            .iter()
            .flatten()
            .filter(|d| d.class_id == c)
            .count();
        let ap50 = average_precision(dets_by_image, gts_by_image, c, 0.5);
        if num_gt > 0 {
            sum += ap50;
            counted += 1;
        }
        per_class.push(ClassAp {
            class_id: c,
            name: name.clone(),
            ap50,
            num_gt,
            num_det,
        });
    }
    EvalReport {
        per_class,
        map50: if counted == 0 {
            0.0
        } else {
            sum / counted as f64
        },
        num_images: gts_by_image.len().max(dets_by_image.len()),
        num_gt: gts_by_image.iter().map(Vec::len).sum(),
        num_det: dets_by_image.iter().map(Vec::len).sum(),
    }
}

#[cfg(test)]
mod tests {
    use proptest::prelude::*;

    use super::*;

    fn det(class_id: usize, score: f32, b: BBox) -> Detection {
        Detection {
            class_id,
            score,
            bbox: b,
        }
    }

    fn gt(class_id: usize, b: BBox) -> GroundTruth {
        GroundTruth { class_id, bbox: b }
    }

    #[test]
    fn iou_examples() {
        let a = BBox::new(0.5, 0.5, 0.2, 0.2);
        assert_eq!(iou(&a, &a), 1.0);
        assert_eq!(iou(&a, &BBox::new(0.1, 0.1, 0.1, 0.1)), 0.0);
        let p = BBox::from_corners(0.0, 0.0, 2.0, 2.0);
        let q = BBox::from_corners(1.0, 0.0, 3.0, 2.0);
        assert!((iou(&p, &q) - 1.0 / 3.0).abs() < 1e-7);
        assert_eq!(iou(&p, &q), iou(&q, &p));
    }

    #[test]
    fn ap_trivial_cases() {
        let b = BBox::new(0.5, 0.5, 0.2, 0.2);
        let gts = vec![vec![gt(0, b)]];
        assert_eq!(
            average_precision(&[vec![det(0, 0.9, b)]], &gts, 0, 0.5),
            1.0
        );
        assert_eq!(average_precision(&[vec![]], &gts, 0, 0.5), 0.0);
        assert_eq!(
            average_precision(&[vec![det(0, 0.9, b)]], &[vec![]], 0, 0.5),
            0.0
        );
    }

    #[test]
    fn tp_fp_tp_on_two_gts_is_five_sixths() {
        let a = BBox::new(0.2, 0.2, 0.1, 0.1);
        let b = BBox::new(0.7, 0.7, 0.1, 0.1);
        let miss = BBox::new(0.5, 0.2, 0.1, 0.1);
        let gts = vec![vec![gt(0, a), gt(0, b)]];
        let dets = vec![vec![det(0, 0.9, a), det(0, 0.8, miss), det(0, 0.7, b)]];
        let ap = average_precision(&dets, &gts, 0, 0.5);
        assert!((ap - 5.0 / 6.0).abs() < 1e-12);
    }

    #[test]
    fn duplicates_count_once() {
        let a = BBox::new(0.2, 0.2, 0.1, 0.1);
        let gts = vec![vec![gt(0, a)]];
        let dets = vec![vec![det(0, 0.9, a), det(0, 0.8, a)]];
        assert_eq!(average_precision(&dets, &gts, 0, 0.5), 1.0);
        let dets = vec![vec![
            det(0, 0.8, a),
            det(0, 0.9, BBox::new(0.21, 0.2, 0.1, 0.1)),
        ]];
        assert_eq!(average_precision(&dets, &gts, 0, 0.5), 1.0);
    }

    #[test]
    fn map_over_classes_with_ground_truth() {
        let a = BBox::new(0.2, 0.2, 0.1, 0.1);
        let names: Vec<String> = ["x", "y", "z"].iter().map(|s| s.to_string()).collect();
        let gts = vec![vec![gt(0, a), gt(1, BBox::new(0.6, 0.6, 0.1, 0.1))]];
        let dets = vec![vec![det(0, 0.9, a)]];
        let r = map50(&dets, &gts, &names);
        assert_eq!(r.per_class.len(), 3);
        assert_eq!(r.map50, 0.5);
        assert!(r.to_csv().lines().count() == 5);
        assert_eq!(map50(&[vec![]], &gts, &names).map50, 0.0);
    }

    fn random_case(seed: u64) -> (Vec<Vec<Detection>>, Vec<Vec<GroundTruth>>) {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
        let mut gts = Vec::new();
        let mut dets = Vec::new();
        for _ in 0..4 {
            let mut g = Vec::new();
            let mut d = Vec::new();
            for _ in 0..rng.random_range(0..5) {
                let b = BBox::new(
                    rng.random_range(0.1..0.9),
                    rng.random_range(0.1..0.9),
                    0.1,
                    0.1,
                );
                g.push(gt(rng.random_range(0..2), b));
            }
            for _ in 0..rng.random_range(0..7) {
                let b = BBox::new(
                    rng.random_range(0.1..0.9),
                    rng.random_range(0.1..0.9),
                    0.1,
                    0.1,
                );
                let b = if !g.is_empty() && rng.random::<bool>() {
                    let t: &GroundTruth = &g[rng.random_range(0..g.len())];
                    BBox::new(
                        t.bbox.cx + rng.random_range(-0.02..0.02),
                        t.bbox.cy,
                        0.1,
                        0.1,
                    )
                } else {
                    b
                };
                d.push(det(rng.random_range(0..2), rng.random_range(0.01..1.0), b));
            }
            gts.push(g);
            dets.push(d);
        }
        (dets, gts)
    }

    proptest! {
        #[test]
        fn ap_is_invariant_to_score_scaling(seed in 0u64..10_000, scale in 0.01f32..0.99) {
            let (dets, gts) = random_case(seed);
            let scaled: Vec<Vec<Detection>> = dets
                .iter()
                .map(|d| d.iter().map(|x| Detection { score: x.score * scale, ..*x }).collect())
                .collect();
            for c in 0..2 {
                prop_assert_eq!(
                    average_precision(&dets, &gts, c, 0.5),
                    average_precision(&scaled, &gts, c, 0.5)
                );
            }
        }

        #[test]
        fn map_is_invariant_to_image_order(seed in 0u64..10_000) {
            let (dets, gts) = random_case(seed);
            let names = vec!["a".to_string(), "b".to_string()];
            let r = map50(&dets, &gts, &names);
            let (mut d2, mut g2) = (dets.clone(), gts.clone());
            d2.reverse();
            g2.reverse();
            prop_assert!((map50(&d2, &g2, &names).map50 - r.map50).abs() < 1e-12);
            prop_assert!((0.0..=1.0).contains(&r.map50));
        }
    }
}
