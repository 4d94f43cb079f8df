//! Anchor-based detection head over the pyramid levels: raw predictions,
//! decoding, target assignment, the combined loss and non-maximum
//! suppression.
//!
//! Channel layout per anchor is `(tx, ty, tw, th, obj, class logits...)`,
//! slots are ordered `(row, col, anchor)`.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::backbone::FeaturePyramid;
use crate::error::{Error, Result};
use crate::eval::{iou, BBox, GroundTruth};
use crate::nn::{Init, Linear};
use crate::numerics::{Ctx, Graph, Real, Tensor, Var};

/// Initial objectness logit, `ln(0.01 / 0.99)`.
pub const OBJ_PRIOR_LOGIT: f32 = -4.59512;
/// Size offsets are clamped to this magnitude before `exp`.
pub const TWH_CLAMP: f64 = 10.0;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Detection {
    pub class_id: usize,
    pub score: f32,
    pub bbox: BBox,
}

/// Anchor `(w, h)` pairs per level, finest level first.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AnchorSet {
    pub levels: Vec<Vec<(f32, f32)>>,
}

impl Default for AnchorSet {
    fn default() -> Self {
        Self::scaled(3)
    }
}

impl AnchorSet {
    pub const BASE: [(f32, f32); 3] = [(0.03, 0.03), (0.06, 0.05), (0.05, 0.09)];

    /// The base anchors doubled once per coarser level.
    pub fn scaled(levels: usize) -> Self {
        Self {
            levels: (0..levels)
                .map(|l| {
                    let f = (1u32 << l) as f32;
                    Self::BASE.iter().map(|&(w, h)| (w * f, h * f)).collect()
                })
                .collect(),
        }
    }

    pub fn per_level(&self) -> usize {
        self.levels.first().map_or(0, Vec::len)
    }

    pub fn validate(&self, levels: usize) -> Result<()> {
        let a = self.per_level();
        if self.levels.len() != levels || a == 0 {
            return Err(Error::Config(format!(
                "anchor set has {} levels, model has {levels}",
                self.levels.len()
            )));
        }
        for l in &self.levels {
            if l.len() != a
                || l.iter()
                    .any(|&(w, h)| !(w > 0.0 && w <= 1.0 && h > 0.0 && h <= 1.0))
            {
                return Err(Error::Config(
                    "anchors need equal counts per level and sizes in (0, 1]".into(),
                ));
            }
        }
        Ok(())
    }
}

/// One linear projection per pyramid level to `A * (5 + C)` channels.
#[derive(Debug, Clone)]
pub struct DetectionHead {
    pub proj: Vec<Linear>,
    pub anchors: AnchorSet,
    pub classes: usize,
}

impl DetectionHead {
    pub fn new<R: Rng>(
        init: &mut Init<'_, R>,
        level_dims: &[usize],
        anchors: AnchorSet,
        classes: usize,
    ) -> Result<Self> {
        anchors.validate(level_dims.len())?;
        if classes == 0 {
            return Err(Error::Config("at least one class is required".into()));
        }
        let a = anchors.per_level();
        let out = a * (5 + classes);
        let mut proj = Vec::with_capacity(level_dims.len());
        for (l, &d) in level_dims.iter().enumerate() {
            let lin = Linear::new(init, &format!("head.level{l}"), d, out, true)?;
            if let Some(b) = &lin.bias {
                let t = init.store.get_mut(b).expect("bias just registered");
                for k in 0..a {
                    t.data_mut()[k * (5 + classes) + 4] = OBJ_PRIOR_LOGIT;
                }
            }
            proj.push(lin);
        }
        Ok(Self {
            proj,
            anchors,
            classes,
        })
    }

    pub fn channels(&self) -> usize {
        self.anchors.per_level() * (5 + self.classes)
    }

    /// Raw maps `[H_l, W_l, A * (5 + C)]`, one per level.
    pub fn forward<T: Real>(
        &self,
        cx: &mut Ctx<'_, T>,
        pyramid: &FeaturePyramid,
    ) -> Result<Vec<Var>> {
        if pyramid.levels.len() != self.proj.len() {
            return Err(Error::dim(
                "head",
                &[pyramid.levels.len()],
                &[self.proj.len()],
            ));
        }
        pyramid
            .levels
            .iter()
            .zip(&self.proj)
            .map(|(&x, p)| p.forward(cx, x))
            .collect()
    }
}

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

fn logit(p: f64) -> f64 {
    (p / (1.0 - p)).ln()
}

/// Binary cross-entropy of a logit against target `t`, and its derivative.
fn bce_with_logit(x: f64, t: f64) -> (f64, f64) {
    let loss = x.max(0.0) - x * t + (-x.abs()).exp().ln_1p();
    (loss, sigmoid(x) - t)
}

/// Box `(cx, cy, w, h)` of slot `(row, col)` from offsets `(tx, ty, tw, th)`.
pub fn decode_box(
    t: [f64; 4],
    row: usize,
    col: usize,
    grid: (usize, usize),
    anchor: (f32, f32),
) -> [f64; 4] {
    let (hl, wl) = grid;
    [
        (sigmoid(t[0]) + col as f64) / wl as f64,
        (sigmoid(t[1]) + row as f64) / hl as f64,
        anchor.0 as f64 * t[2].clamp(-TWH_CLAMP, TWH_CLAMP).exp(),
        anchor.1 as f64 * t[3].clamp(-TWH_CLAMP, TWH_CLAMP).exp(),
    ]
}

/// Inverse of [`decode_box`] for a box whose center lies strictly inside
/// cell `(row, col)`.
pub fn encode_box(
    b: &BBox,
    row: usize,
    col: usize,
    grid: (usize, usize),
    anchor: (f32, f32),
) -> [f64; 4] {
    let (hl, wl) = grid;
    [
        logit(b.cx as f64 * wl as f64 - col as f64),
        logit(b.cy as f64 * hl as f64 - row as f64),
        (b.w as f64 / anchor.0 as f64).ln(),
        (b.h as f64 / anchor.1 as f64).ln(),
    ]
}

/// Cell containing normalized coordinate `c` on an `n`-cell axis.
pub fn center_cell(c: f32, n: usize) -> usize {
    ((c.max(0.0) * n as f32).floor() as usize).min(n - 1)
}

fn level_grid<T: Real>(raw: &Tensor<T>, channels: usize) -> Result<(usize, usize)> {
    match raw.shape() {
        &[h, w, c] if c == channels => Ok((h, w)),
        s => Err(Error::dim("decode", s, &[channels])),
    }
}

/// Detections with `score = sigmoid(obj) * sigmoid(best class)` at or above
/// `conf_thresh`, boxes clipped to the image.
pub fn decode<T: Real>(
    raw: &[Tensor<T>],
    anchors: &AnchorSet,
    classes: usize,
    conf_thresh: f32,
) -> Result<Vec<Detection>> {
    anchors.validate(raw.len())?;
    let a_n = anchors.per_level();
    let stride = 5 + classes;
    let mut out = Vec::new();
    for (l, t) in raw.iter().enumerate() {
        let (hl, wl) = level_grid(t, a_n * stride)?;
        let data = t.data();
        for row in 0..hl {
            for col in 0..wl {
                for a in 0..a_n {
                    let base = ((row * wl + col) * a_n + a) * stride;
                    let v = |k: usize| data[base + k].to_f64();
                    let obj = sigmoid(v(4));
                    let (class_id, cls) = (0..classes).map(|c| (c, sigmoid(v(5 + c)))).fold(
                        (0, f64::NEG_INFINITY),
                        |best, x| if x.1 > best.1 { x } else { best },
                    );
                    let score = (obj * cls) as f32;
                    if score < conf_thresh {
                        continue;
                    }
                    let b = decode_box(
                        [v(0), v(1), v(2), v(3)],
                        row,
                        col,
                        (hl, wl),
                        anchors.levels[l][a],
                    );
                    let bbox =
                        BBox::new(b[0] as f32, b[1] as f32, b[2] as f32, b[3] as f32).clipped();
                    if bbox.w > 0.0 && bbox.h > 0.0 {
                        out.push(Detection {
                            class_id,
                            score,
                            bbox,
                        });
                    }
                }
            }
        }
    }
    Ok(out)
}

/// Greedy per-class suppression in descending score order (ties keep the
/// earlier input first). A detection is dropped when its IoU with an
/// already kept detection of the same class exceeds `iou_thresh`.
pub fn nms(dets: &[Detection], iou_thresh: f32) -> Vec<Detection> {
    let mut order: Vec<usize> = (0..dets.len()).collect();
    order.sort_by(|&a, &b| dets[b].score.total_cmp(&dets[a].score));
    let mut kept: Vec<Detection> = Vec::new();
    for i in order {
        let d = &dets[i];
        if kept
            .iter()
            .all(|k| k.class_id != d.class_id || iou(&k.bbox, &d.bbox) <= iou_thresh)
        {
            kept.push(*d);
        }
    }
    kept
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PostProcess {
    pub conf_thresh: f32,
    pub iou_thresh: f32,
    pub max_det: usize,
}

impl Default for PostProcess {
    fn default() -> Self {
        Self {
            conf_thresh: 0.001,
            iou_thresh: 0.45,
            max_det: 300,
        }
    }
}

pub fn postprocess<T: Real>(
    raw: &[Tensor<T>],
    anchors: &AnchorSet,
    classes: usize,
    pp: &PostProcess,
) -> Result<Vec<Detection>> {
    let mut dets = nms(
        &decode(raw, anchors, classes, pp.conf_thresh)?,
        pp.iou_thresh,
    );
    dets.truncate(pp.max_det);
    Ok(dets)
}

/// Intersection-over-union of two anchor shapes sharing a center.
pub fn wh_iou(w: f32, h: f32, aw: f32, ah: f32) -> f32 {
    let inter = w.min(aw) * h.min(ah);
    inter / (w * h + aw * ah - inter)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Positive {
    pub level: usize,
    pub row: usize,
    pub col: usize,
    pub anchor: usize,
    pub class_id: usize,
    pub bbox: BBox,
    pub gt: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TargetAssignment {
    pub grids: Vec<(usize, usize)>,
    pub anchors_per_level: usize,
    /// Objectness target per slot, `(row, col, anchor)` order per level.
    pub obj: Vec<Vec<bool>>,
    pub positives: Vec<Positive>,
}

impl TargetAssignment {
    pub fn slot(&self, level: usize, row: usize, col: usize, anchor: usize) -> usize {
        (row * self.grids[level].1 + col) * self.anchors_per_level + anchor
    }

    pub fn num_slots(&self) -> usize {
        self.obj.iter().map(Vec::len).sum()
    }
}

/// Every ground truth goes to the (level, anchor) whose shape has the highest
/// IoU with it, at the cell holding its center; ties go to the lowest index
/// (level-major). If that slot is taken, the next best free anchor is used.
pub fn assign_targets(
    gts: &[GroundTruth],
    grids: &[(usize, usize)],
    anchors: &AnchorSet,
) -> Result<TargetAssignment> {
    anchors.validate(grids.len())?;
    let a_n = anchors.per_level();
    let mut asg = TargetAssignment {
        grids: grids.to_vec(),
        anchors_per_level: a_n,
        obj: grids
            .iter()
            .map(|&(h, w)| vec![false; h * w * a_n])
            .collect(),
        positives: Vec::new(),
    };
    for (gi, g) in gts.iter().enumerate() {
        let mut cands: Vec<(usize, usize, f32)> = Vec::new();
        for (l, level) in anchors.levels.iter().enumerate() {
            for (a, &(aw, ah)) in level.iter().enumerate() {
                cands.push((l, a, wh_iou(g.bbox.w, g.bbox.h, aw, ah)));
            }
        }
        // Stable sort keeps the lowest index first among equal IoUs.
        cands.sort_by(|x, y| y.2.total_cmp(&x.2));
        let placed = cands.iter().find_map(|&(l, a, _)| {
            let (hl, wl) = grids[l];
            let row = center_cell(g.bbox.cy, hl);
            let col = center_cell(g.bbox.cx, wl);
            let s = asg.slot(l, row, col, a);
            (!asg.obj[l][s]).then_some((l, row, col, a, s))
        });
        match placed {
            Some((level, row, col, anchor, s)) => {
                asg.obj[level][s] = true;
                asg.positives.push(Positive {
                    level,
                    row,
                    col,
                    anchor,
                    class_id: g.class_id,
                    bbox: g.bbox,
                    gt: gi,
                });
            }
            None => log::warn!("ground truth {gi} found no free anchor slot"),
        }
    }
    Ok(asg)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossWeights {
    pub loc: f64,
    pub conf: f64,
    pub cls: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self {
            loc: 0.05,
            conf: 1.0,
            cls: 0.5,
        }
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct LossParts {
    pub total: f64,
    pub loc: f64,
    pub conf: f64,
    pub cls: f64,
}

impl std::ops::AddAssign for LossParts {
    fn add_assign(&mut self, o: Self) {
        self.total += o.total;
        self.loc += o.loc;
        self.conf += o.conf;
        self.cls += o.cls;
    }
}

impl LossParts {
    pub fn scaled(self, f: f64) -> Self {
        Self {
            total: self.total * f,
            loc: self.loc * f,
            conf: self.conf * f,
            cls: self.cls * f,
        }
    }
}

/// IoU of two `(cx, cy, w, h)` boxes and its gradient with respect to the
/// first box.
pub fn iou_with_grad(p: [f64; 4], g: [f64; 4]) -> (f64, [f64; 4]) {
    let (px1, px2) = (p[0] - 0.5 * p[2], p[0] + 0.5 * p[2]);
    let (py1, py2) = (p[1] - 0.5 * p[3], p[1] + 0.5 * p[3]);
    let (gx1, gx2) = (g[0] - 0.5 * g[2], g[0] + 0.5 * g[2]);
    let (gy1, gy2) = (g[1] - 0.5 * g[3], g[1] + 0.5 * g[3]);
    let iw = px2.min(gx2) - px1.max(gx1);
    let ih = py2.min(gy2) - py1.max(gy1);
    let pa = p[2] * p[3];
    let ga = g[2] * g[3];
    if iw <= 0.0 || ih <= 0.0 {
        return (0.0, [0.0; 4]);
    }
    let inter = iw * ih;
    let union = pa + ga - inter;
    let value = inter / union;
    // Derivatives of the overlap extents.
    let (rx, lx) = (
        f64::from(u8::from(px2 < gx2)),
        f64::from(u8::from(px1 > gx1)),
    );
    let (ry, ly) = (
        f64::from(u8::from(py2 < gy2)),
        f64::from(u8::from(py1 > gy1)),
    );
    let d_inter = [
        ih * (rx - lx),
        iw * (ry - ly),
        ih * 0.5 * (rx + lx),
        iw * 0.5 * (ry + ly),
    ];
    let d_area = [0.0, 0.0, p[3], p[2]];
    let u2 = union * union;
    let grad = std::array::from_fn(|k| (d_inter[k] * (union + inter) - inter * d_area[k]) / u2);
    (value, grad)
}

/// Combined loss of one image and its gradient with respect to every raw
/// map. `conf` averages objectness cross-entropy over all slots, `cls`
/// averages class cross-entropy over positives and classes, `loc` averages
/// `1 - IoU` over positives.
pub fn detection_loss<T: Real>(
    raw: &[Tensor<T>],
    assignment: &TargetAssignment,
    anchors: &AnchorSet,
    classes: usize,
    weights: &LossWeights,
) -> Result<(LossParts, Vec<Vec<T>>)> {
    let a_n = anchors.per_level();
    let stride = 5 + classes;
    if raw.len() != assignment.grids.len() {
        return Err(Error::dim(
            "detection_loss",
            &[raw.len()],
            &[assignment.grids.len()],
        ));
    }
    let mut grads: Vec<Vec<f64>> = Vec::with_capacity(raw.len());
    for (t, &g) in raw.iter().zip(&assignment.grids) {
        if level_grid(t, a_n * stride)? != g {
            return Err(Error::dim(
                "detection_loss",
                t.shape(),
                &[g.0, g.1, a_n * stride],
            ));
        }
        grads.push(vec![0.0; t.len()]);
    }
    let n_slots = assignment.num_slots().max(1) as f64;
    let mut conf = 0.0;
    for (l, t) in raw.iter().enumerate() {
        let data = t.data();
        for (s, &positive) in assignment.obj[l].iter().enumerate() {
            let k = s * stride + 4;
            let (loss, d) = bce_with_logit(data[k].to_f64(), f64::from(u8::from(positive)));
            conf += loss;
            grads[l][k] += weights.conf * d / n_slots;
        }
    }
    conf /= n_slots;

    let n_pos = assignment.positives.len();
    let (mut loc, mut cls) = (0.0, 0.0);
    if n_pos > 0 {
        let np = n_pos as f64;
        let nc = (n_pos * classes) as f64;
        for p in &assignment.positives {
            let grid = assignment.grids[p.level];
            let base = assignment.slot(p.level, p.row, p.col, p.anchor) * stride;
            let data = raw[p.level].data();
            let v = |k: usize| data[base + k].to_f64();
            for c in 0..classes {
                let (loss, d) = bce_with_logit(v(5 + c), f64::from(u8::from(c == p.class_id)));
                cls += loss;
                grads[p.level][base + 5 + c] += weights.cls * d / nc;
            }
            let t = [v(0), v(1), v(2), v(3)];
            let anchor = anchors.levels[p.level][p.anchor];
            let pb = decode_box(t, p.row, p.col, grid, anchor);
            let gb = [p.bbox.cx, p.bbox.cy, p.bbox.w, p.bbox.h].map(f64::from);
            let (value, d_iou) = iou_with_grad(pb, gb);
            loc += 1.0 - value;
            let sx = sigmoid(t[0]);
            let sy = sigmoid(t[1]);
            let dbox = [
                sx * (1.0 - sx) / grid.1 as f64,
                sy * (1.0 - sy) / grid.0 as f64,
                if t[2].abs() < TWH_CLAMP { pb[2] } else { 0.0 },
                if t[3].abs() < TWH_CLAMP { pb[3] } else { 0.0 },
            ];
            for k in 0..4 {
                grads[p.level][base + k] -= weights.loc * d_iou[k] * dbox[k] / np;
            }
        }
        loc /= np;
        cls /= nc;
    }
    let parts = LossParts {
        total: weights.loc * loc + weights.conf * conf + weights.cls * cls,
        loc,
        conf,
        cls,
    };
    let grads = grads
        .into_iter()
        .map(|g| g.into_iter().map(T::c).collect())
        .collect();
    Ok((parts, grads))
}

/// [`detection_loss`] recorded on the tape as one scalar node.
pub fn detection_loss_node<T: Real>(
    g: &mut Graph<T>,
    raw: &[Var],
    assignment: &TargetAssignment,
    anchors: &AnchorSet,
    classes: usize,
    weights: &LossWeights,
) -> Result<(Var, LossParts)> {
    let tensors: Vec<Tensor<T>> = raw.iter().map(|&v| g.tensor(v)).collect();
    let (parts, grads) = detection_loss(&tensors, assignment, anchors, classes, weights)?;
    let node = g.custom_scalar(raw, T::c(parts.total), grads)?;
    Ok((node, parts))
}

#[cfg(test)]
mod tests {
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    use super::*;
    use crate::numerics::{finite_diff_check, ParamStore};

    fn level_tensors(
        grids: &[(usize, usize)],
        ch: usize,
        mut f: impl FnMut(usize, usize) -> f64,
    ) -> Vec<Tensor<f64>> {
        grids
            .iter()
            .enumerate()
            .map(|(l, &(h, w))| Tensor::from_fn([h, w, ch], |i| f(l, i)))
            .collect()
    }

    #[test]
    fn eight_classes_give_39_channels() {
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut init = Init {
            store: &mut store,
            rng: &mut rng,
        };
        let head = DetectionHead::new(&mut init, &[4, 8, 16], AnchorSet::default(), 8).unwrap();
        assert_eq!(head.channels(), 39);
    }

    #[test]
    fn zero_weights_give_zero_maps_of_pyramid_shape() {
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut init = Init {
            store: &mut store,
            rng: &mut rng,
        };
        let head = DetectionHead::new(&mut init, &[2, 4, 8], AnchorSet::default(), 4).unwrap();
        for (_, t) in store.iter_mut() {
            t.data_mut().iter_mut().for_each(|v| *v = 0.0);
        }
        let mut cx = Ctx::new(&store);
        let mut levels = Vec::new();
        for (i, (s, d)) in [(4, 2), (2, 4), (1, 8)].into_iter().enumerate() {
            levels.push(cx.g.constant(&Tensor::full([s, s, d], 1.0 + i as f32)));
        }
        let pyr = FeaturePyramid {
            levels,
            attention: Vec::new(),
        };
        let raw = head.forward(&mut cx, &pyr).unwrap();
        for (r, s) in raw.iter().zip([4, 2, 1]) {
            assert_eq!(cx.g.shape(*r), &[s, s, 27]);
            assert!(cx.g.value(*r).iter().all(|&v| v == 0.0));
        }
    }

    #[test]
    fn zero_raw_decodes_to_anchor_boxes_at_quarter_score() {
        let anchors = AnchorSet::default();
        let grids = [(4, 4), (2, 2), (1, 1)];
        let raw: Vec<Tensor<f32>> = grids
            .iter()
            .map(|&(h, w)| Tensor::zeros([h, w, 3 * 9]))
            .collect();
        let dets = decode(&raw, &anchors, 4, 0.0).unwrap();
        assert_eq!(dets.len(), 3 * 21);
        assert!(dets.iter().all(|d| d.score == 0.25));
        let b = dets[0].bbox;
        for (x, y) in [b.cx, b.cy, b.w, b.h]
            .iter()
            .zip([0.125, 0.125, 0.03, 0.03])
        {
            assert!((x - y).abs() < 1e-6);
        }
        assert!(decode(&raw, &anchors, 4, 0.3).unwrap().is_empty());
    }

    #[test]
    fn log_two_offset_doubles_width() {
        let b = decode_box([0.0, 0.0, 2f64.ln(), 0.0], 0, 0, (4, 4), (0.1, 0.2));
        assert!((b[2] - 2.0 * 0.1f32 as f64).abs() < 1e-12);
        assert!((b[3] - 0.2f32 as f64).abs() < 1e-12);
    }

    proptest! {
        #[test]
        fn decode_encode_round_trip(
            tx in -4.0f64..4.0, ty in -4.0f64..4.0, tw in -1.0f64..1.0, th in -1.0f64..1.0,
            row in 0usize..8, col in 0usize..8,
        ) {
            let grid = (8, 8);
            let anchor = (0.06, 0.05);
            let b = decode_box([tx, ty, tw, th], row, col, grid, anchor);
            let bbox = BBox::new(b[0] as f32, b[1] as f32, b[2] as f32, b[3] as f32);
            let back = encode_box(&bbox, row, col, grid, anchor);
            let again = decode_box(back, row, col, grid, anchor);
            for k in 0..4 {
                prop_assert!((again[k] - b[k]).abs() < 1e-5);
            }
        }
    }

    fn gt(class_id: usize, cx: f32, cy: f32, w: f32, h: f32) -> GroundTruth {
        GroundTruth {
            class_id,
            bbox: BBox::new(cx, cy, w, h),
        }
    }

    #[test]
    fn exact_anchor_match_gives_one_positive() {
        let grids = [(16, 16), (8, 8), (4, 4)];
        let a = assign_targets(
            &[gt(2, 0.3, 0.7, 0.03, 0.03)],
            &grids,
            &AnchorSet::default(),
        )
        .unwrap();
        assert_eq!(a.positives.len(), 1);
        let p = a.positives[0];
        assert_eq!((p.level, p.anchor, p.row, p.col), (0, 0, 11, 4));
        assert_eq!(a.obj.iter().flatten().filter(|&&b| b).count(), 1);
    }

    #[test]
    fn image_center_uses_floor_cell() {
        let grids = [(16, 16), (8, 8), (4, 4)];
        let a = assign_targets(
            &[gt(0, 0.5, 0.5, 0.06, 0.05)],
            &grids,
            &AnchorSet::default(),
        )
        .unwrap();
        let p = a.positives[0];
        assert_eq!((p.row, p.col), (8, 8));
        assert_eq!(p.anchor, 1);
    }

    #[test]
    fn assignment_is_argmax_over_all_anchors() {
        let anchors = AnchorSet::default();
        let grids = [(16, 16), (8, 8), (4, 4)];
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for _ in 0..200 {
            let g = gt(
                rng.random_range(0..4),
                rng.random_range(0.0..1.0),
                rng.random_range(0.0..1.0),
                rng.random_range(0.01..0.4),
                rng.random_range(0.01..0.4),
            );
            let asg = assign_targets(&[g], &grids, &anchors).unwrap();
            let p = asg.positives[0];
            // Brute force over every slot of every level.
            let mut best = (f32::NEG_INFINITY, 0, 0, 0, 0);
            for (l, &(h, w)) in grids.iter().enumerate() {
                for row in 0..h {
                    for col in 0..w {
                        for (a, &(aw, ah)) in anchors.levels[l].iter().enumerate() {
                            let inside = (g.bbox.cx * w as f32).floor() as usize == col
                                && (g.bbox.cy * h as f32).floor() as usize == row;
                            if !inside {
                                continue;
                            }
                            let inter = g.bbox.w.min(aw) * g.bbox.h.min(ah);
                            let v = inter / (g.bbox.w * g.bbox.h + aw * ah - inter);
                            if v > best.0 {
                                best = (v, l, row, col, a);
                            }
                        }
                    }
                }
            }
            assert_eq!(
                (p.level, p.row, p.col, p.anchor),
                (best.1, best.2, best.3, best.4)
            );
        }
    }

    #[test]
    fn colliding_ground_truths_take_distinct_slots() {
        let grids = [(4, 4), (2, 2), (1, 1)];
        let gts = [gt(0, 0.1, 0.1, 0.03, 0.03), gt(1, 0.12, 0.1, 0.03, 0.03)];
        let a = assign_targets(&gts, &grids, &AnchorSet::default()).unwrap();
        assert_eq!(a.positives.len(), 2);
        assert_ne!(
            (a.positives[0].level, a.positives[0].anchor),
            (a.positives[1].level, a.positives[1].anchor)
        );
    }

    #[test]
    fn empty_ground_truth_conf_is_ln2() {
        let grids = [(2, 2), (1, 1)];
        let anchors = AnchorSet::scaled(2);
        let asg = assign_targets(&[], &grids, &anchors).unwrap();
        let raw = level_tensors(&grids, 27, |_, _| 0.0);
        let (p, _) = detection_loss(&raw, &asg, &anchors, 4, &LossWeights::default()).unwrap();
        assert!((p.conf - 2f64.ln()).abs() < 1e-12);
        assert_eq!((p.loc, p.cls), (0.0, 0.0));
        assert!((p.total - 2f64.ln()).abs() < 1e-12);
    }

    fn saturated(
        asg: &TargetAssignment,
        anchors: &AnchorSet,
        classes: usize,
        mag: f64,
    ) -> Vec<Tensor<f64>> {
        let stride = 5 + classes;
        let mut raw = level_tensors(&asg.grids, anchors.per_level() * stride, |_, i| {
            if i % stride == 4 || i % stride >= 5 {
                -mag
            } else {
                0.0
            }
        });
        for p in &asg.positives {
            let base = asg.slot(p.level, p.row, p.col, p.anchor) * stride;
            let t = encode_box(
                &p.bbox,
                p.row,
                p.col,
                asg.grids[p.level],
                anchors.levels[p.level][p.anchor],
            );
            let d = raw[p.level].data_mut();
            d[base..base + 4].copy_from_slice(&t);
            d[base + 4] = mag;
            d[base + 5 + p.class_id] = mag;
        }
        raw
    }

    #[test]
    fn perfect_prediction_approaches_zero_and_is_a_local_minimum() {
        let anchors = AnchorSet::default();
        let grids = [(8, 8), (4, 4), (2, 2)];
        let gts = [gt(1, 0.33, 0.41, 0.05, 0.04), gt(3, 0.71, 0.2, 0.08, 0.1)];
        let asg = assign_targets(&gts, &grids, &anchors).unwrap();
        let w = LossWeights::default();
        let raw = saturated(&asg, &anchors, 4, 30.0);
        let (best, _) = detection_loss(&raw, &asg, &anchors, 4, &w).unwrap();
        assert!(best.total < 1e-10, "{best:?}");
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for _ in 0..20 {
            let mut r = raw.clone();
            // A channel of a positive slot, or the objectness of any slot.
            let (l, k) = if rng.random::<bool>() {
                let p = asg.positives[rng.random_range(0..asg.positives.len())];
                (
                    p.level,
                    asg.slot(p.level, p.row, p.col, p.anchor) * 9 + rng.random_range(0..9),
                )
            } else {
                let l = rng.random_range(0..3);
                (l, rng.random_range(0..asg.obj[l].len()) * 9 + 4)
            };
            let v = r[l].data()[k];
            // Box offsets move either way; saturated logits move back toward zero.
            let delta: f64 = rng.random_range(0.05..1.0);
            r[l].data_mut()[k] = if k % 9 < 4 {
                v + if rng.random::<bool>() { delta } else { -delta }
            } else {
                v - v.signum() * delta
            };
            let (p, _) = detection_loss(&r, &asg, &anchors, 4, &w).unwrap();
            assert!(p.total > best.total);
        }
    }

    /// Independent per-slot evaluation of the three components.
    fn scalar_reference(
        raw: &[Tensor<f64>],
        gts: &[GroundTruth],
        asg: &TargetAssignment,
        anchors: &AnchorSet,
        c: usize,
    ) -> (f64, f64, f64) {
        let sig = |x: f64| 1.0 / (1.0 + (-x).exp());
        let bce = |p: f64, t: f64| -(t * p.ln() + (1.0 - t) * (1.0 - p).ln());
        let stride = 5 + c;
        let mut conf = 0.0;
        let mut n = 0.0;
        for (l, t) in raw.iter().enumerate() {
            for (s, &pos) in asg.obj[l].iter().enumerate() {
                conf += bce(sig(t.data()[s * stride + 4]), if pos { 1.0 } else { 0.0 });
                n += 1.0;
            }
        }
        let (mut loc, mut cls) = (0.0, 0.0);
        for p in &asg.positives {
            let g = gts[p.gt];
            let (h, w) = asg.grids[p.level];
            let base = ((p.row * w + p.col) * anchors.per_level() + p.anchor) * stride;
            let d = raw[p.level].data();
            let (aw, ah) = anchors.levels[p.level][p.anchor];
            let pred = BBox::new(
                ((sig(d[base]) + p.col as f64) / w as f64) as f32,
                ((sig(d[base + 1]) + p.row as f64) / h as f64) as f32,
                (aw as f64 * d[base + 2].exp()) as f32,
                (ah as f64 * d[base + 3].exp()) as f32,
            );
            loc += 1.0 - iou(&pred, &g.bbox) as f64;
            for k in 0..c {
                cls += bce(
                    sig(d[base + 5 + k]),
                    if k == g.class_id { 1.0 } else { 0.0 },
                );
            }
        }
        let np = asg.positives.len() as f64;
        (loc / np, conf / n, cls / (np * c as f64))
    }

    #[test]
    fn components_match_scalar_reference() {
        let anchors = AnchorSet::default();
        let grids = [(4, 4), (2, 2), (1, 1)];
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        for _ in 0..10 {
            let gts: Vec<GroundTruth> = (0..3)
                .map(|_| {
                    gt(
                        rng.random_range(0..4),
                        rng.random_range(0.05..0.95),
                        rng.random_range(0.05..0.95),
                        rng.random_range(0.03..0.2),
                        rng.random_range(0.03..0.2),
                    )
                })
                .collect();
            let asg = assign_targets(&gts, &grids, &anchors).unwrap();
            let raw = level_tensors(&grids, 27, |_, _| rng.random_range(-0.3..0.3));
            let (p, _) = detection_loss(&raw, &asg, &anchors, 4, &LossWeights::default()).unwrap();
            let (loc, conf, cls) = scalar_reference(&raw, &gts, &asg, &anchors, 4);
            assert!((p.loc - loc).abs() < 1e-6, "{} {}", p.loc, loc);
            assert!((p.conf - conf).abs() < 1e-12);
            assert!((p.cls - cls).abs() < 1e-12);
            assert!((p.total - (0.05 * loc + conf + 0.5 * cls)).abs() < 1e-6);
        }
    }

    #[test]
    fn loss_gradient_matches_finite_differences() {
        let anchors = AnchorSet::scaled(2);
        let grids = [(2, 2), (1, 1)];
        let gts = [gt(1, 0.3, 0.3, 0.06, 0.05), gt(0, 0.8, 0.6, 0.1, 0.12)];
        let asg = assign_targets(&gts, &grids, &anchors).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let raw = level_tensors(&grids, 3 * 7, |_, _| rng.random_range(-0.5..0.5));
        let report = finite_diff_check(
            |g, v| Ok(detection_loss_node(g, v, &asg, &anchors, 2, &LossWeights::default())?.0),
            &raw,
            1e-5,
        )
        .unwrap();
        assert!(report.max_rel_error < 1e-4, "{report:?}");
    }

    #[test]
    fn nms_examples() {
        let b = BBox::new(0.5, 0.5, 0.2, 0.2);
        let d = |s: f32, bbox: BBox| Detection {
            class_id: 0,
            score: s,
            bbox,
        };
        let kept = nms(&[d(0.8, b), d(0.9, b)], 0.45);
        assert_eq!(kept, vec![d(0.9, b)]);
        let far = BBox::new(0.1, 0.1, 0.05, 0.05);
        assert_eq!(nms(&[d(0.8, b), d(0.9, far)], 0.45).len(), 2);
        let other = Detection {
            class_id: 1,
            ..d(0.7, b)
        };
        assert_eq!(nms(&[d(0.8, b), other], 0.45).len(), 2);
    }
}
