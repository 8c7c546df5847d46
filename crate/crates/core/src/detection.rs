//! Boxes, dense head decoding, the detection loss, average precision and
//! the box-propagation baseline.
//!
//! A head map has `5 + C` channels per cell: objectness logit, `C` class
//! logits, then distances from the cell center to the left, top, right and
//! bottom box edges in feature-grid units. Cell `(i, j)` is centered at
//! `((j + 0.5) * stride, (i + 0.5) * stride)` in image pixels.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::{DisplacementField, FeatureMap, Real};

/// Axis-aligned box in image pixels. Ground truth carries score 1.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct BBox {
    pub x0: f32,
    pub y0: f32,
    pub x1: f32,
    pub y1: f32,
    pub class_id: usize,
    pub score: f32,
}

impl BBox {
    pub fn new(x0: f32, y0: f32, x1: f32, y1: f32, class_id: usize, score: f32) -> Self {
        Self { x0, y0, x1, y1, class_id, score }
    }

    pub fn truth(x0: f32, y0: f32, x1: f32, y1: f32, class_id: usize) -> Self {
        Self::new(x0, y0, x1, y1, class_id, 1.0)
    }

    pub fn width(&self) -> f32 {
        (self.x1 - self.x0).max(0.0)
    }

    pub fn height(&self) -> f32 {
        (self.y1 - self.y0).max(0.0)
    }

    pub fn area(&self) -> f32 {
        self.width() * self.height()
    }

    pub fn is_valid(&self) -> bool {
        self.x0 < self.x1 && self.y0 < self.y1
    }

    pub fn contains(&self, x: f32, y: f32) -> bool {
        x >= self.x0 && x < self.x1 && y >= self.y0 && y < self.y1
    }

    pub fn translate(&self, dx: f32, dy: f32) -> Self {
        Self { x0: self.x0 + dx, x1: self.x1 + dx, y0: self.y0 + dy, y1: self.y1 + dy, ..*self }
    }

    /// Clips to `[0, width] x [0, height]`; `None` if nothing is left.
    pub fn clip(&self, width: f32, height: f32) -> Option<Self> {
        let b = Self {
            x0: self.x0.clamp(0.0, width),
            x1: self.x1.clamp(0.0, width),
            y0: self.y0.clamp(0.0, height),
            y1: self.y1.clamp(0.0, height),
            ..*self
        };
        b.is_valid().then_some(b)
    }
}

pub fn iou(a: &BBox, b: &BBox) -> f32 {
    let w = (a.x1.min(b.x1) - a.x0.max(b.x0)).max(0.0);
    let h = (a.y1.min(b.y1) - a.y0.max(b.y0)).max(0.0);
    let inter = w * h;
    let union = a.area() + b.area() - inter;
    if union <= 0.0 {
        0.0
    } else {
        inter / union
    }
}

/// Greedy per-class suppression; survivors are returned by descending score.
pub fn nms(mut boxes: Vec<BBox>, iou_threshold: f32) -> Vec<BBox> {
    boxes.sort_by(|a, b| b.score.total_cmp(&a.score));
    let mut keep: Vec<BBox> = Vec::with_capacity(boxes.len());
    for b in boxes {
        if keep
            .iter()
            .all(|k| k.class_id != b.class_id || iou(k, &b) <= iou_threshold)
        {
            keep.push(b);
        }
    }
    keep
}

/// Geometry shared by decoding and the loss.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct HeadLayout {
    pub num_classes: usize,
    /// Image pixels per feature cell.
    pub stride: usize,
}

impl HeadLayout {
    pub fn channels(&self) -> usize {
        5 + self.num_classes
    }

    pub fn cell_center(&self, i: usize, j: usize) -> (f32, f32) {
        let s = self.stride as f32;
        ((j as f32 + 0.5) * s, (i as f32 + 0.5) * s)
    }

    fn check<T: Real>(&self, raw: &FeatureMap<T>) -> Result<()> {
        if raw.channels() != self.channels() {
            return Err(Error::dim("head", self.channels(), raw.channels()));
        }
        Ok(())
    }
}

/// Head output split into its three parts.
#[derive(Clone, Debug, PartialEq)]
pub struct HeadOutput<T: Real = f32> {
    pub objectness: FeatureMap<T>,
    pub class_logits: FeatureMap<T>,
    pub box_deltas: FeatureMap<T>,
}

impl<T: Real> HeadOutput<T> {
    pub fn split(raw: &FeatureMap<T>, layout: &HeadLayout) -> Result<Self> {
        layout.check(raw)?;
        let c = layout.num_classes;
        Ok(Self {
            objectness: raw.channel_slice(0, 1),
            class_logits: raw.channel_slice(1, 1 + c),
            box_deltas: raw.channel_slice(1 + c, 5 + c),
        })
    }

    pub fn join(&self) -> Result<FeatureMap<T>> {
        self.objectness
            .concat_channels(&self.class_logits)?
            .concat_channels(&self.box_deltas)
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

fn softmax(logits: &[f64]) -> Vec<f64> {
    let m = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = logits.iter().map(|&l| (l - m).exp()).collect();
    let s: f64 = e.iter().sum();
    e.into_iter().map(|v| v / s).collect()
}

/// Decoding thresholds.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct DecodeConfig {
    pub score_threshold: f32,
    pub nms_iou: f32,
}

impl Default for DecodeConfig {
    fn default() -> Self {
        Self { score_threshold: 0.05, nms_iou: 0.5 }
    }
}

/// Candidate boxes before suppression, clipped to the image.
pub fn decode_candidates<T: Real>(
    raw: &FeatureMap<T>,
    layout: &HeadLayout,
    image_size: (usize, usize),
    score_threshold: f32,
) -> Result<Vec<BBox>> {
    layout.check(raw)?;
    let (h, w, _) = raw.shape();
    let c = layout.num_classes;
    let s = layout.stride as f32;
    let (ih, iw) = (image_size.0 as f32, image_size.1 as f32);
    let mut out = Vec::new();
    for i in 0..h {
        for j in 0..w {
            let px = raw.pixel(i, j);
            let obj = sigmoid(px[0].as_f64());
            if (obj as f32) <= score_threshold {
                continue;
            }
            let logits: Vec<f64> = px[1..1 + c].iter().map(|v| v.as_f64()).collect();
            let probs = softmax(&logits);
            let (cx, cy) = layout.cell_center(i, j);
            let d: Vec<f32> = px[1 + c..5 + c].iter().map(|v| v.as_f64() as f32 * s).collect();
            let geom = BBox::new(cx - d[0], cy - d[1], cx + d[2], cy + d[3], 0, 0.0);
            let Some(geom) = geom.clip(iw, ih) else { continue };
            for (k, p) in probs.iter().enumerate() {
                let score = (obj * p) as f32;
                if score > score_threshold {
                    out.push(BBox { class_id: k, score, ..geom });
                }
            }
        }
    }
    Ok(out)
}

/// Boxes scoring above the threshold after per-class suppression.
pub fn decode<T: Real>(
    raw: &FeatureMap<T>,
    layout: &HeadLayout,
    image_size: (usize, usize),
    config: &DecodeConfig,
) -> Result<Vec<BBox>> {
    Ok(nms(decode_candidates(raw, layout, image_size, config.score_threshold)?, config.nms_iou))
}

/// Training target of one cell.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct CellTarget {
    pub class_id: usize,
    /// Left, top, right, bottom distances in feature-grid units.
    pub deltas: [f64; 4],
}

/// Assigns each ground-truth box to the cells whose centers it contains
/// (the smallest box wins a contested cell), or to the nearest cell when it
/// covers no center.
pub fn assign_targets(boxes: &[BBox], layout: &HeadLayout, grid: (usize, usize)) -> Vec<Option<CellTarget>> {
    let (h, w) = grid;
    let s = layout.stride as f64;
    let target = |b: &BBox, i: usize, j: usize| {
        let (cx, cy) = layout.cell_center(i, j);
        let (cx, cy) = (cx as f64, cy as f64);
        CellTarget {
            class_id: b.class_id,
            deltas: [
                (cx - b.x0 as f64) / s,
                (cy - b.y0 as f64) / s,
                (b.x1 as f64 - cx) / s,
                (b.y1 as f64 - cy) / s,
            ],
        }
    };
    let mut cells: Vec<Option<(f32, CellTarget)>> = vec![None; h * w];
    for b in boxes {
        let mut covered = false;
        for i in 0..h {
            for j in 0..w {
                let (cx, cy) = layout.cell_center(i, j);
                if !b.contains(cx, cy) {
                    continue;
                }
                covered = true;
                let slot = &mut cells[i * w + j];
                if slot.map_or(true, |(area, _)| b.area() < area) {
                    *slot = Some((b.area(), target(b, i, j)));
                }
            }
        }
        if !covered && h > 0 && w > 0 {
            let bx = (b.x0 + b.x1) / 2.0;
            let by = (b.y0 + b.y1) / 2.0;
            let j = ((bx / layout.stride as f32).floor().max(0.0) as usize).min(w - 1);
            let i = ((by / layout.stride as f32).floor().max(0.0) as usize).min(h - 1);
            let slot = &mut cells[i * w + j];
            if slot.map_or(true, |(area, _)| b.area() < area) {
                *slot = Some((b.area(), target(b, i, j)));
            }
        }
    }
    cells.into_iter().map(|c| c.map(|(_, t)| t)).collect()
}

fn smooth_l1(x: f64) -> (f64, f64) {
    if x.abs() < 1.0 {
        (0.5 * x * x, x)
    } else {
        (x.abs() - 0.5, x.signum())
    }
}

/// Objectness cross-entropy averaged over all cells, plus class
/// cross-entropy and smooth-L1 box regression averaged over positive cells.
/// Returns the loss and its gradient with respect to the raw head map.
pub fn detection_loss<T: Real>(raw: &FeatureMap<T>, truth: &[BBox], layout: &HeadLayout) -> Result<(T, FeatureMap<T>)> {
    layout.check(raw)?;
    let (h, w, _) = raw.shape();
    let c = layout.num_classes;
    let targets = assign_targets(truth, layout, (h, w));
    let npos = targets.iter().filter(|t| t.is_some()).count().max(1) as f64;
    let ncells = (h * w).max(1) as f64;
    let mut grad = raw.zeros_like();
    let mut loss = 0.0;
    for i in 0..h {
        for j in 0..w {
            let px: Vec<f64> = raw.pixel(i, j).iter().map(|v| v.as_f64()).collect();
            let g = grad.pixel_mut(i, j);
            let target = targets[i * w + j];
            let y = if target.is_some() { 1.0 } else { 0.0 };
            let z = px[0];
            // stable binary cross-entropy with logits
            loss += (z.max(0.0) - z * y + (-z.abs()).exp().ln_1p()) / ncells;
            g[0] = T::lit((sigmoid(z) - y) / ncells);
            let Some(t) = target else { continue };
            if t.class_id >= c {
                return Err(Error::InvalidScene(format!("class {} outside 0..{c}", t.class_id)));
            }
            let probs = softmax(&px[1..1 + c]);
            loss -= probs[t.class_id].max(f64::MIN_POSITIVE).ln() / npos;
            for k in 0..c {
                let onehot = if k == t.class_id { 1.0 } else { 0.0 };
                g[1 + k] = T::lit((probs[k] - onehot) / npos);
            }
            for k in 0..4 {
                let (l, d) = smooth_l1(px[1 + c + k] - t.deltas[k]);
                loss += l / npos;
                g[1 + c + k] = T::lit(d / npos);
            }
        }
    }
    Ok((T::lit(loss), grad))
}

/// Per-class and mean average precision.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ApReport {
    /// `None` for classes without ground truth.
    pub per_class: Vec<Option<f64>>,
    /// Mean over classes with ground truth; 0 when there are none.
    pub mean: f64,
}

/// All-point interpolated AP with greedy matching in descending score order.
/// `detections[f]` and `truth[f]` belong to frame `f`.
pub fn average_precision(
    detections: &[Vec<BBox>],
    truth: &[Vec<BBox>],
    num_classes: usize,
    iou_threshold: f32,
) -> Result<ApReport> {
    if detections.len() != truth.len() {
        return Err(Error::dim("average_precision frames", truth.len(), detections.len()));
    }
    let mut per_class = Vec::with_capacity(num_classes);
    for class in 0..num_classes {
        let npos: usize = truth
            .iter()
            .map(|g| g.iter().filter(|b| b.class_id == class).count())
            .sum();
        if npos == 0 {
            per_class.push(None);
            continue;
        }
        let mut ranked: Vec<(usize, &BBox)> = detections
            .iter()
            .enumerate()
            .flat_map(|(f, ds)| ds.iter().filter(|d| d.class_id == class).map(move |d| (f, d)))
            .collect();
        ranked.sort_by(|a, b| b.1.score.total_cmp(&a.1.score));
        let mut matched: Vec<Vec<bool>> = truth.iter().map(|g| vec![false; g.len()]).collect();
        let mut tp = 0usize;
        let mut points = Vec::with_capacity(ranked.len());
        for (n, (f, d)) in ranked.iter().enumerate() {
            let mut best: Option<(usize, f32)> = None;
            for (gi, g) in truth[*f].iter().enumerate() {
                if g.class_id != class {
                    continue;
                }
                let o = iou(d, g);
                if best.map_or(true, |(_, bo)| o > bo) {
                    best = Some((gi, o));
                }
            }
            if let Some((gi, o)) = best {
                if o >= iou_threshold && !matched[*f][gi] {
                    matched[*f][gi] = true;
                    tp += 1;
                }
            }
            points.push((tp as f64 / npos as f64, tp as f64 / (n + 1) as f64));
        }
        per_class.push(Some(interpolated_ap(&points)));
    }
    let scored: Vec<f64> = per_class.iter().flatten().copied().collect();
    let mean = if scored.is_empty() {
        0.0
    } else {
        scored.iter().sum::<f64>() / scored.len() as f64
    };
    Ok(ApReport { per_class, mean })
}

/// Area under the precision envelope of (recall, precision) points listed
/// in rank order.
fn interpolated_ap(points: &[(f64, f64)]) -> f64 {
    let mut envelope: Vec<f64> = points.iter().map(|p| p.1).collect();
    for i in (0..envelope.len().saturating_sub(1)).rev() {
        envelope[i] = envelope[i].max(envelope[i + 1]);
    }
    let mut ap = 0.0;
    let mut prev_recall = 0.0;
    for (i, &(r, _)) in points.iter().enumerate() {
        if r > prev_recall {
            ap += (r - prev_recall) * envelope[i];
            prev_recall = r;
        }
    }
    ap
}

/// Translates each box by the mean field over the cells whose centers it
/// contains, scaled by `stride`, then clips it to the image. Boxes covering
/// no cell center are returned unchanged.
pub fn propagate_boxes<T: Real>(
    boxes: &[BBox],
    field: &DisplacementField<T>,
    stride: usize,
    image_size: (usize, usize),
) -> Vec<BBox> {
    let layout = HeadLayout { num_classes: 0, stride };
    let (ih, iw) = (image_size.0 as f32, image_size.1 as f32);
    boxes
        .iter()
        .map(|b| {
            let (mut sx, mut sy, mut n) = (0.0f64, 0.0f64, 0usize);
            for i in 0..field.height() {
                for j in 0..field.width() {
                    let (cx, cy) = layout.cell_center(i, j);
                    if b.contains(cx, cy) {
                        let (dx, dy) = field.get(i, j);
                        sx += dx.as_f64();
                        sy += dy.as_f64();
                        n += 1;
                    }
                }
            }
            if n == 0 {
                return *b;
            }
            let s = stride as f64 / n as f64;
            let moved = b.translate((sx * s) as f32, (sy * s) as f32);
            moved.clip(iw, ih).unwrap_or(*b)
        })
        .collect()
}

/// One line of a detection or ground-truth record file.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct BoxRecord {
    pub frame_index: u64,
    pub class_id: usize,
    pub x0: f32,
    pub y0: f32,
    pub x1: f32,
    pub y1: f32,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub score: Option<f32>,
}

impl BoxRecord {
    pub fn detection(frame_index: u64, b: &BBox) -> Self {
        Self { frame_index, class_id: b.class_id, x0: b.x0, y0: b.y0, x1: b.x1, y1: b.y1, score: Some(b.score) }
    }

    pub fn truth(frame_index: u64, b: &BBox) -> Self {
        Self { score: None, ..Self::detection(frame_index, b) }
    }

    pub fn to_box(&self) -> BBox {
        BBox::new(self.x0, self.y0, self.x1, self.y1, self.class_id, self.score.unwrap_or(1.0))
    }
}

/// Flattens per-frame boxes into records.
pub fn to_records(frames: &[Vec<BBox>], truth: bool) -> Vec<BoxRecord> {
    frames
        .iter()
        .enumerate()
        .flat_map(|(f, bs)| {
            bs.iter().map(move |b| {
                if truth {
                    BoxRecord::truth(f as u64, b)
                } else {
                    BoxRecord::detection(f as u64, b)
                }
            })
        })
        .collect()
}

/// Groups records back into `frames` per-frame lists.
pub fn from_records(records: &[BoxRecord], frames: usize) -> Result<Vec<Vec<BBox>>> {
    let mut out = vec![Vec::new(); frames];
    for r in records {
        let slot = out
            .get_mut(r.frame_index as usize)
            .ok_or_else(|| Error::InvalidScene(format!("record for frame {} beyond {frames}", r.frame_index)))?;
        slot.push(r.to_box());
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    const LAYOUT: HeadLayout = HeadLayout { num_classes: 2, stride: 4 };

    fn raw_with(h: usize, w: usize, f: impl Fn(usize, usize, usize) -> f64) -> FeatureMap<f64> {
        FeatureMap::from_fn(h, w, LAYOUT.channels(), f)
    }

    #[test]
    fn very_negative_objectness_yields_nothing() {
        let raw = raw_with(4, 4, |_, _, c| if c == 0 { -50.0 } else { 1.0 });
        assert!(decode(&raw, &LAYOUT, (16, 16), &DecodeConfig::default()).unwrap().is_empty());
    }

    #[test]
    fn decodes_single_cell() {
        // cell (3,3) is centered at (14,14); half-cell deltas reach 2 px.
        let raw = raw_with(8, 8, |y, x, c| match (y == 3 && x == 3, c) {
            (true, 0) => 20.0,
            (true, 1) => 20.0,
            (true, 2) => 0.0,
            (true, _) => 0.5,
            (false, 0) => -20.0,
            _ => 0.0,
        });
        let out = decode(&raw, &LAYOUT, (32, 32), &DecodeConfig::default()).unwrap();
        assert_eq!(out.len(), 1);
        let b = out[0];
        assert_eq!((b.x0, b.y0, b.x1, b.y1, b.class_id), (12.0, 12.0, 16.0, 16.0, 0));
        assert!(b.score > 0.99);
    }

    #[test]
    fn nms_keeps_the_best_duplicate() {
        let a = BBox::new(0.0, 0.0, 10.0, 10.0, 1, 0.9);
        let b = BBox { score: 0.8, ..a };
        let kept = nms(vec![b, a], 0.5);
        assert_eq!(kept, vec![a]);
        let other_class = BBox { class_id: 0, ..b };
        assert_eq!(nms(vec![a, other_class], 0.5).len(), 2);
    }

    #[test]
    fn empty_truth_at_half_probability_costs_ln2() {
        let raw = raw_with(3, 5, |_, _, c| if c == 0 { 0.0 } else { 0.7 });
        let (loss, _) = detection_loss(&raw, &[], &LAYOUT).unwrap();
        assert!((loss - std::f64::consts::LN_2).abs() < 1e-12);
    }

    fn perfect_raw(truth: &[BBox], h: usize, w: usize) -> FeatureMap<f64> {
        let targets = assign_targets(truth, &LAYOUT, (h, w));
        FeatureMap::from_fn(h, w, LAYOUT.channels(), |y, x, c| match targets[y * w + x] {
            None => if c == 0 { -12.0 } else { 0.0 },
            Some(t) => match c {
                0 => 12.0,
                1 | 2 => if c - 1 == t.class_id { 12.0 } else { -12.0 },
                _ => t.deltas[c - 3],
            },
        })
    }

    #[test]
    fn perfect_predictions_have_small_loss() {
        let truth = [BBox::truth(3.0, 5.0, 15.0, 13.0, 1), BBox::truth(18.0, 2.0, 30.0, 30.0, 0)];
        let raw = perfect_raw(&truth, 8, 8);
        let (loss, grad) = detection_loss(&raw, &truth, &LAYOUT).unwrap();
        assert!(loss < 1e-3, "{loss}");
        assert!(grad.max_abs() < 1e-4);
    }

    #[test]
    fn loss_gradient_matches_finite_differences() {
        let truth = [BBox::truth(3.0, 5.0, 15.0, 13.0, 1), BBox::truth(9.0, 0.0, 11.0, 1.0, 0)];
        let raw = raw_with(4, 4, |y, x, c| (((y * 7 + x * 3 + c * 5) % 11) as f64 - 5.0) / 3.3);
        let (_, grad) = detection_loss(&raw, &truth, &LAYOUT).unwrap();
        let h = 1e-5;
        for i in 0..raw.data().len() {
            let mut p = raw.clone();
            p.data_mut()[i] += h;
            let mut m = raw.clone();
            m.data_mut()[i] -= h;
            let fd = (detection_loss(&p, &truth, &LAYOUT).unwrap().0 - detection_loss(&m, &truth, &LAYOUT).unwrap().0) / (2.0 * h);
            assert!((fd - grad.data()[i]).abs() < 1e-6, "coord {i}: {fd} vs {}", grad.data()[i]);
        }
    }

    #[test]
    fn uncovered_box_goes_to_nearest_cell() {
        let t = assign_targets(&[BBox::truth(9.0, 0.0, 11.0, 1.0, 0)], &LAYOUT, (4, 4));
        assert_eq!(t.iter().filter(|c| c.is_some()).count(), 1);
        assert!(t[2].is_some());
    }

    #[test]
    fn ap_examples() {
        let g = BBox::truth(0.0, 0.0, 10.0, 10.0, 0);
        let hit = |s| BBox { score: s, ..g };
        let r = average_precision(&[vec![hit(0.5)]], &[vec![g]], 1, 0.5).unwrap();
        assert_eq!(r.mean, 1.0);
        let r = average_precision(&[vec![]], &[vec![g]], 1, 0.5).unwrap();
        assert_eq!(r.mean, 0.0);
        let g2 = BBox::truth(20.0, 20.0, 30.0, 30.0, 0);
        let miss = BBox::new(40.0, 0.0, 50.0, 10.0, 0, 0.8);
        let dets = vec![vec![hit(0.9), miss, BBox { score: 0.7, ..g2 }]];
        let r = average_precision(&dets, &[vec![g, g2]], 1, 0.5).unwrap();
        assert!((r.mean - (0.5 + 0.5 * 2.0 / 3.0)).abs() < 1e-12);
        assert_eq!(r.per_class, vec![Some(r.mean)]);
    }

    #[test]
    fn duplicate_detections_count_once() {
        let g = BBox::truth(0.0, 0.0, 10.0, 10.0, 0);
        let d = vec![vec![BBox { score: 0.9, ..g }, BBox { score: 0.8, ..g }]];
        let r = average_precision(&d, &[vec![g]], 1, 0.5).unwrap();
        assert_eq!(r.mean, 1.0);
        let two = average_precision(&d, &[vec![g, BBox::truth(50.0, 50.0, 60.0, 60.0, 0)]], 1, 0.5).unwrap();
        assert!((two.mean - 0.5).abs() < 1e-12);
    }

    #[test]
    fn propagation_examples() {
        let field = DisplacementField::constant(16, 16, -1.0f32, 3.0);
        let b = BBox::new(8.0, 8.0, 24.0, 24.0, 0, 0.9);
        let out = propagate_boxes(&[b], &field, 4, (64, 64));
        assert_eq!((out[0].x0, out[0].y0, out[0].x1, out[0].y1), (4.0, 20.0, 20.0, 36.0));
        let zero = DisplacementField::<f32>::zeros(16, 16);
        assert_eq!(propagate_boxes(&[b], &zero, 4, (64, 64)), vec![b]);
        let thin = BBox::new(4.5, 4.5, 5.5, 5.5, 0, 0.9);
        assert_eq!(propagate_boxes(&[thin], &field, 4, (64, 64)), vec![thin]);
    }

    #[test]
    fn records_roundtrip() {
        let frames = vec![vec![BBox::new(1.0, 2.0, 3.0, 4.0, 1, 0.25)], vec![]];
        let recs = to_records(&frames, false);
        assert_eq!(from_records(&recs, 2).unwrap(), frames);
        let line = serde_json::to_string(&BoxRecord::truth(3, &frames[0][0])).unwrap();
        assert!(!line.contains("score"));
    }
}
