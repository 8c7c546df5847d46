//! Detection accuracy on whole sequences and under withheld evidence.
//!
//! Propagation withholds image features for the last `delta` frames before a
//! target frame but still moves the memory with the model's fields;
//! anticipation also withholds those fields and extrapolates them instead.
//! Every `delta` is scored on the same target frames so results compare.

use std::ops::Range;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::detection::{average_precision, propagate_boxes, ApReport, BBox, DecodeConfig};
use crate::error::{Error, Result};
use crate::model::{FrameOutput, Model, Tracker};
use crate::motion::{extrapolate_flow, FlowHistory, FlowSource};
use crate::params::ParamStore;
use crate::tensor::DisplacementField;
use crate::warp::compose_fields;
use crate::worldgen::SequenceRecord;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct EvalOptions {
    pub decode: DecodeConfig,
    pub iou_threshold: f32,
}

impl Default for EvalOptions {
    fn default() -> Self {
        Self { decode: DecodeConfig::default(), iou_threshold: 0.5 }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum PropagationMode {
    FeatureProp,
    BoxProp,
}

impl PropagationMode {
    pub fn name(&self) -> &'static str {
        match self {
            PropagationMode::FeatureProp => "feature-prop",
            PropagationMode::BoxProp => "box-prop",
        }
    }
}

/// One row of a propagation or anticipation sweep.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SweepPoint {
    pub delta: usize,
    pub map: f64,
    pub mode: String,
    /// Share of frames that run the feature extractor.
    pub extractions_per_frame: f64,
}

/// Per-frame outputs with evidence at every frame, plus the tracker state
/// after each frame.
fn run_full<'a>(model: &'a Model, params: &'a ParamStore<f32>, seq: &SequenceRecord) -> Result<(Vec<Tracker<'a>>, Vec<FrameOutput>)> {
    let mut tracker = Tracker::new(model, params);
    let mut snaps = Vec::with_capacity(seq.len());
    let mut outs = Vec::with_capacity(seq.len());
    for t in 0..seq.len() {
        outs.push(tracker.step_record(seq, t, true)?);
        snaps.push(tracker.clone());
    }
    Ok((snaps, outs))
}

/// Fields the model itself would use; entry 0 is zero.
pub fn model_fields(model: &Model, params: &ParamStore<f32>, seq: &SequenceRecord) -> Result<Vec<DisplacementField<f32>>> {
    let (gh, gw) = (seq.fields[0].height(), seq.fields[0].width());
    let mut out = vec![DisplacementField::zeros(gh, gw)];
    for t in 1..seq.len() {
        out.push(model.motion_field(&seq.frames[t], &seq.frames[t - 1], Some(&seq.fields[t]), params)?);
    }
    Ok(out)
}

/// One field carrying frame `s` content to frame `t`: the generator's exact
/// field under ground-truth flow, otherwise the composition of `fields`
/// (as returned by [`model_fields`]). `None` when `s == t`.
pub fn span_field(model: &Model, seq: &SequenceRecord, fields: &[DisplacementField<f32>], s: usize, t: usize) -> Result<Option<DisplacementField<f32>>> {
    if s >= t {
        return Ok(None);
    }
    if matches!(model.flow, FlowSource::GroundTruth) {
        return Ok(seq.gap_fields_at(t, t - s).pop());
    }
    let mut acc: Option<DisplacementField<f32>> = None;
    for f in &fields[s + 1..=t] {
        acc = Some(match acc {
            None => f.clone(),
            Some(a) => compose_fields(&a, f)?,
        });
    }
    Ok(acc)
}

/// Detections at every frame with evidence at every frame.
pub fn sequence_detections(model: &Model, params: &ParamStore<f32>, seq: &SequenceRecord, decode: &DecodeConfig) -> Result<Vec<Vec<BBox>>> {
    let mut tracker = Tracker::new(model, params);
    (0..seq.len())
        .map(|t| {
            let out = tracker.step_record(seq, t, true)?;
            model.decode(&out.raw, decode)
        })
        .collect()
}

/// Average precision pooled over every frame of every sequence.
pub fn evaluate(model: &Model, params: &ParamStore<f32>, data: &[SequenceRecord], options: &EvalOptions) -> Result<ApReport> {
    let dets: Vec<Vec<Vec<BBox>>> = data
        .par_iter()
        .map(|s| sequence_detections(model, params, s, &options.decode))
        .collect::<Result<_>>()?;
    let dets: Vec<Vec<BBox>> = dets.into_iter().flatten().collect();
    let truth: Vec<Vec<BBox>> = data.iter().flat_map(|s| s.boxes.iter().cloned()).collect();
    average_precision(&dets, &truth, model.config.num_classes, options.iou_threshold)
}

/// Frames scored by a sweep over `deltas`: each needs two fields of history
/// before its anchor frame.
pub fn target_frames(len: usize, deltas: &[usize]) -> Result<Range<usize>> {
    let max = deltas.iter().copied().max().unwrap_or(0);
    let start = max + 2;
    if start >= len {
        return Err(Error::Config(format!("delta {max} leaves no scorable frame in a {len}-frame sequence")));
    }
    Ok(start..len)
}

/// Pools per-sequence detections (indexed `[delta][target]`) into one AP per delta.
fn pool(
    per_seq: Vec<(Vec<Vec<Vec<BBox>>>, Vec<Vec<BBox>>)>,
    deltas: &[usize],
    num_classes: usize,
    iou_threshold: f32,
) -> Result<Vec<f64>> {
    let mut maps = Vec::with_capacity(deltas.len());
    for k in 0..deltas.len() {
        let mut dets = Vec::new();
        let mut truth = Vec::new();
        for (d, g) in &per_seq {
            dets.extend(d[k].iter().cloned());
            truth.extend(g.iter().cloned());
        }
        maps.push(average_precision(&dets, &truth, num_classes, iou_threshold)?.mean);
    }
    Ok(maps)
}

fn check_data(data: &[SequenceRecord], deltas: &[usize]) -> Result<Range<usize>> {
    let len = data.first().map(|s| s.len()).ok_or_else(|| Error::Config("empty dataset".into()))?;
    if data.iter().any(|s| s.len() != len) {
        return Err(Error::Config("sweeps need sequences of equal length".into()));
    }
    target_frames(len, deltas)
}

/// Detection accuracy at frame `t` when evidence stops at `t - delta`.
pub fn evaluate_propagation(
    model: &Model,
    params: &ParamStore<f32>,
    data: &[SequenceRecord],
    deltas: &[usize],
    mode: PropagationMode,
    options: &EvalOptions,
) -> Result<Vec<SweepPoint>> {
    if mode == PropagationMode::FeatureProp && !model.uses_memory() {
        return Err(Error::Config("feature propagation needs a memory model".into()));
    }
    let targets = check_data(data, deltas)?;
    let stride = model.config.stride;
    let per_seq = data
        .par_iter()
        .map(|seq| {
            let (snaps, outs) = run_full(model, params, seq)?;
            let fields = model_fields(model, params, seq)?;
            let base: Vec<Vec<BBox>> = outs.iter().map(|o| model.decode(&o.raw, &options.decode)).collect::<Result<_>>()?;
            let mut by_delta = Vec::with_capacity(deltas.len());
            for &delta in deltas {
                let mut dets = Vec::with_capacity(targets.len());
                for t in targets.clone() {
                    let a = t - delta;
                    dets.push(match mode {
                        _ if delta == 0 => base[t].clone(),
                        PropagationMode::FeatureProp => {
                            let mut tr = snaps[a].clone();
                            let mut last = None;
                            for u in a + 1..=t {
                                last = Some(tr.step_record(seq, u, false)?);
                            }
                            model.decode(&last.expect("delta > 0").raw, &options.decode)?
                        }
                        PropagationMode::BoxProp => {
                            let d = span_field(model, seq, &fields, a, t)?.expect("delta > 0");
                            propagate_boxes(&base[a], &d.scale(-1.0), stride, seq.image_size())
                        }
                    });
                }
                by_delta.push(dets);
            }
            Ok((by_delta, seq.boxes[targets.clone()].to_vec()))
        })
        .collect::<Result<Vec<_>>>()?;
    let maps = pool(per_seq, deltas, model.config.num_classes, options.iou_threshold)?;
    Ok(deltas
        .iter()
        .zip(maps)
        .map(|(&delta, map)| SweepPoint {
            delta,
            map,
            mode: mode.name().into(),
            extractions_per_frame: 1.0 / (delta + 1) as f64,
        })
        .collect())
}

/// Detection accuracy at frame `t` when nothing after `t - delta` is seen:
/// the memory is carried forward with extrapolated fields. With `oracle`
/// the true fields replace the extrapolation.
pub fn evaluate_anticipation(
    model: &Model,
    params: &ParamStore<f32>,
    data: &[SequenceRecord],
    deltas: &[usize],
    oracle: bool,
    options: &EvalOptions,
) -> Result<Vec<SweepPoint>> {
    if !model.uses_memory() {
        return Err(Error::Config("anticipation needs a memory model".into()));
    }
    if deltas.contains(&0) {
        return Err(Error::Config("anticipation needs delta >= 1".into()));
    }
    let targets = check_data(data, deltas)?;
    let per_seq = data
        .par_iter()
        .map(|seq| {
            let (snaps, _) = run_full(model, params, seq)?;
            let fields = model_fields(model, params, seq)?;
            let mut by_delta = Vec::with_capacity(deltas.len());
            for &delta in deltas {
                let mut dets = Vec::with_capacity(targets.len());
                for t in targets.clone() {
                    let a = t - delta;
                    let mut tr = snaps[a].clone();
                    let mut last = None;
                    if oracle {
                        for u in a + 1..=t {
                            last = Some(tr.step_record(seq, u, false)?);
                        }
                    } else {
                        let mut history = FlowHistory::new();
                        history.push(fields[a - 1].clone())?;
                        history.push(fields[a].clone())?;
                        let predicted = extrapolate_flow(&history, delta)?;
                        for (i, u) in (a + 1..=t).enumerate() {
                            last = Some(tr.step(&seq.frames[u], None, Some(&predicted[i]), false)?);
                        }
                    }
                    dets.push(model.decode(&last.expect("delta > 0").raw, &options.decode)?);
                }
                by_delta.push(dets);
            }
            Ok((by_delta, seq.boxes[targets.clone()].to_vec()))
        })
        .collect::<Result<Vec<_>>>()?;
    let maps = pool(per_seq, deltas, model.config.num_classes, options.iou_threshold)?;
    let mode = if oracle { "anticipation-oracle" } else { "anticipation" };
    Ok(deltas
        .iter()
        .zip(maps)
        .map(|(&delta, map)| SweepPoint { delta, map, mode: mode.into(), extractions_per_frame: 1.0 / (delta + 1) as f64 })
        .collect())
}
