//! Two-worker detection pipeline on a virtual clock.
//!
//! A fast worker handles every frame. A strong worker takes every
//! `strong_update_period`-th frame when it is idle and publishes its memory
//! after `strong_latency_ms`. When a frame's fast features are ready, the
//! fuser takes the newest strong payload published by then, brings it to the
//! current frame (or not, depending on [`Alignment`]) and emits detections.

use std::cmp::Reverse;
use std::collections::BinaryHeap;
use std::sync::mpsc;
use std::sync::Arc;
use std::time::{Duration, Instant};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::detection::{average_precision, decode_candidates, nms, propagate_boxes, ApReport, BBox, DecodeConfig};
use crate::error::{Error, Result};
use crate::eval::{model_fields, span_field, EvalOptions};
use crate::model::{Model, Tracker};
use crate::params::ParamStore;
use crate::tensor::{DisplacementField, FeatureMap};
use crate::warp::warp;
use crate::worldgen::SequenceRecord;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Alignment {
    /// Warp strong features with the composed fields of the gap.
    FeatureProp,
    /// Translate strong detections and merge them with fast detections.
    BoxProp,
    /// Use strong features as they are.
    None,
}

impl Alignment {
    pub fn name(&self) -> &'static str {
        match self {
            Alignment::FeatureProp => "feature-prop",
            Alignment::BoxProp => "box-prop",
            Alignment::None => "none",
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PipelineConfig {
    pub frame_period_ms: f64,
    pub fast_latency_ms: f64,
    pub strong_latency_ms: f64,
    pub strong_update_period: usize,
    pub alignment: Alignment,
    /// Time the fuser needs after fast features are ready.
    pub fusion_overhead_ms: f64,
    /// Resolution of the virtual clock.
    pub tick_ms: f64,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        Self {
            frame_period_ms: 40.0,
            fast_latency_ms: 20.0,
            strong_latency_ms: 100.0,
            strong_update_period: 4,
            alignment: Alignment::FeatureProp,
            fusion_overhead_ms: 0.0,
            tick_ms: 1.0,
        }
    }
}

fn micros(ms: f64) -> u64 {
    (ms * 1000.0).round() as u64
}

impl PipelineConfig {
    pub fn validate(&self) -> Result<()> {
        let ok = self.frame_period_ms > 0.0
            && self.fast_latency_ms >= 0.0
            && self.strong_latency_ms >= 0.0
            && self.fusion_overhead_ms >= 0.0
            && self.tick_ms > 0.0
            && self.strong_update_period > 0;
        if !ok {
            return Err(Error::Config("pipeline times must be non-negative, period and tick positive".into()));
        }
        if self.fusion_overhead_ms > self.tick_ms {
            return Err(Error::Config("fusion overhead must fit in one simulator tick".into()));
        }
        Ok(())
    }

    /// Frames between a strong input and the first frame that can use it.
    pub fn delta(&self) -> usize {
        let slack = self.strong_latency_ms - self.fast_latency_ms;
        if slack <= 0.0 {
            0
        } else {
            (slack / self.frame_period_ms).ceil() as usize
        }
    }
}

/// Timing of one frame on the virtual clock.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct FrameTiming {
    pub arrival_us: u64,
    pub emit_us: u64,
    /// Newest strong frame published by the emission time.
    pub strong_frame: Option<usize>,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Schedule {
    pub frames: Vec<FrameTiming>,
    /// Frames the strong worker processed, with their publication times.
    pub strong: Vec<(usize, u64)>,
}

impl Schedule {
    pub fn strong_mask(&self, len: usize) -> Vec<bool> {
        let mut m = vec![false; len];
        for &(s, _) in &self.strong {
            m[s] = true;
        }
        m
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord)]
enum Event {
    // declaration order breaks ties at equal times
    StrongDone(usize),
    FastDone(usize),
    Arrival(usize),
    Emit(usize),
}

/// Runs the event loop for `len` frames without touching any model.
pub fn schedule(config: &PipelineConfig, len: usize) -> Result<Schedule> {
    config.validate()?;
    let period = micros(config.frame_period_ms);
    let fast = micros(config.fast_latency_ms);
    let strong = micros(config.strong_latency_ms);
    let overhead = micros(config.fusion_overhead_ms);
    let mut queue = BinaryHeap::new();
    let mut seq = 0u64;
    let mut push = |q: &mut BinaryHeap<Reverse<(u64, Event, u64)>>, time: u64, e: Event| {
        q.push(Reverse((time, e, seq)));
        seq += 1;
    };
    for t in 0..len {
        push(&mut queue, t as u64 * period, Event::Arrival(t));
    }
    let mut frames = vec![FrameTiming { arrival_us: 0, emit_us: 0, strong_frame: None }; len];
    let mut fast_free = 0u64;
    let mut strong_busy = false;
    let mut strong_pending: Option<usize> = None;
    let mut published: Option<usize> = None;
    let mut strong_log = Vec::new();
    while let Some(Reverse((now, event, _))) = queue.pop() {
        match event {
            Event::Arrival(t) => {
                frames[t].arrival_us = now;
                let start = now.max(fast_free);
                fast_free = start + fast;
                push(&mut queue, fast_free, Event::FastDone(t));
                if t % config.strong_update_period == 0 {
                    if strong_busy {
                        // only the newest waiting frame is worth processing
                        strong_pending = Some(t);
                    } else {
                        strong_busy = true;
                        push(&mut queue, now + strong, Event::StrongDone(t));
                    }
                }
            }
            Event::FastDone(t) => push(&mut queue, now + overhead, Event::Emit(t)),
            Event::StrongDone(s) => {
                published = Some(published.map_or(s, |p| p.max(s)));
                strong_log.push((s, now));
                strong_busy = false;
                if let Some(p) = strong_pending.take() {
                    strong_busy = true;
                    push(&mut queue, now + strong, Event::StrongDone(p));
                }
            }
            Event::Emit(t) => {
                frames[t].emit_us = now;
                frames[t].strong_frame = published.filter(|&s| s <= t);
            }
        }
    }
    Ok(Schedule { frames, strong: strong_log })
}

/// One line of the latency trace.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TraceRecord {
    pub frame: usize,
    pub arrival_ms: f64,
    pub emit_ms: f64,
    pub mode: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub strong_frame: Option<usize>,
    pub warmup: bool,
    /// Newest frame any input of this output came from.
    pub max_frame_read: usize,
}

/// Models taking part in the pipeline. `fast` also serves warm-up frames;
/// `fused` has a head trained on the mean of its own features and aligned
/// strong features.
#[derive(Clone, Copy)]
pub struct PipelineModels<'a> {
    pub fast: (&'a Model, &'a ParamStore<f32>),
    pub strong: (&'a Model, &'a ParamStore<f32>),
    pub fused: (&'a Model, &'a ParamStore<f32>),
}

#[derive(Clone, Debug, PartialEq)]
pub struct PipelineRun {
    pub detections: Vec<Vec<BBox>>,
    pub trace: Vec<TraceRecord>,
}

/// Strong memory at each processed frame and the model's fields.
struct StrongPass {
    features: Vec<Option<FeatureMap<f32>>>,
    detections: Vec<Option<Vec<BBox>>>,
    fields: Vec<DisplacementField<f32>>,
}

fn strong_pass(model: &Model, params: &ParamStore<f32>, seq: &SequenceRecord, mask: &[bool], decode: &DecodeConfig) -> Result<StrongPass> {
    if !mask.first().copied().unwrap_or(false) {
        return Err(Error::Config("the strong worker must process the first frame".into()));
    }
    let mut tracker = Tracker::new(model, params);
    let mut features = vec![None; seq.len()];
    let mut detections = vec![None; seq.len()];
    for t in 0..seq.len() {
        let out = tracker.step_record(seq, t, mask[t])?;
        if mask[t] {
            detections[t] = Some(model.decode(&out.raw, decode)?);
            features[t] = Some(out.features);
        }
    }
    Ok(StrongPass { features, detections, fields: model_fields(model, params, seq)? })
}

/// Strong features aligned to every frame as the fuser would see them;
/// `None` during warm-up.
pub fn companion_features(
    strong: (&Model, &ParamStore<f32>),
    seq: &SequenceRecord,
    config: &PipelineConfig,
    alignment: Alignment,
) -> Result<Vec<Option<FeatureMap<f32>>>> {
    let sched = schedule(config, seq.len())?;
    let pass = strong_pass(strong.0, strong.1, seq, &sched.strong_mask(seq.len()), &DecodeConfig::default())?;
    sched
        .frames
        .iter()
        .enumerate()
        .map(|(t, timing)| {
            let Some(s) = timing.strong_frame else { return Ok(None) };
            let m = pass.features[s].as_ref().expect("published frames were processed");
            Ok(Some(match (alignment, span_field(strong.0, seq, &pass.fields, s, t)?) {
                (Alignment::FeatureProp, Some(d)) => warp(m, &d)?,
                _ => m.clone(),
            }))
        })
        .collect()
}

/// Sequences cut to their post-warm-up frames with matching companion
/// features, ready for training a fused head.
pub fn fusion_training_set(
    strong: (&Model, &ParamStore<f32>),
    data: &[SequenceRecord],
    config: &PipelineConfig,
) -> Result<(Vec<SequenceRecord>, Vec<Vec<FeatureMap<f32>>>)> {
    let parts: Vec<(SequenceRecord, Vec<FeatureMap<f32>>)> = data
        .par_iter()
        .map(|seq| {
            let comp = companion_features(strong, seq, config, Alignment::FeatureProp)?;
            let first = comp.iter().position(|c| c.is_some()).unwrap_or(seq.len());
            let mut trimmed = seq.clone();
            trimmed.frames.drain(..first);
            trimmed.fields.drain(..first);
            trimmed.boxes.drain(..first);
            trimmed.occluded.drain(..first);
            trimmed.meta.length = trimmed.frames.len();
            Ok((trimmed, comp.into_iter().flatten().collect()))
        })
        .collect::<Result<_>>()?;
    Ok(parts.into_iter().unzip())
}

/// Simulates one sequence on the virtual clock.
pub fn simulate(models: &PipelineModels, seq: &SequenceRecord, config: &PipelineConfig, decode: &DecodeConfig) -> Result<PipelineRun> {
    let sched = schedule(config, seq.len())?;
    let (strong, strong_params) = models.strong;
    if !strong.uses_memory() {
        return Err(Error::Config("the strong worker needs a memory model".into()));
    }
    let (fused, fused_params) = models.fused;
    let (fast, fast_params) = models.fast;
    if fused.config.feature_channels != strong.config.feature_channels {
        return Err(Error::dim("fusion channels", strong.config.feature_channels, fused.config.feature_channels));
    }
    let pass = strong_pass(strong, strong_params, seq, &sched.strong_mask(seq.len()), decode)?;
    let stride = strong.config.stride;
    let mut detections = Vec::with_capacity(seq.len());
    let mut trace = Vec::with_capacity(seq.len());
    for (t, timing) in sched.frames.iter().enumerate() {
        let image = &seq.frames[t];
        let (dets, mode, warmup) = match timing.strong_frame {
            None => {
                let f = fast.extract_features(image, fast_params)?;
                (fast.decode(&fast.detect_head(&f, fast_params)?, decode)?, "warmup", true)
            }
            Some(s) => {
                let gap = span_field(strong, seq, &pass.fields, s, t)?;
                match config.alignment {
                    Alignment::BoxProp => {
                        let f = fast.extract_features(image, fast_params)?;
                        let mut boxes = fast.decode(&fast.detect_head(&f, fast_params)?, decode)?;
                        let published = pass.detections[s].as_ref().expect("published frames were processed");
                        boxes.extend(match &gap {
                            Some(d) => propagate_boxes(published, &d.scale(-1.0), stride, seq.image_size()),
                            None => published.clone(),
                        });
                        (nms(boxes, decode.nms_iou), config.alignment.name(), false)
                    }
                    Alignment::FeatureProp | Alignment::None => {
                        let m = pass.features[s].as_ref().expect("published frames were processed");
                        let aligned = match (&gap, config.alignment) {
                            (Some(d), Alignment::FeatureProp) => warp(m, d)?,
                            _ => m.clone(),
                        };
                        let f = fused.extract_features(image, fused_params)?;
                        let mixed = FeatureMap::mean_of(&[&f, &aligned])?;
                        (fused.decode(&fused.detect_head(&mixed, fused_params)?, decode)?, config.alignment.name(), false)
                    }
                }
            }
        };
        detections.push(dets);
        trace.push(TraceRecord {
            frame: t,
            arrival_ms: timing.arrival_us as f64 / 1000.0,
            emit_ms: timing.emit_us as f64 / 1000.0,
            mode: mode.into(),
            strong_frame: timing.strong_frame,
            warmup,
            max_frame_read: t.max(timing.strong_frame.unwrap_or(0)),
        });
    }
    Ok(PipelineRun { detections, trace })
}

/// Simulates every sequence and pools detections into one AP.
pub fn simulate_dataset(
    models: &PipelineModels,
    data: &[SequenceRecord],
    config: &PipelineConfig,
    options: &EvalOptions,
) -> Result<(ApReport, Vec<Vec<TraceRecord>>)> {
    let runs: Vec<PipelineRun> = data
        .par_iter()
        .map(|s| simulate(models, s, config, &options.decode))
        .collect::<Result<_>>()?;
    let dets: Vec<Vec<BBox>> = runs.iter().flat_map(|r| r.detections.iter().cloned()).collect();
    let truth: Vec<Vec<BBox>> = data.iter().flat_map(|s| s.boxes.iter().cloned()).collect();
    let report = average_precision(&dets, &truth, models.fused.0.config.num_classes, options.iou_threshold)?;
    Ok((report, runs.into_iter().map(|r| r.trace).collect()))
}

/// Frames whose output read a later frame, or was emitted later than the
/// fast latency plus one tick allows.
pub fn trace_violations(trace: &[TraceRecord], config: &PipelineConfig) -> Vec<usize> {
    let budget = config.fast_latency_ms + config.tick_ms + 1e-9;
    trace
        .iter()
        .filter(|r| r.max_frame_read > r.frame || r.emit_ms - r.arrival_ms > budget)
        .map(|r| r.frame)
        .collect()
}

/// Detections from the two vertical halves of each frame, overlapping by
/// `overlap` pixels, merged before suppression.
pub fn split_detections(
    model: &Model,
    params: &ParamStore<f32>,
    seq: &SequenceRecord,
    overlap: usize,
    decode: &DecodeConfig,
) -> Result<Vec<Vec<BBox>>> {
    let (h, w) = seq.image_size();
    let s = model.config.stride;
    let half = w / 2;
    let (left_end, right_start) = (half + overlap / 2, half.saturating_sub(overlap / 2));
    if left_end % s != 0 || right_start % s != 0 || left_end > w {
        return Err(Error::Config(format!("split at {half} with overlap {overlap} is not aligned to stride {s}")));
    }
    let crop = |img: &FeatureMap<f32>, x0: usize, x1: usize| FeatureMap::from_fn(h, x1 - x0, img.channels(), |y, x, c| img.get(y, x0 + x, c));
    let crop_field = |d: &DisplacementField<f32>, x0: usize, x1: usize| {
        DisplacementField::from_fn(d.height(), (x1 - x0) / s, |i, j| d.get(i, x0 / s + j))
    };
    let mut left = Tracker::new(model, params);
    let mut right = Tracker::new(model, params);
    let layout = model.layout();
    let mut out = Vec::with_capacity(seq.len());
    for t in 0..seq.len() {
        let mut candidates = Vec::new();
        for (tracker, x0, x1) in [(&mut left, 0, left_end), (&mut right, right_start, w)] {
            let img = crop(&seq.frames[t], x0, x1);
            let field = crop_field(&seq.fields[t], x0, x1);
            let o = tracker.step(&img, Some(&field), None, true)?;
            let boxes = decode_candidates(&o.raw, &layout, (h, x1 - x0), decode.score_threshold)?;
            candidates.extend(boxes.into_iter().map(|b| b.translate(x0 as f32, 0.0)));
        }
        out.push(nms(candidates, decode.nms_iou));
    }
    Ok(out)
}

/// Pooled AP of [`split_detections`].
pub fn evaluate_split(model: &Model, params: &ParamStore<f32>, data: &[SequenceRecord], overlap: usize, options: &EvalOptions) -> Result<ApReport> {
    let dets: Vec<Vec<Vec<BBox>>> = data
        .par_iter()
        .map(|s| split_detections(model, params, s, overlap, &options.decode))
        .collect::<Result<_>>()?;
    let dets: Vec<Vec<BBox>> = dets.into_iter().flatten().collect();
    let truth: Vec<Vec<BBox>> = data.iter().flat_map(|s| s.boxes.iter().cloned()).collect();
    average_precision(&dets, &truth, model.config.num_classes, options.iou_threshold)
}

/// Payload passed from the strong worker thread.
struct StrongPayload {
    frame: usize,
    features: Arc<FeatureMap<f32>>,
}

/// Runs the feature-propagation pipeline with real threads, scaling all
/// latencies by `time_scale` (wall-clock seconds per simulated second).
/// Timing depends on the machine; the trace records measured times.
pub fn simulate_threaded(
    models: &PipelineModels,
    seq: &SequenceRecord,
    config: &PipelineConfig,
    decode: &DecodeConfig,
    time_scale: f64,
) -> Result<PipelineRun> {
    config.validate()?;
    let (strong, strong_params) = models.strong;
    let (fused, fused_params) = models.fused;
    let (fast, fast_params) = models.fast;
    let scaled = |ms: f64| Duration::from_secs_f64((ms / 1000.0 * time_scale).max(0.0));
    let fields = model_fields(strong, strong_params, seq)?;
    let (frame_tx, frame_rx) = mpsc::channel::<usize>();
    let (payload_tx, payload_rx) = mpsc::channel::<Result<StrongPayload>>();
    let start = Instant::now();
    std::thread::scope(|scope| {
        scope.spawn(move || {
            let mut tracker = Tracker::new(strong, strong_params);
            let mut busy_until = Instant::now();
            for t in frame_rx {
                let evidence = t % config.strong_update_period == 0 && Instant::now() >= busy_until;
                let out = tracker.step_record(seq, t, evidence);
                match out {
                    Ok(o) if evidence => {
                        std::thread::sleep(scaled(config.strong_latency_ms));
                        busy_until = Instant::now();
                        if payload_tx.send(Ok(StrongPayload { frame: t, features: Arc::new(o.features) })).is_err() {
                            return;
                        }
                    }
                    Ok(_) => {}
                    Err(e) => {
                        let _ = payload_tx.send(Err(e));
                        return;
                    }
                }
            }
        });
        let mut latest: Option<StrongPayload> = None;
        let mut detections = Vec::with_capacity(seq.len());
        let mut trace = Vec::with_capacity(seq.len());
        for t in 0..seq.len() {
            let due = scaled(t as f64 * config.frame_period_ms);
            if let Some(wait) = due.checked_sub(start.elapsed()) {
                std::thread::sleep(wait);
            }
            let arrival = start.elapsed();
            let _ = frame_tx.send(t);
            std::thread::sleep(scaled(config.fast_latency_ms));
            while let Ok(p) = payload_rx.try_recv() {
                let p = p?;
                if p.frame <= t {
                    latest = Some(p);
                }
            }
            let dets = match &latest {
                None => {
                    let f = fast.extract_features(&seq.frames[t], fast_params)?;
                    fast.decode(&fast.detect_head(&f, fast_params)?, decode)?
                }
                Some(p) => {
                    let aligned = match span_field(strong, seq, &fields, p.frame, t)? {
                        Some(d) => warp(&p.features, &d)?,
                        None => (*p.features).clone(),
                    };
                    let f = fused.extract_features(&seq.frames[t], fused_params)?;
                    let mixed = FeatureMap::mean_of(&[&f, &aligned])?;
                    fused.decode(&fused.detect_head(&mixed, fused_params)?, decode)?
                }
            };
            detections.push(dets);
            trace.push(TraceRecord {
                frame: t,
                arrival_ms: arrival.as_secs_f64() * 1000.0 / time_scale,
                emit_ms: start.elapsed().as_secs_f64() * 1000.0 / time_scale,
                mode: if latest.is_some() { "feature-prop" } else { "warmup" }.into(),
                strong_frame: latest.as_ref().map(|p| p.frame),
                warmup: latest.is_none(),
                max_frame_read: t.max(latest.as_ref().map_or(0, |p| p.frame)),
            });
        }
        drop(frame_tx);
        Ok(PipelineRun { detections, trace })
    })
}
