//! Backpropagation through time over short clips, evidence dropout and
//! plain stochastic gradient descent.

use std::io::Write;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::detection::{detection_loss, BBox};
use crate::error::{Error, Result};
use crate::graph::{Tape, VarId};
use crate::model::{FrameInput, Model};
use crate::params::ParamStore;
use crate::tensor::{DisplacementField, FeatureMap, Real};
use crate::worldgen::SequenceRecord;

/// Step decay: `initial` until `decay_at` (a fraction of all steps), then
/// `initial * decay_factor`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct LrSchedule {
    pub initial: f64,
    pub decay_factor: f64,
    pub decay_at: f64,
}

impl Default for LrSchedule {
    fn default() -> Self {
        Self { initial: 0.05, decay_factor: 0.1, decay_at: 2.0 / 3.0 }
    }
}

impl LrSchedule {
    pub fn at(&self, step: usize, total_steps: usize) -> f64 {
        if (step as f64) < self.decay_at * total_steps as f64 {
            self.initial
        } else {
            self.initial * self.decay_factor
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub sequence_length: usize,
    pub evidence_dropout_prob: f64,
    pub lr: LrSchedule,
    pub epochs: usize,
    pub batch_size: usize,
    /// Random clips drawn from every training sequence per epoch.
    pub clips_per_sequence: usize,
    /// Global gradient-norm cap; `None` disables clipping.
    pub clip_norm: Option<f64>,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            sequence_length: 6,
            evidence_dropout_prob: 0.8,
            lr: LrSchedule::default(),
            epochs: 4,
            batch_size: 8,
            clips_per_sequence: 1,
            clip_norm: Some(5.0),
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.sequence_length == 0 || self.batch_size == 0 || self.clips_per_sequence == 0 {
            return Err(Error::Config("sequence length, batch size and clips per sequence must be positive".into()));
        }
        if !(0.0..1.0).contains(&self.evidence_dropout_prob) {
            return Err(Error::Config(format!("dropout probability {} outside [0, 1)", self.evidence_dropout_prob)));
        }
        if !(self.lr.initial >= 0.0 && self.lr.decay_factor >= 0.0) {
            return Err(Error::Config("learning rates must be non-negative".into()));
        }
        Ok(())
    }
}

/// A training window: consecutive frames with their fields and boxes.
#[derive(Clone, Debug, PartialEq)]
pub struct Clip<T: Real = f32> {
    pub images: Vec<FeatureMap<T>>,
    pub fields: Vec<DisplacementField<T>>,
    /// Per frame, exact fields reaching 1, 2, ... frames back within the clip.
    pub gaps: Vec<Vec<DisplacementField<T>>>,
    pub boxes: Vec<Vec<BBox>>,
    /// Extra features averaged in before the head at every frame.
    pub companions: Option<Vec<FeatureMap<T>>>,
}

impl Clip<f32> {
    pub fn from_record(record: &SequenceRecord, start: usize, len: usize) -> Result<Self> {
        if len == 0 || start + len > record.len() {
            return Err(Error::Config(format!("clip {start}+{len} outside a {}-frame sequence", record.len())));
        }
        let r = start..start + len;
        let gaps = record.gap_fields_within(start, start + len, len);
        Ok(Self {
            images: record.frames[r.clone()].to_vec(),
            fields: record.fields[r.clone()].to_vec(),
            gaps,
            boxes: record.boxes[r].to_vec(),
            companions: None,
        })
    }
}

impl<T: Real> Clip<T> {
    pub fn len(&self) -> usize {
        self.images.len()
    }

    pub fn is_empty(&self) -> bool {
        self.images.is_empty()
    }

    pub fn cast<U: Real>(&self) -> Clip<U> {
        Clip {
            images: self.images.iter().map(|m| m.cast()).collect(),
            fields: self.fields.iter().map(|d| d.cast()).collect(),
            gaps: self.gaps.iter().map(|g| g.iter().map(|d| d.cast()).collect()).collect(),
            boxes: self.boxes.clone(),
            companions: self.companions.as_ref().map(|c| c.iter().map(|m| m.cast()).collect()),
        }
    }
}

/// Evidence mask for a clip: the first frame always carries evidence, every
/// later one is dropped with probability `p`.
pub fn sample_evidence(rng: &mut impl Rng, len: usize, p: f64) -> Vec<bool> {
    (0..len).map(|t| t == 0 || p <= 0.0 || !rng.gen_bool(p)).collect()
}

/// Recorded forward pass over a clip.
#[derive(Clone, Debug)]
pub struct SequenceTape<T: Real> {
    pub tape: Tape<T>,
    pub features: Vec<VarId>,
    pub outputs: Vec<VarId>,
}

impl<T: Real> SequenceTape<T> {
    pub fn output(&self, t: usize) -> &FeatureMap<T> {
        &self.tape.nodes()[self.outputs[t].index()].value
    }
}

/// Runs the recurrence over `clip` on a tape. `evidence[t]` says whether
/// frame `t` is aggregated.
pub fn forward_sequence<T: Real>(
    model: &Model,
    params: &ParamStore<T>,
    clip: &Clip<T>,
    evidence: &[bool],
) -> Result<SequenceTape<T>> {
    if evidence.len() != clip.len() {
        return Err(Error::dim("forward_sequence mask", clip.len(), evidence.len()));
    }
    let mut tape = Tape::new();
    let mut state = model.new_state();
    let mut features = Vec::with_capacity(clip.len());
    let mut outputs = Vec::with_capacity(clip.len());
    for t in 0..clip.len() {
        let input = FrameInput {
            image: &clip.images[t],
            previous: t.checked_sub(1).map(|p| &clip.images[p]),
            truth_field: Some(&clip.fields[t]),
            truth_gaps: Some(&clip.gaps[t]),
            field_override: None,
            evidence: evidence[t],
            companion: clip.companions.as_ref().map(|c| &c[t]),
        };
        let (f, raw) = model.frame_in(&mut tape, &mut state, &input, params)?;
        features.push(f);
        outputs.push(raw);
    }
    Ok(SequenceTape { tape, features, outputs })
}

/// Mean per-frame detection loss and its seeds for [`backward_sequence`].
/// Frames with `weights[t] == 0` contribute nothing.
pub fn sequence_loss<T: Real>(
    model: &Model,
    seq: &SequenceTape<T>,
    boxes: &[Vec<BBox>],
    weights: Option<&[f64]>,
) -> Result<(T, Vec<(VarId, FeatureMap<T>)>)> {
    if boxes.len() != seq.outputs.len() {
        return Err(Error::dim("sequence_loss frames", seq.outputs.len(), boxes.len()));
    }
    let n = seq.outputs.len() as f64;
    let mut total = T::zero();
    let mut seeds = Vec::with_capacity(seq.outputs.len());
    for (t, &out) in seq.outputs.iter().enumerate() {
        let w = weights.map_or(1.0, |w| w[t]) / n;
        if w == 0.0 {
            continue;
        }
        let (loss, grad) = detection_loss(seq.output(t), &boxes[t], &model.layout())?;
        total += loss * T::lit(w);
        seeds.push((out, grad.scale(T::lit(w))));
    }
    Ok((total, seeds))
}

/// Gradients of all parameters given per-frame output seeds.
pub fn backward_sequence<T: Real>(
    seq: &SequenceTape<T>,
    params: &ParamStore<T>,
    seeds: &[(VarId, FeatureMap<T>)],
) -> Result<ParamStore<T>> {
    if seeds.iter().any(|(v, _)| !seq.outputs.contains(v)) {
        return Err(Error::Tape("seed does not name a frame output".into()));
    }
    Ok(seq.tape.backward(params, seeds)?.params)
}

/// Loss and gradient of one clip.
pub fn clip_gradient<T: Real>(
    model: &Model,
    params: &ParamStore<T>,
    clip: &Clip<T>,
    evidence: &[bool],
) -> Result<(T, ParamStore<T>)> {
    let seq = forward_sequence(model, params, clip, evidence)?;
    let (loss, seeds) = sequence_loss(model, &seq, &clip.boxes, None)?;
    Ok((loss, backward_sequence(&seq, params, &seeds)?))
}

/// `params -= lr * grads`.
pub fn sgd_step<T: Real>(params: &mut ParamStore<T>, grads: &ParamStore<T>, lr: T) -> Result<()> {
    params.axpy(-lr, grads)
}

/// One line of the metrics log.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricRecord {
    pub step: usize,
    pub epoch: usize,
    pub loss: f64,
    pub lr: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub val_loss: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub map: Option<f64>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainOutcome {
    pub params: ParamStore<f32>,
    pub records: Vec<MetricRecord>,
    /// Mean training loss of each epoch.
    pub epoch_losses: Vec<f64>,
    /// Validation loss after each epoch, if a validation set was given.
    pub val_losses: Vec<f64>,
}

/// Source of training clips. Companion features, when present, are indexed
/// like the sequence frames.
pub struct TrainSet<'a> {
    pub sequences: &'a [SequenceRecord],
    pub companions: Option<&'a [Vec<FeatureMap<f32>>]>,
}

impl<'a> TrainSet<'a> {
    pub fn new(sequences: &'a [SequenceRecord]) -> Self {
        Self { sequences, companions: None }
    }

    fn clip(&self, seq: usize, start: usize, len: usize) -> Result<Clip<f32>> {
        let mut clip = Clip::from_record(&self.sequences[seq], start, len)?;
        if let Some(c) = self.companions {
            clip.companions = Some(c[seq][start..start + len].to_vec());
        }
        Ok(clip)
    }
}

/// Mean per-frame loss over whole sequences with evidence at every frame.
pub fn validation_loss(model: &Model, params: &ParamStore<f32>, set: &TrainSet) -> Result<f64> {
    let losses: Vec<f64> = (0..set.sequences.len())
        .into_par_iter()
        .map(|i| {
            let clip = set.clip(i, 0, set.sequences[i].len())?;
            let seq = forward_sequence(model, params, &clip, &vec![true; clip.len()])?;
            Ok(sequence_loss(model, &seq, &clip.boxes, None)?.0 as f64)
        })
        .collect::<Result<_>>()?;
    Ok(losses.iter().sum::<f64>() / losses.len().max(1) as f64)
}

/// Trains with minibatch SGD. Clips are drawn and masks sampled from
/// `config.seed`; gradients of a batch are computed in parallel and summed
/// in a fixed order, so results do not depend on the thread count.
pub fn train(
    model: &Model,
    mut params: ParamStore<f32>,
    train_set: &TrainSet,
    val_set: Option<&TrainSet>,
    config: &TrainConfig,
    mut log: Option<&mut dyn Write>,
) -> Result<TrainOutcome> {
    config.validate()?;
    let t = config.sequence_length;
    if train_set.sequences.iter().any(|s| s.len() < t) {
        return Err(Error::Config(format!("training sequences shorter than the clip length {t}")));
    }
    let clips_per_epoch = train_set.sequences.len() * config.clips_per_sequence;
    let steps_per_epoch = clips_per_epoch.div_ceil(config.batch_size);
    let total_steps = steps_per_epoch * config.epochs;
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut records = Vec::new();
    let mut epoch_losses = Vec::new();
    let mut val_losses = Vec::new();
    let mut step = 0;
    for epoch in 0..config.epochs {
        let mut windows: Vec<(usize, usize)> = (0..train_set.sequences.len())
            .flat_map(|i| std::iter::repeat(i).take(config.clips_per_sequence))
            .map(|i| (i, rng.gen_range(0..=train_set.sequences[i].len() - t)))
            .collect();
        windows.shuffle(&mut rng);
        let mut epoch_sum = 0.0;
        for batch in windows.chunks(config.batch_size) {
            let jobs: Vec<(usize, usize, Vec<bool>)> = batch
                .iter()
                .map(|&(i, s)| (i, s, sample_evidence(&mut rng, t, config.evidence_dropout_prob)))
                .collect();
            let results: Vec<(f32, ParamStore<f32>)> = jobs
                .par_iter()
                .map(|(i, s, mask)| clip_gradient(model, &params, &train_set.clip(*i, *s, t)?, mask))
                .collect::<Result<_>>()?;
            let mut grads = params.zeros_like();
            let mut loss = 0.0;
            for (l, g) in &results {
                loss += *l as f64;
                grads.axpy(1.0, g)?;
            }
            let n = results.len() as f64;
            loss /= n;
            grads.scale((1.0 / n) as f32);
            if !loss.is_finite() || !grads.all_finite() {
                return Err(Error::Divergence { step, loss });
            }
            if let Some(cap) = config.clip_norm {
                let norm = (grads.squared_norm() as f64).sqrt();
                if norm > cap {
                    grads.scale((cap / norm) as f32);
                }
            }
            let lr = config.lr.at(step, total_steps);
            sgd_step(&mut params, &grads, lr as f32)?;
            if !params.all_finite() {
                return Err(Error::Divergence { step, loss });
            }
            epoch_sum += loss;
            let rec = MetricRecord { step, epoch, loss, lr, val_loss: None, map: None };
            if let Some(w) = log.as_mut() {
                write_record(w, &rec)?;
            }
            records.push(rec);
            step += 1;
        }
        epoch_losses.push(epoch_sum / steps_per_epoch.max(1) as f64);
        if let Some(v) = val_set {
            let vl = validation_loss(model, &params, v)?;
            val_losses.push(vl);
            if let Some(last) = records.last_mut() {
                last.val_loss = Some(vl);
                if let Some(w) = log.as_mut() {
                    write_record(w, last)?;
                }
            }
        }
        log::info!("epoch {epoch}: loss {:.4}", epoch_losses[epoch]);
    }
    Ok(TrainOutcome { params, records, epoch_losses, val_losses })
}

fn write_record(w: &mut dyn Write, rec: &MetricRecord) -> Result<()> {
    let line = serde_json::to_string(rec).map_err(|e| Error::Config(e.to_string()))?;
    writeln!(w, "{line}").map_err(|e| Error::io("metrics log", e))
}
