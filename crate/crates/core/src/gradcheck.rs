//! Finite-difference checks of the hand-written backward passes, in f64.
//!
//! Every check perturbs one scalar by `±step`, takes the central difference
//! of a scalar loss and compares it to the analytic gradient. Coordinates
//! where the loss has a kink inside the probe interval (ReLU or bilinear cell
//! boundaries) are detected from disagreeing one-sided slopes and skipped.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::detection::{detection_loss, BBox, HeadLayout};
use crate::error::{Error, Result};
use crate::graph::{Graph, Tape};
use crate::memory::{aggregate, aggregate_in, AggregationScheme, WeightNets};
use crate::model::{FlowKind, Model, ModelConfig, SchemeKind, Variant};
use crate::params::ParamStore;
use crate::tensor::{DisplacementField, FeatureMap};
use crate::training::{forward_sequence, sequence_loss, Clip};
use crate::warp::{warp, warp_backward};
use crate::worldgen::{generate, SceneSampler};

pub const OP_TOLERANCE: f64 = 1e-4;
pub const MODEL_TOLERANCE: f64 = 1e-3;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GradcheckConfig {
    pub step: f64,
    pub coordinates: usize,
    pub seed: u64,
}

impl Default for GradcheckConfig {
    fn default() -> Self {
        Self { step: 1e-4, coordinates: 100, seed: 0 }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CheckReport {
    pub name: String,
    pub checked: usize,
    pub skipped: usize,
    pub max_rel_error: f64,
    pub tolerance: f64,
    pub min_coordinates: usize,
}

impl CheckReport {
    pub fn passed(&self) -> bool {
        self.checked >= self.min_coordinates && self.max_rel_error < self.tolerance
    }
}

/// Gradients below this magnitude are compared absolutely.
const FLOOR: f64 = 1e-6;

pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(FLOOR)
}

struct Probe {
    step: f64,
    checked: usize,
    skipped: usize,
    max_err: f64,
}

impl Probe {
    fn new(step: f64) -> Self {
        Self { step, checked: 0, skipped: 0, max_err: 0.0 }
    }

    /// `loss(offset)` evaluates the loss with the coordinate moved by `offset`.
    fn check(&mut self, analytic: f64, mut loss: impl FnMut(f64) -> Result<f64>) -> Result<()> {
        let h = self.step;
        let (lp, l0, lm) = (loss(h)?, loss(0.0)?, loss(-h)?);
        let forward = (lp - l0) / h;
        let backward = (l0 - lm) / h;
        let central = (lp - lm) / (2.0 * h);
        let jump = (forward - backward).abs();
        if jump > 1e-2 * forward.abs().max(backward.abs()) && jump > 1e-6 {
            self.skipped += 1;
            return Ok(());
        }
        self.checked += 1;
        self.max_err = self.max_err.max(relative_error(analytic, central));
        Ok(())
    }

    fn report(self, name: &str, tolerance: f64, min_coordinates: usize) -> CheckReport {
        CheckReport {
            name: name.into(),
            checked: self.checked,
            skipped: self.skipped,
            max_rel_error: self.max_err,
            tolerance,
            min_coordinates,
        }
    }
}

fn dot(a: &FeatureMap<f64>, b: &FeatureMap<f64>) -> f64 {
    a.data().iter().zip(b.data()).map(|(x, y)| x * y).sum()
}

fn random_map(rng: &mut impl Rng, h: usize, w: usize, c: usize, scale: f64) -> FeatureMap<f64> {
    FeatureMap::from_fn(h, w, c, |_, _, _| rng.gen_range(-scale..scale))
}

/// Random field whose sampling positions stay away from integer coordinates.
fn non_integer_field(rng: &mut impl Rng, h: usize, w: usize) -> DisplacementField<f64> {
    let pick = |rng: &mut ChaCha8Rng| {
        let whole = rng.gen_range(-1i32..=1) as f64;
        whole + rng.gen_range(0.1..0.9)
    };
    let mut local = ChaCha8Rng::seed_from_u64(rng.gen());
    DisplacementField::from_fn(h, w, |_, _| (pick(&mut local), pick(&mut local)))
}

/// Warp gradients with respect to the source and the field.
pub fn check_warp(config: &GradcheckConfig) -> Result<CheckReport> {
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut probe = Probe::new(config.step);
    while probe.checked < config.coordinates {
        let source = random_map(&mut rng, 4, 4, 2, 1.0);
        let field = non_integer_field(&mut rng, 4, 4);
        let upstream = random_map(&mut rng, 4, 4, 2, 1.0);
        let grads = warp_backward(&source, &field, &upstream)?;
        for k in 0..source.data().len() {
            probe.check(grads.d_source.data()[k], |off| {
                let mut s = source.clone();
                s.data_mut()[k] += off;
                Ok(dot(&warp(&s, &field)?, &upstream))
            })?;
        }
        for k in 0..field.as_map().data().len() {
            probe.check(grads.d_field.as_map().data()[k], |off| {
                let mut m = field.as_map().clone();
                m.data_mut()[k] += off;
                Ok(dot(&warp(&source, &DisplacementField::from_map(m)?)?, &upstream))
            })?;
        }
    }
    Ok(probe.report("warp_backward", OP_TOLERANCE, config.coordinates))
}

/// Learned-weighting aggregation: both inputs and the weight-net parameters.
pub fn check_aggregation(config: &GradcheckConfig) -> Result<CheckReport> {
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed ^ 0xa66);
    let mut probe = Probe::new(config.step);
    while probe.checked < config.coordinates {
        let mut params = ParamStore::<f64>::new();
        let nets = WeightNets::register(&mut params, &mut rng, "memory", 4)?;
        let scheme = AggregationScheme::LearnedWeighting(nets);
        let memory = random_map(&mut rng, 4, 4, 4, 1.0);
        let evidence = random_map(&mut rng, 4, 4, 4, 1.0);
        let upstream = random_map(&mut rng, 4, 4, 4, 1.0);
        let mut tape = Tape::new();
        let m = tape.input(memory.clone());
        let e = tape.input(evidence.clone());
        let out = aggregate_in(&mut tape, &m, &e, &scheme, &params)?;
        let adj = tape.backward(&params, &[(out, upstream.clone())])?;
        let missing = || Error::Tape("aggregation input received no gradient".into());
        let dm = adj.of(m).ok_or_else(missing)?.clone();
        let de = adj.of(e).ok_or_else(missing)?.clone();
        for k in 0..memory.data().len() {
            probe.check(dm.data()[k], |off| {
                let mut x = memory.clone();
                x.data_mut()[k] += off;
                Ok(dot(&aggregate(&x, &evidence, &scheme, &params)?, &upstream))
            })?;
            probe.check(de.data()[k], |off| {
                let mut x = evidence.clone();
                x.data_mut()[k] += off;
                Ok(dot(&aggregate(&memory, &x, &scheme, &params)?, &upstream))
            })?;
        }
        for _ in 0..config.coordinates {
            let flat = rng.gen_range(0..params.num_scalars());
            let (id, k) = params.locate(flat).expect("flat index in range");
            let analytic = adj.params.get(id)[k];
            probe.check(analytic, |off| {
                let mut p = params.clone();
                p.get_mut(id)[k] += off;
                Ok(dot(&aggregate(&memory, &evidence, &scheme, &p)?, &upstream))
            })?;
        }
    }
    Ok(probe.report("aggregate(learned-weighting)", OP_TOLERANCE, config.coordinates))
}

/// Detection loss with respect to the raw head map.
pub fn check_detection_loss(config: &GradcheckConfig) -> Result<CheckReport> {
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed ^ 0xde7);
    let layout = HeadLayout { num_classes: 3, stride: 4 };
    let normal = Normal::new(0.0, 1.5).expect("valid std");
    let mut probe = Probe::new(config.step);
    while probe.checked < config.coordinates {
        let raw = FeatureMap::from_fn(4, 4, layout.channels(), |_, _, _| normal.sample(&mut rng));
        let truth: Vec<BBox> = (0..2)
            .map(|i| {
                let x0 = rng.gen_range(0.0..8.0f32);
                let y0 = rng.gen_range(0.0..8.0f32);
                let w = rng.gen_range(4.0..8.0f32);
                let h = rng.gen_range(4.0..8.0f32);
                BBox::truth(x0, y0, x0 + w, y0 + h, i % 3)
            })
            .collect();
        let (_, grad) = detection_loss(&raw, &truth, &layout)?;
        for k in 0..raw.data().len() {
            probe.check(grad.data()[k], |off| {
                let mut r = raw.clone();
                r.data_mut()[k] += off;
                Ok(detection_loss(&r, &truth, &layout)?.0)
            })?;
        }
    }
    Ok(probe.report("detection_loss", OP_TOLERANCE, config.coordinates))
}

/// The model used by [`check_model`]: a memory network with learned
/// weighting and the toy flow estimator, on an 8×8 feature grid.
pub fn toy_model_config() -> ModelConfig {
    ModelConfig {
        variant: Variant::MemNet,
        scheme: SchemeKind::LearnedWeighting,
        flow: FlowKind::Toy,
        image_size: [32, 32],
        stride: 4,
        feature_channels: 8,
        head_hidden: 8,
        num_classes: 3,
        ..ModelConfig::default()
    }
}

/// Loss of a two-frame unroll with respect to every parameter array:
/// extractor, flow estimator, weight nets and head.
pub fn check_model(config: &GradcheckConfig) -> Result<CheckReport> {
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed ^ 0x30de1);
    let model_config = toy_model_config();
    let (model, mut params) = Model::build::<f64>(&model_config, config.seed)?;
    // the last flow layer starts at zero; give it some motion
    for p in params.iter_mut().filter(|p| p.name.starts_with("flow.conv2")) {
        for v in &mut p.data {
            *v = rng.gen_range(-0.05..0.05);
        }
    }
    let sampler = SceneSampler::default();
    let spec = sampler.sample(2, &mut rng)?;
    let record = generate(&spec, 2, rng.gen())?;
    let clip: Clip<f64> = Clip::from_record(&record, 0, 2)?.cast();
    let evidence = [true, true];
    let loss_of = |p: &ParamStore<f64>| -> Result<f64> {
        let seq = forward_sequence(&model, p, &clip, &evidence)?;
        Ok(sequence_loss(&model, &seq, &clip.boxes, None)?.0)
    };
    let seq = forward_sequence(&model, &params, &clip, &evidence)?;
    let (_, seeds) = sequence_loss(&model, &seq, &clip.boxes, None)?;
    let grads = seq.tape.backward(&params, &seeds)?.params;

    let arrays: Vec<_> = params.iter().map(|(id, p)| (id, p.data.len())).collect();
    let mut probe = Probe::new(config.step);
    let mut round = 0usize;
    while probe.checked < config.coordinates {
        let (id, len) = arrays[round % arrays.len()];
        round += 1;
        if round > 20 * config.coordinates {
            break;
        }
        let k = rng.gen_range(0..len);
        let analytic = grads.get(id)[k];
        probe.check(analytic, |off| {
            let mut p = params.clone();
            p.get_mut(id)[k] += off;
            loss_of(&p)
        })?;
    }
    Ok(probe.report("model(2-frame unroll)", MODEL_TOLERANCE, config.coordinates))
}

/// All checks in order: the three operators, then the full model.
pub fn run_all(config: &GradcheckConfig) -> Result<Vec<CheckReport>> {
    Ok(vec![check_warp(config)?, check_aggregation(config)?, check_detection_loss(config)?, check_model(config)?])
}
