//! The detector: a strided convolutional feature extractor, an optional
//! warped memory, and a dense head. One forward routine serves inference
//! and training by running on either graph executor.

use std::fs;
use std::path::Path;
use std::sync::Arc;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::conv::{ConvLayer, Init};
use crate::detection::{decode, BBox, DecodeConfig, HeadLayout, HeadOutput};
use crate::error::{Error, Result};
use crate::graph::{Eager, Graph};
use crate::io::{read_tensor, write_tensor};
use crate::memory::{AggregationScheme, ClockConfig, Memory, MemoryState, StepMotion, WeightNets};
use crate::motion::{estimate_flow, FlowSource, ToyEstimator};
use crate::params::ParamStore;
use crate::tensor::{DisplacementField, FeatureMap, Real};
use crate::worldgen::SequenceRecord;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Variant {
    PerFrame,
    MemNet,
    ClockNet,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum SchemeKind {
    Average,
    LearnedWeighting,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum FlowKind {
    GroundTruth,
    Toy,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ModelConfig {
    pub variant: Variant,
    /// Time-axis ids for ClockNet; MemNet always uses a single stride-1 axis.
    pub clock_axes: Vec<u32>,
    pub scheme: SchemeKind,
    pub flow: FlowKind,
    /// Height and width in pixels.
    pub image_size: [usize; 2],
    pub stride: usize,
    pub feature_channels: usize,
    pub head_hidden: usize,
    pub num_classes: usize,
    /// Read only the luma of each pixel.
    pub luma_only: bool,
    /// Initial objectness bias; negative values start with few detections.
    pub objectness_prior: f64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            variant: Variant::MemNet,
            clock_axes: vec![],
            scheme: SchemeKind::LearnedWeighting,
            flow: FlowKind::GroundTruth,
            image_size: [32, 32],
            stride: 4,
            feature_channels: 16,
            head_hidden: 32,
            num_classes: 3,
            luma_only: false,
            objectness_prior: -2.0,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::Config(m.to_string()));
        let [h, w] = self.image_size;
        if self.stride == 0 || h % self.stride != 0 || w % self.stride != 0 || h == 0 || w == 0 {
            return bad("image size must be a positive multiple of the stride");
        }
        if self.feature_channels == 0 || self.head_hidden == 0 || self.num_classes == 0 {
            return bad("layer widths and class count must be positive");
        }
        match self.variant {
            Variant::PerFrame | Variant::MemNet if !self.clock_axes.is_empty() => {
                bad("clock axes are only meaningful for clocknet")
            }
            Variant::ClockNet => ClockConfig::new(self.clock_axes.clone()).map(|_| ()),
            _ => Ok(()),
        }
    }

    pub fn clock(&self) -> Result<ClockConfig> {
        match self.variant {
            Variant::ClockNet => ClockConfig::new(self.clock_axes.clone()),
            _ => Ok(ClockConfig::single()),
        }
    }

    pub fn grid(&self) -> (usize, usize) {
        (self.image_size[0] / self.stride, self.image_size[1] / self.stride)
    }

    pub fn layout(&self) -> HeadLayout {
        HeadLayout { num_classes: self.num_classes, stride: self.stride }
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Extractor {
    pub patch: ConvLayer,
    pub refine: ConvLayer,
    pub luma_only: bool,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Head {
    pub hidden: ConvLayer,
    pub out: ConvLayer,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Model {
    pub config: ModelConfig,
    pub extractor: Extractor,
    pub head: Head,
    /// One aggregation per memory axis.
    pub schemes: Vec<AggregationScheme>,
    pub flow: FlowSource,
    pub clock: ClockConfig,
}

/// Image-to-network input: the image itself or its luma.
pub fn prepare_image<T: Real>(image: &FeatureMap<T>, luma_only: bool) -> FeatureMap<T> {
    if !luma_only {
        return image.clone();
    }
    let (r, g, b) = (T::lit(0.299), T::lit(0.587), T::lit(0.114));
    FeatureMap::from_fn(image.height(), image.width(), 1, |y, x, _| {
        let p = image.pixel(y, x);
        r * p[0] + g * p[1] + b * p[2]
    })
}

/// One frame of input to [`Model::frame_in`].
#[derive(Clone, Copy, Debug)]
pub struct FrameInput<'a, T: Real> {
    pub image: &'a FeatureMap<T>,
    /// Previous image, read by a learned flow estimator.
    pub previous: Option<&'a FeatureMap<T>>,
    /// Generator field for this frame.
    pub truth_field: Option<&'a DisplacementField<T>>,
    /// Generator fields reaching 1, 2, ... frames back. Memory axes that
    /// skip frames warp with these directly instead of composing.
    pub truth_gaps: Option<&'a [DisplacementField<T>]>,
    /// Replaces whatever the flow source would produce.
    pub field_override: Option<&'a DisplacementField<T>>,
    /// Whether this frame's features are aggregated.
    pub evidence: bool,
    /// Features averaged with the model's own before the head.
    pub companion: Option<&'a FeatureMap<T>>,
}

impl<'a, T: Real> FrameInput<'a, T> {
    pub fn new(image: &'a FeatureMap<T>) -> Self {
        Self { image, previous: None, truth_field: None, truth_gaps: None, field_override: None, evidence: true, companion: None }
    }
}

impl Model {
    /// Registers all parameters with a seeded initialization.
    pub fn build<T: Real>(config: &ModelConfig, seed: u64) -> Result<(Self, ParamStore<T>)> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParamStore::new();
        let cin = if config.luma_only { 1 } else { 3 };
        let d = config.feature_channels;
        let s = config.stride;
        let extractor = Extractor {
            patch: ConvLayer::register(&mut store, &mut rng, "extractor.patch", cin, d, s, s, 0, Init::He)?,
            refine: ConvLayer::register(&mut store, &mut rng, "extractor.refine", d, d, 3, 1, 1, Init::He)?,
            luma_only: config.luma_only,
        };
        let head = Head {
            hidden: ConvLayer::register(&mut store, &mut rng, "head.hidden", d, config.head_hidden, 3, 1, 1, Init::He)?,
            out: ConvLayer::register(&mut store, &mut rng, "head.out", config.head_hidden, 5 + config.num_classes, 1, 1, 0, Init::He)?,
        };
        store.get_mut(head.out.bias)[0] = T::lit(config.objectness_prior);
        let memory_used = config.variant != Variant::PerFrame;
        let clock = config.clock()?;
        let schemes = (0..clock.axis_ids().len())
            .map(|k| match config.scheme {
                SchemeKind::LearnedWeighting if memory_used => {
                    let prefix = if k == 0 { "memory".to_string() } else { format!("memory.axis{k}") };
                    Ok(AggregationScheme::LearnedWeighting(WeightNets::register(&mut store, &mut rng, &prefix, d)?))
                }
                _ => Ok(AggregationScheme::Average),
            })
            .collect::<Result<Vec<_>>>()?;
        let flow = match config.flow {
            FlowKind::Toy if memory_used => FlowSource::ToyEstimator(ToyEstimator::register(&mut store, &mut rng, "flow", 3, s)?),
            _ => FlowSource::GroundTruth,
        };
        let model = Self { config: config.clone(), extractor, head, schemes, flow, clock };
        Ok((model, store))
    }

    pub fn layout(&self) -> HeadLayout {
        self.config.layout()
    }

    pub fn uses_memory(&self) -> bool {
        self.config.variant != Variant::PerFrame
    }

    pub fn new_state<V: Clone>(&self) -> MemoryState<V> {
        MemoryState::new(&self.clock)
    }

    /// The network is fully convolutional: any RGB image whose sides are
    /// multiples of the stride is accepted.
    fn check_image<T: Real>(&self, image: &FeatureMap<T>) -> Result<()> {
        let s = self.config.stride;
        let (h, w, c) = image.shape();
        if c != 3 || h == 0 || w == 0 || h % s != 0 || w % s != 0 {
            return Err(Error::dim("model input", format!("RGB with sides divisible by {s}"), format!("{h}x{w}x{c}")));
        }
        Ok(())
    }

    pub fn extract_in<T: Real, G: Graph<T>>(&self, g: &mut G, image: &FeatureMap<T>, params: &ParamStore<T>) -> Result<G::Var> {
        self.check_image(image)?;
        let x = g.input(prepare_image(image, self.extractor.luma_only));
        let h = g.conv(&x, &self.extractor.patch, params)?;
        let h = g.relu(&h);
        let h = g.conv(&h, &self.extractor.refine, params)?;
        Ok(g.relu(&h))
    }

    pub fn head_in<T: Real, G: Graph<T>>(&self, g: &mut G, features: &G::Var, params: &ParamStore<T>) -> Result<G::Var> {
        let h = g.conv(features, &self.head.hidden, params)?;
        let h = g.relu(&h);
        g.conv(&h, &self.head.out, params)
    }

    /// Field that carries the memory from the previous frame to this one.
    fn field_in<T: Real, G: Graph<T>>(&self, g: &mut G, input: &FrameInput<T>, params: &ParamStore<T>) -> Result<G::Var> {
        if let Some(d) = input.field_override {
            return Ok(g.input(d.as_map().clone()));
        }
        match &self.flow {
            FlowSource::GroundTruth => {
                let d = input
                    .truth_field
                    .ok_or_else(|| Error::Config("ground-truth flow needs the generator field".into()))?;
                Ok(g.input(d.as_map().clone()))
            }
            FlowSource::ToyEstimator(net) => {
                let prev = input
                    .previous
                    .ok_or_else(|| Error::Config("learned flow needs the previous image".into()))?;
                net.run(g, input.image, prev, params)
            }
        }
    }

    /// Exact per-axis fields when the generator supplied enough of them.
    fn direct_fields_in<T: Real, G: Graph<T>>(&self, g: &mut G, state: &MemoryState<G::Var>, input: &FrameInput<T>) -> Option<Vec<G::Var>> {
        if input.field_override.is_some() || !matches!(self.flow, FlowSource::GroundTruth) {
            return None;
        }
        let gaps = input.truth_gaps?;
        let ages = state.ages();
        if ages.iter().any(|&a| a == 0 || a as usize > gaps.len()) {
            return None;
        }
        Some(ages.iter().map(|&a| g.input(gaps[a as usize - 1].as_map().clone())).collect())
    }

    /// Advances `state` by one frame and returns `(features, raw head map)`.
    pub fn frame_in<T: Real, G: Graph<T>>(
        &self,
        g: &mut G,
        state: &mut MemoryState<G::Var>,
        input: &FrameInput<T>,
        params: &ParamStore<T>,
    ) -> Result<(G::Var, G::Var)> {
        let mut features = if self.uses_memory() {
            let evidence = if input.evidence {
                Some(self.extract_in(g, input.image, params)?)
            } else {
                None
            };
            if state.frame_counter() == 0 {
                state.advance_in(g, evidence.as_ref(), None, &self.schemes, params)?;
            } else if let Some(direct) = self.direct_fields_in(g, state, input) {
                state.advance_in(g, evidence.as_ref(), Some(StepMotion::Direct(&direct)), &self.schemes, params)?;
            } else {
                let field = self.field_in(g, input, params)?;
                state.advance_in(g, evidence.as_ref(), Some(StepMotion::PerFrame(&field)), &self.schemes, params)?;
            }
            state.fuse_in(g)?
        } else {
            if !input.evidence {
                return Err(Error::Config("a per-frame detector needs evidence at every frame".into()));
            }
            self.extract_in(g, input.image, params)?
        };
        if let Some(c) = input.companion {
            let c = g.input(c.clone());
            features = g.mean(&[features, c])?;
        }
        let raw = self.head_in(g, &features, params)?;
        Ok((features, raw))
    }

    /// Boxes from a raw head map; the image is assumed to span the map.
    pub fn decode(&self, raw: &FeatureMap<f32>, config: &DecodeConfig) -> Result<Vec<BBox>> {
        let s = self.config.stride;
        decode(raw, &self.layout(), (raw.height() * s, raw.width() * s), config)
    }

    pub fn split_head<T: Real>(&self, raw: &FeatureMap<T>) -> Result<HeadOutput<T>> {
        HeadOutput::split(raw, &self.layout())
    }

    /// Field from `previous` to `image` according to the model's flow source.
    pub fn motion_field(
        &self,
        image: &FeatureMap<f32>,
        previous: &FeatureMap<f32>,
        truth: Option<&DisplacementField<f32>>,
        params: &ParamStore<f32>,
    ) -> Result<DisplacementField<f32>> {
        estimate_flow(image, previous, &self.flow, params, truth)
    }

    /// Extracts features of a single image.
    pub fn extract_features(&self, image: &FeatureMap<f32>, params: &ParamStore<f32>) -> Result<FeatureMap<f32>> {
        Ok(Arc::unwrap_or_clone(self.extract_in(&mut Eager, image, params)?))
    }

    /// Raw head map over an arbitrary feature map.
    pub fn detect_head(&self, features: &FeatureMap<f32>, params: &ParamStore<f32>) -> Result<FeatureMap<f32>> {
        let f = Arc::new(features.clone());
        Ok(Arc::unwrap_or_clone(self.head_in(&mut Eager, &f, params)?))
    }
}

/// Eager output of one frame.
#[derive(Clone, Debug, PartialEq)]
pub struct FrameOutput {
    pub features: FeatureMap<f32>,
    pub raw: FeatureMap<f32>,
}

/// Runs a model online, one frame at a time.
#[derive(Clone, Debug)]
pub struct Tracker<'a> {
    model: &'a Model,
    params: &'a ParamStore<f32>,
    state: Memory<f32>,
    previous: Option<FeatureMap<f32>>,
}

impl<'a> Tracker<'a> {
    pub fn new(model: &'a Model, params: &'a ParamStore<f32>) -> Self {
        Self { model, params, state: model.new_state(), previous: None }
    }

    pub fn state(&self) -> &Memory<f32> {
        &self.state
    }

    pub fn frames_seen(&self) -> u64 {
        self.state.frame_counter()
    }

    /// Processes one frame. `truth` is the generator field for this frame;
    /// `field_override` replaces the flow source.
    pub fn step(
        &mut self,
        image: &FeatureMap<f32>,
        truth: Option<&DisplacementField<f32>>,
        field_override: Option<&DisplacementField<f32>>,
        evidence: bool,
    ) -> Result<FrameOutput> {
        self.run(image, truth, None, field_override, evidence)
    }

    /// Processes one frame given the generator fields reaching 1, 2, ...
    /// frames back (see [`SequenceRecord::gap_fields`](crate::worldgen::SequenceRecord::gap_fields)).
    pub fn step_exact(&mut self, image: &FeatureMap<f32>, gaps: &[DisplacementField<f32>], evidence: bool) -> Result<FrameOutput> {
        self.run(image, gaps.first(), Some(gaps), None, evidence)
    }

    /// Processes frame `t` of a generated sequence with its exact fields.
    /// The tracker must have seen frames `0..t` of the same sequence.
    pub fn step_record(&mut self, seq: &SequenceRecord, t: usize, evidence: bool) -> Result<FrameOutput> {
        let reach = self.state.ages().into_iter().max().unwrap_or(0).max(1) as usize;
        let gaps = seq.gap_fields_at(t, reach);
        self.step_exact(&seq.frames[t], &gaps, evidence)
    }

    fn run(
        &mut self,
        image: &FeatureMap<f32>,
        truth: Option<&DisplacementField<f32>>,
        truth_gaps: Option<&[DisplacementField<f32>]>,
        field_override: Option<&DisplacementField<f32>>,
        evidence: bool,
    ) -> Result<FrameOutput> {
        let input = FrameInput {
            image,
            previous: self.previous.as_ref(),
            truth_field: truth,
            truth_gaps,
            field_override,
            evidence,
            companion: None,
        };
        let (features, raw) = self.model.frame_in(&mut Eager, &mut self.state, &input, self.params)?;
        self.previous = Some(image.clone());
        Ok(FrameOutput { features: Arc::unwrap_or_clone(features), raw: Arc::unwrap_or_clone(raw) })
    }
}

#[derive(Serialize, Deserialize)]
struct CheckpointEntry {
    name: String,
    shape: Vec<usize>,
    file: String,
}

#[derive(Serialize, Deserialize)]
struct CheckpointManifest {
    seed: u64,
    config: ModelConfig,
    params: Vec<CheckpointEntry>,
}

/// Writes every parameter array as a `1 x 1 x n` tensor plus `model.json`.
pub fn save_checkpoint(config: &ModelConfig, seed: u64, params: &ParamStore<f32>, dir: impl AsRef<Path>) -> Result<()> {
    let dir = dir.as_ref();
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let mut entries = Vec::new();
    for (id, p) in params.iter() {
        let file = format!("param_{:03}.mwtn", id.index());
        let map = FeatureMap::new(1, 1, p.data.len(), p.data.clone())?;
        write_tensor(dir.join(&file), &map)?;
        entries.push(CheckpointEntry { name: p.name.clone(), shape: p.shape.clone(), file });
    }
    let manifest = CheckpointManifest { seed, config: config.clone(), params: entries };
    let path = dir.join("model.json");
    let text = serde_json::to_string_pretty(&manifest).map_err(|e| Error::parse(&path, e))?;
    fs::write(&path, text + "\n").map_err(|e| Error::io(&path, e))
}

/// Rebuilds the model from its config and overwrites every parameter with
/// the stored values.
pub fn load_checkpoint(dir: impl AsRef<Path>) -> Result<(Model, ParamStore<f32>)> {
    let dir = dir.as_ref();
    let path = dir.join("model.json");
    let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
    let m: CheckpointManifest = serde_json::from_str(&text).map_err(|e| Error::parse(&path, e))?;
    let (model, mut params) = Model::build::<f32>(&m.config, m.seed)?;
    if m.params.len() != params.len() {
        return Err(Error::parse(&path, format!("{} arrays stored, model has {}", m.params.len(), params.len())));
    }
    for e in &m.params {
        let id = params
            .id_of(&e.name)
            .ok_or_else(|| Error::parse(&path, format!("unknown parameter {}", e.name)))?;
        if params.param(id).shape != e.shape {
            return Err(Error::parse(&path, format!("shape of {} differs", e.name)));
        }
        let map = read_tensor(dir.join(&e.file))?;
        let dst = params.get_mut(id);
        if map.data().len() != dst.len() {
            return Err(Error::parse(&path, format!("length of {} differs", e.name)));
        }
        dst.copy_from_slice(map.data());
    }
    Ok((model, params))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn config(variant: Variant) -> ModelConfig {
        ModelConfig {
            variant,
            clock_axes: if variant == Variant::ClockNet { vec![1, 2] } else { vec![] },
            ..ModelConfig::default()
        }
    }

    fn image(seed: u64) -> FeatureMap<f32> {
        FeatureMap::from_fn(32, 32, 3, |y, x, c| (((y * 31 + x * 17 + c * 7) as u64 + seed) % 13) as f32 / 13.0)
    }

    #[test]
    fn feature_shape_contract() {
        let (m, p) = Model::build::<f32>(&config(Variant::PerFrame), 0).unwrap();
        assert_eq!(m.extract_features(&image(0), &p).unwrap().shape(), (8, 8, 16));
        assert!(m.extract_features(&FeatureMap::zeros(30, 32, 3), &p).is_err());
        assert_eq!(m.extract_features(&FeatureMap::zeros(32, 20, 3), &p).unwrap().shape(), (8, 5, 16));
    }

    #[test]
    fn zero_image_with_zero_bias_gives_zero_features() {
        let (m, p) = Model::build::<f32>(&config(Variant::PerFrame), 0).unwrap();
        let f = m.extract_features(&FeatureMap::zeros(32, 32, 3), &p).unwrap();
        assert!(f.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn receptive_field_is_local() {
        let (m, p) = Model::build::<f32>(&config(Variant::PerFrame), 1).unwrap();
        let a = image(3);
        let mut b = a.clone();
        // cell (0,0) sees pixels 0..8 through the 3x3 refine layer
        for y in 20..32 {
            for x in 0..32 {
                b.set(y, x, 0, 5.0);
            }
        }
        let fa = m.extract_features(&a, &p).unwrap();
        let fb = m.extract_features(&b, &p).unwrap();
        assert_eq!(fa.pixel(0, 0), fb.pixel(0, 0));
        assert_ne!(fa.pixel(7, 0), fb.pixel(7, 0));
    }

    #[test]
    fn first_frame_of_memnet_matches_per_frame_path() {
        let (m, p) = Model::build::<f32>(&config(Variant::MemNet), 2).unwrap();
        let img = image(1);
        let mut t = Tracker::new(&m, &p);
        let out = t.step(&img, None, None, true).unwrap();
        assert_eq!(out.features, m.extract_features(&img, &p).unwrap());
        assert_eq!(out.raw, m.detect_head(&out.features, &p).unwrap());
        assert!(t.step(&img, None, None, true).is_err(), "ground-truth flow without a field");
    }

    #[test]
    fn config_validation() {
        let mut c = config(Variant::PerFrame);
        c.clock_axes = vec![1];
        assert!(c.validate().is_err());
        let mut c = config(Variant::ClockNet);
        c.clock_axes = vec![];
        assert!(c.validate().is_err());
        let mut c = config(Variant::MemNet);
        c.image_size = [30, 32];
        assert!(c.validate().is_err());
    }

    #[test]
    fn checkpoint_roundtrip() {
        let dir = tempfile::tempdir().unwrap();
        let c = ModelConfig { flow: FlowKind::Toy, ..config(Variant::ClockNet) };
        let (m, mut p) = Model::build::<f32>(&c, 4).unwrap();
        p.get_mut(m.head.out.weight)[3] = 0.123;
        save_checkpoint(&c, 4, &p, dir.path()).unwrap();
        let (m2, p2) = load_checkpoint(dir.path()).unwrap();
        assert_eq!(m2, m);
        assert_eq!(p2, p);
    }
}
