//! Warped feature memories: the single-rate recurrence and its clockwork
//! multi-rate extension.
//!
//! Each frame the memory is pulled into the current frame by bilinear warping
//! and then merged with the new feature map. A clockwork state keeps `K`
//! memories; axis `k` is refreshed only every `2^(k-1)` frames and, while it
//! waits, accumulates the per-frame motion into a single composed field so
//! that one warp brings it up to date. Fusion averages all axes after
//! aligning each to the current frame.

use std::fs;
use std::path::Path;
use std::sync::Arc;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::conv::{ConvLayer, Init};
use crate::error::{Error, Result};
use crate::graph::{memory_weight, Eager, Graph};
use crate::io::{read_tensor, write_tensor};
use crate::params::ParamStore;
use crate::tensor::{DisplacementField, FeatureMap, Real};
use crate::warp::Padding;

/// Hidden width of each weight network.
pub const WEIGHT_NET_WIDTH: usize = 8;

/// A small score network: 3x3 conv to [`WEIGHT_NET_WIDTH`], rectifier, 1x1
/// conv to a single score channel.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ScoreNet {
    pub hidden: ConvLayer,
    pub score: ConvLayer,
}

impl ScoreNet {
    pub fn register<T: Real>(
        store: &mut ParamStore<T>,
        rng: &mut impl Rng,
        name: &str,
        channels: usize,
    ) -> Result<Self> {
        Ok(Self {
            hidden: ConvLayer::register(store, rng, &format!("{name}.hidden"), channels, WEIGHT_NET_WIDTH, 3, 1, 1, Init::He)?,
            score: ConvLayer::register(store, rng, &format!("{name}.score"), WEIGHT_NET_WIDTH, 1, 1, 1, 0, Init::He)?,
        })
    }

    pub(crate) fn run<T: Real, G: Graph<T>>(&self, g: &mut G, x: &G::Var, params: &ParamStore<T>) -> Result<G::Var> {
        let h = g.conv(x, &self.hidden, params)?;
        let h = g.relu(&h);
        g.conv(&h, &self.score, params)
    }
}

/// Score networks for the memory and for the new evidence.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct WeightNets {
    pub memory: ScoreNet,
    pub evidence: ScoreNet,
}

impl WeightNets {
    pub fn register<T: Real>(
        store: &mut ParamStore<T>,
        rng: &mut impl Rng,
        prefix: &str,
        channels: usize,
    ) -> Result<Self> {
        Ok(Self {
            memory: ScoreNet::register(store, rng, &format!("{prefix}.memory"), channels)?,
            evidence: ScoreNet::register(store, rng, &format!("{prefix}.evidence"), channels)?,
        })
    }
}

/// How warped memory and new evidence are merged.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum AggregationScheme {
    /// `(memory + evidence) / 2`: an exponential decay of the past.
    Average,
    /// Per-pixel softmax weights from two score networks.
    LearnedWeighting(WeightNets),
}

impl AggregationScheme {
    pub fn name(&self) -> &'static str {
        match self {
            AggregationScheme::Average => "average",
            AggregationScheme::LearnedWeighting(_) => "learned-weighting",
        }
    }
}

pub(crate) fn aggregate_in<T: Real, G: Graph<T>>(
    g: &mut G,
    memory: &G::Var,
    evidence: &G::Var,
    scheme: &AggregationScheme,
    params: &ParamStore<T>,
) -> Result<G::Var> {
    match scheme {
        AggregationScheme::Average => g.mean(&[memory.clone(), evidence.clone()]),
        AggregationScheme::LearnedWeighting(nets) => {
            let sm = nets.memory.run(g, memory, params)?;
            let sf = nets.evidence.run(g, evidence, params)?;
            g.blend(memory, evidence, &sm, &sf)
        }
    }
}

/// Merges warped memory with new evidence.
pub fn aggregate<T: Real>(
    memory: &FeatureMap<T>,
    evidence: &FeatureMap<T>,
    scheme: &AggregationScheme,
    params: &ParamStore<T>,
) -> Result<FeatureMap<T>> {
    memory.check_same_shape(evidence, "aggregate")?;
    let mut g = Eager;
    let m = g.input(memory.clone());
    let e = g.input(evidence.clone());
    let out = aggregate_in(&mut g, &m, &e, scheme, params)?;
    Ok(Arc::unwrap_or_clone(out))
}

/// The per-pixel weights `(alpha_m, alpha_f)` the learned scheme would use.
pub fn blend_weights<T: Real>(
    memory: &FeatureMap<T>,
    evidence: &FeatureMap<T>,
    nets: &WeightNets,
    params: &ParamStore<T>,
) -> Result<(FeatureMap<T>, FeatureMap<T>)> {
    memory.check_same_shape(evidence, "blend_weights")?;
    let mut g = Eager;
    let m = g.input(memory.clone());
    let e = g.input(evidence.clone());
    let sm = nets.memory.run(&mut g, &m, params)?;
    let sf = nets.evidence.run(&mut g, &e, params)?;
    let (h, w, _) = memory.shape();
    let am = FeatureMap::from_fn(h, w, 1, |y, x, _| memory_weight(sm.get(y, x, 0), sf.get(y, x, 0)));
    let af = am.map(|a| T::one() - a);
    Ok((am, af))
}

/// Time axes of a clockwork memory. Axis `k` (1-based) updates every
/// `2^(k-1)` frames.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ClockConfig {
    axis_ids: Vec<u32>,
}

impl ClockConfig {
    pub fn new(axis_ids: Vec<u32>) -> Result<Self> {
        if axis_ids.is_empty() {
            return Err(Error::Config("clock needs at least one axis".into()));
        }
        if axis_ids.iter().any(|&k| k == 0 || k > 32) {
            return Err(Error::Config(format!("axis ids must lie in 1..=32, got {axis_ids:?}")));
        }
        if axis_ids.windows(2).any(|w| w[0] >= w[1]) {
            return Err(Error::Config(format!("axis ids must be strictly increasing, got {axis_ids:?}")));
        }
        Ok(Self { axis_ids })
    }

    /// A single stride-1 axis.
    pub fn single() -> Self {
        Self { axis_ids: vec![1] }
    }

    pub fn axis_ids(&self) -> &[u32] {
        &self.axis_ids
    }

    pub fn strides(&self) -> Vec<u64> {
        self.axis_ids.iter().map(|&k| 1u64 << (k - 1)).collect()
    }
}

/// Recurrent memory over one or more time axes. `V` is the variable type of
/// the executing [`Graph`]; eager callers use [`Memory`].
#[derive(Clone, Debug, PartialEq)]
pub struct MemoryState<V> {
    axes: Vec<Option<V>>,
    // motion accumulated since each axis was last refreshed
    pending: Vec<Option<V>>,
    strides: Vec<u64>,
    updates: Vec<u64>,
    // frame of each axis's last write
    last_write: Vec<u64>,
    frame_counter: u64,
}

/// Motion handed to [`MemoryState::advance_in`].
#[derive(Debug)]
pub enum StepMotion<'a, V> {
    /// Displacement from the current frame to the previous one.
    PerFrame(&'a V),
    /// Per axis, displacement from the current frame to the frame that axis
    /// last saw. A due axis without evidence is then held instead of
    /// rewritten, so the next field spans the whole gap.
    Direct(&'a [V]),
}

impl<V> Clone for StepMotion<'_, V> {
    fn clone(&self) -> Self {
        *self
    }
}

impl<V> Copy for StepMotion<'_, V> {}

/// Memory evaluated eagerly.
pub type Memory<T = f32> = MemoryState<Arc<FeatureMap<T>>>;

impl<V: Clone> MemoryState<V> {
    pub fn new(config: &ClockConfig) -> Self {
        let k = config.axis_ids.len();
        Self {
            axes: vec![None; k],
            pending: vec![None; k],
            strides: config.strides(),
            updates: vec![0; k],
            last_write: vec![0; k],
            frame_counter: 0,
        }
    }

    pub fn num_axes(&self) -> usize {
        self.axes.len()
    }

    pub fn strides(&self) -> &[u64] {
        &self.strides
    }

    pub fn frame_counter(&self) -> u64 {
        self.frame_counter
    }

    /// How many times each axis has been written (initialization included).
    pub fn update_counts(&self) -> &[u64] {
        &self.updates
    }

    pub fn is_initialized(&self) -> bool {
        self.axes.iter().all(|a| a.is_some())
    }

    pub fn axis(&self, k: usize) -> Option<&V> {
        self.axes.get(k).and_then(|a| a.as_ref())
    }

    pub fn pending(&self, k: usize) -> Option<&V> {
        self.pending.get(k).and_then(|a| a.as_ref())
    }

    /// Axes due for a write at the current frame.
    pub fn due_axes(&self) -> Vec<usize> {
        (0..self.axes.len())
            .filter(|&k| self.frame_counter % self.strides[k] == 0)
            .collect()
    }

    /// Frames between the coming frame and each axis's last write.
    pub fn ages(&self) -> Vec<u64> {
        let t = self.frame_counter;
        self.last_write.iter().map(|&w| if t == 0 { 0 } else { t - w }).collect()
    }

    /// Advances one frame with the motion since the previous frame; slower
    /// axes compose it. Motion is ignored while the memory is uninitialized.
    pub fn step_in<T: Real, G: Graph<T, Var = V>>(
        &mut self,
        g: &mut G,
        evidence: Option<&V>,
        field: Option<&V>,
        schemes: &[AggregationScheme],
        params: &ParamStore<T>,
    ) -> Result<()> {
        self.advance_in(g, evidence, field.map(StepMotion::PerFrame), schemes, params)
    }

    /// Advances one frame. With [`StepMotion::Direct`] each axis is moved by
    /// its own field spanning [`MemoryState::ages`] frames.
    pub fn advance_in<T: Real, G: Graph<T, Var = V>>(
        &mut self,
        g: &mut G,
        evidence: Option<&V>,
        motion: Option<StepMotion<'_, V>>,
        schemes: &[AggregationScheme],
        params: &ParamStore<T>,
    ) -> Result<()> {
        if schemes.is_empty() {
            return Err(Error::Config("no aggregation scheme given".into()));
        }
        let frame = self.frame_counter;
        if self.axes.iter().all(|a| a.is_none()) {
            let f = evidence.ok_or(Error::Uninitialized)?;
            for k in 0..self.axes.len() {
                self.axes[k] = Some(f.clone());
                self.pending[k] = None;
                self.updates[k] += 1;
                self.last_write[k] = frame;
            }
            self.frame_counter += 1;
            return Ok(());
        }
        let motion = motion.ok_or(Error::MissingField { axis: 0, frame })?;
        if let StepMotion::Direct(fields) = motion {
            if fields.len() != self.axes.len() {
                return Err(Error::MissingField { axis: fields.len().min(self.axes.len()), frame });
            }
        }
        for k in 0..self.axes.len() {
            let composed = match (motion, self.pending[k].take()) {
                (StepMotion::Direct(fields), _) => fields[k].clone(),
                (StepMotion::PerFrame(field), None) => field.clone(),
                (StepMotion::PerFrame(field), Some(p)) => {
                    let aligned = g.warp(&p, field, Padding::Border)?;
                    g.add(field, &aligned)?
                }
            };
            let hold = evidence.is_none() && matches!(motion, StepMotion::Direct(_));
            if frame % self.strides[k] != 0 || hold {
                self.pending[k] = Some(composed);
                continue;
            }
            let Some(current) = self.axes[k].take() else {
                return Err(Error::Uninitialized);
            };
            let warped = g.warp(&current, &composed, Padding::Zeros)?;
            self.axes[k] = Some(match evidence {
                Some(f) => aggregate_in(g, &warped, f, &schemes[k.min(schemes.len() - 1)], params)?,
                None => warped,
            });
            self.updates[k] += 1;
            self.last_write[k] = frame;
        }
        self.frame_counter += 1;
        Ok(())
    }

    /// Mean over initialized axes, each aligned to the current frame.
    pub fn fuse_in<T: Real, G: Graph<T, Var = V>>(&self, g: &mut G) -> Result<V> {
        let mut views = Vec::with_capacity(self.axes.len());
        for (axis, pending) in self.axes.iter().zip(&self.pending) {
            let Some(a) = axis else { continue };
            views.push(match pending {
                Some(p) => g.warp(a, p, Padding::Zeros)?,
                None => a.clone(),
            });
        }
        if views.is_empty() {
            return Err(Error::Uninitialized);
        }
        g.mean(&views)
    }
}

fn shared<T: Real>(map: &FeatureMap<T>) -> Arc<FeatureMap<T>> {
    Arc::new(map.clone())
}

impl<T: Real> Memory<T> {
    /// Eager single step; see [`MemoryState::step_in`].
    pub fn step(
        &mut self,
        evidence: Option<&FeatureMap<T>>,
        field: Option<&DisplacementField<T>>,
        scheme: &AggregationScheme,
        params: &ParamStore<T>,
    ) -> Result<()> {
        if let (Some(f), Some(a)) = (evidence, self.axes.iter().flatten().next()) {
            a.check_same_shape(f, "memory step")?;
        }
        if let (Some(d), Some(a)) = (field, self.axes.iter().flatten().next()) {
            d.check_grid(a.height(), a.width(), "memory step")?;
        }
        let e = evidence.map(shared);
        let d = field.map(|d| shared(d.as_map()));
        self.step_in(&mut Eager, e.as_ref(), d.as_ref(), std::slice::from_ref(scheme), params)
    }

    pub fn fused(&self) -> Result<FeatureMap<T>> {
        Ok(Arc::unwrap_or_clone(self.fuse_in::<T, Eager>(&mut Eager)?))
    }

    pub fn axis_map(&self, k: usize) -> Option<&FeatureMap<T>> {
        self.axis(k).map(|a| a.as_ref())
    }
}

/// One step of the single-axis recurrence: warp the memory by `field`, then
/// merge `evidence` if present. The first call must carry evidence.
pub fn memnet_step<T: Real>(
    mut state: Memory<T>,
    evidence: Option<&FeatureMap<T>>,
    field: Option<&DisplacementField<T>>,
    scheme: &AggregationScheme,
    params: &ParamStore<T>,
) -> Result<Memory<T>> {
    if state.num_axes() != 1 || state.strides[0] != 1 {
        return Err(Error::Config("memnet_step needs a single stride-1 axis".into()));
    }
    state.step(evidence, field, scheme, params)?;
    Ok(state)
}

/// One step of the clockwork recurrence. `field` is the motion between the
/// previous and the current frame; each axis composes the fields of the
/// frames it skips and warps once when it is due.
pub fn clocknet_step<T: Real>(
    mut state: Memory<T>,
    evidence: Option<&FeatureMap<T>>,
    field: Option<&DisplacementField<T>>,
    scheme: &AggregationScheme,
    params: &ParamStore<T>,
) -> Result<Memory<T>> {
    state.step(evidence, field, scheme, params)?;
    Ok(state)
}

/// Averages all axes of `state` into the map read by the task head.
pub fn fuse_axes<T: Real>(state: &Memory<T>) -> Result<FeatureMap<T>> {
    state.fused()
}

#[derive(Serialize, Deserialize)]
struct SnapshotMeta {
    frame_counter: u64,
    strides: Vec<u64>,
    updates: Vec<u64>,
    last_write: Vec<u64>,
    scheme: String,
    axes: Vec<Option<String>>,
    pending: Vec<Option<String>>,
}

/// Writes every axis (and any pending motion) as tensor files plus a
/// `memory.json` sidecar.
pub fn save_snapshot(state: &Memory<f32>, scheme: &AggregationScheme, dir: impl AsRef<Path>) -> Result<()> {
    let dir = dir.as_ref();
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let mut axes = Vec::new();
    let mut pending = Vec::new();
    for k in 0..state.num_axes() {
        axes.push(match state.axis(k) {
            Some(a) => {
                let name = format!("axis_{k}.mwtn");
                write_tensor(dir.join(&name), a)?;
                Some(name)
            }
            None => None,
        });
        pending.push(match state.pending(k) {
            Some(p) => {
                let name = format!("pending_{k}.mwtn");
                write_tensor(dir.join(&name), p)?;
                Some(name)
            }
            None => None,
        });
    }
    let meta = SnapshotMeta {
        frame_counter: state.frame_counter,
        strides: state.strides.clone(),
        updates: state.updates.clone(),
        last_write: state.last_write.clone(),
        scheme: scheme.name().to_string(),
        axes,
        pending,
    };
    let path = dir.join("memory.json");
    let text = serde_json::to_string_pretty(&meta).map_err(|e| Error::parse(&path, e))?;
    fs::write(&path, text + "\n").map_err(|e| Error::io(&path, e))
}

/// Reads a snapshot written by [`save_snapshot`]; returns the state and the
/// recorded scheme name.
pub fn load_snapshot(dir: impl AsRef<Path>) -> Result<(Memory<f32>, String)> {
    let dir = dir.as_ref();
    let path = dir.join("memory.json");
    let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
    let meta: SnapshotMeta = serde_json::from_str(&text).map_err(|e| Error::parse(&path, e))?;
    let k = meta.strides.len();
    if meta.axes.len() != k || meta.pending.len() != k || meta.updates.len() != k || meta.last_write.len() != k {
        return Err(Error::parse(&path, "per-axis lists disagree in length"));
    }
    if meta.strides.iter().any(|&s| s == 0) {
        return Err(Error::parse(&path, "zero stride"));
    }
    let load = |name: &Option<String>| -> Result<Option<Arc<FeatureMap<f32>>>> {
        name.as_ref()
            .map(|n| read_tensor(dir.join(n)).map(Arc::new))
            .transpose()
    };
    let state = MemoryState {
        axes: meta.axes.iter().map(load).collect::<Result<_>>()?,
        pending: meta.pending.iter().map(load).collect::<Result<_>>()?,
        strides: meta.strides,
        updates: meta.updates,
        last_write: meta.last_write,
        frame_counter: meta.frame_counter,
    };
    Ok((state, meta.scheme))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::warp::warp;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn noise(h: usize, w: usize, c: usize, seed: u64) -> FeatureMap<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        FeatureMap::from_fn(h, w, c, |_, _, _| rng.gen_range(-1.0..1.0))
    }

    fn empty() -> ParamStore<f64> {
        ParamStore::new()
    }

    #[test]
    fn average_examples() {
        let x = noise(3, 3, 2, 1);
        assert_eq!(aggregate(&x, &x, &AggregationScheme::Average, &empty()).unwrap(), x);
        let m = FeatureMap::new(1, 1, 1, vec![2.0]).unwrap();
        let e = FeatureMap::new(1, 1, 1, vec![4.0]).unwrap();
        let out = aggregate(&m, &e, &AggregationScheme::Average, &empty()).unwrap();
        assert_eq!(out.data(), &[3.0]);
        assert!(aggregate(&m, &noise(1, 2, 1, 0), &AggregationScheme::Average, &empty()).is_err());
    }

    #[test]
    fn equal_scores_give_exact_average() {
        let mut store = ParamStore::<f64>::new();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let nets = WeightNets::register(&mut store, &mut rng, "w", 2).unwrap();
        // identical parameters in both score nets
        for (src, dst) in [
            (nets.memory.hidden.weight, nets.evidence.hidden.weight),
            (nets.memory.hidden.bias, nets.evidence.hidden.bias),
            (nets.memory.score.weight, nets.evidence.score.weight),
            (nets.memory.score.bias, nets.evidence.score.bias),
        ] {
            let v = store.get(src).to_vec();
            store.get_mut(dst).copy_from_slice(&v);
        }
        let x = noise(4, 4, 2, 5);
        let y = noise(4, 4, 2, 6);
        let scheme = AggregationScheme::LearnedWeighting(nets);
        // same input to both nets => equal scores => exact halves
        let (am, af) = blend_weights(&x, &x, &nets, &store).unwrap();
        assert!(am.data().iter().chain(af.data()).all(|&a| a == 0.5));
        let out = aggregate(&x, &x, &scheme, &store).unwrap();
        assert_eq!(out, x);
        let (am, af) = blend_weights(&x, &y, &nets, &store).unwrap();
        for (a, b) in am.data().iter().zip(af.data()) {
            assert!((a + b - 1.0).abs() < 1e-12 && *a >= 0.0 && *b >= 0.0);
        }
    }

    #[test]
    fn first_frame_initializes_or_fails() {
        let f = noise(3, 3, 2, 1);
        let state = Memory::<f64>::new(&ClockConfig::single());
        assert!(matches!(
            memnet_step(state.clone(), None, None, &AggregationScheme::Average, &empty()),
            Err(Error::Uninitialized)
        ));
        let state = memnet_step(state, Some(&f), None, &AggregationScheme::Average, &empty()).unwrap();
        assert_eq!(state.axis_map(0).unwrap(), &f);
        assert!(matches!(
            memnet_step(state, Some(&f), None, &AggregationScheme::Average, &empty()),
            Err(Error::MissingField { .. })
        ));
    }

    #[test]
    fn constant_evidence_is_a_fixed_point() {
        let f = noise(3, 4, 2, 2);
        let zero = DisplacementField::zeros(3, 4);
        let mut state = Memory::<f64>::new(&ClockConfig::single());
        for _ in 0..6 {
            state = memnet_step(state, Some(&f), Some(&zero), &AggregationScheme::Average, &empty()).unwrap();
            assert_eq!(state.fused().unwrap(), f);
        }
    }

    #[test]
    fn three_frame_unroll() {
        let fs: Vec<_> = (0..3).map(|i| noise(2, 3, 1, 10 + i)).collect();
        let zero = DisplacementField::zeros(2, 3);
        let mut state = Memory::<f64>::new(&ClockConfig::single());
        for f in &fs {
            state = memnet_step(state, Some(f), Some(&zero), &AggregationScheme::Average, &empty()).unwrap();
        }
        let m = state.fused().unwrap();
        for i in 0..m.data().len() {
            let want = 0.25 * fs[0].data()[i] + 0.25 * fs[1].data()[i] + 0.5 * fs[2].data()[i];
            assert!((m.data()[i] - want).abs() < 1e-12);
        }
    }

    #[test]
    fn factors_as_aggregate_of_warp() {
        let mut store = ParamStore::<f64>::new();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let nets = WeightNets::register(&mut store, &mut rng, "w", 3).unwrap();
        let scheme = AggregationScheme::LearnedWeighting(nets);
        let f0 = noise(5, 5, 3, 1);
        let f1 = noise(5, 5, 3, 2);
        let d = DisplacementField::from_map(noise(5, 5, 2, 3).scale(0.7)).unwrap();
        let s = memnet_step(Memory::new(&ClockConfig::single()), Some(&f0), None, &scheme, &store).unwrap();
        let s = memnet_step(s, Some(&f1), Some(&d), &scheme, &store).unwrap();
        let manual = aggregate(&warp(&f0, &d).unwrap(), &f1, &scheme, &store).unwrap();
        assert_eq!(s.fused().unwrap(), manual);
    }

    #[test]
    fn clock_schedule_counts_and_gating() {
        let config = ClockConfig::new(vec![1, 3, 4]).unwrap();
        assert_eq!(config.strides(), vec![1, 4, 8]);
        let d = DisplacementField::constant(4, 4, 0.25, -0.125);
        let mut state = Memory::<f64>::new(&config);
        let mut last_slow = None;
        for t in 0..64u64 {
            let f = noise(4, 4, 2, t);
            if t == 5 {
                let due = {
                    let mut s = state.clone();
                    s.frame_counter = 5;
                    s.due_axes()
                };
                assert_eq!(due, vec![0]);
            }
            state = clocknet_step(state, Some(&f), Some(&d), &AggregationScheme::Average, &empty()).unwrap();
            let slow = state.axis_map(2).unwrap().clone();
            if t % 8 != 0 {
                assert_eq!(Some(&slow), last_slow.as_ref(), "stride-8 axis changed at frame {t}");
            }
            last_slow = Some(slow);
        }
        assert_eq!(state.update_counts(), &[64, 16, 8]);
    }

    #[test]
    fn ages_follow_strides() {
        let config = ClockConfig::new(vec![1, 3]).unwrap();
        let d = shared(DisplacementField::constant(2, 2, 0.0f64, 0.0).as_map());
        let mut state = Memory::<f64>::new(&config);
        assert_eq!(state.ages(), vec![0, 0]);
        let mut seen = Vec::new();
        for t in 0..9 {
            let f = shared(&noise(2, 2, 1, t));
            if t > 0 {
                seen.push(state.ages()[1]);
            }
            state.step_in(&mut Eager, Some(&f), Some(&d), &[AggregationScheme::Average], &empty()).unwrap();
        }
        assert_eq!(seen, vec![1, 2, 3, 4, 1, 2, 3, 4]);
    }

    #[test]
    fn direct_motion_matches_composed_for_uniform_motion() {
        let config = ClockConfig::new(vec![1, 2, 3]).unwrap();
        let (u, v) = (0.25, -0.375);
        let step = shared(DisplacementField::constant(4, 4, u, v).as_map());
        let mut composed = Memory::<f64>::new(&config);
        let mut direct = Memory::<f64>::new(&config);
        for t in 0..11u64 {
            let f = shared(&noise(4, 4, 2, t));
            let e = Some(&f);
            composed.step_in(&mut Eager, e, Some(&step), &[AggregationScheme::Average], &empty()).unwrap();
            let fields: Vec<_> = direct
                .ages()
                .iter()
                .map(|&a| shared(DisplacementField::constant(4, 4, u * a as f64, v * a as f64).as_map()))
                .collect();
            let motion = (t > 0).then_some(StepMotion::Direct(&fields));
            direct.advance_in(&mut Eager, e, motion, &[AggregationScheme::Average], &empty()).unwrap();
        }
        for (a, b) in composed.fused().unwrap().data().iter().zip(direct.fused().unwrap().data()) {
            assert!((a - b).abs() < 1e-12);
        }
        assert_eq!(composed.update_counts(), direct.update_counts());
    }

    #[test]
    fn direct_motion_holds_axes_without_evidence() {
        let d = |a: u64| shared(DisplacementField::constant(4, 4, 0.5 * a as f64, 0.0).as_map());
        let mut state = Memory::<f64>::new(&ClockConfig::single());
        let f = shared(&noise(4, 4, 2, 3));
        state.advance_in(&mut Eager, Some(&f), None, &[AggregationScheme::Average], &empty()).unwrap();
        for t in 1..4u64 {
            assert_eq!(state.ages(), vec![t]);
            let fields = vec![d(t)];
            state.advance_in(&mut Eager, None, Some(StepMotion::Direct(&fields)), &[AggregationScheme::Average], &empty()).unwrap();
        }
        assert_eq!(state.update_counts(), &[1]);
        assert_eq!(**state.axis(0).unwrap(), *f);
        let once = warp(&f, &DisplacementField::constant(4, 4, 1.5, 0.0)).unwrap();
        assert_eq!(state.fused().unwrap(), once);
    }

    #[test]
    fn single_axis_clock_matches_memnet() {
        let d = DisplacementField::from_map(noise(4, 5, 2, 99).scale(0.6)).unwrap();
        let mut a = Memory::<f64>::new(&ClockConfig::single());
        let mut b = Memory::<f64>::new(&ClockConfig::new(vec![1]).unwrap());
        for t in 0..5 {
            let f = noise(4, 5, 3, t);
            let e = (t % 2 == 0).then_some(&f);
            a = memnet_step(a, e, Some(&d), &AggregationScheme::Average, &empty()).unwrap();
            b = clocknet_step(b, e, Some(&d), &AggregationScheme::Average, &empty()).unwrap();
        }
        assert_eq!(a, b);
    }

    #[test]
    fn absent_evidence_is_sequential_warp() {
        let d: Vec<_> = (0..4)
            .map(|i| DisplacementField::from_map(noise(5, 5, 2, 40 + i).scale(0.8)).unwrap())
            .collect();
        let f = noise(5, 5, 2, 7);
        let mut state = memnet_step(Memory::<f64>::new(&ClockConfig::single()), Some(&f), None, &AggregationScheme::Average, &empty()).unwrap();
        let mut manual = f.clone();
        for di in &d {
            state = memnet_step(state, None, Some(di), &AggregationScheme::Average, &empty()).unwrap();
            manual = warp(&manual, di).unwrap();
        }
        assert_eq!(state.fused().unwrap(), manual);
    }

    #[test]
    fn fusion_examples() {
        let x = noise(3, 3, 2, 1);
        let mut s = Memory::<f64>::new(&ClockConfig::new(vec![1, 2]).unwrap());
        s.axes = vec![Some(Arc::new(x.clone())), Some(Arc::new(x.scale(3.0)))];
        let fused = fuse_axes(&s).unwrap();
        for (a, b) in fused.data().iter().zip(x.scale(2.0).data()) {
            assert!((a - b).abs() < 1e-12);
        }
        s.axes = vec![Some(Arc::new(x.clone())); 2];
        assert_eq!(fuse_axes(&s).unwrap(), x);
        let empty_state = Memory::<f64>::new(&ClockConfig::single());
        assert!(matches!(fuse_axes(&empty_state), Err(Error::Uninitialized)));
    }

    #[test]
    fn clock_config_validation() {
        assert!(ClockConfig::new(vec![]).is_err());
        assert!(ClockConfig::new(vec![3, 1]).is_err());
        assert!(ClockConfig::new(vec![1, 1]).is_err());
        assert!(ClockConfig::new(vec![0]).is_err());
    }

    #[test]
    fn snapshot_roundtrip() {
        let dir = tempfile::tempdir().unwrap();
        let config = ClockConfig::new(vec![1, 2]).unwrap();
        let d = DisplacementField::constant(3, 3, 0.5f32, 0.0);
        let mut s = Memory::<f32>::new(&config);
        for t in 0..3 {
            let f = noise(3, 3, 2, t).cast::<f32>();
            s.step(Some(&f), Some(&d), &AggregationScheme::Average, &ParamStore::new()).unwrap();
        }
        save_snapshot(&s, &AggregationScheme::Average, dir.path()).unwrap();
        let (back, scheme) = load_snapshot(dir.path()).unwrap();
        assert_eq!(scheme, "average");
        assert_eq!(back, s);
    }
}
