//! Displacement sources and constant-acceleration extrapolation.

use rand::Rng;

use crate::conv::{ConvLayer, Init};
use crate::error::{Error, Result};
use crate::graph::{Eager, Graph};
use crate::params::ParamStore;
use crate::tensor::{DisplacementField, FeatureMap, Real};
use crate::warp::{warp_padded, Padding};

/// A small convolutional flow network. Both frames are average-pooled to
/// the feature grid, stacked along channels, and mapped through three 3x3
/// convolutions (widths 16, 16, 2). The last layer starts at zero so an
/// untrained estimator yields the identity warp.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ToyEstimator {
    pub layers: [ConvLayer; 3],
    pub pool: usize,
}

impl ToyEstimator {
    pub fn register<T: Real>(
        store: &mut ParamStore<T>,
        rng: &mut impl Rng,
        prefix: &str,
        image_channels: usize,
        pool: usize,
    ) -> Result<Self> {
        let c0 = ConvLayer::register(store, rng, &format!("{prefix}.conv0"), 2 * image_channels, 16, 3, 1, 1, Init::He)?;
        let c1 = ConvLayer::register(store, rng, &format!("{prefix}.conv1"), 16, 16, 3, 1, 1, Init::He)?;
        let c2 = ConvLayer::register(store, rng, &format!("{prefix}.conv2"), 16, 2, 3, 1, 1, Init::Zero)?;
        Ok(Self { layers: [c0, c1, c2], pool })
    }

    /// Network input: pooled current frame stacked on the pooled previous one.
    pub fn stack<T: Real>(&self, current: &FeatureMap<T>, previous: &FeatureMap<T>) -> Result<FeatureMap<T>> {
        current.check_same_shape(previous, "estimate_flow")?;
        current.avg_pool(self.pool)?.concat_channels(&previous.avg_pool(self.pool)?)
    }

    /// Runs the network on a graph; the result is a two-channel field map.
    pub(crate) fn run<T: Real, G: Graph<T>>(
        &self,
        g: &mut G,
        current: &FeatureMap<T>,
        previous: &FeatureMap<T>,
        params: &ParamStore<T>,
    ) -> Result<G::Var> {
        let x = g.input(self.stack(current, previous)?);
        let h = g.conv(&x, &self.layers[0], params)?;
        let h = g.relu(&h);
        let h = g.conv(&h, &self.layers[1], params)?;
        let h = g.relu(&h);
        g.conv(&h, &self.layers[2], params)
    }
}

/// Where displacement fields come from.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum FlowSource {
    /// The generator's stored fields.
    GroundTruth,
    ToyEstimator(ToyEstimator),
}

/// Field mapping `current` frame positions to `previous` frame positions.
/// `truth` is the generator's field and is required for
/// [`FlowSource::GroundTruth`].
pub fn estimate_flow<T: Real>(
    current: &FeatureMap<T>,
    previous: &FeatureMap<T>,
    source: &FlowSource,
    params: &ParamStore<T>,
    truth: Option<&DisplacementField<T>>,
) -> Result<DisplacementField<T>> {
    current.check_same_shape(previous, "estimate_flow")?;
    match source {
        FlowSource::GroundTruth => truth
            .cloned()
            .ok_or_else(|| Error::Config("ground-truth flow requested without a stored field".into())),
        FlowSource::ToyEstimator(net) => {
            let out = net.run(&mut Eager, current, previous, params)?;
            DisplacementField::from_map((*out).clone())
        }
    }
}

/// The two most recent fields, oldest first.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct FlowHistory<T: Real = f32> {
    previous: Option<DisplacementField<T>>,
    current: Option<DisplacementField<T>>,
}

impl<T: Real> FlowHistory<T> {
    pub fn new() -> Self {
        Self { previous: None, current: None }
    }

    pub fn push(&mut self, field: DisplacementField<T>) -> Result<()> {
        if let Some(c) = &self.current {
            field.check_grid(c.height(), c.width(), "FlowHistory::push")?;
        }
        self.previous = self.current.take();
        self.current = Some(field);
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.previous.is_some() as usize + self.current.is_some() as usize
    }

    pub fn is_empty(&self) -> bool {
        self.current.is_none()
    }

    pub fn is_full(&self) -> bool {
        self.len() == 2
    }

    pub fn latest(&self) -> Option<&DisplacementField<T>> {
        self.current.as_ref()
    }

    pub fn clear(&mut self) {
        self.previous = None;
        self.current = None;
    }
}

fn resample<T: Real>(field: &DisplacementField<T>, by: &DisplacementField<T>) -> Result<DisplacementField<T>> {
    DisplacementField::from_map(warp_padded(field.as_map(), by, Padding::Border)?)
}

/// Predicts the next `steps` fields under a constant-acceleration model.
///
/// The older field is first aligned to the newer one's grid; their
/// difference is the acceleration. Each further step re-bases velocity and
/// acceleration onto the previously predicted frame before adding them.
pub fn extrapolate_flow<T: Real>(history: &FlowHistory<T>, steps: usize) -> Result<Vec<DisplacementField<T>>> {
    let (Some(prev), Some(cur)) = (&history.previous, &history.current) else {
        return Err(Error::IncompleteHistory(history.len()));
    };
    if steps == 0 {
        return Err(Error::Config("extrapolation needs at least one step".into()));
    }
    let aligned = resample(prev, cur)?;
    let mut accel = cur.sub(&aligned)?;
    let mut velocity = cur.add(&accel)?;
    let mut out = Vec::with_capacity(steps);
    out.push(velocity.clone());
    for _ in 1..steps {
        accel = resample(&accel, &velocity)?;
        velocity = resample(&velocity, &velocity)?.add(&accel)?;
        out.push(velocity.clone());
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn history(a: DisplacementField<f64>, b: DisplacementField<f64>) -> FlowHistory<f64> {
        let mut h = FlowHistory::new();
        h.push(a).unwrap();
        h.push(b).unwrap();
        h
    }

    #[test]
    fn constant_velocity_is_preserved() {
        let v = DisplacementField::constant(6, 7, 0.75, -0.5);
        for f in extrapolate_flow(&history(v.clone(), v.clone()), 5).unwrap() {
            assert_eq!(f, v);
        }
    }

    #[test]
    fn velocity_step_predicts_next() {
        let h = history(
            DisplacementField::constant(5, 5, 1.0, 0.0),
            DisplacementField::constant(5, 5, 2.0, 0.0),
        );
        let out = extrapolate_flow(&h, 3).unwrap();
        assert_eq!(out[0], DisplacementField::constant(5, 5, 3.0, 0.0));
        assert_eq!(out[1], DisplacementField::constant(5, 5, 4.0, 0.0));
    }

    #[test]
    fn zero_history_gives_zero() {
        let z = DisplacementField::<f64>::zeros(4, 4);
        assert!(extrapolate_flow(&history(z.clone(), z), 4).unwrap().iter().all(|f| f.is_zero()));
    }

    #[test]
    fn needs_full_history() {
        let mut h = FlowHistory::<f64>::new();
        assert!(matches!(extrapolate_flow(&h, 1), Err(Error::IncompleteHistory(0))));
        h.push(DisplacementField::zeros(2, 2)).unwrap();
        assert!(matches!(extrapolate_flow(&h, 1), Err(Error::IncompleteHistory(1))));
        assert!(h.push(DisplacementField::zeros(3, 2)).is_err());
    }

    #[test]
    fn uniform_fields_scale_linearly() {
        let a = DisplacementField::constant(4, 4, 0.3, -0.2);
        let b = DisplacementField::constant(4, 4, 0.5, 0.1);
        let base = extrapolate_flow(&history(a.clone(), b.clone()), 3).unwrap();
        let scaled = extrapolate_flow(&history(a.scale(2.0), b.scale(2.0)), 3).unwrap();
        for (x, y) in base.iter().zip(&scaled) {
            for (p, q) in x.as_map().data().iter().zip(y.as_map().data()) {
                assert!((2.0 * p - q).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn untrained_estimator_is_identity() {
        let mut store = ParamStore::<f64>::new();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let net = ToyEstimator::register(&mut store, &mut rng, "flow", 3, 4).unwrap();
        let img = FeatureMap::from_fn(16, 16, 3, |y, x, c| ((y * 3 + x + c) % 7) as f64 / 7.0);
        let d = estimate_flow(&img, &img, &FlowSource::ToyEstimator(net), &store, None).unwrap();
        assert_eq!((d.height(), d.width()), (4, 4));
        assert!(d.is_zero());
    }

    #[test]
    fn ground_truth_passes_through() {
        let img = FeatureMap::<f64>::zeros(8, 8, 3);
        let d = DisplacementField::constant(2, 2, 1.0, -1.0);
        let store = ParamStore::new();
        assert_eq!(estimate_flow(&img, &img, &FlowSource::GroundTruth, &store, Some(&d)).unwrap(), d);
        assert!(estimate_flow(&img, &img, &FlowSource::GroundTruth, &store, None).is_err());
    }
}
