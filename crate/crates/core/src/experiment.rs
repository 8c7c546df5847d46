//! The toy benchmark: data, training recipes and the qualitative checks
//! reported at the end of a run.

use serde::{Deserialize, Serialize};

use crate::error::Result;
use crate::eval::{evaluate, evaluate_propagation, EvalOptions, PropagationMode, SweepPoint};
use crate::model::{Model, ModelConfig, Variant};
use crate::params::ParamStore;
use crate::pipeline::{fusion_training_set, simulate_dataset, trace_violations, Alignment, PipelineConfig, PipelineModels, TraceRecord};
use crate::training::{train, LrSchedule, TrainConfig, TrainOutcome, TrainSet};
use crate::worldgen::{generate_dataset, SceneSampler, SequenceRecord};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct BenchmarkConfig {
    pub seed: u64,
    pub sampler: SceneSampler,
    pub train_sequences: usize,
    pub val_sequences: usize,
    pub sequence_length: usize,
    pub model: ModelConfig,
    pub clock_axes: Vec<u32>,
    pub train: TrainConfig,
    pub deltas: Vec<usize>,
    pub pipeline: PipelineConfig,
    pub eval: EvalOptions,
}

impl Default for BenchmarkConfig {
    fn default() -> Self {
        Self {
            seed: 7,
            sampler: SceneSampler { occlusion_prob: 0.9, occlusion_frames: [5, 10], ..SceneSampler::default() },
            train_sequences: 256,
            val_sequences: 80,
            sequence_length: 20,
            model: ModelConfig::default(),
            clock_axes: vec![1, 3, 4],
            train: TrainConfig {
                sequence_length: 12,
                epochs: 30,
                lr: LrSchedule { initial: 0.05, ..LrSchedule::default() },
                ..TrainConfig::default()
            },
            deltas: vec![0, 4, 8],
            pipeline: PipelineConfig::default(),
            eval: EvalOptions::default(),
        }
    }
}

/// Generated training and validation sets.
pub struct BenchmarkData {
    pub train: Vec<SequenceRecord>,
    pub val: Vec<SequenceRecord>,
}

impl BenchmarkConfig {
    pub fn data(&self) -> Result<BenchmarkData> {
        Ok(BenchmarkData {
            train: generate_dataset(&self.sampler, self.train_sequences, self.sequence_length, self.seed)?,
            val: generate_dataset(&self.sampler, self.val_sequences, self.sequence_length, self.seed.wrapping_add(1))?,
        })
    }

    pub fn model_config(&self, variant: Variant) -> ModelConfig {
        ModelConfig {
            variant,
            clock_axes: if variant == Variant::ClockNet { self.clock_axes.clone() } else { Vec::new() },
            ..self.model.clone()
        }
    }

    /// The weak detector of the pipeline: per-frame and luma only.
    pub fn fast_config(&self) -> ModelConfig {
        ModelConfig { luma_only: true, ..self.model_config(Variant::PerFrame) }
    }

    /// Training settings for a variant; per-frame detectors never drop evidence.
    pub fn train_config(&self, variant: Variant) -> TrainConfig {
        let mut c = self.train.clone();
        if variant == Variant::PerFrame {
            c.evidence_dropout_prob = 0.0;
        }
        c
    }
}

pub struct Trained {
    pub model: Model,
    pub params: ParamStore<f32>,
    pub outcome: TrainOutcome,
}

impl Trained {
    pub fn pair(&self) -> (&Model, &ParamStore<f32>) {
        (&self.model, &self.params)
    }
}

/// Builds and trains one model on the benchmark training set.
pub fn train_model(config: &BenchmarkConfig, model_config: &ModelConfig, data: &BenchmarkData) -> Result<Trained> {
    let (model, params) = Model::build::<f32>(model_config, config.seed)?;
    let outcome = train(&model, params, &TrainSet::new(&data.train), None, &config.train_config(model_config.variant), None)?;
    Ok(Trained { model, params: outcome.params.clone(), outcome })
}

/// Trains the fused head of the pipeline on strong features aligned the way
/// the fuser sees them.
pub fn train_fused(config: &BenchmarkConfig, strong: &Trained, data: &BenchmarkData) -> Result<Trained> {
    let (seqs, companions) = fusion_training_set(strong.pair(), &data.train, &config.pipeline)?;
    let model_config = config.fast_config();
    let (model, params) = Model::build::<f32>(&model_config, config.seed)?;
    let set = TrainSet { sequences: &seqs, companions: Some(&companions) };
    let outcome = train(&model, params, &set, None, &config.train_config(Variant::PerFrame), None)?;
    Ok(Trained { model, params: outcome.params.clone(), outcome })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PipelineSummary {
    pub fast: f64,
    pub feature_prop: f64,
    pub box_prop: f64,
    pub stale: f64,
    pub strong_zero_latency: f64,
    pub delta: usize,
    pub violations: usize,
}

/// Pipeline accuracies on the validation set, plus the trace of the
/// feature-propagation run.
pub fn pipeline_summary(
    config: &BenchmarkConfig,
    fast: &Trained,
    strong: &Trained,
    fused: &Trained,
    data: &BenchmarkData,
) -> Result<(PipelineSummary, Vec<Vec<TraceRecord>>)> {
    let models = PipelineModels { fast: fast.pair(), strong: strong.pair(), fused: fused.pair() };
    let run = |alignment| {
        let c = PipelineConfig { alignment, ..config.pipeline.clone() };
        simulate_dataset(&models, &data.val, &c, &config.eval)
    };
    let (fp, traces) = run(Alignment::FeatureProp)?;
    let (bp, _) = run(Alignment::BoxProp)?;
    let (stale, _) = run(Alignment::None)?;
    let violations = traces.iter().map(|t| trace_violations(t, &config.pipeline).len()).sum();
    Ok((
        PipelineSummary {
            fast: evaluate(&fast.model, &fast.params, &data.val, &config.eval)?.mean,
            feature_prop: fp.mean,
            box_prop: bp.mean,
            stale: stale.mean,
            strong_zero_latency: evaluate(&strong.model, &strong.params, &data.val, &config.eval)?.mean,
            delta: config.pipeline.delta(),
            violations,
        },
        traces,
    ))
}

/// Propagation sweep of one model.
pub fn sweep(config: &BenchmarkConfig, trained: &Trained, data: &BenchmarkData, mode: PropagationMode) -> Result<Vec<SweepPoint>> {
    evaluate_propagation(&trained.model, &trained.params, &data.val, &config.deltas, mode, &config.eval)
}

/// A named qualitative expectation and whether it held.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PatternCheck {
    pub name: String,
    pub passed: bool,
    pub detail: String,
}

impl PatternCheck {
    pub fn new(name: &str, passed: bool, detail: String) -> Self {
        Self { name: name.into(), passed, detail }
    }
}

fn maps(points: &[SweepPoint]) -> Vec<f64> {
    points.iter().map(|p| p.map).collect()
}

/// mAP does not rise as delta grows.
pub fn check_monotone(name: &str, points: &[SweepPoint]) -> PatternCheck {
    let m = maps(points);
    PatternCheck::new(name, m.windows(2).all(|w| w[0] >= w[1]), format!("{m:.4?}"))
}

/// The ClockNet lead over MemNet at the largest delta is at least its lead
/// at the smallest.
pub fn check_gap_grows(name: &str, memnet: &[SweepPoint], clocknet: &[SweepPoint]) -> PatternCheck {
    let gap = |i: usize| clocknet[i].map - memnet[i].map;
    let (first, last) = (gap(0), gap(memnet.len() - 1));
    PatternCheck::new(name, last >= first, format!("gap {first:.4} -> {last:.4}"))
}

/// Feature propagation is at least as good as box propagation at every
/// positive delta.
pub fn check_feature_beats_box(name: &str, feature: &[SweepPoint], boxes: &[SweepPoint]) -> PatternCheck {
    let pairs: Vec<(usize, f64, f64)> = feature
        .iter()
        .zip(boxes)
        .filter(|(f, _)| f.delta > 0)
        .map(|(f, b)| (f.delta, f.map, b.map))
        .collect();
    PatternCheck::new(name, pairs.iter().all(|(_, f, b)| f >= b), format!("{pairs:.4?}"))
}

/// fast + margin <= fused <= strong without latency.
pub fn check_sandwich(name: &str, s: &PipelineSummary, margin: f64) -> PatternCheck {
    PatternCheck::new(
        name,
        s.fast + margin <= s.feature_prop && s.feature_prop <= s.strong_zero_latency,
        format!("fast {:.4}, fused {:.4}, strong {:.4}", s.fast, s.feature_prop, s.strong_zero_latency),
    )
}

/// Everything a benchmark run measures.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BenchmarkReport {
    pub seed: u64,
    pub occluded_share: f64,
    pub per_frame_map: f64,
    pub memnet_map: f64,
    pub clocknet_map: f64,
    pub memnet_feature: Vec<SweepPoint>,
    pub memnet_box: Vec<SweepPoint>,
    pub clocknet_feature: Vec<SweepPoint>,
    pub clocknet_box: Vec<SweepPoint>,
    pub pipeline: PipelineSummary,
    pub checks: Vec<PatternCheck>,
}

impl BenchmarkReport {
    pub fn passed(&self) -> bool {
        self.checks.iter().all(|c| c.passed)
    }
}

/// Trains every model of the benchmark, runs the sweeps and the pipeline,
/// and evaluates the qualitative checks.
pub fn run_benchmark(config: &BenchmarkConfig) -> Result<BenchmarkReport> {
    let data = config.data()?;
    let per_frame = train_model(config, &config.model_config(Variant::PerFrame), &data)?;
    let memnet = train_model(config, &config.model_config(Variant::MemNet), &data)?;
    let clocknet = train_model(config, &config.model_config(Variant::ClockNet), &data)?;
    let map = |t: &Trained| evaluate(&t.model, &t.params, &data.val, &config.eval).map(|r| r.mean);
    let (p, m, c) = (map(&per_frame)?, map(&memnet)?, map(&clocknet)?);
    let memnet_feature = sweep(config, &memnet, &data, PropagationMode::FeatureProp)?;
    let memnet_box = sweep(config, &memnet, &data, PropagationMode::BoxProp)?;
    let clocknet_feature = sweep(config, &clocknet, &data, PropagationMode::FeatureProp)?;
    let clocknet_box = sweep(config, &clocknet, &data, PropagationMode::BoxProp)?;
    let fast = train_model(config, &config.fast_config(), &data)?;
    let fused = train_fused(config, &clocknet, &data)?;
    let (pipeline, _) = pipeline_summary(config, &fast, &clocknet, &fused, &data)?;

    let frames: usize = data.val.iter().map(|s| s.len()).sum();
    let occluded: usize = data.val.iter().map(|s| s.occluded.iter().filter(|&&o| o).count()).sum();
    let checks = vec![
        PatternCheck::new("memnet-beats-per-frame", m >= p + 0.05, format!("{m:.4} vs {p:.4}")),
        PatternCheck::new("clocknet-beats-memnet", c >= m, format!("{c:.4} vs {m:.4}")),
        check_monotone("memnet-monotone-delta", &memnet_feature),
        check_monotone("clocknet-monotone-delta", &clocknet_feature),
        check_gap_grows("clocknet-gap-grows", &memnet_feature, &clocknet_feature),
        check_feature_beats_box("memnet-feature-beats-box", &memnet_feature, &memnet_box),
        check_feature_beats_box("clocknet-feature-beats-box", &clocknet_feature, &clocknet_box),
        check_sandwich("fusion-sandwich", &pipeline, 0.05),
        PatternCheck::new(
            "pipeline-feature-beats-box",
            pipeline.feature_prop >= pipeline.box_prop,
            format!("{:.4} vs {:.4}", pipeline.feature_prop, pipeline.box_prop),
        ),
        PatternCheck::new("pipeline-causal", pipeline.violations == 0, format!("{} violations", pipeline.violations)),
    ];
    Ok(BenchmarkReport {
        seed: config.seed,
        occluded_share: occluded as f64 / frames.max(1) as f64,
        per_frame_map: p,
        memnet_map: m,
        clocknet_map: c,
        memnet_feature,
        memnet_box,
        clocknet_feature,
        clocknet_box,
        pipeline,
        checks,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sweep_of(maps: &[f64]) -> Vec<SweepPoint> {
        maps.iter()
            .enumerate()
            .map(|(i, &m)| SweepPoint { delta: 4 * i, map: m, mode: "x".into(), extractions_per_frame: 1.0 })
            .collect()
    }

    #[test]
    fn pattern_checks() {
        assert!(check_monotone("m", &sweep_of(&[0.9, 0.8, 0.8])).passed);
        assert!(!check_monotone("m", &sweep_of(&[0.9, 0.8, 0.85])).passed);
        assert!(check_gap_grows("g", &sweep_of(&[0.9, 0.7]), &sweep_of(&[0.9, 0.8])).passed);
        assert!(!check_gap_grows("g", &sweep_of(&[0.8, 0.7]), &sweep_of(&[0.9, 0.7])).passed);
        assert!(check_feature_beats_box("f", &sweep_of(&[0.5, 0.6]), &sweep_of(&[0.9, 0.6])).passed);
        let s = PipelineSummary { fast: 0.4, feature_prop: 0.5, box_prop: 0.45, stale: 0.3, strong_zero_latency: 0.6, delta: 2, violations: 0 };
        assert!(check_sandwich("s", &s, 0.05).passed);
        assert!(!check_sandwich("s", &s, 0.2).passed);
    }
}
