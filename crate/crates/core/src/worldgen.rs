//! Synthetic video with exact motion: textured objects translate over a
//! background that follows a moving camera, occluder patches paint over
//! objects for scheduled frame ranges, and look-alike distractor patches sit
//! on the background.
//!
//! Ground-truth fields are sampled at feature-cell centers in feature-grid
//! units and follow the warp convention: the field at frame `t` points from a
//! frame-`t` location to where the same content was at frame `t - 1`.

use std::fs;
use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::detection::{from_records, to_records, BBox, BoxRecord};
use crate::error::{Error, Result};
use crate::io::{read_field, read_ndjson, read_tensor, write_field, write_ndjson, write_tensor};
use crate::tensor::{DisplacementField, FeatureMap};

/// Luma of every class color; equal across classes so that a luma-only
/// model can localize objects but not tell classes apart.
pub const OBJECT_LUMA: f32 = 0.5;

const BASE_COLORS: [[f32; 3]; 6] = [
    [0.95, 0.25, 0.25],
    [0.25, 0.85, 0.25],
    [0.35, 0.45, 0.95],
    [0.70, 0.55, 0.05],
    [0.85, 0.20, 0.90],
    [0.20, 0.60, 0.90],
];

pub fn luma(rgb: [f32; 3]) -> f32 {
    0.299 * rgb[0] + 0.587 * rgb[1] + 0.114 * rgb[2]
}

/// Color of `class_id`, shifted to [`OBJECT_LUMA`].
pub fn class_color(class_id: usize) -> [f32; 3] {
    let c = BASE_COLORS[class_id % BASE_COLORS.len()];
    let shift = OBJECT_LUMA - luma(c);
    [c[0] + shift, c[1] + shift, c[2] + shift]
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Shape {
    Rectangle,
    Blob,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ObjectSpec {
    pub shape: Shape,
    pub class_id: usize,
    /// Width and height in pixels.
    pub size: [f32; 2],
    /// Center at frame 0.
    pub start: [f32; 2],
    /// Pixels per frame.
    pub velocity: [f32; 2],
    /// Pixels per frame squared.
    pub acceleration: [f32; 2],
    pub texture_seed: u64,
    /// Frames `[first, last)` during which the object exists; always if absent.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub lifetime: Option<[usize; 2]>,
}

/// Frames `[first, last)` during which `object` is painted over.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Occlusion {
    pub object: usize,
    pub frames: [usize; 2],
}

/// Occluder-textured patch fixed on the background, present for `frames`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Distractor {
    /// x0, y0, x1, y1 in pixels.
    pub rect: [f32; 4],
    pub frames: [usize; 2],
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SceneSpec {
    /// Height and width in pixels.
    pub image_size: [usize; 2],
    /// Pixels per feature cell.
    pub stride: usize,
    pub num_classes: usize,
    pub objects: Vec<ObjectSpec>,
    #[serde(default)]
    pub occlusions: Vec<Occlusion>,
    #[serde(default)]
    pub distractors: Vec<Distractor>,
    pub noise: f32,
    /// Pixels per frame.
    pub camera_velocity: [f32; 2],
    pub background_seed: u64,
    /// Band around each object, in feature cells, whose field follows the
    /// object instead of the camera.
    #[serde(default)]
    pub field_margin: f32,
}

impl SceneSpec {
    pub fn grid(&self) -> (usize, usize) {
        (self.image_size[0] / self.stride, self.image_size[1] / self.stride)
    }

    pub fn validate(&self, length: usize) -> Result<()> {
        let bad = |m: String| Err(Error::InvalidScene(m));
        let [h, w] = self.image_size;
        if self.stride == 0 || h == 0 || w == 0 || h % self.stride != 0 || w % self.stride != 0 {
            return bad(format!("image {h}x{w} not divisible by stride {}", self.stride));
        }
        if !(self.noise >= 0.0 && self.noise.is_finite()) {
            return bad(format!("noise {}", self.noise));
        }
        if !(self.field_margin >= 0.0 && self.field_margin.is_finite()) {
            return bad(format!("field margin {}", self.field_margin));
        }
        for (k, o) in self.objects.iter().enumerate() {
            if o.class_id >= self.num_classes {
                return bad(format!("object {k} class {} outside 0..{}", o.class_id, self.num_classes));
            }
            if !(o.size[0] > 0.0 && o.size[1] > 0.0) {
                return bad(format!("object {k} has empty size"));
            }
            let (lo, hi) = center_bounds(o.size, self.image_size);
            if (0..2).any(|a| o.start[a] < lo[a] || o.start[a] > hi[a]) {
                return bad(format!("object {k} starts less than half inside the image"));
            }
            if let Some([a, b]) = o.lifetime {
                if a >= b || b > length {
                    return bad(format!("object {k} lifetime {a}..{b} outside 0..{length}"));
                }
            }
        }
        for o in &self.occlusions {
            if o.object >= self.objects.len() {
                return bad(format!("occlusion names missing object {}", o.object));
            }
            if o.frames[0] >= o.frames[1] || o.frames[1] > length {
                return bad(format!("occlusion frames {:?} outside 0..{length}", o.frames));
            }
        }
        for d in &self.distractors {
            if d.frames[0] >= d.frames[1] || d.frames[1] > length {
                return bad(format!("distractor frames {:?} outside 0..{length}", d.frames));
            }
        }
        Ok(())
    }
}

/// Allowed center range keeping at least 75% of each side (so more than
/// half the area) inside the image.
fn center_bounds(size: [f32; 2], image_size: [usize; 2]) -> ([f32; 2], [f32; 2]) {
    let (h, w) = (image_size[0] as f32, image_size[1] as f32);
    let lo = [size[0] / 4.0, size[1] / 4.0];
    let hi = [w - size[0] / 4.0, h - size[1] / 4.0];
    (lo, hi)
}

/// Object centers per frame, reflecting off the allowed range.
fn trajectory(o: &ObjectSpec, image_size: [usize; 2], length: usize) -> Vec<[f32; 2]> {
    let (lo, hi) = center_bounds(o.size, image_size);
    let mut pos = o.start;
    let mut vel = o.velocity;
    let mut out = Vec::with_capacity(length);
    for t in 0..length {
        if t > 0 {
            for a in 0..2 {
                pos[a] += vel[a];
                vel[a] += o.acceleration[a];
                if pos[a] < lo[a] {
                    pos[a] = (2.0 * lo[a] - pos[a]).min(hi[a]);
                    vel[a] = vel[a].abs();
                } else if pos[a] > hi[a] {
                    pos[a] = (2.0 * hi[a] - pos[a]).max(lo[a]);
                    vel[a] = -vel[a].abs();
                }
            }
        }
        out.push(pos);
    }
    out
}

fn alive(o: &ObjectSpec, t: usize) -> bool {
    o.lifetime.map_or(true, |[a, b]| t >= a && t < b)
}

fn in_range(frames: [usize; 2], t: usize) -> bool {
    t >= frames[0] && t < frames[1]
}

/// Whether point `(x, y)` lies on object `o` centered at `c`; returns the
/// local coordinates in `[-1, 1]^2` if so.
fn object_hit(o: &ObjectSpec, c: [f32; 2], x: f32, y: f32) -> Option<(f32, f32)> {
    let u = (x - c[0]) / (o.size[0] / 2.0);
    let v = (y - c[1]) / (o.size[1] / 2.0);
    let inside = match o.shape {
        Shape::Rectangle => (-1.0..1.0).contains(&u) && (-1.0..1.0).contains(&v),
        Shape::Blob => u * u + v * v < 1.0,
    };
    inside.then_some((u, v))
}

fn phases(seed: u64) -> [f32; 4] {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    [0; 4].map(|_| rng.gen_range(0.0..std::f32::consts::TAU))
}

/// Smooth camera-fixed background in world coordinates.
fn background(wx: f32, wy: f32, ph: &[f32; 4]) -> [f32; 3] {
    let v = 0.22
        + 0.06 * (0.31 * wx + ph[0]).sin()
        + 0.06 * (0.27 * wy + ph[1]).sin()
        + 0.04 * (0.19 * (wx - wy) + ph[2]).sin();
    [v * 0.95, v, v * 1.08]
}

/// Gray striped pattern shared by occluders and distractors.
fn occluder(x: f32, y: f32) -> [f32; 3] {
    let s = 0.5 + 0.12 * (0.9 * x + 0.6 * y).sin();
    [s, s, s]
}

fn object_color(o: &ObjectSpec, u: f32, v: f32, ph: &[f32; 4]) -> [f32; 3] {
    let base = class_color(o.class_id);
    let shade = match o.shape {
        Shape::Rectangle => 1.0 + 0.12 * (2.0 * u + ph[0]).sin() * (1.7 * v + ph[1]).cos(),
        Shape::Blob => 1.12 - 0.24 * (u * u + v * v),
    };
    base.map(|c| c * shade)
}

/// Tight box of object `o` at center `c`, clipped to the image.
fn object_box(o: &ObjectSpec, c: [f32; 2], image_size: [usize; 2]) -> Option<BBox> {
    BBox::truth(
        c[0] - o.size[0] / 2.0,
        c[1] - o.size[1] / 2.0,
        c[0] + o.size[0] / 2.0,
        c[1] + o.size[1] / 2.0,
        o.class_id,
    )
    .clip(image_size[1] as f32, image_size[0] as f32)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SequenceMeta {
    pub seed: u64,
    pub length: usize,
    pub spec: SceneSpec,
}

#[derive(Clone, Debug, PartialEq)]
pub struct SequenceRecord {
    pub frames: Vec<FeatureMap<f32>>,
    pub boxes: Vec<Vec<BBox>>,
    /// `fields[0]` is zero; there is no earlier frame.
    pub fields: Vec<DisplacementField<f32>>,
    /// Whether any object is painted over at each frame.
    pub occluded: Vec<bool>,
    pub meta: SequenceMeta,
}

impl SequenceRecord {
    pub fn len(&self) -> usize {
        self.frames.len()
    }

    pub fn is_empty(&self) -> bool {
        self.frames.is_empty()
    }

    pub fn image_size(&self) -> (usize, usize) {
        (self.meta.spec.image_size[0], self.meta.spec.image_size[1])
    }

    /// Exact multi-frame fields: entry `[t][g - 1]` points from frame `t`
    /// to frame `t - g`, for `g` up to `min(t, max_gap)`. Entry `[t][0]`
    /// equals `fields[t]`.
    pub fn gap_fields(&self, max_gap: usize) -> Vec<Vec<DisplacementField<f32>>> {
        self.gap_fields_within(0, self.len(), max_gap)
    }

    /// Fields from frame `t` reaching 1 to `min(t, max_gap)` frames back.
    pub fn gap_fields_at(&self, t: usize, max_gap: usize) -> Vec<DisplacementField<f32>> {
        let spec = &self.meta.spec;
        let paths: Vec<Vec<[f32; 2]>> = spec.objects.iter().map(|o| trajectory(o, spec.image_size, self.len())).collect();
        (1..=t.min(max_gap)).map(|g| field_between(spec, &paths, t, g)).collect()
    }

    /// Like [`Self::gap_fields`] for the window `start..end`, never reaching
    /// before `start`. Entry `[i]` belongs to frame `start + i`.
    pub fn gap_fields_within(&self, start: usize, end: usize, max_gap: usize) -> Vec<Vec<DisplacementField<f32>>> {
        let spec = &self.meta.spec;
        let paths: Vec<Vec<[f32; 2]>> = spec.objects.iter().map(|o| trajectory(o, spec.image_size, self.len())).collect();
        (start..end.min(self.len()))
            .map(|t| (1..=(t - start).min(max_gap)).map(|g| field_between(spec, &paths, t, g)).collect())
            .collect()
    }
}

/// Topmost live object at a point of frame `t` (later objects are drawn on
/// top) with the local coordinates of the hit.
fn top_object(spec: &SceneSpec, paths: &[Vec<[f32; 2]>], t: usize, x: f32, y: f32) -> Option<(usize, f32, f32)> {
    (0..spec.objects.len()).rev().find_map(|k| {
        let o = &spec.objects[k];
        if !alive(o, t) {
            return None;
        }
        object_hit(o, paths[k][t], x, y).map(|(u, v)| (k, u, v))
    })
}

/// Field at the cell centers of frame `t` pointing to frame `t - gap`.
fn field_between(spec: &SceneSpec, paths: &[Vec<[f32; 2]>], t: usize, gap: usize) -> DisplacementField<f32> {
    let stride = spec.stride as f32;
    let (gh, gw) = spec.grid();
    let g = gap as f32;
    let margin = spec.field_margin * stride;
    let grown: Vec<ObjectSpec> = spec
        .objects
        .iter()
        .map(|o| ObjectSpec { size: [o.size[0] + 2.0 * margin, o.size[1] + 2.0 * margin], ..o.clone() })
        .collect();
    DisplacementField::from_fn(gh, gw, |i, j| {
        let (cx, cy) = ((j as f32 + 0.5) * stride, (i as f32 + 0.5) * stride);
        let near = || {
            (0..grown.len())
                .rev()
                .find(|&k| alive(&grown[k], t) && object_hit(&grown[k], paths[k][t], cx, cy).is_some())
        };
        match top_object(spec, paths, t, cx, cy).map(|(k, _, _)| k).or_else(near) {
            Some(k) => {
                let (a, b) = (paths[k][t - gap], paths[k][t]);
                ((a[0] - b[0]) / stride, (a[1] - b[1]) / stride)
            }
            None => (spec.camera_velocity[0] * g / stride, spec.camera_velocity[1] * g / stride),
        }
    })
}

/// Renders `length` frames of `spec`. Pixel noise is drawn from `seed`.
pub fn generate(spec: &SceneSpec, length: usize, seed: u64) -> Result<SequenceRecord> {
    spec.validate(length)?;
    let [h, w] = spec.image_size;
    let (gh, gw) = spec.grid();
    let paths: Vec<Vec<[f32; 2]>> = spec.objects.iter().map(|o| trajectory(o, spec.image_size, length)).collect();
    let bg_phase = phases(spec.background_seed);
    let obj_phase: Vec<[f32; 4]> = spec.objects.iter().map(|o| phases(o.texture_seed)).collect();
    let noise = Normal::new(0.0f32, spec.noise.max(0.0)).map_err(|e| Error::InvalidScene(e.to_string()))?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);

    let mut frames = Vec::with_capacity(length);
    let mut boxes = Vec::with_capacity(length);
    let mut fields = Vec::with_capacity(length);
    let mut occluded = Vec::with_capacity(length);
    for t in 0..length {
        let cam = [spec.camera_velocity[0] * t as f32, spec.camera_velocity[1] * t as f32];
        let top = |x: f32, y: f32| top_object(spec, &paths, t, x, y);
        let covers: Vec<BBox> = spec
            .occlusions
            .iter()
            .filter(|o| in_range(o.frames, t) && alive(&spec.objects[o.object], t))
            .filter_map(|o| {
                let ob = &spec.objects[o.object];
                let c = paths[o.object][t];
                let b = BBox::truth(
                    c[0] - ob.size[0] / 2.0 - 1.0,
                    c[1] - ob.size[1] / 2.0 - 1.0,
                    c[0] + ob.size[0] / 2.0 + 1.0,
                    c[1] + ob.size[1] / 2.0 + 1.0,
                    0,
                );
                Some(b)
            })
            .chain(
                spec.distractors
                    .iter()
                    .filter(|d| in_range(d.frames, t))
                    .map(|d| BBox::truth(d.rect[0], d.rect[1], d.rect[2], d.rect[3], 0)),
            )
            .collect();
        let mut img = FeatureMap::zeros(h, w, 3);
        for y in 0..h {
            for x in 0..w {
                let (px, py) = (x as f32 + 0.5, y as f32 + 0.5);
                let mut rgb = match top(px, py) {
                    Some((k, u, v)) => object_color(&spec.objects[k], u, v, &obj_phase[k]),
                    None => background(px + cam[0], py + cam[1], &bg_phase),
                };
                if covers.iter().any(|b| b.contains(px, py)) {
                    rgb = occluder(px, py);
                }
                for (c, v) in rgb.iter().enumerate() {
                    let n = if spec.noise > 0.0 { noise.sample(&mut rng) } else { 0.0 };
                    img.set(y, x, c, v + n);
                }
            }
        }
        frames.push(img);
        boxes.push(
            spec.objects
                .iter()
                .enumerate()
                .filter(|(_, o)| alive(o, t))
                .filter_map(|(k, o)| object_box(o, paths[k][t], spec.image_size))
                .collect(),
        );
        occluded.push(
            spec.occlusions
                .iter()
                .any(|o| in_range(o.frames, t) && alive(&spec.objects[o.object], t)),
        );
        fields.push(if t == 0 { DisplacementField::zeros(gh, gw) } else { field_between(spec, &paths, t, 1) });
    }
    Ok(SequenceRecord {
        frames,
        boxes,
        fields,
        occluded,
        meta: SequenceMeta { seed, length, spec: spec.clone() },
    })
}

/// Ranges from which random scenes are drawn.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SceneSampler {
    pub image_size: [usize; 2],
    pub stride: usize,
    pub num_classes: usize,
    pub objects: [usize; 2],
    /// Side length range in pixels.
    pub object_size: [f32; 2],
    /// Largest speed component, pixels per frame.
    pub max_speed: f32,
    pub max_acceleration: f32,
    pub max_camera_speed: f32,
    /// Chance that an object gets one occlusion interval.
    pub occlusion_prob: f64,
    pub occlusion_frames: [usize; 2],
    pub distractors: [usize; 2],
    /// Chance that an object appears late or leaves early.
    pub lifetime_prob: f64,
    pub noise: f32,
    /// See [`SceneSpec::field_margin`].
    pub field_margin: f32,
}

impl Default for SceneSampler {
    fn default() -> Self {
        Self {
            image_size: [32, 32],
            stride: 4,
            num_classes: 3,
            objects: [1, 2],
            object_size: [9.0, 14.0],
            max_speed: 1.5,
            max_acceleration: 0.0,
            max_camera_speed: 0.5,
            occlusion_prob: 0.6,
            occlusion_frames: [2, 5],
            distractors: [0, 1],
            lifetime_prob: 0.0,
            noise: 0.03,
            field_margin: 1.0,
        }
    }
}

impl SceneSampler {
    pub fn sample(&self, length: usize, rng: &mut impl Rng) -> Result<SceneSpec> {
        if self.objects[0] > self.objects[1]
            || self.object_size[0] > self.object_size[1]
            || self.occlusion_frames[0] == 0
            || self.occlusion_frames[0] > self.occlusion_frames[1]
            || self.distractors[0] > self.distractors[1]
        {
            return Err(Error::Config("scene sampler ranges are inverted or empty".into()));
        }
        let [h, w] = self.image_size;
        let mut objects = Vec::new();
        let mut occlusions = Vec::new();
        for k in 0..rng.gen_range(self.objects[0]..=self.objects[1]) {
            let size = [
                rng.gen_range(self.object_size[0]..=self.object_size[1]),
                rng.gen_range(self.object_size[0]..=self.object_size[1]),
            ];
            let (lo, hi) = center_bounds(size, self.image_size);
            // keep fresh objects mostly inside
            let margin = [size[0] / 4.0, size[1] / 4.0];
            let start = [
                rng.gen_range(lo[0] + margin[0]..=(hi[0] - margin[0]).max(lo[0] + margin[0])),
                rng.gen_range(lo[1] + margin[1]..=(hi[1] - margin[1]).max(lo[1] + margin[1])),
            ];
            let sym = |rng: &mut dyn rand::RngCore, m: f32| if m > 0.0 { rng.gen_range(-m..=m) } else { 0.0 };
            let lifetime = if length >= 4 && rng.gen_bool(self.lifetime_prob) {
                let cut = rng.gen_range(1..length / 2);
                if rng.gen_bool(0.5) {
                    Some([cut, length])
                } else {
                    Some([0, length - cut])
                }
            } else {
                None
            };
            objects.push(ObjectSpec {
                shape: if rng.gen_bool(0.5) { Shape::Rectangle } else { Shape::Blob },
                class_id: rng.gen_range(0..self.num_classes),
                size,
                start,
                velocity: [sym(rng, self.max_speed), sym(rng, self.max_speed)],
                acceleration: [sym(rng, self.max_acceleration), sym(rng, self.max_acceleration)],
                texture_seed: rng.gen(),
                lifetime,
            });
            if rng.gen_bool(self.occlusion_prob) && length > 1 {
                let span = rng.gen_range(self.occlusion_frames[0]..=self.occlusion_frames[1]).min(length - 1);
                let first = rng.gen_range(1..=length - span);
                occlusions.push(Occlusion { object: k, frames: [first, first + span] });
            }
        }
        let mut distractors = Vec::new();
        for _ in 0..rng.gen_range(self.distractors[0]..=self.distractors[1]) {
            let dw = rng.gen_range(self.object_size[0]..=self.object_size[1]);
            let dh = rng.gen_range(self.object_size[0]..=self.object_size[1]);
            let x0 = rng.gen_range(0.0..=(w as f32 - dw).max(0.0));
            let y0 = rng.gen_range(0.0..=(h as f32 - dh).max(0.0));
            let first = rng.gen_range(0..length);
            let last = rng.gen_range(first + 1..=length);
            distractors.push(Distractor { rect: [x0, y0, x0 + dw, y0 + dh], frames: [first, last] });
        }
        let m = self.max_camera_speed;
        let camera_velocity = if m > 0.0 {
            [rng.gen_range(-m..=m), rng.gen_range(-m..=m)]
        } else {
            [0.0, 0.0]
        };
        Ok(SceneSpec {
            image_size: self.image_size,
            stride: self.stride,
            num_classes: self.num_classes,
            objects,
            occlusions,
            distractors,
            noise: self.noise,
            camera_velocity,
            background_seed: rng.gen(),
            field_margin: self.field_margin,
        })
    }
}

/// Seed of sequence `index` in a dataset seeded with `seed`.
pub fn sequence_seed(seed: u64, index: usize) -> u64 {
    seed.wrapping_mul(0x9E37_79B9_7F4A_7C15) ^ (index as u64).wrapping_mul(0xBF58_476D_1CE4_E5B9)
}

/// Draws and renders `count` sequences in parallel; the output depends only
/// on the arguments.
pub fn generate_dataset(sampler: &SceneSampler, count: usize, length: usize, seed: u64) -> Result<Vec<SequenceRecord>> {
    (0..count)
        .into_par_iter()
        .map(|i| {
            let s = sequence_seed(seed, i);
            let mut rng = ChaCha8Rng::seed_from_u64(s);
            let spec = sampler.sample(length, &mut rng)?;
            generate(&spec, length, s)
        })
        .collect()
}

#[derive(Serialize, Deserialize)]
struct Manifest {
    seed: u64,
    length: usize,
    spec: SceneSpec,
    frames: Vec<String>,
    fields: Vec<String>,
    occluded: Vec<bool>,
    boxes: String,
}

/// Writes a sequence as `manifest.json`, one tensor per frame and field,
/// and `gt.ndjson`.
pub fn save(record: &SequenceRecord, dir: impl AsRef<Path>) -> Result<()> {
    let dir = dir.as_ref();
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let mut manifest = Manifest {
        seed: record.meta.seed,
        length: record.len(),
        spec: record.meta.spec.clone(),
        frames: Vec::new(),
        fields: Vec::new(),
        occluded: record.occluded.clone(),
        boxes: "gt.ndjson".into(),
    };
    for (t, (img, field)) in record.frames.iter().zip(&record.fields).enumerate() {
        let f = format!("frame_{t:04}.mwtn");
        let d = format!("field_{t:04}.mwtn");
        write_tensor(dir.join(&f), img)?;
        write_field(dir.join(&d), field)?;
        manifest.frames.push(f);
        manifest.fields.push(d);
    }
    write_ndjson(dir.join(&manifest.boxes), &to_records(&record.boxes, true))?;
    let path = dir.join("manifest.json");
    let text = serde_json::to_string_pretty(&manifest).map_err(|e| Error::parse(&path, e))?;
    fs::write(&path, text + "\n").map_err(|e| Error::io(&path, e))
}

pub fn load(dir: impl AsRef<Path>) -> Result<SequenceRecord> {
    let dir = dir.as_ref();
    let path = dir.join("manifest.json");
    let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
    let m: Manifest = serde_json::from_str(&text).map_err(|e| Error::parse(&path, e))?;
    if m.frames.len() != m.length || m.fields.len() != m.length || m.occluded.len() != m.length {
        return Err(Error::parse(&path, "file lists disagree with length"));
    }
    let frames = m.frames.iter().map(|f| read_tensor(dir.join(f))).collect::<Result<Vec<_>>>()?;
    let fields = m.fields.iter().map(|f| read_field(dir.join(f))).collect::<Result<Vec<_>>>()?;
    let records: Vec<BoxRecord> = read_ndjson(dir.join(&m.boxes))?;
    Ok(SequenceRecord {
        frames,
        boxes: from_records(&records, m.length)?,
        fields,
        occluded: m.occluded,
        meta: SequenceMeta { seed: m.seed, length: m.length, spec: m.spec },
    })
}

fn sequence_dir(dir: &Path, index: usize) -> PathBuf {
    dir.join(format!("seq_{index:04}"))
}

#[derive(Serialize, Deserialize)]
struct DatasetManifest {
    sequences: Vec<String>,
}

/// Writes each sequence into its own subdirectory plus `dataset.json`.
pub fn save_dataset(records: &[SequenceRecord], dir: impl AsRef<Path>) -> Result<()> {
    let dir = dir.as_ref();
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let mut names = Vec::new();
    for (i, r) in records.iter().enumerate() {
        save(r, sequence_dir(dir, i))?;
        names.push(format!("seq_{i:04}"));
    }
    let path = dir.join("dataset.json");
    let text = serde_json::to_string_pretty(&DatasetManifest { sequences: names }).map_err(|e| Error::parse(&path, e))?;
    fs::write(&path, text + "\n").map_err(|e| Error::io(&path, e))
}

pub fn load_dataset(dir: impl AsRef<Path>) -> Result<Vec<SequenceRecord>> {
    let dir = dir.as_ref();
    let path = dir.join("dataset.json");
    let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
    let m: DatasetManifest = serde_json::from_str(&text).map_err(|e| Error::parse(&path, e))?;
    m.sequences.iter().map(|s| load(dir.join(s))).collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn one_object(velocity: [f32; 2]) -> SceneSpec {
        SceneSpec {
            image_size: [32, 32],
            stride: 4,
            num_classes: 3,
            objects: vec![ObjectSpec {
                shape: Shape::Rectangle,
                class_id: 1,
                size: [12.0, 12.0],
                start: [12.0, 14.0],
                velocity,
                acceleration: [0.0, 0.0],
                texture_seed: 5,
                lifetime: None,
            }],
            occlusions: vec![],
            distractors: vec![],
            noise: 0.0,
            camera_velocity: [0.0, 0.0],
            background_seed: 1,
            field_margin: 0.0,
        }
    }

    #[test]
    fn class_colors_share_luma() {
        for k in 0..6 {
            assert!((luma(class_color(k)) - OBJECT_LUMA).abs() < 1e-6);
            assert!(class_color(k).iter().all(|&c| (0.0..=1.0).contains(&c)));
        }
    }

    #[test]
    fn static_scene_is_constant() {
        let r = generate(&one_object([0.0, 0.0]), 5, 3).unwrap();
        assert!(r.frames.windows(2).all(|f| f[0] == f[1]));
        assert!(r.fields.iter().all(|d| d.is_zero()));
    }

    #[test]
    fn object_field_is_backward_velocity() {
        let r = generate(&one_object([4.0, 0.0]), 3, 0).unwrap();
        let b = r.boxes[1][0];
        assert_eq!((b.x0, b.x1), (10.0, 22.0));
        for i in 0..8 {
            for j in 0..8 {
                let (cx, cy) = ((j as f32 + 0.5) * 4.0, (i as f32 + 0.5) * 4.0);
                let want = if b.contains(cx, cy) { (-1.0, 0.0) } else { (0.0, 0.0) };
                assert_eq!(r.fields[1].get(i, j), want);
            }
        }
    }

    #[test]
    fn margin_band_follows_the_object() {
        let mut spec = one_object([4.0, 0.0]);
        spec.field_margin = 1.5;
        spec.camera_velocity = [2.0, 0.0];
        // a static object listed first, so only real support can win its cells
        let mut still = spec.objects[0].clone();
        still.size = [6.0, 6.0];
        still.start = [27.0, 14.0];
        still.velocity = [0.0, 0.0];
        spec.objects.insert(0, still);
        let r = generate(&spec, 2, 0).unwrap();
        let row = |j| r.fields[1].get(3, j);
        assert_eq!(row(3), (-1.0, 0.0)); // real support
        assert_eq!(row(1), (-1.0, 0.0)); // band
        assert_eq!(row(0), (0.5, 0.0)); // camera
        assert_eq!(row(6), (0.0, 0.0)); // static object inside the moving band
    }

    #[test]
    fn gap_fields_span_several_frames() {
        let mut spec = one_object([1.0, 0.5]);
        spec.camera_velocity = [0.5, -0.25];
        let r = generate(&spec, 6, 0).unwrap();
        let gaps = r.gap_fields(4);
        assert!(gaps[0].is_empty());
        assert_eq!(gaps[2].len(), 2);
        assert_eq!(gaps[5].len(), 4);
        for t in 1..6 {
            assert_eq!(gaps[t][0], r.fields[t]);
        }
        // pixel motion over three frames, in feature units
        let b = r.boxes[5][0];
        for i in 0..8 {
            for j in 0..8 {
                let (cx, cy) = ((j as f32 + 0.5) * 4.0, (i as f32 + 0.5) * 4.0);
                let want = if b.contains(cx, cy) { (-3.0 / 4.0, -1.5 / 4.0) } else { (1.5 / 4.0, -0.75 / 4.0) };
                assert_eq!(gaps[5][2].get(i, j), want);
            }
        }
    }

    #[test]
    fn occluded_frames_keep_boxes() {
        let mut spec = one_object([1.0, 0.0]);
        spec.occlusions.push(Occlusion { object: 0, frames: [5, 9] });
        let r = generate(&spec, 12, 0).unwrap();
        for t in 0..12 {
            assert_eq!(r.boxes[t].len(), 1);
            assert_eq!(r.occluded[t], (5..9).contains(&t));
        }
        let b = r.boxes[6][0];
        let (x, y) = (((b.x0 + b.x1) / 2.0) as usize, ((b.y0 + b.y1) / 2.0) as usize);
        let p = r.frames[6].pixel(y, x);
        assert!((p[0] - p[1]).abs() < 1e-6 && (p[1] - p[2]).abs() < 1e-6);
    }

    #[test]
    fn invalid_specs_are_rejected() {
        let mut s = one_object([0.0, 0.0]);
        s.objects[0].start = [0.0, 0.0];
        assert!(generate(&s, 3, 0).is_err());
        let mut s = one_object([0.0, 0.0]);
        s.occlusions.push(Occlusion { object: 0, frames: [2, 9] });
        assert!(generate(&s, 4, 0).is_err());
        let mut s = one_object([0.0, 0.0]);
        s.objects[0].class_id = 3;
        assert!(generate(&s, 4, 0).is_err());
    }

    #[test]
    fn objects_stay_mostly_inside() {
        let mut s = one_object([5.0, 3.5]);
        s.objects[0].acceleration = [0.3, -0.2];
        let r = generate(&s, 60, 0).unwrap();
        for b in r.boxes.iter().flatten() {
            assert!(b.area() >= 0.5 * 144.0 - 1e-3);
        }
    }

    #[test]
    fn sampled_datasets_are_reproducible() {
        let a = generate_dataset(&SceneSampler::default(), 3, 6, 11).unwrap();
        let b = generate_dataset(&SceneSampler::default(), 3, 6, 11).unwrap();
        assert_eq!(a, b);
        assert_ne!(a[0].frames, a[1].frames);
    }
}
