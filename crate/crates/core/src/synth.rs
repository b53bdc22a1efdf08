//! Deterministic synthetic datasets with scale-dependent layer informativeness.
//!
//! Every planted object (pedestrian or distractor) raises a shared objectness
//! channel and a set of class channels with vertical bumps. Pedestrians put
//! the bump of channel `c` at relative height `v_c`, distractors at `1 - v_c`,
//! so the two differ only in where the bumps sit. Each layer then blends the
//! pattern towards its mean over the box with weight
//! `clamp((h / stride - lo) / (hi - lo), 0, 1)`: objects that cover few cells
//! of a layer lose their discriminative shape there, while still showing the
//! same average response.

use std::cmp::Ordering;

use rand::seq::IndexedRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::dataset::{Dataset, DatasetImage};
use crate::error::{Error, Result};
use crate::geometry::{iou, BBox, Candidate, GroundTruthBox, EvalRegion};
use crate::maps::{EdgeMap, FeatureMap, ImageRecord, LabelMap, MAX_LABEL};

/// Pedestrian width over height.
pub const ASPECT: f64 = 0.41;
pub const PERSON_CLASS: u8 = 15;
pub const DISTRACTOR_CLASS: u8 = 13;
/// Distance in pixels kept between planted objects and the image border.
pub const BORDER: f64 = 6.0;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LayerSpec {
    pub name: String,
    pub stride: u32,
    pub channels: usize,
    /// Peak height of the planted pattern, in noise units.
    pub amplitude: f32,
    /// Class channels that carry bumps; the rest are noise. `None` means all.
    #[serde(default)]
    pub informative: Option<usize>,
}

impl LayerSpec {
    pub fn new(name: &str, stride: u32, channels: usize, amplitude: f32) -> Self {
        LayerSpec { name: name.into(), stride, channels, amplitude, informative: None }
    }
}

/// conv3 (256, /4), conv4 (512, /8), conv4a (512, /4), conv5 (512, /16), conv5a (512, /8).
pub fn vgg_layers() -> Vec<LayerSpec> {
    vec![
        LayerSpec::new("conv3", 4, 256, 0.6),
        LayerSpec::new("conv4", 8, 512, 0.8),
        LayerSpec::new("conv4a", 4, 512, 0.8),
        LayerSpec::new("conv5", 16, 512, 1.2),
        LayerSpec::new("conv5a", 8, 512, 1.2),
    ]
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SynthConfig {
    pub num_images: usize,
    pub image_w: usize,
    pub image_h: usize,
    pub small_per_image: usize,
    pub large_per_image: usize,
    /// Half-open pedestrian height range of the small subset.
    pub small_heights: [f64; 2],
    pub large_heights: [f64; 2],
    pub distractors_per_image: usize,
    /// Fraction of proposals that are clutter (distractor copies and
    /// background windows) rather than jittered pedestrian copies.
    pub distractor_density: f64,
    pub proposals_per_image: usize,
    /// Probability that a pedestrian gets no proposal copies at all.
    pub unproposed_fraction: f64,
    /// Standard deviation of proposal jitter, relative to box size; draws are
    /// truncated at two deviations.
    pub jitter: f64,
    pub layers: Vec<LayerSpec>,
    pub noise: f32,
    /// `h / stride` range over which a layer goes from blurred to sharp.
    pub blur_window: [f64; 2],
    /// `h / stride` range over which the pattern fades again because each
    /// cell sees too small a part of the object. `None` disables the fade.
    pub context_window: Option<[f64; 2]>,
    /// Bump width relative to box height.
    pub bump_width: f64,
    /// Probability that a pedestrian is heavily occluded from below.
    pub occluded_fraction: f64,
    pub semantic: bool,
    pub edges: bool,
    /// Probability that a label pixel is replaced by a uniform class.
    pub label_noise: f64,
    pub id_prefix: String,
}

impl Default for SynthConfig {
    fn default() -> Self {
        SynthConfig {
            num_images: 8,
            image_w: 640,
            image_h: 480,
            small_per_image: 1,
            large_per_image: 1,
            small_heights: [50.0, 80.0],
            large_heights: [80.0, 160.0],
            distractors_per_image: 2,
            distractor_density: 0.5,
            proposals_per_image: 100,
            unproposed_fraction: 0.02,
            jitter: 0.1,
            layers: vgg_layers(),
            noise: 1.0,
            blur_window: [9.0, 10.0],
            context_window: Some([20.0, 30.0]),
            bump_width: 0.08,
            occluded_fraction: 0.1,
            semantic: true,
            edges: true,
            label_noise: 0.05,
            id_prefix: "img".into(),
        }
    }
}

impl SynthConfig {
    /// 320x240 images and 8-channel layers.
    pub fn desk() -> Self {
        SynthConfig {
            image_w: 320,
            image_h: 240,
            layers: vgg_layers().into_iter().map(|l| LayerSpec { channels: 8, ..l }).collect(),
            ..SynthConfig::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.num_images == 0 || self.image_w == 0 || self.image_h == 0 {
            return bad("image count and size must be positive".into());
        }
        for (name, r) in [("small", self.small_heights), ("large", self.large_heights)] {
            if !(r[0] > 0.0 && r[0] < r[1] && r[1].is_finite()) {
                return bad(format!("{name} height range [{}, {}) is empty", r[0], r[1]));
            }
            if r[1] + 2.0 * BORDER > self.image_h as f64 || r[1] * ASPECT + 2.0 * BORDER > self.image_w as f64 {
                return bad(format!("{name} heights up to {} do not fit a {}x{} image", r[1], self.image_w, self.image_h));
            }
        }
        if !(0.0..1.0).contains(&self.distractor_density) {
            return bad(format!("distractor density {} outside [0, 1)", self.distractor_density));
        }
        if !(self.jitter >= 0.0 && self.jitter.is_finite()) || !(self.noise >= 0.0 && self.noise.is_finite()) {
            return bad("jitter and noise must be finite and non-negative".into());
        }
        if self.blur_window[0].partial_cmp(&self.blur_window[1]) != Some(Ordering::Less) || self.bump_width.partial_cmp(&0.0) != Some(Ordering::Greater) {
            return bad("blur window must be increasing and bump width positive".into());
        }
        if let Some(c) = self.context_window {
            if !(self.blur_window[1] <= c[0] && c[0] < c[1]) {
                return bad("context window must be increasing and lie above the blur window".into());
            }
        }
        if ![self.occluded_fraction, self.label_noise, self.unproposed_fraction].iter().all(|p| (0.0..=1.0).contains(p)) {
            return bad("probabilities must lie in [0, 1]".into());
        }
        for l in &self.layers {
            if l.channels == 0 || !crate::maps::VALID_STRIDES.contains(&l.stride) || !l.amplitude.is_finite() {
                return bad(format!("layer {:?} needs positive channels, a valid stride and finite amplitude", l.name));
            }
        }
        Ok(())
    }

    /// Region used for evaluation on these images.
    pub fn eval_region(&self) -> EvalRegion {
        EvalRegion::inset(self.image_w as f64, self.image_h as f64, 5.0)
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
enum Kind {
    Pedestrian,
    Distractor,
}

#[derive(Debug, Clone, Copy)]
struct Planted {
    bbox: BBox,
    kind: Kind,
    occlusion: f64,
    proposed: bool,
}

/// SplitMix64 finalizer, used to derive independent sub-seeds.
pub fn mix_seed(seed: u64, index: u64) -> u64 {
    let mut z = seed ^ index.wrapping_add(1).wrapping_mul(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Generates `cfg.num_images` images. Pure in `(cfg, seed)`.
pub fn synth_generate(cfg: &SynthConfig, seed: u64) -> Result<Dataset> {
    cfg.validate()?;
    let images = (0..cfg.num_images).into_par_iter().map(|i| generate_image(cfg, seed, i)).collect::<Result<Vec<_>>>()?;
    Ok(Dataset { images })
}

fn gauss(rng: &mut ChaCha8Rng) -> f64 {
    StandardNormal.sample(rng)
}

/// Relative height of the bump of class channel `c`; shared by all layers so
/// that channel `c` means the same thing at every resolution.
fn bump_center(c: usize) -> f64 {
    let t = (c as f64 * 0.618_033_988_749_895).fract();
    0.15 + 0.7 * t
}

fn bump(v: f64, center: f64, width: f64) -> f64 {
    let z = (v - center) / width;
    (-0.5 * z * z).exp()
}

/// Mean of the bump over `v` in `[0, 1]`; equal for `center` and `1 - center`.
fn bump_mean(center: f64, width: f64) -> f64 {
    const N: usize = 256;
    (0..N).map(|k| bump((k as f64 + 0.5) / N as f64, center, width)).sum::<f64>() / N as f64
}

fn place(cfg: &SynthConfig, rng: &mut ChaCha8Rng, range: [f64; 2], taken: &[Planted]) -> Option<BBox> {
    for _ in 0..64 {
        let h = rng.random_range(range[0]..range[1]);
        let w = h * ASPECT;
        let x = rng.random_range(BORDER..=(cfg.image_w as f64 - w - BORDER));
        let y = rng.random_range(BORDER..=(cfg.image_h as f64 - h - BORDER));
        let b = BBox::new(x, y, w, h).ok()?;
        if taken.iter().all(|p| p.bbox.intersection_area(&b) == 0.0) {
            return Some(b);
        }
    }
    None
}

fn generate_image(cfg: &SynthConfig, seed: u64, index: usize) -> Result<DatasetImage> {
    let mut rng = ChaCha8Rng::seed_from_u64(mix_seed(seed, index as u64));
    let mut planted: Vec<Planted> = Vec::new();
    let peds = std::iter::repeat_n(cfg.small_heights, cfg.small_per_image).chain(std::iter::repeat_n(cfg.large_heights, cfg.large_per_image));
    for range in peds {
        if let Some(bbox) = place(cfg, &mut rng, range, &planted) {
            let occlusion = if rng.random_bool(cfg.occluded_fraction) { rng.random_range(0.4..0.8) } else { 0.0 };
            let proposed = !rng.random_bool(cfg.unproposed_fraction);
            planted.push(Planted { bbox, kind: Kind::Pedestrian, occlusion, proposed });
        }
    }
    for _ in 0..cfg.distractors_per_image {
        let range = if rng.random_bool(0.5) { cfg.small_heights } else { cfg.large_heights };
        if let Some(bbox) = place(cfg, &mut rng, range, &planted) {
            planted.push(Planted { bbox, kind: Kind::Distractor, occlusion: 0.0, proposed: true });
        }
    }

    let maps = cfg.layers.iter().map(|spec| render_layer(cfg, spec, &planted, &mut rng)).collect::<Result<Vec<_>>>()?;
    let labels = if cfg.semantic { Some(render_labels(cfg, &planted, &mut rng)?) } else { None };
    let edges = if cfg.edges { Some(render_edges(cfg, &planted, &mut rng)?) } else { None };
    let ground_truth = planted
        .iter()
        .filter(|p| p.kind == Kind::Pedestrian)
        .map(|p| GroundTruthBox::new(p.bbox, p.occlusion, 0.0, false))
        .collect::<std::result::Result<Vec<_>, _>>()?;
    let proposals = make_proposals(cfg, &planted, &mut rng)?;
    let record = ImageRecord::new(format!("{}{:05}", cfg.id_prefix, index), cfg.image_w, cfg.image_h, maps, labels, edges)?;
    Ok(DatasetImage { record, ground_truth, proposals })
}

/// Fraction of the object's pattern that survives in a layer of `stride`.
pub fn sharpness(height: f64, stride: u32, window: [f64; 2]) -> f64 {
    ((height / stride as f64 - window[0]) / (window[1] - window[0])).clamp(0.0, 1.0)
}

/// [`sharpness`] times the fade-out above `context`.
pub fn informativeness(height: f64, stride: u32, blur: [f64; 2], context: Option<[f64; 2]>) -> f64 {
    let fade = context.map_or(1.0, |c| 1.0 - sharpness(height, stride, c));
    sharpness(height, stride, blur) * fade
}

fn render_layer(cfg: &SynthConfig, spec: &LayerSpec, planted: &[Planted], rng: &mut ChaCha8Rng) -> Result<FeatureMap> {
    let s = spec.stride as usize;
    let (mh, mw) = (cfg.image_h.div_ceil(s), cfg.image_w.div_ceil(s));
    let plane = mh * mw;
    let mut data: Vec<f32> = (0..spec.channels * plane).map(|_| cfg.noise * gauss(rng) as f32).collect();
    let informative = spec.informative.unwrap_or(spec.channels).min(spec.channels.saturating_sub(1));
    let centers: Vec<f64> = (1..=informative).map(bump_center).collect();
    let means: Vec<f64> = centers.iter().map(|&c| bump_mean(c, cfg.bump_width)).collect();
    let amp = spec.amplitude as f64;
    for p in planted {
        let b = &p.bbox;
        let lam = informativeness(b.h(), spec.stride, cfg.blur_window, cfg.context_window);
        let visible = 1.0 - p.occlusion;
        for r in 0..mh {
            let yc = (r as f64 + 0.5) * s as f64;
            let v = (yc - b.y()) / b.h();
            if !(0.0..visible).contains(&v) {
                continue;
            }
            for col in 0..mw {
                let xc = (col as f64 + 0.5) * s as f64;
                if xc < b.x() || xc >= b.right() {
                    continue;
                }
                let at = r * mw + col;
                data[at] += (0.8 * amp) as f32;
                for (k, (&c, &m)) in centers.iter().zip(&means).enumerate() {
                    let target = if p.kind == Kind::Pedestrian { c } else { 1.0 - c };
                    let val = lam * bump(v, target, cfg.bump_width) + (1.0 - lam) * m;
                    data[(k + 1) * plane + at] += (amp * val) as f32;
                }
            }
        }
    }
    Ok(FeatureMap::new(spec.name.clone(), spec.stride, spec.channels, mh, mw, data)?)
}

fn paint_silhouette(labels: &mut [u8], w: usize, p: &Planted, class: u8) {
    let b = &p.bbox;
    let visible_bottom = b.y() + b.h() * (1.0 - p.occlusion);
    let (r0, r1) = (b.y().floor() as usize, visible_bottom.ceil() as usize);
    let (c0, c1) = ((b.x() + 0.15 * b.w()).floor() as usize, (b.right() - 0.15 * b.w()).ceil() as usize);
    for r in r0..r1.min(labels.len() / w) {
        for c in c0..c1.min(w) {
            labels[r * w + c] = class;
        }
    }
}

fn render_labels(cfg: &SynthConfig, planted: &[Planted], rng: &mut ChaCha8Rng) -> Result<LabelMap> {
    let (w, h) = (cfg.image_w, cfg.image_h);
    let background: Vec<u8> = (1..=MAX_LABEL).filter(|&c| c != PERSON_CLASS && c != DISTRACTOR_CLASS).collect();
    let top = *background.choose(rng).expect("non-empty");
    let bottom = *background.choose(rng).expect("non-empty");
    let horizon = rng.random_range(h / 3..=h / 2);
    let mut labels: Vec<u8> = (0..h * w).map(|i| if i / w < horizon { top } else { bottom }).collect();
    for _ in 0..3 {
        let class = *background.choose(rng).expect("non-empty");
        let (rw, rh) = (rng.random_range(w / 10..=w / 3), rng.random_range(h / 10..=h / 3));
        let (x0, y0) = (rng.random_range(0..w - rw), rng.random_range(0..h - rh));
        for r in y0..y0 + rh {
            labels[r * w + x0..r * w + x0 + rw].fill(class);
        }
    }
    for p in planted {
        paint_silhouette(&mut labels, w, p, if p.kind == Kind::Pedestrian { PERSON_CLASS } else { DISTRACTOR_CLASS });
    }
    if cfg.label_noise > 0.0 {
        for v in labels.iter_mut() {
            if rng.random_bool(cfg.label_noise) {
                *v = rng.random_range(0..=MAX_LABEL);
            }
        }
    }
    Ok(LabelMap::new(h, w, labels)?)
}

fn render_edges(cfg: &SynthConfig, planted: &[Planted], rng: &mut ChaCha8Rng) -> Result<EdgeMap> {
    let (w, h) = (cfg.image_w, cfg.image_h);
    let mut e: Vec<f32> = (0..h * w).map(|_| rng.random_range(0.0..0.1f32)).collect();
    let stroke = |e: &mut Vec<f32>, r: usize, c: usize, v: f32| {
        if r < h && c < w {
            let px = &mut e[r * w + c];
            *px = px.max(v);
        }
    };
    for p in planted {
        let b = &p.bbox;
        let (x0, x1, y0, y1) = (b.x() as usize, b.right() as usize, b.y() as usize, b.bottom() as usize);
        for c in x0..=x1 {
            let v = rng.random_range(0.8..=1.0f32);
            stroke(&mut e, y0, c, v);
            stroke(&mut e, y1, c, v);
        }
        for r in y0..=y1 {
            let v = rng.random_range(0.8..=1.0f32);
            stroke(&mut e, r, x0, v);
            stroke(&mut e, r, x1, v);
        }
    }
    for _ in 0..8 {
        let v = rng.random_range(0.3..0.9f32);
        let len = rng.random_range(10..=w.min(h) / 2);
        let (r, c) = (rng.random_range(0..h), rng.random_range(0..w));
        let vertical = rng.random_bool(0.5);
        for k in 0..len {
            if vertical {
                stroke(&mut e, r + k, c, v);
            } else {
                stroke(&mut e, r, c + k, v);
            }
        }
    }
    Ok(EdgeMap::new(h, w, e)?)
}

fn jittered(cfg: &SynthConfig, b: &BBox, rng: &mut ChaCha8Rng) -> Result<BBox> {
    if cfg.jitter == 0.0 {
        return Ok(*b);
    }
    let h = (b.h() * (cfg.jitter * gauss(rng).clamp(-2.0, 2.0)).exp()).clamp(4.0, cfg.image_h as f64);
    let w = (h * ASPECT).min(cfg.image_w as f64);
    let (cx, cy) = b.center();
    let cx = cx + cfg.jitter * b.w() * gauss(rng).clamp(-2.0, 2.0);
    let cy = cy + cfg.jitter * b.h() * gauss(rng).clamp(-2.0, 2.0);
    let x = (cx - w / 2.0).clamp(0.0, cfg.image_w as f64 - w);
    let y = (cy - h / 2.0).clamp(0.0, cfg.image_h as f64 - h);
    Ok(BBox::new(x, y, w, h)?)
}

/// A random window overlapping every planted object by IoU below 0.1, or
/// `None` when a few draws find none.
fn background_window(cfg: &SynthConfig, planted: &[Planted], rng: &mut ChaCha8Rng) -> Result<Option<BBox>> {
    for _ in 0..32 {
        let h = rng.random_range(30.0..(cfg.image_h as f64).min(180.0));
        let w = (h * ASPECT).min(cfg.image_w as f64);
        let x = rng.random_range(0.0..=(cfg.image_w as f64 - w));
        let y = rng.random_range(0.0..=(cfg.image_h as f64 - h));
        let b = BBox::new(x, y, w, h)?;
        if planted.iter().all(|p| iou(&b, &p.bbox) < 0.1) {
            return Ok(Some(b));
        }
    }
    Ok(None)
}

/// Jittered pedestrian copies plus clutter, scored by a noisy sigmoid of
/// the best overlap with any planted object and sorted by descending score.
fn make_proposals(cfg: &SynthConfig, planted: &[Planted], rng: &mut ChaCha8Rng) -> Result<Vec<Candidate>> {
    let peds: Vec<&Planted> = planted.iter().filter(|p| p.kind == Kind::Pedestrian && p.proposed).collect();
    let distractors: Vec<&Planted> = planted.iter().filter(|p| p.kind == Kind::Distractor).collect();
    let total = cfg.proposals_per_image;
    let clutter = if peds.is_empty() { total } else { (cfg.distractor_density * total as f64).round() as usize };
    let mut boxes = Vec::with_capacity(total);
    for i in 0..total - clutter {
        boxes.push(jittered(cfg, &peds[i % peds.len()].bbox, rng)?);
    }
    for i in 0..clutter {
        if !distractors.is_empty() && i % 2 == 0 {
            boxes.push(jittered(cfg, &distractors[(i / 2) % distractors.len()].bbox, rng)?);
        } else if let Some(b) = background_window(cfg, planted, rng)? {
            boxes.push(b);
        } else {
            // crowded image: fall back to a copy of some planted object
            let p = &planted[i % planted.len()];
            boxes.push(jittered(cfg, &p.bbox, rng)?);
        }
    }
    let mut out = Vec::with_capacity(total);
    for b in boxes {
        let q = planted.iter().map(|p| iou(&b, &p.bbox)).fold(0.0, f64::max);
        let z = 6.0 * (q - 0.45) + 0.5 * gauss(rng);
        out.push(Candidate::new(b, 1.0 / (1.0 + (-z).exp()))?);
    }
    out.sort_by(|a, b| b.score().total_cmp(&a.score()));
    Ok(out)
}
