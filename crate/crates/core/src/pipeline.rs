//! Training, detection and ablation sweeps over whole datasets.

use std::collections::HashMap;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::dataset::{Dataset, DatasetImage};
use crate::error::{Error, Result};
use crate::eval::{evaluate, ApInterpolation, EvalProtocol, MetricsSummary};
use crate::forest::{bootstrap_train, prior_from_score, BootstrapData, Forest, PoolEntry, StageRecord, TrainConfig};
use crate::geometry::{iou, nms, order_by_score_desc, Candidate, Detection, GroundTruthBox};
use crate::pca::{pca_fit, PcaProjector, PcaTarget};
use crate::routing::{assemble_descriptor, bin_input_dim, descriptor_len, pooled_cells, ChannelConfig, RoutingTable};
use crate::synth::mix_seed;

pub const TRAIN_TOP_K: usize = 1000;
pub const TEST_TOP_K: usize = 100;
pub const NMS_THRESHOLD: f64 = 0.5;

/// Routing table, per-bin projectors, forest and channel layout.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DetectorModel {
    pub routing: RoutingTable,
    pub projectors: Vec<PcaProjector>,
    pub forest: Forest,
    pub channels: ChannelConfig,
    pub nms_threshold: f64,
    pub test_top_k: usize,
}

impl DetectorModel {
    pub fn descriptor_len(&self) -> usize {
        descriptor_len(&self.routing, &self.channels)
    }

    pub fn validate(&self) -> Result<()> {
        self.routing.validate()?;
        if self.projectors.len() != self.routing.bins.len() {
            return Err(Error::Invariant(format!("{} projectors for {} bins", self.projectors.len(), self.routing.bins.len())));
        }
        for (bin, p) in self.projectors.iter().enumerate() {
            if p.output_dim != self.routing.target_dim {
                return Err(Error::ProjectorMismatch { bin, input: p.input_dim, output: p.output_dim, expected_in: p.input_dim, expected_out: self.routing.target_dim });
            }
        }
        if self.forest.descriptor_len != self.descriptor_len() {
            return Err(Error::Invariant(format!("forest expects {} values, descriptors have {}", self.forest.descriptor_len, self.descriptor_len())));
        }
        Ok(())
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string(self)?)
    }

    pub fn from_json(s: &str) -> Result<Self> {
        let mut m: DetectorModel = serde_json::from_str(s)?;
        for p in &mut m.projectors {
            p.refresh_cache();
        }
        m.validate()?;
        Ok(m)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        std::fs::write(path, self.to_json()?)?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::from_json(&std::fs::read_to_string(path)?)
    }
}

/// How projectors are fitted.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PcaConfig {
    /// When false every bin must already have `target_dim` inputs per cell.
    pub enabled: bool,
    /// Cap on cell vectors per bin, split evenly between positive and
    /// negative boxes.
    pub max_samples: usize,
    /// Fit a full rotation for bins whose width already equals the target
    /// instead of passing them through unchanged.
    pub rotate_square: bool,
}

impl Default for PcaConfig {
    fn default() -> Self {
        PcaConfig { enabled: true, max_samples: 100_000, rotate_square: false }
    }
}

/// Pedestrian height range a detector is trained and evaluated on.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScaleSubset {
    pub name: String,
    pub min_height: f64,
    pub max_height: Option<f64>,
}

impl ScaleSubset {
    pub fn small() -> Self {
        ScaleSubset { name: "small".into(), min_height: 50.0, max_height: Some(80.0) }
    }

    pub fn large() -> Self {
        ScaleSubset { name: "large".into(), min_height: 80.0, max_height: None }
    }

    pub fn all() -> Self {
        ScaleSubset { name: "all".into(), min_height: 50.0, max_height: None }
    }

    pub fn contains(&self, h: f64) -> bool {
        h >= self.min_height && self.max_height.is_none_or(|m| h < m)
    }

    /// `protocol` restricted to this height range.
    pub fn protocol(&self, protocol: &EvalProtocol) -> EvalProtocol {
        EvalProtocol {
            height_min: protocol.height_min.max(self.min_height),
            height_max: match (protocol.height_max, self.max_height) {
                (Some(a), Some(b)) => Some(a.min(b)),
                (a, b) => a.or(b),
            },
            ..protocol.clone()
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DetectorConfig {
    pub routing: RoutingTable,
    pub pca: PcaConfig,
    pub channels: ChannelConfig,
    pub train: TrainConfig,
    pub train_top_k: usize,
    pub test_top_k: usize,
    pub nms_threshold: f64,
    /// Restricts positives to ground truth in this range.
    pub subset: Option<ScaleSubset>,
}

impl Default for DetectorConfig {
    fn default() -> Self {
        DetectorConfig {
            routing: RoutingTable::scale_aware(768),
            pca: PcaConfig::default(),
            channels: ChannelConfig::default(),
            train: TrainConfig::sam_basic(),
            train_top_k: TRAIN_TOP_K,
            test_top_k: TEST_TOP_K,
            nms_threshold: NMS_THRESHOLD,
            subset: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PcaReport {
    pub bin: usize,
    pub input_dim: usize,
    pub output_dim: usize,
    /// Components with non-negligible variance; below `output_dim` when the
    /// sample covariance is rank deficient (remaining rows are zero).
    pub kept: usize,
    pub energy: f64,
    pub samples: usize,
    pub identity: bool,
}

#[derive(Debug, Clone, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct SelectionCaps {
    pub train_top_k: usize,
    pub test_top_k: usize,
    pub proposals_seen: usize,
    pub proposals_used: usize,
    pub positives: usize,
    pub pool_negatives: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub config_hash: String,
    pub seed: u64,
    pub dataset: Option<String>,
    pub caps: SelectionCaps,
    pub pca: Vec<PcaReport>,
    pub stages: Vec<StageRecord>,
    pub metrics: Option<MetricsSummary>,
}

/// Hex SHA-256 of the JSON encoding of `value`.
pub fn config_hash<T: Serialize>(value: &T) -> Result<String> {
    Ok(hex::encode(Sha256::digest(serde_json::to_vec(value)?)))
}

/// Proposal indices by descending score, capped at `k`.
pub fn top_k(proposals: &[Candidate], k: usize) -> Vec<usize> {
    let scores: Vec<f64> = proposals.iter().map(|c| c.score()).collect();
    let mut order = order_by_score_desc(&scores);
    order.truncate(k);
    order
}

#[derive(Debug, Clone)]
struct Labeled {
    image: usize,
    cand: Candidate,
    max_iou: f64,
    positive: bool,
}

fn label_proposals(dataset: &Dataset, cfg: &DetectorConfig, caps: &mut SelectionCaps) -> Vec<Labeled> {
    let pos_ok = |g: &GroundTruthBox| !g.ignore && cfg.subset.as_ref().is_none_or(|s| s.contains(g.bbox.h()));
    let mut out = Vec::new();
    for (i, im) in dataset.images.iter().enumerate() {
        caps.proposals_seen += im.proposals.len();
        let chosen = top_k(&im.proposals, cfg.train_top_k);
        caps.proposals_used += chosen.len();
        for k in chosen {
            let c = im.proposals[k];
            let max_iou = im.ground_truth.iter().map(|g| iou(&c.bbox, &g.bbox)).fold(0.0, f64::max);
            let best_pos = im.ground_truth.iter().filter(|g| pos_ok(g)).map(|g| iou(&c.bbox, &g.bbox)).fold(0.0, f64::max);
            if best_pos >= cfg.train.pos_iou {
                out.push(Labeled { image: i, cand: c, max_iou, positive: true });
            } else if max_iou < cfg.train.neg_iou {
                out.push(Labeled { image: i, cand: c, max_iou, positive: false });
            }
        }
    }
    out
}

fn zero_padded(p: PcaProjector, d: usize) -> Result<PcaProjector> {
    if p.output_dim == d {
        return Ok(p);
    }
    let mut basis = p.basis.clone();
    basis.resize(d * p.input_dim, 0.0);
    let mut eig = p.eigenvalues.clone();
    eig.resize(d, 0.0);
    Ok(PcaProjector::new(p.input_dim, d, p.mean.clone(), basis, eig, p.energy)?)
}

/// Fits one projector per bin from cell vectors of labeled boxes routed to it.
fn fit_projectors(dataset: &Dataset, labeled: &[Labeled], cfg: &DetectorConfig, seed: u64) -> Result<(Vec<PcaProjector>, Vec<PcaReport>)> {
    let table = &cfg.routing;
    let first = dataset.images.first().ok_or_else(|| Error::Config("empty dataset".into()))?;
    let cells = table.grid.cells();
    let mut projectors = Vec::new();
    let mut reports = Vec::new();
    for bin in 0..table.bins.len() {
        let input_dim = bin_input_dim(table, bin, &first.record)?;
        let d = table.target_dim;
        if (input_dim == d && !cfg.pca.rotate_square) || !cfg.pca.enabled {
            if input_dim != d {
                return Err(Error::Config(format!("bin {bin} has {input_dim} values per cell but PCA is disabled and target is {d}")));
            }
            projectors.push(PcaProjector::identity(d));
            reports.push(PcaReport { bin, input_dim, output_dim: d, kept: d, energy: 1.0, samples: 0, identity: true });
            continue;
        }
        if input_dim < d {
            return Err(Error::Config(format!("bin {bin} has {input_dim} values per cell, fewer than the target {d}")));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(mix_seed(seed, 1000 + bin as u64));
        let per_class_boxes = (cfg.pca.max_samples / 2).div_ceil(cells).max(1);
        let mut chosen: Vec<&Labeled> = Vec::new();
        for positive in [true, false] {
            let mut pick: Vec<&Labeled> = labeled.iter().filter(|l| l.positive == positive && table.route(l.cand.bbox.h()) == bin).collect();
            pick.shuffle(&mut rng);
            pick.truncate(per_class_boxes);
            chosen.extend(pick);
        }
        let layers = &table.bins[bin].layers;
        let blocks = chosen
            .par_iter()
            .map(|l| pooled_cells(&dataset.images[l.image].record, &l.cand.bbox, layers, table.grid).map(|(v, _)| v))
            .collect::<Result<Vec<_>>>()?;
        let samples: Vec<&[f32]> = blocks.iter().flat_map(|b| b.chunks_exact(input_dim)).take(cfg.pca.max_samples).collect();
        let fit = pca_fit(&samples, PcaTarget::Dim(d))?;
        let kept = fit.projector.output_dim;
        let energy = fit.projector.energy;
        projectors.push(zero_padded(fit.projector, d)?);
        reports.push(PcaReport { bin, input_dim, output_dim: d, kept, energy, samples: samples.len(), identity: false });
    }
    Ok((projectors, reports))
}

/// Fits projectors and a bootstrapped forest on `dataset`.
pub fn train_detector(dataset: &Dataset, cfg: &DetectorConfig, seed: u64) -> Result<(DetectorModel, RunManifest)> {
    cfg.routing.validate()?;
    cfg.train.validate()?;
    let mut caps = SelectionCaps { train_top_k: cfg.train_top_k, test_top_k: cfg.test_top_k, ..Default::default() };
    let labeled = label_proposals(dataset, cfg, &mut caps);
    let (projectors, pca) = fit_projectors(dataset, &labeled, cfg, seed)?;
    let dim = descriptor_len(&cfg.routing, &cfg.channels);
    let descriptors = labeled
        .par_iter()
        .with_min_len(64)
        .map(|l| assemble_descriptor(&dataset.images[l.image].record, &l.cand.bbox, &cfg.routing, &projectors, &cfg.channels).map(|d| d.values))
        .collect::<Result<Vec<_>>>()?;
    let mut data = BootstrapData { dim, positives: Vec::new(), pool: Vec::new() };
    for (l, desc) in labeled.iter().zip(descriptors) {
        let prior = prior_from_score(l.cand.score());
        if l.positive {
            data.positives.push((desc, prior));
        } else {
            data.pool.push(PoolEntry { image: l.image, key: l.cand.bbox.key(), max_iou: l.max_iou, prior, descriptor: desc });
        }
    }
    caps.positives = data.positives.len();
    caps.pool_negatives = data.pool.len();
    let train = TrainConfig { seed: mix_seed(seed, 2000), ..cfg.train.clone() };
    let forest = bootstrap_train(&data, &train)?;
    let model = DetectorModel {
        routing: cfg.routing.clone(),
        projectors,
        forest,
        channels: cfg.channels,
        nms_threshold: cfg.nms_threshold,
        test_top_k: cfg.test_top_k,
    };
    model.validate()?;
    let manifest = RunManifest {
        config_hash: config_hash(cfg)?,
        seed,
        dataset: None,
        caps,
        pca,
        stages: model.forest.stage_history.clone(),
        metrics: None,
    };
    Ok((model, manifest))
}

/// Rescores the top proposals of one image and suppresses overlaps.
pub fn detect_image(model: &DetectorModel, record: &crate::maps::ImageRecord, proposals: &[Candidate]) -> Result<Vec<Detection>> {
    let mut scored = Vec::new();
    for k in top_k(proposals, model.test_top_k) {
        let c = &proposals[k];
        let desc = assemble_descriptor(record, &c.bbox, &model.routing, &model.projectors, &model.channels)?;
        let s = model.forest.score(&desc.values, prior_from_score(c.score()))?;
        scored.push(Detection::new(c.bbox, s)?);
    }
    Ok(nms(&scored, model.nms_threshold))
}

/// Detections for every image, in dataset order.
pub fn detect_dataset(model: &DetectorModel, dataset: &Dataset) -> Result<Vec<Vec<Detection>>> {
    dataset.images.par_iter().map(|im| detect_image(model, &im.record, &im.proposals)).collect()
}

/// Summary metrics of `detections` against the dataset's annotations.
pub fn evaluate_detections(dataset: &Dataset, detections: &[Vec<Detection>], protocol: &EvalProtocol) -> Result<MetricsSummary> {
    let pairs: Vec<(&[Detection], &[GroundTruthBox])> = dataset.images.iter().zip(detections).map(|(im, d)| (d.as_slice(), im.ground_truth.as_slice())).collect();
    Ok(evaluate(&pairs, protocol, ApInterpolation::Eleven)?.summary)
}

/// Trains on `train`, detects on `test` and returns MR-4 under `protocol`.
pub fn train_and_score(train: &Dataset, test: &Dataset, cfg: &DetectorConfig, protocol: &EvalProtocol, seed: u64) -> Result<(f64, DetectorModel, RunManifest)> {
    let (model, mut manifest) = train_detector(train, cfg, seed)?;
    let dets = detect_dataset(&model, test)?;
    let summary = evaluate_detections(test, &dets, protocol)?;
    let mr4 = summary.mr4.ok_or_else(|| Error::Config("test set has no eligible ground truth".into()))?;
    manifest.metrics = Some(summary);
    Ok((mr4, model, manifest))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepCell {
    pub combination: Vec<String>,
    pub subset: String,
    pub mr4: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepTable {
    pub combinations: Vec<Vec<String>>,
    pub subsets: Vec<String>,
    pub cells: Vec<SweepCell>,
}

impl SweepTable {
    pub fn get(&self, combination: &[String], subset: &str) -> Option<f64> {
        self.cells.iter().find(|c| c.combination == combination && c.subset == subset).map(|c| c.mr4)
    }

    /// One row per combination (`conv3+conv4a` style label), one MR-4 column
    /// per subset.
    pub fn to_csv(&self) -> Result<String> {
        let mut w = csv::Writer::from_writer(Vec::new());
        let mut header = vec!["combination".to_string()];
        header.extend(self.subsets.iter().cloned());
        w.write_record(&header)?;
        for combo in &self.combinations {
            let mut row = vec![combo.join("+")];
            for s in &self.subsets {
                row.push(self.get(combo, s).map(|v| v.to_string()).unwrap_or_default());
            }
            w.write_record(&row)?;
        }
        let bytes = w.into_inner().map_err(|e| Error::Io(e.into_error()))?;
        String::from_utf8(bytes).map_err(|e| Error::Invariant(e.to_string()))
    }
}

/// Layer channel counts of a record, by name.
fn channel_counts(im: &DatasetImage) -> HashMap<String, usize> {
    im.record.maps.iter().map(|(k, v)| (k.clone(), v.channels())).collect()
}

/// Trains and evaluates one single-bin detector per (combination, subset).
///
/// Each combination gets its own projector at `target_dim`, or no reduction
/// when `target_dim` is `None`. Cells run in parallel with seeds derived from
/// `seed` and the cell's position.
#[allow(clippy::too_many_arguments)]
pub fn ablation_sweep(
    train: &Dataset,
    test: &Dataset,
    base: &DetectorConfig,
    combinations: &[Vec<String>],
    subsets: &[ScaleSubset],
    protocol: &EvalProtocol,
    target_dim: Option<usize>,
    seed: u64,
) -> Result<SweepTable> {
    let first = train.images.first().ok_or_else(|| Error::Config("empty training set".into()))?;
    let counts = channel_counts(first);
    let mut jobs = Vec::new();
    for (ci, combo) in combinations.iter().enumerate() {
        let width = combo
            .iter()
            .map(|l| counts.get(l).copied().ok_or_else(|| Error::MissingLayer { image_id: first.image_id().to_string(), layer: l.clone() }))
            .sum::<Result<usize>>()?;
        for (si, subset) in subsets.iter().enumerate() {
            let mut routing = RoutingTable::single(combo.clone(), target_dim.unwrap_or(width).min(width));
            routing.grid = base.routing.grid;
            let cfg = DetectorConfig { routing, subset: Some(subset.clone()), ..base.clone() };
            jobs.push((ci, si, cfg, mix_seed(seed, (ci * subsets.len() + si) as u64)));
        }
    }
    let results = jobs
        .par_iter()
        .map(|(ci, si, cfg, s)| train_and_score(train, test, cfg, &subsets[*si].protocol(protocol), *s).map(|(mr, _, _)| (*ci, *si, mr)))
        .collect::<Result<Vec<_>>>()?;
    Ok(SweepTable {
        combinations: combinations.to_vec(),
        subsets: subsets.iter().map(|s| s.name.clone()).collect(),
        cells: results.into_iter().map(|(ci, si, mr4)| SweepCell { combination: combinations[ci].clone(), subset: subsets[si].name.clone(), mr4 }).collect(),
    })
}
