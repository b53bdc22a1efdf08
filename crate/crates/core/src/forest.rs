//! RealBoost forests of depth-limited decision trees, and the staged
//! bootstrapping trainer that mines hard negatives between stages.
//!
//! Trees split greedily on `(feature, threshold)` pairs minimising
//! `Z = 2 * sum_leaves sqrt(W+ * W-)`; leaves output the smoothed half
//! log-odds `0.5 * ln((W+ + eps) / (W- + eps))`. A sample goes left when its
//! feature value is strictly below the threshold.

use std::collections::HashSet;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::ForestError;

/// Margins are clamped to this magnitude before exponentiation.
pub const MARGIN_CLAMP: f64 = 50.0;
/// Candidate thresholds per feature (bin indices fit in a byte).
pub const MAX_THRESHOLDS: usize = 255;
/// Proposal scores enter the forest as clamped log-odds.
pub const PRIOR_CLAMP: f64 = 10.0;

/// Proposal confidence in `[0, 1]` mapped to a log-odds prior in `[-10, 10]`.
pub fn prior_from_score(score: f64) -> f64 {
    let s = score.clamp(0.0, 1.0);
    ((s / (1.0 - s)).ln()).clamp(-PRIOR_CLAMP, PRIOR_CLAMP)
}

/// Decision tree stored in preorder. Node `i` is a leaf when `feature[i] < 0`;
/// otherwise its left child is `i + 1` and its right child is `right[i]`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Tree {
    pub feature: Vec<i32>,
    pub threshold: Vec<f32>,
    pub right: Vec<u32>,
    pub value: Vec<f64>,
}

impl Tree {
    pub fn leaf(value: f64) -> Self {
        Tree { feature: vec![-1], threshold: vec![0.0], right: vec![0], value: vec![value] }
    }

    pub fn len(&self) -> usize {
        self.feature.len()
    }

    pub fn is_empty(&self) -> bool {
        self.feature.is_empty()
    }

    #[inline]
    pub fn eval(&self, x: &[f32]) -> f64 {
        let mut i = 0usize;
        loop {
            let f = self.feature[i];
            if f < 0 {
                return self.value[i];
            }
            i = if x[f as usize] < self.threshold[i] { i + 1 } else { self.right[i] as usize };
        }
    }

    pub fn depth(&self) -> usize {
        fn walk(t: &Tree, i: usize) -> usize {
            if t.feature[i] < 0 {
                0
            } else {
                1 + walk(t, i + 1).max(walk(t, t.right[i] as usize))
            }
        }
        walk(self, 0)
    }

    pub fn max_feature(&self) -> Option<usize> {
        self.feature.iter().filter(|&&f| f >= 0).map(|&f| f as usize).max()
    }
}

/// Per-stage bookkeeping of a bootstrapped training run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StageRecord {
    pub stage: usize,
    pub trees: usize,
    pub positives: usize,
    pub negatives: usize,
    /// Hard negatives added before this stage.
    pub mined: usize,
    pub final_loss: f64,
    pub clamped_margins: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Forest {
    pub trees: Vec<Tree>,
    /// Scale of the proposal prior in the margin.
    pub prior_weight: f64,
    pub descriptor_len: usize,
    pub stage_history: Vec<StageRecord>,
}

impl Forest {
    pub fn empty(descriptor_len: usize, prior_weight: f64) -> Self {
        Forest { trees: Vec::new(), prior_weight, descriptor_len, stage_history: Vec::new() }
    }

    /// `prior_weight * prior + sum of tree outputs`.
    pub fn score(&self, x: &[f32], prior: f64) -> Result<f64, ForestError> {
        if x.len() != self.descriptor_len {
            return Err(ForestError::LengthMismatch { got: x.len(), expected: self.descriptor_len });
        }
        Ok(self.score_unchecked(x, prior))
    }

    #[inline]
    pub(crate) fn score_unchecked(&self, x: &[f32], prior: f64) -> f64 {
        self.prior_weight * prior + self.trees.iter().map(|t| t.eval(x)).sum::<f64>()
    }
}

/// Row-major training matrix with ±1 labels and log-odds priors.
#[derive(Debug, Clone, Default)]
pub struct TrainingSet {
    pub dim: usize,
    pub features: Vec<f32>,
    pub labels: Vec<i8>,
    pub priors: Vec<f64>,
}

impl TrainingSet {
    pub fn new(dim: usize) -> Self {
        TrainingSet { dim, ..Default::default() }
    }

    pub fn push(&mut self, x: &[f32], label: i8, prior: f64) {
        debug_assert_eq!(x.len(), self.dim);
        debug_assert!(label == 1 || label == -1);
        self.features.extend_from_slice(x);
        self.labels.push(label);
        self.priors.push(prior);
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn row(&self, i: usize) -> &[f32] {
        &self.features[i * self.dim..(i + 1) * self.dim]
    }
}

/// Per-feature candidate thresholds and the byte-quantised column-major
/// matrix they induce. `bins[f * n + i]` counts thresholds `<= x[i][f]`.
pub struct BinnedFeatures {
    n: usize,
    thresholds: Vec<Vec<f32>>,
    bins: Vec<u8>,
}

fn midpoint(a: f32, b: f32) -> f32 {
    let m = ((a as f64 + b as f64) / 2.0) as f32;
    if m > a && m <= b {
        m
    } else {
        b
    }
}

fn feature_thresholds(column: &mut [f32]) -> Vec<f32> {
    column.sort_by(|a, b| a.total_cmp(b));
    let n = column.len();
    let mut uniq: Vec<f32> = Vec::new();
    for &v in column.iter() {
        if uniq.last() != Some(&v) {
            uniq.push(v);
        }
    }
    let mut out = Vec::new();
    if uniq.len() <= MAX_THRESHOLDS + 1 {
        for w in uniq.windows(2) {
            out.push(midpoint(w[0], w[1]));
        }
    } else {
        for k in 1..=MAX_THRESHOLDS {
            let idx = k * n / (MAX_THRESHOLDS + 1);
            let (a, b) = (column[idx - 1], column[idx]);
            if a < b {
                let t = midpoint(a, b);
                if out.last().is_none_or(|&l| t > l) {
                    out.push(t);
                }
            }
        }
    }
    out
}

impl BinnedFeatures {
    pub fn build(set: &TrainingSet) -> Self {
        let (n, dim) = (set.len(), set.dim);
        let per_feature: Vec<(Vec<f32>, Vec<u8>)> = (0..dim)
            .into_par_iter()
            .with_min_len(16)
            .map(|f| {
                let mut column: Vec<f32> = (0..n).map(|i| set.features[i * dim + f]).collect();
                let thr = feature_thresholds(&mut column);
                let bins = (0..n)
                    .map(|i| {
                        let x = set.features[i * dim + f];
                        thr.partition_point(|&t| t <= x) as u8
                    })
                    .collect();
                (thr, bins)
            })
            .collect();
        let mut thresholds = Vec::with_capacity(dim);
        let mut bins = Vec::with_capacity(n * dim);
        for (t, b) in per_feature {
            thresholds.push(t);
            bins.extend_from_slice(&b);
        }
        BinnedFeatures { n, thresholds, bins }
    }

    fn column(&self, f: usize) -> &[u8] {
        &self.bins[f * self.n..(f + 1) * self.n]
    }
}

#[derive(Debug, Clone, Copy)]
struct Split {
    z: f64,
    feature: usize,
    bin: usize,
}

fn best_split_for_feature(binned: &BinnedFeatures, f: usize, idx: &[u32], labels: &[i8], weights: &[f64]) -> Option<Split> {
    let nthr = binned.thresholds[f].len();
    if nthr == 0 {
        return None;
    }
    let col = binned.column(f);
    let mut wp = [0.0f64; 256];
    let mut wn = [0.0f64; 256];
    for &i in idx {
        let i = i as usize;
        let b = col[i] as usize;
        if labels[i] > 0 {
            wp[b] += weights[i];
        } else {
            wn[b] += weights[i];
        }
    }
    let tp: f64 = wp[..=nthr].iter().sum();
    let tn: f64 = wn[..=nthr].iter().sum();
    let (mut lp, mut ln) = (0.0, 0.0);
    let mut best: Option<Split> = None;
    for t in 0..nthr {
        lp += wp[t];
        ln += wn[t];
        let (rp, rn) = (tp - lp, tn - ln);
        if lp + ln <= 0.0 || rp + rn <= 0.0 {
            continue;
        }
        let z = (lp * ln).max(0.0).sqrt() + (rp * rn).max(0.0).sqrt();
        if best.is_none_or(|b| z < b.z) {
            best = Some(Split { z, feature: f, bin: t });
        }
    }
    best
}

struct TreeBuilder<'a> {
    binned: &'a BinnedFeatures,
    labels: &'a [i8],
    weights: &'a [f64],
    max_depth: usize,
    eps: f64,
    tree: Tree,
}

impl TreeBuilder<'_> {
    fn grow(&mut self, idx: &[u32], depth: usize) {
        let (mut wp, mut wn) = (0.0, 0.0);
        for &i in idx {
            let i = i as usize;
            if self.labels[i] > 0 {
                wp += self.weights[i];
            } else {
                wn += self.weights[i];
            }
        }
        let node = self.tree.feature.len();
        let split = if depth >= self.max_depth || wp <= 0.0 || wn <= 0.0 {
            None
        } else {
            let dim = self.binned.thresholds.len();
            (0..dim)
                .into_par_iter()
                .with_min_len(64)
                .map(|f| best_split_for_feature(self.binned, f, idx, self.labels, self.weights))
                .collect::<Vec<_>>()
                .into_iter()
                .flatten()
                .fold(None, |acc: Option<Split>, s| if acc.is_none_or(|a| s.z < a.z) { Some(s) } else { acc })
        };
        match split {
            None => {
                self.tree.feature.push(-1);
                self.tree.threshold.push(0.0);
                self.tree.right.push(0);
                self.tree.value.push(0.5 * ((wp + self.eps) / (wn + self.eps)).ln());
            }
            Some(s) => {
                let col = self.binned.column(s.feature);
                let (left, right): (Vec<u32>, Vec<u32>) = idx.iter().partition(|&&i| (col[i as usize] as usize) <= s.bin);
                self.tree.feature.push(s.feature as i32);
                self.tree.threshold.push(self.binned.thresholds[s.feature][s.bin]);
                self.tree.right.push(0);
                self.tree.value.push(0.0);
                self.grow(&left, depth + 1);
                self.tree.right[node] = self.tree.feature.len() as u32;
                self.grow(&right, depth + 1);
            }
        }
    }
}

/// Fits one tree on pre-binned features with the given sample weights.
pub fn train_tree_binned(binned: &BinnedFeatures, labels: &[i8], weights: &[f64], max_depth: usize, eps: f64) -> Tree {
    let idx: Vec<u32> = (0..binned.n as u32).collect();
    let mut b = TreeBuilder { binned, labels, weights, max_depth, eps, tree: Tree { feature: vec![], threshold: vec![], right: vec![], value: vec![] } };
    b.grow(&idx, 0);
    b.tree
}

/// Fits one tree on a weighted training set.
pub fn train_tree(set: &TrainingSet, weights: &[f64], max_depth: usize, eps: f64) -> Tree {
    train_tree_binned(&BinnedFeatures::build(set), &set.labels, weights, max_depth, eps)
}

/// Boosting parameters shared by every stage.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BoostParams {
    pub max_depth: usize,
    /// Leaf smoothing; `None` uses `1 / (2 N)`.
    pub leaf_smoothing: Option<f64>,
    pub prior_weight: f64,
}

impl Default for BoostParams {
    fn default() -> Self {
        BoostParams { max_depth: 5, leaf_smoothing: None, prior_weight: 1.0 }
    }
}

/// Per-round diagnostics of [`realboost_fit`].
#[derive(Debug, Clone, Default, PartialEq)]
pub struct BoostLog {
    /// Mean exponential loss before any tree, then after each round.
    pub losses: Vec<f64>,
    /// `|sum(w) - 1|` of the normalised weights used in each round.
    pub weight_sum_errors: Vec<f64>,
    pub clamped_margins: usize,
}

fn normalized_weights(set: &TrainingSet, margins: &[f64], clamped: &mut usize) -> Vec<f64> {
    let mut w: Vec<f64> = margins
        .iter()
        .zip(&set.labels)
        .map(|(&m, &y)| {
            if m.abs() > MARGIN_CLAMP {
                *clamped += 1;
            }
            (-(y as f64) * m.clamp(-MARGIN_CLAMP, MARGIN_CLAMP)).exp()
        })
        .collect();
    let s: f64 = w.iter().sum();
    w.iter_mut().for_each(|v| *v /= s);
    w
}

fn exp_loss(set: &TrainingSet, margins: &[f64]) -> f64 {
    margins.iter().zip(&set.labels).map(|(&m, &y)| (-(y as f64) * m.clamp(-MARGIN_CLAMP, MARGIN_CLAMP)).exp()).sum::<f64>() / margins.len() as f64
}

/// RealBoost for `rounds` trees. The prior enters as the round-zero margin,
/// so initial weights are proportional to `exp(-y * alpha * prior)`.
pub fn realboost_fit(set: &TrainingSet, rounds: usize, params: &BoostParams) -> Result<(Forest, BoostLog), ForestError> {
    if rounds == 0 {
        return Err(ForestError::Config("tree count must be at least 1".into()));
    }
    if set.is_empty() {
        return Err(ForestError::NoPositives);
    }
    let binned = BinnedFeatures::build(set);
    let n = set.len();
    let eps = params.leaf_smoothing.unwrap_or(1.0 / (2.0 * n as f64));
    let mut margins: Vec<f64> = set.priors.iter().map(|p| params.prior_weight * p).collect();
    let mut log = BoostLog { losses: vec![exp_loss(set, &margins)], ..Default::default() };
    let mut trees = Vec::with_capacity(rounds);
    for _ in 0..rounds {
        let w = normalized_weights(set, &margins, &mut log.clamped_margins);
        log.weight_sum_errors.push((w.iter().sum::<f64>() - 1.0).abs());
        let tree = train_tree_binned(&binned, &set.labels, &w, params.max_depth, eps);
        margins.par_iter_mut().enumerate().with_min_len(1024).for_each(|(i, m)| *m += tree.eval(set.row(i)));
        log.losses.push(exp_loss(set, &margins));
        trees.push(tree);
    }
    Ok((Forest { trees, prior_weight: params.prior_weight, descriptor_len: set.dim, stage_history: Vec::new() }, log))
}

/// Bootstrapping schedule and sample assignment.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    /// Forest size of each stage; non-decreasing.
    pub stage_tree_counts: Vec<usize>,
    pub initial_negatives: usize,
    pub hard_negatives_per_stage: usize,
    pub max_depth: usize,
    pub leaf_smoothing: Option<f64>,
    pub pos_iou: f64,
    pub neg_iou: f64,
    pub prior_weight: f64,
    pub seed: u64,
}

impl TrainConfig {
    /// Six stages, 64 to 2048 trees, 30k random then +5k mined negatives per stage.
    pub fn sam() -> Self {
        TrainConfig {
            stage_tree_counts: vec![64, 128, 256, 512, 1024, 2048],
            initial_negatives: 30_000,
            hard_negatives_per_stage: 5_000,
            ..TrainConfig::sam_basic()
        }
    }

    /// Five stages, 32 to 512 trees, 10k random then +1k mined negatives per stage.
    pub fn sam_basic() -> Self {
        TrainConfig {
            stage_tree_counts: vec![32, 64, 128, 256, 512],
            initial_negatives: 10_000,
            hard_negatives_per_stage: 1_000,
            max_depth: 5,
            leaf_smoothing: None,
            pos_iou: 0.5,
            neg_iou: 0.3,
            prior_weight: 1.0,
            seed: 0,
        }
    }

    pub fn validate(&self) -> Result<(), ForestError> {
        if self.stage_tree_counts.is_empty() || self.stage_tree_counts.contains(&0) {
            return Err(ForestError::Config("every stage needs at least one tree".into()));
        }
        if self.stage_tree_counts.windows(2).any(|w| w[1] < w[0]) {
            return Err(ForestError::Config("stage tree counts must be non-decreasing".into()));
        }
        if self.initial_negatives == 0 {
            return Err(ForestError::Config("initial negative count must be positive".into()));
        }
        if self.max_depth == 0 {
            return Err(ForestError::Config("tree depth must be at least 1".into()));
        }
        if !(0.0 <= self.neg_iou && self.neg_iou < self.pos_iou && self.pos_iou <= 1.0) {
            return Err(ForestError::Config(format!("need 0 <= neg_iou < pos_iou <= 1, got {} / {}", self.neg_iou, self.pos_iou)));
        }
        if !self.prior_weight.is_finite() || self.leaf_smoothing.is_some_and(|e| e.partial_cmp(&0.0) != Some(std::cmp::Ordering::Greater)) {
            return Err(ForestError::Config("prior weight must be finite and leaf smoothing positive".into()));
        }
        Ok(())
    }

    pub fn boost_params(&self) -> BoostParams {
        BoostParams { max_depth: self.max_depth, leaf_smoothing: self.leaf_smoothing, prior_weight: self.prior_weight }
    }
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig::sam_basic()
    }
}

/// A scored proposal available as a negative, with its descriptor.
#[derive(Debug, Clone, PartialEq)]
pub struct PoolEntry {
    pub image: usize,
    pub key: [u64; 4],
    /// Largest IoU with any ground-truth box of its image.
    pub max_iou: f64,
    pub prior: f64,
    pub descriptor: Vec<f32>,
}

/// Positives plus the pool negatives are drawn from.
#[derive(Debug, Clone, Default)]
pub struct BootstrapData {
    pub dim: usize,
    pub positives: Vec<(Vec<f32>, f64)>,
    pub pool: Vec<PoolEntry>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct MiningResult {
    /// Pool indices, highest score first.
    pub picked: Vec<usize>,
    /// Eligible, not yet selected entries before the cap.
    pub available: usize,
}

/// Global top-`k` pool entries by forest score among those with IoU below
/// `neg_iou` against every ground truth, skipping `(image, box)` identities
/// already in `selected`. Equal scores keep pool order.
pub fn mine_hard_negatives(
    forest: &Forest,
    pool: &[PoolEntry],
    k: usize,
    neg_iou: f64,
    selected: &HashSet<(usize, [u64; 4])>,
) -> Result<MiningResult, ForestError> {
    let eligible: Vec<usize> = (0..pool.len()).filter(|&i| pool[i].max_iou < neg_iou && !selected.contains(&(pool[i].image, pool[i].key))).collect();
    if let Some(&i) = eligible.first() {
        forest.score(&pool[i].descriptor, pool[i].prior)?;
    }
    let scores: Vec<f64> = eligible.par_iter().with_min_len(256).map(|&i| forest.score_unchecked(&pool[i].descriptor, pool[i].prior)).collect();
    let mut order: Vec<usize> = (0..eligible.len()).collect();
    order.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]));
    let mut seen = HashSet::new();
    let mut picked = Vec::new();
    for o in order {
        if picked.len() >= k {
            break;
        }
        let i = eligible[o];
        if seen.insert((pool[i].image, pool[i].key)) {
            picked.push(i);
        }
    }
    Ok(MiningResult { picked, available: eligible.len() })
}

/// Staged training: stage 0 uses every positive and a seeded random draw of
/// `initial_negatives` pool negatives; every later stage mines
/// `hard_negatives_per_stage` more with the previous stage's forest and
/// retrains from scratch at that stage's tree count.
pub fn bootstrap_train(data: &BootstrapData, cfg: &TrainConfig) -> Result<Forest, ForestError> {
    bootstrap_train_with_logs(data, cfg).map(|(f, _)| f)
}

/// [`bootstrap_train`] that also returns every stage's boosting log.
pub fn bootstrap_train_with_logs(data: &BootstrapData, cfg: &TrainConfig) -> Result<(Forest, Vec<BoostLog>), ForestError> {
    cfg.validate()?;
    if data.positives.is_empty() {
        return Err(ForestError::NoPositives);
    }
    for (x, _) in &data.positives {
        if x.len() != data.dim {
            return Err(ForestError::LengthMismatch { got: x.len(), expected: data.dim });
        }
    }
    let mut eligible: Vec<usize> = (0..data.pool.len()).filter(|&i| data.pool[i].max_iou < cfg.neg_iou).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    eligible.shuffle(&mut rng);
    let mut selected_keys: HashSet<(usize, [u64; 4])> = HashSet::new();
    let mut negatives: Vec<usize> = Vec::new();
    for i in eligible {
        if negatives.len() >= cfg.initial_negatives {
            break;
        }
        if selected_keys.insert((data.pool[i].image, data.pool[i].key)) {
            negatives.push(i);
        }
    }
    if negatives.is_empty() {
        return Err(ForestError::NoNegatives);
    }

    let params = cfg.boost_params();
    let mut history = Vec::new();
    let mut logs = Vec::new();
    let mut forest: Option<Forest> = None;
    for (stage, &trees) in cfg.stage_tree_counts.iter().enumerate() {
        let mut mined = 0;
        if let Some(prev) = &forest {
            let res = mine_hard_negatives(prev, &data.pool, cfg.hard_negatives_per_stage, cfg.neg_iou, &selected_keys)?;
            mined = res.picked.len();
            for i in res.picked {
                selected_keys.insert((data.pool[i].image, data.pool[i].key));
                negatives.push(i);
            }
        }
        let mut set = TrainingSet::new(data.dim);
        for (x, prior) in &data.positives {
            set.push(x, 1, *prior);
        }
        for &i in &negatives {
            let e = &data.pool[i];
            if e.descriptor.len() != data.dim {
                return Err(ForestError::LengthMismatch { got: e.descriptor.len(), expected: data.dim });
            }
            set.push(&e.descriptor, -1, e.prior);
        }
        let (mut f, log) = realboost_fit(&set, trees, &params)?;
        history.push(StageRecord {
            stage,
            trees,
            positives: data.positives.len(),
            negatives: negatives.len(),
            mined,
            final_loss: *log.losses.last().unwrap_or(&f64::NAN),
            clamped_margins: log.clamped_margins,
        });
        f.stage_history = history.clone();
        logs.push(log);
        forest = Some(f);
    }
    Ok((forest.expect("at least one stage"), logs))
}
