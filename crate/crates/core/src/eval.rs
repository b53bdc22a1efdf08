//! Caltech-style miss-rate evaluation and KITTI-style average precision.

use std::io::{Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{EvalError, Error};
use crate::geometry::{clip_to_eval_region, iou, order_by_score_desc, Detection, EvalRegion, GroundTruthBox};

/// Zero miss rates are clamped to this before taking logs.
pub const MISS_FLOOR: f64 = 1e-10;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct EvalProtocol {
    pub iou_threshold: f64,
    /// Smallest evaluated height (inclusive).
    pub height_min: f64,
    /// Largest evaluated height (exclusive); `None` is unbounded.
    pub height_max: Option<f64>,
    /// Boxes with occlusion at or above this are ignored.
    pub occlusion_max: f64,
    pub region: EvalRegion,
    pub num_points: usize,
}

impl Default for EvalProtocol {
    /// Caltech "reasonable": height >= 50, occlusion < 35%, centers in
    /// x in [5, 635], y in [5, 475].
    fn default() -> Self {
        EvalProtocol { iou_threshold: 0.5, height_min: 50.0, height_max: None, occlusion_max: 0.35, region: EvalRegion::CALTECH, num_points: 9 }
    }
}

impl EvalProtocol {
    pub fn validate(&self) -> Result<(), EvalError> {
        if !(0.0..=1.0).contains(&self.iou_threshold) || !(0.0..=1.0).contains(&self.occlusion_max) {
            return Err(EvalError::Protocol("thresholds must lie in [0, 1]".into()));
        }
        if self.num_points < 2 {
            return Err(EvalError::Protocol("need at least 2 reference points".into()));
        }
        if !self.region.is_well_ordered() {
            return Err(EvalError::Protocol("evaluation region bounds are not ordered".into()));
        }
        Ok(())
    }

    pub fn is_eligible(&self, g: &GroundTruthBox) -> bool {
        let h = g.bbox.h();
        !g.ignore
            && h >= self.height_min
            && self.height_max.is_none_or(|m| h < m)
            && g.occlusion() < self.occlusion_max
            && clip_to_eval_region(&g.bbox, &self.region)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum DetOutcome {
    TruePositive,
    FalsePositive,
    Ignored,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum GtOutcome {
    Matched,
    Missed,
    Ignored,
}

/// Per-image matching result. `dets` holds `(score, outcome)` in the
/// detections' input order; `gts` follows the ground-truth input order.
#[derive(Debug, Clone, PartialEq)]
pub struct ImageMatch {
    pub dets: Vec<(f64, DetOutcome)>,
    pub gts: Vec<GtOutcome>,
}

impl ImageMatch {
    pub fn eligible_gt(&self) -> usize {
        self.gts.iter().filter(|g| **g != GtOutcome::Ignored).count()
    }
}

fn match_with(dets: &[Detection], gts: &[GroundTruthBox], iou_threshold: f64, eligible: impl Fn(&GroundTruthBox) -> bool) -> ImageMatch {
    let ok: Vec<bool> = gts.iter().map(eligible).collect();
    let mut gt_out: Vec<GtOutcome> = ok.iter().map(|&e| if e { GtOutcome::Missed } else { GtOutcome::Ignored }).collect();
    let mut det_out = vec![DetOutcome::FalsePositive; dets.len()];
    let scores: Vec<f64> = dets.iter().map(|d| d.score()).collect();
    for di in order_by_score_desc(&scores) {
        let d = &dets[di].bbox;
        let mut best: Option<(usize, f64)> = None;
        let mut hits_ignore = false;
        for (gi, g) in gts.iter().enumerate() {
            let v = iou(d, &g.bbox);
            if v < iou_threshold {
                continue;
            }
            if !ok[gi] {
                hits_ignore = true;
            } else if gt_out[gi] == GtOutcome::Missed && best.is_none_or(|(_, b)| v > b) {
                best = Some((gi, v));
            }
        }
        det_out[di] = match best {
            Some((gi, _)) => {
                gt_out[gi] = GtOutcome::Matched;
                DetOutcome::TruePositive
            }
            None if hits_ignore => DetOutcome::Ignored,
            None => DetOutcome::FalsePositive,
        };
    }
    ImageMatch { dets: dets.iter().zip(det_out).map(|(d, o)| (d.score(), o)).collect(), gts: gt_out }
}

/// Greedy matching in descending score order.
///
/// Ground truths failing the protocol filter become ignore regions. Each
/// detection takes the highest-IoU unmatched eligible box at or above the
/// threshold; one that overlaps only ignore regions is neither TP nor FP.
pub fn match_image(dets: &[Detection], gts: &[GroundTruthBox], protocol: &EvalProtocol) -> ImageMatch {
    match_with(dets, gts, protocol.iou_threshold, |g| protocol.is_eligible(g))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MissRatePoint {
    pub threshold: f64,
    pub fppi: f64,
    pub miss_rate: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PrPoint {
    pub recall: f64,
    pub precision: f64,
}

/// Detection curve plus its summary.
#[derive(Debug, Clone, PartialEq)]
pub enum EvalCurve {
    MissRate { points: Vec<MissRatePoint>, log_average_miss_rate: f64 },
    PrecisionRecall { points: Vec<PrPoint>, average_precision: f64 },
}

/// Miss rate at every distinct score threshold, highest threshold first.
pub fn miss_rate_curve(matches: &[ImageMatch]) -> Result<Vec<MissRatePoint>, EvalError> {
    if matches.is_empty() {
        return Err(EvalError::NoImages);
    }
    let npos: usize = matches.iter().map(|m| m.eligible_gt()).sum();
    if npos == 0 {
        return Err(EvalError::NoEligibleGroundTruth);
    }
    let mut scored: Vec<(f64, bool)> = matches
        .iter()
        .flat_map(|m| m.dets.iter())
        .filter(|(_, o)| *o != DetOutcome::Ignored)
        .map(|&(s, o)| (s, o == DetOutcome::TruePositive))
        .collect();
    scored.sort_by(|a, b| b.0.total_cmp(&a.0));
    let nimg = matches.len() as f64;
    let (mut tp, mut fp) = (0usize, 0usize);
    let mut out = Vec::new();
    for (k, &(s, is_tp)) in scored.iter().enumerate() {
        if is_tp {
            tp += 1;
        } else {
            fp += 1;
        }
        if k + 1 == scored.len() || scored[k + 1].0 != s {
            out.push(MissRatePoint { threshold: s, fppi: fp as f64 / nimg, miss_rate: (npos - tp) as f64 / npos as f64 });
        }
    }
    Ok(out)
}

/// Reference FPPIs spaced log-uniformly over `[10^lo, 10^hi]`.
pub fn reference_points(lo_exp: f64, hi_exp: f64, n: usize) -> Vec<f64> {
    (0..n).map(|k| 10f64.powf(lo_exp + (hi_exp - lo_exp) * k as f64 / (n - 1) as f64)).collect()
}

#[derive(Debug, Clone, PartialEq)]
pub struct MissRateSummary {
    pub mr: f64,
    pub reference_fppi: Vec<f64>,
    pub sampled_miss: Vec<f64>,
    /// Reference points whose miss rate was clamped to [`MISS_FLOOR`].
    pub clamped: usize,
}

/// Log-average miss rate over `[10^lo_exp, 10^hi_exp]` from a curve.
///
/// Each reference FPPI takes the miss rate of the curve point with the
/// largest FPPI not exceeding it; when there is none the curve's highest miss
/// rate (1.0 for an empty curve) is used.
pub fn log_average_from_curve(curve: &[MissRatePoint], lo_exp: f64, hi_exp: f64, num_points: usize) -> MissRateSummary {
    let refs = reference_points(lo_exp, hi_exp, num_points);
    let worst = curve.iter().map(|p| p.miss_rate).fold(f64::NEG_INFINITY, f64::max);
    let worst = if curve.is_empty() { 1.0 } else { worst };
    let mut sampled = Vec::with_capacity(refs.len());
    for &r in &refs {
        // the curve is ordered by rising fppi; the last qualifying point has
        // the largest fppi and, among equal fppi, the lowest miss rate
        let m = curve.iter().rev().find(|p| p.fppi <= r).map(|p| p.miss_rate).unwrap_or(worst);
        sampled.push(m);
    }
    let clamped = sampled.iter().filter(|&&m| m < MISS_FLOOR).count();
    let mean_log = sampled.iter().map(|&m| m.max(MISS_FLOOR).ln()).sum::<f64>() / sampled.len() as f64;
    MissRateSummary { mr: mean_log.exp(), reference_fppi: refs, sampled_miss: sampled, clamped }
}

/// MR over FPPI in `[10^lo_exp, 10^0]`; `-2` gives MR-2, `-4` gives MR-4.
pub fn log_average_miss_rate(matches: &[ImageMatch], protocol: &EvalProtocol, lo_exp: f64) -> Result<MissRateSummary, EvalError> {
    protocol.validate()?;
    let curve = miss_rate_curve(matches)?;
    Ok(log_average_from_curve(&curve, lo_exp, 0.0, protocol.num_points))
}

/// KITTI-style difficulty level.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct KittiDifficulty {
    pub name: String,
    pub min_height: f64,
    /// Largest admitted occlusion level (see [`occlusion_level`]).
    pub max_occlusion: u8,
    pub max_truncation: f64,
}

impl KittiDifficulty {
    pub fn easy() -> Self {
        KittiDifficulty { name: "Easy".into(), min_height: 40.0, max_occlusion: 0, max_truncation: 0.15 }
    }

    pub fn moderate() -> Self {
        KittiDifficulty { name: "Moderate".into(), min_height: 25.0, max_occlusion: 1, max_truncation: 0.30 }
    }

    pub fn hard() -> Self {
        KittiDifficulty { name: "Hard".into(), min_height: 25.0, max_occlusion: 2, max_truncation: 0.50 }
    }

    pub fn all() -> [KittiDifficulty; 3] {
        [Self::easy(), Self::moderate(), Self::hard()]
    }

    pub fn is_eligible(&self, g: &GroundTruthBox) -> bool {
        !g.ignore && g.bbox.h() >= self.min_height && occlusion_level(g.occlusion()) <= self.max_occlusion && g.truncation() <= self.max_truncation
    }
}

/// Discrete occlusion level of a visible-fraction annotation:
/// 0 fully visible (< 10%), 1 partly occluded (< 50%), 2 largely occluded (< 80%), 3 beyond.
pub fn occlusion_level(fraction: f64) -> u8 {
    if fraction < 0.1 {
        0
    } else if fraction < 0.5 {
        1
    } else if fraction < 0.8 {
        2
    } else {
        3
    }
}

/// Interpolated AP sample positions.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ApInterpolation {
    /// Recalls 0, 0.1, ..., 1.0.
    #[default]
    Eleven,
    /// Recalls 1/40, 2/40, ..., 1.0.
    Forty,
}

/// Precision/recall after each detection in descending score order
/// (ignored detections skipped).
pub fn pr_curve(matches: &[ImageMatch]) -> Result<Vec<PrPoint>, EvalError> {
    let npos: usize = matches.iter().map(|m| m.eligible_gt()).sum();
    if npos == 0 {
        return Err(EvalError::NoEligibleGroundTruth);
    }
    let mut scored: Vec<(f64, bool)> = matches
        .iter()
        .flat_map(|m| m.dets.iter())
        .filter(|(_, o)| *o != DetOutcome::Ignored)
        .map(|&(s, o)| (s, o == DetOutcome::TruePositive))
        .collect();
    scored.sort_by(|a, b| b.0.total_cmp(&a.0));
    let mut tp = 0usize;
    Ok(scored
        .iter()
        .enumerate()
        .map(|(k, &(_, t))| {
            tp += t as usize;
            PrPoint { recall: tp as f64 / npos as f64, precision: tp as f64 / (k + 1) as f64 }
        })
        .collect())
}

/// Mean over sample recalls of the best precision at any recall at or above it.
pub fn interpolated_ap(curve: &[PrPoint], interp: ApInterpolation) -> f64 {
    let samples: Vec<f64> = match interp {
        ApInterpolation::Eleven => (0..=10).map(|k| k as f64 / 10.0).collect(),
        ApInterpolation::Forty => (1..=40).map(|k| k as f64 / 40.0).collect(),
    };
    let total: f64 = samples
        .iter()
        .map(|&r| curve.iter().filter(|p| p.recall >= r - 1e-12).map(|p| p.precision).fold(0.0, f64::max))
        .sum();
    total / samples.len() as f64
}

/// Per-image detections and annotations for the AP routine.
pub fn average_precision(
    images: &[(&[Detection], &[GroundTruthBox])],
    difficulty: &KittiDifficulty,
    iou_threshold: f64,
    interp: ApInterpolation,
) -> Result<(f64, Vec<PrPoint>), EvalError> {
    let matches: Vec<ImageMatch> = images.iter().map(|(d, g)| match_with(d, g, iou_threshold, |x| difficulty.is_eligible(x))).collect();
    let curve = pr_curve(&matches)?;
    Ok((interpolated_ap(&curve, interp), curve))
}

/// Metrics summary written by the evaluation command.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsSummary {
    pub mr2: Option<f64>,
    pub mr4: Option<f64>,
    pub ap_easy: Option<f64>,
    pub ap_moderate: Option<f64>,
    pub ap_hard: Option<f64>,
    pub counts: EvalCounts,
}

#[derive(Debug, Clone, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct EvalCounts {
    pub images: usize,
    pub detections: usize,
    pub eligible_gt: usize,
    pub ignored_gt: usize,
    pub true_positives: usize,
    pub false_positives: usize,
    pub ignored_detections: usize,
    pub easy_gt: usize,
    pub moderate_gt: usize,
    pub hard_gt: usize,
}

/// All curves and summaries for one detection set.
#[derive(Debug, Clone)]
pub struct EvalReport {
    pub summary: MetricsSummary,
    pub miss_rate_curve: Vec<MissRatePoint>,
    pub pr_curve: Vec<PrPoint>,
}

/// Evaluates detections against annotations, image by image (same order).
pub fn evaluate(images: &[(&[Detection], &[GroundTruthBox])], protocol: &EvalProtocol, interp: ApInterpolation) -> Result<EvalReport, EvalError> {
    protocol.validate()?;
    if images.is_empty() {
        return Err(EvalError::NoImages);
    }
    let matches: Vec<ImageMatch> = images.iter().map(|(d, g)| match_image(d, g, protocol)).collect();
    let mut counts = EvalCounts { images: images.len(), ..Default::default() };
    for m in &matches {
        counts.detections += m.dets.len();
        for (_, o) in &m.dets {
            match o {
                DetOutcome::TruePositive => counts.true_positives += 1,
                DetOutcome::FalsePositive => counts.false_positives += 1,
                DetOutcome::Ignored => counts.ignored_detections += 1,
            }
        }
        counts.eligible_gt += m.eligible_gt();
        counts.ignored_gt += m.gts.len() - m.eligible_gt();
    }
    let [easy, moderate, hard] = KittiDifficulty::all();
    for (_, g) in images {
        counts.easy_gt += g.iter().filter(|x| easy.is_eligible(x)).count();
        counts.moderate_gt += g.iter().filter(|x| moderate.is_eligible(x)).count();
        counts.hard_gt += g.iter().filter(|x| hard.is_eligible(x)).count();
    }
    let (curve, mr2, mr4) = match miss_rate_curve(&matches) {
        Ok(c) => {
            let mr2 = log_average_from_curve(&c, -2.0, 0.0, protocol.num_points).mr;
            let mr4 = log_average_from_curve(&c, -4.0, 0.0, protocol.num_points).mr;
            (c, Some(mr2), Some(mr4))
        }
        Err(EvalError::NoEligibleGroundTruth) => (Vec::new(), None, None),
        Err(e) => return Err(e),
    };
    let ap = |d: &KittiDifficulty| -> Result<Option<f64>, EvalError> {
        match average_precision(images, d, protocol.iou_threshold, interp) {
            Ok((v, _)) => Ok(Some(v)),
            Err(EvalError::NoEligibleGroundTruth) => Ok(None),
            Err(e) => Err(e),
        }
    };
    let pr = pr_curve(&matches).unwrap_or_default();
    Ok(EvalReport {
        summary: MetricsSummary { mr2, mr4, ap_easy: ap(&easy)?, ap_moderate: ap(&moderate)?, ap_hard: ap(&hard)?, counts },
        miss_rate_curve: curve,
        pr_curve: pr,
    })
}

pub const MISS_RATE_HEADER: [&str; 3] = ["threshold", "fppi", "miss_rate"];
pub const PR_HEADER: [&str; 2] = ["recall", "precision"];

/// Writes a curve as CSV with a `threshold,fppi,miss_rate` or
/// `recall,precision` header.
pub fn emit_curve_to<W: Write>(curve: &EvalCurve, w: W) -> Result<(), Error> {
    let mut wr = csv::Writer::from_writer(w);
    match curve {
        EvalCurve::MissRate { points, .. } => {
            wr.write_record(MISS_RATE_HEADER)?;
            for p in points {
                wr.write_record([p.threshold.to_string(), p.fppi.to_string(), p.miss_rate.to_string()])?;
            }
        }
        EvalCurve::PrecisionRecall { points, .. } => {
            wr.write_record(PR_HEADER)?;
            for p in points {
                wr.write_record([p.recall.to_string(), p.precision.to_string()])?;
            }
        }
    }
    wr.flush()?;
    Ok(())
}

pub fn emit_curve(curve: &EvalCurve, path: impl AsRef<Path>) -> Result<(), Error> {
    emit_curve_to(curve, std::fs::File::create(path)?)
}

/// Parsed curve CSV: points only, summaries are not stored in the file.
#[derive(Debug, Clone, PartialEq)]
pub enum CurveData {
    MissRate(Vec<MissRatePoint>),
    PrecisionRecall(Vec<PrPoint>),
}

pub fn read_curve_from<R: Read>(r: R) -> Result<CurveData, Error> {
    let mut rd = csv::Reader::from_reader(r);
    let header: Vec<String> = rd.headers()?.iter().map(|s| s.trim().to_string()).collect();
    let parse = |s: &str| s.trim().parse::<f64>().map_err(|e| Error::Config(format!("bad number {s:?} in curve: {e}")));
    if header == MISS_RATE_HEADER {
        let mut pts = Vec::new();
        for rec in rd.records() {
            let rec = rec?;
            pts.push(MissRatePoint { threshold: parse(&rec[0])?, fppi: parse(&rec[1])?, miss_rate: parse(&rec[2])? });
        }
        Ok(CurveData::MissRate(pts))
    } else if header == PR_HEADER {
        let mut pts = Vec::new();
        for rec in rd.records() {
            let rec = rec?;
            pts.push(PrPoint { recall: parse(&rec[0])?, precision: parse(&rec[1])? });
        }
        Ok(CurveData::PrecisionRecall(pts))
    } else {
        Err(Error::Config(format!("unrecognised curve header {header:?}")))
    }
}

pub fn read_curve(path: impl AsRef<Path>) -> Result<CurveData, Error> {
    read_curve_from(std::fs::File::open(path)?)
}
