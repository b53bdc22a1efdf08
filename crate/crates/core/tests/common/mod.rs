//! Brute-force oracles and fixtures shared by the integration and
//! acceptance tests.
#![allow(dead_code)]

use std::path::PathBuf;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use samhead_core::dataset::{read_annotations, read_detections};
use samhead_core::eval::{DetOutcome, EvalProtocol, GtOutcome, ImageMatch};
use samhead_core::maps::{EdgeMap, FeatureMap, LabelMap, NUM_LABEL_BINS};
use samhead_core::pooling::{map_to_feature_coords, roi_edge_pool, roi_histogram_pool, roi_max_pool, EdgePoolMode, HistNorm, PoolGrid};
use samhead_core::{iou, BBox, Detection, GroundTruthBox};

// ---------------------------------------------------------------- pooling

/// Source cells of grid part `k`, written as integer inequalities on the
/// relative offset `t`: `floor(k E / p) <= t < floor((k + 1) E / p)`, with the
/// leading cell alone when that window is empty.
fn part_members(extent: usize, parts: usize, k: usize) -> Vec<usize> {
    let mut out: Vec<usize> = (0..extent).filter(|&t| k * extent < (t + 1) * parts && (t + 1) * parts <= (k + 1) * extent).collect();
    if out.is_empty() {
        out.push((0..extent).find(|&t| k * extent < (t + 1) * parts).expect("k < parts"));
    }
    out
}

/// Feature columns whose stride-wide pixel span meets the open box interval.
fn covered(start: f64, extent: f64, stride: u32, limit: usize) -> Vec<usize> {
    let s = stride as f64;
    (0..limit).filter(|&k| (k as f64 + 1.0) * s > start && (k as f64) * s < start + extent).collect()
}

#[derive(Debug, Default)]
pub struct PoolingCheck {
    pub instances: usize,
    pub max_mismatches: usize,
    pub rect_mismatches: usize,
    pub hist_max_err: f64,
    pub edge_hist_max_err: f64,
    pub cell_sum_max_err: f64,
}

impl PoolingCheck {
    pub fn passed(&self) -> bool {
        self.max_mismatches == 0 && self.rect_mismatches == 0 && self.hist_max_err <= 1e-12 && self.edge_hist_max_err <= 1e-12 && self.cell_sum_max_err <= 2e-6
    }
}

/// Compares every pooling kernel against the brute-force definitions on
/// `instances` random (map, box, grid) triples.
pub fn check_pooling(instances: usize, seed: u64) -> PoolingCheck {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut res = PoolingCheck { instances, ..Default::default() };
    for _ in 0..instances {
        let stride = [1u32, 2, 4, 8, 16][rng.random_range(0..5)];
        let (h, w) = (rng.random_range(1..40usize), rng.random_range(1..40usize));
        let channels = rng.random_range(1..4usize);
        let data: Vec<f32> = (0..channels * h * w).map(|_| if rng.random_bool(0.1) { 0.5 } else { rng.random_range(-3.0..3.0f32) }).collect();
        let fmap = FeatureMap::new("conv", stride, channels, h, w, data).unwrap();
        let img_w = (w as u32 * stride) as f64;
        let img_h = (h as u32 * stride) as f64;
        let bw = rng.random_range(0.5..img_w.max(1.0) + 4.0);
        let bh = rng.random_range(0.5..img_h.max(1.0) + 4.0);
        let bx = rng.random_range(-bw * 0.5..img_w - 0.1);
        let by = rng.random_range(-bh * 0.5..img_h - 0.1);
        let b = BBox::new(bx, by, bw, bh).unwrap();
        let grid = PoolGrid::new(rng.random_range(1..8), rng.random_range(1..6)).unwrap();

        let rows = covered(b.y(), b.h(), stride, h);
        let cols = covered(b.x(), b.w(), stride, w);
        let Ok(rect) = map_to_feature_coords(&b, stride, h, w) else {
            if !rows.is_empty() && !cols.is_empty() {
                res.rect_mismatches += 1;
            }
            continue;
        };
        // a sliver narrower than one cell still covers the cell it starts in
        let exp_rows = if rows.is_empty() { vec![rect.row_start] } else { rows };
        let exp_cols = if cols.is_empty() { vec![rect.col_start] } else { cols };
        if (rect.row_start..rect.row_end).collect::<Vec<_>>() != exp_rows || (rect.col_start..rect.col_end).collect::<Vec<_>>() != exp_cols {
            res.rect_mismatches += 1;
        }

        let row_parts: Vec<Vec<usize>> = (0..grid.m).map(|i| part_members(rect.rows(), grid.m, i).iter().map(|t| rect.row_start + t).collect()).collect();
        let col_parts: Vec<Vec<usize>> = (0..grid.n).map(|j| part_members(rect.cols(), grid.n, j).iter().map(|t| rect.col_start + t).collect()).collect();

        let got = roi_max_pool(&fmap, &rect, grid).unwrap();
        for c in 0..channels {
            for i in 0..grid.m {
                for j in 0..grid.n {
                    let mut best = f32::NEG_INFINITY;
                    for &r in &row_parts[i] {
                        for &q in &col_parts[j] {
                            best = best.max(fmap.get(c, r, q));
                        }
                    }
                    if got[(c * grid.m + i) * grid.n + j].to_bits() != best.to_bits() {
                        res.max_mismatches += 1;
                    }
                }
            }
        }

        let labels = LabelMap::new(h, w, (0..h * w).map(|_| rng.random_range(0..NUM_LABEL_BINS as u8)).collect()).unwrap();
        let bins = rng.random_range(2..20usize);
        let edges = EdgeMap::new(h, w, (0..h * w).map(|_| if rng.random_bool(0.05) { 1.0 } else { rng.random_range(0.0..1.0f32) }).collect()).unwrap();
        let hist = roi_histogram_pool(&labels, &rect, grid, HistNorm::CellMass).unwrap();
        let ehist = roi_edge_pool(&edges, &rect, grid, EdgePoolMode::Hist { bins }).unwrap();
        for (i, rows) in row_parts.iter().enumerate() {
            for (j, cols) in col_parts.iter().enumerate() {
                let cell = i * grid.n + j;
                let mass = (rows.len() * cols.len()) as f64;
                let mut counts = vec![0usize; NUM_LABEL_BINS];
                let mut ecounts = vec![0usize; bins];
                for &r in rows {
                    for &q in cols {
                        counts[labels.get(r, q) as usize] += 1;
                        let v = edges.get(r, q) as f64;
                        let k = (0..bins).rev().find(|&k| v * bins as f64 >= k as f64).unwrap();
                        ecounts[k] += 1;
                    }
                }
                let got_cell = &hist[cell * NUM_LABEL_BINS..(cell + 1) * NUM_LABEL_BINS];
                for (g, &k) in got_cell.iter().zip(&counts) {
                    res.hist_max_err = res.hist_max_err.max((*g as f64 - (k as f64 / mass) as f32 as f64).abs());
                }
                res.cell_sum_max_err = res.cell_sum_max_err.max((got_cell.iter().map(|&v| v as f64).sum::<f64>() - 1.0).abs());
                let got_e = &ehist[cell * bins..(cell + 1) * bins];
                for (g, &k) in got_e.iter().zip(&ecounts) {
                    res.edge_hist_max_err = res.edge_hist_max_err.max((*g as f64 - (k as f64 / mass) as f32 as f64).abs());
                }
                res.cell_sum_max_err = res.cell_sum_max_err.max((got_e.iter().map(|&v| v as f64).sum::<f64>() - 1.0).abs());
            }
        }
    }
    res
}

// ---------------------------------------------------------------- matching

/// Enumerates every injective assignment of detections to eligible ground
/// truth above the threshold and keeps the one whose IoU sequence, taken in
/// descending score order, is lexicographically largest.
pub fn exhaustive_match(dets: &[Detection], gts: &[GroundTruthBox], p: &EvalProtocol) -> ImageMatch {
    let mut order: Vec<usize> = (0..dets.len()).collect();
    order.sort_by(|&a, &b| dets[b].score().total_cmp(&dets[a].score()).then(a.cmp(&b)));
    let elig: Vec<bool> = gts.iter().map(|g| p.is_eligible(g)).collect();
    let mut best: Option<(Vec<f64>, Vec<Option<usize>>)> = None;
    let mut stack: Vec<(usize, Vec<Option<usize>>, Vec<bool>)> = vec![(0, Vec::new(), vec![false; gts.len()])];
    while let Some((k, cur, used)) = stack.pop() {
        if k == order.len() {
            let key: Vec<f64> = cur.iter().enumerate().map(|(j, a)| a.map_or(-1.0, |g| iou(&dets[order[j]].bbox, &gts[g].bbox))).collect();
            if best.as_ref().is_none_or(|(b, _)| key.partial_cmp(b) == Some(std::cmp::Ordering::Greater)) {
                best = Some((key, cur));
            }
            continue;
        }
        let mut skip = cur.clone();
        skip.push(None);
        stack.push((k + 1, skip, used.clone()));
        for g in 0..gts.len() {
            if elig[g] && !used[g] && iou(&dets[order[k]].bbox, &gts[g].bbox) >= p.iou_threshold {
                let mut next = cur.clone();
                next.push(Some(g));
                let mut u = used.clone();
                u[g] = true;
                stack.push((k + 1, next, u));
            }
        }
    }
    let (_, assign) = best.expect("at least the empty assignment");
    let mut det_out = vec![DetOutcome::FalsePositive; dets.len()];
    let mut gt_out: Vec<GtOutcome> = elig.iter().map(|&e| if e { GtOutcome::Missed } else { GtOutcome::Ignored }).collect();
    for (j, a) in assign.iter().enumerate() {
        let di = order[j];
        match a {
            Some(g) => {
                det_out[di] = DetOutcome::TruePositive;
                gt_out[*g] = GtOutcome::Matched;
            }
            None => {
                if gts.iter().enumerate().any(|(g, b)| !elig[g] && iou(&dets[di].bbox, &b.bbox) >= p.iou_threshold) {
                    det_out[di] = DetOutcome::Ignored;
                }
            }
        }
    }
    ImageMatch { dets: dets.iter().zip(det_out).map(|(d, o)| (d.score(), o)).collect(), gts: gt_out }
}

/// Up to `max_boxes` ground-truth and detection boxes, most detections
/// perturbed copies of ground truth, some annotations ignored or occluded.
pub fn random_matching_instance(rng: &mut ChaCha8Rng, max_boxes: usize) -> (Vec<Detection>, Vec<GroundTruthBox>) {
    let ng = rng.random_range(0..=max_boxes);
    let gts: Vec<GroundTruthBox> = (0..ng)
        .map(|_| {
            let h = rng.random_range(30.0..120.0);
            let occ = if rng.random_bool(0.2) { 0.5 } else { 0.0 };
            GroundTruthBox::new(BBox::new(rng.random_range(5.0..100.0), rng.random_range(5.0..100.0), 0.41 * h, h).unwrap(), occ, 0.0, rng.random_bool(0.1)).unwrap()
        })
        .collect();
    let nd = rng.random_range(0..=max_boxes);
    let dets = (0..nd)
        .map(|_| {
            let b = if !gts.is_empty() && rng.random_bool(0.75) {
                let g = gts[rng.random_range(0..gts.len())].bbox;
                BBox::new(g.x() + rng.random_range(-6.0..6.0), g.y() + rng.random_range(-10.0..10.0), g.w() * rng.random_range(0.85..1.15), g.h() * rng.random_range(0.85..1.15)).unwrap()
            } else {
                let h = rng.random_range(30.0..120.0);
                BBox::new(rng.random_range(5.0..100.0), rng.random_range(5.0..100.0), 0.41 * h, h).unwrap()
            };
            // coarse scores so ties occur
            Detection::new(b, (rng.random_range(0..8) as f64) / 8.0).unwrap()
        })
        .collect();
    (dets, gts)
}

pub fn matching_protocol() -> EvalProtocol {
    EvalProtocol { region: samhead_core::EvalRegion { xmin: 0.0, xmax: 250.0, ymin: 0.0, ymax: 300.0 }, ..EvalProtocol::default() }
}

// ---------------------------------------------------------------- fixtures

pub fn fixture_dir() -> PathBuf {
    PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("../core/tests/fixtures/three_images")
}

/// The 3-image fixture as (detections, annotations) in annotation order.
pub fn load_fixture() -> Vec<(String, Vec<Detection>, Vec<GroundTruthBox>)> {
    let dir = fixture_dir();
    let mut dets = read_detections(dir.join("detections.csv")).unwrap();
    read_annotations(dir.join("annotations.jsonl")).unwrap().into_iter().map(|(id, g)| (id.clone(), dets.remove(&id).unwrap_or_default(), g)).collect()
}

/// Hand-worked log-average miss rate of the fixture.
///
/// Eligible: a/1, a/2, b/1 (c's boxes are too short or too occluded, and the
/// detections on them are ignored). In score order the counted detections
/// are TP 0.9, FP 0.8, TP 0.7, FP 0.6 over 3 images, giving curve points
/// (fppi, miss) = (0, 2/3), (1/3, 2/3), (1/3, 1/3), (2/3, 1/3).
/// References below 1/3 read 2/3; 10^-0.25 and 1 read 1/3.
/// MR-2 has seven references below 1/3, MR-4 has eight.
pub fn fixture_mr(lo_exp: i32) -> f64 {
    let below = match lo_exp {
        -2 => 7,
        -4 => 8,
        _ => panic!("fixture worked for MR-2 and MR-4 only"),
    };
    let sampled: Vec<f64> = (0..9).map(|k| if k < below { 2.0 / 3.0 } else { 1.0 / 3.0 }).collect();
    (sampled.iter().map(|m: &f64| m.ln()).sum::<f64>() / 9.0).exp()
}

/// Five detections against three annotations: TP, FP, TP, FP, TP.
/// Precision/recall: (1/3, 1), (1/3, 1/2), (2/3, 2/3), (2/3, 1/2), (1, 3/5).
/// 11-point AP: recalls 0..0.3 read 1, 0.4..0.6 read 2/3, 0.7..1.0 read 3/5,
/// so AP = (4 + 3 * 2/3 + 4 * 3/5) / 11 = 8.4 / 11.
pub fn ap_fixture() -> (Vec<Detection>, Vec<GroundTruthBox>, f64) {
    let g = |x: f64| GroundTruthBox::visible(BBox::new(x, 20.0, 30.0, 60.0).unwrap());
    let gts = vec![g(10.0), g(100.0), g(200.0)];
    let d = |x: f64, s: f64| Detection::new(BBox::new(x, 20.0, 30.0, 60.0).unwrap(), s).unwrap();
    let dets = vec![d(10.0, 0.9), d(300.0, 0.8), d(100.0, 0.7), d(400.0, 0.6), d(200.0, 0.5)];
    (dets, gts, 8.4 / 11.0)
}
