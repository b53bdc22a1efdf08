//! Acceptance checks, one PASS/FAIL line per criterion.
//!
//! Runs as a plain binary so the lines show up in `cargo test` output.
//! `SAMHEAD_ACCEPT=1,4,7` restricts the run to the listed criteria.

#[path = "../../core/tests/common/mod.rs"]
mod common;

use std::fs;
use std::path::Path;
use std::process::Command;
use std::time::{Duration, Instant};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use samhead_core::eval::{average_precision, evaluate, match_image, ApInterpolation, KittiDifficulty};
use samhead_core::forest::{realboost_fit, BoostParams, TrainingSet};
use samhead_core::pca::{pca_fit, PcaProjector};
use samhead_core::pipeline::{ablation_sweep, train_and_score, train_detector, PcaConfig, ScaleSubset};
use samhead_core::pooling::{EdgePoolMode, HistNorm, PoolGrid};
use samhead_core::synth::{synth_generate, LayerSpec, SynthConfig};
use samhead_core::{ChannelConfig, Dataset, DetectorConfig, Detection, EvalProtocol, EvalRegion, GroundTruthBox, PcaTarget, RoutingTable, SemanticPooling, TrainConfig};

struct Outcome {
    pass: bool,
    detail: String,
}

fn outcome(pass: bool, detail: impl Into<String>) -> Outcome {
    Outcome { pass, detail: detail.into() }
}

// ---------------------------------------------------------------- shared data

/// Mixed-scale desk set: three layers, strides 4, 4 and 8.
fn mixed_scale_set(n: usize, seed: u64, semantic: bool, prefix: &str) -> Dataset {
    let cfg = SynthConfig {
        num_images: n,
        jitter: 0.05,
        layers: vec![LayerSpec::new("conv3", 4, 8, 0.6), LayerSpec::new("conv4a", 4, 8, 0.6), LayerSpec::new("conv5a", 8, 8, 2.0)],
        noise: 1.0,
        semantic,
        edges: semantic,
        id_prefix: prefix.into(),
        ..SynthConfig::desk()
    };
    synth_generate(&cfg, seed).expect("synthetic set")
}

fn desk_protocol() -> EvalProtocol {
    EvalProtocol { region: EvalRegion::inset(320.0, 240.0, 5.0), ..EvalProtocol::default() }
}

fn desk_detector(channels: ChannelConfig) -> DetectorConfig {
    let mut routing = RoutingTable::scale_aware(16);
    routing.grid = PoolGrid::new(6, 3).unwrap();
    DetectorConfig {
        routing,
        channels,
        train: TrainConfig { stage_tree_counts: vec![16, 32, 64, 128], initial_negatives: 3000, hard_negatives_per_stage: 500, max_depth: 3, ..TrainConfig::sam_basic() },
        ..DetectorConfig::default()
    }
}

fn max_orthonormality_error(p: &PcaProjector) -> f64 {
    let mut worst = 0.0f64;
    for a in 0..p.output_dim {
        for b in a..p.output_dim {
            let dot: f64 = p.row(a).iter().zip(p.row(b)).map(|(x, y)| x * y).sum();
            worst = worst.max((dot - if a == b { 1.0 } else { 0.0 }).abs());
        }
    }
    worst
}

// ---------------------------------------------------------------- criteria

fn pooling_oracles() -> Outcome {
    let r = common::check_pooling(1000, 2024);
    outcome(
        r.passed(),
        format!(
            "{} instances, max mismatches {}, rect mismatches {}, hist err {:.1e}, edge hist err {:.1e}, worst cell sum err {:.1e}",
            r.instances, r.max_mismatches, r.rect_mismatches, r.hist_max_err, r.edge_hist_max_err, r.cell_sum_max_err
        ),
    )
}

fn semantic_hist_vs_max() -> Outcome {
    let train = mixed_scale_set(150, 1, true, "tr");
    let test = mixed_scale_set(600, 1001, true, "te");
    let edge = Some(EdgePoolMode::Hist { bins: 16 });
    let run = |semantic: SemanticPooling| {
        let cfg = desk_detector(ChannelConfig { semantic: Some(semantic), edge });
        train_and_score(&train, &test, &cfg, &desk_protocol(), 5).map(|(mr, _, _)| mr)
    };
    match (run(SemanticPooling::Hist { norm: HistNorm::CellMass }), run(SemanticPooling::Max)) {
        (Ok(h), Ok(m)) => outcome(h <= m, format!("MR-4 hist {:.4} vs max {:.4}", h, m)),
        (a, b) => outcome(false, format!("training failed: {:?} / {:?}", a.err(), b.err())),
    }
}

fn large_bin_set(n: usize, seed: u64, prefix: &str) -> Dataset {
    let layer = |name: &str, stride, amp| LayerSpec { informative: Some(4), ..LayerSpec::new(name, stride, 512, amp) };
    let cfg = SynthConfig {
        num_images: n,
        image_w: 112,
        image_h: 136,
        small_per_image: 0,
        large_per_image: 2,
        large_heights: [80.0, 120.0],
        distractors_per_image: 1,
        proposals_per_image: 40,
        layers: vec![layer("conv4a", 4, 0.6), layer("conv5a", 8, 2.0)],
        noise: 1.0,
        semantic: false,
        edges: false,
        jitter: 0.05,
        id_prefix: prefix.into(),
        ..SynthConfig::desk()
    };
    synth_generate(&cfg, seed).expect("synthetic set")
}

fn pca_checks() -> Outcome {
    let mut notes = Vec::new();
    let mut pass = true;

    // basis, energy and rank-one recovery on small random data
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let samples: Vec<Vec<f32>> = (0..400).map(|_| (0..24).map(|k| rng.random_range(-1.0..1.0f32) * (1.0 + k as f32 * 0.3)).collect()).collect();
    let full = pca_fit(&samples, PcaTarget::Dim(24)).unwrap().projector;
    let ortho_small = max_orthonormality_error(&full);
    let energies: Vec<f64> = (1..=24).map(|d| pca_fit(&samples, PcaTarget::Dim(d)).unwrap().projector.energy).collect();
    let monotone = energies.windows(2).all(|w| w[1] >= w[0] - 1e-12);
    let dir: Vec<f64> = (0..10).map(|k| (k as f64 - 4.5) / 10.0).collect();
    let line: Vec<Vec<f32>> = (0..50).map(|i| dir.iter().enumerate().map(|(k, d)| (2.0 + k as f64 + (i as f64 - 25.0) * 0.25 * d) as f32).collect()).collect();
    let p1 = pca_fit(&line, PcaTarget::Dim(1)).unwrap().projector;
    let rank1_err = line
        .iter()
        .map(|x| {
            let xd: Vec<f64> = x.iter().map(|&v| v as f64).collect();
            p1.reconstruct(&p1.project(&xd).unwrap()).iter().zip(&xd).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max)
        })
        .fold(0.0, f64::max);
    pass &= ortho_small < 1e-6 && monotone && rank1_err < 1e-5;
    notes.push(format!("orthonormality {ortho_small:.1e}, energy monotone {monotone}, rank-1 err {rank1_err:.1e}"));

    // 1024 -> 768 per cell on large-bin features, averaged over three seeds
    let protocol = EvalProtocol { region: EvalRegion::inset(112.0, 136.0, 5.0), ..EvalProtocol::default() };
    let detector = |d: usize| {
        let mut routing = RoutingTable::single(vec!["conv4a".into(), "conv5a".into()], d);
        routing.grid = PoolGrid::new(3, 2).unwrap();
        DetectorConfig {
            routing,
            pca: PcaConfig { enabled: true, max_samples: 6000, rotate_square: false },
            train: TrainConfig { stage_tree_counts: vec![16, 32, 64], initial_negatives: 1000, hard_negatives_per_stage: 200, max_depth: 2, ..TrainConfig::sam_basic() },
            ..DetectorConfig::default()
        }
    };
    let (mut reduced, mut full_dim) = (Vec::new(), Vec::new());
    let mut ortho_learned = 0.0f64;
    for seed in 1..=3u64 {
        let train = large_bin_set(80, seed, "tr");
        let test = large_bin_set(300, seed + 1000, "te");
        let r = train_and_score(&train, &test, &detector(768), &protocol, 3);
        let f = train_and_score(&train, &test, &detector(1024), &protocol, 3);
        match (r, f) {
            (Ok((mr, model, _)), Ok((mf, _, _))) => {
                ortho_learned = ortho_learned.max(max_orthonormality_error(&model.projectors[0]));
                reduced.push(mr);
                full_dim.push(mf);
            }
            (a, b) => return outcome(false, format!("training failed: {:?} / {:?}", a.err(), b.err())),
        }
    }
    let mean = |v: &[f64]| v.iter().sum::<f64>() / v.len() as f64;
    let delta = mean(&reduced) - mean(&full_dim);
    pass &= ortho_learned < 1e-6 && delta.abs() < 0.01;
    notes.push(format!(
        "learned 768x1024 basis orthonormality {ortho_learned:.1e}; MR-4 reduced {reduced:.4?} vs unreduced {full_dim:.4?}, mean change {:+.2} points",
        100.0 * delta
    ));
    outcome(pass, notes.join("; "))
}

fn realboost_separable() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let mut set = TrainingSet::new(2);
    for _ in 0..400 {
        let y: i8 = if rng.random_bool(0.5) { 1 } else { -1 };
        let cx = if y == 1 { 2.0 } else { -2.0 };
        set.push(&[cx + rng.random_range(-1.0..1.0f32), rng.random_range(-1.0..1.0f32)], y, 0.0);
    }
    let (_, log) = realboost_fit(&set, 64, &BoostParams { max_depth: 2, ..BoostParams::default() }).unwrap();
    let last = *log.losses.last().unwrap();
    let wmax = log.weight_sum_errors.iter().cloned().fold(0.0, f64::max);
    // relative slack for rounding once the loss is far below one
    let rise = log.losses.windows(2).map(|w| (w[1] - w[0]) / w[0]).fold(f64::NEG_INFINITY, f64::max);
    let monotone = rise <= 1e-12;
    outcome(
        last < 0.01 && wmax < 1e-9 && monotone && log.weight_sum_errors.len() == 64,
        format!("loss {last:.2e} after 64 trees, max |sum w - 1| {wmax:.1e}, largest relative step {rise:.1e}"),
    )
}

fn bootstrap_schedules() -> Outcome {
    let cfg = SynthConfig {
        num_images: 60,
        proposals_per_image: 1000,
        distractor_density: 0.95,
        jitter: 0.05,
        layers: vec![LayerSpec::new("conv5a", 8, 1, 1.0)],
        semantic: false,
        edges: false,
        ..SynthConfig::desk()
    };
    let data = synth_generate(&cfg, 7).unwrap();
    let mut pass = true;
    let mut notes = Vec::new();
    let expected: [(&str, TrainConfig, Vec<usize>, Vec<usize>); 2] = [
        ("full", TrainConfig::sam(), vec![64, 128, 256, 512, 1024, 2048], vec![30_000, 35_000, 40_000, 45_000, 50_000, 55_000]),
        ("basic", TrainConfig::sam_basic(), vec![32, 64, 128, 256, 512], vec![10_000, 11_000, 12_000, 13_000, 14_000]),
    ];
    for (name, train, trees, negatives) in expected {
        let mut routing = RoutingTable::single(vec!["conv5a".into()], 1);
        routing.grid = PoolGrid::new(1, 1).unwrap();
        let dc = DetectorConfig { routing, channels: ChannelConfig { semantic: None, edge: None }, train, ..DetectorConfig::default() };
        match train_detector(&data, &dc, 1) {
            Ok((_, m)) => {
                let got_trees: Vec<usize> = m.stages.iter().map(|s| s.trees).collect();
                let got_neg: Vec<usize> = m.stages.iter().map(|s| s.negatives).collect();
                let ok = got_trees == trees && got_neg == negatives;
                pass &= ok;
                notes.push(format!("{name}: trees {got_trees:?} negatives {got_neg:?}"));
            }
            Err(e) => {
                pass = false;
                notes.push(format!("{name}: {e}"));
            }
        }
    }
    outcome(pass, notes.join("; "))
}

fn scale_aware_claim() -> Outcome {
    let train = mixed_scale_set(150, 3, false, "tr");
    let test = mixed_scale_set(600, 1003, false, "te");
    let protocol = desk_protocol();
    let base = desk_detector(ChannelConfig { semantic: None, edge: None });
    let s = |v: &[&str]| v.iter().map(|x| x.to_string()).collect::<Vec<_>>();
    let combos = vec![s(&["conv3"]), s(&["conv4a"]), s(&["conv5a"]), s(&["conv3", "conv4a"]), s(&["conv4a", "conv5a"])];
    let strides = [("conv3", 4u32), ("conv4a", 4), ("conv5a", 8)];
    let table = match ablation_sweep(&train, &test, &base, &combos, &[ScaleSubset::small(), ScaleSubset::large(), ScaleSubset::all()], &protocol, None, 5) {
        Ok(t) => t,
        Err(e) => return outcome(false, format!("sweep failed: {e}")),
    };
    let best_single = |subset: &str| {
        strides.iter().map(|&(l, st)| (table.get(&[l.to_string()], subset).unwrap(), l, st)).min_by(|a, b| a.0.total_cmp(&b.0)).unwrap()
    };
    let (ms, ls, ss) = best_single("small");
    let (ml, ll, sl) = best_single("large");
    let part_a = ss < sl;
    let fixed: Vec<(String, f64)> = combos.iter().map(|c| (c.join("+"), table.get(c, "all").unwrap())).collect();
    let (best_name, best_fixed) = fixed.iter().cloned().min_by(|a, b| a.1.total_cmp(&b.1)).unwrap();
    let router = match train_and_score(&train, &test, &base, &protocol, 5) {
        Ok((mr, _, _)) => mr,
        Err(e) => return outcome(false, format!("router failed: {e}")),
    };
    let gap = best_fixed - router;
    outcome(
        part_a && gap >= 0.02,
        format!(
            "(a) small best {ls} stride {ss} MR-4 {ms:.4}, large best {ll} stride {sl} MR-4 {ml:.4}; (b) router {router:.4} vs best fixed {best_name} {best_fixed:.4}, gap {:.2} points",
            100.0 * gap
        ),
    )
}

fn evaluation_correctness() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let p = common::matching_protocol();
    let mut mismatches = 0;
    for _ in 0..3000 {
        let (d, g) = common::random_matching_instance(&mut rng, 6);
        if match_image(&d, &g, &p) != common::exhaustive_match(&d, &g, &p) {
            mismatches += 1;
        }
    }
    let fx = common::load_fixture();
    let pairs: Vec<(&[Detection], &[GroundTruthBox])> = fx.iter().map(|(_, d, g)| (d.as_slice(), g.as_slice())).collect();
    let rep = evaluate(&pairs, &EvalProtocol::default(), ApInterpolation::Eleven).unwrap().summary;
    let fixture_ok = rep.mr2 == Some(common::fixture_mr(-2)) && rep.mr4 == Some(common::fixture_mr(-4));

    let (dets, gts, expected_ap) = common::ap_fixture();
    let (ap, _) = average_precision(&[(&dets, &gts)], &KittiDifficulty::moderate(), 0.5, ApInterpolation::Eleven).unwrap();
    let wide = EvalProtocol { region: EvalRegion { xmin: 0.0, xmax: 640.0, ymin: 0.0, ymax: 480.0 }, ..EvalProtocol::default() };
    let perfect: Vec<Detection> = gts.iter().map(|g| Detection::new(g.bbox, 1.0).unwrap()).collect();
    let good = evaluate(&[(&perfect, &gts)], &wide, ApInterpolation::Eleven).unwrap().summary;
    let none = evaluate(&[(&[], &gts)], &wide, ApInterpolation::Eleven).unwrap().summary;
    let limits_ok = good.mr4.unwrap() < 1e-9 && good.ap_moderate == Some(1.0) && none.mr4 == Some(1.0) && none.ap_moderate == Some(0.0);
    outcome(
        mismatches == 0 && fixture_ok && limits_ok && (ap - expected_ap).abs() < 1e-9,
        format!(
            "matcher mismatches {mismatches}/3000; fixture MR-2 {:.6} MR-4 {:.6} exact {fixture_ok}; limits {limits_ok}; 11-point AP {ap:.9} vs {expected_ap:.9}",
            rep.mr2.unwrap(),
            rep.mr4.unwrap()
        ),
    )
}

fn determinism() -> Outcome {
    let tmp = tempfile::tempdir().unwrap();
    let root = tmp.path();
    let synth = SynthConfig {
        num_images: 8,
        proposals_per_image: 80,
        layers: vec![LayerSpec::new("conv3", 4, 4, 0.6), LayerSpec::new("conv4a", 4, 4, 0.6), LayerSpec::new("conv5a", 8, 4, 2.0)],
        ..SynthConfig::desk()
    };
    let mut detector = desk_detector(ChannelConfig::sam_plus());
    detector.routing.target_dim = 6;
    detector.train = TrainConfig { stage_tree_counts: vec![8, 16, 32], initial_negatives: 300, hard_negatives_per_stage: 60, max_depth: 3, ..TrainConfig::sam_basic() };
    let cfg = serde_json::json!({ "synth": synth, "detector": detector, "protocol": desk_protocol() });
    let cfg_path = root.join("config.json");
    fs::write(&cfg_path, cfg.to_string()).unwrap();
    let bin = env!("CARGO_BIN_EXE_samhead");
    let run = |args: &[&Path], sub: &str, out: &Path| -> Result<(), String> {
        let mut c = Command::new(bin);
        c.arg(sub);
        for a in args {
            c.arg(a);
        }
        let o = c.args(["--config".as_ref(), cfg_path.as_os_str(), "--seed".as_ref(), "11".as_ref(), "--out".as_ref(), out.as_os_str()]).output().map_err(|e| e.to_string())?;
        if o.status.success() {
            Ok(())
        } else {
            Err(String::from_utf8_lossy(&o.stderr).into_owned())
        }
    };
    let data = root.join("data");
    let mut outputs = Vec::new();
    let result = (|| -> Result<(), String> {
        run(&[], "synth", &data)?;
        for k in 0..2 {
            let out = root.join(format!("run{k}"));
            run(&[&data], "train", &out)?;
            run(&[&out.join("model.json"), &data], "detect", &out)?;
            run(&[&out.join("detections.csv"), &data], "eval", &out)?;
            let read = |n: &str| fs::read(out.join(n)).map_err(|e| e.to_string());
            outputs.push((read("model.json")?, read("metrics.json")?));
        }
        Ok(())
    })();
    if let Err(e) = result {
        return outcome(false, format!("cli run failed: {e}"));
    }
    let same_model = outputs[0].0 == outputs[1].0;
    let same_metrics = outputs[0].1 == outputs[1].1;
    outcome(same_model && same_metrics, format!("model.json identical {same_model} ({} bytes), metrics.json identical {same_metrics}", outputs[0].0.len()))
}

fn main() {
    let only: Option<Vec<usize>> = std::env::var("SAMHEAD_ACCEPT").ok().map(|v| v.split(',').filter_map(|x| x.trim().parse().ok()).collect());
    type Check = fn() -> Outcome;
    let criteria: [(usize, &str, Option<u64>, Check); 8] = [
        (1, "pooling oracle equivalence", Some(30), pooling_oracles),
        (2, "semantic histogram pooling vs max pooling", Some(300), semantic_hist_vs_max),
        (3, "PCA properties and 1024->768 reduction", Some(300), pca_checks),
        (4, "RealBoost on separable data", Some(10), realboost_separable),
        (5, "bootstrapping schedules", None, bootstrap_schedules),
        (6, "scale-aware routing", Some(900), scale_aware_claim),
        (7, "evaluation correctness", Some(10), evaluation_correctness),
        (8, "train + eval determinism", None, determinism),
    ];
    let mut failed = 0;
    for (id, name, limit, check) in criteria {
        if only.as_ref().is_some_and(|o| !o.contains(&id)) {
            continue;
        }
        let t = Instant::now();
        let out = check();
        let took = t.elapsed();
        let in_time = limit.is_none_or(|l| took < Duration::from_secs(l));
        let pass = out.pass && in_time;
        failed += usize::from(!pass);
        let budget = limit.map_or(String::new(), |l| format!(" / {l} s"));
        println!("criterion {id} {} {name}: {} [{:.1} s{budget}]", if pass { "PASS" } else { "FAIL" }, out.detail, took.as_secs_f64());
    }
    if failed > 0 {
        std::process::exit(1);
    }
}
