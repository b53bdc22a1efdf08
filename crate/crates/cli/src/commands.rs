//! One function per subcommand. Each reads its inputs, writes its declared
//! outputs under the output directory and nothing else.

use std::collections::HashSet;
use std::fs;
use std::path::{Path, PathBuf};

use samhead_core::dataset::{read_annotations, read_detections, write_detections};
use samhead_core::eval::{emit_curve, evaluate, interpolated_ap, log_average_from_curve, read_curve, EvalCurve};
use samhead_core::pipeline::{ablation_sweep, config_hash, detect_dataset, train_detector};
use samhead_core::{synth_generate, Dataset, DetectorModel, Detection, GroundTruthBox};

use crate::config::RunConfig;
use crate::failure::Failure;
use crate::plot;

pub struct Ctx {
    pub config: RunConfig,
    pub out: PathBuf,
    pub seed: u64,
    pub verbose: u8,
}

impl Ctx {
    fn note(&self, msg: impl AsRef<str>) {
        if self.verbose > 0 {
            eprintln!("samhead: {}", msg.as_ref());
        }
    }

    fn out_file(&self, name: &str) -> Result<PathBuf, Failure> {
        fs::create_dir_all(&self.out).map_err(|e| Failure::usage(format!("cannot create {}: {e}", self.out.display())))?;
        Ok(self.out.join(name))
    }
}

pub fn require(path: &Path) -> Result<(), Failure> {
    if path.exists() {
        Ok(())
    } else {
        Err(Failure::usage(format!("{} does not exist", path.display())))
    }
}

fn load_dataset(path: &Path) -> Result<Dataset, Failure> {
    require(path)?;
    Ok(Dataset::load(path)?)
}

fn write_json<T: serde::Serialize>(path: &Path, value: &T) -> Result<(), Failure> {
    let mut text = serde_json::to_string_pretty(value).map_err(|e| Failure::data(e.to_string()))?;
    text.push('\n');
    fs::write(path, text)?;
    Ok(())
}

pub fn synth(ctx: &Ctx) -> Result<(), Failure> {
    let data = synth_generate(&ctx.config.synth, ctx.seed)?;
    let dir = ctx.out_file("")?;
    data.save(&dir)?;
    ctx.note(format!("wrote {} images to {}", data.len(), dir.display()));
    Ok(())
}

pub fn train(ctx: &Ctx, dataset: &Path) -> Result<(), Failure> {
    let data = load_dataset(dataset)?;
    ctx.note(format!("training on {} images", data.len()));
    let (model, mut manifest) = train_detector(&data, &ctx.config.detector, ctx.seed)?;
    manifest.dataset = Some(dataset.display().to_string());
    for s in &manifest.stages {
        ctx.note(format!("stage {} trees {} negatives {} mined {}", s.stage, s.trees, s.negatives, s.mined));
    }
    model.save(ctx.out_file("model.json")?)?;
    write_json(&ctx.out_file("manifest.json")?, &manifest)?;
    Ok(())
}

pub fn detect(ctx: &Ctx, model: &Path, dataset: &Path) -> Result<(), Failure> {
    require(model)?;
    let model = DetectorModel::load(model)?;
    let data = load_dataset(dataset)?;
    let dets = detect_dataset(&model, &data)?;
    let items: Vec<(&str, &[Detection])> = data.images.iter().zip(&dets).map(|(im, d)| (im.image_id(), d.as_slice())).collect();
    write_detections(ctx.out_file("detections.csv")?, &items)?;
    ctx.note(format!("{} detections", dets.iter().map(Vec::len).sum::<usize>()));
    Ok(())
}

/// Annotations from a JSONL file or a dataset directory.
fn load_annotations(path: &Path) -> Result<Vec<(String, Vec<GroundTruthBox>)>, Failure> {
    require(path)?;
    let file = if path.is_dir() { path.join("annotations.jsonl") } else { path.to_path_buf() };
    Ok(read_annotations(file)?)
}

pub fn eval(ctx: &Ctx, detections: &Path, annotations: &Path) -> Result<(), Failure> {
    require(detections)?;
    let ann = load_annotations(annotations)?;
    let mut dets = read_detections(detections)?;
    let known: HashSet<&str> = ann.iter().map(|(id, _)| id.as_str()).collect();
    let mut stray: Vec<&String> = dets.keys().filter(|id| !known.contains(id.as_str())).collect();
    if !stray.is_empty() {
        stray.sort();
        return Err(Failure::data(format!("detections for unannotated images: {stray:?}")));
    }
    let per_image: Vec<(Vec<Detection>, &[GroundTruthBox])> = ann.iter().map(|(id, g)| (dets.remove(id).unwrap_or_default(), g.as_slice())).collect();
    let pairs: Vec<(&[Detection], &[GroundTruthBox])> = per_image.iter().map(|(d, g)| (d.as_slice(), *g)).collect();
    let interp = ctx.config.eval.interpolation;
    let report = evaluate(&pairs, &ctx.config.protocol, interp).map_err(samhead_core::Error::from)?;
    write_json(&ctx.out_file("metrics.json")?, &report.summary)?;
    let mr2 = log_average_from_curve(&report.miss_rate_curve, -2.0, 0.0, ctx.config.protocol.num_points).mr;
    emit_curve(&EvalCurve::MissRate { points: report.miss_rate_curve.clone(), log_average_miss_rate: mr2 }, ctx.out_file("miss_rate.csv")?)?;
    let ap = interpolated_ap(&report.pr_curve, interp);
    emit_curve(&EvalCurve::PrecisionRecall { points: report.pr_curve.clone(), average_precision: ap }, ctx.out_file("pr.csv")?)?;
    ctx.note(format!("MR-2 {:?} MR-4 {:?}", report.summary.mr2, report.summary.mr4));
    Ok(())
}

pub fn sweep(ctx: &Ctx, train: &Path, test: &Path) -> Result<(), Failure> {
    let train = load_dataset(train)?;
    let test = load_dataset(test)?;
    let s = &ctx.config.sweep;
    if s.combinations.is_empty() || s.subsets.is_empty() {
        return Err(Failure::usage("sweep needs at least one combination and one subset"));
    }
    ctx.note(format!("{} combinations x {} subsets", s.combinations.len(), s.subsets.len()));
    let table = ablation_sweep(&train, &test, &ctx.config.detector, &s.combinations, &s.subsets, &ctx.config.protocol, s.target_dim, ctx.seed)?;
    fs::write(ctx.out_file("sweep.csv")?, table.to_csv()?)?;
    let hash = config_hash(&ctx.config)?;
    write_json(&ctx.out_file("sweep_manifest.json")?, &serde_json::json!({ "config_hash": hash, "seed": ctx.seed }))?;
    Ok(())
}

pub fn plot(ctx: &Ctx, curves: &[PathBuf]) -> Result<(), Failure> {
    let mut loaded = Vec::new();
    for p in curves {
        require(p)?;
        let name = p.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default();
        loaded.push((name, read_curve(p)?));
    }
    let svg = plot::render(&loaded, ctx.config.plot.title.as_deref()).map_err(Failure::usage)?;
    fs::write(ctx.out_file("plot.svg")?, svg)?;
    Ok(())
}
