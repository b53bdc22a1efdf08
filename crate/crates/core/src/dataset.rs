//! Datasets of image records with annotations and proposals, and their
//! on-disk layout:
//!
//! ```text
//! <dir>/index.json          image ids and sizes, in dataset order
//! <dir>/maps/<id>.fmap      feature maps
//! <dir>/maps/<id>.lmap      semantic labels (optional)
//! <dir>/maps/<id>.emap      edge responses (optional)
//! <dir>/annotations.jsonl   one {"image_id", "boxes": [{x,y,w,h,occl,trunc,ignore}]} per line
//! <dir>/proposals.jsonl     one {"image_id", "boxes": [{x,y,w,h,score}]} per line
//! ```

use std::collections::HashMap;
use std::fs::{self, File};
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::FormatError;
use crate::format;
use crate::geometry::{BBox, Candidate, Detection, GroundTruthBox};
use crate::maps::ImageRecord;

#[derive(Debug, Clone, PartialEq)]
pub struct DatasetImage {
    pub record: ImageRecord,
    pub ground_truth: Vec<GroundTruthBox>,
    pub proposals: Vec<Candidate>,
}

impl DatasetImage {
    pub fn image_id(&self) -> &str {
        &self.record.image_id
    }
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct Dataset {
    pub images: Vec<DatasetImage>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GtBoxLine {
    pub x: f64,
    pub y: f64,
    pub w: f64,
    pub h: f64,
    #[serde(default)]
    pub occl: f64,
    #[serde(default)]
    pub trunc: f64,
    #[serde(default)]
    pub ignore: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScoredBoxLine {
    pub x: f64,
    pub y: f64,
    pub w: f64,
    pub h: f64,
    pub score: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AnnotationLine {
    pub image_id: String,
    pub boxes: Vec<GtBoxLine>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProposalLine {
    pub image_id: String,
    pub boxes: Vec<ScoredBoxLine>,
}

impl From<&GroundTruthBox> for GtBoxLine {
    fn from(g: &GroundTruthBox) -> Self {
        GtBoxLine { x: g.bbox.x(), y: g.bbox.y(), w: g.bbox.w(), h: g.bbox.h(), occl: g.occlusion(), trunc: g.truncation(), ignore: g.ignore }
    }
}

impl TryFrom<&GtBoxLine> for GroundTruthBox {
    type Error = FormatError;

    fn try_from(l: &GtBoxLine) -> Result<Self, Self::Error> {
        Ok(GroundTruthBox::new(BBox::new(l.x, l.y, l.w, l.h)?, l.occl, l.trunc, l.ignore)?)
    }
}

impl From<&Candidate> for ScoredBoxLine {
    fn from(c: &Candidate) -> Self {
        ScoredBoxLine { x: c.bbox.x(), y: c.bbox.y(), w: c.bbox.w(), h: c.bbox.h(), score: c.score() }
    }
}

impl TryFrom<&ScoredBoxLine> for Candidate {
    type Error = FormatError;

    fn try_from(l: &ScoredBoxLine) -> Result<Self, Self::Error> {
        Ok(Candidate::new(BBox::new(l.x, l.y, l.w, l.h)?, l.score)?)
    }
}

fn write_jsonl<T: Serialize>(path: &Path, lines: impl IntoIterator<Item = T>) -> Result<(), FormatError> {
    let mut w = BufWriter::new(File::create(path)?);
    for line in lines {
        serde_json::to_writer(&mut w, &line)?;
        w.write_all(b"\n")?;
    }
    w.flush()?;
    Ok(())
}

fn read_jsonl<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<Vec<T>, FormatError> {
    let mut out = Vec::new();
    for (n, line) in BufReader::new(File::open(path)?).lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        out.push(serde_json::from_str(&line).map_err(|e| FormatError::Record(format!("{}:{}: {e}", path.display(), n + 1)))?);
    }
    Ok(out)
}

pub fn write_annotations(path: impl AsRef<Path>, items: &[(&str, &[GroundTruthBox])]) -> Result<(), FormatError> {
    write_jsonl(
        path.as_ref(),
        items.iter().map(|(id, gts)| AnnotationLine { image_id: id.to_string(), boxes: gts.iter().map(GtBoxLine::from).collect() }),
    )
}

/// Annotations keyed by image id, in file order.
pub fn read_annotations(path: impl AsRef<Path>) -> Result<Vec<(String, Vec<GroundTruthBox>)>, FormatError> {
    read_jsonl::<AnnotationLine>(path.as_ref())?
        .into_iter()
        .map(|l| Ok((l.image_id, l.boxes.iter().map(GroundTruthBox::try_from).collect::<Result<Vec<_>, _>>()?)))
        .collect()
}

pub fn write_proposals(path: impl AsRef<Path>, items: &[(&str, &[Candidate])]) -> Result<(), FormatError> {
    write_jsonl(
        path.as_ref(),
        items.iter().map(|(id, cs)| ProposalLine { image_id: id.to_string(), boxes: cs.iter().map(ScoredBoxLine::from).collect() }),
    )
}

pub fn read_proposals(path: impl AsRef<Path>) -> Result<Vec<(String, Vec<Candidate>)>, FormatError> {
    read_jsonl::<ProposalLine>(path.as_ref())?
        .into_iter()
        .map(|l| Ok((l.image_id, l.boxes.iter().map(Candidate::try_from).collect::<Result<Vec<_>, _>>()?)))
        .collect()
}

/// One row of a detections CSV (`image_id,x,y,w,h,score`).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DetectionRow {
    pub image_id: String,
    pub x: f64,
    pub y: f64,
    pub w: f64,
    pub h: f64,
    pub score: f64,
}

fn csv_err(e: csv::Error) -> FormatError {
    FormatError::Record(e.to_string())
}

/// Writes detections in the given image order; images without detections
/// contribute no rows.
pub fn write_detections_to<W: Write>(w: W, items: &[(&str, &[Detection])]) -> Result<(), FormatError> {
    let mut wr = csv::WriterBuilder::new().has_headers(false).from_writer(w);
    wr.write_record(["image_id", "x", "y", "w", "h", "score"]).map_err(csv_err)?;
    for (id, dets) in items {
        for d in dets.iter() {
            let b = d.bbox;
            wr.serialize(DetectionRow { image_id: id.to_string(), x: b.x(), y: b.y(), w: b.w(), h: b.h(), score: d.score() }).map_err(csv_err)?;
        }
    }
    wr.flush()?;
    Ok(())
}

pub fn write_detections(path: impl AsRef<Path>, items: &[(&str, &[Detection])]) -> Result<(), FormatError> {
    write_detections_to(BufWriter::new(File::create(path)?), items)
}

/// Detections grouped by image id.
pub fn read_detections_from<R: std::io::Read>(r: R) -> Result<HashMap<String, Vec<Detection>>, FormatError> {
    let mut rd = csv::Reader::from_reader(r);
    let mut out: HashMap<String, Vec<Detection>> = HashMap::new();
    for (n, row) in rd.deserialize::<DetectionRow>().enumerate() {
        let row = row.map_err(|e| FormatError::Record(format!("detections row {}: {e}", n + 1)))?;
        let det = Detection::new(BBox::new(row.x, row.y, row.w, row.h)?, row.score)?;
        out.entry(row.image_id).or_default().push(det);
    }
    Ok(out)
}

pub fn read_detections(path: impl AsRef<Path>) -> Result<HashMap<String, Vec<Detection>>, FormatError> {
    read_detections_from(File::open(path)?)
}

#[derive(Debug, Serialize, Deserialize)]
struct IndexEntry {
    image_id: String,
    image_w: usize,
    image_h: usize,
}

#[derive(Debug, Serialize, Deserialize)]
struct Index {
    images: Vec<IndexEntry>,
}

fn check_image_id(id: &str) -> Result<(), FormatError> {
    if id.is_empty() || id.contains(['/', '\\']) || id == "." || id == ".." {
        return Err(FormatError::Record(format!("image id {id:?} is not usable as a file name")));
    }
    Ok(())
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.images.len()
    }

    pub fn is_empty(&self) -> bool {
        self.images.is_empty()
    }

    pub fn save(&self, dir: impl AsRef<Path>) -> Result<(), FormatError> {
        let dir = dir.as_ref();
        let maps_dir = dir.join("maps");
        fs::create_dir_all(&maps_dir)?;
        let mut index = Index { images: Vec::with_capacity(self.images.len()) };
        for img in &self.images {
            let rec = &img.record;
            check_image_id(&rec.image_id)?;
            index.images.push(IndexEntry { image_id: rec.image_id.clone(), image_w: rec.image_w, image_h: rec.image_h });
            let maps: Vec<_> = rec.maps.values().collect();
            format::write_fmap(maps_dir.join(format!("{}.fmap", rec.image_id)), &maps)?;
            if let Some(l) = &rec.labels {
                format::write_lmap(maps_dir.join(format!("{}.lmap", rec.image_id)), l)?;
            }
            if let Some(e) = &rec.edges {
                format::write_emap(maps_dir.join(format!("{}.emap", rec.image_id)), e)?;
            }
        }
        let mut w = BufWriter::new(File::create(dir.join("index.json"))?);
        serde_json::to_writer_pretty(&mut w, &index)?;
        w.write_all(b"\n")?;
        w.flush()?;
        let ann: Vec<(&str, &[GroundTruthBox])> = self.images.iter().map(|i| (i.image_id(), i.ground_truth.as_slice())).collect();
        write_annotations(dir.join("annotations.jsonl"), &ann)?;
        let props: Vec<(&str, &[Candidate])> = self.images.iter().map(|i| (i.image_id(), i.proposals.as_slice())).collect();
        write_proposals(dir.join("proposals.jsonl"), &props)?;
        Ok(())
    }

    pub fn load(dir: impl AsRef<Path>) -> Result<Self, FormatError> {
        let dir = dir.as_ref();
        let index: Index = serde_json::from_reader(BufReader::new(File::open(dir.join("index.json"))?))?;
        let mut gts: HashMap<String, Vec<GroundTruthBox>> = read_annotations(dir.join("annotations.jsonl"))?.into_iter().collect();
        let mut props: HashMap<String, Vec<Candidate>> = read_proposals(dir.join("proposals.jsonl"))?.into_iter().collect();
        let maps_dir = dir.join("maps");
        let mut images = Vec::with_capacity(index.images.len());
        for e in index.images {
            check_image_id(&e.image_id)?;
            let maps = format::read_fmap(maps_dir.join(format!("{}.fmap", e.image_id)))?;
            let lpath = maps_dir.join(format!("{}.lmap", e.image_id));
            let labels = if lpath.exists() { Some(format::read_lmap(lpath)?) } else { None };
            let epath = maps_dir.join(format!("{}.emap", e.image_id));
            let edges = if epath.exists() { Some(format::read_emap(epath)?) } else { None };
            let record = ImageRecord::new(e.image_id.clone(), e.image_w, e.image_h, maps, labels, edges)?;
            images.push(DatasetImage {
                ground_truth: gts.remove(&e.image_id).unwrap_or_default(),
                proposals: props.remove(&e.image_id).unwrap_or_default(),
                record,
            });
        }
        Ok(Dataset { images })
    }
}
