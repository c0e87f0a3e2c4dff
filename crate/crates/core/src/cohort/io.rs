//! On-disk dataset layout.
//!
//! A dataset directory holds `manifest.csv` (one row per visit),
//! `images/*.img`, `cohort.json` with the grid, and optionally `truth.csv`
//! (hidden generator state) and `splits.csv`. Image files are a 16-byte
//! header (`LTIM`, then height, width and channels as little-endian `u32`)
//! followed by channel-major little-endian `f32` pixels.

use std::collections::BTreeMap;
use std::fs;
use std::io::{Read, Write};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::{Cohort, CohortConfig, EyeRecord, EyeTruth, PatientSplit, SplitName};
use crate::encoders::Image;
use crate::error::{Error, Result};
use crate::survival::{EventOutcome, HazardCurve, TimeGrid};

pub const IMAGE_MAGIC: [u8; 4] = *b"LTIM";
const MANIFEST_HEADER: [&str; 6] = ["patient_id", "eye_id", "visit_month", "image_path", "event_step", "censored"];
const TRUTH_HEADER: [&str; 6] = ["patient_id", "eye_id", "visit_month", "drift", "severity", "true_hazard"];
/// Largest pixel count a decoded image may claim.
const MAX_PIXELS: usize = 1 << 26;

pub fn encode_image(img: &Image) -> Vec<u8> {
    let (c, h, w) = img.shape();
    let mut out = Vec::with_capacity(16 + 4 * img.len());
    out.extend_from_slice(&IMAGE_MAGIC);
    for v in [h, w, c] {
        out.extend_from_slice(&(v as u32).to_le_bytes());
    }
    for v in img.data() {
        out.extend_from_slice(&v.to_le_bytes());
    }
    out
}

pub fn decode_image(bytes: &[u8]) -> Result<Image> {
    if bytes.len() < 16 {
        return Err(Error::Data(format!("image is {} bytes, shorter than its header", bytes.len())));
    }
    if bytes[..4] != IMAGE_MAGIC {
        return Err(Error::Data("bad image magic".into()));
    }
    let word = |i: usize| u32::from_le_bytes(bytes[i..i + 4].try_into().unwrap()) as usize;
    let (h, w, c) = (word(4), word(8), word(12));
    let pixels = h
        .checked_mul(w)
        .and_then(|p| p.checked_mul(c))
        .filter(|&p| p <= MAX_PIXELS)
        .ok_or_else(|| Error::Data(format!("image extents {h}x{w}x{c} too large")))?;
    if bytes.len() - 16 != 4 * pixels {
        return Err(Error::Data(format!(
            "image body is {} bytes, header implies {}",
            bytes.len() - 16,
            4 * pixels
        )));
    }
    let data = bytes[16..]
        .chunks_exact(4)
        .map(|b| f32::from_le_bytes(b.try_into().unwrap()))
        .collect();
    Image::new(c, h, w, data)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ManifestRow {
    pub patient_id: u32,
    pub eye_id: u8,
    pub visit_month: u32,
    pub image_path: String,
    pub event_step: usize,
    pub censored: u8,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TruthRow {
    pub patient_id: u32,
    pub eye_id: u8,
    pub visit_month: u32,
    pub drift: f64,
    pub severity: f64,
    /// Space-separated hazard per grid step.
    pub true_hazard: String,
}

fn check_header<R: Read>(rdr: &mut csv::Reader<R>, expected: &[&str]) -> Result<()> {
    let header = rdr.headers()?;
    if header.iter().ne(expected.iter().copied()) {
        return Err(Error::Data(format!(
            "header {:?} does not match {expected:?}",
            header.iter().collect::<Vec<_>>()
        )));
    }
    Ok(())
}

pub fn parse_manifest<R: Read>(reader: R) -> Result<Vec<ManifestRow>> {
    let mut rdr = csv::Reader::from_reader(reader);
    check_header(&mut rdr, &MANIFEST_HEADER)?;
    let rows = rdr.deserialize().collect::<std::result::Result<Vec<ManifestRow>, _>>()?;
    if let Some(r) = rows.iter().find(|r| r.censored > 1) {
        return Err(Error::Data(format!("censored flag {} is not 0 or 1", r.censored)));
    }
    Ok(rows)
}

/// One eye's manifest rows after grouping and validation.
#[derive(Debug, Clone, PartialEq)]
pub struct EyeEntry {
    pub patient_id: u32,
    pub eye_id: u8,
    pub visit_months: Vec<u32>,
    pub image_paths: Vec<String>,
    pub outcome: EventOutcome,
}

/// Group rows by eye and check visit order and outcome consistency.
pub fn group_manifest(rows: &[ManifestRow], grid: &TimeGrid) -> Result<Vec<EyeEntry>> {
    let mut eyes: BTreeMap<(u32, u8), Vec<&ManifestRow>> = BTreeMap::new();
    for r in rows {
        eyes.entry((r.patient_id, r.eye_id)).or_default().push(r);
    }
    let mut out = Vec::with_capacity(eyes.len());
    for ((patient_id, eye_id), rs) in eyes {
        let first = rs[0];
        let outcome = EventOutcome::new(first.event_step, first.censored == 1, grid)?;
        let end_months = grid.step_to_months(outcome.event_step);
        let mut visit_months = Vec::with_capacity(rs.len());
        let mut image_paths = Vec::with_capacity(rs.len());
        for r in rs {
            if r.event_step != first.event_step || r.censored != first.censored {
                return Err(Error::Data(format!("patient {patient_id} eye {eye_id} has conflicting outcomes")));
            }
            if visit_months.last().is_some_and(|&m| r.visit_month <= m) {
                return Err(Error::Data(format!(
                    "patient {patient_id} eye {eye_id} visits not strictly increasing at month {}",
                    r.visit_month
                )));
            }
            if r.visit_month % grid.step_months != 0 {
                return Err(Error::Data(format!(
                    "visit month {} is off the {}-month grid",
                    r.visit_month, grid.step_months
                )));
            }
            if r.visit_month as f64 >= end_months {
                return Err(Error::Data(format!(
                    "patient {patient_id} eye {eye_id} has a visit at month {} not before its outcome step",
                    r.visit_month
                )));
            }
            visit_months.push(r.visit_month);
            image_paths.push(r.image_path.clone());
        }
        out.push(EyeEntry {
            patient_id,
            eye_id,
            visit_months,
            image_paths,
            outcome,
        });
    }
    Ok(out)
}

pub fn parse_truth<R: Read>(reader: R) -> Result<Vec<TruthRow>> {
    let mut rdr = csv::Reader::from_reader(reader);
    check_header(&mut rdr, &TRUTH_HEADER)?;
    Ok(rdr.deserialize().collect::<std::result::Result<Vec<TruthRow>, _>>()?)
}

pub fn parse_hazard_list(s: &str) -> Result<HazardCurve> {
    let values = s
        .split_whitespace()
        .map(|t| t.parse::<f64>().map_err(|_| Error::Data(format!("bad hazard value {t:?}"))))
        .collect::<Result<Vec<_>>>()?;
    HazardCurve::new(values).map_err(|e| Error::Data(e.to_string()))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct CohortMeta {
    grid: TimeGrid,
    image_size: usize,
    generator: Option<CohortConfig>,
}

/// A dataset as stored on disk.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub cohort: Cohort,
    pub generator: Option<CohortConfig>,
    pub split: Option<PatientSplit>,
}

fn read_file(path: &Path) -> Result<Vec<u8>> {
    fs::read(path).map_err(|e| Error::io(path, e))
}

fn write_file(path: &Path, bytes: &[u8]) -> Result<()> {
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

fn image_name(e: &EyeRecord, month: u32) -> String {
    format!("images/p{:05}_e{}_m{:03}.img", e.patient_id, e.eye_id, month)
}

fn hazard_list(h: &HazardCurve) -> String {
    h.values().iter().map(|v| format!("{v:e}")).collect::<Vec<_>>().join(" ")
}

pub fn write_dataset(dir: &Path, ds: &Dataset) -> Result<()> {
    let images_dir = dir.join("images");
    fs::create_dir_all(&images_dir).map_err(|e| Error::io(&images_dir, e))?;
    let c = &ds.cohort;
    let meta = CohortMeta {
        grid: c.grid,
        image_size: c.image_size,
        generator: ds.generator.clone(),
    };
    write_file(&dir.join("cohort.json"), &serde_json::to_vec_pretty(&meta)?)?;

    let mut manifest = csv::Writer::from_writer(Vec::new());
    let mut truth = csv::Writer::from_writer(Vec::new());
    let with_truth = c.has_truth();
    if !with_truth {
        truth.write_record(TRUTH_HEADER)?;
    }
    for e in &c.eyes {
        for (k, (&month, img)) in e.visit_months.iter().zip(&e.images).enumerate() {
            let path = image_name(e, month);
            write_file(&dir.join(&path), &encode_image(img))?;
            manifest.serialize(ManifestRow {
                patient_id: e.patient_id,
                eye_id: e.eye_id,
                visit_month: month,
                image_path: path,
                event_step: e.outcome.event_step,
                censored: e.outcome.censored as u8,
            })?;
            if let (true, Some(t)) = (with_truth, &e.truth) {
                truth.serialize(TruthRow {
                    patient_id: e.patient_id,
                    eye_id: e.eye_id,
                    visit_month: month,
                    drift: t.drift,
                    severity: t.severity[k],
                    true_hazard: hazard_list(&t.true_hazard),
                })?;
            }
        }
    }
    let finish = |w: csv::Writer<Vec<u8>>| w.into_inner().map_err(|e| Error::Data(e.to_string()));
    write_file(&dir.join("manifest.csv"), &finish(manifest)?)?;
    if with_truth {
        write_file(&dir.join("truth.csv"), &finish(truth)?)?;
    }
    if let Some(split) = &ds.split {
        write_splits(&dir.join("splits.csv"), split)?;
    }
    Ok(())
}

pub fn write_splits(path: &Path, split: &PatientSplit) -> Result<()> {
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record(["patient_id", "split"])?;
    for (p, s) in &split.assignment {
        w.write_record([p.to_string(), s.as_str().to_string()])?;
    }
    write_file(path, &w.into_inner().map_err(|e| Error::Data(e.to_string()))?)
}

pub fn read_splits(path: &Path) -> Result<PatientSplit> {
    parse_splits(read_file(path)?.as_slice())
}

pub fn parse_splits<R: Read>(reader: R) -> Result<PatientSplit> {
    let mut rdr = csv::Reader::from_reader(reader);
    check_header(&mut rdr, &["patient_id", "split"])?;
    let mut assignment = BTreeMap::new();
    for rec in rdr.deserialize::<(u32, String)>() {
        let (p, s) = rec?;
        if assignment.insert(p, s.parse::<SplitName>()?).is_some() {
            return Err(Error::Data(format!("patient {p} listed twice in splits")));
        }
    }
    Ok(PatientSplit { assignment })
}

fn attach_truth(eyes: &mut [EyeRecord], rows: &[TruthRow]) -> Result<()> {
    let mut by_key: BTreeMap<(u32, u8, u32), &TruthRow> = BTreeMap::new();
    for r in rows {
        by_key.insert((r.patient_id, r.eye_id, r.visit_month), r);
    }
    for e in eyes.iter_mut() {
        let mut severity = Vec::with_capacity(e.num_visits());
        let mut first: Option<&TruthRow> = None;
        for &m in &e.visit_months {
            let r = by_key.get(&(e.patient_id, e.eye_id, m)).ok_or_else(|| {
                Error::Data(format!("truth sidecar lacks patient {} eye {} month {m}", e.patient_id, e.eye_id))
            })?;
            severity.push(r.severity);
            first.get_or_insert(r);
        }
        let r = first.expect("eyes have at least one visit");
        e.truth = Some(EyeTruth {
            drift: r.drift,
            severity,
            true_hazard: parse_hazard_list(&r.true_hazard)?,
        });
    }
    Ok(())
}

pub fn read_dataset(dir: &Path) -> Result<Dataset> {
    let meta_path = dir.join("cohort.json");
    let meta: CohortMeta = serde_json::from_slice(&read_file(&meta_path)?)?;
    let grid = TimeGrid::new(meta.grid.step_months, meta.grid.j_max)?;
    let rows = parse_manifest(read_file(&dir.join("manifest.csv"))?.as_slice())?;
    if rows.is_empty() {
        return Err(Error::Data(format!("{} lists no visits", dir.join("manifest.csv").display())));
    }
    let mut eyes = Vec::new();
    for entry in group_manifest(&rows, &grid)? {
        let images = entry
            .image_paths
            .iter()
            .map(|p| {
                let path: PathBuf = dir.join(p);
                decode_image(&read_file(&path)?)
                    .map_err(|e| Error::Data(format!("{}: {e}", path.display())))
            })
            .collect::<Result<Vec<_>>>()?;
        eyes.push(EyeRecord {
            patient_id: entry.patient_id,
            eye_id: entry.eye_id,
            visit_months: entry.visit_months,
            images,
            outcome: entry.outcome,
            truth: None,
        });
    }
    let truth_path = dir.join("truth.csv");
    if truth_path.exists() {
        let rows = parse_truth(read_file(&truth_path)?.as_slice())?;
        if !rows.is_empty() {
            attach_truth(&mut eyes, &rows)?;
        }
    }
    let split_path = dir.join("splits.csv");
    let split = if split_path.exists() {
        Some(read_splits(&split_path)?)
    } else {
        None
    };
    Ok(Dataset {
        cohort: Cohort {
            grid,
            image_size: meta.image_size,
            eyes,
        },
        generator: meta.generator,
        split,
    })
}

/// Write a CSV file through a buffered writer, mapping errors to the path.
pub fn write_csv<S: Serialize>(path: &Path, rows: impl IntoIterator<Item = S>) -> Result<()> {
    let file = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = csv::Writer::from_writer(std::io::BufWriter::new(file));
    for r in rows {
        w.serialize(r)?;
    }
    w.flush().map_err(|e| Error::io(path, e))?;
    Ok(())
}

/// Write raw bytes, creating parent directories.
pub fn write_bytes(path: &Path, bytes: &[u8]) -> Result<()> {
    if let Some(parent) = path.parent() {
        fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
    }
    let mut f = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    f.write_all(bytes).map_err(|e| Error::io(path, e))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::cohort::{generate_cohort, split_patients};
    use proptest::prelude::*;

    #[test]
    fn image_round_trip() {
        let img = Image::new(2, 3, 2, (0..12).map(|i| i as f32 / 11.0).collect()).unwrap();
        let bytes = encode_image(&img);
        assert_eq!(&bytes[..4], b"LTIM");
        assert_eq!(bytes.len(), 16 + 48);
        assert_eq!(decode_image(&bytes).unwrap(), img);
    }

    #[test]
    fn image_decode_rejects_garbage() {
        let img = Image::zeros(1, 2, 2);
        let mut bytes = encode_image(&img);
        assert!(decode_image(&bytes[..10]).is_err());
        bytes.pop();
        assert!(decode_image(&bytes).is_err());
        let mut bad = encode_image(&img);
        bad[0] = b'X';
        assert!(decode_image(&bad).is_err());
        let mut huge = encode_image(&img);
        huge[4..8].copy_from_slice(&u32::MAX.to_le_bytes());
        assert!(decode_image(&huge).is_err());
        let mut out_of_range = encode_image(&img);
        out_of_range[16..20].copy_from_slice(&2.0f32.to_le_bytes());
        assert!(decode_image(&out_of_range).is_err());
    }

    const HEADER: &str = "patient_id,eye_id,visit_month,image_path,event_step,censored\n";

    #[test]
    fn manifest_validation() {
        let grid = TimeGrid::areds_like();
        let ok = format!("{HEADER}1,0,0,a.img,3,1\n1,0,6,b.img,3,1\n2,1,0,c.img,1,0\n");
        let eyes = group_manifest(&parse_manifest(ok.as_bytes()).unwrap(), &grid).unwrap();
        assert_eq!(eyes.len(), 2);
        assert_eq!(eyes[0].visit_months, vec![0, 6]);
        assert!(eyes[1].outcome.is_event());

        let unordered = format!("{HEADER}1,0,6,a.img,3,1\n1,0,0,b.img,3,1\n");
        let conflicting = format!("{HEADER}1,0,0,a.img,3,1\n1,0,6,b.img,4,1\n");
        let late = format!("{HEADER}1,0,0,a.img,1,1\n1,0,6,b.img,1,1\n");
        let off_grid = format!("{HEADER}1,0,3,a.img,3,1\n");
        for bad in [unordered, conflicting, late, off_grid] {
            let rows = parse_manifest(bad.as_bytes()).unwrap();
            assert!(matches!(group_manifest(&rows, &grid), Err(Error::Data(_))), "{bad}");
        }
        assert!(parse_manifest("a,b\n1,2\n".as_bytes()).is_err());
        assert!(parse_manifest(format!("{HEADER}1,0,0,a.img,3,2\n").as_bytes()).is_err());
    }

    #[test]
    fn dataset_round_trip() {
        let mut cfg = CohortConfig::areds_like(6, 3);
        cfg.image_size = 8;
        let cohort = generate_cohort(&cfg).unwrap();
        let split = split_patients(&cohort, [0.5, 0.25, 0.25], 1).unwrap();
        let ds = Dataset {
            cohort,
            generator: Some(cfg),
            split: Some(split),
        };
        let dir = tempfile::tempdir().unwrap();
        write_dataset(dir.path(), &ds).unwrap();
        assert_eq!(read_dataset(dir.path()).unwrap(), ds);
    }

    proptest! {
        #[test]
        fn decode_never_panics(bytes in proptest::collection::vec(any::<u8>(), 0..64)) {
            let _ = decode_image(&bytes);
        }
    }
}
