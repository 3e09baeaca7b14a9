//! Sequence directories on disk and the frame-by-frame tracking driver.
//!
//! A sequence directory holds MOTChallenge text files plus side channels:
//!
//! | file | content |
//! |------|---------|
//! | `gt.txt` | ground truth, MOTChallenge rows |
//! | `det.txt` | detections, id `-1`, row order is significant |
//! | `descriptors.bin` | raw appearance descriptor per detection row |
//! | `oracle_features.bin` | identity signature per detection row |
//! | `det_truth.txt` | `frame,id` per detection row, `-1` for clutter |
//! | `occ.txt` | `frame,x,y,score` occlusion centers |
//! | `seqinfo.ini` | `[Sequence]` header then `key=value` lines |

use std::fs;
use std::path::Path;

use crate::config::parse_kv;
use crate::embedder::{embed_rows, DescriptorFrame, DescriptorSequence, EmbedderModel};
use crate::error::{Error, Result};
use crate::geometry::Point2;
use crate::mot::{self, MotRecord};
use crate::reid_loss::FeatureSet;
use crate::simulator::{CenterLists, SyntheticSequence};
use crate::tracker::{step, FrameInput, InputDetection, TrackerConfig, TrackerState};

const DS_MAGIC: &[u8; 4] = b"OTDS";
const DS_VERSION: u32 = 1;

pub const GT_FILE: &str = "gt.txt";
pub const DET_FILE: &str = "det.txt";
pub const DESCRIPTOR_FILE: &str = "descriptors.bin";
pub const ORACLE_FILE: &str = "oracle_features.bin";
pub const TRUTH_FILE: &str = "det_truth.txt";
pub const OCC_FILE: &str = "occ.txt";
pub const SEQINFO_FILE: &str = "seqinfo.ini";

#[derive(Debug, Clone, PartialEq)]
pub struct FrameData {
    pub frame: u32,
    pub detections: Vec<InputDetection>,
    pub descriptors: Vec<Vec<f64>>,
    pub oracle_features: Vec<Vec<f64>>,
    pub det_truth: Vec<Option<i64>>,
    pub centers: Vec<(Point2, f64)>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SequenceData {
    pub name: String,
    pub width: u32,
    pub height: u32,
    pub frames: Vec<FrameData>,
    pub gt: Vec<MotRecord>,
    pub has_descriptors: bool,
    pub has_oracle: bool,
    pub has_centers: bool,
}

impl SequenceData {
    pub fn from_synthetic(name: &str, seq: &SyntheticSequence, centers: &CenterLists) -> Self {
        let frames = seq
            .frames
            .iter()
            .zip(centers)
            .map(|(f, c)| FrameData {
                frame: f.frame,
                detections: f
                    .detections
                    .iter()
                    .map(|d| InputDetection { bbox: d.bbox, conf: d.conf })
                    .collect(),
                descriptors: f.descriptors.clone(),
                oracle_features: f.oracle_features.clone(),
                det_truth: f.det_truth.clone(),
                centers: c.clone(),
            })
            .collect();
        Self {
            name: name.to_string(),
            width: seq.config.width,
            height: seq.config.height,
            frames,
            gt: seq.gt_records(),
            has_descriptors: true,
            has_oracle: true,
            has_centers: true,
        }
    }

    pub fn descriptor_sequence(&self) -> DescriptorSequence {
        DescriptorSequence {
            frames: self
                .frames
                .iter()
                .map(|f| DescriptorFrame {
                    frame: f.frame,
                    descriptors: f.descriptors.clone(),
                    ids: f.det_truth.clone(),
                })
                .collect(),
        }
    }

    pub fn seqinfo(&self) -> String {
        format!(
            "[Sequence]\nname={}\nseqLength={}\nimWidth={}\nimHeight={}\n",
            self.name,
            self.frames.len(),
            self.width,
            self.height
        )
    }
}

fn io_err(path: &Path, e: std::io::Error) -> Error {
    Error::Io(std::io::Error::new(e.kind(), format!("{}: {e}", path.display())))
}

fn read_text(path: &Path) -> Result<String> {
    fs::read_to_string(path).map_err(|e| io_err(path, e))
}

fn write_file(path: &Path, bytes: &[u8]) -> Result<()> {
    fs::write(path, bytes).map_err(|e| io_err(path, e))
}

/// Binary row table: magic, version, dim, row count, then per row the
/// frame number (u32) and `dim` f64 values, all little endian.
pub fn encode_rows(dim: usize, rows: &[(u32, &[f64])]) -> Vec<u8> {
    let mut out = Vec::with_capacity(20 + rows.len() * (4 + 8 * dim));
    out.extend_from_slice(DS_MAGIC);
    out.extend_from_slice(&DS_VERSION.to_le_bytes());
    out.extend_from_slice(&(dim as u32).to_le_bytes());
    out.extend_from_slice(&(rows.len() as u64).to_le_bytes());
    for (frame, row) in rows {
        out.extend_from_slice(&frame.to_le_bytes());
        for v in row.iter() {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    out
}

pub fn decode_rows(bytes: &[u8]) -> Result<Vec<(u32, Vec<f64>)>> {
    let bad = |m: &str| Error::InvalidInput(format!("descriptor table: {m}"));
    if bytes.len() < 20 || &bytes[..4] != DS_MAGIC {
        return Err(bad("missing OTDS header"));
    }
    let version = u32::from_le_bytes(bytes[4..8].try_into().expect("4 bytes"));
    if version != DS_VERSION {
        return Err(bad(&format!("unsupported version {version}")));
    }
    let dim = u32::from_le_bytes(bytes[8..12].try_into().expect("4 bytes")) as usize;
    let n = u64::from_le_bytes(bytes[12..20].try_into().expect("8 bytes")) as usize;
    let row_len = 4 + 8 * dim;
    if bytes.len() != 20 + n * row_len {
        return Err(bad("length does not match header"));
    }
    Ok(bytes[20..]
        .chunks_exact(row_len)
        .map(|c| {
            let frame = u32::from_le_bytes(c[..4].try_into().expect("4 bytes"));
            let row = c[4..].chunks_exact(8).map(|b| f64::from_le_bytes(b.try_into().expect("8 bytes"))).collect();
            (frame, row)
        })
        .collect())
}

fn table(frames: &[FrameData], pick: impl Fn(&FrameData) -> &Vec<Vec<f64>>) -> Vec<u8> {
    let rows: Vec<(u32, &[f64])> = frames
        .iter()
        .flat_map(|f| pick(f).iter().map(move |r| (f.frame, r.as_slice())))
        .collect();
    let dim = rows.first().map_or(0, |r| r.1.len());
    encode_rows(dim, &rows)
}

/// Writes every file of the sequence directory except the manifest.
pub fn write_sequence_dir(dir: &Path, seq: &SequenceData) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| io_err(dir, e))?;
    write_file(&dir.join(GT_FILE), mot::write(&seq.gt).as_bytes())?;
    let dets: Vec<MotRecord> = seq
        .frames
        .iter()
        .flat_map(|f| f.detections.iter().map(move |d| MotRecord::new(f.frame, -1, d.bbox, d.conf)))
        .collect();
    write_file(&dir.join(DET_FILE), mot::write(&dets).as_bytes())?;
    if seq.has_descriptors {
        write_file(&dir.join(DESCRIPTOR_FILE), &table(&seq.frames, |f| &f.descriptors))?;
    }
    if seq.has_oracle {
        write_file(&dir.join(ORACLE_FILE), &table(&seq.frames, |f| &f.oracle_features))?;
    }
    let mut truth = String::from("frame,id\n");
    for f in &seq.frames {
        for t in &f.det_truth {
            truth.push_str(&format!("{},{}\n", f.frame, t.unwrap_or(-1)));
        }
    }
    write_file(&dir.join(TRUTH_FILE), truth.as_bytes())?;
    if seq.has_centers {
        let mut occ = String::from("frame,x,y,score\n");
        for f in &seq.frames {
            for (p, s) in &f.centers {
                occ.push_str(&format!("{},{},{},{}\n", f.frame, p.x, p.y, s));
            }
        }
        write_file(&dir.join(OCC_FILE), occ.as_bytes())?;
    }
    write_file(&dir.join(SEQINFO_FILE), seq.seqinfo().as_bytes())
}

fn csv_rows(path: &Path, fields: usize) -> Result<Vec<Vec<String>>> {
    let text = read_text(path)?;
    let mut out = Vec::new();
    for (idx, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() || (idx == 0 && line.starts_with("frame")) {
            continue;
        }
        let cols: Vec<String> = line.split(',').map(|c| c.trim().to_string()).collect();
        if cols.len() != fields {
            return Err(Error::Parse {
                line: idx + 1,
                reason: format!("{}: expected {fields} fields, found {}", path.display(), cols.len()),
            });
        }
        out.push(cols);
    }
    Ok(out)
}

fn num<T: std::str::FromStr>(path: &Path, line: usize, s: &str) -> Result<T> {
    s.parse().map_err(|_| Error::Parse {
        line,
        reason: format!("{}: `{s}` is not a number", path.display()),
    })
}

/// Distributes per-row values onto frames in detection order.
fn attach<T>(frames: &mut [FrameData], rows: Vec<(u32, T)>, what: &str, mut put: impl FnMut(&mut FrameData, T)) -> Result<()> {
    let mut k = 0;
    for f in frames.iter_mut() {
        for _ in 0..f.detections.len() {
            let Some((frame, _)) = rows.get(k) else {
                return Err(Error::InvalidInput(format!("{what} has fewer rows than det.txt")));
            };
            if *frame != f.frame {
                return Err(Error::InvalidInput(format!(
                    "{what} row {k} belongs to frame {frame}, detection to frame {}",
                    f.frame
                )));
            }
            k += 1;
        }
    }
    if k != rows.len() {
        return Err(Error::InvalidInput(format!("{what} has more rows than det.txt")));
    }
    let mut it = rows.into_iter();
    for f in frames.iter_mut() {
        for _ in 0..f.detections.len() {
            put(f, it.next().expect("counted").1);
        }
    }
    Ok(())
}

/// Reads a sequence directory. Only `det.txt` is mandatory; the frame
/// range is `1..=seqLength` when `seqinfo.ini` gives it, otherwise up to
/// the last frame seen in any file.
pub fn read_sequence_dir(dir: &Path) -> Result<SequenceData> {
    let det_path = dir.join(DET_FILE);
    let dets = mot::parse(&read_text(&det_path)?)?;
    let gt_path = dir.join(GT_FILE);
    let gt = if gt_path.exists() { mot::parse(&read_text(&gt_path)?)? } else { Vec::new() };

    let mut name = dir.file_name().map_or_else(|| "seq".to_string(), |n| n.to_string_lossy().into_owned());
    let (mut width, mut height, mut length) = (0u32, 0u32, None);
    let info_path = dir.join(SEQINFO_FILE);
    if info_path.exists() {
        let text = read_text(&info_path)?;
        let body: String = text
            .lines()
            .filter(|l| !l.trim_start().starts_with('['))
            .map(|l| format!("{l}\n"))
            .collect();
        for (k, v) in parse_kv(&body)? {
            match k.as_str() {
                "name" => name = v,
                "seqLength" => length = Some(crate::config::typed::<u32>(&k, &v)?),
                "imWidth" => width = crate::config::typed(&k, &v)?,
                "imHeight" => height = crate::config::typed(&k, &v)?,
                _ => {}
            }
        }
    }
    let last = dets.iter().chain(&gt).map(|r| r.frame).max().unwrap_or(0);
    let length = length.unwrap_or(last).max(last);
    let mut frames: Vec<FrameData> = (1..=length)
        .map(|frame| FrameData {
            frame,
            detections: Vec::new(),
            descriptors: Vec::new(),
            oracle_features: Vec::new(),
            det_truth: Vec::new(),
            centers: Vec::new(),
        })
        .collect();
    // det.txt is already grouped by frame; stable grouping keeps row order.
    let mut sorted = dets;
    sorted.sort_by_key(|r| r.frame);
    for r in &sorted {
        frames[r.frame as usize - 1].detections.push(InputDetection { bbox: r.bbox, conf: r.conf });
    }

    let desc_path = dir.join(DESCRIPTOR_FILE);
    let has_descriptors = desc_path.exists();
    if has_descriptors {
        let rows = decode_rows(&fs::read(&desc_path).map_err(|e| io_err(&desc_path, e))?)?;
        attach(&mut frames, rows, DESCRIPTOR_FILE, |f, r| f.descriptors.push(r))?;
    }
    let oracle_path = dir.join(ORACLE_FILE);
    let has_oracle = oracle_path.exists();
    if has_oracle {
        let rows = decode_rows(&fs::read(&oracle_path).map_err(|e| io_err(&oracle_path, e))?)?;
        attach(&mut frames, rows, ORACLE_FILE, |f, r| f.oracle_features.push(r))?;
    }
    let truth_path = dir.join(TRUTH_FILE);
    if truth_path.exists() {
        let mut rows = Vec::new();
        for (k, cols) in csv_rows(&truth_path, 2)?.into_iter().enumerate() {
            let frame: u32 = num(&truth_path, k + 2, &cols[0])?;
            let id: i64 = num(&truth_path, k + 2, &cols[1])?;
            rows.push((frame, (id >= 0).then_some(id)));
        }
        attach(&mut frames, rows, TRUTH_FILE, |f, t| f.det_truth.push(t))?;
    } else {
        for f in &mut frames {
            f.det_truth = vec![None; f.detections.len()];
        }
    }
    let occ_path = dir.join(OCC_FILE);
    let has_centers = occ_path.exists();
    if has_centers {
        for (k, cols) in csv_rows(&occ_path, 4)?.into_iter().enumerate() {
            let line = k + 2;
            let frame: u32 = num(&occ_path, line, &cols[0])?;
            let p = Point2::new(num(&occ_path, line, &cols[1])?, num(&occ_path, line, &cols[2])?);
            let score: f64 = num(&occ_path, line, &cols[3])?;
            let Some(f) = frame.checked_sub(1).and_then(|i| frames.get_mut(i as usize)) else {
                return Err(Error::Parse {
                    line,
                    reason: format!("{}: frame {frame} out of range", occ_path.display()),
                });
            };
            f.centers.push((p, score));
        }
    }
    Ok(SequenceData {
        name,
        width,
        height,
        frames,
        gt,
        has_descriptors,
        has_oracle,
        has_centers,
    })
}

/// Where the tracker's appearance features come from.
#[derive(Debug, Clone, Copy)]
pub enum FeatureSource<'a> {
    /// Identity signatures from the simulator.
    Oracle,
    /// Raw descriptors used directly.
    Descriptors,
    /// Descriptors passed through a trained embedder.
    Model(&'a EmbedderModel),
}

fn frame_features(f: &FrameData, source: FeatureSource<'_>) -> Result<FeatureSet> {
    let rows = match source {
        FeatureSource::Oracle => f.oracle_features.clone(),
        FeatureSource::Descriptors => f.descriptors.clone(),
        FeatureSource::Model(m) => embed_rows(m, &f.descriptors)?,
    };
    if rows.is_empty() {
        let dim = match source {
            FeatureSource::Model(m) => m.d_out,
            _ => 1,
        };
        return FeatureSet::from_rows(&[], dim);
    }
    FeatureSet::from_rows(&rows, rows[0].len())
}

/// Runs the tracker over every frame and returns MOTChallenge result rows.
pub fn track_sequence(seq: &SequenceData, source: FeatureSource<'_>, cfg: &TrackerConfig) -> Result<Vec<MotRecord>> {
    cfg.validate()?;
    match source {
        FeatureSource::Oracle if !seq.has_oracle => {
            return Err(Error::InvalidInput(format!("{ORACLE_FILE} is missing")));
        }
        FeatureSource::Descriptors | FeatureSource::Model(_) if !seq.has_descriptors => {
            return Err(Error::InvalidInput(format!("{DESCRIPTOR_FILE} is missing")));
        }
        _ => {}
    }
    if cfg.refind && !seq.has_centers {
        return Err(Error::InvalidInput(format!("refinding needs the occlusion channel ({OCC_FILE})")));
    }
    let mut state = TrackerState::new(cfg.clone());
    let mut out = Vec::new();
    for f in &seq.frames {
        let input = FrameInput {
            detections: f.detections.clone(),
            features: frame_features(f, source)?,
            occlusion_centers: f.centers.clone(),
        };
        let (next, output) = step(&state, &input)?;
        state = next;
        out.extend(output.boxes.iter().map(|b| MotRecord::new(f.frame, b.id, b.bbox, 1.0)));
    }
    Ok(out)
}
