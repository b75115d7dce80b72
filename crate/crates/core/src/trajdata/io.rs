//! `manifest.jsonl` plus one `.rbmf` frame file per trajectory.
//!
//! Frame file layout, all little-endian:
//!
//! ```text
//! b"RBMF" | u32 version=1 | u32 T | u32 C | u32 H | u32 W | T·C·H·W × f32
//! ```

use std::collections::HashSet;
use std::fs::{self, File, OpenOptions};
use std::io::{BufRead, BufReader, Read, Write};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::{Dataset, Frame, Quality, Trajectory};
use crate::error::{Error, Result};

pub const FRAME_MAGIC: &[u8; 4] = b"RBMF";
pub const FRAME_VERSION: u32 = 1;
pub const MANIFEST_FILE: &str = "manifest.jsonl";
const HEADER_BYTES: usize = 4 + 5 * 4;

/// One manifest line: the trajectory metadata plus the frame file name.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ManifestRecord {
    pub id: String,
    pub source: String,
    pub instruction: String,
    pub quality: Quality,
    #[serde(default)]
    pub final_progress: Option<f64>,
    pub num_frames: usize,
    #[serde(default)]
    pub cutoff: Option<f64>,
    pub frame_file: String,
}

impl ManifestRecord {
    fn of(traj: &Trajectory, frame_file: String) -> Self {
        ManifestRecord {
            id: traj.id.clone(),
            source: traj.source.clone(),
            instruction: traj.instruction.clone(),
            quality: traj.quality,
            final_progress: traj.final_progress,
            num_frames: traj.num_frames,
            cutoff: traj.cutoff,
            frame_file,
        }
    }

    fn check(&self) -> std::result::Result<(), String> {
        if self.num_frames == 0 {
            return Err("num_frames must be >= 1".into());
        }
        if let Some(p) = self.final_progress {
            if !(0.0..=1.0).contains(&p) {
                return Err(format!("final_progress {p} outside [0,1]"));
            }
        }
        if let Some(c) = self.cutoff {
            if !(c > 0.0 && c <= 1.0) {
                return Err(format!("cutoff {c} outside (0,1]"));
            }
        }
        if self.frame_file.contains('/') || self.frame_file.contains("..") {
            return Err(format!("frame_file {:?} must be a bare file name", self.frame_file));
        }
        Ok(())
    }
}

pub fn write_frame_file(path: &Path, frames: &[Frame]) -> Result<()> {
    let (c, h, w) = frames.first().map(Frame::shape).unwrap_or((0, 0, 0));
    let mut buf = Vec::with_capacity(HEADER_BYTES + frames.len() * c * h * w * 4);
    buf.extend_from_slice(FRAME_MAGIC);
    for v in [FRAME_VERSION, frames.len() as u32, c as u32, h as u32, w as u32] {
        buf.extend_from_slice(&v.to_le_bytes());
    }
    for f in frames {
        if f.shape() != (c, h, w) {
            return Err(Error::ShapeMismatch {
                path: path.to_path_buf(),
                detail: format!("frame shape {:?} differs from {:?}", f.shape(), (c, h, w)),
            });
        }
        for v in &f.data {
            buf.extend_from_slice(&v.to_le_bytes());
        }
    }
    fs::write(path, buf).map_err(|e| Error::io(path, e))
}

pub fn read_frame_file(path: &Path) -> Result<Vec<Frame>> {
    let mut bytes = Vec::new();
    File::open(path)
        .and_then(|mut f| f.read_to_end(&mut bytes))
        .map_err(|e| Error::io(path, e))?;
    if bytes.len() < HEADER_BYTES {
        return Err(Error::ShapeMismatch {
            path: path.to_path_buf(),
            detail: format!("file is {} bytes, shorter than the header", bytes.len()),
        });
    }
    let magic: [u8; 4] = bytes[0..4].try_into().expect("4 bytes");
    if &magic != FRAME_MAGIC {
        return Err(Error::BadMagic {
            path: path.to_path_buf(),
            found: magic,
        });
    }
    let word = |i: usize| u32::from_le_bytes(bytes[4 + 4 * i..8 + 4 * i].try_into().expect("4 bytes"));
    let version = word(0);
    if version != FRAME_VERSION {
        return Err(Error::UnsupportedVersion {
            path: path.to_path_buf(),
            found: version,
        });
    }
    let (t, c, h, w) = (word(1) as usize, word(2) as usize, word(3) as usize, word(4) as usize);
    let per_frame = c * h * w;
    let expected = t * per_frame * 4;
    let body = &bytes[HEADER_BYTES..];
    if body.len() != expected {
        return Err(Error::ShapeMismatch {
            path: path.to_path_buf(),
            detail: format!(
                "header T={t} C={c} H={h} W={w} needs {expected} payload bytes, found {}",
                body.len()
            ),
        });
    }
    let floats: Vec<f32> = body
        .chunks_exact(4)
        .map(|b| f32::from_le_bytes(b.try_into().expect("4 bytes")))
        .collect();
    Ok(floats
        .chunks_exact(per_frame.max(1))
        .take(t)
        .map(|chunk| Frame {
            channels: c,
            height: h,
            width: w,
            data: chunk.to_vec(),
        })
        .collect())
}

fn read_records(dir: &Path) -> Result<Vec<(usize, ManifestRecord)>> {
    let path = dir.join(MANIFEST_FILE);
    let file = File::open(&path).map_err(|e| Error::io(&path, e))?;
    let mut out = Vec::new();
    for (i, line) in BufReader::new(file).lines().enumerate() {
        let lineno = i + 1;
        let line = line.map_err(|e| Error::io(&path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        let rec: ManifestRecord = serde_json::from_str(&line).map_err(|e| Error::Manifest {
            line: lineno,
            message: e.to_string(),
        })?;
        rec.check().map_err(|message| Error::Manifest {
            line: lineno,
            message,
        })?;
        out.push((lineno, rec));
    }
    Ok(out)
}

/// Manifest records only, without touching frame files.
pub fn read_manifest(dir: &Path) -> Result<Vec<ManifestRecord>> {
    Ok(read_records(dir)?.into_iter().map(|(_, r)| r).collect())
}

/// Load every trajectory listed in `dir/manifest.jsonl`.
pub fn load_manifest(dir: &Path) -> Result<Dataset> {
    let mut ids = HashSet::new();
    let mut shape = None;
    let mut trajectories = Vec::new();
    for (lineno, rec) in read_records(dir)? {
        if !ids.insert(rec.id.clone()) {
            return Err(Error::Manifest {
                line: lineno,
                message: format!("duplicate id {:?}", rec.id),
            });
        }
        let path = dir.join(&rec.frame_file);
        let frames = read_frame_file(&path)?;
        if frames.len() != rec.num_frames {
            return Err(Error::ShapeMismatch {
                path,
                detail: format!("manifest line {lineno} says {} frames, file has {}", rec.num_frames, frames.len()),
            });
        }
        let own = frames[0].shape();
        match shape {
            None => shape = Some(own),
            Some(s) if s != own => {
                return Err(Error::ShapeMismatch {
                    path,
                    detail: format!("frame shape {own:?} differs from dataset shape {s:?}"),
                })
            }
            _ => {}
        }
        trajectories.push(Trajectory {
            id: rec.id,
            source: rec.source,
            instruction: rec.instruction,
            quality: rec.quality,
            final_progress: rec.final_progress,
            num_frames: rec.num_frames,
            frames,
            cutoff: rec.cutoff,
        });
    }
    Ok(Dataset { trajectories })
}

fn frame_file_name(id: &str) -> String {
    let clean: String = id
        .chars()
        .map(|c| if c.is_ascii_alphanumeric() || "-_.".contains(c) { c } else { '_' })
        .collect();
    format!("{clean}.rbmf")
}

/// Appends trajectories to a dataset directory (single writer).
pub struct DatasetWriter {
    dir: PathBuf,
    ids: HashSet<String>,
    files: HashSet<String>,
    manifest: File,
}

impl DatasetWriter {
    pub fn open(dir: &Path) -> Result<Self> {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let manifest_path = dir.join(MANIFEST_FILE);
        let (ids, files) = if manifest_path.exists() {
            let recs = read_manifest(dir)?;
            (
                recs.iter().map(|r| r.id.clone()).collect(),
                recs.into_iter().map(|r| r.frame_file).collect(),
            )
        } else {
            (HashSet::new(), HashSet::new())
        };
        let manifest = OpenOptions::new()
            .create(true)
            .append(true)
            .open(&manifest_path)
            .map_err(|e| Error::io(&manifest_path, e))?;
        Ok(DatasetWriter {
            dir: dir.to_path_buf(),
            ids,
            files,
            manifest,
        })
    }

    pub fn write(&mut self, traj: &Trajectory) -> Result<()> {
        let problems = traj.violations();
        if !problems.is_empty() {
            return Err(Error::InvalidTrajectory {
                id: traj.id.clone(),
                message: problems.join("; "),
            });
        }
        if self.ids.contains(&traj.id) {
            return Err(Error::DuplicateId(traj.id.clone()));
        }
        let mut name = frame_file_name(&traj.id);
        let mut n = 1;
        while self.files.contains(&name) {
            name = format!("{}-{n}.rbmf", name.trim_end_matches(".rbmf"));
            n += 1;
        }
        write_frame_file(&self.dir.join(&name), &traj.frames)?;
        let mut line = serde_json::to_string(&ManifestRecord::of(traj, name.clone()))?;
        line.push('\n');
        let manifest_path = self.dir.join(MANIFEST_FILE);
        self.manifest
            .write_all(line.as_bytes())
            .and_then(|_| self.manifest.flush())
            .map_err(|e| Error::io(&manifest_path, e))?;
        self.ids.insert(traj.id.clone());
        self.files.insert(name);
        Ok(())
    }
}

/// Write one trajectory (frame file plus manifest line) into `dir`.
pub fn write_trajectory(traj: &Trajectory, dir: &Path) -> Result<()> {
    DatasetWriter::open(dir)?.write(traj)
}

/// Rewrite the manifest atomically with `cutoff` set on every record of `source`.
pub fn set_source_cutoff(dir: &Path, source: &str, cutoff: f64) -> Result<usize> {
    if !(cutoff > 0.0 && cutoff <= 1.0) {
        return Err(Error::InvalidArgument(format!("cutoff {cutoff} outside (0,1]")));
    }
    let mut recs = read_manifest(dir)?;
    let mut touched = 0;
    for r in recs.iter_mut().filter(|r| r.source == source) {
        r.cutoff = Some(cutoff);
        touched += 1;
    }
    let mut text = String::new();
    for r in &recs {
        text.push_str(&serde_json::to_string(r)?);
        text.push('\n');
    }
    let tmp = dir.join(format!("{MANIFEST_FILE}.tmp"));
    fs::write(&tmp, text).map_err(|e| Error::io(&tmp, e))?;
    let dst = dir.join(MANIFEST_FILE);
    fs::rename(&tmp, &dst).map_err(|e| Error::io(&dst, e))?;
    Ok(touched)
}
