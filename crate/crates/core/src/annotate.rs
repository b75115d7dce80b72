//! Human end-frame annotations and per-source task-end cutoffs.

use std::fs::{self, File, OpenOptions};
use std::io::Write;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::trajdata::Dataset;

/// Annotations needed before a source gets a cutoff.
pub const DEFAULT_MIN_COUNT: usize = 10;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Annotation {
    pub traj_id: String,
    /// 0-based frame at which the task is judged complete.
    pub end_frame: usize,
    pub annotator: String,
    /// Epoch seconds.
    pub timestamp: u64,
}

/// Fraction of the trajectory covered up to and including the marked frame.
pub fn end_fraction(end_frame: usize, num_frames: usize) -> Result<f64> {
    if end_frame >= num_frames {
        return Err(Error::InvalidArgument(format!(
            "end_frame {end_frame} out of range for {num_frames} frames"
        )));
    }
    Ok((end_frame + 1) as f64 / num_frames as f64)
}

/// Nearest-rank 90th percentile of `fractions`.
pub fn percentile_cutoff(fractions: &[f64], min_count: usize) -> Result<f64> {
    let need = min_count.max(1);
    if fractions.len() < need {
        return Err(Error::InsufficientAnnotations {
            have: fractions.len(),
            need,
        });
    }
    if let Some(f) = fractions.iter().find(|f| !(**f > 0.0 && **f <= 1.0)) {
        return Err(Error::InvalidArgument(format!("fraction {f} outside (0,1]")));
    }
    let mut sorted = fractions.to_vec();
    sorted.sort_by(f64::total_cmp);
    // ceil(0.9 n) in integers
    let rank = (9 * sorted.len()).div_ceil(10);
    Ok(sorted[rank - 1])
}

/// Cutoff for `source` from every annotation that targets one of its trajectories.
pub fn compute_cutoff(ds: &Dataset, source: &str, annotations: &[Annotation], min_count: usize) -> Result<f64> {
    let mut fractions = Vec::new();
    for a in annotations {
        let Some(t) = ds.get(&a.traj_id) else { continue };
        if t.source == source {
            fractions.push(end_fraction(a.end_frame, t.num_frames)?);
        }
    }
    percentile_cutoff(&fractions, min_count)
}

/// Check an annotation against the dataset.
pub fn validate_annotation(ds: &Dataset, a: &Annotation) -> Result<()> {
    let t = ds
        .get(&a.traj_id)
        .ok_or_else(|| Error::InvalidArgument(format!("unknown trajectory {:?}", a.traj_id)))?;
    end_fraction(a.end_frame, t.num_frames).map(|_| ())
}

/// Append-only JSONL annotation store.
#[derive(Debug)]
pub struct AnnotationLog {
    path: PathBuf,
    file: File,
    entries: Vec<Annotation>,
}

impl AnnotationLog {
    /// Open (creating if needed) and replay the log. A torn final line left by a
    /// crash mid-append is dropped and truncated away.
    pub fn open(path: &Path) -> Result<Self> {
        let text = match fs::read_to_string(path) {
            Ok(t) => t,
            Err(e) if e.kind() == std::io::ErrorKind::NotFound => String::new(),
            Err(e) => return Err(Error::io(path, e)),
        };
        let mut entries = Vec::new();
        let mut good_len = 0;
        for (i, line) in text.split_inclusive('\n').enumerate() {
            if !line.ends_with('\n') {
                log::warn!("{}: dropping torn final line", path.display());
                break;
            }
            if !line.trim().is_empty() {
                let a: Annotation = serde_json::from_str(line).map_err(|e| Error::Manifest {
                    line: i + 1,
                    message: e.to_string(),
                })?;
                entries.push(a);
            }
            good_len += line.len();
        }
        let file = OpenOptions::new()
            .create(true)
            .append(true)
            .open(path)
            .map_err(|e| Error::io(path, e))?;
        if good_len < text.len() {
            file.set_len(good_len as u64).map_err(|e| Error::io(path, e))?;
        }
        Ok(AnnotationLog {
            path: path.to_path_buf(),
            file,
            entries,
        })
    }

    pub fn path(&self) -> &Path {
        &self.path
    }

    pub fn entries(&self) -> &[Annotation] {
        &self.entries
    }

    /// Durably append one annotation; returns once the line is synced.
    pub fn append(&mut self, a: Annotation) -> Result<()> {
        let mut line = serde_json::to_string(&a)?;
        line.push('\n');
        self.file
            .write_all(line.as_bytes())
            .and_then(|_| self.file.sync_data())
            .map_err(|e| Error::io(&self.path, e))?;
        self.entries.push(a);
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn tenths(n: usize) -> Vec<f64> {
        (0..n).map(|e| end_fraction(e, n).unwrap()).collect()
    }

    #[test]
    fn examples() {
        assert_eq!(percentile_cutoff(&[0.8; 10], 10).unwrap(), 0.8);
        assert_eq!(percentile_cutoff(&tenths(10), 10).unwrap(), 0.9);
        assert!(matches!(
            percentile_cutoff(&[0.8; 9], 10),
            Err(Error::InsufficientAnnotations { have: 9, need: 10 })
        ));
        assert!(end_fraction(10, 10).is_err());
        assert_eq!(end_fraction(9, 10).unwrap(), 1.0);
    }

    #[test]
    fn nearest_rank_small_sets() {
        // ceil(0.9 n)-th smallest
        assert_eq!(percentile_cutoff(&[0.3], 1).unwrap(), 0.3);
        assert_eq!(percentile_cutoff(&[0.5, 0.2], 1).unwrap(), 0.5);
        let v: Vec<f64> = (1..=20).map(|i| i as f64 / 20.0).collect();
        assert_eq!(percentile_cutoff(&v, 10).unwrap(), 0.9);
        let v: Vec<f64> = (1..=11).map(|i| i as f64 / 11.0).collect();
        assert_eq!(percentile_cutoff(&v, 10).unwrap(), 10.0 / 11.0);
    }

    #[test]
    fn log_replay_and_torn_tail() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("annotations.jsonl");
        let mk = |i: usize| Annotation {
            traj_id: format!("t{i}"),
            end_frame: i,
            annotator: "a".into(),
            timestamp: 1_700_000_000 + i as u64,
        };
        {
            let mut log = AnnotationLog::open(&path).unwrap();
            for i in 0..3 {
                log.append(mk(i)).unwrap();
            }
        }
        let mut f = OpenOptions::new().append(true).open(&path).unwrap();
        f.write_all(b"{\"traj_id\":\"t9\",\"end_fr").unwrap();
        drop(f);
        let mut log = AnnotationLog::open(&path).unwrap();
        assert_eq!(log.entries(), &[mk(0), mk(1), mk(2)]);
        log.append(mk(3)).unwrap();
        let log = AnnotationLog::open(&path).unwrap();
        assert_eq!(log.entries().len(), 4);
        assert_eq!(log.entries()[3], mk(3));
    }

    proptest! {
        #[test]
        fn permutation_invariant(mut v in prop::collection::vec(1usize..=100, 10..40), seed in any::<u64>()) {
            let f: Vec<f64> = v.iter().map(|&k| k as f64 / 100.0).collect();
            let base = percentile_cutoff(&f, 10).unwrap();
            let mut rng = crate::rng::rng_for(&[seed]);
            rand::seq::SliceRandom::shuffle(v.as_mut_slice(), &mut rng);
            let g: Vec<f64> = v.iter().map(|&k| k as f64 / 100.0).collect();
            prop_assert_eq!(percentile_cutoff(&g, 10).unwrap(), base);
        }

        #[test]
        fn larger_annotation_never_lowers(v in prop::collection::vec(1usize..=100, 10..40), extra in 1usize..=100) {
            let f: Vec<f64> = v.iter().map(|&k| k as f64 / 100.0).collect();
            let base = percentile_cutoff(&f, 10).unwrap();
            let x = extra as f64 / 100.0;
            if x >= base {
                let mut g = f.clone();
                g.push(x);
                prop_assert!(percentile_cutoff(&g, 10).unwrap() >= base);
            }
        }
    }
}
