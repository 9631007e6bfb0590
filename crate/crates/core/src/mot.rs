//! MOTChallenge text format: `frame,id,x,y,w,h,conf,-1,-1,-1` with 1-based frames.

use std::fmt::Write as _;
use std::path::Path;

use crate::error::{Error, Result};
use crate::geometry::{BoundingBox, Detection};

/// One output row: a box with an identity at a 0-based frame.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TrackRecord {
    pub frame: usize,
    pub id: i64,
    pub bbox: BoundingBox,
    pub confidence: f64,
}

impl TrackRecord {
    pub fn from_detection(d: &Detection) -> Self {
        TrackRecord {
            frame: d.frame,
            id: d.identity.map_or(-1, |i| i as i64),
            bbox: d.bbox,
            confidence: d.confidence,
        }
    }

    pub fn to_detection(&self) -> Result<Detection> {
        let d = Detection::new(self.frame, self.bbox, self.confidence.clamp(0.0, 1.0))?;
        Ok(if self.id >= 0 { d.with_identity(self.id as u64) } else { d })
    }
}

/// All records of one sequence, ordered by frame then id.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct TrackSet {
    pub records: Vec<TrackRecord>,
}

impl TrackSet {
    pub fn new(mut records: Vec<TrackRecord>) -> Self {
        records.sort_by(|a, b| (a.frame, a.id).cmp(&(b.frame, b.id)));
        TrackSet { records }
    }

    pub fn from_detections(dets: &[Detection]) -> Self {
        TrackSet::new(dets.iter().map(TrackRecord::from_detection).collect())
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    pub fn num_frames(&self) -> usize {
        self.records.iter().map(|r| r.frame + 1).max().unwrap_or(0)
    }

    /// Records grouped by frame, indices `0..num_frames`.
    pub fn by_frame(&self) -> Vec<Vec<TrackRecord>> {
        let mut out = vec![Vec::new(); self.num_frames()];
        for r in &self.records {
            out[r.frame].push(*r);
        }
        out
    }

    pub fn ids(&self) -> Vec<i64> {
        let mut ids: Vec<i64> = self.records.iter().map(|r| r.id).collect();
        ids.sort_unstable();
        ids.dedup();
        ids
    }

    pub fn to_mot_string(&self) -> String {
        let mut s = String::new();
        for r in &self.records {
            let b = r.bbox;
            let _ = writeln!(
                s,
                "{},{},{},{},{},{},{},-1,-1,-1",
                r.frame + 1,
                r.id,
                b.x,
                b.y,
                b.w,
                b.h,
                r.confidence
            );
        }
        s
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum MotKind {
    Detections,
    GroundTruth,
}

fn field<T: std::str::FromStr>(parts: &[&str], i: usize, name: &str, path: &Path, line: usize) -> Result<T> {
    let raw = parts.get(i).ok_or_else(|| Error::Parse {
        path: path.to_path_buf(),
        line,
        message: format!("missing field {name}"),
    })?;
    raw.trim().parse().map_err(|_| Error::Parse {
        path: path.to_path_buf(),
        line,
        message: format!("bad {name} {raw:?}"),
    })
}

/// Parses MOT text. `path` is only used in error messages.
pub fn parse_mot(text: &str, kind: MotKind, path: &Path) -> Result<TrackSet> {
    let mut records = Vec::new();
    for (n, raw) in text.lines().enumerate() {
        let line = n + 1;
        let raw = raw.trim();
        if raw.is_empty() {
            continue;
        }
        let parts: Vec<&str> = raw.split(',').collect();
        if parts.len() < 6 {
            return Err(Error::Parse {
                path: path.to_path_buf(),
                line,
                message: format!("expected at least 6 fields, got {}", parts.len()),
            });
        }
        let frame: usize = field(&parts, 0, "frame", path, line)?;
        if frame == 0 {
            return Err(Error::Parse {
                path: path.to_path_buf(),
                line,
                message: "frames are 1-based".into(),
            });
        }
        let id: f64 = field(&parts, 1, "id", path, line)?;
        let x: f64 = field(&parts, 2, "x", path, line)?;
        let y: f64 = field(&parts, 3, "y", path, line)?;
        let w: f64 = field(&parts, 4, "width", path, line)?;
        let h: f64 = field(&parts, 5, "height", path, line)?;
        let confidence: f64 = if parts.len() > 6 {
            field(&parts, 6, "confidence", path, line)?
        } else {
            1.0
        };
        let bbox = BoundingBox::new(x, y, w, h).map_err(|e| Error::Parse {
            path: path.to_path_buf(),
            line,
            message: e.to_string(),
        })?;
        let id = match kind {
            MotKind::Detections => -1,
            MotKind::GroundTruth => {
                if id < 0.0 || id.fract() != 0.0 {
                    return Err(Error::Parse {
                        path: path.to_path_buf(),
                        line,
                        message: format!("ground truth needs a non-negative integer id, got {id}"),
                    });
                }
                id as i64
            }
        };
        records.push(TrackRecord {
            frame: frame - 1,
            id,
            bbox,
            confidence,
        });
    }
    Ok(TrackSet::new(records))
}

pub fn read_mot(path: &Path, kind: MotKind) -> Result<TrackSet> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    parse_mot(&text, kind, path)
}

pub fn write_mot(path: &Path, set: &TrackSet) -> Result<()> {
    if let Some(dir) = path.parent() {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    std::fs::write(path, set.to_mot_string()).map_err(|e| Error::io(path, e))
}

#[cfg(test)]
mod tests {
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    use super::*;

    fn p() -> &'static Path {
        Path::new("mem.txt")
    }

    #[test]
    fn empty_text_gives_empty_set() {
        assert!(parse_mot("", MotKind::Detections, p()).unwrap().is_empty());
    }

    #[test]
    fn single_line_fields() {
        let s = parse_mot("3,7,10.5,20,30,40,0.9,-1,-1,-1\n", MotKind::GroundTruth, p()).unwrap();
        let r = s.records[0];
        assert_eq!((r.frame, r.id), (2, 7));
        assert_eq!((r.bbox.x, r.bbox.y, r.bbox.w, r.bbox.h), (10.5, 20.0, 30.0, 40.0));
        assert_eq!(r.confidence, 0.9);
        let d = parse_mot("3,7,10.5,20,30,40,0.9,-1,-1,-1\n", MotKind::Detections, p()).unwrap();
        assert_eq!(d.records[0].id, -1);
    }

    #[test]
    fn malformed_line_reports_line_number() {
        let err = parse_mot("1,1,0,0,5,5,1\n2,1,zero,0,5,5,1\n", MotKind::GroundTruth, p()).unwrap_err();
        match err {
            Error::Parse { line, .. } => assert_eq!(line, 2),
            e => panic!("unexpected {e:?}"),
        }
        assert!(matches!(parse_mot("0,1,0,0,5,5,1", MotKind::GroundTruth, p()), Err(Error::Parse { line: 1, .. })));
        assert!(matches!(parse_mot("1,1,0,0", MotKind::GroundTruth, p()), Err(Error::Parse { line: 1, .. })));
    }

    #[test]
    fn file_round_trip_is_bit_exact() {
        let mut rng = ChaCha8Rng::seed_from_u64(12);
        let records = (0..200)
            .map(|_| TrackRecord {
                frame: rng.random_range(0..50),
                id: rng.random_range(1..20),
                bbox: BoundingBox::new(
                    rng.random_range(0.0..300.0),
                    rng.random_range(0.0..200.0),
                    rng.random_range(1.0..60.0),
                    rng.random_range(1.0..90.0),
                )
                .unwrap(),
                confidence: rng.random_range(0.0..1.0),
            })
            .collect();
        let set = TrackSet::new(records);
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("res.txt");
        write_mot(&path, &set).unwrap();
        let back = read_mot(&path, MotKind::GroundTruth).unwrap();
        assert_eq!(back, set);
        assert_eq!(back.to_mot_string(), std::fs::read_to_string(&path).unwrap());
    }

    #[test]
    fn missing_file_is_io_error() {
        assert!(matches!(read_mot(Path::new("/nonexistent/x.txt"), MotKind::Detections), Err(Error::Io { .. })));
    }
}
