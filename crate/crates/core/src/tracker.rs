//! Online tracking: trajectory tokens over a sliding window, per-frame softmax
//! association, Hungarian assignment and track lifecycle.

use serde::{Deserialize, Serialize};

use crate::assignment::assign_above;
use crate::association::{
    absent_scores, build_trajectory_token, empty_trajectory_token, normalize, normalize_with_absent, score_pairs,
    AssociationProbabilities, TrajectoryToken,
};
use crate::csc_attention::{tokens_for_frame, CscToken};
use crate::error::{Error, Result};
use crate::geometry::Detection;
use crate::harness::Sequence;
use crate::imaging::Image;
use crate::model::Model;
use crate::mot::{TrackRecord, TrackSet};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TrackState {
    Active,
    /// Frames since the last match.
    Lost(usize),
    Terminated,
}

#[derive(Debug, Clone, PartialEq)]
pub struct HistoryEntry {
    pub frame: usize,
    pub detection: Detection,
    pub token: CscToken,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Trajectory {
    pub id: i64,
    pub history: Vec<HistoryEntry>,
    pub state: TrackState,
}

impl Trajectory {
    pub fn last_frame(&self) -> usize {
        self.history.last().map_or(0, |h| h.frame)
    }

    /// Tokens from the last `window` frames before `frame`, capped at `horizon`.
    /// With `keep_stale`, a trajectory with nothing in the window falls back to
    /// its most recent tokens.
    fn token(&self, frame: usize, cfg: &TrackerConfig) -> Option<Result<TrajectoryToken>> {
        let recent: Vec<CscToken> = self
            .history
            .iter()
            .filter(|h| h.frame + cfg.window > frame)
            .map(|h| h.token.clone())
            .collect();
        let tokens = if recent.is_empty() {
            if !cfg.keep_stale {
                return None;
            }
            let start = self.history.len().saturating_sub(cfg.horizon);
            self.history[start..].iter().map(|h| h.token.clone()).collect()
        } else {
            recent
        };
        Some(build_trajectory_token(&tokens, cfg.horizon))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrackerConfig {
    /// Minimum association probability for a match.
    pub beta: f64,
    pub horizon: usize,
    /// Sliding window length in frames.
    pub window: usize,
    /// Missed frames a lost track survives.
    pub max_age: usize,
    /// Adds the no-detection logit to every softmax group.
    pub absent: bool,
    /// Lost tracks keep competing with their last tokens until they terminate.
    pub keep_stale: bool,
    /// Tokens of recently unassociated detections kept for the empty row.
    pub pool_size: usize,
    pub seed: u64,
}

impl Default for TrackerConfig {
    fn default() -> Self {
        TrackerConfig {
            beta: 0.3,
            horizon: 24,
            window: 24,
            max_age: 30,
            absent: true,
            keep_stale: true,
            pool_size: 64,
            seed: 0,
        }
    }
}

impl TrackerConfig {
    pub fn validate(&self) -> Result<()> {
        if !self.beta.is_finite() || self.beta < 0.0 {
            return Err(Error::Config(format!("beta {} must be non-negative; above 1 disables matching", self.beta)));
        }
        if self.horizon == 0 || self.window == 0 || self.max_age == 0 {
            return Err(Error::Config("horizon, window and max_age must be at least 1".into()));
        }
        Ok(())
    }
}

/// What the tracker saw and decided at one frame.
#[derive(Debug, Clone, PartialEq)]
pub struct FrameAssociation {
    pub frame: usize,
    /// Ids of the scored trajectories, one per probability row.
    pub track_ids: Vec<i64>,
    pub probs: AssociationProbabilities,
    /// Accepted `(row, detection)` pairs.
    pub matches: Vec<(usize, usize)>,
}

pub struct Tracker<'m> {
    model: &'m Model,
    cfg: TrackerConfig,
    trajectories: Vec<Trajectory>,
    next_id: i64,
    last_frame: Option<usize>,
    pool: Vec<CscToken>,
    records: Vec<TrackRecord>,
    last: Option<FrameAssociation>,
}

impl<'m> Tracker<'m> {
    pub fn new(model: &'m Model, cfg: TrackerConfig) -> Result<Self> {
        cfg.validate()?;
        Ok(Tracker {
            model,
            cfg,
            trajectories: Vec::new(),
            next_id: 1,
            last_frame: None,
            pool: Vec::new(),
            records: Vec::new(),
            last: None,
        })
    }

    pub fn config(&self) -> &TrackerConfig {
        &self.cfg
    }

    pub fn trajectories(&self) -> &[Trajectory] {
        &self.trajectories
    }

    pub fn last_association(&self) -> Option<&FrameAssociation> {
        self.last.as_ref()
    }

    /// Everything emitted so far.
    pub fn track_set(&self) -> TrackSet {
        TrackSet::new(self.records.clone())
    }

    /// Processes one frame and returns the records emitted for it.
    pub fn step(&mut self, frame: usize, image: &Image, detections: &[Detection]) -> Result<Vec<TrackRecord>> {
        if let Some(last) = self.last_frame {
            if frame <= last {
                return Err(Error::OutOfOrder { last, got: frame });
            }
        }
        if let Some(d) = detections.iter().find(|d| d.frame != frame) {
            return Err(Error::InvalidArgument(format!(
                "detection for frame {} passed at frame {frame}",
                d.frame
            )));
        }
        let tokens = tokens_for_frame(detections, image, self.model)?;

        let mut rows = Vec::new();
        let mut traj_tokens = Vec::new();
        for (k, t) in self.trajectories.iter().enumerate() {
            if t.state == TrackState::Terminated {
                continue;
            }
            if let Some(tok) = t.token(frame, &self.cfg) {
                rows.push(k);
                traj_tokens.push(tok?);
            }
        }

        let mut matched_det = vec![None; detections.len()];
        self.last = None;
        if !rows.is_empty() && !detections.is_empty() {
            let scores = score_pairs(&traj_tokens, &tokens, self.model)?;
            let seed = self.cfg.seed.wrapping_add(frame as u64);
            let empty = empty_trajectory_token(&self.pool, seed, self.model);
            let empty_traj = build_trajectory_token(std::slice::from_ref(&empty), 1)?;
            let empty_scores = score_pairs(std::slice::from_ref(&empty_traj), &tokens, self.model)?
                .raw
                .remove(0);
            let det_frames = vec![frame; detections.len()];
            let probs = if self.cfg.absent {
                let mut all = traj_tokens.clone();
                all.push(empty_traj);
                let absent = absent_scores(&all, self.model)?;
                normalize_with_absent(&scores, &det_frames, &empty_scores, &absent)?
            } else {
                normalize(&scores, &det_frames, &empty_scores)?
            };
            let matches = assign_above(&probs.probs[..rows.len()], self.cfg.beta)?;
            for &(r, i) in &matches {
                matched_det[i] = Some(rows[r]);
            }
            self.last = Some(FrameAssociation {
                frame,
                track_ids: rows.iter().map(|&k| self.trajectories[k].id).collect(),
                probs,
                matches,
            });
        }

        let mut hit = vec![false; self.trajectories.len()];
        let mut out = Vec::with_capacity(detections.len());
        for (i, (d, tok)) in detections.iter().zip(tokens).enumerate() {
            let entry = HistoryEntry {
                frame,
                detection: *d,
                token: tok,
            };
            let id = match matched_det[i] {
                Some(k) => {
                    hit[k] = true;
                    let t = &mut self.trajectories[k];
                    t.history.push(entry);
                    t.state = TrackState::Active;
                    t.id
                }
                None => {
                    let id = self.next_id;
                    self.next_id += 1;
                    self.pool.push(entry.token.clone());
                    self.trajectories.push(Trajectory {
                        id,
                        history: vec![entry],
                        state: TrackState::Active,
                    });
                    hit.push(true);
                    id
                }
            };
            out.push(TrackRecord {
                frame,
                id,
                bbox: d.bbox,
                confidence: d.confidence,
            });
        }
        if self.pool.len() > self.cfg.pool_size {
            let excess = self.pool.len() - self.cfg.pool_size;
            self.pool.drain(..excess);
        }
        for (t, &h) in self.trajectories.iter_mut().zip(&hit) {
            if h {
                continue;
            }
            t.state = match t.state {
                TrackState::Active => TrackState::Lost(1),
                TrackState::Lost(m) => TrackState::Lost(m + 1),
                TrackState::Terminated => TrackState::Terminated,
            };
            if let TrackState::Lost(m) = t.state {
                if m > self.cfg.max_age {
                    t.state = TrackState::Terminated;
                }
            }
        }
        self.last_frame = Some(frame);
        out.sort_by_key(|r| r.id);
        self.records.extend(out.iter().copied());
        Ok(out)
    }
}

/// Runs the tracker over every frame of a sequence using its detections.
pub fn track_sequence(seq: &Sequence, model: &Model, cfg: &TrackerConfig) -> Result<TrackSet> {
    track_frames(&seq.frames, &seq.detections, model, cfg)
}

/// As [`track_sequence`] with an explicit detection list.
pub fn track_frames(frames: &[Image], detections: &[Detection], model: &Model, cfg: &TrackerConfig) -> Result<TrackSet> {
    if frames.is_empty() {
        return Err(Error::Empty("sequence has no frames".into()));
    }
    let by_frame = crate::harness::group_by_frame(detections, frames.len());
    let mut tracker = Tracker::new(model, cfg.clone())?;
    for (f, (image, dets)) in frames.iter().zip(&by_frame).enumerate() {
        tracker.step(f, image, dets)?;
    }
    Ok(tracker.track_set())
}
