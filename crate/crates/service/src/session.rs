//! Annotation sessions: working maps, stroke history and the comparison gate.
//!
//! Working maps are never stored. They are a pure function of the stroke
//! history and are rebuilt by replaying it whenever a session is restored.

use std::path::PathBuf;

use pim_core::encode::{mock_encode, EncodeJob};
use pim_core::gridmap::pool_to_grid;
use pim_core::qpsolver::solve_dqp;
use pim_core::{DqpSidecar, ImportanceMap, SolverConfig, VideoSequence};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::brush::{apply_stroke, coverage, Coverage, Stroke};
use crate::error::{Result, ServiceError};

pub const RECORD_VERSION: u32 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SessionState {
    Painting,
    Comparing,
    Accepted,
    Rejected,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Side {
    A,
    B,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PendingComparison {
    pub shuffle_key: String,
    /// Side the re-encoded video was shown on.
    pub pim_side: Side,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Verdict {
    pub shuffle_key: String,
    pub choice: Side,
    pub pim_side: Side,
    pub accepted: bool,
    /// Strokes painted when the comparison was made.
    pub strokes: usize,
}

/// The persisted part of a session.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SessionRecord {
    pub version: u32,
    pub session_id: String,
    pub annotator: String,
    pub video_id: String,
    pub state: SessionState,
    pub strokes: Vec<Stroke>,
    #[serde(default)]
    pub pending: Option<PendingComparison>,
    #[serde(default)]
    pub verdicts: Vec<Verdict>,
}

/// Stable id for an (annotator, video) pair.
pub fn session_id(annotator: &str, video_id: &str) -> String {
    let mut h = Sha256::new();
    h.update(annotator.as_bytes());
    h.update([0u8]);
    h.update(video_id.as_bytes());
    hex::encode(&h.finalize()[..16])
}

/// Annotator and video ids travel in URL paths and file names.
pub fn check_name(kind: &str, name: &str) -> Result<()> {
    let ok = !name.is_empty()
        && name.len() <= 128
        && !name.starts_with('.')
        && name.chars().all(|c| c.is_ascii_alphanumeric() || matches!(c, '-' | '_' | '.' | '@'));
    if ok {
        Ok(())
    } else {
        Err(ServiceError::BadRequest(format!("invalid {kind} {name:?}")))
    }
}

#[derive(Debug, Clone)]
pub struct Session {
    pub record: SessionRecord,
    maps: Vec<ImportanceMap>,
}

impl Session {
    pub fn new(annotator: &str, video_id: &str, video: &VideoSequence) -> Result<Self> {
        check_name("annotator", annotator)?;
        check_name("video id", video_id)?;
        let (w, h) = video.dims().ok_or_else(|| ServiceError::BadRequest("video has no frames".into()))?;
        let record = SessionRecord {
            version: RECORD_VERSION,
            session_id: session_id(annotator, video_id),
            annotator: annotator.into(),
            video_id: video_id.into(),
            state: SessionState::Painting,
            strokes: Vec::new(),
            pending: None,
            verdicts: Vec::new(),
        };
        Ok(Self { record, maps: vec![ImportanceMap::filled(w, h, 0)?; video.len()] })
    }

    /// Rebuilds a session from its record by replaying the strokes.
    pub fn restore(record: SessionRecord, video: &VideoSequence) -> Result<Self> {
        let corrupt = |reason: String| ServiceError::Corrupt { id: record.session_id.clone(), reason };
        if record.version != RECORD_VERSION {
            return Err(corrupt(format!("unknown record version {}", record.version)));
        }
        if record.session_id != session_id(&record.annotator, &record.video_id) {
            return Err(corrupt("id does not match annotator and video".into()));
        }
        if (record.state == SessionState::Comparing) != record.pending.is_some() {
            return Err(corrupt("comparison state and pending key disagree".into()));
        }
        let mut s = Session::new(&record.annotator, &record.video_id, video).map_err(|e| corrupt(e.to_string()))?;
        for stroke in &record.strokes {
            s.paint(stroke).map_err(|e| corrupt(format!("stroke {}: {e}", stroke.id)))?;
        }
        s.record = record;
        Ok(s)
    }

    pub fn maps(&self) -> &[ImportanceMap] {
        &self.maps
    }

    pub fn coverage(&self) -> Vec<Coverage> {
        self.maps.iter().map(coverage).collect()
    }

    fn paint(&mut self, stroke: &Stroke) -> Result<()> {
        let (w, h) = (self.maps[0].width(), self.maps[0].height());
        stroke.check(w, h, self.maps.len())?;
        for f in stroke.frames(self.maps.len())? {
            apply_stroke(&mut self.maps[f], stroke.brush, &stroke.path)?;
        }
        Ok(())
    }

    /// Applies a stroke. Returns `false` for a replay of an already applied id.
    pub fn apply(&mut self, stroke: Stroke) -> Result<bool> {
        if let Some(seen) = self.record.strokes.iter().find(|s| s.id == stroke.id) {
            return if *seen == stroke {
                Ok(false)
            } else {
                Err(ServiceError::Conflict(format!("stroke id {} reused with different content", stroke.id)))
            };
        }
        if self.record.state == SessionState::Comparing {
            return Err(ServiceError::Conflict("session is comparing; submit a choice first".into()));
        }
        self.paint(&stroke)?;
        self.record.strokes.push(stroke);
        self.record.state = SessionState::Painting;
        Ok(true)
    }

    pub fn start_comparison(&mut self, shuffle_key: String, pim_side: Side) -> Result<()> {
        match self.record.state {
            SessionState::Painting | SessionState::Rejected => {}
            s => return Err(ServiceError::Conflict(format!("cannot start a comparison from {s:?}"))),
        }
        self.record.pending = Some(PendingComparison { shuffle_key, pim_side });
        self.record.state = SessionState::Comparing;
        Ok(())
    }

    /// Accepts only if `choice` is the side showing the re-encoded video.
    pub fn submit(&mut self, choice: Side, shuffle_key: &str) -> Result<Verdict> {
        let pending = match (&self.record.state, &self.record.pending) {
            (SessionState::Comparing, Some(p)) => p.clone(),
            _ => return Err(ServiceError::Conflict("no comparison in progress".into())),
        };
        if pending.shuffle_key != shuffle_key {
            return Err(ServiceError::BadRequest("unknown or stale shuffle key".into()));
        }
        let accepted = choice == pending.pim_side;
        let verdict = Verdict {
            shuffle_key: pending.shuffle_key,
            choice,
            pim_side: pending.pim_side,
            accepted,
            strokes: self.record.strokes.len(),
        };
        self.record.verdicts.push(verdict.clone());
        self.record.pending = None;
        self.record.state = if accepted { SessionState::Accepted } else { SessionState::Rejected };
        Ok(verdict)
    }
}

#[derive(Debug, Clone)]
pub struct PreviewConfig {
    pub solver: SolverConfig,
    pub target_bitrate_kbps: f64,
    pub qp_base: i32,
}

impl Default for PreviewConfig {
    fn default() -> Self {
        Self { solver: SolverConfig::default(), target_bitrate_kbps: 1000.0, qp_base: 30 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct FramePreview {
    pub offset: f64,
    pub rounded_ratio: f64,
    /// Row-major ΔQP grid.
    pub dqp: Vec<i8>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Preview {
    pub rows: usize,
    pub cols: usize,
    pub frames: Vec<FramePreview>,
    /// Simulated bits relative to a flat encode.
    pub ratio: f64,
    pub total_bits: f64,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub encoded: Option<PathBuf>,
    #[serde(skip)]
    pub sidecar: Option<DqpSidecar>,
}

/// Pool, solve and mock-encode the working maps.
pub fn preview(maps: &[ImportanceMap], video: &VideoSequence, cfg: &PreviewConfig) -> Result<Preview> {
    let (w, h) = video.dims().ok_or_else(|| ServiceError::BadRequest("video has no frames".into()))?;
    let mut frames = Vec::with_capacity(maps.len());
    let mut values = Vec::new();
    let (mut rows, mut cols) = (0, 0);
    for map in maps {
        let grid = pool_to_grid(map, w, h)?;
        let (dqp, report) = solve_dqp(&grid, &cfg.solver)?;
        (rows, cols) = (dqp.rows(), dqp.cols());
        values.extend_from_slice(dqp.cells());
        frames.push(FramePreview { offset: report.offset, rounded_ratio: report.rounded_ratio, dqp: dqp.into_cells() });
    }
    let sidecar = DqpSidecar::new(maps.len(), rows, cols, values)?;
    let job = EncodeJob {
        video: video.clone(),
        dqp: sidecar.clone(),
        target_bitrate_kbps: cfg.target_bitrate_kbps,
        qp_base: cfg.qp_base,
        command_template: None,
    };
    let report = mock_encode(&job, job.default_base_bits_per_mb())?;
    Ok(Preview { rows, cols, frames, ratio: report.ratio, total_bits: report.total_bits, encoded: None, sidecar: Some(sidecar) })
}
