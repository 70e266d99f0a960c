//! Brush strokes over per-frame importance maps.
//!
//! A stroke is a list of dabs. Every dab raises the pixels inside a hard-edged
//! disc by [`DAB_INCREMENT`], clamped at the brush's cap. Pixels already above
//! the cap are left alone, so painting never lowers importance.

use pim_core::ImportanceMap;
use serde::{Deserialize, Serialize};

use crate::error::{Result, ServiceError};

/// Per-dab gain, roughly a tenth of full scale.
pub const DAB_INCREMENT: u8 = 26;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Brush {
    /// 40 px wide, stops at half importance.
    Coarse,
    /// 20 px wide, reaches full importance.
    Fine,
}

impl Brush {
    pub fn diameter(self) -> u32 {
        match self {
            Brush::Coarse => 40,
            Brush::Fine => 20,
        }
    }

    pub fn cap(self) -> u8 {
        match self {
            Brush::Coarse => 127,
            Brush::Fine => 255,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Stroke {
    /// Client-chosen id; resubmitting the same id is a no-op.
    pub id: String,
    pub brush: Brush,
    /// First frame painted.
    pub frame: usize,
    /// Last frame painted (inclusive). Defaults to the end of the video.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub end_frame: Option<usize>,
    pub path: Vec<(u32, u32)>,
}

impl Stroke {
    /// Inclusive frame range for a video of `frames` frames.
    pub fn frames(&self, frames: usize) -> Result<std::ops::RangeInclusive<usize>> {
        let last = self.end_frame.unwrap_or(frames.saturating_sub(1));
        if self.frame > last || last >= frames {
            return Err(ServiceError::BadRequest(format!(
                "frame range {}..={last} outside a {frames}-frame video",
                self.frame
            )));
        }
        Ok(self.frame..=last)
    }

    pub fn check(&self, width: usize, height: usize, frames: usize) -> Result<()> {
        if self.id.is_empty() || self.id.len() > 128 {
            return Err(ServiceError::BadRequest("stroke id must be 1-128 bytes".into()));
        }
        if self.path.is_empty() {
            return Err(ServiceError::BadRequest("empty stroke path".into()));
        }
        if let Some(&(x, y)) = self.path.iter().find(|&&(x, y)| x as usize >= width || y as usize >= height) {
            return Err(ServiceError::BadRequest(format!("point ({x}, {y}) outside {width}x{height} map")));
        }
        self.frames(frames).map(|_| ())
    }
}

/// Applies one dab centred on `(cx, cy)`.
pub fn apply_dab(map: &mut ImportanceMap, brush: Brush, cx: u32, cy: u32) {
    let (w, h) = (map.width() as i64, map.height() as i64);
    let r = i64::from(brush.diameter() / 2);
    let (cx, cy) = (i64::from(cx), i64::from(cy));
    let cap = brush.cap();
    let values = map.values_mut();
    for y in (cy - r).max(0)..=(cy + r).min(h - 1) {
        let dy = y - cy;
        for x in (cx - r).max(0)..=(cx + r).min(w - 1) {
            let dx = x - cx;
            if dx * dx + dy * dy > r * r {
                continue;
            }
            let v = &mut values[(y * w + x) as usize];
            if *v < cap {
                *v = v.saturating_add(DAB_INCREMENT).min(cap);
            }
        }
    }
}

/// Applies every dab of `path`. Points must lie inside the map.
pub fn apply_stroke(map: &mut ImportanceMap, brush: Brush, path: &[(u32, u32)]) -> Result<()> {
    if let Some(&(x, y)) = path.iter().find(|&&(x, y)| x as usize >= map.width() || y as usize >= map.height()) {
        return Err(ServiceError::BadRequest(format!(
            "point ({x}, {y}) outside {}x{} map",
            map.width(),
            map.height()
        )));
    }
    for &(x, y) in path {
        apply_dab(map, brush, x, y);
    }
    Ok(())
}

/// Share of pixels painted at all and share above the coarse cap.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Coverage {
    pub painted: f64,
    pub fine: f64,
}

pub fn coverage(map: &ImportanceMap) -> Coverage {
    let n = map.values().len().max(1) as f64;
    let painted = map.values().iter().filter(|&&v| v > 0).count() as f64 / n;
    let fine = map.values().iter().filter(|&&v| v > Brush::Coarse.cap()).count() as f64 / n;
    Coverage { painted, fine }
}
