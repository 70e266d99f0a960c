//! Turning ΔQP grids into encoder actions.
//!
//! Real encodes go through an external process driven by a command template;
//! the mock encoder applies the same exponential rate model the solver uses,
//! which makes closed-loop bitrate checks possible without an encoder.

use std::fs::File;
use std::io::BufWriter;
use std::path::{Path, PathBuf};
use std::process::Command;

use crate::error::{Error, Result};
use crate::gridmap::{grid_dims, MacroblockGrid};
use crate::media::{save_y4m, write_dqp, DqpSidecar, VideoSequence};
use crate::qpsolver::{rate_weight, DeltaQpGrid};
use crate::{QP_MAX, QP_MIN};

pub const PLACEHOLDERS: [&str; 4] = ["{input}", "{dqp}", "{output}", "{bitrate}"];

#[derive(Debug, Clone)]
pub struct EncodeJob {
    pub video: VideoSequence,
    pub dqp: DqpSidecar,
    pub target_bitrate_kbps: f64,
    /// Base QP used by the mock encoder; a real encoder picks its own.
    pub qp_base: i32,
    pub command_template: Option<String>,
}

impl EncodeJob {
    pub fn validate(&self) -> Result<()> {
        let (w, h) = self.video.dims().ok_or_else(|| Error::Empty("video has no frames".into()))?;
        let (rows, cols) = grid_dims(w, h);
        if (self.dqp.frames, self.dqp.rows, self.dqp.cols) != (self.video.len(), rows, cols) {
            return Err(Error::DimensionMismatch(format!(
                "sidecar is {}x{}x{}, video needs {}x{rows}x{cols}",
                self.dqp.frames,
                self.dqp.rows,
                self.dqp.cols,
                self.video.len()
            )));
        }
        if !(QP_MIN..=QP_MAX).contains(&self.qp_base) {
            return Err(Error::InvalidConfig(format!("qp_base {} outside [0, 51]", self.qp_base)));
        }
        if !(self.target_bitrate_kbps > 0.0) {
            return Err(Error::InvalidConfig("target bitrate must be positive".into()));
        }
        Ok(())
    }

    /// Flat-encode bits per macroblock implied by the target bitrate.
    pub fn default_base_bits_per_mb(&self) -> f64 {
        let (w, h) = self.video.dims().unwrap_or((0, 0));
        let (rows, cols) = grid_dims(w, h);
        self.target_bitrate_kbps * 1000.0 / (self.video.fps() * (rows * cols).max(1) as f64)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct EncodeReport {
    pub frame_bits: Vec<f64>,
    pub total_bits: f64,
    /// Total bits relative to a flat (all-zero ΔQP) encode.
    pub ratio: f64,
    pub effective_qp: Vec<MacroblockGrid<i32>>,
    pub clamp_events: usize,
}

/// `qp_base + ΔQP` per macroblock, clamped to the encoder range, with the
/// number of clamped cells.
pub fn effective_qp(qp_base: i32, dqp: &DeltaQpGrid) -> Result<(MacroblockGrid<i32>, usize)> {
    if !(QP_MIN..=QP_MAX).contains(&qp_base) {
        return Err(Error::InvalidConfig(format!("qp_base {qp_base} outside [0, 51]")));
    }
    let mut clamped = 0;
    let grid = dqp.map(|&d| {
        let q = qp_base + i32::from(d);
        if !(QP_MIN..=QP_MAX).contains(&q) {
            clamped += 1;
        }
        q.clamp(QP_MIN, QP_MAX)
    });
    Ok((grid, clamped))
}

pub fn mock_encode(job: &EncodeJob, base_bits_per_mb: f64) -> Result<EncodeReport> {
    job.validate()?;
    if !(base_bits_per_mb > 0.0) {
        return Err(Error::InvalidConfig("base bits per macroblock must be positive".into()));
    }
    let (rows, cols) = (job.dqp.rows, job.dqp.cols);
    let mut frame_bits = Vec::with_capacity(job.dqp.frames);
    let mut effective = Vec::with_capacity(job.dqp.frames);
    let mut clamp_events = 0;
    for f in 0..job.dqp.frames {
        let grid = MacroblockGrid::new(rows, cols, job.dqp.frame(f).to_vec())?;
        let bits: f64 = grid.cells().iter().map(|&d| base_bits_per_mb * rate_weight(f64::from(d))).sum();
        let (qp, clamped) = effective_qp(job.qp_base, &grid)?;
        frame_bits.push(bits);
        effective.push(qp);
        clamp_events += clamped;
    }
    let total_bits: f64 = frame_bits.iter().sum();
    let flat = (job.dqp.frames * rows * cols) as f64 * base_bits_per_mb;
    Ok(EncodeReport { frame_bits, total_bits, ratio: total_bits / flat, effective_qp: effective, clamp_events })
}

/// Checks that a command template names every placeholder.
pub fn validate_template(template: &str) -> Result<()> {
    if template.split_whitespace().next().is_none() {
        return Err(Error::InvalidConfig("empty encoder command template".into()));
    }
    for p in PLACEHOLDERS {
        if !template.contains(p) {
            return Err(Error::MissingPlaceholder(p));
        }
    }
    Ok(())
}

/// Expands a template into program and arguments. Placeholders are replaced
/// after splitting on whitespace, so substituted paths may contain spaces.
pub fn expand_template(template: &str, input: &Path, dqp: &Path, output: &Path, bitrate_kbps: f64) -> Vec<String> {
    let bitrate = if bitrate_kbps.fract() == 0.0 { format!("{}", bitrate_kbps as i64) } else { bitrate_kbps.to_string() };
    template
        .split_whitespace()
        .map(|tok| {
            tok.replace("{input}", &input.to_string_lossy())
                .replace("{dqp}", &dqp.to_string_lossy())
                .replace("{output}", &output.to_string_lossy())
                .replace("{bitrate}", &bitrate)
        })
        .collect()
}

/// Writes the job's video and sidecar into `workdir`, runs the configured
/// encoder and returns the path of the file it produced.
pub fn drive_encoder(job: &EncodeJob, workdir: &Path) -> Result<PathBuf> {
    let template = job
        .command_template
        .as_deref()
        .ok_or_else(|| Error::InvalidConfig("no encoder command template configured".into()))?;
    validate_template(template)?;
    job.validate()?;
    std::fs::create_dir_all(workdir)?;
    let input = workdir.join("input.y4m");
    let dqp = workdir.join("input.dqp");
    let output = workdir.join("encoded.out");
    save_y4m(&job.video, BufWriter::new(File::create(&input)?))?;
    write_dqp(&job.dqp, BufWriter::new(File::create(&dqp)?))?;
    if output.exists() {
        std::fs::remove_file(&output)?;
    }
    let argv = expand_template(template, &input, &dqp, &output, job.target_bitrate_kbps);
    let result = Command::new(&argv[0]).args(&argv[1..]).output()?;
    if !result.status.success() {
        return Err(Error::EncoderFailed {
            status: result.status.to_string(),
            stderr: String::from_utf8_lossy(&result.stderr).trim().to_string(),
        });
    }
    if !output.is_file() {
        return Err(Error::MissingOutput(output.display().to_string()));
    }
    Ok(output)
}
