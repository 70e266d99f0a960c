//! Model input features at macroblock resolution.
//!
//! Frame colour, high-pass filters and block motion are computed here.
//! Saliency, segmentation and embedding channels come from external models as
//! `FT01` tensors. Everything is pooled to the macroblock grid and stacked in a
//! fixed channel order (see [`assemble`]).

use crate::error::{Error, Result};
use crate::gridmap::{grid_dims, pool_plane, MacroblockGrid};
use crate::media::{FeatureTensor, Frame, VideoSequence};
use crate::metrics::{MetricGrid, MetricKind};
use crate::MB_SIZE;

/// Bumped whenever the channel order below changes.
pub const LAYOUT_VERSION: u32 = 1;

pub const SEGMENTATION_CLASSES: usize = 21;
pub const DEFAULT_EMBEDDING_CHANNELS: usize = 25;
pub const DEFAULT_FLOW_RADIUS: usize = 8;

/// Which feature families feed the model.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct FeatureSelection {
    pub frame: bool,
    pub saliency: bool,
    pub segmentation: bool,
    pub flow: bool,
    pub quality_metrics: bool,
    pub highpass: bool,
    pub embeddings: bool,
}

impl FeatureSelection {
    pub const ALL: FeatureSelection = FeatureSelection {
        frame: true,
        saliency: true,
        segmentation: true,
        flow: true,
        quality_metrics: true,
        highpass: true,
        embeddings: true,
    };

    pub const NONE: FeatureSelection = FeatureSelection {
        frame: false,
        saliency: false,
        segmentation: false,
        flow: false,
        quality_metrics: false,
        highpass: false,
        embeddings: false,
    };

    pub fn validate(&self) -> Result<()> {
        if *self == Self::NONE {
            return Err(Error::InvalidConfig("at least one feature family must be enabled".into()));
        }
        Ok(())
    }

    /// Channel layout this selection produces, in stacking order.
    pub fn layout(&self, embedding_channels: usize) -> Vec<(String, usize)> {
        let families: [(bool, &str, usize); 10] = [
            (self.frame, "frame", 3),
            (self.saliency, "saliency", 1),
            (self.segmentation, "segmentation", SEGMENTATION_CLASSES),
            (self.flow, "flow", 2),
            (self.quality_metrics, "psnr", 1),
            (self.quality_metrics, "ssim", 1),
            (self.quality_metrics, "vif", 1),
            (self.highpass, "spatial_hp", 3),
            (self.highpass, "temporal_hp", 3),
            (self.embeddings, "embeddings", embedding_channels),
        ];
        families.into_iter().filter(|f| f.0).map(|(_, n, c)| (n.to_string(), c)).collect()
    }

    pub fn channel_count(&self, embedding_channels: usize) -> usize {
        self.layout(embedding_channels).iter().map(|(_, c)| c).sum()
    }
}

impl Default for FeatureSelection {
    fn default() -> Self {
        Self::ALL
    }
}

/// `rows × cols × C` model input, channel-fastest.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureStack {
    pub rows: usize,
    pub cols: usize,
    pub channels: Vec<(String, usize)>,
    pub data: Vec<f64>,
}

impl FeatureStack {
    /// Builds a stack, validating the layout against the data length.
    pub fn new(rows: usize, cols: usize, channels: Vec<(String, usize)>, data: Vec<f64>) -> Result<Self> {
        let c: usize = channels.iter().map(|(_, n)| n).sum();
        if rows == 0 || cols == 0 || c == 0 {
            return Err(Error::ZeroDimension);
        }
        if data.len() != rows * cols * c {
            return Err(Error::DimensionMismatch(format!(
                "{rows}x{cols}x{c} stack needs {} values, got {}",
                rows * cols * c,
                data.len()
            )));
        }
        if data.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("feature stack".into()));
        }
        Ok(Self { rows, cols, channels, data })
    }

    /// A stack with a single anonymous family of `c` channels.
    pub fn raw(rows: usize, cols: usize, c: usize, data: Vec<f64>) -> Result<Self> {
        Self::new(rows, cols, vec![("raw".into(), c)], data)
    }

    pub fn channel_count(&self) -> usize {
        self.channels.iter().map(|(_, n)| n).sum()
    }

    pub fn at(&self, row: usize, col: usize, ch: usize) -> f64 {
        self.data[(row * self.cols + col) * self.channel_count() + ch]
    }

    pub fn flipped(&self, horizontal: bool, vertical: bool) -> FeatureStack {
        let c = self.channel_count();
        let mut data = Vec::with_capacity(self.data.len());
        for r in 0..self.rows {
            let sr = if vertical { self.rows - 1 - r } else { r };
            for col in 0..self.cols {
                let sc = if horizontal { self.cols - 1 - col } else { col };
                let base = (sr * self.cols + sc) * c;
                data.extend_from_slice(&self.data[base..base + c]);
            }
        }
        FeatureStack { rows: self.rows, cols: self.cols, channels: self.channels.clone(), data }
    }

    pub fn to_tensor(&self) -> Result<FeatureTensor> {
        FeatureTensor::new(
            self.rows,
            self.cols,
            self.channel_count(),
            self.data.iter().map(|&v| v as f32).collect(),
        )
    }

    /// Wraps a tensor in a layout. The layout must account for every channel.
    pub fn from_tensor(tensor: &FeatureTensor, channels: Vec<(String, usize)>) -> Result<Self> {
        let c: usize = channels.iter().map(|(_, n)| n).sum();
        if c != tensor.channels {
            return Err(Error::ChannelMismatch { expected: c, found: tensor.channels });
        }
        Self::new(tensor.rows, tensor.cols, channels, tensor.data.iter().map(|&v| f64::from(v)).collect())
    }

    /// Text form of the layout, one `name count` pair per line.
    pub fn layout_text(&self) -> String {
        let mut s = format!("layout {LAYOUT_VERSION}\n");
        for (name, n) in &self.channels {
            s.push_str(&format!("{name} {n}\n"));
        }
        s
    }
}

/// Parses the output of [`FeatureStack::layout_text`].
pub fn parse_layout(text: &str) -> Result<Vec<(String, usize)>> {
    let mut lines = text.lines().filter(|l| !l.trim().is_empty());
    match lines.next().map(str::split_whitespace).map(|mut t| (t.next(), t.next())) {
        Some((Some("layout"), Some(v))) if v == LAYOUT_VERSION.to_string() => {}
        _ => return Err(Error::MalformedHeader(format!("expected 'layout {LAYOUT_VERSION}' header"))),
    }
    lines
        .map(|l| {
            let mut t = l.split_whitespace();
            match (t.next(), t.next().and_then(|n| n.parse::<usize>().ok()), t.next()) {
                (Some(name), Some(n), None) => Ok((name.to_string(), n)),
                _ => Err(Error::MalformedHeader(format!("bad layout line {l:?}"))),
            }
        })
        .collect()
}

/// Difference between each pixel and the mean of its (existing) 8 neighbours,
/// per colour channel at full luma resolution.
pub fn spatial_highpass(frame: &Frame) -> [Vec<f64>; 3] {
    let (w, h) = (frame.width(), frame.height());
    frame.full_res_channels().map(|ch| {
        let mut out = Vec::with_capacity(w * h);
        for y in 0..h {
            let (ya, yb) = (y.saturating_sub(1), (y + 2).min(h));
            for x in 0..w {
                let (xa, xb) = (x.saturating_sub(1), (x + 2).min(w));
                let mut sum = 0.0;
                for yy in ya..yb {
                    for xx in xa..xb {
                        sum += ch[yy * w + xx];
                    }
                }
                let centre = ch[y * w + x];
                let neighbours = ((yb - ya) * (xb - xa) - 1) as f64;
                out.push(if neighbours == 0.0 { 0.0 } else { centre - (sum - centre) / neighbours });
            }
        }
        out
    })
}

/// `cur - (prev + next) / 2` per colour channel.
pub fn temporal_highpass(prev: &Frame, cur: &Frame, next: &Frame) -> Result<[Vec<f64>; 3]> {
    for other in [prev, next] {
        if (other.width(), other.height(), other.subsampling())
            != (cur.width(), cur.height(), cur.subsampling())
        {
            return Err(Error::DimensionMismatch("temporal neighbours differ in geometry".into()));
        }
    }
    let (p, c, n) = (prev.full_res_channels(), cur.full_res_channels(), next.full_res_channels());
    let mut out: [Vec<f64>; 3] = Default::default();
    for k in 0..3 {
        out[k] = c[k].iter().zip(&p[k]).zip(&n[k]).map(|((&c, &p), &n)| c - 0.5 * (p + n)).collect();
    }
    Ok(out)
}

/// Block motion vector: `cur(x, y) ≈ prev(x - dx, y - dy)` over the block.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub struct MotionVector {
    pub dx: i32,
    pub dy: i32,
}

/// Candidate displacements ordered by the tie-break rule: smaller |dx|+|dy|,
/// then smaller dy, then smaller dx.
fn search_order(radius: i32) -> Vec<MotionVector> {
    let mut cands = Vec::with_capacity(((2 * radius + 1) * (2 * radius + 1)) as usize);
    for dy in -radius..=radius {
        for dx in -radius..=radius {
            cands.push(MotionVector { dx, dy });
        }
    }
    cands.sort_by_key(|m| (m.dx.abs() + m.dy.abs(), m.dy, m.dx));
    cands
}

/// Exhaustive SAD block matching of every macroblock of `cur` against `prev`.
/// Candidates whose reference block leaves the frame are skipped.
pub fn block_flow(prev: &Frame, cur: &Frame, radius: usize) -> Result<MacroblockGrid<MotionVector>> {
    if (prev.width(), prev.height()) != (cur.width(), cur.height()) {
        return Err(Error::DimensionMismatch("flow frames differ in size".into()));
    }
    let (w, h) = (cur.width(), cur.height());
    let (rows, cols) = grid_dims(w, h);
    let order = search_order(radius as i32);
    let (a, b) = (cur.luma(), prev.luma());
    MacroblockGrid::from_fn(rows, cols, |r, c| {
        let (x0, y0) = (c * MB_SIZE, r * MB_SIZE);
        let (x1, y1) = ((x0 + MB_SIZE).min(w), (y0 + MB_SIZE).min(h));
        let mut best = (u32::MAX, MotionVector::default());
        for &mv in &order {
            let (rx0, ry0) = (x0 as i64 - i64::from(mv.dx), y0 as i64 - i64::from(mv.dy));
            let (rx1, ry1) = (x1 as i64 - i64::from(mv.dx), y1 as i64 - i64::from(mv.dy));
            if rx0 < 0 || ry0 < 0 || rx1 > w as i64 || ry1 > h as i64 {
                continue;
            }
            let (rx0, ry0) = (rx0 as usize, ry0 as usize);
            let mut sad = 0u32;
            for y in 0..(y1 - y0) {
                let cur_row = &a[(y0 + y) * w + x0..(y0 + y) * w + x1];
                let ref_row = &b[(ry0 + y) * w + rx0..(ry0 + y) * w + rx0 + (x1 - x0)];
                sad += cur_row.iter().zip(ref_row).map(|(&p, &q)| u32::from(p.abs_diff(q))).sum::<u32>();
                if sad >= best.0 {
                    break;
                }
            }
            if sad < best.0 {
                best = (sad, mv);
            }
        }
        best.1
    })
}

/// Pools a dense full-resolution plane onto the macroblock grid.
pub fn to_grid_channel(plane: &[f64], width: usize, height: usize) -> Result<MacroblockGrid<f64>> {
    pool_plane(plane, width, height, width, height)
}

/// Internally computed per-frame families, already at macroblock resolution.
#[derive(Debug, Clone, PartialEq)]
pub struct FrameFeatures {
    pub width: usize,
    pub height: usize,
    pub frame: Option<[MacroblockGrid<f64>; 3]>,
    pub flow: Option<MacroblockGrid<MotionVector>>,
    pub spatial_hp: Option<[MacroblockGrid<f64>; 3]>,
    pub temporal_hp: Option<[MacroblockGrid<f64>; 3]>,
}

fn pool3(planes: [Vec<f64>; 3], w: usize, h: usize) -> Result<[MacroblockGrid<f64>; 3]> {
    let [a, b, c] = planes;
    Ok([to_grid_channel(&a, w, h)?, to_grid_channel(&b, w, h)?, to_grid_channel(&c, w, h)?])
}

/// Computes the families `sel` asks for on frame `idx` of `video`. The first
/// and last frames reuse their single neighbour for temporal filters, and the
/// first frame's flow is measured against itself.
pub fn frame_features(
    video: &VideoSequence,
    idx: usize,
    sel: &FeatureSelection,
    flow_radius: usize,
) -> Result<FrameFeatures> {
    let frames = video.frames();
    let cur = frames.get(idx).ok_or_else(|| Error::Domain(format!("frame {idx} out of range")))?;
    let prev = &frames[idx.saturating_sub(1)];
    let next = &frames[(idx + 1).min(frames.len() - 1)];
    let (w, h) = (cur.width(), cur.height());
    let (prev_t, next_t) = match (idx > 0, idx + 1 < frames.len()) {
        (true, true) => (prev, next),
        (false, true) => (next, next),
        (true, false) => (prev, prev),
        (false, false) => (cur, cur),
    };
    Ok(FrameFeatures {
        width: w,
        height: h,
        frame: if sel.frame { Some(pool3(cur.full_res_channels(), w, h)?) } else { None },
        flow: if sel.flow { Some(block_flow(prev, cur, flow_radius)?) } else { None },
        spatial_hp: if sel.highpass { Some(pool3(spatial_highpass(cur), w, h)?) } else { None },
        temporal_hp: if sel.highpass {
            Some(pool3(temporal_highpass(prev_t, cur, next_t)?, w, h)?)
        } else {
            None
        },
    })
}

/// Precomputed outputs of external models for one frame.
#[derive(Debug, Clone, Default)]
pub struct ExternalTensors {
    pub saliency: Option<FeatureTensor>,
    pub segmentation: Option<FeatureTensor>,
    pub embeddings: Option<FeatureTensor>,
}

/// Brings a tensor to the macroblock grid: used as-is when it already has the
/// grid's shape, otherwise pooled as a map covering the whole picture.
fn tensor_channels(
    t: &FeatureTensor,
    name: &str,
    expected_channels: usize,
    (rows, cols): (usize, usize),
    (w, h): (usize, usize),
) -> Result<Vec<MacroblockGrid<f64>>> {
    if t.channels != expected_channels {
        return Err(Error::ChannelMismatch { expected: expected_channels, found: t.channels });
    }
    if t.data.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite(name.to_string()));
    }
    (0..t.channels)
        .map(|ch| {
            let plane = t.channel_plane(ch);
            if (t.rows, t.cols) == (rows, cols) {
                MacroblockGrid::new(rows, cols, plane)
            } else {
                pool_plane(&plane, t.cols, t.rows, w, h)
            }
        })
        .collect()
}

/// Stacks all enabled families in the fixed order
/// `frame | saliency | segmentation | flow | psnr | ssim | vif | spatial_hp |
/// temporal_hp | embeddings`.
pub fn assemble(
    internal: &FrameFeatures,
    external: &ExternalTensors,
    metrics: &[MetricGrid],
    sel: &FeatureSelection,
    embedding_channels: usize,
) -> Result<FeatureStack> {
    sel.validate()?;
    let dims = grid_dims(internal.width, internal.height);
    let video = (internal.width, internal.height);
    let missing = |what: &str| Error::MissingTensor(what.to_string());
    let mut planes: Vec<MacroblockGrid<f64>> = Vec::new();

    if sel.frame {
        planes.extend(internal.frame.clone().ok_or_else(|| missing("frame"))?);
    }
    if sel.saliency {
        let t = external.saliency.as_ref().ok_or_else(|| missing("saliency"))?;
        planes.extend(tensor_channels(t, "saliency", 1, dims, video)?);
    }
    if sel.segmentation {
        let t = external.segmentation.as_ref().ok_or_else(|| missing("segmentation"))?;
        planes.extend(tensor_channels(t, "segmentation", SEGMENTATION_CLASSES, dims, video)?);
    }
    if sel.flow {
        let flow = internal.flow.as_ref().ok_or_else(|| missing("flow"))?;
        planes.push(flow.map(|m| f64::from(m.dx)));
        planes.push(flow.map(|m| f64::from(m.dy)));
    }
    if sel.quality_metrics {
        for kind in [MetricKind::PsnrDb, MetricKind::Ssim, MetricKind::Vif] {
            let m = metrics.iter().find(|m| m.kind == kind).ok_or_else(|| missing(kind.name()))?;
            planes.push(m.grid.clone());
        }
    }
    if sel.highpass {
        planes.extend(internal.spatial_hp.clone().ok_or_else(|| missing("spatial_hp"))?);
        planes.extend(internal.temporal_hp.clone().ok_or_else(|| missing("temporal_hp"))?);
    }
    if sel.embeddings {
        let t = external.embeddings.as_ref().ok_or_else(|| missing("embeddings"))?;
        planes.extend(tensor_channels(t, "embeddings", embedding_channels, dims, video)?);
    }

    if let Some(p) = planes.iter().find(|p| (p.rows(), p.cols()) != dims) {
        return Err(Error::DimensionMismatch(format!(
            "feature grid {}x{} does not match {}x{}",
            p.rows(),
            p.cols(),
            dims.0,
            dims.1
        )));
    }
    let (rows, cols) = dims;
    let mut data = Vec::with_capacity(rows * cols * planes.len());
    for i in 0..rows * cols {
        data.extend(planes.iter().map(|p| p.cells()[i]));
    }
    FeatureStack::new(rows, cols, sel.layout(embedding_channels), data)
}
