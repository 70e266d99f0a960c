//! Macroblock lattices and conversions between dense importance maps,
//! macroblock grids and the three-level class space.

use crate::error::{Error, Result};
use crate::media::ImportanceMap;
use crate::MB_SIZE;

/// A `rows × cols` lattice with one cell per macroblock, row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct MacroblockGrid<T> {
    rows: usize,
    cols: usize,
    cells: Vec<T>,
}

impl<T> MacroblockGrid<T> {
    pub fn new(rows: usize, cols: usize, cells: Vec<T>) -> Result<Self> {
        if rows == 0 || cols == 0 {
            return Err(Error::ZeroDimension);
        }
        if cells.len() != rows * cols {
            return Err(Error::DimensionMismatch(format!(
                "{rows}x{cols} grid needs {} cells, got {}",
                rows * cols,
                cells.len()
            )));
        }
        Ok(Self { rows, cols, cells })
    }

    pub fn from_fn(rows: usize, cols: usize, mut f: impl FnMut(usize, usize) -> T) -> Result<Self> {
        let mut cells = Vec::with_capacity(rows * cols);
        for r in 0..rows {
            for c in 0..cols {
                cells.push(f(r, c));
            }
        }
        Self::new(rows, cols, cells)
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn len(&self) -> usize {
        self.cells.len()
    }

    pub fn is_empty(&self) -> bool {
        self.cells.is_empty()
    }

    pub fn cells(&self) -> &[T] {
        &self.cells
    }

    pub fn cells_mut(&mut self) -> &mut [T] {
        &mut self.cells
    }

    pub fn into_cells(self) -> Vec<T> {
        self.cells
    }

    pub fn get(&self, row: usize, col: usize) -> &T {
        &self.cells[row * self.cols + col]
    }

    pub fn set(&mut self, row: usize, col: usize, value: T) {
        self.cells[row * self.cols + col] = value;
    }

    pub fn map<U>(&self, f: impl FnMut(&T) -> U) -> MacroblockGrid<U> {
        MacroblockGrid { rows: self.rows, cols: self.cols, cells: self.cells.iter().map(f).collect() }
    }

    pub fn same_shape<U>(&self, other: &MacroblockGrid<U>) -> bool {
        self.rows == other.rows && self.cols == other.cols
    }
}

impl<T: Clone> MacroblockGrid<T> {
    pub fn filled(rows: usize, cols: usize, value: T) -> Result<Self> {
        Self::new(rows, cols, vec![value; rows * cols])
    }

    pub fn flipped_horizontal(&self) -> Self {
        let mut cells = self.cells.clone();
        for row in cells.chunks_mut(self.cols) {
            row.reverse();
        }
        Self { rows: self.rows, cols: self.cols, cells }
    }

    pub fn flipped_vertical(&self) -> Self {
        let cells = self.cells.chunks(self.cols).rev().flatten().cloned().collect();
        Self { rows: self.rows, cols: self.cols, cells }
    }
}

/// `(rows, cols)` of the macroblock grid covering a `width × height` video.
pub fn grid_dims(width: usize, height: usize) -> (usize, usize) {
    (height.div_ceil(MB_SIZE), width.div_ceil(MB_SIZE))
}

/// Rounds half away from zero. Used for every real-to-integer conversion.
pub fn round_half_away(v: f64) -> f64 {
    v.round()
}

/// Per-axis coverage of one macroblock span `[start, end)` (video pixels)
/// projected onto a map axis of `map_len` pixels.
#[derive(Debug, Clone)]
struct AxisCoverage {
    first: usize,
    weights: Vec<f64>,
}

fn axis_coverage(start: usize, end: usize, map_len: usize, video_len: usize) -> AxisCoverage {
    let scale = |v: usize| (v * map_len) as f64 / video_len as f64;
    let (lo, hi) = (scale(start), scale(end));
    let first = lo.floor() as usize;
    let last = (hi.ceil() as usize).min(map_len);
    let weights = (first..last)
        .map(|i| (hi.min((i + 1) as f64) - lo.max(i as f64)).max(0.0))
        .collect();
    AxisCoverage { first, weights }
}

fn coverages(map_len: usize, video_len: usize) -> Vec<AxisCoverage> {
    (0..video_len.div_ceil(MB_SIZE))
        .map(|b| {
            let start = b * MB_SIZE;
            let end = (start + MB_SIZE).min(video_len);
            axis_coverage(start, end, map_len, video_len)
        })
        .collect()
}

/// Area-weighted mean pooling of a dense row-major plane that geometrically
/// covers a `video_w × video_h` picture onto that picture's macroblock grid.
///
/// Map pixel `(i, j)` is the unit square `[i, i+1) × [j, j+1)`; each
/// macroblock's footprint is scaled into map coordinates and every map pixel
/// contributes in proportion to its overlap. Partial boundary macroblocks use
/// only the area they actually cover.
pub fn pool_plane(
    plane: &[f64],
    map_w: usize,
    map_h: usize,
    video_w: usize,
    video_h: usize,
) -> Result<MacroblockGrid<f64>> {
    if map_w == 0 || map_h == 0 || video_w == 0 || video_h == 0 {
        return Err(Error::ZeroDimension);
    }
    if plane.len() != map_w * map_h {
        return Err(Error::DimensionMismatch(format!(
            "plane of {} values is not {map_w}x{map_h}",
            plane.len()
        )));
    }
    let xs = coverages(map_w, video_w);
    let ys = coverages(map_h, video_h);
    let mut cells = Vec::with_capacity(xs.len() * ys.len());
    let mut row_acc = vec![0.0; map_w];
    for ycov in &ys {
        row_acc.iter_mut().for_each(|v| *v = 0.0);
        let wy_sum: f64 = ycov.weights.iter().sum();
        for (k, &wy) in ycov.weights.iter().enumerate() {
            let row = &plane[(ycov.first + k) * map_w..][..map_w];
            for (acc, &v) in row_acc.iter_mut().zip(row) {
                *acc += wy * v;
            }
        }
        for xcov in &xs {
            let wx_sum: f64 = xcov.weights.iter().sum();
            let s: f64 = xcov.weights.iter().zip(&row_acc[xcov.first..]).map(|(w, v)| w * v).sum();
            cells.push(s / (wx_sum * wy_sum));
        }
    }
    MacroblockGrid::new(ys.len(), xs.len(), cells)
}

/// Pools an importance map onto the macroblock grid of a `video_w × video_h`
/// video.
pub fn pool_to_grid(map: &ImportanceMap, video_w: usize, video_h: usize) -> Result<MacroblockGrid<f64>> {
    let plane: Vec<f64> = map.values().iter().map(|&v| f64::from(v)).collect();
    pool_plane(&plane, map.width(), map.height(), video_w, video_h)
}

/// One of the three importance levels predicted per macroblock.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum ImportanceClass {
    Low = 0,
    Mid = 1,
    High = 2,
}

impl ImportanceClass {
    pub const ALL: [ImportanceClass; 3] = [ImportanceClass::Low, ImportanceClass::Mid, ImportanceClass::High];

    pub fn index(self) -> usize {
        self as usize
    }

    pub fn from_index(idx: usize) -> Option<Self> {
        Self::ALL.get(idx).copied()
    }

    /// Importance value the class stands for.
    pub fn importance(self) -> u8 {
        match self {
            ImportanceClass::Low => 0,
            ImportanceClass::Mid => 128,
            ImportanceClass::High => 255,
        }
    }

    /// Nearest class centre, ties going to the higher class.
    pub fn nearest(v: f64) -> Self {
        if v < 64.0 {
            ImportanceClass::Low
        } else if v < 191.5 {
            ImportanceClass::Mid
        } else {
            ImportanceClass::High
        }
    }
}

pub type ClassGrid = MacroblockGrid<ImportanceClass>;

pub fn quantize_classes(grid: &MacroblockGrid<f64>) -> ClassGrid {
    grid.map(|&v| ImportanceClass::nearest(v))
}

pub fn classes_to_importance(classes: &ClassGrid) -> MacroblockGrid<u8> {
    classes.map(|c| c.importance())
}

/// Per-pixel mean of several annotators' maps, rounded half away from zero.
pub fn average_maps(maps: &[ImportanceMap]) -> Result<ImportanceMap> {
    let first = maps.first().ok_or_else(|| Error::Empty("no maps to average".into()))?;
    let (w, h) = (first.width(), first.height());
    if let Some(m) = maps.iter().find(|m| (m.width(), m.height()) != (w, h)) {
        return Err(Error::DimensionMismatch(format!(
            "map {}x{} differs from {w}x{h}",
            m.width(),
            m.height()
        )));
    }
    let n = maps.len() as u64;
    let mut sums = vec![0u64; w * h];
    for m in maps {
        for (s, &v) in sums.iter_mut().zip(m.values()) {
            *s += u64::from(v);
        }
    }
    // floor(sum / n + 1/2) in integers; all terms are non-negative.
    let values = sums.into_iter().map(|s| ((2 * s + n) / (2 * n)) as u8).collect();
    ImportanceMap::new(w, h, values)
}
