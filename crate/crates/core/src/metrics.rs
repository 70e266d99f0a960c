//! Per-macroblock full-reference quality metrics on luma.
//!
//! PSNR and SSIM are computed once per 16×16 macroblock (boundary blocks use
//! their actual extent). VIF is the pixel-domain variant evaluated on a
//! 256×256 window centred on each macroblock, cropped at the frame edges.

use crate::error::{Error, Result};
use crate::gridmap::{grid_dims, MacroblockGrid};
use crate::media::Frame;
use crate::MB_SIZE;

/// PSNR reported for blocks with zero error.
pub const PSNR_CAP_DB: f64 = 100.0;

const SSIM_C1: f64 = (0.01 * 255.0) * (0.01 * 255.0);
const SSIM_C2: f64 = (0.03 * 255.0) * (0.03 * 255.0);

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum MetricKind {
    PsnrDb,
    Ssim,
    Vif,
}

impl MetricKind {
    pub fn name(self) -> &'static str {
        match self {
            MetricKind::PsnrDb => "psnr",
            MetricKind::Ssim => "ssim",
            MetricKind::Vif => "vif",
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct MetricGrid {
    pub kind: MetricKind,
    pub grid: MacroblockGrid<f64>,
}

fn check_pair(reference: &Frame, distorted: &Frame) -> Result<()> {
    if (reference.width(), reference.height()) != (distorted.width(), distorted.height()) {
        return Err(Error::DimensionMismatch(format!(
            "reference {}x{} vs distorted {}x{}",
            reference.width(),
            reference.height(),
            distorted.width(),
            distorted.height()
        )));
    }
    Ok(())
}

/// Integer block moments: n, Σx, Σy, Σx², Σy², Σxy, Σ(x-y)².
#[derive(Default)]
struct BlockSums {
    n: i64,
    sx: i64,
    sy: i64,
    sxx: i64,
    syy: i64,
    sxy: i64,
    sdd: i64,
}

fn block_sums(reference: &Frame, distorted: &Frame, row: usize, col: usize) -> BlockSums {
    let (w, h) = (reference.width(), reference.height());
    let (x0, y0) = (col * MB_SIZE, row * MB_SIZE);
    let (x1, y1) = ((x0 + MB_SIZE).min(w), (y0 + MB_SIZE).min(h));
    let (a, b) = (reference.luma(), distorted.luma());
    let mut s = BlockSums::default();
    for y in y0..y1 {
        for (&x, &y_) in a[y * w + x0..y * w + x1].iter().zip(&b[y * w + x0..y * w + x1]) {
            let (x, y_) = (i64::from(x), i64::from(y_));
            s.sx += x;
            s.sy += y_;
            s.sxx += x * x;
            s.syy += y_ * y_;
            s.sxy += x * y_;
            s.sdd += (x - y_) * (x - y_);
        }
    }
    s.n = ((x1 - x0) * (y1 - y0)) as i64;
    s
}

fn per_block(
    reference: &Frame,
    distorted: &Frame,
    f: impl Fn(BlockSums) -> f64,
) -> Result<MacroblockGrid<f64>> {
    check_pair(reference, distorted)?;
    let (rows, cols) = grid_dims(reference.width(), reference.height());
    MacroblockGrid::from_fn(rows, cols, |r, c| f(block_sums(reference, distorted, r, c)))
}

pub fn mb_psnr(reference: &Frame, distorted: &Frame) -> Result<MetricGrid> {
    let grid = per_block(reference, distorted, |s| {
        if s.sdd == 0 {
            PSNR_CAP_DB
        } else {
            let mse = s.sdd as f64 / s.n as f64;
            10.0 * (255.0 * 255.0 / mse).log10()
        }
    })?;
    Ok(MetricGrid { kind: MetricKind::PsnrDb, grid })
}

pub fn mb_ssim(reference: &Frame, distorted: &Frame) -> Result<MetricGrid> {
    let grid = per_block(reference, distorted, |s| {
        let n = s.n as f64;
        let n2 = n * n;
        let (mx, my) = (s.sx as f64 / n, s.sy as f64 / n);
        // n²·σ terms are exact in integers.
        let vx = (s.n * s.sxx - s.sx * s.sx) as f64 / n2;
        let vy = (s.n * s.syy - s.sy * s.sy) as f64 / n2;
        let cxy = (s.n * s.sxy - s.sx * s.sy) as f64 / n2;
        ((2.0 * mx * my + SSIM_C1) * (2.0 * cxy + SSIM_C2))
            / ((mx * mx + my * my + SSIM_C1) * (vx + vy + SSIM_C2))
    })?;
    Ok(MetricGrid { kind: MetricKind::Ssim, grid })
}

/// Pixel-domain VIF parameters.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct VifConfig {
    /// Additive-noise variance of the visual channel model.
    pub noise_var: f64,
    pub scales: usize,
    /// Edge of the square window evaluated per macroblock, in full-res pixels.
    pub window: usize,
    /// Variances below this are treated as zero.
    pub eps: f64,
}

impl Default for VifConfig {
    fn default() -> Self {
        Self { noise_var: 2.0, scales: 4, window: 256, eps: 1e-10 }
    }
}

/// Dense single-channel f64 image.
#[derive(Debug, Clone)]
pub(crate) struct Plane {
    pub w: usize,
    pub h: usize,
    pub data: Vec<f64>,
}

/// 4-tap binomial blur centred between sample pairs, then 2:1 decimation.
/// Output sample `i` is centred at input position `2i + 0.5`. Taps outside
/// the plane are dropped and the remaining weights renormalised.
fn downsample(p: &Plane) -> Plane {
    const TAPS: [f64; 4] = [1.0, 3.0, 3.0, 1.0];
    fn pass(src: &[f64], len: usize, stride: usize, count: usize, count_stride: usize, out: &mut Vec<f64>) {
        for k in 0..count {
            let base = k * count_stride;
            for i in 0..len.div_ceil(2) {
                let (mut acc, mut wsum) = (0.0, 0.0);
                for (t, &w) in TAPS.iter().enumerate() {
                    let j = (2 * i + t) as isize - 1;
                    if j >= 0 && (j as usize) < len {
                        acc += w * src[base + j as usize * stride];
                        wsum += w;
                    }
                }
                out.push(acc / wsum);
            }
        }
    }
    let ow = p.w.div_ceil(2);
    let oh = p.h.div_ceil(2);
    // Horizontal: rows in order, producing h × ow.
    let mut horiz = Vec::with_capacity(p.h * ow);
    pass(&p.data, p.w, 1, p.h, p.w, &mut horiz);
    // Vertical: one column at a time, producing ow × oh (column-major).
    let mut vert = Vec::with_capacity(ow * oh);
    pass(&horiz, p.h, ow, ow, 1, &mut vert);
    let mut data = vec![0.0; ow * oh];
    for x in 0..ow {
        for y in 0..oh {
            data[y * ow + x] = vert[x * oh + y];
        }
    }
    Plane { w: ow, h: oh, data }
}

/// Per-pixel VIF numerator and denominator contributions of one scale.
fn vif_terms(r: &Plane, d: &Plane, cfg: &VifConfig) -> (Vec<f64>, Vec<f64>) {
    let (w, h) = (r.w, r.h);
    let mut num = Vec::with_capacity(w * h);
    let mut den = Vec::with_capacity(w * h);
    for y in 0..h {
        let (ya, yb) = (y.saturating_sub(1), (y + 2).min(h));
        for x in 0..w {
            let (xa, xb) = (x.saturating_sub(1), (x + 2).min(w));
            let n = ((yb - ya) * (xb - xa)) as f64;
            let (mut mr, mut md) = (0.0, 0.0);
            for yy in ya..yb {
                for xx in xa..xb {
                    mr += r.data[yy * w + xx];
                    md += d.data[yy * w + xx];
                }
            }
            mr /= n;
            md /= n;
            let (mut vr, mut vd, mut cv) = (0.0, 0.0, 0.0);
            for yy in ya..yb {
                for xx in xa..xb {
                    let a = r.data[yy * w + xx] - mr;
                    let b = d.data[yy * w + xx] - md;
                    vr += a * a;
                    vd += b * b;
                    cv += a * b;
                }
            }
            vr /= n;
            vd /= n;
            cv /= n;
            let (n_term, d_term) = vif_pixel(vr, vd, cv, cfg);
            num.push(n_term);
            den.push(d_term);
        }
    }
    (num, den)
}

/// Scalar GSM channel model for one local neighbourhood.
#[inline]
fn vif_pixel(var_ref: f64, var_dist: f64, cov: f64, cfg: &VifConfig) -> (f64, f64) {
    let (var_ref, gain, sv) = if var_ref < cfg.eps {
        (0.0, 0.0, var_dist)
    } else if var_dist < cfg.eps {
        (var_ref, 0.0, 0.0)
    } else {
        let g = cov / var_ref;
        if g < 0.0 {
            (var_ref, 0.0, var_dist)
        } else {
            (var_ref, g, (var_dist - g * cov).max(0.0))
        }
    };
    let num = (1.0 + gain * gain * var_ref / (sv + cfg.noise_var)).log2();
    let den = (1.0 + var_ref / cfg.noise_var).log2();
    (num, den)
}

fn luma_plane(f: &Frame) -> Plane {
    Plane { w: f.width(), h: f.height(), data: f.luma().iter().map(|&v| f64::from(v)).collect() }
}

/// Full-resolution window `[lo, hi)` around macroblock index `b` on an axis
/// of `len` pixels.
fn window_span(b: usize, len: usize, window: usize) -> (usize, usize) {
    let centre = b * MB_SIZE + MB_SIZE / 2;
    let lo = centre.saturating_sub(window / 2);
    let hi = (centre + window / 2).min(len);
    (lo, hi)
}

/// Scale-`s` index range covering full-res span `[lo, hi)`.
fn scaled_span(lo: usize, hi: usize, s: usize, len_s: usize) -> (usize, usize) {
    let f = 1usize << s;
    (lo / f, hi.div_ceil(f).min(len_s))
}

pub fn block_vif(reference: &Frame, distorted: &Frame) -> Result<MetricGrid> {
    block_vif_with(reference, distorted, &VifConfig::default())
}

pub fn block_vif_with(reference: &Frame, distorted: &Frame, cfg: &VifConfig) -> Result<MetricGrid> {
    check_pair(reference, distorted)?;
    if cfg.scales == 0 || cfg.window == 0 || !(cfg.noise_var > 0.0) {
        return Err(Error::InvalidConfig("VIF needs ≥1 scale, a window and positive noise".into()));
    }
    let (w, h) = (reference.width(), reference.height());
    let (rows, cols) = grid_dims(w, h);
    let mut num_acc = vec![0.0; rows * cols];
    let mut den_acc = vec![0.0; rows * cols];

    let (mut r, mut d) = (luma_plane(reference), luma_plane(distorted));
    for s in 0..cfg.scales {
        if s > 0 {
            r = downsample(&r);
            d = downsample(&d);
        }
        let (num, den) = vif_terms(&r, &d, cfg);
        let mut band_num = vec![0.0; r.w];
        let mut band_den = vec![0.0; r.w];
        for row in 0..rows {
            let (lo, hi) = window_span(row, h, cfg.window);
            let (y0, y1) = scaled_span(lo, hi, s, r.h);
            band_num.iter_mut().for_each(|v| *v = 0.0);
            band_den.iter_mut().for_each(|v| *v = 0.0);
            for y in y0..y1 {
                let line = y * r.w;
                for x in 0..r.w {
                    band_num[x] += num[line + x];
                    band_den[x] += den[line + x];
                }
            }
            for col in 0..cols {
                let (lo, hi) = window_span(col, w, cfg.window);
                let (x0, x1) = scaled_span(lo, hi, s, r.w);
                num_acc[row * cols + col] += band_num[x0..x1].iter().sum::<f64>();
                den_acc[row * cols + col] += band_den[x0..x1].iter().sum::<f64>();
            }
        }
    }
    let cells = num_acc
        .into_iter()
        .zip(den_acc)
        // Denominator terms are non-negative, so zero means a textureless reference.
        .map(|(n, d)| if d == 0.0 { 1.0 } else { n / d })
        .collect();
    Ok(MetricGrid { kind: MetricKind::Vif, grid: MacroblockGrid::new(rows, cols, cells)? })
}
