//! Independent reference implementations shared by the integration tests.
//!
//! Everything here is written from the definitions, deliberately avoiding the
//! library's internal structure (no shared helpers, different summation
//! strategies), so agreement between the two is meaningful.

#![allow(dead_code)]

use num_rational::Ratio;
use pim_core::features::{FeatureStack, MotionVector};
use pim_core::gridmap::{ImportanceClass, MacroblockGrid};
use pim_core::media::Frame;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn random_grid(rng: &mut ChaCha8Rng, rows: usize, cols: usize) -> MacroblockGrid<f64> {
    MacroblockGrid::from_fn(rows, cols, |_, _| rng.gen_range(0.0..=255.0)).unwrap()
}

// ---------------------------------------------------------------------------
// Solver

/// Mean rate multiplier of the clamped linear offset map at offset `c`,
/// evaluated cell by cell.
pub fn direct_mean_rate(values: &[f64], span: f64, clamp: f64, c: f64) -> f64 {
    let total: f64 = values
        .iter()
        .map(|v| {
            let d = (c + span * (0.5 - v / 255.0)).clamp(-clamp, clamp);
            (2.0f64).powf(-d / 3.0)
        })
        .sum();
    total / values.len() as f64
}

/// Fine scan of `c` over `[lo, hi]` at `step`: returns the first grid point at
/// which the mean rate drops to one or below.
///
/// The per-cell offsets are sorted once so that each step only moves the two
/// clamp boundaries, which keeps a 1e-4 scan over 80 units affordable.
pub fn scan_offset(values: &[f64], span: f64, clamp: f64, lo: f64, hi: f64, step: f64) -> Option<f64> {
    let n = values.len();
    let mut u: Vec<f64> = values.iter().map(|v| span * (0.5 - v / 255.0)).collect();
    u.sort_by(|a, b| a.partial_cmp(b).unwrap());
    let mut prefix = vec![0.0; n + 1];
    for i in 0..n {
        prefix[i + 1] = prefix[i] + (2.0f64).powf(-u[i] / 3.0);
    }
    let hi_rate = (2.0f64).powf(-clamp / 3.0);
    let lo_rate = (2.0f64).powf(clamp / 3.0);
    let steps = ((hi - lo) / step).round() as usize;
    // low: cells with c + u <= -clamp (u[..low]); high: cells with c + u >= clamp (u[high..]).
    let mut low = n;
    let mut high = n;
    for k in 0..=steps {
        let c = lo + k as f64 * step;
        while low > 0 && c + u[low - 1] > -clamp {
            low -= 1;
        }
        while high > 0 && c + u[high - 1] >= clamp {
            high -= 1;
        }
        let mid = if high > low { prefix[high] - prefix[low] } else { 0.0 };
        let rate = (low as f64 * lo_rate
            + (n - high.max(low)) as f64 * hi_rate
            + (2.0f64).powf(-c / 3.0) * mid)
            / n as f64;
        if rate <= 1.0 {
            return Some(c);
        }
    }
    None
}

// ---------------------------------------------------------------------------
// Metrics

fn block_pixels(f: &Frame, r: usize, c: usize) -> Vec<f64> {
    let (w, h) = (f.width(), f.height());
    let mut out = Vec::new();
    for y in r * 16..((r + 1) * 16).min(h) {
        for x in c * 16..((c + 1) * 16).min(w) {
            out.push(f64::from(f.luma()[y * w + x]));
        }
    }
    out
}

fn mean(v: &[f64]) -> f64 {
    v.iter().sum::<f64>() / v.len() as f64
}

pub fn psnr_block(a: &Frame, b: &Frame, r: usize, c: usize) -> f64 {
    let (pa, pb) = (block_pixels(a, r, c), block_pixels(b, r, c));
    let mse = pa.iter().zip(&pb).map(|(x, y)| (x - y) * (x - y)).sum::<f64>() / pa.len() as f64;
    if mse == 0.0 {
        100.0
    } else {
        10.0 * (255.0 * 255.0 / mse).log10()
    }
}

pub fn ssim_block(a: &Frame, b: &Frame, r: usize, c: usize) -> f64 {
    let (pa, pb) = (block_pixels(a, r, c), block_pixels(b, r, c));
    let (ma, mb) = (mean(&pa), mean(&pb));
    let n = pa.len() as f64;
    let va = pa.iter().map(|x| (x - ma) * (x - ma)).sum::<f64>() / n;
    let vb = pb.iter().map(|y| (y - mb) * (y - mb)).sum::<f64>() / n;
    let cov = pa.iter().zip(&pb).map(|(x, y)| (x - ma) * (y - mb)).sum::<f64>() / n;
    let c1 = (0.01f64 * 255.0).powi(2);
    let c2 = (0.03f64 * 255.0).powi(2);
    ((2.0 * ma * mb + c1) * (2.0 * cov + c2)) / ((ma * ma + mb * mb + c1) * (va + vb + c2))
}

struct Img {
    w: usize,
    h: usize,
    px: Vec<f64>,
}

impl Img {
    fn at(&self, x: usize, y: usize) -> f64 {
        self.px[y * self.w + x]
    }
}

/// One pyramid level: a 4×4 binomial footprint per output sample, whose
/// out-of-image taps are dropped and the remaining weights renormalised.
fn pyramid_level(src: &Img) -> Img {
    const K: [f64; 4] = [1.0, 3.0, 3.0, 1.0];
    let (w, h) = (src.w.div_ceil(2), src.h.div_ceil(2));
    let mut px = vec![0.0; w * h];
    for oy in 0..h {
        for ox in 0..w {
            let (mut acc, mut norm) = (0.0, 0.0);
            for (a, ka) in K.iter().enumerate() {
                let y = 2 * oy as isize + a as isize - 1;
                if y < 0 || y >= src.h as isize {
                    continue;
                }
                for (b, kb) in K.iter().enumerate() {
                    let x = 2 * ox as isize + b as isize - 1;
                    if x < 0 || x >= src.w as isize {
                        continue;
                    }
                    acc += ka * kb * src.at(x as usize, y as usize);
                    norm += ka * kb;
                }
            }
            px[oy * w + ox] = acc / norm;
        }
    }
    Img { w, h, px }
}

/// Per-pixel (numerator, denominator) information terms over cropped 3×3
/// neighbourhoods.
fn info_terms(r: &Img, d: &Img) -> (Vec<f64>, Vec<f64>) {
    const NOISE: f64 = 2.0;
    const EPS: f64 = 1e-10;
    let mut num = vec![0.0; r.w * r.h];
    let mut den = vec![0.0; r.w * r.h];
    for y in 0..r.h {
        for x in 0..r.w {
            let mut xs = Vec::with_capacity(9);
            let mut ys = Vec::with_capacity(9);
            for yy in y.saturating_sub(1)..=(y + 1).min(r.h - 1) {
                for xx in x.saturating_sub(1)..=(x + 1).min(r.w - 1) {
                    xs.push(r.at(xx, yy));
                    ys.push(d.at(xx, yy));
                }
            }
            let (mr, md) = (mean(&xs), mean(&ys));
            let n = xs.len() as f64;
            let sr = xs.iter().map(|v| (v - mr) * (v - mr)).sum::<f64>() / n;
            let sd = ys.iter().map(|v| (v - md) * (v - md)).sum::<f64>() / n;
            let sc = xs.iter().zip(&ys).map(|(a, b)| (a - mr) * (b - md)).sum::<f64>() / n;
            // Gain and residual noise of the distortion channel d = g·r + v.
            let (sr, g, sv) = if sr < EPS {
                (0.0, 0.0, sd)
            } else if sd < EPS {
                (sr, 0.0, 0.0)
            } else if sc / sr < 0.0 {
                (sr, 0.0, sd)
            } else {
                let g = sc / sr;
                (sr, g, (sd - g * sc).max(0.0))
            };
            num[y * r.w + x] = (1.0 + g * g * sr / (sv + NOISE)).log2();
            den[y * r.w + x] = (1.0 + sr / NOISE).log2();
        }
    }
    (num, den)
}

/// Summed-area table with a zero border.
fn integral(v: &[f64], w: usize, h: usize) -> Vec<f64> {
    let mut s = vec![0.0; (w + 1) * (h + 1)];
    for y in 0..h {
        let mut row = 0.0;
        for x in 0..w {
            row += v[y * w + x];
            s[(y + 1) * (w + 1) + x + 1] = s[y * (w + 1) + x + 1] + row;
        }
    }
    s
}

fn rect_sum(s: &[f64], w: usize, (x0, x1): (usize, usize), (y0, y1): (usize, usize)) -> f64 {
    let stride = w + 1;
    s[y1 * stride + x1] - s[y0 * stride + x1] - s[y1 * stride + x0] + s[y0 * stride + x0]
}

/// Reference multi-scale pixel VIF per macroblock: 4 scales, 256×256 window
/// centred on each block and cropped to the frame.
pub fn vif_grid(a: &Frame, b: &Frame) -> Vec<f64> {
    let (w, h) = (a.width(), a.height());
    let (rows, cols) = (h.div_ceil(16), w.div_ceil(16));
    let to_img = |f: &Frame| Img { w, h, px: f.luma().iter().map(|&v| v as f64).collect() };
    let mut levels = vec![(to_img(a), to_img(b))];
    for _ in 1..4 {
        let (r, d) = levels.last().unwrap();
        levels.push((pyramid_level(r), pyramid_level(d)));
    }
    let mut num = vec![0.0; rows * cols];
    let mut den = vec![0.0; rows * cols];
    for (s, (r, d)) in levels.iter().enumerate() {
        let (tn, td) = info_terms(r, d);
        let (sn, sd) = (integral(&tn, r.w, r.h), integral(&td, r.w, r.h));
        let scale = 1usize << s;
        let span = |b: usize, len: usize, len_s: usize| {
            let centre = 16 * b + 8;
            let lo = centre.saturating_sub(128);
            let hi = (centre + 128).min(len);
            (lo / scale, hi.div_ceil(scale).min(len_s))
        };
        for row in 0..rows {
            for col in 0..cols {
                let xs = span(col, w, r.w);
                let ys = span(row, h, r.h);
                num[row * cols + col] += rect_sum(&sn, r.w, xs, ys);
                den[row * cols + col] += rect_sum(&sd, r.w, xs, ys);
            }
        }
    }
    // Summed-area differences leave rounding residue where the exact sum is 0.
    num.iter().zip(&den).map(|(n, d)| if d.abs() < 1e-9 { 1.0 } else { n / d }).collect()
}

// ---------------------------------------------------------------------------
// Frames

pub fn frame_from_fn(w: usize, h: usize, f: impl Fn(usize, usize) -> u8) -> Frame {
    let mut luma = Vec::with_capacity(w * h);
    for y in 0..h {
        for x in 0..w {
            luma.push(f(x, y));
        }
    }
    Frame::from_luma(w, h, luma).unwrap()
}

/// Smooth texture plus noise, with a flat patch so the degenerate variance
/// branches get exercised.
pub fn random_reference(rng: &mut ChaCha8Rng, w: usize, h: usize) -> Frame {
    let (fx, fy, ph) = (rng.gen_range(0.01..0.2), rng.gen_range(0.01..0.2), rng.gen_range(0.0..6.3));
    let noise: Vec<f64> = (0..w * h).map(|_| rng.gen_range(-20.0..20.0)).collect();
    let (px, py) = (rng.gen_range(0..w / 2), rng.gen_range(0..h / 2));
    frame_from_fn(w, h, |x, y| {
        if (px..px + 40).contains(&x) && (py..py + 40).contains(&y) {
            return 90;
        }
        let v = 128.0 + 80.0 * ((x as f64 * fx + ph).sin() * (y as f64 * fy).cos()) + noise[y * w + x];
        v.round().clamp(0.0, 255.0) as u8
    })
}

/// Additive noise of random strength, plus an untouched strip.
pub fn distort(rng: &mut ChaCha8Rng, f: &Frame) -> Frame {
    let strength = rng.gen_range(1.0..40.0);
    let (w, h) = (f.width(), f.height());
    let keep = rng.gen_range(0..h);
    let luma = f
        .luma()
        .iter()
        .enumerate()
        .map(|(i, &v)| {
            if (i / w).abs_diff(keep) < 16 {
                v
            } else {
                (f64::from(v) + rng.gen_range(-strength..strength)).round().clamp(0.0, 255.0) as u8
            }
        })
        .collect();
    Frame::from_luma(w, h, luma).unwrap()
}

// ---------------------------------------------------------------------------
// Motion

/// Exhaustive SAD search without early exits; ties resolved by
/// (|dx|+|dy|, dy, dx).
pub fn sad_flow(prev: &Frame, cur: &Frame, radius: i32) -> Vec<MotionVector> {
    let (w, h) = (cur.width() as i32, cur.height() as i32);
    let mut out = Vec::new();
    for by in 0..(h + 15) / 16 {
        for bx in 0..(w + 15) / 16 {
            let mut best: Option<(u64, i32, i32, i32)> = None;
            for dy in -radius..=radius {
                for dx in -radius..=radius {
                    let mut sad = 0u64;
                    let mut inside = true;
                    'block: for y in by * 16..((by + 1) * 16).min(h) {
                        for x in bx * 16..((bx + 1) * 16).min(w) {
                            let (sx, sy) = (x - dx, y - dy);
                            if sx < 0 || sy < 0 || sx >= w || sy >= h {
                                inside = false;
                                break 'block;
                            }
                            let p = cur.luma()[(y * w + x) as usize] as i64;
                            let q = prev.luma()[(sy * w + sx) as usize] as i64;
                            sad += (p - q).unsigned_abs();
                        }
                    }
                    if !inside {
                        continue;
                    }
                    let key = (sad, dx.abs() + dy.abs(), dy, dx);
                    if best.is_none_or(|b| key < b) {
                        best = Some(key);
                    }
                }
            }
            let (_, _, dy, dx) = best.unwrap();
            out.push(MotionVector { dx, dy });
        }
    }
    out
}

// ---------------------------------------------------------------------------
// Pooling

/// Exact area-weighted pooling in rational arithmetic.
pub fn rational_pool(plane: &[i64], map_w: usize, map_h: usize, video_w: usize, video_h: usize) -> Vec<f64> {
    type Q = Ratio<i64>;
    let cover = |b: usize, map_len: usize, video_len: usize| -> Vec<(usize, Q)> {
        let lo = Q::new((16 * b * map_len) as i64, video_len as i64);
        let hi = Q::new((((16 * b + 16).min(video_len)) * map_len) as i64, video_len as i64);
        (0..map_len)
            .filter_map(|i| {
                let (a, z) = (Q::from(i as i64), Q::from(i as i64 + 1));
                let ov = hi.min(z) - lo.max(a);
                (ov > Q::from(0)).then_some((i, ov))
            })
            .collect()
    };
    let mut out = Vec::new();
    for r in 0..video_h.div_ceil(16) {
        let ys = cover(r, map_h, video_h);
        for c in 0..video_w.div_ceil(16) {
            let xs = cover(c, map_w, video_w);
            let (mut acc, mut area) = (Q::from(0), Q::from(0));
            for &(y, wy) in &ys {
                for &(x, wx) in &xs {
                    acc += wy * wx * plane[y * map_w + x];
                    area += wy * wx;
                }
            }
            let q = acc / area;
            out.push(*q.numer() as f64 / *q.denom() as f64);
        }
    }
    out
}

// ---------------------------------------------------------------------------
// Model

/// Thresholding a saliency channel into three classes; two distractor
/// channels carry noise.
pub fn saliency_class(s: f64) -> ImportanceClass {
    if s < 85.0 {
        ImportanceClass::Low
    } else if s < 170.0 {
        ImportanceClass::Mid
    } else {
        ImportanceClass::High
    }
}

pub fn saliency_dataset(seed: u64, items: usize, rows: usize, cols: usize) -> Vec<(FeatureStack, MacroblockGrid<ImportanceClass>)> {
    let mut rng = rng(seed);
    (0..items)
        .map(|_| {
            let mut data = Vec::with_capacity(rows * cols * 3);
            let mut classes = Vec::with_capacity(rows * cols);
            for _ in 0..rows * cols {
                let s: f64 = rng.gen_range(0.0..255.0);
                data.extend([s, rng.gen_range(0.0..1.0), rng.gen_range(0.0..1.0)]);
                classes.push(saliency_class(s));
            }
            let layout = vec![("saliency".to_string(), 1), ("noise".to_string(), 2)];
            (
                FeatureStack::new(rows, cols, layout, data).unwrap(),
                MacroblockGrid::new(rows, cols, classes).unwrap(),
            )
        })
        .collect()
}
