//! Deterministic synthetic datasets.
//!
//! `gen_synthetic_seg` builds textured RGB scenes with 1-3 anti-aliased
//! ellipses/rectangles and exact binary foreground masks.
//!
//! `gen_synthetic_digits` renders distorted digit glyphs (stroke polylines
//! under random affine + jitter, variable stroke width, blur and speckle)
//! as a desk-scale stand-in when the MNIST archives are not on disk. The
//! distortion budget is deliberately aggressive so compact models do not
//! saturate.

use super::{LabeledDataset, Targets};
use crate::error::{Error, Result};
use crate::rng::{derive, rng_from_seed, Rng};
use crate::tensor::Tensor;
use rand::seq::SliceRandom;
use rand::Rng as _;
use rand_distr::StandardNormal;
use std::f64::consts::PI;

// ---------------------------------------------------------------------------
// Segmentation scenes
// ---------------------------------------------------------------------------

#[derive(Clone, Copy, Debug)]
enum ShapeKind {
    Ellipse { rx: f64, ry: f64 },
    Rect { hw: f64, hh: f64 },
}

#[derive(Clone, Copy, Debug)]
struct Shape {
    cx: f64,
    cy: f64,
    rot: f64,
    kind: ShapeKind,
    color: [f64; 3],
}

/// Analytic geometry of one generated shape, for oracle checks.
#[derive(Clone, Copy, Debug)]
pub struct ShapeInfo {
    pub area: f64,
    pub perimeter: f64,
}

impl Shape {
    /// Signed distance-like value: negative inside, approximately in pixels.
    fn signed(&self, x: f64, y: f64) -> f64 {
        let (s, c) = self.rot.sin_cos();
        let dx = c * (x - self.cx) + s * (y - self.cy);
        let dy = -s * (x - self.cx) + c * (y - self.cy);
        match self.kind {
            ShapeKind::Ellipse { rx, ry } => {
                let q = (dx / rx) * (dx / rx) + (dy / ry) * (dy / ry);
                (q.sqrt() - 1.0) * rx.min(ry)
            }
            ShapeKind::Rect { hw, hh } => (dx.abs() - hw).max(dy.abs() - hh),
        }
    }

    fn info(&self) -> ShapeInfo {
        match self.kind {
            ShapeKind::Ellipse { rx, ry } => ShapeInfo {
                area: PI * rx * ry,
                // Ramanujan approximation.
                perimeter: PI * (3.0 * (rx + ry) - ((3.0 * rx + ry) * (rx + 3.0 * ry)).sqrt()),
            },
            ShapeKind::Rect { hw, hh } => ShapeInfo {
                area: 4.0 * hw * hh,
                perimeter: 4.0 * (hw + hh),
            },
        }
    }
}

fn textured_background(res: usize, rng: &mut Rng) -> Vec<f64> {
    // Low-resolution color grid, bilinearly upsampled, plus fine noise.
    let grid = 5usize;
    let mut coarse = vec![0.0; 3 * grid * grid];
    for v in coarse.iter_mut() {
        *v = rng.gen_range(0.05..0.55);
    }
    let mut out = vec![0.0; 3 * res * res];
    let step = (grid - 1) as f64 / (res - 1) as f64;
    for ch in 0..3 {
        for y in 0..res {
            let gy = y as f64 * step;
            let y0 = (gy as usize).min(grid - 2);
            let fy = gy - y0 as f64;
            for x in 0..res {
                let gx = x as f64 * step;
                let x0 = (gx as usize).min(grid - 2);
                let fx = gx - x0 as f64;
                let at = |yy: usize, xx: usize| coarse[(ch * grid + yy) * grid + xx];
                let v = at(y0, x0) * (1.0 - fy) * (1.0 - fx)
                    + at(y0, x0 + 1) * (1.0 - fy) * fx
                    + at(y0 + 1, x0) * fy * (1.0 - fx)
                    + at(y0 + 1, x0 + 1) * fy * fx;
                let noise: f64 = rng.sample::<f64, _>(StandardNormal) * 0.02;
                out[(ch * res + y) * res + x] = (v + noise).clamp(0.0, 1.0);
            }
        }
    }
    out
}

/// Generates `n` RGB segmentation scenes at `resolution` with exact binary
/// masks, returning the per-sample shape geometry as well.
pub fn gen_synthetic_seg_detailed(
    n: usize,
    resolution: usize,
    seed: u64,
) -> Result<(LabeledDataset, Vec<Vec<ShapeInfo>>)> {
    if resolution < 16 {
        return Err(Error::InvalidSpec(format!(
            "resolution must be >= 16, got {resolution}"
        )));
    }
    let res = resolution;
    let mut rng = rng_from_seed(derive(seed, "synthetic-seg"));
    let mut images = Vec::with_capacity(n * 3 * res * res);
    let mut masks = Vec::with_capacity(n * res * res);
    let mut infos = Vec::with_capacity(n);

    let r_lo = res as f64 * 0.09;
    let r_hi = res as f64 * 0.22;
    for _ in 0..n {
        let mut img = textured_background(res, &mut rng);
        let mut mask = vec![0.0; res * res];
        let n_shapes = rng.gen_range(1..=3usize);
        let mut shapes = Vec::with_capacity(n_shapes);
        for _ in 0..n_shapes {
            let kind = if rng.gen_bool(0.5) {
                ShapeKind::Ellipse {
                    rx: rng.gen_range(r_lo..r_hi),
                    ry: rng.gen_range(r_lo..r_hi),
                }
            } else {
                ShapeKind::Rect {
                    hw: rng.gen_range(r_lo * 0.9..r_hi * 0.9),
                    hh: rng.gen_range(r_lo * 0.9..r_hi * 0.9),
                }
            };
            let margin = r_hi + 2.0;
            shapes.push(Shape {
                cx: rng.gen_range(margin..res as f64 - margin),
                cy: rng.gen_range(margin..res as f64 - margin),
                rot: rng.gen_range(0.0..PI),
                kind,
                color: [
                    rng.gen_range(0.6..1.0),
                    rng.gen_range(0.6..1.0),
                    rng.gen_range(0.6..1.0),
                ],
            });
        }
        let aa = 0.8;
        for y in 0..res {
            for x in 0..res {
                let (px, py) = (x as f64 + 0.5, y as f64 + 0.5);
                for s in &shapes {
                    let d = s.signed(px, py);
                    if d <= 0.0 {
                        mask[y * res + x] = 1.0;
                    }
                    // Anti-aliased rendering into the image only; the mask
                    // stays an exact indicator.
                    let alpha = ((aa - d) / (2.0 * aa)).clamp(0.0, 1.0);
                    if alpha > 0.0 {
                        for ch in 0..3 {
                            let at = (ch * res + y) * res + x;
                            img[at] = img[at] * (1.0 - alpha) + s.color[ch] * alpha;
                        }
                    }
                }
            }
        }
        images.extend_from_slice(&img);
        masks.extend_from_slice(&mask);
        infos.push(shapes.iter().map(|s| s.info()).collect());
    }
    let ds = LabeledDataset::new(
        Tensor::new(vec![n, 3, res, res], images)?,
        Targets::Masks(Tensor::new(vec![n, 1, res, res], masks)?),
        "synthetic-seg",
    )?;
    Ok((ds, infos))
}

pub fn gen_synthetic_seg(n: usize, resolution: usize, seed: u64) -> Result<LabeledDataset> {
    Ok(gen_synthetic_seg_detailed(n, resolution, seed)?.0)
}

// ---------------------------------------------------------------------------
// Digit glyphs
// ---------------------------------------------------------------------------

/// Distortion budget for the digit renderer. The defaults are deliberately
/// harsh; compact students should not saturate on this data.
#[derive(Clone, Copy, Debug)]
pub struct DigitParams {
    pub rotation_max: f64,
    pub shear_max: f64,
    pub scale_lo: f64,
    pub scale_hi: f64,
    pub translate_max: f64,
    pub jitter_sigma: f64,
    pub stroke_lo: f64,
    pub stroke_hi: f64,
    pub noise_sigma: f64,
    pub blur_prob: f64,
    /// Up to this many faint clutter strokes per image.
    pub distractor_max: usize,
}

impl Default for DigitParams {
    fn default() -> Self {
        Self {
            rotation_max: 0.40,
            shear_max: 0.35,
            scale_lo: 0.65,
            scale_hi: 1.12,
            translate_max: 3.0,
            jitter_sigma: 0.6,
            stroke_lo: 0.7,
            stroke_hi: 1.9,
            noise_sigma: 0.05,
            blur_prob: 0.8,
            distractor_max: 2,
        }
    }
}

type Polyline = Vec<(f64, f64)>;

fn arc(cx: f64, cy: f64, rx: f64, ry: f64, a0: f64, a1: f64, steps: usize) -> Polyline {
    (0..=steps)
        .map(|i| {
            let t = a0 + (a1 - a0) * i as f64 / steps as f64;
            (cx + rx * t.cos(), cy + ry * t.sin())
        })
        .collect()
}

/// Control strokes per digit class, in a unit box with y pointing down.
fn glyph_strokes(digit: usize) -> Vec<Polyline> {
    match digit {
        0 => vec![arc(0.5, 0.5, 0.30, 0.42, 0.0, 2.0 * PI, 20)],
        1 => vec![
            vec![(0.32, 0.28), (0.55, 0.08)],
            vec![(0.55, 0.08), (0.55, 0.92)],
        ],
        2 => vec![
            arc(0.5, 0.32, 0.28, 0.24, -PI, 0.0, 10),
            vec![(0.78, 0.32), (0.22, 0.90)],
            vec![(0.22, 0.90), (0.80, 0.90)],
        ],
        3 => vec![
            arc(0.47, 0.30, 0.26, 0.21, -PI * 0.9, PI * 0.45, 12),
            arc(0.47, 0.70, 0.29, 0.23, -PI * 0.45, PI * 0.9, 12),
        ],
        4 => vec![
            vec![(0.68, 0.08), (0.20, 0.62)],
            vec![(0.20, 0.62), (0.86, 0.62)],
            vec![(0.68, 0.08), (0.68, 0.92)],
        ],
        5 => vec![
            vec![(0.76, 0.08), (0.26, 0.08)],
            vec![(0.26, 0.08), (0.24, 0.46)],
            arc(0.47, 0.66, 0.27, 0.24, -PI * 0.55, PI * 0.8, 12),
        ],
        6 => vec![
            arc(0.52, 0.40, 0.30, 0.34, PI * 0.55, PI * 1.35, 10),
            arc(0.50, 0.68, 0.23, 0.21, 0.0, 2.0 * PI, 16),
        ],
        7 => vec![
            vec![(0.20, 0.10), (0.80, 0.10)],
            vec![(0.80, 0.10), (0.40, 0.92)],
        ],
        8 => vec![
            arc(0.5, 0.30, 0.21, 0.20, 0.0, 2.0 * PI, 16),
            arc(0.5, 0.71, 0.25, 0.22, 0.0, 2.0 * PI, 16),
        ],
        9 => vec![
            arc(0.5, 0.32, 0.23, 0.22, 0.0, 2.0 * PI, 16),
            vec![(0.73, 0.34), (0.64, 0.92)],
        ],
        _ => unreachable!("digit classes are 0..=9"),
    }
}

const SIDE: usize = 28;

fn render_digit(digit: usize, params: &DigitParams, rng: &mut Rng) -> Vec<f64> {
    let rot = rng.gen_range(-params.rotation_max..params.rotation_max);
    let shear = rng.gen_range(-params.shear_max..params.shear_max);
    let sx = rng.gen_range(params.scale_lo..params.scale_hi);
    let sy = rng.gen_range(params.scale_lo..params.scale_hi);
    let tx = rng.gen_range(-params.translate_max..params.translate_max);
    let ty = rng.gen_range(-params.translate_max..params.translate_max);
    let stroke = rng.gen_range(params.stroke_lo..params.stroke_hi);
    let contrast = rng.gen_range(0.6..0.95);

    let (sin, cos) = rot.sin_cos();
    // Unit box -> 20 px glyph box centered in the 28 px frame, distorted
    // about the frame center.
    let place = |(ux, uy): (f64, f64)| -> (f64, f64) {
        let gx = 4.0 + ux * 20.0 - 14.0;
        let gy = 4.0 + uy * 20.0 - 14.0;
        let gx = gx + shear * gy;
        let (gx, gy) = (gx * sx, gy * sy);
        let (gx, gy) = (cos * gx - sin * gy, sin * gx + cos * gy);
        (gx + 14.0 + tx, gy + 14.0 + ty)
    };

    let mut buf = vec![0.0f64; SIDE * SIDE];
    let aa = 0.7;
    for stroke_pts in glyph_strokes(digit) {
        let pts: Vec<(f64, f64)> = stroke_pts
            .into_iter()
            .map(place)
            .map(|(x, y)| {
                (
                    x + rng.sample::<f64, _>(StandardNormal) * params.jitter_sigma,
                    y + rng.sample::<f64, _>(StandardNormal) * params.jitter_sigma,
                )
            })
            .collect();
        for seg in pts.windows(2) {
            stamp_segment(&mut buf, seg[0], seg[1], stroke, aa, 1.0);
        }
    }

    // Clutter: short faint strokes that are not part of the glyph.
    let n_distractors = if params.distractor_max > 0 {
        rng.gen_range(0..=params.distractor_max)
    } else {
        0
    };
    for _ in 0..n_distractors {
        let x0 = rng.gen_range(2.0..26.0);
        let y0 = rng.gen_range(2.0..26.0);
        let ang = rng.gen_range(0.0..2.0 * PI);
        let len = rng.gen_range(3.0..8.0);
        let (x1, y1) = (x0 + ang.cos() * len, y0 + ang.sin() * len);
        let faint = rng.gen_range(0.2..0.4);
        let r = rng.gen_range(0.5..1.0);
        stamp_segment(&mut buf, (x0, y0), (x1, y1), r, aa, faint);
    }

    if rng.gen_bool(params.blur_prob) {
        buf = blur3(&buf, SIDE, SIDE);
    }
    for v in &mut buf {
        let noise: f64 = rng.sample::<f64, _>(StandardNormal) * params.noise_sigma;
        *v = (*v * contrast + noise).clamp(0.0, 1.0);
    }
    buf
}

/// Stamps one capsule-shaped stroke into the buffer with max blending.
fn stamp_segment(
    buf: &mut [f64],
    (x0, y0): (f64, f64),
    (x1, y1): (f64, f64),
    stroke: f64,
    aa: f64,
    peak: f64,
) {
    let lo_x = (x0.min(x1) - stroke - aa).floor().max(0.0) as usize;
    let hi_x = (x0.max(x1) + stroke + aa).ceil().min(SIDE as f64 - 1.0) as usize;
    let lo_y = (y0.min(y1) - stroke - aa).floor().max(0.0) as usize;
    let hi_y = (y0.max(y1) + stroke + aa).ceil().min(SIDE as f64 - 1.0) as usize;
    let dx = x1 - x0;
    let dy = y1 - y0;
    let len2 = (dx * dx + dy * dy).max(1e-12);
    for y in lo_y..=hi_y {
        for x in lo_x..=hi_x {
            let px = x as f64 + 0.5;
            let py = y as f64 + 0.5;
            let t = (((px - x0) * dx + (py - y0) * dy) / len2).clamp(0.0, 1.0);
            let ddx = px - (x0 + t * dx);
            let ddy = py - (y0 + t * dy);
            let d = (ddx * ddx + ddy * ddy).sqrt();
            let v = peak * ((stroke + aa - d) / (2.0 * aa)).clamp(0.0, 1.0);
            let at = y * SIDE + x;
            if v > buf[at] {
                buf[at] = v;
            }
        }
    }
}

fn blur3(src: &[f64], h: usize, w: usize) -> Vec<f64> {
    // 3x3 binomial kernel.
    let mut out = vec![0.0; h * w];
    for y in 0..h {
        for x in 0..w {
            let mut acc = 0.0;
            let mut wsum = 0.0;
            for dy in -1i64..=1 {
                for dx in -1i64..=1 {
                    let yy = y as i64 + dy;
                    let xx = x as i64 + dx;
                    if yy < 0 || xx < 0 || yy >= h as i64 || xx >= w as i64 {
                        continue;
                    }
                    let wv = (2.0 - dy.abs() as f64) * (2.0 - dx.abs() as f64) / 16.0;
                    acc += src[yy as usize * w + xx as usize] * wv;
                    wsum += wv;
                }
            }
            out[y * w + x] = acc / wsum;
        }
    }
    out
}

/// Renders `n` distorted digit samples (28 x 28 mono, balanced classes,
/// shuffled order), deterministic in `seed`.
pub fn gen_synthetic_digits(n: usize, seed: u64, params: &DigitParams) -> Result<LabeledDataset> {
    let mut rng = rng_from_seed(derive(seed, "synthetic-digits"));
    let mut order: Vec<usize> = (0..n).map(|i| i % 10).collect();
    order.shuffle(&mut rng);
    let mut images = Vec::with_capacity(n * SIDE * SIDE);
    for &digit in &order {
        images.extend(render_digit(digit, params, &mut rng));
    }
    LabeledDataset::new(
        Tensor::new(vec![n, 1, SIDE, SIDE], images)?,
        Targets::Classes(order),
        "synthetic-digits",
    )
}
