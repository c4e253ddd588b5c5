//! Deterministic synthetic handwritten-digit corpus.
//!
//! Digits 0-9 are rendered from stroke skeletons (polylines and
//! elliptical arcs) with per-sample random affine jitter, stroke width,
//! brightness and pixel noise, all drawn from counter-based streams.
//! The corpus plays the role of the MNIST-style source domain in
//! self-contained experiments; export it through the IDX writer to
//! exercise the same ingestion path as real digit files.

use ndarray::Array4;
use rand::Rng;

use crate::dataset::LabeledDataset;
use crate::error::Result;
use crate::rng;

const SIZE: usize = 28;

type Point = (f64, f64);

fn arc(cx: f64, cy: f64, rx: f64, ry: f64, a0: f64, a1: f64, n: usize) -> Vec<Point> {
    (0..=n)
        .map(|i| {
            let t = a0 + (a1 - a0) * i as f64 / n as f64;
            (cx + rx * t.cos(), cy + ry * t.sin())
        })
        .collect()
}

/// Stroke skeleton for one digit class, in unit coordinates (y down).
fn skeleton(digit: usize) -> Vec<Vec<Point>> {
    use std::f64::consts::PI;
    match digit {
        0 => vec![arc(0.5, 0.5, 0.20, 0.32, 0.0, 2.0 * PI, 24)],
        1 => vec![
            vec![(0.38, 0.30), (0.52, 0.18)],
            vec![(0.52, 0.18), (0.52, 0.82)],
        ],
        2 => vec![
            arc(0.5, 0.34, 0.18, 0.16, -PI, 0.35, 14),
            vec![(0.665, 0.39), (0.32, 0.82)],
            vec![(0.32, 0.82), (0.70, 0.82)],
        ],
        3 => vec![
            arc(0.48, 0.33, 0.17, 0.15, -PI * 0.85, PI * 0.5, 14),
            arc(0.48, 0.65, 0.19, 0.17, -PI * 0.5, PI * 0.85, 14),
        ],
        4 => vec![
            vec![(0.62, 0.18), (0.30, 0.58)],
            vec![(0.30, 0.58), (0.74, 0.58)],
            vec![(0.62, 0.18), (0.62, 0.82)],
        ],
        5 => vec![
            vec![(0.68, 0.18), (0.35, 0.18)],
            vec![(0.35, 0.18), (0.34, 0.46)],
            arc(0.48, 0.62, 0.18, 0.17, -PI * 0.45, PI * 0.75, 16),
        ],
        6 => vec![
            arc(0.50, 0.63, 0.17, 0.18, 0.0, 2.0 * PI, 20),
            arc(0.62, 0.47, 0.34, 0.40, -PI * 0.82, -PI * 0.35, 12),
        ],
        7 => vec![
            vec![(0.30, 0.18), (0.70, 0.18)],
            vec![(0.70, 0.18), (0.42, 0.82)],
        ],
        8 => vec![
            arc(0.5, 0.34, 0.15, 0.15, 0.0, 2.0 * PI, 20),
            arc(0.5, 0.66, 0.18, 0.17, 0.0, 2.0 * PI, 20),
        ],
        9 => vec![
            arc(0.50, 0.37, 0.16, 0.17, 0.0, 2.0 * PI, 20),
            vec![(0.66, 0.40), (0.58, 0.82)],
        ],
        _ => unreachable!("digit classes are 0..10"),
    }
}

fn dist_to_segment(p: Point, a: Point, b: Point) -> f64 {
    let (px, py) = p;
    let (ax, ay) = a;
    let (bx, by) = b;
    let (dx, dy) = (bx - ax, by - ay);
    let len2 = dx * dx + dy * dy;
    let t = if len2 == 0.0 {
        0.0
    } else {
        (((px - ax) * dx + (py - ay) * dy) / len2).clamp(0.0, 1.0)
    };
    let (cx, cy) = (ax + t * dx, ay + t * dy);
    ((px - cx).powi(2) + (py - cy).powi(2)).sqrt()
}

struct Jitter {
    cos: f64,
    sin: f64,
    scale: f64,
    tx: f64,
    ty: f64,
    shear: f64,
}

impl Jitter {
    fn apply(&self, (x, y): Point) -> Point {
        let (x, y) = (x - 0.5, y - 0.5);
        let x = x + self.shear * y;
        let (x, y) = (x * self.scale, y * self.scale);
        let (x, y) = (x * self.cos - y * self.sin, x * self.sin + y * self.cos);
        (x + 0.5 + self.tx, y + 0.5 + self.ty)
    }
}

fn render(digit: usize, rng: &mut impl Rng) -> Vec<f64> {
    let jitter = Jitter {
        cos: 0.0,
        sin: 0.0,
        scale: rng.random_range(0.72..1.05),
        tx: rng.random_range(-0.07..0.07),
        ty: rng.random_range(-0.07..0.07),
        shear: rng.random_range(-0.18..0.18),
    };
    let angle: f64 = rng.random_range(-0.22..0.22);
    let jitter = Jitter {
        cos: angle.cos(),
        sin: angle.sin(),
        ..jitter
    };
    let thickness = rng.random_range(0.030..0.062);
    let brightness = rng.random_range(0.72..1.0);
    let soft = 0.025;

    let strokes: Vec<Vec<Point>> = skeleton(digit)
        .into_iter()
        .map(|poly| poly.into_iter().map(|p| jitter.apply(p)).collect())
        .collect();

    let mut pixels = vec![0.0f64; SIZE * SIZE];
    for py in 0..SIZE {
        for px in 0..SIZE {
            let p = (
                (px as f64 + 0.5) / SIZE as f64,
                (py as f64 + 0.5) / SIZE as f64,
            );
            let mut best = f64::INFINITY;
            for poly in &strokes {
                for seg in poly.windows(2) {
                    let d = dist_to_segment(p, seg[0], seg[1]);
                    if d < best {
                        best = d;
                    }
                }
            }
            let v = ((thickness - best) / soft + 1.0).clamp(0.0, 1.0) * brightness;
            let noise = rng.random_range(0.0..0.04);
            pixels[py * SIZE + px] = (v + noise).clamp(0.0, 1.0);
        }
    }
    pixels
}

/// Generates `count` labeled 28x28 grayscale digit images, balanced over
/// the 10 classes, deterministic given the seed.
pub fn generate(count: usize, seed: u64, domain_tag: &str) -> Result<LabeledDataset> {
    generate_range(0, count, seed, domain_tag)
}

/// Generates corpus indices [offset, offset+count); slices with
/// disjoint index ranges under the same seed share no samples, which
/// gives train/eval splits from one corpus.
pub fn generate_range(
    offset: usize,
    count: usize,
    seed: u64,
    domain_tag: &str,
) -> Result<LabeledDataset> {
    let mut images = Array4::zeros((count, 1, SIZE, SIZE));
    let mut labels = Vec::with_capacity(count);
    for slot in 0..count {
        let i = offset + slot;
        let label = i % 10;
        let mut rng = rng::stream(&[seed, i as u64]);
        let pixels = render(label, &mut rng);
        for y in 0..SIZE {
            for x in 0..SIZE {
                images[(slot, 0, y, x)] = pixels[y * SIZE + x];
            }
        }
        labels.push(label);
    }
    LabeledDataset::new(images, labels, domain_tag, 10)
}
