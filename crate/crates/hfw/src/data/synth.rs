//! Procedural stroke glyphs: an offline stand-in for handwritten characters.
//!
//! Each class owns a prototype of two to four strokes (polylines or arcs)
//! anchored on a coarse lattice in unit coordinates. A sample perturbs every control point, applies a small
//! random similarity transform and renders anti-aliased dark ink on white.

use std::f64::consts::PI;

use image::GrayImage;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::{CharacterClass, CharacterDataset};
use crate::error::{AppError, Result};

type Pt = (f64, f64);

/// Control points snap to a 4x4 lattice so that classes recombine a shared
/// stock of stroke shapes, the way characters of one alphabet do.
const LATTICE: [f64; 4] = [0.2, 0.4, 0.6, 0.8];

#[derive(Clone, Copy, PartialEq, Eq, PartialOrd, Ord)]
enum Stroke {
    Line([(u8, u8); 3], u8),
    Arc { center: (u8, u8), radius: u8, start: u8, quarters: u8 },
}

impl Stroke {
    fn random(rng: &mut ChaCha8Rng) -> Self {
        let node = |rng: &mut ChaCha8Rng| (rng.random_range(0..4u8), rng.random_range(0..4u8));
        if rng.random::<f64>() < 0.3 {
            Stroke::Arc {
                center: (rng.random_range(1..3), rng.random_range(1..3)),
                radius: rng.random_range(1..=2),
                start: rng.random_range(0..4),
                quarters: rng.random_range(2..=3),
            }
        } else {
            let a = node(rng);
            let mut b = node(rng);
            while b == a {
                b = node(rng);
            }
            let c = node(rng);
            Stroke::Line([a, b, c], rng.random_range(2..=3))
        }
    }

    fn points(self) -> Vec<Pt> {
        let at = |(i, j): (u8, u8)| (LATTICE[i as usize], LATTICE[j as usize]);
        match self {
            Stroke::Line(nodes, n) => nodes[..n as usize].iter().map(|&q| at(q)).collect(),
            Stroke::Arc { center, radius, start, quarters } => {
                let (cx, cy) = at(center);
                let r = 0.1 * radius as f64;
                let a0 = start as f64 * PI / 2.0;
                let sweep = quarters as f64 * PI / 2.0;
                (0..=12)
                    .map(|i| {
                        let a = a0 + sweep * i as f64 / 12.0;
                        (cx + r * a.cos(), cy + r * a.sin())
                    })
                    .collect()
            }
        }
    }
}

fn prototype(rng: &mut ChaCha8Rng) -> Vec<Stroke> {
    let n = rng.random_range(2..=4);
    let mut strokes: Vec<Stroke> = Vec::with_capacity(n);
    while strokes.len() < n {
        let s = Stroke::random(rng);
        if !strokes.contains(&s) {
            strokes.push(s);
        }
    }
    strokes.sort();
    strokes
}

fn seg_dist(p: Pt, a: Pt, b: Pt) -> f64 {
    let (dx, dy) = (b.0 - a.0, b.1 - a.1);
    let len2 = dx * dx + dy * dy;
    let t = if len2 == 0.0 {
        0.0
    } else {
        (((p.0 - a.0) * dx + (p.1 - a.1) * dy) / len2).clamp(0.0, 1.0)
    };
    let (qx, qy) = (a.0 + t * dx - p.0, a.1 + t * dy - p.1);
    (qx * qx + qy * qy).sqrt()
}

fn render(strokes: &[Vec<Pt>], extent: usize, thickness: f64) -> GrayImage {
    let e = extent as f64;
    let half = thickness / 2.0;
    let mut img = GrayImage::new(extent as u32, extent as u32);
    for (x, y, px) in img.enumerate_pixels_mut() {
        let p = (x as f64 + 0.5, y as f64 + 0.5);
        let mut d = f64::INFINITY;
        for s in strokes {
            for w in s.windows(2) {
                let a = (w[0].0 * e, w[0].1 * e);
                let b = (w[1].0 * e, w[1].1 * e);
                d = d.min(seg_dist(p, a, b));
            }
        }
        let ink = (half + 0.5 - d).clamp(0.0, 1.0);
        px.0[0] = (255.0 * (1.0 - ink)).round() as u8;
    }
    img
}

fn sample(proto: &[Vec<Pt>], extent: usize, rng: &mut ChaCha8Rng) -> GrayImage {
    let scale = rng.random_range(0.95..1.05);
    let theta = rng.random_range(-5.0f64..5.0).to_radians();
    let shift = (rng.random_range(-0.03..0.03), rng.random_range(-0.03..0.03));
    let (s, c) = theta.sin_cos();
    let strokes: Vec<Vec<Pt>> = proto
        .iter()
        .map(|stroke| {
            stroke
                .iter()
                .map(|&(x, y)| {
                    let x = x + rng.random_range(-0.02..0.02) - 0.5;
                    let y = y + rng.random_range(-0.02..0.02) - 0.5;
                    (
                        0.5 + shift.0 + scale * (c * x - s * y),
                        0.5 + shift.1 + scale * (s * x + c * y),
                    )
                })
                .collect()
        })
        .collect();
    let thickness = extent as f64 / 28.0 * rng.random_range(1.8..2.2);
    render(&strokes, extent, thickness)
}

/// `n_classes` × `per_class` glyphs of `extent`² pixels, reproducible from `seed`.
pub fn synth_glyphs(n_classes: usize, per_class: usize, extent: usize, seed: u64) -> Result<CharacterDataset> {
    if n_classes < 2 || per_class == 0 || extent < 4 {
        return Err(AppError::Data(format!(
            "synthetic glyphs need >= 2 classes, >= 1 image each and extent >= 4 \
             (got {n_classes}, {per_class}, {extent})"
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut seen = Vec::with_capacity(n_classes);
    while seen.len() < n_classes {
        let proto = prototype(&mut rng);
        if !seen.contains(&proto) {
            seen.push(proto);
        }
    }
    let classes = seen
        .iter()
        .enumerate()
        .map(|(i, proto)| {
            let proto: Vec<Vec<Pt>> = proto.iter().map(|s| s.points()).collect();
            let images = (0..per_class).map(|_| sample(&proto, extent, &mut rng)).collect();
            CharacterClass {
                name: format!("synth/{i:05}"),
                images,
            }
        })
        .collect();
    Ok(CharacterDataset {
        classes,
        skipped: Vec::new(),
    })
}
