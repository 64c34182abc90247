use rand::Rng;

use super::Dataset;
use crate::error::{Error, Result};
use crate::rng::{stream, Stream};
use crate::tensor::Tensor;

type Segment = ((f64, f64), (f64, f64));

/// Polyline approximation of an elliptical arc; angles in degrees, y grows downward.
fn arc(out: &mut Vec<Segment>, cx: f64, cy: f64, rx: f64, ry: f64, from: f64, to: f64) {
    let steps = (((to - from).abs() / 20.0).ceil() as usize).max(2);
    let point = |a: f64| {
        let r = a.to_radians();
        (cx + rx * r.cos(), cy + ry * r.sin())
    };
    let mut prev = point(from);
    for i in 1..=steps {
        let next = point(from + (to - from) * i as f64 / steps as f64);
        out.push((prev, next));
        prev = next;
    }
}

fn line(out: &mut Vec<Segment>, x0: f64, y0: f64, x1: f64, y1: f64) {
    out.push(((x0, y0), (x1, y1)));
}

/// Digit-like stroke skeletons in the unit box `[-1, 1]²`.
fn template(class: usize) -> Vec<Segment> {
    let mut s = Vec::new();
    match class {
        0 => arc(&mut s, 0.0, 0.0, 0.55, 0.85, 0.0, 360.0),
        1 => {
            line(&mut s, 0.0, -0.85, 0.0, 0.85);
            line(&mut s, -0.35, -0.5, 0.0, -0.85);
        }
        2 => {
            arc(&mut s, 0.0, -0.4, 0.5, 0.45, 180.0, 400.0);
            line(&mut s, 0.47, -0.25, -0.55, 0.85);
            line(&mut s, -0.55, 0.85, 0.55, 0.85);
        }
        3 => {
            arc(&mut s, 0.0, -0.42, 0.45, 0.42, 200.0, 450.0);
            arc(&mut s, 0.0, 0.42, 0.5, 0.43, 270.0, 520.0);
        }
        4 => {
            line(&mut s, 0.25, -0.85, 0.25, 0.85);
            line(&mut s, 0.25, -0.85, -0.55, 0.3);
            line(&mut s, -0.55, 0.3, 0.6, 0.3);
        }
        5 => {
            line(&mut s, 0.5, -0.85, -0.45, -0.85);
            line(&mut s, -0.45, -0.85, -0.5, -0.1);
            arc(&mut s, 0.0, 0.35, 0.5, 0.5, 215.0, 510.0);
        }
        6 => {
            arc(&mut s, 0.0, 0.35, 0.5, 0.5, 0.0, 360.0);
            line(&mut s, 0.35, -0.85, -0.47, 0.2);
        }
        7 => {
            line(&mut s, -0.55, -0.85, 0.55, -0.85);
            line(&mut s, 0.55, -0.85, -0.15, 0.85);
        }
        8 => {
            arc(&mut s, 0.0, -0.45, 0.4, 0.4, 0.0, 360.0);
            arc(&mut s, 0.0, 0.4, 0.5, 0.45, 0.0, 360.0);
        }
        9 => {
            arc(&mut s, 0.0, -0.35, 0.5, 0.5, 0.0, 360.0);
            line(&mut s, 0.5, -0.35, 0.3, 0.85);
        }
        _ => unreachable!("only ten glyph templates exist"),
    }
    s
}

fn segment_distance(p: (f64, f64), seg: &Segment) -> f64 {
    let ((x0, y0), (x1, y1)) = *seg;
    let (dx, dy) = (x1 - x0, y1 - y0);
    let len2 = dx * dx + dy * dy;
    let t = if len2 == 0.0 {
        0.0
    } else {
        (((p.0 - x0) * dx + (p.1 - y0) * dy) / len2).clamp(0.0, 1.0)
    };
    let (cx, cy) = (x0 + t * dx, y0 + t * dy);
    ((p.0 - cx).powi(2) + (p.1 - cy).powi(2)).sqrt()
}

struct Jitter {
    angle: f64,
    shift: (f64, f64),
    thickness: f64,
}

fn render(strokes: &[Segment], size: usize, j: &Jitter, out: &mut [f64]) {
    let center = (size as f64 - 1.0) / 2.0;
    let half_extent = 0.36 * size as f64;
    let (sin, cos) = j.angle.sin_cos();
    let half_width = j.thickness / 2.0;
    for y in 0..size {
        for x in 0..size {
            // Pixel centre back into template coordinates (inverse rotation).
            let px = (x as f64 - center - j.shift.0) / half_extent;
            let py = (y as f64 - center - j.shift.1) / half_extent;
            let u = cos * px + sin * py;
            let v = -sin * px + cos * py;
            let d = strokes
                .iter()
                .map(|s| segment_distance((u, v), s))
                .fold(f64::INFINITY, f64::min)
                * half_extent;
            out[y * size + x] = (half_width + 0.5 - d).clamp(0.0, 1.0);
        }
    }
}

/// Renders `n` single-channel `size×size` glyphs with labels cycling through
/// `0..class_count`. Each sample gets its own position (±2 px), rotation
/// (±15°) and stroke-thickness jitter, all drawn from `seed`.
pub fn generate_glyphs(n: usize, class_count: usize, size: usize, seed: u64) -> Result<Dataset> {
    if size < 8 {
        return Err(Error::Domain(format!("glyph size must be at least 8, got {size}")));
    }
    if class_count == 0 || class_count > 10 {
        return Err(Error::Domain(format!(
            "glyph class count must be in 1..=10, got {class_count}"
        )));
    }
    if n < class_count {
        return Err(Error::Domain(format!(
            "need at least one sample per class ({n} < {class_count})"
        )));
    }
    let templates: Vec<_> = (0..class_count).map(template).collect();
    let mut rng = stream(seed, Stream::Data);
    let scale = size as f64 / 16.0;
    let pixels = size * size;
    let mut data = vec![0.0; n * pixels];
    let mut labels = Vec::with_capacity(n);
    for (i, out) in data.chunks_exact_mut(pixels).enumerate() {
        let class = i % class_count;
        let jitter = Jitter {
            angle: rng.random_range(-15.0f64..15.0).to_radians(),
            shift: (
                rng.random_range(-2.0..2.0) * scale,
                rng.random_range(-2.0..2.0) * scale,
            ),
            thickness: rng.random_range(1.0..2.0) * scale,
        };
        render(&templates[class], size, &jitter, out);
        labels.push(class);
    }
    Dataset::new(
        Tensor::new(vec![n, 1, size, size], data)?,
        labels,
        class_count,
        "clean",
        seed,
    )
}
