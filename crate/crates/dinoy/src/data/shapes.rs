//! Shape templates, rasterization, and keypoint layouts.
//!
//! Every shape is defined on the unit disc: a polygon (or circle) whose
//! vertices satisfy ‖v‖ ≤ 1. Instances are similarity transforms of the
//! template: `p = center + scale · R(θ) · v`. Rasterization tests pixel
//! centers with no anti-aliasing, so masks are exact.

use ndarray::Array2;
use serde::{Deserialize, Serialize};

#[derive(Clone, Copy, PartialEq, Eq, Hash, Debug, Serialize, Deserialize)]
pub enum ShapeKind {
    Triangle,
    Square,
    Circle,
    Star,
    Cross,
}

pub const ALL_SHAPES: [ShapeKind; 5] = [
    ShapeKind::Triangle,
    ShapeKind::Square,
    ShapeKind::Circle,
    ShapeKind::Star,
    ShapeKind::Cross,
];

impl ShapeKind {
    pub fn word(self) -> &'static str {
        match self {
            ShapeKind::Triangle => "triangle",
            ShapeKind::Square => "square",
            ShapeKind::Circle => "circle",
            ShapeKind::Star => "star",
            ShapeKind::Cross => "cross",
        }
    }

    pub fn index(self) -> usize {
        ALL_SHAPES.iter().position(|&s| s == self).unwrap()
    }

    pub fn keypoint_count(self) -> usize {
        match self {
            ShapeKind::Triangle => 3,
            ShapeKind::Square => 4,
            ShapeKind::Circle => 1,
            ShapeKind::Star => 10,
            ShapeKind::Cross => 12,
        }
    }
}

/// Polygon outline vertices in template space; `None` for the circle.
pub fn polygon_template(shape: ShapeKind) -> Option<Vec<[f64; 2]>> {
    use std::f64::consts::PI;
    match shape {
        ShapeKind::Circle => None,
        ShapeKind::Triangle => {
            // equilateral, apex up (screen y grows downward, so -sin)
            Some(
                (0..3)
                    .map(|i| {
                        let a = PI / 2.0 + i as f64 * 2.0 * PI / 3.0;
                        [a.cos(), -a.sin()]
                    })
                    .collect(),
            )
        }
        ShapeKind::Square => Some(
            (0..4)
                .map(|i| {
                    let a = PI / 4.0 + i as f64 * PI / 2.0;
                    [a.cos(), -a.sin()]
                })
                .collect(),
        ),
        ShapeKind::Star => {
            // 5-pointed: alternate outer radius 1 and inner radius 0.45
            Some(
                (0..10)
                    .map(|i| {
                        let r = if i % 2 == 0 { 1.0 } else { 0.45 };
                        let a = PI / 2.0 + i as f64 * PI / 5.0;
                        [r * a.cos(), -r * a.sin()]
                    })
                    .collect(),
            )
        }
        ShapeKind::Cross => {
            // arm reach chosen so corner vertices stay inside the unit disc
            let (l, w) = (0.93, 0.35);
            Some(vec![
                [w, -l],
                [w, -w],
                [l, -w],
                [l, w],
                [w, w],
                [w, l],
                [-w, l],
                [-w, w],
                [-l, w],
                [-l, -w],
                [-w, -w],
                [-w, -l],
            ])
        }
    }
}

/// Keypoint template: polygon vertices, or the center for the circle.
pub fn keypoint_template(shape: ShapeKind) -> Vec<[f64; 2]> {
    match polygon_template(shape) {
        Some(v) => v,
        None => vec![[0.0, 0.0]],
    }
}

#[derive(Clone, Copy, Debug)]
pub struct Placement {
    /// center, pixels
    pub cx: f64,
    pub cy: f64,
    /// template-to-pixel scale
    pub scale: f64,
    /// rotation, radians
    pub rot: f64,
}

impl Placement {
    pub fn apply(&self, v: [f64; 2]) -> [f64; 2] {
        let (s, c) = self.rot.sin_cos();
        [
            self.cx + self.scale * (c * v[0] - s * v[1]),
            self.cy + self.scale * (s * v[0] + c * v[1]),
        ]
    }

    pub fn invert(&self, p: [f64; 2]) -> [f64; 2] {
        let (s, c) = self.rot.sin_cos();
        let dx = (p[0] - self.cx) / self.scale;
        let dy = (p[1] - self.cy) / self.scale;
        [c * dx + s * dy, -s * dx + c * dy]
    }
}

/// Even-odd point-in-polygon test.
fn inside_polygon(poly: &[[f64; 2]], x: f64, y: f64) -> bool {
    let mut inside = false;
    let n = poly.len();
    for i in 0..n {
        let [x1, y1] = poly[i];
        let [x2, y2] = poly[(i + 1) % n];
        if (y1 > y) != (y2 > y) {
            let xi = x1 + (y - y1) / (y2 - y1) * (x2 - x1);
            if x < xi {
                inside = !inside;
            }
        }
    }
    inside
}

/// Rasterize an instance into a binary mask over an `size`×`size` image,
/// testing pixel centers.
pub fn rasterize(shape: ShapeKind, place: &Placement, size: usize) -> Array2<u8> {
    let mut mask = Array2::<u8>::zeros((size, size));
    // limit scanning to the transform's bounding disc
    let r = place.scale + 1.0;
    let y0 = ((place.cy - r).floor().max(0.0)) as usize;
    let y1 = ((place.cy + r).ceil().min(size as f64 - 1.0)) as usize;
    let x0 = ((place.cx - r).floor().max(0.0)) as usize;
    let x1 = ((place.cx + r).ceil().min(size as f64 - 1.0)) as usize;
    match polygon_template(shape) {
        None => {
            let r2 = place.scale * place.scale;
            for y in y0..=y1 {
                for x in x0..=x1 {
                    let dx = x as f64 + 0.5 - place.cx;
                    let dy = y as f64 + 0.5 - place.cy;
                    if dx * dx + dy * dy <= r2 {
                        mask[[y, x]] = 1;
                    }
                }
            }
        }
        Some(poly) => {
            let verts: Vec<[f64; 2]> = poly.iter().map(|&v| place.apply(v)).collect();
            for y in y0..=y1 {
                for x in x0..=x1 {
                    if inside_polygon(&verts, x as f64 + 0.5, y as f64 + 0.5) {
                        mask[[y, x]] = 1;
                    }
                }
            }
        }
    }
    mask
}

/// Tight pixel bounds `(x0, y0, x1, y1)` of the set pixels (inclusive), or
/// `None` for an empty mask.
pub fn mask_bounds(mask: &Array2<u8>) -> Option<(usize, usize, usize, usize)> {
    let (h, w) = mask.dim();
    let (mut x0, mut y0, mut x1, mut y1) = (w, h, 0usize, 0usize);
    let mut any = false;
    for y in 0..h {
        for x in 0..w {
            if mask[[y, x]] != 0 {
                any = true;
                x0 = x0.min(x);
                y0 = y0.min(y);
                x1 = x1.max(x);
                y1 = y1.max(y);
            }
        }
    }
    any.then_some((x0, y0, x1, y1))
}
