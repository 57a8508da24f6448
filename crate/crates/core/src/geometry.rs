//! Planar geometry used by every planner: points, distances, regular
//! polygons around a task, and segment proximity for swept-motion checks.

use serde::{Deserialize, Serialize};
use std::f64::consts::PI;

/// A point in the world plane, in meters.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct Position {
    pub x: f64,
    pub y: f64,
}

impl Position {
    pub const fn new(x: f64, y: f64) -> Self {
        Self { x, y }
    }

    pub fn is_finite(&self) -> bool {
        self.x.is_finite() && self.y.is_finite()
    }

    pub fn translate(&self, dx: f64, dy: f64) -> Self {
        Self::new(self.x + dx, self.y + dy)
    }
}

/// Euclidean distance between two points.
pub fn euclidean(a: Position, b: Position) -> f64 {
    (a.x - b.x).hypot(a.y - b.y)
}

/// Vertices of a regular `n`-gon of circumradius `radius` around `center`.
///
/// Vertex 0 sits due North and the rest follow clockwise, so vertex `k` is at
/// bearing `90° - k * 360° / n` measured counter-clockwise from +x.
pub fn polygon_vertices(center: Position, n: usize, radius: f64) -> Vec<Position> {
    (0..n)
        .map(|k| {
            let angle = PI / 2.0 - (k as f64) * 2.0 * PI / (n as f64);
            Position::new(
                center.x + radius * angle.cos(),
                center.y + radius * angle.sin(),
            )
        })
        .collect()
}

/// Shortest distance from point `p` to the segment `a`-`b`.
pub fn point_segment_distance(p: Position, a: Position, b: Position) -> f64 {
    let (dx, dy) = (b.x - a.x, b.y - a.y);
    let len2 = dx * dx + dy * dy;
    if len2 == 0.0 {
        return euclidean(p, a);
    }
    let t = (((p.x - a.x) * dx + (p.y - a.y) * dy) / len2).clamp(0.0, 1.0);
    euclidean(p, Position::new(a.x + t * dx, a.y + t * dy))
}

fn orientation(a: Position, b: Position, c: Position) -> f64 {
    (b.x - a.x) * (c.y - a.y) - (b.y - a.y) * (c.x - a.x)
}

fn segments_cross(a0: Position, a1: Position, b0: Position, b1: Position) -> bool {
    let d1 = orientation(b0, b1, a0);
    let d2 = orientation(b0, b1, a1);
    let d3 = orientation(a0, a1, b0);
    let d4 = orientation(a0, a1, b1);
    ((d1 > 0.0 && d2 < 0.0) || (d1 < 0.0 && d2 > 0.0))
        && ((d3 > 0.0 && d4 < 0.0) || (d3 < 0.0 && d4 > 0.0))
}

/// Shortest distance between segments `a0`-`a1` and `b0`-`b1`.
///
/// Zero-length segments degrade to points.
pub fn segment_distance(a0: Position, a1: Position, b0: Position, b1: Position) -> f64 {
    if segments_cross(a0, a1, b0, b1) {
        return 0.0;
    }
    point_segment_distance(a0, b0, b1)
        .min(point_segment_distance(a1, b0, b1))
        .min(point_segment_distance(b0, a0, a1))
        .min(point_segment_distance(b1, a0, a1))
}
