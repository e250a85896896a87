//! Oriented boxes and ground-plane (BEV) polygon geometry.

use std::f64::consts::PI;

use crate::error::{Error, Result};

/// Wraps an angle into `[-π, π)`.
pub fn normalize_yaw(yaw: f64) -> f64 {
    let mut a = (yaw + PI).rem_euclid(2.0 * PI) - PI;
    if a >= PI {
        a -= 2.0 * PI;
    }
    a
}

/// An oriented 3D box standing on the ground plane.
///
/// `size` is `(w, l, h)`: length runs along the heading `yaw`, width across it.
#[derive(Clone, Debug, PartialEq)]
pub struct Box3D {
    pub center: [f64; 3],
    pub size: [f64; 3],
    pub yaw: f64,
    pub class_id: usize,
    pub velocity: [f64; 2],
}

impl Box3D {
    pub fn width(&self) -> f64 {
        self.size[0]
    }

    pub fn length(&self) -> f64 {
        self.size[1]
    }

    pub fn height(&self) -> f64 {
        self.size[2]
    }

    /// Coordinates of `(x, y)` in the box frame (x along the heading).
    pub fn to_local(&self, x: f64, y: f64) -> (f64, f64) {
        let (s, c) = self.yaw.sin_cos();
        let (dx, dy) = (x - self.center[0], y - self.center[1]);
        (c * dx + s * dy, -s * dx + c * dy)
    }

    /// Closed containment test, with `tol` slack on every face.
    pub fn contains(&self, p: [f64; 3], tol: f64) -> bool {
        let (lx, ly) = self.to_local(p[0], p[1]);
        let dz = p[2] - self.center[2];
        lx.abs() <= self.length() / 2.0 + tol
            && ly.abs() <= self.width() / 2.0 + tol
            && dz.abs() <= self.height() / 2.0 + tol
    }

    /// Ground-plane footprint corners, counter-clockwise.
    pub fn corners_bev(&self) -> [[f64; 2]; 4] {
        let (s, c) = self.yaw.sin_cos();
        let (hl, hw) = (self.length() / 2.0, self.width() / 2.0);
        let local = [[hl, hw], [-hl, hw], [-hl, -hw], [hl, -hw]];
        // rotate then translate; the local order is CCW for any rotation
        let mut out = [[0.0; 2]; 4];
        for (o, [lx, ly]) in out.iter_mut().zip(local) {
            *o = [self.center[0] + c * lx - s * ly, self.center[1] + s * lx + c * ly];
        }
        // [hl,hw] -> [-hl,hw] -> [-hl,-hw] -> [hl,-hw] is CCW
        out
    }

    pub fn bev_area(&self) -> f64 {
        self.width() * self.length()
    }

    pub fn bev_distance(&self, other: &Box3D) -> f64 {
        let dx = self.center[0] - other.center[0];
        let dy = self.center[1] - other.center[1];
        (dx * dx + dy * dy).sqrt()
    }
}

/// Signed shoelace area (positive for CCW).
pub fn polygon_area(poly: &[[f64; 2]]) -> f64 {
    let n = poly.len();
    if n < 3 {
        return 0.0;
    }
    let mut a = 0.0;
    for i in 0..n {
        let [x0, y0] = poly[i];
        let [x1, y1] = poly[(i + 1) % n];
        a += x0 * y1 - x1 * y0;
    }
    0.5 * a
}

fn cross(o: [f64; 2], a: [f64; 2], b: [f64; 2]) -> f64 {
    (a[0] - o[0]) * (b[1] - o[1]) - (a[1] - o[1]) * (b[0] - o[0])
}

/// Sutherland–Hodgman clip of `subject` by the convex CCW polygon `clip`.
pub fn clip_convex(subject: &[[f64; 2]], clip: &[[f64; 2]]) -> Vec<[f64; 2]> {
    let mut output: Vec<[f64; 2]> = subject.to_vec();
    let m = clip.len();
    for i in 0..m {
        if output.is_empty() {
            break;
        }
        let (a, b) = (clip[i], clip[(i + 1) % m]);
        let input = std::mem::take(&mut output);
        let n = input.len();
        for j in 0..n {
            let cur = input[j];
            let prev = input[(j + n - 1) % n];
            let cur_in = cross(a, b, cur) >= 0.0;
            let prev_in = cross(a, b, prev) >= 0.0;
            if cur_in {
                if !prev_in {
                    output.push(segment_line_intersection(prev, cur, a, b));
                }
                output.push(cur);
            } else if prev_in {
                output.push(segment_line_intersection(prev, cur, a, b));
            }
        }
    }
    output
}

fn segment_line_intersection(p: [f64; 2], q: [f64; 2], a: [f64; 2], b: [f64; 2]) -> [f64; 2] {
    let dp = cross(a, b, p);
    let dq = cross(a, b, q);
    let t = dp / (dp - dq);
    [p[0] + t * (q[0] - p[0]), p[1] + t * (q[1] - p[1])]
}

/// Rotated-rectangle intersection over union in the ground plane.
pub fn bev_iou(a: &Box3D, b: &Box3D) -> Result<f64> {
    for bx in [a, b] {
        if !(bx.width() > 0.0 && bx.length() > 0.0) {
            return Err(Error::Argument(format!(
                "bev_iou needs positive footprint, got w={} l={}",
                bx.width(),
                bx.length()
            )));
        }
    }
    let (ca, cb) = (a.corners_bev(), b.corners_bev());
    let inter = polygon_area(&clip_convex(&ca, &cb)).max(0.0);
    let union = a.bev_area() + b.bev_area() - inter;
    Ok((inter / union).clamp(0.0, 1.0))
}
