//! Planar pose algebra, oriented bounding boxes, continuous-time
//! interpolation and rotated IoU in bird's-eye view.
//!
//! All poses are planar rigid motions: translation (x, y, z) plus a yaw
//! rotation about z. Yaw angles are kept in (-pi, pi].

use std::f64::consts::{PI, TAU};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Planar rigid pose: translation plus yaw about z.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Pose {
    pub x: f64,
    pub y: f64,
    pub z: f64,
    pub yaw: f64,
}

impl Pose {
    pub fn new(x: f64, y: f64, z: f64, yaw: f64) -> Result<Self> {
        if ![x, y, z, yaw].iter().all(|v| v.is_finite()) {
            return Err(Error::InvalidInput("pose components must be finite".into()));
        }
        Ok(Pose { x, y, z, yaw: wrap_angle(yaw)? })
    }

    pub fn identity() -> Self {
        Pose { x: 0.0, y: 0.0, z: 0.0, yaw: 0.0 }
    }

    /// Inverse pose: transform_point(p.inverse(), transform_point(p, q)) == q.
    pub fn inverse(&self) -> Pose {
        let (s, c) = self.yaw.sin_cos();
        Pose {
            x: -(c * self.x + s * self.y),
            y: -(-s * self.x + c * self.y),
            z: -self.z,
            yaw: wrap_angle(-self.yaw).expect("finite yaw"),
        }
    }
}

/// Oriented box: center, dims (l, w, h) and yaw. `l` runs along the heading.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BBox {
    pub center: [f64; 3],
    pub dims: [f64; 3],
    pub yaw: f64,
}

impl BBox {
    pub fn new(center: [f64; 3], dims: [f64; 3], yaw: f64) -> Result<Self> {
        if !dims.iter().all(|d| d.is_finite() && *d > 0.0) {
            return Err(Error::InvalidInput(format!("box dims must be positive, got {dims:?}")));
        }
        if !center.iter().all(|c| c.is_finite()) {
            return Err(Error::InvalidInput("box center must be finite".into()));
        }
        Ok(BBox { center, dims, yaw: wrap_angle(yaw)? })
    }
}

/// Wrap an angle into (-pi, pi]. The boundary -pi maps to +pi.
pub fn wrap_angle(a: f64) -> Result<f64> {
    if !a.is_finite() {
        return Err(Error::InvalidInput(format!("non-finite angle {a}")));
    }
    let mut r = a - TAU * ((a + PI) / TAU).floor();
    if r <= -PI {
        r += TAU;
    }
    Ok(r)
}

/// Linear interpolation of translation; yaw along the shortest angular path.
///
/// An exact antipodal yaw difference (delta = pi) breaks the tie toward the
/// positive direction.
pub fn interpolate_pose(p0: &Pose, p1: &Pose, alpha: f64) -> Result<Pose> {
    if !(0.0..=1.0).contains(&alpha) {
        return Err(Error::InvalidInput(format!("alpha {alpha} outside [0, 1]")));
    }
    let dyaw = wrap_angle(p1.yaw - p0.yaw)?;
    Ok(Pose {
        x: p0.x + alpha * (p1.x - p0.x),
        y: p0.y + alpha * (p1.y - p0.y),
        z: p0.z + alpha * (p1.z - p0.z),
        yaw: wrap_angle(p0.yaw + alpha * dyaw)?,
    })
}

/// Rotate a point by the pose yaw about z, then translate.
pub fn transform_point(pose: &Pose, pt: [f64; 3]) -> [f64; 3] {
    let (s, c) = pose.yaw.sin_cos();
    [
        pose.x + c * pt[0] - s * pt[1],
        pose.y + s * pt[0] + c * pt[1],
        pose.z + pt[2],
    ]
}

/// BEV footprint corners in counterclockwise order.
pub fn bbox_corners_bev(b: &BBox) -> [[f64; 2]; 4] {
    let (hl, hw) = (b.dims[0] * 0.5, b.dims[1] * 0.5);
    let (s, c) = b.yaw.sin_cos();
    // Local CCW order: (+,+), (-,+), (-,-), (+,-).
    let local = [[hl, hw], [-hl, hw], [-hl, -hw], [hl, -hw]];
    local.map(|[lx, ly]| [b.center[0] + c * lx - s * ly, b.center[1] + s * lx + c * ly])
}

/// Test whether a BEV point lies inside (or on the boundary of) a box footprint.
pub fn point_in_bbox_bev(b: &BBox, p: [f64; 2]) -> bool {
    let (s, c) = b.yaw.sin_cos();
    let dx = p[0] - b.center[0];
    let dy = p[1] - b.center[1];
    let lx = c * dx + s * dy;
    let ly = -s * dx + c * dy;
    lx.abs() <= b.dims[0] * 0.5 && ly.abs() <= b.dims[1] * 0.5
}

fn polygon_area(poly: &[[f64; 2]]) -> f64 {
    let n = poly.len();
    let mut acc = 0.0;
    for i in 0..n {
        let [x0, y0] = poly[i];
        let [x1, y1] = poly[(i + 1) % n];
        acc += x0 * y1 - x1 * y0;
    }
    0.5 * acc
}

/// Sutherland-Hodgman clip of a convex CCW polygon by a convex CCW polygon.
fn clip_convex(subject: &[[f64; 2]], clip: &[[f64; 2]]) -> Vec<[f64; 2]> {
    let mut out: Vec<[f64; 2]> = subject.to_vec();
    let n = clip.len();
    for i in 0..n {
        if out.is_empty() {
            break;
        }
        let a = clip[i];
        let b = clip[(i + 1) % n];
        let input = std::mem::take(&mut out);
        let side = |p: [f64; 2]| (b[0] - a[0]) * (p[1] - a[1]) - (b[1] - a[1]) * (p[0] - a[0]);
        let m = input.len();
        for j in 0..m {
            let cur = input[j];
            let next = input[(j + 1) % m];
            let sc = side(cur);
            let sn = side(next);
            if sc >= 0.0 {
                out.push(cur);
            }
            if (sc > 0.0 && sn < 0.0) || (sc < 0.0 && sn > 0.0) {
                let t = sc / (sc - sn);
                out.push([cur[0] + t * (next[0] - cur[0]), cur[1] + t * (next[1] - cur[1])]);
            }
        }
    }
    out
}

/// Rotated IoU of two box footprints in BEV, by convex polygon intersection.
pub fn rotated_iou_bev(a: &BBox, b: &BBox) -> Result<f64> {
    // Canonical operand order makes the result exactly symmetric.
    let key = |x: &BBox| (x.center[0], x.center[1], x.dims[0], x.dims[1], x.yaw);
    let (p, q) = if key(a) <= key(b) { (a, b) } else { (b, a) };
    let cp = bbox_corners_bev(p);
    let cq = bbox_corners_bev(q);
    let ap = polygon_area(&cp);
    let aq = polygon_area(&cq);
    if ap <= 1e-12 || aq <= 1e-12 {
        return Err(Error::InvalidInput("degenerate zero-area box".into()));
    }
    let inter = clip_convex(&cp, &cq);
    let ai = if inter.len() >= 3 { polygon_area(&inter).max(0.0) } else { 0.0 };
    Ok((ai / (ap + aq - ai)).clamp(0.0, 1.0))
}

/// Interpolate between two boxes of the same object: center and yaw follow
/// `interpolate_pose` semantics, dims interpolate linearly.
pub fn interpolate_bbox(b0: &BBox, b1: &BBox, alpha: f64) -> Result<BBox> {
    let p0 = Pose { x: b0.center[0], y: b0.center[1], z: b0.center[2], yaw: b0.yaw };
    let p1 = Pose { x: b1.center[0], y: b1.center[1], z: b1.center[2], yaw: b1.yaw };
    let p = interpolate_pose(&p0, &p1, alpha)?;
    let dims = [
        b0.dims[0] + alpha * (b1.dims[0] - b0.dims[0]),
        b0.dims[1] + alpha * (b1.dims[1] - b0.dims[1]),
        b0.dims[2] + alpha * (b1.dims[2] - b0.dims[2]),
    ];
    BBox::new([p.x, p.y, p.z], dims, p.yaw)
}
