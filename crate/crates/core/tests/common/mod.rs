//! Shared helpers for the integration tests: independent oracles and
//! hand-built scenes.

use rand::Rng;
use rand_chacha::ChaCha8Rng;

use tacood::geometry::{bbox_corners_bev, BBox, Pose};
use tacood::scene::{AgentState, DetectionRange, ObjectTrack, Scene};

/// Monte-Carlo IoU oracle: uniform samples over the joint axis-aligned
/// bounding box of both rotated boxes.
pub fn mc_iou(a: &BBox, b: &BBox, samples: usize, rng: &mut ChaCha8Rng) -> f64 {
    let ca = bbox_corners_bev(a);
    let cb = bbox_corners_bev(b);
    let xs = ca.iter().chain(cb.iter()).map(|c| c[0]);
    let ys = ca.iter().chain(cb.iter()).map(|c| c[1]);
    let (x0, x1) = (xs.clone().fold(f64::INFINITY, f64::min), xs.fold(f64::NEG_INFINITY, f64::max));
    let (y0, y1) = (ys.clone().fold(f64::INFINITY, f64::min), ys.fold(f64::NEG_INFINITY, f64::max));
    let inside = |bx: &BBox, p: [f64; 2]| tacood::geometry::point_in_bbox_bev(bx, p);
    let (mut both, mut either) = (0usize, 0usize);
    for _ in 0..samples {
        let p = [rng.gen_range(x0..x1), rng.gen_range(y0..y1)];
        let ia = inside(a, p);
        let ib = inside(b, p);
        if ia && ib {
            both += 1;
        }
        if ia || ib {
            either += 1;
        }
    }
    if either == 0 {
        0.0
    } else {
        both as f64 / either as f64
    }
}

/// Distance from a BEV point to the boundary of a box footprint.
pub fn boundary_dist(b: &BBox, p: [f64; 2]) -> f64 {
    let corners = bbox_corners_bev(b);
    let mut best = f64::INFINITY;
    for i in 0..4 {
        let a = corners[i];
        let c = corners[(i + 1) % 4];
        let (ex, ey) = (c[0] - a[0], c[1] - a[1]);
        let len2 = ex * ex + ey * ey;
        let t = (((p[0] - a[0]) * ex + (p[1] - a[1]) * ey) / len2).clamp(0.0, 1.0);
        let (dx, dy) = (p[0] - a[0] - t * ex, p[1] - a[1] - t * ey);
        best = best.min((dx * dx + dy * dy).sqrt());
    }
    best
}

/// Constant-velocity object track from an initial BEV pose.
pub fn const_velocity_track(
    id: u32,
    dims: [f64; 3],
    start: [f64; 3],
    velocity: [f64; 2],
    t_end: f64,
) -> ObjectTrack {
    let p0 = Pose::new(start[0], start[1], 0.8, start[2]).unwrap();
    let p1 = Pose::new(
        start[0] + velocity[0] * t_end,
        start[1] + velocity[1] * t_end,
        0.8,
        start[2],
    )
    .unwrap();
    ObjectTrack { id, dims, waypoints: vec![(0.0, p0), (t_end, p1)] }
}

/// An agent with an explicit pose, tick offset, and constant velocity.
pub fn moving_agent(id: u32, pose: [f64; 3], tick_offset: f64, velocity: [f64; 2]) -> AgentState {
    AgentState {
        id,
        pose: Pose::new(pose[0], pose[1], 0.0, pose[2]).unwrap(),
        velocity,
        tick_offset,
        frequency: 10.0,
    }
}

/// A static agent with an explicit pose and tick offset.
pub fn static_agent(id: u32, pose: [f64; 3], tick_offset: f64) -> AgentState {
    moving_agent(id, pose, tick_offset, [0.0, 0.0])
}

/// Assemble a fully hand-specified scene.
pub fn hand_scene(
    agents: Vec<AgentState>,
    objects: Vec<ObjectTrack>,
    duration: f64,
    seed: u64,
    angular_resolution_deg: f64,
    max_range: f64,
) -> Scene {
    Scene {
        agents,
        objects,
        duration,
        ego_id: 0,
        seed,
        range: DetectionRange::default(),
        angular_resolution_deg,
        max_range,
        clutter_density: 0.0,
    }
}

/// Brute-force Eq. (1) oracle: timestamp of the point whose azimuth is
/// closest to the query azimuth on the circle, ties to the smaller index.
pub fn brute_force_query_timestamp(query_xy: [f64; 2], cloud: &tacood::scene::PointCloud) -> f64 {
    let qa = query_xy[1].atan2(query_xy[0]);
    let mut best = (f64::INFINITY, usize::MAX, 0.0);
    for (i, p) in cloud.points.iter().enumerate() {
        let mut d = (qa - p.y.atan2(p.x)).abs() % std::f64::consts::TAU;
        if d > std::f64::consts::PI {
            d = std::f64::consts::TAU - d;
        }
        if d < best.0 || (d == best.0 && i < best.1) {
            best = (d, i, p.t);
        }
    }
    best.2
}
