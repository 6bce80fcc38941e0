//! Continuous-time multi-agent scenes and asynchronous rolling-shutter
//! LiDAR sampling.
//!
//! A scene is a continuous-time world model: agents with sensor tick
//! offsets and constant velocities, objects on piecewise-constant-velocity
//! tracks. Scans are sampled from it ray by ray: a mechanic LiDAR sweeps
//! azimuth counterclockwise over its tick interval, so every return carries
//! its own emission timestamp. Ground truth is taken at the scan end of the
//! ego sensor (`t_aligned`).

use std::collections::BTreeMap;
use std::f64::consts::{PI, TAU};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{
    bbox_corners_bev, interpolate_pose, transform_point, wrap_angle, BBox, Pose,
};

/// Sub-frame duration used by the sub-frame assembly recipe (seconds).
pub const SUBFRAME_DT: f64 = 0.01;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AgentState {
    pub id: u32,
    /// Pose at the stated reference time (t = 0 for scene agents, own
    /// tick_start for per-frame states).
    pub pose: Pose,
    /// Constant planar velocity, m/s.
    pub velocity: [f64; 2],
    /// Sensor tick offset in [0, 1/f) seconds.
    pub tick_offset: f64,
    /// Scan frequency, Hz.
    pub frequency: f64,
}

impl AgentState {
    pub fn pose_at(&self, t: f64) -> Pose {
        Pose {
            x: self.pose.x + self.velocity[0] * t,
            y: self.pose.y + self.velocity[1] * t,
            z: self.pose.z,
            yaw: self.pose.yaw,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ObjectTrack {
    pub id: u32,
    /// (l, w, h) meters.
    pub dims: [f64; 3],
    /// Waypoints at strictly increasing times.
    pub waypoints: Vec<(f64, Pose)>,
}

impl ObjectTrack {
    pub fn validate(&self) -> Result<()> {
        if self.waypoints.len() < 2 {
            return Err(Error::InvalidInput(format!("track {} needs >= 2 waypoints", self.id)));
        }
        if !self.waypoints.windows(2).all(|w| w[0].0 < w[1].0) {
            return Err(Error::InvalidInput(format!(
                "track {} waypoint times not strictly increasing",
                self.id
            )));
        }
        Ok(())
    }
}

/// Interpolated pose of a track at time `t` (error outside waypoint span).
pub fn object_pose_at(track: &ObjectTrack, t: f64) -> Result<Pose> {
    let first = track.waypoints.first().ok_or_else(|| Error::InvalidInput("empty track".into()))?;
    let last = track.waypoints.last().unwrap();
    if t < first.0 || t > last.0 {
        return Err(Error::InvalidInput(format!(
            "time {t} outside track {} span [{}, {}]",
            track.id, first.0, last.0
        )));
    }
    let seg = track
        .waypoints
        .windows(2)
        .find(|w| t >= w[0].0 && t <= w[1].0)
        .expect("t within span implies an enclosing segment");
    let alpha = (t - seg[0].0) / (seg[1].0 - seg[0].0);
    interpolate_pose(&seg[0].1, &seg[1].1, alpha)
}

/// Axis-aligned detection bounds in the capturing frame.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DetectionRange {
    pub x: [f64; 2],
    pub y: [f64; 2],
}

impl Default for DetectionRange {
    fn default() -> Self {
        DetectionRange { x: [-140.8, 140.8], y: [-38.4, 38.4] }
    }
}

impl DetectionRange {
    pub fn contains(&self, x: f64, y: f64) -> bool {
        x >= self.x[0] && x <= self.x[1] && y >= self.y[0] && y <= self.y[1]
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Scene {
    pub agents: Vec<AgentState>,
    pub objects: Vec<ObjectTrack>,
    pub duration: f64,
    pub ego_id: u32,
    pub seed: u64,
    pub range: DetectionRange,
    /// Horizontal angular resolution of the sweep, degrees.
    pub angular_resolution_deg: f64,
    /// Maximum sensor range, meters.
    pub max_range: f64,
    /// Expected clutter returns per ray (probability of a clutter return).
    pub clutter_density: f64,
}

impl Scene {
    pub fn agent(&self, id: u32) -> Result<&AgentState> {
        self.agents
            .iter()
            .find(|a| a.id == id)
            .ok_or_else(|| Error::InvalidInput(format!("unknown agent {id}")))
    }

    pub fn ego(&self) -> &AgentState {
        self.agents.iter().find(|a| a.id == self.ego_id).expect("ego present by invariant")
    }

    /// Number of frames for which every agent has a complete scan.
    pub fn n_frames(&self) -> usize {
        self.agents
            .iter()
            .map(|a| {
                let mut n = 0usize;
                while a.tick_offset + (n as f64 + 1.0) / a.frequency <= self.duration + 1e-9 {
                    n += 1;
                }
                n
            })
            .min()
            .unwrap_or(0)
    }
}

/// One LiDAR return: sensor-frame position at emission time plus the
/// absolute emission timestamp.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TimedPoint {
    pub x: f64,
    pub y: f64,
    pub z: f64,
    pub t: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PointCloud {
    pub agent_id: u32,
    pub points: Vec<TimedPoint>,
    pub tick_start: f64,
    pub tick_end: f64,
}

/// Per-frame bundle: one scan per agent plus the agent poses at their own
/// tick starts. `t_aligned` is the scan end of the ego sensor.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Frame {
    pub index: usize,
    pub clouds: BTreeMap<u32, PointCloud>,
    pub states: BTreeMap<u32, AgentState>,
    pub t_aligned: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TickOffsets {
    Random,
    Explicit(Vec<f64>),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ScenarioConfig {
    pub duration: f64,
    pub frequency: f64,
    pub num_agents: usize,
    pub ego_id: u32,
    pub tick_offsets: TickOffsets,
    /// Optional fixed agent poses (x, y, z, yaw); random placement otherwise.
    pub agent_poses: Option<Vec<[f64; 4]>>,
    pub agent_speed: [f64; 2],
    pub num_objects: usize,
    pub object_speed: [f64; 2],
    /// Optional fixed heading for all objects, degrees; random otherwise.
    pub object_heading_deg: Option<f64>,
    pub object_dims: [f64; 3],
    pub range: DetectionRange,
    /// Region objects (and randomly placed agents) spawn in.
    pub spawn_x: [f64; 2],
    pub spawn_y: [f64; 2],
    pub clutter_density: f64,
    pub angular_resolution_deg: f64,
    pub max_range: f64,
    pub seed: u64,
}

impl Default for ScenarioConfig {
    fn default() -> Self {
        ScenarioConfig {
            duration: 1.0,
            frequency: 10.0,
            num_agents: 2,
            ego_id: 0,
            tick_offsets: TickOffsets::Random,
            agent_poses: None,
            agent_speed: [0.0, 0.0],
            num_objects: 3,
            object_speed: [5.0, 15.0],
            object_heading_deg: None,
            object_dims: [4.0, 2.0, 1.6],
            range: DetectionRange::default(),
            spawn_x: [-30.0, 30.0],
            spawn_y: [-15.0, 15.0],
            clutter_density: 0.0,
            angular_resolution_deg: 0.2,
            max_range: 120.0,
            seed: 0,
        }
    }
}

impl ScenarioConfig {
    pub fn validate(&self) -> Result<()> {
        let fail = |field: &str, why: String| Err(Error::Config(format!("{field}: {why}")));
        if !(self.duration > 0.0) {
            return fail("duration", format!("must be > 0, got {}", self.duration));
        }
        if !(self.frequency > 0.0) {
            return fail("frequency", format!("must be > 0, got {}", self.frequency));
        }
        if self.num_agents < 1 {
            return fail("num_agents", "must be >= 1".into());
        }
        if self.ego_id as usize >= self.num_agents {
            return fail("ego_id", format!("{} not among {} agents", self.ego_id, self.num_agents));
        }
        if let TickOffsets::Explicit(offsets) = &self.tick_offsets {
            if offsets.len() != self.num_agents {
                return fail("tick_offsets", format!("{} entries for {} agents", offsets.len(), self.num_agents));
            }
            let period = 1.0 / self.frequency;
            for o in offsets {
                if !(0.0..period).contains(o) {
                    return fail("tick_offsets", format!("offset {o} outside [0, {period})"));
                }
            }
        }
        if let Some(poses) = &self.agent_poses {
            if poses.len() != self.num_agents {
                return fail("agent_poses", format!("{} entries for {} agents", poses.len(), self.num_agents));
            }
        }
        for (name, r) in [("agent_speed", self.agent_speed), ("object_speed", self.object_speed)] {
            if r[0] < 0.0 || r[1] < r[0] {
                return fail(name, format!("range {r:?} must be ordered and non-negative"));
            }
        }
        for (name, r) in [
            ("range.x", self.range.x),
            ("range.y", self.range.y),
            ("spawn_x", self.spawn_x),
            ("spawn_y", self.spawn_y),
        ] {
            if r[1] < r[0] {
                return fail(name, format!("bounds {r:?} out of order"));
            }
        }
        if !(self.angular_resolution_deg > 0.0) {
            return fail("angular_resolution_deg", "must be > 0".into());
        }
        if !(self.max_range > 0.0) {
            return fail("max_range", "must be > 0".into());
        }
        if self.clutter_density < 0.0 || self.clutter_density > 1.0 {
            return fail("clutter_density", format!("must be in [0, 1], got {}", self.clutter_density));
        }
        if !self.object_dims.iter().all(|d| *d > 0.0) {
            return fail("object_dims", format!("must be positive, got {:?}", self.object_dims));
        }
        Ok(())
    }
}

/// Deterministically build a scene from a config and seed.
pub fn build_scene(config: &ScenarioConfig, seed: u64) -> Result<Scene> {
    config.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let period = 1.0 / config.frequency;

    let mut agents = Vec::with_capacity(config.num_agents);
    for i in 0..config.num_agents {
        let tick_offset = match &config.tick_offsets {
            TickOffsets::Random => rng.gen_range(0.0..period),
            TickOffsets::Explicit(v) => v[i],
        };
        let pose = match &config.agent_poses {
            Some(poses) => {
                let [x, y, z, yaw] = poses[i];
                Pose::new(x, y, z, yaw)?
            }
            None => {
                if i as u32 == config.ego_id {
                    Pose::identity()
                } else {
                    Pose::new(
                        rng.gen_range(config.spawn_x[0]..=config.spawn_x[1]),
                        rng.gen_range(config.spawn_y[0]..=config.spawn_y[1]),
                        0.0,
                        rng.gen_range(-PI..PI),
                    )?
                }
            }
        };
        let speed = if config.agent_speed[1] > config.agent_speed[0] {
            rng.gen_range(config.agent_speed[0]..=config.agent_speed[1])
        } else {
            config.agent_speed[0]
        };
        let velocity = [speed * pose.yaw.cos(), speed * pose.yaw.sin()];
        agents.push(AgentState {
            id: i as u32,
            pose,
            velocity,
            tick_offset,
            frequency: config.frequency,
        });
    }

    let mut objects = Vec::with_capacity(config.num_objects);
    for i in 0..config.num_objects {
        let x0 = rng.gen_range(config.spawn_x[0]..=config.spawn_x[1]);
        let y0 = rng.gen_range(config.spawn_y[0]..=config.spawn_y[1]);
        let heading = match config.object_heading_deg {
            Some(deg) => wrap_angle(deg.to_radians())?,
            None => rng.gen_range(-PI..PI),
        };
        let speed = if config.object_speed[1] > config.object_speed[0] {
            rng.gen_range(config.object_speed[0]..=config.object_speed[1])
        } else {
            config.object_speed[0]
        };
        // Straight constant-velocity segment spanning the full duration,
        // speed shrunk if the endpoint would leave the detection range.
        let mut v = speed;
        let (hx, hy) = (heading.cos(), heading.sin());
        for _ in 0..32 {
            let xe = x0 + hx * v * config.duration;
            let ye = y0 + hy * v * config.duration;
            if config.range.contains(xe, ye) {
                break;
            }
            v *= 0.5;
        }
        let p0 = Pose::new(x0, y0, 0.8, heading)?;
        let p1 = Pose::new(x0 + hx * v * config.duration, y0 + hy * v * config.duration, 0.8, heading)?;
        objects.push(ObjectTrack {
            id: i as u32,
            dims: config.object_dims,
            waypoints: vec![(0.0, p0), (config.duration, p1)],
        });
    }

    Ok(Scene {
        agents,
        objects,
        duration: config.duration,
        ego_id: config.ego_id,
        seed,
        range: config.range,
        angular_resolution_deg: config.angular_resolution_deg,
        max_range: config.max_range,
        clutter_density: config.clutter_density,
    })
}

// SplitMix64: counter-based per-ray randomness, so scans for different
// (agent, frame) pairs never depend on simulation order.
fn splitmix64(mut x: u64) -> u64 {
    x = x.wrapping_add(0x9e3779b97f4a7c15);
    let mut z = x;
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58476d1ce4e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d049bb133111eb);
    z ^ (z >> 31)
}

fn ray_unit(seed: u64, agent: u32, ray: i64, salt: u64) -> f64 {
    let h = splitmix64(seed ^ ((agent as u64) << 40) ^ (ray as u64).wrapping_mul(0x2545f4914f6cdd1d) ^ salt);
    (h >> 11) as f64 / (1u64 << 53) as f64
}

/// Intersect a 2D ray with a rectangle footprint; nearest positive range.
fn ray_rect_hit(origin: [f64; 2], dir: [f64; 2], corners: &[[f64; 2]; 4]) -> Option<f64> {
    let mut best: Option<f64> = None;
    for i in 0..4 {
        let a = corners[i];
        let b = corners[(i + 1) % 4];
        let ex = b[0] - a[0];
        let ey = b[1] - a[1];
        let denom = dir[0] * ey - dir[1] * ex;
        if denom.abs() < 1e-12 {
            continue;
        }
        let dx = a[0] - origin[0];
        let dy = a[1] - origin[1];
        let s = (dx * ey - dy * ex) / denom;
        let u = (dx * dir[1] - dy * dir[0]) / denom;
        if s > 1e-6 && (0.0..=1.0).contains(&u) {
            best = Some(best.map_or(s, |b: f64| b.min(s)));
        }
    }
    best
}

/// Simulate all rays whose emission time falls in `[t_start, t_end)`.
///
/// The beam azimuth is tied to absolute time: at `t` the sensor points at
/// `-pi + 2*pi*frac((t - tick_offset) * f)` in its own frame, sweeping CCW
/// through a full revolution per tick.
pub fn simulate_interval(
    scene: &Scene,
    agent_id: u32,
    t_start: f64,
    t_end: f64,
) -> Result<PointCloud> {
    let agent = scene.agent(agent_id)?;
    if t_start < -1e-9 || t_end > scene.duration + 1e-9 || t_end <= t_start {
        return Err(Error::InvalidInput(format!(
            "interval [{t_start}, {t_end}) outside scene duration {}",
            scene.duration
        )));
    }
    let f = agent.frequency;
    let dtheta = scene.angular_resolution_deg.to_radians();
    let rays_per_rev = (TAU / dtheta).round() as i64;
    let ray_dt = 1.0 / (f * rays_per_rev as f64);

    // Global ray index k has emission time tick_offset + k * ray_dt.
    let k_first = ((t_start - agent.tick_offset) / ray_dt - 1e-9).ceil() as i64;
    let k_first = k_first.max(0);
    let mut points = Vec::new();
    let footprints: Vec<(&ObjectTrack, f64, f64)> = scene
        .objects
        .iter()
        .map(|o| (o, o.waypoints.first().unwrap().0, o.waypoints.last().unwrap().0))
        .collect();

    let mut k = k_first;
    loop {
        let t = agent.tick_offset + k as f64 * ray_dt;
        if t >= t_end - 1e-12 {
            break;
        }
        let theta = -PI + (k.rem_euclid(rays_per_rev)) as f64 * dtheta;
        let sensor = agent.pose_at(t);
        let world_angle = sensor.yaw + theta;
        let dir = [world_angle.cos(), world_angle.sin()];
        let origin = [sensor.x, sensor.y];

        let mut hit: Option<(f64, f64)> = None; // (range, z_center..h)
        for (obj, t0, t1) in &footprints {
            if t < *t0 || t > *t1 {
                continue;
            }
            let pose = object_pose_at(obj, t)?;
            let bbox = BBox { center: [pose.x, pose.y, pose.z], dims: obj.dims, yaw: pose.yaw };
            let corners = bbox_corners_bev(&bbox);
            if let Some(s) = ray_rect_hit(origin, dir, &corners) {
                if s <= scene.max_range && hit.map_or(true, |(hs, _)| s < hs) {
                    // z sampled on the object's side surface.
                    let u = ray_unit(scene.seed, agent_id, k, 0x5a);
                    let z = pose.z + (u - 0.5) * obj.dims[2];
                    hit = Some((s, z));
                }
            }
        }
        if scene.clutter_density > 0.0 {
            let u = ray_unit(scene.seed, agent_id, k, 0xc1);
            if u < scene.clutter_density {
                let r = 1.0 + ray_unit(scene.seed, agent_id, k, 0xc2) * (scene.max_range - 1.0);
                if hit.map_or(true, |(hs, _)| r < hs) {
                    let z = ray_unit(scene.seed, agent_id, k, 0xc3) * 2.0 - 1.0;
                    hit = Some((r, z));
                }
            }
        }
        if let Some((s, z)) = hit {
            let world = [origin[0] + dir[0] * s, origin[1] + dir[1] * s, z];
            // Store in the sensor frame at emission time.
            let local = transform_point(&sensor.inverse(), world);
            points.push(TimedPoint { x: local[0], y: local[1], z: local[2], t });
        }
        k += 1;
    }

    Ok(PointCloud { agent_id, points, tick_start: t_start, tick_end: t_end })
}

/// Simulate the complete scan with index `frame_idx` for one agent.
pub fn simulate_scan(scene: &Scene, agent_id: u32, frame_idx: usize) -> Result<PointCloud> {
    let agent = scene.agent(agent_id)?;
    let period = 1.0 / agent.frequency;
    let t0 = agent.tick_offset + frame_idx as f64 * period;
    let t1 = t0 + period;
    if t1 > scene.duration + 1e-9 {
        return Err(Error::InvalidInput(format!(
            "frame {frame_idx} of agent {agent_id} ends at {t1}, beyond duration {}",
            scene.duration
        )));
    }
    simulate_interval(scene, agent_id, t0, t1)
}

/// Bundle the scans of all agents for frame `j`.
pub fn make_async_frame(scene: &Scene, j: usize) -> Result<Frame> {
    if j >= scene.n_frames() {
        return Err(Error::InvalidInput(format!("frame {j} out of range ({} frames)", scene.n_frames())));
    }
    let mut clouds = BTreeMap::new();
    let mut states = BTreeMap::new();
    for agent in &scene.agents {
        let cloud = simulate_scan(scene, agent.id, j)?;
        let mut state = agent.clone();
        state.pose = agent.pose_at(cloud.tick_start);
        clouds.insert(agent.id, cloud);
        states.insert(agent.id, state);
    }
    let ego = scene.ego();
    let t_aligned = ego.tick_offset + (j as f64 + 1.0) / ego.frequency;
    Ok(Frame { index: j, clouds, states, t_aligned })
}

/// Drop the first `drop_n` sub-frames, then concatenate consecutive groups
/// of ten 0.01 s sub-frames into full 0.1 s scans. Point timestamps are
/// preserved.
pub fn assemble_subframes(subframes: &[PointCloud], drop_n: usize) -> Result<Vec<PointCloud>> {
    if !(1..=5).contains(&drop_n) {
        return Err(Error::InvalidInput(format!("drop_n {drop_n} outside [1, 5]")));
    }
    for sf in subframes {
        if (sf.tick_end - sf.tick_start - SUBFRAME_DT).abs() > 1e-9 {
            return Err(Error::InvalidInput(format!(
                "sub-frame spans {} s, expected {SUBFRAME_DT}",
                sf.tick_end - sf.tick_start
            )));
        }
    }
    let rest = &subframes[drop_n.min(subframes.len())..];
    let mut scans = Vec::new();
    for group in rest.chunks_exact(10) {
        let mut points = Vec::new();
        for sf in group {
            points.extend_from_slice(&sf.points);
        }
        scans.push(PointCloud {
            agent_id: group[0].agent_id,
            points,
            tick_start: group[0].tick_start,
            tick_end: group[0].tick_start + 10.0 * SUBFRAME_DT,
        });
    }
    Ok(scans)
}

/// Ground-truth boxes at time `t`: one per object whose track covers `t`
/// and whose center lies within the detection range.
pub fn gt_boxes_at(scene: &Scene, t: f64) -> Result<Vec<(u32, BBox)>> {
    if t < -1e-9 || t > scene.duration + 1e-9 {
        return Err(Error::InvalidInput(format!("time {t} outside scene duration {}", scene.duration)));
    }
    let mut out = Vec::new();
    for obj in &scene.objects {
        let t0 = obj.waypoints.first().unwrap().0;
        let t1 = obj.waypoints.last().unwrap().0;
        if t < t0 || t > t1 {
            continue;
        }
        let pose = object_pose_at(obj, t)?;
        if !scene.range.contains(pose.x, pose.y) {
            continue;
        }
        out.push((obj.id, BBox { center: [pose.x, pose.y, pose.z], dims: obj.dims, yaw: pose.yaw }));
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;

    fn two_agent_config() -> ScenarioConfig {
        ScenarioConfig {
            duration: 1.0,
            num_agents: 2,
            ego_id: 1,
            tick_offsets: TickOffsets::Explicit(vec![0.0, 0.05]),
            agent_poses: Some(vec![[0.0, 20.0, 0.0, 0.0], [0.0, -20.0, 0.0, 0.0]]),
            num_objects: 1,
            object_speed: [10.0, 10.0],
            object_heading_deg: Some(0.0),
            ..ScenarioConfig::default()
        }
    }

    #[test]
    fn build_scene_deterministic() {
        let cfg = ScenarioConfig { num_objects: 4, ..ScenarioConfig::default() };
        let a = build_scene(&cfg, 42).unwrap();
        let b = build_scene(&cfg, 42).unwrap();
        assert_eq!(serde_json::to_vec(&a).unwrap(), serde_json::to_vec(&b).unwrap());
        let c = build_scene(&cfg, 43).unwrap();
        assert_ne!(serde_json::to_vec(&a).unwrap(), serde_json::to_vec(&c).unwrap());
    }

    #[test]
    fn build_scene_explicit_offsets() {
        let scene = build_scene(&two_agent_config(), 1).unwrap();
        assert_abs_diff_eq!(scene.agents[0].tick_offset - scene.agents[1].tick_offset, -0.05, epsilon = 1e-12);
    }

    #[test]
    fn build_scene_empty_objects() {
        let cfg = ScenarioConfig { num_objects: 0, ..two_agent_config() };
        let scene = build_scene(&cfg, 5).unwrap();
        assert!(scene.objects.is_empty());
        let cloud = simulate_scan(&scene, 0, 0).unwrap();
        assert!(cloud.points.is_empty());
    }

    #[test]
    fn build_scene_invalid_config_names_field() {
        let cfg = ScenarioConfig { frequency: 0.0, ..ScenarioConfig::default() };
        let err = build_scene(&cfg, 0).unwrap_err().to_string();
        assert!(err.contains("frequency"), "{err}");
    }

    #[test]
    fn object_pose_examples() {
        let track = ObjectTrack {
            id: 0,
            dims: [4.0, 2.0, 1.5],
            waypoints: vec![
                (0.0, Pose::identity()),
                (1.0, Pose::new(10.0, 0.0, 0.0, 0.0).unwrap()),
            ],
        };
        let p = object_pose_at(&track, 0.15).unwrap();
        assert_abs_diff_eq!(p.x, 1.5, epsilon = 1e-12);
        assert_eq!(object_pose_at(&track, 1.0).unwrap(), track.waypoints[1].1);
        assert!(object_pose_at(&track, 1.5).is_err());

        let turning = ObjectTrack {
            id: 1,
            dims: [4.0, 2.0, 1.5],
            waypoints: vec![
                (0.0, Pose::identity()),
                (1.0, Pose::new(0.0, 0.0, 0.0, PI / 2.0).unwrap()),
            ],
        };
        assert_abs_diff_eq!(object_pose_at(&turning, 0.5).unwrap().yaw, PI / 4.0, epsilon = 1e-12);
    }

    #[test]
    fn scan_timestamps_increase_within_tick() {
        let scene = build_scene(&two_agent_config(), 3).unwrap();
        for agent in [0u32, 1] {
            let cloud = simulate_scan(&scene, agent, 0).unwrap();
            assert!(!cloud.points.is_empty());
            assert_abs_diff_eq!(cloud.tick_end - cloud.tick_start, 0.1, epsilon = 1e-12);
            for w in cloud.points.windows(2) {
                assert!(w[0].t < w[1].t);
            }
            for p in &cloud.points {
                assert!(p.t >= cloud.tick_start && p.t < cloud.tick_end);
            }
        }
    }

    #[test]
    fn static_scene_repeats_across_frames() {
        let cfg = ScenarioConfig {
            object_speed: [0.0, 0.0],
            agent_speed: [0.0, 0.0],
            duration: 0.5,
            ..two_agent_config()
        };
        let scene = build_scene(&cfg, 9).unwrap();
        let a = simulate_scan(&scene, 0, 0).unwrap();
        let b = simulate_scan(&scene, 0, 1).unwrap();
        assert_eq!(a.points.len(), b.points.len());
        for (p, q) in a.points.iter().zip(&b.points) {
            assert_abs_diff_eq!(p.x, q.x, epsilon = 1e-9);
            assert_abs_diff_eq!(p.y, q.y, epsilon = 1e-9);
            assert_abs_diff_eq!(q.t - p.t, 0.1, epsilon = 1e-9);
        }
    }

    #[test]
    fn rolling_shutter_sweep_fraction() {
        // Static object centered at sensor-frame azimuth +pi/2 and f = 10:
        // its returns carry t ~ tick_start + 0.075 (sweep fraction 270/360).
        let scene = Scene {
            agents: vec![AgentState {
                id: 0,
                pose: Pose::identity(),
                velocity: [0.0, 0.0],
                tick_offset: 0.2,
                frequency: 10.0,
            }],
            objects: vec![ObjectTrack {
                id: 0,
                dims: [2.0, 2.0, 1.5],
                waypoints: vec![
                    (0.0, Pose::new(0.0, 15.0, 0.8, 0.0).unwrap()),
                    (1.0, Pose::new(0.0, 15.0, 0.8, 0.0).unwrap()),
                ],
            }],
            duration: 1.0,
            ego_id: 0,
            seed: 0,
            range: DetectionRange::default(),
            angular_resolution_deg: 0.2,
            max_range: 120.0,
            clutter_density: 0.0,
        };
        let cloud = simulate_scan(&scene, 0, 0).unwrap();
        assert!(!cloud.points.is_empty());
        let mean_t: f64 = cloud.points.iter().map(|p| p.t).sum::<f64>() / cloud.points.len() as f64;
        assert_abs_diff_eq!(mean_t - cloud.tick_start, 0.075, epsilon = 0.002);
    }

    /// Distance from a BEV point to the boundary of a box footprint.
    fn rect_boundary_dist(b: &BBox, p: [f64; 2]) -> f64 {
        let corners = bbox_corners_bev(b);
        let mut best = f64::INFINITY;
        for i in 0..4 {
            let a = corners[i];
            let c = corners[(i + 1) % 4];
            let ex = c[0] - a[0];
            let ey = c[1] - a[1];
            let len2 = ex * ex + ey * ey;
            let t = (((p[0] - a[0]) * ex + (p[1] - a[1]) * ey) / len2).clamp(0.0, 1.0);
            let dx = p[0] - (a[0] + t * ex);
            let dy = p[1] - (a[1] + t * ey);
            best = best.min((dx * dx + dy * dy).sqrt());
        }
        best
    }

    #[test]
    fn rolling_shutter_consistent_with_motion() {
        // Every return must lie on the object boundary evaluated at its own
        // emission time; evaluated at the scan start instead, late returns
        // are visibly displaced (the rolling-shutter distortion is real).
        let scene = Scene {
            agents: vec![AgentState {
                id: 0,
                pose: Pose::new(0.0, -10.0, 0.0, 0.0).unwrap(),
                velocity: [0.0, 0.0],
                tick_offset: 0.0,
                frequency: 10.0,
            }],
            objects: vec![ObjectTrack {
                id: 0,
                dims: [12.0, 2.0, 1.5],
                waypoints: vec![
                    (0.0, Pose::new(-1.0, 0.0, 0.8, 0.0).unwrap()),
                    (1.0, Pose::new(11.0, 0.0, 0.8, 0.0).unwrap()),
                ],
            }],
            duration: 1.0,
            ego_id: 0,
            seed: 0,
            range: DetectionRange::default(),
            angular_resolution_deg: 0.2,
            max_range: 120.0,
            clutter_density: 0.0,
        };
        let cloud = simulate_scan(&scene, 0, 0).unwrap();
        assert!(cloud.points.len() > 50);
        let sensor = &scene.agents[0].pose;
        let mut max_resid_at_t = 0.0f64;
        let mut max_resid_at_start = 0.0f64;
        for p in &cloud.points {
            let world = transform_point(sensor, [p.x, p.y, p.z]);
            let at_t = object_pose_at(&scene.objects[0], p.t).unwrap();
            let box_t = BBox { center: [at_t.x, at_t.y, at_t.z], dims: scene.objects[0].dims, yaw: at_t.yaw };
            max_resid_at_t = max_resid_at_t.max(rect_boundary_dist(&box_t, [world[0], world[1]]));

            let at_start = object_pose_at(&scene.objects[0], cloud.tick_start).unwrap();
            let box_s = BBox { center: [at_start.x, at_start.y, at_start.z], dims: scene.objects[0].dims, yaw: at_start.yaw };
            max_resid_at_start = max_resid_at_start.max(rect_boundary_dist(&box_s, [world[0], world[1]]));
        }
        assert!(max_resid_at_t < 1e-6, "per-point residual {max_resid_at_t}");
        assert!(max_resid_at_start > 0.05, "no distortion observed: {max_resid_at_start}");
    }

    #[test]
    fn make_async_frame_examples() {
        let scene = build_scene(&two_agent_config(), 1).unwrap();
        let frame = make_async_frame(&scene, 0).unwrap();
        // Ego offset 0.05, f = 10, j = 0.
        assert_abs_diff_eq!(frame.t_aligned, 0.15, epsilon = 1e-12);
        let coop = &frame.clouds[&0];
        let ego = &frame.clouds[&1];
        assert_abs_diff_eq!(coop.tick_start, 0.0, epsilon = 1e-12);
        assert_abs_diff_eq!(coop.tick_end, 0.1, epsilon = 1e-12);
        assert_abs_diff_eq!(ego.tick_start, 0.05, epsilon = 1e-12);
        assert_abs_diff_eq!(ego.tick_end, 0.15, epsilon = 1e-12);
        assert!(make_async_frame(&scene, 100).is_err());

        let single = ScenarioConfig {
            num_agents: 1,
            ego_id: 0,
            tick_offsets: TickOffsets::Explicit(vec![0.02]),
            agent_poses: Some(vec![[0.0, 0.0, 0.0, 0.0]]),
            ..ScenarioConfig::default()
        };
        let scene = build_scene(&single, 2).unwrap();
        let frame = make_async_frame(&scene, 0).unwrap();
        assert_eq!(frame.clouds.len(), 1);
        assert_abs_diff_eq!(frame.t_aligned, frame.clouds[&0].tick_end, epsilon = 1e-12);
    }

    #[test]
    fn subframe_assembly() {
        let scene = build_scene(&two_agent_config(), 17).unwrap();
        let subframes: Vec<PointCloud> = (0..30)
            .map(|k| simulate_interval(&scene, 0, k as f64 * SUBFRAME_DT, (k + 1) as f64 * SUBFRAME_DT).unwrap())
            .collect();
        let scans = assemble_subframes(&subframes, 1).unwrap();
        assert_eq!(scans.len(), 2);
        assert_abs_diff_eq!(scans[0].tick_start, 0.01, epsilon = 1e-12);
        assert_abs_diff_eq!(scans[0].tick_end, 0.11, epsilon = 1e-12);

        let scans5 = assemble_subframes(&subframes, 5).unwrap();
        assert_abs_diff_eq!(scans5[0].tick_start, 0.05, epsilon = 1e-12);
        assert_abs_diff_eq!(scans5[0].tick_end, 0.15, epsilon = 1e-12);

        assert!(assemble_subframes(&subframes, 0).is_err());
        assert!(assemble_subframes(&subframes, 6).is_err());

        // Assembled scans equal a continuous re-simulation of the interval.
        let direct = simulate_interval(&scene, 0, 0.01, 0.11).unwrap();
        assert_eq!(scans[0].points.len(), direct.points.len());
        for (a, b) in scans[0].points.iter().zip(&direct.points) {
            assert_abs_diff_eq!(a.x, b.x, epsilon = 1e-9);
            assert_abs_diff_eq!(a.t, b.t, epsilon = 1e-12);
        }
    }

    #[test]
    fn gt_boxes_examples() {
        let mut scene = build_scene(&two_agent_config(), 4).unwrap();
        scene.objects[0].waypoints = vec![
            (0.0, Pose::new(0.0, 0.0, 0.8, 0.0).unwrap()),
            (1.0, Pose::new(10.0, 0.0, 0.8, 0.0).unwrap()),
        ];
        let gt = gt_boxes_at(&scene, 0.15).unwrap();
        assert_eq!(gt.len(), 1);
        assert_abs_diff_eq!(gt[0].1.center[0], 1.5, epsilon = 1e-12);
        assert!(gt_boxes_at(&scene, 2.0).is_err());

        // Static object: identical gt at any time.
        let static_cfg = ScenarioConfig { object_speed: [0.0, 0.0], ..two_agent_config() };
        let scene = build_scene(&static_cfg, 4).unwrap();
        let a = gt_boxes_at(&scene, 0.1).unwrap();
        let b = gt_boxes_at(&scene, 0.9).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn gt_consistent_with_cloud_mean_time() {
        // gt at t_aligned differs from the cloud-implied position by
        // speed * (t_aligned - mean point time).
        let cfg = ScenarioConfig {
            num_agents: 1,
            ego_id: 0,
            tick_offsets: TickOffsets::Explicit(vec![0.0]),
            agent_poses: Some(vec![[0.0, -15.0, 0.0, 0.0]]),
            num_objects: 1,
            object_speed: [10.0, 10.0],
            object_heading_deg: Some(0.0),
            ..ScenarioConfig::default()
        };
        let mut scene = build_scene(&cfg, 8).unwrap();
        scene.objects[0].waypoints = vec![
            (0.0, Pose::new(0.0, 0.0, 0.8, 0.0).unwrap()),
            (1.0, Pose::new(10.0, 0.0, 0.8, 0.0).unwrap()),
        ];
        let frame = make_async_frame(&scene, 0).unwrap();
        let cloud = &frame.clouds[&0];
        let obj_pts: Vec<&TimedPoint> = cloud.points.iter().collect();
        assert!(!obj_pts.is_empty());
        let mean_t = obj_pts.iter().map(|p| p.t).sum::<f64>() / obj_pts.len() as f64;
        let mean_x = obj_pts.iter().map(|p| p.x).sum::<f64>() / obj_pts.len() as f64;
        let gt = gt_boxes_at(&scene, frame.t_aligned).unwrap();
        // The visible face centroid tracks the center x; the gap along
        // motion equals v * (t_aligned - mean_t) up to face geometry.
        let expected_shift = 10.0 * (frame.t_aligned - mean_t);
        let actual_shift = gt[0].1.center[0] - mean_x;
        assert!((actual_shift - expected_shift).abs() < 0.35, "shift {actual_shift} vs {expected_shift}");
    }
}
