//! On-disk formats: TPCD point clouds, frame directories, detection JSONL.
//!
//! Every write goes through a temp-file-then-rename so partially written
//! artifacts are never observed.

use std::fs;
use std::io::{Read, Write};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::fusion::Detection;
use crate::scene::{AgentState, Frame, PointCloud, Scene, TimedPoint};

const TPCD_MAGIC: &[u8; 4] = b"TPCD";
const TPCD_VERSION: u16 = 1;

/// Write bytes atomically: temp file in the same directory, then rename.
pub fn atomic_write(path: &Path, bytes: &[u8]) -> Result<()> {
    let dir = path.parent().unwrap_or_else(|| Path::new("."));
    fs::create_dir_all(dir)?;
    let mut tmp = tempfile::NamedTempFile::new_in(dir)?;
    tmp.write_all(bytes)?;
    tmp.flush()?;
    tmp.persist(path).map_err(|e| Error::Io(e.error))?;
    Ok(())
}

/// Serialize a point cloud: "TPCD", version u16 LE, count u32 LE, then per
/// point x, y, z, t as f32 LE.
pub fn encode_tpcd(cloud: &PointCloud) -> Vec<u8> {
    let mut buf = Vec::with_capacity(10 + cloud.points.len() * 16);
    buf.extend_from_slice(TPCD_MAGIC);
    buf.extend_from_slice(&TPCD_VERSION.to_le_bytes());
    buf.extend_from_slice(&(cloud.points.len() as u32).to_le_bytes());
    for p in &cloud.points {
        buf.extend_from_slice(&(p.x as f32).to_le_bytes());
        buf.extend_from_slice(&(p.y as f32).to_le_bytes());
        buf.extend_from_slice(&(p.z as f32).to_le_bytes());
        buf.extend_from_slice(&(p.t as f32).to_le_bytes());
    }
    buf
}

/// Decode a TPCD payload. Tick metadata is not stored in the binary and is
/// filled in by the caller (it lives in the frame metadata).
pub fn decode_tpcd(bytes: &[u8], agent_id: u32) -> Result<PointCloud> {
    if bytes.len() < 10 {
        return Err(Error::Format("TPCD payload truncated before header".into()));
    }
    if &bytes[0..4] != TPCD_MAGIC {
        return Err(Error::Format("bad TPCD magic".into()));
    }
    let version = u16::from_le_bytes([bytes[4], bytes[5]]);
    if version != TPCD_VERSION {
        return Err(Error::Format(format!("unsupported TPCD version {version}")));
    }
    let count = u32::from_le_bytes([bytes[6], bytes[7], bytes[8], bytes[9]]) as usize;
    let expect = 10 + count * 16;
    if bytes.len() != expect {
        return Err(Error::Format(format!(
            "TPCD payload length {} does not match count {count}",
            bytes.len()
        )));
    }
    let mut points = Vec::with_capacity(count);
    for i in 0..count {
        let off = 10 + i * 16;
        let f = |k: usize| {
            f32::from_le_bytes([bytes[off + k], bytes[off + k + 1], bytes[off + k + 2], bytes[off + k + 3]])
                as f64
        };
        points.push(TimedPoint { x: f(0), y: f(4), z: f(8), t: f(12) });
    }
    Ok(PointCloud { agent_id, points, tick_start: 0.0, tick_end: 0.0 })
}

pub fn write_tpcd(path: &Path, cloud: &PointCloud) -> Result<()> {
    atomic_write(path, &encode_tpcd(cloud))
}

pub fn read_tpcd(path: &Path, agent_id: u32) -> Result<PointCloud> {
    let mut buf = Vec::new();
    fs::File::open(path)?.read_to_end(&mut buf)?;
    decode_tpcd(&buf, agent_id)
}

/// Per-frame metadata stored next to the TPCD payloads.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct FrameMeta {
    pub index: usize,
    pub t_aligned: f64,
    pub agents: Vec<FrameAgentMeta>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct FrameAgentMeta {
    pub state: AgentState,
    pub tick_start: f64,
    pub tick_end: f64,
}

fn frame_dir(root: &Path, index: usize) -> PathBuf {
    root.join("frames").join(format!("frame_{index:04}"))
}

/// Write a scene plus frames as a directory tree:
/// `scene.json`, `frames/frame_NNNN/meta.json`, `frames/frame_NNNN/agent_NNN.tpcd`.
pub fn write_dataset(root: &Path, scene: &Scene, frames: &[Frame]) -> Result<()> {
    fs::create_dir_all(root)?;
    atomic_write(&root.join("scene.json"), serde_json::to_string_pretty(scene)?.as_bytes())?;
    for frame in frames {
        let dir = frame_dir(root, frame.index);
        fs::create_dir_all(&dir)?;
        let mut agents = Vec::new();
        for (&id, cloud) in &frame.clouds {
            let state = frame
                .states
                .get(&id)
                .ok_or_else(|| Error::InvalidInput(format!("frame missing state for agent {id}")))?;
            agents.push(FrameAgentMeta {
                state: state.clone(),
                tick_start: cloud.tick_start,
                tick_end: cloud.tick_end,
            });
            write_tpcd(&dir.join(format!("agent_{id:03}.tpcd")), cloud)?;
        }
        let meta = FrameMeta { index: frame.index, t_aligned: frame.t_aligned, agents };
        atomic_write(&dir.join("meta.json"), serde_json::to_string_pretty(&meta)?.as_bytes())?;
    }
    Ok(())
}

pub fn read_scene(root: &Path) -> Result<Scene> {
    let text = fs::read_to_string(root.join("scene.json"))?;
    Ok(serde_json::from_str(&text)?)
}

pub fn read_frame(root: &Path, index: usize) -> Result<Frame> {
    let dir = frame_dir(root, index);
    let meta: FrameMeta = serde_json::from_str(&fs::read_to_string(dir.join("meta.json"))?)?;
    if meta.index != index {
        return Err(Error::Format(format!(
            "frame directory {index} holds metadata for frame {}",
            meta.index
        )));
    }
    let mut clouds = std::collections::BTreeMap::new();
    let mut states = std::collections::BTreeMap::new();
    for am in &meta.agents {
        let id = am.state.id;
        let mut cloud = read_tpcd(&dir.join(format!("agent_{id:03}.tpcd")), id)?;
        cloud.tick_start = am.tick_start;
        cloud.tick_end = am.tick_end;
        clouds.insert(id, cloud);
        states.insert(id, am.state.clone());
    }
    Ok(Frame { index, clouds, states, t_aligned: meta.t_aligned })
}

/// Number of frame directories present under `root`.
pub fn count_frames(root: &Path) -> Result<usize> {
    let frames = root.join("frames");
    if !frames.exists() {
        return Ok(0);
    }
    let mut n = 0;
    for entry in fs::read_dir(frames)? {
        let entry = entry?;
        if entry.file_name().to_string_lossy().starts_with("frame_") {
            n += 1;
        }
    }
    Ok(n)
}

/// Write detections as JSON lines, one object per line, sorted order as
/// given.
pub fn write_detections_jsonl(path: &Path, frames: &[(usize, Vec<Detection>)]) -> Result<()> {
    let mut buf = String::new();
    for (frame, dets) in frames {
        for det in dets {
            #[derive(Serialize)]
            struct Line<'a> {
                frame: usize,
                #[serde(flatten)]
                det: &'a Detection,
            }
            buf.push_str(&serde_json::to_string(&Line { frame: *frame, det })?);
            buf.push('\n');
        }
    }
    atomic_write(path, buf.as_bytes())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::scene::{build_scene, make_async_frame, ScenarioConfig};

    fn tiny_cloud() -> PointCloud {
        PointCloud {
            agent_id: 3,
            points: vec![
                TimedPoint { x: 1.5, y: -2.25, z: 0.5, t: 0.0625 },
                TimedPoint { x: -8.0, y: 4.0, z: 1.0, t: 0.125 },
            ],
            tick_start: 0.05,
            tick_end: 0.15,
        }
    }

    #[test]
    fn tpcd_roundtrip_and_header() {
        let cloud = tiny_cloud();
        let bytes = encode_tpcd(&cloud);
        assert_eq!(&bytes[0..4], b"TPCD");
        assert_eq!(u16::from_le_bytes([bytes[4], bytes[5]]), 1);
        assert_eq!(u32::from_le_bytes([bytes[6], bytes[7], bytes[8], bytes[9]]), 2);
        assert_eq!(bytes.len(), 10 + 2 * 16);

        let back = decode_tpcd(&bytes, 3).unwrap();
        assert_eq!(back.agent_id, 3);
        // Values chosen exactly representable in f32.
        assert_eq!(back.points, cloud.points);
    }

    #[test]
    fn tpcd_rejects_corruption() {
        let bytes = encode_tpcd(&tiny_cloud());
        assert!(decode_tpcd(&bytes[..bytes.len() - 1], 0).is_err());
        assert!(decode_tpcd(&bytes[..5], 0).is_err());
        let mut bad_magic = bytes.clone();
        bad_magic[0] = b'X';
        assert!(decode_tpcd(&bad_magic, 0).is_err());
        let mut bad_version = bytes.clone();
        bad_version[4] = 9;
        assert!(decode_tpcd(&bad_version, 0).is_err());
    }

    #[test]
    fn dataset_roundtrip() {
        let config = ScenarioConfig {
            duration: 0.5,
            num_agents: 2,
            num_objects: 1,
            seed: 11,
            angular_resolution_deg: 2.0,
            ..ScenarioConfig::default()
        };
        let scene = build_scene(&config, config.seed).unwrap();
        let frames: Vec<Frame> =
            (0..2).map(|j| make_async_frame(&scene, j).unwrap()).collect();

        let dir = tempfile::tempdir().unwrap();
        write_dataset(dir.path(), &scene, &frames).unwrap();
        assert_eq!(count_frames(dir.path()).unwrap(), 2);

        let scene2 = read_scene(dir.path()).unwrap();
        assert_eq!(scene2.agents.len(), scene.agents.len());
        assert_eq!(scene2.seed, scene.seed);

        let f0 = read_frame(dir.path(), 0).unwrap();
        assert_eq!(f0.t_aligned, frames[0].t_aligned);
        assert_eq!(f0.clouds.len(), frames[0].clouds.len());
        for (id, cloud) in &f0.clouds {
            let orig = &frames[0].clouds[id];
            assert_eq!(cloud.points.len(), orig.points.len());
            assert_eq!(cloud.tick_start, orig.tick_start);
            // f32 quantization bound.
            for (a, b) in cloud.points.iter().zip(&orig.points) {
                assert!((a.x - b.x).abs() < 1e-4);
                assert!((a.t - b.t).abs() < 1e-6);
            }
        }
        assert!(read_frame(dir.path(), 7).is_err());
    }

    #[test]
    fn detections_jsonl() {
        use crate::fusion::{Detection, DetectionSource};
        use crate::geometry::BBox;
        let dets = vec![(
            0usize,
            vec![Detection {
                bbox: BBox::new([1.0, 2.0, 0.5], [4.0, 2.0, 1.6], 0.1).unwrap(),
                confidence: 0.75,
                source: DetectionSource::Fused,
            }],
        )];
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("det.jsonl");
        write_detections_jsonl(&path, &dets).unwrap();
        let text = std::fs::read_to_string(&path).unwrap();
        assert_eq!(text.lines().count(), 1);
        let v: serde_json::Value = serde_json::from_str(text.lines().next().unwrap()).unwrap();
        assert_eq!(v["frame"], 0);
        assert_eq!(v["confidence"], 0.75);
    }
}
