//! Query-based temporal-spatial fusion.
//!
//! Per frame and agent, top-K RoI cells become object queries. A rolling
//! memory queue keeps the best queries of the last T frames. Before
//! attention, every query, key and value is aligned to the current agent
//! pose and time by injecting a motion embedding through motion-aware layer
//! normalization, and a time embedding into the position stream. One
//! decoder layer (hybrid attention over current + historical queries, then
//! cross attention against coarse global features) plus a residual with the
//! initial RoI embeddings feeds center-based detection heads. Cooperative
//! agents' outputs are then fused spatially: union of query locations,
//! zero-padding, and plain scaled-dot attention of the ego set against the
//! concatenated multi-agent set.

use std::collections::VecDeque;
use std::io::Read;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::featurizer::{RoIPoint, CELL_FEAT_DIM};
use crate::geometry::{BBox, Pose};
use crate::scene::AgentState;
use crate::tensor::{focal_term, smooth_l1_term, NodeId, Tape, Tensor};

/// Position normalizers: half-extent of the default detection range.
pub const POS_NORM: [f64; 2] = [140.8, 38.4];
/// Velocity normalizer, m/s.
pub const VEL_NORM: f64 = 30.0;
pub use crate::featurizer::TIME_NORM;
/// Regression output width: dx, dy, z, log l, log w, log h, sin yaw, cos yaw.
pub const REG_DIM: usize = 8;
/// Motion vector width: dt, ex, ey, cos yaw, sin yaw, vx, vy.
pub const MOTION_DIM: usize = 7;

pub const LN_EPS: f64 = 1e-5;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TimestampMode {
    /// Every point/query carries its own observation timestamp.
    Pointwise,
    /// All timestamps collapse to the owning scan's tick start.
    Framewise,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ModelConfig {
    /// Feature dimension of the decoder.
    pub d: usize,
    pub k_roi_local: usize,
    pub k_roi_global: usize,
    pub k_q: usize,
    /// Memory window in frames.
    pub t_window: usize,
    pub timestamp_mode: TimestampMode,
    /// Use the wrapped circular azimuth metric for query timestamps.
    pub eq1_wrap: bool,
    /// Add position embeddings to attention key rows.
    pub pos_emb_in_keys: bool,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            d: 32,
            k_roi_local: 1024,
            k_roi_global: 512,
            k_q: 256,
            t_window: 4,
            timestamp_mode: TimestampMode::Pointwise,
            eq1_wrap: true,
            pos_emb_in_keys: true,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        if self.d < 2 {
            return Err(Error::Config(format!("d: must be >= 2, got {}", self.d)));
        }
        if self.k_q > self.k_roi_local {
            return Err(Error::Config(format!(
                "k_q: {} exceeds k_roi_local {}",
                self.k_q, self.k_roi_local
            )));
        }
        if self.t_window < 1 {
            return Err(Error::Config("t_window: must be >= 1".into()));
        }
        if self.k_roi_local < 1 || self.k_roi_global < 1 || self.k_q < 1 {
            return Err(Error::Config("query budgets must be >= 1".into()));
        }
        Ok(())
    }
}

/// An object query: world-frame position, context feature, observation
/// timestamp and the owning agent's pose and velocity.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Query {
    pub position: [f64; 2],
    pub context: Vec<f64>,
    pub tau: f64,
    pub pose: Pose,
    pub velocity: [f64; 2],
    pub score: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MemorySlot {
    pub frame_index: usize,
    pub queries: Vec<Query>,
}

/// Rolling store of the top-K_q queries from each of the last T frames
/// (newest last).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MemoryQueue {
    capacity_frames: usize,
    per_frame: usize,
    slots: VecDeque<MemorySlot>,
}

impl MemoryQueue {
    pub fn new(capacity_frames: usize, per_frame: usize) -> Self {
        MemoryQueue { capacity_frames, per_frame, slots: VecDeque::new() }
    }

    pub fn slots(&self) -> impl Iterator<Item = &MemorySlot> {
        self.slots.iter()
    }

    pub fn len(&self) -> usize {
        self.slots.len()
    }

    pub fn is_empty(&self) -> bool {
        self.slots.is_empty()
    }

    pub fn newest(&self) -> Option<&MemorySlot> {
        self.slots.back()
    }

    /// Push a frame's queries (sorted by descending score, truncated to
    /// K_q); evicts the oldest slot when at capacity.
    pub fn push(&mut self, frame_index: usize, mut queries: Vec<Query>) {
        let mut order: Vec<usize> = (0..queries.len()).collect();
        order.sort_by(|&a, &b| queries[b].score.total_cmp(&queries[a].score).then(a.cmp(&b)));
        let mut sorted: Vec<Query> = order.into_iter().map(|i| queries[i].clone()).collect();
        sorted.truncate(self.per_frame);
        queries = sorted;
        if self.slots.len() == self.capacity_frames {
            self.slots.pop_front();
        }
        self.slots.push_back(MemorySlot { frame_index, queries });
    }

    pub fn check_invariants(&self) -> Result<()> {
        if self.slots.len() > self.capacity_frames {
            return Err(Error::Verification("memory queue over capacity".into()));
        }
        for slot in &self.slots {
            if slot.queries.len() > self.per_frame {
                return Err(Error::Verification("memory slot over per-frame budget".into()));
            }
            if !slot.queries.windows(2).all(|w| w[0].score >= w[1].score) {
                return Err(Error::Verification("memory slot not sorted by score".into()));
            }
        }
        if !self
            .slots
            .iter()
            .zip(self.slots.iter().skip(1))
            .all(|(a, b)| a.frame_index < b.frame_index)
        {
            return Err(Error::Verification("memory slot frame indices not increasing".into()));
        }
        Ok(())
    }
}

// ---------------------------------------------------------------------------
// Parameters

macro_rules! model_params {
    ($($name:ident: ($rows:expr, $cols:expr, $std:expr)),+ $(,)?) => {
        /// All learnable tensors of the model.
        #[derive(Debug, Clone, PartialEq)]
        pub struct ModelParams {
            pub d: usize,
            $(pub $name: Tensor,)+
        }

        /// Tape node ids for every parameter tensor.
        #[derive(Debug, Clone)]
        pub struct ParamNodes {
            $(pub $name: NodeId,)+
        }

        impl ModelParams {
            /// Deterministic initialization: weights scaled-normal, biases and
            /// MLN generators zero (identity normalization at start).
            pub fn init(config: &ModelConfig, seed: u64) -> Result<Self> {
                config.validate()?;
                let d = config.d;
                let mut rng = ChaCha8Rng::seed_from_u64(seed);
                $(
                    let (rows, cols): (usize, usize) = ($rows(d), $cols(d));
                    let std: f64 = $std(d);
                    let mut t = Tensor::zeros(rows, cols);
                    if std > 0.0 {
                        for v in &mut t.data {
                            // Box-Muller on two uniforms.
                            let u1: f64 = rng.gen_range(1e-12..1.0);
                            let u2: f64 = rng.gen_range(0.0..1.0);
                            *v = std * (-2.0 * u1.ln()).sqrt() * (std::f64::consts::TAU * u2).cos();
                        }
                    }
                    let $name = t;
                )+
                Ok(ModelParams { d, $($name,)+ })
            }

            pub fn named(&self) -> Vec<(&'static str, &Tensor)> {
                vec![$((stringify!($name), &self.$name),)+]
            }

            pub fn named_mut(&mut self) -> Vec<(&'static str, &mut Tensor)> {
                vec![$((stringify!($name), &mut self.$name),)+]
            }

            /// Insert every tensor into the tape as a leaf.
            pub fn nodes(&self, tape: &mut Tape) -> ParamNodes {
                ParamNodes {
                    $($name: tape.leaf(self.$name.clone()),)+
                }
            }
        }

        impl ParamNodes {
            pub fn named(&self) -> Vec<(&'static str, NodeId)> {
                vec![$((stringify!($name), self.$name),)+]
            }
        }
    };
}

#[rustfmt::skip]
model_params! {
    feat_w:        (|_| CELL_FEAT_DIM, |d| d, |_| 0.5),
    feat_b:        (|_| 1, |d| d, |_| 0.0),
    ctx_w:         (|d| d, |d| d, |d: usize| 1.0 / (d as f64).sqrt()),
    ctx_b:         (|_| 1, |d| d, |_| 0.0),
    pos_w1:        (|_| 2, |d| d, |_| 0.5),
    pos_b1:        (|_| 1, |d| d, |_| 0.0),
    pos_w2:        (|d| d, |d| d, |d: usize| 1.0 / (d as f64).sqrt()),
    pos_b2:        (|_| 1, |d| d, |_| 0.0),
    time_w1:       (|_| 1, |d| d, |_| 1.0),
    time_b1:       (|_| 1, |d| d, |_| 0.0),
    time_w2:       (|d| d, |d| d, |d: usize| 1.0 / (d as f64).sqrt()),
    time_b2:       (|_| 1, |d| d, |_| 0.0),
    motion_w1:     (|_| MOTION_DIM, |d| d, |_| 0.5),
    motion_b1:     (|_| 1, |d| d, |_| 0.0),
    motion_w2:     (|d| d, |d| d, |d: usize| 1.0 / (d as f64).sqrt()),
    motion_b2:     (|_| 1, |d| d, |_| 0.0),
    mln_qp_g:      (|d| d, |d| d, |_| 0.0),
    mln_qp_b:      (|d| d, |d| d, |_| 0.0),
    mln_qc_g:      (|d| d, |d| d, |_| 0.0),
    mln_qc_b:      (|d| d, |d| d, |_| 0.0),
    mln_tgt_g:     (|d| d, |d| d, |_| 0.0),
    mln_tgt_b:     (|d| d, |d| d, |_| 0.0),
    hyb_wq:        (|d| d, |d| d, |d: usize| 1.0 / (d as f64).sqrt()),
    hyb_wk:        (|d| d, |d| d, |d: usize| 1.0 / (d as f64).sqrt()),
    hyb_wv:        (|d| d, |d| d, |d: usize| 1.0 / (d as f64).sqrt()),
    hyb_wo:        (|d| d, |d| d, |d: usize| 1.0 / (d as f64).sqrt()),
    cross_wq:      (|d| d, |d| d, |d: usize| 1.0 / (d as f64).sqrt()),
    cross_wk:      (|d| d, |d| d, |d: usize| 1.0 / (d as f64).sqrt()),
    cross_wv:      (|d| d, |d| d, |d: usize| 1.0 / (d as f64).sqrt()),
    cross_wo:      (|d| d, |d| d, |d: usize| 1.0 / (d as f64).sqrt()),
    local_score_w: (|d| d, |_| 1, |d: usize| 1.0 / (d as f64).sqrt()),
    local_score_b: (|_| 1, |_| 1, |_| 0.0),
    local_reg_w:   (|d| d, |_| REG_DIM, |d: usize| 0.1 / (d as f64).sqrt()),
    local_reg_b:   (|_| 1, |_| REG_DIM, |_| 0.0),
    global_score_w:(|d| d, |_| 1, |d: usize| 1.0 / (d as f64).sqrt()),
    global_score_b:(|_| 1, |_| 1, |_| 0.0),
    global_reg_w:  (|d| d, |_| REG_DIM, |d: usize| 0.1 / (d as f64).sqrt()),
    global_reg_b:  (|_| 1, |_| REG_DIM, |_| 0.0),
    roi_w:         (|_| CELL_FEAT_DIM, |_| 1, |_| 0.5),
    roi_b:         (|_| 1, |_| 1, |_| 0.0),
}

const PARAMS_MAGIC: &[u8; 4] = b"TACP";
const PARAMS_VERSION: u16 = 1;

impl ModelParams {
    /// Serialize: magic, version (u16 LE), tensor count (u32 LE), then per
    /// tensor: name length (u16 LE) + name + rows (u32 LE) + cols (u32 LE)
    /// + row-major f64 LE values.
    pub fn save(&self, path: &Path) -> Result<()> {
        let mut buf: Vec<u8> = Vec::new();
        buf.extend_from_slice(PARAMS_MAGIC);
        buf.extend_from_slice(&PARAMS_VERSION.to_le_bytes());
        let named = self.named();
        buf.extend_from_slice(&(named.len() as u32).to_le_bytes());
        for (name, t) in named {
            buf.extend_from_slice(&(name.len() as u16).to_le_bytes());
            buf.extend_from_slice(name.as_bytes());
            buf.extend_from_slice(&(t.rows as u32).to_le_bytes());
            buf.extend_from_slice(&(t.cols as u32).to_le_bytes());
            for v in &t.data {
                buf.extend_from_slice(&v.to_le_bytes());
            }
        }
        crate::io::atomic_write(path, &buf)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let mut file = std::fs::File::open(path)?;
        let mut buf = Vec::new();
        file.read_to_end(&mut buf)?;
        let mut cur = std::io::Cursor::new(buf);
        let mut magic = [0u8; 4];
        cur.read_exact(&mut magic)?;
        if &magic != PARAMS_MAGIC {
            return Err(Error::Format("bad params magic".into()));
        }
        let mut u16b = [0u8; 2];
        cur.read_exact(&mut u16b)?;
        if u16::from_le_bytes(u16b) != PARAMS_VERSION {
            return Err(Error::Format("unsupported params version".into()));
        }
        let mut u32b = [0u8; 4];
        cur.read_exact(&mut u32b)?;
        let count = u32::from_le_bytes(u32b) as usize;
        let mut tensors: Vec<(String, Tensor)> = Vec::with_capacity(count);
        for _ in 0..count {
            cur.read_exact(&mut u16b)?;
            let nlen = u16::from_le_bytes(u16b) as usize;
            let mut name = vec![0u8; nlen];
            cur.read_exact(&mut name)?;
            let name = String::from_utf8(name).map_err(|_| Error::Format("bad tensor name".into()))?;
            cur.read_exact(&mut u32b)?;
            let rows = u32::from_le_bytes(u32b) as usize;
            cur.read_exact(&mut u32b)?;
            let cols = u32::from_le_bytes(u32b) as usize;
            let mut data = vec![0.0f64; rows * cols];
            let mut f64b = [0u8; 8];
            for v in &mut data {
                cur.read_exact(&mut f64b)?;
                *v = f64::from_le_bytes(f64b);
            }
            tensors.push((name, Tensor::from_vec(rows, cols, data)?));
        }
        // Rebuild over a default-shaped instance, then overwrite by name.
        let d = tensors
            .iter()
            .find(|(n, _)| n == "ctx_w")
            .map(|(_, t)| t.rows)
            .ok_or_else(|| Error::Format("params file missing ctx_w".into()))?;
        let cfg = ModelConfig { d, ..ModelConfig::default() };
        let mut params = ModelParams::init(&cfg, 0)?;
        for (name, dst) in params.named_mut() {
            let (_, src) = tensors
                .iter()
                .find(|(n, _)| n == name)
                .ok_or_else(|| Error::Format(format!("params file missing tensor {name}")))?;
            if src.rows != dst.rows || src.cols != dst.cols {
                return Err(Error::Format(format!(
                    "tensor {name} has shape {}x{}, expected {}x{}",
                    src.rows, src.cols, dst.rows, dst.cols
                )));
            }
            *dst = src.clone();
        }
        Ok(params)
    }
}

// ---------------------------------------------------------------------------
// Layers

/// Affine map y = x W + b (W stored input-major, b a broadcast row).
pub fn linear(tape: &mut Tape, x: NodeId, w: NodeId, b: NodeId) -> Result<NodeId> {
    let y = tape.matmul(x, w)?;
    tape.add_row(y, b)
}

/// Two-layer MLP with tanh hidden activation.
pub fn mlp2(
    tape: &mut Tape,
    x: NodeId,
    w1: NodeId,
    b1: NodeId,
    w2: NodeId,
    b2: NodeId,
) -> Result<NodeId> {
    let h = linear(tape, x, w1, b1)?;
    let h = tape.tanh(h);
    linear(tape, h, w2, b2)
}

/// Motion-aware layer normalization: gamma = 1 + m Wg, beta = m Wb,
/// out = gamma * LN(x) + beta (elementwise, per row).
pub fn mln(tape: &mut Tape, x: NodeId, m: NodeId, wg: NodeId, wb: NodeId) -> Result<NodeId> {
    let ln = tape.layer_norm_rows(x, LN_EPS)?;
    let g = tape.matmul(m, wg)?;
    let gamma = tape.affine(g, 1.0, 1.0);
    let beta = tape.matmul(m, wb)?;
    let scaled = tape.mul(gamma, ln)?;
    tape.add(scaled, beta)
}

/// Content carried by an alignment item.
#[derive(Debug, Clone)]
pub enum ItemContent {
    /// Raw cell feature of a current-frame RoI point.
    Feature(Vec<f64>),
    /// Stored context of a propagated / memory query.
    Stored(Vec<f64>),
}

/// One element to be motion-time aligned.
#[derive(Debug, Clone)]
pub struct MtaItem {
    pub position: [f64; 2],
    pub tau: f64,
    pub pose: Pose,
    pub velocity: [f64; 2],
    pub content: ItemContent,
}

impl MtaItem {
    pub fn from_roi(roi: &RoIPoint, ego: &AgentState) -> Self {
        MtaItem {
            position: roi.position,
            tau: roi.tau,
            pose: ego.pose,
            velocity: ego.velocity,
            content: ItemContent::Feature(roi.feature.clone()),
        }
    }

    pub fn from_query(q: &Query) -> Self {
        MtaItem {
            position: q.position,
            tau: q.tau,
            pose: q.pose,
            velocity: q.velocity,
            content: ItemContent::Stored(q.context.clone()),
        }
    }
}

/// Motion-time aligned embeddings for a group of items.
pub struct Aligned {
    /// Q_p^{mo,tau}: motion-aware, time-aware position embedding (n x d).
    pub pos_time: NodeId,
    /// Motion-aware content embedding (n x d).
    pub content_mo: NodeId,
    /// Content embedding before motion injection (n x d), for residuals.
    pub content_emb: NodeId,
    pub n: usize,
}

/// Align a group of items to the reference time `t_ref`.
///
/// All items in one call must carry the same content kind; current-frame
/// features go through the tgt MLN stream, stored contexts through the
/// query-context stream.
pub fn mta_align(
    tape: &mut Tape,
    p: &ParamNodes,
    items: &[MtaItem],
    t_ref: f64,
) -> Result<Aligned> {
    if items.is_empty() {
        return Err(Error::InvalidInput("mta_align on empty item list".into()));
    }
    let n = items.len();
    let is_feature = matches!(items[0].content, ItemContent::Feature(_));
    for it in items {
        if matches!(it.content, ItemContent::Feature(_)) != is_feature {
            return Err(Error::InvalidInput("mixed content kinds in one alignment group".into()));
        }
    }

    let mut pos = Vec::with_capacity(n * 2);
    let mut dt = Vec::with_capacity(n);
    let mut motion = Vec::with_capacity(n * MOTION_DIM);
    let mut content = Vec::new();
    for it in items {
        pos.push(it.position[0] / POS_NORM[0]);
        pos.push(it.position[1] / POS_NORM[1]);
        let delta = (t_ref - it.tau) / TIME_NORM;
        dt.push(delta);
        motion.extend_from_slice(&[
            delta,
            it.pose.x / POS_NORM[0],
            it.pose.y / POS_NORM[1],
            it.pose.yaw.cos(),
            it.pose.yaw.sin(),
            it.velocity[0] / VEL_NORM,
            it.velocity[1] / VEL_NORM,
        ]);
        match &it.content {
            ItemContent::Feature(f) => content.extend_from_slice(f),
            ItemContent::Stored(c) => content.extend_from_slice(c),
        }
    }
    let content_cols = content.len() / n;
    let pos = tape.leaf(Tensor::from_vec(n, 2, pos)?);
    let dt = tape.leaf(Tensor::from_vec(n, 1, dt)?);
    let motion = tape.leaf(Tensor::from_vec(n, MOTION_DIM, motion)?);
    let content = tape.leaf(Tensor::from_vec(n, content_cols, content)?);

    let m_emb = mlp2(tape, motion, p.motion_w1, p.motion_b1, p.motion_w2, p.motion_b2)?;
    let qp_emb = mlp2(tape, pos, p.pos_w1, p.pos_b1, p.pos_w2, p.pos_b2)?;
    let t_emb = mlp2(tape, dt, p.time_w1, p.time_b1, p.time_w2, p.time_b2)?;

    let content_emb = if is_feature {
        linear(tape, content, p.feat_w, p.feat_b)?
    } else {
        linear(tape, content, p.ctx_w, p.ctx_b)?
    };

    let qp_mo = mln(tape, qp_emb, m_emb, p.mln_qp_g, p.mln_qp_b)?;
    // Time enters the position stream only.
    let pos_time = tape.add(qp_mo, t_emb)?;
    let content_mo = if is_feature {
        mln(tape, content_emb, m_emb, p.mln_tgt_g, p.mln_tgt_b)?
    } else {
        mln(tape, content_emb, m_emb, p.mln_qc_g, p.mln_qc_b)?
    };
    Ok(Aligned { pos_time, content_mo, content_emb, n })
}

/// Compute a motion embedding for one (tau, pose, velocity) tuple.
pub fn motion_embed(
    tape: &mut Tape,
    p: &ParamNodes,
    tau: f64,
    pose: &Pose,
    velocity: [f64; 2],
    t_ref: f64,
) -> Result<NodeId> {
    let v = Tensor::row_vec(vec![
        (t_ref - tau) / TIME_NORM,
        pose.x / POS_NORM[0],
        pose.y / POS_NORM[1],
        pose.yaw.cos(),
        pose.yaw.sin(),
        velocity[0] / VEL_NORM,
        velocity[1] / VEL_NORM,
    ]);
    let x = tape.leaf(v);
    mlp2(tape, x, p.motion_w1, p.motion_b1, p.motion_w2, p.motion_b2)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DetectionSource {
    Agent(u32),
    Fused,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Detection {
    pub bbox: BBox,
    pub confidence: f64,
    pub source: DetectionSource,
}

/// Regression target for a query at `qpos` against a ground-truth box.
pub fn encode_box_target(gt: &BBox, qpos: [f64; 2]) -> [f64; REG_DIM] {
    [
        gt.center[0] - qpos[0],
        gt.center[1] - qpos[1],
        gt.center[2],
        gt.dims[0].ln(),
        gt.dims[1].ln(),
        gt.dims[2].ln(),
        gt.yaw.sin(),
        gt.yaw.cos(),
    ]
}

/// Decode a head regression row into a box around the query position.
pub fn decode_box(qpos: [f64; 2], reg: &[f64]) -> BBox {
    let yaw = if reg[6] == 0.0 && reg[7] == 0.0 { 0.0 } else { reg[6].atan2(reg[7]) };
    BBox {
        center: [qpos[0] + reg[0], qpos[1] + reg[1], reg[2]],
        dims: [reg[3].exp(), reg[4].exp(), reg[5].exp()],
        yaw,
    }
}

fn sigmoid(z: f64) -> f64 {
    1.0 / (1.0 + (-z).exp())
}

/// Options toggling parts of the decoder (ablation variants).
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct FusionToggles {
    pub temp_fusion: bool,
    pub global_attention: bool,
}

impl Default for FusionToggles {
    fn default() -> Self {
        FusionToggles { temp_fusion: true, global_attention: true }
    }
}

/// Output of one temporal-fusion step for a single agent.
pub struct StepOutput {
    /// Fused per-query contexts (n_q x d).
    pub ctx: NodeId,
    /// Classification logits (n_q x 1).
    pub logits: NodeId,
    /// Regression outputs (n_q x REG_DIM).
    pub reg: NodeId,
    /// Query positions, world frame, in row order.
    pub positions: Vec<[f64; 2]>,
    /// Observation timestamps per query row.
    pub taus: Vec<f64>,
    pub detections: Vec<Detection>,
    pub queries_out: Vec<Query>,
    pub memory: MemoryQueue,
}

/// One decoder iteration for one agent: MTA alignment, hybrid attention
/// over current + historical queries, cross attention against global RoI
/// features, residual with the initial RoI embeddings, and the local
/// center-based head. The top-K_q output queries are pushed into the
/// returned memory queue.
#[allow(clippy::too_many_arguments)]
pub fn temp_fusion_step(
    tape: &mut Tape,
    p: &ParamNodes,
    config: &ModelConfig,
    toggles: &FusionToggles,
    local_roi: &[RoIPoint],
    global_roi: &[RoIPoint],
    memory: &MemoryQueue,
    ego: &AgentState,
    frame_index: usize,
    t_aligned: f64,
) -> Result<StepOutput> {
    if local_roi.is_empty() {
        return Err(Error::InvalidInput("temp_fusion_step with empty local RoI set".into()));
    }
    let d = config.d;

    // Current-frame queries from RoI points.
    let current_items: Vec<MtaItem> = local_roi.iter().map(|r| MtaItem::from_roi(r, ego)).collect();
    let current = mta_align(tape, p, &current_items, t_aligned)?;

    // Propagated queries: newest memory slot.
    let propagated_queries: Vec<Query> = if toggles.temp_fusion {
        memory.newest().map(|s| s.queries.clone()).unwrap_or_default()
    } else {
        Vec::new()
    };
    let propagated = if propagated_queries.is_empty() {
        None
    } else {
        let items: Vec<MtaItem> = propagated_queries.iter().map(MtaItem::from_query).collect();
        Some(mta_align(tape, p, &items, t_aligned)?)
    };

    // Historical keys: all memory slots.
    let memory_aligned: Vec<Aligned> = if toggles.temp_fusion {
        memory
            .slots()
            .filter(|s| !s.queries.is_empty())
            .map(|s| {
                let items: Vec<MtaItem> = s.queries.iter().map(MtaItem::from_query).collect();
                mta_align(tape, p, &items, t_aligned)
            })
            .collect::<Result<_>>()?
    } else {
        Vec::new()
    };

    // Query set: current then propagated.
    let mut q_pos_time_parts = vec![current.pos_time];
    let mut q_content_parts = vec![current.content_mo];
    let mut q_initial_parts = vec![current.content_emb];
    let mut positions: Vec<[f64; 2]> = local_roi.iter().map(|r| r.position).collect();
    let mut taus: Vec<f64> = local_roi.iter().map(|r| r.tau).collect();
    if let Some(a) = &propagated {
        q_pos_time_parts.push(a.pos_time);
        q_content_parts.push(a.content_mo);
        q_initial_parts.push(a.content_emb);
        positions.extend(propagated_queries.iter().map(|q| q.position));
        taus.extend(propagated_queries.iter().map(|q| q.tau));
    }
    let q_pos_time = tape.concat_rows(&q_pos_time_parts)?;
    let q_content = tape.concat_rows(&q_content_parts)?;
    let q_initial = tape.concat_rows(&q_initial_parts)?;
    let n_q = positions.len();

    // Key/value set: the query set plus all memory slots.
    let mut k_pos_time_parts = vec![q_pos_time];
    let mut k_content_parts = vec![q_content];
    for a in &memory_aligned {
        k_pos_time_parts.push(a.pos_time);
        k_content_parts.push(a.content_mo);
    }
    let k_pos_time = tape.concat_rows(&k_pos_time_parts)?;
    let k_content = tape.concat_rows(&k_content_parts)?;

    // Hybrid attention.
    let q_in = tape.add(q_content, q_pos_time)?;
    let k_in = if config.pos_emb_in_keys {
        tape.add(k_content, k_pos_time)?
    } else {
        k_content
    };
    let qh = tape.matmul(q_in, p.hyb_wq)?;
    let kh = tape.matmul(k_in, p.hyb_wk)?;
    let vh = tape.matmul(k_content, p.hyb_wv)?;
    let att = tape.attention(qh, kh, vh)?;
    let mut h = tape.matmul(att, p.hyb_wo)?;

    // Cross attention against the global features.
    if toggles.global_attention && !global_roi.is_empty() {
        let g_items: Vec<MtaItem> = global_roi.iter().map(|r| MtaItem::from_roi(r, ego)).collect();
        let global = mta_align(tape, p, &g_items, t_aligned)?;
        let q2_in = tape.add(h, q_pos_time)?;
        let gk_in = if config.pos_emb_in_keys {
            tape.add(global.content_mo, global.pos_time)?
        } else {
            global.content_mo
        };
        let qc = tape.matmul(q2_in, p.cross_wq)?;
        let kc = tape.matmul(gk_in, p.cross_wk)?;
        let vc = tape.matmul(global.content_mo, p.cross_wv)?;
        let att2 = tape.attention(qc, kc, vc)?;
        h = tape.matmul(att2, p.cross_wo)?;
    }

    // Residual with the initial RoI embeddings.
    let ctx = tape.add(h, q_initial)?;

    // Local center-based head.
    let logits = linear(tape, ctx, p.local_score_w, p.local_score_b)?;
    let reg = linear(tape, ctx, p.local_reg_w, p.local_reg_b)?;

    let logits_v = tape.value(logits).clone();
    let reg_v = tape.value(reg).clone();
    let ctx_v = tape.value(ctx).clone();
    debug_assert_eq!(ctx_v.cols, d);

    let mut detections = Vec::with_capacity(n_q);
    let mut queries_out = Vec::with_capacity(n_q);
    for i in 0..n_q {
        let conf = sigmoid(logits_v.get(i, 0));
        let bbox = decode_box(positions[i], reg_v.row(i));
        detections.push(Detection { bbox, confidence: conf, source: DetectionSource::Agent(ego.id) });
        // Propagated queries were re-estimated at this frame; their stored
        // observation time becomes the aligned time.
        let tau = if i < local_roi.len() { taus[i] } else { t_aligned };
        queries_out.push(Query {
            position: [bbox.center[0], bbox.center[1]],
            context: ctx_v.row(i).to_vec(),
            tau,
            pose: ego.pose,
            velocity: ego.velocity,
            score: conf,
        });
    }

    let mut memory_out = memory.clone();
    memory_out.push(frame_index, queries_out.clone());

    Ok(StepOutput {
        ctx,
        logits,
        reg,
        positions,
        taus,
        detections,
        queries_out,
        memory: memory_out,
    })
}

/// Per-agent input to spatial fusion.
pub struct AgentQueries {
    pub agent_id: u32,
    pub positions: Vec<[f64; 2]>,
    pub confidences: Vec<f64>,
    /// Context matrix node (n x d). Cooperative agents should pass detached
    /// nodes when gradients are restricted to the ego pipeline.
    pub ctx: NodeId,
}

/// Output of the spatial union-pad-attention fusion.
pub struct SpatialOutput {
    /// Fused ego context rows (u x d), one per union location.
    pub ctx: NodeId,
    pub logits: NodeId,
    pub reg: NodeId,
    /// Union cell centers (world frame), row order.
    pub positions: Vec<[f64; 2]>,
    pub detections: Vec<Detection>,
}

/// Grid resolution used to snap query positions for the location union.
pub const UNION_RESOLUTION: f64 = 3.2;

/// Spatial fusion across agents: union of snapped query locations,
/// zero-padding of each agent's query set to the union, then plain scaled
/// dot-product attention with Q = ego padded set and K = V = concatenation
/// of all agents' padded sets. Position embeddings are added to key rows
/// when enabled. The global head decodes detections at union positions.
pub fn spatial_fusion(
    tape: &mut Tape,
    p: &ParamNodes,
    config: &ModelConfig,
    agents: &[AgentQueries],
    ego_id: u32,
) -> Result<SpatialOutput> {
    if agents.is_empty() {
        return Err(Error::InvalidInput("spatial_fusion with zero agents".into()));
    }
    let ego_idx = agents
        .iter()
        .position(|a| a.agent_id == ego_id)
        .ok_or_else(|| Error::InvalidInput(format!("ego agent {ego_id} absent from fusion input")))?;

    let snap = |pos: [f64; 2]| -> (i64, i64) {
        ((pos[0] / UNION_RESOLUTION).floor() as i64, (pos[1] / UNION_RESOLUTION).floor() as i64)
    };
    let mut union: std::collections::BTreeSet<(i64, i64)> = std::collections::BTreeSet::new();
    for a in agents {
        for &pos in &a.positions {
            union.insert(snap(pos));
        }
    }
    let union: Vec<(i64, i64)> = union.into_iter().collect();
    let u = union.len();
    if u == 0 {
        return Err(Error::InvalidInput("spatial_fusion with no query locations".into()));
    }
    let positions: Vec<[f64; 2]> = union
        .iter()
        .map(|&(i, j)| {
            [(i as f64 + 0.5) * UNION_RESOLUTION, (j as f64 + 0.5) * UNION_RESOLUTION]
        })
        .collect();

    // Pad every agent's query set to the union: pick the highest-confidence
    // query per occupied cell, zero rows elsewhere.
    let mut padded: Vec<NodeId> = Vec::with_capacity(agents.len());
    for a in agents {
        let mut best: std::collections::BTreeMap<(i64, i64), usize> = std::collections::BTreeMap::new();
        for (row, &pos) in a.positions.iter().enumerate() {
            let key = snap(pos);
            match best.get(&key) {
                Some(&prev) if a.confidences[prev] >= a.confidences[row] => {}
                _ => {
                    best.insert(key, row);
                }
            }
        }
        let mapping: Vec<Option<usize>> = union.iter().map(|k| best.get(k).copied()).collect();
        padded.push(tape.select_rows(a.ctx, &mapping)?);
    }

    // Position embeddings of the union locations (shared across agents).
    let pe = if config.pos_emb_in_keys {
        let mut pos_data = Vec::with_capacity(u * 2);
        for pp in &positions {
            pos_data.push(pp[0] / POS_NORM[0]);
            pos_data.push(pp[1] / POS_NORM[1]);
        }
        let pos_leaf = tape.leaf(Tensor::from_vec(u, 2, pos_data)?);
        Some(mlp2(tape, pos_leaf, p.pos_w1, p.pos_b1, p.pos_w2, p.pos_b2)?)
    } else {
        None
    };

    let q = padded[ego_idx];
    let keys: Vec<NodeId> = padded
        .iter()
        .map(|&pn| match pe {
            Some(pe) => tape.add(pn, pe),
            None => Ok(pn),
        })
        .collect::<Result<_>>()?;
    let k = tape.concat_rows(&keys)?;
    let v = tape.concat_rows(&padded)?;
    let ctx = tape.attention(q, k, v)?;

    let logits = linear(tape, ctx, p.global_score_w, p.global_score_b)?;
    let reg = linear(tape, ctx, p.global_reg_w, p.global_reg_b)?;

    let logits_v = tape.value(logits).clone();
    let reg_v = tape.value(reg).clone();
    let mut detections = Vec::with_capacity(u);
    for i in 0..u {
        detections.push(Detection {
            bbox: decode_box(positions[i], reg_v.row(i)),
            confidence: sigmoid(logits_v.get(i, 0)),
            source: DetectionSource::Fused,
        });
    }

    Ok(SpatialOutput { ctx, logits, reg, positions, detections })
}

// ---------------------------------------------------------------------------
// Standalone loss functions

/// Focal loss of a probability. `p` must lie strictly inside (0, 1).
pub fn focal_loss(p: f64, y: u8, alpha: f64, gamma: f64) -> Result<f64> {
    if !(p > 0.0 && p < 1.0) {
        return Err(Error::InvalidInput(format!("focal_loss probability {p} outside (0, 1)")));
    }
    Ok(focal_term(p, y as f64, alpha, gamma))
}

/// Smooth-L1 of a residual; `beta` must be positive.
pub fn smooth_l1(x: f64, beta: f64) -> Result<f64> {
    if !(beta > 0.0) {
        return Err(Error::InvalidInput(format!("smooth_l1 beta {beta} must be > 0")));
    }
    Ok(smooth_l1_term(x, beta))
}
