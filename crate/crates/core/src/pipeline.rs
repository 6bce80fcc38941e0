//! End-to-end per-frame processing: point clouds to detections and losses.
//!
//! Each agent's scan is transformed into the world frame, pillar-voxelized
//! at two scales, scored and pruned to RoI query sets, and pushed through
//! the temporal decoder. Cooperative agents run on scratch tapes so that
//! gradients only flow through the ego branch; their fused contexts enter
//! the ego graph as constants before spatial fusion.

use std::collections::BTreeMap;
use std::str::FromStr;

use crate::error::{Error, Result};
use crate::featurizer::{
    dilate_grid, downsample_grid, score_topk, voxelize, AzimuthMetric, RoIPoint, CELL_FEAT_DIM,
};
use crate::fusion::{
    linear, spatial_fusion, temp_fusion_step, AgentQueries, Detection, FusionToggles, MemoryQueue,
    ModelConfig, ModelParams, ParamNodes, TimestampMode, REG_DIM,
};
use crate::fusion::encode_box_target;
use crate::geometry::{transform_point, BBox};
use crate::scene::{AgentState, Frame, PointCloud, Scene, TimedPoint};
use crate::tensor::{NodeId, Tape, Tensor};

/// Fine BEV resolution for the local query grid, meters.
pub const LOCAL_RESOLUTION: f64 = 0.8;
/// Coarse grid is this factor coarser (3.2 m).
pub const GLOBAL_FACTOR: i32 = 4;
/// Dilation layers applied to the occupied cell set.
pub const DILATE_LAYERS: usize = 3;

pub const FOCAL_ALPHA: f64 = 0.25;
pub const FOCAL_GAMMA: f64 = 2.0;
pub const SMOOTH_L1_BETA: f64 = 1.0;

/// Ablation variants of the full model.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Variant {
    Full,
    NoTempFusion,
    FramewiseTimestamps,
    NoLatencyAugmentation,
    NoDilation,
    NoRoiRegression,
    NoGlobalAttention,
}

impl Variant {
    pub const ALL: [Variant; 7] = [
        Variant::Full,
        Variant::NoTempFusion,
        Variant::FramewiseTimestamps,
        Variant::NoLatencyAugmentation,
        Variant::NoDilation,
        Variant::NoRoiRegression,
        Variant::NoGlobalAttention,
    ];

    pub fn toggles(&self) -> FusionToggles {
        FusionToggles {
            temp_fusion: *self != Variant::NoTempFusion,
            global_attention: *self != Variant::NoGlobalAttention,
        }
    }

    pub fn dilate_layers(&self) -> usize {
        if *self == Variant::NoDilation {
            0
        } else {
            DILATE_LAYERS
        }
    }

    pub fn timestamp_mode(&self, base: TimestampMode) -> TimestampMode {
        if *self == Variant::FramewiseTimestamps {
            TimestampMode::Framewise
        } else {
            base
        }
    }

    pub fn latency_augmentation(&self) -> bool {
        *self != Variant::NoLatencyAugmentation
    }

    pub fn local_regression(&self) -> bool {
        *self != Variant::NoRoiRegression
    }
}

impl std::fmt::Display for Variant {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        let s = match self {
            Variant::Full => "full",
            Variant::NoTempFusion => "no-temp-fusion",
            Variant::FramewiseTimestamps => "framewise-timestamps",
            Variant::NoLatencyAugmentation => "no-latency-augmentation",
            Variant::NoDilation => "no-dilation",
            Variant::NoRoiRegression => "no-roi-regression",
            Variant::NoGlobalAttention => "no-global-attention",
        };
        f.write_str(s)
    }
}

impl FromStr for Variant {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "full" => Ok(Variant::Full),
            "no-temp-fusion" => Ok(Variant::NoTempFusion),
            "framewise-timestamps" => Ok(Variant::FramewiseTimestamps),
            "no-latency-augmentation" => Ok(Variant::NoLatencyAugmentation),
            "no-dilation" => Ok(Variant::NoDilation),
            "no-roi-regression" => Ok(Variant::NoRoiRegression),
            "no-global-attention" => Ok(Variant::NoGlobalAttention),
            other => Err(Error::Config(format!(
                "unknown variant {other:?}; expected one of full, no-temp-fusion, \
                 framewise-timestamps, no-latency-augmentation, no-dilation, \
                 no-roi-regression, no-global-attention"
            ))),
        }
    }
}

/// RoI extraction result for one agent and frame.
pub struct RoiExtract {
    pub local: Vec<RoIPoint>,
    pub global: Vec<RoIPoint>,
    /// All local-grid cell features (n x CELL_FEAT_DIM), for the scorer loss.
    pub cell_feats: Tensor,
    /// World-frame cell centers matching `cell_feats` rows.
    pub cell_centers: Vec<[f64; 2]>,
}

fn apply_timestamp_mode(cloud: &PointCloud, mode: TimestampMode) -> PointCloud {
    match mode {
        TimestampMode::Pointwise => cloud.clone(),
        TimestampMode::Framewise => {
            let mut c = cloud.clone();
            for p in &mut c.points {
                p.t = c.tick_start;
            }
            c
        }
    }
}

/// Transform a sensor-frame cloud into the world frame using the agent's
/// pose at its tick start. Timestamps are preserved.
pub fn world_cloud(cloud: &PointCloud, state: &AgentState) -> PointCloud {
    let points = cloud
        .points
        .iter()
        .map(|p| {
            let w = transform_point(&state.pose, [p.x, p.y, p.z]);
            TimedPoint { x: w[0], y: w[1], z: w[2], t: p.t }
        })
        .collect();
    PointCloud { agent_id: cloud.agent_id, points, ..*cloud }
}

fn roi_logit(params: &ModelParams, feat: &[f64]) -> f64 {
    let mut z = params.roi_b.data[0];
    for (f, w) in feat.iter().zip(&params.roi_w.data) {
        z += f * w;
    }
    z
}

fn sigmoid(z: f64) -> f64 {
    1.0 / (1.0 + (-z).exp())
}

/// Voxelize, dilate, score and prune an agent's scan into local and global
/// RoI query sets, with per-query timestamps retrieved by nearest azimuth.
pub fn extract_rois(
    params: &ModelParams,
    config: &ModelConfig,
    variant: Variant,
    cloud: &PointCloud,
    state: &AgentState,
    scene: &Scene,
    t_aligned: f64,
) -> Result<RoiExtract> {
    let mode = variant.timestamp_mode(config.timestamp_mode);
    let sensor = apply_timestamp_mode(cloud, mode);
    if sensor.points.is_empty() {
        return Err(Error::InvalidInput(format!(
            "agent {} produced an empty scan",
            cloud.agent_id
        )));
    }
    let world = world_cloud(&sensor, state);
    let vox = voxelize(&world, LOCAL_RESOLUTION, t_aligned, &scene.range)?;
    if vox.cells.is_empty() {
        return Err(Error::InvalidInput(format!(
            "agent {} has no points inside the detection range",
            cloud.agent_id
        )));
    }
    let layers = variant.dilate_layers();
    let local_grid = dilate_grid(&vox, layers);
    let global_grid = dilate_grid(&downsample_grid(&vox, GLOBAL_FACTOR)?, layers.min(1));

    let metric = if config.eq1_wrap { AzimuthMetric::Wrapped } else { AzimuthMetric::Naive };
    let inv = state.pose.inverse();
    let index = crate::featurizer::AzimuthIndex::new(&sensor)?;
    let tau_of = |center: [f64; 2]| {
        let local = transform_point(&inv, [center[0], center[1], 0.0]);
        index.query([local[0], local[1]], metric)
    };

    let select = |grid: &crate::featurizer::SparseBEVGrid, k: usize| -> Result<Vec<RoIPoint>> {
        let candidates: Vec<((i32, i32), Vec<f64>, f64)> = grid
            .cells
            .iter()
            .map(|(&key, feat)| (key, feat.clone(), roi_logit(params, feat)))
            .collect();
        let top = score_topk(&candidates, k)?;
        Ok(top
            .into_iter()
            .map(|(key, feature, logit)| {
                let position = grid.cell_center(key);
                RoIPoint { position, feature, score: sigmoid(logit), tau: tau_of(position) }
            })
            .collect())
    };

    let local = select(&local_grid, config.k_roi_local)?;
    let global = select(&global_grid, config.k_roi_global)?;

    let n = local_grid.cells.len();
    let mut cell_feats = Vec::with_capacity(n * CELL_FEAT_DIM);
    let mut cell_centers = Vec::with_capacity(n);
    for (&key, feat) in &local_grid.cells {
        cell_feats.extend_from_slice(feat);
        cell_centers.push(local_grid.cell_center(key));
    }
    Ok(RoiExtract {
        local,
        global,
        cell_feats: Tensor::from_vec(n, CELL_FEAT_DIM, cell_feats)?,
        cell_centers,
    })
}

/// Value-level output of a cooperative agent's branch.
pub struct CoopOutput {
    pub agent_id: u32,
    pub positions: Vec<[f64; 2]>,
    pub confidences: Vec<f64>,
    pub ctx: Tensor,
    pub detections: Vec<Detection>,
}

/// Run one cooperative agent on a scratch tape. Advances `memory`.
pub fn run_coop_agent(
    params: &ModelParams,
    config: &ModelConfig,
    variant: Variant,
    frame: &Frame,
    scene: &Scene,
    agent_id: u32,
    memory: &mut MemoryQueue,
) -> Result<CoopOutput> {
    let cloud = frame
        .clouds
        .get(&agent_id)
        .ok_or_else(|| Error::InvalidInput(format!("frame has no cloud for agent {agent_id}")))?;
    let state = frame
        .states
        .get(&agent_id)
        .ok_or_else(|| Error::InvalidInput(format!("frame has no state for agent {agent_id}")))?;
    let rois = extract_rois(params, config, variant, cloud, state, scene, frame.t_aligned)?;

    let mut tape = Tape::new();
    let p = params.nodes(&mut tape);
    let step = temp_fusion_step(
        &mut tape,
        &p,
        config,
        &variant.toggles(),
        &rois.local,
        &rois.global,
        memory,
        state,
        frame.index,
        frame.t_aligned,
    )?;
    *memory = step.memory.clone();
    // Spatial fusion consumes the query input positions, not the refined
    // centers; refined centers only propagate through the memory queue.
    Ok(CoopOutput {
        agent_id,
        positions: step.positions.clone(),
        confidences: step.detections.iter().map(|d| d.confidence).collect(),
        ctx: tape.value(step.ctx).clone(),
        detections: step.detections,
    })
}

/// Loss terms built over the ego graph.
pub struct LossNodes {
    pub total: NodeId,
    pub roi_focal: f64,
    pub local_focal: f64,
    pub local_reg: f64,
    pub global_focal: f64,
    pub global_reg: f64,
}

/// Output of the differentiable ego-branch forward pass.
pub struct EgoOutput {
    pub local_detections: Vec<Detection>,
    pub fused_detections: Vec<Detection>,
    pub memory: MemoryQueue,
    pub loss: Option<LossNodes>,
}

/// Training match radius, meters. Generous on purpose: a cell observed
/// early in the sweep sits a full period of object motion away from the
/// aligned ground truth, and those large-offset cells are exactly the ones
/// the regression head must learn to correct.
pub const MATCH_RADIUS: f64 = 4.0;

fn match_gt<'a>(pos: [f64; 2], gts: &'a [(u32, BBox)]) -> Option<&'a BBox> {
    let mut best: Option<(f64, &BBox)> = None;
    for (_, b) in gts {
        let d = ((pos[0] - b.center[0]).powi(2) + (pos[1] - b.center[1]).powi(2)).sqrt();
        if d <= MATCH_RADIUS && best.map_or(true, |(bd, _)| d < bd) {
            best = Some((d, b));
        }
    }
    best.map(|(_, b)| b)
}

fn head_losses(
    tape: &mut Tape,
    logits: NodeId,
    reg: Option<NodeId>,
    positions: &[[f64; 2]],
    gts: &[(u32, BBox)],
) -> Result<(NodeId, Option<NodeId>)> {
    let labels: Vec<f64> =
        positions.iter().map(|&p| if match_gt(p, gts).is_some() { 1.0 } else { 0.0 }).collect();
    let focal = tape.focal_loss(logits, &labels, FOCAL_ALPHA, FOCAL_GAMMA)?;
    let reg_loss = match reg {
        Some(reg) => {
            let mut rows: Vec<Option<usize>> = Vec::new();
            let mut targets: Vec<f64> = Vec::new();
            for (i, &p) in positions.iter().enumerate() {
                if let Some(gt) = match_gt(p, gts) {
                    rows.push(Some(i));
                    targets.extend_from_slice(&encode_box_target(gt, p));
                }
            }
            if rows.is_empty() {
                None
            } else {
                let sel = tape.select_rows(reg, &rows)?;
                let tgt = tape.leaf(Tensor::from_vec(rows.len(), REG_DIM, targets)?);
                let diff = tape.sub(sel, tgt)?;
                Some(tape.smooth_l1(diff, SMOOTH_L1_BETA)?)
            }
        }
        None => None,
    };
    Ok((focal, reg_loss))
}

/// Differentiable forward pass of the ego branch for one frame.
///
/// Cooperative contexts enter as constants; `memory` is read, not written
/// (the updated queue is returned), so the same pre-frame state can be
/// replayed under perturbed parameters for gradient checking.
#[allow(clippy::too_many_arguments)]
pub fn ego_forward(
    tape: &mut Tape,
    p: &ParamNodes,
    params: &ModelParams,
    config: &ModelConfig,
    variant: Variant,
    frame: &Frame,
    scene: &Scene,
    coop: &[CoopOutput],
    memory: &MemoryQueue,
    gts: Option<&[(u32, BBox)]>,
) -> Result<EgoOutput> {
    let ego_id = scene.ego_id;
    let cloud = frame
        .clouds
        .get(&ego_id)
        .ok_or_else(|| Error::InvalidInput(format!("frame has no cloud for ego agent {ego_id}")))?;
    let state = frame
        .states
        .get(&ego_id)
        .ok_or_else(|| Error::InvalidInput(format!("frame has no state for ego agent {ego_id}")))?;
    let rois = extract_rois(params, config, variant, cloud, state, scene, frame.t_aligned)?;

    let step = temp_fusion_step(
        tape,
        p,
        config,
        &variant.toggles(),
        &rois.local,
        &rois.global,
        memory,
        state,
        frame.index,
        frame.t_aligned,
    )?;

    let mut agents = vec![AgentQueries {
        agent_id: ego_id,
        positions: step.positions.clone(),
        confidences: step.detections.iter().map(|d| d.confidence).collect(),
        ctx: step.ctx,
    }];
    for c in coop {
        let ctx = tape.leaf(c.ctx.clone());
        agents.push(AgentQueries {
            agent_id: c.agent_id,
            positions: c.positions.clone(),
            confidences: c.confidences.clone(),
            ctx,
        });
    }
    let spatial = spatial_fusion(tape, p, config, &agents, ego_id)?;

    let loss = match gts {
        None => None,
        Some(gts) => {
            // RoI scorer over every local-grid cell.
            let feats = tape.leaf(rois.cell_feats.clone());
            let cell_logits = linear(tape, feats, p.roi_w, p.roi_b)?;
            let cell_labels: Vec<f64> = rois
                .cell_centers
                .iter()
                .map(|&c| if match_gt(c, gts).is_some() { 1.0 } else { 0.0 })
                .collect();
            let roi_focal = tape.focal_loss(cell_logits, &cell_labels, FOCAL_ALPHA, FOCAL_GAMMA)?;

            let local_reg_node = variant.local_regression().then_some(step.reg);
            let (local_focal, local_reg) =
                head_losses(tape, step.logits, local_reg_node, &step.positions, gts)?;
            let (global_focal, global_reg) =
                head_losses(tape, spatial.logits, Some(spatial.reg), &spatial.positions, gts)?;

            let mut total = tape.add(roi_focal, local_focal)?;
            total = tape.add(total, global_focal)?;
            if let Some(lr) = local_reg {
                total = tape.add(total, lr)?;
            }
            if let Some(gr) = global_reg {
                total = tape.add(total, gr)?;
            }
            Some(LossNodes {
                total,
                roi_focal: tape.scalar(roi_focal),
                local_focal: tape.scalar(local_focal),
                local_reg: local_reg.map(|n| tape.scalar(n)).unwrap_or(0.0),
                global_focal: tape.scalar(global_focal),
                global_reg: global_reg.map(|n| tape.scalar(n)).unwrap_or(0.0),
            })
        }
    };

    Ok(EgoOutput {
        local_detections: step.detections,
        fused_detections: spatial.detections,
        memory: step.memory,
        loss,
    })
}

/// Detections and loss of one fully processed frame.
pub struct FrameOutput {
    pub frame_index: usize,
    pub local_detections: Vec<Detection>,
    pub coop_detections: BTreeMap<u32, Vec<Detection>>,
    pub fused_detections: Vec<Detection>,
    pub loss: Option<f64>,
}

/// Stateful frame-by-frame runner holding per-agent memory queues.
pub struct Pipeline {
    pub params: ModelParams,
    pub config: ModelConfig,
    pub variant: Variant,
    memories: BTreeMap<u32, MemoryQueue>,
}

impl Pipeline {
    pub fn new(params: ModelParams, config: ModelConfig, variant: Variant) -> Result<Self> {
        config.validate()?;
        Ok(Pipeline { params, config, variant, memories: BTreeMap::new() })
    }

    pub fn reset(&mut self) {
        self.memories.clear();
    }

    pub fn memory(&mut self, agent_id: u32) -> &mut MemoryQueue {
        let (t, k) = (self.config.t_window, self.config.k_q);
        self.memories.entry(agent_id).or_insert_with(|| MemoryQueue::new(t, k))
    }

    /// Process one frame: cooperative branches on scratch tapes, ego branch
    /// with optional loss. Advances all memory queues.
    pub fn process_frame(
        &mut self,
        scene: &Scene,
        frame: &Frame,
        gts: Option<&[(u32, BBox)]>,
    ) -> Result<FrameOutput> {
        let coop_ids: Vec<u32> =
            frame.clouds.keys().copied().filter(|&id| id != scene.ego_id).collect();
        let mut coop = Vec::with_capacity(coop_ids.len());
        let mut coop_detections = BTreeMap::new();
        for id in coop_ids {
            let mut memory = self.memory(id).clone();
            let out = run_coop_agent(
                &self.params, &self.config, self.variant, frame, scene, id, &mut memory,
            )?;
            *self.memory(id) = memory;
            coop_detections.insert(id, out.detections.clone());
            coop.push(out);
        }

        let ego_memory = self.memory(scene.ego_id).clone();
        let mut tape = Tape::new();
        let p = self.params.nodes(&mut tape);
        let out = ego_forward(
            &mut tape,
            &p,
            &self.params,
            &self.config,
            self.variant,
            frame,
            scene,
            &coop,
            &ego_memory,
            gts,
        )?;
        *self.memory(scene.ego_id) = out.memory.clone();
        Ok(FrameOutput {
            frame_index: frame.index,
            local_detections: out.local_detections,
            coop_detections,
            fused_detections: out.fused_detections,
            loss: out.loss.as_ref().map(|l| tape.scalar(l.total)),
        })
    }
}
