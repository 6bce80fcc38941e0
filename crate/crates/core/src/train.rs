//! Toy-scale training: Adam over the ego branch with a sliding frame
//! window, supervising only the newest frame of each window.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::evalkit::{inject_latency, mean_center_error};
use crate::fusion::{ModelConfig, ModelParams};
use crate::pipeline::{ego_forward, run_coop_agent, CoopOutput, Pipeline, Variant};
use crate::scene::{gt_boxes_at, Frame, Scene};
use crate::tensor::{Tape, Tensor};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub steps: usize,
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub seed: u64,
    /// Frames per training window; the loss is taken on the newest frame.
    pub window: usize,
    /// Latencies (in frames) sampled during training when augmentation is on.
    pub latency_choices: Vec<usize>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            steps: 60,
            lr: 2e-4,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            seed: 0,
            window: 4,
            latency_choices: vec![0, 1, 2],
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.steps == 0 {
            return Err(Error::Config("steps: must be >= 1".into()));
        }
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return Err(Error::Config(format!("lr: must be positive and finite, got {}", self.lr)));
        }
        if self.window == 0 {
            return Err(Error::Config("window: must be >= 1".into()));
        }
        if self.latency_choices.is_empty() {
            return Err(Error::Config("latency_choices: must not be empty".into()));
        }
        Ok(())
    }
}

/// Adam optimizer state, aligned with `ModelParams::named` order.
pub struct Adam {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    t: u64,
    m: Vec<Tensor>,
    v: Vec<Tensor>,
}

impl Adam {
    pub fn new(params: &ModelParams, config: &TrainConfig) -> Self {
        let shapes: Vec<Tensor> =
            params.named().iter().map(|(_, t)| Tensor::zeros(t.rows, t.cols)).collect();
        Adam {
            lr: config.lr,
            beta1: config.beta1,
            beta2: config.beta2,
            eps: config.eps,
            t: 0,
            m: shapes.clone(),
            v: shapes,
        }
    }

    /// One update; `grads` must follow `ModelParams::named` order.
    pub fn step(&mut self, params: &mut ModelParams, grads: &[Tensor]) -> Result<()> {
        let named = params.named_mut();
        if grads.len() != named.len() {
            return Err(Error::InvalidInput(format!(
                "expected {} gradient tensors, got {}",
                named.len(),
                grads.len()
            )));
        }
        self.t += 1;
        let bc1 = 1.0 - self.beta1.powi(self.t as i32);
        let bc2 = 1.0 - self.beta2.powi(self.t as i32);
        for (i, (_, param)) in named.into_iter().enumerate() {
            let g = &grads[i];
            for k in 0..param.data.len() {
                let m = &mut self.m[i].data[k];
                let v = &mut self.v[i].data[k];
                *m = self.beta1 * *m + (1.0 - self.beta1) * g.data[k];
                *v = self.beta2 * *v + (1.0 - self.beta2) * g.data[k] * g.data[k];
                param.data[k] -= self.lr * (*m / bc1) / ((*v / bc2).sqrt() + self.eps);
            }
        }
        Ok(())
    }
}

/// Loss on the newest frame of a window plus gradients for every parameter
/// tensor (named order). Earlier window frames only populate the memory
/// queues; gradients flow exclusively through the ego branch of the last
/// frame.
pub fn window_loss_and_grads(
    params: &ModelParams,
    model: &ModelConfig,
    variant: Variant,
    scene: &Scene,
    window: &[Frame],
) -> Result<(f64, Vec<Tensor>)> {
    let (last, warmup) = window
        .split_last()
        .ok_or_else(|| Error::InvalidInput("empty training window".into()))?;
    let mut pipe = Pipeline::new(params.clone(), model.clone(), variant)?;
    for frame in warmup {
        pipe.process_frame(scene, frame, None)?;
    }
    let gts = gt_boxes_at(scene, last.t_aligned)?;
    let coop: Vec<CoopOutput> = last
        .clouds
        .keys()
        .copied()
        .filter(|&id| id != scene.ego_id)
        .map(|id| {
            let mut memory = pipe.memory(id).clone();
            run_coop_agent(params, model, variant, last, scene, id, &mut memory)
        })
        .collect::<Result<_>>()?;
    let memory = pipe.memory(scene.ego_id).clone();

    let mut tape = Tape::new();
    let nodes = params.nodes(&mut tape);
    let out = ego_forward(
        &mut tape, &nodes, params, model, variant, last, scene, &coop, &memory, Some(&gts),
    )?;
    let loss = out.loss.ok_or_else(|| Error::Verification("training loss missing".into()))?;
    let value = tape.scalar(loss.total);
    let grads = tape.backward(loss.total);
    let per_param: Vec<Tensor> = nodes.named().iter().map(|&(_, id)| grads[id].clone()).collect();
    Ok((value, per_param))
}

#[derive(Debug, Clone)]
pub struct TrainResult {
    pub params: ModelParams,
    pub losses: Vec<f64>,
    /// True when a non-finite loss aborted training; `params` then holds
    /// the last finite state.
    pub diverged: bool,
}

/// Train on a pre-simulated frame sequence. Each step draws a window start
/// and (when the variant allows it) a communication latency, warms the
/// memory queues through the window, and applies one Adam update from the
/// newest frame's loss. Fully deterministic in (config.seed, inputs).
pub fn train_toy(
    scene: &Scene,
    frames: &[Frame],
    model: &ModelConfig,
    variant: Variant,
    config: &TrainConfig,
) -> Result<TrainResult> {
    config.validate()?;
    if frames.len() < config.window {
        return Err(Error::InvalidInput(format!(
            "{} frames cannot fill a window of {}",
            frames.len(),
            config.window
        )));
    }
    let latencies: Vec<usize> = if variant.latency_augmentation() {
        config
            .latency_choices
            .iter()
            .copied()
            .filter(|&k| frames.len() - k >= config.window)
            .collect()
    } else {
        vec![0]
    };
    if latencies.is_empty() {
        return Err(Error::Config("no usable latency choice for this sequence length".into()));
    }
    let lagged: Vec<Vec<Frame>> = latencies
        .iter()
        .map(|&k| inject_latency(frames, scene.ego_id, k))
        .collect::<Result<_>>()?;

    let mut params = ModelParams::init(model, config.seed)?;
    let mut adam = Adam::new(&params, config);
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed ^ 0x5851_f42d);
    let mut losses = Vec::with_capacity(config.steps);
    for _ in 0..config.steps {
        let li = rng.gen_range(0..lagged.len());
        let seq = &lagged[li];
        let start = rng.gen_range(0..=seq.len() - config.window);
        let window = &seq[start..start + config.window];
        let (loss, grads) = window_loss_and_grads(&params, model, variant, scene, window)?;
        if !loss.is_finite() || grads.iter().any(|g| g.data.iter().any(|v| !v.is_finite())) {
            return Ok(TrainResult { params, losses, diverged: true });
        }
        let mut next = params.clone();
        adam.step(&mut next, &grads)?;
        params = next;
        losses.push(loss);
    }
    Ok(TrainResult { params, losses, diverged: false })
}

/// Which detection head to score during evaluation.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum EvalHead {
    /// Ego-only detections out of the temporal fusion head.
    Local,
    /// Cooperative detections out of the spatial fusion head.
    Fused,
}

/// Mean gated center error of one detection head over a frame sequence
/// processed with `latency` injected, averaged across frames.
pub fn eval_center_error(
    params: &ModelParams,
    model: &ModelConfig,
    variant: Variant,
    scene: &Scene,
    frames: &[Frame],
    latency: usize,
    gate: f64,
    head: EvalHead,
) -> Result<f64> {
    let seq = inject_latency(frames, scene.ego_id, latency)?;
    let mut pipe = Pipeline::new(params.clone(), model.clone(), variant)?;
    let mut total = 0.0;
    let mut n = 0usize;
    for frame in &seq {
        let out = pipe.process_frame(scene, frame, None)?;
        let gts: Vec<_> =
            gt_boxes_at(scene, frame.t_aligned)?.into_iter().map(|(_, b)| b).collect();
        if gts.is_empty() {
            continue;
        }
        let dets = match head {
            EvalHead::Local => &out.local_detections,
            EvalHead::Fused => &out.fused_detections,
        };
        total += mean_center_error(dets, &gts, gate)?;
        n += 1;
    }
    if n == 0 {
        return Err(Error::Verification("no frames with ground truth to evaluate".into()));
    }
    Ok(total / n as f64)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::scene::{build_scene, make_async_frame, ScenarioConfig};

    fn toy() -> (Scene, Vec<Frame>, ModelConfig) {
        let scenario = ScenarioConfig {
            duration: 1.0,
            num_agents: 2,
            num_objects: 2,
            seed: 21,
            angular_resolution_deg: 2.0,
            ..ScenarioConfig::default()
        };
        let scene = build_scene(&scenario, scenario.seed).unwrap();
        let frames: Vec<Frame> =
            (0..scene.n_frames()).map(|j| make_async_frame(&scene, j).unwrap()).collect();
        let model = ModelConfig {
            d: 8,
            k_roi_local: 16,
            k_roi_global: 8,
            k_q: 6,
            t_window: 3,
            ..ModelConfig::default()
        };
        (scene, frames, model)
    }

    #[test]
    fn adam_minimizes_simple_objective() {
        // Drive every parameter toward zero with gradient = param value;
        // Adam should shrink the norm monotonically-ish.
        let model = ModelConfig { d: 4, ..ModelConfig::default() };
        let mut params = ModelParams::init(&model, 3).unwrap();
        let config = TrainConfig { lr: 0.05, ..TrainConfig::default() };
        let mut adam = Adam::new(&params, &config);
        let norm = |p: &ModelParams| -> f64 {
            p.named().iter().flat_map(|(_, t)| &t.data).map(|v| v * v).sum()
        };
        let before = norm(&params);
        for _ in 0..50 {
            let grads: Vec<Tensor> = params.named().iter().map(|(_, t)| (*t).clone()).collect();
            adam.step(&mut params, &grads).unwrap();
        }
        assert!(norm(&params) < 0.5 * before);
    }

    #[test]
    fn training_reduces_loss_and_is_deterministic() {
        let (scene, frames, model) = toy();
        let config = TrainConfig { steps: 24, lr: 2e-3, seed: 4, window: 3, ..TrainConfig::default() };
        let a = train_toy(&scene, &frames, &model, Variant::Full, &config).unwrap();
        assert!(!a.diverged);
        assert_eq!(a.losses.len(), config.steps);
        let head: f64 = a.losses[..6].iter().sum::<f64>() / 6.0;
        let tail: f64 = a.losses[config.steps - 6..].iter().sum::<f64>() / 6.0;
        assert!(tail < head, "loss did not decrease: head {head}, tail {tail}");

        let b = train_toy(&scene, &frames, &model, Variant::Full, &config).unwrap();
        assert_eq!(a.losses, b.losses);
        assert_eq!(a.params, b.params);
    }

    #[test]
    fn divergent_training_aborts_with_finite_params() {
        let (scene, frames, model) = toy();
        let config = TrainConfig { steps: 12, lr: 1e9, seed: 4, window: 3, ..TrainConfig::default() };
        let r = train_toy(&scene, &frames, &model, Variant::Full, &config).unwrap();
        for (_, t) in r.params.named() {
            assert!(t.data.iter().all(|v| v.is_finite()));
        }
        if r.diverged {
            assert!(r.losses.len() < config.steps);
        }
    }

    #[test]
    fn eval_center_error_within_gate() {
        let (scene, frames, model) = toy();
        let params = ModelParams::init(&model, 8).unwrap();
        for head in [EvalHead::Local, EvalHead::Fused] {
            let e = eval_center_error(&params, &model, Variant::Full, &scene, &frames, 0, 5.0, head)
                .unwrap();
            assert!((0.0..=5.0).contains(&e));
            let lagged =
                eval_center_error(&params, &model, Variant::Full, &scene, &frames, 2, 5.0, head)
                    .unwrap();
            assert!((0.0..=5.0).contains(&lagged));
        }
    }

    #[test]
    fn invalid_configs_are_rejected() {
        let (scene, frames, model) = toy();
        let bad = TrainConfig { steps: 0, ..TrainConfig::default() };
        assert!(train_toy(&scene, &frames, &model, Variant::Full, &bad).is_err());
        let bad = TrainConfig { window: frames.len() + 1, ..TrainConfig::default() };
        assert!(train_toy(&scene, &frames, &model, Variant::Full, &bad).is_err());
    }
}
