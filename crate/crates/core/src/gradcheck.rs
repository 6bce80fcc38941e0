//! Gradient verification: analytic backward passes versus central finite
//! differences, both per primitive op and end to end through the full
//! detection pipeline.

use crate::error::{Error, Result};
use crate::fusion::{ModelConfig, ModelParams};
use crate::pipeline::{ego_forward, run_coop_agent, CoopOutput, Pipeline, Variant};
use crate::scene::{build_scene, gt_boxes_at, make_async_frame, ScenarioConfig};
use crate::tensor::{OpKind, Tape, Tensor};

/// Central-difference step.
pub const FD_EPS: f64 = 1e-5;
/// Relative-error tolerance for a passing check.
pub const GRAD_TOL: f64 = 1e-4;

/// Relative error with an absolute floor so near-zero gradients compare
/// sanely: |a - n| / max(|a|, |n|, 1e-8).
pub fn rel_err(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(1e-8)
}

/// Worst relative error for one parameter tensor.
#[derive(Debug, Clone)]
pub struct ParamGradCheck {
    pub name: &'static str,
    pub entries: usize,
    pub max_rel_err: f64,
}

/// Full-pipeline gradient check report.
#[derive(Debug, Clone)]
pub struct GradReport {
    pub params: Vec<ParamGradCheck>,
    pub max_rel_err: f64,
    pub tol: f64,
}

impl GradReport {
    pub fn passed(&self) -> bool {
        self.max_rel_err < self.tol
    }
}

impl std::fmt::Display for GradReport {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        for p in &self.params {
            writeln!(f, "{:<16} entries {:>4}  max rel err {:.3e}", p.name, p.entries, p.max_rel_err)?;
        }
        write!(
            f,
            "overall max rel err {:.3e} (tol {:.1e}): {}",
            self.max_rel_err,
            self.tol,
            if self.passed() { "ok" } else { "FAIL" }
        )
    }
}

fn gradcheck_scenario(seed: u64) -> ScenarioConfig {
    ScenarioConfig {
        duration: 0.6,
        num_agents: 2,
        num_objects: 2,
        seed,
        angular_resolution_deg: 4.0,
        ..ScenarioConfig::default()
    }
}

fn gradcheck_model() -> ModelConfig {
    ModelConfig { d: 4, k_roi_local: 10, k_roi_global: 6, k_q: 4, t_window: 3, ..ModelConfig::default() }
}

/// Verify the gradient of every scalar in every parameter tensor against
/// central differences of the frame loss.
///
/// The check replays one frame of a warmed-up toy scene. Memory queues and
/// cooperative contexts are frozen at their pre-frame values so that the
/// analytic tape and the finite differences differentiate exactly the same
/// function (both paths are detached by construction during training too).
pub fn check_all(variant: Variant, seed: u64, tol: f64) -> Result<GradReport> {
    let scenario = gradcheck_scenario(seed);
    let model = gradcheck_model();
    let scene = build_scene(&scenario, scenario.seed)?;
    let params = ModelParams::init(&model, seed ^ 0x9e37_79b9)?;

    // Warm up two frames so the memory queue and propagated queries are
    // populated, then freeze all non-ego state for frame 2.
    let mut pipe = Pipeline::new(params.clone(), model.clone(), variant)?;
    for j in 0..2 {
        let frame = make_async_frame(&scene, j)?;
        pipe.process_frame(&scene, &frame, None)?;
    }
    let frame = make_async_frame(&scene, 2)?;
    let gts = gt_boxes_at(&scene, frame.t_aligned)?;
    let coop: Vec<CoopOutput> = frame
        .clouds
        .keys()
        .copied()
        .filter(|&id| id != scene.ego_id)
        .map(|id| {
            let mut memory = pipe.memory(id).clone();
            run_coop_agent(&params, &model, variant, &frame, &scene, id, &mut memory)
        })
        .collect::<Result<_>>()?;
    let memory = pipe.memory(scene.ego_id).clone();

    let loss_of = |p: &ModelParams| -> Result<f64> {
        let mut tape = Tape::new();
        let nodes = p.nodes(&mut tape);
        let out = ego_forward(
            &mut tape, &nodes, p, &model, variant, &frame, &scene, &coop, &memory, Some(&gts),
        )?;
        let loss = out.loss.ok_or_else(|| Error::Verification("loss missing".into()))?;
        Ok(tape.scalar(loss.total))
    };

    // Analytic gradients.
    let mut tape = Tape::new();
    let nodes = params.nodes(&mut tape);
    let out = ego_forward(
        &mut tape, &nodes, &params, &model, variant, &frame, &scene, &coop, &memory, Some(&gts),
    )?;
    let loss = out.loss.ok_or_else(|| Error::Verification("loss missing".into()))?;
    let grads = tape.backward(loss.total);

    let mut report = GradReport { params: Vec::new(), max_rel_err: 0.0, tol };
    for (name, node) in nodes.named() {
        let analytic: Tensor = grads[node].clone();
        let mut max_err: f64 = 0.0;
        for idx in 0..analytic.data.len() {
            let numeric = {
                let mut plus = params.clone();
                let mut minus = params.clone();
                for (n, t) in plus.named_mut() {
                    if n == name {
                        t.data[idx] += FD_EPS;
                    }
                }
                for (n, t) in minus.named_mut() {
                    if n == name {
                        t.data[idx] -= FD_EPS;
                    }
                }
                (loss_of(&plus)? - loss_of(&minus)?) / (2.0 * FD_EPS)
            };
            max_err = max_err.max(rel_err(analytic.data[idx], numeric));
        }
        report.max_rel_err = report.max_rel_err.max(max_err);
        report.params.push(ParamGradCheck { name, entries: analytic.data.len(), max_rel_err: max_err });
    }
    Ok(report)
}

/// Build a synthetic graph that exercises every differentiable op, and
/// return the worst relative error between the backward pass (optionally
/// corrupted for one op kind) and central differences over all leaf inputs.
pub fn op_graph_max_rel_err(seed: u64, corrupt: Option<(OpKind, f64)>) -> Result<f64> {
    use rand::{Rng, SeedableRng};
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
    let mut rand_t = |rows: usize, cols: usize| {
        Tensor::from_vec(rows, cols, (0..rows * cols).map(|_| rng.gen_range(-0.9..0.9)).collect())
            .expect("shape")
    };
    let a0 = rand_t(3, 4);
    let b0 = rand_t(4, 3);
    let r0 = rand_t(1, 3);
    let w0 = rand_t(3, 1);

    let eval = |a: &Tensor, b: &Tensor, r: &Tensor, w: &Tensor, corrupt: Option<(OpKind, f64)>|
        -> Result<(f64, Vec<Tensor>)> {
        let mut tape = Tape::new();
        tape.corrupt_backward = corrupt;
        let a = tape.leaf(a.clone());
        let b = tape.leaf(b.clone());
        let r = tape.leaf(r.clone());
        let w = tape.leaf(w.clone());

        let x1 = tape.matmul(a, b)?;
        let x2 = tape.add_row(x1, r)?;
        let x3 = tape.tanh(x2);
        let x4 = tape.sigmoid(x2);
        let x5 = tape.mul(x3, x4)?;
        let x6 = tape.sub(x5, x1)?;
        let x7 = tape.affine(x6, 1.3, 0.2);
        let x8 = tape.layer_norm_rows(x7, 1e-5)?;
        let x9 = tape.softmax_rows(x8);
        let x10 = tape.concat_rows(&[x9, x8])?;
        let x11 = tape.select_rows(x10, &[Some(1), None, Some(4)])?;
        let x12 = tape.transpose_node(x11);
        let x13 = tape.attention(x11, x10, x10)?;
        let x14 = tape.add(x13, x12)?;
        let logits = tape.matmul(x14, w)?;
        let focal = tape.focal_loss(logits, &[1.0, 0.0, 1.0], 0.25, 2.0)?;
        let sl = tape.smooth_l1(x14, 1.0)?;
        // Not x9: softmax rows sum to 1, which would zero this op's gradient.
        let s = tape.sum(x3);
        let t1 = tape.add(focal, sl)?;
        let total = tape.add(t1, s)?;
        let value = tape.scalar(total);
        let grads = tape.backward(total);
        Ok((value, vec![grads[a].clone(), grads[b].clone(), grads[r].clone(), grads[w].clone()]))
    };

    let (_, grads) = eval(&a0, &b0, &r0, &w0, corrupt)?;
    let mut max_err: f64 = 0.0;
    let leaves: [&Tensor; 4] = [&a0, &b0, &r0, &w0];
    for (li, leaf) in leaves.iter().enumerate() {
        for idx in 0..leaf.data.len() {
            let perturb = |delta: f64| -> Result<f64> {
                let mut tensors = [a0.clone(), b0.clone(), r0.clone(), w0.clone()];
                tensors[li].data[idx] += delta;
                let (v, _) = eval(&tensors[0], &tensors[1], &tensors[2], &tensors[3], None)?;
                Ok(v)
            };
            let numeric = (perturb(FD_EPS)? - perturb(-FD_EPS)?) / (2.0 * FD_EPS);
            max_err = max_err.max(rel_err(grads[li].data[idx], numeric));
        }
    }
    Ok(max_err)
}

/// Op kinds whose backward logic carries a corruptible implementation
/// (everything that propagates a gradient).
pub const CORRUPTIBLE_OPS: [OpKind; 16] = [
    OpKind::Transpose,
    OpKind::MatMul,
    OpKind::Add,
    OpKind::AddRow,
    OpKind::Sub,
    OpKind::Mul,
    OpKind::Affine,
    OpKind::Tanh,
    OpKind::Sigmoid,
    OpKind::SoftmaxRows,
    OpKind::LayerNormRows,
    OpKind::ConcatRows,
    OpKind::SelectRows,
    OpKind::Sum,
    OpKind::FocalLoss,
    OpKind::SmoothL1,
];

/// True when corrupting the backward of `op` by `factor` is caught by the
/// finite-difference comparison.
pub fn mutation_detected(op: OpKind, factor: f64, seed: u64) -> Result<bool> {
    Ok(op_graph_max_rel_err(seed, Some((op, factor)))? >= GRAD_TOL)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn op_graph_clean_passes() {
        for seed in 0..3 {
            let err = op_graph_max_rel_err(seed, None).unwrap();
            assert!(err < GRAD_TOL, "seed {seed}: max rel err {err}");
        }
    }

    #[test]
    fn op_graph_detects_mutations() {
        for op in CORRUPTIBLE_OPS {
            assert!(
                mutation_detected(op, 1.05, 7).unwrap(),
                "corrupting {op:?} backward went undetected"
            );
        }
    }

    #[test]
    fn full_pipeline_gradients_match() {
        let report = check_all(Variant::Full, 31, GRAD_TOL).unwrap();
        assert!(report.passed(), "{report}");
        // Every parameter tensor must appear in the report.
        let params = ModelParams::init(&gradcheck_model(), 0).unwrap();
        assert_eq!(report.params.len(), params.named().len());
    }
}
