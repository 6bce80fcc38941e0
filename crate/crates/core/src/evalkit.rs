//! Evaluation: greedy IoU matching, average precision, center error, and
//! communication-latency injection.

use crate::error::{Error, Result};
use crate::fusion::Detection;
use crate::geometry::{rotated_iou_bev, BBox};
use crate::scene::Frame;

/// Detection indices sorted for evaluation: confidence descending, ties by
/// original index ascending.
fn eval_order(dets: &[Detection]) -> Vec<usize> {
    let mut order: Vec<usize> = (0..dets.len()).collect();
    order.sort_by(|&a, &b| dets[b].confidence.total_cmp(&dets[a].confidence).then(a.cmp(&b)));
    order
}

/// Greedy matching: walk detections in confidence order; each claims the
/// unmatched ground-truth box of highest IoU, provided it reaches `iou_thr`.
/// Returns the matched gt index per detection (original indexing).
pub fn match_greedy(dets: &[Detection], gts: &[BBox], iou_thr: f64) -> Result<Vec<Option<usize>>> {
    if !(0.0..=1.0).contains(&iou_thr) {
        return Err(Error::InvalidInput(format!("iou threshold {iou_thr} outside [0, 1]")));
    }
    let mut matched = vec![None; dets.len()];
    let mut taken = vec![false; gts.len()];
    for &di in &eval_order(dets) {
        let mut best: Option<(f64, usize)> = None;
        for (gi, gt) in gts.iter().enumerate() {
            if taken[gi] {
                continue;
            }
            let iou = rotated_iou_bev(&dets[di].bbox, gt)?;
            if iou >= iou_thr && best.map_or(true, |(b, _)| iou > b) {
                best = Some((iou, gi));
            }
        }
        if let Some((_, gi)) = best {
            taken[gi] = true;
            matched[di] = Some(gi);
        }
    }
    Ok(matched)
}

/// All-point average precision from per-detection TP flags (confidence
/// order) and the ground-truth count: area under the precision envelope
/// sampled at the recall of each true positive.
pub fn average_precision(tp_flags_in_conf_order: &[bool], n_gt: usize) -> f64 {
    if n_gt == 0 {
        return 0.0;
    }
    let mut precisions: Vec<f64> = Vec::new();
    let mut recalls: Vec<f64> = Vec::new();
    let (mut tp, mut fp) = (0usize, 0usize);
    for &is_tp in tp_flags_in_conf_order {
        if is_tp {
            tp += 1;
        } else {
            fp += 1;
        }
        precisions.push(tp as f64 / (tp + fp) as f64);
        recalls.push(tp as f64 / n_gt as f64);
    }
    // Precision envelope: monotone non-increasing from the right.
    for i in (0..precisions.len().saturating_sub(1)).rev() {
        precisions[i] = precisions[i].max(precisions[i + 1]);
    }
    let mut ap = 0.0;
    let mut prev_recall = 0.0;
    for (p, r) in precisions.iter().zip(&recalls) {
        if *r > prev_recall {
            ap += (r - prev_recall) * p;
            prev_recall = *r;
        }
    }
    ap
}

#[derive(Debug, Clone, PartialEq)]
pub struct EvalResult {
    pub n_dets: usize,
    pub n_gts: usize,
    pub tp: usize,
    pub fp: usize,
    pub fn_: usize,
    pub ap: f64,
    /// Mean BEV center distance over matched pairs; NaN-free (0 when no
    /// matches exist).
    pub matched_center_err: f64,
}

/// Evaluate one detection set against one ground-truth set.
pub fn evaluate(dets: &[Detection], gts: &[BBox], iou_thr: f64) -> Result<EvalResult> {
    let matched = match_greedy(dets, gts, iou_thr)?;
    let order = eval_order(dets);
    let flags: Vec<bool> = order.iter().map(|&i| matched[i].is_some()).collect();
    let tp = flags.iter().filter(|&&f| f).count();
    let mut err_sum = 0.0;
    for (di, m) in matched.iter().enumerate() {
        if let Some(gi) = m {
            let d = &dets[di].bbox.center;
            let g = &gts[*gi].center;
            err_sum += ((d[0] - g[0]).powi(2) + (d[1] - g[1]).powi(2)).sqrt();
        }
    }
    Ok(EvalResult {
        n_dets: dets.len(),
        n_gts: gts.len(),
        tp,
        fp: dets.len() - tp,
        fn_: gts.len() - tp,
        ap: average_precision(&flags, gts.len()),
        matched_center_err: if tp > 0 { err_sum / tp as f64 } else { 0.0 },
    })
}

/// Graded localization error: greedy distance matching. All (detection,
/// ground truth) pairs within `gate` meters are claimed closest-first
/// (one-to-one); every unmatched ground truth contributes the full gate
/// penalty. Returns the mean over ground truths (0 when there are none).
pub fn mean_center_error(dets: &[Detection], gts: &[BBox], gate: f64) -> Result<f64> {
    if !(gate > 0.0) {
        return Err(Error::InvalidInput(format!("gate {gate} must be > 0")));
    }
    if gts.is_empty() {
        return Ok(0.0);
    }
    let mut pairs: Vec<(f64, usize, usize)> = Vec::new();
    for (di, det) in dets.iter().enumerate() {
        let c = &det.bbox.center;
        for (gi, gt) in gts.iter().enumerate() {
            let d = ((c[0] - gt.center[0]).powi(2) + (c[1] - gt.center[1]).powi(2)).sqrt();
            if d <= gate {
                pairs.push((d, di, gi));
            }
        }
    }
    pairs.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)).then(a.2.cmp(&b.2)));
    let mut dist = vec![gate; gts.len()];
    let mut det_taken = vec![false; dets.len()];
    let mut gt_taken = vec![false; gts.len()];
    for (d, di, gi) in pairs {
        if det_taken[di] || gt_taken[gi] {
            continue;
        }
        det_taken[di] = true;
        gt_taken[gi] = true;
        dist[gi] = d;
    }
    Ok(dist.iter().sum::<f64>() / gts.len() as f64)
}

/// Inject a communication latency of `k` frames: the ego stream is
/// untouched, while every cooperative agent's cloud and state are replaced
/// by those from `k` frames earlier, original timestamps preserved. The
/// first `k` frames (with no old-enough cooperative data) are dropped.
pub fn inject_latency(frames: &[Frame], ego_id: u32, k: usize) -> Result<Vec<Frame>> {
    if k >= frames.len() && !frames.is_empty() {
        return Err(Error::InvalidInput(format!(
            "latency {k} frames leaves no frames out of {}",
            frames.len()
        )));
    }
    let mut out = Vec::with_capacity(frames.len() - k);
    for j in k..frames.len() {
        let mut frame = frames[j].clone();
        if k > 0 {
            let old = &frames[j - k];
            let coop_ids: Vec<u32> =
                frame.clouds.keys().copied().filter(|&id| id != ego_id).collect();
            for id in coop_ids {
                match (old.clouds.get(&id), old.states.get(&id)) {
                    (Some(cloud), Some(state)) => {
                        frame.clouds.insert(id, cloud.clone());
                        frame.states.insert(id, state.clone());
                    }
                    _ => {
                        frame.clouds.remove(&id);
                        frame.states.remove(&id);
                    }
                }
            }
        }
        out.push(frame);
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::fusion::DetectionSource;
    use approx::assert_abs_diff_eq;

    fn det(x: f64, y: f64, conf: f64) -> Detection {
        Detection {
            bbox: BBox::new([x, y, 0.8], [4.0, 2.0, 1.6], 0.0).unwrap(),
            confidence: conf,
            source: DetectionSource::Fused,
        }
    }

    fn gt(x: f64, y: f64) -> BBox {
        BBox::new([x, y, 0.8], [4.0, 2.0, 1.6], 0.0).unwrap()
    }

    #[test]
    fn perfect_detections_score_ap_one() {
        let gts = vec![gt(0.0, 0.0), gt(10.0, 0.0), gt(20.0, 5.0)];
        let dets: Vec<Detection> =
            gts.iter().enumerate().map(|(i, g)| det(g.center[0], g.center[1], 0.9 - 0.1 * i as f64)).collect();
        let r = evaluate(&dets, &gts, 0.5).unwrap();
        assert_eq!((r.tp, r.fp, r.fn_), (3, 0, 0));
        assert_abs_diff_eq!(r.ap, 1.0, epsilon = 1e-12);
        assert_abs_diff_eq!(r.matched_center_err, 0.0, epsilon = 1e-12);
    }

    #[test]
    fn half_recall_scores_half_ap() {
        // One perfect detection, two ground truths: precision 1 at recall
        // 0.5, nothing beyond.
        let gts = vec![gt(0.0, 0.0), gt(50.0, 0.0)];
        let dets = vec![det(0.0, 0.0, 0.9)];
        let r = evaluate(&dets, &gts, 0.5).unwrap();
        assert_abs_diff_eq!(r.ap, 0.5, epsilon = 1e-12);
        assert_eq!((r.tp, r.fp, r.fn_), (1, 0, 1));
    }

    #[test]
    fn greedy_matching_prefers_confident_detections() {
        // Both detections overlap the single gt; the confident one claims it.
        let gts = vec![gt(0.0, 0.0)];
        let dets = vec![det(0.5, 0.0, 0.3), det(0.2, 0.0, 0.8)];
        let m = match_greedy(&dets, &gts, 0.3).unwrap();
        assert_eq!(m, vec![None, Some(0)]);
        // An FP before a TP in confidence order dents AP below 1.
        let dets = vec![det(100.0, 0.0, 0.9), det(0.0, 0.0, 0.5)];
        let r = evaluate(&dets, &gts, 0.5).unwrap();
        assert_abs_diff_eq!(r.ap, 0.5, epsilon = 1e-12);
    }

    #[test]
    fn center_error_gates_and_penalizes() {
        let gts = vec![gt(0.0, 0.0), gt(100.0, 0.0)];
        let dets = vec![det(1.0, 0.0, 0.9)];
        // One gt matched at 1 m, the other takes the full 5 m penalty.
        let e = mean_center_error(&dets, &gts, 5.0).unwrap();
        assert_abs_diff_eq!(e, 3.0, epsilon = 1e-12);
        // No ground truth: zero.
        assert_eq!(mean_center_error(&dets, &[], 5.0).unwrap(), 0.0);
        assert!(mean_center_error(&dets, &gts, 0.0).is_err());
    }

    #[test]
    fn latency_injection_shifts_coop_streams() {
        use crate::scene::{build_scene, make_async_frame, ScenarioConfig};
        let config = ScenarioConfig {
            duration: 1.0,
            num_agents: 2,
            num_objects: 1,
            seed: 5,
            angular_resolution_deg: 2.0,
            ..ScenarioConfig::default()
        };
        let scene = build_scene(&config, config.seed).unwrap();
        let frames: Vec<Frame> = (0..5).map(|j| make_async_frame(&scene, j).unwrap()).collect();
        let ego = scene.ego_id;
        let coop: u32 = *frames[0].clouds.keys().find(|&&id| id != ego).unwrap();

        // k = 0 is the identity.
        let same = inject_latency(&frames, ego, 0).unwrap();
        assert_eq!(same.len(), frames.len());
        assert_eq!(same[2].clouds[&coop].points, frames[2].clouds[&coop].points);

        let lagged = inject_latency(&frames, ego, 2).unwrap();
        assert_eq!(lagged.len(), 3);
        // Ego stream untouched, coop stream from two frames earlier with
        // original (old) timestamps.
        assert_eq!(lagged[0].clouds[&ego].points, frames[2].clouds[&ego].points);
        assert_eq!(lagged[0].clouds[&coop].points, frames[0].clouds[&coop].points);
        assert_eq!(lagged[0].clouds[&coop].tick_start, frames[0].clouds[&coop].tick_start);
        assert_eq!(lagged[0].t_aligned, frames[2].t_aligned);

        assert!(inject_latency(&frames, ego, 5).is_err());
    }
}
