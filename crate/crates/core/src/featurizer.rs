//! Deterministic pillar featurizer: sparse BEV grids from timestamped
//! clouds, coordinate dilation, top-K RoI selection and per-query
//! observation timestamps.
//!
//! Stands in for a learned sparse-convolution backbone: occupied cells get
//! fixed statistics (count, mean offsets, mean height, mean time offset)
//! and a learnable linear embedding downstream turns them into features.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::wrap_angle;
use crate::scene::{DetectionRange, PointCloud};

/// Dimension of the raw per-cell feature vector.
pub const CELL_FEAT_DIM: usize = 5;

/// Time-delta normalizer, s (one nominal scan period), so timing features
/// sit on the same scale as the geometric ones.
pub const TIME_NORM: f64 = 0.1;

/// Sparse 2D cell -> feature map in the capturing agent's frame.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SparseBEVGrid {
    /// Meters per cell.
    pub resolution: f64,
    /// World/sensor coordinates of cell (0, 0)'s lower corner.
    pub origin: [f64; 2],
    pub cells: BTreeMap<(i32, i32), Vec<f64>>,
    pub feat_dim: usize,
}

impl SparseBEVGrid {
    pub fn cell_center(&self, key: (i32, i32)) -> [f64; 2] {
        [
            self.origin[0] + (key.0 as f64 + 0.5) * self.resolution,
            self.origin[1] + (key.1 as f64 + 0.5) * self.resolution,
        ]
    }
}

/// A selected RoI cell: position (cell center), raw feature, importance
/// score and observation timestamp.
#[derive(Debug, Clone, PartialEq)]
pub struct RoIPoint {
    pub position: [f64; 2],
    pub feature: Vec<f64>,
    pub score: f64,
    pub tau: f64,
}

/// Pillar-voxelize a cloud. Each occupied cell's feature is
/// `[normalized count, mean dx, mean dy, mean z, mean (t - t_ref) / TIME_NORM]`,
/// with offsets relative to the cell center. Cells outside the detection
/// range are dropped.
pub fn voxelize(
    cloud: &PointCloud,
    resolution: f64,
    t_ref: f64,
    range: &DetectionRange,
) -> Result<SparseBEVGrid> {
    if !(resolution > 0.0) {
        return Err(Error::InvalidInput(format!("non-positive resolution {resolution}")));
    }
    let mut acc: BTreeMap<(i32, i32), (usize, f64, f64, f64, f64)> = BTreeMap::new();
    for p in &cloud.points {
        if !range.contains(p.x, p.y) {
            continue;
        }
        let i = (p.x / resolution).floor() as i32;
        let j = (p.y / resolution).floor() as i32;
        let e = acc.entry((i, j)).or_insert((0, 0.0, 0.0, 0.0, 0.0));
        e.0 += 1;
        e.1 += p.x;
        e.2 += p.y;
        e.3 += p.z;
        e.4 += p.t - t_ref;
    }
    let mut cells = BTreeMap::new();
    for ((i, j), (n, sx, sy, sz, st)) in acc {
        let nf = n as f64;
        let cx = (i as f64 + 0.5) * resolution;
        let cy = (j as f64 + 0.5) * resolution;
        cells.insert(
            (i, j),
            vec![nf / (nf + 10.0), sx / nf - cx, sy / nf - cy, sz / nf, st / nf / TIME_NORM],
        );
    }
    Ok(SparseBEVGrid { resolution, origin: [0.0, 0.0], cells, feat_dim: CELL_FEAT_DIM })
}

/// Merge cells by floor-dividing coordinates; features of merged cells are
/// averaged, the resolution multiplies by `factor`.
pub fn downsample_grid(g: &SparseBEVGrid, factor: i32) -> Result<SparseBEVGrid> {
    if factor < 1 {
        return Err(Error::InvalidInput(format!("downsample factor {factor} < 1")));
    }
    if factor == 1 {
        return Ok(g.clone());
    }
    let mut acc: BTreeMap<(i32, i32), (usize, Vec<f64>)> = BTreeMap::new();
    for (&(i, j), feat) in &g.cells {
        let key = (i.div_euclid(factor), j.div_euclid(factor));
        let e = acc.entry(key).or_insert_with(|| (0, vec![0.0; g.feat_dim]));
        e.0 += 1;
        for (a, b) in e.1.iter_mut().zip(feat) {
            *a += b;
        }
    }
    let cells = acc
        .into_iter()
        .map(|(k, (n, mut f))| {
            for v in &mut f {
                *v /= n as f64;
            }
            (k, f)
        })
        .collect();
    Ok(SparseBEVGrid {
        resolution: g.resolution * factor as f64,
        origin: g.origin,
        cells,
        feat_dim: g.feat_dim,
    })
}

/// Expand the occupied coordinate set by its 8-neighborhood once per layer
/// (kernel size 3). New cells get zero features; originals are unchanged.
pub fn dilate_grid(g: &SparseBEVGrid, layers: usize) -> SparseBEVGrid {
    let mut cells = g.cells.clone();
    for _ in 0..layers {
        let occupied: Vec<(i32, i32)> = cells.keys().copied().collect();
        for (i, j) in occupied {
            for di in -1..=1 {
                for dj in -1..=1 {
                    cells.entry((i + di, j + dj)).or_insert_with(|| vec![0.0; g.feat_dim]);
                }
            }
        }
    }
    SparseBEVGrid { resolution: g.resolution, origin: g.origin, cells, feat_dim: g.feat_dim }
}

/// Scored top-K selection: the `k` highest-scoring candidates in descending
/// score order, ties broken by ascending (i, j) cell coordinate.
pub fn score_topk(
    candidates: &[((i32, i32), Vec<f64>, f64)],
    k: usize,
) -> Result<Vec<((i32, i32), Vec<f64>, f64)>> {
    if k < 1 {
        return Err(Error::InvalidInput("k must be >= 1".into()));
    }
    let mut idx: Vec<usize> = (0..candidates.len()).collect();
    idx.sort_by(|&a, &b| {
        candidates[b]
            .2
            .total_cmp(&candidates[a].2)
            .then_with(|| candidates[a].0.cmp(&candidates[b].0))
    });
    Ok(idx.into_iter().take(k).map(|i| candidates[i].clone()).collect())
}

/// Azimuth metric used when retrieving query timestamps.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AzimuthMetric {
    /// Circular difference wrapped to [0, pi] (default; seam-safe).
    Wrapped,
    /// Raw |atan2(a) - atan2(b)|, which misbehaves across the +-pi seam.
    Naive,
}

/// Azimuth-sorted index over a cloud for repeated timestamp queries.
pub struct AzimuthIndex {
    /// (azimuth, original point index, timestamp), sorted by azimuth.
    sorted: Vec<(f64, usize, f64)>,
    /// (azimuth, timestamp) in original point order, for the naive metric.
    original: Vec<(f64, f64)>,
}

impl AzimuthIndex {
    pub fn new(cloud: &PointCloud) -> Result<Self> {
        if cloud.points.is_empty() {
            return Err(Error::InvalidInput("cannot index an empty cloud".into()));
        }
        let original: Vec<(f64, f64)> =
            cloud.points.iter().map(|p| (p.y.atan2(p.x), p.t)).collect();
        let mut sorted: Vec<(f64, usize, f64)> =
            original.iter().enumerate().map(|(i, &(az, t))| (az, i, t)).collect();
        sorted.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
        Ok(AzimuthIndex { sorted, original })
    }

    /// Timestamp of the point whose azimuth is closest to the query's.
    /// Ties resolve to the smaller original point index.
    pub fn query(&self, query_xy: [f64; 2], metric: AzimuthMetric) -> f64 {
        let qa = query_xy[1].atan2(query_xy[0]);
        match metric {
            AzimuthMetric::Naive => {
                let mut best = (f64::INFINITY, usize::MAX, 0.0);
                for (i, &(az, t)) in self.original.iter().enumerate() {
                    let d = (qa - az).abs();
                    if d < best.0 {
                        best = (d, i, t);
                    }
                }
                best.2
            }
            AzimuthMetric::Wrapped => {
                // Binary search for the insertion point, then examine the
                // neighbors on the circle (including the wraparound pair).
                let n = self.sorted.len();
                let pos = self.sorted.partition_point(|&(az, _, _)| az < qa);
                let mut best = (f64::INFINITY, usize::MAX, 0.0);
                for cand in [
                    pos.wrapping_sub(1),
                    pos,
                    if pos == 0 { n - 1 } else { usize::MAX },
                    if pos >= n { 0 } else { usize::MAX },
                ] {
                    if cand >= n {
                        continue;
                    }
                    let (az, idx, t) = self.sorted[cand];
                    let d = wrap_angle(qa - az).expect("finite azimuths").abs();
                    if d < best.0 || (d == best.0 && idx < best.1) {
                        best = (d, idx, t);
                    }
                }
                best.2
            }
        }
    }
}

/// Retrieve the observation timestamp for a query position: the timestamp
/// of the point whose azimuth is nearest the query azimuth.
pub fn assign_query_timestamp(
    query_xy: [f64; 2],
    cloud: &PointCloud,
    metric: AzimuthMetric,
) -> Result<f64> {
    Ok(AzimuthIndex::new(cloud)?.query(query_xy, metric))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::scene::TimedPoint;
    use approx::assert_abs_diff_eq;

    fn cloud_of(points: Vec<TimedPoint>) -> PointCloud {
        PointCloud { agent_id: 0, points, tick_start: 0.0, tick_end: 0.1 }
    }

    #[test]
    fn voxelize_examples() {
        let empty = cloud_of(vec![]);
        let g = voxelize(&empty, 0.8, 0.0, &DetectionRange::default()).unwrap();
        assert!(g.cells.is_empty());

        // Three points in one cell: time feature is the normalized mean offset.
        let c = cloud_of(vec![
            TimedPoint { x: 0.1, y: 0.1, z: 0.5, t: 0.09 },
            TimedPoint { x: 0.2, y: 0.2, z: 0.5, t: 0.08 },
            TimedPoint { x: 0.3, y: 0.3, z: 0.5, t: 0.07 },
        ]);
        let g = voxelize(&c, 0.8, 0.1, &DetectionRange::default()).unwrap();
        assert_eq!(g.cells.len(), 1);
        let feat = &g.cells[&(0, 0)];
        assert_abs_diff_eq!(feat[4], -0.02 / TIME_NORM, epsilon = 1e-12);
        assert_abs_diff_eq!(feat[3], 0.5, epsilon = 1e-12);

        // Detection range enforced.
        let far = cloud_of(vec![
            TimedPoint { x: 150.0, y: 0.0, z: 0.0, t: 0.01 },
            TimedPoint { x: 0.0, y: 40.0, z: 0.0, t: 0.01 },
            TimedPoint { x: 1.0, y: 1.0, z: 0.0, t: 0.01 },
        ]);
        let g = voxelize(&far, 0.8, 0.0, &DetectionRange::default()).unwrap();
        assert_eq!(g.cells.len(), 1);

        assert!(voxelize(&empty, 0.0, 0.0, &DetectionRange::default()).is_err());
    }

    #[test]
    fn downsample_examples() {
        let c = cloud_of(vec![
            TimedPoint { x: 0.2, y: 0.2, z: 0.0, t: 0.01 },
            TimedPoint { x: 1.2, y: 1.2, z: 0.0, t: 0.03 },
        ]);
        let g = voxelize(&c, 0.8, 0.0, &DetectionRange::default()).unwrap();
        assert_eq!(g.cells.len(), 2);
        assert_eq!(downsample_grid(&g, 1).unwrap(), g);

        let d = downsample_grid(&g, 2).unwrap();
        assert_eq!(d.cells.len(), 1);
        assert_abs_diff_eq!(d.cells[&(0, 0)][4], 0.02 / TIME_NORM, epsilon = 1e-12);

        let d4 = downsample_grid(&g, 4).unwrap();
        assert_abs_diff_eq!(d4.resolution, 3.2, epsilon = 1e-12);

        assert!(downsample_grid(&g, 0).is_err());
    }

    #[test]
    fn downsample_matches_coarse_voxelization() {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(31);
        for _ in 0..50 {
            let pts: Vec<TimedPoint> = (0..200)
                .map(|_| TimedPoint {
                    x: rng.gen_range(-100.0..100.0),
                    y: rng.gen_range(-30.0..30.0),
                    z: rng.gen_range(-1.0..1.0),
                    t: rng.gen_range(0.0..0.1),
                })
                .collect();
            let c = cloud_of(pts);
            let fine = voxelize(&c, 0.8, 0.0, &DetectionRange::default()).unwrap();
            let down = downsample_grid(&fine, 4).unwrap();
            let coarse = voxelize(&c, 3.2, 0.0, &DetectionRange::default()).unwrap();
            let dk: Vec<_> = down.cells.keys().collect();
            let ck: Vec<_> = coarse.cells.keys().collect();
            assert_eq!(dk, ck);
        }
    }

    #[test]
    fn dilate_examples() {
        let mut cells = BTreeMap::new();
        cells.insert((5, -3), vec![1.0; CELL_FEAT_DIM]);
        let g = SparseBEVGrid { resolution: 0.8, origin: [0.0, 0.0], cells, feat_dim: CELL_FEAT_DIM };

        assert_eq!(dilate_grid(&g, 0), g);
        assert_eq!(dilate_grid(&g, 1).cells.len(), 9);
        assert_eq!(dilate_grid(&g, 3).cells.len(), 49);
        // Original features unchanged, new cells zero.
        let d = dilate_grid(&g, 1);
        assert_eq!(d.cells[&(5, -3)], vec![1.0; CELL_FEAT_DIM]);
        assert_eq!(d.cells[&(6, -3)], vec![0.0; CELL_FEAT_DIM]);
    }

    #[test]
    fn dilate_monotone_and_translation_equivariant() {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(77);
        for _ in 0..20 {
            let mut cells = BTreeMap::new();
            for _ in 0..rng.gen_range(1..20) {
                cells.insert(
                    (rng.gen_range(-20..20), rng.gen_range(-20..20)),
                    vec![rng.gen_range(-1.0..1.0); CELL_FEAT_DIM],
                );
            }
            let g = SparseBEVGrid { resolution: 0.8, origin: [0.0, 0.0], cells: cells.clone(), feat_dim: CELL_FEAT_DIM };
            let d = dilate_grid(&g, 2);
            assert!(g.cells.keys().all(|k| d.cells.contains_key(k)));

            let (ti, tj) = (rng.gen_range(-5..5), rng.gen_range(-5..5));
            let shifted: BTreeMap<(i32, i32), Vec<f64>> =
                cells.iter().map(|(&(i, j), f)| ((i + ti, j + tj), f.clone())).collect();
            let gs = SparseBEVGrid { resolution: 0.8, origin: [0.0, 0.0], cells: shifted, feat_dim: CELL_FEAT_DIM };
            let ds = dilate_grid(&gs, 2);
            let back: BTreeMap<(i32, i32), Vec<f64>> =
                ds.cells.iter().map(|(&(i, j), f)| ((i - ti, j - tj), f.clone())).collect();
            assert_eq!(back, d.cells);
        }
    }

    #[test]
    fn topk_examples() {
        let mk = |coord: (i32, i32), s: f64| (coord, vec![0.0; CELL_FEAT_DIM], s);
        let cands = vec![mk((0, 0), 0.9), mk((0, 1), 0.1), mk((0, 2), 0.5), mk((0, 3), 0.7)];
        let top = score_topk(&cands, 3).unwrap();
        let coords: Vec<(i32, i32)> = top.iter().map(|c| c.0).collect();
        assert_eq!(coords, vec![(0, 0), (0, 3), (0, 2)]);

        // Equal scores: lexicographic coordinate order.
        let tied = vec![mk((2, 0), 0.5), mk((1, 9), 0.5), mk((1, 3), 0.5)];
        let top = score_topk(&tied, 2).unwrap();
        let coords: Vec<(i32, i32)> = top.iter().map(|c| c.0).collect();
        assert_eq!(coords, vec![(1, 3), (1, 9)]);

        // Fewer candidates than k: all returned.
        assert_eq!(score_topk(&tied, 10).unwrap().len(), 3);
        assert!(score_topk(&tied, 0).is_err());
    }

    #[test]
    fn topk_permutation_invariant() {
        use rand::{seq::SliceRandom, Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(5);
        let cands: Vec<((i32, i32), Vec<f64>, f64)> = (0..50)
            .map(|i| ((i % 10, i / 10), vec![0.0; CELL_FEAT_DIM], rng.gen_range(0.0..1.0f64)))
            .collect();
        let base = score_topk(&cands, 7).unwrap();
        for _ in 0..10 {
            let mut shuffled = cands.clone();
            shuffled.shuffle(&mut rng);
            assert_eq!(score_topk(&shuffled, 7).unwrap(), base);
        }
    }

    #[test]
    fn timestamp_examples() {
        let single = cloud_of(vec![TimedPoint { x: 1.0, y: 0.0, z: 0.0, t: 0.02 }]);
        assert_eq!(assign_query_timestamp([5.0, -3.0], &single, AzimuthMetric::Wrapped).unwrap(), 0.02);

        // Points at azimuths 0 and 90 degrees; query at 30 picks the closer.
        let two = cloud_of(vec![
            TimedPoint { x: 1.0, y: 0.0, z: 0.0, t: 0.01 },
            TimedPoint { x: 0.0, y: 1.0, z: 0.0, t: 0.03 },
        ]);
        let q = [30f64.to_radians().cos(), 30f64.to_radians().sin()];
        assert_eq!(assign_query_timestamp(q, &two, AzimuthMetric::Wrapped).unwrap(), 0.01);

        // Across the seam the wrapped metric picks the circularly closer
        // point; the naive metric would wrongly pick the other one.
        let seam = cloud_of(vec![
            TimedPoint { x: (-179f64).to_radians().cos(), y: (-179f64).to_radians().sin(), z: 0.0, t: 0.05 },
            TimedPoint { x: 0.0, y: 1.0, z: 0.0, t: 0.02 },
        ]);
        let q = [179f64.to_radians().cos(), 179f64.to_radians().sin()];
        assert_eq!(assign_query_timestamp(q, &seam, AzimuthMetric::Wrapped).unwrap(), 0.05);
        assert_eq!(assign_query_timestamp(q, &seam, AzimuthMetric::Naive).unwrap(), 0.02);

        let empty = cloud_of(vec![]);
        assert!(assign_query_timestamp([1.0, 0.0], &empty, AzimuthMetric::Wrapped).is_err());
    }

    #[test]
    fn timestamp_matches_brute_force() {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(123);
        for _ in 0..100 {
            let n = rng.gen_range(1..80);
            let pts: Vec<TimedPoint> = (0..n)
                .map(|i| TimedPoint {
                    x: rng.gen_range(-50.0..50.0),
                    y: rng.gen_range(-50.0..50.0),
                    z: 0.0,
                    t: 0.001 * i as f64,
                })
                .collect();
            let cloud = cloud_of(pts);
            let index = AzimuthIndex::new(&cloud).unwrap();
            for _ in 0..50 {
                let q = [rng.gen_range(-50.0..50.0f64), rng.gen_range(-50.0..50.0f64)];
                let got = index.query(q, AzimuthMetric::Wrapped);
                // Independent oracle: exhaustive scan with the wrapped metric.
                let qa = q[1].atan2(q[0]);
                let mut best = (f64::INFINITY, 0.0);
                for p in &cloud.points {
                    let d = wrap_angle(qa - p.y.atan2(p.x)).unwrap().abs();
                    if d < best.0 {
                        best = (d, p.t);
                    }
                }
                assert_eq!(got, best.1);
            }
        }
    }
}
