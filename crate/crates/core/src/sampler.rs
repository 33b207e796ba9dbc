//! Deterministic geometric preprocessing: bounding-box filtering, voxel-hash
//! pool capping, farthest point sampling and the per-candidate descriptor.

use std::collections::BTreeMap;

use crate::error::{Error, Result};
use crate::scene::{Aabb, Frame, GaussianPrimitive, Vec3};

/// Pool cap for full-size scenes.
pub const FULL_SCALE_CAP: usize = 16384;
/// Desk-scale default pool cap.
pub const DEFAULT_CAP: usize = 2048;
pub const FEATURE_EPS: f64 = 1e-8;
pub const FEATURE_DIM: usize = 6;

/// Bounded candidate set for one frame. Candidates keep their original
/// frame index and are stored in strictly increasing index order.
#[derive(Clone, Debug, PartialEq)]
pub struct CandidatePool {
    pub source_frame: usize,
    pub candidates: Vec<(usize, GaussianPrimitive)>,
    pub bbox: Aabb,
    pub cap: usize,
}

impl CandidatePool {
    /// Filters `frame` to `bbox` and voxel-caps the survivors to `cap`.
    pub fn build(frame: &Frame, bbox: Aabb, cap: usize, initial_voxel: f64) -> Result<Self> {
        bbox.validate()?;
        if cap == 0 {
            return Err(Error::arg("pool cap must be >= 1"));
        }
        let inside = filter_bbox(frame, &bbox);
        let points: Vec<(usize, Vec3)> =
            inside.iter().map(|&i| (i, frame.primitives[i].center)).collect();
        let kept = voxel_cap(&points, cap, initial_voxel)?;
        Ok(CandidatePool {
            source_frame: frame.index,
            candidates: kept.into_iter().map(|i| (i, frame.primitives[i])).collect(),
            bbox,
            cap,
        })
    }

    pub fn len(&self) -> usize {
        self.candidates.len()
    }

    pub fn is_empty(&self) -> bool {
        self.candidates.is_empty()
    }

    pub fn original_indices(&self) -> Vec<usize> {
        self.candidates.iter().map(|(i, _)| *i).collect()
    }

    /// Centers tagged with their pool position (0..len), the indexing used by
    /// the policy and the teacher.
    pub fn local_centers(&self) -> Vec<(usize, Vec3)> {
        self.candidates
            .iter()
            .enumerate()
            .map(|(k, (_, p))| (k, p.center))
            .collect()
    }

    pub fn primitives_at(&self, local: &[usize]) -> Vec<GaussianPrimitive> {
        local.iter().map(|&k| self.candidates[k].1).collect()
    }
}

/// Original indices of primitives whose centers lie in the closed box.
pub fn filter_bbox(frame: &Frame, bbox: &Aabb) -> Vec<usize> {
    frame
        .primitives
        .iter()
        .enumerate()
        .filter(|(_, p)| bbox.contains(&p.center))
        .map(|(i, _)| i)
        .collect()
}

fn dist2(a: &Vec3, b: &Vec3) -> f64 {
    let dx = a[0] - b[0];
    let dy = a[1] - b[1];
    let dz = a[2] - b[2];
    dx * dx + dy * dy + dz * dz
}

/// Caps an indexed point set to at most `cap` points.
///
/// Under the cap the input indices are returned unchanged (sorted). Above it,
/// points are hashed into voxels of edge `initial_voxel` anchored at the
/// componentwise minimum; each occupied voxel keeps the member nearest the
/// member centroid (ties to the lowest index). The edge doubles until the
/// representative count fits. Output is sorted by original index.
pub fn voxel_cap(points: &[(usize, Vec3)], cap: usize, initial_voxel: f64) -> Result<Vec<usize>> {
    if cap == 0 {
        return Err(Error::arg("cap must be >= 1"));
    }
    if !(initial_voxel.is_finite() && initial_voxel > 0.0) {
        return Err(Error::arg(format!("initial voxel {initial_voxel} must be > 0")));
    }
    let mut sorted: Vec<(usize, Vec3)> = points.to_vec();
    sorted.sort_by_key(|(i, _)| *i);
    if sorted.len() <= cap {
        return Ok(sorted.into_iter().map(|(i, _)| i).collect());
    }
    let mut origin = [f64::INFINITY; 3];
    for (_, p) in &sorted {
        for a in 0..3 {
            origin[a] = origin[a].min(p[a]);
        }
    }
    let mut voxel = initial_voxel;
    loop {
        let mut cells: BTreeMap<[i64; 3], Vec<usize>> = BTreeMap::new();
        for (k, (_, p)) in sorted.iter().enumerate() {
            let key = [
                ((p[0] - origin[0]) / voxel).floor() as i64,
                ((p[1] - origin[1]) / voxel).floor() as i64,
                ((p[2] - origin[2]) / voxel).floor() as i64,
            ];
            cells.entry(key).or_default().push(k);
        }
        if cells.len() <= cap {
            let mut reps: Vec<usize> = cells
                .values()
                .map(|members| {
                    let mut c = [0.0; 3];
                    for &k in members {
                        for a in 0..3 {
                            c[a] += sorted[k].1[a];
                        }
                    }
                    let n = members.len() as f64;
                    let c = [c[0] / n, c[1] / n, c[2] / n];
                    // members are in increasing index order, so strict `<` keeps the lowest on ties
                    let mut best = members[0];
                    let mut best_d = dist2(&sorted[best].1, &c);
                    for &k in &members[1..] {
                        let d = dist2(&sorted[k].1, &c);
                        if d < best_d {
                            best = k;
                            best_d = d;
                        }
                    }
                    sorted[best].0
                })
                .collect();
            reps.sort_unstable();
            return Ok(reps);
        }
        voxel *= 2.0;
    }
}

/// Greedy farthest point sampling.
///
/// Starts at the point with the lowest original index, then repeatedly adds
/// the point with the largest distance to the selected set (ties to the
/// lowest original index). Returns original indices in selection order.
pub fn fps(points: &[(usize, Vec3)], k: usize) -> Result<Vec<usize>> {
    if k == 0 || k > points.len() {
        return Err(Error::arg(format!(
            "fps needs 1 <= k <= {}, got {k}",
            points.len()
        )));
    }
    let mut sorted: Vec<(usize, Vec3)> = points.to_vec();
    sorted.sort_by_key(|(i, _)| *i);
    let n = sorted.len();
    let mut min_d = vec![f64::INFINITY; n];
    let mut taken = vec![false; n];
    let mut out = Vec::with_capacity(k);
    let mut cur = 0usize;
    for _ in 0..k {
        taken[cur] = true;
        out.push(sorted[cur].0);
        let c = sorted[cur].1;
        let mut next = usize::MAX;
        let mut next_d = f64::NEG_INFINITY;
        for j in 0..n {
            if taken[j] {
                continue;
            }
            let d = dist2(&sorted[j].1, &c);
            if d < min_d[j] {
                min_d[j] = d;
            }
            if min_d[j] > next_d {
                next_d = min_d[j];
                next = j;
            }
        }
        cur = next;
        if cur == usize::MAX {
            break;
        }
    }
    Ok(out)
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct FeatureDescriptor {
    pub coords_norm: Vec3,
    pub opacity: f64,
    pub log_mean_scale: f64,
    pub dist_norm: f64,
}

impl FeatureDescriptor {
    pub fn to_array(&self) -> [f64; FEATURE_DIM] {
        [
            self.coords_norm[0],
            self.coords_norm[1],
            self.coords_norm[2],
            self.opacity,
            self.log_mean_scale,
            self.dist_norm,
        ]
    }
}

pub fn features(pool: &CandidatePool) -> Result<Vec<FeatureDescriptor>> {
    if pool.is_empty() {
        return Err(Error::arg("features of an empty pool"));
    }
    let ext = pool.bbox.extent();
    let n = pool.len() as f64;
    let mut centroid = [0.0; 3];
    for (_, p) in &pool.candidates {
        for a in 0..3 {
            centroid[a] += p.center[a];
        }
    }
    let centroid = [centroid[0] / n, centroid[1] / n, centroid[2] / n];
    let dists: Vec<f64> = pool
        .candidates
        .iter()
        .map(|(_, p)| dist2(&p.center, &centroid).sqrt())
        .collect();
    let max_d = dists.iter().cloned().fold(0.0, f64::max);
    Ok(pool
        .candidates
        .iter()
        .zip(&dists)
        .map(|((_, p), &d)| {
            let mut coords_norm = [0.0; 3];
            for a in 0..3 {
                coords_norm[a] = (p.center[a] - pool.bbox.min[a]) / ext[a];
            }
            let mean_scale = (p.scale[0] + p.scale[1] + p.scale[2]) / 3.0;
            FeatureDescriptor {
                coords_norm,
                opacity: p.opacity,
                log_mean_scale: (mean_scale + FEATURE_EPS).ln(),
                dist_norm: if max_d > 0.0 { d / max_d } else { 0.0 },
            }
        })
        .collect())
}

/// Row-major `len x 6` descriptor matrix.
pub fn feature_matrix(pool: &CandidatePool) -> Result<Vec<f64>> {
    Ok(features(pool)?.iter().flat_map(|f| f.to_array()).collect())
}
