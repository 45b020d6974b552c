//! Point clouds, symmetry transforms and nearest-neighbour queries.

use std::collections::HashSet;

use nalgebra::{Rotation3, Unit, Vector3};
use serde::{Deserialize, Serialize};

use crate::{Error, Result};

pub type Vec3 = Vector3<f64>;

/// Points with unit normals and their indices in the root shape.
#[derive(Debug, Clone, PartialEq)]
pub struct PointCloud {
    positions: Vec<Vec3>,
    normals: Vec<Vec3>,
    orig_index: Vec<usize>,
}

impl PointCloud {
    /// Builds a cloud, normalizing every normal to unit length. Normals
    /// already unit to within 1e-12 are kept bit for bit.
    pub fn new(positions: Vec<Vec3>, normals: Vec<Vec3>, orig_index: Vec<usize>) -> Result<Self> {
        if positions.len() != normals.len() || positions.len() != orig_index.len() {
            return Err(Error::Invalid(format!(
                "point cloud arrays disagree: {} positions, {} normals, {} indices",
                positions.len(),
                normals.len(),
                orig_index.len()
            )));
        }
        let mut seen = HashSet::with_capacity(orig_index.len());
        if let Some(dup) = orig_index.iter().find(|&&i| !seen.insert(i)) {
            return Err(Error::Invalid(format!("duplicate point index {dup}")));
        }
        let mut unit = Vec::with_capacity(normals.len());
        for (i, n) in normals.iter().enumerate() {
            let len = n.norm();
            if !(len > 1e-12) || !len.is_finite() {
                return Err(Error::Invalid(format!("point {i} has a degenerate normal")));
            }
            unit.push(if (len - 1.0).abs() <= 1e-12 { *n } else { n / len });
        }
        if positions.iter().any(|p| !p.iter().all(|v| v.is_finite())) {
            return Err(Error::Invalid("non-finite point position".into()));
        }
        Ok(PointCloud { positions, normals: unit, orig_index })
    }

    /// Cloud whose original indices are `0..n`.
    pub fn from_points(positions: Vec<Vec3>, normals: Vec<Vec3>) -> Result<Self> {
        let n = positions.len();
        Self::new(positions, normals, (0..n).collect())
    }

    pub fn len(&self) -> usize {
        self.positions.len()
    }

    pub fn is_empty(&self) -> bool {
        self.positions.is_empty()
    }

    pub fn positions(&self) -> &[Vec3] {
        &self.positions
    }

    pub fn normals(&self) -> &[Vec3] {
        &self.normals
    }

    pub fn orig_index(&self) -> &[usize] {
        &self.orig_index
    }

    /// Rows `rows` of this cloud, keeping their original indices.
    pub fn subset(&self, rows: &[usize]) -> PointCloud {
        PointCloud {
            positions: rows.iter().map(|&r| self.positions[r]).collect(),
            normals: rows.iter().map(|&r| self.normals[r]).collect(),
            orig_index: rows.iter().map(|&r| self.orig_index[r]).collect(),
        }
    }

    /// Concatenation of several clouds. Fails if original indices collide.
    pub fn union(clouds: &[&PointCloud]) -> Result<PointCloud> {
        let mut positions = Vec::new();
        let mut normals = Vec::new();
        let mut orig = Vec::new();
        for c in clouds {
            positions.extend_from_slice(&c.positions);
            normals.extend_from_slice(&c.normals);
            orig.extend_from_slice(&c.orig_index);
        }
        PointCloud::new(positions, normals, orig)
    }

    /// Same points with positions replaced (normals and indices kept).
    pub fn with_positions(&self, positions: Vec<Vec3>) -> Result<PointCloud> {
        PointCloud::new(positions, self.normals.clone(), self.orig_index.clone())
    }

    /// Row-major `N x 6` matrix of position and normal channels.
    pub fn features<T: partnet_autodiff::Real>(&self) -> Vec<T> {
        let mut out = Vec::with_capacity(self.len() * 6);
        for (p, n) in self.positions.iter().zip(&self.normals) {
            for v in p.iter().chain(n.iter()) {
                out.push(T::from_f64(*v));
            }
        }
        out
    }

    pub fn centroid(&self) -> Option<Vec3> {
        if self.is_empty() {
            return None;
        }
        let sum = self.positions.iter().fold(Vec3::zeros(), |a, p| a + p);
        Some(sum / self.len() as f64)
    }
}

/// Centers a cloud at its centroid and scales it into the unit ball.
///
/// Returns the normalized cloud with the `center` and `scale` such that
/// `original = normalized * scale + center`. A cloud whose points all
/// coincide keeps scale 1.
pub fn normalize_cloud(cloud: &PointCloud) -> Result<(PointCloud, Vec3, f64)> {
    let center = cloud.centroid().ok_or_else(|| Error::Invalid("empty input".into()))?;
    let centered: Vec<Vec3> = cloud.positions.iter().map(|p| p - center).collect();
    let radius = centered.iter().map(|p| p.norm()).fold(0.0, f64::max);
    let scale = if radius > 0.0 { radius } else { 1.0 };
    let positions = centered.into_iter().map(|p| p / scale).collect();
    let out = PointCloud { positions, normals: cloud.normals.clone(), orig_index: cloud.orig_index.clone() };
    Ok((out, center, scale))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SymmetryKind {
    Reflective,
    Translational,
    Rotational,
}

impl SymmetryKind {
    pub const ALL: [SymmetryKind; 3] = [SymmetryKind::Reflective, SymmetryKind::Translational, SymmetryKind::Rotational];

    pub fn index(self) -> usize {
        match self {
            SymmetryKind::Reflective => 0,
            SymmetryKind::Translational => 1,
            SymmetryKind::Rotational => 2,
        }
    }

    pub fn from_index(i: usize) -> Option<Self> {
        Self::ALL.get(i).copied()
    }
}

/// Symmetry relating a generator part to its copies.
///
/// `direction` is the plane normal (reflective), translation direction
/// (translational) or rotation axis (rotational); `fold` counts copies
/// including the generator.
#[derive(Debug, Clone, PartialEq)]
pub struct SymmetrySpec {
    pub kind: SymmetryKind,
    pub anchor: Vec3,
    pub direction: Vec3,
    pub fold: usize,
    pub step: f64,
}

/// Flips `v` so its first nonzero component is positive.
pub fn canonical_sign(v: Vec3) -> Vec3 {
    match v.iter().find(|c| **c != 0.0) {
        Some(c) if *c < 0.0 => -v,
        _ => v,
    }
}

fn unit(v: Vec3, what: &str) -> Result<Vec3> {
    let n = v.norm();
    if !(n > 1e-12) || !n.is_finite() {
        return Err(Error::Invalid(format!("{what}: zero direction")));
    }
    Ok(v / n)
}

impl SymmetrySpec {
    /// Mirror across the plane through `point` with normal `normal`. The
    /// anchor is stored as the plane point closest to the origin.
    pub fn reflective(point: Vec3, normal: Vec3) -> Result<Self> {
        let n = canonical_sign(unit(normal, "reflective")?);
        Ok(SymmetrySpec { kind: SymmetryKind::Reflective, anchor: n * point.dot(&n), direction: n, fold: 2, step: 0.0 })
    }

    /// `fold` equal turns about the axis through `point`. The anchor is
    /// stored as the axis point closest to the origin.
    pub fn rotational(point: Vec3, axis: Vec3, fold: usize) -> Result<Self> {
        let d = unit(axis, "rotational")?;
        let spec = SymmetrySpec { kind: SymmetryKind::Rotational, anchor: point - d * point.dot(&d), direction: d, fold, step: 0.0 };
        spec.validate()?;
        Ok(spec)
    }

    pub fn translational(anchor: Vec3, direction: Vec3, step: f64, fold: usize) -> Result<Self> {
        let d = unit(direction, "translational")?;
        let spec = SymmetrySpec { kind: SymmetryKind::Translational, anchor, direction: d, fold, step };
        spec.validate()?;
        Ok(spec)
    }

    pub fn validate(&self) -> Result<()> {
        let len = self.direction.norm();
        if !((len - 1.0).abs() <= 1e-6) {
            return Err(Error::Invalid(format!("symmetry direction has length {len}, expected 1")));
        }
        if self.fold < 2 {
            return Err(Error::Invalid(format!("symmetry fold {} < 2", self.fold)));
        }
        if !self.anchor.iter().all(|v| v.is_finite()) || !self.step.is_finite() {
            return Err(Error::Invalid("non-finite symmetry parameters".into()));
        }
        match self.kind {
            SymmetryKind::Reflective if self.fold != 2 => {
                Err(Error::Invalid(format!("reflective symmetry must have fold 2, got {}", self.fold)))
            }
            SymmetryKind::Translational if !(self.step > 0.0) => {
                Err(Error::Invalid(format!("translational step must be positive, got {}", self.step)))
            }
            _ => Ok(()),
        }
    }

    /// Linear part and translation of the `k`-th copy transform:
    /// `p' = L p + t`.
    pub fn transform(&self, k: usize) -> (nalgebra::Matrix3<f64>, Vec3) {
        let d = self.direction;
        match self.kind {
            SymmetryKind::Reflective => {
                if k % 2 == 0 {
                    return (nalgebra::Matrix3::identity(), Vec3::zeros());
                }
                let l = nalgebra::Matrix3::identity() - 2.0 * d * d.transpose();
                (l, 2.0 * d * self.anchor.dot(&d))
            }
            SymmetryKind::Rotational => {
                let angle = std::f64::consts::TAU * k as f64 / self.fold as f64;
                let r = Rotation3::from_axis_angle(&Unit::new_normalize(d), angle).into_inner();
                (r, self.anchor - r * self.anchor)
            }
            SymmetryKind::Translational => (nalgebra::Matrix3::identity(), d * (k as f64 * self.step)),
        }
    }

    pub fn apply(&self, k: usize, cloud: &PointCloud) -> PointCloud {
        let (l, t) = self.transform(k);
        PointCloud {
            positions: cloud.positions.iter().map(|p| l * p + t).collect(),
            normals: cloud.normals.iter().map(|n| (l * n).normalize()).collect(),
            orig_index: cloud.orig_index.clone(),
        }
    }
}

/// The generator followed by its `fold - 1` transformed copies.
pub fn apply_symmetry(generator: &PointCloud, spec: &SymmetrySpec) -> Result<Vec<PointCloud>> {
    if generator.is_empty() {
        return Err(Error::Invalid("empty generator".into()));
    }
    spec.validate()?;
    let mut out = Vec::with_capacity(spec.fold);
    out.push(generator.clone());
    for k in 1..spec.fold {
        out.push(spec.apply(k, generator));
    }
    Ok(out)
}

/// Exact nearest-neighbour search over a fixed point set.
///
/// Points are sorted along x; a query scans outward from its insertion
/// position and stops once the x gap alone exceeds the best distance.
/// Ties resolve to the smallest source index.
pub struct NearestIndex {
    sorted: Vec<(f64, usize)>,
    points: Vec<Vec3>,
}

impl NearestIndex {
    pub fn new(points: &[Vec3]) -> Self {
        let mut sorted: Vec<(f64, usize)> = points.iter().enumerate().map(|(i, p)| (p.x, i)).collect();
        sorted.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
        NearestIndex { sorted, points: points.to_vec() }
    }

    /// Index of the nearest point and its squared distance.
    pub fn nearest(&self, q: &Vec3) -> Option<(usize, f64)> {
        if self.sorted.is_empty() {
            return None;
        }
        let start = self.sorted.partition_point(|(x, _)| *x < q.x);
        let mut best = (usize::MAX, f64::INFINITY);
        let consider = |i: usize, best: &mut (usize, f64)| {
            let d2 = (self.points[i] - q).norm_squared();
            if d2 < best.1 || (d2 == best.1 && i < best.0) {
                *best = (i, d2);
            }
        };
        for &(x, i) in &self.sorted[start..] {
            let dx = x - q.x;
            if dx * dx > best.1 {
                break;
            }
            consider(i, &mut best);
        }
        for &(x, i) in self.sorted[..start].iter().rev() {
            let dx = q.x - x;
            if dx * dx > best.1 {
                break;
            }
            consider(i, &mut best);
        }
        Some(best)
    }
}

/// Minimum Euclidean distance over all cross pairs.
pub fn min_set_distance(a: &PointCloud, b: &PointCloud) -> Result<f64> {
    if a.is_empty() || b.is_empty() {
        return Err(Error::Invalid("min_set_distance: empty input".into()));
    }
    let (small, large) = if a.len() <= b.len() { (a, b) } else { (b, a) };
    let index = NearestIndex::new(large.positions());
    let best = small
        .positions()
        .iter()
        .map(|p| index.nearest(p).map_or(f64::INFINITY, |(_, d2)| d2))
        .fold(f64::INFINITY, f64::min);
    Ok(best.sqrt())
}

/// Labels each target point with the label of its nearest source point.
pub fn nn_label_transfer<L: Clone>(targets: &PointCloud, source: &PointCloud, labels: &[L]) -> Result<Vec<L>> {
    if source.is_empty() {
        return Err(Error::Invalid("nn_label_transfer: empty source".into()));
    }
    if labels.len() != source.len() {
        return Err(Error::Invalid(format!(
            "nn_label_transfer: {} labels for {} source points",
            labels.len(),
            source.len()
        )));
    }
    let index = NearestIndex::new(source.positions());
    Ok(targets
        .positions()
        .iter()
        .map(|p| labels[index.nearest(p).expect("non-empty").0].clone())
        .collect())
}

/// Mean distance from each point of `a` to its nearest point in `b`.
pub fn mean_nn_residual(a: &PointCloud, b: &PointCloud) -> Result<f64> {
    if a.is_empty() || b.is_empty() {
        return Err(Error::Invalid("mean_nn_residual: empty input".into()));
    }
    let index = NearestIndex::new(b.positions());
    let sum: f64 = a.positions().iter().map(|p| index.nearest(p).expect("non-empty").1.sqrt()).sum();
    Ok(sum / a.len() as f64)
}

/// Largest nearest-neighbour distance from `a` into `b`.
pub fn max_nn_residual(a: &PointCloud, b: &PointCloud) -> Result<f64> {
    if a.is_empty() || b.is_empty() {
        return Err(Error::Invalid("max_nn_residual: empty input".into()));
    }
    let index = NearestIndex::new(b.positions());
    Ok(a.positions().iter().map(|p| index.nearest(p).expect("non-empty").1.sqrt()).fold(0.0, f64::max))
}
