//! Procedural chairs, tables and ladders with exact part labels and
//! symmetry groups, plus augmentation, resampling and dataset files.

use std::collections::BTreeMap;
use std::fmt;
use std::path::Path;
use std::str::FromStr;

use rand::seq::{IndexedRandom, SliceRandom};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::geom::{apply_symmetry, normalize_cloud, NearestIndex, PointCloud, SymmetryKind, SymmetrySpec, Vec3};
use crate::hierarchy::{build_hierarchy, parts_from_labels, BuildOptions, Hierarchy, SymmetryGroup};
use crate::{Error, Result};

pub const DEFAULT_POINTS: usize = 512;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Category {
    Chair,
    Table,
    Ladder,
}

impl Category {
    pub const ALL: [Category; 3] = [Category::Chair, Category::Table, Category::Ladder];

    pub fn name(self) -> &'static str {
        match self {
            Category::Chair => "chair",
            Category::Table => "table",
            Category::Ladder => "ladder",
        }
    }

    /// Semantic classes that occur in this category.
    pub fn classes(self) -> &'static [SemanticClass] {
        use SemanticClass::*;
        match self {
            Category::Chair => &[Seat, Back, Leg, Arm],
            Category::Table => &[Top, Leg],
            Category::Ladder => &[Rail, Rung],
        }
    }
}

impl fmt::Display for Category {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Category {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Category::ALL
            .into_iter()
            .find(|c| c.name() == s)
            .ok_or_else(|| Error::Invalid(format!("unknown category '{s}' (expected chair, table or ladder)")))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SemanticClass {
    Seat,
    Back,
    Leg,
    Arm,
    Top,
    Rail,
    Rung,
}

impl SemanticClass {
    pub const ALL: [SemanticClass; 7] = [
        SemanticClass::Seat,
        SemanticClass::Back,
        SemanticClass::Leg,
        SemanticClass::Arm,
        SemanticClass::Top,
        SemanticClass::Rail,
        SemanticClass::Rung,
    ];

    pub fn index(self) -> usize {
        Self::ALL.iter().position(|c| *c == self).expect("listed")
    }

    pub fn from_index(i: usize) -> Option<Self> {
        Self::ALL.get(i).copied()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct PartInfo {
    pub id: usize,
    pub class: SemanticClass,
}

/// One labeled shape. `cloud.orig_index()` is `0..N`.
#[derive(Debug, Clone, PartialEq)]
pub struct ShapeRecord {
    pub category: Category,
    pub seed: u64,
    pub cloud: PointCloud,
    pub instance_label: Vec<usize>,
    pub parts: Vec<PartInfo>,
    pub groups: Vec<SymmetryGroup>,
}

impl ShapeRecord {
    pub fn len(&self) -> usize {
        self.cloud.len()
    }

    pub fn is_empty(&self) -> bool {
        self.cloud.is_empty()
    }

    pub fn part_class(&self, id: usize) -> Option<SemanticClass> {
        self.parts.iter().find(|p| p.id == id).map(|p| p.class)
    }

    /// Per-point semantic class ids.
    pub fn semantic_labels(&self) -> Vec<usize> {
        let by_id: BTreeMap<usize, usize> = self.parts.iter().map(|p| (p.id, p.class.index())).collect();
        self.instance_label.iter().map(|l| by_id[l]).collect()
    }

    /// Ground-truth hierarchy built from the recorded groups.
    pub fn hierarchy(&self, opts: &BuildOptions) -> Result<Hierarchy> {
        let parts = parts_from_labels(&self.cloud, &self.instance_label)?;
        build_hierarchy(&format!("{}-{}", self.category, self.seed), &parts, &self.groups, opts)
    }

    pub fn check(&self) -> Result<()> {
        if self.instance_label.len() != self.cloud.len() {
            return Err(Error::Invalid("instance labels do not cover the points".into()));
        }
        let ids: Vec<usize> = self.parts.iter().map(|p| p.id).collect();
        if ids != (0..ids.len()).collect::<Vec<_>>() {
            return Err(Error::Invalid("part ids must be 0..P in order".into()));
        }
        if let Some(l) = self.instance_label.iter().find(|&&l| l >= ids.len()) {
            return Err(Error::Invalid(format!("point labeled with unknown part {l}")));
        }
        for g in &self.groups {
            if let Some(m) = g.members.iter().find(|&&m| m >= ids.len()) {
                return Err(Error::Invalid(format!("group references unknown part {m}")));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone)]
enum Primitive {
    Cuboid { center: Vec3, half: Vec3 },
    /// Closed cylinder from `base` along unit `axis`.
    Cylinder { base: Vec3, axis: Vec3, radius: f64, height: f64 },
}

fn orthonormal(axis: Vec3) -> (Vec3, Vec3) {
    let helper = if axis.x.abs() < 0.9 { Vec3::x() } else { Vec3::y() };
    let u = axis.cross(&helper).normalize();
    (u, axis.cross(&u))
}

impl Primitive {
    fn pieces(&self) -> Vec<f64> {
        match self {
            Primitive::Cuboid { half, .. } => {
                let (a, b, c) = (half.x, half.y, half.z);
                let (yz, xz, xy) = (4.0 * b * c, 4.0 * a * c, 4.0 * a * b);
                vec![yz, yz, xz, xz, xy, xy]
            }
            Primitive::Cylinder { radius, height, .. } => {
                let cap = std::f64::consts::PI * radius * radius;
                vec![std::f64::consts::TAU * radius * height, cap, cap]
            }
        }
    }

    fn area(&self) -> f64 {
        self.pieces().iter().sum()
    }

    fn sample<R: Rng>(&self, rng: &mut R) -> (Vec3, Vec3) {
        let pieces = self.pieces();
        let total: f64 = pieces.iter().sum();
        let mut pick = rng.random::<f64>() * total;
        let mut face = pieces.len() - 1;
        for (i, a) in pieces.iter().enumerate() {
            if pick < *a {
                face = i;
                break;
            }
            pick -= a;
        }
        match self {
            Primitive::Cuboid { center, half } => {
                let axis = face / 2;
                let sign = if face % 2 == 0 { -1.0 } else { 1.0 };
                let mut local = Vec3::new(rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0));
                local[axis] = sign;
                let mut n = Vec3::zeros();
                n[axis] = sign;
                (center + half.component_mul(&local), n)
            }
            Primitive::Cylinder { base, axis, radius, height } => {
                let (u, v) = orthonormal(*axis);
                let theta = rng.random_range(0.0..std::f64::consts::TAU);
                let radial = u * theta.cos() + v * theta.sin();
                match face {
                    0 => (base + axis * rng.random_range(0.0..*height) + radial * *radius, radial),
                    _ => {
                        let r = radius * rng.random::<f64>().sqrt();
                        let (offset, n) = if face == 1 { (0.0, -axis) } else { (*height, *axis) };
                        (base + axis * offset + radial * r, n)
                    }
                }
            }
        }
    }
}

struct PartPlan {
    class: SemanticClass,
    shape: Primitive,
}

/// A shape before sampling: parts plus groups in construction units.
struct Plan {
    category: Category,
    parts: Vec<PartPlan>,
    groups: Vec<SymmetryGroup>,
}

fn cuboid(lo: Vec3, hi: Vec3) -> Primitive {
    Primitive::Cuboid { center: (lo + hi) / 2.0, half: (hi - lo) / 2.0 }
}

/// Vertical post with its footprint centred at `(x, y)`.
fn post(round: bool, x: f64, y: f64, z0: f64, z1: f64, size: f64) -> Primitive {
    if round {
        Primitive::Cylinder { base: Vec3::new(x, y, z0), axis: Vec3::z(), radius: size / 2.0, height: z1 - z0 }
    } else {
        cuboid(Vec3::new(x - size / 2.0, y - size / 2.0, z0), Vec3::new(x + size / 2.0, y + size / 2.0, z1))
    }
}

fn plan_chair<R: Rng>(rng: &mut R) -> Result<Plan> {
    use SemanticClass::*;
    let w = rng.random_range(0.8..1.2);
    let d = rng.random_range(0.8..1.2);
    let t = rng.random_range(0.06..0.12);
    let h = rng.random_range(0.8..1.1);
    let leg = rng.random_range(0.06..0.12);
    let inset = rng.random_range(0.0..0.08);
    let round = rng.random_bool(0.5);
    let bt = rng.random_range(0.05..0.1);
    let bh = rng.random_range(0.8..1.3);
    let arms = rng.random_bool(0.5);

    let (lx, ly) = (w / 2.0 - leg / 2.0 - inset, d / 2.0 - leg / 2.0 - inset);
    let mut parts = vec![
        PartPlan { class: Seat, shape: cuboid(Vec3::new(-w / 2.0, -d / 2.0, h), Vec3::new(w / 2.0, d / 2.0, h + t)) },
        PartPlan { class: Back, shape: cuboid(Vec3::new(-w / 2.0, d / 2.0 - bt, h + t), Vec3::new(w / 2.0, d / 2.0, h + t + bh)) },
        PartPlan { class: Leg, shape: post(round, -lx, -ly, 0.0, h, leg) },
        PartPlan { class: Leg, shape: post(round, lx, -ly, 0.0, h, leg) },
        PartPlan { class: Leg, shape: post(round, -lx, ly, 0.0, h, leg) },
        PartPlan { class: Leg, shape: post(round, lx, ly, 0.0, h, leg) },
    ];
    let mirror = SymmetrySpec::reflective(Vec3::zeros(), Vec3::x())?;
    let mut groups = vec![
        SymmetryGroup { members: vec![2, 3], spec: mirror.clone() },
        SymmetryGroup { members: vec![4, 5], spec: mirror.clone() },
    ];
    if arms {
        let aw = rng.random_range(0.06..0.1);
        let at = rng.random_range(0.05..0.08);
        let ah = rng.random_range(0.25..0.35);
        let z = h + t + ah;
        let (y0, y1) = (-d / 2.0 + 0.05, d / 2.0 - bt);
        parts.push(PartPlan { class: Arm, shape: cuboid(Vec3::new(-w / 2.0, y0, z), Vec3::new(-w / 2.0 + aw, y1, z + at)) });
        parts.push(PartPlan { class: Arm, shape: cuboid(Vec3::new(w / 2.0 - aw, y0, z), Vec3::new(w / 2.0, y1, z + at)) });
        groups.push(SymmetryGroup { members: vec![6, 7], spec: mirror });
    }
    Ok(Plan { category: Category::Chair, parts, groups })
}

fn plan_table<R: Rng>(rng: &mut R) -> Result<Plan> {
    use SemanticClass::*;
    let t = rng.random_range(0.05..0.1);
    let h = rng.random_range(0.9..1.2);
    let leg = rng.random_range(0.08..0.14);
    let round_legs = rng.random_bool(0.5);
    if rng.random_bool(0.5) {
        let radius = rng.random_range(0.6..0.9);
        let n = rng.random_range(3..=6usize);
        let ring = radius - leg / 2.0 - rng.random_range(0.05..0.15);
        let mut parts = vec![PartPlan {
            class: Top,
            shape: Primitive::Cylinder { base: Vec3::new(0.0, 0.0, h), axis: Vec3::z(), radius, height: t },
        }];
        for k in 0..n {
            let a = std::f64::consts::TAU * k as f64 / n as f64;
            parts.push(PartPlan { class: Leg, shape: post(round_legs, ring * a.cos(), ring * a.sin(), 0.0, h, leg) });
        }
        let spec = SymmetrySpec::rotational(Vec3::zeros(), Vec3::z(), n)?;
        Ok(Plan { category: Category::Table, parts, groups: vec![SymmetryGroup { members: (1..=n).collect(), spec }] })
    } else {
        let w = rng.random_range(1.2..2.0);
        let d = rng.random_range(0.7..1.1);
        let inset = rng.random_range(0.0..0.1);
        let (lx, ly) = (w / 2.0 - leg / 2.0 - inset, d / 2.0 - leg / 2.0 - inset);
        let parts = vec![
            PartPlan { class: Top, shape: cuboid(Vec3::new(-w / 2.0, -d / 2.0, h), Vec3::new(w / 2.0, d / 2.0, h + t)) },
            PartPlan { class: Leg, shape: post(round_legs, -lx, -ly, 0.0, h, leg) },
            PartPlan { class: Leg, shape: post(round_legs, -lx, ly, 0.0, h, leg) },
            PartPlan { class: Leg, shape: post(round_legs, lx, -ly, 0.0, h, leg) },
            PartPlan { class: Leg, shape: post(round_legs, lx, ly, 0.0, h, leg) },
        ];
        let shift = |x: f64| SymmetrySpec::translational(Vec3::new(x, -ly, h / 2.0), Vec3::y(), 2.0 * ly, 2);
        let groups = vec![
            SymmetryGroup { members: vec![1, 2], spec: shift(-lx)? },
            SymmetryGroup { members: vec![3, 4], spec: shift(lx)? },
        ];
        Ok(Plan { category: Category::Table, parts, groups })
    }
}

fn plan_ladder<R: Rng>(rng: &mut R) -> Result<Plan> {
    use SemanticClass::*;
    let height = rng.random_range(2.0..3.0);
    let rail = rng.random_range(0.06..0.1);
    let hw = rng.random_range(0.25..0.4);
    let round = rng.random_bool(0.5);
    let rungs = rng.random_range(3..=7usize);
    let rr = rng.random_range(0.02..0.035);
    let z0 = rng.random_range(0.25..0.4);
    let step = (height - z0 - rng.random_range(0.2..0.35)) / (rungs - 1) as f64;
    let mut parts = vec![
        PartPlan { class: Rail, shape: post(round, -hw, 0.0, 0.0, height, rail) },
        PartPlan { class: Rail, shape: post(round, hw, 0.0, 0.0, height, rail) },
    ];
    let inner = hw - rail / 2.0;
    for k in 0..rungs {
        parts.push(PartPlan {
            class: Rung,
            shape: Primitive::Cylinder {
                base: Vec3::new(-inner, 0.0, z0 + k as f64 * step),
                axis: Vec3::x(),
                radius: rr,
                height: 2.0 * inner,
            },
        });
    }
    let groups = vec![
        SymmetryGroup { members: vec![0, 1], spec: SymmetrySpec::reflective(Vec3::zeros(), Vec3::x())? },
        SymmetryGroup {
            members: (2..2 + rungs).collect(),
            spec: SymmetrySpec::translational(Vec3::new(0.0, 0.0, z0), Vec3::z(), step, rungs)?,
        },
    ];
    Ok(Plan { category: Category::Ladder, parts, groups })
}

/// Splits `total` points over units with `weights`, where unit `u` holds
/// `folds[u]` identical copies: returns per-copy counts `m[u] >= 1` with
/// `sum(folds[u] * m[u]) == total`, minimizing the summed deviation from
/// the area-proportional share.
pub fn allocate_points(weights: &[f64], folds: &[usize], total: usize) -> Result<Vec<usize>> {
    let units = weights.len();
    if units == 0 || folds.len() != units || folds.contains(&0) {
        return Err(Error::Invalid("allocate_points: bad unit description".into()));
    }
    let wsum: f64 = weights.iter().sum();
    if !(wsum > 0.0) || weights.iter().any(|w| !(*w >= 0.0)) {
        return Err(Error::Invalid("allocate_points: weights must be non-negative with a positive sum".into()));
    }
    let ideal: Vec<f64> = weights.iter().map(|w| total as f64 * w / wsum).collect();
    // best[u][s]: minimal cost of units 0..u using s points.
    let inf = f64::INFINITY;
    let mut best = vec![vec![inf; total + 1]; units + 1];
    let mut choice = vec![vec![0usize; total + 1]; units + 1];
    best[0][0] = 0.0;
    for u in 0..units {
        let f = folds[u];
        for s in 0..=total {
            if best[u][s] == inf {
                continue;
            }
            let mut m = 1;
            while s + f * m <= total {
                let cost = best[u][s] + (f as f64 * m as f64 - ideal[u]).abs();
                let t = s + f * m;
                if cost < best[u + 1][t] {
                    best[u + 1][t] = cost;
                    choice[u + 1][t] = m;
                }
                m += 1;
            }
        }
    }
    if best[units][total] == inf {
        return Err(Error::Invalid(format!("cannot split {total} points into the shape's symmetric copies")));
    }
    let mut out = vec![0; units];
    let mut s = total;
    for u in (0..units).rev() {
        out[u] = choice[u + 1][s];
        s -= folds[u] * out[u];
    }
    Ok(out)
}

fn sample_plan(plan: Plan, n_points: usize, seed: u64, rng: &mut ChaCha8Rng) -> Result<ShapeRecord> {
    let n_parts = plan.parts.len();
    if n_points < n_parts {
        return Err(Error::Invalid(format!("{n_points} points cannot cover {n_parts} parts")));
    }
    let mut grouped = vec![None; n_parts];
    for (gi, g) in plan.groups.iter().enumerate() {
        for &m in &g.members {
            grouped[m] = Some(gi);
        }
    }
    // Units in part id order of their first member.
    let mut units: Vec<(usize, usize)> = Vec::new();
    for p in 0..n_parts {
        match grouped[p] {
            Some(gi) if plan.groups[gi].members[0] == p => units.push((p, plan.groups[gi].spec.fold)),
            Some(_) => {}
            None => units.push((p, 1)),
        }
    }
    let weights: Vec<f64> = units.iter().map(|&(p, f)| plan.parts[p].shape.area() * f as f64).collect();
    let folds: Vec<usize> = units.iter().map(|u| u.1).collect();
    let counts = allocate_points(&weights, &folds, n_points)?;

    let mut points: Vec<(Vec3, Vec3, usize)> = Vec::with_capacity(n_points);
    for (&(p, _), &m) in units.iter().zip(&counts) {
        let samples: Vec<(Vec3, Vec3)> = (0..m).map(|_| plan.parts[p].shape.sample(rng)).collect();
        let generator = PointCloud::from_points(samples.iter().map(|s| s.0).collect(), samples.iter().map(|s| s.1).collect())?;
        match grouped[p] {
            Some(gi) => {
                let g = &plan.groups[gi];
                for (copy, member) in apply_symmetry(&generator, &g.spec)?.iter().zip(&g.members) {
                    for (x, n) in copy.positions().iter().zip(copy.normals()) {
                        points.push((*x, *n, *member));
                    }
                }
            }
            None => {
                for (x, n) in generator.positions().iter().zip(generator.normals()) {
                    points.push((*x, *n, p));
                }
            }
        }
    }
    points.shuffle(rng);
    let cloud = PointCloud::from_points(points.iter().map(|p| p.0).collect(), points.iter().map(|p| p.1).collect())?;
    let labels: Vec<usize> = points.iter().map(|p| p.2).collect();
    let (cloud, center, scale) = normalize_cloud(&cloud)?;
    let parts: Vec<PartInfo> = plan.parts.iter().enumerate().map(|(id, p)| PartInfo { id, class: p.class }).collect();
    let groups = plan
        .groups
        .iter()
        .map(|g| {
            let gen_rows: Vec<usize> = (0..labels.len()).filter(|&r| labels[r] == g.members[0]).collect();
            let gen_centroid = cloud.subset(&gen_rows).centroid().expect("allocation keeps >= 1 point");
            Ok(SymmetryGroup { members: g.members.clone(), spec: normalize_spec(&g.spec, center, scale, gen_centroid)? })
        })
        .collect::<Result<Vec<_>>>()?;
    let record = ShapeRecord { category: plan.category, seed, cloud, instance_label: labels, parts, groups };
    record.check()?;
    Ok(record)
}

/// Maps a spec through `p -> (p - center) / scale` and canonicalizes its
/// anchor: nearest plane or axis point to the origin, or the generator
/// centroid for translations.
pub fn normalize_spec(spec: &SymmetrySpec, center: Vec3, scale: f64, generator_centroid: Vec3) -> Result<SymmetrySpec> {
    let anchor = (spec.anchor - center) / scale;
    match spec.kind {
        SymmetryKind::Reflective => SymmetrySpec::reflective(anchor, spec.direction),
        SymmetryKind::Rotational => SymmetrySpec::rotational(anchor, spec.direction, spec.fold),
        SymmetryKind::Translational => SymmetrySpec::translational(generator_centroid, spec.direction, spec.step / scale, spec.fold),
    }
}

/// Deterministic shape for `(category, seed)` with `n_points` points.
pub fn generate_shape(category: Category, seed: u64, n_points: usize) -> Result<ShapeRecord> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let plan = match category {
        Category::Chair => plan_chair(&mut rng)?,
        Category::Table => plan_table(&mut rng)?,
        Category::Ladder => plan_ladder(&mut rng)?,
    };
    sample_plan(plan, n_points, seed, &mut rng)
}

/// Seed of the `index`-th shape of a dataset generated with `seed`.
pub fn shape_seed(seed: u64, index: usize) -> u64 {
    let mut z = seed.wrapping_add((index as u64 + 1).wrapping_mul(0x9E37_79B9_7F4A_7C15));
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// `count` shapes cycling through `categories`.
pub fn generate_dataset(categories: &[Category], count: usize, seed: u64, n_points: usize) -> Result<Vec<ShapeRecord>> {
    if categories.is_empty() {
        return Err(Error::Invalid("no categories given".into()));
    }
    (0..count).map(|i| generate_shape(categories[i % categories.len()], shape_seed(seed, i), n_points)).collect()
}

/// Perturbs positions with i.i.d. N(0, sigma²) noise.
pub fn add_gaussian_noise(record: &ShapeRecord, sigma: f64, seed: u64) -> Result<ShapeRecord> {
    if !(sigma >= 0.0) || !sigma.is_finite() {
        return Err(Error::Invalid(format!("noise sigma must be non-negative, got {sigma}")));
    }
    if sigma == 0.0 {
        return Ok(record.clone());
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let normal = Normal::new(0.0, sigma).map_err(|e| Error::Invalid(e.to_string()))?;
    let positions = record
        .cloud
        .positions()
        .iter()
        .map(|p| p + Vec3::new(normal.sample(&mut rng), normal.sample(&mut rng), normal.sample(&mut rng)))
        .collect();
    Ok(ShapeRecord { cloud: record.cloud.with_positions(positions)?, ..record.clone() })
}

/// Resamples to exactly `n` points, keeping symmetric copies exact: each
/// group draws rows from its generator and takes the matching rows of the
/// other members.
pub fn resample(record: &ShapeRecord, n: usize, seed: u64) -> Result<ShapeRecord> {
    if n == record.len() {
        return Ok(record.clone());
    }
    let n_parts = record.parts.len();
    if n < n_parts {
        return Err(Error::Invalid(format!("{n} points cannot cover {n_parts} parts")));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut rows_of: Vec<Vec<usize>> = vec![Vec::new(); n_parts];
    for (r, &l) in record.instance_label.iter().enumerate() {
        rows_of[l].push(r);
    }
    let mut group_of = vec![None; n_parts];
    for (gi, g) in record.groups.iter().enumerate() {
        for &m in &g.members {
            group_of[m] = Some(gi);
        }
    }
    let mut units = Vec::new();
    for p in 0..n_parts {
        match group_of[p] {
            Some(gi) if record.groups[gi].members[0] == p => units.push((p, Some(gi))),
            Some(_) => {}
            None => units.push((p, None)),
        }
    }
    let weights: Vec<f64> = units
        .iter()
        .map(|&(p, g)| g.map_or(rows_of[p].len(), |gi| record.groups[gi].members.iter().map(|&m| rows_of[m].len()).sum()) as f64)
        .collect();
    let folds: Vec<usize> = units.iter().map(|&(_, g)| g.map_or(1, |gi| record.groups[gi].spec.fold)).collect();
    let counts = allocate_points(&weights, &folds, n)?;

    let pick = |rows: &[usize], m: usize, rng: &mut ChaCha8Rng| -> Vec<usize> {
        if m <= rows.len() {
            rows.choose_multiple(rng, m).copied().collect()
        } else {
            (0..m).map(|i| if i < rows.len() { rows[i] } else { rows[rng.random_range(0..rows.len())] }).collect()
        }
    };
    let mut chosen: Vec<usize> = Vec::with_capacity(n);
    for (&(p, g), &m) in units.iter().zip(&counts) {
        let gen_rows = pick(&rows_of[p], m, &mut rng);
        chosen.extend_from_slice(&gen_rows);
        if let Some(gi) = g {
            let group = &record.groups[gi];
            let gen = record.cloud.subset(&gen_rows);
            for (k, &member) in group.members.iter().enumerate().skip(1) {
                let member_cloud = record.cloud.subset(&rows_of[member]);
                let index = NearestIndex::new(member_cloud.positions());
                for x in group.spec.apply(k, &gen).positions() {
                    chosen.push(rows_of[member][index.nearest(x).expect("non-empty").0]);
                }
            }
        }
    }
    chosen.shuffle(&mut rng);
    let sub = record.cloud.subset(&chosen);
    let cloud = PointCloud::from_points(sub.positions().to_vec(), sub.normals().to_vec())?;
    let instance_label = chosen.iter().map(|&r| record.instance_label[r]).collect();
    Ok(ShapeRecord { cloud, instance_label, ..record.clone() })
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct SpecJson {
    kind: SymmetryKind,
    anchor: [f64; 3],
    direction: [f64; 3],
    fold: usize,
    step: f64,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct GroupJson {
    members: Vec<usize>,
    symmetry: SpecJson,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct RecordJson {
    category: Category,
    seed: u64,
    points: Vec<[f64; 6]>,
    instance_label: Vec<usize>,
    parts: Vec<PartInfo>,
    groups: Vec<GroupJson>,
}

pub fn record_to_json(record: &ShapeRecord) -> String {
    let doc = RecordJson {
        category: record.category,
        seed: record.seed,
        points: record
            .cloud
            .positions()
            .iter()
            .zip(record.cloud.normals())
            .map(|(p, n)| [p.x, p.y, p.z, n.x, n.y, n.z])
            .collect(),
        instance_label: record.instance_label.clone(),
        parts: record.parts.clone(),
        groups: record
            .groups
            .iter()
            .map(|g| GroupJson {
                members: g.members.clone(),
                symmetry: SpecJson {
                    kind: g.spec.kind,
                    anchor: g.spec.anchor.into(),
                    direction: g.spec.direction.into(),
                    fold: g.spec.fold,
                    step: g.spec.step,
                },
            })
            .collect(),
    };
    serde_json::to_string(&doc).expect("record serializes")
}

pub fn record_from_json(text: &str) -> Result<ShapeRecord> {
    let doc: RecordJson = serde_json::from_str(text)?;
    let cloud = PointCloud::from_points(
        doc.points.iter().map(|p| Vec3::new(p[0], p[1], p[2])).collect(),
        doc.points.iter().map(|p| Vec3::new(p[3], p[4], p[5])).collect(),
    )?;
    let groups = doc
        .groups
        .iter()
        .map(|g| {
            let spec = SymmetrySpec {
                kind: g.symmetry.kind,
                anchor: Vec3::from(g.symmetry.anchor),
                direction: Vec3::from(g.symmetry.direction),
                fold: g.symmetry.fold,
                step: g.symmetry.step,
            };
            spec.validate()?;
            Ok(SymmetryGroup { members: g.members.clone(), spec })
        })
        .collect::<Result<Vec<_>>>()?;
    let record = ShapeRecord { category: doc.category, seed: doc.seed, cloud, instance_label: doc.instance_label, parts: doc.parts, groups };
    record.check()?;
    Ok(record)
}

pub fn save_record(record: &ShapeRecord, path: impl AsRef<Path>) -> Result<()> {
    std::fs::write(path, record_to_json(record))?;
    Ok(())
}

pub fn load_record(path: impl AsRef<Path>) -> Result<ShapeRecord> {
    let path = path.as_ref();
    let text = std::fs::read_to_string(path)?;
    record_from_json(&text).map_err(|e| match e {
        Error::Parse(m) => Error::Parse(format!("{}: {m}", path.display())),
        other => other,
    })
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DatasetManifest {
    pub seed: u64,
    pub n_points: usize,
    pub train: Vec<String>,
    pub test: Vec<String>,
}

impl DatasetManifest {
    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Ok(serde_json::from_str(&std::fs::read_to_string(path)?)?)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        std::fs::write(path, serde_json::to_string_pretty(self)?)?;
        Ok(())
    }
}

/// Seeded split; the train side gets `round(ratio * len)` entries.
pub fn split_dataset(paths: &[String], ratio: f64, seed: u64, n_points: usize) -> Result<DatasetManifest> {
    if !(0.0..=1.0).contains(&ratio) {
        return Err(Error::Invalid(format!("split ratio {ratio} outside [0, 1]")));
    }
    let mut order: Vec<usize> = (0..paths.len()).collect();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let n_train = (ratio * paths.len() as f64).round() as usize;
    let (tr, te) = order.split_at(n_train);
    let mut train: Vec<usize> = tr.to_vec();
    let mut test: Vec<usize> = te.to_vec();
    train.sort_unstable();
    test.sort_unstable();
    Ok(DatasetManifest {
        seed,
        n_points,
        train: train.into_iter().map(|i| paths[i].clone()).collect(),
        test: test.into_iter().map(|i| paths[i].clone()).collect(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn allocation_matches_exhaustive_search() {
        let weights = [3.0, 1.0, 2.0];
        let folds = [1, 2, 3];
        let got = allocate_points(&weights, &folds, 20).unwrap();
        let ideal: Vec<f64> = weights.iter().map(|w| 20.0 * w / 6.0).collect();
        let mut best = (f64::INFINITY, vec![]);
        for a in 1..=20usize {
            for b in 1..=10usize {
                for c in 1..=6usize {
                    if a + 2 * b + 3 * c == 20 {
                        let cost = (a as f64 - ideal[0]).abs() + (2.0 * b as f64 - ideal[1]).abs() + (3.0 * c as f64 - ideal[2]).abs();
                        if cost < best.0 - 1e-12 {
                            best = (cost, vec![a, b, c]);
                        }
                    }
                }
            }
        }
        let cost = |m: &[usize]| m.iter().zip(&folds).zip(&ideal).map(|((m, f), i)| ((m * f) as f64 - i).abs()).sum::<f64>();
        assert!((cost(&got) - best.0).abs() < 1e-12);
        assert!(allocate_points(&[1.0], &[2], 5).is_err());
    }

    #[test]
    fn unknown_category_is_rejected() {
        assert!("sofa".parse::<Category>().is_err());
        assert_eq!("ladder".parse::<Category>().unwrap(), Category::Ladder);
    }
}
