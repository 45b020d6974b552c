//! Binary part hierarchies: construction from labeled parts, symmetry
//! detection, validation and JSON I/O.
//!
//! Symmetry nodes have a single child, the generator subtree; the other
//! copies are implied by the node's [`SymmetrySpec`]. Their `part_ids` are
//! listed copy by copy: the generator's parts first, then the parts of
//! copy 1 in the same order, and so on.

use std::collections::{BTreeMap, BTreeSet, HashMap};

use nalgebra::{Matrix3, SymmetricEigen};
use serde::{Deserialize, Serialize};

use crate::geom::{canonical_sign, mean_nn_residual, max_nn_residual, min_set_distance, PointCloud, SymmetryKind, SymmetrySpec, Vec3};
use crate::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum NodeKind {
    Adjacency,
    Symmetry,
    Leaf,
}

impl NodeKind {
    pub const ALL: [NodeKind; 3] = [NodeKind::Adjacency, NodeKind::Symmetry, NodeKind::Leaf];

    /// Position in the classifier output.
    pub fn index(self) -> usize {
        match self {
            NodeKind::Adjacency => 0,
            NodeKind::Symmetry => 1,
            NodeKind::Leaf => 2,
        }
    }

    pub fn from_index(i: usize) -> Option<Self> {
        Self::ALL.get(i).copied()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct HierNode {
    pub kind: NodeKind,
    /// Adjacency: two children, left holds the smallest part id.
    /// Symmetry: one child, the generator. Leaf: none.
    pub children: Vec<HierNode>,
    pub symmetry: Option<SymmetrySpec>,
    /// Ascending, except at symmetry nodes (copy order, see module docs).
    pub part_ids: Vec<usize>,
    /// Ascending original point indices.
    pub point_ids: Vec<usize>,
}

impl HierNode {
    pub fn leaf(part_id: usize, mut point_ids: Vec<usize>) -> Self {
        point_ids.sort_unstable();
        HierNode { kind: NodeKind::Leaf, children: Vec::new(), symmetry: None, part_ids: vec![part_id], point_ids }
    }

    /// Adjacency node over two subtrees, ordered canonically.
    pub fn adjacency(a: HierNode, b: HierNode) -> Self {
        let (left, right) = if min_part(&a) <= min_part(&b) { (a, b) } else { (b, a) };
        let mut part_ids: Vec<usize> = left.part_ids.iter().chain(&right.part_ids).copied().collect();
        part_ids.sort_unstable();
        let point_ids = merge_sorted(&left.point_ids, &right.point_ids);
        HierNode { kind: NodeKind::Adjacency, children: vec![left, right], symmetry: None, part_ids, point_ids }
    }

    pub fn is_leaf(&self) -> bool {
        self.kind == NodeKind::Leaf
    }

    pub fn min_part_id(&self) -> usize {
        min_part(self)
    }

    /// Pre-order traversal.
    pub fn preorder(&self) -> Vec<&HierNode> {
        let mut out = Vec::new();
        let mut stack = vec![self];
        while let Some(n) = stack.pop() {
            out.push(n);
            stack.extend(n.children.iter().rev());
        }
        out
    }

    pub fn node_count(&self) -> usize {
        1 + self.children.iter().map(HierNode::node_count).sum::<usize>()
    }

    pub fn depth(&self) -> usize {
        self.children.iter().map(|c| 1 + c.depth()).max().unwrap_or(0)
    }
}

fn min_part(n: &HierNode) -> usize {
    n.part_ids.iter().copied().min().unwrap_or(usize::MAX)
}

fn merge_sorted(a: &[usize], b: &[usize]) -> Vec<usize> {
    let mut out = Vec::with_capacity(a.len() + b.len());
    out.extend_from_slice(a);
    out.extend_from_slice(b);
    out.sort_unstable();
    out
}

#[derive(Debug, Clone, PartialEq)]
pub struct Hierarchy {
    pub shape_id: String,
    pub root: HierNode,
}

/// Members of one symmetry group, in copy order, and its transform.
#[derive(Debug, Clone, PartialEq)]
pub struct SymmetryGroup {
    pub members: Vec<usize>,
    pub spec: SymmetrySpec,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DetectOptions {
    /// Mean nearest-neighbour residual accepted for a symmetric copy.
    pub tol: f64,
    pub angle_tol_deg: f64,
    pub spacing_tol: f64,
}

impl Default for DetectOptions {
    fn default() -> Self {
        DetectOptions { tol: 0.02, angle_tol_deg: 2.0, spacing_tol: 0.02 }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BuildOptions {
    /// Unit gaps up to this distance count as contact (distance 0).
    pub contact_tol: f64,
}

impl Default for BuildOptions {
    fn default() -> Self {
        BuildOptions { contact_tol: 0.2 }
    }
}

fn check_disjoint(parts: &[(usize, PointCloud)]) -> Result<()> {
    let mut owner: HashMap<usize, usize> = HashMap::new();
    let mut ids = BTreeSet::new();
    for (pid, cloud) in parts {
        if !ids.insert(*pid) {
            return Err(Error::Invalid(format!("part id {pid} appears twice")));
        }
        if cloud.is_empty() {
            return Err(Error::Invalid(format!("part {pid} has no points")));
        }
        for &i in cloud.orig_index() {
            if let Some(other) = owner.insert(i, *pid) {
                return Err(Error::Invalid(format!("parts {other} and {pid} overlap at point {i}")));
            }
        }
    }
    Ok(())
}

/// Sorted square roots of the covariance eigenvalues.
fn principal_extents(c: &PointCloud) -> [f64; 3] {
    let mean = c.centroid().expect("non-empty");
    let mut cov = Matrix3::zeros();
    for p in c.positions() {
        let d = p - mean;
        cov += d * d.transpose();
    }
    cov /= c.len() as f64;
    let mut e: Vec<f64> = SymmetricEigen::new(cov).eigenvalues.iter().map(|v| v.max(0.0).sqrt()).collect();
    e.sort_by(f64::total_cmp);
    [e[0], e[1], e[2]]
}

/// Residual of mapping `generator` by copy `k` of `spec` onto `member`.
fn copy_residual(generator: &PointCloud, member: &PointCloud, spec: &SymmetrySpec, k: usize) -> Result<f64> {
    mean_nn_residual(&spec.apply(k, generator), member)
}

fn group_residual(clouds: &[&PointCloud], spec: &SymmetrySpec) -> Result<f64> {
    let mut worst: f64 = 0.0;
    for (k, m) in clouds.iter().enumerate().skip(1) {
        worst = worst.max(copy_residual(clouds[0], m, spec, k)?);
    }
    Ok(worst)
}

/// Finds reflective, rotational and translational groups of congruent
/// parts. Each part joins at most one group; groups list the smallest part
/// id first, as the generator.
pub fn detect_symmetry_groups(parts: &[(usize, PointCloud)], opts: &DetectOptions) -> Result<Vec<SymmetryGroup>> {
    if !(opts.tol > 0.0) {
        return Err(Error::Invalid("symmetry tolerance must be positive".into()));
    }
    check_disjoint(parts)?;
    let mut order: Vec<usize> = (0..parts.len()).collect();
    order.sort_by_key(|&i| parts[i].0);
    let extents: Vec<[f64; 3]> = parts.iter().map(|(_, c)| principal_extents(c)).collect();

    // Congruence classes by point count and principal extents.
    let mut classes: Vec<Vec<usize>> = Vec::new();
    for &i in &order {
        let fits = |j: usize| {
            parts[i].1.len() == parts[j].1.len()
                && extents[i].iter().zip(&extents[j]).all(|(a, b)| (a - b).abs() <= opts.tol)
        };
        match classes.iter_mut().find(|cls| fits(cls[0])) {
            Some(cls) => cls.push(i),
            None => classes.push(vec![i]),
        }
    }

    let mut groups = Vec::new();
    for cls in classes.into_iter().filter(|c| c.len() >= 2) {
        let clouds: Vec<&PointCloud> = cls.iter().map(|&i| &parts[i].1).collect();
        let ids: Vec<usize> = cls.iter().map(|&i| parts[i].0).collect();
        if clouds.len() >= 3 {
            if let Some((perm, spec)) = fit_rotational(&clouds, opts)? {
                groups.push(SymmetryGroup { members: perm.iter().map(|&k| ids[k]).collect(), spec });
                continue;
            }
            if let Some((perm, spec)) = fit_translational(&clouds, opts)? {
                groups.push(SymmetryGroup { members: perm.iter().map(|&k| ids[k]).collect(), spec });
                continue;
            }
        }
        groups.extend(pair_groups(&clouds, &ids, opts)?);
    }
    groups.sort_by_key(|g| g.members[0]);
    Ok(groups)
}

fn centroids(clouds: &[&PointCloud]) -> Vec<Vec3> {
    clouds.iter().map(|c| c.centroid().expect("non-empty")).collect()
}

/// Equal-angle ring about a common axis. Returns members in
/// counter-clockwise order starting from the generator (index 0).
fn fit_rotational(clouds: &[&PointCloud], opts: &DetectOptions) -> Result<Option<(Vec<usize>, SymmetrySpec)>> {
    let n = clouds.len();
    let cs = centroids(clouds);
    let center = cs.iter().fold(Vec3::zeros(), |a, c| a + c) / n as f64;
    let mut cov = Matrix3::zeros();
    for c in &cs {
        let d = c - center;
        cov += d * d.transpose();
    }
    let eig = SymmetricEigen::new(cov);
    let (imin, _) = eig.eigenvalues.iter().enumerate().fold((0, f64::INFINITY), |b, (i, &v)| if v < b.1 { (i, v) } else { b });
    let axis = canonical_sign(eig.eigenvectors.column(imin).into_owned().normalize());
    let radii: Vec<f64> = cs.iter().map(|c| (c - center - axis * (c - center).dot(&axis)).norm()).collect();
    let r0 = radii[0];
    if !(r0 > opts.spacing_tol) || radii.iter().any(|r| (r - r0).abs() > opts.spacing_tol) {
        return Ok(None);
    }
    if cs.iter().any(|c| (c - center).dot(&axis).abs() > opts.spacing_tol) {
        return Ok(None);
    }
    let u = (cs[0] - center - axis * (cs[0] - center).dot(&axis)).normalize();
    let v = axis.cross(&u);
    let mut angles: Vec<(f64, usize)> = cs
        .iter()
        .enumerate()
        .map(|(i, c)| {
            let d = c - center;
            let a = d.dot(&v).atan2(d.dot(&u));
            (if a < -1e-9 { a + std::f64::consts::TAU } else { a.max(0.0) }, i)
        })
        .collect();
    angles.sort_by(|a, b| a.0.total_cmp(&b.0));
    let step = std::f64::consts::TAU / n as f64;
    let tol = opts.angle_tol_deg.to_radians();
    if angles.iter().enumerate().any(|(k, (a, _))| (a - k as f64 * step).abs() > tol) {
        return Ok(None);
    }
    let spec = SymmetrySpec::rotational(center, axis, n)?;
    let perm: Vec<usize> = angles.iter().map(|&(_, i)| i).collect();
    let ordered: Vec<&PointCloud> = perm.iter().map(|&i| clouds[i]).collect();
    if group_residual(&ordered, &spec)? > opts.tol {
        return Ok(None);
    }
    Ok(Some((perm, spec)))
}

/// Collinear, equally spaced copies with the generator at one end.
fn fit_translational(clouds: &[&PointCloud], opts: &DetectOptions) -> Result<Option<(Vec<usize>, SymmetrySpec)>> {
    let n = clouds.len();
    let cs = centroids(clouds);
    let far = (1..n).max_by(|&a, &b| (cs[a] - cs[0]).norm().total_cmp(&(cs[b] - cs[0]).norm())).expect("n >= 2");
    let span = cs[far] - cs[0];
    if !(span.norm() > opts.spacing_tol) {
        return Ok(None);
    }
    let dir = span.normalize();
    let mut proj: Vec<(f64, usize)> = cs.iter().enumerate().map(|(i, c)| ((c - cs[0]).dot(&dir), i)).collect();
    if proj.iter().any(|&(t, i)| (cs[i] - cs[0] - dir * t).norm() > opts.spacing_tol) {
        return Ok(None);
    }
    proj.sort_by(|a, b| a.0.total_cmp(&b.0));
    if proj[0].1 != 0 {
        return Ok(None);
    }
    let step = proj[n - 1].0 / (n - 1) as f64;
    if proj.iter().enumerate().any(|(k, (t, _))| (t - k as f64 * step).abs() > opts.spacing_tol) {
        return Ok(None);
    }
    let spec = SymmetrySpec::translational(cs[0], dir, step, n)?;
    let perm: Vec<usize> = proj.iter().map(|&(_, i)| i).collect();
    let ordered: Vec<&PointCloud> = perm.iter().map(|&i| clouds[i]).collect();
    if group_residual(&ordered, &spec)? > opts.tol {
        return Ok(None);
    }
    Ok(Some((perm, spec)))
}

/// Greedy pairing: repeatedly take the pair with the smallest residual
/// under a mirror or a translation.
fn pair_groups(clouds: &[&PointCloud], ids: &[usize], opts: &DetectOptions) -> Result<Vec<SymmetryGroup>> {
    let cs = centroids(clouds);
    let mut candidates = Vec::new();
    for a in 0..clouds.len() {
        for b in a + 1..clouds.len() {
            let d = cs[b] - cs[a];
            if !(d.norm() > 1e-9) {
                continue;
            }
            let mirror = SymmetrySpec::reflective((cs[a] + cs[b]) / 2.0, d)?;
            let shift = SymmetrySpec::translational(cs[a], d, d.norm(), 2)?;
            for (rank, spec) in [(0, mirror), (1, shift)] {
                let res = copy_residual(clouds[a], clouds[b], &spec, 1)?;
                if res <= opts.tol {
                    candidates.push((res, rank, a, b, spec));
                }
            }
        }
    }
    candidates.sort_by(|x, y| x.0.total_cmp(&y.0).then(x.1.cmp(&y.1)).then(x.2.cmp(&y.2)).then(x.3.cmp(&y.3)));
    let mut used = vec![false; clouds.len()];
    let mut out = Vec::new();
    for (_, _, a, b, spec) in candidates {
        if used[a] || used[b] {
            continue;
        }
        used[a] = true;
        used[b] = true;
        out.push(SymmetryGroup { members: vec![ids[a], ids[b]], spec });
    }
    Ok(out)
}

struct Unit {
    node: HierNode,
    cloud: PointCloud,
}

/// Builds the canonical hierarchy of a labeled shape.
///
/// Each group becomes a symmetry node over its generator; the resulting
/// units are merged bottom-up, always joining the closest pair (gaps
/// within `contact_tol` count as touching), ties resolved by the smaller
/// pair of minimum part ids.
pub fn build_hierarchy(
    shape_id: &str,
    parts: &[(usize, PointCloud)],
    groups: &[SymmetryGroup],
    opts: &BuildOptions,
) -> Result<Hierarchy> {
    if parts.is_empty() {
        return Err(Error::Invalid("build_hierarchy: empty part list".into()));
    }
    check_disjoint(parts)?;
    let by_id: BTreeMap<usize, &PointCloud> = parts.iter().map(|(id, c)| (*id, c)).collect();
    let mut grouped = BTreeSet::new();
    let mut units = Vec::new();
    for g in groups {
        g.spec.validate()?;
        if g.members.len() != g.spec.fold {
            return Err(Error::Invalid(format!("group {:?} has {} members but fold {}", g.members, g.members.len(), g.spec.fold)));
        }
        let min = *g.members.iter().min().expect("fold >= 2");
        if g.members[0] != min {
            return Err(Error::Invalid(format!("group {:?}: generator must be the smallest part id", g.members)));
        }
        let mut clouds = Vec::new();
        for m in &g.members {
            let c = by_id.get(m).ok_or_else(|| Error::Invalid(format!("group references unknown part {m}")))?;
            if !grouped.insert(*m) {
                return Err(Error::Invalid(format!("part {m} belongs to two groups")));
            }
            clouds.push(*c);
        }
        let generator = HierNode::leaf(min, clouds[0].orig_index().to_vec());
        let cloud = PointCloud::union(&clouds)?;
        let mut point_ids = cloud.orig_index().to_vec();
        point_ids.sort_unstable();
        let node = HierNode {
            kind: NodeKind::Symmetry,
            children: vec![generator],
            symmetry: Some(g.spec.clone()),
            part_ids: g.members.clone(),
            point_ids,
        };
        units.push(Unit { node, cloud });
    }
    for (id, c) in &by_id {
        if !grouped.contains(id) {
            units.push(Unit { node: HierNode::leaf(*id, c.orig_index().to_vec()), cloud: (*c).clone() });
        }
    }
    units.sort_by_key(|u| u.node.min_part_id());

    // Pairwise quantized distances; merged clusters take the minimum.
    let quantize = |d: f64| if d <= opts.contact_tol { 0.0 } else { d };
    let n = units.len();
    let mut dist = vec![vec![0.0; n]; n];
    for a in 0..n {
        for b in a + 1..n {
            let d = quantize(min_set_distance(&units[a].cloud, &units[b].cloud)?);
            dist[a][b] = d;
            dist[b][a] = d;
        }
    }
    let mut alive: Vec<Option<HierNode>> = units.into_iter().map(|u| Some(u.node)).collect();
    let mut live: Vec<usize> = (0..n).collect();
    while live.len() > 1 {
        let mut best: Option<(f64, usize, usize, usize, usize)> = None;
        for (ia, &a) in live.iter().enumerate() {
            for &b in &live[ia + 1..] {
                let (ma, mb) = (alive[a].as_ref().expect("live").min_part_id(), alive[b].as_ref().expect("live").min_part_id());
                let key = (dist[a][b], ma.min(mb), ma.max(mb), a, b);
                let better = match &best {
                    None => true,
                    Some(k) => key.0 < k.0 || (key.0 == k.0 && (key.1, key.2) < (k.1, k.2)),
                };
                if better {
                    best = Some(key);
                }
            }
        }
        let (_, _, _, a, b) = best.expect("at least two live units");
        let merged = HierNode::adjacency(alive[a].take().expect("live"), alive[b].take().expect("live"));
        for &c in &live {
            if c != a && c != b {
                let d = dist[a][c].min(dist[b][c]);
                dist[a][c] = d;
                dist[c][a] = d;
            }
        }
        alive[a] = Some(merged);
        live.retain(|&c| c != b);
    }
    let root = alive[live[0]].take().expect("root");
    Ok(Hierarchy { shape_id: shape_id.to_string(), root })
}

/// Splits labeled points into per-part clouds, ordered by part id.
pub fn parts_from_labels(cloud: &PointCloud, labels: &[usize]) -> Result<Vec<(usize, PointCloud)>> {
    if labels.len() != cloud.len() {
        return Err(Error::Invalid(format!("{} labels for {} points", labels.len(), cloud.len())));
    }
    let mut rows: BTreeMap<usize, Vec<usize>> = BTreeMap::new();
    for (r, &l) in labels.iter().enumerate() {
        rows.entry(l).or_default().push(r);
    }
    Ok(rows.into_iter().map(|(id, rs)| (id, cloud.subset(&rs))).collect())
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Violation {
    /// Child indices from the root, e.g. `root/0/1`.
    pub path: String,
    pub message: String,
}

#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct ValidationReport {
    pub violations: Vec<Violation>,
}

impl ValidationReport {
    pub fn is_ok(&self) -> bool {
        self.violations.is_empty()
    }
}

/// Checks structural invariants and the exact point partition against
/// `shape`. With `symmetry_tol`, each symmetry node's copies must also
/// reproduce its non-generator points within that nearest-neighbour
/// distance.
pub fn validate(h: &Hierarchy, shape: &PointCloud, symmetry_tol: Option<f64>) -> ValidationReport {
    let mut report = ValidationReport::default();
    let rows: HashMap<usize, usize> = shape.orig_index().iter().enumerate().map(|(r, &i)| (i, r)).collect();
    let mut root_points = shape.orig_index().to_vec();
    root_points.sort_unstable();
    if h.root.point_ids != root_points {
        report.violations.push(Violation {
            path: "root".into(),
            message: format!("root covers {} points, shape has {}", h.root.point_ids.len(), root_points.len()),
        });
    }
    validate_node(&h.root, "root", shape, &rows, symmetry_tol, &mut report.violations);
    report
}

fn is_strictly_sorted(v: &[usize]) -> bool {
    v.windows(2).all(|w| w[0] < w[1])
}

fn validate_node(
    n: &HierNode,
    path: &str,
    shape: &PointCloud,
    rows: &HashMap<usize, usize>,
    tol: Option<f64>,
    out: &mut Vec<Violation>,
) {
    let mut bad = |m: String| out.push(Violation { path: path.to_string(), message: m });
    if n.point_ids.is_empty() {
        bad("node covers no points".into());
    }
    if !is_strictly_sorted(&n.point_ids) {
        bad("point ids not strictly ascending".into());
    }
    if let Some(p) = n.point_ids.iter().find(|p| !rows.contains_key(p)) {
        bad(format!("point id {p} not in shape"));
    }
    if n.kind != NodeKind::Symmetry && n.symmetry.is_some() {
        bad("symmetry payload on a non-symmetry node".into());
    }
    let unique_parts: BTreeSet<usize> = n.part_ids.iter().copied().collect();
    if unique_parts.len() != n.part_ids.len() {
        bad("repeated part id".into());
    }
    match n.kind {
        NodeKind::Leaf => {
            if !n.children.is_empty() {
                bad(format!("leaf has {} children", n.children.len()));
            }
            if n.part_ids.len() != 1 {
                bad(format!("leaf has {} part ids", n.part_ids.len()));
            }
        }
        NodeKind::Adjacency => {
            if n.children.len() != 2 {
                bad(format!("adjacency node has {} children", n.children.len()));
            } else {
                let (l, r) = (&n.children[0], &n.children[1]);
                if !is_strictly_sorted(&n.part_ids) {
                    bad("part ids not strictly ascending".into());
                }
                let lp: BTreeSet<usize> = l.point_ids.iter().copied().collect();
                if r.point_ids.iter().any(|p| lp.contains(p)) {
                    bad("non-disjoint children".into());
                } else if merge_sorted(&l.point_ids, &r.point_ids) != n.point_ids {
                    bad("points differ from the union of the children".into());
                }
                if merge_sorted(&l.part_ids, &r.part_ids) != n.part_ids {
                    bad("part ids differ from the union of the children".into());
                }
                if l.min_part_id() > r.min_part_id() {
                    bad("children out of canonical order".into());
                }
            }
        }
        NodeKind::Symmetry => match (&n.symmetry, n.children.as_slice()) {
            (None, _) => bad("symmetry node without payload".into()),
            (Some(_), c) if c.len() != 1 => bad(format!("symmetry node has {} children, expected the generator only", c.len())),
            (Some(spec), [g]) => {
                if let Err(e) = spec.validate() {
                    bad(format!("invalid symmetry: {e}"));
                } else if n.part_ids.len() != spec.fold * g.part_ids.len() {
                    bad(format!("{} part ids for fold {} over {} generator parts", n.part_ids.len(), spec.fold, g.part_ids.len()));
                } else if n.part_ids[..g.part_ids.len()] != g.part_ids[..] {
                    bad("generator parts must lead the part id list".into());
                } else if n.part_ids.iter().min() != g.part_ids.iter().min() {
                    bad("generator must hold the smallest part id".into());
                }
                let np: BTreeSet<usize> = n.point_ids.iter().copied().collect();
                if !g.point_ids.iter().all(|p| np.contains(p)) {
                    bad("generator points outside the node".into());
                } else if g.point_ids.len() >= n.point_ids.len() {
                    bad("symmetry node has no points beyond its generator".into());
                } else if let (Some(tol), Ok(())) = (tol, spec.validate()) {
                    let gp: BTreeSet<usize> = g.point_ids.iter().copied().collect();
                    let rest: Vec<usize> = n.point_ids.iter().copied().filter(|p| !gp.contains(p)).collect();
                    if rows.contains_key(&rest[0]) && g.point_ids.iter().all(|p| rows.contains_key(p)) {
                        let sub = |ids: &[usize]| shape.subset(&ids.iter().filter_map(|p| rows.get(p).copied()).collect::<Vec<_>>());
                        let gen = sub(&g.point_ids);
                        let others = sub(&rest);
                        let copies: Vec<PointCloud> = (1..spec.fold).map(|k| spec.apply(k, &gen)).collect();
                        let refs: Vec<&PointCloud> = copies.iter().collect();
                        let merged = PointCloud::new(
                            refs.iter().flat_map(|c| c.positions().to_vec()).collect(),
                            refs.iter().flat_map(|c| c.normals().to_vec()).collect(),
                            (0..refs.iter().map(|c| c.len()).sum()).collect(),
                        );
                        match merged {
                            Ok(m) => {
                                let r1 = max_nn_residual(&others, &m).unwrap_or(f64::INFINITY);
                                let r2 = max_nn_residual(&m, &others).unwrap_or(f64::INFINITY);
                                if r1.max(r2) > tol {
                                    bad(format!("symmetric copies miss the node's points by {:.3e}", r1.max(r2)));
                                }
                            }
                            Err(e) => bad(format!("symmetric copies: {e}")),
                        }
                    }
                }
            }
            _ => unreachable!(),
        },
    }
    for (i, c) in n.children.iter().enumerate() {
        validate_node(c, &format!("{path}/{i}"), shape, rows, tol, out);
    }
}

/// Point labels implied by the tree: leaves label their own points and
/// symmetry nodes transfer generator labels to the copies by nearest
/// neighbour. Returns `(orig_index, part_id)` pairs sorted by index.
pub fn expand_labels(h: &Hierarchy, shape: &PointCloud) -> Result<Vec<(usize, usize)>> {
    let rows: HashMap<usize, usize> = shape.orig_index().iter().enumerate().map(|(r, &i)| (i, r)).collect();
    let mut out = BTreeMap::new();
    expand_node(&h.root, shape, &rows, &mut out)?;
    Ok(out.into_iter().collect())
}

fn expand_node(n: &HierNode, shape: &PointCloud, rows: &HashMap<usize, usize>, out: &mut BTreeMap<usize, usize>) -> Result<()> {
    let row_of = |p: &usize| rows.get(p).copied().ok_or_else(|| Error::Invalid(format!("point {p} not in shape")));
    match n.kind {
        NodeKind::Leaf => {
            for p in &n.point_ids {
                out.insert(*p, n.part_ids[0]);
            }
        }
        NodeKind::Adjacency => {
            for c in &n.children {
                expand_node(c, shape, rows, out)?;
            }
        }
        NodeKind::Symmetry => {
            let g = n.children.first().ok_or_else(|| Error::Invalid("symmetry node without generator".into()))?;
            let spec = n.symmetry.as_ref().ok_or_else(|| Error::Invalid("symmetry node without payload".into()))?;
            expand_node(g, shape, rows, out)?;
            let gen_rows: Vec<usize> = g.point_ids.iter().map(row_of).collect::<Result<_>>()?;
            let gen = shape.subset(&gen_rows);
            let gp: BTreeSet<usize> = g.point_ids.iter().copied().collect();
            let rest: Vec<usize> = n.point_ids.iter().copied().filter(|p| !gp.contains(p)).collect();
            if rest.is_empty() {
                return Ok(());
            }
            let slot: HashMap<usize, usize> = g.part_ids.iter().enumerate().map(|(i, &p)| (p, i)).collect();
            let per_copy = g.part_ids.len();
            let mut positions = Vec::new();
            let mut labels = Vec::new();
            for k in 1..spec.fold {
                let copy = spec.apply(k, &gen);
                for (pos, orig) in copy.positions().iter().zip(gen.orig_index()) {
                    positions.push(*pos);
                    let idx = slot[&out[orig]];
                    labels.push(n.part_ids.get(k * per_copy + idx).copied().unwrap_or(n.part_ids[idx]));
                }
            }
            let source = PointCloud::from_points(positions.clone(), vec![Vec3::z(); positions.len()])?;
            let rest_rows: Vec<usize> = rest.iter().map(row_of).collect::<Result<_>>()?;
            let targets = shape.subset(&rest_rows);
            let transferred = crate::geom::nn_label_transfer(&targets, &source, &labels)?;
            for (p, l) in rest.iter().zip(transferred) {
                out.insert(*p, l);
            }
        }
    }
    Ok(())
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct SpecDoc {
    kind: SymmetryKind,
    anchor: [f64; 3],
    direction: [f64; 3],
    fold: usize,
    step: f64,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct NodeDoc {
    kind: NodeKind,
    part_ids: Vec<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    children: Option<Vec<NodeDoc>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    symmetry: Option<SpecDoc>,
}

impl From<&SymmetrySpec> for SpecDoc {
    fn from(s: &SymmetrySpec) -> Self {
        SpecDoc { kind: s.kind, anchor: s.anchor.into(), direction: s.direction.into(), fold: s.fold, step: s.step }
    }
}

impl From<&SpecDoc> for SymmetrySpec {
    fn from(d: &SpecDoc) -> Self {
        SymmetrySpec { kind: d.kind, anchor: Vec3::from(d.anchor), direction: Vec3::from(d.direction), fold: d.fold, step: d.step }
    }
}

fn to_doc(n: &HierNode) -> NodeDoc {
    NodeDoc {
        kind: n.kind,
        part_ids: n.part_ids.clone(),
        children: if n.children.is_empty() { None } else { Some(n.children.iter().map(to_doc).collect()) },
        symmetry: n.symmetry.as_ref().map(SpecDoc::from),
    }
}

/// Pretty JSON document of the tree.
pub fn serialize(h: &Hierarchy) -> String {
    serde_json::to_string_pretty(&to_doc(&h.root)).expect("tree serializes")
}

/// The tree document as a JSON value, for embedding in other documents.
pub fn to_value(h: &Hierarchy) -> serde_json::Value {
    serde_json::to_value(to_doc(&h.root)).expect("tree serializes")
}

/// Inverse of [`to_value`]; see [`deserialize`].
pub fn from_value(value: serde_json::Value, shape_id: &str, point_labels: &[usize]) -> Result<Hierarchy> {
    let doc: NodeDoc = serde_json::from_value(value)?;
    from_parsed(&doc, shape_id, point_labels)
}

/// Parses a tree document. Point sets are not stored in the document;
/// they are rebuilt from `point_labels`, the part id of each point
/// (indexed by original point index).
pub fn deserialize(text: &str, shape_id: &str, point_labels: &[usize]) -> Result<Hierarchy> {
    if text.trim().is_empty() {
        return Err(Error::Parse("empty hierarchy document".into()));
    }
    let doc: NodeDoc = serde_json::from_str(text)?;
    from_parsed(&doc, shape_id, point_labels)
}

fn from_parsed(doc: &NodeDoc, shape_id: &str, point_labels: &[usize]) -> Result<Hierarchy> {
    let mut points: BTreeMap<usize, Vec<usize>> = BTreeMap::new();
    for (i, &l) in point_labels.iter().enumerate() {
        points.entry(l).or_default().push(i);
    }
    let root = from_doc(doc, &points, "root")?;
    Ok(Hierarchy { shape_id: shape_id.to_string(), root })
}

fn from_doc(d: &NodeDoc, points: &BTreeMap<usize, Vec<usize>>, path: &str) -> Result<HierNode> {
    let children = match &d.children {
        Some(cs) => cs.iter().enumerate().map(|(i, c)| from_doc(c, points, &format!("{path}/{i}"))).collect::<Result<Vec<_>>>()?,
        None => Vec::new(),
    };
    let mut point_ids = Vec::new();
    for p in &d.part_ids {
        let pts = points.get(p).ok_or_else(|| Error::Parse(format!("{path}: part {p} has no labeled points")))?;
        point_ids.extend_from_slice(pts);
    }
    point_ids.sort_unstable();
    Ok(HierNode { kind: d.kind, children, symmetry: d.symmetry.as_ref().map(SymmetrySpec::from), part_ids: d.part_ids.clone(), point_ids })
}
