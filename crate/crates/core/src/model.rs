//! Recursive passes over the network: the teacher-forced loss on a
//! ground-truth tree, the training loop, and top-down inference.

use std::collections::HashMap;
use std::ops::ControlFlow;

use partnet_autodiff::gradcheck::{self, GradCheckOptions, GradCheckReport, Probe};
use partnet_autodiff::{AdamConfig, AdamState, ParamStore, Real, Tape, Tensor, Var};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data::{add_gaussian_noise, shape_seed, ShapeRecord};
use crate::geom::{nn_label_transfer, PointCloud, SymmetryKind, SymmetrySpec, Vec3};
use crate::hierarchy::{self, BuildOptions, HierNode, Hierarchy, NodeKind};
use crate::nets::{argmax, points_input, softmax, Model, Variant, INPUT_CHANNELS};
use crate::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct InferenceConfig {
    /// Nodes at this depth become leaves (the root has depth 0).
    pub max_depth: usize,
    /// Nodes with fewer points become leaves.
    pub min_points: usize,
}

impl Default for InferenceConfig {
    fn default() -> Self {
        InferenceConfig { max_depth: 12, min_points: 10 }
    }
}

impl InferenceConfig {
    pub fn validate(&self) -> Result<()> {
        if self.max_depth < 1 {
            return Err(Error::Invalid("max_depth must be at least 1".into()));
        }
        if self.min_points < 2 {
            return Err(Error::Invalid("min_points must be at least 2".into()));
        }
        Ok(())
    }
}

/// Weights of the loss terms outside the node classification and
/// segmentation averages.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LossWeights {
    pub lambda_sym: f64,
    /// Weight of the leaf semantic cross-entropy in the training objective.
    pub semantic: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        LossWeights { lambda_sym: 1.0, semantic: 1.0 }
    }
}

/// Loss components and teacher-forced accuracy counts of one pass.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct LossBreakdown {
    pub class_mean: f64,
    pub seg_mean: f64,
    pub sym_param: f64,
    /// `class_mean + seg_mean + lambda_sym * sym_param`.
    pub total: f64,
    pub semantic_mean: f64,
    pub n_h: usize,
    pub n_t: usize,
    pub n_s: usize,
    pub n_semantic: usize,
    pub class_correct: usize,
    pub seg_correct: usize,
    pub seg_points: usize,
    pub semantic_correct: usize,
    /// Symmetry nodes whose predicted kind and rounded fold are right.
    pub sym_correct: usize,
}

impl LossBreakdown {
    /// Sums counts and averages the loss values of several passes.
    pub fn aggregate(items: &[LossBreakdown]) -> LossBreakdown {
        let mut out = LossBreakdown::default();
        if items.is_empty() {
            return out;
        }
        let n = items.len() as f64;
        for b in items {
            out.class_mean += b.class_mean / n;
            out.seg_mean += b.seg_mean / n;
            out.sym_param += b.sym_param / n;
            out.total += b.total / n;
            out.semantic_mean += b.semantic_mean / n;
            out.n_h += b.n_h;
            out.n_t += b.n_t;
            out.n_s += b.n_s;
            out.n_semantic += b.n_semantic;
            out.class_correct += b.class_correct;
            out.seg_correct += b.seg_correct;
            out.seg_points += b.seg_points;
            out.semantic_correct += b.semantic_correct;
            out.sym_correct += b.sym_correct;
        }
        out
    }

    pub fn class_accuracy(&self) -> f64 {
        ratio(self.class_correct, self.n_h)
    }

    pub fn seg_accuracy(&self) -> f64 {
        ratio(self.seg_correct, self.seg_points)
    }

    pub fn semantic_accuracy(&self) -> f64 {
        ratio(self.semantic_correct, self.n_semantic)
    }
}

fn ratio(a: usize, b: usize) -> f64 {
    if b == 0 {
        1.0
    } else {
        a as f64 / b as f64
    }
}

/// A ground-truth node with its points resolved to rows of a cloud.
#[derive(Debug, Clone, PartialEq)]
pub struct ForcedNode {
    pub kind: NodeKind,
    pub rows: Vec<usize>,
    /// Split target per entry of `rows`: 0 for the left child (or the
    /// generator), 1 otherwise. Empty at leaves.
    pub seg_labels: Vec<usize>,
    pub spec: Option<SymmetrySpec>,
    /// Semantic class of a leaf, when known.
    pub semantic: Option<usize>,
    pub children: Vec<ForcedNode>,
}

impl ForcedNode {
    /// Resolves `h` against `cloud`; `part_class` maps a part id to its
    /// semantic class.
    pub fn from_hierarchy(h: &Hierarchy, cloud: &PointCloud, part_class: &dyn Fn(usize) -> Option<usize>) -> Result<ForcedNode> {
        let rows: HashMap<usize, usize> = cloud.orig_index().iter().enumerate().map(|(r, &i)| (i, r)).collect();
        resolve(&h.root, &rows, part_class)
    }

    pub fn count(&self) -> usize {
        1 + self.children.iter().map(ForcedNode::count).sum::<usize>()
    }
}

fn resolve(n: &HierNode, rows: &HashMap<usize, usize>, part_class: &dyn Fn(usize) -> Option<usize>) -> Result<ForcedNode> {
    let to_rows = |ids: &[usize]| -> Result<Vec<usize>> {
        ids.iter().map(|p| rows.get(p).copied().ok_or_else(|| Error::Invalid(format!("point {p} missing from cloud")))).collect()
    };
    let my_rows = to_rows(&n.point_ids)?;
    if my_rows.is_empty() {
        return Err(Error::Invalid("hierarchy node without points".into()));
    }
    let children = n.children.iter().map(|c| resolve(c, rows, part_class)).collect::<Result<Vec<_>>>()?;
    let expected = match n.kind {
        NodeKind::Leaf => 0,
        NodeKind::Symmetry => 1,
        NodeKind::Adjacency => 2,
    };
    if children.len() != expected {
        return Err(Error::Invalid(format!("{:?} node with {} children", n.kind, children.len())));
    }
    let seg_labels = match children.first() {
        Some(first) => {
            let left: std::collections::HashSet<usize> = first.rows.iter().copied().collect();
            my_rows.iter().map(|r| usize::from(!left.contains(r))).collect()
        }
        None => Vec::new(),
    };
    if n.kind == NodeKind::Symmetry && n.symmetry.is_none() {
        return Err(Error::Invalid("symmetry node without payload".into()));
    }
    Ok(ForcedNode {
        kind: n.kind,
        rows: my_rows,
        seg_labels,
        spec: n.symmetry.clone(),
        semantic: if n.kind == NodeKind::Leaf { part_class(n.part_ids[0]) } else { None },
        children,
    })
}

/// Point features and positions of one shape with its resolved tree.
#[derive(Debug, Clone)]
pub struct ForcedShape<T> {
    pub features: Vec<T>,
    pub positions: Vec<Vec3>,
    pub root: ForcedNode,
}

impl<T: Real> ForcedShape<T> {
    pub fn new(cloud: &PointCloud, root: ForcedNode) -> Self {
        ForcedShape { features: cloud.features(), positions: cloud.positions().to_vec(), root }
    }

    fn gather(&self, rows: &[usize]) -> Vec<T> {
        let mut out = Vec::with_capacity(rows.len() * INPUT_CHANNELS);
        for &r in rows {
            out.extend_from_slice(&self.features[r * INPUT_CHANNELS..(r + 1) * INPUT_CHANNELS]);
        }
        out
    }
}

/// Centroid and radius of a node's points; symmetry parameters are
/// regressed in this frame so that they do not depend on where the node
/// sits in the shape.
pub fn local_frame(positions: &[Vec3], rows: &[usize]) -> (Vec3, f64) {
    let c = rows.iter().fold(Vec3::zeros(), |a, &r| a + positions[r]) / rows.len().max(1) as f64;
    let s = rows.iter().map(|&r| (positions[r] - c).norm()).fold(0.0, f64::max);
    (c, s.max(1e-6))
}

/// Regression target and mask (anchor 3, direction 3, fold, step) of a
/// spec in the frame `(c, s)`.
pub fn symmetry_target(spec: &SymmetrySpec, c: Vec3, s: f64) -> ([f64; 8], [f64; 8]) {
    let d = spec.direction;
    let anchor = match spec.kind {
        SymmetryKind::Reflective => c - d * (c - spec.anchor).dot(&d),
        SymmetryKind::Rotational => spec.anchor + d * (c - spec.anchor).dot(&d),
        SymmetryKind::Translational => spec.anchor,
    };
    let a = (anchor - c) / s;
    let target = [a.x, a.y, a.z, d.x, d.y, d.z, spec.fold as f64, spec.step / s];
    let mask = match spec.kind {
        SymmetryKind::Reflective => [1.0, 1.0, 1.0, 1.0, 1.0, 1.0, 0.0, 0.0],
        SymmetryKind::Rotational => [1.0, 1.0, 1.0, 1.0, 1.0, 1.0, 1.0, 0.0],
        SymmetryKind::Translational => [0.0, 0.0, 0.0, 1.0, 1.0, 1.0, 1.0, 1.0],
    };
    (target, mask)
}

/// Turns raw symmetry head outputs into a usable spec: kind by argmax,
/// direction normalized, fold rounded (at least 2), step made positive.
/// Returns `None` when the prediction is geometrically unusable.
pub fn decode_symmetry(raw: &[f64], c: Vec3, s: f64) -> Option<SymmetrySpec> {
    let kind = SymmetryKind::from_index(argmax(&raw[..3]))?;
    let p = &raw[3..];
    let anchor = c + Vec3::new(p[0], p[1], p[2]) * s;
    let dir = Vec3::new(p[3], p[4], p[5]);
    if !(dir.norm() > 1e-9) {
        return None;
    }
    let fold = p[6].round().clamp(2.0, 64.0) as usize;
    let spec = match kind {
        SymmetryKind::Reflective => SymmetrySpec::reflective(anchor, dir),
        SymmetryKind::Rotational => SymmetrySpec::rotational(anchor, dir, fold),
        SymmetryKind::Translational => SymmetrySpec::translational(anchor, dir, p[7].abs() * s, fold),
    };
    spec.ok()
}

/// `mean(class) + mean(seg) + lambda_sym * mean(sym)`; empty groups
/// contribute zero.
pub fn assemble_loss<T: Real>(tape: &mut Tape<'_, T>, class: &[Var], seg: &[Var], sym: &[Var], lambda_sym: f64) -> Result<Var> {
    if class.is_empty() {
        return Err(Error::Invalid("no nodes to classify".into()));
    }
    let mut terms = Vec::new();
    for (group, weight) in [(class, 1.0), (seg, 1.0), (sym, lambda_sym)] {
        let k = T::from_f64(weight / group.len().max(1) as f64);
        terms.extend(group.iter().map(|&v| (v, k)));
    }
    Ok(tape.combine(&terms)?)
}

#[derive(Default)]
struct Terms {
    class: Vec<Var>,
    seg: Vec<Var>,
    sym: Vec<Var>,
    sem: Vec<Var>,
    stats: LossBreakdown,
}

/// Output of [`teacher_forced_loss`].
pub struct ForcedPass {
    /// Training objective: `total` plus the weighted semantic term.
    pub objective: Var,
    pub total: Var,
    pub breakdown: LossBreakdown,
}

/// Walks the ground-truth tree top-down, feeding each node the context
/// decoded from its parent and the points of its true split, and
/// accumulates the classification, segmentation, symmetry and semantic
/// losses.
pub fn teacher_forced_loss<T: Real>(
    model: &Model<T>,
    tape: &mut Tape<'_, T>,
    shape: &ForcedShape<T>,
    variant: Variant,
    weights: &LossWeights,
) -> Result<ForcedPass> {
    let mut terms = Terms::default();
    visit_forced(model, tape, shape, &shape.root, None, variant, &mut terms)?;
    let total = assemble_loss(tape, &terms.class, &terms.seg, &terms.sym, weights.lambda_sym)?;
    let objective = if terms.sem.is_empty() || weights.semantic == 0.0 {
        total
    } else {
        let k = T::from_f64(weights.semantic / terms.sem.len() as f64);
        let mut parts = vec![(total, T::one())];
        parts.extend(terms.sem.iter().map(|&v| (v, k)));
        tape.combine(&parts)?
    };
    let mean = |vs: &[Var], tape: &Tape<'_, T>| {
        if vs.is_empty() {
            0.0
        } else {
            vs.iter().map(|&v| tape.scalar(v).as_f64()).sum::<f64>() / vs.len() as f64
        }
    };
    let mut b = terms.stats;
    b.class_mean = mean(&terms.class, tape);
    b.seg_mean = mean(&terms.seg, tape);
    b.sym_param = mean(&terms.sym, tape);
    b.semantic_mean = mean(&terms.sem, tape);
    b.total = tape.scalar(total).as_f64();
    b.n_h = terms.class.len();
    b.n_t = terms.seg.len();
    b.n_s = terms.sym.len();
    b.n_semantic = terms.sem.len();
    Ok(ForcedPass { objective, total, breakdown: b })
}

fn row_argmax<T: Real>(values: &[T], cols: usize) -> Vec<usize> {
    values
        .chunks_exact(cols)
        .map(|row| argmax(&row.iter().map(|v| v.as_f64()).collect::<Vec<_>>()))
        .collect()
}

fn visit_forced<T: Real>(
    model: &Model<T>,
    tape: &mut Tape<'_, T>,
    shape: &ForcedShape<T>,
    node: &ForcedNode,
    rcf: Option<Var>,
    variant: Variant,
    terms: &mut Terms,
) -> Result<()> {
    let x = points_input(tape, &shape.gather(&node.rows))?;
    let psf = model.encode_shape(tape, x)?;
    let nf = model.node_features(tape, psf, rcf, variant)?;
    let logits = model.classify_node(tape, nf.classifier)?;
    let target = node.kind.index();
    terms.class.push(tape.softmax_cross_entropy(logits, &[target])?);
    if row_argmax(tape.value(logits), 3)[0] == target {
        terms.stats.class_correct += 1;
    }
    match node.kind {
        NodeKind::Leaf => {
            if let Some(c) = node.semantic {
                let sem = model.predict_semantic(tape, nf.node)?;
                terms.sem.push(tape.softmax_cross_entropy(sem, &[c])?);
                if row_argmax(tape.value(sem), model.config().semantic_classes)[0] == c {
                    terms.stats.semantic_correct += 1;
                }
            }
        }
        NodeKind::Adjacency | NodeKind::Symmetry => {
            let per_point = model.encode_points(tape, x)?;
            let seg = model.segment_points(tape, per_point, nf.node)?;
            terms.seg.push(tape.softmax_cross_entropy(seg, &node.seg_labels)?);
            let pred = row_argmax(tape.value(seg), 2);
            terms.stats.seg_correct += pred.iter().zip(&node.seg_labels).filter(|(a, b)| a == b).count();
            terms.stats.seg_points += node.rows.len();
            let (left, right) = model.decode_children(tape, nf.node)?;
            if node.kind == NodeKind::Symmetry {
                let spec = node.spec.as_ref().expect("resolved symmetry node has a spec");
                let out = model.predict_symmetry(tape, nf.node)?;
                let kind_logits = tape.slice_cols(out, 0, 3)?;
                let params = tape.slice_cols(out, 3, 8)?;
                let (c, s) = local_frame(&shape.positions, &node.rows);
                let (target, mask) = symmetry_target(spec, c, s);
                let to_t = |v: &[f64]| v.iter().map(|&x| T::from_f64(x)).collect::<Vec<T>>();
                let kind_ce = tape.softmax_cross_entropy(kind_logits, &[spec.kind.index()])?;
                let reg = tape.weighted_mse(params, &to_t(&target), &to_t(&mask))?;
                terms.sym.push(tape.combine(&[(kind_ce, T::one()), (reg, T::one())])?);
                let raw: Vec<f64> = tape.value(out).iter().map(|v| v.as_f64()).collect();
                if argmax(&raw[..3]) == spec.kind.index() && (spec.kind == SymmetryKind::Reflective || raw[9].round() as i64 == spec.fold as i64) {
                    terms.stats.sym_correct += 1;
                }
                visit_forced(model, tape, shape, &node.children[0], Some(left), variant, terms)?;
            } else {
                visit_forced(model, tape, shape, &node.children[0], Some(left), variant, terms)?;
                visit_forced(model, tape, shape, &node.children[1], Some(right), variant, terms)?;
            }
        }
    }
    Ok(())
}

/// Builds the resolved tree of a record from its ground-truth groups.
pub fn forced_tree(record: &ShapeRecord, build: &BuildOptions) -> Result<ForcedNode> {
    let h = record.hierarchy(build)?;
    ForcedNode::from_hierarchy(&h, &record.cloud, &|id| record.part_class(id).map(|c| c.index()))
}

/// Teacher-forced evaluation (no dropout) of one shape.
pub fn evaluate_forced<T: Real>(model: &Model<T>, shape: &ForcedShape<T>, variant: Variant, weights: &LossWeights) -> Result<LossBreakdown> {
    let mut tape = Tape::with_params(model.store());
    Ok(teacher_forced_loss(model, &mut tape, shape, variant, weights)?.breakdown)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub noise_sigma: f64,
    pub seed: u64,
    pub variant: Variant,
    pub weights: LossWeights,
    /// Stop after this many optimizer steps even if epochs remain.
    pub max_iterations: Option<usize>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            epochs: 40,
            batch_size: 10,
            lr: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            noise_sigma: 0.01,
            seed: 0,
            variant: Variant::Full,
            weights: LossWeights::default(),
            max_iterations: None,
        }
    }
}

impl TrainConfig {
    pub fn adam(&self) -> AdamConfig {
        AdamConfig { lr: self.lr, beta1: self.beta1, beta2: self.beta2, eps: self.eps }
    }

    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 {
            return Err(Error::Invalid("batch_size must be positive".into()));
        }
        if !(self.lr >= 0.0) || !(self.noise_sigma >= 0.0) {
            return Err(Error::Invalid("lr and noise_sigma must be non-negative".into()));
        }
        Ok(())
    }
}

/// A training shape: the clean record and its resolved ground-truth tree.
#[derive(Debug, Clone)]
pub struct TrainExample {
    pub record: ShapeRecord,
    pub root: ForcedNode,
}

impl TrainExample {
    pub fn new(record: ShapeRecord, build: &BuildOptions) -> Result<Self> {
        let root = forced_tree(&record, build)?;
        Ok(TrainExample { record, root })
    }

    pub fn forced<T: Real>(&self) -> ForcedShape<T> {
        ForcedShape::new(&self.record.cloud, self.root.clone())
    }
}

/// Batch-mean losses of one optimizer step.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct IterationStats {
    pub iteration: usize,
    pub epoch: usize,
    pub class_loss: f64,
    pub seg_loss: f64,
    pub sym_loss: f64,
    pub semantic_loss: f64,
    pub total: f64,
}

/// Trains with Adam on batches of shapes processed in a fixed order.
///
/// Each epoch reshuffles the shapes and draws fresh position noise for
/// every shape; dropout masks are seeded by iteration and shape index, so
/// a run is reproducible bit for bit. `on_step` runs after every update
/// and may stop training early.
pub fn train(
    model: &mut Model<f32>,
    adam: &mut AdamState<f32>,
    data: &[TrainExample],
    cfg: &TrainConfig,
    mut on_step: impl FnMut(&IterationStats, &Model<f32>, &AdamState<f32>) -> Result<ControlFlow<()>>,
) -> Result<Vec<IterationStats>> {
    cfg.validate()?;
    if data.is_empty() {
        return Err(Error::Invalid("empty training set".into()));
    }
    let mut curve = Vec::new();
    let mut iteration = adam.step as usize;
    'epochs: for epoch in 0..cfg.epochs {
        let mut order: Vec<usize> = (0..data.len()).collect();
        order.shuffle(&mut ChaCha8Rng::seed_from_u64(shape_seed(cfg.seed, epoch)));
        for batch in order.chunks(cfg.batch_size) {
            if cfg.max_iterations.is_some_and(|m| iteration >= m) {
                break 'epochs;
            }
            let mut grads = model.store().zero_grads();
            let mut parts = Vec::with_capacity(batch.len());
            for &idx in batch {
                let ex = &data[idx];
                let noisy = add_gaussian_noise(&ex.record, cfg.noise_sigma, shape_seed(shape_seed(cfg.seed ^ 0x5eed, epoch), idx))?;
                let shape: ForcedShape<f32> = ForcedShape::new(&noisy.cloud, ex.root.clone());
                let rng = ChaCha8Rng::seed_from_u64(shape_seed(shape_seed(cfg.seed, iteration + 1_000_003), idx));
                let mut tape = Tape::training(model.store(), rng);
                let pass = teacher_forced_loss(model, &mut tape, &shape, cfg.variant, &cfg.weights)?;
                let b = &pass.breakdown;
                if ![b.total, b.semantic_mean].iter().all(|v| v.is_finite()) {
                    return Err(Error::Invalid(format!("non-finite loss at iteration {iteration} on shape {idx}")));
                }
                tape.backward(pass.objective)?.accumulate_into(&mut grads);
                parts.push(pass.breakdown);
            }
            let scale = 1.0 / batch.len() as f32;
            grads.iter_mut().flatten().for_each(|g| *g *= scale);
            adam.step(model.store_mut(), &grads)?;
            iteration += 1;
            let agg = LossBreakdown::aggregate(&parts);
            let stats = IterationStats {
                iteration,
                epoch,
                class_loss: agg.class_mean,
                seg_loss: agg.seg_mean,
                sym_loss: agg.sym_param,
                semantic_loss: agg.semantic_mean,
                total: agg.total,
            };
            curve.push(stats);
            if on_step(&stats, model, adam)?.is_break() {
                break 'epochs;
            }
        }
    }
    Ok(curve)
}

/// Loss curve as CSV with header `iter,class_loss,seg_loss,sym_loss`.
pub fn curve_csv(curve: &[IterationStats]) -> String {
    let mut out = String::from("iter,class_loss,seg_loss,sym_loss\n");
    for s in curve {
        out.push_str(&format!("{},{},{},{}\n", s.iteration, s.class_loss, s.seg_loss, s.sym_loss));
    }
    out
}

#[derive(Debug, Clone, PartialEq)]
pub struct PredictedPart {
    pub id: usize,
    /// Product of the chosen class probabilities from the root down.
    pub confidence: f64,
    /// Ascending original point indices.
    pub point_ids: Vec<usize>,
    /// Node feature of the leaf that produced the part (copies share
    /// their generator's).
    pub leaf_feature: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SegmentationResult {
    /// Part id of every point, in input order.
    pub instance_id: Vec<usize>,
    pub parts: Vec<PredictedPart>,
    pub tree: Hierarchy,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct PartJson {
    id: usize,
    confidence: f64,
    point_ids: Vec<usize>,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct ResultJson {
    instance_id: Vec<usize>,
    parts: Vec<PartJson>,
    tree: serde_json::Value,
}

impl SegmentationResult {
    pub fn to_json(&self) -> String {
        let doc = ResultJson {
            instance_id: self.instance_id.clone(),
            parts: self.parts.iter().map(|p| PartJson { id: p.id, confidence: p.confidence, point_ids: p.point_ids.clone() }).collect(),
            tree: hierarchy::to_value(&self.tree),
        };
        serde_json::to_string_pretty(&doc).expect("result serializes")
    }

    /// Parses a result document. Leaf features are not stored and come
    /// back empty. `orig_index` maps positions in `instance_id` to
    /// original point indices.
    pub fn from_json(text: &str, shape_id: &str, orig_index: &[usize]) -> Result<Self> {
        let doc: ResultJson = serde_json::from_str(text)?;
        if orig_index.len() != doc.instance_id.len() {
            return Err(Error::Invalid(format!("result labels {} points, shape has {}", doc.instance_id.len(), orig_index.len())));
        }
        let n = orig_index.iter().copied().max().map_or(0, |m| m + 1);
        let mut labels = vec![usize::MAX; n];
        for (&o, &l) in orig_index.iter().zip(&doc.instance_id) {
            labels[o] = l;
        }
        let tree = hierarchy::from_value(doc.tree, shape_id, &labels)?;
        Ok(SegmentationResult {
            instance_id: doc.instance_id,
            parts: doc
                .parts
                .into_iter()
                .map(|p| PredictedPart { id: p.id, confidence: p.confidence, point_ids: p.point_ids, leaf_feature: Vec::new() })
                .collect(),
            tree,
        })
    }

    /// Checks the exact-partition invariant against `n` input points.
    pub fn check_partition(&self, orig_index: &[usize]) -> Result<()> {
        if self.instance_id.len() != orig_index.len() {
            return Err(Error::Invalid("instance ids do not cover the input".into()));
        }
        let mut owner: HashMap<usize, usize> = HashMap::new();
        for p in &self.parts {
            if p.point_ids.is_empty() {
                return Err(Error::Invalid(format!("part {} is empty", p.id)));
            }
            if !(0.0..=1.0).contains(&p.confidence) {
                return Err(Error::Invalid(format!("part {} confidence {} outside [0, 1]", p.id, p.confidence)));
            }
            for &i in &p.point_ids {
                if owner.insert(i, p.id).is_some() {
                    return Err(Error::Invalid(format!("point {i} in two parts")));
                }
            }
        }
        if owner.len() != orig_index.len() {
            return Err(Error::Invalid(format!("parts cover {} of {} points", owner.len(), orig_index.len())));
        }
        for (&o, &l) in orig_index.iter().zip(&self.instance_id) {
            if owner.get(&o) != Some(&l) {
                return Err(Error::Invalid(format!("point {o} labeled {l} but owned by another part")));
            }
        }
        Ok(())
    }
}

struct PartDraft {
    rows: Vec<usize>,
    confidence: f64,
    feature: Vec<f64>,
}

struct InferCtx<'a, T: Real> {
    model: &'a Model<T>,
    cloud: &'a PointCloud,
    features: Vec<T>,
    variant: Variant,
    cfg: InferenceConfig,
    parts: Vec<PartDraft>,
    /// Part index per row.
    labels: Vec<usize>,
}

/// A predicted node; `parts` are indices into the part list.
struct PredNode {
    kind: NodeKind,
    rows: Vec<usize>,
    parts: Vec<usize>,
    spec: Option<SymmetrySpec>,
    children: Vec<PredNode>,
}

/// Decomposes a shape top-down.
///
/// Every node is classified; leaves (and nodes that are too small, too
/// deep, or whose split would leave a side empty) become parts. Adjacency
/// nodes split their points by the segmenter; symmetry nodes extract the
/// generator, recurse into it, and label the remaining points by
/// transferring generator part labels from each symmetric copy.
pub fn infer_segment<T: Real>(model: &Model<T>, cloud: &PointCloud, variant: Variant, cfg: &InferenceConfig) -> Result<SegmentationResult> {
    cfg.validate()?;
    if cloud.is_empty() {
        return Err(Error::Invalid("empty input".into()));
    }
    let mut ctx = InferCtx {
        model,
        cloud,
        features: cloud.features(),
        variant,
        cfg: *cfg,
        parts: Vec::new(),
        labels: vec![usize::MAX; cloud.len()],
    };
    let root = infer_node(&mut ctx, (0..cloud.len()).collect(), None, 0, 1.0)?;
    let orig = cloud.orig_index();
    let parts: Vec<PredictedPart> = ctx
        .parts
        .iter()
        .enumerate()
        .map(|(id, d)| {
            let mut point_ids: Vec<usize> = d.rows.iter().map(|&r| orig[r]).collect();
            point_ids.sort_unstable();
            PredictedPart { id, confidence: d.confidence, point_ids, leaf_feature: d.feature.clone() }
        })
        .collect();
    let tree = Hierarchy { shape_id: String::new(), root: to_hier(&root, orig) };
    let result = SegmentationResult { instance_id: ctx.labels, parts, tree };
    result.check_partition(orig)?;
    Ok(result)
}

fn to_hier(n: &PredNode, orig: &[usize]) -> HierNode {
    let mut point_ids: Vec<usize> = n.rows.iter().map(|&r| orig[r]).collect();
    point_ids.sort_unstable();
    HierNode {
        kind: n.kind,
        children: n.children.iter().map(|c| to_hier(c, orig)).collect(),
        symmetry: n.spec.clone(),
        part_ids: n.parts.clone(),
        point_ids,
    }
}

fn values<T: Real>(tape: &Tape<'_, T>, v: Var) -> Vec<f64> {
    tape.value(v).iter().map(|x| x.as_f64()).collect()
}

fn emit_leaf<T: Real>(ctx: &mut InferCtx<'_, T>, rows: Vec<usize>, confidence: f64, feature: Vec<f64>) -> PredNode {
    let id = ctx.parts.len();
    for &r in &rows {
        ctx.labels[r] = id;
    }
    ctx.parts.push(PartDraft { rows: rows.clone(), confidence, feature });
    PredNode { kind: NodeKind::Leaf, rows, parts: vec![id], spec: None, children: Vec::new() }
}

fn infer_node<T: Real>(ctx: &mut InferCtx<'_, T>, rows: Vec<usize>, rcf: Option<Vec<T>>, depth: usize, confidence: f64) -> Result<PredNode> {
    let model = ctx.model;
    let mut tape = Tape::with_params(model.store());
    let mut feats = Vec::with_capacity(rows.len() * INPUT_CHANNELS);
    for &r in &rows {
        feats.extend_from_slice(&ctx.features[r * INPUT_CHANNELS..(r + 1) * INPUT_CHANNELS]);
    }
    let x = points_input(&mut tape, &feats)?;
    let psf = model.encode_shape(&mut tape, x)?;
    let rcf = match rcf {
        Some(v) => Some(tape.input(&Tensor::row(v), false)?),
        None => None,
    };
    let nf = model.node_features(&mut tape, psf, rcf, ctx.variant)?;
    let logits = model.classify_node(&mut tape, nf.classifier)?;
    let probs = softmax(&values(&tape, logits));
    let kind = NodeKind::from_index(argmax(&probs)).expect("three classes");
    let node_feature = values(&tape, nf.node);
    let p_leaf = probs[NodeKind::Leaf.index()];
    if kind == NodeKind::Leaf || rows.len() < ctx.cfg.min_points || depth >= ctx.cfg.max_depth {
        return Ok(emit_leaf(ctx, rows, confidence * p_leaf, node_feature));
    }
    let per_point = model.encode_points(&mut tape, x)?;
    let seg = model.segment_points(&mut tape, per_point, nf.node)?;
    let split = row_argmax(tape.value(seg), 2);
    let (first, second): (Vec<usize>, Vec<usize>) = {
        let mut a = Vec::new();
        let mut b = Vec::new();
        for (&r, &s) in rows.iter().zip(&split) {
            if s == 0 {
                a.push(r);
            } else {
                b.push(r);
            }
        }
        (a, b)
    };
    if first.is_empty() || second.is_empty() {
        return Ok(emit_leaf(ctx, rows, confidence * p_leaf, node_feature));
    }
    let (left, right) = model.decode_children(&mut tape, nf.node)?;
    let left: Vec<T> = tape.value(left).to_vec();
    let right: Vec<T> = tape.value(right).to_vec();
    let chosen = confidence * probs[kind.index()];
    if kind == NodeKind::Adjacency {
        let l = infer_node(ctx, first, Some(left), depth + 1, chosen)?;
        let r = infer_node(ctx, second, Some(right), depth + 1, chosen)?;
        let parts = l.parts.iter().chain(&r.parts).copied().collect();
        return Ok(PredNode { kind, rows, parts, spec: None, children: vec![l, r] });
    }

    let sym_out = model.predict_symmetry(&mut tape, nf.node)?;
    let raw = values(&tape, sym_out);
    let (c, s) = local_frame(ctx.cloud.positions(), &rows);
    let Some(spec) = decode_symmetry(&raw, c, s) else {
        return Ok(emit_leaf(ctx, rows, confidence * p_leaf, node_feature));
    };
    let generator = infer_node(ctx, first.clone(), Some(left), depth + 1, chosen)?;
    let gen_parts = generator.parts.clone();
    let slot: HashMap<usize, usize> = gen_parts.iter().enumerate().map(|(i, &p)| (p, i)).collect();
    let gen_cloud = ctx.cloud.subset(&first);
    let mut positions = Vec::with_capacity(first.len() * (spec.fold - 1));
    let mut labels = Vec::with_capacity(positions.capacity());
    for k in 1..spec.fold {
        for (pos, &r) in spec.apply(k, &gen_cloud).positions().iter().zip(&first) {
            positions.push(*pos);
            labels.push((k, slot[&ctx.labels[r]]));
        }
    }
    let source = PointCloud::from_points(positions.clone(), vec![Vec3::z(); positions.len()])?;
    let targets = ctx.cloud.subset(&second);
    let transferred = nn_label_transfer(&targets, &source, &labels)?;
    let mut copies: std::collections::BTreeMap<(usize, usize), Vec<usize>> = std::collections::BTreeMap::new();
    for (&r, key) in second.iter().zip(transferred) {
        copies.entry(key).or_default().push(r);
    }
    let mut parts = gen_parts.clone();
    for ((_, j), members) in copies {
        let source_part = &ctx.parts[gen_parts[j]];
        let (conf, feature) = (source_part.confidence, source_part.feature.clone());
        let id = ctx.parts.len();
        for &r in &members {
            ctx.labels[r] = id;
        }
        ctx.parts.push(PartDraft { rows: members, confidence: conf, feature });
        parts.push(id);
    }
    Ok(PredNode { kind, rows, parts, spec: Some(spec), children: vec![generator] })
}

/// Semantic class of every predicted part, from its leaf feature.
pub fn predict_leaf_semantics<T: Real>(result: &SegmentationResult, model: &Model<T>, k: usize) -> Result<Vec<usize>> {
    if model.config().semantic_classes != k {
        return Err(Error::Invalid(format!("model predicts {} semantic classes, asked for {k}", model.config().semantic_classes)));
    }
    result
        .parts
        .iter()
        .map(|p| {
            if p.leaf_feature.len() != model.config().node_dim() {
                return Err(Error::Invalid(format!("part {} has no leaf feature", p.id)));
            }
            let mut tape = Tape::with_params(model.store());
            let f = tape.input(&Tensor::row(p.leaf_feature.iter().map(|&v| T::from_f64(v)).collect()), false)?;
            let logits = model.predict_semantic(&mut tape, f)?;
            Ok(argmax(&values(&tape, logits)))
        })
        .collect()
}

/// Finite-difference report of one block or loss.
#[derive(Debug, Clone)]
pub struct BlockCheck {
    pub name: String,
    pub report: GradCheckReport,
}

fn into_autodiff(e: Error) -> partnet_autodiff::Error {
    match e {
        Error::Autodiff(inner) => inner,
        other => partnet_autodiff::Error::InvalidArgument(other.to_string()),
    }
}

type BlockFn = dyn Fn(&Model<f64>, &mut Tape<'_, f64>, &[Var]) -> Result<Var>;

fn probe_block(model: &Model<f64>, store: &ParamStore<f64>, inputs: &[(usize, usize, Vec<f64>)], build: &BlockFn, target: Option<&[f64]>) -> Result<(Probe, Vec<f64>)> {
    let mut tape = Tape::with_params(store);
    let vars = inputs
        .iter()
        .map(|(r, c, d)| tape.input(&Tensor::matrix(*r, *c, d.clone())?, true).map_err(Error::from))
        .collect::<Result<Vec<_>>>()?;
    let out = build(model, &mut tape, &vars)?;
    let values = tape.value(out).to_vec();
    let loss = match target {
        Some(t) => {
            let l = tape.mse(out, t)?;
            tape.scalar(l)
        }
        None => 0.0,
    };
    Ok((Probe { loss, signature: tape.kink_signature() }, values))
}

/// Checks the gradient of `mse(block(inputs), target)` with respect to
/// every parameter and every input of a block.
fn check_block(name: &str, model: &Model<f64>, inputs: &[(usize, usize, Vec<f64>)], build: &BlockFn, opts: &GradCheckOptions) -> Result<BlockCheck> {
    let (_, out) = probe_block(model, model.store(), inputs, build, None)?;
    let target: Vec<f64> = (0..out.len()).map(|i| (i as f64 * 0.37).sin()).collect();
    let mut tape = Tape::with_params(model.store());
    let vars = inputs
        .iter()
        .map(|(r, c, d)| tape.input(&Tensor::matrix(*r, *c, d.clone())?, true).map_err(Error::from))
        .collect::<Result<Vec<_>>>()?;
    let y = build(model, &mut tape, &vars)?;
    let loss = tape.mse(y, &target)?;
    let grads = tape.backward(loss)?;
    let input_grads: Vec<Vec<f64>> = vars.iter().map(|&v| grads.wrt(v)).collect();
    let param_grads = grads.into_param_grads(model.store());
    let mut report = gradcheck::check_params(model.store(), &param_grads, |s| probe_block(model, s, inputs, build, Some(&target)).map(|p| p.0).map_err(into_autodiff), opts)?;
    for (i, (r, c, data)) in inputs.iter().enumerate() {
        let sub = gradcheck::check_vector(
            &format!("{name}.input{i}"),
            data,
            &input_grads[i],
            |xs| {
                let mut perturbed = inputs.to_vec();
                perturbed[i] = (*r, *c, xs.to_vec());
                probe_block(model, model.store(), &perturbed, build, Some(&target)).map(|p| p.0).map_err(into_autodiff)
            },
            opts,
        )?;
        report.merge(sub);
    }
    Ok(BlockCheck { name: name.to_string(), report })
}

fn forced_probe(model: &Model<f64>, store: &ParamStore<f64>, shape: &ForcedShape<f64>, variant: Variant) -> Result<Probe> {
    let mut tape = Tape::with_params(store);
    let pass = teacher_forced_loss(model, &mut tape, shape, variant, &LossWeights::default())?;
    Ok(Probe { loss: tape.scalar(pass.objective), signature: tape.kink_signature() })
}

/// Central finite-difference checks, in 64-bit arithmetic, of every
/// network block and of the full teacher-forced objective under each
/// variant, on a width-reduced model and a small generated chair.
pub fn gradient_check_suite(seed: u64, opts: &GradCheckOptions) -> Result<Vec<BlockCheck>> {
    use rand::Rng;
    let config = crate::nets::NetConfig::reduced(crate::data::SemanticClass::ALL.len());
    let model: Model<f64> = Model::init(config.clone(), seed)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0xC4EC);
    let mut random = |rows: usize, cols: usize| -> (usize, usize, Vec<f64>) { (rows, cols, (0..rows * cols).map(|_| rng.random_range(-1.0..1.0)).collect()) };
    let n = 24;
    let points = random(n, INPUT_CHANNELS);
    let feature = random(1, config.feature_dim());
    let node = random(1, config.node_dim());
    let classifier_in = random(1, 2 * config.feature_dim());
    let per_point = random(n, config.point_dim());

    let mut checks = Vec::new();
    let shape_encoder: &BlockFn = &|m, t, v| m.encode_shape(t, v[0]);
    checks.push(check_block("shape_encoder", &model, &[points.clone()], shape_encoder, opts)?);
    let point_encoder: &BlockFn = &|m, t, v| m.encode_points(t, v[0]);
    checks.push(check_block("point_encoder", &model, &[points.clone()], point_encoder, opts)?);
    for variant in Variant::ALL {
        let features: Box<BlockFn> = Box::new(move |m, t, v| {
            let psf = m.encode_shape(t, v[0])?;
            let nf = m.node_features(t, psf, Some(v[1]), variant)?;
            Ok(t.concat(&[nf.node, nf.classifier])?)
        });
        checks.push(check_block(&format!("node_features.{variant}"), &model, &[points.clone(), feature.clone()], features.as_ref(), opts)?);
    }
    let decoder: &BlockFn = &|m, t, v| {
        let (l, r) = m.decode_children(t, v[0])?;
        Ok(t.concat(&[l, r])?)
    };
    checks.push(check_block("decoder", &model, &[node.clone()], decoder, opts)?);
    let classifier: &BlockFn = &|m, t, v| m.classify_node(t, v[0]);
    checks.push(check_block("classifier", &model, &[classifier_in], classifier, opts)?);
    let symmetry: &BlockFn = &|m, t, v| m.predict_symmetry(t, v[0]);
    checks.push(check_block("symmetry_head", &model, &[node.clone()], symmetry, opts)?);
    let semantic: &BlockFn = &|m, t, v| m.predict_semantic(t, v[0]);
    checks.push(check_block("semantic_head", &model, &[node.clone()], semantic, opts)?);
    let segmenter: &BlockFn = &|m, t, v| m.segment_points(t, v[0], v[1]);
    checks.push(check_block("segmenter", &model, &[per_point, node], segmenter, opts)?);

    let record = crate::data::generate_shape(crate::data::Category::Chair, seed, 64)?;
    let root = forced_tree(&record, &BuildOptions::default())?;
    let shape: ForcedShape<f64> = ForcedShape::new(&record.cloud, root);
    for variant in Variant::ALL {
        let mut tape = Tape::with_params(model.store());
        let pass = teacher_forced_loss(&model, &mut tape, &shape, variant, &LossWeights::default())?;
        let grads = tape.backward(pass.objective)?.into_param_grads(model.store());
        let report = gradcheck::check_params(model.store(), &grads, |s| forced_probe(&model, s, &shape, variant).map_err(into_autodiff), opts)?;
        checks.push(BlockCheck { name: format!("teacher_forced_loss.{variant}"), report });
    }
    Ok(checks)
}
