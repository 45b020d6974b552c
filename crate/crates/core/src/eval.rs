//! Detection AP over predicted part instances, part-wise semantic IoU,
//! and the variant comparison harness.

use std::collections::{BTreeMap, HashSet};
use std::ops::ControlFlow;

use partnet_autodiff::AdamState;
use serde::Serialize;

use crate::data::{Category, ShapeRecord};
use crate::model::{infer_segment, predict_leaf_semantics, train, InferenceConfig, IterationStats, SegmentationResult, TrainConfig, TrainExample};
use crate::nets::{Model, NetConfig, Variant};
use crate::{Error, Result};

/// A predicted part instance; `points` are ascending point ids.
#[derive(Debug, Clone, PartialEq)]
pub struct Detection {
    pub shape: usize,
    pub id: usize,
    pub confidence: f64,
    pub points: Vec<usize>,
}

/// A ground-truth part instance.
#[derive(Debug, Clone, PartialEq)]
pub struct GtPart {
    pub shape: usize,
    pub id: usize,
    pub points: Vec<usize>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct MatchedPair {
    pub shape: usize,
    pub pred: usize,
    pub gt: usize,
    pub iou: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ApOutcome {
    pub ap: f64,
    pub matches: Vec<MatchedPair>,
}

/// `|a ∩ b| / |a ∪ b|` of two ascending id lists.
pub fn instance_iou(a: &[usize], b: &[usize]) -> Result<f64> {
    if a.is_empty() && b.is_empty() {
        return Err(Error::Invalid("IoU of two empty sets".into()));
    }
    let (mut i, mut j, mut inter) = (0, 0, 0usize);
    while i < a.len() && j < b.len() {
        match a[i].cmp(&b[j]) {
            std::cmp::Ordering::Less => i += 1,
            std::cmp::Ordering::Greater => j += 1,
            std::cmp::Ordering::Equal => {
                inter += 1;
                i += 1;
                j += 1;
            }
        }
    }
    Ok(inter as f64 / (a.len() + b.len() - inter) as f64)
}

fn check_sorted(points: &[usize]) -> Result<()> {
    if points.windows(2).any(|w| w[0] >= w[1]) {
        return Err(Error::Invalid("point ids must be strictly ascending".into()));
    }
    Ok(())
}

/// AP with confidence-ordered greedy matching and the all-point
/// interpolated precision-recall area.
///
/// Predictions are ranked by confidence (ties: smaller shape, then smaller
/// id); each takes the highest-IoU unmatched ground truth of its shape and
/// counts as a true positive if that IoU exceeds `threshold`.
pub fn average_precision(preds: &[Detection], gts: &[GtPart], threshold: f64) -> Result<ApOutcome> {
    if gts.is_empty() {
        return Err(Error::Invalid("undefined AP: no ground-truth parts".into()));
    }
    for p in preds {
        if !p.confidence.is_finite() {
            return Err(Error::Invalid(format!("prediction {} has no usable confidence", p.id)));
        }
        check_sorted(&p.points)?;
    }
    for g in gts {
        check_sorted(&g.points)?;
    }
    let mut order: Vec<usize> = (0..preds.len()).collect();
    order.sort_by(|&a, &b| {
        let (pa, pb) = (&preds[a], &preds[b]);
        pb.confidence.total_cmp(&pa.confidence).then(pa.shape.cmp(&pb.shape)).then(pa.id.cmp(&pb.id))
    });
    let mut by_shape: BTreeMap<usize, Vec<usize>> = BTreeMap::new();
    for (i, g) in gts.iter().enumerate() {
        by_shape.entry(g.shape).or_default().push(i);
    }
    let mut taken = vec![false; gts.len()];
    let mut tp_flags = Vec::with_capacity(order.len());
    let mut matches = Vec::new();
    for &pi in &order {
        let p = &preds[pi];
        let mut best: Option<(usize, f64)> = None;
        for &gi in by_shape.get(&p.shape).map(Vec::as_slice).unwrap_or(&[]) {
            if taken[gi] {
                continue;
            }
            let iou = instance_iou(&p.points, &gts[gi].points)?;
            let better = match best {
                None => true,
                Some((bi, bv)) => iou > bv || (iou == bv && gts[gi].id < gts[bi].id),
            };
            if better {
                best = Some((gi, iou));
            }
        }
        match best {
            Some((gi, iou)) if iou > threshold => {
                taken[gi] = true;
                matches.push(MatchedPair { shape: p.shape, pred: p.id, gt: gts[gi].id, iou });
                tp_flags.push(true);
            }
            _ => tp_flags.push(false),
        }
    }
    let mut precision = Vec::with_capacity(tp_flags.len());
    let mut tp = 0usize;
    for (rank, &hit) in tp_flags.iter().enumerate() {
        tp += usize::from(hit);
        precision.push(tp as f64 / (rank + 1) as f64);
    }
    for i in (0..precision.len().saturating_sub(1)).rev() {
        precision[i] = precision[i].max(precision[i + 1]);
    }
    let sum: f64 = tp_flags.iter().zip(&precision).filter(|(hit, _)| **hit).map(|(_, p)| *p).sum();
    Ok(ApOutcome { ap: sum / gts.len() as f64, matches })
}

/// Largest prediction list [`ap_bruteforce_oracle`] accepts.
pub const ORACLE_MAX_PREDICTIONS: usize = 8;

/// Slow reference AP: ranks by repeated selection, re-simulates the
/// greedy matching from scratch for every prefix of the ranking with
/// hash-set IoUs, and integrates the recall steps against the maximum
/// precision of all longer prefixes.
pub fn ap_bruteforce_oracle(preds: &[Detection], gts: &[GtPart], threshold: f64) -> Result<f64> {
    if preds.len() > ORACLE_MAX_PREDICTIONS {
        return Err(Error::Invalid(format!("oracle handles at most {ORACLE_MAX_PREDICTIONS} predictions")));
    }
    if gts.is_empty() {
        return Err(Error::Invalid("undefined AP: no ground-truth parts".into()));
    }
    let mut remaining: Vec<&Detection> = preds.iter().collect();
    let mut ranked = Vec::new();
    while !remaining.is_empty() {
        let mut best = 0;
        for i in 1..remaining.len() {
            let (a, b) = (remaining[i], remaining[best]);
            let key_a = (-a.confidence, a.shape, a.id);
            let key_b = (-b.confidence, b.shape, b.id);
            if key_a.partial_cmp(&key_b) == Some(std::cmp::Ordering::Less) {
                best = i;
            }
        }
        ranked.push(remaining.remove(best));
    }
    let iou = |p: &[usize], g: &[usize]| {
        let a: HashSet<usize> = p.iter().copied().collect();
        let b: HashSet<usize> = g.iter().copied().collect();
        a.intersection(&b).count() as f64 / a.union(&b).count() as f64
    };
    let tp_after = |k: usize| -> usize {
        let mut taken = vec![false; gts.len()];
        let mut tp = 0;
        for p in &ranked[..k] {
            let mut best: Option<(usize, f64)> = None;
            for (gi, g) in gts.iter().enumerate() {
                if taken[gi] || g.shape != p.shape {
                    continue;
                }
                let v = iou(&p.points, &g.points);
                if best.is_none_or(|(bi, bv)| v > bv || (v == bv && g.id < gts[bi].id)) {
                    best = Some((gi, v));
                }
            }
            if let Some((gi, v)) = best {
                if v > threshold {
                    taken[gi] = true;
                    tp += 1;
                }
            }
        }
        tp
    };
    let tps: Vec<usize> = (0..=ranked.len()).map(tp_after).collect();
    let mut sum = 0.0;
    for k in 1..=ranked.len() {
        if tps[k] > tps[k - 1] {
            let envelope = (k..=ranked.len()).map(|j| tps[j] as f64 / j as f64).fold(f64::NEG_INFINITY, f64::max);
            sum += envelope;
        }
    }
    Ok(sum / gts.len() as f64)
}

/// Per-class and mean IoU of one shape's semantic labels.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ShapeSemIoU {
    pub per_class: Vec<f64>,
    pub mean: f64,
}

/// Part-wise IoU of point labels over `classes`; a class absent from both
/// prediction and ground truth scores 1.
pub fn partwise_semantic_iou(pred: &[usize], gt: &[usize], classes: &[usize]) -> Result<ShapeSemIoU> {
    if pred.len() != gt.len() {
        return Err(Error::Invalid(format!("{} predicted labels for {} points", pred.len(), gt.len())));
    }
    if classes.is_empty() {
        return Err(Error::Invalid("no classes".into()));
    }
    let per_class: Vec<f64> = classes
        .iter()
        .map(|&c| {
            let inter = pred.iter().zip(gt).filter(|(p, g)| **p == c && **g == c).count();
            let union = pred.iter().zip(gt).filter(|(p, g)| **p == c || **g == c).count();
            if union == 0 {
                1.0
            } else {
                inter as f64 / union as f64
            }
        })
        .collect();
    let mean = per_class.iter().sum::<f64>() / per_class.len() as f64;
    Ok(ShapeSemIoU { per_class, mean })
}

/// Semantic IoU of one category: per-class means over shapes, each
/// shape's mean, and the category mean.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SemIoUResult {
    pub classes: Vec<usize>,
    pub per_class: Vec<f64>,
    pub shape_means: Vec<f64>,
    pub category_mean: f64,
}

pub fn category_semantic_iou(shapes: &[(Vec<usize>, Vec<usize>)], classes: &[usize]) -> Result<SemIoUResult> {
    if shapes.is_empty() {
        return Err(Error::Invalid("no shapes".into()));
    }
    let per_shape = shapes.iter().map(|(p, g)| partwise_semantic_iou(p, g, classes)).collect::<Result<Vec<_>>>()?;
    let n = per_shape.len() as f64;
    let per_class = (0..classes.len()).map(|i| per_shape.iter().map(|s| s.per_class[i]).sum::<f64>() / n).collect();
    let shape_means: Vec<f64> = per_shape.iter().map(|s| s.mean).collect();
    let category_mean = shape_means.iter().sum::<f64>() / n;
    Ok(SemIoUResult { classes: classes.to_vec(), per_class, shape_means, category_mean })
}

/// Ground-truth part instances of a record.
pub fn ground_truth_parts(record: &ShapeRecord, shape: usize) -> Vec<GtPart> {
    let mut by_part: BTreeMap<usize, Vec<usize>> = BTreeMap::new();
    for (&orig, &label) in record.cloud.orig_index().iter().zip(&record.instance_label) {
        by_part.entry(label).or_default().push(orig);
    }
    by_part
        .into_iter()
        .map(|(id, mut points)| {
            points.sort_unstable();
            GtPart { shape, id, points }
        })
        .collect()
}

pub fn detections(result: &SegmentationResult, shape: usize) -> Vec<Detection> {
    result.parts.iter().map(|p| Detection { shape, id: p.id, confidence: p.confidence, points: p.point_ids.clone() }).collect()
}

pub const AP_THRESHOLDS: [f64; 2] = [0.25, 0.5];

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct MatchLog {
    pub category: String,
    pub threshold: f64,
    pub shape: usize,
    pub pred: usize,
    pub gt: usize,
    pub iou: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct CategoryAp {
    pub category: String,
    pub shapes: usize,
    /// AP at each of [`AP_THRESHOLDS`].
    pub ap: Vec<f64>,
}

/// Per-category AP at both thresholds and the mean over categories.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ApReport {
    pub thresholds: Vec<f64>,
    pub categories: Vec<CategoryAp>,
    pub mean: Vec<f64>,
    pub matches: Vec<MatchLog>,
}

impl ApReport {
    pub fn mean_ap25(&self) -> f64 {
        self.mean[0]
    }
}

/// Semantic labelling quality of a set of segmentations.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SemanticReport {
    /// Fraction of points whose part received the right class.
    pub point_accuracy: f64,
    /// Fraction of predicted leaves whose class is the majority ground
    /// truth class of their points.
    pub leaf_accuracy: f64,
    pub iou: BTreeMap<String, SemIoUResult>,
}

/// Results of running a model over labelled shapes.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct EvalReport {
    pub ap: ApReport,
    pub semantic: Option<SemanticReport>,
}

/// Segments every record with `model` and scores the outcome.
pub fn evaluate_model<T: partnet_autodiff::Real>(
    model: &Model<T>,
    records: &[ShapeRecord],
    variant: Variant,
    cfg: &InferenceConfig,
) -> Result<EvalReport> {
    let results = records.iter().map(|r| infer_segment(model, &r.cloud, variant, cfg)).collect::<Result<Vec<_>>>()?;
    let ap = ap_report(records, &results)?;
    let semantic = if model.config().semantic_classes == crate::data::SemanticClass::ALL.len() {
        Some(semantic_report(model, records, &results)?)
    } else {
        None
    };
    Ok(EvalReport { ap, semantic })
}

/// Per-category AP of segmentations aligned with `records`.
pub fn ap_report(records: &[ShapeRecord], results: &[SegmentationResult]) -> Result<ApReport> {
    if records.len() != results.len() {
        return Err(Error::Invalid("one result per record expected".into()));
    }
    let mut cats: BTreeMap<Category, Vec<usize>> = BTreeMap::new();
    for (i, r) in records.iter().enumerate() {
        cats.entry(r.category).or_default().push(i);
    }
    if cats.is_empty() {
        return Err(Error::Invalid("no shapes to evaluate".into()));
    }
    let mut categories = Vec::new();
    let mut matches = Vec::new();
    for (cat, idx) in &cats {
        let preds: Vec<Detection> = idx.iter().flat_map(|&i| detections(&results[i], i)).collect();
        let gts: Vec<GtPart> = idx.iter().flat_map(|&i| ground_truth_parts(&records[i], i)).collect();
        let mut ap = Vec::new();
        for &t in &AP_THRESHOLDS {
            let out = average_precision(&preds, &gts, t)?;
            matches.extend(out.matches.iter().map(|m| MatchLog {
                category: cat.to_string(),
                threshold: t,
                shape: m.shape,
                pred: m.pred,
                gt: m.gt,
                iou: m.iou,
            }));
            ap.push(out.ap);
        }
        categories.push(CategoryAp { category: cat.to_string(), shapes: idx.len(), ap });
    }
    let mean = (0..AP_THRESHOLDS.len()).map(|t| categories.iter().map(|c| c.ap[t]).sum::<f64>() / categories.len() as f64).collect();
    Ok(ApReport { thresholds: AP_THRESHOLDS.to_vec(), categories, mean, matches })
}

fn semantic_report<T: partnet_autodiff::Real>(model: &Model<T>, records: &[ShapeRecord], results: &[SegmentationResult]) -> Result<SemanticReport> {
    let k = model.config().semantic_classes;
    let (mut correct_points, mut points, mut correct_leaves, mut leaves) = (0usize, 0usize, 0usize, 0usize);
    let mut per_cat: BTreeMap<Category, Vec<(Vec<usize>, Vec<usize>)>> = BTreeMap::new();
    for (record, result) in records.iter().zip(results) {
        let part_labels = predict_leaf_semantics(result, model, k)?;
        let gt = record.semantic_labels();
        let pred: Vec<usize> = result.instance_id.iter().map(|&p| part_labels[p]).collect();
        correct_points += pred.iter().zip(&gt).filter(|(a, b)| a == b).count();
        points += gt.len();
        let row_of: std::collections::HashMap<usize, usize> = record.cloud.orig_index().iter().enumerate().map(|(r, &o)| (o, r)).collect();
        for (part, &label) in result.parts.iter().zip(&part_labels) {
            let mut counts = vec![0usize; k];
            for o in &part.point_ids {
                counts[gt[row_of[o]]] += 1;
            }
            let majority = crate::nets::argmax(&counts.iter().map(|&c| c as f64).collect::<Vec<_>>());
            correct_leaves += usize::from(majority == label);
            leaves += 1;
        }
        per_cat.entry(record.category).or_default().push((pred, gt));
    }
    let mut iou = BTreeMap::new();
    for (cat, shapes) in per_cat {
        let classes: Vec<usize> = cat.classes().iter().map(|c| c.index()).collect();
        iou.insert(cat.to_string(), category_semantic_iou(&shapes, &classes)?);
    }
    Ok(SemanticReport {
        point_accuracy: correct_points as f64 / points.max(1) as f64,
        leaf_accuracy: correct_leaves as f64 / leaves.max(1) as f64,
        iou,
    })
}

/// One trained variant of an ablation run.
#[derive(Debug, Clone)]
pub struct AblationRun {
    pub variant: Variant,
    pub report: EvalReport,
    pub curve: Vec<IterationStats>,
    pub model: Model<f32>,
}

#[derive(Debug, Clone)]
pub struct AblationSuite {
    pub runs: Vec<AblationRun>,
}

/// Trains each variant from the same initialization on the same data and
/// seed, then evaluates it on `test`. `on_step` sees every optimizer step
/// of every variant.
pub fn run_ablation_suite(
    net: &NetConfig,
    train_set: &[TrainExample],
    test: &[ShapeRecord],
    variants: &[Variant],
    train_cfg: &TrainConfig,
    infer_cfg: &InferenceConfig,
    mut on_step: impl FnMut(Variant, &IterationStats) -> ControlFlow<()>,
) -> Result<AblationSuite> {
    if variants.is_empty() {
        return Err(Error::Invalid("no variants to run".into()));
    }
    let mut runs = Vec::new();
    for &variant in variants {
        let mut model: Model<f32> = Model::init(net.clone(), train_cfg.seed)?;
        let mut adam = AdamState::new(model.store(), train_cfg.adam());
        let cfg = TrainConfig { variant, ..train_cfg.clone() };
        let curve = train(&mut model, &mut adam, train_set, &cfg, |s, _, _| Ok(on_step(variant, s)))?;
        let report = evaluate_model(&model, test, variant, infer_cfg)?;
        runs.push(AblationRun { variant, report, curve, model });
    }
    Ok(AblationSuite { runs })
}

impl AblationSuite {
    pub fn run(&self, variant: Variant) -> Option<&AblationRun> {
        self.runs.iter().find(|r| r.variant == variant)
    }

    /// `category,variant,AP25,AP50` rows, with a `mean` category per variant.
    pub fn csv(&self) -> String {
        let mut out = String::from("category,variant,AP25,AP50\n");
        for run in &self.runs {
            for c in &run.report.ap.categories {
                out.push_str(&format!("{},{},{:.6},{:.6}\n", c.category, run.variant, c.ap[0], c.ap[1]));
            }
            out.push_str(&format!("mean,{},{:.6},{:.6}\n", run.variant, run.report.ap.mean[0], run.report.ap.mean[1]));
        }
        out
    }

    pub fn json(&self) -> String {
        #[derive(Serialize)]
        struct Row<'a> {
            variant: String,
            report: &'a EvalReport,
            iterations: usize,
        }
        let rows: Vec<Row<'_>> = self
            .runs
            .iter()
            .map(|r| Row { variant: r.variant.to_string(), report: &r.report, iterations: r.curve.len() })
            .collect();
        serde_json::to_string_pretty(&rows).expect("report serializes")
    }
}
