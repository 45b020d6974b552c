//! Network blocks: the two point encoders, the child decoder, the node
//! classifier, the symmetry and semantic heads and the point segmenter.

use std::fmt;
use std::str::FromStr;

use partnet_autodiff::{ParamId, ParamStore, Real, Tape, Tensor, Var};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::{Error, Result};

/// Position and normal channels per point.
pub const INPUT_CHANNELS: usize = 6;
/// Node kinds in classifier output order.
pub const NODE_CLASSES: usize = 3;
/// Symmetry kind logits followed by anchor(3), direction(3), fold, step.
pub const SYMMETRY_OUTPUTS: usize = 3 + 8;
pub const NORM_EPS: f64 = 1e-5;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct NetConfig {
    /// Point-conv widths of the global shape encoder; the last is the
    /// part shape feature width.
    pub shape_encoder: Vec<usize>,
    /// Point-conv widths of the per-point encoder.
    pub point_encoder: Vec<usize>,
    /// Hidden point-conv widths of the segmenter (output layer has 2).
    pub segmenter: Vec<usize>,
    pub decoder_hidden: usize,
    pub classifier_hidden: usize,
    pub symmetry_hidden: usize,
    pub semantic_hidden: Vec<usize>,
    pub semantic_classes: usize,
    /// Per-point channel normalization inside point-conv stacks.
    pub normalize: bool,
    pub dropout: f64,
    /// Number of final segmenter hidden layers followed by dropout.
    pub dropout_layers: usize,
}

impl NetConfig {
    pub fn full(semantic_classes: usize) -> Self {
        NetConfig {
            shape_encoder: vec![64, 128, 128, 256, 256, 128],
            point_encoder: vec![64, 64, 128, 128],
            segmenter: vec![512, 256, 128, 128],
            decoder_hidden: 256,
            classifier_hidden: 256,
            symmetry_hidden: 256,
            semantic_hidden: vec![128, 128],
            semantic_classes,
            normalize: true,
            dropout: 0.2,
            dropout_layers: 2,
        }
    }

    /// Narrow clone with the same topology, for finite-difference checks.
    pub fn reduced(semantic_classes: usize) -> Self {
        NetConfig {
            shape_encoder: vec![5, 7, 4],
            point_encoder: vec![5, 3],
            segmenter: vec![6, 5, 4, 4],
            decoder_hidden: 6,
            classifier_hidden: 5,
            symmetry_hidden: 5,
            semantic_hidden: vec![4, 4],
            semantic_classes,
            normalize: true,
            dropout: 0.2,
            dropout_layers: 2,
        }
    }

    /// Width of the part shape and recursive context features.
    pub fn feature_dim(&self) -> usize {
        *self.shape_encoder.last().expect("validated")
    }

    pub fn node_dim(&self) -> usize {
        2 * self.feature_dim()
    }

    pub fn point_dim(&self) -> usize {
        *self.point_encoder.last().expect("validated")
    }

    pub fn validate(&self) -> Result<()> {
        let stacks = [&self.shape_encoder, &self.point_encoder, &self.segmenter, &self.semantic_hidden];
        if stacks.iter().any(|s| s.is_empty() || s.contains(&0)) {
            return Err(Error::Invalid("network widths must be non-empty and positive".into()));
        }
        if [self.decoder_hidden, self.classifier_hidden, self.symmetry_hidden].contains(&0) {
            return Err(Error::Invalid("hidden widths must be positive".into()));
        }
        if self.semantic_classes == 0 {
            return Err(Error::Invalid("semantic_classes must be at least 1".into()));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(Error::Invalid(format!("dropout {} outside [0, 1)", self.dropout)));
        }
        if self.dropout_layers > self.segmenter.len() {
            return Err(Error::Invalid("dropout_layers exceeds segmenter depth".into()));
        }
        Ok(())
    }

    /// Ordered `(name, shape)` table of every trainable tensor.
    pub fn param_table(&self) -> Vec<(String, Vec<usize>)> {
        let mut table = Vec::new();
        let mut dense = |prefix: &str, widths: &[usize], input: usize, norm_upto: usize| {
            let mut fan_in = input;
            for (i, &w) in widths.iter().enumerate() {
                table.push((format!("{prefix}.{i}.w"), vec![fan_in, w]));
                table.push((format!("{prefix}.{i}.b"), vec![w]));
                if i < norm_upto {
                    table.push((format!("{prefix}.{i}.gamma"), vec![w]));
                    table.push((format!("{prefix}.{i}.beta"), vec![w]));
                }
                fan_in = w;
            }
        };
        let norm = |n: usize| if self.normalize { n } else { 0 };
        dense("pn1", &self.shape_encoder, INPUT_CHANNELS, norm(self.shape_encoder.len()));
        dense("pn2", &self.point_encoder, INPUT_CHANNELS, norm(self.point_encoder.len()));
        let mut seg = self.segmenter.clone();
        seg.push(2);
        dense("seg", &seg, self.point_dim() + self.node_dim(), norm(self.segmenter.len()));
        let node = self.node_dim();
        dense("dec", &[self.decoder_hidden, node], node, 0);
        dense("cls", &[self.classifier_hidden, NODE_CLASSES], node, 0);
        dense("sym", &[self.symmetry_hidden, SYMMETRY_OUTPUTS], node, 0);
        let mut sem = self.semantic_hidden.clone();
        sem.push(self.semantic_classes);
        dense("sem", &sem, node, 0);
        table
    }

    pub fn param_count(&self) -> usize {
        self.param_table().iter().map(|(_, s)| s.iter().product::<usize>()).sum()
    }
}

/// Which features feed which heads.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Variant {
    /// Node feature = RCF ‖ PSF everywhere.
    Full,
    /// Node feature = PSF ‖ PSF everywhere.
    NoRcf,
    /// Classifier sees RCF ‖ RCF; everything else as `Full`.
    NoPsf,
}

impl Variant {
    pub const ALL: [Variant; 3] = [Variant::Full, Variant::NoRcf, Variant::NoPsf];

    pub fn name(self) -> &'static str {
        match self {
            Variant::Full => "full",
            Variant::NoRcf => "no_rcf",
            Variant::NoPsf => "no_psf",
        }
    }
}

impl fmt::Display for Variant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Variant {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Variant::ALL
            .into_iter()
            .find(|v| v.name() == s)
            .ok_or_else(|| Error::Invalid(format!("unknown variant '{s}' (expected full, no_rcf or no_psf)")))
    }
}

#[derive(Debug, Clone)]
struct Layer {
    w: ParamId,
    b: ParamId,
    norm: Option<(ParamId, ParamId)>,
}

#[derive(Debug, Clone)]
struct Layout {
    pn1: Vec<Layer>,
    pn2: Vec<Layer>,
    seg: Vec<Layer>,
    dec: Vec<Layer>,
    cls: Vec<Layer>,
    sym: Vec<Layer>,
    sem: Vec<Layer>,
}

impl Layout {
    fn resolve<T: Real>(cfg: &NetConfig, store: &ParamStore<T>) -> Result<Layout> {
        let find = |name: String| store.id(&name).ok_or_else(|| Error::Invalid(format!("missing parameter {name}")));
        let stack = |prefix: &str, count: usize| -> Result<Vec<Layer>> {
            (0..count)
                .map(|i| {
                    let norm = match store.id(&format!("{prefix}.{i}.gamma")) {
                        Some(g) => Some((g, find(format!("{prefix}.{i}.beta"))?)),
                        None => None,
                    };
                    Ok(Layer { w: find(format!("{prefix}.{i}.w"))?, b: find(format!("{prefix}.{i}.b"))?, norm })
                })
                .collect()
        };
        Ok(Layout {
            pn1: stack("pn1", cfg.shape_encoder.len())?,
            pn2: stack("pn2", cfg.point_encoder.len())?,
            seg: stack("seg", cfg.segmenter.len() + 1)?,
            dec: stack("dec", 2)?,
            cls: stack("cls", 2)?,
            sym: stack("sym", 2)?,
            sem: stack("sem", cfg.semantic_hidden.len() + 1)?,
        })
    }
}

/// Per-node features.
#[derive(Debug, Clone, Copy)]
pub struct NodeFeatures {
    /// Recursive context feature from the parent (the PSF at the root).
    pub rcf: Var,
    /// Part shape feature of the node's own points.
    pub psf: Var,
    /// Input of the decoder, symmetry, segmentation and semantic heads.
    pub node: Var,
    /// Input of the node classifier.
    pub classifier: Var,
}

/// All trainable parameters with their network configuration.
#[derive(Debug, Clone)]
pub struct Model<T: Real> {
    config: NetConfig,
    store: ParamStore<T>,
    layout: Layout,
}

impl<T: Real> Model<T> {
    /// Glorot-uniform weights, zero biases, unit norm scales.
    pub fn init(config: NetConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParamStore::new();
        for (name, shape) in config.param_table() {
            if shape.len() == 2 {
                store.insert_glorot(name, shape[0], shape[1], &mut rng)?;
            } else {
                let fill = if name.ends_with(".gamma") { T::one() } else { T::zero() };
                store.insert_filled(name, shape[0], fill)?;
            }
        }
        Self::from_store(config, store)
    }

    /// Wraps an existing store, checking it holds exactly the tensors
    /// `config` requires.
    pub fn from_store(config: NetConfig, store: ParamStore<T>) -> Result<Self> {
        config.validate()?;
        let table = config.param_table();
        if table.len() != store.len() {
            return Err(Error::Invalid(format!(
                "parameter store has {} tensors, network needs {}",
                store.len(),
                table.len()
            )));
        }
        for (name, shape) in &table {
            let id = store.id(name).ok_or_else(|| Error::Invalid(format!("missing parameter {name}")))?;
            let got = store.get(id).shape();
            if got != shape.as_slice() {
                return Err(Error::Invalid(format!("parameter {name} has shape {got:?}, expected {shape:?}")));
            }
        }
        let layout = Layout::resolve(&config, &store)?;
        Ok(Model { config, store, layout })
    }

    pub fn config(&self) -> &NetConfig {
        &self.config
    }

    pub fn store(&self) -> &ParamStore<T> {
        &self.store
    }

    pub fn store_mut(&mut self) -> &mut ParamStore<T> {
        &mut self.store
    }

    pub fn into_store(self) -> ParamStore<T> {
        self.store
    }

    pub fn cast<U: Real>(&self) -> Model<U> {
        Model { config: self.config.clone(), store: self.store.cast(), layout: self.layout.clone() }
    }

    /// Replaces every parameter value with zero.
    pub fn zeroed(&self) -> Self {
        let mut out = self.clone();
        for id in self.store.ids() {
            out.store.get_mut(id).data_mut().iter_mut().for_each(|v| *v = T::zero());
        }
        out
    }

    fn point_layer(&self, tape: &mut Tape<'_, T>, x: Var, layer: &Layer) -> Result<Var> {
        let (w, b) = (tape.param(layer.w), tape.param(layer.b));
        let mut h = tape.linear(x, w, Some(b))?;
        if let Some((g, beta)) = layer.norm {
            let (g, beta) = (tape.param(g), tape.param(beta));
            h = tape.point_norm(h, g, beta, NORM_EPS)?;
        }
        Ok(tape.relu(h)?)
    }

    fn dense(&self, tape: &mut Tape<'_, T>, x: Var, layer: &Layer, tanh: bool) -> Result<Var> {
        let (w, b) = (tape.param(layer.w), tape.param(layer.b));
        let y = tape.linear(x, w, Some(b))?;
        Ok(if tanh { tape.tanh(y)? } else { y })
    }

    fn check_width(&self, tape: &Tape<'_, T>, x: Var, rows: Option<usize>, cols: usize, what: &str) -> Result<()> {
        let (r, c) = tape.dims(x);
        if c != cols || rows.is_some_and(|n| n != r) || r == 0 {
            return Err(Error::Invalid(format!("{what}: expected {}x{cols}, got {r}x{c}", rows.map_or("N".into(), |n| n.to_string()))));
        }
        Ok(())
    }

    /// Global part shape feature `1 x F` of an `N x 6` point matrix.
    pub fn encode_shape(&self, tape: &mut Tape<'_, T>, points: Var) -> Result<Var> {
        self.check_width(tape, points, None, INPUT_CHANNELS, "encode_shape")?;
        let mut h = points;
        for layer in &self.layout.pn1 {
            h = self.point_layer(tape, h, layer)?;
        }
        Ok(tape.max_pool(h)?.0)
    }

    /// Per-point features `N x P`, rows in input order.
    pub fn encode_points(&self, tape: &mut Tape<'_, T>, points: Var) -> Result<Var> {
        self.check_width(tape, points, None, INPUT_CHANNELS, "encode_points")?;
        let mut h = points;
        for layer in &self.layout.pn2 {
            h = self.point_layer(tape, h, layer)?;
        }
        Ok(h)
    }

    /// Root node feature `PSF ‖ PSF`.
    pub fn root_feature(&self, tape: &mut Tape<'_, T>, psf: Var) -> Result<Var> {
        self.check_width(tape, psf, Some(1), self.config.feature_dim(), "root_feature")?;
        Ok(tape.concat(&[psf, psf])?)
    }

    /// Assembles the node features for `variant`. `rcf = None` marks the
    /// root, whose context is its own shape feature.
    pub fn node_features(&self, tape: &mut Tape<'_, T>, psf: Var, rcf: Option<Var>, variant: Variant) -> Result<NodeFeatures> {
        let f = self.config.feature_dim();
        self.check_width(tape, psf, Some(1), f, "node_features")?;
        let rcf = match rcf {
            Some(r) => {
                self.check_width(tape, r, Some(1), f, "node_features")?;
                r
            }
            None => psf,
        };
        let node = match variant {
            Variant::NoRcf => tape.concat(&[psf, psf])?,
            Variant::Full | Variant::NoPsf => tape.concat(&[rcf, psf])?,
        };
        let classifier = match variant {
            Variant::NoPsf => tape.concat(&[rcf, rcf])?,
            _ => node,
        };
        Ok(NodeFeatures { rcf, psf, node, classifier })
    }

    /// Left and right recursive context features of the children.
    pub fn decode_children(&self, tape: &mut Tape<'_, T>, node: Var) -> Result<(Var, Var)> {
        self.check_width(tape, node, Some(1), self.config.node_dim(), "decode_children")?;
        let h = self.dense(tape, node, &self.layout.dec[0], true)?;
        let out = self.dense(tape, h, &self.layout.dec[1], true)?;
        let f = self.config.feature_dim();
        Ok((tape.slice_cols(out, 0, f)?, tape.slice_cols(out, f, f)?))
    }

    /// Logits over {adjacency, symmetry, leaf}.
    pub fn classify_node(&self, tape: &mut Tape<'_, T>, input: Var) -> Result<Var> {
        self.check_width(tape, input, Some(1), self.config.node_dim(), "classify_node")?;
        let h = self.dense(tape, input, &self.layout.cls[0], true)?;
        self.dense(tape, h, &self.layout.cls[1], false)
    }

    /// `1 x 11`: three kind logits, then anchor, direction, fold, step.
    pub fn predict_symmetry(&self, tape: &mut Tape<'_, T>, node: Var) -> Result<Var> {
        self.check_width(tape, node, Some(1), self.config.node_dim(), "predict_symmetry")?;
        let h = self.dense(tape, node, &self.layout.sym[0], true)?;
        self.dense(tape, h, &self.layout.sym[1], false)
    }

    /// `N x 2` split logits for the node's points.
    ///
    /// The first layer acts on `[per_point ‖ node]`; its node half is the
    /// same for every row, so it is computed once and added to each row.
    pub fn segment_points(&self, tape: &mut Tape<'_, T>, per_point: Var, node: Var) -> Result<Var> {
        let p = self.config.point_dim();
        self.check_width(tape, per_point, None, p, "segment_points")?;
        self.check_width(tape, node, Some(1), self.config.node_dim(), "segment_points")?;
        let first = &self.layout.seg[0];
        let w = tape.param(first.w);
        let b = tape.param(first.b);
        let w_point = tape.slice_rows(w, 0, p)?;
        let w_node = tape.slice_rows(w, p, self.config.node_dim())?;
        let per_row = tape.linear(per_point, w_point, None)?;
        let shared = tape.linear(node, w_node, Some(b))?;
        let mut h = tape.add_row(per_row, shared)?;
        if let Some((g, beta)) = first.norm {
            let (g, beta) = (tape.param(g), tape.param(beta));
            h = tape.point_norm(h, g, beta, NORM_EPS)?;
        }
        h = tape.relu(h)?;
        let hidden = self.config.segmenter.len();
        let drop_from = hidden - self.config.dropout_layers;
        for i in 0..hidden {
            if i > 0 {
                h = self.point_layer(tape, h, &self.layout.seg[i])?;
            }
            if i >= drop_from {
                h = tape.dropout(h, self.config.dropout)?;
            }
        }
        self.dense(tape, h, &self.layout.seg[hidden], false)
    }

    /// Semantic class logits of a leaf.
    pub fn predict_semantic(&self, tape: &mut Tape<'_, T>, node: Var) -> Result<Var> {
        self.check_width(tape, node, Some(1), self.config.node_dim(), "predict_semantic")?;
        let mut h = node;
        let last = self.layout.sem.len() - 1;
        for (i, layer) in self.layout.sem.iter().enumerate() {
            h = self.dense(tape, h, layer, i < last)?;
        }
        Ok(h)
    }
}

/// Builds an `N x 6` point matrix on the tape.
pub fn points_input<T: Real>(tape: &mut Tape<'_, T>, features: &[T]) -> Result<Var> {
    if features.is_empty() || features.len() % INPUT_CHANNELS != 0 {
        return Err(Error::Invalid(format!("point features of length {} are not N x 6 with N >= 1", features.len())));
    }
    let n = features.len() / INPUT_CHANNELS;
    Ok(tape.input(&Tensor::matrix(n, INPUT_CHANNELS, features.to_vec())?, false)?)
}

/// Row-wise softmax of a logit vector.
pub fn softmax(logits: &[f64]) -> Vec<f64> {
    let m = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = logits.iter().map(|v| (v - m).exp()).collect();
    let z: f64 = e.iter().sum();
    e.into_iter().map(|v| v / z).collect()
}

/// Index of the largest value; ties go to the smallest index.
pub fn argmax(values: &[f64]) -> usize {
    let mut best = 0;
    for (i, v) in values.iter().enumerate() {
        if *v > values[best] {
            best = i;
        }
    }
    best
}
