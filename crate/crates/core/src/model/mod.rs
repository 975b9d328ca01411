//! Miniature prompt-tuned segmenter: frozen patch encoder, residual decoder
//! layers with prompt cross-attention at three depths, and per-class
//! linear-logistic heads. Gradients are derived by hand for this fixed graph.

pub mod attention;
pub mod io;
pub mod optim;
pub mod train;

use std::collections::{BTreeMap, BTreeSet};
use std::sync::Arc;

use nalgebra::{DMatrix, RowDVector};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{HpptError, Result};
use crate::prompt_tree::{ClassId, NodeId, ParsingTree, PromptPartition};
use crate::seeding::{self, tags};
use crate::stream::{Image, LabelGrid};

use attention::{attention_backward, attention_forward, positional_encoding, AttentionCache};

/// Probabilities are clamped to `[EPS, 1 - EPS]` before the logarithm.
pub const PROB_EPS: f64 = 1e-7;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    /// Embedding width `b`.
    pub b: usize,
    /// Tokens per partition `u`.
    pub u: usize,
    /// Number of decoder layers `L`.
    pub layers: usize,
    /// 1-based insertion depths of (shared, n-part, distinct) partitions.
    pub depths: [usize; 3],
    pub n_max: usize,
    pub input_channels: usize,
    /// Half-width of the square encoder patch window.
    pub patch_radius: usize,
    pub encoder_scale: f64,
    pub decoder_init: f64,
    pub head_init: f64,
    /// Initial head probability; the bias starts at its logit.
    pub head_prior: f64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            b: 16,
            u: 4,
            layers: 3,
            depths: [1, 2, 3],
            n_max: 3,
            input_channels: 3,
            patch_radius: 1,
            encoder_scale: 0.6,
            decoder_init: 0.1,
            head_init: 0.1,
            head_prior: 0.05,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        let [l1, l2, l3] = self.depths;
        if self.b == 0 || self.u == 0 || self.n_max == 0 || self.input_channels == 0 {
            return Err(HpptError::Config("b, u, n_max and input_channels must be positive".into()));
        }
        if !(1 <= l1 && l1 < l2 && l2 < l3 && l3 <= self.layers) {
            return Err(HpptError::Config(format!(
                "need 1 <= l1 < l2 < l3 <= L, got depths {:?} with L = {}",
                self.depths, self.layers
            )));
        }
        if !(self.head_prior > 0.0 && self.head_prior < 1.0) {
            return Err(HpptError::Config("head_prior must lie in (0, 1)".into()));
        }
        Ok(())
    }

    pub fn patch_dim(&self) -> usize {
        let side = 2 * self.patch_radius + 1;
        self.input_channels * side * side
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct DecoderLayer {
    pub weight: DMatrix<f64>,
    pub bias: RowDVector<f64>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Head {
    pub weight: DMatrix<f64>,
    pub bias: f64,
}

#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct FrozenFlags {
    pub decoder: bool,
    pub heads: BTreeSet<ClassId>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ToyModel {
    pub config: ModelConfig,
    /// Frozen `patch_dim × b` projection.
    pub encoder_proj: DMatrix<f64>,
    pub layers: Vec<DecoderLayer>,
    pub heads: BTreeMap<ClassId, Head>,
    pub frozen: FrozenFlags,
}

#[derive(Clone, Debug, PartialEq)]
pub struct FeatureMap {
    pub features: DMatrix<f64>,
    pub height: usize,
    pub width: usize,
}

#[derive(Clone, Debug, PartialEq)]
pub struct MaskPrediction {
    pub per_class_prob: BTreeMap<ClassId, Vec<f64>>,
    pub fused_labels: Vec<u16>,
}

/// Encoder output of one sample, with its labels when known.
#[derive(Clone, Debug)]
pub struct EncodedSample {
    pub features: DMatrix<f64>,
    pub labels: Option<LabelGrid>,
}

impl EncodedSample {
    pub fn target(&self, class: ClassId) -> Result<Vec<f64>> {
        let labels = self
            .labels
            .as_ref()
            .ok_or_else(|| HpptError::MissingData("sample has no labels".into()))?;
        Ok(labels.labels.iter().map(|&l| f64::from(u8::from(l == class.0))).collect())
    }
}

#[derive(Clone, Debug)]
pub struct EncodedSet {
    pub height: usize,
    pub width: usize,
    pub pe: Arc<DMatrix<f64>>,
    pub samples: Vec<EncodedSample>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum ParamKey {
    LayerWeight(usize),
    LayerBias(usize),
    HeadWeight(ClassId),
    HeadBias(ClassId),
    Prompt(NodeId),
}

/// Which parameters receive gradients.
#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct Trainable {
    pub decoder: bool,
    pub heads: BTreeSet<ClassId>,
    pub prompts: BTreeSet<NodeId>,
}

impl Trainable {
    /// Everything used by `classes`: the first-episode trainable set.
    pub fn everything(tree: &ParsingTree, classes: &[ClassId]) -> Result<Self> {
        let mut prompts = BTreeSet::new();
        for &c in classes {
            prompts.extend(tree.path_for_class(c)?);
        }
        Ok(Trainable {
            decoder: true,
            heads: classes.iter().copied().collect(),
            prompts,
        })
    }

    /// The new leaf and head of `class` only.
    pub fn leaf_and_head(tree: &ParsingTree, class: ClassId) -> Result<Self> {
        Ok(Trainable {
            decoder: false,
            heads: [class].into(),
            prompts: [tree.leaf(class)?].into(),
        })
    }

    pub fn prompts_only(prompts: BTreeSet<NodeId>) -> Self {
        Trainable {
            decoder: false,
            heads: BTreeSet::new(),
            prompts,
        }
    }

    pub fn keys(&self, model: &ToyModel) -> Vec<ParamKey> {
        let mut keys = Vec::new();
        if self.decoder {
            for l in 0..model.layers.len() {
                keys.push(ParamKey::LayerWeight(l));
                keys.push(ParamKey::LayerBias(l));
            }
        }
        for &c in &self.heads {
            keys.push(ParamKey::HeadWeight(c));
            keys.push(ParamKey::HeadBias(c));
        }
        keys.extend(self.prompts.iter().map(|&n| ParamKey::Prompt(n)));
        keys
    }
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct Gradients(pub BTreeMap<ParamKey, DMatrix<f64>>);

impl Gradients {
    fn add(&mut self, key: ParamKey, g: DMatrix<f64>) {
        match self.0.get_mut(&key) {
            Some(acc) => *acc += g,
            None => {
                self.0.insert(key, g);
            }
        }
    }

    pub fn get(&self, key: ParamKey) -> Option<&DMatrix<f64>> {
        self.0.get(&key)
    }

    pub fn merge(&mut self, other: Gradients) {
        for (k, g) in other.0 {
            self.add(k, g);
        }
    }

    pub fn max_abs(&self) -> f64 {
        self.0.values().flat_map(|g| g.iter()).fold(0.0, |m, v| m.max(v.abs()))
    }
}

struct LayerCache {
    input: DMatrix<f64>,
    act: DMatrix<f64>,
    attn: Option<AttentionCache>,
}

struct Segment {
    first: usize,
    caches: Vec<LayerCache>,
    out: DMatrix<f64>,
}

struct SampleTrace {
    stage0: Segment,
    stage1: BTreeMap<usize, Segment>,
    stage2: BTreeMap<ClassId, Segment>,
    probs: BTreeMap<ClassId, Vec<f64>>,
}

/// Decoder nonlinearity, softsign `x / (1 + |x|)`.
fn activation(x: f64) -> f64 {
    x / (1.0 + x.abs())
}

fn sigmoid(z: f64) -> f64 {
    if z >= 0.0 {
        1.0 / (1.0 + (-z).exp())
    } else {
        let e = z.exp();
        e / (1.0 + e)
    }
}

/// Pixel-wise binary cross-entropy of `probs` against `target`, averaged over pixels.
pub fn bce(probs: &[f64], target: &[f64]) -> f64 {
    let total: f64 = probs
        .iter()
        .zip(target)
        .map(|(&p, &y)| {
            let p = p.clamp(PROB_EPS, 1.0 - PROB_EPS);
            -(y * p.ln() + (1.0 - y) * (1.0 - p).ln())
        })
        .sum();
    total / probs.len() as f64
}

/// Per pixel, the class with the highest probability if it exceeds `tau`,
/// otherwise background (0). Ties go to the smallest class id.
pub fn fuse(predictions: &BTreeMap<ClassId, Vec<f64>>, tau: f64) -> Result<Vec<u16>> {
    if predictions.is_empty() {
        return Err(HpptError::Argument("fuse needs at least one class".into()));
    }
    if !(0.0..=1.0).contains(&tau) {
        return Err(HpptError::Range(format!("tau {tau} outside [0, 1]")));
    }
    let n = predictions.values().next().map(Vec::len).unwrap_or(0);
    if predictions.values().any(|p| p.len() != n) {
        return Err(HpptError::Dimension("probability vectors differ in length".into()));
    }
    let mut labels = vec![0u16; n];
    let mut best = vec![f64::NEG_INFINITY; n];
    for (class, probs) in predictions {
        for (px, &p) in probs.iter().enumerate() {
            if p > best[px] {
                best[px] = p;
                if p > tau {
                    labels[px] = class.0;
                } else {
                    labels[px] = 0;
                }
            }
        }
    }
    Ok(labels)
}

/// `F + softmax((F + pe) Pᵀ / √b) P` for a single partition.
pub fn cross_attention_layer(f: &FeatureMap, p: &PromptPartition) -> Result<FeatureMap> {
    let b = f.features.ncols();
    if p.tokens.ncols() != b || f.features.nrows() != f.height * f.width {
        return Err(HpptError::Dimension(format!(
            "features {:?} ({}x{}) vs tokens {:?}",
            f.features.shape(),
            f.height,
            f.width,
            p.tokens.shape()
        )));
    }
    let pe = positional_encoding(f.height, f.width, b);
    let (out, _) = attention_forward(&f.features, &pe, &p.tokens);
    Ok(FeatureMap {
        features: &f.features + out,
        height: f.height,
        width: f.width,
    })
}

fn uniform_matrix(rng: &mut impl Rng, rows: usize, cols: usize, scale: f64) -> DMatrix<f64> {
    DMatrix::from_fn(rows, cols, |_, _| rng.random_range(-scale..=scale))
}

impl ToyModel {
    pub fn new(config: ModelConfig, seed: u64) -> Result<Self> {
        Self::with_seeds(config, seed, seed)
    }

    /// Encoder drawn from `encoder_seed`, decoder from `decoder_seed`, so models
    /// can share one frozen encoder yet start from different decoders.
    pub fn with_seeds(config: ModelConfig, encoder_seed: u64, decoder_seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = seeding::rng(encoder_seed, tags::MODEL);
        let encoder_proj = uniform_matrix(&mut rng, config.patch_dim(), config.b, config.encoder_scale);
        let mut rng = seeding::rng(decoder_seed, tags::DECODER);
        let layers = (0..config.layers)
            .map(|_| DecoderLayer {
                weight: uniform_matrix(&mut rng, config.b, config.b, config.decoder_init),
                bias: RowDVector::zeros(config.b),
            })
            .collect();
        Ok(ToyModel {
            config,
            encoder_proj,
            layers,
            heads: BTreeMap::new(),
            frozen: FrozenFlags::default(),
        })
    }

    /// Adds a freshly initialised head; existing heads are rejected.
    pub fn add_head(&mut self, class: ClassId, seed: u64) -> Result<()> {
        if self.heads.contains_key(&class) {
            return Err(HpptError::Conflict(format!("head for class {class} already exists")));
        }
        let mut rng = seeding::rng(seed, tags::HEAD ^ (u64::from(class.0) << 8));
        let weight = uniform_matrix(&mut rng, self.config.b, 1, self.config.head_init);
        let bias = (self.config.head_prior / (1.0 - self.config.head_prior)).ln();
        self.heads.insert(class, Head { weight, bias });
        Ok(())
    }

    pub fn head(&self, class: ClassId) -> Result<&Head> {
        self.heads
            .get(&class)
            .ok_or_else(|| HpptError::NotFound(format!("no head for class {class}")))
    }

    /// Freezes the decoder and every existing head.
    pub fn freeze_all(&mut self) {
        self.frozen.decoder = true;
        self.frozen.heads.extend(self.heads.keys().copied());
    }

    pub fn check_trainable(&self, trainable: &Trainable) -> Result<()> {
        if trainable.decoder && self.frozen.decoder {
            return Err(HpptError::Conflict("decoder is frozen".into()));
        }
        for c in &trainable.heads {
            if self.frozen.heads.contains(c) {
                return Err(HpptError::Conflict(format!("head of class {c} is frozen")));
            }
            self.head(*c)?;
        }
        Ok(())
    }

    fn patches(&self, image: &Image) -> Result<DMatrix<f64>> {
        if image.channels != self.config.input_channels {
            return Err(HpptError::Dimension(format!(
                "image has {} channels, encoder expects {}",
                image.channels, self.config.input_channels
            )));
        }
        let (h, w) = (image.height, image.width);
        let r = self.config.patch_radius as isize;
        let side = (2 * r + 1) as usize;
        Ok(DMatrix::from_fn(h * w, self.config.patch_dim(), |n, j| {
            let c = j / (side * side);
            let (dy, dx) = (((j / side) % side) as isize - r, (j % side) as isize - r);
            let (y, x) = ((n / w) as isize + dy, (n % w) as isize + dx);
            if y < 0 || x < 0 || y >= h as isize || x >= w as isize {
                0.0
            } else {
                (f64::from(image.get(c, y as usize, x as usize)) - 0.5) * 2.0
            }
        }))
    }

    /// Frozen encoder: `tanh(patches(x) · W_enc)`.
    pub fn encode(&self, image: &Image) -> Result<FeatureMap> {
        let mut features = self.patches(image)? * &self.encoder_proj;
        features.apply(|v| *v = v.tanh());
        Ok(FeatureMap {
            features,
            height: image.height,
            width: image.width,
        })
    }

    pub fn encode_set<'a>(
        &self,
        samples: impl IntoIterator<Item = (&'a Image, Option<&'a LabelGrid>)>,
    ) -> Result<EncodedSet> {
        let mut out = Vec::new();
        let mut shape = None;
        for (image, labels) in samples {
            let dims = (image.height, image.width);
            if *shape.get_or_insert(dims) != dims {
                return Err(HpptError::Dimension("samples differ in size".into()));
            }
            out.push(EncodedSample {
                features: self.encode(image)?.features,
                labels: labels.cloned(),
            });
        }
        let (height, width) = shape.unwrap_or((0, 0));
        Ok(EncodedSet {
            height,
            width,
            pe: Arc::new(positional_encoding(height, width, self.config.b)),
            samples: out,
        })
    }

    fn run_segment(
        &self,
        input: DMatrix<f64>,
        layers: std::ops::Range<usize>,
        prompt_layer: usize,
        prompt: &DMatrix<f64>,
        pe: &DMatrix<f64>,
    ) -> Segment {
        let first = layers.start;
        let mut caches = Vec::with_capacity(layers.len());
        let mut f = input;
        for l in layers {
            let layer = &self.layers[l];
            let mut act = &f * &layer.weight;
            for (mut col, &b) in act.column_iter_mut().zip(layer.bias.iter()) {
                col.apply(|v| *v = activation(*v + b));
            }
            let g = &f + &act;
            let (next, attn) = if l == prompt_layer {
                let (out, cache) = attention_forward(&g, pe, prompt);
                (g + out, Some(cache))
            } else {
                (g, None)
            };
            caches.push(LayerCache { input: f, act, attn });
            f = next;
        }
        Segment { first, caches, out: f }
    }

    /// Returns the gradient w.r.t. the segment input when `need_input` is set.
    #[allow(clippy::too_many_arguments)]
    fn backward_segment(
        &self,
        seg: &Segment,
        d_out: DMatrix<f64>,
        prompt: &DMatrix<f64>,
        prompt_key: Option<ParamKey>,
        decoder: bool,
        need_input: bool,
        grads: &mut Gradients,
    ) -> Option<DMatrix<f64>> {
        let mut d = d_out;
        let mut attention_done = false;
        for (offset, cache) in seg.caches.iter().enumerate().rev() {
            if attention_done && !decoder && !need_input {
                return None;
            }
            let l = seg.first + offset;
            let mut d_g = d;
            if let Some(attn) = &cache.attn {
                let (dg_attn, d_p) = attention_backward(attn, prompt, &d_g, prompt_key.is_some());
                if let (Some(key), Some(d_p)) = (prompt_key, d_p) {
                    grads.add(key, d_p);
                }
                d_g += dg_attn;
                attention_done = true;
                if !decoder && !need_input {
                    return None;
                }
            }
            let mut d_z = d_g.clone();
            d_z.zip_apply(&cache.act, |dz, a| *dz *= (1.0 - a.abs()).powi(2));
            if decoder {
                grads.add(ParamKey::LayerWeight(l), cache.input.tr_mul(&d_z));
                grads.add(ParamKey::LayerBias(l), DMatrix::from_row_slice(1, d_z.ncols(), d_z.row_sum().as_slice()));
            }
            d = d_g + &d_z * self.layers[l].weight.transpose();
        }
        need_input.then_some(d)
    }

    fn stage_bounds(&self) -> ([usize; 3], [std::ops::Range<usize>; 3]) {
        let [l1, l2, l3] = self.config.depths;
        let prompt_layers = [l1 - 1, l2 - 1, l3 - 1];
        (prompt_layers, [0..l1, l1..l2, l2..self.config.layers])
    }

    fn trace(
        &self,
        tree: &ParsingTree,
        features: &DMatrix<f64>,
        pe: &DMatrix<f64>,
        classes: &[ClassId],
    ) -> Result<SampleTrace> {
        self.check_tree(tree)?;
        let (prompt_layers, ranges) = self.stage_bounds();
        let root = tree.root();
        let stage0 = self.run_segment(features.clone(), ranges[0].clone(), prompt_layers[0], tree.tokens(root)?, pe);
        let mut stage1 = BTreeMap::new();
        let mut stage2 = BTreeMap::new();
        let mut probs = BTreeMap::new();
        for &c in classes {
            let [_, mid, leaf] = tree.path_for_class(c)?;
            let head = self.head(c)?;
            let k = tree.part_count(c)?;
            if !stage1.contains_key(&k) {
                let seg = self.run_segment(
                    stage0.out.clone(),
                    ranges[1].clone(),
                    prompt_layers[1],
                    tree.tokens(mid)?,
                    pe,
                );
                stage1.insert(k, seg);
            }
            let seg = self.run_segment(stage1[&k].out.clone(), ranges[2].clone(), prompt_layers[2], tree.tokens(leaf)?, pe);
            let logits = &seg.out * &head.weight;
            probs.insert(c, logits.iter().map(|&z| sigmoid(z + head.bias)).collect());
            stage2.insert(c, seg);
        }
        Ok(SampleTrace {
            stage0,
            stage1,
            stage2,
            probs,
        })
    }

    fn check_tree(&self, tree: &ParsingTree) -> Result<()> {
        let (u, b) = tree.token_shape();
        if b != self.config.b || u == 0 {
            return Err(HpptError::Dimension(format!(
                "tree tokens are {u}x{b}, model width is {}",
                self.config.b
            )));
        }
        Ok(())
    }

    /// Per-pixel probabilities of `class` on an already encoded sample.
    pub fn forward_encoded(
        &self,
        tree: &ParsingTree,
        features: &DMatrix<f64>,
        pe: &DMatrix<f64>,
        classes: &[ClassId],
    ) -> Result<BTreeMap<ClassId, Vec<f64>>> {
        Ok(self.trace(tree, features, pe, classes)?.probs)
    }

    /// Probability map `ŷ_c` for one image.
    pub fn hierarchical_forward(&self, tree: &ParsingTree, image: &Image, class: ClassId) -> Result<Vec<f64>> {
        let f = self.encode(image)?;
        let pe = positional_encoding(f.height, f.width, self.config.b);
        let mut probs = self.forward_encoded(tree, &f.features, &pe, &[class])?;
        Ok(probs.remove(&class).expect("requested class is present"))
    }

    pub fn predict(&self, tree: &ParsingTree, image: &Image, classes: &[ClassId], tau: f64) -> Result<MaskPrediction> {
        let f = self.encode(image)?;
        let pe = positional_encoding(f.height, f.width, self.config.b);
        let per_class_prob = self.forward_encoded(tree, &f.features, &pe, classes)?;
        let fused_labels = fuse(&per_class_prob, tau)?;
        Ok(MaskPrediction {
            per_class_prob,
            fused_labels,
        })
    }

    /// Loss `Σ_c mean BCE(ŷ_c, y_c)` over `classes` and the samples of `batch`
    /// (mean over samples), with gradients for the parameters in `trainable`.
    pub fn objective_and_gradients(
        &self,
        tree: &ParsingTree,
        set: &EncodedSet,
        batch: &[usize],
        classes: &[ClassId],
        trainable: &Trainable,
    ) -> Result<(f64, Gradients)> {
        if batch.is_empty() {
            return Err(HpptError::Argument("empty batch".into()));
        }
        if classes.is_empty() {
            return Err(HpptError::Argument("no classes in objective".into()));
        }
        let mut grads = Gradients::default();
        let mut loss = 0.0;
        let scale = 1.0 / batch.len() as f64;
        for &i in batch {
            let sample = set
                .samples
                .get(i)
                .ok_or_else(|| HpptError::NotFound(format!("sample {i}")))?;
            let (l, g) = self.sample_gradients(tree, sample, &set.pe, classes, trainable, scale)?;
            loss += l * scale;
            grads.merge(g);
        }
        Ok((loss, grads))
    }

    /// Single-class form of [`Self::objective_and_gradients`].
    pub fn loss_and_gradients(
        &self,
        tree: &ParsingTree,
        set: &EncodedSet,
        batch: &[usize],
        class: ClassId,
        trainable: &Trainable,
    ) -> Result<(f64, Gradients)> {
        self.objective_and_gradients(tree, set, batch, &[class], trainable)
    }

    pub fn objective(&self, tree: &ParsingTree, set: &EncodedSet, batch: &[usize], classes: &[ClassId]) -> Result<f64> {
        let mut loss = 0.0;
        for &i in batch {
            let sample = &set.samples[i];
            let probs = self.forward_encoded(tree, &sample.features, &set.pe, classes)?;
            for (c, p) in &probs {
                loss += bce(p, &sample.target(*c)?);
            }
        }
        Ok(loss / batch.len() as f64)
    }

    fn sample_gradients(
        &self,
        tree: &ParsingTree,
        sample: &EncodedSample,
        pe: &DMatrix<f64>,
        classes: &[ClassId],
        trainable: &Trainable,
        scale: f64,
    ) -> Result<(f64, Gradients)> {
        let trace = self.trace(tree, &sample.features, pe, classes)?;
        let mut grads = Gradients::default();
        let root = tree.root();
        let root_trainable = trainable.prompts.contains(&root);
        let mut loss = 0.0;
        let mut d_stage1: BTreeMap<usize, DMatrix<f64>> = BTreeMap::new();
        for &c in classes {
            let target = sample.target(c)?;
            let probs = &trace.probs[&c];
            loss += bce(probs, &target);
            let [_, mid, leaf] = tree.path_for_class(c)?;
            let k = tree.part_count(c)?;
            let mid_trainable = trainable.prompts.contains(&mid);
            let leaf_trainable = trainable.prompts.contains(&leaf);
            let head_trainable = trainable.heads.contains(&c);
            let upstream = trainable.decoder || mid_trainable || root_trainable;
            if !(head_trainable || leaf_trainable || upstream) {
                continue;
            }
            let n = probs.len() as f64;
            let d_logit = DMatrix::from_iterator(
                probs.len(),
                1,
                probs.iter().zip(&target).map(|(&p, &y)| {
                    if (PROB_EPS..=1.0 - PROB_EPS).contains(&p) {
                        (p - y) * scale / n
                    } else {
                        0.0
                    }
                }),
            );
            let seg = &trace.stage2[&c];
            let head = self.head(c)?;
            if head_trainable {
                grads.add(ParamKey::HeadWeight(c), seg.out.tr_mul(&d_logit));
                grads.add(ParamKey::HeadBias(c), DMatrix::from_element(1, 1, d_logit.sum()));
            }
            if !(leaf_trainable || upstream) {
                continue;
            }
            let d_out = &d_logit * head.weight.transpose();
            let d_in = self.backward_segment(
                seg,
                d_out,
                tree.tokens(leaf)?,
                leaf_trainable.then_some(ParamKey::Prompt(leaf)),
                trainable.decoder,
                upstream,
                &mut grads,
            );
            if let Some(d_in) = d_in {
                match d_stage1.get_mut(&k) {
                    Some(acc) => *acc += d_in,
                    None => {
                        d_stage1.insert(k, d_in);
                    }
                }
            }
        }
        let mut d_stage0: Option<DMatrix<f64>> = None;
        for (k, d) in d_stage1 {
            let mid = tree.intermediate(k);
            let mid_trainable = trainable.prompts.contains(&mid);
            let d_in = self.backward_segment(
                &trace.stage1[&k],
                d,
                tree.tokens(mid)?,
                mid_trainable.then_some(ParamKey::Prompt(mid)),
                trainable.decoder,
                trainable.decoder || root_trainable,
                &mut grads,
            );
            if let Some(d_in) = d_in {
                d_stage0 = Some(match d_stage0 {
                    Some(acc) => acc + d_in,
                    None => d_in,
                });
            }
        }
        if let Some(d) = d_stage0 {
            self.backward_segment(
                &trace.stage0,
                d,
                tree.tokens(root)?,
                root_trainable.then_some(ParamKey::Prompt(root)),
                trainable.decoder,
                false,
                &mut grads,
            );
        }
        Ok((loss, grads))
    }

    /// Mutable flat view of a model or tree parameter.
    pub fn param_slice_mut<'a>(
        &'a mut self,
        tree: &'a mut ParsingTree,
        key: ParamKey,
    ) -> Result<&'a mut [f64]> {
        let missing = || HpptError::NotFound(format!("parameter {key:?}"));
        Ok(match key {
            ParamKey::LayerWeight(l) => self.layers.get_mut(l).ok_or_else(missing)?.weight.as_mut_slice(),
            ParamKey::LayerBias(l) => self.layers.get_mut(l).ok_or_else(missing)?.bias.as_mut_slice(),
            ParamKey::HeadWeight(c) => self.heads.get_mut(&c).ok_or_else(missing)?.weight.as_mut_slice(),
            ParamKey::HeadBias(c) => std::slice::from_mut(&mut self.heads.get_mut(&c).ok_or_else(missing)?.bias),
            ParamKey::Prompt(n) => tree.tokens_mut(n)?.as_mut_slice(),
        })
    }

    pub fn param_value(&self, tree: &ParsingTree, key: ParamKey) -> Result<Vec<f64>> {
        let missing = || HpptError::NotFound(format!("parameter {key:?}"));
        Ok(match key {
            ParamKey::LayerWeight(l) => self.layers.get(l).ok_or_else(missing)?.weight.as_slice().to_vec(),
            ParamKey::LayerBias(l) => self.layers.get(l).ok_or_else(missing)?.bias.as_slice().to_vec(),
            ParamKey::HeadWeight(c) => self.head(c)?.weight.as_slice().to_vec(),
            ParamKey::HeadBias(c) => vec![self.head(c)?.bias],
            ParamKey::Prompt(n) => tree.tokens(n)?.as_slice().to_vec(),
        })
    }
}
