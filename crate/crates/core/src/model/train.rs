//! Mini-batch training loops and the per-episode procedure.

use std::collections::{BTreeMap, BTreeSet};

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use super::optim::{Adam, AdamConfig};
use super::{EncodedSet, ToyModel, Trainable};
use crate::error::{HpptError, Result};
use crate::metrics::IouCounts;
use crate::prompt_tree::{ClassId, NodeId, ParsingTree};
use crate::refine::{self, RefineConfig, RefineReport};
use crate::seeding::{self, tags};
use crate::stream::Taxonomy;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub steps: usize,
    pub batch: usize,
    /// Training-split IoU is measured every `eval_every` steps (0 disables).
    pub eval_every: usize,
    pub threshold: f64,
    /// Samples used for the IoU probe; 0 means the whole split.
    pub eval_samples: usize,
    pub adam: AdamConfig,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            learning_rate: 0.05,
            steps: 200,
            batch: 4,
            eval_every: 10,
            threshold: 0.6,
            eval_samples: 16,
            adam: AdamConfig::default(),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return Err(HpptError::Config("train.learning_rate must be positive".into()));
        }
        if self.batch == 0 {
            return Err(HpptError::Config("train.batch must be positive".into()));
        }
        if !(0.0..=1.0).contains(&self.threshold) {
            return Err(HpptError::Config("train.threshold must lie in [0, 1]".into()));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct TrainReport {
    pub classes: Vec<ClassId>,
    pub steps: usize,
    pub initial_loss: f64,
    pub final_loss: f64,
    /// Mini-batch loss before each update.
    pub losses: Vec<f64>,
    /// Mean per-class BCE on the probe samples after training.
    pub per_class_loss: BTreeMap<ClassId, f64>,
    /// First probed step at which the class's training IoU reached the threshold.
    pub steps_to_threshold: BTreeMap<ClassId, Option<usize>>,
    /// `(step, class, iou)` probe results.
    pub iou_probe: Vec<(usize, ClassId, f64)>,
}

fn probe_indices(set: &EncodedSet, config: &TrainConfig) -> Vec<usize> {
    let n = if config.eval_samples == 0 {
        set.samples.len()
    } else {
        config.eval_samples.min(set.samples.len())
    };
    (0..n).collect()
}

/// Binary training IoU (`p > tau`) of `class` summed over `indices`.
pub fn binary_iou(
    model: &ToyModel,
    tree: &ParsingTree,
    set: &EncodedSet,
    indices: &[usize],
    class: ClassId,
    tau: f64,
) -> Result<f64> {
    Ok(binary_ious(model, tree, set, indices, &[class], tau)?[&class])
}

/// [`binary_iou`] for several classes with one forward pass per sample.
pub fn binary_ious(
    model: &ToyModel,
    tree: &ParsingTree,
    set: &EncodedSet,
    indices: &[usize],
    classes: &[ClassId],
    tau: f64,
) -> Result<BTreeMap<ClassId, f64>> {
    let mut counts: BTreeMap<ClassId, IouCounts> = classes.iter().map(|&c| (c, IouCounts::default())).collect();
    for &i in indices {
        let s = &set.samples[i];
        let probs = model.forward_encoded(tree, &s.features, &set.pe, classes)?;
        for (c, acc) in counts.iter_mut() {
            let pred: Vec<bool> = probs[c].iter().map(|&p| p > tau).collect();
            let gt: Vec<bool> = s.target(*c)?.iter().map(|&y| y > 0.5).collect();
            acc.add(&pred, &gt)?;
        }
    }
    Ok(counts.into_iter().map(|(c, k)| (c, k.iou())).collect())
}

/// Adam on the objective summed over `classes`; `track` classes are probed
/// for steps-to-threshold.
#[allow(clippy::too_many_arguments)]
pub fn train(
    model: &mut ToyModel,
    tree: &mut ParsingTree,
    set: &EncodedSet,
    classes: &[ClassId],
    trainable: &Trainable,
    config: &TrainConfig,
    seed: u64,
    track: &[ClassId],
) -> Result<TrainReport> {
    config.validate()?;
    model.check_trainable(trainable)?;
    if set.samples.is_empty() {
        return Err(HpptError::MissingData("no training samples".into()));
    }
    let keys = trainable.keys(model);
    let mut adam = Adam::new(config.learning_rate, config.adam);
    let mut rng = seeding::rng(seed, tags::BATCHES);
    let mut order: Vec<usize> = (0..set.samples.len()).collect();
    let mut cursor = order.len();
    let probe = probe_indices(set, config);
    let mut report = TrainReport {
        classes: classes.to_vec(),
        steps: config.steps,
        steps_to_threshold: track.iter().map(|&c| (c, None)).collect(),
        ..TrainReport::default()
    };
    let record_probe = |model: &ToyModel, tree: &ParsingTree, step: usize, report: &mut TrainReport| -> Result<()> {
        let pending: Vec<ClassId> = track
            .iter()
            .copied()
            .filter(|c| report.steps_to_threshold[c].is_none())
            .collect();
        if pending.is_empty() {
            return Ok(());
        }
        for (c, iou) in binary_ious(model, tree, set, &probe, &pending, 0.5)? {
            report.iou_probe.push((step, c, iou));
            if iou >= config.threshold {
                report.steps_to_threshold.insert(c, Some(step));
            }
        }
        Ok(())
    };
    if config.eval_every > 0 {
        record_probe(model, tree, 0, &mut report)?;
    }
    for step in 0..config.steps {
        let mut batch = Vec::with_capacity(config.batch);
        while batch.len() < config.batch.min(set.samples.len()) {
            if cursor == order.len() {
                order.shuffle(&mut rng);
                cursor = 0;
            }
            batch.push(order[cursor]);
            cursor += 1;
        }
        let (loss, grads) = model.objective_and_gradients(tree, set, &batch, classes, trainable)?;
        if !loss.is_finite() || grads.0.values().any(|g| g.iter().any(|v| !v.is_finite())) {
            return Err(HpptError::Divergence { step, loss });
        }
        report.losses.push(loss);
        for &key in &keys {
            if let Some(g) = grads.get(key) {
                let param = model.param_slice_mut(tree, key)?;
                adam.step(key, param, g.as_slice());
            }
        }
        let done = step + 1;
        if config.eval_every > 0 && done % config.eval_every == 0 {
            record_probe(model, tree, done, &mut report)?;
        }
    }
    report.initial_loss = report.losses.first().copied().unwrap_or(f64::NAN);
    report.final_loss = report.losses.last().copied().unwrap_or(f64::NAN);
    for &c in classes {
        report.per_class_loss.insert(c, model.objective(tree, set, &probe, &[c])?);
    }
    Ok(report)
}

/// Bit patterns of a parameter set, for byte-level freeze audits.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Snapshot(BTreeMap<String, Vec<u64>>);

fn bits(values: impl IntoIterator<Item = f64>) -> Vec<u64> {
    values.into_iter().map(f64::to_bits).collect()
}

impl Snapshot {
    pub fn model(model: &ToyModel, exclude_heads: &BTreeSet<ClassId>) -> Self {
        let mut map = BTreeMap::new();
        map.insert("encoder".to_string(), bits(model.encoder_proj.iter().copied()));
        for (l, layer) in model.layers.iter().enumerate() {
            map.insert(format!("layer{l}.weight"), bits(layer.weight.iter().copied()));
            map.insert(format!("layer{l}.bias"), bits(layer.bias.iter().copied()));
        }
        for (c, h) in &model.heads {
            if !exclude_heads.contains(c) {
                map.insert(format!("head{}", c.0), bits(h.weight.iter().copied().chain([h.bias])));
            }
        }
        Snapshot(map)
    }

    pub fn tree(tree: &ParsingTree, exclude: &BTreeSet<NodeId>) -> Self {
        Snapshot(
            tree.nodes()
                .iter()
                .filter(|n| !exclude.contains(&n.id))
                .map(|n| (format!("node{}", n.id.0), bits(n.tokens.iter().copied())))
                .collect(),
        )
    }

    /// Names of entries that differ or are missing on either side.
    pub fn diff(&self, other: &Snapshot) -> Vec<String> {
        let mut names: BTreeSet<&String> = self.0.keys().collect();
        names.extend(other.0.keys());
        names
            .into_iter()
            .filter(|k| self.0.get(*k) != other.0.get(*k))
            .cloned()
            .collect()
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FreezeAudit {
    pub episode: usize,
    pub stage: String,
    /// Parameters that changed although they should have been frozen.
    pub violations: Vec<String>,
}

impl FreezeAudit {
    pub fn passed(&self) -> bool {
        self.violations.is_empty()
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct EpisodeTrainReport {
    pub episode: usize,
    pub training: Vec<TrainReport>,
    pub refinements: Vec<RefineReport>,
    pub audits: Vec<FreezeAudit>,
}

/// Everything needed to run one episode of the hierarchical procedure.
pub struct EpisodeInput<'a> {
    pub index: usize,
    pub label_space: &'a BTreeSet<ClassId>,
    pub taxonomy: &'a Taxonomy,
    pub part_counts: &'a BTreeMap<ClassId, usize>,
    pub train_set: &'a EncodedSet,
}

fn part_count(part_counts: &BTreeMap<ClassId, usize>, c: ClassId) -> Result<usize> {
    part_counts
        .get(&c)
        .copied()
        .ok_or_else(|| HpptError::MissingData(format!("no part count for class {c}")))
}

/// Adds missing leaves and heads for `classes`, then trains decoder, heads and
/// every partition on their summed objective.
pub fn train_initial(
    model: &mut ToyModel,
    tree: &mut ParsingTree,
    classes: &[ClassId],
    set: &EncodedSet,
    part_counts: &BTreeMap<ClassId, usize>,
    config: &TrainConfig,
    seed: u64,
) -> Result<TrainReport> {
    for &c in classes {
        if tree.leaf(c).is_err() {
            tree.insert_leaf(c, part_count(part_counts, c)?, seeding::derive_seed(seed, tags::LEAF + u64::from(c.0)))?;
        }
        if model.head(c).is_err() {
            model.add_head(c, seed)?;
        }
    }
    let trainable = Trainable::everything(tree, classes)?;
    train(model, tree, set, classes, &trainable, config, seed, classes)
}

/// t = 1: joint training of decoder, heads and partitions on every class.
/// t ≥ 2: per new class, train its leaf and head only, then self-reflect.
/// Afterwards the decoder and all heads are frozen.
pub fn train_episode(
    model: &mut ToyModel,
    tree: &mut ParsingTree,
    input: &EpisodeInput<'_>,
    train_cfg: &TrainConfig,
    refine_cfg: &RefineConfig,
    seed: u64,
) -> Result<EpisodeTrainReport> {
    if input.index == 0 {
        return Err(HpptError::Range("episodes are 1-based".into()));
    }
    tree.set_episode(input.index);
    let classes: Vec<ClassId> = input.label_space.iter().copied().collect();
    let mut report = EpisodeTrainReport {
        episode: input.index,
        ..EpisodeTrainReport::default()
    };
    let episode_seed = seeding::derive_seed(seed, input.index as u64);
    if input.index == 1 {
        let r = train_initial(model, tree, &classes, input.train_set, input.part_counts, train_cfg, episode_seed)?;
        report.training.push(r);
        model.freeze_all();
        return Ok(report);
    }
    let model_before = Snapshot::model(model, &BTreeSet::new());
    for &c in &input.taxonomy.new {
        let leaf = tree.insert_leaf(
            c,
            part_count(input.part_counts, c)?,
            seeding::derive_seed(episode_seed, tags::LEAF + u64::from(c.0)),
        )?;
        model.add_head(c, episode_seed)?;
        let new_head: BTreeSet<ClassId> = [c].into();
        let leaf_set: BTreeSet<NodeId> = [leaf].into();
        let tree_before = Snapshot::tree(tree, &leaf_set);
        let model_mid = Snapshot::model(model, &new_head);
        let trainable = Trainable::leaf_and_head(tree, c)?;
        let class_seed = seeding::derive_seed(episode_seed, u64::from(c.0));
        let r = train(model, tree, input.train_set, &[c], &trainable, train_cfg, class_seed, &[c])?;
        report.training.push(r);
        let mut violations = Snapshot::tree(tree, &leaf_set).diff(&tree_before);
        violations.extend(Snapshot::model(model, &new_head).diff(&model_mid));
        report.audits.push(FreezeAudit {
            episode: input.index,
            stage: format!("new-class training {c}"),
            violations,
        });
        model.frozen.heads.insert(c);
        let model_pre_refine = Snapshot::model(model, &BTreeSet::new());
        let present: Vec<ClassId> = classes.iter().copied().filter(|&k| tree.leaf(k).is_ok()).collect();
        let (refined, rr) = refine::self_reflect(tree, c, input.train_set, model, &present, refine_cfg)?;
        *tree = refined;
        report.refinements.push(rr);
        report.audits.push(FreezeAudit {
            episode: input.index,
            stage: format!("self-reflection {c}"),
            violations: Snapshot::model(model, &BTreeSet::new()).diff(&model_pre_refine),
        });
    }
    let exclude: BTreeSet<ClassId> = input.taxonomy.new.clone();
    report.audits.push(FreezeAudit {
        episode: input.index,
        stage: "episode".into(),
        violations: Snapshot::model(model, &exclude).diff(&model_before),
    });
    model.freeze_all();
    Ok(report)
}
