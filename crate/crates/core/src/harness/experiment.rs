use std::collections::{BTreeMap, BTreeSet};
use std::path::Path;

use serde::{Deserialize, Serialize};
use serde_json::json;

use super::{ExperimentConfig, Strategy};
use crate::error::{HpptError, Result};
use crate::metrics::{self, IoUTable, IouCounts};
use crate::model::train::{self, EpisodeInput, EpisodeTrainReport, FreezeAudit, TrainReport};
use crate::model::{fuse, EncodedSet, ToyModel, Trainable};
use crate::prompt_tree::{ClassId, ParsingTree};
use crate::refine::RefineReport;
use crate::seeding::{self, tags};
use crate::stream::{generate_stream, Stream, Taxonomy};

/// Fused-label IoU per class, with intersections and unions summed over
/// every sample of `sets`.
pub fn evaluate(
    model: &ToyModel,
    tree: &ParsingTree,
    classes: &[ClassId],
    sets: &[&EncodedSet],
    tau: f64,
) -> Result<BTreeMap<ClassId, f64>> {
    let mut counts: BTreeMap<ClassId, IouCounts> = classes.iter().map(|&c| (c, IouCounts::default())).collect();
    for set in sets {
        for sample in &set.samples {
            let probs = model.forward_encoded(tree, &sample.features, &set.pe, classes)?;
            let fused = fuse(&probs, tau)?;
            let labels = sample
                .labels
                .as_ref()
                .ok_or_else(|| HpptError::MissingData("evaluation sample without labels".into()))?;
            for (&c, acc) in counts.iter_mut() {
                let pred: Vec<bool> = fused.iter().map(|&l| l == c.0).collect();
                acc.add(&pred, &labels.mask(c))?;
            }
        }
    }
    Ok(counts.into_iter().map(|(c, k)| (c, k.iou())).collect())
}

#[derive(Clone)]
struct Trained {
    model: ToyModel,
    tree: ParsingTree,
    report: EpisodeTrainReport,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RefineSummary {
    pub class: String,
    pub initial_loss: f64,
    pub final_loss: f64,
    pub steps: usize,
    pub pre_iou: f64,
    pub post_iou: f64,
    pub residual: f64,
    pub power_iterations: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpisodeSummary {
    pub episode: usize,
    pub taxonomy: BTreeMap<String, Vec<String>>,
    pub per_class_iou: BTreeMap<String, f64>,
    pub bwt: Option<f64>,
    pub fwt: Option<f64>,
    pub steps_to_threshold: BTreeMap<String, Option<usize>>,
    /// Max-norm change of old-class leaves across the episode.
    pub old_leaf_displacement: Option<f64>,
    pub refinements: Vec<RefineSummary>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Report {
    pub version: u32,
    pub strategy: Strategy,
    pub seed: u64,
    pub config: ExperimentConfig,
    /// Stream layout without seeds, used to check that reports are comparable.
    pub stream_signature: serde_json::Value,
    pub episodes: Vec<EpisodeSummary>,
    /// Mean over increments t ≥ 2.
    pub bwt: Option<f64>,
    pub fwt: Option<f64>,
    pub iou: BTreeMap<String, Vec<Option<f64>>>,
    pub ind_iou: BTreeMap<String, f64>,
    pub audits: Vec<FreezeAudit>,
    pub audits_passed: bool,
}

pub struct RunOutput {
    pub report: Report,
    pub table: IoUTable,
    pub trace: Vec<serde_json::Value>,
    pub model: ToyModel,
    pub tree: Option<ParsingTree>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SweepRow {
    pub gamma: f64,
    pub old_leaf_displacement: Option<f64>,
    pub bwt: Option<f64>,
    pub fwt: Option<f64>,
    pub mean_iou: f64,
}

/// One generated stream with its encodings and cached trainings shared by
/// every strategy: the first hierarchical episode and the per-episode
/// independent baselines.
#[derive(Clone)]
pub struct Experiment {
    pub config: ExperimentConfig,
    pub stream: Stream,
    encoder: ToyModel,
    train_sets: Vec<EncodedSet>,
    test_sets: Vec<EncodedSet>,
    part_counts: BTreeMap<ClassId, usize>,
    first: Option<Trained>,
    independent: BTreeMap<usize, Trained>,
}

impl Experiment {
    pub fn new(config: ExperimentConfig) -> Result<Self> {
        config.validate()?;
        let stream = generate_stream(&config.stream_config())?;
        let encoder = ToyModel::new(config.model.clone(), config.seed)?;
        let mut train_sets = Vec::new();
        let mut test_sets = Vec::new();
        for ep in &stream.episodes {
            train_sets.push(encoder.encode_set(ep.train.iter().map(|s| (&s.image, Some(&s.labels))))?);
            test_sets.push(encoder.encode_set(ep.test.iter().map(|s| (&s.image, Some(&s.labels))))?);
        }
        let part_counts = stream.classes.iter().map(|c| (c.id, c.part_count)).collect();
        Ok(Experiment {
            config,
            stream,
            encoder,
            train_sets,
            test_sets,
            part_counts,
            first: None,
            independent: BTreeMap::new(),
        })
    }

    pub fn episodes(&self) -> usize {
        self.stream.episodes.len()
    }

    fn episode_seed(&self, t: usize) -> u64 {
        seeding::derive_seed(self.config.seed, t as u64)
    }

    /// Same encoder as every other model, decoder from `tag`.
    fn fresh(&self, tag: u64) -> Result<(ToyModel, ParsingTree)> {
        let mut model = ToyModel::with_seeds(
            self.config.model.clone(),
            self.config.seed,
            seeding::derive_seed(self.config.seed, tag),
        )?;
        model.encoder_proj = self.encoder.encoder_proj.clone();
        let cfg = &self.config.model;
        let tree = ParsingTree::new(
            cfg.n_max,
            cfg.u,
            cfg.b,
            &[],
            seeding::derive_seed(self.config.seed, tags::TREE ^ tag),
        )?;
        Ok((model, tree))
    }

    fn classes(&self, t: usize) -> Vec<ClassId> {
        self.stream.episodes[t - 1].label_space.iter().copied().collect()
    }

    fn seen(&self, t: usize) -> Vec<ClassId> {
        let set: BTreeSet<ClassId> = self.stream.episodes[..t].iter().flat_map(|e| e.label_space.iter().copied()).collect();
        set.into_iter().collect()
    }

    fn eval_sets(&self, t: usize) -> Vec<&EncodedSet> {
        self.test_sets[..t].iter().collect()
    }

    pub fn taxonomy(&self, t: usize) -> Result<Taxonomy> {
        self.stream.taxonomy(t)
    }

    /// Model and tree after the first hierarchical episode.
    pub fn first_episode_state(&mut self) -> Result<(ToyModel, ParsingTree)> {
        let f = self.first_episode()?;
        Ok((f.model, f.tree))
    }

    fn first_episode(&mut self) -> Result<Trained> {
        if let Some(f) = &self.first {
            return Ok(f.clone());
        }
        let (mut model, mut tree) = self.fresh(tags::INDEPENDENT + 1)?;
        let label_space = self.stream.episodes[0].label_space.clone();
        let taxonomy = self.taxonomy(1)?;
        let input = EpisodeInput {
            index: 1,
            label_space: &label_space,
            taxonomy: &taxonomy,
            part_counts: &self.part_counts,
            train_set: &self.train_sets[0],
        };
        let report = train::train_episode(
            &mut model,
            &mut tree,
            &input,
            &self.config.train,
            &self.config.refine,
            self.config.seed,
        )?;
        let trained = Trained { model, tree, report };
        self.first = Some(trained.clone());
        Ok(trained)
    }

    /// Fresh model trained on episode `t` alone.
    fn independent(&mut self, t: usize) -> Result<Trained> {
        if t == 1 {
            return self.first_episode();
        }
        if let Some(r) = self.independent.get(&t) {
            return Ok(r.clone());
        }
        let (mut model, mut tree) = self.fresh(tags::INDEPENDENT + t as u64)?;
        tree.set_episode(t);
        let classes = self.classes(t);
        let r = train::train_initial(
            &mut model,
            &mut tree,
            &classes,
            &self.train_sets[t - 1],
            &self.part_counts,
            &self.config.train,
            self.episode_seed(t),
        )?;
        let mut tracked = r.clone();
        let new = self.taxonomy(t)?.new;
        tracked.steps_to_threshold.retain(|c, _| new.contains(c));
        model.freeze_all();
        let trained = Trained {
            model,
            tree,
            report: EpisodeTrainReport {
                episode: t,
                training: vec![tracked],
                ..EpisodeTrainReport::default()
            },
        };
        self.independent.insert(t, trained.clone());
        Ok(trained)
    }

    /// `IndIoU(c)` for every class, from the episode in which it is new.
    fn ind_baseline(&mut self) -> Result<BTreeMap<ClassId, f64>> {
        let mut out = BTreeMap::new();
        for t in 1..=self.episodes() {
            let new = self.taxonomy(t)?.new;
            if new.is_empty() {
                continue;
            }
            let ind = self.independent(t)?;
            let classes = self.classes(t);
            let iou = evaluate(&ind.model, &ind.tree, &classes, &self.eval_sets(t), self.config.tau)?;
            for c in new {
                out.insert(c, iou[&c]);
            }
        }
        Ok(out)
    }

    pub fn run(&mut self, strategy: Strategy) -> Result<RunOutput> {
        let ind = self.ind_baseline()?;
        let mut table = IoUTable::new(self.episodes());
        for (&c, &v) in &ind {
            table.set_ind(c, v)?;
        }
        let mut trace = Vec::new();
        let mut episodes = Vec::new();
        let mut audits = Vec::new();
        let (model, tree) = match strategy {
            Strategy::Hppt | Strategy::SeqFinetune => {
                let first = self.first_episode()?;
                let (mut model, mut tree) = (first.model, first.tree);
                for t in 1..=self.episodes() {
                    let mut report = first.report.clone();
                    let before = tree.clone();
                    if t >= 2 {
                        report = match strategy {
                            Strategy::Hppt => self.hppt_episode(&mut model, &mut tree, t)?,
                            _ => self.seq_episode(&mut model, &mut tree, t)?,
                        };
                    }
                    audits.extend(report.audits.iter().cloned());
                    let seen = self.seen(t);
                    let iou = evaluate(&model, &tree, &seen, &self.eval_sets(t), self.config.tau)?;
                    episodes.push(self.summarise(t, &iou, &report, &before, &tree, &mut table, &mut trace)?);
                }
                (model, Some(tree))
            }
            Strategy::Independent => {
                let mut last = None;
                for t in 1..=self.episodes() {
                    let r = self.independent(t)?;
                    let iou = evaluate(&r.model, &r.tree, &self.classes(t), &self.eval_sets(t), self.config.tau)?;
                    episodes.push(self.summarise(t, &iou, &r.report, &r.tree, &r.tree, &mut table, &mut trace)?);
                    last = Some(r);
                }
                let last = last.ok_or_else(|| HpptError::MissingData("stream has no episodes".into()))?;
                (last.model, Some(last.tree))
            }
            Strategy::Joint => {
                let (mut model, mut tree) = self.fresh(tags::JOINT)?;
                let classes = self.seen(self.episodes());
                let mut set = self.train_sets[0].clone();
                for s in &self.train_sets[1..] {
                    set.samples.extend(s.samples.iter().cloned());
                }
                let r = train::train_initial(
                    &mut model,
                    &mut tree,
                    &classes,
                    &set,
                    &self.part_counts,
                    &self.config.train,
                    seeding::derive_seed(self.config.seed, tags::JOINT),
                )?;
                let report = EpisodeTrainReport {
                    episode: 1,
                    training: vec![r],
                    ..EpisodeTrainReport::default()
                };
                for t in 1..=self.episodes() {
                    let iou = evaluate(&model, &tree, &self.seen(t), &self.eval_sets(t), self.config.tau)?;
                    let rep = if t == 1 { report.clone() } else { EpisodeTrainReport::default() };
                    episodes.push(self.summarise(t, &iou, &rep, &tree, &tree, &mut table, &mut trace)?);
                }
                (model, Some(tree))
            }
        };
        let mean = |xs: Vec<f64>| (!xs.is_empty()).then(|| xs.iter().sum::<f64>() / xs.len() as f64);
        let bwt = mean(episodes.iter().filter_map(|e| e.bwt).collect());
        let fwt = mean(episodes.iter().filter_map(|e| e.fwt).collect());
        let name = |c: ClassId| self.stream.name(c);
        let report = Report {
            version: 1,
            strategy,
            seed: self.config.seed,
            config: ExperimentConfig {
                out: None,
                strategy,
                ..self.config.clone()
            },
            stream_signature: self.stream.manifest().layout_signature(),
            episodes,
            bwt,
            fwt,
            iou: table.values.iter().map(|(&c, v)| (name(c), v.clone())).collect(),
            ind_iou: table.ind.iter().map(|(&c, &v)| (name(c), v)).collect(),
            audits_passed: audits.iter().all(FreezeAudit::passed),
            audits,
        };
        Ok(RunOutput {
            report,
            table,
            trace,
            model,
            tree,
        })
    }

    fn hppt_episode(&self, model: &mut ToyModel, tree: &mut ParsingTree, t: usize) -> Result<EpisodeTrainReport> {
        let label_space = self.stream.episodes[t - 1].label_space.clone();
        let taxonomy = self.taxonomy(t)?;
        let input = EpisodeInput {
            index: t,
            label_space: &label_space,
            taxonomy: &taxonomy,
            part_counts: &self.part_counts,
            train_set: &self.train_sets[t - 1],
        };
        train::train_episode(model, tree, &input, &self.config.train, &self.config.refine, self.config.seed)
    }

    /// Fine-tunes everything on episode `t`, over every class seen so far.
    fn seq_episode(&self, model: &mut ToyModel, tree: &mut ParsingTree, t: usize) -> Result<EpisodeTrainReport> {
        let seed = self.episode_seed(t);
        tree.set_episode(t);
        model.frozen = Default::default();
        let taxonomy = self.taxonomy(t)?;
        for &c in &taxonomy.new {
            tree.insert_leaf(c, self.part_counts[&c], seeding::derive_seed(seed, tags::LEAF + u64::from(c.0)))?;
            model.add_head(c, seed)?;
        }
        let seen = self.seen(t);
        let trainable = Trainable::everything(tree, &seen)?;
        let new: Vec<ClassId> = taxonomy.new.iter().copied().collect();
        let r = train::train(model, tree, &self.train_sets[t - 1], &seen, &trainable, &self.config.train, seed, &new)?;
        model.freeze_all();
        Ok(EpisodeTrainReport {
            episode: t,
            training: vec![r],
            ..EpisodeTrainReport::default()
        })
    }

    #[allow(clippy::too_many_arguments)]
    fn summarise(
        &self,
        t: usize,
        iou: &BTreeMap<ClassId, f64>,
        report: &EpisodeTrainReport,
        before: &ParsingTree,
        after: &ParsingTree,
        table: &mut IoUTable,
        trace: &mut Vec<serde_json::Value>,
    ) -> Result<EpisodeSummary> {
        let name = |c: &ClassId| self.stream.name(*c);
        for (&c, &v) in iou {
            table.set(t, c, v)?;
        }
        let taxonomy = self.taxonomy(t)?;
        let (bwt, fwt) = if t >= 2 {
            (metrics::bwt(table, t, &taxonomy).ok(), metrics::fwt(table, t, &taxonomy).ok())
        } else {
            (None, None)
        };
        let mut steps_to_threshold = BTreeMap::new();
        for r in &report.training {
            for (c, s) in &r.steps_to_threshold {
                steps_to_threshold.insert(name(c), *s);
            }
            trace_training(trace, t, r, &name);
        }
        let refinements = report
            .refinements
            .iter()
            .map(|rr| {
                trace_refinement(trace, t, rr, &name);
                RefineSummary {
                    class: name(&rr.class),
                    initial_loss: rr.trace.first().map(|s| s.loss).unwrap_or(f64::NAN),
                    final_loss: rr.trace.last().map(|s| s.loss).unwrap_or(f64::NAN),
                    steps: rr.trace.len().saturating_sub(1),
                    pre_iou: rr.pre_iou,
                    post_iou: rr.post_iou,
                    residual: rr.residual,
                    power_iterations: rr.iterations,
                }
            })
            .collect();
        let old_leaf_displacement = if t >= 2 {
            taxonomy
                .old
                .iter()
                .filter_map(|&c| {
                    let n = before.leaf(c).ok()?;
                    let (a, b) = (before.tokens(n).ok()?, after.tokens(n).ok()?);
                    Some((b - a).amax())
                })
                .reduce(f64::max)
        } else {
            None
        };
        let names = |s: &BTreeSet<ClassId>| s.iter().map(name).collect::<Vec<_>>();
        Ok(EpisodeSummary {
            episode: t,
            taxonomy: [
                ("new".to_string(), names(&taxonomy.new)),
                ("regular".to_string(), names(&taxonomy.regular)),
                ("old".to_string(), names(&taxonomy.old)),
            ]
            .into(),
            per_class_iou: iou.iter().map(|(c, &v)| (name(c), v)).collect(),
            bwt,
            fwt,
            steps_to_threshold,
            old_leaf_displacement,
            refinements,
        })
    }

    /// Hierarchical runs for each `gamma`, sharing the cached first episode.
    pub fn sweep_gamma(&mut self, gammas: &[f64]) -> Result<Vec<SweepRow>> {
        self.first_episode()?;
        self.ind_baseline()?;
        let base = self.clone();
        let rows: Vec<Result<SweepRow>> = {
            use rayon::prelude::*;
            gammas
                .par_iter()
                .map(|&gamma| {
                    let mut exp = base.clone();
                    exp.config.refine.gamma = gamma;
                    exp.config.validate()?;
                    let out = exp.run(Strategy::Hppt)?;
                    let last = out.report.episodes.last().expect("at least one episode");
                    let mean_iou = last.per_class_iou.values().sum::<f64>() / last.per_class_iou.len().max(1) as f64;
                    Ok(SweepRow {
                        gamma,
                        old_leaf_displacement: out
                            .report
                            .episodes
                            .iter()
                            .filter_map(|e| e.old_leaf_displacement)
                            .reduce(f64::max),
                        bwt: out.report.bwt,
                        fwt: out.report.fwt,
                        mean_iou,
                    })
                })
                .collect()
        };
        rows.into_iter().collect()
    }
}

fn trace_training(trace: &mut Vec<serde_json::Value>, t: usize, r: &TrainReport, name: &dyn Fn(&ClassId) -> String) {
    let classes: Vec<String> = r.classes.iter().map(name).collect();
    for (step, loss) in r.losses.iter().enumerate() {
        trace.push(json!({"kind": "train", "episode": t, "classes": classes, "step": step, "loss": loss}));
    }
    for (step, c, iou) in &r.iou_probe {
        trace.push(json!({"kind": "probe", "episode": t, "class": name(c), "step": step, "iou": iou}));
    }
}

fn trace_refinement(trace: &mut Vec<serde_json::Value>, t: usize, r: &RefineReport, name: &dyn Fn(&ClassId) -> String) {
    for s in &r.trace {
        trace.push(json!({
            "kind": "refine",
            "episode": t,
            "class": name(&r.class),
            "step": s.step,
            "loss": s.loss,
            "max_displacement": s.max_displacement,
            "learning_rate": s.learning_rate,
        }));
    }
}

/// Rayon pool capped by `HPPT_THREADS` when set.
pub fn thread_pool() -> Result<rayon::ThreadPool> {
    let mut builder = rayon::ThreadPoolBuilder::new();
    if let Ok(v) = std::env::var("HPPT_THREADS") {
        let n: usize = v
            .parse()
            .map_err(|_| HpptError::Config(format!("HPPT_THREADS must be a positive integer, got {v:?}")))?;
        if n == 0 {
            return Err(HpptError::Config("HPPT_THREADS must be positive".into()));
        }
        builder = builder.num_threads(n);
    }
    builder.build().map_err(|e| HpptError::Config(format!("thread pool: {e}")))
}

/// Writes `manifest.json`, `report.json`, `iou.csv`, `trace.jsonl` and, when
/// requested, `model.json` / `tree.json` under `dir`.
pub fn write_outputs(dir: &Path, experiment: &Experiment, output: &RunOutput) -> Result<()> {
    std::fs::create_dir_all(dir)?;
    let manifest = serde_json::to_string_pretty(&experiment.stream.manifest())?;
    std::fs::write(dir.join("manifest.json"), manifest + "\n")?;
    std::fs::write(dir.join("report.json"), serde_json::to_string_pretty(&output.report)? + "\n")?;
    let mut csv = Vec::new();
    output.table.write_csv(&mut csv, &|c| experiment.stream.name(c))?;
    std::fs::write(dir.join("iou.csv"), csv)?;
    let mut lines = String::new();
    for v in &output.trace {
        lines.push_str(&serde_json::to_string(v)?);
        lines.push('\n');
    }
    std::fs::write(dir.join("trace.jsonl"), lines)?;
    if experiment.config.save_model {
        std::fs::write(dir.join("model.json"), output.model.to_json()?)?;
        if let Some(tree) = &output.tree {
            std::fs::write(dir.join("tree.json"), tree.to_json()?)?;
        }
    }
    Ok(())
}
