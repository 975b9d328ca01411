//! Self-reflection: graph-propagated node features `P_sym · F(V) · Θ` with a
//! learned `Θ`, optimised so the refined partitions serve every current class.

use std::collections::BTreeSet;

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::digraph::{self, OrientedGraph};
use crate::error::{HpptError, Result};
use crate::model::train::binary_iou;
use crate::model::{EncodedSet, ParamKey, ToyModel, Trainable};
use crate::prompt_tree::{row_major, ClassId, NodeId, ParsingTree};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RefineConfig {
    pub gamma: f64,
    pub alpha: f64,
    pub learning_rate: f64,
    pub steps: usize,
    /// Self-loop weight added to every vertex before row normalisation.
    pub self_loop: f64,
    pub tol: f64,
    pub max_iter: usize,
    /// Training samples used for the refinement objective; 0 means all.
    pub samples: usize,
    pub max_halvings: usize,
}

impl Default for RefineConfig {
    fn default() -> Self {
        RefineConfig {
            gamma: 0.05,
            alpha: 0.001,
            learning_rate: 0.01,
            steps: 10,
            self_loop: 1.0,
            tol: digraph::DEFAULT_TOL,
            max_iter: 200_000,
            samples: 16,
            max_halvings: 20,
        }
    }
}

impl RefineConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.gamma > 0.0 && self.gamma < 1.0) {
            return Err(HpptError::Config(format!("refine.gamma {} outside (0, 1)", self.gamma)));
        }
        if !(self.alpha > 0.0 && self.alpha < 1.0) {
            return Err(HpptError::Config(format!("refine.alpha {} outside (0, 1)", self.alpha)));
        }
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return Err(HpptError::Config("refine.learning_rate must be positive".into()));
        }
        if !(self.self_loop >= 0.0 && self.self_loop.is_finite()) {
            return Err(HpptError::Config("refine.self_loop must be non-negative".into()));
        }
        if !(self.tol > 0.0) || self.max_iter == 0 {
            return Err(HpptError::Config("refine.tol and refine.max_iter must be positive".into()));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct RefineState {
    pub theta: DMatrix<f64>,
    /// Row `i` is the row-major flattening of `vertex_order[i]`'s tokens.
    pub node_features: DMatrix<f64>,
    pub vertex_order: Vec<NodeId>,
    pub config: RefineConfig,
}

impl RefineState {
    /// `Θ = I` and the tree's current tokens as node features.
    pub fn from_tree(tree: &ParsingTree, config: RefineConfig) -> Self {
        let (u, b) = tree.token_shape();
        let vertex_order: Vec<NodeId> = tree.nodes().iter().map(|n| n.id).collect();
        let mut node_features = DMatrix::zeros(vertex_order.len(), u * b);
        for (i, n) in tree.nodes().iter().enumerate() {
            for (j, v) in row_major(&n.tokens).into_iter().enumerate() {
                node_features[(i, j)] = v;
            }
        }
        RefineState {
            theta: DMatrix::identity(u * b, u * b),
            node_features,
            vertex_order,
            config,
        }
    }
}

/// `P_sym · F · Θ`.
pub fn propagate_features(state: &RefineState, p_sym: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    let (v, d) = state.node_features.shape();
    if p_sym.shape() != (v, v) || state.theta.shape() != (d, d) {
        return Err(HpptError::Dimension(format!(
            "P_sym {:?}, features {:?}, theta {:?}",
            p_sym.shape(),
            state.node_features.shape(),
            state.theta.shape()
        )));
    }
    Ok(p_sym * &state.node_features * &state.theta)
}

/// Writes row `i` of `features` into the tokens of `vertex_order[i]`.
pub fn write_features(tree: &mut ParsingTree, vertex_order: &[NodeId], features: &DMatrix<f64>) -> Result<()> {
    let (u, b) = tree.token_shape();
    if features.shape() != (vertex_order.len(), u * b) {
        return Err(HpptError::Dimension(format!(
            "features {:?} for {} nodes of {u}x{b} tokens",
            features.shape(),
            vertex_order.len()
        )));
    }
    for (i, &id) in vertex_order.iter().enumerate() {
        let row: Vec<f64> = features.row(i).iter().copied().collect();
        tree.set_tokens(id, DMatrix::from_row_slice(u, b, &row))?;
    }
    Ok(())
}

/// The refinement loss as a function of `Θ`, with its analytic gradient.
pub struct RefineObjective<'a> {
    pub tree: &'a ParsingTree,
    pub model: &'a ToyModel,
    pub set: &'a EncodedSet,
    pub batch: Vec<usize>,
    pub classes: Vec<ClassId>,
    /// `P_sym · F`, fixed during optimisation.
    pub mixed: DMatrix<f64>,
    pub vertex_order: Vec<NodeId>,
}

impl RefineObjective<'_> {
    fn tree_for(&self, theta: &DMatrix<f64>) -> Result<ParsingTree> {
        let mut t = self.tree.clone();
        write_features(&mut t, &self.vertex_order, &(&self.mixed * theta))?;
        Ok(t)
    }

    pub fn loss(&self, theta: &DMatrix<f64>) -> Result<f64> {
        self.model.objective(&self.tree_for(theta)?, self.set, &self.batch, &self.classes)
    }

    pub fn loss_and_gradient(&self, theta: &DMatrix<f64>) -> Result<(f64, DMatrix<f64>)> {
        let t = self.tree_for(theta)?;
        let prompts: BTreeSet<NodeId> = self.vertex_order.iter().copied().collect();
        let (loss, grads) =
            self.model
                .objective_and_gradients(&t, self.set, &self.batch, &self.classes, &Trainable::prompts_only(prompts))?;
        let mut d_feat = DMatrix::zeros(self.mixed.nrows(), self.mixed.ncols());
        for (i, &id) in self.vertex_order.iter().enumerate() {
            if let Some(g) = grads.get(ParamKey::Prompt(id)) {
                for (j, v) in row_major(g).into_iter().enumerate() {
                    d_feat[(i, j)] = v;
                }
            }
        }
        Ok((loss, self.mixed.transpose() * d_feat))
    }
}

/// Max relative error `max|a - n| / max(‖a‖∞, ‖n‖∞)` between the analytic
/// gradient of `loss_fn` at `state.theta` and central differences.
pub fn finite_difference_check<F>(state: &RefineState, loss_fn: F, epsilon: f64) -> Result<f64>
where
    F: Fn(&DMatrix<f64>) -> Result<(f64, DMatrix<f64>)>,
{
    if !(epsilon > 0.0) {
        return Err(HpptError::Range(format!("epsilon must be positive, got {epsilon}")));
    }
    let (_, analytic) = loss_fn(&state.theta)?;
    let mut numeric = DMatrix::zeros(state.theta.nrows(), state.theta.ncols());
    let mut theta = state.theta.clone();
    for j in 0..theta.len() {
        let orig = theta[j];
        theta[j] = orig + epsilon;
        let plus = loss_fn(&theta)?.0;
        theta[j] = orig - epsilon;
        let minus = loss_fn(&theta)?.0;
        theta[j] = orig;
        numeric[j] = (plus - minus) / (2.0 * epsilon);
    }
    let scale = analytic.amax().max(numeric.amax()).max(f64::MIN_POSITIVE);
    Ok((analytic - numeric).amax() / scale)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RefineStep {
    pub step: usize,
    pub loss: f64,
    pub max_displacement: f64,
    pub learning_rate: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RefineReport {
    pub class: ClassId,
    pub residual: f64,
    pub iterations: usize,
    pub trace: Vec<RefineStep>,
    /// Max-norm change of every node's tokens, in vertex order.
    pub displacement: Vec<(NodeId, f64)>,
    /// Mean binary IoU over the objective's classes and samples, before and after.
    pub pre_iou: f64,
    pub post_iou: f64,
}

impl RefineReport {
    pub fn max_displacement_of(&self, nodes: &BTreeSet<NodeId>) -> f64 {
        self.displacement
            .iter()
            .filter(|(n, _)| nodes.contains(n))
            .fold(0.0, |m, (_, d)| m.max(*d))
    }
}

fn displacement(before: &DMatrix<f64>, after: &DMatrix<f64>) -> Vec<f64> {
    (0..before.nrows())
        .map(|i| (after.row(i) - before.row(i)).amax())
        .collect()
}

/// Propagation operator of the graph rooted at `new_leaf`.
pub fn propagation_for(tree: &ParsingTree, new_leaf: NodeId, config: &RefineConfig) -> Result<(OrientedGraph, DMatrix<f64>, digraph::StationaryDist)> {
    let g = digraph::orient_and_weight(tree, new_leaf, config.gamma)?;
    let t = digraph::transition_matrix_with_self_loops(&g, config.alpha, config.self_loop)?;
    let pi = digraph::stationary_distribution(&t, config.tol, config.max_iter)?;
    let p = digraph::propagation_matrix(&t, &pi)?;
    Ok((g, p, pi))
}

/// Refines every partition of `tree` with respect to the newly added `new_class`.
/// Returns the refined tree (same topology) and the optimisation trace.
pub fn self_reflect(
    tree: &ParsingTree,
    new_class: ClassId,
    set: &EncodedSet,
    model: &ToyModel,
    classes: &[ClassId],
    config: &RefineConfig,
) -> Result<(ParsingTree, RefineReport)> {
    config.validate()?;
    let leaf = tree.leaf(new_class)?;
    let (g, p_sym, pi) = propagation_for(tree, leaf, config)?;
    let state = RefineState::from_tree(tree, config.clone());
    debug_assert_eq!(g.vertex_order, state.vertex_order);
    let n = if config.samples == 0 {
        set.samples.len()
    } else {
        config.samples.min(set.samples.len())
    };
    let objective = RefineObjective {
        tree,
        model,
        set,
        batch: (0..n).collect(),
        classes: classes.to_vec(),
        mixed: &p_sym * &state.node_features,
        vertex_order: state.vertex_order.clone(),
    };
    let mut theta = state.theta.clone();
    let mut lr = config.learning_rate;
    let mut trace = Vec::with_capacity(config.steps + 1);
    let max_disp = |theta: &DMatrix<f64>| {
        displacement(&state.node_features, &(&objective.mixed * theta))
            .into_iter()
            .fold(0.0, f64::max)
    };
    let (mut loss, mut grad) = if config.steps > 0 {
        objective.loss_and_gradient(&theta)?
    } else {
        (objective.loss(&theta)?, DMatrix::zeros(0, 0))
    };
    if !loss.is_finite() {
        return Err(HpptError::Divergence { step: 0, loss });
    }
    trace.push(RefineStep {
        step: 0,
        loss,
        max_displacement: max_disp(&theta),
        learning_rate: lr,
    });
    for step in 1..=config.steps {
        let mut accepted = false;
        for _ in 0..=config.max_halvings {
            let candidate = &theta - &grad * lr;
            let (l, g) = objective.loss_and_gradient(&candidate)?;
            if !l.is_finite() {
                return Err(HpptError::Divergence { step, loss: l });
            }
            if l <= loss {
                theta = candidate;
                loss = l;
                grad = g;
                accepted = true;
                break;
            }
            lr *= 0.5;
        }
        trace.push(RefineStep {
            step,
            loss,
            max_displacement: max_disp(&theta),
            learning_rate: lr,
        });
        if !accepted {
            break;
        }
    }
    let refined_features = &objective.mixed * &theta;
    let mut refined = tree.clone();
    write_features(&mut refined, &state.vertex_order, &refined_features)?;
    let disp = displacement(&state.node_features, &refined_features);
    let mean_iou = |t: &ParsingTree| -> Result<f64> {
        let mut total = 0.0;
        for &c in classes {
            total += binary_iou(model, t, set, &objective.batch, c, 0.5)?;
        }
        Ok(total / classes.len().max(1) as f64)
    };
    let pre_iou = mean_iou(tree)?;
    let post_iou = mean_iou(&refined)?;
    Ok((
        refined,
        RefineReport {
            class: new_class,
            residual: pi.residual,
            iterations: pi.iterations,
            trace,
            displacement: state.vertex_order.iter().copied().zip(disp).collect(),
            pre_iou,
            post_iou,
        },
    ))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::ModelConfig;
    use crate::seeding;
    use crate::stream::{Image, LabelGrid};
    use rand::Rng;

    fn state_with(features: DMatrix<f64>) -> RefineState {
        let d = features.ncols();
        RefineState {
            theta: DMatrix::identity(d, d),
            node_features: features,
            vertex_order: Vec::new(),
            config: RefineConfig::default(),
        }
    }

    #[test]
    fn propagation_examples() {
        let f = DMatrix::from_fn(3, 2, |i, j| (i * 2 + j) as f64 + 0.5);
        let s = state_with(f.clone());
        assert_eq!(propagate_features(&s, &DMatrix::identity(3, 3)).unwrap(), f);
        let p = DMatrix::from_row_slice(3, 3, &[0.5, 0.25, 0.25, 0.25, 0.5, 0.25, 0.25, 0.25, 0.5]);
        let out = propagate_features(&s, &p).unwrap();
        for i in 0..3 {
            for j in 0..2 {
                let expect: f64 = (0..3).map(|k| p[(i, k)] * f[(k, j)]).sum();
                assert!((out[(i, j)] - expect).abs() < 1e-15);
            }
        }
        let zero = RefineState {
            theta: DMatrix::zeros(2, 2),
            ..s.clone()
        };
        assert!(propagate_features(&zero, &p).unwrap().iter().all(|v| *v == 0.0));
        assert!(matches!(propagate_features(&s, &DMatrix::identity(2, 2)), Err(HpptError::Dimension(_))));
    }

    #[test]
    fn quadratic_gradient_check() {
        let s = state_with(DMatrix::zeros(1, 3));
        let target = DMatrix::from_fn(3, 3, |i, j| (i as f64) - 0.5 * j as f64);
        let quad = |t: &DMatrix<f64>| {
            let diff = t - &target;
            Ok((diff.norm_squared(), diff * 2.0))
        };
        assert!(finite_difference_check(&s, quad, 1e-5).unwrap() < 1e-6);
        assert!(matches!(finite_difference_check(&s, quad, 0.0), Err(HpptError::Range(_))));
    }

    fn small_problem() -> (ToyModel, ParsingTree, EncodedSet) {
        let cfg = ModelConfig {
            b: 4,
            u: 2,
            ..ModelConfig::default()
        };
        let mut model = ToyModel::new(cfg, 2).unwrap();
        let mut tree = ParsingTree::new(2, 2, 4, &[(ClassId(1), 1)], 3).unwrap();
        tree.insert_leaf(ClassId(2), 2, 4).unwrap();
        for id in tree.nodes().iter().map(|n| n.id).collect::<Vec<_>>() {
            let mut rng = seeding::rng(id.0 as u64, 5);
            tree.set_tokens(id, DMatrix::from_fn(2, 4, |_, _| rng.random_range(-0.7..0.7))).unwrap();
        }
        model.add_head(ClassId(1), 0).unwrap();
        model.add_head(ClassId(2), 1).unwrap();
        let mut rng = seeding::rng(9, 9);
        let data: Vec<(Image, LabelGrid)> = (0..2)
            .map(|_| {
                let mut img = Image::zeros(3, 4, 4);
                img.data.iter_mut().for_each(|v| *v = rng.random_range(0.0..1.0));
                let mut lbl = LabelGrid::background(4, 4);
                lbl.labels.iter_mut().for_each(|l| *l = rng.random_range(0..3));
                (img, lbl)
            })
            .collect();
        let set = model.encode_set(data.iter().map(|(i, l)| (i, Some(l)))).unwrap();
        (model, tree, set)
    }

    #[test]
    fn refinement_gradient_matches_finite_differences() {
        let (model, tree, set) = small_problem();
        assert_eq!(tree.len(), 5);
        let cfg = RefineConfig {
            gamma: 0.5,
            alpha: 0.1,
            ..RefineConfig::default()
        };
        let (_, p, _) = propagation_for(&tree, tree.leaf(ClassId(2)).unwrap(), &cfg).unwrap();
        let mut state = RefineState::from_tree(&tree, cfg);
        let mut rng = seeding::rng(1, 1);
        state.theta += DMatrix::from_fn(8, 8, |_, _| rng.random_range(-0.1..0.1));
        let obj = RefineObjective {
            tree: &tree,
            model: &model,
            set: &set,
            batch: vec![0, 1],
            classes: vec![ClassId(1), ClassId(2)],
            mixed: &p * &state.node_features,
            vertex_order: state.vertex_order.clone(),
        };
        let err = finite_difference_check(&state, |t| obj.loss_and_gradient(t), 1e-6).unwrap();
        assert!(err < 1e-4, "relative error {err}");
    }

    #[test]
    fn refinement_is_monotone_and_keeps_topology() {
        let (model, tree, set) = small_problem();
        let cfg = RefineConfig {
            gamma: 0.5,
            alpha: 0.1,
            steps: 8,
            learning_rate: 5.0,
            ..RefineConfig::default()
        };
        let (refined, report) =
            self_reflect(&tree, ClassId(2), &set, &model, &[ClassId(1), ClassId(2)], &cfg).unwrap();
        assert_eq!(refined.edges(), tree.edges());
        assert_eq!(refined.len(), tree.len());
        for w in report.trace.windows(2) {
            assert!(w[1].loss <= w[0].loss);
        }
        assert!(report.trace.last().unwrap().loss < report.trace[0].loss);
    }

    #[test]
    fn zero_steps_is_pure_propagation() {
        let (model, tree, set) = small_problem();
        let cfg = RefineConfig {
            steps: 0,
            ..RefineConfig::default()
        };
        let leaf = tree.leaf(ClassId(2)).unwrap();
        let (refined, report) = self_reflect(&tree, ClassId(2), &set, &model, &[ClassId(1)], &cfg).unwrap();
        assert_eq!(report.trace.len(), 1);
        assert_eq!(refined.edges(), tree.edges());
        let (_, p, _) = propagation_for(&tree, leaf, &cfg).unwrap();
        let state = RefineState::from_tree(&tree, cfg);
        let expect = propagate_features(&state, &p).unwrap();
        assert_eq!(RefineState::from_tree(&refined, RefineConfig::default()).node_features, expect);
    }

    #[test]
    fn non_finite_loss_is_divergence() {
        let (model, mut tree, set) = small_problem();
        let leaf = tree.leaf(ClassId(1)).unwrap();
        tree.set_tokens(leaf, DMatrix::from_element(2, 4, f64::NAN)).unwrap();
        let cfg = RefineConfig::default();
        let err = self_reflect(&tree, ClassId(2), &set, &model, &[ClassId(1)], &cfg).unwrap_err();
        assert!(matches!(err, HpptError::Divergence { .. }), "{err}");
        assert!(err.to_string().contains("learning_rate"));
    }
}
