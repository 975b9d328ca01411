//! Directed, decay-weighted view of a parsing tree rooted at a new-class leaf,
//! plus the teleporting transition matrix, its stationary distribution and the
//! symmetric propagation operator built from both.

use std::collections::BTreeMap;

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{HpptError, Result};
use crate::prompt_tree::{NodeId, ParsingTree};

pub const DEFAULT_TOL: f64 = 1e-12;
pub const DEFAULT_MAX_ITER: usize = 10_000;

#[derive(Clone, Debug, PartialEq)]
pub struct OrientedGraph {
    /// Matrix index `i` corresponds to `vertex_order[i]`.
    pub vertex_order: Vec<NodeId>,
    pub adjacency: DMatrix<f64>,
    pub root: NodeId,
    pub gamma: f64,
    /// Tree distance of every vertex from `root`, in vertex order.
    pub distances: Vec<usize>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct TransitionMatrix {
    pub matrix: DMatrix<f64>,
    pub alpha: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct StationaryDist {
    pub pi: DVector<f64>,
    pub residual: f64,
    pub iterations: usize,
}

fn check_open_unit(name: &str, value: f64) -> Result<()> {
    if value > 0.0 && value < 1.0 {
        Ok(())
    } else {
        Err(HpptError::Range(format!("{name} must lie in (0, 1), got {value}")))
    }
}

/// Orients every tree edge away from `new_leaf` and weights the edge into
/// `v` by `gamma^d(v, new_leaf)`.
pub fn orient_and_weight(tree: &ParsingTree, new_leaf: NodeId, gamma: f64) -> Result<OrientedGraph> {
    check_open_unit("gamma", gamma)?;
    tree.node(new_leaf)?;
    let n = tree.len();
    let vertex_order: Vec<NodeId> = tree.nodes().iter().map(|p| p.id).collect();
    let distances = vertex_order
        .iter()
        .map(|&v| tree.tree_distance(v, new_leaf))
        .collect::<Result<Vec<_>>>()?;
    let mut adjacency = DMatrix::zeros(n, n);
    for &(a, b) in tree.edges() {
        let (from, to) = if distances[a.0] < distances[b.0] { (a, b) } else { (b, a) };
        adjacency[(from.0, to.0)] = edge_weight(gamma, distances[to.0]);
    }
    Ok(OrientedGraph {
        vertex_order,
        adjacency,
        root: new_leaf,
        gamma,
        distances,
    })
}

#[inline]
pub fn edge_weight(gamma: f64, target_distance: usize) -> f64 {
    gamma.powi(target_distance as i32)
}

/// `T = (1-α) D⁻¹A' + (α/|V|) 𝟙`, where `A'` replaces every all-zero row of
/// the adjacency with the uniform row.
pub fn transition_matrix(g: &OrientedGraph, alpha: f64) -> Result<TransitionMatrix> {
    transition_matrix_with_self_loops(g, alpha, 0.0)
}

/// Same as [`transition_matrix`] after adding `self_loop · I` to the adjacency.
/// A self-loop weight of zero reproduces the plain operator.
pub fn transition_matrix_with_self_loops(
    g: &OrientedGraph,
    alpha: f64,
    self_loop: f64,
) -> Result<TransitionMatrix> {
    check_open_unit("alpha", alpha)?;
    if !(self_loop >= 0.0 && self_loop.is_finite()) {
        return Err(HpptError::Range(format!("self_loop must be finite and >= 0, got {self_loop}")));
    }
    let n = g.adjacency.nrows();
    let n_f = n as f64;
    let teleport = alpha / n_f;
    let mut matrix = DMatrix::zeros(n, n);
    for i in 0..n {
        let mut row: Vec<f64> = (0..n).map(|j| g.adjacency[(i, j)]).collect();
        row[i] += self_loop;
        let degree: f64 = row.iter().sum();
        if degree == 0.0 {
            row.iter_mut().for_each(|v| *v = 1.0 / n_f);
        } else {
            row.iter_mut().for_each(|v| *v /= degree);
        }
        for (j, v) in row.into_iter().enumerate() {
            matrix[(i, j)] = (1.0 - alpha) * v + teleport;
        }
    }
    Ok(TransitionMatrix { matrix, alpha })
}

/// Left power iteration from the uniform vector.
pub fn stationary_distribution(t: &TransitionMatrix, tol: f64, max_iter: usize) -> Result<StationaryDist> {
    let n = t.matrix.nrows();
    if n == 0 || t.matrix.ncols() != n {
        return Err(HpptError::Dimension(format!(
            "transition matrix must be square and non-empty, got {}x{}",
            n,
            t.matrix.ncols()
        )));
    }
    let tt = t.matrix.transpose();
    let mut pi = DVector::from_element(n, 1.0 / n as f64);
    let mut residual = f64::INFINITY;
    for iter in 1..=max_iter {
        let mut next = &tt * &pi;
        let total = next.sum();
        next /= total;
        residual = (&next - &pi).abs().sum();
        pi = next;
        if residual < tol {
            // For a stochastic T, ‖(π_{k+1} − π_k)ᵀT‖₁ ≤ ‖π_{k+1} − π_k‖₁.
            let final_residual = (&tt * &pi - &pi).abs().sum();
            return Ok(StationaryDist {
                pi,
                residual: final_residual.min(residual),
                iterations: iter,
            });
        }
    }
    Err(HpptError::Convergence { iterations: max_iter, residual })
}

/// `½(Π^{½} T Π^{-½} + Π^{-½} Tᵀ Π^{½})` with `Π = Diag(π)/‖π‖₁`.
pub fn propagation_matrix(t: &TransitionMatrix, pi: &StationaryDist) -> Result<DMatrix<f64>> {
    let n = t.matrix.nrows();
    if pi.pi.len() != n {
        return Err(HpptError::Dimension(format!(
            "stationary vector has length {}, transition matrix is {n}x{n}",
            pi.pi.len()
        )));
    }
    if let Some(bad) = pi.pi.iter().position(|&p| !(p > 0.0)) {
        return Err(HpptError::Degenerate(format!(
            "stationary probability at index {bad} is {} (must be > 0)",
            pi.pi[bad]
        )));
    }
    let norm = pi.pi.sum();
    let sqrt_p: Vec<f64> = pi.pi.iter().map(|&p| (p / norm).sqrt()).collect();
    let scaled = DMatrix::from_fn(n, n, |i, j| sqrt_p[i] * t.matrix[(i, j)] / sqrt_p[j]);
    Ok(DMatrix::from_fn(n, n, |i, j| 0.5 * (scaled[(i, j)] + scaled[(j, i)])))
}

/// Golden-file view of every matrix involved in one propagation, keyed by node id.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GraphDump {
    pub vertex_order: Vec<NodeId>,
    pub root: NodeId,
    pub gamma: f64,
    pub alpha: f64,
    pub self_loop: f64,
    pub adjacency: BTreeMap<String, BTreeMap<String, f64>>,
    pub transition: BTreeMap<String, BTreeMap<String, f64>>,
    pub pi: BTreeMap<String, f64>,
    pub p_sym: BTreeMap<String, BTreeMap<String, f64>>,
    pub residual: f64,
}

fn keyed(order: &[NodeId], m: &DMatrix<f64>) -> BTreeMap<String, BTreeMap<String, f64>> {
    order
        .iter()
        .enumerate()
        .map(|(i, a)| {
            let row = order
                .iter()
                .enumerate()
                .map(|(j, b)| (b.0.to_string(), m[(i, j)]))
                .collect();
            (a.0.to_string(), row)
        })
        .collect()
}

impl GraphDump {
    pub fn build(
        tree: &ParsingTree,
        new_leaf: NodeId,
        gamma: f64,
        alpha: f64,
        self_loop: f64,
        tol: f64,
        max_iter: usize,
    ) -> Result<Self> {
        let g = orient_and_weight(tree, new_leaf, gamma)?;
        let t = transition_matrix_with_self_loops(&g, alpha, self_loop)?;
        let pi = stationary_distribution(&t, tol, max_iter)?;
        let p = propagation_matrix(&t, &pi)?;
        Ok(GraphDump {
            adjacency: keyed(&g.vertex_order, &g.adjacency),
            transition: keyed(&g.vertex_order, &t.matrix),
            pi: g
                .vertex_order
                .iter()
                .zip(pi.pi.iter())
                .map(|(v, &p)| (v.0.to_string(), p))
                .collect(),
            p_sym: keyed(&g.vertex_order, &p),
            residual: pi.residual,
            vertex_order: g.vertex_order,
            root: new_leaf,
            gamma,
            alpha,
            self_loop,
        })
    }
}
