//! Hierarchical prompt parsing tree.
//!
//! Three layers of prompt partitions: one instrument-shared root, `n_max`
//! n-part-shared intermediates (one per part count), and one
//! instrument-distinct leaf per class hanging under the intermediate whose
//! part count matches the class. Node ids are assigned in insertion order
//! and double as the vertex order of every matrix built from the tree.

use std::collections::{BTreeMap, VecDeque};
use std::fmt;

use nalgebra::DMatrix;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{HpptError, Result};

/// Half-width of the uniform token initialisation interval.
pub const TOKEN_INIT_SCALE: f64 = 0.02;

pub const TREE_FORMAT_VERSION: u32 = 1;

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(transparent)]
pub struct NodeId(pub usize);

impl fmt::Display for NodeId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "#{}", self.0)
    }
}

/// Class label. `0` is reserved for background in fused label grids.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(transparent)]
pub struct ClassId(pub u16);

impl fmt::Display for ClassId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "c{}", self.0)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum PartitionKind {
    InstrumentShared,
    NPartShared { part_count: usize },
    InstrumentDistinct { class_id: ClassId },
}

#[derive(Clone, Debug, PartialEq)]
pub struct PromptPartition {
    pub id: NodeId,
    pub kind: PartitionKind,
    /// `u × b` token matrix.
    pub tokens: DMatrix<f64>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ParsingTree {
    n_max: usize,
    u: usize,
    b: usize,
    episode: usize,
    nodes: Vec<PromptPartition>,
    /// Stored as (parent, child); semantically unordered.
    edges: Vec<(NodeId, NodeId)>,
    parent: Vec<Option<NodeId>>,
    leaves: BTreeMap<ClassId, NodeId>,
}

fn init_tokens(rng: &mut ChaCha8Rng, u: usize, b: usize) -> DMatrix<f64> {
    DMatrix::from_fn(u, b, |_, _| {
        rng.random_range(-TOKEN_INIT_SCALE..=TOKEN_INIT_SCALE)
    })
}

impl ParsingTree {
    /// Builds the root, `n_max` intermediates and one leaf per class spec.
    pub fn new(
        n_max: usize,
        u: usize,
        b: usize,
        class_specs: &[(ClassId, usize)],
        rng_seed: u64,
    ) -> Result<Self> {
        if n_max < 1 {
            return Err(HpptError::Range(format!("n_max must be >= 1, got {n_max}")));
        }
        if u < 1 || b < 1 {
            return Err(HpptError::Range(format!(
                "token shape must be at least 1x1, got {u}x{b}"
            )));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(rng_seed);
        let mut tree = ParsingTree {
            n_max,
            u,
            b,
            episode: 1,
            nodes: Vec::new(),
            edges: Vec::new(),
            parent: Vec::new(),
            leaves: BTreeMap::new(),
        };
        let root = tree.push_node(PartitionKind::InstrumentShared, init_tokens(&mut rng, u, b), None);
        for part_count in 1..=n_max {
            let tokens = init_tokens(&mut rng, u, b);
            tree.push_node(PartitionKind::NPartShared { part_count }, tokens, Some(root));
        }
        for &(class_id, part_count) in class_specs {
            tree.check_new_leaf(class_id, part_count)?;
            let tokens = init_tokens(&mut rng, u, b);
            tree.attach_leaf(class_id, part_count, tokens);
        }
        Ok(tree)
    }

    /// Inserts a freshly initialised leaf under the intermediate for `part_count`.
    /// Existing token matrices are left untouched.
    pub fn insert_leaf(&mut self, class_id: ClassId, part_count: usize, rng_seed: u64) -> Result<NodeId> {
        self.check_new_leaf(class_id, part_count)?;
        let mut rng = ChaCha8Rng::seed_from_u64(rng_seed);
        let tokens = init_tokens(&mut rng, self.u, self.b);
        Ok(self.attach_leaf(class_id, part_count, tokens))
    }

    fn check_new_leaf(&self, class_id: ClassId, part_count: usize) -> Result<()> {
        if part_count < 1 || part_count > self.n_max {
            return Err(HpptError::Range(format!(
                "part_count {part_count} for {class_id} outside [1, {}]",
                self.n_max
            )));
        }
        if self.leaves.contains_key(&class_id) {
            return Err(HpptError::Conflict(format!("{class_id} already has a leaf")));
        }
        Ok(())
    }

    fn attach_leaf(&mut self, class_id: ClassId, part_count: usize, tokens: DMatrix<f64>) -> NodeId {
        let parent = self.intermediate(part_count);
        let id = self.push_node(PartitionKind::InstrumentDistinct { class_id }, tokens, Some(parent));
        self.leaves.insert(class_id, id);
        id
    }

    fn push_node(&mut self, kind: PartitionKind, tokens: DMatrix<f64>, parent: Option<NodeId>) -> NodeId {
        let id = NodeId(self.nodes.len());
        self.nodes.push(PromptPartition { id, kind, tokens });
        self.parent.push(parent);
        if let Some(p) = parent {
            self.edges.push((p, id));
        }
        id
    }

    pub fn root(&self) -> NodeId {
        NodeId(0)
    }

    /// Id of the intermediate shared by `part_count`-part classes.
    pub fn intermediate(&self, part_count: usize) -> NodeId {
        debug_assert!((1..=self.n_max).contains(&part_count));
        NodeId(part_count)
    }

    pub fn n_max(&self) -> usize {
        self.n_max
    }

    pub fn token_shape(&self) -> (usize, usize) {
        (self.u, self.b)
    }

    pub fn episode(&self) -> usize {
        self.episode
    }

    pub fn set_episode(&mut self, episode: usize) {
        self.episode = episode;
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn nodes(&self) -> &[PromptPartition] {
        &self.nodes
    }

    pub fn edges(&self) -> &[(NodeId, NodeId)] {
        &self.edges
    }

    pub fn node(&self, id: NodeId) -> Result<&PromptPartition> {
        self.nodes
            .get(id.0)
            .ok_or_else(|| HpptError::NotFound(format!("node {id}")))
    }

    pub fn tokens(&self, id: NodeId) -> Result<&DMatrix<f64>> {
        Ok(&self.node(id)?.tokens)
    }

    pub fn tokens_mut(&mut self, id: NodeId) -> Result<&mut DMatrix<f64>> {
        self.nodes
            .get_mut(id.0)
            .map(|n| &mut n.tokens)
            .ok_or_else(|| HpptError::NotFound(format!("node {id}")))
    }

    pub fn set_tokens(&mut self, id: NodeId, tokens: DMatrix<f64>) -> Result<()> {
        let (u, b) = (self.u, self.b);
        if tokens.nrows() != u || tokens.ncols() != b {
            return Err(HpptError::Dimension(format!(
                "tokens for {id} must be {u}x{b}, got {}x{}",
                tokens.nrows(),
                tokens.ncols()
            )));
        }
        *self.tokens_mut(id)? = tokens;
        Ok(())
    }

    pub fn parent(&self, id: NodeId) -> Result<Option<NodeId>> {
        self.parent
            .get(id.0)
            .copied()
            .ok_or_else(|| HpptError::NotFound(format!("node {id}")))
    }

    /// Classes with a leaf, in ascending id order.
    pub fn classes(&self) -> impl Iterator<Item = ClassId> + '_ {
        self.leaves.keys().copied()
    }

    pub fn leaf(&self, class_id: ClassId) -> Result<NodeId> {
        self.leaves
            .get(&class_id)
            .copied()
            .ok_or_else(|| HpptError::NotFound(format!("no leaf for {class_id}")))
    }

    pub fn part_count(&self, class_id: ClassId) -> Result<usize> {
        let leaf = self.leaf(class_id)?;
        match self.parent[leaf.0].map(|p| self.nodes[p.0].kind) {
            Some(PartitionKind::NPartShared { part_count }) => Ok(part_count),
            _ => Err(HpptError::Degenerate(format!("leaf of {class_id} has no intermediate"))),
        }
    }

    /// Root → intermediate → leaf path used by the hierarchical forward pass.
    pub fn path_for_class(&self, class_id: ClassId) -> Result<[NodeId; 3]> {
        let leaf = self.leaf(class_id)?;
        let mid = self.parent[leaf.0]
            .ok_or_else(|| HpptError::Degenerate(format!("leaf of {class_id} is detached")))?;
        Ok([self.root(), mid, leaf])
    }

    /// Depth below the root (0, 1 or 2).
    fn depth(&self, id: NodeId) -> usize {
        let mut depth = 0;
        let mut cur = id;
        while let Some(p) = self.parent[cur.0] {
            depth += 1;
            cur = p;
        }
        depth
    }

    /// Number of edges on the unique path between `a` and `b`.
    pub fn tree_distance(&self, a: NodeId, b: NodeId) -> Result<usize> {
        self.node(a)?;
        self.node(b)?;
        let (mut x, mut y) = (a, b);
        let (mut dx, mut dy) = (self.depth(a), self.depth(b));
        let mut dist = 0;
        while dx > dy {
            x = self.parent[x.0].expect("depth > 0 implies parent");
            dx -= 1;
            dist += 1;
        }
        while dy > dx {
            y = self.parent[y.0].expect("depth > 0 implies parent");
            dy -= 1;
            dist += 1;
        }
        while x != y {
            x = self.parent[x.0].expect("distinct nodes at equal depth have parents");
            y = self.parent[y.0].expect("distinct nodes at equal depth have parents");
            dist += 2;
        }
        Ok(dist)
    }

    /// Neighbour lists indexed by node id.
    pub fn adjacency_lists(&self) -> Vec<Vec<NodeId>> {
        let mut adj = vec![Vec::new(); self.nodes.len()];
        for &(a, b) in &self.edges {
            adj[a.0].push(b);
            adj[b.0].push(a);
        }
        adj
    }

    /// Checks every structural invariant of the tree.
    pub fn validate(&self) -> Result<()> {
        let fail = |msg: String| Err(HpptError::Degenerate(msg));
        let roots = self
            .nodes
            .iter()
            .filter(|n| n.kind == PartitionKind::InstrumentShared)
            .count();
        if roots != 1 {
            return fail(format!("expected exactly one root, found {roots}"));
        }
        for (i, node) in self.nodes.iter().enumerate() {
            if node.id.0 != i {
                return fail(format!("node at index {i} carries id {}", node.id));
            }
            if node.tokens.nrows() != self.u || node.tokens.ncols() != self.b {
                return fail(format!("tokens of {} have the wrong shape", node.id));
            }
            if node.tokens.iter().any(|v| !v.is_finite()) {
                return fail(format!("tokens of {} are not finite", node.id));
            }
            match (node.kind, self.parent[i]) {
                (PartitionKind::InstrumentShared, None) => {}
                (PartitionKind::NPartShared { part_count }, Some(p)) => {
                    if p != self.root() || part_count < 1 || part_count > self.n_max || NodeId(part_count) != node.id {
                        return fail(format!("intermediate {} misplaced", node.id));
                    }
                }
                (PartitionKind::InstrumentDistinct { class_id }, Some(p)) => {
                    if !matches!(self.nodes[p.0].kind, PartitionKind::NPartShared { .. }) {
                        return fail(format!("leaf {} not under an intermediate", node.id));
                    }
                    if self.leaves.get(&class_id) != Some(&node.id) {
                        return fail(format!("leaf index out of sync for {class_id}"));
                    }
                }
                _ => return fail(format!("node {} has an inconsistent parent", node.id)),
            }
        }
        let intermediates = self
            .nodes
            .iter()
            .filter(|n| matches!(n.kind, PartitionKind::NPartShared { .. }))
            .count();
        if intermediates != self.n_max {
            return fail(format!("expected {} intermediates, found {intermediates}", self.n_max));
        }
        if self.edges.len() + 1 != self.nodes.len() {
            return fail("edge count is not node count - 1".into());
        }
        // connectivity
        let adj = self.adjacency_lists();
        let mut seen = vec![false; self.nodes.len()];
        let mut queue = VecDeque::from([self.root()]);
        seen[0] = true;
        while let Some(n) = queue.pop_front() {
            for &m in &adj[n.0] {
                if !seen[m.0] {
                    seen[m.0] = true;
                    queue.push_back(m);
                }
            }
        }
        if seen.iter().any(|s| !s) {
            return fail("tree is disconnected".into());
        }
        Ok(())
    }

    pub fn to_document(&self) -> TreeDocument {
        let nodes = self
            .nodes
            .iter()
            .map(|n| {
                let (kind, part_count, class_id) = match n.kind {
                    PartitionKind::InstrumentShared => (NodeKindTag::InstrumentShared, None, None),
                    PartitionKind::NPartShared { part_count } => {
                        (NodeKindTag::NPartShared, Some(part_count), None)
                    }
                    PartitionKind::InstrumentDistinct { class_id } => (
                        NodeKindTag::InstrumentDistinct,
                        self.part_count(class_id).ok(),
                        Some(class_id),
                    ),
                };
                NodeDocument {
                    id: n.id,
                    kind,
                    part_count,
                    class_id,
                    tokens: row_major(&n.tokens),
                }
            })
            .collect();
        TreeDocument {
            version: TREE_FORMAT_VERSION,
            n_max: self.n_max,
            u: self.u,
            b: self.b,
            episode: self.episode,
            nodes,
            edges: self.edges.iter().map(|&(a, b)| [a, b]).collect(),
        }
    }

    pub fn from_document(doc: &TreeDocument) -> Result<Self> {
        if doc.version != TREE_FORMAT_VERSION {
            return Err(HpptError::Format(format!("unsupported tree version {}", doc.version)));
        }
        let mut parent = vec![None; doc.nodes.len()];
        for [a, b] in &doc.edges {
            let (p, c) = if a.0 < b.0 { (*a, *b) } else { (*b, *a) };
            if c.0 >= parent.len() {
                return Err(HpptError::Format(format!("edge references unknown node {c}")));
            }
            parent[c.0] = Some(p);
        }
        let mut nodes = Vec::with_capacity(doc.nodes.len());
        let mut leaves = BTreeMap::new();
        for (i, n) in doc.nodes.iter().enumerate() {
            if n.id.0 != i {
                return Err(HpptError::Format(format!("node ids must be dense, found {} at {i}", n.id)));
            }
            if n.tokens.len() != doc.u * doc.b {
                return Err(HpptError::Format(format!("node {} has {} tokens values", n.id, n.tokens.len())));
            }
            let kind = match n.kind {
                NodeKindTag::InstrumentShared => PartitionKind::InstrumentShared,
                NodeKindTag::NPartShared => PartitionKind::NPartShared {
                    part_count: n
                        .part_count
                        .ok_or_else(|| HpptError::Format(format!("node {} lacks part_count", n.id)))?,
                },
                NodeKindTag::InstrumentDistinct => {
                    let class_id = n
                        .class_id
                        .ok_or_else(|| HpptError::Format(format!("node {} lacks class_id", n.id)))?;
                    leaves.insert(class_id, n.id);
                    PartitionKind::InstrumentDistinct { class_id }
                }
            };
            nodes.push(PromptPartition {
                id: n.id,
                kind,
                tokens: DMatrix::from_row_slice(doc.u, doc.b, &n.tokens),
            });
        }
        let tree = ParsingTree {
            n_max: doc.n_max,
            u: doc.u,
            b: doc.b,
            episode: doc.episode,
            nodes,
            edges: doc.edges.iter().map(|&[a, b]| if a.0 < b.0 { (a, b) } else { (b, a) }).collect(),
            parent,
            leaves,
        };
        tree.validate().map_err(|e| HpptError::Format(e.to_string()))?;
        Ok(tree)
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(&self.to_document())?)
    }

    pub fn from_json(text: &str) -> Result<Self> {
        Self::from_document(&serde_json::from_str(text)?)
    }
}

pub(crate) fn row_major(m: &DMatrix<f64>) -> Vec<f64> {
    let mut out = Vec::with_capacity(m.len());
    for r in 0..m.nrows() {
        for c in 0..m.ncols() {
            out.push(m[(r, c)]);
        }
    }
    out
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum NodeKindTag {
    InstrumentShared,
    NPartShared,
    InstrumentDistinct,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct NodeDocument {
    pub id: NodeId,
    pub kind: NodeKindTag,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub part_count: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub class_id: Option<ClassId>,
    pub tokens: Vec<f64>,
}

/// Versioned JSON form of a tree; tokens are row-major float64.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TreeDocument {
    pub version: u32,
    pub n_max: usize,
    pub u: usize,
    pub b: usize,
    #[serde(default = "default_episode")]
    pub episode: usize,
    pub nodes: Vec<NodeDocument>,
    pub edges: Vec<[NodeId; 2]>,
}

fn default_episode() -> usize {
    1
}
