//! Budding perceptrons: a binary tree of square perceptron layers.
//!
//! Node `m` computes `y_m(x) = (1-γ_m)·y_mr(y_ml(x)) + γ_m·σ(W_m x + b_m)`.
//! A node with `γ = 1` (or without children) is a plain perceptron layer and
//! its subtree is never evaluated.
//!
//! Nodes live in an arena. Parameters live in a separate slot table so a
//! left child can alias its parent's `W, b`: both nodes point at the same
//! slot and gradients from both uses accumulate there.
//!
//! Each growable leaf carries a *bud*: the freshly initialized weights its
//! right child will get. The bud lets the backward pass give `γ` a gradient
//! at exactly `γ = 1` (the would-be composition is `bud(σ(Wx+b))`, since the
//! tied left child reproduces the parent), and the same weights become real
//! if the optimizer then lowers `γ`.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::layers::{PerceptronCache, PerceptronGrads, PerceptronLayer};
use crate::numeric::{Activation, Matrix, Rng, Vector};

pub const DEFAULT_MAX_DEPTH: usize = 20;

pub type NodeId = usize;

#[derive(Debug, Clone, PartialEq)]
pub struct BuddingNode {
    /// Index into the tree's parameter slots.
    pub slot: usize,
    pub gamma: f64,
    pub children: Option<(NodeId, NodeId)>,
    /// The left child shares this node's slot.
    pub left_tied: bool,
    /// Root is depth 0.
    pub depth: usize,
    bud: Option<PerceptronLayer>,
}

impl BuddingNode {
    fn is_leaf_like(&self) -> bool {
        self.gamma >= 1.0 || self.children.is_none()
    }

    pub fn has_bud(&self) -> bool {
        self.bud.is_some()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct BuddingTree {
    width: usize,
    max_depth: usize,
    activation: Activation,
    slots: Vec<PerceptronLayer>,
    nodes: Vec<BuddingNode>,
    refused_growths: u64,
}

#[derive(Debug, Clone)]
pub enum NodeCache {
    Leaf(PerceptronCache),
    Blend {
        own: PerceptronCache,
        left: Box<NodeCache>,
        right: Box<NodeCache>,
        composed: Matrix,
    },
}

#[derive(Debug, Clone, PartialEq)]
pub struct BuddingGrads {
    /// One entry per parameter slot.
    pub slots: Vec<PerceptronGrads>,
    /// One entry per node; zero for nodes off the evaluated path.
    pub gammas: Vec<f64>,
}

impl BuddingTree {
    /// A single root leaf with Glorot weights.
    ///
    /// `max_depth` counts levels: a tree may hold at most `2^max_depth - 1`
    /// nodes.
    pub fn new(width: usize, max_depth: usize, activation: Activation, rng: &mut Rng) -> Result<Self> {
        if width == 0 || max_depth == 0 {
            return Err(Error::Config("budding tree needs width > 0 and max_depth >= 1".into()));
        }
        let mut tree = BuddingTree {
            width,
            max_depth,
            activation,
            slots: vec![PerceptronLayer::glorot(width, width, activation, rng)],
            nodes: Vec::new(),
            refused_growths: 0,
        };
        let bud = tree.new_bud(0, rng);
        tree.nodes.push(BuddingNode {
            slot: 0,
            gamma: 1.0,
            children: None,
            left_tied: false,
            depth: 0,
            bud,
        });
        Ok(tree)
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn max_depth(&self) -> usize {
        self.max_depth
    }

    pub fn activation(&self) -> Activation {
        self.activation
    }

    pub fn root(&self) -> NodeId {
        0
    }

    pub fn nodes(&self) -> &[BuddingNode] {
        &self.nodes
    }

    pub fn node(&self, id: NodeId) -> &BuddingNode {
        &self.nodes[id]
    }

    pub fn slots(&self) -> &[PerceptronLayer] {
        &self.slots
    }

    pub fn slots_mut(&mut self) -> &mut [PerceptronLayer] {
        &mut self.slots
    }

    /// Slots and nodes together, for optimizers that update both.
    pub(crate) fn parts_mut(&mut self) -> (&mut [PerceptronLayer], &mut [BuddingNode]) {
        (&mut self.slots, &mut self.nodes)
    }

    pub fn gamma(&self, id: NodeId) -> f64 {
        self.nodes[id].gamma
    }

    /// Raw setter; callers keep `γ` in [0, 1].
    pub fn set_gamma(&mut self, id: NodeId, gamma: f64) {
        self.nodes[id].gamma = gamma;
    }

    /// Growths refused because the node sat at the depth cap.
    pub fn refused_growths(&self) -> u64 {
        self.refused_growths
    }

    pub fn bud(&self, id: NodeId) -> Option<&PerceptronLayer> {
        self.nodes[id].bud.as_ref()
    }

    fn can_grow(&self, depth: usize) -> bool {
        depth + 1 < self.max_depth
    }

    fn new_bud(&self, depth: usize, rng: &mut Rng) -> Option<PerceptronLayer> {
        self.can_grow(depth)
            .then(|| PerceptronLayer::glorot(self.width, self.width, self.activation, rng))
    }

    /// Depth used for learning-rate scaling of each slot: the shallowest node
    /// that uses it.
    pub fn slot_depths(&self) -> Vec<usize> {
        let mut depths = vec![usize::MAX; self.slots.len()];
        for n in &self.nodes {
            depths[n.slot] = depths[n.slot].min(n.depth);
        }
        depths
    }

    /// Nodes on the evaluated compute path: the root plus every child whose
    /// parent is evaluated, has `γ < 1` and has children.
    pub fn evaluated_nodes(&self) -> Vec<NodeId> {
        let mut out = Vec::new();
        let mut stack = vec![self.root()];
        while let Some(id) = stack.pop() {
            out.push(id);
            let n = &self.nodes[id];
            if !n.is_leaf_like() {
                let (l, r) = n.children.unwrap();
                stack.push(r);
                stack.push(l);
            }
        }
        out
    }

    pub fn forward(&self, x: &Matrix) -> Result<(Matrix, NodeCache)> {
        self.check_input(x)?;
        self.forward_node(self.root(), x)
    }

    /// Forward pass without keeping a cache.
    pub fn predict(&self, x: &Matrix) -> Result<Matrix> {
        self.check_input(x)?;
        self.eval_node(self.root(), x)
    }

    fn check_input(&self, x: &Matrix) -> Result<()> {
        if x.cols() != self.width {
            return Err(Error::Config(format!(
                "budding tree of width {} got input width {}",
                self.width,
                x.cols()
            )));
        }
        Ok(())
    }

    fn forward_node(&self, id: NodeId, x: &Matrix) -> Result<(Matrix, NodeCache)> {
        let node = &self.nodes[id];
        let (h, own) = self.slots[node.slot].forward(x)?;
        if node.is_leaf_like() {
            return Ok((h, NodeCache::Leaf(own)));
        }
        let (l, r) = node.children.unwrap();
        let (yl, left) = self.forward_node(l, x)?;
        let (composed, right) = self.forward_node(r, &yl)?;
        let y = blend(node.gamma, &composed, &h);
        Ok((
            y,
            NodeCache::Blend {
                own,
                left: Box::new(left),
                right: Box::new(right),
                composed,
            },
        ))
    }

    fn eval_node(&self, id: NodeId, x: &Matrix) -> Result<Matrix> {
        let node = &self.nodes[id];
        let (h, _) = self.slots[node.slot].forward(x)?;
        if node.is_leaf_like() {
            return Ok(h);
        }
        let (l, r) = node.children.unwrap();
        let yl = self.eval_node(l, x)?;
        let composed = self.eval_node(r, &yl)?;
        Ok(blend(node.gamma, &composed, &h))
    }

    /// What `y_mr(y_ml(x))` would be for a node currently acting as a leaf:
    /// its stale children if it has them, otherwise its bud applied on top of
    /// the tied left child.
    fn alternative_composition(&self, id: NodeId, x: &Matrix, h: &Matrix) -> Result<Option<Matrix>> {
        let node = &self.nodes[id];
        match (node.children, &node.bud) {
            (Some((l, r)), _) => {
                let yl = self.eval_node(l, x)?;
                Ok(Some(self.eval_node(r, &yl)?))
            }
            (None, Some(bud)) => Ok(Some(bud.forward(h)?.0)),
            (None, None) => Ok(None),
        }
    }

    pub fn zero_grads(&self) -> BuddingGrads {
        BuddingGrads {
            slots: self
                .slots
                .iter()
                .map(|s| PerceptronGrads::zeros(s.outputs(), s.inputs()))
                .collect(),
            gammas: vec![0.0; self.nodes.len()],
        }
    }

    /// Backpropagates `dy` through the tree. Leaves on the evaluated path get
    /// a `γ` gradient against their stale children or bud; nodes off the path
    /// get nothing.
    pub fn backward(&self, cache: &NodeCache, dy: &Matrix) -> Result<(Matrix, BuddingGrads)> {
        let mut grads = self.zero_grads();
        let dx = self.backward_node(self.root(), cache, dy, &mut grads)?;
        Ok((dx, grads))
    }

    fn backward_node(&self, id: NodeId, cache: &NodeCache, dy: &Matrix, grads: &mut BuddingGrads) -> Result<Matrix> {
        let node = &self.nodes[id];
        let slot = &self.slots[node.slot];
        match cache {
            NodeCache::Leaf(own) => {
                if dy.shape() != own.output.shape() {
                    return Err(Error::Usage("budding backward: stale cache".into()));
                }
                if let Some(alt) = self.alternative_composition(id, &own.input, &own.output)? {
                    grads.gammas[id] += gamma_grad(dy, &own.output, &alt);
                }
                let dz = slot.pre_activation_grad(own, dy);
                let (dx, g) = slot.backward_from_pre(&own.input, &dz);
                grads.slots[node.slot].accumulate(&g);
                Ok(dx)
            }
            NodeCache::Blend {
                own,
                left,
                right,
                composed,
            } => {
                let (l, r) = node
                    .children
                    .ok_or_else(|| Error::Usage("budding backward: cache has children the tree lacks".into()))?;
                if dy.shape() != own.output.shape() {
                    return Err(Error::Usage("budding backward: stale cache".into()));
                }
                let gamma = node.gamma;
                grads.gammas[id] += gamma_grad(dy, &own.output, composed);
                let mut dh = dy.clone();
                dh.scale_in_place(gamma);
                let mut dcomp = dy.clone();
                dcomp.scale_in_place(1.0 - gamma);
                let dz = slot.pre_activation_grad(own, &dh);
                let (mut dx, g) = slot.backward_from_pre(&own.input, &dz);
                grads.slots[node.slot].accumulate(&g);
                let dyl = self.backward_node(r, right, &dcomp, grads)?;
                let dxl = self.backward_node(l, left, &dyl, grads)?;
                dx.add_assign(&dxl);
                Ok(dx)
            }
        }
    }

    /// Materializes children for a node whose `γ` has dropped below 1.
    ///
    /// The left child is tied to the node, the right child takes the bud.
    /// At the depth cap growth is refused and `γ` is reset to 1.
    pub fn maybe_grow(&mut self, id: NodeId, rng: &mut Rng) -> bool {
        let node = &self.nodes[id];
        if node.gamma >= 1.0 || node.children.is_some() {
            return false;
        }
        let depth = node.depth;
        if !self.can_grow(depth) {
            self.nodes[id].gamma = 1.0;
            self.refused_growths += 1;
            return false;
        }
        let right_params = match self.nodes[id].bud.take() {
            Some(b) => b,
            None => PerceptronLayer::glorot(self.width, self.width, self.activation, rng),
        };
        self.slots.push(right_params);
        let right_slot = self.slots.len() - 1;
        let left_bud = self.new_bud(depth + 1, rng);
        let right_bud = self.new_bud(depth + 1, rng);
        let parent_slot = self.nodes[id].slot;
        let l = self.nodes.len();
        self.nodes.push(BuddingNode {
            slot: parent_slot,
            gamma: 1.0,
            children: None,
            left_tied: false,
            depth: depth + 1,
            bud: left_bud,
        });
        self.nodes.push(BuddingNode {
            slot: right_slot,
            gamma: 1.0,
            children: None,
            left_tied: false,
            depth: depth + 1,
            bud: right_bud,
        });
        let node = &mut self.nodes[id];
        node.children = Some((l, l + 1));
        node.left_tied = true;
        true
    }

    /// Runs [`maybe_grow`](Self::maybe_grow) over every existing node, in id
    /// order. Returns the number of growths.
    pub fn grow_all(&mut self, rng: &mut Rng) -> usize {
        let existing = self.nodes.len();
        (0..existing).filter(|&id| self.maybe_grow(id, rng)).count()
    }

    /// `s_m = 1 + (1-γ_m)(s_ml + s_mr)`, 1 for leaf-like nodes.
    pub fn soft_size(&self) -> f64 {
        self.soft_size_of(self.root())
    }

    pub fn soft_size_of(&self, id: NodeId) -> f64 {
        let n = &self.nodes[id];
        if n.is_leaf_like() {
            return 1.0;
        }
        let (l, r) = n.children.unwrap();
        1.0 + (1.0 - n.gamma) * (self.soft_size_of(l) + self.soft_size_of(r))
    }

    /// Number of nodes on the evaluated compute path.
    pub fn hard_size(&self) -> usize {
        self.evaluated_nodes().len()
    }

    /// `Σ (1-γ_m)` over evaluated nodes.
    pub fn structural_penalty(&self) -> f64 {
        self.evaluated_nodes()
            .into_iter()
            .map(|id| 1.0 - self.nodes[id].gamma)
            .sum()
    }

    /// Copy with every subtree behind a leaf-like node removed. A node that
    /// loses stale children keeps their right child's weights as its bud.
    pub fn prune_for_export(&self) -> BuddingTree {
        let mut out = BuddingTree {
            width: self.width,
            max_depth: self.max_depth,
            activation: self.activation,
            slots: Vec::new(),
            nodes: Vec::new(),
            refused_growths: self.refused_growths,
        };
        let mut slot_map = vec![None; self.slots.len()];
        self.copy_pruned(self.root(), &mut out, &mut slot_map);
        out
    }

    fn copy_pruned(&self, id: NodeId, out: &mut BuddingTree, slot_map: &mut [Option<usize>]) -> NodeId {
        let node = &self.nodes[id];
        let slot = *slot_map[node.slot].get_or_insert_with(|| {
            out.slots.push(self.slots[node.slot].clone());
            out.slots.len() - 1
        });
        let new_id = out.nodes.len();
        let keep_children = !node.is_leaf_like();
        let bud = match (keep_children, node.children, &node.bud) {
            (false, Some((_, r)), _) if self.can_grow(node.depth) => Some(self.slots[self.nodes[r].slot].clone()),
            (_, _, bud) => bud.clone(),
        };
        out.nodes.push(BuddingNode {
            slot,
            gamma: node.gamma,
            children: None,
            left_tied: false,
            depth: node.depth,
            bud,
        });
        if keep_children {
            let (l, r) = node.children.unwrap();
            let nl = self.copy_pruned(l, out, slot_map);
            let nr = self.copy_pruned(r, out, slot_map);
            let n = &mut out.nodes[new_id];
            n.children = Some((nl, nr));
            n.left_tied = node.left_tied;
        }
        new_id
    }

    /// Number of scalar parameters on the evaluated path, counting tied
    /// slots once.
    pub fn num_params(&self) -> usize {
        let mut seen = vec![false; self.slots.len()];
        let mut total = 0;
        for id in self.evaluated_nodes() {
            let s = self.nodes[id].slot;
            if !seen[s] {
                seen[s] = true;
                total += self.slots[s].num_params();
            }
            total += 1;
        }
        total
    }

    pub fn to_record(&self) -> BuddingRecord {
        BuddingRecord {
            width: self.width,
            max_depth: self.max_depth,
            activation: self.activation,
            refused_growths: self.refused_growths,
            root: self.node_record(self.root(), false),
        }
    }

    fn node_record(&self, id: NodeId, tied: bool) -> NodeRecord {
        let n = &self.nodes[id];
        let (weights, bias) = if tied {
            (None, None)
        } else {
            let s = &self.slots[n.slot];
            (Some(s.weights.clone()), Some(s.bias.clone()))
        };
        let (left, right) = match n.children {
            Some((l, r)) => {
                let left_tied = self.nodes[l].slot == n.slot;
                (
                    Some(Box::new(self.node_record(l, left_tied))),
                    Some(Box::new(self.node_record(r, false))),
                )
            }
            None => (None, None),
        };
        NodeRecord {
            gamma: n.gamma,
            tied,
            weights,
            bias,
            bud: n.bud.as_ref().map(|b| BudRecord {
                weights: b.weights.clone(),
                bias: b.bias.clone(),
            }),
            left,
            right,
        }
    }

    pub fn from_record(rec: &BuddingRecord) -> Result<Self> {
        if rec.width == 0 || rec.max_depth == 0 {
            return Err(Error::Checkpoint("budding tree needs width and max_depth".into()));
        }
        let mut tree = BuddingTree {
            width: rec.width,
            max_depth: rec.max_depth,
            activation: rec.activation,
            slots: Vec::new(),
            nodes: Vec::new(),
            refused_growths: rec.refused_growths,
        };
        tree.add_record(&rec.root, None, 0)?;
        Ok(tree)
    }

    fn add_record(&mut self, rec: &NodeRecord, parent_slot: Option<usize>, depth: usize) -> Result<NodeId> {
        if depth >= self.max_depth {
            return Err(Error::Checkpoint(format!("node at depth {depth} exceeds max_depth")));
        }
        if !(0.0..=1.0).contains(&rec.gamma) {
            return Err(Error::Checkpoint(format!("gamma {} outside [0, 1]", rec.gamma)));
        }
        let slot = match (rec.tied, parent_slot, &rec.weights, &rec.bias) {
            (true, Some(p), None, None) => p,
            (true, _, _, _) => {
                return Err(Error::Checkpoint(
                    "tied node must be a left child and must not repeat its weights".into(),
                ))
            }
            (false, _, Some(w), Some(b)) => {
                self.slots.push(self.checked_layer(w, b)?);
                self.slots.len() - 1
            }
            (false, _, _, _) => return Err(Error::Checkpoint("untied node without weights".into())),
        };
        let bud = match &rec.bud {
            Some(b) => Some(self.checked_layer(&b.weights, &b.bias)?),
            None => None,
        };
        let id = self.nodes.len();
        self.nodes.push(BuddingNode {
            slot,
            gamma: rec.gamma,
            children: None,
            left_tied: false,
            depth,
            bud,
        });
        match (&rec.left, &rec.right) {
            (Some(l), Some(r)) => {
                if r.tied {
                    return Err(Error::Checkpoint("right child cannot be tied".into()));
                }
                let lid = self.add_record(l, Some(slot), depth + 1)?;
                let rid = self.add_record(r, None, depth + 1)?;
                self.nodes[id].children = Some((lid, rid));
                self.nodes[id].left_tied = l.tied;
            }
            (None, None) => {}
            _ => return Err(Error::Checkpoint("node has exactly one child".into())),
        }
        Ok(id)
    }

    fn checked_layer(&self, w: &Matrix, b: &Vector) -> Result<PerceptronLayer> {
        let k = self.width;
        if w.shape() != (k, k) || b.len() != k {
            return Err(Error::Checkpoint(format!("budding node weights must be {k}x{k}")));
        }
        PerceptronLayer::new(w.clone(), b.clone(), self.activation)
    }
}

fn blend(gamma: f64, composed: &Matrix, h: &Matrix) -> Matrix {
    let mut y = composed.clone();
    for (v, &hv) in y.as_mut_slice().iter_mut().zip(h.as_slice()) {
        *v = (1.0 - gamma) * *v + gamma * hv;
    }
    y
}

fn gamma_grad(dy: &Matrix, h: &Matrix, composed: &Matrix) -> f64 {
    dy.as_slice()
        .iter()
        .zip(h.as_slice().iter().zip(composed.as_slice()))
        .map(|(d, (a, c))| d * (a - c))
        .sum()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BudRecord {
    pub weights: Matrix,
    pub bias: Vector,
}

/// Nested checkpoint form of a node. A tied node carries no weights of its
/// own; it reuses its parent's.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NodeRecord {
    pub gamma: f64,
    pub tied: bool,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub weights: Option<Matrix>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub bias: Option<Vector>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub bud: Option<BudRecord>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub left: Option<Box<NodeRecord>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub right: Option<Box<NodeRecord>>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BuddingRecord {
    pub width: usize,
    pub max_depth: usize,
    pub activation: Activation,
    pub refused_growths: u64,
    pub root: NodeRecord,
}

#[cfg(test)]
mod tests {
    use super::*;

    fn unit_tree(gamma: f64) -> BuddingTree {
        let mut rng = Rng::new(0);
        let mut t = BuddingTree::new(1, 4, Activation::Relu, &mut rng).unwrap();
        t.slots[0].weights = Matrix::from_vec(1, 1, vec![1.0]).unwrap();
        t.set_gamma(0, 0.5);
        assert!(t.maybe_grow(0, &mut rng));
        let right = t.node(0).children.unwrap().1;
        let rs = t.node(right).slot;
        t.slots[rs].weights = Matrix::from_vec(1, 1, vec![1.0]).unwrap();
        t.slots[rs].bias = Vector::zeros(1);
        t.set_gamma(0, gamma);
        t
    }

    #[test]
    fn single_leaf_is_a_perceptron() {
        let mut rng = Rng::new(1);
        let t = BuddingTree::new(3, 5, Activation::Relu, &mut rng).unwrap();
        let x = Matrix::from_rows(&[vec![0.3, -0.2, 1.0], vec![1.0, 1.0, -1.0]]).unwrap();
        let (y, _) = t.forward(&x).unwrap();
        let (h, _) = t.slots()[0].forward(&x).unwrap();
        assert_eq!(y, h);
    }

    #[test]
    fn hand_arithmetic_k1() {
        let t = unit_tree(0.5);
        let (y, _) = t.forward(&Matrix::row_vector(&[2.0])).unwrap();
        assert_eq!(y.as_slice(), &[2.0]);
    }

    #[test]
    fn zero_gamma_is_pure_composition() {
        let mut rng = Rng::new(2);
        let mut t = BuddingTree::new(3, 4, Activation::Relu, &mut rng).unwrap();
        t.set_gamma(0, 0.0);
        t.maybe_grow(0, &mut rng);
        let (l, r) = t.node(0).children.unwrap();
        let left = &t.slots()[t.node(l).slot];
        let right = &t.slots()[t.node(r).slot];
        let x = Matrix::row_vector(&[0.4, -0.7, 0.2]);
        let (y, _) = t.forward(&x).unwrap();
        let (a, _) = left.forward(&x).unwrap();
        let (b, _) = right.forward(&a).unwrap();
        for (u, v) in y.as_slice().iter().zip(b.as_slice()) {
            assert!((u - v).abs() < 1e-12);
        }
    }

    #[test]
    fn growth_ties_left_child() {
        let mut rng = Rng::new(3);
        let mut t = BuddingTree::new(2, 5, Activation::Relu, &mut rng).unwrap();
        let bud = t.bud(0).cloned().unwrap();
        assert!(!t.maybe_grow(0, &mut rng));
        t.set_gamma(0, 0.99);
        assert!(t.maybe_grow(0, &mut rng));
        let (l, r) = t.node(0).children.unwrap();
        assert!(t.node(0).left_tied);
        assert_eq!(t.node(l).slot, t.node(0).slot);
        assert_eq!(t.slots()[t.node(r).slot], bud);
        assert_eq!(t.gamma(l), 1.0);
        assert_eq!(t.gamma(r), 1.0);
        assert_eq!(t.node(l).depth, 1);
        assert!(!t.maybe_grow(0, &mut rng));
    }

    #[test]
    fn growth_refused_at_depth_cap() {
        let mut rng = Rng::new(4);
        let mut t = BuddingTree::new(2, 1, Activation::Relu, &mut rng).unwrap();
        assert!(t.bud(0).is_none());
        t.set_gamma(0, 0.5);
        assert!(!t.maybe_grow(0, &mut rng));
        assert_eq!(t.gamma(0), 1.0);
        assert_eq!(t.refused_growths(), 1);
        assert_eq!(t.nodes().len(), 1);
    }

    #[test]
    fn sizes() {
        let t = unit_tree(1.0);
        assert_eq!(t.soft_size(), 1.0);
        assert_eq!(t.hard_size(), 1);
        let t = unit_tree(0.0);
        assert_eq!(t.soft_size(), 3.0);
        assert_eq!(t.hard_size(), 3);
        let t = unit_tree(0.5);
        assert_eq!(t.soft_size(), 2.0);
        let t = unit_tree(0.3);
        assert_eq!(t.hard_size(), 3);
        let mut rng = Rng::new(5);
        let leaf = BuddingTree::new(4, 3, Activation::Relu, &mut rng).unwrap();
        assert_eq!(leaf.soft_size(), 1.0);
        assert_eq!(leaf.hard_size(), 1);
    }

    #[test]
    fn stale_children_get_no_gradient_but_gamma_does() {
        let mut rng = Rng::new(6);
        let mut t = BuddingTree::new(3, 4, Activation::Relu, &mut rng).unwrap();
        t.set_gamma(0, 0.5);
        t.maybe_grow(0, &mut rng);
        t.set_gamma(0, 1.0);
        let x = Matrix::row_vector(&[0.5, 0.1, -0.3]);
        let (_, cache) = t.forward(&x).unwrap();
        let (_, g) = t.backward(&cache, &Matrix::row_vector(&[1.0, 1.0, 1.0])).unwrap();
        let (_, r) = t.node(0).children.unwrap();
        let rs = t.node(r).slot;
        assert!(g.slots[rs].weights.as_slice().iter().all(|&v| v == 0.0));
        assert_eq!(g.gammas[1], 0.0);
        assert_eq!(g.gammas[2], 0.0);
    }

    #[test]
    fn zero_upstream_zero_gradients() {
        let t = unit_tree(0.4);
        let (_, cache) = t.forward(&Matrix::row_vector(&[0.7])).unwrap();
        let (dx, g) = t.backward(&cache, &Matrix::zeros(1, 1)).unwrap();
        assert_eq!(dx.as_slice(), &[0.0]);
        assert!(g.gammas.iter().all(|&v| v == 0.0));
        assert!(g.slots.iter().all(|s| s.weights.as_slice().iter().all(|&v| v == 0.0)));
    }

    #[test]
    fn prune_drops_stale_subtree() {
        let mut rng = Rng::new(7);
        let mut t = BuddingTree::new(3, 6, Activation::Relu, &mut rng).unwrap();
        t.set_gamma(0, 0.5);
        t.grow_all(&mut rng);
        t.set_gamma(2, 0.3);
        t.grow_all(&mut rng);
        t.set_gamma(0, 1.0);
        assert_eq!(t.hard_size(), 1);
        let p = t.prune_for_export();
        assert_eq!(p.nodes().len(), 1);
        assert_eq!(p.slots().len(), 1);
        let x = Matrix::from_rows(&[vec![0.1, 0.2, 0.3], vec![-1.0, 0.5, 2.0]]).unwrap();
        assert_eq!(t.predict(&x).unwrap(), p.predict(&x).unwrap());
    }

    #[test]
    fn prune_keeps_live_tree() {
        let t = unit_tree(0.4);
        let p = t.prune_for_export();
        assert_eq!(p.nodes().len(), 3);
        assert_eq!(p.slots().len(), 2);
        assert_eq!(p.soft_size(), t.soft_size());
    }

    #[test]
    fn record_round_trip_keeps_ties() {
        let mut rng = Rng::new(8);
        let mut t = BuddingTree::new(2, 5, Activation::Relu, &mut rng).unwrap();
        t.set_gamma(0, 0.2);
        t.grow_all(&mut rng);
        t.set_gamma(1, 0.7);
        t.grow_all(&mut rng);
        let rec = t.to_record();
        assert!(rec.root.left.as_ref().unwrap().tied);
        assert!(rec.root.left.as_ref().unwrap().weights.is_none());
        let back = BuddingTree::from_record(&rec).unwrap();
        assert_eq!(back.to_record(), rec);
        let (l, _) = back.node(0).children.unwrap();
        assert_eq!(back.node(l).slot, back.node(0).slot);
        let x = Matrix::row_vector(&[0.3, -0.9]);
        assert_eq!(back.predict(&x).unwrap(), t.predict(&x).unwrap());
    }
}
