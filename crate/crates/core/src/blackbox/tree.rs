use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// One node of a regression tree. Node ids equal positions in [`Tree::nodes`].
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase", deny_unknown_fields)]
pub enum TreeNode {
    /// Rows with `x[feature] <= threshold` go left.
    Internal {
        id: usize,
        feature: usize,
        threshold: f64,
        left: usize,
        right: usize,
        cover: usize,
    },
    Leaf {
        id: usize,
        value: f64,
        cover: usize,
    },
}

impl TreeNode {
    pub fn id(&self) -> usize {
        match self {
            TreeNode::Internal { id, .. } | TreeNode::Leaf { id, .. } => *id,
        }
    }

    /// Number of training rows routed through this node.
    pub fn cover(&self) -> usize {
        match self {
            TreeNode::Internal { cover, .. } | TreeNode::Leaf { cover, .. } => *cover,
        }
    }

    pub fn is_leaf(&self) -> bool {
        matches!(self, TreeNode::Leaf { .. })
    }
}

/// A regression tree contributing to margin `output` of its ensemble.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Tree {
    #[serde(default)]
    pub output: usize,
    pub nodes: Vec<TreeNode>,
}

impl Tree {
    /// A single-leaf tree.
    pub fn constant(value: f64, cover: usize) -> Tree {
        Tree {
            output: 0,
            nodes: vec![TreeNode::Leaf { id: 0, value, cover }],
        }
    }

    /// A depth-one tree on `feature`.
    pub fn stump(feature: usize, threshold: f64, left: (f64, usize), right: (f64, usize)) -> Tree {
        Tree {
            output: 0,
            nodes: vec![
                TreeNode::Internal {
                    id: 0,
                    feature,
                    threshold,
                    left: 1,
                    right: 2,
                    cover: left.1 + right.1,
                },
                TreeNode::Leaf {
                    id: 1,
                    value: left.0,
                    cover: left.1,
                },
                TreeNode::Leaf {
                    id: 2,
                    value: right.0,
                    cover: right.1,
                },
            ],
        }
    }

    pub fn root(&self) -> &TreeNode {
        &self.nodes[0]
    }

    pub fn leaf_index(&self, x: &[f64]) -> usize {
        let mut at = 0;
        loop {
            match &self.nodes[at] {
                TreeNode::Leaf { .. } => return at,
                TreeNode::Internal {
                    feature,
                    threshold,
                    left,
                    right,
                    ..
                } => at = if x[*feature] <= *threshold { *left } else { *right },
            }
        }
    }

    pub fn predict(&self, x: &[f64]) -> f64 {
        match &self.nodes[self.leaf_index(x)] {
            TreeNode::Leaf { value, .. } => *value,
            TreeNode::Internal { .. } => unreachable!("leaf_index returns a leaf"),
        }
    }

    /// Depth of the deepest leaf; a single leaf has depth 0.
    pub fn depth(&self) -> usize {
        fn walk(t: &Tree, at: usize) -> usize {
            match &t.nodes[at] {
                TreeNode::Leaf { .. } => 0,
                TreeNode::Internal { left, right, .. } => 1 + walk(t, *left).max(walk(t, *right)),
            }
        }
        walk(self, 0)
    }

    /// Distinct split features, ascending.
    pub fn split_features(&self) -> Vec<usize> {
        let mut f: Vec<usize> = self
            .nodes
            .iter()
            .filter_map(|n| match n {
                TreeNode::Internal { feature, .. } => Some(*feature),
                TreeNode::Leaf { .. } => None,
            })
            .collect();
        f.sort_unstable();
        f.dedup();
        f
    }

    pub fn max_feature(&self) -> Option<usize> {
        self.split_features().last().copied()
    }

    /// Checks ids, child references, cover conservation and finite values.
    pub fn validate(&self) -> Result<()> {
        if self.nodes.is_empty() {
            return Err(Error::InvalidData("tree has no nodes".into()));
        }
        let mut referenced = vec![false; self.nodes.len()];
        for (i, node) in self.nodes.iter().enumerate() {
            if node.id() != i {
                return Err(Error::InvalidData(format!("node at position {i} has id {}", node.id())));
            }
            if node.cover() == 0 {
                return Err(Error::InvalidData(format!("node {i} has zero cover")));
            }
            match node {
                TreeNode::Leaf { value, .. } => {
                    if !value.is_finite() {
                        return Err(Error::InvalidData(format!("leaf {i} value is not finite")));
                    }
                }
                TreeNode::Internal {
                    threshold,
                    left,
                    right,
                    cover,
                    ..
                } => {
                    if !threshold.is_finite() {
                        return Err(Error::InvalidData(format!("node {i} threshold is not finite")));
                    }
                    for &c in [left, right] {
                        if c <= i || c >= self.nodes.len() || referenced[c] {
                            return Err(Error::InvalidData(format!("node {i} has invalid child {c}")));
                        }
                        referenced[c] = true;
                    }
                    let sum = self.nodes[*left].cover() + self.nodes[*right].cover();
                    if sum != *cover {
                        return Err(Error::InvalidData(format!(
                            "node {i} cover {cover} != children {sum}"
                        )));
                    }
                }
            }
        }
        if referenced.iter().skip(1).any(|r| !r) {
            return Err(Error::InvalidData("tree has unreachable nodes".into()));
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn stump_routes_by_threshold() {
        let t = Tree::stump(0, 0.5, (-1.0, 10), (1.0, 10));
        assert_eq!(t.predict(&[0.7]), 1.0);
        assert_eq!(t.predict(&[0.5]), -1.0);
        assert_eq!(t.depth(), 1);
        t.validate().unwrap();
    }

    #[test]
    fn validation_catches_cover_leak() {
        let mut t = Tree::stump(0, 0.5, (-1.0, 10), (1.0, 10));
        if let TreeNode::Internal { cover, .. } = &mut t.nodes[0] {
            *cover = 21;
        }
        assert!(t.validate().is_err());
    }

    #[test]
    fn json_uses_explicit_kind_and_ids() {
        let t = Tree::stump(2, 0.25, (0.0, 25), (4.0, 75));
        let v = serde_json::to_value(&t).unwrap();
        assert_eq!(v["nodes"][0]["kind"], "internal");
        assert_eq!(v["nodes"][2]["id"], 2);
        let back: Tree = serde_json::from_value(v).unwrap();
        assert_eq!(back, t);
    }
}
