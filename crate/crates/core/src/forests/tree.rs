use serde::{Deserialize, Serialize};

use crate::data::Matrix;

/// Binary decision tree with payload `P` at the leaves.
///
/// A unit whose split feature is `< threshold` goes left, otherwise right.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "node", rename_all = "snake_case")]
pub enum TreeNode<P> {
    Leaf {
        payload: P,
    },
    Split {
        feature: usize,
        threshold: f64,
        left: Box<TreeNode<P>>,
        right: Box<TreeNode<P>>,
    },
}

impl<P> TreeNode<P> {
    pub fn leaf(payload: P) -> Self {
        TreeNode::Leaf { payload }
    }

    pub fn split(feature: usize, threshold: f64, left: TreeNode<P>, right: TreeNode<P>) -> Self {
        TreeNode::Split {
            feature,
            threshold,
            left: Box::new(left),
            right: Box::new(right),
        }
    }

    #[inline]
    pub fn route(&self, x: &[f64]) -> &P {
        let mut node = self;
        loop {
            match node {
                TreeNode::Leaf { payload } => return payload,
                TreeNode::Split {
                    feature,
                    threshold,
                    left,
                    right,
                } => {
                    node = if x[*feature] < *threshold { left } else { right };
                }
            }
        }
    }

    /// Index of the leaf `x` lands in, leaves numbered left to right.
    pub fn leaf_index(&self, x: &[f64]) -> usize {
        let mut node = self;
        let mut offset = 0;
        loop {
            match node {
                TreeNode::Leaf { .. } => return offset,
                TreeNode::Split {
                    feature,
                    threshold,
                    left,
                    right,
                } => {
                    if x[*feature] < *threshold {
                        node = left;
                    } else {
                        offset += left.n_leaves();
                        node = right;
                    }
                }
            }
        }
    }

    pub fn n_leaves(&self) -> usize {
        match self {
            TreeNode::Leaf { .. } => 1,
            TreeNode::Split { left, right, .. } => left.n_leaves() + right.n_leaves(),
        }
    }

    pub fn depth(&self) -> usize {
        match self {
            TreeNode::Leaf { .. } => 0,
            TreeNode::Split { left, right, .. } => 1 + left.depth().max(right.depth()),
        }
    }

    pub fn leaves(&self) -> Vec<&P> {
        let mut out = Vec::new();
        self.collect_leaves(&mut out);
        out
    }

    fn collect_leaves<'a>(&'a self, out: &mut Vec<&'a P>) {
        match self {
            TreeNode::Leaf { payload } => out.push(payload),
            TreeNode::Split { left, right, .. } => {
                left.collect_leaves(out);
                right.collect_leaves(out);
            }
        }
    }

    /// Pre-order list of `(feature, threshold)` of every internal node.
    pub fn splits(&self) -> Vec<(usize, f64)> {
        let mut out = Vec::new();
        self.collect_splits(&mut out);
        out
    }

    fn collect_splits(&self, out: &mut Vec<(usize, f64)>) {
        if let TreeNode::Split {
            feature,
            threshold,
            left,
            right,
        } = self
        {
            out.push((*feature, *threshold));
            left.collect_splits(out);
            right.collect_splits(out);
        }
    }

    pub fn same_topology<Q>(&self, other: &TreeNode<Q>) -> bool {
        match (self, other) {
            (TreeNode::Leaf { .. }, TreeNode::Leaf { .. }) => true,
            (
                TreeNode::Split {
                    feature: f1,
                    threshold: t1,
                    left: l1,
                    right: r1,
                },
                TreeNode::Split {
                    feature: f2,
                    threshold: t2,
                    left: l2,
                    right: r2,
                },
            ) => f1 == f2 && t1.to_bits() == t2.to_bits() && l1.same_topology(l2) && r1.same_topology(r2),
            _ => false,
        }
    }

    /// Split counts per feature, the one importance measure offered.
    pub fn split_counts(&self, p: usize) -> Vec<usize> {
        let mut counts = vec![0; p];
        for (f, _) in self.splits() {
            if f < p {
                counts[f] += 1;
            }
        }
        counts
    }

    pub fn map<Q>(&self, f: &impl Fn(&P) -> Q) -> TreeNode<Q> {
        match self {
            TreeNode::Leaf { payload } => TreeNode::leaf(f(payload)),
            TreeNode::Split {
                feature,
                threshold,
                left,
                right,
            } => TreeNode::split(*feature, *threshold, left.map(f), right.map(f)),
        }
    }

    /// Rebuilds the payloads from the rows routed to each node.
    ///
    /// `estimate` is evaluated on every node's rows; a node whose estimate
    /// is `None` inherits the nearest ancestor's estimate, and `wrap`
    /// receives the estimate plus whether it was inherited. Returns `None`
    /// if the root itself has no estimate.
    pub fn refill<E: Clone, Q>(
        &self,
        x: &Matrix,
        rows: &[usize],
        estimate: &impl Fn(&[usize]) -> Option<E>,
        wrap: &impl Fn(&E, &[usize], bool) -> Q,
    ) -> Option<TreeNode<Q>> {
        let root = estimate(rows)?;
        Some(self.refill_inner(x, rows, estimate, wrap, &root, true))
    }

    fn refill_inner<E: Clone, Q>(
        &self,
        x: &Matrix,
        rows: &[usize],
        estimate: &impl Fn(&[usize]) -> Option<E>,
        wrap: &impl Fn(&E, &[usize], bool) -> Q,
        inherited: &E,
        is_root: bool,
    ) -> TreeNode<Q> {
        let own = if is_root {
            None
        } else {
            estimate(rows)
        };
        let (current, fallback) = match (&own, is_root) {
            (_, true) => (inherited, false),
            (Some(e), false) => (e, false),
            (None, false) => (inherited, true),
        };
        match self {
            TreeNode::Leaf { .. } => TreeNode::leaf(wrap(current, rows, fallback)),
            TreeNode::Split {
                feature,
                threshold,
                left,
                right,
            } => {
                let (l, r): (Vec<usize>, Vec<usize>) =
                    rows.iter().partition(|&&i| x.get(i, *feature) < *threshold);
                TreeNode::split(
                    *feature,
                    *threshold,
                    left.refill_inner(x, &l, estimate, wrap, current, false),
                    right.refill_inner(x, &r, estimate, wrap, current, false),
                )
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn fixture() -> TreeNode<f64> {
        TreeNode::split(
            0,
            0.5,
            TreeNode::leaf(1.0),
            TreeNode::split(1, 2.0, TreeNode::leaf(2.0), TreeNode::leaf(3.0)),
        )
    }

    #[test]
    fn routing_ties_go_right() {
        let t = fixture();
        assert_eq!(*t.route(&[0.4, 0.0]), 1.0);
        assert_eq!(*t.route(&[0.5, 0.0]), 2.0);
        assert_eq!(*t.route(&[0.5, 2.0]), 3.0);
        assert_eq!(t.leaf_index(&[0.5, 2.0]), 2);
        assert_eq!(t.n_leaves(), 3);
        assert_eq!(t.depth(), 2);
        assert_eq!(t.splits(), vec![(0, 0.5), (1, 2.0)]);
    }

    #[test]
    fn serde_nested_round_trip() {
        let t = fixture();
        let s = serde_json::to_string(&t).unwrap();
        assert!(s.contains("\"node\":\"split\""));
        let back: TreeNode<f64> = serde_json::from_str(&s).unwrap();
        assert_eq!(back, t);
    }

    #[test]
    fn refill_inherits_from_ancestor() {
        let t = fixture();
        let x = Matrix::new(4, 2, vec![0.0, 0.0, 1.0, 0.0, 1.0, 5.0, 1.0, 6.0]).unwrap();
        // Only nodes with at least two rows get an estimate of their own.
        let est = |rows: &[usize]| (rows.len() >= 2).then(|| rows.len() as f64);
        let out = t
            .refill(&x, &[0, 1, 2, 3], &est, &|e: &f64, _r: &[usize], fb| (*e, fb))
            .unwrap();
        let leaves: Vec<(f64, bool)> = out.leaves().into_iter().copied().collect();
        assert_eq!(leaves, vec![(4.0, true), (3.0, true), (2.0, false)]);
        assert!(out.same_topology(&t));
    }
}
