use serde::{Deserialize, Serialize};

use super::tree::TreeNode;
use crate::data::Dataset;
use crate::error::{HteError, Result};

/// Leaf payload of a pollinated tree: arm-specific mean responses.
///
/// `n1`/`n0` are the leaf's own arm counts. When either is zero the means
/// are inherited from the nearest ancestor with both arms and `inherited`
/// is set.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct PairLeaf {
    pub ybar1: f64,
    pub ybar0: f64,
    pub n1: usize,
    pub n0: usize,
    #[serde(default)]
    pub inherited: bool,
}

impl PairLeaf {
    pub fn effect(&self) -> f64 {
        self.ybar1 - self.ybar0
    }
}

pub type PairTree = TreeNode<PairLeaf>;

/// Arm means of `rows`, or `None` if either arm is empty.
pub(crate) fn arm_means(d: &Dataset, rows: &[usize]) -> Option<(f64, f64)> {
    let (mut s1, mut s0, mut n1, mut n0) = (0.0, 0.0, 0usize, 0usize);
    for &i in rows {
        if d.is_treated(i) {
            s1 += d.response()[i];
            n1 += 1;
        } else {
            s0 += d.response()[i];
            n0 += 1;
        }
    }
    (n1 > 0 && n0 > 0).then(|| (s1 / n1 as f64, s0 / n0 as f64))
}

/// Replaces every leaf payload of `tree` with the arm means of the rows of
/// `d` routed there. Topology is unchanged.
pub fn pollinate_tree<P>(tree: &TreeNode<P>, d: &Dataset) -> Result<PairTree> {
    let rows: Vec<usize> = (0..d.n()).collect();
    let estimate = |r: &[usize]| arm_means(d, r);
    let wrap = |&(ybar1, ybar0): &(f64, f64), r: &[usize], inherited: bool| {
        let n1 = r.iter().filter(|&&i| d.is_treated(i)).count();
        PairLeaf {
            ybar1,
            ybar0,
            n1,
            n0: r.len() - n1,
            inherited,
        }
    };
    tree.refill(d.features(), &rows, &estimate, &wrap)
        .ok_or(HteError::RootDegenerate)
}
