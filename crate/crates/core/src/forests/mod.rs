//! Regression trees, bagged regression and probability forests, and
//! pollination of a fitted topology with arm-specific means.

mod cart;
mod forest;
mod pollinate;
mod tree;

pub use cart::{fit_regression_tree, ForestParams};
pub use forest::{fit_probability_forest, fit_regression_forest, RegressionForest, DEFAULT_CLIP};
pub use pollinate::{pollinate_tree, PairLeaf, PairTree};
pub use tree::TreeNode;

pub(crate) use cart::midpoint;
