//! Decision trees with surrogate splits and tree ensembles.

pub mod data;
pub mod ensemble;
pub mod tree;

pub use data::{Column, ColumnKind, Dataset, FeatureSchema, Task};
pub use ensemble::{fit_forest, ForestMode, ForestModel, ForestParams, Prediction};
pub use tree::{
    find_surrogates, fit_tree, fit_tree_rows, Branch, Direction, LeafValue, Node, SplitKind, SplitRule, Surrogate,
    Tree, TreeParams, DEFAULT_MIN_NODE_SIZE,
};
