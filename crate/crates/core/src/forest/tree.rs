//! CART trees over mixed numeric/categorical predictors with surrogate
//! splits for missing values.
//!
//! Trees are grown breadth-first until `max_splits` branch nodes exist.
//! Each node keeps, per predictor, the list of its sample slots that have
//! the predictor present, sorted by value; children inherit these lists by
//! stable partition, so no re-sorting happens below the root.

use std::collections::VecDeque;

use rand::seq::index;
use serde::{Deserialize, Serialize};

use super::data::{ColumnKind, Dataset, Task};
use crate::error::{Error, Result};
use crate::seed::Rng;

/// Nodes with fewer training rows than this are not split.
pub const DEFAULT_MIN_NODE_SIZE: usize = 5;
/// Categorical predictors with at most this many levels in a node get an
/// exhaustive subset search; above it, levels are ordered by mean response
/// and split as an ordinal.
pub const MAX_ENUMERATED_LEVELS: usize = 10;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Direction {
    Left,
    Right,
}

impl Direction {
    pub fn flip(self) -> Self {
        match self {
            Direction::Left => Direction::Right,
            Direction::Right => Direction::Left,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum SplitKind {
    /// `value < threshold` goes left.
    NumericThreshold { threshold: f64 },
    /// Levels in `left` go left, levels in `right` go right; any other level
    /// was not seen at this node and is treated like a missing value.
    CategoricalSubset { left: Vec<u32>, right: Vec<u32> },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SplitRule {
    pub predictor: usize,
    #[serde(flatten)]
    pub kind: SplitKind,
}

impl SplitRule {
    /// Direction for a predictor value, `None` if it cannot be routed.
    pub fn direction(&self, value: f64) -> Option<Direction> {
        if value.is_nan() {
            return None;
        }
        match &self.kind {
            SplitKind::NumericThreshold { threshold } => Some(if value < *threshold {
                Direction::Left
            } else {
                Direction::Right
            }),
            SplitKind::CategoricalSubset { left, right } => {
                let level = value as u32;
                if left.binary_search(&level).is_ok() {
                    Some(Direction::Left)
                } else if right.binary_search(&level).is_ok() {
                    Some(Direction::Right)
                } else {
                    None
                }
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Surrogate {
    pub rule: SplitRule,
    /// Fraction of rows (both predictors present) sent the same way as the primary split.
    pub agreement: f64,
    /// The surrogate's left/right are swapped before use.
    pub flipped: bool,
}

impl Surrogate {
    pub fn direction(&self, value: f64) -> Option<Direction> {
        self.rule
            .direction(value)
            .map(|d| if self.flipped { d.flip() } else { d })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Branch {
    pub rule: SplitRule,
    /// Sorted by non-increasing agreement.
    pub surrogates: Vec<Surrogate>,
    /// Majority child among rows with the primary predictor present.
    pub default_direction: Direction,
    pub left: u32,
    pub right: u32,
}

impl Branch {
    /// Primary rule, then surrogates in order, then the default direction.
    pub fn route_with(&self, value: impl Fn(usize) -> f64) -> Direction {
        if let Some(d) = self.rule.direction(value(self.rule.predictor)) {
            return d;
        }
        self.surrogates
            .iter()
            .find_map(|s| s.direction(value(s.rule.predictor)))
            .unwrap_or(self.default_direction)
    }

    pub fn child(&self, d: Direction) -> usize {
        match d {
            Direction::Left => self.left as usize,
            Direction::Right => self.right as usize,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum LeafValue {
    Mean(f64),
    Counts(Vec<f64>),
}

impl LeafValue {
    /// Regression mean, or the majority class index (lowest index on ties).
    pub fn point(&self) -> f64 {
        match self {
            LeafValue::Mean(v) => *v,
            LeafValue::Counts(c) => argmax(c) as f64,
        }
    }
}

pub(crate) fn argmax(v: &[f64]) -> usize {
    let mut best = 0;
    for (i, x) in v.iter().enumerate() {
        if *x > v[best] {
            best = i;
        }
    }
    best
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Node {
    pub branch: Option<Branch>,
    pub value: LeafValue,
    /// Impurity decrease of this node's split, weighted by the node's share
    /// of the tree's training rows. Zero for leaves.
    pub gain: f64,
    pub n_samples: u32,
}

/// A fitted tree stored as a flat node array; node 0 is the root and
/// children always follow their parent.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Tree {
    pub nodes: Vec<Node>,
}

impl Tree {
    pub fn root(&self) -> &Node {
        &self.nodes[0]
    }

    pub fn leaf_index(&self, row: &[f64]) -> usize {
        let mut i = 0;
        while let Some(b) = &self.nodes[i].branch {
            i = b.child(b.route_with(|j| row[j]));
        }
        i
    }

    pub fn predict(&self, row: &[f64]) -> &LeafValue {
        &self.nodes[self.leaf_index(row)].value
    }

    pub fn predict_point(&self, row: &[f64]) -> f64 {
        self.predict(row).point()
    }

    pub fn n_branches(&self) -> usize {
        self.nodes.iter().filter(|n| n.branch.is_some()).count()
    }

    /// Split-gain importance: each branch node credits its gain to the
    /// primary predictor and `agreement * gain` to every surrogate's
    /// predictor; the sum is divided by the number of branch nodes.
    pub fn importance(&self, n_predictors: usize) -> Vec<f64> {
        let mut imp = vec![0.0; n_predictors];
        let mut branches = 0usize;
        for n in &self.nodes {
            let Some(b) = &n.branch else { continue };
            branches += 1;
            imp[b.rule.predictor] += n.gain;
            for s in &b.surrogates {
                imp[s.rule.predictor] += s.agreement * n.gain;
            }
        }
        if branches > 0 {
            imp.iter_mut().for_each(|v| *v /= branches as f64);
        }
        imp
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TreeParams {
    pub max_splits: usize,
    pub min_node_size: usize,
    /// Predictors drawn per node; `None` picks ceil(p/3) for regression and
    /// ceil(sqrt(p)) for classification.
    pub mtry: Option<usize>,
    pub task: Task,
}

impl TreeParams {
    pub fn regression(max_splits: usize) -> Self {
        TreeParams {
            max_splits,
            min_node_size: DEFAULT_MIN_NODE_SIZE,
            mtry: None,
            task: Task::Regression,
        }
    }

    pub fn resolved_mtry(&self, p: usize) -> usize {
        let m = self.mtry.unwrap_or(match self.task {
            Task::Regression => p.div_ceil(3),
            Task::Classification { .. } => (p as f64).sqrt().ceil() as usize,
        });
        m.min(p)
    }
}

/// Fit a tree on every row of `data`.
pub fn fit_tree(data: &Dataset, targets: &[f64], params: &TreeParams, rng: &mut Rng) -> Result<Tree> {
    if targets.len() != data.n_rows() {
        return Err(Error::invalid("targets length differs from row count"));
    }
    let rows: Vec<usize> = (0..data.n_rows()).collect();
    fit_tree_rows(data, &rows, targets, params, rng)
}

/// Fit a tree on the sample `rows` (repeats allowed), with `targets[k]` the
/// response of `rows[k]`. Rows with a non-finite target are skipped.
pub fn fit_tree_rows(
    data: &Dataset,
    rows: &[usize],
    targets: &[f64],
    params: &TreeParams,
    rng: &mut Rng,
) -> Result<Tree> {
    if rows.len() != targets.len() {
        return Err(Error::invalid("rows and targets differ in length"));
    }
    let p = data.n_cols();
    if p == 0 || params.resolved_mtry(p) == 0 {
        return Err(Error::invalid("empty feature subset"));
    }
    let (slots, y): (Vec<usize>, Vec<f64>) = rows
        .iter()
        .zip(targets)
        .filter(|(_, t)| t.is_finite())
        .map(|(r, t)| (*r, *t))
        .unzip();
    if slots.is_empty() {
        return Err(Error::InsufficientData("all targets missing".into()));
    }
    let n_classes = match params.task {
        Task::Regression => 0,
        Task::Classification { n_classes } => {
            if let Some(bad) = y.iter().find(|c| c.fract() != 0.0 || **c < 0.0 || **c >= n_classes as f64) {
                return Err(Error::invalid(format!("class label {bad} outside 0..{n_classes}")));
            }
            n_classes
        }
    };
    let mut b = Builder {
        data,
        n_slots: slots.len(),
        slots,
        y,
        params,
        n_classes,
        dir: Vec::new(),
    };
    b.dir = vec![0; b.n_slots];
    Ok(b.grow(rng))
}

struct Builder<'a> {
    data: &'a Dataset,
    slots: Vec<usize>,
    y: Vec<f64>,
    n_slots: usize,
    params: &'a TreeParams,
    n_classes: usize,
    /// Scratch: 0 = primary missing, 1 = left, 2 = right.
    dir: Vec<u8>,
}

struct Work {
    node: usize,
    members: Vec<u32>,
    sorted: Vec<Vec<u32>>,
}

struct Candidate {
    rule: SplitRule,
    score: f64,
}

impl Builder<'_> {
    #[inline]
    fn x(&self, slot: u32, j: usize) -> f64 {
        self.data.value(self.slots[slot as usize], j)
    }

    fn stat_dim(&self) -> usize {
        if self.n_classes == 0 {
            1
        } else {
            self.n_classes
        }
    }

    /// Add slot `s`'s response to a statistic vector (centered sum for
    /// regression, class counts for classification).
    #[inline]
    fn accumulate(&self, acc: &mut [f64], s: u32, center: f64) {
        if self.n_classes == 0 {
            acc[0] += self.y[s as usize] - center;
        } else {
            acc[self.y[s as usize] as usize] += 1.0;
        }
    }

    /// Purity term q = sum(stat^2)/n; impurity decrease is
    /// q(left) + q(right) - q(parent).
    #[inline]
    fn purity(n: f64, stat: &[f64]) -> f64 {
        if n <= 0.0 {
            0.0
        } else {
            stat.iter().map(|v| v * v).sum::<f64>() / n
        }
    }

    fn leaf_value(&self, members: &[u32]) -> LeafValue {
        if self.n_classes == 0 {
            let sum: f64 = members.iter().map(|&s| self.y[s as usize]).sum();
            LeafValue::Mean(sum / members.len() as f64)
        } else {
            let mut c = vec![0.0; self.n_classes];
            for &s in members {
                c[self.y[s as usize] as usize] += 1.0;
            }
            LeafValue::Counts(c)
        }
    }

    /// Exact total impurity (SSE or n * Gini) of a set of slots.
    fn impurity(&self, members: impl Iterator<Item = u32> + Clone) -> f64 {
        if self.n_classes == 0 {
            let n = members.clone().count() as f64;
            if n == 0.0 {
                return 0.0;
            }
            let m = members.clone().map(|s| self.y[s as usize]).sum::<f64>() / n;
            members.map(|s| (self.y[s as usize] - m).powi(2)).sum()
        } else {
            let mut c = vec![0.0; self.n_classes];
            let mut n = 0.0;
            for s in members {
                c[self.y[s as usize] as usize] += 1.0;
                n += 1.0;
            }
            if n == 0.0 {
                return 0.0;
            }
            n - c.iter().map(|v| v * v).sum::<f64>() / n
        }
    }

    fn grow(mut self, rng: &mut Rng) -> Tree {
        let p = self.data.n_cols();
        let n_root = self.n_slots as f64;
        let members: Vec<u32> = (0..self.n_slots as u32).collect();
        let sorted: Vec<Vec<u32>> = (0..p)
            .map(|j| {
                let mut v: Vec<u32> = members.iter().copied().filter(|&s| !self.x(s, j).is_nan()).collect();
                v.sort_by(|&a, &b| self.x(a, j).total_cmp(&self.x(b, j)).then(a.cmp(&b)));
                v
            })
            .collect();
        let mut nodes = vec![Node {
            branch: None,
            value: self.leaf_value(&members),
            gain: 0.0,
            n_samples: members.len() as u32,
        }];
        let mut queue = VecDeque::from([Work {
            node: 0,
            members,
            sorted,
        }]);
        let mut splits = 0usize;
        let mtry = self.params.resolved_mtry(p);

        while let Some(work) = queue.pop_front() {
            if splits >= self.params.max_splits {
                break;
            }
            if work.members.len() < self.params.min_node_size.max(2) {
                continue;
            }
            if self.impurity(work.members.iter().copied()) <= 0.0 {
                continue;
            }
            let mut features = if mtry >= p {
                (0..p).collect::<Vec<_>>()
            } else {
                index::sample(rng, p, mtry).into_vec()
            };
            features.sort_unstable();

            let Some(best) = self.best_split(&work, &features) else {
                continue;
            };
            let primary = best.rule;

            // Directions of rows with the primary predictor present.
            let (mut n_left, mut n_right) = (0usize, 0usize);
            for &s in &work.members {
                self.dir[s as usize] = match primary.direction(self.x(s, primary.predictor)) {
                    None => 0,
                    Some(Direction::Left) => {
                        n_left += 1;
                        1
                    }
                    Some(Direction::Right) => {
                        n_right += 1;
                        2
                    }
                };
            }
            let present = || work.members.iter().copied().filter(|&s| self.dir[s as usize] != 0);
            let decrease = self.impurity(present())
                - self.impurity(present().filter(|&s| self.dir[s as usize] == 1))
                - self.impurity(present().filter(|&s| self.dir[s as usize] == 2));
            if decrease <= 0.0 || n_left == 0 || n_right == 0 {
                continue;
            }
            let default_direction = if n_left >= n_right {
                Direction::Left
            } else {
                Direction::Right
            };
            let surrogates = self.surrogates(&work, &primary);
            let branch_probe = Branch {
                rule: primary,
                surrogates,
                default_direction,
                left: 0,
                right: 0,
            };

            // Route every member (missing primaries via surrogates/default).
            let mut goes_left = vec![false; 0];
            goes_left.resize(self.n_slots, false);
            let mut left_members = Vec::new();
            let mut right_members = Vec::new();
            for &s in &work.members {
                let row = self.slots[s as usize];
                let d = branch_probe.route_with(|j| self.data.value(row, j));
                if d == Direction::Left {
                    goes_left[s as usize] = true;
                    left_members.push(s);
                } else {
                    right_members.push(s);
                }
            }
            let (mut left_sorted, mut right_sorted) = (Vec::with_capacity(p), Vec::with_capacity(p));
            for list in work.sorted {
                let (l, r): (Vec<u32>, Vec<u32>) = list.into_iter().partition(|&s| goes_left[s as usize]);
                left_sorted.push(l);
                right_sorted.push(r);
            }

            let left_id = nodes.len();
            let right_id = left_id + 1;
            nodes.push(Node {
                branch: None,
                value: self.leaf_value(&left_members),
                gain: 0.0,
                n_samples: left_members.len() as u32,
            });
            nodes.push(Node {
                branch: None,
                value: self.leaf_value(&right_members),
                gain: 0.0,
                n_samples: right_members.len() as u32,
            });
            let node = &mut nodes[work.node];
            node.gain = decrease / n_root;
            node.branch = Some(Branch {
                left: left_id as u32,
                right: right_id as u32,
                ..branch_probe
            });
            splits += 1;
            queue.push_back(Work {
                node: left_id,
                members: left_members,
                sorted: left_sorted,
            });
            queue.push_back(Work {
                node: right_id,
                members: right_members,
                sorted: right_sorted,
            });
        }
        Tree { nodes }
    }

    fn best_split(&self, work: &Work, features: &[usize]) -> Option<Candidate> {
        let center = if self.n_classes == 0 {
            work.members.iter().map(|&s| self.y[s as usize]).sum::<f64>() / work.members.len() as f64
        } else {
            0.0
        };
        let mut best: Option<Candidate> = None;
        for &j in features {
            let list = &work.sorted[j];
            if list.len() < 2 {
                continue;
            }
            let cand = match self.data.schema().columns[j].kind {
                ColumnKind::Numeric => self.numeric_split(j, list, center),
                ColumnKind::Categorical { .. } => self.categorical_split(j, list, center),
            };
            if let Some(c) = cand {
                let names = &self.data.schema().columns;
                let better = |b: &Candidate| {
                    c.score > b.score
                        || (c.score == b.score && names[c.rule.predictor].name < names[b.rule.predictor].name)
                };
                if c.score > 0.0 && best.as_ref().is_none_or(better) {
                    best = Some(c);
                }
            }
        }
        best
    }

    fn numeric_split(&self, j: usize, list: &[u32], center: f64) -> Option<Candidate> {
        let m = self.stat_dim();
        let n = list.len();
        let mut total = vec![0.0; m];
        for &s in list {
            self.accumulate(&mut total, s, center);
        }
        let q_parent = Self::purity(n as f64, &total);
        let mut left = vec![0.0; m];
        let mut right = vec![0.0; m];
        let mut best: Option<(f64, f64)> = None;
        for i in 0..n - 1 {
            self.accumulate(&mut left, list[i], center);
            let (xi, xn) = (self.x(list[i], j), self.x(list[i + 1], j));
            if xi < xn {
                let nl = (i + 1) as f64;
                for k in 0..m {
                    right[k] = total[k] - left[k];
                }
                let score = Self::purity(nl, &left) + Self::purity(n as f64 - nl, &right) - q_parent;
                if best.is_none_or(|(b, _)| score > b) {
                    let mut thr = 0.5 * (xi + xn);
                    if thr <= xi {
                        thr = xn;
                    }
                    best = Some((score, thr));
                }
            }
        }
        best.map(|(score, threshold)| Candidate {
            rule: SplitRule {
                predictor: j,
                kind: SplitKind::NumericThreshold { threshold },
            },
            score,
        })
    }

    fn categorical_split(&self, j: usize, list: &[u32], center: f64) -> Option<Candidate> {
        let m = self.stat_dim();
        // list is sorted by level, so equal levels are contiguous
        let mut levels: Vec<(u32, f64, Vec<f64>)> = Vec::new();
        for &s in list {
            let lv = self.x(s, j) as u32;
            if levels.last().is_none_or(|l| l.0 != lv) {
                levels.push((lv, 0.0, vec![0.0; m]));
            }
            let last = levels.last_mut().expect("pushed above");
            last.1 += 1.0;
            self.accumulate(&mut last.2, s, center);
        }
        let nl = levels.len();
        if nl < 2 {
            return None;
        }
        let n: f64 = levels.iter().map(|l| l.1).sum();
        let mut total = vec![0.0; m];
        for l in &levels {
            for k in 0..m {
                total[k] += l.2[k];
            }
        }
        let q_parent = Self::purity(n, &total);
        let mut left = vec![0.0; m];
        let mut right = vec![0.0; m];
        let score_of = |left: &mut Vec<f64>, right: &mut Vec<f64>, members: &mut dyn Iterator<Item = usize>| {
            left.iter_mut().for_each(|v| *v = 0.0);
            let mut n_left = 0.0;
            for i in members {
                n_left += levels[i].1;
                for k in 0..m {
                    left[k] += levels[i].2[k];
                }
            }
            for k in 0..m {
                right[k] = total[k] - left[k];
            }
            Self::purity(n_left, left) + Self::purity(n - n_left, right) - q_parent
        };

        let mut best: Option<(f64, Vec<usize>)> = None;
        if nl <= MAX_ENUMERATED_LEVELS {
            // level 0 always left; enumerate the remaining nl-1 levels
            let full = (1u32 << (nl - 1)) - 1;
            for mask in 0..full {
                let mut it = std::iter::once(0).chain((1..nl).filter(|i| mask & (1 << (i - 1)) != 0));
                let score = score_of(&mut left, &mut right, &mut it);
                if best.as_ref().is_none_or(|(b, _)| score > *b) {
                    let set = std::iter::once(0)
                        .chain((1..nl).filter(|i| mask & (1 << (i - 1)) != 0))
                        .collect();
                    best = Some((score, set));
                }
            }
        } else {
            let key: Vec<f64> = if self.n_classes == 0 {
                levels.iter().map(|l| l.2[0] / l.1).collect()
            } else {
                let major = argmax(&total);
                levels.iter().map(|l| l.2[major] / l.1).collect()
            };
            let mut order: Vec<usize> = (0..nl).collect();
            order.sort_by(|&a, &b| key[a].total_cmp(&key[b]).then(a.cmp(&b)));
            for cut in 1..nl {
                let score = score_of(&mut left, &mut right, &mut order[..cut].iter().copied());
                if best.as_ref().is_none_or(|(b, _)| score > *b) {
                    best = Some((score, order[..cut].to_vec()));
                }
            }
        }
        best.map(|(score, set)| {
            let mut in_left = vec![false; nl];
            set.iter().for_each(|&i| in_left[i] = true);
            let (l, r): (Vec<usize>, Vec<usize>) = (0..nl).partition(|&i| in_left[i]);
            let mut left: Vec<u32> = l.into_iter().map(|i| levels[i].0).collect();
            let mut right: Vec<u32> = r.into_iter().map(|i| levels[i].0).collect();
            left.sort_unstable();
            right.sort_unstable();
            Candidate {
                rule: SplitRule {
                    predictor: j,
                    kind: SplitKind::CategoricalSubset { left, right },
                },
                score,
            }
        })
    }

    fn surrogates(&self, work: &Work, primary: &SplitRule) -> Vec<Surrogate> {
        let mut out = Vec::new();
        for j in 0..self.data.n_cols() {
            if j == primary.predictor {
                continue;
            }
            let pairs = work.sorted[j].iter().filter_map(|&s| match self.dir[s as usize] {
                1 => Some((self.x(s, j), Direction::Left)),
                2 => Some((self.x(s, j), Direction::Right)),
                _ => None,
            });
            let kind = self.data.schema().columns[j].kind;
            if let Some(sur) = best_surrogate(j, kind, pairs) {
                out.push(sur);
            }
        }
        sort_surrogates(self.data, &mut out);
        out
    }
}

/// Exact ties (in split score or agreement) are broken by column name, so
/// reordering the columns never changes the fitted tree.
fn sort_surrogates(data: &Dataset, v: &mut [Surrogate]) {
    let cols = &data.schema().columns;
    v.sort_by(|a, b| {
        b.agreement
            .total_cmp(&a.agreement)
            .then_with(|| cols[a.rule.predictor].name.cmp(&cols[b.rule.predictor].name))
    });
}

/// Best surrogate on predictor `j` from `(value, primary direction)` pairs
/// sorted by value. Returned only if it agrees with the primary split more
/// often than sending every row to the primary's majority side.
fn best_surrogate(
    j: usize,
    kind: ColumnKind,
    pairs: impl Iterator<Item = (f64, Direction)>,
) -> Option<Surrogate> {
    let pairs: Vec<(f64, Direction)> = pairs.collect();
    let n = pairs.len();
    if n == 0 {
        return None;
    }
    let n_left = pairs.iter().filter(|p| p.1 == Direction::Left).count();
    let n_right = n - n_left;
    let baseline = n_left.max(n_right);

    match kind {
        ColumnKind::Numeric => {
            let mut best: Option<(usize, f64, bool)> = None;
            let mut best_count = baseline;
            let (mut below_l, mut below_r) = (0usize, 0usize);
            for i in 0..n.saturating_sub(1) {
                match pairs[i].1 {
                    Direction::Left => below_l += 1,
                    Direction::Right => below_r += 1,
                }
                let (xi, xn) = (pairs[i].0, pairs[i + 1].0);
                if xi < xn {
                    let normal = below_l + (n_right - below_r);
                    let flipped = below_r + (n_left - below_l);
                    let mut thr = 0.5 * (xi + xn);
                    if thr <= xi {
                        thr = xn;
                    }
                    if normal > best_count {
                        best_count = normal;
                        best = Some((normal, thr, false));
                    }
                    if flipped > best_count {
                        best_count = flipped;
                        best = Some((flipped, thr, true));
                    }
                }
            }
            best.map(|(count, threshold, flipped)| Surrogate {
                rule: SplitRule {
                    predictor: j,
                    kind: SplitKind::NumericThreshold { threshold },
                },
                agreement: count as f64 / n as f64,
                flipped,
            })
        }
        ColumnKind::Categorical { .. } => {
            let majority = if n_left >= n_right {
                Direction::Left
            } else {
                Direction::Right
            };
            let mut levels: Vec<(u32, usize, usize)> = Vec::new();
            let mut sorted = pairs;
            sorted.sort_by(|a, b| a.0.total_cmp(&b.0));
            for (v, d) in sorted {
                let lv = v as u32;
                if levels.last().is_none_or(|l| l.0 != lv) {
                    levels.push((lv, 0, 0));
                }
                let last = levels.last_mut().expect("pushed above");
                match d {
                    Direction::Left => last.1 += 1,
                    Direction::Right => last.2 += 1,
                }
            }
            let (mut left, mut right) = (Vec::new(), Vec::new());
            let mut count = 0;
            for (lv, l, r) in levels {
                count += l.max(r);
                let goes_left = l > r || (l == r && majority == Direction::Left);
                if goes_left {
                    left.push(lv);
                } else {
                    right.push(lv);
                }
            }
            if count > baseline && !left.is_empty() && !right.is_empty() {
                Some(Surrogate {
                    rule: SplitRule {
                        predictor: j,
                        kind: SplitKind::CategoricalSubset { left, right },
                    },
                    agreement: count as f64 / n as f64,
                    flipped: false,
                })
            } else {
                None
            }
        }
    }
}

/// Surrogate splits for `primary` at a node holding `rows`, searched over
/// `candidates` and sorted by agreement. Rows with either predictor
/// missing are ignored.
pub fn find_surrogates(
    data: &Dataset,
    rows: &[usize],
    primary: &SplitRule,
    candidates: &[usize],
) -> Vec<Surrogate> {
    let mut out = Vec::new();
    for &j in candidates {
        if j == primary.predictor {
            continue;
        }
        let mut pairs: Vec<(f64, Direction)> = rows
            .iter()
            .filter_map(|&r| {
                let d = primary.direction(data.value(r, primary.predictor))?;
                let v = data.value(r, j);
                (!v.is_nan()).then_some((v, d))
            })
            .collect();
        pairs.sort_by(|a, b| a.0.total_cmp(&b.0));
        if let Some(s) = best_surrogate(j, data.schema().columns[j].kind, pairs.into_iter()) {
            out.push(s);
        }
    }
    sort_surrogates(data, &mut out);
    out
}
