//! Cost-sensitive binary decision tree over the seven blockwise features.
//!
//! Misclassification costs enter as per-class sample weights: a sample of
//! true class `i` weighs `c[i][1 - i]` in both the entropy of a node and
//! the vote that labels a leaf. Raising the cost of a miss (`c[1][0]`)
//! therefore pulls splits and leaf labels toward the defect class.

use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const FEATURE_COUNT: usize = 7;
pub const FEATURE_NAMES: [&str; FEATURE_COUNT] = [
    "mdl",
    "ddl",
    "dde",
    "size_px",
    "major_axis_px",
    "minor_axis_px",
    "severity",
];
pub const MODEL_FORMAT_VERSION: u32 = 1;

pub const DEFAULT_MAX_DEPTH: usize = 8;
pub const DEFAULT_MIN_LEAF: usize = 5;
pub const DEFAULT_FOLDS: usize = 5;

/// Published operating point of this classifier on a large production
/// scan set at miss cost 2. Not reproducible on generated pages; kept
/// for comparison in reports.
pub const REFERENCE_MISS_COST: f64 = 2.0;
pub const REFERENCE_FALSE_ALARM: f64 = 0.088;
pub const REFERENCE_MISS_RATE: f64 = 0.266;

/// Gains closer than this are treated as equal when choosing a split.
const GAIN_TIE_EPS: f64 = 1e-12;

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct FeatureVector7 {
    pub mdl: f64,
    pub ddl: f64,
    pub dde: f64,
    pub size_px: f64,
    pub major_axis_px: f64,
    pub minor_axis_px: f64,
    pub severity: f64,
}

impl FeatureVector7 {
    pub fn to_array(&self) -> [f64; FEATURE_COUNT] {
        [
            self.mdl,
            self.ddl,
            self.dde,
            self.size_px,
            self.major_axis_px,
            self.minor_axis_px,
            self.severity,
        ]
    }

    pub fn from_array(v: [f64; FEATURE_COUNT]) -> Self {
        Self {
            mdl: v[0],
            ddl: v[1],
            dde: v[2],
            size_px: v[3],
            major_axis_px: v[4],
            minor_axis_px: v[5],
            severity: v[6],
        }
    }

    pub fn is_valid(&self) -> bool {
        self.to_array().iter().all(|v| v.is_finite() && *v >= 0.0)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Sample {
    pub features: FeatureVector7,
    /// 1 = visible defect, 0 = normal block.
    pub label: u8,
}

/// `c[i][j]` is the cost of predicting class `j` when the truth is `i`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CostMatrix {
    pub c: [[f64; 2]; 2],
}

impl CostMatrix {
    pub fn new(c: [[f64; 2]; 2]) -> Result<Self> {
        let off = [c[0][1], c[1][0]];
        if c[0][0] != 0.0 || c[1][1] != 0.0 {
            return Err(Error::Training("cost matrix diagonal must be zero".into()));
        }
        if off.iter().any(|v| !v.is_finite() || *v <= 0.0) {
            return Err(Error::Training(
                "cost matrix off-diagonal entries must be positive and finite".into(),
            ));
        }
        Ok(Self { c })
    }

    /// False alarms cost 1, misses cost `miss_cost`.
    pub fn with_miss_cost(miss_cost: f64) -> Result<Self> {
        Self::new([[0.0, 1.0], [miss_cost, 0.0]])
    }

    pub fn miss_cost(&self) -> f64 {
        self.c[1][0]
    }

    pub fn scaled(&self, k: f64) -> Result<Self> {
        Self::new([[0.0, self.c[0][1] * k], [self.c[1][0] * k, 0.0]])
    }

    fn class_weights(&self) -> [f64; 2] {
        [self.c[0][1], self.c[1][0]]
    }
}

impl Default for CostMatrix {
    fn default() -> Self {
        Self {
            c: [[0.0, 1.0], [1.0, 0.0]],
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TreeConfig {
    pub max_depth: usize,
    pub min_leaf: usize,
}

impl Default for TreeConfig {
    fn default() -> Self {
        Self {
            max_depth: DEFAULT_MAX_DEPTH,
            min_leaf: DEFAULT_MIN_LEAF,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Node {
    Leaf {
        label: u8,
        /// Training samples reaching this leaf, per class.
        counts: [usize; 2],
    },
    Split {
        feature: usize,
        threshold: f64,
        left: usize,
        right: usize,
    },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainMeta {
    pub dataset: String,
    pub samples: usize,
    pub positives: usize,
    pub node_count: usize,
    pub depth: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TreeModel {
    pub format_version: u32,
    pub feature_names: Vec<String>,
    /// Arena of nodes; the root is node 0.
    pub nodes: Vec<Node>,
    pub cost_used: CostMatrix,
    pub config: TreeConfig,
    pub train_meta: TrainMeta,
}

/// A candidate split of one node.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Split {
    pub feature: usize,
    pub threshold: f64,
    pub gain: f64,
}

fn entropy(w0: f64, w1: f64) -> f64 {
    let total = w0 + w1;
    if total <= 0.0 {
        return 0.0;
    }
    [w0, w1]
        .iter()
        .filter(|&&w| w > 0.0)
        .map(|&w| {
            let p = w / total;
            -p * p.log2()
        })
        .sum()
}

/// Weighted information gain of splitting a node with class counts
/// `parent` into a left part with class counts `left`.
pub fn weighted_gain(parent: [usize; 2], left: [usize; 2], weights: [f64; 2]) -> f64 {
    let right = [parent[0] - left[0], parent[1] - left[1]];
    let w = |c: [usize; 2]| [c[0] as f64 * weights[0], c[1] as f64 * weights[1]];
    let (p, l, r) = (w(parent), w(left), w(right));
    let total = p[0] + p[1];
    let (wl, wr) = (l[0] + l[1], r[0] + r[1]);
    entropy(p[0], p[1]) - (wl / total) * entropy(l[0], l[1]) - (wr / total) * entropy(r[0], r[1])
}

fn class_counts(samples: &[Sample], idx: &[usize]) -> [usize; 2] {
    let pos = idx.iter().filter(|&&i| samples[i].label == 1).count();
    [idx.len() - pos, pos]
}

/// Best split of the samples at `idx`: maximal weighted gain, ties within
/// `GAIN_TIE_EPS` broken by lowest feature index, then lowest threshold.
/// Thresholds are midpoints between consecutive distinct values; both
/// children must hold at least `min_leaf` samples.
pub fn best_split(samples: &[Sample], idx: &[usize], weights: [f64; 2], min_leaf: usize) -> Option<Split> {
    if idx.len() < 2 {
        return None;
    }
    let parent = class_counts(samples, idx);
    let min_leaf = min_leaf.max(1);
    let mut candidates: Vec<Split> = Vec::new();
    let mut order = idx.to_vec();
    for feature in 0..FEATURE_COUNT {
        let value = |i: usize| samples[i].features.to_array()[feature];
        order.sort_by(|&a, &b| value(a).total_cmp(&value(b)));
        let mut left = [0usize; 2];
        for k in 0..order.len() - 1 {
            left[samples[order[k]].label as usize] += 1;
            let (v, next) = (value(order[k]), value(order[k + 1]));
            if v == next {
                continue;
            }
            let n_left = k + 1;
            if n_left < min_leaf || order.len() - n_left < min_leaf {
                continue;
            }
            let mut threshold = 0.5 * (v + next);
            if threshold >= next {
                threshold = v;
            }
            candidates.push(Split {
                feature,
                threshold,
                gain: weighted_gain(parent, left, weights),
            });
        }
    }
    let max_gain = candidates.iter().map(|s| s.gain).fold(f64::NEG_INFINITY, f64::max);
    // Candidates are already ordered by (feature, threshold).
    candidates.into_iter().find(|s| s.gain >= max_gain - GAIN_TIE_EPS)
}

fn leaf_label(counts: [usize; 2], weights: [f64; 2]) -> u8 {
    let w0 = counts[0] as f64 * weights[0];
    let w1 = counts[1] as f64 * weights[1];
    u8::from(w1 >= w0 * (1.0 - GAIN_TIE_EPS))
}

struct Builder<'a> {
    samples: &'a [Sample],
    weights: [f64; 2],
    config: TreeConfig,
    nodes: Vec<Node>,
}

impl Builder<'_> {
    fn grow(&mut self, idx: &[usize], depth: usize) -> usize {
        let id = self.nodes.len();
        let counts = class_counts(self.samples, idx);
        self.nodes.push(Node::Leaf {
            label: leaf_label(counts, self.weights),
            counts,
        });
        if counts[0] == 0 || counts[1] == 0 || depth >= self.config.max_depth {
            return id;
        }
        let Some(split) = best_split(self.samples, idx, self.weights, self.config.min_leaf) else {
            return id;
        };
        let (left_idx, right_idx): (Vec<usize>, Vec<usize>) = idx
            .iter()
            .partition(|&&i| self.samples[i].features.to_array()[split.feature] <= split.threshold);
        let left = self.grow(&left_idx, depth + 1);
        let right = self.grow(&right_idx, depth + 1);
        self.nodes[id] = Node::Split {
            feature: split.feature,
            threshold: split.threshold,
            left,
            right,
        };
        id
    }
}

/// Greedy top-down induction with cost-weighted entropy.
pub fn train(samples: &[Sample], cost: &CostMatrix, config: &TreeConfig, dataset: &str) -> Result<TreeModel> {
    if samples.is_empty() {
        return Err(Error::Training("empty training set".into()));
    }
    if let Some(bad) = samples.iter().position(|s| !s.features.is_valid() || s.label > 1) {
        return Err(Error::Training(format!(
            "sample {bad} has a non-finite or negative feature or a label other than 0/1"
        )));
    }
    let counts = class_counts(samples, &(0..samples.len()).collect::<Vec<_>>());
    if counts[0] == 0 || counts[1] == 0 {
        return Err(Error::Training("training set must contain both classes".into()));
    }
    let cost = CostMatrix::new(cost.c)?;
    let mut builder = Builder {
        samples,
        weights: cost.class_weights(),
        config: *config,
        nodes: Vec::new(),
    };
    let all: Vec<usize> = (0..samples.len()).collect();
    builder.grow(&all, 0);
    let nodes = builder.nodes;
    let mut model = TreeModel {
        format_version: MODEL_FORMAT_VERSION,
        feature_names: FEATURE_NAMES.iter().map(|s| s.to_string()).collect(),
        nodes,
        cost_used: cost,
        config: *config,
        train_meta: TrainMeta {
            dataset: dataset.to_string(),
            samples: samples.len(),
            positives: counts[1],
            node_count: 0,
            depth: 0,
        },
    };
    model.train_meta.node_count = model.nodes.len();
    model.train_meta.depth = model.depth();
    Ok(model)
}

impl TreeModel {
    /// A single-leaf model, mostly useful in tests.
    pub fn constant(label: u8) -> Self {
        Self {
            format_version: MODEL_FORMAT_VERSION,
            feature_names: FEATURE_NAMES.iter().map(|s| s.to_string()).collect(),
            nodes: vec![Node::Leaf {
                label,
                counts: [0, 0],
            }],
            cost_used: CostMatrix::default(),
            config: TreeConfig::default(),
            train_meta: TrainMeta {
                dataset: String::new(),
                samples: 0,
                positives: 0,
                node_count: 1,
                depth: 0,
            },
        }
    }

    pub fn depth(&self) -> usize {
        fn walk(nodes: &[Node], i: usize) -> usize {
            match nodes[i] {
                Node::Leaf { .. } => 0,
                Node::Split { left, right, .. } => 1 + walk(nodes, left).max(walk(nodes, right)),
            }
        }
        walk(&self.nodes, 0)
    }

    pub fn root(&self) -> &Node {
        &self.nodes[0]
    }

    /// Root-to-leaf descent; a feature equal to the threshold goes left.
    pub fn predict(&self, f: &FeatureVector7) -> u8 {
        let x = f.to_array();
        let mut i = 0;
        loop {
            match self.nodes[i] {
                Node::Leaf { label, .. } => return label,
                Node::Split {
                    feature,
                    threshold,
                    left,
                    right,
                } => i = if x[feature] <= threshold { left } else { right },
            }
        }
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let model: TreeModel = serde_json::from_str(text)?;
        model.validate()?;
        Ok(model)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        std::fs::write(path, self.to_json()? + "\n")?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::from_json(&std::fs::read_to_string(path)?)
    }

    fn validate(&self) -> Result<()> {
        if self.format_version != MODEL_FORMAT_VERSION {
            return Err(Error::Model(format!(
                "unsupported model format version {}",
                self.format_version
            )));
        }
        if self.feature_names != FEATURE_NAMES {
            return Err(Error::Model(format!(
                "feature names {:?} do not match {:?}",
                self.feature_names, FEATURE_NAMES
            )));
        }
        if self.nodes.is_empty() {
            return Err(Error::Model("model has no nodes".into()));
        }
        for (i, node) in self.nodes.iter().enumerate() {
            if let Node::Split {
                feature,
                left,
                right,
                threshold,
            } = *node
            {
                if feature >= FEATURE_COUNT || !threshold.is_finite() {
                    return Err(Error::Model(format!("node {i} has an invalid split")));
                }
                // Children always follow their parent in the arena, which
                // also rules out cycles.
                if left <= i || right <= i || left >= self.nodes.len() || right >= self.nodes.len() {
                    return Err(Error::Model(format!("node {i} has invalid children")));
                }
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct ConfusionCounts {
    pub tp: usize,
    pub fp: usize,
    pub fn_: usize,
    pub tn: usize,
}

impl ConfusionCounts {
    pub fn record(&mut self, truth: u8, predicted: u8) {
        match (truth, predicted) {
            (1, 1) => self.tp += 1,
            (0, 1) => self.fp += 1,
            (1, _) => self.fn_ += 1,
            _ => self.tn += 1,
        }
    }

    pub fn total(&self) -> usize {
        self.tp + self.fp + self.fn_ + self.tn
    }

    /// `FN / (TP + FN)`, absent without positives.
    pub fn miss_rate(&self) -> Option<f64> {
        let p = self.tp + self.fn_;
        (p > 0).then(|| self.fn_ as f64 / p as f64)
    }

    /// `FP / (FP + TN)`, absent without negatives.
    pub fn false_alarm(&self) -> Option<f64> {
        let n = self.fp + self.tn;
        (n > 0).then(|| self.fp as f64 / n as f64)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Evaluation {
    pub counts: ConfusionCounts,
    pub miss_rate: Option<f64>,
    pub false_alarm: Option<f64>,
}

impl From<ConfusionCounts> for Evaluation {
    fn from(counts: ConfusionCounts) -> Self {
        Self {
            counts,
            miss_rate: counts.miss_rate(),
            false_alarm: counts.false_alarm(),
        }
    }
}

pub fn evaluate(model: &TreeModel, samples: &[Sample]) -> Evaluation {
    let mut counts = ConfusionCounts::default();
    for s in samples {
        counts.record(s.label, model.predict(&s.features));
    }
    counts.into()
}

/// One operating point of the cost sweep.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RocPoint {
    pub cost: CostMatrix,
    /// Mean held-out miss rate over the usable folds.
    pub miss_rate: Option<f64>,
    /// Mean held-out false alarm over the usable folds.
    pub false_alarm: Option<f64>,
    pub folds_used: usize,
    /// Rates of a model trained and evaluated on the full dataset.
    pub train_miss_rate: Option<f64>,
    pub train_false_alarm: Option<f64>,
}

/// Stratified fold assignment: each class is shuffled with `seed` and dealt
/// round-robin into `k` folds.
pub fn stratified_folds(samples: &[Sample], k: usize, seed: u64) -> Vec<usize> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut fold = vec![0; samples.len()];
    for class in 0..=1u8 {
        let mut members: Vec<usize> = (0..samples.len()).filter(|&i| samples[i].label == class).collect();
        members.shuffle(&mut rng);
        for (rank, &i) in members.iter().enumerate() {
            fold[i] = rank % k;
        }
    }
    fold
}

fn mean(values: &[f64]) -> Option<f64> {
    (!values.is_empty()).then(|| values.iter().sum::<f64>() / values.len() as f64)
}

/// k-fold cross-validated miss rate and false alarm for each cost matrix,
/// ordered by miss cost.
pub fn roc_sweep(
    samples: &[Sample],
    costs: &[CostMatrix],
    folds: usize,
    config: &TreeConfig,
    seed: u64,
) -> Result<Vec<RocPoint>> {
    if folds < 2 {
        return Err(Error::Training("cross-validation needs at least 2 folds".into()));
    }
    let assignment = stratified_folds(samples, folds, seed);
    let mut costs = costs.to_vec();
    costs.sort_by(|a, b| a.c[1][0].total_cmp(&b.c[1][0]).then(a.c[0][1].total_cmp(&b.c[0][1])));

    let mut points = Vec::with_capacity(costs.len());
    for cost in costs {
        let (mut misses, mut alarms, mut used) = (Vec::new(), Vec::new(), 0);
        for f in 0..folds {
            let (mut test, mut train_set) = (Vec::new(), Vec::new());
            for (s, &a) in samples.iter().zip(&assignment) {
                if a == f {
                    test.push(*s);
                } else {
                    train_set.push(*s);
                }
            }
            let test_counts = class_counts(&test, &(0..test.len()).collect::<Vec<_>>());
            if test_counts[0] == 0 || test_counts[1] == 0 {
                log::warn!("fold {f} skipped: held-out part has a single class");
                continue;
            }
            let model = match train(&train_set, &cost, config, "fold") {
                Ok(m) => m,
                Err(e) => {
                    log::warn!("fold {f} skipped: {e}");
                    continue;
                }
            };
            let ev = evaluate(&model, &test);
            misses.extend(ev.miss_rate);
            alarms.extend(ev.false_alarm);
            used += 1;
        }
        let full = train(samples, &cost, config, "full").map(|m| evaluate(&m, samples)).ok();
        points.push(RocPoint {
            cost,
            miss_rate: mean(&misses),
            false_alarm: mean(&alarms),
            folds_used: used,
            train_miss_rate: full.and_then(|e| e.miss_rate),
            train_false_alarm: full.and_then(|e| e.false_alarm),
        });
    }
    Ok(points)
}

fn ranks(values: &[f64]) -> Vec<f64> {
    let mut order: Vec<usize> = (0..values.len()).collect();
    order.sort_by(|&a, &b| values[a].total_cmp(&values[b]));
    let mut r = vec![0.0; values.len()];
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        while j + 1 < order.len() && values[order[j + 1]] == values[order[i]] {
            j += 1;
        }
        let avg = (i + j) as f64 / 2.0 + 1.0;
        for &k in &order[i..=j] {
            r[k] = avg;
        }
        i = j + 1;
    }
    r
}

/// Spearman rank correlation with average ranks for ties. `None` when
/// either side is constant or the lengths differ.
pub fn spearman(x: &[f64], y: &[f64]) -> Option<f64> {
    if x.len() != y.len() || x.len() < 2 {
        return None;
    }
    let (rx, ry) = (ranks(x), ranks(y));
    let n = x.len() as f64;
    let (mx, my) = (rx.iter().sum::<f64>() / n, ry.iter().sum::<f64>() / n);
    let (mut sxy, mut sxx, mut syy) = (0.0, 0.0, 0.0);
    for i in 0..x.len() {
        sxy += (rx[i] - mx) * (ry[i] - my);
        sxx += (rx[i] - mx) * (rx[i] - mx);
        syy += (ry[i] - my) * (ry[i] - my);
    }
    (sxx > 0.0 && syy > 0.0).then(|| sxy / (sxx * syy).sqrt())
}
