//! Random-forest prediction of the lookahead diagnosis label from
//! phenotype expressions, plus the labeled-cohort construction rules.

use std::collections::{BTreeSet, HashMap};
use std::path::Path;

use nalgebra::DMatrix;
use rand::RngExt;
use rayon::prelude::*;

use crate::cross_section::Instance;
use crate::error::{Error, Result};
use crate::ingest::{EventSeries, RecordSpan, ValueSeries};
use crate::rng;

/// Feature matrix (one column per instance) with binary labels.
#[derive(Debug, Clone)]
pub struct LabeledInstances {
    pub features: DMatrix<f64>,
    pub labels: Vec<bool>,
    pub provenance: Vec<Instance>,
}

impl LabeledInstances {
    pub fn new(
        features: DMatrix<f64>,
        labels: Vec<bool>,
        provenance: Vec<Instance>,
    ) -> Result<LabeledInstances> {
        if features.ncols() != labels.len() || labels.len() != provenance.len() {
            return Err(Error::ShapeMismatch(format!(
                "{} feature columns, {} labels, {} provenance entries",
                features.ncols(),
                labels.len(),
                provenance.len()
            )));
        }
        Ok(LabeledInstances {
            features,
            labels,
            provenance,
        })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn n_features(&self) -> usize {
        self.features.nrows()
    }

    /// The subset at the given instance indices.
    pub fn select(&self, indices: &[usize]) -> LabeledInstances {
        let k = self.features.nrows();
        let features = DMatrix::from_fn(k, indices.len(), |i, j| self.features[(i, indices[j])]);
        LabeledInstances {
            features,
            labels: indices.iter().map(|&i| self.labels[i]).collect(),
            provenance: indices.iter().map(|&i| self.provenance[i].clone()).collect(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ClassWeight {
    Uniform,
    /// Reweight classes inversely to frequency: w_c = l / (2 · l_c).
    Balanced,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ForestHyperParams {
    pub n_trees: usize,
    /// Features tried per split; defaults to ⌈√k⌉ when unset.
    pub mtry: Option<usize>,
    pub max_depth: Option<usize>,
    pub min_leaf: usize,
    pub class_weight: ClassWeight,
}

impl Default for ForestHyperParams {
    fn default() -> Self {
        ForestHyperParams {
            n_trees: 300,
            mtry: None,
            max_depth: None,
            min_leaf: 1,
            class_weight: ClassWeight::Uniform,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
enum Node {
    Split {
        feature: usize,
        threshold: f64,
        left: usize,
        right: usize,
    },
    Leaf {
        p_pos: f64,
    },
}

#[derive(Debug, Clone, PartialEq)]
pub struct Tree {
    nodes: Vec<Node>,
}

impl Tree {
    /// Positive-class fraction at the leaf this feature vector falls into.
    pub fn predict(&self, features: &[f64]) -> f64 {
        let mut at = 0usize;
        loop {
            match &self.nodes[at] {
                Node::Leaf { p_pos } => return *p_pos,
                Node::Split {
                    feature,
                    threshold,
                    left,
                    right,
                } => {
                    at = if features[*feature] <= *threshold {
                        *left
                    } else {
                        *right
                    };
                }
            }
        }
    }
}

#[derive(Debug, Clone)]
pub struct ForestModel {
    pub trees: Vec<Tree>,
    pub tree_seeds: Vec<u64>,
    /// Mean decrease in impurity per feature, normalized to sum 1.
    pub importances: Vec<f64>,
    pub hyperparams: ForestHyperParams,
    pub n_features: usize,
}

fn gini(w_pos: f64, w_total: f64) -> f64 {
    if w_total <= 0.0 {
        return 0.0;
    }
    let p = w_pos / w_total;
    let q = 1.0 - p;
    1.0 - p * p - q * q
}

struct TreeGrower<'a> {
    data: &'a LabeledInstances,
    weights: [f64; 2],
    mtry: usize,
    max_depth: Option<usize>,
    min_leaf: usize,
    rng: rand_chacha::ChaCha8Rng,
    nodes: Vec<Node>,
    importances: Vec<f64>,
    root_weight: f64,
}

impl TreeGrower<'_> {
    fn weight_of(&self, idx: usize) -> f64 {
        self.weights[self.data.labels[idx] as usize]
    }

    fn grow(&mut self, indices: &mut [usize], depth: usize) -> usize {
        let w_total: f64 = indices.iter().map(|&i| self.weight_of(i)).sum();
        let w_pos: f64 = indices
            .iter()
            .filter(|&&i| self.data.labels[i])
            .map(|&i| self.weight_of(i))
            .sum();
        let impurity = gini(w_pos, w_total);
        let p_pos = if w_total > 0.0 { w_pos / w_total } else { 0.0 };
        let depth_reached = self.max_depth.is_some_and(|d| depth >= d);
        if impurity == 0.0 || indices.len() < 2 * self.min_leaf || depth_reached {
            self.nodes.push(Node::Leaf { p_pos });
            return self.nodes.len() - 1;
        }

        // Sample mtry distinct candidate features (partial Fisher-Yates).
        let k = self.data.n_features();
        let mut pool: Vec<usize> = (0..k).collect();
        let take = self.mtry.min(k);
        for i in 0..take {
            let j = self.rng.random_range(i..k);
            pool.swap(i, j);
        }

        let mut best: Option<(f64, usize, f64)> = None; // (decrease, feature, threshold)
        let mut column: Vec<(f64, bool)> = Vec::with_capacity(indices.len());
        for &feature in &pool[..take] {
            column.clear();
            column.extend(
                indices
                    .iter()
                    .map(|&i| (self.data.features[(feature, i)], self.data.labels[i])),
            );
            column.sort_by(|a, b| a.0.total_cmp(&b.0));
            let mut wl = 0.0f64;
            let mut wl_pos = 0.0f64;
            for cut in 0..column.len() - 1 {
                let (v, label) = column[cut];
                let w = self.weights[label as usize];
                wl += w;
                if label {
                    wl_pos += w;
                }
                let v_next = column[cut + 1].0;
                if v == v_next {
                    continue;
                }
                let n_left = cut + 1;
                let n_right = column.len() - n_left;
                if n_left < self.min_leaf || n_right < self.min_leaf {
                    continue;
                }
                let wr = w_total - wl;
                let wr_pos = w_pos - wl_pos;
                let decrease = impurity
                    - (wl / w_total) * gini(wl_pos, wl)
                    - (wr / w_total) * gini(wr_pos, wr);
                if decrease > 0.0 && best.is_none_or(|(d, _, _)| decrease > d) {
                    best = Some((decrease, feature, (v + v_next) / 2.0));
                }
            }
        }

        let Some((decrease, feature, threshold)) = best else {
            self.nodes.push(Node::Leaf { p_pos });
            return self.nodes.len() - 1;
        };
        self.importances[feature] += (w_total / self.root_weight) * decrease;
        let mid = itertools_partition(indices, |&i| {
            self.data.features[(feature, i)] <= threshold
        });
        let at = self.nodes.len();
        self.nodes.push(Node::Leaf { p_pos: 0.0 }); // placeholder
        let (left_slice, right_slice) = indices.split_at_mut(mid);
        let left = self.grow(left_slice, depth + 1);
        let right = self.grow(right_slice, depth + 1);
        self.nodes[at] = Node::Split {
            feature,
            threshold,
            left,
            right,
        };
        at
    }
}

/// Stable partition: reorders `v` so elements satisfying `pred` come first,
/// returning the boundary index.
fn itertools_partition<T: Copy>(v: &mut [T], pred: impl Fn(&T) -> bool) -> usize {
    let mut kept: Vec<T> = Vec::with_capacity(v.len());
    let mut rest: Vec<T> = Vec::new();
    for &x in v.iter() {
        if pred(&x) {
            kept.push(x);
        } else {
            rest.push(x);
        }
    }
    let mid = kept.len();
    v[..mid].copy_from_slice(&kept);
    v[mid..].copy_from_slice(&rest);
    mid
}

fn bootstrap_indices(rng: &mut rand_chacha::ChaCha8Rng, l: usize) -> Vec<usize> {
    (0..l).map(|_| rng.random_range(0..l)).collect()
}

fn class_weights(labels: &[bool], scheme: ClassWeight) -> [f64; 2] {
    match scheme {
        ClassWeight::Uniform => [1.0, 1.0],
        ClassWeight::Balanced => {
            let l = labels.len() as f64;
            let l_pos = labels.iter().filter(|&&b| b).count() as f64;
            let l_neg = l - l_pos;
            [l / (2.0 * l_neg), l / (2.0 * l_pos)]
        }
    }
}

/// Trains a forest of CART trees on bootstrap samples. Deterministic under
/// (data, hyperparameters, seed) regardless of thread scheduling.
pub fn train_forest(
    data: &LabeledInstances,
    hp: &ForestHyperParams,
    seed: u64,
) -> Result<ForestModel> {
    let k = data.n_features();
    let l = data.len();
    if k == 0 {
        return Err(Error::InvalidInput("no features to train on".into()));
    }
    if l == 0 {
        return Err(Error::InvalidInput("no instances to train on".into()));
    }
    if hp.n_trees == 0 {
        return Err(Error::InvalidInput("n_trees must be positive".into()));
    }
    if hp.min_leaf == 0 {
        return Err(Error::InvalidInput("min_leaf must be positive".into()));
    }
    if hp.mtry.is_some_and(|m| m == 0 || m > k) {
        return Err(Error::InvalidInput(format!(
            "mtry must be in 1..={k}"
        )));
    }
    let n_pos = data.labels.iter().filter(|&&b| b).count();
    if n_pos == 0 || n_pos == l {
        return Err(Error::InvalidInput(
            "training data must contain both classes".into(),
        ));
    }
    if data.features.iter().any(|v| !v.is_finite()) {
        return Err(Error::InvalidInput("non-finite feature values".into()));
    }
    let mtry = hp.mtry.unwrap_or_else(|| (k as f64).sqrt().ceil() as usize);
    let weights = class_weights(&data.labels, hp.class_weight);
    let tree_seeds: Vec<u64> = (0..hp.n_trees)
        .map(|t| rng::derive_seed(seed, &["forest", "tree", &t.to_string()]))
        .collect();

    let grown: Vec<(Tree, Vec<f64>)> = tree_seeds
        .par_iter()
        .map(|&ts| {
            let mut tree_rng = rng::stream(ts, &["grow"]);
            let mut indices = bootstrap_indices(&mut tree_rng, l);
            let mut grower = TreeGrower {
                data,
                weights,
                mtry,
                max_depth: hp.max_depth,
                min_leaf: hp.min_leaf,
                rng: tree_rng,
                nodes: Vec::new(),
                importances: vec![0.0; k],
                root_weight: indices.iter().map(|&i| weights[data.labels[i] as usize]).sum(),
            };
            grower.grow(&mut indices, 0);
            (
                Tree {
                    nodes: grower.nodes,
                },
                grower.importances,
            )
        })
        .collect();

    let mut importances = vec![0.0f64; k];
    let mut trees = Vec::with_capacity(hp.n_trees);
    for (tree, imp) in grown {
        let total: f64 = imp.iter().sum();
        if total > 0.0 {
            for (slot, v) in importances.iter_mut().zip(&imp) {
                *slot += v / total;
            }
        }
        trees.push(tree);
    }
    let total: f64 = importances.iter().sum();
    if total <= 0.0 {
        return Err(Error::Numerical(
            "no tree found a usable split; features may be constant".into(),
        ));
    }
    for v in &mut importances {
        *v /= total;
    }
    Ok(ForestModel {
        trees,
        tree_seeds,
        importances,
        hyperparams: hp.clone(),
        n_features: k,
    })
}

/// Mean positive-leaf fraction over all trees, one score per column.
pub fn predict_proba(model: &ForestModel, features: &DMatrix<f64>) -> Result<Vec<f64>> {
    if features.nrows() != model.n_features {
        return Err(Error::ShapeMismatch(format!(
            "features have {} rows, model expects {}",
            features.nrows(),
            model.n_features
        )));
    }
    let mut scores = vec![0.0f64; features.ncols()];
    let mut buf = vec![0.0f64; model.n_features];
    for (j, slot) in scores.iter_mut().enumerate() {
        for (i, b) in buf.iter_mut().enumerate() {
            *b = features[(i, j)];
        }
        let sum: f64 = model.trees.iter().map(|t| t.predict(&buf)).sum();
        *slot = sum / model.trees.len() as f64;
    }
    Ok(scores)
}

/// Out-of-bag score per instance: mean over trees whose bootstrap missed it.
/// `None` for instances present in every bootstrap.
pub fn oob_scores(model: &ForestModel, data: &LabeledInstances) -> Result<Vec<Option<f64>>> {
    if data.n_features() != model.n_features {
        return Err(Error::ShapeMismatch(format!(
            "features have {} rows, model expects {}",
            data.n_features(),
            model.n_features
        )));
    }
    let l = data.len();
    let mut sums = vec![0.0f64; l];
    let mut counts = vec![0usize; l];
    let mut buf = vec![0.0f64; model.n_features];
    for (tree, &ts) in model.trees.iter().zip(&model.tree_seeds) {
        let mut tree_rng = rng::stream(ts, &["grow"]);
        let indices = bootstrap_indices(&mut tree_rng, l);
        let mut in_bag = vec![false; l];
        for i in indices {
            in_bag[i] = true;
        }
        for j in 0..l {
            if !in_bag[j] {
                for (i, b) in buf.iter_mut().enumerate() {
                    *b = data.features[(i, j)];
                }
                sums[j] += tree.predict(&buf);
                counts[j] += 1;
            }
        }
    }
    Ok((0..l)
        .map(|j| {
            if counts[j] > 0 {
                Some(sums[j] / counts[j] as f64)
            } else {
                None
            }
        })
        .collect())
}

/// Area under the ROC curve via the Mann-Whitney statistic; tied scores
/// contribute one half.
pub fn auc(scores: &[f64], labels: &[bool]) -> Result<f64> {
    if scores.len() != labels.len() {
        return Err(Error::ShapeMismatch(format!(
            "{} scores vs {} labels",
            scores.len(),
            labels.len()
        )));
    }
    if scores.iter().any(|s| !s.is_finite()) {
        return Err(Error::InvalidInput("non-finite scores".into()));
    }
    let n_pos = labels.iter().filter(|&&b| b).count();
    let n_neg = labels.len() - n_pos;
    if n_pos == 0 || n_neg == 0 {
        return Err(Error::InvalidInput(
            "AUC needs at least one instance of each class".into(),
        ));
    }
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[a].total_cmp(&scores[b]));
    let mut rank_sum_pos = 0.0f64;
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        while j < order.len() && scores[order[j]] == scores[order[i]] {
            j += 1;
        }
        // 1-based ranks i+1 ..= j averaged over the tie group.
        let avg_rank = ((i + 1 + j) as f64) / 2.0;
        for &idx in &order[i..j] {
            if labels[idx] {
                rank_sum_pos += avg_rank;
            }
        }
        i = j;
    }
    let np = n_pos as f64;
    let u = rank_sum_pos - np * (np + 1.0) / 2.0;
    Ok(u / (np * n_neg as f64))
}

/// Span, observation count, and earliest target-code time for one record.
#[derive(Debug, Clone)]
pub struct RecordMeta {
    pub record_id: String,
    pub span: RecordSpan,
    pub n_observations: usize,
    pub first_target_time: Option<f64>,
}

/// Builds per-record metadata from normalized observations.
pub fn compute_record_meta(
    events: &[EventSeries],
    values: &[ValueSeries],
    target_codes: &BTreeSet<String>,
) -> Vec<RecordMeta> {
    let mut by_record: HashMap<&str, (f64, f64, usize, Option<f64>)> = HashMap::new();
    for s in events {
        let slot = by_record
            .entry(&s.record_id)
            .or_insert((f64::INFINITY, f64::NEG_INFINITY, 0, None));
        for &t in &s.times {
            slot.0 = slot.0.min(t);
            slot.1 = slot.1.max(t);
            slot.2 += 1;
        }
        if target_codes.contains(&s.variable_id) {
            if let Some(&first) = s.times.first() {
                slot.3 = Some(slot.3.map_or(first, |prev: f64| prev.min(first)));
            }
        }
    }
    for s in values {
        let slot = by_record
            .entry(&s.record_id)
            .or_insert((f64::INFINITY, f64::NEG_INFINITY, 0, None));
        for &(t, _) in &s.points {
            slot.0 = slot.0.min(t);
            slot.1 = slot.1.max(t);
            slot.2 += 1;
        }
    }
    let mut out: Vec<RecordMeta> = by_record
        .into_iter()
        .map(|(id, (lo, hi, n, target))| {
            let end = if hi - lo < crate::ingest::MIN_SPAN_YEARS {
                lo + crate::ingest::MIN_SPAN_YEARS
            } else {
                hi
            };
            RecordMeta {
                record_id: id.to_string(),
                span: RecordSpan {
                    record_id: id.to_string(),
                    start: lo,
                    end,
                },
                n_observations: n,
                first_target_time: target,
            }
        })
        .collect();
    out.sort_by(|a, b| a.record_id.cmp(&b.record_id));
    out
}

/// One record per line: id, span start/end, observation count, first target
/// time ("-" if none). Floats round-trip exactly.
pub fn write_record_meta_file(path: impl AsRef<Path>, metas: &[RecordMeta]) -> Result<()> {
    let path = path.as_ref();
    let mut out = String::new();
    for m in metas {
        use std::fmt::Write;
        let target = m
            .first_target_time
            .map_or_else(|| "-".to_string(), |t| t.to_string());
        let _ = writeln!(
            out,
            "{}\t{}\t{}\t{}\t{}",
            m.record_id, m.span.start, m.span.end, m.n_observations, target
        );
    }
    std::fs::write(path, out).map_err(|e| Error::io(path, e))
}

pub fn read_record_meta_file(path: impl AsRef<Path>) -> Result<Vec<RecordMeta>> {
    let path = path.as_ref();
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let mut out = Vec::new();
    for (i, line) in text.lines().enumerate() {
        let lineno = i + 1;
        let fields: Vec<&str> = line.split('\t').collect();
        if fields.len() != 5 {
            return Err(Error::malformed(
                path,
                lineno,
                format!("expected 5 fields, got {}", fields.len()),
            ));
        }
        let num = |s: &str, what: &str| -> Result<f64> {
            s.parse::<f64>()
                .map_err(|_| Error::malformed(path, lineno, format!("bad {what} {s:?}")))
        };
        let start = num(fields[1], "span start")?;
        let end = num(fields[2], "span end")?;
        let n_observations = fields[3]
            .parse::<usize>()
            .map_err(|_| Error::malformed(path, lineno, format!("bad count {:?}", fields[3])))?;
        let first_target_time = if fields[4] == "-" {
            None
        } else {
            Some(num(fields[4], "target time")?)
        };
        if !start.is_finite() || !end.is_finite() || end <= start {
            return Err(Error::malformed(
                path,
                lineno,
                format!("invalid span [{start}, {end}]"),
            ));
        }
        out.push(RecordMeta {
            record_id: fields[0].to_string(),
            span: RecordSpan {
                record_id: fields[0].to_string(),
                start,
                end,
            },
            n_observations,
            first_target_time,
        });
    }
    Ok(out)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum NegativePolicy {
    /// Every eligible instance of an undiagnosed record becomes a negative.
    AllEligible,
    /// Only the earliest eligible instance per record.
    OnePerRecord,
}

#[derive(Debug, Clone)]
pub struct CohortConfig {
    pub horizon_years: f64,
    /// Tolerance around the exact lookahead point for positive instances.
    pub window_days: f64,
    /// Records with fewer total observations are excluded.
    pub min_data: usize,
    pub negatives: NegativePolicy,
}

impl Default for CohortConfig {
    fn default() -> Self {
        CohortConfig {
            horizon_years: 10.0,
            window_days: 30.0,
            min_data: 10,
            negatives: NegativePolicy::AllEligible,
        }
    }
}

/// Default target code set: hepatocellular carcinoma billing codes.
pub fn default_target_codes() -> BTreeSet<String> {
    ["155.0", "155.1", "155.2"]
        .into_iter()
        .map(String::from)
        .collect()
}

/// Which matrix columns enter the prediction task, with labels.
#[derive(Debug, Clone)]
pub struct CohortSelection {
    /// Column indices into the instance list, ascending.
    pub indices: Vec<usize>,
    pub labels: Vec<bool>,
    pub n_positive_records: usize,
    pub n_negative_records: usize,
    pub n_excluded_min_data: usize,
}

/// Labels cross-section instances for the lookahead prediction task.
///
/// Negatives come from records without the target code whose span is at
/// least `horizon_years` long, at instances with at least the horizon of
/// record remaining. Positives come from records whose earliest target code
/// has at least the horizon of history before it: the instance closest to
/// `first_target - horizon` within the day window, one per record.
pub fn build_hcc_cohort(
    records: &[RecordMeta],
    provenance: &[Instance],
    cfg: &CohortConfig,
) -> Result<CohortSelection> {
    if !(cfg.horizon_years > 0.0) || !(cfg.window_days >= 0.0) {
        return Err(Error::InvalidInput(
            "horizon must be positive and window non-negative".into(),
        ));
    }
    let window_years = cfg.window_days / 365.0;
    let meta: HashMap<&str, &RecordMeta> =
        records.iter().map(|r| (r.record_id.as_str(), r)).collect();
    let mut columns_by_record: HashMap<&str, Vec<usize>> = HashMap::new();
    for (j, inst) in provenance.iter().enumerate() {
        columns_by_record
            .entry(inst.record_id.as_str())
            .or_default()
            .push(j);
    }
    let mut picked: Vec<(usize, bool)> = Vec::new();
    let mut n_pos_records = 0usize;
    let mut n_neg_records = 0usize;
    let mut n_excluded = 0usize;
    let mut record_ids: Vec<&str> = columns_by_record.keys().copied().collect();
    record_ids.sort();
    for rid in record_ids {
        let cols = &columns_by_record[rid];
        let Some(meta) = meta.get(rid) else {
            return Err(Error::InvalidInput(format!(
                "instance references unknown record {rid:?}"
            )));
        };
        if meta.n_observations < cfg.min_data {
            n_excluded += 1;
            continue;
        }
        match meta.first_target_time {
            None => {
                if meta.span.length() < cfg.horizon_years {
                    continue;
                }
                let latest = meta.span.end - cfg.horizon_years;
                let mut eligible: Vec<usize> = cols
                    .iter()
                    .copied()
                    .filter(|&j| provenance[j].time <= latest)
                    .collect();
                if eligible.is_empty() {
                    continue;
                }
                if cfg.negatives == NegativePolicy::OnePerRecord {
                    let earliest = eligible
                        .iter()
                        .copied()
                        .min_by(|&a, &b| {
                            provenance[a]
                                .time
                                .total_cmp(&provenance[b].time)
                                .then(a.cmp(&b))
                        })
                        .unwrap();
                    eligible = vec![earliest];
                }
                n_neg_records += 1;
                picked.extend(eligible.into_iter().map(|j| (j, false)));
            }
            Some(t_target) => {
                if t_target - meta.span.start < cfg.horizon_years {
                    continue;
                }
                let t_star = t_target - cfg.horizon_years;
                let best = cols
                    .iter()
                    .copied()
                    .filter(|&j| (provenance[j].time - t_star).abs() <= window_years)
                    .min_by(|&a, &b| {
                        (provenance[a].time - t_star)
                            .abs()
                            .total_cmp(&(provenance[b].time - t_star).abs())
                            .then(a.cmp(&b))
                    });
                if let Some(j) = best {
                    n_pos_records += 1;
                    picked.push((j, true));
                }
            }
        }
    }
    picked.sort();
    if n_pos_records == 0 {
        return Err(Error::InvalidInput(
            "prediction task has no positive instances".into(),
        ));
    }
    if n_neg_records == 0 {
        return Err(Error::InvalidInput(
            "prediction task has no negative instances".into(),
        ));
    }
    Ok(CohortSelection {
        indices: picked.iter().map(|&(j, _)| j).collect(),
        labels: picked.iter().map(|&(_, l)| l).collect(),
        n_positive_records: n_pos_records,
        n_negative_records: n_neg_records,
        n_excluded_min_data: n_excluded,
    })
}

/// Splits instances into train/test index sets, keeping all instances of a
/// record on one side and stratifying by record class.
pub fn split_by_record(
    data: &LabeledInstances,
    test_fraction: f64,
    seed: u64,
) -> Result<(Vec<usize>, Vec<usize>)> {
    if !(0.0..1.0).contains(&test_fraction) || test_fraction <= 0.0 {
        return Err(Error::InvalidInput(format!(
            "test fraction {test_fraction} not in (0, 1)"
        )));
    }
    let mut by_record: HashMap<&str, (Vec<usize>, bool)> = HashMap::new();
    for (j, inst) in data.provenance.iter().enumerate() {
        let slot = by_record
            .entry(inst.record_id.as_str())
            .or_insert((Vec::new(), false));
        slot.0.push(j);
        slot.1 |= data.labels[j];
    }
    let mut pos_records: Vec<&str> = Vec::new();
    let mut neg_records: Vec<&str> = Vec::new();
    for (rid, (_, is_pos)) in &by_record {
        if *is_pos {
            pos_records.push(rid);
        } else {
            neg_records.push(rid);
        }
    }
    pos_records.sort();
    neg_records.sort();
    let mut rng = rng::stream(seed, &["split"]);
    let mut train = Vec::new();
    let mut test = Vec::new();
    for class in [&mut pos_records, &mut neg_records] {
        // Fisher-Yates shuffle, then the head becomes the test side.
        for i in (1..class.len()).rev() {
            let j = rng.random_range(0..=i);
            class.swap(i, j);
        }
        let n = class.len();
        let n_test = if n >= 2 {
            ((test_fraction * n as f64).round() as usize).clamp(1, n - 1)
        } else {
            0
        };
        for (i, rid) in class.iter().enumerate() {
            let side = if i < n_test { &mut test } else { &mut train };
            side.extend_from_slice(&by_record[rid].0);
        }
    }
    train.sort();
    test.sort();
    Ok((train, test))
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand_distr::{Distribution, StandardNormal};

    fn instance(rid: &str, t: f64) -> Instance {
        Instance {
            record_id: rid.to_string(),
            time: t,
        }
    }

    fn gaussian_task(
        n_pos: usize,
        n_neg: usize,
        shift: f64,
        k: usize,
        informative: usize,
        seed: u64,
    ) -> LabeledInstances {
        let mut r = rng::stream(seed, &["test", "task"]);
        let l = n_pos + n_neg;
        let mut features = DMatrix::zeros(k, l);
        let mut labels = vec![false; l];
        for j in 0..l {
            let pos = j < n_pos;
            labels[j] = pos;
            for i in 0..k {
                let base: f64 = StandardNormal.sample(&mut r);
                features[(i, j)] = if pos && i < informative {
                    base + shift
                } else {
                    base
                };
            }
        }
        let provenance = (0..l).map(|j| instance(&format!("p{j}"), j as f64)).collect();
        LabeledInstances::new(features, labels, provenance).unwrap()
    }

    #[test]
    fn separable_data_fits_perfectly() {
        let mut features = DMatrix::zeros(1, 40);
        let mut labels = vec![false; 40];
        for j in 0..40 {
            let v = j as f64 - 19.5;
            features[(0, j)] = v;
            labels[j] = v > 0.0;
        }
        let provenance = (0..40).map(|j| instance(&format!("p{j}"), 0.0)).collect();
        let data = LabeledInstances::new(features.clone(), labels.clone(), provenance).unwrap();
        let hp = ForestHyperParams {
            n_trees: 50,
            ..Default::default()
        };
        let model = train_forest(&data, &hp, 3).unwrap();
        let scores = predict_proba(&model, &features).unwrap();
        for (s, &l) in scores.iter().zip(&labels) {
            assert_eq!(*s >= 0.5, l, "score {s} for label {l}");
        }
        let acc = scores
            .iter()
            .zip(&labels)
            .filter(|(s, &l)| (**s >= 0.5) == l)
            .count();
        assert_eq!(acc, 40);
    }

    #[test]
    fn single_class_or_empty_rejected() {
        let features = DMatrix::zeros(2, 5);
        let labels = vec![true; 5];
        let provenance = (0..5).map(|j| instance(&format!("p{j}"), 0.0)).collect();
        let data = LabeledInstances::new(features, labels, provenance).unwrap();
        assert!(train_forest(&data, &ForestHyperParams::default(), 1).is_err());
    }

    #[test]
    fn constant_features_rejected() {
        let features = DMatrix::from_element(3, 10, 2.5);
        let labels: Vec<bool> = (0..10).map(|j| j % 2 == 0).collect();
        let provenance = (0..10).map(|j| instance(&format!("p{j}"), 0.0)).collect();
        let data = LabeledInstances::new(features, labels, provenance).unwrap();
        assert!(train_forest(&data, &ForestHyperParams::default(), 1).is_err());
    }

    #[test]
    fn training_is_deterministic() {
        let data = gaussian_task(30, 30, 1.0, 4, 2, 5);
        let hp = ForestHyperParams {
            n_trees: 20,
            ..Default::default()
        };
        let m1 = train_forest(&data, &hp, 9).unwrap();
        let m2 = train_forest(&data, &hp, 9).unwrap();
        assert_eq!(m1.trees, m2.trees);
        assert_eq!(m1.importances, m2.importances);
        let m3 = train_forest(&data, &hp, 10).unwrap();
        assert_ne!(m1.trees, m3.trees);
    }

    #[test]
    fn single_tree_score_matches_manual_walk() {
        let data = gaussian_task(25, 25, 1.5, 3, 1, 7);
        let hp = ForestHyperParams {
            n_trees: 1,
            ..Default::default()
        };
        let model = train_forest(&data, &hp, 11).unwrap();
        let scores = predict_proba(&model, &data.features).unwrap();
        for (j, score) in scores.iter().enumerate() {
            let col: Vec<f64> = (0..3).map(|i| data.features[(i, j)]).collect();
            // Oracle: walk the tree by hand.
            let mut at = 0usize;
            let manual = loop {
                match &model.trees[0].nodes[at] {
                    Node::Leaf { p_pos } => break *p_pos,
                    Node::Split {
                        feature,
                        threshold,
                        left,
                        right,
                    } => {
                        at = if col[*feature] <= *threshold { *left } else { *right };
                    }
                }
            };
            assert_eq!(*score, manual);
        }
    }

    #[test]
    fn importances_sum_to_one_and_skip_unused() {
        let mut data = gaussian_task(40, 40, 2.0, 4, 2, 13);
        // Make the last feature constant: it can never split.
        for j in 0..data.len() {
            data.features[(3, j)] = 7.0;
        }
        let hp = ForestHyperParams {
            n_trees: 30,
            ..Default::default()
        };
        let model = train_forest(&data, &hp, 17).unwrap();
        let sum: f64 = model.importances.iter().sum();
        assert!((sum - 1.0).abs() <= 1e-9);
        assert!(model.importances.iter().all(|&v| v >= 0.0));
        assert_eq!(model.importances[3], 0.0);
    }

    #[test]
    fn informative_features_dominate_importances() {
        let data = gaussian_task(200, 200, 1.5, 10, 2, 19);
        let hp = ForestHyperParams {
            n_trees: 100,
            ..Default::default()
        };
        let model = train_forest(&data, &hp, 23).unwrap();
        let informative: f64 = model.importances[0] + model.importances[1];
        assert!(
            informative > 0.6,
            "informative importance only {informative}"
        );
    }

    #[test]
    fn noise_labels_give_chance_level_oob_auc() {
        let mut aucs = Vec::new();
        for seed in 0..10u64 {
            let data = gaussian_task(60, 60, 0.0, 5, 0, 100 + seed);
            // Labels are independent of features by construction (shift 0).
            let model = train_forest(
                &data,
                &ForestHyperParams {
                    n_trees: 60,
                    ..Default::default()
                },
                seed,
            )
            .unwrap();
            let oob = oob_scores(&model, &data).unwrap();
            let mut scores = Vec::new();
            let mut labels = Vec::new();
            for (j, s) in oob.iter().enumerate() {
                if let Some(s) = s {
                    scores.push(*s);
                    labels.push(data.labels[j]);
                }
            }
            aucs.push(auc(&scores, &labels).unwrap());
        }
        let mean = aucs.iter().sum::<f64>() / aucs.len() as f64;
        assert!(
            (mean - 0.5).abs() <= 0.05,
            "mean OOB AUC {mean} over {aucs:?}"
        );
    }

    #[test]
    fn oob_and_heldout_auc_detect_signal() {
        let train = gaussian_task(80, 80, 1.5, 4, 2, 29);
        let test = gaussian_task(50, 50, 1.5, 4, 2, 31);
        let model = train_forest(
            &train,
            &ForestHyperParams {
                n_trees: 80,
                ..Default::default()
            },
            37,
        )
        .unwrap();
        let scores = predict_proba(&model, &test.features).unwrap();
        let a = auc(&scores, &test.labels).unwrap();
        assert!(a >= 0.9, "held-out AUC {a}");
    }

    #[test]
    fn balanced_weights_raise_minority_recall() {
        // Mixed leaves are where class weights bite, hence the high min_leaf.
        let mut recall_balanced = 0.0;
        let mut recall_uniform = 0.0;
        for seed in 0..5u64 {
            let train = gaussian_task(40, 400, 1.0, 3, 2, 200 + seed);
            let test = gaussian_task(100, 100, 1.0, 3, 2, 300 + seed);
            for balanced in [false, true] {
                let hp = ForestHyperParams {
                    n_trees: 60,
                    min_leaf: 10,
                    class_weight: if balanced {
                        ClassWeight::Balanced
                    } else {
                        ClassWeight::Uniform
                    },
                    ..Default::default()
                };
                let model = train_forest(&train, &hp, 41 + seed).unwrap();
                let scores = predict_proba(&model, &test.features).unwrap();
                let tp = scores
                    .iter()
                    .zip(&test.labels)
                    .filter(|(s, &l)| l && **s >= 0.5)
                    .count();
                let recall = tp as f64 / 100.0;
                if balanced {
                    recall_balanced += recall;
                } else {
                    recall_uniform += recall;
                }
            }
        }
        assert!(
            recall_balanced > recall_uniform,
            "balanced {recall_balanced} vs uniform {recall_uniform}"
        );
    }

    #[test]
    fn auc_handles_perfect_and_tied_cases() {
        assert_eq!(
            auc(&[0.1, 0.2, 0.8, 0.9], &[false, false, true, true]).unwrap(),
            1.0
        );
        assert_eq!(
            auc(&[0.5, 0.5, 0.5, 0.5], &[false, true, false, true]).unwrap(),
            0.5
        );
        assert_eq!(
            auc(&[0.9, 0.8, 0.2, 0.1], &[false, false, true, true]).unwrap(),
            0.0
        );
        assert!(auc(&[0.5], &[true]).is_err());
        assert!(auc(&[0.1, 0.2], &[true, true]).is_err());
    }

    fn auc_pairwise_oracle(scores: &[f64], labels: &[bool]) -> f64 {
        let mut num = 0.0f64;
        let mut pairs = 0.0f64;
        for (i, &li) in labels.iter().enumerate() {
            if !li {
                continue;
            }
            for (j, &lj) in labels.iter().enumerate() {
                if lj {
                    continue;
                }
                pairs += 1.0;
                if scores[i] > scores[j] {
                    num += 1.0;
                } else if scores[i] == scores[j] {
                    num += 0.5;
                }
            }
        }
        num / pairs
    }

    #[test]
    fn auc_matches_pairwise_oracle_exactly() {
        let mut r = rng::stream(47, &["test", "auc"]);
        for case in 0..100 {
            let n = 2 + (case % 30);
            let mut scores: Vec<f64> = (0..n)
                .map(|_| {
                    // Coarse grid forces plenty of ties.
                    (r.random_range(0..8) as f64) / 8.0
                })
                .collect();
            let mut labels: Vec<bool> = (0..n).map(|_| r.random_range(0..2) == 1).collect();
            if !labels.contains(&true) {
                labels[0] = true;
            }
            if !labels.contains(&false) {
                labels[n - 1] = false;
            }
            if case % 3 == 0 {
                scores = scores.iter().map(|s| s * 100.0 - 3.0).collect();
            }
            let fast = auc(&scores, &labels).unwrap();
            let slow = auc_pairwise_oracle(&scores, &labels);
            assert_eq!(fast, slow, "case {case}: {fast} vs {slow}");
        }
    }

    #[test]
    fn auc_invariant_under_monotone_transform() {
        let scores = vec![0.1, 0.4, 0.4, 0.7, 0.2, 0.9];
        let labels = vec![false, true, false, true, false, true];
        let base = auc(&scores, &labels).unwrap();
        let squashed: Vec<f64> = scores.iter().map(|s| (3.0 * s).tanh()).collect();
        assert_eq!(auc(&squashed, &labels).unwrap(), base);
    }

    fn meta(id: &str, start: f64, end: f64, n: usize, target: Option<f64>) -> RecordMeta {
        RecordMeta {
            record_id: id.to_string(),
            span: RecordSpan {
                record_id: id.to_string(),
                start,
                end,
            },
            n_observations: n,
            first_target_time: target,
        }
    }

    #[test]
    fn cohort_positive_instance_lands_at_lookahead_point() {
        let records = vec![
            meta("pos", 2004.9, 2015.5, 50, Some(2015.0)),
            meta("neg", 2000.0, 2012.0, 50, None),
        ];
        let provenance = vec![
            instance("pos", 2004.95),
            instance("pos", 2005.03), // closest to 2005.0
            instance("pos", 2010.0),
            instance("neg", 2001.0),
            instance("neg", 2001.9),
            instance("neg", 2003.0), // beyond end - horizon = 2002.0
        ];
        let sel = build_hcc_cohort(&records, &provenance, &CohortConfig::default()).unwrap();
        assert_eq!(sel.indices, vec![1, 3, 4]);
        assert_eq!(sel.labels, vec![true, false, false]);
        assert_eq!(sel.n_positive_records, 1);
        assert_eq!(sel.n_negative_records, 1);
    }

    #[test]
    fn cohort_short_records_and_thin_records_excluded() {
        let records = vec![
            meta("short", 2000.0, 2009.0, 50, None), // 9 years: too short
            meta("thin", 2000.0, 2015.0, 8, None),   // fewer than 10 observations
            meta("pos", 2000.0, 2015.5, 50, Some(2012.0)),
            meta("neg", 2000.0, 2012.0, 50, None),
        ];
        let provenance = vec![
            instance("short", 2001.0),
            instance("thin", 2001.0),
            instance("pos", 2002.0),
            instance("neg", 2001.0),
        ];
        let sel = build_hcc_cohort(&records, &provenance, &CohortConfig::default()).unwrap();
        assert_eq!(sel.indices, vec![2, 3]);
        assert_eq!(sel.labels, vec![true, false]);
        assert_eq!(sel.n_excluded_min_data, 1);
    }

    #[test]
    fn cohort_positive_needs_horizon_of_history() {
        let records = vec![
            meta("late", 2006.0, 2015.5, 50, Some(2015.0)), // only 9y before code
            meta("neg", 2000.0, 2012.0, 50, None),
        ];
        let provenance = vec![instance("late", 2006.0), instance("neg", 2001.0)];
        let err = build_hcc_cohort(&records, &provenance, &CohortConfig::default()).unwrap_err();
        assert!(err.is_validation());
    }

    #[test]
    fn cohort_positive_requires_instance_within_window() {
        let records = vec![
            meta("pos", 2000.0, 2015.5, 50, Some(2015.0)),
            meta("neg", 2000.0, 2012.0, 50, None),
        ];
        // Nearest instance is 40 days off the 2005.0 mark: outside the window.
        let provenance = vec![
            instance("pos", 2005.0 + 40.0 / 365.0),
            instance("neg", 2001.0),
        ];
        let err = build_hcc_cohort(&records, &provenance, &CohortConfig::default()).unwrap_err();
        assert!(err.is_validation());
    }

    #[test]
    fn cohort_one_negative_per_record_policy() {
        let records = vec![
            meta("pos", 2000.0, 2015.5, 50, Some(2012.0)),
            meta("neg", 2000.0, 2012.0, 50, None),
        ];
        let provenance = vec![
            instance("pos", 2002.01),
            instance("neg", 2001.5),
            instance("neg", 2000.5),
            instance("neg", 2002.0),
        ];
        let cfg = CohortConfig {
            negatives: NegativePolicy::OnePerRecord,
            ..Default::default()
        };
        let sel = build_hcc_cohort(&records, &provenance, &cfg).unwrap();
        assert_eq!(sel.indices, vec![0, 2]);
        assert_eq!(sel.labels, vec![true, false]);
    }

    #[test]
    fn record_meta_collects_spans_counts_and_target() {
        let events = vec![
            EventSeries {
                record_id: "p1".into(),
                variable_id: "155.0".into(),
                times: vec![2010.0, 2011.0],
            },
            EventSeries {
                record_id: "p1".into(),
                variable_id: "250.0".into(),
                times: vec![2001.0],
            },
        ];
        let values = vec![ValueSeries {
            record_id: "p1".into(),
            variable_id: "AST".into(),
            points: vec![(2000.0, 30.0), (2012.0, 40.0)],
        }];
        let metas = compute_record_meta(&events, &values, &default_target_codes());
        assert_eq!(metas.len(), 1);
        assert_eq!(metas[0].n_observations, 5);
        assert_eq!(metas[0].span.start, 2000.0);
        assert_eq!(metas[0].span.end, 2012.0);
        assert_eq!(metas[0].first_target_time, Some(2010.0));
    }

    #[test]
    fn split_keeps_records_whole_and_stratified() {
        let mut features = DMatrix::zeros(2, 60);
        let mut labels = vec![false; 60];
        let mut provenance = Vec::new();
        for j in 0..60 {
            let rid = format!("r{:02}", j / 3); // 20 records, 3 instances each
            provenance.push(instance(&rid, j as f64));
            labels[j] = j / 3 < 4; // records r00..r03 positive
            features[(0, j)] = j as f64;
        }
        let data = LabeledInstances::new(features, labels, provenance).unwrap();
        let (train, test) = split_by_record(&data, 0.2, 5).unwrap();
        assert_eq!(train.len() + test.len(), 60);
        let train_records: BTreeSet<&str> = train
            .iter()
            .map(|&j| data.provenance[j].record_id.as_str())
            .collect();
        let test_records: BTreeSet<&str> = test
            .iter()
            .map(|&j| data.provenance[j].record_id.as_str())
            .collect();
        assert!(train_records.is_disjoint(&test_records));
        // 20% of 4 positive records -> 1; 20% of 16 negative -> 3.
        let test_pos = test_records
            .iter()
            .filter(|r| r.as_bytes()[2] < b'4' && r.len() == 3)
            .count();
        assert_eq!(test_records.len(), 4);
        assert_eq!(test_pos, 1);
        let (t2, s2) = split_by_record(&data, 0.2, 5).unwrap();
        assert_eq!((train.clone(), test.clone()), (t2, s2));
        let (_, s3) = split_by_record(&data, 0.2, 6).unwrap();
        assert_ne!(test, s3);
    }
}
