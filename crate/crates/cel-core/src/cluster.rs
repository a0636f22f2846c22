//! Item clustering: membership bookkeeping, loss-minimizing reassignment,
//! gradient-PCA splits, balance-constrained online splits, and the baseline
//! split methods.

use std::fmt;
use std::str::FromStr;

use rand::seq::index as rand_index;
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::dataset::DataView;
use crate::error::{CelError, Result};
use crate::matrix::{dot, norm_sq, Mat};
use crate::model::{cluster_losses, item_gradient, loss, EmbeddingModel, InteractionScorer};

/// Which per-cluster statistic picks the next cluster to split.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum SplitCriterion {
    TotalLoss,
    MeanLoss,
    MemberCount,
    /// Number of observed interactions whose item is in the cluster (default).
    InteractionCount,
    GradientNorm,
}

impl FromStr for SplitCriterion {
    type Err = CelError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "loss" => Ok(SplitCriterion::TotalLoss),
            "mean-loss" => Ok(SplitCriterion::MeanLoss),
            "members" => Ok(SplitCriterion::MemberCount),
            "interactions" => Ok(SplitCriterion::InteractionCount),
            "grad-norm" => Ok(SplitCriterion::GradientNorm),
            other => Err(CelError::Config(format!("unknown split criterion '{other}'"))),
        }
    }
}

impl fmt::Display for SplitCriterion {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let s = match self {
            SplitCriterion::TotalLoss => "loss",
            SplitCriterion::MeanLoss => "mean-loss",
            SplitCriterion::MemberCount => "members",
            SplitCriterion::InteractionCount => "interactions",
            SplitCriterion::GradientNorm => "grad-norm",
        };
        write!(f, "{s}")
    }
}

/// How a chosen cluster is split in two.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum SplitMethod {
    /// Principal direction of the members' standardized gradients (default).
    Gpca,
    /// Random unit direction instead of the principal one.
    RandomProjection,
    /// Uniform coin flip per member.
    Random,
}

impl FromStr for SplitMethod {
    type Err = CelError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "gpca" => Ok(SplitMethod::Gpca),
            "random-projection" => Ok(SplitMethod::RandomProjection),
            "random" => Ok(SplitMethod::Random),
            other => Err(CelError::Config(format!("unknown split method '{other}'"))),
        }
    }
}

impl fmt::Display for SplitMethod {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let s = match self {
            SplitMethod::Gpca => "gpca",
            SplitMethod::RandomProjection => "random-projection",
            SplitMethod::Random => "random",
        };
        write!(f, "{s}")
    }
}

/// Membership lists and interaction weights per cluster, kept in lockstep
/// with a model's assignment vector.
#[derive(Debug, Clone)]
pub struct ClusterState {
    members: Vec<Vec<u32>>,
    weight: Vec<u64>,
}

impl ClusterState {
    /// Builds the state from an assignment; `item_weights[j]` is item j's
    /// interaction count. Every cluster must have at least one member.
    pub fn new(assign: &[u32], m_q: usize, item_weights: &[u64]) -> Result<Self> {
        let mut members = vec![Vec::new(); m_q];
        let mut weight = vec![0u64; m_q];
        for (j, &k) in assign.iter().enumerate() {
            if (k as usize) >= m_q {
                return Err(CelError::BadCluster { k: k as usize, m_q });
            }
            members[k as usize].push(j as u32);
            weight[k as usize] += item_weights[j];
        }
        if let Some(empty) = members.iter().position(Vec::is_empty) {
            return Err(CelError::Config(format!("cluster {empty} has no members")));
        }
        Ok(ClusterState { members, weight })
    }

    /// A state with no clusters yet (online training starts here).
    pub fn empty() -> Self {
        ClusterState { members: Vec::new(), weight: Vec::new() }
    }

    pub fn m_q(&self) -> usize {
        self.members.len()
    }

    pub fn members(&self, k: usize) -> &[u32] {
        &self.members[k]
    }

    pub fn member_count(&self, k: usize) -> usize {
        self.members[k].len()
    }

    /// Cumulative interaction weight of cluster `k`.
    pub fn weight(&self, k: usize) -> u64 {
        self.weight[k]
    }

    pub fn weights(&self) -> &[u64] {
        &self.weight
    }

    /// Appends an empty cluster and returns its index.
    pub fn add_cluster(&mut self) -> usize {
        self.members.push(Vec::new());
        self.weight.push(0);
        self.members.len() - 1
    }

    /// Registers a brand-new item (online growth).
    pub fn add_item(&mut self, j: u32, k: usize, item_weight: u64) {
        let pos = self.members[k].binary_search(&j).unwrap_err();
        self.members[k].insert(pos, j);
        self.weight[k] += item_weight;
    }

    /// Adds interaction weight to item `j`'s cluster as data streams in.
    pub fn add_weight(&mut self, k: usize, w: u64) {
        self.weight[k] += w;
    }

    /// Moves item `j` between clusters, carrying its interaction weight.
    pub fn move_item(&mut self, j: u32, from: usize, to: usize, item_weight: u64) {
        debug_assert_ne!(from, to);
        let pos = self.members[from]
            .binary_search(&j)
            .expect("item not in its recorded cluster");
        self.members[from].remove(pos);
        let ins = self.members[to].binary_search(&j).unwrap_err();
        self.members[to].insert(ins, j);
        self.weight[from] -= item_weight;
        self.weight[to] += item_weight;
    }

    /// Verifies the state matches an assignment vector exactly and that no
    /// cluster is empty.
    pub fn consistent_with(&self, assign: &[u32]) -> bool {
        if self.members.iter().any(Vec::is_empty) {
            return false;
        }
        let total: usize = self.members.iter().map(Vec::len).sum();
        if total != assign.len() {
            return false;
        }
        self.members.iter().enumerate().all(|(k, list)| {
            list.windows(2).all(|w| w[0] < w[1])
                && list.iter().all(|&j| assign[j as usize] as usize == k)
        })
    }
}

/// Candidate clusters offered to each item during reassignment.
pub enum CandidatePool<'a> {
    /// Every cluster (offline reassignment).
    AllClusters,
    /// `pools[i]` lists the clusters item `candidates[i]` may consider.
    PerItem(&'a [Vec<u32>]),
}

struct MoveEval {
    item: u32,
    from: u32,
    to: u32,
    gain: f64,
}

/// Reassigns each candidate item to the cluster minimizing its own masked
/// loss, keeping it in place on ties. An item that is its cluster's sole
/// member never moves. Candidates must be distinct. Returns the number of
/// items moved and the exact view loss after the moves.
pub fn reassign<S: InteractionScorer>(
    model: &mut EmbeddingModel,
    state: &mut ClusterState,
    scorer: &S,
    view: DataView,
    candidates: &[u32],
    pool: CandidatePool,
    item_weights: &[u64],
) -> (usize, f64) {
    let pre = loss(model, scorer, view);
    let inter = view.interactions();
    let all: Vec<u32> = match pool {
        CandidatePool::AllClusters => (0..model.m_q() as u32).collect(),
        CandidatePool::PerItem(_) => Vec::new(),
    };

    let evals: Vec<Option<MoveEval>> = candidates
        .par_iter()
        .enumerate()
        .map(|(i, &j)| {
            let cluster_pool: &[u32] = match &pool {
                CandidatePool::AllClusters => &all,
                CandidatePool::PerItem(pools) => &pools[i],
            };
            let positions = view.item_positions(j);
            if positions.is_empty() {
                return None;
            }
            let cur = model.assign[j as usize];
            let own_loss = |c: u32| -> f64 {
                let b = model.b_q.row(c as usize);
                positions
                    .iter()
                    .map(|&pos| {
                        let it = &inter[pos as usize];
                        let r = it.rating - scorer.score(model.user_embedding(it.user), b);
                        r * r
                    })
                    .sum()
            };
            let cur_loss = own_loss(cur);
            let mut best = cur;
            let mut best_loss = cur_loss;
            for &c in cluster_pool {
                if c == cur {
                    continue;
                }
                let l = own_loss(c);
                if l < best_loss {
                    best = c;
                    best_loss = l;
                }
            }
            (best != cur).then_some(MoveEval { item: j, from: cur, to: best, gain: cur_loss - best_loss })
        })
        .collect();

    let mut moved = 0usize;
    let mut gained = 0.0;
    for e in evals.into_iter().flatten() {
        if state.member_count(e.from as usize) <= 1 {
            continue;
        }
        model.assign[e.item as usize] = e.to;
        state.move_item(e.item, e.from as usize, e.to as usize, item_weights[e.item as usize]);
        moved += 1;
        gained += e.gain;
    }
    (moved, pre - gained)
}

/// Samples `m` distinct candidate clusters besides the current one and
/// returns them with the current cluster included, ascending. Falls back to
/// all clusters when fewer than `m` others exist.
pub fn sample_cluster_pool(m_q: usize, current: u32, m: usize, rng: &mut ChaCha8Rng) -> Vec<u32> {
    let others = m_q.saturating_sub(1);
    let mut pool: Vec<u32> = if others <= m {
        (0..m_q as u32).collect()
    } else {
        let mut v: Vec<u32> = rand_index::sample(rng, others, m)
            .into_iter()
            .map(|i| {
                let i = i as u32;
                if i >= current {
                    i + 1
                } else {
                    i
                }
            })
            .collect();
        v.push(current);
        v
    };
    pool.sort_unstable();
    pool
}

/// The statistic of every cluster under the given criterion.
pub fn criterion_values<S: InteractionScorer>(
    crit: SplitCriterion,
    model: &EmbeddingModel,
    state: &ClusterState,
    scorer: &S,
    view: DataView,
) -> Vec<f64> {
    match crit {
        SplitCriterion::TotalLoss => cluster_losses(model, scorer, view),
        SplitCriterion::MeanLoss => cluster_losses(model, scorer, view)
            .iter()
            .enumerate()
            .map(|(k, l)| l / state.member_count(k) as f64)
            .collect(),
        SplitCriterion::MemberCount => {
            (0..state.m_q()).map(|k| state.member_count(k) as f64).collect()
        }
        SplitCriterion::InteractionCount => state.weights().iter().map(|&w| w as f64).collect(),
        SplitCriterion::GradientNorm => {
            let mut out = vec![0.0; state.m_q()];
            out.par_iter_mut().enumerate().for_each(|(k, v)| {
                *v = state
                    .members(k)
                    .iter()
                    .map(|&j| norm_sq(&item_gradient(model, scorer, view, j)))
                    .sum();
            });
            out
        }
    }
}

/// Index of the largest value; ties go to the lowest index.
pub fn choose_cluster(values: &[f64]) -> Option<usize> {
    let mut best: Option<usize> = None;
    for (k, &v) in values.iter().enumerate() {
        match best {
            None => best = Some(k),
            Some(b) if v > values[b] => best = Some(k),
            _ => {}
        }
    }
    best
}

/// Like [`choose_cluster`] but skips clusters that cannot be split.
pub fn choose_splittable(values: &[f64], state: &ClusterState) -> Option<usize> {
    let mut best: Option<usize> = None;
    for (k, &v) in values.iter().enumerate() {
        if state.member_count(k) < 2 {
            continue;
        }
        match best {
            None => best = Some(k),
            Some(b) if v > values[b] => best = Some(k),
            _ => {}
        }
    }
    best
}

/// One gradient row per member item, in member order.
fn member_gradients<S: InteractionScorer>(
    model: &EmbeddingModel,
    scorer: &S,
    view: DataView,
    members: &[u32],
) -> Mat {
    let mut g = Mat::zeros(members.len(), model.r());
    g.par_rows_mut().enumerate().for_each(|(i, row)| {
        row.copy_from_slice(&item_gradient(model, scorer, view, members[i]));
    });
    g
}

/// Centers each column and scales by its population standard deviation,
/// flooring the deviation at 1e-12 so constant columns stay zero.
pub fn standardize_columns(g: &mut Mat) {
    let n = g.rows();
    if n == 0 {
        return;
    }
    for c in 0..g.cols() {
        let mut mean = 0.0;
        for row in 0..n {
            mean += g.row(row)[c];
        }
        mean /= n as f64;
        let mut var = 0.0;
        for row in 0..n {
            let d = g.row(row)[c] - mean;
            var += d * d;
        }
        let denom = (var / n as f64).sqrt().max(1e-12);
        for row in 0..n {
            let v = &mut g.row_mut(row)[c];
            *v = (*v - mean) / denom;
        }
    }
}

fn gram(z: &Mat) -> Mat {
    let r = z.cols();
    let mut c = Mat::zeros(r, r);
    for row in 0..z.rows() {
        let zr = z.row(row);
        for i in 0..r {
            let zi = zr[i];
            if zi == 0.0 {
                continue;
            }
            let dst = c.row_mut(i);
            for (d, &v) in dst.iter_mut().zip(zr) {
                *d += zi * v;
            }
        }
    }
    c
}

/// Leading eigenvector of a symmetric positive-semidefinite matrix by
/// power iteration from the deterministic start (1, ..., 1)/sqrt(R).
/// Returns the start direction unchanged when the matrix annihilates it.
pub fn power_iteration(c: &Mat) -> Vec<f64> {
    let r = c.rows();
    let mut v = vec![1.0 / (r as f64).sqrt(); r];
    let mut w = vec![0.0; r];
    for _ in 0..1000 {
        for (i, wi) in w.iter_mut().enumerate() {
            *wi = dot(c.row(i), &v);
        }
        let n = norm_sq(&w).sqrt();
        if n < 1e-300 {
            return v;
        }
        w.iter_mut().for_each(|x| *x /= n);
        let diff = v
            .iter()
            .zip(&w)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0f64, f64::max);
        v.copy_from_slice(&w);
        if diff < 1e-10 {
            break;
        }
    }
    v
}

/// Gradient-PCA scores of the member items: each member's standardized
/// gradient row projected on the principal direction.
fn gpca_scores<S: InteractionScorer>(
    model: &EmbeddingModel,
    scorer: &S,
    view: DataView,
    members: &[u32],
) -> Vec<f64> {
    let mut g = member_gradients(model, scorer, view, members);
    standardize_columns(&mut g);
    let p = power_iteration(&gram(&g));
    (0..g.rows()).map(|i| dot(g.row(i), &p)).collect()
}

/// Members whose score clears `delta`; when that takes none or all of
/// them, the single member with the largest score (lowest index on ties).
fn threshold_partition(members: &[u32], scores: &[f64], delta: f64) -> Vec<u32> {
    let moved: Vec<u32> = members
        .iter()
        .zip(scores)
        .filter(|(_, &s)| s >= delta)
        .map(|(&j, _)| j)
        .collect();
    if moved.is_empty() || moved.len() == members.len() {
        let mut best = 0;
        for (i, &s) in scores.iter().enumerate() {
            if s > scores[best] {
                best = i;
            }
        }
        vec![members[best]]
    } else {
        moved
    }
}

/// A committed split: the new cluster's index and the items moved into it.
#[derive(Debug)]
pub struct SplitOutcome {
    pub new_cluster: usize,
    pub moved: Vec<u32>,
}

/// Appends a new cluster whose embedding row equals cluster `k`'s and moves
/// the given items into it, leaving every prediction unchanged.
fn commit_split(
    model: &mut EmbeddingModel,
    state: &mut ClusterState,
    k: usize,
    moved: Vec<u32>,
    item_weights: &[u64],
) -> SplitOutcome {
    debug_assert!(!moved.is_empty());
    debug_assert!(moved.len() < state.member_count(k));
    let new_cluster = state.add_cluster();
    model.b_q.duplicate_row(k);
    for &j in &moved {
        model.assign[j as usize] = new_cluster as u32;
        state.move_item(j, k, new_cluster, item_weights[j as usize]);
    }
    model.q += 1;
    SplitOutcome { new_cluster, moved }
}

/// Splits cluster `k` along the principal direction of its members'
/// standardized gradients: members scoring at or above `delta` form the new
/// cluster. Loss-neutral by construction.
pub fn gpca_split<S: InteractionScorer>(
    model: &mut EmbeddingModel,
    state: &mut ClusterState,
    scorer: &S,
    view: DataView,
    k: usize,
    delta: f64,
    item_weights: &[u64],
) -> Result<SplitOutcome> {
    let members = state.members(k).to_vec();
    if members.len() < 2 {
        return Err(CelError::Unsplittable { k, members: members.len() });
    }
    let scores = gpca_scores(model, scorer, view, &members);
    let moved = threshold_partition(&members, &scores, delta);
    Ok(commit_split(model, state, k, moved, item_weights))
}

/// Ablation split: like [`gpca_split`] but projects the standardized
/// gradients on a random unit direction instead of the principal one.
pub fn random_projection_split<S: InteractionScorer>(
    model: &mut EmbeddingModel,
    state: &mut ClusterState,
    scorer: &S,
    view: DataView,
    k: usize,
    delta: f64,
    item_weights: &[u64],
    rng: &mut ChaCha8Rng,
) -> Result<SplitOutcome> {
    let members = state.members(k).to_vec();
    if members.len() < 2 {
        return Err(CelError::Unsplittable { k, members: members.len() });
    }
    let mut g = member_gradients(model, scorer, view, &members);
    standardize_columns(&mut g);
    let mut p: Vec<f64> = (0..g.cols()).map(|_| rng.sample::<f64, _>(StandardNormal)).collect();
    let n = norm_sq(&p).sqrt();
    if n > 0.0 {
        p.iter_mut().for_each(|v| *v /= n);
    }
    let scores: Vec<f64> = (0..g.rows()).map(|i| dot(g.row(i), &p)).collect();
    let moved = threshold_partition(&members, &scores, delta);
    Ok(commit_split(model, state, k, moved, item_weights))
}

/// Ablation split: each member moves on a fair coin flip; a degenerate
/// outcome moves one uniformly chosen member instead.
pub fn random_split(
    model: &mut EmbeddingModel,
    state: &mut ClusterState,
    k: usize,
    item_weights: &[u64],
    rng: &mut ChaCha8Rng,
) -> Result<SplitOutcome> {
    let members = state.members(k).to_vec();
    if members.len() < 2 {
        return Err(CelError::Unsplittable { k, members: members.len() });
    }
    let mut moved: Vec<u32> = members.iter().copied().filter(|_| rng.gen::<bool>()).collect();
    if moved.is_empty() || moved.len() == members.len() {
        moved = vec![members[rng.gen_range(0..members.len())]];
    }
    Ok(commit_split(model, state, k, moved, item_weights))
}

/// Finds the score threshold whose induced split has interaction imbalance
/// |total - 2 moved| at most `d`, minimizing the imbalance. Thresholds can
/// only cut between distinct score values; equal scores stay together.
pub fn balanced_threshold(scores: &[f64], weights: &[u64], d: u64) -> Result<f64> {
    debug_assert_eq!(scores.len(), weights.len());
    if scores.iter().any(|s| !s.is_finite()) {
        return Err(CelError::BalanceInfeasible { d });
    }
    let total: u64 = weights.iter().sum();
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]));

    let mut best: Option<(u128, f64)> = None;
    let mut cum = 0u64;
    for (rank, &i) in order.iter().enumerate() {
        cum += weights[i];
        if rank + 1 == order.len() {
            break;
        }
        let next = order[rank + 1];
        if scores[next] == scores[i] {
            continue;
        }
        let imbalance = (total as i128 - 2 * cum as i128).unsigned_abs();
        if best.map_or(true, |(b, _)| imbalance < b) {
            best = Some((imbalance, scores[i]));
        }
    }
    match best {
        Some((imbalance, delta)) if imbalance <= d as u128 => Ok(delta),
        _ => Err(CelError::BalanceInfeasible { d }),
    }
}

/// Splits cluster `k` on its gradient-PCA scores at the balance-tuned
/// threshold. When no threshold is balance-feasible, falls back to the
/// member-order prefix whose imbalance is smallest, so the split always
/// happens and both sides stay nonempty.
pub fn strategy2_split<S: InteractionScorer>(
    model: &mut EmbeddingModel,
    state: &mut ClusterState,
    scorer: &S,
    view: DataView,
    k: usize,
    d: u64,
    item_weights: &[u64],
) -> Result<SplitOutcome> {
    let members = state.members(k).to_vec();
    if members.len() < 2 {
        return Err(CelError::Unsplittable { k, members: members.len() });
    }
    let scores = gpca_scores(model, scorer, view, &members);
    let weights: Vec<u64> = members.iter().map(|&j| item_weights[j as usize]).collect();
    let mut moved: Vec<u32> = match balanced_threshold(&scores, &weights, d) {
        Ok(delta) => members
            .iter()
            .zip(&scores)
            .filter(|(_, &s)| s >= delta)
            .map(|(&j, _)| j)
            .collect(),
        Err(_) => Vec::new(),
    };
    if moved.is_empty() || moved.len() == members.len() {
        // No usable threshold: cut the member list at the prefix whose
        // imbalance is smallest. Both sides stay nonempty.
        let total: u64 = weights.iter().sum();
        let mut cum = 0u64;
        let mut best_len = 1;
        let mut best_imb = u128::MAX;
        for l in 1..members.len() {
            cum += weights[l - 1];
            let imb = (total as i128 - 2 * cum as i128).unsigned_abs();
            if imb < best_imb {
                best_imb = imb;
                best_len = l;
            }
        }
        moved = members[..best_len].to_vec();
    }
    Ok(commit_split(model, state, k, moved, item_weights))
}

/// Whether cluster `k` has accrued enough interactions for a balanced
/// split with slack `d` to be worth attempting.
pub fn strategy2_eligible(state: &ClusterState, k: usize, d: u64) -> bool {
    state.weight(k) > d.saturating_mul(2)
}

/// Items among `among` that have more than `d` interactions while sharing
/// their cluster with other items.
pub fn strategy1_candidates(
    assign: &[u32],
    state: &ClusterState,
    item_weights: &[u64],
    d: u64,
    among: &[u32],
) -> Vec<u32> {
    among
        .iter()
        .copied()
        .filter(|&j| {
            item_weights[j as usize] > d && state.member_count(assign[j as usize] as usize) > 1
        })
        .collect()
}

/// Moves item `j` into its own fresh singleton cluster, loss-neutrally.
pub fn isolate_item(
    model: &mut EmbeddingModel,
    state: &mut ClusterState,
    j: u32,
    item_weights: &[u64],
) -> Result<usize> {
    let k = model.assign[j as usize] as usize;
    if state.member_count(k) < 2 {
        return Err(CelError::Unsplittable { k, members: state.member_count(k) });
    }
    let outcome = commit_split(model, state, k, vec![j], item_weights);
    Ok(outcome.new_cluster)
}

/// Assignment of `m_items` items to `m_q` clusters by index modulo.
pub fn modulo_assign(m_items: usize, m_q: usize) -> Vec<u32> {
    (0..m_items).map(|j| (j % m_q) as u32).collect()
}
