//! Embedding model: user table A, cluster table B_q, item assignments, the
//! pluggable interaction scorer, losses, gradients, personalization, and
//! checkpoint serialization.

use std::fmt;
use std::path::Path;
use std::str::FromStr;

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::dataset::DataView;
use crate::error::{CelError, Result};
use crate::matrix::{dot, Mat};

/// How nonnegativity is enforced after each embedding update.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum NonnegMode {
    /// Elementwise absolute value (default).
    Abs,
    /// Clip negatives to zero.
    Clip,
    /// No enforcement.
    Off,
}

impl FromStr for NonnegMode {
    type Err = CelError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "abs" => Ok(NonnegMode::Abs),
            "clip" => Ok(NonnegMode::Clip),
            "off" => Ok(NonnegMode::Off),
            other => Err(CelError::Config(format!("unknown nonneg mode '{other}'"))),
        }
    }
}

impl fmt::Display for NonnegMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            NonnegMode::Abs => write!(f, "abs"),
            NonnegMode::Clip => write!(f, "clip"),
            NonnegMode::Off => write!(f, "off"),
        }
    }
}

/// All training hyperparameters.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Hyperparams {
    /// Learning rate.
    pub eta: f64,
    /// Norm-regularization weight on A (or the user cluster table) and B_q.
    pub lambda_reg: f64,
    /// Personalization pull-back weight.
    pub lambda_p: f64,
    /// Embedding steps per reassignment.
    pub t1: usize,
    /// Embedding steps per split.
    pub t2: usize,
    /// Split score threshold.
    pub delta: f64,
    /// Interaction-count threshold for the online split strategies.
    pub d: u64,
    /// Replay-buffer capacity per entity.
    pub n: usize,
    /// Sampled candidate clusters per online reassignment.
    pub m: usize,
    /// Online batch size.
    pub b: usize,
    /// Compression target M*/M.
    pub target_ratio: f64,
    /// Initial cluster count.
    pub m0: usize,
    /// Seed for all randomness.
    pub seed: u64,
    /// Scale each cluster gradient by 1/member-count.
    pub averaging: bool,
    /// Nonnegativity enforcement (applies only to nonnegative scorers).
    pub nonneg: NonnegMode,
}

impl Default for Hyperparams {
    /// Offline defaults.
    fn default() -> Self {
        Hyperparams {
            eta: 1e-4,
            lambda_reg: 1.0,
            lambda_p: 50.0,
            t1: 40,
            t2: 10,
            delta: 0.0,
            d: 100,
            n: 20,
            m: 10,
            b: 2000,
            target_ratio: 1.0,
            m0: 1,
            seed: 1,
            averaging: true,
            nonneg: NonnegMode::Abs,
        }
    }
}

impl Hyperparams {
    /// Online defaults: higher learning rate, reassignment every batch.
    pub fn lite() -> Self {
        Hyperparams { eta: 0.05, t1: 1, ..Hyperparams::default() }
    }
}

/// Pluggable feature-interaction model mapping a (user, item) embedding
/// pair to a prediction. Gradients accumulate d(residual^2)/d(embedding)
/// into the output slices.
pub trait InteractionScorer: Sync {
    fn score(&self, user: &[f64], item: &[f64]) -> f64;

    /// Accumulates the squared-residual gradient w.r.t. both embeddings.
    fn grad_pair(
        &self,
        user: &[f64],
        item: &[f64],
        residual: f64,
        g_user: &mut [f64],
        g_item: &mut [f64],
    );

    /// Accumulates only the user-side gradient.
    fn grad_user(&self, user: &[f64], item: &[f64], residual: f64, out: &mut [f64]) {
        let mut scratch = vec![0.0; item.len()];
        self.grad_pair(user, item, residual, out, &mut scratch);
    }

    /// Accumulates only the item-side gradient.
    fn grad_item(&self, user: &[f64], item: &[f64], residual: f64, out: &mut [f64]) {
        let mut scratch = vec![0.0; user.len()];
        self.grad_pair(user, item, residual, &mut scratch, out);
    }

    /// Whether embeddings under this scorer are constrained nonnegative.
    fn nonnegative(&self) -> bool {
        false
    }
}

/// Dot-product scorer (nonnegative matrix factorization).
#[derive(Debug, Clone, Copy, Default)]
pub struct NmfScorer;

impl InteractionScorer for NmfScorer {
    fn score(&self, user: &[f64], item: &[f64]) -> f64 {
        dot(user, item)
    }

    fn grad_pair(
        &self,
        user: &[f64],
        item: &[f64],
        residual: f64,
        g_user: &mut [f64],
        g_item: &mut [f64],
    ) {
        let c = -2.0 * residual;
        for r in 0..user.len() {
            g_user[r] += c * item[r];
            g_item[r] += c * user[r];
        }
    }

    fn grad_user(&self, _user: &[f64], item: &[f64], residual: f64, out: &mut [f64]) {
        let c = -2.0 * residual;
        for (o, v) in out.iter_mut().zip(item) {
            *o += c * v;
        }
    }

    fn grad_item(&self, user: &[f64], _item: &[f64], residual: f64, out: &mut [f64]) {
        let c = -2.0 * residual;
        for (o, v) in out.iter_mut().zip(user) {
            *o += c * v;
        }
    }

    fn nonnegative(&self) -> bool {
        true
    }
}

/// Assignment sentinel for items the online trainer has not seen yet.
/// Such items take part in nothing; training registers them on first
/// sight and the finalize pass places any stragglers.
pub const UNASSIGNED: u32 = u32::MAX;

/// Optional symmetric clustering of the user side: users share rows of a
/// user cluster table the same way items share rows of B_q.
#[derive(Debug, Clone, PartialEq)]
pub struct SideCluster {
    pub table: Mat,
    pub assign: Vec<u32>,
    pub q: u64,
}

/// The embedding model: user matrix A, cluster embedding matrix B_q, and
/// the item-to-cluster assignment (the row-index encoding of S_q).
#[derive(Debug, Clone, PartialEq)]
pub struct EmbeddingModel {
    pub a: Mat,
    pub b_q: Mat,
    pub assign: Vec<u32>,
    pub q: u64,
    pub user_side: Option<SideCluster>,
}

impl EmbeddingModel {
    pub fn n_users(&self) -> usize {
        self.a.rows()
    }

    pub fn n_items(&self) -> usize {
        self.assign.len()
    }

    pub fn m_q(&self) -> usize {
        self.b_q.rows()
    }

    pub fn r(&self) -> usize {
        self.b_q.cols()
    }

    /// The embedding row used for user `u` in predictions.
    pub fn user_embedding(&self, u: u32) -> &[f64] {
        match &self.user_side {
            Some(side) => side.table.row(side.assign[u as usize] as usize),
            None => self.a.row(u as usize),
        }
    }

    /// The shared cluster row used for item `j` in predictions.
    pub fn item_embedding(&self, j: u32) -> &[f64] {
        self.b_q.row(self.assign[j as usize] as usize)
    }

    pub fn predict<S: InteractionScorer>(&self, scorer: &S, user: u32, item: u32) -> f64 {
        scorer.score(self.user_embedding(user), self.item_embedding(item))
    }

    /// Item count of every cluster. Items still marked [`UNASSIGNED`] are
    /// not counted.
    pub fn member_counts(&self) -> Vec<u64> {
        let mut counts = vec![0u64; self.m_q()];
        for &k in &self.assign {
            if (k as usize) < counts.len() {
                counts[k as usize] += 1;
            }
        }
        counts
    }
}

fn user_row<'m>(a: &'m Mat, user_side: &'m Option<SideCluster>, u: u32) -> &'m [f64] {
    match user_side {
        Some(side) => side.table.row(side.assign[u as usize] as usize),
        None => a.row(u as usize),
    }
}

fn project(mode: NonnegMode, row: &mut [f64]) {
    match mode {
        NonnegMode::Abs => row.iter_mut().for_each(|v| *v = v.abs()),
        NonnegMode::Clip => row.iter_mut().for_each(|v| *v = v.max(0.0)),
        NonnegMode::Off => {}
    }
}

/// Samples one embedding row: standard normal entries scaled by the row's
/// max absolute entry into [-1, 1], then made nonnegative elementwise.
fn init_row(r: usize, rng: &mut ChaCha8Rng) -> Vec<f64> {
    let mut row: Vec<f64> = (0..r).map(|_| rng.sample::<f64, _>(StandardNormal)).collect();
    let max_abs = row.iter().fold(0.0f64, |m, v| m.max(v.abs()));
    if max_abs > 0.0 {
        row.iter_mut().for_each(|v| *v = (*v / max_abs).abs());
    }
    row
}

/// Samples an entity embedding table of `rows` rows.
pub fn init_entity_rows(rows: usize, r: usize, rng: &mut ChaCha8Rng) -> Mat {
    let mut m = Mat::zeros(0, r);
    for _ in 0..rows {
        m.push_row(&init_row(r, rng));
    }
    m
}

/// Initializes a model with the given item assignment: fresh user rows,
/// fresh per-item rows, and each cluster row set to the mean of its
/// members' initial rows. Users are sampled before items.
pub fn init_model_with_assign(
    n_users: usize,
    n_items: usize,
    r: usize,
    assign: Vec<u32>,
    m_q: usize,
    rng: &mut ChaCha8Rng,
) -> Result<EmbeddingModel> {
    if assign.len() != n_items {
        return Err(CelError::Config(format!(
            "assignment covers {} items, dataset has {n_items}",
            assign.len()
        )));
    }
    let mut counts = vec![0u64; m_q];
    for &k in &assign {
        if (k as usize) >= m_q {
            return Err(CelError::BadCluster { k: k as usize, m_q });
        }
        counts[k as usize] += 1;
    }
    if let Some(empty) = counts.iter().position(|&c| c == 0) {
        return Err(CelError::Config(format!("cluster {empty} would be empty")));
    }

    let a = init_entity_rows(n_users, r, rng);
    let item_rows = init_entity_rows(n_items, r, rng);
    let mut b_q = Mat::zeros(m_q, r);
    for (j, &k) in assign.iter().enumerate() {
        let row = item_rows.row(j);
        let dst = b_q.row_mut(k as usize);
        for (d, v) in dst.iter_mut().zip(row) {
            *d += v;
        }
    }
    for k in 0..m_q {
        let c = counts[k] as f64;
        b_q.row_mut(k).iter_mut().for_each(|v| *v /= c);
    }
    Ok(EmbeddingModel { a, b_q, assign, q: 0, user_side: None })
}

/// Initializes a model with `m0` clusters assigned by index modulo.
pub fn init_model(
    n_users: usize,
    n_items: usize,
    r: usize,
    m0: usize,
    rng: &mut ChaCha8Rng,
) -> Result<EmbeddingModel> {
    if m0 == 0 {
        return Err(CelError::Config("initial cluster count must be >= 1".into()));
    }
    if m0 > n_items {
        return Err(CelError::Config(format!(
            "initial cluster count {m0} exceeds item count {n_items}"
        )));
    }
    let assign: Vec<u32> = (0..n_items).map(|j| (j % m0) as u32).collect();
    init_model_with_assign(n_users, n_items, r, assign, m0, rng)
}

/// Per-interaction residuals (rating minus prediction) at the current
/// iterate, in view order.
pub fn residuals<S: InteractionScorer>(
    model: &EmbeddingModel,
    scorer: &S,
    view: DataView,
) -> Vec<f64> {
    let inter = view.interactions();
    let mut res = vec![0.0; inter.len()];
    res.par_iter_mut().zip(inter.par_iter()).for_each(|(out, it)| {
        *out = it.rating - model.predict(scorer, it.user, it.item);
    });
    res
}

/// Masked squared-error data loss over the view (no regularizer).
pub fn loss<S: InteractionScorer>(model: &EmbeddingModel, scorer: &S, view: DataView) -> f64 {
    residuals(model, scorer, view).iter().map(|v| v * v).sum()
}

/// The norm regularizer lambda/2 (||A||_F^2 + ||B_q||_F^2); when the user
/// side is clustered, its cluster table takes A's place.
pub fn reg_term(model: &EmbeddingModel, lambda_reg: f64) -> f64 {
    let user_sq = match &model.user_side {
        Some(side) => side.table.frobenius_sq(),
        None => model.a.frobenius_sq(),
    };
    lambda_reg / 2.0 * (user_sq + model.b_q.frobenius_sq())
}

/// Data loss plus the norm regularizer.
pub fn loss_regularized<S: InteractionScorer>(
    model: &EmbeddingModel,
    scorer: &S,
    view: DataView,
    lambda_reg: f64,
) -> f64 {
    loss(model, scorer, view) + reg_term(model, lambda_reg)
}

/// Data loss of every cluster in one pass; the values sum to the
/// unregularized total loss.
pub fn cluster_losses<S: InteractionScorer>(
    model: &EmbeddingModel,
    scorer: &S,
    view: DataView,
) -> Vec<f64> {
    let res = residuals(model, scorer, view);
    let mut out = vec![0.0; model.m_q()];
    for (it, r) in view.interactions().iter().zip(&res) {
        out[model.assign[it.item as usize] as usize] += r * r;
    }
    out
}

/// Data loss restricted to interactions whose item belongs to cluster `k`.
pub fn cluster_loss<S: InteractionScorer>(
    model: &EmbeddingModel,
    scorer: &S,
    view: DataView,
    k: usize,
) -> Result<f64> {
    if k >= model.m_q() {
        return Err(CelError::BadCluster { k, m_q: model.m_q() });
    }
    Ok(view
        .interactions()
        .iter()
        .filter(|it| model.assign[it.item as usize] as usize == k)
        .map(|it| {
            let r = it.rating - model.predict(scorer, it.user, it.item);
            r * r
        })
        .sum())
}

/// Raw loss gradients at the current iterate, with no averaging and no
/// regularizer. `user` is the gradient w.r.t. A (or the user cluster table
/// when the user side is clustered); `item` is w.r.t. B_q.
pub struct LossGrads {
    pub user: Mat,
    pub item: Mat,
}

/// Reference gradient computation: one serial pass over the view.
pub fn loss_gradients<S: InteractionScorer>(
    model: &EmbeddingModel,
    scorer: &S,
    view: DataView,
) -> LossGrads {
    let r = model.r();
    let user_rows = match &model.user_side {
        Some(side) => side.table.rows(),
        None => model.a.rows(),
    };
    let mut g_user = Mat::zeros(user_rows, r);
    let mut g_item = Mat::zeros(model.m_q(), r);
    let res = residuals(model, scorer, view);
    for (it, &res) in view.interactions().iter().zip(&res) {
        let u_row = match &model.user_side {
            Some(side) => side.assign[it.user as usize] as usize,
            None => it.user as usize,
        };
        let k = model.assign[it.item as usize] as usize;
        scorer.grad_pair(
            user_row(&model.a, &model.user_side, it.user),
            model.b_q.row(k),
            res,
            g_user.row_mut(u_row),
            g_item.row_mut(k),
        );
    }
    LossGrads { user: g_user, item: g_item }
}

/// Negative loss gradient w.r.t. item `j`'s effective embedding row,
/// computed from the view (unregularized, unaveraged).
pub fn item_gradient<S: InteractionScorer>(
    model: &EmbeddingModel,
    scorer: &S,
    view: DataView,
    j: u32,
) -> Vec<f64> {
    let mut g = vec![0.0; model.r()];
    let inter = view.interactions();
    let b_row = model.item_embedding(j);
    for &pos in view.item_positions(j) {
        let it = &inter[pos as usize];
        let u_row = model.user_embedding(it.user);
        let res = it.rating - scorer.score(u_row, b_row);
        scorer.grad_item(u_row, b_row, res, &mut g);
    }
    g.iter_mut().for_each(|v| *v = -*v);
    g
}

/// One simultaneous gradient-descent step on the user parameters and B_q
/// over the view. Cluster gradients are scaled by 1/member-count when
/// averaging is on; the regularizer decays every row touched by the view;
/// nonnegativity is enforced after the update for nonnegative scorers.
///
/// Returns the data loss at the start of the step (a free byproduct of the
/// residual pass).
pub fn grad_step<S: InteractionScorer>(
    model: &mut EmbeddingModel,
    scorer: &S,
    view: DataView,
    hp: &Hyperparams,
) -> f64 {
    let r = model.r();
    let inter = view.interactions();
    let res = residuals(model, scorer, view);
    let loss_now: f64 = res.iter().map(|v| v * v).sum();

    let item_counts = model.member_counts();
    let mut item_bins: Vec<Vec<u32>> = vec![Vec::new(); model.m_q()];
    for j in view.active_items() {
        item_bins[model.assign[j as usize] as usize].push(j);
    }

    let nonneg = if scorer.nonnegative() { hp.nonneg } else { NonnegMode::Off };

    let EmbeddingModel { a, b_q, assign, user_side, .. } = model;

    // Item-side cluster gradients at the old iterate, one row per cluster.
    let mut g_bq = Mat::zeros(b_q.rows(), r);
    {
        let a = &*a;
        let b_q = &*b_q;
        let user_side = &*user_side;
        g_bq.par_rows_mut().enumerate().for_each(|(k, g)| {
            for &j in &item_bins[k] {
                for &pos in view.item_positions(j) {
                    let it = &inter[pos as usize];
                    scorer.grad_item(
                        user_row(a, user_side, it.user),
                        b_q.row(k),
                        res[pos as usize],
                        g,
                    );
                }
            }
        });
    }

    // User side: fused gradient + update per row (flat), or grouped per
    // user cluster (clustered). B_q is still at the old iterate here.
    match user_side {
        None => {
            let b_q = &*b_q;
            let update = |row: &mut [f64], positions: &[u32]| {
                let mut g = vec![0.0; r];
                for &pos in positions {
                    let it = &inter[pos as usize];
                    scorer.grad_user(
                        row,
                        b_q.row(assign[it.item as usize] as usize),
                        res[pos as usize],
                        &mut g,
                    );
                }
                for (v, gi) in row.iter_mut().zip(&g) {
                    *v -= hp.eta * (gi + hp.lambda_reg * *v);
                }
                project(nonneg, row);
            };
            match view {
                DataView::Full(_) => {
                    a.par_rows_mut().enumerate().for_each(|(u, row)| {
                        let positions = view.user_positions(u as u32);
                        if positions.is_empty() {
                            return;
                        }
                        update(row, positions);
                    });
                }
                // A batch touches few rows; visiting the whole table per
                // batch would make per-batch cost grow with catalog size.
                DataView::Batch(_) => {
                    for u in view.active_users() {
                        update(a.row_mut(u as usize), view.user_positions(u));
                    }
                }
            }
        }
        Some(side) => {
            let mut user_counts = vec![0u64; side.table.rows()];
            for &k in &side.assign {
                user_counts[k as usize] += 1;
            }
            let mut user_bins: Vec<Vec<u32>> = vec![Vec::new(); side.table.rows()];
            for u in view.active_users() {
                user_bins[side.assign[u as usize] as usize].push(u);
            }
            let mut g_au = Mat::zeros(side.table.rows(), r);
            {
                let table = &side.table;
                let uassign = &side.assign;
                let b_q = &*b_q;
                g_au.par_rows_mut().enumerate().for_each(|(k, g)| {
                    for &u in &user_bins[k] {
                        for &pos in view.user_positions(u) {
                            let it = &inter[pos as usize];
                            scorer.grad_user(
                                table.row(uassign[u as usize] as usize),
                                b_q.row(assign[it.item as usize] as usize),
                                res[pos as usize],
                                g,
                            );
                        }
                    }
                });
            }
            side.table.par_rows_mut().enumerate().for_each(|(k, row)| {
                if user_bins[k].is_empty() {
                    return;
                }
                let scale = if hp.averaging { 1.0 / user_counts[k] as f64 } else { 1.0 };
                for (v, gi) in row.iter_mut().zip(g_au.row(k)) {
                    *v -= hp.eta * (gi * scale + hp.lambda_reg * *v);
                }
                project(nonneg, row);
            });
        }
    }

    // Item side: apply the precomputed cluster gradients.
    b_q.par_rows_mut().enumerate().for_each(|(k, row)| {
        if item_bins[k].is_empty() {
            return;
        }
        let scale = if hp.averaging { 1.0 / item_counts[k] as f64 } else { 1.0 };
        for (v, gi) in row.iter_mut().zip(g_bq.row(k)) {
            *v -= hp.eta * (gi * scale + hp.lambda_reg * *v);
        }
        project(nonneg, row);
    });

    loss_now
}

/// Per-entity embedding tables produced by personalization.
pub struct PersonalTable {
    /// M x R item table.
    pub items: Mat,
    /// N x R user table, present only when the user side is clustered.
    pub users: Option<Mat>,
}

/// Materializes a personalized table as a standalone model in which every
/// item (and user, when the user side was clustered) forms its own cluster,
/// so it can be checkpointed and evaluated like any other model.
pub fn personalized_model(model: &EmbeddingModel, table: &PersonalTable) -> EmbeddingModel {
    let user_side = table.users.as_ref().map(|users| SideCluster {
        table: users.clone(),
        assign: (0..model.n_users() as u32).collect(),
        q: model.user_side.as_ref().map_or(0, |side| side.q),
    });
    EmbeddingModel {
        a: model.a.clone(),
        b_q: table.items.clone(),
        assign: (0..model.n_items() as u32).collect(),
        q: model.q,
        user_side,
    }
}

/// Unties shared cluster embeddings into per-item rows: each row starts at
/// its cluster embedding and descends on the item's own interactions plus a
/// pull-back toward the cluster row. The pull-back is applied proximally so
/// arbitrarily large `lambda_p` stays stable. Items with no interactions in
/// the view keep their cluster row exactly. With a clustered user side,
/// user rows are fine-tuned the same way afterwards, against the
/// personalized item rows.
pub fn personalize<S: InteractionScorer>(
    model: &EmbeddingModel,
    scorer: &S,
    view: DataView,
    hp: &Hyperparams,
    steps: usize,
) -> PersonalTable {
    let r = model.r();
    let nonneg = if scorer.nonnegative() { hp.nonneg } else { NonnegMode::Off };
    let inter = view.interactions();
    let pull = hp.eta * hp.lambda_p;

    let mut items = Mat::zeros(model.n_items(), r);
    items.par_rows_mut().enumerate().for_each(|(j, row)| {
        let anchor = model.item_embedding(j as u32);
        row.copy_from_slice(anchor);
        let positions = view.item_positions(j as u32);
        if positions.is_empty() {
            return;
        }
        let mut g = vec![0.0; r];
        for _ in 0..steps {
            g.iter_mut().for_each(|v| *v = 0.0);
            for &pos in positions {
                let it = &inter[pos as usize];
                let u_row = model.user_embedding(it.user);
                let res = it.rating - scorer.score(u_row, row);
                scorer.grad_item(u_row, row, res, &mut g);
            }
            for ((v, gi), anc) in row.iter_mut().zip(&g).zip(anchor) {
                *v = (*v - hp.eta * gi + pull * anc) / (1.0 + pull);
            }
            project(nonneg, row);
        }
    });

    let users = model.user_side.as_ref().map(|side| {
        let mut table = Mat::zeros(model.n_users(), r);
        let items_ref = &items;
        table.par_rows_mut().enumerate().for_each(|(u, row)| {
            let anchor = side.table.row(side.assign[u] as usize);
            row.copy_from_slice(anchor);
            let positions = view.user_positions(u as u32);
            if positions.is_empty() {
                return;
            }
            let mut g = vec![0.0; r];
            for _ in 0..steps {
                g.iter_mut().for_each(|v| *v = 0.0);
                for &pos in positions {
                    let it = &inter[pos as usize];
                    let i_row = items_ref.row(it.item as usize);
                    let res = it.rating - scorer.score(row, i_row);
                    scorer.grad_user(row, i_row, res, &mut g);
                }
                for ((v, gi), anc) in row.iter_mut().zip(&g).zip(anchor) {
                    *v = (*v - hp.eta * gi + pull * anc) / (1.0 + pull);
                }
                project(nonneg, row);
            }
        });
        table
    });

    PersonalTable { items, users }
}

const MAGIC: &[u8; 4] = b"CEL1";

fn push_u64(buf: &mut Vec<u8>, v: u64) {
    buf.extend_from_slice(&v.to_le_bytes());
}

fn push_u32(buf: &mut Vec<u8>, v: u32) {
    buf.extend_from_slice(&v.to_le_bytes());
}

fn push_f32_mat(buf: &mut Vec<u8>, m: &Mat) {
    for &v in m.data() {
        buf.extend_from_slice(&(v as f32).to_le_bytes());
    }
}

struct Cursor<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.pos + n > self.bytes.len() {
            return Err(CelError::Checkpoint("file is truncated".into()));
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }

    fn f32_mat(&mut self, rows: usize, cols: usize) -> Result<Mat> {
        let n = rows
            .checked_mul(cols)
            .ok_or_else(|| CelError::Checkpoint("dimension overflow".into()))?;
        let raw = self.take(n * 4)?;
        let mut data = Vec::with_capacity(n);
        for chunk in raw.chunks_exact(4) {
            let v = f32::from_le_bytes(chunk.try_into().unwrap());
            if !v.is_finite() {
                return Err(CelError::Checkpoint("non-finite embedding entry".into()));
            }
            data.push(v as f64);
        }
        Ok(Mat::from_vec(rows, cols, data))
    }

    fn assign_vec(&mut self, len: usize, m_q: usize) -> Result<Vec<u32>> {
        let raw = self.take(len * 4)?;
        let mut assign = Vec::with_capacity(len);
        let mut seen = vec![false; m_q];
        for chunk in raw.chunks_exact(4) {
            let k = u32::from_le_bytes(chunk.try_into().unwrap());
            if (k as usize) >= m_q {
                return Err(CelError::Checkpoint(format!(
                    "assignment {k} out of range ({m_q} clusters)"
                )));
            }
            seen[k as usize] = true;
            assign.push(k);
        }
        if let Some(empty) = seen.iter().position(|&s| !s) {
            return Err(CelError::Checkpoint(format!("cluster {empty} has no members")));
        }
        Ok(assign)
    }
}

fn checked_dim(v: u64, what: &str) -> Result<usize> {
    const CAP: u64 = 1 << 32;
    if v > CAP {
        return Err(CelError::Checkpoint(format!("{what} {v} exceeds sanity bound")));
    }
    Ok(v as usize)
}

/// Serializes the model to its binary checkpoint form.
pub fn checkpoint_bytes(model: &EmbeddingModel) -> Vec<u8> {
    let mut buf = Vec::new();
    buf.extend_from_slice(MAGIC);
    push_u64(&mut buf, model.n_users() as u64);
    push_u64(&mut buf, model.n_items() as u64);
    push_u64(&mut buf, model.m_q() as u64);
    push_u64(&mut buf, model.r() as u64);
    push_u64(&mut buf, model.q);
    for &k in &model.assign {
        push_u32(&mut buf, k);
    }
    push_f32_mat(&mut buf, &model.a);
    push_f32_mat(&mut buf, &model.b_q);
    match &model.user_side {
        None => buf.push(0),
        Some(side) => {
            buf.push(1);
            push_u64(&mut buf, side.table.rows() as u64);
            push_u64(&mut buf, side.q);
            for &k in &side.assign {
                push_u32(&mut buf, k);
            }
            push_f32_mat(&mut buf, &side.table);
        }
    }
    buf
}

/// Writes the checkpoint atomically.
pub fn save_checkpoint(model: &EmbeddingModel, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    crate::fsutil::atomic_write(path, &checkpoint_bytes(model))
        .map_err(|e| CelError::Io { path: path.display().to_string(), source: e })
}

/// Parses a checkpoint from bytes.
pub fn checkpoint_from_bytes(bytes: &[u8]) -> Result<EmbeddingModel> {
    let mut cur = Cursor { bytes, pos: 0 };
    if cur.take(4)? != MAGIC {
        return Err(CelError::Checkpoint("bad magic bytes".into()));
    }
    let n = checked_dim(cur.u64()?, "user count")?;
    let m = checked_dim(cur.u64()?, "item count")?;
    let m_q = checked_dim(cur.u64()?, "cluster count")?;
    let r = checked_dim(cur.u64()?, "embedding dim")?;
    let q = cur.u64()?;
    if m_q == 0 || r == 0 {
        return Err(CelError::Checkpoint("zero cluster count or dimension".into()));
    }
    let assign = cur.assign_vec(m, m_q)?;
    let a = cur.f32_mat(n, r)?;
    let b_q = cur.f32_mat(m_q, r)?;
    let user_side = match cur.u8()? {
        0 => None,
        1 => {
            let u_mq = checked_dim(cur.u64()?, "user cluster count")?;
            if u_mq == 0 {
                return Err(CelError::Checkpoint("zero user cluster count".into()));
            }
            let u_q = cur.u64()?;
            let u_assign = cur.assign_vec(n, u_mq)?;
            let table = cur.f32_mat(u_mq, r)?;
            Some(SideCluster { table, assign: u_assign, q: u_q })
        }
        other => return Err(CelError::Checkpoint(format!("bad user-side marker {other}"))),
    };
    if cur.pos != bytes.len() {
        return Err(CelError::Checkpoint("trailing bytes after model data".into()));
    }
    Ok(EmbeddingModel { a, b_q, assign, q, user_side })
}

/// Loads a checkpoint written by [`save_checkpoint`].
pub fn load_checkpoint(path: impl AsRef<Path>) -> Result<EmbeddingModel> {
    let path = path.as_ref();
    let bytes = std::fs::read(path)
        .map_err(|e| CelError::Io { path: path.display().to_string(), source: e })?;
    checkpoint_from_bytes(&bytes)
}
