//! Training drivers: the offline loop (descend, reassign, split), the
//! online streaming loop with replay buffers, fixed-assignment retraining,
//! and synthetic dataset generators.

use std::collections::BTreeSet;
use std::sync::Arc;
use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::cluster::{
    choose_splittable, criterion_values, gpca_split, isolate_item, random_projection_split,
    random_split, reassign, sample_cluster_pool, strategy1_candidates, strategy2_eligible,
    strategy2_split, CandidatePool, ClusterState, SplitCriterion, SplitMethod,
};
use crate::dataset::{DataView, IdMaps, Interaction, InteractionStore, ReplayBuffer};
use crate::error::{CelError, Result};
use crate::matrix::Mat;
use crate::model::{
    grad_step, init_entity_rows, init_model, init_model_with_assign, loss, EmbeddingModel,
    Hyperparams, InteractionScorer, UNASSIGNED,
};

/// Cluster budget for a compression target: the smallest cluster count
/// whose ratio to the catalog size reaches `ratio`.
pub fn target_clusters(n_items: usize, ratio: f64) -> usize {
    ((ratio * n_items as f64).ceil() as usize).clamp(1, n_items.max(1))
}

/// Derives a per-fold seed from the run seed so folds train independently
/// while the whole cross-validation stays reproducible.
pub fn fold_seed(seed: u64, fold: usize) -> u64 {
    seed ^ (fold as u64).wrapping_mul(0x9E37_79B9_7F4A_7C15)
}

/// What the offline trainer does besides plain descent.
#[derive(Debug, Clone)]
pub struct TrainSchedule {
    /// Total embedding steps.
    pub steps: usize,
    /// Stop splitting at this many clusters.
    pub m_star: usize,
    /// Statistic that picks the cluster to split.
    pub criterion: SplitCriterion,
    /// How the chosen cluster is split.
    pub split_method: SplitMethod,
    /// Embed-phase log cadence; 0 logs only reassignments and splits.
    pub log_every: usize,
    /// Consecutive validation checks (one per reassignment) without
    /// improvement before training stops early; 0 disables the check.
    pub patience: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Phase {
    Embed,
    Reassign,
    Split,
}

impl std::fmt::Display for Phase {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            Phase::Embed => write!(f, "embed"),
            Phase::Reassign => write!(f, "reassign"),
            Phase::Split => write!(f, "split"),
        }
    }
}

/// One logged training event. `loss` is the training loss known at that
/// point: pre-step loss for embed events, exact post-move loss for
/// reassignments, and the carried-over value for splits (which never
/// change the loss).
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct LogEvent {
    pub step: usize,
    pub phase: Phase,
    pub loss: f64,
    pub m_q: usize,
    pub wall_ms: u64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RunReport {
    pub events: Vec<LogEvent>,
    /// Validation MSE at each early-stop check, as (step, mse).
    pub val_checkpoints: Vec<(usize, f64)>,
    pub final_train_loss: f64,
    pub final_m_q: usize,
    /// Steps actually executed; less than the budget after an early stop.
    pub steps: usize,
    pub elapsed_ms: u64,
}

/// Offline training: joint descent on the embeddings with periodic
/// loss-minimizing reassignment (every `t1` steps) and one split every
/// `t2` steps until the cluster budget is reached.
///
/// With `schedule.patience > 0` and a `validation` store, validation MSE is
/// checked at every reassignment; after `patience` consecutive checks
/// without improvement training stops early.
pub fn train_cel<S: InteractionScorer>(
    store: &InteractionStore,
    scorer: &S,
    hp: &Hyperparams,
    r: usize,
    schedule: &TrainSchedule,
    validation: Option<&InteractionStore>,
) -> Result<(EmbeddingModel, RunReport)> {
    if store.interactions().is_empty() {
        return Err(CelError::Config("training set has no interactions".into()));
    }
    if r == 0 {
        return Err(CelError::Config("embedding dimension must be >= 1".into()));
    }
    let started = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(hp.seed);
    let mut model = init_model(store.n_users(), store.n_items(), r, hp.m0, &mut rng)?;
    let weights = store.item_degrees();
    let mut state = ClusterState::new(&model.assign, hp.m0, &weights)?;
    let view = DataView::Full(store);
    let all_items: Vec<u32> = (0..store.n_items() as u32).collect();

    let watch = validation.filter(|v| schedule.patience > 0 && !v.interactions().is_empty());
    let mut val_checkpoints = Vec::new();
    let mut best_val = f64::INFINITY;
    let mut stale_checks = 0usize;

    let mut events = Vec::new();
    let mut executed = schedule.steps;
    let mut last_loss;
    for step in 1..=schedule.steps {
        last_loss = grad_step(&mut model, scorer, view, hp);
        if schedule.log_every > 0 && step % schedule.log_every == 0 {
            events.push(LogEvent {
                step,
                phase: Phase::Embed,
                loss: last_loss,
                m_q: model.m_q(),
                wall_ms: started.elapsed().as_millis() as u64,
            });
        }
        if hp.t1 > 0 && step % hp.t1 == 0 {
            let (_, post) = reassign(
                &mut model,
                &mut state,
                scorer,
                view,
                &all_items,
                CandidatePool::AllClusters,
                &weights,
            );
            last_loss = post;
            events.push(LogEvent {
                step,
                phase: Phase::Reassign,
                loss: post,
                m_q: model.m_q(),
                wall_ms: started.elapsed().as_millis() as u64,
            });
            if let Some(val) = watch {
                let val_mse =
                    crate::eval::mse(|u, j| model.predict(scorer, u, j), val.interactions())?;
                val_checkpoints.push((step, val_mse));
                if val_mse < best_val {
                    best_val = val_mse;
                    stale_checks = 0;
                } else {
                    stale_checks += 1;
                    if stale_checks >= schedule.patience {
                        executed = step;
                        break;
                    }
                }
            }
        }
        if hp.t2 > 0 && step % hp.t2 == 0 && model.m_q() < schedule.m_star {
            let values = criterion_values(schedule.criterion, &model, &state, scorer, view);
            if let Some(k) = choose_splittable(&values, &state) {
                match schedule.split_method {
                    SplitMethod::Gpca => {
                        gpca_split(&mut model, &mut state, scorer, view, k, hp.delta, &weights)?;
                    }
                    SplitMethod::RandomProjection => {
                        random_projection_split(
                            &mut model, &mut state, scorer, view, k, hp.delta, &weights, &mut rng,
                        )?;
                    }
                    SplitMethod::Random => {
                        random_split(&mut model, &mut state, k, &weights, &mut rng)?;
                    }
                }
                events.push(LogEvent {
                    step,
                    phase: Phase::Split,
                    loss: last_loss,
                    m_q: model.m_q(),
                    wall_ms: started.elapsed().as_millis() as u64,
                });
            }
        }
    }
    let final_train_loss = loss(&model, scorer, view);
    let report = RunReport {
        events,
        val_checkpoints,
        final_train_loss,
        final_m_q: model.m_q(),
        steps: executed,
        elapsed_ms: started.elapsed().as_millis() as u64,
    };
    Ok((model, report))
}

/// Retrains embeddings from scratch under a frozen item assignment: same
/// initialization scheme, plain descent, no reassignment, no splits.
pub fn retrain_fixed<S: InteractionScorer>(
    store: &InteractionStore,
    scorer: &S,
    hp: &Hyperparams,
    r: usize,
    assign: Vec<u32>,
    m_q: usize,
    steps: usize,
    log_every: usize,
) -> Result<(EmbeddingModel, RunReport)> {
    if store.interactions().is_empty() {
        return Err(CelError::Config("training set has no interactions".into()));
    }
    let started = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(hp.seed);
    let mut model =
        init_model_with_assign(store.n_users(), store.n_items(), r, assign, m_q, &mut rng)?;
    let view = DataView::Full(store);
    let mut events = Vec::new();
    for step in 1..=steps {
        let l = grad_step(&mut model, scorer, view, hp);
        if log_every > 0 && step % log_every == 0 {
            events.push(LogEvent {
                step,
                phase: Phase::Embed,
                loss: l,
                m_q,
                wall_ms: started.elapsed().as_millis() as u64,
            });
        }
    }
    let final_train_loss = loss(&model, scorer, view);
    let report = RunReport {
        events,
        val_checkpoints: Vec::new(),
        final_train_loss,
        final_m_q: m_q,
        steps,
        elapsed_ms: started.elapsed().as_millis() as u64,
    };
    Ok((model, report))
}

fn lightest_cluster(state: &ClusterState) -> usize {
    let mut best = 0;
    for k in 1..state.m_q() {
        if state.weight(k) < state.weight(best) {
            best = k;
        }
    }
    best
}

/// Online training over the store's interactions in timestamp order, in
/// batches of `hp.b`. Entities are registered on first sight: users get a
/// fresh embedding row, the first item founds the first cluster, and later
/// items join the cluster with the least interaction weight. Each batch
/// takes one descent step over the replay-buffer union of its entities;
/// batch items are then reassigned against sampled candidate clusters, and
/// the two online split strategies run on what the batch touched.
pub fn train_cel_lite<S: InteractionScorer>(
    store: &InteractionStore,
    scorer: &S,
    hp: &Hyperparams,
    r: usize,
    m_star: Option<usize>,
    log_every: usize,
) -> Result<(EmbeddingModel, RunReport)> {
    if store.interactions().is_empty() {
        return Err(CelError::Config("training set has no interactions".into()));
    }
    if r == 0 {
        return Err(CelError::Config("embedding dimension must be >= 1".into()));
    }
    if hp.b == 0 {
        return Err(CelError::Config("batch size must be >= 1".into()));
    }
    let started = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(hp.seed);
    let n_users = store.n_users();
    let n_items = store.n_items();
    let mut model = EmbeddingModel {
        a: Mat::zeros(n_users, r),
        b_q: Mat::zeros(0, r),
        assign: vec![UNASSIGNED; n_items],
        q: 0,
        user_side: None,
    };
    let mut state = ClusterState::empty();
    let mut buffer = ReplayBuffer::new(hp.n);
    let mut seen_user = vec![false; n_users];
    let mut cum_counts = vec![0u64; n_items];
    let mut events = Vec::new();

    let under_cap = |m_q: usize| m_star.map_or(true, |cap| m_q < cap);

    for (bi, batch) in store.replay_batches(hp.b).iter().enumerate() {
        let bi = bi + 1;
        for it in batch {
            let u = it.user as usize;
            let j = it.item as usize;
            if !seen_user[u] {
                seen_user[u] = true;
                let row = init_entity_rows(1, r, &mut rng);
                model.a.row_mut(u).copy_from_slice(row.row(0));
            }
            if model.assign[j] == UNASSIGNED {
                if state.m_q() == 0 {
                    state.add_cluster();
                    let row = init_entity_rows(1, r, &mut rng);
                    model.b_q.push_row(row.row(0));
                }
                let k = lightest_cluster(&state);
                model.assign[j] = k as u32;
                state.add_item(it.item, k, 0);
            }
            cum_counts[j] += 1;
            state.add_weight(model.assign[j] as usize, 1);
        }
        buffer.push(batch);
        let bview = buffer.batch_union(batch);
        let view = DataView::Batch(&bview);

        let mut last_loss = grad_step(&mut model, scorer, view, hp);
        if log_every > 0 && bi % log_every == 0 {
            events.push(LogEvent {
                step: bi,
                phase: Phase::Embed,
                loss: last_loss,
                m_q: model.m_q(),
                wall_ms: started.elapsed().as_millis() as u64,
            });
        }

        let mut batch_items: Vec<u32> = batch.iter().map(|it| it.item).collect();
        batch_items.sort_unstable();
        batch_items.dedup();

        if hp.t1 > 0 && bi % hp.t1 == 0 {
            let pools: Vec<Vec<u32>> = batch_items
                .iter()
                .map(|&j| {
                    sample_cluster_pool(model.m_q(), model.assign[j as usize], hp.m, &mut rng)
                })
                .collect();
            let (_, post) = reassign(
                &mut model,
                &mut state,
                scorer,
                view,
                &batch_items,
                CandidatePool::PerItem(&pools),
                &cum_counts,
            );
            last_loss = post;
            events.push(LogEvent {
                step: bi,
                phase: Phase::Reassign,
                loss: post,
                m_q: model.m_q(),
                wall_ms: started.elapsed().as_millis() as u64,
            });
        }

        let m_q_before = model.m_q();

        // Strategy 1: a batch item hoarding more than d interactions while
        // sharing its cluster moves into a singleton of its own.
        for j in strategy1_candidates(&model.assign, &state, &cum_counts, hp.d, &batch_items) {
            if !under_cap(model.m_q()) {
                break;
            }
            let k = model.assign[j as usize] as usize;
            if state.member_count(k) > 1 {
                isolate_item(&mut model, &mut state, j, &cum_counts)?;
            }
        }

        // Strategy 2: clusters the batch touched split once they hold more
        // than 2d interactions, and the halves are re-checked.
        let mut work: BTreeSet<usize> =
            batch_items.iter().map(|&j| model.assign[j as usize] as usize).collect();
        while let Some(&k) = work.iter().next() {
            work.remove(&k);
            if !under_cap(model.m_q()) {
                break;
            }
            if !strategy2_eligible(&state, k, hp.d) || state.member_count(k) < 2 {
                continue;
            }
            let out = strategy2_split(&mut model, &mut state, scorer, view, k, hp.d, &cum_counts)?;
            work.insert(k);
            work.insert(out.new_cluster);
        }
        if model.m_q() > m_q_before {
            // Splits and isolations are loss-neutral, so the last known
            // loss still holds.
            events.push(LogEvent {
                step: bi,
                phase: Phase::Split,
                loss: last_loss,
                m_q: model.m_q(),
                wall_ms: started.elapsed().as_millis() as u64,
            });
        }
    }

    // Items the stream never mentioned (possible when a train split drops
    // all of an item's interactions) still need a valid assignment.
    for j in 0..n_items {
        if model.assign[j] == UNASSIGNED {
            if state.m_q() == 0 {
                state.add_cluster();
                let row = init_entity_rows(1, r, &mut rng);
                model.b_q.push_row(row.row(0));
            }
            let k = lightest_cluster(&state);
            model.assign[j] = k as u32;
            state.add_item(j as u32, k, 0);
        }
    }

    let batches = store.replay_batches(hp.b).len();
    let final_train_loss = loss(&model, scorer, DataView::Full(store));
    let report = RunReport {
        events,
        val_checkpoints: Vec::new(),
        final_train_loss,
        final_m_q: model.m_q(),
        steps: batches,
        elapsed_ms: started.elapsed().as_millis() as u64,
    };
    Ok((model, report))
}

/// A generated dataset together with the ground truth that produced it.
pub struct Synthetic {
    pub store: InteractionStore,
    pub true_assign: Vec<u32>,
    pub users: Mat,
    pub centers: Mat,
}

/// Ratings drawn from a planted clustering: items share one of `m_q_true`
/// well-separated cluster embeddings, each (user, item) pair is observed
/// with probability `observed_fraction`, and ratings are the exact inner
/// products plus `noise`-scaled Gaussian noise.
pub fn generate_synthetic(
    n_users: usize,
    n_items: usize,
    m_q_true: usize,
    r: usize,
    noise: f64,
    observed_fraction: f64,
    rng: &mut ChaCha8Rng,
) -> Result<Synthetic> {
    if m_q_true == 0 || m_q_true > n_items {
        return Err(CelError::Config(format!(
            "true cluster count {m_q_true} must be in 1..={n_items}"
        )));
    }
    if !(0.0..=1.0).contains(&observed_fraction) || observed_fraction == 0.0 {
        return Err(CelError::Config("observed fraction must be in (0, 1]".into()));
    }
    let mut centers = Mat::zeros(0, r);
    for _ in 0..m_q_true {
        let mut attempts = 0;
        loop {
            let row: Vec<f64> = (0..r).map(|_| rng.gen::<f64>()).collect();
            let separated = (0..centers.rows()).all(|i| {
                let d2: f64 =
                    centers.row(i).iter().zip(&row).map(|(a, b)| (a - b) * (a - b)).sum();
                d2.sqrt() >= 0.35
            });
            attempts += 1;
            if separated || attempts >= 1000 {
                centers.push_row(&row);
                break;
            }
        }
    }
    let mut users = Mat::zeros(n_users, r);
    for u in 0..n_users {
        for c in 0..r {
            users.row_mut(u)[c] = rng.gen::<f64>();
        }
    }
    let mut true_assign: Vec<u32> = (0..n_items)
        .map(|j| if j < m_q_true { j as u32 } else { rng.gen_range(0..m_q_true as u32) })
        .collect();
    // Keep every planted cluster nonempty even when the tail resample
    // misses one (it cannot, given the first block, but stay explicit).
    for k in 0..m_q_true {
        if !true_assign.contains(&(k as u32)) {
            true_assign[k] = k as u32;
        }
    }

    let mut maps = IdMaps::default();
    for u in 0..n_users {
        maps.users.intern(&format!("u{u}"));
    }
    for j in 0..n_items {
        maps.items.intern(&format!("i{j}"));
    }

    let mut interactions = Vec::new();
    for u in 0..n_users {
        for j in 0..n_items {
            if rng.gen::<f64>() >= observed_fraction {
                continue;
            }
            let mean = crate::matrix::dot(users.row(u), centers.row(true_assign[j] as usize));
            let rating = mean + noise * rng.sample::<f64, _>(StandardNormal);
            interactions.push(Interaction {
                user: u as u32,
                item: j as u32,
                rating,
                timestamp: Some(interactions.len() as i64),
            });
        }
    }
    let store = InteractionStore::new(interactions, n_users, n_items, Arc::new(maps));
    Ok(Synthetic { store, true_assign, users, centers })
}

/// A growing-catalog interaction stream for cost-scaling measurements: the
/// user and item pools each gain one entity every fixed number of arrivals,
/// and each arrival pairs uniform picks from the current pools.
pub fn generate_synthetic_stream(
    d_total: usize,
    users_per: usize,
    items_per: usize,
    rng: &mut ChaCha8Rng,
) -> InteractionStore {
    let mut interactions = Vec::with_capacity(d_total);
    let mut n_users = 1usize;
    let mut n_items = 1usize;
    for t in 0..d_total {
        if t > 0 && t % users_per.max(1) == 0 {
            n_users += 1;
        }
        if t > 0 && t % items_per.max(1) == 0 {
            n_items += 1;
        }
        interactions.push(Interaction {
            user: rng.gen_range(0..n_users) as u32,
            item: rng.gen_range(0..n_items) as u32,
            rating: rng.gen_range(1..6) as f64,
            timestamp: Some(t as i64),
        });
    }
    let mut maps = IdMaps::default();
    for u in 0..n_users {
        maps.users.intern(&format!("u{u}"));
    }
    for j in 0..n_items {
        maps.items.intern(&format!("i{j}"));
    }
    InteractionStore::new(interactions, n_users, n_items, Arc::new(maps))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn schedule(steps: usize, m_star: usize) -> TrainSchedule {
        TrainSchedule {
            steps,
            m_star,
            criterion: SplitCriterion::InteractionCount,
            split_method: SplitMethod::Gpca,
            log_every: 10,
            patience: 0,
        }
    }

    #[test]
    fn target_clusters_rounds_up_and_clamps() {
        assert_eq!(target_clusters(1682, 0.01), 17);
        assert_eq!(target_clusters(1682, 0.05), 85);
        assert_eq!(target_clusters(1682, 0.005), 9);
        assert_eq!(target_clusters(10, 0.0), 1);
        assert_eq!(target_clusters(10, 5.0), 10);
    }

    fn small_synthetic(seed: u64) -> Synthetic {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        generate_synthetic(20, 30, 3, 3, 0.0, 0.5, &mut rng).unwrap()
    }

    #[test]
    fn offline_training_reaches_budget_and_descends() {
        let syn = small_synthetic(1);
        let hp = Hyperparams { eta: 0.01, t1: 10, t2: 5, seed: 7, ..Hyperparams::default() };
        let (model, report) =
            train_cel(&syn.store, &crate::model::NmfScorer, &hp, 4, &schedule(200, 5), None).unwrap();
        assert_eq!(report.final_m_q, 5);
        assert_eq!(model.m_q(), 5);
        let first = report.events.iter().find(|e| e.phase == Phase::Embed).unwrap();
        assert!(report.final_train_loss < first.loss);
        let counts = model.member_counts();
        assert!(counts.iter().all(|&c| c >= 1));
        let splits = report.events.iter().filter(|e| e.phase == Phase::Split).count();
        assert_eq!(splits, 4);
    }

    #[test]
    fn offline_training_is_seed_reproducible() {
        let syn = small_synthetic(2);
        let hp = Hyperparams { eta: 0.01, t1: 10, t2: 10, seed: 3, ..Hyperparams::default() };
        let run = || {
            train_cel(&syn.store, &crate::model::NmfScorer, &hp, 3, &schedule(80, 3), None)
                .unwrap()
                .0
        };
        let (a, b) = (run(), run());
        assert_eq!(a.assign, b.assign);
        assert_eq!(a.b_q.data(), b.b_q.data());
        let hp2 = Hyperparams { seed: 4, ..hp.clone() };
        let (c, _) =
            train_cel(&syn.store, &crate::model::NmfScorer, &hp2, 3, &schedule(80, 3), None).unwrap();
        assert_ne!(a.b_q.data(), c.b_q.data());
    }

    #[test]
    fn offline_training_rejects_empty_store() {
        let store = InteractionStore::new(Vec::new(), 3, 3, Arc::new(IdMaps::default()));
        let hp = Hyperparams::default();
        assert!(train_cel(&store, &crate::model::NmfScorer, &hp, 2, &schedule(5, 2), None).is_err());
    }

    #[test]
    fn early_stop_halts_on_validation_plateau() {
        let syn = small_synthetic(5);
        // Zero-target copies of the training pairs: fitting the positive
        // training ratings drives these residuals up, so validation MSE
        // rises from the first check and the plateau counter must trip.
        let val_interactions: Vec<Interaction> = syn
            .store
            .interactions()
            .iter()
            .map(|it| Interaction { rating: 0.0, ..it.clone() })
            .collect();
        let val = InteractionStore::new(
            val_interactions,
            syn.store.n_users(),
            syn.store.n_items(),
            Arc::new(IdMaps::default()),
        );
        let hp = Hyperparams { eta: 0.01, t1: 5, t2: 50, seed: 8, ..Hyperparams::default() };
        let sched = TrainSchedule { patience: 2, ..schedule(400, 2) };
        let (_, report) =
            train_cel(&syn.store, &crate::model::NmfScorer, &hp, 3, &sched, Some(&val)).unwrap();
        assert!(report.steps < sched.steps);
        assert_eq!(report.val_checkpoints.len(), 3);
        assert_eq!(report.val_checkpoints.last().unwrap().0, report.steps);
        assert!(report.val_checkpoints.windows(2).all(|w| w[1].1 >= w[0].1));

        // Without a validation set the same schedule runs out the budget.
        let (_, full) =
            train_cel(&syn.store, &crate::model::NmfScorer, &hp, 3, &sched, None).unwrap();
        assert_eq!(full.steps, sched.steps);
        assert!(full.val_checkpoints.is_empty());
    }

    #[test]
    fn retrain_keeps_the_given_assignment() {
        let syn = small_synthetic(3);
        let hp = Hyperparams { eta: 0.01, seed: 9, ..Hyperparams::default() };
        let assign: Vec<u32> = (0..30).map(|j| (j % 4) as u32).collect();
        let (model, report) = retrain_fixed(
            &syn.store,
            &crate::model::NmfScorer,
            &hp,
            3,
            assign.clone(),
            4,
            100,
            0,
        )
        .unwrap();
        assert_eq!(model.assign, assign);
        assert_eq!(report.final_m_q, 4);
        assert!(report.final_train_loss.is_finite());

        let bad = vec![0u32; 29];
        assert!(retrain_fixed(&syn.store, &crate::model::NmfScorer, &hp, 3, bad, 4, 10, 0).is_err());
    }

    #[test]
    fn lite_registers_everything_and_stays_consistent() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let store = generate_synthetic_stream(2000, 50, 25, &mut rng);
        let hp = Hyperparams {
            b: 100,
            n: 10,
            m: 5,
            d: 60,
            eta: 0.01,
            t1: 1,
            seed: 11,
            ..Hyperparams::default()
        };
        let (model, report) =
            train_cel_lite(&store, &crate::model::NmfScorer, &hp, 4, None, 0).unwrap();
        assert!(model.assign.iter().all(|&k| (k as usize) < model.m_q()));
        let counts = model.member_counts();
        assert!(counts.iter().all(|&c| c >= 1));
        assert!(report.final_m_q >= 1);
        assert!(report.final_train_loss.is_finite());
        assert_eq!(report.steps, 20);

        let (again, _) = train_cel_lite(&store, &crate::model::NmfScorer, &hp, 4, None, 0).unwrap();
        assert_eq!(model.assign, again.assign);
        assert_eq!(model.b_q.data(), again.b_q.data());
    }

    #[test]
    fn lite_isolates_interaction_hoarders() {
        // Item 0 receives far more than d interactions while other items
        // keep the cluster shared, so strategy 1 must isolate it.
        let mut interactions = Vec::new();
        for t in 0..400u32 {
            let item = if t % 2 == 0 { 0 } else { 1 + (t % 5) };
            interactions.push(Interaction {
                user: t % 20,
                item,
                rating: (1 + t % 5) as f64,
                timestamp: Some(t as i64),
            });
        }
        let store = InteractionStore::new(interactions, 20, 6, Arc::new(IdMaps::default()));
        let hp = Hyperparams { b: 50, n: 10, m: 5, d: 40, t1: 1, eta: 0.05, seed: 5, ..Hyperparams::default() };
        let (model, _) = train_cel_lite(&store, &crate::model::NmfScorer, &hp, 3, None, 0).unwrap();
        let k0 = model.assign[0] as usize;
        assert_eq!(model.member_counts()[k0], 1, "hot item should sit alone");
    }

    #[test]
    fn lite_respects_cluster_cap() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let store = generate_synthetic_stream(3000, 40, 20, &mut rng);
        let hp = Hyperparams { b: 100, n: 10, m: 5, d: 10, t1: 1, eta: 0.01, seed: 12, ..Hyperparams::default() };
        let (model, _) =
            train_cel_lite(&store, &crate::model::NmfScorer, &hp, 3, Some(4), 0).unwrap();
        assert!(model.m_q() <= 4);
    }

    #[test]
    fn synthetic_ratings_are_exact_inner_products() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let syn = generate_synthetic(10, 15, 4, 3, 0.0, 0.7, &mut rng).unwrap();
        assert_eq!(syn.store.n_users(), 10);
        assert_eq!(syn.store.n_items(), 15);
        assert_eq!(syn.true_assign.len(), 15);
        for k in 0..4u32 {
            assert!(syn.true_assign.contains(&k));
        }
        for it in syn.store.interactions() {
            let mean = crate::matrix::dot(
                syn.users.row(it.user as usize),
                syn.centers.row(syn.true_assign[it.item as usize] as usize),
            );
            assert_eq!(it.rating, mean);
        }
        for i in 0..4 {
            for j in (i + 1)..4 {
                let d2: f64 = syn
                    .centers
                    .row(i)
                    .iter()
                    .zip(syn.centers.row(j))
                    .map(|(a, b)| (a - b) * (a - b))
                    .sum();
                assert!(d2.sqrt() >= 0.35);
            }
        }
    }

    #[test]
    fn synthetic_stream_grows_both_pools() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let store = generate_synthetic_stream(1000, 100, 50, &mut rng);
        assert_eq!(store.n_users(), 10);
        assert_eq!(store.n_items(), 20);
        assert_eq!(store.interactions().len(), 1000);
        let ts: Vec<i64> = store.interactions().iter().map(|i| i.timestamp.unwrap()).collect();
        assert!(ts.windows(2).all(|w| w[0] <= w[1]));
    }
}
