//! Randomized-instance builders and property checks shared by the
//! invariant suite and the acceptance gate.

use std::sync::Arc;

use rand::prelude::*;
use rand_chacha::ChaCha8Rng;

use cel_core::cluster::{
    gpca_split, isolate_item, power_iteration, random_projection_split, random_split, reassign,
    strategy2_split, CandidatePool, ClusterState,
};
use cel_core::dataset::{DataView, IdMaps, Interaction, InteractionStore};
use cel_core::model::{
    grad_step, init_model_with_assign, loss, loss_gradients, loss_regularized, EmbeddingModel,
    Hyperparams, NmfScorer,
};
use cel_core::Mat;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn random_store(
    n_users: usize,
    n_items: usize,
    interactions: usize,
    rng: &mut ChaCha8Rng,
) -> InteractionStore {
    let inter: Vec<Interaction> = (0..interactions)
        .map(|_| Interaction {
            user: rng.gen_range(0..n_users) as u32,
            item: rng.gen_range(0..n_items) as u32,
            rating: rng.gen_range(1..=5) as f64,
            timestamp: None,
        })
        .collect();
    InteractionStore::new(inter, n_users, n_items, Arc::new(IdMaps::default()))
}

/// A model over a random partition in which every cluster is nonempty.
pub fn random_model(
    n_users: usize,
    n_items: usize,
    m_q: usize,
    r: usize,
    rng: &mut ChaCha8Rng,
) -> EmbeddingModel {
    let mut assign: Vec<u32> = (0..n_items)
        .map(|j| if j < m_q { j as u32 } else { rng.gen_range(0..m_q) as u32 })
        .collect();
    assign.shuffle(rng);
    init_model_with_assign(n_users, n_items, r, assign, m_q, rng).expect("valid partition")
}

fn rel_close(a: f64, b: f64, tol: f64) -> bool {
    let denom = a.abs().max(b.abs());
    if denom > 1e-7 {
        (a - b).abs() / denom <= tol
    } else {
        (a - b).abs() <= tol
    }
}

/// Analytic loss gradients vs central finite differences of the regularized
/// loss, on `instances` random small instances, within `tol` relative.
pub fn check_gradient_fd(instances: usize, tol: f64) -> Result<(), String> {
    let h = 1e-5;
    for i in 0..instances {
        let mut r = rng(0xC0FFEE + i as u64);
        let n_users = r.gen_range(2..=6);
        let n_items = r.gen_range(2..=8);
        let m_q = r.gen_range(1..=n_items.min(4));
        let dim = r.gen_range(2..=4);
        let store = random_store(n_users, n_items, r.gen_range(5..=30), &mut r);
        let model = random_model(n_users, n_items, m_q, dim, &mut r);
        let lambda = if i % 2 == 0 { 0.0 } else { 0.7 };
        let view = DataView::Full(&store);

        let grads = loss_gradients(&model, &NmfScorer, view);
        let eval = |m: &EmbeddingModel| loss_regularized(m, &NmfScorer, view, lambda);
        for row in 0..n_users {
            for c in 0..dim {
                let mut hi = model.clone();
                hi.a.row_mut(row)[c] += h;
                let mut lo = model.clone();
                lo.a.row_mut(row)[c] -= h;
                let fd = (eval(&hi) - eval(&lo)) / (2.0 * h);
                let analytic = grads.user.row(row)[c] + lambda * model.a.row(row)[c];
                if !rel_close(analytic, fd, tol) {
                    return Err(format!(
                        "instance {i}: user grad ({row},{c}) analytic {analytic} vs fd {fd}"
                    ));
                }
            }
        }
        for row in 0..m_q {
            for c in 0..dim {
                let mut hi = model.clone();
                hi.b_q.row_mut(row)[c] += h;
                let mut lo = model.clone();
                lo.b_q.row_mut(row)[c] -= h;
                let fd = (eval(&hi) - eval(&lo)) / (2.0 * h);
                let analytic = grads.item.row(row)[c] + lambda * model.b_q.row(row)[c];
                if !rel_close(analytic, fd, tol) {
                    return Err(format!(
                        "instance {i}: cluster grad ({row},{c}) analytic {analytic} vs fd {fd}"
                    ));
                }
            }
        }
    }
    Ok(())
}

/// Training loss never increases across `rounds` randomized reassignment
/// passes interleaved with gradient steps.
pub fn check_reassignment_monotone(rounds: usize) -> Result<(), String> {
    let mut r = rng(0xA55E55);
    let per_instance = 10;
    let instances = rounds.div_ceil(per_instance);
    let mut done = 0usize;
    for i in 0..instances {
        let n_users = r.gen_range(4..=8);
        let n_items = r.gen_range(6..=14);
        let m_q = r.gen_range(2..=4);
        let dim = r.gen_range(2..=4);
        let store = random_store(n_users, n_items, r.gen_range(30..=90), &mut r);
        let weights = store.item_degrees();
        let mut model = random_model(n_users, n_items, m_q, dim, &mut r);
        let mut state = ClusterState::new(&model.assign, m_q, &weights).expect("valid state");
        let view = DataView::Full(&store);
        let hp = Hyperparams { eta: 0.01, ..Hyperparams::default() };

        for round in 0..per_instance {
            if done == rounds {
                return Ok(());
            }
            for _ in 0..3 {
                grad_step(&mut model, &NmfScorer, view, &hp);
            }
            let all_items: Vec<u32> = (0..n_items as u32).collect();
            let (candidates, pools): (Vec<u32>, Vec<Vec<u32>>) = if round % 2 == 0 {
                (all_items.clone(), Vec::new())
            } else {
                let cands: Vec<u32> = all_items
                    .iter()
                    .copied()
                    .filter(|_| r.gen_bool(0.6))
                    .collect();
                let pools = cands
                    .iter()
                    .map(|_| {
                        let size = r.gen_range(1..=model.m_q());
                        rand::seq::index::sample(&mut r, model.m_q(), size)
                            .into_iter()
                            .map(|k| k as u32)
                            .collect()
                    })
                    .collect();
                (cands, pools)
            };
            let before = loss(&model, &NmfScorer, view);
            let pool = if round % 2 == 0 {
                CandidatePool::AllClusters
            } else {
                CandidatePool::PerItem(&pools)
            };
            reassign(&mut model, &mut state, &NmfScorer, view, &candidates, pool, &weights);
            let after = loss(&model, &NmfScorer, view);
            if after > before * (1.0 + 1e-12) + 1e-12 {
                return Err(format!(
                    "instance {i} round {round}: reassignment raised loss {before} -> {after}"
                ));
            }
            done += 1;
        }
    }
    Ok(())
}

/// Every split method leaves the training loss unchanged within `tol`
/// (relative), because the new cluster row starts as a copy of the source.
pub fn check_split_neutrality(cases: usize, tol: f64) -> Result<(), String> {
    let mut r = rng(0x5EED5);
    for case in 0..cases {
        let n_users = r.gen_range(4..=8);
        let n_items = r.gen_range(6..=14);
        let m_q = r.gen_range(1..=3);
        let dim = r.gen_range(2..=4);
        let store = random_store(n_users, n_items, r.gen_range(30..=90), &mut r);
        let weights = store.item_degrees();
        let mut model = random_model(n_users, n_items, m_q, dim, &mut r);
        let mut state = ClusterState::new(&model.assign, m_q, &weights).expect("valid state");
        let view = DataView::Full(&store);
        let hp = Hyperparams { eta: 0.01, ..Hyperparams::default() };
        for _ in 0..5 {
            grad_step(&mut model, &NmfScorer, view, &hp);
        }

        let splittable: Vec<usize> =
            (0..model.m_q()).filter(|&k| state.member_count(k) >= 2).collect();
        let Some(&k) = splittable.choose(&mut r) else { continue };
        let before = loss(&model, &NmfScorer, view);
        match case % 3 {
            0 => {
                gpca_split(&mut model, &mut state, &NmfScorer, view, k, 0.0, &weights)
                    .map_err(|e| format!("case {case}: {e}"))?;
            }
            1 => {
                random_projection_split(
                    &mut model, &mut state, &NmfScorer, view, k, 0.0, &weights, &mut r,
                )
                .map_err(|e| format!("case {case}: {e}"))?;
            }
            _ => {
                random_split(&mut model, &mut state, k, &weights, &mut r)
                    .map_err(|e| format!("case {case}: {e}"))?;
            }
        }
        let after = loss(&model, &NmfScorer, view);
        if (after - before).abs() > tol * before.abs().max(1.0) {
            return Err(format!("case {case}: split moved loss {before} -> {after}"));
        }
        if !state.consistent_with(&model.assign) {
            return Err(format!("case {case}: state inconsistent after split"));
        }
    }
    Ok(())
}

/// Power iteration agrees with a dense symmetric eigensolver on random 5x5
/// covariance matrices, up to sign, within `tol` per component. Power
/// iteration resolves the top eigenvector only as fast as the spectral gap,
/// so test spectra are kept clearly separated.
pub fn check_gpca_oracle(cases: usize, tol: f64) -> Result<(), String> {
    let dim = 5;
    let mut r = rng(0xE16E2);
    for case in 0..cases {
        let (c, oracle) = loop {
            let k = r.gen_range(dim..=2 * dim);
            let mut z = Mat::zeros(k, dim);
            for i in 0..k {
                for j in 0..dim {
                    z.row_mut(i)[j] = r.gen_range(-1.0..1.0);
                }
            }
            let mut c = Mat::zeros(dim, dim);
            for a in 0..dim {
                for b in 0..dim {
                    let mut s = 0.0;
                    for i in 0..k {
                        s += z.row(i)[a] * z.row(i)[b];
                    }
                    c.row_mut(a)[b] = s;
                }
            }
            let dm = nalgebra::DMatrix::from_fn(dim, dim, |a, b| c.row(a)[b]);
            let eig = nalgebra::SymmetricEigen::new(dm);
            let mut order: Vec<usize> = (0..dim).collect();
            order.sort_by(|&a, &b| {
                eig.eigenvalues[b].partial_cmp(&eig.eigenvalues[a]).unwrap()
            });
            let top = eig.eigenvalues[order[0]];
            let second = eig.eigenvalues[order[1]];
            if second <= 0.95 * top {
                let v: Vec<f64> = (0..dim).map(|i| eig.eigenvectors[(i, order[0])]).collect();
                break (c, v);
            }
        };
        let mut got = power_iteration(&c);
        let dot: f64 = got.iter().zip(&oracle).map(|(a, b)| a * b).sum();
        if dot < 0.0 {
            got.iter_mut().for_each(|v| *v = -*v);
        }
        for (i, (g, o)) in got.iter().zip(&oracle).enumerate() {
            if (g - o).abs() > tol {
                return Err(format!(
                    "case {case}: eigenvector component {i} differs: {g} vs {o}"
                ));
            }
        }
    }
    Ok(())
}

/// Online strategy-2 splits balance interaction counts within `d` whenever
/// the strategy-1 invariant holds (no member carries more than `d`
/// interactions itself).
pub fn check_strategy2_balance(cases: usize) -> Result<(), String> {
    let mut r = rng(0xBA1A2CE);
    for case in 0..cases {
        let d: u64 = r.gen_range(5..=15);
        let degenerate = case % 5 == 0;
        let mut item_counts: Vec<u64> = Vec::new();
        while item_counts.len() < 3 || item_counts.iter().sum::<u64>() <= 2 * d {
            item_counts.push(r.gen_range(1..=d));
        }
        let n_items = item_counts.len();
        let n_users = 6;
        let mut inter = Vec::new();
        for (j, &w) in item_counts.iter().enumerate() {
            for _ in 0..w {
                inter.push(Interaction {
                    user: if degenerate { 0 } else { r.gen_range(0..n_users) as u32 },
                    item: j as u32,
                    rating: if degenerate { 3.0 } else { r.gen_range(1..=5) as f64 },
                    timestamp: None,
                });
            }
        }
        let store = InteractionStore::new(inter, n_users, n_items, Arc::new(IdMaps::default()));
        let weights = store.item_degrees();
        let mut rng_model = rng(0xBA1A2CE ^ case as u64);
        let mut model =
            init_model_with_assign(n_users, n_items, 3, vec![0; n_items], 1, &mut rng_model)
                .expect("valid partition");
        let mut state = ClusterState::new(&model.assign, 1, &weights).expect("valid state");
        let view = DataView::Full(&store);
        let hp = Hyperparams { eta: 0.01, ..Hyperparams::default() };
        for _ in 0..3 {
            grad_step(&mut model, &NmfScorer, view, &hp);
        }

        strategy2_split(&mut model, &mut state, &NmfScorer, view, 0, d, &weights)
            .map_err(|e| format!("case {case}: {e}"))?;
        if state.member_count(0) == 0 || state.member_count(1) == 0 {
            return Err(format!("case {case}: split produced an empty side"));
        }
        let a = state.weight(0) as i128;
        let b = state.weight(1) as i128;
        if (a - b).abs() > d as i128 {
            return Err(format!(
                "case {case}: imbalance |{a} - {b}| exceeds d={d} (counts {item_counts:?})"
            ));
        }
        if !state.consistent_with(&model.assign) {
            return Err(format!("case {case}: state inconsistent after split"));
        }
    }
    Ok(())
}

/// No operation sequence (gradient steps, including divergent ones,
/// reassignments, and every split flavor) ever leaves an empty cluster or
/// an inconsistent assignment.
pub fn check_no_empty_clusters(ops: usize) -> Result<(), String> {
    let n_users = 12;
    let n_items = 30;
    let dim = 3;
    let mut r = rng(0xF0220);

    let mut store = random_store(n_users, n_items, 150, &mut r);
    let mut weights = store.item_degrees();
    let mut model = random_model(n_users, n_items, 3, dim, &mut r);
    let mut state = ClusterState::new(&model.assign, 3, &weights).expect("valid state");
    let hp = Hyperparams { eta: 0.01, ..Hyperparams::default() };
    let hp_hot = Hyperparams { eta: 50.0, ..Hyperparams::default() };

    for op in 0..ops {
        if op > 0 && op % 500 == 0 {
            store = random_store(n_users, n_items, 150, &mut r);
            weights = store.item_degrees();
            let m_q = r.gen_range(2..=4);
            model = random_model(n_users, n_items, m_q, dim, &mut r);
            state = ClusterState::new(&model.assign, m_q, &weights).expect("valid state");
        }
        let view = DataView::Full(&store);
        let splittable: Vec<usize> =
            (0..model.m_q()).filter(|&k| state.member_count(k) >= 2).collect();
        match r.gen_range(0..8) {
            0 => {
                grad_step(&mut model, &NmfScorer, view, &hp);
            }
            1 => {
                let h = if r.gen_bool(0.3) { &hp_hot } else { &hp };
                grad_step(&mut model, &NmfScorer, view, h);
            }
            2 => {
                let all: Vec<u32> = (0..n_items as u32).collect();
                reassign(
                    &mut model,
                    &mut state,
                    &NmfScorer,
                    view,
                    &all,
                    CandidatePool::AllClusters,
                    &weights,
                );
            }
            3 => {
                let cands: Vec<u32> =
                    (0..n_items as u32).filter(|_| r.gen_bool(0.4)).collect();
                let pools: Vec<Vec<u32>> = cands
                    .iter()
                    .map(|_| {
                        let size = r.gen_range(1..=model.m_q());
                        rand::seq::index::sample(&mut r, model.m_q(), size)
                            .into_iter()
                            .map(|k| k as u32)
                            .collect()
                    })
                    .collect();
                reassign(
                    &mut model,
                    &mut state,
                    &NmfScorer,
                    view,
                    &cands,
                    CandidatePool::PerItem(&pools),
                    &weights,
                );
            }
            4 => {
                if let Some(&k) = splittable.choose(&mut r) {
                    gpca_split(&mut model, &mut state, &NmfScorer, view, k, 0.0, &weights)
                        .map_err(|e| format!("op {op}: {e}"))?;
                }
            }
            5 => {
                if let Some(&k) = splittable.choose(&mut r) {
                    random_split(&mut model, &mut state, k, &weights, &mut r)
                        .map_err(|e| format!("op {op}: {e}"))?;
                }
            }
            6 => {
                if let Some(&k) = splittable.choose(&mut r) {
                    strategy2_split(
                        &mut model,
                        &mut state,
                        &NmfScorer,
                        view,
                        k,
                        r.gen_range(1..=20),
                        &weights,
                    )
                    .map_err(|e| format!("op {op}: {e}"))?;
                }
            }
            _ => {
                let j = r.gen_range(0..n_items) as u32;
                if state.member_count(model.assign[j as usize] as usize) >= 2 {
                    isolate_item(&mut model, &mut state, j, &weights)
                        .map_err(|e| format!("op {op}: {e}"))?;
                }
            }
        }
        if !state.consistent_with(&model.assign) {
            return Err(format!("op {op}: cluster state diverged from assignment"));
        }
        if (0..model.m_q()).any(|k| state.member_count(k) == 0) {
            return Err(format!("op {op}: empty cluster"));
        }
    }
    Ok(())
}
