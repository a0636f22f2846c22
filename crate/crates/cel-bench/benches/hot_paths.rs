use cel_bench::{standard_instance, CLUSTERS, ITEMS};
use cel_core::cluster::{
    balanced_threshold, gpca_split, reassign, CandidatePool, ClusterState,
};
use cel_core::dataset::DataView;
use cel_core::model::{grad_step, loss, Hyperparams, NmfScorer};
use criterion::{black_box, criterion_group, criterion_main, BatchSize, Criterion};
use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn bench_loss(c: &mut Criterion) {
    let (store, model) = standard_instance();
    c.bench_function("loss/full_view", |b| {
        b.iter(|| loss(black_box(&model), &NmfScorer, DataView::Full(&store)))
    });
}

fn bench_grad_step(c: &mut Criterion) {
    let (store, model) = standard_instance();
    let hp = Hyperparams::default();
    c.bench_function("grad_step/full_view", |b| {
        b.iter_batched(
            || model.clone(),
            |mut m| grad_step(&mut m, &NmfScorer, DataView::Full(&store), &hp),
            BatchSize::LargeInput,
        )
    });
}

fn bench_reassign(c: &mut Criterion) {
    let (store, model) = standard_instance();
    let weights = store.item_degrees();
    let state = ClusterState::new(&model.assign, CLUSTERS, &weights).expect("consistent model");
    let candidates: Vec<u32> = (0..ITEMS as u32).collect();
    c.bench_function("reassign/all_items_all_clusters", |b| {
        b.iter_batched(
            || (model.clone(), state.clone()),
            |(mut m, mut s)| {
                reassign(
                    &mut m,
                    &mut s,
                    &NmfScorer,
                    DataView::Full(&store),
                    &candidates,
                    CandidatePool::AllClusters,
                    &weights,
                )
            },
            BatchSize::LargeInput,
        )
    });
}

fn bench_gpca_split(c: &mut Criterion) {
    let (store, model) = standard_instance();
    let weights = store.item_degrees();
    let state = ClusterState::new(&model.assign, CLUSTERS, &weights).expect("consistent model");
    c.bench_function("gpca_split/50_member_cluster", |b| {
        b.iter_batched(
            || (model.clone(), state.clone()),
            |(mut m, mut s)| {
                gpca_split(&mut m, &mut s, &NmfScorer, DataView::Full(&store), 0, 0.0, &weights)
            },
            BatchSize::LargeInput,
        )
    });
}

fn bench_balanced_threshold(c: &mut Criterion) {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let scores: Vec<f64> = (0..10_000).map(|_| rng.gen_range(-1.0..1.0)).collect();
    let weights: Vec<u64> = (0..10_000).map(|_| rng.gen_range(1..=40)).collect();
    let total: u64 = weights.iter().sum();
    c.bench_function("balanced_threshold/10k_members", |b| {
        b.iter(|| balanced_threshold(black_box(&scores), black_box(&weights), total / 20))
    });
}

criterion_group!(
    benches,
    bench_loss,
    bench_grad_step,
    bench_reassign,
    bench_gpca_split,
    bench_balanced_threshold
);
criterion_main!(benches);
