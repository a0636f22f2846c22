//! Fixture builders for the criterion benches: a mid-sized random
//! interaction store and a clustered model over it.

use std::sync::Arc;

use cel_core::dataset::{IdMaps, Interaction, InteractionStore};
use cel_core::model::{init_model, EmbeddingModel};
use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// Users in the standard bench instance.
pub const USERS: usize = 500;
/// Items in the standard bench instance.
pub const ITEMS: usize = 1000;
/// Interactions in the standard bench instance.
pub const INTERACTIONS: usize = 20_000;
/// Embedding dimension of the standard bench instance.
pub const DIM: usize = 32;
/// Cluster count of the standard bench instance.
pub const CLUSTERS: usize = 20;

/// Uniform random interactions over the full user/item grid.
pub fn random_store(n_users: usize, n_items: usize, len: usize, seed: u64) -> InteractionStore {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let interactions: Vec<Interaction> = (0..len)
        .map(|_| Interaction {
            user: rng.gen_range(0..n_users as u32),
            item: rng.gen_range(0..n_items as u32),
            rating: rng.gen_range(1..=5) as f64,
            timestamp: None,
        })
        .collect();
    InteractionStore::new(interactions, n_users, n_items, Arc::new(IdMaps::default()))
}

/// Model with `CLUSTERS` round-robin clusters over the standard store.
pub fn standard_instance() -> (InteractionStore, EmbeddingModel) {
    let store = random_store(USERS, ITEMS, INTERACTIONS, 7);
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let model = init_model(USERS, ITEMS, DIM, CLUSTERS, &mut rng).expect("valid dimensions");
    (store, model)
}
