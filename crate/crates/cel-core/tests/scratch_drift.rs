use cel_core::model::{Hyperparams, NmfScorer};
use cel_core::trainer::{generate_synthetic_stream, train_cel_lite, Phase};
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn profile(tag: &str, hp: &Hyperparams) {
    let mut rng = ChaCha8Rng::seed_from_u64(42);
    let stream = generate_synthetic_stream(240_000, 10, 5, &mut rng);
    let (model, report) = train_cel_lite(&stream, &NmfScorer, hp, 16, None, 1).unwrap();
    let walls: Vec<u64> = report
        .events
        .iter()
        .filter(|e| e.phase == Phase::Embed || e.phase == Phase::Reassign)
        .map(|e| e.wall_ms)
        .collect();
    let n = walls.len();
    let w0 = walls[n / 12].saturating_sub(walls[0]);
    let w1 = walls[n / 2] - walls[n / 2 - n / 12];
    let w2 = walls[n - 1] - walls[n - 1 - n / 12];
    println!("{tag}: m_q={} early={}ms mid={}ms late={}ms", model.m_q(), w0, w1, w2);
}

#[test]
fn drift_probe() {
    let base = Hyperparams::lite();
    profile("baseline  ", &base);
    profile("no splits ", &Hyperparams { d: u64::MAX, ..base.clone() });
    profile("no reassign", &Hyperparams { t1: 0, ..base.clone() });
    profile("neither   ", &Hyperparams { d: u64::MAX, t1: 0, ..base });
}
