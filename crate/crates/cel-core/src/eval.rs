//! Evaluation: error and ranking metrics, cold-start warmth buckets,
//! embedding geometry diagnostics, genre coherence, and clustering
//! agreement.

use std::collections::{BTreeMap, HashMap};

use serde::{Deserialize, Serialize};

use crate::dataset::{GenreTable, IdMap, Interaction, InteractionStore};
use crate::error::{CelError, Result};
use crate::matrix::Mat;

/// Mean squared prediction error over a test set.
pub fn mse(predict: impl Fn(u32, u32) -> f64, test: &[Interaction]) -> Result<f64> {
    if test.is_empty() {
        return Err(CelError::EmptyTestSet);
    }
    let sum: f64 = test
        .iter()
        .map(|it| {
            let r = it.rating - predict(it.user, it.item);
            r * r
        })
        .sum();
    Ok(sum / test.len() as f64)
}

/// Area under the ROC curve with ratings at or above `threshold` as the
/// positive class, by the average-rank method (ties share rank credit).
pub fn auc(
    predict: impl Fn(u32, u32) -> f64,
    test: &[Interaction],
    threshold: f64,
) -> Result<f64> {
    if test.is_empty() {
        return Err(CelError::EmptyTestSet);
    }
    let mut scored: Vec<(f64, bool)> = test
        .iter()
        .map(|it| (predict(it.user, it.item), it.rating >= threshold))
        .collect();
    let positives = scored.iter().filter(|(_, p)| *p).count();
    let negatives = scored.len() - positives;
    if positives == 0 || negatives == 0 {
        return Err(CelError::SingleClass);
    }
    scored.sort_by(|a, b| a.0.total_cmp(&b.0));
    let mut rank_sum_pos = 0.0;
    let mut i = 0;
    while i < scored.len() {
        let mut j = i;
        while j < scored.len() && scored[j].0 == scored[i].0 {
            j += 1;
        }
        // Ranks are 1-based; tied scores all take the group's average rank.
        let avg_rank = (i + 1 + j) as f64 / 2.0;
        for s in &scored[i..j] {
            if s.1 {
                rank_sum_pos += avg_rank;
            }
        }
        i = j;
    }
    let p = positives as f64;
    let n = negatives as f64;
    Ok((rank_sum_pos - p * (p + 1.0) / 2.0) / (p * n))
}

/// Item warmth-bucket edges (inclusive upper bounds on the item's training
/// interaction count); anything past the last edge lands in a final
/// open-ended bucket.
pub const DEFAULT_BUCKET_EDGES: [u64; 6] = [0, 5, 20, 100, 800, 2000];

/// Test error of one warmth bucket.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct BucketRow {
    /// Smallest training count in the bucket.
    pub lo: u64,
    /// Largest training count in the bucket; `None` for the open tail.
    pub hi: Option<u64>,
    /// Bucket MSE; `None` when the bucket has no test interactions.
    pub mse: Option<f64>,
    /// Distinct test items in the bucket.
    pub items: usize,
    /// Test interactions in the bucket.
    pub interactions: usize,
}

/// Splits the test set by item warmth (training interaction count, bucket
/// edges inclusive above) and reports each bucket's MSE.
pub fn warmth_buckets(
    predict: impl Fn(u32, u32) -> f64,
    train_item_degrees: &[u64],
    test: &[Interaction],
    edges: &[u64],
) -> Vec<BucketRow> {
    let bucket_of = |count: u64| -> usize {
        edges.iter().position(|&e| count <= e).unwrap_or(edges.len())
    };
    let n_buckets = edges.len() + 1;
    let mut sq = vec![0.0; n_buckets];
    let mut hits = vec![0usize; n_buckets];
    let mut items: Vec<std::collections::HashSet<u32>> =
        vec![std::collections::HashSet::new(); n_buckets];
    for it in test {
        let degree = train_item_degrees.get(it.item as usize).copied().unwrap_or(0);
        let b = bucket_of(degree);
        let r = it.rating - predict(it.user, it.item);
        sq[b] += r * r;
        hits[b] += 1;
        items[b].insert(it.item);
    }
    (0..n_buckets)
        .map(|b| BucketRow {
            lo: if b == 0 { 0 } else { edges[b - 1] + 1 },
            hi: edges.get(b).copied(),
            mse: (hits[b] > 0).then(|| sq[b] / hits[b] as f64),
            items: items[b].len(),
            interactions: hits[b],
        })
        .collect()
}

/// Fraction of rows lying strictly outside the cone
/// {x : x^T 1 >= sqrt(R-1) ||x||}, plus the count of all-zero rows (which
/// sit inside by convention). A fraction near one indicates embeddings
/// scattered enough to make the factorization essentially unique.
pub fn scattered_fraction(rows: &Mat) -> (f64, usize) {
    if rows.rows() == 0 {
        return (0.0, 0);
    }
    let bound = ((rows.cols() as f64) - 1.0).max(0.0).sqrt();
    let mut outside = 0usize;
    let mut zero_rows = 0usize;
    for i in 0..rows.rows() {
        let row = rows.row(i);
        let sum: f64 = row.iter().sum();
        let norm: f64 = row.iter().map(|v| v * v).sum::<f64>().sqrt();
        if norm == 0.0 {
            zero_rows += 1;
        } else if sum < bound * norm {
            outside += 1;
        }
    }
    (outside as f64 / rows.rows() as f64, zero_rows)
}

/// Genre coherence of a clustering.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct GenreEntropy {
    /// Mean over genres of sum_k p ln p; zero or negative, and closer to
    /// zero the purer the clustering.
    pub value: f64,
    /// Convenience positive magnitude, -value.
    pub magnitude: f64,
    /// Items with no genre record.
    pub missing_items: usize,
}

/// Computes per-genre cluster entropy: for each genre, the distribution of
/// its items over clusters, averaged across genres.
pub fn genre_entropy(
    assign: &[u32],
    m_q: usize,
    item_ids: &IdMap,
    genres: &GenreTable,
) -> GenreEntropy {
    let mut per_genre: BTreeMap<String, Vec<u64>> = BTreeMap::new();
    let mut missing_items = 0usize;
    for (j, &k) in assign.iter().enumerate() {
        let raw = item_ids.raw(j as u32);
        match genres.get(raw) {
            None => missing_items += 1,
            Some(entry) => {
                for g in &entry.genres {
                    per_genre.entry(g.clone()).or_insert_with(|| vec![0; m_q])[k as usize] += 1;
                }
            }
        }
    }
    if per_genre.is_empty() {
        return GenreEntropy { value: 0.0, magnitude: 0.0, missing_items };
    }
    let mut total = 0.0;
    for counts in per_genre.values() {
        let genre_total: u64 = counts.iter().sum();
        if genre_total == 0 {
            continue;
        }
        for &c in counts {
            if c == 0 {
                continue;
            }
            let p = c as f64 / genre_total as f64;
            total += p * p.ln();
        }
    }
    let value = total / per_genre.len() as f64;
    GenreEntropy { value, magnitude: -value, missing_items }
}

/// Adjusted Rand index between two labelings of the same items. 1 means
/// identical partitions (up to label permutation), 0 is chance-level
/// agreement. Two trivial identical partitions score 1.
pub fn adjusted_rand_index(a: &[u32], b: &[u32]) -> f64 {
    assert_eq!(a.len(), b.len(), "labelings must cover the same items");
    let n = a.len();
    if n == 0 {
        return 1.0;
    }
    let mut joint: HashMap<(u32, u32), u64> = HashMap::new();
    let mut rows: HashMap<u32, u64> = HashMap::new();
    let mut cols: HashMap<u32, u64> = HashMap::new();
    for (&x, &y) in a.iter().zip(b) {
        *joint.entry((x, y)).or_default() += 1;
        *rows.entry(x).or_default() += 1;
        *cols.entry(y).or_default() += 1;
    }
    let c2 = |v: u64| (v * v.saturating_sub(1)) as f64 / 2.0;
    let sum_joint: f64 = joint.values().map(|&v| c2(v)).sum();
    let sum_rows: f64 = rows.values().map(|&v| c2(v)).sum();
    let sum_cols: f64 = cols.values().map(|&v| c2(v)).sum();
    let pairs = c2(n as u64);
    let expected = sum_rows * sum_cols / pairs;
    let max = (sum_rows + sum_cols) / 2.0;
    if (max - expected).abs() < 1e-15 {
        return 1.0;
    }
    (sum_joint - expected) / (max - expected)
}

/// Drops test interactions whose user or item never occurs in the training
/// set; such entities have no learned embedding to predict with.
pub fn filter_unseen(train: &InteractionStore, test: &[Interaction]) -> Vec<Interaction> {
    test.iter()
        .filter(|it| {
            !train.user_positions(it.user).is_empty() && !train.item_positions(it.item).is_empty()
        })
        .copied()
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dataset::load_genres;
    use std::io::Write;

    fn it(user: u32, item: u32, rating: f64) -> Interaction {
        Interaction { user, item, rating, timestamp: None }
    }

    #[test]
    fn mse_matches_hand_computation() {
        let test = vec![it(0, 0, 3.0), it(0, 1, 5.0)];
        let predict = |_: u32, item: u32| if item == 0 { 2.0 } else { 5.0 };
        // Errors 1 and 0: mean of 1 and 0 is 0.5.
        assert_eq!(mse(predict, &test).unwrap(), 0.5);
        assert!(matches!(mse(predict, &[]), Err(CelError::EmptyTestSet)));
    }

    #[test]
    fn auc_ranks_perfect_and_reversed() {
        let test = vec![it(0, 0, 5.0), it(0, 1, 1.0), it(0, 2, 5.0), it(0, 3, 2.0)];
        let forward = |_: u32, item: u32| if item == 0 || item == 2 { 0.9 } else { 0.1 };
        assert_eq!(auc(forward, &test, 4.0).unwrap(), 1.0);
        let reversed = |_: u32, item: u32| if item == 0 || item == 2 { 0.1 } else { 0.9 };
        assert_eq!(auc(reversed, &test, 4.0).unwrap(), 0.0);
        let constant = |_: u32, _: u32| 0.5;
        assert_eq!(auc(constant, &test, 4.0).unwrap(), 0.5);
    }

    #[test]
    fn auc_requires_both_classes() {
        let test = vec![it(0, 0, 5.0), it(0, 1, 5.0)];
        assert!(matches!(auc(|_, _| 0.5, &test, 4.0), Err(CelError::SingleClass)));
    }

    #[test]
    fn auc_is_invariant_to_monotone_transforms() {
        let test: Vec<Interaction> =
            (0..20).map(|i| it(0, i, if i % 3 == 0 { 5.0 } else { 2.0 })).collect();
        let raw = |_: u32, item: u32| (item as f64 * 37.0) % 11.0;
        let squashed = |u: u32, j: u32| (raw(u, j) / 3.0).tanh();
        let a = auc(raw, &test, 4.0).unwrap();
        let b = auc(squashed, &test, 4.0).unwrap();
        assert!((a - b).abs() < 1e-12);
    }

    #[test]
    fn warmth_buckets_split_on_inclusive_edges() {
        // Item degrees: item 0 cold (0), item 1 at the edge (5), item 2
        // just past it (6).
        let degrees = vec![0u64, 5, 6];
        let test = vec![it(0, 0, 3.0), it(0, 1, 3.0), it(0, 2, 3.0), it(1, 2, 4.0)];
        let rows = warmth_buckets(|_, _| 3.0, &degrees, &test, &[0, 5]);
        assert_eq!(rows.len(), 3);
        assert_eq!(rows[0].interactions, 1);
        assert_eq!(rows[1].interactions, 1);
        assert_eq!(rows[2].interactions, 2);
        assert_eq!(rows[2].items, 1);
        assert_eq!(rows[0].mse, Some(0.0));
        assert_eq!(rows[2].mse, Some(0.5));
        assert_eq!(rows[0].lo, 0);
        assert_eq!(rows[0].hi, Some(0));
        assert_eq!(rows[2].lo, 6);
        assert_eq!(rows[2].hi, None);
        let empty_bucket = warmth_buckets(|_, _| 3.0, &degrees, &test[..1], &[0, 5]);
        assert_eq!(empty_bucket[1].mse, None);
    }

    #[test]
    fn scattered_identity_rows_lie_outside() {
        // Rows of the identity: each has sum 1 and norm 1, and
        // sqrt(R-1) > 1 for R >= 3, so all rows are strictly outside.
        let r = 4;
        let mut m = Mat::zeros(r, r);
        for i in 0..r {
            m.row_mut(i)[i] = 1.0;
        }
        let (frac, zeros) = scattered_fraction(&m);
        assert_eq!(frac, 1.0);
        assert_eq!(zeros, 0);
    }

    #[test]
    fn scattered_uniform_row_lies_inside() {
        let mut m = Mat::zeros(2, 3);
        m.row_mut(0).copy_from_slice(&[1.0, 1.0, 1.0]);
        m.row_mut(1).copy_from_slice(&[5.0, 0.0, 0.0]);
        // Row 0: sum 3 >= sqrt(2)*sqrt(3), inside. Row 1: 5 < sqrt(2)*5,
        // outside.
        let (frac, zeros) = scattered_fraction(&m);
        assert_eq!(frac, 0.5);
        assert_eq!(zeros, 0);
    }

    #[test]
    fn scattered_counts_zero_rows_inside() {
        let m = Mat::zeros(3, 4);
        let (frac, zeros) = scattered_fraction(&m);
        assert_eq!(frac, 0.0);
        assert_eq!(zeros, 3);
    }

    #[test]
    fn scattered_fraction_is_scale_invariant() {
        let mut a = Mat::zeros(2, 3);
        a.row_mut(0).copy_from_slice(&[0.3, 0.1, 0.9]);
        a.row_mut(1).copy_from_slice(&[0.2, 0.2, 0.2]);
        let mut b = a.clone();
        for v in b.data_mut() {
            *v *= 42.0;
        }
        assert_eq!(scattered_fraction(&a), scattered_fraction(&b));
    }

    fn genre_fixture() -> (IdMap, GenreTable) {
        let mut ids = IdMap::new();
        for raw in ["101", "102", "103", "104"] {
            ids.intern(raw);
        }
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("genres.dat");
        let mut f = std::fs::File::create(&path).unwrap();
        writeln!(f, "101::A (1990)::Comedy").unwrap();
        writeln!(f, "102::B (1991)::Comedy").unwrap();
        writeln!(f, "103::C (1992)::Drama").unwrap();
        writeln!(f, "104::D (1993)::Drama").unwrap();
        drop(f);
        (ids, load_genres(&path).unwrap())
    }

    #[test]
    fn genre_entropy_zero_for_pure_clusters() {
        let (ids, genres) = genre_fixture();
        // Comedies in cluster 0, dramas in cluster 1: every genre sits in
        // one cluster, so the entropy is exactly zero.
        let e = genre_entropy(&[0, 0, 1, 1], 2, &ids, &genres);
        assert_eq!(e.value, 0.0);
        assert_eq!(e.missing_items, 0);
    }

    #[test]
    fn genre_entropy_negative_for_mixed_clusters() {
        let (ids, genres) = genre_fixture();
        // Each genre split half and half: per genre sum p ln p = ln(1/2).
        let e = genre_entropy(&[0, 1, 0, 1], 2, &ids, &genres);
        let expected = (0.5f64.ln() * 0.5 * 2.0 * 2.0) / 2.0;
        assert!((e.value - expected).abs() < 1e-12);
        assert!((e.magnitude + e.value).abs() < 1e-15);
        assert!(e.value < 0.0);
    }

    #[test]
    fn genre_entropy_counts_missing_items() {
        let (mut ids, genres) = genre_fixture();
        ids.intern("999");
        let e = genre_entropy(&[0, 0, 1, 1, 1], 2, &ids, &genres);
        assert_eq!(e.missing_items, 1);
    }

    #[test]
    fn ari_identity_and_permutation_score_one() {
        let a = vec![0u32, 0, 1, 1, 2, 2];
        assert_eq!(adjusted_rand_index(&a, &a), 1.0);
        let permuted = vec![2u32, 2, 0, 0, 1, 1];
        assert_eq!(adjusted_rand_index(&a, &permuted), 1.0);
    }

    #[test]
    fn ari_known_small_example() {
        // Contingency arithmetic gives exactly zero for this pair.
        let a = vec![0u32, 0, 1, 1];
        let b = vec![0u32, 0, 0, 1];
        assert_eq!(adjusted_rand_index(&a, &b), 0.0);
    }

    #[test]
    fn ari_trivial_partitions_score_one() {
        let a = vec![0u32; 5];
        assert_eq!(adjusted_rand_index(&a, &a), 1.0);
    }

    #[test]
    fn ari_near_zero_for_independent_labelings() {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(1);
        let a: Vec<u32> = (0..500).map(|_| rng.gen_range(0..5)).collect();
        let b: Vec<u32> = (0..500).map(|_| rng.gen_range(0..5)).collect();
        assert!(adjusted_rand_index(&a, &b).abs() < 0.05);
    }

    #[test]
    fn filter_unseen_drops_cold_entities() {
        use crate::dataset::IdMaps;
        use std::sync::Arc;
        let train = InteractionStore::new(vec![it(0, 0, 3.0), it(1, 1, 4.0)], 3, 3, Arc::new(IdMaps::default()));
        let test = vec![it(0, 1, 2.0), it(2, 0, 1.0), it(0, 2, 5.0)];
        let kept = filter_unseen(&train, &test);
        assert_eq!(kept.len(), 1);
        assert_eq!(kept[0].item, 1);
    }
}
