mod common;

use std::collections::{BTreeMap, BTreeSet, HashSet};

use common::*;
use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use starseq::data::*;
use starseq::train::{build_examples, sample_negative, ExampleMode};
use starseq::Error;

fn as_set(records: &[Interaction]) -> BTreeSet<(String, String, i64)> {
    records.iter().map(|r| (r.user.clone(), r.item.clone(), r.timestamp)).collect()
}

#[test]
fn cascade_reaches_the_brute_force_fixed_point() {
    let log = cascade_log();
    let cfg = PrepConfig::default();
    let got = filter_log(&log, &cfg).unwrap();
    let want = brute_fixed_point(&log, &cfg);
    assert_eq!(as_set(&got.records), as_set(&want));
    let users: BTreeSet<&str> = got.records.iter().map(|r| r.user.as_str()).collect();
    let items: BTreeSet<&str> = got.records.iter().map(|r| r.item.as_str()).collect();
    assert_eq!(users, ["u0", "u1", "u2", "u3", "u4", "u5"].into());
    assert_eq!(items, ["a", "b", "c", "d", "e"].into());
}

fn random_log() -> impl Strategy<Value = InteractionLog> {
    prop::collection::vec((0u8..12, 0u8..10, 1u8..=5), 0..160).prop_map(|rows| {
        InteractionLog::from_records(
            rows.into_iter()
                .enumerate()
                .map(|(t, (u, i, r))| record(&format!("u{u}"), &format!("i{i}"), r as f64, t as i64)),
        )
    })
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(200))]

    #[test]
    fn filtering_matches_oracle_and_is_idempotent(log in random_log(), mu in 1usize..6, mi in 1usize..6) {
        let cfg = PrepConfig { min_user: mu, min_item: mi, rating_threshold: 4.0 };
        let once = filter_log(&log, &cfg).unwrap();
        prop_assert_eq!(as_set(&once.records), as_set(&brute_fixed_point(&log, &cfg)));
        let twice = filter_log(&once, &cfg).unwrap();
        prop_assert_eq!(&once.records, &twice.records);
        let mut users: BTreeMap<&str, usize> = BTreeMap::new();
        let mut items: BTreeMap<&str, usize> = BTreeMap::new();
        for r in &once.records {
            prop_assert!(r.rating >= 4.0);
            *users.entry(&r.user).or_default() += 1;
            *items.entry(&r.item).or_default() += 1;
        }
        prop_assert!(users.values().all(|&c| c >= mu));
        prop_assert!(items.values().all(|&c| c >= mi));
    }

    #[test]
    fn dataset_and_split_are_consistent(log in random_log()) {
        let cfg = PrepConfig { min_user: 3, min_item: 2, rating_threshold: 4.0 };
        let Ok(ds) = preprocess(&log, &cfg) else { return Ok(()); };
        prop_assert_eq!(&ds.items[0], "<pad>");
        prop_assert!(ds.sequences.iter().flatten().all(|&v| v != PAD && v < ds.num_items()));
        let split = split_leave_one_out(&ds);
        prop_assert_eq!(split.users.len() + split.excluded.len(), ds.num_users());
        for u in &split.users {
            let mut whole = u.train.clone();
            whole.push(u.val);
            whole.push(u.test);
            prop_assert_eq!(&whole, &ds.sequences[u.uid]);
        }
    }

    #[test]
    fn windows_keep_the_most_recent_items(seq in prop::collection::vec(1usize..50, 0..20), n in 1usize..12) {
        let fs = to_fixed_length(&seq, n).unwrap();
        prop_assert_eq!(fs.len(), n);
        prop_assert_eq!(fs.pad_count, n.saturating_sub(seq.len()));
        prop_assert!(fs.items[..fs.pad_count].iter().all(|&v| v == PAD));
        prop_assert_eq!(fs.real_items(), &seq[seq.len() - seq.len().min(n)..]);
    }
}

#[test]
fn histories_follow_timestamps_with_stable_ties() {
    let recs = vec![
        record("u", "late", 5.0, 9),
        record("u", "tie-a", 5.0, 3),
        record("u", "tie-b", 5.0, 3),
        record("u", "early", 5.0, 1),
    ];
    let cfg = PrepConfig { min_user: 1, min_item: 1, rating_threshold: 4.0 };
    let ds = preprocess(&InteractionLog::from_records(recs), &cfg).unwrap();
    let names: Vec<&str> = ds.sequences[0].iter().map(|&v| ds.items[v].as_str()).collect();
    assert_eq!(names, ["early", "tie-a", "tie-b", "late"]);
}

#[test]
fn empty_result_is_a_preprocessing_error() {
    let log = InteractionLog::from_records(vec![record("u", "i", 2.0, 0)]);
    assert!(matches!(preprocess(&log, &PrepConfig::default()), Err(Error::Preprocessing(_))));
}

#[test]
fn three_line_sample_counts() {
    let text = "user\titem\trating\ttimestamp\nu1\ti1\t5\t10\nu1\ti2\t4\t11\nu2\ti1\t3\t12\n";
    let log = parse_tsv(text.as_bytes(), LoadOptions::default()).unwrap();
    assert_eq!(log.len(), 3);
    let cfg = PrepConfig { min_user: 1, min_item: 1, rating_threshold: 4.0 };
    let ds = preprocess(&log, &cfg).unwrap();
    assert_eq!((ds.num_users(), ds.num_items() - 1, ds.num_interactions()), (1, 2, 2));
}

#[test]
fn malformed_lines_within_tolerance_are_counted() {
    let mut text = String::new();
    for t in 0..99 {
        text.push_str(&format!("u\ti{t}\t5\t{t}\n"));
    }
    text.push_str("broken line\n");
    let log = parse_tsv(text.as_bytes(), LoadOptions::default()).unwrap();
    assert_eq!((log.len(), log.malformed), (99, 1));
    text.push_str("u\ti\tfive\t3\n");
    assert!(matches!(parse_tsv(text.as_bytes(), LoadOptions::default()), Err(Error::Ingestion(_))));
    let loose = LoadOptions { max_malformed_fraction: 0.5 };
    assert_eq!(parse_tsv(text.as_bytes(), loose).unwrap().malformed, 2);
}

#[test]
fn repeated_triples_are_dropped() {
    let text = "u\ti\t5\t1\nu\ti\t5\t1\nu\ti\t5\t2\n";
    let log = parse_tsv(text.as_bytes(), LoadOptions::default()).unwrap();
    assert_eq!((log.len(), log.duplicates), (2, 1));
}

fn split_with_lengths(lengths: &[usize]) -> Split {
    Split {
        users: lengths
            .iter()
            .enumerate()
            .map(|(uid, &len)| UserSplit {
                uid,
                train: (1..=len).collect(),
                val: 1,
                test: 1,
            })
            .collect(),
        excluded: vec![],
    }
}

#[test]
fn thirty_seven_users_bucket_by_hand() {
    // Lengths 37, 36, …, 1, so rank order is uid order. Boundaries
    // floor(i·37/10) = 0 3 7 11 14 18 22 25 29 33 37.
    let lengths: Vec<usize> = (1..=37).rev().collect();
    let buckets = activity_buckets(&split_with_lengths(&lengths)).unwrap();
    let sizes: Vec<usize> = buckets.iter().map(|b| b.users.len()).collect();
    assert_eq!(sizes, [3, 4, 4, 3, 4, 4, 3, 4, 4, 4]);
    assert_eq!(buckets[0].users, [0, 1, 2]);
    assert_eq!(buckets[9].users, [33, 34, 35, 36]);
    let labels: Vec<&str> = buckets.iter().map(|b| b.label.as_str()).collect();
    assert_eq!(
        labels,
        [
            "top-10%", "top-10-20%", "top-20-30%", "top-30-40%", "top-40-50%",
            "bottom-40-50%", "bottom-30-40%", "bottom-20-30%", "bottom-10-20%", "bottom-10%"
        ]
    );
}

#[test]
fn bucket_ties_go_to_lower_uid() {
    let buckets = activity_buckets(&split_with_lengths(&[2; 10])).unwrap();
    let flat: Vec<usize> = buckets.iter().flat_map(|b| b.users.clone()).collect();
    assert_eq!(flat, (0..10).collect::<Vec<_>>());
    assert!(matches!(activity_buckets(&split_with_lengths(&[2; 9])), Err(Error::Config(_))));
}

#[test]
fn negatives_are_uniform_over_unseen_items() {
    // Catalog 1..=20 with 5 seen items leaves 15 equally likely outcomes.
    let seen: HashSet<usize> = [2, 3, 5, 7, 11].into();
    let mut rng = ChaCha8Rng::seed_from_u64(99);
    let draws = 30_000;
    let mut counts = BTreeMap::new();
    for _ in 0..draws {
        let v = sample_negative(&mut rng, &seen, 21).unwrap();
        assert!(v != PAD && !seen.contains(&v));
        *counts.entry(v).or_insert(0usize) += 1;
    }
    assert_eq!(counts.len(), 15);
    let expected = draws as f64 / 15.0;
    let chi2: f64 = counts.values().map(|&c| (c as f64 - expected).powi(2) / expected).sum();
    // 99.9th percentile of χ² with 14 degrees of freedom.
    assert!(chi2 < 36.12, "chi2 = {chi2}");
}

#[test]
fn exhausted_catalog_is_a_sampling_error() {
    let seen: HashSet<usize> = (1..5).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    assert!(matches!(sample_negative(&mut rng, &seen, 5), Err(Error::Sampling(_))));
}

#[test]
fn example_modes() {
    let split = Split {
        users: vec![UserSplit { uid: 0, train: vec![4, 5, 6, 7], val: 8, test: 9 }],
        excluded: vec![],
    };
    let last = build_examples(&split, 3, ExampleMode::LastPrefix).unwrap();
    assert_eq!(last.len(), 1);
    assert_eq!((last[0].input.items.clone(), last[0].target), (vec![4, 5, 6], 7));
    let all = build_examples(&split, 3, ExampleMode::AllPrefixes).unwrap();
    let pairs: Vec<(Vec<usize>, usize)> = all.iter().map(|e| (e.input.items.clone(), e.target)).collect();
    assert_eq!(pairs, [(vec![0, 0, 4], 5), (vec![0, 4, 5], 6), (vec![4, 5, 6], 7)]);
}
