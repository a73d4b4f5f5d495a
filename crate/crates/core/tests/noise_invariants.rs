mod common;

use std::collections::BTreeSet;

use proptest::prelude::*;

use tagnoise::dataset::Manifest;
use tagnoise::noise::{affected_count, corrupt_labels, shuffle_labels, sweep_plan};

fn sorted_sets(m: &Manifest) -> Vec<BTreeSet<usize>> {
    let mut v: Vec<_> = m.records().iter().map(|r| r.tags.clone()).collect();
    v.sort();
    v
}

#[test]
fn sweep_grid_has_21_values() {
    let plan = sweep_plan(0, 100, 5).unwrap();
    assert_eq!(plan.len(), 21);
    assert_eq!(plan.first(), Some(&0));
    assert_eq!(plan.last(), Some(&100));
    assert!(sweep_plan(0, 100, 7).is_err());
    assert!(sweep_plan(0, 100, 0).is_err());
}

#[test]
fn corruption_over_the_sweep() {
    let mut rng = common::rng(11);
    for n in [10, 100, 825] {
        let m = common::random_manifest(n, &mut rng);
        for r in sweep_plan(0, 100, 5).unwrap() {
            let (c, plan) = corrupt_labels(&m, r as f64, &mut rng).unwrap();
            let want = (r as f64 * n as f64 / 100.0).round() as usize;
            assert_eq!(plan.len(), want);
            assert_eq!(affected_count(r as f64, n), want);
            let affected: BTreeSet<&str> = plan.affected_ids().collect();
            for (a, b) in m.records().iter().zip(c.records()) {
                assert_eq!(a.tags.len(), b.tags.len());
                let diff = a.tags.symmetric_difference(&b.tags).count();
                assert_eq!(diff, if affected.contains(a.id.as_str()) { 2 } else { 0 });
            }
            if r == 0 {
                assert_eq!(c, m);
            }
        }
    }
}

#[test]
fn rounding_examples() {
    assert_eq!(affected_count(70.0, 825), 578);
    assert_eq!(affected_count(5.0, 10), 1);
    assert_eq!(affected_count(50.0, 3), 2);
    assert_eq!(affected_count(100.0, 825), 825);
}

#[test]
fn corruption_is_seed_deterministic() {
    let m = common::random_manifest(50, &mut common::rng(1));
    let a = corrupt_labels(&m, 40.0, &mut common::rng(7)).unwrap();
    let b = corrupt_labels(&m, 40.0, &mut common::rng(7)).unwrap();
    assert_eq!(a, b);
    assert!(corrupt_labels(&m, 100.5, &mut common::rng(7)).is_err());
}

proptest! {
    #[test]
    fn shuffle_preserves_label_multiset(n in 1usize..120, seed in any::<u64>()) {
        let m = common::random_manifest(n, &mut common::rng(seed));
        let s = shuffle_labels(&m, &mut common::rng(seed ^ 1)).unwrap();
        prop_assert_eq!(sorted_sets(&m), sorted_sets(&s));
        let ids: Vec<_> = s.records().iter().map(|r| &r.id).collect();
        let orig: Vec<_> = m.records().iter().map(|r| &r.id).collect();
        prop_assert_eq!(ids, orig);
    }

    #[test]
    fn corruption_conserves_tag_counts(n in 1usize..200, r in 0u32..=100, seed in any::<u64>()) {
        let m = common::random_manifest(n, &mut common::rng(seed));
        let (c, plan) = corrupt_labels(&m, r as f64, &mut common::rng(seed ^ 2)).unwrap();
        prop_assert_eq!(plan.len(), affected_count(r as f64, n));
        let before: usize = m.records().iter().map(|x| x.tags.len()).sum();
        let after: usize = c.records().iter().map(|x| x.tags.len()).sum();
        prop_assert_eq!(before, after);
        for rep in &plan.replacements {
            let orig = &m.records().iter().find(|x| x.id == rep.id).unwrap().tags;
            prop_assert!(orig.contains(&rep.removed));
            prop_assert!(!orig.contains(&rep.inserted));
        }
    }
}
