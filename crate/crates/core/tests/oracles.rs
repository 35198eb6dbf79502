//! Cross-checks of the checker against the brute-force oracles in `common`.

mod common;

use std::collections::BTreeSet;

use persistcheck::checker::{post_crash_states, CheckName};
use persistcheck::fault::{crash_images, enumerate_schedules, Bounds};
use persistcheck::model::durable;
use persistcheck::scenario::{bundled, BUNDLED};

use common::*;

fn bounds(k: usize, crash: bool) -> Bounds {
    Bounds {
        max_faults: k,
        allow_crash: crash,
        ..Bounds::default()
    }
}

#[test]
fn enumeration_matches_naive_runs() {
    for name in [
        "lemma-ext4",
        "retry-nonsound",
        "prefix-violation",
        "wsr-drop2",
        "plp-equivalence",
    ] {
        let s = bundled(name).unwrap();
        let h = s.harness().unwrap();
        for k in 0..=2 {
            for crash in [false, true] {
                let fast: BTreeSet<_> = enumerate_schedules(&h, &bounds(k, crash))
                    .unwrap()
                    .into_iter()
                    .map(|s| (s.plan(), s.crash_after))
                    .collect();
                let slow: BTreeSet<_> = naive_runs(&h, k, crash)
                    .into_iter()
                    .map(|r| (r.plan, r.crash_after))
                    .collect();
                assert_eq!(fast, slow, "{name} k={k} crash={crash}");
            }
        }
    }
}

#[test]
fn durability_matches_oracle_on_every_state() {
    for name in [
        "lemma-ext4",
        "retry-nonsound",
        "plp-equivalence",
        "wsr-full",
    ] {
        let s = bundled(name).unwrap();
        let h = s.harness().unwrap();
        let w = s.writes(&h).unwrap();
        for r in naive_runs(&h, 2, false) {
            for st in &r.states {
                let issued = w.iter().all(|x| match x {
                    persistcheck::model::WriteItem::Data(v) => st.app.issued.contains_key(v),
                    _ => true,
                });
                if !issued {
                    continue;
                }
                assert_eq!(
                    durable(st, &w).unwrap(),
                    oracle_durable(st, &w),
                    "{name} plan {:?}",
                    r.plan
                );
            }
        }
    }
}

#[test]
fn crash_images_match_linearizations() {
    for name in [
        "lemma-ext4",
        "prefix-violation",
        "wsr-full",
        "plp-equivalence",
    ] {
        let s = bundled(name).unwrap();
        let h = s.harness().unwrap();
        for r in naive_runs(&h, 1, false) {
            for st in &r.states {
                let fast: BTreeSet<_> = crash_images(&st.device).into_iter().collect();
                assert_eq!(fast, linearized_images(&st.device), "{name}");
            }
        }
    }
}

#[test]
fn recovered_views_match_oracle() {
    for name in ["prefix-violation", "wsr-drop2", "wsr-drop4"] {
        let s = bundled(name).unwrap();
        let h = s.harness().unwrap();
        for r in naive_runs(&h, 1, false) {
            let fast: BTreeSet<_> = post_crash_states(&h, r.last())
                .iter()
                .map(|rec| (rec.view(), rec.inconsistencies.is_empty()))
                .collect();
            assert_eq!(fast, naive_crash_views(&h, r.last()), "{name}");
        }
    }
}

#[test]
fn every_bundled_check_agrees_with_its_oracle() {
    for (name, _) in BUNDLED {
        let s = bundled(name).unwrap();
        for c in &s.checks {
            let got = s.run_check(*c, &s.bounds).unwrap().verdict;
            assert_eq!(got, oracle_verdict(&s, *c), "{name} {c}");
        }
    }
}

#[test]
fn lemma_commit_time_oracle() {
    let s = bundled("lemma-ext4").unwrap();
    let h = s.harness().unwrap();
    let w = s.writes(&h).unwrap();
    assert_eq!(oracle_commit_time(&h, &w, 1), None);
    assert!(oracle_commit_boundary(&h, &w, 1));
    assert!(!oracle_commit_boundary(&h, &w, 0));
}

#[test]
fn journal_mode_prefix_agrees() {
    let mut s = bundled("prefix-violation").unwrap();
    s.journal_mode = Some(persistcheck::profile::JournalMode::Journal);
    let h = s.harness().unwrap();
    assert!(!oracle_prefix_violated(&h, 0));
    assert!(s
        .run_check(CheckName::PrefixConsistency, &s.bounds)
        .unwrap()
        .verdict
        .holds());
}
