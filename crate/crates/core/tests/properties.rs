//! Randomized properties over small workloads and the simulators.

mod common;

use std::collections::BTreeSet;

use proptest::prelude::*;

use persistcheck::checker::{
    check_flush_noop, check_plp_equivalence, check_retry_soundness, explore_report,
};
use persistcheck::device::DeviceConfig;
use persistcheck::fault::{crash_images, enumerate_schedules, Bounds};
use persistcheck::model::{durable, FilePath, WriteItem};
use persistcheck::profile::{FsProfile, ProfileName};
use persistcheck::scenario::{bundled, Scenario};
use persistcheck::sim::retry::{PolicyKind, RetryPolicy};
use persistcheck::sim::rseq::RseqModel;
use persistcheck::sim::{simulate_retry_storm, simulate_rseq};
use persistcheck::syscall::Env;
use persistcheck::workload::{Harness, InitialFile, Op};

use common::*;

fn path(i: u8) -> FilePath {
    format!("d/f{i}").parse().unwrap()
}

fn op() -> impl Strategy<Value = Op> {
    prop_oneof![
        (0u8..2, 0u32..2).prop_map(|(f, index)| Op::Write {
            path: path(f),
            index
        }),
        (0u8..2).prop_map(|f| Op::Fsync { path: path(f) }),
        (0u8..2).prop_map(|f| Op::FsyncRetry { path: path(f) }),
        Just(Op::FsyncDir { dir: "d".into() }),
        (0u8..2, 0u8..3).prop_map(|(a, b)| Op::Rename {
            from: path(a),
            to: path(b)
        }),
        (2u8..3).prop_map(|f| Op::Create {
            path: path(f),
            exclusive: true
        }),
    ]
}

fn profile() -> impl Strategy<Value = ProfileName> {
    prop_oneof![
        Just(ProfileName::Ext4Ordered),
        Just(ProfileName::Ext4Writeback),
        Just(ProfileName::Ext4Journal),
        Just(ProfileName::Xfs),
        Just(ProfileName::Btrfs),
        Just(ProfileName::Ext4RestoreDirty),
    ]
}

fn device() -> impl Strategy<Value = DeviceConfig> {
    prop_oneof![
        Just(DeviceConfig::default()),
        Just(DeviceConfig::NO_CACHE),
        Just(DeviceConfig {
            volatile_cache_present: true,
            volatile_cache_enabled: true,
            fua_supported: false,
            plp: true,
        }),
        Just(DeviceConfig {
            fua_supported: true,
            ..DeviceConfig::default()
        }),
    ]
}

fn harness(profile: ProfileName, device: DeviceConfig, ops: Vec<Op>) -> Harness {
    Harness::new(
        Env::new(FsProfile::named(profile)),
        device,
        vec![
            InitialFile {
                path: path(0),
                pages: 1,
            },
            InitialFile {
                path: path(1),
                pages: 0,
            },
        ],
        ops,
        false,
    )
    .unwrap()
}

fn workload() -> impl Strategy<Value = Harness> {
    (profile(), device(), prop::collection::vec(op(), 0..4))
        .prop_map(|(p, d, ops)| harness(p, d, ops))
}

fn bounds(k: usize, crash: bool) -> Bounds {
    Bounds {
        max_faults: k,
        allow_crash: crash,
        ..Bounds::default()
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    #[test]
    fn durable_matches_oracle(h in workload()) {
        let w = h.data_writes();
        for r in naive_runs(&h, 1, false) {
            let st = r.last();
            let ready = w.iter().all(|x| matches!(x, WriteItem::Data(v) if st.app.issued.contains_key(v)));
            if ready {
                prop_assert_eq!(durable(st, &w).unwrap(), oracle_durable(st, &w));
            }
        }
    }

    #[test]
    fn crash_images_are_linearizations(h in workload()) {
        for r in naive_runs(&h, 1, false) {
            for st in &r.states {
                let fast: BTreeSet<_> = crash_images(&st.device).into_iter().collect();
                prop_assert_eq!(fast, linearized_images(&st.device));
            }
        }
    }

    #[test]
    fn enumeration_is_complete(h in workload(), k in 0usize..2, crash in any::<bool>()) {
        let fast: BTreeSet<_> = enumerate_schedules(&h, &bounds(k, crash))
            .unwrap()
            .into_iter()
            .map(|s| (s.plan(), s.crash_after))
            .collect();
        let slow: BTreeSet<_> = naive_runs(&h, k, crash).into_iter().map(|r| (r.plan, r.crash_after)).collect();
        prop_assert_eq!(fast, slow);
    }

    #[test]
    fn schedules_grow_with_fault_bound(h in workload(), k in 0usize..2) {
        let small: BTreeSet<_> = enumerate_schedules(&h, &bounds(k, true)).unwrap().into_iter().collect();
        let large: BTreeSet<_> = enumerate_schedules(&h, &bounds(k + 1, true)).unwrap().into_iter().collect();
        prop_assert!(small.is_subset(&large));
    }

    #[test]
    fn violations_persist_under_larger_bounds(h in workload()) {
        let w = h.data_writes();
        prop_assume!(check_retry_soundness(&h, &w, &bounds(0, false)).is_ok());
        let at = |k| check_retry_soundness(&h, &w, &bounds(k, false)).unwrap().verdict.holds();
        prop_assert!(at(1) || !at(2));
        prop_assert!(at(0) || !at(1));
    }

    #[test]
    fn exploration_is_deterministic(h in workload()) {
        let w = h.data_writes();
        let a = explore_report(&h, &w, &bounds(1, true)).unwrap();
        let b = explore_report(&h, &w, &bounds(1, true)).unwrap();
        prop_assert_eq!(a, b);
    }

    #[test]
    fn flush_is_a_noop_without_volatile_cache(p in profile(), ops in prop::collection::vec(op(), 0..4), plp in any::<bool>()) {
        let dev = if plp {
            DeviceConfig { volatile_cache_present: true, volatile_cache_enabled: true, fua_supported: false, plp: true }
        } else {
            DeviceConfig::NO_CACHE
        };
        let h = harness(p, dev, ops);
        prop_assert!(check_flush_noop(&h).unwrap().verdict.holds());
        prop_assert!(!oracle_flush_noop_violated(&h));
    }

    #[test]
    fn plp_cache_behaves_like_no_cache(h in workload()) {
        prop_assert!(check_plp_equivalence(&h, &bounds(0, true)).unwrap().verdict.holds());
        prop_assert!(oracle_plp_equivalent(&h));
    }

    #[test]
    fn scenario_round_trips(h in workload(), k in 0usize..3, crash in any::<bool>()) {
        let mut s = bundled("lemma-ext4").unwrap();
        s.profile = ProfileName::Ext4Ordered;
        s.device = h.device;
        s.workload = h.ops.clone();
        s.initial_files = h.initial_files.clone();
        s.write_set = None;
        s.bounds = bounds(k, crash);
        s.checks.clear();
        prop_assert_eq!(Scenario::parse(&s.to_json()).unwrap(), s);
    }

    #[test]
    fn retry_accounting_balances(seed in any::<u64>(), kind in 0usize..4, attempts in 1u32..6) {
        let mut sim = bundled("herd-collapse").unwrap().retry_sim.unwrap();
        sim.policy = RetryPolicy {
            kind: [PolicyKind::Immediate, PolicyKind::FixedDelay, PolicyKind::Exponential, PolicyKind::ExponentialFullJitter][kind],
            base: 1.0,
            cap: 16.0,
            max_attempts: attempts,
        };
        sim.service.clients = 200;
        let r = simulate_retry_storm(&sim.service, &sim.policy, seed, 60.0).unwrap();
        prop_assert!(r.accounting.balanced(), "{:?}", r.accounting);
        prop_assert!(r.accounting.dropped + r.accounting.wasted <= r.accounting.issued + r.accounting.retried);
    }
}

#[test]
fn rseq_mean_within_three_standard_errors() {
    for (i, (length, p)) in [(1, 0.5), (5, 0.1), (3, 0.2), (8, 0.05), (2, 0.0)]
        .into_iter()
        .enumerate()
    {
        let m = RseqModel {
            length,
            p,
            trials: 50_000,
        };
        let r = simulate_rseq(&m, 1000 + i as u64).unwrap();
        assert!(
            (r.mean_attempts - m.expected_attempts()).abs() <= 3.0 * r.std_error,
            "L={length} p={p}: mean {} expected {} se {}",
            r.mean_attempts,
            m.expected_attempts(),
            r.std_error
        );
        assert_eq!(r.histogram.values().sum::<u64>(), m.trials);
    }
}

/// Closed form checked against the geometric series it abbreviates.
#[test]
fn rseq_closed_form_matches_series() {
    for (length, p) in [(1, 0.5), (5, 0.1), (10, 0.02)] {
        let q: f64 = (1.0f64 - p).powi(length);
        let series: f64 = (1..10_000)
            .map(|n| n as f64 * q * (1.0 - q).powi(n - 1))
            .sum();
        let m = RseqModel {
            length: length as u32,
            p,
            trials: 1,
        };
        assert!((m.expected_attempts() - series).abs() < 1e-9);
    }
}

#[test]
fn full_jitter_recovers_where_immediate_collapses_across_seeds() {
    let collapse = bundled("herd-collapse").unwrap().retry_sim.unwrap();
    let jitter = bundled("herd-jitter").unwrap().retry_sim.unwrap();
    for seed in 0..8 {
        let a = simulate_retry_storm(&collapse.service, &collapse.policy, seed, collapse.horizon)
            .unwrap();
        let b =
            simulate_retry_storm(&jitter.service, &jitter.policy, seed, jitter.horizon).unwrap();
        assert!(!a.recovered, "seed {seed}: immediate recovered");
        assert!(
            b.recovered,
            "seed {seed}: jitter did not recover ({})",
            b.final_goodput_fraction
        );
        assert!(b.final_goodput_fraction > a.final_goodput_fraction);
    }
}
