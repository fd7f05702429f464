use super::*;
use crate::faas::FunctionKind;
use crate::spec_exec::Outcome;
use proptest::prelude::*;

fn tick(tick: u64, duration_ms: f64, players: usize) -> TickSample {
    TickSample {
        tick,
        start_ms: tick as f64 * 50.0,
        duration_ms,
        breakdown: Breakdown { actions_ms: duration_ms, ..Breakdown::default() },
        players,
        wall_ms: 0.25,
    }
}

fn eff(id: u64, e: f64, outcome: Outcome) -> EfficiencyRecord {
    EfficiencyRecord {
        invocation_id: id,
        construct_id: 1,
        issued_tick: id,
        resolved_tick: id + 5,
        start_tick: id + 1,
        total_steps: 100,
        duplicated_steps: ((1.0 - e) * 100.0).round() as u32,
        efficiency: e,
        outcome,
    }
}

#[test]
fn nearest_rank() {
    let v: Vec<f64> = (1..=100).map(f64::from).collect();
    assert_eq!(percentile(&v, 50.0), Some(50.0));
    assert_eq!(percentile(&v, 95.0), Some(95.0));
    assert_eq!(percentile(&v, 100.0), Some(100.0));
    assert_eq!(percentile(&v, 0.1), Some(1.0));
    assert_eq!(percentile(&[7.0, 3.0, 5.0], 50.0), Some(5.0));
    assert_eq!(percentile(&[], 50.0), None);
}

#[test]
fn max_players_uses_five_percent_rule() {
    let mut g = BTreeMap::new();
    // 4 of 100 over budget qualifies; 5 of 100 does not.
    g.insert(10, (0..100).map(|i| if i < 4 { 80.0 } else { 10.0 }).collect::<Vec<_>>());
    g.insert(20, (0..100).map(|i| if i < 5 { 80.0 } else { 10.0 }).collect::<Vec<_>>());
    assert_eq!(max_supported_players(&g, 50.0), 10);
    g.insert(30, vec![50.0; 10]);
    assert_eq!(max_supported_players(&g, 50.0), 30);
    let none: BTreeMap<usize, Vec<f64>> = [(5, vec![60.0])].into_iter().collect();
    assert_eq!(max_supported_players(&none, 50.0), 0);
    assert_eq!(max_supported_players(&BTreeMap::new(), 50.0), 0);
}

#[test]
fn groups_by_player_count() {
    let s = [tick(1, 5.0, 1), tick(2, 6.0, 1), tick(3, 7.0, 2)];
    let g = group_by_players(&s);
    assert_eq!(g[&1], vec![5.0, 6.0]);
    assert_eq!(g[&2], vec![7.0]);
}

#[test]
fn efficiency_summary_counts_full() {
    let recs: Vec<_> = (0..10).map(|i| eff(i, if i < 7 { 1.0 } else { 0.5 }, Outcome::Accepted)).collect();
    let row = efficiency_row(20, &recs).unwrap();
    assert_eq!(row.count, 10);
    assert!((row.full - 0.7).abs() < 1e-12);
    assert_eq!(row.median, 1.0);
    assert_eq!(row.p5, 0.5);
    assert!(efficiency_row(0, &[]).is_none());
}

#[test]
fn all_lost_invocations_have_zero_efficiency() {
    let recs: Vec<_> = (0..5).map(|i| eff(i, 0.0, Outcome::Lost)).collect();
    let mut groups = BTreeMap::new();
    groups.insert(0, recs);
    let rows = efficiency_summary(&groups);
    assert_eq!(rows.len(), 1);
    assert_eq!((rows[0].p95, rows[0].full), (0.0, 0.0));
}

#[test]
fn cost_bills_handler_time() {
    let rec = |worker_ms, e2e| InvocationRecord {
        id: 1,
        function: FunctionKind::ScSimulate,
        enqueue_tick: 0,
        enqueue_ms: 0.0,
        end_to_end_ms: e2e,
        worker_ms,
        was_cold: false,
        payload_bytes: 10,
        reply_bytes: 10,
    };
    let rate = RateCard { per_gb_second: 1.0, memory_gb: 2.0, per_request: 0.5 };
    let c = cost_report(&[rec(1000.0, 1500.0), rec(0.0, 500.0)], &rate, 3600.0);
    assert!((c.invocation_seconds - 1.5).abs() < 1e-12);
    assert!((c.dollars - (1.5 * 2.0 + 1.0)).abs() < 1e-12);
    assert!((c.dollars_per_hour - c.dollars).abs() < 1e-12);
}

#[test]
fn rcdf_comparison() {
    let a = [1.0, 2.0, 3.0];
    let b = [2.0, 2.0, 9.0];
    assert!(rcdf_left_of(&a, &b, &[50.0, 99.0, 100.0]));
    assert!(!rcdf_left_of(&b, &a, &[50.0, 100.0]));
    assert!(!rcdf_left_of(&[], &a, &[50.0]));
}

#[test]
fn emit_and_load_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    let log = MetricsLog {
        tick_samples: vec![tick(1, 3.5, 2), tick(2, 61.0, 2)],
        invocations: vec![],
        efficiency: vec![eff(3, 0.75, Outcome::Accepted), eff(4, 0.0, Outcome::Stale)],
        storage_reads: vec![StorageRead {
            key: "c.1.-2".into(),
            issued_ms: 1.0,
            latency_ms: 12.5,
            hit: false,
            kind: ReadKind::Demand,
        }],
        distance_series: vec![DistanceSample { tick: 20, time_s: 1.0, blocks: 140 }],
    };
    let manifest = serde_json::json!({ "scenario": { "name": "t", "warmup_s": 0.0 }, "tick_budget_ms": 50.0 });
    emit(&log, dir.path(), &manifest).unwrap();
    let head = fs::read_to_string(dir.path().join(TICK_FILE)).unwrap();
    assert!(head.starts_with("tick,start_ms,duration_ms,actions_ms,sc_ms,chunk_load_ms,emit_ms,players,wall_ms\n"));
    let inv = fs::read_to_string(dir.path().join(INVOCATION_FILE)).unwrap();
    assert_eq!(inv.lines().count(), 1);
    let (back, m) = load(dir.path()).unwrap();
    assert_eq!(back, log);
    assert_eq!(m, manifest);
    let text = report(dir.path()).unwrap();
    assert!(text.contains("max supported players: 0"), "{text}");
    assert!(text.contains("storage demand reads: 1"), "{text}");
}

#[test]
fn warmup_filters() {
    let log = MetricsLog {
        tick_samples: vec![tick(1, 1.0, 0), tick(700, 1.0, 0)],
        efficiency: vec![eff(5, 1.0, Outcome::Accepted), eff(700, 1.0, Outcome::Accepted)],
        ..MetricsLog::default()
    };
    assert_eq!(log.steady_ticks(30_000.0).count(), 1);
    assert_eq!(log.steady_efficiency(600).len(), 1);
}

proptest! {
    #[test]
    fn percentile_is_an_element_and_monotone(v in prop::collection::vec(0.0f64..1e4, 1..200), p in 1.0f64..100.0) {
        let x = percentile(&v, p).unwrap();
        prop_assert!(v.contains(&x));
        prop_assert!(percentile(&v, (p + 1.0).min(100.0)).unwrap() >= x);
    }

    #[test]
    fn max_players_never_grows_when_more_ticks_overrun(
        groups in prop::collection::btree_map(1usize..50, prop::collection::vec(0.0f64..100.0, 1..60), 1..8),
        bump in 0.0f64..60.0,
    ) {
        let before = max_supported_players(&groups, 50.0);
        let worse: BTreeMap<usize, Vec<f64>> =
            groups.iter().map(|(k, v)| (*k, v.iter().map(|d| d + bump).collect())).collect();
        prop_assert!(max_supported_players(&worse, 50.0) <= before);
    }
}
