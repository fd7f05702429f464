use super::*;
use crate::server::ScMode;
use proptest::prelude::*;

fn view(tick: u64, pos: BlockPos) -> BotView {
    BotView { tick, time_s: tick as f64 / 20.0, pos }
}

#[test]
fn action_mix_frequencies() {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let n = 1_000_000;
    let mut counts = [0usize; 5];
    for _ in 0..n {
        let c = draw_action_class(&mut rng);
        counts[ACTION_MIX.iter().position(|(k, _)| *k == c).unwrap()] += 1;
    }
    for ((_, w), c) in ACTION_MIX.iter().zip(counts) {
        let f = c as f64 / n as f64;
        assert!((f - *w as f64 / 100.0).abs() < 0.005, "{f} vs {w}%");
    }
}

#[test]
fn star_walkers_spread_evenly() {
    let spawn = BlockPos::new(0, 4, 0);
    let n = 4;
    let dirs: Vec<(i32, i32)> = (0..n)
        .map(|k| {
            let mut b = Bot::new(k, n, BehaviorSpec::StarWalk { speed: 3 }, 1, spawn);
            match b.next_action(1, &view(1, spawn)).unwrap().kind {
                ActionKind::Move { target, speed: 3 } => (target.x.signum(), target.z.signum()),
                other => panic!("{other:?}"),
            }
        })
        .collect();
    assert_eq!(dirs, vec![(1, 0), (0, 1), (-1, 0), (0, -1)]);
    let mut b = Bot::new(0, n, BehaviorSpec::StarWalk { speed: 3 }, 1, spawn);
    b.next_action(1, &view(1, spawn)).unwrap();
    assert!(b.next_action(1, &view(2, spawn.offset(1, 0, 0))).is_none());
}

#[test]
fn increasing_speed_steps_with_time() {
    let spec = BehaviorSpec::StarWalkIncreasing { start_speed: 1, step_s: 200.0, max_speed: 8 };
    let mut b = Bot::new(0, 5, spec, 1, BlockPos::new(0, 4, 0));
    let p = BlockPos::new(0, 4, 0);
    let speed_at = |b: &mut Bot, t: f64| {
        b.next_action(1, &BotView { tick: 0, time_s: t, pos: p }).map(|a| match a.kind {
            ActionKind::Move { speed, .. } => speed,
            k => panic!("{k:?}"),
        })
    };
    assert_eq!(speed_at(&mut b, 0.0), Some(1));
    assert_eq!(speed_at(&mut b, 199.9), None);
    assert_eq!(speed_at(&mut b, 200.0), Some(2));
    assert_eq!(speed_at(&mut b, 1400.0), Some(8));
    assert_eq!(speed_at(&mut b, 5000.0), None);
}

#[test]
fn random_bot_waits_for_completion() {
    let spawn = BlockPos::new(0, 4, 0);
    let mut b = Bot::new(0, 1, BehaviorSpec::RandomActions, 11, spawn);
    let mut tick = 1;
    let mut pos = spawn;
    let mut issued = 0;
    while issued < 200 {
        tick += 1;
        let Some(a) = b.next_action(1, &view(tick, pos)) else { continue };
        issued += 1;
        a.validate().unwrap();
        match a.kind {
            ActionKind::Move { target, .. } => {
                assert!((target.x - pos.x).abs() <= MOVE_REACH && (target.z - pos.z).abs() <= MOVE_REACH);
                assert!(b.next_action(1, &view(tick + 1, pos)).is_none() || target == pos);
                pos = target;
            }
            ActionKind::Stand { ticks } => {
                assert!(b.next_action(1, &view(tick + ticks as u64 - 1, pos)).is_none());
                tick += ticks as u64;
            }
            ActionKind::Break { pos: p } | ActionKind::Place { pos: p, .. } => {
                assert!((p.x - pos.x).abs() <= EDIT_REACH && (p.y - pos.y).abs() <= EDIT_REACH);
            }
            ActionKind::Chat { .. } | ActionKind::SetInventory { .. } => {}
        }
    }
}

#[test]
fn bounded_moves_stay_near_spawn() {
    let spawn = BlockPos::new(5, 4, -3);
    let mut b = Bot::new(2, 3, BehaviorSpec::BoundedMoveOnly { radius: 64 }, 5, spawn);
    for i in 0..500 {
        let a = b.next_action(1, &view(i, spawn)).unwrap();
        let ActionKind::Move { target, .. } = a.kind else { panic!() };
        let (dx, dz) = ((target.x - spawn.x) as f64, (target.z - spawn.z) as f64);
        assert!(dx.hypot(dz) <= 64.8);
        b.pending = Pending::Nothing;
    }
}

#[test]
fn joins_follow_the_schedule() {
    let s = JoinSchedule { count: 5, interval_s: 10.0, first_s: 0.0 };
    assert_eq!((0..5).map(|k| s.join_time_s(k)).collect::<Vec<_>>(), vec![0.0, 10.0, 20.0, 30.0, 40.0]);
}

#[test]
fn fixture_copies_do_not_touch() {
    let fx = ScFixture { count: 10, template: ConstructTemplate::Clock484, spacing_chunks: 2 };
    let config = ServerConfig::default();
    let spawn = BlockPos::new(0, 4, 0);
    let bounds = fx.bounds(&config, spawn);
    assert_eq!(bounds.len(), 10);
    for (i, a) in bounds.iter().enumerate() {
        for b in &bounds[i + 1..] {
            assert!(!a.expanded(2).intersects(b));
        }
    }
    let r = fx.radius_blocks(&config, spawn);
    assert!(bounds.iter().all(|b| b.min.x.abs() <= r && b.max.z.abs() <= r));
}

#[test]
fn scenario_toml_and_overrides() {
    let text = r#"
name = "sweep"
duration_s = 120
seed = 4
[players]
count = 3
[behavior]
kind = "star_walk"
speed = 3
[sc]
count = 4
template = "Clock252"
[server]
sc_mode = "offloaded"
"#;
    let vars = vec![("SERVO_SERVER__OFFLOAD__TICK_LEAD".to_string(), "10".to_string())];
    let s: Scenario = settings::from_str_with(text, "t", "SERVO_", vars).unwrap();
    s.validate().unwrap();
    assert_eq!(s.players.count, 3);
    assert_eq!(s.players.interval_s, 10.0);
    assert_eq!(s.behavior, BehaviorSpec::StarWalk { speed: 3 });
    assert_eq!(s.sc.as_ref().unwrap().spacing_chunks, 2);
    assert_eq!(s.server.sc_mode, ScMode::Offloaded);
    assert_eq!(s.server.offload.tick_lead, 10);
    assert_eq!(s.warmup_s, 30.0);
    let back: Scenario = toml::from_str(&toml::to_string(&s).unwrap()).unwrap();
    assert_eq!(back, s);
    assert_ne!(s.server_config(0).seed, s.server_config(1).seed);
}

#[test]
fn invalid_scenarios_are_rejected() {
    let s = Scenario { behavior: BehaviorSpec::StarWalk { speed: 0 }, ..Scenario::default() };
    assert!(s.validate().is_err());
    let s = Scenario { duration_s: 0.0, ..Scenario::default() };
    assert!(s.validate().is_err());
}

#[test]
fn in_process_run_is_deterministic() {
    let sc = Scenario {
        duration_s: 20.0,
        warmup_s: 0.0,
        seed: 2,
        players: JoinSchedule { count: 3, interval_s: 2.0, first_s: 0.0 },
        behavior: BehaviorSpec::RandomActions,
        sc: Some(ScFixture { count: 2, template: ConstructTemplate::Clock252, spacing_chunks: 2 }),
        server: ServerConfig { view_distance: 32, sc_mode: ScMode::Offloaded, ..ServerConfig::default() },
        ..Scenario::default()
    };
    let a = run_scenario(&sc, 0).unwrap();
    let b = run_scenario(&sc, 0).unwrap();
    assert_eq!(a.server.players(), 3);
    assert_eq!(a.server.registry.len(), 2);
    assert_eq!(a.log.tick_samples.len(), 400);
    let strip = |l: &MetricsLog| l.tick_samples.iter().map(|t| (t.duration_ms, t.players)).collect::<Vec<_>>();
    assert_eq!(strip(&a.log), strip(&b.log));
    assert_eq!(a.log.efficiency, b.log.efficiency);
    assert!(a.server.world_snapshot() == b.server.world_snapshot());
}

#[test]
fn remote_bots_play_against_a_server() {
    use crate::server::net::Frontend;
    use std::sync::atomic::AtomicBool;
    let fe = Frontend::listen("127.0.0.1:0").unwrap();
    let addr = fe.addr;
    let stop = Arc::new(AtomicBool::new(false));
    let flag = stop.clone();
    let server = thread::spawn(move || {
        let config = ServerConfig { view_distance: 32, clock: ClockMode::RealTime, ..ServerConfig::default() };
        let mut s = Server::new(config).unwrap();
        s.serve(&fe, &flag);
        s.samples().len()
    });
    let sc = Scenario {
        duration_s: 2.0,
        players: JoinSchedule { count: 2, interval_s: 0.2, first_s: 0.0 },
        behavior: BehaviorSpec::RandomActions,
        ..Scenario::default()
    };
    let summary = run_remote(&sc, addr).unwrap();
    stop.store(true, Ordering::Relaxed);
    assert!(server.join().unwrap() > 10);
    assert_eq!((summary.joined, summary.refused, summary.failed), (2, 0, 0));
    assert!(summary.actions > 0);
}

#[test]
fn remote_bots_report_unreachable_servers() {
    let listener = std::net::TcpListener::bind("127.0.0.1:0").unwrap();
    let addr = listener.local_addr().unwrap();
    drop(listener);
    let sc = Scenario {
        duration_s: 1.0,
        players: JoinSchedule { count: 1, interval_s: 1.0, first_s: 0.0 },
        ..Scenario::default()
    };
    let summary = run_remote(&sc, addr).unwrap();
    assert_eq!((summary.joined, summary.failed), (0, 1));
}

proptest! {
    #[test]
    fn random_edits_avoid_constructs(seed in any::<u64>(), x in -4i32..4, z in -4i32..4) {
        let spawn = BlockPos::new(0, 4, 0);
        let protected = Bounds::new(BlockPos::new(x, 3, z), BlockPos::new(x + 2, 5, z + 2));
        let mut b = Bot::new(0, 1, BehaviorSpec::RandomActions, seed, spawn);
        b.exclude([protected]);
        for t in 0..60 {
            b.pending = Pending::Nothing;
            if let Some(a) = b.next_action(1, &view(t, spawn)) {
                if let ActionKind::Break { pos } | ActionKind::Place { pos, .. } = a.kind {
                    prop_assert!(!protected.expanded(CONSTRUCT_MARGIN).contains(&pos));
                }
            }
        }
    }
}
