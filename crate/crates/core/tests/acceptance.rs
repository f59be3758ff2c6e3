//! End-to-end acceptance checks. Each criterion prints one PASS/FAIL line;
//! the binary exits non-zero if any criterion fails.

use std::panic::{catch_unwind, AssertUnwindSafe};
use std::time::Instant;

use nalgebra::{DVector, Vector3};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use teleop_core::controller::{force_bound, DesiredMotion, ImpedanceConfig, ImpedanceController};
use teleop_core::depthcodec::{decode_bytes, encode_depth, synth_frame, synth_scene, FrameFamily, SceneParams};
use teleop_core::dynamics::{HalfSpace, RobotModel, RobotState};
use teleop_core::geometry::{rot_exp, Transform, Wrench};
use teleop_core::haptics::{cyclic_intensity, ContactEdge, ContactFsm, HapticConfig, HapticKind, HapticRenderer, WrenchMsg};
use teleop_core::leader::{desired_tool_pose, ClutchState, ViewState};
use teleop_core::netsim::{
    rtt_monte_carlo, ChannelProfile, Fragmenter, LatencyModel, Link, LinkParams, StreamId, Watchdog, COMMAND_WIRE_LEN,
};
use teleop_core::observer::{wrench_estimate, MomentumObserver, DEFAULT_GAIN};
use teleop_core::par::Execution;
use teleop_core::session::{metrics, replay, run_session, ChannelConfig, LeaderConfig, Record, SessionConfig};
use teleop_core::sweep::{force_sweep, WallPushConfig};

/// Outcome of one criterion: pass flag and a one-line summary.
type Outcome = (bool, String);

fn main() {
    let criteria: [(&str, fn() -> Outcome); 9] = [
        ("clutch algebra", clutch_algebra),
        ("1:1 indexing", indexing),
        ("force saturation", force_saturation),
        ("observer fidelity", observer_fidelity),
        ("haptics", haptics),
        ("depth codec", depth_codec),
        ("transport", transport),
        ("bandwidth", bandwidth),
        ("determinism", determinism),
    ];
    let filter: Vec<String> = std::env::args().skip(1).filter(|a| !a.starts_with('-')).collect();
    let mut failed = 0;
    for (name, f) in criteria {
        if !filter.is_empty() && !filter.iter().any(|p| name.contains(p.as_str())) {
            continue;
        }
        let start = Instant::now();
        let (ok, detail) = match catch_unwind(AssertUnwindSafe(f)) {
            Ok(r) => r,
            Err(e) => {
                let msg = e
                    .downcast_ref::<String>()
                    .cloned()
                    .or_else(|| e.downcast_ref::<&str>().map(|s| s.to_string()))
                    .unwrap_or_default();
                (false, format!("panicked: {msg}"))
            }
        };
        println!(
            "[{}] {name}: {detail} ({:.1} s)",
            if ok { "PASS" } else { "FAIL" },
            start.elapsed().as_secs_f64()
        );
        failed += usize::from(!ok);
    }
    if failed > 0 {
        println!("{failed} acceptance criteria failed");
        std::process::exit(1);
    }
}

// ---------------------------------------------------------------------------
// Helpers

fn random_pose(rng: &mut ChaCha8Rng) -> Transform {
    let w = Vector3::from_fn(|_, _| rng.random_range(-3.0..3.0));
    let p = Vector3::from_fn(|_, _| rng.random_range(-1.0..1.0));
    Transform::new(rot_exp(&w), p)
}

fn pose_err(a: &Transform, b: &Transform) -> f64 {
    (a.translation - b.translation).norm().max(a.rotation.angle_to(&b.rotation))
}

fn home_pose() -> Transform {
    let model = RobotModel::franka_like();
    model.tool_pose(&model.rest_posture())
}

/// Independent scan of `u·sech²(u)`, the normalized saturated spring force.
fn scanned_peak() -> f64 {
    (0..=500_000)
        .map(|i| {
            let u = i as f64 * 1e-5;
            u / u.cosh().powi(2)
        })
        .fold(0.0, f64::max)
}

fn quiet(leader: LeaderConfig) -> SessionConfig {
    let mut cfg = SessionConfig {
        leader,
        channel: ChannelConfig {
            profile: "ideal".into(),
            ..Default::default()
        },
        ..Default::default()
    };
    cfg.cameras.count = 0;
    cfg
}

// ---------------------------------------------------------------------------
// Criteria

fn clutch_algebra() -> Outcome {
    const TOL: f64 = 1e-9;
    let mut rng = ChaCha8Rng::seed_from_u64(0xc1a7c4);
    let mut worst = [0.0f64; 5];
    let sequences = 10_000;
    for _ in 0..sequences {
        let home = random_pose(&mut rng);
        let mut clutch = ClutchState {
            t_d: random_pose(&mut rng),
            ..ClutchState::default()
        };
        let mut view = ViewState::default();
        let mut hold = false;
        let mut w_p = random_pose(&mut rng);
        let mut a_p = view.update_view(&w_p, hold);
        let steps = rng.random_range(5..40);
        for _ in 0..steps {
            match rng.random_range(0..6) {
                // Engage: the desired pose must not move at the engage instant.
                0 if !clutch.engaged => {
                    let before = desired_tool_pose(&home, &clutch);
                    clutch.engage_clutch(&a_p).unwrap();
                    clutch.update_command(&a_p);
                    worst[1] = worst[1].max(pose_err(&before, &desired_tool_pose(&home, &clutch)));
                }
                1 if clutch.engaged => clutch.release(),
                // Hold toggle without phone motion: rendered pose continuous.
                2 => {
                    hold = !hold;
                    let next = view.update_view(&w_p, hold);
                    worst[4] = worst[4].max(pose_err(&next, &a_p));
                    a_p = next;
                }
                // Pure translation of the phone in A.
                3 => {
                    let d = Vector3::from_fn(|_, _| rng.random_range(-0.05..0.05));
                    let before = desired_tool_pose(&home, &clutch);
                    w_p = Transform::new(w_p.rotation, w_p.translation + view.a_w.rotation.inverse() * d);
                    a_p = view.update_view(&w_p, hold);
                    if clutch.engaged {
                        clutch.update_command(&a_p);
                        let after = desired_tool_pose(&home, &clutch);
                        if !hold {
                            worst[2] = worst[2].max(after.rotation.angle_to(&before.rotation));
                        }
                    }
                }
                // Pure rotation about the phone origin.
                4 => {
                    let dw = Vector3::from_fn(|_, _| rng.random_range(-0.3..0.3));
                    let before = desired_tool_pose(&home, &clutch);
                    w_p = Transform::new(rot_exp(&dw) * w_p.rotation, w_p.translation);
                    a_p = view.update_view(&w_p, hold);
                    if clutch.engaged {
                        clutch.update_command(&a_p);
                        let after = desired_tool_pose(&home, &clutch);
                        if !hold {
                            worst[3] = worst[3].max((after.translation - before.translation).norm());
                        }
                    }
                }
                // Arbitrary motion; while disengaged the offset is frozen.
                _ => {
                    let before = clutch.t_d;
                    w_p = random_pose(&mut rng);
                    a_p = view.update_view(&w_p, hold);
                    if clutch.engaged {
                        clutch.update_command(&a_p);
                    } else {
                        assert!(!clutch.update_command(&a_p));
                        worst[0] = worst[0].max(pose_err(&before, &clutch.t_d));
                    }
                }
            }
        }
    }
    let ok = worst.iter().all(|w| *w <= TOL);
    (
        ok,
        format!(
            "{sequences} sequences; max err frozen {:.1e}, engage {:.1e}, translation->orientation {:.1e}, \
             rotation->translation {:.1e}, hold toggle {:.1e} (tol {TOL:.0e})",
            worst[0], worst[1], worst[2], worst[3], worst[4]
        ),
    )
}

fn indexing() -> Outcome {
    let cfg = SessionConfig::default();
    let LeaderConfig::Indexing { cycles, range, .. } = cfg.leader else {
        unreachable!("default leader is the indexing script")
    };
    let start = Instant::now();
    let log = run_session(cfg).expect("session runs");
    let wall = start.elapsed().as_secs_f64();
    let m = metrics(&log);
    let ok = !m.aborted
        && (m.leader_z_range - 0.150).abs() < 1e-3
        && range == 0.15
        && cycles >= 4
        && m.clutch_engagements >= 4
        && m.desired_z_range >= 0.5
        && m.duration_s < 10.0
        && wall < 60.0;
    (
        ok,
        format!(
            "leader z-range {:.0} mm, {} clutch cycles, desired z-range {:.0} mm (>= 500), actual {:.0} mm, \
             {:.2} s simulated (< 10), {wall:.2} s wall (< 60)",
            m.leader_z_range * 1e3,
            m.clutch_engagements,
            m.desired_z_range * 1e3,
            m.actual_z_range * 1e3,
            m.duration_s
        ),
    )
}

fn force_saturation() -> Outcome {
    let base = WallPushConfig::default();
    let peak = scanned_peak();
    let f_max = base.controller.f_max[2];
    let oracle = peak * f_max;
    let limit = oracle * 1.1;
    let library = force_bound(&base.controller)[2];
    let depths: Vec<f64> = [0.01, 0.03, 0.05, 0.077, 0.1, 0.15, 0.2, 0.3, 0.5, 0.75, 1.0].to_vec();
    let mut worst_true: f64 = 0.0;
    let mut worst_est: f64 = 0.0;
    let mut peak_transient: f64 = 0.0;
    for dir in [-Vector3::z(), Vector3::x()] {
        let cfg = WallPushConfig {
            direction: dir,
            ..base.clone()
        };
        for r in force_sweep(&cfg, &depths, Execution::Parallel).expect("sweep runs") {
            worst_true = worst_true.max(r.settled_true);
            worst_est = worst_est.max(r.settled_est);
            peak_transient = peak_transient.max(r.peak_true);
        }
    }
    let ok = (library - oracle).abs() < 1e-6 * oracle && worst_true <= limit && worst_est <= limit;
    (
        ok,
        format!(
            "scanned peak {peak:.5}*F_max = {oracle:.3} N (library {library:.3} N); {} depths to 1 m on 2 walls: \
             steady true {worst_true:.2} N, estimated {worst_est:.2} N (limit {limit:.2} N); \
             peak transient {peak_transient:.1} N",
            depths.len()
        ),
    )
}

fn observer_fidelity() -> Outcome {
    let model = RobotModel::franka_like();
    let ctl = ImpedanceController::new(ImpedanceConfig::default(), &model).unwrap();
    let desired = DesiredMotion::hold(model.tool_pose(&ctl.q_rest));
    let dt = 1e-3;
    let tau_c = 1.0 / DEFAULT_GAIN;
    let settle = 1.0;

    // Returns the worst relative force error at 5 time constants after the
    // step and, for a zero push, the worst |tau_hat| over the run.
    let run = |push: Wrench, duration: f64| -> (f64, f64) {
        let mut obs = MomentumObserver::new(model.dof(), DEFAULT_GAIN).unwrap();
        let mut st = RobotState::at_rest(ctl.q_rest.clone());
        let mut tau_prev = DVector::zeros(model.dof());
        let steps = (duration / dt).round() as usize;
        let check = ((settle + 5.0 * tau_c) / dt).round() as usize;
        let (mut err, mut drift) = (f64::NAN, 0.0f64);
        for i in 0..=steps {
            let terms = model.terms(&st.q, &st.qdot);
            let tau_hat = obs.update(&terms, &st.qdot, &tau_prev, dt).unwrap().clone();
            drift = drift.max(tau_hat.amax());
            if i == check {
                let est = wrench_estimate(&terms.jacobian, &tau_hat);
                let f = push.force.norm();
                err = (est.wrench.force.norm() - f).abs() / f;
            }
            let out = ctl.torque(&st, &terms, &desired).unwrap();
            let w = if st.t >= settle - 1e-12 { push } else { Wrench::zero() };
            st = model.step(&st, &out.tau, &w, dt).unwrap();
            tau_prev = out.tau;
        }
        (err, drift)
    };
    let mut worst: f64 = 0.0;
    for dir in [Vector3::x(), Vector3::y(), -Vector3::z(), Vector3::new(1.0, -1.0, 1.0).normalize()] {
        let (err, _) = run(Wrench::new(dir * 10.0, Vector3::zeros()), settle + 6.0 * tau_c);
        worst = worst.max(err);
    }
    let (_, drift) = run(Wrench::zero(), 10.0);
    let ok = worst < 0.05 && drift < 0.05;
    (
        ok,
        format!(
            "10 N steps in 4 directions: worst force-norm error {:.2} % after 5 tau (< 5 %); \
             10 s zero-input drift {drift:.2e} N*m (< 0.05)",
            worst * 100.0
        ),
    )
}

fn haptics() -> Outcome {
    let cfg = HapticConfig::default();
    let mut notes = Vec::new();
    let mut ok = true;

    // Activation threshold.
    let mut fsm = ContactFsm::new(cfg.f_on, cfg.f_off).unwrap();
    let below = fsm.update(cfg.f_on - 1e-9);
    let at = fsm.update(cfg.f_on);
    ok &= below == ContactEdge::None && at == ContactEdge::Made;
    let msg = |t: f64, f: f64| WrenchMsg {
        seq: (t * 1e3) as u32,
        t,
        wrench: Wrench::new(Vector3::new(0.0, 0.0, f), Vector3::zeros()),
        in_contact: false,
        impulse: 0.0,
    };
    let mut r = HapticRenderer::new(cfg.clone()).unwrap();
    let first_below = r.process(&msg(0.0, 9.999));
    let first_at = r.process(&msg(0.01, 10.0));
    ok &= first_below.is_empty() && first_at.first().is_some_and(|e| e.kind == HapticKind::Impulse);
    notes.push(format!("activates at {} N, not at {} N", cfg.f_on, cfg.f_on - 1e-9));

    // Chattering: ramps up and down with uniform ±1 N noise, plus long
    // dwells right at each threshold.
    let mut rng = ChaCha8Rng::seed_from_u64(99);
    let mut fsm = ContactFsm::new(cfg.f_on, cfg.f_off).unwrap();
    let (mut made, mut broken) = (0, 0);
    let cycles = 50;
    let mut profile = Vec::new();
    for _ in 0..cycles {
        profile.extend((0..200).map(|i| 20.0 * i as f64 / 200.0));
        profile.extend(std::iter::repeat_n(cfg.f_on, 300));
        profile.extend((0..200).map(|i| 20.0 - 20.0 * i as f64 / 200.0));
        profile.extend(std::iter::repeat_n(cfg.f_off, 300));
        profile.extend(std::iter::repeat_n(0.0, 50));
    }
    // Noise of ±1 N with the 3 N hysteresis band: one made and one broken
    // edge per ramp.
    for f in profile {
        match fsm.update((f + rng.random_range(-1.0..=1.0)).max(0.0)) {
            ContactEdge::Made => made += 1,
            ContactEdge::Broken => broken += 1,
            ContactEdge::None => {}
        }
    }
    ok &= made == cycles && broken == cycles;
    notes.push(format!("{made} made / {broken} broken edges over {cycles} noisy ramps"));

    // Intensity endpoints.
    let at_on = cyclic_intensity(&Vector3::new(cfg.f_on, 0.0, 0.0), &cfg);
    let at_full = cyclic_intensity(&Vector3::new(0.0, 0.0, 40.0), &cfg);
    ok &= (at_on - cfg.cyclic_min).abs() < 1e-12 && (at_full - 1.0).abs() < 1e-12;
    notes.push(format!("cyclic intensity {at_on} at 10 N, {at_full} at 40 N"));

    // Impulse against impact speed: identical descents onto a table at
    // increasing speeds.
    let home = home_pose();
    let ctl = ImpedanceConfig::default();
    let knee = teleop_core::controller::saturation_peak().0 * ctl.f_max[2] / ctl.k_nom[2];
    let gap = 0.05;
    let mut rows = Vec::new();
    for duration in [12.0, 8.0, 5.0, 3.0, 1.4, 0.7, 0.4] {
        let mut cfg = quiet(LeaderConfig::Descent {
            depth: gap + knee,
            duration,
            hold: 0.5,
        });
        cfg.scene.planes.push(HalfSpace::floor(home.translation.z - gap, 2e4, 200.0));
        let log = run_session(cfg).expect("descent runs");
        let mut speed = None;
        let mut prev: Option<(f64, f64)> = None;
        for rec in &log.records {
            if let Record::State { t, actual, w_true, .. } = rec {
                if w_true.force.norm() > 0.0 {
                    speed = prev.map(|(t0, z0)| (z0 - actual.translation.z) / (t - t0));
                    break;
                }
                prev = Some((*t, actual.translation.z));
            }
        }
        let impulse = log.records.iter().find_map(|rec| match rec {
            Record::Contact { made: true, impulse, .. } => Some(*impulse),
            _ => None,
        });
        let rendered = log.records.iter().find_map(|rec| match rec {
            Record::Haptic(e) if e.kind == HapticKind::Impulse => Some(e.intensity),
            _ => None,
        });
        match (speed, impulse, rendered) {
            (Some(v), Some(i), Some(r)) => {
                ok &= (r - i.clamp(0.0, 1.0)).abs() < 1e-6;
                rows.push((v, i, r));
            }
            _ => {
                ok = false;
                notes.push(format!("descent over {duration} s produced no impulse"));
            }
        }
    }
    rows.sort_by(|a, b| a.0.total_cmp(&b.0));
    // Strict on the unclamped intensity; the rendered one saturates at 1.
    let monotone = rows.windows(2).all(|w| w[1].0 > w[0].0 && w[1].1 > w[0].1 && w[1].2 >= w[0].2);
    ok &= monotone && rows.len() == 7;
    notes.push(format!(
        "impulse vs impact speed (unclamped/rendered) {}",
        rows.iter()
            .map(|(v, i, r)| format!("{v:.3} m/s->{i:.3}/{r:.2}"))
            .collect::<Vec<_>>()
            .join(", ")
    ));
    (ok, notes.join("; "))
}

fn depth_codec() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(2024);
    let per_family = 2_000;
    let mut frames = 0;
    let mut lossless = 0;
    let mut corrupt = 0;
    let mut rejected = 0;
    for family in FrameFamily::ALL {
        for i in 0..per_family {
            let (w, h) = if i % 250 == 0 {
                (848, 480)
            } else {
                (rng.random_range(1..=160), rng.random_range(1..=120))
            };
            let f = synth_frame(family, w, h, rng.random());
            let bytes = encode_depth(&f, i as u32, i as u64).unwrap().to_bytes();
            frames += 1;
            lossless += usize::from(decode_bytes(&bytes).is_ok_and(|d| d == f));
            // One corruption per frame: bit flip, byte burst, truncation or
            // trailing garbage.
            let mut bad = bytes.clone();
            match i % 4 {
                0 => {
                    let bit = rng.random_range(0..bad.len() * 8);
                    bad[bit / 8] ^= 1 << (bit % 8);
                }
                1 => {
                    let at = rng.random_range(0..bad.len());
                    let n = rng.random_range(1..=16).min(bad.len() - at);
                    for b in &mut bad[at..at + n] {
                        *b ^= rng.random_range(1..=255u8);
                    }
                }
                2 => bad.truncate(rng.random_range(0..bad.len())),
                _ => bad.extend((0..rng.random_range(1..8)).map(|_| rng.random::<u8>())),
            }
            corrupt += 1;
            rejected += usize::from(decode_bytes(&bad).is_err());
        }
    }

    // Tabletop ratio and throughput on 848x480 scenes with 2 mm noise.
    let scenes: Vec<_> = (0..30)
        .map(|seed| {
            synth_scene(&SceneParams {
                seed,
                ..SceneParams::default()
            })
        })
        .collect();
    let t0 = Instant::now();
    let coded: Vec<Vec<u8>> = scenes.iter().map(|f| encode_depth(f, 0, 0).unwrap().to_bytes()).collect();
    let enc = t0.elapsed().as_secs_f64();
    let t1 = Instant::now();
    let roundtrip_ok = coded.iter().zip(&scenes).all(|(b, f)| decode_bytes(b).unwrap() == *f);
    let dec = t1.elapsed().as_secs_f64();
    let raw: usize = scenes.iter().map(|f| f.raw_bytes()).sum();
    let ratio = raw as f64 / coded.iter().map(Vec::len).sum::<usize>() as f64;
    let fps = scenes.len() as f64 / (enc + dec);

    let ok = frames >= 10_000 && lossless == frames && rejected == corrupt && roundtrip_ok && ratio >= 2.0;
    (
        ok,
        format!(
            "{lossless}/{frames} frames bit-exact over 5 families; {rejected}/{corrupt} corrupted payloads rejected; \
             tabletop ratio {ratio:.2}:1 (>= 2); 848x480 encode+decode {fps:.0} fps on one core (target 120, tracked)"
        ),
    )
}

fn transport() -> Outcome {
    let mut ok = true;
    let mut notes = Vec::new();
    for name in ["wifi", "5g-nsa"] {
        let profile = ChannelProfile::preset(name).unwrap();
        let params = LinkParams::from_profile(&profile).unwrap();
        let s = rtt_monte_carlo(&params, 20, 500, 20_000, 5, Execution::Parallel).unwrap();
        let got = [s.min_ms, s.mean_ms, s.max_ms];
        let within = got.iter().zip(profile.rtt_ms).all(|(g, t)| (g - t).abs() <= 0.15 * t);
        ok &= within;
        notes.push(format!(
            "{name} RTT {:.1}/{:.1}/{:.1} ms vs {:?} (fitted profile, 15 %)",
            got[0], got[1], got[2], profile.rtt_ms
        ));
    }

    // Watchdog against command gaps around the timeout, checked every
    // control tick.
    let trips_for = |gap_us: u64| {
        let mut w = Watchdog::new();
        let mut next_cmd = 0;
        let mut tripped = false;
        for now in (0..2_000_000u64).step_by(1_000) {
            if now >= next_cmd {
                w.on_command(now, true);
                next_cmd += gap_us;
            }
            tripped |= w.check(now);
        }
        tripped
    };
    let quiet_gaps: Vec<u64> = (10..=99).map(|ms| ms * 1_000).collect();
    let trip_gaps: Vec<u64> = (101..=200).map(|ms| ms * 1_000).collect();
    let never = quiet_gaps.iter().all(|g| !trips_for(*g));
    let always = trip_gaps.iter().all(|g| trips_for(*g));
    ok &= never && always;
    notes.push(format!(
        "watchdog: no trip for gaps 10..=99 ms ({never}), trip for 101..=200 ms ({always})"
    ));

    // Command latency with and without a saturated video backlog.
    let params = LinkParams {
        latency: LatencyModel::fixed(10.0),
        line_rate_mbps: 300.0,
        video_cap_mbps: 80.0,
        video_burst_bytes: 65_536.0,
        video_queue_bytes: 2_000_000,
        ..LinkParams::ideal()
    };
    let command_latencies = |video: bool| -> Vec<f64> {
        let mut link = Link::new(params.clone(), 3).unwrap();
        let mut frag = Fragmenter::new();
        let mut lat = Vec::new();
        let mut sent_at = std::collections::HashMap::new();
        for tick in 0..2_000u64 {
            let now = tick * 1_000;
            if video && tick % 33 == 0 {
                // Four depth streams offered at ~150 Mbit/s against the 80 cap.
                for cam in 0..4u8 {
                    for d in frag.fragment(StreamId::Depth(cam), tick as u32, now, &vec![7u8; 150_000]).unwrap() {
                        link.send(now, d);
                    }
                }
            }
            if tick % 10 == 0 {
                let seq = (tick / 10) as u32;
                for d in frag.fragment(StreamId::Command, seq, now, &[0u8; COMMAND_WIRE_LEN]).unwrap() {
                    link.send(now, d);
                }
                sent_at.insert(seq, now);
            }
            for d in link.poll(now) {
                if d.datagram.stream == StreamId::Command {
                    lat.push((d.at_us - sent_at[&d.datagram.frame_id]) as f64 / 1e3);
                }
            }
        }
        lat
    };
    let base = command_latencies(false);
    let loaded = command_latencies(true);
    let added = base
        .iter()
        .zip(&loaded)
        .map(|(a, b)| b - a)
        .fold(f64::NEG_INFINITY, f64::max);
    ok &= base.len() == loaded.len() && added < 1.0;
    notes.push(format!(
        "command latency added by a saturated video backlog: max {added:.3} ms over {} commands (< 1 ms)",
        loaded.len()
    ));
    (ok, notes.join("; "))
}

fn bandwidth() -> Outcome {
    let cfg = SessionConfig::default();
    let cams = &cfg.cameras;
    let setup = format!("{} cameras {}x{}@{}", cams.count, cams.width, cams.height, cams.fps);
    let ok_setup = cams.count == 4 && cams.width == 848 && cams.height == 480 && cams.fps == 30;
    let m = metrics(&run_session(cfg).expect("session runs"));
    let ok = ok_setup && (0.1..=1.0).contains(&m.up_mbps) && (10.0..=100.0).contains(&m.down_mbps);
    (
        ok,
        format!(
            "{setup}: leader->follower {:.3} Mbit/s (0.1-1), follower->leader {:.1} Mbit/s (10-100), \
             video offered {:.1} Mbit/s, depth {:.1} fps delivered",
            m.up_mbps, m.down_mbps, m.down_video_offered_mbps, m.depth_fps
        ),
    )
}

fn determinism() -> Outcome {
    let home = home_pose();
    let mut cfg = SessionConfig::default();
    cfg.seed = 42;
    cfg.duration = 3.0;
    cfg.leader = LeaderConfig::Random { max_jump: 0.3 };
    cfg.channel.profile = "5g-nsa".into();
    cfg.channel.loss = Some(0.01);
    cfg.channel.reorder_prob = 0.05;
    cfg.channel.reorder_extra_ms = 5.0;
    cfg.cameras.count = 2;
    cfg.scene.planes.push(HalfSpace::floor(home.translation.z - 0.05, 2e4, 200.0));
    let a = run_session(cfg.clone()).expect("first run").to_jsonl();
    let b = run_session(cfg.clone()).expect("second run").to_jsonl();
    let log = teleop_core::session::SessionLog::read(&a[..]).unwrap();
    let replayed = replay(&log).unwrap();
    let ok = a == b && replayed.is_none();
    (
        ok,
        format!(
            "two runs of a lossy 5G session with contact: {} bytes each, identical {}; replay {}",
            a.len(),
            a == b,
            if replayed.is_none() { "identical" } else { "differs" }
        ),
    )
}
