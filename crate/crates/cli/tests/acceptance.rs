//! Acceptance suite: one test per release criterion, each printing a
//! PASS line when it holds. Run with
//! `cargo test -p sentinel-cli --test acceptance -- --nocapture`.

use std::collections::HashSet;
use std::path::Path;
use std::process::Command;
use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use sentinel_core::enforcement::mock::{MockBehavior, MockGateway};
use sentinel_core::enforcement::{
    load_ticket_log, save_registry, DeliveryState, Registry, RegistryEntry,
};
use sentinel_core::engine::{Engine, EngineSettings, TrackReport};
use sentinel_core::geometry::{estimate_homography, transform_point, BBox, Point2, Quad};
use sentinel_core::metrics::{cer_batch, evaluate_speeds, map50, DetectionFrame, SpeedTruth};
use sentinel_core::scenario::{generate_scenario, BoxModel, NoiseSpec, ScenarioSpec, VehicleSpec};
use sentinel_core::speed::Calibration;
use sentinel_core::stream::{write_stream, GunRecord};
use sentinel_core::track::{assign, Detection, Tracker, TrackerParams};

const BIN: &str = env!("CARGO_BIN_EXE_sentinel");

fn calibration() -> Calibration {
    let quad = Quad::new(
        Point2::new(710.0, 300.0),
        Point2::new(1210.0, 300.0),
        Point2::new(1560.0, 980.0),
        Point2::new(360.0, 980.0),
    )
    .unwrap();
    Calibration::solve("cam-01", "Kampala Rd", 25.0, 50.0, quad, 14.0, 25.0).unwrap()
}

fn staggered_vehicles(speeds: &[f64]) -> Vec<VehicleSpec> {
    let lanes = [1.75, 5.25, 8.75, 12.25];
    speeds
        .iter()
        .enumerate()
        .map(|(i, &speed_kmh)| VehicleSpec {
            entry_frame: (i as u64) * 20,
            speed_kmh,
            lane_offset_m: lanes[i % lanes.len()],
            plate: format!("UB{}{:03}X", (b'A' + (i as u8)) as char, 100 + i),
            class: "car".to_string(),
        })
        .collect()
}

fn scene_spec(speeds: &[f64], noise: NoiseSpec) -> ScenarioSpec {
    let vehicles = staggered_vehicles(speeds);
    let duration = speeds.len() as u64 * 20 + 130;
    ScenarioSpec {
        calibration: calibration(),
        duration_frames: duration,
        vehicles,
        noise,
        boxes: BoxModel::default(),
    }
}

fn run_engine(
    spec: &ScenarioSpec,
    seed: u64,
) -> (Vec<TrackReport>, Vec<sentinel_core::stream::TruthRecord>) {
    let scenario = generate_scenario(spec, seed).unwrap();
    let out = Engine::run(
        EngineSettings::new(spec.calibration.clone()),
        Registry::empty(),
        None,
        scenario.frames.into_iter().map(Ok),
    )
    .unwrap();
    (out.reports, scenario.truth)
}

/// Criterion 1: on a 20-vehicle scene with commanded speeds uniform in
/// [30, 90] km/h, 2 px box jitter and 10% dropped detections, at least 95%
/// of matched vehicles estimate within ±10 km/h; the noiseless variant
/// estimates every vehicle within 1 km/h. Both runs complete in under 10 s.
#[test]
fn criterion_1_speed_accuracy() {
    let started = Instant::now();

    let mut rng = ChaCha8Rng::seed_from_u64(20_001);
    let speeds: Vec<f64> = (0..20).map(|_| rng.gen_range(30.0..=90.0)).collect();

    let noisy = scene_spec(
        &speeds,
        NoiseSpec {
            bbox_jitter_px: 2.0,
            drop_probability: 0.1,
            score_min: 0.9,
            score_max: 0.9,
        },
    );
    let (reports, truth) = run_engine(&noisy, 77);
    let eval = evaluate_speeds(&reports, &SpeedTruth::Synthetic(truth), 10.0).unwrap();
    assert!(
        eval.matched >= 19,
        "only {} of 20 vehicles matched a track",
        eval.matched
    );
    assert!(
        eval.fraction_within_margin >= 0.95,
        "within ±10 km/h: {:.3} (MAE {:.2})",
        eval.fraction_within_margin,
        eval.mae_kmh
    );

    let clean = scene_spec(&speeds, NoiseSpec::default());
    let (reports, truth) = run_engine(&clean, 1);
    let eval_clean = evaluate_speeds(&reports, &SpeedTruth::Synthetic(truth), 1.0).unwrap();
    assert_eq!(
        eval_clean.matched, 20,
        "all vehicles must match on clean input"
    );
    assert_eq!(
        eval_clean.fraction_within_margin, 1.0,
        "noiseless errors above 1 km/h: max {:.3}",
        eval_clean.max_abs_error_kmh
    );

    let elapsed = started.elapsed();
    assert!(elapsed.as_secs_f64() < 10.0, "took {elapsed:?}");
    println!(
        "[acceptance] criterion 1 (speed accuracy ±10 km/h): PASS \
         (noisy within-margin {:.0}%, clean max err {:.3} km/h, {:.2}s)",
        eval.fraction_within_margin * 100.0,
        eval_clean.max_abs_error_kmh,
        elapsed.as_secs_f64()
    );
}

/// Criterion 2: a 42 km/h gun record against a 43 km/h engine estimate is
/// an absolute error of 1 and counts as within the margin.
#[test]
fn criterion_2_gun_anchor_pair() {
    let report = TrackReport {
        track_id: 5,
        class: "car".to_string(),
        first_frame: 0,
        last_frame: 100,
        first_timestamp_ms: 0,
        last_timestamp_ms: 4000,
        plate: None,
        owner: None,
        speed_samples: Vec::new(),
        assigned_speed_kmh: Some(43.0),
        violation: false,
        ticket_id: None,
    };
    let truth = SpeedTruth::Gun(vec![GunRecord {
        serial: "TC-0042".to_string(),
        timestamp_ms: 2_000,
        measured_distance_m: 48.0,
        measured_speed_kmh: 42.0,
        n_frames: 7,
    }]);
    let eval = evaluate_speeds(&[report], &truth, 10.0).unwrap();
    assert_eq!(eval.matched, 1);
    assert!((eval.rows[0].abs_error_kmh - 1.0).abs() < 1e-12);
    assert!(eval.rows[0].within_margin);
    println!("[acceptance] criterion 2 (43 vs 42 km/h fixture): PASS");
}

fn random_quad(rng: &mut ChaCha8Rng) -> Quad {
    loop {
        let top = rng.gen_range(80.0..260.0);
        let bottom = rng.gen_range(300.0..700.0);
        let j = |rng: &mut ChaCha8Rng| rng.gen_range(-25.0..25.0);
        let quad = Quad::new(
            Point2::new(-top / 2.0 + j(rng), j(rng)),
            Point2::new(top / 2.0 + j(rng), j(rng)),
            Point2::new(bottom / 2.0 + j(rng), 400.0 + j(rng)),
            Point2::new(-bottom / 2.0 + j(rng), 400.0 + j(rng)),
        );
        if let Ok(q) = quad {
            return q;
        }
    }
}

/// Criterion 3: 1,000 random non-degenerate quad pairs solve with corner
/// residuals under 1e-6 of the target diagonal and invert cleanly.
#[test]
fn criterion_3_homography_residuals() {
    let mut rng = ChaCha8Rng::seed_from_u64(30_003);
    for trial in 0..1_000 {
        let source = random_quad(&mut rng);
        let target = random_quad(&mut rng);
        let h =
            estimate_homography(&source, &target).unwrap_or_else(|e| panic!("trial {trial}: {e}"));
        let h_inv = h.inverse().unwrap();
        let tol_fwd = 1e-6 * target.diagonal();
        let tol_rt = 1e-6 * source.diagonal();
        for (s, t) in source.corners().iter().zip(target.corners()) {
            let mapped = transform_point(&h, *s).unwrap();
            assert!(
                mapped.distance(&t) < tol_fwd,
                "trial {trial}: residual {}",
                mapped.distance(&t)
            );
            let back = transform_point(&h_inv, mapped).unwrap();
            assert!(
                back.distance(s) < tol_rt,
                "trial {trial}: roundtrip {}",
                back.distance(s)
            );
        }
    }
    println!("[acceptance] criterion 3 (homography, 1000 random quad pairs): PASS");
}

/// Independent oracle for criterion 4: enumerate every injective
/// assignment of rows into columns.
fn brute_force_min_cost(cost: &[Vec<f64>]) -> f64 {
    fn recurse(cost: &[Vec<f64>], row: usize, used: &mut Vec<bool>, acc: f64, best: &mut f64) {
        let rows = cost.len();
        let cols = cost[0].len();
        if row == rows.min(cols) {
            *best = best.min(acc);
            return;
        }
        for c in 0..cols {
            if !used[c] {
                used[c] = true;
                recurse(cost, row + 1, used, acc + cost[row][c], best);
                used[c] = false;
            }
        }
    }
    let rows = cost.len();
    let cols = cost[0].len();
    // transpose when rows > cols so the recursion assigns the smaller side
    if rows > cols {
        let t: Vec<Vec<f64>> = (0..cols)
            .map(|c| (0..rows).map(|r| cost[r][c]).collect())
            .collect();
        return brute_force_min_cost(&t);
    }
    let mut best = f64::INFINITY;
    recurse(cost, 0, &mut vec![false; cols], 0.0, &mut best);
    best
}

/// Criterion 4: assignment total cost equals the brute-force permutation
/// minimum exactly on 1,000 random matrices up to 5x5.
#[test]
fn criterion_4_assignment_optimality() {
    let mut rng = ChaCha8Rng::seed_from_u64(40_004);
    for trial in 0..1_000 {
        let rows = rng.gen_range(1..=5);
        let cols = rng.gen_range(1..=5);
        let cost: Vec<Vec<f64>> = (0..rows)
            .map(|_| (0..cols).map(|_| rng.gen_range(0.0..1.0)).collect())
            .collect();
        let result = assign(&cost, f64::INFINITY);
        assert_eq!(result.pairs.len(), rows.min(cols));
        let total: f64 = result.pairs.iter().map(|&(r, c)| cost[r][c]).sum();
        let oracle = brute_force_min_cost(&cost);
        assert_eq!(total, oracle, "trial {trial} ({rows}x{cols})");
    }
    println!("[acceptance] criterion 4 (assignment vs brute force, 1000 trials): PASS");
}

/// Criterion 5: noiseless multi-vehicle scenes produce exactly one track ID
/// per ground-truth vehicle, and the crossing fixture keeps both original
/// IDs through the low-confidence dip.
#[test]
fn criterion_5_tracker_id_stability() {
    for n in [1, 2, 4, 7, 10] {
        let speeds: Vec<f64> = (0..n).map(|i| 35.0 + 5.0 * i as f64).collect();
        let spec = scene_spec(&speeds, NoiseSpec::default());
        let scenario = generate_scenario(&spec, 5).unwrap();

        // fixture sanity: the scene really is non-overlapping
        for frame in &scenario.frames {
            for i in 0..frame.detections.len() {
                for j in (i + 1)..frame.detections.len() {
                    assert_eq!(
                        sentinel_core::geometry::iou(
                            &frame.detections[i].bbox,
                            &frame.detections[j].bbox
                        ),
                        0.0,
                        "vehicles overlap at frame {}",
                        frame.frame_index
                    );
                }
            }
        }

        let out = Engine::run(
            EngineSettings::new(spec.calibration.clone()),
            Registry::empty(),
            None,
            scenario.frames.into_iter().map(Ok),
        )
        .unwrap();
        assert_eq!(
            out.reports.len(),
            n,
            "{n}-vehicle scene emitted wrong track count"
        );
    }

    // crossing fixture: scores dip below the high threshold mid-crossing
    let mut tracker = Tracker::new(TrackerParams::default());
    let mut first: Option<Vec<u64>> = None;
    let mut ids = HashSet::new();
    for t in 0..50 {
        let tf = t as f64;
        let score = if (20..30).contains(&t) { 0.3 } else { 0.9 };
        let ax = 50.0 + 4.0 * tf;
        let bx = 250.0 - 4.0 * tf;
        let frame = vec![
            Detection {
                bbox: BBox::new(ax, 80.0, ax + 40.0, 120.0).unwrap(),
                score,
                class: "car".to_string(),
            },
            Detection {
                bbox: BBox::new(bx, 100.0, bx + 40.0, 140.0).unwrap(),
                score,
                class: "car".to_string(),
            },
        ];
        let step = tracker.step(&frame).unwrap();
        let labels: Vec<u64> = step.labels.iter().map(|l| l.unwrap()).collect();
        ids.extend(labels.iter().copied());
        match &first {
            None => first = Some(labels),
            Some(f) => assert_eq!(&labels, f, "identity switch at frame {t}"),
        }
    }
    assert_eq!(ids.len(), 2, "crossing fixture should use exactly two IDs");
    println!("[acceptance] criterion 5 (tracker ID stability + crossing rescue): PASS");
}

/// Independent full-matrix edit-distance oracle for criterion 6.
#[allow(clippy::needless_range_loop)]
fn wagner_fischer(a: &str, b: &str) -> usize {
    let a: Vec<char> = a.chars().collect();
    let b: Vec<char> = b.chars().collect();
    let mut d = vec![vec![0usize; b.len() + 1]; a.len() + 1];
    for (i, row) in d.iter_mut().enumerate() {
        row[0] = i;
    }
    for j in 0..=b.len() {
        d[0][j] = j;
    }
    for i in 1..=a.len() {
        for j in 1..=b.len() {
            let sub = d[i - 1][j - 1] + usize::from(a[i - 1] != b[j - 1]);
            d[i][j] = sub.min(d[i - 1][j] + 1).min(d[i][j - 1] + 1);
        }
    }
    d[a.len()][b.len()]
}

/// Criterion 6: character-error-rate agrees with an independent
/// dynamic-programming oracle on 1,000 random pairs, and average precision
/// reproduces the hand-derived 5/6 fixture and scores perfect predictions
/// at exactly 1.0.
#[test]
fn criterion_6_metric_oracles() {
    let mut rng = ChaCha8Rng::seed_from_u64(60_006);
    let alphabet: Vec<char> = "ABCDEFGH01234567".chars().collect();
    let rand_string = |rng: &mut ChaCha8Rng| -> String {
        let len = rng.gen_range(1..=10);
        (0..len)
            .map(|_| alphabet[rng.gen_range(0..alphabet.len())])
            .collect()
    };
    for trial in 0..1_000 {
        let predicted = rand_string(&mut rng);
        let truth = rand_string(&mut rng);
        let ours = cer_batch(&[(predicted.clone(), truth.clone())]).unwrap();
        let oracle = wagner_fischer(&predicted, &truth) as f64 / truth.chars().count() as f64;
        assert_eq!(ours, oracle, "trial {trial}: {predicted:?} vs {truth:?}");
    }

    let bx = |x1: f64, y1: f64, x2: f64, y2: f64| BBox::new(x1, y1, x2, y2).unwrap();
    let fixture = vec![DetectionFrame {
        ground_truth: vec![bx(0.0, 0.0, 10.0, 10.0), bx(100.0, 0.0, 110.0, 10.0)],
        predictions: vec![
            (bx(0.0, 0.0, 10.0, 10.0), 0.9),
            (bx(50.0, 50.0, 60.0, 60.0), 0.8),
            (bx(100.0, 0.0, 110.0, 10.0), 0.7),
        ],
    }];
    let ap = map50(&fixture).unwrap();
    assert!((ap - 5.0 / 6.0).abs() < 1e-12, "fixture ap {ap}");

    let perfect = vec![DetectionFrame {
        ground_truth: vec![bx(0.0, 0.0, 10.0, 10.0), bx(30.0, 0.0, 42.0, 9.0)],
        predictions: vec![
            (bx(0.0, 0.0, 10.0, 10.0), 1.0),
            (bx(30.0, 0.0, 42.0, 9.0), 1.0),
        ],
    }];
    assert_eq!(map50(&perfect).unwrap(), 1.0);
    println!("[acceptance] criterion 6 (CER and mAP50 oracles): PASS");
}

struct CliFixture {
    dir: tempfile::TempDir,
}

impl CliFixture {
    /// Lays out a 70 km/h single-vehicle violation scene, registry and
    /// engine config under a fresh temp dir.
    fn new(retry_base_ms: u64) -> Self {
        let dir = tempfile::tempdir().unwrap();
        let root = dir.path();

        let mut spec = scene_spec(&[70.0], NoiseSpec::default());
        spec.vehicles[0].plate = "ABC123A".to_string();
        let scenario = generate_scenario(&spec, 7).unwrap();
        write_stream(root.join("stream.jsonl"), &scenario.frames).unwrap();
        sentinel_core::config::save_calibration(root.join("calibration.json"), &spec.calibration)
            .unwrap();
        save_registry(
            root.join("registry.csv"),
            &[RegistryEntry {
                plate: "ABC123A".to_string(),
                owner_name: "User A".to_string(),
                phone: "+256700000001".to_string(),
                email: "user.a@example.com".to_string(),
                vehicle_details: "Vehicle X".to_string(),
            }],
        )
        .unwrap();
        std::fs::write(
            root.join("config.json"),
            format!(
                r#"{{
  "calibration": "calibration.json",
  "registry": "registry.csv",
  "output_dir": "out",
  "gateway": {{ "timeout_ms": 2000, "retry_max_attempts": 3, "retry_base_ms": {retry_base_ms} }}
}}
"#
            ),
        )
        .unwrap();
        Self { dir }
    }

    fn path(&self, name: &str) -> std::path::PathBuf {
        self.dir.path().join(name)
    }

    fn run(&self, args: &[&str], env: &[(&str, &str)]) -> std::process::Output {
        let mut cmd = Command::new(BIN);
        cmd.args(args).current_dir(self.dir.path());
        for (k, v) in env {
            cmd.env(k, v);
        }
        cmd.output().expect("spawning the sentinel binary")
    }
}

fn count_states(log: &Path) -> (usize, usize, usize) {
    let records = load_ticket_log(log).unwrap();
    let mut sent = 0;
    let mut failed = 0;
    let mut other = 0;
    for t in &records {
        match t.delivery {
            DeliveryState::Sent { .. } => sent += 1,
            DeliveryState::Failed { .. } => failed += 1,
            _ => other += 1,
        }
    }
    (sent, failed, other)
}

/// Criterion 7: the violation fixture produces exactly one sent ticket
/// through the mock gateway, an immediate ticket-send re-run sends nothing,
/// and a run against a dead gateway ends with a failed ticket and exit 1.
#[test]
fn criterion_7_end_to_end_ticketing() {
    let fixture = CliFixture::new(5);
    let gw = MockGateway::spawn(MockBehavior::Succeed).unwrap();
    let env = [
        ("SENTINEL_SMS_URL", gw.base_url()),
        ("SENTINEL_SMS_USER", "sandbox".to_string()),
        ("SENTINEL_SMS_KEY", "test-key".to_string()),
    ];
    let env_refs: Vec<(&str, &str)> = env.iter().map(|(k, v)| (*k, v.as_str())).collect();

    let out = fixture.run(
        &["run", "--stream", "stream.jsonl", "--config", "config.json"],
        &env_refs,
    );
    assert!(
        out.status.success(),
        "run failed: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    assert_eq!(gw.requests().len(), 1, "exactly one SMS expected");
    let log_path = fixture.path("out/tickets.jsonl");
    assert_eq!(count_states(&log_path), (1, 0, 0));

    // immediate re-run of the dispatcher: nothing left to send
    let out = fixture.run(&["ticket", "send", "--log", "out/tickets.jsonl"], &env_refs);
    assert!(out.status.success());
    let stdout = String::from_utf8_lossy(&out.stdout);
    assert!(stdout.contains("0 sent"), "unexpected: {stdout}");
    assert_eq!(gw.requests().len(), 1, "re-run must not transmit");
    assert_eq!(count_states(&log_path), (1, 0, 0));

    // gateway down: delivery fails and the run exits 1
    let dead = std::net::TcpListener::bind("127.0.0.1:0").unwrap();
    let dead_url = format!("http://{}", dead.local_addr().unwrap());
    drop(dead);
    let fixture2 = CliFixture::new(5);
    let env2 = [
        ("SENTINEL_SMS_URL", dead_url),
        ("SENTINEL_SMS_USER", "sandbox".to_string()),
        ("SENTINEL_SMS_KEY", "test-key".to_string()),
    ];
    let env2_refs: Vec<(&str, &str)> = env2.iter().map(|(k, v)| (*k, v.as_str())).collect();
    let out = fixture2.run(
        &["run", "--stream", "stream.jsonl", "--config", "config.json"],
        &env2_refs,
    );
    assert_eq!(out.status.code(), Some(1), "gateway-down run must exit 1");
    let (sent, failed, _) = count_states(&fixture2.path("out/tickets.jsonl"));
    assert_eq!((sent, failed), (0, 1));
    println!("[acceptance] criterion 7 (end-to-end ticketing + idempotent resend): PASS");
}

/// Criterion 8: identical inputs produce byte-identical reports, ticket
/// logs and annotation sidecars across runs.
#[test]
fn criterion_8_run_determinism() {
    let fixture = CliFixture::new(5);
    let mut snapshots = Vec::new();
    for pass in 0..2 {
        let out = fixture.run(
            &["run", "--stream", "stream.jsonl", "--config", "config.json"],
            &[],
        );
        assert!(
            out.status.success(),
            "pass {pass}: {}",
            String::from_utf8_lossy(&out.stderr)
        );
        snapshots.push((
            std::fs::read(fixture.path("out/reports.jsonl")).unwrap(),
            std::fs::read(fixture.path("out/tickets.jsonl")).unwrap(),
            std::fs::read(fixture.path("out/annotations.jsonl")).unwrap(),
        ));
    }
    assert_eq!(
        snapshots[0].0, snapshots[1].0,
        "reports differ between runs"
    );
    assert_eq!(
        snapshots[0].1, snapshots[1].1,
        "ticket logs differ between runs"
    );
    assert_eq!(
        snapshots[0].2, snapshots[1].2,
        "annotations differ between runs"
    );
    assert!(!snapshots[0].0.is_empty() && !snapshots[0].1.is_empty());
    println!("[acceptance] criterion 8 (byte-identical reruns): PASS");
}
