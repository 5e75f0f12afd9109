//! Acceptance suite. Every test prints one `criterion N: PASS|FAIL` line
//! with its measurements and runtime, then asserts the same conditions.

use std::io::Write as _;
use std::path::Path;
use std::time::{Duration, Instant};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crfmot::association::{validate_trackset, AssociationConfig, Providers, Track, TrackSet};
use crfmot::evalsim::mot::{parse_mot, rows_to_trackset, write_mot};
use crfmot::evalsim::{
    ablation_table, evaluate, generate_scene, read_mot, run_ablation, AblationSummary, MotRole, SceneConfig,
};
use crfmot::graph::DifficultPairConfig;
use crfmot::inference::{decode, energy_integer, energy_relaxed, gradient, infer, infer_observed};
use crfmot::learning::{
    decoded_accuracy, mean_loss, param_gradient, param_gradient_fd, sequence_windows, train, Model, Schedule,
    TrainingWindow,
};
use crfmot::potentials::{FeatureConfig, LogisticPairwise, LogisticUnary};
use crfmot::synthetic::{edgeless_graph, oracle_check, planted_graph, random_graph, random_labeling, PlantedConfig};
use crfmot::tracklets::LinkThresholds;
use crfmot::{CrfParams, Detection, Error, Execution, RelaxedLabeling, Vec2};

const EXEC: Execution = Execution::Parallel;

/// Writes straight to stderr so the line shows up without `--nocapture`.
fn report(n: u32, pass: bool, detail: &str, elapsed: Duration, limit: Duration) {
    let verdict = if pass && elapsed < limit { "PASS" } else { "FAIL" };
    let _ = writeln!(
        std::io::stderr(),
        "criterion {n}: {verdict}  {detail}  [{:.2}s, limit {}s]",
        elapsed.as_secs_f64(),
        limit.as_secs()
    );
}

fn rel(a: f64, b: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(1.0)
}

fn norm_rel(a: &[f64], b: &[f64]) -> f64 {
    let norm = |v: &[f64]| v.iter().map(|x| x * x).sum::<f64>().sqrt();
    let diff: Vec<f64> = a.iter().zip(b).map(|(x, y)| x - y).collect();
    norm(&diff) / norm(a).max(norm(b)).max(1e-12)
}

fn random_simplex(rng: &mut ChaCha8Rng, n: usize) -> RelaxedLabeling {
    RelaxedLabeling {
        q: (0..n)
            .map(|_| {
                let p: f64 = rng.random();
                [1.0 - p, p]
            })
            .collect(),
    }
}

/// Reads every `*_unary.txt` and `*_crf.txt` result file in `dir` and runs
/// the track-set validator over it.
fn validate_result_files(dir: &Path) -> Result<usize, Error> {
    let mut n = 0;
    for entry in std::fs::read_dir(dir).expect("result directory is readable") {
        let path = entry.expect("directory entry").path();
        let name = path.file_name().and_then(|s| s.to_str()).unwrap_or("");
        if name.ends_with("_unary.txt") || name.ends_with("_crf.txt") {
            let ts = rows_to_trackset(&read_mot(&path, MotRole::Results)?, MotRole::Results)?;
            validate_trackset(&ts)?;
            n += 1;
        }
    }
    Ok(n)
}

#[test]
fn criterion_01_gradient_exactness() {
    let t0 = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let h = 1e-6;
    let mut worst: f64 = 0.0;
    for _ in 0..100 {
        let n = rng.random_range(1..=30);
        let density = rng.random_range(0.0..=0.3);
        let g = random_graph(&mut rng, n, density, 5.0);
        let q = random_simplex(&mut rng, n);
        let analytic = gradient(&g, &q);
        for i in 0..n {
            for l in 0..2 {
                let mut plus = q.clone();
                plus.q[i][l] += h;
                let mut minus = q.clone();
                minus.q[i][l] -= h;
                let fd = (energy_relaxed(&g, &plus) - energy_relaxed(&g, &minus)) / (2.0 * h);
                worst = worst.max(rel(analytic[i][l], fd));
            }
        }
    }
    let pass = worst < 1e-6;
    let elapsed = t0.elapsed();
    report(
        1,
        pass,
        &format!("max relative error {worst:.3e} over 100 graphs"),
        elapsed,
        Duration::from_secs(10),
    );
    assert!(pass && elapsed < Duration::from_secs(10));
}

#[test]
fn criterion_02_vertex_tightness() {
    let t0 = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let mut mismatches = 0;
    for _ in 0..1000 {
        let n = rng.random_range(1..=30);
        let density = rng.random_range(0.0..=0.3);
        let g = random_graph(&mut rng, n, density, 5.0);
        let x = random_labeling(&mut rng, n);
        let relaxed = energy_relaxed(&g, &RelaxedLabeling::one_hot(&x));
        if relaxed.to_bits() != energy_integer(&g, &x).to_bits() {
            mismatches += 1;
        }
    }
    let pass = mismatches == 0;
    let elapsed = t0.elapsed();
    report(
        2,
        pass,
        &format!("{mismatches}/1000 bitwise mismatches"),
        elapsed,
        Duration::from_secs(5),
    );
    assert!(pass && elapsed < Duration::from_secs(5));
}

#[test]
fn criterion_03_simplex_invariant() {
    let t0 = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let params = CrfParams::default();
    let mut worst: f64 = 0.0;
    let mut states = 0usize;
    for _ in 0..50 {
        let g = planted_graph(
            &mut rng,
            &PlantedConfig {
                nodes: 200,
                ..PlantedConfig::default()
            },
        )
        .graph;
        infer_observed(&g, &params, EXEC, |_, q| {
            worst = worst.max(q.simplex_violation());
            states += 1;
        });
    }
    let pass = worst <= 1e-12 && states == 50 * (params.iterations + 1);
    let elapsed = t0.elapsed();
    report(
        3,
        pass,
        &format!("max |q0+q1-1| = {worst:.3e} over {states} iterates"),
        elapsed,
        Duration::from_secs(30),
    );
    assert!(pass && elapsed < Duration::from_secs(30));
}

#[test]
fn criterion_04_oracle_proximity() {
    let t0 = Instant::now();
    let params = CrfParams::default();
    let seeds: Vec<u64> = (0..200).collect();
    let rows = oracle_check(&[12], &seeds, &PlantedConfig::default(), &params, EXEC).unwrap();
    let never_below = rows.iter().all(|r| r.decoded >= r.oracle);
    let mean_gap = rows.iter().map(|r| r.gap).sum::<f64>() / rows.len() as f64;
    let agree = rows.iter().filter(|r| r.agree).count();

    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let mut edgeless_ok = 0;
    for _ in 0..200 {
        let n = rng.random_range(1..=12);
        let g = edgeless_graph(&mut rng, n);
        let argmax: Vec<u8> = g
            .nodes
            .iter()
            .map(|v| u8::from(v.unary_prob[1] > v.unary_prob[0]))
            .collect();
        if decode(&infer(&g, &params).final_q, &g) == argmax {
            edgeless_ok += 1;
        }
    }
    let pass =
        rows.len() == 200 && never_below && mean_gap <= 0.05 && 10 * agree >= 7 * rows.len() && edgeless_ok == 200;
    let elapsed = t0.elapsed();
    report(
        4,
        pass,
        &format!(
            "decoded>=oracle {never_below}, mean gap {:.2}%, agreement {agree}/200, edgeless argmax {edgeless_ok}/200",
            100.0 * mean_gap
        ),
        elapsed,
        Duration::from_secs(120),
    );
    assert!(pass && elapsed < Duration::from_secs(120));
}

#[test]
fn criterion_05_convergence_trend() {
    let t0 = Instant::now();
    let dir = tempfile::tempdir().unwrap();
    let params = CrfParams::default();
    assert_eq!((params.iterations, params.gamma), (5, 0.5));
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let mut decreased = 0;
    for k in 0..100 {
        let g = planted_graph(
            &mut rng,
            &PlantedConfig {
                nodes: 50,
                ..PlantedConfig::default()
            },
        )
        .graph;
        let trace = infer(&g, &params);
        if trace.energies[5] < trace.energies[0] {
            decreased += 1;
        }
        std::fs::write(dir.path().join(format!("trace_{k:03}.csv")), trace.to_csv()).unwrap();
    }
    let mut monotone_tail = 0;
    for k in 0..100 {
        let text = std::fs::read_to_string(dir.path().join(format!("trace_{k:03}.csv"))).unwrap();
        let energies: Vec<f64> = text
            .lines()
            .skip(1)
            .map(|l| l.split(',').nth(1).unwrap().parse().unwrap())
            .collect();
        assert_eq!(energies.len(), 6);
        if energies[4] <= energies[3] && energies[5] <= energies[4] {
            monotone_tail += 1;
        }
    }
    let pass = decreased >= 95 && monotone_tail >= 90;
    let elapsed = t0.elapsed();
    report(
        5,
        pass,
        &format!("final<initial {decreased}/100, non-increasing over iterations 3..5 {monotone_tail}/100"),
        elapsed,
        Duration::from_secs(60),
    );
    assert!(pass && elapsed < Duration::from_secs(60));
}

fn scene_windows(seed: u64, model: &Model) -> Vec<TrainingWindow> {
    let scene = generate_scene(&SceneConfig {
        seed,
        ..SceneConfig::default()
    })
    .unwrap();
    sequence_windows(
        scene.detections,
        &LinkThresholds::default(),
        model,
        &DifficultPairConfig::default(),
        &FeatureConfig::default(),
        EXEC,
    )
    .unwrap()
}

/// Providers start uninformative; labels come from the simulator's planted
/// identities.
#[test]
fn criterion_06_end_to_end_training() {
    let t0 = Instant::now();
    let init = Model {
        params: CrfParams::default(),
        unary: LogisticUnary::zeros(),
        pairwise: LogisticPairwise::zeros(),
    };
    let schedule = Schedule {
        learning_rate: 0.05,
        epochs: 30,
        ..Schedule::default()
    };
    let mut lines = Vec::new();
    let mut all_ok = true;
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    for seed in 0..10u64 {
        let train_set = scene_windows(3000 + seed, &init);
        let val_set = scene_windows(4000 + seed, &init);
        let r = train(
            &train_set,
            &val_set,
            &init,
            &Schedule {
                seed,
                ..schedule.clone()
            },
            EXEC,
        )
        .unwrap();
        let ce0 = mean_loss(&val_set, &init, EXEC);
        let ce1 = mean_loss(&val_set, &r.model, EXEC);
        let acc0 = decoded_accuracy(&val_set, &init, EXEC);
        let acc1 = decoded_accuracy(&val_set, &r.model, EXEC);
        let (theta0, fitted) = (init.to_vector(), r.model.to_vector());

        let mut worst_fd: f64 = 0.0;
        let (mut checked, mut flat) = (0, 0);
        while checked < 5 {
            let w = &train_set[rng.random_range(0..train_set.len())];
            // a point on the path from the initial to the fitted model, jittered
            let t: f64 = rng.random();
            let theta: Vec<f64> = theta0
                .iter()
                .zip(&fitted)
                .map(|(a, b)| a + t * (b - a) + rng.random_range(-0.05..0.05))
                .collect();
            let m = init.with_vector(&theta);
            let (_, g) = param_gradient(w, &m);
            let fd = param_gradient_fd(w, &m, 1e-4);
            // fully saturated windows have a flat loss, and the ratio of two
            // rounding residues says nothing about the gradient
            if fd.iter().map(|x| x * x).sum::<f64>().sqrt() < 1e-8 {
                flat += 1;
                continue;
            }
            worst_fd = worst_fd.max(norm_rel(&g, &fd));
            checked += 1;
        }
        let ok = ce1 < 0.9 * ce0 && acc1 >= acc0 && worst_fd < 1e-3;
        all_ok &= ok;
        lines.push(format!(
            "seed {seed}: CE {ce0:.4} -> {ce1:.4}, accuracy {acc0:.4} -> {acc1:.4}, FD rel {worst_fd:.2e} ({flat} flat points redrawn)"
        ));
    }
    let elapsed = t0.elapsed();
    report(6, all_ok, &lines.join("; "), elapsed, Duration::from_secs(300));
    assert!(all_ok && elapsed < Duration::from_secs(300), "{lines:#?}");
}

/// Providers fitted on held-out scenes, then both modes on 20 fresh scenes.
#[test]
fn criterion_07_ablation_trend() {
    let t0 = Instant::now();
    let init = Model::default();
    let train_set: Vec<TrainingWindow> = (1000..1006).flat_map(|s| scene_windows(s, &init)).collect();
    let val_set: Vec<TrainingWindow> = (2000..2002).flat_map(|s| scene_windows(s, &init)).collect();
    let schedule = Schedule {
        learning_rate: 0.03,
        epochs: 150,
        ..Schedule::default()
    };
    let model = train(&train_set, &val_set, &init, &schedule, EXEC).unwrap().model;

    let dir = tempfile::tempdir().unwrap();
    let scene = SceneConfig::default();
    let cfg = AssociationConfig {
        params: model.params.clone(),
        ..AssociationConfig::default()
    };
    let providers = Providers {
        unary: &model.unary,
        pairwise: &model.pairwise,
    };
    let seeds: Vec<u64> = (0..20).collect();
    let rows = run_ablation(&seeds, &scene, &cfg, providers, 0.5, EXEC, Some(dir.path())).unwrap();
    let validated = validate_result_files(dir.path()).unwrap();
    let _ = writeln!(std::io::stderr(), "{}", ablation_table(&rows));

    let s = AblationSummary::from_rows(&rows);
    let crossings_ok = rows.iter().all(|r| r.crossings >= 3);
    let pass = crossings_ok && s.ids_not_worse() && s.mota_not_worse() && s.wins_enough() && validated == 40;
    let elapsed = t0.elapsed();
    report(
        7,
        pass,
        &format!(
            "IDS crf {:.2} vs unary {:.2}, MOTA crf {:.4} vs unary {:.4}, strict wins {}/{}, all scenes >=3 crossings {crossings_ok}",
            s.mean_ids_crf, s.mean_ids_unary, s.mean_mota_crf, s.mean_mota_unary, s.strict_wins, s.scenes
        ),
        elapsed,
        Duration::from_secs(300),
    );
    assert!(pass && elapsed < Duration::from_secs(300));
}

fn straight_track(id: usize, frames: std::ops::RangeInclusive<u32>, x: f64) -> Track {
    let detections: Vec<Detection> = frames
        .map(|f| Detection::from_center(f, Vec2::new(x, 100.0), Vec2::new(20.0, 40.0), 1.0).unwrap())
        .collect();
    Track {
        id,
        interpolated: vec![false; detections.len()],
        detections,
    }
}

#[test]
fn criterion_08_metric_correctness() {
    let t0 = Instant::now();
    // two targets over 50 frames: one identity switch on the first, a ten
    // frame gap followed by a new identity on the second, and five boxes
    // far from any target
    let gt = TrackSet {
        tracks: vec![straight_track(0, 1..=50, 100.0), straight_track(1, 1..=50, 300.0)],
    };
    let res = TrackSet {
        tracks: vec![
            straight_track(0, 1..=25, 100.0),
            straight_track(1, 26..=50, 100.0),
            straight_track(2, 1..=20, 300.0),
            straight_track(3, 31..=50, 300.0),
            straight_track(4, 1..=5, 500.0),
        ],
    };
    let r = evaluate(&gt, &res, 0.5);
    let fixture_ok = (r.gt_boxes, r.fp, r.fn_, r.ids) == (100, 5, 10, 2) && r.mota == 1.0 - 17.0 / 100.0;

    let gt_swap = TrackSet {
        tracks: vec![straight_track(0, 1..=10, 100.0)],
    };
    let swapped = TrackSet {
        tracks: vec![straight_track(0, 1..=5, 100.0), straight_track(1, 6..=10, 100.0)],
    };
    let swap_ids = evaluate(&gt_swap, &swapped, 0.5).ids;

    let mut perfect = 0;
    for seed in 0..20 {
        let sc = generate_scene(&SceneConfig {
            seed,
            ..SceneConfig::default()
        })
        .unwrap();
        if evaluate(&sc.gt, &sc.gt, 0.5).is_perfect() {
            perfect += 1;
        }
    }
    let pass = fixture_ok && swap_ids == 1 && perfect == 20;
    let elapsed = t0.elapsed();
    report(
        8,
        pass,
        &format!(
            "fixture MOTA {} (FP {} FN {} IDS {}), half swap IDS {swap_ids}, gt vs gt perfect {perfect}/20",
            r.mota, r.fp, r.fn_, r.ids
        ),
        elapsed,
        Duration::from_secs(5),
    );
    assert!(pass && elapsed < Duration::from_secs(5), "{r:?}");
}

#[test]
fn criterion_09_repellency_guarantee() {
    let t0 = Instant::now();
    let dir = tempfile::tempdir().unwrap();
    let model = Model::default();
    let providers = Providers {
        unary: &model.unary,
        pairwise: &model.pairwise,
    };
    let seeds: Vec<u64> = (100..110).collect();
    let mut produced = 0;
    for scene in [
        SceneConfig::default(),
        SceneConfig {
            n_targets: 14,
            crossings: 6,
            fp_rate: 1.0,
            ..SceneConfig::default()
        },
    ] {
        let sub = dir.path().join(format!("targets{}", scene.n_targets));
        std::fs::create_dir_all(&sub).unwrap();
        run_ablation(
            &seeds,
            &scene,
            &AssociationConfig::default(),
            providers,
            0.5,
            EXEC,
            Some(&sub),
        )
        .unwrap();
        produced += validate_result_files(&sub).unwrap();
    }
    let pass = produced == 40;
    let elapsed = t0.elapsed();
    report(
        9,
        pass,
        &format!("{produced} result files validated, no tracklet with two predecessors or successors"),
        elapsed,
        Duration::from_secs(120),
    );
    assert!(pass);
}

#[test]
fn criterion_10_format_fidelity() {
    let t0 = Instant::now();
    let fixtures = Path::new(env!("CARGO_MANIFEST_DIR")).join("tests/fixtures");
    let mut identical = 0;
    for (name, role) in [
        ("det.txt", MotRole::Detections),
        ("gt.txt", MotRole::GroundTruth),
        ("res.txt", MotRole::Results),
    ] {
        let path = fixtures.join(name);
        let text = std::fs::read_to_string(&path).unwrap();
        let rows = read_mot(&path, role).unwrap();
        let written = write_mot(&rows);
        if written == text && parse_mot(&written, &path, role).unwrap() == rows {
            identical += 1;
        }
    }
    let bad = fixtures.join("malformed.txt");
    let malformed_line = match read_mot(&bad, MotRole::Results) {
        Err(Error::Parse { line, .. }) => Some(line),
        _ => None,
    };
    let short = parse_mot(
        "1,1,0,0,10,10,1,1,1\n1,2,0,0,10,10\n",
        Path::new("gt.txt"),
        MotRole::GroundTruth,
    );
    let short_line = match short {
        Err(Error::Parse { line, .. }) => Some(line),
        _ => None,
    };
    let pass = identical == 3 && malformed_line == Some(4) && short_line == Some(2);
    let elapsed = t0.elapsed();
    report(
        10,
        pass,
        &format!(
            "round trip {identical}/3 fixtures, malformed rejected at lines {malformed_line:?} and {short_line:?}"
        ),
        elapsed,
        Duration::from_secs(1),
    );
    assert!(pass && elapsed < Duration::from_secs(1));
}
