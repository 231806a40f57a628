//! Acceptance suite: one PASS/FAIL line per criterion, nonzero exit on any failure.

use std::path::Path;
use std::process::Command;
use std::time::{Duration, Instant};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use winmatch::checks::{gradient_suite, oracle_suite};
use winmatch::eval::evaluate_spec;
use winmatch::homography::{corner_error, ransac, Homography, RansacConfig};
use winmatch::synth::{PairKind, PairSpec};
use winmatch::train::{coarse_precision, pair_specs, train_tiny, Split, TrainOptions};
use winmatch_core::attention::{
    build_kv, select_top_k, window_average, window_partition, window_reverse, window_similarity, SimilarityMatrix,
    WindowContext, WindowGrid,
};
use winmatch_core::config::{FeatureMode, PipelineConfig};
use winmatch_core::loss::{assignment_distribution, patch_match_logprob, window_assignment_logprob};
use winmatch_core::matcher::{interaction_schedule, patch_confidence, ModelParams};
use winmatch_core::{FeatureMap, Tensor};

type Outcome = Result<String, String>;
type Criterion = (&'static str, fn() -> Outcome);

fn check(ok: bool, detail: String) -> Outcome {
    if ok {
        Ok(detail)
    } else {
        Err(detail)
    }
}

fn within(start: Instant, budget: Duration) -> (bool, String) {
    let t = start.elapsed();
    (t < budget, format!("{:.2} s of {} s", t.as_secs_f64(), budget.as_secs()))
}

fn random_tensor(shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor {
    let n = shape.iter().product();
    Tensor::new(shape, (0..n).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap()
}

fn oracle_equivalence() -> Outcome {
    let start = Instant::now();
    let r = oracle_suite(0, 50).map_err(|e| e.to_string())?;
    let (fast, time) = within(start, Duration::from_secs(10));
    check(
        r.passed && r.instances == 50 && fast,
        format!("max abs diff {:.2e} over {} configurations of 50 instances; {time}", r.max_abs_diff, r.configurations),
    )
}

fn shape_law() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let (side, c) = (16, 4);
    let keys = window_partition(&random_tensor(&[side, side, c], &mut rng), 1).unwrap();
    let mut rows = Vec::new();
    let mut ok = true;
    for stage in interaction_schedule(4).unwrap().stages {
        let s = stage.window_side(side).unwrap();
        let ctx = WindowContext::new(side, side, s, stage.top_k).unwrap();
        let q = window_partition(&random_tensor(&[side, side, c], &mut rng), s).unwrap();
        let k = window_partition(&keys.data.reshape(&[side, side, c]).unwrap(), s).unwrap();
        let (qs, ks) = (window_average(&q).unwrap(), window_average(&k).unwrap());
        let idx = select_top_k(&window_similarity(&qs, &ks).unwrap(), stage.top_k).unwrap();
        let expected = stage.top_k * s * s + stage.windows;
        for win in 0..stage.windows {
            let kv = build_kv(&k, &k, &ks, &ks, &idx, win).unwrap();
            let got = kv.keys.shape()[0];
            ok &= got == expected && kv.values.shape()[0] == expected && ctx.kv_rows() == expected;
            ok &= expected >= side * side || got < side * side;
        }
        rows.push(format!("m={} kv={expected}", stage.index));
    }
    check(ok, rows.join(", "))
}

fn schedule_law() -> Outcome {
    let schedule = interaction_schedule(6).map_err(|e| e.to_string())?;
    let rows: Vec<(usize, usize)> = schedule.stages.iter().map(|s| (s.windows, s.top_k)).collect();
    let expected: Vec<(usize, usize)> = (0..6).map(|m| (4usize.pow(m), 2usize.pow(m))).collect();
    check(rows == expected, format!("{rows:?}"))
}

fn gradient_criterion() -> Outcome {
    let start = Instant::now();
    let suite = gradient_suite(0, 12).map_err(|e| e.to_string())?;
    let (fast, time) = within(start, Duration::from_secs(60));
    let worst = suite.reports.iter().max_by(|a, b| a.max_rel_error.total_cmp(&b.max_rel_error)).unwrap();
    check(
        suite.passed && fast,
        format!(
            "{} tensors, max rel error {:.2e} ({}); {time}",
            suite.reports.len(),
            suite.max_rel_error,
            worst.op_name
        ),
    )
}

fn loss_identity() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let (side, s, top_k, c) = (8, 2, 4, 6);
    let grid = WindowGrid::new(side, side, s).unwrap();
    let n = grid.n();
    let sm = random_tensor(&[n, n], &mut rng).scale(3.0);
    let idx = select_top_k(&SimilarityMatrix { scores: sm.clone() }, top_k).unwrap();
    let fa = FeatureMap::new(random_tensor(&[side, side, c], &mut rng), 8).unwrap();
    let fb = FeatureMap::new(random_tensor(&[side, side, c], &mut rng), 8).unwrap();
    let conf = patch_confidence(&fa, &fb, 0.1).unwrap();
    let (smv, p) = (sm.data(), conf.p.data());
    let cells = side * side;

    let mut max_log_err: f64 = 0.0;
    let mut max_sum_err: f64 = 0.0;
    let (mut inside, mut outside) = (0, 0);
    for i in 0..cells {
        for j in (0..cells).step_by(3) {
            let (wi, wj) = (grid.window_of(i), grid.window_of(j));
            let row = &smv[wi * n..(wi + 1) * n];
            let z: f64 = row.iter().map(|v| v.exp()).sum();
            let assign = if idx.row(wi).contains(&wj) {
                inside += 1;
                row[wj].exp() / z
            } else {
                outside += 1;
                (0..n).filter(|k| !idx.row(wi).contains(k)).map(|k| row[k].exp()).sum::<f64>() / z
            };
            let members = grid.window_rows(wj);
            let within_window = p[i * cells + j] / members.iter().map(|&m| p[i * cells + m]).sum::<f64>();
            let product = assign * within_window;
            let lw = window_assignment_logprob(&sm, &idx, &grid, (i, j)).unwrap().item();
            let lp = patch_match_logprob(&conf.log_p, &grid, wj, (i, j)).unwrap().item();
            max_log_err = max_log_err.max((lw + lp - product.ln()).abs());
        }
    }
    for wi in 0..n {
        let dist = assignment_distribution(&smv[wi * n..(wi + 1) * n], idx.row(wi));
        max_sum_err = max_sum_err.max((dist.iter().sum::<f64>() - 1.0).abs());
    }
    check(
        max_log_err < 1e-9 && max_sum_err < 1e-12 && inside > 0 && outside > 0,
        format!(
            "log error {max_log_err:.2e} over {} pairs ({inside} in top-k); sum error {max_sum_err:.2e}",
            inside + outside
        ),
    )
}

fn partition_round_trip() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let mut failures = 0;
    for _ in 0..200 {
        let s = rng.random_range(1..=4);
        let (h, w, c) = (s * rng.random_range(1..=6), s * rng.random_range(1..=6), rng.random_range(1..=5));
        let t = random_tensor(&[h, w, c], &mut rng);
        let back = window_reverse(&window_partition(&t, s).unwrap(), h, w).unwrap();
        if back.shape() != t.shape() || back.data().iter().zip(t.data()).any(|(a, b)| a.to_bits() != b.to_bits()) {
            failures += 1;
        }
    }
    check(failures == 0, format!("{failures} of 200 shapes differ"))
}

fn handcrafted_matcher() -> Outcome {
    let start = Instant::now();
    let cfg = PipelineConfig { features: FeatureMode::Handcrafted, ..PipelineConfig::default() };
    let params = ModelParams::init(&cfg);
    let spec = PairSpec { kind: PairKind::Translate, h: 128, w: 128, magnitude: 8.0, noise_sigma: 0.01, seed: 0 };
    let (r, _) = evaluate_spec(spec, &cfg, &params, &RansacConfig::default()).map_err(|e| e.to_string())?;
    let (fast, time) = within(start, Duration::from_secs(30));
    let err = r.corner_error.unwrap_or(f64::INFINITY);
    check(
        r.coarse_precision >= 0.95 && err < 1.0 && fast,
        format!(
            "coarse agreement {:.3} of {} matches, corner error {err:.3} px; {time}",
            r.coarse_precision, r.num_coarse
        ),
    )
}

fn tiny_training() -> Outcome {
    let start = Instant::now();
    let cfg = PipelineConfig::tiny();
    let opts = TrainOptions::default();
    let (params, report) = train_tiny(&cfg, &opts).map_err(|e| e.to_string())?;
    let holdout = pair_specs(&opts, Split::Holdout, 10);
    let (hits, total) = coarse_precision(&holdout, &cfg, &params).map_err(|e| e.to_string())?;
    let precision = if total == 0 { 0.0 } else { hits as f64 / total as f64 };
    let (fast, time) = within(start, Duration::from_secs(300));
    let (initial, last) = (report.eval_initial[3], report.eval_final[3]);
    let finite = report.losses.iter().all(|l| l.is_finite());
    check(
        report.updates == 300 && last <= 0.5 * initial && finite && precision >= 0.8 && fast,
        format!("loss {initial:.3} -> {last:.3}, held-out coarse precision {precision:.3} ({hits}/{total}); {time}"),
    )
}

fn ransac_recovery() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let truth = Homography([[1.02, 0.05, 4.0], [-0.03, 0.97, -6.0], [2e-4, -1e-4, 1.0]]);
    let src: Vec<[f64; 2]> = (0..40).map(|_| [rng.random_range(0.0..128.0), rng.random_range(0.0..128.0)]).collect();
    let dst: Vec<[f64; 2]> = src.iter().map(|&p| truth.apply(p)).collect();
    let cfg = RansacConfig::default();
    let (clean, _) = ransac(&src, &dst, &cfg).map_err(|e| e.to_string())?;
    let clean_err = corner_error(&clean, &truth, 128, 128);

    let (mut s2, mut d2) = (src.clone(), dst.clone());
    for _ in 0..40 {
        s2.push([rng.random_range(0.0..128.0), rng.random_range(0.0..128.0)]);
        d2.push([rng.random_range(0.0..128.0), rng.random_range(0.0..128.0)]);
    }
    let (robust, mask) = ransac(&s2, &d2, &cfg).map_err(|e| e.to_string())?;
    let robust_err = corner_error(&robust, &truth, 128, 128);
    check(
        clean_err <= 1e-6 && robust_err < 0.5,
        format!(
            "noiseless {clean_err:.2e} px; 50% outliers {robust_err:.2e} px with {} inliers",
            mask.iter().filter(|&&m| m).count()
        ),
    )
}

fn run_cli(dir: &Path, tag: &str, args: &[&str]) -> Result<Vec<u8>, String> {
    let report = dir.join(format!("{tag}.json"));
    let status = Command::new(env!("CARGO_BIN_EXE_winmatch"))
        .args(args)
        .arg("--out")
        .arg(dir.join(tag))
        .arg("--report")
        .arg(&report)
        .status()
        .map_err(|e| e.to_string())?;
    if !status.success() {
        return Err(format!("{args:?} exited with {status}"));
    }
    std::fs::read(&report).map_err(|e| e.to_string())
}

fn determinism() -> Outcome {
    let dir = tempfile::tempdir().map_err(|e| e.to_string())?;
    let matching = ["match", "--seed", "4", "--features", "handcrafted", "--kind", "homography", "--magnitude", "5"];
    let evaluation = ["eval", "--seed", "4", "--pairs", "4", "--kind", "rotate", "--magnitude", "3", "--noise", "0.02"];
    let m1 = run_cli(dir.path(), "m1", &matching)?;
    let m2 = run_cli(dir.path(), "m2", &matching)?;
    let e1 = run_cli(dir.path(), "e1", &evaluation)?;
    let e2 = run_cli(dir.path(), "e2", &evaluation)?;
    let render = |t: &str| std::fs::read(dir.path().join(t).join("matches.ppm")).ok();
    let same_render = render("m1").is_some() && render("m1") == render("m2");
    check(
        m1 == m2 && e1 == e2 && same_render,
        format!("match report {} bytes, eval report {} bytes, render identical: {same_render}", m1.len(), e1.len()),
    )
}

fn main() {
    let criteria: [Criterion; 10] = [
        ("kernel matches the plain-loop transcription", oracle_equivalence),
        ("augmented key/value row count", shape_law),
        ("interaction schedule rows", schedule_law),
        ("gradient suite", gradient_criterion),
        ("loss factorization identity", loss_identity),
        ("window partition round trip", partition_round_trip),
        ("handcrafted matcher on 8 px translation", handcrafted_matcher),
        ("tiny training", tiny_training),
        ("RANSAC/DLT recovery", ransac_recovery),
        ("CLI determinism", determinism),
    ];
    let mut failed = 0;
    for (n, (name, run)) in criteria.iter().enumerate() {
        let outcome = std::panic::catch_unwind(run).unwrap_or_else(|_| Err("panicked".into()));
        match outcome {
            Ok(detail) => println!("PASS {:>2} {name}: {detail}", n + 1),
            Err(detail) => {
                failed += 1;
                println!("FAIL {:>2} {name}: {detail}", n + 1);
            }
        }
    }
    println!("acceptance: {} passed, {failed} failed", criteria.len() - failed);
    if failed > 0 {
        std::process::exit(1);
    }
}
