//! Acceptance suite. Runs every criterion, prints one result line each and
//! exits non-zero if any criterion fails.

use std::f64::consts::PI;
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::Path;
use std::process::{Command, ExitCode};
use std::time::{Duration, Instant};

use qkan::cli::{cmd_mnist_demo, cmd_train, mnist_dir, Checkpoint, RunConfig, MNIST_FILES, SINC};
use qkan::daruan::{backward, forward, parameter_shift_grad, DaruanInit, DaruanParams, EncWeightInit};
use qkan::data::{gen_sinc, sinc_target};
use qkan::distill::{calibrate_domains, distill_network, DistillConfig};
use qkan::qkan::{make_hqkan, QkanLayer, QkanNetwork};
use qkan::spectrum::{enumerate_frequencies, fit_on_frequencies, verify_spectrum};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

enum Verdict {
    Pass(String),
    Fail(String),
    Skip(String),
}

fn verdict(ok: bool, detail: String) -> Verdict {
    if ok {
        Verdict::Pass(detail)
    } else {
        Verdict::Fail(detail)
    }
}

fn within(elapsed: Duration, budget_s: u64) -> bool {
    elapsed <= Duration::from_secs(budget_s)
}

fn random_circuit(r: usize, weights: &[f64], rng: &mut ChaCha8Rng) -> DaruanParams {
    DaruanParams {
        r,
        enc_w: weights.to_vec(),
        enc_b: (0..r).map(|_| rng.random_range(-PI..PI)).collect(),
        angles: (0..=r)
            .map(|_| [rng.random_range(-PI..PI), rng.random_range(-PI..PI), rng.random_range(-PI..PI)])
            .collect(),
        w_base: 0.0,
        w_quant: 1.0,
        out_bias: 0.0,
    }
}

fn spectrum_unweighted() -> Verdict {
    let t = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(101);
    let mut worst: f64 = 0.0;
    for r in 1..=5 {
        let freqs: Vec<f64> = (-(r as i64)..=r as i64).map(|k| k as f64).collect();
        for _ in 0..20 {
            let p = random_circuit(r, &vec![1.0; r], &mut rng);
            let rep = fit_on_frequencies(&p, &freqs, 4 * freqs.len() + 4).expect("fit");
            worst = worst.max(rep.residual_l2);
        }
    }
    let el = t.elapsed();
    verdict(
        worst < 1e-8 && within(el, 5),
        format!("r=1..5 x 20 draws, max residual {worst:.2e} (< 1e-8), {:.2}s (< 5s)", el.as_secs_f64()),
    )
}

fn spectrum_geometric() -> Verdict {
    let t = Instant::now();
    let weights = [1.0, 2.0, 4.0, 8.0];
    let freqs = enumerate_frequencies(&weights);
    let integers = freqs.iter().all(|w| w.fract() == 0.0);
    let max = freqs.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let mut rng = ChaCha8Rng::seed_from_u64(202);
    let mut worst: f64 = 0.0;
    for _ in 0..20 {
        let p = random_circuit(4, &weights, &mut rng);
        let (_, rep) = verify_spectrum(&p, 1e-8).expect("fit");
        worst = worst.max(rep.residual_l2);
    }
    let el = t.elapsed();
    verdict(
        integers && max == 15.0 && worst < 1e-8 && within(el, 5),
        format!(
            "support integer={integers}, max frequency {max} (= 15), max residual {worst:.2e} (< 1e-8), {:.2}s (< 5s)",
            el.as_secs_f64()
        ),
    )
}

fn gradients() -> Verdict {
    let t = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(303);
    let h = 1e-6;
    let (mut worst_fd, mut worst_ps): (f64, f64) = (0.0, 0.0);
    let mut fd_failures = 0;
    for _ in 0..1000 {
        let r = rng.random_range(1..=4);
        let mut p = random_circuit(r, &[], &mut rng);
        p.enc_w = (0..r).map(|_| rng.random_range(-2.0..2.0)).collect();
        p.w_base = rng.random_range(-1.5..1.5);
        p.w_quant = rng.random_range(-1.5..1.5);
        p.out_bias = rng.random_range(-1.0..1.0);
        let x = rng.random_range(-2.0..2.0);
        let g = backward(&p, x, 1.0);
        let flat = g.flat();
        let base = p.flat();
        let mut check = |analytic: f64, fd: f64| {
            let err = (analytic - fd).abs();
            worst_fd = worst_fd.max(err / fd.abs().max(1e-8));
            if err > (1e-5 * fd.abs()).max(1e-8) {
                fd_failures += 1;
            }
        };
        for (k, which) in p.all_indices().into_iter().enumerate() {
            let mut plus = p.clone();
            let mut minus = p.clone();
            let mut v = base.clone();
            v[k] += h;
            plus.read_flat(&v).unwrap();
            v[k] -= 2.0 * h;
            minus.read_flat(&v).unwrap();
            let fd = (forward(&plus, x) - forward(&minus, x)) / (2.0 * h);
            check(flat[k], fd);
            if let Ok(ps) = parameter_shift_grad(&p, x, which) {
                worst_ps = worst_ps.max((ps - flat[k]).abs());
            }
        }
        let fd_x = (forward(&p, x + h) - forward(&p, x - h)) / (2.0 * h);
        check(g.d_input, fd_x);
    }
    let el = t.elapsed();
    verdict(
        fd_failures == 0 && worst_ps < 1e-10 && within(el, 30),
        format!(
            "1000 cases: {fd_failures} finite-difference mismatches (rel 1e-5, floor 1e-8; \
             worst relative gap {worst_fd:.2e}), max parameter-shift gap {worst_ps:.2e} (< 1e-10), {:.2}s (< 30s)",
            el.as_secs_f64()
        ),
    )
}

fn extension() -> Verdict {
    let t = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(404);
    let init = DaruanInit {
        angle_range: PI,
        enc_w: EncWeightInit::Geometric,
        ..Default::default()
    };
    let shapes: [&[usize]; 4] = [&[1, 1], &[2, 2, 1], &[3, 2, 2], &[2, 3, 2, 1]];
    let mut worst: f64 = 0.0;
    for n in 0..100 {
        let shape = shapes[n % shapes.len()];
        let r = rng.random_range(1..=3);
        let net = QkanNetwork::new(shape, r, &init, &mut rng).unwrap();
        let ext = net.extend(r + rng.random_range(1..=3)).unwrap();
        for _ in 0..1000 {
            let x: Vec<f64> = (0..shape[0]).map(|_| rng.random_range(-2.0..2.0)).collect();
            let (a, b) = (net.forward(&x).unwrap(), ext.forward(&x).unwrap());
            for (u, v) in a.iter().zip(&b) {
                worst = worst.max((u - v).abs());
            }
        }
    }
    let el = t.elapsed();
    verdict(
        worst < 1e-12 && within(el, 30),
        format!("100 networks x 1000 inputs, max deviation {worst:.2e} (< 1e-12), {:.2}s (< 30s)", el.as_secs_f64()),
    )
}

fn boundedness() -> Verdict {
    let t = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(505);
    let init = DaruanInit {
        angle_range: PI,
        enc_w: EncWeightInit::Constant(1.0),
        w_base: 0.0,
        w_quant: 1.0,
        out_bias: 0.0,
        ..Default::default()
    };
    let mut violations = 0;
    let mut worst_ratio: f64 = 0.0;
    for _ in 0..100_000 {
        let n_in = rng.random_range(1..=4);
        let n_out = rng.random_range(1..=3);
        let r = rng.random_range(1..=3);
        let mut layer = QkanLayer::new(n_in, n_out, r, &init, &mut rng).unwrap();
        for e in &mut layer.edges {
            for w in &mut e.enc_w {
                *w = rng.random_range(-3.0..3.0);
            }
        }
        let x: Vec<f64> = (0..n_in).map(|_| rng.random_range(-5.0..5.0)).collect();
        for y in layer.forward(&x).unwrap() {
            worst_ratio = worst_ratio.max(y.abs() / n_in as f64);
            if y.abs() > n_in as f64 {
                violations += 1;
            }
        }
    }
    let el = t.elapsed();
    verdict(
        violations == 0 && within(el, 30),
        format!(
            "100000 trials, {violations} outputs outside [-n_in, n_in], max |y|/n_in {worst_ratio:.6}, {:.2}s (< 30s)",
            el.as_secs_f64()
        ),
    )
}

fn regression(equation: &str, threshold: f64) -> Verdict {
    let t = Instant::now();
    let dir = tempfile::tempdir().unwrap();
    let config = RunConfig {
        equation: equation.into(),
        out_dir: Some(dir.path().to_path_buf()),
        ..Default::default()
    };
    let report = match cmd_train(&config) {
        Ok(r) => r,
        Err(e) => return Verdict::Fail(format!("training failed: {e}")),
    };
    let el = t.elapsed();
    let per_seed: Vec<String> = report.seeds.iter().map(|s| format!("{:.4}", s.best_test_rmse)).collect();
    verdict(
        report.best_test_rmse <= threshold && within(el, 600),
        format!(
            "{equation} shape {:?} r={} L-BFGS {} epochs, seeds {:?}: best test RMSE {:.4} (<= {threshold}), \
             per seed [{}], {:.1}s (<= 600s)",
            report.shape,
            report.r,
            config.epochs,
            config.seeds,
            report.best_test_rmse,
            per_seed.join(", "),
            el.as_secs_f64()
        ),
    )
}

fn sinc_config(out: &Path) -> RunConfig {
    RunConfig {
        equation: SINC.into(),
        r: 5,
        init: DaruanInit {
            enc_w: EncWeightInit::Geometric,
            ..Default::default()
        },
        out_dir: Some(out.to_path_buf()),
        ..Default::default()
    }
}

fn sinc(out: &Path) -> Verdict {
    let t = Instant::now();
    let config = sinc_config(out);
    let report = match cmd_train(&config) {
        Ok(r) => r,
        Err(e) => return Verdict::Fail(format!("training failed: {e}")),
    };
    let net = Checkpoint::load(&out.join("checkpoint.json")).unwrap().network().unwrap();
    let (_, test) = gen_sinc(config.n_train, config.n_test, config.noise_frac, config.data_seed).unwrap();
    let sq: f64 = test
        .inputs
        .iter()
        .map(|x| (net.forward(x).unwrap()[0] - sinc_target(x[0])).powi(2))
        .sum();
    let clean = (sq / test.len() as f64).sqrt();
    let el = t.elapsed();
    verdict(
        clean <= 0.08 && within(el, 300),
        format!(
            "shape [1,1] r=5 geometric, noise std 0.1, best seed {}: RMSE vs clean target {clean:.4} (<= 0.08), \
             noisy test RMSE {:.4}, {:.1}s (<= 300s)",
            report.best_seed,
            report.best_test_rmse,
            el.as_secs_f64()
        ),
    )
}

fn distillation(sinc_dir: &Path) -> Verdict {
    let t = Instant::now();
    let Ok(ck) = Checkpoint::load(&sinc_dir.join("checkpoint.json")) else {
        return Verdict::Fail("no trained sinc checkpoint".into());
    };
    let net = ck.network().unwrap();
    let config = sinc_config(sinc_dir);
    let (train, _) = gen_sinc(config.n_train, config.n_test, config.noise_frac, config.data_seed).unwrap();
    let domains = calibrate_domains(&net, train.inputs.iter().map(Vec::as_slice)).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(909);
    let held_out: Vec<f64> = (0..1000).map(|_| rng.random_range(0.0..1.0)).collect();

    let mut max_errors = Vec::new();
    let mut rmse_g20 = f64::NAN;
    for grid in [5, 10, 20] {
        let dc = DistillConfig {
            grid,
            degree: 3,
            ..Default::default()
        };
        let (spline, report) = distill_network(&net, &domains, &dc).unwrap();
        max_errors.push(report.iter().map(|e| e.max_error).collect::<Vec<_>>());
        if grid == 20 {
            let sq: f64 = held_out
                .iter()
                .map(|&x| (spline.forward(&[x]).unwrap()[0] - net.forward(&[x]).unwrap()[0]).powi(2))
                .sum();
            rmse_g20 = (sq / held_out.len() as f64).sqrt();
        }
    }
    let decreasing = (0..max_errors[0].len())
        .all(|e| max_errors[0][e] > max_errors[1][e] && max_errors[1][e] > max_errors[2][e]);
    let el = t.elapsed();
    let fmt = |v: &Vec<f64>| v.iter().map(|e| format!("{e:.2e}")).collect::<Vec<_>>().join("/");
    verdict(
        rmse_g20 < 5e-2 && decreasing && within(el, 120),
        format!(
            "G=20 k=3 RMSE vs source on 1000 held-out inputs {rmse_g20:.2e} (< 5e-2); per-edge max error \
             G=5 {} > G=10 {} > G=20 {}: {decreasing}, {:.2}s (< 120s)",
            fmt(&max_errors[0]),
            fmt(&max_errors[1]),
            fmt(&max_errors[2]),
            el.as_secs_f64()
        ),
    )
}

/// Drops the wall-clock column of a metrics CSV.
fn without_elapsed(csv: &str) -> String {
    csv.lines()
        .map(|l| l.rsplit_once(',').map_or(l, |(head, _)| head))
        .collect::<Vec<_>>()
        .join("\n")
}

fn determinism() -> Verdict {
    let t = Instant::now();
    let dirs = [tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap()];
    for d in &dirs {
        let status = Command::new(env!("CARGO_BIN_EXE_qkan"))
            .args(["train", "--equation", "I.12.11", "--out"])
            .arg(d.path())
            .stdout(std::process::Stdio::null())
            .status()
            .expect("run qkan");
        if !status.success() {
            return Verdict::Fail(format!("qkan train exited with {status}"));
        }
    }
    let read = |d: &tempfile::TempDir, name: &str| std::fs::read(d.path().join(name)).unwrap();
    let mut checkpoints = vec!["checkpoint.json".to_string(), "summary.json".to_string()];
    let mut metrics = Vec::new();
    for seed in 0..5 {
        checkpoints.push(format!("checkpoint_seed{seed}.json"));
        metrics.push(format!("metrics_seed{seed}.csv"));
    }
    let same_checkpoints = checkpoints.iter().all(|f| read(&dirs[0], f) == read(&dirs[1], f));
    let same_metrics = metrics.iter().all(|f| {
        let a = String::from_utf8(read(&dirs[0], f)).unwrap();
        let b = String::from_utf8(read(&dirs[1], f)).unwrap();
        without_elapsed(&a) == without_elapsed(&b)
    });
    let raw_metrics = metrics.iter().all(|f| read(&dirs[0], f) == read(&dirs[1], f));
    let el = t.elapsed();
    verdict(
        same_checkpoints && same_metrics && within(el, 1200),
        format!(
            "two `qkan train` runs: checkpoints+summary byte-identical {same_checkpoints}, metrics CSVs identical \
             apart from elapsed_ms {same_metrics} (fully byte-identical: {raw_metrics}), {:.1}s",
            el.as_secs_f64()
        ),
    )
}

fn compression() -> Verdict {
    let t = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(1111);
    let init = DaruanInit::default();
    let hybrid = make_hqkan(64, 10, 3, &[], &init, &mut rng).unwrap();
    let plain = QkanLayer::new(64, 10, 3, &init, &mut rng).unwrap();
    let (h, p) = (hybrid.param_count(), plain.param_count());
    let el = t.elapsed();
    verdict(
        h < p && within(el, 1),
        format!("HQKAN(64,10,r=3) core {:?}: {h} parameters < plain 64->10 layer {p}", hybrid.shape),
    )
}

fn mnist() -> Verdict {
    let config = RunConfig::default();
    let Some(dir) = mnist_dir(&config) else {
        return Verdict::Skip("IDX files not found (set QKAN_MNIST_DIR)".into());
    };
    if !MNIST_FILES.iter().all(|f| dir.join(f).is_file()) {
        return Verdict::Skip(format!("IDX files not found in {}", dir.display()));
    }
    let t = Instant::now();
    let out = tempfile::tempdir().unwrap();
    let config = RunConfig {
        out_dir: Some(out.path().to_path_buf()),
        seeds: vec![0],
        ..config
    };
    match cmd_mnist_demo(&config) {
        Ok(r) => {
            let el = t.elapsed();
            verdict(
                r.test_accuracy >= 0.95 && within(el, 300),
                format!(
                    "digits {:?}, {} train / {} test, {} parameters: test accuracy {:.4} (>= 0.95), {:.1}s (<= 300s)",
                    r.digits,
                    r.n_train,
                    r.n_test,
                    r.param_count,
                    r.test_accuracy,
                    el.as_secs_f64()
                ),
            )
        }
        Err(e) => Verdict::Fail(format!("demo failed: {e}")),
    }
}

type Criterion = Box<dyn Fn() -> Verdict>;

fn main() -> ExitCode {
    let sinc_dir = tempfile::tempdir().unwrap();
    let sinc_path = sinc_dir.path().to_path_buf();
    let criteria: Vec<(&str, Criterion)> = vec![
        ("spectrum, unweighted circuits", Box::new(spectrum_unweighted)),
        ("spectrum, geometric weights", Box::new(spectrum_geometric)),
        ("gradient correctness", Box::new(gradients)),
        ("layer extension invariance", Box::new(extension)),
        ("boundedness", Box::new(boundedness)),
        ("regression I.12.11", Box::new(|| regression("I.12.11", 0.15))),
        ("regression II.2.42", Box::new(|| regression("II.2.42", 0.05))),
        ("sinc target", Box::new({
            let p = sinc_path.clone();
            move || sinc(&p)
        })),
        ("distillation fidelity", Box::new({
            let p = sinc_path.clone();
            move || distillation(&p)
        })),
        ("determinism", Box::new(determinism)),
        ("HQKAN compression", Box::new(compression)),
        ("MNIST demo", Box::new(mnist)),
    ];

    let mut failed = 0;
    for (i, (name, check)) in criteria.iter().enumerate() {
        let v = catch_unwind(AssertUnwindSafe(check)).unwrap_or_else(|e| {
            let msg = e
                .downcast_ref::<String>()
                .cloned()
                .or_else(|| e.downcast_ref::<&str>().map(|s| s.to_string()))
                .unwrap_or_default();
            Verdict::Fail(format!("panicked: {msg}"))
        });
        let (tag, detail) = match v {
            Verdict::Pass(d) => ("PASS", d),
            Verdict::Fail(d) => {
                failed += 1;
                ("FAIL", d)
            }
            Verdict::Skip(d) => ("SKIP", d),
        };
        println!("criterion {:>2} [{tag}] {name}: {detail}", i + 1);
    }
    println!(
        "acceptance: {} of {} criteria failed",
        failed,
        criteria.len()
    );
    if failed == 0 {
        ExitCode::SUCCESS
    } else {
        ExitCode::FAILURE
    }
}
