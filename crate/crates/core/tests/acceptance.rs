//! End-to-end acceptance run. Prints one PASS/FAIL line per criterion and
//! exits nonzero if any criterion fails.

use std::path::PathBuf;
use std::time::{Duration, Instant};

use ndarray::{Array1, Array2};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serlu::activations::{dropout_mean_check, serlu_f_min, shift_dropout, ActivationKind, ActivationSpec, DropoutConfig};
use serlu::analysis::{grid_scan, iterate_to_fixed_point, jacobian_at, solve_serlu_params, DomainBox, JACOBIAN_STEP};
use serlu::data::{load_mnist, DATA_DIR_ENV};
use serlu::moments::{moment_map_montecarlo, moment_map_quadrature, moment_map_serlu, MomentPair, WeightStats};
use serlu::nn::{gradient_check, train, History, Network, NetworkConfig, TrainConfig};

struct Verdict {
    pass: bool,
    detail: String,
    /// Bit patterns of every reported number, for the repeat-run comparison.
    fingerprint: Vec<u64>,
}

impl Verdict {
    fn new(pass: bool, detail: String, values: &[f64]) -> Self {
        Verdict {
            pass,
            detail,
            fingerprint: values.iter().map(|v| v.to_bits()).collect(),
        }
    }

    fn error(e: impl std::fmt::Display) -> Self {
        Verdict {
            pass: false,
            detail: format!("error: {e}"),
            fingerprint: vec![],
        }
    }
}

fn timed<T>(f: impl FnOnce() -> T) -> (T, Duration) {
    let start = Instant::now();
    let out = f();
    (out, start.elapsed())
}

fn criterion_1() -> Verdict {
    let (r, t) = timed(|| solve_serlu_params(&MomentPair::FIXED_POINT, &WeightStats::NORMALIZED, 1e-12));
    let r = match r {
        Ok(r) => r,
        Err(e) => return Verdict::error(e),
    };
    let pass = (r.alpha - 2.90427).abs() <= 1e-4 && (r.lambda - 1.07862).abs() <= 1e-4 && r.residual <= 1e-10 && t < Duration::from_secs(1);
    Verdict::new(
        pass,
        format!("alpha={:.8} lambda={:.8} residual={:.1e} time={:.3}s", r.alpha, r.lambda, r.residual, t.as_secs_f64()),
        &[r.alpha, r.lambda, r.residual],
    )
}

fn criterion_2() -> Verdict {
    let (res, t) = timed(|| -> serlu::Result<_> {
        let serlu = jacobian_at(&ActivationSpec::serlu(), &MomentPair::FIXED_POINT, &WeightStats::NORMALIZED, JACOBIAN_STEP)?;
        let selu = jacobian_at(&ActivationSpec::selu(), &MomentPair::FIXED_POINT, &WeightStats::NORMALIZED, JACOBIAN_STEP)?;
        Ok((serlu, selu))
    });
    let (j, selu) = match res {
        Ok(v) => v,
        Err(e) => return Verdict::error(e),
    };
    let expected = [[0.0, 0.194557], [0.0, 0.605258]];
    let m = j.matrix();
    let entries_ok = (0..2).all(|r| (0..2).all(|c| (m[r][c] - expected[r][c]).abs() <= 1e-5));
    let pass = entries_ok && (j.spectral_norm - 0.635758).abs() <= 1e-5 && (selu.spectral_norm - 0.7877).abs() <= 1e-3 && t < Duration::from_secs(1);
    Verdict::new(
        pass,
        format!(
            "J=[[{:.7}, {:.7}], [{:.7}, {:.7}]] norm={:.8} selu_norm={:.6} time={:.3}s",
            m[0][0],
            m[0][1],
            m[1][0],
            m[1][1],
            j.spectral_norm,
            selu.spectral_norm,
            t.as_secs_f64()
        ),
        &[m[0][0], m[0][1], m[1][0], m[1][1], j.spectral_norm, selu.spectral_norm],
    )
}

fn criterion_3() -> Verdict {
    let domain = DomainBox::standard();
    let (r, t) = timed(|| grid_scan(&ActivationSpec::serlu(), &domain, 1));
    let r = match r {
        Ok(r) => r,
        Err(e) => return Verdict::error(e),
    };
    let targets = [
        (r.max_spectral_norm.value, 0.7837),
        (r.lower_bound_mu_tilde.value, -0.0751),
        (r.upper_bound_mu_tilde.value, 0.1629),
        (r.lower_bound_nu_tilde.value, 0.8125),
        (r.upper_bound_nu_tilde.value, 1.4551),
    ];
    let values_ok = targets.iter().all(|(v, want)| (v - want).abs() <= 1e-3);
    let boundary = r.extremes_on_boundary(&domain);
    let pass = values_ok && boundary && t < Duration::from_secs(300);
    let values: Vec<f64> = r.flat_fields().into_iter().map(|(_, v)| v).collect();
    Verdict::new(
        pass,
        format!(
            "max_norm={:.6} mu~=[{:.6}, {:.6}] nu~=[{:.6}, {:.6}] on_boundary={boundary} points={} time={:.2}s",
            targets[0].0,
            targets[1].0,
            targets[2].0,
            targets[3].0,
            targets[4].0,
            r.points_evaluated,
            t.as_secs_f64()
        ),
        &values,
    )
}

fn random_point(rng: &mut ChaCha8Rng) -> (MomentPair, WeightStats) {
    (
        MomentPair {
            mu: rng.random_range(-0.2..=0.2),
            nu: rng.random_range(0.8..=1.5),
        },
        WeightStats {
            omega: rng.random_range(-0.1..=0.1),
            tau: rng.random_range(0.9..=1.2),
        },
    )
}

fn criterion_4() -> Verdict {
    let spec = ActivationSpec::serlu();
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let mut max_gap: f64 = 0.0;
    let mut values = Vec::new();
    for _ in 0..100 {
        let (p, w) = random_point(&mut rng);
        let (c, q) = match (moment_map_serlu(&p, &w, &spec), moment_map_quadrature(&spec, &p, &w)) {
            (Ok(c), Ok(q)) => (c, q),
            (Err(e), _) | (_, Err(e)) => return Verdict::error(e),
        };
        max_gap = max_gap.max((c.mu - q.mu).abs()).max((c.nu - q.nu).abs());
        values.extend([c.mu, c.nu, q.mu, q.nu]);
    }
    let mut worst_z: f64 = 0.0;
    for i in 0..20 {
        let (p, w) = random_point(&mut rng);
        let res = (|| -> serlu::Result<_> {
            Ok((
                moment_map_serlu(&p, &w, &spec)?,
                moment_map_quadrature(&spec, &p, &w)?,
                moment_map_montecarlo(&spec, &p, &w, 10_000_000, 100 + i)?,
            ))
        })();
        let (c, q, mc) = match res {
            Ok(v) => v,
            Err(e) => return Verdict::error(e),
        };
        for (oracle, m, se) in [(c.mu, mc.moments.mu, mc.se_mu), (c.nu, mc.moments.nu, mc.se_nu), (q.mu, mc.moments.mu, mc.se_mu), (q.nu, mc.moments.nu, mc.se_nu)] {
            worst_z = worst_z.max((m - oracle).abs() / se);
        }
        values.extend([mc.moments.mu, mc.moments.nu, mc.se_mu, mc.se_nu]);
    }
    Verdict::new(
        max_gap <= 1e-8 && worst_z <= 4.0,
        format!("closed vs quadrature max gap={max_gap:.2e} (100 points); monte carlo worst |z|={worst_z:.2} (20 points, n=1e7)"),
        &values,
    )
}

fn criterion_5() -> Verdict {
    let spec = ActivationSpec::serlu();
    let target = MomentPair::FIXED_POINT;
    let mut details = Vec::new();
    let mut values = Vec::new();
    let mut pass = true;
    for (mu, nu) in [(-0.2, 0.8), (-0.2, 1.5), (0.2, 0.8), (0.2, 1.5)] {
        let run = match iterate_to_fixed_point(&spec, &MomentPair { mu, nu }, &WeightStats::NORMALIZED, 1e-12, 50) {
            Ok(r) => r,
            Err(e) => return Verdict::error(e),
        };
        let dist = run.last.distance(&target);
        // ratios once the first map application has settled mu, above the rounding floor
        let ratios = run.error_ratios(&target, 1e-11);
        let tail = &ratios[ratios.len().min(3)..];
        let worst = tail.iter().copied().fold(0.0, f64::max);
        let steps_to_1e6 = run.trajectory.iter().position(|p| p.distance(&target) <= 1e-6).unwrap_or(usize::MAX);
        let ok = dist <= 1e-6 && steps_to_1e6 <= 50 && !tail.is_empty() && worst <= 0.69;
        pass &= ok;
        details.push(format!("({mu},{nu}): steps={steps_to_1e6} ratio<={worst:.4}"));
        values.extend([run.last.mu, run.last.nu, worst]);
    }
    Verdict::new(pass, details.join(" "), &values)
}

fn criterion_6() -> Verdict {
    let f_min = serlu_f_min(serlu::activations::SERLU_ALPHA, serlu::activations::SERLU_LAMBDA);
    let mut pass = true;
    let mut details = Vec::new();
    let mut values = Vec::new();
    for q in [0.5, 0.9] {
        match dropout_mean_check(q, f_min, 1_000_000, 6) {
            Ok(r) => {
                pass &= r.passes;
                details.push(format!("q={q}: shift={:.2e} se={:.2e}", r.mean_shift, r.standard_error));
                values.extend([r.mean_shift, r.standard_error]);
            }
            Err(e) => return Verdict::error(e),
        }
    }
    // zero shift against plain inverted dropout on a shared seed
    let mut rng = ChaCha8Rng::seed_from_u64(66);
    let z: Vec<f64> = (0..100_000).map(|_| rng.random_range(-3.0..3.0)).collect();
    let mut bitwise = true;
    for q in [0.5, 0.9] {
        let cfg = DropoutConfig::new(q, 0.0, 61).expect("valid dropout config");
        let (out, mask) = shift_dropout(&z, &cfg, true).expect("dropout runs");
        bitwise &= out.iter().zip(&z).zip(&mask).all(|((o, zi), keep)| o.to_bits() == (if *keep { zi / q } else { 0.0 }).to_bits());
    }
    pass &= bitwise;
    details.push(format!("zero-shift bitwise equal to inverted dropout: {bitwise}"));
    Verdict::new(pass, details.join("; "), &values)
}

fn criterion_7() -> Verdict {
    let mut worst: f64 = 0.0;
    let mut details = Vec::new();
    let mut values = Vec::new();
    for kind in ActivationKind::ALL {
        let mut net = match Network::new(&NetworkConfig {
            sizes: vec![8, 7, 6, 5],
            activation: ActivationSpec::new(kind),
            keep_prob: Some(0.8),
            seed: 7,
        }) {
            Ok(n) => n,
            Err(e) => return Verdict::error(e),
        };
        for layer in net.layers.iter_mut() {
            let n = layer.bias.len();
            layer.bias = Array1::from_shape_fn(n, |i| 0.05 * i as f64 - 0.1);
        }
        let mut rng = ChaCha8Rng::seed_from_u64(70);
        let x = Array2::from_shape_simple_fn((6, 8), || rng.random_range(-1.5..1.5));
        let labels = [0u8, 1, 2, 3, 4, 0];
        let masks = net.sample_masks(6);
        match gradient_check(&net, &x, &labels, &masks, 1e-5, 1e-6) {
            Ok(r) => {
                worst = worst.max(r.max_rel_error);
                details.push(format!("{kind}={:.1e}", r.max_rel_error));
                values.push(r.max_rel_error);
            }
            Err(e) => return Verdict::error(e),
        }
    }
    Verdict::new(worst < 1e-4, format!("max rel error {}", details.join(" ")), &values)
}

fn mnist_dir() -> PathBuf {
    std::env::var_os(DATA_DIR_ENV)
        .map(PathBuf::from)
        .unwrap_or_else(|| PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("../../data/mnist"))
}

fn mnist_run(splits: &serlu::data::Splits, kind: ActivationKind, seed: u64) -> serlu::Result<(History, Duration)> {
    let cfg = NetworkConfig {
        sizes: vec![784, 200, 200, 200, 200, 10],
        activation: ActivationSpec::new(kind),
        keep_prob: Some(0.9),
        seed,
    };
    let train_cfg = TrainConfig {
        epochs: 20,
        seed,
        ..TrainConfig::default()
    };
    let mut net = Network::new(&cfg)?;
    let (h, t) = timed(|| train(&mut net, &splits.train, &splits.validation, &train_cfg));
    Ok((h?, t))
}

fn history_values(h: &History) -> Vec<f64> {
    h.epochs.iter().flat_map(|e| [e.train_loss, e.val_loss, e.val_acc]).collect()
}

fn finite(h: &History) -> bool {
    h.epochs.iter().all(|e| e.train_loss.is_finite() && e.val_loss.is_finite())
}

/// Returns the verdict and the seed-1 SERLU history for the repeat check.
fn criterion_8() -> (Verdict, Option<History>) {
    let splits = match load_mnist(mnist_dir()) {
        Ok(s) => s,
        Err(e) => return (Verdict::error(format!("{e} (set {DATA_DIR_ENV})")), None),
    };
    let mut details = Vec::new();
    let mut values = Vec::new();
    let mut pass = true;
    let mut serlu_seed1 = None;
    let mut final_losses: Vec<(ActivationKind, u64, f64)> = Vec::new();
    for kind in ActivationKind::ALL {
        match mnist_run(&splits, kind, 1) {
            Ok((h, t)) => {
                let ok = finite(&h) && h.epochs.len() == 20;
                pass &= ok;
                let last = h.last().expect("20 epochs");
                eprintln!("  {kind} seed 1: val_acc={:.4} val_loss={:.4} time={:.0}s", last.val_acc, last.val_loss, t.as_secs_f64());
                final_losses.push((kind, 1, last.val_loss));
                if !ok {
                    details.push(format!("{kind} produced non-finite loss"));
                }
                if kind == ActivationKind::Serlu {
                    let best = h.epochs.iter().map(|e| e.val_acc).fold(0.0, f64::max);
                    let reached = best >= 0.97;
                    let fast = t < Duration::from_secs(15 * 60);
                    pass &= reached && fast;
                    details.push(format!("serlu best val_acc={best:.4} final={:.4} time={:.0}s", last.val_acc, t.as_secs_f64()));
                    serlu_seed1 = Some(h.clone());
                }
                values.extend(history_values(&h));
            }
            Err(e) => {
                pass = false;
                details.push(format!("{kind}: {e}"));
            }
        }
    }
    details.push("all six activations finite over 20 epochs".into());
    for seed in [2, 3] {
        for kind in [ActivationKind::Serlu, ActivationKind::Selu] {
            match mnist_run(&splits, kind, seed) {
                Ok((h, t)) => {
                    let last = h.last().expect("20 epochs");
                    eprintln!("  {kind} seed {seed}: val_acc={:.4} val_loss={:.4} time={:.0}s", last.val_acc, last.val_loss, t.as_secs_f64());
                    final_losses.push((kind, seed, last.val_loss));
                    values.extend(history_values(&h));
                }
                Err(e) => {
                    pass = false;
                    details.push(format!("{kind} seed {seed}: {e}"));
                }
            }
        }
    }
    let mean = |k: ActivationKind| {
        let v: Vec<f64> = final_losses.iter().filter(|(kk, _, _)| *kk == k).map(|x| x.2).collect();
        v.iter().sum::<f64>() / v.len().max(1) as f64
    };
    let (ms, me) = (mean(ActivationKind::Serlu), mean(ActivationKind::Selu));
    details.push(format!(
        "3-seed mean final val_loss serlu={ms:.4} selu={me:.4} ({}, reported only)",
        if ms <= me { "serlu <= selu" } else { "serlu > selu" }
    ));
    (Verdict::new(pass, details.join("; "), &values), serlu_seed1)
}

fn criterion_9(first: &[Vec<u64>], serlu_seed1: Option<&History>) -> Verdict {
    let again: Vec<Vec<u64>> = vec![
        criterion_1().fingerprint,
        criterion_2().fingerprint,
        criterion_3().fingerprint,
        criterion_4().fingerprint,
        criterion_5().fingerprint,
        criterion_6().fingerprint,
        criterion_7().fingerprint,
    ];
    let mut mismatched: Vec<usize> = (0..7).filter(|&i| first[i].is_empty() || first[i] != again[i]).map(|i| i + 1).collect();

    let training_same = match (serlu_seed1, load_mnist(mnist_dir())) {
        (Some(h), Ok(splits)) => match mnist_run(&splits, ActivationKind::Serlu, 1) {
            Ok((h2, _)) => history_values(h).iter().map(|v| v.to_bits()).eq(history_values(&h2).iter().map(|v| v.to_bits())),
            Err(_) => false,
        },
        _ => false,
    };
    if !training_same {
        mismatched.push(8);
    }

    let domain = DomainBox::standard();
    let spec = ActivationSpec::serlu();
    let workers_same = match (grid_scan(&spec, &domain, 1), grid_scan(&spec, &domain, 4)) {
        (Ok(a), Ok(b)) => a == b,
        _ => false,
    };
    Verdict::new(
        mismatched.is_empty() && workers_same,
        format!("repeat runs bit-identical: {} ; grid scan workers 1 vs 4 identical: {workers_same}", if mismatched.is_empty() { "all".to_string() } else { format!("mismatch in {mismatched:?}") }),
        &[],
    )
}

fn main() {
    // `cargo test` passes filter arguments; this target always runs everything
    let started = Instant::now();
    let mut verdicts: Vec<(usize, &str, Verdict)> = Vec::new();
    let report = |n: usize, name: &'static str, v: Verdict, list: &mut Vec<(usize, &str, Verdict)>| {
        println!("criterion {n} [{name}]: {} | {}", if v.pass { "PASS" } else { "FAIL" }, v.detail);
        list.push((n, name, v));
    };
    report(1, "parameter derivation", criterion_1(), &mut verdicts);
    report(2, "jacobian", criterion_2(), &mut verdicts);
    report(3, "grid scan", criterion_3(), &mut verdicts);
    report(4, "oracle triangle", criterion_4(), &mut verdicts);
    report(5, "contraction", criterion_5(), &mut verdicts);
    report(6, "shift-dropout", criterion_6(), &mut verdicts);
    report(7, "gradient check", criterion_7(), &mut verdicts);
    let (v8, serlu_seed1) = criterion_8();
    report(8, "mnist fnn", v8, &mut verdicts);
    let first: Vec<Vec<u64>> = verdicts.iter().take(7).map(|(_, _, v)| v.fingerprint.clone()).collect();
    let v9 = criterion_9(&first, serlu_seed1.as_ref());
    report(9, "determinism", v9, &mut verdicts);

    let failed: Vec<usize> = verdicts.iter().filter(|(_, _, v)| !v.pass).map(|(n, _, _)| *n).collect();
    println!("acceptance: {} of {} passed in {:.0}s", verdicts.len() - failed.len(), verdicts.len(), started.elapsed().as_secs_f64());
    if !failed.is_empty() {
        println!("failed criteria: {failed:?}");
        std::process::exit(1);
    }
}
