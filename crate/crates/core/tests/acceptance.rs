//! End-to-end acceptance checks. Each test prints one `PASS`/`FAIL` line.
//!
//! Run with `cargo test -p effgram --test acceptance -- --nocapture` to see the
//! lines; the long Gaussian runs are shared between criteria.

use std::sync::{Mutex, OnceLock};

use effgram::data::{gen_gaussian_alpha_split, gen_two_point, leave_out_plan, randomize_labels, Dataset, DatasetKind};
use effgram::factors::{assemble_blocks, contraction_exact, perturbation_factor, DEFAULT_BLOCK_CAP};
use effgram::net::{Activation, LossKind, MLPSpec};
use effgram::oracle::TwoPointParams;
use effgram::pipeline::{analyze, run_two_point_oracle, train_family, Analysis, AnalysisOptions, OracleReport, OracleSettings};
use effgram::traj::{measure_loss_difference, train_full, train_leave_out, InitOption, TrainConfig};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn verdict(id: u32, ok: bool, detail: String) -> bool {
    println!("criterion {id:>2}: {} | {detail}", if ok { "PASS" } else { "FAIL" });
    ok
}

/// Every analysis produced by the suite, for the PSD and spectral checks.
fn produced() -> &'static Mutex<Vec<(String, Analysis)>> {
    static ALL: OnceLock<Mutex<Vec<(String, Analysis)>>> = OnceLock::new();
    ALL.get_or_init(|| Mutex::new(Vec::new()))
}

fn keep(name: &str, a: &Analysis) {
    produced().lock().unwrap().push((name.to_string(), a.clone()));
}

// ---------------------------------------------------------------- two-point

fn oracle_run(n: usize, horizon: f64) -> &'static (OracleReport, Analysis) {
    static RUNS: OnceLock<Mutex<Vec<(usize, u64, &'static (OracleReport, Analysis))>>> = OnceLock::new();
    let runs = RUNS.get_or_init(|| Mutex::new(Vec::new()));
    let mut guard = runs.lock().unwrap();
    if let Some((_, _, r)) = guard.iter().find(|(m, h, _)| *m == n && *h == horizon.to_bits()) {
        return r;
    }
    let params = TwoPointParams::new(n, 1.0, 1.0).unwrap().with_eps0(1e-3);
    let out: &'static (OracleReport, Analysis) =
        Box::leak(Box::new(run_two_point_oracle(&OracleSettings::new(params, horizon)).unwrap()));
    keep(&format!("two-point n={n} T={horizon}"), &out.1);
    guard.push((n, horizon.to_bits(), out));
    out
}

#[test]
fn criterion_01_oracle_contraction() {
    let mut all_ok = true;
    for n in [4usize, 8, 100] {
        let data = gen_two_point(n, 1.0, 0.5, 2).unwrap();
        let spec = MLPSpec::linear(2, 1);
        let cfg = TrainConfig::new(1e-3, 10_000);
        let plan = leave_out_plan(n, 1, n, 0).unwrap();
        let full = train_full(&spec, &data, &cfg).unwrap();
        let outs = train_leave_out(&spec, &data, &plan, &cfg, None).unwrap();
        let delta = measure_loss_difference(&spec, &full, &outs, &plan, &data).unwrap();
        let c = contraction_exact(&spec, &full, &outs, &plan, &data, &delta).unwrap();
        let target = (n as f64 - 2.0) / (2.0 * (n as f64 - 1.0));
        let unmasked: Vec<f64> = c.values.iter().zip(&c.masked).filter(|(_, m)| !**m).map(|(v, _)| *v).collect();
        let dev = unmasked.iter().fold(0.0f64, |m, v| m.max((v - target).abs()));
        let mean = unmasked.iter().sum::<f64>() / unmasked.len().max(1) as f64;
        let ok = !unmasked.is_empty() && dev <= 1e-6;
        all_ok &= verdict(
            1,
            ok,
            format!(
                "n={n}: target (n-2)/(2(n-1)) = {target:.8}, measured mean {mean:.8} (ratio {:.6}), max deviation {dev:.3e}, {} unmasked",
                mean / target,
                unmasked.len()
            ),
        );
    }
    assert!(all_ok, "contraction factor differs from the stated closed form");
}

#[test]
fn criterion_02_oracle_gram_spectrum() {
    let mut all_ok = true;
    for n in [4usize, 8, 20] {
        let (report, _) = oracle_run(n, 10.0);
        let ok = report.span_within(0.1) && report.complement_in_bracket();
        all_ok &= verdict(
            2,
            ok,
            format!(
                "n={n}: span {:?} vs λ(T)={:.6e}; complement [{:.6e}, {:.6e}] in [{:.6e}, {:.6e}]",
                report.span_eigenvalues,
                report.eigen.lambda,
                report.complement_min,
                report.complement_max,
                report.eigen.lambda_prime_lower,
                report.eigen.lambda_prime_upper
            ),
        );
    }
    assert!(all_ok);
}

#[test]
fn criterion_09_comparison_bounds() {
    let (report, _) = oracle_run(8, 20.0);
    let p = report.settings.params;
    let norm = p.y1 * p.y1 + p.y2 * p.y2;
    let weight = (2.0 * norm / p.n as f64).sqrt();
    let accumulated = norm / (4.0 * (p.n as f64 - 1.0));
    let exact = report.bounds.weight_norm == weight && report.bounds.accumulated_perturbation == accumulated;
    let c_t = report.c_bar_measured_mean * report.horizon;
    let small = report.prediction * 10.0 <= weight && report.prediction * 10.0 <= accumulated;
    let ok = exact && c_t >= 8.0 && small;
    verdict(
        9,
        ok,
        format!(
            "bounds {:.6} / {:.6} (expected {weight:.6} / {accumulated:.6}); c̄T = {c_t:.2}; prediction {:.3e}",
            report.bounds.weight_norm, report.bounds.accumulated_perturbation, report.prediction
        ),
    );
    assert!(ok);
}

// ---------------------------------------------------------------- trace identity

fn random_task(rng: &mut ChaCha8Rng, n: usize, d: usize, c: usize, loss: LossKind) -> Dataset {
    let inputs = (0..n * d).map(|_| rng.random_range(-1.5..1.5)).collect();
    let mut targets = vec![0.0; n * c];
    for row in targets.chunks_mut(c) {
        match loss {
            LossKind::CrossEntropy => row[rng.random_range(0..c)] = 1.0,
            LossKind::Squared => row.iter_mut().for_each(|v| *v = rng.random_range(-1.0..1.0)),
        }
    }
    Dataset::new(inputs, targets, d, c, DatasetKind::External, 0).unwrap()
}

#[test]
fn criterion_03_trace_identity() {
    let mut rng = ChaCha8Rng::seed_from_u64(2024);
    let mut worst = 0.0f64;
    for case in 0..50 {
        let n = rng.random_range(2..=30);
        let c = rng.random_range(1..=3);
        let d = rng.random_range(1..=6);
        let loss = if c == 1 || rng.random_bool(0.5) { LossKind::Squared } else { LossKind::CrossEntropy };
        let act = [Activation::Tanh, Activation::Relu, Activation::Identity][rng.random_range(0..3)];
        let mut widths = vec![d];
        widths.extend((0..rng.random_range(1..=2)).map(|_| rng.random_range(1..=16)));
        widths.push(c);
        let spec = MLPSpec::new(widths, act, loss).unwrap();
        let data = random_task(&mut rng, n, d, c, loss);
        let w = spec.init_weights(case);
        let trace = perturbation_factor(&spec, &w, &data).unwrap() * (n as f64 - 1.0);
        let blocks = assemble_blocks(&spec, &w, &data, 0.0, DEFAULT_BLOCK_CAP).unwrap();
        let form = blocks.gap_operator().quadratic_form(&blocks.residual).unwrap();
        worst = worst.max((trace - form).abs() / trace.abs().max(1.0));
    }
    let ok = worst <= 1e-8;
    verdict(3, ok, format!("50 random MLPs, worst |tr Σ̂ − rᵀ(M−H/n)r| / max(1, tr Σ̂) = {worst:.3e}"));
    assert!(ok);
}

// ---------------------------------------------------------------- Gaussian-α

const N_TRAIN: usize = 100;
const DIM: usize = 16;

fn gaussian_task(random: bool) -> Dataset {
    let teacher = MLPSpec::new(vec![10, 16, 2], Activation::Tanh, LossKind::CrossEntropy).unwrap();
    let (train, _) = gen_gaussian_alpha_split(N_TRAIN, 1000, DIM, 1.0, &teacher, 7).unwrap();
    if random {
        randomize_labels(&train, 2, 11).unwrap()
    } else {
        train
    }
}

fn gaussian_run(eta: f64, horizon: f64, random: bool) -> Analysis {
    let data = gaussian_task(random);
    let spec = MLPSpec::new(vec![DIM, 24, 2], Activation::Tanh, LossKind::CrossEntropy).unwrap();
    let steps = (horizon / eta).round() as usize;
    let cfg = TrainConfig::new(eta, steps).with_seed(3).with_init(InitOption::ZeroOutput);
    let plan = leave_out_plan(N_TRAIN, 10, 10, 5).unwrap();
    let family = train_family(&spec, &data, &plan, &cfg).unwrap();
    let a = analyze(&spec, &data, &family, &plan, &AnalysisOptions::default(), None).unwrap();
    keep(&format!("gaussian-alpha eta={eta} T={horizon} random={random}"), &a);
    a
}

fn benign_coarse() -> &'static Analysis {
    static A: OnceLock<Analysis> = OnceLock::new();
    A.get_or_init(|| gaussian_run(0.2, 480.0, false))
}

fn benign_fine() -> &'static Analysis {
    static A: OnceLock<Analysis> = OnceLock::new();
    A.get_or_init(|| gaussian_run(0.1, 480.0, false))
}

fn long_pair() -> &'static (Analysis, Analysis) {
    static A: OnceLock<(Analysis, Analysis)> = OnceLock::new();
    A.get_or_init(|| (gaussian_run(0.2, 2000.0, false), gaussian_run(0.2, 2000.0, true)))
}

fn max_of(v: &[f64]) -> f64 {
    v.iter().copied().fold(0.0, f64::max)
}

#[test]
fn criterion_04_propagator_fidelity() {
    let coarse = max_of(&benign_coarse().residual_error);
    let fine = max_of(&benign_fine().residual_error);
    let ratio = coarse / fine;
    let ok = coarse <= 0.01 && fine <= 0.01 && (2.0 / 1.5..=2.0 * 1.5).contains(&ratio);
    verdict(
        4,
        ok,
        format!("max relative residual error {coarse:.3e} (η=0.2), {fine:.3e} (η=0.1), ratio {ratio:.3}"),
    );
    assert!(ok);
}

#[test]
fn criterion_05_delta_reconstruction() {
    let a = benign_coarse();
    let measured = a.measured_delta();
    let c_eps = *a.delta_c_eps.last().unwrap();
    let c_eps_hat = *a.delta_c_eps_hat.last().unwrap();
    let e1 = (c_eps - measured).abs() / measured.abs();
    let e2 = (c_eps_hat - measured).abs() / measured.abs();
    let ok = e1 <= 0.05 && e2 <= 0.15;
    verdict(
        5,
        ok,
        format!(
            "Δ̄(T) {measured:.5e}; Δ̄(c,ε,T) {c_eps:.5e} (rel {e1:.3}, tol 0.05); Δ̄(c,ε̂,T) {c_eps_hat:.5e} (rel {e2:.3}, tol 0.15)"
        ),
    );
    assert!(ok);
}

#[test]
fn criterion_07_benign_vs_random() {
    let (benign, random) = long_pair();
    let (rb, rr) = (benign.spectral_report().unwrap(), random.spectral_report().unwrap());
    let ratio = random.increment / benign.increment;
    let a = ratio >= 3.0;
    let b = rr.sigma_mean > rb.sigma_mean;
    let c = rb.explained_residual_auc() > rr.explained_residual_auc() && rb.residual_in_tail(0.03) > rr.residual_in_tail(0.03);
    let ok = a && b && c;
    verdict(
        7,
        ok,
        format!(
            "(a) prediction {:.4e} vs {:.4e}, ratio {ratio:.2} [{}]; (b) σ̄ benign {:.4e} random {:.4e} [{}]; \
             (c) explained-residual mean {:.3} vs {:.3}, share of r(0) in 3% eigen-mass tail {:.3} vs {:.3} [{}]; \
             train loss {:.4} / {:.4}; measured Δ̄ {:.4e} / {:.4e}",
            benign.increment,
            random.increment,
            if a { "ok" } else { "no" },
            rb.sigma_mean,
            rr.sigma_mean,
            if b { "ok" } else { "no" },
            rb.explained_residual_auc(),
            rr.explained_residual_auc(),
            rb.residual_in_tail(0.03),
            rr.residual_in_tail(0.03),
            if c { "ok" } else { "no" },
            benign.final_train_loss,
            random.final_train_loss,
            benign.measured_delta(),
            random.measured_delta(),
        ),
    );
    assert!(ok);
}

// ---------------------------------------------------------------- gradients

fn rel_close(a: f64, b: f64, tol: f64) -> bool {
    (a - b).abs() <= tol * a.abs().max(b.abs()).max(1.0)
}

#[test]
fn criterion_08_gradient_correctness() {
    let mut rng = ChaCha8Rng::seed_from_u64(77);
    let mut failures = Vec::new();
    for case in 0..100u64 {
        let act = if rng.random_bool(0.5) { Activation::Tanh } else { Activation::Identity };
        let loss = if rng.random_bool(0.5) { LossKind::CrossEntropy } else { LossKind::Squared };
        let c = rng.random_range(2..4);
        let spec = MLPSpec::new(vec![rng.random_range(1..5), rng.random_range(1..7), c], act, loss).unwrap();
        let w = spec.init_weights(case);
        let x: Vec<f64> = (0..spec.input_dim()).map(|_| rng.random_range(-1.0..1.0)).collect();
        let y: Vec<f64> = match loss {
            LossKind::CrossEntropy => {
                let k = rng.random_range(0..c);
                (0..c).map(|j| if j == k { 1.0 } else { 0.0 }).collect()
            }
            LossKind::Squared => (0..c).map(|_| rng.random_range(-1.0..1.0)).collect(),
        };
        let d = spec.sample_derivatives(&w, &x, &y).unwrap();
        let grad = spec.per_sample_gradient(&w, &x, &y).unwrap();
        let h = 1e-6;
        let mut ok = true;
        for k in 0..w.len() {
            let (mut wp, mut wm) = (w.clone(), w.clone());
            wp.values[k] += h;
            wm.values[k] -= h;
            let (fp, _) = spec.forward(&wp, &x).unwrap();
            let (fm, _) = spec.forward(&wm, &x).unwrap();
            ok &= rel_close((loss.value(&fp, &y) - loss.value(&fm, &y)) / (2.0 * h), grad[k], 1e-6);
            for j in 0..c {
                ok &= rel_close((fp[j] - fm[j]) / (2.0 * h), d.jacobian[(j, k)], 1e-6);
            }
        }
        let hl = 1e-5;
        let f = spec.forward(&w, &x).unwrap().0;
        for j in 0..c {
            let (mut fp, mut fm) = (f.clone(), f.clone());
            fp[j] += hl;
            fm[j] -= hl;
            ok &= rel_close((loss.value(&fp, &y) - loss.value(&fm, &y)) / (2.0 * hl), d.residual[j], 1e-6);
            let (_, rp) = loss.value_and_residual(&fp, &y);
            let (_, rm) = loss.value_and_residual(&fm, &y);
            for i in 0..c {
                ok &= rel_close((rp[i] - rm[i]) / (2.0 * hl), d.output_hessian[(i, j)], 1e-6);
            }
        }
        if !ok {
            failures.push(case);
        }
    }
    let ok = failures.is_empty();
    verdict(8, ok, format!("100 random cases, failing cases {failures:?}"));
    assert!(ok);
}

// ---------------------------------------------------------------- every K

fn ensure_all_runs() {
    for n in [4usize, 8, 20] {
        oracle_run(n, 10.0);
    }
    oracle_run(8, 20.0);
    benign_coarse();
    benign_fine();
    long_pair();
}

#[test]
fn criterion_06_psd_and_consistency() {
    ensure_all_runs();
    let all = produced().lock().unwrap();
    let mut all_ok = true;
    let mut seen = std::collections::HashSet::new();
    for (name, a) in all.iter().filter(|(name, _)| seen.insert(name.clone())) {
        let asym = a.gram.relative_asymmetry();
        let (min, norm) = a.gram.extreme_eigenvalues().unwrap();
        let form = a.gram.quadratic_form(&a.r0).unwrap();
        let recon = *a.delta_c_eps_hat.last().unwrap();
        let diff = (form - recon).abs();
        let ok = asym <= 1e-10 && min >= -1e-8 * norm && diff <= 1e-10 * recon.abs().max(1.0);
        all_ok &= verdict(
            6,
            ok,
            format!("{name}: asymmetry {asym:.2e}, λmin/‖K‖ {:.2e}, |rᵀKr − Δ̄(c,ε̂,T)| {diff:.2e}", min / norm),
        );
    }
    assert!(all_ok);
}

#[test]
fn criterion_10_spectral_sanity() {
    ensure_all_runs();
    let all = produced().lock().unwrap();
    let mut all_ok = true;
    let mut seen = std::collections::HashSet::new();
    for (name, a) in all.iter().filter(|(name, _)| seen.insert(name.clone())) {
        let rep = a.spectral_report().unwrap();
        let direct = a.gram.k.quadratic_form(&a.r0).unwrap();
        let diff = (direct - rep.quadratic_form).abs();
        let parseval = rep.parseval_error();
        let ok = parseval <= 1e-10 && rep.is_monotone() && diff <= 1e-8 * direct.abs().max(1.0);
        all_ok &= verdict(
            10,
            ok,
            format!("{name}: Parseval {parseval:.2e}, monotone {}, |rᵀKr − Σσ(rᵀU)²| {diff:.2e}", rep.is_monotone()),
        );
    }
    assert!(all_ok);
}
