use std::path::{Path, PathBuf};

use effgram::data::Dataset;
use effgram::fsutil::{read, write_atomic};
use effgram::gram::{EffectiveGram, PropagatorMethod};
use effgram::oracle::TwoPointParams;
use effgram::pipeline::{analyze as run_analysis, final_gap, report_csv, run_two_point_oracle, train_family, Family, OracleSettings, ReportRow};
use effgram::spectral::{spectrum_stats, SpectralReport};
use effgram::traj::{read_dump, write_dump};
use serde::{Deserialize, Serialize};

use crate::config::RunConfig;
use crate::CliError;

const CONFIG: &str = "config.json";
const TRAIN: &str = "train.json";
const TEST: &str = "test.json";
const PREDICTION: &str = "prediction.json";
const R0: &str = "r0.json";

/// Horizon summary written by `analyze`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Prediction {
    pub start_step: usize,
    pub start_time: f64,
    pub horizon: f64,
    pub method: PropagatorMethod,
    pub delta_bar_start: f64,
    pub delta_bar_t: f64,
    pub delta_c_eps_t: f64,
    pub delta_c_eps_hat_t: f64,
    /// `r⃗(t₀)ᵀ K r⃗(t₀)`.
    pub quadratic_form: f64,
    pub r0_norm_sq: f64,
    pub gap_t: Option<f64>,
    pub train_loss_t: f64,
    pub interpolating: bool,
    pub max_residual_error: f64,
    /// Absent when `ω` overflows.
    pub sup_omega_m: Option<f64>,
    pub omega_decays: bool,
    pub integral_levels_off: bool,
    pub fraction_negative_c: f64,
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<(), CliError> {
    let mut bytes = serde_json::to_vec_pretty(value).map_err(effgram::Error::from)?;
    bytes.push(b'\n');
    Ok(write_atomic(path, &bytes)?)
}

/// Reads a JSON artifact that an earlier command must have produced.
fn read_artifact<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<T, CliError> {
    if !path.exists() {
        return Err(effgram::Error::Integrity(format!("missing artifact {}", path.display())).into());
    }
    serde_json::from_slice(&read(path)?)
        .map_err(|e| effgram::Error::Integrity(format!("{}: {e}", path.display())).into())
}

fn config_base(config: &Path) -> PathBuf {
    config.parent().map(Path::to_path_buf).unwrap_or_default()
}

fn write_datasets(dir: &Path, cfg: &RunConfig, base: &Path) -> Result<(Dataset, Option<Dataset>), CliError> {
    let sets = cfg.datasets(base)?;
    write_json(&dir.join(TRAIN), &sets.train)?;
    if let Some(test) = &sets.test {
        write_json(&dir.join(TEST), test)?;
    }
    Ok((sets.train, sets.test))
}

pub fn dataset(config: &Path, out: Option<PathBuf>) -> Result<(), CliError> {
    let cfg = RunConfig::load(config)?;
    let dir = out.unwrap_or_else(|| cfg.output.clone());
    let (train, test) = write_datasets(&dir, &cfg, &config_base(config))?;
    println!(
        "{}: {} training samples{} ({} → {})",
        dir.display(),
        train.len(),
        test.map(|t| format!(", {} test samples", t.len())).unwrap_or_default(),
        train.input_dim(),
        train.target_dim()
    );
    Ok(())
}

pub fn train(config: &Path, out: Option<PathBuf>, seed: Option<u64>) -> Result<(), CliError> {
    let mut cfg = RunConfig::load(config)?;
    if let Some(s) = seed {
        cfg.training.seed = s;
    }
    let dir = out.unwrap_or_else(|| cfg.output.clone());
    cfg.output = dir.clone();
    let (train, _) = write_datasets(&dir, &cfg, &config_base(config))?;
    write_json(&dir.join(CONFIG), &cfg)?;
    let plan = cfg.plan(train.len())?;
    let family = train_family(&cfg.model, &train, &plan, &cfg.training)?;
    write_dump(&dir, &cfg.model, &cfg.training, &plan, &train, &family.full, &family.leave_outs)?;
    println!(
        "{}: {} records, final train loss {:.6e}, {} leave-out runs",
        dir.display(),
        family.full.len(),
        family.full.train_loss.last().copied().unwrap_or(f64::NAN),
        family.leave_outs.len()
    );
    Ok(())
}

pub fn analyze(
    config: Option<PathBuf>,
    out: Option<PathBuf>,
    method: Option<PropagatorMethod>,
    from_step: Option<usize>,
) -> Result<(), CliError> {
    let (mut cfg, dir) = match (config, out) {
        (Some(c), out) => {
            let cfg = RunConfig::load(&c)?;
            let dir = out.unwrap_or_else(|| cfg.output.clone());
            (cfg, dir)
        }
        (None, Some(dir)) => {
            let cfg: RunConfig = read_artifact(&dir.join(CONFIG))?;
            cfg.check()?;
            (cfg, dir)
        }
        (None, None) => return Err(CliError::Config("analyze needs --config or --out".into())),
    };
    if let Some(m) = method {
        cfg.analysis.method = m;
    }
    if from_step.is_some() {
        cfg.analysis.from_step = from_step;
    }
    let train: Dataset = read_artifact(&dir.join(TRAIN))?;
    let dump = read_dump(&dir, Some(&train))?;
    if dump.manifest.spec != cfg.model {
        return Err(effgram::Error::Integrity("model in the config differs from the dump manifest".into()).into());
    }
    let plan = dump.manifest.plan.clone();
    let spec = dump.manifest.spec.clone();
    let family = Family {
        full: dump.full,
        leave_outs: dump.leave_outs,
    };
    let a = run_analysis(&spec, &train, &family, &plan, &cfg.analysis.options(), None)?;
    let test_path = dir.join(TEST);
    let gap = if test_path.exists() {
        let test: Dataset = read_artifact(&test_path)?;
        Some(final_gap(&spec, &family.full, &train, &test)?)
    } else {
        None
    };

    a.factors.write_csv(&dir.join("factors.csv"))?;
    a.gram.export(&dir)?;
    write_json(&dir.join(R0), &a.r0)?;
    let prediction = Prediction {
        start_step: a.start_step,
        start_time: a.factors.times[0],
        horizon: a.horizon(),
        method: cfg.analysis.method,
        delta_bar_start: a.delta_at_start,
        delta_bar_t: a.measured_delta(),
        delta_c_eps_t: *a.delta_c_eps.last().expect("non-empty"),
        delta_c_eps_hat_t: *a.delta_c_eps_hat.last().expect("non-empty"),
        quadratic_form: a.increment,
        r0_norm_sq: a.r0.iter().map(|v| v * v).sum(),
        gap_t: gap,
        train_loss_t: a.final_train_loss,
        interpolating: a.interpolating,
        max_residual_error: a.residual_error.iter().copied().fold(0.0, f64::max),
        sup_omega_m: Some(a.diagnostics.sup_omega_m).filter(|v| v.is_finite()),
        omega_decays: a.diagnostics.omega_decays,
        integral_levels_off: a.diagnostics.integral_levels_off,
        fraction_negative_c: a.diagnostics.fraction_negative_c,
    };
    write_json(&dir.join(PREDICTION), &prediction)?;
    if !a.interpolating {
        eprintln!(
            "warning: train loss {:.3e} at the horizon is above the interpolation threshold {:.3e}",
            a.final_train_loss, cfg.analysis.interpolation_threshold
        );
    }
    println!(
        "{}: Δ̄(T) {:.6e}, Δ̄(c,ε,T) {:.6e}, Δ̄(c,ε̂,T) {:.6e}, rᵀKr {:.6e}",
        dir.display(),
        prediction.delta_bar_t,
        prediction.delta_c_eps_t,
        prediction.delta_c_eps_hat_t,
        prediction.quadratic_form
    );
    Ok(())
}

pub fn spectrum(dir: &Path, gram: Option<PathBuf>, r0: Option<PathBuf>) -> Result<(), CliError> {
    let k = EffectiveGram::import(gram.as_deref().unwrap_or(dir))?;
    let r: Vec<f64> = read_artifact(&r0.unwrap_or_else(|| dir.join(R0)))?;
    let report = SpectralReport::new(&k.k, &r)?;
    report.write_csv(&dir.join("spectrum.csv"))?;
    println!(
        "σ̄(K) {:.6e}; share of r in the 3% eigen-mass tail {:.4}; mean explained residual {:.4}",
        report.sigma_mean,
        report.residual_in_tail(0.03),
        report.explained_residual_auc()
    );
    Ok(())
}

#[allow(clippy::too_many_arguments)]
pub fn oracle(
    n: usize,
    y1: f64,
    y2: f64,
    horizon: f64,
    eta: f64,
    stride: usize,
    eps0: f64,
    method: Option<PropagatorMethod>,
    out: Option<PathBuf>,
) -> Result<(), CliError> {
    let params = TwoPointParams::new(n, y1, y2).map_err(CliError::config)?.with_eps0(eps0);
    let mut settings = OracleSettings::new(params, horizon);
    settings.learning_rate = eta;
    settings.record_stride = stride;
    if let Some(m) = method {
        settings.method = m;
    }
    let (report, _) = run_two_point_oracle(&settings)?;
    for line in report.lines() {
        println!("{line}");
    }
    if let Some(dir) = out {
        write_json(&dir.join("oracle.json"), &report)?;
    }
    Ok(())
}

/// Builds one row and checks that `K` still reproduces the stored prediction.
fn report_row(dir: &Path) -> Result<ReportRow, CliError> {
    if !dir.is_dir() {
        return Err(effgram::Error::Integrity(format!("{} is not a run directory", dir.display())).into());
    }
    let p: Prediction = read_artifact(&dir.join(PREDICTION))?;
    let r0: Vec<f64> = read_artifact(&dir.join(R0))?;
    let k = EffectiveGram::import(dir)?;
    let form = k.quadratic_form(&r0)?;
    let recon = p.delta_c_eps_hat_t - p.delta_bar_start;
    if (form - recon).abs() > 1e-10 * form.abs().max(1.0) || (form - p.quadratic_form).abs() > 1e-10 * form.abs().max(1.0) {
        return Err(effgram::Error::Integrity(format!(
            "{}: rᵀKr = {form:e} but the stored reconstruction gives {recon:e}",
            dir.display()
        ))
        .into());
    }
    let (_, sigma_mean) = spectrum_stats(&k.k)?;
    let name = dir
        .file_name()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_else(|| dir.display().to_string());
    Ok(ReportRow {
        name,
        delta_c_eps_hat: p.delta_c_eps_hat_t,
        delta_c_eps: p.delta_c_eps_t,
        delta: p.delta_bar_t,
        gap: p.gap_t,
        train_loss: p.train_loss_t,
        sigma_mean,
        r0_norm_sq: p.r0_norm_sq,
    })
}

pub fn report(runs: &[PathBuf], out: Option<PathBuf>) -> Result<(), CliError> {
    let rows = runs.iter().map(|d| report_row(d)).collect::<Result<Vec<_>, _>>()?;
    let path = out.unwrap_or_else(|| match runs {
        [single] => single.join("report.csv"),
        _ => PathBuf::from("report.csv"),
    });
    let bytes = report_csv(&rows)?;
    write_atomic(&path, &bytes)?;
    print!("{}", String::from_utf8_lossy(&bytes));
    Ok(())
}
