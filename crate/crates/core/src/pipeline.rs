//! End-to-end analysis of a full run and its leave-out family.
//!
//! Records are processed in time order: kernel blocks are assembled a chunk
//! at a time, then the propagator and the effective Gram accumulator are
//! advanced sequentially, so only `O(1)` matrices of size `nC × nC` are alive.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::data::{gen_two_point, leave_out_plan, Dataset, LeaveOutPlan};
use crate::error::{Error, Result};
use crate::factors::{
    assemble_blocks, contraction_approx, contraction_from_parts, contraction_numerator, delta_floor, mean_displacement,
    perturbation_factor, perturbation_factor_plan, FactorSeries, KernelBlocks, DEFAULT_BLOCK_CAP,
};
use crate::gram::{
    convergence_diagnostics, reconstruct_delta, relative_error, ConvergenceReport, ConvergenceSample, EffectiveGram,
    GramAccumulator, PropagatorMethod, PropagatorStepper,
};
use crate::net::MLPSpec;
use crate::oracle::{
    closed_form_gram_eigen, comparison_bounds, perturb_two_point_blocks, split_gram_spectrum, ComparisonBounds, GramEigen,
    TwoPointParams,
};
use crate::spectral::SpectralReport;
use crate::traj::{measure_generalization_gap, measure_loss_difference, train_full, train_leave_out, TrainConfig, TrajectoryRecord};

const CHUNK: usize = 16;
const MAX_DIAGNOSTIC_POINTS: usize = 24;

/// Optional rewrite of the measured blocks before they enter the propagator.
pub type BlockTransform<'a> = &'a (dyn Fn(KernelBlocks) -> Result<KernelBlocks> + Sync);

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AnalysisOptions {
    pub method: PropagatorMethod,
    /// Start the effective Gram integral at this recorded step.
    pub from_step: Option<usize>,
    pub block_cap: usize,
    /// Records between convergence samples; `None` picks at most 200 samples.
    pub diagnostic_stride: Option<usize>,
    /// Records between Hessian-based contraction estimates; `None` skips them.
    pub approx_stride: Option<usize>,
    /// Train loss at the horizon below which the run counts as interpolating.
    pub interpolation_threshold: f64,
}

impl Default for AnalysisOptions {
    fn default() -> Self {
        AnalysisOptions {
            method: PropagatorMethod::Product,
            from_step: None,
            block_cap: DEFAULT_BLOCK_CAP,
            diagnostic_stride: None,
            approx_stride: None,
            interpolation_threshold: 0.05,
        }
    }
}

/// Everything derived from one trajectory family, on the records from `t₀`.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Analysis {
    pub start_step: usize,
    pub factors: FactorSeries,
    /// Plan-conditioned perturbation, for comparison with `ε̄`.
    pub eps_plan: Vec<f64>,
    pub eps_hat: Vec<f64>,
    /// `Δ̄(t₀) + Δ̄(c, ε)` reconstruction.
    pub delta_c_eps: Vec<f64>,
    /// `Δ̄(t₀) + Δ̄(c, ε̂)` reconstruction.
    pub delta_c_eps_hat: Vec<f64>,
    pub delta_at_start: f64,
    pub gram: EffectiveGram,
    /// `r⃗(t₀)`.
    pub r0: Vec<f64>,
    /// `r⃗(t₀)ᵀ K r⃗(t₀)`.
    pub increment: f64,
    /// `‖Ω r⃗(t₀) − r⃗(t)‖/‖r⃗(t)‖` per record.
    pub residual_error: Vec<f64>,
    pub diagnostics: ConvergenceReport,
    pub final_train_loss: f64,
    pub interpolating: bool,
}

impl Analysis {
    pub fn horizon(&self) -> f64 {
        *self.factors.times.last().expect("non-empty analysis")
    }

    pub fn measured_delta(&self) -> f64 {
        *self.factors.delta_bar.last().expect("non-empty analysis")
    }

    pub fn predicted_delta(&self) -> f64 {
        self.delta_at_start + self.increment
    }

    pub fn spectral_report(&self) -> Result<SpectralReport> {
        SpectralReport::new(&self.gram.k, &self.r0)
    }

    pub fn report_row(&self, name: &str, gap: Option<f64>) -> Result<ReportRow> {
        let spectral = self.spectral_report()?;
        Ok(ReportRow {
            name: name.to_string(),
            delta_c_eps_hat: *self.delta_c_eps_hat.last().expect("non-empty"),
            delta_c_eps: *self.delta_c_eps.last().expect("non-empty"),
            delta: self.measured_delta(),
            gap,
            train_loss: self.final_train_loss,
            sigma_mean: spectral.sigma_mean,
            r0_norm_sq: spectral.residual_norm_sq,
        })
    }
}

/// Summary of one run at its horizon.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReportRow {
    pub name: String,
    pub delta_c_eps_hat: f64,
    pub delta_c_eps: f64,
    pub delta: f64,
    pub gap: Option<f64>,
    pub train_loss: f64,
    pub sigma_mean: f64,
    pub r0_norm_sq: f64,
}

impl ReportRow {
    pub const HEADER: [&'static str; 8] = [
        "run",
        "delta_c_eps_hat_T",
        "delta_c_eps_T",
        "delta_bar_T",
        "delta_R_T",
        "R_train_T",
        "sigma_mean_K",
        "r0_norm_sq",
    ];

    pub fn fields(&self) -> [String; 8] {
        let g = |v: f64| format!("{v:e}");
        [
            self.name.clone(),
            g(self.delta_c_eps_hat),
            g(self.delta_c_eps),
            g(self.delta),
            self.gap.map(g).unwrap_or_default(),
            g(self.train_loss),
            g(self.sigma_mean),
            g(self.r0_norm_sq),
        ]
    }
}

pub fn report_csv(rows: &[ReportRow]) -> Result<Vec<u8>> {
    let mut w = csv::Writer::from_writer(Vec::new());
    let err = |e: csv::Error| Error::format("report.csv", None, e.to_string());
    w.write_record(ReportRow::HEADER).map_err(err)?;
    for row in rows {
        w.write_record(row.fields()).map_err(err)?;
    }
    w.into_inner().map_err(|e| Error::format("report.csv", None, e.to_string()))
}

/// Full run plus one leave-out run per plan batch.
#[derive(Debug, Clone)]
pub struct Family {
    pub full: TrajectoryRecord,
    pub leave_outs: Vec<TrajectoryRecord>,
}

pub fn train_family(spec: &MLPSpec, data: &Dataset, plan: &LeaveOutPlan, cfg: &TrainConfig) -> Result<Family> {
    let full = train_full(spec, data, cfg)?;
    let leave_outs = train_leave_out(spec, data, plan, cfg, None)?;
    Ok(Family { full, leave_outs })
}

pub fn analyze(
    spec: &MLPSpec,
    data: &Dataset,
    family: &Family,
    plan: &LeaveOutPlan,
    opts: &AnalysisOptions,
    transform: Option<BlockTransform<'_>>,
) -> Result<Analysis> {
    let full = &family.full;
    let leave_outs = &family.leave_outs;
    let delta = measure_loss_difference(spec, full, leave_outs, plan, data)?;
    let start = match opts.from_step {
        None => 0,
        Some(step) => full
            .position_of_step(step)
            .ok_or_else(|| Error::input(format!("step {step} is not a record point of the run (horizon step {})", full.steps.last().unwrap_or(&0))))?,
    };
    let numerator = contraction_numerator(spec, full, leave_outs, plan, data)?;
    let contraction = contraction_from_parts(&numerator, &delta.delta_bar, start, delta_floor(full.train_loss[0]))?;
    if contraction.all_masked() && full.len() - start > 1 {
        eprintln!("warning: every contraction factor entry is masked (Δ̄ stays below the floor)");
    }
    let records: Vec<usize> = (start..full.len()).collect();
    let (eps_bar, eps_plan): (Vec<f64>, Vec<f64>) = records
        .par_iter()
        .map(|&k| {
            let w = &full.weights[k];
            Ok((perturbation_factor(spec, w, data)?, perturbation_factor_plan(spec, w, data, plan)?))
        })
        .collect::<Result<Vec<_>>>()?
        .into_iter()
        .unzip();
    let c_bar_approx = records
        .par_iter()
        .map(|&k| match opts.approx_stride {
            Some(s) if s > 0 && (k - start) % s == 0 => {
                let d = mean_displacement(full, leave_outs, k);
                Ok(contraction_approx(spec, &full.weights[k], data, &d)?.unwrap_or(f64::NAN))
            }
            _ => Ok(f64::NAN),
        })
        .collect::<Result<Vec<_>>>()?;

    let n = data.len();
    let c = spec.output_dim();
    let diag_stride = opts
        .diagnostic_stride
        .unwrap_or_else(|| records.len().div_ceil(MAX_DIAGNOSTIC_POINTS))
        .max(1);
    let mut stepper = PropagatorStepper::new(opts.method, n * c, n);
    let mut acc: Option<GramAccumulator> = None;
    let mut r0 = Vec::new();
    let mut residual_error = Vec::with_capacity(records.len());
    let mut samples = Vec::new();
    let (mut diag_c, mut diag_mask) = (Vec::new(), Vec::new());
    for chunk in records.chunks(CHUNK) {
        let blocks = chunk
            .par_iter()
            .map(|&k| {
                let b = assemble_blocks(spec, &full.weights[k], data, full.times[k], opts.block_cap)?;
                match transform {
                    Some(f) => f(b),
                    None => Ok(b),
                }
            })
            .collect::<Result<Vec<_>>>()?;
        for (&k, b) in chunk.iter().zip(&blocks) {
            let j = k - start;
            let acc = acc.get_or_insert_with(|| {
                r0 = b.residual.clone();
                GramAccumulator::new(n, c, opts.method, Some(r0.clone()))
            });
            let omega = stepper.push(b.time, &b.p)?;
            residual_error.push(relative_error(&omega.matvec(&r0)?, &b.residual));
            acc.push(b.time, omega, &b.gap_operator(), contraction.values[j], contraction.masked[j])?;
            if j % diag_stride == 0 || k + 1 == full.len() {
                samples.push(ConvergenceSample::from_blocks(b)?);
                diag_c.push(contraction.values[j]);
                diag_mask.push(contraction.masked[j]);
            }
        }
    }
    let acc = acc.expect("at least one record");
    let eps_hat = acc.eps_hat().to_vec();
    let gram = acc.finish();
    let increment = gram.quadratic_form(&r0)?;
    let times = &full.times[start..];
    let delta_at_start = delta.delta_bar[start];
    let offset = |v: Vec<f64>| v.into_iter().map(|x| x + delta_at_start).collect::<Vec<_>>();
    let delta_c_eps = offset(reconstruct_delta(&contraction.values, &contraction.masked, &eps_bar, times)?);
    let delta_c_eps_hat = offset(reconstruct_delta(&contraction.values, &contraction.masked, &eps_hat, times)?);
    let diagnostics = convergence_diagnostics(&samples, &diag_c, &diag_mask, n);
    let final_train_loss = *full.train_loss.last().expect("non-empty run");
    Ok(Analysis {
        start_step: full.steps[start],
        factors: FactorSeries {
            times: times.to_vec(),
            c_bar: contraction.values,
            c_bar_approx,
            eps_bar,
            delta_bar: delta.delta_bar[start..].to_vec(),
            masked: contraction.masked,
            per_batch: delta.per_batch.iter().map(|s| s[start..].to_vec()).collect(),
        },
        eps_plan,
        eps_hat,
        delta_c_eps,
        delta_c_eps_hat,
        delta_at_start,
        gram,
        r0,
        increment,
        residual_error,
        diagnostics,
        final_train_loss,
        interpolating: final_train_loss <= opts.interpolation_threshold,
    })
}

/// Generalization gap at the horizon.
pub fn final_gap(spec: &MLPSpec, full: &TrajectoryRecord, train: &Dataset, test: &Dataset) -> Result<f64> {
    let gaps = measure_generalization_gap(spec, full, train, test)?;
    Ok(*gaps.last().expect("non-empty run"))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OracleSettings {
    pub params: TwoPointParams,
    pub horizon: f64,
    pub learning_rate: f64,
    pub record_stride: usize,
    pub method: PropagatorMethod,
}

impl OracleSettings {
    pub fn new(params: TwoPointParams, horizon: f64) -> Self {
        OracleSettings {
            params,
            horizon,
            learning_rate: 1e-3,
            record_stride: 1,
            method: PropagatorMethod::Product,
        }
    }
}

/// Closed forms next to the pipeline's measurements on the two-point task.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OracleReport {
    pub settings: OracleSettings,
    pub horizon: f64,
    pub c_bar_closed_form: f64,
    /// Largest `|c̄ − closed form|` over unmasked records.
    pub c_bar_max_deviation: f64,
    pub c_bar_measured_mean: f64,
    pub eigen: GramEigen,
    /// Eigenvalues of `K` on the residual span, ascending.
    pub span_eigenvalues: Vec<f64>,
    pub complement_min: f64,
    pub complement_max: f64,
    pub bounds: ComparisonBounds,
    pub prediction: f64,
    pub measured_delta: f64,
}

impl OracleReport {
    pub fn span_within(&self, rel: f64) -> bool {
        self.span_eigenvalues.len() == 2
            && self
                .span_eigenvalues
                .iter()
                .all(|v| (v - self.eigen.lambda).abs() <= rel * self.eigen.lambda)
    }

    pub fn complement_in_bracket(&self) -> bool {
        self.complement_min >= self.eigen.lambda_prime_lower && self.complement_max <= self.eigen.lambda_prime_upper
    }

    pub fn lines(&self) -> Vec<String> {
        let p = &self.settings.params;
        vec![
            format!("n = {}, y = ({}, {}), horizon = {}", p.n, p.y1, p.y2, self.horizon),
            format!(
                "contraction: closed form {:.6} (= {}/{}), measured mean {:.6}, max deviation {:.2e}",
                self.c_bar_closed_form,
                p.n - 2,
                p.n - 1,
                self.c_bar_measured_mean,
                self.c_bar_max_deviation
            ),
            format!(
                "residual-span eigenvalues {:?} vs λ(T) = {:.6e}",
                self.span_eigenvalues, self.eigen.lambda
            ),
            format!(
                "complement eigenvalues in [{:.6e}, {:.6e}], bracket [{:.6e}, {:.6e}]",
                self.complement_min, self.complement_max, self.eigen.lambda_prime_lower, self.eigen.lambda_prime_upper
            ),
            format!(
                "bounds: weight norm {:.6}, accumulated perturbation {:.6}",
                self.bounds.weight_norm, self.bounds.accumulated_perturbation
            ),
            format!("prediction r⃗ᵀKr⃗ = {:.6e}, measured Δ̄(T) = {:.6e}", self.prediction, self.measured_delta),
        ]
    }
}

/// Trains the two-point task with every leave-one-out run, measures `c̄`, and
/// builds `K` from the perturbed generator.
pub fn run_two_point_oracle(settings: &OracleSettings) -> Result<(OracleReport, Analysis)> {
    let p = settings.params;
    p.validate()?;
    let steps = (settings.horizon / settings.learning_rate).round() as usize;
    if steps == 0 || steps % settings.record_stride != 0 {
        return Err(Error::input("oracle horizon must be a positive multiple of the record spacing"));
    }
    let data = gen_two_point(p.n, p.y1, p.y2, 2)?;
    let spec = MLPSpec::linear(2, 1);
    let cfg = TrainConfig::new(settings.learning_rate, steps).with_stride(settings.record_stride);
    let plan = leave_out_plan(p.n, 1, p.n, 0)?;
    let family = train_family(&spec, &data, &plan, &cfg)?;
    let opts = AnalysisOptions {
        method: settings.method,
        ..AnalysisOptions::default()
    };
    let eps0 = p.eps0;
    let transform = move |b: KernelBlocks| perturb_two_point_blocks(b, eps0);
    let analysis = analyze(&spec, &data, &family, &plan, &opts, Some(&transform))?;
    let closed = p.c_bar();
    let unmasked: Vec<f64> = analysis
        .factors
        .c_bar
        .iter()
        .zip(&analysis.factors.masked)
        .filter(|(_, m)| !**m)
        .map(|(c, _)| *c)
        .collect();
    let deviation = unmasked.iter().fold(0.0f64, |m, c| m.max((c - closed).abs()));
    let mean = if unmasked.is_empty() { f64::NAN } else { unmasked.iter().sum::<f64>() / unmasked.len() as f64 };
    let (span, rest) = split_gram_spectrum(&analysis.gram.k)?;
    let horizon = analysis.horizon();
    let report = OracleReport {
        settings: settings.clone(),
        horizon,
        c_bar_closed_form: closed,
        c_bar_max_deviation: deviation,
        c_bar_measured_mean: mean,
        eigen: closed_form_gram_eigen(&p, horizon),
        span_eigenvalues: span,
        complement_min: rest.iter().copied().fold(f64::INFINITY, f64::min),
        complement_max: rest.iter().copied().fold(f64::NEG_INFINITY, f64::max),
        bounds: comparison_bounds(&p),
        prediction: analysis.increment,
        measured_delta: analysis.measured_delta(),
    };
    Ok((report, analysis))
}
