//! Run configuration: one JSON document per experiment.

use std::path::{Path, PathBuf};

use effgram::data::{
    gen_gaussian_alpha_split, gen_two_point, leave_out_plan, load_csv, load_idx, randomize_labels, synthesize_projected,
    CsvSchema, Dataset, LeaveOutPlan,
};
use effgram::gram::PropagatorMethod;
use effgram::net::MLPSpec;
use effgram::pipeline::AnalysisOptions;
use effgram::traj::TrainConfig;
use serde::{Deserialize, Serialize};

use crate::CliError;

pub const SCHEMA_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub schema_version: u32,
    pub dataset: DatasetSection,
    pub model: MLPSpec,
    pub training: TrainConfig,
    pub analysis: AnalysisSection,
    pub output: PathBuf,
}

/// Where the samples come from. Every generator carries its own seed.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case", deny_unknown_fields)]
pub enum DatasetSection {
    TwoPoint {
        n: usize,
        y1: f64,
        y2: f64,
        #[serde(default = "two")]
        dim: usize,
    },
    GaussianAlpha {
        n_train: usize,
        n_test: usize,
        dim: usize,
        alpha: f64,
        teacher: MLPSpec,
        seed: u64,
        /// Seed for replacing the teacher labels by uniform random ones.
        #[serde(default)]
        random_labels: Option<u64>,
    },
    SynProjected {
        corpus: Corpus,
        first: usize,
        last: usize,
        n_moment: usize,
        n_train: usize,
        n_test: usize,
        teacher: MLPSpec,
        seed: u64,
        #[serde(default)]
        random_labels: Option<u64>,
    },
    Csv {
        train: PathBuf,
        #[serde(default)]
        test: Option<PathBuf>,
        schema: CsvSchema,
        #[serde(default)]
        random_labels: Option<u64>,
    },
    Idx {
        corpus: Corpus,
        #[serde(default)]
        test_images: Option<PathBuf>,
        #[serde(default)]
        test_labels: Option<PathBuf>,
        n_train: usize,
        #[serde(default)]
        random_labels: Option<u64>,
    },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Corpus {
    pub images: PathBuf,
    pub labels: PathBuf,
    /// Keep only these digits, re-encoded in the given order.
    #[serde(default)]
    pub classes: Option<Vec<usize>>,
}

fn two() -> usize {
    2
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AnalysisSection {
    pub plan: PlanSection,
    #[serde(default = "default_method")]
    pub method: PropagatorMethod,
    #[serde(default)]
    pub from_step: Option<usize>,
    #[serde(default = "default_block_cap")]
    pub block_cap: usize,
    #[serde(default)]
    pub diagnostic_stride: Option<usize>,
    #[serde(default)]
    pub approx_stride: Option<usize>,
    #[serde(default = "default_threshold")]
    pub interpolation_threshold: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PlanSection {
    pub m: usize,
    pub batches: usize,
    pub seed: u64,
}

fn default_method() -> PropagatorMethod {
    PropagatorMethod::Product
}

fn default_block_cap() -> usize {
    AnalysisOptions::default().block_cap
}

fn default_threshold() -> f64 {
    AnalysisOptions::default().interpolation_threshold
}

impl AnalysisSection {
    pub fn options(&self) -> AnalysisOptions {
        AnalysisOptions {
            method: self.method,
            from_step: self.from_step,
            block_cap: self.block_cap,
            diagnostic_stride: self.diagnostic_stride,
            approx_stride: self.approx_stride,
            interpolation_threshold: self.interpolation_threshold,
        }
    }
}

/// Training and held-out samples.
pub struct Datasets {
    pub train: Dataset,
    pub test: Option<Dataset>,
}

impl RunConfig {
    pub fn load(path: &Path) -> Result<Self, CliError> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| CliError::Config(format!("cannot read {}: {e}", path.display())))?;
        let cfg: RunConfig = serde_json::from_str(&text)
            .map_err(|e| CliError::Config(format!("{}: {e}", path.display())))?;
        cfg.check()?;
        Ok(cfg)
    }

    pub fn check(&self) -> Result<(), CliError> {
        if self.schema_version != SCHEMA_VERSION {
            return Err(CliError::Config(format!(
                "schema_version {} is not supported (expected {SCHEMA_VERSION})",
                self.schema_version
            )));
        }
        self.model.validate().map_err(CliError::config)?;
        self.training.validate().map_err(CliError::config)?;
        if self.analysis.plan.m == 0 || self.analysis.plan.batches == 0 {
            return Err(CliError::Config("plan needs m ≥ 1 and at least one batch".into()));
        }
        Ok(())
    }

    pub fn plan(&self, n: usize) -> Result<LeaveOutPlan, CliError> {
        let p = self.analysis.plan;
        leave_out_plan(n, p.m, p.batches, p.seed).map_err(CliError::config)
    }

    /// Builds or loads the samples. Relative paths resolve against `base`.
    pub fn datasets(&self, base: &Path) -> Result<Datasets, CliError> {
        let resolve = |p: &Path| if p.is_absolute() { p.to_path_buf() } else { base.join(p) };
        let relabel = |d: Dataset, seed: Option<u64>| -> Result<Dataset, CliError> {
            match seed {
                Some(s) => Ok(randomize_labels(&d, d.target_dim(), s)?),
                None => Ok(d),
            }
        };
        let corpus = |c: &Corpus| -> Result<Dataset, CliError> {
            let raw = load_idx(&resolve(&c.images), &resolve(&c.labels))?;
            Ok(match &c.classes {
                Some(cls) => raw.select_classes(cls)?,
                None => raw,
            })
        };
        let sets = match &self.dataset {
            DatasetSection::TwoPoint { n, y1, y2, dim } => Datasets {
                train: gen_two_point(*n, *y1, *y2, *dim)?,
                test: None,
            },
            DatasetSection::GaussianAlpha { n_train, n_test, dim, alpha, teacher, seed, random_labels } => {
                let (train, test) = gen_gaussian_alpha_split(*n_train, *n_test, *dim, *alpha, teacher, *seed)?;
                Datasets {
                    train: relabel(train, *random_labels)?,
                    test: Some(test),
                }
            }
            DatasetSection::SynProjected { corpus: c, first, last, n_moment, n_train, n_test, teacher, seed, random_labels } => {
                let relabelled = synthesize_projected(&corpus(c)?, *first, *last, teacher, *n_moment, *seed)?;
                if relabelled.len() < n_train + n_test {
                    return Err(CliError::Config(format!(
                        "corpus leaves {} samples, {} requested",
                        relabelled.len(),
                        n_train + n_test
                    )));
                }
                let (train, rest) = relabelled.split_at(*n_train)?;
                let test = rest.subset(&(0..*n_test).collect::<Vec<_>>())?;
                Datasets {
                    train: relabel(train, *random_labels)?,
                    test: Some(test),
                }
            }
            DatasetSection::Csv { train, test, schema, random_labels } => Datasets {
                train: relabel(load_csv(&resolve(train), schema)?, *random_labels)?,
                test: test.as_ref().map(|t| load_csv(&resolve(t), schema)).transpose()?,
            },
            DatasetSection::Idx { corpus: c, test_images, test_labels, n_train, random_labels } => {
                let all = corpus(c)?;
                if all.len() < *n_train {
                    return Err(CliError::Config(format!("corpus has {} samples, {n_train} requested", all.len())));
                }
                let train = all.subset(&(0..*n_train).collect::<Vec<_>>())?;
                let rest = (all.len() >= n_train + 2)
                    .then(|| all.subset(&(*n_train..all.len()).collect::<Vec<_>>()))
                    .transpose()?;
                let test = match (test_images, test_labels) {
                    (Some(i), Some(l)) => {
                        let t = load_idx(&resolve(i), &resolve(l))?;
                        Some(match &c.classes {
                            Some(cls) => t.select_classes(cls)?,
                            None => t,
                        })
                    }
                    (None, None) => rest,
                    _ => return Err(CliError::Config("test_images and test_labels go together".into())),
                };
                Datasets {
                    train: relabel(train, *random_labels)?,
                    test,
                }
            }
        };
        if sets.train.input_dim() != self.model.input_dim() || sets.train.target_dim() != self.model.output_dim() {
            return Err(CliError::Config(format!(
                "model maps {} → {} but the data is {} → {}",
                self.model.input_dim(),
                self.model.output_dim(),
                sets.train.input_dim(),
                sets.train.target_dim()
            )));
        }
        Ok(sets)
    }
}
