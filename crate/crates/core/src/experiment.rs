//! Monte-Carlo drivers for the type-I error, power and robustness studies.
//!
//! Trial `i` of a setting uses seed `base + i`, so the rows are identical
//! whatever the thread count. Trials with an empty or full region are
//! excluded from the rejection-rate denominator and counted as `undefined`.

use std::fmt;
use std::io::Write;
use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::Serialize;

use crate::detector::{make_synthetic, planted_signal};
use crate::error::{Error, Result};
use crate::graph::{assemble_detector, PwlGraph};
use crate::inference::{run_test_with, SweepConfig, Verdict};
use crate::noise::{calibrate, Family, NoiseFamily};
use crate::tensor::{ar1_kron_cov, image_shape, sample_gaussian_with, CovMatrix, Image};
use crate::vae::VaeModel;

/// Correlation of neighbouring pixels in the AR(1) covariance.
pub const AR_RHO: f64 = 0.25;

/// z-quantile of the two-sided 95% Wilson interval.
const WILSON_Z: f64 = 1.959_963_984_540_054;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "kebab-case")]
pub enum ExperimentKind {
    Type1,
    Power,
    Robustness,
    SingleTest,
}

impl ExperimentKind {
    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "type1" => Ok(Self::Type1),
            "power" => Ok(Self::Power),
            "robustness" => Ok(Self::Robustness),
            "single-test" => Ok(Self::SingleTest),
            other => Err(Error::Domain(format!("unknown experiment kind {other:?}"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "lowercase")]
pub enum CovKind {
    Indep,
    Ar,
}

impl CovKind {
    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "indep" => Ok(Self::Indep),
            "ar" => Ok(Self::Ar),
            other => Err(Error::Domain(format!("unknown covariance kind {other:?}"))),
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            CovKind::Indep => "indep",
            CovKind::Ar => "ar",
        }
    }

    /// `I_n`, or the separable AR(1) covariance on a square image.
    pub fn matrix(self, n: usize) -> Result<CovMatrix> {
        match self {
            CovKind::Indep => Ok(CovMatrix::identity(n)),
            CovKind::Ar => {
                let (h, w) = image_shape(n);
                if h != w {
                    return Err(Error::Domain(format!("AR covariance needs a square image, n = {n}")));
                }
                ar1_kron_cov(h, AR_RHO)
            }
        }
    }
}

impl fmt::Display for CovKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ExperimentSpec {
    pub kind: ExperimentKind,
    pub n: usize,
    pub trials: usize,
    /// Signal strengths for `Power` and `SingleTest`.
    pub deltas: Vec<f64>,
    pub cov: CovKind,
    pub alphas: Vec<f64>,
    pub lambda: f64,
    pub filter_window: usize,
    pub seed: u64,
    /// Pixels in the planted square patch.
    pub region_size: usize,
    /// Families and W1 targets for `Robustness`.
    pub families: Vec<Family>,
    pub w1_targets: Vec<f64>,
    pub sweep: SweepConfig,
}

impl ExperimentSpec {
    pub fn new(kind: ExperimentKind, n: usize) -> Self {
        Self {
            kind,
            n,
            trials: 1000,
            deltas: vec![1.0, 2.0, 3.0, 4.0],
            cov: CovKind::Indep,
            alphas: vec![0.05],
            lambda: 1.2,
            filter_window: 3,
            seed: 0,
            region_size: 16,
            families: Family::ALL.to_vec(),
            w1_targets: vec![0.01, 0.02, 0.03, 0.04],
            sweep: SweepConfig::default(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Domain(m));
        if self.trials == 0 {
            return bad("trials must be >= 1".into());
        }
        if self.alphas.is_empty() || self.alphas.iter().any(|a| !(*a > 0.0 && *a < 1.0)) {
            return bad(format!("alpha values must lie in (0, 1), got {:?}", self.alphas));
        }
        if !(self.lambda > 0.0) || !self.lambda.is_finite() {
            return bad(format!("lambda must be positive, got {}", self.lambda));
        }
        if matches!(self.kind, ExperimentKind::Power | ExperimentKind::SingleTest)
            && (self.deltas.is_empty() || self.deltas.iter().any(|d| !(*d >= 0.0) || !d.is_finite()))
        {
            return bad(format!("signal strengths must be >= 0, got {:?}", self.deltas));
        }
        if self.kind == ExperimentKind::Robustness && (self.families.is_empty() || self.w1_targets.is_empty()) {
            return bad("robustness needs at least one family and one W1 target".into());
        }
        Ok(())
    }
}

/// Every p-value of one tested trial.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct TrialPValues {
    pub selective: f64,
    pub naive: f64,
    pub bonferroni: f64,
    pub over_conditioning: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub enum TrialStatus {
    Tested(TrialPValues),
    Undefined,
    /// The sweep or the numerics failed for this trial only.
    Failed(String),
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrialOutcome {
    pub index: usize,
    pub seed: u64,
    pub status: TrialStatus,
}

/// How the images of one setting are generated.
#[derive(Debug, Clone, PartialEq)]
pub enum Scenario {
    /// `s = 0`, `ε ~ N(0, Σ)`.
    Null,
    /// Square patch of strength `delta` plus `N(0, Σ)` noise.
    Planted { delta: f64, region_size: usize },
    /// `s = 0`, i.i.d. standardized non-Gaussian noise.
    NonGaussian(NoiseFamily),
}

impl Scenario {
    pub fn image(&self, n: usize, cov: &CovMatrix, seed: u64) -> Result<Image> {
        match self {
            Scenario::Null => {
                let (h, w) = image_shape(n);
                let mut rng = ChaCha8Rng::seed_from_u64(seed);
                sample_gaussian_with(&Image::zeros(h, w), cov, &mut rng)
            }
            Scenario::Planted { delta, region_size } => {
                Ok(make_synthetic(n, *delta, *region_size, cov, seed)?.0)
            }
            Scenario::NonGaussian(fam) => {
                let (h, w) = image_shape(n);
                Image::new(crate::noise::sample(fam, n, seed), h, w)
            }
        }
    }
}

/// Run `trials` trials of `scenario` in parallel; results are in trial order.
pub fn run_trials(
    graph: &PwlGraph,
    cov: &CovMatrix,
    scenario: &Scenario,
    trials: usize,
    base_seed: u64,
    sweep: &SweepConfig,
) -> Result<Vec<TrialOutcome>> {
    let n = graph.input_dim();
    if cov.dim() != n {
        return Err(Error::shape(n, cov.dim()));
    }
    (0..trials)
        .into_par_iter()
        .map(|index| {
            let seed = base_seed.wrapping_add(index as u64);
            let x = scenario.image(n, cov, seed)?;
            let status = match run_test_with(graph, &x, cov, sweep) {
                Ok(out) => match out.verdict {
                    Verdict::Tested(t) => TrialStatus::Tested(TrialPValues {
                        selective: t.p_selective,
                        naive: t.p_naive,
                        bonferroni: t.p_bonferroni,
                        over_conditioning: t.p_over_conditioning,
                    }),
                    Verdict::UndefinedHypothesis => TrialStatus::Undefined,
                },
                Err(
                    e @ (Error::SweepBudget { .. }
                    | Error::Numerical(_)
                    | Error::Inconsistent(_)),
                ) => TrialStatus::Failed(e.to_string()),
                Err(e) => return Err(e),
            };
            Ok(TrialOutcome { index, seed, status })
        })
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum Method {
    Selective,
    Naive,
    Bonf,
    Oc,
}

impl Method {
    pub const ALL: [Method; 4] = [Method::Selective, Method::Naive, Method::Bonf, Method::Oc];

    fn pick(self, p: &TrialPValues) -> f64 {
        match self {
            Method::Selective => p.selective,
            Method::Naive => p.naive,
            Method::Bonf => p.bonferroni,
            Method::Oc => p.over_conditioning,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ResultRow {
    pub method: Method,
    pub setting: String,
    pub n: usize,
    pub delta: f64,
    pub cov: CovKind,
    pub alpha: f64,
    pub trials: usize,
    /// Trials without a testable region, plus trials whose sweep failed.
    pub undefined: usize,
    pub rejections: usize,
    pub rate: f64,
    pub ci_lo: f64,
    pub ci_hi: f64,
}

/// Wilson score interval at 95%. With no trials the interval is `[0, 1]`.
pub fn wilson_interval(successes: usize, total: usize) -> (f64, f64) {
    if total == 0 {
        return (0.0, 1.0);
    }
    let n = total as f64;
    let p = successes as f64 / n;
    let z2 = WILSON_Z * WILSON_Z;
    let denom = 1.0 + z2 / n;
    let center = (p + z2 / (2.0 * n)) / denom;
    let half = WILSON_Z * (p * (1.0 - p) / n + z2 / (4.0 * n * n)).sqrt() / denom;
    // the exact interval always contains p; keep rounding from breaking that
    ((center - half).clamp(0.0, p), (center + half).clamp(p, 1.0))
}

/// Tally one setting into a row per method and significance level.
pub fn summarize(
    outcomes: &[TrialOutcome],
    setting: &str,
    n: usize,
    delta: f64,
    cov: CovKind,
    alphas: &[f64],
) -> Vec<ResultRow> {
    let tested: Vec<&TrialPValues> = outcomes
        .iter()
        .filter_map(|o| match &o.status {
            TrialStatus::Tested(p) => Some(p),
            _ => None,
        })
        .collect();
    let undefined = outcomes.len() - tested.len();
    let mut rows = Vec::new();
    for &alpha in alphas {
        for method in Method::ALL {
            let rejections = tested.iter().filter(|p| method.pick(p) <= alpha).count();
            let rate = if tested.is_empty() {
                0.0
            } else {
                rejections as f64 / tested.len() as f64
            };
            let (ci_lo, ci_hi) = wilson_interval(rejections, tested.len());
            rows.push(ResultRow {
                method,
                setting: setting.to_string(),
                n,
                delta,
                cov,
                alpha,
                trials: outcomes.len(),
                undefined,
                rejections,
                rate,
                ci_lo,
                ci_hi,
            });
        }
    }
    rows
}

/// Run every setting of `spec` against `model`.
pub fn run_experiment(spec: &ExperimentSpec, model: &VaeModel) -> Result<Vec<ResultRow>> {
    spec.validate()?;
    if model.n() != spec.n {
        return Err(Error::shape(spec.n, model.n()));
    }
    let graph = assemble_detector(model, spec.lambda, spec.filter_window)?;
    let mut settings: Vec<(String, f64, Scenario, CovKind)> = Vec::new();
    match spec.kind {
        ExperimentKind::Type1 => settings.push(("null".into(), 0.0, Scenario::Null, spec.cov)),
        ExperimentKind::Power | ExperimentKind::SingleTest => {
            // check the patch fits before spending any time on trials
            planted_signal(spec.n, 0.0, spec.region_size, &mut ChaCha8Rng::seed_from_u64(0))?;
            for &delta in &spec.deltas {
                settings.push((
                    format!("delta={delta}"),
                    delta,
                    Scenario::Planted {
                        delta,
                        region_size: spec.region_size,
                    },
                    spec.cov,
                ));
            }
        }
        ExperimentKind::Robustness => {
            for &family in &spec.families {
                for &target in &spec.w1_targets {
                    let fam = calibrate(family, target)?;
                    settings.push((
                        format!("{family}:w1={target}"),
                        0.0,
                        Scenario::NonGaussian(fam),
                        CovKind::Indep,
                    ));
                }
            }
        }
    }
    let trials = if spec.kind == ExperimentKind::SingleTest { 1 } else { spec.trials };
    let mut rows = Vec::new();
    for (setting, delta, scenario, cov_kind) in settings {
        let cov = cov_kind.matrix(spec.n)?;
        let outcomes = run_trials(&graph, &cov, &scenario, trials, spec.seed, &spec.sweep)?;
        rows.extend(summarize(&outcomes, &setting, spec.n, delta, cov_kind, &spec.alphas));
    }
    Ok(rows)
}

pub fn write_csv<W: Write>(rows: &[ResultRow], out: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    for row in rows {
        w.serialize(row).map_err(|e| Error::Numerical(format!("csv: {e}")))?;
    }
    w.flush().map_err(|e| Error::io("<csv output>", e))?;
    Ok(())
}

pub fn write_csv_file(rows: &[ResultRow], path: &Path) -> Result<()> {
    let file = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    write_csv(rows, std::io::BufWriter::new(file))
}
