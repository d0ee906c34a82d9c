//! Selective p-values for a detected region.
//!
//! The sweep walks the data line from `z_min` to `z_max`, asking
//! auto-conditioning for the piece at each `z` and keeping the pieces whose
//! region equals the observed one. Their union is the truncation set `𝒵`,
//! and the selective p-value is the two-sided tail of `N(0, ηᵀΣη)`
//! restricted to `𝒵`.

use serde::ser::{SerializeSeq, Serializer};
use serde::Serialize;

use crate::conditioning::{init_line, piece_at};
use crate::detector::{AnomalyRegion, Hypothesis};
use crate::error::{Error, Result};
use crate::graph::{forward, PwlGraph};
use crate::special::{log_std_normal_mass, log_sum_exp, norm_sf};
use crate::tensor::{ContrastVector, CovMatrix, Image};

/// Sorted, pairwise disjoint closed intervals.
#[derive(Debug, Clone, PartialEq)]
pub struct TruncationSet {
    intervals: Vec<(f64, f64)>,
}

impl TruncationSet {
    /// Sorts the intervals and merges any that overlap or touch.
    pub fn new(mut intervals: Vec<(f64, f64)>) -> Result<Self> {
        if let Some(&(l, u)) = intervals.iter().find(|(l, u)| !(l <= u) || l.is_nan() || u.is_nan()) {
            return Err(Error::Domain(format!("invalid interval [{l}, {u}]")));
        }
        intervals.sort_by(|x, y| x.0.total_cmp(&y.0));
        let mut merged: Vec<(f64, f64)> = Vec::with_capacity(intervals.len());
        for (l, u) in intervals {
            match merged.last_mut() {
                Some(last) if l <= last.1 => last.1 = last.1.max(u),
                _ => merged.push((l, u)),
            }
        }
        Ok(Self { intervals: merged })
    }

    pub fn full() -> Self {
        Self {
            intervals: vec![(f64::NEG_INFINITY, f64::INFINITY)],
        }
    }

    pub fn intervals(&self) -> &[(f64, f64)] {
        &self.intervals
    }

    pub fn len(&self) -> usize {
        self.intervals.len()
    }

    pub fn is_empty(&self) -> bool {
        self.intervals.is_empty()
    }

    pub fn contains(&self, z: f64) -> bool {
        self.intervals.iter().any(|&(l, u)| l <= z && z <= u)
    }

    pub fn total_length(&self) -> f64 {
        self.intervals.iter().map(|(l, u)| u - l).sum()
    }

    /// Scale every endpoint by `k > 0`.
    pub fn scaled(&self, k: f64) -> Self {
        Self {
            intervals: self.intervals.iter().map(|&(l, u)| (l * k, u * k)).collect(),
        }
    }

    /// `ln P(Z ∈ self)` for `Z ~ N(mean, sd²)`.
    pub fn log_mass(&self, mean: f64, sd: f64) -> f64 {
        let parts: Vec<f64> = self
            .intervals
            .iter()
            .map(|&(l, u)| log_std_normal_mass((l - mean) / sd, (u - mean) / sd))
            .collect();
        log_sum_exp(&parts)
    }

    /// `self ∩ {t : |t - center| ≥ radius}`.
    pub fn outside(&self, center: f64, radius: f64) -> Self {
        let (left, right) = (center - radius, center + radius);
        let mut out = Vec::new();
        for &(l, u) in &self.intervals {
            if l < left {
                out.push((l, u.min(left)));
            }
            if u > right {
                out.push((l.max(right), u));
            }
        }
        Self { intervals: out }
    }
}

/// Written as a list of `[lo, hi]` pairs; infinite ends become `"-inf"` and
/// `"inf"`.
impl Serialize for TruncationSet {
    fn serialize<S: Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        #[derive(Serialize)]
        #[serde(untagged)]
        enum Bound {
            Finite(f64),
            Infinite(&'static str),
        }
        let bound = |v: f64| {
            if v.is_finite() {
                Bound::Finite(v)
            } else if v > 0.0 {
                Bound::Infinite("inf")
            } else {
                Bound::Infinite("-inf")
            }
        };
        let mut seq = s.serialize_seq(Some(self.intervals.len()))?;
        for &(l, u) in &self.intervals {
            seq.serialize_element(&[bound(l), bound(u)])?;
        }
        seq.end()
    }
}

/// A p-value plus a flag raised when the conditioning set carried no
/// representable probability and the boundary value was returned instead.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct PValue {
    pub value: f64,
    pub degenerate: bool,
}

/// `P(|W - mean| ≥ |t - mean| | W ∈ set)` for `W ~ N(mean, variance)`.
pub fn tn_two_sided(t: f64, mean: f64, variance: f64, set: &TruncationSet) -> Result<PValue> {
    if !(variance > 0.0) || !variance.is_finite() {
        return Err(Error::Domain(format!("variance must be positive, got {variance}")));
    }
    if !t.is_finite() || !mean.is_finite() {
        return Err(Error::Domain("statistic and mean must be finite".into()));
    }
    let sd = variance.sqrt();
    let log_den = set.log_mass(mean, sd);
    if !log_den.is_finite() {
        return Ok(PValue {
            value: 1.0,
            degenerate: true,
        });
    }
    let radius = (t - mean).abs();
    if radius == 0.0 {
        return Ok(PValue {
            value: 1.0,
            degenerate: false,
        });
    }
    let log_num = set.outside(mean, radius).log_mass(mean, sd);
    Ok(PValue {
        value: (log_num - log_den).exp().clamp(0.0, 1.0),
        degenerate: false,
    })
}

/// Selective p-value under `H0: ηᵀs = 0`.
pub fn tn_two_sided_p(t: f64, variance: f64, set: &TruncationSet) -> Result<f64> {
    Ok(tn_two_sided(t, 0.0, variance, set)?.value)
}

/// `2·Φ̄(|t|/σ)`.
pub fn p_naive(t: f64, variance: f64) -> Result<f64> {
    if !(variance > 0.0) || !variance.is_finite() {
        return Err(Error::Domain(format!("variance must be positive, got {variance}")));
    }
    Ok((2.0 * norm_sf(t.abs() / variance.sqrt())).min(1.0))
}

/// `min(1, p·2^n)` evaluated in base-2 log-space, so powers of two cancel
/// exactly.
pub fn p_bonferroni(p_naive: f64, n: usize) -> f64 {
    (p_naive.log2() + n as f64).min(0.0).exp2()
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SweepConfig {
    /// Step past each piece, in units of `σ = √(ηᵀΣη)`.
    pub delta_factor: f64,
    pub max_steps: usize,
    /// Half-width of the search range beyond `|T|`, in units of `σ`.
    pub range_sds: f64,
}

impl Default for SweepConfig {
    fn default() -> Self {
        Self {
            delta_factor: 1e-4,
            max_steps: 1_000_000,
            range_sds: 10.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SweepDiagnostics {
    /// Pieces visited.
    pub pieces: usize,
    /// Pieces whose region matched the observed one.
    pub matching_pieces: usize,
    pub degenerate_pieces: usize,
    pub z_min: f64,
    pub z_max: f64,
    pub delta: f64,
    /// The piece at the observed statistic did not reproduce the observed
    /// region (a rounding tie at the threshold) and was added explicitly.
    pub observed_piece_forced: bool,
}

#[derive(Debug, Clone)]
pub struct SweepResult {
    pub truncation: TruncationSet,
    pub diagnostics: SweepDiagnostics,
}

/// Truncation set with the default configuration.
pub fn sweep(g: &PwlGraph, x: &Image, cov: &CovMatrix, eta: &ContrastVector) -> Result<SweepResult> {
    sweep_with(g, x, cov, eta, &SweepConfig::default())
}

pub fn sweep_with(
    g: &PwlGraph,
    x: &Image,
    cov: &CovMatrix,
    eta: &ContrastVector,
    cfg: &SweepConfig,
) -> Result<SweepResult> {
    let (_, observed_region) = forward(g, x)?;
    if !observed_region.is_testable() {
        return Err(Error::UndefinedHypothesis {
            region_size: observed_region.len(),
            n: x.len(),
        });
    }
    sweep_for_region(g, x, cov, eta, &observed_region, cfg)
}

fn sweep_for_region(
    g: &PwlGraph,
    x: &Image,
    cov: &CovMatrix,
    eta: &ContrastVector,
    target: &AnomalyRegion,
    cfg: &SweepConfig,
) -> Result<SweepResult> {
    let line = init_line(x, eta, cov)?;
    let t = eta.values().dot(x.pixels());
    let sd = cov.quad_form(eta.values())?.sqrt();
    let delta = (cfg.delta_factor * sd).max(1e-12);
    let z_min = -t.abs() - cfg.range_sds * sd;
    let z_max = t.abs() + cfg.range_sds * sd;

    let mut kept = Vec::new();
    let mut diag = SweepDiagnostics {
        pieces: 0,
        matching_pieces: 0,
        degenerate_pieces: 0,
        z_min,
        z_max,
        delta,
        observed_piece_forced: false,
    };

    let observed = piece_at(g, &line, t)?;
    if &observed.region != target {
        diag.observed_piece_forced = true;
    }
    kept.push((observed.lo, observed.hi));

    let mut z = z_min;
    while z <= z_max {
        if diag.pieces >= cfg.max_steps {
            return Err(Error::SweepBudget {
                max_steps: cfg.max_steps,
                z,
                z_max,
            });
        }
        let piece = piece_at(g, &line, z)?;
        diag.pieces += 1;
        if piece.degenerate {
            diag.degenerate_pieces += 1;
        }
        if &piece.region == target {
            diag.matching_pieces += 1;
            kept.push((piece.lo, piece.hi));
        }
        if piece.hi == f64::INFINITY {
            break;
        }
        z = piece.hi.max(z) + delta;
    }
    Ok(SweepResult {
        truncation: TruncationSet::new(kept)?,
        diagnostics: diag,
    })
}

/// Over-conditioning baseline: condition on the single piece containing the
/// observed statistic.
pub fn p_over_conditioning(g: &PwlGraph, x: &Image, cov: &CovMatrix, eta: &ContrastVector) -> Result<f64> {
    let line = init_line(x, eta, cov)?;
    let t = eta.values().dot(x.pixels());
    let variance = cov.quad_form(eta.values())?;
    let piece = piece_at(g, &line, t)?;
    tn_two_sided_p(t, variance, &TruncationSet::new(vec![(piece.lo, piece.hi)])?)
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct TestedHypothesis {
    pub observed: f64,
    pub variance: f64,
    pub truncation: TruncationSet,
    pub p_selective: f64,
    pub p_naive: f64,
    pub p_bonferroni: f64,
    pub p_over_conditioning: f64,
    /// The selective p-value fell back to 1 because `𝒵` had no
    /// representable mass.
    pub selective_degenerate: bool,
    pub sweep: SweepDiagnostics,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
#[serde(tag = "status", rename_all = "snake_case")]
pub enum Verdict {
    /// The region is empty or covers the whole image, so `η` is undefined.
    UndefinedHypothesis,
    Tested(TestedHypothesis),
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct TestOutcome {
    pub n: usize,
    pub region: AnomalyRegion,
    #[serde(flatten)]
    pub verdict: Verdict,
}

impl TestOutcome {
    pub fn tested(&self) -> Option<&TestedHypothesis> {
        match &self.verdict {
            Verdict::Tested(t) => Some(t),
            Verdict::UndefinedHypothesis => None,
        }
    }
}

/// Detect, build the hypothesis, and compute all four p-values.
pub fn run_test(g: &PwlGraph, x: &Image, cov: &CovMatrix) -> Result<TestOutcome> {
    run_test_with(g, x, cov, &SweepConfig::default())
}

pub fn run_test_with(g: &PwlGraph, x: &Image, cov: &CovMatrix, cfg: &SweepConfig) -> Result<TestOutcome> {
    if cov.dim() != x.len() {
        return Err(Error::shape(x.len(), cov.dim()));
    }
    let (_, region) = forward(g, x)?;
    let n = x.len();
    if !region.is_testable() {
        return Ok(TestOutcome {
            n,
            region,
            verdict: Verdict::UndefinedHypothesis,
        });
    }
    let h = Hypothesis::new(region.clone(), x, cov)?;
    let swept = sweep_for_region(g, x, cov, &h.eta, &region, cfg)?;
    let selective = tn_two_sided(h.observed, h.null_value, h.variance, &swept.truncation)?;
    let naive = p_naive(h.observed, h.variance)?;
    let oc = p_over_conditioning(g, x, cov, &h.eta)?;
    Ok(TestOutcome {
        n,
        region,
        verdict: Verdict::Tested(TestedHypothesis {
            observed: h.observed,
            variance: h.variance,
            truncation: swept.truncation,
            p_selective: selective.value,
            p_naive: naive,
            p_bonferroni: p_bonferroni(naive, n),
            p_over_conditioning: oc,
            selective_degenerate: selective.degenerate,
            sweep: swept.diagnostics,
        }),
    })
}

/// One-sample Kolmogorov–Smirnov test against `U[0, 1]`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct KsResult {
    pub statistic: f64,
    /// Asymptotic p-value with the Stephens small-sample correction.
    pub p_value: f64,
}

pub fn ks_uniform(samples: &[f64]) -> Result<KsResult> {
    if samples.is_empty() {
        return Err(Error::Domain("KS test needs at least one sample".into()));
    }
    let mut s = samples.to_vec();
    if s.iter().any(|v| v.is_nan()) {
        return Err(Error::Domain("KS sample contains NaN".into()));
    }
    s.sort_by(f64::total_cmp);
    let n = s.len() as f64;
    let statistic = s
        .iter()
        .enumerate()
        .map(|(i, &v)| {
            let f = v.clamp(0.0, 1.0);
            (f - i as f64 / n).max((i + 1) as f64 / n - f)
        })
        .fold(0.0, f64::max);
    let root = n.sqrt();
    let lambda = (root + 0.12 + 0.11 / root) * statistic;
    Ok(KsResult {
        statistic,
        p_value: kolmogorov_sf(lambda),
    })
}

/// `P(K > λ)` for the Kolmogorov distribution.
fn kolmogorov_sf(lambda: f64) -> f64 {
    if lambda < 0.2 {
        return 1.0;
    }
    let mut sum = 0.0;
    for k in 1..=100 {
        let k = k as f64;
        let term = (-2.0 * k * k * lambda * lambda).exp();
        sum += if k as u64 % 2 == 1 { term } else { -term };
        if term < 1e-17 {
            break;
        }
    }
    (2.0 * sum).clamp(0.0, 1.0)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::detector::build_eta;
    use crate::graph::reconstruction_fixture;
    use crate::quad::integrate;
    use crate::tensor::Image;
    use ndarray::{array, Array1};
    use proptest::prelude::*;
    use std::f64::consts::PI;

    fn density(t: f64) -> f64 {
        (-0.5 * t * t).exp() / (2.0 * PI).sqrt()
    }

    #[test]
    fn untruncated_center_is_one() {
        assert_eq!(tn_two_sided_p(0.0, 1.0, &TruncationSet::full()).unwrap(), 1.0);
        assert_eq!(p_naive(0.0, 1.0).unwrap(), 1.0);
    }

    #[test]
    fn untruncated_critical_value() {
        let p = tn_two_sided_p(1.959964, 1.0, &TruncationSet::full()).unwrap();
        assert!((p - 0.05).abs() < 1e-6);
        let naive = p_naive(1.959964, 1.0).unwrap();
        assert!((naive - 0.05).abs() < 1e-6);
        assert!((p - naive).abs() < 1e-15);
    }

    #[test]
    fn two_interval_set_matches_quadrature() {
        let set = TruncationSet::new(vec![(3.0, 4.0), (1.0, 2.0)]).unwrap();
        let p = tn_two_sided_p(3.5, 1.0, &set).unwrap();
        let num = integrate(density, 3.5, 4.0, 1e-14).unwrap();
        let den = integrate(density, 1.0, 2.0, 1e-14).unwrap() + integrate(density, 3.0, 4.0, 1e-14).unwrap();
        assert!((p - num / den).abs() < 1e-8);
    }

    #[test]
    fn far_tail_set_stays_finite() {
        let set = TruncationSet::new(vec![(40.0, 41.0), (-45.0, -44.0)]).unwrap();
        let p = tn_two_sided(40.5, 0.0, 1.0, &set).unwrap();
        assert!(!p.degenerate);
        // mass of [44, 45] is negligible against [40.5, 41] / [40, 41]
        let want = (1.0 - (-0.5f64 * (41.0 * 41.0 - 40.5 * 40.5)).exp() * 40.5 / 41.0)
            / (1.0 - (-0.5f64 * (41.0 * 41.0 - 40.0 * 40.0)).exp() * 40.0 / 41.0)
            * (-0.5f64 * (40.5 * 40.5 - 40.0 * 40.0)).exp()
            * 40.0
            / 40.5;
        assert!((p.value - want).abs() < 1e-3 * want, "{} vs {want}", p.value);
    }

    #[test]
    fn massless_set_is_flagged() {
        let point = TruncationSet::new(vec![(2.0, 2.0)]).unwrap();
        let p = tn_two_sided(2.0, 0.0, 1.0, &point).unwrap();
        assert!(p.degenerate);
        assert_eq!(p.value, 1.0);
        let far = TruncationSet::new(vec![(1e5, 1e5 + 1.0)]).unwrap();
        let p = tn_two_sided(1e5 + 1e-5, 0.0, 1.0, &far).unwrap();
        assert!(!p.degenerate);
        assert!((p.value - (-1.0f64).exp()).abs() < 1e-6);
    }

    #[test]
    fn bonferroni_in_log_space() {
        assert_eq!(p_bonferroni(1.0, 64), 1.0);
        assert_eq!(p_bonferroni(2f64.powi(-64) * 0.5, 64), 0.5);
        assert_eq!(p_bonferroni(1e-300, 4096), 1.0);
        assert_eq!(p_bonferroni(0.0, 3), 0.0);
    }

    #[test]
    fn set_merges_and_sorts() {
        let set = TruncationSet::new(vec![(2.0, 3.0), (0.0, 1.0), (1.0, 1.5), (2.5, 4.0)]).unwrap();
        assert_eq!(set.intervals(), &[(0.0, 1.5), (2.0, 4.0)]);
        assert!(TruncationSet::new(vec![(1.0, 0.0)]).is_err());
        let out = set.outside(0.0, 2.5);
        assert_eq!(out.intervals(), &[(2.5, 4.0)]);
    }

    #[test]
    fn serializes_infinite_bounds() {
        let set = TruncationSet::new(vec![(f64::NEG_INFINITY, -1.0), (2.0, f64::INFINITY)]).unwrap();
        assert_eq!(serde_json::to_string(&set).unwrap(), r#"[["-inf",-1.0],[2.0,"inf"]]"#);
    }

    fn hinge_fixture() -> (PwlGraph, Image, CovMatrix, ContrastVector) {
        let g = reconstruction_fixture(4, 1.2, false).unwrap();
        let x = Image::new(array![2.5, 0.3, -0.4, 0.9], 2, 2).unwrap();
        let cov = CovMatrix::identity(4);
        let (_, region) = forward(&g, &x).unwrap();
        let eta = build_eta(&region, 4).unwrap();
        (g, x, cov, eta)
    }

    /// Sub-intervals of `[lo, hi]` where the zero-reconstruction region
    /// matches the observed one, from the closed-form hinges `|a_i + b_i z| = λ`.
    fn closed_form_set(x: &Image, eta: &ContrastVector, lambda: f64, lo: f64, hi: f64) -> Vec<(f64, f64)> {
        let line = init_line(x, eta, &CovMatrix::identity(x.len())).unwrap();
        let region_at = |z: f64| -> Vec<bool> { line.at(z).iter().map(|v| v.abs() >= lambda).collect() };
        let t = eta.values().dot(x.pixels());
        let target = region_at(t);
        let mut cuts = vec![lo, hi];
        for i in 0..x.len() {
            if line.b[i] != 0.0 {
                for s in [-lambda, lambda] {
                    let r = (s - line.a[i]) / line.b[i];
                    if r > lo && r < hi {
                        cuts.push(r);
                    }
                }
            }
        }
        cuts.sort_by(f64::total_cmp);
        let mut out: Vec<(f64, f64)> = Vec::new();
        for w in cuts.windows(2) {
            if region_at(0.5 * (w[0] + w[1])) == target {
                match out.last_mut() {
                    Some(last) if last.1 == w[0] => last.1 = w[1],
                    _ => out.push((w[0], w[1])),
                }
            }
        }
        out
    }

    #[test]
    fn sweep_matches_closed_form_hinges() {
        let (g, x, cov, eta) = hinge_fixture();
        let res = sweep(&g, &x, &cov, &eta).unwrap();
        let d = &res.diagnostics;
        let want = closed_form_set(&x, &eta, 1.2, d.z_min, d.z_max);
        let got: Vec<(f64, f64)> = res
            .truncation
            .intervals()
            .iter()
            .map(|&(l, u)| (l.max(d.z_min), u.min(d.z_max)))
            .filter(|(l, u)| l < u)
            .collect();
        assert_eq!(got.len(), want.len(), "{got:?} vs {want:?}");
        for (g, w) in got.iter().zip(&want) {
            assert!((g.0 - w.0).abs() < 1e-10 && (g.1 - w.1).abs() < 1e-10, "{g:?} vs {w:?}");
        }
        assert!(!d.observed_piece_forced);
    }

    #[test]
    fn oc_matches_integration_over_single_piece() {
        let (g, x, cov, eta) = hinge_fixture();
        let line = init_line(&x, &eta, &cov).unwrap();
        let t = eta.values().dot(x.pixels());
        let piece = piece_at(&g, &line, t).unwrap();
        let sd = cov.quad_form(eta.values()).unwrap().sqrt();
        let f = |v: f64| density(v / sd) / sd;
        let lo = piece.lo.max(-60.0 * sd);
        let hi = piece.hi.min(60.0 * sd);
        let mut num = 0.0;
        if lo < -t.abs() {
            num += integrate(f, lo, hi.min(-t.abs()), 1e-14).unwrap();
        }
        if hi > t.abs() {
            num += integrate(f, lo.max(t.abs()), hi, 1e-14).unwrap();
        }
        let den = integrate(f, lo, hi, 1e-14).unwrap();
        let oc = p_over_conditioning(&g, &x, &cov, &eta).unwrap();
        assert!((oc - num / den).abs() < 1e-8, "{oc} vs {}", num / den);
    }

    #[test]
    fn run_test_reports_all_p_values() {
        let (g, x, cov, _) = hinge_fixture();
        let out = run_test(&g, &x, &cov).unwrap();
        let t = out.tested().expect("testable");
        for p in [t.p_selective, t.p_naive, t.p_bonferroni, t.p_over_conditioning] {
            assert!((0.0..=1.0).contains(&p));
        }
        assert!(t.truncation.contains(t.observed));
        assert!(t.p_selective > 0.0);
        assert_eq!(out, run_test(&g, &x, &cov).unwrap());
    }

    #[test]
    fn run_test_flags_empty_region() {
        let g = reconstruction_fixture(4, 1.2, true).unwrap();
        let x = Image::new(array![2.5, 0.3, -0.4, 0.9], 2, 2).unwrap();
        let out = run_test(&g, &x, &CovMatrix::identity(4)).unwrap();
        assert_eq!(out.verdict, Verdict::UndefinedHypothesis);
        let json = serde_json::to_value(&out).unwrap();
        assert_eq!(json["status"], "undefined_hypothesis");
        let eta = ContrastVector::new(array![1.0, 0.0, 0.0, -1.0]).unwrap();
        assert!(matches!(
            sweep(&g, &x, &CovMatrix::identity(4), &eta),
            Err(Error::UndefinedHypothesis { region_size: 0, n: 4 })
        ));
    }

    #[test]
    fn sweep_budget_is_enforced() {
        let (g, x, cov, eta) = hinge_fixture();
        let cfg = SweepConfig {
            max_steps: 1,
            ..SweepConfig::default()
        };
        assert!(matches!(
            sweep_with(&g, &x, &cov, &eta, &cfg),
            Err(Error::SweepBudget { max_steps: 1, .. })
        ));
    }

    #[test]
    fn ks_statistic_of_a_perfect_grid() {
        let grid: Vec<f64> = (0..100).map(|i| (i as f64 + 0.5) / 100.0).collect();
        let ks = ks_uniform(&grid).unwrap();
        assert!((ks.statistic - 0.005).abs() < 1e-12);
        assert!(ks.p_value > 0.99);
        let bunched = vec![0.01; 100];
        assert!(ks_uniform(&bunched).unwrap().p_value < 1e-10);
    }

    proptest! {
        #[test]
        fn invariant_to_eta_scale(k in 0.01f64..100.0, t in 0.0f64..5.0) {
            let set = TruncationSet::new(vec![(-3.0, -0.5), (0.2, 1.0), (t, t + 2.0)]).unwrap();
            let p = tn_two_sided_p(t, 1.3, &set).unwrap();
            let q = tn_two_sided_p(t * k, 1.3 * k * k, &set.scaled(k)).unwrap();
            prop_assert!((p - q).abs() < 1e-10);
        }

        #[test]
        fn monotone_in_statistic(t1 in 0.0f64..6.0, dt in 0.0f64..3.0) {
            let set = TruncationSet::new(vec![(-8.0, -1.0), (-0.5, 0.5), (1.5, 9.0)]).unwrap();
            let a = tn_two_sided_p(t1, 2.0, &set).unwrap();
            let b = tn_two_sided_p(t1 + dt, 2.0, &set).unwrap();
            prop_assert!(b <= a + 1e-15);
        }

        #[test]
        fn collapses_to_naive_without_truncation(t in -8.0f64..8.0, v in 0.1f64..10.0) {
            let p = tn_two_sided_p(t, v, &TruncationSet::full()).unwrap();
            prop_assert!((p - p_naive(t, v).unwrap()).abs() < 1e-12);
        }

        #[test]
        fn sweep_interval_contains_observation(xs in proptest::collection::vec(-3.0f64..3.0, 4)) {
            let g = reconstruction_fixture(4, 1.2, false).unwrap();
            let x = Image::new(Array1::from(xs), 2, 2).unwrap();
            let (_, region) = forward(&g, &x).unwrap();
            prop_assume!(region.is_testable());
            let out = run_test(&g, &x, &CovMatrix::identity(4)).unwrap();
            let t = out.tested().unwrap();
            prop_assert!(t.truncation.contains(t.observed));
            prop_assert!(t.p_selective > 0.0 && t.p_selective <= 1.0);
        }
    }
}
