//! Scalar statistics of the audit.
//!
//! The spend proxy over `m` trajectory totals `Z_1..Z_m` is
//!
//! ```text
//! U_EBB = mean + sqrt(2 · var · L / m) + 3 · R_eff · L / m,    L = ln(2/δ)
//! ```
//!
//! with `var` the unbiased sample variance. `R_eff` is either the worst-case
//! range `R = t_max · ln |V|` or the data-dependent `min(R, max(range, 1))`.
//! The last term scales as `1/m` and dominates at small sample sizes.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RangeMode {
    WorstCase,
    Empirical,
}

impl std::str::FromStr for RangeMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "worst-case" | "worst_case" => Ok(Self::WorstCase),
            "empirical" => Ok(Self::Empirical),
            other => Err(Error::InvalidArgument(format!("unknown range mode {other:?}"))),
        }
    }
}

/// Reporting level and range configuration for [`ebb_upper`].
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EbbParams {
    pub delta: f64,
    /// Worst-case range `R`.
    pub range_cap: f64,
    pub range_mode: RangeMode,
}

impl EbbParams {
    pub fn new(delta: f64, t_max: usize, vocab_size: usize, range_mode: RangeMode) -> Result<Self> {
        Self::with_range_cap(delta, r_worst(t_max, vocab_size)?, range_mode)
    }

    pub fn with_range_cap(delta: f64, range_cap: f64, range_mode: RangeMode) -> Result<Self> {
        if !(delta > 0.0 && delta < 1.0) {
            return Err(Error::InvalidArgument(format!("delta must lie in (0, 1), got {delta}")));
        }
        if !(range_cap.is_finite() && range_cap > 0.0) {
            return Err(Error::InvalidArgument(format!("range cap must be > 0, got {range_cap}")));
        }
        Ok(Self {
            delta,
            range_cap,
            range_mode,
        })
    }

    pub fn with_mode(self, range_mode: RangeMode) -> Self {
        Self { range_mode, ..self }
    }
}

/// `R = t_max · ln V`.
pub fn r_worst(t_max: usize, vocab_size: usize) -> Result<f64> {
    if t_max == 0 || vocab_size < 2 {
        return Err(Error::InvalidArgument(format!(
            "need t_max >= 1 and vocab >= 2, got {t_max} and {vocab_size}"
        )));
    }
    Ok(t_max as f64 * (vocab_size as f64).ln())
}

/// `min(R, max(range, 1))`.
pub fn r_eff(range: f64, range_cap: f64) -> f64 {
    range_cap.min(range.max(1.0))
}

fn log_term(delta: f64) -> f64 {
    (2.0 / delta).ln()
}

/// `3 · R_eff · ln(2/δ) / n`.
pub fn det_term(r_eff: f64, n: usize, delta: f64) -> f64 {
    3.0 * r_eff * log_term(delta) / n as f64
}

fn var_term(var: f64, n: usize, delta: f64) -> f64 {
    (2.0 * var * log_term(delta) / n as f64).sqrt()
}

/// Bonferroni-adjusted level `alpha / hypotheses`.
pub fn bonferroni(alpha: f64, hypotheses: usize) -> f64 {
    assert!(hypotheses >= 1, "at least one hypothesis");
    alpha / hypotheses as f64
}

/// Sample moments of trajectory spends.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Moments {
    pub m: usize,
    pub mean: f64,
    /// Unbiased (divisor `m − 1`).
    pub var: f64,
    pub range: f64,
}

impl Moments {
    pub fn from_samples(samples: &[f64]) -> Result<Self> {
        if samples.len() < 2 {
            return Err(Error::InsufficientSamples {
                needed: 2,
                found: samples.len(),
            });
        }
        let m = samples.len();
        let mean = samples.iter().sum::<f64>() / m as f64;
        let var = samples.iter().map(|z| (z - mean) * (z - mean)).sum::<f64>() / (m - 1) as f64;
        let (lo, hi) = samples
            .iter()
            .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), &z| (lo.min(z), hi.max(z)));
        Ok(Self {
            m,
            mean,
            var,
            range: hi - lo,
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EbbSummary {
    pub m: usize,
    pub mean: f64,
    pub var: f64,
    pub range: f64,
    pub r_eff: f64,
    pub var_term: f64,
    pub det_term: f64,
    pub u_ebb: f64,
    pub delta: f64,
}

impl EbbSummary {
    /// Assembles a summary from moments without recomputing `R_eff`.
    pub fn assemble(m: usize, mean: f64, var: f64, range: f64, r_eff: f64, delta: f64) -> Self {
        let var_term = var_term(var, m, delta);
        let det_term = det_term(r_eff, m, delta);
        Self {
            m,
            mean,
            var,
            range,
            r_eff,
            var_term,
            det_term,
            u_ebb: mean + var_term + det_term,
            delta,
        }
    }

    /// Recovers the variance behind a published bound, given the sample size,
    /// mean, effective range and level it was computed with.
    pub fn from_published_bound(m: usize, mean: f64, u_ebb: f64, r_eff: f64, delta: f64) -> Result<Self> {
        if m < 2 {
            return Err(Error::InsufficientSamples { needed: 2, found: m });
        }
        let vt = u_ebb - mean - det_term(r_eff, m, delta);
        if vt < 0.0 {
            return Err(Error::InvalidArgument(format!(
                "bound {u_ebb} is below mean plus deterministic term"
            )));
        }
        let var = vt * vt * m as f64 / (2.0 * log_term(delta));
        Ok(Self::assemble(m, mean, var, r_eff, r_eff, delta))
    }
}

/// Empirical-Bernstein-style upper proxy from moments.
pub fn ebb_upper(moments: &Moments, params: &EbbParams) -> Result<EbbSummary> {
    if moments.m < 2 {
        return Err(Error::InsufficientSamples {
            needed: 2,
            found: moments.m,
        });
    }
    if !(moments.var >= 0.0) {
        return Err(Error::Domain(format!("variance must be >= 0, got {}", moments.var)));
    }
    let r_eff = match params.range_mode {
        RangeMode::WorstCase => params.range_cap,
        RangeMode::Empirical => r_eff(moments.range, params.range_cap),
    };
    Ok(EbbSummary::assemble(
        moments.m,
        moments.mean,
        moments.var,
        moments.range,
        r_eff,
        params.delta,
    ))
}

/// [`ebb_upper`] on raw spends.
pub fn ebb_upper_samples(samples: &[f64], params: &EbbParams) -> Result<EbbSummary> {
    ebb_upper(&Moments::from_samples(samples)?, params)
}

/// Re-evaluates a summary at another sample size, holding mean, variance,
/// `R_eff` and δ fixed.
pub fn project_min_n(observed: &EbbSummary, n_target: usize) -> Result<EbbSummary> {
    if n_target < 2 {
        return Err(Error::InsufficientSamples {
            needed: 2,
            found: n_target,
        });
    }
    if n_target == observed.m {
        return Ok(*observed);
    }
    Ok(EbbSummary::assemble(
        n_target,
        observed.mean,
        observed.var,
        observed.range,
        observed.r_eff,
        observed.delta,
    ))
}

/// `max(0, min(final_budgets))`.
pub fn effective_budget(final_budgets: &[f64]) -> Result<f64> {
    let min = final_budgets
        .iter()
        .copied()
        .reduce(f64::min)
        .ok_or_else(|| Error::InvalidArgument("no final budgets".into()))?;
    Ok(min.max(0.0))
}

/// Spend ratio, or an explicit invalid marker when the effective budget is
/// exhausted.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Rho {
    Valid(f64),
    Invalid,
}

impl Rho {
    pub fn value(self) -> Option<f64> {
        match self {
            Rho::Valid(v) => Some(v),
            Rho::Invalid => None,
        }
    }

    pub fn is_valid(self) -> bool {
        matches!(self, Rho::Valid(_))
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SpendRatio {
    pub rho: Rho,
    pub certified: bool,
}

pub fn spend_ratio(u_ebb: f64, b_eff: f64) -> SpendRatio {
    let rho = if b_eff > 0.0 {
        Rho::Valid(u_ebb / b_eff)
    } else {
        Rho::Invalid
    };
    SpendRatio {
        rho,
        certified: u_ebb <= b_eff,
    }
}

/// Per-prompt audit row.
///
/// Serialized with either a `"rho"` number or `"invalid": true`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(into = "EvalRowWire", try_from = "EvalRowWire")]
pub struct EvalRow {
    pub prompt_id: String,
    pub n: usize,
    pub mean: f64,
    pub var: f64,
    pub range: f64,
    pub r_eff: f64,
    pub u_ebb: f64,
    pub b_eff: f64,
    pub rho: Rho,
    pub certified: bool,
}

impl EvalRow {
    pub fn new(prompt_id: impl Into<String>, summary: &EbbSummary, b_eff: f64) -> Self {
        let ratio = spend_ratio(summary.u_ebb, b_eff);
        Self {
            prompt_id: prompt_id.into(),
            n: summary.m,
            mean: summary.mean,
            var: summary.var,
            range: summary.range,
            r_eff: summary.r_eff,
            u_ebb: summary.u_ebb,
            b_eff,
            rho: ratio.rho,
            certified: ratio.certified,
        }
    }

    /// Evaluates a prompt from its trajectory spends and final budgets.
    pub fn from_trajectories(
        prompt_id: impl Into<String>,
        spends: &[f64],
        final_budgets: &[f64],
        params: &EbbParams,
    ) -> Result<Self> {
        let summary = ebb_upper_samples(spends, params)?;
        Ok(Self::new(prompt_id, &summary, effective_budget(final_budgets)?))
    }

    pub fn summary(&self, delta: f64) -> EbbSummary {
        EbbSummary::assemble(self.n, self.mean, self.var, self.range, self.r_eff, delta)
    }

    /// ρ with invalid rows ordered below every valid one.
    pub fn rho_or_neg_inf(&self) -> f64 {
        self.rho.value().unwrap_or(f64::NEG_INFINITY)
    }
}

#[derive(Serialize, Deserialize)]
struct EvalRowWire {
    prompt_id: String,
    n: usize,
    mean: f64,
    var: f64,
    range: f64,
    r_eff: f64,
    u_ebb: f64,
    b_eff: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    rho: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    invalid: Option<bool>,
    certified: bool,
}

impl From<EvalRow> for EvalRowWire {
    fn from(row: EvalRow) -> Self {
        let (rho, invalid) = match row.rho {
            Rho::Valid(v) => (Some(v), None),
            Rho::Invalid => (None, Some(true)),
        };
        Self {
            prompt_id: row.prompt_id,
            n: row.n,
            mean: row.mean,
            var: row.var,
            range: row.range,
            r_eff: row.r_eff,
            u_ebb: row.u_ebb,
            b_eff: row.b_eff,
            rho,
            invalid,
            certified: row.certified,
        }
    }
}

impl TryFrom<EvalRowWire> for EvalRow {
    type Error = String;

    fn try_from(w: EvalRowWire) -> std::result::Result<Self, String> {
        let rho = match (w.rho, w.invalid) {
            (Some(v), None | Some(false)) => Rho::Valid(v),
            (None, Some(true)) => Rho::Invalid,
            _ => return Err("row needs exactly one of \"rho\" or \"invalid\": true".into()),
        };
        Ok(Self {
            prompt_id: w.prompt_id,
            n: w.n,
            mean: w.mean,
            var: w.var,
            range: w.range,
            r_eff: w.r_eff,
            u_ebb: w.u_ebb,
            b_eff: w.b_eff,
            rho,
            certified: w.certified,
        })
    }
}

/// Deterministic-term table over `n × R_eff`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BernsteinGrid {
    pub n_values: Vec<usize>,
    pub r_eff_values: Vec<f64>,
    pub delta: f64,
    /// `values[i][j]` is the term at `n_values[i]`, `r_eff_values[j]`.
    pub values: Vec<Vec<f64>>,
}

pub fn bernstein_grid(n_values: &[usize], r_eff_values: &[f64], delta: f64) -> Result<BernsteinGrid> {
    if n_values.is_empty() || r_eff_values.is_empty() {
        return Err(Error::InvalidArgument("grid axes must be nonempty".into()));
    }
    if n_values.contains(&0) {
        return Err(Error::InvalidArgument("grid sample sizes must be >= 1".into()));
    }
    let values = n_values
        .iter()
        .map(|&n| r_eff_values.iter().map(|&r| det_term(r, n, delta)).collect())
        .collect();
    Ok(BernsteinGrid {
        n_values: n_values.to_vec(),
        r_eff_values: r_eff_values.to_vec(),
        delta,
        values,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    const R_PUBLISHED: f64 = 2352.36;

    fn stage1_params() -> EbbParams {
        EbbParams::with_range_cap(bonferroni(0.05, 12), R_PUBLISHED, RangeMode::WorstCase).unwrap()
    }

    fn moments(m: usize, mean: f64, var: f64) -> Moments {
        Moments {
            m,
            mean,
            var,
            range: 0.0,
        }
    }

    #[test]
    fn worst_case_range() {
        assert!((r_worst(200, 128_256).unwrap() - 2352.35).abs() <= 0.02);
        assert!((r_worst(1, 2).unwrap() - std::f64::consts::LN_2).abs() < 1e-15);
        assert!((r_worst(10, 10).unwrap() - 23.026).abs() < 1e-3);
        assert!(r_worst(0, 10).is_err());
    }

    #[test]
    fn effective_range() {
        assert_eq!(r_eff(0.2, R_PUBLISHED), 1.0);
        assert_eq!(r_eff(5000.0, R_PUBLISHED), R_PUBLISHED);
        assert_eq!(r_eff(87.4, R_PUBLISHED), 87.4);
    }

    #[test]
    fn stage1_rows() {
        let s = ebb_upper(&moments(2000, 159.15, 2626.59), &stage1_params()).unwrap();
        assert!((s.u_ebb - 184.96).abs() <= 0.05);
        let s = ebb_upper(&moments(1000, 176.78, 1508.17), &stage1_params()).unwrap();
        assert!((s.u_ebb - 224.67).abs() <= 0.05);
    }

    #[test]
    fn zero_variance_converges_to_mean() {
        let params = EbbParams::with_range_cap(0.004167, 1.0, RangeMode::Empirical).unwrap();
        let s = ebb_upper(&moments(1_000_000, 42.0, 0.0), &params).unwrap();
        assert!(s.u_ebb > 42.0 && s.u_ebb - 42.0 <= 0.05);
    }

    #[test]
    fn insufficient_samples() {
        assert!(matches!(
            ebb_upper(&moments(1, 1.0, 0.0), &stage1_params()),
            Err(Error::InsufficientSamples { .. })
        ));
        assert!(Moments::from_samples(&[3.0]).is_err());
    }

    #[test]
    fn deterministic_term_examples() {
        assert!((det_term(87.4, 4, 0.0033) - 420.0).abs() <= 0.1);
        assert!((det_term(120.4, 4, 0.0033) - 578.6).abs() <= 0.1);
        assert!((det_term(60.0, 30, 0.0033) - 38.4).abs() <= 1.0);
    }

    #[test]
    fn bonferroni_levels() {
        assert!((bonferroni(0.05, 12) - 0.0041667).abs() < 1e-7);
        assert_eq!(bonferroni(0.05, 1), 0.05);
        assert!((bonferroni(0.05, 18) - 0.002778).abs() < 1e-6);
    }

    #[test]
    fn effective_budget_cases() {
        assert_eq!(effective_budget(&[593.49; 4]).unwrap(), 593.49);
        assert_eq!(effective_budget(&[593.0, -105.0, 594.0]).unwrap(), 0.0);
        assert_eq!(effective_budget(&[1.0]).unwrap(), 1.0);
        assert!(effective_budget(&[]).is_err());
    }

    #[test]
    fn spend_ratio_cases() {
        let r = spend_ratio(690.76, 593.49);
        assert!((r.rho.value().unwrap() - 1.164).abs() <= 0.001);
        assert!(!r.certified);
        let r = spend_ratio(435.19, 594.09);
        assert!((r.rho.value().unwrap() - 0.733).abs() <= 0.001);
        assert!(r.certified);
        assert_eq!(spend_ratio(10.0, 0.0).rho, Rho::Invalid);
    }

    #[test]
    fn projection_of_heldout_rows() {
        let observed = EbbSummary::from_published_bound(4, 198.28, 690.76, 87.4, 0.0033).unwrap();
        let projected = project_min_n(&observed, 20).unwrap();
        assert!((projected.u_ebb - 314.68).abs() <= 0.05);
        assert!((projected.u_ebb / 593.49 - 0.530).abs() <= 0.005);

        let observed = EbbSummary::from_published_bound(4, 182.35, 871.93, 120.4, 0.0033).unwrap();
        assert!((project_min_n(&observed, 20).unwrap().u_ebb - 347.70).abs() <= 0.05);

        assert_eq!(project_min_n(&observed, 4).unwrap(), observed);
        assert!(project_min_n(&observed, 1).is_err());
    }

    #[test]
    fn published_bound_inversion_recovers_variance() {
        let params = EbbParams::with_range_cap(0.0033, 2352.36, RangeMode::Empirical).unwrap();
        let s = ebb_upper_samples(&[150.0, 210.0, 190.0, 230.0, 170.0], &params).unwrap();
        let back = EbbSummary::from_published_bound(s.m, s.mean, s.u_ebb, s.r_eff, 0.0033).unwrap();
        assert!((back.var - s.var).abs() < 1e-9 * s.var.max(1.0));
        // var_term² · m / (2 ln(2/δ)) = var
        let recovered = s.var_term * s.var_term * s.m as f64 / (2.0 * (2.0f64 / 0.0033).ln());
        assert!((recovered - s.var).abs() < 1e-9 * s.var);
    }

    #[test]
    fn grid_examples() {
        let grid = bernstein_grid(&[4, 8, 20], &[120.0, 200.0], 1.0 / 300.0).unwrap();
        assert!((grid.values[0][0] - 575.4).abs() <= 1.0);
        assert!((grid.values[2][1] - 191.8).abs() <= 1.0);
        for j in 0..2 {
            assert!((grid.values[1][j] * 2.0 - grid.values[0][j]).abs() < 1e-9);
        }
        assert!(bernstein_grid(&[], &[1.0], 0.1).is_err());
    }

    #[test]
    fn moment_path_equivalence() {
        let samples = [12.0, 15.5, 9.25, 30.0, 22.0, 18.0];
        let params = EbbParams::with_range_cap(0.01, 100.0, RangeMode::Empirical).unwrap();
        let from_samples = ebb_upper_samples(&samples, &params).unwrap();
        let m = Moments::from_samples(&samples).unwrap();
        let from_moments = ebb_upper(&m, &params).unwrap();
        assert!((from_samples.u_ebb - from_moments.u_ebb).abs() < 1e-9);
        assert!((m.var - 334.2625 / 6.0).abs() < 1e-9);
        assert_eq!(m.range, 20.75);
    }

    #[test]
    fn eval_row_wire_format() {
        let params = EbbParams::with_range_cap(0.0033, 2352.36, RangeMode::Empirical).unwrap();
        let valid = EvalRow::from_trajectories("a", &[190.0, 200.0, 180.0, 170.0], &[593.0; 4], &params).unwrap();
        let json = serde_json::to_value(&valid).unwrap();
        assert!(json.get("rho").is_some());
        assert!(json.get("invalid").is_none());

        let invalid = EvalRow::from_trajectories("b", &[190.0, 200.0], &[593.0, -1.0], &params).unwrap();
        let json = serde_json::to_string(&invalid).unwrap();
        assert!(json.contains("\"invalid\":true"));
        assert!(!json.contains("\"rho\""));
        assert_eq!(serde_json::from_str::<EvalRow>(&json).unwrap(), invalid);
        assert!(serde_json::from_str::<EvalRow>(&json.replace("\"invalid\":true,", "")).is_err());
    }
}
