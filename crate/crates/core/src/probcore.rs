//! Categorical-distribution numerics.
//!
//! Distributions live in the log domain. The controlled next-token
//! distribution is a point on the exponential-family geodesic between a safe
//! distribution `p_s` and a risky distribution `p_r`:
//!
//! ```text
//! p_θ(v) ∝ p_s(v)^(1-θ) · p_r(v)^θ = p_s(v) · exp(θ · r(v)),   r = log p_r - log p_s
//! ```
//!
//! With `A(θ) = log Σ_v p_s(v) exp(θ r(v))` the log-normalizer,
//! `KL(p_θ ‖ p_s) = θ A'(θ) - A(θ)` and its derivative is `θ · Var_{p_θ}(r)`,
//! which is nonnegative, so the spend is nondecreasing along the path. The
//! per-step budget solver exploits this to find the largest admissible θ.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Normalization tolerance for [`ProbVec`] log-probabilities.
pub const NORMALIZATION_TOL: f64 = 1e-9;

const MAX_NEWTON_ITERS: usize = 50;
const MAX_BISECTION_ITERS: usize = 200;

/// A categorical distribution with strictly positive support, stored as
/// natural-log probabilities.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ProbVec {
    logp: Vec<f64>,
}

impl ProbVec {
    /// Builds a distribution from already-normalized log-probabilities.
    pub fn from_log_probs(logp: Vec<f64>) -> Result<Self> {
        if logp.len() < 2 {
            return Err(Error::InvalidArgument(format!(
                "distribution needs at least 2 outcomes, got {}",
                logp.len()
            )));
        }
        if let Some(bad) = logp.iter().find(|x| !x.is_finite()) {
            return Err(Error::Domain(format!("non-finite log-probability {bad}")));
        }
        let total = log_sum_exp(&logp);
        if total.abs() > NORMALIZATION_TOL {
            return Err(Error::Domain(format!(
                "log-probabilities are not normalized (logsumexp = {total:e})"
            )));
        }
        Ok(Self { logp })
    }

    /// Builds a distribution by log-softmax normalization of arbitrary logits.
    pub fn from_logits(logits: &[f64]) -> Result<Self> {
        if logits.len() < 2 {
            return Err(Error::InvalidArgument(format!(
                "distribution needs at least 2 outcomes, got {}",
                logits.len()
            )));
        }
        if let Some(bad) = logits.iter().find(|x| !x.is_finite()) {
            return Err(Error::Domain(format!("non-finite logit {bad}")));
        }
        Ok(Self {
            logp: log_softmax(logits),
        })
    }

    /// Builds a distribution from (possibly unnormalized) positive weights.
    ///
    /// Zero or negative weights are rejected, not floored.
    pub fn from_probs(probs: &[f64]) -> Result<Self> {
        if let Some(bad) = probs.iter().find(|p| !(p.is_finite() && **p > 0.0)) {
            return Err(Error::Domain(format!(
                "probabilities must be finite and strictly positive, got {bad}"
            )));
        }
        let logits: Vec<f64> = probs.iter().map(|p| p.ln()).collect();
        Self::from_logits(&logits)
    }

    pub fn len(&self) -> usize {
        self.logp.len()
    }

    pub fn is_empty(&self) -> bool {
        self.logp.is_empty()
    }

    pub fn log_probs(&self) -> &[f64] {
        &self.logp
    }

    pub fn prob(&self, index: usize) -> f64 {
        self.logp[index].exp()
    }

    pub fn probs(&self) -> Vec<f64> {
        self.logp.iter().map(|l| l.exp()).collect()
    }

    pub fn into_log_probs(self) -> Vec<f64> {
        self.logp
    }
}

impl<'de> Deserialize<'de> for ProbVec {
    fn deserialize<D: serde::Deserializer<'de>>(deserializer: D) -> std::result::Result<Self, D::Error> {
        #[derive(Deserialize)]
        struct Raw {
            logp: Vec<f64>,
        }
        let raw = Raw::deserialize(deserializer)?;
        ProbVec::from_log_probs(raw.logp).map_err(serde::de::Error::custom)
    }
}

/// `log Σ exp(x)` with max-shift.
pub fn log_sum_exp(xs: &[f64]) -> f64 {
    let max = xs.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if !max.is_finite() {
        return max;
    }
    let sum: f64 = xs.iter().map(|x| (x - max).exp()).sum();
    max + sum.ln()
}

fn log_softmax(logits: &[f64]) -> Vec<f64> {
    let lse = log_sum_exp(logits);
    logits.iter().map(|x| x - lse).collect()
}

/// `KL(p ‖ q) = Σ p(v) (log p(v) - log q(v))` in nats.
pub fn kl(p: &ProbVec, q: &ProbVec) -> Result<f64> {
    if p.len() != q.len() {
        return Err(Error::DimensionMismatch {
            expected: p.len(),
            found: q.len(),
        });
    }
    Ok(kl_unchecked(&p.logp, &q.logp))
}

fn kl_unchecked(logp: &[f64], logq: &[f64]) -> f64 {
    let total: f64 = logp
        .iter()
        .zip(logq)
        .map(|(lp, lq)| lp.exp() * (lp - lq))
        .sum();
    // Rounding can leave a tiny negative residue when p ≈ q.
    total.max(0.0)
}

/// A safe/risky pair together with the per-token log-ratio `r = log p_r - log p_s`.
#[derive(Debug, Clone, PartialEq)]
pub struct FusionProblem {
    safe: ProbVec,
    risky: ProbVec,
    log_ratio: Vec<f64>,
    full_kl: f64,
}

impl FusionProblem {
    pub fn new(safe: ProbVec, risky: ProbVec) -> Result<Self> {
        if safe.len() != risky.len() {
            return Err(Error::DimensionMismatch {
                expected: safe.len(),
                found: risky.len(),
            });
        }
        let log_ratio: Vec<f64> = risky
            .logp
            .iter()
            .zip(&safe.logp)
            .map(|(r, s)| r - s)
            .collect();
        let full_kl = kl_unchecked(&risky.logp, &safe.logp);
        Ok(Self {
            safe,
            risky,
            log_ratio,
            full_kl,
        })
    }

    pub fn safe(&self) -> &ProbVec {
        &self.safe
    }

    pub fn risky(&self) -> &ProbVec {
        &self.risky
    }

    pub fn log_ratio(&self) -> &[f64] {
        &self.log_ratio
    }

    pub fn vocab_size(&self) -> usize {
        self.safe.len()
    }

    /// Unconstrained spend `KL(p_r ‖ p_s)`.
    pub fn full_kl(&self) -> f64 {
        self.full_kl
    }

    /// The geodesic point `p_θ`, normalized in the log domain.
    pub fn geodesic(&self, theta: f64) -> Result<ProbVec> {
        check_theta(theta)?;
        if theta == 0.0 {
            return Ok(self.safe.clone());
        }
        if theta == 1.0 {
            return Ok(self.risky.clone());
        }
        let logits: Vec<f64> = self
            .safe
            .logp
            .iter()
            .zip(&self.log_ratio)
            .map(|(s, r)| s + theta * r)
            .collect();
        Ok(ProbVec {
            logp: log_softmax(&logits),
        })
    }

    /// Spend at `theta` and its derivative `θ · Var_{p_θ}(r)`.
    pub fn kl_of_theta(&self, theta: f64) -> Result<(f64, f64)> {
        let p_theta = self.geodesic(theta)?;
        let kl = kl_unchecked(&p_theta.logp, &self.safe.logp);
        if theta == 0.0 {
            return Ok((kl, 0.0));
        }
        let probs = p_theta.probs();
        let mean: f64 = probs.iter().zip(&self.log_ratio).map(|(p, r)| p * r).sum();
        let var: f64 = probs
            .iter()
            .zip(&self.log_ratio)
            .map(|(p, r)| p * (r - mean) * (r - mean))
            .sum();
        Ok((kl, theta * var.max(0.0)))
    }

    /// Largest-spend θ with `KL(p_θ ‖ p_s) ≤ budget` (up to `tol`).
    ///
    /// `tol` defaults to `1e-6 · max(1, budget)`.
    pub fn solve_theta(&self, budget: f64, tol: Option<f64>) -> Result<FusionSolution> {
        if !(budget.is_finite() && budget >= 0.0) {
            return Err(Error::Domain(format!("step budget must be >= 0, got {budget}")));
        }
        let tol = tol.unwrap_or_else(|| default_tolerance(budget));
        if !(tol.is_finite() && tol > 0.0) {
            return Err(Error::Domain(format!("tolerance must be > 0, got {tol}")));
        }
        if budget == 0.0 {
            return Ok(FusionSolution {
                theta: 0.0,
                realized_kl: 0.0,
                iterations: 0,
                method: SolveMethod::BoundaryZero,
            });
        }
        if self.full_kl <= budget {
            return Ok(FusionSolution {
                theta: 1.0,
                realized_kl: self.full_kl,
                iterations: 0,
                method: SolveMethod::BoundaryOne,
            });
        }

        // g(θ) = KL(θ) - budget; g(0) = -budget < 0 < g(1).
        let (mut lo, mut hi) = (0.0_f64, 1.0_f64);
        let mut theta = (budget / self.full_kl.max(1e-12)).min(1.0);
        let mut used_bisection = false;
        let mut newton_steps = 0;
        let mut bisection_steps = 0;

        loop {
            let (kl, dkl) = self.kl_of_theta(theta)?;
            let g = kl - budget;
            if g.abs() <= tol {
                return Ok(FusionSolution {
                    theta,
                    realized_kl: kl,
                    iterations: newton_steps + bisection_steps,
                    method: if used_bisection {
                        SolveMethod::Bisection
                    } else {
                        SolveMethod::Newton
                    },
                });
            }
            if g < 0.0 {
                lo = theta;
            } else {
                hi = theta;
            }

            let newton = theta - g / dkl;
            let newton_ok = newton_steps < MAX_NEWTON_ITERS
                && dkl > 0.0
                && newton.is_finite()
                && newton > lo
                && newton < hi;
            if newton_ok {
                newton_steps += 1;
                theta = newton;
            } else {
                if bisection_steps >= MAX_BISECTION_ITERS {
                    return Err(Error::Convergence {
                        lo,
                        hi,
                        iterations: newton_steps + bisection_steps,
                    });
                }
                bisection_steps += 1;
                used_bisection = true;
                theta = 0.5 * (lo + hi);
            }
        }
    }
}

fn check_theta(theta: f64) -> Result<()> {
    if (0.0..=1.0).contains(&theta) {
        Ok(())
    } else {
        Err(Error::Domain(format!("theta must lie in [0, 1], got {theta}")))
    }
}

/// Solver tolerance used when none is given: `1e-6 · max(1, budget)`.
pub fn default_tolerance(budget: f64) -> f64 {
    1e-6 * budget.max(1.0)
}

/// How [`FusionProblem::solve_theta`] terminated.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SolveMethod {
    BoundaryZero,
    BoundaryOne,
    Newton,
    /// At least one step fell back to bisection.
    Bisection,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct FusionSolution {
    pub theta: f64,
    pub realized_kl: f64,
    pub iterations: usize,
    pub method: SolveMethod,
}
