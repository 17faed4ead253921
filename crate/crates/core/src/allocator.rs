//! Adaptive trajectory allocation: a cheap floor pass for every prompt, then
//! a top-up to the full budget for the most informative survivors.

use std::ops::Range;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::auditstats::{r_worst, EbbParams, EvalRow, RangeMode};
use crate::decoder::{Prompt, TrajectoryLog};
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AllocParams {
    pub n_floor: usize,
    pub eta: f64,
    pub tau: f64,
    pub n_target: usize,
    pub n_min: usize,
    pub n_max: usize,
    pub delta: f64,
    pub range_cap: f64,
    pub range_mode: RangeMode,
}

impl Default for AllocParams {
    fn default() -> Self {
        Self {
            n_floor: 4,
            eta: 1.10,
            tau: 0.5,
            n_target: 20,
            n_min: 4,
            n_max: 20,
            delta: 0.0033,
            range_cap: r_worst(200, 128_256).expect("valid default range"),
            range_mode: RangeMode::Empirical,
        }
    }
}

impl AllocParams {
    /// Checks invariants. A floor below 2 is raised to 2.
    pub fn validated(mut self) -> Result<Self> {
        self.n_floor = self.n_floor.max(2);
        if !(self.tau > 0.0 && self.tau <= 1.0) {
            return Err(Error::InvalidArgument(format!("tau must lie in (0, 1], got {}", self.tau)));
        }
        if !(self.eta >= 1.0) {
            return Err(Error::InvalidArgument(format!("eta must be >= 1, got {}", self.eta)));
        }
        if self.n_target < self.n_floor {
            return Err(Error::InvalidArgument(format!(
                "n_target {} is below the floor {}",
                self.n_target, self.n_floor
            )));
        }
        if self.n_min < 2 || self.n_min > self.n_max {
            return Err(Error::InvalidArgument(format!(
                "need 2 <= n_min <= n_max, got {}..{}",
                self.n_min, self.n_max
            )));
        }
        self.ebb()?;
        Ok(self)
    }

    pub fn ebb(&self) -> Result<EbbParams> {
        EbbParams::with_range_cap(self.delta, self.range_cap, self.range_mode)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SurrogateScore {
    pub mu_safe: f64,
    pub sigma_safe: f64,
    pub margin: f64,
}

impl SurrogateScore {
    pub const UNTRAINED: Self = Self {
        mu_safe: 0.5,
        sigma_safe: 0.25,
        margin: 0.0,
    };

    pub fn new(mu_safe: f64, sigma_safe: f64, margin: f64) -> Self {
        Self {
            mu_safe: mu_safe.clamp(0.0, 1.0),
            sigma_safe: sigma_safe.max(0.0),
            margin,
        }
    }
}

impl Default for SurrogateScore {
    fn default() -> Self {
        Self::UNTRAINED
    }
}

/// Produces the `index`-th trajectory of a prompt. Must be deterministic in
/// `(prompt, index)` so that floor and top-up batches never overlap.
pub trait TrajectorySampler: Sync {
    fn sample(&self, prompt: &Prompt, index: usize) -> Result<TrajectoryLog>;
}

impl<F> TrajectorySampler for F
where
    F: Fn(&Prompt, usize) -> Result<TrajectoryLog> + Sync,
{
    fn sample(&self, prompt: &Prompt, index: usize) -> Result<TrajectoryLog> {
        self(prompt, index)
    }
}

/// Successful trajectory outcomes for one prompt, in index order.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct PromptSamples {
    pub indices: Vec<usize>,
    pub spends: Vec<f64>,
    pub final_budgets: Vec<f64>,
    pub failures: usize,
}

impl PromptSamples {
    pub fn collect(sampler: &dyn TrajectorySampler, prompt: &Prompt, indices: Range<usize>) -> Self {
        let results: Vec<(usize, Result<TrajectoryLog>)> = indices
            .into_par_iter()
            .map(|i| (i, sampler.sample(prompt, i)))
            .collect();
        let mut out = Self::default();
        for (i, res) in results {
            match res {
                Ok(log) => {
                    out.indices.push(i);
                    out.spends.push(log.z);
                    out.final_budgets.push(log.final_budget);
                }
                Err(_) => out.failures += 1,
            }
        }
        out
    }

    pub fn merge(&mut self, other: PromptSamples) {
        self.indices.extend(other.indices);
        self.spends.extend(other.spends);
        self.final_budgets.extend(other.final_budgets);
        self.failures += other.failures;
    }

    pub fn len(&self) -> usize {
        self.spends.len()
    }

    pub fn is_empty(&self) -> bool {
        self.spends.is_empty()
    }

    pub fn row(&self, prompt_id: &str, params: &EbbParams) -> Result<EvalRow> {
        EvalRow::from_trajectories(prompt_id, &self.spends, &self.final_budgets, params)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PromptEval {
    pub prompt: Prompt,
    pub samples: PromptSamples,
    pub row: EvalRow,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct AllocOutcome {
    pub evals: Vec<PromptEval>,
    /// Failed trajectories across all prompts.
    pub failures: usize,
    /// Prompts left with fewer than two usable trajectories.
    pub excluded: Vec<String>,
}

impl AllocOutcome {
    pub fn rows(&self) -> Vec<EvalRow> {
        self.evals.iter().map(|e| e.row.clone()).collect()
    }
}

/// Evaluates each prompt on the trajectory indices returned by `plan`.
pub fn evaluate_with(
    prompts: &[Prompt],
    sampler: &dyn TrajectorySampler,
    ebb: &EbbParams,
    plan: impl Fn(usize) -> usize + Sync,
) -> Result<AllocOutcome> {
    if prompts.is_empty() {
        return Err(Error::InvalidArgument("no prompts to evaluate".into()));
    }
    let collected: Vec<(Prompt, PromptSamples)> = prompts
        .par_iter()
        .enumerate()
        .map(|(i, p)| (p.clone(), PromptSamples::collect(sampler, p, 0..plan(i))))
        .collect();
    let mut out = AllocOutcome::default();
    for (prompt, samples) in collected {
        out.failures += samples.failures;
        if samples.len() < 2 {
            out.excluded.push(prompt.id.clone());
            continue;
        }
        let row = samples.row(&prompt.id, ebb)?;
        out.evals.push(PromptEval { prompt, samples, row });
    }
    Ok(out)
}

/// Runs `n_floor` trajectories per prompt.
pub fn floor_pass(prompts: &[Prompt], sampler: &dyn TrajectorySampler, params: &AllocParams) -> Result<AllocOutcome> {
    let params = params.validated()?;
    evaluate_with(prompts, sampler, &params.ebb()?, |_| params.n_floor)
}

/// `B_eff > 0 ∧ U_EBB ≤ η·B_eff`.
pub fn survivor_mask(rows: &[EvalRow], eta: f64) -> Vec<bool> {
    rows.iter()
        .map(|r| r.b_eff > 0.0 && r.u_ebb <= eta * r.b_eff)
        .collect()
}

pub fn promotion_score(row: &EvalRow, score: &SurrogateScore) -> f64 {
    if !(row.b_eff > 0.0) {
        return 0.0;
    }
    let rho = row.rho.value().unwrap_or(0.0);
    0.45 * rho.clamp(0.0, 2.0) + 0.20 * score.mu_safe + 0.20 * score.sigma_safe + 0.15 * score.margin.clamp(-1.0, 1.0)
}

/// `max(1, ceil(τ·n))`.
pub fn top_up_count(n: usize, tau: f64) -> usize {
    ((tau * n as f64).ceil() as usize).max(1).min(n.max(1))
}

/// Indices chosen for top-up: survivors ranked by promotion score, then the
/// remaining rows by score when fewer than `K_sel` survive. Ties go to the
/// smaller prompt id.
pub fn select_top_up(rows: &[EvalRow], scores: &[SurrogateScore], params: &AllocParams) -> Vec<usize> {
    let mask = survivor_mask(rows, params.eta);
    let s: Vec<f64> = (0..rows.len())
        .map(|i| promotion_score(&rows[i], &scores.get(i).copied().unwrap_or_default()))
        .collect();
    let mut order: Vec<usize> = (0..rows.len()).collect();
    order.sort_by(|&a, &b| {
        mask[b]
            .cmp(&mask[a])
            .then_with(|| s[b].total_cmp(&s[a]))
            .then_with(|| rows[a].prompt_id.cmp(&rows[b].prompt_id))
    });
    order.truncate(top_up_count(rows.len(), params.tau));
    order.sort_unstable();
    order
}

/// Tops up the selected prompts to `n_target` and recomputes their rows
/// over the merged samples. `scores` align with `outcome.evals`.
pub fn top_up(
    mut outcome: AllocOutcome,
    scores: &[SurrogateScore],
    sampler: &dyn TrajectorySampler,
    params: &AllocParams,
) -> Result<AllocOutcome> {
    let params = params.validated()?;
    let ebb = params.ebb()?;
    let rows = outcome.rows();
    let chosen = select_top_up(&rows, scores, &params);
    let extra: Vec<(usize, PromptSamples)> = chosen
        .par_iter()
        .map(|&i| {
            let eval = &outcome.evals[i];
            let start = eval.samples.indices.iter().max().map_or(0, |m| m + 1).max(params.n_floor);
            let need = params.n_target.saturating_sub(eval.samples.len());
            (i, PromptSamples::collect(sampler, &eval.prompt, start..start + need))
        })
        .collect();
    for (i, samples) in extra {
        outcome.failures += samples.failures;
        let eval = &mut outcome.evals[i];
        eval.samples.merge(samples);
        eval.row = eval.samples.row(&eval.prompt.id, &ebb)?;
    }
    Ok(outcome)
}

/// Floor pass followed by top-up. `scores` align with `prompts`.
pub fn evaluate_adaptive(
    prompts: &[Prompt],
    scores: &[SurrogateScore],
    sampler: &dyn TrajectorySampler,
    params: &AllocParams,
) -> Result<AllocOutcome> {
    let floor = floor_pass(prompts, sampler, params)?;
    let aligned: Vec<SurrogateScore> = floor
        .evals
        .iter()
        .map(|e| {
            prompts
                .iter()
                .position(|p| p.id == e.prompt.id)
                .and_then(|i| scores.get(i).copied())
                .unwrap_or_default()
        })
        .collect();
    top_up(floor, &aligned, sampler, params)
}

/// `n_min + round(clip(1 − μ + σ, 0, 1)·(n_max − n_min))`.
pub fn hardness_alloc(score: &SurrogateScore, n_min: usize, n_max: usize) -> usize {
    let hardness = (1.0 - score.mu_safe + score.sigma_safe).clamp(0.0, 1.0);
    n_min + (hardness * n_max.saturating_sub(n_min) as f64).round() as usize
}

/// Evaluates each prompt at its hardness-driven trajectory count.
pub fn evaluate_hardness(
    prompts: &[Prompt],
    scores: &[SurrogateScore],
    sampler: &dyn TrajectorySampler,
    params: &AllocParams,
) -> Result<AllocOutcome> {
    let params = params.validated()?;
    evaluate_with(prompts, sampler, &params.ebb()?, |i| {
        hardness_alloc(&scores.get(i).copied().unwrap_or_default(), params.n_min, params.n_max)
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::auditstats::{det_term, Rho};
    use crate::decoder::StepRecord;

    fn row(id: &str, u: f64, b: f64) -> EvalRow {
        EvalRow {
            prompt_id: id.into(),
            n: 4,
            mean: 0.0,
            var: 0.0,
            range: 0.0,
            r_eff: 1.0,
            u_ebb: u,
            b_eff: b,
            rho: if b > 0.0 { Rho::Valid(u / b) } else { Rho::Invalid },
            certified: u <= b,
        }
    }

    fn prompt(id: &str) -> Prompt {
        Prompt {
            id: id.into(),
            class: "c".into(),
            tokens: vec![1, 2, 3],
            reference: None,
        }
    }

    /// Spend `base + 10·(index mod 5)`; never overspends.
    fn linear_sampler(base: f64) -> impl Fn(&Prompt, usize) -> Result<TrajectoryLog> + Sync {
        move |p: &Prompt, i: usize| {
            Ok(TrajectoryLog {
                prompt_id: p.id.clone(),
                class: p.class.clone(),
                seed: i as u64,
                k: 3.0,
                t_max: 200,
                delta_init: 6.0,
                z: base + 10.0 * (i % 5) as f64,
                final_budget: 594.0,
                steps: vec![StepRecord {
                    t: 0,
                    k_t: 3.0,
                    a_t: 1.0,
                    b_t: 2.0,
                }],
                tokens: vec![0],
                overlap: None,
            })
        }
    }

    #[test]
    fn survivor_boundaries() {
        let rows = [row("a", 650.0, 600.0), row("b", 661.0, 600.0), row("c", 1.0, 0.0), row("d", 660.0, 600.0)];
        assert_eq!(survivor_mask(&rows, 1.10), [true, false, false, true]);
    }

    #[test]
    fn promotion_examples() {
        let s = SurrogateScore::new(0.999, 0.001, 0.2);
        let r = row("a", 0.586 * 600.0, 600.0);
        assert!((promotion_score(&r, &s) - 0.4937).abs() < 1e-4);
        assert_eq!(promotion_score(&row("a", 10.0, 0.0), &s), 0.0);
        let clipped = promotion_score(&row("a", 1800.0, 600.0), &SurrogateScore::new(0.0, 0.0, 0.0));
        assert!((clipped - 0.90).abs() < 1e-12);
    }

    #[test]
    fn hardness_examples() {
        assert_eq!(hardness_alloc(&SurrogateScore::new(0.999, 0.0005, 0.0), 4, 20), 4);
        assert_eq!(hardness_alloc(&SurrogateScore::new(0.0, 0.0, 0.0), 4, 20), 20);
        assert_eq!(hardness_alloc(&SurrogateScore::new(0.5, 0.0, 0.0), 4, 20), 12);
    }

    #[test]
    fn survivors_rank_first_then_fill() {
        let rows = [row("a", 900.0, 600.0), row("b", 100.0, 600.0), row("c", 5.0, 0.0), row("d", 800.0, 600.0)];
        let params = AllocParams {
            tau: 0.75,
            ..AllocParams::default()
        };
        assert_eq!(select_top_up(&rows, &[SurrogateScore::UNTRAINED; 4], &params), vec![0, 1, 3]);
        let dead = [row("a", 5.0, 0.0), row("b", 5.0, 0.0), row("c", 5.0, 0.0)];
        assert_eq!(select_top_up(&dead, &[SurrogateScore::UNTRAINED; 3], &params), vec![0, 1, 2]);
    }

    #[test]
    fn top_up_count_rule() {
        assert_eq!(top_up_count(8, 0.5), 4);
        assert_eq!(top_up_count(1, 0.5), 1);
        assert_eq!(top_up_count(5, 0.5), 3);
        assert_eq!(top_up_count(3, 0.01), 1);
    }

    #[test]
    fn ties_break_by_prompt_id() {
        let rows = [row("b", 100.0, 600.0), row("a", 100.0, 600.0), row("c", 100.0, 600.0)];
        let params = AllocParams {
            tau: 0.34,
            ..AllocParams::default()
        };
        let picked = select_top_up(&rows, &[SurrogateScore::UNTRAINED; 3], &params);
        assert_eq!(picked, vec![0, 1]);
    }

    #[test]
    fn adaptive_pattern_and_merge() {
        let prompts: Vec<Prompt> = (0..8).map(|i| prompt(&format!("p{i}"))).collect();
        let sampler = linear_sampler(190.0);
        let params = AllocParams::default();
        let out = evaluate_adaptive(&prompts, &[SurrogateScore::UNTRAINED; 8], &sampler, &params).unwrap();
        let at20 = out.evals.iter().filter(|e| e.row.n == 20).count();
        let at4 = out.evals.iter().filter(|e| e.row.n == 4).count();
        assert_eq!((at20, at4), (4, 4));
        for e in out.evals.iter().filter(|e| e.row.n == 20) {
            assert_eq!(e.samples.indices, (0..20).collect::<Vec<_>>());
            let direct = EvalRow::from_trajectories(
                &e.prompt.id,
                &e.samples.spends,
                &e.samples.final_budgets,
                &params.ebb().unwrap(),
            )
            .unwrap();
            assert!((direct.u_ebb - e.row.u_ebb).abs() < 1e-9);
        }
    }

    #[test]
    fn zero_divergence_floor_row() {
        let sampler = |p: &Prompt, i: usize| {
            let mut log = linear_sampler(0.0)(p, i)?;
            log.z = 0.0;
            Ok(log)
        };
        let params = AllocParams::default();
        let out = floor_pass(&[prompt("z")], &sampler, &params).unwrap();
        let r = &out.evals[0].row;
        assert_eq!(r.n, 4);
        assert_eq!(r.u_ebb, det_term(1.0, 4, 0.0033));
        assert_eq!(r.b_eff, 594.0);
        assert!(r.certified);
    }

    #[test]
    fn failures_are_counted_and_excluded() {
        let sampler = |p: &Prompt, i: usize| {
            if p.id == "bad" || i == 1 {
                Err(Error::InvalidArgument("boom".into()))
            } else {
                linear_sampler(100.0)(p, i)
            }
        };
        let out = floor_pass(&[prompt("good"), prompt("bad")], &sampler, &AllocParams::default()).unwrap();
        assert_eq!(out.evals.len(), 1);
        assert_eq!(out.evals[0].row.n, 3);
        assert_eq!(out.excluded, ["bad"]);
        assert_eq!(out.failures, 5);
    }

    #[test]
    fn single_prompt_full_top_up() {
        let params = AllocParams {
            tau: 1.0,
            ..AllocParams::default()
        };
        let out = evaluate_adaptive(&[prompt("only")], &[], &linear_sampler(50.0), &params).unwrap();
        assert_eq!(out.evals[0].row.n, 20);
    }

    #[test]
    fn params_validation() {
        let p = AllocParams {
            n_floor: 1,
            ..AllocParams::default()
        };
        assert_eq!(p.validated().unwrap().n_floor, 2);
        assert!(AllocParams { tau: 0.0, ..AllocParams::default() }.validated().is_err());
        assert!(AllocParams { eta: 0.9, ..AllocParams::default() }.validated().is_err());
        assert!(AllocParams { n_min: 30, ..AllocParams::default() }.validated().is_err());
    }
}
