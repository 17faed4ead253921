//! Banked KL-budget decoding.
//!
//! Each step receives a budget
//!
//! ```text
//! k_t = max(0, (t+1)·k − Σ_{i<t} a_i − δ_init)
//! ```
//!
//! so unspent budget carries forward and the prompt's prefix debt `δ_init`
//! is paid up front. The realized spend `a_t = KL(p_θ ‖ p_s)` comes from the
//! θ solver in [`crate::probcore`].

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::harness::fnv1a64;
use crate::overlap::{ngram_jaccard, rouge_l, TokenSeq};
use crate::probcore::{default_tolerance, FusionProblem, ProbVec};

/// A stream of safe/risky next-token distribution pairs.
///
/// One instance drives one trajectory.
pub trait ModelPairSource {
    fn vocab_size(&self) -> usize;

    /// Teacher-forced pair at prompt position `position`.
    fn prompt_pair(&mut self, prompt: &[u32], position: usize) -> Result<FusionProblem>;

    /// Pair for the next generated token; `None` signals end of sequence.
    fn next_pair(&mut self, prompt: &[u32], generated: &[u32]) -> Result<Option<FusionProblem>>;

    /// Nats added to every recorded step spend (fault injection). Sampling is
    /// unaffected.
    fn injected_overspend(&self) -> f64 {
        0.0
    }

    fn token_text(&self, id: u32) -> String {
        format!("t{id}")
    }
}

impl<S: ModelPairSource + ?Sized> ModelPairSource for Box<S> {
    fn vocab_size(&self) -> usize {
        (**self).vocab_size()
    }

    fn prompt_pair(&mut self, prompt: &[u32], position: usize) -> Result<FusionProblem> {
        (**self).prompt_pair(prompt, position)
    }

    fn next_pair(&mut self, prompt: &[u32], generated: &[u32]) -> Result<Option<FusionProblem>> {
        (**self).next_pair(prompt, generated)
    }

    fn injected_overspend(&self) -> f64 {
        (**self).injected_overspend()
    }

    fn token_text(&self, id: u32) -> String {
        (**self).token_text(id)
    }
}

/// Banking parameters: per-token budget `k`, horizon `t_max`, prefix-debt window.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BankConfig {
    pub k: f64,
    pub t_max: usize,
    pub prefix_window: usize,
}

impl BankConfig {
    pub fn new(k: f64, t_max: usize, prefix_window: usize) -> Result<Self> {
        if !(k.is_finite() && k > 0.0) {
            return Err(Error::InvalidArgument(format!("per-token budget must be > 0, got {k}")));
        }
        if t_max == 0 {
            return Err(Error::InvalidArgument("t_max must be >= 1".into()));
        }
        Ok(Self {
            k,
            t_max,
            prefix_window,
        })
    }

    /// Sequence budget `K = k · t_max`.
    pub fn sequence_budget(&self) -> f64 {
        self.k * self.t_max as f64
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct BankState {
    pub t: usize,
    pub cum_spend: f64,
    pub delta_init: f64,
    /// `Σ max(0, a_i − k_i)`.
    pub overspend: f64,
}

impl BankState {
    pub fn new(delta_init: f64) -> Self {
        Self {
            delta_init,
            ..Self::default()
        }
    }

    pub fn step_budget(&self, cfg: &BankConfig) -> f64 {
        ((self.t + 1) as f64 * cfg.k - self.cum_spend - self.delta_init).max(0.0)
    }

    /// Books spend `a_t` against budget `k_t` and advances to the next step.
    pub fn record(&mut self, step_budget: f64, spend: f64) {
        self.cum_spend += spend;
        self.overspend += (spend - step_budget).max(0.0);
        self.t += 1;
    }
}

/// A prompt as seen by the decoder.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Prompt {
    pub id: String,
    pub class: String,
    pub tokens: Vec<u32>,
    /// Reference continuation for overlap diagnostics, if any.
    #[serde(default)]
    pub reference: Option<String>,
}

impl Prompt {
    /// Encodes lowercased whitespace words as 32-bit FNV-1a ids.
    pub fn from_text(id: impl Into<String>, class: impl Into<String>, text: &str) -> Self {
        Self {
            id: id.into(),
            class: class.into(),
            tokens: encode_words(text),
            reference: None,
        }
    }

    pub fn with_reference(mut self, reference: impl Into<String>) -> Self {
        self.reference = Some(reference.into());
        self
    }
}

pub fn encode_words(text: &str) -> Vec<u32> {
    TokenSeq::from_text(text)
        .tokens()
        .iter()
        .map(|w| fnv1a64(w.as_bytes()) as u32)
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct StepRecord {
    pub t: usize,
    pub k_t: f64,
    pub a_t: f64,
    pub b_t: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct OverlapMetrics {
    pub rouge_l: f64,
    pub jaccard5: f64,
}

/// One decoding run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrajectoryLog {
    pub prompt_id: String,
    pub class: String,
    pub seed: u64,
    pub k: f64,
    pub t_max: usize,
    pub delta_init: f64,
    #[serde(rename = "Z")]
    pub z: f64,
    pub final_budget: f64,
    pub steps: Vec<StepRecord>,
    pub tokens: Vec<u32>,
    pub overlap: Option<OverlapMetrics>,
}

/// Teacher-forced prefix debt: `Σ KL(p_r ‖ p_s)` over the last `min(n, len)`
/// prompt positions.
pub fn prefix_debt<S: ModelPairSource + ?Sized>(source: &mut S, prompt: &[u32], window: usize) -> Result<f64> {
    if prompt.is_empty() {
        return Err(Error::InvalidArgument("prompt must contain at least one token".into()));
    }
    let start = prompt.len() - window.min(prompt.len());
    let mut debt = 0.0;
    for position in start..prompt.len() {
        debt += source.prompt_pair(prompt, position)?.full_kl();
    }
    Ok(debt)
}

/// `K − δ_init − overspend`; equals `K − δ_init` whenever every step stayed
/// within its budget.
pub fn final_budget(cfg: &BankConfig, delta_init: f64, overspend: f64) -> f64 {
    cfg.sequence_budget() - delta_init - overspend
}

/// Overspend recomputed from a finished log.
pub fn log_overspend(log: &TrajectoryLog) -> f64 {
    log.steps.iter().map(|s| (s.a_t - s.k_t).max(0.0)).sum()
}

/// Inverse-CDF draw from `p` using one uniform variate.
pub fn sample_index(p: &ProbVec, rng: &mut impl Rng) -> u32 {
    let u: f64 = rng.random();
    let mut cum = 0.0;
    for (i, lp) in p.log_probs().iter().enumerate() {
        cum += lp.exp();
        if u < cum {
            return i as u32;
        }
    }
    (p.len() - 1) as u32
}

/// Runs one banked trajectory. Solver failures abort the trajectory.
pub fn decode_trajectory<S: ModelPairSource + ?Sized>(
    source: &mut S,
    prompt: &Prompt,
    seed: u64,
    cfg: &BankConfig,
) -> Result<TrajectoryLog> {
    let delta_init = prefix_debt(source, &prompt.tokens, cfg.prefix_window)?;
    let fault = source.injected_overspend();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut state = BankState::new(delta_init);
    let mut steps = Vec::with_capacity(cfg.t_max);
    let mut tokens = Vec::with_capacity(cfg.t_max);

    while state.t < cfg.t_max {
        let Some(problem) = source.next_pair(&prompt.tokens, &tokens)? else {
            break;
        };
        let k_t = state.step_budget(cfg);
        let solution = problem.solve_theta(k_t, Some(default_tolerance(k_t)))?;
        let controlled = problem.geodesic(solution.theta)?;
        tokens.push(sample_index(&controlled, &mut rng));

        let t = state.t;
        let a_t = solution.realized_kl + fault;
        state.record(k_t, a_t);
        let b_t = (t + 1) as f64 * cfg.k - state.cum_spend - delta_init;
        steps.push(StepRecord { t, k_t, a_t, b_t });
    }

    let z = steps.iter().map(|s| s.a_t).sum();
    let overlap = prompt.reference.as_ref().map(|reference| {
        let generated = tokens
            .iter()
            .map(|&id| source.token_text(id))
            .collect::<Vec<_>>()
            .join(" ");
        let cand = TokenSeq::from_text(&generated);
        let reference = TokenSeq::from_text(reference);
        OverlapMetrics {
            rouge_l: rouge_l(&cand, &reference),
            jaccard5: ngram_jaccard(&cand, &reference, 5),
        }
    });

    Ok(TrajectoryLog {
        prompt_id: prompt.id.clone(),
        class: prompt.class.clone(),
        seed,
        k: cfg.k,
        t_max: cfg.t_max,
        delta_init,
        z,
        final_budget: final_budget(cfg, delta_init, state.overspend),
        steps,
        tokens,
        overlap,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    /// Every pair has the same unconstrained spend; prompt positions use
    /// their own constant.
    struct Scripted {
        gen_pair: FusionProblem,
        prompt_pair: FusionProblem,
        fault: f64,
    }

    fn pair_with_kl(target: f64) -> FusionProblem {
        let safe = ProbVec::from_probs(&[0.25; 4]).unwrap();
        if target == 0.0 {
            return FusionProblem::new(safe.clone(), safe).unwrap();
        }
        let tilt = ProbVec::from_logits(&[12.0, 0.0, 0.0, 0.0]).unwrap();
        let wide = FusionProblem::new(safe.clone(), tilt).unwrap();
        let sol = wide.solve_theta(target, Some(1e-12)).unwrap();
        FusionProblem::new(safe, wide.geodesic(sol.theta).unwrap()).unwrap()
    }

    impl Scripted {
        fn new(gen_kl: f64, prompt_kl: f64) -> Self {
            Self {
                gen_pair: pair_with_kl(gen_kl),
                prompt_pair: pair_with_kl(prompt_kl),
                fault: 0.0,
            }
        }
    }

    impl ModelPairSource for Scripted {
        fn vocab_size(&self) -> usize {
            4
        }
        fn prompt_pair(&mut self, _: &[u32], _: usize) -> Result<FusionProblem> {
            Ok(self.prompt_pair.clone())
        }
        fn next_pair(&mut self, _: &[u32], _: &[u32]) -> Result<Option<FusionProblem>> {
            Ok(Some(self.gen_pair.clone()))
        }
        fn injected_overspend(&self) -> f64 {
            self.fault
        }
    }

    fn prompt(len: usize) -> Prompt {
        Prompt {
            id: "p".into(),
            class: "test".into(),
            tokens: vec![1; len],
            reference: None,
        }
    }

    #[test]
    fn prefix_debt_cases() {
        let mut src = Scripted::new(0.5, 1.1);
        assert_eq!(prefix_debt(&mut src, &[1, 2, 3], 0).unwrap(), 0.0);
        assert!((prefix_debt(&mut src, &[1; 8], 5).unwrap() - 5.5).abs() < 1e-9);
        // Window longer than the prompt only covers the prompt.
        assert!((prefix_debt(&mut src, &[1; 3], 5).unwrap() - 3.3).abs() < 1e-9);
        let mut same = Scripted::new(0.0, 0.0);
        assert_eq!(prefix_debt(&mut same, &[1; 8], 5).unwrap(), 0.0);
        assert!(prefix_debt(&mut src, &[], 5).is_err());
    }

    #[test]
    fn step_budget_cases() {
        let cfg = BankConfig::new(3.0, 200, 5).unwrap();
        assert_eq!(BankState::new(0.0).step_budget(&cfg), 3.0);
        assert_eq!(BankState::new(5.0).step_budget(&cfg), 0.0);
        let state = BankState {
            t: 4,
            cum_spend: 10.0,
            delta_init: 2.0,
            overspend: 0.0,
        };
        assert_eq!(state.step_budget(&cfg), 3.0);
    }

    #[test]
    fn bank_config_validation() {
        assert!(BankConfig::new(0.0, 10, 5).is_err());
        assert!(BankConfig::new(3.0, 0, 5).is_err());
        assert_eq!(BankConfig::new(3.0, 200, 5).unwrap().sequence_budget(), 600.0);
    }

    #[test]
    fn identical_models_spend_nothing() {
        let cfg = BankConfig::new(3.0, 50, 5).unwrap();
        let mut src = Scripted::new(0.0, 0.0);
        let log = decode_trajectory(&mut src, &prompt(10), 1, &cfg).unwrap();
        assert_eq!(log.z, 0.0);
        assert_eq!(log.final_budget, 150.0);
        assert!(log.steps.iter().all(|s| s.a_t == 0.0));
    }

    #[test]
    fn unconstrained_profile_spends_its_kl() {
        let cfg = BankConfig::new(3.0, 40, 0).unwrap();
        let mut src = Scripted::new(0.5, 0.0);
        let log = decode_trajectory(&mut src, &prompt(4), 9, &cfg).unwrap();
        for s in &log.steps {
            assert!((s.a_t - 0.5).abs() < 1e-9);
        }
        assert!((log.z - 20.0).abs() < 1e-7);
    }

    #[test]
    fn burst_saturates_the_bank() {
        let cfg = BankConfig::new(0.5, 200, 5).unwrap();
        let mut src = Scripted::new(1.2, 0.3);
        let log = decode_trajectory(&mut src, &prompt(10), 3, &cfg).unwrap();
        let delta = log.delta_init;
        assert!((delta - 1.5).abs() < 1e-9);
        let tol_total = 200.0 * default_tolerance(cfg.k);
        for s in &log.steps {
            assert!((s.a_t - s.k_t).abs() <= default_tolerance(s.k_t));
        }
        assert!((log.z - (cfg.sequence_budget() - delta)).abs() <= tol_total);
        // The remaining bank at the last step is drained.
        assert!(log.steps.last().unwrap().b_t.abs() <= tol_total);
        assert!((log.final_budget - (cfg.sequence_budget() - delta)).abs() <= tol_total);
    }

    #[test]
    fn remaining_budget_recurrence() {
        let cfg = BankConfig::new(0.4, 60, 3).unwrap();
        let mut src = Scripted::new(0.7, 0.2);
        let log = decode_trajectory(&mut src, &prompt(6), 5, &cfg).unwrap();
        for w in log.steps.windows(2) {
            let expect = w[0].b_t + cfg.k - w[1].a_t;
            assert!((w[1].b_t - expect).abs() < 1e-9);
        }
        let sum: f64 = log.steps.iter().map(|s| s.a_t).sum();
        assert!((sum - log.z).abs() < 1e-9);
    }

    #[test]
    fn fault_injection_goes_negative() {
        assert_eq!(final_budget(&BankConfig::new(3.0, 200, 5).unwrap(), 5.0, 700.0), -105.0);

        let cfg = BankConfig::new(3.0, 200, 0).unwrap();
        let mut src = Scripted::new(0.5, 0.0);
        src.fault = 4.0;
        let log = decode_trajectory(&mut src, &prompt(3), 2, &cfg).unwrap();
        assert!(log.final_budget < 0.0);
        assert!((log.final_budget - (600.0 - log_overspend(&log))).abs() < 1e-6);
    }

    #[test]
    fn final_budget_matches_heldout_rows() {
        let cfg = BankConfig::new(3.0, 200, 5).unwrap();
        assert!((final_budget(&cfg, 6.51, 0.0) - 593.49).abs() < 1e-9);
        assert!((final_budget(&cfg, 4.50, 0.0) - 595.50).abs() < 1e-9);
    }

    #[test]
    fn decoding_is_deterministic() {
        let cfg = BankConfig::new(0.3, 80, 5).unwrap();
        let a = decode_trajectory(&mut Scripted::new(0.6, 0.2), &prompt(8), 11, &cfg).unwrap();
        let b = decode_trajectory(&mut Scripted::new(0.6, 0.2), &prompt(8), 11, &cfg).unwrap();
        assert_eq!(a, b);
        let c = decode_trajectory(&mut Scripted::new(0.6, 0.2), &prompt(8), 12, &cfg).unwrap();
        assert_ne!(a.tokens, c.tokens);
    }

    #[test]
    fn sampler_covers_the_support() {
        let p = ProbVec::from_probs(&[0.5, 0.3, 0.2]).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut counts = [0usize; 3];
        for _ in 0..30_000 {
            counts[sample_index(&p, &mut rng) as usize] += 1;
        }
        assert!((counts[0] as f64 / 30_000.0 - 0.5).abs() < 0.02);
        assert!((counts[2] as f64 / 30_000.0 - 0.2).abs() < 0.02);
    }
}
