//! Synthetic safe/risky model pairs.
//!
//! Profiles are specified in unconstrained-KL space: at every position the
//! source builds a random safe distribution `p_s`, a sharply tilted
//! distribution `p_tilt`, and places `p_r` on the geodesic between them at
//! the θ whose spend `KL(p_r ‖ p_s)` hits the profile target.
//!
//! Pairs depend only on `(seed, phase, position)`, never on sampled tokens,
//! so a recorded stream replays verbatim under any sampling seed.

use std::io::{BufRead, BufReader, Read, Write};
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Gamma, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::decoder::ModelPairSource;
use crate::error::{Error, Result};
use crate::probcore::{FusionProblem, ProbVec};

/// Targets must stay this far below `ln V`.
pub const REACHABILITY_MARGIN: f64 = 0.05;

const TILT_LOGIT: f64 = 40.0;
const SAFE_LOGIT_SCALE: f64 = 0.5;

/// Vocabulary used to render synthetic token ids as words.
pub const WORDS: &[&str] = &[
    "the", "of", "and", "to", "in", "was", "he", "that", "it", "his", "her", "with", "as", "had", "for", "she",
    "you", "not", "on", "at", "but", "be", "they", "said", "him", "from", "by", "all", "were", "this", "have",
    "one", "so", "what", "there", "would", "them", "no", "out", "into", "could", "up", "when", "their", "then",
    "who", "if", "been", "more", "do", "about", "down", "over", "only", "little", "now", "time", "like",
    "before", "back", "know", "very", "old", "made", "after", "eyes", "again", "door", "room", "face", "hand",
    "night", "house", "voice", "away", "never", "thought", "looked", "long", "still", "through", "light",
    "window", "heard", "felt", "head", "moment", "turned", "asked", "quite", "nothing", "something", "other",
    "last", "young", "street", "morning", "wall", "father", "mother", "letter", "garden", "silence", "winter",
    "shadow", "river", "paper", "glass", "stone", "ship", "train", "clock", "forest", "island", "storm",
    "secret", "castle", "dream", "mirror", "candle", "bridge", "lantern", "orchard", "whisper", "harbor",
    "meadow", "ember",
];

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Profile {
    Identical,
    Constant { kl: f64 },
    /// Linear from `start` at step 0 to `end` at step `steps − 1`.
    Ramp { start: f64, end: f64, steps: usize },
    /// `height` every `period` steps, zero in between.
    Burst { period: usize, height: f64 },
    /// Independent Dirichlet(`concentration`) draws for both distributions.
    SeededRandom { concentration: f64 },
}

impl Profile {
    /// Target spend at generation step `t`; `None` for unscripted profiles.
    pub fn target(&self, t: usize) -> Option<f64> {
        match *self {
            Profile::Identical => Some(0.0),
            Profile::Constant { kl } => Some(kl),
            Profile::Ramp { start, end, steps } => {
                let frac = if steps <= 1 {
                    0.0
                } else {
                    (t.min(steps - 1)) as f64 / (steps - 1) as f64
                };
                Some(start + (end - start) * frac)
            }
            Profile::Burst { period, height } => Some(if t % period == 0 { height } else { 0.0 }),
            Profile::SeededRandom { .. } => None,
        }
    }

    fn max_target(&self) -> f64 {
        match *self {
            Profile::Identical | Profile::SeededRandom { .. } => 0.0,
            Profile::Constant { kl } => kl,
            Profile::Ramp { start, end, .. } => start.max(end),
            Profile::Burst { height, .. } => height,
        }
    }

    fn min_target(&self) -> f64 {
        match *self {
            Profile::Identical | Profile::SeededRandom { .. } => 0.0,
            Profile::Constant { kl } => kl,
            Profile::Ramp { start, end, .. } => start.min(end),
            Profile::Burst { height, .. } => height.min(0.0),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct FaultSpec {
    pub enabled: bool,
    pub overspend_per_step: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SyntheticSpec {
    pub vocab_size: usize,
    pub profile: Profile,
    pub seed: u64,
    /// Unconstrained spend at every teacher-forced prompt position.
    #[serde(default)]
    pub prefix_kl: f64,
    #[serde(default)]
    pub fault: FaultSpec,
}

impl SyntheticSpec {
    pub fn new(vocab_size: usize, profile: Profile, seed: u64) -> Self {
        Self {
            vocab_size,
            profile,
            seed,
            prefix_kl: 0.0,
            fault: FaultSpec::default(),
        }
    }

    pub fn with_prefix_kl(mut self, prefix_kl: f64) -> Self {
        self.prefix_kl = prefix_kl;
        self
    }

    pub fn with_fault(mut self, overspend_per_step: f64) -> Self {
        self.fault = FaultSpec {
            enabled: true,
            overspend_per_step,
        };
        self
    }

    pub fn validate(&self) -> Result<()> {
        if self.vocab_size < 2 {
            return Err(Error::InvalidSpec(format!("vocab size must be >= 2, got {}", self.vocab_size)));
        }
        let ceiling = (self.vocab_size as f64).ln() - REACHABILITY_MARGIN;
        let lo = self.profile.min_target().min(self.prefix_kl);
        let hi = self.profile.max_target().max(self.prefix_kl);
        if !(lo >= 0.0) || !hi.is_finite() {
            return Err(Error::InvalidSpec("KL targets must be finite and >= 0".into()));
        }
        if hi > ceiling {
            return Err(Error::InvalidSpec(format!(
                "KL target {hi} unreachable for vocab {} (ceiling {ceiling:.4})",
                self.vocab_size
            )));
        }
        match self.profile {
            Profile::Burst { period: 0, .. } => {
                return Err(Error::InvalidSpec("burst period must be >= 1".into()))
            }
            Profile::SeededRandom { concentration } if !(concentration > 0.0) => {
                return Err(Error::InvalidSpec("Dirichlet concentration must be > 0".into()))
            }
            _ => {}
        }
        if self.fault.enabled && !(self.fault.overspend_per_step >= 0.0) {
            return Err(Error::InvalidSpec("fault overspend must be >= 0".into()));
        }
        Ok(())
    }
}

/// Source driven by a [`SyntheticSpec`].
#[derive(Debug, Clone)]
pub struct SyntheticSource {
    spec: SyntheticSpec,
}

pub fn make_source(spec: SyntheticSpec) -> Result<SyntheticSource> {
    spec.validate()?;
    Ok(SyntheticSource { spec })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Phase {
    Prompt,
    Gen,
}

fn splitmix64(mut x: u64) -> u64 {
    x = x.wrapping_add(0x9e37_79b9_7f4a_7c15);
    x = (x ^ (x >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    x = (x ^ (x >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    x ^ (x >> 31)
}

fn position_rng(seed: u64, phase: Phase, position: usize) -> ChaCha8Rng {
    let tag = match phase {
        Phase::Prompt => 0x5052_4f4d_5054u64,
        Phase::Gen => 0x0047_454eu64,
    };
    let mixed = splitmix64(splitmix64(seed ^ tag).wrapping_add(position as u64));
    ChaCha8Rng::seed_from_u64(mixed)
}

fn dirichlet(rng: &mut ChaCha8Rng, dim: usize, concentration: f64) -> Result<ProbVec> {
    let gamma = Gamma::new(concentration, 1.0).map_err(|e| Error::InvalidSpec(e.to_string()))?;
    let weights: Vec<f64> = (0..dim)
        .map(|_| gamma.sample(rng).max(f64::MIN_POSITIVE))
        .collect();
    ProbVec::from_probs(&weights)
}

/// Builds a pair whose unconstrained spend equals `target`.
pub fn pair_with_target(rng: &mut ChaCha8Rng, vocab_size: usize, target: f64) -> Result<FusionProblem> {
    let logits: Vec<f64> = (0..vocab_size)
        .map(|_| SAFE_LOGIT_SCALE * rng.sample::<f64, _>(StandardNormal))
        .collect();
    let safe = ProbVec::from_logits(&logits)?;
    if target == 0.0 {
        return FusionProblem::new(safe.clone(), safe);
    }

    let mut tilt_token = rng.random_range(0..vocab_size);
    if -safe.log_probs()[tilt_token] < target + REACHABILITY_MARGIN {
        tilt_token = safe
            .log_probs()
            .iter()
            .enumerate()
            .min_by(|a, b| a.1.total_cmp(b.1))
            .map(|(i, _)| i)
            .unwrap_or(0);
    }
    let mut tilted = safe.log_probs().to_vec();
    tilted[tilt_token] += TILT_LOGIT;
    let wide = FusionProblem::new(safe.clone(), ProbVec::from_logits(&tilted)?)?;
    let solution = wide.solve_theta(target, Some(1e-10 * target.max(1.0)))?;
    FusionProblem::new(safe, wide.geodesic(solution.theta)?)
}

impl SyntheticSource {
    pub fn spec(&self) -> &SyntheticSpec {
        &self.spec
    }

    /// The pair served at `(phase, position)`.
    pub fn pair_at(&self, phase: Phase, position: usize) -> Result<FusionProblem> {
        let mut rng = position_rng(self.spec.seed, phase, position);
        let v = self.spec.vocab_size;
        match (phase, self.spec.profile) {
            (Phase::Gen, Profile::SeededRandom { concentration }) => {
                let safe = dirichlet(&mut rng, v, concentration)?;
                let risky = dirichlet(&mut rng, v, concentration)?;
                FusionProblem::new(safe, risky)
            }
            (Phase::Gen, profile) => {
                let target = profile.target(position).unwrap_or(0.0);
                pair_with_target(&mut rng, v, target)
            }
            (Phase::Prompt, _) => pair_with_target(&mut rng, v, self.spec.prefix_kl),
        }
    }
}

impl ModelPairSource for SyntheticSource {
    fn vocab_size(&self) -> usize {
        self.spec.vocab_size
    }

    fn prompt_pair(&mut self, _prompt: &[u32], position: usize) -> Result<FusionProblem> {
        self.pair_at(Phase::Prompt, position)
    }

    fn next_pair(&mut self, _prompt: &[u32], generated: &[u32]) -> Result<Option<FusionProblem>> {
        self.pair_at(Phase::Gen, generated.len()).map(Some)
    }

    fn injected_overspend(&self) -> f64 {
        if self.spec.fault.enabled {
            self.spec.fault.overspend_per_step
        } else {
            0.0
        }
    }

    fn token_text(&self, id: u32) -> String {
        WORDS[id as usize % WORDS.len()].to_string()
    }
}

/// One line of a replay file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReplayRecord {
    pub phase: Phase,
    pub pos: usize,
    pub logp_s: Vec<f64>,
    pub logp_r: Vec<f64>,
}

impl ReplayRecord {
    fn from_problem(phase: Phase, pos: usize, problem: &FusionProblem) -> Self {
        Self {
            phase,
            pos,
            logp_s: problem.safe().log_probs().to_vec(),
            logp_r: problem.risky().log_probs().to_vec(),
        }
    }

    fn to_problem(&self) -> Result<FusionProblem> {
        FusionProblem::new(
            ProbVec::from_log_probs(self.logp_s.clone())?,
            ProbVec::from_log_probs(self.logp_r.clone())?,
        )
    }
}

/// Wraps a source and records every pair it serves.
pub struct RecordingSource<S> {
    inner: S,
    records: Vec<ReplayRecord>,
}

impl<S: ModelPairSource> RecordingSource<S> {
    pub fn new(inner: S) -> Self {
        Self {
            inner,
            records: Vec::new(),
        }
    }

    pub fn records(&self) -> &[ReplayRecord] {
        &self.records
    }

    pub fn write_jsonl<W: Write>(&self, mut out: W) -> Result<()> {
        for record in &self.records {
            serde_json::to_writer(&mut out, record)?;
            out.write_all(b"\n")?;
        }
        Ok(())
    }
}

impl<S: ModelPairSource> ModelPairSource for RecordingSource<S> {
    fn vocab_size(&self) -> usize {
        self.inner.vocab_size()
    }

    fn prompt_pair(&mut self, prompt: &[u32], position: usize) -> Result<FusionProblem> {
        let problem = self.inner.prompt_pair(prompt, position)?;
        self.records
            .push(ReplayRecord::from_problem(Phase::Prompt, position, &problem));
        Ok(problem)
    }

    fn next_pair(&mut self, prompt: &[u32], generated: &[u32]) -> Result<Option<FusionProblem>> {
        let problem = self.inner.next_pair(prompt, generated)?;
        if let Some(p) = &problem {
            self.records
                .push(ReplayRecord::from_problem(Phase::Gen, generated.len(), p));
        }
        Ok(problem)
    }

    fn injected_overspend(&self) -> f64 {
        self.inner.injected_overspend()
    }

    fn token_text(&self, id: u32) -> String {
        self.inner.token_text(id)
    }
}

/// Serves recorded pairs verbatim. Generation ends after the last recorded step.
#[derive(Debug, Clone)]
pub struct ReplaySource {
    vocab_size: usize,
    prompt: Vec<Option<FusionProblem>>,
    gen: Vec<FusionProblem>,
}

pub fn replay_source(path: impl AsRef<Path>) -> Result<ReplaySource> {
    ReplaySource::from_reader(std::fs::File::open(path)?)
}

impl ReplaySource {
    pub fn from_reader<R: Read>(reader: R) -> Result<Self> {
        let mut vocab_size = None;
        let mut prompt: Vec<Option<FusionProblem>> = Vec::new();
        let mut gen = Vec::new();
        for (idx, line) in BufReader::new(reader).lines().enumerate() {
            let line_no = idx + 1;
            let line = line?;
            if line.trim().is_empty() {
                continue;
            }
            let parse_err = |message: String| Error::Parse {
                line: line_no,
                message,
            };
            let record: ReplayRecord = serde_json::from_str(&line).map_err(|e| parse_err(e.to_string()))?;
            let problem = record.to_problem().map_err(|e| parse_err(e.to_string()))?;
            let v = *vocab_size.get_or_insert(problem.vocab_size());
            if problem.vocab_size() != v {
                return Err(parse_err(format!("vocab size {} differs from {v}", problem.vocab_size())));
            }
            match record.phase {
                Phase::Prompt => {
                    if prompt.len() <= record.pos {
                        prompt.resize(record.pos + 1, None);
                    }
                    prompt[record.pos] = Some(problem);
                }
                Phase::Gen => {
                    if record.pos != gen.len() {
                        return Err(parse_err(format!(
                            "generation step {} out of order (expected {})",
                            record.pos,
                            gen.len()
                        )));
                    }
                    gen.push(problem);
                }
            }
        }
        let vocab_size = vocab_size.ok_or_else(|| Error::Parse {
            line: 0,
            message: "empty replay file".into(),
        })?;
        Ok(Self {
            vocab_size,
            prompt,
            gen,
        })
    }

    pub fn generation_len(&self) -> usize {
        self.gen.len()
    }
}

impl ModelPairSource for ReplaySource {
    fn vocab_size(&self) -> usize {
        self.vocab_size
    }

    fn prompt_pair(&mut self, _prompt: &[u32], position: usize) -> Result<FusionProblem> {
        self.prompt
            .get(position)
            .and_then(Clone::clone)
            .ok_or_else(|| Error::InvalidArgument(format!("no recorded prompt pair at position {position}")))
    }

    fn next_pair(&mut self, _prompt: &[u32], generated: &[u32]) -> Result<Option<FusionProblem>> {
        Ok(self.gen.get(generated.len()).cloned())
    }

    fn token_text(&self, id: u32) -> String {
        WORDS[id as usize % WORDS.len()].to_string()
    }
}
