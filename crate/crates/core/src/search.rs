//! Adversarial prompt search.
//!
//! Each generation proposes mutation and crossover children of the archive,
//! filters them for duplicates, length and diversity, screens them with a
//! cheap surrogate, evaluates the best at medium fidelity, tops up the
//! strongest survivors, and folds the results back into a diversity-aware
//! archive via a greedy k-DPP.

use std::collections::HashSet;

use nalgebra::DMatrix;
use rand::seq::IndexedRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::allocator::{
    evaluate_adaptive, evaluate_hardness, evaluate_with, survivor_mask, AllocOutcome, AllocParams, PromptSamples,
    SurrogateScore, TrajectorySampler,
};
use crate::auditstats::{EvalRow, Rho};
use crate::decoder::Prompt;
use crate::error::{Error, Result};
use crate::harness::fnv1a64;
use crate::overlap::{ngram_jaccard, TokenSeq};

pub const FEATURE_DIM: usize = 512;
pub const ENSEMBLE_SIZE: usize = 5;
const FEATURE_HASH_SEED: u64 = 0x6b6e_6166_2d66_6561;
const ENSEMBLE_SEED: u64 = 0x6b6e_6166_2d65_6e73;
const RIDGE_LAMBDA: f64 = 1e-2;
const DPP_GAIN_EPS: f64 = 1e-9;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Origin {
    Init,
    Mutation,
    Crossover,
    Fallback,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Candidate {
    pub id: String,
    pub text: String,
    pub lineage: Vec<String>,
    pub generation: usize,
    pub origin: Origin,
}

impl Candidate {
    pub fn seed(id: impl Into<String>, text: impl Into<String>) -> Self {
        Self {
            id: id.into(),
            text: text.into(),
            lineage: Vec::new(),
            generation: 0,
            origin: Origin::Init,
        }
    }

    pub fn to_prompt(&self, class: &str) -> Prompt {
        Prompt::from_text(self.id.clone(), class, &self.text)
    }

    pub fn word_len(&self) -> usize {
        self.text.split_whitespace().count()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SearchConfig {
    pub generations: usize,
    pub mutations: usize,
    pub crossovers: usize,
    /// Edit operations applied per mutation child.
    pub mutation_edits: usize,
    pub min_len: usize,
    pub max_len: usize,
    pub diversity_threshold: f64,
    pub screen_cap: usize,
    pub med_cap: usize,
    pub topup_cap: usize,
    pub archive_keep: usize,
    pub init_traj: usize,
    pub med_traj: usize,
    pub topup_traj: usize,
    pub final_traj: usize,
    pub heldout_traj: usize,
    pub stress_traj: usize,
    pub final_pool: usize,
    pub heldout_pool: usize,
    pub stress_pool: usize,
    /// Sequence budget `K`, for the `< 0.9K` count.
    pub sequence_budget: f64,
    pub class: String,
    pub heldout_class: String,
    pub master_seed: u64,
    pub word_pool: Vec<String>,
    pub alloc: AllocParams,
}

impl Default for SearchConfig {
    fn default() -> Self {
        Self {
            generations: 4,
            mutations: 64,
            crossovers: 12,
            mutation_edits: 3,
            min_len: 20,
            max_len: 250,
            diversity_threshold: 0.60,
            screen_cap: 48,
            med_cap: 24,
            topup_cap: 6,
            archive_keep: 24,
            init_traj: 12,
            med_traj: 10,
            topup_traj: 16,
            final_traj: 20,
            heldout_traj: 20,
            stress_traj: 30,
            final_pool: 6,
            heldout_pool: 8,
            stress_pool: 4,
            sequence_budget: 600.0,
            class: "search".into(),
            heldout_class: "heldout".into(),
            master_seed: 0,
            word_pool: crate::modelsim::WORDS.iter().map(|w| w.to_string()).collect(),
            alloc: AllocParams::default(),
        }
    }
}

impl SearchConfig {
    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("screen_cap", self.screen_cap),
            ("med_cap", self.med_cap),
            ("topup_cap", self.topup_cap),
            ("archive_keep", self.archive_keep),
            ("init_traj", self.init_traj),
            ("med_traj", self.med_traj),
        ];
        for (name, v) in positive {
            if v == 0 {
                return Err(Error::InvalidArgument(format!("{name} must be positive")));
            }
        }
        if self.init_traj < 2 || self.med_traj < 2 {
            return Err(Error::InvalidArgument("fidelity levels need at least 2 trajectories".into()));
        }
        if self.topup_traj < self.med_traj {
            return Err(Error::InvalidArgument("topup_traj must be >= med_traj".into()));
        }
        if self.min_len > self.max_len {
            return Err(Error::InvalidArgument("min_len exceeds max_len".into()));
        }
        if self.word_pool.is_empty() {
            return Err(Error::InvalidArgument("word pool is empty".into()));
        }
        if !(0.0..=1.0).contains(&self.diversity_threshold) {
            return Err(Error::InvalidArgument("diversity threshold must lie in [0, 1]".into()));
        }
        self.alloc.validated().map(|_| ())
    }

    fn generation_rng(&self, generation: usize) -> ChaCha8Rng {
        let mut seed = [0u8; 32];
        seed[..8].copy_from_slice(&self.master_seed.to_le_bytes());
        seed[8..16].copy_from_slice(&(generation as u64).to_le_bytes());
        seed[16..24].copy_from_slice(b"proposal");
        ChaCha8Rng::from_seed(seed)
    }
}

fn mutate(words: &mut Vec<String>, pool: &[String], rng: &mut ChaCha8Rng) {
    let op = rng.random_range(0..4u8);
    let pick = |rng: &mut ChaCha8Rng| pool.choose(rng).cloned().unwrap_or_default();
    match op {
        0 if !words.is_empty() => {
            let i = rng.random_range(0..words.len());
            words[i] = pick(rng);
        }
        1 => {
            let i = rng.random_range(0..=words.len());
            let w = pick(rng);
            words.insert(i, w);
        }
        2 if words.len() > 1 => {
            let i = rng.random_range(0..words.len());
            words.remove(i);
        }
        3 if words.len() > 1 => {
            let i = rng.random_range(0..words.len());
            let j = rng.random_range(0..words.len());
            words.swap(i, j);
        }
        _ => {
            let w = pick(rng);
            words.push(w);
        }
    }
}

/// Proposes `mutations + crossovers` children of `parents`.
pub fn propose(parents: &[Candidate], generation: usize, cfg: &SearchConfig) -> Result<Vec<Candidate>> {
    if parents.is_empty() {
        return Err(Error::InvalidArgument("empty parent pool".into()));
    }
    let mut rng = cfg.generation_rng(generation);
    let mut out = Vec::with_capacity(cfg.mutations + cfg.crossovers);
    for j in 0..cfg.mutations {
        let parent = parents.choose(&mut rng).expect("nonempty");
        let mut words: Vec<String> = parent.text.split_whitespace().map(String::from).collect();
        for _ in 0..cfg.mutation_edits {
            mutate(&mut words, &cfg.word_pool, &mut rng);
        }
        out.push(Candidate {
            id: format!("g{generation}_mut_{j:02}"),
            text: words.join(" "),
            lineage: vec![parent.id.clone()],
            generation,
            origin: Origin::Mutation,
        });
    }
    for j in 0..cfg.crossovers {
        let a = parents.choose(&mut rng).expect("nonempty");
        let b = parents.choose(&mut rng).expect("nonempty");
        let wa: Vec<&str> = a.text.split_whitespace().collect();
        let wb: Vec<&str> = b.text.split_whitespace().collect();
        let cut_a = rng.random_range(0..=wa.len());
        let cut_b = rng.random_range(0..=wb.len());
        let text = wa[..cut_a].iter().chain(&wb[cut_b..]).copied().collect::<Vec<_>>().join(" ");
        out.push(Candidate {
            id: format!("g{generation}_x_{j:02}"),
            text,
            lineage: vec![a.id.clone(), b.id.clone()],
            generation,
            origin: Origin::Crossover,
        });
    }
    Ok(out)
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct GenReport {
    pub generation: usize,
    pub raw: usize,
    pub dedup: usize,
    pub len_ok: usize,
    /// Archive parents re-injected because filtering left nothing.
    pub fallback: usize,
    pub screen: usize,
    pub med: usize,
    pub below_09k: usize,
    pub topup: usize,
    pub best_rho: f64,
    pub failures: usize,
}

/// Exact-text dedup (within the batch and against `archive_texts`), length
/// filter, then the n-gram diversity filter against the archive.
pub fn filter_pipeline(
    cands: Vec<Candidate>,
    archive: &[Candidate],
    cfg: &SearchConfig,
) -> (Vec<Candidate>, GenReport) {
    let mut report = GenReport {
        raw: cands.len(),
        ..GenReport::default()
    };
    let mut seen: HashSet<String> = archive.iter().map(|c| c.text.clone()).collect();
    let unique: Vec<Candidate> = cands.into_iter().filter(|c| seen.insert(c.text.clone())).collect();
    report.dedup = unique.len();
    let sized: Vec<Candidate> = unique
        .into_iter()
        .filter(|c| (cfg.min_len..=cfg.max_len).contains(&c.word_len()))
        .collect();
    report.len_ok = sized.len();
    let archive_seqs: Vec<TokenSeq> = archive.iter().map(|c| TokenSeq::from_text(&c.text)).collect();
    let kept = sized
        .into_iter()
        .filter(|c| {
            let seq = TokenSeq::from_text(&c.text);
            archive_seqs
                .iter()
                .all(|a| ngram_jaccard(&seq, a, 4) <= cfg.diversity_threshold)
        })
        .collect();
    (kept, report)
}

/// Hashed character 3- and 4-gram counts, L2-normalized.
pub fn features(text: &str) -> Vec<f64> {
    let chars: Vec<char> = format!(" {} ", text.to_lowercase()).chars().collect();
    let mut v = vec![0.0; FEATURE_DIM];
    let mut buf = String::new();
    for n in 3..=4 {
        for w in chars.windows(n) {
            buf.clear();
            buf.extend(w);
            let mut bytes = FEATURE_HASH_SEED.to_le_bytes().to_vec();
            bytes.extend_from_slice(buf.as_bytes());
            v[(fnv1a64(&bytes) % FEATURE_DIM as u64) as usize] += 1.0;
        }
    }
    let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    if norm > 0.0 {
        v.iter_mut().for_each(|x| *x /= norm);
    }
    v
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LinearHead {
    w_safe: Vec<f64>,
    w_rho: Vec<f64>,
}

impl LinearHead {
    fn predict(&self, x: &[f64]) -> (f64, f64) {
        let with_bias = |w: &[f64]| dot(&w[..FEATURE_DIM], x) + w[FEATURE_DIM];
        (with_bias(&self.w_safe), with_bias(&self.w_rho))
    }
}

/// Ensemble of ridge-regularized linear models over hashed features.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub enum Scorer {
    Untrained,
    /// Every training label agreed; `prior` is that label.
    SingleClass { prior: f64, heads: Vec<LinearHead> },
    Ensemble { heads: Vec<LinearHead> },
}

fn rho_label(row: &EvalRow) -> f64 {
    match row.rho {
        Rho::Valid(v) => v.clamp(0.0, 2.0),
        Rho::Invalid => 2.0,
    }
}

fn fit_head(xs: &[Vec<f64>], safe: &[f64], rho: &[f64], sample: &[usize]) -> Result<LinearHead> {
    let d = FEATURE_DIM + 1;
    let x = DMatrix::from_fn(sample.len(), d, |r, c| if c == FEATURE_DIM { 1.0 } else { xs[sample[r]][c] });
    let y = DMatrix::from_fn(sample.len(), 2, |r, c| if c == 0 { safe[sample[r]] } else { rho[sample[r]] });
    let gram = x.transpose() * &x + DMatrix::identity(d, d) * RIDGE_LAMBDA;
    let rhs = x.transpose() * y;
    let chol = gram
        .cholesky()
        .ok_or_else(|| Error::Domain("ridge system is not positive definite".into()))?;
    let w = chol.solve(&rhs);
    Ok(LinearHead {
        w_safe: w.column(0).iter().copied().collect(),
        w_rho: w.column(1).iter().copied().collect(),
    })
}

impl Scorer {
    /// Fits on `(text, row)` history; the safe label is `row.certified`.
    pub fn train(history: &[(String, EvalRow)]) -> Result<Self> {
        if history.is_empty() {
            return Ok(Scorer::Untrained);
        }
        let xs: Vec<Vec<f64>> = history.iter().map(|(t, _)| features(t)).collect();
        let safe: Vec<f64> = history.iter().map(|(_, r)| f64::from(u8::from(r.certified))).collect();
        let rho: Vec<f64> = history.iter().map(|(_, r)| rho_label(r)).collect();
        let n = history.len();
        let heads = (0..ENSEMBLE_SIZE)
            .map(|j| {
                let mut rng = ChaCha8Rng::seed_from_u64(ENSEMBLE_SEED.wrapping_add(j as u64));
                let sample: Vec<usize> = (0..n).map(|_| rng.random_range(0..n)).collect();
                fit_head(&xs, &safe, &rho, &sample)
            })
            .collect::<Result<Vec<_>>>()?;
        let first = safe[0];
        if safe.iter().all(|&s| s == first) {
            Ok(Scorer::SingleClass { prior: first, heads })
        } else {
            Ok(Scorer::Ensemble { heads })
        }
    }

    pub fn predict(&self, text: &str) -> SurrogateScore {
        let heads = match self {
            Scorer::Untrained => return SurrogateScore::UNTRAINED,
            Scorer::SingleClass { heads, .. } | Scorer::Ensemble { heads } => heads,
        };
        let x = features(text);
        let preds: Vec<(f64, f64)> = heads.iter().map(|h| h.predict(&x)).collect();
        let n = preds.len() as f64;
        let rho_hat = preds.iter().map(|p| p.1).sum::<f64>() / n;
        let margin = (rho_hat - 1.0).clamp(-1.0, 1.0);
        match self {
            Scorer::SingleClass { prior, .. } => SurrogateScore::new(*prior, 0.0, margin),
            _ => {
                let mu = preds.iter().map(|p| p.0).sum::<f64>() / n;
                let sd = (preds.iter().map(|p| (p.0 - mu).powi(2)).sum::<f64>() / n).sqrt();
                SurrogateScore::new(mu, sd, margin)
            }
        }
    }
}

/// Greedy MAP for a k-DPP with kernel `diag(q)·S·diag(q)`, `q = exp(quality)`,
/// `S` the cosine similarity of [`features`]. Returns indices in selection
/// order; stops early once no item adds volume.
pub fn dpp_select(texts: &[(&str, &str)], quality: &[f64], k: usize) -> Vec<usize> {
    let n = texts.len();
    assert_eq!(n, quality.len(), "one quality per item");
    if n <= k {
        return (0..n).collect();
    }
    let feats: Vec<Vec<f64>> = texts.iter().map(|(_, t)| features(t)).collect();
    let q: Vec<f64> = quality.iter().map(|r| r.exp()).collect();
    let kernel = |i: usize, j: usize| {
        let s = if i == j { 1.0 } else { dot(&feats[i], &feats[j]) };
        q[i] * q[j] * s
    };
    let mut d2: Vec<f64> = (0..n).map(|i| kernel(i, i)).collect();
    let mut c: Vec<Vec<f64>> = vec![Vec::with_capacity(k); n];
    let mut chosen = Vec::with_capacity(k);
    let mut taken = vec![false; n];
    while chosen.len() < k {
        let best = (0..n)
            .filter(|&i| !taken[i] && d2[i] > DPP_GAIN_EPS * kernel(i, i))
            .max_by(|&a, &b| d2[a].total_cmp(&d2[b]).then_with(|| texts[b].0.cmp(texts[a].0)));
        let Some(j) = best else { break };
        taken[j] = true;
        chosen.push(j);
        let dj = d2[j].sqrt();
        for i in 0..n {
            if taken[i] {
                continue;
            }
            let e = (kernel(j, i) - dot(&c[j], &c[i])) / dj;
            c[i].push(e);
            d2[i] -= e * e;
        }
    }
    chosen
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ArchiveEntry {
    pub candidate: Candidate,
    pub row: EvalRow,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct Archive {
    pub entries: Vec<ArchiveEntry>,
    pub best_rho: Option<f64>,
}

impl Archive {
    pub fn candidates(&self) -> Vec<Candidate> {
        self.entries.iter().map(|e| e.candidate.clone()).collect()
    }

    /// Merges `incoming` (replacing same-text entries) and keeps a k-DPP
    /// subset of size `keep`.
    pub fn update(&mut self, incoming: Vec<ArchiveEntry>, keep: usize) {
        let mut pool: Vec<ArchiveEntry> = Vec::new();
        for e in self.entries.drain(..).chain(incoming) {
            match pool.iter_mut().find(|p| p.candidate.text == e.candidate.text) {
                Some(slot) => *slot = e,
                None => pool.push(e),
            }
        }
        let best = pool.iter().filter_map(|e| e.row.rho.value()).reduce(f64::max);
        self.best_rho = match (self.best_rho, best) {
            (Some(a), Some(b)) => Some(a.max(b)),
            (a, b) => a.or(b),
        };
        let texts: Vec<(&str, &str)> = pool
            .iter()
            .map(|e| (e.candidate.id.as_str(), e.candidate.text.as_str()))
            .collect();
        let quality: Vec<f64> = pool.iter().map(|e| e.row.rho.value().unwrap_or(0.0)).collect();
        let picked = dpp_select(&texts, &quality, keep);
        let mut slots: Vec<Option<ArchiveEntry>> = pool.into_iter().map(Some).collect();
        self.entries = picked.into_iter().filter_map(|i| slots[i].take()).collect();
    }

    /// Entries ranked by ρ (invalid last), ties by id.
    pub fn ranked(&self) -> Vec<&ArchiveEntry> {
        let mut v: Vec<&ArchiveEntry> = self.entries.iter().collect();
        v.sort_by(|a, b| {
            b.row
                .rho_or_neg_inf()
                .total_cmp(&a.row.rho_or_neg_inf())
                .then_with(|| a.candidate.id.cmp(&b.candidate.id))
        });
        v
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Stage {
    Init,
    Screen,
    Med,
    Topup,
}

/// One line of a per-generation stage log.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StageRecord {
    pub generation: usize,
    pub stage: Stage,
    pub candidate: Candidate,
    #[serde(default)]
    pub score: Option<SurrogateScore>,
    #[serde(default)]
    pub row: Option<EvalRow>,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct SearchState {
    pub generation: usize,
    pub archive: Archive,
    pub history: Vec<(String, EvalRow)>,
}

fn by_rho_desc(a: &EvalRow, b: &EvalRow) -> std::cmp::Ordering {
    b.rho_or_neg_inf()
        .total_cmp(&a.rho_or_neg_inf())
        .then_with(|| a.prompt_id.cmp(&b.prompt_id))
}

/// Screens by predicted headroom, evaluates at medium fidelity, and tops up
/// the strongest survivors. Returns the entries to offer the archive and the
/// stage log.
pub fn staged_retention(
    kept: Vec<Candidate>,
    scorer: &Scorer,
    sampler: &dyn TrajectorySampler,
    cfg: &SearchConfig,
    report: &mut GenReport,
) -> Result<(Vec<ArchiveEntry>, Vec<StageRecord>)> {
    let generation = report.generation;
    let mut log = Vec::new();
    let mut scored: Vec<(Candidate, SurrogateScore)> = kept
        .into_iter()
        .map(|c| {
            let s = scorer.predict(&c.text);
            (c, s)
        })
        .collect();
    let key = |s: &SurrogateScore| s.margin.clamp(-1.0, 1.0) + s.sigma_safe;
    scored.sort_by(|a, b| key(&b.1).total_cmp(&key(&a.1)).then_with(|| a.0.id.cmp(&b.0.id)));
    scored.truncate(cfg.screen_cap);
    report.screen = scored.len();
    for (c, s) in &scored {
        log.push(StageRecord {
            generation,
            stage: Stage::Screen,
            candidate: c.clone(),
            score: Some(*s),
            row: None,
        });
    }
    if scored.is_empty() {
        return Ok((Vec::new(), log));
    }

    let prompts: Vec<Prompt> = scored.iter().map(|(c, _)| c.to_prompt(&cfg.class)).collect();
    let ebb = cfg.alloc.ebb()?;
    let med = evaluate_with(&prompts, sampler, &ebb, |_| cfg.med_traj)?;
    report.failures += med.failures;
    report.below_09k = med
        .evals
        .iter()
        .filter(|e| e.row.u_ebb < 0.9 * cfg.sequence_budget)
        .count();
    let mut evals = med.evals;
    evals.sort_by(|a, b| by_rho_desc(&a.row, &b.row));
    evals.truncate(cfg.med_cap);
    report.med = evals.len();
    let find = |id: &str| scored.iter().find(|(c, _)| c.id == id).expect("screened candidate");
    for e in &evals {
        let (c, s) = find(&e.prompt.id);
        log.push(StageRecord {
            generation,
            stage: Stage::Med,
            candidate: c.clone(),
            score: Some(*s),
            row: Some(e.row.clone()),
        });
    }

    let rows: Vec<EvalRow> = evals.iter().map(|e| e.row.clone()).collect();
    let alive = survivor_mask(&rows, cfg.alloc.eta);
    let promote: Vec<usize> = (0..evals.len()).filter(|&i| alive[i]).take(cfg.topup_cap).collect();
    let extra: Vec<(usize, PromptSamples)> = promote
        .iter()
        .map(|&i| {
            let p = &evals[i].prompt;
            (i, PromptSamples::collect(sampler, p, cfg.med_traj..cfg.topup_traj))
        })
        .collect();
    let mut topped = 0;
    for (i, samples) in extra {
        report.failures += samples.failures;
        let e = &mut evals[i];
        e.samples.merge(samples);
        e.row = e.samples.row(&e.prompt.id, &ebb)?;
        let passes = survivor_mask(std::slice::from_ref(&e.row), cfg.alloc.eta)[0];
        if passes {
            topped += 1;
            let (c, s) = find(&e.prompt.id);
            log.push(StageRecord {
                generation,
                stage: Stage::Topup,
                candidate: c.clone(),
                score: Some(*s),
                row: Some(e.row.clone()),
            });
        }
    }
    report.topup = topped;

    let entries = evals
        .into_iter()
        .map(|e| ArchiveEntry {
            candidate: find(&e.prompt.id).0.clone(),
            row: e.row,
        })
        .collect();
    Ok((entries, log))
}

/// Evaluates the seed pool at `init_traj` and builds the first archive.
pub fn init_state(
    seeds: &[Candidate],
    sampler: &dyn TrajectorySampler,
    cfg: &SearchConfig,
) -> Result<(SearchState, Vec<StageRecord>)> {
    cfg.validate()?;
    let prompts: Vec<Prompt> = seeds.iter().map(|c| c.to_prompt(&cfg.class)).collect();
    let out = evaluate_with(&prompts, sampler, &cfg.alloc.ebb()?, |_| cfg.init_traj)?;
    let mut state = SearchState::default();
    let mut log = Vec::new();
    let mut entries = Vec::new();
    for e in out.evals {
        let c = seeds.iter().find(|c| c.id == e.prompt.id).expect("seed").clone();
        state.history.push((c.text.clone(), e.row.clone()));
        log.push(StageRecord {
            generation: 0,
            stage: Stage::Init,
            candidate: c.clone(),
            score: None,
            row: Some(e.row.clone()),
        });
        entries.push(ArchiveEntry { candidate: c, row: e.row });
    }
    if entries.is_empty() {
        return Err(Error::InvalidArgument("no seed prompt could be evaluated".into()));
    }
    state.archive.update(entries, cfg.archive_keep);
    Ok((state, log))
}

pub fn run_generation(
    mut state: SearchState,
    sampler: &dyn TrajectorySampler,
    cfg: &SearchConfig,
) -> Result<(SearchState, GenReport, Vec<StageRecord>)> {
    let generation = state.generation + 1;
    let scorer = Scorer::train(&state.history)?;
    let parents = state.archive.candidates();
    let proposed = propose(&parents, generation, cfg)?;
    let (mut kept, mut report) = filter_pipeline(proposed, &parents, cfg);
    report.generation = generation;
    if kept.is_empty() {
        kept = parents
            .iter()
            .take(cfg.screen_cap)
            .enumerate()
            .map(|(j, p)| Candidate {
                id: format!("g{generation}_fallback_{j}"),
                text: p.text.clone(),
                lineage: vec![p.id.clone()],
                generation,
                origin: Origin::Fallback,
            })
            .collect();
        report.fallback = kept.len();
    }
    let (entries, log) = staged_retention(kept, &scorer, sampler, cfg, &mut report)?;
    for e in log.iter().filter(|r| r.stage == Stage::Med) {
        if let Some(row) = &e.row {
            state.history.push((e.candidate.text.clone(), row.clone()));
        }
    }
    state.archive.update(entries, cfg.archive_keep);
    report.best_rho = state.archive.best_rho.unwrap_or(0.0);
    state.generation = generation;
    Ok((state, report, log))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SearchReport {
    pub generations: Vec<GenReport>,
    pub stage_logs: Vec<Vec<StageRecord>>,
    pub archive_after_init: Archive,
    pub archive_history: Vec<Archive>,
    pub archive: Archive,
    pub final_pool: AllocOutcome,
    pub heldout_pool: AllocOutcome,
    pub stress_pool: AllocOutcome,
    pub heldout_generalization_gap: Option<f64>,
}

/// Mean final-pool ρ minus mean held-out ρ over valid rows.
pub fn generalization_gap(final_rows: &[EvalRow], heldout_rows: &[EvalRow]) -> Option<f64> {
    let mean = |rows: &[EvalRow]| {
        let v: Vec<f64> = rows.iter().filter_map(|r| r.rho.value()).collect();
        (!v.is_empty()).then(|| v.iter().sum::<f64>() / v.len() as f64)
    };
    Some(mean(final_rows)? - mean(heldout_rows)?)
}

fn pool_scores(scorer: &Scorer, cands: &[Candidate]) -> Vec<SurrogateScore> {
    cands.iter().map(|c| scorer.predict(&c.text)).collect()
}

/// Full search followed by final, held-out and stress evaluation.
pub fn run_search(
    seeds: &[Candidate],
    heldout: &[Candidate],
    sampler: &dyn TrajectorySampler,
    cfg: &SearchConfig,
) -> Result<SearchReport> {
    let (mut state, init_log) = init_state(seeds, sampler, cfg)?;
    let archive_after_init = state.archive.clone();
    let mut generations = Vec::new();
    let mut stage_logs = vec![init_log];
    let mut archive_history = vec![state.archive.clone()];
    for _ in 0..cfg.generations {
        let (next, report, log) = run_generation(state, sampler, cfg)?;
        state = next;
        generations.push(report);
        stage_logs.push(log);
        archive_history.push(state.archive.clone());
    }

    let scorer = Scorer::train(&state.history)?;
    let ranked: Vec<Candidate> = state.archive.ranked().into_iter().map(|e| e.candidate.clone()).collect();
    let hardness_pool = |size: usize, n_max: usize| -> Result<AllocOutcome> {
        let cands: Vec<Candidate> = ranked.iter().take(size).cloned().collect();
        if cands.is_empty() {
            return Ok(AllocOutcome::default());
        }
        let params = AllocParams {
            n_min: cfg.alloc.n_floor.max(2),
            n_max: n_max.max(cfg.alloc.n_floor.max(2)),
            ..cfg.alloc
        };
        let prompts: Vec<Prompt> = cands.iter().map(|c| c.to_prompt(&cfg.class)).collect();
        evaluate_hardness(&prompts, &pool_scores(&scorer, &cands), sampler, &params)
    };
    let final_pool = hardness_pool(cfg.final_pool, cfg.final_traj)?;
    let stress_pool = hardness_pool(cfg.stress_pool, cfg.stress_traj)?;

    let held: Vec<Candidate> = heldout.iter().take(cfg.heldout_pool).cloned().collect();
    let heldout_pool = if held.is_empty() {
        AllocOutcome::default()
    } else {
        let params = AllocParams {
            n_target: cfg.heldout_traj,
            ..cfg.alloc
        };
        let prompts: Vec<Prompt> = held.iter().map(|c| c.to_prompt(&cfg.heldout_class)).collect();
        evaluate_adaptive(&prompts, &pool_scores(&scorer, &held), sampler, &params)?
    };
    let heldout_generalization_gap = generalization_gap(&final_pool.rows(), &heldout_pool.rows());

    Ok(SearchReport {
        generations,
        stage_logs,
        archive_after_init,
        archive_history,
        archive: state.archive,
        final_pool,
        heldout_pool,
        stress_pool,
        heldout_generalization_gap,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn words(n: usize, offset: usize) -> String {
        (0..n)
            .map(|i| crate::modelsim::WORDS[(i * 7 + offset) % crate::modelsim::WORDS.len()])
            .collect::<Vec<_>>()
            .join(" ")
    }

    fn row(id: &str, rho: f64, certified: bool) -> EvalRow {
        EvalRow {
            prompt_id: id.into(),
            n: 10,
            mean: 100.0,
            var: 10.0,
            range: 10.0,
            r_eff: 10.0,
            u_ebb: rho * 600.0,
            b_eff: 600.0,
            rho: Rho::Valid(rho),
            certified,
        }
    }

    #[test]
    fn propose_counts_and_determinism() {
        let parents: Vec<Candidate> = (0..5).map(|i| Candidate::seed(format!("s{i}"), words(30, i))).collect();
        let cfg = SearchConfig::default();
        let a = propose(&parents, 1, &cfg).unwrap();
        assert_eq!(a.len(), 76);
        assert_eq!(a.iter().filter(|c| c.origin == Origin::Crossover).count(), 12);
        assert_eq!(a, propose(&parents, 1, &cfg).unwrap());
        assert_ne!(a, propose(&parents, 2, &cfg).unwrap());
        let ids: HashSet<&str> = a.iter().map(|c| c.id.as_str()).collect();
        assert_eq!(ids.len(), 76);
    }

    #[test]
    fn zero_edit_mutations_copy_parents() {
        let parents = vec![Candidate::seed("s", words(30, 0))];
        let cfg = SearchConfig {
            mutation_edits: 0,
            ..SearchConfig::default()
        };
        let out = propose(&parents, 1, &cfg).unwrap();
        assert!(out[..64].iter().all(|c| c.text == parents[0].text));
        let (kept, report) = filter_pipeline(out, &parents, &cfg);
        assert_eq!(report.raw, 76);
        assert!(kept.iter().all(|c| c.origin == Origin::Crossover));
    }

    #[test]
    fn filter_examples() {
        let cfg = SearchConfig::default();
        let long = words(30, 0);
        let cands = vec![
            Candidate::seed("a", long.clone()),
            Candidate::seed("b", long.clone()),
            Candidate::seed("c", words(10, 3)),
        ];
        let (kept, report) = filter_pipeline(cands, &[], &cfg);
        assert_eq!((report.raw, report.dedup, report.len_ok), (3, 2, 1));
        assert_eq!(kept[0].id, "a");

        let base: Vec<String> = (0..40).map(|i| format!("w{i}")).collect();
        let archive = vec![Candidate::seed("arch", base.join(" "))];
        let mut near = base.clone();
        near.push("extra1".into());
        near.push("extra2".into());
        near.push("extra3".into());
        near.push("extra4".into());
        let near = Candidate::seed("near", near.join(" "));
        let j = ngram_jaccard(&TokenSeq::from_text(&near.text), &TokenSeq::from_text(&archive[0].text), 4);
        assert!(j > 0.6 && j < 1.0);
        let (kept, report) = filter_pipeline(vec![near], &archive, &cfg);
        assert!(kept.is_empty());
        assert_eq!(report.len_ok, 1);
    }

    #[test]
    fn scorer_defaults_and_saturation() {
        assert_eq!(Scorer::train(&[]).unwrap().predict("x"), SurrogateScore::UNTRAINED);
        let hist: Vec<(String, EvalRow)> = (0..12).map(|i| (words(25, i), row(&format!("h{i}"), 0.4, true))).collect();
        let s = Scorer::train(&hist).unwrap();
        let p = s.predict(&words(25, 99));
        assert_eq!((p.mu_safe, p.sigma_safe), (1.0, 0.0));
        assert_eq!(p, s.predict(&words(25, 99)));
    }

    #[test]
    fn scorer_separates_classes() {
        let safe_text = |i: usize| format!("calm quiet garden morning {}", words(20, i));
        let risky_text = |i: usize| format!("secret castle storm shadow {}", words(20, i + 50));
        let mut hist = Vec::new();
        for i in 0..20 {
            hist.push((safe_text(i), row(&format!("s{i}"), 0.3, true)));
            hist.push((risky_text(i), row(&format!("r{i}"), 1.4, false)));
        }
        let s = Scorer::train(&hist).unwrap();
        let a = s.predict(&safe_text(100));
        let b = s.predict(&risky_text(100));
        assert!(a.mu_safe > b.mu_safe);
        assert!(b.margin > a.margin);
        assert!(a.sigma_safe > 0.0);
    }

    #[test]
    fn dpp_drops_duplicates() {
        let items = [("a", "red green blue"), ("b", "red green blue"), ("c", "zebra quilt xylophone")];
        let picked = dpp_select(&items, &[0.5, 0.5, 0.1], 2);
        assert_eq!(picked, vec![0, 2]);
        let picked = dpp_select(&items[..2], &[0.5, 0.5], 1);
        assert_eq!(picked, vec![0]);
    }

    #[test]
    fn dpp_orthogonal_items_rank_by_quality() {
        // Disjoint alphabets share no character n-grams, up to hash collisions.
        let items = [("a", "aaaa aaaa"), ("b", "bbbb bbbb"), ("c", "cccc cccc"), ("d", "dddd dddd")];
        let picked = dpp_select(&items, &[0.1, 0.9, 0.5, 0.3], 2);
        assert_eq!(picked, vec![1, 2]);
    }

    #[test]
    fn dpp_pool_smaller_than_k() {
        let items = [("a", "x"), ("b", "y")];
        assert_eq!(dpp_select(&items, &[0.0, 0.0], 5), vec![0, 1]);
    }

    #[test]
    fn dpp_keeps_archive_cap() {
        let items: Vec<(String, String)> = (0..30).map(|i| (format!("i{i:02}"), words(30, i * 3))).collect();
        let refs: Vec<(&str, &str)> = items.iter().map(|(a, b)| (a.as_str(), b.as_str())).collect();
        let q: Vec<f64> = (0..30).map(|i| i as f64 / 30.0).collect();
        assert_eq!(dpp_select(&refs, &q, 24).len(), 24);
    }

    #[test]
    fn gap_formula() {
        let f = [row("a", 0.9, true), row("b", 0.7, true)];
        let h = [row("c", 0.5, true), row("d", 0.3, true)];
        assert!((generalization_gap(&f, &h).unwrap() - 0.4).abs() < 1e-12);
        assert_eq!(generalization_gap(&[], &h), None);
    }

    #[test]
    fn archive_best_rho_is_running_max() {
        let mut a = Archive::default();
        let e = |id: &str, rho: f64| ArchiveEntry {
            candidate: Candidate::seed(id, words(25, id.len())),
            row: row(id, rho, true),
        };
        a.update(vec![e("a", 0.8)], 1);
        a.update(vec![ArchiveEntry { candidate: Candidate::seed("b", words(25, 40)), row: row("b", 0.5, true) }], 1);
        assert_eq!(a.best_rho, Some(0.8));
    }
}
