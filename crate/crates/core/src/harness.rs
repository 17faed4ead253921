//! Configuration, seeding, workload sampling and report emission.

use std::collections::HashMap;
use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use rand::seq::IndexedRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::allocator::{AllocOutcome, TrajectorySampler};
use crate::auditstats::{
    bernstein_grid, bonferroni, ebb_upper, project_min_n, r_worst, spend_ratio, BernsteinGrid, EbbParams, EvalRow,
    Moments, RangeMode,
};
use crate::decoder::{decode_trajectory, BankConfig, Prompt, TrajectoryLog};
use crate::error::{Error, Result};
use crate::modelsim::{make_source, ReplaySource, SyntheticSpec, Profile, REACHABILITY_MARGIN, WORDS};
use crate::search::{run_search, Archive, Candidate, GenReport, SearchConfig, SearchReport};

pub const DEFAULT_BASE_SEEDS: [u64; 3] = [42, 43, 44];
const SEED_OFFSET_MODULUS: u64 = 100_000;

/// 64-bit FNV-1a.
pub fn fnv1a64(bytes: &[u8]) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for &b in bytes {
        h ^= u64::from(b);
        h = h.wrapping_mul(0x0000_0100_0000_01b3);
    }
    h
}

/// `base_seeds[i mod |base|] + offset + i` with
/// `offset = fnv1a64(prompt_id) mod 100000`.
pub fn trajectory_seed(prompt_id: &str, index: usize, base_seeds: &[u64]) -> u64 {
    let offset = fnv1a64(prompt_id.as_bytes()) % SEED_OFFSET_MODULUS;
    base_seeds[index % base_seeds.len()] + offset + index as u64
}

pub fn derive_seeds(prompt_id: &str, count: usize, base_seeds: &[u64]) -> Result<Vec<u64>> {
    if count == 0 || base_seeds.is_empty() {
        return Err(Error::InvalidArgument("need count >= 1 and at least one base seed".into()));
    }
    Ok((0..count).map(|i| trajectory_seed(prompt_id, i, base_seeds)).collect())
}

/// Per-class synthetic workload.
///
/// A trajectory's per-step spend level is
/// `base_kl + risk_gain·(risk − ½) + jitter·u` with `u ~ U(−1, 1)` drawn
/// from the trajectory seed and `risk ∈ [0, 1]` the mean hashed weight of the
/// prompt's words. The per-position prefix level is
/// `prefix_kl·(1 + prefix_jitter·v)` with `v ∈ [−1, 1]` fixed per prompt.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ClassSpec {
    pub name: String,
    pub cap: usize,
    pub base_kl: f64,
    pub risk_gain: f64,
    pub jitter: f64,
    pub prefix_kl: f64,
    pub prefix_jitter: f64,
    /// Probability that a trajectory runs with fault injection.
    pub fault_rate: f64,
    pub fault_overspend: f64,
    pub with_reference: bool,
    pub min_words: usize,
    pub max_words: usize,
    /// Serve every trajectory from this recorded pair stream instead.
    pub replay: Option<PathBuf>,
}

impl Default for ClassSpec {
    fn default() -> Self {
        Self {
            name: "default".into(),
            cap: 10,
            base_kl: 0.8,
            risk_gain: 0.5,
            jitter: 0.3,
            prefix_kl: 0.5,
            prefix_jitter: 0.5,
            fault_rate: 0.0,
            fault_overspend: 0.0,
            with_reference: true,
            min_words: 24,
            max_words: 48,
            replay: None,
        }
    }
}

impl ClassSpec {
    pub fn named(name: &str, cap: usize, base_kl: f64, jitter: f64, prefix_kl: f64, prefix_jitter: f64) -> Self {
        Self {
            name: name.into(),
            cap,
            base_kl,
            jitter,
            prefix_kl,
            prefix_jitter,
            ..Self::default()
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct Workload {
    pub vocab_size: usize,
    pub prefix_window: usize,
    pub classes: Vec<ClassSpec>,
    pub search_class: ClassSpec,
    pub heldout_class: ClassSpec,
    pub seed_prompts: usize,
}

impl Default for Workload {
    fn default() -> Self {
        let neutral = ClassSpec {
            with_reference: false,
            ..ClassSpec::named("neutral", 200, 0.80, 0.44, 0.33, 1.0)
        };
        Self {
            vocab_size: 64,
            prefix_window: 8,
            classes: vec![
                neutral,
                ClassSpec::named("val", 150, 0.80, 0.30, 0.66, 0.57),
                ClassSpec::named("test", 150, 0.87, 0.31, 0.73, 0.66),
                ClassSpec::named("attack_train", 100, 0.885, 0.34, 0.78, 0.69),
                ClassSpec::named("factual", 150, 0.805, 0.35, 0.51, 0.67),
                ClassSpec::named("creative", 150, 0.85, 0.53, 0.43, 0.80),
            ],
            search_class: ClassSpec {
                risk_gain: 1.0,
                ..ClassSpec::named("search", 0, 0.92, 0.25, 0.70, 0.30)
            },
            heldout_class: ClassSpec {
                fault_rate: 0.01,
                fault_overspend: 4.0,
                ..ClassSpec::named("heldout", 8, 0.95, 0.25, 0.74, 0.28)
            },
            seed_prompts: 96,
        }
    }
}

impl Workload {
    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Ok(serde_json::from_reader(File::open(path)?)?)
    }

    fn all_classes(&self) -> impl Iterator<Item = &ClassSpec> {
        self.classes
            .iter()
            .chain([&self.search_class, &self.heldout_class])
    }

    pub fn validate(&self) -> Result<()> {
        if self.vocab_size < 2 {
            return Err(Error::InvalidSpec("vocab size must be >= 2".into()));
        }
        let mut names = std::collections::HashSet::new();
        for c in self.all_classes() {
            if !names.insert(c.name.as_str()) {
                return Err(Error::InvalidSpec(format!("duplicate class {}", c.name)));
            }
            if c.min_words == 0 || c.min_words > c.max_words {
                return Err(Error::InvalidSpec(format!("class {}: bad word-length range", c.name)));
            }
            let nonneg = [c.base_kl, c.jitter, c.prefix_kl, c.prefix_jitter, c.fault_overspend, c.risk_gain];
            if nonneg.iter().any(|v| !(*v >= 0.0)) {
                return Err(Error::InvalidSpec(format!("class {}: parameters must be >= 0", c.name)));
            }
            if !(0.0..=1.0).contains(&c.fault_rate) {
                return Err(Error::InvalidSpec(format!("class {}: fault rate must lie in [0, 1]", c.name)));
            }
        }
        Ok(())
    }

    pub fn class(&self, name: &str) -> Option<&ClassSpec> {
        self.all_classes().find(|c| c.name == name)
    }
}

fn text_rng(master_seed: u64, tag: &str, index: usize) -> ChaCha8Rng {
    let mut bytes = master_seed.to_le_bytes().to_vec();
    bytes.extend_from_slice(tag.as_bytes());
    bytes.extend_from_slice(&(index as u64).to_le_bytes());
    ChaCha8Rng::seed_from_u64(fnv1a64(&bytes))
}

fn random_text(rng: &mut ChaCha8Rng, min_words: usize, max_words: usize) -> String {
    let n = rng.random_range(min_words..=max_words);
    (0..n)
        .map(|_| *WORDS.choose(rng).expect("nonempty"))
        .collect::<Vec<_>>()
        .join(" ")
}

/// Deterministic prompt texts for a class; ids are `{prefix}{class}.{i:02}`.
pub fn class_texts(class: &ClassSpec, count: usize, prefix: &str, master_seed: u64) -> Vec<(String, String, Option<String>)> {
    (0..count)
        .map(|i| {
            let mut rng = text_rng(master_seed, &class.name, i);
            let text = random_text(&mut rng, class.min_words, class.max_words);
            let reference = class.with_reference.then(|| random_text(&mut rng, 40, 80));
            (format!("{prefix}{}.{i:02}", class.name), text, reference)
        })
        .collect()
}

pub fn class_prompts(class: &ClassSpec, master_seed: u64) -> Vec<Prompt> {
    class_texts(class, class.cap, "", master_seed)
        .into_iter()
        .map(|(id, text, reference)| {
            let p = Prompt::from_text(id, &class.name, &text);
            match reference {
                Some(r) => p.with_reference(r),
                None => p,
            }
        })
        .collect()
}

fn unit_hash(bytes: &[u8]) -> f64 {
    (fnv1a64(bytes) % 10_001) as f64 / 10_000.0
}

/// Mean hashed weight in `[0, 1]` of the prompt's word ids.
pub fn prompt_risk(tokens: &[u32]) -> f64 {
    if tokens.is_empty() {
        return 0.5;
    }
    tokens
        .iter()
        .map(|t| {
            let mut b = t.to_le_bytes().to_vec();
            b.extend_from_slice(b"risk");
            unit_hash(&b)
        })
        .sum::<f64>()
        / tokens.len() as f64
}

/// Samples trajectories for workload prompts.
pub struct WorkloadSampler {
    workload: Workload,
    cfg: BankConfig,
    base_seeds: Vec<u64>,
    replays: HashMap<String, ReplaySource>,
}

impl WorkloadSampler {
    pub fn new(workload: Workload, cfg: BankConfig, base_seeds: Vec<u64>) -> Result<Self> {
        workload.validate()?;
        if base_seeds.is_empty() {
            return Err(Error::InvalidArgument("need at least one base seed".into()));
        }
        let mut replays = HashMap::new();
        for c in workload.all_classes() {
            if let Some(path) = &c.replay {
                replays.insert(c.name.clone(), crate::modelsim::replay_source(path)?);
            }
        }
        Ok(Self {
            workload,
            cfg,
            base_seeds,
            replays,
        })
    }

    pub fn bank_config(&self) -> &BankConfig {
        &self.cfg
    }

    pub fn workload(&self) -> &Workload {
        &self.workload
    }

    /// The synthetic spec behind trajectory `index` of `prompt`.
    pub fn spec_for(&self, prompt: &Prompt, index: usize) -> Result<SyntheticSpec> {
        let class = self
            .workload
            .class(&prompt.class)
            .ok_or_else(|| Error::InvalidArgument(format!("unknown class {}", prompt.class)))?;
        let seed = trajectory_seed(&prompt.id, index, &self.base_seeds);
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x6c65_7665_6c00);
        let ceiling = (self.workload.vocab_size as f64).ln() - 2.0 * REACHABILITY_MARGIN;
        let u: f64 = rng.random_range(-1.0..=1.0);
        let level = class.base_kl + class.risk_gain * (prompt_risk(&prompt.tokens) - 0.5) + class.jitter * u;
        let v = 2.0 * unit_hash(prompt.id.as_bytes()) - 1.0;
        let prefix = class.prefix_kl * (1.0 + class.prefix_jitter * v);
        let mut spec = SyntheticSpec::new(
            self.workload.vocab_size,
            Profile::Constant {
                kl: level.clamp(0.0, ceiling),
            },
            seed,
        )
        .with_prefix_kl(prefix.clamp(0.0, ceiling));
        if class.fault_rate > 0.0 && rng.random::<f64>() < class.fault_rate {
            spec = spec.with_fault(class.fault_overspend);
        }
        Ok(spec)
    }
}

impl TrajectorySampler for WorkloadSampler {
    fn sample(&self, prompt: &Prompt, index: usize) -> Result<TrajectoryLog> {
        let seed = trajectory_seed(&prompt.id, index, &self.base_seeds);
        if let Some(replay) = self.replays.get(&prompt.class) {
            return decode_trajectory(&mut replay.clone(), prompt, seed, &self.cfg);
        }
        let mut source = make_source(self.spec_for(prompt, index)?)?;
        decode_trajectory(&mut source, prompt, seed, &self.cfg)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct AuditConfig {
    pub k: f64,
    pub t_max: usize,
    pub trajectories_per_prompt: usize,
    pub base_seeds: Vec<u64>,
    pub delta_alpha: f64,
    pub hypotheses: usize,
    pub range_mode: RangeMode,
    pub master_seed: u64,
    pub workload: Workload,
    pub search: SearchConfig,
    pub min_n_floor: Option<usize>,
    pub rho_trigger: f64,
}

impl Default for AuditConfig {
    fn default() -> Self {
        Self {
            k: 3.0,
            t_max: 200,
            trajectories_per_prompt: 10,
            base_seeds: DEFAULT_BASE_SEEDS.to_vec(),
            delta_alpha: 0.05,
            hypotheses: 12,
            range_mode: RangeMode::Empirical,
            master_seed: 0,
            workload: Workload::default(),
            search: SearchConfig::default(),
            min_n_floor: None,
            rho_trigger: 0.9,
        }
    }
}

impl AuditConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.k > 0.0) || self.t_max == 0 || self.trajectories_per_prompt < 2 || self.hypotheses == 0 {
            return Err(Error::InvalidArgument(
                "k, t_max and hypotheses must be positive; trajectories_per_prompt >= 2".into(),
            ));
        }
        if self.base_seeds.is_empty() {
            return Err(Error::InvalidArgument("need at least one base seed".into()));
        }
        if self.workload.classes.iter().any(|c| c.cap == 0) {
            return Err(Error::InvalidArgument("class caps must be positive".into()));
        }
        self.workload.validate()
    }

    pub fn bank_config(&self) -> Result<BankConfig> {
        BankConfig::new(self.k, self.t_max, self.workload.prefix_window)
    }

    pub fn range_cap(&self) -> Result<f64> {
        r_worst(self.t_max, self.workload.vocab_size)
    }

    pub fn sampler(&self) -> Result<WorkloadSampler> {
        WorkloadSampler::new(self.workload.clone(), self.bank_config()?, self.base_seeds.clone())
    }

    /// Search settings tied to this run's budget, range and master seed.
    pub fn search_config(&self) -> Result<SearchConfig> {
        let mut s = self.search.clone();
        s.sequence_budget = self.k * self.t_max as f64;
        s.master_seed = self.master_seed;
        s.class = self.workload.search_class.name.clone();
        s.heldout_class = self.workload.heldout_class.name.clone();
        s.alloc.range_cap = self.range_cap()?;
        s.alloc.range_mode = self.range_mode;
        s.validate()?;
        Ok(s)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PrefixDebtStats {
    pub mean: f64,
    pub median: f64,
    pub max: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct OverlapStats {
    pub rouge_l_mean: f64,
    pub rouge_l_max: f64,
    pub jaccard5_mean: f64,
    pub jaccard5_max: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClassSummary {
    pub class: String,
    pub m: usize,
    pub mean: f64,
    pub var: f64,
    pub range: f64,
    pub max_z: f64,
    pub r: f64,
    pub r_eff: f64,
    pub u_ebb_r: f64,
    pub u_ebb_reff: f64,
    pub delta_units: f64,
    pub pass_r: bool,
    pub pass_reff: bool,
    pub prefix_debt: PrefixDebtStats,
    pub overlap: Option<OverlapStats>,
    pub failures: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Stage1Report {
    pub k: f64,
    pub t_max: usize,
    pub sequence_budget: f64,
    pub delta_adj: f64,
    pub classes: Vec<ClassSummary>,
}

fn mean(v: &[f64]) -> f64 {
    v.iter().sum::<f64>() / v.len() as f64
}

fn median(v: &[f64]) -> f64 {
    let mut s = v.to_vec();
    s.sort_by(f64::total_cmp);
    let n = s.len();
    if n % 2 == 1 {
        s[n / 2]
    } else {
        0.5 * (s[n / 2 - 1] + s[n / 2])
    }
}

fn max(v: &[f64]) -> f64 {
    v.iter().copied().fold(f64::NEG_INFINITY, f64::max)
}

/// Summarizes one class's trajectories under both range conventions.
pub fn summarize_class(
    class: &str,
    logs: &[TrajectoryLog],
    failures: usize,
    sequence_budget: f64,
    params: &EbbParams,
) -> Result<ClassSummary> {
    let spends: Vec<f64> = logs.iter().map(|l| l.z).collect();
    let moments = Moments::from_samples(&spends)?;
    let worst = ebb_upper(&moments, &params.with_mode(RangeMode::WorstCase))?;
    let tight = ebb_upper(&moments, &params.with_mode(RangeMode::Empirical))?;
    let debts: Vec<f64> = logs.iter().map(|l| l.delta_init).collect();
    let overlaps: Vec<_> = logs.iter().filter_map(|l| l.overlap).collect();
    let overlap = (!overlaps.is_empty()).then(|| {
        let r: Vec<f64> = overlaps.iter().map(|o| o.rouge_l).collect();
        let j: Vec<f64> = overlaps.iter().map(|o| o.jaccard5).collect();
        OverlapStats {
            rouge_l_mean: mean(&r),
            rouge_l_max: max(&r),
            jaccard5_mean: mean(&j),
            jaccard5_max: max(&j),
        }
    });
    Ok(ClassSummary {
        class: class.into(),
        m: moments.m,
        mean: moments.mean,
        var: moments.var,
        range: moments.range,
        max_z: max(&spends),
        r: params.range_cap,
        r_eff: tight.r_eff,
        u_ebb_r: worst.u_ebb,
        u_ebb_reff: tight.u_ebb,
        delta_units: worst.u_ebb - tight.u_ebb,
        pass_r: worst.u_ebb <= sequence_budget,
        pass_reff: tight.u_ebb <= sequence_budget,
        prefix_debt: PrefixDebtStats {
            mean: mean(&debts),
            median: median(&debts),
            max: max(&debts),
        },
        overlap,
        failures,
    })
}

pub fn write_jsonl<T: Serialize>(path: &Path, items: impl IntoIterator<Item = T>) -> Result<()> {
    let mut out = BufWriter::new(File::create(path)?);
    for item in items {
        serde_json::to_writer(&mut out, &item)?;
        out.write_all(b"\n")?;
    }
    out.flush()?;
    Ok(())
}

pub fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut out = BufWriter::new(File::create(path)?);
    serde_json::to_writer_pretty(&mut out, value)?;
    out.write_all(b"\n")?;
    out.flush()?;
    Ok(())
}

pub fn read_jsonl<T: serde::de::DeserializeOwned>(path: &Path) -> Result<Vec<T>> {
    let text = std::fs::read_to_string(path)?;
    text.lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(i, l)| {
            serde_json::from_str(l).map_err(|e| Error::Parse {
                line: i + 1,
                message: e.to_string(),
            })
        })
        .collect()
}

fn k_label(k: f64) -> String {
    format!("{k}")
}

/// Decodes every class of the fixed workload. Writes
/// `trajectories_k{k}_{class}.jsonl` and `h1_summary.json` when `out` is set.
pub fn run_stage1(config: &AuditConfig, out: Option<&Path>) -> Result<Stage1Report> {
    config.validate()?;
    let sampler = config.sampler()?;
    let delta_adj = bonferroni(config.delta_alpha, config.hypotheses);
    let params = EbbParams::with_range_cap(delta_adj, config.range_cap()?, config.range_mode)?;
    let budget = config.k * config.t_max as f64;
    let mut classes = Vec::new();
    for class in &config.workload.classes {
        let prompts = class_prompts(class, config.master_seed);
        let jobs: Vec<(usize, usize)> = (0..prompts.len())
            .flat_map(|p| (0..config.trajectories_per_prompt).map(move |i| (p, i)))
            .collect();
        let results: Vec<Result<TrajectoryLog>> = jobs
            .par_iter()
            .map(|&(p, i)| sampler.sample(&prompts[p], i))
            .collect();
        let failures = results.iter().filter(|r| r.is_err()).count();
        let logs: Vec<TrajectoryLog> = results.into_iter().filter_map(|r| r.ok()).collect();
        if let Some(dir) = out {
            write_jsonl(&dir.join(format!("trajectories_k{}_{}.jsonl", k_label(config.k), class.name)), &logs)?;
        }
        classes.push(summarize_class(&class.name, &logs, failures, budget, &params)?);
    }
    let report = Stage1Report {
        k: config.k,
        t_max: config.t_max,
        sequence_budget: budget,
        delta_adj,
        classes,
    };
    if let Some(dir) = out {
        write_json(&dir.join("h1_summary.json"), &report)?;
    }
    Ok(report)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Counterfactual {
    pub n: usize,
    pub u_ebb: f64,
    pub rho: Option<f64>,
    pub pass: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CounterfactualRow {
    pub prompt_id: String,
    pub observed: Counterfactual,
    pub projected: Counterfactual,
    pub flipped: bool,
}

/// Projects every row whose ρ exceeds `rho_trigger` to
/// `max(n, min_n_floor.unwrap_or(n_target))` trajectories, holding mean,
/// variance and `R_eff` fixed.
pub fn counterfactual_report(
    rows: &[EvalRow],
    n_target: usize,
    min_n_floor: Option<usize>,
    rho_trigger: f64,
    delta: f64,
) -> Result<Vec<CounterfactualRow>> {
    let floor = min_n_floor.unwrap_or(n_target);
    rows.iter()
        .filter(|r| r.rho.value().is_some_and(|rho| rho > rho_trigger))
        .map(|r| {
            let observed = r.summary(delta);
            let projected = project_min_n(&observed, r.n.max(floor))?;
            let make = |s: &crate::auditstats::EbbSummary| {
                let ratio = spend_ratio(s.u_ebb, r.b_eff);
                Counterfactual {
                    n: s.m,
                    u_ebb: s.u_ebb,
                    rho: ratio.rho.value(),
                    pass: ratio.certified,
                }
            };
            let (o, p) = (make(&observed), make(&projected));
            Ok(CounterfactualRow {
                prompt_id: r.prompt_id.clone(),
                observed: o,
                projected: p,
                flipped: o.pass != p.pass,
            })
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FinalReport {
    pub k: f64,
    pub sequence_budget: f64,
    pub delta: f64,
    pub generations: Vec<GenReport>,
    pub best_rho: Option<f64>,
    pub heldout_generalization_gap: Option<f64>,
    pub final_rows: Vec<EvalRow>,
    pub heldout_rows: Vec<EvalRow>,
    pub stress_rows: Vec<EvalRow>,
    pub counterfactual: Vec<CounterfactualRow>,
    pub failures: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Stage2Report {
    pub search: SearchReport,
    pub final_report: FinalReport,
}

fn pool_failures(pools: &[&AllocOutcome]) -> usize {
    pools.iter().map(|p| p.failures).sum()
}

/// Seed and held-out candidates for the search.
pub fn stage2_inputs(config: &AuditConfig) -> (Vec<Candidate>, Vec<Candidate>) {
    let w = &config.workload;
    let seeds = class_texts(&w.search_class, w.seed_prompts, "init_", config.master_seed)
        .into_iter()
        .map(|(id, text, _)| Candidate::seed(id, text))
        .collect();
    let heldout = class_texts(&w.heldout_class, config.search.heldout_pool, "heldout_", config.master_seed)
        .into_iter()
        .map(|(id, text, _)| Candidate::seed(id, text))
        .collect();
    (seeds, heldout)
}

/// Runs the adversarial search and pool evaluation. Writes the stage logs,
/// archive snapshots, pool rows and `final_report.json` when `out` is set.
pub fn run_stage2(config: &AuditConfig, out: Option<&Path>) -> Result<Stage2Report> {
    config.validate()?;
    let sampler = config.sampler()?;
    let cfg = config.search_config()?;
    let (seeds, heldout) = stage2_inputs(config);
    let search = run_search(&seeds, &heldout, &sampler, &cfg)?;
    let heldout_rows = search.heldout_pool.rows();
    let counterfactual = counterfactual_report(
        &heldout_rows,
        cfg.heldout_traj,
        config.min_n_floor,
        config.rho_trigger,
        cfg.alloc.delta,
    )?;
    let failures = search.generations.iter().map(|g| g.failures).sum::<usize>()
        + pool_failures(&[&search.final_pool, &search.heldout_pool, &search.stress_pool]);
    let final_report = FinalReport {
        k: config.k,
        sequence_budget: cfg.sequence_budget,
        delta: cfg.alloc.delta,
        generations: search.generations.clone(),
        best_rho: search.archive.best_rho,
        heldout_generalization_gap: search.heldout_generalization_gap,
        final_rows: search.final_pool.rows(),
        heldout_rows,
        stress_rows: search.stress_pool.rows(),
        counterfactual,
        failures,
    };
    if let Some(dir) = out {
        for (g, log) in search.stage_logs.iter().enumerate() {
            write_jsonl(&dir.join(format!("gen_{g:02}_stage.jsonl")), log)?;
        }
        write_json(&dir.join("archive_after_init.json"), &search.archive_after_init)?;
        write_json(&dir.join("archive_current.json"), &search.archive)?;
        write_json::<Vec<Archive>>(&dir.join("archive_history.json"), &search.archive_history)?;
        write_jsonl(&dir.join("final_validation.jsonl"), &final_report.final_rows)?;
        write_jsonl(&dir.join("heldout_validation.jsonl"), &final_report.heldout_rows)?;
        write_jsonl(&dir.join("stress_validation.jsonl"), &final_report.stress_rows)?;
        write_json(&dir.join("final_report.json"), &final_report)?;
    }
    Ok(Stage2Report { search, final_report })
}

/// Everything the figure emitters read.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReportBundle {
    pub stage1: Vec<Stage1Report>,
    pub stage2: Vec<Stage2Report>,
    pub grid: BernsteinGrid,
}

/// Grid axes of the published deterministic-term table.
pub const GRID_N: [usize; 5] = [4, 8, 12, 20, 30];
pub const GRID_R_EFF: [f64; 5] = [60.0, 90.0, 120.0, 160.0, 200.0];

impl ReportBundle {
    pub fn new(delta: f64) -> Result<Self> {
        Ok(Self {
            stage1: Vec::new(),
            stage2: Vec::new(),
            grid: bernstein_grid(&GRID_N, &GRID_R_EFF, delta)?,
        })
    }
}

pub const FIGURE_FILES: [&str; 4] = [
    "rho_vs_N.csv",
    "bernstein_vs_N.csv",
    "range_comparison.csv",
    "spend_distributions.csv",
];

/// Writes the four figure CSVs into `dir`.
pub fn emit_figures(bundle: &ReportBundle, dir: &Path) -> Result<Vec<PathBuf>> {
    let paths: Vec<PathBuf> = FIGURE_FILES.iter().map(|f| dir.join(f)).collect();

    let mut w = csv::Writer::from_path(&paths[0])?;
    w.write_record(["k", "prompt_id", "N", "rho"])?;
    for s in &bundle.stage2 {
        for r in &s.final_report.heldout_rows {
            if let Some(rho) = r.rho.value() {
                w.write_record([k_label(s.final_report.k), r.prompt_id.clone(), r.n.to_string(), rho.to_string()])?;
            }
        }
    }
    w.flush()?;

    let mut w = csv::Writer::from_path(&paths[1])?;
    w.write_record(["N", "r_eff", "value"])?;
    for (i, n) in bundle.grid.n_values.iter().enumerate() {
        for (j, r) in bundle.grid.r_eff_values.iter().enumerate() {
            w.write_record([n.to_string(), r.to_string(), bundle.grid.values[i][j].to_string()])?;
        }
    }
    w.flush()?;

    let mut w = csv::Writer::from_path(&paths[2])?;
    w.write_record(["class", "k", "U_R", "U_Reff", "delta_units"])?;
    for s in &bundle.stage1 {
        for c in &s.classes {
            w.write_record([
                c.class.clone(),
                k_label(s.k),
                c.u_ebb_r.to_string(),
                c.u_ebb_reff.to_string(),
                c.delta_units.to_string(),
            ])?;
        }
    }
    w.flush()?;

    let mut w = csv::Writer::from_path(&paths[3])?;
    w.write_record(["prompt_id", "trajectory", "Z"])?;
    for s in &bundle.stage2 {
        for e in &s.search.heldout_pool.evals {
            for (i, z) in e.samples.indices.iter().zip(&e.samples.spends) {
                w.write_record([e.prompt.id.clone(), i.to_string(), z.to_string()])?;
            }
        }
    }
    w.flush()?;
    Ok(paths)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::auditstats::{det_term, Rho};

    #[test]
    fn fnv_reference_vectors() {
        assert_eq!(fnv1a64(b""), 0xcbf2_9ce4_8422_2325);
        assert_eq!(fnv1a64(b"a"), 0xaf63_dc4c_8601_ec8c);
        assert_eq!(fnv1a64(b"foobar"), 0x8594_4171_f739_67e8);
    }

    #[test]
    fn seed_formula() {
        let id = "heldout_bookmia.13.04";
        let offset = fnv1a64(id.as_bytes()) % 100_000;
        let seeds = derive_seeds(id, 6, &DEFAULT_BASE_SEEDS).unwrap();
        assert_eq!(seeds[0], 42 + offset);
        assert_eq!(seeds[4], 43 + offset + 4);
        assert_eq!(seeds[5], 44 + offset + 5);
        assert_eq!(seeds, derive_seeds(id, 6, &DEFAULT_BASE_SEEDS).unwrap());
        assert!(derive_seeds(id, 0, &DEFAULT_BASE_SEEDS).is_err());
    }

    fn row(id: &str, n: usize, mean: f64, var: f64, r_eff: f64, b: f64, delta: f64) -> EvalRow {
        let s = crate::auditstats::EbbSummary::assemble(n, mean, var, r_eff, r_eff, delta);
        EvalRow::new(id, &s, b)
    }

    #[test]
    fn counterfactual_paths() {
        let d = 0.0033;
        let rows = [row("a", 4, 198.28, 900.0, 87.4, 593.49, d), row("b", 20, 150.0, 100.0, 30.0, 594.0, d)];
        let table = counterfactual_report(&rows, 20, None, 0.9, d).unwrap();
        assert_eq!(table.len(), 1);
        let t = &table[0];
        assert_eq!((t.observed.n, t.projected.n), (4, 20));
        assert!(!t.observed.pass && t.projected.pass && t.flipped);
        assert!(counterfactual_report(&rows, 20, None, 5.0, d).unwrap().is_empty());
        let same = counterfactual_report(&rows, 4, None, 0.9, d).unwrap();
        assert_eq!(same[0].observed, same[0].projected);
        let floored = counterfactual_report(&rows, 20, Some(8), 0.9, d).unwrap();
        assert_eq!(floored[0].projected.n, 8);
    }

    #[test]
    fn invalid_rows_are_not_projected() {
        let mut r = row("a", 4, 100.0, 10.0, 50.0, 0.0, 0.0033);
        r.rho = Rho::Invalid;
        assert!(counterfactual_report(&[r], 20, None, 0.0, 0.0033).unwrap().is_empty());
    }

    #[test]
    fn zero_divergence_stage1() {
        let mut workload = Workload::default();
        for c in &mut workload.classes {
            c.cap = 2;
            c.base_kl = 0.0;
            c.jitter = 0.0;
            c.risk_gain = 0.0;
            c.prefix_kl = 0.0;
        }
        workload.classes.truncate(2);
        let config = AuditConfig {
            t_max: 20,
            trajectories_per_prompt: 3,
            workload,
            ..AuditConfig::default()
        };
        let report = run_stage1(&config, None).unwrap();
        for c in &report.classes {
            assert_eq!(c.m, 6);
            assert_eq!(c.mean, 0.0);
            assert_eq!(c.u_ebb_reff, det_term(1.0, 6, report.delta_adj));
        }
    }

    #[test]
    fn stage1_counts_and_files() {
        let mut workload = Workload::default();
        workload.classes.truncate(2);
        for c in &mut workload.classes {
            c.cap = 3;
        }
        let config = AuditConfig {
            t_max: 30,
            trajectories_per_prompt: 4,
            workload,
            ..AuditConfig::default()
        };
        let dir = tempfile::tempdir().unwrap();
        let report = run_stage1(&config, Some(dir.path())).unwrap();
        assert_eq!(report.classes[0].m, 12);
        assert!(report.classes[0].overlap.is_none());
        assert!(report.classes[1].overlap.is_some());
        assert!(report.classes[0].u_ebb_r >= report.classes[0].u_ebb_reff);
        let logs: Vec<TrajectoryLog> = read_jsonl(&dir.path().join("trajectories_k3_neutral.jsonl")).unwrap();
        assert_eq!(logs.len(), 12);
        let again = run_stage1(&config, None).unwrap();
        assert_eq!(report, again);
    }

    #[test]
    fn empty_bundle_figures_have_headers() {
        let dir = tempfile::tempdir().unwrap();
        let bundle = ReportBundle {
            stage1: vec![],
            stage2: vec![],
            grid: bernstein_grid(&[4], &[40.0], 0.0033).unwrap(),
        };
        let paths = emit_figures(&bundle, dir.path()).unwrap();
        let rho = std::fs::read_to_string(&paths[0]).unwrap();
        assert_eq!(rho.trim(), "k,prompt_id,N,rho");
        let spend = std::fs::read_to_string(&paths[3]).unwrap();
        assert_eq!(spend.trim(), "prompt_id,trajectory,Z");
    }

    #[test]
    fn workload_validation() {
        let mut w = Workload::default();
        w.classes[1].name = "neutral".into();
        assert!(w.validate().is_err());
        let mut w = Workload::default();
        w.classes[0].fault_rate = 2.0;
        assert!(w.validate().is_err());
    }
}
