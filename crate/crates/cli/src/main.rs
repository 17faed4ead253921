use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};

use knaf_audit::auditstats::{bernstein_grid, project_min_n, EbbSummary, EvalRow, RangeMode};
use knaf_audit::decoder::{decode_trajectory, BankConfig, Prompt};
use knaf_audit::harness::{
    counterfactual_report, emit_figures, read_jsonl, run_stage1, run_stage2, write_json, AuditConfig, ReportBundle,
    Workload,
};
use knaf_audit::modelsim::{make_source, replay_source, RecordingSource, SyntheticSpec};

/// Budget-accounting audit for KL-constrained anchored decoding.
///
/// Trajectory seeds are `base_seeds[i % 3] + (FNV-1a-64(prompt_id) % 100000) + i`
/// with base seeds 42, 43, 44.
#[derive(Parser)]
#[command(name = "knaf-audit", version, about, long_about = None)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Fixed-workload decoding with per-class proxy summaries.
    Stage1(RunArgs),
    /// Adversarial search with final, held-out and stress pools.
    Stage2(RunArgs),
    /// Re-evaluate a proxy at a larger trajectory count.
    ProjectMinN(ProjectArgs),
    /// Deterministic-term grid as CSV.
    Grid(GridArgs),
    /// Figure CSVs from a saved report bundle.
    Figures(FiguresArgs),
    /// Record or replay per-position distribution pairs.
    #[command(subcommand)]
    Replay(ReplayCommand),
}

#[derive(Args)]
struct RunArgs {
    #[arg(long, default_value_t = 3.0)]
    k: f64,
    #[arg(long, default_value_t = 200)]
    t_max: usize,
    #[arg(long, default_value_t = 10)]
    trajectories_per_prompt: usize,
    /// Reporting level for the search pools.
    #[arg(long, default_value_t = 0.0033)]
    delta: f64,
    #[arg(long, default_value = "empirical")]
    range_mode: RangeMode,
    #[arg(long)]
    min_n_floor: Option<usize>,
    #[arg(long, default_value_t = 0.9)]
    rho_trigger: f64,
    #[arg(long, default_value_t = 0)]
    master_seed: u64,
    /// Workload JSON; the built-in six-class workload when omitted.
    #[arg(long)]
    workload: Option<PathBuf>,
    #[arg(long, default_value = "out")]
    out: PathBuf,
}

impl RunArgs {
    fn config(&self) -> Result<AuditConfig> {
        let workload = match &self.workload {
            Some(p) => Workload::load(p).with_context(|| format!("reading workload {}", p.display()))?,
            None => Workload::default(),
        };
        let mut config = AuditConfig {
            k: self.k,
            t_max: self.t_max,
            trajectories_per_prompt: self.trajectories_per_prompt,
            range_mode: self.range_mode,
            master_seed: self.master_seed,
            workload,
            min_n_floor: self.min_n_floor,
            rho_trigger: self.rho_trigger,
            ..AuditConfig::default()
        };
        config.search.alloc.delta = self.delta;
        Ok(config)
    }
}

#[derive(Args)]
struct ProjectArgs {
    /// Validation rows (JSONL); emits a counterfactual table.
    #[arg(long, conflicts_with_all = ["n", "mean", "var", "r_eff"])]
    rows: Option<PathBuf>,
    #[arg(long)]
    n: Option<usize>,
    #[arg(long)]
    mean: Option<f64>,
    #[arg(long)]
    var: Option<f64>,
    #[arg(long)]
    r_eff: Option<f64>,
    #[arg(long, default_value_t = 20)]
    n_target: usize,
    #[arg(long)]
    min_n_floor: Option<usize>,
    #[arg(long, default_value_t = 0.9)]
    rho_trigger: f64,
    #[arg(long, default_value_t = 0.0033)]
    delta: f64,
}

#[derive(Args)]
struct GridArgs {
    #[arg(long, value_delimiter = ',', default_value = "4,8,12,20,30")]
    n: Vec<usize>,
    #[arg(long, value_delimiter = ',', default_value = "60,90,120,160,200")]
    r_eff: Vec<f64>,
    #[arg(long, default_value_t = 0.0033)]
    delta: f64,
}

#[derive(Args)]
struct FiguresArgs {
    /// Report bundle JSON.
    #[arg(long)]
    bundle: PathBuf,
    #[arg(long, default_value = "out")]
    out: PathBuf,
}

#[derive(Subcommand)]
enum ReplayCommand {
    /// Decode one trajectory from a synthetic spec and save its pairs.
    Record {
        /// SyntheticSpec JSON.
        #[arg(long)]
        spec: PathBuf,
        #[arg(long)]
        log: PathBuf,
        #[command(flatten)]
        decode: DecodeArgs,
    },
    /// Decode one trajectory from a saved pair stream.
    Run {
        #[arg(long)]
        log: PathBuf,
        #[command(flatten)]
        decode: DecodeArgs,
    },
}

#[derive(Args)]
struct DecodeArgs {
    #[arg(long, default_value_t = 3.0)]
    k: f64,
    #[arg(long, default_value_t = 200)]
    t_max: usize,
    #[arg(long, default_value_t = 8)]
    prefix_window: usize,
    #[arg(long, default_value_t = 42)]
    seed: u64,
    /// Prompt text; only its length matters to synthetic sources.
    #[arg(long, default_value = "complete the prefix of the story")]
    prompt: String,
}

impl DecodeArgs {
    fn setup(&self) -> Result<(BankConfig, Prompt)> {
        Ok((
            BankConfig::new(self.k, self.t_max, self.prefix_window)?,
            Prompt::from_text("replay", "replay", &self.prompt),
        ))
    }
}

fn ensure_dir(dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))
}

fn print_json<T: serde::Serialize>(value: &T) -> Result<()> {
    println!("{}", serde_json::to_string_pretty(value)?);
    Ok(())
}

fn main() -> Result<()> {
    match Cli::parse().command {
        Command::Stage1(args) => {
            let config = args.config()?;
            ensure_dir(&args.out)?;
            let report = run_stage1(&config, Some(&args.out))?;
            let mut bundle = ReportBundle::new(config.search.alloc.delta)?;
            bundle.stage1.push(report);
            write_json(&args.out.join("bundle_stage1.json"), &bundle)?;
            emit_figures(&bundle, &args.out)?;
            for c in &bundle.stage1[0].classes {
                println!(
                    "{:<14} M={:<5} mean={:>8.2} var={:>9.2} U(R)={:>8.2} U(Reff)={:>8.2}",
                    c.class, c.m, c.mean, c.var, c.u_ebb_r, c.u_ebb_reff
                );
            }
        }
        Command::Stage2(args) => {
            let config = args.config()?;
            ensure_dir(&args.out)?;
            let report = run_stage2(&config, Some(&args.out))?;
            let mut bundle = ReportBundle::new(config.search.alloc.delta)?;
            bundle.stage2.push(report);
            write_json(&args.out.join("bundle_stage2.json"), &bundle)?;
            emit_figures(&bundle, &args.out)?;
            let f = &bundle.stage2[0].final_report;
            for g in &f.generations {
                println!(
                    "gen {} raw={} dedup={} len_ok={} screen={} med={} <0.9K={} topup={} best_rho={:.4}",
                    g.generation, g.raw, g.dedup, g.len_ok, g.screen, g.med, g.below_09k, g.topup, g.best_rho
                );
            }
            if let Some(gap) = f.heldout_generalization_gap {
                println!("heldout_generalization_gap={gap:.4}");
            }
        }
        Command::ProjectMinN(args) => {
            if let Some(path) = &args.rows {
                let rows: Vec<EvalRow> = read_jsonl(path)?;
                let table = counterfactual_report(&rows, args.n_target, args.min_n_floor, args.rho_trigger, args.delta)?;
                print_json(&table)?;
            } else {
                let (Some(n), Some(mean), Some(var), Some(r_eff)) = (args.n, args.mean, args.var, args.r_eff) else {
                    bail!("pass --rows, or all of --n --mean --var --r-eff");
                };
                let observed = EbbSummary::assemble(n, mean, var, r_eff, r_eff, args.delta);
                let target = args.min_n_floor.unwrap_or(args.n_target).max(n);
                print_json(&project_min_n(&observed, target)?)?;
            }
        }
        Command::Grid(args) => {
            let grid = bernstein_grid(&args.n, &args.r_eff, args.delta)?;
            println!("N,r_eff,value");
            for (i, n) in grid.n_values.iter().enumerate() {
                for (j, r) in grid.r_eff_values.iter().enumerate() {
                    println!("{n},{r},{}", grid.values[i][j]);
                }
            }
        }
        Command::Figures(args) => {
            let bundle: ReportBundle = serde_json::from_str(&fs::read_to_string(&args.bundle)?)?;
            ensure_dir(&args.out)?;
            for p in emit_figures(&bundle, &args.out)? {
                println!("{}", p.display());
            }
        }
        Command::Replay(ReplayCommand::Record { spec, log, decode }) => {
            let spec: SyntheticSpec = serde_json::from_str(&fs::read_to_string(&spec)?)?;
            let (cfg, prompt) = decode.setup()?;
            let mut recorder = RecordingSource::new(make_source(spec)?);
            let traj = decode_trajectory(&mut recorder, &prompt, decode.seed, &cfg)?;
            recorder.write_jsonl(std::io::BufWriter::new(fs::File::create(&log)?))?;
            print_json(&traj)?;
        }
        Command::Replay(ReplayCommand::Run { log, decode }) => {
            let (cfg, prompt) = decode.setup()?;
            let mut source = replay_source(&log)?;
            print_json(&decode_trajectory(&mut source, &prompt, decode.seed, &cfg)?)?;
        }
    }
    Ok(())
}
