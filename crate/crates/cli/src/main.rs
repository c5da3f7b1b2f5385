use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::Instant;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};
use tba_core::dataset::{
    self, read_meta, read_phase, validate_split, write_split, DataConfig, Phase, SplitKind,
    SplitMeta,
};
use tba_core::diffcore::load_checkpoint;
use tba_core::evalkit::{
    breakdown_by_referent, evaluate, read_results_csv, summarize, write_results_csv, RunResult,
};
use tba_core::experiment::{
    model_grad_check, run_experiment, write_tables, ArmSpec, ExperimentConfig, ABLATION_ARMS,
};
use tba_core::language::Vocabulary;
use tba_core::model::{ModelError, Network, Profile, Variant, Weighting};
use tba_core::trainer::{self, read_model_config, Settings, TrainConfig, TRAIN_CONFIG_FILE};

#[derive(Parser)]
#[command(
    name = "tba",
    version,
    about = "Grid-world command following: data, training, evaluation and reports"
)]
struct Cli {
    #[command(subcommand)]
    command: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Generate train/dev/test JSONL files for one split.
    Generate(GenerateArgs),
    /// Check every record of a generated split against its constraints.
    Validate(ValidateArgs),
    /// Train one model on a generated split.
    Train(TrainArgs),
    /// Evaluate a trained run on one phase of a split.
    Eval(EvalArgs),
    /// Finite-difference check of the full model's loss gradient.
    Gradcheck(GradcheckArgs),
    /// Aggregate results CSVs into the comparison tables.
    Report(ReportArgs),
    /// All variants on splits A, B, C and E over three seeds at micro scale.
    ReproMicro(ReproArgs),
}

#[derive(Args)]
struct Common {
    #[arg(long, default_value_t = 1)]
    workers: usize,
    #[arg(long, default_value = "micro", value_parser = parse_profile)]
    profile: Profile,
}

#[derive(Args)]
struct GenerateArgs {
    #[arg(long, value_parser = parse_split)]
    split: SplitKind,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long)]
    out: PathBuf,
    /// JSON data config ({"d", "min_objects", "max_objects", "sizes": {...}}); defaults follow --profile.
    #[arg(long)]
    config: Option<PathBuf>,
    #[command(flatten)]
    common: Common,
}

#[derive(Args)]
struct ValidateArgs {
    dir: PathBuf,
    #[arg(long, value_parser = parse_split)]
    split: SplitKind,
}

#[derive(Args)]
struct TrainArgs {
    /// Directory written by `generate`.
    #[arg(long)]
    data: PathBuf,
    #[arg(long, value_parser = parse_variant)]
    variant: Variant,
    /// Defaults to `on` for world/both and `ablated` otherwise.
    #[arg(long, value_parser = parse_weighting)]
    weighting: Option<Weighting>,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long)]
    out: PathBuf,
    /// JSON settings: dropout rates, aux_weight, learning_rate, iterations, batch_size, eval_every.
    #[arg(long)]
    config: Option<PathBuf>,
    #[command(flatten)]
    common: Common,
}

#[derive(Args)]
struct EvalArgs {
    /// Directory written by `train`.
    #[arg(long)]
    run: PathBuf,
    #[arg(long)]
    data: PathBuf,
    #[arg(long, default_value = "test", value_parser = parse_phase)]
    phase: Phase,
    #[arg(long, default_value_t = 1)]
    workers: usize,
    /// Writes `results.csv` and `referents.csv` here.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct GradcheckArgs {
    #[arg(long, default_value_t = 1e-5)]
    eps: f64,
    #[arg(long, default_value_t = 60)]
    samples: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Check only this variant; by default world and both with weighting on.
    #[arg(long, value_parser = parse_variant)]
    variant: Option<Variant>,
    #[arg(long, value_parser = parse_weighting)]
    weighting: Option<Weighting>,
    #[arg(long, default_value_t = 1e-3)]
    tolerance: f64,
}

#[derive(Args)]
struct ReportArgs {
    /// One or more results CSVs.
    #[arg(required = true)]
    results: Vec<PathBuf>,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct ReproArgs {
    #[arg(long)]
    out: PathBuf,
    #[arg(long, value_delimiter = ',', default_values_t = [0u64, 1, 2])]
    seed: Vec<u64>,
    #[arg(long, value_delimiter = ',', value_parser = parse_split)]
    split: Vec<SplitKind>,
    /// Restrict to these variants (default weighting each).
    #[arg(long, value_delimiter = ',', value_parser = parse_variant)]
    variant: Vec<Variant>,
    /// Also train world and both with the reweighting ablated.
    #[arg(long)]
    ablation: bool,
    #[arg(long)]
    config: Option<PathBuf>,
    #[command(flatten)]
    common: Common,
}

fn parse_split(s: &str) -> Result<SplitKind, String> {
    s.parse()
}

fn parse_variant(s: &str) -> Result<Variant, String> {
    s.parse().map_err(|e: ModelError| e.to_string())
}

fn parse_weighting(s: &str) -> Result<Weighting, String> {
    s.parse().map_err(|e: ModelError| e.to_string())
}

fn parse_profile(s: &str) -> Result<Profile, String> {
    s.parse().map_err(|e: ModelError| e.to_string())
}

fn parse_phase(s: &str) -> Result<Phase, String> {
    Phase::ALL
        .into_iter()
        .find(|p| p.name() == s)
        .ok_or_else(|| format!("unknown phase {s:?} (train, dev or test)"))
}

fn default_weighting(v: Variant) -> Weighting {
    if v.predicts_first() {
        Weighting::On
    } else {
        Weighting::Ablated
    }
}

fn load_settings(path: Option<&Path>) -> Result<Settings> {
    match path {
        Some(p) => Ok(Settings::from_json_file(p)?),
        None => Ok(Settings::default()),
    }
}

fn generate(a: GenerateArgs) -> Result<()> {
    let cfg = match &a.config {
        Some(p) => {
            let text = fs::read_to_string(p).with_context(|| format!("reading {}", p.display()))?;
            serde_json::from_str::<DataConfig>(&text)
                .with_context(|| format!("parsing {}", p.display()))?
        }
        None => DataConfig::for_profile(a.common.profile),
    };
    let workers = a.common.workers.max(1);
    let split = dataset::generate_split(a.split, &cfg, a.seed, workers)?;
    write_split(
        &a.out,
        &split,
        &SplitMeta {
            split: a.split,
            seed: a.seed,
            workers,
            config: cfg,
        },
    )?;
    println!(
        "split {} seed {}: {} train, {} dev, {} test examples -> {}",
        a.split.letter(),
        a.seed,
        split.train.len(),
        split.dev.len(),
        split.test.len(),
        a.out.display()
    );
    Ok(())
}

fn validate(a: ValidateArgs) -> Result<()> {
    let report = validate_split(&a.dir, a.split)?;
    for (phase, r) in &report.phases {
        println!(
            "{phase}: {} records, {} violations, {} parse errors",
            r.records,
            r.violations.len(),
            r.parse_errors.len()
        );
        for v in r.violations.iter().chain(&r.parse_errors).take(10) {
            println!("  line {}: {}", v.line, v.message);
        }
        for w in &r.warnings {
            println!("  warning: {w}");
        }
    }
    let n = report.total_violations();
    println!("total: {} records, {n} violations", report.total_records());
    if n > 0 {
        bail!("{n} violations in {}", a.dir.display());
    }
    Ok(())
}

fn train(a: TrainArgs) -> Result<()> {
    let meta = read_meta(&a.data)?;
    let train_set = read_phase(&a.data, Phase::Train)?;
    let dev_set = read_phase(&a.data, Phase::Dev)?;
    let arm = ArmSpec {
        variant: a.variant,
        weighting: a.weighting.unwrap_or_else(|| default_weighting(a.variant)),
        profile: a.common.profile,
        seed: a.seed,
        settings: load_settings(a.config.as_deref())?,
        workers: a.common.workers,
    };
    let vocab = Vocabulary::commands();
    let (model, tc) = arm.configs(&vocab, meta.config.d)?;
    let start = Instant::now();
    let o = trainer::train(&train_set, &dev_set, &vocab, &model, &tc, Some(&a.out))?;
    let last = o.metrics.last().map(|r| r.loss).unwrap_or(f64::NAN);
    println!(
        "trained {} iterations in {:.1?}; final loss {last:.4}",
        tc.iterations,
        start.elapsed()
    );
    let ta = o
        .best_dev_target_acc
        .map(|t| format!(" target_accuracy={t:.4}"))
        .unwrap_or_default();
    println!(
        "best checkpoint: step {} dev exact_match={:.4}{ta} -> {}",
        o.best_step,
        o.best_dev_exact_match,
        a.out.display()
    );
    Ok(())
}

fn eval(a: EvalArgs) -> Result<()> {
    let model = read_model_config(&a.run)?;
    let tc_path = a.run.join(TRAIN_CONFIG_FILE);
    let tc: TrainConfig = serde_json::from_str(
        &fs::read_to_string(&tc_path).with_context(|| format!("reading {}", tc_path.display()))?,
    )
    .with_context(|| format!("parsing {}", tc_path.display()))?;
    let (store, _) = load_checkpoint(&a.run.join(trainer::BEST_DIR))?;
    let net = Network::for_store(model.clone(), &store)?;
    let meta = read_meta(&a.data)?;
    let examples = read_phase(&a.data, a.phase)?;
    let results = evaluate(
        &net,
        &store,
        &examples,
        &Vocabulary::commands(),
        tc.eval_batch_size,
        a.workers,
    )?;
    let s = summarize(&results);
    let ta = s
        .target_accuracy
        .map(|t| format!("{t:.4}"))
        .unwrap_or_else(|| "n/a".into());
    println!(
        "{} examples: exact_match={:.4} target_accuracy={ta}",
        s.n, s.exact_match
    );
    if let Some(out) = a.out {
        fs::create_dir_all(&out).with_context(|| format!("creating {}", out.display()))?;
        let row = RunResult {
            split: meta.split,
            variant: model.variant,
            weighting: model.weighting,
            seed: tc.seed,
            exact_match: 100.0 * s.exact_match,
            target_accuracy: s.target_accuracy.map(|t| 100.0 * t),
        };
        write_results_csv(&out.join("results.csv"), &[row])?;
        let mut csv = String::from("referent,count,exact_match\n");
        for r in breakdown_by_referent(&results) {
            csv += &format!("{},{},{}\n", r.referent, r.count, r.exact_match);
        }
        let p = out.join("referents.csv");
        fs::write(&p, csv).with_context(|| format!("writing {}", p.display()))?;
    }
    Ok(())
}

fn gradcheck(a: GradcheckArgs) -> Result<()> {
    let arms: Vec<(Variant, Weighting)> = match a.variant {
        Some(v) => vec![(v, a.weighting.unwrap_or_else(|| default_weighting(v)))],
        None => vec![
            (Variant::World, Weighting::On),
            (Variant::Both, Weighting::On),
        ],
    };
    let mut worst = 0.0f64;
    for (v, w) in arms {
        let r = model_grad_check(v, w, a.eps, a.samples, a.seed)?;
        println!(
            "{v} ({w}): {} coordinates, max relative error {:.3e}",
            r.coordinates, r.max_rel_error
        );
        worst = worst.max(r.max_rel_error);
    }
    println!(
        "max relative error {worst:.3e} (tolerance {:.0e})",
        a.tolerance
    );
    if worst.is_nan() || worst >= a.tolerance {
        bail!("gradient check failed: {worst:.3e} >= {:.0e}", a.tolerance);
    }
    Ok(())
}

fn report(a: ReportArgs) -> Result<()> {
    let mut results = Vec::new();
    for p in &a.results {
        results.extend(read_results_csv(p)?);
    }
    let rep = write_tables(&a.out, &results, &[])?;
    print!("{}", tba_core::evalkit::render_text(&rep));
    Ok(())
}

fn repro_micro(a: ReproArgs) -> Result<()> {
    let mut cfg = ExperimentConfig::micro();
    cfg.profile = a.common.profile;
    cfg.workers = a.common.workers.max(1);
    cfg.seeds = a.seed;
    if !a.split.is_empty() {
        cfg.splits = a.split;
    }
    if !a.variant.is_empty() {
        cfg.arms = a
            .variant
            .iter()
            .map(|&v| (v, default_weighting(v)))
            .collect();
    }
    if a.ablation {
        cfg.arms.extend(ABLATION_ARMS);
    }
    cfg.settings = load_settings(a.config.as_deref())?;
    let start = Instant::now();
    let o = run_experiment(&cfg, &a.out, |r| {
        let ta = r
            .target_accuracy
            .map(|t| format!("{t:.2}"))
            .unwrap_or_else(|| "n/a".into());
        eprintln!(
            "[{:>7.1?}] split {} {} ({}) seed {}: exact_match={:.2} target_accuracy={ta}",
            start.elapsed(),
            r.split.letter(),
            r.variant,
            r.weighting,
            r.seed,
            r.exact_match
        );
    })?;
    print!("{}", tba_core::evalkit::render_text(&o.report));
    println!("tables written to {}", a.out.display());
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let res = match cli.command {
        Cmd::Generate(a) => generate(a),
        Cmd::Validate(a) => validate(a),
        Cmd::Train(a) => train(a),
        Cmd::Eval(a) => eval(a),
        Cmd::Gradcheck(a) => gradcheck(a),
        Cmd::Report(a) => report(a),
        Cmd::ReproMicro(a) => repro_micro(a),
    };
    match res {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}
