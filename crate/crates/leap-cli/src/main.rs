//! Operator surface for exit-aware distillation experiments. Subcommands
//! cover every stage (data synthesis, teacher training, distillation,
//! evaluation, diagnostics, sweeps, latency) plus a single `reproduce`
//! command that runs the whole pipeline and writes the comparison tables.
//!
//! One TOML config file drives everything; flags override file values, and
//! built-in desk-scale defaults apply when no file is given. The output
//! directory comes from `--out`, then the `LEAP_OUT_DIR` environment
//! variable, then `./leap-out`. Identical config and seed produce
//! byte-identical outputs except for measured wall-clock numbers and the
//! `run_meta.json` sidecar.

use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};

use leap_core::corpus::{self, CorpusSplit, SyntheticCorpus};
use leap_core::diagnostics;
use leap_core::encoder::EncoderModel;
use leap_core::experiment::{self, EvalSet, ExperimentConfig};
use leap_core::losses::LossMask;
use leap_core::metrics::{self, ParetoRow};
use leap_core::train::{self, AblationRow, BetaRow, TeacherCache};
use leap_core::{bench, EncoderModel64};

const OUT_DIR_ENV: &str = "LEAP_OUT_DIR";
const DEFAULT_OUT_DIR: &str = "leap-out";
const DEFAULT_SEED: u64 = 17;

/// Train, evaluate, and benchmark compact text encoders that exit early
/// once consecutive layer embeddings converge.
#[derive(Parser, Debug)]
#[command(name = "leap", version, propagate_version = true)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Generate the synthetic corpus and scored pairs, then audit them.
    GenData(GenDataArgs),
    /// Train the teacher encoder and save its checkpoint.
    TrainTeacher(TrainTeacherArgs),
    /// Distill a student from a trained teacher under a chosen loss mask.
    Distill(DistillArgs),
    /// Evaluate a student checkpoint: quality, exit behavior, per-layer
    /// curves, and the exit-layer viability table.
    Evaluate(EvaluateArgs),
    /// Run the exit-compatibility diagnostics and deployment checklist on
    /// a checkpoint; exits nonzero when the verdict is incompatible.
    Diagnose(DiagnoseArgs),
    /// Sweep the exit threshold and report quality against expected depth.
    Pareto(ParetoArgs),
    /// Distill once per loss configuration and compare exit behavior.
    Ablate(AblateArgs),
    /// Distill once per exit-loss weight and compare exit behavior.
    BetaSweep(BetaSweepArgs),
    /// Measure wall-clock latency of full-depth versus early-exit
    /// inference.
    Bench(BenchArgs),
    /// Run the whole pipeline: corpus, teacher, both students, tables,
    /// diagnostics, and latency.
    Reproduce(ReproduceArgs),
}

/// Options shared by every subcommand.
#[derive(Args, Debug, Clone)]
struct Common {
    /// TOML experiment config; desk-scale defaults when omitted.
    #[arg(long, value_name = "FILE")]
    config: Option<PathBuf>,

    /// Output directory for artifacts (overrides LEAP_OUT_DIR).
    #[arg(long, value_name = "DIR")]
    out: Option<PathBuf>,

    /// Master seed; every stage seed is re-derived from it.
    #[arg(long)]
    seed: Option<u64>,
}

#[derive(Args, Debug)]
struct GenDataArgs {
    #[command(flatten)]
    common: Common,

    /// Number of sentences to synthesize.
    #[arg(long)]
    sentences: Option<usize>,

    /// Number of scored sentence pairs.
    #[arg(long)]
    pairs: Option<usize>,

    /// Vocabulary size.
    #[arg(long)]
    vocab: Option<usize>,

    /// Number of latent topics behind the corpus.
    #[arg(long)]
    topics: Option<usize>,
}

#[derive(Args, Debug)]
struct TrainTeacherArgs {
    #[command(flatten)]
    common: Common,

    /// Training epochs for the teacher.
    #[arg(long)]
    epochs: Option<usize>,
}

#[derive(Args, Debug)]
#[command(group(
    clap::ArgGroup::new("mode").required(true).multiple(false).args(["leap", "baseline", "mask"])
))]
struct DistillArgs {
    #[command(flatten)]
    common: Common,

    /// Train with the full loss, exit objective included.
    #[arg(long)]
    leap: bool,

    /// Train with the exit and refinement terms masked off.
    #[arg(long)]
    baseline: bool,

    /// Comma-separated loss components to enable on top of the
    /// final-embedding term: inter, exit, contrast, late, redund.
    #[arg(long, value_delimiter = ',', value_name = "COMPONENTS")]
    mask: Option<Vec<String>>,

    /// Distillation epochs.
    #[arg(long)]
    epochs: Option<usize>,

    /// Weight on the student-side exit objective.
    #[arg(long)]
    beta: Option<f64>,

    /// Teacher checkpoint (default: <out>/teacher.json).
    #[arg(long, value_name = "FILE")]
    teacher: Option<PathBuf>,

    /// Label used in output file names (default: leap, baseline, or
    /// custom, matching the chosen mode).
    #[arg(long)]
    label: Option<String>,
}

#[derive(Args, Debug)]
struct EvaluateArgs {
    #[command(flatten)]
    common: Common,

    /// Student checkpoint to evaluate.
    #[arg(long, value_name = "FILE")]
    student: PathBuf,

    /// Label used in output file names (default: derived from the
    /// checkpoint file name).
    #[arg(long)]
    label: Option<String>,
}

#[derive(Args, Debug)]
struct DiagnoseArgs {
    #[command(flatten)]
    common: Common,

    /// Checkpoint to diagnose.
    #[arg(long, value_name = "FILE")]
    student: PathBuf,

    /// Checklist reference layer (default: the target layer recorded in
    /// <out>/summary.json when present, else one past the minimum exit
    /// layer).
    #[arg(long)]
    target_layer: Option<usize>,

    /// Checklist floor on similarity to the final embedding.
    #[arg(long)]
    min_sim: Option<f64>,

    /// Checklist floor on neighborhood overlap with the final layer.
    #[arg(long)]
    min_nn10: Option<f64>,

    /// Checklist floor on the cumulative exit rate at the target layer.
    #[arg(long)]
    min_exit_rate: Option<f64>,

    /// Label used in output file names (default: derived from the
    /// checkpoint file name).
    #[arg(long)]
    label: Option<String>,
}

#[derive(Args, Debug)]
struct ParetoArgs {
    #[command(flatten)]
    common: Common,

    /// Student checkpoint to sweep.
    #[arg(long, value_name = "FILE")]
    student: PathBuf,

    /// Comma-separated exit thresholds to sweep, strictly ascending.
    #[arg(long, value_delimiter = ',', value_name = "THETAS")]
    grid: Option<Vec<f64>>,

    /// Layer whose cumulative exit rate is reported per threshold
    /// (default: as in diagnose).
    #[arg(long)]
    ref_layer: Option<usize>,
}

#[derive(Args, Debug)]
struct AblateArgs {
    #[command(flatten)]
    common: Common,

    /// Distillation epochs per loss configuration (default: config value).
    #[arg(long)]
    epochs: Option<usize>,

    /// Teacher checkpoint (default: <out>/teacher.json).
    #[arg(long, value_name = "FILE")]
    teacher: Option<PathBuf>,
}

#[derive(Args, Debug)]
struct BetaSweepArgs {
    #[command(flatten)]
    common: Common,

    /// Comma-separated exit-loss weights to train with.
    #[arg(long, value_delimiter = ',', default_value = "0.1,0.4,0.8")]
    betas: Vec<f64>,

    /// Distillation epochs per weight (default: config value).
    #[arg(long)]
    epochs: Option<usize>,

    /// Teacher checkpoint (default: <out>/teacher.json).
    #[arg(long, value_name = "FILE")]
    teacher: Option<PathBuf>,
}

#[derive(Args, Debug)]
struct BenchArgs {
    #[command(flatten)]
    common: Common,

    /// Student checkpoint to time.
    #[arg(long, value_name = "FILE")]
    student: PathBuf,

    /// Comma-separated batch sizes to measure.
    #[arg(long, value_delimiter = ',', value_name = "SIZES")]
    batch_sizes: Option<Vec<usize>>,
}

#[derive(Args, Debug)]
struct ReproduceArgs {
    #[command(flatten)]
    common: Common,

    /// After the run, judge it against the built-in quality gates and
    /// exit nonzero if any fail.
    #[arg(long)]
    check: bool,
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli.command) {
        Ok(code) => code,
        Err(err) => {
            eprintln!("error: {err:#}");
            ExitCode::FAILURE
        }
    }
}

fn run(command: Command) -> Result<ExitCode> {
    match command {
        Command::GenData(args) => cmd_gen_data(args),
        Command::TrainTeacher(args) => cmd_train_teacher(args),
        Command::Distill(args) => cmd_distill(args),
        Command::Evaluate(args) => cmd_evaluate(args),
        Command::Diagnose(args) => cmd_diagnose(args),
        Command::Pareto(args) => cmd_pareto(args),
        Command::Ablate(args) => cmd_ablate(args),
        Command::BetaSweep(args) => cmd_beta_sweep(args),
        Command::Bench(args) => cmd_bench(args),
        Command::Reproduce(args) => cmd_reproduce(args),
    }
}

/// Resolve the experiment config (file, then flag overrides) and the
/// output directory (flag, then environment, then default).
fn resolve(common: &Common) -> Result<(ExperimentConfig, PathBuf)> {
    let mut cfg = match &common.config {
        Some(path) => {
            let text = fs::read_to_string(path)
                .with_context(|| format!("reading config {}", path.display()))?;
            toml::from_str::<ExperimentConfig>(&text)
                .with_context(|| format!("parsing config {}", path.display()))?
        }
        None => ExperimentConfig::desk_default(DEFAULT_SEED),
    };
    if let Some(seed) = common.seed {
        cfg.reseed(seed);
    }
    let out = common
        .out
        .clone()
        .or_else(|| std::env::var_os(OUT_DIR_ENV).map(PathBuf::from))
        .unwrap_or_else(|| PathBuf::from(DEFAULT_OUT_DIR));
    fs::create_dir_all(&out)
        .with_context(|| format!("creating output directory {}", out.display()))?;
    Ok((cfg, out))
}

/// Record the fully resolved config next to the artifacts it produced.
fn write_config_used(cfg: &ExperimentConfig, out: &Path) -> Result<()> {
    let text = toml::to_string_pretty(cfg).context("serializing resolved config")?;
    fs::write(out.join("config_used.toml"), text)?;
    Ok(())
}

fn load_corpus(cfg: &ExperimentConfig, out: &Path) -> Result<SyntheticCorpus> {
    SyntheticCorpus::load(
        &out.join("corpus.jsonl"),
        &out.join("pairs.csv"),
        cfg.corpus.vocab_size,
    )
    .with_context(|| {
        format!("loading corpus from {} (run `leap gen-data` first)", out.display())
    })
}

fn load_model(path: &Path) -> Result<EncoderModel64> {
    EncoderModel::<f64>::load_weights(path)
        .with_context(|| format!("loading checkpoint {}", path.display()))
}

fn split_pairs(cfg: &ExperimentConfig, corpus: &SyntheticCorpus) -> Result<CorpusSplit> {
    Ok(corpus::split(corpus, cfg.split_fractions, cfg.seed)?)
}

fn held_out_eval_set(cfg: &ExperimentConfig, corpus: &SyntheticCorpus) -> Result<EvalSet> {
    let split = split_pairs(cfg, corpus)?;
    Ok(experiment::eval_set(corpus, &split.test, cfg.max_eval_sentences)?)
}

/// Default checklist layer: whatever a finished pipeline run in this
/// output directory chose, else one past the minimum exit layer.
fn default_target_layer(cfg: &ExperimentConfig, out: &Path, depth: usize) -> usize {
    let fallback = (cfg.policy.l_min + 1).min(depth - 1);
    let Ok(text) = fs::read_to_string(out.join("summary.json")) else {
        return fallback;
    };
    serde_json::from_str::<serde_json::Value>(&text)
        .ok()
        .and_then(|v| v.get("target_layer").and_then(|t| t.as_u64()))
        .map(|t| t as usize)
        .unwrap_or(fallback)
}

fn checkpoint_label(explicit: Option<String>, path: &Path) -> String {
    explicit.unwrap_or_else(|| {
        let stem = path.file_stem().and_then(|s| s.to_str()).unwrap_or("student");
        stem.strip_prefix("student_").unwrap_or(stem).to_string()
    })
}

fn cmd_gen_data(args: GenDataArgs) -> Result<ExitCode> {
    let (mut cfg, out) = resolve(&args.common)?;
    if let Some(n) = args.sentences {
        cfg.corpus.n_sentences = n;
    }
    if let Some(n) = args.pairs {
        cfg.corpus.n_pairs = n;
    }
    if let Some(v) = args.vocab {
        cfg.corpus.vocab_size = v;
        cfg.teacher.vocab_size = v;
        cfg.student.vocab_size = v;
    }
    if let Some(t) = args.topics {
        cfg.corpus.topics = t;
    }
    cfg.corpus.validate()?;

    let corpus = corpus::generate(&cfg.corpus)?;
    corpus.write_jsonl(&out.join("corpus.jsonl"))?;
    corpus.write_pairs_csv(&out.join("pairs.csv"))?;
    let audit = corpus.audit(cfg.seed)?;
    audit.check()?;
    let audit_json = serde_json::to_string_pretty(&audit)?;
    fs::write(out.join("corpus_audit.json"), audit_json + "\n")?;
    write_config_used(&cfg, &out)?;

    println!(
        "wrote {} sentences and {} pairs to {} (construction Spearman {:.4})",
        corpus.sentences.len(),
        corpus.pairs.len(),
        out.display(),
        audit.construction_spearman,
    );
    Ok(ExitCode::SUCCESS)
}

fn cmd_train_teacher(args: TrainTeacherArgs) -> Result<ExitCode> {
    let (mut cfg, out) = resolve(&args.common)?;
    if let Some(e) = args.epochs {
        cfg.teacher_train.epochs = e;
    }
    let corpus = load_corpus(&cfg, &out)?;
    let split = split_pairs(&cfg, &corpus)?;

    let init = cfg.init_teacher()?;
    let (teacher, log) =
        train::train_teacher(&init, &cfg.teacher_train, &corpus, &split.train, &split.val)?;
    train::atomic_save_weights(&teacher, &out.join("teacher.json"))?;
    log.write_steps_csv(&out.join("teacher_steps.csv"))?;
    log.write_epochs_csv(&out.join("teacher_epochs.csv"))?;
    write_config_used(&cfg, &out)?;

    let last = log.epochs.last().context("teacher training produced no epochs")?;
    println!(
        "teacher saved to {} after {} epochs (val Spearman {:.4})",
        out.join("teacher.json").display(),
        log.epochs.len(),
        last.val_spearman,
    );
    Ok(ExitCode::SUCCESS)
}

fn parse_mask(parts: &[String]) -> Result<LossMask> {
    let mut mask = LossMask::final_only();
    for part in parts {
        match part.trim() {
            "inter" => mask.inter = true,
            "exit" => mask.exit = true,
            "contrast" => mask.contrast = true,
            "late" => mask.late = true,
            "redund" => mask.redund = true,
            other => bail!(
                "unknown loss component `{other}` (expected inter, exit, contrast, late, redund)"
            ),
        }
    }
    Ok(mask)
}

fn cmd_distill(args: DistillArgs) -> Result<ExitCode> {
    let (mut cfg, out) = resolve(&args.common)?;
    let (mask, default_label) = if args.leap {
        (LossMask::full(), "leap")
    } else if args.baseline {
        (LossMask::baseline(), "baseline")
    } else {
        (parse_mask(args.mask.as_deref().unwrap_or_default())?, "custom")
    };
    let label = args.label.unwrap_or_else(|| default_label.to_string());

    cfg.distill.mask = mask;
    if let Some(e) = args.epochs {
        cfg.distill.epochs = e;
    }
    if let Some(b) = args.beta {
        cfg.distill.weights.beta = b;
    }
    cfg.validate()?;

    let corpus = load_corpus(&cfg, &out)?;
    let split = split_pairs(&cfg, &corpus)?;
    let teacher_path = args.teacher.unwrap_or_else(|| out.join("teacher.json"));
    let teacher = load_model(&teacher_path)?;
    let student_init = cfg.init_student()?;

    let outcome = train::distill(&teacher, &student_init, &cfg.distill, &corpus, &split.val)?;
    let ckpt = out.join(format!("student_{label}.json"));
    train::atomic_save_weights(&outcome.student, &ckpt)?;
    outcome.log.write_steps_csv(&out.join(format!("{label}_steps.csv")))?;
    outcome.log.write_epochs_csv(&out.join(format!("{label}_epochs.csv")))?;
    write_config_used(&cfg, &out)?;

    let last = outcome.log.epochs.last().context("distillation produced no epochs")?;
    println!(
        "student saved to {} after {} epochs (val Spearman {:.4}, exit rate {})",
        ckpt.display(),
        outcome.log.epochs.len(),
        last.val_spearman,
        last.val_exit_rate.map_or("n/a".to_string(), |r| format!("{r:.3}")),
    );
    Ok(ExitCode::SUCCESS)
}

fn cmd_evaluate(args: EvaluateArgs) -> Result<ExitCode> {
    let (cfg, out) = resolve(&args.common)?;
    let label = checkpoint_label(args.label, &args.student);
    let model = load_model(&args.student)?;
    let corpus = load_corpus(&cfg, &out)?;
    let eval = held_out_eval_set(&cfg, &corpus)?;
    let depth = model.config().num_layers;

    // The checklist layer depends on the model's own curves, so analyze
    // with a provisional target, pick the first viable layer, re-judge.
    let fallback = (cfg.policy.l_min + 1).min(depth - 1);
    let mut diag_cfg = cfg.diagnostic_config(fallback, eval.tokens.len());
    let mut analysis = experiment::analyze_student(
        &model,
        &corpus,
        &eval.tokens,
        &eval.pairs,
        &cfg.policy,
        cfg.nn_k,
        &diag_cfg,
    )?;
    let viability = experiment::viability_rows(&analysis, cfg.policy.l_min, &cfg.viability);
    let first_viable = experiment::first_viable_layer(&viability);
    let target = first_viable.unwrap_or(fallback);
    if target != fallback {
        diag_cfg.target_layer = target;
        analysis = experiment::analyze_student(
            &model,
            &corpus,
            &eval.tokens,
            &eval.pairs,
            &cfg.policy,
            cfg.nn_k,
            &diag_cfg,
        )?;
    }

    let report = serde_json::json!({
        "label": label,
        "checkpoint": args.student.display().to_string(),
        "first_viable_layer": first_viable,
        "target_layer": target,
        "analysis": analysis,
        "viability": viability,
    });
    let path = out.join(format!("eval_{label}.json"));
    fs::write(&path, serde_json::to_string_pretty(&report)? + "\n")?;

    println!(
        "{label}: Spearman full {:.4} / exited {:.4}, exit rate {:.3}, \
         expected layers {:.2} ({:.2}x reduction); report at {}",
        analysis.eval.spearman_full,
        analysis.eval.spearman_exited,
        analysis.eval.exit_rate,
        analysis.eval.expected_layers,
        analysis.eval.layer_reduction,
        path.display(),
    );
    Ok(ExitCode::SUCCESS)
}

fn cmd_diagnose(args: DiagnoseArgs) -> Result<ExitCode> {
    let (cfg, out) = resolve(&args.common)?;
    let label = checkpoint_label(args.label, &args.student);
    let model = load_model(&args.student)?;
    let corpus = load_corpus(&cfg, &out)?;
    let eval = held_out_eval_set(&cfg, &corpus)?;
    let depth = model.config().num_layers;

    let target = args
        .target_layer
        .unwrap_or_else(|| default_target_layer(&cfg, &out, depth));
    let mut diag_cfg = cfg.diagnostic_config(target, eval.tokens.len());
    if let Some(v) = args.min_sim {
        diag_cfg.thresholds.checklist_min_sim = v;
    }
    if let Some(v) = args.min_nn10 {
        diag_cfg.thresholds.checklist_min_nn10 = v;
    }
    if let Some(v) = args.min_exit_rate {
        diag_cfg.thresholds.checklist_min_exit_rate = v;
    }

    let report = diagnostics::run_all(&model, &eval.tokens, &diag_cfg)?;
    fs::write(out.join(format!("diagnostic_{label}.json")), report.to_json()? + "\n")?;
    let text = report.to_text();
    fs::write(out.join(format!("diagnostic_{label}.txt")), &text)?;
    print!("{text}");

    if report.any_incompatible() || !report.checklist.all_pass {
        eprintln!("{label}: not exit-compatible under the current policy");
        return Ok(ExitCode::FAILURE);
    }
    Ok(ExitCode::SUCCESS)
}

fn cmd_pareto(args: ParetoArgs) -> Result<ExitCode> {
    let (mut cfg, out) = resolve(&args.common)?;
    if let Some(grid) = args.grid {
        cfg.theta_grid = grid;
    }
    cfg.validate()?;
    let model = load_model(&args.student)?;
    let corpus = load_corpus(&cfg, &out)?;
    let eval = held_out_eval_set(&cfg, &corpus)?;
    let depth = model.config().num_layers;
    let ref_layer = args
        .ref_layer
        .unwrap_or_else(|| default_target_layer(&cfg, &out, depth));

    let rows = metrics::pareto_sweep(
        &model,
        &eval.tokens,
        &eval.index_pairs,
        &cfg.theta_grid,
        &cfg.policy,
        ref_layer,
    )?;
    let mut csv = ParetoRow::csv_header(ref_layer);
    csv.push('\n');
    for row in &rows {
        csv.push_str(&row.csv_row());
        csv.push('\n');
        println!(
            "theta {:.2}: Spearman {:.4}, E[l] {:.2}, reduction {:.2}x, exit@L{} {:.3}",
            row.theta, row.quality, row.expected_layers, row.layer_reduction, ref_layer, row.exit_at_ref,
        );
    }
    fs::write(out.join("pareto.csv"), csv)?;
    Ok(ExitCode::SUCCESS)
}

fn ablation_csv(rows: &[AblationRow]) -> String {
    let mut out = String::from("label,exit_rate,expected_layers,spearman_exited,spearman_full\n");
    for r in rows {
        out.push_str(&format!(
            "{},{:.4},{:.3},{:.4},{:.4}\n",
            r.label, r.exit_rate, r.expected_layers, r.spearman_exited, r.spearman_full
        ));
    }
    out
}

fn beta_csv(rows: &[BetaRow]) -> String {
    let mut out =
        String::from("beta,exit_rate,expected_layers,layer_reduction,spearman_exited\n");
    for r in rows {
        out.push_str(&format!(
            "{},{:.4},{:.3},{:.3},{:.4}\n",
            r.beta, r.exit_rate, r.expected_layers, r.layer_reduction, r.spearman_exited
        ));
    }
    out
}

/// Cache, init, sentence list, and pair splits shared by the sweep
/// commands.
struct SweepInputs {
    cache: TeacherCache<f64>,
    student_init: EncoderModel64,
    sentences: Vec<Vec<u32>>,
    corpus: SyntheticCorpus,
    val: Vec<corpus::ScoredPair>,
    eval_pairs: Vec<corpus::ScoredPair>,
}

fn sweep_inputs(
    cfg: &ExperimentConfig,
    out: &Path,
    teacher_path: Option<PathBuf>,
) -> Result<SweepInputs> {
    let corpus = load_corpus(cfg, out)?;
    let split = split_pairs(cfg, &corpus)?;
    let eval = experiment::eval_set(&corpus, &split.test, cfg.max_eval_sentences)?;
    let teacher = load_model(&teacher_path.unwrap_or_else(|| out.join("teacher.json")))?;
    let sentences: Vec<Vec<u32>> =
        corpus.sentences.iter().map(|s| s.tokens.clone()).collect();
    let n = cfg.distill.max_sentences.unwrap_or(sentences.len()).min(sentences.len());
    let cache = TeacherCache::build(&teacher, &sentences[..n])?;
    Ok(SweepInputs {
        cache,
        student_init: cfg.init_student()?,
        sentences,
        corpus,
        val: split.val,
        eval_pairs: eval.pairs,
    })
}

fn cmd_ablate(args: AblateArgs) -> Result<ExitCode> {
    let (mut cfg, out) = resolve(&args.common)?;
    if let Some(e) = args.epochs {
        cfg.distill.epochs = e;
    }
    cfg.validate()?;
    let inputs = sweep_inputs(&cfg, &out, args.teacher)?;
    let rows = train::ablation_suite(
        &inputs.cache,
        &inputs.student_init,
        &cfg.distill,
        &inputs.sentences,
        &inputs.corpus,
        &inputs.val,
        &inputs.eval_pairs,
        &train::standard_ablation_masks(),
    )?;
    fs::write(out.join("ablation.csv"), ablation_csv(&rows))?;
    for r in &rows {
        println!(
            "{:24} exit rate {:.4}, E[l] {:.2}, Spearman exited {:.4}",
            r.label, r.exit_rate, r.expected_layers, r.spearman_exited,
        );
    }
    Ok(ExitCode::SUCCESS)
}

fn cmd_beta_sweep(args: BetaSweepArgs) -> Result<ExitCode> {
    let (mut cfg, out) = resolve(&args.common)?;
    if let Some(e) = args.epochs {
        cfg.distill.epochs = e;
    }
    cfg.validate()?;
    if args.betas.is_empty() {
        bail!("need at least one exit-loss weight");
    }
    let inputs = sweep_inputs(&cfg, &out, args.teacher)?;
    let rows = train::beta_sensitivity(
        &inputs.cache,
        &inputs.student_init,
        &cfg.distill,
        &inputs.sentences,
        &inputs.corpus,
        &inputs.val,
        &inputs.eval_pairs,
        &args.betas,
    )?;
    fs::write(out.join("beta_sweep.csv"), beta_csv(&rows))?;
    for r in &rows {
        println!(
            "beta {:.2}: exit rate {:.4}, E[l] {:.2}, reduction {:.2}x",
            r.beta, r.exit_rate, r.expected_layers, r.layer_reduction,
        );
    }
    Ok(ExitCode::SUCCESS)
}

fn cmd_bench(args: BenchArgs) -> Result<ExitCode> {
    let (mut cfg, out) = resolve(&args.common)?;
    if let Some(sizes) = args.batch_sizes {
        cfg.bench_batch_sizes = sizes;
    }
    cfg.validate()?;
    let model = load_model(&args.student)?.cast::<f32>();
    let corpus = load_corpus(&cfg, &out)?;
    let samples: Vec<Vec<u32>> = corpus
        .sentences
        .iter()
        .take(cfg.bench_samples.min(corpus.sentences.len()))
        .map(|s| s.tokens.clone())
        .collect();

    let report = bench::bench(&model, &samples, &cfg.policy, &cfg.bench_batch_sizes, &cfg.bench)?;
    report.write_csv(&out.join("bench.csv"))?;
    for row in &report.rows {
        println!(
            "batch {:3}: full {:.3} ms, early-exit {:.3} ms, speedup {:.2}x{}",
            row.batch_size,
            row.full_ms,
            row.ee_ms,
            row.speedup,
            if row.timer_warning { " (timer resolution warning)" } else { "" },
        );
    }
    Ok(ExitCode::SUCCESS)
}

fn cmd_reproduce(args: ReproduceArgs) -> Result<ExitCode> {
    let (cfg, out) = resolve(&args.common)?;
    let report = experiment::run_reproduce(&cfg, &out)?;
    write_config_used(&cfg, &out)?;

    let gates = experiment::reproduction_gates(&cfg, &report);
    fs::write(out.join("gates.json"), serde_json::to_string_pretty(&gates)? + "\n")?;
    println!("artifacts written to {}", out.display());
    for gate in &gates {
        println!(
            "{} {} ({})",
            if gate.pass { "PASS" } else { "FAIL" },
            gate.name,
            gate.detail,
        );
    }
    if args.check && gates.iter().any(|g| !g.pass) {
        eprintln!("one or more gates failed");
        return Ok(ExitCode::FAILURE);
    }
    Ok(ExitCode::SUCCESS)
}
