//! Command line entry point: data generation, two-stage training,
//! evaluation, the ablation grid, and chart rendering.
//!
//! Every command works under one output root (`--out`, else `$CANONSLR_OUT`,
//! else `./out`) with fixed artifact paths beneath it: `data/` for the
//! generated dataset, `checkpoints/` for single training runs, `ablation/`
//! for grid cells, `reports/` for tables, and `plots/` for charts. Reruns
//! with identical configuration and seed rewrite identical bytes.

use std::collections::BTreeSet;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand, ValueEnum};

use crate::error::{Error, Result};
use crate::metrics::write_wer_report;
use crate::report::{
    bar_chart_svg, line_chart_svg, read_ablation_table, read_sweep_csv, write_ablation_table,
    write_sweep_csv, CategoryWers, TableRow,
};
use crate::synthviews::{generate_dataset, load_manifest, GenerationConfig, Split, ViewName};
use crate::trainer::{
    checkpoint_path, evaluate, load_checkpoint, train_student, train_teacher, Checkpoint, Role,
    TrainConfig,
};

#[derive(Parser)]
#[command(
    name = "canonslr",
    about = "Canonical-view guided multi-view sign language recognition on synthetic data",
    version
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate the synthetic multi-view dataset under OUT/data.
    GenData(CommonArgs),
    /// Train the frontal-view teacher.
    TrainTeacher(CommonArgs),
    /// Train the multi-view student against a trained teacher.
    TrainStudent(TrainStudentArgs),
    /// Decode a checkpoint on one split and write a per-view WER report.
    Evaluate(EvaluateArgs),
    /// Run a grid over module combinations, distillation weights, or
    /// anchor views, and write an aggregate table.
    Ablate(AblateArgs),
    /// Render SVG charts from the report tables.
    Plot(PlotArgs),
}

#[derive(Args)]
struct CommonArgs {
    /// Flat key=value config file (keys are config fields).
    #[arg(long)]
    config: Option<PathBuf>,
    /// Override one config key (repeatable), applied after the file.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    set: Vec<String>,
    /// Output root; defaults to $CANONSLR_OUT, then ./out.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Random seed override, applied last.
    #[arg(long)]
    seed: Option<u64>,
}

#[derive(Args)]
struct TrainStudentArgs {
    #[command(flatten)]
    common: CommonArgs,
    /// Teacher checkpoint; defaults to the configured checkpoint
    /// directory's teacher.ckpt.
    #[arg(long)]
    teacher: Option<PathBuf>,
}

#[derive(Args)]
struct EvaluateArgs {
    #[command(flatten)]
    common: CommonArgs,
    /// Checkpoint to evaluate; defaults to the configured checkpoint
    /// directory's student.ckpt.
    #[arg(long)]
    checkpoint: Option<PathBuf>,
    /// Dataset split to decode.
    #[arg(long, default_value = "test")]
    split: String,
}

#[derive(Clone, Copy, PartialEq, Eq, Debug, ValueEnum)]
enum AblateAxis {
    /// The four-cell module grid: baseline, +SSD, +TME, both.
    Modules,
    /// Distillation weight sweep on the full model.
    Lambda,
    /// Anchor view sweep on the full model.
    Anchor,
}

#[derive(Args)]
struct AblateArgs {
    #[command(flatten)]
    common: CommonArgs,
    #[arg(long, value_enum, default_value_t = AblateAxis::Modules)]
    axis: AblateAxis,
    /// Comma-separated training seeds averaged per cell.
    #[arg(long, default_value = "0,1,2")]
    seeds: String,
    /// Comma-separated distillation weights for the lambda axis.
    #[arg(long, default_value = "5,10,20,40,80")]
    lambdas: String,
    /// Comma-separated anchor views for the anchor axis.
    #[arg(long, default_value = "Front,L60,R45,D30")]
    anchors: String,
}

#[derive(Args)]
struct PlotArgs {
    /// Output root; defaults to $CANONSLR_OUT, then ./out.
    #[arg(long)]
    out: Option<PathBuf>,
}

/// Runs the CLI and returns the process exit code: 0 on success, 1 on
/// runtime failure, 2 on usage errors.
pub fn run() -> i32 {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(err) => {
            let code = if err.use_stderr() { 2 } else { 0 };
            let _ = err.print();
            return code;
        }
    };
    match dispatch(cli.command) {
        Ok(()) => 0,
        Err(Exit::Usage(message)) => {
            eprintln!("usage error: {message}");
            2
        }
        Err(Exit::Runtime(err)) => {
            eprintln!("error: {err}");
            1
        }
    }
}

enum Exit {
    Usage(String),
    Runtime(Error),
}

impl From<Error> for Exit {
    fn from(err: Error) -> Exit {
        Exit::Runtime(err)
    }
}

type CliResult<T = ()> = std::result::Result<T, Exit>;

fn usage<T>(message: impl Into<String>) -> CliResult<T> {
    Err(Exit::Usage(message.into()))
}

fn dispatch(command: Command) -> CliResult {
    match command {
        Command::GenData(args) => gen_data(args),
        Command::TrainTeacher(args) => cmd_train_teacher(args),
        Command::TrainStudent(args) => cmd_train_student(args),
        Command::Evaluate(args) => cmd_evaluate(args),
        Command::Ablate(args) => cmd_ablate(args),
        Command::Plot(args) => cmd_plot(args),
    }
}

fn out_root(out: &Option<PathBuf>) -> PathBuf {
    out.clone()
        .or_else(|| std::env::var_os("CANONSLR_OUT").map(PathBuf::from))
        .unwrap_or_else(|| PathBuf::from("out"))
}

fn data_dir(root: &Path) -> PathBuf {
    root.join("data")
}

fn reports_dir(root: &Path) -> CliResult<PathBuf> {
    let dir = root.join("reports");
    std::fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
    Ok(dir)
}

/// Reads a flat key=value file; blank lines and `#` comments are skipped.
fn read_kv_file(path: &Path) -> CliResult<Vec<(String, String)>> {
    let text = match std::fs::read_to_string(path) {
        Ok(text) => text,
        Err(_) => return usage(format!("cannot read config file {}", path.display())),
    };
    let mut pairs = Vec::new();
    for (number, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        match line.split_once('=') {
            Some((key, value)) => pairs.push((key.trim().to_string(), value.to_string())),
            None => {
                return usage(format!(
                    "{}:{}: expected key=value, got {line:?}",
                    path.display(),
                    number + 1
                ))
            }
        }
    }
    Ok(pairs)
}

fn split_set(arg: &str) -> CliResult<(&str, &str)> {
    match arg.split_once('=') {
        Some((key, value)) => Ok((key.trim(), value)),
        None => usage(format!("--set expects key=value, got {arg:?}")),
    }
}

fn generation_config(args: &CommonArgs) -> CliResult<GenerationConfig> {
    let mut cfg = GenerationConfig::default();
    if let Some(path) = &args.config {
        for (key, value) in read_kv_file(path)? {
            if let Err(err) = cfg.apply(&key, &value) {
                return usage(err.to_string());
            }
        }
    }
    for arg in &args.set {
        let (key, value) = split_set(arg)?;
        if let Err(err) = cfg.apply(key, value) {
            return usage(err.to_string());
        }
    }
    if let Some(seed) = args.seed {
        cfg.seed = seed;
    }
    if let Err(err) = cfg.validate() {
        return usage(err.to_string());
    }
    Ok(cfg)
}

fn train_config(args: &CommonArgs, root: &Path) -> CliResult<TrainConfig> {
    let mut cfg = TrainConfig::default();
    if let Some(path) = &args.config {
        for (key, value) in read_kv_file(path)? {
            if let Err(err) = cfg.apply(&key, &value) {
                return usage(err.to_string());
            }
        }
    }
    for arg in &args.set {
        let (key, value) = split_set(arg)?;
        if let Err(err) = cfg.apply(key, value) {
            return usage(err.to_string());
        }
    }
    if let Some(seed) = args.seed {
        cfg.seed = seed;
    }
    if cfg.checkpoint_dir.is_relative() {
        cfg.checkpoint_dir = root.join(&cfg.checkpoint_dir);
    }
    if let Err(err) = cfg.validate() {
        return usage(err.to_string());
    }
    Ok(cfg)
}

fn load_data(root: &Path) -> Result<crate::synthviews::DatasetManifest> {
    load_manifest(&data_dir(root).join("manifest.txt"))
}

fn gen_data(args: CommonArgs) -> CliResult {
    let root = out_root(&args.out);
    let cfg = generation_config(&args)?;
    let dir = data_dir(&root);
    let manifest = generate_dataset(&cfg, &dir)?;
    println!(
        "generated {} entries ({} sources x {} views) under {}",
        manifest.entries.len(),
        manifest.entries.len() / ViewName::ALL.len(),
        ViewName::ALL.len(),
        dir.display()
    );
    Ok(())
}

fn print_epochs_tail(records: &[crate::trainer::EpochRecord]) {
    if let Some(last) = records.last() {
        println!("{}", last.log_line());
    }
}

fn cmd_train_teacher(args: CommonArgs) -> CliResult {
    let root = out_root(&args.out);
    let cfg = train_config(&args, &root)?;
    let manifest = load_data(&root)?;
    let (_, report) = train_teacher(&manifest, &cfg)?;
    print_epochs_tail(&report.epochs);
    println!("teacher checkpoint: {}", report.checkpoint_path.display());
    Ok(())
}

fn cmd_train_student(args: TrainStudentArgs) -> CliResult {
    let root = out_root(&args.common.out);
    let cfg = train_config(&args.common, &root)?;
    let manifest = load_data(&root)?;
    let teacher_path = args
        .teacher
        .unwrap_or_else(|| checkpoint_path(&cfg, Role::Teacher));
    let teacher = load_checkpoint(&teacher_path)?;
    let (_, report) = train_student(&manifest, &teacher, &cfg)?;
    print_epochs_tail(&report.epochs);
    println!("student checkpoint: {}", report.checkpoint_path.display());
    Ok(())
}

fn parse_split(name: &str) -> CliResult<Split> {
    match Split::parse(name) {
        Ok(split) => Ok(split),
        Err(err) => usage(err.to_string()),
    }
}

fn cmd_evaluate(args: EvaluateArgs) -> CliResult {
    let root = out_root(&args.common.out);
    let cfg = train_config(&args.common, &root)?;
    let split = parse_split(&args.split)?;
    let manifest = load_data(&root)?;
    let ckpt_path = args
        .checkpoint
        .unwrap_or_else(|| checkpoint_path(&cfg, Role::Student));
    let ckpt = load_checkpoint(&ckpt_path)?;
    let rows = evaluate(&ckpt, &manifest, split, cfg.beam_width)?;

    println!("{:<14} {:>8} {:>5} {:>5} {:>5} {:>4}", "view", "WER%", "del", "ins", "sub", "n");
    for row in &rows {
        println!(
            "{:<14} {:>8.2} {:>5} {:>5} {:>5} {:>4}",
            row.label,
            row.wer * 100.0,
            row.breakdown.del,
            row.breakdown.ins,
            row.breakdown.sub,
            row.n_samples
        );
    }
    let reports = reports_dir(&root)?;
    let out_path = reports.join(format!(
        "wer_{}_{}.tsv",
        ckpt.role.as_str(),
        split.as_str()
    ));
    write_wer_report(&out_path, &rows)?;
    println!("report: {}", out_path.display());
    Ok(())
}

/// Loads a cached run if its checkpoint matches the config, else trains.
/// The returned checkpoint is always the serialized file read back, so
/// downstream results do not depend on whether the cache was warm.
fn ensure_teacher(
    manifest: &crate::synthviews::DatasetManifest,
    cfg: &TrainConfig,
) -> Result<Checkpoint> {
    let path = checkpoint_path(cfg, Role::Teacher);
    if let Ok(ckpt) = load_checkpoint(&path) {
        if ckpt.config_hash == cfg.hash() && ckpt.epoch == cfg.stage_epochs(Role::Teacher) {
            return Ok(ckpt);
        }
    }
    train_teacher(manifest, cfg)?;
    load_checkpoint(&path)
}

fn ensure_student(
    manifest: &crate::synthviews::DatasetManifest,
    teacher: &Checkpoint,
    cfg: &TrainConfig,
) -> Result<Checkpoint> {
    let path = checkpoint_path(cfg, Role::Student);
    if let Ok(ckpt) = load_checkpoint(&path) {
        if ckpt.config_hash == cfg.hash() && ckpt.epoch == cfg.stage_epochs(Role::Student) {
            return Ok(ckpt);
        }
    }
    train_student(manifest, teacher, cfg)?;
    load_checkpoint(&path)
}

fn parse_seed_list(arg: &str) -> CliResult<Vec<u64>> {
    let seeds: std::result::Result<Vec<u64>, _> =
        arg.split(',').map(|s| s.trim().parse()).collect();
    match seeds {
        Ok(seeds) if !seeds.is_empty() => Ok(seeds),
        _ => usage(format!("invalid seed list {arg:?}")),
    }
}

/// One grid cell: a label plus the changes it makes to the base config.
struct GridCell {
    label: String,
    dir_name: String,
    distill_weight: Option<f64>,
    tme_stages: Option<BTreeSet<usize>>,
    anchor: Option<ViewName>,
}

fn module_grid(base: &TrainConfig) -> Vec<GridCell> {
    let off: BTreeSet<usize> = BTreeSet::new();
    vec![
        GridCell {
            label: "baseline".to_string(),
            dir_name: "baseline".to_string(),
            distill_weight: Some(0.0),
            tme_stages: Some(off.clone()),
            anchor: None,
        },
        GridCell {
            label: "+SSD".to_string(),
            dir_name: "ssd".to_string(),
            distill_weight: None,
            tme_stages: Some(off),
            anchor: None,
        },
        GridCell {
            label: "+TME".to_string(),
            dir_name: "tme".to_string(),
            distill_weight: Some(0.0),
            tme_stages: None,
            anchor: None,
        },
        GridCell {
            label: format!("+SSD+TME(w={})", base.distill.weight),
            dir_name: "full".to_string(),
            distill_weight: None,
            tme_stages: None,
            anchor: None,
        },
    ]
}

fn cmd_ablate(args: AblateArgs) -> CliResult {
    let root = out_root(&args.common.out);
    let base = train_config(&args.common, &root)?;
    let seeds = parse_seed_list(&args.seeds)?;
    let manifest = load_data(&root)?;

    let (cells, table_name, axis_name) = match args.axis {
        AblateAxis::Modules => (module_grid(&base), "ablation", "cell"),
        AblateAxis::Lambda => {
            let mut cells = Vec::new();
            for part in args.lambdas.split(',') {
                let weight: f64 = match part.trim().parse() {
                    Ok(w) if w >= 0.0 => w,
                    _ => return usage(format!("invalid distillation weight {part:?}")),
                };
                cells.push(GridCell {
                    label: format!("{}", weight),
                    dir_name: format!("lambda_{}", part.trim().replace('.', "p")),
                    distill_weight: Some(weight),
                    tme_stages: None,
                    anchor: None,
                });
            }
            (cells, "lambda_sweep", "lambda")
        }
        AblateAxis::Anchor => {
            let mut cells = Vec::new();
            for part in args.anchors.split(',') {
                let view = match ViewName::parse(part.trim()) {
                    Ok(view) => view,
                    Err(err) => return usage(err.to_string()),
                };
                cells.push(GridCell {
                    label: view.as_str().to_string(),
                    dir_name: format!("anchor_{}", view.as_str().to_lowercase()),
                    distill_weight: None,
                    tme_stages: None,
                    anchor: Some(view),
                });
            }
            (cells, "anchor_sweep", "anchor")
        }
    };

    let mut table = Vec::new();
    for cell in &cells {
        let mut per_seed = Vec::new();
        for &seed in &seeds {
            let wers = run_cell(&root, &manifest, &base, cell, seed)?;
            per_seed.push(wers);
        }
        let mean = CategoryWers::mean(&per_seed)?;
        println!(
            "{:<16} front {:>6.2}%  nonfront {:>6.2}%  all {:>6.2}%  ({} seeds)",
            cell.label,
            mean.front * 100.0,
            mean.nonfront * 100.0,
            mean.all * 100.0,
            per_seed.len()
        );
        table.push(TableRow {
            label: cell.label.clone(),
            wers: mean,
        });
    }

    let reports = reports_dir(&root)?;
    let table_path = match args.axis {
        AblateAxis::Modules => {
            let path = reports.join(format!("{table_name}.tsv"));
            write_ablation_table(&path, &table)?;
            path
        }
        _ => {
            let path = reports.join(format!("{table_name}.csv"));
            write_sweep_csv(&path, axis_name, &table)?;
            path
        }
    };
    println!("table: {}", table_path.display());
    Ok(())
}

/// Trains (or reuses) the teacher and student for one cell and seed, then
/// evaluates the student on the test split.
fn run_cell(
    root: &Path,
    manifest: &crate::synthviews::DatasetManifest,
    base: &TrainConfig,
    cell: &GridCell,
    seed: u64,
) -> Result<CategoryWers> {
    let mut teacher_cfg = base.clone();
    teacher_cfg.seed = seed;
    if let Some(anchor) = cell.anchor {
        teacher_cfg.distill.frontal_view = anchor;
    }
    let anchor_tag = teacher_cfg.distill.frontal_view.as_str().to_lowercase();
    teacher_cfg.checkpoint_dir = root
        .join("ablation")
        .join(format!("teacher_{anchor_tag}_seed{seed}"));
    let teacher = ensure_teacher(manifest, &teacher_cfg)?;

    let mut student_cfg = teacher_cfg.clone();
    if let Some(weight) = cell.distill_weight {
        student_cfg.distill.weight = weight;
    }
    if let Some(stages) = &cell.tme_stages {
        student_cfg.tme_stages = stages.clone();
    }
    student_cfg.checkpoint_dir = root
        .join("ablation")
        .join(format!("{}_seed{seed}", cell.dir_name));
    let student = ensure_student(manifest, &teacher, &student_cfg)?;

    let rows = evaluate(&student, manifest, Split::Test, student_cfg.beam_width)?;
    let report_path = student_cfg.checkpoint_dir.join("wer_test.tsv");
    write_wer_report(&report_path, &rows)?;
    CategoryWers::from_rows(&rows)
}

fn cmd_plot(args: PlotArgs) -> CliResult {
    let root = out_root(&args.out);
    let reports = root.join("reports");
    let plots = root.join("plots");
    std::fs::create_dir_all(&plots).map_err(|e| Error::io(&plots, e))?;
    let mut produced = Vec::new();

    let ablation = reports.join("ablation.tsv");
    if ablation.exists() {
        let rows = read_ablation_table(&ablation)?;
        let groups: Vec<String> = rows.iter().map(|r| r.label.clone()).collect();
        let series: Vec<(&str, Vec<f64>)> = vec![
            ("front", rows.iter().map(|r| r.wers.front).collect()),
            ("nonfront", rows.iter().map(|r| r.wers.nonfront).collect()),
            ("all", rows.iter().map(|r| r.wers.all).collect()),
        ];
        let path = plots.join("ablation.svg");
        bar_chart_svg(&path, "Module ablation (test WER)", "WER", &groups, &series)?;
        produced.push(path);
    }
    for (file, title, xlabel) in [
        ("lambda_sweep", "Distillation weight sweep (test WER)", "distillation weight"),
        ("anchor_sweep", "Anchor view sweep (test WER)", "anchor view"),
    ] {
        let csv = reports.join(format!("{file}.csv"));
        if !csv.exists() {
            continue;
        }
        let rows = read_sweep_csv(&csv)?;
        let xs: Vec<String> = rows.iter().map(|r| r.label.clone()).collect();
        let series: Vec<(&str, Vec<f64>)> = vec![
            ("front", rows.iter().map(|r| r.wers.front).collect()),
            ("nonfront", rows.iter().map(|r| r.wers.nonfront).collect()),
        ];
        let path = plots.join(format!("{file}.svg"));
        line_chart_svg(&path, title, xlabel, "WER", &xs, &series)?;
        produced.push(path);
    }

    if produced.is_empty() {
        return Err(Exit::Runtime(Error::invalid(format!(
            "no report tables under {}; run evaluate or ablate first",
            reports.display()
        ))));
    }
    for path in produced {
        println!("plot: {}", path.display());
    }
    Ok(())
}
