//! `lutfetch`: trace preparation, teacher training, distillation,
//! configuration, tabularization and evaluation from the command line.

mod config;

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use log::info;
use lutfetch::cost::{configure, model_complexity, ComplexityReport, CostConstants, KernelConfig};
use lutfetch::distill::distill;
use lutfetch::eval::{
    compare_models, evaluate_f1, simulate_prefetch, Comparison, ComparisonRow, Entry, EvalReport, Predictor,
};
use lutfetch::nn::{train, AttentionModel, ModelConfig};
use lutfetch::tabularize::{layer_cosine_report, tabularize_model, TableModel};
use lutfetch::trace::{
    build_dataset, format_trace, generate_synthetic_trace, parse_trace, Dataset, SyntheticPattern, SyntheticSpec,
    TraceFormat, TraceRecord,
};
use lutfetch::Error;

use config::{sub_seed, RunConfig};

#[derive(Parser)]
#[command(name = "lutfetch", version, about = "Table-based memory access prediction pipeline")]
struct Cli {
    /// Run configuration file (`section.key = value` lines).
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Override one configuration key, e.g. `--set student.dim=16`.
    #[arg(long = "set", global = true, value_name = "SECTION.KEY=VALUE")]
    overrides: Vec<String>,
    /// Top-level seed; every stage derives its own seed from it.
    #[arg(long, global = true)]
    seed: Option<u64>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct TraceSource {
    /// Trace file (`instr_id,0xpc,0xaddr` per line).
    #[arg(long, conflicts_with = "synthetic")]
    trace: Option<PathBuf>,
    /// Synthetic pattern: stride, interleaved-stride or random-in-pages.
    #[arg(long)]
    synthetic: Option<String>,
    /// Synthetic trace length.
    #[arg(long, default_value_t = 10_000)]
    len: usize,
    /// Probability of replacing an access by a nearby random block.
    #[arg(long, default_value_t = 0.0)]
    noise: f64,
}

#[derive(Clone, Copy, ValueEnum)]
enum Arch {
    Teacher,
    Student,
}

#[derive(Subcommand)]
enum Command {
    /// Build a dataset from a trace file or a synthetic pattern.
    Prep {
        #[command(flatten)]
        source: TraceSource,
        #[arg(long)]
        out: PathBuf,
        /// Also write the trace itself.
        #[arg(long)]
        trace_out: Option<PathBuf>,
    },
    /// Train a model with plain BCE (the teacher by default).
    TrainTeacher {
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, value_enum, default_value = "teacher")]
        arch: Arch,
    },
    /// Distill the student from a trained teacher.
    Distill {
        #[arg(long)]
        teacher: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Pick (model, table) configuration under latency and storage budgets.
    Configure {
        /// Latency budget in cycles (strict).
        #[arg(long)]
        tau: Option<f64>,
        /// Storage budget in bytes (strict).
        #[arg(long)]
        storage: Option<f64>,
        /// Write the chosen settings as a config fragment.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Convert a trained model into lookup tables.
    Tabularize {
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Skip per-layer fine-tuning.
        #[arg(long)]
        no_finetune: bool,
        /// Also print the per-stage cosine similarity against the model.
        #[arg(long)]
        report_cosine: bool,
    },
    /// F1 of a model or table model on a dataset.
    Eval {
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        data: PathBuf,
        /// Write the report as CSV.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Prefetch accuracy and coverage on a trace.
    Simulate {
        #[arg(long)]
        model: PathBuf,
        #[command(flatten)]
        source: TraceSource,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Evaluate several models side by side.
    Compare {
        /// `name=path` of a checkpoint or table model; repeatable.
        #[arg(long = "model", required = true)]
        models: Vec<String>,
        #[arg(long)]
        data: PathBuf,
        #[command(flatten)]
        source: TraceSource,
        /// Write the comparison as CSV.
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

fn exit_code(e: &Error) -> u8 {
    match e {
        Error::Infeasible(_) => 3,
        Error::Divergence { .. } => 4,
        Error::Layer { source, .. } => exit_code(source),
        _ => 2,
    }
}

fn write(path: &Path, text: &str) -> Result<(), Error> {
    std::fs::write(path, text).map_err(|source| Error::Io {
        path: path.display().to_string(),
        source,
    })
}

fn load_trace(src: &TraceSource, seed: u64) -> Result<Vec<TraceRecord>, Error> {
    match (&src.trace, &src.synthetic) {
        (Some(p), _) => parse_trace(p, TraceFormat::Csv),
        (None, Some(name)) => {
            let spec = SyntheticSpec {
                pattern: name.parse::<SyntheticPattern>()?,
                noise: src.noise,
            };
            generate_synthetic_trace(&spec, src.len, sub_seed(seed, "trace"))
        }
        (None, None) => Err(Error::Config("give --trace or --synthetic".into())),
    }
}

fn load_dataset(path: &Path, cfg: &RunConfig) -> Result<Dataset, Error> {
    let data = Dataset::load(path)?;
    data.check_config(&cfg.dataset)?;
    Ok(data)
}

enum Loaded {
    Model(AttentionModel),
    Table(TableModel),
}

impl Loaded {
    fn open(path: &Path) -> Result<Self, Error> {
        let bytes = std::fs::read(path).map_err(|source| Error::Io {
            path: path.display().to_string(),
            source,
        })?;
        match bytes.get(..4) {
            Some(b"TMDL") => Ok(Loaded::Table(TableModel::from_bytes(&bytes)?)),
            _ => Ok(Loaded::Model(AttentionModel::from_bytes(&bytes)?)),
        }
    }

    fn predictor(&self) -> &dyn Predictor {
        match self {
            Loaded::Model(m) => m,
            Loaded::Table(t) => t,
        }
    }

    fn complexity(&self) -> Result<Option<ComplexityReport>, Error> {
        match self {
            Loaded::Model(_) => Ok(None),
            Loaded::Table(t) => Ok(Some(model_complexity(
                &t.config,
                &t.table_config,
                &CostConstants::default(),
            )?)),
        }
    }
}

fn single_row(name: &str, report: EvalReport, complexity: Option<ComplexityReport>) -> Comparison {
    Comparison {
        rows: vec![ComparisonRow {
            name: name.to_string(),
            report,
            complexity,
        }],
    }
}

/// Candidate models for `configure`: student variants around the
/// configured student.
fn candidate_models(cfg: &RunConfig) -> Vec<ModelConfig> {
    let mut out = Vec::new();
    for layers in [1, 2] {
        for dim in [16, 32, 64] {
            let mut s = cfg.student;
            s.layers = layers;
            s.dim = dim;
            s.ffn_dim = 0;
            let mc = s.model_config(&cfg.dataset);
            if mc.validate().is_ok() {
                out.push(mc);
            }
        }
    }
    out
}

fn candidate_kernels() -> Vec<KernelConfig> {
    let mut out = Vec::new();
    for k in [16, 32, 64, 128, 256] {
        for c in [1, 2, 4] {
            out.push(KernelConfig::new(k, c));
        }
    }
    out
}

fn run(cli: Cli) -> Result<(), Error> {
    let mut cfg = match &cli.config {
        Some(p) => RunConfig::load(p)?,
        None => RunConfig::default(),
    };
    for kv in &cli.overrides {
        cfg.apply_override(kv)?;
    }
    if let Some(s) = cli.seed {
        cfg.seed = s;
    }
    cfg.validate()?;
    for line in cfg.to_text().lines() {
        eprintln!("config: {line}");
    }

    match cli.command {
        Command::Prep { source, out, trace_out } => {
            let trace = load_trace(&source, cfg.seed)?;
            let data = build_dataset(&trace, &cfg.dataset)?;
            data.save(&out)?;
            if let Some(p) = trace_out {
                write(&p, &format_trace(&trace))?;
            }
            println!("records = {}", trace.len());
            println!("samples = {}", data.len());
        }
        Command::TrainTeacher { data, out, arch } => {
            let data = load_dataset(&data, &cfg)?;
            let (section, tc, init_tag) = match arch {
                Arch::Teacher => (cfg.teacher, cfg.teacher_train(), "teacher-init"),
                Arch::Student => (cfg.student, cfg.student_train(), "student-init"),
            };
            let model = AttentionModel::new(section.model_config(&cfg.dataset), sub_seed(cfg.seed, init_tag))?;
            let (model, report) = train(model, &data, &tc)?;
            for (e, l) in report.epoch_losses.iter().enumerate() {
                info!("epoch {e}: loss {l:.6}");
            }
            model.save(&out)?;
            println!(
                "final_loss = {:.6}",
                report.epoch_losses.last().copied().unwrap_or(f64::NAN)
            );
        }
        Command::Distill { teacher, data, out } => {
            let data = load_dataset(&data, &cfg)?;
            let teacher = AttentionModel::load(&teacher)?;
            let (student, report) = distill(
                &teacher,
                cfg.student.model_config(&cfg.dataset),
                &data,
                &cfg.distill_config(),
            )?;
            student.save(&out)?;
            println!(
                "final_loss = {:.6}",
                report.epoch_losses.last().copied().unwrap_or(f64::NAN)
            );
        }
        Command::Configure { tau, storage, out } => {
            let mut cons = cfg.constraints;
            if let Some(t) = tau {
                cons.latency = t;
            }
            if let Some(s) = storage {
                cons.storage_bytes = s;
            }
            let cand = configure(
                &cons,
                &candidate_models(&cfg),
                &candidate_kernels(),
                cfg.table.table.entry_bits,
                &CostConstants::default(),
            )?;
            let m = &cand.model;
            let kc = cand.table.attention;
            let fragment = format!(
                "student.layers = {}\nstudent.dim = {}\nstudent.heads = {}\nstudent.ffn_dim = {}\n\
                 table.input_k = {k}\ntable.input_c = {c}\ntable.attention_k = {k}\ntable.attention_c = {c}\n\
                 table.ffn_k = {k}\ntable.ffn_c = {c}\ntable.output_k = {k}\ntable.output_c = {c}\n",
                m.layers,
                m.dim,
                m.heads,
                m.ffn_dim,
                k = kc.k,
                c = kc.c
            );
            print!("{fragment}");
            print!("{}", cand.report.to_key_values());
            if let Some(p) = out {
                write(&p, &fragment)?;
            }
        }
        Command::Tabularize {
            model,
            data,
            out,
            no_finetune,
            report_cosine,
        } => {
            let data = load_dataset(&data, &cfg)?;
            let model = AttentionModel::load(&model)?;
            let (tm, report) = tabularize_model(&model, &data, &cfg.tabularize_options(!no_finetune))?;
            for (stage, r) in &report.fine_tune {
                info!(
                    "stage {stage}: fine-tune mse {:.6} -> {:.6}",
                    r.initial_mse, r.final_mse
                );
            }
            tm.save(&out)?;
            println!("stages = {}", tm.stages.len());
            println!("table_entries = {}", tm.table_entries());
            println!("source_hash = {}", tm.source_hash_hex());
            if report_cosine {
                for (i, c) in layer_cosine_report(&model, &tm, &data)?.iter().enumerate() {
                    println!("cosine.{i}.{} = {c:.6}", tm.stages[i].kind_name());
                }
            }
        }
        Command::Eval { model, data, out } => {
            let data = load_dataset(&data, &cfg)?;
            let loaded = Loaded::open(&model)?;
            let report = evaluate_f1(loaded.predictor(), &data, cfg.eval.threshold)?;
            let table = single_row(&model.display().to_string(), report, loaded.complexity()?);
            println!("f1 = {:.6}", report.f1);
            println!("precision = {:.6}", report.precision);
            println!("recall = {:.6}", report.recall);
            if let Some(p) = out {
                write(&p, &table.to_csv())?;
            }
        }
        Command::Simulate { model, source, out } => {
            let trace = load_trace(&source, cfg.seed)?;
            let loaded = Loaded::open(&model)?;
            let report = simulate_prefetch(&trace, loaded.predictor(), &cfg.dataset, &cfg.eval)?;
            let table = single_row(&model.display().to_string(), report, loaded.complexity()?);
            print!("{}", table.to_text());
            if let Some(p) = out {
                write(&p, &table.to_csv())?;
            }
        }
        Command::Compare {
            models,
            data,
            source,
            out,
        } => {
            let data = load_dataset(&data, &cfg)?;
            let trace = load_trace(&source, cfg.seed)?;
            let mut loaded = Vec::new();
            for spec in &models {
                let (name, path) = spec
                    .split_once('=')
                    .ok_or_else(|| Error::Config(format!("--model {spec:?} is not name=path")))?;
                let l = Loaded::open(Path::new(path))?;
                let c = l.complexity()?;
                loaded.push((name.to_string(), l, c));
            }
            let entries: Vec<Entry<'_>> = loaded
                .iter()
                .map(|(name, l, c)| Entry {
                    name: name.clone(),
                    predictor: l.predictor(),
                    complexity: c.clone(),
                })
                .collect();
            let cmp = compare_models(&entries, &data, &trace, &cfg.dataset, &cfg.eval)?;
            print!("{}", cmp.to_text());
            if let Some(p) = out {
                write(&p, &cmp.to_csv())?;
            }
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(&e))
        }
    }
}
