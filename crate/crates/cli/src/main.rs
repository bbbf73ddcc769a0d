use std::io::Write;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{Context, Result};
use clap::{Parser, Subcommand, ValueEnum};
use hsk_core::harness::{self, RunConfig};
use hsk_core::kd::{distill, extract_records, CountingTeacher, ProjectionSet, Source};
use hsk_core::store::{teacher_digest, write_store, FeatureStore, StoreHeader, STORE_MAGIC};
use hsk_core::transformer::{load_checkpoint, save_checkpoint, train_classifier, Transformer, CHECKPOINT_MAGIC};
use hsk_core::Error;

#[derive(Parser)]
#[command(name = "hskf", version, about = "Hidden-state knowledge compression and offline distillation")]
struct Cli {
    /// Replaces every seed in the configuration with one derived from this value.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// JSON run configuration; missing fields take desk-scale defaults.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Output directory.
    #[arg(long, global = true, default_value = ".")]
    out: PathBuf,
    #[command(subcommand)]
    command: Command,
}

#[derive(Clone, Copy, ValueEnum)]
enum ModeArg {
    Online,
    Offline,
}

#[derive(clap::Args)]
struct Inputs {
    /// Directory holding train.jsonl and dev.jsonl (default: --out).
    #[arg(long)]
    data: Option<PathBuf>,
    /// Teacher checkpoint (default: <out>/teacher.ckpt).
    #[arg(long)]
    teacher: Option<PathBuf>,
}

#[derive(Subcommand)]
enum Command {
    /// Writes train.jsonl and dev.jsonl for the configured synthetic task.
    GenData,
    /// Trains the teacher on gold labels and writes teacher.ckpt.
    TrainTeacher {
        #[command(flatten)]
        inputs: Inputs,
    },
    /// Runs the teacher over the training set and writes a feature store.
    Extract {
        #[command(flatten)]
        inputs: Inputs,
        /// Store path (default: <out>/features.hskf).
        #[arg(long)]
        store: Option<PathBuf>,
    },
    /// Distills a student from a live teacher or from a feature store.
    Distill {
        #[arg(long, value_enum)]
        mode: ModeArg,
        #[command(flatten)]
        inputs: Inputs,
        #[arg(long)]
        store: Option<PathBuf>,
    },
    /// Distills students across amounts of hidden-state knowledge.
    Sweep {
        #[command(flatten)]
        inputs: Inputs,
    },
    /// Times phase-1 steps with and without a live teacher.
    Bench {
        #[command(flatten)]
        inputs: Inputs,
        #[arg(long, default_value = "cpu")]
        device_label: String,
    },
    /// Prints a summary of a feature store, checkpoint or dataset file.
    Inspect { path: PathBuf },
    /// Per-layer share of samples whose [SEP] ranks first / in the top 3 by importance.
    SepStats {
        #[command(flatten)]
        inputs: Inputs,
        /// Use at most this many dev samples.
        #[arg(long)]
        limit: Option<usize>,
    },
}

struct Ctx {
    run: RunConfig,
    out: PathBuf,
}

impl Ctx {
    fn data_dir(&self, inputs: &Inputs) -> PathBuf {
        inputs.data.clone().unwrap_or_else(|| self.out.clone())
    }

    fn data(&self, inputs: &Inputs) -> Result<harness::Dataset> {
        let dir = self.data_dir(inputs);
        let train = harness::read_jsonl(&dir.join("train.jsonl")).with_context(|| format!("reading {}", dir.join("train.jsonl").display()))?;
        let dev = harness::read_jsonl(&dir.join("dev.jsonl")).with_context(|| format!("reading {}", dir.join("dev.jsonl").display()))?;
        Ok(harness::Dataset { train, dev })
    }

    fn teacher(&self, inputs: &Inputs) -> Result<Transformer<f32>> {
        let path = inputs.teacher.clone().unwrap_or_else(|| self.out.join("teacher.ckpt"));
        load_checkpoint(&path).with_context(|| format!("loading teacher {}", path.display()))
    }

    fn store_path(&self, store: &Option<PathBuf>) -> PathBuf {
        store.clone().unwrap_or_else(|| self.out.join("features.hskf"))
    }
}

fn write_json(path: &Path, value: &impl serde::Serialize) -> Result<()> {
    std::fs::write(path, serde_json::to_vec_pretty(value)?).with_context(|| format!("writing {}", path.display()))
}

fn hex(bytes: &[u8]) -> String {
    bytes.iter().map(|b| format!("{b:02x}")).collect()
}

fn run(cli: Cli) -> Result<()> {
    let mut run = match &cli.config {
        Some(p) => RunConfig::load(p).with_context(|| format!("loading config {}", p.display()))?,
        None => RunConfig::default(),
    };
    if let Some(seed) = cli.seed {
        run.reseed(seed);
    }
    run.validate()?;
    std::fs::create_dir_all(&cli.out).with_context(|| format!("creating {}", cli.out.display()))?;
    let ctx = Ctx { run, out: cli.out };
    let run = &ctx.run;
    let mut stdout = std::io::stdout().lock();

    match cli.command {
        Command::GenData => {
            let data = run.task.generate()?;
            harness::write_jsonl(&ctx.out.join("train.jsonl"), &data.train)?;
            harness::write_jsonl(&ctx.out.join("dev.jsonl"), &data.dev)?;
            write_json(&ctx.out.join("task.json"), &run.task)?;
            writeln!(stdout, "wrote {} train and {} dev examples to {}", data.train.len(), data.dev.len(), ctx.out.display())?;
        }
        Command::TrainTeacher { inputs } => {
            let data = ctx.data(&inputs)?;
            let mut teacher = Transformer::new(run.teacher.clone(), run.teacher_seed())?;
            let history = train_classifier(&mut teacher, &data.train, &data.dev, &run.teacher_schedule)?;
            let path = ctx.out.join("teacher.ckpt");
            save_checkpoint(&teacher, &path)?;
            let mut csv = String::from("epoch,train_loss,train_accuracy,dev_accuracy\n");
            for (i, ((l, t), d)) in history.train_loss.iter().zip(&history.train_accuracy).zip(&history.dev_accuracy).enumerate() {
                csv.push_str(&format!("{i},{l:.8},{t:.6},{d:.6}\n"));
            }
            std::fs::write(ctx.out.join("teacher_history.csv"), csv)?;
            writeln!(stdout, "teacher dev accuracy {:.4}, saved to {}", history.dev_accuracy.last().copied().unwrap_or(0.0), path.display())?;
        }
        Command::Extract { inputs, store } => {
            let data = ctx.data(&inputs)?;
            let teacher = ctx.teacher(&inputs)?;
            let counting = CountingTeacher::new(&teacher);
            let records = extract_records(&counting, &data.train, &run.compression, run.student.num_layers, run.extract_batch_size)?;
            let header = StoreHeader::new(teacher_digest(&teacher), run.compression.clone(), teacher.config().hidden_dim, teacher.config().num_classes, run.rle_masks)?;
            let path = ctx.store_path(&store);
            let bytes = write_store(&path, &header, &records)?;
            let report = FeatureStore::open(&path)?.size_report()?;
            write_json(&ctx.out.join("size_report.json"), &report)?;
            writeln!(stdout, "wrote {} records ({bytes} bytes) to {}", records.len(), path.display())?;
        }
        Command::Distill { mode, inputs, store } => {
            let data = ctx.data(&inputs)?;
            let mut student = Transformer::new(run.student.clone(), run.student_seed)?;
            let report = match mode {
                ModeArg::Online => {
                    let teacher = ctx.teacher(&inputs)?;
                    let mut projections = ProjectionSet::new(run.student.hidden_dim, teacher.config().hidden_dim, run.projection_seed);
                    let counting = CountingTeacher::new(&teacher);
                    distill(&mut student, &mut projections, &Source::Online(&counting), &run.compression, &data.train, &data.dev, &run.hsk, &run.prediction)?
                }
                ModeArg::Offline => {
                    let path = ctx.store_path(&store);
                    let store = FeatureStore::open(&path).with_context(|| format!("opening {}", path.display()))?;
                    let mut projections = ProjectionSet::new(run.student.hidden_dim, store.header().dim, run.projection_seed);
                    distill(&mut student, &mut projections, &Source::Offline(&store), &run.compression, &data.train, &data.dev, &run.hsk, &run.prediction)?
                }
            };
            save_checkpoint(&student, &ctx.out.join("student.ckpt"))?;
            report.save_csv(&ctx.out.join("distill.csv"))?;
            write_json(&ctx.out.join("distill.json"), &report)?;
            writeln!(
                stdout,
                "student dev accuracy {:.4}, teacher forward passes {}",
                report.final_dev_accuracy.unwrap_or(0.0),
                report.teacher_forward_passes
            )?;
        }
        Command::Sweep { inputs } => {
            let data = ctx.data(&inputs)?;
            let teacher = ctx.teacher(&inputs)?;
            let table = harness::run_sweep(run, &teacher, &data, &ctx.out)?;
            table.save(&ctx.out)?;
            table.write_summary_csv(&mut stdout)?;
        }
        Command::Bench { inputs, device_label } => {
            let data = ctx.data(&inputs)?;
            let teacher = ctx.teacher(&inputs)?;
            let report = harness::bench_timing(&teacher, &run.student, &run.compression, &data.train, &run.bench, run.student_seed, &device_label, &ctx.out)?;
            write_json(&ctx.out.join("bench.json"), &report)?;
            writeln!(
                stdout,
                "online {:.1} steps/s, offline {:.1} steps/s, speedup {:.2}x",
                report.online_steps_per_sec, report.offline_steps_per_sec, report.speedup
            )?;
        }
        Command::Inspect { path } => {
            let bytes = std::fs::read(&path).with_context(|| format!("reading {}", path.display()))?;
            let summary = if bytes.starts_with(&STORE_MAGIC[..]) {
                let store = FeatureStore::from_bytes(bytes)?;
                let h = store.header();
                serde_json::json!({
                    "kind": "feature_store",
                    "records": store.len(),
                    "teacher_digest": hex(&h.teacher_digest),
                    "config": h.config,
                    "dim": h.dim,
                    "num_classes": h.num_classes,
                    "rle_masks": h.rle_masks,
                    "static_masks": h.static_masks.len(),
                    "size_report": store.size_report()?,
                })
            } else if bytes.starts_with(&CHECKPOINT_MAGIC[..]) {
                let model = load_checkpoint(&path)?;
                serde_json::json!({
                    "kind": "checkpoint",
                    "config": model.config(),
                    "parameters": model.num_parameters(),
                    "digest": hex(&teacher_digest(&model)),
                })
            } else {
                let examples = harness::read_jsonl(&path)?;
                let classes = examples.iter().map(|e| e.label + 1).max().unwrap_or(0);
                let mut counts = vec![0usize; classes];
                for e in &examples {
                    counts[e.label] += 1;
                }
                serde_json::json!({
                    "kind": "dataset",
                    "examples": examples.len(),
                    "max_len": examples.iter().map(|e| e.seq.len()).max().unwrap_or(0),
                    "label_counts": counts,
                })
            };
            writeln!(stdout, "{}", serde_json::to_string_pretty(&summary)?)?;
        }
        Command::SepStats { inputs, limit } => {
            let data = ctx.data(&inputs)?;
            let teacher = ctx.teacher(&inputs)?;
            let n = limit.unwrap_or(data.dev.len()).min(data.dev.len());
            let seqs: Vec<_> = data.dev[..n].iter().map(|e| e.seq.clone()).collect();
            let stats = hsk_core::compress::sep_rank_stats(&teacher, &seqs)?;
            let mut csv = String::from("layer,top1_fraction,top3_fraction\n");
            for s in &stats {
                csv.push_str(&format!("{},{:.6},{:.6}\n", s.layer, s.top1_fraction, s.top3_fraction));
            }
            std::fs::write(ctx.out.join("sep_stats.csv"), &csv)?;
            write!(stdout, "{csv}")?;
        }
    }
    Ok(())
}

/// 3 for failures of the file system, 2 for everything the caller got wrong.
fn exit_code(err: &anyhow::Error) -> u8 {
    for cause in err.chain() {
        if let Some(e) = cause.downcast_ref::<Error>() {
            return if e.is_io() { 3 } else { 2 };
        }
        if cause.downcast_ref::<std::io::Error>().is_some() {
            return 3;
        }
    }
    2
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(err) => {
            eprintln!("error: {err:#}");
            ExitCode::from(exit_code(&err))
        }
    }
}
