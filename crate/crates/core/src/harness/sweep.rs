use std::collections::BTreeMap;
use std::io::Write;
use std::path::Path;
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Mutex;

use serde::{Deserialize, Serialize};

use super::bench::Mode;
use super::{derive_seed, Dataset, RunConfig};
use crate::compress::{a_hsk, normalized_a_hsk, sample_configs, CompressionConfig};
use crate::error::{ensure, Result};
use crate::kd::{distill, extract_records, CountingTeacher, ProjectionSet, Source};
use crate::store::{teacher_digest, write_store, FeatureStore, StoreHeader};
use crate::transformer::Transformer;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct SweepTarget {
    pub amount: f64,
    pub tolerance_pct: u32,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SweepPlan {
    pub targets: Vec<SweepTarget>,
    pub configs_per_target: usize,
    pub repetitions: usize,
    pub seed: u64,
    pub workers: usize,
    pub mode: Mode,
    /// Adds the prediction-only and full-tensor reference runs.
    pub baselines: bool,
}

impl Default for SweepPlan {
    fn default() -> Self {
        let t = |amount, tolerance_pct| SweepTarget { amount, tolerance_pct };
        Self {
            targets: vec![t(1.0, 10), t(2.0, 5), t(4.0, 5)],
            configs_per_target: 2,
            repetitions: 3,
            seed: 0,
            workers: 1,
            mode: Mode::Online,
            baselines: true,
        }
    }
}

impl SweepPlan {
    pub fn validate(&self) -> Result<()> {
        ensure!(self.repetitions >= 1, "repetitions must be at least 1");
        ensure!(self.workers >= 1, "workers must be at least 1");
        for t in &self.targets {
            ensure!(t.amount > 0.0 && t.amount.is_finite(), "target amount {} must be positive", t.amount);
            ensure!(matches!(t.tolerance_pct, 5 | 10), "tolerance must be 5 or 10 percent");
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RowKind {
    PredictionOnly,
    FullTensor,
    Compressed,
}

impl RowKind {
    fn label(self) -> &'static str {
        match self {
            RowKind::PredictionOnly => "prediction_only",
            RowKind::FullTensor => "full_tensor",
            RowKind::Compressed => "compressed",
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SweepRow {
    pub kind: RowKind,
    /// Index into the plan's targets (compressed rows only).
    pub target: Option<usize>,
    pub config_index: usize,
    pub n_depth: usize,
    pub n_length: usize,
    pub width_fraction: f64,
    /// At the longest sequence of the task.
    pub a_hsk: f64,
    pub normalized_a_hsk: f64,
    pub repetition: usize,
    pub seed: u64,
    pub dev_accuracy: Option<f64>,
    pub error: Option<String>,
}

/// Mean accuracy of one configuration over its successful repetitions.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ConfigMean {
    pub kind: RowKind,
    pub target: Option<usize>,
    pub config_index: usize,
    pub n_depth: usize,
    pub n_length: usize,
    pub width_fraction: f64,
    pub normalized_a_hsk: f64,
    pub runs: usize,
    pub mean_accuracy: f64,
}

/// Avg/Best/Std over the configuration means that share a target.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Aggregate {
    pub kind: RowKind,
    pub target: Option<usize>,
    pub amount: Option<f64>,
    pub configs: usize,
    pub failed_runs: usize,
    pub avg: f64,
    pub best: f64,
    /// Population standard deviation of the configuration means.
    pub std: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SweepTable {
    pub plan: SweepPlan,
    pub rows: Vec<SweepRow>,
    pub config_means: Vec<ConfigMean>,
    pub aggregates: Vec<Aggregate>,
}

/// Per-configuration means and per-target aggregates; failed runs are skipped.
pub fn aggregate(plan: &SweepPlan, rows: &[SweepRow]) -> (Vec<ConfigMean>, Vec<Aggregate>) {
    let mut by_config: BTreeMap<(RowKind, Option<usize>, usize), (Vec<f64>, usize, &SweepRow)> = BTreeMap::new();
    for r in rows {
        let e = by_config.entry((r.kind, r.target, r.config_index)).or_insert((Vec::new(), 0, r));
        match r.dev_accuracy {
            Some(a) if r.error.is_none() => e.0.push(a),
            _ => e.1 += 1,
        }
    }
    let mut means = Vec::new();
    let mut failed: BTreeMap<(RowKind, Option<usize>), usize> = BTreeMap::new();
    for ((kind, target, config_index), (accs, fails, r)) in &by_config {
        *failed.entry((*kind, *target)).or_default() += fails;
        if accs.is_empty() {
            continue;
        }
        means.push(ConfigMean {
            kind: *kind,
            target: *target,
            config_index: *config_index,
            n_depth: r.n_depth,
            n_length: r.n_length,
            width_fraction: r.width_fraction,
            normalized_a_hsk: r.normalized_a_hsk,
            runs: accs.len(),
            mean_accuracy: accs.iter().sum::<f64>() / accs.len() as f64,
        });
    }
    let mut aggregates = Vec::new();
    for (&(kind, target), &failed_runs) in &failed {
        let group: Vec<f64> = means.iter().filter(|m| m.kind == kind && m.target == target).map(|m| m.mean_accuracy).collect();
        let (avg, best, std) = if group.is_empty() {
            (f64::NAN, f64::NAN, f64::NAN)
        } else {
            let n = group.len() as f64;
            let avg = group.iter().sum::<f64>() / n;
            let best = group.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let std = (group.iter().map(|a| (a - avg).powi(2)).sum::<f64>() / n).sqrt();
            (avg, best, std)
        };
        aggregates.push(Aggregate {
            kind,
            target,
            amount: target.and_then(|t| plan.targets.get(t)).map(|t| t.amount),
            configs: group.len(),
            failed_runs,
            avg,
            best,
            std,
        });
    }
    (means, aggregates)
}

struct Job {
    kind: RowKind,
    target: Option<usize>,
    config_index: usize,
    config: CompressionConfig,
    repetition: usize,
}

/// Distills one student per (configuration, repetition) and tabulates dev accuracy.
/// `scratch` holds temporary feature stores in offline mode.
pub fn run_sweep(run: &RunConfig, teacher: &Transformer<f32>, data: &Dataset, scratch: &Path) -> Result<SweepTable> {
    let plan = &run.sweep;
    plan.validate()?;
    let l_s = run.student.num_layers;
    let l_t = teacher.config().num_layers;
    let max_len = run.task.max_seq_len();
    ensure!(teacher.config().hidden_dim > 0 && teacher.config().num_classes == run.student.num_classes, "teacher and student disagree on classes");

    let mut jobs = Vec::new();
    let mut push = |kind, target, config_index, config: &CompressionConfig| {
        for repetition in 0..plan.repetitions {
            jobs.push(Job { kind, target, config_index, config: config.clone(), repetition });
        }
    };
    if plan.baselines {
        let minimal = CompressionConfig { n_depth: 1, n_length: 1, width_fraction: 0.1, ..run.compression.clone() };
        push(RowKind::PredictionOnly, None, 0, &minimal);
        push(RowKind::FullTensor, None, 0, &CompressionConfig::full(l_s, l_t, max_len));
    }
    let mut failed_targets = Vec::new();
    for (ti, t) in plan.targets.iter().enumerate() {
        let sampled = sample_configs(t.amount, t.tolerance_pct, l_s, max_len, plan.configs_per_target, derive_seed(plan.seed, ti as u64), &run.compression)?;
        if sampled.configs.is_empty() {
            failed_targets.push(ti);
        }
        for (ci, c) in sampled.configs.iter().enumerate() {
            push(RowKind::Compressed, Some(ti), ci, c);
        }
    }

    let results: Mutex<Vec<Option<SweepRow>>> = Mutex::new(vec![None; jobs.len()]);
    let next = AtomicUsize::new(0);
    std::thread::scope(|s| {
        for _ in 0..plan.workers.min(jobs.len()).max(1) {
            s.spawn(|| loop {
                let i = next.fetch_add(1, Ordering::Relaxed);
                let Some(job) = jobs.get(i) else { break };
                let row = run_job(run, teacher, data, scratch, job, i);
                results.lock().expect("no worker panicked")[i] = Some(row);
            });
        }
    });
    let mut rows: Vec<SweepRow> = results.into_inner().expect("no worker panicked").into_iter().map(|r| r.expect("every job ran")).collect();
    for ti in failed_targets {
        rows.push(SweepRow {
            kind: RowKind::Compressed,
            target: Some(ti),
            config_index: 0,
            n_depth: 0,
            n_length: 0,
            width_fraction: 0.0,
            a_hsk: 0.0,
            normalized_a_hsk: 0.0,
            repetition: 0,
            seed: 0,
            dev_accuracy: None,
            error: Some("no feasible configuration in the band".into()),
        });
    }
    let (config_means, aggregates) = aggregate(plan, &rows);
    Ok(SweepTable { plan: plan.clone(), rows, config_means, aggregates })
}

fn run_job(run: &RunConfig, teacher: &Transformer<f32>, data: &Dataset, scratch: &Path, job: &Job, index: usize) -> SweepRow {
    let l_s = run.student.num_layers;
    let max_len = run.task.max_seq_len();
    let rep_seed = derive_seed(run.sweep.seed, 1000 + job.repetition as u64);
    let (a, norm) = match job.kind {
        RowKind::PredictionOnly => (0.0, 0.0),
        _ => (
            a_hsk(&job.config, max_len).unwrap_or(f64::NAN),
            normalized_a_hsk(&job.config, l_s, max_len).unwrap_or(f64::NAN),
        ),
    };
    let accuracy = (|| -> Result<f64> {
        let mut student = Transformer::new(run.student.clone(), derive_seed(rep_seed, 0))?;
        let mut projections = ProjectionSet::new(run.student.hidden_dim, teacher.config().hidden_dim, derive_seed(rep_seed, 1));
        let mut hsk = run.hsk.clone();
        hsk.seed = derive_seed(rep_seed, 2);
        if job.kind == RowKind::PredictionOnly {
            hsk.num_epochs = 0;
        }
        let mut pred = run.prediction.clone();
        pred.seed = derive_seed(rep_seed, 3);
        let report = match run.sweep.mode {
            Mode::Online => {
                let t = CountingTeacher::new(teacher);
                distill(&mut student, &mut projections, &Source::Online(&t), &job.config, &data.train, &data.dev, &hsk, &pred)?
            }
            Mode::Offline => {
                let t = CountingTeacher::new(teacher);
                let records = extract_records(&t, &data.train, &job.config, l_s, run.extract_batch_size)?;
                let header = StoreHeader::new(teacher_digest(teacher), job.config.clone(), teacher.config().hidden_dim, teacher.config().num_classes, run.rle_masks)?;
                let path = scratch.join(format!("sweep-{index}.hskf"));
                write_store(&path, &header, &records)?;
                let store = FeatureStore::open(&path);
                let _ = std::fs::remove_file(&path);
                distill(&mut student, &mut projections, &Source::Offline(&store?), &job.config, &data.train, &data.dev, &hsk, &pred)?
            }
        };
        report.final_dev_accuracy.ok_or_else(|| crate::error::Error::contract("dev set is empty"))
    })();
    let (dev_accuracy, error) = match accuracy {
        Ok(a) => (Some(a), None),
        Err(e) => (None, Some(e.to_string())),
    };
    SweepRow {
        kind: job.kind,
        target: job.target,
        config_index: job.config_index,
        n_depth: if job.kind == RowKind::PredictionOnly { 0 } else { job.config.n_depth },
        n_length: if job.kind == RowKind::PredictionOnly { 0 } else { job.config.n_length },
        width_fraction: if job.kind == RowKind::PredictionOnly { 0.0 } else { job.config.width_fraction },
        a_hsk: a,
        normalized_a_hsk: norm,
        repetition: job.repetition,
        seed: rep_seed,
        dev_accuracy,
        error,
    }
}

fn opt(v: Option<f64>) -> String {
    v.map(|x| format!("{x:.6}")).unwrap_or_default()
}

impl SweepTable {
    pub fn write_runs_csv(&self, w: &mut impl Write) -> std::io::Result<()> {
        writeln!(w, "kind,target,config,n_depth,n_length,width_fraction,a_hsk,normalized_a_hsk,repetition,seed,dev_accuracy,error")?;
        for r in &self.rows {
            let target = r.target.and_then(|t| self.plan.targets.get(t)).map(|t| t.amount);
            let error = r.error.as_deref().unwrap_or("").replace([',', '\n'], ";");
            writeln!(
                w,
                "{},{},{},{},{},{},{},{:.6},{},{},{},{error}",
                r.kind.label(),
                target.map(|t| t.to_string()).unwrap_or_default(),
                r.config_index,
                r.n_depth,
                r.n_length,
                r.width_fraction,
                r.a_hsk,
                r.normalized_a_hsk,
                r.repetition,
                r.seed,
                opt(r.dev_accuracy),
            )?;
        }
        Ok(())
    }

    pub fn write_summary_csv(&self, w: &mut impl Write) -> std::io::Result<()> {
        writeln!(w, "kind,target,configs,failed_runs,avg,best,std")?;
        for a in &self.aggregates {
            writeln!(
                w,
                "{},{},{},{},{:.6},{:.6},{:.6}",
                a.kind.label(),
                a.amount.map(|t| t.to_string()).unwrap_or_default(),
                a.configs,
                a.failed_runs,
                a.avg,
                a.best,
                a.std
            )?;
        }
        Ok(())
    }

    /// Writes `sweep_runs.csv`, `sweep_summary.csv` and `sweep.json` into `dir`.
    pub fn save(&self, dir: &Path) -> Result<()> {
        let mut f = std::io::BufWriter::new(std::fs::File::create(dir.join("sweep_runs.csv"))?);
        self.write_runs_csv(&mut f)?;
        f.flush()?;
        let mut f = std::io::BufWriter::new(std::fs::File::create(dir.join("sweep_summary.csv"))?);
        self.write_summary_csv(&mut f)?;
        f.flush()?;
        std::fs::write(dir.join("sweep.json"), serde_json::to_vec_pretty(self)?)?;
        Ok(())
    }
}
