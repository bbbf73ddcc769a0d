use std::path::Path;
use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::compress::CompressionConfig;
use crate::data::{length_batches, Example};
use crate::error::{ensure, Result};
use crate::kd::{distill, extract_records, CountingTeacher, Phase, ProjectionSet, Source, TrainSpec};
use crate::store::{teacher_digest, write_store, FeatureStore, StoreHeader};
use crate::transformer::{ModelConfig, Transformer};

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Mode {
    #[default]
    Online,
    Offline,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct BenchSpec {
    pub warmup_steps: usize,
    pub steps: usize,
    pub batch_size: usize,
}

impl Default for BenchSpec {
    fn default() -> Self {
        Self { warmup_steps: 50, steps: 500, batch_size: 32 }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BenchReport {
    pub device_label: String,
    pub steps: usize,
    pub warmup_steps: usize,
    pub online_steps_per_sec: f64,
    pub offline_steps_per_sec: f64,
    /// Offline over online throughput.
    pub speedup: f64,
    /// Forward multiply-accumulates for one sequence of mean training length.
    pub teacher_macs: u64,
    pub student_macs: u64,
}

/// Phase-1 distillation throughput in steps per second, measured over
/// `spec.steps` steps after `spec.warmup_steps` untimed ones. The offline
/// store is written to `scratch` before timing starts.
#[allow(clippy::too_many_arguments)]
pub fn bench_mode(
    mode: Mode,
    teacher: &Transformer<f32>,
    student: &ModelConfig,
    config: &CompressionConfig,
    train: &[Example],
    spec: &BenchSpec,
    seed: u64,
    scratch: &Path,
) -> Result<f64> {
    ensure!(spec.steps > 0, "steps must be positive");
    ensure!(!train.is_empty(), "training set is empty");
    let lengths: Vec<usize> = train.iter().map(|e| e.seq.len()).collect();
    let per_epoch = length_batches(&lengths, spec.batch_size, seed, 0).len();
    let max_len = lengths.iter().copied().max().unwrap_or(1);
    let phase = |steps: usize| TrainSpec {
        batch_size: spec.batch_size,
        max_seq_len: max_len,
        num_epochs: steps.div_ceil(per_epoch),
        seed,
        max_steps: Some(steps),
        ..TrainSpec::new(Phase::Hsk)
    };
    let no_pred = TrainSpec { num_epochs: 0, max_seq_len: max_len, ..TrainSpec::new(Phase::Prediction) };

    let mut model = Transformer::new(student.clone(), seed)?;
    let mut projections = ProjectionSet::new(student.hidden_dim, teacher.config().hidden_dim, seed);
    let counting = CountingTeacher::new(teacher);
    let store;
    let source = match mode {
        Mode::Online => Source::Online(&counting),
        Mode::Offline => {
            let records = extract_records(&counting, train, config, student.num_layers, 64)?;
            let header = StoreHeader::new(teacher_digest(teacher), config.clone(), teacher.config().hidden_dim, teacher.config().num_classes, false)?;
            let path = scratch.join(format!("bench-{seed}.hskf"));
            write_store(&path, &header, &records)?;
            let opened = FeatureStore::open(&path);
            let _ = std::fs::remove_file(&path);
            store = opened?;
            Source::Offline(&store)
        }
    };
    if spec.warmup_steps > 0 {
        distill(&mut model, &mut projections, &source, config, train, &[], &phase(spec.warmup_steps), &no_pred)?;
    }
    let started = Instant::now();
    let report = distill(&mut model, &mut projections, &source, config, train, &[], &phase(spec.steps), &no_pred)?;
    let secs = started.elapsed().as_secs_f64();
    ensure!(report.hsk_step_losses.len() == spec.steps, "ran {} steps, expected {}", report.hsk_step_losses.len(), spec.steps);
    Ok(spec.steps as f64 / secs)
}

/// Times both modes on the same data, configuration and seed.
#[allow(clippy::too_many_arguments)]
pub fn bench_timing(
    teacher: &Transformer<f32>,
    student: &ModelConfig,
    config: &CompressionConfig,
    train: &[Example],
    spec: &BenchSpec,
    seed: u64,
    device_label: &str,
    scratch: &Path,
) -> Result<BenchReport> {
    let online = bench_mode(Mode::Online, teacher, student, config, train, spec, seed, scratch)?;
    let offline = bench_mode(Mode::Offline, teacher, student, config, train, spec, seed, scratch)?;
    let mean_len = (train.iter().map(|e| e.seq.len()).sum::<usize>() as f64 / train.len() as f64).round() as usize;
    Ok(BenchReport {
        device_label: device_label.to_string(),
        steps: spec.steps,
        warmup_steps: spec.warmup_steps,
        online_steps_per_sec: online,
        offline_steps_per_sec: offline,
        speedup: offline / online,
        teacher_macs: teacher.config().forward_macs(mean_len),
        student_macs: student.forward_macs(mean_len),
    })
}
