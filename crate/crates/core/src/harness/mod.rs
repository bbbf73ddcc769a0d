//! Experiment driver: synthetic data, teachers, sweeps over the amount of
//! hidden-state knowledge, and online/offline timing.

mod bench;
mod sweep;
mod task;

use serde::{Deserialize, Serialize};

use crate::compress::{CompressionConfig, LengthStrategy, WidthStrategy};
use crate::error::Result;
use crate::kd::{Phase, TrainSpec};
use crate::transformer::{Activation, ClassifierSchedule, ModelConfig};

pub use bench::{bench_mode, bench_timing, BenchReport, BenchSpec, Mode};
pub use sweep::{aggregate, run_sweep, Aggregate, ConfigMean, RowKind, SweepPlan, SweepRow, SweepTable, SweepTarget};
pub use task::{read_jsonl, write_jsonl, Dataset, SyntheticTask, TaskKind, FIRST_CONTENT};

/// Everything one experiment needs. Every field has a desk-scale default.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RunConfig {
    pub task: SyntheticTask,
    pub teacher: ModelConfig,
    pub student: ModelConfig,
    pub teacher_schedule: ClassifierSchedule,
    pub student_seed: u64,
    pub projection_seed: u64,
    pub compression: CompressionConfig,
    pub hsk: TrainSpec,
    pub prediction: TrainSpec,
    pub sweep: SweepPlan,
    pub bench: BenchSpec,
    pub extract_batch_size: usize,
    pub rle_masks: bool,
}

pub fn model_config(layers: usize, dim: usize, heads: usize, task: &SyntheticTask) -> ModelConfig {
    ModelConfig {
        num_layers: layers,
        hidden_dim: dim,
        num_heads: heads,
        ffn_dim: 4 * dim,
        vocab_size: task.vocab_size,
        max_seq_len: task.max_seq_len(),
        num_segments: 2,
        num_classes: task.num_classes,
        activation: Activation::Gelu,
        dropout: 0.0,
    }
}

impl Default for RunConfig {
    fn default() -> Self {
        let task = SyntheticTask::default();
        let teacher = model_config(8, 64, 4, &task);
        let student = model_config(4, 32, 2, &task);
        let max_len = task.max_seq_len();
        let hsk = TrainSpec { learning_rate: 1e-3, batch_size: 32, max_seq_len: max_len, num_epochs: 6, ..TrainSpec::new(Phase::Hsk) };
        let prediction = TrainSpec { learning_rate: 1e-3, batch_size: 32, max_seq_len: max_len, num_epochs: 3, ..TrainSpec::new(Phase::Prediction) };
        Self {
            teacher_schedule: ClassifierSchedule { learning_rate: 5e-4, batch_size: 32, num_epochs: 20, ..Default::default() },
            student_seed: 0,
            projection_seed: 0,
            compression: CompressionConfig {
                n_depth: 2,
                n_length: 2,
                width_fraction: 1.0,
                length_strategy: LengthStrategy::AttNoSep,
                width_strategy: WidthStrategy::Mag,
                ..CompressionConfig::full(student.num_layers, teacher.num_layers, max_len)
            },
            hsk,
            prediction,
            sweep: SweepPlan::default(),
            bench: BenchSpec::default(),
            extract_batch_size: 64,
            rle_masks: false,
            task,
            teacher,
            student,
        }
    }
}

fn splitmix(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Independent sub-seed number `k` of `seed`.
pub fn derive_seed(seed: u64, k: u64) -> u64 {
    splitmix(seed ^ splitmix(k))
}

impl RunConfig {
    pub fn load(path: &std::path::Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        Ok(serde_json::from_str(&text)?)
    }

    /// Replaces every seed with one derived from `seed`.
    pub fn reseed(&mut self, seed: u64) {
        self.task.seed = seed;
        self.teacher_schedule.seed = derive_seed(seed, 1);
        self.student_seed = derive_seed(seed, 2);
        self.projection_seed = derive_seed(seed, 3);
        self.compression.seed = derive_seed(seed, 4);
        self.hsk.seed = derive_seed(seed, 5);
        self.prediction.seed = derive_seed(seed, 6);
        self.sweep.seed = derive_seed(seed, 7);
    }

    /// Seed for initializing the teacher.
    pub fn teacher_seed(&self) -> u64 {
        derive_seed(self.task.seed, 8)
    }

    pub fn validate(&self) -> Result<()> {
        self.task.validate()?;
        self.teacher.validate()?;
        self.student.validate()?;
        self.compression.validate(self.student.num_layers, self.teacher.num_layers)?;
        self.hsk.validate()?;
        self.prediction.validate()?;
        self.sweep.validate()?;
        Ok(())
    }
}

#[cfg(test)]
mod tests;
