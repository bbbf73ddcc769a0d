//! Two-phase distillation: hidden-state matching, then prediction matching.
//!
//! Teacher knowledge comes either from a live teacher (online) or from a
//! feature store written beforehand (offline). Both paths feed the same loss
//! code with the same batches, so their losses agree.

use std::cell::Cell;
use std::io::Write;
use std::path::Path;
use std::time::Instant;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::compress::{compress, CompressedHsk, CompressionConfig};
use crate::data::{length_batches, sequential_batches, Example};
use crate::error::{ensure, Error, Result};
use crate::graph::{Graph, Var};
use crate::optim::{Adam, Schedule};
use crate::store::{FeatureRecord, FeatureStore};
use crate::tensor::{Scalar, Tensor};
use crate::transformer::{accuracy, BatchForward, Dropout, ParamMode, Transformer};

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MaskApplication {
    /// Masked-out dimensions are dropped from both sides of the comparison.
    #[default]
    BothSides,
    /// The student is pulled towards the zero-filled teacher vector.
    TeacherOnly,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Phase {
    Hsk,
    Prediction,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainSpec {
    pub phase: Phase,
    pub learning_rate: f64,
    #[serde(default)]
    pub schedule: Schedule,
    pub batch_size: usize,
    pub max_seq_len: usize,
    pub num_epochs: usize,
    #[serde(default)]
    pub seed: u64,
    #[serde(default)]
    pub mask_application: MaskApplication,
    #[serde(default = "default_temperature")]
    pub temperature: f64,
    /// Stops the phase after this many optimizer steps.
    #[serde(default)]
    pub max_steps: Option<usize>,
}

fn default_temperature() -> f64 {
    1.0
}

impl TrainSpec {
    pub fn new(phase: Phase) -> Self {
        let schedule = match phase {
            Phase::Hsk => Schedule::Constant,
            Phase::Prediction => Schedule::LinearDecay,
        };
        Self {
            phase,
            learning_rate: 1e-3,
            schedule,
            batch_size: 32,
            max_seq_len: 64,
            num_epochs: 1,
            seed: 0,
            mask_application: MaskApplication::BothSides,
            temperature: 1.0,
            max_steps: None,
        }
    }

    pub fn validate(&self) -> Result<()> {
        ensure!(self.learning_rate > 0.0 && self.learning_rate.is_finite(), "learning_rate must be positive");
        ensure!(self.batch_size > 0, "batch_size must be positive");
        ensure!(self.max_seq_len > 0, "max_seq_len must be positive");
        ensure!(self.temperature > 0.0, "temperature must be positive");
        Ok(())
    }
}

/// One `d_S×d_T` map per student layer, created on first use.
#[derive(Clone, Debug, PartialEq)]
pub struct ProjectionSet {
    pub student_dim: usize,
    pub teacher_dim: usize,
    seed: u64,
    mats: Vec<Option<Tensor<f32>>>,
}

impl ProjectionSet {
    pub fn new(student_dim: usize, teacher_dim: usize, seed: u64) -> Self {
        Self { student_dim, teacher_dim, seed, mats: Vec::new() }
    }

    pub fn get(&self, layer: usize) -> Option<&Tensor<f32>> {
        self.mats.get(layer).and_then(Option::as_ref)
    }

    /// Initialization depends only on the seed and the layer, not on creation order.
    pub fn get_or_init(&mut self, layer: usize) -> &mut Tensor<f32> {
        if self.mats.len() <= layer {
            self.mats.resize(layer + 1, None);
        }
        let (ds, dt, seed) = (self.student_dim, self.teacher_dim, self.seed);
        self.mats[layer].get_or_insert_with(|| {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            rng.set_stream(layer as u64);
            let sigma = 1.0 / (ds as f32).sqrt();
            let normal = Normal::new(0.0, sigma).unwrap();
            let data = (0..ds * dt)
                .map(|_| loop {
                    let v: f32 = normal.sample(&mut rng);
                    if v.abs() <= 2.0 * sigma {
                        break v;
                    }
                })
                .collect();
            Tensor::new(vec![ds, dt], data).unwrap()
        })
    }

    /// Layers that have a projection.
    pub fn layers(&self) -> impl Iterator<Item = usize> + '_ {
        self.mats.iter().enumerate().filter(|(_, m)| m.is_some()).map(|(l, _)| l)
    }
}

/// Layer-wise masked MSE between projected student states and the kept teacher
/// activations, averaged over every compared element of the batch.
///
/// `projections[l]` is the graph handle of `W_l`. Every sample must share the
/// pair layout of the first.
pub fn hsk_loss<T: Scalar>(
    g: &mut Graph<T>,
    student: &BatchForward,
    batch: &[&CompressedHsk],
    projections: &[Option<Var>],
    mask_application: MaskApplication,
) -> Result<Var> {
    ensure!(!batch.is_empty() && batch.len() == student.batch, "{} feature sets for a batch of {}", batch.len(), student.batch);
    let first = batch[0];
    let dt = first.dim;
    let ds = g.shape(student.hidden[0])[1];
    for h in batch {
        ensure!(h.seq_len == student.seq, "features cover {} tokens, student saw {}", h.seq_len, student.seq);
        ensure!(h.dim == dt, "teacher width differs within the batch");
        ensure!(
            h.pairs.iter().map(|p| p.student_layer).eq(first.pairs.iter().map(|p| p.student_layer)),
            "feature sets in one batch keep different layers"
        );
    }
    let total: usize = batch.iter().flat_map(|h| h.pairs.iter().map(|p| p.tokens.len() * dt)).sum();
    ensure!(total > 0, "no teacher features to match");
    let scale = T::one() / T::from_usize(total).unwrap();
    let mut loss: Option<Var> = None;
    for (k, pair) in first.pairs.iter().enumerate() {
        let l = pair.student_layer;
        ensure!(l < student.hidden.len(), "student has no layer {l}");
        let w = projections.get(l).copied().flatten().ok_or_else(|| Error::contract(format!("no projection for layer {l}")))?;
        ensure!(g.shape(w) == [ds, dt], "projection for layer {l} is {:?}, expected [{ds}, {dt}]", g.shape(w));
        let mut rows = Vec::new();
        let mut target = Vec::new();
        let mut mask = Vec::new();
        for (b, h) in batch.iter().enumerate() {
            let p = &h.pairs[k];
            rows.extend(p.tokens.iter().map(|&t| b * student.seq + t));
            let (tv, mv) = p.dense(dt);
            target.extend(tv.into_iter().map(|v| T::from_f64_lossy(v as f64)));
            mask.extend(mv.into_iter().map(|v| T::from_f64_lossy(v as f64)));
        }
        let picked = g.gather_rows(student.hidden[l], &rows)?;
        let projected = g.matmul(picked, w)?;
        let mask = match mask_application {
            MaskApplication::BothSides => Some(mask),
            MaskApplication::TeacherOnly => None,
        };
        let term = g.masked_sse(projected, target, mask, scale)?;
        loss = Some(match loss {
            Some(acc) => g.add(acc, term)?,
            None => term,
        });
    }
    Ok(loss.expect("at least one pair"))
}

/// Cross-entropy from `softmax(teacher/T)` to `softmax(student/T)`, averaged over rows.
pub fn prediction_loss<T: Scalar>(g: &mut Graph<T>, student_logits: Var, teacher_logits: &[f32], temperature: f64) -> Result<Var> {
    let (rows, c) = (g.shape(student_logits)[0], g.shape(student_logits)[1]);
    ensure!(teacher_logits.len() == rows * c, "{} teacher logits for {rows}×{c} student logits", teacher_logits.len());
    let mut target = vec![0.0f64; rows * c];
    for (src, dst) in teacher_logits.chunks_exact(c).zip(target.chunks_exact_mut(c)) {
        let max = src.iter().fold(f64::NEG_INFINITY, |m, &z| m.max(z as f64 / temperature));
        let mut z = 0.0;
        for (d, &s) in dst.iter_mut().zip(src) {
            *d = (s as f64 / temperature - max).exp();
            z += *d;
        }
        dst.iter_mut().for_each(|d| *d /= z);
    }
    let target = target.into_iter().map(T::from_f64_lossy).collect();
    g.soft_cross_entropy(student_logits, target, T::from_f64_lossy(temperature))
}

/// A teacher that counts the sequences it has been run on.
#[derive(Debug)]
pub struct CountingTeacher<'a> {
    pub model: &'a Transformer<f32>,
    passes: Cell<u64>,
}

impl<'a> CountingTeacher<'a> {
    pub fn new(model: &'a Transformer<f32>) -> Self {
        Self { model, passes: Cell::new(0) }
    }

    pub fn passes(&self) -> u64 {
        self.passes.get()
    }

    /// Teacher features and logits for one batch; without `config` the features are left empty.
    fn features(&self, examples: &[&Example], config: Option<&CompressionConfig>, student_layers: usize) -> Result<Vec<FeatureRecord>> {
        let seqs: Vec<_> = examples.iter().map(|e| &e.seq).collect();
        self.passes.set(self.passes.get() + seqs.len() as u64);
        let traces = self.model.forward_batch(&seqs)?;
        traces
            .iter()
            .zip(examples)
            .map(|(t, e)| {
                let hsk = match config {
                    Some(c) => compress(t, &e.seq, c, student_layers)?,
                    None => CompressedHsk { seq_len: e.seq.len(), dim: t.hidden[0].shape()[1], pairs: Vec::new() },
                };
                Ok(FeatureRecord { sample_id: 0, hsk, teacher_logits: t.logits.clone() })
            })
            .collect()
    }
}

/// Where teacher knowledge comes from during distillation.
#[derive(Debug)]
pub enum Source<'a> {
    Online(&'a CountingTeacher<'a>),
    Offline(&'a FeatureStore),
}

/// Runs the teacher over `examples` and compresses its states; record ids are example indices.
pub fn extract_records(
    teacher: &CountingTeacher<'_>,
    examples: &[Example],
    config: &CompressionConfig,
    student_layers: usize,
    batch_size: usize,
) -> Result<Vec<FeatureRecord>> {
    let lengths: Vec<usize> = examples.iter().map(|e| e.seq.len()).collect();
    let mut out: Vec<Option<FeatureRecord>> = vec![None; examples.len()];
    for batch in sequential_batches(&lengths, batch_size) {
        let refs: Vec<&Example> = batch.iter().map(|&i| &examples[i]).collect();
        for (mut r, &i) in teacher.features(&refs, Some(config), student_layers)?.into_iter().zip(&batch) {
            r.sample_id = i as u64;
            out[i] = Some(r);
        }
    }
    Ok(out.into_iter().map(|r| r.expect("every example batched")).collect())
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochMetrics {
    pub epoch: usize,
    pub phase: Phase,
    pub loss: f64,
    pub dev_acc: Option<f64>,
    pub ms_per_step: f64,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct DistillReport {
    pub epochs: Vec<EpochMetrics>,
    pub hsk_step_losses: Vec<f64>,
    pub prediction_step_losses: Vec<f64>,
    pub teacher_forward_passes: u64,
    pub final_dev_accuracy: Option<f64>,
}

impl DistillReport {
    pub fn write_csv(&self, w: &mut impl Write) -> std::io::Result<()> {
        writeln!(w, "epoch,phase,loss,dev_acc,ms_per_step")?;
        for e in &self.epochs {
            let phase = match e.phase {
                Phase::Hsk => "hsk",
                Phase::Prediction => "prediction",
            };
            let acc = e.dev_acc.map(|a| format!("{a:.6}")).unwrap_or_default();
            writeln!(w, "{},{phase},{:.8},{acc},{:.4}", e.epoch, e.loss, e.ms_per_step)?;
        }
        Ok(())
    }

    pub fn save_csv(&self, path: &Path) -> Result<()> {
        let mut f = std::io::BufWriter::new(std::fs::File::create(path)?);
        self.write_csv(&mut f)?;
        f.flush()?;
        Ok(())
    }
}

/// Distills `student` from `source`: hidden-state matching for `hsk.num_epochs`
/// epochs, then prediction matching for `pred.num_epochs` epochs.
#[allow(clippy::too_many_arguments)]
pub fn distill(
    student: &mut Transformer<f32>,
    projections: &mut ProjectionSet,
    source: &Source<'_>,
    config: &CompressionConfig,
    train: &[Example],
    dev: &[Example],
    hsk: &TrainSpec,
    pred: &TrainSpec,
) -> Result<DistillReport> {
    hsk.validate()?;
    pred.validate()?;
    ensure!(hsk.phase == Phase::Hsk && pred.phase == Phase::Prediction, "phase specs given in the wrong order");
    ensure!(!train.is_empty(), "training set is empty");
    let student_layers = student.config().num_layers;
    ensure!(
        projections.student_dim == student.config().hidden_dim,
        "projections expect student width {}, model has {}",
        projections.student_dim,
        student.config().hidden_dim
    );
    for (i, e) in train.iter().enumerate() {
        let limit = hsk.max_seq_len.min(pred.max_seq_len);
        if e.seq.len() > limit {
            return Err(Error::Input(format!("example {i} has {} tokens, limit is {limit}", e.seq.len())));
        }
    }
    match source {
        Source::Online(t) => {
            ensure!(projections.teacher_dim == t.model.config().hidden_dim, "projection width differs from the teacher's");
        }
        Source::Offline(store) => {
            ensure!(store.header().config == *config, "feature store was built for a different compression config");
            ensure!(projections.teacher_dim == store.header().dim, "projection width differs from the stored features");
            ensure!(store.header().num_classes == student.config().num_classes, "stored logits have a different class count");
        }
    }
    let fetch = |idx: &[usize], phase: Phase| -> Result<Vec<FeatureRecord>> {
        match source {
            Source::Online(t) => {
                let refs: Vec<&Example> = idx.iter().map(|&i| &train[i]).collect();
                t.features(&refs, (phase == Phase::Hsk).then_some(config), student_layers)
            }
            Source::Offline(store) => idx.iter().map(|&i| store.read_record(i as u64)).collect(),
        }
    };

    let mut report = DistillReport::default();
    let passes_before = match source {
        Source::Online(t) => t.passes(),
        Source::Offline(_) => 0,
    };
    let lengths: Vec<usize> = train.iter().map(|e| e.seq.len()).collect();
    let n_params = student.params().len();
    for spec in [hsk, pred] {
        let per_epoch = length_batches(&lengths, spec.batch_size, spec.seed, 0).len();
        let limit = spec.max_steps.unwrap_or(usize::MAX);
        let total = (per_epoch * spec.num_epochs).min(limit);
        let mut adam = Adam::new();
        let mut step = 0;
        for epoch in 0..spec.num_epochs {
            if step >= limit {
                break;
            }
            let (mut loss_sum, mut ms_sum, mut steps) = (0.0, 0.0, 0usize);
            for batch in length_batches(&lengths, spec.batch_size, spec.seed, epoch as u64) {
                if step >= limit {
                    break;
                }
                let started = Instant::now();
                let records = fetch(&batch, spec.phase)?;
                let seqs: Vec<_> = batch.iter().map(|&i| &train[i].seq).collect();
                let mut dropout = Dropout::new(student.config().dropout, spec.seed, step as u64);
                let mut g = Graph::new();
                let fwd = student.forward_graph(&mut g, &seqs, ParamMode::Trainable(0), Some(&mut dropout))?;
                let loss = match spec.phase {
                    Phase::Hsk => {
                        let mut proj = vec![None; student_layers + 1];
                        for p in &records[0].hsk.pairs {
                            let l = p.student_layer;
                            ensure!(l <= student_layers, "features reference student layer {l}");
                            proj[l] = Some(g.param(n_params + l, projections.get_or_init(l))?);
                        }
                        let hs: Vec<&CompressedHsk> = records.iter().map(|r| &r.hsk).collect();
                        hsk_loss(&mut g, &fwd, &hs, &proj, spec.mask_application)?
                    }
                    Phase::Prediction => {
                        let t: Vec<f32> = records.iter().flat_map(|r| r.teacher_logits.iter().copied()).collect();
                        prediction_loss(&mut g, fwd.logits, &t, spec.temperature)?
                    }
                };
                let value = g.scalar(loss) as f64;
                if !value.is_finite() {
                    return Err(Error::Diverged { epoch, step, loss: value });
                }
                let grads = g.backward(loss)?;
                let lr = spec.schedule.rate(spec.learning_rate, step, total);
                for (id, grad) in grads.params() {
                    if id < n_params {
                        adam.update(id, &mut student.params_mut()[id], grad, lr);
                    } else {
                        adam.update(id, projections.get_or_init(id - n_params), grad, lr);
                    }
                }
                match spec.phase {
                    Phase::Hsk => report.hsk_step_losses.push(value),
                    Phase::Prediction => report.prediction_step_losses.push(value),
                }
                loss_sum += value;
                ms_sum += started.elapsed().as_secs_f64() * 1e3;
                steps += 1;
                step += 1;
            }
            let dev_acc = match spec.phase {
                Phase::Prediction if !dev.is_empty() => Some(accuracy(student, dev)?),
                _ => None,
            };
            report.epochs.push(EpochMetrics {
                epoch,
                phase: spec.phase,
                loss: loss_sum / steps.max(1) as f64,
                dev_acc,
                ms_per_step: ms_sum / steps.max(1) as f64,
            });
        }
    }
    if let Source::Online(t) = source {
        report.teacher_forward_passes = t.passes() - passes_before;
    }
    report.final_dev_accuracy = if dev.is_empty() { None } else { Some(accuracy(student, dev)?) };
    Ok(report)
}
