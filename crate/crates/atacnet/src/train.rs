//! The optimization recipe: Nesterov-accelerated SGD with a step LR
//! schedule, coupled weight decay (BN affines and biases exempt), a
//! deterministic epoch loop, CSV metrics, and checkpointing.

use std::path::Path;
use std::time::Instant;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::autograd::{Parameter, Tape};
use crate::data::{transform_image, LabeledBatch, IMAGE_PIXELS};
use crate::error::{Error, Result};
use crate::model::{CheckpointMeta, Model};
use crate::nn::BnMode;
use crate::seeding::mix_seed;
use crate::tensor::Tensor;

const SHUFFLE_TAG: u64 = 0x5fu64 << 32;
const AUGMENT_TAG: u64 = 0xau64 << 32;

/// Full training recipe. Dataset and model descriptors are opaque strings
/// echoed into manifests and checkpoints.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub base_lr: f64,
    pub epochs: usize,
    pub weight_decay: f64,
    pub batch_size: usize,
    pub momentum: f64,
    pub lr_decay_factor: f64,
    pub lr_decay_epochs: Vec<usize>,
    pub seed: u64,
    pub augment: bool,
    /// When false (the default), the wall-time column is written as zero so
    /// that identical config + seed reproduces the metrics file bitwise.
    pub record_wall_time: bool,
    pub dataset: String,
    pub model_spec: String,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            base_lr: 0.2,
            epochs: 400,
            weight_decay: 1e-4,
            batch_size: 128,
            momentum: 0.9,
            lr_decay_factor: 0.1,
            lr_decay_epochs: vec![300, 350],
            seed: 1,
            augment: true,
            record_wall_time: false,
            dataset: String::new(),
            model_spec: String::new(),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0 {
            return Err(Error::invalid("epochs must be >= 1"));
        }
        if self.batch_size == 0 {
            return Err(Error::invalid("batch_size must be >= 1"));
        }
        if !(self.base_lr.is_finite() && self.base_lr >= 0.0) {
            return Err(Error::invalid("base_lr must be finite and >= 0"));
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return Err(Error::invalid("momentum must be in [0, 1)"));
        }
        if !(self.weight_decay.is_finite() && self.weight_decay >= 0.0) {
            return Err(Error::invalid("weight_decay must be finite and >= 0"));
        }
        if !(self.lr_decay_factor.is_finite() && self.lr_decay_factor > 0.0) {
            return Err(Error::invalid("lr_decay_factor must be positive"));
        }
        for pair in self.lr_decay_epochs.windows(2) {
            if pair[1] <= pair[0] {
                return Err(Error::invalid("lr_decay_epochs must be strictly increasing"));
            }
        }
        if let Some(&last) = self.lr_decay_epochs.last() {
            if last >= self.epochs {
                return Err(Error::invalid(format!(
                    "lr decay epoch {last} is not < epochs {}",
                    self.epochs
                )));
            }
        }
        Ok(())
    }
}

/// One epoch's logged measurements.
#[derive(Debug, Clone, PartialEq)]
pub struct MetricsRow {
    pub epoch: usize,
    pub train_loss: f64,
    pub train_acc: f64,
    pub test_acc: f64,
    pub lr: f64,
    pub wall_time_sec: f64,
}

pub const METRICS_HEADER: &str = "epoch,train_loss,train_acc,test_acc,lr,wall_time_sec";

pub fn metrics_csv_row(r: &MetricsRow) -> String {
    format!(
        "{},{:.6},{:.6},{:.6},{:.6},{:.3}",
        r.epoch, r.train_loss, r.train_acc, r.test_acc, r.lr, r.wall_time_sec
    )
}

pub fn metrics_csv(rows: &[MetricsRow]) -> String {
    let mut out = String::from(METRICS_HEADER);
    out.push('\n');
    for r in rows {
        out.push_str(&metrics_csv_row(r));
        out.push('\n');
    }
    out
}

/// base_lr scaled by `factor^(number of decay epochs <= epoch)`.
pub fn lr_at_epoch(cfg: &TrainConfig, epoch: usize) -> f64 {
    let decays = cfg.lr_decay_epochs.iter().filter(|&&d| d <= epoch).count();
    cfg.base_lr * cfg.lr_decay_factor.powi(decays as i32)
}

/// One Nesterov-momentum update:
/// `g = grad + wd * w; v = mu * v + g; w -= lr * (g + mu * v)`.
///
/// The caller chooses `weight_decay` per parameter; pass zero for exempt
/// parameters. Rejects non-finite gradients, naming the parameter.
pub fn nag_step(p: &mut Parameter, lr: f64, momentum: f64, weight_decay: f64) -> Result<()> {
    if !p.grad.is_finite() {
        return Err(Error::NonFinite(format!("gradient of {}", p.name)));
    }
    let n = p.value.numel();
    for i in 0..n {
        let g = p.grad.data()[i] + weight_decay * p.value.data()[i];
        let v = momentum * p.momentum.data()[i] + g;
        p.momentum.data_mut()[i] = v;
        p.value.data_mut()[i] -= lr * (g + momentum * v);
    }
    Ok(())
}

/// Applies [`nag_step`] across the whole store with the decay-exemption
/// policy (BN affines and biases never decay).
pub fn optimizer_step(model: &mut Model, lr: f64, momentum: f64, weight_decay: f64) -> Result<()> {
    for id in model.params.ids().collect::<Vec<_>>() {
        let p = model.params.get_mut(id);
        if !p.trainable {
            continue;
        }
        let wd = if p.weight_decay() { weight_decay } else { 0.0 };
        nag_step(p, lr, momentum, wd)?;
    }
    Ok(())
}

/// Accuracy and mean loss over a dataset with eval-mode batch norm.
pub fn evaluate(model: &mut Model, data: &LabeledBatch, batch_size: usize) -> Result<(f64, f64)> {
    if data.is_empty() {
        return Err(Error::invalid("evaluate on empty dataset"));
    }
    let n = data.len();
    let mut correct = 0usize;
    let mut loss_sum = 0.0;
    let mut start = 0;
    while start < n {
        let end = (start + batch_size).min(n);
        let indices: Vec<usize> = (start..end).collect();
        let batch = data.gather(&indices);
        let mut tape = Tape::new();
        let (logits, loss) = model.forward_loss(&mut tape, &batch.images, &batch.labels, BnMode::Eval)?;
        loss_sum += tape.value(loss).item()? * batch.len() as f64;
        correct += count_correct(tape.value(logits), &batch.labels);
        start = end;
    }
    Ok((correct as f64 / n as f64, loss_sum / n as f64))
}

fn count_correct(logits: &Tensor, labels: &[usize]) -> usize {
    let [n, k] = logits.dims2().expect("logits rank 2");
    let mut correct = 0;
    for row in 0..n {
        let slice = &logits.data()[row * k..(row + 1) * k];
        let mut best = 0;
        for j in 1..k {
            if slice[j] > slice[best] {
                best = j;
            }
        }
        if best == labels[row] {
            correct += 1;
        }
    }
    correct
}

/// Run-level options beyond the recipe itself.
pub struct TrainSession<'a> {
    pub cfg: &'a TrainConfig,
    /// Where checkpoints are written; `None` trains without touching disk.
    pub run_dir: Option<&'a Path>,
    /// First epoch to run (non-zero when resuming from a checkpoint).
    pub start_epoch: usize,
}

/// Trains in place and returns one [`MetricsRow`] per completed epoch.
///
/// Deterministic for a fixed (config, seed): shuffling and augmentation
/// draw from per-epoch streams keyed by the original dataset index, so the
/// schedule does not depend on batch composition or thread count. A
/// non-finite loss or gradient aborts the run; the previous epoch's
/// checkpoint is left in place.
pub fn train(
    model: &mut Model,
    session: &TrainSession,
    train_data: &LabeledBatch,
    test_data: &LabeledBatch,
) -> Result<Vec<MetricsRow>> {
    let cfg = session.cfg;
    cfg.validate()?;
    if train_data.is_empty() || test_data.is_empty() {
        return Err(Error::invalid("train and test splits must be non-empty"));
    }
    let n = train_data.len();
    // Metrics stream to disk as epochs complete, so an aborted run keeps
    // every finished row. A resume appends to the existing file.
    let mut metrics_file = match session.run_dir {
        Some(dir) => {
            let path = dir.join("metrics.csv");
            let mut file = std::fs::OpenOptions::new()
                .create(true)
                .append(session.start_epoch > 0)
                .truncate(session.start_epoch == 0)
                .write(true)
                .open(path)?;
            if session.start_epoch == 0 {
                use std::io::Write;
                writeln!(file, "{METRICS_HEADER}")?;
            }
            Some(file)
        }
        None => None,
    };
    let mut rows = Vec::new();
    for epoch in session.start_epoch..cfg.epochs {
        let t0 = Instant::now();
        let lr = lr_at_epoch(cfg, epoch);
        let epoch_seed = mix_seed(cfg.seed, SHUFFLE_TAG + epoch as u64);
        let mut order: Vec<usize> = (0..n).collect();
        order.shuffle(&mut ChaCha8Rng::seed_from_u64(epoch_seed));

        let mut loss_sum = 0.0;
        let mut correct = 0usize;
        for chunk in order.chunks(cfg.batch_size) {
            let mut batch = train_data.gather(chunk);
            if cfg.augment {
                batch = augment_by_index(&batch, chunk, mix_seed(cfg.seed, AUGMENT_TAG + epoch as u64));
            }
            let mut tape = Tape::new();
            let (logits, loss) =
                model.forward_loss(&mut tape, &batch.images, &batch.labels, BnMode::Train)?;
            let loss_value = tape.value(loss).item()?;
            if !loss_value.is_finite() {
                return Err(Error::NonFinite(format!("loss at epoch {epoch}")));
            }
            loss_sum += loss_value * batch.len() as f64;
            correct += count_correct(tape.value(logits), &batch.labels);
            model.params.zero_grads();
            tape.backward(loss, &mut model.params)?;
            optimizer_step(model, lr, cfg.momentum, cfg.weight_decay)?;
        }

        let (test_acc, _) = evaluate(model, test_data, cfg.batch_size)?;
        let row = MetricsRow {
            epoch,
            train_loss: loss_sum / n as f64,
            train_acc: correct as f64 / n as f64,
            test_acc,
            lr,
            wall_time_sec: if cfg.record_wall_time {
                t0.elapsed().as_secs_f64()
            } else {
                0.0
            },
        };
        if let Some(file) = &mut metrics_file {
            use std::io::Write;
            writeln!(file, "{}", metrics_csv_row(&row))?;
            file.flush()?;
        }
        rows.push(row);

        if let Some(dir) = session.run_dir {
            let meta = CheckpointMeta {
                model_spec: cfg.model_spec.clone(),
                epochs_completed: epoch + 1,
            };
            model.save_checkpoint(&dir.join("last.ckpt"), &meta)?;
            let milestone = epoch + 1 == cfg.epochs || cfg.lr_decay_epochs.contains(&(epoch + 1));
            if milestone {
                model.save_checkpoint(&dir.join(format!("epoch_{:04}.ckpt", epoch + 1)), &meta)?;
            }
        }
    }
    Ok(rows)
}

/// Augmentation keyed by each image's original dataset index, so the same
/// (seed, epoch) schedule produces the same pixels regardless of how the
/// epoch is batched.
fn augment_by_index(batch: &LabeledBatch, indices: &[usize], seed: u64) -> LabeledBatch {
    use rand::Rng;
    let n = batch.len();
    let mut out = vec![0.0f64; n * IMAGE_PIXELS];
    for (i, &orig) in indices.iter().enumerate() {
        let mut rng = ChaCha8Rng::seed_from_u64(mix_seed(seed, orig as u64));
        let dy = rng.gen_range(0..=8);
        let dx = rng.gen_range(0..=8);
        let flip = rng.gen_bool(0.5);
        transform_image(
            &batch.images.data()[i * IMAGE_PIXELS..(i + 1) * IMAGE_PIXELS],
            &mut out[i * IMAGE_PIXELS..(i + 1) * IMAGE_PIXELS],
            dy,
            dx,
            flip,
        );
    }
    LabeledBatch {
        images: Tensor::new(batch.images.shape().to_vec(), out).expect("augment shape"),
        labels: batch.labels.clone(),
    }
}
