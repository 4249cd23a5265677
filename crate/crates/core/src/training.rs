//! Loss, learning-rate schedule, optimizer and the training loop.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::time::Instant;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data::{load_rgb, prepare_sample, stack_inputs, AugmentationConfig, Manifest, PreparedSample};
use crate::error::{Error, Result};
use crate::geometry::{EncodedTarget, FINGER_COUNT};
use crate::network::{save_checkpoint, FingertipNet, Gradients, HeadOutputs, ModelConfig};
use crate::scalar::Scalar;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub lr0: f64,
    pub power: f64,
    /// Nesterov momentum.
    pub momentum: f64,
    pub batch_size: usize,
    pub epochs: usize,
    pub restart_fraction: f64,
    pub restart_lr: f64,
    /// Huber threshold in normalized-offset units.
    pub huber_delta: f64,
    /// Write an intermediate checkpoint every this many epochs (0 = final only).
    pub checkpoint_every: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            lr0: 1e-2,
            power: 0.9,
            momentum: 0.9,
            batch_size: 64,
            epochs: 100,
            restart_fraction: 0.25,
            restart_lr: 6.5e-3,
            huber_delta: 1.0,
            checkpoint_every: 5,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("lr0", self.lr0),
            ("power", self.power),
            ("restart_lr", self.restart_lr),
            ("huber_delta", self.huber_delta),
        ];
        for (name, v) in positive {
            if !(v.is_finite() && v > 0.0) {
                return Err(Error::invalid(format!("{name} must be positive, got {v}")));
            }
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return Err(Error::invalid("momentum must lie in [0, 1)"));
        }
        if self.batch_size == 0 {
            return Err(Error::invalid("batch_size must be > 0"));
        }
        if self.epochs == 0 {
            return Err(Error::invalid("epochs must be > 0"));
        }
        if !(self.restart_fraction > 0.0 && self.restart_fraction < 1.0) {
            return Err(Error::invalid("restart_fraction must lie in (0, 1)"));
        }
        Ok(())
    }

    pub fn schedule(&self, total_iterations: usize) -> Result<PolySchedule> {
        PolySchedule::with_restart(
            self.lr0,
            self.power,
            total_iterations,
            self.restart_fraction,
            self.restart_lr,
        )
    }
}

/// Polynomial decay `lr0 * (1 - i/M)^power` with an optional single warm restart.
///
/// With a restart at iteration `R`, iterations `R..=M` follow a fresh decay
/// `restart_lr * (1 - (i - R)/(M - R))^power`.
#[derive(Clone, Debug, PartialEq)]
pub struct PolySchedule {
    pub lr0: f64,
    pub power: f64,
    pub total: usize,
    pub restart: Option<(usize, f64)>,
}

impl PolySchedule {
    pub fn new(lr0: f64, power: f64, total: usize) -> Result<Self> {
        if total == 0 {
            return Err(Error::invalid("schedule needs at least one iteration"));
        }
        Ok(Self {
            lr0,
            power,
            total,
            restart: None,
        })
    }

    /// Restart at `R = floor(fraction * M)`, which must satisfy `0 < R < M`.
    pub fn with_restart(lr0: f64, power: f64, total: usize, fraction: f64, restart_lr: f64) -> Result<Self> {
        let mut s = Self::new(lr0, power, total)?;
        let r = (fraction * total as f64).floor() as usize;
        if r == 0 || r >= total {
            return Err(Error::invalid(format!(
                "restart iteration {r} must lie strictly inside (0, {total})"
            )));
        }
        s.restart = Some((r, restart_lr));
        Ok(s)
    }

    pub fn restart_iteration(&self) -> Option<usize> {
        self.restart.map(|(r, _)| r)
    }

    pub fn lr(&self, i: usize) -> Result<f64> {
        let m = self.total;
        if i > m {
            return Err(Error::invalid(format!("iteration {i} beyond schedule length {m}")));
        }
        Ok(match self.restart {
            Some((r, lr_r)) if i >= r => lr_r * (1.0 - (i - r) as f64 / (m - r) as f64).powf(self.power),
            _ => self.lr0 * (1.0 - i as f64 / m as f64).powf(self.power),
        })
    }
}

/// Huber penalty of a residual.
pub fn huber<T: Scalar>(r: T, delta: T) -> T {
    let a = r.abs();
    if a <= delta {
        T::of(0.5) * r * r
    } else {
        delta * (a - T::of(0.5) * delta)
    }
}

/// Derivative of [`huber`] with respect to the residual.
pub fn huber_grad<T: Scalar>(r: T, delta: T) -> T {
    if r.abs() <= delta {
        r
    } else {
        delta * r.signum()
    }
}

/// Cross-entropy of `softmax(row)` against class `target`, plus its gradient.
pub fn softmax_cross_entropy<T: Scalar>(row: &[T], target: usize) -> (T, Vec<T>) {
    let max = row.iter().copied().fold(T::neg_infinity(), T::max);
    let exps: Vec<T> = row.iter().map(|v| (*v - max).exp()).collect();
    let sum: T = exps.iter().copied().sum();
    let loss = sum.ln() - (row[target] - max);
    let grad = exps
        .iter()
        .enumerate()
        .map(|(j, e)| *e / sum - if j == target { T::one() } else { T::zero() })
        .collect();
    (loss, grad)
}

/// Mean over the five finger rows of softmax cross-entropy.
pub fn classification_loss<T: Scalar>(class_scores: &[T], targets: &[usize; FINGER_COUNT]) -> Result<T> {
    Ok(classification_loss_grad(class_scores, targets)?.0)
}

fn classification_loss_grad<T: Scalar>(class_scores: &[T], targets: &[usize; FINGER_COUNT]) -> Result<(T, Vec<T>)> {
    if !class_scores.len().is_multiple_of(FINGER_COUNT) || class_scores.is_empty() {
        return Err(Error::invalid("class scores must hold five equal rows"));
    }
    let classes = class_scores.len() / FINGER_COUNT;
    let rows = T::of(FINGER_COUNT as f64);
    let mut loss = T::zero();
    let mut grad = Vec::with_capacity(class_scores.len());
    for (i, &t) in targets.iter().enumerate() {
        if t >= classes {
            return Err(Error::invalid(format!("target class {t} out of range 0..{classes}")));
        }
        let (l, g) = softmax_cross_entropy(&class_scores[i * classes..(i + 1) * classes], t);
        loss = loss + l / rows;
        grad.extend(g.into_iter().map(|v| v / rows));
    }
    Ok((loss, grad))
}

/// Huber over both offset components, averaged over present fingers (0 if none).
pub fn regression_loss<T: Scalar>(
    offsets: &[T],
    targets: &[[T; 2]; FINGER_COUNT],
    mask: &[bool; FINGER_COUNT],
    delta: T,
) -> T {
    regression_loss_grad(offsets, targets, mask, delta).0
}

fn regression_loss_grad<T: Scalar>(
    offsets: &[T],
    targets: &[[T; 2]; FINGER_COUNT],
    mask: &[bool; FINGER_COUNT],
    delta: T,
) -> (T, Vec<T>) {
    let present = mask.iter().filter(|m| **m).count();
    let mut grad = vec![T::zero(); FINGER_COUNT * 2];
    if present == 0 {
        return (T::zero(), grad);
    }
    let n = T::of(present as f64);
    let mut loss = T::zero();
    for i in (0..FINGER_COUNT).filter(|i| mask[*i]) {
        for c in 0..2 {
            let r = offsets[2 * i + c] - targets[i][c];
            loss = loss + huber(r, delta) / n;
            grad[2 * i + c] = huber_grad(r, delta) / n;
        }
    }
    (loss, grad)
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LossBreakdown<T> {
    pub total: T,
    pub classification: T,
    pub regression: T,
}

/// Classification plus regression, each averaged over the batch.
pub fn total_loss<T: Scalar>(
    outputs: &HeadOutputs<T>,
    targets: &[EncodedTarget<T>],
    delta: T,
) -> Result<LossBreakdown<T>> {
    Ok(total_loss_with_grad(outputs, targets, delta)?.0)
}

/// [`total_loss`] and its gradient with respect to every head output.
pub fn total_loss_with_grad<T: Scalar>(
    outputs: &HeadOutputs<T>,
    targets: &[EncodedTarget<T>],
    delta: T,
) -> Result<(LossBreakdown<T>, HeadOutputs<T>)> {
    if targets.len() != outputs.batch || outputs.batch == 0 {
        return Err(Error::invalid(format!(
            "{} targets for a batch of {}",
            targets.len(),
            outputs.batch
        )));
    }
    let b = T::of(outputs.batch as f64);
    let mut grad = HeadOutputs::zeros(outputs.batch, outputs.classes);
    let (mut cls, mut reg) = (T::zero(), T::zero());
    let per_cls = FINGER_COUNT * outputs.classes;
    for (k, t) in targets.iter().enumerate() {
        let (lc, gc) = classification_loss_grad(outputs.sample_scores(k), &t.anchor_class)?;
        let (lr, gr) = regression_loss_grad(outputs.sample_offsets(k), &t.offset, &t.mask, delta);
        cls = cls + lc / b;
        reg = reg + lr / b;
        for (dst, g) in grad.class_scores[k * per_cls..(k + 1) * per_cls].iter_mut().zip(gc) {
            *dst = g / b;
        }
        for (dst, g) in grad.offsets[k * 10..(k + 1) * 10].iter_mut().zip(gr) {
            *dst = g / b;
        }
    }
    Ok((
        LossBreakdown {
            total: cls + reg,
            classification: cls,
            regression: reg,
        },
        grad,
    ))
}

/// SGD with Nesterov momentum:
/// `v <- mu*v - lr*g; w <- w + mu*v - lr*g`.
pub struct NesterovSgd<T> {
    momentum: T,
    velocity: Vec<Vec<T>>,
}

impl<T: Scalar> NesterovSgd<T> {
    pub fn new(model: &FingertipNet<T>, momentum: f64) -> Self {
        Self {
            momentum: T::of(momentum),
            velocity: model.zero_grads(),
        }
    }

    pub fn step(&mut self, model: &mut FingertipNet<T>, grads: &Gradients<T>, lr: f64) {
        let lr = T::of(lr);
        let mu = self.momentum;
        for ((w, v), g) in model.params_mut().into_iter().zip(&mut self.velocity).zip(grads) {
            for ((wi, vi), gi) in w.iter_mut().zip(v.iter_mut()).zip(g) {
                *vi = mu * *vi - lr * *gi;
                *wi = *wi + mu * *vi - lr * *gi;
            }
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct EpochLog {
    pub epoch: usize,
    /// Iterations completed at the end of the epoch.
    pub iteration: usize,
    /// Rate used by the epoch's last iteration.
    pub lr: f64,
    pub mean_loss: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct IterationLog {
    pub iteration: usize,
    pub lr: f64,
    pub loss: f64,
}

#[derive(Clone, Debug)]
pub struct TrainOutcome {
    pub checkpoint: PathBuf,
    pub log_path: PathBuf,
    pub epochs: Vec<EpochLog>,
    pub iterations: Vec<IterationLog>,
}

/// Loads and crops every manifest record once.
pub fn prepare_manifest(manifest: &Manifest, input_size: usize) -> Result<Vec<PreparedSample>> {
    manifest
        .records
        .iter()
        .map(|r| {
            let img = load_rgb(&manifest.image_path(r))?;
            prepare_sample(r, &img, input_size, 0.0)
        })
        .collect()
}

/// Trains a fresh model on `manifest` and writes checkpoints plus logs into `out_dir`.
///
/// Files: `model.ckpt` (+ `model.json`), `epoch_XXX.ckpt` every
/// `checkpoint_every` epochs, `train_log.csv` (one line per epoch) and
/// `iterations.csv`.
pub fn train(
    train_cfg: &TrainConfig,
    model_cfg: &ModelConfig,
    aug: &AugmentationConfig,
    manifest: &Manifest,
    out_dir: &Path,
    seed: u64,
) -> Result<TrainOutcome> {
    train_cfg.validate()?;
    model_cfg.validate()?;
    aug.validate()?;
    if manifest.records.is_empty() {
        return Err(Error::invalid("cannot train on an empty manifest"));
    }
    fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir, e))?;
    let samples = prepare_manifest(manifest, model_cfg.input_size)?;
    let model = FingertipNet::<f32>::new(model_cfg, seed)?;
    train_prepared(train_cfg, model, aug, &samples, out_dir, seed)
}

/// Training loop over already-prepared samples.
pub fn train_prepared<T: Scalar>(
    cfg: &TrainConfig,
    mut model: FingertipNet<T>,
    aug: &AugmentationConfig,
    samples: &[PreparedSample],
    out_dir: &Path,
    seed: u64,
) -> Result<TrainOutcome> {
    cfg.validate()?;
    if samples.is_empty() {
        return Err(Error::invalid("no training samples"));
    }
    fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir, e))?;
    let grid = model.config().anchor_grid::<T>()?;
    let size = model.config().input_size;
    let per_epoch = samples.len().div_ceil(cfg.batch_size);
    let schedule = cfg.schedule(cfg.epochs * per_epoch)?;
    let delta = T::of(cfg.huber_delta);
    let mut opt = NesterovSgd::new(&model, cfg.momentum);
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x005e_ed0f_7a1e);

    let log_path = out_dir.join("train_log.csv");
    let mut log = fs::File::create(&log_path).map_err(|e| Error::io(&log_path, e))?;
    writeln!(log, "epoch,iteration,lr,mean_loss").map_err(|e| Error::io(&log_path, e))?;
    let iter_path = out_dir.join("iterations.csv");
    let mut iter_log = fs::File::create(&iter_path).map_err(|e| Error::io(&iter_path, e))?;
    writeln!(iter_log, "iteration,lr,loss").map_err(|e| Error::io(&iter_path, e))?;

    let mut order: Vec<usize> = (0..samples.len()).collect();
    let mut iteration = 0;
    let mut epochs = Vec::with_capacity(cfg.epochs);
    let mut iterations = Vec::with_capacity(cfg.epochs * per_epoch);
    for epoch in 1..=cfg.epochs {
        let started = Instant::now();
        order.shuffle(&mut rng);
        let mut loss_sum = 0.0;
        let mut lr = 0.0;
        for chunk in order.chunks(cfg.batch_size) {
            let mut inputs = Vec::with_capacity(chunk.len());
            let mut targets = Vec::with_capacity(chunk.len());
            for &i in chunk {
                let s = samples[i].augment(&grid, aug, &mut rng)?;
                inputs.push(s.input);
                targets.push(s.target);
            }
            let refs: Vec<&[T]> = inputs.iter().map(|v| v.as_slice()).collect();
            let batch = stack_inputs(&refs, size)?;
            let (out, tape) = model.forward_train(&batch)?;
            let (loss, d_out) = total_loss_with_grad(&out, &targets, delta)?;
            let grads = model.backward(tape, &d_out)?;
            lr = schedule.lr(iteration)?;
            opt.step(&mut model, &grads, lr);
            let loss = loss.total.to_f64_lossy();
            if !loss.is_finite() {
                return Err(Error::invalid(format!("loss diverged at iteration {iteration}")));
            }
            writeln!(iter_log, "{iteration},{lr:e},{loss}").map_err(|e| Error::io(&iter_path, e))?;
            iterations.push(IterationLog { iteration, lr, loss });
            loss_sum += loss;
            iteration += 1;
        }
        let entry = EpochLog {
            epoch,
            iteration,
            lr,
            mean_loss: loss_sum / per_epoch as f64,
        };
        writeln!(log, "{},{},{:e},{}", entry.epoch, entry.iteration, entry.lr, entry.mean_loss)
            .map_err(|e| Error::io(&log_path, e))?;
        log::info!(
            "epoch {epoch}/{}: mean loss {:.5}, lr {:.3e} ({:.1}s)",
            cfg.epochs,
            entry.mean_loss,
            entry.lr,
            started.elapsed().as_secs_f64()
        );
        epochs.push(entry);
        if cfg.checkpoint_every > 0 && epoch % cfg.checkpoint_every == 0 && epoch < cfg.epochs {
            save_checkpoint(&model, &out_dir.join(format!("epoch_{epoch:03}.ckpt")), Some(seed))?;
        }
    }
    let checkpoint = out_dir.join("model.ckpt");
    save_checkpoint(&model, &checkpoint, Some(seed))?;
    Ok(TrainOutcome {
        checkpoint,
        log_path,
        epochs,
        iterations,
    })
}
