//! Optimization loop: cross-entropy loss, AdamW, BPTT training over
//! voxelized event data, evaluation, and the frequency-robustness sweep.

use std::path::{Path, PathBuf};
use std::time::Instant;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::events::EventStream;
use crate::model::Model;
use crate::spectral::{perturb, FreqMask};
use crate::tensor::{Tape, Tensor};

// ---------------------------------------------------------------------------
// Loss
// ---------------------------------------------------------------------------

/// Mean cross entropy of `logits[B, K]` against integer labels,
/// stabilized by per-row max subtraction.
pub fn cross_entropy(tape: &Tape, logits: &Tensor, labels: &[usize]) -> Result<Tensor> {
    if logits.ndim() != 2 {
        return Err(Error::Dim(format!(
            "cross_entropy expects [B, K] logits, got {:?}",
            logits.shape()
        )));
    }
    let (b, k) = (logits.shape()[0], logits.shape()[1]);
    if labels.len() != b {
        return Err(Error::Data(format!(
            "{} labels for batch of {b}",
            labels.len()
        )));
    }
    for (i, &l) in labels.iter().enumerate() {
        if l >= k {
            return Err(Error::Data(format!(
                "label {l} at position {i} out of range for {k} classes"
            )));
        }
    }
    // shift by the detached row max; softmax is shift-invariant
    let row_max = tape.max(logits, Some(&[1]))?.detach();
    let shifted = tape.sub(logits, &tape.reshape(&row_max, &[b, 1])?)?;
    let exp = tape.exp(&shifted);
    let z = tape.sum(&exp, Some(&[1]))?;
    let log_z = tape.ln(&z);
    let log_probs = tape.sub(&shifted, &tape.reshape(&log_z, &[b, 1])?)?;
    let mut onehot = vec![0.0; b * k];
    for (i, &l) in labels.iter().enumerate() {
        onehot[i * k + l] = 1.0;
    }
    let onehot = Tensor::from_vec(&[b, k], onehot)?;
    let picked = tape.sum(&tape.mul(&log_probs, &onehot)?, None)?;
    Ok(tape.mul_scalar(&picked, -1.0 / b as f64))
}

// ---------------------------------------------------------------------------
// AdamW
// ---------------------------------------------------------------------------

#[derive(Clone, Copy, Debug)]
pub struct AdamWConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl Default for AdamWConfig {
    fn default() -> Self {
        AdamWConfig {
            lr: 0.01,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 0.01,
        }
    }
}

/// Single-tensor decoupled-weight-decay Adam update with bias-corrected
/// moments; the optimizer state advances in place.
pub fn adamw_update(
    theta: &mut [f64],
    grad: &[f64],
    m: &mut [f64],
    v: &mut [f64],
    t: u64,
    cfg: &AdamWConfig,
) -> Result<()> {
    if grad.len() != theta.len() || m.len() != theta.len() || v.len() != theta.len() {
        return Err(Error::ShapeMismatch {
            left: vec![theta.len()],
            right: vec![grad.len()],
            context: "adamw parameter vs gradient".into(),
        });
    }
    let bc1 = 1.0 - cfg.beta1.powi(t as i32);
    let bc2 = 1.0 - cfg.beta2.powi(t as i32);
    for i in 0..theta.len() {
        let g = grad[i];
        m[i] = cfg.beta1 * m[i] + (1.0 - cfg.beta1) * g;
        v[i] = cfg.beta2 * v[i] + (1.0 - cfg.beta2) * g * g;
        let m_hat = m[i] / bc1;
        let v_hat = v[i] / bc2;
        theta[i] -= cfg.lr * (m_hat / (v_hat.sqrt() + cfg.eps) + cfg.weight_decay * theta[i]);
    }
    Ok(())
}

pub struct AdamW {
    pub cfg: AdamWConfig,
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
    t: u64,
}

impl AdamW {
    pub fn new(params: &[Tensor], cfg: AdamWConfig) -> AdamW {
        AdamW {
            cfg,
            m: params.iter().map(|p| vec![0.0; p.numel()]).collect(),
            v: params.iter().map(|p| vec![0.0; p.numel()]).collect(),
            t: 0,
        }
    }

    pub fn set_lr(&mut self, lr: f64) {
        self.cfg.lr = lr;
    }

    /// One update over all parameters. A missing gradient counts as zero.
    pub fn step(&mut self, params: &[Tensor]) -> Result<()> {
        if params.len() != self.m.len() {
            return Err(Error::Config(format!(
                "optimizer built for {} tensors, got {}",
                self.m.len(),
                params.len()
            )));
        }
        self.t += 1;
        for (i, p) in params.iter().enumerate() {
            let grad = p.grad().unwrap_or_else(|| vec![0.0; p.numel()]);
            let mut result = Ok(());
            p.apply(|theta| {
                result = adamw_update(theta, &grad, &mut self.m[i], &mut self.v[i], self.t, &self.cfg);
            });
            result?;
        }
        Ok(())
    }
}

// ---------------------------------------------------------------------------
// Datasets
// ---------------------------------------------------------------------------

/// Voxelized, labeled samples ready for the model.
pub struct Dataset {
    /// Per-sample `[T, 2, H, W]` tensors.
    pub grids: Vec<Tensor>,
    pub labels: Vec<usize>,
    pub num_classes: usize,
}

impl Dataset {
    pub fn from_streams(streams: &[EventStream], t_bins: usize, binarize: bool) -> Result<Dataset> {
        let mut grids: Vec<Tensor> = Vec::with_capacity(streams.len());
        let mut labels = Vec::with_capacity(streams.len());
        let mut max_label = 0usize;
        for s in streams {
            let label = s.label.ok_or_else(|| {
                Error::Data("dataset sample is missing a label".into())
            })? as usize;
            max_label = max_label.max(label);
            let grid = crate::events::voxelize(s, t_bins, binarize)?.tensor;
            if let Some(first) = grids.first() {
                if grid.shape() != first.shape() {
                    return Err(Error::ShapeMismatch {
                        left: first.shape().to_vec(),
                        right: grid.shape().to_vec(),
                        context: "mixed sensor geometry in one dataset".into(),
                    });
                }
            }
            grids.push(grid);
            labels.push(label);
        }
        Ok(Dataset {
            grids,
            labels,
            num_classes: max_label + 1,
        })
    }

    pub fn len(&self) -> usize {
        self.grids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.grids.is_empty()
    }

    /// Assembles `[T, B, 2, H, W]` plus labels for the given indices.
    pub fn batch(&self, indices: &[usize]) -> Result<(Tensor, Vec<usize>)> {
        if indices.is_empty() {
            return Err(Error::Data("empty batch".into()));
        }
        let shape = self.grids[indices[0]].shape().to_vec(); // [T, 2, H, W]
        let (t, frame) = (shape[0], shape[1] * shape[2] * shape[3]);
        let b = indices.len();
        let mut data = vec![0.0; t * b * frame];
        for (bi, &idx) in indices.iter().enumerate() {
            let g = self.grids[idx].data();
            for ti in 0..t {
                let src = &g[ti * frame..(ti + 1) * frame];
                let dst = (ti * b + bi) * frame;
                data[dst..dst + frame].copy_from_slice(src);
            }
        }
        let mut out_shape = vec![t, b];
        out_shape.extend_from_slice(&shape[1..]);
        Ok((
            Tensor::from_vec(&out_shape, data)?,
            indices.iter().map(|&i| self.labels[i]).collect(),
        ))
    }
}

// ---------------------------------------------------------------------------
// Training loop
// ---------------------------------------------------------------------------

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum LrSchedule {
    Constant,
    Cosine,
}

impl LrSchedule {
    pub fn parse(s: &str) -> Result<LrSchedule> {
        match s {
            "constant" => Ok(LrSchedule::Constant),
            "cosine" => Ok(LrSchedule::Cosine),
            other => Err(Error::Config(format!(
                "unknown lr schedule '{other}' (constant, cosine)"
            ))),
        }
    }

    pub fn as_str(&self) -> &'static str {
        match self {
            LrSchedule::Constant => "constant",
            LrSchedule::Cosine => "cosine",
        }
    }

    fn lr_at(&self, base: f64, epoch: usize, epochs: usize) -> f64 {
        match self {
            LrSchedule::Constant => base,
            LrSchedule::Cosine => {
                base * 0.5 * (1.0 + (std::f64::consts::PI * epoch as f64 / epochs as f64).cos())
            }
        }
    }
}

#[derive(Clone, Debug)]
pub struct TrainConfig {
    pub lr: f64,
    pub weight_decay: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub seed: u64,
    pub schedule: LrSchedule,
    /// Stop once test accuracy reaches this value.
    pub early_stop_acc: Option<f64>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            lr: 0.01,
            weight_decay: 0.01,
            beta1: 0.9,
            beta2: 0.999,
            epochs: 30,
            batch_size: 16,
            seed: 1,
            schedule: LrSchedule::Cosine,
            early_stop_acc: None,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.lr <= 0.0 {
            return Err(Error::Config(format!("lr must be > 0, got {}", self.lr)));
        }
        for (name, b) in [("beta1", self.beta1), ("beta2", self.beta2)] {
            if !(0.0..1.0).contains(&b) {
                return Err(Error::Config(format!("{name} must be in [0, 1), got {b}")));
            }
        }
        if self.epochs == 0 || self.batch_size == 0 {
            return Err(Error::Config("epochs and batch_size must be >= 1".into()));
        }
        Ok(())
    }
}

#[derive(Clone, Debug)]
pub struct EpochStats {
    pub epoch: usize,
    pub train_loss: f64,
    pub train_acc: f64,
    pub test_acc: f64,
    pub iter_time_ms: f64,
}

#[derive(Clone, Debug, Default)]
pub struct RunRecord {
    pub epochs: Vec<EpochStats>,
    pub checkpoint_path: Option<PathBuf>,
    /// Mean per-iteration wall time over all iterations after 5 warmup
    /// iterations; reported once at least 50 timed iterations ran.
    pub mean_iter_time_ms: Option<f64>,
}

impl RunRecord {
    pub fn final_test_acc(&self) -> Option<f64> {
        self.epochs.last().map(|e| e.test_acc)
    }

    pub fn best_test_acc(&self) -> Option<f64> {
        self.epochs
            .iter()
            .map(|e| e.test_acc)
            .fold(None, |acc, v| Some(acc.map_or(v, |a: f64| a.max(v))))
    }

    pub fn write_csv(&self, path: &Path) -> Result<()> {
        use std::io::Write;
        let mut f = std::fs::File::create(path)?;
        writeln!(f, "epoch,train_loss,train_acc,test_acc,iter_time_ms")?;
        for e in &self.epochs {
            writeln!(
                f,
                "{},{},{},{},{}",
                e.epoch, e.train_loss, e.train_acc, e.test_acc, e.iter_time_ms
            )?;
        }
        Ok(())
    }
}

/// BPTT training: every batch unrolls all T timesteps on one tape and
/// backpropagates once; spike states reset per sequence (they live inside
/// the forward pass). Deterministic for a fixed seed.
pub fn train(
    model: &mut Model,
    train_set: &Dataset,
    test_set: Option<&Dataset>,
    cfg: &TrainConfig,
    out_dir: Option<&Path>,
) -> Result<RunRecord> {
    cfg.validate()?;
    if train_set.is_empty() {
        return Err(Error::Data("empty training set".into()));
    }
    if train_set.grids[0].shape()[0] != model.config.timesteps {
        return Err(Error::Config(format!(
            "data voxelized to T={} but model expects T={}",
            train_set.grids[0].shape()[0],
            model.config.timesteps
        )));
    }
    if train_set.num_classes > model.config.num_classes {
        return Err(Error::Config(format!(
            "dataset has {} classes, model head has {}",
            train_set.num_classes, model.config.num_classes
        )));
    }

    let params = model.parameters();
    let mut opt = AdamW::new(
        &params,
        AdamWConfig {
            lr: cfg.lr,
            beta1: cfg.beta1,
            beta2: cfg.beta2,
            eps: 1e-8,
            weight_decay: cfg.weight_decay,
        },
    );
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut record = RunRecord::default();
    let mut iter_times = Vec::new();
    let mut step = 0u64;

    for epoch in 0..cfg.epochs {
        opt.set_lr(cfg.schedule.lr_at(cfg.lr, epoch, cfg.epochs));
        let mut indices: Vec<usize> = (0..train_set.len()).collect();
        indices.shuffle(&mut rng);

        let mut loss_sum = 0.0;
        let mut correct = 0usize;
        let mut epoch_iter_ms = 0.0;
        let mut iters = 0usize;
        for chunk in indices.chunks(cfg.batch_size) {
            let start = Instant::now();
            let (x, labels) = train_set.batch(chunk)?;
            let tape = Tape::new();
            let logits = model.forward(&tape, &x, true)?;
            let loss = cross_entropy(&tape, &logits, &labels)?;
            loss_sum += loss.item() * labels.len() as f64;
            correct += count_correct(&logits, &labels);
            tape.backward(&loss)?;
            opt.step(&params)?;
            for p in &params {
                p.zero_grad();
            }
            step += 1;
            let ms = start.elapsed().as_secs_f64() * 1e3;
            epoch_iter_ms += ms;
            iter_times.push(ms);
            iters += 1;
        }

        let test_acc = match test_set {
            Some(ts) => evaluate(model, ts, cfg.batch_size)?.accuracy,
            None => f64::NAN,
        };
        record.epochs.push(EpochStats {
            epoch,
            train_loss: loss_sum / train_set.len() as f64,
            train_acc: correct as f64 / train_set.len() as f64,
            test_acc,
            iter_time_ms: epoch_iter_ms / iters as f64,
        });
        if let (Some(target), false) = (cfg.early_stop_acc, test_acc.is_nan()) {
            if test_acc >= target {
                break;
            }
        }
    }

    if iter_times.len() >= 55 {
        let timed = &iter_times[5..];
        record.mean_iter_time_ms = Some(timed.iter().sum::<f64>() / timed.len() as f64);
    }
    if let Some(dir) = out_dir {
        std::fs::create_dir_all(dir)?;
        let ckpt = dir.join("checkpoint.spk");
        model.save(&ckpt, cfg.seed, step)?;
        record.checkpoint_path = Some(ckpt);
        record.write_csv(&dir.join("run_record.csv"))?;
    }
    Ok(record)
}

fn count_correct(logits: &Tensor, labels: &[usize]) -> usize {
    let (b, k) = (logits.shape()[0], logits.shape()[1]);
    let v = logits.data();
    let mut correct = 0;
    for (i, &label) in labels.iter().enumerate().take(b) {
        let row = &v[i * k..(i + 1) * k];
        let mut best = 0usize;
        for (j, &val) in row.iter().enumerate() {
            if val > row[best] {
                best = j;
            }
        }
        if best == label {
            correct += 1;
        }
    }
    correct
}

#[derive(Clone, Debug)]
pub struct EvalResult {
    pub accuracy: f64,
    /// `confusion[true][predicted]`
    pub confusion: Vec<Vec<usize>>,
    pub n: usize,
}

impl EvalResult {
    pub fn write_confusion_csv(&self, path: &Path) -> Result<()> {
        use std::io::Write;
        let mut f = std::fs::File::create(path)?;
        let k = self.confusion.len();
        let header: Vec<String> = (0..k).map(|j| format!("pred_{j}")).collect();
        writeln!(f, "true_class,{}", header.join(","))?;
        for (i, row) in self.confusion.iter().enumerate() {
            let cells: Vec<String> = row.iter().map(|c| c.to_string()).collect();
            writeln!(f, "{},{}", i, cells.join(","))?;
        }
        Ok(())
    }
}

/// Inference-mode accuracy over a dataset.
pub fn evaluate(model: &Model, data: &Dataset, batch_size: usize) -> Result<EvalResult> {
    if data.is_empty() {
        return Err(Error::Data("empty evaluation set".into()));
    }
    let k = model.config.num_classes;
    let mut confusion = vec![vec![0usize; k]; k];
    let mut correct = 0usize;
    let indices: Vec<usize> = (0..data.len()).collect();
    for chunk in indices.chunks(batch_size.max(1)) {
        let (x, labels) = data.batch(chunk)?;
        let tape = Tape::inference();
        let logits = model.forward(&tape, &x, false)?;
        let v = logits.data();
        for (i, &label) in labels.iter().enumerate() {
            let row = &v[i * k..(i + 1) * k];
            let mut best = 0usize;
            for (j, &val) in row.iter().enumerate() {
                if val > row[best] {
                    best = j;
                }
            }
            confusion[label][best] += 1;
            if best == label {
                correct += 1;
            }
        }
    }
    Ok(EvalResult {
        accuracy: correct as f64 / data.len() as f64,
        confusion,
        n: data.len(),
    })
}

// ---------------------------------------------------------------------------
// Robustness sweep
// ---------------------------------------------------------------------------

#[derive(Clone, Copy, Debug)]
pub struct SweepRow {
    pub band_center: f64,
    pub sigma: f64,
    pub accuracy: f64,
}

/// Evaluates accuracy under band-limited noise for each band center.
///
/// Every test grid's per-timestep frame is perturbed in the frequency
/// domain; the noise seed derives from (seed, sample, timestep) only, so
/// bands see the same base noise field through different masks.
pub fn robustness_sweep(
    model: &Model,
    test_set: &Dataset,
    band_centers: &[f64],
    half_width: f64,
    sigma: f64,
    seed: u64,
    batch_size: usize,
) -> Result<Vec<SweepRow>> {
    if test_set.is_empty() {
        return Err(Error::Data("empty test set for robustness sweep".into()));
    }
    if band_centers.is_empty() {
        return Err(Error::Config("no band centers given".into()));
    }
    let shape = test_set.grids[0].shape().to_vec(); // [T, 2, H, W]
    let (h, w) = (shape[2], shape[3]);
    let mut rows = Vec::with_capacity(band_centers.len());
    for &center in band_centers {
        let mask = FreqMask::annulus(h, w, center, half_width)?;
        let mut grids = Vec::with_capacity(test_set.len());
        for (si, grid) in test_set.grids.iter().enumerate() {
            grids.push(perturb_grid(grid, &mask, sigma, seed, si)?);
        }
        let perturbed = Dataset {
            grids,
            labels: test_set.labels.clone(),
            num_classes: test_set.num_classes,
        };
        let acc = evaluate(model, &perturbed, batch_size)?.accuracy;
        rows.push(SweepRow {
            band_center: center,
            sigma,
            accuracy: acc,
        });
    }
    Ok(rows)
}

fn perturb_grid(
    grid: &Tensor,
    mask: &FreqMask,
    sigma: f64,
    seed: u64,
    sample_idx: usize,
) -> Result<Tensor> {
    let shape = grid.shape().to_vec(); // [T, C, H, W]
    let (t, frame) = (shape[0], shape[1] * shape[2] * shape[3]);
    let mut out = vec![0.0; grid.numel()];
    let data = grid.data();
    for ti in 0..t {
        let frame_tensor =
            Tensor::from_vec(&shape[1..], data[ti * frame..(ti + 1) * frame].to_vec())?;
        let frame_seed = seed
            .wrapping_mul(0x5851_F42D_4C95_7F2D)
            .wrapping_add((sample_idx as u64) << 16)
            .wrapping_add(ti as u64);
        let p = perturb(&frame_tensor, mask, sigma, frame_seed)?;
        out[ti * frame..(ti + 1) * frame].copy_from_slice(&p.data());
    }
    Tensor::from_vec(&shape, out)
}

pub fn write_perturb_csv(path: &Path, rows: &[SweepRow]) -> Result<()> {
    use std::io::Write;
    let mut f = std::fs::File::create(path)?;
    writeln!(f, "band_center,sigma,accuracy")?;
    for r in rows {
        writeln!(f, "{},{},{}", r.band_center, r.sigma, r.accuracy)?;
    }
    Ok(())
}
