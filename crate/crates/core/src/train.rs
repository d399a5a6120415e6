//! Training engine: pruning-rate schedule, Adam, epoch loop with
//! validation-best checkpointing, and ensemble prediction.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};
use std::sync::Arc;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::checkpoint::{save_checkpoint, write_atomic, Checkpoint};
use crate::densenet::{ForwardOptions, Model, ModelConfig};
use crate::error::{Error, Result};
use crate::hsi::PatchExtractor;
use crate::metrics::compute_metrics;
use crate::params::ParamStore;
use crate::tape::Tape;
use crate::tensor::Tensor5;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub epochs: usize,
    pub learning_rate: f64,
    pub batch_size: usize,
    pub seed: u64,
    /// Independent runs; run `r` is seeded with `seed + r`.
    pub runs: usize,
    pub beta1: f64,
    pub beta2: f64,
    pub adam_eps: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 200,
            learning_rate: 0.0005,
            batch_size: 32,
            seed: 0,
            runs: 4,
            beta1: 0.9,
            beta2: 0.999,
            adam_eps: 1e-8,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.epochs < 12 {
            return Err(Error::config(format!(
                "epochs = {} but the pruning schedule needs at least 12",
                self.epochs
            )));
        }
        if self.runs == 0 {
            return Err(Error::config("runs must be at least 1"));
        }
        if self.batch_size == 0 {
            return Err(Error::config("batch_size must be at least 1"));
        }
        if !(self.learning_rate >= 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::config(format!("learning_rate {} is invalid", self.learning_rate)));
        }
        for (name, b) in [("beta1", self.beta1), ("beta2", self.beta2)] {
            if !(0.0..1.0).contains(&b) {
                return Err(Error::config(format!("{name} = {b} must lie in [0, 1)")));
            }
        }
        if !(self.adam_eps > 0.0) {
            return Err(Error::config("adam_eps must be positive"));
        }
        Ok(())
    }
}

/// Three-stage pruning rate: zero during warm-up, a linear ramp, then the
/// target for fine-tuning.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Schedule {
    pub epochs: usize,
    pub warmup: usize,
    pub finetune: usize,
    pub target: f64,
}

impl Schedule {
    pub fn new(epochs: usize, target: f64) -> Self {
        Self {
            epochs,
            warmup: epochs / 12,
            finetune: epochs / 4,
            target,
        }
    }

    pub fn ramp(&self) -> usize {
        self.epochs - self.warmup - self.finetune
    }

    pub fn eps(&self, epoch: usize) -> f64 {
        if epoch < self.warmup {
            0.0
        } else if epoch >= self.epochs - self.finetune {
            self.target
        } else {
            self.target * (epoch - self.warmup) as f64 / self.ramp() as f64
        }
    }
}

pub fn eps_schedule(epoch: usize, schedule: &Schedule) -> f64 {
    schedule.eps(epoch)
}

/// Adam with bias correction; moments are kept per parameter in store order.
#[derive(Clone, Debug, PartialEq)]
pub struct Adam {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub step: u64,
    pub m: Vec<Vec<f64>>,
    pub v: Vec<Vec<f64>>,
}

impl Adam {
    pub fn new(store: &ParamStore, beta1: f64, beta2: f64, eps: f64) -> Self {
        let zeros: Vec<Vec<f64>> = store.iter().map(|p| vec![0.0; p.tensor.numel()]).collect();
        Self {
            beta1,
            beta2,
            eps,
            step: 0,
            m: zeros.clone(),
            v: zeros,
        }
    }

    pub fn from_config(store: &ParamStore, cfg: &TrainConfig) -> Self {
        Self::new(store, cfg.beta1, cfg.beta2, cfg.adam_eps)
    }

    /// Applies one update from the gradients stored on the parameters.
    /// Parameters without a gradient are treated as having a zero gradient.
    pub fn step(&mut self, store: &mut ParamStore, lr: f64) -> Result<()> {
        if self.m.len() != store.len() {
            return Err(Error::Shape {
                op: "adam",
                axis: "parameters",
                expected: self.m.len(),
                found: store.len(),
            });
        }
        for p in store.iter() {
            if let Some(g) = &p.tensor.grad {
                if let Some(i) = g.iter().position(|v| !v.is_finite()) {
                    return Err(Error::NonFinite(format!("gradient of `{}` at element {i}", p.name)));
                }
            }
        }
        self.step += 1;
        let t = self.step as i32;
        let c1 = 1.0 - self.beta1.powi(t);
        let c2 = 1.0 - self.beta2.powi(t);
        for ((p, m), v) in store.iter_mut().zip(&mut self.m).zip(&mut self.v) {
            let grad = p.tensor.grad.take();
            let data = p.tensor.data_mut();
            for i in 0..data.len() {
                let g = grad.as_ref().map_or(0.0, |g| g[i]);
                m[i] = self.beta1 * m[i] + (1.0 - self.beta1) * g;
                v[i] = self.beta2 * v[i] + (1.0 - self.beta2) * g * g;
                let mhat = m[i] / c1;
                let vhat = v[i] / c2;
                data[i] -= lr * mhat / (vhat.sqrt() + self.eps);
            }
            p.tensor.grad = grad;
        }
        Ok(())
    }
}

pub fn adam_step(store: &mut ParamStore, state: &mut Adam, lr: f64) -> Result<()> {
    state.step(store, lr)
}

/// Labeled pixels whose patches are cut on demand from a shared extractor.
#[derive(Clone, Debug)]
pub struct PatchDataset {
    extractor: Arc<PatchExtractor>,
    pixels: Vec<usize>,
    labels: Vec<usize>,
}

impl PatchDataset {
    pub fn new(extractor: Arc<PatchExtractor>, pixels: Vec<usize>) -> Result<Self> {
        let labels = pixels
            .iter()
            .map(|&p| extractor.label_of(p))
            .collect::<Result<Vec<_>>>()?;
        Ok(Self {
            extractor,
            pixels,
            labels,
        })
    }

    pub fn len(&self) -> usize {
        self.pixels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.pixels.is_empty()
    }

    pub fn pixels(&self) -> &[usize] {
        &self.pixels
    }

    /// Zero-based class labels.
    pub fn labels(&self) -> &[usize] {
        &self.labels
    }

    /// Stacks the patches of the given sample positions into one batch.
    pub fn batch(&self, indices: &[usize]) -> Result<Tensor5> {
        let patches = indices
            .iter()
            .map(|&i| self.extractor.extract_pixel(self.pixels[i]).map(|s| s.patch))
            .collect::<Result<Vec<_>>>()?;
        Tensor5::stack(&patches.iter().collect::<Vec<_>>())
    }
}

/// One optimization pass over `data` in an order shuffled by `rng`; returns
/// the mean batch loss.
pub fn train_epoch(
    model: &mut Model,
    data: &PatchDataset,
    eps: f64,
    adam: &mut Adam,
    lr: f64,
    batch_size: usize,
    rng: &mut ChaCha8Rng,
    epoch: usize,
) -> Result<f64> {
    if data.is_empty() {
        return Err(Error::config("training split is empty"));
    }
    let mut order: Vec<usize> = (0..data.len()).collect();
    order.shuffle(rng);
    let mut total = 0.0;
    let mut batches = 0usize;
    for (b, chunk) in order.chunks(batch_size.max(1)).enumerate() {
        let x = data.batch(chunk)?;
        let labels: Vec<usize> = chunk.iter().map(|&i| data.labels[i]).collect();
        let mut tape = Tape::new();
        let out = model.forward(&mut tape, &x, ForwardOptions::train(eps))?;
        let loss = tape.softmax_cross_entropy(out.logits, &labels)?;
        let value = tape.value(loss).data()[0];
        if !value.is_finite() {
            return Err(Error::NonFinite(format!("loss {value} at epoch {epoch}, batch {b}")));
        }
        tape.backward(loss)?;
        tape.write_param_grads(model.params_mut())?;
        adam.step(model.params_mut(), lr)?;
        model.apply_bn_stats(&out.bn_stats);
        total += value;
        batches += 1;
    }
    Ok(total / batches as f64)
}

/// Softmax probabilities `(n, K)` for every sample, batch by batch, through
/// the gathered path with running statistics.
pub fn predict_dataset(model: &Model, data: &PatchDataset, eps: f64, batch_size: usize) -> Result<Vec<f64>> {
    let k = model.config().num_classes;
    let mut probs = Vec::with_capacity(data.len() * k);
    let all: Vec<usize> = (0..data.len()).collect();
    for chunk in all.chunks(batch_size.max(1)) {
        let x = data.batch(chunk)?;
        probs.extend_from_slice(model.predict(&x, eps)?.data());
    }
    Ok(probs)
}

/// Row-wise argmax, lower class index on ties.
pub fn argmax_rows(probs: &[f64], k: usize) -> Vec<usize> {
    probs
        .chunks(k)
        .map(|row| {
            row.iter()
                .enumerate()
                .fold((0, f64::NEG_INFINITY), |best, (i, &p)| if p > best.1 { (i, p) } else { best })
                .0
        })
        .collect()
}

/// Overall accuracy of the model on `data`.
pub fn evaluate_oa(model: &Model, data: &PatchDataset, eps: f64, batch_size: usize) -> Result<f64> {
    let probs = predict_dataset(model, data, eps, batch_size)?;
    let pred = argmax_rows(&probs, model.config().num_classes);
    Ok(compute_metrics(data.labels(), &pred, model.config().num_classes)?.overall_accuracy)
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub eps: f64,
    pub train_loss: f64,
    pub val_oa: f64,
}

pub const HISTORY_HEADER: &str = "# epoch\teps\ttrain_loss\tval_oa";

/// Tab-separated history lines; floats use the shortest exact representation.
pub fn format_history(history: &[EpochRecord]) -> String {
    let mut s = String::from(HISTORY_HEADER);
    s.push('\n');
    for r in history {
        let _ = writeln!(s, "{}\t{}\t{}\t{}", r.epoch, r.eps, r.train_loss, r.val_oa);
    }
    s
}

pub fn parse_history(text: &str) -> Result<Vec<EpochRecord>> {
    text.lines()
        .filter(|l| !l.starts_with('#') && !l.trim().is_empty())
        .map(|l| {
            let f: Vec<&str> = l.split('\t').collect();
            let bad = || Error::config(format!("malformed history line `{l}`"));
            if f.len() != 4 {
                return Err(bad());
            }
            Ok(EpochRecord {
                epoch: f[0].parse().map_err(|_| bad())?,
                eps: f[1].parse().map_err(|_| bad())?,
                train_loss: f[2].parse().map_err(|_| bad())?,
                val_oa: f[3].parse().map_err(|_| bad())?,
            })
        })
        .collect()
}

#[derive(Clone, Debug)]
pub struct RunResult {
    pub run: usize,
    pub seed: u64,
    pub best_epoch: usize,
    pub best_val_oa: f64,
    pub history: Vec<EpochRecord>,
    /// Where the best checkpoint was written, when an output directory was given.
    pub checkpoint_path: Option<PathBuf>,
    pub history_path: Option<PathBuf>,
    pub best: Checkpoint,
}

pub fn checkpoint_file(run: usize) -> String {
    format!("run{run}.dgcn")
}

pub fn history_file(run: usize) -> String {
    format!("run{run}.history.tsv")
}

/// Trains run `run` (seed `cfg.seed + run`) and keeps the weights with the
/// best validation OA. With `out_dir`, the best checkpoint is rewritten on
/// every strict improvement and the history after every epoch.
pub fn fit(
    model_cfg: &ModelConfig,
    train: &PatchDataset,
    val: &PatchDataset,
    cfg: &TrainConfig,
    run: usize,
    out_dir: Option<&Path>,
) -> Result<RunResult> {
    cfg.validate()?;
    if val.is_empty() {
        return Err(Error::config("validation split is empty"));
    }
    let seed = cfg.seed.wrapping_add(run as u64);
    let mut model = Model::new(model_cfg.clone(), seed)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(1);
    let mut adam = Adam::from_config(model.params(), cfg);
    let schedule = Schedule::new(cfg.epochs, model_cfg.target_eps());
    let ckpt_path = out_dir.map(|d| d.join(checkpoint_file(run)));
    let hist_path = out_dir.map(|d| d.join(history_file(run)));

    let mut history = Vec::with_capacity(cfg.epochs);
    let mut best: Option<(usize, f64, Checkpoint)> = None;
    for epoch in 0..cfg.epochs {
        let eps = schedule.eps(epoch);
        let train_loss = train_epoch(
            &mut model,
            train,
            eps,
            &mut adam,
            cfg.learning_rate,
            cfg.batch_size,
            &mut rng,
            epoch,
        )?;
        let val_oa = evaluate_oa(&model, val, eps, cfg.batch_size)?;
        history.push(EpochRecord {
            epoch,
            eps,
            train_loss,
            val_oa,
        });
        log::info!("run {run} epoch {epoch}: eps {eps:.4} loss {train_loss:.5} val OA {val_oa:.4}");
        if best.as_ref().is_none_or(|b| val_oa > b.1) {
            let mut snapshot = model.clone();
            snapshot.params_mut().clear_grads();
            let mut ckpt = Checkpoint::new(snapshot, eps);
            ckpt.attrs.insert("run".into(), run.into());
            ckpt.attrs.insert("epoch".into(), epoch.into());
            ckpt.attrs.insert("val_oa".into(), val_oa.into());
            if let Some(p) = &ckpt_path {
                save_checkpoint(&ckpt, p)?;
            }
            best = Some((epoch, val_oa, ckpt));
        }
        if let Some(p) = &hist_path {
            write_atomic(p, format_history(&history).as_bytes())?;
        }
    }
    let (best_epoch, best_val_oa, best) = best.expect("at least one epoch");
    Ok(RunResult {
        run,
        seed,
        best_epoch,
        best_val_oa,
        history,
        checkpoint_path: ckpt_path,
        history_path: hist_path,
        best,
    })
}

/// All `cfg.runs` runs, at most `threads` at a time. Results are in run order
/// and do not depend on the thread count.
pub fn fit_runs(
    model_cfg: &ModelConfig,
    train: &PatchDataset,
    val: &PatchDataset,
    cfg: &TrainConfig,
    out_dir: Option<&Path>,
    threads: usize,
) -> Result<Vec<RunResult>> {
    cfg.validate()?;
    if let Some(d) = out_dir {
        fs::create_dir_all(d).map_err(|e| Error::io(d, e))?;
    }
    let runs: Vec<usize> = (0..cfg.runs).collect();
    let mut results = Vec::with_capacity(cfg.runs);
    for wave in runs.chunks(threads.max(1)) {
        let outcome: Vec<Result<RunResult>> = std::thread::scope(|s| {
            let handles: Vec<_> = wave
                .iter()
                .map(|&r| s.spawn(move || fit(model_cfg, train, val, cfg, r, out_dir)))
                .collect();
            handles
                .into_iter()
                .map(|h| h.join().unwrap_or_else(|_| Err(Error::config("training thread panicked"))))
                .collect()
        });
        for r in outcome {
            results.push(r?);
        }
    }
    Ok(results)
}

/// Mean of the member models' softmax probabilities, each evaluated at the
/// pruning rate stored in its checkpoint.
pub fn ensemble_predict(members: &[&Checkpoint], x: &Tensor5) -> Result<Tensor5> {
    let first = members
        .first()
        .ok_or_else(|| Error::config("ensemble needs at least one checkpoint"))?;
    for (i, m) in members.iter().enumerate().skip(1) {
        if m.model.config() != first.model.config() {
            return Err(Error::config(format!(
                "checkpoint {i} has a different model configuration from checkpoint 0"
            )));
        }
    }
    let mut sum: Option<Tensor5> = None;
    for m in members {
        let p = m.model.predict(x, m.eps)?;
        match &mut sum {
            None => sum = Some(p),
            Some(s) => s.data_mut().iter_mut().zip(p.data()).for_each(|(a, b)| *a += b),
        }
    }
    let mut out = sum.expect("non-empty");
    let n = members.len() as f64;
    out.data_mut().iter_mut().for_each(|v| *v /= n);
    Ok(out)
}

/// Ensemble probabilities over a whole dataset, row-major `(n, K)`.
pub fn ensemble_predict_dataset(members: &[&Checkpoint], data: &PatchDataset, batch_size: usize) -> Result<Vec<f64>> {
    let all: Vec<usize> = (0..data.len()).collect();
    let mut probs = Vec::new();
    for chunk in all.chunks(batch_size.max(1)) {
        probs.extend_from_slice(ensemble_predict(members, &data.batch(chunk)?)?.data());
    }
    Ok(probs)
}
