//! The optimization loop: batched forward, composite loss, backward,
//! Adam update, batch-norm buffer blending, CSV logging, checkpoints.
//!
//! Everything is deterministic at a fixed seed when run single-threaded:
//! parameter init, the loss feature extractor, and the batch order all
//! derive from `TrainConfig::seed`, so two identical runs produce
//! bitwise-identical checkpoints and identical logs (up to wall-time).

use std::path::{Path, PathBuf};
use std::time::Instant;

use crate::checkpoint::save_checkpoint;
use crate::config::TrainConfig;
use crate::data::io::load_dataset;
use crate::data::synth::sample_seed;
use crate::data::FaceSample;
use crate::error::{Error, Result};
use crate::layers::apply_bn_updates;
use crate::loss::{total_loss, FeatureExtractor, RegionMasks};
use crate::model::WNet;
use crate::optim::Adam;
use crate::params::{seeded_rng, ParamStore};
use crate::tensor::{Shape, Tensor};

/// Seed-stream tags so init, extractor, and batch order never collide.
const STREAM_EXTRACTOR: u64 = 1;
const STREAM_BATCHES: u64 = 2;

pub const LOG_HEADER: &str = "step,total,mse,parmse,eye,eyebrow,nose,mouth,ms";
pub const FINAL_CHECKPOINT: &str = "final.ckpt";
pub const LOG_FILE: &str = "train_log.csv";

/// One row of the training log. Component losses are stored unweighted;
/// `total` applies the lambda weights.
#[derive(Clone, Copy, Debug)]
pub struct StepRecord {
    pub step: usize,
    pub total: f64,
    pub mse: f64,
    pub parmse: f64,
    pub eye: f64,
    pub eyebrow: f64,
    pub nose: f64,
    pub mouth: f64,
    /// Wall-clock duration of the step in milliseconds.
    pub ms: u128,
}

#[derive(Clone, Debug, Default)]
pub struct TrainLog {
    pub records: Vec<StepRecord>,
}

impl TrainLog {
    pub fn to_csv(&self) -> String {
        let mut out = String::from(LOG_HEADER);
        out.push('\n');
        for r in &self.records {
            out.push_str(&format!(
                "{},{},{},{},{},{},{},{},{}\n",
                r.step, r.total, r.mse, r.parmse, r.eye, r.eyebrow, r.nose, r.mouth, r.ms
            ));
        }
        out
    }

    pub fn write_csv(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_csv()).map_err(|e| Error::io(path, e))
    }
}

/// Where a finished run left its artifacts.
#[derive(Clone, Debug)]
pub struct TrainOutcome {
    pub log: TrainLog,
    pub checkpoint_path: PathBuf,
    pub log_path: PathBuf,
}

/// Deterministic sampler: reshuffles the index set every epoch and hands
/// out consecutive batches, carrying remainders across epoch boundaries.
struct BatchSampler {
    n: usize,
    rng: rand_chacha::ChaCha20Rng,
    queue: Vec<usize>,
}

impl BatchSampler {
    fn new(n: usize, seed: u64) -> Self {
        BatchSampler { n, rng: seeded_rng(seed), queue: Vec::new() }
    }

    fn next_batch(&mut self, size: usize) -> Vec<usize> {
        use rand::seq::SliceRandom;
        let mut out = Vec::with_capacity(size);
        while out.len() < size {
            if self.queue.is_empty() {
                let mut epoch: Vec<usize> = (0..self.n).collect();
                epoch.shuffle(&mut self.rng);
                // Pop from the back, so reverse to keep epoch order.
                epoch.reverse();
                self.queue = epoch;
            }
            out.push(self.queue.pop().expect("refilled above"));
        }
        out
    }
}

/// A training batch stacked along N, plus everything the loss needs.
pub struct Batch {
    pub lr: Tensor<f32>,
    pub hr: Tensor<f32>,
    pub parsing_gt: Tensor<f32>,
    pub masks: RegionMasks<f32>,
}

fn stack<'a>(parts: impl Iterator<Item = &'a Tensor<f32>> + Clone) -> Result<Tensor<f32>> {
    let first = parts.clone().next().ok_or_else(|| Error::invalid("stack_batch", "empty batch"))?;
    let s = first.shape();
    let n: usize = parts.clone().map(|t| t.shape().n).sum();
    let mut data = Vec::with_capacity(n * s.c * s.h * s.w);
    for t in parts {
        let ts = t.shape();
        if (ts.c, ts.h, ts.w) != (s.c, s.h, s.w) {
            return Err(Error::shape("stack_batch", format!("mixed shapes {ts} vs {s}")));
        }
        data.extend_from_slice(t.data());
    }
    Tensor::from_vec(Shape::new(n, s.c, s.h, s.w), data)
}

/// Stack the selected samples into one batch (row-major NCHW, so batching
/// is pure concatenation).
pub fn stack_batch(dataset: &[FaceSample], indices: &[usize]) -> Result<Batch> {
    let pick = |f: fn(&FaceSample) -> &Tensor<f32>| {
        stack(indices.iter().map(move |&i| f(&dataset[i])))
    };
    Ok(Batch {
        lr: pick(|s| &s.lr)?,
        hr: pick(|s| &s.hr)?,
        parsing_gt: pick(|s| &s.parsing_gt)?,
        masks: RegionMasks {
            eyes: pick(|s| &s.masks.eyes)?,
            eyebrows: pick(|s| &s.masks.eyebrows)?,
            nose: pick(|s| &s.masks.nose)?,
            mouth: pick(|s| &s.masks.mouth)?,
        },
    })
}

fn check_dataset(cfg: &TrainConfig, dataset: &[FaceSample]) -> Result<()> {
    let hr = Shape::new(1, 3, cfg.hr_size, cfg.hr_size);
    let lr = Shape::new(1, 3, cfg.hr_size / cfg.scale, cfg.hr_size / cfg.scale);
    for (i, s) in dataset.iter().enumerate() {
        if s.hr.shape() != hr || s.lr.shape() != lr {
            return Err(Error::Config(format!(
                "sample {i} is {} HR / {} LR but the config expects {hr} / {lr}",
                s.hr.shape(),
                s.lr.shape()
            )));
        }
    }
    Ok(())
}

/// Run the full loop described by `cfg`. Returns the log plus the paths of
/// the final checkpoint and CSV file (both under `cfg.out_dir`).
pub fn train(cfg: &TrainConfig) -> Result<TrainOutcome> {
    train_with(cfg, |_| {})
}

/// [`train`] with a per-step observer (progress printing, live plots).
/// The observer sees each record immediately after its optimizer update.
pub fn train_with(cfg: &TrainConfig, mut on_step: impl FnMut(&StepRecord)) -> Result<TrainOutcome> {
    cfg.validate()?;
    let dataset = load_dataset(&cfg.dataset_dir)?;
    check_dataset(cfg, &dataset)?;

    std::fs::create_dir_all(&cfg.out_dir).map_err(|e| Error::io(&cfg.out_dir, e))?;

    let mut store = ParamStore::<f32>::new();
    let net = WNet::new(&mut store, cfg.wnet())?;
    let ext = FeatureExtractor::new(&mut store, &mut seeded_rng(sample_seed(cfg.seed, STREAM_EXTRACTOR)))?;
    let mut adam = Adam::<f32>::new(cfg.adam());
    let mut sampler = BatchSampler::new(dataset.len(), sample_seed(cfg.seed, STREAM_BATCHES));
    let weights = cfg.weights();

    let mut log = TrainLog::default();
    for step in 1..=cfg.steps {
        let t0 = Instant::now();
        let indices = sampler.next_batch(cfg.batch_size);
        let batch = stack_batch(&dataset, &indices)?;

        // The pass borrows the store, so gradients and pending batch-norm
        // updates are extracted before the optimizer mutates it.
        let (values, grads, bn_updates) = {
            let mut fwd = net.forward(&store, &batch.lr, true, None)?;
            let loss = total_loss(
                &mut fwd.pass,
                &ext,
                fwd.sr,
                &batch.hr,
                fwd.parsing,
                &batch.parsing_gt,
                &batch.masks,
                &weights,
            )?;
            let scalar = |v| fwd.pass.g.value(v).data()[0] as f64;
            let values = [
                scalar(loss.total),
                scalar(loss.mse),
                scalar(loss.parmse),
                scalar(loss.eye),
                scalar(loss.eyebrow),
                scalar(loss.nose),
                scalar(loss.mouth),
            ];
            if !values[0].is_finite() {
                return Err(Error::NonFiniteLoss { step: step as u64 });
            }
            fwd.pass.g.backward_and_free(loss.total)?;
            let grads = fwd.pass.take_grads();
            (values, grads, std::mem::take(&mut fwd.pass.bn_updates))
        };

        adam.step(&mut store, &grads)?;
        apply_bn_updates(&mut store, bn_updates);

        log.records.push(StepRecord {
            step,
            total: values[0],
            mse: values[1],
            parmse: values[2],
            eye: values[3],
            eyebrow: values[4],
            nose: values[5],
            mouth: values[6],
            ms: t0.elapsed().as_millis(),
        });
        on_step(log.records.last().expect("record was just pushed"));

        if cfg.checkpoint_every > 0 && step % cfg.checkpoint_every == 0 && step != cfg.steps {
            let path = cfg.out_dir.join(format!("ckpt-{step:05}.ckpt"));
            save_checkpoint(&path, &store, Some(&adam))?;
        }
    }

    let checkpoint_path = cfg.out_dir.join(FINAL_CHECKPOINT);
    save_checkpoint(&checkpoint_path, &store, Some(&adam))?;
    let log_path = cfg.out_dir.join(LOG_FILE);
    log.write_csv(&log_path)?;
    Ok(TrainOutcome { log, checkpoint_path, log_path })
}
